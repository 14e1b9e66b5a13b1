//! Rephrasing of whole corpora, by note or by chunk, with named prompts.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::chunker::{reassemble, Chunk, Chunker};
use crate::corpus::{Corpus, Document, Lineage, Mode, Source, Split};
use crate::error::{Error, Result};
use crate::gateway::{Gateway, GenerationRequest, TokenBudget};
use crate::prompts::{self, PASSAGE_SEPARATOR, REPHRASE_SYSTEM};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptKind {
    HighQuality,
    RearrangedStructure,
    MinimalChanges,
    FormalClinical,
    SubstantialRevision,
    SimplerEnglish,
    Custom,
}

impl PromptKind {
    pub const NAMED: [PromptKind; 6] = [
        PromptKind::HighQuality,
        PromptKind::RearrangedStructure,
        PromptKind::MinimalChanges,
        PromptKind::FormalClinical,
        PromptKind::SubstantialRevision,
        PromptKind::SimplerEnglish,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            PromptKind::HighQuality => "high_quality",
            PromptKind::RearrangedStructure => "rearranged_structure",
            PromptKind::MinimalChanges => "minimal_changes",
            PromptKind::FormalClinical => "formal_clinical",
            PromptKind::SubstantialRevision => "substantial_revision",
            PromptKind::SimplerEnglish => "simpler_english",
            PromptKind::Custom => "custom",
        }
    }

    fn instruction(&self) -> Option<&'static str> {
        Some(match self {
            PromptKind::HighQuality => prompts::HIGH_QUALITY,
            PromptKind::RearrangedStructure => prompts::REARRANGED_STRUCTURE,
            PromptKind::MinimalChanges => prompts::MINIMAL_CHANGES,
            PromptKind::FormalClinical => prompts::FORMAL_CLINICAL,
            PromptKind::SubstantialRevision => prompts::SUBSTANTIAL_REVISION,
            PromptKind::SimplerEnglish => prompts::SIMPLER_ENGLISH,
            PromptKind::Custom => return None,
        })
    }
}

impl fmt::Display for PromptKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PromptKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PromptKind::NAMED
            .into_iter()
            .chain([PromptKind::Custom])
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown prompt `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub kind: PromptKind,
    /// Name recorded in lineage; equals `kind` for the built-in templates.
    pub name: String,
    pub system_prompt: String,
    pub instruction: String,
}

impl PromptTemplate {
    pub fn named(kind: PromptKind) -> Result<Self> {
        let instruction = kind
            .instruction()
            .ok_or_else(|| Error::InvalidInput("custom prompts need an instruction".into()))?;
        Ok(PromptTemplate {
            kind,
            name: kind.as_str().to_string(),
            system_prompt: REPHRASE_SYSTEM.to_string(),
            instruction: instruction.to_string(),
        })
    }

    pub fn high_quality() -> Self {
        Self::named(PromptKind::HighQuality).expect("built-in template")
    }

    pub fn custom(name: impl Into<String>, instruction: impl Into<String>) -> Result<Self> {
        let t = PromptTemplate {
            kind: PromptKind::Custom,
            name: name.into(),
            system_prompt: REPHRASE_SYSTEM.to_string(),
            instruction: instruction.into().trim().to_string(),
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if self.instruction.trim().is_empty() {
            return Err(Error::InvalidInput(format!("prompt `{}` has an empty instruction", self.name)));
        }
        if self.instruction.contains(PASSAGE_SEPARATOR) {
            return Err(Error::InvalidInput(format!(
                "prompt `{}` instruction must not contain a blank line",
                self.name
            )));
        }
        Ok(())
    }

    /// Resolves a prompt by name. `<dir>/<name>.txt` overrides (or, for
    /// unknown names, defines) the instruction; `<dir>/system.txt`
    /// overrides the system prompt.
    pub fn resolve(name: &str, prompt_dir: Option<&Path>) -> Result<Self> {
        let builtin = PromptKind::from_str(name).ok().filter(|k| *k != PromptKind::Custom);
        let mut template = match builtin {
            Some(kind) => Self::named(kind)?,
            None => PromptTemplate {
                kind: PromptKind::Custom,
                name: name.to_string(),
                system_prompt: REPHRASE_SYSTEM.to_string(),
                instruction: String::new(),
            },
        };
        if let Some(dir) = prompt_dir {
            let file = dir.join(format!("{name}.txt"));
            if file.exists() {
                template.instruction = std::fs::read_to_string(&file)
                    .map_err(|e| Error::io(&file, e))?
                    .trim()
                    .to_string();
            }
            let system = dir.join("system.txt");
            if system.exists() {
                template.system_prompt = std::fs::read_to_string(&system)
                    .map_err(|e| Error::io(&system, e))?
                    .trim()
                    .to_string();
            }
        }
        if template.kind == PromptKind::Custom && template.instruction.is_empty() {
            return Err(Error::Config(format!(
                "unknown prompt `{name}` (no built-in template and no {name}.txt in the prompt directory)"
            )));
        }
        template.validate()?;
        Ok(template)
    }

    pub fn request(&self, passage: &str, max_tokens: u32) -> GenerationRequest {
        GenerationRequest::new(
            self.system_prompt.clone(),
            prompts::rephrase_prompt(&self.instruction, passage),
            max_tokens,
        )
    }
}

/// Removes a chat preface line ("Sure, ...", "Here is ...:") and wrapping
/// quotes from a model reply.
pub fn clean_output(text: &str) -> String {
    let mut body = text;
    let mut changed = false;
    let trimmed = text.trim_start();
    let (first, rest) = match trimmed.split_once('\n') {
        Some((f, r)) => (f.trim(), Some(r)),
        None => (trimmed.trim(), None),
    };
    let lower = first.to_lowercase();
    let preface = lower.starts_with("sure")
        || lower.starts_with("certainly")
        || ((lower.starts_with("here is") || lower.starts_with("here's")) && first.ends_with(':'))
        || ((lower.starts_with("paraphrase") || lower.starts_with("rephrased")) && first.ends_with(':'));
    if preface {
        if let Some(rest) = rest {
            body = rest;
            changed = true;
        }
    }
    let t = body.trim();
    if t.len() >= 2 && t.starts_with('"') && t.ends_with('"') && !t[1..t.len() - 1].contains('"') {
        return t[1..t.len() - 1].trim().to_string();
    }
    if changed {
        t.to_string()
    } else {
        body.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RephraseFailure {
    pub doc_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RephraseRun {
    pub mode: Mode,
    pub prompt: String,
    pub backend_tag: String,
    pub round: u32,
    pub documents_in: usize,
    pub documents_out: usize,
    pub failures: Vec<RephraseFailure>,
    /// Documents with at least one generation that hit its token budget.
    pub truncated: Vec<String>,
}

/// Settings shared by every document in a run.
#[derive(Debug, Clone)]
pub struct Rephraser {
    pub gateway: Gateway,
    pub prompt: PromptTemplate,
    pub mode: Mode,
    pub chunker: Chunker,
    pub budget: TokenBudget,
}

pub fn synthetic_id(origin: &str, mode: Mode, prompt: &str, round: u32) -> String {
    format!("{origin}::{mode}:{prompt}:r{round}")
}

struct Plan {
    chunks: Option<Vec<Chunk>>,
    requests: usize,
}

impl Rephraser {
    pub fn new(gateway: Gateway, prompt: PromptTemplate, mode: Mode) -> Self {
        Rephraser {
            gateway,
            prompt,
            mode,
            chunker: Chunker::default(),
            budget: TokenBudget::default(),
        }
    }

    fn plan(&self, doc: &Document, out: &mut Vec<GenerationRequest>) -> Plan {
        match self.mode {
            Mode::ByNote => {
                let budget = self.budget.max_tokens(doc.word_count(), Mode::ByNote);
                out.push(self.prompt.request(&doc.text, budget));
                Plan {
                    chunks: None,
                    requests: 1,
                }
            }
            Mode::ByChunk => {
                let chunks = self.chunker.chunk_document(&doc.id, &doc.text);
                for c in &chunks {
                    let budget = self.budget.max_tokens(c.word_count, Mode::ByChunk);
                    out.push(self.prompt.request(&c.text, budget));
                }
                Plan {
                    requests: chunks.len(),
                    chunks: Some(chunks),
                }
            }
        }
    }

    fn synthesize(&self, origin: &Document, text: String) -> Document {
        let (origin_id, round) = match &origin.lineage {
            Some(l) => (l.origin_id.clone(), l.round + 1),
            None => (origin.id.clone(), 1),
        };
        Document {
            id: synthetic_id(&origin_id, self.mode, &self.prompt.name, round),
            text,
            note_type: origin.note_type.clone(),
            source: Source::Synthetic,
            split: origin.split,
            labels: origin.labels.clone(),
            subgroups: origin.subgroups.clone(),
            lineage: Some(Lineage {
                origin_id,
                round,
                mode: self.mode,
                prompt_name: self.prompt.name.clone(),
                backend_tag: self.gateway.tag(),
            }),
            extra: BTreeMap::new(),
        }
    }

    /// Rephrases one document; a failed chunk fails the whole document.
    pub fn rephrase_document(&self, doc: &Document) -> Result<Document> {
        let single = Corpus {
            documents: vec![doc.clone()],
            metadata: BTreeMap::new(),
        };
        let (mut out, run) = self.rephrase_corpus(&single);
        match run.failures.into_iter().next() {
            Some(f) => Err(Error::Backend(f.reason)),
            None => Ok(out.documents.remove(0)),
        }
    }

    /// Rephrases every document through one bounded batch; failed documents
    /// are listed in the run record and left out of the output corpus.
    pub fn rephrase_corpus(&self, corpus: &Corpus) -> (Corpus, RephraseRun) {
        let mut requests = Vec::new();
        let mut plans = Vec::with_capacity(corpus.len());
        let mut failures = Vec::new();
        for doc in &corpus.documents {
            if doc.text.trim().is_empty() {
                failures.push(RephraseFailure {
                    doc_id: doc.id.clone(),
                    reason: "empty text".into(),
                });
                plans.push(None);
                continue;
            }
            plans.push(Some(self.plan(doc, &mut requests)));
        }
        let batch = self.gateway.generate_batch(&requests);
        let mut outcomes = batch.outcomes.into_iter();
        let mut documents = Vec::new();
        let mut truncated = Vec::new();
        let mut max_round = 0;
        for (doc, plan) in corpus.documents.iter().zip(plans) {
            let Some(plan) = plan else { continue };
            let results: Vec<_> = outcomes.by_ref().take(plan.requests).collect();
            let mut texts = Vec::with_capacity(results.len());
            let mut failure = None;
            let mut was_truncated = false;
            for r in results {
                match r {
                    Ok(g) => {
                        was_truncated |= g.truncated;
                        texts.push(clean_output(&g.text));
                    }
                    Err(e) => {
                        failure.get_or_insert_with(|| e.to_string());
                    }
                }
            }
            if let Some(reason) = failure {
                failures.push(RephraseFailure {
                    doc_id: doc.id.clone(),
                    reason,
                });
                continue;
            }
            let text = match plan.chunks {
                None => texts.pop().unwrap_or_default(),
                Some(chunks) => {
                    let pairs: Vec<_> = chunks.into_iter().zip(texts).collect();
                    match reassemble(&pairs) {
                        Ok(t) => t,
                        Err(e) => {
                            failures.push(RephraseFailure {
                                doc_id: doc.id.clone(),
                                reason: e.to_string(),
                            });
                            continue;
                        }
                    }
                }
            };
            if was_truncated {
                truncated.push(doc.id.clone());
            }
            let syn = self.synthesize(doc, text);
            max_round = max_round.max(syn.lineage.as_ref().map_or(1, |l| l.round));
            documents.push(syn);
        }
        let run = RephraseRun {
            mode: self.mode,
            prompt: self.prompt.name.clone(),
            backend_tag: self.gateway.tag(),
            round: max_round.max(corpus_round(corpus) + 1),
            documents_in: corpus.len(),
            documents_out: documents.len(),
            failures,
            truncated,
        };
        let mut out = Corpus {
            documents,
            metadata: BTreeMap::new(),
        };
        out.metadata.insert("mode".into(), self.mode.to_string());
        out.metadata.insert("prompt".into(), self.prompt.name.clone());
        out.metadata.insert("backend".into(), run.backend_tag.clone());
        out.metadata.insert("round".into(), run.round.to_string());
        (out, run)
    }

    /// Repeated synthesis: round k rephrases the output of round k-1.
    pub fn iterate(&self, corpus: &Corpus, rounds: u32) -> Result<Vec<(Corpus, RephraseRun)>> {
        if rounds == 0 {
            return Err(Error::InvalidInput("rounds must be >= 1".into()));
        }
        let mut out = Vec::with_capacity(rounds as usize);
        let mut current = corpus.clone();
        for _ in 0..rounds {
            let (next, run) = self.rephrase_corpus(&current);
            out.push((next.clone(), run));
            current = next;
        }
        Ok(out)
    }
}

fn corpus_round(corpus: &Corpus) -> u32 {
    corpus
        .documents
        .iter()
        .filter_map(|d| d.lineage.as_ref().map(|l| l.round))
        .max()
        .unwrap_or(0)
}

pub const AUGMENT_SUFFIX: &str = "::aug";

/// Real corpus plus synthetic counterparts of real training documents.
///
/// Synthetic documents join the train split with their origin's labels and
/// subgroups; val/test stay real-only.
pub fn build_augmented_train(real: &Corpus, synthetic: &Corpus) -> Result<Corpus> {
    let index: HashMap<&str, &Document> = real.index();
    let mut documents = real.documents.clone();
    for syn in &synthetic.documents {
        let origin_id = syn.origin_id();
        let origin = index.get(origin_id).ok_or_else(|| Error::DanglingOrigin {
            id: syn.id.clone(),
            origin: origin_id.to_string(),
        })?;
        if origin.split != Split::Train {
            return Err(Error::Leakage {
                id: syn.id.clone(),
                origin: origin_id.to_string(),
                split: origin.split.to_string(),
            });
        }
        let mut doc = syn.clone();
        doc.id = format!("{}{AUGMENT_SUFFIX}", syn.id);
        doc.split = Split::Train;
        doc.labels = origin.labels.clone();
        doc.subgroups = origin.subgroups.clone();
        documents.push(doc);
    }
    let mut out = Corpus::new(documents)?;
    out.metadata = real.metadata.clone();
    out.metadata.insert("augmented_with".into(), synthetic.len().to_string());
    Ok(out)
}
