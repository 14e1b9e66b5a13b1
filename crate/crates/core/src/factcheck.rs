//! Atomic-fact decomposition and entailment-based fact precision and recall.
//!
//! Precision asks, for each fact decomposed from the synthetic note, whether
//! the full human note entails it. Recall asks, for each fact decomposed from
//! the human note, whether the synthetic facts (joined by newlines) entail it.
//! Per-note scores are macro-averaged and F1 is taken from the two macros.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::corpus::{Document, Mode};
use crate::error::{Error, Result};
use crate::gateway::{Gateway, GenerationRequest, TokenBudget};
use crate::prompts::{decomposition_prompt, entailment_prompt};
use crate::score::{harmonic, mean};

pub const FACT_DELIMITER: &str = "//";
pub const DEFAULT_JUDGE_MAX_TOKENS: u32 = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Synthetic,
    Human,
}

impl fmt::Display for Side {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Side::Synthetic => "synthetic",
            Side::Human => "human",
        })
    }
}

impl FromStr for Side {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "synthetic" => Ok(Side::Synthetic),
            "human" => Ok(Side::Human),
            _ => Err(Error::InvalidInput(format!("unknown fact side {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AtomicFact {
    pub doc_id: String,
    pub index: usize,
    pub text: String,
    pub side: Side,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PremiseKind {
    HumanNote,
    SyntheticFactSet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntailmentVerdict {
    pub fact: AtomicFact,
    pub premise_kind: PremiseKind,
    pub verdict: u8,
    pub raw_judge_output: String,
}

/// A (premise, fact) pair left out of scoring.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExcludedPair {
    pub fact: AtomicFact,
    pub premise_kind: PremiseKind,
    pub error: String,
    pub raw_judge_outputs: Vec<String>,
}

/// Splits a decomposition reply on `//`, trimming and dropping empty pieces.
pub fn split_facts(reply: &str) -> Vec<String> {
    reply
        .split(FACT_DELIMITER)
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .collect()
}

fn verdict_value(v: &serde_json::Value) -> Option<u8> {
    match v {
        serde_json::Value::Number(n) => match n.as_f64() {
            Some(x) if x == 0.0 => Some(0),
            Some(x) if x == 1.0 => Some(1),
            _ => None,
        },
        serde_json::Value::Bool(b) => Some(u8::from(*b)),
        serde_json::Value::String(s) => match s.trim() {
            "0" => Some(0),
            "1" => Some(1),
            _ => None,
        },
        _ => None,
    }
}

/// Reads `entailment_prediction` from the first JSON object in `reply`.
/// Bare `0`/`1` replies and single-quoted keys are accepted as well.
pub fn parse_verdict(reply: &str) -> Result<u8> {
    let trimmed = reply.trim();
    match trimmed {
        "0" => return Ok(0),
        "1" => return Ok(1),
        _ => {}
    }
    for (i, _) in trimmed.match_indices('{') {
        let mut stream = serde_json::Deserializer::from_str(&trimmed[i..]).into_iter::<serde_json::Value>();
        if let Some(Ok(value)) = stream.next() {
            if value.is_object() {
                return value
                    .get("entailment_prediction")
                    .and_then(verdict_value)
                    .ok_or_else(|| Error::JudgeParse(format!("no 0/1 entailment_prediction in {value}")));
            }
        }
    }
    static LOOSE: std::sync::OnceLock<Regex> = std::sync::OnceLock::new();
    let loose = LOOSE.get_or_init(|| {
        Regex::new(r#"\{[^{}]*?['"]entailment_prediction['"]\s*:\s*['"]?([01])\b"#).expect("valid regex")
    });
    if let Some(c) = loose.captures(trimmed) {
        return Ok(if &c[1] == "1" { 1 } else { 0 });
    }
    Err(Error::JudgeParse(format!("unparseable judge reply {trimmed:?}")))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCategory {
    NoError,
    Misinterpretation,
    FabricatedClaim,
    MeasurementNumeracy,
    TemporalRecency,
}

impl ErrorCategory {
    pub const ALL: [ErrorCategory; 5] = [
        ErrorCategory::NoError,
        ErrorCategory::Misinterpretation,
        ErrorCategory::FabricatedClaim,
        ErrorCategory::MeasurementNumeracy,
        ErrorCategory::TemporalRecency,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ErrorCategory::NoError => "no_error",
            ErrorCategory::Misinterpretation => "misinterpretation",
            ErrorCategory::FabricatedClaim => "fabricated_claim",
            ErrorCategory::MeasurementNumeracy => "measurement_numeracy",
            ErrorCategory::TemporalRecency => "temporal_recency",
        }
    }
}

impl FromStr for ErrorCategory {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        ErrorCategory::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown error category {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorAnnotation {
    pub category: ErrorCategory,
    pub comment: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub fact: AtomicFact,
    pub category: ErrorCategory,
    pub comment: String,
    /// Earlier annotations of the same fact, oldest first.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub history: Vec<PriorAnnotation>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoteScore {
    pub human_id: String,
    pub synthetic_id: String,
    pub synthetic_facts: usize,
    pub human_facts: usize,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    pub excluded_pairs: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactMetadata {
    pub judge: String,
    pub decomposer: String,
    pub precision_premise: String,
    pub recall_premise: String,
    pub reask_on_parse_failure: u32,
    pub averaging: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactReport {
    pub metadata: FactMetadata,
    pub notes: Vec<NoteScore>,
    pub macro_precision: Option<f64>,
    pub macro_recall: Option<f64>,
    /// Harmonic mean of the two macro averages.
    pub f1: Option<f64>,
    pub mean_synthetic_facts: Option<f64>,
    pub mean_human_facts: Option<f64>,
    pub excluded_pairs: usize,
    pub failed_notes: usize,
    pub annotations: Vec<Annotation>,
}

impl FactReport {
    /// Aggregates per-note scores. Notes without a precision (or recall)
    /// are left out of that macro average.
    pub fn from_notes(metadata: FactMetadata, notes: Vec<NoteScore>) -> Self {
        let ps: Vec<f64> = notes.iter().filter_map(|n| n.precision).collect();
        let rs: Vec<f64> = notes.iter().filter_map(|n| n.recall).collect();
        let ok: Vec<&NoteScore> = notes.iter().filter(|n| n.error.is_none()).collect();
        let macro_precision = mean(&ps);
        let macro_recall = mean(&rs);
        FactReport {
            metadata,
            macro_precision,
            macro_recall,
            f1: macro_precision.zip(macro_recall).map(|(p, r)| harmonic(p, r)),
            mean_synthetic_facts: mean(&ok.iter().map(|n| n.synthetic_facts as f64).collect::<Vec<_>>()),
            mean_human_facts: mean(&ok.iter().map(|n| n.human_facts as f64).collect::<Vec<_>>()),
            excluded_pairs: notes.iter().map(|n| n.excluded_pairs).sum(),
            failed_notes: notes.len() - ok.len(),
            notes,
            annotations: Vec::new(),
        }
    }
}

/// Everything produced by one scoring run.
#[derive(Debug, Clone, PartialEq)]
pub struct FactRun {
    pub report: FactReport,
    pub facts: Vec<AtomicFact>,
    pub verdicts: Vec<EntailmentVerdict>,
    pub excluded: Vec<ExcludedPair>,
}

pub struct FactChecker {
    pub decomposer: Gateway,
    pub judge: Gateway,
    pub judge_max_tokens: u32,
    pub budget: TokenBudget,
}

struct JudgeTask {
    pair: usize,
    fact: AtomicFact,
    premise_kind: PremiseKind,
    prompt: String,
}

impl FactChecker {
    pub fn new(decomposer: Gateway, judge: Gateway) -> Self {
        FactChecker {
            decomposer,
            judge,
            judge_max_tokens: DEFAULT_JUDGE_MAX_TOKENS,
            budget: TokenBudget::default(),
        }
    }

    fn decomposition_request(&self, text: &str) -> GenerationRequest {
        let words = text.split_whitespace().count();
        GenerationRequest::new("", decomposition_prompt(text), self.budget.max_tokens(words, Mode::ByNote))
    }

    fn judge_request(&self, prompt: &str) -> GenerationRequest {
        GenerationRequest::new("", prompt, self.judge_max_tokens)
    }

    pub fn decompose(&self, doc_id: &str, side: Side, text: &str) -> Result<Vec<AtomicFact>> {
        let out = self.decomposer.generate(&self.decomposition_request(text))?;
        Ok(to_facts(doc_id, side, &out.text, out.truncated))
    }

    /// One verdict, re-asking once if the first reply cannot be parsed.
    pub fn judge_entailment(&self, premise: &str, hypothesis: &str) -> Result<u8> {
        let req = self.judge_request(&entailment_prompt(premise, hypothesis));
        let first = self.judge.generate(&req)?;
        match parse_verdict(&first.text) {
            Ok(v) => Ok(v),
            Err(_) => parse_verdict(&self.judge.generate(&req)?.text),
        }
    }

    /// Judges every task, re-asking parse failures once in a second batch.
    fn run_judgements(&self, tasks: &[JudgeTask]) -> Vec<std::result::Result<(u8, String), (String, Vec<String>)>> {
        let requests: Vec<_> = tasks.iter().map(|t| self.judge_request(&t.prompt)).collect();
        let first = self.judge.generate_batch(&requests).outcomes;
        let mut results: Vec<_> = Vec::with_capacity(tasks.len());
        let mut reask = Vec::new();
        for (i, outcome) in first.into_iter().enumerate() {
            match outcome {
                Ok(g) => match parse_verdict(&g.text) {
                    Ok(v) => results.push(Ok((v, g.text))),
                    Err(_) => {
                        reask.push(i);
                        results.push(Err((String::new(), vec![g.text])));
                    }
                },
                Err(e) => results.push(Err((e.to_string(), vec![]))),
            }
        }
        if !reask.is_empty() {
            let again: Vec<_> = reask.iter().map(|&i| requests[i].clone()).collect();
            for (&i, outcome) in reask.iter().zip(self.judge.generate_batch(&again).outcomes) {
                let Err((_, raws)) = &mut results[i] else { unreachable!() };
                let mut raws = std::mem::take(raws);
                results[i] = match outcome {
                    Ok(g) => match parse_verdict(&g.text) {
                        Ok(v) => Ok((v, g.text)),
                        Err(e) => {
                            raws.push(g.text);
                            Err((e.to_string(), raws))
                        }
                    },
                    Err(e) => Err((e.to_string(), raws)),
                };
            }
        }
        results
    }

    /// Scores `(human, synthetic)` pairs. Failures are recorded per note or
    /// per judged pair; the run itself does not abort.
    pub fn score_corpus(&self, pairs: &[(&Document, &Document)]) -> FactRun {
        let mut requests = Vec::with_capacity(pairs.len() * 2);
        for (h, s) in pairs {
            requests.push(self.decomposition_request(&s.text));
            requests.push(self.decomposition_request(&h.text));
        }
        let mut decomposed = self.decomposer.generate_batch(&requests).outcomes.into_iter();

        let mut notes: Vec<NoteScore> = Vec::with_capacity(pairs.len());
        let mut facts = Vec::new();
        let mut tasks = Vec::new();
        for (pair, (h, s)) in pairs.iter().enumerate() {
            let syn = decomposed.next().expect("two outcomes per pair");
            let hum = decomposed.next().expect("two outcomes per pair");
            let mut note = NoteScore {
                human_id: h.id.clone(),
                synthetic_id: s.id.clone(),
                synthetic_facts: 0,
                human_facts: 0,
                precision: None,
                recall: None,
                f1: None,
                excluded_pairs: 0,
                error: None,
            };
            let (syn, hum) = match (syn, hum) {
                (Ok(a), Ok(b)) => (
                    to_facts(&s.id, Side::Synthetic, &a.text, a.truncated),
                    to_facts(&h.id, Side::Human, &b.text, b.truncated),
                ),
                (Err(e), _) | (_, Err(e)) => {
                    log::warn!("decomposition failed for pair {} / {}: {e}", h.id, s.id);
                    note.error = Some(format!("decomposition failed: {e}"));
                    notes.push(note);
                    continue;
                }
            };
            note.synthetic_facts = syn.len();
            note.human_facts = hum.len();
            for c in &syn {
                tasks.push(JudgeTask {
                    pair,
                    fact: c.clone(),
                    premise_kind: PremiseKind::HumanNote,
                    prompt: entailment_prompt(&h.text, &c.text),
                });
            }
            let premise = syn.iter().map(|c| c.text.as_str()).collect::<Vec<_>>().join("\n");
            for c in &hum {
                tasks.push(JudgeTask {
                    pair,
                    fact: c.clone(),
                    premise_kind: PremiseKind::SyntheticFactSet,
                    prompt: entailment_prompt(&premise, &c.text),
                });
            }
            facts.extend(syn);
            facts.extend(hum);
            notes.push(note);
        }

        let results = self.run_judgements(&tasks);
        let mut tallies: BTreeMap<(usize, PremiseKind), (usize, usize)> = BTreeMap::new();
        let mut verdicts = Vec::new();
        let mut excluded = Vec::new();
        for (task, result) in tasks.into_iter().zip(results) {
            match result {
                Ok((verdict, raw)) => {
                    let t = tallies.entry((task.pair, task.premise_kind)).or_default();
                    t.0 += verdict as usize;
                    t.1 += 1;
                    verdicts.push(EntailmentVerdict {
                        fact: task.fact,
                        premise_kind: task.premise_kind,
                        verdict,
                        raw_judge_output: raw,
                    });
                }
                Err((error, raws)) => {
                    notes[task.pair].excluded_pairs += 1;
                    excluded.push(ExcludedPair {
                        fact: task.fact,
                        premise_kind: task.premise_kind,
                        error,
                        raw_judge_outputs: raws,
                    });
                }
            }
        }
        for (pair, note) in notes.iter_mut().enumerate() {
            if note.error.is_some() {
                continue;
            }
            let frac = |kind| {
                tallies
                    .get(&(pair, kind))
                    .filter(|(_, n)| *n > 0)
                    .map(|&(k, n)| k as f64 / n as f64)
            };
            note.precision = frac(PremiseKind::HumanNote);
            note.recall = frac(PremiseKind::SyntheticFactSet);
            note.f1 = note.precision.zip(note.recall).map(|(p, r)| harmonic(p, r));
        }
        let metadata = FactMetadata {
            judge: self.judge.tag(),
            decomposer: self.decomposer.tag(),
            precision_premise: "full human note".into(),
            recall_premise: "synthetic facts joined by newlines".into(),
            reask_on_parse_failure: 1,
            averaging: "macro over notes; F1 from macro precision and recall".into(),
        };
        FactRun {
            report: FactReport::from_notes(metadata, notes),
            facts,
            verdicts,
            excluded,
        }
    }
}

fn to_facts(doc_id: &str, side: Side, reply: &str, truncated: bool) -> Vec<AtomicFact> {
    if truncated {
        log::warn!("decomposition of {doc_id} ({side}) hit the token limit");
    }
    let texts = split_facts(reply);
    if texts.is_empty() {
        log::warn!("decomposition of {doc_id} ({side}) produced no facts");
    }
    texts
        .into_iter()
        .enumerate()
        .map(|(index, text)| AtomicFact {
            doc_id: doc_id.to_string(),
            index,
            text,
            side,
        })
        .collect()
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Serialize, Deserialize)]
struct AnnotationRow {
    doc_id: String,
    side: String,
    index: usize,
    fact: String,
    category: String,
    comment: String,
}

impl FactRun {
    /// Records an annotation for an existing fact. Re-annotating a fact
    /// replaces the category and comment and keeps the previous ones.
    pub fn annotate(&mut self, doc_id: &str, side: Side, index: usize, category: &str, comment: &str) -> Result<()> {
        let category: ErrorCategory = category.parse()?;
        let fact = self
            .facts
            .iter()
            .find(|f| f.doc_id == doc_id && f.side == side && f.index == index)
            .ok_or_else(|| Error::InvalidInput(format!("no {side} fact {index} for document {doc_id}")))?
            .clone();
        let anns = &mut self.report.annotations;
        match anns.iter_mut().find(|a| a.fact == fact) {
            Some(a) => {
                a.history.push(PriorAnnotation {
                    category: a.category,
                    comment: std::mem::take(&mut a.comment),
                });
                a.category = category;
                a.comment = comment.to_string();
            }
            None => anns.push(Annotation {
                fact,
                category,
                comment: comment.to_string(),
                history: Vec::new(),
            }),
        }
        Ok(())
    }

    pub fn export_annotations(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
        for a in &self.report.annotations {
            w.serialize(AnnotationRow {
                doc_id: a.fact.doc_id.clone(),
                side: a.fact.side.to_string(),
                index: a.fact.index,
                fact: a.fact.text.clone(),
                category: a.category.as_str().to_string(),
                comment: a.comment.clone(),
            })
            .map_err(|e| Error::csv(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Applies annotations from a CSV with columns
    /// `doc_id, side, index, fact, category, comment`; returns the row count.
    pub fn import_annotations(&mut self, path: &Path) -> Result<usize> {
        let mut r = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
        let mut n = 0;
        for row in r.deserialize::<AnnotationRow>() {
            let row = row.map_err(|e| Error::csv(path, e))?;
            self.annotate(&row.doc_id, row.side.parse()?, row.index, &row.category, &row.comment)?;
            n += 1;
        }
        Ok(n)
    }

    /// Writes facts.jsonl, verdicts.jsonl, excluded.jsonl and report.json.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_jsonl(&dir.join("facts.jsonl"), &self.facts)?;
        write_jsonl(&dir.join("verdicts.jsonl"), &self.verdicts)?;
        write_jsonl(&dir.join("excluded.jsonl"), &self.excluded)?;
        let path = dir.join("report.json");
        let text = serde_json::to_string_pretty(&self.report)?;
        std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{Reply, Rule, ScriptEntry, ScriptKey, ScriptedBackend};
    use crate::prompts::parse_entailment_prompt;
    use std::sync::Arc;

    fn gw(b: ScriptedBackend) -> Gateway {
        Gateway::new(Arc::new(b))
    }

    fn lexical() -> Gateway {
        gw(ScriptedBackend::new(vec![], Some(Rule::Lexical)))
    }

    fn doc(id: &str, text: &str) -> Document {
        Document::human(id, text)
    }

    #[test]
    fn splits_facts() {
        assert_eq!(split_facts("A. // B. // C."), ["A.", "B.", "C."]);
        assert_eq!(split_facts("A. // B. //"), ["A.", "B."]);
        assert_eq!(
            split_facts("There is a consolidation. // The consolidation is dense."),
            ["There is a consolidation.", "The consolidation is dense."]
        );
        assert!(split_facts("  ").is_empty());
    }

    #[test]
    fn parses_verdicts() {
        assert_eq!(parse_verdict(r#"{"entailment_prediction": 1}"#).unwrap(), 1);
        assert_eq!(parse_verdict("0").unwrap(), 0);
        assert_eq!(parse_verdict(" 1\n").unwrap(), 1);
        assert_eq!(
            parse_verdict("Reasoning first. {\"entailment_prediction\": 0} trailing {\"x\": 1}").unwrap(),
            0
        );
        assert_eq!(parse_verdict("```json\n{\"entailment_prediction\": \"1\"}\n```").unwrap(), 1);
        assert_eq!(parse_verdict("{'entailment_prediction': 1}").unwrap(), 1);
        assert!(parse_verdict("maybe").is_err());
        assert!(parse_verdict(r#"{"entailment_prediction": 2}"#).is_err());
        assert!(parse_verdict(r#"{"verdict": 1}"#).is_err());
    }

    #[test]
    fn reask_once_then_error() {
        let b = ScriptedBackend::sequence(["maybe", "{\"entailment_prediction\": 1}"]);
        let fc = FactChecker::new(lexical(), gw(b));
        assert_eq!(fc.judge_entailment("p", "h").unwrap(), 1);

        let b = ScriptedBackend::sequence(["maybe", "maybe"]);
        let fc = FactChecker::new(lexical(), gw(b));
        assert!(matches!(fc.judge_entailment("p", "h"), Err(Error::JudgeParse(_))));
    }

    /// Judge answering from fixed per-hypothesis verdicts.
    fn verdict_judge(verdicts: Vec<(&'static str, &'static str)>) -> Gateway {
        gw(ScriptedBackend::from_fn(move |req| {
            let (_, hyp) = parse_entailment_prompt(&req.user_prompt).expect("entailment prompt");
            verdicts
                .iter()
                .find(|(h, _)| *h == hyp)
                .map(|(_, v)| v.to_string())
                .ok_or_else(|| Error::Backend(format!("no verdict for {hyp}")))
        }))
    }

    #[test]
    fn eight_of_ten() {
        let syn_text = (0..10).map(|i| format!("Fact {i}.")).collect::<Vec<_>>().join(" ");
        let human = doc("h", "Fact 0. Fact 1.");
        let synthetic = doc("s", &syn_text);
        let mut table: Vec<(&'static str, &'static str)> = Vec::new();
        for i in 0..10 {
            let h: &'static str = Box::leak(format!("Fact {i}.").into_boxed_str());
            table.push((h, if i < 8 { "1" } else { "{\"entailment_prediction\": 0}" }));
        }
        let fc = FactChecker::new(lexical(), verdict_judge(table));
        let run = fc.score_corpus(&[(&human, &synthetic)]);
        let n = &run.report.notes[0];
        assert_eq!(n.synthetic_facts, 10);
        assert_eq!(n.precision, Some(0.8));
        assert_eq!(n.recall, Some(1.0));
        assert_eq!(format!("{:.6}", run.report.macro_precision.unwrap()), "0.800000");
    }

    #[test]
    fn macro_and_f1_from_macros() {
        let h1 = doc("h1", "A one. B two.");
        let s1 = doc("s1", "A one. B two.");
        let h2 = doc("h2", "C three. D four.");
        let s2 = doc("s2", "C three. Z nine.");
        let fc = FactChecker::new(lexical(), lexical());
        let run = fc.score_corpus(&[(&h1, &s1), (&h2, &s2)]);
        let r = &run.report;
        assert_eq!(r.notes[0].precision, Some(1.0));
        assert_eq!(r.notes[1].precision, Some(0.5));
        assert_eq!(r.macro_precision, Some(0.75));
        assert_eq!(r.macro_recall, Some(0.75));
        assert_eq!(r.f1, Some(0.75));
        assert_eq!(r.mean_synthetic_facts, Some(2.0));
        assert_eq!(run.verdicts.len(), 8);
    }

    #[test]
    fn f1_is_not_mean_of_note_f1() {
        // note 1: P=1, R=0.5; note 2: P=0.5, R=1 -> macros 0.75/0.75
        let h1 = doc("h1", "A one. B two.");
        let s1 = doc("s1", "A one.");
        let h2 = doc("h2", "C three.");
        let s2 = doc("s2", "C three. Z nine.");
        let run = FactChecker::new(lexical(), lexical()).score_corpus(&[(&h1, &s1), (&h2, &s2)]);
        assert_eq!(run.report.f1, Some(0.75));
        let per_note: f64 = run.report.notes.iter().map(|n| n.f1.unwrap()).sum::<f64>() / 2.0;
        assert!((per_note - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn unparseable_pairs_are_excluded_and_counted() {
        let judge = gw(ScriptedBackend::from_fn(|req| {
            let (_, hyp) = parse_entailment_prompt(&req.user_prompt).unwrap();
            Ok(if hyp.starts_with("Bad") { "maybe".into() } else { "1".into() })
        }));
        let h = doc("h", "Good one. Bad two.");
        let s = doc("s", "Good one. Bad two. Good three.");
        let run = FactChecker::new(lexical(), judge).score_corpus(&[(&h, &s)]);
        let n = &run.report.notes[0];
        // one bad synthetic fact and one bad human fact
        assert_eq!(n.excluded_pairs, 2);
        assert_eq!(run.report.excluded_pairs, 2);
        assert_eq!(n.precision, Some(1.0));
        assert_eq!(n.recall, Some(1.0));
        assert_eq!(run.excluded[0].raw_judge_outputs, ["maybe", "maybe"]);
    }

    #[test]
    fn decomposition_failure_is_contained() {
        let dec = gw(ScriptedBackend::new(
            vec![ScriptEntry::keyed(ScriptKey::Contains("BROKEN".into()), Reply::Fail("boom".into()))],
            Some(Rule::SentenceDecomposer),
        ));
        let ok_h = doc("h1", "Fine here.");
        let bad_h = doc("h2", "BROKEN note.");
        let s = doc("s", "Fine here.");
        let run = FactChecker::new(dec, lexical()).score_corpus(&[(&ok_h, &s), (&bad_h, &s)]);
        assert_eq!(run.report.failed_notes, 1);
        assert!(run.report.notes[1].error.is_some());
        assert_eq!(run.report.macro_precision, Some(1.0));
    }

    #[test]
    fn zero_facts_is_missing() {
        let dec = gw(ScriptedBackend::from_fn(|_| Ok(" // ".into())));
        let h = doc("h", "Text.");
        let run = FactChecker::new(dec, lexical()).score_corpus(&[(&h, &h)]);
        assert_eq!(run.report.notes[0].precision, None);
        assert_eq!(run.report.macro_precision, None);
        assert_eq!(run.report.f1, None);
    }

    #[test]
    fn annotations() {
        let h = doc("h", "Patient is Mr. Smith. Stable.");
        let s = doc("s", "Patient is Mr. Jones. Stable.");
        let mut run = FactChecker::new(lexical(), lexical()).score_corpus(&[(&h, &s)]);
        run.annotate("s", Side::Synthetic, 0, "fabricated_claim", "Made-up name.").unwrap();
        assert!(run.annotate("s", Side::Synthetic, 0, "typo", "").is_err());
        assert!(run.annotate("s", Side::Synthetic, 9, "no_error", "").is_err());
        run.annotate("s", Side::Synthetic, 0, "misinterpretation", "second look").unwrap();
        let a = &run.report.annotations[0];
        assert_eq!(a.category, ErrorCategory::Misinterpretation);
        assert_eq!(a.history[0].comment, "Made-up name.");

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ann.csv");
        run.export_annotations(&path).unwrap();
        let mut fresh = FactChecker::new(lexical(), lexical()).score_corpus(&[(&h, &s)]);
        assert_eq!(fresh.import_annotations(&path).unwrap(), 1);
        assert_eq!(fresh.report.annotations[0].category, ErrorCategory::Misinterpretation);
        run.write(dir.path()).unwrap();
        assert!(dir.path().join("verdicts.jsonl").exists());
    }
}
