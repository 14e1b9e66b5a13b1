//! Document collections: JSONL ingestion, placeholder normalization, exact
//! deduplication and human/synthetic pairing.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    #[default]
    Human,
    Synthetic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
    #[default]
    None,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
            Split::None => "none",
        };
        f.write_str(s)
    }
}

/// Whole-note versus sentence-aligned chunk rephrasing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    ByNote,
    ByChunk,
}

impl Mode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::ByNote => "by_note",
            Mode::ByChunk => "by_chunk",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "by_note" | "note" => Ok(Mode::ByNote),
            "by_chunk" | "chunk" => Ok(Mode::ByChunk),
            other => Err(Error::InvalidInput(format!("unknown mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lineage {
    pub origin_id: String,
    pub round: u32,
    pub mode: Mode,
    pub prompt_name: String,
    pub backend_tag: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub text: String,
    #[serde(default)]
    pub note_type: String,
    #[serde(default)]
    pub source: Source,
    #[serde(default)]
    pub split: Split,
    #[serde(default)]
    pub labels: Vec<String>,
    #[serde(default)]
    pub subgroups: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lineage: Option<Lineage>,
    /// Keys not covered by the schema, kept for round-tripping.
    #[serde(flatten)]
    pub extra: BTreeMap<String, serde_json::Value>,
}

impl Document {
    /// A human-written document with default attributes.
    pub fn human(id: impl Into<String>, text: impl Into<String>) -> Self {
        Document {
            id: id.into(),
            text: text.into(),
            note_type: String::new(),
            source: Source::Human,
            split: Split::None,
            labels: Vec::new(),
            subgroups: BTreeMap::new(),
            lineage: None,
            extra: BTreeMap::new(),
        }
    }

    pub fn word_count(&self) -> usize {
        self.text.split_whitespace().count()
    }

    pub fn validate(&self) -> Result<()> {
        if self.id.is_empty() {
            return Err(Error::InvalidDocument {
                id: String::new(),
                msg: "empty id".into(),
            });
        }
        match (self.source, &self.lineage) {
            (Source::Synthetic, None) => Err(Error::InvalidDocument {
                id: self.id.clone(),
                msg: "synthetic document without lineage".into(),
            }),
            (Source::Human, Some(_)) => Err(Error::InvalidDocument {
                id: self.id.clone(),
                msg: "human document carries lineage".into(),
            }),
            (_, Some(l)) if l.round < 1 => Err(Error::InvalidDocument {
                id: self.id.clone(),
                msg: "lineage round must be >= 1".into(),
            }),
            _ => Ok(()),
        }
    }

    /// The round-0 human document this one descends from (itself if human).
    pub fn origin_id(&self) -> &str {
        self.lineage
            .as_ref()
            .map(|l| l.origin_id.as_str())
            .unwrap_or(&self.id)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub documents: Vec<Document>,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
}

impl Corpus {
    /// Builds a corpus, rejecting invalid documents and duplicate ids.
    pub fn new(documents: Vec<Document>) -> Result<Self> {
        let mut seen = HashSet::new();
        for doc in &documents {
            doc.validate()?;
            if !seen.insert(doc.id.as_str()) {
                return Err(Error::DuplicateId(doc.id.clone()));
            }
        }
        Ok(Corpus {
            documents,
            metadata: BTreeMap::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Document> {
        self.documents.iter().find(|d| d.id == id)
    }

    pub fn index(&self) -> HashMap<&str, &Document> {
        self.documents.iter().map(|d| (d.id.as_str(), d)).collect()
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &Document> {
        self.documents.iter().filter(move |d| d.split == split)
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
        }
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        for doc in &self.documents {
            serde_json::to_writer(&mut out, doc)?;
            out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        }
        out.flush().map_err(|e| Error::io(path, e))
    }
}

fn placeholder_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?s)\[\*\*.*?\*\*\]").expect("static regex"))
}

/// Replaces every `[** ... **]` de-identification placeholder with `___`.
pub fn normalize_deid(text: &str) -> String {
    placeholder_re().replace_all(text, "___").into_owned()
}

/// Keeps the first document of every group with byte-identical text.
pub fn dedup_exact(corpus: Corpus) -> Corpus {
    let mut seen: HashSet<String> = HashSet::new();
    let Corpus {
        documents,
        metadata,
    } = corpus;
    let documents = documents
        .into_iter()
        .filter(|d| seen.insert(d.text.clone()))
        .collect();
    Corpus {
        documents,
        metadata,
    }
}

/// Reads a JSONL corpus, validating every line and normalizing placeholders.
pub fn ingest(path: &Path) -> Result<Corpus> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let display = path.display().to_string();
    let mut documents = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let mut doc: Document = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: display.clone(),
            line: lineno,
            msg: e.to_string(),
        })?;
        doc.validate().map_err(|e| Error::Parse {
            path: display.clone(),
            line: lineno,
            msg: e.to_string(),
        })?;
        if !seen.insert(doc.id.clone()) {
            return Err(Error::DuplicateId(doc.id));
        }
        doc.text = normalize_deid(&doc.text);
        documents.push(doc);
    }
    let mut corpus = Corpus {
        documents,
        metadata: BTreeMap::new(),
    };
    corpus
        .metadata
        .insert("source_path".into(), display);
    Ok(corpus)
}

/// Human/synthetic pairs plus the human documents left without a counterpart.
#[derive(Debug, Clone)]
pub struct Pairing<'a> {
    pub pairs: Vec<(&'a Document, &'a Document)>,
    pub unmatched: Vec<&'a Document>,
    /// Synthetic documents whose origin is not in the human corpus.
    pub dangling: Vec<&'a Document>,
}

/// Pairs each synthetic document with its human origin, in synthetic order.
pub fn pair<'a>(human: &'a Corpus, synthetic: &'a Corpus) -> Result<Pairing<'a>> {
    let p = pair_lenient(human, synthetic);
    match p.dangling.first() {
        Some(d) => Err(Error::DanglingOrigin {
            id: d.id.clone(),
            origin: d.origin_id().to_string(),
        }),
        None => Ok(p),
    }
}

/// Like [`pair`], but collects synthetic documents with a missing origin
/// instead of failing.
pub fn pair_lenient<'a>(human: &'a Corpus, synthetic: &'a Corpus) -> Pairing<'a> {
    let index = human.index();
    let mut matched = HashSet::new();
    let mut pairs = Vec::with_capacity(synthetic.len());
    let mut dangling = Vec::new();
    for syn in &synthetic.documents {
        let origin = syn.origin_id();
        match index.get(origin) {
            Some(h) => {
                matched.insert(origin);
                pairs.push((*h, syn));
            }
            None => dangling.push(syn),
        }
    }
    let unmatched = human
        .documents
        .iter()
        .filter(|d| !matched.contains(d.id.as_str()))
        .collect();
    Pairing {
        pairs,
        unmatched,
        dangling,
    }
}
