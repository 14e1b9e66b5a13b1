//! Deterministic backends for tests and offline runs.

use std::collections::VecDeque;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use super::{Backend, GenerationRequest, RawReply};
use crate::chunker::segment_sentences;
use crate::error::{Error, Result};
use crate::prompts::{parse_decomposition_prompt, parse_entailment_prompt, PASSAGE_SEPARATOR};

/// The passage of a rephrasing prompt: everything after the first blank line.
pub fn extract_passage(user_prompt: &str) -> &str {
    match user_prompt.find(PASSAGE_SEPARATOR) {
        Some(at) => &user_prompt[at + PASSAGE_SEPARATOR.len()..],
        None => user_prompt,
    }
}

/// Returns the passage verbatim.
#[derive(Debug, Clone, Copy, Default)]
pub struct EchoBackend;

impl Backend for EchoBackend {
    fn tag(&self) -> String {
        "mock_echo".into()
    }

    fn call(&self, request: &GenerationRequest) -> Result<RawReply> {
        Ok(RawReply::text(extract_passage(&request.user_prompt)))
    }
}

/// Drops the trailing `fraction` of the passage's sentences, optionally
/// appending one fabricated sentence per call.
#[derive(Debug, Clone)]
pub struct LossyBackend {
    fraction: f64,
    inject_unsupported: bool,
}

impl LossyBackend {
    pub fn new(fraction: f64, inject_unsupported: bool) -> Self {
        LossyBackend {
            fraction: fraction.clamp(0.0, 1.0),
            inject_unsupported,
        }
    }

    pub fn transform(&self, passage: &str) -> String {
        let sentences = segment_sentences(passage);
        let n = sentences.len();
        let dropped = ((self.fraction * n as f64) + 1e-9).floor() as usize;
        let keep = n - dropped.min(n);
        let mut out = if keep == 0 {
            String::new()
        } else {
            passage[sentences[0].char_span.0..sentences[keep - 1].char_span.1].to_string()
        };
        if self.inject_unsupported {
            let marker: String = GenerationRequest::new("", passage, 1).fingerprint()[..8].to_string();
            if !out.is_empty() {
                out.push(' ');
            }
            out.push_str(&format!(
                "The record further mentions an unverified finding coded {marker}."
            ));
        }
        out
    }
}

impl Backend for LossyBackend {
    fn tag(&self) -> String {
        if self.inject_unsupported {
            format!("mock_lossy(f={},inject)", self.fraction)
        } else {
            format!("mock_lossy(f={})", self.fraction)
        }
    }

    fn call(&self, request: &GenerationRequest) -> Result<RawReply> {
        Ok(RawReply::text(self.transform(extract_passage(&request.user_prompt))))
    }
}

/// One scripted outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reply {
    Text(String),
    /// Permanent backend error.
    Fail(String),
    /// Retryable failure (e.g. an HTTP 503).
    Transient(String),
}

/// How a scripted entry selects requests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScriptKey {
    Fingerprint(String),
    /// Matches requests whose user prompt contains the string.
    Contains(String),
}

/// Keyed entries are sticky (reused for every matching request); unkeyed
/// entries are consumed in order.
#[derive(Debug, Clone, PartialEq)]
pub struct ScriptEntry {
    pub key: Option<ScriptKey>,
    pub reply: Reply,
}

impl ScriptEntry {
    pub fn next(text: impl Into<String>) -> Self {
        ScriptEntry {
            key: None,
            reply: Reply::Text(text.into()),
        }
    }

    pub fn keyed(key: ScriptKey, reply: Reply) -> Self {
        ScriptEntry {
            key: Some(key),
            reply,
        }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ScriptLine {
    #[serde(default)]
    fingerprint: Option<String>,
    #[serde(default)]
    contains: Option<String>,
    #[serde(default)]
    reply: Option<String>,
    #[serde(default)]
    fail: Option<String>,
    #[serde(default)]
    transient: Option<String>,
}

/// Reads a JSONL script: `{"reply"|"fail"|"transient": str, "fingerprint"?: str, "contains"?: str}`.
pub fn read_script(path: &Path) -> Result<Vec<ScriptEntry>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse {
            path: path.display().to_string(),
            line: i + 1,
            msg,
        };
        let l: ScriptLine = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        let reply = match (l.reply, l.fail, l.transient) {
            (Some(r), None, None) => Reply::Text(r),
            (None, Some(f), None) => Reply::Fail(f),
            (None, None, Some(t)) => Reply::Transient(t),
            _ => return Err(parse_err("exactly one of reply/fail/transient required".into())),
        };
        let key = match (l.fingerprint, l.contains) {
            (Some(f), None) => Some(ScriptKey::Fingerprint(f)),
            (None, Some(c)) => Some(ScriptKey::Contains(c)),
            (None, None) => None,
            _ => return Err(parse_err("at most one of fingerprint/contains".into())),
        };
        out.push(ScriptEntry { key, reply });
    }
    Ok(out)
}

/// Built-in reply rules for scripted judges.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rule {
    /// Verdict 1 iff the hypothesis is a verbatim substring of the premise.
    SubstringJudge,
    /// Splits the note into sentences joined by `//`.
    SentenceDecomposer,
    /// `substring_judge` for entailment prompts, `sentence_decomposer` for
    /// decomposition prompts.
    Lexical,
}

impl Rule {
    pub fn apply(&self, request: &GenerationRequest) -> Result<String> {
        let prompt = request.user_prompt.as_str();
        let judge = |p: &str| {
            parse_entailment_prompt(p).map(|(premise, hypothesis)| {
                let verdict = u8::from(premise.contains(hypothesis.trim()));
                format!("{{\"entailment_prediction\": {verdict}}}")
            })
        };
        let decompose = |p: &str| {
            parse_decomposition_prompt(p).map(|note| {
                segment_sentences(note)
                    .into_iter()
                    .map(|s| s.text)
                    .collect::<Vec<_>>()
                    .join(" // ")
            })
        };
        let out = match self {
            Rule::SubstringJudge => judge(prompt),
            Rule::SentenceDecomposer => decompose(prompt),
            Rule::Lexical => judge(prompt).or_else(|| decompose(prompt)),
        };
        out.ok_or_else(|| Error::Backend(format!("rule {self:?} cannot answer this prompt")))
    }
}

pub type CustomRule = Arc<dyn Fn(&GenerationRequest) -> Result<String> + Send + Sync>;

/// Replies from a script, falling back to a rule.
pub struct ScriptedBackend {
    keyed: Vec<(ScriptKey, Reply)>,
    queue: Mutex<VecDeque<Reply>>,
    rule: Option<Rule>,
    custom: Option<CustomRule>,
}

impl ScriptedBackend {
    pub fn new(entries: Vec<ScriptEntry>, rule: Option<Rule>) -> Self {
        let mut keyed = Vec::new();
        let mut queue = VecDeque::new();
        for e in entries {
            match e.key {
                Some(k) => keyed.push((k, e.reply)),
                None => queue.push_back(e.reply),
            }
        }
        ScriptedBackend {
            keyed,
            queue: Mutex::new(queue),
            rule,
            custom: None,
        }
    }

    /// Replies `texts` in order, then reports the script as exhausted.
    pub fn sequence<I, S>(texts: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self::new(texts.into_iter().map(ScriptEntry::next).collect(), None)
    }

    pub fn from_fn(f: impl Fn(&GenerationRequest) -> Result<String> + Send + Sync + 'static) -> Self {
        let mut s = Self::new(Vec::new(), None);
        s.custom = Some(Arc::new(f));
        s
    }

    fn lookup(&self, request: &GenerationRequest) -> Option<Reply> {
        let mut fingerprint = None;
        for (key, reply) in &self.keyed {
            let hit = match key {
                ScriptKey::Contains(s) => request.user_prompt.contains(s.as_str()),
                ScriptKey::Fingerprint(f) => {
                    fingerprint.get_or_insert_with(|| request.fingerprint()) == f
                }
            };
            if hit {
                return Some(reply.clone());
            }
        }
        self.queue.lock().expect("script queue poisoned").pop_front()
    }
}

impl Backend for ScriptedBackend {
    fn tag(&self) -> String {
        match self.rule {
            Some(r) => format!("mock_scripted({r:?})").to_lowercase(),
            None => "mock_scripted".into(),
        }
    }

    fn call(&self, request: &GenerationRequest) -> Result<RawReply> {
        match self.lookup(request) {
            Some(Reply::Text(t)) => Ok(RawReply::text(t)),
            Some(Reply::Fail(msg)) => Err(Error::Backend(msg)),
            Some(Reply::Transient(msg)) => Err(Error::Transient(msg)),
            None => {
                if let Some(f) = &self.custom {
                    return f(request).map(RawReply::text);
                }
                match self.rule {
                    Some(rule) => rule.apply(request).map(RawReply::text),
                    None => Err(Error::ScriptExhausted),
                }
            }
        }
    }
}
