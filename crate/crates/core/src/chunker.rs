//! Rule-based sentence segmentation for line-structured notes, and greedy
//! packing of whole sentences into fixed-size word chunks.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_TARGET_WORDS: usize = 150;

/// Separator placed between rephrased chunks when a note is reassembled.
pub const CHUNK_SEPARATOR: &str = "\n\n";

const DEFAULT_ABBREVIATIONS: &[&str] = &[
    "dr", "mr", "mrs", "ms", "vs", "e.g", "i.e", "pt", "hx", "dx", "tx", "b.i.d", "q.d",
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sentence {
    pub text: String,
    /// Byte offsets `[start, end)` into the source text.
    pub char_span: (usize, usize),
}

impl Sentence {
    pub fn word_count(&self) -> usize {
        self.text.split_whitespace().count()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    pub doc_id: String,
    pub index: usize,
    pub sentences: Vec<Sentence>,
    pub word_count: usize,
    /// Source slice from the first sentence start to the last sentence end.
    pub text: String,
}

/// Sentence splitter with an abbreviation guard list.
#[derive(Debug, Clone)]
pub struct Segmenter {
    abbreviations: HashSet<String>,
}

impl Default for Segmenter {
    fn default() -> Self {
        Segmenter {
            abbreviations: DEFAULT_ABBREVIATIONS.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl Segmenter {
    /// Adds abbreviations (case-insensitive, trailing period optional).
    pub fn with_abbreviations<I, S>(mut self, extra: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        for a in extra {
            let a = a.as_ref().trim().trim_end_matches('.').to_lowercase();
            if !a.is_empty() {
                self.abbreviations.insert(a);
            }
        }
        self
    }

    /// Extends the default list from a file with one abbreviation per line.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(Segmenter::default().with_abbreviations(
            text.lines().filter(|l| !l.trim_start().starts_with('#')),
        ))
    }

    pub fn segment(&self, text: &str) -> Vec<Sentence> {
        let mut out = Vec::new();
        for (start, end) in blocks(text) {
            let block = &text[start..end];
            let mut last = 0;
            for cut in self.block_breaks(block) {
                push_trimmed(text, start + last, start + cut, &mut out);
                last = cut;
            }
            push_trimmed(text, start + last, end, &mut out);
        }
        out
    }

    /// Byte offsets (relative to `block`) right after each sentence terminator.
    fn block_breaks(&self, block: &str) -> Vec<usize> {
        let bytes = block.as_bytes();
        let mut breaks = Vec::new();
        let mut i = 0;
        while i < bytes.len() {
            let c = bytes[i];
            if !matches!(c, b'.' | b'!' | b'?') {
                i += 1;
                continue;
            }
            // swallow closing punctuation and repeated terminators
            let mut j = i + 1;
            while j < bytes.len() && matches!(bytes[j], b'"' | b'\'' | b')' | b']' | b'.' | b'!' | b'?') {
                j += 1;
            }
            if j >= bytes.len() {
                break;
            }
            if !bytes[j].is_ascii_whitespace() {
                i = j;
                continue;
            }
            let rest = &block[j..];
            let next = rest.trim_start();
            let Some(first) = next.chars().next() else {
                break;
            };
            if !(first.is_uppercase() || first.is_ascii_digit()) {
                i = j;
                continue;
            }
            if c == b'.' && self.guarded(block, i, next) {
                i = j;
                continue;
            }
            breaks.push(j);
            i = j;
        }
        breaks
    }

    /// Whether the period at `dot` ends an abbreviation, an initial or a
    /// leading list number rather than a sentence.
    fn guarded(&self, block: &str, dot: usize, next: &str) -> bool {
        let head = &block[..dot];
        let word_start = head
            .rfind(|c: char| c.is_whitespace())
            .map(|p| p + head[p..].chars().next().map_or(1, char::len_utf8))
            .unwrap_or(0);
        let word = head[word_start..].trim_start_matches(['(', '[', '"', '\'']);
        if word.is_empty() {
            return false;
        }
        let lower = word.to_lowercase();
        if self.abbreviations.contains(lower.trim_end_matches('.')) {
            return true;
        }
        if head[..word_start].trim().is_empty() && word.bytes().all(|b| b.is_ascii_digit()) {
            return true;
        }
        let mut chars = word.chars();
        if let (Some(ch), None) = (chars.next(), chars.next()) {
            if ch.is_uppercase() {
                return initial_chain_ends_in_name(next);
            }
        }
        false
    }
}

/// An initial is guarded when the following run of initials ends in a name word.
fn initial_chain_ends_in_name(next: &str) -> bool {
    for token in next.split_whitespace() {
        let mut chars = token.chars();
        match (chars.next(), chars.next(), chars.next()) {
            (Some(a), Some('.'), None) if a.is_uppercase() => continue,
            (Some(a), _, _) if a.is_uppercase() => {
                return token.chars().filter(|c| c.is_alphabetic()).count() >= 2
                    && !token.ends_with(['.', '!', '?']);
            }
            _ => return false,
        }
    }
    false
}

fn push_trimmed(text: &str, start: usize, end: usize, out: &mut Vec<Sentence>) {
    let slice = &text[start..end];
    let lead = slice.len() - slice.trim_start().len();
    let trimmed = slice.trim();
    if trimmed.is_empty() {
        return;
    }
    let s = start + lead;
    out.push(Sentence {
        text: trimmed.to_string(),
        char_span: (s, s + trimmed.len()),
    });
}

fn is_list_item(line: &str) -> bool {
    let t = line.trim_start();
    let mut chars = t.chars();
    match chars.next() {
        Some('-' | '*' | '•') => chars.next().is_some_and(char::is_whitespace),
        Some(c) if c.is_ascii_digit() => {
            let digits = t.bytes().take_while(u8::is_ascii_digit).count();
            let rest = &t[digits..];
            let mut rc = rest.chars();
            matches!(rc.next(), Some('.' | ')')) && rc.next().is_some_and(char::is_whitespace)
        }
        _ => false,
    }
}

/// Splits text into hard blocks at blank lines and list-item line starts.
fn blocks(text: &str) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut block_start: Option<usize> = None;
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        let line_start = offset;
        offset += line.len();
        if line.trim().is_empty() {
            if let Some(s) = block_start.take() {
                out.push((s, line_start));
            }
            continue;
        }
        match block_start {
            Some(s) if is_list_item(line) => {
                out.push((s, line_start));
                block_start = Some(line_start);
            }
            Some(_) => {}
            None => block_start = Some(line_start),
        }
    }
    if let Some(s) = block_start {
        out.push((s, text.len()));
    }
    out
}

fn default_segmenter() -> &'static Segmenter {
    static SEG: OnceLock<Segmenter> = OnceLock::new();
    SEG.get_or_init(Segmenter::default)
}

/// Segments text with the default abbreviation list.
pub fn segment_sentences(text: &str) -> Vec<Sentence> {
    default_segmenter().segment(text)
}

/// Greedy packer: closes a chunk once it reaches `target_words`; a sentence
/// longer than the target always sits alone.
pub fn pack(doc_id: &str, text: &str, sentences: Vec<Sentence>, target_words: usize) -> Vec<Chunk> {
    let target = target_words.max(1);
    let mut chunks = Vec::new();
    let mut current: Vec<Sentence> = Vec::new();
    let mut words = 0;
    for sentence in sentences {
        let n = sentence.word_count();
        if n > target && !current.is_empty() {
            flush(doc_id, text, &mut current, &mut words, &mut chunks);
        }
        words += n;
        current.push(sentence);
        if words >= target {
            flush(doc_id, text, &mut current, &mut words, &mut chunks);
        }
    }
    if !current.is_empty() {
        flush(doc_id, text, &mut current, &mut words, &mut chunks);
    }
    chunks
}

fn flush(doc_id: &str, text: &str, current: &mut Vec<Sentence>, words: &mut usize, chunks: &mut Vec<Chunk>) {
    let sentences = std::mem::take(current);
    let start = sentences[0].char_span.0;
    let end = sentences[sentences.len() - 1].char_span.1;
    chunks.push(Chunk {
        doc_id: doc_id.to_string(),
        index: chunks.len(),
        sentences,
        word_count: *words,
        text: text[start..end].to_string(),
    });
    *words = 0;
}

/// Chunks text with the default segmenter.
pub fn chunk(text: &str, target_words: usize) -> Vec<Chunk> {
    pack("", text, segment_sentences(text), target_words)
}

/// Segmenter plus target size, applied per document.
#[derive(Debug, Clone)]
pub struct Chunker {
    pub segmenter: Segmenter,
    pub target_words: usize,
}

impl Default for Chunker {
    fn default() -> Self {
        Chunker {
            segmenter: Segmenter::default(),
            target_words: DEFAULT_TARGET_WORDS,
        }
    }
}

impl Chunker {
    pub fn chunk_document(&self, doc_id: &str, text: &str) -> Vec<Chunk> {
        pack(doc_id, text, self.segmenter.segment(text), self.target_words)
    }
}

/// Joins chunk rephrasings, checking that indices run 0, 1, 2, ... in order.
pub fn reassemble(rephrased: &[(Chunk, String)]) -> Result<String> {
    for (expected, (chunk, _)) in rephrased.iter().enumerate() {
        if chunk.index != expected {
            return Err(Error::ChunkOrder(format!(
                "expected chunk {expected}, found {}",
                chunk.index
            )));
        }
    }
    Ok(rephrased
        .iter()
        .map(|(_, t)| t.as_str())
        .collect::<Vec<_>>()
        .join(CHUNK_SEPARATOR))
}

#[derive(Serialize)]
struct ChunkRecord<'a> {
    doc_id: &'a str,
    index: usize,
    text: &'a str,
    word_count: usize,
}

pub fn write_chunks_jsonl(chunks: &[Chunk], path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for c in chunks {
        let rec = ChunkRecord {
            doc_id: &c.doc_id,
            index: c.index,
            text: &c.text,
            word_count: c.word_count,
        };
        serde_json::to_writer(&mut out, &rec)?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}
