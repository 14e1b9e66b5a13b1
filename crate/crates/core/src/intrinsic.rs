//! Surface statistics, readability and ROUGE between human and synthetic notes.
//!
//! ROUGE runs on [`tokenize`] output with no stemming and no stopword
//! removal. Readability uses the published Flesch-Kincaid grade and SMOG
//! coefficients with a vowel-group syllable heuristic.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::chunker::segment_sentences;
use crate::corpus::Document;
use crate::error::{Error, Result};
use crate::score::{mean, Prf};

/// Lowercased maximal runs of alphanumeric characters.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if n == 0 || tokens.len() < n {
        return counts;
    }
    for w in tokens.windows(n) {
        *counts.entry(w).or_insert(0) += 1;
    }
    counts
}

/// Clipped n-gram overlap between already-tokenized texts.
pub fn rouge_n_tokens(reference: &[String], candidate: &[String], n: usize) -> Prf {
    let r = ngram_counts(reference, n);
    let c = ngram_counts(candidate, n);
    let overlap: usize = c
        .iter()
        .map(|(g, &k)| k.min(r.get(g).copied().unwrap_or(0)))
        .sum();
    let total = |m: &HashMap<&[String], usize>| m.values().sum::<usize>();
    Prf::from_counts(overlap, total(&c), total(&r))
}

pub fn rouge_n(reference: &str, candidate: &str, n: usize) -> Prf {
    rouge_n_tokens(&tokenize(reference), &tokenize(candidate), n)
}

/// Length of the longest common subsequence.
pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn rouge_l_tokens(reference: &[String], candidate: &[String]) -> Prf {
    Prf::from_counts(lcs_len(reference, candidate), candidate.len(), reference.len())
}

pub fn rouge_l(reference: &str, candidate: &str) -> Prf {
    rouge_l_tokens(&tokenize(reference), &tokenize(candidate))
}

fn is_vowel(c: char) -> bool {
    matches!(c, 'a' | 'e' | 'i' | 'o' | 'u' | 'y')
}

/// Vowel-group syllable estimate with a silent-final-e correction.
pub fn syllables(word: &str) -> usize {
    let w: Vec<char> = word.to_lowercase().chars().filter(|c| c.is_alphabetic()).collect();
    let mut groups = 0usize;
    let mut in_group = false;
    for &c in &w {
        let v = is_vowel(c);
        if v && !in_group {
            groups += 1;
        }
        in_group = v;
    }
    let n = w.len();
    if n > 0 && w[n - 1] == 'e' {
        let consonant_le = n >= 3 && w[n - 2] == 'l' && !is_vowel(w[n - 3]);
        if !consonant_le {
            groups = groups.saturating_sub(1);
        }
    }
    groups.max(1)
}

struct TextCounts {
    sentences: usize,
    words: usize,
    syllables: usize,
    polysyllables: usize,
}

fn counts(text: &str) -> TextCounts {
    let sentences = segment_sentences(text).len();
    let words = tokenize(text);
    let syl: Vec<usize> = words.iter().map(|w| syllables(w)).collect();
    TextCounts {
        sentences,
        words: words.len(),
        syllables: syl.iter().sum(),
        polysyllables: syl.iter().filter(|&&s| s >= 3).count(),
    }
}

/// Flesch-Kincaid grade level.
pub fn fk_grade(text: &str) -> Result<f64> {
    let c = counts(text);
    if c.sentences == 0 || c.words == 0 {
        return Err(Error::Undefined("Flesch-Kincaid grade of empty text".into()));
    }
    Ok(0.39 * (c.words as f64 / c.sentences as f64) + 11.8 * (c.syllables as f64 / c.words as f64) - 15.59)
}

/// SMOG index.
pub fn smog(text: &str) -> Result<f64> {
    let c = counts(text);
    if c.sentences == 0 {
        return Err(Error::Undefined("SMOG of empty text".into()));
    }
    Ok(1.0430 * (c.polysyllables as f64 * 30.0 / c.sentences as f64).sqrt() + 3.1291)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocStats {
    pub doc_id: String,
    pub note_words: usize,
    pub sentences: usize,
    pub mean_sentence_words: Option<f64>,
    pub fk_grade: Option<f64>,
    pub smog: Option<f64>,
}

impl DocStats {
    pub fn of(doc: &Document) -> Self {
        let sentences = segment_sentences(&doc.text);
        let note_words = doc.word_count();
        DocStats {
            doc_id: doc.id.clone(),
            note_words,
            sentences: sentences.len(),
            mean_sentence_words: (!sentences.is_empty())
                .then(|| note_words as f64 / sentences.len() as f64),
            fk_grade: fk_grade(&doc.text).ok(),
            smog: smog(&doc.text).ok(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsSummary {
    pub documents: usize,
    pub note_words: Option<f64>,
    pub mean_sentence_words: Option<f64>,
    pub fk_grade: Option<f64>,
    pub smog: Option<f64>,
}

impl StatsSummary {
    pub fn of(stats: &[DocStats]) -> Self {
        let pick = |f: fn(&DocStats) -> Option<f64>| mean(&stats.iter().filter_map(f).collect::<Vec<_>>());
        StatsSummary {
            documents: stats.len(),
            note_words: pick(|s| Some(s.note_words as f64)),
            mean_sentence_words: pick(|s| s.mean_sentence_words),
            fk_grade: pick(|s| s.fk_grade),
            smog: pick(|s| s.smog),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRouge {
    pub human_id: String,
    pub synthetic_id: String,
    pub rouge1: Prf,
    pub rouge2: Prf,
    pub rouge_l: Prf,
}

impl PairRouge {
    pub fn of(human: &Document, synthetic: &Document) -> Self {
        let r = tokenize(&human.text);
        let c = tokenize(&synthetic.text);
        PairRouge {
            human_id: human.id.clone(),
            synthetic_id: synthetic.id.clone(),
            rouge1: rouge_n_tokens(&r, &c, 1),
            rouge2: rouge_n_tokens(&r, &c, 2),
            rouge_l: rouge_l_tokens(&r, &c),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntrinsicMetadata {
    pub tokenizer: String,
    pub stemming: bool,
    pub stopword_removal: bool,
    pub word_definition: String,
    pub syllable_heuristic: String,
}

impl Default for IntrinsicMetadata {
    fn default() -> Self {
        IntrinsicMetadata {
            tokenizer: "lowercase maximal alphanumeric runs".into(),
            stemming: false,
            stopword_removal: false,
            word_definition: "note_words: whitespace tokens; readability: tokenizer tokens".into(),
            syllable_heuristic: "vowel groups (aeiouy), minus terminal silent e except consonant+le, min 1".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntrinsicReport {
    pub metadata: IntrinsicMetadata,
    pub human: StatsSummary,
    pub synthetic: StatsSummary,
    pub rouge1: Prf,
    pub rouge2: Prf,
    pub rouge_l: Prf,
    pub pairs: Vec<PairRouge>,
    pub human_docs: Vec<DocStats>,
    pub synthetic_docs: Vec<DocStats>,
    /// Reserved; model-based similarity is not computed.
    pub bertscore: Option<f64>,
    /// Reserved; part-of-speech distributions are not computed.
    pub pos_distribution: Option<serde_json::Value>,
}

/// Macro-averaged report over `(human, synthetic)` pairs.
pub fn evaluate(pairs: &[(&Document, &Document)]) -> IntrinsicReport {
    let rouge: Vec<PairRouge> = pairs.iter().map(|(h, s)| PairRouge::of(h, s)).collect();
    let mut seen = std::collections::HashSet::new();
    let human_docs: Vec<DocStats> = pairs
        .iter()
        .filter(|(h, _)| seen.insert(h.id.clone()))
        .map(|(h, _)| DocStats::of(h))
        .collect();
    let synthetic_docs: Vec<DocStats> = pairs.iter().map(|(_, s)| DocStats::of(s)).collect();
    IntrinsicReport {
        metadata: IntrinsicMetadata::default(),
        human: StatsSummary::of(&human_docs),
        synthetic: StatsSummary::of(&synthetic_docs),
        rouge1: Prf::mean(&rouge.iter().map(|p| p.rouge1).collect::<Vec<_>>()),
        rouge2: Prf::mean(&rouge.iter().map(|p| p.rouge2).collect::<Vec<_>>()),
        rouge_l: Prf::mean(&rouge.iter().map(|p| p.rouge_l).collect::<Vec<_>>()),
        pairs: rouge,
        human_docs,
        synthetic_docs,
        bertscore: None,
        pos_distribution: None,
    }
}

impl IntrinsicReport {
    /// Writes `pairs.csv` and `documents.csv` into `dir`.
    pub fn write_csv(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let pairs_path = dir.join("pairs.csv");
        let mut w = csv::Writer::from_path(&pairs_path).map_err(|e| Error::csv(&pairs_path, e))?;
        w.write_record([
            "human_id", "synthetic_id", "rouge1_p", "rouge1_r", "rouge1_f1", "rouge2_p", "rouge2_r",
            "rouge2_f1", "rougeL_p", "rougeL_r", "rougeL_f1",
        ])
        .map_err(|e| Error::csv(&pairs_path, e))?;
        for p in &self.pairs {
            let mut row = vec![p.human_id.clone(), p.synthetic_id.clone()];
            for s in [p.rouge1, p.rouge2, p.rouge_l] {
                row.extend([s.precision, s.recall, s.f1].map(|v| v.to_string()));
            }
            w.write_record(&row).map_err(|e| Error::csv(&pairs_path, e))?;
        }
        w.flush().map_err(|e| Error::io(&pairs_path, e))?;

        let docs_path = dir.join("documents.csv");
        let mut w = csv::Writer::from_path(&docs_path).map_err(|e| Error::csv(&docs_path, e))?;
        w.write_record(["source", "doc_id", "note_words", "sentences", "mean_sentence_words", "fk_grade", "smog"])
            .map_err(|e| Error::csv(&docs_path, e))?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for (source, docs) in [("human", &self.human_docs), ("synthetic", &self.synthetic_docs)] {
            for d in docs {
                w.write_record([
                    source.to_string(),
                    d.doc_id.clone(),
                    d.note_words.to_string(),
                    d.sentences.to_string(),
                    opt(d.mean_sentence_words),
                    opt(d.fk_grade),
                    opt(d.smog),
                ])
                .map_err(|e| Error::csv(&docs_path, e))?;
            }
        }
        w.flush().map_err(|e| Error::io(&docs_path, e))
    }
}
