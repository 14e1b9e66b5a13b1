//! Dictionary-based approximate concept extraction and concept-overlap scoring.
//!
//! Windows of up to `max_window_tokens` tokens are compared with dictionary
//! terms by character-trigram Jaccard similarity. Overlapping matches are
//! resolved greedily, preferring longer windows, then higher similarity, then
//! earlier position.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::Document;
use crate::error::{Error, Result};
use crate::intrinsic::tokenize;
use crate::par::par_map;
use crate::score::Prf;

pub const DEFAULT_THRESHOLD: f64 = 0.7;
pub const DEFAULT_MAX_WINDOW: usize = 7;
pub const DEFAULT_WHITELIST: [&str; 7] = [
    "Anatomy",
    "Chemicals & Drugs",
    "Disorders",
    "Procedures",
    "Physiology",
    "Phenomena",
    "Devices",
];

/// The dictionary bundled with the crate.
pub const TOY_DICTIONARY: &str = include_str!("../assets/toy_dictionary.tsv");

/// Names for common semantic types, used when the dictionary has no name column.
const TYPE_NAMES: &[(&str, &str)] = &[
    ("T023", "Body Part, Organ, or Organ Component"),
    ("T025", "Cell"),
    ("T029", "Body Location or Region"),
    ("T031", "Body Substance"),
    ("T033", "Finding"),
    ("T034", "Laboratory or Test Result"),
    ("T037", "Injury or Poisoning"),
    ("T039", "Physiologic Function"),
    ("T042", "Organ or Tissue Function"),
    ("T046", "Pathologic Function"),
    ("T047", "Disease or Syndrome"),
    ("T048", "Mental or Behavioral Dysfunction"),
    ("T055", "Individual Behavior"),
    ("T059", "Laboratory Procedure"),
    ("T060", "Diagnostic Procedure"),
    ("T061", "Therapeutic or Preventive Procedure"),
    ("T070", "Natural Phenomenon or Process"),
    ("T074", "Medical Device"),
    ("T079", "Temporal Concept"),
    ("T080", "Qualitative Concept"),
    ("T081", "Quantitative Concept"),
    ("T093", "Health Care Related Organization"),
    ("T101", "Patient or Disabled Group"),
    ("T109", "Organic Chemical"),
    ("T116", "Amino Acid, Peptide, or Protein"),
    ("T121", "Pharmacologic Substance"),
    ("T184", "Sign or Symptom"),
    ("T191", "Neoplastic Process"),
    ("T195", "Antibiotic"),
    ("T197", "Inorganic Chemical"),
    ("T201", "Clinical Attribute"),
];

fn trigrams(s: &str) -> HashSet<String> {
    let chars: Vec<char> = format!(" {s} ").chars().collect();
    chars.windows(3).map(|w| w.iter().collect()).collect()
}

fn jaccard_from(overlap: usize, a: usize, b: usize) -> f64 {
    let union = a + b - overlap;
    if union == 0 {
        0.0
    } else {
        overlap as f64 / union as f64
    }
}

/// Character-trigram Jaccard similarity of two strings (each padded with one
/// space on both sides).
pub fn trigram_similarity(a: &str, b: &str) -> f64 {
    let (x, y) = (trigrams(a), trigrams(b));
    jaccard_from(x.intersection(&y).count(), x.len(), y.len())
}

#[derive(Debug, Clone)]
struct Term {
    text: String,
    cuis: BTreeSet<String>,
    n_trigrams: usize,
}

#[derive(Debug, Clone)]
pub struct ConceptDictionary {
    terms: Vec<Term>,
    index: HashMap<String, Vec<u32>>,
    pub cui_to_tui: BTreeMap<String, String>,
    pub tui_to_group: BTreeMap<String, String>,
    pub tui_names: BTreeMap<String, String>,
    pub group_whitelist: BTreeSet<String>,
    pub similarity_threshold: f64,
    pub max_window_tokens: usize,
}

fn normalize_term(term: &str) -> String {
    tokenize(term).join(" ")
}

impl ConceptDictionary {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn toy() -> Self {
        Self::parse(TOY_DICTIONARY, "toy_dictionary.tsv").expect("bundled dictionary is valid")
    }

    /// Parses TSV rows `term, cui, tui, group[, type_name]`. Blank lines and
    /// lines starting with `#` are skipped.
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let bad = |line: usize, msg: String| Error::Parse {
            path: origin.into(),
            line,
            msg,
        };
        let mut by_term: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
        let mut cui_to_tui = BTreeMap::new();
        let mut tui_to_group = BTreeMap::new();
        let mut tui_names: BTreeMap<String, String> = TYPE_NAMES
            .iter()
            .map(|(t, n)| (t.to_string(), n.to_string()))
            .collect();
        for (i, line) in text.lines().enumerate() {
            let lineno = i + 1;
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').map(str::trim).collect();
            if !(4..=5).contains(&cols.len()) || cols[..4].iter().any(|c| c.is_empty()) {
                return Err(bad(lineno, format!("expected 4 or 5 non-empty tab-separated columns, got {line:?}")));
            }
            let (term, cui, tui, group) = (normalize_term(cols[0]), cols[1], cols[2], cols[3]);
            if term.is_empty() {
                return Err(bad(lineno, format!("term {:?} has no alphanumeric content", cols[0])));
            }
            if let Some(prev) = cui_to_tui.insert(cui.to_string(), tui.to_string()) {
                if prev != tui {
                    return Err(bad(lineno, format!("CUI {cui} has conflicting TUIs {prev} and {tui}")));
                }
            }
            if let Some(prev) = tui_to_group.insert(tui.to_string(), group.to_string()) {
                if prev != group {
                    return Err(bad(lineno, format!("TUI {tui} has conflicting groups {prev} and {group}")));
                }
            }
            if let Some(name) = cols.get(4).filter(|n| !n.is_empty()) {
                tui_names.insert(tui.to_string(), name.to_string());
            }
            by_term.entry(term).or_default().insert(cui.to_string());
        }
        if by_term.is_empty() {
            log::warn!("concept dictionary {origin} has no entries");
        }
        let mut terms = Vec::with_capacity(by_term.len());
        let mut index: HashMap<String, Vec<u32>> = HashMap::new();
        for (i, (text, cuis)) in by_term.into_iter().enumerate() {
            let grams = trigrams(&text);
            for g in &grams {
                index.entry(g.clone()).or_default().push(i as u32);
            }
            terms.push(Term {
                text,
                cuis,
                n_trigrams: grams.len(),
            });
        }
        Ok(ConceptDictionary {
            terms,
            index,
            cui_to_tui,
            tui_to_group,
            tui_names,
            group_whitelist: DEFAULT_WHITELIST.iter().map(|s| s.to_string()).collect(),
            similarity_threshold: DEFAULT_THRESHOLD,
            max_window_tokens: DEFAULT_MAX_WINDOW,
        })
    }

    pub fn with_threshold(mut self, threshold: f64) -> Result<Self> {
        if !(threshold > 0.0 && threshold <= 1.0) {
            return Err(Error::Config(format!("similarity threshold {threshold} outside (0, 1]")));
        }
        self.similarity_threshold = threshold;
        Ok(self)
    }

    pub fn with_max_window(mut self, tokens: usize) -> Result<Self> {
        if tokens == 0 {
            return Err(Error::Config("max_window_tokens must be at least 1".into()));
        }
        self.max_window_tokens = tokens;
        Ok(self)
    }

    pub fn with_whitelist<I: IntoIterator<Item = S>, S: Into<String>>(mut self, groups: I) -> Self {
        self.group_whitelist = groups.into_iter().map(Into::into).collect();
        self
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn type_name(&self, tui: &str) -> String {
        self.tui_names.get(tui).cloned().unwrap_or_else(|| tui.to_string())
    }

    fn whitelisted(&self, cui: &str) -> bool {
        self.cui_to_tui
            .get(cui)
            .and_then(|t| self.tui_to_group.get(t))
            .is_some_and(|g| self.group_whitelist.contains(g))
    }

    /// Most similar term for a window string; ties go to the earlier term.
    fn best_term(&self, window: &str) -> Option<(usize, f64)> {
        let grams = trigrams(window);
        let mut overlap: HashMap<u32, usize> = HashMap::new();
        for g in &grams {
            if let Some(ids) = self.index.get(g) {
                for &id in ids {
                    *overlap.entry(id).or_insert(0) += 1;
                }
            }
        }
        let mut best: Option<(usize, f64)> = None;
        for (id, ov) in overlap {
            let id = id as usize;
            let sim = jaccard_from(ov, grams.len(), self.terms[id].n_trigrams);
            let better = match best {
                None => true,
                Some((bid, bsim)) => sim > bsim || (sim == bsim && id < bid),
            };
            if better {
                best = Some((id, sim));
            }
        }
        best
    }

    /// All windows whose best term reaches the threshold, before overlap resolution.
    pub fn candidates(&self, text: &str) -> Vec<ConceptMatch> {
        let tokens = tokenize(text);
        let mut out = Vec::new();
        for start in 0..tokens.len() {
            for len in 1..=self.max_window_tokens.min(tokens.len() - start) {
                let window = tokens[start..start + len].join(" ");
                if let Some((id, sim)) = self.best_term(&window) {
                    if sim >= self.similarity_threshold {
                        out.push(ConceptMatch {
                            start,
                            len,
                            window,
                            term: self.terms[id].text.clone(),
                            similarity: sim,
                            cuis: self.terms[id].cuis.iter().cloned().collect(),
                        });
                    }
                }
            }
        }
        out
    }

    /// Accepted matches after greedy overlap resolution.
    pub fn matches(&self, text: &str) -> Vec<ConceptMatch> {
        let mut cands = self.candidates(text);
        cands.sort_by(|a, b| {
            b.len
                .cmp(&a.len)
                .then(b.similarity.total_cmp(&a.similarity))
                .then(a.start.cmp(&b.start))
        });
        let mut taken: Vec<(usize, usize)> = Vec::new();
        let mut accepted = Vec::new();
        for c in cands {
            let end = c.start + c.len;
            if taken.iter().any(|&(s, e)| c.start < e && s < end) {
                continue;
            }
            taken.push((c.start, end));
            accepted.push(c);
        }
        accepted.sort_by_key(|m| m.start);
        accepted
    }

    pub fn extract(&self, doc_id: &str, text: &str) -> ConceptSet {
        let cuis = self
            .matches(text)
            .into_iter()
            .flat_map(|m| m.cuis)
            .filter(|c| self.whitelisted(c))
            .collect();
        ConceptSet {
            doc_id: doc_id.to_string(),
            cuis,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConceptMatch {
    pub start: usize,
    pub len: usize,
    pub window: String,
    pub term: String,
    pub similarity: f64,
    pub cuis: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConceptSet {
    pub doc_id: String,
    pub cuis: BTreeSet<String>,
}

impl ConceptSet {
    pub fn new<I: IntoIterator<Item = S>, S: Into<String>>(doc_id: &str, cuis: I) -> Self {
        ConceptSet {
            doc_id: doc_id.to_string(),
            cuis: cuis.into_iter().map(Into::into).collect(),
        }
    }
}

/// Set precision/recall/F1 of `candidate` against `reference`. Two empty
/// sets score (1, 1, 1).
pub fn medcon_scores(reference: &ConceptSet, candidate: &ConceptSet) -> Prf {
    if reference.cuis.is_empty() && candidate.cuis.is_empty() {
        return Prf::ONE;
    }
    let inter = reference.cuis.intersection(&candidate.cuis).count();
    Prf::from_counts(inter, candidate.cuis.len(), reference.cuis.len())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TypeTally {
    pub tui: String,
    pub type_name: String,
    pub count: usize,
    pub percent: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuiDiff {
    /// Types of concepts present in the candidate but not the reference.
    pub added: Vec<TypeTally>,
    /// Types of concepts present in the reference but not the candidate.
    pub omitted: Vec<TypeTally>,
}

fn tally<'a>(cuis: impl Iterator<Item = &'a String>, dict: &ConceptDictionary) -> Vec<TypeTally> {
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for cui in cuis {
        let tui = dict.cui_to_tui.get(cui).cloned().unwrap_or_else(|| "unknown".into());
        *counts.entry(tui).or_insert(0) += 1;
    }
    let total: usize = counts.values().sum();
    let mut out: Vec<TypeTally> = counts
        .into_iter()
        .map(|(tui, count)| TypeTally {
            type_name: dict.type_name(&tui),
            tui,
            count,
            percent: 100.0 * count as f64 / total as f64,
        })
        .collect();
    out.sort_by(|a, b| b.count.cmp(&a.count).then_with(|| a.type_name.cmp(&b.type_name)));
    out
}

/// Ranked semantic-type tallies of added and omitted concepts over
/// `(reference, candidate)` pairs.
pub fn tui_diff(pairs: &[(ConceptSet, ConceptSet)], dict: &ConceptDictionary) -> TuiDiff {
    TuiDiff {
        added: tally(pairs.iter().flat_map(|(r, c)| c.cuis.difference(&r.cuis)), dict),
        omitted: tally(pairs.iter().flat_map(|(r, c)| r.cuis.difference(&c.cuis)), dict),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptMetadata {
    pub dictionary_terms: usize,
    pub similarity: String,
    pub similarity_threshold: f64,
    pub max_window_tokens: usize,
    pub group_whitelist: Vec<String>,
    pub counting: String,
    pub empty_convention: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairConcepts {
    pub human_id: String,
    pub synthetic_id: String,
    pub human_concepts: usize,
    pub synthetic_concepts: usize,
    pub medcon: Prf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptReport {
    pub metadata: ConceptMetadata,
    pub medcon: Prf,
    pub pairs: Vec<PairConcepts>,
    pub tui_diff: TuiDiff,
}

/// Extracts concepts for every pair (human note as reference) and macro-averages.
pub fn evaluate(pairs: &[(&Document, &Document)], dict: &ConceptDictionary) -> ConceptReport {
    let sets = par_map(pairs, |(h, s)| {
        (dict.extract(&h.id, &h.text), dict.extract(&s.id, &s.text))
    });
    let rows: Vec<PairConcepts> = sets
        .iter()
        .map(|(r, c)| PairConcepts {
            human_id: r.doc_id.clone(),
            synthetic_id: c.doc_id.clone(),
            human_concepts: r.cuis.len(),
            synthetic_concepts: c.cuis.len(),
            medcon: medcon_scores(r, c),
        })
        .collect();
    ConceptReport {
        metadata: ConceptMetadata {
            dictionary_terms: dict.len(),
            similarity: "character trigram Jaccard, space padded".into(),
            similarity_threshold: dict.similarity_threshold,
            max_window_tokens: dict.max_window_tokens,
            group_whitelist: dict.group_whitelist.iter().cloned().collect(),
            counting: "unique concepts (sets)".into(),
            empty_convention: "both sets empty scores 1.0; empty candidate scores precision 0".into(),
        },
        medcon: Prf::mean(&rows.iter().map(|r| r.medcon).collect::<Vec<_>>()),
        pairs: rows,
        tui_diff: tui_diff(&sets, dict),
    }
}

impl ConceptReport {
    pub fn write_csv(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("concept_pairs.csv");
        let mut w = csv::Writer::from_path(&path).map_err(|e| Error::csv(&path, e))?;
        w.write_record(["human_id", "synthetic_id", "human_concepts", "synthetic_concepts", "precision", "recall", "f1"])
            .map_err(|e| Error::csv(&path, e))?;
        for p in &self.pairs {
            w.write_record([
                p.human_id.clone(),
                p.synthetic_id.clone(),
                p.human_concepts.to_string(),
                p.synthetic_concepts.to_string(),
                p.medcon.precision.to_string(),
                p.medcon.recall.to_string(),
                p.medcon.f1.to_string(),
            ])
            .map_err(|e| Error::csv(&path, e))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;

        let path = dir.join("concept_types.csv");
        let mut w = csv::Writer::from_path(&path).map_err(|e| Error::csv(&path, e))?;
        w.write_record(["direction", "tui", "type_name", "count", "percent"])
            .map_err(|e| Error::csv(&path, e))?;
        for (dir_name, list) in [("added", &self.tui_diff.added), ("omitted", &self.tui_diff.omitted)] {
            for t in list {
                w.write_record([dir_name, &t.tui, &t.type_name, &t.count.to_string(), &t.percent.to_string()])
                    .map_err(|e| Error::csv(&path, e))?;
            }
        }
        w.flush().map_err(|e| Error::io(&path, e))
    }
}
