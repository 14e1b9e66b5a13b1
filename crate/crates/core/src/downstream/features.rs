//! TF-IDF features over [`tokenize`](crate::intrinsic::tokenize) tokens.

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::intrinsic::tokenize;

/// Sparse row as `(column, value)` pairs sorted by column.
pub type SparseRow = Vec<(usize, f64)>;

pub fn dot(row: &SparseRow, dense: &[f64]) -> f64 {
    row.iter().map(|&(j, v)| v * dense[j]).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vectorizer {
    pub vocabulary: BTreeMap<String, usize>,
    pub idf: Vec<f64>,
    pub min_df: usize,
    pub max_features: Option<usize>,
}

impl Vectorizer {
    /// Learns the vocabulary and smoothed idf from `texts`. Columns are in
    /// lexicographic term order. With `max_features`, the most frequent
    /// terms (by total count, ties by term) are kept.
    pub fn fit<S: AsRef<str>>(texts: &[S], min_df: usize, max_features: Option<usize>) -> Result<Self> {
        if texts.is_empty() {
            return Err(Error::InvalidInput("cannot fit a vectorizer on zero documents".into()));
        }
        let mut df: HashMap<String, usize> = HashMap::new();
        let mut total: HashMap<String, usize> = HashMap::new();
        for text in texts {
            let tokens = tokenize(text.as_ref());
            let mut seen = HashSet::new();
            for t in tokens {
                *total.entry(t.clone()).or_insert(0) += 1;
                if seen.insert(t.clone()) {
                    *df.entry(t).or_insert(0) += 1;
                }
            }
        }
        let mut kept: Vec<(String, usize)> = df.into_iter().filter(|(_, d)| *d >= min_df.max(1)).collect();
        if let Some(k) = max_features {
            kept.sort_by(|a, b| total[&b.0].cmp(&total[&a.0]).then_with(|| a.0.cmp(&b.0)));
            kept.truncate(k);
        }
        if kept.is_empty() {
            return Err(Error::InvalidInput(format!(
                "empty vocabulary after filtering with min_df = {min_df}"
            )));
        }
        kept.sort();
        let n = texts.len() as f64;
        let idf = kept
            .iter()
            .map(|(_, d)| ((1.0 + n) / (1.0 + *d as f64)).ln() + 1.0)
            .collect();
        let vocabulary = kept.into_iter().enumerate().map(|(i, (t, _))| (t, i)).collect();
        Ok(Vectorizer {
            vocabulary,
            idf,
            min_df,
            max_features,
        })
    }

    pub fn n_features(&self) -> usize {
        self.idf.len()
    }

    /// Raw counts times idf, L2-normalized. Unknown tokens are dropped; a
    /// document with no known tokens gives an empty row.
    pub fn transform_one(&self, text: &str) -> SparseRow {
        let mut counts: BTreeMap<usize, f64> = BTreeMap::new();
        for t in tokenize(text) {
            if let Some(&j) = self.vocabulary.get(&t) {
                *counts.entry(j).or_insert(0.0) += 1.0;
            }
        }
        let mut row: SparseRow = counts.into_iter().map(|(j, c)| (j, c * self.idf[j])).collect();
        let norm = row.iter().map(|(_, v)| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            for (_, v) in &mut row {
                *v /= norm;
            }
        }
        row
    }

    pub fn transform<S: AsRef<str>>(&self, texts: &[S]) -> Vec<SparseRow> {
        texts.iter().map(|t| self.transform_one(t.as_ref())).collect()
    }

    pub fn fit_transform<S: AsRef<str>>(
        texts: &[S],
        min_df: usize,
        max_features: Option<usize>,
    ) -> Result<(Self, Vec<SparseRow>)> {
        let v = Self::fit(texts, min_df, max_features)?;
        let rows = v.transform(texts);
        Ok((v, rows))
    }
}
