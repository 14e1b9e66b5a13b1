//! Subgroup fairness of binary predictions: average absolute odds difference
//! and absolute statistical parity difference.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::downstream::{auroc, Prediction};
use crate::error::{Error, Result};
use crate::score::mean;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubgroupSpec {
    pub attribute: String,
    pub group_a: String,
    pub group_b: String,
}

impl SubgroupSpec {
    pub fn new(attribute: &str, group_a: &str, group_b: &str) -> Self {
        SubgroupSpec {
            attribute: attribute.into(),
            group_a: group_a.into(),
            group_b: group_b.into(),
        }
    }
}

#[derive(Deserialize)]
struct SpecFile {
    specs: Vec<SubgroupSpec>,
}

/// Reads `[[specs]]` tables with `attribute`, `group_a` and `group_b`.
pub fn read_specs(path: &Path) -> Result<Vec<SubgroupSpec>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: SpecFile = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    Ok(file.specs)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn add(&mut self, pred: bool, truth: bool) {
        match (pred, truth) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, false) => self.tn += 1,
            (false, true) => self.fn_ += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn tpr(&self) -> Option<f64> {
        let p = self.tp + self.fn_;
        (p > 0).then(|| self.tp as f64 / p as f64)
    }

    pub fn fpr(&self) -> Option<f64> {
        let n = self.fp + self.tn;
        (n > 0).then(|| self.fp as f64 / n as f64)
    }

    pub fn positive_rate(&self) -> Option<f64> {
        (self.total() > 0).then(|| (self.tp + self.fp) as f64 / self.total() as f64)
    }
}

fn check_len(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::InvalidInput(format!("{a} predictions for {b} instances")));
    }
    Ok(())
}

/// Confusion matrices of the two groups; instances in other groups are ignored.
pub fn group_confusions(pred: &[bool], truth: &[bool], groups: &[Option<&str>], spec: &SubgroupSpec) -> Result<(Confusion, Confusion)> {
    check_len(pred.len(), truth.len())?;
    check_len(pred.len(), groups.len())?;
    let (mut a, mut b) = (Confusion::default(), Confusion::default());
    for ((&p, &t), g) in pred.iter().zip(truth).zip(groups) {
        match *g {
            Some(g) if g == spec.group_a => a.add(p, t),
            Some(g) if g == spec.group_b => b.add(p, t),
            _ => {}
        }
    }
    Ok((a, b))
}

fn aaod_from(a: &Confusion, b: &Confusion) -> Result<f64> {
    match (a.tpr(), b.tpr(), a.fpr(), b.fpr()) {
        (Some(ta), Some(tb), Some(fa), Some(fb)) => Ok(0.5 * ((ta - tb).abs() + (fa - fb).abs())),
        _ => Err(Error::Undefined(
            "each group needs at least one positive and one negative instance".into(),
        )),
    }
}

fn spd_from(a: &Confusion, b: &Confusion) -> Result<f64> {
    match (a.positive_rate(), b.positive_rate()) {
        (Some(x), Some(y)) => Ok((x - y).abs()),
        _ => Err(Error::Undefined("statistical parity needs both groups nonempty".into())),
    }
}

/// Half the sum of absolute TPR and FPR gaps between the two groups.
pub fn aaod(pred: &[bool], truth: &[bool], groups: &[Option<&str>], spec: &SubgroupSpec) -> Result<f64> {
    let (a, b) = group_confusions(pred, truth, groups, spec)?;
    aaod_from(&a, &b)
}

/// Absolute gap in positive-prediction rates between the two groups.
pub fn spd(pred: &[bool], groups: &[Option<&str>], spec: &SubgroupSpec) -> Result<f64> {
    let truth = vec![false; pred.len()];
    let (a, b) = group_confusions(pred, &truth, groups, spec)?;
    spd_from(&a, &b)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeFairness {
    pub spec: SubgroupSpec,
    pub n_a: usize,
    pub n_b: usize,
    /// Instances in neither configured group (other values or missing).
    pub excluded: usize,
    pub aaod: Option<f64>,
    pub spd: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FairnessMetadata {
    pub aaod: String,
    pub spd: String,
    pub binarization: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FairnessReport {
    pub metadata: FairnessMetadata,
    pub attributes: Vec<AttributeFairness>,
    pub mean_aaod: Option<f64>,
    pub mean_spd: Option<f64>,
    pub auroc: Option<f64>,
    pub n_predictions: usize,
    /// Predictions whose document is not in the corpus.
    pub missing_documents: usize,
}

/// Per-attribute AAOD and |SPD|, their means over attributes where each is
/// defined, and the AUROC of the same predictions. With `threshold`, hard
/// labels are recomputed from the probabilities; otherwise the stored
/// predicted labels are used.
pub fn fairness_report(
    predictions: &[Prediction],
    corpus: &Corpus,
    specs: &[SubgroupSpec],
    threshold: Option<f64>,
) -> Result<FairnessReport> {
    if let Some(p) = predictions.iter().find(|p| p.probabilities.len() != 1 || p.truth.len() != 1) {
        return Err(Error::InvalidInput(format!(
            "fairness needs single-label binary predictions; {} has {} columns",
            p.doc_id,
            p.probabilities.len()
        )));
    }
    let index = corpus.index();
    let known: Vec<&Prediction> = predictions.iter().filter(|p| index.contains_key(p.doc_id.as_str())).collect();
    let missing = predictions.len() - known.len();
    if missing > 0 {
        log::warn!("{missing} prediction(s) refer to documents not in the corpus");
    }
    let pred: Vec<bool> = known
        .iter()
        .map(|p| match threshold {
            Some(t) => p.probabilities[0] >= t,
            None => p.predicted[0] != 0,
        })
        .collect();
    let truth: Vec<bool> = known.iter().map(|p| p.truth[0] != 0).collect();
    let scores: Vec<f64> = known.iter().map(|p| p.probabilities[0]).collect();

    let mut attributes = Vec::new();
    for spec in specs {
        let groups: Vec<Option<&str>> = known
            .iter()
            .map(|p| index[p.doc_id.as_str()].subgroups.get(&spec.attribute).map(String::as_str))
            .collect();
        let (a, b) = group_confusions(&pred, &truth, &groups, spec)?;
        let mut flags = Vec::new();
        let aaod = match aaod_from(&a, &b) {
            Ok(v) => Some(v),
            Err(e) => {
                flags.push(format!("aaod undefined: {e}"));
                None
            }
        };
        let spd = match spd_from(&a, &b) {
            Ok(v) => Some(v),
            Err(e) => {
                flags.push(format!("spd undefined: {e}"));
                None
            }
        };
        attributes.push(AttributeFairness {
            spec: spec.clone(),
            n_a: a.total(),
            n_b: b.total(),
            excluded: known.len() - a.total() - b.total(),
            aaod,
            spd,
            flags,
        });
    }
    let aaods: Vec<f64> = attributes.iter().filter_map(|a| a.aaod).collect();
    let spds: Vec<f64> = attributes.iter().filter_map(|a| a.spd).collect();
    Ok(FairnessReport {
        metadata: FairnessMetadata {
            aaod: "0.5 * (|TPR_a - TPR_b| + |FPR_a - FPR_b|)".into(),
            spd: "|P(pred=1 | a) - P(pred=1 | b)|".into(),
            binarization: match threshold {
                Some(t) => format!("probability >= {t}"),
                None => "predicted labels as stored".into(),
            },
        },
        attributes,
        mean_aaod: mean(&aaods),
        mean_spd: mean(&spds),
        auroc: auroc(&scores, &truth).ok(),
        n_predictions: predictions.len(),
        missing_documents: missing,
    })
}
