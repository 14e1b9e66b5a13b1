//! Downstream-utility experiments: TF-IDF + logistic regression trained and
//! tested on real notes (TRTR), on synthetic notes (TSTS), or on real plus
//! synthetic training notes tested on real notes (augmented).

pub mod features;
pub mod metrics;
pub mod model;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Document, Source, Split};
use crate::error::{Error, Result};
use crate::par::par_map;
use crate::rephraser::build_augmented_train;

pub use features::{SparseRow, Vectorizer};
pub use metrics::{auprc, auroc, bootstrap_ci, f1_scores, f1_scores_on, Interval};
pub use model::{train, tune_threshold, LinearModel, TrainConfig, TrainOutcome, ValMetric};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Binary,
    Multilabel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VectorizerConfig {
    pub min_df: usize,
    pub max_features: Option<usize>,
}

impl Default for VectorizerConfig {
    fn default() -> Self {
        VectorizerConfig {
            min_df: 1,
            max_features: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ThresholdConfig {
    pub value: f64,
    /// Pick a global threshold per seed on the validation split instead.
    pub tune: bool,
}

impl Default for ThresholdConfig {
    fn default() -> Self {
        ThresholdConfig { value: 0.5, tune: false }
    }
}

/// A classification task over a corpus; usually read from `task.toml`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TaskSpec {
    pub name: String,
    pub kind: TaskKind,
    /// `labels`, or the name of an extra document field holding a string or
    /// a list of strings.
    pub label_field: String,
    /// Label space; inferred from the human corpus when empty.
    pub labels: Vec<String>,
    /// For binary tasks, the label value that marks a positive document.
    pub positive_label: Option<String>,
    pub rare_threshold: usize,
    pub n_boot: usize,
    pub vectorizer: VectorizerConfig,
    pub training: TrainConfig,
    pub threshold: ThresholdConfig,
}

impl Default for TaskSpec {
    fn default() -> Self {
        TaskSpec {
            name: "task".into(),
            kind: TaskKind::Multilabel,
            label_field: "labels".into(),
            labels: Vec::new(),
            positive_label: None,
            rare_threshold: 10,
            n_boot: 1000,
            vectorizer: VectorizerConfig::default(),
            training: TrainConfig::default(),
            threshold: ThresholdConfig::default(),
        }
    }
}

impl TaskSpec {
    pub fn from_toml_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let spec: TaskSpec = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        self.training.validate()?;
        if self.kind == TaskKind::Binary && self.positive_label.is_none() {
            return Err(Error::Config("binary task needs `positive_label`".into()));
        }
        if !(self.threshold.value > 0.0 && self.threshold.value < 1.0) {
            return Err(Error::Config(format!("threshold {} outside (0, 1)", self.threshold.value)));
        }
        if self.n_boot == 0 {
            return Err(Error::Config("n_boot must be at least 1".into()));
        }
        Ok(())
    }

    /// Raw label values of a document.
    pub fn doc_labels(&self, doc: &Document) -> Vec<String> {
        if self.label_field == "labels" {
            return doc.labels.clone();
        }
        match doc.extra.get(&self.label_field) {
            None | Some(serde_json::Value::Null) => vec![],
            Some(serde_json::Value::String(s)) => vec![s.clone()],
            Some(serde_json::Value::Array(xs)) => xs
                .iter()
                .map(|x| x.as_str().map(str::to_string).unwrap_or_else(|| x.to_string()))
                .collect(),
            Some(other) => vec![other.to_string()],
        }
    }

    /// Column names of the label matrix.
    pub fn label_space(&self, human: &Corpus) -> Vec<String> {
        match self.kind {
            TaskKind::Binary => vec![self.positive_label.clone().unwrap_or_default()],
            TaskKind::Multilabel if !self.labels.is_empty() => self.labels.clone(),
            TaskKind::Multilabel => human
                .documents
                .iter()
                .flat_map(|d| self.doc_labels(d))
                .collect::<BTreeSet<_>>()
                .into_iter()
                .collect(),
        }
    }

    fn label_row(&self, doc: &Document, columns: &HashMap<&str, usize>) -> Vec<u8> {
        let mut row = vec![0u8; columns.len()];
        for l in self.doc_labels(doc) {
            if let Some(&c) = columns.get(l.as_str()) {
                row[c] = 1;
            }
        }
        row
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Setting {
    Trtr,
    Tsts,
    Augmented,
}

impl fmt::Display for Setting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Setting::Trtr => "trtr",
            Setting::Tsts => "tsts",
            Setting::Augmented => "augmented",
        })
    }
}

impl FromStr for Setting {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "trtr" => Ok(Setting::Trtr),
            "tsts" => Ok(Setting::Tsts),
            "augmented" | "aug" => Ok(Setting::Augmented),
            _ => Err(Error::Config(format!("unknown setting {s:?} (trtr, tsts, augmented)"))),
        }
    }
}

/// One example: the text the model sees and the human document that
/// supplies its labels.
#[derive(Clone, Copy)]
struct Example<'a> {
    id: &'a str,
    text: &'a str,
    truth: &'a Document,
}

struct Assembled<'a> {
    train: Vec<Example<'a>>,
    val: Vec<Example<'a>>,
    test: Vec<Example<'a>>,
    synthetic_ignored: usize,
}

/// Latest synthetic version of each human document (highest round, then id).
fn synthetic_by_origin<'a>(human: &Corpus, synthetic: &'a Corpus) -> (HashMap<String, &'a Document>, usize) {
    let mut map: HashMap<String, &Document> = HashMap::new();
    let mut dangling = 0;
    for d in &synthetic.documents {
        let origin = d.origin_id();
        if d.source != Source::Synthetic || human.get(origin).is_none() {
            dangling += 1;
            continue;
        }
        let round = |x: &Document| x.lineage.as_ref().map_or(0, |l| l.round);
        let replace = match map.get(origin) {
            None => true,
            Some(prev) => (round(d), d.id.as_str()) > (round(prev), prev.id.as_str()),
        };
        if replace {
            map.insert(origin.to_string(), d);
        }
    }
    if dangling > 0 {
        log::warn!("{dangling} synthetic document(s) have no human origin in this corpus; ignored");
    }
    (map, dangling)
}

fn assemble<'a>(human: &'a Corpus, synthetic: Option<&'a Corpus>, setting: Setting) -> Result<Assembled<'a>> {
    let real = |split| -> Vec<Example<'a>> {
        human
            .split(split)
            .map(|d| Example {
                id: &d.id,
                text: &d.text,
                truth: d,
            })
            .collect()
    };
    if human.split(Split::Train).next().is_none() || human.split(Split::Test).next().is_none() {
        return Err(Error::InvalidInput("human corpus needs train and test splits".into()));
    }
    match setting {
        Setting::Trtr => Ok(Assembled {
            train: real(Split::Train),
            val: real(Split::Val),
            test: real(Split::Test),
            synthetic_ignored: 0,
        }),
        Setting::Tsts => {
            let syn = synthetic.ok_or_else(|| Error::InvalidInput("TSTS needs a synthetic corpus".into()))?;
            let (map, _) = synthetic_by_origin(human, syn);
            let mut missing = Vec::new();
            let mut pick = |split| -> Vec<Example<'a>> {
                human
                    .split(split)
                    .filter_map(|h| match map.get(h.id.as_str()) {
                        Some(s) => Some(Example {
                            id: &s.id,
                            text: &s.text,
                            truth: h,
                        }),
                        None => {
                            missing.push(h.id.clone());
                            None
                        }
                    })
                    .collect()
            };
            let (train, val, test) = (pick(Split::Train), pick(Split::Val), pick(Split::Test));
            if !missing.is_empty() {
                return Err(Error::InvalidInput(format!(
                    "TSTS needs a synthetic version of every train/val/test document; {} missing (first: {})",
                    missing.len(),
                    missing[0]
                )));
            }
            let used = train.len() + val.len() + test.len();
            Ok(Assembled {
                train,
                val,
                test,
                synthetic_ignored: syn.len() - used,
            })
        }
        Setting::Augmented => {
            let syn = synthetic.ok_or_else(|| Error::InvalidInput("augmented setting needs a synthetic corpus".into()))?;
            let (map, _) = synthetic_by_origin(human, syn);
            let mut train = real(Split::Train);
            let train_ids: BTreeSet<&str> = train.iter().map(|e| e.id).collect();
            let mut chosen: Vec<&Document> = map
                .values()
                .copied()
                .filter(|s| train_ids.contains(s.origin_id()))
                .collect();
            chosen.sort_by(|a, b| a.id.cmp(&b.id));
            // Leakage guard over exactly the documents being added.
            build_augmented_train(
                &Corpus::new(chosen.iter().map(|d| human.get(d.origin_id()).unwrap().clone()).collect())?,
                &Corpus::new(chosen.iter().map(|d| (*d).clone()).collect())?,
            )?;
            if chosen.len() < train.len() {
                log::warn!(
                    "augmenting with {} synthetic documents for {} training documents",
                    chosen.len(),
                    train.len()
                );
            }
            let ignored = syn.len() - chosen.len();
            train.extend(chosen.into_iter().map(|s| Example {
                id: &s.id,
                text: &s.text,
                truth: human.get(s.origin_id()).expect("origin checked"),
            }));
            Ok(Assembled {
                train,
                val: real(Split::Val),
                test: real(Split::Test),
                synthetic_ignored: ignored,
            })
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricEstimate {
    /// Mean over seeds on the full test set.
    pub point: Option<f64>,
    /// Percentile bootstrap interval of the seed-averaged metric.
    pub lo: Option<f64>,
    pub hi: Option<f64>,
    pub skipped_replicates: usize,
    pub per_seed: Vec<Option<f64>>,
    pub seed_sd: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub n_features: usize,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_val: Option<f64>,
    pub threshold: f64,
    pub degenerate_labels: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub task: String,
    pub kind: TaskKind,
    pub setting: Setting,
    pub seeds: Vec<u64>,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub labels: usize,
    pub rare_threshold: usize,
    pub rare_labels: Vec<String>,
    pub threshold_mode: String,
    pub n_boot: usize,
    pub ci_method: String,
    pub metrics: BTreeMap<String, MetricEstimate>,
    pub training: Vec<SeedSummary>,
    pub synthetic_ignored: usize,
}

/// Seed-averaged test predictions for one document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub doc_id: String,
    pub truth: Vec<u8>,
    pub probabilities: Vec<f64>,
    pub predicted: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentOutput {
    pub report: ExperimentReport,
    pub predictions: Vec<Prediction>,
}

struct SeedRun {
    probs: Vec<Vec<f64>>,
    preds: Vec<Vec<u8>>,
    summary: SeedSummary,
}

fn carve_val<'a>(train: &[Example<'a>], fraction: f64, seed: u64) -> Result<(Vec<Example<'a>>, Vec<Example<'a>>)> {
    if train.len() < 2 {
        return Err(Error::InvalidInput("too few training documents to carve a validation split".into()));
    }
    let mut idx: Vec<usize> = (0..train.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_7a11));
    let k = ((train.len() as f64 * fraction).ceil() as usize).clamp(1, train.len() - 1);
    let mut val_idx = idx[..k].to_vec();
    let mut train_idx = idx[k..].to_vec();
    val_idx.sort_unstable();
    train_idx.sort_unstable();
    Ok((
        train_idx.iter().map(|&i| train[i]).collect(),
        val_idx.iter().map(|&i| train[i]).collect(),
    ))
}

type MetricFn = fn(&[Vec<f64>], &[Vec<u8>], &[Vec<u8>], &[usize]) -> Result<f64>;

fn metric_table(kind: TaskKind) -> Vec<(&'static str, MetricFn)> {
    fn col0(probs: &[Vec<f64>], truth: &[Vec<u8>]) -> (Vec<f64>, Vec<bool>) {
        (probs.iter().map(|p| p[0]).collect(), truth.iter().map(|t| t[0] != 0).collect())
    }
    match kind {
        TaskKind::Binary => vec![
            ("auroc", |p, _, t, _| {
                let (s, l) = col0(p, t);
                auroc(&s, &l)
            }),
            ("auprc", |p, _, t, _| {
                let (s, l) = col0(p, t);
                auprc(&s, &l)
            }),
        ],
        TaskKind::Multilabel => vec![
            ("micro_f1", |_, y, t, _| f1_scores(y, t).map(|f| f.0)),
            ("macro_f1", |_, y, t, _| f1_scores(y, t).map(|f| f.1)),
            ("rare_micro_f1", |_, y, t, r| f1_scores_on(y, t, Some(r)).map(|f| f.0)),
            ("rare_macro_f1", |_, y, t, r| f1_scores_on(y, t, Some(r)).map(|f| f.1)),
        ],
    }
}

fn select<T: Clone>(xs: &[T], idx: &[usize]) -> Vec<T> {
    idx.iter().map(|&i| xs[i].clone()).collect()
}

/// Runs one setting for every seed and aggregates.
pub fn run_experiment(
    task: &TaskSpec,
    human: &Corpus,
    synthetic: Option<&Corpus>,
    setting: Setting,
    seeds: &[u64],
) -> Result<ExperimentOutput> {
    task.validate()?;
    if seeds.is_empty() {
        return Err(Error::Config("at least one seed is required".into()));
    }
    let data = assemble(human, synthetic, setting)?;
    let label_names = task.label_space(human);
    if label_names.is_empty() {
        return Err(Error::InvalidInput("empty label space".into()));
    }
    let columns: HashMap<&str, usize> = label_names.iter().enumerate().map(|(i, l)| (l.as_str(), i)).collect();
    let truth_of = |ex: &[Example]| -> Vec<Vec<u8>> { ex.iter().map(|e| task.label_row(e.truth, &columns)).collect() };

    // Rare labels by frequency among the human training documents.
    let human_train: Vec<Vec<u8>> = human.split(Split::Train).map(|d| task.label_row(d, &columns)).collect();
    let rare: Vec<usize> = (0..label_names.len())
        .filter(|&c| {
            let f = human_train.iter().filter(|r| r[c] != 0).count();
            f >= 1 && f <= task.rare_threshold
        })
        .collect();

    let test_truth = truth_of(&data.test);
    let test_texts: Vec<&str> = data.test.iter().map(|e| e.text).collect();
    let val_metric = match task.kind {
        TaskKind::Binary => ValMetric::Auroc,
        TaskKind::Multilabel => ValMetric::MicroF1,
    };
    let n_val_declared = data.val.len();
    let runs: Vec<Result<SeedRun>> = par_map(seeds, |&seed| {
        let (train_ex, val_ex) = if data.val.is_empty() {
            carve_val(&data.train, task.training.val_fraction, seed)?
        } else {
            (data.train.clone(), data.val.clone())
        };
        let train_texts: Vec<&str> = train_ex.iter().map(|e| e.text).collect();
        let (vec, x) = Vectorizer::fit_transform(&train_texts, task.vectorizer.min_df, task.vectorizer.max_features)?;
        let y = truth_of(&train_ex);
        let x_val = vec.transform(&val_ex.iter().map(|e| e.text).collect::<Vec<_>>());
        let y_val = truth_of(&val_ex);
        let mut out = train(&x, &y, &x_val, &y_val, vec.n_features(), val_metric, &task.training, seed)?;
        if task.threshold.tune {
            out.model.threshold = tune_threshold(&out.model.predict_proba(&x_val), &y_val);
        } else {
            out.model.threshold = task.threshold.value;
        }
        let probs = out.model.predict_proba(&vec.transform(&test_texts));
        let preds = model::binarize(&probs, out.model.threshold);
        Ok(SeedRun {
            probs,
            preds,
            summary: SeedSummary {
                seed,
                n_features: vec.n_features(),
                epochs_run: out.epochs_run,
                best_epoch: out.best_epoch,
                best_val: out.best_val.is_finite().then_some(out.best_val),
                threshold: out.model.threshold,
                degenerate_labels: out.degenerate_labels.len(),
            },
        })
    });
    let runs: Vec<SeedRun> = runs.into_iter().collect::<Result<_>>()?;

    let boot_seed = seeds[0].wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0xB007);
    let mut metrics = BTreeMap::new();
    for (name, f) in metric_table(task.kind) {
        let per_seed: Vec<Option<f64>> = runs
            .iter()
            .map(|r| match f(&r.probs, &r.preds, &test_truth, &rare) {
                Ok(v) => Ok(Some(v)),
                Err(Error::Undefined(_)) => Ok(None),
                Err(e) => Err(e),
            })
            .collect::<Result<_>>()?;
        let ci = bootstrap_ci(test_truth.len(), task.n_boot, boot_seed, |idx| {
            let t = select(&test_truth, idx);
            let mut sum = 0.0;
            for r in &runs {
                sum += f(&select(&r.probs, idx), &select(&r.preds, idx), &t, &rare)?;
            }
            Ok(sum / runs.len() as f64)
        })?;
        let defined: Vec<f64> = per_seed.iter().flatten().copied().collect();
        let seed_sd = (defined.len() >= 2).then(|| {
            let m = defined.iter().sum::<f64>() / defined.len() as f64;
            (defined.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (defined.len() - 1) as f64).sqrt()
        });
        metrics.insert(
            name.to_string(),
            MetricEstimate {
                point: ci.point,
                lo: ci.lo,
                hi: ci.hi,
                skipped_replicates: ci.skipped,
                per_seed,
                seed_sd,
            },
        );
    }

    let mean_threshold = runs.iter().map(|r| r.summary.threshold).sum::<f64>() / runs.len() as f64;
    let predictions = data
        .test
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let probabilities: Vec<f64> = (0..label_names.len())
                .map(|c| runs.iter().map(|r| r.probs[i][c]).sum::<f64>() / runs.len() as f64)
                .collect();
            Prediction {
                doc_id: e.id.to_string(),
                truth: test_truth[i].clone(),
                predicted: probabilities.iter().map(|&p| u8::from(p >= mean_threshold)).collect(),
                probabilities,
            }
        })
        .collect();

    let n_val = if n_val_declared > 0 {
        n_val_declared
    } else {
        ((data.train.len() as f64 * task.training.val_fraction).ceil() as usize).clamp(1, data.train.len() - 1)
    };
    let report = ExperimentReport {
        task: task.name.clone(),
        kind: task.kind,
        setting,
        seeds: seeds.to_vec(),
        n_train: data.train.len() - if n_val_declared > 0 { 0 } else { n_val },
        n_val,
        n_test: data.test.len(),
        labels: label_names.len(),
        rare_threshold: task.rare_threshold,
        rare_labels: rare.iter().map(|&c| label_names[c].clone()).collect(),
        threshold_mode: if task.threshold.tune { "val_tuned" } else { "fixed" }.into(),
        n_boot: task.n_boot,
        ci_method: "point: mean over seeds; interval: 2.5/97.5 percentiles of the seed-averaged metric over test-set bootstrap resamples".into(),
        metrics,
        training: runs.into_iter().map(|r| r.summary).collect(),
        synthetic_ignored: data.synthetic_ignored,
    };
    Ok(ExperimentOutput { report, predictions })
}

pub fn write_predictions(path: &Path, predictions: &[Prediction]) -> Result<()> {
    use std::io::Write;
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for p in predictions {
        serde_json::to_writer(&mut w, p)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_predictions(path: &Path) -> Result<Vec<Prediction>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: path.display().to_string(),
                line: i + 1,
                msg: e.to_string(),
            })
        })
        .collect()
}
