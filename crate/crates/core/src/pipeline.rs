//! End-to-end orchestration: ingest the human corpus, rephrase it for every
//! (mode, prompt, round) variant, evaluate each variant against the human
//! notes, and aggregate everything into one report.
//!
//! Every stage writes its output under `<output_dir>/artifacts/`. A rerun
//! with the same configuration loads existing artifacts instead of
//! recomputing them; a stage is recomputed when its artifact is missing or
//! unreadable, or when anything upstream of it was recomputed.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::chunker::{Chunker, Segmenter, CHUNK_SEPARATOR, DEFAULT_TARGET_WORDS};
use crate::concepts::{self, ConceptDictionary, TypeTally, DEFAULT_MAX_WINDOW, DEFAULT_THRESHOLD};
use crate::corpus::{self, Corpus, Mode, Source, Split};
use crate::downstream::{self, ExperimentReport, Prediction, Setting, TaskKind, TaskSpec};
use crate::error::{Error, ErrorClass, Result};
use crate::factcheck::FactChecker;
use crate::fairness::{self, FairnessReport, SubgroupSpec};
use crate::gateway::{BackendConfig, TokenBudget};
use crate::intrinsic::{self, IntrinsicMetadata, StatsSummary};
use crate::rephraser::{PromptTemplate, RephraseRun, Rephraser};
use crate::score::Prf;

pub const TOOL_NAME: &str = env!("CARGO_PKG_NAME");
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

const TOP_TYPES: usize = 5;

// ---------------------------------------------------------------------------
// configuration

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChunkingConfig {
    pub target_words: usize,
    /// Extra abbreviations, one per line.
    pub abbreviations: Option<PathBuf>,
}

impl Default for ChunkingConfig {
    fn default() -> Self {
        ChunkingConfig {
            target_words: DEFAULT_TARGET_WORDS,
            abbreviations: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConceptsConfig {
    pub threshold: f64,
    pub max_window: usize,
    /// Semantic groups kept after matching; the built-in list when unset.
    pub whitelist: Option<Vec<String>>,
}

impl Default for ConceptsConfig {
    fn default() -> Self {
        ConceptsConfig {
            threshold: DEFAULT_THRESHOLD,
            max_window: DEFAULT_MAX_WINDOW,
            whitelist: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FairnessConfig {
    pub specs: Vec<SubgroupSpec>,
    /// TOML file with `[[specs]]` tables, appended to `specs`.
    pub specs_file: Option<PathBuf>,
    /// Re-binarize probabilities at this threshold instead of using the
    /// experiment's own predicted labels.
    pub threshold: Option<f64>,
}

/// Which evaluation angles run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StagesConfig {
    pub intrinsic: bool,
    pub concepts: bool,
    pub facts: bool,
    pub downstream: bool,
    pub fairness: bool,
}

impl Default for StagesConfig {
    fn default() -> Self {
        StagesConfig {
            intrinsic: true,
            concepts: true,
            facts: true,
            downstream: true,
            fairness: true,
        }
    }
}

/// A task given inline or as a path to a task TOML file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TaskEntry {
    File { file: PathBuf },
    Inline(TaskSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub input: PathBuf,
    pub output_dir: PathBuf,
    pub prompt_dir: Option<PathBuf>,
    /// Concept dictionary TSV; the bundled toy dictionary when unset.
    pub dictionary: Option<PathBuf>,
    pub dedup: bool,
    pub modes: Vec<Mode>,
    pub prompts: Vec<String>,
    pub rounds: u32,
    pub n_seeds: usize,
    pub settings: Vec<Setting>,
    pub chunking: ChunkingConfig,
    pub generator: BackendConfig,
    pub judge: BackendConfig,
    /// Fact decomposition backend; the judge when unset.
    pub decomposer: Option<BackendConfig>,
    pub concepts: ConceptsConfig,
    pub tasks: Vec<TaskEntry>,
    pub fairness: FairnessConfig,
    pub stages: StagesConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            input: PathBuf::new(),
            output_dir: PathBuf::from("out"),
            prompt_dir: None,
            dictionary: None,
            dedup: true,
            modes: vec![Mode::ByNote],
            prompts: vec!["high_quality".into()],
            rounds: 1,
            n_seeds: 5,
            settings: vec![Setting::Trtr, Setting::Tsts],
            chunking: ChunkingConfig::default(),
            generator: BackendConfig::default(),
            judge: BackendConfig::default(),
            decomposer: None,
            concepts: ConceptsConfig::default(),
            tasks: Vec::new(),
            fairness: FairnessConfig::default(),
            stages: StagesConfig::default(),
        }
    }
}

fn require_file(what: &str, path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::Config(format!("{what} not found: {}", path.display())))
    }
}

impl PipelineConfig {
    /// Parses a config file, resolves relative paths against its directory,
    /// inlines task and fairness-spec files, and validates.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg: PipelineConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.resolve(path.parent().unwrap_or(Path::new(".")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Makes relative paths relative to `base` and inlines referenced
    /// task and spec files.
    pub fn resolve(&mut self, base: &Path) -> Result<()> {
        let join = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        join(&mut self.input);
        join(&mut self.output_dir);
        for p in [
            &mut self.prompt_dir,
            &mut self.dictionary,
            &mut self.chunking.abbreviations,
            &mut self.fairness.specs_file,
        ]
        .into_iter()
        .flatten()
        {
            join(p);
        }
        self.generator.resolve_paths(base);
        self.judge.resolve_paths(base);
        if let Some(d) = &mut self.decomposer {
            d.resolve_paths(base);
        }
        for entry in &mut self.tasks {
            if let TaskEntry::File { file } = entry {
                let path = if file.is_relative() { base.join(&*file) } else { file.clone() };
                require_file("task file", &path)?;
                *entry = TaskEntry::Inline(TaskSpec::from_toml_file(&path)?);
            }
        }
        if let Some(path) = self.fairness.specs_file.take() {
            require_file("fairness spec file", &path)?;
            self.fairness.specs.extend(fairness::read_specs(&path)?);
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        require_file("input corpus", &self.input)?;
        if let Some(d) = &self.dictionary {
            require_file("concept dictionary", d)?;
        }
        if let Some(a) = &self.chunking.abbreviations {
            require_file("abbreviation list", a)?;
        }
        if let Some(dir) = &self.prompt_dir {
            if !dir.is_dir() {
                return Err(Error::Config(format!("prompt directory not found: {}", dir.display())));
            }
        }
        for (name, b) in self.backends() {
            if let Some(script) = &b.scripted.script {
                require_file(&format!("{name} script"), script)?;
            }
            b.validate()?;
        }
        if self.modes.is_empty() || self.prompts.is_empty() {
            return Err(Error::Config("at least one mode and one prompt are required".into()));
        }
        if self.rounds == 0 {
            return Err(Error::Config("rounds must be >= 1".into()));
        }
        if self.n_seeds == 0 {
            return Err(Error::Config("n_seeds must be >= 1".into()));
        }
        if self.chunking.target_words == 0 {
            return Err(Error::Config("chunking.target_words must be >= 1".into()));
        }
        if !(self.concepts.threshold > 0.0 && self.concepts.threshold <= 1.0) {
            return Err(Error::Config(format!("concepts.threshold {} outside (0, 1]", self.concepts.threshold)));
        }
        let mut names = std::collections::BTreeSet::new();
        for task in self.task_specs()? {
            task.validate()?;
            if !names.insert(task.name.clone()) {
                return Err(Error::Config(format!("duplicate task name `{}`", task.name)));
            }
        }
        for p in &self.prompts {
            PromptTemplate::resolve(p, self.prompt_dir.as_deref())?;
        }
        Ok(())
    }

    fn backends(&self) -> Vec<(&'static str, &BackendConfig)> {
        let mut out = vec![("generator", &self.generator), ("judge", &self.judge)];
        if let Some(d) = &self.decomposer {
            out.push(("decomposer", d));
        }
        out
    }

    pub fn task_specs(&self) -> Result<Vec<&TaskSpec>> {
        self.tasks
            .iter()
            .map(|t| match t {
                TaskEntry::Inline(spec) => Ok(spec),
                TaskEntry::File { file } => Err(Error::Config(format!(
                    "task file {} not resolved; load the config with PipelineConfig::load",
                    file.display()
                ))),
            })
            .collect()
    }

    /// Seeds used by every downstream experiment.
    pub fn seeds(&self) -> Vec<u64> {
        (0..self.n_seeds as u64).map(|i| self.seed.wrapping_add(i)).collect()
    }

    /// Digest of everything that influences results: the configuration
    /// with paths replaced by digests of the files they point to. The
    /// output directory and log paths do not take part.
    pub fn config_hash(&self) -> Result<String> {
        let mut c = self.clone();
        let mut files: BTreeMap<String, String> = BTreeMap::new();
        files.insert("input".into(), file_digest(&self.input)?);
        if let Some(d) = c.dictionary.take() {
            files.insert("dictionary".into(), file_digest(&d)?);
            c.dictionary = Some(PathBuf::from("<digest>"));
        }
        if let Some(a) = c.chunking.abbreviations.take() {
            files.insert("abbreviations".into(), file_digest(&a)?);
            c.chunking.abbreviations = Some(PathBuf::from("<digest>"));
        }
        for p in &self.prompts {
            let t = PromptTemplate::resolve(p, self.prompt_dir.as_deref())?;
            files.insert(format!("prompt:{p}"), digest_hex(serde_json::to_string(&t)?.as_bytes()));
        }
        let mut backends = vec![&mut c.generator, &mut c.judge];
        if let Some(d) = c.decomposer.as_mut() {
            backends.push(d);
        }
        for b in backends {
            if let Some(s) = b.scripted.script.take() {
                files.insert(format!("script:{}", s.display()), file_digest(&s)?);
                b.scripted.script = Some(PathBuf::from("<digest>"));
            }
            b.log_path = None;
        }
        let scripts: Vec<String> = files.keys().filter(|k| k.starts_with("script:")).cloned().collect();
        for (i, k) in scripts.into_iter().enumerate() {
            let v = files.remove(&k).expect("present");
            files.insert(format!("script#{i}"), v);
        }
        c.input = PathBuf::from("<digest>");
        c.output_dir = PathBuf::new();
        c.prompt_dir = None;
        let blob = serde_json::to_string(&json!({ "config": c, "files": files }))?;
        Ok(digest_hex(blob.as_bytes())[..16].to_string())
    }
}

fn digest_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn file_digest(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(digest_hex(&bytes))
}

/// Content id of a corpus: digest of its JSONL serialization.
pub fn corpus_id(corpus: &Corpus) -> String {
    let mut h = Sha256::new();
    for d in &corpus.documents {
        h.update(serde_json::to_vec(d).expect("documents serialize"));
        h.update(b"\n");
    }
    let hex: String = h.finalize().iter().map(|b| format!("{b:02x}")).collect();
    format!("sha256:{}", &hex[..16])
}

// ---------------------------------------------------------------------------
// report types

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolInfo {
    pub name: String,
    pub version: String,
}

impl Default for ToolInfo {
    fn default() -> Self {
        ToolInfo {
            name: TOOL_NAME.into(),
            version: TOOL_VERSION.into(),
        }
    }
}

/// Inputs a sub-report was computed from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub human_corpus: String,
    pub synthetic_corpus: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSummary {
    pub corpus_id: String,
    pub documents: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub unsplit: usize,
    pub duplicates_dropped: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairingSummary {
    pub pairs: usize,
    pub unmatched_human: usize,
    pub dangling_synthetic: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntrinsicSummary {
    pub provenance: Provenance,
    pub pairs: usize,
    pub rouge1: Prf,
    pub rouge2: Prf,
    pub rouge_l: Prf,
    pub human: StatsSummary,
    pub synthetic: StatsSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptSummary {
    pub provenance: Provenance,
    pub pairs: usize,
    pub medcon: Prf,
    pub top_added: Vec<TypeTally>,
    pub top_omitted: Vec<TypeTally>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactSummary {
    pub provenance: Provenance,
    pub notes: usize,
    pub macro_precision: Option<f64>,
    pub macro_recall: Option<f64>,
    pub f1: Option<f64>,
    pub mean_synthetic_facts: Option<f64>,
    pub mean_human_facts: Option<f64>,
    pub excluded_pairs: usize,
    pub failed_notes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub provenance: Provenance,
    pub report: ExperimentReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FairnessRecord {
    pub provenance: Provenance,
    pub task: String,
    pub setting: Setting,
    pub report: FairnessReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageError {
    pub stage: String,
    pub class: String,
    pub message: String,
}

impl StageError {
    fn new(stage: &str, e: &Error) -> Self {
        StageError {
            stage: stage.to_string(),
            class: match e.class() {
                ErrorClass::Usage => "usage",
                ErrorClass::Data => "data",
                ErrorClass::Backend => "backend",
            }
            .into(),
            message: e.to_string(),
        }
    }
}

/// Everything computed for one note source: the human notes, or one
/// (mode, prompt, round) synthetic variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantReport {
    pub key: String,
    pub source: Source,
    pub mode: Option<Mode>,
    pub prompt: Option<String>,
    pub round: u32,
    pub provenance: Provenance,
    pub generation: Option<RephraseRun>,
    pub pairing: Option<PairingSummary>,
    pub intrinsic: Option<IntrinsicSummary>,
    pub concepts: Option<ConceptSummary>,
    pub facts: Option<FactSummary>,
    pub experiments: Vec<ExperimentRecord>,
    pub fairness: Vec<FairnessRecord>,
    pub errors: Vec<StageError>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MasterReport {
    pub tool: ToolInfo,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub design: BTreeMap<String, serde_json::Value>,
    pub human: Option<CorpusSummary>,
    pub variants: Vec<VariantReport>,
}

impl MasterReport {
    pub fn empty() -> Self {
        MasterReport {
            tool: ToolInfo::default(),
            config_hash: String::new(),
            seeds: Vec::new(),
            design: BTreeMap::new(),
            human: None,
            variants: Vec::new(),
        }
    }

    pub fn read(path: &Path) -> Result<Self> {
        read_json(path)
    }

    /// Stage errors across all variants, as `(variant key, error)`.
    pub fn errors(&self) -> Vec<(&str, &StageError)> {
        self.variants
            .iter()
            .flat_map(|v| v.errors.iter().map(move |e| (v.key.as_str(), e)))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageState {
    Computed,
    Resumed,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageStatus {
    pub stage: String,
    pub state: StageState,
    pub elapsed_ms: u64,
}

/// Timing and resume information, kept apart from the report so the
/// report itself is reproducible.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub tool: ToolInfo,
    pub config_hash: String,
    pub started_at_unix: u64,
    pub finished_at_unix: u64,
    pub elapsed_ms: u64,
    /// Whether artifacts of an earlier run with a different config hash
    /// were discarded.
    pub discarded_stale_artifacts: bool,
    pub stages: Vec<StageStatus>,
}

impl RunMetadata {
    pub fn count(&self, state: StageState) -> usize {
        self.stages.iter().filter(|s| s.state == state).count()
    }
}

#[derive(Debug, Clone)]
pub struct PipelineRun {
    pub report: MasterReport,
    pub metadata: RunMetadata,
}

// ---------------------------------------------------------------------------
// artifacts

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        line: e.line(),
        msg: e.to_string(),
    })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ExperimentArtifact {
    report: ExperimentReport,
    predictions: Vec<Prediction>,
}

fn now_unix() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

struct Runner {
    root: PathBuf,
    statuses: Vec<StageStatus>,
}

impl Runner {
    fn record(&mut self, stage: &str, state: StageState, start: Instant) {
        self.statuses.push(StageStatus {
            stage: stage.to_string(),
            state,
            elapsed_ms: start.elapsed().as_millis() as u64,
        });
    }

    /// Loads `artifact` unless `stale`, otherwise computes and writes it.
    /// Returns the value and whether it was computed in this run.
    fn stage<T: Serialize + DeserializeOwned>(
        &mut self,
        stage: &str,
        artifact: &Path,
        stale: bool,
        compute: impl FnOnce() -> Result<T>,
    ) -> Result<(T, bool)> {
        let start = Instant::now();
        if !stale && artifact.exists() {
            match read_json(artifact) {
                Ok(v) => {
                    self.record(stage, StageState::Resumed, start);
                    return Ok((v, false));
                }
                Err(e) => log::warn!("{stage}: unreadable artifact, recomputing: {e}"),
            }
        }
        log::info!("{stage}: computing");
        match compute().and_then(|v| write_json(artifact, &v).map(|_| v)) {
            Ok(v) => {
                self.record(stage, StageState::Computed, start);
                Ok((v, true))
            }
            Err(e) => {
                log::error!("{stage}: {e}");
                self.record(stage, StageState::Failed, start);
                Err(e)
            }
        }
    }
}

// ---------------------------------------------------------------------------
// orchestration

struct Resources<'a> {
    cfg: &'a PipelineConfig,
    hash: String,
    seeds: Vec<u64>,
    dict: ConceptDictionary,
    checker: FactChecker,
    tasks: Vec<&'a TaskSpec>,
}

fn build_dictionary(cfg: &PipelineConfig) -> Result<ConceptDictionary> {
    let mut dict = match &cfg.dictionary {
        Some(p) => ConceptDictionary::load(p)?,
        None => ConceptDictionary::toy(),
    };
    dict = dict.with_threshold(cfg.concepts.threshold)?.with_max_window(cfg.concepts.max_window)?;
    if let Some(w) = &cfg.concepts.whitelist {
        dict = dict.with_whitelist(w.iter().cloned());
    }
    Ok(dict)
}

fn seeded(b: &BackendConfig, seed: u64) -> BackendConfig {
    let mut b = b.clone();
    b.seed.get_or_insert(seed);
    b
}

fn design_knobs(cfg: &PipelineConfig, dict: &ConceptDictionary, tasks: &[&TaskSpec]) -> BTreeMap<String, serde_json::Value> {
    let mut knobs = BTreeMap::new();
    knobs.insert("intrinsic".into(), json!(IntrinsicMetadata::default()));
    knobs.insert(
        "chunking".into(),
        json!({
            "target_words": cfg.chunking.target_words,
            "separator": CHUNK_SEPARATOR,
            "extra_abbreviations": cfg.chunking.abbreviations.is_some(),
        }),
    );
    knobs.insert(
        "generation".into(),
        json!({
            "modes": cfg.modes,
            "prompts": cfg.prompts,
            "rounds": cfg.rounds,
            "temperature": cfg.generator.temperature.unwrap_or(crate::gateway::DEFAULT_TEMPERATURE),
            "top_p": cfg.generator.top_p.unwrap_or(crate::gateway::DEFAULT_TOP_P),
            "seed": cfg.generator.seed.unwrap_or(cfg.seed),
            "token_budget": TokenBudget::default(),
        }),
    );
    knobs.insert(
        "concepts".into(),
        json!({
            "dictionary_terms": dict.len(),
            "bundled_dictionary": cfg.dictionary.is_none(),
            "similarity": "character trigram Jaccard, space padded",
            "threshold": dict.similarity_threshold,
            "max_window_tokens": dict.max_window_tokens,
            "whitelist": dict.group_whitelist,
        }),
    );
    knobs.insert(
        "facts".into(),
        json!({
            "precision_premise": "human note",
            "recall_premise": "synthetic fact set",
            "reask_on_parse_failure": 1,
            "averaging": "macro over notes; F1 is the harmonic mean of the macro averages",
            "judge_max_tokens": crate::factcheck::DEFAULT_JUDGE_MAX_TOKENS,
        }),
    );
    knobs.insert(
        "downstream".into(),
        json!({
            "classifier": "TF-IDF + one-vs-rest logistic regression",
            "settings": cfg.settings,
            "tasks": tasks.iter().map(|t| json!({
                "name": t.name,
                "kind": t.kind,
                "rare_threshold": t.rare_threshold,
                "n_boot": t.n_boot,
                "threshold": t.threshold,
                "training": t.training,
            })).collect::<Vec<_>>(),
        }),
    );
    knobs.insert(
        "fairness".into(),
        json!({
            "aaod": "0.5 * (|TPR_a - TPR_b| + |FPR_a - FPR_b|)",
            "spd": "|P(pred=1 | a) - P(pred=1 | b)|",
            "binarization": match cfg.fairness.threshold {
                Some(t) => format!("probability >= {t}"),
                None => "experiment decision threshold".to_string(),
            },
            "specs": cfg.fairness.specs,
        }),
    );
    knobs
}

fn human_summary(corpus: &Corpus, duplicates_dropped: usize) -> CorpusSummary {
    CorpusSummary {
        corpus_id: corpus_id(corpus),
        documents: corpus.len(),
        train: corpus.split(Split::Train).count(),
        val: corpus.split(Split::Val).count(),
        test: corpus.split(Split::Test).count(),
        unsplit: corpus.split(Split::None).count(),
        duplicates_dropped,
    }
}

fn variant_key(mode: Mode, prompt: &str, round: u32) -> String {
    format!("{mode}_{prompt}_r{round}")
}

/// Runs every configured stage, writing artifacts and the final reports
/// (`report.json`, `report.csv`, `report.md`, `run_metadata.json`) under
/// the output directory.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<PipelineRun> {
    cfg.validate()?;
    let started = now_unix();
    let clock = Instant::now();
    let hash = cfg.config_hash()?;
    let out = &cfg.output_dir;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let root = out.join("artifacts");
    let hash_file = root.join("config_hash");
    let previous = std::fs::read_to_string(&hash_file).ok();
    let discarded = match &previous {
        Some(h) if h.trim() != hash => {
            log::warn!("config hash changed ({} -> {hash}); discarding old artifacts", h.trim());
            std::fs::remove_dir_all(&root).map_err(|e| Error::io(&root, e))?;
            true
        }
        _ => false,
    };
    std::fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
    std::fs::write(&hash_file, format!("{hash}\n")).map_err(|e| Error::io(&hash_file, e))?;

    let tasks = cfg.task_specs()?;
    let dict = build_dictionary(cfg)?;
    let judge = seeded(&cfg.judge, cfg.seed).build()?;
    let decomposer = seeded(cfg.decomposer.as_ref().unwrap_or(&cfg.judge), cfg.seed).build()?;
    let generator = seeded(&cfg.generator, cfg.seed).build()?;
    let mut chunker = Chunker {
        target_words: cfg.chunking.target_words,
        ..Chunker::default()
    };
    if let Some(path) = &cfg.chunking.abbreviations {
        chunker.segmenter = Segmenter::from_file(path)?;
    }
    let res = Resources {
        cfg,
        hash: hash.clone(),
        seeds: cfg.seeds(),
        checker: FactChecker::new(decomposer, judge),
        dict,
        tasks,
    };
    let mut runner = Runner {
        root: root.clone(),
        statuses: Vec::new(),
    };

    // ingest
    let human_path = root.join("corpus").join("human.jsonl");
    let human_summary_path = root.join("corpus").join("human.summary.json");
    let stale = !human_path.exists();
    let (summary, human_fresh) = runner.stage("ingest", &human_summary_path, stale, || {
        let raw = corpus::ingest(&cfg.input)?;
        let n = raw.len();
        let corpus = if cfg.dedup { corpus::dedup_exact(raw) } else { raw };
        corpus.write_jsonl(&human_path)?;
        Ok(human_summary(&corpus, n - corpus.len()))
    })?;
    let human = corpus::ingest(&human_path)?;
    let human_id = corpus_id(&human);

    let mut variants = vec![evaluate_human(&mut runner, &res, &human, &human_id, human_fresh)];

    for &mode in &cfg.modes {
        for prompt_name in &cfg.prompts {
            let prompt = PromptTemplate::resolve(prompt_name, cfg.prompt_dir.as_deref())?;
            let mut rephraser = Rephraser::new(generator.clone(), prompt, mode);
            rephraser.chunker = chunker.clone();
            let mut previous = human.clone();
            let mut stale = human_fresh;
            for round in 1..=cfg.rounds {
                let key = variant_key(mode, prompt_name, round);
                let corpus_path = root.join("synthetic").join(format!("{key}.jsonl"));
                let run_path = root.join("synthetic").join(format!("{key}.run.json"));
                let generated = runner.stage(
                    &format!("rephrase/{key}"),
                    &run_path,
                    stale || !corpus_path.exists(),
                    || {
                        let (syn, run) = rephraser.rephrase_corpus(&previous);
                        syn.write_jsonl(&corpus_path)?;
                        Ok(run)
                    },
                );
                let (run, fresh) = match generated {
                    Ok(r) => r,
                    Err(e) => {
                        let mut v = empty_variant(&key, Source::Synthetic, &res.hash, &human_id, None);
                        (v.mode, v.prompt, v.round) = (Some(mode), Some(prompt_name.clone()), round);
                        v.errors.push(StageError::new("rephrase", &e));
                        variants.push(v);
                        break;
                    }
                };
                stale = stale || fresh;
                let synthetic = corpus::ingest(&corpus_path)?;
                let mut v = evaluate_variant(&mut runner, &res, &human, &human_id, &synthetic, &key, stale);
                (v.mode, v.prompt, v.round) = (Some(mode), Some(prompt_name.clone()), round);
                v.generation = Some(run);
                variants.push(v);
                previous = synthetic;
            }
        }
    }

    let report = MasterReport {
        tool: ToolInfo::default(),
        config_hash: hash.clone(),
        seeds: res.seeds.clone(),
        design: design_knobs(cfg, &res.dict, &res.tasks),
        human: Some(summary),
        variants,
    };
    emit(&report, out, &Format::ALL)?;
    let metadata = RunMetadata {
        tool: ToolInfo::default(),
        config_hash: hash,
        started_at_unix: started,
        finished_at_unix: now_unix(),
        elapsed_ms: clock.elapsed().as_millis() as u64,
        discarded_stale_artifacts: discarded,
        stages: runner.statuses,
    };
    write_json(&out.join("run_metadata.json"), &metadata)?;
    Ok(PipelineRun { report, metadata })
}

fn empty_variant(key: &str, source: Source, hash: &str, human_id: &str, synthetic_id: Option<&str>) -> VariantReport {
    VariantReport {
        key: key.to_string(),
        source,
        mode: None,
        prompt: None,
        round: 0,
        provenance: Provenance {
            config_hash: hash.to_string(),
            human_corpus: human_id.to_string(),
            synthetic_corpus: synthetic_id.map(str::to_string),
        },
        generation: None,
        pairing: None,
        intrinsic: None,
        concepts: None,
        facts: None,
        experiments: Vec::new(),
        fairness: Vec::new(),
        errors: Vec::new(),
    }
}

/// Experiments for `settings` and fairness for the binary ones.
fn downstream_stages(
    runner: &mut Runner,
    res: &Resources,
    v: &mut VariantReport,
    human: &Corpus,
    synthetic: Option<&Corpus>,
    settings: &[Setting],
    stale: bool,
) {
    let cfg = res.cfg;
    if !cfg.stages.downstream {
        return;
    }
    let dir = runner.root.join("eval").join(&v.key);
    for task in &res.tasks {
        for &setting in settings {
            let name = format!("{}_{setting}", task.name);
            let stage = format!("downstream/{}/{name}", v.key);
            let result = runner.stage(&stage, &dir.join("downstream").join(format!("{name}.json")), stale, || {
                let out = downstream::run_experiment(task, human, synthetic, setting, &res.seeds)?;
                let pred_dir = dir.join("downstream");
                std::fs::create_dir_all(&pred_dir).map_err(|e| Error::io(&pred_dir, e))?;
                downstream::write_predictions(
                    &dir.join("downstream").join(format!("{name}.predictions.jsonl")),
                    &out.predictions,
                )?;
                Ok(ExperimentArtifact {
                    report: out.report,
                    predictions: out.predictions,
                })
            });
            let (artifact, fresh) = match result {
                Ok(r) => r,
                Err(e) => {
                    v.errors.push(StageError::new(&format!("downstream/{name}"), &e));
                    continue;
                }
            };
            v.experiments.push(ExperimentRecord {
                provenance: v.provenance.clone(),
                report: artifact.report,
            });
            if !cfg.stages.fairness || task.kind != TaskKind::Binary || cfg.fairness.specs.is_empty() {
                continue;
            }
            let lookup = match setting {
                Setting::Tsts => synthetic.unwrap_or(human),
                _ => human,
            };
            let stage = format!("fairness/{}/{name}", v.key);
            let result = runner.stage(&stage, &dir.join("fairness").join(format!("{name}.json")), stale || fresh, || {
                fairness::fairness_report(&artifact.predictions, lookup, &cfg.fairness.specs, cfg.fairness.threshold)
            });
            match result {
                Ok((report, _)) => v.fairness.push(FairnessRecord {
                    provenance: v.provenance.clone(),
                    task: task.name.clone(),
                    setting,
                    report,
                }),
                Err(e) => v.errors.push(StageError::new(&format!("fairness/{name}"), &e)),
            }
        }
    }
}

fn evaluate_human(runner: &mut Runner, res: &Resources, human: &Corpus, human_id: &str, stale: bool) -> VariantReport {
    let mut v = empty_variant("human", Source::Human, &res.hash, human_id, None);
    let settings: Vec<Setting> = res.cfg.settings.iter().copied().filter(|s| *s == Setting::Trtr).collect();
    downstream_stages(runner, res, &mut v, human, None, &settings, stale);
    v
}

fn evaluate_variant(
    runner: &mut Runner,
    res: &Resources,
    human: &Corpus,
    human_id: &str,
    synthetic: &Corpus,
    key: &str,
    stale: bool,
) -> VariantReport {
    let cfg = res.cfg;
    let syn_id = corpus_id(synthetic);
    let mut v = empty_variant(key, Source::Synthetic, &res.hash, human_id, Some(&syn_id));
    let prov = v.provenance.clone();
    let pairing = corpus::pair_lenient(human, synthetic);
    if !pairing.dangling.is_empty() {
        let first = pairing.dangling[0];
        let e = Error::DanglingOrigin {
            id: first.id.clone(),
            origin: first.origin_id().to_string(),
        };
        v.errors.push(StageError {
            message: format!("{} synthetic document(s) excluded; first: {e}", pairing.dangling.len()),
            ..StageError::new("pairing", &e)
        });
    }
    v.pairing = Some(PairingSummary {
        pairs: pairing.pairs.len(),
        unmatched_human: pairing.unmatched.len(),
        dangling_synthetic: pairing.dangling.iter().map(|d| d.id.clone()).collect(),
    });
    let pairs = &pairing.pairs;
    let dir = runner.root.join("eval").join(key);
    let no_pairs = || Error::InvalidInput("no human/synthetic pairs to evaluate".into());

    if cfg.stages.intrinsic {
        let result = runner.stage(&format!("intrinsic/{key}"), &dir.join("intrinsic.json"), stale, || {
            if pairs.is_empty() {
                return Err(no_pairs());
            }
            let report = intrinsic::evaluate(pairs);
            report.write_csv(&dir.join("intrinsic"))?;
            Ok(report)
        });
        match result {
            Ok((r, _)) => {
                v.intrinsic = Some(IntrinsicSummary {
                    provenance: prov.clone(),
                    pairs: r.pairs.len(),
                    rouge1: r.rouge1,
                    rouge2: r.rouge2,
                    rouge_l: r.rouge_l,
                    human: r.human,
                    synthetic: r.synthetic,
                })
            }
            Err(e) => v.errors.push(StageError::new("intrinsic", &e)),
        }
    }

    if cfg.stages.concepts {
        let result = runner.stage(&format!("concepts/{key}"), &dir.join("concepts.json"), stale, || {
            if pairs.is_empty() {
                return Err(no_pairs());
            }
            let report = concepts::evaluate(pairs, &res.dict);
            report.write_csv(&dir.join("concepts"))?;
            Ok(report)
        });
        match result {
            Ok((r, _)) => {
                v.concepts = Some(ConceptSummary {
                    provenance: prov.clone(),
                    pairs: r.pairs.len(),
                    medcon: r.medcon,
                    top_added: r.tui_diff.added.into_iter().take(TOP_TYPES).collect(),
                    top_omitted: r.tui_diff.omitted.into_iter().take(TOP_TYPES).collect(),
                })
            }
            Err(e) => v.errors.push(StageError::new("concepts", &e)),
        }
    }

    if cfg.stages.facts {
        let facts_dir = dir.join("facts");
        let result = runner.stage(&format!("facts/{key}"), &facts_dir.join("report.json"), stale, || {
            if pairs.is_empty() {
                return Err(no_pairs());
            }
            let run = res.checker.score_corpus(pairs);
            run.write(&facts_dir)?;
            Ok(run.report)
        });
        match result {
            Ok((r, _)) => {
                if r.failed_notes > 0 {
                    v.errors.push(StageError {
                        stage: "facts".into(),
                        class: "backend".into(),
                        message: format!("{} note(s) could not be decomposed", r.failed_notes),
                    });
                }
                v.facts = Some(FactSummary {
                    provenance: prov.clone(),
                    notes: r.notes.len(),
                    macro_precision: r.macro_precision,
                    macro_recall: r.macro_recall,
                    f1: r.f1,
                    mean_synthetic_facts: r.mean_synthetic_facts,
                    mean_human_facts: r.mean_human_facts,
                    excluded_pairs: r.excluded_pairs,
                    failed_notes: r.failed_notes,
                })
            }
            Err(e) => v.errors.push(StageError::new("facts", &e)),
        }
    }

    let settings: Vec<Setting> = cfg.settings.iter().copied().filter(|s| *s != Setting::Trtr).collect();
    downstream_stages(runner, res, &mut v, human, Some(synthetic), &settings, stale);
    v
}

// ---------------------------------------------------------------------------
// emit

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Json,
    Csv,
    Markdown,
}

impl Format {
    pub const ALL: [Format; 3] = [Format::Json, Format::Csv, Format::Markdown];

    pub fn file_name(&self) -> &'static str {
        match self {
            Format::Json => "report.json",
            Format::Csv => "report.csv",
            Format::Markdown => "report.md",
        }
    }
}

impl std::str::FromStr for Format {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "json" => Ok(Format::Json),
            "csv" => Ok(Format::Csv),
            "md" | "markdown" => Ok(Format::Markdown),
            _ => Err(Error::Config(format!("unknown format {s:?} (json, csv, markdown)"))),
        }
    }
}

/// Writes the report in each format into `dir`; returns the paths written.
pub fn emit(report: &MasterReport, dir: &Path, formats: &[Format]) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    for f in formats {
        let path = dir.join(f.file_name());
        match f {
            Format::Json => write_json(&path, report)?,
            Format::Csv => write_csv(report, &path)?,
            Format::Markdown => std::fs::write(&path, to_markdown(report)).map_err(|e| Error::io(&path, e))?,
        }
        written.push(path);
    }
    Ok(written)
}

pub const CSV_HEADER: [&str; 10] = ["variant", "source", "mode", "prompt", "round", "angle", "name", "value", "lo", "hi"];

/// One long-format row per scalar: `angle` is intrinsic, concepts, facts,
/// downstream or fairness; `name` is a slash-separated path.
pub fn csv_rows(report: &MasterReport) -> Vec<[String; 10]> {
    let mut rows = Vec::new();
    let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
    for v in &report.variants {
        let source = match v.source {
            Source::Human => "human",
            Source::Synthetic => "synthetic",
        };
        let mode = v.mode.map(|m| m.to_string()).unwrap_or_default();
        let prompt = v.prompt.clone().unwrap_or_default();
        let mut push = |angle: &str, name: String, value: Option<f64>, lo: Option<f64>, hi: Option<f64>| {
            rows.push([
                v.key.clone(),
                source.to_string(),
                mode.clone(),
                prompt.clone(),
                v.round.to_string(),
                angle.to_string(),
                name,
                opt(value),
                opt(lo),
                opt(hi),
            ]);
        };
        let prf = |push: &mut dyn FnMut(&str, String, Option<f64>, Option<f64>, Option<f64>), angle: &str, name: &str, p: &Prf| {
            push(angle, format!("{name}/precision"), Some(p.precision), None, None);
            push(angle, format!("{name}/recall"), Some(p.recall), None, None);
            push(angle, format!("{name}/f1"), Some(p.f1), None, None);
        };
        if let Some(i) = &v.intrinsic {
            prf(&mut push, "intrinsic", "rouge1", &i.rouge1);
            prf(&mut push, "intrinsic", "rouge2", &i.rouge2);
            prf(&mut push, "intrinsic", "rouge_l", &i.rouge_l);
            for (side, s) in [("human", &i.human), ("synthetic", &i.synthetic)] {
                push("intrinsic", format!("{side}/note_words"), s.note_words, None, None);
                push("intrinsic", format!("{side}/mean_sentence_words"), s.mean_sentence_words, None, None);
                push("intrinsic", format!("{side}/fk_grade"), s.fk_grade, None, None);
                push("intrinsic", format!("{side}/smog"), s.smog, None, None);
            }
        }
        if let Some(c) = &v.concepts {
            prf(&mut push, "concepts", "medcon", &c.medcon);
            for (side, tallies) in [("added", &c.top_added), ("omitted", &c.top_omitted)] {
                for t in tallies {
                    push("concepts", format!("{side}/{}", t.type_name), Some(t.percent), None, None);
                }
            }
        }
        if let Some(f) = &v.facts {
            push("facts", "precision".into(), f.macro_precision, None, None);
            push("facts", "recall".into(), f.macro_recall, None, None);
            push("facts", "f1".into(), f.f1, None, None);
            push("facts", "excluded_pairs".into(), Some(f.excluded_pairs as f64), None, None);
        }
        for e in &v.experiments {
            for (metric, m) in &e.report.metrics {
                push("downstream", format!("{}/{}/{metric}", e.report.task, e.report.setting), m.point, m.lo, m.hi);
            }
        }
        for f in &v.fairness {
            let base = format!("{}/{}", f.task, f.setting);
            push("fairness", format!("{base}/mean_aaod"), f.report.mean_aaod, None, None);
            push("fairness", format!("{base}/mean_spd"), f.report.mean_spd, None, None);
            push("fairness", format!("{base}/auroc"), f.report.auroc, None, None);
            for a in &f.report.attributes {
                push("fairness", format!("{base}/{}/aaod", a.spec.attribute), a.aaod, None, None);
                push("fairness", format!("{base}/{}/spd", a.spec.attribute), a.spd, None, None);
            }
        }
    }
    rows
}

fn write_csv(report: &MasterReport, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
    w.write_record(CSV_HEADER).map_err(|e| Error::csv(path, e))?;
    for row in csv_rows(report) {
        w.write_record(&row).map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn fmt(x: Option<f64>) -> String {
    x.map(|v| format!("{v:.4}")).unwrap_or_else(|| "n/a".into())
}

fn table(out: &mut String, title: &str, header: &[&str], rows: Vec<Vec<String>>) {
    out.push_str(&format!("## {title}\n\n| {} |\n|", header.join(" | ")));
    out.push_str(&"---|".repeat(header.len()));
    out.push('\n');
    for r in rows {
        out.push_str(&format!("| {} |\n", r.join(" | ")));
    }
    out.push('\n');
}

fn types(ts: &[TypeTally]) -> String {
    ts.iter().map(|t| format!("{} ({:.1}%)", t.type_name, t.percent)).collect::<Vec<_>>().join(", ")
}

/// Markdown summary with one table per evaluation angle.
pub fn to_markdown(report: &MasterReport) -> String {
    let mut out = format!("# Evaluation report\n\n{} {}", report.tool.name, report.tool.version);
    if !report.config_hash.is_empty() {
        out.push_str(&format!(", config `{}`", report.config_hash));
    }
    out.push_str("\n\n");
    let vs = &report.variants;

    let rows = vs
        .iter()
        .filter_map(|v| v.intrinsic.as_ref().map(|i| (v, i)))
        .map(|(v, i)| {
            vec![
                v.key.clone(),
                i.pairs.to_string(),
                fmt(Some(i.rouge1.f1)),
                fmt(Some(i.rouge2.f1)),
                fmt(Some(i.rouge_l.f1)),
                fmt(i.human.note_words),
                fmt(i.synthetic.note_words),
                fmt(i.human.fk_grade),
                fmt(i.synthetic.fk_grade),
                fmt(i.human.smog),
                fmt(i.synthetic.smog),
            ]
        })
        .collect();
    table(
        &mut out,
        "Intrinsic",
        &[
            "variant", "pairs", "ROUGE-1 F1", "ROUGE-2 F1", "ROUGE-L F1", "words (human)", "words (synthetic)",
            "FK (human)", "FK (synthetic)", "SMOG (human)", "SMOG (synthetic)",
        ],
        rows,
    );

    let rows = vs
        .iter()
        .filter_map(|v| v.concepts.as_ref().map(|c| (v, c)))
        .map(|(v, c)| {
            vec![
                v.key.clone(),
                c.pairs.to_string(),
                fmt(Some(c.medcon.precision)),
                fmt(Some(c.medcon.recall)),
                fmt(Some(c.medcon.f1)),
                types(&c.top_added),
                types(&c.top_omitted),
            ]
        })
        .collect();
    table(
        &mut out,
        "Concepts",
        &["variant", "pairs", "MedCON P", "MedCON R", "MedCON F1", "top added types", "top omitted types"],
        rows,
    );

    let rows = vs
        .iter()
        .filter_map(|v| v.facts.as_ref().map(|f| (v, f)))
        .map(|(v, f)| {
            vec![
                v.key.clone(),
                f.notes.to_string(),
                fmt(f.macro_precision),
                fmt(f.macro_recall),
                fmt(f.f1),
                fmt(f.mean_synthetic_facts),
                fmt(f.mean_human_facts),
                f.excluded_pairs.to_string(),
                f.failed_notes.to_string(),
            ]
        })
        .collect();
    table(
        &mut out,
        "Facts",
        &[
            "variant", "notes", "precision", "recall", "F1", "facts/note (synthetic)", "facts/note (human)",
            "excluded pairs", "failed notes",
        ],
        rows,
    );

    let rows = vs
        .iter()
        .flat_map(|v| v.experiments.iter().map(move |e| (v, e)))
        .flat_map(|(v, e)| {
            e.report.metrics.iter().map(move |(name, m)| {
                vec![
                    v.key.clone(),
                    e.report.task.clone(),
                    e.report.setting.to_string(),
                    name.clone(),
                    fmt(m.point),
                    format!("[{}, {}]", fmt(m.lo), fmt(m.hi)),
                ]
            })
        })
        .collect();
    table(&mut out, "Downstream", &["variant", "task", "setting", "metric", "value", "95% CI"], rows);

    let rows = vs
        .iter()
        .flat_map(|v| v.fairness.iter().map(move |f| (v, f)))
        .map(|(v, f)| {
            vec![
                v.key.clone(),
                f.task.clone(),
                f.setting.to_string(),
                fmt(f.report.auroc),
                fmt(f.report.mean_aaod),
                fmt(f.report.mean_spd),
            ]
        })
        .collect();
    table(&mut out, "Fairness", &["variant", "task", "setting", "AUROC", "mean AAOD", "mean SPD"], rows);

    let errors = report.errors();
    if !errors.is_empty() {
        out.push_str("## Stage errors\n\n");
        for (key, e) in errors {
            out.push_str(&format!("- {key} / {} ({}): {}\n", e.stage, e.class, e.message));
        }
        out.push('\n');
    }
    out
}
