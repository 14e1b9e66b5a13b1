use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use synthnote::chunker::{write_chunks_jsonl, Chunker, Segmenter, DEFAULT_TARGET_WORDS};
use synthnote::concepts::{self, ConceptDictionary};
use synthnote::corpus::{self, Corpus, Mode};
use synthnote::downstream::{self, Setting, TaskSpec};
use synthnote::error::ErrorClass;
use synthnote::factcheck::FactChecker;
use synthnote::fairness;
use synthnote::gateway::BackendConfig;
use synthnote::intrinsic;
use synthnote::pipeline::{self, write_json, Format, MasterReport, PipelineConfig};
use synthnote::rephraser::{PromptTemplate, RephraseRun, Rephraser};
use synthnote::{demo, Error, Result};

#[derive(Parser)]
#[command(name = "synthnote", version, about = "Rephrase clinical-style notes and evaluate the synthetic text")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate a JSONL corpus, normalize placeholders and drop exact duplicates.
    Ingest {
        #[arg(long = "in", alias = "input")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Keep exact-duplicate texts.
        #[arg(long)]
        no_dedup: bool,
    },
    /// Split every document into sentence-aligned chunks.
    Chunk {
        #[arg(long = "in", alias = "input")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_TARGET_WORDS)]
        target_words: usize,
        /// Extra abbreviations, one per line.
        #[arg(long)]
        abbreviations: Option<PathBuf>,
    },
    /// Rephrase a corpus; with --rounds N the output is the N-th round.
    Rephrase {
        #[command(flatten)]
        gen: GenArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        rounds: u32,
    },
    /// Repeated synthesis: write every round and a per-round drift summary.
    Iterate {
        #[command(flatten)]
        gen: GenArgs,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 3)]
        rounds: u32,
        /// Concept dictionary TSV for the drift summary (bundled toy dictionary by default).
        #[arg(long)]
        dictionary: Option<PathBuf>,
    },
    /// ROUGE and readability of synthetic notes against their human origins.
    EvalIntrinsic {
        #[command(flatten)]
        pair: PairArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Concept overlap (MedCON) and added/omitted semantic types.
    EvalConcepts {
        #[command(flatten)]
        pair: PairArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        dictionary: Option<PathBuf>,
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Atomic-fact precision and recall with an entailment judge.
    Factcheck {
        #[command(flatten)]
        pair: PairArgs,
        /// Judge backend config (TOML).
        #[arg(long)]
        judge: PathBuf,
        /// Decomposition backend config; the judge when omitted.
        #[arg(long)]
        decomposer: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Error annotations to attach (CSV: doc_id, side, index, fact, category, comment).
        #[arg(long)]
        annotations: Option<PathBuf>,
    },
    /// Train and test the TF-IDF + logistic-regression proxy in one setting.
    TrainDownstream {
        #[arg(long)]
        task: PathBuf,
        #[arg(long, default_value = "trtr")]
        setting: Setting,
        #[arg(long)]
        human: PathBuf,
        #[arg(long)]
        synthetic: Option<PathBuf>,
        /// Number of seeds.
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        /// First seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Seed-averaged test predictions (JSONL); next to --out by default.
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
    /// AAOD and |SPD| of binary predictions across subgroups.
    Fairness {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        specs: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Re-binarize probabilities at this threshold instead of the stored labels.
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Run the whole pipeline from a config file.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        output_dir: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        rounds: Option<u32>,
        #[arg(long)]
        n_seeds: Option<usize>,
    },
    /// Re-emit a report.json as JSON, CSV and/or markdown.
    Report {
        #[arg(long = "in", alias = "input")]
        input: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "json,csv,markdown")]
        format: Vec<Format>,
    },
    /// Write the bundled demo corpus and configuration files.
    Demo {
        #[arg(long)]
        out_dir: PathBuf,
    },
}

#[derive(Args)]
struct GenArgs {
    #[arg(long = "in", alias = "input")]
    input: PathBuf,
    /// Backend config (TOML); the echo mock when omitted.
    #[arg(long)]
    backend: Option<PathBuf>,
    #[arg(long, default_value = "by_note")]
    mode: Mode,
    #[arg(long, default_value = "high_quality")]
    prompt: String,
    /// Directory of `<name>.txt` prompt overrides.
    #[arg(long)]
    prompt_dir: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_TARGET_WORDS)]
    target_words: usize,
    /// Sampling seed passed to the backend.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct PairArgs {
    #[arg(long)]
    human: PathBuf,
    #[arg(long)]
    synthetic: PathBuf,
}

fn backend(path: Option<&Path>) -> Result<BackendConfig> {
    match path {
        Some(p) => BackendConfig::from_toml_file(p),
        None => Ok(BackendConfig::default()),
    }
}

impl GenArgs {
    fn rephraser(&self) -> Result<Rephraser> {
        let mut cfg = backend(self.backend.as_deref())?;
        if self.seed.is_some() {
            cfg.seed = self.seed;
        }
        let prompt = PromptTemplate::resolve(&self.prompt, self.prompt_dir.as_deref())?;
        let mut r = Rephraser::new(cfg.build()?, prompt, self.mode);
        r.chunker.target_words = self.target_words;
        Ok(r)
    }
}

fn report_run(run: &RephraseRun) {
    eprintln!(
        "round {}: {} of {} documents rephrased ({} failed, {} truncated)",
        run.round,
        run.documents_out,
        run.documents_in,
        run.failures.len(),
        run.truncated.len()
    );
    for f in &run.failures {
        log::warn!("{}: {}", f.doc_id, f.reason);
    }
}

fn load_pair(args: &PairArgs) -> Result<(Corpus, Corpus)> {
    Ok((corpus::ingest(&args.human)?, corpus::ingest(&args.synthetic)?))
}

fn paired<'a>(human: &'a Corpus, synthetic: &'a Corpus) -> corpus::Pairing<'a> {
    let p = corpus::pair_lenient(human, synthetic);
    if !p.dangling.is_empty() {
        log::warn!(
            "{} synthetic document(s) have no origin in the human corpus and are skipped (first: {})",
            p.dangling.len(),
            p.dangling[0].id
        );
    }
    p
}

fn dictionary(path: Option<&Path>, threshold: Option<f64>) -> Result<ConceptDictionary> {
    let dict = match path {
        Some(p) => ConceptDictionary::load(p)?,
        None => ConceptDictionary::toy(),
    };
    match threshold {
        Some(t) => dict.with_threshold(t),
        None => Ok(dict),
    }
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

#[derive(Serialize)]
struct DriftRow {
    round: u32,
    documents: usize,
    rouge1_f1: f64,
    rouge2_f1: f64,
    rouge_l_f1: f64,
    medcon_f1: f64,
    mean_words: Option<f64>,
    fk_grade: Option<f64>,
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::Ingest { input, out, no_dedup } => {
            let raw = corpus::ingest(&input)?;
            let n = raw.len();
            let c = if no_dedup { raw } else { corpus::dedup_exact(raw) };
            c.write_jsonl(&out)?;
            eprintln!("{} documents written ({} duplicates dropped)", c.len(), n - c.len());
        }
        Command::Chunk { input, out, target_words, abbreviations } => {
            if target_words == 0 {
                return Err(Error::Config("--target-words must be >= 1".into()));
            }
            let c = corpus::ingest(&input)?;
            let segmenter = match &abbreviations {
                Some(p) => Segmenter::from_file(p)?,
                None => Segmenter::default(),
            };
            let chunker = Chunker { segmenter, target_words };
            let chunks: Vec<_> = c.documents.iter().flat_map(|d| chunker.chunk_document(&d.id, &d.text)).collect();
            write_chunks_jsonl(&chunks, &out)?;
            eprintln!("{} chunks from {} documents", chunks.len(), c.len());
        }
        Command::Rephrase { gen, out, rounds } => {
            let c = corpus::ingest(&gen.input)?;
            let rounds = gen.rephraser()?.iterate(&c, rounds)?;
            for (_, run) in &rounds {
                report_run(run);
            }
            let (last, run) = rounds.last().expect("at least one round");
            last.write_jsonl(&out)?;
            write_json(&out.with_extension("run.json"), run)?;
        }
        Command::Iterate { gen, out_dir, rounds, dictionary: dict_path } => {
            let human = corpus::ingest(&gen.input)?;
            let dict = dictionary(dict_path.as_deref(), None)?;
            let mut drift = Vec::new();
            for (syn, run) in gen.rephraser()?.iterate(&human, rounds)? {
                report_run(&run);
                syn.write_jsonl(&out_dir.join(format!("round_{}.jsonl", run.round)))?;
                write_json(&out_dir.join(format!("round_{}.run.json", run.round)), &run)?;
                let p = paired(&human, &syn);
                let i = intrinsic::evaluate(&p.pairs);
                let c = concepts::evaluate(&p.pairs, &dict);
                drift.push(DriftRow {
                    round: run.round,
                    documents: syn.len(),
                    rouge1_f1: i.rouge1.f1,
                    rouge2_f1: i.rouge2.f1,
                    rouge_l_f1: i.rouge_l.f1,
                    medcon_f1: c.medcon.f1,
                    mean_words: i.synthetic.note_words,
                    fk_grade: i.synthetic.fk_grade,
                });
            }
            write_json(&out_dir.join("drift.json"), &drift)?;
            print_json(&drift)?;
        }
        Command::EvalIntrinsic { pair, out } => {
            let (h, s) = load_pair(&pair)?;
            let report = intrinsic::evaluate(&paired(&h, &s).pairs);
            write_json(&out.join("intrinsic.json"), &report)?;
            report.write_csv(&out)?;
            eprintln!(
                "ROUGE-1 {:.4}  ROUGE-2 {:.4}  ROUGE-L {:.4} over {} pairs",
                report.rouge1.f1,
                report.rouge2.f1,
                report.rouge_l.f1,
                report.pairs.len()
            );
        }
        Command::EvalConcepts { pair, out, dictionary: dict_path, threshold } => {
            let (h, s) = load_pair(&pair)?;
            let dict = dictionary(dict_path.as_deref(), threshold)?;
            let report = concepts::evaluate(&paired(&h, &s).pairs, &dict);
            write_json(&out.join("concepts.json"), &report)?;
            report.write_csv(&out)?;
            eprintln!(
                "MedCON P {:.4}  R {:.4}  F1 {:.4} over {} pairs",
                report.medcon.precision,
                report.medcon.recall,
                report.medcon.f1,
                report.pairs.len()
            );
        }
        Command::Factcheck { pair, judge, decomposer, out, annotations } => {
            let (h, s) = load_pair(&pair)?;
            let judge_cfg = BackendConfig::from_toml_file(&judge)?;
            let decomposer_cfg = match &decomposer {
                Some(p) => BackendConfig::from_toml_file(p)?,
                None => judge_cfg.clone(),
            };
            let checker = FactChecker::new(decomposer_cfg.build()?, judge_cfg.build()?);
            let mut run = checker.score_corpus(&paired(&h, &s).pairs);
            if let Some(path) = &annotations {
                let n = run.import_annotations(path)?;
                eprintln!("{n} annotations applied");
            }
            run.write(&out)?;
            if !run.report.annotations.is_empty() {
                run.export_annotations(&out.join("annotations.csv"))?;
            }
            let fmt = |x: Option<f64>| x.map_or("n/a".to_string(), |v| format!("{v:.4}"));
            eprintln!(
                "fact precision {}  recall {}  F1 {}  ({} excluded pairs, {} failed notes)",
                fmt(run.report.macro_precision),
                fmt(run.report.macro_recall),
                fmt(run.report.f1),
                run.report.excluded_pairs,
                run.report.failed_notes
            );
        }
        Command::TrainDownstream { task, setting, human, synthetic, seeds, seed, out, predictions } => {
            if seeds == 0 {
                return Err(Error::Config("--seeds must be >= 1".into()));
            }
            let task = TaskSpec::from_toml_file(&task)?;
            let human = corpus::ingest(&human)?;
            let synthetic = synthetic.as_deref().map(corpus::ingest).transpose()?;
            let seed_list: Vec<u64> = (0..seeds).map(|i| seed.wrapping_add(i)).collect();
            let result = downstream::run_experiment(&task, &human, synthetic.as_ref(), setting, &seed_list)?;
            write_json(&out, &result.report)?;
            let pred_path = predictions.unwrap_or_else(|| out.with_extension("predictions.jsonl"));
            downstream::write_predictions(&pred_path, &result.predictions)?;
            for (name, m) in &result.report.metrics {
                let fmt = |x: Option<f64>| x.map_or("n/a".to_string(), |v| format!("{v:.4}"));
                eprintln!("{name}: {} [{}, {}]", fmt(m.point), fmt(m.lo), fmt(m.hi));
            }
        }
        Command::Fairness { predictions, corpus: corpus_path, specs, out, threshold } => {
            let preds = downstream::read_predictions(&predictions)?;
            let c = corpus::ingest(&corpus_path)?;
            let specs = fairness::read_specs(&specs)?;
            let report = fairness::fairness_report(&preds, &c, &specs, threshold)?;
            write_json(&out, &report)?;
            print_json(&report)?;
        }
        Command::Run { config, output_dir, seed, rounds, n_seeds } => {
            let mut cfg = PipelineConfig::load(&config)?;
            if let Some(d) = output_dir {
                cfg.output_dir = d;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(r) = rounds {
                cfg.rounds = r;
            }
            if let Some(n) = n_seeds {
                cfg.n_seeds = n;
            }
            let run = pipeline::run_pipeline(&cfg)?;
            eprintln!(
                "{} variants, {} stages computed, {} resumed, {} failed; reports in {}",
                run.report.variants.len(),
                run.metadata.count(pipeline::StageState::Computed),
                run.metadata.count(pipeline::StageState::Resumed),
                run.metadata.count(pipeline::StageState::Failed),
                cfg.output_dir.display()
            );
            for (key, e) in run.report.errors() {
                eprintln!("  {key} / {}: {}", e.stage, e.message);
            }
        }
        Command::Report { input, out_dir, format } => {
            let report = MasterReport::read(&input)?;
            for path in pipeline::emit(&report, &out_dir, &format)? {
                eprintln!("wrote {}", path.display());
            }
        }
        Command::Demo { out_dir } => {
            demo::write_demo(&out_dir)?;
            eprintln!(
                "demo corpus written; run it with: synthnote run --config {}",
                out_dir.join("pipeline.toml").display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.class() {
                ErrorClass::Usage => 1,
                ErrorClass::Data => 2,
                ErrorClass::Backend => 3,
            })
        }
    }
}
