//! Command-line front end. Every command computes its outputs in memory
//! and only then writes them, each file through a temporary sibling and a
//! rename, so a failing command leaves no partial files behind.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 runtime error.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::augmentation::{
    augment_corpus, read_records, run_mock_backend, write_records, AugmentConfig,
    CounterfactualBackend, CounterfactualRecord, ExternalBackend,
};
use crate::error::CedError;
use crate::fusion_model::{encode_checkpoint, Model};
use crate::io_util::{create_dir_all, write_atomic};
use crate::kv::KvConfig;
use crate::synth_data::{
    bias_cooccurrence_report, generate_corpus, read_split_files, write_split_files, CorpusSpec,
    DatasetBundle,
};
use crate::training::{
    evaluate, history_csv, parse_grid, parse_seeds, run_ablation, sweep_lambda, train,
    Experiment, Metrics, TrainConfig,
};

#[derive(Parser, Debug)]
#[command(name = "ced", version, about = "Counterfactual-enhanced debiasing for target-oriented multimodal sentiment")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum BackendKind {
    Rulebased,
    External,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ConfigKind {
    Spec,
    Train,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic biased corpus: four split files and a bias report.
    GenData {
        /// Corpus spec (key = value); defaults when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Build counterfactual records for the training split.
    Augment {
        /// Directory written by gen-data.
        #[arg(long)]
        data: PathBuf,
        /// Rewriting backend; `external` runs the command in $CED_BACKEND_CMD.
        #[arg(long, value_enum, default_value = "rulebased")]
        backend: BackendKind,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model; writes checkpoint.ced, history.csv and metrics.json.
    Train {
        /// Training config (key = value); defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory written by gen-data.
        #[arg(long)]
        data: PathBuf,
        /// Directory written by augment; required when counterfactuals are on.
        #[arg(long)]
        aug: Option<PathBuf>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the full model and its four ablations at every seed.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        aug: PathBuf,
        /// A count N (seeds 1..=N) or a comma-separated list.
        #[arg(long, default_value = "5")]
        seeds: String,
        /// Runs trained concurrently.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Retrain the full model across a grid of contrastive weights.
    Sweep {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        aug: PathBuf,
        /// `start:end:step` (end inclusive) or a comma-separated list.
        #[arg(long, default_value = "0:1.2:0.1")]
        grid: String,
        /// A count N (seeds 1..=N) or a comma-separated list.
        #[arg(long, default_value = "5")]
        seeds: String,
        /// Runs trained concurrently.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the default corpus spec or training config.
    ShowConfig {
        #[arg(value_enum, default_value = "train")]
        kind: ConfigKind,
    },
    /// Line-oriented stand-in for an external rewriting service.
    #[command(hide = true)]
    MockBackend,
}

/// A failed command: exit code plus message.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    fn usage(e: impl std::fmt::Display) -> Self {
        Failure { code: 1, message: e.to_string() }
    }

    fn data(e: impl std::fmt::Display) -> Self {
        Failure { code: 2, message: e.to_string() }
    }

    fn runtime(e: impl std::fmt::Display) -> Self {
        Failure { code: 3, message: e.to_string() }
    }
}

impl From<CedError> for Failure {
    fn from(e: CedError) -> Self {
        match e {
            CedError::Config { .. } => Failure::usage(e),
            CedError::Backend { .. } | CedError::Diverged { .. } => Failure::runtime(e),
            _ => Failure::data(e),
        }
    }
}

type CmdResult = std::result::Result<(), Failure>;

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}

fn dispatch(command: Command) -> CmdResult {
    match command {
        Command::GenData { spec, out } => cmd_gen_data(spec.as_deref(), &out),
        Command::Augment { data, backend, out } => cmd_augment(&data, backend, &out),
        Command::Train { config, data, aug, out } => cmd_train(config.as_deref(), &data, aug.as_deref(), &out),
        Command::Ablate { config, data, aug, seeds, jobs, out } => {
            cmd_ablate(config.as_deref(), &data, &aug, &seeds, jobs, &out)
        }
        Command::Sweep { config, data, aug, grid, seeds, jobs, out } => {
            cmd_sweep(config.as_deref(), &data, &aug, &grid, &seeds, jobs, &out)
        }
        Command::ShowConfig { kind } => {
            let text = match kind {
                ConfigKind::Spec => CorpusSpec::default().to_kv_string(),
                ConfigKind::Train => TrainConfig::default().to_kv_string(),
            };
            print!("{text}");
            Ok(())
        }
        Command::MockBackend => {
            let stdin = std::io::stdin();
            run_mock_backend(stdin.lock(), std::io::stdout()).map_err(Failure::runtime)
        }
    }
}

fn load_config<C: KvConfig>(path: Option<&Path>) -> std::result::Result<C, Failure> {
    match path {
        // an unreadable config file is a usage problem, not a data one
        Some(p) => C::load(p).map_err(|e| match e {
            CedError::Io { .. } | CedError::Parse { .. } | CedError::Version { .. } => Failure::usage(e),
            other => other.into(),
        }),
        None => Ok(C::default()),
    }
}

/// Writes every `(name, bytes)` pair into `dir` once all are computed.
fn write_outputs(dir: &Path, files: &[(String, Vec<u8>)]) -> CmdResult {
    create_dir_all(dir).map_err(Failure::runtime)?;
    for (name, bytes) in files {
        write_atomic(&dir.join(name), bytes).map_err(Failure::runtime)?;
    }
    Ok(())
}

fn cmd_gen_data(spec_path: Option<&Path>, out: &Path) -> CmdResult {
    let spec: CorpusSpec = load_config(spec_path)?;
    let bundle = generate_corpus(&spec)?;
    let report = bias_cooccurrence_report(&bundle.train)?;
    create_dir_all(out).map_err(Failure::runtime)?;
    write_split_files(&bundle, out).map_err(Failure::runtime)?;
    write_outputs(out, &[("bias_report.csv".into(), report.to_csv(&bundle.lexicon).into_bytes())])?;
    println!(
        "wrote {} train, {} validation, {} test_biased, {} test_anti_biased samples to {}",
        bundle.train.len(),
        bundle.validation.len(),
        bundle.test_biased.len(),
        bundle.test_anti_biased.len(),
        out.display()
    );
    Ok(())
}

fn cmd_augment(data: &Path, backend: BackendKind, out: &Path) -> CmdResult {
    let cfg = AugmentConfig::default();
    // resolve the backend before reading data so a missing endpoint is a
    // usage error regardless of the inputs
    let external = match backend {
        BackendKind::External => Some(
            ExternalBackend::from_env(CorpusSpec::default().signals, cfg.image_edit_noise).map_err(Failure::from)?,
        ),
        BackendKind::Rulebased => None,
    };
    let bundle = read_split_files(data)?;
    let mut backend: Box<dyn CounterfactualBackend> = match external {
        Some(mut e) => {
            e.signals = bundle.spec.signals.clone();
            Box::new(e)
        }
        None => Box::new(cfg.rule_based_backend(&bundle.spec)),
    };
    let records = augment_corpus(&bundle.train, &bundle.lexicon, &cfg, bundle.spec.seed, backend.as_mut())?;
    create_dir_all(out).map_err(Failure::runtime)?;
    let manifest =
        write_records(out, &records, backend.name(), &cfg, bundle.spec.seed).map_err(Failure::runtime)?;
    println!(
        "wrote {} senti_reversed and {} senti_invariant records ({} backend) to {}",
        manifest.senti_reversed,
        manifest.senti_invariant,
        manifest.backend,
        out.display()
    );
    Ok(())
}

fn load_records(
    aug: Option<&Path>,
    bundle: &DatasetBundle,
    needed: bool,
) -> std::result::Result<Vec<CounterfactualRecord>, Failure> {
    match aug {
        Some(dir) => {
            let (manifest, records) = read_records(dir, &bundle.spec, bundle.lexicon.vocab_size())?;
            if manifest.corpus_seed != bundle.spec.seed {
                return Err(Failure::data(format!(
                    "{} was built from corpus seed {}, data has seed {}",
                    dir.display(),
                    manifest.corpus_seed,
                    bundle.spec.seed
                )));
            }
            Ok(records)
        }
        None if needed => Err(Failure::data("counterfactuals are enabled but --aug was not given")),
        None => Ok(Vec::new()),
    }
}

#[derive(Serialize)]
struct TrainMetrics<'a> {
    best_epoch: usize,
    best_val_acc: f64,
    val_acc_per_epoch: &'a [f64],
    diverged_at: Option<usize>,
    validation: Metrics,
    test_biased: Metrics,
    test_anti_biased: Metrics,
}

fn cmd_train(config: Option<&Path>, data: &Path, aug: Option<&Path>, out: &Path) -> CmdResult {
    let cfg: TrainConfig = load_config(config)?;
    let bundle = read_split_files(data)?;
    let records = load_records(aug, &bundle, cfg.uses_counterfactuals())?;
    let result = train(&cfg, &bundle, &records)?;
    let eval = |m: &Model, s| evaluate(m, s).map_err(Failure::runtime);
    let metrics = TrainMetrics {
        best_epoch: result.best_epoch,
        best_val_acc: result.best_val_acc,
        val_acc_per_epoch: &result.val_acc_per_epoch,
        diverged_at: result.diverged_at,
        validation: eval(&result.model, &bundle.validation)?,
        test_biased: eval(&result.model, &bundle.test_biased)?,
        test_anti_biased: eval(&result.model, &bundle.test_anti_biased)?,
    };
    let metrics_json = serde_json::to_string_pretty(&metrics).expect("metrics serialize") + "\n";
    let config_text = cfg.to_kv_string();
    write_outputs(
        out,
        &[
            ("config.txt".into(), config_text.clone().into_bytes()),
            ("checkpoint.ced".into(), encode_checkpoint(&result.model, &config_text)),
            ("history.csv".into(), history_csv(&result.history).into_bytes()),
            ("metrics.json".into(), metrics_json.into_bytes()),
        ],
    )?;
    if let Some(step) = result.diverged_at {
        return Err(Failure::runtime(format!(
            "training diverged at step {step}; kept the last good checkpoint in {}",
            out.display()
        )));
    }
    println!(
        "best epoch {} (validation accuracy {:.4}); test_biased accuracy {:.4}, test_anti_biased accuracy {:.4}",
        result.best_epoch, result.best_val_acc, metrics.test_biased.accuracy, metrics.test_anti_biased.accuracy
    );
    Ok(())
}

fn experiment_inputs(
    config: Option<&Path>,
    data: &Path,
    aug: &Path,
    seeds: &str,
) -> std::result::Result<(TrainConfig, DatasetBundle, Vec<CounterfactualRecord>, Vec<u64>), Failure> {
    let cfg: TrainConfig = load_config(config)?;
    let seeds = parse_seeds(seeds)?;
    let bundle = read_split_files(data)?;
    let records = load_records(Some(aug), &bundle, true)?;
    Ok((cfg, bundle, records, seeds))
}

fn cmd_ablate(config: Option<&Path>, data: &Path, aug: &Path, seeds: &str, jobs: usize, out: &Path) -> CmdResult {
    let (cfg, bundle, records, seeds) = experiment_inputs(config, data, aug, seeds)?;
    let mut exp = Experiment::new(&bundle, &records);
    exp.jobs = jobs;
    let report = run_ablation(&mut exp, &cfg, &seeds)?;
    let text = report.to_text();
    write_outputs(
        out,
        &[
            ("ablation_runs.csv".into(), report.runs_csv().into_bytes()),
            ("ablation_summary.csv".into(), report.summary_csv().into_bytes()),
            ("ablation.txt".into(), text.clone().into_bytes()),
        ],
    )?;
    print!("{text}");
    Ok(())
}

fn cmd_sweep(
    config: Option<&Path>,
    data: &Path,
    aug: &Path,
    grid: &str,
    seeds: &str,
    jobs: usize,
    out: &Path,
) -> CmdResult {
    let values = parse_grid(grid)?;
    let (cfg, bundle, records, seeds) = experiment_inputs(config, data, aug, seeds)?;
    let mut exp = Experiment::new(&bundle, &records);
    exp.jobs = jobs;
    let curve = sweep_lambda(&mut exp, &cfg, &values, &seeds)?;
    let csv = curve.to_csv();
    write_outputs(out, &[("sweep.csv".into(), csv.clone().into_bytes())])?;
    let mut stdout = std::io::stdout();
    let _ = stdout.write_all(csv.as_bytes());
    Ok(())
}
