//! Command implementations behind the `sed-pcl` binary. Each command returns
//! its process exit status; errors are reported on standard error.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use sed_pcl::config::RunConfig;
use sed_pcl::datagen::{default_prototypes, generate_corpus};
use sed_pcl::dataset::load_training_data;
use sed_pcl::evaluation::{compare_table, evaluate_run, DecodeConfig, MatchConfig, MetricsReport, Predictor};
use sed_pcl::model::Checkpoint;
use sed_pcl::training::{train, ModeKind, ScoreModel};
use sed_pcl::Error;

/// Exit status of a successful command.
pub const EXIT_OK: i32 = 0;
/// Failure not covered by a more specific status.
pub const EXIT_FAILURE: i32 = 1;
/// Invalid configuration, manifest or path.
pub const EXIT_INVALID: i32 = 2;
/// Training aborted on a non-finite loss.
pub const EXIT_NON_FINITE: i32 = 3;
/// Unreadable checkpoint.
pub const EXIT_CHECKPOINT: i32 = 4;
/// Malformed or inconsistent metrics report.
pub const EXIT_REPORT: i32 = 5;

pub const DIAGNOSTIC_FILE: &str = "non_finite_loss.json";

#[derive(Debug, Parser)]
#[command(name = "sed-pcl", version, about = "Semi-supervised sound event detection: mean teacher, online KD and PCL")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthesize the corpus described by the config's [corpus] section.
    GenData {
        config: PathBuf,
    },
    /// Train one model; artifacts go to <output_dir>/<run name>/.
    Train(TrainArgs),
    /// Score a checkpoint on one or more timed-label manifests.
    Evaluate(EvaluateArgs),
    /// Print the comparison table of metrics reports.
    Compare {
        #[arg(required = true)]
        reports: Vec<PathBuf>,
        /// Also write the table to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Baseline,
    OnlineKd,
    Pcl,
}

impl From<ModeArg> for ModeKind {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Baseline => ModeKind::Baseline,
            ModeArg::OnlineKd => ModeKind::OnlineKd,
            ModeArg::Pcl => ModeKind::Pcl,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ScoreArg {
    Teacher,
    Student,
    Ensemble,
}

impl From<ScoreArg> for ScoreModel {
    fn from(s: ScoreArg) -> Self {
        match s {
            ScoreArg::Teacher => ScoreModel::Teacher,
            ScoreArg::Student => ScoreModel::Student,
            ScoreArg::Ensemble => ScoreModel::Ensemble,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    pub config: PathBuf,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    /// Drop the ensemble head and its distillation term.
    #[arg(long)]
    pub no_ensemble: bool,
    /// Feed every branch the same basic-augmented view.
    #[arg(long)]
    pub no_branch_augment: bool,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long = "manifest", required = true)]
    pub manifests: Vec<PathBuf>,
    /// Run config supplying the [decode] and [match] sections.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Defaults to the model recorded in the checkpoint's run.
    #[arg(long, value_enum)]
    pub score_model: Option<ScoreArg>,
    /// Score the manifest's labels against themselves.
    #[arg(long)]
    pub ground_truth: bool,
    /// Directory for the report files (default: the checkpoint's directory).
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

pub fn run(cli: Cli) -> i32 {
    match cli.command {
        Command::GenData { config } => cmd_gen_data(&config),
        Command::Train(args) => cmd_train(&args),
        Command::Evaluate(args) => cmd_evaluate(&args),
        Command::Compare { reports, out } => cmd_compare(&reports, out.as_deref()),
    }
}

fn fail(status: i32, err: impl std::fmt::Display) -> i32 {
    eprintln!("error: {err}");
    status
}

fn status_of(err: &Error) -> i32 {
    match err {
        Error::Config(_)
        | Error::BadFeatureConfig(_)
        | Error::Manifest { .. }
        | Error::MissingAudio(_)
        | Error::EmptySplit
        | Error::Io { .. }
        | Error::Wav { .. } => EXIT_INVALID,
        Error::NonFiniteLoss { .. } => EXIT_NON_FINITE,
        Error::Checkpoint { .. } => EXIT_CHECKPOINT,
        Error::Report { .. } => EXIT_REPORT,
        _ => EXIT_FAILURE,
    }
}

pub fn cmd_gen_data(config: &Path) -> i32 {
    let cfg = match RunConfig::load(config) {
        Ok(c) => c,
        Err(e) => return fail(EXIT_INVALID, e),
    };
    match generate_corpus(&cfg.corpus, &default_prototypes()) {
        Ok(summary) => {
            for (split, path) in &summary.manifests {
                println!("{:<10} {:>5} clips  {}", split.name(), split.count(&summary.counts), path.display());
            }
            let c = summary.counts;
            println!("counts ({}, {}, {}, {}, {})", c.strong, c.weak, c.unlabeled, c.validation, c.test);
            if summary.unchanged {
                println!("unchanged");
            }
            EXIT_OK
        }
        Err(e) => fail(status_of(&e), e),
    }
}

/// Applies the command-line overrides to a loaded config.
pub fn apply_train_overrides(cfg: &mut RunConfig, args: &TrainArgs) -> sed_pcl::Result<()> {
    if let Some(mode) = args.mode {
        cfg.trainer.mode = mode.into();
    }
    if args.no_ensemble {
        cfg.trainer.use_ensemble = Some(false);
    }
    if args.no_branch_augment {
        cfg.trainer.branch_augment = Some(false);
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(epochs) = args.epochs {
        cfg.trainer.epochs = epochs;
    }
    cfg.validate()
}

pub fn cmd_train(args: &TrainArgs) -> i32 {
    let mut cfg = match RunConfig::load(&args.config) {
        Ok(c) => c,
        Err(e) => return fail(EXIT_INVALID, e),
    };
    if let Err(e) = apply_train_overrides(&mut cfg, args) {
        return fail(EXIT_INVALID, e);
    }
    let run_dir = cfg.run_dir();
    if let Err(e) = cfg.write_resolved(&run_dir) {
        return fail(EXIT_INVALID, e);
    }
    let data = match load_training_data(cfg.corpus_dir(), &cfg.features, cfg.model.n_classes) {
        Ok(d) => d,
        Err(e) => return fail(status_of(&e), e),
    };
    let label = cfg.trainer.trainer_mode().label();
    eprintln!("training {label} (seed {}) into {}", cfg.seed, run_dir.display());
    match train(&cfg.train_settings(), &data, &run_dir) {
        Ok(artifacts) => {
            println!("best validation macro F1 {:.4}", artifacts.best_validation.macro_f1);
            println!("best checkpoint {}", artifacts.best_checkpoint.display());
            println!("last checkpoint {}", artifacts.last_checkpoint.display());
            println!("log {}", artifacts.log_path.display());
            EXIT_OK
        }
        Err(e @ Error::NonFiniteLoss { .. }) => {
            let dump = run_dir.join(DIAGNOSTIC_FILE);
            let body = serde_json::json!({ "error": e.to_string(), "run": label, "seed": cfg.seed });
            if std::fs::write(&dump, serde_json::to_string_pretty(&body).expect("serializable")).is_ok() {
                eprintln!("diagnostics written to {}", dump.display());
            }
            fail(EXIT_NON_FINITE, e)
        }
        Err(e) => fail(status_of(&e), e),
    }
}

/// Report file written for `manifest` in `dir`: `<split>.report.tsv`.
pub fn report_path(dir: &Path, manifest: &Path) -> PathBuf {
    let split = manifest.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "split".into());
    dir.join(format!("{split}.report.tsv"))
}

pub fn cmd_evaluate(args: &EvaluateArgs) -> i32 {
    let checkpoint = match Checkpoint::load(&args.checkpoint) {
        Ok(c) => c,
        Err(e) => return fail(EXIT_CHECKPOINT, e),
    };
    let (decode, matching) = match &args.config {
        Some(path) => match RunConfig::load(path) {
            Ok(cfg) => (cfg.decode, cfg.matching),
            Err(e) => return fail(EXIT_INVALID, e),
        },
        None => (DecodeConfig::default(), MatchConfig::default()),
    };
    let recorded = checkpoint.run.get("score_model").and_then(|v| serde_json::from_value(v.clone()).ok());
    let score = args.score_model.map(ScoreModel::from).or(recorded).unwrap_or(ScoreModel::Teacher);
    let predictor = if args.ground_truth { Predictor::GroundTruth } else { Predictor::Model(score) };
    let out_dir = args
        .out_dir
        .clone()
        .unwrap_or_else(|| args.checkpoint.parent().map(Path::to_path_buf).unwrap_or_default());
    if let Err(e) = std::fs::create_dir_all(&out_dir) {
        return fail(EXIT_INVALID, format!("creating {}: {e}", out_dir.display()));
    }
    for manifest in &args.manifests {
        let report = match evaluate_run(&checkpoint, manifest, predictor, &decode, &matching) {
            Ok(r) => r,
            Err(e) => return fail(status_of(&e), e),
        };
        let path = report_path(&out_dir, manifest);
        let records = report.to_records();
        if let Err(e) = std::fs::write(&path, &records) {
            return fail(EXIT_INVALID, format!("writing {}: {e}", path.display()));
        }
        print!("{records}");
        println!("report {}", path.display());
    }
    EXIT_OK
}

pub fn cmd_compare(paths: &[PathBuf], out: Option<&Path>) -> i32 {
    let mut reports = Vec::with_capacity(paths.len());
    for path in paths {
        let text = match std::fs::read_to_string(path) {
            Ok(t) => t,
            Err(e) => return fail(EXIT_REPORT, format!("reading {}: {e}", path.display())),
        };
        match MetricsReport::parse_records(&text, path) {
            Ok(r) => reports.push(r),
            Err(e) => return fail(EXIT_REPORT, e),
        }
    }
    let table = match compare_table(&reports) {
        Ok(t) => t,
        Err(e) => return fail(EXIT_REPORT, e),
    };
    print!("{table}");
    if let Some(out) = out {
        if let Err(e) = std::fs::write(out, &table) {
            return fail(EXIT_INVALID, format!("writing {}: {e}", out.display()));
        }
    }
    EXIT_OK
}
