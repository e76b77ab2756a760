//! Command-line front end.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::criterion::{write_scores_csv, CriterionMode};
use crate::error::{Error, Result};
use crate::pet::LoraInit;
use crate::pipeline::{
    median, run_baseline, run_nas, BaselineKind, Experiment, RunConfig, RunResult,
};
use crate::report::{architecture_map, load_spec, write_report, write_report_file};
use crate::train::{write_history_csv, StepRecord};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INTERNAL: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DIVERGENCE: i32 = 3;
pub const EXIT_IO: i32 = 4;

#[derive(Debug, Parser)]
#[command(
    name = "petnas",
    version,
    about = "Architecture search for parameter-efficient tuning by pruning"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Search a PET architecture with the pruning criterion, once per seed.
    Search(RunArgs),
    /// Run a comparison baseline with the same retraining protocol.
    Baseline {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_enum)]
        kind: BaselineArg,
    },
    /// Average architecture specs into a per-site keep-fraction map.
    Report {
        /// Spec JSON files written by `search` or `baseline`.
        #[arg(required = true)]
        specs: Vec<PathBuf>,
        /// CSV destination; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Run configuration (JSON).
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory, created if missing.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Comma-separated run seeds, replacing `seeds.runs`.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    /// Parameter budget, replacing `budget`.
    #[arg(long)]
    pub budget: Option<usize>,
    #[arg(long, value_enum)]
    pub criterion: Option<CriterionArg>,
    #[arg(long, value_enum)]
    pub init: Option<InitArg>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum CriterionArg {
    Averaged,
    LastStep,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum InitArg {
    Balanced,
    Original,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum BaselineArg {
    Random,
    LastStep,
    Full,
}

impl From<BaselineArg> for BaselineKind {
    fn from(k: BaselineArg) -> Self {
        match k {
            BaselineArg::Random => BaselineKind::RandomMask,
            BaselineArg::LastStep => BaselineKind::LastStepCriterion,
            BaselineArg::Full => BaselineKind::Full,
        }
    }
}

/// Process exit code for an error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config { .. }
        | Error::Usage(_)
        | Error::Json(_)
        | Error::Input(_)
        | Error::Parse { .. }
        | Error::Attachment { .. }
        | Error::Dimension { .. } => EXIT_CONFIG,
        Error::Divergence { .. } => EXIT_DIVERGENCE,
        Error::Io { .. } | Error::Csv(_) => EXIT_IO,
        Error::Internal(_) => EXIT_INTERNAL,
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Search(args) => {
            let cfg = load_config(&args)?;
            execute(cfg, &args.out, None).map(|_| ())
        }
        Command::Baseline { run, kind } => {
            let cfg = load_config(&run)?;
            execute(cfg, &run.out, Some(kind.into())).map(|_| ())
        }
        Command::Report { specs, out } => {
            let loaded = specs
                .iter()
                .map(|p| load_spec(p))
                .collect::<Result<Vec<_>>>()?;
            let rows = architecture_map(&loaded)?;
            match out {
                Some(path) => write_report_file(&path, &rows),
                None => write_report(std::io::stdout().lock(), &rows),
            }
        }
    }
}

/// Reads the JSON config and applies command-line overrides.
pub fn load_config(args: &RunArgs) -> Result<RunConfig> {
    let text = std::fs::read_to_string(&args.config).map_err(|e| Error::io(&args.config, e))?;
    let mut cfg: RunConfig = serde_json::from_str(&text)
        .map_err(|e| Error::config(args.config.display().to_string(), e.to_string()))?;
    if let Some(seeds) = &args.seeds {
        cfg.seeds.runs.clone_from(seeds);
    }
    if let Some(b) = args.budget {
        cfg.budget = b;
    }
    if let Some(c) = args.criterion {
        cfg.criterion = match c {
            CriterionArg::Averaged => CriterionMode::Averaged,
            CriterionArg::LastStep => CriterionMode::LastStep,
        };
    }
    if let Some(i) = args.init {
        cfg.lora_init = match i {
            InitArg::Balanced => LoraInit::Balanced,
            InitArg::Original => LoraInit::Original,
        };
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Runs every seed of `cfg` and writes the output directory. Returns the
/// per-seed results.
pub fn execute(
    cfg: RunConfig,
    out: &Path,
    baseline: Option<BaselineKind>,
) -> Result<Vec<RunResult>> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_text(
        &out.join("config.json"),
        &(serde_json::to_string_pretty(&cfg)? + "\n"),
    )?;
    let seeds = cfg.seeds.runs.clone();
    let exp = Experiment::prepare(cfg)?;
    exp.model.save_checkpoint(&out.join("model.ckpt"))?;

    let mut results = Vec::with_capacity(seeds.len());
    let mut summary = String::new();
    let mut warned = false;
    for &seed in &seeds {
        let r = match baseline {
            None => run_nas(&exp, seed)?,
            Some(kind) => run_baseline(&exp, seed, kind)?,
        };
        if let Some(w) = &r.prune.warning {
            if !warned {
                eprintln!("warning: {w}");
                warned = true;
            }
        }
        write_text(
            &out.join(format!("spec_seed{seed}.json")),
            &(serde_json::to_string_pretty(&r.spec)? + "\n"),
        )?;
        let empty: Vec<StepRecord> = Vec::new();
        let search = r.search.as_ref().map_or(&empty, |s| &s.history);
        write_history_csv(
            &out.join(format!("history_seed{seed}.csv")),
            &[("search", search), ("retrain", &r.retrain.history)],
        )?;
        if !r.scores.is_empty() {
            write_scores_csv(&out.join(format!("scores_seed{seed}.csv")), &r.scores)?;
        }
        let line = format!(
            "seed {seed}: {:?} kept {}/{} parameters (budget {}), validation accuracy {:.4}, loss {:.4}",
            r.spec.selection,
            r.spec.param_count,
            r.spec.initial_param_count,
            r.spec.budget,
            r.validation.accuracy,
            r.validation.loss
        );
        println!("{line}");
        summary.push_str(&line);
        summary.push('\n');
        results.push(r);
    }

    write_metrics_csv(&out.join("metrics.csv"), &results)?;
    let accs: Vec<f64> = results.iter().map(|r| r.validation.accuracy).collect();
    let med = median(&accs).unwrap_or(f64::NAN);
    let line = format!(
        "median validation accuracy over {} seeds: {med:.4}",
        accs.len()
    );
    println!("{line}");
    let _ = writeln!(summary, "{line}");
    write_text(&out.join("summary.txt"), &summary)?;

    let specs: Vec<_> = results.iter().map(|r| r.spec.clone()).collect();
    write_report_file(&out.join("report.csv"), &architecture_map(&specs)?)?;
    Ok(results)
}

fn write_metrics_csv(path: &Path, results: &[RunResult]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record([
        "seed",
        "selection",
        "budget",
        "initial_params",
        "final_params",
        "train_loss",
        "train_accuracy",
        "val_loss",
        "val_accuracy",
    ])?;
    for r in results {
        w.write_record([
            r.seed.to_string(),
            format!("{:?}", r.spec.selection).to_lowercase(),
            r.spec.budget.to_string(),
            r.spec.initial_param_count.to_string(),
            r.spec.param_count.to_string(),
            format!("{:e}", r.retrain.final_train.loss),
            format!("{}", r.retrain.final_train.accuracy),
            format!("{:e}", r.validation.loss),
            format!("{}", r.validation.accuracy),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
