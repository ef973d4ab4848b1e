//! Command-line front end over [`crate::pipeline`].

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use log::info;

use crate::config::Config;
use crate::error::Error;
use crate::pipeline::{Pipeline, Workspace};

/// Directory searched for `comptraj.toml` when `--config` is absent.
pub const CONFIG_DIR_ENV: &str = "COMPTRAJ_CONFIG_DIR";
pub const CONFIG_FILE: &str = "comptraj.toml";

pub const EXIT_OTHER: u8 = 1;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_CONFIG: u8 = 3;
pub const EXIT_IO: u8 = 4;

#[derive(Debug, Parser)]
#[command(name = "comptraj", version, about = "Trajectory hierarchies and LASTDPM action detection")]
pub struct Cli {
    /// Config file (TOML). Defaults to $COMPTRAJ_CONFIG_DIR/comptraj.toml, then built-in defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Work directory holding every artifact.
    #[arg(long, global = true, default_value = "work")]
    pub work: PathBuf,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (0 = all cores). Results do not depend on it.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Accept upstream artifacts whose config hash differs.
    #[arg(long, global = true)]
    pub force: bool,
    /// Config override, `section.key=value`; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EvalMode {
    Localization,
    Roc,
    Auc,
    Accuracy,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic corpus and manifest.
    Synth,
    /// Build the descriptor codebook from training videos.
    Codebook,
    /// Learn layer compositions from the labeled training videos.
    LearnHierarchy,
    /// Detect hierarchy elements in every video.
    DetectElements,
    /// Dump one video's feature pyramid.
    Featmap {
        #[arg(long)]
        video: String,
    },
    /// Train the bag-of-compositions classifier.
    TrainBow,
    /// Predict a class for every labeled test video.
    Classify,
    /// Train one detector per class.
    TrainLastdpm {
        /// Train only this class.
        #[arg(long)]
        class: Option<String>,
    },
    /// Run detectors on the test split.
    Detect {
        #[arg(long)]
        class: Option<String>,
        /// Score threshold; defaults to each model's calibrated threshold.
        #[arg(long, allow_hyphen_values = true)]
        threshold: Option<f64>,
        /// Keep every video's top detections regardless of threshold.
        #[arg(long, conflicts_with = "threshold")]
        all: bool,
    },
    /// Print localization, ROC, AUC or accuracy figures.
    Evaluate {
        #[arg(long, value_enum)]
        mode: EvalMode,
        #[arg(long)]
        theta: Option<f64>,
        #[arg(long)]
        overlap: Option<f64>,
        #[arg(long)]
        class: Option<String>,
    },
    /// Write ROC and AUC-vs-overlap curves as CSV and SVG.
    Plot,
    /// Every stage from synth to detect.
    Run,
    /// Print the effective config.
    Config,
}

pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::ConfigInvalid(_) | Error::ConfigMismatch(_) | Error::HashMismatch { .. } => EXIT_CONFIG,
        Error::Io(_) | Error::Format(_) => EXIT_IO,
        _ => EXIT_OTHER,
    }
}

fn default_config_path() -> Option<PathBuf> {
    let dir = std::env::var_os(CONFIG_DIR_ENV)?;
    let path = Path::new(&dir).join(CONFIG_FILE);
    path.is_file().then_some(path)
}

fn load_config(cli: &Cli) -> crate::Result<Config> {
    let base = match cli.config.clone().or_else(default_config_path) {
        Some(path) => Config::load(&path)?,
        None => Config::default(),
    };
    let mut cfg = base.with_overrides(&cli.overrides)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(workers) = cli.workers {
        cfg.workers = workers;
    }
    Ok(cfg)
}

fn fmt_pairs(pairs: &[(f64, f64)]) -> String {
    pairs.iter().map(|(a, b)| format!("{a:?}\t{b:?}\n")).collect()
}

fn execute(cli: &Cli, cfg: &Config) -> crate::Result<()> {
    let mut pipeline = Pipeline::new(cfg, Workspace::new(&cli.work));
    pipeline.force = cli.force;
    match &cli.command {
        Command::Synth => {
            pipeline.synth()?;
        }
        Command::Codebook => {
            pipeline.build_codebook()?;
        }
        Command::LearnHierarchy => {
            pipeline.learn_hierarchy()?;
        }
        Command::DetectElements => pipeline.detect_elements()?,
        Command::Featmap { video } => {
            for p in pipeline.dump_featmaps(video)? {
                println!("{}", p.display());
            }
        }
        Command::TrainBow => {
            pipeline.train_bow()?;
        }
        Command::Classify => {
            for p in pipeline.classify()? {
                println!("{}\t{}\t{}", p.video_id, p.predicted, p.label);
            }
        }
        Command::TrainLastdpm { class } => {
            for (model, log) in pipeline.train_lastdpm(class.as_deref())? {
                info!("{}: {} rounds, threshold {}", model.label, log.len(), model.threshold);
            }
        }
        Command::Detect { class, threshold, all } => {
            let threshold = if *all { Some(f64::NEG_INFINITY) } else { *threshold };
            pipeline.detect(class.as_deref(), threshold)?;
        }
        Command::Evaluate {
            mode,
            theta,
            overlap,
            class,
        } => evaluate(&pipeline, *mode, *theta, *overlap, class.as_deref())?,
        Command::Plot => {
            for p in pipeline.plot()? {
                println!("{}", p.display());
            }
        }
        Command::Run => pipeline.run_all()?,
        Command::Config => print!("{}", cfg.to_toml()),
    }
    Ok(())
}

fn evaluate(
    pipeline: &Pipeline,
    mode: EvalMode,
    theta: Option<f64>,
    overlap: Option<f64>,
    class: Option<&str>,
) -> crate::Result<()> {
    let classes = match class {
        Some(c) => vec![c.to_string()],
        None => pipeline.manifest()?.classes(),
    };
    match mode {
        EvalMode::Localization => match theta {
            Some(t) => println!("{:?}", pipeline.evaluate_localization(&[t])?[0].1),
            None => print!("{}", fmt_pairs(&pipeline.evaluate_localization(&pipeline.config.eval.thetas)?)),
        },
        EvalMode::Accuracy => println!("{:?}", pipeline.evaluate_accuracy()?),
        EvalMode::Roc | EvalMode::Auc => {
            for label in classes {
                let videos = pipeline.eval_videos(&label)?;
                if mode == EvalMode::Roc {
                    let roc = crate::evalkit::roc_curve(&videos, overlap.unwrap_or(pipeline.config.eval.overlap))?;
                    println!("{label}\tauc\t{:?}", roc.auc);
                    for p in &roc.points {
                        println!("{label}\t{:?}\t{:?}", p.fpr, p.tpr);
                    }
                } else {
                    let overlaps = match overlap {
                        Some(o) => vec![o],
                        None => pipeline.config.eval.overlaps.clone(),
                    };
                    for (o, a) in crate::evalkit::auc_vs_overlap(&videos, &overlaps)? {
                        println!("{label}\t{o:?}\t{a:?}");
                    }
                }
            }
        }
    }
    Ok(())
}

/// Parse arguments, run, and map failures to categorized exit codes.
pub fn run<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    let cfg = match load_config(&cli) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("comptraj: config error: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    if cfg.workers > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cfg.workers).build_global() {
            log::warn!("worker pool: {e}");
        }
    }
    match execute(&cli, &cfg) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = exit_code(&e);
            let kind = match code {
                EXIT_CONFIG => "config error",
                EXIT_IO => "io error",
                _ => "error",
            };
            eprintln!("comptraj: {kind}: {e}");
            ExitCode::from(code)
        }
    }
}
