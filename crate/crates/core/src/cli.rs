//! Command-line driver: `train`, `evaluate`, `infer`, `report` and
//! `validate-data`.
//!
//! Exit status is 0 on success, 1 for usage and validation errors (bad
//! flags, unknown config keys, invalid annotations, reports over different
//! datasets) and 2 for runtime failures.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;

use crate::dataset::{load_coco, split_dataset, DatasetError, DatasetSplit, SplitName};
use crate::metrics::{compare_report, EvalReport, MetricsError};
use crate::pipeline::{evaluate, infer, train, Checkpoint, ConfigError, PipelineError, RunConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "crackseg", version, about = "Mask R-CNN crack instance segmentation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// TOML run configuration; defaults apply to missing keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one key by dotted path, e.g. `--set heads.rpn_test.nms_iou=0.6`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum SplitChoice {
    Train,
    Val,
    Test,
    All,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model; writes checkpoints and the epoch log to `--out`.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value = "runs/latest")]
        out: PathBuf,
        /// Continue from a checkpoint written with the same config.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint and write the report as JSON.
    Evaluate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "val")]
        split: SplitChoice,
        /// Row label in comparison tables; defaults to the backbone name.
        #[arg(long)]
        label: Option<String>,
        /// Output file; standard output when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Detect cracks in images; writes detection records and overlays.
    Infer {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "detections")]
        out: PathBuf,
        #[arg(required = true)]
        images: Vec<PathBuf>,
    },
    /// Render stored evaluation reports as fixed-width tables.
    Report {
        #[arg(long = "from", required = true, num_args = 1..)]
        from: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check the annotation file and images named in the config.
    ValidateData {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

#[derive(Debug)]
enum Failure {
    Invalid(String),
    Runtime(String),
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Invalid(e.to_string())
    }
}

impl From<DatasetError> for Failure {
    fn from(e: DatasetError) -> Self {
        match e {
            DatasetError::Io { .. } | DatasetError::ImageDecode { .. } => Failure::Runtime(e.to_string()),
            _ => Failure::Invalid(e.to_string()),
        }
    }
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Config(c) => c.into(),
            PipelineError::Dataset(d) => d.into(),
            PipelineError::ConfigMismatch { .. } => Failure::Invalid(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

impl From<MetricsError> for Failure {
    fn from(e: MetricsError) -> Self {
        match e {
            MetricsError::DigestMismatch(..) | MetricsError::NoReports => Failure::Invalid(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

fn runtime(e: impl std::fmt::Display) -> Failure {
    Failure::Runtime(e.to_string())
}

/// Loads the config file (or defaults), applies overrides and validates.
pub fn effective_config(args: &ConfigArgs) -> Result<RunConfig, ConfigError> {
    let base = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let cfg = base.with_overrides(&args.overrides)?;
    cfg.validate()?;
    Ok(cfg)
}

fn image_root(cfg: &RunConfig) -> PathBuf {
    if cfg.data.image_root.is_empty() {
        Path::new(&cfg.data.annotations).parent().map(Path::to_path_buf).unwrap_or_default()
    } else {
        PathBuf::from(&cfg.data.image_root)
    }
}

/// Train, validation and (possibly absent) test splits named by the data
/// section of `cfg`.
pub fn resolve_splits(cfg: &RunConfig) -> Result<(DatasetSplit, DatasetSplit, Option<DatasetSplit>), PipelineError> {
    if cfg.data.annotations.is_empty() {
        return Err(ConfigError::Invalid("data.annotations is not set".into()).into());
    }
    let root = image_root(cfg);
    let all = load_coco(Path::new(&cfg.data.annotations), &root)?;
    if !cfg.data.val_annotations.is_empty() {
        let val = load_coco(Path::new(&cfg.data.val_annotations), &root)?.with_name(SplitName::Val);
        return Ok((all, val, None));
    }
    let (train, val, test) = split_dataset(&all, (cfg.data.train_fraction, cfg.data.val_fraction), cfg.data.split_seed)?;
    Ok((train, val, (!test.is_empty()).then_some(test)))
}

fn choose_split(cfg: &RunConfig, which: SplitChoice) -> Result<DatasetSplit, Failure> {
    if which == SplitChoice::All {
        if cfg.data.annotations.is_empty() {
            return Err(Failure::Invalid("data.annotations is not set".into()));
        }
        return Ok(load_coco(Path::new(&cfg.data.annotations), &image_root(cfg))?);
    }
    let (train, val, test) = resolve_splits(cfg)?;
    match which {
        SplitChoice::Train => Ok(train),
        SplitChoice::Val => Ok(val),
        SplitChoice::Test => test.ok_or_else(|| Failure::Invalid("the configured fractions leave no test split".into())),
        SplitChoice::All => unreachable!(),
    }
}

fn emit(text: &str, out: Option<&Path>) -> Result<(), Failure> {
    match out {
        Some(p) => std::fs::write(p, text).map_err(|e| runtime(format!("{}: {e}", p.display()))),
        None => std::io::stdout().write_all(text.as_bytes()).map_err(runtime),
    }
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, Failure> {
    Checkpoint::load(path).map_err(|e| runtime(format!("{}: {e}", path.display())))
}

fn dispatch(command: Command) -> Result<(), Failure> {
    match command {
        Command::Train { cfg, out, resume } => {
            let cfg = effective_config(&cfg)?;
            let (train_split, val, _) = resolve_splits(&cfg)?;
            let resume = resume.as_deref().map(load_checkpoint).transpose()?;
            info!("training on {} images, validating on {}", train_split.len(), val.len());
            let result = train(&cfg, &train_split, Some(&val), &out, resume)?;
            info!("finished epoch {}; checkpoints in {}", result.last.epoch, out.display());
            Ok(())
        }
        Command::Evaluate {
            cfg,
            checkpoint,
            split,
            label,
            out,
        } => {
            let cfg = effective_config(&cfg)?;
            let ck = load_checkpoint(&checkpoint)?;
            let data = choose_split(&cfg, split)?;
            let label = label.unwrap_or_else(|| ck.config.backbone.kind.as_str().to_string());
            let report = evaluate(&ck, &data, &cfg, &label)?;
            let text = serde_json::to_string_pretty(&report).map_err(runtime)? + "\n";
            emit(&text, out.as_deref())
        }
        Command::Infer {
            cfg,
            checkpoint,
            out,
            images,
        } => {
            let cfg = effective_config(&cfg)?;
            let ck = load_checkpoint(&checkpoint)?;
            let summary = infer(&ck, &images, &cfg, &out)?;
            info!("wrote {} detection record(s) to {}", summary.written.len(), out.display());
            if summary.failures.is_empty() {
                Ok(())
            } else {
                Err(Failure::Runtime(format!("{} image(s) could not be processed", summary.failures.len())))
            }
        }
        Command::Report { from, out } => {
            let reports = from
                .iter()
                .map(|p| {
                    let text = std::fs::read_to_string(p).map_err(|e| runtime(format!("{}: {e}", p.display())))?;
                    serde_json::from_str::<EvalReport>(&text)
                        .map_err(|e| Failure::Invalid(format!("{} is not an evaluation report: {e}", p.display())))
                })
                .collect::<Result<Vec<_>, _>>()?;
            emit(&compare_report(&reports)?, out.as_deref())
        }
        Command::ValidateData { cfg } => {
            let cfg = effective_config(&cfg)?;
            if cfg.data.annotations.is_empty() {
                return Err(Failure::Invalid("data.annotations is not set".into()));
            }
            let root = image_root(&cfg);
            let mut checked = vec![load_coco(Path::new(&cfg.data.annotations), &root)?];
            if !cfg.data.val_annotations.is_empty() {
                checked.push(load_coco(Path::new(&cfg.data.val_annotations), &root)?);
            }
            for s in &checked {
                let with_cracks = s.records().iter().filter(|r| !s.annotations(r.id).is_empty()).count();
                emit(
                    &format!(
                        "ok: {} images ({} with cracks), {} instances, digest {}\n",
                        s.len(),
                        with_cracks,
                        s.num_instances(),
                        s.digest()
                    ),
                    None,
                )?;
            }
            Ok(())
        }
    }
}

/// Parses `argv` (program name first) and runs the command.
pub fn parse_and_dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INVALID } else { EXIT_OK };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(Failure::Invalid(m)) => {
            eprintln!("error: {m}");
            EXIT_INVALID
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            EXIT_RUNTIME
        }
    }
}
