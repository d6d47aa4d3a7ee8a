//! `evtforce` command line: synthesize recordings, convert them to frame
//! datasets, train and evaluate the regressor, predict and benchmark.
//!
//! Exit codes: 0 success, 2 usage or validation (including malformed input
//! files), 3 I/O (missing or unwritable files), 4 internal invariant breach.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use evtforce_core::event::IoError;
use evtforce_core::frame::{AccumulationMode, DatasetError};
use evtforce_core::synth::SynthError;
use evtforce_core::train::TrainError;
use evtforce_core::vit::VitError;

mod commands;
pub mod config;

pub use commands::{
    cmd_bench, cmd_convert, cmd_eval, cmd_predict, cmd_synth, cmd_train, EvalSplit,
};
pub use config::PipelineConfig;

#[derive(Debug, Parser)]
#[command(
    name = "evtforce",
    version,
    about = "Event-camera force regression pipeline"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Flags shared by every subcommand.
#[derive(Debug, Clone, Default, Args)]
pub struct Common {
    /// JSON config with optional `seed`, `scene`, `synth`, `frame`, `model`
    /// and `train` sections.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Root seed; overrides the config file.
    #[arg(long, value_name = "N")]
    pub seed: Option<u64>,
    /// Output path (directory for `synth`, file otherwise).
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
    /// Override one config key, e.g. `--set scene.C=0.2`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
}

impl Common {
    fn out(&self, what: &str) -> Result<&Path, CliError> {
        self.out
            .as_deref()
            .ok_or_else(|| CliError::Usage(format!("--out is required for {what}")))
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic gripper recordings with force labels.
    Synth {
        #[command(flatten)]
        common: Common,
        /// Number of recordings (config `synth.recordings`).
        #[arg(long)]
        recordings: Option<usize>,
    },
    /// Turn a directory of recordings into an FRD1 frame dataset.
    Convert {
        #[command(flatten)]
        common: Common,
        /// Directory written by `synth` (event files plus `.labels.json`).
        #[arg(long = "in", value_name = "DIR")]
        input: PathBuf,
        #[arg(long)]
        window_us: Option<u64>,
        #[arg(long, value_parser = parse_mode)]
        mode: Option<AccumulationMode>,
        #[arg(long)]
        out_size: Option<usize>,
        /// Keep raw accumulated values instead of scaling by the frame max.
        #[arg(long)]
        no_normalize: bool,
    },
    /// Train the regressor; writes the best checkpoint, a loss log and a
    /// summary.
    Train {
        #[command(flatten)]
        common: Common,
        /// FRD1 dataset.
        #[arg(long, value_name = "PATH")]
        data: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Print regression metrics of a checkpoint on a dataset.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "PATH")]
        data: PathBuf,
        /// Which part of the seeded split to score.
        #[arg(long, value_enum, default_value_t = EvalSplit::All)]
        split: EvalSplit,
    },
    /// Print one force in newtons per frame of an event file or FRD1 file.
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "PATH")]
        input: PathBuf,
    },
    /// Measure single-threaded accumulation throughput per mode.
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        input: PathBuf,
        #[arg(long)]
        window_us: Option<u64>,
        /// Timed passes per mode; the fastest one is reported.
        #[arg(long, default_value_t = 3)]
        repeats: usize,
    },
}

fn parse_mode(s: &str) -> Result<AccumulationMode, String> {
    s.parse()
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("invalid config: {key}: {reason}")]
    Config { key: String, reason: String },
    #[error("no recordings in {0}")]
    NoRecordings(PathBuf),
    #[error("{0}")]
    Invalid(String),
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("internal error: {0}")]
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_)
            | CliError::Config { .. }
            | CliError::NoRecordings(_)
            | CliError::Invalid(_) => 2,
            CliError::Io { .. } => 3,
            CliError::Internal(_) => 4,
        }
    }

    pub(crate) fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            message: e.to_string(),
        }
    }
}

impl From<IoError> for CliError {
    fn from(e: IoError) -> Self {
        match e {
            IoError::NotFound(path) => CliError::Io {
                path,
                message: "not found".into(),
            },
            IoError::Io { path, source } => CliError::io(&path, source),
            other => CliError::Invalid(other.to_string()),
        }
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        match e {
            DatasetError::NotFound(path) => CliError::Io {
                path,
                message: "not found".into(),
            },
            DatasetError::Io { path, source } => CliError::io(&path, source),
            DatasetError::Spec(s) => CliError::Config {
                key: format!("frame.{}", s.key),
                reason: s.reason,
            },
            other => CliError::Invalid(other.to_string()),
        }
    }
}

impl From<VitError> for CliError {
    fn from(e: VitError) -> Self {
        match e {
            VitError::CheckpointNotFound { path } => CliError::Io {
                path,
                message: "checkpoint not found".into(),
            },
            VitError::Io { path, source } => CliError::io(&path, source),
            VitError::MalformedCheckpoint { .. } | VitError::InputShape { .. } => {
                CliError::Invalid(e.to_string())
            }
            VitError::Config { key, reason } => CliError::Config {
                key: format!("model.{key}"),
                reason,
            },
            VitError::Tensor(t) => CliError::Internal(t.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config { key, reason } => CliError::Config {
                key: format!("train.{key}"),
                reason,
            },
            TrainError::Model(m) => m.into(),
            TrainError::EmptyDataset
            | TrainError::EmptyTrainSplit
            | TrainError::Incompatible { .. } => CliError::Invalid(e.to_string()),
            other => CliError::Internal(other.to_string()),
        }
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        match e {
            SynthError::InvalidScene { key, reason } => CliError::Config {
                key: format!("scene.{key}"),
                reason,
            },
            other => CliError::Internal(other.to_string()),
        }
    }
}

/// Runs one parsed command, writing its report to `out`.
pub fn run(cli: Cli, out: &mut dyn Write) -> Result<(), CliError> {
    match cli.command {
        Command::Synth { common, recordings } => {
            let mut sets = common.sets.clone();
            if let Some(n) = recordings {
                sets.push(format!("synth.recordings={n}"));
            }
            let cfg = PipelineConfig::load(common.config.as_deref(), &sets, common.seed)?;
            cmd_synth(&cfg, common.out("synth")?, out)
        }
        Command::Convert {
            common,
            input,
            window_us,
            mode,
            out_size,
            no_normalize,
        } => {
            let mut sets = common.sets.clone();
            if let Some(w) = window_us {
                sets.push(format!("frame.window_us={w}"));
            }
            if let Some(m) = mode {
                sets.push(format!("frame.mode=\"{}\"", m.name()));
            }
            if let Some(s) = out_size {
                sets.push(format!("frame.out_size={s}"));
            }
            if no_normalize {
                sets.push("frame.normalize=false".into());
            }
            let cfg = PipelineConfig::load(common.config.as_deref(), &sets, common.seed)?;
            cmd_convert(&cfg, &input, common.out("convert")?, out)
        }
        Command::Train {
            common,
            data,
            epochs,
        } => {
            let mut sets = common.sets.clone();
            if let Some(e) = epochs {
                sets.push(format!("train.epochs={e}"));
            }
            let cfg = PipelineConfig::load(common.config.as_deref(), &sets, common.seed)?;
            cmd_train(&cfg, &data, common.out("train")?, out)
        }
        Command::Eval {
            common,
            checkpoint,
            data,
            split,
        } => {
            let cfg = PipelineConfig::load(common.config.as_deref(), &common.sets, common.seed)?;
            cmd_eval(&cfg, &checkpoint, &data, split, common.out.as_deref(), out)
        }
        Command::Predict {
            common,
            checkpoint,
            input,
        } => {
            let cfg = PipelineConfig::load(common.config.as_deref(), &common.sets, common.seed)?;
            cmd_predict(&cfg, &checkpoint, &input, common.out.as_deref(), out)
        }
        Command::Bench {
            common,
            input,
            window_us,
            repeats,
        } => {
            let mut sets = common.sets.clone();
            if let Some(w) = window_us {
                sets.push(format!("frame.window_us={w}"));
            }
            let cfg = PipelineConfig::load(common.config.as_deref(), &sets, common.seed)?;
            cmd_bench(&cfg, &input, repeats, common.out.as_deref(), out)
        }
    }
}
