//! The `wastebot` command line.
//!
//! Every artifact-producing command writes into an explicit `--out`
//! directory and leaves a `manifest.json` there. Configuration comes from an
//! optional JSON file (`--config`) layered over built-in defaults; flags win
//! over both.

use std::ffi::OsString;
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;

mod control;
mod dynamics;
mod manifest;
mod perception;

pub use control::PipelineConfig;
pub use manifest::RunManifest;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_ALGORITHM: i32 = 3;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(wastebot::Error),
    /// A check or algorithm ran to completion but did not succeed.
    Failed(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Core(e) if e.is_algorithmic() => EXIT_ALGORITHM,
            CliError::Core(_) => EXIT_DATA,
            CliError::Failed(_) => EXIT_ALGORITHM,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage: {m}"),
            CliError::Core(e) => e.fmt(f),
            CliError::Failed(m) => f.write_str(m),
        }
    }
}

impl From<wastebot::Error> for CliError {
    fn from(e: wastebot::Error) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Core(e.into())
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// Flags shared by every subcommand.
#[derive(Debug, Clone, Default, Args)]
pub struct Common {
    /// Output directory (created if missing).
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// JSON file layered over the built-in defaults.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Config bytes, read once so that pipes work as config files.
    #[arg(skip)]
    config_bytes: OnceLock<Vec<u8>>,
}

impl Common {
    fn out_dir(&self) -> CliResult<&Path> {
        self.out
            .as_deref()
            .ok_or_else(|| CliError::Usage("this command writes artifacts and needs --out <DIR>".into()))
    }

    fn config_bytes(&self) -> CliResult<Option<&[u8]>> {
        let Some(path) = &self.config else {
            return Ok(None);
        };
        if self.config_bytes.get().is_none() {
            let _ = self.config_bytes.set(std::fs::read(path)?);
        }
        Ok(self.config_bytes.get().map(Vec::as_slice))
    }

    /// `default` overlaid with the config file, if any.
    fn config<T: Serialize + DeserializeOwned>(&self, default: T) -> CliResult<T> {
        let Some(text) = self.config_bytes()? else {
            return Ok(default);
        };
        let file: serde_json::Value = serde_json::from_slice(text)?;
        let mut merged = serde_json::to_value(default).expect("config serializes");
        merge(&mut merged, file);
        Ok(serde_json::from_value(merged)?)
    }
}

/// Recursive object merge; anything that is not an object on both sides is
/// replaced wholesale.
fn merge(base: &mut serde_json::Value, over: serde_json::Value) {
    match (base, over) {
        (serde_json::Value::Object(b), serde_json::Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "wastebot",
    version,
    about = "Desk-scale waste sorting testbed: perception, identification and control"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Print the optical filter table.
    Bands(perception::BandsArgs),
    /// Render a synthetic multispectral scene with ground truth.
    SynthScene(perception::SynthSceneArgs),
    /// Register the three cameras of one exposure series.
    Register(perception::RegisterArgs),
    /// Per-pixel material classification.
    #[command(subcommand)]
    Classify(perception::ClassifyCommand),
    /// Simulate the hydraulic joint.
    #[command(subcommand)]
    Plant(dynamics::PlantCommand),
    /// Train and check the recurrent motion predictor.
    #[command(subcommand)]
    Predictor(dynamics::PredictorCommand),
    /// Train and run joint controllers.
    #[command(subcommand)]
    Controller(control::ControllerCommand),
    /// Scene to classification to pick plan to executed episode.
    #[command(subcommand)]
    Pipeline(control::PipelineCommand),
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code. Errors go to stderr.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let words: Vec<String> = argv.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    let result = match cli.command {
        Command::Bands(a) => perception::bands(&a, &words),
        Command::SynthScene(a) => perception::synth_scene(&a, &words),
        Command::Register(a) => perception::register(&a, &words),
        Command::Classify(c) => perception::classify(c, &words),
        Command::Plant(c) => dynamics::plant(c, &words),
        Command::Predictor(c) => dynamics::predictor(c, &words),
        Command::Controller(c) => control::controller(c, &words),
        Command::Pipeline(c) => control::pipeline(c, &words),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            if let CliError::Usage(_) = e {
                eprintln!("run `wastebot --help` for usage");
            }
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn merge_overrides_leaves_only() {
        let mut base = json!({"a": 1, "b": {"c": 2, "d": 3}, "e": [1, 2]});
        merge(&mut base, json!({"b": {"d": 4}, "e": [9], "f": true}));
        assert_eq!(base, json!({"a": 1, "b": {"c": 2, "d": 4}, "e": [9], "f": true}));
    }

    #[test]
    fn exit_codes_follow_error_kind() {
        assert_eq!(CliError::Usage("x".into()).exit_code(), 1);
        assert_eq!(CliError::Core(wastebot::Error::Format("x".into())).exit_code(), 2);
        assert_eq!(
            CliError::Core(wastebot::Error::Divergence {
                epoch: 3,
                loss: f64::NAN
            })
            .exit_code(),
            3
        );
        assert_eq!(CliError::Failed("x".into()).exit_code(), 3);
    }
}
