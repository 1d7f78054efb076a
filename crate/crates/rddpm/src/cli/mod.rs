//! The `rddpm` command-line front end.
//!
//! Five subcommands cover the experiment lifecycle: `build-data` writes a
//! patch dataset (synthetic textures or an MVTec-style directory), `train`
//! fits a noise predictor and checkpoints it, `segment` scores a single
//! image, `evaluate` runs the pixel metrics over a dataset's eval split,
//! and `sweep` runs a grid of train+evaluate cells and aggregates them.
//!
//! Every command resolves its configuration in three layers — profile
//! defaults, then a JSON config file, then explicit flags — writes all
//! artifacts under `--out`, and finishes with a `manifest.json` recording
//! the resolved configuration plus content hashes of inputs and outputs,
//! so a run can be reproduced and verified byte for byte.

mod build_data;
mod evaluate_cmd;
mod panels;
mod plots;
mod segment_cmd;
mod sweep;
mod train_cmd;

pub use build_data::{build_synthetic_dataset, DataConfig};
pub use sweep::{ExperimentPlan, Method};

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::{Error, Result};

/// Denoising-diffusion anomaly segmentation that tolerates contaminated
/// training data.
#[derive(Debug, Parser)]
#[command(name = "rddpm", version, about)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a patch dataset: procedural textures with injected defects,
    /// or patches cut from an MVTec-style directory tree.
    BuildData(build_data::BuildDataArgs),
    /// Train a noise predictor on a dataset's training split.
    Train(train_cmd::TrainArgs),
    /// Score one image with a trained checkpoint and write its heatmap.
    Segment(segment_cmd::SegmentArgs),
    /// Compute pixel AUROC / AUPRC / masked MSE over a dataset's eval
    /// split, with heatmap and side-by-side panel images.
    Evaluate(evaluate_cmd::EvaluateArgs),
    /// Run a grid of train+evaluate cells and aggregate metrics over
    /// seeds into CSV tables and SVG line plots.
    Sweep(sweep::SweepArgs),
}

/// Flags shared by every subcommand.
#[derive(Debug, clap::Args)]
pub struct CommonArgs {
    /// Directory all artifacts of this run are written to.
    #[arg(long)]
    pub out: PathBuf,
    /// Scale preset filling in data, model, and training defaults.
    #[arg(long, value_enum, default_value_t = Profile::Ci)]
    pub profile: Profile,
    /// JSON file whose top-level keys override the profile defaults
    /// (explicit flags override both).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Root seed of every random stream the command uses.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads (default: all available cores).
    #[arg(long)]
    pub jobs: Option<usize>,
}

/// Scale presets: `ci` for smoke tests, `desk` for workstation-scale
/// experiments, `full` for overnight runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Ci,
    Desk,
    Full,
}

/// Default knobs a [`Profile`] expands to.
#[derive(Clone, Copy, Debug)]
pub struct ProfileScale {
    pub n_train: usize,
    pub n_eval: usize,
    pub epochs: usize,
    pub t_steps: usize,
    pub hidden_width: usize,
    pub depth: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Stochastic reconstructions averaged per evaluated image.
    pub eval_repeats: usize,
}

impl Profile {
    pub fn scale(self) -> ProfileScale {
        match self {
            Profile::Ci => ProfileScale {
                n_train: 2000,
                n_eval: 200,
                epochs: 1,
                t_steps: 100,
                hidden_width: 10,
                depth: 3,
                batch_size: 8,
                learning_rate: 1e-3,
                eval_repeats: 1,
            },
            Profile::Desk => ProfileScale {
                n_train: 5000,
                n_eval: 500,
                epochs: 3,
                t_steps: 200,
                hidden_width: 12,
                depth: 4,
                batch_size: 8,
                learning_rate: 1e-3,
                eval_repeats: 1,
            },
            Profile::Full => ProfileScale {
                n_train: 50000,
                n_eval: 5000,
                epochs: 10,
                t_steps: 1000,
                hidden_width: 52,
                depth: 6,
                batch_size: 4,
                learning_rate: 1e-4,
                eval_repeats: 4,
            },
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Profile::Ci => "ci",
            Profile::Desk => "desk",
            Profile::Full => "full",
        }
    }
}

/// Parses the process arguments, runs the selected command, and maps
/// errors to a nonzero exit code with a one-line stderr message.
pub fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

/// Runs one parsed command to completion.
pub fn run(cli: Cli) -> Result<()> {
    let common = match &cli.command {
        Command::BuildData(a) => &a.common,
        Command::Train(a) => &a.common,
        Command::Segment(a) => &a.common,
        Command::Evaluate(a) => &a.common,
        Command::Sweep(a) => &a.common,
    };
    if let Some(jobs) = common.jobs {
        if jobs == 0 {
            return Err(Error::invalid("--jobs must be at least 1"));
        }
        // The global pool can only be configured once per process; a
        // second configuration attempt (tests driving `run` repeatedly)
        // keeps the first pool, which is the best available behavior.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global();
    }
    ensure_dir(&common.out)?;

    match cli.command {
        Command::BuildData(args) => build_data::run(args),
        Command::Train(args) => train_cmd::run(args),
        Command::Segment(args) => segment_cmd::run(args),
        Command::Evaluate(args) => evaluate_cmd::run(args),
        Command::Sweep(args) => sweep::run(args),
    }
}

/// Overlays a JSON config file (if given) onto serialized defaults:
/// top-level keys replace the default values wholesale, unknown keys are
/// rejected so typos cannot silently fall back to defaults.
pub(crate) fn resolve_with_config<T>(defaults: T, config: Option<&Path>) -> Result<T>
where
    T: Serialize + DeserializeOwned,
{
    let Some(path) = config else { return Ok(defaults) };
    let mut base = serde_json::to_value(&defaults)
        .map_err(|e| Error::invalid(format!("cannot serialize defaults: {e}")))?;
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let overlay: Value =
        serde_json::from_str(&text).map_err(|e| Error::format(path, format!("invalid JSON: {e}")))?;

    let Value::Object(base_map) = &mut base else {
        return Err(Error::invalid("defaults must serialize to a JSON object"));
    };
    let Value::Object(overlay_map) = overlay else {
        return Err(Error::format(path, "config file must hold a JSON object".to_string()));
    };
    for (key, value) in overlay_map {
        if !base_map.contains_key(&key) {
            return Err(Error::format(path, format!("unknown config key `{key}`")));
        }
        base_map.insert(key, value);
    }
    serde_json::from_value(base).map_err(|e| Error::format(path, e.to_string()))
}

/// Lowercase hex SHA-256 of a byte string.
pub(crate) fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    let digest = Sha256::digest(bytes);
    let mut hex = String::with_capacity(64);
    for b in digest {
        hex.push_str(&format!("{b:02x}"));
    }
    hex
}

/// Content hash of a file, read in full.
pub(crate) fn file_sha256(path: &Path) -> Result<String> {
    Ok(sha256_hex(&std::fs::read(path).map_err(|e| Error::io(path, e))?))
}

/// Content hash of a flat parameter vector's little-endian bytes; two
/// models with bit-identical parameters hash identically regardless of
/// how their checkpoints are configured.
pub(crate) fn params_sha256(params: &[f32]) -> String {
    let mut bytes = Vec::with_capacity(params.len() * 4);
    for p in params {
        bytes.extend_from_slice(&p.to_le_bytes());
    }
    sha256_hex(&bytes)
}

/// Hashes `relative_paths` (resolved against `out_dir`) into a JSON map
/// for the manifest's `outputs` section.
pub(crate) fn hash_outputs(out_dir: &Path, relative_paths: &[String]) -> Result<Value> {
    let mut sorted: Vec<&String> = relative_paths.iter().collect();
    sorted.sort();
    let mut map = serde_json::Map::new();
    for rel in sorted {
        map.insert(rel.clone(), Value::String(file_sha256(&out_dir.join(rel))?));
    }
    Ok(Value::Object(map))
}

/// Writes `manifest.json` under `out_dir`, pretty-printed with sorted
/// keys and no volatile fields, so reruns with equal inputs produce
/// byte-identical manifests.
pub(crate) fn write_manifest(out_dir: &Path, manifest: &Value) -> Result<()> {
    let path = out_dir.join("manifest.json");
    let mut text = serde_json::to_string_pretty(manifest)
        .map_err(|e| Error::invalid(format!("cannot serialize manifest: {e}")))?;
    text.push('\n');
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub(crate) fn ensure_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Debug, PartialEq, Serialize, Deserialize)]
    struct Knobs {
        alpha: f64,
        count: usize,
        label: String,
    }

    fn defaults() -> Knobs {
        Knobs { alpha: 0.5, count: 4, label: "base".to_string() }
    }

    #[test]
    fn config_file_overrides_defaults_shallowly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("knobs.json");
        std::fs::write(&path, r#"{"count": 9}"#).unwrap();
        let got = resolve_with_config(defaults(), Some(&path)).unwrap();
        assert_eq!(got, Knobs { alpha: 0.5, count: 9, label: "base".to_string() });
    }

    #[test]
    fn missing_config_keeps_defaults() {
        let got = resolve_with_config(defaults(), None).unwrap();
        assert_eq!(got, defaults());
    }

    #[test]
    fn unknown_config_key_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("knobs.json");
        std::fs::write(&path, r#"{"cnt": 9}"#).unwrap();
        let err = resolve_with_config(defaults(), Some(&path)).unwrap_err().to_string();
        assert!(err.contains("unknown config key `cnt`"), "{err}");
    }

    #[test]
    fn malformed_json_is_rejected_with_path() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("knobs.json");
        std::fs::write(&path, "{oops").unwrap();
        let err = resolve_with_config(defaults(), Some(&path)).unwrap_err().to_string();
        assert!(err.contains("invalid JSON"), "{err}");
        assert!(err.contains("knobs.json"), "{err}");
    }

    #[test]
    fn sha256_matches_known_vector() {
        // Standard test vector for the empty string.
        assert_eq!(
            sha256_hex(b""),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
    }

    #[test]
    fn params_hash_depends_only_on_bits() {
        let a = params_sha256(&[1.0, -0.5, 0.25]);
        let b = params_sha256(&[1.0, -0.5, 0.25]);
        let c = params_sha256(&[1.0, -0.5, 0.2500001]);
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn cli_parses_all_subcommands() {
        for args in [
            vec!["rddpm", "build-data", "--out", "/tmp/x"],
            vec!["rddpm", "train", "--out", "/tmp/x", "--data", "d.rdds"],
            vec!["rddpm", "segment", "--out", "/tmp/x", "--checkpoint", "m.ckpt", "--image", "i.png"],
            vec!["rddpm", "evaluate", "--out", "/tmp/x", "--checkpoint", "m.ckpt", "--data", "d.rdds"],
            vec!["rddpm", "sweep", "--out", "/tmp/x", "--seeds", "0,1"],
        ] {
            Cli::try_parse_from(&args).unwrap_or_else(|e| panic!("{args:?}: {e}"));
        }
    }

    #[test]
    fn profile_scales_are_ordered() {
        let ci = Profile::Ci.scale();
        let desk = Profile::Desk.scale();
        let full = Profile::Full.scale();
        assert!(ci.n_train < desk.n_train && desk.n_train < full.n_train);
        assert!(ci.t_steps < desk.t_steps && desk.t_steps < full.t_steps);
    }
}
