//! Command-line front end. `run_from` parses arguments, resolves the
//! experiment configuration and dispatches to a pipeline verb.

pub mod commands;
pub mod config;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::error::{Error, Result};
use crate::eval::Reducer;
use crate::io::{PhantomProfile, Split, Vendor};
use crate::net::ModelKind;

pub use commands::{
    cmd_evaluate, cmd_fingerprint, cmd_loo, cmd_phantom, cmd_plan, cmd_predict, cmd_train, loo_split,
    parallel_map, Evaluation, FluidContent, LooManifest, PhantomRequest,
};
pub use config::{ExperimentConfig, PlanOverrides};

fn parse_triple<T: std::str::FromStr>(s: &str) -> std::result::Result<[T; 3], String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        return Err(format!("expected three comma-separated values, got `{s}`"));
    }
    let mut out = Vec::with_capacity(3);
    for p in parts {
        out.push(p.parse::<T>().map_err(|_| format!("cannot parse `{p}`"))?);
    }
    out.try_into().map_err(|_| unreachable!())
}

fn parse_usize3(s: &str) -> std::result::Result<[usize; 3], String> {
    parse_triple(s)
}

fn parse_f64x3(s: &str) -> std::result::Result<[f64; 3], String> {
    parse_triple(s)
}

fn parse_split(s: &str) -> std::result::Result<Split, String> {
    match s.to_ascii_lowercase().as_str() {
        "train" => Ok(Split::Train),
        "test" => Ok(Split::Test),
        _ => Err(format!("unknown split `{s}` (train or test)")),
    }
}

/// `max`, `volume-fraction` or `percentile:<q>`.
fn parse_reducer(s: &str) -> std::result::Result<Reducer, String> {
    let s = s.to_ascii_lowercase();
    match s.as_str() {
        "max" => Ok(Reducer::Max),
        "volume-fraction" | "volume_fraction" => Ok(Reducer::VolumeFraction),
        _ => {
            let q = s
                .strip_prefix("percentile:")
                .ok_or_else(|| format!("unknown reducer `{s}`"))?
                .parse::<f64>()
                .map_err(|e| e.to_string())?;
            if !(0.0..=100.0).contains(&q) {
                return Err(format!("percentile {q} outside [0, 100]"));
            }
            Ok(Reducer::Percentile(q))
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "octseg", version, about = "Retinal OCT fluid segmentation pipeline")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

/// Flags layered over the JSON config; they apply to every verb.
#[derive(Debug, Args, Default)]
pub struct GlobalArgs {
    /// Experiment configuration JSON.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seeds initialization, patch sampling and augmentation.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Single worker and fixed seeds for byte-identical outputs.
    #[arg(long, global = true)]
    pub deterministic: bool,
    #[arg(long, global = true)]
    pub model: Option<ModelKind>,
    #[arg(long, global = true, value_parser = parse_usize3)]
    pub patch: Option<[usize; 3]>,
    #[arg(long, global = true)]
    pub batch: Option<usize>,
    #[arg(long, global = true, value_parser = parse_usize3)]
    pub pools: Option<[usize; 3]>,
    #[arg(long, global = true, value_parser = parse_f64x3)]
    pub spacing: Option<[f64; 3]>,
    #[arg(long, global = true)]
    pub base_features: Option<usize>,
    #[arg(long, global = true)]
    pub max_features: Option<usize>,
    #[arg(long, global = true)]
    pub epochs: Option<usize>,
    #[arg(long, global = true)]
    pub batches_per_epoch: Option<usize>,
    #[arg(long, global = true)]
    pub lr: Option<f64>,
    /// Disable all data augmentation.
    #[arg(long, global = true)]
    pub no_augment: bool,
    /// Detection score reducer: max, volume-fraction or percentile:<q>.
    #[arg(long, global = true, value_parser = parse_reducer)]
    pub reducer: Option<Reducer>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic volume/mask pairs and an index.
    Phantom {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        count: usize,
        #[arg(long, default_value = "tiny")]
        profile: PhantomProfile,
        /// Vendor tag written to the index (defaults to the profile's).
        #[arg(long)]
        vendor: Option<Vendor>,
        #[arg(long, default_value = "train", value_parser = parse_split)]
        split: Split,
        #[arg(long, value_enum, default_value = "random")]
        fluid: FluidContent,
        /// Add to an existing index in the output directory.
        #[arg(long)]
        append: bool,
    },
    /// Summarize a dataset into a fingerprint.
    Fingerprint {
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Derive a training plan from a fingerprint.
    Plan {
        #[arg(long)]
        fingerprint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a network and write a checkpoint directory.
    Train {
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        plan: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Segment every volume in an index.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predictions against the index's masks.
    Evaluate {
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Leave-one-vendor-out experiment.
    Loo {
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        hold_out: Option<Vendor>,
        /// Only write the split manifest.
        #[arg(long)]
        dry_run: bool,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Loads the config file (if any) and layers the flags over it.
pub fn resolve_config(g: &GlobalArgs) -> Result<ExperimentConfig> {
    let mut cfg = match &g.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = g.seed {
        cfg.set_seed(s);
    }
    if let Some(w) = g.workers {
        cfg.workers = w;
    }
    cfg.deterministic |= g.deterministic;
    if let Some(m) = g.model {
        cfg.model = m;
    }
    let o = &mut cfg.plan_overrides;
    o.patch_size = g.patch.or(o.patch_size);
    o.batch_size = g.batch.or(o.batch_size);
    o.pools_per_axis = g.pools.or(o.pools_per_axis);
    o.target_spacing = g.spacing.or(o.target_spacing);
    o.base_features = g.base_features.or(o.base_features);
    o.max_features = g.max_features.or(o.max_features);
    if let Some(e) = g.epochs {
        cfg.train.max_epochs = e;
    }
    if let Some(b) = g.batches_per_epoch {
        cfg.train.batches_per_epoch = b;
    }
    if let Some(lr) = g.lr {
        cfg.train.learning_rate = lr;
    }
    if g.no_augment {
        let seed = cfg.augmentation.seed;
        cfg.augmentation = crate::train::AugmentationConfig::identity();
        cfg.augmentation.seed = seed;
    }
    if let Some(r) = g.reducer {
        cfg.detection_reducer = r;
    }
    if cfg.workers == 0 {
        return Err(Error::Config("workers must be >= 1".into()));
    }
    Ok(cfg)
}

pub fn execute(cli: Cli) -> Result<()> {
    let cfg = resolve_config(&cli.global)?;
    match cli.command {
        Command::Phantom {
            out,
            count,
            profile,
            vendor,
            split,
            fluid,
            append,
        } => {
            let req = PhantomRequest {
                seed: cfg.seed,
                profile,
                count,
                out,
                vendor,
                split,
                fluid,
                append,
            };
            cmd_phantom(&req, &cfg).map(drop)
        }
        Command::Fingerprint { index, out } => cmd_fingerprint(&index, &out, &cfg).map(drop),
        Command::Plan { fingerprint, out } => cmd_plan(&fingerprint, &out, &cfg).map(drop),
        Command::Train { index, plan, out } => cmd_train(&index, &plan, &out, &cfg).map(drop),
        Command::Predict { checkpoint, index, out } => cmd_predict(&checkpoint, &index, &out, &cfg).map(drop),
        Command::Evaluate { index, predictions, out } => cmd_evaluate(&index, &predictions, &out, &cfg).map(drop),
        Command::Loo {
            index,
            hold_out,
            dry_run,
            out,
        } => {
            let m = cmd_loo(&index, hold_out, dry_run, &out, &cfg)?;
            println!(
                "held out {}: {} training volumes, {} test volumes",
                m.held_out_vendor, m.train_count, m.test_count
            );
            Ok(())
        }
    }
}

/// Parses `args` (including the program name) and runs; returns the exit code.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_layer_over_defaults() {
        let cli = Cli::try_parse_from([
            "octseg", "plan", "--fingerprint", "f.json", "--out", "p.json", "--patch", "32,32,16", "--seed", "7",
            "--reducer", "percentile:90",
        ])
        .unwrap();
        let cfg = resolve_config(&cli.global).unwrap();
        assert_eq!(cfg.plan_overrides.patch_size, Some([32, 32, 16]));
        assert_eq!(cfg.train.seed, 7);
        assert_eq!(cfg.detection_reducer, Reducer::Percentile(90.0));
    }

    #[test]
    fn usage_errors_exit_2() {
        assert_eq!(run_from(["octseg", "plan", "--patch", "1,2"]), 2);
        assert_eq!(run_from(["octseg", "frobnicate"]), 2);
    }

    #[test]
    fn missing_input_exit_2() {
        let dir = tempfile::tempdir().unwrap();
        let code = run_from([
            "octseg".into(),
            "fingerprint".into(),
            "--index".into(),
            dir.path().join("nope.json").into_os_string(),
            "--out".into(),
            dir.path().join("f.json").into_os_string(),
        ]);
        assert_eq!(code, 2);
    }
}
