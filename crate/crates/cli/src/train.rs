//! `pixelcam train`: runs one training stage into a fresh run directory.
//! The baseline stage trains encoder plus image head from scratch (or a
//! provided initialization); the pixelcam stage warm-starts from a baseline
//! checkpoint and adds the pixel head.

use crate::manifest::{prepare_out_dir, tool_version, write_manifest, RunManifest};
use anyhow::{bail, Context, Result};
use pixelcam::model::{load_checkpoint, ModelConfig, ModelParams};
use pixelcam::storage::load_dataset;
use pixelcam::trainer::{
    train_baseline, train_pixelcam, CamSelect, RunSnapshot, TrainConfig, B_CL_FILE, B_LOC_FILE,
};
use std::fs;
use std::path::{Path, PathBuf};

#[derive(Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Stage {
    Baseline,
    Pixelcam,
}

#[derive(Clone, Copy, clap::ValueEnum)]
pub enum CamSelectArg {
    Bloc,
    Bcl,
}

#[derive(clap::Args)]
pub struct Args {
    /// Which stage to train.
    #[arg(long, value_enum)]
    stage: Stage,
    /// Dataset directory from `generate`.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Model + training config (JSON); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the pixel branch weight.
    #[arg(long)]
    lambda: Option<f64>,
    /// Baseline run directory (or a checkpoint file) to warm-start from.
    #[arg(long, required_if_eq("stage", "pixelcam"))]
    baseline_checkpoint: Option<PathBuf>,
    /// Which baseline checkpoint to harvest from.
    #[arg(long, value_enum, required_if_eq("stage", "pixelcam"))]
    cam_select: Option<CamSelectArg>,
    /// Replace a non-empty output directory.
    #[arg(long)]
    force: bool,
    /// Print the effective config as JSON and exit without training.
    #[arg(long)]
    print_config: bool,
}

/// Benchmark-scale defaults: three resolution-preserving conv layers,
/// binary classification, linear pixel head.
pub fn default_snapshot() -> RunSnapshot {
    RunSnapshot {
        model: ModelConfig::default(),
        train: TrainConfig::default(),
    }
}

pub fn load_snapshot(path: Option<&Path>) -> Result<RunSnapshot> {
    match path {
        Some(p) => serde_json::from_slice(
            &fs::read(p).with_context(|| format!("reading {}", p.display()))?,
        )
        .with_context(|| format!("parsing {}", p.display())),
        None => Ok(default_snapshot()),
    }
}

/// Resolves a baseline argument to a concrete checkpoint file: run
/// directories pick B-loc or B-cl per `cam_select`, files are used as-is.
pub fn resolve_baseline(path: &Path, cam_select: CamSelect) -> PathBuf {
    if path.is_dir() {
        path.join(match cam_select {
            CamSelect::BLoc => B_LOC_FILE,
            CamSelect::BCl => B_CL_FILE,
        })
    } else {
        path.to_path_buf()
    }
}

fn check_architecture(checkpoint: &ModelConfig, configured: &ModelConfig) -> Result<()> {
    if checkpoint.conv_widths != configured.conv_widths
        || checkpoint.kernel_size != configured.kernel_size
        || checkpoint.num_classes != configured.num_classes
        || checkpoint.downsample_factor != configured.downsample_factor
    {
        bail!(
            "checkpoint architecture (widths {:?}, kernel {}, classes {}, downsample {}) \
             does not match the configured model (widths {:?}, kernel {}, classes {}, downsample {})",
            checkpoint.conv_widths,
            checkpoint.kernel_size,
            checkpoint.num_classes,
            checkpoint.downsample_factor,
            configured.conv_widths,
            configured.kernel_size,
            configured.num_classes,
            configured.downsample_factor
        );
    }
    Ok(())
}

/// Loads the baseline parameters a stage-2 run warm-starts from.
pub fn load_baseline(
    arg: &Path,
    cam_select: CamSelect,
    configured: &ModelConfig,
) -> Result<ModelParams> {
    let path = resolve_baseline(arg, cam_select);
    let (ckpt_config, params) =
        load_checkpoint(&path).with_context(|| format!("loading {}", path.display()))?;
    check_architecture(&ckpt_config, configured)?;
    Ok(params)
}

pub fn run(args: Args) -> Result<()> {
    let mut snapshot = load_snapshot(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        snapshot.train.seed = seed;
    }
    if let Some(lambda) = args.lambda {
        snapshot.train.lambda = lambda;
    }
    if let Some(cs) = args.cam_select {
        snapshot.train.cam_select = match cs {
            CamSelectArg::Bloc => CamSelect::BLoc,
            CamSelectArg::Bcl => CamSelect::BCl,
        };
    }
    snapshot.model.validate()?;
    snapshot.train.validate()?;
    if args.print_config {
        println!("{}", serde_json::to_string_pretty(&snapshot)?);
        return Ok(());
    }

    let data_dir = args.data.context("--data is required")?;
    let out = args.out.context("--out is required")?;
    let loaded = load_dataset(&data_dir)?;
    prepare_out_dir(&out, args.force)?;

    let mut inputs = vec![data_dir.display().to_string()];
    match args.stage {
        Stage::Baseline => {
            train_baseline(
                &loaded.data,
                &loaded.val_full_supervision,
                &snapshot.model,
                &snapshot.train,
                &out,
                None,
            )?;
        }
        Stage::Pixelcam => {
            let arg = args
                .baseline_checkpoint
                .as_deref()
                .context("--baseline-checkpoint is required for the pixelcam stage")?;
            let baseline = load_baseline(arg, snapshot.train.cam_select, &snapshot.model)?;
            inputs.push(
                resolve_baseline(arg, snapshot.train.cam_select)
                    .display()
                    .to_string(),
            );
            train_pixelcam(
                &loaded.data,
                &loaded.val_full_supervision,
                &snapshot.model,
                &snapshot.train,
                &out,
                &baseline,
            )?;
        }
    }

    write_manifest(
        &out,
        &RunManifest {
            command: format!(
                "train --stage {}",
                match args.stage {
                    Stage::Baseline => "baseline",
                    Stage::Pixelcam => "pixelcam",
                }
            ),
            config: serde_json::to_value(&snapshot)?,
            seed: snapshot.train.seed,
            inputs,
            outputs: vec![
                "b_loc.pxcm".into(),
                "b_cl.pxcm".into(),
                "final.pxcm".into(),
                "train_log.csv".into(),
                "selection.json".into(),
                "config.json".into(),
            ],
            tool_version: tool_version(),
        },
    )
}
