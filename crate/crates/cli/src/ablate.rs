//! `pixelcam ablate`: sweeps one hyperparameter axis with everything else
//! held at the base config. A single baseline run feeds every cell; each
//! cell is a full second-stage training run in its own subdirectory, driven
//! through a child `train` process so `--parallel` can overlap them. The
//! consolidated table lands in `ablation.csv`.

use crate::manifest::{prepare_out_dir, tool_version, write_manifest, RunManifest};
use crate::train::load_snapshot;
use anyhow::{bail, Context, Result};
use pixelcam::model::{load_checkpoint, PixelHeadKind};
use pixelcam::storage::load_dataset;
use pixelcam::trainer::{
    accuracy, supervised_val_pxap, train_baseline, CamSelect, MapSource, RunSnapshot, SamplerKind,
    B_LOC_FILE,
};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Child, Command};

#[derive(Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Axis {
    /// Pixel-branch weight.
    Lambda,
    /// Sampled pixels per side.
    Npixels,
    /// Pseudo-label sampler.
    Sampler,
    /// Pixel head shape.
    Head,
    /// Which baseline checkpoint supplies the pseudo-labels.
    Camselect,
}

#[derive(clap::Args)]
pub struct Args {
    /// Hyperparameter to sweep.
    #[arg(long, value_enum)]
    axis: Axis,
    /// Dataset directory from `generate`.
    #[arg(long)]
    data: PathBuf,
    /// Base model + training config (JSON); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory: one subdirectory per cell plus the table.
    #[arg(long)]
    out: PathBuf,
    /// Reuse this baseline run directory instead of training one.
    #[arg(long)]
    baseline: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// How many cells train at once.
    #[arg(long, default_value_t = 1)]
    parallel: usize,
    /// Replace a non-empty output directory.
    #[arg(long)]
    force: bool,
}

/// One cell: its directory name, its value label for the table, and the
/// config it trains with.
struct Cell {
    name: String,
    value: String,
    snapshot: RunSnapshot,
}

fn cells_for(axis: Axis, base: &RunSnapshot) -> Vec<Cell> {
    let mut cells = Vec::new();
    let mut push = |name: String, value: String, snapshot: RunSnapshot| {
        cells.push(Cell {
            name,
            value,
            snapshot,
        })
    };
    match axis {
        Axis::Lambda => {
            for &l in &base.train.lambda_grid {
                let mut s = base.clone();
                s.train.lambda = l;
                push(format!("lambda-{l}"), format!("{l}"), s);
            }
        }
        Axis::Npixels => {
            for &n in &base.train.n_grid {
                let mut s = base.clone();
                s.train.n_pixels = n;
                push(format!("npixels-{n}"), format!("{n}"), s);
            }
        }
        Axis::Sampler => {
            for (tag, kind) in [("pb", SamplerKind::Pb), ("th", SamplerKind::Th)] {
                let mut s = base.clone();
                s.train.sampler = kind;
                push(format!("sampler-{tag}"), tag.to_string(), s);
            }
        }
        Axis::Head => {
            for (tag, kind) in [
                ("linear", PixelHeadKind::Linear),
                ("multilayer", PixelHeadKind::MultiLayer),
            ] {
                let mut s = base.clone();
                s.model.pixel_head = kind;
                push(format!("head-{tag}"), tag.to_string(), s);
            }
        }
        Axis::Camselect => {
            for (tag, kind) in [("b-loc", CamSelect::BLoc), ("b-cl", CamSelect::BCl)] {
                let mut s = base.clone();
                s.train.cam_select = kind;
                push(format!("camselect-{tag}"), tag.to_string(), s);
            }
        }
    }
    cells
}

fn axis_name(axis: Axis) -> &'static str {
    match axis {
        Axis::Lambda => "lambda",
        Axis::Npixels => "npixels",
        Axis::Sampler => "sampler",
        Axis::Head => "head",
        Axis::Camselect => "camselect",
    }
}

fn spawn_cell(data: &Path, baseline: &Path, out: &Path, cell: &Cell) -> Result<Child> {
    let exe = std::env::current_exe().context("locating the running executable")?;
    let config_path = out.join(format!("{}.json", cell.name));
    fs::write(&config_path, serde_json::to_vec_pretty(&cell.snapshot)?)?;
    let cam_select = match cell.snapshot.train.cam_select {
        CamSelect::BLoc => "bloc",
        CamSelect::BCl => "bcl",
    };
    Command::new(exe)
        .arg("train")
        .arg("--stage")
        .arg("pixelcam")
        .arg("--data")
        .arg(data)
        .arg("--config")
        .arg(&config_path)
        .arg("--out")
        .arg(out.join(&cell.name))
        .arg("--baseline-checkpoint")
        .arg(baseline)
        .arg("--cam-select")
        .arg(cam_select)
        .spawn()
        .with_context(|| format!("spawning the {} cell", cell.name))
}

pub fn run(args: Args) -> Result<()> {
    if args.parallel == 0 {
        bail!("--parallel must be at least 1");
    }
    let mut base = load_snapshot(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        base.train.seed = seed;
    }
    base.model.validate()?;
    base.train.validate()?;
    let loaded = load_dataset(&args.data)?;
    prepare_out_dir(&args.out, args.force)?;

    // Every cell harvests pseudo-labels from the same first-stage run.
    let baseline_dir = match &args.baseline {
        Some(dir) => dir.clone(),
        None => {
            let dir = args.out.join("baseline");
            fs::create_dir(&dir)?;
            log::info!("training the shared baseline in {}", dir.display());
            train_baseline(
                &loaded.data,
                &loaded.val_full_supervision,
                &base.model,
                &base.train,
                &dir,
                None,
            )?;
            dir
        }
    };

    let cells = cells_for(args.axis, &base);
    for chunk in cells.chunks(args.parallel.max(1)) {
        let mut children: Vec<(usize, Child)> = Vec::new();
        for (i, cell) in chunk.iter().enumerate() {
            log::info!("training cell {}", cell.name);
            children.push((i, spawn_cell(&args.data, &baseline_dir, &args.out, cell)?));
        }
        for (i, mut child) in children {
            let status = child.wait()?;
            if !status.success() {
                bail!("cell {} failed with {status}", chunk[i].name);
            }
        }
    }

    // Score each cell's best-localization checkpoint: validation numbers on
    // the supervised subset, test numbers on the full test split.
    let mut csv = String::from("axis,value,val_pxap,val_accuracy,test_pxap,test_cl_accuracy\n");
    for cell in &cells {
        let ckpt = args.out.join(&cell.name).join(B_LOC_FILE);
        let (config, params) =
            load_checkpoint(&ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
        let val_pxap = supervised_val_pxap(
            &params,
            &config,
            &loaded.data.val,
            &loaded.val_full_supervision,
            MapSource::PixelHead,
        )?;
        let val_acc = accuracy(&params, &config, &loaded.data.val)?;
        let report = crate::evaluate::build_report(&params, &config, &loaded.data.test, 0.5)?;
        csv.push_str(&format!(
            "{},{},{:.6},{:.6},{:.6},{:.6}\n",
            axis_name(args.axis),
            cell.value,
            val_pxap,
            val_acc,
            report.pxap,
            report.cl_acc
        ));
    }
    fs::write(args.out.join("ablation.csv"), &csv)?;

    let mut outputs = vec!["ablation.csv".to_string()];
    if args.baseline.is_none() {
        outputs.push("baseline/".into());
    }
    for cell in &cells {
        outputs.push(format!("{}.json", cell.name));
        outputs.push(format!("{}/", cell.name));
    }
    write_manifest(
        &args.out,
        &RunManifest {
            command: format!("ablate --axis {}", axis_name(args.axis)),
            config: serde_json::to_value(&base)?,
            seed: base.train.seed,
            inputs: vec![args.data.display().to_string()],
            outputs,
            tool_version: tool_version(),
        },
    )
}
