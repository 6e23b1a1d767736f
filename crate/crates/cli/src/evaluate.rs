//! `pixelcam evaluate`: measures a checkpoint on a dataset's test split and
//! writes the metrics as JSON and CSV. Optional modes re-evaluate the same
//! checkpoint under a stain-shift series or on a second (target) dataset,
//! always keeping the decision threshold fitted on the source validation
//! split.

use crate::manifest::{prepare_out_dir, tool_version, write_manifest, RunManifest};
use anyhow::{bail, Context, Result};
use pixelcam::metrics::{
    cl_accuracy, confusion_rates, per_image_ap, pxap, report_csv, separability_index,
    MetricsReport,
};
use pixelcam::model::{classify_image, encode, load_checkpoint, ModelConfig, ModelParams};
use pixelcam::storage::load_dataset;
use pixelcam::synth::{apply_stain, stain_distance, stain_series, Sample};
use pixelcam::trainer::{loc_maps, MapSource, B_CL_FILE, B_LOC_FILE, FINAL_FILE};
use pixelcam::{metrics, Tensor};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};

#[derive(Clone, Copy, clap::ValueEnum)]
enum Which {
    BLoc,
    BCl,
    Final,
}

#[derive(clap::Args)]
pub struct Args {
    /// Checkpoint file, or a training run directory (then `--which` picks
    /// the file).
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory from `generate`.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for the reports.
    #[arg(long)]
    out: PathBuf,
    /// Checkpoint to pick when `--checkpoint` is a run directory.
    #[arg(long, value_enum, default_value = "b-loc")]
    which: Which,
    /// Also evaluate under this many stain-shift levels of growing strength.
    #[arg(long, conflicts_with = "target")]
    stain_series: Option<usize>,
    /// Also evaluate on this second dataset (source-only transfer: the
    /// threshold stays fitted on the source validation split).
    #[arg(long)]
    target: Option<PathBuf>,
    /// Seed for the stain series.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Replace a non-empty output directory.
    #[arg(long)]
    force: bool,
}

/// One evaluation outcome. Contains no paths or timestamps so repeated runs
/// with the same seed serialize byte-identically.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalRecord {
    pub split: String,
    pub domain: String,
    /// 0 for the unshifted data, 1-based level within a stain series.
    pub stain_level: usize,
    pub stain_distance: f64,
    /// "pixel-head" or "true-class-cam", depending on the checkpoint.
    pub map_source: String,
    /// Binarization threshold used for the confusion rates.
    pub threshold: f64,
    pub sample_ids: Vec<String>,
    pub metrics: MetricsReport,
}

fn resolve_checkpoint(path: &Path, which: Which) -> PathBuf {
    if path.is_dir() {
        path.join(match which {
            Which::BLoc => B_LOC_FILE,
            Which::BCl => B_CL_FILE,
            Which::Final => FINAL_FILE,
        })
    } else {
        path.to_path_buf()
    }
}

fn map_source_for(params: &ModelParams) -> MapSource {
    if params.pixel_head.is_some() {
        MapSource::PixelHead
    } else {
        MapSource::TrueClassCam
    }
}

fn source_name(source: MapSource) -> &'static str {
    match source {
        MapSource::PixelHead => "pixel-head",
        MapSource::TrueClassCam => "true-class-cam",
    }
}

fn pooled_f1(maps: &[Tensor], masks: &[Tensor], threshold: f64) -> Result<f64> {
    let c = confusion_rates(maps, masks, threshold)?;
    let (tpr, fpr) = (
        c.pxtp.context("threshold fit needs foreground pixels")?,
        c.pxfp.context("threshold fit needs background pixels")?,
    );
    // Reconstruct pooled counts from the rates and the class totals.
    let pos: f64 = masks
        .iter()
        .map(|m| m.data().iter().filter(|&&v| v >= 0.5).count() as f64)
        .sum();
    let neg: f64 = masks.iter().map(|m| m.data().len() as f64).sum::<f64>() - pos;
    let tp = tpr * pos;
    let fp = fpr * neg;
    let fn_n = pos - tp;
    let denom = 2.0 * tp + fp + fn_n;
    Ok(if denom > 0.0 { 2.0 * tp / denom } else { 0.0 })
}

/// Best pooled-F1 threshold over a uniform grid of 255 candidates, fitted on
/// the fully supervised validation subset. Calibrated pixel-head maps skip
/// this and use 0.5; raw activation maps have no natural scale and need it.
pub fn val_optimal_threshold(maps: &[Tensor], masks: &[Tensor]) -> Result<f64> {
    if maps.is_empty() {
        bail!("threshold fit needs at least one validation sample");
    }
    let mut best_t = 1.0 / 256.0;
    let mut best_f1 = f64::NEG_INFINITY;
    for k in 1..=255u32 {
        let t = f64::from(k) / 256.0;
        let f1 = pooled_f1(maps, masks, t)?;
        if f1 > best_f1 {
            best_f1 = f1;
            best_t = t;
        }
    }
    Ok(best_t)
}

/// Confusion threshold for a checkpoint on a dataset: 0.5 when the pixel
/// head provides calibrated maps, otherwise fitted on the flagged validation
/// samples.
pub fn fit_threshold(
    params: &ModelParams,
    config: &ModelConfig,
    val: &[Sample],
    val_flags: &[bool],
) -> Result<f64> {
    if params.pixel_head.is_some() {
        return Ok(0.5);
    }
    let chosen: Vec<Sample> = val
        .iter()
        .zip(val_flags)
        .filter(|(_, &f)| f)
        .map(|(s, _)| s.clone())
        .collect();
    if chosen.is_empty() {
        bail!("no fully supervised validation samples to fit a threshold on");
    }
    let maps = loc_maps(params, config, &chosen, MapSource::TrueClassCam)?;
    let masks: Vec<Tensor> = chosen.iter().map(|s| s.mask.clone()).collect();
    val_optimal_threshold(&maps, &masks)
}

/// Runs the full metric battery on one sample list.
pub fn build_report(
    params: &ModelParams,
    config: &ModelConfig,
    samples: &[Sample],
    threshold: f64,
) -> Result<MetricsReport> {
    if samples.is_empty() {
        bail!("evaluation needs at least one sample");
    }
    let source = map_source_for(params);
    let maps = loc_maps(params, config, samples, source)?;
    let masks: Vec<Tensor> = samples.iter().map(|s| s.mask.clone()).collect();

    let mut pred = Vec::with_capacity(samples.len());
    let mut per_image_j = Vec::new();
    let mut j_images_skipped = 0usize;
    let mut j_infinite_count = 0usize;
    for s in samples {
        let f = encode(&s.image, params, config)?;
        let probs = classify_image(&f, &params.image_head)?;
        pred.push(metrics::argmax_label(probs.data()));
        let single_class = {
            let fg = s.mask.data().iter().filter(|&&v| v >= 0.5).count();
            fg == 0 || fg == s.mask.data().len()
        };
        if single_class {
            j_images_skipped += 1;
        } else {
            let j = separability_index(&f, &s.mask)?;
            if j.is_finite() {
                per_image_j.push(j);
            } else {
                j_infinite_count += 1;
            }
        }
    }
    let truth: Vec<usize> = samples.iter().map(|s| s.label).collect();
    let (ap_values, ap_images_skipped) = per_image_ap(&maps, &masks)?;

    Ok(MetricsReport {
        pxap: pxap(&maps, &masks)?,
        cl_acc: cl_accuracy(&pred, &truth)?,
        confusion: confusion_rates(&maps, &masks, threshold)?,
        per_image_ap: ap_values,
        per_image_j,
        ap_images_skipped,
        j_images_skipped,
        j_infinite_count,
    })
}

fn record_for(
    params: &ModelParams,
    config: &ModelConfig,
    samples: &[Sample],
    threshold: f64,
    stain_level: usize,
    stain_distance: f64,
) -> Result<EvalRecord> {
    Ok(EvalRecord {
        split: "test".into(),
        domain: samples[0].domain.clone(),
        stain_level,
        stain_distance,
        map_source: source_name(map_source_for(params)).into(),
        threshold,
        sample_ids: samples.iter().map(|s| s.id.clone()).collect(),
        metrics: build_report(params, config, samples, threshold)?,
    })
}

fn write_record(dir: &Path, stem: &str, record: &EvalRecord) -> Result<Vec<String>> {
    let json = format!("{stem}.json");
    let csv = format!("{stem}.csv");
    fs::write(dir.join(&json), serde_json::to_vec_pretty(record)?)?;
    fs::write(dir.join(&csv), report_csv(&record.metrics))?;
    Ok(vec![json, csv])
}

pub fn run(args: Args) -> Result<()> {
    let ckpt_path = resolve_checkpoint(&args.checkpoint, args.which);
    let (config, params) =
        load_checkpoint(&ckpt_path).with_context(|| format!("loading {}", ckpt_path.display()))?;
    let loaded = load_dataset(&args.data)?;
    prepare_out_dir(&args.out, args.force)?;
    let mut outputs = Vec::new();
    let mut inputs = vec![
        ckpt_path.display().to_string(),
        args.data.display().to_string(),
    ];

    let threshold = fit_threshold(
        &params,
        &config,
        &loaded.data.val,
        &loaded.val_full_supervision,
    )?;
    let base = record_for(&params, &config, &loaded.data.test, threshold, 0, 0.0)?;
    log::info!(
        "test pxap {:.4}, cl accuracy {:.4} at threshold {threshold:.4}",
        base.metrics.pxap,
        base.metrics.cl_acc
    );
    outputs.extend(write_record(&args.out, "evaluation", &base)?);

    if let Some(levels) = args.stain_series {
        let series = stain_series(levels, args.seed)?;
        let mut rows = vec![(0usize, 0.0, base.metrics.pxap, base.metrics.cl_acc)];
        for (i, t) in series.iter().enumerate() {
            let level = i + 1;
            let shifted: Vec<Sample> = loaded
                .data
                .test
                .iter()
                .map(|s| {
                    let mut s = s.clone();
                    s.image = apply_stain(&s.image, t)?;
                    Ok(s)
                })
                .collect::<Result<_>>()?;
            let rec = record_for(
                &params,
                &config,
                &shifted,
                threshold,
                level,
                stain_distance(t),
            )?;
            rows.push((level, rec.stain_distance, rec.metrics.pxap, rec.metrics.cl_acc));
            outputs.extend(write_record(
                &args.out,
                &format!("report-stain-{level:02}"),
                &rec,
            )?);
        }
        let mut csv = String::from("level,distance,pxap,cl_accuracy\n");
        for (level, dist, px, cl) in rows {
            csv.push_str(&format!("{level},{dist:.6},{px:.6},{cl:.6}\n"));
        }
        fs::write(args.out.join("stains.csv"), csv)?;
        outputs.push("stains.csv".into());
    }

    if let Some(target_dir) = &args.target {
        let target = load_dataset(target_dir)?;
        inputs.push(target_dir.display().to_string());
        let rec = record_for(&params, &config, &target.data.test, threshold, 0, 0.0)?;
        log::info!(
            "target pxap {:.4}, cl accuracy {:.4}",
            rec.metrics.pxap,
            rec.metrics.cl_acc
        );
        outputs.extend(write_record(&args.out, "evaluation-target", &rec)?);
    }

    write_manifest(
        &args.out,
        &RunManifest {
            command: "evaluate".into(),
            config: serde_json::json!({
                "which": source_name(map_source_for(&params)),
                "threshold": threshold,
                "stain_series": args.stain_series,
            }),
            seed: args.seed,
            inputs,
            outputs,
            tool_version: tool_version(),
        },
    )
}
