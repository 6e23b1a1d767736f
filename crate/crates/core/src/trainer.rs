//! Two-stage training orchestration. Stage 1 trains the shared encoder and
//! the image head on image labels alone. Stage 2 warm-starts from a Stage-1
//! checkpoint, attaches a fresh pixel head, and fine-tunes everything with
//! the composite objective, harvesting pixel pseudo-labels from the frozen
//! Stage-1 model at every step.
//!
//! Every random decision flows through a named stream derived from the run
//! seed, so a (seed, config, dataset) triple fully determines every
//! checkpoint byte. Harvest streams are separate from shuffle and
//! augmentation streams: turning the pixel branch on or off never perturbs
//! batch order.

use crate::error::{Error, Result};
use crate::loss::{composite_forward_backward, ModelGrads};
use crate::metrics::{argmax_label, pxap};
use crate::model::{
    baseline_cam, classify_image, classify_pixels, encode, save_checkpoint, Cam, ModelConfig,
    ModelParams,
};
use crate::nn::{sgd_step, SgdConfig, SgdState};
use crate::sampling::{sample_pb, sample_th, PixelPseudoLabels};
use crate::seed::rng_for;
use crate::synth::{Dataset, Sample};
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

/// How pixel pseudo-labels are drawn from an activation map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplerKind {
    /// Probability-weighted draws: foreground by activation, background by
    /// its complement.
    Pb,
    /// Otsu threshold split, uniform draws within each region.
    Th,
}

/// Which Stage-1 checkpoint supplies CAMs for Stage 2.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CamSelect {
    /// The epoch with the best validation localization.
    BLoc,
    /// The epoch with the best validation classification accuracy.
    BCl,
}

/// What a grid-search cell is scored by.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SelectionCriterion {
    Accuracy,
    PxAp,
}

/// Hyperparameters of one training run plus the search grids around them.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_grid: Vec<f64>,
    /// Multiplier applied to the learning rate for the last third of the
    /// epochs.
    pub decay_factor: f64,
    pub decay_grid: Vec<f64>,
    pub weight_decay: f64,
    /// Weight of the pixel branch in the composite loss.
    pub lambda: f64,
    pub lambda_grid: Vec<f64>,
    /// Pixels sampled per side (foreground and background) each step.
    pub n_pixels: usize,
    pub n_grid: Vec<usize>,
    pub sampler: SamplerKind,
    pub cam_select: CamSelect,
    /// Random horizontal/vertical flips during training.
    pub augment: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 15,
            batch_size: 32,
            lr: 1e-2,
            lr_grid: vec![1e-4, 1e-3, 1e-2],
            decay_factor: 0.1,
            decay_grid: vec![0.1, 0.4, 0.9],
            weight_decay: 1e-4,
            lambda: 1.0,
            lambda_grid: vec![1.0, 0.5, 0.1, 0.01, 0.001],
            n_pixels: 5,
            n_grid: vec![1, 5, 10, 20],
            sampler: SamplerKind::Pb,
            cam_select: CamSelect::BLoc,
            augment: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config(format!(
                "epochs {} and batch size {} must be positive",
                self.epochs, self.batch_size
            )));
        }
        if self.lr_grid.is_empty() || self.decay_grid.is_empty() {
            return Err(Error::Config("learning-rate and decay grids must be nonempty".into()));
        }
        if self.lambda_grid.is_empty() || self.n_grid.is_empty() {
            return Err(Error::Config("lambda and pixel-count grids must be nonempty".into()));
        }
        if self.lr < 0.0 || self.weight_decay < 0.0 {
            return Err(Error::Config(format!(
                "lr {} and weight decay {} must be >= 0",
                self.lr, self.weight_decay
            )));
        }
        if !(0.0..=1.0).contains(&self.decay_factor) || self.decay_factor == 0.0 {
            return Err(Error::Config(format!(
                "decay factor {} must be in (0, 1]",
                self.decay_factor
            )));
        }
        if self.lambda < 0.0 {
            return Err(Error::Config(format!("lambda {} must be >= 0", self.lambda)));
        }
        if self.n_pixels == 0 || self.n_grid.contains(&0) {
            return Err(Error::Config("pixel counts must be >= 1".into()));
        }
        Ok(())
    }

    /// First epoch index at which the decayed learning rate applies: the
    /// final third of training.
    pub fn decay_start(&self) -> usize {
        (2 * self.epochs).div_ceil(3)
    }
}

/// Validation scores measured after one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub val_accuracy: f64,
    pub val_pxap: f64,
}

/// Per-epoch validation trace and the chosen checkpoints. Checkpoint paths
/// are file names relative to the run directory, so the record's bytes do
/// not depend on where the run happened.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SelectionRecord {
    pub rows: Vec<EpochRow>,
    pub b_loc_epoch: usize,
    pub b_cl_epoch: usize,
    pub b_loc_path: String,
    pub b_cl_path: String,
    pub final_path: String,
}

/// A finished training run: its selection record and the final parameters.
#[derive(Debug)]
pub struct TrainOutcome {
    pub record: SelectionRecord,
    pub params: ModelParams,
}

/// Index of the maximum; ties resolve to the earliest index. Invariant
/// under any positive rescaling of the values.
pub fn argmax_earliest(values: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in values.iter().enumerate() {
        if best.is_none_or(|b| v > values[b]) {
            best = Some(i);
        }
    }
    best
}

/// Where validation localization maps come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MapSource {
    /// Normalized activation map of the true class (Stage 1).
    TrueClassCam,
    /// Foreground channel of the pixel head (Stage 2).
    PixelHead,
}

/// Fraction of samples whose predicted class matches the label.
pub fn accuracy(params: &ModelParams, config: &ModelConfig, samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Metric("accuracy over an empty sample set".into()));
    }
    let mut hits = 0usize;
    for s in samples {
        let f = encode(&s.image, params, config)?;
        let probs = classify_image(&f, &params.image_head)?;
        if argmax_label(probs.data()) == s.label {
            hits += 1;
        }
    }
    Ok(hits as f64 / samples.len() as f64)
}

/// One localization map per sample from the requested source.
pub fn loc_maps(
    params: &ModelParams,
    config: &ModelConfig,
    samples: &[Sample],
    source: MapSource,
) -> Result<Vec<Tensor>> {
    samples
        .iter()
        .map(|s| {
            let f = encode(&s.image, params, config)?;
            match source {
                MapSource::TrueClassCam => {
                    baseline_cam(&f, &params.image_head.w, s.label, "true-class").map(|c| c.map)
                }
                MapSource::PixelHead => {
                    let head = params
                        .pixel_head
                        .as_ref()
                        .ok_or_else(|| Error::Config("model has no pixel head".into()))?;
                    classify_pixels(&f, head).map(|l| l.score_map())
                }
            }
        })
        .collect()
}

/// Pooled localization score over the validation samples whose masks are
/// cleared for model selection.
pub fn supervised_val_pxap(
    params: &ModelParams,
    config: &ModelConfig,
    samples: &[Sample],
    full_supervision: &[bool],
    source: MapSource,
) -> Result<f64> {
    if samples.len() != full_supervision.len() {
        return Err(Error::Dimension(format!(
            "{} samples but {} supervision flags",
            samples.len(),
            full_supervision.len()
        )));
    }
    let chosen: Vec<Sample> = samples
        .iter()
        .zip(full_supervision)
        .filter(|(_, &f)| f)
        .map(|(s, _)| s.clone())
        .collect();
    if chosen.is_empty() {
        return Err(Error::Config(
            "no fully supervised validation samples for localization selection".into(),
        ));
    }
    let maps = loc_maps(params, config, &chosen, source)?;
    let masks: Vec<Tensor> = chosen.iter().map(|s| s.mask.clone()).collect();
    pxap(&maps, &masks)
}

/// Pixel pseudo-labels for one image: true-class activation map from the
/// frozen baseline, then the configured sampler.
pub fn harvest_pseudolabels(
    baseline: &ModelParams,
    config: &ModelConfig,
    image: &Tensor,
    y: usize,
    n: usize,
    sampler: SamplerKind,
    rng: &mut ChaCha8Rng,
) -> Result<PixelPseudoLabels> {
    let f = encode(image, baseline, config)?;
    let cam = baseline_cam(&f, &baseline.image_head.w, y, "baseline")?;
    match sampler {
        SamplerKind::Pb => sample_pb(&cam, n, rng),
        SamplerKind::Th => sample_th(&cam, n, rng),
    }
}

fn flip_image(x: &Tensor, horizontal: bool, vertical: bool) -> Tensor {
    if !horizontal && !vertical {
        return x.clone();
    }
    let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut out = Tensor::zeros(&[h, w, c]);
    for i in 0..h {
        let si = if vertical { h - 1 - i } else { i };
        for j in 0..w {
            let sj = if horizontal { w - 1 - j } else { j };
            for ch in 0..c {
                out.set3(i, j, ch, x.at3(si, sj, ch));
            }
        }
    }
    out
}

/// Config snapshot written next to each run's artifacts.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSnapshot {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

/// Checkpoint file names inside a run directory.
pub const B_LOC_FILE: &str = "b_loc.pxcm";
pub const B_CL_FILE: &str = "b_cl.pxcm";
pub const FINAL_FILE: &str = "final.pxcm";

fn run_training(
    data: &Dataset,
    val_flags: &[bool],
    mc: &ModelConfig,
    tc: &TrainConfig,
    run_dir: &Path,
    mut params: ModelParams,
    baseline: Option<&ModelParams>,
) -> Result<TrainOutcome> {
    mc.validate()?;
    tc.validate()?;
    if data.train.is_empty() || data.val.is_empty() {
        return Err(Error::Config("training needs nonempty train and val splits".into()));
    }
    fs::create_dir_all(run_dir)?;

    let source = if baseline.is_some() {
        MapSource::PixelHead
    } else {
        MapSource::TrueClassCam
    };
    let lambda = if baseline.is_some() { tc.lambda } else { 0.0 };

    let log_path = run_dir.join("train_log.csv");
    let mut log = BufWriter::new(File::create(&log_path)?);
    writeln!(log, "step,epoch,image_ce,pixel_ce,total,lambda")?;

    let mut state = {
        let slots = params.named_tensors();
        let refs: Vec<&Tensor> = slots.iter().map(|(_, t)| *t).collect();
        SgdState::for_params(&refs)
    };

    let b_loc_path = run_dir.join(B_LOC_FILE);
    let b_cl_path = run_dir.join(B_CL_FILE);
    let final_path = run_dir.join(FINAL_FILE);
    let decay_start = tc.decay_start();
    // Activation maps from the frozen baseline depend only on the image and
    // its flip, so they are computed once per (image, flip) pair.
    let mut cam_cache: HashMap<(usize, u8), Cam> = HashMap::new();
    let mut rows: Vec<EpochRow> = Vec::with_capacity(tc.epochs);
    let (mut best_pxap, mut best_acc) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    let (mut b_loc_epoch, mut b_cl_epoch) = (0usize, 0usize);
    let mut step_counter = 0u64;

    for epoch in 0..tc.epochs {
        let lr = tc.lr * if epoch >= decay_start { tc.decay_factor } else { 1.0 };
        let cfg = SgdConfig {
            lr,
            weight_decay: tc.weight_decay,
            momentum: 0.9,
        };
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        order.shuffle(&mut rng_for(tc.seed, "shuffle", &[epoch as u64]));

        for batch in order.chunks(tc.batch_size) {
            step_counter += 1;
            let mut acc = ModelGrads::zeros_like(&params);
            let (mut sum_image, mut sum_pixel, mut sum_total) = (0.0, 0.0, 0.0);
            for &idx in batch {
                let sample = &data.train[idx];
                let (fh, fv) = if tc.augment {
                    let mut arng = rng_for(tc.seed, "augment", &[epoch as u64, idx as u64]);
                    (arng.gen_bool(0.5), arng.gen_bool(0.5))
                } else {
                    (false, false)
                };
                let x = flip_image(&sample.image, fh, fv);

                let labels = match baseline {
                    Some(frozen) => {
                        let key = (idx, u8::from(fh) | (u8::from(fv) << 1));
                        if !cam_cache.contains_key(&key) {
                            let f = encode(&x, frozen, mc)?;
                            let cam =
                                baseline_cam(&f, &frozen.image_head.w, sample.label, "baseline")?;
                            cam_cache.insert(key, cam);
                        }
                        let mut hrng =
                            rng_for(tc.seed, "harvest", &[epoch as u64, idx as u64]);
                        Some(match tc.sampler {
                            SamplerKind::Pb => sample_pb(&cam_cache[&key], tc.n_pixels, &mut hrng)?,
                            SamplerKind::Th => sample_th(&cam_cache[&key], tc.n_pixels, &mut hrng)?,
                        })
                    }
                    _ => None,
                };

                let step =
                    composite_forward_backward(&x, sample.label, labels.as_ref(), &params, mc, lambda)?;
                if !step.breakdown.total.is_finite() {
                    return Err(Error::Training {
                        step: step_counter,
                        msg: "non-finite loss; last good checkpoints retained".into(),
                    });
                }
                acc.accumulate_scaled(&step.grads, 1.0)?;
                sum_image += step.breakdown.image_ce;
                sum_pixel += step.breakdown.pixel_ce;
                sum_total += step.breakdown.total;
            }
            let bn = batch.len() as f64;
            acc.scale(1.0 / bn);
            {
                let grads = acc.tensors();
                let mut slots = params.tensors_mut();
                sgd_step(&mut slots, &grads, &cfg, &mut state).map_err(|e| match e {
                    Error::Training { msg, .. } => Error::Training {
                        step: step_counter,
                        msg: format!("{msg}; last good checkpoints retained"),
                    },
                    other => other,
                })?;
            }
            writeln!(
                log,
                "{step_counter},{epoch},{},{},{},{lambda}",
                sum_image / bn,
                sum_pixel / bn,
                sum_total / bn
            )?;
        }

        let val_accuracy = accuracy(&params, mc, &data.val)?;
        let val_pxap = supervised_val_pxap(&params, mc, &data.val, val_flags, source)?;
        if val_pxap > best_pxap {
            best_pxap = val_pxap;
            b_loc_epoch = epoch;
            save_checkpoint(&b_loc_path, mc, &params)?;
        }
        if val_accuracy > best_acc {
            best_acc = val_accuracy;
            b_cl_epoch = epoch;
            save_checkpoint(&b_cl_path, mc, &params)?;
        }
        rows.push(EpochRow {
            epoch,
            val_accuracy,
            val_pxap,
        });
        log::debug!(
            "epoch {epoch}: val accuracy {val_accuracy:.4}, val localization {val_pxap:.4}"
        );
    }
    save_checkpoint(&final_path, mc, &params)?;
    log.flush()?;

    let record = SelectionRecord {
        rows,
        b_loc_epoch,
        b_cl_epoch,
        b_loc_path: B_LOC_FILE.into(),
        b_cl_path: B_CL_FILE.into(),
        final_path: FINAL_FILE.into(),
    };
    fs::write(
        run_dir.join("selection.json"),
        serde_json::to_vec_pretty(&record)?,
    )?;
    let snapshot = RunSnapshot {
        model: mc.clone(),
        train: tc.clone(),
    };
    fs::write(
        run_dir.join("config.json"),
        serde_json::to_vec_pretty(&snapshot)?,
    )?;
    Ok(TrainOutcome { record, params })
}

/// Stage 1: trains encoder and image head on image labels only. Pass
/// `init_from` to continue from existing parameters instead of a fresh
/// initialization.
pub fn train_baseline(
    data: &Dataset,
    val_flags: &[bool],
    mc: &ModelConfig,
    tc: &TrainConfig,
    run_dir: &Path,
    init_from: Option<ModelParams>,
) -> Result<TrainOutcome> {
    let params = match init_from {
        Some(p) => p,
        None => ModelParams::init_backbone(mc, &mut rng_for(tc.seed, "init", &[]))?,
    };
    run_training(data, val_flags, mc, tc, run_dir, params, None)
}

/// Stage 2: warm-starts encoder and image head from the baseline, attaches
/// a freshly initialized pixel head, and optimizes the composite objective
/// with per-step pseudo-labels harvested from the frozen baseline.
pub fn train_pixelcam(
    data: &Dataset,
    val_flags: &[bool],
    mc: &ModelConfig,
    tc: &TrainConfig,
    run_dir: &Path,
    baseline: &ModelParams,
) -> Result<TrainOutcome> {
    let mut params = baseline.clone();
    params.pixel_head = None;
    params.attach_pixel_head(mc, &mut rng_for(tc.seed, "init-pixel-head", &[]))?;
    run_training(data, val_flags, mc, tc, run_dir, params, Some(baseline))
}

/// One grid-search cell's scores.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridRow {
    pub lr: f64,
    pub decay_factor: f64,
    pub val_accuracy: f64,
    pub val_pxap: f64,
    pub metric: f64,
    pub run_dir: String,
}

/// Full table plus the winning configuration.
#[derive(Debug, Clone)]
pub struct GridOutcome {
    pub rows: Vec<GridRow>,
    pub best: TrainConfig,
    pub best_row: usize,
}

/// Trains one run per (lr, decay) pair and picks the best cell by the given
/// criterion; ties resolve to the earlier cell in row-major grid order.
/// Writes `grid.csv` with one row per cell.
pub fn grid_search(
    data: &Dataset,
    val_flags: &[bool],
    mc: &ModelConfig,
    tc: &TrainConfig,
    baseline: Option<&ModelParams>,
    criterion: SelectionCriterion,
    out_dir: &Path,
) -> Result<GridOutcome> {
    tc.validate()?;
    fs::create_dir_all(out_dir)?;
    let mut rows: Vec<GridRow> = Vec::new();
    for &lr in &tc.lr_grid {
        for &decay in &tc.decay_grid {
            let cell_tc = TrainConfig {
                lr,
                decay_factor: decay,
                ..tc.clone()
            };
            let cell_name = format!("cell-lr{lr}-decay{decay}");
            let dir = out_dir.join(&cell_name);
            let outcome = match baseline {
                Some(b) => train_pixelcam(data, val_flags, mc, &cell_tc, &dir, b)?,
                None => train_baseline(data, val_flags, mc, &cell_tc, &dir, None)?,
            };
            let r = &outcome.record;
            let val_accuracy = r.rows[r.b_cl_epoch].val_accuracy;
            let val_pxap = r.rows[r.b_loc_epoch].val_pxap;
            let metric = match criterion {
                SelectionCriterion::Accuracy => val_accuracy,
                SelectionCriterion::PxAp => val_pxap,
            };
            rows.push(GridRow {
                lr,
                decay_factor: decay,
                val_accuracy,
                val_pxap,
                metric,
                run_dir: cell_name,
            });
        }
    }
    let metrics: Vec<f64> = rows.iter().map(|r| r.metric).collect();
    let best_row = argmax_earliest(&metrics)
        .ok_or_else(|| Error::Config("empty hyperparameter grid".into()))?;
    let best = TrainConfig {
        lr: rows[best_row].lr,
        decay_factor: rows[best_row].decay_factor,
        ..tc.clone()
    };

    let mut csv = String::from("lr,decay_factor,val_accuracy,val_pxap,metric\n");
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            r.lr, r.decay_factor, r.val_accuracy, r.val_pxap, r.metric
        ));
    }
    fs::write(out_dir.join("grid.csv"), csv)?;
    Ok(GridOutcome {
        rows,
        best,
        best_row,
    })
}
