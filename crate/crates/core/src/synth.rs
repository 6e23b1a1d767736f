//! Histology-like synthetic benchmark: textured background, smooth-boundary
//! tissue blobs whose stain tone, texture frequency, and texture contrast
//! carry the class signal, and parameterized stain shifts for
//! out-of-distribution evaluation.
//!
//! Generation is a pure function of [`GenConfig`]: every sample draws from
//! its own derived RNG stream, so datasets are byte-identical across calls
//! and samples could be produced independently in any order.

use crate::error::{Error, Result};
use crate::seed::rng_for;
use crate::tensor::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// One labeled image with its evaluation-only ground-truth mask.
///
/// The mask never participates in training; it exists for localization
/// scoring and for the small fully-supervised validation subset.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    /// `[H, W, 3]`, values in `[0, 1]`.
    pub image: Tensor,
    /// 0 = normal, 1 = cancer.
    pub label: usize,
    /// `[H, W]`, values in `{0, 1}`.
    pub mask: Tensor,
    /// Provenance tag: "source" for generated data, "stain-k" after a shift.
    pub domain: String,
    /// The derived seed this sample was generated from.
    pub seed: u64,
}

/// Mask semantics of the two benchmark flavors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GenMode {
    /// Both classes contain blobs; the mask is the blob union either way.
    GlasLike,
    /// Only cancer images contain blobs; normal images have empty masks.
    Cam16Like,
}

/// Everything that determines a generated dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenConfig {
    pub height: usize,
    pub width: usize,
    pub mode: GenMode,
    pub train_per_class: usize,
    pub val_per_class: usize,
    pub test_per_class: usize,
    /// Inclusive range of blob counts per blob-bearing image.
    pub blobs_min: usize,
    pub blobs_max: usize,
    /// Blob base radius as a fraction of `min(height, width)`.
    pub radius_range: (f64, f64),
    /// Interior texture frequency per class label.
    pub texture_freq: [f64; 2],
    /// Interior texture contrast per class label.
    pub texture_amp: [f64; 2],
    pub background_freq: f64,
    pub seed: u64,
    /// How many validation samples per class expose their masks for model
    /// selection.
    pub full_supervision_per_class: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            mode: GenMode::GlasLike,
            train_per_class: 100,
            val_per_class: 20,
            test_per_class: 40,
            blobs_min: 2,
            blobs_max: 3,
            radius_range: (0.14, 0.22),
            texture_freq: [4.0, 14.0],
            texture_amp: [0.10, 0.25],
            background_freq: 3.0,
            seed: 7,
            full_supervision_per_class: 3,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height < 8 || self.width < 8 {
            return Err(Error::Config(format!(
                "image size {}x{} too small",
                self.height, self.width
            )));
        }
        for (name, n) in [
            ("train", self.train_per_class),
            ("val", self.val_per_class),
            ("test", self.test_per_class),
        ] {
            if n == 0 {
                return Err(Error::Config(format!("{name} split size is zero")));
            }
        }
        if self.blobs_min == 0 || self.blobs_min > self.blobs_max {
            return Err(Error::Config(format!(
                "blob count range {}..={} is invalid",
                self.blobs_min, self.blobs_max
            )));
        }
        let (lo, hi) = self.radius_range;
        if !(lo > 0.0 && lo <= hi && hi < 0.5) {
            return Err(Error::Config(format!(
                "radius range ({lo}, {hi}) must satisfy 0 < lo <= hi < 0.5"
            )));
        }
        if self.texture_freq.iter().any(|&f| f <= 0.0) || self.background_freq <= 0.0 {
            return Err(Error::Config("texture frequencies must be positive".into()));
        }
        if self.texture_amp.iter().any(|&a| !(0.0..=1.0).contains(&a)) {
            return Err(Error::Config("texture contrast must lie in [0, 1]".into()));
        }
        if self.full_supervision_per_class > self.val_per_class {
            return Err(Error::Config(format!(
                "full supervision count {} exceeds validation size {} per class",
                self.full_supervision_per_class, self.val_per_class
            )));
        }
        Ok(())
    }
}

/// The three generated splits, each class-balanced by construction.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

/// Seeded lattice noise: random values on a coarse grid, bilinearly
/// interpolated to `[h, w]`. Output values lie in `[0, 1]`.
pub fn value_noise(h: usize, w: usize, freq: f64, rng: &mut impl Rng) -> Tensor {
    let nodes = freq.ceil() as usize + 1;
    let lattice: Vec<f64> = (0..nodes * nodes).map(|_| rng.gen::<f64>()).collect();
    let mut out = Tensor::zeros(&[h, w]);
    for i in 0..h {
        let y = i as f64 / h as f64 * freq;
        let y0 = (y.floor() as usize).min(nodes - 2);
        let ty = y - y0 as f64;
        for j in 0..w {
            let x = j as f64 / w as f64 * freq;
            let x0 = (x.floor() as usize).min(nodes - 2);
            let tx = x - x0 as f64;
            let v00 = lattice[y0 * nodes + x0];
            let v01 = lattice[y0 * nodes + x0 + 1];
            let v10 = lattice[(y0 + 1) * nodes + x0];
            let v11 = lattice[(y0 + 1) * nodes + x0 + 1];
            let top = v00 + (v01 - v00) * tx;
            let bot = v10 + (v11 - v10) * tx;
            out.set2(i, j, top + (bot - top) * ty);
        }
    }
    out
}

/// A wobbly disc: base radius modulated by low-order sinusoids so the
/// boundary is smooth but organic.
struct Blob {
    cy: f64,
    cx: f64,
    r0: f64,
    /// (amplitude, phase) for angular harmonics k = 2, 3, 4.
    harmonics: [(f64, f64); 3],
}

impl Blob {
    fn draw(h: usize, w: usize, radius_range: (f64, f64), rng: &mut impl Rng) -> Self {
        let cy = rng.gen_range(0.25 * h as f64..0.75 * h as f64);
        let cx = rng.gen_range(0.25 * w as f64..0.75 * w as f64);
        let scale = h.min(w) as f64;
        let r0 = rng.gen_range(radius_range.0..=radius_range.1) * scale;
        let mut harmonics = [(0.0, 0.0); 3];
        for (slot, k) in harmonics.iter_mut().zip(2u32..) {
            // Total modulation stays below 0.38 so the radius never
            // collapses.
            let amp = rng.gen_range(-1.0..1.0) * 0.35 / k as f64;
            let phase = rng.gen_range(0.0..std::f64::consts::TAU);
            *slot = (amp, phase);
        }
        Self { cy, cx, r0, harmonics }
    }

    /// Positive inside the blob, negative outside, zero on the boundary.
    fn signed_excess(&self, i: usize, j: usize) -> f64 {
        let dy = i as f64 - self.cy;
        let dx = j as f64 - self.cx;
        let d = (dy * dy + dx * dx).sqrt();
        let theta = dy.atan2(dx);
        let mut modulation = 1.0;
        for (slot, k) in self.harmonics.iter().zip(2u32..) {
            modulation += slot.0 * (f64::from(k) * theta + slot.1).sin();
        }
        self.r0 * modulation - d
    }
}

const BG_BASE: [f64; 3] = [0.86, 0.68, 0.78];
/// Blob base color per class: normal tissue stains a lighter purple than
/// cancerous tissue. Both stay far from the background so foreground
/// stands out for either label.
const FG_BASE: [[f64; 3]; 2] = [[0.60, 0.45, 0.68], [0.36, 0.22, 0.50]];
const BG_AMP: f64 = 0.10;
/// Half-width, in pixels, of the soft image blend at blob boundaries. The
/// mask itself stays hard binary.
const EDGE_SOFTNESS: f64 = 1.2;

fn generate_sample(config: &GenConfig, label: usize, id: String, seed: u64) -> Sample {
    let mut rng = rng_for(seed, "sample", &[]);
    let (h, w) = (config.height, config.width);

    let bg_noise = value_noise(h, w, config.background_freq, &mut rng);

    let with_blobs = match config.mode {
        GenMode::GlasLike => true,
        GenMode::Cam16Like => label == 1,
    };
    let blobs: Vec<Blob> = if with_blobs {
        let count = rng.gen_range(config.blobs_min..=config.blobs_max);
        (0..count)
            .map(|_| Blob::draw(h, w, config.radius_range, &mut rng))
            .collect()
    } else {
        Vec::new()
    };
    let fg_noise = if blobs.is_empty() {
        None
    } else {
        Some(value_noise(h, w, config.texture_freq[label], &mut rng))
    };

    let mut image = Tensor::zeros(&[h, w, 3]);
    let mut mask = Tensor::zeros(&[h, w]);
    for i in 0..h {
        for j in 0..w {
            let excess = blobs
                .iter()
                .map(|b| b.signed_excess(i, j))
                .fold(f64::NEG_INFINITY, f64::max);
            if excess > 0.0 {
                mask.set2(i, j, 1.0);
            }
            let blend = ((excess / (2.0 * EDGE_SOFTNESS)) + 0.5).clamp(0.0, 1.0);
            let bg_l = (bg_noise.at2(i, j) - 0.5) * BG_AMP;
            let fg_l = fg_noise
                .as_ref()
                .map_or(0.0, |n| (n.at2(i, j) - 0.5) * config.texture_amp[label]);
            for c in 0..3 {
                let bg = BG_BASE[c] + bg_l;
                let fg = FG_BASE[label][c] + fg_l;
                let v = bg + (fg - bg) * blend;
                image.set3(i, j, c, v.clamp(0.0, 1.0));
            }
        }
    }

    Sample {
        id,
        image,
        label,
        mask,
        domain: "source".into(),
        seed,
    }
}

fn generate_split(config: &GenConfig, split: &str, per_class: usize) -> Vec<Sample> {
    let mut out = Vec::with_capacity(per_class * 2);
    for idx in 0..per_class {
        for label in 0..2 {
            let seed = crate::seed::derive_seed(
                config.seed,
                &format!("synth/{split}"),
                &[label as u64, idx as u64],
            );
            let id = format!("{split}-{label}-{idx:04}");
            out.push(generate_sample(config, label, id, seed));
        }
    }
    out
}

/// Builds the train/val/test splits. Classes alternate within each split so
/// every prefix is balanced.
pub fn generate_dataset(config: &GenConfig) -> Result<Dataset> {
    config.validate()?;
    Ok(Dataset {
        train: generate_split(config, "train", config.train_per_class),
        val: generate_split(config, "val", config.val_per_class),
        test: generate_split(config, "test", config.test_per_class),
    })
}

/// An affine color perturbation: `color -> clamp(M * color + b, 0, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StainTransform {
    pub m: [[f64; 3]; 3],
    pub b: [f64; 3],
    /// Position in the series, in `(0, 1]`; 0 means identity.
    pub s: f64,
}

impl StainTransform {
    pub fn identity() -> Self {
        Self {
            m: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            b: [0.0; 3],
            s: 0.0,
        }
    }
}

/// Frobenius norm of `M - I` plus the Euclidean norm of `b`.
pub fn stain_distance(t: &StainTransform) -> f64 {
    let mut sq = 0.0;
    for r in 0..3 {
        for c in 0..3 {
            let ident = f64::from(r == c);
            sq += (t.m[r][c] - ident).powi(2);
        }
    }
    sq.sqrt() + t.b.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// A ladder of progressively stronger stain shifts, all scalings of one
/// random perturbation so distance to identity grows strictly with index.
pub fn stain_series(count: usize, seed: u64) -> Result<Vec<StainTransform>> {
    if count == 0 {
        return Err(Error::Config("stain series needs at least one step".into()));
    }
    let mut rng = rng_for(seed, "stain-series", &[]);
    let mut dm = [[0.0f64; 3]; 3];
    for row in dm.iter_mut() {
        for v in row.iter_mut() {
            *v = rng.gen_range(-1.0..1.0) * 0.25;
        }
    }
    let mut db = [0.0f64; 3];
    for v in db.iter_mut() {
        *v = rng.gen_range(-1.0..1.0) * 0.15;
    }
    Ok((1..=count)
        .map(|i| {
            let s = i as f64 / count as f64;
            let mut m = [[0.0; 3]; 3];
            for r in 0..3 {
                for c in 0..3 {
                    m[r][c] = f64::from(r == c) + s * dm[r][c];
                }
            }
            StainTransform {
                m,
                b: [s * db[0], s * db[1], s * db[2]],
                s,
            }
        })
        .collect())
}

/// Applies the color transform to every pixel of an `[H, W, 3]` image.
pub fn apply_stain(image: &Tensor, t: &StainTransform) -> Result<Tensor> {
    if image.rank() != 3 || image.shape()[2] != 3 {
        return Err(Error::Dimension(format!(
            "apply_stain expects [H, W, 3], got {:?}",
            image.shape()
        )));
    }
    let mut out = image.clone();
    let (h, w) = (image.shape()[0], image.shape()[1]);
    for i in 0..h {
        for j in 0..w {
            let rgb = [image.at3(i, j, 0), image.at3(i, j, 1), image.at3(i, j, 2)];
            for c in 0..3 {
                let v = t.m[c][0] * rgb[0] + t.m[c][1] * rgb[1] + t.m[c][2] * rgb[2] + t.b[c];
                out.set3(i, j, c, v.clamp(0.0, 1.0));
            }
        }
    }
    Ok(out)
}
