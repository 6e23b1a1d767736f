//! Pseudo-label harvesting: picks foreground and background pixel sets from
//! an activation map, fresh at every call. The default sampler draws from a
//! multinomial with the map as its probability; the threshold sampler cuts
//! the map with Otsu's method and draws uniformly inside/outside the mask.

use crate::error::{Error, Result};
use crate::model::Cam;
use crate::tensor::Tensor;
use rand::Rng;
use serde::Serialize;

/// Fallbacks and clamps that fired during one harvest. All false in the
/// normal path.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct HarvestFlags {
    /// Foreground weights were all zero; drew uniformly instead.
    pub fg_uniform_fallback: bool,
    /// Background weights were all zero; drew uniformly instead.
    pub bg_uniform_fallback: bool,
    /// Threshold sampler: foreground side fell back to weighted draws.
    pub fg_threshold_fallback: bool,
    /// Threshold sampler: background side fell back to weighted draws.
    pub bg_threshold_fallback: bool,
    /// Ran out of foreground support before n picks.
    pub fg_clamped: bool,
    /// Ran out of background support before n picks.
    pub bg_clamped: bool,
}

/// One harvest: n foreground and n background pixel coordinates (fewer when
/// clamped), guaranteed disjoint and in bounds.
#[derive(Debug, Clone, Serialize)]
pub struct PixelPseudoLabels {
    pub fg: Vec<(usize, usize)>,
    pub bg: Vec<(usize, usize)>,
    pub flags: HarvestFlags,
}

fn check_n(cam: &Cam, n: usize) -> Result<(usize, usize)> {
    let (h, w) = (cam.map.shape()[0], cam.map.shape()[1]);
    if n == 0 {
        return Err(Error::Config("sample count n must be >= 1".into()));
    }
    if 2 * n > h * w {
        return Err(Error::Config(format!(
            "cannot draw {n} foreground and {n} background pixels from {h}x{w}"
        )));
    }
    Ok((h, w))
}

/// Draws up to `n` distinct indices with probability proportional to
/// `weights`, zeroing each picked weight and renormalizing implicitly.
/// Stops early once all remaining weight is gone.
fn weighted_without_replacement(weights: &mut [f64], n: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut picks = Vec::with_capacity(n);
    for _ in 0..n {
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            break;
        }
        let mut u = rng.gen_range(0.0..total);
        let mut chosen = None;
        for (i, &w) in weights.iter().enumerate() {
            if w <= 0.0 {
                continue;
            }
            if u < w {
                chosen = Some(i);
                break;
            }
            u -= w;
        }
        // Rounding in the cumulative walk can fall off the end; take the
        // last positive-weight index then.
        let idx = chosen.unwrap_or_else(|| {
            weights
                .iter()
                .rposition(|&w| w > 0.0)
                .expect("positive total implies a positive weight")
        });
        weights[idx] = 0.0;
        picks.push(idx);
    }
    picks
}

fn to_coords(picks: &[usize], w: usize) -> Vec<(usize, usize)> {
    picks.iter().map(|&i| (i / w, i % w)).collect()
}

/// Probability-based harvest: foreground locations follow a multinomial with
/// the map as weights, background follows one minus the map with foreground
/// picks excluded. All-zero weight vectors fall back to uniform.
pub fn sample_pb(cam: &Cam, n: usize, rng: &mut impl Rng) -> Result<PixelPseudoLabels> {
    let (_, w) = check_n(cam, n)?;
    let mut flags = HarvestFlags::default();

    let mut fg_weights: Vec<f64> = cam.map.data().iter().map(|&v| v.max(0.0)).collect();
    if fg_weights.iter().all(|&v| v == 0.0) {
        flags.fg_uniform_fallback = true;
        fg_weights.fill(1.0);
    }
    let fg_picks = weighted_without_replacement(&mut fg_weights, n, rng);
    flags.fg_clamped = fg_picks.len() < n;

    let mut bg_weights: Vec<f64> = cam.map.data().iter().map(|&v| (1.0 - v).max(0.0)).collect();
    for &i in &fg_picks {
        bg_weights[i] = 0.0;
    }
    if bg_weights.iter().all(|&v| v == 0.0) {
        flags.bg_uniform_fallback = true;
        for (i, bw) in bg_weights.iter_mut().enumerate() {
            if !fg_picks.contains(&i) {
                *bw = 1.0;
            }
        }
    }
    let bg_picks = weighted_without_replacement(&mut bg_weights, n, rng);
    flags.bg_clamped = bg_picks.len() < n;

    Ok(PixelPseudoLabels {
        fg: to_coords(&fg_picks, w),
        bg: to_coords(&bg_picks, w),
        flags,
    })
}

/// Threshold-based harvest: Otsu splits the map, foreground is drawn
/// uniformly from the at-or-above-threshold region and background from the
/// rest. A degenerate map or an empty region falls back to weighted draws
/// for the affected side.
pub fn sample_th(cam: &Cam, n: usize, rng: &mut impl Rng) -> Result<PixelPseudoLabels> {
    let (_, w) = check_n(cam, n)?;
    let mut flags = HarvestFlags::default();
    let threshold = otsu_threshold(&cam.map);

    let mut fg_weights: Vec<f64> = match threshold {
        Some(t) => {
            let region: Vec<f64> = cam
                .map
                .data()
                .iter()
                .map(|&v| f64::from(v >= t))
                .collect();
            if region.iter().all(|&v| v == 0.0) {
                flags.fg_threshold_fallback = true;
                cam.map.data().iter().map(|&v| v.max(0.0)).collect()
            } else {
                region
            }
        }
        None => {
            flags.fg_threshold_fallback = true;
            cam.map.data().iter().map(|&v| v.max(0.0)).collect()
        }
    };
    if fg_weights.iter().all(|&v| v == 0.0) {
        flags.fg_uniform_fallback = true;
        fg_weights.fill(1.0);
    }
    let fg_picks = weighted_without_replacement(&mut fg_weights, n, rng);
    flags.fg_clamped = fg_picks.len() < n;

    let mut bg_weights: Vec<f64> = match threshold {
        Some(t) => {
            let region: Vec<f64> = cam.map.data().iter().map(|&v| f64::from(v < t)).collect();
            if region.iter().all(|&v| v == 0.0) {
                flags.bg_threshold_fallback = true;
                cam.map.data().iter().map(|&v| (1.0 - v).max(0.0)).collect()
            } else {
                region
            }
        }
        None => {
            flags.bg_threshold_fallback = true;
            cam.map.data().iter().map(|&v| (1.0 - v).max(0.0)).collect()
        }
    };
    for &i in &fg_picks {
        bg_weights[i] = 0.0;
    }
    if bg_weights.iter().all(|&v| v == 0.0) {
        flags.bg_uniform_fallback = true;
        for (i, bw) in bg_weights.iter_mut().enumerate() {
            if !fg_picks.contains(&i) {
                *bw = 1.0;
            }
        }
    }
    let bg_picks = weighted_without_replacement(&mut bg_weights, n, rng);
    flags.bg_clamped = bg_picks.len() < n;

    Ok(PixelPseudoLabels {
        fg: to_coords(&fg_picks, w),
        bg: to_coords(&bg_picks, w),
        flags,
    })
}

/// Otsu's threshold over a 256-bin histogram of map values in [0, 1].
/// Returns the lowest maximizer of the between-class variance as a value
/// t such that `v >= t` is the foreground rule, or None when the map is
/// constant (no split separates anything).
pub fn otsu_threshold(map: &Tensor) -> Option<f64> {
    const BINS: usize = 256;
    let data = map.data();
    if data.is_empty() {
        return None;
    }
    let mut hist = [0u64; BINS];
    for &v in data {
        let b = ((v.clamp(0.0, 1.0) * BINS as f64) as usize).min(BINS - 1);
        hist[b] += 1;
    }
    let total = data.len() as f64;
    let total_sum: f64 = hist
        .iter()
        .enumerate()
        .map(|(i, &c)| i as f64 * c as f64)
        .sum();

    let mut best: Option<(usize, f64)> = None;
    let mut cum_count = 0.0;
    let mut cum_sum = 0.0;
    // Split after bin k: bins <= k are background, bins > k foreground.
    for (k, &c) in hist.iter().enumerate().take(BINS - 1) {
        cum_count += c as f64;
        cum_sum += k as f64 * c as f64;
        if cum_count == 0.0 || cum_count == total {
            continue;
        }
        let w0 = cum_count / total;
        let w1 = 1.0 - w0;
        let mu0 = cum_sum / cum_count;
        let mu1 = (total_sum - cum_sum) / (total - cum_count);
        let variance = w0 * w1 * (mu0 - mu1) * (mu0 - mu1);
        match best {
            Some((_, v)) if variance <= v => {}
            _ => best = Some((k, variance)),
        }
    }
    best.map(|(k, _)| (k + 1) as f64 / BINS as f64)
}
