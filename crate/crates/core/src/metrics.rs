//! Evaluation quantities: pixel average precision, classification accuracy,
//! pixel confusion rates, the foreground/background separability index J,
//! and paired t-tests over per-image scores.
//!
//! Masks are `[H, W]` tensors with values 0 or 1; anything >= 0.5 counts as
//! foreground. Score maps are `[H, W]` with arbitrary finite values (AP is a
//! rank statistic, confusion rates expect scores in [0, 1]).

use crate::error::{Error, Result};
use crate::stats::student_t_two_sided_p;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::cmp::Ordering;

/// Pooled pixel confusion rates at a fixed threshold. Each pair sums to 1
/// when defined; a side with no ground-truth pixels is `None`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfusionRates {
    pub pxtp: Option<f64>,
    pub pxfn: Option<f64>,
    pub pxtn: Option<f64>,
    pub pxfp: Option<f64>,
}

/// Paired t-test outcome. `degenerate` marks a zero-variance difference with
/// nonzero mean, where t is reported as signed infinity and p as 0.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    pub p: f64,
    pub dof: usize,
    pub degenerate: bool,
}

/// Everything the evaluation stage measures on one split.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub pxap: f64,
    pub cl_acc: f64,
    pub confusion: ConfusionRates,
    /// Per-image average precision, in dataset order, images with empty
    /// masks excluded.
    pub per_image_ap: Vec<f64>,
    /// Per-image separability index, in dataset order, finite values only.
    pub per_image_j: Vec<f64>,
    pub ap_images_skipped: usize,
    pub j_images_skipped: usize,
    pub j_infinite_count: usize,
}

fn check_map_pair(scores: &Tensor, mask: &Tensor, what: &str) -> Result<()> {
    if scores.rank() != 2 || scores.shape() != mask.shape() {
        return Err(Error::Dimension(format!(
            "{what}: score map {:?} vs mask {:?}, need matching [H, W]",
            scores.shape(),
            mask.shape()
        )));
    }
    Ok(())
}

/// Average precision of a pooled score list against binary labels.
///
/// Scores are ranked descending; tied scores form one group and the
/// precision-recall curve is integrated trapezoidally between group
/// boundaries, anchored at (recall 0, precision 1).
pub fn average_precision(scores: &[f64], positives: &[bool]) -> Result<f64> {
    if scores.len() != positives.len() {
        return Err(Error::Dimension(format!(
            "average_precision: {} scores vs {} labels",
            scores.len(),
            positives.len()
        )));
    }
    if scores.iter().any(|v| !v.is_finite()) {
        return Err(Error::Metric("average_precision: non-finite score".into()));
    }
    let total_pos = positives.iter().filter(|&&p| p).count();
    if total_pos == 0 {
        return Err(Error::Metric(
            "average_precision: no positive pixels in pooled set".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(Ordering::Equal));

    let mut ap = 0.0;
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut prev_recall = 0.0;
    let mut prev_precision = 1.0;
    let mut i = 0;
    while i < order.len() {
        let group_score = scores[order[i]];
        let mut j = i;
        while j < order.len() && scores[order[j]] == group_score {
            if positives[order[j]] {
                tp += 1;
            } else {
                fp += 1;
            }
            j += 1;
        }
        let recall = tp as f64 / total_pos as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - prev_recall) * 0.5 * (precision + prev_precision);
        prev_recall = recall;
        prev_precision = precision;
        i = j;
    }
    Ok(ap)
}

fn pool_maps(score_maps: &[Tensor], masks: &[Tensor]) -> Result<(Vec<f64>, Vec<bool>)> {
    if score_maps.len() != masks.len() {
        return Err(Error::Dimension(format!(
            "{} score maps vs {} masks",
            score_maps.len(),
            masks.len()
        )));
    }
    let mut scores = Vec::new();
    let mut positives = Vec::new();
    for (s, m) in score_maps.iter().zip(masks) {
        check_map_pair(s, m, "pxap")?;
        scores.extend_from_slice(s.data());
        positives.extend(m.data().iter().map(|&v| v >= 0.5));
    }
    Ok((scores, positives))
}

/// Dataset-pooled pixel average precision: every pixel of every image ranks
/// in one list.
pub fn pxap(score_maps: &[Tensor], masks: &[Tensor]) -> Result<f64> {
    let (scores, positives) = pool_maps(score_maps, masks)?;
    average_precision(&scores, &positives)
}

/// Per-image average precision in dataset order. Images whose mask has no
/// foreground are skipped; the second value counts them.
pub fn per_image_ap(score_maps: &[Tensor], masks: &[Tensor]) -> Result<(Vec<f64>, usize)> {
    if score_maps.len() != masks.len() {
        return Err(Error::Dimension(format!(
            "{} score maps vs {} masks",
            score_maps.len(),
            masks.len()
        )));
    }
    let mut out = Vec::new();
    let mut skipped = 0;
    for (s, m) in score_maps.iter().zip(masks) {
        check_map_pair(s, m, "per_image_ap")?;
        let positives: Vec<bool> = m.data().iter().map(|&v| v >= 0.5).collect();
        if positives.iter().any(|&p| p) {
            out.push(average_precision(s.data(), &positives)?);
        } else {
            skipped += 1;
        }
    }
    Ok((out, skipped))
}

/// Index of the largest probability; ties go to the lower index.
pub fn argmax_label(probs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in probs.iter().enumerate().skip(1) {
        if v > probs[best] {
            best = i;
        }
    }
    best
}

/// Fraction of predicted labels equal to the true labels.
pub fn cl_accuracy(pred: &[usize], truth: &[usize]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::Dimension(format!(
            "cl_accuracy: {} predictions vs {} labels",
            pred.len(),
            truth.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::Metric("cl_accuracy: empty label list".into()));
    }
    let correct = pred.iter().zip(truth).filter(|(a, b)| a == b).count();
    Ok(correct as f64 / pred.len() as f64)
}

/// Pooled pixel confusion rates after binarizing scores at `threshold`
/// (score >= threshold is a foreground prediction).
pub fn confusion_rates(
    score_maps: &[Tensor],
    masks: &[Tensor],
    threshold: f64,
) -> Result<ConfusionRates> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::Config(format!(
            "confusion threshold {threshold} outside [0, 1]"
        )));
    }
    if score_maps.len() != masks.len() {
        return Err(Error::Dimension(format!(
            "{} score maps vs {} masks",
            score_maps.len(),
            masks.len()
        )));
    }
    let (mut tp, mut tn, mut fp_n, mut fn_n) = (0u64, 0u64, 0u64, 0u64);
    for (s, m) in score_maps.iter().zip(masks) {
        check_map_pair(s, m, "confusion_rates")?;
        for (&sc, &mv) in s.data().iter().zip(m.data()) {
            let pred = sc >= threshold;
            let gt = mv >= 0.5;
            match (pred, gt) {
                (true, true) => tp += 1,
                (false, true) => fn_n += 1,
                (false, false) => tn += 1,
                (true, false) => fp_n += 1,
            }
        }
    }
    let pos = tp + fn_n;
    let neg = tn + fp_n;
    Ok(ConfusionRates {
        pxtp: (pos > 0).then(|| tp as f64 / pos as f64),
        pxfn: (pos > 0).then(|| fn_n as f64 / pos as f64),
        pxtn: (neg > 0).then(|| tn as f64 / neg as f64),
        pxfp: (neg > 0).then(|| fp_n as f64 / neg as f64),
    })
}

/// Traces of the between-class and within-class scatter matrices of pixel
/// features under a two-class mask, computed without forming d x d matrices:
/// the trace of a scatter matrix is the sum of squared deviations.
pub fn scatter_traces(f: &Tensor, mask: &Tensor) -> Result<(f64, f64)> {
    if f.rank() != 3 {
        return Err(Error::Dimension(format!(
            "scatter_traces: features must be [H, W, d], got {:?}",
            f.shape()
        )));
    }
    if mask.rank() != 2 || mask.shape()[0] != f.shape()[0] || mask.shape()[1] != f.shape()[1] {
        return Err(Error::Dimension(format!(
            "scatter_traces: mask {:?} vs features {:?}",
            mask.shape(),
            f.shape()
        )));
    }
    let d = f.shape()[2];
    let mut n = [0usize; 2];
    let mut mean = vec![[0.0f64; 2]; d];
    for (px, &mv) in f.data().chunks_exact(d).zip(mask.data()) {
        let cls = usize::from(mv >= 0.5);
        n[cls] += 1;
        for (c, &v) in px.iter().enumerate() {
            mean[c][cls] += v;
        }
    }
    if n[0] == 0 || n[1] == 0 {
        return Err(Error::Metric(
            "scatter_traces: mask contains a single class".into(),
        ));
    }
    for m in &mut mean {
        m[0] /= n[0] as f64;
        m[1] /= n[1] as f64;
    }
    let total = (n[0] + n[1]) as f64;
    let mut tr_sw = 0.0;
    for (px, &mv) in f.data().chunks_exact(d).zip(mask.data()) {
        let cls = usize::from(mv >= 0.5);
        for (c, &v) in px.iter().enumerate() {
            let dlt = v - mean[c][cls];
            tr_sw += dlt * dlt;
        }
    }
    let mut tr_sb = 0.0;
    for m in &mean {
        let overall = (n[0] as f64 * m[0] + n[1] as f64 * m[1]) / total;
        tr_sb += n[0] as f64 * (m[0] - overall) * (m[0] - overall);
        tr_sb += n[1] as f64 * (m[1] - overall) * (m[1] - overall);
    }
    Ok((tr_sb, tr_sw))
}

/// Class-separability index J = tr(S_B) / tr(S_W) of pixel features under a
/// foreground/background mask. A mask with one class is an error; zero
/// within-class scatter yields +infinity, which callers exclude from means.
pub fn separability_index(f: &Tensor, mask: &Tensor) -> Result<f64> {
    let (tr_sb, tr_sw) = scatter_traces(f, mask)?;
    if tr_sw == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(tr_sb / tr_sw)
}

/// Fixed-width histogram of J values over [0, max]. Returns
/// (bin_low, bin_high, count) rows; empty input yields no rows.
pub fn j_histogram(values: &[f64], bins: usize) -> Result<Vec<(f64, f64, usize)>> {
    if bins == 0 {
        return Err(Error::Config("histogram needs at least one bin".into()));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Metric("histogram input must be finite".into()));
    }
    if values.is_empty() {
        return Ok(Vec::new());
    }
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = max / bins as f64;
    let mut counts = vec![0usize; bins];
    for &v in values {
        let idx = if width > 0.0 {
            ((v / width) as usize).min(bins - 1)
        } else {
            0
        };
        counts[idx] += 1;
    }
    Ok(counts
        .iter()
        .enumerate()
        .map(|(i, &c)| (i as f64 * width, (i + 1) as f64 * width, c))
        .collect())
}

/// Paired t-test of two equally long per-image score lists. The difference
/// is `b - a`, so positive t means b scored higher.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() != b.len() {
        return Err(Error::Dimension(format!(
            "paired_t_test: {} vs {} values",
            a.len(),
            b.len()
        )));
    }
    let m = a.len();
    if m < 2 {
        return Err(Error::Metric(format!(
            "paired_t_test needs at least 2 pairs, got {m}"
        )));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(&x, &y)| y - x).collect();
    let mean = d.iter().sum::<f64>() / m as f64;
    let var = d.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / (m - 1) as f64;
    let sd = var.sqrt();
    let dof = m - 1;
    if sd == 0.0 {
        if mean == 0.0 {
            return Ok(TTest {
                t: 0.0,
                p: 1.0,
                dof,
                degenerate: false,
            });
        }
        return Ok(TTest {
            t: mean.signum() * f64::INFINITY,
            p: 0.0,
            dof,
            degenerate: true,
        });
    }
    let t = mean / (sd / (m as f64).sqrt());
    Ok(TTest {
        t,
        p: student_t_two_sided_p(t, dof)?,
        dof,
        degenerate: false,
    })
}

/// Flat key,value CSV of a report's scalar fields.
pub fn report_csv(report: &MetricsReport) -> String {
    fn opt(v: Option<f64>) -> String {
        v.map_or(String::new(), |x| format!("{x:.6}"))
    }
    let mut s = String::from("metric,value\n");
    s.push_str(&format!("pxap,{:.6}\n", report.pxap));
    s.push_str(&format!("cl_acc,{:.6}\n", report.cl_acc));
    s.push_str(&format!("pxtp,{}\n", opt(report.confusion.pxtp)));
    s.push_str(&format!("pxfn,{}\n", opt(report.confusion.pxfn)));
    s.push_str(&format!("pxtn,{}\n", opt(report.confusion.pxtn)));
    s.push_str(&format!("pxfp,{}\n", opt(report.confusion.pxfp)));
    s.push_str(&format!("ap_images_skipped,{}\n", report.ap_images_skipped));
    s.push_str(&format!("j_images_skipped,{}\n", report.j_images_skipped));
    s.push_str(&format!("j_infinite_count,{}\n", report.j_infinite_count));
    s
}

/// Histogram rows as `bin_low,bin_high,count` CSV.
pub fn histogram_csv(rows: &[(f64, f64, usize)]) -> String {
    let mut s = String::from("bin_low,bin_high,count\n");
    for (lo, hi, c) in rows {
        s.push_str(&format!("{lo:.6},{hi:.6},{c}\n"));
    }
    s
}

/// T-test rows as `pair,t,p,dof` CSV.
pub fn ttest_csv(rows: &[(String, TTest)]) -> String {
    let mut s = String::from("pair,t,p,dof\n");
    for (name, tt) in rows {
        s.push_str(&format!("{name},{:.6},{:.6},{}\n", tt.t, tt.p, tt.dof));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Brute-force AP: sweep every distinct score as a threshold and recount
    /// the confusion table from scratch each time.
    fn ap_sweep_oracle(scores: &[f64], positives: &[bool]) -> f64 {
        let total_pos = positives.iter().filter(|&&p| p).count();
        let mut thresholds: Vec<f64> = scores.to_vec();
        thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
        thresholds.dedup();
        let mut ap = 0.0;
        let mut prev = (0.0, 1.0);
        for &t in &thresholds {
            let mut tp = 0;
            let mut fp = 0;
            for (&s, &p) in scores.iter().zip(positives) {
                if s >= t {
                    if p {
                        tp += 1;
                    } else {
                        fp += 1;
                    }
                }
            }
            let recall = tp as f64 / total_pos as f64;
            let precision = tp as f64 / (tp + fp) as f64;
            ap += (recall - prev.0) * 0.5 * (precision + prev.1);
            prev = (recall, precision);
        }
        ap
    }

    fn map(h: usize, w: usize, data: Vec<f64>) -> Tensor {
        Tensor::new(&[h, w], data).unwrap()
    }

    #[test]
    fn pxap_perfect_scores_is_one() {
        let mask = map(2, 2, vec![1.0, 0.0, 1.0, 0.0]);
        let score = mask.clone();
        assert_eq!(pxap(&[score], &[mask]).unwrap(), 1.0);
    }

    #[test]
    fn pxap_inverted_scores_hit_prevalence_floor() {
        // Half the pixels are positive and every negative outranks every
        // positive; the single informative threshold point has precision 1/2.
        let mask = map(2, 2, vec![1.0, 1.0, 0.0, 0.0]);
        let score = map(2, 2, vec![0.0, 0.0, 1.0, 1.0]);
        let got = pxap(&[score.clone()], &[mask.clone()]).unwrap();
        let want = ap_sweep_oracle(score.data(), &[true, true, false, false]);
        assert!((got - want).abs() < 1e-12);
        assert!((got - 0.25).abs() < 1e-12);
    }

    #[test]
    fn pxap_matches_threshold_sweep_oracle_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for round in 0..10 {
            let n = 200;
            // Quantized scores force plenty of ties.
            let scores: Vec<f64> = (0..n)
                .map(|_| (rng.gen_range(0.0f64..1.0) * 16.0).round() / 16.0)
                .collect();
            let positives: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.3)).collect();
            if !positives.iter().any(|&p| p) {
                continue;
            }
            let got = average_precision(&scores, &positives).unwrap();
            let want = ap_sweep_oracle(&scores, &positives);
            assert!(
                (got - want).abs() < 1e-9,
                "round {round}: {got} vs {want}"
            );
        }
    }

    #[test]
    fn pxap_is_invariant_under_monotone_transforms() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let scores: Vec<f64> = (0..100).map(|_| rng.gen_range(0.0..1.0)).collect();
        let positives: Vec<bool> = (0..100).map(|_| rng.gen_bool(0.4)).collect();
        let base = average_precision(&scores, &positives).unwrap();
        let cubed: Vec<f64> = scores.iter().map(|&v| v * v * v).collect();
        let exped: Vec<f64> = scores.iter().map(|&v| v.exp()).collect();
        assert!((average_precision(&cubed, &positives).unwrap() - base).abs() < 1e-12);
        assert!((average_precision(&exped, &positives).unwrap() - base).abs() < 1e-12);
    }

    #[test]
    fn pxap_zero_positives_is_an_error() {
        let mask = map(1, 2, vec![0.0, 0.0]);
        let score = map(1, 2, vec![0.3, 0.7]);
        match pxap(&[score], &[mask]) {
            Err(Error::Metric(_)) => {}
            other => panic!("expected metric error, got {other:?}"),
        }
    }

    #[test]
    fn per_image_ap_skips_empty_masks() {
        let m1 = map(1, 2, vec![1.0, 0.0]);
        let m2 = map(1, 2, vec![0.0, 0.0]);
        let s = map(1, 2, vec![0.9, 0.1]);
        let (aps, skipped) = per_image_ap(&[s.clone(), s], &[m1, m2]).unwrap();
        assert_eq!(aps.len(), 1);
        assert_eq!(skipped, 1);
        assert_eq!(aps[0], 1.0);
    }

    #[test]
    fn argmax_ties_go_to_lower_index() {
        assert_eq!(argmax_label(&[0.5, 0.5]), 0);
        assert_eq!(argmax_label(&[0.1, 0.6, 0.3]), 1);
    }

    #[test]
    fn cl_accuracy_basic_fractions() {
        assert_eq!(cl_accuracy(&[0, 1, 1], &[0, 1, 1]).unwrap(), 1.0);
        assert_eq!(cl_accuracy(&[1, 0], &[0, 1]).unwrap(), 0.0);
        assert_eq!(cl_accuracy(&[0, 1, 0, 0], &[0, 1, 0, 1]).unwrap(), 0.75);
        assert!(cl_accuracy(&[], &[]).is_err());
    }

    #[test]
    fn confusion_rates_perfect_and_all_foreground() {
        let mask = map(2, 2, vec![1.0, 1.0, 0.0, 0.0]);
        let perfect = map(2, 2, vec![1.0, 1.0, 0.0, 0.0]);
        let r = confusion_rates(&[perfect], &[mask.clone()], 0.5).unwrap();
        assert_eq!(r.pxtp, Some(1.0));
        assert_eq!(r.pxfn, Some(0.0));
        assert_eq!(r.pxtn, Some(1.0));
        assert_eq!(r.pxfp, Some(0.0));

        let all_fg = map(2, 2, vec![1.0, 1.0, 1.0, 1.0]);
        let r = confusion_rates(&[all_fg], &[mask], 0.5).unwrap();
        assert_eq!(r.pxtp, Some(1.0));
        assert_eq!(r.pxtn, Some(0.0));
    }

    #[test]
    fn confusion_rates_four_pixel_hand_count() {
        // TP, FN, TN, FP one each.
        let mask = map(2, 2, vec![1.0, 1.0, 0.0, 0.0]);
        let score = map(2, 2, vec![0.9, 0.1, 0.2, 0.8]);
        let r = confusion_rates(&[score], &[mask], 0.5).unwrap();
        assert_eq!(r.pxtp, Some(0.5));
        assert_eq!(r.pxfn, Some(0.5));
        assert_eq!(r.pxtn, Some(0.5));
        assert_eq!(r.pxfp, Some(0.5));
    }

    #[test]
    fn confusion_rates_complement_pairs_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..5 {
            let score: Vec<f64> = (0..64).map(|_| rng.gen_range(0.0..1.0)).collect();
            let mask: Vec<f64> = (0..64).map(|_| f64::from(rng.gen_bool(0.4))).collect();
            let r = confusion_rates(&[map(8, 8, score)], &[map(8, 8, mask)], 0.5).unwrap();
            if let (Some(tp), Some(fnr)) = (r.pxtp, r.pxfn) {
                assert_eq!(tp + fnr, 1.0);
            }
            if let (Some(tn), Some(fpr)) = (r.pxtn, r.pxfp) {
                assert_eq!(tn + fpr, 1.0);
            }
        }
    }

    #[test]
    fn confusion_rates_missing_class_is_absent() {
        let mask = map(1, 2, vec![0.0, 0.0]);
        let score = map(1, 2, vec![0.9, 0.1]);
        let r = confusion_rates(&[score], &[mask], 0.5).unwrap();
        assert_eq!(r.pxtp, None);
        assert_eq!(r.pxfn, None);
        assert!(r.pxtn.is_some());
    }

    #[test]
    fn separability_hand_case() {
        // d=1: FG values {0, 2} (mean 1), BG values {4, 6} (mean 5).
        // tr(S_W) = 1+1+1+1 = 4; overall mean 3; tr(S_B) = 2*4 + 2*4 = 16.
        let f = Tensor::new(&[2, 2, 1], vec![0.0, 2.0, 4.0, 6.0]).unwrap();
        let mask = map(2, 2, vec![1.0, 1.0, 0.0, 0.0]);
        let j = separability_index(&f, &mask).unwrap();
        assert!((j - 4.0).abs() < 1e-12);
    }

    #[test]
    fn separability_zero_when_class_means_coincide() {
        // FG {0, 2} and BG {-1, 3} both have mean 1.
        let f = Tensor::new(&[2, 2, 1], vec![0.0, 2.0, -1.0, 3.0]).unwrap();
        let mask = map(2, 2, vec![1.0, 1.0, 0.0, 0.0]);
        assert_eq!(separability_index(&f, &mask).unwrap(), 0.0);
    }

    #[test]
    fn separability_single_class_is_error_and_zero_sw_is_infinite() {
        let f = Tensor::new(&[1, 2, 1], vec![1.0, 2.0]).unwrap();
        let all_fg = map(1, 2, vec![1.0, 1.0]);
        assert!(separability_index(&f, &all_fg).is_err());

        // Every pixel sits exactly at its class mean.
        let f = Tensor::new(&[1, 2, 1], vec![1.0, 2.0]).unwrap();
        let mask = map(1, 2, vec![1.0, 0.0]);
        assert_eq!(separability_index(&f, &mask).unwrap(), f64::INFINITY);
    }

    /// Full scatter-matrix oracle: build the d x d matrices and trace them.
    fn scatter_oracle(f: &Tensor, mask: &Tensor) -> (f64, f64) {
        let d = f.shape()[2];
        let pixels: Vec<(&[f64], usize)> = f
            .data()
            .chunks_exact(d)
            .zip(mask.data())
            .map(|(px, &mv)| (px, usize::from(mv >= 0.5)))
            .collect();
        let mut means = vec![vec![0.0; d]; 2];
        let mut n = [0usize; 2];
        for (px, cls) in &pixels {
            n[*cls] += 1;
            for (c, &v) in px.iter().enumerate() {
                means[*cls][c] += v;
            }
        }
        for (cls, m) in means.iter_mut().enumerate() {
            for v in m.iter_mut() {
                *v /= n[cls] as f64;
            }
        }
        let total = (n[0] + n[1]) as f64;
        let overall: Vec<f64> = (0..d)
            .map(|c| (n[0] as f64 * means[0][c] + n[1] as f64 * means[1][c]) / total)
            .collect();
        let mut sw = vec![vec![0.0; d]; d];
        for (px, cls) in &pixels {
            for a in 0..d {
                for b in 0..d {
                    sw[a][b] += (px[a] - means[*cls][a]) * (px[b] - means[*cls][b]);
                }
            }
        }
        let mut sb = vec![vec![0.0; d]; d];
        for cls in 0..2 {
            for a in 0..d {
                for b in 0..d {
                    sb[a][b] += n[cls] as f64
                        * (means[cls][a] - overall[a])
                        * (means[cls][b] - overall[b]);
                }
            }
        }
        let tr = |m: &Vec<Vec<f64>>| (0..d).map(|i| m[i][i]).sum::<f64>();
        (tr(&sb), tr(&sw))
    }

    #[test]
    fn scatter_traces_match_full_matrix_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        for _ in 0..5 {
            let d = 3;
            let data: Vec<f64> = (0..20 * d).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let f = Tensor::new(&[4, 5, d], data).unwrap();
            let mask_data: Vec<f64> = (0..20).map(|i| f64::from(i % 3 == 0)).collect();
            let mask = map(4, 5, mask_data);
            let (sb, sw) = scatter_traces(&f, &mask).unwrap();
            let (osb, osw) = scatter_oracle(&f, &mask);
            assert!((sb - osb).abs() < 1e-9);
            assert!((sw - osw).abs() < 1e-9);
        }
    }

    #[test]
    fn separability_translation_invariance_and_quadratic_scaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let d = 2;
        let data: Vec<f64> = (0..12 * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let f = Tensor::new(&[3, 4, d], data.clone()).unwrap();
        let mask_data: Vec<f64> = (0..12).map(|i| f64::from(i < 5)).collect();
        let mask = map(3, 4, mask_data);
        let j = separability_index(&f, &mask).unwrap();
        let (sb, sw) = scatter_traces(&f, &mask).unwrap();

        // Shift all features by a constant vector (3.0, -1.5).
        let shifted: Vec<f64> = data
            .iter()
            .enumerate()
            .map(|(i, &v)| v + if i % 2 == 0 { 3.0 } else { -1.5 })
            .collect();
        let fs = Tensor::new(&[3, 4, d], shifted).unwrap();
        assert!((separability_index(&fs, &mask).unwrap() - j).abs() < 1e-9);

        // Scale features by s: each scatter trace scales by s^2, J is a ratio.
        let s = 2.5;
        let scaled: Vec<f64> = data.iter().map(|&v| v * s).collect();
        let fsc = Tensor::new(&[3, 4, d], scaled).unwrap();
        let (sb2, sw2) = scatter_traces(&fsc, &mask).unwrap();
        assert!((sb2 - s * s * sb).abs() < 1e-9);
        assert!((sw2 - s * s * sw).abs() < 1e-9);
        assert!((separability_index(&fsc, &mask).unwrap() - j).abs() < 1e-9);
    }

    #[test]
    fn j_histogram_basics() {
        let rows = j_histogram(&[2.0], 4).unwrap();
        assert_eq!(rows.iter().map(|r| r.2).sum::<usize>(), 1);

        let rows = j_histogram(&[], 3).unwrap();
        assert!(rows.is_empty());

        // Six values, three bins of width 2 over [0, 6].
        let rows = j_histogram(&[0.5, 1.0, 2.9, 3.0, 5.9, 6.0], 3).unwrap();
        assert_eq!(rows.len(), 3);
        assert_eq!(rows[0].2, 2);
        assert_eq!(rows[1].2, 2);
        assert_eq!(rows[2].2, 2);
        assert!((rows[0].0 - 0.0).abs() < 1e-12);
        assert!((rows[2].1 - 6.0).abs() < 1e-12);
    }

    #[test]
    fn j_histogram_counts_sum_to_input_size() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let values: Vec<f64> = (0..50).map(|_| rng.gen_range(0.0..10.0)).collect();
        let rows = j_histogram(&values, 7).unwrap();
        assert_eq!(rows.iter().map(|r| r.2).sum::<usize>(), 50);
    }

    #[test]
    fn t_test_equal_inputs_and_symmetric_differences() {
        let a = [0.5, 0.6, 0.7];
        let r = paired_t_test(&a, &a).unwrap();
        assert_eq!(r.t, 0.0);
        assert_eq!(r.p, 1.0);

        // d = [1, -1, 1, -1] has zero mean.
        let a = [0.0, 0.0, 0.0, 0.0];
        let b = [1.0, -1.0, 1.0, -1.0];
        let r = paired_t_test(&a, &b).unwrap();
        assert_eq!(r.t, 0.0);
        assert_eq!(r.p, 1.0);
    }

    #[test]
    fn t_test_known_fixture() {
        // d = [1, 2, 3, 4]: mean 2.5, sd 1.29099, t 3.873, p 0.0305 at 3 dof.
        let a = [0.0; 4];
        let b = [1.0, 2.0, 3.0, 4.0];
        let r = paired_t_test(&a, &b).unwrap();
        assert_eq!(r.dof, 3);
        assert!((r.t - 3.873).abs() < 1e-3, "t = {}", r.t);
        assert!((r.p - 0.0305).abs() < 1e-3, "p = {}", r.p);
        assert!(!r.degenerate);
    }

    #[test]
    fn t_test_zero_variance_nonzero_mean_is_flagged() {
        let a = [0.0, 0.0, 0.0];
        let b = [0.5, 0.5, 0.5];
        let r = paired_t_test(&a, &b).unwrap();
        assert!(r.t.is_infinite() && r.t > 0.0);
        assert_eq!(r.p, 0.0);
        assert!(r.degenerate);
    }

    #[test]
    fn t_test_rejects_short_or_mismatched_inputs() {
        assert!(paired_t_test(&[1.0], &[2.0]).is_err());
        assert!(paired_t_test(&[1.0, 2.0], &[1.0]).is_err());
    }

    #[test]
    fn csv_writers_shape() {
        let report = MetricsReport {
            pxap: 0.5,
            cl_acc: 0.75,
            confusion: ConfusionRates {
                pxtp: Some(0.9),
                pxfn: Some(0.1),
                pxtn: None,
                pxfp: None,
            },
            per_image_ap: vec![0.5],
            per_image_j: vec![1.0],
            ap_images_skipped: 0,
            j_images_skipped: 1,
            j_infinite_count: 0,
        };
        let csv = report_csv(&report);
        assert!(csv.starts_with("metric,value\n"));
        assert!(csv.contains("pxap,0.500000\n"));
        assert!(csv.contains("pxtn,\n"));

        let h = histogram_csv(&[(0.0, 1.0, 3)]);
        assert_eq!(h, "bin_low,bin_high,count\n0.000000,1.000000,3\n");

        let t = ttest_csv(&[(
            "baseline_vs_final".into(),
            TTest {
                t: 2.0,
                p: 0.1,
                dof: 4,
                degenerate: false,
            },
        )]);
        assert!(t.contains("baseline_vs_final,2.000000,0.100000,4\n"));
    }
}
