//! Evaluation metrics: PSNR, SSIM, scale-shift aligned depth errors and
//! greedy-matching mask mIoU, plus an exhaustive matching oracle.

use crate::error::{Error, Result};
use crate::numcore::{Scalar, Tensor};

pub const PSNR_CAP: f64 = 99.0;
pub const SSIM_WINDOW: usize = 7;
pub const DELTA1_THRESHOLD: f64 = 1.25;
pub const MATCH_IOU: f64 = 0.5;
pub const DEPTH_EPS: f64 = 1e-6;
/// Largest pred/gt list the oracle enumerates.
pub const ORACLE_MAX: usize = 6;

fn same_shape<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("{what}: prediction {:?} vs ground truth {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

pub fn psnr<T: Scalar>(pred: &Tensor<T>, gt: &Tensor<T>, peak: f64) -> Result<f64> {
    same_shape(pred, gt, "psnr")?;
    if peak <= 0.0 {
        return Err(Error::Config(format!("PSNR peak must be positive, got {peak}")));
    }
    let mse = pred.data().iter().zip(gt.data()).map(|(&a, &b)| (a.as_f64() - b.as_f64()).powi(2)).sum::<f64>() / pred.numel() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (peak * peak / mse).log10()).min(PSNR_CAP))
}

/// Mean local SSIM over 7×7 uniform windows (valid positions only),
/// averaged over every leading plane. The last two axes are the image.
pub fn ssim<T: Scalar>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<f64> {
    same_shape(pred, gt, "ssim")?;
    let s = pred.shape();
    if s.len() < 2 {
        return Err(Error::Shape(format!("ssim needs an image, got {s:?}")));
    }
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let k = SSIM_WINDOW;
    if h < k || w < k {
        return Err(Error::Shape(format!("image {h}×{w} smaller than the {k}×{k} window")));
    }
    let c1 = 0.01f64.powi(2);
    let c2 = 0.03f64.powi(2);
    let planes = pred.numel() / (h * w);
    let n = (k * k) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for p in 0..planes {
        let a = &pred.data()[p * h * w..(p + 1) * h * w];
        let b = &gt.data()[p * h * w..(p + 1) * h * w];
        for y in 0..=h - k {
            for x in 0..=w - k {
                let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for dy in 0..k {
                    for dx in 0..k {
                        let i = (y + dy) * w + x + dx;
                        let (u, v) = (a[i].as_f64(), b[i].as_f64());
                        sa += u;
                        sb += v;
                        saa += u * u;
                        sbb += v * v;
                        sab += u * v;
                    }
                }
                let (ma, mb) = (sa / n, sb / n);
                let va = (saa / n - ma * ma).max(0.0);
                let vb = (sbb / n - mb * mb).max(0.0);
                let cov = sab / n - ma * mb;
                total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

/// Least-squares `a·pred + b ≈ gt` fitted over a whole video.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScaleShift {
    pub scale: f64,
    pub shift: f64,
    /// Prediction had no variance; `scale = 0`, `shift = mean(gt)`.
    pub degenerate: bool,
}

impl ScaleShift {
    pub fn apply<T: Scalar>(&self, pred: &Tensor<T>) -> Tensor<T> {
        let (a, b) = (T::lit(self.scale), T::lit(self.shift));
        pred.map(|v| a * v + b)
    }
}

pub fn align_scale_shift<T: Scalar>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<ScaleShift> {
    same_shape(pred, gt, "scale-shift alignment")?;
    let n = pred.numel() as f64;
    let (mut sp, mut sg) = (0.0, 0.0);
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        sp += p.as_f64();
        sg += g.as_f64();
    }
    let (mp, mg) = (sp / n, sg / n);
    let (mut vpp, mut vpg) = (0.0, 0.0);
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        let dp = p.as_f64() - mp;
        vpp += dp * dp;
        vpg += dp * (g.as_f64() - mg);
    }
    if vpp <= 1e-24 * n * (1.0 + mp * mp) {
        return Ok(ScaleShift { scale: 0.0, shift: mg, degenerate: true });
    }
    let scale = vpg / vpp;
    Ok(ScaleShift { scale, shift: mg - scale * mp, degenerate: false })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DepthEvalResult {
    pub abs_rel: f64,
    pub delta1: f64,
    pub scale: f64,
    pub shift: f64,
    pub degenerate: bool,
}

/// AbsRel and δ1 of an already aligned prediction. Non-positive predictions
/// count as δ1 failures.
pub fn depth_metrics<T: Scalar>(aligned: &Tensor<T>, gt: &Tensor<T>) -> Result<DepthEvalResult> {
    same_shape(aligned, gt, "depth metrics")?;
    let mut abs_rel = 0.0;
    let mut hits = 0usize;
    for (i, (&p, &g)) in aligned.data().iter().zip(gt.data()).enumerate() {
        let (p, g) = (p.as_f64(), g.as_f64());
        if g <= 0.0 {
            return Err(Error::Shape(format!("ground-truth depth {g} ≤ 0 at element {i}")));
        }
        abs_rel += (p - g).abs() / g;
        // multiplication form keeps the 1.25 boundary exact
        if p > 0.0 && p < DELTA1_THRESHOLD * g && g < DELTA1_THRESHOLD * p {
            hits += 1;
        }
    }
    let n = aligned.numel() as f64;
    Ok(DepthEvalResult { abs_rel: abs_rel / n, delta1: hits as f64 / n, scale: 1.0, shift: 0.0, degenerate: false })
}

/// Scale-shift alignment over the whole video followed by [`depth_metrics`].
pub fn evaluate_depth<T: Scalar>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<DepthEvalResult> {
    let fit = align_scale_shift(pred, gt)?;
    let r = depth_metrics(&fit.apply(pred), gt)?;
    Ok(DepthEvalResult { scale: fit.scale, shift: fit.shift, degenerate: fit.degenerate, ..r })
}

/// Binary mask from a probability map (`p ≥ 0.5`).
pub fn binarize(map: &[f64]) -> Vec<bool> {
    map.iter().map(|&p| p >= 0.5).collect()
}

pub fn iou(a: &[bool], b: &[bool]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("mask sizes {} vs {}", a.len(), b.len())));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    Ok(if union == 0 { 0.0 } else { inter as f64 / union as f64 })
}

/// `table[j][i]` = IoU(gt j, pred i).
pub fn iou_table(pred: &[Vec<bool>], gt: &[Vec<bool>]) -> Result<Vec<Vec<f64>>> {
    gt.iter().map(|g| pred.iter().map(|p| iou(p, g)).collect()).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameMatch {
    /// `(pred index, gt index, IoU)` per accepted pair.
    pub matches: Vec<(usize, usize, f64)>,
    /// Mean IoU over accepted pairs; 0 when none.
    pub miou: f64,
    /// Accepted pairs over ground-truth masks (1 when there are none).
    pub matched_fraction: f64,
}

impl FrameMatch {
    fn from_matches(matches: Vec<(usize, usize, f64)>, gt_count: usize) -> Self {
        let k = matches.len();
        let miou = if k == 0 { 0.0 } else { matches.iter().map(|m| m.2).sum::<f64>() / k as f64 };
        let matched_fraction = if gt_count == 0 { 1.0 } else { k as f64 / gt_count as f64 };
        Self { matches, miou, matched_fraction }
    }
}

/// Greedy protocol over an IoU table: ground truths in ascending order each
/// take the unmatched prediction of highest IoU (lowest index on ties); the
/// pair is kept iff IoU > 0.5.
pub fn greedy_match_table(table: &[Vec<f64>]) -> FrameMatch {
    let preds = table.first().map_or(0, |r| r.len());
    let mut used = vec![false; preds];
    let mut matches = Vec::new();
    for (j, row) in table.iter().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for (i, &v) in row.iter().enumerate() {
            if !used[i] && best.is_none_or(|(_, b)| v > b) {
                best = Some((i, v));
            }
        }
        if let Some((i, v)) = best {
            if v > MATCH_IOU {
                used[i] = true;
                matches.push((i, j, v));
            }
        }
    }
    FrameMatch::from_matches(matches, table.len())
}

pub fn greedy_miou(pred: &[Vec<bool>], gt: &[Vec<bool>]) -> Result<FrameMatch> {
    Ok(greedy_match_table(&iou_table(pred, gt)?))
}

/// Best one-to-one matchings under the same acceptance rule.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OracleResult {
    pub max_sum: f64,
    pub miou_at_max_sum: f64,
    pub max_miou: f64,
}

pub fn optimal_match_table(table: &[Vec<f64>]) -> Result<OracleResult> {
    let preds = table.first().map_or(0, |r| r.len());
    if table.len() > ORACLE_MAX || preds > ORACLE_MAX {
        return Err(Error::Config(format!(
            "oracle limited to {ORACLE_MAX}×{ORACLE_MAX}, got {} gt × {preds} pred",
            table.len()
        )));
    }
    let mut best = OracleResult { max_sum: 0.0, miou_at_max_sum: 0.0, max_miou: 0.0 };
    let mut best_k = 0usize;

    #[allow(clippy::too_many_arguments)]
    fn go(table: &[Vec<f64>], j: usize, used: &mut [bool], sum: f64, k: usize, best: &mut OracleResult, best_k: &mut usize) {
        if j == table.len() {
            let m = if k == 0 { 0.0 } else { sum / k as f64 };
            if sum > best.max_sum || (sum == best.max_sum && k < *best_k) {
                best.max_sum = sum;
                best.miou_at_max_sum = m;
                *best_k = k;
            }
            best.max_miou = best.max_miou.max(m);
            return;
        }
        go(table, j + 1, used, sum, k, best, best_k);
        for i in 0..used.len() {
            if !used[i] && table[j][i] > MATCH_IOU {
                used[i] = true;
                go(table, j + 1, used, sum + table[j][i], k + 1, best, best_k);
                used[i] = false;
            }
        }
    }

    go(table, 0, &mut vec![false; preds], 0.0, 0, &mut best, &mut best_k);
    Ok(best)
}

pub fn optimal_miou_oracle(pred: &[Vec<bool>], gt: &[Vec<bool>]) -> Result<OracleResult> {
    optimal_match_table(&iou_table(pred, gt)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskEvalResult {
    /// Scores of evaluated (non-context) frames, in order.
    pub frame_mious: Vec<f64>,
    pub frame_matches: Vec<FrameMatch>,
    pub overall: f64,
    pub matched_fraction: f64,
}

/// Splits a `[C, H, W]` plane stack into binary masks, dropping empty ones
/// when `skip_empty` is set.
fn masks_of<T: Scalar>(planes: &[T], c: usize, skip_empty: bool) -> Vec<Vec<bool>> {
    let hw = planes.len() / c;
    (0..c)
        .map(|k| binarize(&planes[k * hw..(k + 1) * hw].iter().map(|v| v.as_f64()).collect::<Vec<_>>()))
        .filter(|m| !skip_empty || m.iter().any(|&b| b))
        .collect()
}

/// Greedy mIoU over a mask video `[T, C, H, W]`, skipping the first
/// `context` frames. Every channel is one instance mask; ground-truth
/// channels with empty support are not evaluated.
pub fn mask_video_miou<T: Scalar>(pred: &Tensor<T>, gt: &Tensor<T>, context: usize) -> Result<MaskEvalResult> {
    same_shape(pred, gt, "mask video")?;
    let s = pred.shape();
    if s.len() != 4 {
        return Err(Error::Shape(format!("mask video must be [T, C, H, W], got {s:?}")));
    }
    if context >= s[0] {
        return Err(Error::Config(format!("{context} context frames leave nothing to score in {}", s[0])));
    }
    let per = s[1] * s[2] * s[3];
    let mut frame_mious = Vec::new();
    let mut frame_matches = Vec::new();
    for f in context..s[0] {
        let p = masks_of(&pred.data()[f * per..(f + 1) * per], s[1], false);
        let g = masks_of(&gt.data()[f * per..(f + 1) * per], s[1], true);
        let m = greedy_miou(&p, &g)?;
        frame_mious.push(m.miou);
        frame_matches.push(m);
    }
    let n = frame_mious.len() as f64;
    let overall = frame_mious.iter().sum::<f64>() / n;
    let matched_fraction = frame_matches.iter().map(|m| m.matched_fraction).sum::<f64>() / n;
    Ok(MaskEvalResult { frame_mious, frame_matches, overall, matched_fraction })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn traced_greedy_example() {
        // rows gt, cols pred
        let t = vec![vec![0.8, 0.6], vec![0.0, 0.7]];
        let m = greedy_match_table(&t);
        assert_eq!(m.matches, vec![(0, 0, 0.8), (1, 1, 0.7)]);
        assert!((m.miou - 0.75).abs() < 1e-12);
    }

    #[test]
    fn oracle_bounds_greedy_where_order_matters() {
        // gt0 grabs pred0, leaving gt1 without a match
        let t = vec![vec![0.9, 0.8], vec![0.85, 0.1]];
        let g = greedy_match_table(&t);
        let o = optimal_match_table(&t).unwrap();
        assert_eq!(g.matches.len(), 1);
        assert!((o.max_sum - 1.65).abs() < 1e-12);
        assert!(g.matches.iter().map(|m| m.2).sum::<f64>() <= o.max_sum);
    }
}
