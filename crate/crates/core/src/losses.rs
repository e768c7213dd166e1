//! Training objective: color loss, self-supervised depth loss and the
//! three-part stereo depth loss, all in inverse-depth units.
//!
//! Depth maps are compared through [`g_distance`], a masked sum of smooth-L1
//! penalties on `1/d − 1/d_gt`. Masks are [`ScalarMap`]s where `> 0.5` marks a
//! supervised pixel; unsupervised pixels are skipped, never multiplied by
//! zero, so their values cannot leak into a loss.

use serde::{Deserialize, Serialize};

use crate::costvol::downsample_inverse_depth;
use crate::diff::{smooth_l1, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::image::ScalarMap;

/// Floor applied to rendered depth before inversion in the ray loss. Rays
/// with no opacity render depth 0.
pub const RENDERED_DEPTH_FLOOR: f64 = 1e-3;

/// Weights of the objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// Weight of the self-supervised depth loss.
    pub self_depth: f64,
    /// Weight of the combined stereo depth loss.
    pub stereo_depth: f64,
    /// Stereo-output term.
    pub lambda1: f64,
    /// Cost-volume depth term.
    pub lambda2: f64,
    /// Rendered-depth term.
    pub lambda3: f64,
    /// Decay across the stereo output sequence.
    pub gamma: f64,
    /// Smooth-L1 transition point, in 1/m.
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { self_depth: 0.1, stereo_depth: 1.0, lambda1: 0.1, lambda2: 0.1, lambda3: 1.0, gamma: 0.9, beta: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let w = [self.self_depth, self.stereo_depth, self.lambda1, self.lambda2, self.lambda3];
        if w.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Config(format!("gamma must lie in (0, 1], got {}", self.gamma)));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::Config(format!("beta must be positive, got {}", self.beta)));
        }
        Ok(())
    }
}

/// A supervision target: depth plus validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthTarget {
    pub depth: ScalarMap,
    pub mask: ScalarMap,
}

impl DepthTarget {
    /// Masks pixels whose depth leaves `[near, far]` or whose `consistent`
    /// flag is off.
    pub fn new(depth: ScalarMap, consistent: &ScalarMap, near: f64, far: f64) -> Result<Self> {
        check_size("depth target", &depth, consistent)?;
        let mask = ScalarMap {
            width: depth.width,
            height: depth.height,
            data: depth.data.iter().zip(&consistent.data).map(|(&d, &m)| f64::from(m > 0.5 && d >= near && d <= far)).collect(),
        };
        Ok(Self { depth, mask })
    }

    pub fn is_supervised(&self, i: usize) -> bool {
        self.mask.data[i] > 0.5
    }

    pub fn supervised_count(&self) -> usize {
        self.mask.data.iter().filter(|&&m| m > 0.5).count()
    }

    /// The target at `factor`× lower resolution: inverse depth averaged over
    /// each block's supervised pixels.
    pub fn downsampled(&self, factor: usize) -> Self {
        let (depth, mask) = downsample_inverse_depth(&self.depth, &self.mask, factor);
        Self { depth, mask }
    }
}

fn check_size(op: &'static str, a: &ScalarMap, b: &ScalarMap) -> Result<()> {
    if a.width != b.width || a.height != b.height {
        return Err(Error::Shape { op, lhs: vec![a.height, a.width], rhs: vec![b.height, b.width] });
    }
    Ok(())
}

/// Σ over supervised pixels of smooth_l1(1/d − 1/d_gt).
pub fn g_distance(d: &ScalarMap, target: &DepthTarget, beta: f64) -> Result<f64> {
    check_size("g_distance", d, &target.depth)?;
    let mut sum = 0.0;
    for i in 0..d.data.len() {
        if !target.is_supervised(i) {
            continue;
        }
        let (x, y) = (d.data[i], target.depth.data[i]);
        if !(x > 0.0) {
            return Err(Error::InvalidInput(format!("non-positive depth {x} at supervised pixel {i}")));
        }
        sum += smooth_l1(1.0 / x - 1.0 / y, beta);
    }
    Ok(sum)
}

/// `γ^n` by repeated multiplication, so it matches a hand-written product
/// bit for bit.
pub fn gamma_weight(gamma: f64, n: usize) -> f64 {
    (0..n).fold(1.0, |w, _| w * gamma)
}

/// Stereo-output loss. Each entry is one eye of one pair: its output
/// sequence (oldest first) and target. Output `k` of `K` is weighted by
/// `γ^(K−k)`.
pub fn stereo_output_loss(eyes: &[(&[ScalarMap], &DepthTarget)], gamma: f64, beta: f64) -> Result<f64> {
    let mut sum = 0.0;
    for (outputs, target) in eyes {
        let k = outputs.len();
        for (i, d) in outputs.iter().enumerate() {
            sum += gamma_weight(gamma, k - 1 - i) * g_distance(d, target, beta)?;
        }
    }
    Ok(sum)
}

/// Cost-volume depth loss. Each entry is one eye of one pair: its stage
/// depth maps (coarse first) and a target per stage. Stage `l` is weighted
/// by `2^−l`.
pub fn mvs_depth_loss(eyes: &[(&[ScalarMap], &[DepthTarget])], beta: f64) -> Result<f64> {
    let mut sum = 0.0;
    for (stages, targets) in eyes {
        if stages.len() != targets.len() {
            return Err(Error::Shape { op: "mvs_depth_loss", lhs: vec![stages.len()], rhs: vec![targets.len()] });
        }
        for (l, (d, t)) in stages.iter().zip(targets.iter()).enumerate() {
            sum += 0.5f64.powi(l as i32) * g_distance(d, t, beta)?;
        }
    }
    Ok(sum)
}

/// Targets matching each stage map's resolution.
pub fn stage_targets(target: &DepthTarget, stages: &[ScalarMap]) -> Result<Vec<DepthTarget>> {
    stages
        .iter()
        .map(|s| {
            let factor = target.depth.width / s.width;
            if factor == 0 || s.width * factor != target.depth.width || s.height * factor != target.depth.height {
                return Err(Error::Shape {
                    op: "stage_targets",
                    lhs: vec![target.depth.height, target.depth.width],
                    rhs: vec![s.height, s.width],
                });
            }
            Ok(if factor == 1 { target.clone() } else { target.downsampled(factor) })
        })
        .collect()
}

/// Mean squared color error over rays and channels.
pub fn color_loss<'t>(tape: &'t Tape, color: &[Var<'t>; 3], gt: &[[f64; 3]]) -> Result<Var<'t>> {
    let r = gt.len();
    let mut total: Option<Var<'t>> = None;
    for (c, pred) in color.iter().enumerate() {
        if pred.shape() != [r] {
            return Err(Error::Shape { op: "color_loss", lhs: pred.shape(), rhs: vec![r] });
        }
        let target = tape.constant(Tensor::vector(gt.iter().map(|p| p[c]).collect()));
        let diff = pred.sub(target)?;
        let sq = diff.mul(diff)?.sum()?;
        total = Some(match total {
            None => sq,
            Some(t) => t.add(sq)?,
        });
    }
    total.expect("three channels").scale(1.0 / (3 * r.max(1)) as f64)
}

/// Ray-wise depth loss over a batch of rendered depths `[rays]`. Masked
/// rays are excluded from the graph.
pub fn ray_depth_loss<'t>(tape: &'t Tape, d_r: Var<'t>, d_gt: &[f64], mask: &[bool], beta: f64) -> Result<Var<'t>> {
    let r = d_gt.len();
    if d_r.shape() != [r] || mask.len() != r {
        return Err(Error::Shape { op: "ray_depth_loss", lhs: d_r.shape(), rhs: vec![r, mask.len()] });
    }
    let rows: Vec<usize> = (0..r).filter(|&i| mask[i]).collect();
    if rows.is_empty() {
        return Ok(tape.scalar(0.0));
    }
    let picked = d_r.reshape(&[r, 1])?.index_rows(&rows)?.reshape(&[rows.len()])?;
    let inv_gt = tape.constant(Tensor::vector(rows.iter().map(|&i| 1.0 / d_gt[i]).collect()));
    picked.clamp_min(RENDERED_DEPTH_FLOOR)?.recip()?.sub(inv_gt)?.smooth_l1(beta)?.sum()
}

/// Self-supervised depth loss at a set of ray pixels: stereo depth and each
/// cost-volume stage against the rendered depth, which is a fixed target.
/// Entries where a prediction is not positive are skipped.
pub fn self_depth_loss(d_s: &[f64], d_m: &[Vec<f64>], d_r: &[f64], beta: f64) -> f64 {
    let term = |d: &[f64]| -> f64 {
        d.iter().zip(d_r).filter(|(&x, &y)| x > 0.0 && y > 0.0).map(|(&x, &y)| smooth_l1(1.0 / x - 1.0 / y, beta)).sum()
    };
    let mut sum = term(d_s);
    for (l, d) in d_m.iter().enumerate() {
        sum += 0.5f64.powi(l as i32) * term(d);
    }
    sum
}

/// Values of each loss term.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub color: f64,
    pub stereo_output: f64,
    pub mvs: f64,
    pub ray: f64,
    pub self_depth: f64,
}

/// L_c + λ_self·L_self + λ_stereo·(λ1·L_s + λ2·L_m + λ3·L_r).
pub fn total_loss(parts: &LossParts, w: &LossWeights) -> f64 {
    parts.color
        + w.self_depth * parts.self_depth
        + w.stereo_depth * (w.lambda1 * parts.stereo_output + w.lambda2 * parts.mvs + w.lambda3 * parts.ray)
}

/// [`total_loss`] on the tape, with the color and ray terms differentiable
/// and the remaining parts constant.
pub fn total_loss_var<'t>(tape: &'t Tape, color: Var<'t>, ray: Var<'t>, constant_parts: &LossParts, w: &LossWeights) -> Result<Var<'t>> {
    let fixed = w.self_depth * constant_parts.self_depth
        + w.stereo_depth * (w.lambda1 * constant_parts.stereo_output + w.lambda2 * constant_parts.mvs);
    color.add(ray.scale(w.stereo_depth * w.lambda3)?)?.add(tape.scalar(fixed))
}
