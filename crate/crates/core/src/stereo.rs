//! Coarse-to-fine census stereo matcher.
//!
//! Each pair is matched in both directions over a three-level pyramid:
//! winner-take-all on box-aggregated census/Hamming costs at the coarsest
//! level, then ±`local_search` px re-search at every finer level. The finest
//! level is refined by a parabola fit and by Gauss-Newton sweeps on windowed
//! intensity SSD. Every stage contributes one full-resolution output to the
//! [`DisparitySequence`], coarse to fine.
//!
//! Disparities are positive in both eyes: left pixel `x` corresponds to right
//! pixel `x − d_L`, right pixel `x` to left pixel `x + d_R`.

use serde::{Deserialize, Serialize};

use crate::diff::smooth_l1;
use crate::error::{Error, Result};
use crate::geometry::StereoRig;
use crate::image::{avg_pool2, flip_horizontal, gaussian_blur, RgbImage, ScalarMap};

/// Number of outputs in a disparity sequence.
pub const SEQUENCE_LEN: usize = 7;
/// Channels of the stereo-correlated feature.
pub const CORRELATED_CHANNELS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MatcherProfile {
    /// Census window radius (2 → 5×5).
    pub census_radius: usize,
    /// Box aggregation radius (3 → 7×7).
    pub aggregation_radius: usize,
    pub levels: usize,
    /// Half-width of the per-level re-search around the upsampled estimate.
    pub local_search: usize,
    /// Gauss-Newton sweeps after the parabola fit.
    pub gauss_newton_sweeps: usize,
    /// Left-right consistency threshold in pixels.
    pub lr_threshold: f64,
}

impl Default for MatcherProfile {
    fn default() -> Self {
        Self { census_radius: 2, aggregation_radius: 3, levels: 3, local_search: 2, gauss_newton_sweeps: 3, lr_threshold: 1.0 }
    }
}

impl MatcherProfile {
    /// Stricter, smoother profile used for pseudo ground truth.
    pub fn pseudo_gt() -> Self {
        Self { aggregation_radius: 4, lr_threshold: 0.5, ..Self::default() }
    }

    /// Outputs produced: one per level, the parabola fit and each sweep.
    pub fn outputs(&self) -> usize {
        self.levels + 1 + self.gauss_newton_sweeps
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.census_radius == 0 || self.census_radius > 3 {
            return Err(Error::Config("matcher needs ≥1 level and a census radius in 1..=3".into()));
        }
        if self.outputs() > SEQUENCE_LEN {
            return Err(Error::Config(format!(
                "matcher profile yields {} outputs, more than the sequence length {SEQUENCE_LEN}",
                self.outputs()
            )));
        }
        if !(self.lr_threshold > 0.0) {
            return Err(Error::Config("lr_threshold must be positive".into()));
        }
        Ok(())
    }
}

/// K full-resolution disparity maps, coarse to fine; the last is final.
#[derive(Debug, Clone, PartialEq)]
pub struct DisparitySequence {
    pub outputs: Vec<ScalarMap>,
}

impl DisparitySequence {
    pub fn last(&self) -> &ScalarMap {
        self.outputs.last().expect("non-empty sequence")
    }

    pub fn len(&self) -> usize {
        self.outputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outputs.is_empty()
    }
}

/// Per-pixel slice of the aggregated matching-cost curve around the winning
/// disparity, normalized per channel to zero mean and unit variance.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelatedFeature {
    pub width: usize,
    pub height: usize,
    /// Pixel-major: `data[(y * width + x) * CORRELATED_CHANNELS + c]`.
    pub data: Vec<f64>,
}

impl CorrelatedFeature {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![0.0; width * height * CORRELATED_CHANNELS] }
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[f64] {
        let i = (y * self.width + x) * CORRELATED_CHANNELS;
        &self.data[i..i + CORRELATED_CHANNELS]
    }
}

/// Both directions of one matched pair. Index 0 is the left eye.
#[derive(Debug, Clone, PartialEq)]
pub struct StereoMatch {
    pub sequences: [DisparitySequence; 2],
    pub correlated: [CorrelatedFeature; 2],
    /// 1 where the final disparity passed the left-right check.
    pub valid: [ScalarMap; 2],
}

struct OneWay {
    seq: Vec<ScalarMap>,
    correlated: CorrelatedFeature,
    /// Pixels whose cost curve was flat (no texture).
    flat: Vec<bool>,
}

fn census(img: &ScalarMap, r: usize) -> Vec<u64> {
    let (w, h) = (img.width, img.height);
    let ri = r as isize;
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut out = vec![0u64; w * h];
    for y in 0..h {
        for x in 0..w {
            let c = img.get(x, y);
            let mut bits = 0u64;
            for dy in -ri..=ri {
                for dx in -ri..=ri {
                    if dx == 0 && dy == 0 {
                        continue;
                    }
                    let v = img.get(clamp(x as isize + dx, w), clamp(y as isize + dy, h));
                    bits = (bits << 1) | u64::from(v < c);
                }
            }
            out[y * w + x] = bits;
        }
    }
    out
}

/// Box-aggregated census costs for disparities `0..=dmax`, indexed
/// `[d][y * w + x]`. Out-of-image correspondences cost the maximum.
fn aggregated_costs(left: &[u64], right: &[u64], w: usize, h: usize, dmax: usize, bits: u32, agg: usize) -> Vec<ScalarMap> {
    (0..=dmax)
        .map(|d| {
            let raw =
                ScalarMap::from_fn(
                    w,
                    h,
                    |x, y| {
                        if x >= d {
                            (left[y * w + x] ^ right[y * w + x - d]).count_ones() as f64
                        } else {
                            bits as f64
                        }
                    },
                );
            crate::image::box_mean(&raw, agg)
        })
        .collect()
}

fn upsample_disparity(d: &ScalarMap, factor: usize, w: usize, h: usize) -> ScalarMap {
    ScalarMap::from_fn(w, h, |x, y| {
        let sx = (x / factor).min(d.width - 1);
        let sy = (y / factor).min(d.height - 1);
        d.get(sx, sy) * factor as f64
    })
}

/// Matches `reference` against `other` where reference pixel `x` corresponds
/// to `other` pixel `x − d`.
fn match_one_way(reference: &ScalarMap, other: &ScalarMap, max_disp: usize, p: &MatcherProfile) -> OneWay {
    let (w, h) = (reference.width, reference.height);
    // pyramid[0] is the coarsest level.
    let mut pyr_ref = vec![reference.clone()];
    let mut pyr_oth = vec![other.clone()];
    for _ in 1..p.levels {
        let (r, o) = (avg_pool2(pyr_ref.last().unwrap()), avg_pool2(pyr_oth.last().unwrap()));
        pyr_ref.push(r);
        pyr_oth.push(o);
    }
    pyr_ref.reverse();
    pyr_oth.reverse();

    let bits = ((2 * p.census_radius + 1).pow(2) - 1) as u32;
    let mut seq = Vec::with_capacity(SEQUENCE_LEN);
    let mut current: Option<ScalarMap> = None;
    let mut finest_costs = Vec::new();
    let mut flat = vec![false; w * h];

    for level in 0..p.levels {
        let factor = 1usize << (p.levels - 1 - level);
        let (img_r, img_o) = (&pyr_ref[level], &pyr_oth[level]);
        let (lw, lh) = (img_r.width, img_r.height);
        let dmax = max_disp.div_ceil(factor).min(lw.saturating_sub(1));
        let costs =
            aggregated_costs(&census(img_r, p.census_radius), &census(img_o, p.census_radius), lw, lh, dmax, bits, p.aggregation_radius);
        let guide = current.as_ref().map(|c| upsample_disparity(c, 2, lw, lh));
        let mut disp = ScalarMap::new(lw, lh, 0.0);
        for y in 0..lh {
            for x in 0..lw {
                let (lo, hi) = match &guide {
                    None => (0, dmax),
                    Some(g) => {
                        let c = g.get(x, y).round() as isize;
                        let s = p.local_search as isize;
                        ((c - s).max(0) as usize, ((c + s).max(0) as usize).min(dmax))
                    }
                };
                let (mut best, mut best_c, mut worst_c) = (lo, f64::INFINITY, f64::NEG_INFINITY);
                for d in lo..=hi {
                    let c = costs[d].get(x, y);
                    if c < best_c {
                        best_c = c;
                        best = d;
                    }
                    worst_c = worst_c.max(c);
                }
                let is_flat = worst_c - best_c < 1e-12;
                disp.set(x, y, if is_flat { 0.0 } else { best as f64 });
                if level + 1 == p.levels {
                    flat[y * lw + x] = is_flat;
                }
            }
        }
        seq.push(upsample_disparity(&disp, factor, w, h));
        if level + 1 == p.levels {
            finest_costs = costs;
        }
        current = Some(disp);
    }
    let integer = current.expect("at least one level");
    let dmax = finest_costs.len() - 1;

    // Parabola fit through the aggregated costs around the winner.
    let mut refined = integer.clone();
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let d = integer.data[i] as usize;
            if flat[i] || d == 0 || d >= dmax {
                continue;
            }
            let (cm, c0, cp) = (finest_costs[d - 1].data[i], finest_costs[d].data[i], finest_costs[d + 1].data[i]);
            let denom = cm - 2.0 * c0 + cp;
            if denom > 1e-12 {
                refined.data[i] = d as f64 + (0.5 * (cm - cp) / denom).clamp(-0.5, 0.5);
            }
        }
    }
    seq.push(refined.clone());

    // Gauss-Newton on windowed SSD of lightly smoothed intensity.
    let sr = gaussian_blur(reference, 0.7);
    let so = gaussian_blur(other, 0.7);
    let anchor = refined.clone();
    let r = p.aggregation_radius as isize;
    for _ in 0..p.gauss_newton_sweeps {
        let prev = refined.clone();
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                if flat[i] {
                    continue;
                }
                let d = prev.data[i];
                let (mut jr, mut jj) = (0.0, 0.0);
                for dy in -r..=r {
                    let yy = y as isize + dy;
                    if yy < 0 || yy >= h as isize {
                        continue;
                    }
                    for dx in -r..=r {
                        let xx = x as isize + dx;
                        if xx < 0 || xx >= w as isize {
                            continue;
                        }
                        let u = xx as f64 - d;
                        if u < 0.0 || u >= (w - 1) as f64 {
                            continue;
                        }
                        let u0 = u as usize;
                        let f = u - u0 as f64;
                        let row = yy as usize * w;
                        let val = so.data[row + u0] * (1.0 - f) + so.data[row + u0 + 1] * f;
                        let grad = so.data[row + u0 + 1] - so.data[row + u0];
                        let resid = sr.data[row + xx as usize] - val;
                        // d(resid)/dd = +grad
                        jr += grad * resid;
                        jj += grad * grad;
                    }
                }
                if jj > 1e-8 {
                    let step = (-jr / jj).clamp(-0.5, 0.5);
                    let a = anchor.data[i];
                    refined.data[i] = (d + step).clamp((a - 1.0).max(0.0), (a + 1.0).min(dmax as f64));
                }
            }
        }
        seq.push(refined.clone());
    }

    // Cost-curve slice around the final disparity.
    let mut correlated = CorrelatedFeature::zeros(w, h);
    let half = (CORRELATED_CHANNELS / 2) as isize;
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let center = refined.data[i].round() as isize;
            for c in 0..CORRELATED_CHANNELS {
                let d = center + c as isize - half;
                let v = if d >= 0 && d as usize <= dmax { finest_costs[d as usize].data[i] } else { bits as f64 };
                correlated.data[i * CORRELATED_CHANNELS + c] = v;
            }
        }
    }
    normalize_channels(&mut correlated);

    for (i, is_flat) in flat.iter().enumerate() {
        if *is_flat {
            for out in &mut seq {
                out.data[i] = 0.0;
            }
        }
    }
    while seq.len() < SEQUENCE_LEN {
        seq.push(refined.clone());
    }
    OneWay { seq, correlated, flat }
}

fn normalize_channels(f: &mut CorrelatedFeature) {
    let n = (f.width * f.height) as f64;
    for c in 0..CORRELATED_CHANNELS {
        let vals = f.data.iter().skip(c).step_by(CORRELATED_CHANNELS);
        let mean = vals.clone().sum::<f64>() / n;
        let var = vals.map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let inv = if var > 1e-18 { 1.0 / var.sqrt() } else { 0.0 };
        for v in f.data.iter_mut().skip(c).step_by(CORRELATED_CHANNELS) {
            *v = (*v - mean) * inv;
        }
    }
}

fn flip_feature(f: &CorrelatedFeature) -> CorrelatedFeature {
    let mut out = CorrelatedFeature::zeros(f.width, f.height);
    for y in 0..f.height {
        for x in 0..f.width {
            let src = f.pixel(f.width - 1 - x, y);
            let i = (y * f.width + x) * CORRELATED_CHANNELS;
            out.data[i..i + CORRELATED_CHANNELS].copy_from_slice(src);
        }
    }
    out
}

/// Matches a rectified pair in both directions.
///
/// Degenerate (textureless) pixels get zero disparity in every output and an
/// invalid mask; a constant image therefore yields all-invalid masks rather
/// than an error.
pub fn match_pair(left: &RgbImage, right: &RgbImage, _rig: &StereoRig, max_disp: usize, profile: &MatcherProfile) -> Result<StereoMatch> {
    profile.validate()?;
    if left.width != right.width || left.height != right.height {
        return Err(Error::Shape { op: "stereo match", lhs: vec![left.height, left.width], rhs: vec![right.height, right.width] });
    }
    if max_disp == 0 || max_disp >= left.width / 2 {
        return Err(Error::InvalidInput(format!("max_disp {max_disp} must be in 1..{}", left.width / 2)));
    }
    let factor = 1usize << (profile.levels - 1);
    if !left.width.is_multiple_of(factor) || !left.height.is_multiple_of(factor) {
        return Err(Error::InvalidInput(format!(
            "image size {}x{} must be divisible by {factor} for {} levels",
            left.width, left.height, profile.levels
        )));
    }
    let gl = left.to_gray();
    let gr = right.to_gray();
    let l = match_one_way(&gl, &gr, max_disp, profile);
    let r_flipped = match_one_way(&flip_horizontal(&gr), &flip_horizontal(&gl), max_disp, profile);
    let r = OneWay {
        seq: r_flipped.seq.iter().map(flip_horizontal).collect(),
        correlated: flip_feature(&r_flipped.correlated),
        flat: {
            let w = left.width;
            (0..r_flipped.flat.len()).map(|i| r_flipped.flat[(i / w) * w + (w - 1 - i % w)]).collect()
        },
    };
    let valid_l = lr_check(&l, &r, -1.0, profile.lr_threshold);
    let valid_r = lr_check(&r, &l, 1.0, profile.lr_threshold);
    Ok(StereoMatch {
        sequences: [DisparitySequence { outputs: l.seq }, DisparitySequence { outputs: r.seq }],
        correlated: [l.correlated, r.correlated],
        valid: [valid_l, valid_r],
    })
}

/// `direction` is −1 for left→right lookups, +1 for right→left.
fn lr_check(this: &OneWay, other: &OneWay, direction: f64, threshold: f64) -> ScalarMap {
    let a = this.seq.last().unwrap();
    let b = other.seq.last().unwrap();
    let w = a.width;
    ScalarMap::from_fn(w, a.height, |x, y| {
        let i = y * w + x;
        if this.flat[i] {
            return 0.0;
        }
        let d = a.get(x, y);
        let xo = (x as f64 + direction * d).round();
        if xo < 0.0 || xo >= w as f64 {
            return 0.0;
        }
        let j = y * w + xo as usize;
        if other.flat[j] {
            return 0.0;
        }
        f64::from((d - b.data[j]).abs() <= threshold)
    })
}

/// Largest disparity worth searching for a rig and near bound, with slack.
pub fn max_disparity_for(rig: &StereoRig, near: f64) -> usize {
    (rig.bf() / near).ceil() as usize + 2
}

/// Depth (meters) from the final output on valid pixels with positive
/// disparity; everything else gets depth 0 and mask 0.
pub fn stereo_depth(seq: &DisparitySequence, valid: &ScalarMap, rig: &StereoRig) -> (ScalarMap, ScalarMap) {
    let d = seq.last();
    let mut depth = ScalarMap::new(d.width, d.height, 0.0);
    let mut mask = ScalarMap::new(d.width, d.height, 0.0);
    for i in 0..d.data.len() {
        let disp = d.data[i];
        if valid.data[i] > 0.5 && disp > 0.0 {
            depth.data[i] = rig.bf() / disp;
            mask.data[i] = 1.0;
        }
    }
    (depth, mask)
}

/// Affine correction `disp' = scale·disp + offset`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DisparityCalibration {
    pub scale: f64,
    pub offset: f64,
    /// Set when the fit was skipped and the identity returned instead.
    pub fallback: bool,
}

impl Default for DisparityCalibration {
    fn default() -> Self {
        Self::identity()
    }
}

impl DisparityCalibration {
    pub fn identity() -> Self {
        Self { scale: 1.0, offset: 0.0, fallback: false }
    }

    #[inline]
    pub fn apply_value(&self, disp: f64) -> f64 {
        (self.scale * disp + self.offset).max(0.0)
    }

    /// Applied to every output; zero-filled (textureless) pixels stay zero.
    pub fn apply(&self, seq: &DisparitySequence) -> DisparitySequence {
        DisparitySequence { outputs: seq.outputs.iter().map(|m| m.map(|d| if d == 0.0 { 0.0 } else { self.apply_value(d) })).collect() }
    }
}

/// Minimum jointly valid pixels for a calibration fit.
pub const MIN_CALIBRATION_PIXELS: usize = 100;

/// Fits `(scale, offset)` minimizing `Σ smooth_l1(1/depth(scale·disp + offset)
/// − 1/d_r)` by iteratively reweighted least squares. The residual is linear
/// in both unknowns because `1/depth = disp / (b·f)`.
///
/// `samples` holds `(disparity, rendered depth)` pairs that are valid in
/// both sources. Too few samples, or a degenerate fit, yield the identity
/// with `fallback` set.
pub fn calibrate(samples: &[(f64, f64)], bf: f64, beta: f64) -> DisparityCalibration {
    let usable: Vec<(f64, f64)> = samples.iter().copied().filter(|&(d, z)| d.is_finite() && z > 0.0 && z.is_finite()).collect();
    let fallback = DisparityCalibration { fallback: true, ..DisparityCalibration::identity() };
    if usable.len() < MIN_CALIBRATION_PIXELS {
        return fallback;
    }
    let (mut a, mut c) = (1.0, 0.0);
    for _ in 0..50 {
        // Normal equations of the weighted problem in (a, c):
        // r = (a·d + c)/bf − 1/z.
        let (mut s_dd, mut s_d, mut s_1, mut s_dy, mut s_y) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for &(d, z) in &usable {
            let x = d / bf;
            let k = 1.0 / bf;
            let y = 1.0 / z;
            let r = a * x + c * k - y;
            let w = if r.abs() < beta { 1.0 } else { beta / r.abs() };
            s_dd += w * x * x;
            s_d += w * x * k;
            s_1 += w * k * k;
            s_dy += w * x * y;
            s_y += w * k * y;
        }
        let det = s_dd * s_1 - s_d * s_d;
        if det.abs() < 1e-300 {
            return fallback;
        }
        let na = (s_dy * s_1 - s_d * s_y) / det;
        let nc = (s_dd * s_y - s_d * s_dy) / det;
        let done = (na - a).abs() < 1e-13 && (nc - c).abs() < 1e-11;
        a = na;
        c = nc;
        if done {
            break;
        }
    }
    if !(a > 0.0) || !a.is_finite() || !c.is_finite() {
        return fallback;
    }
    DisparityCalibration { scale: a, offset: c, fallback: false }
}

/// The calibration objective for given parameters.
pub fn calibration_objective(samples: &[(f64, f64)], cal: &DisparityCalibration, bf: f64, beta: f64) -> f64 {
    samples.iter().map(|&(d, z)| smooth_l1((cal.scale * d + cal.offset) / bf - 1.0 / z, beta)).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Intrinsics, Pose};

    fn rig(w: usize, h: usize) -> StereoRig {
        let k = Intrinsics::new(79.0, 79.0, w as f64 / 2.0, h as f64 / 2.0, w, h).unwrap();
        StereoRig::new(k, Pose::identity(), 0.08).unwrap()
    }

    fn noise_image(w: usize, h: usize, seed: u64) -> RgbImage {
        let mut img = RgbImage::new(w, h, [0.0; 3]);
        let mut s = seed;
        for y in 0..h {
            for x in 0..w {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                let v = ((s >> 33) as f64 / (1u64 << 31) as f64 * 255.0).round() / 255.0;
                img.set(x, y, [v, v, v]);
            }
        }
        img
    }

    #[test]
    fn identical_images_give_zero_disparity() {
        let img = noise_image(32, 16, 1);
        let m = match_pair(&img, &img, &rig(32, 16), 6, &MatcherProfile::default()).unwrap();
        for eye in 0..2 {
            assert_eq!(m.sequences[eye].len(), SEQUENCE_LEN);
            let valid = m.valid[eye].data.iter().filter(|&&v| v > 0.5).count();
            assert!(valid > 32 * 16 * 9 / 10);
            for (d, v) in m.sequences[eye].last().data.iter().zip(&m.valid[eye].data) {
                if *v > 0.5 {
                    assert!(d.abs() < 1e-9, "{d}");
                }
            }
        }
    }

    #[test]
    fn constant_images_are_all_invalid_and_zero() {
        let img = RgbImage::new(32, 16, [0.4; 3]);
        let m = match_pair(&img, &img, &rig(32, 16), 6, &MatcherProfile::default()).unwrap();
        for eye in 0..2 {
            assert!(m.valid[eye].data.iter().all(|&v| v == 0.0));
            for out in &m.sequences[eye].outputs {
                assert!(out.data.iter().all(|&d| d == 0.0));
            }
            assert!(m.correlated[eye].data.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn shifted_noise_recovers_integer_shift() {
        let (w, h) = (48, 16);
        let base = noise_image(w + 8, h, 7);
        let shift = 3;
        let mut left = RgbImage::new(w, h, [0.0; 3]);
        let mut right = RgbImage::new(w, h, [0.0; 3]);
        for y in 0..h {
            for x in 0..w {
                left.set(x, y, base.get(x + 4, y));
                right.set(x, y, base.get(x + 4 + shift, y));
            }
        }
        let m = match_pair(&left, &right, &rig(w, h), 8, &MatcherProfile::default()).unwrap();
        let d = m.sequences[0].last();
        let mut good = 0;
        let mut total = 0;
        for y in 3..h - 3 {
            for x in 8..w - 4 {
                total += 1;
                if m.valid[0].get(x, y) > 0.5 && (d.get(x, y) - shift as f64).abs() < 0.25 {
                    good += 1;
                }
            }
        }
        assert!(good as f64 > 0.9 * total as f64, "{good}/{total}");
    }

    #[test]
    fn correlated_features_are_normalized() {
        let img = noise_image(32, 16, 3);
        let m = match_pair(&img, &img, &rig(32, 16), 6, &MatcherProfile::default()).unwrap();
        let f = &m.correlated[0];
        let n = (f.width * f.height) as f64;
        for c in 0..CORRELATED_CHANNELS {
            let vals: Vec<f64> = f.data.iter().skip(c).step_by(CORRELATED_CHANNELS).copied().collect();
            let mean = vals.iter().sum::<f64>() / n;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            assert!(mean.abs() < 1e-9);
            assert!(var < 1e-9 || (var - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn bad_inputs_are_rejected() {
        let a = noise_image(32, 16, 1);
        let b = noise_image(16, 16, 1);
        assert!(matches!(match_pair(&a, &b, &rig(32, 16), 6, &MatcherProfile::default()), Err(Error::Shape { .. })));
        assert!(match_pair(&a, &a, &rig(32, 16), 16, &MatcherProfile::default()).is_err());
    }

    #[test]
    fn stereo_depth_masks_invalid_and_is_monotone() {
        let r = rig(4, 1);
        let seq = DisparitySequence { outputs: vec![ScalarMap { width: 4, height: 1, data: vec![1.0, 2.0, 4.0, 0.0] }] };
        let valid = ScalarMap { width: 4, height: 1, data: vec![1.0, 1.0, 0.0, 1.0] };
        let (d, m) = stereo_depth(&seq, &valid, &r);
        assert_eq!(m.data, vec![1.0, 1.0, 0.0, 0.0]);
        assert_eq!(d.data[2], 0.0);
        assert_eq!(d.data[3], 0.0);
        assert!(d.data[0] > d.data[1]);
        assert!((d.data[0] - r.bf()).abs() < 1e-12);
    }

    #[test]
    fn calibration_recovers_planted_scale() {
        let bf = 6.32;
        let samples: Vec<(f64, f64)> = (0..400)
            .map(|i| {
                let z = 1.0 + 3.0 * i as f64 / 400.0;
                (2.0 * bf / z, z)
            })
            .collect();
        let cal = calibrate(&samples, bf, 1.0);
        assert!(!cal.fallback);
        assert!((cal.scale - 0.5).abs() < 1e-9, "{cal:?}");
        assert!(cal.offset.abs() < 1e-9);
    }

    #[test]
    fn calibration_without_overlap_is_identity() {
        let cal = calibrate(&[], 6.32, 1.0);
        assert!(cal.fallback);
        assert_eq!((cal.scale, cal.offset), (1.0, 0.0));
        let few: Vec<(f64, f64)> = (0..50).map(|i| (1.0 + i as f64, 2.0)).collect();
        assert!(calibrate(&few, 6.32, 1.0).fallback);
    }

    #[test]
    fn calibration_leaves_zero_filled_pixels_alone() {
        let seq = DisparitySequence { outputs: vec![ScalarMap { width: 2, height: 1, data: vec![0.0, 2.0] }] };
        let cal = DisparityCalibration { scale: 0.5, offset: 0.25, fallback: false };
        assert_eq!(cal.apply(&seq).outputs[0].data, vec![0.0, 1.25]);
    }
}
