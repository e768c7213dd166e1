//! Per-view feature pyramids from a fixed filter bank, fused across the two
//! eyes with row-wise (epipolar) attention.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::image::{avg_pool2, gaussian_blur, RgbImage, ScalarMap};
use crate::stereo::{CorrelatedFeature, CORRELATED_CHANNELS};

/// Channels per pyramid level.
pub const FEATURE_CHANNELS: usize = 8;
/// Pyramid levels; level 0 is the coarsest (1/4 resolution).
pub const PYRAMID_LEVELS: usize = 3;
/// Stacked attention blocks.
pub const SAM_BLOCKS: usize = 3;

// Fixed per-channel gains that bring the filter responses on natural-ish
// textures to comparable magnitudes.
const GAIN_GRAY: f64 = 4.0;
const GAIN_GRAD: f64 = 16.0;
const GAIN_DOG: f64 = 16.0;
const GAIN_OPPONENT: f64 = 4.0;
const GAIN_STD: f64 = 16.0;
/// Scale of the unit-variance correlated features entering attention; at
/// unit scale they swamp the image features in the attention logits.
const CORRELATED_GAIN: f64 = 0.25;
const ANTI_ALIAS_SIGMA: f64 = 1.0;

/// Dense multi-channel map, pixel-major (`data[(y * width + x) * channels + c]`).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        Self { width, height, channels, data: vec![0.0; width * height * channels] }
    }

    /// Interleaves single-channel maps of equal size.
    pub fn from_channels(maps: &[ScalarMap]) -> Self {
        let (w, h) = (maps[0].width, maps[0].height);
        let c = maps.len();
        let mut out = Self::zeros(w, h, c);
        for (k, m) in maps.iter().enumerate() {
            debug_assert_eq!((m.width, m.height), (w, h));
            for (i, v) in m.data.iter().enumerate() {
                out.data[i * c + k] = *v;
            }
        }
        out
    }

    pub fn channel(&self, c: usize) -> ScalarMap {
        ScalarMap { width: self.width, height: self.height, data: self.data.iter().skip(c).step_by(self.channels).copied().collect() }
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> &[f64] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    #[inline]
    pub fn pixel_mut(&mut self, x: usize, y: usize) -> &mut [f64] {
        let i = (y * self.width + x) * self.channels;
        &mut self.data[i..i + self.channels]
    }

    /// Bilinear lookup at continuous pixel coordinates into `out`. Returns
    /// false (leaving `out` untouched) outside the hull of pixel centers.
    pub fn sample_into(&self, u: f64, v: f64, out: &mut [f64]) -> bool {
        let Some((x0, y0, fx, fy)) = crate::image::bilinear_cell(u, v, self.width, self.height) else {
            return false;
        };
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let (a, b, c, d) = (self.pixel(x0, y0), self.pixel(x1, y0), self.pixel(x0, y1), self.pixel(x1, y1));
        let (w00, w10, w01, w11) = ((1.0 - fx) * (1.0 - fy), fx * (1.0 - fy), (1.0 - fx) * fy, fx * fy);
        for k in 0..self.channels {
            out[k] = w00 * a[k] + w10 * b[k] + w01 * c[k] + w11 * d[k];
        }
        true
    }

    /// Resamples to `width × height` by bilinear lookup at the target pixel
    /// centers (clamped at the border).
    pub fn resample(&self, width: usize, height: usize) -> Self {
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        let mut out = Self::zeros(width, height, self.channels);
        let mut buf = vec![0.0; self.channels];
        for y in 0..height {
            for x in 0..width {
                let u = ((x as f64 + 0.5) * sx).clamp(0.5, self.width as f64 - 0.5);
                let v = ((y as f64 + 0.5) * sy).clamp(0.5, self.height as f64 - 0.5);
                self.sample_into(u, v, &mut buf);
                out.pixel_mut(x, y).copy_from_slice(&buf);
            }
        }
        out
    }

    pub fn map_channels(&self, f: impl Fn(&ScalarMap) -> ScalarMap) -> Self {
        let maps: Vec<ScalarMap> = (0..self.channels).map(|c| f(&self.channel(c))).collect();
        Self::from_channels(&maps)
    }

    /// Per-pixel L2 norm across channels.
    pub fn magnitude(&self) -> ScalarMap {
        ScalarMap {
            width: self.width,
            height: self.height,
            data: self.data.chunks(self.channels).map(|p| p.iter().map(|v| v * v).sum::<f64>().sqrt()).collect(),
        }
    }
}

impl From<&CorrelatedFeature> for FeatureMap {
    fn from(t: &CorrelatedFeature) -> Self {
        Self { width: t.width, height: t.height, channels: CORRELATED_CHANNELS, data: t.data.clone() }
    }
}

/// Feature maps at 1/4, 1/2 and full resolution (index 0..3).
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid {
    pub levels: Vec<FeatureMap>,
}

impl FeaturePyramid {
    pub fn level(&self, l: usize) -> &FeatureMap {
        &self.levels[l]
    }

    pub fn finest(&self) -> &FeatureMap {
        self.levels.last().expect("non-empty pyramid")
    }
}

fn central_gradient(m: &ScalarMap, horizontal: bool) -> ScalarMap {
    let (w, h) = (m.width, m.height);
    ScalarMap::from_fn(w, h, |x, y| {
        if horizontal {
            0.5 * (m.get((x + 1).min(w - 1), y) - m.get(x.saturating_sub(1), y))
        } else {
            0.5 * (m.get(x, (y + 1).min(h - 1)) - m.get(x, y.saturating_sub(1)))
        }
    })
}

fn local_std(m: &ScalarMap) -> ScalarMap {
    let mean = crate::image::box_mean(m, 1);
    let sq = crate::image::box_mean(&m.map(|v| v * v), 1);
    ScalarMap::from_fn(m.width, m.height, |x, y| {
        let mu = mean.get(x, y);
        (sq.get(x, y) - mu * mu).max(0.0).sqrt()
    })
}

fn sub(a: &ScalarMap, b: &ScalarMap, gain: f64) -> ScalarMap {
    ScalarMap::from_fn(a.width, a.height, |x, y| gain * (a.get(x, y) - b.get(x, y)))
}

/// Full-resolution filter-bank responses: intensity, x/y gradients, two
/// difference-of-Gaussian bands, two color-opponent channels and 3×3 local
/// standard deviation.
pub fn base_features(image: &RgbImage) -> FeatureMap {
    let gray = image.to_gray();
    let (r, g, b) = (image.channel(0), image.channel(1), image.channel(2));
    let g1 = gaussian_blur(&gray, 1.0);
    let g2 = gaussian_blur(&gray, 2.0);
    let g4 = gaussian_blur(&gray, 4.0);
    let channels = [
        gray.map(|v| GAIN_GRAY * v),
        central_gradient(&gray, true).map(|v| GAIN_GRAD * v),
        central_gradient(&gray, false).map(|v| GAIN_GRAD * v),
        sub(&g1, &g2, GAIN_DOG),
        sub(&g2, &g4, GAIN_DOG),
        sub(&r, &g, GAIN_OPPONENT),
        ScalarMap::from_fn(image.width, image.height, |x, y| GAIN_OPPONENT * (0.5 * (r.get(x, y) + g.get(x, y)) - b.get(x, y))),
        local_std(&gray).map(|v| GAIN_STD * v),
    ];
    FeatureMap::from_channels(&channels)
}

/// Feature pyramid by average-pooling the base responses, with a light blur
/// before each pooling step against aliasing.
pub fn extract(image: &RgbImage) -> Result<FeaturePyramid> {
    let div = 1 << (PYRAMID_LEVELS - 1);
    if !image.width.is_multiple_of(div) || !image.height.is_multiple_of(div) {
        return Err(Error::InvalidInput(format!("image size {}x{} must be divisible by {div}", image.width, image.height)));
    }
    let mut levels = vec![base_features(image)];
    for _ in 1..PYRAMID_LEVELS {
        let pooled = levels.last().unwrap().map_channels(|m| avg_pool2(&gaussian_blur(m, ANTI_ALIAS_SIGMA)));
        levels.push(pooled);
    }
    levels.reverse();
    Ok(FeaturePyramid { levels })
}

/// One attention block. Query and key share a projection so that a feature
/// attends most strongly to its own copy in the other eye.
#[derive(Debug, Clone, PartialEq)]
pub struct SamBlock {
    /// `c × c` query/key projection (orthogonal).
    pub query_key: DMatrix<f64>,
    /// `c × c` value projection (orthogonal).
    pub value: DMatrix<f64>,
    /// `c × C` output projection with orthonormal columns.
    pub output: DMatrix<f64>,
}

fn random_orthogonal(n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let a = DMatrix::from_fn(n, n, |_, _| StandardNormal.sample(rng));
    let qr = a.qr();
    let (mut q, r) = (qr.q(), qr.r());
    // Sign fix makes the draw Haar-distributed and the result unique.
    for j in 0..n {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

impl SamBlock {
    pub fn new(seed: u64) -> Self {
        let c = FEATURE_CHANNELS + CORRELATED_CHANNELS;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let query_key = random_orthogonal(c, &mut rng);
        let value = random_orthogonal(c, &mut rng);
        let out_full = random_orthogonal(c, &mut rng);
        let output = out_full.columns(0, FEATURE_CHANNELS).into_owned();
        Self { query_key, value, output }
    }

    pub fn width(&self) -> usize {
        self.query_key.nrows()
    }

    /// Row-stochastic warping matrix for one image row: entry `(i, j)` is the
    /// weight reference column `i` puts on other-eye column `j`.
    pub fn warping_matrix(&self, reference: &DMatrix<f64>, other: &DMatrix<f64>) -> DMatrix<f64> {
        let q = reference * &self.query_key;
        let k = other * &self.query_key;
        let mut logits = q * k.transpose();
        logits /= (self.width() as f64).sqrt();
        for mut row in logits.row_iter_mut() {
            let m = row.max();
            row.apply(|v| *v = (*v - m).exp());
            let s = row.sum();
            row /= s;
        }
        logits
    }

    /// Residual update of `reference` from `other` for one row.
    fn attend(&self, f_ref: &DMatrix<f64>, x_ref: &DMatrix<f64>, x_other: &DMatrix<f64>) -> DMatrix<f64> {
        let w = self.warping_matrix(x_ref, x_other);
        let v = x_other * &self.value;
        f_ref + w * v * &self.output
    }
}

/// The stack of blocks applied at every level.
#[derive(Debug, Clone, PartialEq)]
pub struct SamStack {
    pub blocks: Vec<SamBlock>,
}

impl SamStack {
    pub fn new(seed: u64) -> Self {
        Self { blocks: (0..SAM_BLOCKS as u64).map(|i| SamBlock::new(seed.wrapping_add(i).wrapping_mul(0x9E37_79B9_7F4A_7C15))).collect() }
    }
}

fn feature_row(f: &FeatureMap, y: usize) -> DMatrix<f64> {
    DMatrix::from_fn(f.width, f.channels, |x, k| f.pixel(x, y)[k])
}

/// Fuses one level of both eyes. `t_l`/`t_r` must already be at the level's
/// resolution. Each block updates both eyes from the previous block's
/// outputs; rows never interact.
pub fn sam_fuse(
    f_l: &FeatureMap,
    f_r: &FeatureMap,
    t_l: &FeatureMap,
    t_r: &FeatureMap,
    stack: &SamStack,
) -> Result<(FeatureMap, FeatureMap)> {
    let shape = |f: &FeatureMap| vec![f.height, f.width, f.channels];
    if shape(f_l) != shape(f_r) {
        return Err(Error::Shape { op: "sam_fuse features", lhs: shape(f_l), rhs: shape(f_r) });
    }
    for t in [t_l, t_r] {
        if (t.width, t.height, t.channels) != (f_l.width, f_l.height, CORRELATED_CHANNELS) {
            return Err(Error::Shape {
                op: "sam_fuse correlated features",
                lhs: vec![f_l.height, f_l.width, CORRELATED_CHANNELS],
                rhs: shape(t),
            });
        }
    }
    if f_l.channels != FEATURE_CHANNELS {
        return Err(Error::Shape { op: "sam_fuse channels", lhs: vec![FEATURE_CHANNELS], rhs: vec![f_l.channels] });
    }
    let (mut out_l, mut out_r) = (f_l.clone(), f_r.clone());
    for y in 0..f_l.height {
        let (mut row_l, mut row_r) = (feature_row(f_l, y), feature_row(f_r, y));
        let tl = DMatrix::from_fn(f_l.width, CORRELATED_CHANNELS, |x, k| t_l.pixel(x, y)[k]);
        let tr = DMatrix::from_fn(f_l.width, CORRELATED_CHANNELS, |x, k| t_r.pixel(x, y)[k]);
        for block in &stack.blocks {
            let xl = concat_cols(&row_l, &tl);
            let xr = concat_cols(&row_r, &tr);
            let new_l = block.attend(&row_l, &xl, &xr);
            let new_r = block.attend(&row_r, &xr, &xl);
            row_l = new_l;
            row_r = new_r;
        }
        for x in 0..f_l.width {
            for k in 0..FEATURE_CHANNELS {
                out_l.pixel_mut(x, y)[k] = row_l[(x, k)];
                out_r.pixel_mut(x, y)[k] = row_r[(x, k)];
            }
        }
    }
    Ok((out_l, out_r))
}

fn concat_cols(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(a.nrows(), a.ncols() + b.ncols());
    m.columns_mut(0, a.ncols()).copy_from(a);
    m.columns_mut(a.ncols(), b.ncols()).copy_from(b);
    m
}

/// Fixed 3×3 binomial smoothing per channel, clamped borders.
pub fn decode(f: &FeatureMap) -> FeatureMap {
    let (w, h) = (f.width, f.height);
    let taps = [0.25, 0.5, 0.25];
    let mut tmp = FeatureMap::zeros(w, h, f.channels);
    for y in 0..h {
        for x in 0..w {
            for (i, t) in taps.iter().enumerate() {
                let xx = (x as isize + i as isize - 1).clamp(0, w as isize - 1) as usize;
                for k in 0..f.channels {
                    tmp.pixel_mut(x, y)[k] += t * f.pixel(xx, y)[k];
                }
            }
        }
    }
    let mut out = FeatureMap::zeros(w, h, f.channels);
    for y in 0..h {
        for x in 0..w {
            for (i, t) in taps.iter().enumerate() {
                let yy = (y as isize + i as isize - 1).clamp(0, h as isize - 1) as usize;
                for k in 0..f.channels {
                    out.pixel_mut(x, y)[k] += t * tmp.pixel(x, yy)[k];
                }
            }
        }
    }
    out
}

fn scaled(mut t: FeatureMap) -> FeatureMap {
    t.data.iter_mut().for_each(|v| *v *= CORRELATED_GAIN);
    t
}

/// Switches for the fusion stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FusionOptions {
    pub sam: bool,
    pub correlated: bool,
}

/// Extracts, fuses and decodes the pyramids of one stereo pair.
/// `t` holds the correlated features of the left and right eye at image
/// resolution.
pub fn stereo_features(
    left: &RgbImage,
    right: &RgbImage,
    t: [&CorrelatedFeature; 2],
    stack: &SamStack,
    opts: FusionOptions,
) -> Result<[FeaturePyramid; 2]> {
    let pl = extract(left)?;
    let pr = extract(right)?;
    let tl_full = FeatureMap::from(t[0]);
    let tr_full = FeatureMap::from(t[1]);
    let mut out_l = Vec::with_capacity(PYRAMID_LEVELS);
    let mut out_r = Vec::with_capacity(PYRAMID_LEVELS);
    for l in 0..PYRAMID_LEVELS {
        let (fl, fr) = (pl.level(l), pr.level(l));
        let (fl, fr) = if opts.sam {
            let (tl, tr) = if opts.correlated {
                (scaled(tl_full.resample(fl.width, fl.height)), scaled(tr_full.resample(fl.width, fl.height)))
            } else {
                (FeatureMap::zeros(fl.width, fl.height, CORRELATED_CHANNELS), FeatureMap::zeros(fl.width, fl.height, CORRELATED_CHANNELS))
            };
            sam_fuse(fl, fr, &tl, &tr, stack)?
        } else {
            (fl.clone(), fr.clone())
        };
        out_l.push(decode(&fl));
        out_r.push(decode(&fr));
    }
    Ok([FeaturePyramid { levels: out_l }, FeaturePyramid { levels: out_r }])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn textured(w: usize, h: usize, seed: u64) -> RgbImage {
        let mut img = RgbImage::new(w, h, [0.0; 3]);
        let mut s = seed;
        for y in 0..h {
            for x in 0..w {
                let mut px = [0.0; 3];
                for c in &mut px {
                    s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                    *c = (s >> 40) as f64 / (1u64 << 24) as f64;
                }
                img.set(x, y, px);
            }
        }
        img
    }

    #[test]
    fn constant_image_has_zero_gradients() {
        let p = extract(&RgbImage::new(16, 8, [0.3, 0.5, 0.7])).unwrap();
        for f in &p.levels {
            for c in [1, 2, 3, 4, 7] {
                assert!(f.channel(c).data.iter().all(|v| v.abs() < 1e-12));
            }
        }
    }

    #[test]
    fn level_shapes_are_quarter_half_full() {
        let p = extract(&textured(24, 16, 1)).unwrap();
        let dims: Vec<_> = p.levels.iter().map(|f| (f.width, f.height, f.channels)).collect();
        assert_eq!(dims, vec![(6, 4, 8), (12, 8, 8), (24, 16, 8)]);
        assert!(extract(&textured(22, 16, 1)).is_err());
    }

    #[test]
    fn base_features_shift_with_the_image() {
        let big = textured(60, 40, 5);
        let mut shifted = RgbImage::new(60, 40, [0.0; 3]);
        for y in 0..40 {
            for x in 1..60 {
                shifted.set(x, y, big.get(x - 1, y));
            }
        }
        let a = base_features(&big);
        let b = base_features(&shifted);
        // Interior pixels, away from the 12 px DoG support at the borders.
        for y in 14..26 {
            for x in 14..45 {
                assert_eq!(a.pixel(x, y), b.pixel(x + 1, y));
            }
        }
    }

    #[test]
    fn warping_rows_are_distributions() {
        let block = SamBlock::new(3);
        let a = DMatrix::from_fn(10, 16, |i, j| ((i * 7 + j * 3) % 5) as f64 - 2.0);
        let b = DMatrix::from_fn(10, 16, |i, j| ((i * 5 + j) % 7) as f64 * 0.5);
        let w = block.warping_matrix(&a, &b);
        for row in w.row_iter() {
            assert!((row.sum() - 1.0).abs() < 1e-9);
            assert!(row.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn zero_value_projection_is_identity() {
        let mut stack = SamStack::new(1);
        for b in &mut stack.blocks {
            b.value.fill(0.0);
        }
        let img = textured(16, 8, 2);
        let f = base_features(&img);
        let t = FeatureMap::zeros(16, 8, CORRELATED_CHANNELS);
        let (l, r) = sam_fuse(&f, &f, &t, &t, &stack).unwrap();
        assert_eq!(l, f);
        assert_eq!(r, f);
    }

    #[test]
    fn projections_are_orthonormal() {
        let b = SamBlock::new(9);
        let eye = DMatrix::<f64>::identity(16, 16);
        assert!((b.query_key.transpose() * &b.query_key - &eye).amax() < 1e-12);
        assert!((b.value.transpose() * &b.value - &eye).amax() < 1e-12);
        let o = &b.output;
        assert!((o.transpose() * o - DMatrix::<f64>::identity(8, 8)).amax() < 1e-12);
    }

    #[test]
    fn mismatched_shapes_are_rejected() {
        let stack = SamStack::new(0);
        let a = FeatureMap::zeros(8, 4, 8);
        let b = FeatureMap::zeros(6, 4, 8);
        let t = FeatureMap::zeros(8, 4, CORRELATED_CHANNELS);
        assert!(matches!(sam_fuse(&a, &b, &t, &t, &stack), Err(Error::Shape { .. })));
    }
}
