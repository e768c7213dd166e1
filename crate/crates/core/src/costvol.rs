//! Plane-sweep cost volumes, depth-guided plane placement and the
//! three-stage cascade.
//!
//! Planes are fronto-parallel in the camera whose volume is being built.
//! Every pixel carries its own evenly spaced plane family
//! `lo + (i + 0.5)·interval` for `i in 0..count`, which covers the uniform,
//! guided and cascaded cases alike.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureMap;
use crate::geometry::Camera;
use crate::image::{gaussian_kernel, ScalarMap};

/// Plane counts per stage.
pub const DEFAULT_PLANES: [usize; 3] = [48, 32, 8];
pub const STAGES: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct PlaneSet {
    pub width: usize,
    pub height: usize,
    pub count: usize,
    /// Per-pixel lower edge of the swept range.
    pub lo: Vec<f64>,
    /// Per-pixel plane spacing.
    pub interval: Vec<f64>,
    /// Pixels whose planes were placed around a guide depth.
    pub guided: Vec<bool>,
}

impl PlaneSet {
    #[inline]
    pub fn depth(&self, pixel: usize, i: usize) -> f64 {
        self.lo[pixel] + (i as f64 + 0.5) * self.interval[pixel]
    }

    pub fn depths(&self, pixel: usize) -> Vec<f64> {
        (0..self.count).map(|i| self.depth(pixel, i)).collect()
    }

    pub fn pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn interval_map(&self) -> ScalarMap {
        ScalarMap { width: self.width, height: self.height, data: self.interval.clone() }
    }
}

/// Uniform midpoints of `[near, far]`, identical at every pixel.
pub fn planes_uniform(near: f64, far: f64, count: usize, width: usize, height: usize) -> Result<PlaneSet> {
    if !(near > 0.0 && far > near) || count < 2 {
        return Err(Error::InvalidInput(format!("uniform planes need 0 < near < far and ≥ 2 planes (got {near}, {far}, {count})")));
    }
    let n = width * height;
    Ok(PlaneSet { width, height, count, lo: vec![near; n], interval: vec![(far - near) / count as f64; n], guided: vec![false; n] })
}

/// Width of the guided search range around a stereo depth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum GuideRange {
    /// Half-width as a fraction of the guide depth.
    Relative(f64),
    /// Half-width in meters.
    Absolute(f64),
}

impl Default for GuideRange {
    fn default() -> Self {
        GuideRange::Relative(0.1)
    }
}

impl GuideRange {
    fn half_width(&self, depth: f64) -> f64 {
        match *self {
            GuideRange::Relative(r) => r * depth,
            GuideRange::Absolute(a) => a,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            GuideRange::Relative(r) if r > 0.0 && r < 1.0 => Ok(()),
            GuideRange::Absolute(a) if a > 0.0 => Ok(()),
            other => Err(Error::Config(format!("invalid guided plane range {other:?}"))),
        }
    }
}

/// Planes spanning `guide ± half_width` (clamped to `[near, far]`) on masked
/// pixels whose guide the resulting planes bracket; all other pixels fall back
/// to the uniform family.
pub fn planes_dgps(guide: &ScalarMap, mask: &ScalarMap, count: usize, range: GuideRange, near: f64, far: f64) -> Result<PlaneSet> {
    range.validate()?;
    let mut set = planes_uniform(near, far, count, guide.width, guide.height)?;
    for p in 0..set.pixels() {
        let d = guide.data[p];
        if mask.data[p] < 0.5 || !(d > 0.0) || !d.is_finite() {
            continue;
        }
        let hw = range.half_width(d);
        let lo = (d - hw).max(near);
        let hi = (d + hw).min(far);
        if hi <= lo {
            continue;
        }
        let interval = (hi - lo) / count as f64;
        let first = lo + 0.5 * interval;
        let last = lo + (count as f64 - 0.5) * interval;
        if d < first || d > last {
            continue;
        }
        set.lo[p] = lo;
        set.interval[p] = interval;
        set.guided[p] = true;
    }
    Ok(set)
}

/// Variance-aggregated feature costs: `data[(pixel * count + plane) * channels + c]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CostVolume {
    pub width: usize,
    pub height: usize,
    pub count: usize,
    pub channels: usize,
    pub data: Vec<f64>,
    /// Views that saw each voxel.
    pub views: Vec<u8>,
}

impl CostVolume {
    #[inline]
    pub fn voxel(&self, pixel: usize, plane: usize) -> &[f64] {
        let i = (pixel * self.count + plane) * self.channels;
        &self.data[i..i + self.channels]
    }

    #[inline]
    pub fn is_valid(&self, pixel: usize, plane: usize) -> bool {
        self.views[pixel * self.count + plane] >= 2
    }

    /// Channel-summed cost of one plane index (0 where invalid).
    pub fn cost_slice(&self, plane: usize) -> ScalarMap {
        ScalarMap::from_fn(self.width, self.height, |x, y| {
            let p = y * self.width + x;
            if self.is_valid(p, plane) {
                self.voxel(p, plane).iter().sum()
            } else {
                0.0
            }
        })
    }
}

/// One source image for sweeping: its camera at full resolution and its
/// feature map at the level being swept.
#[derive(Debug, Clone, Copy)]
pub struct SweepView<'a> {
    pub camera: &'a Camera,
    pub features: &'a FeatureMap,
}

/// Camera intrinsics rescaled to a feature map's resolution.
pub fn camera_at(camera: &Camera, width: usize, height: usize) -> Result<Camera> {
    let k = &camera.intrinsics;
    if !k.width.is_multiple_of(width) || k.width / width != k.height / height || !k.height.is_multiple_of(height) {
        return Err(Error::InvalidInput(format!("{}x{} is not an integer downscale of {}x{}", width, height, k.width, k.height)));
    }
    Ok(camera.downscaled(k.width / width))
}

/// Maps target pixels at a plane depth into a source view as
/// `K_src·(a + z·R·n)`; equivalent to the fronto-parallel plane homography.
struct Transfer {
    k: Matrix3<f64>,
    a: Vector3<f64>,
    rot: Matrix3<f64>,
}

impl Transfer {
    fn new(target: &Camera, src: &Camera) -> Self {
        let rot = src.pose.rotation.transpose() * target.pose.rotation;
        let a = src.pose.rotation.transpose() * (target.pose.translation - src.pose.translation);
        Self { k: src.intrinsics.matrix(), a, rot }
    }

    /// Source pixel for target normalized ray `n` (camera frame, z = 1) at
    /// depth `z`; `None` when the point is not in front of the source.
    #[inline]
    fn apply(&self, n: &Vector3<f64>, z: f64) -> Option<(f64, f64)> {
        let p = self.a + self.rot * (n * z);
        if p.z <= 1e-9 {
            return None;
        }
        let q = self.k * p;
        Some((q.x / q.z, q.y / q.z))
    }
}

/// Inverse per-channel variance of the features pooled over all views, so
/// costs are in units of the features' own spread.
fn channel_scales(views: &[SweepView<'_>], channels: usize) -> Vec<f64> {
    let mut sum = vec![0.0; channels];
    let mut sq = vec![0.0; channels];
    let mut n = 0usize;
    for v in views {
        for px in v.features.data.chunks(channels) {
            for c in 0..channels {
                sum[c] += px[c];
                sq[c] += px[c] * px[c];
            }
        }
        n += v.features.width * v.features.height;
    }
    (0..channels)
        .map(|c| {
            let mean = sum[c] / n as f64;
            let var = sq[c] / n as f64 - mean * mean;
            if var > 1e-12 {
                1.0 / var
            } else {
                0.0
            }
        })
        .collect()
}

/// Sweeps `planes` (defined in `target`'s frame at the features' resolution)
/// through every view and aggregates, per channel, the squared deviation from
/// the mean summed over the views that see each voxel (count × variance),
/// divided by that channel's variance over all views' maps.
/// The target itself should be among `views`.
pub fn sweep(views: &[SweepView<'_>], target: &Camera, planes: &PlaneSet) -> Result<CostVolume> {
    if views.len() < 2 {
        return Err(Error::Contract(format!("plane sweep needs at least 2 views, got {}", views.len())));
    }
    let channels = views[0].features.channels;
    let (w, h) = (planes.width, planes.height);
    let tgt = camera_at(target, w, h)?;
    let mut srcs = Vec::with_capacity(views.len());
    for v in views {
        if v.features.channels != channels {
            return Err(Error::Shape { op: "sweep channels", lhs: vec![channels], rhs: vec![v.features.channels] });
        }
        let cam = camera_at(v.camera, v.features.width, v.features.height)?;
        srcs.push((Transfer::new(&tgt, &cam), v.features));
    }
    let scale = channel_scales(views, channels);
    let kinv = tgt.intrinsics.inverse_matrix();
    let m = planes.count;
    let mut data = vec![0.0; w * h * m * channels];
    let mut counts = vec![0u8; w * h * m];
    let mut buf = vec![0.0; channels];
    let mut sum = vec![0.0; channels];
    let mut sq = vec![0.0; channels];
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let n = kinv * Vector3::new(x as f64 + 0.5, y as f64 + 0.5, 1.0);
            for i in 0..m {
                let z = planes.depth(p, i);
                sum.fill(0.0);
                sq.fill(0.0);
                let mut cnt = 0usize;
                for (tr, feat) in &srcs {
                    let Some((u, v)) = tr.apply(&n, z) else { continue };
                    if !feat.sample_into(u, v, &mut buf) {
                        continue;
                    }
                    cnt += 1;
                    for c in 0..channels {
                        sum[c] += buf[c];
                        sq[c] += buf[c] * buf[c];
                    }
                }
                counts[p * m + i] = cnt.min(u8::MAX as usize) as u8;
                if cnt >= 2 {
                    let inv = 1.0 / cnt as f64;
                    let out = &mut data[(p * m + i) * channels..(p * m + i + 1) * channels];
                    for c in 0..channels {
                        let mean = sum[c] * inv;
                        out[c] = (sq[c] - sum[c] * mean).max(0.0) * scale[c];
                    }
                }
            }
        }
    }
    Ok(CostVolume { width: w, height: h, count: m, channels, data, views: counts })
}

/// Regularized volume of one stage with its plane probabilities and
/// expected depth.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVolume {
    pub planes: PlaneSet,
    /// Camera at the volume's resolution.
    pub camera: Camera,
    pub channels: usize,
    /// Smoothed costs, laid out like [`CostVolume::data`].
    pub features: Vec<f64>,
    /// `prob[pixel * count + plane]`.
    pub prob: Vec<f64>,
    /// Probability mass below the upper edge of each plane's cell.
    pub cdf: Vec<f64>,
    /// Softargmin depth.
    pub depth: ScalarMap,
    /// Pixels with at least one valid voxel.
    pub valid: Vec<bool>,
}

/// Channels a volume lookup yields: smoothed costs, probability, cdf.
pub fn volume_sample_channels(cost_channels: usize) -> usize {
    cost_channels + 2
}

fn smooth_axis(values: &mut [f64], weights: &mut [f64], dims: [usize; 3], axis: usize, channels: usize, kernel: &[f64]) {
    let [nx, ny, nz] = dims;
    let r = (kernel.len() / 2) as isize;
    let stride = match axis {
        0 => nz,
        1 => nx * nz,
        _ => 1,
    };
    let len = dims[axis] as isize;
    let src_v = values.to_vec();
    let src_w = weights.to_vec();
    for yy in 0..ny {
        for xx in 0..nx {
            for zz in 0..nz {
                let idx = (yy * nx + xx) * nz + zz;
                let pos = [xx, yy, zz][axis] as isize;
                let mut acc_w = 0.0;
                let acc = &mut values[idx * channels..(idx + 1) * channels];
                acc.fill(0.0);
                for (k, kv) in kernel.iter().enumerate() {
                    let q = pos + k as isize - r;
                    if q < 0 || q >= len {
                        continue;
                    }
                    let j = (idx as isize + (q - pos) * stride as isize) as usize;
                    let wj = kv * src_w[j];
                    if wj == 0.0 {
                        continue;
                    }
                    acc_w += wj;
                    for c in 0..channels {
                        acc[c] += kv * src_v[j * channels + c];
                    }
                }
                weights[idx] = acc_w;
            }
        }
    }
}

/// Masked Gaussian smoothing over (x, y, plane), softmax over planes of the
/// negated channel-summed cost at temperature `tau`, and softargmin depth.
pub fn regularize(cost: &CostVolume, planes: &PlaneSet, camera: Camera, tau: f64, sigma: f64) -> Result<FeatureVolume> {
    if (cost.width, cost.height, cost.count) != (planes.width, planes.height, planes.count) {
        return Err(Error::Shape {
            op: "regularize",
            lhs: vec![cost.height, cost.width, cost.count],
            rhs: vec![planes.height, planes.width, planes.count],
        });
    }
    if !(tau > 0.0) {
        return Err(Error::Config(format!("softmax temperature must be positive, got {tau}")));
    }
    let (w, h, m, ch) = (cost.width, cost.height, cost.count, cost.channels);
    let n = w * h * m;
    // Normalized convolution: smooth (mask·value) and mask, then divide.
    let mut values = vec![0.0; n * ch];
    let mut weights = vec![0.0; n];
    for v in 0..n {
        if cost.views[v] >= 2 {
            weights[v] = 1.0;
            values[v * ch..(v + 1) * ch].copy_from_slice(&cost.data[v * ch..(v + 1) * ch]);
        }
    }
    if sigma > 0.0 {
        let kernel = gaussian_kernel(sigma);
        for axis in 0..3 {
            smooth_axis(&mut values, &mut weights, [w, h, m], axis, ch, &kernel);
        }
        for v in 0..n {
            if weights[v] > 1e-12 {
                let inv = 1.0 / weights[v];
                values[v * ch..(v + 1) * ch].iter_mut().for_each(|x| *x *= inv);
            } else {
                values[v * ch..(v + 1) * ch].fill(0.0);
            }
        }
    }

    let mut prob = vec![0.0; n];
    let mut cdf = vec![0.0; n];
    let mut depth = ScalarMap::new(w, h, 0.0);
    let mut valid = vec![false; w * h];
    for p in 0..w * h {
        let row = &mut prob[p * m..(p + 1) * m];
        let mut best = f64::INFINITY;
        for i in 0..m {
            if cost.is_valid(p, i) {
                let c: f64 = values[(p * m + i) * ch..(p * m + i + 1) * ch].iter().sum();
                row[i] = c / tau;
                best = best.min(row[i]);
            }
        }
        if best.is_finite() {
            valid[p] = true;
            let mut s = 0.0;
            for i in 0..m {
                row[i] = if cost.is_valid(p, i) { (best - row[i]).exp() } else { 0.0 };
                s += row[i];
            }
            row.iter_mut().for_each(|v| *v /= s);
        } else {
            row.fill(1.0 / m as f64);
        }
        let mut acc = 0.0;
        let mut d = 0.0;
        for i in 0..m {
            acc += row[i];
            cdf[p * m + i] = acc;
            d += row[i] * planes.depth(p, i);
        }
        depth.data[p] = d;
    }
    Ok(FeatureVolume { planes: planes.clone(), camera, channels: ch, features: values, prob, cdf, depth, valid })
}

impl FeatureVolume {
    pub fn width(&self) -> usize {
        self.planes.width
    }

    pub fn height(&self) -> usize {
        self.planes.height
    }

    pub fn sample_channels(&self) -> usize {
        volume_sample_channels(self.channels)
    }

    /// Lookup at one pixel and depth: features and probability interpolated
    /// linearly between planes (clamped to the end planes for features, zero
    /// beyond the swept range for probability); the cdf treats each plane's
    /// mass as spread evenly over its cell.
    fn sample_pixel(&self, p: usize, z: f64, weight: f64, out: &mut [f64]) {
        let m = self.planes.count;
        let ch = self.channels;
        let lo = self.planes.lo[p];
        let dz = self.planes.interval[p];
        let s = (z - lo) / dz;
        // Feature/probability interpolation in plane-center coordinates.
        let f = s - 0.5;
        let fc = f.clamp(0.0, (m - 1) as f64);
        let i0 = (fc as usize).min(m - 2);
        let t = fc - i0 as f64;
        let base0 = (p * m + i0) * ch;
        let base1 = base0 + ch;
        for c in 0..ch {
            out[c] += weight * ((1.0 - t) * self.features[base0 + c] + t * self.features[base1 + c]);
        }
        let prob = if f < -0.5 || f > m as f64 - 0.5 {
            0.0
        } else if f < 0.0 {
            self.prob[p * m]
        } else if f > (m - 1) as f64 {
            self.prob[p * m + m - 1]
        } else {
            (1.0 - t) * self.prob[p * m + i0] + t * self.prob[p * m + i0 + 1]
        };
        out[ch] += weight * prob;
        let cdf = if s <= 0.0 {
            0.0
        } else if s >= m as f64 {
            1.0
        } else {
            let k = s as usize;
            let below = if k == 0 { 0.0 } else { self.cdf[p * m + k - 1] };
            below + (s - k as f64) * self.prob[p * m + k]
        };
        out[ch + 1] += weight * cdf;
    }

    /// Trilinear lookup at continuous pixel coordinates of the volume's
    /// resolution and camera depth `z`. Returns false outside the image.
    pub fn sample_into(&self, u: f64, v: f64, z: f64, out: &mut [f64]) -> bool {
        let (w, h) = (self.width(), self.height());
        let Some((x0, y0, fx, fy)) = crate::image::bilinear_cell(u, v, w, h) else {
            return false;
        };
        let x1 = (x0 + 1).min(w - 1);
        let y1 = (y0 + 1).min(h - 1);
        out[..self.sample_channels()].fill(0.0);
        for (x, y, wt) in [(x0, y0, (1.0 - fx) * (1.0 - fy)), (x1, y0, fx * (1.0 - fy)), (x0, y1, (1.0 - fx) * fy), (x1, y1, fx * fy)] {
            if wt != 0.0 {
                self.sample_pixel(y * w + x, z, wt, out);
            }
        }
        true
    }

    /// Channel-summed smoothed cost of one plane index.
    pub fn cost_slice(&self, plane: usize) -> ScalarMap {
        let (w, m, ch) = (self.width(), self.planes.count, self.channels);
        ScalarMap::from_fn(w, self.height(), |x, y| {
            let i = ((y * w + x) * m + plane) * ch;
            self.features[i..i + ch].iter().sum()
        })
    }

    pub fn probability(&self, pixel: usize) -> &[f64] {
        let m = self.planes.count;
        &self.prob[pixel * m..(pixel + 1) * m]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CascadeConfig {
    pub planes: [usize; STAGES],
    /// Place stage-0 planes around the stereo depth. Not read from config
    /// files; the training toggles own this switch.
    #[serde(skip)]
    pub dgps: bool,
    pub guide_range: GuideRange,
    /// Softmax temperature in cost units.
    pub tau: f64,
    /// Gaussian smoothing width in voxels.
    pub smoothing_sigma: f64,
}

impl Default for CascadeConfig {
    fn default() -> Self {
        Self { planes: DEFAULT_PLANES, dgps: true, guide_range: GuideRange::default(), tau: 0.5, smoothing_sigma: 1.0 }
    }
}

impl CascadeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.planes.iter().any(|&m| m < 2) {
            return Err(Error::Config("every cascade stage needs at least 2 planes".into()));
        }
        if !(self.tau > 0.0) || !(self.smoothing_sigma >= 0.0) {
            return Err(Error::Config("tau must be positive and smoothing_sigma non-negative".into()));
        }
        self.guide_range.validate()
    }
}

/// Downsamples a depth map by `factor` averaging inverse depth over the
/// valid pixels of each block. A coarse pixel is valid when at least half
/// its block is.
pub fn downsample_inverse_depth(depth: &ScalarMap, mask: &ScalarMap, factor: usize) -> (ScalarMap, ScalarMap) {
    let (w, h) = (depth.width / factor, depth.height / factor);
    let mut d = ScalarMap::new(w, h, 0.0);
    let mut m = ScalarMap::new(w, h, 0.0);
    for y in 0..h {
        for x in 0..w {
            let (mut s, mut n) = (0.0, 0usize);
            for yy in y * factor..(y + 1) * factor {
                for xx in x * factor..(x + 1) * factor {
                    let z = depth.get(xx, yy);
                    if mask.get(xx, yy) > 0.5 && z > 0.0 {
                        s += 1.0 / z;
                        n += 1;
                    }
                }
            }
            if n > 0 && 2 * n >= factor * factor {
                d.set(x, y, n as f64 / s);
                m.set(x, y, 1.0);
            }
        }
    }
    (d, m)
}

/// Planes for the next stage: centered on the bilinearly upsampled depth,
/// half the interval, slid to stay inside `[near, far]`.
pub fn refine_planes(prev: &FeatureVolume, width: usize, height: usize, count: usize, near: f64, far: f64) -> PlaneSet {
    let sx = prev.width() as f64 / width as f64;
    let sy = prev.height() as f64 / height as f64;
    let n = width * height;
    let mut set = PlaneSet { width, height, count, lo: vec![0.0; n], interval: vec![0.0; n], guided: vec![false; n] };
    for y in 0..height {
        for x in 0..width {
            let p = y * width + x;
            let u = ((x as f64 + 0.5) * sx).clamp(0.5, prev.width() as f64 - 0.5);
            let v = ((y as f64 + 0.5) * sy).clamp(0.5, prev.height() as f64 - 0.5);
            let center = prev.depth.sample(u, v).expect("clamped inside");
            let px = ((x as f64 * sx) as usize).min(prev.width() - 1);
            let py = ((y as f64 * sy) as usize).min(prev.height() - 1);
            let pp = py * prev.width() + px;
            let interval = prev.planes.interval[pp] * 0.5;
            let span = interval * count as f64;
            let lo = if span >= far - near { near } else { (center - 0.5 * span).clamp(near, far - span) };
            set.lo[p] = lo;
            set.interval[p] = interval;
            set.guided[p] = prev.planes.guided[pp];
        }
    }
    set
}

/// Stereo depth guiding stage 0, at image resolution.
#[derive(Debug, Clone, Copy)]
pub struct Guide<'a> {
    pub depth: &'a ScalarMap,
    pub mask: &'a ScalarMap,
}

/// Builds the three stage volumes for `cameras[reference]`. `pyramids[v][l]`
/// is view `v`'s level-`l` feature map; the reference should be included.
pub fn cascade(
    cameras: &[&Camera],
    pyramids: &[&[FeatureMap]],
    reference: usize,
    guide: Option<Guide<'_>>,
    near: f64,
    far: f64,
    config: &CascadeConfig,
) -> Result<Vec<FeatureVolume>> {
    config.validate()?;
    if cameras.len() != pyramids.len() {
        return Err(Error::Shape { op: "cascade views", lhs: vec![cameras.len()], rhs: vec![pyramids.len()] });
    }
    let target = cameras[reference];
    let mut out: Vec<FeatureVolume> = Vec::with_capacity(STAGES);
    for stage in 0..STAGES {
        let level_maps: Vec<SweepView> = cameras.iter().zip(pyramids).map(|(c, p)| SweepView { camera: c, features: &p[stage] }).collect();
        let (w, h) = (pyramids[reference][stage].width, pyramids[reference][stage].height);
        let planes = match out.last() {
            None => match (config.dgps, guide) {
                (true, Some(g)) => {
                    let factor = g.depth.width / w;
                    let (d, m) = downsample_inverse_depth(g.depth, g.mask, factor);
                    planes_dgps(&d, &m, config.planes[0], config.guide_range, near, far)?
                }
                _ => planes_uniform(near, far, config.planes[0], w, h)?,
            },
            Some(prev) => refine_planes(prev, w, h, config.planes[stage], near, far),
        };
        let cost = sweep(&level_maps, target, &planes)?;
        let cam = camera_at(target, w, h)?;
        out.push(regularize(&cost, &planes, cam, config.tau, config.smoothing_sigma)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{apply_homography, plane_homography, Intrinsics, Pose};
    use nalgebra::Vector2;

    fn cam(x: f64) -> Camera {
        let k = Intrinsics::new(20.0, 20.0, 8.0, 6.0, 16, 12).unwrap();
        Camera::new(k, Pose::new(Matrix3::identity(), Vector3::new(x, 0.0, 0.0)).unwrap())
    }

    #[test]
    fn uniform_planes_are_cell_midpoints() {
        let s = planes_uniform(1.0, 4.0, 48, 2, 2).unwrap();
        assert!((s.interval[0] - 0.0625).abs() < 1e-15);
        assert!((s.depth(0, 0) - 1.03125).abs() < 1e-15);
        let two = planes_uniform(1.0, 3.0, 2, 1, 1).unwrap();
        assert_eq!(two.depths(0), vec![1.5, 2.5]);
        assert!(planes_uniform(1.0, 1.0, 4, 1, 1).is_err());
    }

    #[test]
    fn guided_planes_span_the_relative_range() {
        let guide = ScalarMap { width: 2, height: 1, data: vec![2.0, 2.0] };
        let mask = ScalarMap { width: 2, height: 1, data: vec![1.0, 0.0] };
        let s = planes_dgps(&guide, &mask, 48, GuideRange::Relative(0.1), 1.0, 4.0).unwrap();
        assert!((s.lo[0] - 1.8).abs() < 1e-12);
        assert!((s.interval[0] - 0.4 / 48.0).abs() < 1e-15);
        assert!(s.guided[0] && !s.guided[1]);
        assert!((s.interval[1] - 0.0625).abs() < 1e-15);
        let a = planes_dgps(&guide, &mask, 8, GuideRange::Absolute(0.2), 1.0, 4.0).unwrap();
        assert!((a.lo[0] - 1.8).abs() < 1e-12);
        assert!(planes_dgps(&guide, &mask, 8, GuideRange::Relative(1.5), 1.0, 4.0).is_err());
    }

    #[test]
    fn transfer_matches_plane_homography() {
        let a = cam(0.0);
        let b = Camera::new(
            a.intrinsics,
            Pose::look_at(Vector3::new(0.3, -0.1, 0.05), Vector3::new(0.0, 0.0, 3.0), Vector3::new(0.0, -1.0, 0.0)).unwrap(),
        );
        let h = plane_homography(&b, &a, 2.5).unwrap();
        let t = Transfer::new(&a, &b);
        let kinv = a.intrinsics.inverse_matrix();
        for (x, y) in [(0.5, 0.5), (7.25, 3.0), (15.5, 11.5)] {
            let n = kinv * Vector3::new(x, y, 1.0);
            let (u, v) = t.apply(&n, 2.5).unwrap();
            let q = apply_homography(&h, &Vector2::new(x, y));
            assert!((u - q.x).abs() < 1e-9 && (v - q.y).abs() < 1e-9);
        }
    }

    #[test]
    fn colocated_identical_views_have_zero_variance() {
        let c = cam(0.0);
        let f = FeatureMap { width: 16, height: 12, channels: 2, data: (0..16 * 12 * 2).map(|i| (i % 7) as f64).collect() };
        let views = [SweepView { camera: &c, features: &f }, SweepView { camera: &c, features: &f }];
        let planes = planes_uniform(1.0, 4.0, 6, 16, 12).unwrap();
        let cv = sweep(&views, &c, &planes).unwrap();
        assert!(cv.data.iter().all(|&v| v.abs() < 1e-12));
        assert!(cv.views.iter().all(|&n| n == 2));
        assert!(matches!(sweep(&views[..1], &c, &planes), Err(Error::Contract(_))));
    }

    fn volume_from_costs(costs: &[f64], planes: PlaneSet, tau: f64) -> FeatureVolume {
        let m = planes.count;
        let cv = CostVolume { width: 1, height: 1, count: m, channels: 1, data: costs.to_vec(), views: vec![2; m] };
        regularize(&cv, &planes, cam(0.0), tau, 0.0).unwrap()
    }

    #[test]
    fn softargmin_picks_the_cheapest_plane_when_sharp() {
        let planes = planes_uniform(1.0, 4.0, 6, 1, 1).unwrap();
        let mut costs = vec![1.0; 6];
        costs[2] = 0.0;
        let v = volume_from_costs(&costs, planes.clone(), 1e-3);
        assert!((v.depth.data[0] - planes.depth(0, 2)).abs() < 1e-9);
    }

    #[test]
    fn symmetric_tie_gives_the_midpoint() {
        let planes = planes_uniform(1.0, 4.0, 6, 1, 1).unwrap();
        let costs = [5.0, 0.0, 5.0, 5.0, 0.0, 5.0];
        let v = volume_from_costs(&costs, planes.clone(), 0.01);
        let mid = 0.5 * (planes.depth(0, 1) + planes.depth(0, 4));
        assert!((v.depth.data[0] - mid).abs() < 1e-9);
        assert!((v.probability(0).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn volume_lookup_at_voxel_centers_is_exact() {
        let planes = planes_uniform(1.0, 4.0, 6, 1, 1).unwrap();
        let costs = [3.0, 1.0, 0.5, 2.0, 4.0, 6.0];
        let v = volume_from_costs(&costs, planes.clone(), 1.0);
        let mut out = vec![0.0; 3];
        for i in 0..6 {
            assert!(v.sample_into(0.5, 0.5, planes.depth(0, i), &mut out));
            assert!((out[0] - costs[i]).abs() < 1e-12);
            assert!((out[1] - v.probability(0)[i]).abs() < 1e-12);
            let below: f64 = v.probability(0)[..i].iter().sum();
            assert!((out[2] - (below + 0.5 * v.probability(0)[i])).abs() < 1e-12);
        }
        v.sample_into(0.5, 0.5, 0.5, &mut out);
        assert_eq!((out[1], out[2]), (0.0, 0.0));
        v.sample_into(0.5, 0.5, 9.0, &mut out);
        assert_eq!(out[1], 0.0);
        assert!((out[2] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn refined_planes_halve_the_interval() {
        let planes = planes_uniform(1.0, 4.0, 8, 2, 2).unwrap();
        let cv = CostVolume {
            width: 2,
            height: 2,
            count: 8,
            channels: 1,
            data: (0..32).map(|i| ((i % 8) as f64 - 3.0).abs()).collect(),
            views: vec![2; 32],
        };
        let v = regularize(&cv, &planes, cam(0.0), 0.5, 1.0).unwrap();
        let next = refine_planes(&v, 4, 4, 4, 1.0, 4.0);
        for p in 0..16 {
            assert_eq!(next.interval[p], planes.interval[0] / 2.0);
            let ds = next.depths(p);
            assert!(ds.windows(2).all(|w| w[1] > w[0]));
            assert!(ds[0] >= 1.0 && ds[3] <= 4.0);
        }
    }

    #[test]
    fn inverse_depth_downsampling_is_harmonic() {
        let d = ScalarMap { width: 2, height: 2, data: vec![1.0, 2.0, 4.0, 4.0] };
        let m = ScalarMap::new(2, 2, 1.0);
        let (ds, ms) = downsample_inverse_depth(&d, &m, 2);
        assert!((ds.data[0] - 4.0 / (1.0 + 0.5 + 0.25 + 0.25)).abs() < 1e-12);
        assert_eq!(ms.data[0], 1.0);
        let sparse = ScalarMap { width: 2, height: 2, data: vec![1.0, 0.0, 0.0, 0.0] };
        assert_eq!(downsample_inverse_depth(&d, &sparse, 2).1.data[0], 0.0);
    }
}
