//! Ray sampling, multi-view feature gathering, the renderer network and
//! volume compositing of color and depth.
//!
//! Sample depths are camera z-depths of the rendering camera, so a sample at
//! depth `t` lies on the fronto-parallel plane `z = t`.

use nalgebra::{DMatrix, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::costvol::FeatureVolume;
use crate::diff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::features::{FeatureMap, FEATURE_CHANNELS};
use crate::geometry::{Camera, Ray};
use crate::image::{bilinear_cell, RgbImage};

/// Samples per ray.
pub const DEFAULT_SAMPLES: usize = 32;
pub const HIDDEN: usize = 32;
const BLEND_HIDDEN: usize = 8;
/// Floor of the opacity normalizing rendered depth.
pub const DEPTH_EPS: f64 = 1e-8;
/// Logit offset that removes invalid views from the blending softmax.
const INVALID_LOGIT: f64 = -1e30;

const VOLUME_STAGES: usize = 3;
const VOLUME_SAMPLE: usize = FEATURE_CHANNELS + 2;
/// Per-view gathered features: three volume lookups, image feature, RGB.
pub const VIEW_FEATURES: usize = VOLUME_STAGES * VOLUME_SAMPLE + FEATURE_CHANNELS + 3;
/// Network input: masked mean and variance over views plus visible fraction.
pub const POOLED_FEATURES: usize = 2 * VIEW_FEATURES + 1;
/// Per-view inputs of the blending head (deviation from the view mean).
pub const BLEND_FEATURES: usize = 3 + FEATURE_CHANNELS + 4;

/// Depths along one ray.
#[derive(Debug, Clone, PartialEq)]
pub struct RaySamples {
    pub t: Vec<f64>,
    pub points: Vec<Vector3<f64>>,
    pub delta: Vec<f64>,
}

/// Stratified depths in `[near, far]`: cell midpoints, or one uniform draw
/// per cell when `jitter` is given.
pub fn sample_depths(near: f64, far: f64, count: usize, jitter: Option<&mut ChaCha8Rng>) -> Result<Vec<f64>> {
    if count < 2 || !(near > 0.0 && far > near) {
        return Err(Error::InvalidInput(format!("ray sampling needs ≥ 2 samples and 0 < near < far (got {count}, {near}, {far})")));
    }
    let step = (far - near) / count as f64;
    Ok(match jitter {
        None => (0..count).map(|i| near + (i as f64 + 0.5) * step).collect(),
        Some(rng) => (0..count).map(|i| near + (i as f64 + rng.gen::<f64>()) * step).collect(),
    })
}

/// Samples `ray` at camera depths; `forward` is the rendering camera's
/// optical axis.
pub fn sample_ray(
    ray: &Ray,
    forward: &Vector3<f64>,
    near: f64,
    far: f64,
    count: usize,
    jitter: Option<&mut ChaCha8Rng>,
) -> Result<RaySamples> {
    let t = sample_depths(near, far, count, jitter)?;
    let cos = ray.direction.dot(forward);
    if !(cos > 1e-9) {
        return Err(Error::InvalidInput("ray points away from the camera axis".into()));
    }
    let points = t.iter().map(|&z| ray.origin + ray.direction * (z / cos)).collect();
    Ok(RaySamples { delta: deltas(&t, far), t, points })
}

fn deltas(t: &[f64], far: f64) -> Vec<f64> {
    (0..t.len()).map(|i| if i + 1 < t.len() { t[i + 1] - t[i] } else { far - t[i] }).collect()
}

/// Replaces a volume's smoothed costs by `ln(1 + cost)`. Costs span orders
/// of magnitude; render sources expect compressed volumes.
pub fn compress_volume_costs(vol: &mut FeatureVolume) {
    for c in &mut vol.features {
        *c = c.max(0.0).ln_1p();
    }
}

/// Everything a source image contributes to rendering.
#[derive(Debug, Clone, Copy)]
pub struct RenderSource<'a> {
    pub camera: Camera,
    pub image: &'a RgbImage,
    /// Finest-level feature map.
    pub features: &'a FeatureMap,
    /// Cascade volumes, coarse to fine, after [`compress_volume_costs`].
    pub volumes: &'a [FeatureVolume],
}

/// Writes one view's gathered features for world point `p` into `out`
/// (length [`VIEW_FEATURES`]). Returns false when the point is behind the
/// camera or projects outside the image.
pub fn gather_view(src: &RenderSource<'_>, p: &Vector3<f64>, out: &mut [f64]) -> bool {
    let pc = src.camera.pose.world_to_camera(p);
    if pc.z <= 1e-9 {
        return false;
    }
    let k = &src.camera.intrinsics;
    let u = k.fx * pc.x / pc.z + k.cx;
    let v = k.fy * pc.y / pc.z + k.cy;
    if bilinear_cell(u, v, k.width, k.height).is_none() {
        return false;
    }
    for (s, vol) in src.volumes.iter().enumerate() {
        let sx = vol.width() as f64 / k.width as f64;
        let sy = vol.height() as f64 / k.height as f64;
        let vu = (u * sx).clamp(0.5, vol.width() as f64 - 0.5);
        let vv = (v * sy).clamp(0.5, vol.height() as f64 - 0.5);
        vol.sample_into(vu, vv, pc.z, &mut out[s * VOLUME_SAMPLE..(s + 1) * VOLUME_SAMPLE]);
    }
    let img_off = VOLUME_STAGES * VOLUME_SAMPLE;
    src.features.sample_into(u, v, &mut out[img_off..img_off + FEATURE_CHANNELS]);
    let rgb = src.image.sample(u, v).expect("inside hull");
    out[img_off + FEATURE_CHANNELS..img_off + FEATURE_CHANNELS + 3].copy_from_slice(&rgb);
    true
}

/// Gathered, pooled inputs for a batch of rays. Sample `n` of ray `r` is
/// row `r * samples + n`; view-indexed arrays add a trailing view axis.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleBatch {
    pub rays: usize,
    pub samples: usize,
    pub views: usize,
    pub t: Vec<f64>,
    pub delta: Vec<f64>,
    /// `[rays·samples, POOLED_FEATURES]`.
    pub pooled: Vec<f64>,
    /// `[rays·samples·views, BLEND_FEATURES]`.
    pub blend: Vec<f64>,
    /// `[3][rays·samples·views]`.
    pub rgb: [Vec<f64>; 3],
    /// `[rays·samples·views]`.
    pub visible: Vec<bool>,
    /// `[rays·samples]`: at least one view sees the sample.
    pub any_visible: Vec<bool>,
}

fn blend_indices() -> [usize; BLEND_FEATURES] {
    let img = VOLUME_STAGES * VOLUME_SAMPLE;
    let mut idx = [0; BLEND_FEATURES];
    for c in 0..3 {
        idx[c] = img + FEATURE_CHANNELS + c;
    }
    for c in 0..FEATURE_CHANNELS {
        idx[3 + c] = img + c;
    }
    // Probability and cdf of the coarsest and finest stage.
    idx[3 + FEATURE_CHANNELS] = FEATURE_CHANNELS;
    idx[3 + FEATURE_CHANNELS + 1] = FEATURE_CHANNELS + 1;
    idx[3 + FEATURE_CHANNELS + 2] = 2 * VOLUME_SAMPLE + FEATURE_CHANNELS;
    idx[3 + FEATURE_CHANNELS + 3] = 2 * VOLUME_SAMPLE + FEATURE_CHANNELS + 1;
    idx
}

/// One ray to render: the ray and the rendering camera's optical axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RayQuery {
    pub ray: Ray,
    pub forward: Vector3<f64>,
}

impl RayQuery {
    pub fn pixel(camera: &Camera, x: usize, y: usize) -> Self {
        Self { ray: camera.pixel_center_ray(x, y), forward: camera.pose.forward() }
    }
}

/// Gathered rows of one ray.
struct RayRows {
    pooled: Vec<f64>,
    blend: Vec<f64>,
    rgb: [Vec<f64>; 3],
    visible: Vec<bool>,
    any_visible: Vec<bool>,
}

fn gather_ray(points: &[Vector3<f64>], sources: &[RenderSource<'_>]) -> RayRows {
    let (s, v) = (points.len(), sources.len());
    let mut rows = RayRows {
        pooled: vec![0.0; s * POOLED_FEATURES],
        blend: vec![0.0; s * v * BLEND_FEATURES],
        rgb: [vec![0.0; s * v], vec![0.0; s * v], vec![0.0; s * v]],
        visible: vec![false; s * v],
        any_visible: vec![false; s],
    };
    let bidx = blend_indices();
    let mut feats = vec![0.0; v * VIEW_FEATURES];
    for (row, p) in points.iter().enumerate() {
        let mut count = 0usize;
        for (vi, src) in sources.iter().enumerate() {
            let f = &mut feats[vi * VIEW_FEATURES..(vi + 1) * VIEW_FEATURES];
            let ok = gather_view(src, p, f);
            rows.visible[row * v + vi] = ok;
            if ok {
                count += 1;
                for c in 0..3 {
                    rows.rgb[c][row * v + vi] = f[VOLUME_STAGES * VOLUME_SAMPLE + FEATURE_CHANNELS + c];
                }
            }
        }
        if count == 0 {
            continue;
        }
        rows.any_visible[row] = true;
        let inv = 1.0 / count as f64;
        let visible = &rows.visible[row * v..(row + 1) * v];
        let pooled = &mut rows.pooled[row * POOLED_FEATURES..(row + 1) * POOLED_FEATURES];
        for vi in (0..v).filter(|&vi| visible[vi]) {
            for (k, x) in feats[vi * VIEW_FEATURES..(vi + 1) * VIEW_FEATURES].iter().enumerate() {
                pooled[k] += x * inv;
            }
        }
        for vi in (0..v).filter(|&vi| visible[vi]) {
            for k in 0..VIEW_FEATURES {
                let d = feats[vi * VIEW_FEATURES + k] - pooled[k];
                pooled[VIEW_FEATURES + k] += d * d * inv;
            }
            let b = &mut rows.blend[(row * v + vi) * BLEND_FEATURES..(row * v + vi + 1) * BLEND_FEATURES];
            for (j, &k) in bidx.iter().enumerate() {
                b[j] = feats[vi * VIEW_FEATURES + k] - pooled[k];
            }
        }
        pooled[2 * VIEW_FEATURES] = count as f64 / v as f64;
    }
    rows
}

/// Samples and gathers a batch. Jitter is drawn ray by ray in order, then
/// rays are gathered in parallel, so the result does not depend on the
/// thread count.
pub fn prepare_batch(
    queries: &[RayQuery],
    sources: &[RenderSource<'_>],
    near: f64,
    far: f64,
    samples: usize,
    mut jitter: Option<&mut ChaCha8Rng>,
) -> Result<SampleBatch> {
    if sources.is_empty() {
        return Err(Error::InvalidInput("rendering needs at least one source view".into()));
    }
    let (r, s, v) = (queries.len(), samples, sources.len());
    let n = r * s;
    let rays = queries.iter().map(|q| sample_ray(&q.ray, &q.forward, near, far, s, jitter.as_deref_mut())).collect::<Result<Vec<_>>>()?;
    let gathered: Vec<RayRows> = rays.par_iter().map(|rs| gather_ray(&rs.points, sources)).collect();
    let mut batch = SampleBatch {
        rays: r,
        samples: s,
        views: v,
        t: Vec::with_capacity(n),
        delta: Vec::with_capacity(n),
        pooled: Vec::with_capacity(n * POOLED_FEATURES),
        blend: Vec::with_capacity(n * v * BLEND_FEATURES),
        rgb: [Vec::with_capacity(n * v), Vec::with_capacity(n * v), Vec::with_capacity(n * v)],
        visible: Vec::with_capacity(n * v),
        any_visible: Vec::with_capacity(n),
    };
    for (rs, g) in rays.iter().zip(gathered) {
        batch.t.extend_from_slice(&rs.t);
        batch.delta.extend_from_slice(&rs.delta);
        batch.pooled.extend(g.pooled);
        batch.blend.extend(g.blend);
        for c in 0..3 {
            batch.rgb[c].extend_from_slice(&g.rgb[c]);
        }
        batch.visible.extend(g.visible);
        batch.any_visible.extend(g.any_visible);
    }
    Ok(batch)
}

/// Names and shapes of the trainable tensors for hidden width `hidden`,
/// in checkpoint order.
pub fn param_specs(hidden: usize) -> Vec<(&'static str, [usize; 2])> {
    vec![
        ("hidden1.weight", [POOLED_FEATURES, hidden]),
        ("hidden1.bias", [1, hidden]),
        ("hidden2.weight", [hidden, hidden]),
        ("hidden2.bias", [1, hidden]),
        ("density.weight", [hidden, 1]),
        ("density.bias", [1, 1]),
        ("blend.view_weight", [BLEND_FEATURES, BLEND_HIDDEN]),
        ("blend.context_weight", [hidden, BLEND_HIDDEN]),
        ("blend.bias", [1, BLEND_HIDDEN]),
        ("blend.out", [BLEND_HIDDEN, 1]),
    ]
}
const DENSITY_BIAS_INIT: f64 = -1.0;

/// Renderer sizes.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RendererConfig {
    /// Samples per ray.
    pub samples: usize,
    /// Width of both hidden layers.
    pub hidden: usize,
}

impl Default for RendererConfig {
    fn default() -> Self {
        Self { samples: DEFAULT_SAMPLES, hidden: HIDDEN }
    }
}

impl RendererConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples < 2 || self.hidden == 0 {
            return Err(Error::Config("renderer needs ≥ 2 samples and a non-zero hidden width".into()));
        }
        Ok(())
    }
}

/// The trainable renderer: an aggregation MLP over pooled view features
/// with a density head and a per-view blending head.
#[derive(Debug, Clone, PartialEq)]
pub struct RendererNet {
    pub params: Vec<Tensor>,
}

fn orthogonal(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let n = rows.max(cols);
    let a = DMatrix::from_fn(n, n, |_, _| rng.sample::<f64, _>(StandardNormal));
    let qr = a.qr();
    let (mut q, r) = (qr.q(), qr.r());
    for j in 0..n {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    let mut data = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        for j in 0..cols {
            data.push(q[(i, j)]);
        }
    }
    Tensor::matrix(rows, cols, data).expect("sized")
}

impl RendererNet {
    /// Orthogonal weights (gain 1), zero biases, density bias −1.
    pub fn new(seed: u64, hidden: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = param_specs(hidden)
            .iter()
            .map(|(name, [r, c])| {
                if name.ends_with("bias") {
                    let fill = if *name == "density.bias" { DENSITY_BIAS_INIT } else { 0.0 };
                    Tensor::full(&[*r, *c], fill)
                } else {
                    orthogonal(*r, *c, &mut rng)
                }
            })
            .collect();
        Self { params }
    }

    pub fn from_params(params: Vec<Tensor>) -> Result<Self> {
        let specs = match params.first() {
            Some(t) if t.shape().len() == 2 => param_specs(t.shape()[1]),
            _ => return Err(Error::InvalidInput("renderer needs a 2-D first weight".into())),
        };
        if params.len() != specs.len() {
            return Err(Error::InvalidInput(format!("renderer expects {} tensors, got {}", specs.len(), params.len())));
        }
        for (t, (name, shape)) in params.iter().zip(specs.iter()) {
            if t.shape() != shape {
                return Err(Error::Shape { op: name, lhs: shape.to_vec(), rhs: t.shape().to_vec() });
            }
        }
        Ok(Self { params })
    }

    pub fn hidden(&self) -> usize {
        self.params[0].shape()[1]
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Registers every tensor as a trainable leaf.
    pub fn vars<'t>(&self, tape: &'t Tape) -> Vec<Var<'t>> {
        self.params.iter().map(|p| tape.param(p.clone())).collect()
    }

    /// Registers every tensor as a constant (inference).
    pub fn constants<'t>(&self, tape: &'t Tape) -> Vec<Var<'t>> {
        self.params.iter().map(|p| tape.constant(p.clone())).collect()
    }
}

/// Rendered quantities of a batch on the tape.
pub struct RenderOutput<'t> {
    /// Per channel, shape `[rays]`.
    pub color: [Var<'t>; 3],
    pub depth: Var<'t>,
    pub opacity: Var<'t>,
    /// `[rays, samples]`.
    pub weights: Var<'t>,
    /// `[rays, samples]`.
    pub sigma: Var<'t>,
}

fn affine<'t>(x: Var<'t>, w: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    let y = x.matmul(w)?;
    let shape = y.shape();
    y.add(b.broadcast_to(&shape)?)
}

/// Network and compositing for a prepared batch. `params` follows
/// [`param_specs`].
pub fn forward<'t>(tape: &'t Tape, params: &[Var<'t>], batch: &SampleBatch) -> Result<RenderOutput<'t>> {
    let (r, s, v) = (batch.rays, batch.samples, batch.views);
    let n = r * s;
    let pooled = tape.constant(Tensor::new(vec![n, POOLED_FEATURES], batch.pooled.clone())?);
    let h1 = affine(pooled, params[0], params[1])?.softplus()?;
    let h2 = affine(h1, params[2], params[3])?.softplus()?;
    let any = tape.constant(Tensor::new(vec![r, s], batch.any_visible.iter().map(|&b| f64::from(b)).collect())?);
    let sigma = affine(h2, params[4], params[5])?.softplus()?.reshape(&[r, s])?.mul(any)?;

    // Blending weights over views.
    let blend_in = tape.constant(Tensor::new(vec![n * v, BLEND_FEATURES], batch.blend.clone())?);
    let rows: Vec<usize> = (0..n * v).map(|i| i / v).collect();
    let context = h2.matmul(params[7])?.index_rows(&rows)?;
    let pre = affine(blend_in, params[6], params[8])?.add(context)?.relu()?;
    let mask = tape.constant(Tensor::new(vec![n, v], batch.visible.iter().map(|&b| if b { 0.0 } else { INVALID_LOGIT }).collect())?);
    let logits = pre.matmul(params[9])?.reshape(&[n, v])?.add(mask)?;
    let blend = logits.softmax(1)?;

    // Compositing.
    let delta = tape.constant(Tensor::new(vec![r, s], batch.delta.clone())?);
    let t = tape.constant(Tensor::new(vec![r, s], batch.t.clone())?);
    let sd = sigma.mul(delta)?;
    let trans = sd.cumsum_exclusive(1)?.scale(-1.0)?.exp()?;
    let alpha = sd.scale(-1.0)?.exp()?.scale(-1.0)?.add_scalar(1.0)?;
    let weights = trans.mul(alpha)?;
    let mut color = Vec::with_capacity(3);
    for c in 0..3 {
        let rgb = tape.constant(Tensor::new(vec![n, v], batch.rgb[c].clone())?);
        let sample_color = blend.mul(rgb)?.sum_axis(1)?.reshape(&[r, s])?;
        color.push(weights.mul(sample_color)?.sum_axis(1)?);
    }
    let opacity = weights.sum_axis(1)?;
    let depth = weights.mul(t)?.sum_axis(1)?.mul(opacity.clamp_min(DEPTH_EPS)?.recip()?)?;
    Ok(RenderOutput { color: [color[0], color[1], color[2]], depth, opacity, weights, sigma })
}

/// Composited values of one ray.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedPixel {
    pub color: [f64; 3],
    pub depth: f64,
    pub opacity: f64,
    pub weights: Vec<f64>,
}

/// Plain compositing of per-sample colors and densities.
pub fn composite(colors: &[[f64; 3]], sigma: &[f64], t: &[f64], delta: &[f64]) -> Result<RenderedPixel> {
    let n = sigma.len();
    if colors.len() != n || t.len() != n || delta.len() != n {
        return Err(Error::Shape { op: "composite", lhs: vec![n], rhs: vec![colors.len(), t.len(), delta.len()] });
    }
    if sigma.iter().any(|&s| !(s >= 0.0)) {
        return Err(Error::InvalidInput("densities must be non-negative".into()));
    }
    let mut trans = 1.0;
    let mut px = RenderedPixel { color: [0.0; 3], depth: 0.0, opacity: 0.0, weights: Vec::with_capacity(n) };
    let mut num = 0.0;
    let mut acc = 0.0;
    for i in 0..n {
        let sd = sigma[i] * delta[i];
        let w = trans * (1.0 - (-sd).exp());
        acc += sd;
        trans = (-acc).exp();
        for c in 0..3 {
            px.color[c] += w * colors[i][c];
        }
        num += w * t[i];
        px.opacity += w;
        px.weights.push(w);
    }
    px.depth = num / px.opacity.max(DEPTH_EPS);
    Ok(px)
}

/// Inference for a batch: values copied off the tape.
pub fn render_batch(net: &RendererNet, batch: &SampleBatch) -> Result<Vec<RenderedPixel>> {
    let tape = Tape::new();
    let params = net.constants(&tape);
    let out = forward(&tape, &params, batch)?;
    let (r, s) = (batch.rays, batch.samples);
    let col: Vec<Vec<f64>> = out.color.iter().map(|c| c.value().data().to_vec()).collect();
    let depth = out.depth.value().data().to_vec();
    let opacity = out.opacity.value().data().to_vec();
    let w = out.weights.value().data().to_vec();
    Ok((0..r)
        .map(|i| RenderedPixel {
            color: [col[0][i], col[1][i], col[2][i]],
            depth: depth[i],
            opacity: opacity[i],
            weights: w[i * s..(i + 1) * s].to_vec(),
        })
        .collect())
}

/// Renders one ray.
pub fn render_pixel(
    query: &RayQuery,
    sources: &[RenderSource<'_>],
    net: &RendererNet,
    near: f64,
    far: f64,
    samples: usize,
) -> Result<RenderedPixel> {
    let batch = prepare_batch(std::slice::from_ref(query), sources, near, far, samples, None)?;
    Ok(render_batch(net, &batch)?.remove(0))
}

/// Rays per chunk when rendering whole images.
const CHUNK: usize = 512;

/// Renders a full image from `camera`: color, depth and opacity maps.
pub fn render_image(
    camera: &Camera,
    sources: &[RenderSource<'_>],
    net: &RendererNet,
    near: f64,
    far: f64,
    samples: usize,
) -> Result<(RgbImage, crate::image::ScalarMap, crate::image::ScalarMap)> {
    let k = &camera.intrinsics;
    let (w, h) = (k.width, k.height);
    let queries: Vec<RayQuery> = (0..h).flat_map(|y| (0..w).map(move |x| (x, y))).map(|(x, y)| RayQuery::pixel(camera, x, y)).collect();
    let mut img = RgbImage::new(w, h, [0.0; 3]);
    let mut depth = crate::image::ScalarMap::new(w, h, 0.0);
    let mut opacity = crate::image::ScalarMap::new(w, h, 0.0);
    for (ci, chunk) in queries.chunks(CHUNK).enumerate() {
        let batch = prepare_batch(chunk, sources, near, far, samples, None)?;
        for (j, px) in render_batch(net, &batch)?.into_iter().enumerate() {
            let i = ci * CHUNK + j;
            img.data[i] = px.color;
            depth.data[i] = px.depth;
            opacity.data[i] = px.opacity;
        }
    }
    Ok((img, depth, opacity))
}
