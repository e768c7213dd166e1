//! Training loop, checkpoints, evaluation and the ablation ladder.
//!
//! Iteration `i` draws everything from a ChaCha8 stream keyed by
//! `(seed, i)`, so a run resumed from a checkpoint replays the same
//! iterations as an uninterrupted one.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::PipelineConfig;
use crate::dataset::Dataset;
use crate::diff::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::geometry::{Camera, Eye};
use crate::image::{RgbImage, ScalarMap};
use crate::losses::{color_loss, ray_depth_loss, self_depth_loss, total_loss, total_loss_var, LossParts};
use crate::metrics::{constant_mean_psnr, depth_errors, psnr, ssim, MetricsReport, ViewMetrics};
use crate::render::{forward, param_specs, prepare_batch, render_batch, render_image, RayQuery, RendererNet};
use crate::scene::SceneState;
use crate::stereo::{calibrate, DisparityCalibration};

/// Ablation switches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Toggles {
    /// Stereo attention between the eyes.
    pub sam: bool,
    /// Matcher cost features inside the attention.
    pub correlated_features: bool,
    /// Stereo-guided stage-0 planes.
    pub dgps: bool,
    /// The stereo depth loss terms.
    pub stereo_loss: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Self { sam: true, correlated_features: true, dgps: true, stereo_loss: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    pub rays_per_batch: usize,
    pub learning_rate: f64,
    /// Learning rate reached at the last iteration.
    pub lr_floor: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Stereo pairs rendered from per target.
    pub source_pairs: usize,
    /// Iterations between disparity calibration refits; 0 disables them.
    pub calibration_interval: usize,
    /// Views never trained on.
    pub held_out: Vec<usize>,
    pub toggles: Toggles,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            rays_per_batch: 512,
            learning_rate: 5e-4,
            lr_floor: 0.0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            source_pairs: 3,
            calibration_interval: 500,
            held_out: vec![3],
            toggles: Toggles::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.rays_per_batch == 0 || self.source_pairs == 0 {
            return bad("rays_per_batch and source_pairs must be positive");
        }
        if !(self.learning_rate > 0.0) || !(self.lr_floor >= 0.0 && self.lr_floor <= self.learning_rate) {
            return bad("need learning_rate > 0 and 0 ≤ lr_floor ≤ learning_rate");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || !(self.adam_eps > 0.0) {
            return bad("Adam betas must lie in [0, 1) and eps be positive");
        }
        Ok(())
    }
}

/// Cosine annealing from `lr0` at step 0 to `floor` at step `total`.
pub fn cosine_lr(step: usize, total: usize, lr0: f64, floor: f64) -> f64 {
    if total == 0 {
        return lr0;
    }
    let x = step.min(total) as f64 / total as f64;
    floor + 0.5 * (lr0 - floor) * (1.0 + (std::f64::consts::PI * x).cos())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl Adam {
    pub fn new(params: &[Tensor]) -> Self {
        Self {
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            step: 0,
        }
    }

    pub fn update(&mut self, params: &mut [Tensor], grads: &[Tensor], lr: f64, b1: f64, b2: f64, eps: f64) {
        self.step += 1;
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        for (k, p) in params.iter_mut().enumerate() {
            let g = grads[k].data();
            let m = self.m[k].data_mut();
            for (mi, gi) in m.iter_mut().zip(g) {
                *mi = b1 * *mi + (1.0 - b1) * gi;
            }
            let v = self.v[k].data_mut();
            for (vi, gi) in v.iter_mut().zip(g) {
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
            }
            let (m, v) = (self.m[k].data(), self.v[k].data());
            for (i, w) in p.data_mut().iter_mut().enumerate() {
                *w -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
            }
        }
    }
}

/// Trained state plus everything needed to resume.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: PipelineConfig,
    /// Iterations completed.
    pub iteration: usize,
    pub net: RendererNet,
    pub adam: Adam,
    pub calibration: DisparityCalibration,
}

const MAGIC: &[u8; 4] = b"SNVK";
const FORMAT_VERSION: u32 = 1;

impl Checkpoint {
    pub fn initial(config: &PipelineConfig) -> Self {
        let net = RendererNet::new(config.seed, config.renderer.hidden);
        Self { config: config.clone(), iteration: 0, adam: Adam::new(&net.params), net, calibration: DisparityCalibration::identity() }
    }

    fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let specs = param_specs(self.net.hidden());
        let mut out = Vec::new();
        for (k, (name, _)) in specs.iter().enumerate() {
            out.push((name.to_string(), self.net.params[k].clone()));
        }
        for (k, (name, _)) in specs.iter().enumerate() {
            out.push((format!("adam.m.{name}"), self.adam.m[k].clone()));
            out.push((format!("adam.v.{name}"), self.adam.v[k].clone()));
        }
        out.push(("state.iteration".into(), Tensor::vector(vec![self.iteration as f64])));
        out.push(("state.adam_step".into(), Tensor::vector(vec![self.adam.step as f64])));
        let c = &self.calibration;
        out.push(("state.calibration".into(), Tensor::vector(vec![c.scale, c.offset, f64::from(c.fallback)])));
        out
    }

    /// Little-endian: magic, version (u32), config JSON (u64 length +
    /// bytes), tensor count (u32), then per tensor name length (u32), name,
    /// rank (u32), dims (u64 each) and f64 data.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(MAGIC);
        b.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let json = serde_json::to_string(&self.config).expect("config serializes");
        b.extend_from_slice(&(json.len() as u64).to_le_bytes());
        b.extend_from_slice(json.as_bytes());
        let tensors = self.named_tensors();
        b.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for (name, t) in &tensors {
            b.extend_from_slice(&(name.len() as u32).to_le_bytes());
            b.extend_from_slice(name.as_bytes());
            b.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                b.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in t.data() {
                b.extend_from_slice(&x.to_le_bytes());
            }
        }
        b
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { b: bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(fmt_err("bad magic"));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(fmt_err(&format!("unsupported version {version}")));
        }
        let len = r.u64()? as usize;
        let json = std::str::from_utf8(r.take(len)?).map_err(|_| fmt_err("config is not UTF-8"))?;
        let config = PipelineConfig::from_json(json)?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let n = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(n)?).map_err(|_| fmt_err("tensor name is not UTF-8"))?.to_string();
            let rank = r.u32()? as usize;
            let dims = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let len: usize = dims.iter().product();
            let data = (0..len).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            tensors.push((name, Tensor::new(dims, data)?));
        }
        if r.pos != bytes.len() {
            return Err(fmt_err("trailing bytes"));
        }
        let mut get = |name: &str| -> Result<Tensor> {
            let i = tensors.iter().position(|(n, _)| n == name).ok_or_else(|| fmt_err(&format!("missing tensor {name}")))?;
            Ok(tensors.swap_remove(i).1)
        };
        let specs = param_specs(config.renderer.hidden);
        let mut params = Vec::new();
        let mut m = Vec::new();
        let mut v = Vec::new();
        for (name, _) in &specs {
            params.push(get(name)?);
            m.push(get(&format!("adam.m.{name}"))?);
            v.push(get(&format!("adam.v.{name}"))?);
        }
        let net = RendererNet::from_params(params)?;
        let iteration = get("state.iteration")?.data()[0] as usize;
        let step = get("state.adam_step")?.data()[0] as u64;
        let c = get("state.calibration")?;
        let c = c.data();
        if c.len() != 3 {
            return Err(fmt_err("calibration tensor must hold 3 values"));
        }
        Ok(Self {
            config,
            iteration,
            net,
            adam: Adam { m, v, step },
            calibration: DisparityCalibration { scale: c[0], offset: c[1], fallback: c[2] != 0.0 },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn fmt_err(msg: &str) -> Error {
    Error::Format { kind: "checkpoint", msg: msg.to_string() }
}

struct Reader<'a> {
    b: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.b.len()).ok_or_else(|| fmt_err("truncated"))?;
        let s = &self.b[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// One training-log row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub iteration: usize,
    pub parts: LossParts,
    pub total: f64,
    pub lr: f64,
}

impl LogRow {
    pub const CSV_HEADER: &'static str = "iteration,color,stereo_output,mvs,ray,self_depth,total,lr";

    pub fn csv(&self) -> String {
        let p = &self.parts;
        format!("{},{},{},{},{},{},{},{}", self.iteration, p.color, p.stereo_output, p.mvs, p.ray, p.self_depth, self.total, self.lr)
    }
}

fn eye_of(e: usize) -> Eye {
    if e == 0 {
        Eye::Left
    } else {
        Eye::Right
    }
}

/// Training state bound to a dataset.
pub struct Trainer<'d> {
    pub scene: SceneState<'d>,
    pub state: Checkpoint,
}

impl<'d> Trainer<'d> {
    pub fn new(dataset: &'d Dataset, config: &PipelineConfig) -> Result<Self> {
        config.validate()?;
        Self::resume(dataset, Checkpoint::initial(config))
    }

    pub fn resume(dataset: &'d Dataset, state: Checkpoint) -> Result<Self> {
        let scene = SceneState::build(dataset, state.config.scene_options(), state.calibration)?;
        Ok(Self { scene, state })
    }

    fn config(&self) -> &PipelineConfig {
        &self.state.config
    }

    /// Refits the disparity calibration against rendered depth on a fixed
    /// pixel grid of every training image, then rebuilds the stereo-guided
    /// state.
    pub fn refit_calibration(&mut self) -> Result<DisparityCalibration> {
        let cfg = self.config().clone();
        let ds = self.scene.dataset;
        let (near, far) = (ds.near(), ds.far());
        let k = ds.intrinsics();
        let mut samples = Vec::new();
        for &i in &self.scene.training {
            let sources_ids = self.scene.nearest_training(&ds.views[i].camera(Eye::Left), Some(i), cfg.train.source_pairs);
            let sources = self.scene.sources(&sources_ids);
            let view = self.scene.view(i);
            for e in 0..2 {
                let disp = view.matched.sequences[e].last();
                let valid = &view.matched.valid[e];
                let camera = view.eyes[e].camera;
                let pixels: Vec<(usize, usize)> = (0..k.height)
                    .step_by(4)
                    .flat_map(|y| (0..k.width).step_by(4).map(move |x| (x, y)))
                    .filter(|&(x, y)| valid.get(x, y) > 0.5 && disp.get(x, y) > 0.0)
                    .collect();
                if pixels.is_empty() {
                    continue;
                }
                let queries: Vec<RayQuery> = pixels.iter().map(|&(x, y)| RayQuery::pixel(&camera, x, y)).collect();
                let batch = prepare_batch(&queries, &sources, near, far, cfg.renderer.samples, None)?;
                for (px, (x, y)) in render_batch(&self.state.net, &batch)?.iter().zip(&pixels) {
                    if px.opacity > 0.5 {
                        samples.push((disp.get(*x, *y), px.depth));
                    }
                }
            }
        }
        let bf = ds.views[self.scene.training[0]].rig.bf();
        let cal = calibrate(&samples, bf, cfg.losses.beta);
        self.scene.set_calibration(cal)?;
        self.state.calibration = cal;
        Ok(cal)
    }

    /// Runs iteration `state.iteration` and advances. On a non-finite loss
    /// or gradient nothing is updated and a numerical error is returned.
    pub fn step(&mut self) -> Result<LogRow> {
        let cfg = self.config().clone();
        let it = self.state.iteration;
        if cfg.train.calibration_interval > 0 && it > 0 && it.is_multiple_of(cfg.train.calibration_interval) {
            self.refit_calibration()?;
        }
        let ds = self.scene.dataset;
        let (near, far) = (ds.near(), ds.far());
        let k = ds.intrinsics();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(it as u64);

        let target = self.scene.training[rng.gen_range(0..self.scene.training.len())];
        let e = usize::from(rng.gen_bool(0.5));
        let mut pixels: Vec<(usize, usize)> =
            (0..cfg.train.rays_per_batch).map(|_| (rng.gen_range(0..k.width), rng.gen_range(0..k.height))).collect();
        // Row-major order keeps the source lookups cache friendly.
        pixels.sort_unstable_by_key(|&(x, y)| (y, x));
        let source_ids = self.scene.nearest_training(&ds.views[target].camera(eye_of(e)), Some(target), cfg.train.source_pairs);
        let sources = self.scene.sources(&source_ids);
        let view = self.scene.view(target);
        let eye = &view.eyes[e];
        let queries: Vec<RayQuery> = pixels.iter().map(|&(x, y)| RayQuery::pixel(&eye.camera, x, y)).collect();
        let batch = prepare_batch(&queries, &sources, near, far, cfg.renderer.samples, Some(&mut rng))?;

        let image = &ds.views[target].images[e];
        let gt_color: Vec<[f64; 3]> = pixels.iter().map(|&(x, y)| image.get(x, y)).collect();
        let gt_depth: Vec<f64> = pixels.iter().map(|&(x, y)| eye.pseudo_gt.depth.get(x, y)).collect();
        // Rays no source sees have no rendered depth to supervise.
        let seen = |r: usize| batch.any_visible[r * batch.samples..(r + 1) * batch.samples].iter().any(|&b| b);
        let mask: Vec<bool> = pixels.iter().enumerate().map(|(r, &(x, y))| eye.pseudo_gt.mask.get(x, y) > 0.5 && seen(r)).collect();

        let w = cfg.effective_losses();
        let tape = Tape::new();
        let params = self.state.net.vars(&tape);
        let out = forward(&tape, &params, &batch)?;
        let lc = color_loss(&tape, &out.color, &gt_color)?;
        let lr_loss = ray_depth_loss(&tape, out.depth, &gt_depth, &mask, w.beta)?;

        let d_r = out.depth.value().data().to_vec();
        let d_s: Vec<f64> = pixels.iter().map(|&(x, y)| eye.stereo_depth.get(x, y)).collect();
        let d_m: Vec<Vec<f64>> = eye
            .volumes
            .iter()
            .map(|vol| {
                let (sx, sy) = (vol.width() as f64 / k.width as f64, vol.height() as f64 / k.height as f64);
                pixels
                    .iter()
                    .map(|&(x, y)| {
                        let u = ((x as f64 + 0.5) * sx).clamp(0.5, vol.width() as f64 - 0.5);
                        let v = ((y as f64 + 0.5) * sy).clamp(0.5, vol.height() as f64 - 0.5);
                        vol.depth.sample(u, v).expect("clamped inside")
                    })
                    .collect()
            })
            .collect();
        let constant = LossParts {
            color: 0.0,
            stereo_output: source_ids.iter().map(|&i| self.scene.view(i).stereo_loss).sum(),
            mvs: source_ids.iter().map(|&i| self.scene.view(i).mvs_loss).sum(),
            ray: 0.0,
            self_depth: self_depth_loss(&d_s, &d_m, &d_r, w.beta),
        };
        let total = total_loss_var(&tape, lc, lr_loss, &constant, &w)?;
        let parts = LossParts { color: lc.item(), ray: lr_loss.item(), ..constant };
        let total_value = total.item();
        if !total_value.is_finite() {
            return Err(Error::Numerical(format!("non-finite loss {total_value} at iteration {it}")));
        }
        let mut grads = tape.backward(total)?;
        let grads: Vec<Tensor> = params.iter().map(|&p| grads.take(p).unwrap_or_else(|| Tensor::zeros(&p.shape()))).collect();
        if grads.iter().any(|g| !g.all_finite()) {
            return Err(Error::Numerical(format!("non-finite gradient at iteration {it}")));
        }
        let lr = cosine_lr(it, cfg.train.iterations, cfg.train.learning_rate, cfg.train.lr_floor);
        let t = &cfg.train;
        self.state.adam.update(&mut self.state.net.params, &grads, lr, t.adam_beta1, t.adam_beta2, t.adam_eps);
        self.state.iteration += 1;
        debug_assert!((total_loss(&parts, &w) - total_value).abs() <= 1e-9 * total_value.abs().max(1.0));
        Ok(LogRow { iteration: it, parts, total: total_value, lr })
    }
}

/// Outcome of [`train`].
pub struct TrainRun {
    pub checkpoint: Checkpoint,
    pub log: Vec<LogRow>,
}

/// Trains from `start` (or from scratch) up to the configured iteration
/// count. With `out` set, the checkpoint and a CSV log next to it
/// (`<out>.log.csv`) are written; on a numerical failure the last good
/// checkpoint and a diagnostic JSON (`<out>.nan.json`) are written before
/// the error is returned.
pub fn train(dataset: &Dataset, config: &PipelineConfig, start: Option<Checkpoint>, out: Option<&Path>) -> Result<TrainRun> {
    let mut trainer = match start {
        Some(c) => Trainer::resume(dataset, c)?,
        None => Trainer::new(dataset, config)?,
    };
    let total = trainer.state.config.train.iterations;
    let mut log = Vec::with_capacity(total.saturating_sub(trainer.state.iteration));
    while trainer.state.iteration < total {
        match trainer.step() {
            Ok(row) => log.push(row),
            Err(err @ Error::Numerical(_)) => {
                if let Some(path) = out {
                    trainer.state.save(path)?;
                    write_log(&path_with_suffix(path, ".log.csv"), &log)?;
                    let diag = serde_json::json!({
                        "iteration": trainer.state.iteration,
                        "error": err.to_string(),
                        "last_rows": log.iter().rev().take(5).map(LogRow::csv).collect::<Vec<_>>(),
                    });
                    let p = path_with_suffix(path, ".nan.json");
                    std::fs::write(&p, serde_json::to_string_pretty(&diag)?).map_err(|e| Error::io(&p, e))?;
                }
                return Err(err);
            }
            Err(e) => return Err(e),
        }
    }
    if let Some(path) = out {
        trainer.state.save(path)?;
        write_log(&path_with_suffix(path, ".log.csv"), &log)?;
    }
    Ok(TrainRun { checkpoint: trainer.state, log })
}

pub fn path_with_suffix(path: &Path, suffix: &str) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(suffix);
    s.into()
}

pub fn write_log(path: &Path, rows: &[LogRow]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    let mut body = String::from(LogRow::CSV_HEADER);
    body.push('\n');
    for r in rows {
        body.push_str(&r.csv());
        body.push('\n');
    }
    f.write_all(body.as_bytes()).map_err(|e| Error::io(path, e))
}

/// A rendered novel view.
pub struct RenderedView {
    pub image: RgbImage,
    pub depth: ScalarMap,
    pub opacity: ScalarMap,
}

/// Renders `camera` from its nearest training pairs.
pub fn render_novel_view(scene: &SceneState<'_>, net: &RendererNet, camera: &Camera, config: &PipelineConfig) -> Result<RenderedView> {
    let ids = scene.nearest_training(camera, None, config.train.source_pairs);
    let sources = scene.sources(&ids);
    let (image, depth, opacity) = render_image(camera, &sources, net, scene.dataset.near(), scene.dataset.far(), config.renderer.samples)?;
    Ok(RenderedView { image, depth, opacity })
}

/// Per-eye evaluation of one view.
pub struct EyeEvaluation {
    pub view: usize,
    pub eye: Eye,
    pub rendered: RenderedView,
    pub psnr: f64,
    pub ssim: f64,
    pub baseline_psnr: f64,
    pub abs: f64,
    pub are: f64,
    pub rmse: f64,
    /// Mean finest plane interval of the source volumes.
    pub finest_interval: f64,
}

/// Renders both eyes of every listed view and scores them against the
/// dataset's images and exact depth. Depth metrics use pixels whose true
/// depth lies in `[near, far]`.
pub fn evaluate_eyes(scene: &SceneState<'_>, net: &RendererNet, config: &PipelineConfig, views: &[usize]) -> Result<Vec<EyeEvaluation>> {
    let ds = scene.dataset;
    let (near, far) = (ds.near(), ds.far());
    let mut out = Vec::new();
    for &v in views {
        let view = ds.views.get(v).ok_or_else(|| Error::InvalidInput(format!("no view {v}")))?;
        for e in 0..2 {
            let camera = view.camera(eye_of(e));
            let rendered = render_novel_view(scene, net, &camera, config)?;
            let gt = &view.images[e];
            let gt_depth = &view.depths[e];
            let mask = gt_depth.map(|d| f64::from(d >= near && d <= far));
            let de = depth_errors(&rendered.depth, gt_depth, &mask)?;
            let ids = scene.nearest_training(&camera, None, config.train.source_pairs);
            out.push(EyeEvaluation {
                view: v,
                eye: eye_of(e),
                psnr: psnr(&rendered.image, gt)?,
                ssim: ssim(&rendered.image, gt)?,
                baseline_psnr: constant_mean_psnr(gt),
                abs: de.abs,
                are: de.are,
                rmse: de.rmse,
                finest_interval: scene.finest_interval(&ids),
                rendered,
            });
        }
    }
    Ok(out)
}

/// Per-view metrics, averaging the two eyes.
pub fn report_from(evals: &[EyeEvaluation]) -> MetricsReport {
    let mut views: Vec<ViewMetrics> = Vec::new();
    for pair in evals.chunks(2) {
        let n = pair.len() as f64;
        let avg = |f: fn(&EyeEvaluation) -> f64| pair.iter().map(f).sum::<f64>() / n;
        views.push(ViewMetrics {
            view: pair[0].view,
            psnr: avg(|e| e.psnr),
            ssim: avg(|e| e.ssim),
            abs: avg(|e| e.abs),
            are: avg(|e| e.are),
            rmse: avg(|e| e.rmse),
            baseline_psnr: avg(|e| e.baseline_psnr),
        });
    }
    MetricsReport { views }
}

/// Scores a checkpoint on `views` (the held-out views when `None`).
pub fn evaluate(checkpoint: &Checkpoint, dataset: &Dataset, views: Option<&[usize]>) -> Result<MetricsReport> {
    let scene = SceneState::build(dataset, checkpoint.config.scene_options(), checkpoint.calibration)?;
    let held = checkpoint.config.train.held_out.clone();
    let evals = evaluate_eyes(&scene, &checkpoint.net, &checkpoint.config, views.unwrap_or(&held))?;
    Ok(report_from(&evals))
}

/// One ladder row.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub setting: String,
    pub toggles: Toggles,
    pub psnr: f64,
    pub ssim: f64,
    pub abs: f64,
}

/// The cumulative ladder: stereo inputs alone, then attention, correlated
/// features, guided planes and finally the stereo depth loss.
pub fn ladder() -> Vec<(&'static str, Toggles)> {
    let mut t = Toggles { sam: false, correlated_features: false, dgps: false, stereo_loss: false };
    let mut rows = vec![("stereo", t)];
    t.sam = true;
    rows.push(("+sam", t));
    t.correlated_features = true;
    rows.push(("+correlated", t));
    t.dgps = true;
    rows.push(("+dgps", t));
    t.stereo_loss = true;
    rows.push(("+stereo_loss", t));
    rows
}

/// Trains and evaluates every ladder row with the base config's seed and
/// budget.
pub fn ablate(dataset: &Dataset, base: &PipelineConfig, mut progress: impl FnMut(&AblationRow)) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for (name, toggles) in ladder() {
        let mut cfg = base.clone();
        cfg.train.toggles = toggles;
        let run = train(dataset, &cfg, None, None)?;
        let m = evaluate(&run.checkpoint, dataset, None)?.mean();
        let row = AblationRow { setting: name.to_string(), toggles, psnr: m.psnr, ssim: m.ssim, abs: m.abs };
        progress(&row);
        rows.push(row);
    }
    Ok(rows)
}

pub const ABLATION_HEADER: &str = "setting,sam,correlated_features,dgps,stereo_loss,psnr,ssim,abs";

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from(ABLATION_HEADER);
    s.push('\n');
    for r in rows {
        let t = r.toggles;
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.setting, t.sam, t.correlated_features, t.dgps, t.stereo_loss, r.psnr, r.ssim, r.abs
        ));
    }
    s
}

pub fn parse_ablation_csv(text: &str) -> Result<Vec<AblationRow>> {
    let bad = |msg: String| Error::Format { kind: "ablation CSV", msg };
    let mut lines = text.lines();
    if lines.next() != Some(ABLATION_HEADER) {
        return Err(bad("unexpected header".into()));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 8 {
                return Err(bad(format!("expected 8 fields: {line}")));
            }
            let flag = |s: &str| s.parse::<bool>().map_err(|e| bad(format!("{s}: {e}")));
            let num = |s: &str| s.parse::<f64>().map_err(|e| bad(format!("{s}: {e}")));
            Ok(AblationRow {
                setting: f[0].to_string(),
                toggles: Toggles { sam: flag(f[1])?, correlated_features: flag(f[2])?, dgps: flag(f[3])?, stereo_loss: flag(f[4])? },
                psnr: num(f[5])?,
                ssim: num(f[6])?,
                abs: num(f[7])?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_endpoints_and_monotone() {
        assert_eq!(cosine_lr(0, 2000, 5e-4, 0.0), 5e-4);
        assert!(cosine_lr(2000, 2000, 5e-4, 0.0).abs() < 1e-20);
        let mut prev = f64::INFINITY;
        for i in 0..=2000 {
            let lr = cosine_lr(i, 2000, 5e-4, 1e-5);
            assert!(lr <= prev);
            prev = lr;
        }
        assert!((prev - 1e-5).abs() < 1e-18);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = vec![Tensor::vector(vec![1.0, -2.0])];
        let mut adam = Adam::new(&p);
        adam.update(&mut p, &[Tensor::vector(vec![0.3, -4.0])], 0.1, 0.9, 0.999, 1e-12);
        assert!((p[0].data()[0] - 0.9).abs() < 1e-9);
        assert!((p[0].data()[1] + 1.9).abs() < 1e-9);
    }

    #[test]
    fn checkpoint_round_trip() {
        let cfg = PipelineConfig { seed: 5, ..Default::default() };
        let mut c = Checkpoint::initial(&cfg);
        c.iteration = 17;
        c.adam.step = 17;
        c.adam.m[0].data_mut()[3] = 0.25;
        c.calibration.scale = 1.5;
        let bytes = c.to_bytes();
        assert_eq!(&bytes[..4], b"SNVK");
        assert_eq!(Checkpoint::from_bytes(&bytes).unwrap(), c);
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn ladder_is_cumulative() {
        let l = ladder();
        assert_eq!(l.len(), 5);
        assert_eq!(l[4].1, Toggles::default());
        let rows: Vec<AblationRow> =
            l.iter().map(|(n, t)| AblationRow { setting: n.to_string(), toggles: *t, psnr: 20.5, ssim: 0.5, abs: 0.1 }).collect();
        assert_eq!(parse_ablation_csv(&ablation_csv(&rows)).unwrap(), rows);
    }
}
