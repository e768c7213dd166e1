//! Per-scene precomputation shared by training, evaluation and rendering:
//! stereo matching, pseudo ground truth, fused feature pyramids and the
//! cascade volumes of every training image.

use crate::costvol::{cascade, CascadeConfig, FeatureVolume, Guide};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::features::{stereo_features, FeaturePyramid, FusionOptions, SamStack};
use crate::geometry::{Camera, Eye};
use crate::image::ScalarMap;
use crate::losses::{g_distance, gamma_weight, stage_targets, DepthTarget, LossWeights};
use crate::render::{compress_volume_costs, RenderSource};
use crate::stereo::{match_pair, max_disparity_for, stereo_depth, DisparityCalibration, DisparitySequence, MatcherProfile, StereoMatch};

/// Everything the scene build depends on besides the dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneOptions {
    pub seed: u64,
    pub matcher: MatcherProfile,
    pub pseudo_gt: MatcherProfile,
    pub cascade: CascadeConfig,
    pub fusion: FusionOptions,
    pub held_out: Vec<usize>,
    pub losses: LossWeights,
}

#[derive(Debug, Clone)]
pub struct EyeState {
    pub camera: Camera,
    /// Pseudo ground truth from the strict matcher profile.
    pub pseudo_gt: DepthTarget,
    /// Calibrated stereo depth and its mask.
    pub stereo_depth: ScalarMap,
    pub stereo_mask: ScalarMap,
    pub features: FeaturePyramid,
    pub volumes: Vec<FeatureVolume>,
}

#[derive(Debug, Clone)]
pub struct ViewState {
    pub id: usize,
    pub matched: StereoMatch,
    pub eyes: [EyeState; 2],
    /// The view's stereo-output loss under the current calibration.
    pub stereo_loss: f64,
    /// The view's cost-volume depth loss.
    pub mvs_loss: f64,
}

pub struct SceneState<'d> {
    pub dataset: &'d Dataset,
    pub options: SceneOptions,
    pub calibration: DisparityCalibration,
    /// Views used for training, ascending.
    pub training: Vec<usize>,
    /// Indexed by dataset view; `None` for held-out views.
    pub views: Vec<Option<ViewState>>,
}

/// Depth of every output of a calibrated sequence. Pixels without a
/// positive disparity are placed at twice the far bound.
pub fn sequence_depths(seq: &DisparitySequence, bf: f64, far: f64) -> Vec<ScalarMap> {
    seq.outputs.iter().map(|m| m.map(|d| if d > 0.0 { bf / d } else { 2.0 * far })).collect()
}

fn eye_of(e: usize) -> Eye {
    if e == 0 {
        Eye::Left
    } else {
        Eye::Right
    }
}

impl<'d> SceneState<'d> {
    pub fn build(dataset: &'d Dataset, options: SceneOptions, calibration: DisparityCalibration) -> Result<Self> {
        let n = dataset.views.len();
        if let Some(&bad) = options.held_out.iter().find(|&&v| v >= n) {
            return Err(Error::InvalidInput(format!("held-out view {bad} not in a {n}-view dataset")));
        }
        let training: Vec<usize> = (0..n).filter(|v| !options.held_out.contains(v)).collect();
        if training.len() < 2 {
            return Err(Error::InvalidInput("need at least two training views".into()));
        }
        let stack = SamStack::new(options.seed);
        let (near, far) = (dataset.near(), dataset.far());
        let mut partial = Vec::with_capacity(n);
        for (i, view) in dataset.views.iter().enumerate() {
            if !training.contains(&i) {
                partial.push(None);
                continue;
            }
            let max_disp = max_disparity_for(&view.rig, near);
            let matched = match_pair(&view.images[0], &view.images[1], &view.rig, max_disp, &options.matcher)?;
            let strict = match_pair(&view.images[0], &view.images[1], &view.rig, max_disp, &options.pseudo_gt)?;
            let pyramids = stereo_features(
                &view.images[0],
                &view.images[1],
                [&matched.correlated[0], &matched.correlated[1]],
                &stack,
                options.fusion,
            )?;
            let targets = [0, 1].map(|e| {
                let (d, m) = stereo_depth(&strict.sequences[e], &strict.valid[e], &view.rig);
                DepthTarget::new(d, &m, near, far)
            });
            let [t0, t1] = targets;
            partial.push(Some((matched, [t0?, t1?], pyramids)));
        }
        let mut views: Vec<Option<ViewState>> = Vec::with_capacity(n);
        for (i, p) in partial.into_iter().enumerate() {
            views.push(p.map(|(matched, [t0, t1], [f0, f1])| {
                let view = &dataset.views[i];
                let mk = |e: usize, pseudo_gt: DepthTarget, features: FeaturePyramid| EyeState {
                    camera: view.camera(eye_of(e)),
                    pseudo_gt,
                    stereo_depth: ScalarMap::new(0, 0, 0.0),
                    stereo_mask: ScalarMap::new(0, 0, 0.0),
                    features,
                    volumes: Vec::new(),
                };
                ViewState { id: i, eyes: [mk(0, t0, f0), mk(1, t1, f1)], matched, stereo_loss: 0.0, mvs_loss: 0.0 }
            }));
        }
        let mut scene = Self { dataset, options, calibration, training, views };
        scene.set_calibration(calibration)?;
        Ok(scene)
    }

    pub fn view(&self, id: usize) -> &ViewState {
        self.views[id].as_ref().expect("training view")
    }

    /// Applies a calibration: recomputes stereo depth, the volumes (which
    /// the stereo depth guides) and the cached monitored losses.
    pub fn set_calibration(&mut self, cal: DisparityCalibration) -> Result<()> {
        self.calibration = cal;
        let (near, far) = (self.dataset.near(), self.dataset.far());
        for &i in &self.training {
            let rig = self.dataset.views[i].rig;
            let v = self.views[i].as_mut().expect("training view");
            for e in 0..2 {
                let seq = cal.apply(&v.matched.sequences[e]);
                let (d, m) = stereo_depth(&seq, &v.matched.valid[e], &rig);
                v.eyes[e].stereo_depth = d;
                v.eyes[e].stereo_mask = m;
            }
        }
        let mut volumes = Vec::with_capacity(self.training.len());
        for &i in &self.training {
            let nb = self.nearest_training(&self.dataset.views[i].camera(Eye::Left), Some(i), 1)[0];
            let (v, w) = (self.view(i), self.view(nb));
            let cams = [&v.eyes[0].camera, &v.eyes[1].camera, &w.eyes[0].camera, &w.eyes[1].camera];
            let pyrs = [
                &v.eyes[0].features.levels[..],
                &v.eyes[1].features.levels[..],
                &w.eyes[0].features.levels[..],
                &w.eyes[1].features.levels[..],
            ];
            let mut per_eye = Vec::with_capacity(2);
            for e in 0..2 {
                // Reference first, then the other eye, then the neighbor.
                let order = if e == 0 { [0, 1, 2, 3] } else { [1, 0, 2, 3] };
                let c: Vec<&Camera> = order.iter().map(|&k| cams[k]).collect();
                let p: Vec<&[_]> = order.iter().map(|&k| pyrs[k]).collect();
                let guide = Guide { depth: &v.eyes[e].stereo_depth, mask: &v.eyes[e].stereo_mask };
                per_eye.push(cascade(&c, &p, 0, Some(guide), near, far, &self.options.cascade)?);
            }
            volumes.push(per_eye);
        }
        let w = self.options.losses;
        for (&i, per_eye) in self.training.clone().iter().zip(volumes) {
            let bf = self.dataset.views[i].rig.bf();
            let v = self.views[i].as_mut().expect("training view");
            let (mut ls, mut lm) = (0.0, 0.0);
            for (e, vols) in per_eye.into_iter().enumerate() {
                let seq = cal.apply(&v.matched.sequences[e]);
                let depths = sequence_depths(&seq, bf, far);
                let k = depths.len();
                for (j, d) in depths.iter().enumerate() {
                    ls += gamma_weight(w.gamma, k - 1 - j) * g_distance(d, &v.eyes[e].pseudo_gt, w.beta)?;
                }
                let stages: Vec<ScalarMap> = vols.iter().map(|f| f.depth.clone()).collect();
                let targets = stage_targets(&v.eyes[e].pseudo_gt, &stages)?;
                for (l, (d, t)) in stages.iter().zip(&targets).enumerate() {
                    lm += 0.5f64.powi(l as i32) * g_distance(d, t, w.beta)?;
                }
                v.eyes[e].volumes = vols;
                v.eyes[e].volumes.iter_mut().for_each(compress_volume_costs);
            }
            v.stereo_loss = ls;
            v.mvs_loss = lm;
        }
        Ok(())
    }

    /// The `count` training views whose left camera centers are closest to
    /// `camera`'s center, ties broken by lower index.
    pub fn nearest_training(&self, camera: &Camera, exclude: Option<usize>, count: usize) -> Vec<usize> {
        let c = camera.pose.translation;
        let mut ids: Vec<(f64, usize)> = self
            .training
            .iter()
            .filter(|&&i| Some(i) != exclude)
            .map(|&i| ((self.dataset.views[i].camera(Eye::Left).pose.translation - c).norm(), i))
            .collect();
        ids.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        ids.into_iter().take(count).map(|(_, i)| i).collect()
    }

    /// Both eyes of each listed view as render sources.
    pub fn sources(&self, views: &[usize]) -> Vec<RenderSource<'_>> {
        let mut out = Vec::with_capacity(2 * views.len());
        for &i in views {
            let v = self.view(i);
            for e in 0..2 {
                out.push(RenderSource {
                    camera: v.eyes[e].camera,
                    image: &self.dataset.views[i].images[e],
                    features: v.eyes[e].features.finest(),
                    volumes: &v.eyes[e].volumes,
                });
            }
        }
        out
    }

    /// Mean stage-2 plane interval over the listed views' volumes.
    pub fn finest_interval(&self, views: &[usize]) -> f64 {
        let (mut s, mut n) = (0.0, 0usize);
        for &i in views {
            for eye in &self.view(i).eyes {
                let planes = &eye.volumes.last().expect("volumes").planes;
                s += planes.interval.iter().sum::<f64>();
                n += planes.interval.len();
            }
        }
        s / n.max(1) as f64
    }
}
