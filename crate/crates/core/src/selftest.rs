//! Fast oracle and invariant checks, runnable from the command line.
//!
//! The measuring functions are public so tests can apply their own
//! thresholds; [`run_all`] applies the default ones.

use nalgebra::{Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::costvol::{planes_uniform, regularize, sweep, SweepView};
use crate::diff::{grad_check, Tape};
use crate::error::Result;
use crate::features::base_features;
use crate::geometry::{
    apply_homography, backproject, depth_to_disparity, disparity_to_depth, homography_for_plane, project, Camera, Intrinsics, Plane, Pose,
    StereoRig,
};
use crate::losses::{color_loss, gamma_weight, ray_depth_loss, total_loss_var, LossParts, LossWeights};
use crate::metrics::psnr;
use crate::render::{composite, forward, RendererNet, SampleBatch, BLEND_FEATURES, POOLED_FEATURES};
use crate::scenegen::{render_view, Albedo, Primitive, Scene, Shape};

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn random_pose(rng: &mut ChaCha8Rng) -> Pose {
    let eye = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
    let target = Vector3::new(rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5), 3.0);
    Pose::look_at(eye, target, Vector3::new(0.0, 1.0, 0.0)).expect("non-degenerate look-at")
}

/// Intrinsics at the reference 864×448 resolution.
pub fn reference_intrinsics() -> Intrinsics {
    Intrinsics::new(711.0, 711.0, 432.0, 224.0, 864, 448).expect("valid")
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeometryErrors {
    /// Worst relative error of pixel → point → pixel.
    pub round_trip: f64,
    /// Worst pixel error of `H_ab·H_bc` against `H_ac` for a shared plane.
    pub homography_composition: f64,
    /// Worst relative error of depth → disparity → depth.
    pub disparity_round_trip: f64,
    /// Depth at 71.1 px disparity for an 8 cm baseline and a 711 px focal.
    pub spot_depth: f64,
}

pub fn geometry_errors(seed: u64, trials: usize) -> Result<GeometryErrors> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = reference_intrinsics();
    let mut out = GeometryErrors { round_trip: 0.0, homography_composition: 0.0, disparity_round_trip: 0.0, spot_depth: 0.0 };
    for _ in 0..trials {
        let cam = Camera::new(k, random_pose(&mut rng));
        let px = Vector2::new(rng.gen_range(0.0..864.0), rng.gen_range(0.0..448.0));
        let d = rng.gen_range(0.5..10.0);
        let pr = project(&backproject(&px, d, &cam)?, &cam);
        out.round_trip = out.round_trip.max((pr.pixel - px).norm() / px.norm()).max((pr.depth - d).abs() / d);

        let (a, b, c) =
            (Camera::new(k, random_pose(&mut rng)), Camera::new(k, random_pose(&mut rng)), Camera::new(k, random_pose(&mut rng)));
        let plane = Plane::fronto_parallel(&c, rng.gen_range(2.0..5.0));
        let h_ac = homography_for_plane(&a, &c, &plane);
        let h_ab_bc = homography_for_plane(&a, &b, &plane) * homography_for_plane(&b, &c, &plane);
        let q = Vector2::new(rng.gen_range(300.0..564.0), rng.gen_range(150.0..300.0));
        out.homography_composition = out.homography_composition.max((apply_homography(&h_ac, &q) - apply_homography(&h_ab_bc, &q)).norm());

        let rig = StereoRig::new(k, random_pose(&mut rng), rng.gen_range(0.02..0.3))?;
        let z = rng.gen_range(0.5..20.0);
        let back = disparity_to_depth(depth_to_disparity(z, &rig)?, &rig)?;
        out.disparity_round_trip = out.disparity_round_trip.max((back - z).abs() / z);
    }
    let rig = StereoRig::new(k, Pose::identity(), 0.08)?;
    out.spot_depth = disparity_to_depth(71.1, &rig)?;
    Ok(out)
}

/// Outcome of sweeping a textured fronto-parallel plane.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepOracle {
    pub true_depth: f64,
    pub interval: f64,
    /// Worst softargmin error over interior pixels.
    pub max_error: f64,
    pub mean_error: f64,
    pub pixels: usize,
    /// Smallest ratio of a wrong plane's mean cost to the best plane's,
    /// over planes more than two intervals from the truth.
    pub wrong_cost_ratio: f64,
}

/// Reference camera at the origin looking down +z at a noise-textured plane
/// at 2 m, five displaced sources, uniform 48-plane sweep over [1, 4] m.
pub fn plane_sweep_oracle() -> Result<SweepOracle> {
    let (near, far, count, depth) = (1.0, 4.0, 48, 2.0);
    let k = Intrinsics::new(79.0, 79.0, 48.0, 32.0, 96, 64)?;
    let mut scene = Scene::empty(near, far);
    scene.primitives.push(Primitive {
        shape: Shape::Plane { point: Vector3::new(0.0, 0.0, depth), normal: Vector3::new(0.0, 0.0, -1.0) },
        albedo: Albedo::Noise { a: [0.1, 0.15, 0.2], b: [0.9, 0.85, 0.7], scale: 0.08, seed: 11 },
    });
    let rot = Pose::identity().rotation;
    let cams: Vec<Camera> = [(0.0, 0.0), (0.25, 0.0), (-0.25, 0.0), (0.0, 0.2), (0.0, -0.2), (0.18, 0.18)]
        .iter()
        .map(|&(x, y)| Pose::new(rot, Vector3::new(x, y, 0.0)).map(|p| Camera::new(k, p)))
        .collect::<Result<_>>()?;
    let feats: Vec<_> = cams.iter().map(|c| base_features(&render_view(&scene, c).0)).collect();
    let views: Vec<SweepView<'_>> = cams.iter().zip(&feats).map(|(camera, features)| SweepView { camera, features }).collect();
    let planes = planes_uniform(near, far, count, k.width, k.height)?;
    let cost = sweep(&views, &cams[0], &planes)?;
    let vol = regularize(&cost, &planes, cams[0], 0.5, 1.0)?;
    let interval = (far - near) / count as f64;

    let border = 8;
    let (mut max_error, mut sum, mut n) = (0.0f64, 0.0, 0usize);
    let mut plane_cost = vec![0.0; count];
    for y in border..k.height - border {
        for x in border..k.width - border {
            let p = y * k.width + x;
            let err = (vol.depth.get(x, y) - depth).abs();
            max_error = max_error.max(err);
            sum += err;
            n += 1;
            for (i, c) in plane_cost.iter_mut().enumerate() {
                *c += cost.voxel(p, i).iter().sum::<f64>();
            }
        }
    }
    let best = plane_cost.iter().cloned().fold(f64::INFINITY, f64::min);
    let wrong_cost_ratio = (0..count)
        .filter(|&i| (planes.depth(0, i) - depth).abs() > 2.0 * interval)
        .map(|i| plane_cost[i] / best)
        .fold(f64::INFINITY, f64::min);
    Ok(SweepOracle { true_depth: depth, interval, max_error, mean_error: sum / n as f64, pixels: n, wrong_cost_ratio })
}

/// Rounding allowance on `Σw ≤ 1`: the weights telescope to `1 − T` only in
/// exact arithmetic.
pub const WEIGHT_SUM_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CompositingInvariants {
    pub min_weight_sum: f64,
    pub max_weight_sum: f64,
    /// Color and depth error when the first sample is opaque.
    pub opaque_first_error: f64,
    /// Error against the closed form for two samples with α = 0.5 each.
    pub two_sample_error: f64,
}

pub fn compositing_invariants(rays: usize, seed: u64) -> Result<CompositingInvariants> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut inv = CompositingInvariants {
        min_weight_sum: f64::INFINITY,
        max_weight_sum: f64::NEG_INFINITY,
        opaque_first_error: 0.0,
        two_sample_error: 0.0,
    };
    for _ in 0..rays {
        let s = rng.gen_range(2..40);
        let mut t: Vec<f64> = (0..s).map(|_| rng.gen_range(1.0..4.0)).collect();
        t.sort_by(f64::total_cmp);
        let delta: Vec<f64> = (0..s).map(|_| rng.gen_range(0.0..0.3)).collect();
        // Mix of empty space, moderate and extreme densities.
        let sigma: Vec<f64> = (0..s)
            .map(|_| match rng.gen_range(0..4) {
                0 => 0.0,
                1 => rng.gen_range(0.0..2.0),
                2 => rng.gen_range(0.0..50.0),
                _ => rng.gen_range(0.0..1e4),
            })
            .collect();
        let colors: Vec<[f64; 3]> = (0..s).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect();
        let px = composite(&colors, &sigma, &t, &delta)?;
        let sum: f64 = px.weights.iter().sum();
        inv.min_weight_sum = inv.min_weight_sum.min(sum);
        inv.max_weight_sum = inv.max_weight_sum.max(sum);

        let mut opaque = sigma.clone();
        opaque[0] = 25.0 / delta[0].max(1e-3);
        let mut d0 = delta.clone();
        d0[0] = d0[0].max(1e-3);
        let px = composite(&colors, &opaque, &t, &d0)?;
        let err = (0..3).map(|c| (px.color[c] - colors[0][c]).abs()).fold((px.depth - t[0]).abs(), f64::max);
        inv.opaque_first_error = inv.opaque_first_error.max(err);
    }
    let ln2 = std::f64::consts::LN_2;
    let (c1, c2) = ([0.9, 0.2, 0.1], [0.1, 0.4, 0.8]);
    let px = composite(&[c1, c2], &[ln2, ln2], &[1.5, 2.5], &[1.0, 1.0])?;
    // w = (0.5, 0.25): color 0.5·c1 + 0.25·c2, depth (0.75 + 0.625) / 0.75.
    let mut err = (px.depth - (0.5 * 1.5 + 0.25 * 2.5) / 0.75).abs().max((px.opacity - 0.75).abs());
    for c in 0..3 {
        err = err.max((px.color[c] - (0.5 * c1[c] + 0.25 * c2[c])).abs());
    }
    inv.two_sample_error = err;
    Ok(inv)
}

/// A random batch with plausible feature ranges, some occluded views and
/// occasionally a sample no view sees.
pub fn random_batch(rng: &mut ChaCha8Rng, rays: usize, samples: usize, views: usize) -> SampleBatch {
    let n = rays * samples;
    let mut t = Vec::with_capacity(n);
    let mut delta = Vec::with_capacity(n);
    for _ in 0..rays {
        let mut ts: Vec<f64> = (0..samples).map(|_| rng.gen_range(1.0..4.0)).collect();
        ts.sort_by(f64::total_cmp);
        for i in 0..samples {
            delta.push(if i + 1 < samples { ts[i + 1] - ts[i] } else { 4.0 - ts[i] }.max(0.01));
        }
        t.extend(ts);
    }
    let visible: Vec<bool> = (0..n * views).map(|_| rng.gen_bool(0.8)).collect();
    let any_visible: Vec<bool> = (0..n).map(|i| visible[i * views..(i + 1) * views].iter().any(|&b| b)).collect();
    SampleBatch {
        rays,
        samples,
        views,
        t,
        delta,
        pooled: (0..n * POOLED_FEATURES).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        blend: (0..n * views * BLEND_FEATURES).map(|_| rng.gen_range(-0.5..0.5)).collect(),
        rgb: [0, 1, 2].map(|_| (0..n * views).map(|_| rng.gen_range(0.0..1.0)).collect()),
        visible,
        any_visible,
    }
}

/// Central-difference step near the cube root of machine epsilon, where
/// truncation and rounding error balance.
pub const FD_STEP: f64 = 1e-5;

/// Largest relative error between tape gradients of the full training loss
/// (color plus ray depth plus constant parts, default weights) and central
/// differences, over every parameter tensor, for one random configuration.
pub fn render_loss_gradient_error(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rays = rng.gen_range(2..4);
    let (samples, views) = (rng.gen_range(2..5), rng.gen_range(1..4));
    let batch = random_batch(&mut rng, rays, samples, views);
    let net = RendererNet::new(seed, rng.gen_range(3..9));
    let gt: Vec<[f64; 3]> = (0..rays).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect();
    let d_gt: Vec<f64> = (0..rays).map(|_| rng.gen_range(1.0..4.0)).collect();
    // Same rule as training: rays no source sees carry no depth supervision.
    let seen = |r: usize| batch.any_visible[r * samples..(r + 1) * samples].iter().any(|&b| b);
    let mask: Vec<bool> = (0..rays).map(|i| (i == 0 || rng.gen_bool(0.7)) && seen(i)).collect();
    let constant = LossParts {
        color: 0.0,
        stereo_output: rng.gen_range(0.0..5.0),
        mvs: rng.gen_range(0.0..5.0),
        ray: 0.0,
        self_depth: rng.gen_range(0.0..5.0),
    };
    let w = LossWeights::default();
    let mut worst = 0.0f64;
    for k in 0..net.params.len() {
        let err = grad_check(
            |tape: &Tape, x| {
                let mut params = net.constants(tape);
                params[k] = x;
                let out = forward(tape, &params, &batch)?;
                let lc = color_loss(tape, &out.color, &gt)?;
                let lr = ray_depth_loss(tape, out.depth, &d_gt, &mask, w.beta)?;
                total_loss_var(tape, lc, lr, &constant, &w)
            },
            &net.params[k],
            FD_STEP,
        )?;
        worst = worst.max(err);
    }
    Ok(worst)
}

fn check(name: &'static str, outcome: Result<(bool, String)>) -> CheckResult {
    match outcome {
        Ok((passed, detail)) => CheckResult { name, passed, detail },
        Err(e) => CheckResult { name, passed: false, detail: format!("error: {e}") },
    }
}

/// Runs every check with its default threshold.
pub fn run_all() -> Vec<CheckResult> {
    let mut out = Vec::new();
    let geo = geometry_errors(1, 200);
    out.push(check(
        "geometry: project/backproject",
        geo.as_ref().map(|g| (g.round_trip < 1e-10, format!("max rel {:.2e}", g.round_trip))).map_err(clone_err),
    ));
    out.push(check(
        "geometry: homography composition",
        geo.as_ref().map(|g| (g.homography_composition < 1e-9, format!("max {:.2e} px", g.homography_composition))).map_err(clone_err),
    ));
    out.push(check(
        "geometry: disparity/depth",
        geo.as_ref()
            .map(|g| {
                (
                    g.disparity_round_trip < 1e-12 && g.spot_depth == 0.08 * 711.0 / 71.1,
                    format!("max rel {:.2e}, spot {}", g.disparity_round_trip, g.spot_depth),
                )
            })
            .map_err(clone_err),
    ));
    out.push(check(
        "plane sweep: fronto-parallel plane",
        plane_sweep_oracle().map(|o| {
            (
                o.max_error < o.interval && o.wrong_cost_ratio >= 2.0,
                format!(
                    "max err {:.4} m, mean {:.4} m (interval {:.4}), wrong/best cost {:.2}",
                    o.max_error, o.mean_error, o.interval, o.wrong_cost_ratio
                ),
            )
        }),
    ));
    out.push(check(
        "rendering: compositing invariants",
        compositing_invariants(10_000, 2).map(|c| {
            (
                c.min_weight_sum >= 0.0
                    && c.max_weight_sum <= 1.0 + WEIGHT_SUM_SLACK
                    && c.opaque_first_error < 1e-8
                    && c.two_sample_error < 1e-12,
                format!(
                    "sum w in [{:e}, {:e}], opaque {:.1e}, closed form {:.1e}",
                    c.min_weight_sum, c.max_weight_sum, c.opaque_first_error, c.two_sample_error
                ),
            )
        }),
    ));
    out.push(check(
        "autodiff: render and loss gradients",
        (0..3).map(render_loss_gradient_error).collect::<Result<Vec<f64>>>().map(|e| {
            let worst = e.iter().cloned().fold(0.0, f64::max);
            (worst < 1e-4, format!("max rel {worst:.2e} over {} configurations", e.len()))
        }),
    ));
    out.push(check("losses: gamma and scale weights", Ok(loss_weight_check())));
    out.push(check("metrics: psnr falls with noise", psnr_noise_check()));
    out
}

fn clone_err(e: &crate::error::Error) -> crate::error::Error {
    crate::error::Error::Numerical(e.to_string())
}

fn loss_weight_check() -> (bool, String) {
    let w = LossWeights::default();
    let ratio = gamma_weight(w.gamma, 6) / gamma_weight(w.gamma, 0);
    let expect = 0.9 * 0.9 * 0.9 * 0.9 * 0.9 * 0.9;
    let scale = 0.5f64.powi(2) / 0.5f64.powi(1);
    (ratio == expect && scale == 0.5, format!("gamma ratio {ratio}, scale ratio {scale}"))
}

fn psnr_noise_check() -> Result<(bool, String)> {
    use crate::image::RgbImage;
    use rand_distr::{Distribution, Normal};
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut base = RgbImage::new(32, 24, [0.0; 3]);
    for y in 0..24 {
        for x in 0..32 {
            base.set(x, y, [x as f64 / 32.0, y as f64 / 24.0, 0.5]);
        }
    }
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let mut last = f64::INFINITY;
    let mut values = Vec::new();
    for sigma in [0.01, 0.02, 0.05, 0.1, 0.2] {
        let mut img = base.clone();
        for v in img.data.iter_mut() {
            for c in v.iter_mut() {
                *c += sigma * noise.sample(&mut rng);
            }
        }
        let p = psnr(&img, &base)?;
        if !(p < last) {
            return Ok((false, format!("psnr {p:.2} at sigma {sigma} not below {last:.2}")));
        }
        last = p;
        values.push(format!("{p:.1}"));
    }
    Ok((true, format!("psnr {}", values.join(" > "))))
}
