//! Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any
//! criterion fails. The end-to-end criteria train the demo scene four times
//! (about 35 minutes on one core).

use std::path::Path;
use std::time::{Duration, Instant};

use stereo_nvs::config::PipelineConfig;
use stereo_nvs::costvol::downsample_inverse_depth;
use stereo_nvs::dataset::Dataset;
use stereo_nvs::image::ScalarMap;
use stereo_nvs::losses::{g_distance, mvs_depth_loss, stereo_output_loss, total_loss, DepthTarget, LossParts, LossWeights};
use stereo_nvs::scene::SceneState;
use stereo_nvs::scenegen::{demo_scene, demo_trajectory, generate_dataset, RigParams, DEMO_HEIGHT, DEMO_WIDTH};
use stereo_nvs::selftest::{compositing_invariants, geometry_errors, plane_sweep_oracle, render_loss_gradient_error, WEIGHT_SUM_SLACK};
use stereo_nvs::stereo::{calibrate, match_pair, max_disparity_for, DisparityCalibration};
use stereo_nvs::trainer::{evaluate_eyes, ladder, report_from, train, EyeEvaluation, TrainRun};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

type Outcome = Result<(bool, String), String>;

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn within(limit: Duration, start: Instant) -> (bool, String) {
    let t = start.elapsed();
    (t <= limit, format!("{:.2} s (limit {} s)", t.as_secs_f64(), limit.as_secs()))
}

fn generate_demo(dir: &Path) -> Result<Dataset, String> {
    let rig = RigParams::scaled_default(DEMO_WIDTH, DEMO_HEIGHT).map_err(err)?;
    generate_dataset(&demo_scene(0), &demo_trajectory(7).map_err(err)?, &rig, 0, dir).map_err(err)?;
    Dataset::load(dir).map_err(err)
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let g = geometry_errors(1, 1000).map_err(err)?;
    let (fast, time) = within(Duration::from_secs(1), start);
    let ok = g.round_trip < 1e-10
        && g.homography_composition < 1e-9
        && g.disparity_round_trip < 1e-12
        && g.spot_depth == 0.08 * 711.0 / 71.1
        && (g.spot_depth - 0.8).abs() < 1e-15
        && fast;
    Ok((
        ok,
        format!(
            "round trip {:.1e}, homography {:.1e} px, disparity {:.1e}, spot {} m, {time}",
            g.round_trip, g.homography_composition, g.disparity_round_trip, g.spot_depth
        ),
    ))
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let o = plane_sweep_oracle().map_err(err)?;
    let (fast, time) = within(Duration::from_secs(10), start);
    Ok((
        o.max_error < o.interval && o.wrong_cost_ratio >= 2.0 && fast,
        format!(
            "max error {:.4} m over {} px (interval {:.4}), wrong/best cost {:.2}, {time}",
            o.max_error, o.pixels, o.interval, o.wrong_cost_ratio
        ),
    ))
}

fn scene_with(ds: &Dataset, f: impl FnOnce(&mut PipelineConfig)) -> Result<SceneState<'_>, String> {
    let mut cfg = PipelineConfig::default();
    f(&mut cfg);
    SceneState::build(ds, cfg.scene_options(), DisparityCalibration::identity()).map_err(err)
}

fn criterion_3(ds: &Dataset) -> Outcome {
    let scene = scene_with(ds, |_| {})?;
    let (near, far) = (ds.near(), ds.far());
    let (mut halving, mut counts, mut bracket) = (true, true, true);
    let (mut guided, mut checked) = (0usize, 0usize);
    for &i in &scene.training {
        for eye in &scene.view(i).eyes {
            let vols = &eye.volumes;
            counts &= vols.iter().map(|v| v.planes.count).collect::<Vec<_>>() == [48, 32, 8];
            for s in 1..vols.len() {
                let (prev, cur) = (&vols[s - 1].planes, &vols[s].planes);
                for y in 0..cur.height {
                    for x in 0..cur.width {
                        let parent = (y / 2) * prev.width + x / 2;
                        halving &= cur.interval[y * cur.width + x] == prev.interval[parent] * 0.5;
                    }
                }
            }
            let p0 = &vols[0].planes;
            let factor = eye.stereo_depth.width / p0.width;
            let (d, m) = downsample_inverse_depth(&eye.stereo_depth, &eye.stereo_mask, factor);
            for p in 0..p0.pixels() {
                let ds_ = d.data[p];
                if m.data[p] < 0.5 || !(ds_ >= near && ds_ <= far) {
                    continue;
                }
                checked += 1;
                guided += usize::from(p0.guided[p]);
                bracket &= p0.depth(p, 0) <= ds_ + 0.5 * p0.interval[p] && ds_ - 0.5 * p0.interval[p] <= p0.depth(p, p0.count - 1);
            }
        }
    }
    Ok((
        halving && counts && bracket && checked > 0,
        format!("halving {halving}, counts 48/32/8 {counts}, bracket {bracket} on {checked} valid px ({guided} guided)"),
    ))
}

/// Mean |stage-0 depth − true depth| over pixels with a valid stereo guide and
/// true depth in range, all training eyes.
fn stage0_abs(scene: &SceneState<'_>, reference: &SceneState<'_>) -> f64 {
    let ds = scene.dataset;
    let (mut sum, mut n) = (0.0, 0usize);
    for &i in &scene.training {
        for e in 0..2 {
            let eye = &scene.view(i).eyes[e];
            let vol = &eye.volumes[0];
            let factor = ds.views[i].depths[e].width / vol.width();
            let gt = &ds.views[i].depths[e];
            let in_range = gt.map(|z| f64::from(z >= ds.near() && z <= ds.far()));
            let (gt_ds, gt_m) = downsample_inverse_depth(gt, &in_range, factor);
            let ref_eye = &reference.view(i).eyes[e];
            let (_, guide_m) = downsample_inverse_depth(&ref_eye.stereo_depth, &ref_eye.stereo_mask, factor);
            for p in 0..gt_ds.data.len() {
                if gt_m.data[p] > 0.5 && guide_m.data[p] > 0.5 {
                    sum += (vol.depth.data[p] - gt_ds.data[p]).abs();
                    n += 1;
                }
            }
        }
    }
    sum / n.max(1) as f64
}

fn criterion_4(ds: &Dataset) -> Outcome {
    let start = Instant::now();
    let dgps = scene_with(ds, |_| {})?;
    let uniform = scene_with(ds, |c| c.train.toggles.dgps = false)?;
    let uniform96 = scene_with(ds, |c| {
        c.train.toggles.dgps = false;
        c.cascade.planes[0] = 96;
    })?;
    let (a, b, c) = (stage0_abs(&dgps, &dgps), stage0_abs(&uniform, &dgps), stage0_abs(&uniform96, &dgps));
    let (fast, time) = within(Duration::from_secs(60), start);
    Ok((a <= b && a <= c && fast, format!("stage-0 ABS dgps {a:.4}, uniform-48 {b:.4}, uniform-96 {c:.4} m, {time}")))
}

fn criterion_5(ds: &Dataset) -> Outcome {
    let profile = PipelineConfig::default().matcher;
    let (mut err_sum, mut n) = (0.0, 0usize);
    let mut worst_view = 0.0f64;
    let mut samples = Vec::new();
    for view in &ds.views {
        let m = match_pair(&view.images[0], &view.images[1], &view.rig, max_disparity_for(&view.rig, ds.near()), &profile).map_err(err)?;
        let bf = view.rig.bf();
        let (mut vs, mut vn) = (0.0, 0usize);
        for e in 0..2 {
            let disp = m.sequences[e].last();
            let gt = &view.depths[e];
            for p in 0..disp.data.len() {
                if m.valid[e].data[p] > 0.5 && gt.data[p].is_finite() && gt.data[p] > 0.0 {
                    let d = disp.data[p];
                    vs += (d - bf / gt.data[p]).abs();
                    vn += 1;
                    if e == 0 && d > 0.0 {
                        samples.push((2.0 * d, gt.data[p]));
                    }
                }
            }
        }
        worst_view = worst_view.max(vs / vn.max(1) as f64);
        err_sum += vs;
        n += vn;
    }
    let mean = err_sum / n.max(1) as f64;
    let cal = calibrate(&samples, ds.views[0].rig.bf(), 1.0);
    let a_err = (cal.scale - 0.5).abs();
    Ok((
        mean <= 1.0 && a_err < 0.02 && !cal.fallback,
        format!(
            "mean disparity error {mean:.3} px on {n} valid px (worst view {worst_view:.3}), planted 2x scale fit a = {:.4}, c = {:.4}",
            cal.scale, cal.offset
        ),
    ))
}

fn criterion_6() -> Outcome {
    let c = compositing_invariants(100_000, 6).map_err(err)?;
    Ok((
        c.min_weight_sum >= 0.0 && c.max_weight_sum <= 1.0 + WEIGHT_SUM_SLACK && c.opaque_first_error < 1e-8 && c.two_sample_error < 1e-12,
        format!(
            "sum w in [{:e}, {:e}] over 1e5 rays, opaque-first error {:.1e}, two-sample error {:.1e}",
            c.min_weight_sum, c.max_weight_sum, c.opaque_first_error, c.two_sample_error
        ),
    ))
}

fn criterion_7() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0f64;
    for seed in 0..20 {
        worst = worst.max(render_loss_gradient_error(100 + seed).map_err(err)?);
    }
    let (fast, time) = within(Duration::from_secs(30), start);
    Ok((worst < 1e-4 && fast, format!("max relative error {worst:.2e} over 20 configurations, {time}")))
}

fn one_pixel(v: f64) -> ScalarMap {
    ScalarMap::new(1, 1, v)
}

fn criterion_8() -> Outcome {
    let w = LossWeights::default();
    let target = DepthTarget::new(one_pixel(2.0), &one_pixel(1.0), 0.5, 5.0).map_err(err)?;
    // Inverse-depth error 1 − 1/2 = 0.5 at exactly one output, zero elsewhere.
    let only = |k: usize, len: usize| -> Vec<ScalarMap> { (0..len).map(|i| one_pixel(if i == k { 1.0 } else { 2.0 })).collect() };
    let first = stereo_output_loss(&[(&only(0, 7)[..], &target)], w.gamma, w.beta).map_err(err)?;
    let last = stereo_output_loss(&[(&only(6, 7)[..], &target)], w.gamma, w.beta).map_err(err)?;
    let gamma_ok = first / last == 0.9 * 0.9 * 0.9 * 0.9 * 0.9 * 0.9;

    let targets = [target.clone(), target.clone(), target.clone()];
    let stage = |l: usize| mvs_depth_loss(&[(&only(l, 3)[..], &targets[..])], w.beta).map_err(err);
    let (s0, s1, s2) = (stage(0)?, stage(1)?, stage(2)?);
    let scale_ok = s1 / s0 == 0.5 && s2 / s0 == 0.25;

    let mut pred = ScalarMap::new(3, 1, 1.5);
    let mut mask = ScalarMap::new(3, 1, 1.0);
    mask.data[1] = 0.0;
    let masked_target = DepthTarget::new(ScalarMap::new(3, 1, 2.0), &mask, 0.5, 5.0).map_err(err)?;
    let before = g_distance(&pred, &masked_target, w.beta).map_err(err)?;
    pred.data[1] = 1e6;
    let after_big = g_distance(&pred, &masked_target, w.beta).map_err(err)?;
    pred.data[1] = f64::NAN;
    let after_nan = g_distance(&pred, &masked_target, w.beta).map_err(err)?;
    let inert = before.to_bits() == after_big.to_bits() && before.to_bits() == after_nan.to_bits();

    let unit = |f: fn(&mut LossParts)| {
        let mut p = LossParts { color: 0.0, stereo_output: 0.0, mvs: 0.0, ray: 0.0, self_depth: 0.0 };
        f(&mut p);
        total_loss(&p, &w)
    };
    let weights = [
        unit(|p| p.color = 1.0),
        unit(|p| p.self_depth = 1.0),
        unit(|p| p.stereo_output = 1.0),
        unit(|p| p.mvs = 1.0),
        unit(|p| p.ray = 1.0),
    ];
    let weights_ok = weights == [1.0, 0.1, 0.1, 0.1, 1.0]
        && (w.self_depth, w.stereo_depth, w.lambda1, w.lambda2, w.lambda3) == (0.1, 1.0, 0.1, 0.1, 1.0);
    Ok((
        gamma_ok && scale_ok && inert && weights_ok,
        format!(
            "gamma ratio {} ({gamma_ok}), stage ratios {} {} ({scale_ok}), masked inert {inert}, weights {weights:?}",
            first / last,
            s1 / s0,
            s2 / s0
        ),
    ))
}

struct EndToEnd {
    run: TrainRun,
    evals: Vec<EyeEvaluation>,
    csv: String,
    seconds: f64,
}

/// gen → train (2000 iterations, seed 0) → eval on the held-out view.
fn end_to_end(dir: &Path, toggles: Option<stereo_nvs::trainer::Toggles>) -> Result<EndToEnd, String> {
    let start = Instant::now();
    let ds = generate_demo(dir)?;
    let mut cfg = PipelineConfig::default();
    if let Some(t) = toggles {
        cfg.train.toggles = t;
    }
    cfg.data = Some(dir.to_path_buf());
    let run = train(&ds, &cfg, None, Some(&dir.join("model.ckpt"))).map_err(err)?;
    let c = &run.checkpoint;
    let scene = SceneState::build(&ds, c.config.scene_options(), c.calibration).map_err(err)?;
    let evals = evaluate_eyes(&scene, &c.net, &c.config, &c.config.train.held_out).map_err(err)?;
    let csv = report_from(&evals).to_csv();
    drop(scene);
    Ok(EndToEnd { run, evals, csv, seconds: start.elapsed().as_secs_f64() })
}

fn smoothed(log: &[f64], end: usize) -> f64 {
    let lo = end.saturating_sub(100);
    log[lo..end].iter().sum::<f64>() / (end - lo) as f64
}

fn criterion_9(e: &EndToEnd) -> Outcome {
    let n = e.evals.len() as f64;
    let psnr = e.evals.iter().map(|x| x.psnr).sum::<f64>() / n;
    let base = e.evals.iter().map(|x| x.baseline_psnr).sum::<f64>() / n;
    let abs = e.evals.iter().map(|x| x.abs).sum::<f64>() / n;
    let interval = e.evals.iter().map(|x| x.finest_interval).sum::<f64>() / n;
    let totals: Vec<f64> = e.run.log.iter().map(|r| r.total).collect();
    let colors: Vec<f64> = e.run.log.iter().map(|r| r.parts.color).collect();
    let (l100, l2000) = (smoothed(&totals, 100), smoothed(&totals, totals.len()));
    let (c100, c2000) = (smoothed(&colors, 100), smoothed(&colors, colors.len()));
    let ok = psnr >= base + 6.0 && abs <= 3.0 * interval && e.seconds <= 600.0;
    Ok((
        ok,
        format!(
            "psnr {psnr:.2} vs baseline {base:.2} (+{:.2} dB, need 6), depth ABS {abs:.4} m vs 3x interval {:.4} m, \
             smoothed loss {l100:.3} -> {l2000:.3} (color {c100:.5} -> {c2000:.5}), {:.0} s (limit 600)",
            psnr - base,
            3.0 * interval,
            e.seconds
        ),
    ))
}

fn mean_metrics(evals: &[EyeEvaluation]) -> (f64, f64) {
    let n = evals.len() as f64;
    (evals.iter().map(|x| x.psnr).sum::<f64>() / n, evals.iter().map(|x| x.abs).sum::<f64>() / n)
}

fn criterion_10(full: &EndToEnd, root: &Path) -> Outcome {
    let rows = ladder();
    let (fp, fa) = mean_metrics(&full.evals);
    let mut ok = true;
    let mut parts = vec![format!("full psnr {fp:.2} abs {fa:.4}")];
    // Rows (d) and (e): everything before DGPS, everything before the stereo loss.
    for (label, idx) in [("no-dgps", 2), ("no-stereo-loss", 3)] {
        let dir = root.join(label);
        std::fs::create_dir_all(&dir).map_err(err)?;
        let v = end_to_end(&dir, Some(rows[idx].1))?;
        let (p, a) = mean_metrics(&v.evals);
        ok &= fp >= p && fa <= a;
        parts.push(format!("{label} psnr {p:.2} abs {a:.4}"));
    }
    Ok((ok, parts.join(", ")))
}

fn criterion_11(first: &EndToEnd, root: &Path) -> Outcome {
    let dir = root.join("repeat");
    std::fs::create_dir_all(&dir).map_err(err)?;
    let second = end_to_end(&dir, None)?;
    let mut a = first.run.checkpoint.clone();
    let mut b = second.run.checkpoint.clone();
    // The checkpoints differ only in the dataset path they record.
    a.config.data = None;
    b.config.data = None;
    let ckpt = a.to_bytes() == b.to_bytes();
    let images = first.evals.iter().zip(&second.evals).all(|(x, y)| {
        x.rendered.image == y.rendered.image
            && x.rendered.depth.data.iter().map(|v| v.to_bits()).eq(y.rendered.depth.data.iter().map(|v| v.to_bits()))
    });
    let csv = first.csv == second.csv;
    let log = first.run.log.iter().zip(&second.run.log).all(|(x, y)| x.csv() == y.csv());
    Ok((ckpt && images && csv && log, format!("checkpoint {ckpt}, rendered images {images}, metrics csv {csv}, training log {log}")))
}

fn report(id: u32, outcome: Outcome, failures: &mut Vec<u32>) {
    let (ok, detail) = outcome.unwrap_or_else(|e| (false, format!("error: {e}")));
    println!("criterion {id:>2} {}: {detail}", if ok { "PASS" } else { "FAIL" });
    if !ok {
        failures.push(id);
    }
}

fn main() {
    let root = tempfile::tempdir().expect("temp dir");
    let mut failures = Vec::new();
    report(1, criterion_1(), &mut failures);
    report(2, criterion_2(), &mut failures);
    report(6, criterion_6(), &mut failures);
    report(7, criterion_7(), &mut failures);
    report(8, criterion_8(), &mut failures);

    let demo = root.path().join("demo");
    match generate_demo(&demo) {
        Ok(ds) => {
            report(3, criterion_3(&ds), &mut failures);
            report(4, criterion_4(&ds), &mut failures);
            report(5, criterion_5(&ds), &mut failures);
        }
        Err(e) => {
            for id in [3, 4, 5] {
                report(id, Err(e.clone()), &mut failures);
            }
        }
    }

    let full_dir = root.path().join("full");
    std::fs::create_dir_all(&full_dir).expect("dir");
    match end_to_end(&full_dir, None) {
        Ok(full) => {
            report(9, criterion_9(&full), &mut failures);
            report(10, criterion_10(&full, root.path()), &mut failures);
            report(11, criterion_11(&full, root.path()), &mut failures);
        }
        Err(e) => {
            for id in [9, 10, 11] {
                report(id, Err(e.clone()), &mut failures);
            }
        }
    }
    // Criteria 3–5 print after 6–8; sort the summary.
    failures.sort_unstable();
    if failures.is_empty() {
        println!("all 11 criteria passed");
    } else {
        println!("failed criteria: {failures:?}");
        std::process::exit(1);
    }
}
