//! Command-line front end.
//!
//! Exit codes: 0 success, 1 usage or config error, 2 data error, 3 numerical
//! failure (including a failed selftest).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use stereo_nvs::config::PipelineConfig;
use stereo_nvs::costvol::STAGES;
use stereo_nvs::dataset::{Dataset, PoseRecord};
use stereo_nvs::error::Error;
use stereo_nvs::geometry::Camera;
use stereo_nvs::image::{write_heatmap_ppm, write_pfm};
use stereo_nvs::scene::SceneState;
use stereo_nvs::scenegen::{demo_scene, demo_trajectory, generate_dataset, RigParams, DEMO_HEIGHT, DEMO_WIDTH, MIN_VIEWS};
use stereo_nvs::selftest;
use stereo_nvs::stereo::{match_pair, max_disparity_for, stereo_depth, DisparityCalibration};
use stereo_nvs::trainer::{ablate, ablation_csv, evaluate, path_with_suffix, render_novel_view, train, Checkpoint};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

/// Stereo-guided novel view synthesis on small synthetic stereo datasets.
///
/// Configuration values come from the JSON file given with --config
/// (defaults for anything it omits); command-line flags override both.
#[derive(Parser, Debug)]
#[command(name = "stereo-nvs", version)]
struct Cli {
    /// Cap on worker threads (default: one per core).
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic stereo dataset.
    Gen(GenArgs),
    /// Match every stereo pair and write disparity, depth and validity maps.
    Stereo(StereoArgs),
    /// Build the cascade volumes of one view and dump depth maps and cost slices.
    Volumes(VolumesArgs),
    /// Train the renderer; writes a checkpoint and `<out>.log.csv`.
    Train(TrainArgs),
    /// Render a novel view from a checkpoint.
    Render(RenderArgs),
    /// Evaluate held-out views against ground truth.
    Eval(EvalArgs),
    /// Train the toggle ladder and write a comparison table.
    Ablate(AblateArgs),
    /// Run the built-in oracle and invariant checks.
    Selftest,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SceneKind {
    Demo,
}

#[derive(Args, Debug)]
struct GenArgs {
    /// Scene to render.
    #[arg(long, value_enum, default_value = "demo")]
    scene: SceneKind,
    /// Output directory (created if missing).
    #[arg(long)]
    out: PathBuf,
    /// Number of stereo viewpoints.
    #[arg(long, default_value_t = 7)]
    views: usize,
    /// Resolution as WIDTHxHEIGHT.
    #[arg(long, value_parser = parse_resolution, default_value = "96x64")]
    res: (usize, usize),
    /// Texture noise seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct ConfigArgs {
    /// Pipeline configuration (JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct StereoArgs {
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args, Debug)]
struct VolumesArgs {
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Viewpoint whose volumes to build.
    #[arg(long)]
    view: usize,
    /// Sweep the full depth range at stage 0 instead of around the stereo depth.
    #[arg(long)]
    no_dgps: bool,
    /// Output directory.
    #[arg(long, default_value = "volumes")]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Dataset directory; overrides the config's `data`.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Checkpoint path.
    #[arg(long)]
    out: PathBuf,
    /// Overrides `train.iterations`.
    #[arg(long)]
    iterations: Option<usize>,
    /// Continue from this checkpoint (its configuration is used).
    #[arg(long, conflicts_with = "config")]
    resume: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args, Debug)]
struct RenderArgs {
    /// Trained checkpoint.
    #[arg(long)]
    ckpt: PathBuf,
    /// Camera-to-world pose JSON: {"rotation": [[..],[..],[..]], "translation": [x, y, z]}.
    #[arg(long)]
    pose: PathBuf,
    /// Writes PREFIX.ppm, PREFIX_depth.pfm and PREFIX_opacity.pfm.
    #[arg(long)]
    out: PathBuf,
    /// Dataset directory; defaults to the one the checkpoint was trained on.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Trained checkpoint.
    #[arg(long)]
    ckpt: PathBuf,
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Report CSV path.
    #[arg(long)]
    out: PathBuf,
    /// Views to evaluate (default: the checkpoint's held-out views).
    #[arg(long, value_delimiter = ',')]
    views: Option<Vec<usize>>,
}

#[derive(Args, Debug)]
struct AblateArgs {
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Table CSV path.
    #[arg(long)]
    out: PathBuf,
    /// Overrides `train.iterations` for every row.
    #[arg(long)]
    iterations: Option<usize>,
    #[command(flatten)]
    config: ConfigArgs,
}

fn parse_resolution(s: &str) -> Result<(usize, usize), String> {
    let (w, h) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected WIDTHxHEIGHT, got {s:?}"))?;
    let w: usize = w.trim().parse().map_err(|_| format!("bad width in {s:?}"))?;
    let h: usize = h.trim().parse().map_err(|_| format!("bad height in {s:?}"))?;
    if w == 0 || h == 0 {
        return Err("resolution must be positive".into());
    }
    Ok((w, h))
}

/// A failure with its exit code.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) => 1,
            Error::Numerical(_) => 3,
            _ => 2,
        };
        Failure { code, message: e.to_string() }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure { code: 1, message: message.into() }
}

type CliResult<T> = Result<T, Failure>;

fn load_config(args: &ConfigArgs) -> CliResult<PipelineConfig> {
    let mut cfg = match &args.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e).into())
}

fn eye_tag(e: usize) -> char {
    if e == 0 {
        'L'
    } else {
        'R'
    }
}

fn cmd_gen(a: &GenArgs) -> CliResult<()> {
    if a.views < MIN_VIEWS {
        return Err(usage(format!("--views must be at least {MIN_VIEWS}")));
    }
    let (w, h) = a.res;
    if w % 4 != 0 || h % 4 != 0 {
        return Err(usage(format!("--res must be multiples of 4 (the demo uses {DEMO_WIDTH}x{DEMO_HEIGHT})")));
    }
    let scene = match a.scene {
        SceneKind::Demo => demo_scene(a.seed),
    };
    let rig = RigParams::scaled_default(w, h)?;
    let trajectory = demo_trajectory(a.views)?;
    create_dir(&a.out)?;
    let m = generate_dataset(&scene, &trajectory, &rig, a.seed, &a.out)?;
    eprintln!("wrote {} views ({w}x{h}, seed {}) to {}", m.views.len(), a.seed, a.out.display());
    Ok(())
}

fn cmd_stereo(a: &StereoArgs) -> CliResult<()> {
    let cfg = load_config(&a.config)?;
    let ds = Dataset::load(&a.data)?;
    create_dir(&a.out)?;
    for (i, view) in ds.views.iter().enumerate() {
        let max_disp = max_disparity_for(&view.rig, ds.near());
        let m = match_pair(&view.images[0], &view.images[1], &view.rig, max_disp, &cfg.matcher)?;
        for e in 0..2 {
            let tag = eye_tag(e);
            let (depth, mask) = stereo_depth(&m.sequences[e], &m.valid[e], &view.rig);
            write_pfm(&a.out.join(format!("disp_{i:03}_{tag}.pfm")), m.sequences[e].last())?;
            write_pfm(&a.out.join(format!("depth_{i:03}_{tag}.pfm")), &depth)?;
            write_pfm(&a.out.join(format!("mask_{i:03}_{tag}.pfm")), &mask)?;
        }
    }
    eprintln!("matched {} pairs into {}", ds.views.len(), a.out.display());
    Ok(())
}

fn cmd_volumes(a: &VolumesArgs) -> CliResult<()> {
    let mut cfg = load_config(&a.config)?;
    let ds = Dataset::load(&a.data)?;
    if a.view >= ds.views.len() {
        return Err(usage(format!("--view {} out of range (dataset has {} views)", a.view, ds.views.len())));
    }
    if a.no_dgps {
        cfg.train.toggles.dgps = false;
    }
    // Every view takes part so that the requested one has volumes.
    cfg.train.held_out.clear();
    let scene = SceneState::build(&ds, cfg.scene_options(), DisparityCalibration::identity())?;
    create_dir(&a.out)?;
    let view = scene.view(a.view);
    for (e, eye) in view.eyes.iter().enumerate() {
        let tag = eye_tag(e);
        for (s, vol) in eye.volumes.iter().enumerate() {
            write_pfm(&a.out.join(format!("stage{s}_depth_{tag}.pfm")), &vol.depth)?;
            write_heatmap_ppm(&a.out.join(format!("stage{s}_depth_{tag}.ppm")), &vol.depth)?;
            for plane in 0..vol.planes.count {
                write_pfm(&a.out.join(format!("stage{s}_cost_{tag}_{plane:02}.pfm")), &vol.cost_slice(plane))?;
            }
        }
    }
    eprintln!("wrote {STAGES} stages for view {} to {}", a.view, a.out.display());
    Ok(())
}

fn cmd_train(a: &TrainArgs) -> CliResult<()> {
    let (mut cfg, start) = match &a.resume {
        Some(p) => {
            let c = Checkpoint::load(p)?;
            (c.config.clone(), Some(c))
        }
        None => (load_config(&a.config)?, None),
    };
    if a.resume.is_some() && a.config.seed.is_some() {
        return Err(usage("--seed cannot change a resumed run"));
    }
    if let Some(d) = &a.data {
        cfg.data = Some(d.clone());
    }
    if let Some(n) = a.iterations {
        cfg.train.iterations = n;
    }
    cfg.validate()?;
    let data = cfg.data.clone().ok_or_else(|| usage("no dataset: pass --data or set `data` in the config"))?;
    let ds = Dataset::load(&data)?;
    let start = start.map(|mut c| {
        c.config = cfg.clone();
        c
    });
    let run = train(&ds, &cfg, start, Some(&a.out))?;
    if let Some(last) = run.log.last() {
        eprintln!("iteration {} loss {:.6} (seed {})", last.iteration, last.total, cfg.seed);
    }
    eprintln!("wrote {} and {}", a.out.display(), path_with_suffix(&a.out, ".log.csv").display());
    Ok(())
}

fn cmd_render(a: &RenderArgs) -> CliResult<()> {
    let ckpt = Checkpoint::load(&a.ckpt)?;
    let data = a.data.clone().or_else(|| ckpt.config.data.clone()).ok_or_else(|| usage("the checkpoint names no dataset; pass --data"))?;
    let ds = Dataset::load(&data)?;
    let text = std::fs::read_to_string(&a.pose).map_err(|e| Error::io(&a.pose, e))?;
    let record: PoseRecord =
        serde_json::from_str(&text).map_err(|e| Error::Format { kind: "pose", msg: format!("{}: {e}", a.pose.display()) })?;
    let camera = Camera::new(ds.intrinsics(), record.to_pose()?);
    let scene = SceneState::build(&ds, ckpt.config.scene_options(), ckpt.calibration)?;
    let view = render_novel_view(&scene, &ckpt.net, &camera, &ckpt.config)?;
    let ppm = path_with_suffix(&a.out, ".ppm");
    view.image.write_ppm(&ppm)?;
    write_pfm(&path_with_suffix(&a.out, "_depth.pfm"), &view.depth)?;
    write_pfm(&path_with_suffix(&a.out, "_opacity.pfm"), &view.opacity)?;
    eprintln!("wrote {}", ppm.display());
    Ok(())
}

fn cmd_eval(a: &EvalArgs) -> CliResult<()> {
    let ckpt = Checkpoint::load(&a.ckpt)?;
    let ds = Dataset::load(&a.data)?;
    if let Some(bad) = a.views.iter().flatten().find(|&&v| v >= ds.views.len()) {
        return Err(usage(format!("--views: view {bad} not in the dataset")));
    }
    let report = evaluate(&ckpt, &ds, a.views.as_deref())?;
    std::fs::write(&a.out, report.to_csv()).map_err(|e| Error::io(&a.out, e))?;
    let m = report.mean();
    eprintln!(
        "psnr {:.3} (constant-color baseline {:.3})  ssim {:.4}  abs {:.4} m  seed {}",
        m.psnr, m.baseline_psnr, m.ssim, m.abs, ckpt.config.seed
    );
    Ok(())
}

fn cmd_ablate(a: &AblateArgs) -> CliResult<()> {
    let mut cfg = load_config(&a.config)?;
    if let Some(n) = a.iterations {
        cfg.train.iterations = n;
    }
    cfg.validate()?;
    let ds = Dataset::load(&a.data)?;
    let rows = ablate(&ds, &cfg, |row| {
        eprintln!("{:<14} psnr {:.3}  ssim {:.4}  abs {:.4}", row.setting, row.psnr, row.ssim, row.abs);
    })?;
    std::fs::write(&a.out, ablation_csv(&rows)).map_err(|e| Error::io(&a.out, e))?;
    Ok(())
}

fn cmd_selftest() -> CliResult<()> {
    let results = selftest::run_all();
    let mut failed = 0;
    for r in &results {
        println!("{} {:<40} {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
        failed += usize::from(!r.passed);
    }
    println!("{} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        return Err(Failure { code: 3, message: format!("{failed} selftest check(s) failed") });
    }
    Ok(())
}

fn run(cli: &Cli) -> CliResult<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(usage("--threads must be positive"));
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| usage(format!("cannot size the thread pool: {e}")))?;
    }
    match &cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Stereo(a) => cmd_stereo(a),
        Command::Volumes(a) => cmd_volumes(a),
        Command::Train(a) => cmd_train(a),
        Command::Render(a) => cmd_render(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Selftest => cmd_selftest(),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
