use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_stereo-nvs"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(out.status.success(), "{args:?} failed:\n{}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SMALL: &str = r#"{
  "renderer": {"samples": 8, "hidden": 8},
  "train": {"iterations": 2, "rays_per_batch": 64}
}"#;

/// A 32x32 five-view dataset plus a small-training config.
fn setup(dir: &Path) -> (std::path::PathBuf, std::path::PathBuf) {
    let data = dir.join("data");
    ok(&["gen", "--out", s(&data), "--views", "5", "--res", "32x32"]);
    let cfg = dir.join("small.json");
    std::fs::write(&cfg, SMALL).unwrap();
    (data, cfg)
}

#[test]
fn help_lists_every_subcommand() {
    let out = ok(&["--help"]);
    let text = String::from_utf8(out.stdout).unwrap();
    for sub in ["gen", "stereo", "volumes", "train", "render", "eval", "ablate", "selftest"] {
        assert!(text.contains(sub), "missing {sub}");
    }
}

#[test]
fn selftest_passes() {
    let out = ok(&["selftest"]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.lines().filter(|l| l.starts_with("PASS")).count() >= 8);
    assert!(!text.contains("FAIL"));
}

#[test]
fn unknown_config_key_exits_1_and_names_it() {
    let dir = tempfile::tempdir().unwrap();
    let (data, _) = setup(dir.path());
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, r#"{"train": {"learning_rat": 0.1}}"#).unwrap();
    let out = run(&["train", "--data", s(&data), "--out", s(&dir.path().join("m.ckpt")), "--config", s(&cfg)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rat"));
}

#[test]
fn usage_and_data_errors_have_distinct_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(&["gen"]).status.code(), Some(1));
    assert_eq!(run(&["gen", "--out", s(&dir.path().join("g")), "--views", "2"]).status.code(), Some(1));
    let missing = dir.path().join("nope");
    let out = run(&["stereo", "--data", s(&missing), "--out", s(&dir.path().join("s"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn gen_train_eval_render_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (data, cfg) = setup(dir.path());
    let ckpt = dir.path().join("model.ckpt");
    ok(&["train", "--data", s(&data), "--out", s(&ckpt), "--config", s(&cfg)]);
    let log = std::fs::read_to_string(dir.path().join("model.ckpt.log.csv")).unwrap();
    assert_eq!(log.lines().count(), 3);

    // Same inputs, same bytes.
    let again = dir.path().join("again.ckpt");
    ok(&["train", "--data", s(&data), "--out", s(&again), "--config", s(&cfg)]);
    assert_eq!(std::fs::read(&ckpt).unwrap(), std::fs::read(&again).unwrap());

    let resumed = dir.path().join("resumed.ckpt");
    ok(&["train", "--resume", s(&ckpt), "--out", s(&resumed), "--iterations", "3"]);
    assert_eq!(std::fs::read_to_string(dir.path().join("resumed.ckpt.log.csv")).unwrap().lines().count(), 2);

    let csv = dir.path().join("metrics.csv");
    ok(&["eval", "--ckpt", s(&ckpt), "--data", s(&data), "--out", s(&csv)]);
    let text = std::fs::read_to_string(&csv).unwrap();
    assert!(text.starts_with("view,psnr,ssim,abs,are,rmse,baseline_psnr"));
    assert!(text.lines().nth(1).unwrap().starts_with("3,"));

    let manifest: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(data.join("manifest.json")).unwrap()).unwrap();
    let pose = dir.path().join("pose.json");
    std::fs::write(&pose, manifest["views"][3]["pose"].to_string()).unwrap();
    let prefix = dir.path().join("novel");
    ok(&["render", "--ckpt", s(&ckpt), "--pose", s(&pose), "--out", s(&prefix)]);
    for suffix in [".ppm", "_depth.pfm", "_opacity.pfm"] {
        assert!(dir.path().join(format!("novel{suffix}")).exists(), "{suffix}");
    }
}

#[test]
fn stereo_and_volume_dumps() {
    let dir = tempfile::tempdir().unwrap();
    let (data, _) = setup(dir.path());
    let st = dir.path().join("stereo");
    ok(&["stereo", "--data", s(&data), "--out", s(&st)]);
    for name in ["disp_000_L.pfm", "depth_004_R.pfm", "mask_002_L.pfm"] {
        assert!(st.join(name).exists(), "{name}");
    }
    let vol = dir.path().join("vol");
    ok(&["volumes", "--data", s(&data), "--view", "1", "--out", s(&vol)]);
    assert!(vol.join("stage0_depth_L.pfm").exists());
    assert!(vol.join("stage2_depth_R.ppm").exists());
    let slices = std::fs::read_dir(&vol)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().starts_with("stage0_cost_L_"))
        .count();
    assert_eq!(slices, 48);
}

#[test]
fn ablate_writes_all_five_rows() {
    let dir = tempfile::tempdir().unwrap();
    let (data, cfg) = setup(dir.path());
    let table = dir.path().join("ablation.csv");
    ok(&["ablate", "--data", s(&data), "--out", s(&table), "--config", s(&cfg), "--iterations", "1"]);
    let text = std::fs::read_to_string(&table).unwrap();
    assert_eq!(text.lines().count(), 6);
    assert!(text.lines().last().unwrap().starts_with("+stereo_loss,true,true,true,true,"));
}
