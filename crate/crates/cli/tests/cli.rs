use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sl4d_core::finetune::{load_recon, relight, save_recon};
use sl4d_core::metrics::{depth_metrics, image_metrics};
use sl4d_core::render::render_scene;
use sl4d_core::rng::{stream, SeedTree};
use sl4d_core::scene::load_scene;
use sl4d_core::{FreePatternVars, LedModel, NoiseModel, PatternShape, ReconMaps, Rig, RigGeometry};

const TINY: &str = r#"
budget = 6
n_sample = 60
n_bin = 20
resolution = [4, 4]
holdout = 1
[optimizer]
iters = 5
[finetune]
iters = 10
"#;

fn sl4d(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sl4d"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn run_ok(args: &[&str]) {
    let out = sl4d(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn config(dir: &Path, text: &str) -> String {
    let p = dir.join("run.toml");
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_owned()
}

fn files(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_owned()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(root).unwrap().to_owned());
            }
        }
    }
    out.sort();
    out
}

fn same_tree(a: &Path, b: &Path) {
    let fa = files(a);
    assert_eq!(fa, files(b));
    for f in fa {
        assert!(fs::read(a.join(&f)).unwrap() == fs::read(b.join(&f)).unwrap(), "{} differs", f.display());
    }
}

#[test]
fn scene_gen_writes_reloadable_deterministic_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), &format!("{TINY}\n[scene]\nkind = 'plane'\n"));
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    run_ok(&["--config", &cfg, "--out", a.to_str().unwrap(), "--seed", "4", "scene-gen"]);
    run_ok(&["--config", &cfg, "--out", b.to_str().unwrap(), "--seed", "4", "scene-gen"]);
    same_tree(&a.join("scene"), &b.join("scene"));
    assert!(a.join("scene/depth.f32").exists() && a.join("config.toml").exists());
    let s = load_scene(&a.join("scene")).unwrap();
    assert_eq!((s.width, s.height), (4, 4));
    let raw = fs::read(a.join("scene/depth.f32")).unwrap();
    let back: Vec<u8> = s.depth.iter().flat_map(|v| v.to_le_bytes()).collect();
    assert_eq!(raw, back);
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let o = out.to_str().unwrap();
    let bad_kind = config(dir.path(), "[scene]\nkind = 'cube'\n");
    let r = sl4d(&["--config", &bad_kind, "--out", o, "scene-gen"]);
    assert_eq!(r.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&r.stderr).contains("cube"));

    let bad_key = config(dir.path(), "budgets = 6\n");
    assert_eq!(sl4d(&["--config", &bad_key, "scene-gen"]).status.code(), Some(2));
    assert_eq!(sl4d(&["frobnicate"]).status.code(), Some(2));

    let tiny = config(dir.path(), TINY);
    assert_eq!(sl4d(&["--config", &tiny, "--out", o, "acquire"]).status.code(), Some(2));
    assert_eq!(sl4d(&["--config", &tiny, "--out", o, "finetune"]).status.code(), Some(2));
    assert_eq!(sl4d(&["--config", &tiny, "--out", o, "eval"]).status.code(), Some(2));
    let r = sl4d(&["--config", &tiny, "--out", o, "ablate", "--axis", "gamma", "--values", "1"]);
    assert_eq!(r.status.code(), Some(2));
    let r = sl4d(&["--config", &tiny, "--out", o, "ablate", "--axis", "n_batch", "--values", "4"]);
    assert_eq!(r.status.code(), Some(2));
}

#[test]
fn acquire_logs_one_line_per_round_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), TINY);
    let mut roots = Vec::new();
    for name in ["a", "b"] {
        let root = dir.path().join(name);
        let o = root.to_str().unwrap();
        run_ok(&["--config", &cfg, "--out", o, "scene-gen"]);
        run_ok(&["--config", &cfg, "--out", o, "acquire"]);
        roots.push(root);
    }
    let log = fs::read_to_string(roots[0].join("acquire/log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);
    let entropy: serde_json::Value = serde_json::from_slice(&fs::read(roots[0].join("acquire/entropy.json")).unwrap()).unwrap();
    assert_eq!(entropy["median"].as_array().unwrap().len(), 3);
    for sub in ["patterns", "captures", "hist"] {
        same_tree(&roots[0].join("acquire").join(sub), &roots[1].join("acquire").join(sub));
    }
}

#[test]
fn noiseless_plane_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(
        dir.path(),
        "budget = 18\nresolution = [8, 8]\nholdout = 2\n[scene]\nkind = 'plane'\n[noise]\nlevel = 0.0\n",
    );
    let root = dir.path().join("o");
    let o = root.to_str().unwrap();
    for cmd in ["scene-gen", "acquire", "finetune", "eval"] {
        run_ok(&["--config", &cfg, "--out", o, cmd]);
    }
    let report: serde_json::Value = serde_json::from_slice(&fs::read(root.join("eval/report.json")).unwrap()).unwrap();
    let rmse = report["depth"]["rmse"].as_f64().unwrap();
    assert!(rmse < 0.5, "rmse {rmse} mm");
    for key in ["rmse", "inlier_pct", "rmse_inliers", "threshold", "count"] {
        assert!(report["depth"][key].is_number(), "{key}");
    }
    assert_eq!(report["relight"].as_array().unwrap().len(), 2);

    // the report equals direct library calls on the written files
    let scene = load_scene(&root.join("scene")).unwrap();
    let recon = load_recon(&root.join("recon")).unwrap();
    let d = depth_metrics(&recon.depth, &scene.depth_f64(), &scene.valid_mask(), 3.0).unwrap();
    assert_eq!(d.rmse, rmse);
    assert_eq!(d.inlier_pct, report["depth"]["inlier_pct"].as_f64().unwrap());
    let rig = Rig::new(RigGeometry::desk(8), LedModel::default()).unwrap();
    let pair = FreePatternVars::random(PatternShape::new(&rig.geom, 1), &mut SeedTree::new(0).rng(stream::HOLDOUT, 1, 0))
        .realize()
        .to_display_precision();
    let gt = render_scene(&rig, &pair, &scene, &NoiseModel::noiseless(), &mut SeedTree::new(0).rng(0, 0, 0)).unwrap();
    let m = image_metrics(&relight(&recon, &rig, &pair).unwrap(), &gt, &scene.valid_mask()).unwrap();
    assert_eq!(m.psnr, report["relight"][1]["psnr"].as_f64().unwrap());
    assert_eq!(m.ssim, report["relight"][1]["ssim"].as_f64().unwrap());

    // rerunning gives the same reconstruction
    let first = root.join("recon-first");
    fs::rename(root.join("recon"), &first).unwrap();
    run_ok(&["--config", &cfg, "--out", o, "finetune"]);
    same_tree(&first, &root.join("recon"));

    // a truncated capture is reported as bad input
    let cap = root.join("acquire/captures/c0003.f32");
    let bytes = fs::read(&cap).unwrap();
    fs::write(&cap, &bytes[..bytes.len() / 2]).unwrap();
    let r = sl4d(&["--config", &cfg, "--out", o, "finetune"]);
    assert_eq!(r.status.code(), Some(2), "{}", String::from_utf8_lossy(&r.stderr));
}

#[test]
fn eval_of_ground_truth_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), &format!("{TINY}\n[noise]\nlevel = 0.0\n"));
    let root = dir.path().join("o");
    let o = root.to_str().unwrap();
    run_ok(&["--config", &cfg, "--out", o, "scene-gen"]);
    let scene = load_scene(&root.join("scene")).unwrap();
    let rig = Rig::new(RigGeometry::desk(4), LedModel::default()).unwrap();
    save_recon(&root.join("recon"), &ReconMaps::from_scene(&scene, &rig)).unwrap();
    run_ok(&["--config", &cfg, "--out", o, "eval"]);
    let report: serde_json::Value = serde_json::from_slice(&fs::read(root.join("eval/report.json")).unwrap()).unwrap();
    assert_eq!(report["depth"]["rmse"].as_f64().unwrap(), 0.0);
    assert!((report["relight_mean"]["ssim"].as_f64().unwrap() - 1.0).abs() < 1e-12);
    assert!(root.join("eval/relight00.png").exists());

    let wrong = ReconMaps::empty(2, 2, 1);
    save_recon(&root.join("recon"), &wrong).unwrap();
    assert_eq!(sl4d(&["--config", &cfg, "--out", o, "eval"]).status.code(), Some(2));
}

#[test]
fn ablate_writes_one_row_per_value_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), TINY);
    let mut csvs = Vec::new();
    for name in ["a", "b"] {
        let root = dir.path().join(name);
        run_ok(&[
            "--config", &cfg, "--out", root.to_str().unwrap(), "ablate", "--axis", "budget", "--values", "3,6", "--seeds", "0,1",
        ]);
        assert!(root.join("ablate/rmse.png").exists() && root.join("ablate/inlier.png").exists());
        csvs.push((
            fs::read_to_string(root.join("ablate/ablate.csv")).unwrap(),
            fs::read_to_string(root.join("ablate/runs.csv")).unwrap(),
        ));
    }
    assert_eq!(csvs[0], csvs[1]);
    assert_eq!(csvs[0].0.lines().count(), 1 + 2);
    assert_eq!(csvs[0].1.lines().count(), 1 + 4);
    assert!(csvs[0].0.starts_with("axis,value,seed,rmse,inlier_pct,rmse_inliers,count"));
}

#[test]
fn coarse_to_fine_ends_at_target_resolution() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), &format!("target_resolution = [8, 8]\n{TINY}"));
    let root = dir.path().join("o");
    let o = root.to_str().unwrap();
    for cmd in ["scene-gen", "acquire", "finetune", "eval"] {
        run_ok(&["--config", &cfg, "--out", o, cmd]);
    }
    assert_eq!(load_scene(&root.join("scene-l1")).unwrap().width, 8);
    let recon = load_recon(&root.join("recon")).unwrap();
    assert_eq!((recon.width, recon.height), (8, 8));
    let log: serde_json::Value = serde_json::from_slice(&fs::read(root.join("recon/finetune.json")).unwrap()).unwrap();
    assert_eq!(log["levels"].as_array().unwrap().len(), 2);
    let report: serde_json::Value = serde_json::from_slice(&fs::read(root.join("eval/report.json")).unwrap()).unwrap();
    assert_eq!(report["resolution"], serde_json::json!([8, 8]));
}
