use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn hdrgs(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hdrgs"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn gen_scene(dir: &Path) {
    let o = hdrgs(&["gen-scene", "--seed", "2", "--gaussians", "6", "--size", "12", "--views", "3", "--out-dir", dir.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

fn dir_contents(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect();
    v.sort();
    v
}

/// A scene and an untrained checkpoint written by a zero-iteration run.
fn scene_and_checkpoint(root: &Path) -> (String, String) {
    let scene = root.join("scene");
    gen_scene(&scene);
    let ck = root.join("model.bin");
    let o = hdrgs(&["train", "--scene", scene.to_str().unwrap(), "--out", ck.to_str().unwrap(), "--iterations", "0"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    (scene.to_str().unwrap().into(), ck.to_str().unwrap().into())
}

#[test]
fn gen_scene_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    gen_scene(&a);
    gen_scene(&b);
    let (ca, cb) = (dir_contents(&a), dir_contents(&b));
    assert!(ca.iter().any(|(n, _)| n == "scene.manifest"));
    assert!(ca.iter().any(|(n, _)| n.ends_with(".ppm")));
    assert!(ca.iter().any(|(n, _)| n.ends_with(".pfm")));
    assert_eq!(ca, cb);
}

#[test]
fn gen_scene_rejects_too_few_views() {
    let tmp = tempfile::tempdir().unwrap();
    let o = hdrgs(&["gen-scene", "--views", "2", "--out-dir", tmp.path().join("s").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn train_writes_checkpoint_log_and_snapshots() {
    let tmp = tempfile::tempdir().unwrap();
    let scene = tmp.path().join("scene");
    gen_scene(&scene);
    let ck = tmp.path().join("m.bin");
    let o = hdrgs(&[
        "train",
        "--scene",
        scene.to_str().unwrap(),
        "--out",
        ck.to_str().unwrap(),
        "--iterations",
        "4",
        "--checkpoint-every",
        "2",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(ck.exists());
    assert!(tmp.path().join("m.bin.iter2").exists());
    let log = fs::read_to_string(tmp.path().join("m.bin.csv")).unwrap();
    assert_eq!(log.lines().next(), Some("iter,rec,cons,unit,total,psnr_ldr,psnr_hdr"));
    assert_eq!(log.lines().count(), 5);
}

#[test]
fn render_branches_writes_every_intermediate() {
    let tmp = tempfile::tempdir().unwrap();
    let (scene, ck) = scene_and_checkpoint(tmp.path());
    let out = tmp.path().join("renders");
    let o = hdrgs(&[
        "render", "--checkpoint", &ck, "--scene", &scene, "--view", "view_00", "--exposure", "2", "--mode", "branches",
        "--out-dir", out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let files = dir_contents(&out);
    assert_eq!(files.len(), 10);
    assert_eq!(files.iter().filter(|(n, _)| n.ends_with(".pfm")).count(), 3);
    assert_eq!(files.iter().filter(|(n, _)| n.ends_with(".ppm")).count(), 7);
}

#[test]
fn render_rejects_unknown_view_and_bad_exposure() {
    let tmp = tempfile::tempdir().unwrap();
    let (scene, ck) = scene_and_checkpoint(tmp.path());
    let out = tmp.path().join("r");
    let o = hdrgs(&["render", "--checkpoint", &ck, "--scene", &scene, "--view", "nope", "--out-dir", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let o = hdrgs(&["render", "--checkpoint", &ck, "--scene", &scene, "--view", "view_00", "--exposure", "0", "--out-dir", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn eval_reports_every_group() {
    let tmp = tempfile::tempdir().unwrap();
    let (scene, ck) = scene_and_checkpoint(tmp.path());
    let o = hdrgs(&["eval", "--checkpoint", &ck, "--scene", &scene]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    for group in ["LDR-OE", "LDR-NE", "HDR (mu-law)"] {
        assert!(text.contains(group), "{text}");
    }
    assert_eq!(text.matches("mean").count(), 3);
}

#[test]
fn densify_stats_writes_csv() {
    let tmp = tempfile::tempdir().unwrap();
    let (scene, ck) = scene_and_checkpoint(tmp.path());
    let csv = tmp.path().join("stats.csv");
    let o = hdrgs(&["densify-stats", "--checkpoint", &ck, "--scene", &scene, "--out-csv", csv.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("spearman(avg_grad, 1/deviation)"));
    let rows = fs::read_to_string(csv).unwrap();
    assert_eq!(rows.lines().next(), Some("index,avg_grad,deviation,s_a,densified"));
    assert!(rows.lines().count() > 1);
}

#[test]
fn gradcheck_passes_and_detects_injected_fault() {
    let o = hdrgs(&["gradcheck", "--max-coords", "6"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("max relative error"));

    let o = hdrgs(&["gradcheck", "--max-coords", "6", "--params", "g", "--inject-fault", "g:1.01"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn usage_errors_and_missing_files() {
    assert_eq!(hdrgs(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(hdrgs(&["--help"]).status.code(), Some(0));
    assert_eq!(hdrgs(&["gradcheck", "--params", "nonsense"]).status.code(), Some(1));
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("missing.bin");
    let o = hdrgs(&["eval", "--checkpoint", missing.to_str().unwrap(), "--scene", tmp.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
}
