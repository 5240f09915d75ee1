use std::path::Path;
use std::process::{Command, Output};

use image::{Rgb, RgbImage};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dehazesnn")).args(args).output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn write_png(path: &Path, w: u32, h: u32, f: impl Fn(u32, u32) -> [u8; 3]) {
    RgbImage::from_fn(w, h, |x, y| Rgb(f(x, y))).save(path).unwrap();
}

fn pattern(seed: u32) -> impl Fn(u32, u32) -> [u8; 3] {
    move |x, y| [((x * 7 + y * 3 + seed * 11) % 256) as u8, ((x * y + seed) % 251) as u8, ((x + 2 * y + 40) % 256) as u8]
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Clean images under `dir/clean`, paired via `synth` under `dir/data`.
fn dataset(dir: &Path, count: u32, w: u32, h: u32) {
    let clean = dir.join("clean");
    std::fs::create_dir_all(&clean).unwrap();
    for k in 0..count {
        write_png(&clean.join(format!("img{k}.png")), w, h, pattern(k));
    }
    let o = run(&["synth", p(&clean), p(&dir.join("data")), "--t", "0.9", "--a", "0.8"]);
    assert!(o.status.success(), "{}", stderr(&o));
}

fn tiny_config(dir: &Path, extra: &str) -> std::path::PathBuf {
    let path = dir.join("run.toml");
    let text = format!(
        "[model]\nvariant = \"tiny\"\n\n[data]\ntrain_dir = \"data\"\nval_dir = \"data\"\npatch_size = 32\n\n\
         [optim]\nsteps = 6\nbatch_size = 2\n\n[run]\ncheckpoint_dir = \"ck\"\neval_every = 3\ncheckpoint_every = 3\n{extra}"
    );
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn train_writes_checkpoint_and_log() {
    let dir = tempfile::tempdir().unwrap();
    dataset(dir.path(), 2, 40, 36);
    let cfg = tiny_config(dir.path(), "");
    let o = run(&["train", p(&cfg)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let ck = dir.path().join("ck");
    assert!(ck.join("latest.dsnn").is_file());
    let log = std::fs::read_to_string(ck.join("metrics.ndjson")).unwrap();
    assert_eq!(log.lines().count(), 6);
    assert!(log.lines().nth(2).unwrap().contains("\"psnr\":"));

    // resuming a finished run is a no-op that keeps the log intact
    let o = run(&["train", p(&cfg), "--resume"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(std::fs::read_to_string(ck.join("metrics.ndjson")).unwrap(), log);

    let o = run(&["eval", p(&ck.join("latest.dsnn")), p(&dir.path().join("data"))]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("img0") && out.contains("mean"), "{out}");
    assert!(out.lines().last().unwrap().starts_with("{\"images\":"), "{out}");
}

#[test]
fn invalid_alpha_is_rejected_by_name() {
    let dir = tempfile::tempdir().unwrap();
    dataset(dir.path(), 1, 32, 32);
    let cfg = tiny_config(dir.path(), "\n[loss]\nalpha1 = 1.5\n");
    let o = run(&["train", p(&cfg)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("loss.alpha1"), "{}", stderr(&o));
    assert!(!dir.path().join("ck").exists());
}

#[test]
fn missing_train_dir_fails_before_work() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "[model]\nvariant = \"tiny\"\n[run]\ncheckpoint_dir = \"ck\"\n").unwrap();
    let o = run(&["train", p(&cfg)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("data.train_dir"), "{}", stderr(&o));

    std::fs::write(&cfg, "[data]\ntrain_dir = \"nowhere\"\n[run]\ncheckpoint_dir = \"ck\"\n").unwrap();
    let o = run(&["train", p(&cfg)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("nowhere"), "{}", stderr(&o));
    assert!(!dir.path().join("ck").exists());
}

#[test]
fn unknown_config_key_reports_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "[data]\ntrain_dir = \"d\"\n[optim]\nlearnig_rate = 1\n").unwrap();
    let o = run(&["train", p(&cfg)]);
    assert_eq!(o.status.code(), Some(1));
    let e = stderr(&o);
    assert!(e.contains("learnig_rate") && e.contains("line 4"), "{e}");
}

#[test]
fn infer_keeps_odd_sizes_and_rejects_bad_magic() {
    let dir = tempfile::tempdir().unwrap();
    dataset(dir.path(), 1, 32, 32);
    let cfg = tiny_config(dir.path(), "");
    std::fs::write(&cfg, std::fs::read_to_string(&cfg).unwrap().replace("steps = 6", "steps = 1")).unwrap();
    assert!(run(&["train", p(&cfg)]).status.success());
    let ck = dir.path().join("ck").join("latest.dsnn");

    let input = dir.path().join("in.png");
    write_png(&input, 100, 80, pattern(3));
    let output = dir.path().join("out.png");
    let o = run(&["infer", p(&ck), p(&input), p(&output)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let img = image::open(&output).unwrap();
    assert_eq!((img.width(), img.height()), (100, 80));

    let bad = dir.path().join("bad.dsnn");
    let mut bytes = std::fs::read(&ck).unwrap();
    bytes[..4].copy_from_slice(b"XXXX");
    std::fs::write(&bad, bytes).unwrap();
    let o = run(&["infer", p(&bad), p(&input), p(&output)]);
    assert_ne!(o.status.code(), Some(0));
    assert!(stderr(&o).contains("bad checkpoint magic"), "{}", stderr(&o));
}

#[test]
fn synth_identity_and_closed_form() {
    let dir = tempfile::tempdir().unwrap();
    let clean = dir.path().join("clean");
    std::fs::create_dir_all(&clean).unwrap();
    write_png(&clean.join("pat.png"), 23, 17, pattern(5));
    write_png(&clean.join("flat.png"), 8, 8, |_, _| [51, 51, 51]);

    let out = dir.path().join("t1");
    assert!(run(&["synth", p(&clean), p(&out), "--t", "1", "--a", "0.7"]).status.success());
    for name in ["pat.png", "flat.png"] {
        let a = image::open(clean.join(name)).unwrap().to_rgb8();
        let b = image::open(out.join("hazy").join(name)).unwrap().to_rgb8();
        assert_eq!(a.as_raw(), b.as_raw(), "{name}");
        assert_eq!(std::fs::read(clean.join(name)).unwrap(), std::fs::read(out.join("gt").join(name)).unwrap());
    }

    let out = dir.path().join("half");
    assert!(run(&["synth", p(&clean), p(&out), "--t", "0.5", "--a", "1"]).status.success());
    let flat = image::open(out.join("hazy").join("flat.png")).unwrap().to_rgb8();
    assert!(flat.as_raw().iter().all(|&v| v == 153));

    let (a, b) = (dir.path().join("s1"), dir.path().join("s2"));
    for d in [&a, &b] {
        assert!(run(&["synth", p(&clean), p(d), "--t", "0.6", "--seed", "9"]).status.success());
    }
    let bytes = |d: &Path| std::fs::read(d.join("hazy").join("pat.png")).unwrap();
    assert_eq!(bytes(&a), bytes(&b));

    let o = run(&["synth", p(&clean), p(&dir.path().join("x")), "--t", "0"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn cost_report_is_exact_and_validated() {
    let o = run(&["cost", "M", "256", "256"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    let json: serde_json::Value = serde_json::from_str(out.lines().last().unwrap()).unwrap();
    let within = |key: &str, target: f64| (json[key].as_f64().unwrap() / target - 1.0).abs() <= 0.2;
    assert!(within("params", 2.70e6) && within("macs", 26.28e9), "{out}");
    assert!(out.contains("convention"));
    let again = stdout(&run(&["cost", "M", "256", "256"]));
    assert_eq!(out, again);

    let o = run(&["cost", "tiny", "64", "64"]);
    assert!(stdout(&o).contains("MACs         22"), "{}", stdout(&o));

    assert_eq!(run(&["cost", "M", "100", "80"]).status.code(), Some(1));
    assert_eq!(run(&["cost", "XL", "256", "256"]).status.code(), Some(1));
    assert_eq!(run(&["cost", "M"]).status.code(), Some(1));
}

#[test]
fn gradcheck_passes_and_catches_corruption() {
    let o = run(&["gradcheck"]);
    assert!(o.status.success(), "{}", stdout(&o));
    let out = stdout(&o);
    assert!(out.contains("olif_block") && out.contains("snn_block") && out.contains("sk_fusion"));

    let o = run(&["gradcheck", "--corrupt", "gelu"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("gelu"), "{}", stderr(&o));
}
