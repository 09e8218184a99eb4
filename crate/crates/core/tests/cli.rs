use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use attncut::attention::read_bundle;
use attncut::tensor_io::{load_manifest, read_tensor, write_manifest, write_tensor, Tensor};

fn attncut(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_attncut"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn fixtures(dir: &Path, n: usize, seed: u64) -> String {
    let out = dir.join("fx");
    let o = attncut(&[
        "fixtures",
        "--n",
        &n.to_string(),
        "--seed",
        &seed.to_string(),
        "--dims",
        "32",
        "--steps",
        "2",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    out.join("manifest.txt").to_str().unwrap().to_string()
}

fn run(manifest: &str, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["run", "--manifest", manifest, "--out", out.to_str().unwrap()];
    if !extra.contains(&"--r") {
        args.extend(["--r", "32"]);
    }
    args.extend_from_slice(extra);
    attncut(&args)
}

fn mask_files(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    v.sort();
    v
}

#[test]
fn ten_fixture_run_writes_masks_and_reports_iou() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = fixtures(dir.path(), 10, 21);
    let out = dir.path().join("run");
    let o = run(&manifest, &out, &[]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(mask_files(&out.join("masks")).len(), 10);
    let text = stdout(&o);
    assert!(text.contains("masks written: 10/10"), "{text}");
    let iou: f64 = text
        .lines()
        .find_map(|l| l.strip_prefix("IoU"))
        .expect("IoU line")
        .trim()
        .parse()
        .unwrap();
    assert!(iou >= 0.8, "mean IoU {iou}");
    let csv = fs::read_to_string(out.join("report.csv")).unwrap();
    assert!(csv.starts_with("index,acc,iou\n"));
    assert_eq!(csv.lines().filter(|l| l.starts_with(char::is_numeric)).count(), 10);
}

#[test]
fn missing_bundle_fails_one_entry_with_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = fixtures(dir.path(), 10, 22);
    let mut m = load_manifest(&manifest).unwrap();
    m.entries[4].attn = dir.path().join("fx").join("does_not_exist");
    let broken = dir.path().join("broken.txt");
    write_manifest(&m, &broken).unwrap();
    let out = dir.path().join("run");
    let o = run(broken.to_str().unwrap(), &out, &[]);
    assert_eq!(o.status.code(), Some(2));
    let masks = mask_files(&out.join("masks"));
    assert_eq!(masks.len(), 9);
    assert!(!masks.iter().any(|m| m.starts_with("0004_")));
    assert!(stdout(&o).contains("FAILED entry 4"));
    let entries = fs::read_to_string(out.join("entries.csv")).unwrap();
    assert!(entries.lines().any(|l| l.starts_with("4,failed,")));
}

#[test]
fn same_config_twice_gives_identical_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = fixtures(dir.path(), 4, 23);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert!(run(&manifest, &a, &["--workers", "1"]).status.success());
    assert!(run(&manifest, &b, &["--workers", "3"]).status.success());
    let names = mask_files(&a.join("masks"));
    assert_eq!(names, mask_files(&b.join("masks")));
    for n in &names {
        assert_eq!(fs::read(a.join("masks").join(n)).unwrap(), fs::read(b.join("masks").join(n)).unwrap());
    }
    assert_eq!(
        fs::read(a.join("report.csv")).unwrap(),
        fs::read(b.join("report.csv")).unwrap()
    );
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = fixtures(dir.path(), 2, 24);
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, format!("manifest={manifest}\nlambda_phi=0.4\nn_seeds=5\n")).unwrap();
    let out = dir.path().join("run");
    let o = attncut(&[
        "run",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--lambda_phi",
        "0.2",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let resolved = fs::read_to_string(out.join("config.txt")).unwrap();
    assert!(resolved.contains("lambda_phi=0.2\n"));
    assert!(resolved.contains("n_seeds=5\n"));
    assert!(resolved.contains("lambda_psi=2.5\n"));
}

#[test]
fn malformed_config_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "lambda_phi 0.2\n").unwrap();
    let o = attncut(&["run", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 1"));
}

#[test]
fn eval_and_stats_read_run_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = fixtures(dir.path(), 3, 25);
    let out = dir.path().join("run");
    assert!(run(&manifest, &out, &[]).status.success());
    let csv = dir.path().join("eval.csv");
    let o = attncut(&[
        "eval",
        "--manifest",
        &manifest,
        "--masks",
        out.join("masks").to_str().unwrap(),
        "--csv",
        csv.to_str().unwrap(),
    ]);
    assert!(o.status.success());
    assert_eq!(fs::read(&csv).unwrap(), fs::read(out.join("report.csv")).unwrap());

    let o = attncut(&["stats", "--manifest", &manifest]);
    assert!(o.status.success());
    let text = stdout(&o);
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("index,size,cx,cy,contrast,SC,PL"));
    assert_eq!(lines.count(), 3);
}

#[test]
fn invert_writes_a_readable_bundle() {
    let dir = tempfile::tempdir().unwrap();
    let data: Vec<f32> = (0..8 * 8 * 4).map(|i| ((i * 37 % 23) as f32 / 23.0) - 0.5).collect();
    let input = dir.path().join("latent");
    write_tensor(&Tensor::new(vec![8, 8, 4], data).unwrap(), &input).unwrap();
    let out = dir.path().join("bundle");
    let o = attncut(&[
        "invert",
        "--input",
        input.to_str().unwrap(),
        "--steps",
        "5",
        "--predictor",
        "linear:0.01",
        "--out",
        out.to_str().unwrap(),
        "--label",
        "cat",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let (meta, records) = read_bundle(&out).unwrap();
    assert_eq!(meta.steps, 5);
    assert_eq!(meta.label, "cat");
    assert_eq!(records.len(), 5 * meta.layers);
    assert_eq!(read_tensor(out.join("reconstruction")).unwrap().dims(), &[8, 8, 4]);

    let o = attncut(&["invert", "--input", input.to_str().unwrap(), "--predictor", "bogus", "--out", "x"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn train_then_predict_and_decoder_run() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = fixtures(dir.path(), 3, 26);
    let ck = dir.path().join("ck");
    let o = attncut(&[
        "train",
        "--manifest",
        &manifest,
        "--epochs",
        "2",
        "--r",
        "16",
        "--hidden",
        "8",
        "--out",
        ck.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("epoch   2"));

    let mask = dir.path().join("m.pgm");
    let bundle = dir.path().join("fx").join("scene_000");
    let o = attncut(&[
        "predict",
        "--checkpoint",
        ck.to_str().unwrap(),
        "--bundle",
        bundle.to_str().unwrap(),
        "--width",
        "40",
        "--height",
        "20",
        "--r",
        "16",
        "--out",
        mask.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let m = attncut::tensor_io::read_mask(&mask).unwrap();
    assert_eq!((m.width(), m.height()), (40, 20));

    let out = dir.path().join("run");
    let o = run(
        &manifest,
        &out,
        &["--mode", "decoder", "--checkpoint", ck.to_str().unwrap(), "--r", "16"],
    );
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(mask_files(&out.join("masks")).len(), 3);
}
