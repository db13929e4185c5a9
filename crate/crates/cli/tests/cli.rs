use std::path::Path;
use std::process::{Command, Output};

use mnc::evaluation::ground_truth_predictions;
use mnc::inference::save_predictions;
use mnc::synth::load_dataset;

fn mnc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mnc")).args(args).output().expect("run mnc")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const DATA_SPEC: &str = "num_scenes = 4\nwidth = 40\nheight = 40\nmin_size = 10.0\nmax_size = 18.0\nmax_instances = 2\nmin_visible_pixels = 16\n";

const MODEL: &str = r#"
backbone = [{ out_channels = 4, kernel = 3, stride = 2 }, { out_channels = 8, kernel = 3, stride = 2 }]
rpn_channels = 8
anchor_scales = [12.0, 20.0]
mask_resolution = 8
warp_size = 8
mask_hidden = 16
stage3_hidden = 8
proposal_count = 30
anchors_per_image = 64
rois_per_image = 16
schedule = { phases = [{ lr = 0.01, iters = 30 }] }
"#;

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

fn path(dir: &Path, name: &str) -> String {
    dir.join(name).to_str().unwrap().to_string()
}

#[test]
fn usage_errors_exit_with_2() {
    let o = mnc(&["frobnicate"]);
    assert_eq!(code(&o), 2);
    assert_eq!(code(&mnc(&[])), 2);
    let o = mnc(&["train"]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    assert!(stderr(&o).contains("--dataset"));
    assert!(stderr(&o).contains("status: 2"));
    assert_eq!(code(&mnc(&["train", "--stages", "4"])), 2);
    assert_eq!(code(&mnc(&["--help"])), 0);
}

#[test]
fn bad_files_exit_with_1_and_still_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "bad.toml", "mask_resolution = 1\n");
    let data = write(dir.path(), "data.bin", "not a dataset");
    let o = mnc(&["train", "--config", &cfg, "--dataset", &data, "--out", &path(dir.path(), "m.ckpt")]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("--- run report ---"));
    assert!(stderr(&o).contains("status: 1"));
    let o = mnc(&["eval", "--dataset", &data, "--predictions", &data]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("parse error"), "{}", stderr(&o));
}

#[test]
fn pipeline_runs_and_is_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let spec = write(d, "spec.toml", DATA_SPEC);
    let model = write(d, "model.toml", MODEL);
    let run = |tag: &str| {
        let data = path(d, &format!("data{tag}.bin"));
        let ckpt = path(d, &format!("m{tag}.ckpt"));
        let preds = path(d, &format!("p{tag}.txt"));
        let report = path(d, &format!("r{tag}.toml"));
        let o = mnc(&["gendata", "--config", &spec, "--seed", "3", "--out", &data]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        let o = mnc(&["train", "--config", &model, "--dataset", &data, "--out", &ckpt, "--seed", "1", "--stages", "5"]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        assert!(stderr(&o).contains("last loss"));
        let o = mnc(&["infer", "--checkpoint", &ckpt, "--dataset", &data, "--out", &preds]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        let o = mnc(&["eval", "--dataset", &data, "--predictions", &preds, "--out", &report]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        assert!(stdout(&o).contains("mAP^r@0.5 = "));
        [data, ckpt.clone(), format!("{ckpt}.log"), preds, report].map(|p| std::fs::read(p).unwrap())
    };
    let a = run("a");
    let b = run("b");
    for (x, y) in a.iter().zip(&b) {
        assert!(x == y);
    }
    let log = String::from_utf8(a[2].clone()).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines[0], "# iter L1 L2 L3 total lr");
    assert_eq!(lines.len(), 31);
    assert_eq!(lines[1].split(' ').count(), 6);
    // --iters rescales the schedule
    let ckpt = path(d, "short.ckpt");
    let o = mnc(&["train", "--config", &model, "--dataset", &path(d, "dataa.bin"), "--out", &ckpt, "--iters", "7"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(std::fs::read_to_string(format!("{ckpt}.log")).unwrap().lines().count(), 8);
}

#[test]
fn eval_of_ground_truth_prints_perfect_scores() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let spec = write(d, "spec.toml", DATA_SPEC);
    let data = path(d, "data.bin");
    assert_eq!(code(&mnc(&["gendata", "--config", &spec, "--out", &data])), 0);
    let scenes = load_dataset(&data).unwrap().scenes;
    let preds = path(d, "gt.txt");
    save_predictions(&preds, &ground_truth_predictions(&scenes)).unwrap();
    let o = mnc(&["eval", "--dataset", &data, "--predictions", &preds]);
    assert_eq!(code(&o), 0);
    let out = stdout(&o);
    assert!(out.contains("mAP^r@0.5 = 1.000"), "{out}");
    assert!(out.contains("mAP^r@0.7 = 1.000"));
    assert!(out.contains("map_b_50 = 1.000000"));
}

#[test]
fn bench_prints_the_six_segments() {
    let dir = tempfile::tempdir().unwrap();
    let model = write(dir.path(), "model.toml", MODEL);
    let o = mnc(&["bench", "--config", &model, "--iters", "2"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = stdout(&o);
    let header = out.lines().next().unwrap();
    let names: Vec<&str> = ["conv", "stage 2", "stage 3", "stage 4", "stage 5", "others"].to_vec();
    let mut pos = 0;
    for n in names {
        let at = header[pos..].find(n).unwrap_or_else(|| panic!("{n} missing from {header}"));
        pos += at + n.len();
    }
    assert!(out.lines().nth(1).unwrap().starts_with("s/image"));
}
