use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use mnc::cascade::{CascadeConfig, Model, Trainer};
use mnc::evaluation::{coco_thresholds, evaluate};
use mnc::gradcheck::{end_to_end_suite, loss_suite, masking_suite, roi_warp_suite, GradCheck};
use mnc::inference::{detect_timed, load_predictions, predict_scenes, save_predictions, SegmentTimes};
use mnc::synth::{generate_dataset, load_dataset, save_dataset, Dataset, DatasetSpec};

use crate::report::RunReport;
use crate::Options;

/// A required flag is missing; reported with exit status 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn require<'a>(value: &'a Option<PathBuf>, flag: &str, command: &str) -> Result<&'a Path> {
    match value {
        Some(p) => Ok(p),
        None => Err(UsageError(format!("{command} needs {flag} PATH")).into()),
    }
}

/// `path` with `suffix` appended to its file name.
pub fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn read_cascade_config(path: &Path) -> Result<CascadeConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    CascadeConfig::from_toml(&text).with_context(|| format!("in {}", path.display()))
}

/// `--config` if given, else the config saved next to the checkpoint, else
/// the defaults.
fn cascade_config(opts: &Options) -> Result<CascadeConfig> {
    if let Some(p) = &opts.config {
        return read_cascade_config(p);
    }
    if let Some(ckpt) = &opts.checkpoint {
        let echo = sibling(ckpt, ".toml");
        if echo.exists() {
            return read_cascade_config(&echo);
        }
    }
    Ok(CascadeConfig::default())
}

fn read_dataset(path: &Path) -> Result<Dataset> {
    load_dataset(path).with_context(|| format!("loading dataset {}", path.display()))
}

fn check_compatible(cfg: &CascadeConfig, data: &Dataset) -> Result<()> {
    for s in &data.scenes {
        if s.image.shape()[0] != cfg.in_channels {
            bail!("scene {} has {} channels, the model expects {}", s.id, s.image.shape()[0], cfg.in_channels);
        }
        if let Some(g) = s.instances.iter().find(|g| g.category > cfg.num_categories) {
            bail!("scene {} has category {} beyond num_categories {}", s.id, g.category, cfg.num_categories);
        }
    }
    Ok(())
}

const WARP_TRIALS: usize = 100;
const WARP_FEATURE_PROBES: usize = 16;
const MASKING_TRIALS: usize = 10;
const E2E_STEP: f64 = 1e-5;
const E2E_FLOOR: f64 = 1e-6;

pub fn gradcheck(opts: &Options, report: &mut RunReport) -> Result<bool> {
    let seed = opts.seed.unwrap_or(0);
    let trials = opts.iters.unwrap_or(WARP_TRIALS);
    let mut rows: Vec<(&str, GradCheck, f64)> = Vec::new();

    let t = Instant::now();
    let warp = roi_warp_suite(trials, WARP_FEATURE_PROBES, seed)?;
    rows.push(("roi_warp.box", warp.box_grad, 1e-4));
    rows.push(("roi_warp.features", warp.feature_grad, 1e-6));
    report.time("roi_warp", t.elapsed());

    let t = Instant::now();
    rows.push(("masking", masking_suite(MASKING_TRIALS, seed)?, 1e-4));
    rows.push(("loss", loss_suite(seed)?, 1e-6));
    report.time("masking+loss", t.elapsed());

    let t = Instant::now();
    let e2e = end_to_end_suite(seed, E2E_STEP, E2E_FLOOR)?;
    rows.push(("end_to_end", e2e.overall, 1e-3));
    report.time("end_to_end", t.elapsed());

    let mut text = format!("{:<18} {:>8} {:>12} {:>10}  status\n", "suite", "checked", "max_rel_err", "threshold");
    let mut ok = true;
    for (name, check, threshold) in &rows {
        let pass = check.max_relative_error <= *threshold && check.checked > 0;
        ok &= pass;
        text.push_str(&format!(
            "{:<18} {:>8} {:>12.3e} {:>10.1e}  {}\n",
            name,
            check.checked,
            check.max_relative_error,
            threshold,
            if pass { "ok" } else { "FAIL" }
        ));
    }
    for (name, check) in &e2e.params {
        text.push_str(&format!("  {:<16} {:>8} {:>12.3e}\n", name, check.checked, check.max_relative_error));
    }
    print!("{text}");
    if let Some(out) = &opts.out {
        std::fs::write(out, &text).with_context(|| format!("writing {}", out.display()))?;
    }
    Ok(ok)
}

pub fn gendata(opts: &Options, report: &mut RunReport) -> Result<bool> {
    let out = require(&opts.out, "--out", "gendata")?;
    let mut spec = match &opts.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            DatasetSpec::from_toml(&text).with_context(|| format!("in {}", p.display()))?
        }
        None => DatasetSpec::default(),
    };
    if let Some(seed) = opts.seed {
        spec.seed = seed;
    }
    report.config = Some(spec.to_toml());
    let t = Instant::now();
    let data = generate_dataset(&spec)?;
    report.time("generate", t.elapsed());
    let t = Instant::now();
    save_dataset(out, &data).with_context(|| format!("writing {}", out.display()))?;
    report.time("write", t.elapsed());
    let instances: usize = data.scenes.iter().map(|s| s.instances.len()).sum();
    println!("wrote {} scenes with {instances} instances to {}", data.scenes.len(), out.display());
    Ok(true)
}

const CHECKPOINT_EVERY: usize = 1000;
const PROGRESS_EVERY: usize = 500;

pub fn train(opts: &Options, report: &mut RunReport) -> Result<bool> {
    let data_path = require(&opts.dataset, "--dataset", "train")?;
    let out = require(&opts.out, "--out", "train")?;
    let mut cfg = match &opts.config {
        Some(p) => read_cascade_config(p)?,
        None => CascadeConfig::default(),
    };
    if let Some(s) = &opts.stages {
        cfg.train_stages = s.parse()?;
    }
    if let Some(n) = opts.iters {
        if n == 0 {
            bail!("--iters must be positive");
        }
        cfg.schedule = cfg.schedule.scaled_to(n);
    }
    cfg.validate()?;
    report.config = Some(cfg.to_toml());
    let seed = opts.seed.unwrap_or(0);

    let t = Instant::now();
    let data = read_dataset(data_path)?;
    check_compatible(&cfg, &data)?;
    if data.scenes.is_empty() {
        bail!("dataset {} has no scenes", data_path.display());
    }
    report.time("load", t.elapsed());

    std::fs::write(sibling(out, ".toml"), cfg.to_toml()).context("writing the config echo")?;
    let log_path = sibling(out, ".log");
    let mut log = BufWriter::new(File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?);
    writeln!(log, "# iter L1 L2 L3 total lr")?;

    let total = cfg.schedule.total_iters();
    let mut trainer = Trainer::new(Model::new(cfg, seed)?, seed);
    let start = Instant::now();
    let mut window = 0.0;
    let mut on_step = |it: usize, loss: &mnc::cascade::LossReport, lr: f64| {
        writeln!(log, "{it} {:.8} {:.8} {:.8} {:.8} {lr}", loss.l1, loss.l2, loss.l3, loss.total)?;
        if !loss.total.is_finite() {
            return Err(mnc::Error::Contract(format!("loss became {} at iteration {it}", loss.total)));
        }
        report.record_loss(loss);
        window += loss.total;
        let done = it + 1;
        if done % PROGRESS_EVERY == 0 {
            eprintln!(
                "iter {done}/{total} mean loss {:.4} ({:.0}s)",
                window / PROGRESS_EVERY as f64,
                start.elapsed().as_secs_f64()
            );
            window = 0.0;
        }
        Ok(())
    };
    while trainer.iteration() < total {
        let chunk = CHECKPOINT_EVERY.min(total - trainer.iteration());
        trainer.run(&data.scenes, chunk, &mut on_step)?;
        if trainer.iteration() < total {
            trainer.model.params.save(out).with_context(|| format!("writing {}", out.display()))?;
        }
    }
    report.time("train", start.elapsed());
    log.flush()?;
    trainer.model.params.save(out).with_context(|| format!("writing {}", out.display()))?;
    println!("trained {total} iterations; checkpoint {}, loss log {}", out.display(), log_path.display());
    Ok(true)
}

fn load_model(opts: &Options, command: &str, random_ok: bool) -> Result<Model> {
    let cfg = cascade_config(opts)?;
    match &opts.checkpoint {
        Some(p) => Model::load(cfg, p).with_context(|| format!("loading checkpoint {}", p.display())),
        None if random_ok => Ok(Model::new(cfg, opts.seed.unwrap_or(0))?),
        None => Err(UsageError(format!("{command} needs --checkpoint PATH")).into()),
    }
}

fn add_segments(report: &mut RunReport, times: &SegmentTimes) {
    for (name, secs) in SegmentTimes::NAMES.iter().zip(times.seconds()) {
        report.time(name, std::time::Duration::from_secs_f64(secs));
    }
}

pub fn infer(opts: &Options, report: &mut RunReport) -> Result<bool> {
    let data_path = require(&opts.dataset, "--dataset", "infer")?;
    let out = require(&opts.out, "--out", "infer")?;
    let model = load_model(opts, "infer", false)?;
    report.config = Some(model.config.to_toml());
    let data = read_dataset(data_path)?;
    check_compatible(&model.config, &data)?;
    let mut times = SegmentTimes::default();
    let preds = predict_scenes(&model, &data.scenes, |_, t| times.add(t))?;
    add_segments(report, &times);
    save_predictions(out, &preds).with_context(|| format!("writing {}", out.display()))?;
    println!("wrote {} predictions for {} scenes to {}", preds.len(), data.scenes.len(), out.display());
    Ok(true)
}

pub fn eval(opts: &Options, report: &mut RunReport) -> Result<bool> {
    let data_path = require(&opts.dataset, "--dataset", "eval")?;
    let pred_path = require(&opts.predictions, "--predictions", "eval")?;
    let data = read_dataset(data_path)?;
    let preds = load_predictions(pred_path).with_context(|| format!("loading predictions {}", pred_path.display()))?;
    let num_categories = match &data.spec {
        Some(spec) => spec.num_categories(),
        None => data.scenes.iter().flat_map(|s| s.instances.iter().map(|g| g.category)).max().unwrap_or(0),
    };
    let t = Instant::now();
    let result = evaluate(&preds, &data.scenes, num_categories, &coco_thresholds())?;
    report.time("evaluate", t.elapsed());
    let kv = result.to_key_values();
    println!("{}", result.to_text());
    print!("{kv}");
    if let Some(out) = &opts.out {
        std::fs::write(out, &kv).with_context(|| format!("writing {}", out.display()))?;
    }
    Ok(true)
}

const BENCH_IMAGES: usize = 10;

pub fn bench(opts: &Options, report: &mut RunReport) -> Result<bool> {
    let model = load_model(opts, "bench", true)?;
    report.config = Some(model.config.to_toml());
    let n = opts.iters.unwrap_or(BENCH_IMAGES).max(1);
    let scenes = match &opts.dataset {
        Some(p) => read_dataset(p)?.scenes,
        None => {
            let spec = DatasetSpec {
                num_scenes: n,
                seed: opts.seed.unwrap_or(0),
                ..DatasetSpec::default()
            };
            generate_dataset(&spec)?.scenes
        }
    };
    if scenes.is_empty() {
        bail!("no images to time");
    }
    // one untimed pass to settle allocations
    detect_timed(&model, &scenes[0].image)?;
    let mut times = SegmentTimes::default();
    let count = n.min(scenes.len());
    for s in &scenes[..count] {
        times.add(&detect_timed(&model, &s.image)?.1);
    }
    add_segments(report, &times);
    let per_image = times.seconds().map(|s| s / count as f64);
    let mut header = format!("{:<10}", "");
    let mut row = format!("{:<10}", "s/image");
    for (name, s) in SegmentTimes::NAMES.iter().zip(per_image) {
        header.push_str(&format!(" {name:>9}"));
        row.push_str(&format!(" {s:>9.4}"));
    }
    header.push_str(&format!(" {:>9}", "total"));
    row.push_str(&format!(" {:>9.4}", per_image.iter().sum::<f64>()));
    println!("{header}\n{row}\n({count} images)");
    Ok(true)
}
