use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use tristream::config::{HeadKind, NetworkConfig, StrideTriple};
use tristream::detector::DetectionNet;
use tristream::gradcheck::run_all;
use tristream::metrics::MetricsReport;
use tristream::model::ThreeStreamNet;
use tristream::trainer::data::{read_proposals, write_detections};
use tristream::trainer::{
    evaluate, evaluate_detection, gen_synthetic, gen_synthetic_detection, train_classifier, train_detector,
    write_epoch_log, Dataset, DetectionDataset, TrainConfig,
};

use crate::config::{RunConfig, Task};

/// A run that completed but whose numerical checks failed.
#[derive(Debug)]
pub struct CheckFailure(pub String);

impl fmt::Display for CheckFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for CheckFailure {}

fn prepare_out(out: &Path) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let probe = out.join(".write_test");
    fs::write(&probe, b"").with_context(|| format!("{} is not writable", out.display()))?;
    fs::remove_file(probe)?;
    Ok(())
}

fn data_rng(cfg: &RunConfig) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(cfg.seed)
}

/// Train and test splits, from disk when configured, else generated; the
/// generator draws train before test from one seeded stream either way.
fn classification_data(cfg: &RunConfig) -> Result<(Dataset, Option<Dataset>)> {
    let d = &cfg.data;
    let mut rng = data_rng(cfg);
    let train = match &d.train {
        Some(p) => Dataset::load(p)?,
        None => gen_synthetic(&d.synthetic, d.train_size, &mut rng)?,
    };
    let test = match (&d.test, &d.train, d.test_size) {
        (Some(p), _, _) => Some(Dataset::load(p)?),
        (None, None, n) if n > 0 => Some(gen_synthetic(&d.synthetic, n, &mut rng)?),
        _ => None,
    };
    Ok((train, test))
}

fn detection_data(cfg: &RunConfig) -> Result<(DetectionDataset, Option<DetectionDataset>)> {
    let d = &cfg.data;
    let mut rng = data_rng(cfg);
    let train = match &d.train {
        Some(p) => DetectionDataset::load(p)?,
        None => gen_synthetic_detection(&d.synthetic, d.train_size, d.objects, &mut rng)?,
    };
    let test = match (&d.test, &d.train, d.test_size) {
        (Some(p), _, _) => Some(DetectionDataset::load(p)?),
        (None, None, n) if n > 0 => Some(gen_synthetic_detection(&d.synthetic, n, d.objects, &mut rng)?),
        _ => None,
    };
    Ok((train, test))
}

fn pick_split<T>(cfg: &RunConfig, train: T, test: Option<T>) -> Result<T> {
    match cfg.eval.split.as_str() {
        "train" => Ok(train),
        _ => test.context("eval.split = test but no test split is configured"),
    }
}

fn checkpoint_dir(cfg: &RunConfig, out: &Path) -> PathBuf {
    cfg.eval.checkpoint.clone().unwrap_or_else(|| out.join("checkpoint"))
}

pub fn gen_data(cfg: &RunConfig, out: &Path) -> Result<()> {
    prepare_out(out)?;
    match cfg.task {
        Task::Classification => {
            let (train, test) = classification_data(cfg)?;
            train.save(out.join("train"))?;
            if let Some(t) = test {
                t.save(out.join("test"))?;
            }
        }
        Task::Detection => {
            let (train, test) = detection_data(cfg)?;
            train.save(out.join("train"))?;
            if let Some(t) = test {
                t.save(out.join("test"))?;
            }
        }
    }
    info!("wrote dataset to {}", out.display());
    Ok(())
}

pub fn train(cfg: &RunConfig, out: &Path) -> Result<()> {
    prepare_out(out)?;
    let ckpt = out.join("checkpoint");
    let report = match cfg.task {
        Task::Classification => {
            let (train, test) = classification_data(cfg)?;
            let mut model = ThreeStreamNet::new(&cfg.model, cfg.seed)?;
            train_classifier(&mut model, &train, test.as_ref(), &cfg.train, Some(&ckpt))?
        }
        Task::Detection => {
            let (train, _) = detection_data(cfg)?;
            let mut model = DetectionNet::new(&cfg.model, cfg.seed)?;
            train_detector(&mut model, &train, &cfg.train, Some(&ckpt))?
        }
    };
    write_epoch_log(out.join("epochs.csv"), &report.epochs)?;
    let last = report.epochs.last();
    println!(
        "trained {} epochs ({} steps){}; final loss {}",
        report.epochs.len(),
        report.steps,
        if report.stopped_early {
            ", stopped at target"
        } else {
            ""
        },
        last.map_or("n/a".into(), |e| format!("{:.4}", e.loss))
    );
    Ok(())
}

pub fn eval(cfg: &RunConfig, out: &Path) -> Result<()> {
    if cfg.task != Task::Classification {
        bail!("eval scores classifiers; use `detect` for task = detection");
    }
    prepare_out(out)?;
    let model = ThreeStreamNet::load(checkpoint_dir(cfg, out))?;
    let (train, test) = classification_data(cfg)?;
    let data = pick_split(cfg, train, test)?;
    let report = evaluate(&model, &data, cfg.eval.n_clips, cfg.eval.crop)?;
    report.write_json(out.join("metrics.json"))?;
    report.write_confusion_csv(out.join("confusion.csv"))?;
    println!(
        "top1 {:.4}  top5 {:.4}  ({} clips)",
        report.top1.unwrap_or(f64::NAN),
        report.top5.unwrap_or(f64::NAN),
        data.len()
    );
    Ok(())
}

pub fn detect(cfg: &RunConfig, out: &Path) -> Result<()> {
    prepare_out(out)?;
    let model = DetectionNet::load(checkpoint_dir(cfg, out))?;
    let (train, test) = detection_data(cfg)?;
    let data = pick_split(cfg, train, test)?;
    let proposals = cfg.eval.proposals.as_ref().map(read_proposals).transpose()?;
    let (dets, summary) = evaluate_detection(&model, &data, proposals.as_deref())?;
    write_detections(out.join("detections.csv"), &dets)?;
    let report = MetricsReport::detection(&summary);
    report.write_ap_csv(out.join("ap_per_class.csv"))?;
    report.write_json(out.join("metrics.json"))?;
    match summary.map {
        Some(m) => println!("mAP@0.5 {m:.4} over {} detections", dets.len()),
        None => println!("mAP undefined: no ground truth"),
    }
    Ok(())
}

pub fn gradcheck(cfg: &RunConfig, out: &Path) -> Result<()> {
    prepare_out(out)?;
    let rows = run_all(cfg.gradcheck.shapes, cfg.seed)?;
    let mut w = csv::Writer::from_path(out.join("gradcheck.csv"))?;
    println!(
        "{:<16} {:>7} {:>12} {:>9}  result",
        "check", "shapes", "max_rel_err", "tol"
    );
    for r in &rows {
        println!(
            "{:<16} {:>7} {:>12.3e} {:>9.0e}  {}",
            r.name,
            r.shapes,
            r.max_rel_error,
            r.tolerance,
            if r.passed { "pass" } else { "FAIL" }
        );
        w.serialize(r)?;
    }
    w.flush()?;
    let failed: Vec<&str> = rows.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
    if !failed.is_empty() {
        return Err(CheckFailure(format!("gradient check failed for {}", failed.join(", "))).into());
    }
    Ok(())
}

#[derive(Debug, Serialize)]
pub struct AblationRow {
    pub slow_stride: usize,
    pub head: HeadKind,
    pub beta: f64,
    pub top1: Option<f64>,
    pub macs_single: u64,
    pub macs_slow: u64,
    pub macs_fast: u64,
    pub macs_lateral: u64,
    pub macs_total: u64,
    pub params: usize,
}

/// The model config for one grid cell.
pub fn ablation_config(cfg: &RunConfig, slow_stride: usize, head: HeadKind, beta: f64) -> Result<NetworkConfig> {
    let a = &cfg.ablate;
    let strides = StrideTriple::new(a.single_stride, slow_stride, a.fast_stride)
        .with_context(|| format!("slow stride {slow_stride}"))?;
    let net = NetworkConfig {
        clip_len: a.clip_len,
        strides,
        head,
        channel_ratio: beta,
        ..cfg.model.clone()
    };
    net.validate()?;
    Ok(net)
}

pub fn ablate(cfg: &RunConfig, out: &Path) -> Result<()> {
    let a = &cfg.ablate;
    // reject the whole grid before training any of it
    for &s in &a.slow_strides {
        for &h in &a.heads {
            for &b in &a.betas {
                ablation_config(cfg, s, h, b)?;
            }
        }
    }
    prepare_out(out)?;
    let (train, test) = if a.epochs > 0 {
        let mut rng = data_rng(cfg);
        let train = gen_synthetic(&a.synthetic, a.train_size, &mut rng)?;
        let test = gen_synthetic(&a.synthetic, a.test_size, &mut rng)?;
        (Some(train), Some(test))
    } else {
        (None, None)
    };
    let tc = TrainConfig {
        epochs: a.epochs,
        ..cfg.train.clone()
    };
    let size = a.synthetic.size;
    let mut w = csv::Writer::from_path(out.join("ablation.csv"))?;
    for &s in &a.slow_strides {
        for &h in &a.heads {
            for &b in &a.betas {
                let net = ablation_config(cfg, s, h, b)?;
                let mut model = ThreeStreamNet::new(&net, cfg.seed)?;
                let macs = model.backbone.macs(&model.store, size, size);
                let top1 = match (&train, &test) {
                    (Some(tr), Some(te)) => {
                        train_classifier(&mut model, tr, None, &tc, None)?;
                        evaluate(&model, te, 1, None)?.top1
                    }
                    _ => None,
                };
                let row = AblationRow {
                    slow_stride: s,
                    head: h,
                    beta: b,
                    top1,
                    macs_single: macs.single,
                    macs_slow: macs.slow,
                    macs_fast: macs.fast,
                    macs_lateral: macs.lateral,
                    macs_total: macs.total(),
                    params: model.store.num_scalars(),
                };
                println!(
                    "theta2 {:>2}  {:<9}  beta {:<5}  top1 {}  MACs slow {} fast {}",
                    s,
                    h.to_string(),
                    b,
                    top1.map_or("-".into(), |v| format!("{v:.3}")),
                    macs.slow,
                    macs.fast
                );
                w.serialize(&row)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}
