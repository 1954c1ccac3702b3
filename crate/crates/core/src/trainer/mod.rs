//! Mini-batch SGD training, multi-view inference and evaluation, plus the
//! synthetic datasets used to exercise them.

pub mod data;
pub mod sgd;
pub mod synthetic;

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::detector::{BoxAnnotation, Detection, DetectionNet};
use crate::error::{Error, Result};
use crate::metrics::{mean_ap, topk_accuracy, ApSummary, MetricsReport};
use crate::model::ThreeStreamNet;
use crate::sampler::{gather_frames, inference_clips, train_crop, VideoClip};
use crate::tensor::{Graph, ParamStore, Var};

pub use data::{Dataset, DetectionDataset, DetectionSample, Sample};
pub use sgd::{sgd_step, GradBuffer, SgdConfig, Velocity};
pub use synthetic::{gen_synthetic, gen_synthetic_detection, SyntheticSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    /// Dropout before the classifier, training only.
    pub dropout: f32,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Probability of mirroring a training clip (datasets with a flip map).
    pub flip_prob: f64,
    /// Square training crop; `None` uses each clip's shorter side.
    pub crop: Option<usize>,
    /// Stop once held-out top-1 reaches this value.
    pub target_accuracy: Option<f64>,
    /// Temporal windows per video at evaluation (times three crops).
    pub eval_clips: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 1e-5,
            dropout: 0.5,
            batch_size: 8,
            epochs: 20,
            seed: 0,
            flip_prob: 0.5,
            crop: None,
            target_accuracy: None,
            eval_clips: 1,
        }
    }
}

impl TrainConfig {
    pub fn sgd(&self) -> SgdConfig {
        SgdConfig {
            lr: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.sgd().validate()?;
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.batch_size == 0 || self.eval_clips == 0 {
            return Err(Error::Config("batch_size and eval_clips must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::Config(format!("flip_prob {} outside [0, 1]", self.flip_prob)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean training loss over the epoch's samples.
    pub loss: f64,
    /// Training accuracy of the epoch's (augmented, dropout) forward passes.
    pub top1: f64,
    pub top5: f64,
    pub val_top1: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochLog>,
    pub steps: usize,
    pub stopped_early: bool,
}

pub fn write_epoch_log(path: impl AsRef<Path>, log: &[EpochLog]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for e in log {
        w.serialize(e)?;
    }
    w.flush()?;
    Ok(())
}

/// A model whose parameters the training loop can update and persist.
pub trait Trainable {
    fn store(&self) -> &ParamStore;
    fn store_mut(&mut self) -> &mut ParamStore;
    fn save_checkpoint(&self, dir: &Path) -> Result<()>;
}

impl Trainable for ThreeStreamNet {
    fn store(&self) -> &ParamStore {
        &self.store
    }
    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }
    fn save_checkpoint(&self, dir: &Path) -> Result<()> {
        self.save(dir)
    }
}

impl Trainable for DetectionNet {
    fn store(&self) -> &ParamStore {
        &self.store
    }
    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }
    fn save_checkpoint(&self, dir: &Path) -> Result<()> {
        self.save(dir)
    }
}

/// Per-sample loss plus `(scores, label)` rows for accuracy bookkeeping.
type SampleOutput<'g> = (Var<'g>, Vec<(Vec<f32>, usize)>);

fn abort<M: Trainable>(model: &M, checkpoint: Option<&Path>, what: String) -> Error {
    match checkpoint.map(|dir| model.save_checkpoint(dir)) {
        Some(Ok(())) => Error::NonFinite(format!(
            "{what}; last good parameters saved to {}",
            checkpoint.unwrap().display()
        )),
        Some(Err(e)) => Error::NonFinite(format!("{what}; saving the last good parameters failed: {e}")),
        None => Error::NonFinite(what),
    }
}

/// The shared loop: shuffled mini-batches, per-sample graphs with gradients
/// summed in sample order, one SGD step per batch, optional validation and
/// early stop after each epoch. The final parameters are written to
/// `checkpoint`; a non-finite loss or update writes the parameters from
/// before that step instead and fails with [`Error::NonFinite`].
pub fn fit<M, F, V>(
    model: &mut M,
    n: usize,
    cfg: &TrainConfig,
    checkpoint: Option<&Path>,
    mut sample_loss: F,
    mut validate: V,
) -> Result<TrainReport>
where
    M: Trainable,
    F: for<'g> FnMut(&M, &'g Graph, usize, &mut ChaCha8Rng) -> Result<SampleOutput<'g>>,
    V: FnMut(&M) -> Result<Option<f64>>,
{
    cfg.validate()?;
    if n == 0 {
        return Err(Error::Input("training set is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut velocity = Velocity::zeros(model.store());
    let mut buffer = GradBuffer::new(model.store());
    let sgd = cfg.sgd();
    let mut report = TrainReport {
        epochs: vec![],
        steps: 0,
        stopped_early: false,
    };
    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let (mut loss_sum, mut count) = (0f64, 0usize);
        let (mut scores, mut labels) = (vec![], vec![]);
        for batch in order.chunks(cfg.batch_size) {
            for &i in batch {
                let g = Graph::new();
                let (loss, rows) = sample_loss(model, &g, i, &mut rng)?;
                let value = loss.value().item();
                if !value.is_finite() {
                    return Err(abort(
                        model,
                        checkpoint,
                        format!("loss {value} at epoch {epoch}, sample {i}"),
                    ));
                }
                match g.backward(loss) {
                    Ok(grads) => buffer.add(&grads),
                    Err(e) if e.is_numerical() => return Err(abort(model, checkpoint, e.to_string())),
                    Err(e) => return Err(e),
                }
                loss_sum += value as f64;
                count += 1;
                for (s, l) in rows {
                    scores.push(s);
                    labels.push(l);
                }
            }
            let grads = buffer.take_mean();
            match sgd_step(model.store_mut(), &grads, &mut velocity, &sgd) {
                Err(e) if e.is_numerical() => return Err(abort(model, checkpoint, e.to_string())),
                r => r?,
            }
            report.steps += 1;
        }
        let classes = scores.first().map_or(1, Vec::len);
        let entry = EpochLog {
            epoch,
            loss: loss_sum / count as f64,
            top1: topk_accuracy(&scores, &labels, 1)?,
            top5: topk_accuracy(&scores, &labels, 5.min(classes))?,
            val_top1: validate(model)?,
        };
        log::info!(
            "epoch {epoch}: loss {:.4} top1 {:.3} val {:?}",
            entry.loss,
            entry.top1,
            entry.val_top1
        );
        let reached = matches!((cfg.target_accuracy, entry.val_top1), (Some(t), Some(v)) if v >= t);
        report.epochs.push(entry);
        if reached {
            report.stopped_early = true;
            break;
        }
    }
    if let Some(dir) = checkpoint {
        model.save_checkpoint(dir)?;
    }
    Ok(report)
}

/// A random `len`-frame window of `clip`.
pub fn random_window<R: Rng + ?Sized>(clip: &VideoClip, len: usize, rng: &mut R) -> Result<VideoClip> {
    if clip.len() < len {
        return Err(Error::Input(format!("clip has {} frames, need {len}", clip.len())));
    }
    if clip.len() == len {
        return Ok(clip.clone());
    }
    let start = rng.gen_range(0..=clip.len() - len);
    let idx: Vec<usize> = (start..start + len).collect();
    VideoClip::new(gather_frames(clip.frames(), &idx)?, clip.fps())
}

fn crop_size(cfg_crop: Option<usize>, clip: &VideoClip) -> usize {
    cfg_crop.unwrap_or(clip.height().min(clip.width()))
}

/// Trains a classifier with softmax cross-entropy. With `val`, held-out
/// top-1 is measured after every epoch.
pub fn train_classifier(
    model: &mut ThreeStreamNet,
    train: &Dataset,
    val: Option<&Dataset>,
    cfg: &TrainConfig,
    checkpoint: Option<&Path>,
) -> Result<TrainReport> {
    if train.num_classes != model.config.num_classes {
        return Err(Error::Config(format!(
            "dataset has {} classes, model {}",
            train.num_classes, model.config.num_classes
        )));
    }
    let clip_len = model.config.clip_len;
    let flip_prob = if train.flip_map.is_some() { cfg.flip_prob } else { 0.0 };
    fit(
        model,
        train.len(),
        cfg,
        checkpoint,
        |m: &ThreeStreamNet, g, i, rng| {
            let s = &train.samples[i];
            let window = random_window(&s.clip, clip_len, rng)?;
            let (frames, place) = train_crop(window.frames(), crop_size(cfg.crop, &window), flip_prob, rng)?;
            let label = match (&train.flip_map, place.flipped) {
                (Some(map), true) => map[s.label],
                _ => s.label,
            };
            let logits = m.forward(g, &VideoClip::new(frames, window.fps())?, cfg.dropout, true, rng)?;
            let row = logits.value().data().to_vec();
            Ok((logits.cross_entropy(&[label])?, vec![(row, label)]))
        },
        |m| match val {
            Some(v) => Ok(evaluate(m, v, cfg.eval_clips, cfg.crop)?.top1),
            None => Ok(None),
        },
    )
}

/// Class probabilities averaged over `n_clips` windows times three crops.
/// Views with identical pixels are scored once and counted with their
/// multiplicity.
pub fn infer(model: &ThreeStreamNet, video: &VideoClip, n_clips: usize, crop: Option<usize>) -> Result<Vec<f32>> {
    let views = inference_clips(video, model.config.clip_len, n_clips, crop_size(crop, video))?;
    let mut acc = vec![0f64; model.config.num_classes];
    let mut scored: Vec<(usize, Vec<f64>)> = vec![];
    for (i, v) in views.iter().enumerate() {
        let probs = match scored.iter().find(|(j, _)| views[*j].frames() == v.frames()) {
            Some((_, p)) => p.clone(),
            None => {
                let p = softmax(model.logits(v)?.data());
                scored.push((i, p.clone()));
                p
            }
        };
        for (a, p) in acc.iter_mut().zip(&probs) {
            *a += p;
        }
    }
    Ok(acc.iter().map(|a| (a / views.len() as f64) as f32).collect())
}

fn softmax(z: &[f32]) -> Vec<f64> {
    let m = z.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
    let e: Vec<f64> = z.iter().map(|&v| (v as f64 - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Averaged-view scores for every sample.
pub fn predict(model: &ThreeStreamNet, data: &Dataset, n_clips: usize, crop: Option<usize>) -> Result<Vec<Vec<f32>>> {
    data.samples
        .iter()
        .map(|s| infer(model, &s.clip, n_clips, crop))
        .collect()
}

pub fn evaluate(model: &ThreeStreamNet, data: &Dataset, n_clips: usize, crop: Option<usize>) -> Result<MetricsReport> {
    let scores = predict(model, data, n_clips, crop)?;
    MetricsReport::classification(&scores, &data.labels(), data.num_classes)
}

/// The `clip_len` frames centred on the keyframe (clamped to the video).
pub fn keyframe_window(clip: &VideoClip, keyframe_time: f64, clip_len: usize) -> Result<VideoClip> {
    if clip.len() < clip_len {
        return Err(Error::Input(format!("clip has {} frames, need {clip_len}", clip.len())));
    }
    let key = (keyframe_time * clip.fps() as f64).round().max(0.0) as usize;
    let start = key.saturating_sub(clip_len / 2).min(clip.len() - clip_len);
    let idx: Vec<usize> = (start..start + clip_len).collect();
    VideoClip::new(gather_frames(clip.frames(), &idx)?, clip.fps())
}

fn detection_input(model: &DetectionNet, s: &DetectionSample) -> Result<VideoClip> {
    let t = s.boxes.first().map_or(0.0, |b| b.keyframe_time);
    keyframe_window(&s.clip, t, model.config.clip_len)
}

/// Trains the box classifier with per-class BCE on ground-truth boxes.
pub fn train_detector(
    model: &mut DetectionNet,
    train: &DetectionDataset,
    cfg: &TrainConfig,
    checkpoint: Option<&Path>,
) -> Result<TrainReport> {
    if train.num_classes != model.config.num_classes {
        return Err(Error::Config(format!(
            "dataset has {} classes, model {}",
            train.num_classes, model.config.num_classes
        )));
    }
    if let Some(s) = train.samples.iter().find(|s| s.boxes.is_empty()) {
        return Err(Error::Input(format!("{} has no boxes", s.video_id)));
    }
    fit(
        model,
        train.len(),
        cfg,
        checkpoint,
        |m: &DetectionNet, g, i, _rng| {
            let s = &train.samples[i];
            let clip = detection_input(m, s)?;
            let boxes: Vec<_> = s.boxes.iter().map(|b| b.bbox).collect();
            let logits = m.forward(g, &clip, &boxes)?;
            let c = m.config.num_classes;
            let v = logits.value();
            let rows = s
                .boxes
                .iter()
                .enumerate()
                .map(|(k, b)| {
                    (
                        v.data()[k * c..(k + 1) * c].to_vec(),
                        b.class_ids.first().copied().unwrap_or(0),
                    )
                })
                .collect();
            Ok((m.loss(g, &clip, &s.boxes)?, rows))
        },
        |_| Ok(None),
    )
}

/// Scores proposals (ground-truth boxes when `proposals` is `None`) on every
/// clip and computes per-class AP at IoU 0.5 against the ground truth.
pub fn evaluate_detection(
    model: &DetectionNet,
    data: &DetectionDataset,
    proposals: Option<&[BoxAnnotation]>,
) -> Result<(Vec<Detection>, ApSummary)> {
    let mut dets = vec![];
    for s in &data.samples {
        let props: Vec<BoxAnnotation> = match proposals {
            Some(p) => p.iter().filter(|b| b.video_id == s.video_id).cloned().collect(),
            None => s.boxes.clone(),
        };
        if props.is_empty() {
            continue;
        }
        dets.extend(model.detect(&detection_input(model, s)?, &props)?);
    }
    let summary = mean_ap(&dets, &data.annotations(), data.num_classes, 0.5);
    Ok((dets, summary))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{HeadKind, NetworkConfig};
    use crate::tensor::Tensor;

    fn tiny_net(head: HeadKind) -> NetworkConfig {
        NetworkConfig {
            stage_channels: vec![4, 4, 8, 8, 16],
            blocks_per_stage: vec![1, 1, 1, 1],
            channel_ratio: 0.25,
            head,
            ..NetworkConfig::default()
        }
    }

    fn data(n: usize, seed: u64) -> Dataset {
        gen_synthetic(&SyntheticSpec::default(), n, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn two_sample_overfit() {
        let train = data(2, 1);
        let mut model = ThreeStreamNet::new(&tiny_net(HeadKind::Attention), 3).unwrap();
        let cfg = TrainConfig {
            dropout: 0.0,
            batch_size: 2,
            epochs: 500,
            flip_prob: 0.0,
            ..TrainConfig::default()
        };
        let mut steps = 0;
        let report = fit(
            &mut model,
            2,
            &cfg,
            None,
            |m: &ThreeStreamNet, g, i, rng| {
                let s = &train.samples[i];
                let z = m.forward(g, &s.clip, 0.0, true, rng)?;
                let row = z.value().data().to_vec();
                Ok((z.cross_entropy(&[s.label])?, vec![(row, s.label)]))
            },
            |_| Ok(None),
        )
        .unwrap();
        let first_below = report.epochs.iter().position(|e| e.loss < 0.01);
        if let Some(p) = first_below {
            steps = p + 1;
        }
        assert!(
            first_below.is_some() && steps <= 500,
            "final loss {}",
            report.epochs.last().unwrap().loss
        );
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let train = data(4, 2);
        let mut model = ThreeStreamNet::new(&tiny_net(HeadKind::BiLstm), 5).unwrap();
        let before = model.store.clone();
        let cfg = TrainConfig {
            lr: 0.0,
            epochs: 2,
            batch_size: 2,
            ..TrainConfig::default()
        };
        train_classifier(&mut model, &train, None, &cfg, None).unwrap();
        assert!(model.store.bit_equal(&before));
    }

    #[test]
    fn replay_is_bit_identical() {
        let train = data(6, 3);
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 3,
            ..TrainConfig::default()
        };
        let run = || {
            let mut m = ThreeStreamNet::new(&tiny_net(HeadKind::Attention), 9).unwrap();
            let r = train_classifier(&mut m, &train, Some(&train), &cfg, None).unwrap();
            (m, r)
        };
        let (a, ra) = run();
        let (b, rb) = run();
        assert!(a.store.bit_equal(&b.store));
        assert_eq!(ra, rb);
        assert_eq!(ra.steps, 4);
    }

    #[test]
    fn nan_aborts_with_last_good_checkpoint() {
        let train = data(4, 4);
        let mut model = ThreeStreamNet::new(&tiny_net(HeadKind::None), 1).unwrap();
        let cfg = TrainConfig {
            lr: 1e30,
            epochs: 3,
            batch_size: 1,
            ..TrainConfig::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let err = train_classifier(&mut model, &train, None, &cfg, Some(dir.path())).unwrap_err();
        assert!(err.is_numerical(), "{err}");
        let saved = ThreeStreamNet::load(dir.path()).unwrap();
        assert!(saved.store.bit_equal(&model.store));
        assert!(model.store.ids().all(|id| model.store.get(id).is_finite()));
    }

    #[test]
    fn infer_averages_softmax_over_views() {
        let model = ThreeStreamNet::new(&tiny_net(HeadKind::Attention), 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        // crop-sized square video, one window: three identical views
        let square = VideoClip::new(Tensor::uniform([8, 32, 32, 1], 0.0, 1.0, &mut rng), 30).unwrap();
        let p = infer(&model, &square, 1, None).unwrap();
        let direct = softmax(model.logits(&square).unwrap().data());
        for (a, b) in p.iter().zip(&direct) {
            assert!((*a as f64 - b).abs() < 1e-6);
        }
        // longer, wider video against an explicit loop
        let wide = VideoClip::new(Tensor::uniform([20, 32, 48, 1], 0.0, 1.0, &mut rng), 30).unwrap();
        let p = infer(&model, &wide, 3, Some(32)).unwrap();
        let views = inference_clips(&wide, 8, 3, 32).unwrap();
        assert_eq!(views.len(), 9);
        let mut want = vec![0f64; 4];
        for v in &views {
            for (w, q) in want.iter_mut().zip(softmax(model.logits(v).unwrap().data())) {
                *w += q / 9.0;
            }
        }
        for (a, b) in p.iter().zip(&want) {
            assert!((*a as f64 - b).abs() < 1e-6);
        }
        assert!((p.iter().map(|&v| v as f64).sum::<f64>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn keyframe_window_is_centred_and_clamped() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let clip = VideoClip::new(Tensor::uniform([20, 4, 4, 1], 0.0, 1.0, &mut rng), 10).unwrap();
        let w = keyframe_window(&clip, 1.0, 8).unwrap();
        assert_eq!(w.frames().data()[..16], clip.frames().data()[6 * 16..7 * 16]);
        let end = keyframe_window(&clip, 1.9, 8).unwrap();
        assert_eq!(end.frames().data()[..16], clip.frames().data()[12 * 16..13 * 16]);
    }
}
