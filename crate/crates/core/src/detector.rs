//! Box-level action detection: the backbone with a stride-1, dilation-2
//! res5, ROI features replicated along time and max-pooled, a layer norm to
//! tame the pooled maxima, and a per-class sigmoid classifier. Ground-truth boxes serve as proposals.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::Backbone;
use crate::config::NetworkConfig;
use crate::error::{Error, Result};
use crate::heads::{LayerNormParams, Linear};
use crate::model::{load_params, read_manifest, save_checkpoint_as, ModelKind};
use crate::sampler::VideoClip;
use crate::tensor::{concat, Graph, ParamStore, Tensor, Var};

/// Axis-aligned box in normalized `[0, 1]` image coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = Self { x1, y1, x2, y2 };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let inside = [self.x1, self.y1, self.x2, self.y2]
            .iter()
            .all(|v| v.is_finite() && (0.0..=1.0).contains(v));
        if !inside || self.x1 >= self.x2 || self.y1 >= self.y2 {
            return Err(Error::Input(format!("invalid box {self:?}")));
        }
        Ok(())
    }

    pub fn area(&self) -> f64 {
        (self.x2 - self.x1) * (self.y2 - self.y1)
    }
}

/// Ground truth: one box of one frame with its (possibly several) labels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxAnnotation {
    pub video_id: String,
    pub bbox: BBox,
    pub class_ids: Vec<usize>,
    /// Seconds from the start of the video.
    pub keyframe_time: f64,
}

/// A scored box; `scores[c]` is the sigmoid probability of class `c`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub video_id: String,
    pub bbox: BBox,
    pub scores: Vec<f32>,
    pub keyframe_time: f64,
}

pub const ROI_GRID: (usize, usize) = (7, 7);

/// Sampling points of an `out` grid over `bbox` on an `h x w` feature map,
/// in feature-index coordinates (pixel centres at integer positions). A box
/// narrower than one feature cell is widened to one cell about its centre;
/// the flag reports whether that happened.
pub fn roi_points(bbox: &BBox, h: usize, w: usize, out: (usize, usize)) -> (Vec<(f64, f64)>, bool) {
    let mut degenerate = false;
    let mut span = |lo: f64, hi: f64, n: usize| {
        let (mut a, mut b) = (lo * n as f64, hi * n as f64);
        if b - a < 1.0 {
            degenerate = true;
            let c = 0.5 * (a + b);
            (a, b) = (c - 0.5, c + 0.5);
        }
        (a - 0.5, b - a)
    };
    let (y0, bh) = span(bbox.y1, bbox.y2, h);
    let (x0, bw) = span(bbox.x1, bbox.x2, w);
    let mut pts = Vec::with_capacity(out.0 * out.1);
    for i in 0..out.0 {
        for j in 0..out.1 {
            pts.push((
                y0 + (i as f64 + 0.5) * bh / out.0 as f64,
                x0 + (j as f64 + 0.5) * bw / out.1 as f64,
            ));
        }
    }
    (pts, degenerate)
}

/// The 2D box applied at every temporal index of sample `batch`:
/// `[C, T, out.0, out.1]`.
pub fn roi_extract<'g>(feat: Var<'g>, batch: usize, bbox: &BBox, out: (usize, usize)) -> Result<Var<'g>> {
    bbox.validate()?;
    if out.0 == 0 || out.1 == 0 {
        return Err(Error::Input("ROI grid must be at least 1x1".into()));
    }
    let s = feat.shape();
    if s.len() != 5 {
        return Err(Error::Shape(format!("roi_extract: expected [N,C,T,H,W], got {s:?}")));
    }
    let (pts, degenerate) = roi_points(bbox, s[3], s[4], out);
    if degenerate {
        log::warn!("box {bbox:?} is smaller than one feature cell; widened to one cell");
    }
    feat.roi_align(batch, &pts, out)
}

/// Per-box feature vector `[C]`: ROI grid max-pooled over space and time.
pub fn roi_feature<'g>(feat: Var<'g>, batch: usize, bbox: &BBox, out: (usize, usize)) -> Result<Var<'g>> {
    let r = roi_extract(feat, batch, bbox, out)?;
    let s = r.shape();
    r.reshape([s[0], s[1] * s[2] * s[3]])?.max_axis(1)
}

#[derive(Clone, Debug)]
pub struct DetectionNet {
    pub config: NetworkConfig,
    pub store: ParamStore,
    /// Built with a stride-1, dilation-2 res5.
    pub backbone: Backbone,
    pub norm: LayerNormParams,
    pub classifier: Linear,
}

impl DetectionNet {
    pub fn new(config: &NetworkConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::with_rng(config, &mut rng)
    }

    pub fn with_rng<R: Rng + ?Sized>(config: &NetworkConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let backbone = Backbone::new(&mut store, config, true, rng)?;
        let norm = LayerNormParams::new(&mut store, "detector.norm", config.feature_dim());
        let classifier = Linear::new(
            &mut store,
            "detector.classifier",
            config.feature_dim(),
            config.num_classes,
            rng,
        );
        Ok(Self {
            config: config.clone(),
            store,
            backbone,
            norm,
            classifier,
        })
    }

    /// Fused `[1, D, T, H, W]` map at the res4 resolution.
    pub fn feature_map<'g>(&self, g: &'g Graph, clip: &VideoClip) -> Result<Var<'g>> {
        self.backbone.forward_fused_map(g, &self.store, clip)
    }

    /// Logits `[boxes, num_classes]` for the boxes of one clip.
    pub fn forward<'g>(&self, g: &'g Graph, clip: &VideoClip, boxes: &[BBox]) -> Result<Var<'g>> {
        if boxes.is_empty() {
            return Err(Error::Input("no boxes to classify".into()));
        }
        let fmap = self.feature_map(g, clip)?;
        let d = fmap.shape()[1];
        let rows = boxes
            .iter()
            .map(|b| roi_feature(fmap, 0, b, ROI_GRID)?.reshape([1, d]))
            .collect::<Result<Vec<_>>>()?;
        let feats = if rows.len() == 1 { rows[0] } else { concat(&rows, 0)? };
        let feats = self.norm.forward(g, &self.store, feats)?;
        self.classifier.forward(g, &self.store, feats)
    }

    /// Per-class BCE against multi-hot targets.
    pub fn loss<'g>(&self, g: &'g Graph, clip: &VideoClip, gts: &[BoxAnnotation]) -> Result<Var<'g>> {
        let boxes: Vec<BBox> = gts.iter().map(|a| a.bbox).collect();
        let logits = self.forward(g, clip, &boxes)?;
        let c = self.config.num_classes;
        let mut targets = Tensor::zeros([gts.len(), c]);
        for (i, a) in gts.iter().enumerate() {
            for &k in &a.class_ids {
                if k >= c {
                    return Err(Error::Input(format!("class id {k} outside {c} classes")));
                }
                targets.data_mut()[i * c + k] = 1.0;
            }
        }
        logits.bce_with_logits(&targets)
    }

    /// Scores each proposal. Proposals carry the video id and keyframe time
    /// copied to their detections.
    pub fn detect(&self, clip: &VideoClip, proposals: &[BoxAnnotation]) -> Result<Vec<Detection>> {
        let g = Graph::new();
        let boxes: Vec<BBox> = proposals.iter().map(|a| a.bbox).collect();
        let probs = self.forward(&g, clip, &boxes)?.sigmoid().value();
        let c = self.config.num_classes;
        Ok(proposals
            .iter()
            .enumerate()
            .map(|(i, p)| Detection {
                video_id: p.video_id.clone(),
                bbox: p.bbox,
                scores: probs.data()[i * c..(i + 1) * c].to_vec(),
                keyframe_time: p.keyframe_time,
            })
            .collect())
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        save_checkpoint_as(dir, ModelKind::Detector, &self.config, &self.store)
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest = read_manifest(dir)?;
        if manifest.kind != ModelKind::Detector {
            return Err(Error::Format("checkpoint does not hold a detection model".into()));
        }
        let mut model = Self::new(&manifest.config, 0)?;
        load_params(dir, &manifest, &mut model.store)?;
        Ok(model)
    }
}
