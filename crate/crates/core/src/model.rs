//! The assembled classifier: backbone, temporal head, dropout, linear layer.
//! Checkpoints are a directory of `.t3sr` tensors plus `manifest.json`.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::Backbone;
use crate::config::NetworkConfig;
use crate::error::{Error, Result};
use crate::heads::{classify, Linear, TemporalHead};
use crate::sampler::VideoClip;
use crate::tensor::{io, Graph, ParamStore, Tensor, Var};

pub const MANIFEST_FILE: &str = "manifest.json";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct ThreeStreamNet {
    pub config: NetworkConfig,
    pub store: ParamStore,
    pub backbone: Backbone,
    pub head: TemporalHead,
    pub classifier: Linear,
}

impl ThreeStreamNet {
    /// Builds a model with parameters drawn from a generator seeded by `seed`.
    pub fn new(config: &NetworkConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::with_rng(config, &mut rng)
    }

    pub fn with_rng<R: Rng + ?Sized>(config: &NetworkConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let backbone = Backbone::new(&mut store, config, false, rng)?;
        let head = TemporalHead::new(&mut store, config, rng)?;
        let d = head.out_dim(config.feature_dim());
        let classifier = Linear::new(&mut store, "classifier", d, config.num_classes, rng);
        Ok(Self {
            config: config.clone(),
            store,
            backbone,
            head,
            classifier,
        })
    }

    /// Class logits `[num_classes]`. Dropout with rate `dropout` is applied
    /// to the head output only when `training` is set.
    pub fn forward<'g, R: Rng + ?Sized>(
        &self,
        g: &'g Graph,
        clip: &VideoClip,
        dropout: f32,
        training: bool,
        rng: &mut R,
    ) -> Result<Var<'g>> {
        let seq = self.backbone.forward(g, &self.store, clip)?;
        let s = seq.shape();
        let seq = seq.reshape([s[1], s[2]])?;
        let h = self.head.forward(g, &self.store, seq)?;
        let h = h.dropout(dropout, training, rng)?;
        classify(g, &self.store, h, &self.classifier)
    }

    /// Inference-mode logits as a plain tensor.
    pub fn logits(&self, clip: &VideoClip) -> Result<Tensor> {
        let g = Graph::new();
        let mut unused = ChaCha8Rng::seed_from_u64(0);
        let out = self.forward(&g, clip, 0.0, false, &mut unused)?;
        Ok((*out.value()).clone())
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        save_checkpoint_as(dir, ModelKind::Classifier, &self.config, &self.store)
    }

    /// Rebuilds the architecture from the manifest's config and loads every
    /// listed tensor; missing, extra or mis-shaped tensors are format errors.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest = read_manifest(dir)?;
        if manifest.kind != ModelKind::Classifier {
            return Err(Error::Format("checkpoint does not hold a classification model".into()));
        }
        let mut model = Self::new(&manifest.config, 0)?;
        load_params(dir, &manifest, &mut model.store)?;
        Ok(model)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub file: String,
}

/// Which network a checkpoint's parameters belong to.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    #[default]
    Classifier,
    Detector,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub version: u32,
    #[serde(default)]
    pub kind: ModelKind,
    pub config: NetworkConfig,
    pub params: Vec<ParamEntry>,
}

pub fn save_checkpoint_as(
    dir: impl AsRef<Path>,
    kind: ModelKind,
    config: &NetworkConfig,
    store: &ParamStore,
) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut params = Vec::with_capacity(store.len());
    for id in store.ids() {
        let name = store.name(id).to_string();
        let file = format!("{name}.t3sr");
        io::save(dir.join(&file), store.get(id))?;
        params.push(ParamEntry {
            shape: store.get(id).shape().to_vec(),
            name,
            file,
        });
    }
    let manifest = CheckpointManifest {
        version: CHECKPOINT_VERSION,
        kind,
        config: config.clone(),
        params,
    };
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub fn read_manifest(dir: impl AsRef<Path>) -> Result<CheckpointManifest> {
    let text = fs::read_to_string(dir.as_ref().join(MANIFEST_FILE))?;
    let m: CheckpointManifest = serde_json::from_str(&text)?;
    if m.version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {}", m.version)));
    }
    Ok(m)
}

/// Overwrites `store` with the tensors named in `manifest`.
pub fn load_params(dir: &Path, manifest: &CheckpointManifest, store: &mut ParamStore) -> Result<()> {
    if manifest.params.len() != store.len() {
        return Err(Error::Format(format!(
            "checkpoint lists {} tensors, model has {}",
            manifest.params.len(),
            store.len()
        )));
    }
    for entry in &manifest.params {
        let id = store
            .id(&entry.name)
            .ok_or_else(|| Error::Format(format!("checkpoint tensor {:?} not in model", entry.name)))?;
        let t = io::load(dir.join(&entry.file))?;
        if t.shape() != entry.shape.as_slice() {
            return Err(Error::Format(format!(
                "{}: manifest shape {:?}, file shape {:?}",
                entry.name,
                entry.shape,
                t.shape()
            )));
        }
        store
            .set(id, t)
            .map_err(|e| Error::Format(format!("{}: {e}", entry.name)))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{HeadKind, PathwayKind};

    fn clip(seed: u64, cfg: &NetworkConfig) -> VideoClip {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        VideoClip::new(
            Tensor::uniform([cfg.clip_len, 32, 32, cfg.in_channels], 0.0, 1.0, &mut rng),
            30,
        )
        .unwrap()
    }

    #[test]
    fn logits_have_class_count_and_replay() {
        for head in [HeadKind::Attention, HeadKind::BiLstm, HeadKind::None] {
            let cfg = NetworkConfig {
                head,
                ..NetworkConfig::default()
            };
            let a = ThreeStreamNet::new(&cfg, 3).unwrap();
            let b = ThreeStreamNet::new(&cfg, 3).unwrap();
            let c = clip(1, &cfg);
            let la = a.logits(&c).unwrap();
            assert_eq!(la.shape(), &[4]);
            assert_eq!(la, b.logits(&c).unwrap());
        }
    }

    #[test]
    fn backbone_sequence_shape() {
        let cfg = NetworkConfig::default();
        let net = ThreeStreamNet::new(&cfg, 1).unwrap();
        let g = Graph::new();
        let seq = net.backbone.forward(&g, &net.store, &clip(2, &cfg)).unwrap();
        assert_eq!(seq.shape(), vec![1, cfg.frames(PathwayKind::Fast), cfg.feature_dim()]);
    }

    #[test]
    fn every_first_layer_gets_gradient() {
        let cfg = NetworkConfig::default();
        let net = ThreeStreamNet::new(&cfg, 1).unwrap();
        let g = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let loss = net
            .forward(&g, &clip(4, &cfg), 0.5, true, &mut rng)
            .unwrap()
            .cross_entropy(&[1])
            .unwrap();
        let grads = g.backward(loss).unwrap();
        let by_name: std::collections::HashMap<_, _> = grads
            .params()
            .into_iter()
            .map(|(id, t)| (net.store.name(id).to_string(), t.norm()))
            .collect();
        for k in PathwayKind::ALL {
            let n = by_name[&format!("{}.stem.weight", k.name())];
            assert!(n > 0.0, "{} stem has zero gradient", k.name());
        }
    }

    #[test]
    fn checkpoint_round_trip_and_rejections() {
        let cfg = NetworkConfig {
            head: HeadKind::BiLstm,
            ..NetworkConfig::default()
        };
        let net = ThreeStreamNet::new(&cfg, 7).unwrap();
        let dir = tempfile::tempdir().unwrap();
        net.save(dir.path()).unwrap();
        let back = ThreeStreamNet::load(dir.path()).unwrap();
        assert!(back.store.bit_equal(&net.store));
        assert_eq!(back.config, cfg);

        let victim = read_manifest(dir.path()).unwrap().params[3].file.clone();
        io::save(dir.path().join(&victim), &Tensor::zeros([2, 2])).unwrap();
        assert!(matches!(ThreeStreamNet::load(dir.path()), Err(Error::Format(_))));
    }

    #[test]
    fn wrong_clip_length_is_input_error() {
        let cfg = NetworkConfig::default();
        let net = ThreeStreamNet::new(&cfg, 1).unwrap();
        let short = VideoClip::new(Tensor::zeros([3, 32, 32, 1]), 30).unwrap();
        assert!(matches!(net.logits(&short), Err(Error::Input(_))));
        let tiny = VideoClip::new(Tensor::zeros([8, 8, 8, 1]), 30).unwrap();
        assert!(matches!(net.logits(&tiny), Err(Error::Input(_))));
    }
}
