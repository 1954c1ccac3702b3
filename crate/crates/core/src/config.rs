//! Network configuration shared by the backbone, heads and detector.

use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Temporal strides of the three pathways, in source frames.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StrideTriple {
    pub single: usize,
    pub slow: usize,
    pub fast: usize,
}

impl StrideTriple {
    pub fn new(single: usize, slow: usize, fast: usize) -> Result<Self> {
        let s = Self { single, slow, fast };
        s.validate()?;
        Ok(s)
    }

    /// Requires `fast < slow < single`, all at least one frame.
    pub fn validate(&self) -> Result<()> {
        if self.fast == 0 {
            return Err(Error::Config("temporal strides must be >= 1".into()));
        }
        if !(self.fast < self.slow && self.slow < self.single) {
            return Err(Error::Config(format!(
                "strides must satisfy fast < slow < single, got single={} slow={} fast={}",
                self.single, self.slow, self.fast
            )));
        }
        Ok(())
    }

    pub fn get(&self, kind: PathwayKind) -> usize {
        match kind {
            PathwayKind::Single => self.single,
            PathwayKind::Slow => self.slow,
            PathwayKind::Fast => self.fast,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PathwayKind {
    Single,
    Slow,
    Fast,
}

impl PathwayKind {
    pub const ALL: [PathwayKind; 3] = [PathwayKind::Single, PathwayKind::Slow, PathwayKind::Fast];

    pub fn index(self) -> usize {
        match self {
            PathwayKind::Single => 0,
            PathwayKind::Slow => 1,
            PathwayKind::Fast => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            PathwayKind::Single => "single",
            PathwayKind::Slow => "slow",
            PathwayKind::Fast => "fast",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    BiLstm,
    Attention,
    /// Temporal mean-pool of backbone features straight into the classifier.
    None,
}

impl FromStr for HeadKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bilstm" => Ok(HeadKind::BiLstm),
            "attention" => Ok(HeadKind::Attention),
            "none" => Ok(HeadKind::None),
            other => Err(Error::Config(format!("unknown head kind {other:?}"))),
        }
    }
}

impl fmt::Display for HeadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HeadKind::BiLstm => "bilstm",
            HeadKind::Attention => "attention",
            HeadKind::None => "none",
        })
    }
}

/// Per-pathway view derived from a [`NetworkConfig`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathwayConfig {
    pub kind: PathwayKind,
    pub theta: usize,
    /// Widths after pool1, res2, res3, res4 and res5.
    pub stage_channels: Vec<usize>,
    /// Fraction of the Slow widths (1 for Single and Slow).
    pub channel_ratio: f64,
    pub temporal_kernel: usize,
}

/// Everything needed to instantiate a model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    /// Frames per input window; the Single stride equals this by default.
    pub clip_len: usize,
    pub in_channels: usize,
    pub strides: StrideTriple,
    /// Slow (and Single) widths for pool1, res2, res3, res4, res5.
    pub stage_channels: Vec<usize>,
    /// Fast width as a fraction of Slow width.
    pub channel_ratio: f64,
    /// Residual blocks in res2..res5.
    pub blocks_per_stage: Vec<usize>,
    pub head: HeadKind,
    pub num_classes: usize,
    pub attention_heads: usize,
    pub lstm_hidden: usize,
    /// Disabled pathways are not built and contribute no features.
    pub enable_single: bool,
    pub enable_slow: bool,
    pub enable_fast: bool,
    /// Lateral connections Fast->Slow->Single.
    pub lateral: bool,
    /// Initial value of the learnable fusion factor.
    pub fusion_init: f32,
    pub norm_eps: f32,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            clip_len: 8,
            in_channels: 1,
            strides: StrideTriple {
                single: 8,
                slow: 4,
                fast: 2,
            },
            stage_channels: vec![8, 8, 16, 32, 64],
            channel_ratio: 0.125,
            blocks_per_stage: vec![2, 2, 2, 2],
            head: HeadKind::Attention,
            num_classes: 4,
            attention_heads: 4,
            lstm_hidden: 32,
            enable_single: true,
            enable_slow: true,
            enable_fast: true,
            lateral: true,
            fusion_init: 1.0,
            norm_eps: 1e-5,
        }
    }
}

/// Number of frames a pathway with stride `theta` takes from `t` frames.
pub fn sampled_len(t: usize, theta: usize) -> usize {
    t.div_ceil(theta)
}

impl NetworkConfig {
    pub fn enabled(&self, kind: PathwayKind) -> bool {
        match kind {
            PathwayKind::Single => self.enable_single,
            PathwayKind::Slow => self.enable_slow,
            PathwayKind::Fast => self.enable_fast,
        }
    }

    pub fn enabled_pathways(&self) -> Vec<PathwayKind> {
        PathwayKind::ALL.into_iter().filter(|&k| self.enabled(k)).collect()
    }

    pub fn pathway(&self, kind: PathwayKind) -> PathwayConfig {
        let ratio = if kind == PathwayKind::Fast {
            self.channel_ratio
        } else {
            1.0
        };
        PathwayConfig {
            kind,
            theta: self.strides.get(kind),
            stage_channels: self
                .stage_channels
                .iter()
                .map(|&c| ((c as f64 * ratio).round() as usize).max(1))
                .collect(),
            channel_ratio: ratio,
            // a one-frame pathway gains nothing from a temporal kernel
            temporal_kernel: if sampled_len(self.clip_len, self.strides.get(kind)) > 1 {
                3
            } else {
                1
            },
        }
    }

    /// Frames each pathway sees for one window.
    pub fn frames(&self, kind: PathwayKind) -> usize {
        sampled_len(self.clip_len, self.strides.get(kind))
    }

    /// Length of the feature sequence handed to the head: the densest
    /// enabled pathway's frame count.
    pub fn sequence_len(&self) -> usize {
        self.enabled_pathways()
            .into_iter()
            .map(|k| self.frames(k))
            .max()
            .unwrap_or(1)
    }

    /// Width of each timestep of the backbone output.
    pub fn feature_dim(&self) -> usize {
        self.enabled_pathways()
            .into_iter()
            .map(|k| *self.pathway(k).stage_channels.last().unwrap())
            .sum()
    }

    /// Total spatial downsampling from input to res5: the pool after the
    /// stem plus res3, res4 and res5.
    pub fn downsample_factor(&self) -> usize {
        16
    }

    pub fn validate(&self) -> Result<()> {
        self.strides.validate()?;
        if self.clip_len == 0 {
            return Err(Error::Config("clip_len must be >= 1".into()));
        }
        if !matches!(self.in_channels, 1 | 3) {
            return Err(Error::Config(format!(
                "in_channels must be 1 or 3, got {}",
                self.in_channels
            )));
        }
        if self.stage_channels.len() != 5 || self.stage_channels.contains(&0) {
            return Err(Error::Config(
                "stage_channels needs five positive widths (pool1, res2..res5)".into(),
            ));
        }
        if self.blocks_per_stage.len() != 4 || self.blocks_per_stage.contains(&0) {
            return Err(Error::Config(
                "blocks_per_stage needs four positive counts (res2..res5)".into(),
            ));
        }
        if !(self.channel_ratio > 0.0 && self.channel_ratio <= 1.0) {
            return Err(Error::Config(format!(
                "channel_ratio {} outside (0, 1]",
                self.channel_ratio
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("num_classes must be >= 2".into()));
        }
        if self.enabled_pathways().is_empty() {
            return Err(Error::Config("at least one pathway must be enabled".into()));
        }
        if self.lateral {
            let pairs = [
                (PathwayKind::Fast, PathwayKind::Slow),
                (PathwayKind::Slow, PathwayKind::Single),
            ];
            for (donor, receiver) in pairs {
                if !(self.enabled(donor) && self.enabled(receiver)) {
                    continue;
                }
                let (td, tr) = (self.frames(donor), self.frames(receiver));
                if td < tr || td % tr != 0 {
                    return Err(Error::Config(format!(
                        "lateral {}->{}: {td} frames is not a multiple of {tr}",
                        donor.name(),
                        receiver.name()
                    )));
                }
            }
        }
        match self.head {
            HeadKind::Attention => {
                let d = self.feature_dim();
                if self.attention_heads == 0 || !d.is_multiple_of(self.attention_heads) {
                    return Err(Error::Config(format!(
                        "feature dim {d} not divisible by {} attention heads",
                        self.attention_heads
                    )));
                }
            }
            HeadKind::BiLstm if self.lstm_hidden == 0 => {
                return Err(Error::Config("lstm_hidden must be >= 1".into()));
            }
            _ => {}
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stride_ordering_is_enforced() {
        assert!(StrideTriple::new(30, 16, 2).is_ok());
        assert!(StrideTriple::new(16, 16, 2).is_err());
        assert!(StrideTriple::new(30, 2, 16).is_err());
        assert!(StrideTriple::new(30, 16, 0).is_err());
    }

    #[test]
    fn default_is_valid() {
        let c = NetworkConfig::default();
        c.validate().unwrap();
        assert_eq!(c.sequence_len(), 4);
        assert_eq!(c.feature_dim(), 64 + 64 + 8);
        assert_eq!(c.pathway(PathwayKind::Fast).stage_channels, vec![1, 1, 2, 4, 8]);
    }

    #[test]
    fn non_integer_lateral_ratio_rejected() {
        let c = NetworkConfig {
            clip_len: 64,
            strides: StrideTriple {
                single: 64,
                slow: 6,
                fast: 2,
            },
            ..NetworkConfig::default()
        };
        // 32 fast frames vs 11 slow frames
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn head_kind_parses() {
        assert_eq!("bilstm".parse::<HeadKind>().unwrap(), HeadKind::BiLstm);
        assert!("gru".parse::<HeadKind>().is_err());
    }
}
