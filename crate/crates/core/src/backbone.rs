//! Three inflated-ResNet pathways with lateral fusion Fast -> Slow -> Single.
//!
//! Each pathway is stem conv + norm + relu + spatial max-pool ("pool1"),
//! followed by four residual stages (res2..res5). res2 keeps the pool1
//! resolution and res3..res5 each halve H and W; T is preserved throughout.
//! After pool1, res2, res3 and res4 the Fast features are fused into Slow,
//! and the fused Slow features into Single.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::{NetworkConfig, PathwayConfig, PathwayKind};
use crate::error::{Error, Result};
use crate::sampler::{sample_pathway, to_network_input, VideoClip};
use crate::tensor::{concat, Conv3dSpec, Graph, ParamId, ParamStore, Tensor, Var};

/// A convolution's parameters plus its geometry.
#[derive(Clone, Debug)]
pub struct ConvUnit {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub spec: Conv3dSpec,
}

impl ConvUnit {
    /// He-normal weights, zero bias.
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: [usize; 3],
        spec: Conv3dSpec,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let fan_in = c_in * kernel.iter().product::<usize>();
        let std = (2.0 / fan_in as f32).sqrt();
        let weight = store.add(
            format!("{name}.weight"),
            Tensor::randn([c_out, c_in, kernel[0], kernel[1], kernel[2]], std, rng),
        );
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros([c_out])));
        Self { weight, bias, spec }
    }

    pub fn forward<'g>(&self, g: &'g Graph, store: &ParamStore, x: Var<'g>) -> Result<Var<'g>> {
        let w = g.param(store, self.weight);
        let b = self.bias.map(|b| g.param(store, b));
        x.conv3d(w, b, self.spec)
    }

    pub fn out_channels(&self, store: &ParamStore) -> usize {
        store.get(self.weight).shape()[0]
    }

    /// Multiply-accumulates for an input of temporal/spatial extent `dims`.
    pub fn macs(&self, store: &ParamStore, dims: [usize; 3]) -> (u64, [usize; 3]) {
        let w = store.get(self.weight).shape();
        let mut out = [0; 3];
        for a in 0..3 {
            out[a] = crate::tensor::kernels::conv_out_extent(
                dims[a],
                w[2 + a],
                self.spec.stride[a],
                self.spec.padding[a],
                self.spec.dilation[a],
            )
            .unwrap_or(0);
        }
        let per_out = (w[1] * w[2] * w[3] * w[4]) as u64;
        let n_out = (w[0] * out.iter().product::<usize>()) as u64;
        (per_out * n_out, out)
    }
}

/// Per-sample normalization with per-channel gain and shift.
#[derive(Clone, Debug)]
pub struct NormUnit {
    pub gain: ParamId,
    pub shift: ParamId,
    pub eps: f32,
}

impl NormUnit {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, eps: f32) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Tensor::full([channels], 1.0)),
            shift: store.add(format!("{name}.shift"), Tensor::zeros([channels])),
            eps,
        }
    }

    pub fn forward<'g>(&self, g: &'g Graph, store: &ParamStore, x: Var<'g>) -> Result<Var<'g>> {
        x.channel_norm(g.param(store, self.gain), g.param(store, self.shift), self.eps)
    }
}

#[derive(Clone, Debug)]
pub struct ResidualBlock {
    pub conv1: ConvUnit,
    pub norm1: NormUnit,
    pub conv2: ConvUnit,
    pub norm2: NormUnit,
    /// 1x1x1 projection when width or resolution changes.
    pub shortcut: Option<ConvUnit>,
}

impl ResidualBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        temporal_kernel: usize,
        spatial_stride: usize,
        dilation: usize,
        eps: f32,
        rng: &mut R,
    ) -> Self {
        let k = [temporal_kernel, 3, 3];
        let pad = [temporal_kernel / 2, dilation, dilation];
        let dil = [1, dilation, dilation];
        let conv1 = ConvUnit::new(
            store,
            &format!("{name}.conv1"),
            c_in,
            c_out,
            k,
            Conv3dSpec::new([1, spatial_stride, spatial_stride], pad).with_dilation(dil),
            true,
            rng,
        );
        let norm1 = NormUnit::new(store, &format!("{name}.norm1"), c_out, eps);
        let conv2 = ConvUnit::new(
            store,
            &format!("{name}.conv2"),
            c_out,
            c_out,
            k,
            Conv3dSpec::new([1, 1, 1], pad).with_dilation(dil),
            true,
            rng,
        );
        let norm2 = NormUnit::new(store, &format!("{name}.norm2"), c_out, eps);
        let shortcut = (c_in != c_out || spatial_stride != 1).then(|| {
            ConvUnit::new(
                store,
                &format!("{name}.shortcut"),
                c_in,
                c_out,
                [1, 1, 1],
                Conv3dSpec::new([1, spatial_stride, spatial_stride], [0, 0, 0]),
                true,
                rng,
            )
        });
        Self {
            conv1,
            norm1,
            conv2,
            norm2,
            shortcut,
        }
    }
}

/// conv -> norm -> relu -> conv -> norm, plus shortcut, then relu.
pub fn residual_block<'g>(g: &'g Graph, store: &ParamStore, x: Var<'g>, block: &ResidualBlock) -> Result<Var<'g>> {
    let h = block.conv1.forward(g, store, x)?;
    let h = block.norm1.forward(g, store, h)?.relu();
    let h = block.conv2.forward(g, store, h)?;
    let h = block.norm2.forward(g, store, h)?;
    let skip = match &block.shortcut {
        Some(p) => p.forward(g, store, x)?,
        None => x,
    };
    Ok(h.add(skip)?.relu())
}

#[derive(Clone, Debug)]
pub struct Pathway {
    pub config: PathwayConfig,
    pub stem: ConvUnit,
    pub stem_norm: NormUnit,
    /// res2..res5, each a list of blocks.
    pub stages: Vec<Vec<ResidualBlock>>,
}

impl Pathway {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        net: &NetworkConfig,
        kind: PathwayKind,
        dilate_res5: bool,
        rng: &mut R,
    ) -> Self {
        let config = net.pathway(kind);
        let prefix = kind.name();
        let kt = config.temporal_kernel;
        let widths = &config.stage_channels;
        let stem = ConvUnit::new(
            store,
            &format!("{prefix}.stem"),
            net.in_channels,
            widths[0],
            [kt, 3, 3],
            Conv3dSpec::new([1, 1, 1], [kt / 2, 1, 1]),
            true,
            rng,
        );
        let stem_norm = NormUnit::new(store, &format!("{prefix}.stem_norm"), widths[0], net.norm_eps);
        let mut stages = Vec::with_capacity(4);
        for s in 0..4 {
            let (stride, dilation) = match s {
                0 => (1, 1),
                3 if dilate_res5 => (1, 2),
                _ => (2, 1),
            };
            let blocks = (0..net.blocks_per_stage[s])
                .map(|b| {
                    let c_in = if b == 0 { widths[s] } else { widths[s + 1] };
                    ResidualBlock::new(
                        store,
                        &format!("{prefix}.res{}.{b}", s + 2),
                        c_in,
                        widths[s + 1],
                        kt,
                        if b == 0 { stride } else { 1 },
                        dilation,
                        net.norm_eps,
                        rng,
                    )
                })
                .collect();
            stages.push(blocks);
        }
        Self {
            config,
            stem,
            stem_norm,
            stages,
        }
    }

    /// Stage 0 is stem + pool1; stages 1..=4 are res2..res5.
    pub fn run_stage<'g>(&self, g: &'g Graph, store: &ParamStore, x: Var<'g>, stage: usize) -> Result<Var<'g>> {
        if stage == 0 {
            let h = self.stem.forward(g, store, x)?;
            let h = self.stem_norm.forward(g, store, h)?.relu();
            return h.max_pool3d([1, 2, 2], [1, 2, 2]);
        }
        let mut h = x;
        for block in &self.stages[stage - 1] {
            h = residual_block(g, store, h, block)?;
        }
        Ok(h)
    }
}

/// Features of every stage of one pathway, without any fusion:
/// [pool1, res2, res3, res4, res5].
pub fn run_pathway<'g>(g: &'g Graph, store: &ParamStore, x: Var<'g>, pathway: &Pathway) -> Result<Vec<Var<'g>>> {
    let shape = x.shape();
    let factor = 1usize << pathway.stages.len();
    if shape.len() != 5 || shape[3] < factor || shape[4] < factor {
        return Err(Error::Input(format!(
            "pathway input {shape:?} smaller than the total downsampling factor {factor}"
        )));
    }
    let mut feats = Vec::with_capacity(5);
    let mut h = x;
    for stage in 0..=pathway.stages.len() {
        h = pathway.run_stage(g, store, h, stage)?;
        feats.push(h);
    }
    Ok(feats)
}

/// Transform matching a denser donor to a receiver: temporal conv (kernel 5,
/// stride Td/Tr), 1x1x1 channel projection, learnable scalar factor.
#[derive(Clone, Debug)]
pub struct Lateral {
    pub temporal: ConvUnit,
    pub project: ConvUnit,
    pub alpha: ParamId,
}

impl Lateral {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        c_donor: usize,
        c_receiver: usize,
        temporal_stride: usize,
        alpha: f32,
        rng: &mut R,
    ) -> Self {
        let temporal = ConvUnit::new(
            store,
            &format!("{name}.temporal"),
            c_donor,
            c_donor,
            [5, 1, 1],
            Conv3dSpec::new([temporal_stride, 1, 1], [2, 0, 0]),
            true,
            rng,
        );
        let project = ConvUnit::new(
            store,
            &format!("{name}.project"),
            c_donor,
            c_receiver,
            [1, 1, 1],
            Conv3dSpec::default(),
            true,
            rng,
        );
        let alpha = store.add(format!("{name}.alpha"), Tensor::full([1], alpha));
        Self {
            temporal,
            project,
            alpha,
        }
    }
}

/// Adds the transformed donor features to the receiver; output has the
/// receiver's shape.
pub fn lateral_fuse<'g>(
    g: &'g Graph,
    store: &ParamStore,
    donor: Var<'g>,
    receiver: Var<'g>,
    lateral: &Lateral,
) -> Result<Var<'g>> {
    let (ds, rs) = (donor.shape(), receiver.shape());
    if ds.len() != 5 || rs.len() != 5 {
        return Err(Error::Shape(format!("lateral_fuse: ranks {ds:?} / {rs:?}")));
    }
    let (td, tr) = (ds[2], rs[2]);
    if td < tr || td % tr != 0 {
        return Err(Error::Config(format!(
            "lateral_fuse: donor T={td} is not an integer multiple of receiver T={tr}"
        )));
    }
    if lateral.temporal.spec.stride[0] != td / tr {
        return Err(Error::Config(format!(
            "lateral_fuse: built for temporal stride {}, features need {}",
            lateral.temporal.spec.stride[0],
            td / tr
        )));
    }
    let h = lateral.temporal.forward(g, store, donor)?;
    let h = lateral.project.forward(g, store, h)?;
    let h = h.scale_by(g.param(store, lateral.alpha))?;
    receiver.add(h)
}

/// Nearest-neighbour map from `to` timesteps onto `from` source timesteps.
pub fn align_indices(from: usize, to: usize) -> Vec<usize> {
    (0..to).map(|t| (t * from / to).min(from - 1)).collect()
}

/// Backbone outputs kept for the heads and the detector.
pub struct BackboneOutput<'g> {
    /// res5 map per enabled pathway, in Single/Slow/Fast order.
    pub res5: Vec<(PathwayKind, Var<'g>)>,
    /// Every stage's fused output per pathway, for inspection.
    pub stages: Vec<(PathwayKind, Vec<Var<'g>>)>,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub config: NetworkConfig,
    pub pathways: Vec<Pathway>,
    /// Four links after pool1, res2, res3, res4.
    pub fast_to_slow: Vec<Lateral>,
    pub slow_to_single: Vec<Lateral>,
    pub dilate_res5: bool,
}

impl Backbone {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        config: &NetworkConfig,
        dilate_res5: bool,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let pathways: Vec<Pathway> = config
            .enabled_pathways()
            .into_iter()
            .map(|k| Pathway::new(store, config, k, dilate_res5, rng))
            .collect();
        let mut links = |donor: PathwayKind, receiver: PathwayKind| -> Vec<Lateral> {
            if !(config.lateral && config.enabled(donor) && config.enabled(receiver)) {
                return Vec::new();
            }
            let (cd, cr) = (config.pathway(donor), config.pathway(receiver));
            let stride = config.frames(donor) / config.frames(receiver);
            (0..4)
                .map(|s| {
                    Lateral::new(
                        store,
                        &format!("lateral.{}_to_{}.{s}", donor.name(), receiver.name()),
                        cd.stage_channels[s],
                        cr.stage_channels[s],
                        stride,
                        config.fusion_init,
                        rng,
                    )
                })
                .collect()
        };
        let fast_to_slow = links(PathwayKind::Fast, PathwayKind::Slow);
        let slow_to_single = links(PathwayKind::Slow, PathwayKind::Single);
        Ok(Self {
            config: config.clone(),
            pathways,
            fast_to_slow,
            slow_to_single,
            dilate_res5,
        })
    }

    pub fn pathway(&self, kind: PathwayKind) -> Option<&Pathway> {
        self.pathways.iter().find(|p| p.config.kind == kind)
    }

    /// Network inputs per enabled pathway for one clip.
    pub fn pathway_inputs(&self, clip: &VideoClip) -> Result<Vec<(PathwayKind, Tensor)>> {
        if clip.len() != self.config.clip_len {
            return Err(Error::Input(format!(
                "clip has {} frames, model expects {}",
                clip.len(),
                self.config.clip_len
            )));
        }
        if clip.channels() != self.config.in_channels {
            return Err(Error::Input(format!(
                "clip has {} channels, model expects {}",
                clip.channels(),
                self.config.in_channels
            )));
        }
        self.pathways
            .iter()
            .map(|p| Ok((p.config.kind, to_network_input(&sample_pathway(clip, p.config.theta)?)?)))
            .collect()
    }

    /// Runs every pathway stage by stage, fusing after stages 0..=3.
    pub fn forward_maps<'g>(&self, g: &'g Graph, store: &ParamStore, clip: &VideoClip) -> Result<BackboneOutput<'g>> {
        let inputs = self.pathway_inputs(clip)?;
        let factor = self.config.downsample_factor();
        if clip.height() < factor || clip.width() < factor {
            return Err(Error::Input(format!(
                "frames {}x{} smaller than the total downsampling factor {factor}",
                clip.height(),
                clip.width()
            )));
        }
        let mut current: Vec<(PathwayKind, Var<'g>)> = inputs.into_iter().map(|(k, t)| (k, g.constant(t))).collect();
        let mut stages: Vec<(PathwayKind, Vec<Var<'g>>)> = current.iter().map(|(k, _)| (*k, Vec::new())).collect();
        let find = |v: &[(PathwayKind, Var<'g>)], k: PathwayKind| v.iter().position(|(kk, _)| *kk == k);
        for stage in 0..5 {
            for ((_, x), p) in current.iter_mut().zip(&self.pathways) {
                *x = p.run_stage(g, store, *x, stage)?;
            }
            if stage < 4 {
                if let (Some(f), Some(s)) = (find(&current, PathwayKind::Fast), find(&current, PathwayKind::Slow)) {
                    if let Some(l) = self.fast_to_slow.get(stage) {
                        current[s].1 = lateral_fuse(g, store, current[f].1, current[s].1, l)?;
                    }
                }
                if let (Some(s), Some(o)) = (find(&current, PathwayKind::Slow), find(&current, PathwayKind::Single)) {
                    if let Some(l) = self.slow_to_single.get(stage) {
                        current[o].1 = lateral_fuse(g, store, current[s].1, current[o].1, l)?;
                    }
                }
            }
            for ((_, x), (_, s)) in current.iter().zip(stages.iter_mut()) {
                s.push(*x);
            }
        }
        Ok(BackboneOutput { res5: current, stages })
    }

    /// Per-timestep feature sequence `[1, T_seq, D]`: res5 maps are averaged
    /// spatially, aligned to the densest pathway's timeline by nearest
    /// neighbour and concatenated channel-wise (Single, Slow, Fast).
    pub fn forward<'g>(&self, g: &'g Graph, store: &ParamStore, clip: &VideoClip) -> Result<Var<'g>> {
        let out = self.forward_maps(g, store, clip)?;
        let t_seq = self.config.sequence_len();
        let mut parts = Vec::with_capacity(out.res5.len());
        for (_, m) in &out.res5 {
            let s = m.shape();
            let pooled = m.reshape([s[0], s[1], s[2], s[3] * s[4]])?.mean_axis(3)?;
            parts.push(pooled.index_select(2, &align_indices(s[2], t_seq))?);
        }
        concat(&parts, 1)?.transpose()
    }

    /// Fused `[1, D, T_seq, H, W]` res5 map for ROI extraction.
    pub fn forward_fused_map<'g>(&self, g: &'g Graph, store: &ParamStore, clip: &VideoClip) -> Result<Var<'g>> {
        let out = self.forward_maps(g, store, clip)?;
        let t_seq = self.config.sequence_len();
        let parts = out
            .res5
            .iter()
            .map(|(_, m)| m.index_select(2, &align_indices(m.shape()[2], t_seq)))
            .collect::<Result<Vec<_>>>()?;
        concat(&parts, 1)
    }

    /// Analytic multiply-accumulate count per pathway for one window of
    /// `height x width` frames; lateral transforms are counted separately.
    pub fn macs(&self, store: &ParamStore, height: usize, width: usize) -> MacReport {
        let mut report = MacReport::default();
        let mut res_dims = Vec::new();
        for p in &self.pathways {
            let mut dims = [self.config.frames(p.config.kind), height, width];
            let (m, d) = p.stem.macs(store, dims);
            let mut total = m;
            dims = [d[0], d[1] / 2, d[2] / 2];
            let mut per_stage = vec![dims];
            for stage in &p.stages {
                for b in stage {
                    let (m1, d1) = b.conv1.macs(store, dims);
                    let (m2, d2) = b.conv2.macs(store, d1);
                    total += m1 + m2;
                    if let Some(s) = &b.shortcut {
                        total += s.macs(store, dims).0;
                    }
                    dims = d2;
                }
                per_stage.push(dims);
            }
            match p.config.kind {
                PathwayKind::Single => report.single = total,
                PathwayKind::Slow => report.slow = total,
                PathwayKind::Fast => report.fast = total,
            }
            res_dims.push((p.config.kind, per_stage));
        }
        let dims_of = |k: PathwayKind, s: usize| res_dims.iter().find(|(kk, _)| *kk == k).map(|(_, d)| d[s]);
        for (links, donor) in [
            (&self.fast_to_slow, PathwayKind::Fast),
            (&self.slow_to_single, PathwayKind::Slow),
        ] {
            for (s, l) in links.iter().enumerate() {
                if let Some(d) = dims_of(donor, s) {
                    let (m1, d1) = l.temporal.macs(store, d);
                    report.lateral += m1 + l.project.macs(store, d1).0;
                }
            }
        }
        report
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MacReport {
    pub single: u64,
    pub slow: u64,
    pub fast: u64,
    pub lateral: u64,
}

impl MacReport {
    pub fn total(&self) -> u64 {
        self.single + self.slow + self.fast + self.lateral
    }
}
