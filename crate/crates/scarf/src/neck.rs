//! The Scarf Neck: per-scale stacks of attention blocks plus a 1×1 fusion
//! convolution.
//!
//! A Scarf Block wires MADA into a transformer-style layer: attention,
//! residual, layer norm, feed-forward, residual, layer norm (post-norm
//! ordering). The same FFN and norm parameters serve both modality streams,
//! matching the shared value/output projections inside MADA.
//!
//! A group applies `B` blocks and then fuses the two streams by channel
//! concatenation and a 1×1 convolution. When one modality is missing, the
//! blocks route through the incomplete MADA path and the surviving map is
//! duplicated before fusion, so every parameter is exercised by both the
//! complete and incomplete paths.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, ScarfError};
use crate::mada::{
    mada_forward_complete, mada_forward_incomplete, mada_forward_incomplete_single_sampling,
    MadaConfig, MadaParams,
};
use crate::params::{LinearParams, NormParams, ParamGroup, Parameter};
use crate::tape::{Tape, Var};

/// Layer-norm epsilon used throughout the neck.
pub const LN_EPS: f64 = 1e-5;

/// Per-scale head counts used when nothing else is configured.
pub const DEFAULT_HEADS_PER_SCALE: [usize; 4] = [3, 6, 12, 24];

/// Width and head count of one feature scale.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ScaleSpec {
    pub channels: usize,
    pub heads: usize,
}

/// Configuration of the whole neck. The nonlinearity is SiLU, fixed
/// project-wide.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ScarfNeckConfig {
    pub scales: Vec<ScaleSpec>,
    /// Scarf Blocks per group.
    pub blocks: usize,
    /// Sampling points K per (head, source) set.
    pub points: usize,
    /// FFN hidden width as a multiple of the scale channels.
    pub ffn_ratio: usize,
    /// Disabling the FFN leaves each block as attention + norm.
    pub ffn_enabled: bool,
    /// Disabling layer norm makes both norms identity maps (test and
    /// ablation configurations).
    pub layer_norm_enabled: bool,
    /// When false, the incomplete path uses only the first split set
    /// (single sampling) instead of the merged double set.
    pub double_sampling: bool,
}

impl Default for ScarfNeckConfig {
    fn default() -> Self {
        ScarfNeckConfig {
            scales: DEFAULT_HEADS_PER_SCALE
                .iter()
                .map(|&heads| ScaleSpec {
                    channels: 16 * heads,
                    heads,
                })
                .collect(),
            blocks: 2,
            points: crate::mada::DEFAULT_POINTS,
            ffn_ratio: 2,
            ffn_enabled: true,
            layer_norm_enabled: true,
            double_sampling: true,
        }
    }
}

impl ScarfNeckConfig {
    /// A single-scale configuration, convenient for desk-scale models.
    pub fn single_scale(channels: usize, heads: usize, points: usize, blocks: usize) -> Self {
        ScarfNeckConfig {
            scales: vec![ScaleSpec { channels, heads }],
            blocks,
            points,
            ..ScarfNeckConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.scales.is_empty() {
            return Err(ScarfError::Argument("neck needs at least one scale".into()));
        }
        for (i, s) in self.scales.iter().enumerate() {
            MadaConfig::new(s.channels, s.heads, self.points)
                .map_err(|e| ScarfError::Argument(format!("scale {i}: {e}")))?;
        }
        Ok(())
    }

    pub fn mada_config(&self, scale: usize) -> MadaConfig {
        let s = self.scales[scale];
        MadaConfig {
            channels: s.channels,
            heads: s.heads,
            points: self.points,
        }
    }
}

/// Optional per-modality feature maps of one scale. At least one map must be
/// present; when both are, their shapes must match.
#[derive(Clone, Copy, Debug)]
pub struct FeatureBundle {
    pub vis: Option<Var>,
    pub ir: Option<Var>,
    pub scale_index: usize,
}

impl FeatureBundle {
    pub fn new(vis: Option<Var>, ir: Option<Var>, scale_index: usize) -> Self {
        FeatureBundle {
            vis,
            ir,
            scale_index,
        }
    }

    pub fn validate(&self, tape: &Tape) -> Result<()> {
        match (self.vis, self.ir) {
            (None, None) => Err(ScarfError::Argument("no modality available".into())),
            (Some(v), Some(t)) if tape.shape(v) != tape.shape(t) => Err(ScarfError::shape(
                "feature bundle",
                tape.shape(v),
                tape.shape(t),
            )),
            _ => Ok(()),
        }
    }

    /// True when both modalities are present.
    pub fn is_complete(&self) -> bool {
        self.vis.is_some() && self.ir.is_some()
    }

    fn any(&self) -> Var {
        self.vis.or(self.ir).expect("validated bundle")
    }
}

/// Which MADA path a block executed; returned so callers and tests can
/// assert the routing contract.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockPath {
    Complete,
    Incomplete,
    IncompleteSingleSampling,
}

/// Parameters of one Scarf Block.
#[derive(Debug)]
pub struct ScarfBlockParams {
    pub mada: MadaParams,
    pub ffn_in: LinearParams,
    pub ffn_out: LinearParams,
    pub norm1: NormParams,
    pub norm2: NormParams,
}

impl ScarfBlockParams {
    pub fn init(name: &str, mada_cfg: &MadaConfig, ffn_hidden: usize, rng: &mut impl Rng) -> Self {
        let c = mada_cfg.channels;
        ScarfBlockParams {
            mada: MadaParams::init(&format!("{name}.mada"), mada_cfg, rng),
            ffn_in: LinearParams::init(&format!("{name}.ffn_in"), c, ffn_hidden, rng),
            ffn_out: LinearParams::init(&format!("{name}.ffn_out"), ffn_hidden, c, rng),
            norm1: NormParams::identity(&format!("{name}.norm1"), c),
            norm2: NormParams::identity(&format!("{name}.norm2"), c),
        }
    }
}

impl ParamGroup for ScarfBlockParams {
    fn visit(&self, f: &mut dyn FnMut(&Parameter)) {
        self.mada.visit(f);
        self.ffn_in.visit(f);
        self.ffn_out.visit(f);
        self.norm1.visit(f);
        self.norm2.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.mada.visit_mut(f);
        self.ffn_in.visit_mut(f);
        self.ffn_out.visit_mut(f);
        self.norm1.visit_mut(f);
        self.norm2.visit_mut(f);
    }
}

/// One group: `B` blocks plus the `2c -> c` fusion convolution.
#[derive(Debug)]
pub struct ScarfGroupParams {
    pub blocks: Vec<ScarfBlockParams>,
    pub fuse: LinearParams,
}

impl ScarfGroupParams {
    pub fn init(name: &str, cfg: &ScarfNeckConfig, scale: usize, rng: &mut impl Rng) -> Self {
        let mada_cfg = cfg.mada_config(scale);
        let c = mada_cfg.channels;
        let blocks = (0..cfg.blocks)
            .map(|b| {
                ScarfBlockParams::init(
                    &format!("{name}.block{b}"),
                    &mada_cfg,
                    c * cfg.ffn_ratio,
                    rng,
                )
            })
            .collect();
        ScarfGroupParams {
            blocks,
            fuse: LinearParams::init(&format!("{name}.fuse"), 2 * c, c, rng),
        }
    }
}

impl ParamGroup for ScarfGroupParams {
    fn visit(&self, f: &mut dyn FnMut(&Parameter)) {
        self.blocks.visit(f);
        self.fuse.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.blocks.visit_mut(f);
        self.fuse.visit_mut(f);
    }
}

/// All per-scale groups. Scales are parameter-independent.
#[derive(Debug)]
pub struct ScarfNeckParams {
    pub groups: Vec<ScarfGroupParams>,
}

impl ScarfNeckParams {
    pub fn init(name: &str, cfg: &ScarfNeckConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let groups = (0..cfg.scales.len())
            .map(|s| ScarfGroupParams::init(&format!("{name}.g{s}"), cfg, s, rng))
            .collect();
        Ok(ScarfNeckParams { groups })
    }
}

impl ParamGroup for ScarfNeckParams {
    fn visit(&self, f: &mut dyn FnMut(&Parameter)) {
        self.groups.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.groups.visit_mut(f);
    }
}

/// Residual + norm + FFN update of one modality stream.
fn stream_update(
    tape: &mut Tape,
    x: Var,
    attn: Var,
    params: &ScarfBlockParams,
    cfg: &ScarfNeckConfig,
) -> Result<Var> {
    let u = tape.add(x, attn)?;
    let u = if cfg.layer_norm_enabled {
        params.norm1.apply(tape, u, LN_EPS)?
    } else {
        u
    };
    if !cfg.ffn_enabled {
        return Ok(u);
    }
    let hidden = params.ffn_in.apply(tape, u)?;
    let hidden = tape.silu(hidden)?;
    let f = params.ffn_out.apply(tape, hidden)?;
    let v = tape.add(u, f)?;
    if cfg.layer_norm_enabled {
        params.norm2.apply(tape, v, LN_EPS)
    } else {
        Ok(v)
    }
}

/// One Scarf Block. Routes through the complete MADA path when both maps are
/// present, otherwise through the (double- or single-sampling) incomplete
/// path, then applies the shared residual/norm/FFN update per stream.
pub fn scarf_block_forward(
    tape: &mut Tape,
    bundle: &FeatureBundle,
    params: &ScarfBlockParams,
    cfg: &ScarfNeckConfig,
) -> Result<(FeatureBundle, BlockPath)> {
    bundle.validate(tape)?;
    let mada_cfg = cfg.mada_config(bundle.scale_index);
    match (bundle.vis, bundle.ir) {
        (Some(xv), Some(xt)) => {
            let (yv, yt) = mada_forward_complete(tape, xv, xt, &params.mada, &mada_cfg)?;
            let out_v = stream_update(tape, xv, yv, params, cfg)?;
            let out_t = stream_update(tape, xt, yt, params, cfg)?;
            Ok((
                FeatureBundle::new(Some(out_v), Some(out_t), bundle.scale_index),
                BlockPath::Complete,
            ))
        }
        _ => {
            let x = bundle.any();
            let (y, path) = if cfg.double_sampling {
                (
                    mada_forward_incomplete(tape, x, &params.mada, &mada_cfg)?,
                    BlockPath::Incomplete,
                )
            } else {
                (
                    mada_forward_incomplete_single_sampling(tape, x, &params.mada, &mada_cfg)?,
                    BlockPath::IncompleteSingleSampling,
                )
            };
            let out = stream_update(tape, x, y, params, cfg)?;
            let out_bundle = if bundle.vis.is_some() {
                FeatureBundle::new(Some(out), None, bundle.scale_index)
            } else {
                FeatureBundle::new(None, Some(out), bundle.scale_index)
            };
            Ok((out_bundle, path))
        }
    }
}

/// Applies the group's blocks and fuses the streams with the 1×1 convolution.
/// With one modality, the surviving map is duplicated on the channel axis so
/// the same fusion parameters apply.
pub fn group_forward(
    tape: &mut Tape,
    bundle: &FeatureBundle,
    params: &ScarfGroupParams,
    cfg: &ScarfNeckConfig,
) -> Result<(Var, Vec<BlockPath>)> {
    bundle.validate(tape)?;
    let mut current = *bundle;
    let mut paths = Vec::with_capacity(params.blocks.len());
    for block in &params.blocks {
        let (next, path) = scarf_block_forward(tape, &current, block, cfg)?;
        current = next;
        paths.push(path);
    }
    let stacked = match (current.vis, current.ir) {
        (Some(v), Some(t)) => tape.concat(&[v, t], 2)?,
        _ => {
            let x = current.any();
            tape.concat(&[x, x], 2)?
        }
    };
    let fused = params.fuse.apply_conv1x1(tape, stacked)?;
    Ok((fused, paths))
}

/// Full neck: one independent group per scale. Bundles must arrive in scale
/// order with an identical missing-modality pattern across scales.
pub fn neck_forward(
    tape: &mut Tape,
    bundles: &[FeatureBundle],
    params: &ScarfNeckParams,
    cfg: &ScarfNeckConfig,
) -> Result<Vec<Var>> {
    if bundles.len() != cfg.scales.len() {
        return Err(ScarfError::Argument(format!(
            "neck configured for {} scales, got {} bundles",
            cfg.scales.len(),
            bundles.len()
        )));
    }
    for (i, b) in bundles.iter().enumerate() {
        b.validate(tape)?;
        if b.vis.is_some() != bundles[0].vis.is_some() || b.ir.is_some() != bundles[0].ir.is_some()
        {
            return Err(ScarfError::Argument(format!(
                "scale {i} has a different missing-modality pattern than scale 0"
            )));
        }
        let c = tape.shape(b.any())[2];
        if c != cfg.scales[i].channels {
            return Err(ScarfError::Argument(format!(
                "scale {i} expects {} channels, got {c}",
                cfg.scales[i].channels
            )));
        }
    }
    bundles
        .iter()
        .zip(&params.groups)
        .map(|(b, g)| group_forward(tape, b, g, cfg).map(|(fused, _)| fused))
        .collect()
}
