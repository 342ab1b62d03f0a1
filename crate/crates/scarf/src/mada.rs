//! Modality-agnostic deformable attention (MADA).
//!
//! One projection head, fed with the channel-concatenated token pair
//! `z_q ∈ R^{2c}`, emits `m×4×K` sampling offsets and weights per token.
//!
//! - Complete path: the 4-axis is split in half. Indices 0–1 form the
//!   visible-update set, 2–3 the infrared-update set; inside each set the
//!   source axis indexes the sampled map (0 = visible, 1 = infrared). Each
//!   set's weights are softmax-normalized over its `(2, K)` group, so every
//!   modality update is a convex combination over `2K` sampled values.
//! - Incomplete path: the available tokens are duplicated to keep `z_q`
//!   well-formed, the two split sets are merged along the point axis into one
//!   `(2, 2K)` set, both source slots bind to the single available map, and
//!   the weights are normalized over all `4K` entries ("double sampling").
//!
//! Value and output projections are shared across modalities and paths.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, ScarfError};
use crate::params::{LinearParams, ParamGroup, Parameter};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Default number of sampling points per (head, source) set.
pub const DEFAULT_POINTS: usize = 4;

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct MadaConfig {
    /// Channels per modality feature map.
    pub channels: usize,
    /// Attention heads; must divide `channels`.
    pub heads: usize,
    /// Sampling points K per (head, source) set.
    pub points: usize,
}

impl MadaConfig {
    pub fn new(channels: usize, heads: usize, points: usize) -> Result<Self> {
        let cfg = MadaConfig {
            channels,
            heads,
            points,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.heads == 0 || self.points == 0 {
            return Err(ScarfError::Argument(format!(
                "mada config extents must be positive: {self:?}"
            )));
        }
        if self.channels % self.heads != 0 {
            return Err(ScarfError::Argument(format!(
                "channels {} not divisible by heads {}",
                self.channels, self.heads
            )));
        }
        Ok(())
    }

    pub fn d_head(&self) -> usize {
        self.channels / self.heads
    }
}

/// The four learnable projections of one MADA instance.
#[derive(Debug)]
pub struct MadaParams {
    /// `2c -> m*4*K*2`, emits sampling offsets. Zero weights; bias carries a
    /// fixed radial pattern of unit-length directions, distinct per
    /// (head, source, point) and repeated across the two update sets.
    pub offset_proj: LinearParams,
    /// `2c -> m*4*K`, emits raw attention weights. Zero-initialized, so
    /// attention starts uniform after softmax.
    pub weight_proj: LinearParams,
    /// `c -> m*d_head`, shared across modalities.
    pub value_proj: LinearParams,
    /// `m*d_head -> c`, shared across modalities.
    pub out_proj: LinearParams,
}

impl MadaParams {
    pub fn init(name: &str, cfg: &MadaConfig, rng: &mut impl Rng) -> Self {
        let (c, m, k) = (cfg.channels, cfg.heads, cfg.points);
        let mut offset_proj =
            LinearParams::zeros(&format!("{name}.offset_proj"), 2 * c, m * 4 * k * 2);
        offset_proj.bias.set_value(radial_offset_bias(cfg));
        MadaParams {
            offset_proj,
            weight_proj: LinearParams::zeros(&format!("{name}.weight_proj"), 2 * c, m * 4 * k),
            value_proj: LinearParams::init(&format!("{name}.value_proj"), c, c, rng),
            out_proj: LinearParams::init(&format!("{name}.out_proj"), c, c, rng),
        }
    }
}

impl ParamGroup for MadaParams {
    fn visit(&self, f: &mut dyn FnMut(&Parameter)) {
        self.offset_proj.visit(f);
        self.weight_proj.visit(f);
        self.value_proj.visit(f);
        self.out_proj.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.offset_proj.visit_mut(f);
        self.weight_proj.visit_mut(f);
        self.value_proj.visit_mut(f);
        self.out_proj.visit_mut(f);
    }
}

/// Unit-radius directions, one per (head, source, point), laid out over the
/// `[m, 4, K, 2]` offset bias. The two update sets (4-axis halves) repeat the
/// same pattern so that identical modalities start from identical geometry.
fn radial_offset_bias(cfg: &MadaConfig) -> Tensor {
    let (m, k) = (cfg.heads, cfg.points);
    let slots = m * 2 * k;
    let mut bias = vec![0.0; m * 4 * k * 2];
    for head in 0..m {
        for quad in 0..4 {
            let src = quad % 2;
            for point in 0..k {
                let slot = (head * 2 + src) * k + point;
                let theta = 2.0 * std::f64::consts::PI * slot as f64 / slots as f64;
                let base = ((head * 4 + quad) * k + point) * 2;
                bias[base] = theta.sin();
                bias[base + 1] = theta.cos();
            }
        }
    }
    Tensor::from_parts(vec![m * 4 * k * 2], bias)
}

/// Grid coordinates `(row, col)` of every token `q = i*W + j`, shape `[L, 2]`.
pub fn reference_points(h: usize, w: usize) -> Tensor {
    let mut data = Vec::with_capacity(h * w * 2);
    for i in 0..h {
        for j in 0..w {
            data.push(i as f64);
            data.push(j as f64);
        }
    }
    Tensor::from_parts(vec![h * w, 2], data)
}

/// Concatenates per-token features of the two modalities into `[L, 2c]`.
/// With one modality absent, the available tokens are duplicated.
pub fn combine_tokens(tape: &mut Tape, e_v: Option<Var>, e_t: Option<Var>) -> Result<Var> {
    match (e_v, e_t) {
        (Some(v), Some(t)) => {
            if tape.shape(v) != tape.shape(t) {
                return Err(ScarfError::shape(
                    "combine_tokens",
                    tape.shape(v),
                    tape.shape(t),
                ));
            }
            tape.concat(&[v, t], 1)
        }
        (Some(s), None) | (None, Some(s)) => tape.concat(&[s, s], 1),
        (None, None) => Err(ScarfError::Argument("no modality available".into())),
    }
}

/// One output set of sampling state: offsets and normalized weights over
/// `[L, m, 2, Kp]` (`Kp = K` complete, `2K` merged incomplete), plus the
/// constant reference points the offsets displace.
pub struct SamplingSet {
    pub offsets: Var,
    pub weights: Var,
    pub reference: Tensor,
}

impl SamplingSet {
    /// Points per (head, source) slot in this set.
    pub fn points_per_slot(&self, tape: &Tape) -> usize {
        tape.shape(self.offsets)[3]
    }
}

/// Raw (pre-split, pre-softmax) offset and weight projections:
/// `[L, m, 4, K, 2]` and `[L, m, 4, K]`.
pub fn project_raw(
    tape: &mut Tape,
    z: Var,
    params: &MadaParams,
    cfg: &MadaConfig,
) -> Result<(Var, Var)> {
    let (m, k) = (cfg.heads, cfg.points);
    let zs = tape.shape(z).to_vec();
    if zs.len() != 2 || zs[1] != 2 * cfg.channels {
        return Err(ScarfError::shape("project_raw", &zs, &[0, 2 * cfg.channels]));
    }
    let l = zs[0];
    let off_flat = params.offset_proj.apply(tape, z)?;
    let offsets = tape.reshape(off_flat, vec![l, m, 4, k, 2])?;
    let w_flat = params.weight_proj.apply(tape, z)?;
    let weights = tape.reshape(w_flat, vec![l, m, 4, k])?;
    Ok((offsets, weights))
}

/// Complete path: splits the raw projection's 4-axis into the visible-update
/// (indices 0–1) and infrared-update (indices 2–3) sets and normalizes each
/// set's weights over its `(2, K)` group.
pub fn project_and_split_complete(
    tape: &mut Tape,
    z: Var,
    params: &MadaParams,
    cfg: &MadaConfig,
    reference: &Tensor,
) -> Result<(SamplingSet, SamplingSet)> {
    let (raw_off, raw_w) = project_raw(tape, z, params, cfg)?;
    let (v_set, t_set) = split_sets(tape, raw_off, raw_w, reference)?;
    Ok((v_set, t_set))
}

fn split_sets(
    tape: &mut Tape,
    raw_offsets: Var,
    raw_weights: Var,
    reference: &Tensor,
) -> Result<(SamplingSet, SamplingSet)> {
    let mut sets = Vec::with_capacity(2);
    for half in 0..2 {
        let offsets = tape.narrow(raw_offsets, 2, half * 2, 2)?;
        let w = tape.narrow(raw_weights, 2, half * 2, 2)?;
        let weights = tape.softmax(w, 2)?;
        sets.push(SamplingSet {
            offsets,
            weights,
            reference: reference.clone(),
        });
    }
    let t_set = sets.pop().unwrap();
    let v_set = sets.pop().unwrap();
    Ok((v_set, t_set))
}

/// Incomplete path: concatenates the two split sets along the point axis into
/// one `[L, m, 2, 2K]` set and normalizes over all `4K` entries. Both source
/// slots are later bound to the single available map.
pub fn merge_incomplete(
    tape: &mut Tape,
    raw_offsets: Var,
    raw_weights: Var,
    cfg: &MadaConfig,
    reference: &Tensor,
) -> Result<SamplingSet> {
    let (m, k) = (cfg.heads, cfg.points);
    let os = tape.shape(raw_offsets).to_vec();
    if os.len() != 5 || os[1] != m || os[2] != 4 || os[3] != k || os[4] != 2 {
        return Err(ScarfError::shape(
            "merge_incomplete offsets",
            &os,
            &[0, m, 4, k, 2],
        ));
    }
    let ws = tape.shape(raw_weights).to_vec();
    if ws != [os[0], m, 4, k] {
        return Err(ScarfError::shape(
            "merge_incomplete weights",
            &ws,
            &[os[0], m, 4, k],
        ));
    }
    let off1 = tape.narrow(raw_offsets, 2, 0, 2)?;
    let off2 = tape.narrow(raw_offsets, 2, 2, 2)?;
    let offsets = tape.concat(&[off1, off2], 3)?;
    let w1 = tape.narrow(raw_weights, 2, 0, 2)?;
    let w2 = tape.narrow(raw_weights, 2, 2, 2)?;
    let merged_w = tape.concat(&[w1, w2], 3)?;
    let weights = tape.softmax(merged_w, 2)?;
    Ok(SamplingSet {
        offsets,
        weights,
        reference: reference.clone(),
    })
}

/// Ablation baseline for the incomplete path: keeps only the first split set
/// (`K` points per slot) and renormalizes its weights over `(2, K)`.
pub fn single_sampling_set(
    tape: &mut Tape,
    raw_offsets: Var,
    raw_weights: Var,
    reference: &Tensor,
) -> Result<SamplingSet> {
    let offsets = tape.narrow(raw_offsets, 2, 0, 2)?;
    let w = tape.narrow(raw_weights, 2, 0, 2)?;
    let weights = tape.softmax(w, 2)?;
    Ok(SamplingSet {
        offsets,
        weights,
        reference: reference.clone(),
    })
}

/// Intermediate products shared by both paths, exposed for the
/// duplication-consistency contract.
pub struct MadaTrace {
    pub z: Var,
    pub raw_offsets: Var,
    pub raw_weights: Var,
}

/// Per-head slices of the value-projected source maps, `[2][m]` of
/// `[H, W, d_head]`. The projection runs once per distinct source map.
fn value_head_slices(
    tape: &mut Tape,
    params: &MadaParams,
    cfg: &MadaConfig,
    sources: [Var; 2],
) -> Result<[Vec<Var>; 2]> {
    let dh = cfg.d_head();
    let val0 = params.value_proj.apply_conv1x1(tape, sources[0])?;
    let val1 = if sources[1] == sources[0] {
        val0
    } else {
        params.value_proj.apply_conv1x1(tape, sources[1])?
    };
    let mut out: [Vec<Var>; 2] = [Vec::new(), Vec::new()];
    for (slot, val) in [val0, val1].into_iter().enumerate() {
        for head in 0..cfg.heads {
            out[slot].push(tape.narrow(val, 2, head * dh, dh)?);
        }
    }
    Ok(out)
}

/// Weighted deformable aggregation of one output set: per head, sum over
/// (source slot, point) of `weight * value_slice(source)(reference + offset)`,
/// then the shared output projection. Returns an `[H, W, c]` map.
fn aggregate(
    tape: &mut Tape,
    set: &SamplingSet,
    head_slices: &[Vec<Var>; 2],
    params: &MadaParams,
    cfg: &MadaConfig,
    h: usize,
    w: usize,
) -> Result<Var> {
    let l = h * w;
    let kp = set.points_per_slot(tape);
    let locs = tape.add_anchors(set.offsets, &set.reference)?;
    let mut heads = Vec::with_capacity(cfg.heads);
    for head in 0..cfg.heads {
        let locs_h = tape.narrow(locs, 1, head, 1)?;
        let w_h = tape.narrow(set.weights, 1, head, 1)?;
        let mut acc: Option<Var> = None;
        for slot in 0..2 {
            let locs_hs = tape.narrow(locs_h, 2, slot, 1)?;
            let w_hs = tape.narrow(w_h, 2, slot, 1)?;
            for point in 0..kp {
                let p = tape.narrow(locs_hs, 3, point, 1)?;
                let pts = tape.reshape(p, vec![l, 2])?;
                let sampled = tape.bilinear_sample(head_slices[slot][head], pts)?;
                let wq = tape.narrow(w_hs, 3, point, 1)?;
                let wq = tape.reshape(wq, vec![l])?;
                let term = tape.scale_rows(sampled, wq)?;
                acc = Some(match acc {
                    Some(a) => tape.add(a, term)?,
                    None => term,
                });
            }
        }
        heads.push(acc.expect("at least one point"));
    }
    let merged = if heads.len() == 1 {
        heads[0]
    } else {
        tape.concat(&heads, 1)?
    };
    let out = params.out_proj.apply(tape, merged)?;
    tape.reshape(out, vec![h, w, cfg.channels])
}

fn check_map(tape: &Tape, x: Var, cfg: &MadaConfig, op: &'static str) -> Result<(usize, usize)> {
    let xs = tape.shape(x);
    if xs.len() != 3 || xs[2] != cfg.channels {
        return Err(ScarfError::shape(op, xs, &[0, 0, cfg.channels]));
    }
    tape.value(x).check_finite(op)?;
    Ok((xs[0], xs[1]))
}

/// Complete-modality forward: updates both maps from both maps.
pub fn mada_forward_complete(
    tape: &mut Tape,
    x_v: Var,
    x_t: Var,
    params: &MadaParams,
    cfg: &MadaConfig,
) -> Result<(Var, Var)> {
    let (y_v, y_t, _) = mada_forward_complete_traced(tape, x_v, x_t, params, cfg)?;
    Ok((y_v, y_t))
}

pub fn mada_forward_complete_traced(
    tape: &mut Tape,
    x_v: Var,
    x_t: Var,
    params: &MadaParams,
    cfg: &MadaConfig,
) -> Result<(Var, Var, MadaTrace)> {
    cfg.validate()?;
    let (h, w) = check_map(tape, x_v, cfg, "mada_forward_complete")?;
    if tape.shape(x_v) != tape.shape(x_t) {
        return Err(ScarfError::shape(
            "mada_forward_complete",
            tape.shape(x_v),
            tape.shape(x_t),
        ));
    }
    tape.value(x_t).check_finite("mada_forward_complete")?;
    let l = h * w;
    let c = cfg.channels;
    let e_v = tape.reshape(x_v, vec![l, c])?;
    let e_t = tape.reshape(x_t, vec![l, c])?;
    let z = combine_tokens(tape, Some(e_v), Some(e_t))?;
    let reference = reference_points(h, w);
    let (raw_offsets, raw_weights) = project_raw(tape, z, params, cfg)?;
    let (v_set, t_set) = split_sets(tape, raw_offsets, raw_weights, &reference)?;
    let head_slices = value_head_slices(tape, params, cfg, [x_v, x_t])?;
    let y_v = aggregate(tape, &v_set, &head_slices, params, cfg, h, w)?;
    let y_t = aggregate(tape, &t_set, &head_slices, params, cfg, h, w)?;
    Ok((
        y_v,
        y_t,
        MadaTrace {
            z,
            raw_offsets,
            raw_weights,
        },
    ))
}

/// Incomplete-modality forward with double sampling: the single available map
/// is updated from all `4K` sampled points per head.
pub fn mada_forward_incomplete(
    tape: &mut Tape,
    x_s: Var,
    params: &MadaParams,
    cfg: &MadaConfig,
) -> Result<Var> {
    let (y, _) = mada_forward_incomplete_traced(tape, x_s, params, cfg)?;
    Ok(y)
}

pub fn mada_forward_incomplete_traced(
    tape: &mut Tape,
    x_s: Var,
    params: &MadaParams,
    cfg: &MadaConfig,
) -> Result<(Var, MadaTrace)> {
    cfg.validate()?;
    let (h, w) = check_map(tape, x_s, cfg, "mada_forward_incomplete")?;
    let l = h * w;
    let e_s = tape.reshape(x_s, vec![l, cfg.channels])?;
    let z = combine_tokens(tape, Some(e_s), None)?;
    let reference = reference_points(h, w);
    let (raw_offsets, raw_weights) = project_raw(tape, z, params, cfg)?;
    let set = merge_incomplete(tape, raw_offsets, raw_weights, cfg, &reference)?;
    let head_slices = value_head_slices(tape, params, cfg, [x_s, x_s])?;
    let y = aggregate(tape, &set, &head_slices, params, cfg, h, w)?;
    Ok((
        y,
        MadaTrace {
            z,
            raw_offsets,
            raw_weights,
        },
    ))
}

/// Ablation baseline: as [`mada_forward_incomplete`] but restricted to the
/// first split set (`2K` sampled points per head instead of `4K`).
pub fn mada_forward_incomplete_single_sampling(
    tape: &mut Tape,
    x_s: Var,
    params: &MadaParams,
    cfg: &MadaConfig,
) -> Result<Var> {
    cfg.validate()?;
    let (h, w) = check_map(tape, x_s, cfg, "mada_forward_incomplete_single_sampling")?;
    let l = h * w;
    let e_s = tape.reshape(x_s, vec![l, cfg.channels])?;
    let z = combine_tokens(tape, Some(e_s), None)?;
    let reference = reference_points(h, w);
    let (raw_offsets, raw_weights) = project_raw(tape, z, params, cfg)?;
    let set = single_sampling_set(tape, raw_offsets, raw_weights, &reference)?;
    let head_slices = value_head_slices(tape, params, cfg, [x_s, x_s])?;
    aggregate(tape, &set, &head_slices, params, cfg, h, w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(c: usize, m: usize, k: usize) -> MadaConfig {
        MadaConfig::new(c, m, k).unwrap()
    }

    fn random_map(h: usize, w: usize, c: usize, rng: &mut ChaCha8Rng) -> Tensor {
        crate::tensor::uniform(&[h, w, c], 1.0, rng)
    }

    #[test]
    fn reference_points_enumeration() {
        assert_eq!(reference_points(1, 1).data(), &[0.0, 0.0]);
        assert_eq!(
            reference_points(2, 2).data(),
            &[0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 1.0, 1.0]
        );
        let r = reference_points(3, 5);
        assert_eq!(&r.data()[7 * 2..7 * 2 + 2], &[1.0, 2.0]);
    }

    #[test]
    fn combine_tokens_pairs_and_duplicates() {
        let mut tape = Tape::new();
        let v = tape.leaf(Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap());
        let t = tape.leaf(Tensor::new(vec![1, 2], vec![3.0, 4.0]).unwrap());
        let both = combine_tokens(&mut tape, Some(v), Some(t)).unwrap();
        assert_eq!(tape.value(both).data(), &[1.0, 2.0, 3.0, 4.0]);
        let vis_only = combine_tokens(&mut tape, Some(v), None).unwrap();
        assert_eq!(tape.value(vis_only).data(), &[1.0, 2.0, 1.0, 2.0]);
        let err = combine_tokens(&mut tape, None, None).unwrap_err();
        assert!(err.to_string().contains("no modality available"));
    }

    #[test]
    fn zero_weight_proj_gives_uniform_attention() {
        let c = cfg(4, 1, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let params = MadaParams::init("mada", &c, &mut rng);
        let mut tape = Tape::new();
        let x = tape.leaf(random_map(2, 2, 4, &mut rng));
        let e = tape.reshape(x, vec![4, 4]).unwrap();
        let z = combine_tokens(&mut tape, Some(e), Some(e)).unwrap();
        let reference = reference_points(2, 2);
        let (v_set, t_set) =
            project_and_split_complete(&mut tape, z, &params, &c, &reference).unwrap();
        for set in [&v_set, &t_set] {
            for &w in tape.value(set.weights).data() {
                assert!((w - 1.0 / (2.0 * 2.0)).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn zero_offset_proj_keeps_points_at_reference() {
        let c = cfg(4, 1, 2);
        let params = MadaParams {
            offset_proj: LinearParams::zeros("m.offset_proj", 8, 4 * 2 * 2),
            weight_proj: LinearParams::zeros("m.weight_proj", 8, 4 * 2),
            value_proj: LinearParams::zeros("m.value_proj", 4, 4),
            out_proj: LinearParams::zeros("m.out_proj", 4, 4),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut tape = Tape::new();
        let x = tape.leaf(random_map(2, 2, 4, &mut rng));
        let e = tape.reshape(x, vec![4, 4]).unwrap();
        let z = combine_tokens(&mut tape, Some(e), Some(e)).unwrap();
        let reference = reference_points(2, 2);
        let (v_set, _) = project_and_split_complete(&mut tape, z, &params, &c, &reference).unwrap();
        assert!(tape.value(v_set.offsets).data().iter().all(|&o| o == 0.0));
    }

    #[test]
    fn split_then_concat_recovers_raw_projection() {
        let c = cfg(4, 1, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let params = MadaParams::init("mada", &c, &mut rng);
        let mut tape = Tape::new();
        let x = tape.leaf(random_map(2, 2, 4, &mut rng));
        let e = tape.reshape(x, vec![4, 4]).unwrap();
        let z = combine_tokens(&mut tape, Some(e), Some(e)).unwrap();
        let (raw_off, raw_w) = project_raw(&mut tape, z, &params, &c).unwrap();
        let o1 = tape.narrow(raw_off, 2, 0, 2).unwrap();
        let o2 = tape.narrow(raw_off, 2, 2, 2).unwrap();
        let rebuilt = tape.concat(&[o1, o2], 2).unwrap();
        assert_eq!(tape.value(rebuilt).data(), tape.value(raw_off).data());
        let w1 = tape.narrow(raw_w, 2, 0, 2).unwrap();
        let w2 = tape.narrow(raw_w, 2, 2, 2).unwrap();
        let rebuilt_w = tape.concat(&[w1, w2], 2).unwrap();
        assert_eq!(tape.value(rebuilt_w).data(), tape.value(raw_w).data());
    }

    #[test]
    fn merged_weights_of_zero_raw_are_quarter_k() {
        let c = cfg(4, 2, 2);
        let mut tape = Tape::new();
        let l = 3;
        let raw_off = tape.leaf(Tensor::zeros(&[l, 2, 4, 2, 2]));
        let raw_w = tape.leaf(Tensor::zeros(&[l, 2, 4, 2]));
        let set = merge_incomplete(&mut tape, raw_off, raw_w, &c, &reference_points(1, 3)).unwrap();
        for &w in tape.value(set.weights).data() {
            assert!((w - 1.0 / (4.0 * 2.0)).abs() < 1e-15);
        }
        assert_eq!(tape.shape(set.offsets), &[l, 2, 2, 4, 2]);
    }

    #[test]
    fn merge_keeps_split_halves_in_order() {
        let c = cfg(4, 1, 2);
        let mut tape = Tape::new();
        let l = 2;
        // raw offsets valued by their 4-axis index so halves are recognizable
        let mut data = vec![0.0; l * 4 * 2 * 2];
        for q in 0..l {
            for quad in 0..4 {
                for k in 0..2 {
                    let base = ((q * 4 + quad) * 2 + k) * 2;
                    data[base] = quad as f64;
                    data[base + 1] = k as f64;
                }
            }
        }
        let raw_off = tape.leaf(Tensor::new(vec![l, 1, 4, 2, 2], data).unwrap());
        let raw_w = tape.leaf(Tensor::zeros(&[l, 1, 4, 2]));
        let set = merge_incomplete(&mut tape, raw_off, raw_w, &c, &reference_points(1, 2)).unwrap();
        let merged = tape.value(set.offsets).clone();
        // (source i, point k < K) comes from split set 1 (quads 0 and 1),
        // k >= K from split set 2 (quads 2 and 3).
        for q in 0..l {
            for src in 0..2 {
                for k in 0..4 {
                    let expect_quad = if k < 2 { src } else { 2 + src } as f64;
                    assert_eq!(merged.get(&[q, 0, src, k, 0]), expect_quad);
                    assert_eq!(merged.get(&[q, 0, src, k, 1]), (k % 2) as f64);
                }
            }
        }
    }

    #[test]
    fn merge_preserves_point_multiset() {
        let c = cfg(4, 1, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut tape = Tape::new();
        let raw = crate::tensor::uniform(&[1, 1, 4, 1, 2], 1.0, &mut rng);
        let raw_off = tape.leaf(raw.clone());
        let raw_w = tape.leaf(Tensor::zeros(&[1, 1, 4, 1]));
        let set = merge_incomplete(&mut tape, raw_off, raw_w, &c, &reference_points(1, 1)).unwrap();
        assert_eq!(tape.shape(set.offsets), &[1, 1, 2, 2, 2]);
        let mut original: Vec<(u64, u64)> = (0..4)
            .map(|i| (raw.data()[i * 2].to_bits(), raw.data()[i * 2 + 1].to_bits()))
            .collect();
        let merged = tape.value(set.offsets);
        let mut result: Vec<(u64, u64)> = (0..4)
            .map(|i| {
                (
                    merged.data()[i * 2].to_bits(),
                    merged.data()[i * 2 + 1].to_bits(),
                )
            })
            .collect();
        original.sort_unstable();
        result.sort_unstable();
        assert_eq!(original, result);
    }

    /// Zero offsets and zero raw weights make both paths collapse to the
    /// value+output projection of a constant map.
    #[test]
    fn uniform_attention_on_constant_map() {
        let c = cfg(4, 2, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut params = MadaParams::init("mada", &c, &mut rng);
        params
            .offset_proj
            .bias
            .set_value(Tensor::zeros(&[2 * 4 * 2 * 2]));
        let v0 = [0.3, -0.7, 1.1, 0.25];
        let map =
            Tensor::new(vec![3, 3, 4], v0.iter().cycle().take(36).copied().collect()).unwrap();

        // Expected: out_proj(value_proj(v0)) for a single token.
        let mut expect_tape = Tape::new();
        let tok = expect_tape.leaf(Tensor::new(vec![1, 4], v0.to_vec()).unwrap());
        let val = params.value_proj.apply(&mut expect_tape, tok).unwrap();
        let out = params.out_proj.apply(&mut expect_tape, val).unwrap();
        let expected = expect_tape.value(out).data().to_vec();

        let mut tape = Tape::new();
        let x = tape.leaf(map.clone());
        let (y_v, y_t) = mada_forward_complete(&mut tape, x, x, &params, &c).unwrap();
        let y_s = mada_forward_incomplete(&mut tape, x, &params, &c).unwrap();
        for y in [y_v, y_t, y_s] {
            let data = tape.value(y).data();
            for q in 0..9 {
                for ch in 0..4 {
                    assert!(
                        (data[q * 4 + ch] - expected[ch]).abs() < 1e-12,
                        "token {q} channel {ch}"
                    );
                }
            }
        }
    }

    /// Shifting the map shifts interior outputs identically when offsets are
    /// zero (the output is then a pointwise function of the map value at the
    /// reference point).
    #[test]
    fn incomplete_path_is_translation_consistent_at_zero_offsets() {
        let c = cfg(4, 1, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut params = MadaParams::init("mada", &c, &mut rng);
        params
            .offset_proj
            .bias
            .set_value(Tensor::zeros(&[4 * 2 * 2]));
        let (h, w) = (4, 4);
        let x = random_map(h, w, 4, &mut rng);
        // shift down-right by one cell with zero padding
        let mut shifted = vec![0.0; h * w * 4];
        for i in 1..h {
            for j in 1..w {
                for ch in 0..4 {
                    shifted[(i * w + j) * 4 + ch] = x.get(&[i - 1, j - 1, ch]);
                }
            }
        }
        let shifted = Tensor::new(vec![h, w, 4], shifted).unwrap();

        let mut tape = Tape::new();
        let xv = tape.leaf(x);
        let sv = tape.leaf(shifted);
        let y = mada_forward_incomplete(&mut tape, xv, &params, &c).unwrap();
        let ys = mada_forward_incomplete(&mut tape, sv, &params, &c).unwrap();
        let (yv, ysv) = (tape.value(y).clone(), tape.value(ys).clone());
        for i in 1..h {
            for j in 1..w {
                for ch in 0..4 {
                    let a = yv.get(&[i - 1, j - 1, ch]);
                    let b = ysv.get(&[i, j, ch]);
                    assert!((a - b).abs() < 1e-12, "cell ({i},{j}) ch {ch}");
                }
            }
        }
    }

    #[test]
    fn single_sampling_uniform_weights_and_shapes() {
        let c = cfg(4, 1, 2);
        let mut tape = Tape::new();
        let raw_off = tape.leaf(Tensor::zeros(&[4, 1, 4, 2, 2]));
        let raw_w = tape.leaf(Tensor::zeros(&[4, 1, 4, 2]));
        let set = single_sampling_set(&mut tape, raw_off, raw_w, &reference_points(2, 2)).unwrap();
        for &w in tape.value(set.weights).data() {
            assert!((w - 1.0 / (2.0 * 2.0)).abs() < 1e-15);
        }
        // Doubling K in the config makes the single-sampling point count
        // (2 * 2K) match the default double-sampling count at K (4K).
        let single_points_with_doubled_k = 2 * (2 * c.points);
        let double_points = 4 * c.points;
        assert_eq!(single_points_with_doubled_k, double_points);
        assert_eq!(tape.shape(set.offsets)[3], c.points);
    }

    #[test]
    fn single_sampling_differs_from_double_on_random_instance() {
        let c = cfg(4, 1, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut params = MadaParams::init("mada", &c, &mut rng);
        // Random projections so the two split sets genuinely differ.
        params
            .offset_proj
            .weight
            .set_value(crate::tensor::uniform(&[8, 16], 0.5, &mut rng));
        params
            .weight_proj
            .weight
            .set_value(crate::tensor::uniform(&[8, 8], 0.5, &mut rng));
        let mut tape = Tape::new();
        let x = tape.leaf(random_map(3, 3, 4, &mut rng));
        let double = mada_forward_incomplete(&mut tape, x, &params, &c).unwrap();
        let single = mada_forward_incomplete_single_sampling(&mut tape, x, &params, &c).unwrap();
        let diff = tape.value(double).max_abs_diff(tape.value(single));
        assert!(diff > 1e-6, "expected paths to differ, max diff {diff}");
    }

    /// With identical modalities, the complete and incomplete paths see the
    /// same stacked tokens, hence bitwise-identical raw projections.
    #[test]
    fn duplication_yields_bitwise_identical_raw_projections() {
        let c = cfg(8, 2, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut params = MadaParams::init("mada", &c, &mut rng);
        params
            .offset_proj
            .weight
            .set_value(crate::tensor::uniform(&[16, 2 * 4 * 2 * 2], 0.5, &mut rng));
        params
            .weight_proj
            .weight
            .set_value(crate::tensor::uniform(&[16, 2 * 4 * 2], 0.5, &mut rng));
        let mut tape = Tape::new();
        let x = tape.leaf(random_map(3, 4, 8, &mut rng));
        let (_, _, complete) = mada_forward_complete_traced(&mut tape, x, x, &params, &c).unwrap();
        let (_, incomplete) = mada_forward_incomplete_traced(&mut tape, x, &params, &c).unwrap();
        assert_eq!(
            tape.value(complete.z).data(),
            tape.value(incomplete.z).data()
        );
        assert_eq!(
            tape.value(complete.raw_offsets).data(),
            tape.value(incomplete.raw_offsets).data()
        );
        assert_eq!(
            tape.value(complete.raw_weights).data(),
            tape.value(incomplete.raw_weights).data()
        );
    }

    #[test]
    fn forward_rejects_nan_input() {
        let c = cfg(4, 1, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let params = MadaParams::init("mada", &c, &mut rng);
        let mut tape = Tape::new();
        let mut data = vec![0.0; 2 * 2 * 4];
        data[3] = f64::NAN;
        let x = tape.leaf(Tensor::from_parts(vec![2, 2, 4], data));
        assert!(mada_forward_incomplete(&mut tape, x, &params, &c).is_err());
    }

    #[test]
    fn forward_rejects_mismatched_shapes() {
        let c = cfg(4, 1, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let params = MadaParams::init("mada", &c, &mut rng);
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[2, 2, 4]));
        let b = tape.leaf(Tensor::zeros(&[2, 3, 4]));
        assert!(mada_forward_complete(&mut tape, a, b, &params, &c).is_err());
    }
}
