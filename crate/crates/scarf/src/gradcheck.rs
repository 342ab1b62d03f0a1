//! Finite-difference gradient verification.
//!
//! [`finite_diff_grad`] is the independent oracle: central differences over a
//! scalar-valued function of a parameter, never touching analytic gradients.
//! The `check_*` harness compares every differentiable operation (and the
//! composite attention/neck/detector stacks) against it at seeded random
//! points and reports the worst relative error.
//!
//! Sampling locations that sit within `GRID_EXEMPT` of an integer grid line
//! are excluded by construction (points are resampled, composite instances
//! reseeded): exactly on a line the bilinear interpolation picks the
//! subgradient of the cell indexed by `floor(coordinate)`, which a central
//! difference straddles.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::batching::BoxLabel;
use crate::benchmark::BBox;
use crate::error::{Result, ScarfError};
use crate::mada::{
    mada_forward_complete, mada_forward_incomplete, mada_forward_incomplete_single_sampling,
    MadaConfig, MadaParams,
};
use crate::neck::{
    neck_forward, scarf_block_forward, FeatureBundle, ScaleSpec, ScarfBlockParams,
    ScarfNeckConfig, ScarfNeckParams,
};
use crate::params::{ParamGroup, Parameter};
use crate::synth::{detection_loss, ToyConfig, ToyDetectorParams};
use crate::tape::{Tape, Var};
use crate::tensor::{uniform, Tensor};

/// Default central-difference step.
pub const DEFAULT_STEP: f64 = 1e-5;
/// Distance to an integer grid line below which a sampling point is excluded.
pub const GRID_EXEMPT: f64 = 1e-3;
/// Random points per operation check.
const POINTS: usize = 10;
/// Relative errors are measured against `max(|analytic|, |numeric|, FLOOR)`.
const REL_FLOOR: f64 = 1e-4;

/// Central differences `(f(p + h e_i) - f(p - h e_i)) / 2h` per element of
/// the parameter's value. Reads only function values.
pub fn finite_diff_grad(
    f: &mut dyn FnMut(&Parameter) -> Result<f64>,
    p: &mut Parameter,
    h: f64,
) -> Result<Tensor> {
    if h <= 0.0 {
        return Err(ScarfError::Argument("finite difference step must be positive".into()));
    }
    let original = p.value().clone();
    let shape = original.shape().to_vec();
    let mut grad = Vec::with_capacity(original.numel());
    for j in 0..original.numel() {
        let mut at = |x: f64| -> Result<f64> {
            let mut data = original.data().to_vec();
            data[j] = x;
            p.set_value(Tensor::from_parts(shape.clone(), data));
            f(p)
        };
        let x0 = original.data()[j];
        let plus = at(x0 + h)?;
        let minus = at(x0 - h)?;
        grad.push((plus - minus) / (2.0 * h));
    }
    p.set_value(original);
    Ok(Tensor::from_parts(shape, grad))
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn param_ids(group: &dyn ParamGroup) -> Vec<crate::params::ParamId> {
    let mut ids = Vec::new();
    group.visit(&mut |p| ids.push(p.id()));
    ids
}

fn param_values(group: &dyn ParamGroup) -> Vec<Tensor> {
    let mut values = Vec::new();
    group.visit(&mut |p| values.push(p.value().clone()));
    values
}

fn set_param_value(group: &mut dyn ParamGroup, index: usize, value: &Tensor) {
    let mut i = 0;
    group.visit_mut(&mut |p| {
        if i == index {
            p.set_value(value.clone());
        }
        i += 1;
    });
}

/// Worst relative error between analytic and central-difference gradients of
/// a scalar loss, over every parameter of `group` and every tensor in
/// `inputs`.
fn check_model<G: ParamGroup>(
    group: &mut G,
    inputs: &[Tensor],
    h: f64,
    build: &dyn Fn(&mut Tape, &G, &[Var]) -> Result<Var>,
) -> Result<f64> {
    let mut tape = Tape::new();
    let input_vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = build(&mut tape, group, &input_vars)?;
    let grads = tape.backward(loss)?;

    let eval = |group: &G, override_input: Option<(usize, &Tensor)>| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs
            .iter()
            .enumerate()
            .map(|(k, t)| match override_input {
                Some((i, o)) if i == k => tape.leaf(o.clone()),
                _ => tape.leaf(t.clone()),
            })
            .collect();
        let loss = build(&mut tape, group, &vars)?;
        Ok(tape.value(loss).item())
    };

    let mut worst: f64 = 0.0;
    let ids = param_ids(group);
    let values = param_values(group);
    for (pi, value) in values.iter().enumerate() {
        let analytic = grads
            .param(ids[pi])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(value.shape()));
        for j in 0..value.numel() {
            let x0 = value.data()[j];
            let mut at = |x: f64| -> Result<f64> {
                let mut data = value.data().to_vec();
                data[j] = x;
                set_param_value(group, pi, &Tensor::from_parts(value.shape().to_vec(), data));
                eval(group, None)
            };
            let plus = at(x0 + h)?;
            let minus = at(x0 - h)?;
            set_param_value(group, pi, value);
            let numeric = (plus - minus) / (2.0 * h);
            worst = worst.max(rel_err(analytic.data()[j], numeric));
        }
    }
    for (ii, t) in inputs.iter().enumerate() {
        let analytic = grads
            .wrt(input_vars[ii])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(t.shape()));
        for j in 0..t.numel() {
            let x0 = t.data()[j];
            let mut at = |x: f64| -> Result<f64> {
                let mut data = t.data().to_vec();
                data[j] = x;
                let perturbed = Tensor::from_parts(t.shape().to_vec(), data);
                eval(group, Some((ii, &perturbed)))
            };
            let plus = at(x0 + h)?;
            let minus = at(x0 - h)?;
            let numeric = (plus - minus) / (2.0 * h);
            worst = worst.max(rel_err(analytic.data()[j], numeric));
        }
    }
    Ok(worst)
}

/// Inputs-only convenience wrapper.
fn check_inputs(
    inputs: &[Tensor],
    h: f64,
    build: &dyn Fn(&mut Tape, &[Var]) -> Result<Var>,
) -> Result<f64> {
    let mut empty: Vec<Parameter> = Vec::new();
    check_model(&mut empty, inputs, h, &|tape, _, vars| build(tape, vars))
}

/// `sum(out * coeffs)` so the checked loss has non-degenerate sensitivities.
fn weighted(tape: &mut Tape, out: Var, coeffs: &Tensor) -> Result<Var> {
    let c = tape.leaf(coeffs.clone());
    let prod = tape.mul(out, c)?;
    tape.sum_all(prod)
}

fn rng_for(seed: u64, point: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_add(point as u64).wrapping_mul(0x9e3779b97f4a7c15))
}

/// Uniform values kept away from integer grid lines.
fn off_grid_points(n: usize, max: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let mut data = Vec::with_capacity(n * 2);
    while data.len() < n * 2 {
        let v: f64 = rng.gen_range(-1.5..max + 1.5);
        if (v - v.round()).abs() > GRID_EXEMPT {
            data.push(v);
        }
    }
    Tensor::from_parts(vec![n, 2], data)
}

// ── op-level checks ──────────────────────────────────────────────────

fn check_linear(seed: u64) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for point in 0..POINTS {
        let mut rng = rng_for(seed, point);
        let x = uniform(&[3, 4], 1.0, &mut rng);
        let w = uniform(&[4, 2], 1.0, &mut rng);
        let b = uniform(&[2], 1.0, &mut rng);
        let coeffs = uniform(&[3, 2], 0.5, &mut rng);
        worst = worst.max(check_inputs(&[x, w, b], DEFAULT_STEP, &|tape, v| {
            let out = tape.linear(v[0], v[1], v[2])?;
            weighted(tape, out, &coeffs)
        })?);
    }
    Ok(worst)
}

fn check_conv1x1(seed: u64) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for point in 0..POINTS {
        let mut rng = rng_for(seed, point);
        let x = uniform(&[2, 3, 4], 1.0, &mut rng);
        let w = uniform(&[4, 2], 1.0, &mut rng);
        let b = uniform(&[2], 1.0, &mut rng);
        let coeffs = uniform(&[2, 3, 2], 0.5, &mut rng);
        worst = worst.max(check_inputs(&[x, w, b], DEFAULT_STEP, &|tape, v| {
            let out = tape.conv1x1(v[0], v[1], v[2])?;
            weighted(tape, out, &coeffs)
        })?);
    }
    Ok(worst)
}

fn check_softmax(seed: u64) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for point in 0..POINTS {
        let mut rng = rng_for(seed, point);
        let x = uniform(&[2, 3, 4], 1.5, &mut rng);
        let coeffs = uniform(&[2, 3, 4], 0.5, &mut rng);
        worst = worst.max(check_inputs(&[x], DEFAULT_STEP, &|tape, v| {
            let out = tape.softmax(v[0], 2)?;
            weighted(tape, out, &coeffs)
        })?);
    }
    Ok(worst)
}

fn check_layer_norm(seed: u64) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for point in 0..POINTS {
        let mut rng = rng_for(seed, point);
        let x = uniform(&[5, 8], 1.0, &mut rng);
        let gamma = uniform(&[8], 1.0, &mut rng);
        let beta = uniform(&[8], 1.0, &mut rng);
        let coeffs = uniform(&[5, 8], 0.5, &mut rng);
        worst = worst.max(check_inputs(&[x, gamma, beta], DEFAULT_STEP, &|tape, v| {
            let out = tape.layer_norm(v[0], v[1], v[2], 1e-5)?;
            weighted(tape, out, &coeffs)
        })?);
    }
    Ok(worst)
}

fn check_bilinear(seed: u64) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for point in 0..POINTS {
        let mut rng = rng_for(seed, point);
        let feat = uniform(&[4, 5, 3], 1.0, &mut rng);
        let pts = off_grid_points(6, 5.0, &mut rng);
        let coeffs = uniform(&[6, 3], 0.5, &mut rng);
        worst = worst.max(check_inputs(&[feat, pts], DEFAULT_STEP, &|tape, v| {
            let out = tape.bilinear_sample(v[0], v[1])?;
            weighted(tape, out, &coeffs)
        })?);
    }
    Ok(worst)
}

fn check_silu(seed: u64) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for point in 0..POINTS {
        let mut rng = rng_for(seed, point);
        let x = uniform(&[8], 2.0, &mut rng);
        let coeffs = uniform(&[8], 0.5, &mut rng);
        worst = worst.max(check_inputs(&[x], DEFAULT_STEP, &|tape, v| {
            let out = tape.silu(v[0])?;
            weighted(tape, out, &coeffs)
        })?);
    }
    Ok(worst)
}

fn check_elementwise(seed: u64, which: &'static str) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for point in 0..POINTS {
        let mut rng = rng_for(seed, point);
        let a = uniform(&[2, 3], 1.0, &mut rng);
        let b = uniform(&[2, 3], 1.0, &mut rng);
        let coeffs = uniform(&[2, 3], 0.5, &mut rng);
        worst = worst.max(check_inputs(&[a, b], DEFAULT_STEP, &|tape, v| {
            let out = match which {
                "add" => tape.add(v[0], v[1])?,
                "sub" => tape.sub(v[0], v[1])?,
                _ => tape.mul(v[0], v[1])?,
            };
            weighted(tape, out, &coeffs)
        })?);
    }
    Ok(worst)
}

fn check_scale(seed: u64) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for point in 0..POINTS {
        let mut rng = rng_for(seed, point);
        let x = uniform(&[5], 1.0, &mut rng);
        let coeffs = uniform(&[5], 0.5, &mut rng);
        worst = worst.max(check_inputs(&[x], DEFAULT_STEP, &|tape, v| {
            let out = tape.scale(v[0], -1.7)?;
            weighted(tape, out, &coeffs)
        })?);
    }
    Ok(worst)
}

fn check_scale_rows(seed: u64) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for point in 0..POINTS {
        let mut rng = rng_for(seed, point);
        let x = uniform(&[4, 3], 1.0, &mut rng);
        let w = uniform(&[4], 1.0, &mut rng);
        let coeffs = uniform(&[4, 3], 0.5, &mut rng);
        worst = worst.max(check_inputs(&[x, w], DEFAULT_STEP, &|tape, v| {
            let out = tape.scale_rows(v[0], v[1])?;
            weighted(tape, out, &coeffs)
        })?);
    }
    Ok(worst)
}

fn check_narrow(seed: u64) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for point in 0..POINTS {
        let mut rng = rng_for(seed, point);
        let x = uniform(&[3, 4, 2], 1.0, &mut rng);
        let coeffs = uniform(&[3, 2, 2], 0.5, &mut rng);
        worst = worst.max(check_inputs(&[x], DEFAULT_STEP, &|tape, v| {
            let out = tape.narrow(v[0], 1, 1, 2)?;
            weighted(tape, out, &coeffs)
        })?);
    }
    Ok(worst)
}

fn check_concat(seed: u64) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for point in 0..POINTS {
        let mut rng = rng_for(seed, point);
        let a = uniform(&[2, 2, 3], 1.0, &mut rng);
        let b = uniform(&[2, 1, 3], 1.0, &mut rng);
        let coeffs = uniform(&[2, 3, 3], 0.5, &mut rng);
        worst = worst.max(check_inputs(&[a, b], DEFAULT_STEP, &|tape, v| {
            let out = tape.concat(&[v[0], v[1]], 1)?;
            weighted(tape, out, &coeffs)
        })?);
    }
    Ok(worst)
}

fn check_reshape(seed: u64) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for point in 0..POINTS {
        let mut rng = rng_for(seed, point);
        let x = uniform(&[3, 4], 1.0, &mut rng);
        let coeffs = uniform(&[2, 6], 0.5, &mut rng);
        worst = worst.max(check_inputs(&[x], DEFAULT_STEP, &|tape, v| {
            let out = tape.reshape(v[0], vec![2, 6])?;
            weighted(tape, out, &coeffs)
        })?);
    }
    Ok(worst)
}

fn check_add_anchors(seed: u64) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for point in 0..POINTS {
        let mut rng = rng_for(seed, point);
        let x = uniform(&[4, 2, 2], 1.0, &mut rng);
        let anchors = uniform(&[4, 2], 2.0, &mut rng);
        let coeffs = uniform(&[4, 2, 2], 0.5, &mut rng);
        worst = worst.max(check_inputs(&[x], DEFAULT_STEP, &|tape, v| {
            let out = tape.add_anchors(v[0], &anchors)?;
            weighted(tape, out, &coeffs)
        })?);
    }
    Ok(worst)
}

fn check_sum(seed: u64) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for point in 0..POINTS {
        let mut rng = rng_for(seed, point);
        let x = uniform(&[7], 1.0, &mut rng);
        worst = worst.max(check_inputs(&[x], DEFAULT_STEP, &|tape, v| tape.sum_all(v[0]))?);
    }
    Ok(worst)
}

fn check_bce(seed: u64) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for point in 0..POINTS {
        let mut rng = rng_for(seed, point);
        let logits = uniform(&[9], 3.0, &mut rng);
        let targets = Tensor::from_parts(
            vec![9],
            (0..9).map(|_| rng.gen_range(0.0..1.0)).collect(),
        );
        worst = worst.max(check_inputs(&[logits], DEFAULT_STEP, &|tape, v| {
            tape.bce_with_logits(v[0], &targets)
        })?);
    }
    Ok(worst)
}

fn check_l1_masked(seed: u64) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for point in 0..POINTS {
        let mut rng = rng_for(seed, point);
        let pred = uniform(&[6, 4], 1.0, &mut rng);
        // Targets offset away from the predictions so the finite difference
        // never crosses the |.| kink.
        let target = Tensor::from_parts(
            vec![6, 4],
            pred.data()
                .iter()
                .map(|&p| p + if rng.gen_bool(0.5) { 0.2 } else { -0.2 })
                .collect(),
        );
        let mut mask_data: Vec<f64> = (0..24)
            .map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 })
            .collect();
        mask_data[0] = 1.0;
        let mask = Tensor::from_parts(vec![6, 4], mask_data);
        worst = worst.max(check_inputs(&[pred], DEFAULT_STEP, &|tape, v| {
            tape.l1_masked(v[0], &target, &mask)
        })?);
    }
    Ok(worst)
}

// ── composite checks ─────────────────────────────────────────────────

/// Re-randomizes every parameter in the group (gradcheck wants generic
/// values, not the structured training init).
fn randomize(group: &mut dyn ParamGroup, scale: f64, rng: &mut ChaCha8Rng) {
    group.visit_mut(&mut |p| {
        let shape = p.value().shape().to_vec();
        p.set_value(uniform(&shape, scale, rng));
    });
}

/// Builds instances until every sampling location stays `min_dist` away from
/// integer grid lines, so finite differences never straddle a bilinear cell
/// boundary.
fn reseeded<G: ParamGroup>(
    seed: u64,
    point: usize,
    min_dist: f64,
    make: &dyn Fn(&mut ChaCha8Rng) -> Result<(G, Vec<Tensor>)>,
    build: &dyn Fn(&mut Tape, &G, &[Var]) -> Result<Var>,
    h: f64,
) -> Result<f64> {
    for attempt in 0..100 {
        let mut rng = rng_for(seed.wrapping_add(attempt * 7919), point);
        let (mut group, inputs) = make(&mut rng)?;
        let mut probe = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| probe.leaf(t.clone())).collect();
        build(&mut probe, &group, &vars)?;
        if probe.min_anchor_grid_distance().unwrap_or(f64::INFINITY) < min_dist {
            continue;
        }
        return check_model(&mut group, &inputs, h, build);
    }
    Err(ScarfError::Validation(
        "could not find a sampling-grid-safe instance in 100 attempts".into(),
    ))
}

fn check_mada(seed: u64, which: &'static str) -> Result<f64> {
    let cfg = MadaConfig::new(4, 1, 2)?;
    let mut worst: f64 = 0.0;
    for point in 0..POINTS {
        let make = |rng: &mut ChaCha8Rng| -> Result<(MadaParams, Vec<Tensor>)> {
            let mut params = MadaParams::init("m", &cfg, rng);
            randomize(&mut params, 0.4, rng);
            let inputs = match which {
                "complete" => vec![uniform(&[3, 3, 4], 1.0, rng), uniform(&[3, 3, 4], 1.0, rng)],
                _ => vec![uniform(&[3, 3, 4], 1.0, rng)],
            };
            Ok((params, inputs))
        };
        let coeffs = {
            let mut rng = rng_for(seed ^ 0xabc, point);
            (
                uniform(&[3, 3, 4], 0.5, &mut rng),
                uniform(&[3, 3, 4], 0.5, &mut rng),
            )
        };
        let build = |tape: &mut Tape, params: &MadaParams, vars: &[Var]| -> Result<Var> {
            match which {
                "complete" => {
                    let (yv, yt) = mada_forward_complete(tape, vars[0], vars[1], params, &cfg)?;
                    let a = weighted(tape, yv, &coeffs.0)?;
                    let b = weighted(tape, yt, &coeffs.1)?;
                    tape.add(a, b)
                }
                "incomplete" => {
                    let y = mada_forward_incomplete(tape, vars[0], params, &cfg)?;
                    weighted(tape, y, &coeffs.0)
                }
                _ => {
                    let y =
                        mada_forward_incomplete_single_sampling(tape, vars[0], params, &cfg)?;
                    weighted(tape, y, &coeffs.0)
                }
            }
        };
        worst = worst.max(reseeded(seed, point, GRID_EXEMPT, &make, &build, DEFAULT_STEP)?);
    }
    Ok(worst)
}

fn check_scarf_block(seed: u64) -> Result<f64> {
    let cfg = ScarfNeckConfig::single_scale(4, 2, 1, 1);
    let mada_cfg = cfg.mada_config(0);
    let mut worst: f64 = 0.0;
    for point in 0..POINTS {
        let make = |rng: &mut ChaCha8Rng| -> Result<(ScarfBlockParams, Vec<Tensor>)> {
            let mut params = ScarfBlockParams::init("b", &mada_cfg, 8, rng);
            randomize(&mut params, 0.4, rng);
            Ok((
                params,
                vec![uniform(&[2, 3, 4], 1.0, rng), uniform(&[2, 3, 4], 1.0, rng)],
            ))
        };
        let coeffs = {
            let mut rng = rng_for(seed ^ 0xdef, point);
            (
                uniform(&[2, 3, 4], 0.5, &mut rng),
                uniform(&[2, 3, 4], 0.5, &mut rng),
            )
        };
        let build = |tape: &mut Tape, params: &ScarfBlockParams, vars: &[Var]| -> Result<Var> {
            let bundle = FeatureBundle::new(Some(vars[0]), Some(vars[1]), 0);
            let (out, _) = scarf_block_forward(tape, &bundle, params, &cfg)?;
            let a = weighted(tape, out.vis.unwrap(), &coeffs.0)?;
            let b = weighted(tape, out.ir.unwrap(), &coeffs.1)?;
            tape.add(a, b)
        };
        worst = worst.max(reseeded(seed, point, GRID_EXEMPT, &make, &build, DEFAULT_STEP)?);
    }
    Ok(worst)
}

fn check_neck(seed: u64) -> Result<f64> {
    let cfg = ScarfNeckConfig {
        scales: vec![
            ScaleSpec {
                channels: 4,
                heads: 1,
            },
            ScaleSpec {
                channels: 6,
                heads: 2,
            },
        ],
        blocks: 1,
        points: 1,
        ..ScarfNeckConfig::default()
    };
    let mut worst: f64 = 0.0;
    for point in 0..POINTS {
        let make = |rng: &mut ChaCha8Rng| -> Result<(ScarfNeckParams, Vec<Tensor>)> {
            let mut params = ScarfNeckParams::init("n", &cfg, rng)?;
            randomize(&mut params, 0.4, rng);
            Ok((
                params,
                vec![
                    uniform(&[3, 3, 4], 1.0, rng),
                    uniform(&[3, 3, 4], 1.0, rng),
                    uniform(&[2, 2, 6], 1.0, rng),
                    uniform(&[2, 2, 6], 1.0, rng),
                ],
            ))
        };
        let coeffs = {
            let mut rng = rng_for(seed ^ 0x321, point);
            (
                uniform(&[3, 3, 4], 0.5, &mut rng),
                uniform(&[2, 2, 6], 0.5, &mut rng),
            )
        };
        let build = |tape: &mut Tape, params: &ScarfNeckParams, vars: &[Var]| -> Result<Var> {
            let bundles = [
                FeatureBundle::new(Some(vars[0]), Some(vars[1]), 0),
                FeatureBundle::new(Some(vars[2]), Some(vars[3]), 1),
            ];
            let outs = neck_forward(tape, &bundles, params, &cfg)?;
            let a = weighted(tape, outs[0], &coeffs.0)?;
            let b = weighted(tape, outs[1], &coeffs.1)?;
            tape.add(a, b)
        };
        worst = worst.max(reseeded(seed, point, GRID_EXEMPT, &make, &build, DEFAULT_STEP)?);
    }
    Ok(worst)
}

/// Full stem → neck → head stack with the detection loss on an 8×8 instance,
/// differentiated w.r.t. every parameter and both input images. Uses a
/// smaller step and a tighter grid-distance gate because locations here
/// depend on many parameters.
fn check_full_stack(seed: u64) -> Result<f64> {
    let cfg = ToyConfig {
        channels: 4,
        heads: 2,
        points: 2,
        blocks: 2,
        ..ToyConfig::default()
    };
    let neck_cfg = cfg.neck_config();
    let labels = vec![
        BoxLabel {
            category: 0,
            bbox: BBox::new(1.0, 1.0, 3.0, 4.0),
        },
        BoxLabel {
            category: 0,
            bbox: BBox::new(4.0, 3.0, 3.0, 3.0),
        },
    ];
    let mut worst: f64 = 0.0;
    for point in 0..POINTS {
        let make = |rng: &mut ChaCha8Rng| -> Result<(ToyDetectorParams, Vec<Tensor>)> {
            let mut params = ToyDetectorParams::init(&cfg, rng)?;
            randomize(&mut params, 0.35, rng);
            Ok((
                params,
                vec![uniform(&[8, 8, 3], 0.5, rng), uniform(&[8, 8, 3], 0.5, rng)],
            ))
        };
        let build = |tape: &mut Tape, params: &ToyDetectorParams, vars: &[Var]| -> Result<Var> {
            let vis = params.stem.apply_conv1x1(tape, vars[0])?;
            let ir = params.stem.apply_conv1x1(tape, vars[1])?;
            let bundle = FeatureBundle::new(Some(vis), Some(ir), 0);
            let fused = neck_forward(tape, &[bundle], &params.neck, &neck_cfg)?;
            let head = params.head.apply_conv1x1(tape, fused[0])?;
            detection_loss(tape, head, &labels, &cfg)
        };
        worst = worst.max(reseeded(seed, point, 1e-4, &make, &build, 1e-6)?);
    }
    Ok(worst)
}

// ── harness table ────────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub op: String,
    pub worst_rel_err: f64,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.worst_rel_err < self.tolerance
    }
}

type CheckFn = fn(u64) -> Result<f64>;

fn table() -> Vec<(&'static str, f64, CheckFn)> {
    vec![
        ("linear", 1e-6, check_linear),
        ("conv1x1", 1e-6, check_conv1x1),
        ("softmax", 3e-6, check_softmax),
        ("layer_norm", 1e-5, check_layer_norm),
        ("bilinear_sample", 1e-5, check_bilinear),
        ("silu", 3e-6, check_silu),
        ("add", 1e-6, |s| check_elementwise(s, "add")),
        ("sub", 1e-6, |s| check_elementwise(s, "sub")),
        ("mul", 1e-6, |s| check_elementwise(s, "mul")),
        ("scale", 1e-6, check_scale),
        ("scale_rows", 1e-6, check_scale_rows),
        ("narrow", 1e-6, check_narrow),
        ("concat", 1e-6, check_concat),
        ("reshape", 1e-6, check_reshape),
        ("add_anchors", 1e-6, check_add_anchors),
        ("sum", 1e-6, check_sum),
        ("bce_with_logits", 3e-6, check_bce),
        ("l1_masked", 3e-6, check_l1_masked),
        ("mada_complete", 1e-4, |s| check_mada(s, "complete")),
        ("mada_incomplete", 1e-4, |s| check_mada(s, "incomplete")),
        ("mada_single_sampling", 1e-4, |s| check_mada(s, "single")),
        ("scarf_block", 1e-4, check_scarf_block),
        ("neck", 1e-4, check_neck),
        ("full_stack", 1e-3, check_full_stack),
    ]
}

/// Names accepted by [`check_op`].
pub fn op_names() -> Vec<&'static str> {
    table().into_iter().map(|(name, _, _)| name).collect()
}

/// Runs one operation's gradcheck at the seed.
pub fn check_op(op: &str, seed: u64) -> Result<GradcheckReport> {
    let (name, tolerance, f) = table()
        .into_iter()
        .find(|(name, _, _)| *name == op)
        .ok_or_else(|| ScarfError::Argument(format!("unknown gradcheck op '{op}'")))?;
    let worst_rel_err = f(seed)?;
    Ok(GradcheckReport {
        op: name.to_string(),
        worst_rel_err,
        tolerance,
    })
}

/// Runs the whole suite.
pub fn check_all(seed: u64) -> Result<Vec<GradcheckReport>> {
    table()
        .into_iter()
        .map(|(name, _, _)| check_op(name, seed))
        .collect()
}
