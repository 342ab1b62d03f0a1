//! Named, trainable parameters and the plumbing around them: grouped
//! traversal, Adam updates, and JSON checkpoints.

use std::collections::HashMap;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{Result, ScarfError};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Process-unique identity of one `Parameter` instance. Used to route
/// gradients and optimizer state; never serialized.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(u64);

static NEXT_PARAM_ID: AtomicU64 = AtomicU64::new(0);

/// A learnable tensor with an accumulated gradient of identical shape.
#[derive(Debug)]
pub struct Parameter {
    id: ParamId,
    name: String,
    value: Tensor,
    grad: Tensor,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape());
        Parameter {
            id: ParamId(NEXT_PARAM_ID.fetch_add(1, Ordering::Relaxed)),
            name: name.into(),
            value,
            grad,
        }
    }

    pub fn id(&self) -> ParamId {
        self.id
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn grad(&self) -> &Tensor {
        &self.grad
    }

    /// Replaces the value; the new tensor must keep the shape.
    pub fn set_value(&mut self, value: Tensor) {
        assert_eq!(value.shape(), self.value.shape(), "parameter {}", self.name);
        self.value = value;
    }

    pub fn zero_grad(&mut self) {
        self.grad = Tensor::zeros(self.value.shape());
    }

    /// Accumulates `g` into the stored gradient.
    pub fn add_grad(&mut self, g: &Tensor) {
        assert_eq!(g.shape(), self.grad.shape(), "parameter {}", self.name);
        let data: Vec<f64> = self
            .grad
            .data()
            .iter()
            .zip(g.data())
            .map(|(a, b)| a + b)
            .collect();
        self.grad = Tensor::new(self.grad.shape().to_vec(), data).expect("finite gradient");
    }
}

/// Uniform traversal over every `Parameter` in a model component.
/// Visit order is fixed by each implementation, which keeps checkpoints and
/// optimizer sweeps deterministic.
pub trait ParamGroup {
    fn visit(&self, f: &mut dyn FnMut(&Parameter));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter));
}

impl ParamGroup for Parameter {
    fn visit(&self, f: &mut dyn FnMut(&Parameter)) {
        f(self);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        f(self);
    }
}

impl<G: ParamGroup> ParamGroup for Vec<G> {
    fn visit(&self, f: &mut dyn FnMut(&Parameter)) {
        for g in self {
            g.visit(f);
        }
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        for g in self.iter_mut() {
            g.visit_mut(f);
        }
    }
}

pub fn zero_grads(group: &mut dyn ParamGroup) {
    group.visit_mut(&mut |p| p.zero_grad());
}

pub fn param_count(group: &dyn ParamGroup) -> usize {
    let mut n = 0;
    group.visit(&mut |p| n += p.value().numel());
    n
}

// ── common parameter bundles ─────────────────────────────────────────

/// Weight `[in, out]` plus bias `[out]`; backs both `linear` and `conv1x1`.
#[derive(Debug)]
pub struct LinearParams {
    pub weight: Parameter,
    pub bias: Parameter,
}

impl LinearParams {
    /// Uniform init in `±1/sqrt(fan_in)` for both weight and bias.
    pub fn init(name: &str, fan_in: usize, fan_out: usize, rng: &mut impl rand::Rng) -> Self {
        let limit = 1.0 / (fan_in as f64).sqrt();
        LinearParams {
            weight: Parameter::new(
                format!("{name}.weight"),
                crate::tensor::uniform(&[fan_in, fan_out], limit, rng),
            ),
            bias: Parameter::new(
                format!("{name}.bias"),
                crate::tensor::uniform(&[fan_out], limit, rng),
            ),
        }
    }

    pub fn zeros(name: &str, fan_in: usize, fan_out: usize) -> Self {
        LinearParams {
            weight: Parameter::new(format!("{name}.weight"), Tensor::zeros(&[fan_in, fan_out])),
            bias: Parameter::new(format!("{name}.bias"), Tensor::zeros(&[fan_out])),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.value().shape()[0]
    }

    pub fn fan_out(&self) -> usize {
        self.weight.value().shape()[1]
    }

    pub fn apply(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let w = tape.param(&self.weight);
        let b = tape.param(&self.bias);
        tape.linear(x, w, b)
    }

    pub fn apply_conv1x1(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let w = tape.param(&self.weight);
        let b = tape.param(&self.bias);
        tape.conv1x1(x, w, b)
    }
}

impl ParamGroup for LinearParams {
    fn visit(&self, f: &mut dyn FnMut(&Parameter)) {
        f(&self.weight);
        f(&self.bias);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

/// Layer-norm affine pair, initialized to the identity transform.
#[derive(Debug)]
pub struct NormParams {
    pub gamma: Parameter,
    pub beta: Parameter,
}

impl NormParams {
    pub fn identity(name: &str, c: usize) -> Self {
        NormParams {
            gamma: Parameter::new(format!("{name}.gamma"), Tensor::full(&[c], 1.0)),
            beta: Parameter::new(format!("{name}.beta"), Tensor::zeros(&[c])),
        }
    }

    pub fn apply(&self, tape: &mut Tape, x: Var, eps: f64) -> Result<Var> {
        let g = tape.param(&self.gamma);
        let b = tape.param(&self.beta);
        tape.layer_norm(x, g, b, eps)
    }
}

impl ParamGroup for NormParams {
    fn visit(&self, f: &mut dyn FnMut(&Parameter)) {
        f(&self.gamma);
        f(&self.beta);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        f(&mut self.gamma);
        f(&mut self.beta);
    }
}

// ── optimizer ────────────────────────────────────────────────────────

/// Adam with bias correction; state is keyed by parameter identity.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: HashMap<ParamId, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: HashMap::new(),
        }
    }

    /// One update from the accumulated gradients; does not clear them.
    pub fn step(&mut self, group: &mut dyn ParamGroup) {
        self.step += 1;
        let t = self.step as f64;
        let (b1, b2) = (self.beta1, self.beta2);
        let bc1 = 1.0 - b1.powf(t);
        let bc2 = 1.0 - b2.powf(t);
        let lr = self.lr;
        let eps = self.eps;
        let moments = &mut self.moments;
        group.visit_mut(&mut |p: &mut Parameter| {
            let n = p.value().numel();
            let (m, v) = moments
                .entry(p.id())
                .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            let mut next = Vec::with_capacity(n);
            for i in 0..n {
                let g = p.grad().data()[i];
                m[i] = b1 * m[i] + (1.0 - b1) * g;
                v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                next.push(p.value().data()[i] - lr * mh / (vh.sqrt() + eps));
            }
            p.set_value(Tensor::from_parts(p.value().shape().to_vec(), next));
        });
    }
}

// ── checkpoints ──────────────────────────────────────────────────────

#[derive(Serialize, Deserialize)]
struct CheckpointEntry {
    name: String,
    shape: Vec<usize>,
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    params: Vec<CheckpointEntry>,
}

/// Serializes every parameter as `name -> shape + values` JSON.
pub fn save_checkpoint(group: &dyn ParamGroup, path: &Path) -> Result<()> {
    let mut params = Vec::new();
    group.visit(&mut |p| {
        params.push(CheckpointEntry {
            name: p.name().to_string(),
            shape: p.value().shape().to_vec(),
            values: p.value().data().to_vec(),
        })
    });
    let file = CheckpointFile { params };
    let text = serde_json::to_string(&file).expect("checkpoint serialization");
    std::fs::write(path, text).map_err(|source| ScarfError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Loads a checkpoint written by [`save_checkpoint`] into a matching group.
/// Every parameter in the group must be present in the file with the same
/// shape; extra file entries are rejected.
pub fn load_checkpoint(group: &mut dyn ParamGroup, path: &Path) -> Result<()> {
    let text = std::fs::read_to_string(path).map_err(|source| ScarfError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let file: CheckpointFile = serde_json::from_str(&text).map_err(|source| ScarfError::Json {
        path: path.display().to_string(),
        source,
    })?;
    let mut by_name: HashMap<String, CheckpointEntry> =
        file.params.into_iter().map(|e| (e.name.clone(), e)).collect();
    let mut failure: Option<ScarfError> = None;
    group.visit_mut(&mut |p| {
        if failure.is_some() {
            return;
        }
        match by_name.remove(p.name()) {
            Some(entry) => {
                if entry.shape != p.value().shape() {
                    failure = Some(ScarfError::Validation(format!(
                        "checkpoint shape {:?} does not match parameter {} {:?}",
                        entry.shape,
                        p.name(),
                        p.value().shape()
                    )));
                    return;
                }
                match Tensor::new(entry.shape, entry.values) {
                    Ok(t) => p.set_value(t),
                    Err(e) => failure = Some(e),
                }
            }
            None => {
                failure = Some(ScarfError::Validation(format!(
                    "checkpoint missing parameter {}",
                    p.name()
                )));
            }
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    if let Some(name) = by_name.keys().next() {
        return Err(ScarfError::Validation(format!(
            "checkpoint has unknown parameter {name}"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_grads_resets_accumulation() {
        let mut p = Parameter::new("p", Tensor::from_vec(vec![1.0, 2.0]));
        p.add_grad(&Tensor::from_vec(vec![0.5, 0.5]));
        assert_eq!(p.grad().data(), &[0.5, 0.5]);
        zero_grads(&mut p);
        assert_eq!(p.grad().data(), &[0.0, 0.0]);
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut a = LinearParams::init("layer", 3, 2, &mut rng);
        let dir = std::env::temp_dir().join(format!("scarf-ckpt-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("params.json");
        save_checkpoint(&a, &path).unwrap();

        let original = a.weight.value().clone();
        a.weight.set_value(Tensor::zeros(&[3, 2]));
        load_checkpoint(&mut a, &path).unwrap();
        assert_eq!(a.weight.value(), &original);
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn checkpoint_rejects_shape_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = LinearParams::init("layer", 3, 2, &mut rng);
        let dir = std::env::temp_dir().join(format!("scarf-ckpt2-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("params.json");
        save_checkpoint(&a, &path).unwrap();

        let mut b = LinearParams::zeros("layer", 2, 2);
        assert!(load_checkpoint(&mut b, &path).is_err());
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn adam_descends_a_quadratic() {
        let mut p = Parameter::new("x", Tensor::from_vec(vec![5.0]));
        let mut opt = Adam::new(0.1);
        for _ in 0..300 {
            // d/dx (x - 2)^2 = 2 (x - 2)
            let g = 2.0 * (p.value().data()[0] - 2.0);
            p.zero_grad();
            p.add_grad(&Tensor::from_vec(vec![g]));
            opt.step(&mut p);
        }
        assert!((p.value().data()[0] - 2.0).abs() < 1e-2);
    }
}
