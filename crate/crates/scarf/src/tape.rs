//! Reverse-mode automatic differentiation on a linear tape.
//!
//! Every differentiable operation is a method on [`Tape`]. The method runs the
//! forward kernel immediately, stores the result, and records which inputs
//! produced it. [`Tape::backward`] replays the records in exact reverse
//! execution order, accumulating vector-Jacobian products into a gradient per
//! tape node; gradients for bound [`Parameter`]s are then available by
//! parameter identity.
//!
//! Conventions:
//! - everything is `f64`, row-major;
//! - feature maps are `[H, W, c]`, token index `q = i * W + j`;
//! - sampling points are `(row, col)` grid coordinates with zero padding
//!   outside the map;
//! - a scalar is shape `[]`.

use crate::error::{Result, ScarfError};
use crate::params::{ParamGroup, ParamId, Parameter};
use crate::tensor::Tensor;

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Linear { x: Var, w: Var, b: Var },
    Conv1x1 { x: Var, w: Var, b: Var },
    /// Softmax over the trailing `trailing` axes, jointly.
    Softmax { x: Var, trailing: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, eps: f64 },
    /// `feat[H,W,C]` sampled at fractional `(row, col)` points, zero padded.
    BilinearSample { feat: Var, pts: Var },
    Reshape { x: Var },
    Narrow { x: Var, axis: usize, start: usize, len: usize },
    Concat { parts: Vec<Var>, axis: usize },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, c: f64 },
    /// Rows of `x[N,C]` scaled by `w[N]`.
    ScaleRows { x: Var, w: Var },
    /// `x[L, ..., 2] + anchors[L, 2]`, anchors constant.
    AddAnchors { x: Var, anchors: Tensor },
    Silu { x: Var },
    SumAll { x: Var },
    /// Mean binary cross-entropy between `logits` and constant targets.
    BceWithLogits { logits: Var, targets: Tensor },
    /// Masked mean absolute error against constant targets.
    L1Masked { pred: Var, target: Tensor, mask: Tensor },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Records a forward computation for later reverse-mode differentiation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    /// Parameters bound onto this tape, deduplicated by identity.
    param_bind: Vec<(ParamId, Var)>,
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    param_bind: Vec<(ParamId, Var)>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. a tape node, if the node was reachable.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradient w.r.t. a bound parameter, if reachable from the loss.
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.param_bind
            .iter()
            .find(|(pid, _)| *pid == id)
            .and_then(|(_, var)| self.grads[var.0].as_ref())
    }

    /// Adds every reachable parameter gradient into its `Parameter::grad`.
    /// Parameters not reachable from the loss are left untouched.
    pub fn accumulate_into(&self, group: &mut dyn ParamGroup) {
        group.visit_mut(&mut |p: &mut Parameter| {
            if let Some(g) = self.param(p.id()) {
                p.add_grad(g);
            }
        });
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Introduces an input value as a leaf node.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Smallest distance of any recorded sampling location to an integer grid
    /// line, or `None` when nothing was sampled. The gradcheck harness uses
    /// this to reject instances whose finite differences would straddle a
    /// bilinear cell boundary.
    pub fn min_anchor_grid_distance(&self) -> Option<f64> {
        let mut min: Option<f64> = None;
        for node in &self.nodes {
            if let Op::AddAnchors { .. } = node.op {
                for &v in node.value.data() {
                    let d = (v - v.round()).abs();
                    min = Some(min.map_or(d, |m: f64| m.min(d)));
                }
            }
        }
        min
    }

    /// Binds a parameter's current value onto the tape. Binding the same
    /// parameter twice yields the same node, so gradients through multiple
    /// uses accumulate naturally.
    pub fn param(&mut self, p: &Parameter) -> Var {
        if let Some(&(_, var)) = self.param_bind.iter().find(|(id, _)| *id == p.id()) {
            return var;
        }
        let var = self.push(p.value().clone(), Op::Leaf);
        self.param_bind.push((p.id(), var));
        var
    }

    // ── forward ops ──────────────────────────────────────────────────

    /// `out[.., j] = Σ_i x[.., i] · w[i, j] + b[j]`
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.is_empty() || ws.len() != 2 || xs[xs.len() - 1] != ws[0] {
            return Err(ScarfError::shape("linear", xs, ws));
        }
        if bs != [ws[1]] {
            return Err(ScarfError::shape("linear bias", bs, ws));
        }
        let (cin, cout) = (ws[0], ws[1]);
        let rows = self.value(x).numel() / cin;
        let out = linear_fwd(
            self.value(x).data(),
            rows,
            cin,
            self.value(w).data(),
            cout,
            self.value(b).data(),
        );
        let mut shape = xs.to_vec();
        *shape.last_mut().unwrap() = cout;
        Ok(self.push(Tensor::from_parts(shape, out), Op::Linear { x, w, b }))
    }

    /// Pointwise linear map over every spatial position of `x[H,W,cin]`.
    pub fn conv1x1(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.len() != 3 || ws.len() != 2 || xs[2] != ws[0] {
            return Err(ScarfError::shape("conv1x1", xs, ws));
        }
        if bs != [ws[1]] {
            return Err(ScarfError::shape("conv1x1 bias", bs, ws));
        }
        let (h, wd, cin, cout) = (xs[0], xs[1], ws[0], ws[1]);
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bv = self.value(b).data();
        let mut out = vec![0.0; h * wd * cout];
        for yy in 0..h {
            for xx in 0..wd {
                let p = yy * wd + xx;
                let xrow = &xv[p * cin..(p + 1) * cin];
                let orow = &mut out[p * cout..(p + 1) * cout];
                orow.copy_from_slice(bv);
                for (i, &xi) in xrow.iter().enumerate() {
                    let wrow = &wv[i * cout..(i + 1) * cout];
                    for (o, &wij) in orow.iter_mut().zip(wrow) {
                        *o += xi * wij;
                    }
                }
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![h, wd, cout], out),
            Op::Conv1x1 { x, w, b },
        ))
    }

    /// Numerically stable softmax normalizing jointly over the trailing
    /// `trailing` axes.
    pub fn softmax(&mut self, x: Var, trailing: usize) -> Result<Var> {
        let xs = self.shape(x);
        if trailing == 0 {
            return Err(ScarfError::Argument(
                "softmax requires a non-empty trailing axis group".into(),
            ));
        }
        if trailing > xs.len() {
            return Err(ScarfError::Argument(format!(
                "softmax trailing group {} exceeds rank {}",
                trailing,
                xs.len()
            )));
        }
        let group: usize = xs[xs.len() - trailing..].iter().product();
        let v = self.value(x);
        let rows = v.numel() / group;
        let mut out = v.data().to_vec();
        for r in 0..rows {
            let row = &mut out[r * group..(r + 1) * group];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let shape = xs.to_vec();
        Ok(self.push(Tensor::from_parts(shape, out), Op::Softmax { x, trailing }))
    }

    /// Layer normalization over the trailing channel axis, then affine.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xs = self.shape(x);
        if xs.is_empty() {
            return Err(ScarfError::shape("layer_norm", xs, &[]));
        }
        let c = xs[xs.len() - 1];
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(ScarfError::shape("layer_norm affine", self.shape(gamma), &[c]));
        }
        if eps <= 0.0 {
            return Err(ScarfError::Argument("layer_norm eps must be positive".into()));
        }
        let v = self.value(x);
        let rows = v.numel() / c;
        let g = self.value(gamma).data().to_vec();
        let bt = self.value(beta).data().to_vec();
        let mut out = vec![0.0; v.numel()];
        for r in 0..rows {
            let row = &v.data()[r * c..(r + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + eps).sqrt();
            let orow = &mut out[r * c..(r + 1) * c];
            for i in 0..c {
                orow[i] = (row[i] - mean) * inv * g[i] + bt[i];
            }
        }
        let shape = xs.to_vec();
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::LayerNorm { x, gamma, beta, eps },
        ))
    }

    /// Bilinear interpolation of `feat[H,W,C]` at `pts[N,2]` grid coordinates
    /// `(row, col)`. Out-of-range neighbors contribute zero. Differentiable
    /// w.r.t. both the feature map and the points; at exactly-integer
    /// coordinates the point gradient uses the cell indexed by
    /// `floor(coordinate)`.
    pub fn bilinear_sample(&mut self, feat: Var, pts: Var) -> Result<Var> {
        let fs = self.shape(feat);
        let ps = self.shape(pts);
        if fs.len() != 3 {
            return Err(ScarfError::shape("bilinear_sample feat", fs, &[0, 0, 0]));
        }
        if ps.len() != 2 || ps[1] != 2 {
            return Err(ScarfError::shape("bilinear_sample pts", ps, &[0, 2]));
        }
        let (h, w, c) = (fs[0], fs[1], fs[2]);
        let n = ps[0];
        let fv = self.value(feat).data();
        let pv = self.value(pts).data();
        let mut out = vec![0.0; n * c];
        for q in 0..n {
            let y = pv[q * 2];
            let x = pv[q * 2 + 1];
            let (i0, j0) = (y.floor(), x.floor());
            let (fy, fx) = (y - i0, x - j0);
            let orow = &mut out[q * c..(q + 1) * c];
            for (di, dj, wgt) in corner_weights(fy, fx) {
                let (ii, jj) = (i0 + di, j0 + dj);
                if ii >= 0.0 && jj >= 0.0 && (ii as usize) < h && (jj as usize) < w {
                    let base = ((ii as usize) * w + jj as usize) * c;
                    for (o, &f) in orow.iter_mut().zip(&fv[base..base + c]) {
                        *o += wgt * f;
                    }
                }
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![n, c], out),
            Op::BilinearSample { feat, pts },
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(x).reshaped(shape)?;
        Ok(self.push(value, Op::Reshape { x }))
    }

    /// Contiguous slice `[start, start+len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if axis >= xs.len() || start + len > xs[axis] || len == 0 {
            return Err(ScarfError::Argument(format!(
                "narrow axis {} range {}..{} out of bounds for {:?}",
                axis,
                start,
                start + len,
                xs
            )));
        }
        let outer: usize = xs[..axis].iter().product();
        let inner: usize = xs[axis + 1..].iter().product();
        let v = self.value(x).data();
        let mut out = vec![0.0; outer * len * inner];
        for o in 0..outer {
            let src = (o * xs[axis] + start) * inner;
            let dst = o * len * inner;
            out[dst..dst + len * inner].copy_from_slice(&v[src..src + len * inner]);
        }
        let mut shape = xs;
        shape[axis] = len;
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Narrow { x, axis, start, len },
        ))
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(ScarfError::Argument("concat of zero parts".into()));
        }
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() {
            return Err(ScarfError::Argument(format!(
                "concat axis {} out of bounds for {:?}",
                axis, first
            )));
        }
        let mut axis_total = 0;
        for &p in parts {
            let ps = self.shape(p);
            if ps.len() != first.len()
                || ps
                    .iter()
                    .zip(&first)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(ScarfError::shape("concat", ps, &first));
            }
            axis_total += ps[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = vec![0.0; outer * axis_total * inner];
        for o in 0..outer {
            let mut dst = o * axis_total * inner;
            for &p in parts {
                let plen = self.shape(p)[axis];
                let block = plen * inner;
                let src = o * block;
                out[dst..dst + block].copy_from_slice(&self.value(p).data()[src..src + block]);
                dst += block;
            }
        }
        let mut shape = first;
        shape[axis] = axis_total;
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, |x, y| x * y, Op::Mul { a, b })
    }

    fn zip(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(ScarfError::shape(name, self.shape(a), self.shape(b)));
        }
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::from_parts(shape, out), op))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let value = self.value(x).map(|v| v * c);
        Ok(self.push(value, Op::Scale { x, c }))
    }

    /// `out[n, c] = x[n, c] * w[n]` for `x[N, C]`, `w[N]`.
    pub fn scale_rows(&mut self, x: Var, w: Var) -> Result<Var> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        if xs.len() != 2 || ws != [xs[0]] {
            return Err(ScarfError::shape("scale_rows", xs, ws));
        }
        let (n, c) = (xs[0], xs[1]);
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let mut out = vec![0.0; n * c];
        for r in 0..n {
            for i in 0..c {
                out[r * c + i] = xv[r * c + i] * wv[r];
            }
        }
        Ok(self.push(Tensor::from_parts(vec![n, c], out), Op::ScaleRows { x, w }))
    }

    /// Adds the constant per-token anchor `(row, col)` to every trailing pair
    /// of `x[L, ..., 2]`.
    pub fn add_anchors(&mut self, x: Var, anchors: &Tensor) -> Result<Var> {
        let xs = self.shape(x);
        if xs.len() < 2 || *xs.last().unwrap() != 2 || anchors.shape() != [xs[0], 2] {
            return Err(ScarfError::shape("add_anchors", xs, anchors.shape()));
        }
        let l = xs[0];
        let mid = self.value(x).numel() / (l * 2);
        let xv = self.value(x).data();
        let av = anchors.data();
        let mut out = vec![0.0; xv.len()];
        for q in 0..l {
            for m in 0..mid {
                let base = (q * mid + m) * 2;
                out[base] = xv[base] + av[q * 2];
                out[base + 1] = xv[base + 1] + av[q * 2 + 1];
            }
        }
        let shape = xs.to_vec();
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::AddAnchors {
                x,
                anchors: anchors.clone(),
            },
        ))
    }

    /// `x * sigmoid(x)` elementwise.
    pub fn silu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| v * sigmoid(v));
        Ok(self.push(value, Op::Silu { x }))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let s: f64 = self.value(x).data().iter().sum();
        Ok(self.push(Tensor::scalar(s), Op::SumAll { x }))
    }

    /// Mean binary cross-entropy with logits against constant targets in
    /// `[0, 1]`, computed in the overflow-safe form
    /// `max(z, 0) - z·y + ln(1 + exp(-|z|))`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &Tensor) -> Result<Var> {
        if self.shape(logits) != targets.shape() {
            return Err(ScarfError::shape(
                "bce_with_logits",
                self.shape(logits),
                targets.shape(),
            ));
        }
        let z = self.value(logits).data();
        let n = z.len() as f64;
        let mut total = 0.0;
        for (&zi, &yi) in z.iter().zip(targets.data()) {
            total += zi.max(0.0) - zi * yi + (-zi.abs()).exp().ln_1p();
        }
        Ok(self.push(
            Tensor::scalar(total / n),
            Op::BceWithLogits {
                logits,
                targets: targets.clone(),
            },
        ))
    }

    /// `Σ |pred - target| * mask / max(1, Σ mask)` with constant target and
    /// 0/1 mask.
    pub fn l1_masked(&mut self, pred: Var, target: &Tensor, mask: &Tensor) -> Result<Var> {
        if self.shape(pred) != target.shape() || self.shape(pred) != mask.shape() {
            return Err(ScarfError::shape(
                "l1_masked",
                self.shape(pred),
                target.shape(),
            ));
        }
        let p = self.value(pred).data();
        let denom = mask.data().iter().sum::<f64>().max(1.0);
        let mut total = 0.0;
        for ((&pi, &ti), &mi) in p.iter().zip(target.data()).zip(mask.data()) {
            total += (pi - ti).abs() * mi;
        }
        Ok(self.push(
            Tensor::scalar(total / denom),
            Op::L1Masked {
                pred,
                target: target.clone(),
                mask: mask.clone(),
            },
        ))
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Replays the tape in reverse from a scalar `loss`, producing gradients
    /// for every reachable node. Nodes the loss does not depend on keep no
    /// gradient.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(ScarfError::Argument(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(d_out) = grads[idx].take() else {
                continue;
            };
            self.backward_op(idx, &d_out, &mut grads);
            grads[idx] = Some(d_out);
        }

        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| g.map(|v| Tensor::from_parts(self.nodes[i].value.shape().to_vec(), v)))
            .collect();
        Ok(Gradients {
            grads,
            param_bind: self.param_bind.clone(),
        })
    }

    /// `backward` followed by accumulation into a parameter group.
    pub fn backward_into(&self, loss: Var, group: &mut dyn ParamGroup) -> Result<Gradients> {
        let grads = self.backward(loss)?;
        grads.accumulate_into(group);
        Ok(grads)
    }

    fn backward_op(&self, idx: usize, d_out: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}

            Op::Linear { x, w, b } => {
                let ws = self.shape(*w);
                let (cin, cout) = (ws[0], ws[1]);
                let rows = self.value(*x).numel() / cin;
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                let dx = acc(grads, *x, self.value(*x).numel());
                for r in 0..rows {
                    let drow = &d_out[r * cout..(r + 1) * cout];
                    let dxrow = &mut dx[r * cin..(r + 1) * cin];
                    for i in 0..cin {
                        let wrow = &wv[i * cout..(i + 1) * cout];
                        let mut s = 0.0;
                        for (d, wij) in drow.iter().zip(wrow) {
                            s += d * wij;
                        }
                        dxrow[i] += s;
                    }
                }
                let dw = acc(grads, *w, cin * cout);
                for r in 0..rows {
                    let drow = &d_out[r * cout..(r + 1) * cout];
                    let xrow = &xv[r * cin..(r + 1) * cin];
                    for (i, &xi) in xrow.iter().enumerate() {
                        let dwrow = &mut dw[i * cout..(i + 1) * cout];
                        for (dwv, &d) in dwrow.iter_mut().zip(drow) {
                            *dwv += xi * d;
                        }
                    }
                }
                let db = acc(grads, *b, cout);
                for r in 0..rows {
                    for (dbv, &d) in db.iter_mut().zip(&d_out[r * cout..(r + 1) * cout]) {
                        *dbv += d;
                    }
                }
            }

            Op::Conv1x1 { x, w, b } => {
                // Same math as Linear over H*W rows.
                let ws = self.shape(*w);
                let (cin, cout) = (ws[0], ws[1]);
                let rows = self.value(*x).numel() / cin;
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                let dx = acc(grads, *x, self.value(*x).numel());
                for r in 0..rows {
                    let drow = &d_out[r * cout..(r + 1) * cout];
                    let dxrow = &mut dx[r * cin..(r + 1) * cin];
                    for i in 0..cin {
                        let wrow = &wv[i * cout..(i + 1) * cout];
                        let mut s = 0.0;
                        for (d, wij) in drow.iter().zip(wrow) {
                            s += d * wij;
                        }
                        dxrow[i] += s;
                    }
                }
                let dw = acc(grads, *w, cin * cout);
                for r in 0..rows {
                    let drow = &d_out[r * cout..(r + 1) * cout];
                    let xrow = &xv[r * cin..(r + 1) * cin];
                    for (i, &xi) in xrow.iter().enumerate() {
                        let dwrow = &mut dw[i * cout..(i + 1) * cout];
                        for (dwv, &d) in dwrow.iter_mut().zip(drow) {
                            *dwv += xi * d;
                        }
                    }
                }
                let db = acc(grads, *b, cout);
                for r in 0..rows {
                    for (dbv, &d) in db.iter_mut().zip(&d_out[r * cout..(r + 1) * cout]) {
                        *dbv += d;
                    }
                }
            }

            Op::Softmax { x, trailing } => {
                let xs = self.shape(*x);
                let group: usize = xs[xs.len() - trailing..].iter().product();
                let y = node.value.data();
                let rows = y.len() / group;
                let dx = acc(grads, *x, y.len());
                for r in 0..rows {
                    let yr = &y[r * group..(r + 1) * group];
                    let dr = &d_out[r * group..(r + 1) * group];
                    let dot: f64 = yr.iter().zip(dr).map(|(a, b)| a * b).sum();
                    let dxr = &mut dx[r * group..(r + 1) * group];
                    for i in 0..group {
                        dxr[i] += yr[i] * (dr[i] - dot);
                    }
                }
            }

            Op::LayerNorm { x, gamma, beta, eps } => {
                let xs = self.shape(*x);
                let c = xs[xs.len() - 1];
                let rows = self.value(*x).numel() / c;
                let xv = self.value(*x).data();
                let gv = self.value(*gamma).data();
                {
                    let dx = acc(grads, *x, xv.len());
                    for r in 0..rows {
                        let row = &xv[r * c..(r + 1) * c];
                        let drow = &d_out[r * c..(r + 1) * c];
                        let mean = row.iter().sum::<f64>() / c as f64;
                        let var =
                            row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
                        let inv = 1.0 / (var + eps).sqrt();
                        let mut dg_mean = 0.0;
                        let mut dgx_mean = 0.0;
                        for i in 0..c {
                            let g = drow[i] * gv[i];
                            let xhat = (row[i] - mean) * inv;
                            dg_mean += g;
                            dgx_mean += g * xhat;
                        }
                        dg_mean /= c as f64;
                        dgx_mean /= c as f64;
                        let dxr = &mut dx[r * c..(r + 1) * c];
                        for i in 0..c {
                            let g = drow[i] * gv[i];
                            let xhat = (row[i] - mean) * inv;
                            dxr[i] += inv * (g - dg_mean - xhat * dgx_mean);
                        }
                    }
                }
                {
                    let dgamma = acc(grads, *gamma, c);
                    for r in 0..rows {
                        let row = &xv[r * c..(r + 1) * c];
                        let drow = &d_out[r * c..(r + 1) * c];
                        let mean = row.iter().sum::<f64>() / c as f64;
                        let var =
                            row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
                        let inv = 1.0 / (var + eps).sqrt();
                        for i in 0..c {
                            dgamma[i] += drow[i] * (row[i] - mean) * inv;
                        }
                    }
                }
                {
                    let dbeta = acc(grads, *beta, c);
                    for r in 0..rows {
                        for (dbv, &d) in dbeta.iter_mut().zip(&d_out[r * c..(r + 1) * c]) {
                            *dbv += d;
                        }
                    }
                }
            }

            Op::BilinearSample { feat, pts } => {
                let fs = self.shape(*feat);
                let (h, w, c) = (fs[0], fs[1], fs[2]);
                let fv = self.value(*feat).data();
                let pv = self.value(*pts).data();
                let n = self.shape(*pts)[0];
                {
                    let dfeat = acc(grads, *feat, h * w * c);
                    for q in 0..n {
                        let y = pv[q * 2];
                        let x = pv[q * 2 + 1];
                        let (i0, j0) = (y.floor(), x.floor());
                        let (fy, fx) = (y - i0, x - j0);
                        let drow = &d_out[q * c..(q + 1) * c];
                        for (di, dj, wgt) in corner_weights(fy, fx) {
                            let (ii, jj) = (i0 + di, j0 + dj);
                            if ii >= 0.0 && jj >= 0.0 && (ii as usize) < h && (jj as usize) < w {
                                let base = ((ii as usize) * w + jj as usize) * c;
                                for (df, &d) in dfeat[base..base + c].iter_mut().zip(drow) {
                                    *df += wgt * d;
                                }
                            }
                        }
                    }
                }
                {
                    let dpts = acc(grads, *pts, n * 2);
                    for q in 0..n {
                        let y = pv[q * 2];
                        let x = pv[q * 2 + 1];
                        let (i0f, j0f) = (y.floor(), x.floor());
                        let (fy, fx) = (y - i0f, x - j0f);
                        let fetch = |di: f64, dj: f64, ch: usize| -> f64 {
                            let (ii, jj) = (i0f + di, j0f + dj);
                            if ii >= 0.0 && jj >= 0.0 && (ii as usize) < h && (jj as usize) < w {
                                fv[((ii as usize) * w + jj as usize) * c + ch]
                            } else {
                                0.0
                            }
                        };
                        let drow = &d_out[q * c..(q + 1) * c];
                        let mut dy = 0.0;
                        let mut dx = 0.0;
                        for (ch, &d) in drow.iter().enumerate() {
                            let f00 = fetch(0.0, 0.0, ch);
                            let f01 = fetch(0.0, 1.0, ch);
                            let f10 = fetch(1.0, 0.0, ch);
                            let f11 = fetch(1.0, 1.0, ch);
                            dy += d * (-(1.0 - fx) * f00 - fx * f01 + (1.0 - fx) * f10 + fx * f11);
                            dx += d * (-(1.0 - fy) * f00 + (1.0 - fy) * f01 - fy * f10 + fy * f11);
                        }
                        dpts[q * 2] += dy;
                        dpts[q * 2 + 1] += dx;
                    }
                }
            }

            Op::Reshape { x } => {
                let dx = acc(grads, *x, d_out.len());
                for (g, &d) in dx.iter_mut().zip(d_out) {
                    *g += d;
                }
            }

            Op::Narrow { x, axis, start, len } => {
                let xs = self.shape(*x);
                let outer: usize = xs[..*axis].iter().product();
                let inner: usize = xs[*axis + 1..].iter().product();
                let dx = acc(grads, *x, self.value(*x).numel());
                for o in 0..outer {
                    let dst = (o * xs[*axis] + start) * inner;
                    let src = o * len * inner;
                    for k in 0..len * inner {
                        dx[dst + k] += d_out[src + k];
                    }
                }
            }

            Op::Concat { parts, axis } => {
                let os = node.value.shape();
                let outer: usize = os[..*axis].iter().product();
                let inner: usize = os[*axis + 1..].iter().product();
                let total = os[*axis];
                let mut offset = 0;
                for &p in parts {
                    let plen = self.shape(p)[*axis];
                    let block = plen * inner;
                    let dp = acc(grads, p, self.value(p).numel());
                    for o in 0..outer {
                        let src = (o * total + offset) * inner;
                        let dst = o * block;
                        for k in 0..block {
                            dp[dst + k] += d_out[src + k];
                        }
                    }
                    offset += plen;
                }
            }

            Op::Add { a, b } => {
                for &v in [a, b].iter() {
                    let d = acc(grads, *v, d_out.len());
                    for (g, &x) in d.iter_mut().zip(d_out) {
                        *g += x;
                    }
                }
            }

            Op::Sub { a, b } => {
                {
                    let da = acc(grads, *a, d_out.len());
                    for (g, &x) in da.iter_mut().zip(d_out) {
                        *g += x;
                    }
                }
                let db = acc(grads, *b, d_out.len());
                for (g, &x) in db.iter_mut().zip(d_out) {
                    *g -= x;
                }
            }

            Op::Mul { a, b } => {
                {
                    let bv = self.value(*b).data();
                    let da = acc(grads, *a, d_out.len());
                    for i in 0..d_out.len() {
                        da[i] += d_out[i] * bv[i];
                    }
                }
                let av = self.value(*a).data();
                let db = acc(grads, *b, d_out.len());
                for i in 0..d_out.len() {
                    db[i] += d_out[i] * av[i];
                }
            }

            Op::Scale { x, c } => {
                let dx = acc(grads, *x, d_out.len());
                for (g, &d) in dx.iter_mut().zip(d_out) {
                    *g += c * d;
                }
            }

            Op::ScaleRows { x, w } => {
                let xs = self.shape(*x);
                let (n, c) = (xs[0], xs[1]);
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                {
                    let dx = acc(grads, *x, n * c);
                    for r in 0..n {
                        for i in 0..c {
                            dx[r * c + i] += d_out[r * c + i] * wv[r];
                        }
                    }
                }
                let dw = acc(grads, *w, n);
                for r in 0..n {
                    let mut s = 0.0;
                    for i in 0..c {
                        s += d_out[r * c + i] * xv[r * c + i];
                    }
                    dw[r] += s;
                }
            }

            Op::AddAnchors { x, .. } => {
                let dx = acc(grads, *x, d_out.len());
                for (g, &d) in dx.iter_mut().zip(d_out) {
                    *g += d;
                }
            }

            Op::Silu { x } => {
                let xv = self.value(*x).data();
                let dx = acc(grads, *x, d_out.len());
                for i in 0..d_out.len() {
                    let s = sigmoid(xv[i]);
                    dx[i] += d_out[i] * (s + xv[i] * s * (1.0 - s));
                }
            }

            Op::SumAll { x } => {
                let d = d_out[0];
                let dx = acc(grads, *x, self.value(*x).numel());
                for g in dx.iter_mut() {
                    *g += d;
                }
            }

            Op::BceWithLogits { logits, targets } => {
                let z = self.value(*logits).data();
                let n = z.len() as f64;
                let d = d_out[0] / n;
                let dz = acc(grads, *logits, z.len());
                for i in 0..z.len() {
                    dz[i] += d * (sigmoid(z[i]) - targets.data()[i]);
                }
            }

            Op::L1Masked { pred, target, mask } => {
                let p = self.value(*pred).data();
                let denom = mask.data().iter().sum::<f64>().max(1.0);
                let d = d_out[0] / denom;
                let dp = acc(grads, *pred, p.len());
                for i in 0..p.len() {
                    let diff = p[i] - target.data()[i];
                    // Subgradient 0 at the kink.
                    let sign = if diff > 0.0 {
                        1.0
                    } else if diff < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                    dp[i] += d * sign * mask.data()[i];
                }
            }
        }
    }
}

/// The four bilinear corner offsets and their weights for fractional offsets
/// `(fy, fx)` from the floor corner.
fn corner_weights(fy: f64, fx: f64) -> [(f64, f64, f64); 4] {
    [
        (0.0, 0.0, (1.0 - fy) * (1.0 - fx)),
        (0.0, 1.0, (1.0 - fy) * fx),
        (1.0, 0.0, fy * (1.0 - fx)),
        (1.0, 1.0, fy * fx),
    ]
}

fn linear_fwd(x: &[f64], rows: usize, cin: usize, w: &[f64], cout: usize, b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; rows * cout];
    for r in 0..rows {
        let xrow = &x[r * cin..(r + 1) * cin];
        let orow = &mut out[r * cout..(r + 1) * cout];
        orow.copy_from_slice(b);
        for (i, &xi) in xrow.iter().enumerate() {
            let wrow = &w[i * cout..(i + 1) * cout];
            for (o, &wij) in orow.iter_mut().zip(wrow) {
                *o += xi * wij;
            }
        }
    }
    out
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Fetches the gradient accumulator for a node, zero-initialized on first use.
fn acc<'g>(grads: &'g mut [Option<Vec<f64>>], v: Var, numel: usize) -> &'g mut Vec<f64> {
    let slot = &mut grads[v.0];
    if slot.is_none() {
        *slot = Some(vec![0.0; numel]);
    }
    slot.as_mut().unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Parameter;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn linear_identity_passes_through() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 2], &[1.0, 0.0]));
        let w = tape.leaf(Tensor::eye(2));
        let b = tape.leaf(Tensor::zeros(&[2]));
        let y = tape.linear(x, w, b).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 0.0]);
    }

    #[test]
    fn linear_hand_sum() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 2], &[2.0, 3.0]));
        let w = tape.leaf(t(&[2, 1], &[1.0, 1.0]));
        let b = tape.leaf(t(&[1], &[0.5]));
        let y = tape.linear(x, w, b).unwrap();
        assert_eq!(tape.value(y).data(), &[5.5]);
    }

    #[test]
    fn linear_shape_mismatch_names_both_shapes() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[1, 3]));
        let w = tape.leaf(Tensor::zeros(&[2, 4]));
        let b = tape.leaf(Tensor::zeros(&[4]));
        let err = tape.linear(x, w, b).unwrap_err().to_string();
        assert!(err.contains("[1, 3]") && err.contains("[2, 4]"), "{err}");
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[4], &[0.0; 4]));
        let y = tape.softmax(x, 1).unwrap();
        for &v in tape.value(y).data() {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_closed_form() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[2.0_f64.ln(), 0.0]));
        let y = tape.softmax(x, 1).unwrap();
        let v = tape.value(y).data();
        assert!((v[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((v[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_large_inputs_do_not_overflow() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1000.0, 0.0]));
        let y = tape.softmax(x, 1).unwrap();
        let v = tape.value(y).data();
        assert!(v[0] > 1.0 - 1e-12 && v[1] < 1e-12);
        assert!(v.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn softmax_rejects_empty_axis_group() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]));
        assert!(tape.softmax(x, 0).is_err());
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 4], &[3.0; 4]));
        let g = tape.leaf(Tensor::full(&[4], 1.0));
        let b = tape.leaf(Tensor::zeros(&[4]));
        let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
        for &v in tape.value(y).data() {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn layer_norm_already_normalized_row() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 2], &[1.0, -1.0]));
        let g = tape.leaf(Tensor::full(&[2], 1.0));
        let b = tape.leaf(Tensor::zeros(&[2]));
        let y = tape.layer_norm(x, g, b, 1e-12).unwrap();
        let v = tape.value(y).data();
        assert!((v[0] - 1.0).abs() < 1e-9 && (v[1] + 1.0).abs() < 1e-9);
    }

    #[test]
    fn bilinear_integer_point_is_exact() {
        let mut tape = Tape::new();
        let feat = tape.leaf(t(&[2, 3, 2], &(0..12).map(|v| v as f64).collect::<Vec<_>>()));
        let pts = tape.leaf(t(&[1, 2], &[1.0, 2.0]));
        let y = tape.bilinear_sample(feat, pts).unwrap();
        assert_eq!(tape.value(y).data(), &[10.0, 11.0]);
    }

    #[test]
    fn bilinear_center_averages_four_corners() {
        let mut tape = Tape::new();
        let feat = tape.leaf(t(&[2, 2, 1], &[1.0, 2.0, 3.0, 4.0]));
        let pts = tape.leaf(t(&[1, 2], &[0.5, 0.5]));
        let y = tape.bilinear_sample(feat, pts).unwrap();
        assert!((tape.value(y).data()[0] - 2.5).abs() < 1e-15);
    }

    #[test]
    fn bilinear_far_outside_is_zero() {
        let mut tape = Tape::new();
        let feat = tape.leaf(t(&[2, 2, 3], &[1.0; 12]));
        let pts = tape.leaf(t(&[1, 2], &[-5.0, -5.0]));
        let y = tape.bilinear_sample(feat, pts).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn conv1x1_identity_weights() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2, 2, 2], &(0..8).map(|v| v as f64).collect::<Vec<_>>()));
        let w = tape.leaf(Tensor::eye(2));
        let b = tape.leaf(Tensor::zeros(&[2]));
        let y = tape.conv1x1(x, w, b).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(x).data());
    }

    #[test]
    fn conv1x1_degenerate_spatial_equals_linear() {
        let mut tape = Tape::new();
        let xv = t(&[1, 1, 3], &[1.0, -2.0, 0.5]);
        let wv = t(&[3, 2], &[0.3, -1.0, 2.0, 0.1, -0.4, 0.9]);
        let bv = t(&[2], &[0.25, -0.5]);
        let x3 = tape.leaf(xv.clone());
        let w = tape.leaf(wv);
        let b = tape.leaf(bv);
        let conv = tape.conv1x1(x3, w, b).unwrap();
        let x2 = tape.reshape(x3, vec![1, 3]).unwrap();
        let lin = tape.linear(x2, w, b).unwrap();
        assert_eq!(tape.value(conv).data(), tape.value(lin).data());
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut tape = Tape::new();
        let mut p = Parameter::new("p", t(&[3], &[1.0, 2.0, 3.0]));
        let v = tape.param(&p);
        let loss = tape.sum_all(v).unwrap();
        tape.backward_into(loss, &mut p).unwrap();
        assert_eq!(p.grad().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_product_rule() {
        let mut tape = Tape::new();
        let mut p = Parameter::new("p", t(&[2], &[2.0, 5.0]));
        let mut q = Parameter::new("q", t(&[2], &[7.0, -3.0]));
        let pv = tape.param(&p);
        let qv = tape.param(&q);
        let prod = tape.mul(pv, qv).unwrap();
        let loss = tape.sum_all(prod).unwrap();
        let grads = tape.backward(loss).unwrap();
        grads.accumulate_into(&mut p);
        grads.accumulate_into(&mut q);
        assert_eq!(p.grad().data(), &[7.0, -3.0]);
        assert_eq!(q.grad().data(), &[2.0, 5.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn unreachable_parameter_grad_untouched() {
        let mut tape = Tape::new();
        let mut used = Parameter::new("used", t(&[1], &[2.0]));
        let mut unused = Parameter::new("unused", t(&[1], &[4.0]));
        let u = tape.param(&used);
        let _ = tape.param(&unused);
        let loss = tape.sum_all(u).unwrap();
        let grads = tape.backward(loss).unwrap();
        grads.accumulate_into(&mut used);
        grads.accumulate_into(&mut unused);
        assert_eq!(used.grad().data(), &[1.0]);
        assert_eq!(unused.grad().data(), &[0.0]);
    }

    #[test]
    fn rebinding_parameter_accumulates_through_both_uses() {
        // loss = sum(p) + sum(p) => grad 2 per element.
        let mut tape = Tape::new();
        let mut p = Parameter::new("p", t(&[2], &[1.0, 1.0]));
        let a = tape.param(&p);
        let b = tape.param(&p);
        assert_eq!(a, b);
        let s = tape.add(a, b).unwrap();
        let loss = tape.sum_all(s).unwrap();
        tape.backward_into(loss, &mut p).unwrap();
        assert_eq!(p.grad().data(), &[2.0, 2.0]);
    }

    #[test]
    fn narrow_and_concat_round_trip() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2, 4], &(0..8).map(|v| v as f64).collect::<Vec<_>>()));
        let a = tape.narrow(x, 1, 0, 2).unwrap();
        let b = tape.narrow(x, 1, 2, 2).unwrap();
        let back = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.value(back).data(), tape.value(x).data());
    }

    #[test]
    fn determinism_two_runs_bit_identical() {
        let run = || {
            let mut tape = Tape::new();
            let x = tape.leaf(t(&[2, 3], &[0.3, -1.2, 0.7, 2.2, -0.1, 0.05]));
            let w = tape.leaf(t(&[3, 2], &[0.5, -0.25, 1.5, 0.75, -2.0, 0.1]));
            let b = tape.leaf(t(&[2], &[0.01, -0.02]));
            let h = tape.linear(x, w, b).unwrap();
            let s = tape.softmax(h, 1).unwrap();
            let l = tape.sum_all(s).unwrap();
            (tape.value(s).checksum(), tape.value(l).item())
        };
        assert_eq!(run(), run());
    }
}
