//! Reverse-mode autodiff on a recorded operation tape.
//!
//! A [`Tape`] owns every intermediate [`Tensor`] produced during a forward
//! pass. Operations append nodes in topological order; [`Tape::backward`]
//! replays them in reverse and returns a gradient per node. The tape is
//! rebuilt for every training step (define-by-run), which keeps RNN
//! unrolling trivially correct.
//!
//! Domain rules: `log` rejects non-positive inputs and `exp` rejects inputs
//! above 80. Composite layers that need saturation clamp first (see
//! [`Tape::clamp`]); the raw ops never clamp silently.

use thiserror::Error;

use crate::tensor::Tensor;

/// Handle to a node on a tape. Only valid for the tape that produced it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Node(pub(crate) usize);

impl Node {
    pub fn id(&self) -> usize {
        self.0
    }
}

/// Largest input magnitude `exp` accepts; composite ops clamp below this.
pub const EXP_DOMAIN_LIMIT: f64 = 80.0;

#[derive(Debug, Error)]
pub enum TapeError {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("{op}: domain violation at value {value}")]
    Domain { op: &'static str, value: f64 },
    #[error("{op}: axis {axis} out of range for shape {shape:?}")]
    AxisOutOfRange { op: &'static str, axis: usize, shape: Vec<usize> },
    #[error("{op}: index {index} out of range ({limit} rows)")]
    IndexOutOfRange { op: &'static str, index: usize, limit: usize },
    #[error("backward already ran on this tape; re-record before differentiating again")]
    BackwardTwice,
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
}

/// How a binary op's operands line up.
///
/// Besides equal shapes, the smaller operand may be a trailing-shape
/// (leading-batch) broadcast of the larger: its shape is a suffix of the
/// other's, or it is a single element. Row-major layout makes the broadcast
/// index simply `i % small_len`.
#[derive(Clone, Copy, Debug, PartialEq)]
enum Pair {
    Same,
    /// lhs is the smaller, repeated operand
    BcastLhs,
    /// rhs is the smaller, repeated operand
    BcastRhs,
}

fn pair_of(op: &'static str, lhs: &Tensor, rhs: &Tensor) -> Result<Pair, TapeError> {
    if lhs.shape() == rhs.shape() {
        return Ok(Pair::Same);
    }
    let suffix = |big: &Tensor, small: &Tensor| {
        small.len() == 1 || (big.rank() > small.rank() && big.shape().ends_with(small.shape()))
    };
    if suffix(lhs, rhs) {
        Ok(Pair::BcastRhs)
    } else if suffix(rhs, lhs) {
        Ok(Pair::BcastLhs)
    } else {
        Err(TapeError::ShapeMismatch {
            op,
            lhs: lhs.shape().to_vec(),
            rhs: rhs.shape().to_vec(),
        })
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Matmul { a: Node, b: Node },
    Add { a: Node, b: Node, pair: Pair },
    Sub { a: Node, b: Node, pair: Pair },
    Mul { a: Node, b: Node, pair: Pair },
    Exp { a: Node },
    Log { a: Node },
    Tanh { a: Node },
    Sigmoid { a: Node },
    Square { a: Node },
    Scale { a: Node, factor: f64 },
    AddScalar { a: Node },
    SumAxis { a: Node, axis: usize },
    MeanAxis { a: Node, axis: usize },
    Concat { parts: Vec<Node>, axis: usize },
    Slice { a: Node, axis: usize, start: usize, len: usize },
    HingeMax { a: Node, threshold: f64 },
    Clamp { a: Node, lo: f64, hi: f64 },
    Gather { table: Node, ids: Vec<usize> },
    XentRows { logits: Node, targets: Vec<usize> },
}

struct Slot {
    value: Tensor,
    op: Op,
}

/// Recorded forward computation plus per-node gradient storage.
pub struct Tape {
    slots: Vec<Slot>,
    backward_done: bool,
    /// Closest approach of any hinge/clamp input to its kink, over the whole
    /// forward pass. Gradient checking uses this to skip non-differentiable
    /// evaluation points.
    min_kink_distance: f64,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of one scalar loss with respect to every tape node.
///
/// Nodes unreachable from the loss read as zero.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient w.r.t. `node`, zeros when the loss does not depend on it.
    pub fn wrt(&self, node: Node) -> Tensor {
        match &self.grads[node.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[node.0]),
        }
    }

    pub fn get(&self, node: Node) -> Option<&Tensor> {
        self.grads[node.0].as_ref()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { slots: Vec::new(), backward_done: false, min_kink_distance: f64::INFINITY }
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    /// Forward value of a node.
    pub fn value(&self, node: Node) -> &Tensor {
        &self.slots[node.0].value
    }

    /// Distance from the nearest recorded kink (hinge threshold or clamp
    /// boundary) seen during forward evaluation. Infinite when no kinked op
    /// ran or none came close.
    pub fn kink_distance(&self) -> f64 {
        self.min_kink_distance
    }

    fn push(&mut self, value: Tensor, op: Op) -> Node {
        debug_assert!(value.all_finite(), "non-finite forward value from {:?}", op);
        self.slots.push(Slot { value, op });
        Node(self.slots.len() - 1)
    }

    /// Record a detached tensor as a leaf (input, parameter, or constant).
    pub fn leaf(&mut self, value: Tensor) -> Node {
        self.push(value, Op::Leaf)
    }

    pub fn scalar(&mut self, value: f64) -> Node {
        self.leaf(Tensor::scalar(value))
    }

    // ── Binary arithmetic ────────────────────────────────────────────

    pub fn add(&mut self, a: Node, b: Node) -> Result<Node, TapeError> {
        let pair = pair_of("add", self.value(a), self.value(b))?;
        let out = binary_forward(self.value(a), self.value(b), pair, |x, y| x + y);
        Ok(self.push(out, Op::Add { a, b, pair }))
    }

    pub fn sub(&mut self, a: Node, b: Node) -> Result<Node, TapeError> {
        let pair = pair_of("sub", self.value(a), self.value(b))?;
        let out = binary_forward(self.value(a), self.value(b), pair, |x, y| x - y);
        Ok(self.push(out, Op::Sub { a, b, pair }))
    }

    pub fn mul(&mut self, a: Node, b: Node) -> Result<Node, TapeError> {
        let pair = pair_of("mul", self.value(a), self.value(b))?;
        let out = binary_forward(self.value(a), self.value(b), pair, |x, y| x * y);
        Ok(self.push(out, Op::Mul { a, b, pair }))
    }

    /// `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: Node, b: Node) -> Result<Node, TapeError> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.rank() != 2 || vb.rank() != 2 || va.shape()[1] != vb.shape()[0] {
            return Err(TapeError::ShapeMismatch {
                op: "matmul",
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let (m, k) = (va.shape()[0], va.shape()[1]);
        let n = vb.shape()[1];
        let mut out = vec![0.0; m * n];
        matmul_into(va.data(), vb.data(), &mut out, m, k, n);
        Ok(self.push(Tensor::new(&[m, n], out), Op::Matmul { a, b }))
    }

    // ── Elementwise unary ────────────────────────────────────────────

    /// Rejects inputs above [`EXP_DOMAIN_LIMIT`]; clamp first in composites.
    pub fn exp(&mut self, a: Node) -> Result<Node, TapeError> {
        if let Some(&bad) = self.value(a).data().iter().find(|x| **x > EXP_DOMAIN_LIMIT) {
            return Err(TapeError::Domain { op: "exp", value: bad });
        }
        let out = self.value(a).map(f64::exp);
        Ok(self.push(out, Op::Exp { a }))
    }

    /// Rejects non-positive inputs.
    pub fn log(&mut self, a: Node) -> Result<Node, TapeError> {
        if let Some(&bad) = self.value(a).data().iter().find(|x| **x <= 0.0) {
            return Err(TapeError::Domain { op: "log", value: bad });
        }
        let out = self.value(a).map(f64::ln);
        Ok(self.push(out, Op::Log { a }))
    }

    pub fn tanh(&mut self, a: Node) -> Node {
        let out = self.value(a).map(f64::tanh);
        self.push(out, Op::Tanh { a })
    }

    pub fn sigmoid(&mut self, a: Node) -> Node {
        let out = self.value(a).map(sigmoid);
        self.push(out, Op::Sigmoid { a })
    }

    pub fn square(&mut self, a: Node) -> Node {
        let out = self.value(a).map(|x| x * x);
        self.push(out, Op::Square { a })
    }

    pub fn scale(&mut self, a: Node, factor: f64) -> Node {
        let out = self.value(a).map(|x| x * factor);
        self.push(out, Op::Scale { a, factor })
    }

    pub fn add_scalar(&mut self, a: Node, shift: f64) -> Node {
        let out = self.value(a).map(|x| x + shift);
        self.push(out, Op::AddScalar { a })
    }

    /// Elementwise `max(threshold, x)`. Gradient is 0 on the flat side.
    pub fn hinge_max(&mut self, a: Node, threshold: f64) -> Node {
        let mut dmin = self.min_kink_distance;
        for &x in self.value(a).data() {
            dmin = dmin.min((x - threshold).abs());
        }
        self.min_kink_distance = dmin;
        let out = self.value(a).map(|x| x.max(threshold));
        self.push(out, Op::HingeMax { a, threshold })
    }

    /// Elementwise clamp to `[lo, hi]`; gradient is 0 outside the interval.
    pub fn clamp(&mut self, a: Node, lo: f64, hi: f64) -> Node {
        let mut dmin = self.min_kink_distance;
        for &x in self.value(a).data() {
            dmin = dmin.min((x - lo).abs()).min((x - hi).abs());
        }
        self.min_kink_distance = dmin;
        let out = self.value(a).map(|x| x.clamp(lo, hi));
        self.push(out, Op::Clamp { a, lo, hi })
    }

    // ── Reductions and shape ops ─────────────────────────────────────

    pub fn sum_axis(&mut self, a: Node, axis: usize) -> Result<Node, TapeError> {
        let (out, _) = reduce_axis("sum-axis", self.value(a), axis, 1.0)?;
        Ok(self.push(out, Op::SumAxis { a, axis }))
    }

    pub fn mean_axis(&mut self, a: Node, axis: usize) -> Result<Node, TapeError> {
        let va = self.value(a);
        if axis >= va.rank() {
            return Err(TapeError::AxisOutOfRange {
                op: "mean-axis",
                axis,
                shape: va.shape().to_vec(),
            });
        }
        if va.shape()[axis] == 0 {
            return Err(TapeError::Invalid { op: "mean-axis", msg: "empty axis".into() });
        }
        let inv = 1.0 / va.shape()[axis] as f64;
        let (out, _) = reduce_axis("mean-axis", va, axis, inv)?;
        Ok(self.push(out, Op::MeanAxis { a, axis }))
    }

    /// Sum every element to a scalar.
    pub fn sum_all(&mut self, a: Node) -> Result<Node, TapeError> {
        let mut n = a;
        while self.value(n).rank() > 0 {
            n = self.sum_axis(n, 0)?;
        }
        Ok(n)
    }

    pub fn concat(&mut self, parts: &[Node], axis: usize) -> Result<Node, TapeError> {
        if parts.is_empty() {
            return Err(TapeError::Invalid { op: "concat", msg: "no operands".into() });
        }
        let first = self.value(parts[0]).shape().to_vec();
        if axis >= first.len() {
            return Err(TapeError::AxisOutOfRange { op: "concat", axis, shape: first });
        }
        let mut axis_total = 0usize;
        for &p in parts {
            let s = self.value(p).shape();
            if s.len() != first.len()
                || s.iter().enumerate().any(|(i, &d)| i != axis && d != first[i])
            {
                return Err(TapeError::ShapeMismatch {
                    op: "concat",
                    lhs: first.clone(),
                    rhs: s.to_vec(),
                });
            }
            axis_total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = axis_total;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = vec![0.0; outer * axis_total * inner];
        let mut offset = 0usize;
        for &p in parts {
            let v = self.value(p);
            let pa = v.shape()[axis];
            for o in 0..outer {
                let src = &v.data()[o * pa * inner..(o + 1) * pa * inner];
                let dst_start = (o * axis_total + offset) * inner;
                data[dst_start..dst_start + pa * inner].copy_from_slice(src);
            }
            offset += pa;
        }
        Ok(self.push(Tensor::new(&out_shape, data), Op::Concat { parts: parts.to_vec(), axis }))
    }

    pub fn slice(&mut self, a: Node, axis: usize, start: usize, len: usize) -> Result<Node, TapeError> {
        let va = self.value(a);
        if axis >= va.rank() {
            return Err(TapeError::AxisOutOfRange {
                op: "slice",
                axis,
                shape: va.shape().to_vec(),
            });
        }
        if start + len > va.shape()[axis] {
            return Err(TapeError::IndexOutOfRange {
                op: "slice",
                index: start + len,
                limit: va.shape()[axis],
            });
        }
        let mut out_shape = va.shape().to_vec();
        out_shape[axis] = len;
        let outer: usize = va.shape()[..axis].iter().product();
        let inner: usize = va.shape()[axis + 1..].iter().product();
        let mid = va.shape()[axis];
        let mut data = vec![0.0; outer * len * inner];
        for o in 0..outer {
            let src = (o * mid + start) * inner;
            let dst = o * len * inner;
            data[dst..dst + len * inner].copy_from_slice(&va.data()[src..src + len * inner]);
        }
        Ok(self.push(Tensor::new(&out_shape, data), Op::Slice { a, axis, start, len }))
    }

    // ── Lookup and fused loss ────────────────────────────────────────

    /// Row gather from a `[V, E]` table; gradient scatter-adds into rows.
    pub fn gather_rows(&mut self, table: Node, ids: &[usize]) -> Result<Node, TapeError> {
        let vt = self.value(table);
        if vt.rank() != 2 {
            return Err(TapeError::Invalid { op: "gather", msg: format!("table rank {}", vt.rank()) });
        }
        let (v, e) = (vt.shape()[0], vt.shape()[1]);
        if let Some(&bad) = ids.iter().find(|&&id| id >= v) {
            return Err(TapeError::IndexOutOfRange { op: "gather", index: bad, limit: v });
        }
        let mut data = vec![0.0; ids.len() * e];
        for (r, &id) in ids.iter().enumerate() {
            data[r * e..(r + 1) * e].copy_from_slice(&vt.data()[id * e..(id + 1) * e]);
        }
        Ok(self.push(Tensor::new(&[ids.len(), e], data), Op::Gather { table, ids: ids.to_vec() }))
    }

    /// Per-row softmax cross-entropy: out[r] = logsumexp(logits[r]) - logits[r, target_r].
    ///
    /// Max-subtracted for stability. Mask rows externally (multiply by a 0/1
    /// vector); masked rows then contribute neither loss nor gradient.
    pub fn xent_rows(&mut self, logits: Node, targets: &[usize]) -> Result<Node, TapeError> {
        let vl = self.value(logits);
        if vl.rank() != 2 || vl.shape()[0] != targets.len() {
            return Err(TapeError::Invalid {
                op: "xent",
                msg: format!("logits {:?} vs {} targets", vl.shape(), targets.len()),
            });
        }
        let c = vl.shape()[1];
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(TapeError::IndexOutOfRange { op: "xent", index: bad, limit: c });
        }
        let mut out = vec![0.0; targets.len()];
        for (r, &t) in targets.iter().enumerate() {
            let row = vl.row(r);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|&x| (x - m).exp()).sum::<f64>().ln();
            out[r] = lse - row[t];
        }
        Ok(self.push(
            Tensor::new(&[targets.len()], out),
            Op::XentRows { logits, targets: targets.to_vec() },
        ))
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Consumes the tape's ability to
    /// differentiate again; forward values stay readable.
    pub fn backward(&mut self, loss: Node) -> Result<Gradients, TapeError> {
        if self.backward_done {
            return Err(TapeError::BackwardTwice);
        }
        let loss_shape = self.value(loss).shape().to_vec();
        if self.value(loss).len() != 1 {
            return Err(TapeError::NonScalarLoss { shape: loss_shape });
        }
        self.backward_done = true;

        let mut grads: Vec<Option<Tensor>> = (0..self.slots.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(&loss_shape, vec![1.0]));

        for idx in (0..=loss.0).rev() {
            let Some(dout) = grads[idx].take() else { continue };
            self.backward_step(idx, &dout, &mut grads);
            grads[idx] = Some(dout);
        }

        let shapes = self.slots.iter().map(|s| s.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn backward_step(&self, idx: usize, dout: &Tensor, grads: &mut [Option<Tensor>]) {
        let op = &self.slots[idx].op;
        match op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let va = self.value(*a);
                let vb = self.value(*b);
                let (m, k) = (va.shape()[0], va.shape()[1]);
                let n = vb.shape()[1];
                // dA[i,j] = sum_t dOut[i,t] * B[j,t]
                let mut da = vec![0.0; m * k];
                for i in 0..m {
                    let drow = &dout.data()[i * n..(i + 1) * n];
                    for j in 0..k {
                        let brow = &vb.data()[j * n..(j + 1) * n];
                        da[i * k + j] += dot(drow, brow);
                    }
                }
                accumulate(grads, *a, va.shape(), &da);
                // dB[j,t] = sum_i A[i,j] * dOut[i,t]
                let mut db = vec![0.0; k * n];
                for i in 0..m {
                    let drow = &dout.data()[i * n..(i + 1) * n];
                    for j in 0..k {
                        let aij = va.data()[i * k + j];
                        axpy(aij, drow, &mut db[j * n..(j + 1) * n]);
                    }
                }
                accumulate(grads, *b, vb.shape(), &db);
            }
            Op::Add { a, b, pair } => {
                self.binary_grads(*a, *b, *pair, dout, grads, |_, _, d| (d, d));
            }
            Op::Sub { a, b, pair } => {
                self.binary_grads(*a, *b, *pair, dout, grads, |_, _, d| (d, -d));
            }
            Op::Mul { a, b, pair } => {
                self.binary_grads(*a, *b, *pair, dout, grads, |x, y, d| (d * y, d * x));
            }
            Op::Exp { a } => {
                let y = &self.slots[idx].value;
                self.unary_grad(*a, dout, grads, |i, d| d * y.data()[i]);
            }
            Op::Log { a } => {
                let x = self.value(*a);
                self.unary_grad(*a, dout, grads, |i, d| d / x.data()[i]);
            }
            Op::Tanh { a } => {
                let y = &self.slots[idx].value;
                self.unary_grad(*a, dout, grads, |i, d| d * (1.0 - y.data()[i] * y.data()[i]));
            }
            Op::Sigmoid { a } => {
                let y = &self.slots[idx].value;
                self.unary_grad(*a, dout, grads, |i, d| d * y.data()[i] * (1.0 - y.data()[i]));
            }
            Op::Square { a } => {
                let x = self.value(*a);
                self.unary_grad(*a, dout, grads, |i, d| d * 2.0 * x.data()[i]);
            }
            Op::Scale { a, factor } => {
                let f = *factor;
                self.unary_grad(*a, dout, grads, |_, d| d * f);
            }
            Op::AddScalar { a } => {
                self.unary_grad(*a, dout, grads, |_, d| d);
            }
            Op::HingeMax { a, threshold } => {
                let x = self.value(*a);
                let t = *threshold;
                self.unary_grad(*a, dout, grads, |i, d| if x.data()[i] > t { d } else { 0.0 });
            }
            Op::Clamp { a, lo, hi } => {
                let x = self.value(*a);
                let (lo, hi) = (*lo, *hi);
                self.unary_grad(*a, dout, grads, |i, d| {
                    let v = x.data()[i];
                    if v > lo && v < hi {
                        d
                    } else {
                        0.0
                    }
                });
            }
            Op::SumAxis { a, axis } | Op::MeanAxis { a, axis } => {
                let va = self.value(*a);
                let mid = va.shape()[*axis];
                let factor = if matches!(op, Op::MeanAxis { .. }) { 1.0 / mid as f64 } else { 1.0 };
                let outer: usize = va.shape()[..*axis].iter().product();
                let inner: usize = va.shape()[*axis + 1..].iter().product();
                let mut da = vec![0.0; va.len()];
                for o in 0..outer {
                    let dsrc = &dout.data()[o * inner..(o + 1) * inner];
                    for m in 0..mid {
                        let dst = &mut da[(o * mid + m) * inner..(o * mid + m + 1) * inner];
                        for (dd, &ds) in dst.iter_mut().zip(dsrc) {
                            *dd += ds * factor;
                        }
                    }
                }
                accumulate(grads, *a, va.shape(), &da);
            }
            Op::Concat { parts, axis } => {
                let out_shape = self.slots[idx].value.shape().to_vec();
                let outer: usize = out_shape[..*axis].iter().product();
                let inner: usize = out_shape[*axis + 1..].iter().product();
                let total = out_shape[*axis];
                let mut offset = 0usize;
                for &p in parts {
                    let vp = self.value(p);
                    let pa = vp.shape()[*axis];
                    let mut dp = vec![0.0; vp.len()];
                    for o in 0..outer {
                        let src = (o * total + offset) * inner;
                        let dst = o * pa * inner;
                        dp[dst..dst + pa * inner]
                            .copy_from_slice(&dout.data()[src..src + pa * inner]);
                    }
                    accumulate(grads, p, vp.shape(), &dp);
                    offset += pa;
                }
            }
            Op::Slice { a, axis, start, len } => {
                let va = self.value(*a);
                let outer: usize = va.shape()[..*axis].iter().product();
                let inner: usize = va.shape()[*axis + 1..].iter().product();
                let mid = va.shape()[*axis];
                let mut da = vec![0.0; va.len()];
                for o in 0..outer {
                    let dst = (o * mid + start) * inner;
                    let src = o * len * inner;
                    da[dst..dst + len * inner].copy_from_slice(&dout.data()[src..src + len * inner]);
                }
                accumulate(grads, *a, va.shape(), &da);
            }
            Op::Gather { table, ids } => {
                let vt = self.value(*table);
                let e = vt.shape()[1];
                let mut dt = vec![0.0; vt.len()];
                for (r, &id) in ids.iter().enumerate() {
                    let src = &dout.data()[r * e..(r + 1) * e];
                    axpy(1.0, src, &mut dt[id * e..(id + 1) * e]);
                }
                accumulate(grads, *table, vt.shape(), &dt);
            }
            Op::XentRows { logits, targets } => {
                let vl = self.value(*logits);
                let c = vl.shape()[1];
                let mut dl = vec![0.0; vl.len()];
                for (r, &t) in targets.iter().enumerate() {
                    let d = dout.data()[r];
                    if d == 0.0 {
                        continue;
                    }
                    let row = vl.row(r);
                    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let mut exps: Vec<f64> = row.iter().map(|&x| (x - m).exp()).collect();
                    let sum: f64 = exps.iter().sum();
                    for e in exps.iter_mut() {
                        *e /= sum;
                    }
                    let drow = &mut dl[r * c..(r + 1) * c];
                    for (dd, &p) in drow.iter_mut().zip(&exps) {
                        *dd += d * p;
                    }
                    drow[t] -= d;
                }
                accumulate(grads, *logits, vl.shape(), &dl);
            }
        }
    }

    fn unary_grad(
        &self,
        a: Node,
        dout: &Tensor,
        grads: &mut [Option<Tensor>],
        f: impl Fn(usize, f64) -> f64,
    ) {
        let va = self.value(a);
        let da: Vec<f64> = dout.data().iter().enumerate().map(|(i, &d)| f(i, d)).collect();
        accumulate(grads, a, va.shape(), &da);
    }

    /// Shared backward for broadcasting binary ops. `f(x, y, d)` returns the
    /// (da, db) contributions for one output element.
    fn binary_grads(
        &self,
        a: Node,
        b: Node,
        pair: Pair,
        dout: &Tensor,
        grads: &mut [Option<Tensor>],
        f: impl Fn(f64, f64, f64) -> (f64, f64),
    ) {
        let va = self.value(a);
        let vb = self.value(b);
        let (la, lb) = (va.len(), vb.len());
        let mut da = vec![0.0; la];
        let mut db = vec![0.0; lb];
        let n = dout.len();
        for i in 0..n {
            let (ia, ib) = match pair {
                Pair::Same => (i, i),
                Pair::BcastLhs => (i % la, i),
                Pair::BcastRhs => (i, i % lb),
            };
            let (ga, gb) = f(va.data()[ia], vb.data()[ib], dout.data()[i]);
            da[ia] += ga;
            db[ib] += gb;
        }
        accumulate(grads, a, va.shape(), &da);
        accumulate(grads, b, vb.shape(), &db);
    }
}

fn accumulate(grads: &mut [Option<Tensor>], node: Node, shape: &[usize], contribution: &[f64]) {
    match &mut grads[node.0] {
        Some(g) => {
            for (gv, &c) in g.data_mut().iter_mut().zip(contribution) {
                *gv += c;
            }
        }
        None => grads[node.0] = Some(Tensor::new(shape, contribution.to_vec())),
    }
}

fn binary_forward(a: &Tensor, b: &Tensor, pair: Pair, f: impl Fn(f64, f64) -> f64) -> Tensor {
    match pair {
        Pair::Same => Tensor::new(
            a.shape(),
            a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
        ),
        Pair::BcastRhs => {
            let lb = b.len();
            Tensor::new(
                a.shape(),
                a.data().iter().enumerate().map(|(i, &x)| f(x, b.data()[i % lb])).collect(),
            )
        }
        Pair::BcastLhs => {
            let la = a.len();
            Tensor::new(
                b.shape(),
                b.data().iter().enumerate().map(|(i, &y)| f(a.data()[i % la], y)).collect(),
            )
        }
    }
}

fn reduce_axis(
    op: &'static str,
    t: &Tensor,
    axis: usize,
    factor: f64,
) -> Result<(Tensor, usize), TapeError> {
    if axis >= t.rank() {
        return Err(TapeError::AxisOutOfRange { op, axis, shape: t.shape().to_vec() });
    }
    let mid = t.shape()[axis];
    let outer: usize = t.shape()[..axis].iter().product();
    let inner: usize = t.shape()[axis + 1..].iter().product();
    let mut out_shape = t.shape().to_vec();
    out_shape.remove(axis);
    let mut data = vec![0.0; outer * inner];
    for o in 0..outer {
        for m in 0..mid {
            let src = &t.data()[(o * mid + m) * inner..(o * mid + m + 1) * inner];
            let dst = &mut data[o * inner..(o + 1) * inner];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d += s * factor;
            }
        }
    }
    Ok((Tensor::new(&out_shape, data), mid))
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0;
    for i in 0..a.len() {
        acc += a[i] * b[i];
    }
    acc
}

pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for i in 0..x.len() {
        y[i] += alpha * x[i];
    }
}

/// `C[m,n] += A[m,k] * B[k,n]`, ikj order so the inner loop runs over
/// contiguous rows of B and C.
pub(crate) fn matmul_into(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for j in 0..k {
            let aij = a[i * k + j];
            if aij != 0.0 {
                axpy(aij, &b[j * n..(j + 1) * n], crow);
            }
        }
    }
}

// ── Public primitive dispatcher ──────────────────────────────────────

/// Primitive operation kinds addressable by name.
#[derive(Clone, Debug, PartialEq)]
pub enum OpKind {
    Matmul,
    Add,
    Sub,
    MulElementwise,
    Exp,
    Log,
    Tanh,
    Sigmoid,
    Square,
    SumAxis(usize),
    MeanAxis(usize),
    Concat(usize),
    Slice { axis: usize, start: usize, len: usize },
    ScalarScale(f64),
}

/// Uniform entry point over the primitive op set: applies `kind` to
/// `operands` already on `tape`, recording the result.
pub fn forward_op(tape: &mut Tape, kind: OpKind, operands: &[Node]) -> Result<Node, TapeError> {
    let arity = |want: usize| -> Result<(), TapeError> {
        if operands.len() == want {
            Ok(())
        } else {
            Err(TapeError::Invalid {
                op: "forward_op",
                msg: format!("{:?} expects {} operands, got {}", kind, want, operands.len()),
            })
        }
    };
    match kind {
        OpKind::Matmul => {
            arity(2)?;
            tape.matmul(operands[0], operands[1])
        }
        OpKind::Add => {
            arity(2)?;
            tape.add(operands[0], operands[1])
        }
        OpKind::Sub => {
            arity(2)?;
            tape.sub(operands[0], operands[1])
        }
        OpKind::MulElementwise => {
            arity(2)?;
            tape.mul(operands[0], operands[1])
        }
        OpKind::Exp => {
            arity(1)?;
            tape.exp(operands[0])
        }
        OpKind::Log => {
            arity(1)?;
            tape.log(operands[0])
        }
        OpKind::Tanh => {
            arity(1)?;
            Ok(tape.tanh(operands[0]))
        }
        OpKind::Sigmoid => {
            arity(1)?;
            Ok(tape.sigmoid(operands[0]))
        }
        OpKind::Square => {
            arity(1)?;
            Ok(tape.square(operands[0]))
        }
        OpKind::SumAxis(axis) => {
            arity(1)?;
            tape.sum_axis(operands[0], axis)
        }
        OpKind::MeanAxis(axis) => {
            arity(1)?;
            tape.mean_axis(operands[0], axis)
        }
        OpKind::Concat(axis) => tape.concat(operands, axis),
        OpKind::Slice { axis, start, len } => {
            arity(1)?;
            tape.slice(operands[0], axis, start, len)
        }
        OpKind::ScalarScale(factor) => {
            arity(1)?;
            Ok(tape.scale(operands[0], factor))
        }
    }
}
