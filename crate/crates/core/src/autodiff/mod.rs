//! Reverse-mode automatic differentiation on a linear tape.
//!
//! Every op appends a node holding its output value plus whatever it needs
//! for the backward pass. `backward` walks the nodes in reverse insertion
//! order, so gradient accumulation order is fixed and replays are
//! bit-identical.

pub mod conv;
mod gradcheck;

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicU64, Ordering};

pub use conv::{ConvGeom, Padding};
pub use gradcheck::{check_named, grad_check, GradCheckReport};

use crate::error::{Error, Result};
use crate::tensor::{axis_split, Scalar, Tensor};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    idx: usize,
    tape: u64,
}

/// Channel shift along time for `[N, T, H, W, C]` inputs.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShiftConfig {
    /// Size of each shifted group as a fraction of the channel count.
    pub shift_fraction: f64,
    pub enabled: bool,
}

impl Default for ShiftConfig {
    fn default() -> Self {
        ShiftConfig {
            shift_fraction: 0.125,
            enabled: true,
        }
    }
}

impl ShiftConfig {
    /// Channel counts of the (forward, backward) shifted groups.
    pub fn groups(&self, channels: usize) -> (usize, usize) {
        if !self.enabled {
            return (0, 0);
        }
        let fold = ((self.shift_fraction * channels as f64).floor() as usize).min(channels);
        (fold, fold.min(channels - fold))
    }
}

/// Per-channel statistics of one train-mode batch-norm call.
#[derive(Clone, Debug)]
pub struct BatchStats<F> {
    pub mean: Vec<F>,
    pub var: Vec<F>,
}

pub enum BnMode<'a, F> {
    Train { eps: F },
    Eval { mean: &'a [F], var: &'a [F], eps: F },
}

enum Op<F> {
    Leaf,
    Param(String),
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { a: usize, c: F },
    AddScalar { a: usize },
    MatMul { a: usize, b: usize, m: usize, k: usize, n: usize, trans_b: bool },
    Relu { a: usize },
    Exp { a: usize },
    Log { a: usize },
    Abs { a: usize },
    Softplus { a: usize },
    SumAll { a: usize },
    MeanAll { a: usize },
    SumAxis { a: usize, axis: usize },
    MaxAxis { a: usize, axis: usize, arg: Vec<usize> },
    Reshape { a: usize },
    Permute { a: usize, perm: Vec<usize> },
    Concat { parts: Vec<usize>, axis: usize },
    Slice { a: usize, axis: usize, start: usize },
    L2Normalize { a: usize, norms: Vec<F> },
    MaskedLogSumExp { a: usize, probs: Vec<F> },
    Conv { x: usize, w: usize, b: Option<usize>, geom: ConvGeom, cols: Vec<F> },
    BatchNorm { x: usize, gamma: usize, beta: usize, xhat: Vec<F>, inv_std: Vec<F>, train: bool },
    TemporalShift { a: usize, cfg: ShiftConfig },
    GatherRows { table: usize, ids: Vec<usize> },
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// Optional attributes for the string-dispatched [`Tape::apply`].
#[derive(Clone, Debug, Default)]
pub struct OpAttrs {
    pub axis: Option<usize>,
    pub axes: Option<Vec<usize>>,
    pub shape: Option<Vec<usize>>,
    pub start: Option<usize>,
    pub len: Option<usize>,
    pub scalar: Option<f64>,
    pub strides: Option<(usize, usize)>,
    pub temporal_padding: Option<Padding>,
    pub spatial_padding: Option<Padding>,
    pub mask: Option<Vec<bool>>,
    pub shift: Option<ShiftConfig>,
    pub eps: Option<f64>,
    pub ids: Option<Vec<usize>>,
}

/// Gradients of a scalar loss, keyed by parameter name.
#[derive(Clone, Debug, Default)]
pub struct Gradients<F> {
    map: BTreeMap<String, Tensor<F>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn get(&self, name: &str) -> Option<&Tensor<F>> {
        self.map.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<F>)> {
        self.map.iter()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn into_map(self) -> BTreeMap<String, Tensor<F>> {
        self.map
    }
}

type TrainableFilter = Box<dyn Fn(&str) -> bool + Send>;

pub struct Tape<F> {
    id: u64,
    nodes: Vec<Node<F>>,
    params: HashMap<String, Var>,
    recording: bool,
    trainable: Option<TrainableFilter>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn check_finite<F: Scalar>(op: &'static str, t: &Tensor<F>) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

/// Length of the trailing broadcast block of `b` within `a`, if compatible.
fn broadcast_block(a: &[usize], b: &[usize]) -> Option<usize> {
    if b.len() > a.len() || a[a.len() - b.len()..] != *b {
        return None;
    }
    Some(b.iter().product())
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            params: HashMap::new(),
            recording: true,
            trainable: None,
        }
    }

    /// A tape that treats every parameter as a constant (no gradients, no saved buffers).
    pub fn inference() -> Self {
        let mut t = Self::new();
        t.recording = false;
        t
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    /// Restrict which parameter names are differentiated; others become constants.
    pub fn set_trainable(&mut self, filter: impl Fn(&str) -> bool + Send + 'static) {
        self.trainable = Some(Box::new(filter));
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad: requires_grad && self.recording,
        });
        Var {
            idx: self.nodes.len() - 1,
            tape: self.id,
        }
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.idx >= self.nodes.len() {
            return Err(Error::invalid("variable belongs to a different tape"));
        }
        Ok(v.idx)
    }

    fn rg(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        assert_eq!(v.tape, self.id, "variable belongs to a different tape");
        &self.nodes[v.idx].value
    }

    /// Distance of the recorded graph from its nearest kink: the smallest
    /// |input| of any ReLU or abs, and the smallest gap between the winner of
    /// a max reduction and the best distinct runner-up. Infinite when there
    /// is none.
    pub fn kink_margin(&self) -> f64 {
        let mut margin = f64::INFINITY;
        for node in &self.nodes {
            match &node.op {
                Op::Relu { a } | Op::Abs { a } => {
                    for v in self.nodes[*a].value.data() {
                        margin = margin.min(v.to_f64_lossy().abs());
                    }
                }
                Op::MaxAxis { a, axis, .. } => {
                    let x = &self.nodes[*a].value;
                    let len = x.shape()[*axis];
                    let inner: usize = x.shape()[axis + 1..].iter().product();
                    let outer = x.numel() / (len * inner).max(1);
                    for o in 0..outer {
                        for i in 0..inner {
                            let (mut best, mut second) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
                            for k in 0..len {
                                let v = x.data()[(o * len + k) * inner + i].to_f64_lossy();
                                // Bit-identical entries (a repeated token, say) move together.
                                if v > best {
                                    second = best;
                                    best = v;
                                } else if v > second && v < best {
                                    second = v;
                                }
                            }
                            if second > f64::NEG_INFINITY {
                                margin = margin.min(best - second);
                            }
                        }
                    }
                }
                _ => {}
            }
        }
        margin
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        v.tape == self.id && self.nodes[v.idx].requires_grad
    }

    /// Record a constant input.
    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Register a named parameter. Registering the same name twice returns the same variable.
    pub fn param(&mut self, name: &str, value: &Tensor<F>) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let trainable = self.recording && self.trainable.as_ref().map_or(true, |f| f(name));
        let v = if trainable {
            self.push(value.clone(), Op::Param(name.to_string()), true)
        } else {
            self.push(value.clone(), Op::Leaf, false)
        };
        self.params.insert(name.to_string(), v);
        v
    }

    fn binary(&mut self, a: Var, b: Var, op: &'static str) -> Result<(usize, usize, usize)> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let block = broadcast_block(self.nodes[ia].value.shape(), self.nodes[ib].value.shape())
            .ok_or_else(|| {
                Error::shape(
                    op,
                    format!("{:?} vs {:?}", self.nodes[ia].value.shape(), self.nodes[ib].value.shape()),
                )
            })?;
        Ok((ia, ib, block))
    }

    fn zip_broadcast(&self, ia: usize, ib: usize, block: usize, f: impl Fn(F, F) -> F) -> Tensor<F> {
        let av = &self.nodes[ia].value;
        let bv = self.nodes[ib].value.data();
        let data = if block == 0 {
            Vec::new()
        } else {
            av.data()
                .iter()
                .enumerate()
                .map(|(i, &x)| f(x, bv[i % block]))
                .collect()
        };
        Tensor::new(av.shape().to_vec(), data).expect("same shape")
    }

    /// Elementwise `a + b`; `b` may match a trailing suffix of `a`'s shape.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib, block) = self.binary(a, b, "add")?;
        let out = self.zip_broadcast(ia, ib, block, |x, y| x + y);
        check_finite("add", &out)?;
        let rg = self.rg(ia) || self.rg(ib);
        Ok(self.push(out, Op::Add { a: ia, b: ib }, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib, block) = self.binary(a, b, "sub")?;
        let out = self.zip_broadcast(ia, ib, block, |x, y| x - y);
        check_finite("sub", &out)?;
        let rg = self.rg(ia) || self.rg(ib);
        Ok(self.push(out, Op::Sub { a: ia, b: ib }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib, block) = self.binary(a, b, "mul")?;
        let out = self.zip_broadcast(ia, ib, block, |x, y| x * y);
        check_finite("mul", &out)?;
        let rg = self.rg(ia) || self.rg(ib);
        Ok(self.push(out, Op::Mul { a: ia, b: ib }, rg))
    }

    pub fn scale(&mut self, a: Var, c: F) -> Result<Var> {
        let ia = self.idx(a)?;
        let out = self.nodes[ia].value.map(|x| x * c);
        check_finite("scale", &out)?;
        let rg = self.rg(ia);
        Ok(self.push(out, Op::Scale { a: ia, c }, rg))
    }

    pub fn add_scalar(&mut self, a: Var, c: F) -> Result<Var> {
        let ia = self.idx(a)?;
        let out = self.nodes[ia].value.map(|x| x + c);
        check_finite("add_scalar", &out)?;
        let rg = self.rg(ia);
        Ok(self.push(out, Op::AddScalar { a: ia }, rg))
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (sa, sb) = (self.nodes[ia].value.shape(), self.nodes[ib].value.shape());
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?} must be rank 2")));
        }
        let (m, k) = (sa[0], sa[1]);
        let (kb, n) = if trans_b { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != kb {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?} (trans_b={trans_b})")));
        }
        let mut out = vec![F::zero(); m * n];
        let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
        F::gemm(
            m,
            k,
            n,
            self.nodes[ia].value.data(),
            k as isize,
            1,
            self.nodes[ib].value.data(),
            rsb,
            csb,
            F::zero(),
            &mut out,
        );
        let out = Tensor::new([m, n], out)?;
        check_finite("matmul", &out)?;
        let rg = self.rg(ia) || self.rg(ib);
        Ok(self.push(out, Op::MatMul { a: ia, b: ib, m, k, n, trans_b }, rg))
    }

    /// `[m, k] @ [k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `[m, k] @ [n, k]^T`, used for pairwise similarity matrices.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn unary(&mut self, a: Var, name: &'static str, f: impl Fn(F) -> F, op: impl FnOnce(usize) -> Op<F>) -> Result<Var> {
        let ia = self.idx(a)?;
        let out = self.nodes[ia].value.map(f);
        check_finite(name, &out)?;
        let rg = self.rg(ia);
        Ok(self.push(out, op(ia), rg))
    }

    /// ReLU with subgradient 0 at 0.
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, "relu", |x| if x > F::zero() { x } else { F::zero() }, |a| Op::Relu { a })
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, "exp", |x| x.exp(), |a| Op::Exp { a })
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(a, "log", |x| x.ln(), |a| Op::Log { a })
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary(a, "abs", |x| x.abs(), |a| Op::Abs { a })
    }

    /// `log(1 + exp(x))`, evaluated stably.
    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.unary(a, "softplus", softplus, |a| Op::Softplus { a })
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let out = Tensor::scalar(self.nodes[ia].value.sum_all());
        check_finite("sum", &out)?;
        let rg = self.rg(ia);
        Ok(self.push(out, Op::SumAll { a: ia }, rg))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let n = self.nodes[ia].value.numel();
        if n == 0 {
            return Err(Error::shape("mean", "empty tensor"));
        }
        let out = Tensor::scalar(self.nodes[ia].value.sum_all() / F::from_usize(n).unwrap());
        check_finite("mean", &out)?;
        let rg = self.rg(ia);
        Ok(self.push(out, Op::MeanAll { a: ia }, rg))
    }

    fn reduced_shape(&self, ia: usize, axis: usize, op: &'static str) -> Result<(Vec<usize>, (usize, usize, usize))> {
        let shape = self.nodes[ia].value.shape();
        if axis >= shape.len() {
            return Err(Error::shape(op, format!("axis {axis} for shape {shape:?}")));
        }
        if shape[axis] == 0 {
            return Err(Error::shape(op, format!("empty axis {axis} in {shape:?}")));
        }
        let mut out = shape.to_vec();
        out.remove(axis);
        Ok((out, axis_split(shape, axis)))
    }

    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let ia = self.idx(a)?;
        let (shape, (outer, ext, inner)) = self.reduced_shape(ia, axis, "sum_axis")?;
        let src = self.nodes[ia].value.data();
        let mut out = vec![F::zero(); outer * inner];
        for o in 0..outer {
            for e in 0..ext {
                let base = (o * ext + e) * inner;
                for i in 0..inner {
                    out[o * inner + i] += src[base + i];
                }
            }
        }
        let out = Tensor::new(shape, out)?;
        check_finite("sum_axis", &out)?;
        let rg = self.rg(ia);
        Ok(self.push(out, Op::SumAxis { a: ia, axis }, rg))
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let ia = self.idx(a)?;
        let ext = self
            .nodes[ia]
            .value
            .shape()
            .get(axis)
            .copied()
            .ok_or_else(|| Error::shape("mean_axis", format!("axis {axis}")))?;
        let s = self.sum_axis(a, axis)?;
        if ext == 0 {
            return Err(Error::shape("mean_axis", "empty axis"));
        }
        self.scale(s, F::one() / F::from_usize(ext).unwrap())
    }

    /// Maximum along `axis`; ties route the gradient to the first maximal index.
    pub fn max_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let ia = self.idx(a)?;
        let (shape, (outer, ext, inner)) = self.reduced_shape(ia, axis, "max_axis")?;
        let src = self.nodes[ia].value.data();
        let mut out = vec![F::neg_infinity(); outer * inner];
        let mut arg = vec![0usize; outer * inner];
        for o in 0..outer {
            for e in 0..ext {
                let base = (o * ext + e) * inner;
                for i in 0..inner {
                    let v = src[base + i];
                    if v > out[o * inner + i] {
                        out[o * inner + i] = v;
                        arg[o * inner + i] = e;
                    }
                }
            }
        }
        let out = Tensor::new(shape, out)?;
        check_finite("max_axis", &out)?;
        let rg = self.rg(ia);
        Ok(self.push(out, Op::MaxAxis { a: ia, axis, arg }, rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let ia = self.idx(a)?;
        let out = self.nodes[ia].value.reshape(shape.to_vec())?;
        let rg = self.rg(ia);
        Ok(self.push(out, Op::Reshape { a: ia }, rg))
    }

    /// Axis permutation; `perm[i]` names the source axis of output axis `i`.
    pub fn transpose(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let ia = self.idx(a)?;
        let out = self.nodes[ia].value.permute(perm)?;
        let rg = self.rg(ia);
        Ok(self.push(out, Op::Permute { a: ia, perm: perm.to_vec() }, rg))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let idxs = parts.iter().map(|&p| self.idx(p)).collect::<Result<Vec<_>>>()?;
        let first = idxs.first().ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let base = self.nodes[*first].value.shape().to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", format!("axis {axis} for {base:?}")));
        }
        let mut total = 0;
        for &i in &idxs {
            let s = self.nodes[i].value.shape();
            let compatible = s.len() == base.len()
                && s.iter().enumerate().all(|(d, &e)| d == axis || e == base[d]);
            if !compatible {
                return Err(Error::shape("concat", format!("{s:?} vs {base:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&base, axis);
        let mut shape = base.clone();
        shape[axis] = total;
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &i in &idxs {
                let ext = self.nodes[i].value.shape()[axis];
                let d = self.nodes[i].value.data();
                out.extend_from_slice(&d[o * ext * inner..(o + 1) * ext * inner]);
            }
        }
        let out = Tensor::new(shape, out)?;
        let rg = idxs.iter().any(|&i| self.rg(i));
        Ok(self.push(out, Op::Concat { parts: idxs, axis }, rg))
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let ia = self.idx(a)?;
        let shape = self.nodes[ia].value.shape().to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::shape("slice", format!("[{start}, {}) on axis {axis} of {shape:?}", start + len)));
        }
        let (outer, ext, inner) = axis_split(&shape, axis);
        let src = self.nodes[ia].value.data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let b = (o * ext + start) * inner;
            out.extend_from_slice(&src[b..b + len * inner]);
        }
        let mut oshape = shape;
        oshape[axis] = len;
        let out = Tensor::new(oshape, out)?;
        let rg = self.rg(ia);
        Ok(self.push(out, Op::Slice { a: ia, axis, start }, rg))
    }

    /// Normalize each vector along the last axis to unit L2 norm.
    pub fn l2_normalize(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let v = &self.nodes[ia].value;
        let d = *v.shape().last().ok_or_else(|| Error::shape("l2_normalize", "rank-0 input"))?;
        if d == 0 {
            return Err(Error::shape("l2_normalize", "empty vectors"));
        }
        let rows = v.numel() / d;
        let floor = F::from_f64_lossy(1e-12);
        let mut norms = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(v.numel());
        for r in 0..rows {
            let row = &v.data()[r * d..(r + 1) * d];
            let n = row.iter().map(|&x| x * x).sum::<F>().sqrt().max(floor);
            norms.push(n);
            out.extend(row.iter().map(|&x| x / n));
        }
        let out = Tensor::new(v.shape().to_vec(), out)?;
        check_finite("l2_normalize", &out)?;
        let rg = self.rg(ia);
        Ok(self.push(out, Op::L2Normalize { a: ia, norms }, rg))
    }

    /// Row-wise `log sum_{mask} exp(x)` over a `[R, K]` input, max-subtracted.
    pub fn masked_logsumexp(&mut self, a: Var, mask: &[bool]) -> Result<Var> {
        let ia = self.idx(a)?;
        let v = &self.nodes[ia].value;
        if v.rank() != 2 || mask.len() != v.numel() {
            return Err(Error::shape(
                "masked_logsumexp",
                format!("input {:?} with mask of length {}", v.shape(), mask.len()),
            ));
        }
        let (rows, k) = (v.shape()[0], v.shape()[1]);
        let mut out = Vec::with_capacity(rows);
        let mut probs = vec![F::zero(); rows * k];
        for r in 0..rows {
            let row = &v.data()[r * k..(r + 1) * k];
            let m = &mask[r * k..(r + 1) * k];
            let mx = row
                .iter()
                .zip(m)
                .filter(|(_, &keep)| keep)
                .map(|(&x, _)| x)
                .fold(F::neg_infinity(), F::max);
            if mx == F::neg_infinity() {
                return Err(Error::shape("masked_logsumexp", format!("row {r} has no selected entries")));
            }
            let mut s = F::zero();
            for j in 0..k {
                if m[j] {
                    let e = (row[j] - mx).exp();
                    probs[r * k + j] = e;
                    s += e;
                }
            }
            for p in &mut probs[r * k..(r + 1) * k] {
                *p /= s;
            }
            out.push(mx + s.ln());
        }
        let out = Tensor::new([rows], out)?;
        check_finite("masked_logsumexp", &out)?;
        let rg = self.rg(ia);
        Ok(self.push(out, Op::MaskedLogSumExp { a: ia, probs }, rg))
    }

    /// Channels-last 3D convolution (cross-correlation). Input `[N,T,H,W,C_in]`,
    /// weight `[K_t,K_h,K_w,C_in,C_out]`, optional bias `[C_out]`.
    pub fn conv3d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        strides: (usize, usize),
        temporal_padding: Padding,
        spatial_padding: Padding,
    ) -> Result<Var> {
        let (ix, iw) = (self.idx(x)?, self.idx(w)?);
        let ib = b.map(|b| self.idx(b)).transpose()?;
        let geom = ConvGeom::new(
            self.nodes[ix].value.shape(),
            self.nodes[iw].value.shape(),
            strides,
            temporal_padding,
            spatial_padding,
        )?;
        if let Some(ib) = ib {
            if self.nodes[ib].value.shape() != [geom.cout] {
                return Err(Error::shape("conv", format!("bias shape {:?}", self.nodes[ib].value.shape())));
            }
        }
        let (out, cols) = conv::conv_forward(
            &geom,
            self.nodes[ix].value.data(),
            self.nodes[iw].value.data(),
            ib.map(|i| self.nodes[i].value.data()),
        );
        let out = Tensor::new(geom.out_shape(), out)?;
        check_finite("conv", &out)?;
        let rg = self.rg(ix) || self.rg(iw) || ib.map_or(false, |i| self.rg(i));
        let cols = if rg && self.rg(iw) { cols } else { Vec::new() };
        Ok(self.push(out, Op::Conv { x: ix, w: iw, b: ib, geom, cols }, rg))
    }

    /// Channels-last 2D convolution: input `[N,H,W,C_in]`, weight `[K_h,K_w,C_in,C_out]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, strides: (usize, usize), padding: Padding) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 {
            return Err(Error::shape("conv2d", format!("input {xs:?} / kernel {ws:?} must be rank 4")));
        }
        let x5 = self.reshape(x, &[xs[0], 1, xs[1], xs[2], xs[3]])?;
        let w5 = self.reshape(w, &[1, ws[0], ws[1], ws[2], ws[3]])?;
        let y = self.conv3d(x5, w5, b, strides, Padding::Valid, padding)?;
        let ys = self.shape(y).to_vec();
        self.reshape(y, &[ys[0], ys[2], ys[3], ys[4]])
    }

    /// Batch normalization over every axis except the last (channel) axis.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, mode: BnMode<'_, F>) -> Result<(Var, Option<BatchStats<F>>)> {
        let (ix, ig, ib) = (self.idx(x)?, self.idx(gamma)?, self.idx(beta)?);
        let xs = self.nodes[ix].value.shape().to_vec();
        let c = *xs.last().ok_or_else(|| Error::shape("batch_norm", "rank-0 input"))?;
        if self.nodes[ig].value.shape() != [c] || self.nodes[ib].value.shape() != [c] {
            return Err(Error::shape("batch_norm", format!("gamma/beta must be [{c}] for input {xs:?}")));
        }
        let rows = if c == 0 { 0 } else { self.nodes[ix].value.numel() / c };
        let xd = self.nodes[ix].value.data();
        let (mean, var, eps, train) = match mode {
            BnMode::Train { eps } => {
                if rows == 0 {
                    return Err(Error::shape("batch_norm", "empty batch in train mode"));
                }
                let nf = F::from_usize(rows).unwrap();
                let mut mean = vec![F::zero(); c];
                for r in 0..rows {
                    for j in 0..c {
                        mean[j] += xd[r * c + j];
                    }
                }
                mean.iter_mut().for_each(|m| *m /= nf);
                let mut var = vec![F::zero(); c];
                for r in 0..rows {
                    for j in 0..c {
                        let d = xd[r * c + j] - mean[j];
                        var[j] += d * d;
                    }
                }
                var.iter_mut().for_each(|v| *v /= nf);
                (mean, var, eps, true)
            }
            BnMode::Eval { mean, var, eps } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::shape("batch_norm", "moving statistics size"));
                }
                (mean.to_vec(), var.to_vec(), eps, false)
            }
        };
        let inv_std: Vec<F> = var.iter().map(|&v| F::one() / (v + eps).sqrt()).collect();
        let g = self.nodes[ig].value.data();
        let bt = self.nodes[ib].value.data();
        let mut xhat = vec![F::zero(); rows * c];
        let mut out = vec![F::zero(); rows * c];
        for r in 0..rows {
            for j in 0..c {
                let h = (xd[r * c + j] - mean[j]) * inv_std[j];
                xhat[r * c + j] = h;
                out[r * c + j] = g[j] * h + bt[j];
            }
        }
        let out = Tensor::new(xs, out)?;
        check_finite("batch_norm", &out)?;
        let rg = self.rg(ix) || self.rg(ig) || self.rg(ib);
        let stats = train.then(|| BatchStats { mean, var });
        let v = self.push(out, Op::BatchNorm { x: ix, gamma: ig, beta: ib, xhat, inv_std, train }, rg);
        Ok((v, stats))
    }

    /// Shift channel groups along time in a `[N, T, H, W, C]` tensor.
    pub fn temporal_shift(&mut self, a: Var, cfg: ShiftConfig) -> Result<Var> {
        let ia = self.idx(a)?;
        let v = &self.nodes[ia].value;
        if v.rank() != 5 {
            return Err(Error::shape("temporal_shift", format!("expected rank 5, got {:?}", v.shape())));
        }
        if v.shape()[1] == 0 {
            return Err(Error::shape("temporal_shift", "T = 0"));
        }
        let out = shift_time(v, cfg, false);
        let rg = self.rg(ia);
        Ok(self.push(out, Op::TemporalShift { a: ia, cfg }, rg))
    }

    /// Row lookup `table[ids]` for a `[V, D]` table.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let it = self.idx(table)?;
        let tv = &self.nodes[it].value;
        if tv.rank() != 2 {
            return Err(Error::shape("gather_rows", format!("table must be rank 2, got {:?}", tv.shape())));
        }
        let (vocab, d) = (tv.shape()[0], tv.shape()[1]);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(Error::shape("gather_rows", format!("row {id} >= {vocab}")));
            }
            out.extend_from_slice(tv.row(id));
        }
        let out = Tensor::new([ids.len(), d], out)?;
        let rg = self.rg(it);
        Ok(self.push(out, Op::GatherRows { table: it, ids: ids.to_vec() }, rg))
    }

    /// String-dispatched op entry point.
    pub fn apply(&mut self, name: &str, inputs: &[Var], attrs: &OpAttrs) -> Result<Var> {
        let arity = |n: usize| -> Result<()> {
            if inputs.len() == n {
                Ok(())
            } else {
                Err(Error::invalid(format!("op `{name}` takes {n} inputs, got {}", inputs.len())))
            }
        };
        let need = |v: Option<usize>, what: &str| v.ok_or_else(|| Error::invalid(format!("op `{name}` needs `{what}`")));
        match name {
            "add" => {
                arity(2)?;
                self.add(inputs[0], inputs[1])
            }
            "sub" => {
                arity(2)?;
                self.sub(inputs[0], inputs[1])
            }
            "mul" => {
                arity(2)?;
                self.mul(inputs[0], inputs[1])
            }
            "scale" => {
                arity(1)?;
                let c = attrs.scalar.ok_or_else(|| Error::invalid("scale needs `scalar`"))?;
                self.scale(inputs[0], F::from_f64_lossy(c))
            }
            "matmul" => {
                arity(2)?;
                self.matmul(inputs[0], inputs[1])
            }
            "relu" => {
                arity(1)?;
                self.relu(inputs[0])
            }
            "exp" => {
                arity(1)?;
                self.exp(inputs[0])
            }
            "log" => {
                arity(1)?;
                self.log(inputs[0])
            }
            "abs" => {
                arity(1)?;
                self.abs(inputs[0])
            }
            "softplus" => {
                arity(1)?;
                self.softplus(inputs[0])
            }
            "sum" => {
                arity(1)?;
                match attrs.axis {
                    Some(ax) => self.sum_axis(inputs[0], ax),
                    None => self.sum(inputs[0]),
                }
            }
            "mean" => {
                arity(1)?;
                match attrs.axis {
                    Some(ax) => self.mean_axis(inputs[0], ax),
                    None => self.mean(inputs[0]),
                }
            }
            "max" => {
                arity(1)?;
                self.max_axis(inputs[0], need(attrs.axis, "axis")?)
            }
            "logsumexp" => {
                arity(1)?;
                let mask = match &attrs.mask {
                    Some(m) => m.clone(),
                    None => vec![true; self.value(inputs[0]).numel()],
                };
                self.masked_logsumexp(inputs[0], &mask)
            }
            "reshape" => {
                arity(1)?;
                let shape = attrs.shape.clone().ok_or_else(|| Error::invalid("reshape needs `shape`"))?;
                self.reshape(inputs[0], &shape)
            }
            "transpose" => {
                arity(1)?;
                let perm = match &attrs.axes {
                    Some(p) => p.clone(),
                    None => (0..self.value(inputs[0]).rank()).rev().collect(),
                };
                self.transpose(inputs[0], &perm)
            }
            "concat" => self.concat(inputs, need(attrs.axis, "axis")?),
            "slice" => {
                arity(1)?;
                self.slice(
                    inputs[0],
                    need(attrs.axis, "axis")?,
                    need(attrs.start, "start")?,
                    need(attrs.len, "len")?,
                )
            }
            "l2_normalize" => {
                arity(1)?;
                self.l2_normalize(inputs[0])
            }
            "conv2d" | "conv3d" => {
                if inputs.len() != 2 && inputs.len() != 3 {
                    return Err(Error::invalid(format!("{name} takes 2 or 3 inputs")));
                }
                let strides = attrs.strides.unwrap_or((1, 1));
                let sp = attrs.spatial_padding.unwrap_or(Padding::Zero);
                let bias = inputs.get(2).copied();
                if name == "conv2d" {
                    self.conv2d(inputs[0], inputs[1], bias, strides, sp)
                } else {
                    let tp = attrs.temporal_padding.unwrap_or(Padding::Zero);
                    self.conv3d(inputs[0], inputs[1], bias, strides, tp, sp)
                }
            }
            "pool" => {
                arity(1)?;
                let axes = attrs.axes.clone().ok_or_else(|| Error::invalid("pool needs `axes`"))?;
                let mut sorted = axes;
                sorted.sort_unstable();
                let mut v = inputs[0];
                for &ax in sorted.iter().rev() {
                    v = self.mean_axis(v, ax)?;
                }
                Ok(v)
            }
            "batch_norm" => {
                arity(3)?;
                let eps = F::from_f64_lossy(attrs.eps.unwrap_or(1e-5));
                Ok(self.batch_norm(inputs[0], inputs[1], inputs[2], BnMode::Train { eps })?.0)
            }
            "temporal_shift" => {
                arity(1)?;
                self.temporal_shift(inputs[0], attrs.shift.unwrap_or_default())
            }
            "gather_rows" => {
                arity(1)?;
                let ids = attrs.ids.clone().ok_or_else(|| Error::invalid("gather_rows needs `ids`"))?;
                self.gather_rows(inputs[0], &ids)
            }
            other => Err(Error::UnknownOp(other.to_string())),
        }
    }

    /// Gradients of the scalar `loss` with respect to every registered trainable parameter.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        if loss.tape != self.id || loss.idx >= self.nodes.len() {
            return Err(Error::LossNotOnTape);
        }
        let lv = &self.nodes[loss.idx].value;
        if lv.numel() != 1 || lv.rank() > 1 {
            return Err(Error::LossNotScalar(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<F>>> = (0..=loss.idx).map(|_| None).collect();
        grads[loss.idx] = Some(Tensor::ones(lv.shape().to_vec()));
        let mut out = BTreeMap::new();

        for i in (0..=loss.idx).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Param(name) = &node.op {
                out.insert(name.clone(), g);
                continue;
            }
            self.backward_node(node, &g, &mut grads)?;
        }

        for (name, v) in &self.params {
            let node = &self.nodes[v.idx];
            if matches!(node.op, Op::Param(_)) && !out.contains_key(name) {
                out.insert(name.clone(), Tensor::zeros(node.value.shape().to_vec()));
            }
        }
        for g in out.values() {
            check_finite("backward", g)?;
        }
        Ok(Gradients { map: out })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<F>>], i: usize, g: Tensor<F>) {
        if !self.nodes[i].requires_grad {
            return;
        }
        match &mut grads[i] {
            Some(acc) => {
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += *b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn accumulate_broadcast(&self, grads: &mut [Option<Tensor<F>>], ib: usize, g: &[F]) {
        if !self.nodes[ib].requires_grad {
            return;
        }
        let bshape = self.nodes[ib].value.shape().to_vec();
        let block = self.nodes[ib].value.numel();
        let mut red = vec![F::zero(); block];
        if block > 0 {
            for (k, &v) in g.iter().enumerate() {
                red[k % block] += v;
            }
        }
        self.accumulate(grads, ib, Tensor::new(bshape, red).expect("block shape"));
    }

    fn backward_node(&self, node: &Node<F>, g: &Tensor<F>, grads: &mut [Option<Tensor<F>>]) -> Result<()> {
        let gd = g.data();
        let like = |i: usize, data: Vec<F>| Tensor::new(self.nodes[i].value.shape().to_vec(), data).expect("grad shape");
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Add { a, b } => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate_broadcast(grads, *b, gd);
            }
            Op::Sub { a, b } => {
                self.accumulate(grads, *a, g.clone());
                let neg: Vec<F> = gd.iter().map(|&v| -v).collect();
                self.accumulate_broadcast(grads, *b, &neg);
            }
            Op::Mul { a, b } => {
                let av = self.nodes[*a].value.data();
                let bv = self.nodes[*b].value.data();
                let block = bv.len();
                if self.rg(*a) {
                    let da = gd.iter().enumerate().map(|(k, &v)| v * bv[k % block]).collect();
                    self.accumulate(grads, *a, like(*a, da));
                }
                if self.rg(*b) {
                    let db: Vec<F> = gd.iter().zip(av).map(|(&v, &x)| v * x).collect();
                    self.accumulate_broadcast(grads, *b, &db);
                }
            }
            Op::Scale { a, c } => {
                self.accumulate(grads, *a, g.map(|v| v * *c));
            }
            Op::AddScalar { a } => self.accumulate(grads, *a, g.clone()),
            Op::MatMul { a, b, m, k, n, trans_b } => {
                let (m, k, n) = (*m, *k, *n);
                let av = self.nodes[*a].value.data();
                let bv = self.nodes[*b].value.data();
                if self.rg(*a) {
                    // dA = dY @ B^T  (or dY @ B when B was transposed)
                    let mut da = vec![F::zero(); m * k];
                    let (rs, cs) = if *trans_b { (k as isize, 1) } else { (1, n as isize) };
                    F::gemm(m, n, k, gd, n as isize, 1, bv, rs, cs, F::zero(), &mut da);
                    self.accumulate(grads, *a, like(*a, da));
                }
                if self.rg(*b) {
                    let db = if *trans_b {
                        // dB[n,k] = dY^T @ A
                        let mut db = vec![F::zero(); n * k];
                        F::gemm(n, m, k, gd, 1, n as isize, av, k as isize, 1, F::zero(), &mut db);
                        db
                    } else {
                        // dB[k,n] = A^T @ dY
                        let mut db = vec![F::zero(); k * n];
                        F::gemm(k, m, n, av, 1, k as isize, gd, n as isize, 1, F::zero(), &mut db);
                        db
                    };
                    self.accumulate(grads, *b, like(*b, db));
                }
            }
            Op::Relu { a } => {
                let x = self.nodes[*a].value.data();
                let d = gd.iter().zip(x).map(|(&v, &x)| if x > F::zero() { v } else { F::zero() }).collect();
                self.accumulate(grads, *a, like(*a, d));
            }
            Op::Exp { a } => {
                let y = node.value.data();
                let d = gd.iter().zip(y).map(|(&v, &y)| v * y).collect();
                self.accumulate(grads, *a, like(*a, d));
            }
            Op::Log { a } => {
                let x = self.nodes[*a].value.data();
                let d = gd.iter().zip(x).map(|(&v, &x)| v / x).collect();
                self.accumulate(grads, *a, like(*a, d));
            }
            Op::Abs { a } => {
                let x = self.nodes[*a].value.data();
                let d = gd.iter().zip(x).map(|(&v, &x)| v * sign(x)).collect();
                self.accumulate(grads, *a, like(*a, d));
            }
            Op::Softplus { a } => {
                let x = self.nodes[*a].value.data();
                let d = gd.iter().zip(x).map(|(&v, &x)| v * sigmoid(x)).collect();
                self.accumulate(grads, *a, like(*a, d));
            }
            Op::SumAll { a } => {
                let n = self.nodes[*a].value.numel();
                self.accumulate(grads, *a, like(*a, vec![gd[0]; n]));
            }
            Op::MeanAll { a } => {
                let n = self.nodes[*a].value.numel();
                let v = gd[0] / F::from_usize(n).unwrap();
                self.accumulate(grads, *a, like(*a, vec![v; n]));
            }
            Op::SumAxis { a, axis } => {
                let (outer, ext, inner) = axis_split(self.nodes[*a].value.shape(), *axis);
                let mut d = vec![F::zero(); outer * ext * inner];
                for o in 0..outer {
                    for e in 0..ext {
                        let base = (o * ext + e) * inner;
                        d[base..base + inner].copy_from_slice(&gd[o * inner..(o + 1) * inner]);
                    }
                }
                self.accumulate(grads, *a, like(*a, d));
            }
            Op::MaxAxis { a, axis, arg } => {
                let (outer, ext, inner) = axis_split(self.nodes[*a].value.shape(), *axis);
                let mut d = vec![F::zero(); outer * ext * inner];
                for o in 0..outer {
                    for i in 0..inner {
                        let e = arg[o * inner + i];
                        d[(o * ext + e) * inner + i] = gd[o * inner + i];
                    }
                }
                self.accumulate(grads, *a, like(*a, d));
            }
            Op::Reshape { a } => self.accumulate(grads, *a, like(*a, gd.to_vec())),
            Op::Permute { a, perm } => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                self.accumulate(grads, *a, g.permute(&inv)?);
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = axis_split(node.value.shape(), *axis);
                let mut offset = 0;
                for &p in parts {
                    let ext = self.nodes[p].value.shape()[*axis];
                    if self.rg(p) {
                        let mut d = Vec::with_capacity(outer * ext * inner);
                        for o in 0..outer {
                            let b = (o * total + offset) * inner;
                            d.extend_from_slice(&gd[b..b + ext * inner]);
                        }
                        self.accumulate(grads, p, like(p, d));
                    }
                    offset += ext;
                }
            }
            Op::Slice { a, axis, start } => {
                let (outer, ext, inner) = axis_split(self.nodes[*a].value.shape(), *axis);
                let len = node.value.shape()[*axis];
                let mut d = vec![F::zero(); outer * ext * inner];
                for o in 0..outer {
                    let b = (o * ext + start) * inner;
                    d[b..b + len * inner].copy_from_slice(&gd[o * len * inner..(o + 1) * len * inner]);
                }
                self.accumulate(grads, *a, like(*a, d));
            }
            Op::L2Normalize { a, norms } => {
                let y = node.value.data();
                let dim = y.len() / norms.len().max(1);
                let mut d = vec![F::zero(); y.len()];
                for (r, &n) in norms.iter().enumerate() {
                    let yr = &y[r * dim..(r + 1) * dim];
                    let gr = &gd[r * dim..(r + 1) * dim];
                    let dot: F = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for j in 0..dim {
                        d[r * dim + j] = (gr[j] - yr[j] * dot) / n;
                    }
                }
                self.accumulate(grads, *a, like(*a, d));
            }
            Op::MaskedLogSumExp { a, probs } => {
                let rows = gd.len();
                let k = probs.len() / rows.max(1);
                let d = probs.iter().enumerate().map(|(idx, &p)| p * gd[idx / k]).collect();
                self.accumulate(grads, *a, like(*a, d));
            }
            Op::Conv { x, w, b, geom, cols } => {
                if self.rg(*w) {
                    let dw = conv::conv_grad_weight(geom, cols, gd);
                    self.accumulate(grads, *w, like(*w, dw));
                }
                if let Some(b) = b {
                    if self.rg(*b) {
                        let c = geom.cout;
                        let mut db = vec![F::zero(); c];
                        for r in 0..geom.rows() {
                            for j in 0..c {
                                db[j] += gd[r * c + j];
                            }
                        }
                        self.accumulate(grads, *b, like(*b, db));
                    }
                }
                if self.rg(*x) {
                    let dx = conv::conv_grad_input(geom, self.nodes[*w].value.data(), gd);
                    self.accumulate(grads, *x, like(*x, dx));
                }
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, train } => {
                let c = inv_std.len();
                let rows = if c == 0 { 0 } else { gd.len() / c };
                let gam = self.nodes[*gamma].value.data();
                let mut dgamma = vec![F::zero(); c];
                let mut dbeta = vec![F::zero(); c];
                for r in 0..rows {
                    for j in 0..c {
                        dgamma[j] += gd[r * c + j] * xhat[r * c + j];
                        dbeta[j] += gd[r * c + j];
                    }
                }
                if self.rg(*x) {
                    let mut dx = vec![F::zero(); rows * c];
                    if *train {
                        let nf = F::from_usize(rows).unwrap();
                        for r in 0..rows {
                            for j in 0..c {
                                let dxhat = gd[r * c + j] * gam[j];
                                let term = nf * dxhat - gam[j] * dbeta[j] - xhat[r * c + j] * gam[j] * dgamma[j];
                                dx[r * c + j] = inv_std[j] / nf * term;
                            }
                        }
                    } else {
                        for r in 0..rows {
                            for j in 0..c {
                                dx[r * c + j] = gd[r * c + j] * gam[j] * inv_std[j];
                            }
                        }
                    }
                    self.accumulate(grads, *x, like(*x, dx));
                }
                self.accumulate(grads, *gamma, like(*gamma, dgamma));
                self.accumulate(grads, *beta, like(*beta, dbeta));
            }
            Op::TemporalShift { a, cfg } => {
                self.accumulate(grads, *a, shift_time(g, *cfg, true));
            }
            Op::GatherRows { table, ids } => {
                let tv = &self.nodes[*table].value;
                let d = tv.shape()[1];
                let mut dt = vec![F::zero(); tv.numel()];
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        dt[id * d + j] += gd[r * d + j];
                    }
                }
                self.accumulate(grads, *table, like(*table, dt));
            }
        }
        Ok(())
    }
}

fn sign<F: Scalar>(x: F) -> F {
    if x > F::zero() {
        F::one()
    } else if x < F::zero() {
        -F::one()
    } else {
        F::zero()
    }
}

pub(crate) fn sigmoid<F: Scalar>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

pub(crate) fn softplus<F: Scalar>(x: F) -> F {
    x.max(F::zero()) + (-x.abs()).exp().ln_1p()
}

/// Forward shift (or its adjoint when `adjoint` is set) of a `[N,T,H,W,C]` tensor.
fn shift_time<F: Scalar>(v: &Tensor<F>, cfg: ShiftConfig, adjoint: bool) -> Tensor<F> {
    let s = v.shape();
    let (n, t, c) = (s[0], s[1], s[4]);
    let hw = s[2] * s[3];
    let (fwd, bwd) = cfg.groups(c);
    if fwd == 0 && bwd == 0 {
        return v.clone();
    }
    let src = v.data();
    let mut out = vec![F::zero(); src.len()];
    for b in 0..n {
        for ti in 0..t {
            // Forward group: out[t] = in[t-1]; backward group: out[t] = in[t+1].
            let (from_fwd, from_bwd) = if adjoint {
                (ti.checked_add(1).filter(|&x| x < t), ti.checked_sub(1))
            } else {
                (ti.checked_sub(1), ti.checked_add(1).filter(|&x| x < t))
            };
            for p in 0..hw {
                let dst = ((b * t + ti) * hw + p) * c;
                let at = |tt: usize| ((b * t + tt) * hw + p) * c;
                if let Some(tf) = from_fwd {
                    out[dst..dst + fwd].copy_from_slice(&src[at(tf)..at(tf) + fwd]);
                }
                if let Some(tb) = from_bwd {
                    out[dst + fwd..dst + fwd + bwd].copy_from_slice(&src[at(tb) + fwd..at(tb) + fwd + bwd]);
                }
                out[dst + fwd + bwd..dst + c].copy_from_slice(&src[dst + fwd + bwd..dst + c]);
            }
        }
    }
    Tensor::new(s.to_vec(), out).expect("same shape")
}
