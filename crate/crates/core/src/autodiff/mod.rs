//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! Every op appends a node holding its forward value; [`Tape::backward`]
//! walks the nodes in reverse and accumulates vector-Jacobian products.
//! Parents always precede children, so a single reverse sweep suffices.
//!
//! Broadcasting is deliberately narrow: [`Tape::add_broadcast`] adds a tensor
//! whose shape equals the trailing dimensions of the other operand,
//! [`Tape::concat_broadcast`] appends vectors to every row, and
//! [`Tape::mul_scalar`] scales by a one-element tensor. Everything else
//! requires identical shapes.

pub mod kernels;

use crate::error::{Error, Result};
use crate::tensor::{gemm, MatRef, Scalar, Tensor};

use kernels::AttnDims;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A user-defined op whose backward is supplied from outside the tape.
pub trait CustomOp<T: Scalar> {
    fn name(&self) -> &'static str;

    /// Gradient contribution for each parent, in the order the parents were
    /// registered. `None` means "no gradient flows to this parent".
    fn backward(&mut self, cotangent: &Tensor<T>) -> Result<Vec<Option<Tensor<T>>>>;
}

enum Op<T: Scalar> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddBroadcast(Var, Var),
    MulScalar(Var, Var),
    MatMul(Var, Var),
    Gelu(Var),
    Tanh(Var),
    Exp(Var),
    Sum(Var),
    Reshape(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        means: Vec<T>,
        rstds: Vec<T>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    ConcatBroadcast {
        x: Var,
        vecs: Vec<Var>,
    },
    Attention {
        qkv: Var,
        dims: AttnDims,
        probs: Vec<T>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<T>,
    },
    Round,
    Custom {
        parents: Vec<Var>,
        op: Box<dyn CustomOp<T>>,
    },
}

impl<T: Scalar> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddBroadcast(..) => "add_broadcast",
            Op::MulScalar(..) => "mul_scalar",
            Op::MatMul(..) => "matmul",
            Op::Gelu(..) => "gelu",
            Op::Tanh(..) => "tanh",
            Op::Exp(..) => "exp",
            Op::Sum(..) => "sum",
            Op::Reshape(..) => "reshape",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Embedding { .. } => "embedding",
            Op::ConcatBroadcast { .. } => "concat_broadcast",
            Op::Attention { .. } => "causal_attention",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Round => "round",
            Op::Custom { op, .. } => op.name(),
        }
    }
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Recorded computation graph.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn shape_err(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) -> Result<()> {
    match slot {
        Some(existing) => existing.add_assign(&g),
        None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Input or parameter. Gradients for leaves are retained by `backward`.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).mul(self.value(b))?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    /// Multiply by a constant.
    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let v = self.value(a).scale(c);
        self.push(v, Op::Scale(a, c))
    }

    /// `x + b` where `b.shape` equals the trailing dimensions of `x.shape`.
    pub fn add_broadcast(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xs, bs) = (self.shape(x), self.shape(b));
        if bs.len() > xs.len() || xs[xs.len() - bs.len()..] != *bs {
            return Err(shape_err("add_broadcast", xs, bs));
        }
        let bv = self.value(b).data();
        let mut out = self.value(x).clone();
        for chunk in out.data_mut().chunks_exact_mut(bv.len().max(1)) {
            for (o, &bb) in chunk.iter_mut().zip(bv) {
                *o = *o + bb;
            }
        }
        Ok(self.push(out, Op::AddBroadcast(x, b)))
    }

    /// `s * x` where `s` holds exactly one element.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(shape_err("mul_scalar", self.shape(x), self.shape(s)));
        }
        let sv = self.value(s).item();
        let v = self.value(x).scale(sv);
        Ok(self.push(v, Op::MulScalar(x, s)))
    }

    /// `x[..., k] · w[k, n] -> [..., n]`.
    pub fn matmul(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        if ws.len() != 2 || xs.is_empty() || *xs.last().unwrap() != ws[0] {
            return Err(shape_err("matmul", xs, ws));
        }
        let (k, n) = (ws[0], ws[1]);
        let m = self.value(x).len() / k.max(1);
        let mut out_shape = xs.to_vec();
        *out_shape.last_mut().unwrap() = n;
        let mut out = vec![T::zero(); m * n];
        gemm(
            MatRef::new(self.value(x).data(), m, k),
            MatRef::new(self.value(w).data(), k, n),
            T::zero(),
            &mut out,
        );
        let v = Tensor::new(&out_shape, out)?;
        Ok(self.push(v, Op::MatMul(x, w)))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(kernels::gelu);
        self.push(v, Op::Gelu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| a.tanh());
        self.push(v, Op::Tanh(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| a.exp());
        self.push(v, Op::Exp(x))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        self.push(v, Op::Sum(x))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape)?;
        Ok(self.push(v, Op::Reshape(x)))
    }

    /// Rounds to the nearest integer. Has no derivative: `backward` fails if
    /// a gradient reaches this node.
    pub fn round(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| a.round());
        self.push(v, Op::Round)
    }

    /// Layer normalisation over the last axis.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let width = self.value(x).last_dim();
        for p in [gamma, beta] {
            if self.shape(p) != [width] {
                return Err(shape_err("layer_norm", self.shape(x), self.shape(p)));
            }
        }
        let (y, means, rstds) = kernels::layer_norm_forward(
            self.value(x).data(),
            self.value(gamma).data(),
            self.value(beta).data(),
            width,
            eps,
        );
        let v = Tensor::new(self.shape(x), y)?;
        Ok(self.push(
            v,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                means,
                rstds,
            },
        ))
    }

    /// Row lookup: `table[V, D]`, `ids` laid out as `prefix` -> `[..prefix, D]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize], prefix: &[usize]) -> Result<Var> {
        let ts = self.shape(table);
        if ts.len() != 2 || prefix.iter().product::<usize>() != ids.len() {
            return Err(shape_err("embedding", ts, prefix));
        }
        let (rows, width) = (ts[0], ts[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::contract(format!(
                "embedding index {bad} out of range for table with {rows} rows"
            )));
        }
        let tv = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * width);
        for &i in ids {
            out.extend_from_slice(&tv[i * width..(i + 1) * width]);
        }
        let mut shape = prefix.to_vec();
        shape.push(width);
        let v = Tensor::new(&shape, out)?;
        Ok(self.push(
            v,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Appends each vector in `vecs` to every row of `x[..., D]`.
    pub fn concat_broadcast(&mut self, x: Var, vecs: &[Var]) -> Result<Var> {
        for &v in vecs {
            if self.shape(v).len() != 1 {
                return Err(shape_err("concat_broadcast", self.shape(x), self.shape(v)));
            }
        }
        let xv = self.value(x);
        let d = xv.last_dim();
        let extra: Vec<T> = vecs
            .iter()
            .flat_map(|&v| self.value(v).data().iter().copied())
            .collect();
        let width = d + extra.len();
        let rows = xv.len() / d.max(1);
        let mut out = Vec::with_capacity(rows * width);
        for row in xv.data().chunks_exact(d) {
            out.extend_from_slice(row);
            out.extend_from_slice(&extra);
        }
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = width;
        let v = Tensor::new(&shape, out)?;
        Ok(self.push(
            v,
            Op::ConcatBroadcast {
                x,
                vecs: vecs.to_vec(),
            },
        ))
    }

    /// Multi-head causal self-attention on packed `qkv[B, T, 3D]` -> `[B, T, D]`.
    pub fn causal_attention(&mut self, qkv: Var, heads: usize) -> Result<Var> {
        let s = self.shape(qkv);
        if s.len() != 3 || !s[2].is_multiple_of(3) || heads == 0 || !(s[2] / 3).is_multiple_of(heads) {
            return Err(shape_err("causal_attention", s, &[heads]));
        }
        let dims = AttnDims {
            batch: s[0],
            seq: s[1],
            d_model: s[2] / 3,
            heads,
        };
        let (out, probs) = kernels::attention_forward(self.value(qkv).data(), dims);
        let v = Tensor::new(&[dims.batch, dims.seq, dims.d_model], out)?;
        Ok(self.push(v, Op::Attention { qkv, dims, probs }))
    }

    /// Mean cross-entropy over rows of `logits[..., V]` that have a target.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let lv = self.value(logits);
        let vocab = lv.last_dim();
        if lv.len() / vocab.max(1) != targets.len() {
            return Err(shape_err("cross_entropy", lv.shape(), &[targets.len()]));
        }
        if let Some(bad) = targets.iter().flatten().find(|&&t| t >= vocab) {
            return Err(Error::contract(format!(
                "target {bad} out of range for vocabulary of {vocab}"
            )));
        }
        let (loss, probs) = kernels::cross_entropy_forward(lv.data(), vocab, targets);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    /// Registers an op computed outside the tape.
    pub fn custom(
        &mut self,
        parents: &[Var],
        value: Tensor<T>,
        op: Box<dyn CustomOp<T>>,
    ) -> Var {
        self.push(
            value,
            Op::Custom {
                parents: parents.to_vec(),
                op,
            },
        )
    }

    /// Reverse sweep from `root` seeded with `seed` (same shape as `root`).
    ///
    /// Consumes custom-op state, so a tape can be differentiated once.
    pub fn backward(&mut self, root: Var, seed: Tensor<T>) -> Result<Gradients<T>> {
        if seed.shape() != self.shape(root) {
            return Err(Error::contract(format!(
                "cotangent shape {:?} does not match output shape {:?}",
                seed.shape(),
                self.shape(root)
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(seed);
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &mut rest[0];
            let name = node.op.name();
            let val = |v: Var| &before[v.0].value;
            let mut contribs: Vec<(Var, Tensor<T>)> = Vec::new();
            match &mut node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::Add(a, b) => {
                    contribs.push((*a, g.clone()));
                    contribs.push((*b, g));
                }
                Op::Sub(a, b) => {
                    contribs.push((*b, g.scale(-T::one())));
                    contribs.push((*a, g));
                }
                Op::Mul(a, b) => {
                    contribs.push((*a, g.mul(val(*b))?));
                    contribs.push((*b, g.mul(val(*a))?));
                }
                Op::Scale(a, c) => contribs.push((*a, g.scale(*c))),
                Op::AddBroadcast(x, b) => {
                    let bl = val(*b).len().max(1);
                    let mut db = vec![T::zero(); bl];
                    for chunk in g.data().chunks_exact(bl) {
                        for (d, &gv) in db.iter_mut().zip(chunk) {
                            *d = *d + gv;
                        }
                    }
                    contribs.push((*b, Tensor::new(val(*b).shape(), db)?));
                    contribs.push((*x, g));
                }
                Op::MulScalar(x, s) => {
                    let ds = g.dot(val(*x))?;
                    contribs.push((*x, g.scale(val(*s).item())));
                    contribs.push((*s, Tensor::new(val(*s).shape(), vec![ds])?));
                }
                Op::MatMul(x, w) => {
                    let (xv, wv) = (val(*x), val(*w));
                    let (k, n) = (wv.shape()[0], wv.shape()[1]);
                    let m = xv.len() / k.max(1);
                    let mut dx = vec![T::zero(); m * k];
                    gemm(
                        MatRef::new(g.data(), m, n),
                        MatRef::t(wv.data(), k, n),
                        T::zero(),
                        &mut dx,
                    );
                    let mut dw = vec![T::zero(); k * n];
                    gemm(
                        MatRef::t(xv.data(), m, k),
                        MatRef::new(g.data(), m, n),
                        T::zero(),
                        &mut dw,
                    );
                    contribs.push((*x, Tensor::new(xv.shape(), dx)?));
                    contribs.push((*w, Tensor::new(wv.shape(), dw)?));
                }
                Op::Gelu(x) => {
                    let d = g.zip_map(val(*x), "gelu", |gv, xv| gv * kernels::gelu_grad(xv))?;
                    contribs.push((*x, d));
                }
                Op::Tanh(x) => {
                    let d = g.zip_map(&node.value, "tanh", |gv, y| gv * (T::one() - y * y))?;
                    contribs.push((*x, d));
                }
                Op::Exp(x) => contribs.push((*x, g.mul(&node.value)?)),
                Op::Sum(x) => contribs.push((*x, Tensor::full(val(*x).shape(), g.item()))),
                Op::Reshape(x) => contribs.push((*x, g.reshape(val(*x).shape())?)),
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    means,
                    rstds,
                } => {
                    let width = val(*x).last_dim();
                    let (dx, dg, db) = kernels::layer_norm_backward(
                        g.data(),
                        val(*x).data(),
                        val(*gamma).data(),
                        means,
                        rstds,
                        width,
                    );
                    contribs.push((*x, Tensor::new(val(*x).shape(), dx)?));
                    contribs.push((*gamma, Tensor::vector(dg)));
                    contribs.push((*beta, Tensor::vector(db)));
                }
                Op::Embedding { table, ids } => {
                    let tv = val(*table);
                    let width = tv.shape()[1];
                    let mut dt = vec![T::zero(); tv.len()];
                    for (&id, row) in ids.iter().zip(g.data().chunks_exact(width)) {
                        for (d, &gv) in dt[id * width..(id + 1) * width].iter_mut().zip(row) {
                            *d = *d + gv;
                        }
                    }
                    contribs.push((*table, Tensor::new(tv.shape(), dt)?));
                }
                Op::ConcatBroadcast { x, vecs } => {
                    let xv = val(*x);
                    let d = xv.last_dim();
                    let width = g.last_dim();
                    let mut dx = Vec::with_capacity(xv.len());
                    let mut dextra = vec![T::zero(); width - d];
                    for row in g.data().chunks_exact(width) {
                        dx.extend_from_slice(&row[..d]);
                        for (e, &gv) in dextra.iter_mut().zip(&row[d..]) {
                            *e = *e + gv;
                        }
                    }
                    contribs.push((*x, Tensor::new(xv.shape(), dx)?));
                    let mut offset = 0;
                    for &v in vecs.iter() {
                        let n = val(v).len();
                        contribs.push((v, Tensor::vector(dextra[offset..offset + n].to_vec())));
                        offset += n;
                    }
                }
                Op::Attention { qkv, dims, probs } => {
                    let d = kernels::attention_backward(g.data(), val(*qkv).data(), probs, *dims);
                    contribs.push((*qkv, Tensor::new(val(*qkv).shape(), d)?));
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                } => {
                    let lv = val(*logits);
                    let d = kernels::cross_entropy_backward(g.item(), probs, lv.last_dim(), targets);
                    contribs.push((*logits, Tensor::new(lv.shape(), d)?));
                }
                Op::Round => return Err(Error::UnsupportedOp("round")),
                Op::Custom { parents, op } => {
                    let parts = op.backward(&g)?;
                    if parts.len() != parents.len() {
                        return Err(Error::contract(format!(
                            "custom op `{name}` returned {} gradients for {} parents",
                            parts.len(),
                            parents.len()
                        )));
                    }
                    for (&p, part) in parents.iter().zip(parts) {
                        if let Some(part) = part {
                            if part.shape() != val(p).shape() {
                                return Err(shape_err(name, part.shape(), val(p).shape()));
                            }
                            contribs.push((p, part));
                        }
                    }
                }
            }
            for (p, c) in contribs {
                if !c.is_finite() {
                    return Err(Error::NonFiniteGradient { op: name });
                }
                accumulate(&mut grads[p.0], c)?;
            }
        }
        Ok(Gradients { grads })
    }
}

/// Vector-Jacobian product of `f` at `inputs` with the given cotangent.
///
/// Inputs that `f` does not depend on receive zero gradients.
pub fn vjp<T, F>(f: F, inputs: &[Tensor<T>], cotangent: &Tensor<T>) -> Result<Vec<Tensor<T>>>
where
    T: Scalar,
    F: FnOnce(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let mut grads = tape.backward(out, cotangent.clone())?;
    Ok(vars
        .iter()
        .zip(inputs)
        .map(|(&v, x)| grads.take(v).unwrap_or_else(|| Tensor::zeros(x.shape())))
        .collect())
}

fn eval_scalar<T, F>(f: &F, inputs: &[Tensor<T>]) -> Result<f64>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
    let out = f(&mut tape, &vars)?;
    Ok(tape.value(out).item().as_f64())
}

/// Compares the analytic gradient of a scalar-valued `f` with central
/// differences and returns the largest relative error
/// `|analytic - fd| / (|fd| + 1e-12)` over every input coordinate.
pub fn grad_check<T, F>(f: F, inputs: &[Tensor<T>], epsilon: f64) -> Result<f64>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    if epsilon <= 0.0 || !epsilon.is_finite() {
        return Err(Error::contract(format!("epsilon must be positive, got {epsilon}")));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
    let out = f(&mut tape, &vars)?;
    if tape.value(out).len() != 1 {
        return Err(Error::contract(format!(
            "grad_check needs a scalar-valued function, got shape {:?}",
            tape.shape(out)
        )));
    }
    let seed = Tensor::full(tape.shape(out), T::one());
    let mut grads = tape.backward(out, seed)?;
    let analytic: Vec<Tensor<T>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, x)| grads.take(v).unwrap_or_else(|| Tensor::zeros(x.shape())))
        .collect();

    let mut worst = 0.0f64;
    let mut probe = inputs.to_vec();
    for (i, grad) in analytic.iter().enumerate() {
        for j in 0..probe[i].len() {
            let orig = probe[i].data()[j];
            probe[i].data_mut()[j] = T::of(orig.as_f64() + epsilon);
            let plus = eval_scalar(&f, &probe)?;
            probe[i].data_mut()[j] = T::of(orig.as_f64() - epsilon);
            let minus = eval_scalar(&f, &probe)?;
            probe[i].data_mut()[j] = orig;
            let fd = (plus - minus) / (2.0 * epsilon);
            let rel = (grad.data()[j].as_f64() - fd).abs() / (fd.abs() + 1e-12);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}
