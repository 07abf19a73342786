//! Sandwich language model: discrete early blocks, a continuous ODE block,
//! discrete late blocks. The matched baseline keeps every block discrete.

pub mod checkpoint;

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::adjoint::{adjoint_backward, integrate_with_adjoint, AdjointHandle};
use crate::autodiff::{CustomOp, Tape, Var};
use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::field::{eval_on_tape, gaussian, BoundField, ControlSignal, ControlledVectorField, FieldVars};
use crate::params::ParamStore;
use crate::solvers::{grid, integrate, Method, SolverConfig, SolverResult};
use crate::tensor::{Scalar, Tensor};

const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arch {
    Baseline,
    Hybrid,
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Arch::Baseline => "baseline",
            Arch::Hybrid => "hybrid",
        })
    }
}

impl FromStr for Arch {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Arch::Baseline),
            "hybrid" => Ok(Arch::Hybrid),
            other => Err(Error::Config(format!("unknown arch `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub arch: Arch,
    /// Depth of the all-discrete baseline.
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    /// Half-open range `[start, end)` of baseline layers replaced by the ODE block.
    pub ode_replaces: (usize, usize),
    pub control_dim: usize,
    pub solver: SolverConfig,
}

impl ModelConfig {
    /// Laptop-scale default: 6 layers, d=64, 4 heads, layers 2-3 replaced.
    pub fn desk(vocab_size: usize) -> Self {
        ModelConfig {
            arch: Arch::Hybrid,
            n_layers: 6,
            d_model: 64,
            n_heads: 4,
            vocab_size,
            max_seq_len: 64,
            ode_replaces: (2, 4),
            control_dim: 1,
            solver: SolverConfig::euler(4),
        }
    }

    /// Reference configuration at d=256 with a GPT-2 sized vocabulary.
    pub fn full_scale() -> Self {
        ModelConfig {
            d_model: 256,
            vocab_size: 50257,
            max_seq_len: 256,
            ..Self::desk(50257)
        }
    }

    pub fn with_arch(mut self, arch: Arch) -> Self {
        self.arch = arch;
        self
    }

    pub fn field_hidden(&self) -> usize {
        4 * self.d_model
    }

    pub fn validate(&self) -> Result<()> {
        let (s, e) = self.ode_replaces;
        if !(s < e && e <= self.n_layers) {
            return Err(Error::contract(format!(
                "ode_replaces ({s}, {e}) must satisfy 0 <= start < end <= n_layers ({})",
                self.n_layers
            )));
        }
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::contract(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.vocab_size == 0 || self.max_seq_len == 0 || self.control_dim == 0 {
            return Err(Error::contract("vocab_size, max_seq_len and control_dim must be positive"));
        }
        self.solver.validate()
    }

    /// Indices of the discrete blocks that exist in this architecture.
    pub fn block_layers(&self) -> Vec<usize> {
        let (s, e) = self.ode_replaces;
        (0..self.n_layers)
            .filter(|&i| self.arch == Arch::Baseline || i < s || i >= e)
            .collect()
    }

    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::default();
        kv.set("arch", self.arch);
        kv.set("n_layers", self.n_layers);
        kv.set("d_model", self.d_model);
        kv.set("n_heads", self.n_heads);
        kv.set("vocab_size", self.vocab_size);
        kv.set("max_seq_len", self.max_seq_len);
        kv.set("ode_start", self.ode_replaces.0);
        kv.set("ode_end", self.ode_replaces.1);
        kv.set("control_dim", self.control_dim);
        kv.set("solver", self.solver.method);
        kv.set("n_steps", self.solver.n_steps);
        kv.set("rtol", self.solver.rtol);
        kv.set("atol", self.solver.atol);
        kv.set("max_steps", self.solver.max_steps);
        kv
    }

    /// Read model keys, falling back to `base` for anything absent.
    pub fn from_kv(kv: &KeyValues, base: &ModelConfig) -> Result<Self> {
        let solver = SolverConfig {
            method: kv.get_or("solver", base.solver.method.to_string())?.parse()?,
            n_steps: kv.get_or("n_steps", base.solver.n_steps)?,
            rtol: kv.get_or("rtol", base.solver.rtol)?,
            atol: kv.get_or("atol", base.solver.atol)?,
            max_steps: kv.get_or("max_steps", base.solver.max_steps)?,
            ..base.solver.clone()
        };
        let cfg = ModelConfig {
            arch: kv.get_or("arch", base.arch.to_string())?.parse()?,
            n_layers: kv.get_or("n_layers", base.n_layers)?,
            d_model: kv.get_or("d_model", base.d_model)?,
            n_heads: kv.get_or("n_heads", base.n_heads)?,
            vocab_size: kv.get_or("vocab_size", base.vocab_size)?,
            max_seq_len: kv.get_or("max_seq_len", base.max_seq_len)?,
            ode_replaces: (
                kv.get_or("ode_start", base.ode_replaces.0)?,
                kv.get_or("ode_end", base.ode_replaces.1)?,
            ),
            control_dim: kv.get_or("control_dim", base.control_dim)?,
            solver,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Embeddings,
    EarlyBlocks,
    /// Baseline blocks at the positions the ODE block occupies in the hybrid.
    MiddleBlocks,
    OdeBlock,
    LateBlocks,
    Head,
}

/// Block parameter suffixes and shapes for width `d`.
fn block_param_shapes(d: usize) -> [(&'static str, Vec<usize>); 12] {
    [
        ("ln1.g", vec![d]),
        ("ln1.b", vec![d]),
        ("attn.w_qkv", vec![d, 3 * d]),
        ("attn.b_qkv", vec![3 * d]),
        ("attn.w_out", vec![d, d]),
        ("attn.b_out", vec![d]),
        ("ln2.g", vec![d]),
        ("ln2.b", vec![d]),
        ("mlp.w_in", vec![d, 4 * d]),
        ("mlp.b_in", vec![4 * d]),
        ("mlp.w_out", vec![4 * d, d]),
        ("mlp.b_out", vec![d]),
    ]
}

pub const ODE_PARAMS: [&str; 5] = ["ode.w1", "ode.b1", "ode.w2", "ode.b2", "ode.alpha"];

/// Every parameter name and shape for `config`, in storage order.
pub fn param_shapes(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let d = config.d_model;
    let mut out = vec![
        ("tok_emb".to_string(), vec![config.vocab_size, d]),
        ("pos_emb".to_string(), vec![config.max_seq_len, d]),
    ];
    let layers = config.block_layers();
    let push_block = |i: usize, out: &mut Vec<(String, Vec<usize>)>| {
        for (suffix, shape) in block_param_shapes(d) {
            out.push((format!("block{i}.{suffix}"), shape));
        }
    };
    for &i in layers.iter().filter(|&&i| i < config.ode_replaces.0 || config.arch == Arch::Baseline) {
        push_block(i, &mut out);
    }
    if config.arch == Arch::Hybrid {
        let h = config.field_hidden();
        let inp = d + config.control_dim + 1;
        out.push((ODE_PARAMS[0].into(), vec![inp, h]));
        out.push((ODE_PARAMS[1].into(), vec![h]));
        out.push((ODE_PARAMS[2].into(), vec![h, d]));
        out.push((ODE_PARAMS[3].into(), vec![d]));
        out.push((ODE_PARAMS[4].into(), vec![]));
        for &i in layers.iter().filter(|&&i| i >= config.ode_replaces.1) {
            push_block(i, &mut out);
        }
    }
    out.push(("ln_f.g".into(), vec![d]));
    out.push(("ln_f.b".into(), vec![d]));
    out.push(("head.w".into(), vec![d, config.vocab_size]));
    out.push(("head.b".into(), vec![config.vocab_size]));
    out
}

/// Parameter count without allocating the model.
pub fn param_count(config: &ModelConfig) -> usize {
    param_shapes(config)
        .iter()
        .map(|(_, s)| s.iter().product::<usize>())
        .sum()
}

/// How gradients flow through the ODE block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradMode {
    /// Forward only; the ODE output is a constant on the tape.
    NoGrad,
    /// Constant-memory adjoint backward.
    Adjoint,
    /// Every solver stage recorded on the tape (fixed-step methods only).
    Unrolled,
}

/// Token ids laid out `[batch, seq]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenBatch {
    pub tokens: Vec<usize>,
    pub batch: usize,
    pub seq: usize,
}

impl TokenBatch {
    pub fn new(tokens: Vec<usize>, batch: usize, seq: usize) -> Result<Self> {
        if tokens.len() != batch * seq || seq == 0 || batch == 0 {
            return Err(Error::contract(format!(
                "{} tokens cannot form a {batch}x{seq} batch",
                tokens.len()
            )));
        }
        Ok(TokenBatch { tokens, batch, seq })
    }
}

/// Result of a recorded forward pass.
pub struct TapeForward<T> {
    pub logits: Var,
    /// Hidden state entering the ODE block (after the early blocks).
    pub ode_input: Var,
    pub ode: Option<SolverResult<T>>,
}

struct OdeBlockOp<T: Scalar> {
    handle: Option<AdjointHandle<T, BoundField<T>>>,
    template: BoundField<T>,
}

impl<T: Scalar> CustomOp<T> for OdeBlockOp<T> {
    fn name(&self) -> &'static str {
        "ode_block"
    }

    fn backward(&mut self, cotangent: &Tensor<T>) -> Result<Vec<Option<Tensor<T>>>> {
        let handle = self
            .handle
            .take()
            .ok_or_else(|| Error::contract("ode block backward called twice"))?;
        let grads = adjoint_backward(handle, cotangent)?;
        let [w1, b1, w2, b2, alpha] = self.template.unflatten(&grads.theta)?;
        Ok(vec![
            Some(grads.h0),
            Some(w1),
            Some(b1),
            Some(w2),
            Some(b2),
            Some(alpha),
            Some(Tensor::vector(grads.u)),
        ])
    }
}

/// Output of a training/evaluation loss pass.
#[derive(Debug, Clone)]
pub struct StepOutput<T> {
    pub loss: f64,
    /// `dL/du`; empty for the baseline.
    pub u_grad: Vec<T>,
    pub ode: Option<SolverResult<T>>,
    /// Nodes recorded on the tape for this pass.
    pub tape_len: usize,
}

#[derive(Debug, Clone)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
}

impl<T: Scalar> Model<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let resid_std = INIT_STD / (2.0 * config.n_layers as f64).sqrt();
        let field = (config.arch == Arch::Hybrid).then(|| {
            ControlledVectorField::<T>::new(
                config.d_model,
                config.control_dim,
                config.field_hidden(),
                &mut ChaCha8Rng::seed_from_u64(seed ^ 0x0de0_de0d),
            )
        });
        for (name, shape) in param_shapes(&config) {
            let value = if let Some(i) = ODE_PARAMS.iter().position(|p| *p == name) {
                let f = field.as_ref().expect("hybrid");
                f.param_tensors()[i].clone()
            } else if name.ends_with(".g") {
                Tensor::full(&shape, T::one())
            } else if shape.len() == 1 {
                Tensor::zeros(&shape)
            } else {
                let std = if name.ends_with("w_out") { resid_std } else { INIT_STD };
                gaussian(&mut rng, shape[0], shape[1], std)
            };
            params.insert(name, value)?;
        }
        Ok(Model { config, params })
    }

    pub fn is_hybrid(&self) -> bool {
        self.config.arch == Arch::Hybrid
    }

    pub fn group_of(&self, name: &str) -> ParamGroup {
        if name.starts_with("ode.") {
            return ParamGroup::OdeBlock;
        }
        if name.starts_with("tok_emb") || name.starts_with("pos_emb") {
            return ParamGroup::Embeddings;
        }
        if let Some(rest) = name.strip_prefix("block") {
            let layer: usize = rest
                .split('.')
                .next()
                .and_then(|s| s.parse().ok())
                .unwrap_or(usize::MAX);
            let (s, e) = self.config.ode_replaces;
            return if layer < s {
                ParamGroup::EarlyBlocks
            } else if layer < e {
                ParamGroup::MiddleBlocks
            } else {
                ParamGroup::LateBlocks
            };
        }
        ParamGroup::Head
    }

    pub fn set_group_trainable(&mut self, group: ParamGroup, trainable: bool) {
        let groups: Vec<ParamGroup> = self.params.iter().map(|p| self.group_of(&p.name)).collect();
        for (p, g) in self.params.iter_mut().zip(groups) {
            if g == group {
                p.trainable = trainable;
            }
        }
    }

    /// Freeze everything except the ODE block (including `alpha`).
    pub fn set_freeze_for_steering(&mut self) {
        self.params.set_trainable(|n| n.starts_with("ode."));
    }

    pub fn unfreeze_all(&mut self) {
        self.params.set_trainable(|_| true);
    }

    /// Elements of the ODE block weights, excluding `alpha`.
    pub fn ode_weight_count(&self) -> usize {
        ODE_PARAMS[..4]
            .iter()
            .filter_map(|n| self.params.value(n).ok())
            .map(Tensor::len)
            .sum()
    }

    pub fn alpha(&self) -> Option<f64> {
        self.params.value("ode.alpha").ok().map(|a| a.item().as_f64())
    }

    pub fn set_alpha(&mut self, alpha: f64) -> Result<()> {
        self.params.set_value("ode.alpha", Tensor::scalar(T::of(alpha)))
    }

    pub fn field(&self) -> Result<ControlledVectorField<T>> {
        let parts = ODE_PARAMS.map(|n| self.params.value(n).cloned());
        let [a, b, c, d, e] = parts;
        ControlledVectorField::from_tensors([a?, b?, c?, d?, e?], self.config.control_dim)
    }

    pub fn param_count(&self) -> usize {
        self.params.numel()
    }

    /// One leaf per parameter, in storage order.
    pub fn leaves(&self, tape: &mut Tape<T>) -> Vec<Var> {
        self.params.iter().map(|p| tape.leaf(p.value.clone())).collect()
    }

    fn var(&self, leaves: &[Var], name: &str) -> Result<Var> {
        self.params
            .position(name)
            .map(|i| leaves[i])
            .ok_or_else(|| Error::contract(format!("unknown parameter `{name}`")))
    }

    fn check_batch(&self, batch: &TokenBatch) -> Result<()> {
        if batch.seq > self.config.max_seq_len {
            return Err(Error::contract(format!(
                "sequence length {} exceeds max_seq_len {}",
                batch.seq, self.config.max_seq_len
            )));
        }
        if let Some(&t) = batch.tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::contract(format!(
                "token {t} outside vocabulary of {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    fn block(&self, tape: &mut Tape<T>, leaves: &[Var], layer: usize, x: Var) -> Result<Var> {
        let p = |s: &str| self.var(leaves, &format!("block{layer}.{s}"));
        let eps = T::of(LN_EPS);
        let h = tape.layer_norm(x, p("ln1.g")?, p("ln1.b")?, eps)?;
        let qkv = tape.matmul(h, p("attn.w_qkv")?)?;
        let qkv = tape.add_broadcast(qkv, p("attn.b_qkv")?)?;
        let a = tape.causal_attention(qkv, self.config.n_heads)?;
        let a = tape.matmul(a, p("attn.w_out")?)?;
        let a = tape.add_broadcast(a, p("attn.b_out")?)?;
        let x = tape.add(x, a)?;
        let h = tape.layer_norm(x, p("ln2.g")?, p("ln2.b")?, eps)?;
        let m = tape.matmul(h, p("mlp.w_in")?)?;
        let m = tape.add_broadcast(m, p("mlp.b_in")?)?;
        let m = tape.gelu(m);
        let m = tape.matmul(m, p("mlp.w_out")?)?;
        let m = tape.add_broadcast(m, p("mlp.b_out")?)?;
        tape.add(x, m)
    }

    fn field_vars(&self, leaves: &[Var]) -> Result<FieldVars> {
        Ok(FieldVars {
            w1: self.var(leaves, ODE_PARAMS[0])?,
            b1: self.var(leaves, ODE_PARAMS[1])?,
            w2: self.var(leaves, ODE_PARAMS[2])?,
            b2: self.var(leaves, ODE_PARAMS[3])?,
            alpha: self.var(leaves, ODE_PARAMS[4])?,
        })
    }

    fn field_from_tape(&self, tape: &Tape<T>, vars: FieldVars) -> Result<ControlledVectorField<T>> {
        let parts = [vars.w1, vars.b1, vars.w2, vars.b2, vars.alpha].map(|v| tape.value(v).clone());
        ControlledVectorField::from_tensors(parts, self.config.control_dim)
    }

    /// Integrate the ODE block from `h0` (a node on `tape`).
    fn ode_block(
        &self,
        tape: &mut Tape<T>,
        leaves: &[Var],
        h0: Var,
        u: Var,
        solver: &SolverConfig,
        mode: GradMode,
    ) -> Result<(Var, SolverResult<T>)> {
        let vars = self.field_vars(leaves)?;
        let control = ControlSignal::new(tape.value(u).data().to_vec());
        match mode {
            GradMode::NoGrad | GradMode::Adjoint => {
                let field = self.field_from_tape(tape, vars)?;
                let bound = field.bind(control)?;
                let start = tape.value(h0).clone();
                if mode == GradMode::NoGrad {
                    let res = integrate(|h: &Tensor<T>, t| bound.field.eval(h, t, &bound.u), &start, (0.0, 1.0), solver)?;
                    let out = tape.leaf(res.final_state.clone());
                    return Ok((out, res));
                }
                let template = bound.clone();
                let (res, handle) = integrate_with_adjoint(bound, &start, solver)?;
                let op = OdeBlockOp {
                    handle: Some(handle),
                    template,
                };
                let out = tape.custom(
                    &[h0, vars.w1, vars.b1, vars.w2, vars.b2, vars.alpha, u],
                    res.final_state.clone(),
                    Box::new(op),
                );
                Ok((out, res))
            }
            GradMode::Unrolled => {
                if solver.method.is_adaptive() {
                    return Err(Error::contract("unrolled gradients need a fixed-step solver"));
                }
                let n = solver.n_steps;
                let span = (0.0, 1.0);
                let dt = T::of(1.0 / n as f64);
                let mut h = h0;
                let mut nfe = 0;
                for i in 0..n {
                    let t = grid(span, n, i);
                    h = match solver.method {
                        Method::Euler => {
                            let k = eval_on_tape(tape, vars, h, t, u)?;
                            let k = tape.scale(k, dt);
                            nfe += 1;
                            tape.add(h, k)?
                        }
                        _ => {
                            let half = T::of(0.5) * dt;
                            let dtf = 1.0 / n as f64;
                            let k1 = eval_on_tape(tape, vars, h, t, u)?;
                            let s = tape.scale(k1, half);
                            let y2 = tape.add(h, s)?;
                            let k2 = eval_on_tape(tape, vars, y2, t + 0.5 * dtf, u)?;
                            let s = tape.scale(k2, half);
                            let y3 = tape.add(h, s)?;
                            let k3 = eval_on_tape(tape, vars, y3, t + 0.5 * dtf, u)?;
                            let s = tape.scale(k3, dt);
                            let y4 = tape.add(h, s)?;
                            let k4 = eval_on_tape(tape, vars, y4, t + dtf, u)?;
                            nfe += 4;
                            let a = tape.scale(k1, dt / T::of(6.0));
                            let b = tape.scale(k2, dt / T::of(3.0));
                            let c = tape.scale(k3, dt / T::of(3.0));
                            let d = tape.scale(k4, dt / T::of(6.0));
                            let sum = tape.add(a, b)?;
                            let sum = tape.add(sum, c)?;
                            let sum = tape.add(sum, d)?;
                            tape.add(h, sum)?
                        }
                    };
                }
                let res = SolverResult {
                    final_state: tape.value(h).clone(),
                    nfe,
                    accepted_steps: n,
                    rejected_steps: 0,
                    trajectory: None,
                };
                Ok((h, res))
            }
        }
    }

    fn embed(&self, tape: &mut Tape<T>, leaves: &[Var], batch: &TokenBatch) -> Result<Var> {
        self.check_batch(batch)?;
        let x = tape.embedding(self.var(leaves, "tok_emb")?, &batch.tokens, &[batch.batch, batch.seq])?;
        let positions: Vec<usize> = (0..batch.seq).collect();
        let pos = tape.embedding(self.var(leaves, "pos_emb")?, &positions, &[batch.seq])?;
        tape.add_broadcast(x, pos)
    }

    fn head(&self, tape: &mut Tape<T>, leaves: &[Var], x: Var) -> Result<Var> {
        let x = tape.layer_norm(x, self.var(leaves, "ln_f.g")?, self.var(leaves, "ln_f.b")?, T::of(LN_EPS))?;
        let logits = tape.matmul(x, self.var(leaves, "head.w")?)?;
        tape.add_broadcast(logits, self.var(leaves, "head.b")?)
    }

    /// Record the full forward pass on `tape`.
    ///
    /// `leaves` must hold one node per parameter (see [`Model::leaves`]);
    /// `u` is the control node (ignored by the baseline). With
    /// `skip_ode` the hybrid runs with its ODE block deleted.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape<T>,
        leaves: &[Var],
        batch: &TokenBatch,
        u: Var,
        solver: &SolverConfig,
        mode: GradMode,
        skip_ode: bool,
    ) -> Result<TapeForward<T>> {
        let mut x = self.embed(tape, leaves, batch)?;
        let (start, _) = self.config.ode_replaces;
        let layers = self.config.block_layers();
        for &l in layers.iter().filter(|&&l| l < start || !self.is_hybrid()) {
            x = self.block(tape, leaves, l, x)?;
        }
        let ode_input = x;
        let mut ode = None;
        if self.is_hybrid() {
            if !skip_ode {
                let (out, res) = self
                    .ode_block(tape, leaves, x, u, solver, mode)
                    .map_err(|e| e.context(format!("ode block ({})", solver.method)))?;
                x = out;
                ode = Some(res);
            }
            for &l in layers.iter().filter(|&&l| l >= start) {
                x = self.block(tape, leaves, l, x)?;
            }
        }
        let logits = self.head(tape, leaves, x)?;
        Ok(TapeForward {
            logits,
            ode_input,
            ode,
        })
    }

    fn control_leaf(&self, tape: &mut Tape<T>, u: Option<&ControlSignal<T>>) -> Result<Var> {
        let u = match u {
            Some(u) => {
                if u.dim() != self.config.control_dim {
                    return Err(Error::contract(format!(
                        "control signal has {} components, model expects {}",
                        u.dim(),
                        self.config.control_dim
                    )));
                }
                u.clone()
            }
            None => ControlSignal::zeros(self.config.control_dim),
        };
        Ok(tape.leaf(u.tensor().clone()))
    }

    /// Logits `[B, T, V]` without gradient bookkeeping.
    pub fn logits(
        &self,
        batch: &TokenBatch,
        u: Option<&ControlSignal<T>>,
        solver: &SolverConfig,
    ) -> Result<(Tensor<T>, Option<SolverResult<T>>)> {
        let mut tape = Tape::new();
        let leaves = self.leaves(&mut tape);
        let uv = self.control_leaf(&mut tape, u)?;
        let fwd = self.forward_on_tape(&mut tape, &leaves, batch, uv, solver, GradMode::NoGrad, false)?;
        Ok((tape.value(fwd.logits).clone(), fwd.ode))
    }

    /// Logits of the hybrid with its ODE block removed.
    pub fn logits_without_ode(&self, batch: &TokenBatch) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let leaves = self.leaves(&mut tape);
        let uv = self.control_leaf(&mut tape, None)?;
        let solver = self.config.solver.clone();
        let fwd = self.forward_on_tape(&mut tape, &leaves, batch, uv, &solver, GradMode::NoGrad, true)?;
        Ok(tape.value(fwd.logits).clone())
    }

    /// Run the ODE block only (after the early blocks) and return the solver output.
    pub fn ode_trajectory(
        &self,
        batch: &TokenBatch,
        u: &ControlSignal<T>,
        solver: &SolverConfig,
    ) -> Result<SolverResult<T>> {
        if !self.is_hybrid() {
            return Err(Error::contract("baseline model has no ODE block"));
        }
        let mut tape = Tape::new();
        let leaves = self.leaves(&mut tape);
        let uv = self.control_leaf(&mut tape, Some(u))?;
        let mut x = self.embed(&mut tape, &leaves, batch)?;
        for l in self.config.block_layers().into_iter().filter(|&l| l < self.config.ode_replaces.0) {
            x = self.block(&mut tape, &leaves, l, x)?;
        }
        let (_, res) = self
            .ode_block(&mut tape, &leaves, x, uv, solver, GradMode::NoGrad)
            .map_err(|e| e.context(format!("ode block ({})", solver.method)))?;
        Ok(res)
    }

    /// Cross-entropy loss and parameter gradients (stored in `self.params`).
    pub fn loss_and_grads(
        &mut self,
        batch: &TokenBatch,
        targets: &[Option<usize>],
        u: Option<&ControlSignal<T>>,
        solver: &SolverConfig,
        mode: GradMode,
    ) -> Result<StepOutput<T>> {
        if mode == GradMode::NoGrad {
            return Err(Error::contract("loss_and_grads needs a gradient mode"));
        }
        let mut tape = Tape::new();
        let leaves = self.leaves(&mut tape);
        let uv = self.control_leaf(&mut tape, u)?;
        let fwd = self.forward_on_tape(&mut tape, &leaves, batch, uv, solver, mode, false)?;
        let loss = tape.cross_entropy(fwd.logits, targets)?;
        let loss_value = tape.value(loss).item().as_f64();
        if !loss_value.is_finite() {
            return Err(Error::NonFiniteLoss { step: 0 });
        }
        let tape_len = tape.len();
        let mut grads = tape.backward(loss, Tensor::scalar(T::one()))?;
        for (i, &leaf) in leaves.iter().enumerate() {
            let shape = self.params.iter().nth(i).map(|p| p.value.shape().to_vec()).unwrap_or_default();
            let g = grads.take(leaf).unwrap_or_else(|| Tensor::zeros(&shape));
            self.params.set_grad(i, g)?;
        }
        let u_grad = if self.is_hybrid() {
            grads.take(uv).map(|g| g.into_data()).unwrap_or_default()
        } else {
            Vec::new()
        };
        Ok(StepOutput {
            loss: loss_value,
            u_grad,
            ode: fwd.ode,
            tape_len,
        })
    }

    /// Loss without gradients.
    pub fn loss(
        &self,
        batch: &TokenBatch,
        targets: &[Option<usize>],
        u: Option<&ControlSignal<T>>,
        solver: &SolverConfig,
    ) -> Result<f64> {
        let mut tape = Tape::new();
        let leaves = self.leaves(&mut tape);
        let uv = self.control_leaf(&mut tape, u)?;
        let fwd = self.forward_on_tape(&mut tape, &leaves, batch, uv, solver, GradMode::NoGrad, false)?;
        let loss = tape.cross_entropy(fwd.logits, targets)?;
        Ok(tape.value(loss).item().as_f64())
    }
}

/// Hybrid forward: logits and the ODE solver report.
pub fn forward_hybrid<T: Scalar>(
    model: &Model<T>,
    tokens: &TokenBatch,
    u: &ControlSignal<T>,
    solver: &SolverConfig,
) -> Result<(Tensor<T>, SolverResult<T>)> {
    if !model.is_hybrid() {
        return Err(Error::contract("forward_hybrid called on a baseline model"));
    }
    let (logits, ode) = model.logits(tokens, Some(u), solver)?;
    Ok((logits, ode.expect("hybrid reports its ODE block")))
}

pub fn forward_baseline<T: Scalar>(model: &Model<T>, tokens: &TokenBatch) -> Result<Tensor<T>> {
    if model.is_hybrid() {
        return Err(Error::contract("forward_baseline called on a hybrid model"));
    }
    let solver = model.config.solver.clone();
    Ok(model.logits(tokens, None, &solver)?.0)
}

pub fn set_freeze_for_steering<T: Scalar>(model: &mut Model<T>) {
    model.set_freeze_for_steering();
}

/// Next-token targets for a `[B, T+1]` window batch: returns the `[B, T]`
/// inputs and the shifted targets.
pub fn shift_targets(windows: &[Vec<usize>]) -> Result<(TokenBatch, Vec<Option<usize>>)> {
    let seq = windows
        .first()
        .map(|w| w.len().saturating_sub(1))
        .ok_or_else(|| Error::contract("empty batch"))?;
    let mut tokens = Vec::with_capacity(windows.len() * seq);
    let mut targets = Vec::with_capacity(windows.len() * seq);
    for w in windows {
        if w.len() != seq + 1 {
            return Err(Error::contract("windows must share one length"));
        }
        tokens.extend_from_slice(&w[..seq]);
        targets.extend(w[1..].iter().map(|&t| Some(t)));
    }
    Ok((TokenBatch::new(tokens, windows.len(), seq)?, targets))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(arch: Arch) -> ModelConfig {
        ModelConfig {
            arch,
            n_layers: 4,
            d_model: 8,
            n_heads: 2,
            vocab_size: 11,
            max_seq_len: 6,
            ode_replaces: (1, 3),
            control_dim: 1,
            solver: SolverConfig::euler(4),
        }
    }

    fn batch() -> TokenBatch {
        TokenBatch::new(vec![1, 4, 2, 9, 0, 3, 3, 7, 10, 5], 2, 5).unwrap()
    }

    #[test]
    fn config_validation() {
        let mut c = tiny(Arch::Hybrid);
        c.ode_replaces = (3, 3);
        assert!(c.validate().is_err());
        c.ode_replaces = (1, 5);
        assert!(c.validate().is_err());
        let mut c = tiny(Arch::Hybrid);
        c.n_heads = 3;
        assert!(c.validate().is_err());
    }

    #[test]
    fn config_round_trips_through_key_values() {
        let c = tiny(Arch::Hybrid);
        let back = ModelConfig::from_kv(&c.to_kv(), &ModelConfig::desk(1)).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn param_count_matches_allocation() {
        for arch in [Arch::Baseline, Arch::Hybrid] {
            let m = Model::<f32>::new(tiny(arch), 0).unwrap();
            assert_eq!(m.param_count(), param_count(&m.config));
        }
    }

    #[test]
    fn hybrid_has_fewer_params_than_baseline() {
        for arch_cfg in [tiny(Arch::Hybrid), ModelConfig::desk(96), ModelConfig::full_scale()] {
            let h = param_count(&arch_cfg.clone().with_arch(Arch::Hybrid));
            let b = param_count(&arch_cfg.with_arch(Arch::Baseline));
            assert!(h < b, "{h} vs {b}");
        }
    }

    #[test]
    fn logits_shape_and_token_checks() {
        let m = Model::<f32>::new(tiny(Arch::Baseline), 1).unwrap();
        let single = TokenBatch::new(vec![3, 4], 2, 1).unwrap();
        assert_eq!(forward_baseline(&m, &single).unwrap().shape(), &[2, 1, 11]);
        let bad = TokenBatch::new(vec![11], 1, 1).unwrap();
        assert!(matches!(forward_baseline(&m, &bad), Err(Error::Contract(_))));
        let long = TokenBatch::new(vec![0; 7], 1, 7).unwrap();
        assert!(forward_baseline(&m, &long).is_err());
    }

    #[test]
    fn baseline_is_causal() {
        let m = Model::<f64>::new(tiny(Arch::Baseline), 2).unwrap();
        let a = batch();
        let mut b = a.clone();
        b.tokens[4] = 8; // last position of the first row
        let la = forward_baseline(&m, &a).unwrap();
        let lb = forward_baseline(&m, &b).unwrap();
        let v = 11;
        assert_eq!(la.data()[..4 * v], lb.data()[..4 * v]);
        assert_ne!(la.data()[4 * v..5 * v], lb.data()[4 * v..5 * v]);
    }

    #[test]
    fn zero_alpha_equals_deleted_ode_block() {
        let mut m = Model::<f32>::new(tiny(Arch::Hybrid), 3).unwrap();
        m.set_alpha(0.0).unwrap();
        let u = ControlSignal::scalar(1.0);
        let (with_ode, _) = forward_hybrid(&m, &batch(), &u, &SolverConfig::euler(4)).unwrap();
        assert_eq!(with_ode, m.logits_without_ode(&batch()).unwrap());
    }

    #[test]
    fn forward_is_deterministic() {
        let m = Model::<f32>::new(tiny(Arch::Hybrid), 4).unwrap();
        let u = ControlSignal::scalar(-1.0);
        let a = forward_hybrid(&m, &batch(), &u, &SolverConfig::euler(4)).unwrap().0;
        let b = forward_hybrid(&m, &batch(), &u, &SolverConfig::euler(4)).unwrap().0;
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn steering_freeze_leaves_only_ode_trainable() {
        let mut m = Model::<f32>::new(tiny(Arch::Hybrid), 5).unwrap();
        m.set_freeze_for_steering();
        assert_eq!(m.params.trainable_numel(), m.ode_weight_count() + 1);
        let (b, t) = (batch(), vec![Some(1); 10]);
        m.loss_and_grads(&b, &t, Some(&ControlSignal::scalar(1.0)), &SolverConfig::euler(4), GradMode::Adjoint)
            .unwrap();
        assert_eq!(m.params.grad_norm(|n| !n.starts_with("ode.")), 0.0);
        assert!(m.params.grad_norm(|n| n.starts_with("ode.")) > 0.0);
    }

    #[test]
    fn adjoint_and_unrolled_gradients_agree() {
        let cfg = ModelConfig {
            solver: SolverConfig::euler(4),
            ..tiny(Arch::Hybrid)
        };
        let b = batch();
        let t: Vec<_> = b.tokens.iter().map(|&x| Some((x + 1) % 11)).collect();
        let u = ControlSignal::scalar(0.7);
        let mut m1 = Model::<f64>::new(cfg.clone(), 6).unwrap();
        let mut m2 = m1.clone();
        let s1 = m1.loss_and_grads(&b, &t, Some(&u), &cfg.solver, GradMode::Adjoint).unwrap();
        let s2 = m2.loss_and_grads(&b, &t, Some(&u), &cfg.solver, GradMode::Unrolled).unwrap();
        assert_eq!(s1.loss, s2.loss);
        for (p, q) in m1.params.iter().zip(m2.params.iter()) {
            let err = p.grad.sub(&q.grad).unwrap().norm() / (q.grad.norm() + 1e-30);
            assert!(err < 1e-9, "{}: {err}", p.name);
        }
        assert!((s1.u_grad[0] - s2.u_grad[0]).abs() < 1e-9 * s2.u_grad[0].abs().max(1e-12));
        assert!(s2.u_grad[0] != 0.0);
    }

    #[test]
    fn adjoint_tape_length_is_independent_of_steps() {
        let b = batch();
        let t = vec![Some(2); 10];
        let lens: Vec<usize> = [1, 4, 64]
            .iter()
            .map(|&n| {
                let mut m = Model::<f32>::new(tiny(Arch::Hybrid), 7).unwrap();
                m.loss_and_grads(&b, &t, None, &SolverConfig::euler(n), GradMode::Adjoint)
                    .unwrap()
                    .tape_len
            })
            .collect();
        assert!(lens.windows(2).all(|w| w[0] == w[1]), "{lens:?}");
    }

    #[test]
    fn shift_targets_builds_next_token_pairs() {
        let (b, t) = shift_targets(&[vec![1, 2, 3], vec![4, 5, 6]]).unwrap();
        assert_eq!(b.tokens, vec![1, 2, 4, 5]);
        assert_eq!(t, vec![Some(2), Some(3), Some(5), Some(6)]);
        assert!(shift_targets(&[vec![1, 2], vec![1]]).is_err());
    }
}
