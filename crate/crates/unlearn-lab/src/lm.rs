//! Two autoregressive next-token models trained by minimizing NLL:
//! a configurable tiny decoder transformer and a convex softmax bigram.
//!
//! Both are expressed through [`crate::autodiff`] graphs rebuilt per batch.
//! Model parameters are plain named arrays in a fixed order, so optimizer
//! state, checkpoints and gradient extraction all agree on indexing.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{CompGraph, NodeId};
use crate::corpus::{Sequence, Token};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Provenance of a parameter set.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Vanilla,
    Unlearned,
    Retrained,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub vocab: usize,
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub context: usize,
    pub mlp_hidden: usize,
}

impl DecoderConfig {
    /// Smallest configuration that reliably memorizes a desk-scale forget
    /// set: 2 layers, width 32, 2 heads, context 64.
    pub fn desk_default(vocab: usize) -> Self {
        DecoderConfig {
            vocab,
            layers: 2,
            dim: 32,
            heads: 2,
            context: 64,
            mlp_hidden: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab == 0 || self.layers == 0 || self.dim == 0 || self.heads == 0 || self.mlp_hidden == 0 {
            return Err(Error::InvalidConfig("decoder dimensions must be positive".into()));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "model dim {} not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if self.context < 2 {
            return Err(Error::InvalidConfig("context length must be at least 2".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Arch {
    TinyDecoder(DecoderConfig),
    Bigram { vocab: usize },
}

impl Arch {
    pub fn vocab(&self) -> usize {
        match self {
            Arch::TinyDecoder(cfg) => cfg.vocab,
            Arch::Bigram { vocab } => *vocab,
        }
    }

    /// Longest admissible prefix.
    pub fn max_prefix(&self) -> usize {
        match self {
            Arch::TinyDecoder(cfg) => cfg.context,
            Arch::Bigram { .. } => usize::MAX,
        }
    }
}

/// One named parameter array.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub tensor: Tensor,
}

/// A model: architecture, role tag and the parameter arrays in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub arch: Arch,
    pub role: Role,
    params: Vec<Param>,
}

fn decoder_param_specs(cfg: &DecoderConfig) -> Vec<(String, Vec<usize>)> {
    let (v, d, h, dh) = (cfg.vocab, cfg.dim, cfg.mlp_hidden, cfg.head_dim());
    let mut specs = vec![
        ("embed".to_string(), vec![v, d]),
        ("pos".to_string(), vec![cfg.context, d]),
    ];
    for l in 0..cfg.layers {
        specs.push((format!("layer{l}.ln1.gamma"), vec![d]));
        specs.push((format!("layer{l}.ln1.beta"), vec![d]));
        for head in 0..cfg.heads {
            specs.push((format!("layer{l}.head{head}.wq"), vec![d, dh]));
            specs.push((format!("layer{l}.head{head}.wk"), vec![d, dh]));
            specs.push((format!("layer{l}.head{head}.wv"), vec![d, dh]));
            specs.push((format!("layer{l}.head{head}.wo"), vec![dh, d]));
        }
        specs.push((format!("layer{l}.ln2.gamma"), vec![d]));
        specs.push((format!("layer{l}.ln2.beta"), vec![d]));
        specs.push((format!("layer{l}.mlp.w1"), vec![d, h]));
        specs.push((format!("layer{l}.mlp.b1"), vec![h]));
        specs.push((format!("layer{l}.mlp.w2"), vec![h, d]));
        specs.push((format!("layer{l}.mlp.b2"), vec![d]));
    }
    specs.push(("final_ln.gamma".to_string(), vec![d]));
    specs.push(("final_ln.beta".to_string(), vec![d]));
    specs.push(("out.w".to_string(), vec![d, v]));
    specs
}

impl ModelParams {
    /// Fresh decoder with GPT-style initialization: gaussian embeddings and
    /// projections, zeroed output-side projections, identity layer norms.
    pub fn new_decoder(cfg: DecoderConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        for (name, shape) in decoder_param_specs(&cfg) {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = if name.ends_with(".wo") || name.ends_with("mlp.w2") {
                vec![0.0; n]
            } else if name.ends_with("gamma") {
                vec![1.0; n]
            } else if name.ends_with("beta") || name.ends_with(".b1") || name.ends_with(".b2") {
                vec![0.0; n]
            } else if name == "pos" {
                (0..n).map(|_| 0.01 * gauss(&mut rng)).collect()
            } else {
                (0..n).map(|_| 0.02 * gauss(&mut rng)).collect()
            };
            params.push(Param {
                name,
                tensor: Tensor::new(shape, data),
            });
        }
        Ok(ModelParams {
            arch: Arch::TinyDecoder(cfg),
            role: Role::Vanilla,
            params,
        })
    }

    /// Zero-initialized bigram: every next-token distribution starts uniform.
    pub fn new_bigram(vocab: usize) -> Result<Self> {
        if vocab == 0 {
            return Err(Error::InvalidConfig("bigram vocab must be positive".into()));
        }
        Ok(ModelParams {
            arch: Arch::Bigram { vocab },
            role: Role::Vanilla,
            params: vec![Param {
                name: "w".to_string(),
                tensor: Tensor::zeros(vec![vocab, vocab]),
            }],
        })
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.tensor)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.iter_mut().find(|p| p.name == name).map(|p| &mut p.tensor)
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.tensor.all_finite())
    }

    pub fn with_role(mut self, role: Role) -> Self {
        self.role = role;
        self
    }

    pub fn vocab(&self) -> usize {
        self.arch.vocab()
    }
}

fn gauss(rng: &mut ChaCha12Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// One sequence of a loss batch: the full token sequence plus a row of
/// target distributions for each predicted position (`tokens.len() - 1`
/// rows). All-zero target rows are masked out of the loss.
#[derive(Clone, Debug)]
pub struct BatchItem {
    pub tokens: Sequence,
    pub targets: Tensor,
}

impl BatchItem {
    /// Standard next-token training item: one-hot targets at every position.
    pub fn training(tokens: &[Token], vocab: usize) -> Result<Self> {
        if tokens.len() < 2 {
            return Err(Error::SequenceTooShort(tokens.len()));
        }
        let rows = tokens.len() - 1;
        let mut t = Tensor::zeros(vec![rows, vocab]);
        for (r, &tok) in tokens[1..].iter().enumerate() {
            if tok >= vocab {
                return Err(Error::OutOfVocab { token: tok, vocab });
            }
            t.data[r * vocab + tok] = 1.0;
        }
        Ok(BatchItem {
            tokens: tokens.to_vec(),
            targets: t,
        })
    }

    fn loss_rows(&self) -> usize {
        let (rows, cols) = self.targets.rows_cols();
        (0..rows)
            .filter(|&r| self.targets.data[r * cols..(r + 1) * cols].iter().any(|&v| v != 0.0))
            .count()
    }
}

/// A loss graph over a batch, with parameter nodes bound in model order.
pub struct BatchGraph {
    pub graph: CompGraph,
    pub root: NodeId,
    pub param_ids: Vec<NodeId>,
    /// Probability rows `[len-1, V]` per batch item, in item order.
    pub prob_ids: Vec<NodeId>,
    pub loss_rows: usize,
}

/// Bind `model`'s parameters into a fresh graph and build the mean
/// per-position cross-entropy of `items` against their target rows,
/// scaled by `loss_sign`.
pub fn batch_loss_graph(model: &ModelParams, items: &[BatchItem], loss_sign: f64) -> Result<BatchGraph> {
    grouped_loss_graph(model, &[(items, loss_sign)])
}

/// Multi-term loss: each group contributes `coeff * (sum of its CE) / (its
/// loss rows)`, and the root is the sum over groups. One backward pass then
/// yields the combined gradient for a single optimizer step.
pub fn grouped_loss_graph(model: &ModelParams, groups: &[(&[BatchItem], f64)]) -> Result<BatchGraph> {
    if groups.iter().all(|(items, _)| items.is_empty()) {
        return Err(Error::EmptyData);
    }
    let mut graph = CompGraph::new();
    let param_ids: Vec<NodeId> = model.params.iter().map(|p| graph.input(p.tensor.clone())).collect();

    let mut prob_ids = Vec::new();
    let mut group_ids = Vec::with_capacity(groups.len());
    let mut total_rows = 0usize;
    for (items, coeff) in groups {
        if items.is_empty() {
            continue;
        }
        let mut ce_ids = Vec::with_capacity(items.len());
        let mut rows = 0usize;
        for item in items.iter() {
            if item.tokens.len() < 2 {
                return Err(Error::SequenceTooShort(item.tokens.len()));
            }
            let prefix = &item.tokens[..item.tokens.len() - 1];
            let probs = sequence_probs(&mut graph, model, &param_ids, prefix)?;
            ce_ids.push(graph.cross_entropy(probs, item.targets.clone())?);
            prob_ids.push(probs);
            rows += item.loss_rows();
        }
        if rows == 0 {
            return Err(Error::EmptyData);
        }
        let mut ce_total = ce_ids[0];
        for &ce in &ce_ids[1..] {
            ce_total = graph.add(ce_total, ce)?;
        }
        group_ids.push(graph.scale(ce_total, coeff / rows as f64));
        total_rows += rows;
    }
    let mut root = group_ids[0];
    for &g in &group_ids[1..] {
        root = graph.add(root, g)?;
    }
    Ok(BatchGraph {
        graph,
        root,
        param_ids,
        prob_ids,
        loss_rows: total_rows,
    })
}

/// Append one sequence's forward pass; returns the `[len, V]` node of
/// next-token probability rows.
pub fn sequence_probs(
    graph: &mut CompGraph,
    model: &ModelParams,
    param_ids: &[NodeId],
    prefix: &[Token],
) -> Result<NodeId> {
    if prefix.is_empty() {
        return Err(Error::EmptyPrefix);
    }
    let vocab = model.vocab();
    if let Some(&bad) = prefix.iter().find(|&&t| t >= vocab) {
        return Err(Error::OutOfVocab { token: bad, vocab });
    }
    match &model.arch {
        Arch::Bigram { .. } => {
            let w = param_ids[0];
            let logits = graph.embed_gather(w, prefix.to_vec())?;
            graph.softmax(logits)
        }
        Arch::TinyDecoder(cfg) => {
            if prefix.len() > cfg.context {
                return Err(Error::PrefixTooLong {
                    len: prefix.len(),
                    max: cfg.context,
                });
            }
            let pid = |name: String| -> NodeId {
                let i = model
                    .params
                    .iter()
                    .position(|p| p.name == name)
                    .unwrap_or_else(|| panic!("missing parameter {name}"));
                param_ids[i]
            };
            let t = prefix.len();
            let dh = cfg.head_dim();

            let tok_emb = graph.embed_gather(pid("embed".into()), prefix.to_vec())?;
            let pos_emb = graph.embed_gather(pid("pos".into()), (0..t).collect())?;
            let mut x = graph.add(tok_emb, pos_emb)?;

            // Causal mask: position i may attend to j <= i.
            let mut mask = Tensor::zeros(vec![t, t]);
            for i in 0..t {
                for j in (i + 1)..t {
                    mask.data[i * t + j] = -1e9;
                }
            }
            let mask = graph.input(mask);

            for l in 0..cfg.layers {
                let ln1 = graph.layer_norm(x)?;
                let ln1g = graph.mul(ln1, pid(format!("layer{l}.ln1.gamma")))?;
                let ln1a = graph.add(ln1g, pid(format!("layer{l}.ln1.beta")))?;

                let mut attn_out: Option<NodeId> = None;
                for head in 0..cfg.heads {
                    let q = graph.matmul(ln1a, pid(format!("layer{l}.head{head}.wq")), false)?;
                    let k = graph.matmul(ln1a, pid(format!("layer{l}.head{head}.wk")), false)?;
                    let v = graph.matmul(ln1a, pid(format!("layer{l}.head{head}.wv")), false)?;
                    let scores = graph.matmul(q, k, true)?;
                    let scaled = graph.scale(scores, 1.0 / (dh as f64).sqrt());
                    let masked = graph.add(scaled, mask)?;
                    let att = graph.softmax(masked)?;
                    let ctx = graph.matmul(att, v, false)?;
                    let proj = graph.matmul(ctx, pid(format!("layer{l}.head{head}.wo")), false)?;
                    attn_out = Some(match attn_out {
                        None => proj,
                        Some(acc) => graph.add(acc, proj)?,
                    });
                }
                x = graph.add(x, attn_out.expect("at least one head"))?;

                let ln2 = graph.layer_norm(x)?;
                let ln2g = graph.mul(ln2, pid(format!("layer{l}.ln2.gamma")))?;
                let ln2a = graph.add(ln2g, pid(format!("layer{l}.ln2.beta")))?;
                let h1 = graph.matmul(ln2a, pid(format!("layer{l}.mlp.w1")), false)?;
                let h1b = graph.add(h1, pid(format!("layer{l}.mlp.b1")))?;
                let act = graph.gelu(h1b);
                let h2 = graph.matmul(act, pid(format!("layer{l}.mlp.w2")), false)?;
                let h2b = graph.add(h2, pid(format!("layer{l}.mlp.b2")))?;
                x = graph.add(x, h2b)?;
            }

            let f = graph.layer_norm(x)?;
            let fg = graph.mul(f, pid("final_ln.gamma".into()))?;
            let fa = graph.add(fg, pid("final_ln.beta".into()))?;
            let logits = graph.matmul(fa, pid("out.w".into()), false)?;
            graph.softmax(logits)
        }
    }
}

/// Probability vector over the vocabulary for the token following `prefix`.
pub fn next_token_distribution(model: &ModelParams, prefix: &[Token]) -> Result<Vec<f64>> {
    let rows = prefix_distributions(model, prefix)?;
    Ok(rows.into_iter().last().expect("non-empty prefix"))
}

/// Next-token distributions at every position of `prefix` (one forward pass).
pub fn prefix_distributions(model: &ModelParams, prefix: &[Token]) -> Result<Vec<Vec<f64>>> {
    let mut graph = CompGraph::new();
    let param_ids: Vec<NodeId> = model.params.iter().map(|p| graph.input(p.tensor.clone())).collect();
    let probs = sequence_probs(&mut graph, model, &param_ids, prefix)?;
    graph.forward();
    let t = graph.value(probs);
    let (rows, cols) = t.rows_cols();
    Ok((0..rows).map(|r| t.data[r * cols..(r + 1) * cols].to_vec()).collect())
}

/// Negative log-likelihood of a sequence in nats.
pub fn sequence_nll(model: &ModelParams, seq: &[Token]) -> Result<f64> {
    if seq.len() < 2 {
        return Err(Error::SequenceTooShort(seq.len()));
    }
    let item = BatchItem::training(seq, model.vocab())?;
    let mut bg = batch_loss_graph(model, std::slice::from_ref(&item), 1.0)?;
    bg.graph.forward();
    // Root is mean per-position NLL; undo the normalization.
    Ok(bg.graph.scalar_value(bg.root) * bg.loss_rows as f64)
}

/// Total NLL and number of predicted positions over a dataset.
pub fn corpus_nll(model: &ModelParams, data: &[Sequence]) -> Result<(f64, usize)> {
    let mut total = 0.0;
    let mut positions = 0usize;
    for seq in data {
        total += sequence_nll(model, seq)?;
        positions += seq.len() - 1;
    }
    Ok((total, positions))
}

/// Mean per-token NLL over a dataset.
pub fn mean_nll(model: &ModelParams, data: &[Sequence]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyData);
    }
    let (total, positions) = corpus_nll(model, data)?;
    Ok(total / positions as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam_default() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First-order optimizer with per-parameter state.
#[derive(Clone, Debug)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, model: &ModelParams) -> Self {
        let shapes: Vec<usize> = model.params.iter().map(|p| p.tensor.numel()).collect();
        Optimizer {
            kind,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    /// Apply one descent step along `grads`.
    pub fn step(&mut self, model: &mut ModelParams, grads: &[Vec<f64>], lr: f64) {
        match self.kind {
            OptimizerKind::Sgd => {
                for (param, grad) in model.params.iter_mut().zip(grads) {
                    for (p, &g) in param.tensor.data.iter_mut().zip(grad) {
                        *p -= lr * g;
                    }
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                self.t += 1;
                let bc1 = 1.0 - beta1.powi(self.t as i32);
                let bc2 = 1.0 - beta2.powi(self.t as i32);
                for ((param, grad), (m, v)) in model
                    .params
                    .iter_mut()
                    .zip(grads)
                    .zip(self.m.iter_mut().zip(self.v.iter_mut()))
                {
                    for (((p, &g), m), v) in param.tensor.data.iter_mut().zip(grad).zip(m.iter_mut()).zip(v.iter_mut())
                    {
                        *m = beta1 * *m + (1.0 - beta1) * g;
                        *v = beta2 * *v + (1.0 - beta2) * g * g;
                        let mh = *m / bc1;
                        let vh = *v / bc2;
                        *p -= lr * mh / (vh.sqrt() + eps);
                    }
                }
            }
        }
    }
}

/// Scale `grads` in place so their global L2 norm is at most `max_norm`.
/// Returns the pre-clip norm and whether clipping fired.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> (f64, bool) {
    let norm = global_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            for v in g.iter_mut() {
                *v *= s;
            }
        }
        (norm, true)
    } else {
        (norm, false)
    }
}

pub fn global_norm(grads: &[Vec<f64>]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

#[derive(Clone, Copy, Debug)]
pub struct StepStats {
    pub loss: f64,
    pub grad_norm: f64,
    pub clipped: bool,
}

/// Forward/backward `items` through `model`, clip, and take one optimizer
/// step. `loss_sign` of -1 turns the step into ascent on the batch loss.
pub fn loss_step(
    model: &mut ModelParams,
    items: &[BatchItem],
    loss_sign: f64,
    opt: &mut Optimizer,
    lr: f64,
    max_grad_norm: Option<f64>,
    step_index: usize,
) -> Result<StepStats> {
    grouped_loss_step(model, &[(items, loss_sign)], opt, lr, max_grad_norm, step_index)
}

/// Multi-term variant of [`loss_step`]; see [`grouped_loss_graph`] for the
/// objective each `(items, coeff)` group contributes.
pub fn grouped_loss_step(
    model: &mut ModelParams,
    groups: &[(&[BatchItem], f64)],
    opt: &mut Optimizer,
    lr: f64,
    max_grad_norm: Option<f64>,
    step_index: usize,
) -> Result<StepStats> {
    let mut bg = grouped_loss_graph(model, groups)?;
    bg.graph.forward();
    let loss = bg.graph.scalar_value(bg.root);
    if !loss.is_finite() {
        return Err(Error::NanLoss { step: step_index });
    }
    bg.graph.backward(bg.root)?;
    let mut grads: Vec<Vec<f64>> = bg.param_ids.iter().map(|&id| bg.graph.grad(id).data.clone()).collect();
    let raw_norm = global_norm(&grads);
    if !raw_norm.is_finite() {
        return Err(Error::NanLoss { step: step_index });
    }
    let (grad_norm, clipped) = match max_grad_norm {
        Some(max) => clip_global_norm(&mut grads, max),
        None => (raw_norm, false),
    };
    opt.step(model, &grads, lr);
    Ok(StepStats {
        loss,
        grad_norm,
        clipped,
    })
}

/// Training hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub max_grad_norm: Option<f64>,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        // lr = 0 is admitted as a degenerate probe: the step must then be
        // an exact no-op.
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::InvalidConfig(format!("learning rate {} must be non-negative", self.lr)));
        }
        if self.epochs == 0 {
            return Err(Error::InvalidConfig("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch size must be at least 1".into()));
        }
        Ok(())
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 3e-3,
            batch_size: 10,
            epochs: 40,
            optimizer: OptimizerKind::adam_default(),
            seed: 0,
            max_grad_norm: Some(5.0),
        }
    }
}

/// Train by mini-batch NLL minimization. Deterministic for a fixed seed;
/// the input model is untouched.
pub fn train(model: &ModelParams, data: &[Sequence], cfg: &TrainConfig) -> Result<ModelParams> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyData);
    }
    let vocab = model.vocab();
    let mut trained = model.clone();
    let mut opt = Optimizer::new(cfg.optimizer, &trained);
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut step_index = 0usize;
    for _epoch in 0..cfg.epochs {
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        for chunk in order.chunks(cfg.batch_size) {
            let items: Vec<BatchItem> = chunk
                .iter()
                .map(|&i| BatchItem::training(&data[i], vocab))
                .collect::<Result<_>>()?;
            loss_step(&mut trained, &items, 1.0, &mut opt, cfg.lr, cfg.max_grad_norm, step_index)?;
            step_index += 1;
        }
    }
    Ok(trained)
}

// ---------------------------------------------------------------------------
// Checkpoint format (version 1)
//
//   magic   b"ULAB"
//   version u32 LE
//   role    u8   (0 vanilla, 1 unlearned, 2 retrained)
//   arch    u8   (0 tiny-decoder, 1 bigram)
//     tiny-decoder: vocab, layers, dim, heads, context, mlp_hidden (u64 LE each)
//     bigram:       vocab (u64 LE)
//   nparams u32 LE
//   per parameter: name_len u16 LE, name bytes, ndims u8, dims u64 LE...,
//                  data f64 LE...
//
// Round-trips are bit-exact.
// ---------------------------------------------------------------------------

const CKPT_MAGIC: &[u8; 4] = b"ULAB";
const CKPT_VERSION: u32 = 1;

pub fn save_checkpoint(model: &ModelParams, path: &Path) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(CKPT_MAGIC);
    buf.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    buf.push(match model.role {
        Role::Vanilla => 0,
        Role::Unlearned => 1,
        Role::Retrained => 2,
    });
    match &model.arch {
        Arch::TinyDecoder(c) => {
            buf.push(0);
            for v in [c.vocab, c.layers, c.dim, c.heads, c.context, c.mlp_hidden] {
                buf.extend_from_slice(&(v as u64).to_le_bytes());
            }
        }
        Arch::Bigram { vocab } => {
            buf.push(1);
            buf.extend_from_slice(&(*vocab as u64).to_le_bytes());
        }
    }
    buf.extend_from_slice(&(model.params.len() as u32).to_le_bytes());
    for p in &model.params {
        let name = p.name.as_bytes();
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name);
        buf.push(p.tensor.shape.len() as u8);
        for &d in &p.tensor.shape {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in &p.tensor.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, buf)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.at + n > self.buf.len() {
            return Err(Error::Checkpoint("unexpected end of file".into()));
        }
        let s = &self.buf[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    let bytes = fs::read(path)?;
    let mut r = Reader { buf: &bytes, at: 0 };
    if r.take(4)? != CKPT_MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != CKPT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let role = match r.u8()? {
        0 => Role::Vanilla,
        1 => Role::Unlearned,
        2 => Role::Retrained,
        other => return Err(Error::Checkpoint(format!("unknown role tag {other}"))),
    };
    let arch = match r.u8()? {
        0 => {
            let mut f = [0u64; 6];
            for slot in &mut f {
                *slot = r.u64()?;
            }
            Arch::TinyDecoder(DecoderConfig {
                vocab: f[0] as usize,
                layers: f[1] as usize,
                dim: f[2] as usize,
                heads: f[3] as usize,
                context: f[4] as usize,
                mlp_hidden: f[5] as usize,
            })
        }
        1 => Arch::Bigram {
            vocab: r.u64()? as usize,
        },
        other => return Err(Error::Checkpoint(format!("unknown arch tag {other}"))),
    };
    let nparams = r.u32()? as usize;
    let mut params = Vec::with_capacity(nparams);
    for _ in 0..nparams {
        let name_len = r.u16()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
        let ndims = r.u8()? as usize;
        let mut shape = Vec::with_capacity(ndims);
        for _ in 0..ndims {
            shape.push(r.u64()? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(r.f64()?);
        }
        params.push(Param {
            name,
            tensor: Tensor::new(shape, data),
        });
    }
    Ok(ModelParams { arch, role, params })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate, GeneratorKind, GeneratorSpec, MarkovChainSpec};

    fn tiny_decoder(vocab: usize, seed: u64) -> ModelParams {
        ModelParams::new_decoder(
            DecoderConfig {
                vocab,
                layers: 1,
                dim: 16,
                heads: 2,
                context: 16,
                mlp_hidden: 32,
            },
            seed,
        )
        .unwrap()
    }

    #[test]
    fn zero_bigram_is_uniform() {
        let m = ModelParams::new_bigram(8).unwrap();
        let p = next_token_distribution(&m, &[3]).unwrap();
        for &v in &p {
            assert!((v - 0.125).abs() < 1e-15);
        }
    }

    #[test]
    fn next_token_distribution_sums_to_one() {
        let m = tiny_decoder(11, 5);
        let p = next_token_distribution(&m, &[0, 4, 7, 2]).unwrap();
        let total: f64 = p.iter().sum();
        assert!((total - 1.0).abs() < 1e-9);
        assert!(p.iter().all(|&v| v > 0.0));
    }

    #[test]
    fn bigram_memorizes_alternating_corpus() {
        // "ababab...": MLE puts all mass on the alternation.
        let seq: Sequence = (0..60).map(|i| i % 2).collect();
        let data = vec![seq; 4];
        let m = ModelParams::new_bigram(2).unwrap();
        let cfg = TrainConfig {
            lr: 0.5,
            batch_size: 4,
            epochs: 300,
            optimizer: OptimizerKind::adam_default(),
            seed: 0,
            max_grad_norm: None,
        };
        let trained = train(&m, &data, &cfg).unwrap();
        let p = next_token_distribution(&trained, &[0]).unwrap();
        assert!(p[1] > 0.99, "P(b|a) = {}", p[1]);
    }

    #[test]
    fn uniform_model_nll_is_t_log_v() {
        let m = ModelParams::new_bigram(16).unwrap();
        let seq: Sequence = vec![0, 5, 9, 2, 11];
        let nll = sequence_nll(&m, &seq).unwrap();
        assert!((nll - 4.0 * 16.0f64.ln()).abs() < 1e-10);
    }

    #[test]
    fn near_deterministic_model_has_near_zero_nll() {
        let mut m = ModelParams::new_bigram(4).unwrap();
        // Huge logit margin along 0 -> 1 -> 2 -> 3 -> 0.
        let w = m.param_mut("w").unwrap();
        for c in 0..4 {
            w.data[c * 4 + (c + 1) % 4] = 60.0;
        }
        let nll = sequence_nll(&m, &[0, 1, 2, 3, 0, 1]).unwrap();
        assert!(nll >= 0.0 && nll < 1e-9, "nll {nll}");
    }

    #[test]
    fn sequence_nll_matches_per_position_sum() {
        let m = tiny_decoder(9, 3);
        let seq: Sequence = vec![1, 8, 0, 3, 3, 7, 2];
        let direct = sequence_nll(&m, &seq).unwrap();
        let mut summed = 0.0;
        for t in 1..seq.len() {
            let p = next_token_distribution(&m, &seq[..t]).unwrap();
            summed -= p[seq[t]].max(1e-300).ln();
        }
        assert!((direct - summed).abs() < 1e-10);
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_untouched() {
        let m = tiny_decoder(6, 1);
        let data: Vec<Sequence> = vec![vec![0, 1, 2, 3, 4, 5], vec![5, 4, 3, 2, 1, 0]];
        let cfg = TrainConfig {
            lr: 0.0,
            batch_size: 2,
            epochs: 1,
            optimizer: OptimizerKind::Sgd,
            seed: 9,
            max_grad_norm: None,
        };
        let trained = train(&m, &data, &cfg).unwrap();
        for (a, b) in m.params().iter().zip(trained.params()) {
            for (x, y) in a.tensor.data.iter().zip(&b.tensor.data) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn training_is_deterministic_per_seed() {
        let m = tiny_decoder(5, 2);
        let data: Vec<Sequence> = (0..6).map(|i| (0..10).map(|j| (i + j) % 5).collect()).collect();
        let cfg = TrainConfig {
            lr: 1e-2,
            batch_size: 3,
            epochs: 2,
            optimizer: OptimizerKind::adam_default(),
            seed: 77,
            max_grad_norm: Some(1.0),
        };
        let a = train(&m, &data, &cfg).unwrap();
        let b = train(&m, &data, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn training_reduces_mean_nll() {
        let m = tiny_decoder(5, 4);
        let data: Vec<Sequence> = (0..8).map(|i| (0..12).map(|j| (i * j) % 5).collect()).collect();
        let cfg = TrainConfig {
            lr: 3e-3,
            batch_size: 4,
            epochs: 5,
            optimizer: OptimizerKind::adam_default(),
            seed: 5,
            max_grad_norm: Some(5.0),
        };
        let trained = train(&m, &data, &cfg).unwrap();
        assert!(mean_nll(&trained, &data).unwrap() <= mean_nll(&m, &data).unwrap());
        assert!(trained.all_finite());
    }

    #[test]
    fn bigram_reaches_chain_entropy_rate() {
        // 5-state chain; analytic entropy rate from the transition matrix.
        let chain = MarkovChainSpec::structured(5, 123, 1.0, 0.02);
        let entropy = chain.entropy_rate();
        let spec = GeneratorSpec {
            kind: GeneratorKind::MarkovChain(chain),
            num_sequences: 1000,
            sequence_length: 101,
            seed: 8,
        };
        let data = generate(&spec).unwrap();
        let total_tokens: usize = data.iter().map(|s| s.len()).sum();
        assert!(total_tokens >= 100_000);

        let m = ModelParams::new_bigram(5).unwrap();
        let cfg = TrainConfig {
            lr: 0.05,
            batch_size: 100,
            epochs: 60,
            optimizer: OptimizerKind::adam_default(),
            seed: 0,
            max_grad_norm: None,
        };
        let trained = train(&m, &data, &cfg).unwrap();
        let ppl = mean_nll(&trained, &data).unwrap().exp();
        let target = entropy.exp();
        assert!(
            (ppl - target).abs() / target < 0.05,
            "ppl {ppl} vs exp(entropy rate) {target}"
        );
    }

    #[test]
    fn out_of_vocab_token_is_rejected() {
        let m = ModelParams::new_bigram(4).unwrap();
        assert!(matches!(
            sequence_nll(&m, &[1, 9]),
            Err(Error::OutOfVocab { token: 9, vocab: 4 })
        ));
    }

    #[test]
    fn empty_prefix_and_long_prefix_are_rejected() {
        let bigram = ModelParams::new_bigram(4).unwrap();
        assert!(matches!(next_token_distribution(&bigram, &[]), Err(Error::EmptyPrefix)));
        let dec = tiny_decoder(4, 0);
        let long: Sequence = vec![0; 17];
        assert!(matches!(
            next_token_distribution(&dec, &long),
            Err(Error::PrefixTooLong { len: 17, max: 16 })
        ));
    }

    #[test]
    fn exploding_training_reports_nan_loss() {
        let m = tiny_decoder(4, 6);
        let data: Vec<Sequence> = vec![vec![0, 1, 2, 3, 0, 1, 2, 3]; 2];
        let cfg = TrainConfig {
            lr: 1e200,
            batch_size: 2,
            epochs: 4,
            optimizer: OptimizerKind::adam_default(),
            seed: 1,
            max_grad_norm: None,
        };
        match train(&m, &data, &cfg) {
            Err(Error::NanLoss { .. }) => {}
            other => panic!("expected NanLoss, got {other:?}"),
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let m = tiny_decoder(7, 13).with_role(Role::Retrained);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ulab");
        save_checkpoint(&m, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(m.arch, loaded.arch);
        assert_eq!(m.role, loaded.role);
        assert_eq!(m.params().len(), loaded.params().len());
        for (a, b) in m.params().iter().zip(loaded.params()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.tensor.shape, b.tensor.shape);
            for (x, y) in a.tensor.data.iter().zip(&b.tensor.data) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn param_count_is_stable_across_updates() {
        let m = tiny_decoder(6, 3);
        let before = m.param_count();
        let data: Vec<Sequence> = vec![vec![0, 1, 2, 3, 4, 5]; 3];
        let trained = train(&m, &data, &TrainConfig::default()).unwrap();
        assert_eq!(before, trained.param_count());
    }
}
