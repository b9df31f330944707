//! Joint knob/plan encoder.
//!
//! Plan nodes (features concatenated with their spectral position) pass
//! through one self-attention block restricted to tree neighbours; knobs,
//! represented as weighted one-hot rows, pass through one unmasked
//! self-attention block. Knob embeddings then attend over node embeddings
//! under the correlation mask and are average-pooled into a single vector.
//!
//! Every attention block is single-head scaled dot-product attention followed
//! by a residual connection and a residual position-wise feed-forward layer.

use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Matrix, ParamId, ParamStore, Tape, Var, MASK_SENTINEL};
use crate::error::{Error, Result};
use crate::knobs::Configuration;
use crate::nn::{Linear, Mlp};
use crate::plan::{adjacency_mask, featurize, hspe, FeatureVocab, QueryPlan};

/// Binary knob/node-type relevance mask, `matrix[type][knob]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationMatrix {
    pub node_types: Vec<String>,
    pub knobs: Vec<String>,
    pub matrix: Vec<Vec<u8>>,
}

impl CorrelationMatrix {
    pub fn filled(node_types: Vec<String>, knobs: Vec<String>, value: u8) -> Self {
        let matrix = vec![vec![value; knobs.len()]; node_types.len()];
        Self {
            node_types,
            knobs,
            matrix,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.matrix.len() != self.node_types.len() {
            return Err(Error::config("matrix", "one row per node type required"));
        }
        for (t, row) in self.matrix.iter().enumerate() {
            if row.len() != self.knobs.len() || row.iter().any(|&x| x > 1) {
                return Err(Error::config(
                    format!("matrix[{t}]"),
                    format!("expected {} entries in {{0,1}}", self.knobs.len()),
                ));
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(text)?;
        m.validate()?;
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(path.display().to_string(), e.to_string()))?;
        Self::from_json(&text)
    }

    /// Node types missing from the matrix are treated as correlated with
    /// every knob.
    pub fn is_correlated(&self, node_type: &str, knob: usize) -> bool {
        match self.node_types.iter().position(|t| t == node_type) {
            Some(t) => self.matrix[t].get(knob).is_none_or(|&x| x == 1),
            None => true,
        }
    }

    pub fn ones(&self) -> usize {
        self.matrix.iter().flatten().filter(|&&x| x == 1).count()
    }

    /// Precision and recall of the ones in `self` against `truth`. Both are
    /// 1 when the respective denominator is empty.
    pub fn precision_recall(&self, truth: &CorrelationMatrix) -> Result<(f64, f64)> {
        if self.node_types != truth.node_types || self.knobs != truth.knobs {
            return Err(Error::Validation("matrices cover different node types or knobs".into()));
        }
        let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
        for (a, b) in self.matrix.iter().flatten().zip(truth.matrix.iter().flatten()) {
            match (a, b) {
                (1, 1) => tp += 1,
                (1, 0) => fp += 1,
                (0, 1) => fneg += 1,
                _ => {}
            }
        }
        let ratio = |num: usize, den: usize| if den == 0 { 1.0 } else { num as f64 / den as f64 };
        Ok((ratio(tp, tp + fp), ratio(tp, tp + fneg)))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// Width of every embedding and of the joint encoding.
    pub dim: usize,
    pub ffn_hidden: usize,
    /// Laplacian eigenvectors in the positional encoding.
    pub eigenvectors: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            ffn_hidden: 32,
            eigenvectors: crate::plan::DEFAULT_EIGENVECTORS,
        }
    }
}

/// Single-head attention weights plus the feed-forward sublayer.
#[derive(Clone, Debug)]
pub struct AttentionBlockParams {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub ffn: Mlp,
    pub dim: usize,
}

impl AttentionBlockParams {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dim: usize, hidden: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            w_q: store.add_weight(format!("{name}.w_q"), dim, dim, rng)?,
            w_k: store.add_weight(format!("{name}.w_k"), dim, dim, rng)?,
            w_v: store.add_weight(format!("{name}.w_v"), dim, dim, rng)?,
            ffn: Mlp::new(store, &format!("{name}.ffn"), &[dim, hidden, dim], rng)?,
            dim,
        })
    }

    /// Residual feed-forward sublayer applied to the attention output.
    fn finish(&self, tape: &mut Tape, store: &ParamStore, queries: Var, attended: Var) -> Result<Var> {
        let h = tape.add(queries, attended)?;
        let f = self.ffn.forward(tape, store, h)?;
        tape.add(h, f)
    }
}

/// Constant matrices implementing a boolean attention mask: disallowed
/// pairs get the additive sentinel, and rows with no allowed key have their
/// scores zeroed so softmax returns uniform weights.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMask {
    pub additive: Matrix,
    pub keep: Option<Matrix>,
    pub fully_masked: Vec<usize>,
}

static FULLY_MASKED_WARNED: AtomicBool = AtomicBool::new(false);

impl AttentionMask {
    pub fn from_allowed(allowed: &[Vec<bool>]) -> Result<Self> {
        let rows = allowed.len();
        let cols = allowed.first().map_or(0, Vec::len);
        if rows == 0 || cols == 0 || allowed.iter().any(|r| r.len() != cols) {
            return Err(Error::dim("attention mask", "mask must be a nonempty rectangle"));
        }
        let mut additive = Matrix::zeros(rows, cols);
        let mut keep = Matrix::filled(rows, cols, 1.0);
        let mut fully_masked = Vec::new();
        for (i, row) in allowed.iter().enumerate() {
            if row.iter().all(|&a| !a) {
                fully_masked.push(i);
                keep.row_mut(i).fill(0.0);
                continue;
            }
            for (j, &a) in row.iter().enumerate() {
                if !a {
                    additive.set(i, j, MASK_SENTINEL);
                }
            }
        }
        if !fully_masked.is_empty() && !FULLY_MASKED_WARNED.swap(true, Ordering::Relaxed) {
            log::warn!(
                "{} attention row(s) have every key masked; using uniform attention for them",
                fully_masked.len()
            );
        }
        Ok(Self {
            additive,
            keep: (!fully_masked.is_empty()).then_some(keep),
            fully_masked,
        })
    }

    /// The same mask stacked `times` times vertically.
    pub fn repeat(&self, times: usize) -> Self {
        let stack = |m: &Matrix| Matrix::from_vec(m.rows() * times, m.cols(), m.data().repeat(times)).expect("shape");
        let n = self.additive.rows();
        Self {
            additive: stack(&self.additive),
            keep: self.keep.as_ref().map(stack),
            fully_masked: (0..times)
                .flat_map(|b| self.fully_masked.iter().map(move |&i| b * n + i))
                .collect(),
        }
    }
}

/// Intermediate values of one attention block.
#[derive(Clone, Copy, Debug)]
pub struct AttentionTrace {
    /// Post-softmax weights, queries by keys.
    pub weights: Var,
    /// `weights * V`, before the residual and feed-forward sublayers.
    pub attended: Var,
    pub output: Var,
}

/// Scaled dot-product attention of `queries` over `keys`, with optional mask,
/// followed by the residual feed-forward sublayer.
pub fn attention(
    tape: &mut Tape,
    store: &ParamStore,
    block: &AttentionBlockParams,
    queries: Var,
    keys: Var,
    mask: Option<&AttentionMask>,
) -> Result<AttentionTrace> {
    let w_q = tape.param(store, block.w_q);
    let w_k = tape.param(store, block.w_k);
    let w_v = tape.param(store, block.w_v);
    let q = tape.matmul(queries, w_q)?;
    let k = tape.matmul(keys, w_k)?;
    let v = tape.matmul(keys, w_v)?;
    let raw = tape.matmul_nt(q, k)?;
    let mut scores = tape.scale(raw, 1.0 / (block.dim as f64).sqrt())?;
    if let Some(m) = mask {
        if m.additive.shape() != tape.shape(scores) {
            return Err(Error::dim(
                "attention",
                format!("mask {:?} vs scores {:?}", m.additive.shape(), tape.shape(scores)),
            ));
        }
        if let Some(keep) = &m.keep {
            let keep = tape.constant(keep.clone());
            scores = tape.mul(scores, keep)?;
        }
        let add = tape.constant(m.additive.clone());
        scores = tape.add(scores, add)?;
    }
    let weights = tape.softmax_rows(scores)?;
    let attended = tape.matmul(weights, v)?;
    let output = block.finish(tape, store, queries, attended)?;
    Ok(AttentionTrace {
        weights,
        attended,
        output,
    })
}

/// Unmasked self-attention applied independently to consecutive blocks of
/// `block_rows` rows.
pub fn block_self_attention(
    tape: &mut Tape,
    store: &ParamStore,
    block: &AttentionBlockParams,
    x: Var,
    block_rows: usize,
) -> Result<AttentionTrace> {
    let w_q = tape.param(store, block.w_q);
    let w_k = tape.param(store, block.w_k);
    let w_v = tape.param(store, block.w_v);
    let q = tape.matmul(x, w_q)?;
    let k = tape.matmul(x, w_k)?;
    let v = tape.matmul(x, w_v)?;
    let raw = tape.block_scores(q, k, block_rows)?;
    let scores = tape.scale(raw, 1.0 / (block.dim as f64).sqrt())?;
    let weights = tape.softmax_rows(scores)?;
    let attended = tape.block_apply(weights, v, block_rows)?;
    let output = block.finish(tape, store, x, attended)?;
    Ok(AttentionTrace {
        weights,
        attended,
        output,
    })
}

/// Everything the encoder needs from one plan, precomputed once.
#[derive(Clone, Debug, PartialEq)]
pub struct PlanInput {
    pub query_id: String,
    /// One row per node: features followed by the positional encoding.
    pub features: Matrix,
    pub adjacency: Vec<Vec<bool>>,
    pub node_types: Vec<String>,
}

impl PlanInput {
    pub fn new(plan: &QueryPlan, vocab: &FeatureVocab, eigenvectors: usize) -> Result<Self> {
        plan.validate()?;
        let enc = featurize(plan, vocab)?;
        let pos = hspe(plan, eigenvectors)?;
        let rows: Vec<Vec<f64>> = enc
            .into_iter()
            .zip(pos)
            .map(|(e, p)| {
                let mut r = e.0;
                r.extend(p.to_vec());
                r
            })
            .collect();
        Ok(Self {
            query_id: plan.query_id.clone(),
            features: Matrix::from_rows(&rows)?,
            adjacency: adjacency_mask(plan),
            node_types: plan.nodes.iter().map(|n| n.op.clone()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.node_types.len()
    }

    pub fn is_empty(&self) -> bool {
        self.node_types.is_empty()
    }
}

/// Output of [`Encoder::cross_encode`].
#[derive(Clone, Copy, Debug)]
pub struct CrossTrace {
    pub attention: AttentionTrace,
    /// Pooled joint encodings, one row per configuration.
    pub x: Var,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    pub input_dim: usize,
    pub knobs: usize,
    plan_embed: Linear,
    plan_attn: AttentionBlockParams,
    plan_out: Mlp,
    knob_embed: Linear,
    knob_attn: AttentionBlockParams,
    knob_out: Mlp,
    cross: AttentionBlockParams,
}

impl Encoder {
    /// Registers all encoder parameters under `encoder.*`. `input_dim` is
    /// the width of [`PlanInput::features`].
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: EncoderConfig, input_dim: usize, knobs: usize, rng: &mut R) -> Result<Self> {
        let d = cfg.dim;
        let h = cfg.ffn_hidden;
        Ok(Self {
            cfg,
            input_dim,
            knobs,
            plan_embed: Linear::new(store, "encoder.plan.embed", input_dim, d, rng)?,
            plan_attn: AttentionBlockParams::new(store, "encoder.plan.attn", d, h, rng)?,
            plan_out: Mlp::new(store, "encoder.plan.out", &[d, h, d], rng)?,
            knob_embed: Linear::new(store, "encoder.knob.embed", knobs, d, rng)?,
            knob_attn: AttentionBlockParams::new(store, "encoder.knob.attn", d, h, rng)?,
            knob_out: Mlp::new(store, "encoder.knob.out", &[d, h, d], rng)?,
            cross: AttentionBlockParams::new(store, "encoder.cross", d, h, rng)?,
        })
    }

    /// Node embeddings (nodes by `dim`); attention only between tree
    /// neighbours and each node itself.
    pub fn encode_plan_trace(&self, tape: &mut Tape, store: &ParamStore, plan: &PlanInput) -> Result<(AttentionTrace, Var)> {
        if plan.features.cols() != self.input_dim {
            return Err(Error::dim(
                "encode_plan",
                format!("plan features have {} columns, encoder expects {}", plan.features.cols(), self.input_dim),
            ));
        }
        let x = tape.constant(plan.features.clone());
        let e = self.plan_embed.forward(tape, store, x)?;
        let mask = AttentionMask::from_allowed(&plan.adjacency)?;
        let trace = attention(tape, store, &self.plan_attn, e, e, Some(&mask))?;
        let out = self.plan_out.forward(tape, store, trace.output)?;
        Ok((trace, out))
    }

    pub fn encode_plan(&self, tape: &mut Tape, store: &ParamStore, plan: &PlanInput) -> Result<Var> {
        Ok(self.encode_plan_trace(tape, store, plan)?.1)
    }

    /// Knob embeddings for a batch of configurations: `thetas.len() * knobs`
    /// rows, configuration-major.
    pub fn encode_knobs(&self, tape: &mut Tape, store: &ParamStore, thetas: &[Configuration]) -> Result<Var> {
        let n = self.knobs;
        if thetas.is_empty() {
            return Err(Error::Usage("encode_knobs needs at least one configuration".into()));
        }
        let mut input = Matrix::zeros(thetas.len() * n, n);
        for (b, th) in thetas.iter().enumerate() {
            if th.len() != n {
                return Err(Error::dim("encode_knobs", format!("configuration has {} knobs, expected {n}", th.len())));
            }
            for (i, &v) in th.values().iter().enumerate() {
                input.set(b * n + i, i, v);
            }
        }
        let x = tape.constant(input);
        let e = self.knob_embed.forward(tape, store, x)?;
        let trace = block_self_attention(tape, store, &self.knob_attn, e, n)?;
        self.knob_out.forward(tape, store, trace.output)
    }

    /// Knob-by-node mask: knob `j` may attend to a node iff the node's type is
    /// correlated with `j`.
    pub fn cross_mask(&self, plan: &PlanInput, corr: &CorrelationMatrix) -> Result<AttentionMask> {
        let allowed: Vec<Vec<bool>> = (0..self.knobs)
            .map(|j| plan.node_types.iter().map(|t| corr.is_correlated(t, j)).collect())
            .collect();
        AttentionMask::from_allowed(&allowed)
    }

    /// Cross-attention from knob embeddings (`batch * knobs` rows) to node
    /// embeddings under `mask` (`knobs` by nodes), then mean pooling over each
    /// configuration's knobs.
    pub fn cross_encode(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        knob_seq: Var,
        node_seq: Var,
        mask: Option<&AttentionMask>,
        batch: usize,
    ) -> Result<CrossTrace> {
        let mask = mask.map(|m| if batch == 1 { m.clone() } else { m.repeat(batch) });
        let trace = attention(tape, store, &self.cross, knob_seq, node_seq, mask.as_ref())?;
        let x = tape.block_mean(trace.output, self.knobs)?;
        Ok(CrossTrace { attention: trace, x })
    }

    /// Joint encodings (one row of width `dim` per configuration).
    pub fn encode(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        plan: &PlanInput,
        corr: &CorrelationMatrix,
        thetas: &[Configuration],
    ) -> Result<Var> {
        let nodes = self.encode_plan(tape, store, plan)?;
        let knobs = self.encode_knobs(tape, store, thetas)?;
        let mask = self.cross_mask(plan, corr)?;
        Ok(self.cross_encode(tape, store, knobs, nodes, Some(&mask), thetas.len())?.x)
    }
}
