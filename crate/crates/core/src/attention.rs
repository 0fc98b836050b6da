//! Self-attention blocks over region tokens.
//!
//! Four variants share one block skeleton and differ only in which keys
//! each region query may see:
//!
//! | variant | stages              | key set of region `(p, t)`            |
//! |---------|---------------------|---------------------------------------|
//! | `S`     | spatial             | class ∪ every region at second `t`    |
//! | `T`     | temporal            | class ∪ region `p` at every second    |
//! | `S-T`   | spatial, temporal   | spatial, then temporal on its output  |
//! | `S+T`   | joint               | class ∪ every region at every second  |
//!
//! The class token always queries the joint key set and is a key in every
//! set. Each stage is pre-normalized, multi-headed with `D_h = D/A`, scaled
//! by `1/√D_h`, projected by `W_O` and added back to its input. One MLP with
//! its own pre-norm and residual closes the block.

use std::fmt;
use std::rc::Rc;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{EetError, Result};
use crate::graph::{Graph, Mask, Var};
use crate::params::{BoundParams, ParamSet};
use crate::tensor::{gemm, masked_softmax_rows, Operand, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AttentionVariant {
    #[serde(rename = "s")]
    Spatial,
    #[serde(rename = "t")]
    Temporal,
    /// Spatial then temporal attention, each with its own projections.
    #[serde(rename = "st")]
    Divided,
    /// One softmax over all region-second pairs.
    #[serde(rename = "s+t")]
    Joint,
}

impl AttentionVariant {
    pub const ALL: [AttentionVariant; 4] = [
        AttentionVariant::Spatial,
        AttentionVariant::Temporal,
        AttentionVariant::Divided,
        AttentionVariant::Joint,
    ];

    pub fn stages(self) -> &'static [KeySet] {
        match self {
            AttentionVariant::Spatial => &[KeySet::Spatial],
            AttentionVariant::Temporal => &[KeySet::Temporal],
            AttentionVariant::Divided => &[KeySet::Spatial, KeySet::Temporal],
            AttentionVariant::Joint => &[KeySet::Joint],
        }
    }

    pub fn code(self) -> &'static str {
        match self {
            AttentionVariant::Spatial => "s",
            AttentionVariant::Temporal => "t",
            AttentionVariant::Divided => "st",
            AttentionVariant::Joint => "s+t",
        }
    }
}

impl fmt::Display for AttentionVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for AttentionVariant {
    type Err = EetError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "s" | "spatial" => Ok(AttentionVariant::Spatial),
            "t" | "temporal" => Ok(AttentionVariant::Temporal),
            "st" | "s-t" | "divided" => Ok(AttentionVariant::Divided),
            "s+t" | "joint" => Ok(AttentionVariant::Joint),
            other => Err(EetError::config(format!(
                "unknown attention variant `{other}` (expected s, t, st or s+t)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum KeySet {
    Spatial,
    Temporal,
    Joint,
}

impl KeySet {
    pub fn name(self) -> &'static str {
        match self {
            KeySet::Spatial => "spatial",
            KeySet::Temporal => "temporal",
            KeySet::Joint => "joint",
        }
    }
}

/// Token positions of `regions` regions over `seconds` seconds plus the
/// class token at index 0.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenGrid {
    pub regions: usize,
    pub seconds: usize,
}

impl TokenGrid {
    pub fn new(regions: usize, seconds: usize) -> Self {
        Self { regions, seconds }
    }

    pub fn len(&self) -> usize {
        self.regions * self.seconds + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn index(&self, p: usize, t: usize) -> usize {
        1 + t * self.regions + p
    }

    /// `(p, t)` of a region token, `None` for the class token.
    pub fn position(&self, index: usize) -> Option<(usize, usize)> {
        index
            .checked_sub(1)
            .map(|i| (i % self.regions, i / self.regions))
    }

    /// Expected key-set size for a region query.
    pub fn key_count(&self, set: KeySet) -> usize {
        match set {
            KeySet::Spatial => self.regions + 1,
            KeySet::Temporal => self.seconds + 1,
            KeySet::Joint => self.regions * self.seconds + 1,
        }
    }

    /// Keys visible to `query`, ascending.
    pub fn keys(&self, set: KeySet, query: usize) -> Vec<usize> {
        let Some((p, t)) = self.position(query) else {
            return (0..self.len()).collect();
        };
        let mut keys = vec![0];
        match set {
            KeySet::Spatial => keys.extend((0..self.regions).map(|q| self.index(q, t))),
            KeySet::Temporal => keys.extend((0..self.seconds).map(|s| self.index(p, s))),
            KeySet::Joint => keys.extend(1..self.len()),
        }
        keys
    }

    pub fn mask(&self, set: KeySet) -> Mask {
        let n = self.len();
        let mut allowed = vec![false; n * n];
        for q in 0..n {
            for k in self.keys(set, q) {
                allowed[q * n + k] = true;
            }
        }
        let mask = Mask::new(n, n, allowed).expect("every query sees the class token");
        if cfg!(debug_assertions) {
            for q in 1..n {
                debug_assert_eq!(mask.keys(q).len(), self.key_count(set));
            }
            debug_assert_eq!(mask.keys(0).len(), n);
        }
        mask
    }
}

/// Masks for the three key sets of one token grid.
#[derive(Clone, Debug)]
pub struct MaskSet {
    spatial: Rc<Mask>,
    temporal: Rc<Mask>,
    joint: Rc<Mask>,
}

impl MaskSet {
    pub fn new(grid: TokenGrid) -> Self {
        Self {
            spatial: Rc::new(grid.mask(KeySet::Spatial)),
            temporal: Rc::new(grid.mask(KeySet::Temporal)),
            joint: Rc::new(grid.mask(KeySet::Joint)),
        }
    }

    pub fn get(&self, set: KeySet) -> Rc<Mask> {
        match set {
            KeySet::Spatial => self.spatial.clone(),
            KeySet::Temporal => self.temporal.clone(),
            KeySet::Joint => self.joint.clone(),
        }
    }
}

/// Normalized attention of one query over its key set.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionWeights {
    pub query: usize,
    pub keys: Vec<usize>,
    pub weights: Vec<f64>,
}

fn attention_row(
    q: &Tensor,
    k: &Tensor,
    keys: Vec<usize>,
    query: usize,
) -> Result<AttentionWeights> {
    let (n, dh) = q.require2("attention")?;
    if k.shape() != q.shape() {
        return Err(EetError::Shape {
            op: "attention",
            left: q.shape().to_vec(),
            right: k.shape().to_vec(),
        });
    }
    if query >= n {
        return Err(EetError::contract(format!(
            "query {query} out of range 0..{n}"
        )));
    }
    let scale = 1.0 / (dh as f64).sqrt();
    let scores: Vec<f64> = keys
        .iter()
        .map(|&j| {
            q.row(query)
                .iter()
                .zip(k.row(j))
                .map(|(a, b)| a * b)
                .sum::<f64>()
                * scale
        })
        .collect();
    let weights = masked_softmax_rows(&scores, &vec![true; scores.len()], 1, scores.len());
    Ok(AttentionWeights {
        query,
        keys,
        weights,
    })
}

/// Weights of region `(p, t)` over the class token and every region of second `t`.
pub fn spatial_attention(
    q: &Tensor,
    k: &Tensor,
    grid: TokenGrid,
    p: usize,
    t: usize,
) -> Result<AttentionWeights> {
    let query = grid.index(p, t);
    attention_row(q, k, grid.keys(KeySet::Spatial, query), query)
}

/// Weights of region `(p, t)` over the class token and region `p` at every second.
pub fn temporal_attention(
    q: &Tensor,
    k: &Tensor,
    grid: TokenGrid,
    p: usize,
    t: usize,
) -> Result<AttentionWeights> {
    let query = grid.index(p, t);
    attention_row(q, k, grid.keys(KeySet::Temporal, query), query)
}

/// Weights of region `(p, t)` over every token.
pub fn joint_attention(
    q: &Tensor,
    k: &Tensor,
    grid: TokenGrid,
    p: usize,
    t: usize,
) -> Result<AttentionWeights> {
    let query = grid.index(p, t);
    attention_row(q, k, grid.keys(KeySet::Joint, query), query)
}

/// Weights of the class token, which always sees every token.
pub fn class_attention(q: &Tensor, k: &Tensor, grid: TokenGrid) -> Result<AttentionWeights> {
    attention_row(q, k, grid.keys(KeySet::Joint, 0), 0)
}

/// Widths of one attention block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockShape {
    pub width: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    pub variant: AttentionVariant,
}

impl BlockShape {
    pub fn head_width(&self) -> usize {
        self.width / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.heads == 0 || self.mlp_hidden == 0 {
            return Err(EetError::config("block widths must be positive"));
        }
        if !self.width.is_multiple_of(self.heads) {
            return Err(EetError::config(format!(
                "width {} is not divisible by {} heads",
                self.width, self.heads
            )));
        }
        Ok(())
    }
}

/// Parameter names of one block. Stage `s` of block `l` owns
/// `{l}.attn{s}.ln.{gamma,beta}`, `{l}.attn{s}.head{a}.{wq,wk,wv}` (each
/// `D_h × D`) and `{l}.attn{s}.wo` (`D × A·D_h`); the MLP owns
/// `{l}.mlp.ln.{gamma,beta}`, `{l}.mlp.w1` (`D_mlp × D`), `{l}.mlp.b1`,
/// `{l}.mlp.w2` (`D × D_mlp`) and `{l}.mlp.b2`.
#[derive(Clone, Debug)]
pub struct BlockNames {
    prefix: String,
}

impl BlockNames {
    pub fn new(prefix: impl Into<String>) -> Self {
        Self {
            prefix: prefix.into(),
        }
    }

    pub fn stage_ln(&self, stage: usize) -> (String, String) {
        (
            format!("{}.attn{stage}.ln.gamma", self.prefix),
            format!("{}.attn{stage}.ln.beta", self.prefix),
        )
    }

    pub fn head(&self, stage: usize, head: usize, which: &str) -> String {
        format!("{}.attn{stage}.head{head}.{which}", self.prefix)
    }

    pub fn output(&self, stage: usize) -> String {
        format!("{}.attn{stage}.wo", self.prefix)
    }

    pub fn mlp(&self, which: &str) -> String {
        format!("{}.mlp.{which}", self.prefix)
    }
}

/// Adds freshly initialized parameters for one block to `params`: weights
/// `N(0, 0.02²)`, norms at identity, biases zero.
pub fn init_block<R: Rng + ?Sized>(
    params: &mut ParamSet,
    names: &BlockNames,
    shape: &BlockShape,
    rng: &mut R,
) -> Result<()> {
    shape.validate()?;
    let (d, dh, a) = (shape.width, shape.head_width(), shape.heads);
    for stage in 0..shape.variant.stages().len() {
        let (g, b) = names.stage_ln(stage);
        params.insert(g, Tensor::ones(&[d]));
        params.insert(b, Tensor::zeros(&[d]));
        for head in 0..a {
            for which in ["wq", "wk", "wv"] {
                params.insert(
                    names.head(stage, head, which),
                    Tensor::randn(&[dh, d], INIT_STD, rng),
                );
            }
        }
        params.insert(
            names.output(stage),
            Tensor::randn(&[d, a * dh], INIT_STD, rng),
        );
    }
    params.insert(names.mlp("ln.gamma"), Tensor::ones(&[d]));
    params.insert(names.mlp("ln.beta"), Tensor::zeros(&[d]));
    params.insert(
        names.mlp("w1"),
        Tensor::randn(&[shape.mlp_hidden, d], INIT_STD, rng),
    );
    params.insert(names.mlp("b1"), Tensor::zeros(&[shape.mlp_hidden]));
    params.insert(
        names.mlp("w2"),
        Tensor::randn(&[d, shape.mlp_hidden], INIT_STD, rng),
    );
    params.insert(names.mlp("b2"), Tensor::zeros(&[d]));
    Ok(())
}

/// Per-head projections of one stage.
#[derive(Clone, Debug)]
pub struct HeadProjections {
    pub q: Var,
    pub k: Var,
    pub v: Var,
}

/// Layer-normalizes `tokens` and projects them to per-head queries, keys and
/// values, each `n × D_h`.
pub fn qkv_project(
    graph: &mut Graph,
    tokens: Var,
    bound: &BoundParams,
    names: &BlockNames,
    shape: &BlockShape,
    stage: usize,
) -> Result<Vec<HeadProjections>> {
    let (_, d) = graph.value(tokens).require2("qkv_project")?;
    if d != shape.width {
        return Err(EetError::config(format!(
            "token width {d} does not match block width {}",
            shape.width
        )));
    }
    let (g, b) = names.stage_ln(stage);
    let normed = graph.layer_norm(tokens, bound.var(&g)?, bound.var(&b)?, LAYER_NORM_EPS)?;
    (0..shape.heads)
        .map(|head| {
            let mut project = |which: &str| -> Result<Var> {
                let w = bound.var(&names.head(stage, head, which))?;
                graph.matmul_nt(normed, w)
            };
            Ok(HeadProjections {
                q: project("wq")?,
                k: project("wk")?,
                v: project("wv")?,
            })
        })
        .collect()
}

/// Masked, scaled softmax of `q·kᵀ`: row `i` holds the weights of query `i`
/// over its key set and exact zeros elsewhere.
pub fn attention_matrix(graph: &mut Graph, q: Var, k: Var, mask: Rc<Mask>) -> Result<Var> {
    let (_, dh) = graph.value(q).require2("attention")?;
    let scores = graph.matmul_nt(q, k)?;
    let scaled = graph.scale(scores, 1.0 / (dh as f64).sqrt())?;
    graph.masked_softmax(scaled, mask)
}

/// Weighted value sums per head, concatenated, projected by `W_O` and added
/// to `residual`.
pub fn aggregate_heads(
    graph: &mut Graph,
    alphas: &[Var],
    values: &[Var],
    wo: Var,
    residual: Var,
) -> Result<Var> {
    if alphas.len() != values.len() {
        return Err(EetError::contract("one value matrix per attention matrix"));
    }
    let sums = alphas
        .iter()
        .zip(values)
        .map(|(&a, &v)| graph.matmul(a, v))
        .collect::<Result<Vec<_>>>()?;
    let cat = graph.concat_cols(&sums)?;
    let projected = graph.matmul_nt(cat, wo)?;
    graph.add(residual, projected)
}

/// Pre-norm two-layer GELU MLP with residual.
pub fn mlp_residual(
    graph: &mut Graph,
    x: Var,
    bound: &BoundParams,
    names: &BlockNames,
) -> Result<Var> {
    let h = graph.layer_norm(
        x,
        bound.var(&names.mlp("ln.gamma"))?,
        bound.var(&names.mlp("ln.beta"))?,
        LAYER_NORM_EPS,
    )?;
    let u = graph.matmul_nt(h, bound.var(&names.mlp("w1"))?)?;
    let u = graph.add_row(u, bound.var(&names.mlp("b1"))?)?;
    let a = graph.gelu(u)?;
    let o = graph.matmul_nt(a, bound.var(&names.mlp("w2"))?)?;
    let o = graph.add_row(o, bound.var(&names.mlp("b2"))?)?;
    graph.add(x, o)
}

/// Attention matrix recorded during a block forward pass.
#[derive(Clone, Debug)]
pub struct StageAttention {
    pub stage: usize,
    pub key_set: KeySet,
    pub head: usize,
    pub weights: Var,
}

pub struct BlockOutput {
    pub tokens: Var,
    pub attention: Vec<StageAttention>,
}

pub fn block_forward(
    graph: &mut Graph,
    tokens: Var,
    bound: &BoundParams,
    names: &BlockNames,
    shape: &BlockShape,
    masks: &MaskSet,
) -> Result<BlockOutput> {
    shape.validate()?;
    let mut z = tokens;
    let mut attention = Vec::new();
    for (stage, &set) in shape.variant.stages().iter().enumerate() {
        let heads = qkv_project(graph, z, bound, names, shape, stage)?;
        let mut alphas = Vec::with_capacity(heads.len());
        for (head, hp) in heads.iter().enumerate() {
            let alpha = attention_matrix(graph, hp.q, hp.k, masks.get(set))?;
            attention.push(StageAttention {
                stage,
                key_set: set,
                head,
                weights: alpha,
            });
            alphas.push(alpha);
        }
        let values: Vec<Var> = heads.iter().map(|h| h.v).collect();
        z = aggregate_heads(graph, &alphas, &values, bound.var(&names.output(stage))?, z)?;
    }
    let tokens = mlp_residual(graph, z, bound, names)?;
    Ok(BlockOutput { tokens, attention })
}

/// Dense `n × n` copy of an attention matrix held by a graph.
pub fn dense_weights(graph: &Graph, weights: Var) -> Tensor {
    graph.value(weights).clone()
}

/// `α·v` computed outside any graph, for checking aggregation by hand.
pub fn weighted_values(alpha: &Tensor, v: &Tensor) -> Result<Tensor> {
    let (n, m) = alpha.require2("weighted_values")?;
    let (m2, dh) = v.require2("weighted_values")?;
    if m != m2 {
        return Err(EetError::Shape {
            op: "weighted_values",
            left: alpha.shape().to_vec(),
            right: v.shape().to_vec(),
        });
    }
    let mut out = vec![0.0; n * dh];
    gemm(
        Operand::plain(alpha.data(), n, m),
        Operand::plain(v.data(), m, dh),
        &mut out,
        false,
    );
    Tensor::new(vec![n, dh], out)
}
