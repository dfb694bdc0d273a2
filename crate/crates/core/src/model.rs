//! Decoder-only transformer with pre-norm blocks, learned absolute positions
//! and (by default) tied input/output embeddings.
//!
//! Parameter storage layout (row-major), chosen so that every forget range of
//! a parameter is a contiguous run of elements:
//!
//! | path                 | shape                 | rows are                       |
//! |----------------------|-----------------------|--------------------------------|
//! | `tok_emb`            | `[vocab, d_model]`    | tokens                         |
//! | `pos_emb`            | `[context, d_model]`  | positions                      |
//! | `blocks.L.attn.w_qkv`| `[3*d_model, d_model]`| q heads, then k heads, then v  |
//! | `blocks.L.attn.w_o`  | `[d_model, d_model]`  | concatenated head outputs      |
//! | `blocks.L.mlp.w_1`   | `[d_mlp, d_model]`    | hidden units                   |
//! | `blocks.L.mlp.w_2`   | `[d_mlp, d_model]`    | hidden units                   |
//! | `unembed`            | `[vocab, d_model]`    | tokens (untied models only)    |

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::partition::{ElementMask, UnitMask};
use crate::tensor::{Float, Graph, Tensor, Var};

/// Token id used for padding; never predicted.
pub const PAD: usize = 0;
/// Target value of positions excluded from the loss.
pub const IGNORE: usize = usize::MAX;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub d_mlp: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub context_len: usize,
    #[serde(default = "yes")]
    pub tie_embeddings: bool,
}

fn yes() -> bool {
    true
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_layers: 4,
            d_model: 128,
            d_mlp: 512,
            n_heads: 8,
            vocab_size: 512,
            context_len: 128,
            tie_embeddings: true,
        }
    }
}

impl ModelConfig {
    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [self.n_layers, self.d_model, self.d_mlp, self.n_heads, self.vocab_size];
        if dims.contains(&0) {
            return Err(Error::config(format!("all model dimensions must be positive: {self:?}")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.context_len < 2 {
            return Err(Error::config("context_len must be at least 2"));
        }
        Ok(())
    }

    /// Parameter paths and shapes in declaration order.
    pub fn param_layout(&self) -> Vec<(String, Vec<usize>)> {
        let (d, m) = (self.d_model, self.d_mlp);
        let mut out = vec![
            ("tok_emb".to_string(), vec![self.vocab_size, d]),
            ("pos_emb".to_string(), vec![self.context_len, d]),
        ];
        for l in 0..self.n_layers {
            let p = |name: &str| format!("blocks.{l}.{name}");
            out.extend([
                (p("ln_1.gain"), vec![d]),
                (p("ln_1.bias"), vec![d]),
                (p("attn.w_qkv"), vec![3 * d, d]),
                (p("attn.w_o"), vec![d, d]),
                (p("attn.b_o"), vec![d]),
                (p("ln_2.gain"), vec![d]),
                (p("ln_2.bias"), vec![d]),
                (p("mlp.w_1"), vec![m, d]),
                (p("mlp.b_1"), vec![m]),
                (p("mlp.w_2"), vec![m, d]),
                (p("mlp.b_2"), vec![d]),
            ]);
        }
        out.push(("ln_f.gain".to_string(), vec![d]));
        out.push(("ln_f.bias".to_string(), vec![d]));
        if !self.tie_embeddings {
            out.push(("unembed".to_string(), vec![self.vocab_size, d]));
        }
        out
    }

    pub fn n_params(&self) -> usize {
        self.param_layout()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub path: String,
    pub value: Tensor<T>,
}

/// All trainable tensors of a model, in declaration order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T> {
    params: Vec<Param<T>>,
    index: HashMap<String, usize>,
}

impl<T: Float> ParamSet<T> {
    pub fn from_params(params: Vec<Param<T>>) -> Self {
        let index = params.iter().enumerate().map(|(i, p)| (p.path.clone(), i)).collect();
        ParamSet { params, index }
    }

    pub fn zeros(config: &ModelConfig) -> Self {
        Self::from_params(
            config
                .param_layout()
                .into_iter()
                .map(|(path, shape)| Param { path, value: Tensor::zeros(shape) })
                .collect(),
        )
    }

    /// GPT-2 style init: N(0, 0.02) weights, residual projections scaled by
    /// `1/sqrt(2 * n_layers)`, zero biases, unit layer-norm gains.
    pub fn init(config: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let resid = 0.02 / (2.0 * config.n_layers as f64).sqrt();
        let mut set = Self::zeros(config);
        for p in &mut set.params {
            let std = if p.path.ends_with("gain") {
                p.value.data_mut().fill(T::one());
                continue;
            } else if p.path.ends_with(".b_o") || p.path.ends_with(".b_1") || p.path.ends_with(".b_2") || p.path.ends_with("bias") {
                continue;
            } else if p.path.ends_with("w_o") || p.path.ends_with("w_2") {
                resid
            } else {
                0.02
            };
            for x in p.value.data_mut() {
                *x = T::lit(std * standard_normal(&mut rng));
            }
        }
        set
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn get(&self, i: usize) -> &Param<T> {
        &self.params[i]
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Param<T> {
        &mut self.params[i]
    }

    pub fn position(&self, path: &str) -> Option<usize> {
        self.index.get(path).copied()
    }

    pub fn by_path(&self, path: &str) -> Option<&Tensor<T>> {
        self.position(path).map(|i| &self.params[i].value)
    }

    pub fn by_path_mut(&mut self, path: &str) -> Option<&mut Tensor<T>> {
        self.position(path).map(move |i| &mut self.params[i].value)
    }

    pub fn n_elements(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Verifies paths and shapes against a config's layout.
    pub fn check_layout(&self, config: &ModelConfig) -> Result<()> {
        let layout = config.param_layout();
        if layout.len() != self.params.len() {
            return Err(Error::contract(format!(
                "parameter count {} does not match config layout {}",
                self.params.len(),
                layout.len()
            )));
        }
        for ((path, shape), p) in layout.iter().zip(&self.params) {
            if *path != p.path || shape.as_slice() != p.value.shape() {
                return Err(Error::contract(format!(
                    "parameter {} {:?} does not match layout {path} {shape:?}",
                    p.path,
                    p.value.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn cast<U: Float>(&self) -> ParamSet<U> {
        ParamSet::from_params(
            self.params
                .iter()
                .map(|p| Param { path: p.path.clone(), value: p.value.cast() })
                .collect(),
        )
    }
}

pub(crate) fn standard_normal(rng: &mut impl Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Padded batch of token sequences, `[batch, seq]` row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenBatch {
    pub batch: usize,
    pub seq: usize,
    pub ids: Vec<usize>,
}

impl TokenBatch {
    /// Right-pads sequences with [`PAD`] to the longest one.
    pub fn from_sequences<S: AsRef<[u32]>>(seqs: &[S]) -> Result<Self> {
        let seq = seqs.iter().map(|s| s.as_ref().len()).max().unwrap_or(0);
        if seqs.is_empty() || seq == 0 {
            return Err(Error::contract("empty token batch"));
        }
        let mut ids = vec![PAD; seqs.len() * seq];
        for (b, s) in seqs.iter().enumerate() {
            for (t, &tok) in s.as_ref().iter().enumerate() {
                ids[b * seq + t] = tok as usize;
            }
        }
        Ok(TokenBatch { batch: seqs.len(), seq, ids })
    }

    /// Next-token targets per position; the last position and pads are ignored.
    pub fn targets(&self) -> Vec<usize> {
        let mut out = vec![IGNORE; self.ids.len()];
        for b in 0..self.batch {
            for t in 0..self.seq - 1 {
                let next = self.ids[b * self.seq + t + 1];
                if next != PAD {
                    out[b * self.seq + t] = next;
                }
            }
        }
        out
    }

    /// Number of positions that contribute to the loss.
    pub fn n_targets(&self) -> usize {
        self.targets().iter().filter(|&&t| t != IGNORE).count()
    }

    pub fn non_pad_tokens(&self) -> usize {
        self.ids.iter().filter(|&&t| t != PAD).count()
    }
}

/// Per-pass modifications of the forward computation.
#[derive(Clone, Copy, Default)]
pub struct ForwardOptions<'a> {
    /// Parameter elements replaced by zero for this pass only.
    pub zero_params: Option<&'a ElementMask>,
    /// Hidden activations (MLP units, head outputs) zeroed in the forward pass.
    pub zero_activations: Option<&'a UnitMask>,
    /// Hidden activations whose incoming gradient is zeroed during backward.
    pub route_gradients: Option<&'a UnitMask>,
    /// Skip the blocks after this one and the unembedding.
    pub stop_after_layer: Option<usize>,
    /// Build parameter leaves that accumulate gradients.
    pub requires_grad: bool,
}

/// A recorded forward pass: the graph plus handles to interesting nodes.
pub struct ForwardPass<T: Float> {
    pub graph: Graph<T>,
    pub logits: Option<Var>,
    pub params: Vec<Var>,
    /// Residual stream after each block.
    pub block_outputs: Vec<Var>,
    /// Concatenated head outputs per block, `[rows, d_model]`.
    pub head_outputs: Vec<Var>,
    /// Post-GELU MLP hidden activations per block, `[rows, d_mlp]`.
    pub mlp_hidden: Vec<Var>,
    zero_params: Option<ElementMask>,
    batch: TokenBatch,
}

pub fn forward<T: Float>(
    config: &ModelConfig,
    params: &ParamSet<T>,
    tokens: &TokenBatch,
    opts: ForwardOptions<'_>,
) -> Result<ForwardPass<T>> {
    if tokens.seq > config.context_len {
        return Err(Error::contract(format!(
            "sequence length {} exceeds context length {}",
            tokens.seq, config.context_len
        )));
    }
    if let Some(&bad) = tokens.ids.iter().find(|&&t| t >= config.vocab_size) {
        return Err(Error::Index(format!("token id {bad} >= vocabulary size {}", config.vocab_size)));
    }
    params.check_layout(config)?;

    let mut g = Graph::new();
    let mut pv = Vec::with_capacity(params.len());
    for (i, p) in params.iter().enumerate() {
        let value = match opts.zero_params.and_then(|m| m.ranges(i)) {
            Some(ranges) if !ranges.is_empty() => {
                let mut v = p.value.clone();
                for r in ranges {
                    v.data_mut()[r.clone()].fill(T::zero());
                }
                v
            }
            _ => p.value.clone(),
        };
        pv.push(g.leaf(value, opts.requires_grad));
    }
    let at = |path: &str| pv[params.position(path).expect("layout checked")];

    let (b, s) = (tokens.batch, tokens.seq);
    let positions: Vec<usize> = (0..b * s).map(|i| i % s).collect();
    let tok = g.embedding(at("tok_emb"), &tokens.ids)?;
    let pos = g.embedding(at("pos_emb"), &positions)?;
    let mut x = g.add(tok, pos)?;

    let mut block_outputs = Vec::new();
    let mut head_outputs = Vec::new();
    let mut mlp_hidden = Vec::new();
    let last = opts.stop_after_layer.unwrap_or(config.n_layers - 1).min(config.n_layers - 1);
    for l in 0..=last {
        let p = |name: &str| at(&format!("blocks.{l}.{name}"));
        let h = g.layer_norm(x, p("ln_1.gain"), p("ln_1.bias"))?;
        let qkv = g.matmul(h, p("attn.w_qkv"), true)?;
        let mut z = g.causal_attention(qkv, b, s, config.n_heads)?;
        if let Some(keep) = opts.zero_activations.and_then(|m| m.layer(l)) {
            z = g.column_mask(z, &keep.head_columns(config.d_head()), true)?;
        }
        if let Some(keep) = opts.route_gradients.and_then(|m| m.layer(l)) {
            z = g.column_mask(z, &keep.head_columns(config.d_head()), false)?;
        }
        head_outputs.push(z);
        let a = g.matmul(z, p("attn.w_o"), false)?;
        let a = g.add_row(a, p("attn.b_o"))?;
        x = g.add(x, a)?;

        let h = g.layer_norm(x, p("ln_2.gain"), p("ln_2.bias"))?;
        let u = g.matmul(h, p("mlp.w_1"), true)?;
        let u = g.add_row(u, p("mlp.b_1"))?;
        let mut hid = g.gelu(u);
        if let Some(keep) = opts.zero_activations.and_then(|m| m.layer(l)) {
            hid = g.column_mask(hid, &keep.units, true)?;
        }
        if let Some(keep) = opts.route_gradients.and_then(|m| m.layer(l)) {
            hid = g.column_mask(hid, &keep.units, false)?;
        }
        mlp_hidden.push(hid);
        let m = g.matmul(hid, p("mlp.w_2"), false)?;
        let m = g.add_row(m, p("mlp.b_2"))?;
        x = g.add(x, m)?;
        block_outputs.push(x);
    }

    let logits = if opts.stop_after_layer.is_some() {
        None
    } else {
        let xf = g.layer_norm(x, at("ln_f.gain"), at("ln_f.bias"))?;
        let unembed = if config.tie_embeddings { at("tok_emb") } else { at("unembed") };
        Some(g.matmul(xf, unembed, true)?)
    };

    Ok(ForwardPass {
        graph: g,
        logits,
        params: pv,
        block_outputs,
        head_outputs,
        mlp_hidden,
        zero_params: opts.zero_params.cloned(),
        batch: tokens.clone(),
    })
}

/// Gradient of a scalar with respect to every parameter, aligned with the
/// [`ParamSet`] declaration order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrads<T> {
    pub grads: Vec<Tensor<T>>,
}

impl<T: Float> ParamGrads<T> {
    pub fn zeros_like(params: &ParamSet<T>) -> Self {
        ParamGrads {
            grads: params.iter().map(|p| Tensor::zeros(p.value.shape().to_vec())).collect(),
        }
    }

    pub fn get(&self, i: usize) -> &Tensor<T> {
        &self.grads[i]
    }

    pub fn sum_sq(&self) -> f64 {
        self.grads.iter().map(Tensor::sum_sq).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().all(|g| g.data().iter().all(|x| x.is_finite()))
    }
}

impl<T: Float> ForwardPass<T> {
    pub fn batch(&self) -> &TokenBatch {
        &self.batch
    }

    /// Shift-by-one next-token cross entropy averaged over non-pad targets.
    pub fn lm_loss(&mut self) -> Result<Var> {
        let logits = self
            .logits
            .ok_or_else(|| Error::contract("forward pass stopped before the unembedding"))?;
        let targets = self.batch.targets();
        self.graph.cross_entropy(logits, &targets, IGNORE).map_err(|e| match e {
            Error::Contract(_) => Error::contract("every target position is padding"),
            other => other,
        })
    }

    /// Backward from `loss` into per-parameter gradients. Gradients of
    /// parameters zeroed for this pass are masked to zero on those elements.
    pub fn param_grads(&self, loss: Var) -> Result<ParamGrads<T>> {
        let mut grads = self.graph.backward(loss)?;
        let mut out = Vec::with_capacity(self.params.len());
        for (i, &v) in self.params.iter().enumerate() {
            let mut t = grads
                .take(v)
                .unwrap_or_else(|| Tensor::zeros(self.graph.value(v).shape().to_vec()));
            if let Some(ranges) = self.zero_params.as_ref().and_then(|m| m.ranges(i)) {
                for r in ranges {
                    t.data_mut()[r.clone()].fill(T::zero());
                }
            }
            out.push(t);
        }
        Ok(ParamGrads { grads: out })
    }

    pub fn logits_value(&self) -> Option<&Tensor<T>> {
        self.logits.map(|v| self.graph.value(v))
    }
}

/// Convenience: loss and parameter gradients of one batch.
pub fn loss_and_grads<T: Float>(
    config: &ModelConfig,
    params: &ParamSet<T>,
    tokens: &TokenBatch,
    opts: ForwardOptions<'_>,
) -> Result<(f64, ParamGrads<T>)> {
    let mut pass = forward(config, params, tokens, ForwardOptions { requires_grad: true, ..opts })?;
    let loss = pass.lm_loss()?;
    let value = pass.graph.value(loss).item().as_f64();
    Ok((value, pass.param_grads(loss)?))
}

/// Loss of one batch without recording gradients.
pub fn lm_loss<T: Float>(
    config: &ModelConfig,
    params: &ParamSet<T>,
    tokens: &TokenBatch,
    opts: ForwardOptions<'_>,
) -> Result<f64> {
    let mut pass = forward(config, params, tokens, ForwardOptions { requires_grad: false, ..opts })?;
    let loss = pass.lm_loss()?;
    Ok(pass.graph.value(loss).item().as_f64())
}
