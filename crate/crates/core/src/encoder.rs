//! BERT-style transformer encoder.
//!
//! Each layer computes
//!
//! ```text
//! Attention_i(h_j) = Σ_t softmax_t(Wq_i h_j · Wk_i h_t / √(d/n)) · Wv_i h_t
//! MH(h)  = Wo · [Attention_1(h); …; Attention_n(h)]
//! SA(h)  = LN(h + MH(h))
//! FFN(h) = W2 · gelu(W1 h + b1) + b2
//! BL(h)  = LN(FFN(SA(h)) + SA(h))
//! ```
//!
//! Sequences are row-major `L×d` matrices, so a product `W·h_j` for every
//! position is computed as `h·Wᵀ` with `W` kept in its `out×in` layout.
//!
//! Parameter structs are generic over their storage: `T = Tensor` holds the
//! values, `T = Var` holds the same parameters bound into a [`Graph`].

use serde::{Deserialize, Serialize};

use crate::adapters::{self, AdapterInsertion, LayerAdapters};
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::rng::{truncated_normal, SeededRng};
use crate::tensor::Tensor;

pub const INIT_STD: f64 = 0.02;
pub const LN_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Gelu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub d: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub n_layers: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    #[serde(default)]
    pub activation: Activation,
    /// Dropout on attention weights and FFN outputs during training.
    #[serde(default = "default_dropout")]
    pub dropout: f64,
}

fn default_dropout() -> f64 {
    0.1
}

impl EncoderConfig {
    /// BERT-base dimensions.
    pub fn bert_base(vocab_size: usize) -> Self {
        Self {
            d: 768,
            n_heads: 12,
            d_ff: 3072,
            n_layers: 12,
            vocab_size,
            max_len: 512,
            activation: Activation::Gelu,
            dropout: 0.1,
        }
    }

    pub fn desk(vocab_size: usize) -> Self {
        Self {
            d: 32,
            n_heads: 2,
            d_ff: 64,
            n_layers: 2,
            vocab_size,
            max_len: 64,
            activation: Activation::Gelu,
            dropout: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.n_heads == 0 || self.d_ff == 0 || self.n_layers == 0 {
            return Err(Error::Config(format!(
                "encoder dimensions must be positive: {self:?}"
            )));
        }
        if !self.d.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d = {} is not divisible by n_heads = {}",
                self.d, self.n_heads
            )));
        }
        if self.max_len < 1 {
            return Err(Error::Config("max_len must be at least 1".into()));
        }
        if self.vocab_size < 4 {
            return Err(Error::Config(
                "vocab_size must be at least 4 (reserved tokens)".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout {} not in [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.n_heads
    }
}

/// Parameter counting conventions: the count of weight matrices
/// only, or every trainable scalar including biases, layer norms and
/// embedding tables.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamConvention {
    WeightsOnly,
    Full,
}

pub fn layer_weight_count(d: usize, d_ff: usize) -> usize {
    4 * d * d + 2 * d * d_ff
}

pub fn layer_full_count(d: usize, d_ff: usize) -> usize {
    layer_weight_count(d, d_ff) + d_ff + d + 2 * (2 * d)
}

pub fn embedding_count(config: &EncoderConfig) -> usize {
    (config.vocab_size + config.max_len + 2) * config.d
}

pub fn param_count(config: &EncoderConfig, convention: ParamConvention) -> Result<usize> {
    config.validate()?;
    let (d, d_ff) = (config.d, config.d_ff);
    Ok(match convention {
        ParamConvention::WeightsOnly => config.n_layers * layer_weight_count(d, d_ff),
        ParamConvention::Full => {
            config.n_layers * layer_full_count(d, d_ff) + embedding_count(config)
        }
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayerParams<T = Tensor> {
    pub wq: Vec<T>,
    pub wk: Vec<T>,
    pub wv: Vec<T>,
    pub wo: T,
    pub w1: T,
    pub b1: T,
    pub w2: T,
    pub b2: T,
    pub ln1_gain: T,
    pub ln1_bias: T,
    pub ln2_gain: T,
    pub ln2_bias: T,
}

impl<T> EncoderLayerParams<T> {
    pub fn map<U>(&self, prefix: &str, f: &mut impl FnMut(&str, &T) -> U) -> EncoderLayerParams<U> {
        let heads = |name: &str, v: &[T], f: &mut dyn FnMut(&str, &T) -> U| -> Vec<U> {
            v.iter()
                .enumerate()
                .map(|(i, t)| f(&format!("{prefix}/attn/{name}/{i}"), t))
                .collect()
        };
        EncoderLayerParams {
            wq: heads("q", &self.wq, f),
            wk: heads("k", &self.wk, f),
            wv: heads("v", &self.wv, f),
            wo: f(&format!("{prefix}/attn/o"), &self.wo),
            w1: f(&format!("{prefix}/ffn/w1"), &self.w1),
            b1: f(&format!("{prefix}/ffn/b1"), &self.b1),
            w2: f(&format!("{prefix}/ffn/w2"), &self.w2),
            b2: f(&format!("{prefix}/ffn/b2"), &self.b2),
            ln1_gain: f(&format!("{prefix}/ln1/gain"), &self.ln1_gain),
            ln1_bias: f(&format!("{prefix}/ln1/bias"), &self.ln1_bias),
            ln2_gain: f(&format!("{prefix}/ln2/gain"), &self.ln2_gain),
            ln2_bias: f(&format!("{prefix}/ln2/bias"), &self.ln2_bias),
        }
    }

    pub fn for_each_mut(&mut self, prefix: &str, f: &mut impl FnMut(&str, &mut T)) {
        for (name, v) in [
            ("q", &mut self.wq),
            ("k", &mut self.wk),
            ("v", &mut self.wv),
        ] {
            for (i, t) in v.iter_mut().enumerate() {
                f(&format!("{prefix}/attn/{name}/{i}"), t);
            }
        }
        f(&format!("{prefix}/attn/o"), &mut self.wo);
        f(&format!("{prefix}/ffn/w1"), &mut self.w1);
        f(&format!("{prefix}/ffn/b1"), &mut self.b1);
        f(&format!("{prefix}/ffn/w2"), &mut self.w2);
        f(&format!("{prefix}/ffn/b2"), &mut self.b2);
        f(&format!("{prefix}/ln1/gain"), &mut self.ln1_gain);
        f(&format!("{prefix}/ln1/bias"), &mut self.ln1_bias);
        f(&format!("{prefix}/ln2/gain"), &mut self.ln2_gain);
        f(&format!("{prefix}/ln2/bias"), &mut self.ln2_bias);
    }
}

impl EncoderLayerParams<Tensor> {
    pub fn init(config: &EncoderConfig, rng: &mut SeededRng) -> Self {
        let (d, dh, d_ff) = (config.d, config.head_dim(), config.d_ff);
        let mut normal = |r: usize, c: usize| {
            Tensor::matrix(r, c, truncated_normal(rng, INIT_STD, r * c)).expect("sized")
        };
        let per_head = |normal: &mut dyn FnMut(usize, usize) -> Tensor| {
            (0..config.n_heads)
                .map(|_| normal(dh, d))
                .collect::<Vec<_>>()
        };
        let wq = per_head(&mut normal);
        let wk = per_head(&mut normal);
        let wv = per_head(&mut normal);
        Self {
            wq,
            wk,
            wv,
            wo: normal(d, d),
            w1: normal(d_ff, d),
            b1: Tensor::zeros(&[d_ff]),
            w2: normal(d, d_ff),
            b2: Tensor::zeros(&[d]),
            ln1_gain: Tensor::full(&[d], 1.0),
            ln1_bias: Tensor::zeros(&[d]),
            ln2_gain: Tensor::full(&[d], 1.0),
            ln2_bias: Tensor::zeros(&[d]),
        }
    }

    /// Weight-matrix scalars only (the `4d² + 2·d·d_ff` convention),
    /// counted from the arrays actually held.
    pub fn enumerated_weight_count(&self) -> usize {
        let heads: usize = [&self.wq, &self.wk, &self.wv]
            .iter()
            .flat_map(|v| v.iter())
            .map(Tensor::len)
            .sum();
        heads + self.wo.len() + self.w1.len() + self.w2.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingParams<T = Tensor> {
    pub token: T,
    pub position: T,
    pub segment: T,
}

impl<T> EmbeddingParams<T> {
    pub fn map<U>(&self, prefix: &str, f: &mut impl FnMut(&str, &T) -> U) -> EmbeddingParams<U> {
        EmbeddingParams {
            token: f(&format!("{prefix}/token"), &self.token),
            position: f(&format!("{prefix}/position"), &self.position),
            segment: f(&format!("{prefix}/segment"), &self.segment),
        }
    }

    pub fn for_each_mut(&mut self, prefix: &str, f: &mut impl FnMut(&str, &mut T)) {
        f(&format!("{prefix}/token"), &mut self.token);
        f(&format!("{prefix}/position"), &mut self.position);
        f(&format!("{prefix}/segment"), &mut self.segment);
    }
}

/// Encoder weights: embeddings plus stacked layers.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams<T = Tensor> {
    pub embeddings: EmbeddingParams<T>,
    pub layers: Vec<EncoderLayerParams<T>>,
}

impl<T> EncoderParams<T> {
    pub fn map<U>(&self, prefix: &str, f: &mut impl FnMut(&str, &T) -> U) -> EncoderParams<U> {
        EncoderParams {
            embeddings: self.embeddings.map(&format!("{prefix}/embeddings"), f),
            layers: self
                .layers
                .iter()
                .enumerate()
                .map(|(l, layer)| layer.map(&format!("{prefix}/layer/{l}"), f))
                .collect(),
        }
    }

    pub fn for_each(&self, prefix: &str, f: &mut impl FnMut(&str, &T)) {
        self.map(prefix, &mut |n, t| f(n, t));
    }

    pub fn for_each_mut(&mut self, prefix: &str, f: &mut impl FnMut(&str, &mut T)) {
        self.embeddings
            .for_each_mut(&format!("{prefix}/embeddings"), f);
        for (l, layer) in self.layers.iter_mut().enumerate() {
            layer.for_each_mut(&format!("{prefix}/layer/{l}"), f);
        }
    }
}

impl EncoderParams<Tensor> {
    pub fn init(config: &EncoderConfig, rng: &mut SeededRng) -> Result<Self> {
        config.validate()?;
        let d = config.d;
        let mut table = |rows: usize| {
            Tensor::matrix(rows, d, truncated_normal(rng, INIT_STD, rows * d)).expect("sized")
        };
        let embeddings = EmbeddingParams {
            token: table(config.vocab_size),
            position: table(config.max_len),
            segment: table(2),
        };
        let layers = (0..config.n_layers)
            .map(|_| EncoderLayerParams::init(config, rng))
            .collect();
        Ok(Self { embeddings, layers })
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> EncoderParams<Var> {
        self.map("", &mut |_, t| g.leaf(t.clone(), trainable))
    }

    pub fn scalar_count(&self) -> usize {
        let mut n = 0;
        self.for_each("", &mut |_, t| n += t.len());
        n
    }
}

/// Optional dropout source threaded through a forward pass.
pub struct Dropout<'a> {
    pub rate: f64,
    pub rng: Option<&'a mut SeededRng>,
}

impl Dropout<'_> {
    pub fn none() -> Self {
        Dropout {
            rate: 0.0,
            rng: None,
        }
    }

    pub fn apply(&mut self, g: &mut Graph, x: Var) -> Var {
        match self.rng.as_deref_mut() {
            Some(rng) if self.rate > 0.0 => g.dropout(x, self.rate, rng),
            _ => x,
        }
    }
}

/// One attention head over all positions of `h` (`L×d_in`), with
/// projections stored `d_head×d_in`. Shared by the encoder and the
/// projected-attention adapter.
pub fn attention_head(
    g: &mut Graph,
    h: Var,
    wq: Var,
    wk: Var,
    wv: Var,
    drop: &mut Dropout,
) -> Result<Var> {
    let d_head = g.shape(wq)[0];
    let q = g.matmul_nt(h, wq)?;
    let k = g.matmul_nt(h, wk)?;
    let v = g.matmul_nt(h, wv)?;
    let scores = g.matmul_nt(q, k)?;
    let scores = g.scale(scores, 1.0 / (d_head as f64).sqrt());
    let weights = g.softmax(scores, 1)?;
    let weights = drop.apply(g, weights);
    g.matmul(weights, v)
}

/// All heads, concatenated per position.
pub fn concat_heads(
    g: &mut Graph,
    h: Var,
    wq: &[Var],
    wk: &[Var],
    wv: &[Var],
    drop: &mut Dropout,
) -> Result<Var> {
    let heads = (0..wq.len())
        .map(|i| attention_head(g, h, wq[i], wk[i], wv[i], drop))
        .collect::<Result<Vec<_>>>()?;
    if heads.len() == 1 {
        return Ok(heads[0]);
    }
    g.concat_cols(&heads)
}

pub fn multi_head(
    g: &mut Graph,
    h: Var,
    layer: &EncoderLayerParams<Var>,
    drop: &mut Dropout,
) -> Result<Var> {
    let cat = concat_heads(g, h, &layer.wq, &layer.wk, &layer.wv, drop)?;
    g.matmul_nt(cat, layer.wo)
}

/// `SA(h) = LN(h + MH(h))`.
pub fn sa_sublayer(
    g: &mut Graph,
    h: Var,
    layer: &EncoderLayerParams<Var>,
    drop: &mut Dropout,
) -> Result<Var> {
    let mh = multi_head(g, h, layer, drop)?;
    let sum = g.add(h, mh)?;
    g.layer_norm(sum, layer.ln1_gain, layer.ln1_bias, LN_EPS)
}

/// `FFN(h) = W2·gelu(W1·h + b1) + b2`, dropout on the output.
pub fn ffn(
    g: &mut Graph,
    h: Var,
    layer: &EncoderLayerParams<Var>,
    drop: &mut Dropout,
) -> Result<Var> {
    let inner = g.matmul_nt(h, layer.w1)?;
    let inner = g.add_row(inner, layer.b1)?;
    let act = g.gelu(inner);
    let out = g.matmul_nt(act, layer.w2)?;
    let out = g.add_row(out, layer.b2)?;
    Ok(drop.apply(g, out))
}

/// `BL(h) = LN(FFN(SA(h)) + SA(h))`, with `SA(h)` evaluated once.
pub fn bert_layer(
    g: &mut Graph,
    h: Var,
    layer: &EncoderLayerParams<Var>,
    drop: &mut Dropout,
) -> Result<Var> {
    let sa = sa_sublayer(g, h, layer, drop)?;
    let f = ffn(g, sa, layer, drop)?;
    let sum = g.add(f, sa)?;
    g.layer_norm(sum, layer.ln2_gain, layer.ln2_bias, LN_EPS)
}

/// Token + position + segment embeddings for one sequence.
pub fn embed(
    g: &mut Graph,
    config: &EncoderConfig,
    emb: &EmbeddingParams<Var>,
    tokens: &[usize],
    segments: &[usize],
) -> Result<Var> {
    if tokens.is_empty() {
        return Err(Error::Contract("cannot encode an empty sequence".into()));
    }
    if tokens.len() > config.max_len {
        return Err(Error::Contract(format!(
            "sequence length {} exceeds max_len {}; truncate before encoding",
            tokens.len(),
            config.max_len
        )));
    }
    if segments.len() != tokens.len() {
        return Err(Error::shape("encode", &[tokens.len()], &[segments.len()]));
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t >= config.vocab_size) {
        return Err(Error::IndexOutOfRange {
            index: bad,
            len: config.vocab_size,
            context: "token id",
        });
    }
    let positions: Vec<usize> = (0..tokens.len()).collect();
    let tok = g.gather_rows(emb.token, tokens)?;
    let pos = g.gather_rows(emb.position, &positions)?;
    let seg = g.gather_rows(emb.segment, segments)?;
    let sum = g.add(tok, pos)?;
    g.add(sum, seg)
}

/// Full encoder pass. With `adapters`, each layer routes through the adapted
/// sublayer equations for the given insertion mode.
pub fn encode(
    g: &mut Graph,
    config: &EncoderConfig,
    params: &EncoderParams<Var>,
    adapters: Option<(&[LayerAdapters<Var>], AdapterInsertion)>,
    tokens: &[usize],
    segments: &[usize],
    drop: &mut Dropout,
) -> Result<Var> {
    let mut h = embed(g, config, &params.embeddings, tokens, segments)?;
    for (l, layer) in params.layers.iter().enumerate() {
        h = match adapters {
            Some((set, insertion)) => {
                let site = set
                    .get(l)
                    .ok_or_else(|| Error::Contract(format!("no adapters bound for layer {l}")))?;
                adapters::adapted_bl(g, h, layer, site, insertion, drop)?
            }
            None => bert_layer(g, h, layer, drop)?,
        };
    }
    Ok(h)
}
