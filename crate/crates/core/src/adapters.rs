//! Per-domain adapters for a frozen encoder.
//!
//! An adapter down-projects `d → d_s`, applies a transformation, and
//! up-projects back to `d`. Two transformations exist: projected attention
//! (PAL, multi-head self-attention inside the `d_s` space) and bottleneck
//! (BN, elementwise gelu). Each encoder layer carries two adapter instances,
//! one at the attention site and one at the feed-forward site, inserted
//! either serially (inside) or in parallel (aside):
//!
//! ```text
//! inside: SA(h) = LN(Adapter(MH(h)) + h)
//!         BL(h) = LN(Adapter(FFN(SA(h))) + SA(h))
//! aside:  SA(h) = LN(MH(h) + Adapter(h) + h)
//!         BL(h) = LN(FFN(SA(h)) + Adapter(SA(h)) + SA(h))
//! ```
//!
//! Inside adapters carry their own residual, `Adapter(x) = x + up(T(down x))`,
//! so a zero up-projection makes the adapted layer reproduce the plain one.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::encoder::{self, Dropout, EncoderLayerParams, INIT_STD, LN_EPS};
use crate::error::{Error, Result};
use crate::rng::{truncated_normal, SeededRng};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdapterStructure {
    Pal,
    Bn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdapterInsertion {
    Inside,
    Aside,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdapterSite {
    Attention,
    FeedForward,
}

impl AdapterSite {
    pub fn name(self) -> &'static str {
        match self {
            AdapterSite::Attention => "attn",
            AdapterSite::FeedForward => "ffn",
        }
    }
}

pub const DEFAULT_PAL_HEADS: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdapterConfig {
    pub structure: AdapterStructure,
    pub insertion: AdapterInsertion,
    pub d_s: usize,
    pub d: usize,
    /// Heads of the internal attention (PAL only).
    #[serde(default = "default_pal_heads")]
    pub pal_heads: usize,
}

fn default_pal_heads() -> usize {
    DEFAULT_PAL_HEADS
}

impl AdapterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_s == 0 {
            return Err(Error::Config("adapter width d_s must be at least 1".into()));
        }
        if self.d == 0 {
            return Err(Error::Config(
                "adapter host width d must be at least 1".into(),
            ));
        }
        if self.structure == AdapterStructure::Pal
            && (self.pal_heads == 0 || !self.d_s.is_multiple_of(self.pal_heads))
        {
            return Err(Error::Config(format!(
                "PAL width {} is not divisible by {} heads",
                self.d_s, self.pal_heads
            )));
        }
        Ok(())
    }
}

/// Weight-matrix count of one PAL instance: `3·d_s² + 2·d_s·d`.
pub fn pal_count(d_s: usize, d: usize) -> usize {
    3 * d_s * d_s + 2 * d_s * d
}

/// Weight-matrix count of one BN instance: `2·d_s·d`.
pub fn bn_count(d_s: usize, d: usize) -> usize {
    2 * d_s * d
}

/// Per-instance count under the weights-only formulas. Biases are reported
/// by [`adapter_bias_count`].
pub fn adapter_param_count(config: &AdapterConfig) -> Result<usize> {
    config.validate()?;
    Ok(match config.structure {
        AdapterStructure::Pal => pal_count(config.d_s, config.d),
        AdapterStructure::Bn => bn_count(config.d_s, config.d),
    })
}

/// Biases of one instance (down and up projections).
pub fn adapter_bias_count(config: &AdapterConfig) -> usize {
    config.d_s + config.d
}

/// Weights of every adapter in a model: two instances per layer.
pub fn model_adapter_budget(config: &AdapterConfig, n_layers: usize) -> Result<usize> {
    Ok(n_layers * 2 * adapter_param_count(config)?)
}

/// PAL width whose weight count is closest to a BN adapter of width `bn_ds`.
/// Candidates are the positive multiples of `pal_heads` up to `4·bn_ds`;
/// ties go to the smaller width. With 12 heads (BERT-base) this gives
/// 192 for `(256, 768)`.
pub fn match_pal_width(bn_ds: usize, d: usize, pal_heads: usize) -> Result<usize> {
    if bn_ds == 0 {
        return Err(Error::Config("bn_ds must be at least 1".into()));
    }
    if pal_heads == 0 {
        return Err(Error::Config("pal_heads must be at least 1".into()));
    }
    let target = bn_count(bn_ds, d) as i128;
    let mut best = pal_heads;
    let mut best_gap = i128::MAX;
    let mut d_s = pal_heads;
    // Always examine at least one multiple even when 4·bn_ds < pal_heads.
    while d_s <= (4 * bn_ds).max(pal_heads) {
        let gap = (pal_count(d_s, d) as i128 - target).abs();
        if gap < best_gap {
            best_gap = gap;
            best = d_s;
        }
        d_s += pal_heads;
    }
    Ok(best)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PalAttention<T = Tensor> {
    pub wq: Vec<T>,
    pub wk: Vec<T>,
    pub wv: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdapterParams<T = Tensor> {
    pub down: T,
    pub down_bias: T,
    pub up: T,
    pub up_bias: T,
    pub attention: Option<PalAttention<T>>,
}

impl<T> AdapterParams<T> {
    pub fn map<U>(&self, prefix: &str, f: &mut impl FnMut(&str, &T) -> U) -> AdapterParams<U> {
        AdapterParams {
            down: f(&format!("{prefix}/down"), &self.down),
            down_bias: f(&format!("{prefix}/down_bias"), &self.down_bias),
            up: f(&format!("{prefix}/up"), &self.up),
            up_bias: f(&format!("{prefix}/up_bias"), &self.up_bias),
            attention: self.attention.as_ref().map(|a| {
                let mut heads = |name: &str, v: &[T]| -> Vec<U> {
                    v.iter()
                        .enumerate()
                        .map(|(i, t)| f(&format!("{prefix}/attn/{name}/{i}"), t))
                        .collect()
                };
                PalAttention {
                    wq: heads("q", &a.wq),
                    wk: heads("k", &a.wk),
                    wv: heads("v", &a.wv),
                }
            }),
        }
    }

    pub fn for_each_mut(&mut self, prefix: &str, f: &mut impl FnMut(&str, &mut T)) {
        f(&format!("{prefix}/down"), &mut self.down);
        f(&format!("{prefix}/down_bias"), &mut self.down_bias);
        f(&format!("{prefix}/up"), &mut self.up);
        f(&format!("{prefix}/up_bias"), &mut self.up_bias);
        if let Some(a) = self.attention.as_mut() {
            for (name, v) in [("q", &mut a.wq), ("k", &mut a.wk), ("v", &mut a.wv)] {
                for (i, t) in v.iter_mut().enumerate() {
                    f(&format!("{prefix}/attn/{name}/{i}"), t);
                }
            }
        }
    }
}

impl AdapterParams<Tensor> {
    /// Down-projection truncated-normal, up-projection and biases zero, so a
    /// fresh adapter contributes nothing.
    pub fn init(config: &AdapterConfig, rng: &mut SeededRng) -> Result<Self> {
        config.validate()?;
        let (d, ds) = (config.d, config.d_s);
        let mut normal = |r: usize, c: usize| {
            Tensor::matrix(r, c, truncated_normal(rng, INIT_STD, r * c)).expect("sized")
        };
        let down = normal(ds, d);
        let attention = match config.structure {
            AdapterStructure::Bn => None,
            AdapterStructure::Pal => {
                let dh = ds / config.pal_heads;
                let mut heads = || (0..config.pal_heads).map(|_| normal(dh, ds)).collect();
                let wq = heads();
                let wk = heads();
                let wv = heads();
                Some(PalAttention { wq, wk, wv })
            }
        };
        Ok(Self {
            down,
            down_bias: Tensor::zeros(&[ds]),
            up: Tensor::zeros(&[d, ds]),
            up_bias: Tensor::zeros(&[d]),
            attention,
        })
    }

    /// Weight scalars actually held (projections plus internal attention).
    pub fn enumerated_weight_count(&self) -> usize {
        let attn = self.attention.as_ref().map_or(0, |a| {
            a.wq.iter().chain(&a.wk).chain(&a.wv).map(Tensor::len).sum()
        });
        self.down.len() + self.up.len() + attn
    }

    pub fn enumerated_bias_count(&self) -> usize {
        self.down_bias.len() + self.up_bias.len()
    }
}

/// The two adapter instances of one encoder layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerAdapters<T = Tensor> {
    pub attn: AdapterParams<T>,
    pub ffn: AdapterParams<T>,
}

impl<T> LayerAdapters<T> {
    pub fn map<U>(&self, prefix: &str, f: &mut impl FnMut(&str, &T) -> U) -> LayerAdapters<U> {
        LayerAdapters {
            attn: self
                .attn
                .map(&format!("{prefix}/{}", AdapterSite::Attention.name()), f),
            ffn: self
                .ffn
                .map(&format!("{prefix}/{}", AdapterSite::FeedForward.name()), f),
        }
    }

    pub fn for_each_mut(&mut self, prefix: &str, f: &mut impl FnMut(&str, &mut T)) {
        self.attn
            .for_each_mut(&format!("{prefix}/{}", AdapterSite::Attention.name()), f);
        self.ffn
            .for_each_mut(&format!("{prefix}/{}", AdapterSite::FeedForward.name()), f);
    }
}

/// One domain's adapters across all layers.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterSet<T = Tensor> {
    pub config: AdapterConfig,
    pub layers: Vec<LayerAdapters<T>>,
}

impl<T> AdapterSet<T> {
    /// Names follow `<prefix>/<layer>/<site>/<tensor>`.
    pub fn map<U>(&self, prefix: &str, f: &mut impl FnMut(&str, &T) -> U) -> AdapterSet<U> {
        AdapterSet {
            config: self.config,
            layers: self
                .layers
                .iter()
                .enumerate()
                .map(|(l, la)| la.map(&format!("{prefix}/{l}"), f))
                .collect(),
        }
    }

    pub fn for_each(&self, prefix: &str, f: &mut impl FnMut(&str, &T)) {
        self.map(prefix, &mut |n, t| f(n, t));
    }

    pub fn for_each_mut(&mut self, prefix: &str, f: &mut impl FnMut(&str, &mut T)) {
        for (l, la) in self.layers.iter_mut().enumerate() {
            la.for_each_mut(&format!("{prefix}/{l}"), f);
        }
    }
}

impl AdapterSet<Tensor> {
    pub fn init(config: &AdapterConfig, n_layers: usize, rng: &mut SeededRng) -> Result<Self> {
        let layers = (0..n_layers)
            .map(|_| {
                Ok(LayerAdapters {
                    attn: AdapterParams::init(config, rng)?,
                    ffn: AdapterParams::init(config, rng)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            config: *config,
            layers,
        })
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> AdapterSet<Var> {
        self.map("", &mut |_, t| g.leaf(t.clone(), trainable))
    }

    pub fn scalar_count(&self) -> usize {
        let mut n = 0;
        self.for_each("", &mut |_, t| n += t.len());
        n
    }
}

/// `up · T(down · x + b_down) + b_up` for every position of `x` (`L×d`),
/// without any residual.
pub fn adapter_forward(
    g: &mut Graph,
    x: Var,
    params: &AdapterParams<Var>,
    drop: &mut Dropout,
) -> Result<Var> {
    let z = g.matmul_nt(x, params.down)?;
    let z = g.add_row(z, params.down_bias)?;
    let t = match &params.attention {
        None => g.gelu(z),
        Some(a) => encoder::concat_heads(g, z, &a.wq, &a.wk, &a.wv, drop)?,
    };
    let out = g.matmul_nt(t, params.up)?;
    g.add_row(out, params.up_bias)
}

/// The adapter as used inside a layer: inside mode adds the pass-through
/// residual, aside mode does not (the layer equation supplies it).
pub fn adapter_apply(
    g: &mut Graph,
    x: Var,
    params: &AdapterParams<Var>,
    insertion: AdapterInsertion,
    drop: &mut Dropout,
) -> Result<Var> {
    let delta = adapter_forward(g, x, params, drop)?;
    match insertion {
        AdapterInsertion::Inside => g.add(x, delta),
        AdapterInsertion::Aside => Ok(delta),
    }
}

/// Self-attention sublayer with the attention-site adapter.
pub fn adapted_sa(
    g: &mut Graph,
    h: Var,
    layer: &EncoderLayerParams<Var>,
    adapter: &AdapterParams<Var>,
    insertion: AdapterInsertion,
    drop: &mut Dropout,
) -> Result<Var> {
    let mh = encoder::multi_head(g, h, layer, drop)?;
    let sum = match insertion {
        AdapterInsertion::Inside => {
            let a = adapter_apply(g, mh, adapter, insertion, drop)?;
            g.add(a, h)?
        }
        AdapterInsertion::Aside => {
            let a = adapter_apply(g, h, adapter, insertion, drop)?;
            let s = g.add(mh, a)?;
            g.add(s, h)?
        }
    };
    g.layer_norm(sum, layer.ln1_gain, layer.ln1_bias, LN_EPS)
}

/// Full layer with both adapter sites.
pub fn adapted_bl(
    g: &mut Graph,
    h: Var,
    layer: &EncoderLayerParams<Var>,
    adapters: &LayerAdapters<Var>,
    insertion: AdapterInsertion,
    drop: &mut Dropout,
) -> Result<Var> {
    let sa = adapted_sa(g, h, layer, &adapters.attn, insertion, drop)?;
    let f = encoder::ffn(g, sa, layer, drop)?;
    let sum = match insertion {
        AdapterInsertion::Inside => {
            let a = adapter_apply(g, f, &adapters.ffn, insertion, drop)?;
            g.add(a, sa)?
        }
        AdapterInsertion::Aside => {
            let a = adapter_apply(g, sa, &adapters.ffn, insertion, drop)?;
            let s = g.add(f, a)?;
            g.add(s, sa)?
        }
    };
    g.layer_norm(sum, layer.ln2_gain, layer.ln2_bias, LN_EPS)
}
