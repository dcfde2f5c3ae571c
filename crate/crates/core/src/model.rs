//! The span-extraction model (encoder + output head, optionally adapted) and
//! per-domain evaluation.

use std::collections::BTreeMap;

use crate::adapters::{AdapterInsertion, AdapterSet};
use crate::autograd::{Graph, Var};
use crate::data::vocab::Vocabulary;
use crate::encoder::{self, Dropout, EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::metrics::{em_score, f1_score, max_over_golds};
use crate::qa::{self, encode_pair, predict_span, PackedInput, QaExample, QaHead, SpanPrediction};
use crate::results::Score;
use crate::rng::SeededRng;
use crate::tensor::Tensor;

/// Named parameter snapshot, sorted by name.
pub type ParamMap = BTreeMap<String, Tensor>;

pub const ENCODER_PREFIX: &str = "encoder";
pub const HEAD_PREFIX: &str = "head";
pub const ADAPTER_PREFIX: &str = "adapter";

/// Encoder plus a single QA head.
#[derive(Debug, Clone, PartialEq)]
pub struct QaModel {
    pub config: EncoderConfig,
    pub encoder: EncoderParams,
    pub head: QaHead,
}

impl QaModel {
    pub fn init(config: EncoderConfig, rng: &mut SeededRng) -> Result<Self> {
        let encoder = EncoderParams::init(&config, rng)?;
        let head = QaHead::init(config.d, rng);
        Ok(Self {
            config,
            encoder,
            head,
        })
    }

    pub fn params(&self) -> ParamMap {
        let mut out = ParamMap::new();
        self.encoder.for_each(ENCODER_PREFIX, &mut |n, t| {
            out.insert(n.to_string(), t.clone());
        });
        self.head.map(HEAD_PREFIX, &mut |n, t| {
            out.insert(n.to_string(), t.clone());
        });
        out
    }

    pub fn for_each_mut(&mut self, f: &mut impl FnMut(&str, &mut Tensor)) {
        self.encoder.for_each_mut(ENCODER_PREFIX, f);
        self.head.for_each_mut(HEAD_PREFIX, f);
    }

    pub fn backbone_params(&self) -> ParamMap {
        let mut out = ParamMap::new();
        self.encoder.for_each(ENCODER_PREFIX, &mut |n, t| {
            out.insert(n.to_string(), t.clone());
        });
        out
    }

    pub fn view<'a>(&'a self, vocab: &'a Vocabulary, max_answer_length: usize) -> ModelView<'a> {
        ModelView {
            config: &self.config,
            encoder: &self.encoder,
            head: &self.head,
            adapters: None,
            vocab,
            max_answer_length,
        }
    }
}

/// Parameters bound into one graph, plus the trainable subset by name.
pub struct Bound {
    pub encoder: EncoderParams<Var>,
    pub head: QaHead<Var>,
    pub adapters: Option<AdapterSet<Var>>,
    pub trainable: Vec<(String, Var)>,
}

impl Bound {
    pub fn bind(
        g: &mut Graph,
        encoder: (&EncoderParams, bool),
        head: (&QaHead, &str, bool),
        adapters: Option<(&AdapterSet, &str, bool)>,
    ) -> Self {
        let mut trainable = Vec::new();
        let mut leaf = |g: &mut Graph, name: &str, t: &Tensor, train: bool| {
            let v = g.leaf(t.clone(), train);
            if train {
                trainable.push((name.to_string(), v));
            }
            v
        };
        let enc = encoder
            .0
            .map(ENCODER_PREFIX, &mut |n, t| leaf(g, n, t, encoder.1));
        let hd = head.0.map(head.1, &mut |n, t| leaf(g, n, t, head.2));
        let ad =
            adapters.map(|(set, prefix, train)| set.map(prefix, &mut |n, t| leaf(g, n, t, train)));
        Bound {
            encoder: enc,
            head: hd,
            adapters: ad,
            trainable,
        }
    }

    /// Start/end logits for one packed input.
    pub fn logits(
        &self,
        g: &mut Graph,
        config: &EncoderConfig,
        input: &PackedInput,
        drop: &mut Dropout,
    ) -> Result<(Var, Var)> {
        let adapters = self
            .adapters
            .as_ref()
            .map(|a| (a.layers.as_slice(), a.config.insertion));
        let hidden = encoder::encode(
            g,
            config,
            &self.encoder,
            adapters,
            &input.ids,
            &input.segments,
            drop,
        )?;
        qa::span_logits(g, hidden, &self.head)
    }
}

/// Read-only view of whatever scores one domain: backbone, head, and the
/// domain's adapters when present.
#[derive(Clone, Copy)]
pub struct ModelView<'a> {
    pub config: &'a EncoderConfig,
    pub encoder: &'a EncoderParams,
    pub head: &'a QaHead,
    pub adapters: Option<&'a AdapterSet>,
    pub vocab: &'a Vocabulary,
    pub max_answer_length: usize,
}

impl ModelView<'_> {
    pub fn insertion(&self) -> Option<AdapterInsertion> {
        self.adapters.map(|a| a.config.insertion)
    }

    /// Raw start/end logits over the packed sequence, graph-free.
    pub fn logits(&self, ex: &QaExample) -> Result<(PackedInput, Vec<f64>, Vec<f64>)> {
        let input = encode_pair(
            &ex.question_tokens,
            &ex.context_tokens,
            self.vocab,
            self.config.max_len,
        )?;
        let mut g = Graph::inference();
        let bound = Bound::bind(
            &mut g,
            (self.encoder, false),
            (self.head, HEAD_PREFIX, false),
            self.adapters.map(|a| (a, ADAPTER_PREFIX, false)),
        );
        let (s, e) = bound.logits(&mut g, self.config, &input, &mut Dropout::none())?;
        let (s, e) = (g.value(s).data().to_vec(), g.value(e).data().to_vec());
        Ok((input, s, e))
    }

    pub fn predict(&self, ex: &QaExample) -> Result<SpanPrediction> {
        let (input, s, e) = self.logits(ex)?;
        let choice = predict_span(&s, &e, &input.context_mask(), self.max_answer_length)?;
        let (start, end) = (
            choice.start - input.context_start,
            choice.end - input.context_start,
        );
        Ok(SpanPrediction {
            id: ex.id.clone(),
            text: ex.span_text(start, end),
            start,
            end,
            score: choice.score,
        })
    }
}

/// Anything that can answer a question; routing models pick the parameters
/// by the example's domain label.
pub trait Predictor {
    fn predict(&self, ex: &QaExample) -> Result<SpanPrediction>;
}

impl Predictor for ModelView<'_> {
    fn predict(&self, ex: &QaExample) -> Result<SpanPrediction> {
        ModelView::predict(self, ex)
    }
}

/// Per-example scores and their mean, in percentage points.
#[derive(Debug, Clone)]
pub struct DomainEvaluation {
    pub score: Score,
    pub predictions: Vec<SpanPrediction>,
}

pub fn score_prediction(pred: &SpanPrediction, ex: &QaExample) -> (f64, f64) {
    (
        max_over_golds(&pred.text, &ex.gold_answers, em_score),
        max_over_golds(&pred.text, &ex.gold_answers, f1_score),
    )
}

/// Mean EM and F1 (×100) over a domain's examples. Sums run in example
/// order, so the result only depends on the multiset of examples up to
/// floating-point reassociation.
pub fn evaluate_domain(model: &dyn Predictor, examples: &[QaExample]) -> Result<DomainEvaluation> {
    if examples.is_empty() {
        return Err(Error::Data("cannot evaluate an empty domain".into()));
    }
    let mut em = 0.0;
    let mut f1 = 0.0;
    let mut predictions = Vec::with_capacity(examples.len());
    for ex in examples {
        let pred = model.predict(ex)?;
        let (e, f) = score_prediction(&pred, ex);
        em += e;
        f1 += f;
        predictions.push(pred);
    }
    let n = examples.len() as f64;
    Ok(DomainEvaluation {
        score: Score {
            em: 100.0 * em / n,
            f1: 100.0 * f1 / n,
        },
        predictions,
    })
}

/// Euclidean distance between two snapshots over their shared names.
pub fn param_distance(a: &ParamMap, b: &ParamMap) -> Result<f64> {
    let mut acc = 0.0;
    for (name, ta) in a {
        let tb = b
            .get(name)
            .ok_or_else(|| Error::Contract(format!("parameter {name} missing from snapshot")))?;
        if ta.shape() != tb.shape() {
            return Err(Error::shape("param_distance", ta.shape(), tb.shape()));
        }
        for (x, y) in ta.data().iter().zip(tb.data()) {
            acc += (x - y) * (x - y);
        }
    }
    Ok(acc.sqrt())
}
