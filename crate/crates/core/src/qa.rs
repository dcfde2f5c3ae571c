//! Span extraction: pair packing, the start/end output layer, the span
//! decoding rule and the training loss.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::data::tokenize::detokenize;
use crate::data::vocab::{Vocabulary, CLS, SEP};
use crate::encoder::INIT_STD;
use crate::error::{Error, Result};
use crate::rng::{truncated_normal, SeededRng};
use crate::tensor::Tensor;

pub const DEFAULT_MAX_ANSWER_LENGTH: usize = 30;

/// One tokenized (question, context, answer) triple.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaExample {
    pub id: String,
    pub question_tokens: Vec<String>,
    pub context_tokens: Vec<String>,
    pub answer_text: String,
    /// Inclusive token span into `context_tokens`.
    pub answer_span: (usize, usize),
    /// Every acceptable answer string, `answer_text` first.
    pub gold_answers: Vec<String>,
    pub domain: String,
}

impl QaExample {
    pub fn span_text(&self, start: usize, end: usize) -> String {
        detokenize(&self.context_tokens[start..=end])
    }
}

/// `[CLS] question [SEP] context [SEP]` as ids and segment ids, with the
/// context positions that may hold an answer.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedInput {
    pub ids: Vec<usize>,
    pub segments: Vec<usize>,
    /// First sequence position of the context.
    pub context_start: usize,
    /// Context tokens kept after truncation.
    pub context_len: usize,
}

impl PackedInput {
    pub fn context_mask(&self) -> Vec<bool> {
        (0..self.ids.len())
            .map(|i| i >= self.context_start && i < self.context_start + self.context_len)
            .collect()
    }

    pub fn context_range(&self) -> std::ops::Range<usize> {
        self.context_start..self.context_start + self.context_len
    }

    /// Maps an inclusive context-token span to sequence positions, or `None`
    /// when truncation cut the span off.
    pub fn to_sequence_span(&self, span: (usize, usize)) -> Option<(usize, usize)> {
        (span.1 < self.context_len)
            .then(|| (span.0 + self.context_start, span.1 + self.context_start))
    }
}

/// Packs a pair, truncating the context (never the question) to `max_len`.
pub fn encode_pair(
    question: &[String],
    context: &[String],
    vocab: &Vocabulary,
    max_len: usize,
) -> Result<PackedInput> {
    if question.len() + 3 > max_len {
        return Err(Error::InputTooLong(format!(
            "question of {} tokens does not fit max_len {max_len}",
            question.len()
        )));
    }
    let room = max_len - question.len() - 3;
    let context_len = context.len().min(room);
    let mut ids = Vec::with_capacity(question.len() + context_len + 3);
    ids.push(CLS);
    ids.extend(question.iter().map(|t| vocab.id(t)));
    ids.push(SEP);
    let context_start = ids.len();
    ids.extend(context[..context_len].iter().map(|t| vocab.id(t)));
    ids.push(SEP);
    let segments = (0..ids.len())
        .map(|i| usize::from(i >= context_start))
        .collect();
    Ok(PackedInput {
        ids,
        segments,
        context_start,
        context_len,
    })
}

/// A decoded span in sequence positions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpanChoice {
    pub start: usize,
    pub end: usize,
    /// Sum of start and end log-probabilities (softmax over masked positions).
    pub score: f64,
}

/// Prediction record, also the line format of prediction exports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpanPrediction {
    pub id: String,
    pub text: String,
    /// Inclusive context-token indices.
    pub start: usize,
    pub end: usize,
    pub score: f64,
}

fn masked_log_softmax(logits: &[f64], mask: &[bool]) -> Vec<f64> {
    let max = logits
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(v, _)| *v)
        .fold(f64::NEG_INFINITY, f64::max);
    let lse = max
        + logits
            .iter()
            .zip(mask)
            .filter(|(_, &m)| m)
            .map(|(v, _)| (v - max).exp())
            .sum::<f64>()
            .ln();
    logits.iter().map(|v| v - lse).collect()
}

/// Best `(s, e)` with `s ≤ e`, `e − s < max_answer_length`, both masked in.
/// Ties go to the smaller `s`, then the smaller `e`.
pub fn predict_span(
    start_logits: &[f64],
    end_logits: &[f64],
    mask: &[bool],
    max_answer_length: usize,
) -> Result<SpanChoice> {
    if start_logits.len() != mask.len() || end_logits.len() != mask.len() {
        return Err(Error::shape(
            "predict_span",
            &[start_logits.len(), end_logits.len()],
            &[mask.len()],
        ));
    }
    if !mask.iter().any(|&m| m) {
        return Err(Error::NoContext);
    }
    if max_answer_length == 0 {
        return Err(Error::Config("max_answer_length must be positive".into()));
    }
    let ls = masked_log_softmax(start_logits, mask);
    let le = masked_log_softmax(end_logits, mask);
    let mut best: Option<(f64, usize, usize)> = None;
    for s in (0..mask.len()).filter(|&s| mask[s]) {
        let last = (s + max_answer_length).min(mask.len());
        for e in (s..last).filter(|&e| mask[e]) {
            let raw = start_logits[s] + end_logits[e];
            if best.is_none_or(|(b, _, _)| raw > b) {
                best = Some((raw, s, e));
            }
        }
    }
    let (_, start, end) = best.expect("mask is nonempty");
    Ok(SpanChoice {
        start,
        end,
        score: ls[start] + le[end],
    })
}

/// Linear start/end output layer: `logits = H·Wᵀ + b`, `W` is `2×d`.
#[derive(Debug, Clone, PartialEq)]
pub struct QaHead<T = Tensor> {
    pub weight: T,
    pub bias: T,
}

impl<T> QaHead<T> {
    pub fn map<U>(&self, prefix: &str, f: &mut impl FnMut(&str, &T) -> U) -> QaHead<U> {
        QaHead {
            weight: f(&format!("{prefix}/weight"), &self.weight),
            bias: f(&format!("{prefix}/bias"), &self.bias),
        }
    }

    pub fn for_each_mut(&mut self, prefix: &str, f: &mut impl FnMut(&str, &mut T)) {
        f(&format!("{prefix}/weight"), &mut self.weight);
        f(&format!("{prefix}/bias"), &mut self.bias);
    }
}

impl QaHead<Tensor> {
    pub fn init(d: usize, rng: &mut SeededRng) -> Self {
        Self {
            weight: Tensor::matrix(2, d, truncated_normal(rng, INIT_STD, 2 * d)).expect("sized"),
            bias: Tensor::zeros(&[2]),
        }
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> QaHead<Var> {
        self.map("", &mut |_, t| g.leaf(t.clone(), trainable))
    }

    pub fn scalar_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

/// Start and end logit vectors over every sequence position.
pub fn span_logits(g: &mut Graph, hidden: Var, head: &QaHead<Var>) -> Result<(Var, Var)> {
    let logits = g.matmul_nt(hidden, head.weight)?;
    let logits = g.add_row(logits, head.bias)?;
    Ok((g.column(logits, 0)?, g.column(logits, 1)?))
}

/// `CE(start, s) + CE(end, e)` with both softmaxes restricted to the
/// context positions. `gold` is in sequence positions.
pub fn qa_loss(
    g: &mut Graph,
    start_logits: Var,
    end_logits: Var,
    context: std::ops::Range<usize>,
    gold: (usize, usize),
) -> Result<Var> {
    if !context.contains(&gold.0) || !context.contains(&gold.1) || gold.0 > gold.1 {
        return Err(Error::Contract(format!(
            "gold span {gold:?} outside context positions {context:?}"
        )));
    }
    let s = g.slice_rows(start_logits, context.start, context.end)?;
    let e = g.slice_rows(end_logits, context.start, context.end)?;
    let ls = g.cross_entropy(s, gold.0 - context.start)?;
    let le = g.cross_entropy(e, gold.1 - context.start)?;
    g.add(ls, le)
}
