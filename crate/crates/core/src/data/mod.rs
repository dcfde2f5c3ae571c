//! Dataset ingestion and domain construction.
//!
//! Records arrive in the MRQA shared-task line format, are grouped into
//! ordered domains (by question type or by source collection), and are then
//! tokenized into [`QaExample`]s with token-level answer spans.

pub mod mrqa;
pub mod split;
pub mod synthetic;
pub mod tokenize;
pub mod vocab;

use serde::{Deserialize, Serialize};

use crate::metrics::normalize_answer;
use crate::qa::QaExample;
use tokenize::{tokenize, tokenize_with_offsets};
pub use vocab::Vocabulary;

/// One answer occurrence; `char_span` is inclusive, in characters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawAnswer {
    pub text: String,
    pub char_span: Option<(usize, usize)>,
}

/// One question about one context, before tokenization.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawRecord {
    pub id: String,
    pub context: String,
    pub question: String,
    pub answers: Vec<RawAnswer>,
    pub source_tag: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// Examples of one domain and split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub name: String,
    pub split: Split,
    pub records: Vec<QaExample>,
}

/// Raw records of one domain before tokenization.
#[derive(Debug, Clone, PartialEq)]
pub struct RawDomain {
    pub name: String,
    pub train: Vec<RawRecord>,
    pub test: Vec<RawRecord>,
}

/// A domain ready for training and evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct Domain {
    pub name: String,
    pub train: Vec<QaExample>,
    pub test: Vec<QaExample>,
}

impl Domain {
    pub fn train_spec(&self) -> DomainSpec {
        DomainSpec {
            name: self.name.clone(),
            split: Split::Train,
            records: self.train.clone(),
        }
    }

    pub fn test_spec(&self) -> DomainSpec {
        DomainSpec {
            name: self.name.clone(),
            split: Split::Test,
            records: self.test.clone(),
        }
    }
}

/// Counters for records dropped during conversion.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignStats {
    pub kept: usize,
    pub misaligned: usize,
    pub empty: usize,
}

impl AlignStats {
    pub fn merge(&mut self, other: AlignStats) {
        self.kept += other.kept;
        self.misaligned += other.misaligned;
        self.empty += other.empty;
    }
}

/// Token span covering every token that overlaps the inclusive character
/// span, or `None` when no token does.
pub fn char_to_token_span(
    tokens: &[tokenize::Token],
    char_span: (usize, usize),
) -> Option<(usize, usize)> {
    let (cs, ce) = char_span;
    let start = tokens.iter().position(|t| t.end > cs && t.start <= ce)?;
    let end = tokens.iter().rposition(|t| t.end > cs && t.start <= ce)?;
    Some((start, end))
}

/// Tokenizes a record and aligns its answer. Answers are tried earliest
/// character span first; the first whose token span normalizes to the
/// answer text wins. Records with no such answer are rejected.
pub fn to_example(record: &RawRecord, domain: &str) -> Result<QaExample, RecordIssue> {
    let question_tokens = tokenize(&record.question);
    let ctx = tokenize_with_offsets(&record.context);
    if question_tokens.is_empty() || ctx.is_empty() {
        return Err(RecordIssue::Empty);
    }
    let mut spans: Vec<(&RawAnswer, (usize, usize))> = record
        .answers
        .iter()
        .filter_map(|a| a.char_span.map(|s| (a, s)))
        .collect();
    spans.sort_by_key(|(_, s)| *s);
    let context_tokens: Vec<String> = ctx.iter().map(|t| t.text.clone()).collect();
    for (answer, cspan) in spans {
        let Some(span) = char_to_token_span(&ctx, cspan) else {
            continue;
        };
        let text = context_tokens[span.0..=span.1].join(" ");
        if normalize_answer(&text) != normalize_answer(&answer.text) {
            continue;
        }
        let mut gold_answers = vec![answer.text.clone()];
        for a in &record.answers {
            if !gold_answers.contains(&a.text) {
                gold_answers.push(a.text.clone());
            }
        }
        return Ok(QaExample {
            id: record.id.clone(),
            question_tokens,
            context_tokens,
            answer_text: answer.text.clone(),
            answer_span: span,
            gold_answers,
            domain: domain.to_string(),
        });
    }
    Err(RecordIssue::Misaligned)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RecordIssue {
    Empty,
    Misaligned,
}

pub fn to_examples(records: &[RawRecord], domain: &str) -> (Vec<QaExample>, AlignStats) {
    let mut stats = AlignStats::default();
    let mut out = Vec::with_capacity(records.len());
    for r in records {
        match to_example(r, domain) {
            Ok(ex) => {
                stats.kept += 1;
                out.push(ex);
            }
            Err(RecordIssue::Empty) => stats.empty += 1,
            Err(RecordIssue::Misaligned) => stats.misaligned += 1,
        }
    }
    (out, stats)
}

impl RawDomain {
    pub fn to_domain(&self) -> (Domain, AlignStats) {
        let (train, mut stats) = to_examples(&self.train, &self.name);
        let (test, s2) = to_examples(&self.test, &self.name);
        stats.merge(s2);
        (
            Domain {
                name: self.name.clone(),
                train,
                test,
            },
            stats,
        )
    }
}

/// Vocabulary over the training splits of every domain a run will see,
/// fixed before the first domain is trained.
pub fn build_vocab(domains: &[Domain], min_count: usize) -> Vocabulary {
    let tokens = domains.iter().flat_map(|d| {
        d.train
            .iter()
            .flat_map(|ex| ex.question_tokens.iter().chain(&ex.context_tokens))
    });
    Vocabulary::build(tokens.map(String::as_str), min_count)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qa::QaExample;

    fn record(context: &str, answer: &str, span: Option<(usize, usize)>) -> RawRecord {
        RawRecord {
            id: "r1".into(),
            context: context.into(),
            question: "Who did it?".into(),
            answers: vec![RawAnswer {
                text: answer.into(),
                char_span: span,
            }],
            source_tag: "t".into(),
        }
    }

    #[test]
    fn char_span_alignment_uses_overlapping_tokens() {
        let r = record("It was Marie Curie, in 1903.", "Marie Curie", Some((7, 17)));
        let ex = to_example(&r, "d").unwrap();
        assert_eq!(ex.answer_span, (2, 3));
        assert_eq!(ex.span_text(2, 3), "marie curie");
        // span that starts mid-token still covers the whole token
        let r = record("It was Marie Curie, in 1903.", "Marie Curie", Some((8, 16)));
        assert_eq!(to_example(&r, "d").unwrap().answer_span, (2, 3));
    }

    #[test]
    fn misaligned_and_missing_spans_are_rejected() {
        let r = record("It was Marie Curie.", "Pierre", Some((7, 11)));
        assert_eq!(to_example(&r, "d"), Err(RecordIssue::Misaligned));
        let r = record("It was Marie Curie.", "Marie", None);
        assert_eq!(to_example(&r, "d"), Err(RecordIssue::Misaligned));
        let r = record("", "x", Some((0, 0)));
        assert_eq!(to_example(&r, "d"), Err(RecordIssue::Empty));
    }

    #[test]
    fn earliest_span_wins() {
        let mut r = record("cat sat near a cat", "cat", Some((15, 17)));
        r.answers.push(RawAnswer {
            text: "cat".into(),
            char_span: Some((0, 2)),
        });
        assert_eq!(to_example(&r, "d").unwrap().answer_span, (0, 0));
    }

    fn ex(q: &[&str], c: &[&str]) -> QaExample {
        QaExample {
            id: "x".into(),
            question_tokens: q.iter().map(|s| s.to_string()).collect(),
            context_tokens: c.iter().map(|s| s.to_string()).collect(),
            answer_text: c[0].into(),
            answer_span: (0, 0),
            gold_answers: vec![c[0].into()],
            domain: "d".into(),
        }
    }

    #[test]
    fn vocab_covers_training_splits_only() {
        let d = Domain {
            name: "d".into(),
            train: vec![ex(&["what"], &["alpha", "beta"])],
            test: vec![ex(&["who"], &["gamma"])],
        };
        let v = build_vocab(&[d], 1);
        assert_ne!(v.id("alpha"), vocab::UNK);
        assert_eq!(v.id("gamma"), vocab::UNK);
    }
}
