//! Domain construction: question-type domains (drift in the question
//! distribution) and source-collection domains (drift in context type).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::tokenize::{is_word, tokenize};
use super::{DomainSpec, RawDomain, RawRecord};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, permutation, seeded};

pub const QUESTION_WORDS: [&str; 7] = ["what", "which", "where", "when", "how", "why", "who"];
pub const OTHER: &str = "other";

/// Default domain order of the question-type benchmark.
pub const CDA_Q_ORDER: [&str; 8] = [
    "what", "which", "where", "when", "how", "why", "other", "who",
];

/// Default domain order of the context-type benchmark.
pub const CDA_C_ORDER: [&str; 5] = ["wiki", "news", "scripts", "book", "tweet"];

pub const FULL_TRAIN_PER_DOMAIN: usize = 10_000;
pub const DESK_TRAIN_PER_DOMAIN: usize = 500;
pub const DESK_TEST_PER_DOMAIN: usize = 200;

/// Question-type label: the first question word among the first three word
/// tokens (left to right), else the last word if it is a question word,
/// else `other`.
pub fn question_type(question: &str) -> &'static str {
    let words: Vec<String> = tokenize(question)
        .into_iter()
        .filter(|t| is_word(t))
        .collect();
    let lookup = |w: &str| QUESTION_WORDS.iter().copied().find(|q| *q == w);
    for w in words.iter().take(3) {
        if let Some(q) = lookup(w) {
            return q;
        }
    }
    words.last().and_then(|w| lookup(w)).unwrap_or(OTHER)
}

/// How test records are obtained for a domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitPolicy {
    /// Fraction of each domain's records held out for test when no
    /// separate test records are supplied.
    pub test_fraction: f64,
    /// Cap on training records per domain, sampled without replacement.
    pub n_train: Option<usize>,
    /// Cap on test records per domain.
    pub n_test: Option<usize>,
    pub seed: u64,
}

impl Default for SplitPolicy {
    fn default() -> Self {
        Self {
            test_fraction: 0.2,
            n_train: Some(DESK_TRAIN_PER_DOMAIN),
            n_test: Some(DESK_TEST_PER_DOMAIN),
            seed: 0,
        }
    }
}

impl SplitPolicy {
    fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.test_fraction) {
            return Err(Error::Config(format!(
                "test_fraction {} not in [0, 1)",
                self.test_fraction
            )));
        }
        Ok(())
    }
}

/// Seeded sample of at most `n` records, without replacement, kept in
/// their original relative order.
pub fn sample_without_replacement(records: &[RawRecord], n: usize, seed: u64) -> Vec<RawRecord> {
    if n >= records.len() {
        return records.to_vec();
    }
    let mut rng = seeded(seed);
    let mut picked = permutation(&mut rng, records.len());
    picked.truncate(n);
    picked.sort_unstable();
    picked.into_iter().map(|i| records[i].clone()).collect()
}

/// Splits one domain's pool into train and test, then applies the caps.
fn split_pool(
    name: &str,
    pool: Vec<RawRecord>,
    test: Option<Vec<RawRecord>>,
    policy: &SplitPolicy,
) -> RawDomain {
    let (train, test) = match test {
        Some(t) => (pool, t),
        None => {
            let mut rng = seeded(derive_seed(policy.seed, &format!("holdout/{name}")));
            let order = permutation(&mut rng, pool.len());
            let n_test = ((pool.len() as f64) * policy.test_fraction).round() as usize;
            let mut test_idx: Vec<usize> = order[..n_test].to_vec();
            let mut train_idx: Vec<usize> = order[n_test..].to_vec();
            test_idx.sort_unstable();
            train_idx.sort_unstable();
            (
                train_idx.into_iter().map(|i| pool[i].clone()).collect(),
                test_idx.into_iter().map(|i| pool[i].clone()).collect(),
            )
        }
    };
    let train = match policy.n_train {
        Some(n) => sample_without_replacement(
            &train,
            n,
            derive_seed(policy.seed, &format!("train/{name}")),
        ),
        None => train,
    };
    let test = match policy.n_test {
        Some(n) => {
            sample_without_replacement(&test, n, derive_seed(policy.seed, &format!("test/{name}")))
        }
        None => test,
    };
    RawDomain {
        name: name.to_string(),
        train,
        test,
    }
}

/// Eight question-type domains in the default order. When `test` records
/// are supplied they are partitioned the same way instead of holding out a
/// fraction of `records`.
pub fn build_cda_q(
    records: Vec<RawRecord>,
    test: Option<Vec<RawRecord>>,
    policy: &SplitPolicy,
) -> Result<Vec<RawDomain>> {
    policy.validate()?;
    let partition = |recs: Vec<RawRecord>| {
        let mut groups: BTreeMap<&'static str, Vec<RawRecord>> = BTreeMap::new();
        for r in recs {
            groups
                .entry(question_type(&r.question))
                .or_default()
                .push(r);
        }
        groups
    };
    let mut train_groups = partition(records);
    let mut test_groups = test.map(partition);
    Ok(CDA_Q_ORDER
        .iter()
        .map(|&name| {
            let pool = train_groups.remove(name).unwrap_or_default();
            let held = test_groups
                .as_mut()
                .map(|g| g.remove(name).unwrap_or_default());
            split_pool(name, pool, held, policy)
        })
        .collect())
}

/// One source collection for the context-type benchmark.
#[derive(Debug, Clone)]
pub struct TaggedCollection {
    pub tag: String,
    pub records: Vec<RawRecord>,
    pub test: Option<Vec<RawRecord>>,
}

/// One domain per source tag. Tags that appear in the default order come
/// first in that order; any others follow in input order.
pub fn build_cda_c(
    collections: Vec<TaggedCollection>,
    policy: &SplitPolicy,
) -> Result<Vec<RawDomain>> {
    policy.validate()?;
    if collections.is_empty() {
        return Err(Error::Data("no source collections given".into()));
    }
    let mut seen = std::collections::HashSet::new();
    for c in &collections {
        if !seen.insert(c.tag.clone()) {
            return Err(Error::Config(format!("duplicate source tag {}", c.tag)));
        }
    }
    let rank = |tag: &str| {
        CDA_C_ORDER
            .iter()
            .position(|t| *t == tag)
            .unwrap_or(usize::MAX)
    };
    let mut ordered: Vec<(usize, TaggedCollection)> = collections.into_iter().enumerate().collect();
    ordered.sort_by_key(|(i, c)| (rank(&c.tag), *i));
    Ok(ordered
        .into_iter()
        .map(|(_, c)| split_pool(&c.tag, c.records, c.test, policy))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub count: usize,
    pub mean_question_words: f64,
    pub mean_answer_words: f64,
    pub mean_context_words: f64,
}

/// Averages of word counts (punctuation tokens excluded).
pub fn dataset_stats(spec: &DomainSpec) -> DatasetStats {
    let n = spec.records.len();
    if n == 0 {
        return DatasetStats {
            count: 0,
            mean_question_words: 0.0,
            mean_answer_words: 0.0,
            mean_context_words: 0.0,
        };
    }
    let words = |toks: &[String]| toks.iter().filter(|t| is_word(t)).count() as f64;
    let (mut q, mut a, mut c) = (0.0, 0.0, 0.0);
    for ex in &spec.records {
        q += words(&ex.question_tokens);
        a += words(&tokenize(&ex.answer_text));
        c += words(&ex.context_tokens);
    }
    let n = n as f64;
    DatasetStats {
        count: spec.records.len(),
        mean_question_words: q / n,
        mean_answer_words: a / n,
        mean_context_words: c / n,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{RawAnswer, Split};
    use crate::qa::QaExample;
    use proptest::prelude::*;

    fn rec(id: usize, q: &str) -> RawRecord {
        RawRecord {
            id: format!("r{id}"),
            context: "ctx".into(),
            question: q.into(),
            answers: vec![RawAnswer {
                text: "ctx".into(),
                char_span: Some((0, 2)),
            }],
            source_tag: "s".into(),
        }
    }

    #[test]
    fn question_type_branches() {
        assert_eq!(question_type("what is the capital of france"), "what");
        assert_eq!(question_type("the capital of france is where"), "where");
        assert_eq!(question_type("name the capital of france"), OTHER);
        assert_eq!(question_type("In 1990, who won?"), "who");
        assert_eq!(question_type("The team that won was which?"), "which");
        assert_eq!(question_type("and then why how"), "why");
        assert_eq!(question_type("tell me"), OTHER);
        assert_eq!(question_type("?"), OTHER);
    }

    #[test]
    fn cda_q_order_and_partition() {
        let recs: Vec<RawRecord> = ["what a", "who b", "when c", "x y z", "why"]
            .iter()
            .enumerate()
            .map(|(i, q)| rec(i, q))
            .collect();
        let policy = SplitPolicy {
            test_fraction: 0.0,
            n_train: None,
            n_test: None,
            seed: 1,
        };
        let domains = build_cda_q(recs, None, &policy).unwrap();
        let names: Vec<&str> = domains.iter().map(|d| d.name.as_str()).collect();
        assert_eq!(names, CDA_Q_ORDER);
        let total: usize = domains.iter().map(|d| d.train.len()).sum();
        assert_eq!(total, 5);
        assert_eq!(domains[6].train[0].question, "x y z");
    }

    #[test]
    fn cda_c_sampling_is_seeded_and_ordered() {
        let pool: Vec<RawRecord> = (0..50).map(|i| rec(i, "what")).collect();
        let make = |tag: &str| TaggedCollection {
            tag: tag.into(),
            records: pool.clone(),
            test: None,
        };
        let policy = SplitPolicy {
            test_fraction: 0.2,
            n_train: Some(10),
            n_test: Some(5),
            seed: 9,
        };
        let a = build_cda_c(vec![make("tweet"), make("custom"), make("wiki")], &policy).unwrap();
        let names: Vec<&str> = a.iter().map(|d| d.name.as_str()).collect();
        assert_eq!(names, ["wiki", "tweet", "custom"]);
        let b = build_cda_c(vec![make("tweet"), make("custom"), make("wiki")], &policy).unwrap();
        assert_eq!(a, b);
        for d in &a {
            assert_eq!(d.train.len(), 10);
            assert_eq!(d.test.len(), 5);
            let mut ids: Vec<&str> = d
                .train
                .iter()
                .chain(&d.test)
                .map(|r| r.id.as_str())
                .collect();
            ids.sort_unstable();
            ids.dedup();
            assert_eq!(ids.len(), 15, "train and test overlap or repeat");
        }
        assert!(build_cda_c(vec![make("a"), make("a")], &policy).is_err());
    }

    #[test]
    fn stats_examples() {
        let empty = DomainSpec {
            name: "e".into(),
            split: Split::Train,
            records: vec![],
        };
        assert_eq!(dataset_stats(&empty).count, 0);
        assert_eq!(dataset_stats(&empty).mean_question_words, 0.0);
        let ex = |q: usize| QaExample {
            id: "x".into(),
            question_tokens: (0..q)
                .map(|i| format!("w{i}"))
                .chain(["?".to_string()])
                .collect(),
            context_tokens: vec!["a".into(), "b".into(), ".".into()],
            answer_text: "a b".into(),
            answer_span: (0, 1),
            gold_answers: vec!["a b".into()],
            domain: "d".into(),
        };
        let spec = DomainSpec {
            name: "d".into(),
            split: Split::Train,
            records: vec![ex(4), ex(6)],
        };
        let s = dataset_stats(&spec);
        assert_eq!(s.mean_question_words, 5.0);
        assert_eq!(s.mean_answer_words, 2.0);
        assert_eq!(s.mean_context_words, 2.0);
    }

    proptest! {
        #[test]
        fn question_type_is_total(q in "[a-z ?,]{0,40}") {
            let label = question_type(&q);
            prop_assert!(CDA_Q_ORDER.contains(&label));
        }

        #[test]
        fn sampling_without_replacement(n in 0usize..40, seed in any::<u64>()) {
            let pool: Vec<RawRecord> = (0..30).map(|i| rec(i, "what")).collect();
            let s = sample_without_replacement(&pool, n, seed);
            prop_assert_eq!(s.len(), n.min(30));
            let mut ids: Vec<&String> = s.iter().map(|r| &r.id).collect();
            ids.dedup();
            prop_assert_eq!(ids.len(), n.min(30));
            prop_assert_eq!(s, sample_without_replacement(&pool, n, seed));
        }
    }
}
