//! Template-generated extractive QA domains with controllable interference.
//!
//! Every context lists `n_slots` marker/value pairs (`alpha w . beta w . …`)
//! and every domain asks the same question templates. What differs is which
//! slot holds the answer: with `conflicting` set, domain `k` answers from
//! slot `k mod n_slots`, so training on a later domain directly contradicts
//! what an earlier one taught. Value words come from one shared pool unless
//! `distinct_pools` gives each domain its own.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{RawAnswer, RawDomain, RawRecord};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, seeded, SeededRng};

const MARKERS: [&str; 8] = [
    "alpha", "beta", "gamma", "delta", "epsilon", "zeta", "eta", "theta",
];
const TEMPLATES: [&str; 3] = [
    "what is the value?",
    "which value is it?",
    "what value is kept?",
];
const FILLER: [&str; 4] = ["so", "then", "also", "now"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub n_domains: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub n_slots: usize,
    /// Distinct value words per domain.
    pub words_per_domain: usize,
    /// Domains disagree on the answer slot.
    pub conflicting: bool,
    /// Up to this many filler words precede the slots.
    pub jitter: usize,
    pub distinct_pools: bool,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_domains: 3,
            n_train: 200,
            n_test: 100,
            n_slots: 3,
            words_per_domain: 24,
            conflicting: true,
            jitter: 0,
            distinct_pools: false,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_domains == 0 || self.n_train == 0 || self.n_test == 0 {
            return Err(Error::Config("synthetic domains need examples".into()));
        }
        if self.n_slots == 0 || self.n_slots > MARKERS.len() {
            return Err(Error::Config(format!(
                "n_slots must be in 1..={}",
                MARKERS.len()
            )));
        }
        if self.words_per_domain < self.n_slots {
            return Err(Error::Config(
                "words_per_domain must cover one distinct word per slot".into(),
            ));
        }
        Ok(())
    }

    pub fn answer_slot(&self, domain: usize) -> usize {
        if self.conflicting {
            domain % self.n_slots
        } else {
            0
        }
    }
}

pub fn domain_name(k: usize) -> String {
    format!("syn{}", k + 1)
}

fn make_record(
    cfg: &SyntheticConfig,
    k: usize,
    idx: usize,
    split: &str,
    rng: &mut SeededRng,
) -> RawRecord {
    // distinct words for the slots, drawn from this domain's pool
    let mut pool: Vec<usize> = (0..cfg.words_per_domain).collect();
    let mut words = Vec::with_capacity(cfg.n_slots);
    for _ in 0..cfg.n_slots {
        let j = rng.random_range(0..pool.len());
        let w = pool.swap_remove(j);
        words.push(if cfg.distinct_pools {
            format!("d{}w{w:02}", k + 1)
        } else {
            format!("w{w:02}")
        });
    }
    let mut context = String::new();
    let n_filler = if cfg.jitter > 0 {
        rng.random_range(0..=cfg.jitter)
    } else {
        0
    };
    for _ in 0..n_filler {
        context.push_str(FILLER[rng.random_range(0..FILLER.len())]);
        context.push(' ');
    }
    let target = cfg.answer_slot(k);
    let mut span = (0, 0);
    for (slot, word) in words.iter().enumerate() {
        context.push_str(MARKERS[slot]);
        context.push(' ');
        let start = context.chars().count();
        context.push_str(word);
        if slot == target {
            span = (start, start + word.chars().count() - 1);
        }
        context.push_str(" . ");
    }
    let context = context.trim_end().to_string();
    let question = TEMPLATES[rng.random_range(0..TEMPLATES.len())].to_string();
    RawRecord {
        id: format!("{}-{split}-{idx}", domain_name(k)),
        context,
        question,
        answers: vec![RawAnswer {
            text: words[target].clone(),
            char_span: Some(span),
        }],
        source_tag: domain_name(k),
    }
}

/// Deterministic per seed; each domain and split draws from its own stream.
pub fn make_synthetic_cda(cfg: &SyntheticConfig, seed: u64) -> Result<Vec<RawDomain>> {
    cfg.validate()?;
    Ok((0..cfg.n_domains)
        .map(|k| {
            let name = domain_name(k);
            let mut train_rng = seeded(derive_seed(seed, &format!("synthetic/{name}/train")));
            let mut test_rng = seeded(derive_seed(seed, &format!("synthetic/{name}/test")));
            RawDomain {
                train: (0..cfg.n_train)
                    .map(|i| make_record(cfg, k, i, "train", &mut train_rng))
                    .collect(),
                test: (0..cfg.n_test)
                    .map(|i| make_record(cfg, k, i, "test", &mut test_rng))
                    .collect(),
                name,
            }
        })
        .collect())
}
