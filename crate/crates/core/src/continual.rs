//! Sequential training over a stream of domains.
//!
//! Four strategies share one engine:
//!
//! * `Base` fine-tunes every parameter on each new domain.
//! * `Reg` adds `λ · Σ F_i (θ_i − θ*_i)²`, anchored at the parameters left by
//!   the previous domain with that domain's diagonal Fisher `F`.
//! * `Prog` freezes the backbone and trains a fresh adapter set and output
//!   head per domain; examples are routed by their domain label.
//! * `Individual` restarts from the initial backbone for every domain.
//!
//! Training data of a domain is consumed by [`ContinualState::train_domain`]
//! and never retained, so later steps cannot revisit it.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapters::{adapter_bias_count, adapter_param_count, AdapterConfig, AdapterSet};
use crate::autograd::{Graph, Var};
use crate::data::vocab::Vocabulary;
use crate::data::Domain;
use crate::encoder::{param_count, Dropout, EncoderConfig, ParamConvention};
use crate::error::{Error, Result};
use crate::model::{
    evaluate_domain, Bound, ModelView, ParamMap, Predictor, QaModel, ADAPTER_PREFIX,
    ENCODER_PREFIX, HEAD_PREFIX,
};
use crate::optim::{Adam, LinearSchedule};
use crate::qa::{
    encode_pair, qa_loss, QaExample, QaHead, SpanPrediction, DEFAULT_MAX_ANSWER_LENGTH,
};
use crate::results::{ResultsMatrix, Score};
use crate::rng::{derive_seed, permutation, seeded, SeededRng};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StrategyKind {
    Base,
    Reg,
    Prog,
    Individual,
}

impl StrategyKind {
    pub fn name(self) -> &'static str {
        match self {
            StrategyKind::Base => "BASE",
            StrategyKind::Reg => "REG",
            StrategyKind::Prog => "PROG",
            StrategyKind::Individual => "INDIVIDUAL",
        }
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for StrategyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "base" | "bertqa" => Ok(StrategyKind::Base),
            "reg" | "ewc" | "regbertqa" => Ok(StrategyKind::Reg),
            "prog" | "progbertqa" => Ok(StrategyKind::Prog),
            "individual" | "ind" => Ok(StrategyKind::Individual),
            other => Err(Error::Config(format!("unknown strategy {other:?}"))),
        }
    }
}

pub const DEFAULT_LAMBDA: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StrategyConfig {
    pub kind: StrategyKind,
    /// Penalty weight, used by `Reg` only.
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    /// Required by `Prog`, rejected otherwise.
    #[serde(default)]
    pub adapter: Option<AdapterConfig>,
    /// `Prog`: start each domain's adapters from the previous domain's.
    #[serde(default = "default_true")]
    pub init_from_prev: bool,
}

fn default_lambda() -> f64 {
    DEFAULT_LAMBDA
}

fn default_true() -> bool {
    true
}

impl StrategyConfig {
    pub fn base() -> Self {
        Self {
            kind: StrategyKind::Base,
            lambda: DEFAULT_LAMBDA,
            adapter: None,
            init_from_prev: true,
        }
    }

    pub fn reg(lambda: f64) -> Self {
        Self {
            kind: StrategyKind::Reg,
            lambda,
            ..Self::base()
        }
    }

    pub fn prog(adapter: AdapterConfig, init_from_prev: bool) -> Self {
        Self {
            kind: StrategyKind::Prog,
            adapter: Some(adapter),
            init_from_prev,
            ..Self::base()
        }
    }

    pub fn individual() -> Self {
        Self {
            kind: StrategyKind::Individual,
            ..Self::base()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!(
                "lambda must be ≥ 0, got {}",
                self.lambda
            )));
        }
        match (self.kind, &self.adapter) {
            (StrategyKind::Prog, Some(a)) => a.validate(),
            (StrategyKind::Prog, None) => {
                Err(Error::Config("PROG needs an adapter configuration".into()))
            }
            (kind, Some(_)) => Err(Error::Config(format!("{kind} does not take adapters"))),
            (_, None) => Ok(()),
        }
    }

    /// Short label used in reports, e.g. `PROG_noinit`.
    pub fn label(&self) -> String {
        match self.kind {
            StrategyKind::Prog if !self.init_from_prev => "PROG_noinit".into(),
            k => k.name().into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Adam,
}

/// Learning rate used when none is given; tuned for the desk-scale encoder.
pub const DEFAULT_LEARNING_RATE: f64 = 2e-3;
pub const DEFAULT_FISHER_SAMPLES: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub warmup_fraction: f64,
    pub seed: u64,
    pub max_answer_length: usize,
    pub optimizer: Optimizer,
    pub fisher_samples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: DEFAULT_LEARNING_RATE,
            epochs: 3,
            batch_size: 16,
            warmup_fraction: 0.1,
            seed: 0,
            max_answer_length: DEFAULT_MAX_ANSWER_LENGTH,
            optimizer: Optimizer::Adam,
            fisher_samples: DEFAULT_FISHER_SAMPLES,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.max_answer_length == 0 {
            return Err(Error::Config(
                "epochs, batch_size and max_answer_length must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(Error::Config("warmup_fraction must lie in [0, 1)".into()));
        }
        if self.fisher_samples == 0 {
            return Err(Error::Config("fisher_samples must be positive".into()));
        }
        Ok(())
    }
}

/// One optimizer step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchRecord {
    pub domain: String,
    pub epoch: usize,
    pub step: usize,
    pub examples: usize,
    pub loss: f64,
    pub penalty: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<BatchRecord>,
    /// Training examples whose answer was cut off by truncation.
    pub skipped: usize,
}

impl TrainLog {
    pub fn to_jsonl(&self) -> String {
        self.records
            .iter()
            .map(|r| serde_json::to_string(r).expect("plain record") + "\n")
            .collect()
    }

    pub fn extend(&mut self, other: TrainLog) {
        self.records.extend(other.records);
        self.skipped += other.skipped;
    }
}

/// `Σ_i F_i (θ_i − θ*_i)²` over every named tensor of `theta`.
pub fn ewc_penalty(theta: &ParamMap, theta_prev: &ParamMap, fisher: &ParamMap) -> Result<f64> {
    if theta.len() != theta_prev.len() || theta.len() != fisher.len() {
        return Err(Error::Contract(
            "parameter, anchor and Fisher sets differ in size".into(),
        ));
    }
    let mut total = 0.0;
    for (name, t) in theta {
        let missing = || Error::Contract(format!("{name} missing from anchor or Fisher"));
        let p = theta_prev.get(name).ok_or_else(missing)?;
        let f = fisher.get(name).ok_or_else(missing)?;
        if t.shape() != p.shape() {
            return Err(Error::shape("ewc_penalty", t.shape(), p.shape()));
        }
        if t.shape() != f.shape() {
            return Err(Error::shape("ewc_penalty", t.shape(), f.shape()));
        }
        for ((x, a), w) in t.data().iter().zip(p.data()).zip(f.data()) {
            total += w * (x - a) * (x - a);
        }
    }
    Ok(total)
}

/// Diagonal empirical Fisher of `model` on `examples`: the mean over the
/// first `sample_count` examples of the squared per-example gradient of the
/// QA loss at the gold span, dropout off. Examples whose answer is truncated
/// away are not counted.
pub fn fisher_diagonal(
    model: &QaModel,
    vocab: &Vocabulary,
    examples: &[QaExample],
    sample_count: usize,
) -> Result<ParamMap> {
    let mut fisher: ParamMap = model
        .params()
        .into_iter()
        .map(|(n, t)| (n, Tensor::zeros(t.shape())))
        .collect();
    let mut used = 0usize;
    for ex in examples.iter().take(sample_count) {
        let input = encode_pair(
            &ex.question_tokens,
            &ex.context_tokens,
            vocab,
            model.config.max_len,
        )?;
        let Some(gold) = input.to_sequence_span(ex.answer_span) else {
            continue;
        };
        let mut g = Graph::new();
        let bound = Bound::bind(
            &mut g,
            (&model.encoder, true),
            (&model.head, HEAD_PREFIX, true),
            None,
        );
        let (s, e) = bound.logits(&mut g, &model.config, &input, &mut Dropout::none())?;
        let loss = qa_loss(&mut g, s, e, input.context_range(), gold)?;
        let grads = g.backward(loss)?;
        for (name, var) in &bound.trainable {
            if let Some(gr) = grads.get(*var) {
                let acc = fisher.get_mut(name).expect("same names").data_mut();
                for (a, x) in acc.iter_mut().zip(gr) {
                    *a += x * x;
                }
            }
        }
        used += 1;
    }
    if used == 0 {
        return Err(Error::Data(
            "Fisher estimation needs at least one usable example".into(),
        ));
    }
    let inv = 1.0 / used as f64;
    for t in fisher.values_mut() {
        for x in t.data_mut() {
            *x *= inv;
        }
    }
    Ok(fisher)
}

/// Anchor of the penalized strategy: the previous domain's parameters and
/// their Fisher diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct Anchor {
    pub params: ParamMap,
    pub fisher: ParamMap,
}

/// Adapters and output head owned by one domain.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainModule {
    pub adapters: AdapterSet,
    pub head: QaHead,
}

impl DomainModule {
    pub fn scalar_count(&self) -> usize {
        self.adapters.scalar_count() + self.head.scalar_count()
    }
}

pub fn adapter_prefix(t: usize) -> String {
    format!("{ADAPTER_PREFIX}/{t}")
}

pub fn head_prefix(t: usize) -> String {
    format!("{HEAD_PREFIX}/{t}")
}

/// Persisted scalar count of a progressive model after `domains` steps.
pub fn prog_model_size(
    encoder: &EncoderConfig,
    adapter: &AdapterConfig,
    domains: usize,
) -> Result<usize> {
    let per_instance = adapter_param_count(adapter)? + adapter_bias_count(adapter);
    let per_domain = 2 * encoder.n_layers * per_instance + 2 * encoder.d + 2;
    Ok(param_count(encoder, ParamConvention::Full)? + domains * per_domain)
}

/// Everything a run carries from one domain to the next.
#[derive(Debug, Clone)]
pub struct ContinualState {
    pub strategy: StrategyConfig,
    pub vocab: Vocabulary,
    pub seed: u64,
    pub max_answer_length: usize,
    /// The trained model (`Base`, `Reg`), the frozen backbone (`Prog`), or
    /// the latest per-domain model (`Individual`).
    pub current: QaModel,
    pub anchor: Option<Anchor>,
    pub modules: Vec<DomainModule>,
    pub individual: Vec<QaModel>,
    pristine: Option<QaModel>,
    seen: Vec<String>,
}

/// Called after every epoch with the state as it stands.
pub type EpochHook<'a> = dyn FnMut(&ContinualState, usize) -> Result<()> + 'a;

impl ContinualState {
    pub fn new(
        strategy: StrategyConfig,
        config: EncoderConfig,
        vocab: Vocabulary,
        train: &TrainConfig,
    ) -> Result<Self> {
        strategy.validate()?;
        train.validate()?;
        config.validate()?;
        if config.vocab_size != vocab.len() {
            return Err(Error::Config(format!(
                "encoder vocab_size {} differs from vocabulary size {}",
                config.vocab_size,
                vocab.len()
            )));
        }
        if let Some(a) = &strategy.adapter {
            if a.d != config.d {
                return Err(Error::Config(format!(
                    "adapter host width {} differs from encoder width {}",
                    a.d, config.d
                )));
            }
        }
        let current = QaModel::init(config, &mut seeded(derive_seed(train.seed, "backbone")))?;
        let pristine = (strategy.kind == StrategyKind::Individual).then(|| current.clone());
        Ok(Self {
            strategy,
            vocab,
            seed: train.seed,
            max_answer_length: train.max_answer_length,
            current,
            anchor: None,
            modules: Vec::new(),
            individual: Vec::new(),
            pristine,
            seen: Vec::new(),
        })
    }

    pub fn seen(&self) -> &[String] {
        &self.seen
    }

    pub fn domain_index(&self, name: &str) -> Option<usize> {
        self.seen.iter().position(|s| s == name)
    }

    /// The parameters answering questions labelled `domain`.
    pub fn view_for(&self, domain: &str) -> Result<ModelView<'_>> {
        let unknown = || Error::Data(format!("no trained parameters for domain {domain:?}"));
        Ok(match self.strategy.kind {
            StrategyKind::Base | StrategyKind::Reg => {
                self.current.view(&self.vocab, self.max_answer_length)
            }
            StrategyKind::Prog => {
                let m = &self.modules[self.domain_index(domain).ok_or_else(unknown)?];
                ModelView {
                    config: &self.current.config,
                    encoder: &self.current.encoder,
                    head: &m.head,
                    adapters: Some(&m.adapters),
                    vocab: &self.vocab,
                    max_answer_length: self.max_answer_length,
                }
            }
            StrategyKind::Individual => self.individual
                [self.domain_index(domain).ok_or_else(unknown)?]
            .view(&self.vocab, self.max_answer_length),
        })
    }

    /// Raw start and end logits of one example under its routed parameters.
    pub fn logits(&self, ex: &QaExample) -> Result<(Vec<f64>, Vec<f64>)> {
        let (_, s, e) = self.view_for(&ex.domain)?.logits(ex)?;
        Ok((s, e))
    }

    /// Every persisted tensor. Progressive runs name per-domain tensors
    /// `adapter/<t>/…` and `head/<t>/…`; per-domain models of `Individual`
    /// live under `model/<t>/…`.
    pub fn persisted_params(&self) -> ParamMap {
        match self.strategy.kind {
            StrategyKind::Base | StrategyKind::Reg => self.current.params(),
            StrategyKind::Prog => {
                let mut out = self.current.backbone_params();
                for (t, m) in self.modules.iter().enumerate() {
                    m.adapters.for_each(&adapter_prefix(t), &mut |n, x| {
                        out.insert(n.to_string(), x.clone());
                    });
                    m.head.map(&head_prefix(t), &mut |n, x| {
                        out.insert(n.to_string(), x.clone());
                    });
                }
                out
            }
            StrategyKind::Individual => {
                let mut out = ParamMap::new();
                for (t, m) in self.individual.iter().enumerate() {
                    for (n, x) in m.params() {
                        out.insert(format!("model/{t}/{n}"), x);
                    }
                }
                out
            }
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.persisted_params().values().map(Tensor::len).sum()
    }

    /// Digest of the backbone and the first `earlier` domain modules.
    fn frozen_fingerprint(&self, earlier: usize) -> Vec<u8> {
        let mut h = Sha256::new();
        let mut feed = |name: &str, t: &Tensor| {
            h.update(name.as_bytes());
            for b in t.to_bits() {
                h.update(b.to_le_bytes());
            }
        };
        self.current.encoder.for_each(ENCODER_PREFIX, &mut feed);
        for (t, m) in self.modules[..earlier].iter().enumerate() {
            m.adapters.for_each(&adapter_prefix(t), &mut feed);
            m.head.map(&head_prefix(t), &mut |n, x| feed(n, x));
        }
        h.finalize().to_vec()
    }

    /// Trains on one new domain. `train` is consumed.
    pub fn train_domain(
        &mut self,
        domain: &str,
        train: Vec<QaExample>,
        cfg: &TrainConfig,
    ) -> Result<TrainLog> {
        self.train_domain_with(domain, train, cfg, &mut |_, _| Ok(()))
    }

    pub fn train_domain_with(
        &mut self,
        domain: &str,
        train: Vec<QaExample>,
        cfg: &TrainConfig,
        hook: &mut EpochHook<'_>,
    ) -> Result<TrainLog> {
        cfg.validate()?;
        if train.is_empty() {
            return Err(Error::Data(format!(
                "domain {domain:?} has no training examples"
            )));
        }
        if self.seen.iter().any(|s| s == domain) {
            return Err(Error::Contract(format!(
                "domain {domain:?} was already trained"
            )));
        }
        let t = self.seen.len();
        self.seen.push(domain.to_string());

        match self.strategy.kind {
            StrategyKind::Prog => {
                let adapter = self.strategy.adapter.expect("validated");
                let mut rng = seeded(derive_seed(self.seed, &format!("adapter/{domain}")));
                let fresh = AdapterSet::init(&adapter, self.current.config.n_layers, &mut rng)?;
                let adapters = match self.modules.last() {
                    Some(prev) if self.strategy.init_from_prev => prev.adapters.clone(),
                    _ => fresh,
                };
                let head = QaHead::init(self.current.config.d, &mut rng);
                self.modules.push(DomainModule { adapters, head });
            }
            StrategyKind::Individual => {
                self.current = self.pristine.clone().expect("kept for INDIVIDUAL");
            }
            StrategyKind::Base | StrategyKind::Reg => {}
        }

        let frozen_before =
            (self.strategy.kind == StrategyKind::Prog).then(|| self.frozen_fingerprint(t));
        let log = self.optimize(t, domain, &train, cfg, hook)?;
        if let Some(before) = frozen_before {
            if before != self.frozen_fingerprint(t) {
                return Err(Error::InvariantViolation(format!(
                    "frozen parameters changed while training domain {domain:?}"
                )));
            }
        }

        match self.strategy.kind {
            StrategyKind::Reg => {
                let mut rng = seeded(derive_seed(self.seed, &format!("fisher/{domain}")));
                let order = permutation(&mut rng, train.len());
                let sample: Vec<QaExample> = order
                    .into_iter()
                    .take(cfg.fisher_samples)
                    .map(|i| train[i].clone())
                    .collect();
                let fisher =
                    fisher_diagonal(&self.current, &self.vocab, &sample, cfg.fisher_samples)?;
                self.anchor = Some(Anchor {
                    params: self.current.params(),
                    fisher,
                });
            }
            StrategyKind::Individual => self.individual.push(self.current.clone()),
            StrategyKind::Base | StrategyKind::Prog => {}
        }
        Ok(log)
    }

    fn bind(&self, g: &mut Graph, t: usize) -> Bound {
        match self.strategy.kind {
            StrategyKind::Prog => {
                let m = &self.modules[t];
                let (ap, hp) = (adapter_prefix(t), head_prefix(t));
                Bound::bind(
                    g,
                    (&self.current.encoder, false),
                    (&m.head, &hp, true),
                    Some((&m.adapters, &ap, true)),
                )
            }
            _ => Bound::bind(
                g,
                (&self.current.encoder, true),
                (&self.current.head, HEAD_PREFIX, true),
                None,
            ),
        }
    }

    /// Applies one Adam step to exactly the tensors named in `grads`.
    fn apply_updates(
        &mut self,
        t: usize,
        adam: &mut Adam,
        grads: &HashMap<String, Vec<f64>>,
        lr: f64,
    ) -> Result<()> {
        let mut applied = BTreeSet::new();
        let mut result = Ok(());
        let mut step = |name: &str, p: &mut Tensor| {
            if let Some(gr) = grads.get(name) {
                if result.is_ok() {
                    result = adam.update(name, p, gr, lr);
                }
                applied.insert(name.to_string());
            }
        };
        match self.strategy.kind {
            StrategyKind::Prog => {
                let m = &mut self.modules[t];
                m.adapters.for_each_mut(&adapter_prefix(t), &mut step);
                m.head.for_each_mut(&head_prefix(t), &mut step);
            }
            _ => self.current.for_each_mut(&mut step),
        }
        result?;
        if applied.len() != grads.len() {
            let stray: Vec<&String> = grads.keys().filter(|k| !applied.contains(*k)).collect();
            return Err(Error::InvariantViolation(format!(
                "gradient for non-trainable tensors {stray:?}"
            )));
        }
        Ok(())
    }

    fn optimize(
        &mut self,
        t: usize,
        domain: &str,
        train: &[QaExample],
        cfg: &TrainConfig,
        hook: &mut EpochHook<'_>,
    ) -> Result<TrainLog> {
        let config = self.current.config.clone();
        let inputs = train
            .iter()
            .map(|ex| {
                let input = encode_pair(
                    &ex.question_tokens,
                    &ex.context_tokens,
                    &self.vocab,
                    config.max_len,
                )?;
                Ok(input
                    .to_sequence_span(ex.answer_span)
                    .map(|gold| (input, gold)))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut log = TrainLog {
            skipped: inputs.iter().filter(|x| x.is_none()).count(),
            ..TrainLog::default()
        };
        let usable: Vec<_> = inputs.into_iter().flatten().collect();
        if usable.is_empty() {
            return Err(Error::Data(format!(
                "every answer of domain {domain:?} is truncated away"
            )));
        }

        let batches_per_epoch = usable.len().div_ceil(cfg.batch_size);
        let schedule = LinearSchedule::new(
            cfg.learning_rate,
            cfg.epochs * batches_per_epoch,
            cfg.warmup_fraction,
        );
        let mut adam = Adam::default();
        let mut shuffle = seeded(derive_seed(self.seed, &format!("shuffle/{domain}")));
        let mut drop_rng: SeededRng = seeded(derive_seed(self.seed, &format!("dropout/{domain}")));
        let penalized = self.strategy.kind == StrategyKind::Reg && self.strategy.lambda > 0.0;
        let mut step = 0;

        for epoch in 0..cfg.epochs {
            let order = permutation(&mut shuffle, usable.len());
            for batch in order.chunks(cfg.batch_size) {
                let mut g = Graph::new();
                let bound = self.bind(&mut g, t);
                let mut dropout = Dropout {
                    rate: config.dropout,
                    rng: Some(&mut drop_rng),
                };
                let mut losses = Vec::with_capacity(batch.len());
                for &i in batch {
                    let (input, gold) = &usable[i];
                    let (s, e) = bound.logits(&mut g, &config, input, &mut dropout)?;
                    losses.push(qa_loss(&mut g, s, e, input.context_range(), *gold)?);
                }
                let total = g.add_all(&losses)?;
                let mut objective = g.scale(total, 1.0 / batch.len() as f64);
                let loss = g.value(objective).item();
                let mut penalty = 0.0;
                if let (true, Some(anchor)) = (penalized, &self.anchor) {
                    let terms = bound
                        .trainable
                        .iter()
                        .map(|(name, v)| {
                            let missing = || Error::Contract(format!("{name} has no anchor"));
                            let a = anchor.params.get(name).ok_or_else(missing)?;
                            let f = anchor.fisher.get(name).ok_or_else(missing)?;
                            g.weighted_sq_dist(*v, a, f)
                        })
                        .collect::<Result<Vec<Var>>>()?;
                    let r = g.add_all(&terms)?;
                    penalty = g.value(r).item();
                    let r = g.scale(r, self.strategy.lambda);
                    objective = g.add(objective, r)?;
                }
                if !g.value(objective).is_finite() {
                    return Err(Error::InvariantViolation(format!(
                        "non-finite training loss on domain {domain:?}, epoch {epoch}"
                    )));
                }
                let grads = g.backward(objective)?;
                let named: HashMap<String, Vec<f64>> = bound
                    .trainable
                    .iter()
                    .filter_map(|(name, v)| grads.get(*v).map(|gr| (name.clone(), gr.to_vec())))
                    .collect();
                let lr = schedule.lr_at(step);
                adam.begin_step();
                self.apply_updates(t, &mut adam, &named, lr)?;
                log.records.push(BatchRecord {
                    domain: domain.to_string(),
                    epoch,
                    step,
                    examples: batch.len(),
                    loss,
                    penalty,
                    lr,
                });
                step += 1;
            }
            hook(self, epoch)?;
        }
        Ok(log)
    }

    /// Scores of every seen domain, in the order they were trained.
    pub fn evaluate_all_seen(&self, tests: &[(String, Vec<QaExample>)]) -> Result<Vec<Score>> {
        self.seen
            .iter()
            .map(|name| {
                let (_, examples) = tests
                    .iter()
                    .find(|(n, _)| n == name)
                    .ok_or_else(|| Error::Data(format!("no test split for domain {name:?}")))?;
                Ok(evaluate_domain(self, examples)?.score)
            })
            .collect()
    }
}

impl Predictor for ContinualState {
    fn predict(&self, ex: &QaExample) -> Result<SpanPrediction> {
        self.view_for(&ex.domain)?.predict(ex)
    }
}

/// Row sum of F1 over the given scores.
pub fn overall(scores: &[Score]) -> f64 {
    scores.iter().map(|s| s.f1).sum()
}

/// Handed to run hooks after every epoch.
pub struct EpochContext<'a> {
    pub state: &'a ContinualState,
    /// 0-based position of the domain being trained.
    pub step: usize,
    pub epoch: usize,
    pub tests: &'a [(String, Vec<QaExample>)],
}

pub type RunHook<'a> = dyn FnMut(&EpochContext<'_>) -> Result<()> + 'a;

pub struct RunOutput {
    pub matrix: ResultsMatrix,
    pub log: TrainLog,
    pub state: ContinualState,
}

/// Trains `domains` in order and scores all seen domains after each one.
pub fn run_sequence(
    domains: Vec<Domain>,
    strategy: &StrategyConfig,
    encoder: EncoderConfig,
    vocab: Vocabulary,
    cfg: &TrainConfig,
) -> Result<RunOutput> {
    run_sequence_with(domains, strategy, encoder, vocab, cfg, &mut |_| Ok(()))
}

pub fn run_sequence_with(
    domains: Vec<Domain>,
    strategy: &StrategyConfig,
    encoder: EncoderConfig,
    vocab: Vocabulary,
    cfg: &TrainConfig,
    hook: &mut RunHook<'_>,
) -> Result<RunOutput> {
    if domains.is_empty() {
        return Err(Error::Data("a run needs at least one domain".into()));
    }
    let mut state = ContinualState::new(*strategy, encoder, vocab, cfg)?;
    let mut matrix = ResultsMatrix::new(domains.iter().map(|d| d.name.clone()).collect());
    let mut tests = Vec::with_capacity(domains.len());
    let mut trains = Vec::with_capacity(domains.len());
    for d in domains {
        tests.push((d.name.clone(), d.test));
        trains.push((d.name, d.train));
    }
    let mut log = TrainLog::default();
    for (step, (name, train)) in trains.into_iter().enumerate() {
        let tests_ref = &tests;
        let l = state.train_domain_with(&name, train, cfg, &mut |s, epoch| {
            hook(&EpochContext {
                state: s,
                step,
                epoch,
                tests: tests_ref,
            })
        })?;
        log.extend(l);
        matrix.push_row(state.evaluate_all_seen(&tests)?)?;
    }
    Ok(RunOutput { matrix, log, state })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::{AdapterInsertion, AdapterStructure};
    use crate::data::build_vocab;
    use crate::data::synthetic::{make_synthetic_cda, SyntheticConfig};

    fn tiny_domains(n_train: usize) -> (Vec<Domain>, Vocabulary) {
        let cfg = SyntheticConfig {
            n_train,
            n_test: 10,
            ..SyntheticConfig::default()
        };
        let domains: Vec<Domain> = make_synthetic_cda(&cfg, 1)
            .unwrap()
            .iter()
            .map(|r| r.to_domain().0)
            .collect();
        let vocab = build_vocab(&domains, 1);
        (domains, vocab)
    }

    fn tiny_encoder(vocab: &Vocabulary) -> EncoderConfig {
        EncoderConfig {
            d: 8,
            n_heads: 2,
            d_ff: 16,
            n_layers: 1,
            max_len: 32,
            ..EncoderConfig::desk(vocab.len())
        }
    }

    fn pmap(entries: &[(&str, &[f64])]) -> ParamMap {
        entries
            .iter()
            .map(|(n, v)| (n.to_string(), Tensor::vector(v.to_vec())))
            .collect()
    }

    #[test]
    fn penalty_hand_case_and_zero_cases() {
        let theta = pmap(&[("w", &[1.5, -1.0])]);
        let prev = pmap(&[("w", &[1.0, 0.0])]);
        let f = pmap(&[("w", &[1.0, 2.0])]);
        assert_eq!(ewc_penalty(&theta, &prev, &f).unwrap(), 2.25);
        assert_eq!(ewc_penalty(&prev, &prev, &f).unwrap(), 0.0);
        let zero = pmap(&[("w", &[0.0, 0.0])]);
        assert_eq!(ewc_penalty(&theta, &prev, &zero).unwrap(), 0.0);
        let bad = pmap(&[("w", &[0.0, 0.0, 0.0])]);
        assert!(ewc_penalty(&theta, &prev, &bad).is_err());
    }

    #[test]
    fn fisher_is_mean_of_squared_gradients() {
        let (domains, vocab) = tiny_domains(5);
        let config = tiny_encoder(&vocab);
        let model = QaModel::init(config.clone(), &mut seeded(3)).unwrap();
        let exs = &domains[0].train;
        let fisher = fisher_diagonal(&model, &vocab, exs, 1000).unwrap();
        // explicit-loop oracle
        let mut oracle: HashMap<String, Vec<f64>> = HashMap::new();
        for ex in exs {
            let input = encode_pair(
                &ex.question_tokens,
                &ex.context_tokens,
                &vocab,
                config.max_len,
            )
            .unwrap();
            let gold = input.to_sequence_span(ex.answer_span).unwrap();
            let mut g = Graph::new();
            let b = Bound::bind(
                &mut g,
                (&model.encoder, true),
                (&model.head, HEAD_PREFIX, true),
                None,
            );
            let (s, e) = b
                .logits(&mut g, &config, &input, &mut Dropout::none())
                .unwrap();
            let l = qa_loss(&mut g, s, e, input.context_range(), gold).unwrap();
            let grads = g.backward(l).unwrap();
            for (n, v) in &b.trainable {
                let acc = oracle
                    .entry(n.clone())
                    .or_insert_with(|| vec![0.0; g.value(*v).len()]);
                for (a, x) in acc.iter_mut().zip(grads.get(*v).unwrap()) {
                    *a += x * x / exs.len() as f64;
                }
            }
        }
        for (n, t) in &fisher {
            assert!(t.data().iter().all(|&x| x >= 0.0));
            for (a, b) in t.data().iter().zip(&oracle[n]) {
                assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()), "{n}");
            }
        }
        // a single example gives its own squared gradient
        let one = fisher_diagonal(&model, &vocab, &exs[..1], 1000).unwrap();
        let capped = fisher_diagonal(&model, &vocab, exs, 1).unwrap();
        assert_eq!(one, capped);
        assert!(fisher_diagonal(&model, &vocab, &[], 10).is_err());
    }

    #[test]
    fn strategy_validation() {
        let a = AdapterConfig {
            structure: AdapterStructure::Bn,
            insertion: AdapterInsertion::Inside,
            d_s: 4,
            d: 8,
            pal_heads: 2,
        };
        assert!(StrategyConfig::prog(a, true).validate().is_ok());
        assert!(StrategyConfig::reg(-1.0).validate().is_err());
        let mut bad = StrategyConfig::base();
        bad.adapter = Some(a);
        assert!(bad.validate().is_err());
        let mut bad = StrategyConfig::prog(a, true);
        bad.adapter = None;
        assert!(bad.validate().is_err());
        assert_eq!("EWC".parse::<StrategyKind>().unwrap(), StrategyKind::Reg);
        assert!("foo".parse::<StrategyKind>().is_err());
        assert_eq!(StrategyConfig::prog(a, false).label(), "PROG_noinit");
    }

    #[test]
    fn single_domain_gives_one_by_one_matrix() {
        let (mut domains, vocab) = tiny_domains(8);
        domains.truncate(1);
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let out = run_sequence(
            domains,
            &StrategyConfig::base(),
            tiny_encoder(&vocab),
            vocab,
            &cfg,
        )
        .unwrap();
        assert_eq!(out.matrix.steps(), 1);
        assert_eq!(out.matrix.overall(0), out.matrix.get(0, 0).unwrap().f1);
        assert_eq!(out.log.records.len(), 2);
    }

    #[test]
    fn prog_keeps_backbone_and_grows_linearly() {
        let (domains, vocab) = tiny_domains(8);
        let enc = tiny_encoder(&vocab);
        let a = AdapterConfig {
            structure: AdapterStructure::Pal,
            insertion: AdapterInsertion::Aside,
            d_s: 4,
            d: 8,
            pal_heads: 2,
        };
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let out = run_sequence(
            domains,
            &StrategyConfig::prog(a, true),
            enc.clone(),
            vocab,
            &cfg,
        )
        .unwrap();
        let fresh = QaModel::init(enc.clone(), &mut seeded(derive_seed(0, "backbone"))).unwrap();
        assert_eq!(out.state.current.encoder, fresh.encoder);
        assert_eq!(
            out.state.parameter_count(),
            prog_model_size(&enc, &a, 3).unwrap()
        );
        assert!(out
            .state
            .persisted_params()
            .contains_key("adapter/2/0/ffn/up"));
    }

    #[test]
    fn repeated_domain_and_unknown_route_are_errors() {
        let (domains, vocab) = tiny_domains(4);
        let cfg = TrainConfig {
            epochs: 1,
            ..TrainConfig::default()
        };
        let mut st = ContinualState::new(
            StrategyConfig::individual(),
            tiny_encoder(&vocab),
            vocab,
            &cfg,
        )
        .unwrap();
        st.train_domain("syn1", domains[0].train.clone(), &cfg)
            .unwrap();
        assert!(st
            .train_domain("syn1", domains[0].train.clone(), &cfg)
            .is_err());
        assert!(st.logits(&domains[1].test[0]).is_err());
        assert!(st.train_domain("x", Vec::new(), &cfg).is_err());
    }
}
