//! Fixtures and checks shared by the integration suites and the acceptance
//! report.

#![allow(dead_code)]

use std::collections::BTreeMap;

use rand::Rng;

use cda_core::adapters::{
    bn_count, match_pal_width, pal_count, AdapterConfig, AdapterInsertion, AdapterSet,
    AdapterStructure,
};
use cda_core::checkpoint;
use cda_core::continual::{
    adapter_prefix, ewc_penalty, head_prefix, prog_model_size, run_sequence, run_sequence_with,
    RunOutput, StrategyConfig, TrainConfig,
};
use cda_core::data::split::{build_cda_q, question_type, SplitPolicy, CDA_Q_ORDER};
use cda_core::data::synthetic::{make_synthetic_cda, SyntheticConfig};
use cda_core::data::{build_vocab, Domain, RawAnswer, RawRecord, Vocabulary};
use cda_core::encoder::{layer_weight_count, Dropout, EncoderConfig};
use cda_core::experiments::{
    cmd_run, write_report, DataSpec, ExperimentSpec, ReportFormat, StrategySpec, TIMING_JSON,
};
use cda_core::metrics::{em_score, f1_score, normalize_answer};
use cda_core::model::{
    evaluate_domain, param_distance, Bound, ParamMap, Predictor, QaModel, HEAD_PREFIX,
};
use cda_core::qa::{encode_pair, qa_loss, QaExample, QaHead, SpanPrediction};
use cda_core::results::{ResultsMatrix, Score};
use cda_core::rng::seeded;
use cda_core::{Graph, Result, StrategyKind};

/// Outcome of one check: whether it held and a one-line measurement.
pub struct Outcome {
    pub pass: bool,
    pub detail: String,
}

impl Outcome {
    pub fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

pub fn synthetic(
    seed: u64,
    n_domains: usize,
    n_train: usize,
    n_test: usize,
) -> (Vec<Domain>, Vocabulary) {
    let cfg = SyntheticConfig {
        n_domains,
        n_train,
        n_test,
        ..SyntheticConfig::default()
    };
    let domains: Vec<Domain> = make_synthetic_cda(&cfg, seed)
        .expect("valid synthetic config")
        .iter()
        .map(|r| r.to_domain().0)
        .collect();
    let vocab = build_vocab(&domains, 1);
    (domains, vocab)
}

pub fn desk_train(seed: u64) -> TrainConfig {
    TrainConfig {
        seed,
        ..TrainConfig::default()
    }
}

// ---------------------------------------------------------------- gradients

pub struct GradReport {
    pub max_rel: f64,
    pub worst: String,
    pub checked: usize,
}

fn perturb(model: &mut QaModel, adapters: &mut AdapterSet, name: &str, i: usize, delta: f64) {
    let mut f = |n: &str, t: &mut cda_core::Tensor| {
        if n == name {
            t.data_mut()[i] += delta;
        }
    };
    model.for_each_mut(&mut f);
    adapters.for_each_mut(&adapter_prefix(0), &mut f);
}

fn loss_and_grads(
    model: &QaModel,
    adapters: &AdapterSet,
    inputs: &[(cda_core::qa::PackedInput, (usize, usize))],
    want_grads: bool,
) -> (f64, BTreeMap<String, Vec<f64>>) {
    let mut g = Graph::new();
    let prefix = adapter_prefix(0);
    let b = Bound::bind(
        &mut g,
        (&model.encoder, true),
        (&model.head, HEAD_PREFIX, true),
        Some((adapters, &prefix, true)),
    );
    // name the adapter leaves too
    let mut names: Vec<(String, cda_core::Var)> = b.trainable.clone();
    if let Some(a) = &b.adapters {
        a.for_each(&prefix, &mut |n, v| names.push((n.to_string(), *v)));
    }
    let mut terms = Vec::new();
    for (input, gold) in inputs {
        let (s, e) = b
            .logits(&mut g, &model.config, input, &mut Dropout::none())
            .unwrap();
        terms.push(qa_loss(&mut g, s, e, input.context_range(), *gold).unwrap());
    }
    let loss = g.add_all(&terms).unwrap();
    let value = g.value(loss).item();
    let mut grads = BTreeMap::new();
    if want_grads {
        let gr = g.backward(loss).unwrap();
        for (n, v) in names {
            let len = g.value(v).len();
            let grad = gr.get(v).map_or_else(|| vec![0.0; len], <[f64]>::to_vec);
            grads.insert(n, grad);
        }
    }
    (value, grads)
}

/// Central finite differences over every trainable scalar of a 2-layer,
/// d=8, 2-head encoder with adapters and a QA head. All parameters,
/// including the zero-initialized up-projections, are first randomized so
/// that no gradient is trivially zero.
pub fn gradient_check(
    structure: AdapterStructure,
    insertion: AdapterInsertion,
    step: f64,
) -> GradReport {
    let (domains, vocab) = synthetic(11, 1, 1, 1);
    let config = EncoderConfig {
        d: 8,
        n_heads: 2,
        d_ff: 16,
        n_layers: 2,
        max_len: 24,
        dropout: 0.0,
        ..EncoderConfig::desk(vocab.len())
    };
    let acfg = AdapterConfig {
        structure,
        insertion,
        d_s: 4,
        d: 8,
        pal_heads: 2,
    };
    let mut rng = seeded(5);
    let mut model = QaModel::init(config.clone(), &mut rng).unwrap();
    let mut adapters = AdapterSet::init(&acfg, config.n_layers, &mut rng).unwrap();
    let mut jitter = |_: &str, t: &mut cda_core::Tensor| {
        for x in t.data_mut() {
            *x += rng.random_range(-0.3..0.3);
        }
    };
    model.for_each_mut(&mut jitter);
    adapters.for_each_mut("", &mut jitter);

    let inputs: Vec<_> = domains[0]
        .train
        .iter()
        .map(|ex| {
            let p = encode_pair(
                &ex.question_tokens,
                &ex.context_tokens,
                &vocab,
                config.max_len,
            )
            .unwrap();
            let gold = p.to_sequence_span(ex.answer_span).unwrap();
            (p, gold)
        })
        .collect();
    let (_, grads) = loss_and_grads(&model, &adapters, &inputs, true);
    let mut max_rel = 0.0f64;
    let mut worst = String::new();
    let mut checked = 0;
    for (name, analytic) in &grads {
        for (i, &a) in analytic.iter().enumerate() {
            perturb(&mut model, &mut adapters, name, i, step);
            let (lp, _) = loss_and_grads(&model, &adapters, &inputs, false);
            perturb(&mut model, &mut adapters, name, i, -2.0 * step);
            let (lm, _) = loss_and_grads(&model, &adapters, &inputs, false);
            perturb(&mut model, &mut adapters, name, i, step);
            let n = (lp - lm) / (2.0 * step);
            let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-6);
            if rel > max_rel {
                max_rel = rel;
                worst = format!("{name}[{i}] analytic {a:.6e} numeric {n:.6e}");
            }
            checked += 1;
        }
    }
    GradReport {
        max_rel,
        worst,
        checked,
    }
}

// --------------------------------------------------------------- accounting

fn count_where(
    manifest: &[checkpoint::ManifestEntry],
    pred: impl Fn(&checkpoint::ManifestEntry) -> bool,
) -> usize {
    manifest.iter().filter(|e| pred(e)).map(|e| e.len()).sum()
}

/// Formula counts against the array sizes enumerated from a checkpoint of
/// a progressive model, for `n` random configurations.
pub fn parameter_accounting(n: usize, seed: u64) -> Outcome {
    let mut rng = seeded(seed);
    for case in 0..n {
        let n_heads = rng.random_range(1..=4);
        let d = n_heads * rng.random_range(1..=6);
        let d_ff = rng.random_range(1..=40);
        let n_layers = rng.random_range(1..=3);
        let vocab_size = rng.random_range(4..=50);
        let max_len = rng.random_range(4..=40);
        let structure = if rng.random_bool(0.5) {
            AdapterStructure::Pal
        } else {
            AdapterStructure::Bn
        };
        let pal_heads = rng.random_range(1..=3);
        let d_s = match structure {
            AdapterStructure::Pal => pal_heads * rng.random_range(1..=4),
            AdapterStructure::Bn => rng.random_range(1..=12),
        };
        let domains = rng.random_range(1..=4);
        let enc = EncoderConfig {
            d,
            n_heads,
            d_ff,
            n_layers,
            max_len,
            ..EncoderConfig::desk(vocab_size)
        };
        let acfg = AdapterConfig {
            structure,
            insertion: AdapterInsertion::Inside,
            d_s,
            d,
            pal_heads,
        };
        let mut init = seeded(case as u64);
        let model = QaModel::init(enc.clone(), &mut init).unwrap();
        let mut persisted = model.backbone_params();
        for t in 0..domains {
            let set = AdapterSet::init(&acfg, n_layers, &mut init).unwrap();
            set.for_each(&adapter_prefix(t), &mut |name, tensor| {
                persisted.insert(name.to_string(), tensor.clone());
            });
            let head = QaHead::init(d, &mut init);
            head.map(&head_prefix(t), &mut |name, tensor| {
                persisted.insert(name.to_string(), tensor.clone());
            });
        }
        let bytes = checkpoint::to_bytes(&persisted).unwrap();
        let manifest = checkpoint::manifest(&bytes).unwrap();

        let total = checkpoint::enumerated_count(&manifest);
        let expected_total = prog_model_size(&enc, &acfg, domains).unwrap();
        let layer0 = count_where(&manifest, |e| {
            e.name.starts_with("encoder/layer/0/") && e.shape.len() == 2
        });
        let adapter0 = count_where(&manifest, |e| {
            e.name.starts_with("adapter/0/0/attn/") && e.shape.len() == 2
        });
        let per_adapter = match structure {
            AdapterStructure::Pal => pal_count(d_s, d),
            AdapterStructure::Bn => bn_count(d_s, d),
        };
        let checks = [
            ("model size", total, expected_total),
            ("layer weights", layer0, layer_weight_count(d, d_ff)),
            ("adapter weights", adapter0, per_adapter),
        ];
        for (what, got, want) in checks {
            if got != want {
                return Outcome::new(
                    false,
                    format!("case {case} ({enc:?}, {acfg:?}, T={domains}): {what} enumerated {got} vs formula {want}"),
                );
            }
        }
    }
    let width = match_pal_width(256, 768, 12).unwrap();
    Outcome::new(
        width == 192,
        format!("{n} configurations exact; match_pal_width(256, 768) = {width}"),
    )
}

// ---------------------------------------------------------------- neutrality

/// Largest bit-level disagreement between adapted-with-fresh-adapters and
/// plain logits, over every structure and insertion mode.
pub fn adapter_neutrality() -> Outcome {
    let (domains, vocab) = synthetic(2, 1, 6, 1);
    let config = EncoderConfig::desk(vocab.len());
    let mut rng = seeded(9);
    let model = QaModel::init(config.clone(), &mut rng).unwrap();
    let mut mismatches = Vec::new();
    for structure in [AdapterStructure::Bn, AdapterStructure::Pal] {
        for insertion in [AdapterInsertion::Inside, AdapterInsertion::Aside] {
            let acfg = AdapterConfig {
                structure,
                insertion,
                d_s: 8,
                d: config.d,
                pal_heads: 2,
            };
            let set = AdapterSet::init(&acfg, config.n_layers, &mut rng).unwrap();
            for ex in &domains[0].train {
                let input = encode_pair(
                    &ex.question_tokens,
                    &ex.context_tokens,
                    &vocab,
                    config.max_len,
                )
                .unwrap();
                let run = |adapters: Option<&AdapterSet>| {
                    let mut g = Graph::inference();
                    let b = Bound::bind(
                        &mut g,
                        (&model.encoder, false),
                        (&model.head, HEAD_PREFIX, false),
                        adapters.map(|a| (a, "adapter/0", false)),
                    );
                    let (s, e) = b
                        .logits(&mut g, &config, &input, &mut Dropout::none())
                        .unwrap();
                    (g.value(s).to_bits(), g.value(e).to_bits())
                };
                if run(None) != run(Some(&set)) {
                    mismatches.push(format!("{structure:?}/{insertion:?}"));
                    break;
                }
            }
        }
    }
    Outcome::new(
        mismatches.is_empty(),
        if mismatches.is_empty() {
            "BN and PAL, inside and aside: logits bit-identical to the plain backbone".to_string()
        } else {
            format!("logits differ for {}", mismatches.join(", "))
        },
    )
}

// --------------------------------------------------------------- strategies

type LogitFn<'a> = dyn Fn(&QaExample) -> Result<(Vec<f64>, Vec<f64>)> + 'a;

/// Domain-1 logits captured right after domain-1 training and after the
/// whole sequence.
pub fn prog_zero_forgetting(seed: u64) -> Outcome {
    let (domains, vocab) = synthetic(seed, 3, 200, 100);
    let enc = EncoderConfig::desk(vocab.len());
    let acfg = AdapterConfig {
        structure: AdapterStructure::Bn,
        insertion: AdapterInsertion::Inside,
        d_s: 11,
        d: enc.d,
        pal_heads: 2,
    };
    let train = desk_train(seed);
    let first_test = domains[0].test.clone();
    let logits_bits = |p: &LogitFn| -> Vec<u64> {
        first_test
            .iter()
            .flat_map(|ex| {
                let (s, e) = p(ex).unwrap();
                s.into_iter().chain(e).map(f64::to_bits).collect::<Vec<_>>()
            })
            .collect()
    };
    let mut after_first = Vec::new();
    let out = run_sequence_with(
        domains,
        &StrategyConfig::prog(acfg, true),
        enc,
        vocab,
        &train,
        &mut |ctx| {
            if ctx.step == 0 && ctx.epoch + 1 == train.epochs {
                after_first = logits_bits(&|ex| ctx.state.logits(ex));
            }
            Ok(())
        },
    )
    .unwrap();
    let final_bits = logits_bits(&|ex| out.state.logits(ex));
    let f1_first = out.matrix.get(0, 0).unwrap().f1;
    let f1_last = out.matrix.get(2, 0).unwrap().f1;
    let identical = !after_first.is_empty() && after_first == final_bits;
    Outcome::new(
        identical && f1_last - f1_first == 0.0,
        format!(
            "{} domain-1 logits {}; F1 {f1_first:.2} -> {f1_last:.2} (diff {})",
            final_bits.len(),
            if identical { "bit-identical" } else { "DIFFER" },
            f1_last - f1_first
        ),
    )
}

pub fn run_seeded(seed: u64, n_domains: usize, strategy: &StrategyConfig) -> RunOutput {
    let (domains, vocab) = synthetic(seed, n_domains, 200, 100);
    let enc = EncoderConfig::desk(vocab.len());
    run_sequence(domains, strategy, enc, vocab, &desk_train(seed)).unwrap()
}

/// Domain-1 F1 drop from right after its training to the end of a 3-domain
/// sequence, per seed.
pub fn base_forgetting(seeds: &[u64]) -> (Vec<f64>, Outcome) {
    let drops: Vec<f64> = seeds
        .iter()
        .map(|&s| {
            let m = run_seeded(s, 3, &StrategyConfig::base()).matrix;
            m.get(0, 0).unwrap().f1 - m.get(2, 0).unwrap().f1
        })
        .collect();
    let ok = drops.iter().filter(|&&d| d >= 10.0).count();
    let detail = format!(
        "domain-1 F1 drop per seed [{}], {ok}/{} at least 10",
        drops
            .iter()
            .map(|d| format!("{d:.2}"))
            .collect::<Vec<_>>()
            .join(", "),
        seeds.len()
    );
    (drops.clone(), Outcome::new(ok == seeds.len(), detail))
}

pub struct EwcPair {
    pub displacement: f64,
    pub retention: f64,
}

/// Two-domain run: ‖Θ₂ − Θ₁‖₂ over all parameters and domain-1 F1 after
/// domain 2.
pub fn ewc_pair(seed: u64, lambda: f64) -> EwcPair {
    let (domains, vocab) = synthetic(seed, 2, 200, 100);
    let enc = EncoderConfig::desk(vocab.len());
    let train = desk_train(seed);
    let mut theta1: Option<ParamMap> = None;
    let out = run_sequence_with(
        domains,
        &StrategyConfig::reg(lambda),
        enc,
        vocab,
        &train,
        &mut |ctx| {
            if ctx.step == 0 && ctx.epoch + 1 == train.epochs {
                theta1 = Some(ctx.state.current.params());
            }
            Ok(())
        },
    )
    .unwrap();
    EwcPair {
        displacement: param_distance(&out.state.current.params(), &theta1.unwrap()).unwrap(),
        retention: out.matrix.get(1, 0).unwrap().f1,
    }
}

/// Penalty at Θ = Θ_prev and at F ≡ 0, on real model parameters.
pub fn ewc_zero_cases() -> Outcome {
    let (_, vocab) = synthetic(0, 1, 4, 1);
    let enc = EncoderConfig::desk(vocab.len());
    let a = QaModel::init(enc.clone(), &mut seeded(1)).unwrap().params();
    let b = QaModel::init(enc, &mut seeded(2)).unwrap().params();
    let ones: ParamMap = a.iter().map(|(n, t)| (n.clone(), t.map(|_| 1.0))).collect();
    let zeros: ParamMap = a.iter().map(|(n, t)| (n.clone(), t.map(|_| 0.0))).collect();
    let same = ewc_penalty(&a, &a, &ones).unwrap();
    let no_fisher = ewc_penalty(&a, &b, &zeros).unwrap();
    let moved = ewc_penalty(&a, &b, &ones).unwrap();
    Outcome::new(
        same == 0.0 && no_fisher == 0.0 && moved > 0.0,
        format!("R(Θ, Θ, 1) = {same}, R(Θ, Θ', 0) = {no_fisher}, R(Θ, Θ', 1) = {moved:.3}"),
    )
}

// ------------------------------------------------------------------ metrics

pub enum MetricCase {
    Norm(&'static str, &'static str),
    Em(&'static str, &'static str, f64),
    F1(&'static str, &'static str, f64),
}

pub const METRIC_CASES: [MetricCase; 25] = [
    MetricCase::Norm("The Cat.", "cat"),
    MetricCase::Norm("", ""),
    MetricCase::Norm("a  an the", ""),
    MetricCase::Norm("  Hello,   World!  ", "hello world"),
    MetricCase::Norm("An apple a day", "apple day"),
    MetricCase::Norm("theater", "theater"),
    MetricCase::Norm("U.S.A.", "usa"),
    MetricCase::Norm("rock-n-roll", "rocknroll"),
    MetricCase::Em("the cat", "The Cat.", 1.0),
    MetricCase::Em("cat", "cats", 0.0),
    MetricCase::Em("", "", 1.0),
    MetricCase::Em("the", "", 1.0),
    MetricCase::Em("Paris", "paris!", 1.0),
    MetricCase::Em("new york", "New  York City", 0.0),
    MetricCase::Em("1,000", "1000", 1.0),
    MetricCase::F1("a cat", "the cat", 1.0),
    MetricCase::F1("black cat", "cat food", 0.5),
    MetricCase::F1("the quick brown fox", "the quick brown fox", 1.0),
    MetricCase::F1("", "", 1.0),
    MetricCase::F1("cat", "", 0.0),
    MetricCase::F1("", "cat", 0.0),
    MetricCase::F1("dog", "cat", 0.0),
    MetricCase::F1("new york city", "york", 0.5),
    MetricCase::F1("cat cat", "cat", 2.0 / 3.0),
    MetricCase::F1("one two three four", "one two three five", 0.75),
];

pub fn metric_cases() -> Outcome {
    let mut failures = Vec::new();
    for (i, case) in METRIC_CASES.iter().enumerate() {
        let ok = match *case {
            MetricCase::Norm(s, want) => normalize_answer(s) == want,
            MetricCase::Em(p, g, want) => em_score(p, g) == want,
            MetricCase::F1(p, g, want) => f1_score(p, g) == want,
        };
        if !ok {
            failures.push(i);
        }
    }
    Outcome::new(
        failures.is_empty(),
        format!(
            "{}/{} hand-scored cases exact{}",
            METRIC_CASES.len() - failures.len(),
            METRIC_CASES.len(),
            if failures.is_empty() {
                String::new()
            } else {
                format!(", failing {failures:?}")
            }
        ),
    )
}

/// Answers the gold text for the first `correct` examples and a wrong word
/// otherwise.
struct Scripted {
    correct: usize,
}

impl Predictor for Scripted {
    fn predict(&self, ex: &QaExample) -> Result<SpanPrediction> {
        let idx: usize = ex.id.parse().unwrap();
        let text = if idx < self.correct {
            ex.answer_text.clone()
        } else {
            "zzz".to_string()
        };
        Ok(SpanPrediction {
            id: ex.id.clone(),
            text,
            start: 0,
            end: 0,
            score: 0.0,
        })
    }
}

fn scored_domain(f1: f64) -> Score {
    let n = 10_000;
    let examples: Vec<QaExample> = (0..n)
        .map(|i| QaExample {
            id: i.to_string(),
            question_tokens: vec![],
            context_tokens: vec!["answer".into()],
            answer_text: "answer".into(),
            answer_span: (0, 0),
            gold_answers: vec!["answer".into()],
            domain: "d".into(),
        })
        .collect();
    let correct = (f1 * n as f64 / 100.0).round() as usize;
    evaluate_domain(&Scripted { correct }, &examples)
        .unwrap()
        .score
}

/// Row sums of published final-row F1s, each F1 produced by scoring a
/// scripted predictor on 10 000 examples.
pub fn published_row_sums() -> Outcome {
    let rows: [(&[f64], f64); 2] = [
        (&[67.9, 44.69, 67.8, 58.51, 85.12], 324.02),
        (
            &[54.81, 57.95, 54.66, 65.29, 60.96, 46.23, 57.48, 81.4],
            478.78,
        ),
    ];
    let mut got = Vec::new();
    let mut ok = true;
    for (row, want) in rows {
        let names: Vec<String> = (0..row.len()).map(|i| format!("d{i}")).collect();
        let mut m = ResultsMatrix::new(names);
        let scores: Vec<Score> = row.iter().map(|&f| scored_domain(f)).collect();
        for t in 0..row.len() {
            m.push_row(scores[..=t].to_vec()).unwrap();
        }
        let total = m.overall(row.len() - 1);
        ok &= (total - want).abs() < 5e-3
            && (cda_core::continual::overall(&scores) - total).abs() < 1e-9;
        got.push(format!("{total:.2} (want {want})"));
    }
    Outcome::new(ok, format!("row sums {}", got.join(", ")))
}

// ----------------------------------------------------------------- splitter

#[derive(Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    FirstThree,
    LastToken,
    Other,
}

/// 40 questions with their expected label and the rule that decides it.
pub const SPLIT_FIXTURE: [(&str, &str, Branch); 40] = [
    ("what is the capital of france", "what", Branch::FirstThree),
    ("What year did the war end?", "what", Branch::FirstThree),
    ("In what city was she born?", "what", Branch::FirstThree),
    ("and what happened next", "what", Branch::FirstThree),
    ("The main export is what?", "what", Branch::LastToken),
    ("His favourite colour was what", "what", Branch::LastToken),
    ("what who where", "what", Branch::FirstThree),
    ("So, what now?", "what", Branch::FirstThree),
    ("Which team won the cup?", "which", Branch::FirstThree),
    ("In which year was it built", "which", Branch::FirstThree),
    ("Of these, which is older?", "which", Branch::FirstThree),
    ("The winner was which", "which", Branch::LastToken),
    ("which", "which", Branch::FirstThree),
    ("Where is the museum?", "where", Branch::FirstThree),
    ("From where did they sail", "where", Branch::FirstThree),
    ("The treaty was signed where?", "where", Branch::LastToken),
    (
        "Near where the river bends, what stands?",
        "where",
        Branch::FirstThree,
    ),
    ("They buried the treasure where", "where", Branch::LastToken),
    ("When did the reign begin?", "when", Branch::FirstThree),
    ("Since when has it rained", "when", Branch::FirstThree),
    ("The bridge opened when?", "when", Branch::LastToken),
    ("The last eclipse happened when", "when", Branch::LastToken),
    ("How tall is the tower?", "how", Branch::FirstThree),
    ("And how did it end", "how", Branch::FirstThree),
    ("So then how?", "how", Branch::FirstThree),
    ("The recipe is made how", "how", Branch::LastToken),
    ("how many moons orbit mars", "how", Branch::FirstThree),
    ("Why did the empire fall?", "why", Branch::FirstThree),
    ("But why not?", "why", Branch::FirstThree),
    ("The experiment failed why", "why", Branch::LastToken),
    ("Who wrote the novel?", "who", Branch::FirstThree),
    ("The parcel was sent by who", "who", Branch::LastToken),
    (
        "The inventor of the lamp was who?",
        "who",
        Branch::LastToken,
    ),
    ("With who did he travel", "who", Branch::FirstThree),
    ("Name the largest ocean.", "other", Branch::Other),
    (
        "The largest planet is Jupiter, true or false?",
        "other",
        Branch::Other,
    ),
    ("Give the year of the coronation", "other", Branch::Other),
    (
        "Is it raining in what the forecast says later today",
        "other",
        Branch::Other,
    ),
    ("Whose book is this?", "other", Branch::Other),
    ("List three primes", "other", Branch::Other),
];

pub fn splitter_fixture() -> Outcome {
    let mut mislabeled = Vec::new();
    let mut expected: BTreeMap<&str, usize> = BTreeMap::new();
    for (q, label, _) in SPLIT_FIXTURE {
        *expected.entry(label).or_default() += 1;
        if question_type(q) != label {
            mislabeled.push(format!("{q:?} -> {}", question_type(q)));
        }
    }
    let records: Vec<RawRecord> = SPLIT_FIXTURE
        .iter()
        .enumerate()
        .map(|(i, (q, _, _))| RawRecord {
            id: format!("q{i}"),
            context: "the answer is here".into(),
            question: q.to_string(),
            answers: vec![RawAnswer {
                text: "here".into(),
                char_span: Some((14, 17)),
            }],
            source_tag: "fixture".into(),
        })
        .collect();
    let policy = SplitPolicy {
        test_fraction: 0.25,
        n_train: None,
        n_test: None,
        seed: 0,
    };
    let domains = build_cda_q(records, None, &policy).unwrap();
    let names: Vec<&str> = domains.iter().map(|d| d.name.as_str()).collect();
    let counts: Vec<usize> = domains
        .iter()
        .map(|d| d.train.len() + d.test.len())
        .collect();
    let want: Vec<usize> = CDA_Q_ORDER
        .iter()
        .map(|n| expected.get(n).copied().unwrap_or(0))
        .collect();
    let branches = [Branch::FirstThree, Branch::LastToken, Branch::Other]
        .iter()
        .all(|b| SPLIT_FIXTURE.iter().any(|(_, _, x)| x == b));
    let ok = mislabeled.is_empty()
        && names == CDA_Q_ORDER
        && counts == want
        && branches
        && counts.iter().sum::<usize>() == 40;
    Outcome::new(
        ok,
        format!(
            "partition {:?} over {:?}{}",
            counts,
            names,
            if mislabeled.is_empty() {
                String::new()
            } else {
                format!("; mislabeled {}", mislabeled.join("; "))
            }
        ),
    )
}

// -------------------------------------------------------------- determinism

pub fn small_spec(seed: u64) -> ExperimentSpec {
    ExperimentSpec {
        seed,
        data: DataSpec::Synthetic(SyntheticConfig {
            n_domains: 2,
            n_train: 60,
            n_test: 30,
            ..SyntheticConfig::default()
        }),
        strategies: vec![
            StrategySpec::new(StrategyKind::Base),
            StrategySpec::new(StrategyKind::Reg),
            StrategySpec::new(StrategyKind::Prog),
        ],
        ..ExperimentSpec::default()
    }
}

/// Runs the same spec twice and compares every report file except timing.
pub fn report_determinism(spec: &ExperimentSpec) -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut listings = Vec::new();
    for sub in ["a", "b"] {
        let bundle = cmd_run(spec).unwrap();
        let written = write_report(&bundle, &dir.path().join(sub), ReportFormat::All).unwrap();
        let mut files: Vec<(String, Vec<u8>)> = written
            .iter()
            .filter(|p| p.file_name().unwrap() != TIMING_JSON)
            .map(|p| {
                (
                    p.file_name().unwrap().to_string_lossy().into_owned(),
                    std::fs::read(p).unwrap(),
                )
            })
            .collect();
        files.sort();
        listings.push(files);
    }
    let differing: Vec<&str> = listings[0]
        .iter()
        .zip(&listings[1])
        .filter(|(a, b)| a != b)
        .map(|(a, _)| a.0.as_str())
        .collect();
    let same_names = listings[0].len() == listings[1].len();
    Outcome::new(
        same_names && differing.is_empty(),
        format!(
            "{} report files byte-identical{}",
            listings[0].len(),
            if differing.is_empty() {
                String::new()
            } else {
                format!("; differing: {}", differing.join(", "))
            }
        ),
    )
}
