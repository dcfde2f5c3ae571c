//! Experiment orchestration behind the command-line front end: spec
//! resolution, the experiment commands, and deterministic report output.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapters::{AdapterConfig, AdapterInsertion, AdapterStructure, DEFAULT_PAL_HEADS};
use crate::checkpoint;
use crate::continual::{
    run_sequence, run_sequence_with, RunOutput, StrategyConfig, StrategyKind, TrainConfig,
    DEFAULT_LAMBDA,
};
use crate::data::mrqa::{load_jsonl, read_domains, write_domains};
use crate::data::split::{
    build_cda_c, build_cda_q, dataset_stats, DatasetStats, SplitPolicy, TaggedCollection,
};
use crate::data::synthetic::{make_synthetic_cda, SyntheticConfig};
use crate::data::{build_vocab, AlignStats, Domain, RawDomain, RawRecord};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::model::evaluate_domain;
use crate::results::ResultsMatrix;

/// Host width the reference adapter sizes refer to.
pub const REFERENCE_WIDTH: usize = 768;
/// Bottleneck width used at reference scale.
pub const REFERENCE_ADAPTER_WIDTH: usize = 256;
pub const SWEEP_SIZES: [usize; 6] = [32, 64, 128, 256, 384, 512];

/// Adapter width scaled from the reference host width to `d`: at least 4,
/// and a multiple of the head count for projected attention.
pub fn scale_adapter_width(
    d_s: usize,
    d: usize,
    structure: AdapterStructure,
    pal_heads: usize,
) -> usize {
    let scaled = ((d_s * d) as f64 / REFERENCE_WIDTH as f64).round() as usize;
    let scaled = scaled.max(4);
    match structure {
        AdapterStructure::Pal if pal_heads > 0 => scaled.div_ceil(pal_heads) * pal_heads,
        _ => scaled,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdapterSpec {
    pub structure: AdapterStructure,
    pub insertion: AdapterInsertion,
    /// Width; unset means the reference width scaled to the model.
    pub d_s: Option<usize>,
    pub pal_heads: usize,
}

impl Default for AdapterSpec {
    fn default() -> Self {
        Self {
            structure: AdapterStructure::Bn,
            insertion: AdapterInsertion::Inside,
            d_s: None,
            pal_heads: DEFAULT_PAL_HEADS,
        }
    }
}

impl AdapterSpec {
    pub fn resolve(&self, d: usize) -> AdapterConfig {
        AdapterConfig {
            structure: self.structure,
            insertion: self.insertion,
            d_s: self.d_s.unwrap_or_else(|| {
                scale_adapter_width(REFERENCE_ADAPTER_WIDTH, d, self.structure, self.pal_heads)
            }),
            d,
            pal_heads: self.pal_heads,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategySpec {
    pub kind: StrategyKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adapter: Option<AdapterSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init_from_prev: Option<bool>,
}

impl StrategySpec {
    pub fn new(kind: StrategyKind) -> Self {
        Self {
            kind,
            lambda: None,
            adapter: None,
            init_from_prev: None,
        }
    }

    pub fn resolve(&self, d: usize) -> Result<StrategyConfig> {
        let cfg = match self.kind {
            StrategyKind::Prog => StrategyConfig::prog(
                self.adapter.clone().unwrap_or_default().resolve(d),
                self.init_from_prev.unwrap_or(true),
            ),
            StrategyKind::Reg => StrategyConfig::reg(self.lambda.unwrap_or(DEFAULT_LAMBDA)),
            StrategyKind::Base => StrategyConfig::base(),
            StrategyKind::Individual => StrategyConfig::individual(),
        };
        if self.kind != StrategyKind::Prog && self.adapter.is_some() {
            return Err(Error::Config(format!(
                "{} does not take adapters",
                self.kind
            )));
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Encoder dimensions; the vocabulary size comes from the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSpec {
    pub d: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub n_layers: usize,
    pub max_len: usize,
    pub dropout: f64,
    pub vocab_min_count: usize,
}

impl Default for ModelSpec {
    fn default() -> Self {
        let e = EncoderConfig::desk(4);
        Self {
            d: e.d,
            n_heads: e.n_heads,
            d_ff: e.d_ff,
            n_layers: e.n_layers,
            max_len: e.max_len,
            dropout: e.dropout,
            vocab_min_count: 1,
        }
    }
}

impl ModelSpec {
    pub fn encoder(&self, vocab_size: usize) -> EncoderConfig {
        EncoderConfig {
            d: self.d,
            n_heads: self.n_heads,
            d_ff: self.d_ff,
            n_layers: self.n_layers,
            max_len: self.max_len,
            dropout: self.dropout,
            ..EncoderConfig::desk(vocab_size)
        }
    }
}

/// Where domains come from: a directory of split domain files or the
/// synthetic generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSpec {
    Dir(PathBuf),
    Synthetic(SyntheticConfig),
}

impl Default for DataSpec {
    fn default() -> Self {
        DataSpec::Synthetic(SyntheticConfig::default())
    }
}

impl DataSpec {
    pub fn load(&self, seed: u64) -> Result<Vec<RawDomain>> {
        match self {
            DataSpec::Dir(dir) => read_domains(dir),
            DataSpec::Synthetic(cfg) => make_synthetic_cda(cfg, seed),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum OrderPolicy {
    Given,
    Ascending,
    Descending,
    Explicit(Vec<String>),
}

impl OrderPolicy {
    pub fn name(&self) -> String {
        match self {
            OrderPolicy::Given => "given".into(),
            OrderPolicy::Ascending => "ascending".into(),
            OrderPolicy::Descending => "descending".into(),
            OrderPolicy::Explicit(names) => names.join(">"),
        }
    }

    /// Reorders domains; size is the training-example count, ties keep the
    /// given order.
    pub fn apply(&self, mut domains: Vec<Domain>) -> Result<Vec<Domain>> {
        match self {
            OrderPolicy::Given => {}
            OrderPolicy::Ascending => domains.sort_by_key(|d| d.train.len()),
            OrderPolicy::Descending => domains.sort_by_key(|d| std::cmp::Reverse(d.train.len())),
            OrderPolicy::Explicit(names) => {
                let mut out = Vec::with_capacity(names.len());
                for n in names {
                    let i = domains.iter().position(|d| &d.name == n).ok_or_else(|| {
                        Error::Config(format!("order names unknown domain {n:?}"))
                    })?;
                    out.push(domains.remove(i));
                }
                return Ok(out);
            }
        }
        Ok(domains)
    }
}

impl FromStr for OrderPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "given" => Ok(OrderPolicy::Given),
            "ascending" | "asc" => Ok(OrderPolicy::Ascending),
            "descending" | "desc" => Ok(OrderPolicy::Descending),
            "" => Err(Error::Config("empty domain order".into())),
            _ => Ok(OrderPolicy::Explicit(
                s.split([',', '>'])
                    .map(|x| x.trim().to_string())
                    .filter(|x| !x.is_empty())
                    .collect(),
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
enum OrderRepr {
    Policy(String),
    Explicit(Vec<String>),
}

impl Serialize for OrderPolicy {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            OrderPolicy::Explicit(v) => OrderRepr::Explicit(v.clone()),
            other => OrderRepr::Policy(other.name()),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for OrderPolicy {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        match OrderRepr::deserialize(d)? {
            OrderRepr::Policy(s) => s.parse().map_err(serde::de::Error::custom),
            OrderRepr::Explicit(v) => Ok(OrderPolicy::Explicit(v)),
        }
    }
}

/// Everything one experiment needs. All strategies of an experiment share
/// the data, the order and the seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentSpec {
    pub seed: u64,
    pub data: DataSpec,
    pub order: OrderPolicy,
    pub strategies: Vec<StrategySpec>,
    pub model: ModelSpec,
    pub train: TrainConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            data: DataSpec::default(),
            order: OrderPolicy::Given,
            strategies: vec![
                StrategySpec::new(StrategyKind::Base),
                StrategySpec::new(StrategyKind::Reg),
                StrategySpec::new(StrategyKind::Prog),
            ],
            model: ModelSpec::default(),
            train: TrainConfig::default(),
            out: None,
        }
    }
}

impl ExperimentSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.strategies.is_empty() {
            return Err(Error::Config("no strategies to run".into()));
        }
        self.model.encoder(4).validate()?;
        for s in &self.strategies {
            s.resolve(self.model.d)?;
        }
        let mut train = self.train.clone();
        train.seed = self.seed;
        train.validate()
    }

    /// Training config with the experiment seed applied.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    /// Hex digest of the canonical JSON form, output directory excluded.
    pub fn config_hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.out = None;
        let json = serde_json::to_string(&canonical).expect("spec serializes");
        hex(&Sha256::digest(json.as_bytes()))[..16].to_string()
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Domains of an experiment, tokenized, ordered, with the shared vocabulary.
pub struct PreparedData {
    pub domains: Vec<Domain>,
    pub alignment: AlignStats,
    /// Domains dropped for lack of training or test examples.
    pub dropped: Vec<String>,
}

pub fn prepare_data(spec: &ExperimentSpec) -> Result<PreparedData> {
    let raw = spec.data.load(spec.seed)?;
    let mut alignment = AlignStats::default();
    let mut domains = Vec::new();
    let mut dropped = Vec::new();
    for r in &raw {
        let (d, stats) = r.to_domain();
        alignment.merge(stats);
        if d.train.is_empty() || d.test.is_empty() {
            dropped.push(d.name);
        } else {
            domains.push(d);
        }
    }
    if domains.is_empty() {
        return Err(Error::Data(
            "no domain has both training and test examples".into(),
        ));
    }
    Ok(PreparedData {
        domains: spec.order.apply(domains)?,
        alignment,
        dropped,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub label: String,
    pub strategy: StrategyConfig,
    pub order: Vec<String>,
    pub matrix: ResultsMatrix,
    pub parameter_count: usize,
    pub skipped_train_examples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    /// Domains fully trained plus the fraction of the current one.
    pub progress: f64,
    pub step: usize,
    pub epoch: usize,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForgettingCurve {
    pub run_id: String,
    pub tracked_domain: String,
    pub points: Vec<CurvePoint>,
}

/// A labelled numeric table, e.g. strategies × domains.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub name: String,
    pub row_header: String,
    pub columns: Vec<String>,
    pub rows: Vec<(String, Vec<f64>)>,
}

impl Table {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{},{}\n", self.row_header, self.columns.join(","));
        for (label, values) in &self.rows {
            out.push_str(label);
            for v in values {
                out.push_str(&format!(",{v:.4}"));
            }
            out.push('\n');
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{}\t{}\n", self.row_header, self.columns.join("\t"));
        for (label, values) in &self.rows {
            out.push_str(label);
            for v in values {
                out.push_str(&format!("\t{v:.2}"));
            }
            out.push('\n');
        }
        out
    }
}

/// All results of one command invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportBundle {
    pub command: String,
    pub seed: u64,
    pub config_hash: String,
    pub config: ExperimentSpec,
    pub domains: Vec<String>,
    pub dropped_domains: Vec<String>,
    pub alignment: AlignStats,
    pub runs: Vec<RunRecord>,
    pub curves: Vec<ForgettingCurve>,
    pub tables: Vec<Table>,
    /// Per-run training logs, keyed by run id.
    #[serde(skip)]
    pub logs: BTreeMap<String, String>,
    /// Per-run checkpoints, keyed by run id.
    #[serde(skip)]
    pub checkpoints: BTreeMap<String, Vec<u8>>,
    /// Wall-clock seconds per run; written apart from the report so that
    /// reports stay byte-identical across repeated runs.
    #[serde(skip)]
    pub wall_seconds: BTreeMap<String, f64>,
}

impl ReportBundle {
    fn new(command: &str, spec: &ExperimentSpec, data: &PreparedData) -> Self {
        Self {
            command: command.into(),
            seed: spec.seed,
            config_hash: spec.config_hash(),
            config: ExperimentSpec {
                out: None,
                ..spec.clone()
            },
            domains: data.domains.iter().map(|d| d.name.clone()).collect(),
            dropped_domains: data.dropped.clone(),
            alignment: data.alignment,
            runs: Vec::new(),
            curves: Vec::new(),
            tables: Vec::new(),
            logs: BTreeMap::new(),
            checkpoints: BTreeMap::new(),
            wall_seconds: BTreeMap::new(),
        }
    }

    fn run_id(&self, label: &str) -> String {
        format!(
            "{}-{:02}-{}",
            self.command,
            self.runs.len() + 1,
            label.to_ascii_lowercase()
        )
    }

    fn record(
        &mut self,
        run_id: String,
        label: String,
        strategy: StrategyConfig,
        out: RunOutput,
        secs: f64,
    ) -> Result<()> {
        self.logs.insert(run_id.clone(), out.log.to_jsonl());
        self.checkpoints.insert(
            run_id.clone(),
            checkpoint::to_bytes(&out.state.persisted_params())?,
        );
        self.wall_seconds.insert(run_id.clone(), secs);
        self.runs.push(RunRecord {
            run_id,
            label,
            strategy,
            order: out.matrix.domains.clone(),
            parameter_count: out.state.parameter_count(),
            skipped_train_examples: out.log.skipped,
            matrix: out.matrix,
        });
        Ok(())
    }

    pub fn run(&self, label: &str) -> Option<&RunRecord> {
        self.runs.iter().find(|r| r.label == label)
    }
}

fn timed<T>(f: impl FnOnce() -> Result<T>) -> Result<(T, f64)> {
    let start = Instant::now();
    let v = f()?;
    Ok((v, start.elapsed().as_secs_f64()))
}

fn run_one(
    data: &PreparedData,
    domains: Vec<Domain>,
    spec: &ExperimentSpec,
    strategy: &StrategyConfig,
) -> Result<RunOutput> {
    let vocab = build_vocab(&data.domains, spec.model.vocab_min_count);
    let encoder = spec.model.encoder(vocab.len());
    run_sequence(domains, strategy, encoder, vocab, &spec.train_config())
}

/// Trains every strategy of the spec over the ordered domains.
pub fn cmd_run(spec: &ExperimentSpec) -> Result<ReportBundle> {
    spec.validate()?;
    let data = prepare_data(spec)?;
    let mut bundle = ReportBundle::new("run", spec, &data);
    for s in &spec.strategies {
        let strategy = s.resolve(spec.model.d)?;
        let label = strategy.label();
        let run_id = bundle.run_id(&label);
        let (out, secs) = timed(|| run_one(&data, data.domains.clone(), spec, &strategy))?;
        bundle.record(run_id, label, strategy, out, secs)?;
    }
    let mut table = Table {
        name: "final".into(),
        row_header: "strategy".into(),
        columns: bundle
            .domains
            .iter()
            .cloned()
            .chain(["overall".to_string()])
            .collect(),
        rows: Vec::new(),
    };
    for r in &bundle.runs {
        table
            .rows
            .push((r.label.clone(), final_row_with_overall(&r.matrix)));
    }
    bundle.tables.push(table);
    Ok(bundle)
}

fn final_row_with_overall(m: &ResultsMatrix) -> Vec<f64> {
    let mut row: Vec<f64> = m.final_row().unwrap_or(&[]).iter().map(|s| s.f1).collect();
    row.push(m.overall(m.steps().saturating_sub(1)));
    row
}

/// F1 of domain `tracked` after every epoch from its own training onward.
pub fn cmd_forgetting_curve(spec: &ExperimentSpec, tracked: usize) -> Result<ReportBundle> {
    spec.validate()?;
    let data = prepare_data(spec)?;
    let name = data
        .domains
        .get(tracked)
        .ok_or_else(|| Error::Config(format!("tracked domain index {tracked} out of range")))?
        .name
        .clone();
    let mut bundle = ReportBundle::new("forgetting-curve", spec, &data);
    let vocab = build_vocab(&data.domains, spec.model.vocab_min_count);
    let encoder = spec.model.encoder(vocab.len());
    let train = spec.train_config();
    for s in &spec.strategies {
        let strategy = s.resolve(spec.model.d)?;
        let label = strategy.label();
        let run_id = bundle.run_id(&label);
        let mut points = Vec::new();
        let (out, secs) = timed(|| {
            run_sequence_with(
                data.domains.clone(),
                &strategy,
                encoder.clone(),
                vocab.clone(),
                &train,
                &mut |ctx| {
                    if ctx.step < tracked {
                        return Ok(());
                    }
                    let test = &ctx.tests[tracked].1;
                    let f1 = evaluate_domain(ctx.state, test)?.score.f1;
                    points.push(CurvePoint {
                        progress: ctx.step as f64 + (ctx.epoch + 1) as f64 / train.epochs as f64,
                        step: ctx.step,
                        epoch: ctx.epoch,
                        f1,
                    });
                    Ok(())
                },
            )
        })?;
        bundle.curves.push(ForgettingCurve {
            run_id: run_id.clone(),
            tracked_domain: name.clone(),
            points,
        });
        bundle.record(run_id, label, strategy, out, secs)?;
    }
    Ok(bundle)
}

/// First PROG adapter of the spec, or the default one.
fn prog_adapter(spec: &ExperimentSpec) -> AdapterSpec {
    spec.strategies
        .iter()
        .find(|s| s.kind == StrategyKind::Prog)
        .and_then(|s| s.adapter.clone())
        .unwrap_or_default()
}

/// Progressive adapters with and without carrying the previous domain's
/// adapters forward, against per-domain fine-tuning.
pub fn cmd_forward_transfer(spec: &ExperimentSpec) -> Result<ReportBundle> {
    spec.validate()?;
    let data = prepare_data(spec)?;
    let mut bundle = ReportBundle::new("forward-transfer", spec, &data);
    let adapter = prog_adapter(spec).resolve(spec.model.d);
    let strategies = [
        StrategyConfig::prog(adapter, true),
        StrategyConfig::prog(adapter, false),
        StrategyConfig::individual(),
    ];
    let mut table = Table {
        name: "forward_transfer".into(),
        row_header: "strategy".into(),
        columns: bundle
            .domains
            .iter()
            .cloned()
            .chain(["overall".to_string()])
            .collect(),
        rows: Vec::new(),
    };
    for strategy in strategies {
        let label = strategy.label();
        let run_id = bundle.run_id(&label);
        let (out, secs) = timed(|| run_one(&data, data.domains.clone(), spec, &strategy))?;
        // each domain scored right after its own training
        let mut row: Vec<f64> = (0..out.matrix.steps())
            .map(|k| out.matrix.get(k, k).map_or(0.0, |s| s.f1))
            .collect();
        row.push(row.iter().sum());
        table.rows.push((label.clone(), row));
        bundle.record(run_id, label, strategy, out, secs)?;
    }
    bundle.tables.push(table);
    Ok(bundle)
}

/// Final overall score of every strategy under each domain order.
pub fn cmd_order_robustness(spec: &ExperimentSpec, orders: &[OrderPolicy]) -> Result<ReportBundle> {
    spec.validate()?;
    if orders.is_empty() {
        return Err(Error::Config("no domain orders given".into()));
    }
    let data = prepare_data(spec)?;
    let mut bundle = ReportBundle::new("order-robustness", spec, &data);
    let strategies = spec
        .strategies
        .iter()
        .map(|s| s.resolve(spec.model.d))
        .collect::<Result<Vec<_>>>()?;
    let mut table = Table {
        name: "order_robustness".into(),
        row_header: "order".into(),
        columns: strategies.iter().map(StrategyConfig::label).collect(),
        rows: Vec::new(),
    };
    for order in orders {
        let domains = order.apply(data.domains.clone())?;
        let mut row = Vec::new();
        for strategy in &strategies {
            let label = strategy.label();
            let run_id = bundle.run_id(&format!("{}-{label}", order.name().replace('>', "_")));
            let (out, secs) = timed(|| run_one(&data, domains.clone(), spec, strategy))?;
            row.push(out.matrix.overall(out.matrix.steps() - 1));
            bundle.record(run_id, label, *strategy, out, secs)?;
        }
        table.rows.push((order.name(), row));
    }
    bundle.tables.push(table);
    Ok(bundle)
}

/// One progressive run per adapter width. `sizes` are reference-scale
/// widths, scaled to the model width.
pub fn cmd_adapter_sweep(spec: &ExperimentSpec, sizes: &[usize]) -> Result<ReportBundle> {
    spec.validate()?;
    if sizes.is_empty() {
        return Err(Error::Config("no adapter sizes given".into()));
    }
    let data = prepare_data(spec)?;
    let mut bundle = ReportBundle::new("adapter-sweep", spec, &data);
    let base = prog_adapter(spec);
    let mut table = Table {
        name: "adapter_sweep".into(),
        row_header: "d_s".into(),
        columns: bundle
            .domains
            .iter()
            .cloned()
            .chain(["overall".to_string()])
            .collect(),
        rows: Vec::new(),
    };
    for &size in sizes {
        let d_s = scale_adapter_width(size, spec.model.d, base.structure, base.pal_heads);
        let adapter = AdapterSpec {
            d_s: Some(d_s),
            ..base.clone()
        }
        .resolve(spec.model.d);
        let strategy = StrategyConfig::prog(adapter, true);
        let run_id = bundle.run_id(&format!("prog-{size}"));
        let (out, secs) = timed(|| run_one(&data, data.domains.clone(), spec, &strategy))?;
        table.rows.push((
            format!("{size} ({d_s})"),
            final_row_with_overall(&out.matrix),
        ));
        bundle.record(run_id, strategy.label(), strategy, out, secs)?;
    }
    bundle.tables.push(table);
    Ok(bundle)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Csv,
    Text,
    #[default]
    All,
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(ReportFormat::Csv),
            "text" | "txt" => Ok(ReportFormat::Text),
            "all" => Ok(ReportFormat::All),
            other => Err(Error::Config(format!("unknown report format {other:?}"))),
        }
    }
}

pub const REPORT_JSON: &str = "report.json";
pub const REPORT_TEXT: &str = "report.txt";
pub const TIMING_JSON: &str = "timing.json";

/// Human-readable report: config, every matrix, curves and tables.
pub fn render_text(bundle: &ReportBundle) -> String {
    let mut out = format!(
        "command: {}\nseed: {}\nconfig_hash: {}\ndomains: {}\n",
        bundle.command,
        bundle.seed,
        bundle.config_hash,
        bundle.domains.join(" > ")
    );
    if !bundle.dropped_domains.is_empty() {
        out.push_str(&format!(
            "dropped (empty): {}\n",
            bundle.dropped_domains.join(", ")
        ));
    }
    let a = bundle.alignment;
    out.push_str(&format!(
        "examples kept: {}, misaligned: {}, empty: {}\n",
        a.kept, a.misaligned, a.empty
    ));
    for r in &bundle.runs {
        out.push_str(&format!(
            "\n== {} [{}] order {} params {}\n",
            r.run_id,
            r.label,
            r.order.join(">"),
            r.parameter_count
        ));
        out.push_str(&r.matrix.to_table());
    }
    for c in &bundle.curves {
        out.push_str(&format!(
            "\n== curve {} tracking {}\nprogress\tf1\n",
            c.run_id, c.tracked_domain
        ));
        for p in &c.points {
            out.push_str(&format!("{:.3}\t{:.2}\n", p.progress, p.f1));
        }
    }
    for t in &bundle.tables {
        out.push_str(&format!("\n== table {}\n", t.name));
        out.push_str(&t.to_text());
    }
    out.push_str("\n== resolved config\n");
    out.push_str(
        &toml::to_string(&bundle.config).unwrap_or_else(|e| format!("# unavailable: {e}\n")),
    );
    out
}

fn write(dir: &Path, name: &str, bytes: &[u8], written: &mut Vec<PathBuf>) -> Result<()> {
    let p = dir.join(name);
    fs::write(&p, bytes).map_err(|e| Error::io(&p, e))?;
    written.push(p);
    Ok(())
}

/// Writes the bundle into `dir`. Everything except the timing file is a
/// pure function of the bundle's results.
pub fn write_report(
    bundle: &ReportBundle,
    dir: &Path,
    format: ReportFormat,
) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    let json = serde_json::to_string_pretty(bundle)? + "\n";
    write(dir, REPORT_JSON, json.as_bytes(), &mut written)?;
    if format != ReportFormat::Text {
        for r in &bundle.runs {
            write(
                dir,
                &format!("{}.csv", r.run_id),
                r.matrix.to_csv().as_bytes(),
                &mut written,
            )?;
        }
        for c in &bundle.curves {
            let mut csv = String::from("progress,step,epoch,f1\n");
            for p in &c.points {
                csv.push_str(&format!(
                    "{:.4},{},{},{:.4}\n",
                    p.progress,
                    p.step + 1,
                    p.epoch + 1,
                    p.f1
                ));
            }
            write(
                dir,
                &format!("curve-{}.csv", c.run_id),
                csv.as_bytes(),
                &mut written,
            )?;
        }
        for t in &bundle.tables {
            write(
                dir,
                &format!("table-{}.csv", t.name),
                t.to_csv().as_bytes(),
                &mut written,
            )?;
        }
    }
    if format != ReportFormat::Csv {
        write(
            dir,
            REPORT_TEXT,
            render_text(bundle).as_bytes(),
            &mut written,
        )?;
    }
    for (id, log) in &bundle.logs {
        write(
            dir,
            &format!("{id}.log.jsonl"),
            log.as_bytes(),
            &mut written,
        )?;
    }
    for (id, bytes) in &bundle.checkpoints {
        write(dir, &format!("{id}.ckpt"), bytes, &mut written)?;
    }
    if !bundle.wall_seconds.is_empty() {
        let timing = serde_json::to_string_pretty(&bundle.wall_seconds)? + "\n";
        write(dir, TIMING_JSON, timing.as_bytes(), &mut written)?;
    }
    Ok(written)
}

/// Re-renders a report written earlier.
pub fn cmd_report(dir: &Path, format: ReportFormat, out: &Path) -> Result<Vec<PathBuf>> {
    let p = dir.join(REPORT_JSON);
    let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    let bundle: ReportBundle = serde_json::from_str(&text)?;
    write_report(&bundle, out, format)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitMode {
    /// One domain per question type.
    CdaQ,
    /// One domain per source collection.
    CdaC,
}

impl FromStr for SplitMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "cda-q" | "q" | "question" => Ok(SplitMode::CdaQ),
            "cda-c" | "c" | "context" => Ok(SplitMode::CdaC),
            other => Err(Error::Config(format!("unknown split mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitDomainSummary {
    pub name: String,
    pub train: DatasetStats,
    pub test: DatasetStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSummary {
    pub domains: Vec<SplitDomainSummary>,
    pub skipped_no_span: usize,
    pub alignment: AlignStats,
    pub files: Vec<PathBuf>,
}

impl SplitSummary {
    pub fn to_text(&self) -> String {
        let mut out = String::from("domain\ttrain\ttest\tq_words\ta_words\tc_words\n");
        for d in &self.domains {
            out.push_str(&format!(
                "{}\t{}\t{}\t{:.2}\t{:.2}\t{:.2}\n",
                d.name,
                d.train.count,
                d.test.count,
                d.train.mean_question_words,
                d.train.mean_answer_words,
                d.train.mean_context_words
            ));
        }
        out.push_str(&format!(
            "skipped (no span): {}, misaligned: {}\n",
            self.skipped_no_span, self.alignment.misaligned
        ));
        out
    }
}

/// Builds domain files from MRQA inputs. For source-collection domains each
/// input file is one collection; `test` files are matched by tag. For
/// question-type domains all inputs are pooled.
pub fn cmd_split(
    inputs: &[PathBuf],
    test: &[PathBuf],
    mode: SplitMode,
    policy: &SplitPolicy,
    out: &Path,
) -> Result<SplitSummary> {
    if inputs.is_empty() {
        return Err(Error::Config("no input files".into()));
    }
    let mut skipped = 0;
    let mut load_all = |paths: &[PathBuf]| -> Result<Vec<(String, Vec<RawRecord>)>> {
        paths
            .iter()
            .map(|p| {
                let r = load_jsonl(p, None)?;
                skipped += r.skipped_no_span;
                let tag = r
                    .records
                    .first()
                    .map(|x| x.source_tag.clone())
                    .unwrap_or_default();
                Ok((tag, r.records))
            })
            .collect()
    };
    let train = load_all(inputs)?;
    let test = load_all(test)?;
    let raw = match mode {
        SplitMode::CdaQ => {
            let pool = |v: Vec<(String, Vec<RawRecord>)>| {
                v.into_iter().flat_map(|(_, r)| r).collect::<Vec<_>>()
            };
            let held = (!test.is_empty()).then(|| pool(test));
            build_cda_q(pool(train), held, policy)?
        }
        SplitMode::CdaC => {
            let mut tests: BTreeMap<String, Vec<RawRecord>> = BTreeMap::new();
            for (tag, recs) in test {
                tests.entry(tag).or_default().extend(recs);
            }
            let mut merged: Vec<TaggedCollection> = Vec::new();
            for (tag, recs) in train {
                match merged.iter_mut().find(|c| c.tag == tag) {
                    Some(c) => c.records.extend(recs),
                    None => merged.push(TaggedCollection {
                        test: tests.remove(&tag),
                        tag,
                        records: recs,
                    }),
                }
            }
            if let Some(tag) = tests.keys().next() {
                return Err(Error::Data(format!("test file for unknown source {tag:?}")));
            }
            build_cda_c(merged, policy)?
        }
    };
    let files = write_domains(out, &raw)?;
    let mut alignment = AlignStats::default();
    let domains = raw
        .iter()
        .map(|r| {
            let (d, stats) = r.to_domain();
            alignment.merge(stats);
            SplitDomainSummary {
                name: d.name.clone(),
                train: dataset_stats(&d.train_spec()),
                test: dataset_stats(&d.test_spec()),
            }
        })
        .collect();
    Ok(SplitSummary {
        domains,
        skipped_no_span: skipped,
        alignment,
        files,
    })
}
