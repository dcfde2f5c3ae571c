use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use cda_core::data::split::SplitPolicy;
use cda_core::experiments::{
    cmd_adapter_sweep, cmd_forgetting_curve, cmd_forward_transfer, cmd_order_robustness,
    cmd_report, cmd_run, cmd_split, render_text, write_report, AdapterSpec, DataSpec,
    ExperimentSpec, OrderPolicy, ReportBundle, ReportFormat, SplitMode, StrategySpec, SWEEP_SIZES,
};
use cda_core::{AdapterInsertion, AdapterStructure, Result, StrategyKind};

const DEFAULT_OUT: &str = "cda-out";

#[derive(Parser)]
#[command(
    name = "cda",
    version,
    about = "Continual domain adaptation experiments for extractive QA"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build per-domain train/test files from MRQA inputs.
    Split(SplitArgs),
    /// Train each strategy over the domain sequence.
    Run(ExpArgs),
    /// Track one domain's test F1 after every epoch.
    ForgettingCurve {
        #[command(flatten)]
        exp: ExpArgs,
        /// Position of the tracked domain in the training order.
        #[arg(long, default_value_t = 0)]
        track: usize,
    },
    /// Progressive adapters with and without initialization against per-domain models.
    ForwardTransfer(ExpArgs),
    /// Repeat the strategies under several domain orders.
    OrderRobustness {
        #[command(flatten)]
        exp: ExpArgs,
        /// Orders to try: given, ascending, descending or a comma list of names.
        #[arg(long = "orders", num_args = 1.., default_values_t = ["given".to_string(), "ascending".to_string(), "descending".to_string()])]
        orders: Vec<String>,
    },
    /// Progressive adapters at several bottleneck widths.
    AdapterSweep {
        #[command(flatten)]
        exp: ExpArgs,
        /// Reference-scale widths, scaled to the model width.
        #[arg(long, value_delimiter = ',')]
        sizes: Vec<usize>,
    },
    /// Re-render a written report.
    Report {
        /// Directory holding report.json.
        #[arg(long)]
        from: PathBuf,
        #[arg(long, env = "CDA_OUT_DIR")]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Format::All)]
        format: Format,
    },
}

#[derive(Args)]
struct SplitArgs {
    #[arg(long, value_enum)]
    mode: Mode,
    /// MRQA files; one source collection each.
    #[arg(long = "input", required = true, num_args = 1..)]
    inputs: Vec<PathBuf>,
    /// Held-out MRQA files used as test sets.
    #[arg(long = "test", num_args = 1..)]
    tests: Vec<PathBuf>,
    #[arg(long, env = "CDA_OUT_DIR")]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 0.2)]
    test_fraction: f64,
    #[arg(long)]
    n_train: Option<usize>,
    #[arg(long)]
    n_test: Option<usize>,
    /// Keep every record instead of sampling.
    #[arg(long)]
    no_cap: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ExpArgs {
    /// TOML experiment file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory of split domain files.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Domain order: given, ascending, descending or a comma list of names.
    #[arg(long)]
    order: Option<String>,
    /// Strategies to run (base, reg, prog, individual).
    #[arg(long = "strategy", value_delimiter = ',')]
    strategies: Vec<StrategyKind>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long, value_enum)]
    adapter_structure: Option<Structure>,
    #[arg(long, value_enum)]
    adapter_insertion: Option<Insertion>,
    #[arg(long)]
    adapter_dim: Option<usize>,
    /// Start each progressive module from scratch.
    #[arg(long)]
    no_adapter_init: bool,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, env = "CDA_OUT_DIR")]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::All)]
    format: Format,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    #[value(alias = "cda-q")]
    Q,
    #[value(alias = "cda-c")]
    C,
}

#[derive(Clone, Copy, ValueEnum)]
enum Structure {
    Pal,
    Bn,
}

#[derive(Clone, Copy, ValueEnum)]
enum Insertion {
    Inside,
    Aside,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Text,
    All,
}

impl From<Format> for ReportFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Csv => ReportFormat::Csv,
            Format::Text => ReportFormat::Text,
            Format::All => ReportFormat::All,
        }
    }
}

impl ExpArgs {
    fn spec(&self) -> Result<ExperimentSpec> {
        let mut spec = match &self.config {
            Some(p) => ExperimentSpec::load(p)?,
            None => ExperimentSpec::default(),
        };
        if let Some(dir) = &self.data {
            spec.data = DataSpec::Dir(dir.clone());
        }
        if let Some(order) = &self.order {
            spec.order = order.parse()?;
        }
        if !self.strategies.is_empty() {
            let previous = std::mem::take(&mut spec.strategies);
            spec.strategies = self
                .strategies
                .iter()
                .map(|&k| {
                    previous
                        .iter()
                        .find(|s| s.kind == k)
                        .cloned()
                        .unwrap_or_else(|| StrategySpec::new(k))
                })
                .collect();
        }
        let adapter_flags = self.adapter_structure.is_some()
            || self.adapter_insertion.is_some()
            || self.adapter_dim.is_some()
            || self.no_adapter_init;
        for s in &mut spec.strategies {
            match s.kind {
                StrategyKind::Reg => {
                    if let Some(l) = self.lambda {
                        s.lambda = Some(l);
                    }
                }
                StrategyKind::Prog if adapter_flags => {
                    let a = s.adapter.get_or_insert_with(AdapterSpec::default);
                    if let Some(st) = self.adapter_structure {
                        a.structure = match st {
                            Structure::Pal => AdapterStructure::Pal,
                            Structure::Bn => AdapterStructure::Bn,
                        };
                    }
                    if let Some(ins) = self.adapter_insertion {
                        a.insertion = match ins {
                            Insertion::Inside => AdapterInsertion::Inside,
                            Insertion::Aside => AdapterInsertion::Aside,
                        };
                    }
                    if let Some(d) = self.adapter_dim {
                        a.d_s = Some(d);
                    }
                    if self.no_adapter_init {
                        s.init_from_prev = Some(false);
                    }
                }
                _ => {}
            }
        }
        if let Some(lr) = self.lr {
            spec.train.learning_rate = lr;
        }
        if let Some(e) = self.epochs {
            spec.train.epochs = e;
        }
        if let Some(b) = self.batch_size {
            spec.train.batch_size = b;
        }
        if let Some(seed) = self.seed {
            spec.seed = seed;
        }
        if let Some(out) = &self.out {
            spec.out = Some(out.clone());
        }
        spec.validate()?;
        Ok(spec)
    }
}

fn out_dir(spec: &ExperimentSpec) -> PathBuf {
    spec.out
        .clone()
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
}

fn emit(bundle: &ReportBundle, dir: &Path, format: Format) -> Result<()> {
    let written = write_report(bundle, dir, format.into())?;
    print!("{}", render_text(bundle));
    println!("\nwrote {} files to {}", written.len(), dir.display());
    Ok(())
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Split(a) => {
            let policy = SplitPolicy {
                test_fraction: a.test_fraction,
                n_train: if a.no_cap {
                    None
                } else {
                    a.n_train.or(SplitPolicy::default().n_train)
                },
                n_test: if a.no_cap {
                    None
                } else {
                    a.n_test.or(SplitPolicy::default().n_test)
                },
                seed: a.seed,
            };
            let mode = match a.mode {
                Mode::Q => SplitMode::CdaQ,
                Mode::C => SplitMode::CdaC,
            };
            let out = a.out.unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
            let summary = cmd_split(&a.inputs, &a.tests, mode, &policy, &out)?;
            print!("{}", summary.to_text());
            println!("wrote {} files to {}", summary.files.len(), out.display());
            Ok(())
        }
        Command::Run(exp) => {
            let spec = exp.spec()?;
            emit(&cmd_run(&spec)?, &out_dir(&spec), exp.format)
        }
        Command::ForgettingCurve { exp, track } => {
            let spec = exp.spec()?;
            emit(
                &cmd_forgetting_curve(&spec, track)?,
                &out_dir(&spec),
                exp.format,
            )
        }
        Command::ForwardTransfer(exp) => {
            let spec = exp.spec()?;
            emit(&cmd_forward_transfer(&spec)?, &out_dir(&spec), exp.format)
        }
        Command::OrderRobustness { exp, orders } => {
            let spec = exp.spec()?;
            let orders = orders
                .iter()
                .map(|o| o.parse::<OrderPolicy>())
                .collect::<Result<Vec<_>>>()?;
            emit(
                &cmd_order_robustness(&spec, &orders)?,
                &out_dir(&spec),
                exp.format,
            )
        }
        Command::AdapterSweep { exp, sizes } => {
            let spec = exp.spec()?;
            let sizes = if sizes.is_empty() {
                SWEEP_SIZES.to_vec()
            } else {
                sizes
            };
            emit(
                &cmd_adapter_sweep(&spec, &sizes)?,
                &out_dir(&spec),
                exp.format,
            )
        }
        Command::Report { from, out, format } => {
            let out = out.unwrap_or_else(|| from.clone());
            let written = cmd_report(&from, format.into(), &out)?;
            println!("wrote {} files to {}", written.len(), out.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
