//! Command-line front end.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::exec::{with_workers, Schedule};
use crate::forward::infer;
use crate::geometry::{validate_model_with, ModelConfig, PackingChoice, PackingMode, PackingPlan, PlanOptions};
use crate::he_sim::CountingBackend;
use crate::ledger::{estimate_by_level, estimate_by_phase, estimate_time, CostTable, Grouping, OpLedger};
use crate::oracle::{max_relative_error, plain_backward, plain_forward, random_inputs, PlainModel};
use crate::packing::{encrypt_inputs, encrypt_model};
use crate::protocol::{run_session, SessionOptions, Transcript};
use crate::tensor::{load_bundle, save_bundle, take_tensor, Tensor};

#[derive(Debug, Parser)]
#[command(name = "lhe-cnn", version, about = "Packed leveled-HE CNN inference and training")]
pub struct Cli {
    /// Worker threads for the data-parallel core.
    #[arg(long, env = "LHE_CNN_WORKERS", global = true)]
    pub workers: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Derive and print the packing plan for a model.
    DeriveParams(ModelArgs),
    /// Run an encrypted inference session.
    Infer(InferArgs),
    /// Run one encrypted training step.
    TrainStep(TrainArgs),
    /// Count operations without data and price them with a cost table.
    Estimate(EstimateArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PackingArg {
    Auto,
    Baseline,
    CrossChannel,
    CrossFilter,
}

impl PackingArg {
    fn choice(self) -> PackingChoice {
        match self {
            PackingArg::Auto => PackingChoice::Auto,
            PackingArg::Baseline => PackingChoice::Forced(PackingMode::Baseline),
            PackingArg::CrossChannel => PackingChoice::Forced(PackingMode::CrossChannel),
            PackingArg::CrossFilter => PackingChoice::Forced(PackingMode::CrossFilter),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ReportFormat {
    Text,
    Csv,
}

#[derive(Debug, Clone, Args)]
pub struct ModelArgs {
    /// Model description (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Override the batch size n.
    #[arg(long)]
    pub n: Option<usize>,
    /// Skip all square activations.
    #[arg(long)]
    pub no_activation: bool,
    #[arg(long, value_enum, default_value = "auto")]
    pub packing: PackingArg,
    /// Write the report here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct InferArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Weight bundle; random weights from the seed when absent.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    /// Input bundle holding `inputs` (n × channels × side × side); random
    /// from the seed when absent.
    #[arg(long)]
    pub inputs: Option<PathBuf>,
    #[arg(long)]
    pub compare_oracle: bool,
    #[arg(long, default_value_t = 1e-9)]
    pub tolerance: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value = "text")]
    pub report: ReportFormat,
    /// Cost table (TOML) for the time estimate.
    #[arg(long)]
    pub costs: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub weights: PathBuf,
    #[arg(long)]
    pub inputs: PathBuf,
    /// Bundle holding `labels` (n × outputs).
    #[arg(long)]
    pub labels: PathBuf,
    #[arg(long, default_value_t = 0.01)]
    pub eta: f64,
    #[arg(long)]
    pub compare_oracle: bool,
    #[arg(long, default_value_t = 1e-6)]
    pub tolerance: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value = "text")]
    pub report: ReportFormat,
    /// Where to write the updated weights.
    #[arg(long)]
    pub weights_out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct EstimateArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub costs: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "text")]
    pub report: ReportFormat,
}

/// Everything a run reports.
#[derive(Debug, Clone)]
pub struct RunReport {
    pub plan: PackingPlan,
    pub ledger: OpLedger,
    pub estimate_us: Option<f64>,
    pub phase_estimates: Vec<(String, f64)>,
    pub level_estimates: Vec<(u32, f64)>,
    pub verdict: Option<Verdict>,
    pub logits: Option<Tensor>,
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Verdict {
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl Verdict {
    pub fn pass(&self) -> bool {
        self.max_rel_err <= self.tolerance
    }
}

impl RunReport {
    fn new(plan: PackingPlan, ledger: OpLedger) -> Self {
        Self {
            plan,
            ledger,
            estimate_us: None,
            phase_estimates: Vec::new(),
            level_estimates: Vec::new(),
            verdict: None,
            logits: None,
            notes: Vec::new(),
        }
    }

    fn price(&mut self, costs: &CostTable) -> Result<()> {
        self.estimate_us = Some(estimate_time(&self.ledger, costs)?);
        self.phase_estimates = estimate_by_phase(&self.ledger, costs)?;
        self.level_estimates = estimate_by_level(&self.ledger, costs)?;
        Ok(())
    }

    pub fn render(&self, format: ReportFormat) -> Result<String> {
        let tables = [
            ("by phase", self.ledger.report(Grouping::ByPhase)?),
            ("by level", self.ledger.report(Grouping::ByLevel)?),
            ("totals", self.ledger.report(Grouping::Totals)?),
            ("amortized", self.ledger.report(Grouping::Amortized(self.plan.n))?),
        ];
        let mut out = String::new();
        match format {
            ReportFormat::Text => {
                let _ = writeln!(out, "{}\n", self.plan.summary());
                for (title, t) in &tables {
                    let _ = writeln!(out, "# {title}\n{}", t.to_text());
                }
                if let Some(us) = self.estimate_us {
                    let _ = writeln!(out, "# estimated time\ntotal_us {us:.1}");
                    for (p, t) in &self.phase_estimates {
                        let _ = writeln!(out, "phase {p} {t:.1}");
                    }
                    for (l, t) in &self.level_estimates {
                        let _ = writeln!(out, "level {l} {t:.1}");
                    }
                    out.push('\n');
                }
                if let Some(y) = &self.logits {
                    let _ = writeln!(out, "# logits");
                    for row in y.data().chunks(y.shape()[1]) {
                        let cells: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
                        let _ = writeln!(out, "{}", cells.join(" "));
                    }
                    out.push('\n');
                }
                for n in &self.notes {
                    let _ = writeln!(out, "{n}");
                }
                if let Some(v) = self.verdict {
                    let _ = writeln!(
                        out,
                        "oracle: {} (max relative error {:e}, tolerance {:e})",
                        if v.pass() { "pass" } else { "fail" },
                        v.max_rel_err,
                        v.tolerance
                    );
                }
            }
            ReportFormat::Csv => {
                for (title, t) in &tables {
                    let _ = writeln!(out, "# {title}\n{}", t.to_csv());
                }
                if let Some(us) = self.estimate_us {
                    let _ = writeln!(out, "# estimated time\ngroup,us\ntotal,{us}");
                    for (p, t) in &self.phase_estimates {
                        let _ = writeln!(out, "phase:{p},{t}");
                    }
                    for (l, t) in &self.level_estimates {
                        let _ = writeln!(out, "level:{l},{t}");
                    }
                    out.push('\n');
                }
                if let Some(v) = self.verdict {
                    let _ = writeln!(
                        out,
                        "# oracle\nverdict,max_rel_err,tolerance\n{},{},{}",
                        if v.pass() { "pass" } else { "fail" },
                        v.max_rel_err,
                        v.tolerance
                    );
                }
            }
        }
        Ok(out)
    }
}

fn load_config(args: &ModelArgs) -> Result<(ModelConfig, PlanOptions)> {
    let mut config = ModelConfig::load(&args.config)?;
    if let Some(n) = args.n {
        config.n = n;
    }
    let opts = PlanOptions { packing: args.packing.choice(), activation: !args.no_activation };
    Ok((config, opts))
}

fn load_tensor(path: &Path, name: &str) -> Result<Tensor> {
    let bundle = load_bundle(path)?;
    take_tensor(&bundle, name)
}

fn emit(text: &str, out: Option<&Path>) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

pub fn cmd_derive_params(args: &ModelArgs) -> Result<PackingPlan> {
    let (config, opts) = load_config(args)?;
    let plan = validate_model_with(&config, opts)?;
    emit(&format!("{}\n", plan.summary()), args.out.as_deref())?;
    Ok(plan)
}

pub fn cmd_infer(args: &InferArgs) -> Result<RunReport> {
    let (config, opts) = load_config(&args.model)?;
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let model = match &args.weights {
        Some(p) => PlainModel::from_bundle(&load_bundle(p)?, &config)?,
        None => PlainModel::random(&config, &mut rng),
    };
    let inputs = match &args.inputs {
        Some(p) => load_tensor(p, "inputs")?,
        None => random_inputs(&config, &mut rng),
    };
    let mut ledger = OpLedger::new();
    let mut transcript = Transcript::new();
    let session = SessionOptions { plan: opts, seed: args.seed, ..Default::default() };
    let out = run_session(&model, &config, &inputs, None, session, &mut ledger, &mut transcript)?;
    let mut report = RunReport::new(out.plan, ledger);
    let costs = match &args.costs {
        Some(p) => CostTable::load(p)?,
        None => CostTable::measured(),
    };
    if let Err(e) = report.price(&costs) {
        report.notes.push(format!("no time estimate: {e}"));
    }
    report.notes.push(format!("transcript:\n{}", transcript.to_text().trim_end()));
    if args.compare_oracle {
        let want = plain_forward(&model, &config, &inputs, opts.activation)?.logits;
        report.verdict = Some(Verdict {
            max_rel_err: max_relative_error(out.logits.data(), want.data()),
            tolerance: args.tolerance,
        });
    }
    report.logits = Some(out.logits);
    let text = report.render(args.report)?;
    emit(&text, args.model.out.as_deref())?;
    Ok(report)
}

pub fn cmd_train_step(args: &TrainArgs) -> Result<RunReport> {
    let (config, mut opts) = load_config(&args.model)?;
    // Training only has a baseline backward pass.
    if opts.packing == PackingChoice::Auto {
        opts.packing = PackingChoice::Forced(PackingMode::Baseline);
    }
    let model = PlainModel::from_bundle(&load_bundle(&args.weights)?, &config)?;
    let inputs = load_tensor(&args.inputs, "inputs")?;
    let labels = load_tensor(&args.labels, "labels")?;
    let mut ledger = OpLedger::new();
    let mut transcript = Transcript::new();
    let session = SessionOptions { plan: opts, seed: args.seed, eta: args.eta, ..Default::default() };
    let out = run_session(&model, &config, &inputs, Some(&labels), session, &mut ledger, &mut transcript)?;
    let updated = out.updated.clone().expect("training session returns a model");
    let mut report = RunReport::new(out.plan.clone(), ledger);
    report.notes.push(format!(
        "tee: {} weight-update refreshes {:?}, {} depth refreshes",
        out.tee.refreshes, out.refreshes, out.tee.depth_refreshes
    ));
    if args.compare_oracle {
        let want = model.sgd_step(&plain_backward(&model, &config, &inputs, &labels, opts.activation)?, args.eta);
        let mut err: f64 = 0.0;
        for (a, b) in updated.conv.iter().zip(&want.conv).chain(updated.fc.iter().zip(&want.fc)) {
            err = err.max(max_relative_error(a.data(), b.data()));
        }
        report.verdict = Some(Verdict { max_rel_err: err, tolerance: args.tolerance });
    }
    if let Some(p) = &args.weights_out {
        save_bundle(p, &updated.to_bundle())?;
        report.notes.push(format!("updated weights written to {}", p.display()));
    }
    report.logits = Some(out.logits);
    let text = report.render(args.report)?;
    emit(&text, args.model.out.as_deref())?;
    Ok(report)
}

/// Counts from a data-free run over the counting backend.
pub fn dry_run(config: &ModelConfig, opts: PlanOptions) -> Result<(PackingPlan, OpLedger)> {
    let plan = validate_model_with(config, opts)?;
    let be = CountingBackend::new(plan.levels, plan.slots)?;
    let model = PlainModel::zeros(config);
    let inputs = Tensor::zeros(vec![config.n, plan.input_channels, config.input_side, config.input_side]);
    let mut ledger = OpLedger::new();
    let m = encrypt_model(&be, &model, &plan, Schedule::Parallel, &mut ledger)?;
    let x = encrypt_inputs(&be, &inputs, &plan, Schedule::Parallel, &mut ledger)?;
    infer(&be, &plan, &m, x, Schedule::Parallel, &mut ledger)?;
    Ok((plan, ledger))
}

pub fn cmd_estimate(args: &EstimateArgs) -> Result<RunReport> {
    let (config, opts) = load_config(&args.model)?;
    let (plan, ledger) = dry_run(&config, opts)?;
    let costs = match &args.costs {
        Some(p) => CostTable::load(p)?,
        None => CostTable::measured(),
    };
    let mut report = RunReport::new(plan, ledger);
    report.price(&costs)?;
    let text = report.render(args.report)?;
    emit(&text, args.model.out.as_deref())?;
    Ok(report)
}

/// Process exit code for an error.
pub fn exit_code(e: &Error) -> u8 {
    match e.root() {
        Error::InvalidParameter(_)
        | Error::Validation(_)
        | Error::Shape(_)
        | Error::Capacity { .. }
        | Error::StepTwoIndex { .. }
        | Error::Parse(_) => 2,
        Error::DepthExhausted { .. } => 3,
        Error::OracleMismatch { .. } => 4,
        _ => 1,
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let verdict = with_workers(cli.workers, || -> Result<Option<Verdict>> {
        Ok(match &cli.command {
            Command::DeriveParams(a) => {
                cmd_derive_params(a)?;
                None
            }
            Command::Infer(a) => cmd_infer(a)?.verdict,
            Command::TrainStep(a) => cmd_train_step(a)?.verdict,
            Command::Estimate(a) => {
                cmd_estimate(a)?;
                None
            }
        })
    })?;
    match verdict {
        Some(v) if !v.pass() => Err(Error::OracleMismatch { max_rel_err: v.max_rel_err, tolerance: v.tolerance }),
        _ => Ok(()),
    }
}

pub fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ledger::OpKind;

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::Validation("x".into()).in_phase("a")), 2);
        assert_eq!(exit_code(&Error::DepthExhausted { op: "mul", context: String::new() }), 3);
        assert_eq!(exit_code(&Error::OracleMismatch { max_rel_err: 1.0, tolerance: 0.0 }), 4);
        assert_eq!(exit_code(&Error::Unauthorized), 1);
    }

    #[test]
    fn dry_run_reproduces_the_reference_counts() {
        let (_, ledger) = dry_run(&ModelConfig::cnn_1_2(), PlanOptions::default()).unwrap();
        let t = ledger.totals();
        assert_eq!((t.add, t.mul, t.rot), (831, 584, 384));
        assert_eq!(ledger.count(OpKind::Enc), 565);
    }

    #[test]
    fn parses_flags() {
        let cli = Cli::try_parse_from([
            "lhe-cnn", "infer", "--config", "m.toml", "--n", "4", "--no-activation", "--packing",
            "cross-filter", "--compare-oracle", "--report", "csv", "--seed", "7",
        ])
        .unwrap();
        let Command::Infer(a) = cli.command else { panic!("wrong command") };
        assert_eq!(a.model.n, Some(4));
        assert!(a.model.no_activation && a.compare_oracle);
        assert_eq!(a.model.packing, PackingArg::CrossFilter);
        assert_eq!(a.report, ReportFormat::Csv);
        assert_eq!(a.tolerance, 1e-9);
    }
}
