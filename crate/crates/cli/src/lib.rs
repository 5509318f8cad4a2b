//! Command-line front end: dataset simulation, training, evaluation,
//! baselines, spectra, cross-validation and reproduction recipes.

pub mod error;
pub mod repro;
pub mod seeds;

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use tpp_core::datamodel::{read_dataset, write_dataset};
use tpp_core::discriminators::{classify_dataset_argmax, classify_tpp_gaussian, fit_tpp_gaussian};
use tpp_core::filters::{analytic_filters, boxcar_window, matched_filter, one_vs_all_filter};
use tpp_core::metrics::{
    cross_validate, evaluate, holdout, noise_psd, noise_psd_fft, CvOptions, DecisionRule, FilterChoice,
    Pipeline,
};
use tpp_core::simulator::{simulate_config, SimulationConfig};
use tpp_core::training::train;
use tpp_core::{LabeledDataset, TppError, TrainedTpp, TrainingMethod, TrainingOptions};

use crate::error::{CliError, CliResult};
use crate::seeds::role_seed;

#[derive(Debug, Parser)]
#[command(name = "tpp", about = "Trainable temporal post-processor toolkit", disable_version_flag = true)]
pub struct Cli {
    /// Print build information and exit.
    #[arg(short = 'V', long)]
    pub version: bool,
    /// Cap on worker threads (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Option<Command>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a labelled dataset from a JSON simulation config.
    Simulate(SimulateArgs),
    /// Train a TPP model.
    Train(TrainArgs),
    /// Classify a dataset with a trained model and report fidelity.
    Eval(EvalArgs),
    /// Export a model's filters and biases as CSV.
    Filters(FiltersArgs),
    /// Holdout score of a filtered Gaussian baseline.
    Baseline(BaselineArgs),
    /// Noise power spectral density of one class and observable.
    Psd(PsdArgs),
    /// Repeated random-split cross-validation of a pipeline.
    Crossval(CrossvalArgs),
    /// Run a named reproduction recipe.
    Repro(ReproArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum MethodArg {
    Lsq,
    ClosedForm,
    WhiteAnalytic,
    GeneralAnalytic,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 0.0)]
    pub lambda: f64,
    #[arg(long, value_enum, default_value = "lsq")]
    pub method: MethodArg,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum RuleArg {
    Argmax,
    Gaussian,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, value_enum, default_value = "argmax")]
    pub rule: RuleArg,
    /// Labelled calibration data for the Gaussian rule (usually the
    /// training set).
    #[arg(long)]
    pub calib: Option<PathBuf>,
    /// Report path; printed to stdout when omitted.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FiltersArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct BaselineArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// `matched:A,B`, `boxcar`, `boxcar:START-END` or `ova:P`.
    #[arg(long)]
    pub filter: String,
    #[arg(long, default_value_t = 0.8)]
    pub train_frac: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Also write the filter computed from the whole dataset as a CSV row.
    #[arg(long)]
    pub filter_out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum PsdMethod {
    Direct,
    Fft,
}

#[derive(Debug, Args)]
pub struct PsdArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub class: String,
    #[arg(long, default_value_t = 0)]
    pub obs: usize,
    #[arg(long, value_enum, default_value = "direct")]
    pub method: PsdMethod,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CrossvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// `tpp`, `tpp:gaussian`, `tpp:closed-form`, `tpp-white`, `tpp-general`,
    /// `fgda:matched[:A,B]`, `fgda:boxcar[:START-END]`, `fgda:ova:P` or
    /// `multi-fgda:P,Q`.
    #[arg(long, default_value = "tpp")]
    pub pipeline: String,
    #[arg(long, default_value_t = 0.0)]
    pub lambda: f64,
    #[arg(long, default_value_t = 0.8)]
    pub train_frac: f64,
    #[arg(long, default_value_t = 10)]
    pub iters: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Probability of corrupting each training label.
    #[arg(long, default_value_t = 0.0)]
    pub flip: f64,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReproArgs {
    /// One of fig2-white-noise-3state, fig4-amplifier, fig5-jumps, pink-noise.
    pub recipe: String,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Directory for `<recipe>.csv` and `<recipe>.json`.
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
}

pub fn build_info() -> String {
    format!(
        "tpp {} (tpp-core {}, {} build, {}-{})",
        env!("CARGO_PKG_VERSION"),
        tpp_core::VERSION,
        if cfg!(debug_assertions) { "debug" } else { "release" },
        std::env::consts::ARCH,
        std::env::consts::OS,
    )
}

/// Parse arguments, run, and return the process exit code. Failures are
/// reported on stderr as a JSON object with `error` and `message` keys.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let err = CliError::Usage(e.render().to_string().trim().to_string());
            eprintln!("{}", err.to_json());
            return 2;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", e.to_json());
            1
        }
    }
}

pub fn run(cli: Cli) -> CliResult<()> {
    if cli.version {
        println!("{}", build_info());
        return Ok(());
    }
    let Some(command) = cli.command else {
        return Err(CliError::Usage("a subcommand is required; see `tpp --help`".into()));
    };
    match cli.threads {
        Some(0) => Err(CliError::Usage("--threads must be at least 1".into())),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| CliError::Usage(e.to_string()))?
            .install(|| dispatch(command)),
        None => dispatch(command),
    }
}

fn dispatch(command: Command) -> CliResult<()> {
    match command {
        Command::Simulate(a) => cmd_simulate(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Filters(a) => cmd_filters(a),
        Command::Baseline(a) => cmd_baseline(a),
        Command::Psd(a) => cmd_psd(a),
        Command::Crossval(a) => cmd_crossval(a),
        Command::Repro(a) => cmd_repro(a),
    }
}

fn read_text(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| CliError::io(path.display().to_string(), e))
}

fn load_dataset(path: &Path) -> CliResult<LabeledDataset> {
    read_dataset(path).map_err(|e| match e {
        TppError::Io(io) => CliError::io(path.display().to_string(), io),
        other => other.into(),
    })
}

fn load_model(path: &Path) -> CliResult<TrainedTpp> {
    Ok(TrainedTpp::from_json(&read_text(path)?)?)
}

/// Pretty JSON to `path`, or to stdout when no path is given.
fn emit_json<T: Serialize>(value: &T, path: Option<&Path>) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value)?;
    match path {
        Some(p) => fs::write(p, text + "\n").map_err(|e| CliError::io(p.display().to_string(), e)),
        None => {
            let mut out = std::io::stdout().lock();
            writeln!(out, "{text}").map_err(|e| CliError::io("stdout", e))
        }
    }
}

fn csv_writer(path: &Path) -> CliResult<csv::Writer<fs::File>> {
    Ok(csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_path(path)?)
}

fn cmd_simulate(a: SimulateArgs) -> CliResult<()> {
    let cfg: SimulationConfig = serde_json::from_str(&read_text(&a.config)?)
        .map_err(|e| TppError::InvalidConfig(format!("{}: {e}", a.config.display())))?;
    let d = simulate_config(&cfg, role_seed(a.seed, "simulate"))?;
    write_dataset(&d, &a.out)?;
    log::info!("wrote {} shots to {}", d.total_shots(), a.out.display());
    Ok(())
}

fn cmd_train(a: TrainArgs) -> CliResult<()> {
    let d = load_dataset(&a.data)?;
    let model = match a.method {
        MethodArg::Lsq => train(&d, &TrainingOptions { lambda: a.lambda, method: TrainingMethod::NumericLsq })?,
        MethodArg::ClosedForm => {
            train(&d, &TrainingOptions { lambda: a.lambda, method: TrainingMethod::ClosedForm })?
        }
        MethodArg::WhiteAnalytic | MethodArg::GeneralAnalytic => {
            if a.lambda != 0.0 {
                return Err(CliError::Usage("analytic filters take no --lambda".into()));
            }
            let white = matches!(a.method, MethodArg::WhiteAnalytic);
            analytic_filters(&tpp_core::datamodel::estimate_moments(&d)?, white)?.to_model()
        }
    };
    model.save(&a.out)?;
    Ok(())
}

#[derive(Serialize)]
struct EvalOutput {
    classes: Vec<String>,
    rule: &'static str,
    #[serde(flatten)]
    report: tpp_core::metrics::EvalReport,
}

fn cmd_eval(a: EvalArgs) -> CliResult<()> {
    let d = load_dataset(&a.data)?;
    let model = load_model(&a.model)?;
    if model.classes != d.classes() {
        return Err(TppError::InvalidConfig(format!(
            "model classes {:?} differ from dataset classes {:?}",
            model.classes,
            d.classes()
        ))
        .into());
    }
    let (pred, rule) = match a.rule {
        RuleArg::Argmax => (classify_dataset_argmax(&model, &d)?, "argmax"),
        RuleArg::Gaussian => {
            let path = a
                .calib
                .as_ref()
                .ok_or_else(|| CliError::Usage("--rule gaussian needs --calib <dataset>".into()))?;
            let disc = fit_tpp_gaussian(&model, &load_dataset(path)?)?;
            (classify_tpp_gaussian(&model, &disc, &d)?, "gaussian")
        }
    };
    let report = evaluate(&pred, d.n_classes())?;
    emit_json(&EvalOutput { classes: d.classes().to_vec(), rule, report }, a.report.as_deref())
}

fn cmd_filters(a: FiltersArgs) -> CliResult<()> {
    let model = load_model(&a.model)?;
    let mut w = csv_writer(&a.out)?;
    let mut header: Vec<String> = (0..model.dim()).map(|j| format!("w{j}")).collect();
    header.push("bias".into());
    w.write_record(&header)?;
    for k in 0..model.n_classes() {
        let mut row: Vec<String> = model.filter(k).iter().map(f64::to_string).collect();
        row.push(model.b[k].to_string());
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| CliError::io(a.out.display().to_string(), e))
}

fn parse_range(s: &str) -> CliResult<std::ops::Range<usize>> {
    let bad = || CliError::Usage(format!("expected START-END sample range, got `{s}`"));
    let (a, b) = s.split_once('-').ok_or_else(bad)?;
    let (a, b): (usize, usize) = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
    if a >= b {
        return Err(bad());
    }
    Ok(a..b)
}

fn parse_pair(s: &str) -> CliResult<(String, String)> {
    let (a, b) = s
        .split_once(',')
        .ok_or_else(|| CliError::Usage(format!("expected two comma-separated classes, got `{s}`")))?;
    Ok((a.trim().to_string(), b.trim().to_string()))
}

/// `matched[:A,B]`, `boxcar[:START-END]` or `ova:P`. Missing classes or range
/// default to the first two classes and the whole record.
pub fn parse_filter(spec: &str, d: &LabeledDataset) -> CliResult<FilterChoice> {
    let (kind, arg) = match spec.split_once(':') {
        Some((k, a)) => (k, Some(a)),
        None => (spec, None),
    };
    match (kind, arg) {
        ("matched", Some(a)) => {
            let (p, q) = parse_pair(a)?;
            Ok(FilterChoice::Matched(p, q))
        }
        ("matched", None) => Ok(FilterChoice::Matched(d.classes()[0].clone(), d.classes()[1].clone())),
        ("boxcar", Some(a)) => Ok(FilterChoice::Boxcar(parse_range(a)?)),
        ("boxcar", None) => Ok(FilterChoice::Boxcar(0..d.n_time())),
        ("ova", Some(p)) => Ok(FilterChoice::OneVsAll(p.trim().to_string())),
        _ => Err(CliError::Usage(format!("unknown filter `{spec}`; use matched:A,B, boxcar[:S-E] or ova:P"))),
    }
}

/// Pipeline names accepted by `crossval`.
pub fn parse_pipeline(spec: &str, lambda: f64, d: &LabeledDataset) -> CliResult<Pipeline> {
    let tpp = |method, rule| Pipeline::Tpp { lambda, method, rule };
    Ok(match spec {
        "tpp" | "tpp:argmax" => tpp(TrainingMethod::NumericLsq, DecisionRule::Argmax),
        "tpp:gaussian" => tpp(TrainingMethod::NumericLsq, DecisionRule::Gaussian),
        "tpp:closed-form" => tpp(TrainingMethod::ClosedForm, DecisionRule::Argmax),
        "tpp-white" => Pipeline::TppAnalytic { assume_white: true },
        "tpp-general" => Pipeline::TppAnalytic { assume_white: false },
        _ => {
            if let Some(rest) = spec.strip_prefix("fgda:") {
                Pipeline::Fgda(parse_filter(rest, d)?)
            } else if let Some(rest) = spec.strip_prefix("multi-fgda:") {
                let (p, q) = parse_pair(rest)?;
                Pipeline::MultiFgda(p, q)
            } else {
                return Err(CliError::Usage(format!("unknown pipeline `{spec}`")));
            }
        }
    })
}

#[derive(Serialize)]
struct BaselineOutput<'a> {
    filter: &'a str,
    train_frac: f64,
    seed: u64,
    #[serde(flatten)]
    report: tpp_core::metrics::EvalReport,
}

fn cmd_baseline(a: BaselineArgs) -> CliResult<()> {
    let d = load_dataset(&a.data)?;
    let choice = parse_filter(&a.filter, &d)?;
    if let Some(path) = &a.filter_out {
        let h = match &choice {
            FilterChoice::Matched(p, q) => matched_filter(&d, p, q)?,
            FilterChoice::Boxcar(r) => boxcar_window(d.n_obs(), d.n_time(), r.clone()),
            FilterChoice::OneVsAll(p) => one_vs_all_filter(&d, p)?,
        };
        let mut w = csv_writer(path)?;
        w.write_record((0..h.len()).map(|j| format!("w{j}")))?;
        w.write_record(h.iter().map(f64::to_string))?;
        w.flush().map_err(|e| CliError::io(path.display().to_string(), e))?;
    }
    let report = holdout(&d, &Pipeline::Fgda(choice), a.train_frac, role_seed(a.seed, "baseline"))?;
    emit_json(
        &BaselineOutput { filter: &a.filter, train_frac: a.train_frac, seed: a.seed, report },
        a.report.as_deref(),
    )
}

fn cmd_psd(a: PsdArgs) -> CliResult<()> {
    let d = load_dataset(&a.data)?;
    let c = d.class_index(&a.class)?;
    let s = match a.method {
        PsdMethod::Direct => noise_psd(&d, c, a.obs)?,
        PsdMethod::Fft => noise_psd_fft(&d, c, a.obs)?,
    };
    let mut w = csv_writer(&a.out)?;
    w.write_record(["freq_hz", "power"])?;
    for (f, p) in s.freqs.iter().zip(&s.power) {
        w.write_record([f.to_string(), p.to_string()])?;
    }
    w.flush().map_err(|e| CliError::io(a.out.display().to_string(), e))
}

#[derive(Serialize)]
struct CrossvalOutput<'a> {
    pipeline: &'a str,
    #[serde(flatten)]
    report: tpp_core::metrics::CvReport,
}

fn cmd_crossval(a: CrossvalArgs) -> CliResult<()> {
    let d = load_dataset(&a.data)?;
    let pipeline = parse_pipeline(&a.pipeline, a.lambda, &d)?;
    let opts = CvOptions {
        train_frac: a.train_frac,
        n_iter: a.iters,
        seed: role_seed(a.seed, "crossval"),
        label_flip_prob: a.flip,
    };
    let mut report = cross_validate(&d, &pipeline, &opts)?;
    // report the user's seed rather than the derived one
    report.seed = a.seed;
    emit_json(&CrossvalOutput { pipeline: &a.pipeline, report }, a.report.as_deref())
}

fn cmd_repro(a: ReproArgs) -> CliResult<()> {
    let report = repro::run_recipe(&a.recipe, a.seed)?;
    fs::create_dir_all(&a.out_dir).map_err(|e| CliError::io(a.out_dir.display().to_string(), e))?;
    report.write_csv(&a.out_dir.join(format!("{}.csv", a.recipe)))?;
    emit_json(&report, Some(&a.out_dir.join(format!("{}.json", a.recipe))))?;
    for c in &report.assertions {
        println!("{} {}: {}", if c.pass { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    println!("{}: {}", report.recipe, if report.passed { "all checks passed" } else { "some checks failed" });
    Ok(())
}
