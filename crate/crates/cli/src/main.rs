//! `casecohort`: fit, calibrate and simulate case-cohort Cox analyses.

mod config;
mod report;

use casecohort::analysis::{analyze, AnalysisError, AnalysisRegime, AnalysisRequest, RiskQuery};
use casecohort::calibration::{build_auxiliaries, rake_to_totals, CalibrationError};
use casecohort::dataset::{load_cohort, read_columns, CohortDataset, DatasetError, Schema};
use casecohort::design::{estimate_phase3_weights, DesignError, PhaseThreeDesign, PhaseTwoDesign};
use casecohort::simharness::{run_scenario, Phase3Probs, ScenarioRegime, SimError};
use clap::{Args, Parser, Subcommand};
use config::{default_imputation, load_file, load_schema, parse_numbers, ConfigError, FileConfig, RegimeChoice};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use thiserror::Error;

#[derive(Parser, Debug)]
#[command(name = "casecohort", version, about = "Cox regression and pure risk for case-cohort studies")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit the Cox model and report coefficients, baseline hazard and pure risks.
    Fit(DataArgs),
    /// Impute, build auxiliaries and rake the design weights.
    Calibrate(DataArgs),
    /// Run a simulation scenario.
    Simulate(SimArgs),
}

#[derive(Args, Debug, Clone)]
struct DataArgs {
    /// TOML run configuration; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Cohort file (comma-separated with a header row).
    #[arg(long)]
    input: Option<PathBuf>,
    /// TOML file mapping roles to column names.
    #[arg(long)]
    schema: Option<PathBuf>,
    #[arg(long, value_enum)]
    regime: Option<RegimeChoice>,
    /// Pure-risk interval `tau1,tau2`; repeatable.
    #[arg(long = "risk-interval")]
    risk_interval: Vec<String>,
    /// Covariate profile `x1,...,xp` in model order; repeatable.
    #[arg(long = "risk-profile", allow_hyphen_values = true)]
    risk_profile: Vec<String>,
    /// Shorthand for `--regime calibrated`.
    #[arg(long)]
    calibrate: bool,
    /// Comma-separated proxy columns available for every subject.
    #[arg(long)]
    proxies: Option<String>,
    /// Column marking subcohort draws (1) for the phase-two design.
    #[arg(long = "subcohort-col")]
    subcohort_col: Option<String>,
    /// Column with one-based phase-three strata.
    #[arg(long = "phase3-col")]
    phase3_col: Option<String>,
    /// Column with known phase-three inclusion probabilities.
    #[arg(long = "phase3-known-probs")]
    phase3_known_probs: Option<String>,
    /// Confidence level.
    #[arg(long)]
    level: Option<f64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
struct SimArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comma-separated regimes, e.g. `Cohort,SCC,SCC.Calib`.
    #[arg(long)]
    regime: Option<String>,
    #[arg(long)]
    replicates: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Cohort size.
    #[arg(long)]
    n: Option<usize>,
    #[arg(long = "p-event")]
    p_event: Option<f64>,
    /// Non-cases per expected case.
    #[arg(long)]
    k: Option<usize>,
    /// Phase-three probabilities `case,non_case`.
    #[arg(long = "phase3-probs")]
    phase3_probs: Option<String>,
    /// Paper-scale run with 5000 replicates.
    #[arg(long)]
    long: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Error)]
enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<DesignError> for CliError {
    fn from(e: DesignError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<AnalysisError> for CliError {
    fn from(e: AnalysisError) -> Self {
        if e.is_numerical() {
            CliError::Numerical(e.to_string())
        } else {
            CliError::Config(e.to_string())
        }
    }
}

impl From<CalibrationError> for CliError {
    fn from(e: CalibrationError) -> Self {
        CliError::from(AnalysisError::from(e))
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Config(format!("output: {e}"))
    }
}

/// Fully resolved inputs of `fit` and `calibrate`.
struct DataRun {
    input: PathBuf,
    out: PathBuf,
    schema: Schema,
    regime: RegimeChoice,
    file: FileConfig,
    args: DataArgs,
    risks: Vec<RiskQuery>,
    level: f64,
}

fn resolve(args: DataArgs) -> Result<DataRun, CliError> {
    let file = match &args.config {
        Some(p) => load_file(p)?,
        None => FileConfig::default(),
    };
    let input = args
        .input
        .clone()
        .or_else(|| file.input.clone())
        .ok_or_else(|| CliError::Config("no input file (use --input)".into()))?;
    let mut schema = match &args.schema {
        Some(p) => load_schema(p)?,
        None => file.schema.clone().unwrap_or_default(),
    };
    if let Some(list) = &args.proxies {
        schema.proxies = list.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect();
    }
    let regime = if args.calibrate {
        RegimeChoice::Calibrated
    } else if let Some(r) = args.regime.or(file.regime) {
        r
    } else if args.phase3_col.is_some() || args.phase3_known_probs.is_some() {
        RegimeChoice::ThreePhase
    } else {
        RegimeChoice::Design
    };
    let mut risks = file.risks.clone();
    if !args.risk_interval.is_empty() || !args.risk_profile.is_empty() {
        let intervals = if args.risk_interval.is_empty() {
            return Err(CliError::Config("--risk-profile needs --risk-interval".into()));
        } else {
            args.risk_interval
                .iter()
                .map(|s| parse_numbers(s, "--risk-interval"))
                .collect::<Result<Vec<_>, _>>()?
        };
        let p = schema.phase1.len() + schema.phase2.len();
        let profiles = if args.risk_profile.is_empty() {
            vec![vec![0.0; p]]
        } else {
            args.risk_profile
                .iter()
                .map(|s| parse_numbers(s, "--risk-profile"))
                .collect::<Result<Vec<_>, _>>()?
        };
        risks.clear();
        for interval in &intervals {
            if interval.len() != 2 {
                return Err(CliError::Config("--risk-interval takes `tau1,tau2`".into()));
            }
            for x in &profiles {
                risks.push(RiskQuery {
                    tau1: interval[0],
                    tau2: interval[1],
                    x: x.clone(),
                });
            }
        }
    }
    let p = schema.phase1.len() + schema.phase2.len();
    if let Some(q) = risks.iter().find(|q| q.x.len() != p) {
        return Err(CliError::Config(format!(
            "risk profile has {} values but the model has {p} covariates",
            q.x.len()
        )));
    }
    if regime == RegimeChoice::Calibrated && schema.proxies.is_empty() {
        return Err(CliError::Config("calibration needs proxies (use --proxies)".into()));
    }
    let phase3_col = args.phase3_col.clone().or_else(|| file.phase3_col.clone());
    let known = args.phase3_known_probs.clone().or_else(|| file.phase3_known_probs.clone());
    if regime == RegimeChoice::ThreePhase && phase3_col.is_none() && known.is_none() {
        return Err(CliError::Config(
            "the three-phase regime needs --phase3-col or --phase3-known-probs".into(),
        ));
    }
    let level = args.level.or(file.level).unwrap_or(0.95);
    if !(level > 0.0 && level < 1.0) {
        return Err(CliError::Config(format!("confidence level {level} is outside (0, 1)")));
    }
    let out = args.out.clone().or_else(|| file.out.clone()).unwrap_or_else(|| PathBuf::from("casecohort-out"));
    let mut args = args;
    args.phase3_col = phase3_col;
    args.phase3_known_probs = known;
    args.subcohort_col = args.subcohort_col.clone().or_else(|| file.subcohort_col.clone());
    Ok(DataRun {
        input,
        out,
        schema,
        regime,
        file,
        args,
        risks,
        level,
    })
}

fn column(path: &Path, name: &str) -> Result<Vec<Option<f64>>, CliError> {
    let file = std::fs::File::open(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let mut columns = read_columns(file, &[name.to_string()])?;
    Ok(columns.remove(name).expect("requested column"))
}

fn phase_two(run: &DataRun, dataset: &CohortDataset) -> Result<PhaseTwoDesign, CliError> {
    if run.regime == RegimeChoice::Cohort {
        return Ok(PhaseTwoDesign::full_cohort(dataset));
    }
    match &run.args.subcohort_col {
        Some(name) => {
            let values = column(&run.input, name)?;
            let subcohort = values
                .iter()
                .enumerate()
                .map(|(i, v)| match v {
                    Some(x) if *x == 1.0 => Ok(true),
                    Some(x) if *x == 0.0 => Ok(false),
                    _ => Err(CliError::Config(format!("{name}: row {} must be 0 or 1", i + 1))),
                })
                .collect::<Result<Vec<_>, _>>()?;
            Ok(PhaseTwoDesign::from_subcohort(dataset, &subcohort)?)
        }
        None if dataset.records().iter().all(|r| r.x_phase2.is_some()) => Ok(PhaseTwoDesign::full_cohort(dataset)),
        None => Err(CliError::Config(
            "subjects lack phase-two covariates; name the subcohort column with --subcohort-col".into(),
        )),
    }
}

fn phase_three(run: &DataRun, dataset: &CohortDataset, p2: &PhaseTwoDesign) -> Result<PhaseThreeDesign, CliError> {
    let n = dataset.len();
    let stratum3: Vec<usize> = match &run.args.phase3_col {
        Some(name) => column(&run.input, name)?
            .iter()
            .enumerate()
            .map(|(i, v)| match v {
                Some(x) if *x >= 1.0 && x.fract() == 0.0 => Ok(*x as usize),
                _ => Err(CliError::Config(format!("{name}: row {} must be a positive integer", i + 1))),
            })
            .collect::<Result<_, _>>()?,
        None => vec![1; n],
    };
    let observed: Vec<bool> = (0..n).map(|i| p2.sampled[i] && dataset.records()[i].x_phase2.is_some()).collect();
    match &run.args.phase3_known_probs {
        Some(name) => {
            let probs = column(&run.input, name)?
                .iter()
                .map(|v| v.unwrap_or(f64::NAN))
                .collect();
            Ok(PhaseThreeDesign::known(dataset, p2, &stratum3, &observed, probs)?)
        }
        None => Ok(estimate_phase3_weights(dataset, p2, &stratum3, &observed)?),
    }
}

fn cmd_fit(args: DataArgs) -> Result<(), CliError> {
    let run = resolve(args)?;
    let dataset = load_cohort(&run.input, &run.schema)?;
    let phase2 = phase_two(&run, &dataset)?;
    let phase3 = match run.regime {
        RegimeChoice::ThreePhase => Some(phase_three(&run, &dataset, &phase2)?),
        _ => None,
    };
    let imputation = run.file.imputation.clone().unwrap_or_else(|| default_imputation(&run.schema));
    let regime = match run.regime {
        RegimeChoice::Cohort => AnalysisRegime::FullCohort,
        RegimeChoice::Design => AnalysisRegime::Design,
        RegimeChoice::Calibrated => AnalysisRegime::Calibrated,
        RegimeChoice::ThreePhase if run.args.phase3_known_probs.is_some() => AnalysisRegime::ThreePhaseKnown,
        RegimeChoice::ThreePhase => AnalysisRegime::ThreePhaseEstimated,
    };
    let mut request = AnalysisRequest::new(regime);
    request.phase2 = Some(&phase2);
    request.phase3 = phase3.as_ref();
    request.imputation = Some(&imputation);
    request.risks = &run.risks;
    request.solver = run.file.solver.solver();
    request.calibration = run.file.solver.calibration();
    if request.regime != AnalysisRegime::FullCohort && phase2.sampled.iter().all(|&s| s) && run.args.subcohort_col.is_none() {
        request.regime = AnalysisRegime::FullCohort;
    }
    let analysis = analyze(&dataset, &request)?;
    let fit_report = report::FitReport::new(&dataset, &phase2, &analysis, run.level)?;
    std::fs::create_dir_all(&run.out)?;
    fit_report.write_all(&run.out, &dataset, &analysis)?;
    fit_report.print(&mut std::io::stdout())?;
    Ok(())
}

fn cmd_calibrate(args: DataArgs) -> Result<(), CliError> {
    let mut run = resolve(args)?;
    if run.schema.proxies.is_empty() {
        return Err(CliError::Config("calibration needs proxies (use --proxies)".into()));
    }
    if run.regime == RegimeChoice::Cohort || run.regime == RegimeChoice::ThreePhase {
        return Err(CliError::Config("calibration applies to a phase-two design".into()));
    }
    run.regime = RegimeChoice::Calibrated;
    let dataset = load_cohort(&run.input, &run.schema)?;
    let phase2 = phase_two(&run, &dataset)?;
    let imputation = run.file.imputation.clone().unwrap_or_else(|| default_imputation(&run.schema));
    let mut intervals: Vec<(f64, f64)> = Vec::new();
    for q in &run.risks {
        if !intervals.contains(&(q.tau1, q.tau2)) {
            intervals.push((q.tau1, q.tau2));
        }
    }
    let solver = run.file.solver.solver();
    let controls = run.file.solver.calibration();
    let pipeline = build_auxiliaries(&dataset, &phase2, &imputation, &intervals, &solver, &controls)?;
    let base: Vec<f64> = (0..dataset.len()).map(|i| phase2.sampling_weight(i)).collect();
    let result = rake_to_totals(&base, &pipeline.stage2.values, &pipeline.stage2.cohort_totals(), &controls)?;
    std::fs::create_dir_all(&run.out)?;
    let summary = report::write_calibration(&run.out, &dataset, &phase2, &pipeline, &result)?;
    println!("{summary}");
    Ok(())
}

fn cmd_simulate(args: SimArgs) -> Result<(), CliError> {
    let file = match &args.config {
        Some(p) => load_file(p)?,
        None => FileConfig::default(),
    };
    let mut cfg = file.scenario.clone().unwrap_or_default();
    if let Some(list) = &args.regime {
        cfg.regimes = list
            .split(',')
            .map(|s| s.trim().parse::<ScenarioRegime>())
            .collect::<Result<_, _>>()?;
    }
    if let Some(r) = args.replicates {
        cfg.replicates = r;
    }
    if args.long {
        cfg.replicates = 5000;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(n) = args.n {
        cfg.n = n;
    }
    if let Some(p) = args.p_event {
        cfg.p_event = p;
    }
    if let Some(k) = args.k {
        cfg.k = k;
    }
    if let Some(text) = &args.phase3_probs {
        let v = parse_numbers(text, "--phase3-probs")?;
        if v.len() != 2 {
            return Err(CliError::Config("--phase3-probs takes `case,non_case`".into()));
        }
        cfg.phase3_probs = Some(Phase3Probs {
            case: v[0],
            non_case: v[1],
        });
    }
    let summary = run_scenario(&cfg)?;
    let out = args.out.clone().or_else(|| file.out.clone()).unwrap_or_else(|| PathBuf::from("casecohort-sim"));
    std::fs::create_dir_all(&out)?;
    report::write_scenario(&out, &summary)?;
    summary.write_table(std::io::stdout())?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Fit(a) => cmd_fit(a),
        Command::Calibrate(a) => cmd_calibrate(a),
        Command::Simulate(a) => cmd_simulate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("casecohort: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
