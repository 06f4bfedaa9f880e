//! Monte Carlo scenarios: cohort generation, phase-two and phase-three sampling, and coverage summaries.

use crate::analysis::{analyze, AnalysisError, AnalysisRegime, AnalysisRequest, RiskQuery};
use crate::calibration::{CovariateModel, ImputationSpec, ModelKind, Predictor, SeparationPolicy};
use crate::dataset::{CohortDataset, CohortRecord, CovariateNames, DatasetError};
use crate::design::{estimate_phase3_weights, DesignError, PhaseThreeDesign, PhaseTwoDesign};
use crate::variance::{confidence_interval, Transform};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::io::Write;
use std::str::FromStr;
use thiserror::Error;

/// Log-relative hazards of `(X1, X2, X3)`.
pub const TRUE_BETA: [f64; 3] = [-0.2, 0.25, -0.3];
/// Mean of `X3` given `(X1, X2)`.
pub const X3_MEAN: [f64; 2] = [0.05, -0.35];
pub const FOLLOW_UP_YEARS: f64 = 10.0;
pub const ENTRY_WINDOW_YEARS: f64 = 5.0;
/// Chance of loss to follow-up within ten years.
pub const LOSS_TO_FOLLOW_UP: f64 = 0.02;
/// Strata `W = 0..3`.
pub const N_STRATA: usize = 4;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid scenario: {0}")]
    InvalidConfig(String),
    #[error("unknown regime `{0}`; valid regimes: {1}")]
    UnknownRegime(String, String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Design(#[from] DesignError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ScenarioRegime {
    #[serde(rename = "Cohort")]
    Cohort,
    #[serde(rename = "SCC")]
    Scc,
    #[serde(rename = "SCC.Calib")]
    SccCalib,
    #[serde(rename = "USCC")]
    Uscc,
    #[serde(rename = "USCC.Calib")]
    UsccCalib,
    #[serde(rename = "SCC.Est")]
    SccEst,
    #[serde(rename = "SCC.True")]
    SccTrue,
    #[serde(rename = "SCC.Naive")]
    SccNaive,
    #[serde(rename = "USCC.Est")]
    UsccEst,
    #[serde(rename = "USCC.True")]
    UsccTrue,
    #[serde(rename = "USCC.Naive")]
    UsccNaive,
}

impl ScenarioRegime {
    pub const ALL: [ScenarioRegime; 11] = [
        ScenarioRegime::Cohort,
        ScenarioRegime::Scc,
        ScenarioRegime::SccCalib,
        ScenarioRegime::Uscc,
        ScenarioRegime::UsccCalib,
        ScenarioRegime::SccEst,
        ScenarioRegime::SccTrue,
        ScenarioRegime::SccNaive,
        ScenarioRegime::UsccEst,
        ScenarioRegime::UsccTrue,
        ScenarioRegime::UsccNaive,
    ];

    pub fn label(self) -> &'static str {
        match self {
            ScenarioRegime::Cohort => "Cohort",
            ScenarioRegime::Scc => "SCC",
            ScenarioRegime::SccCalib => "SCC.Calib",
            ScenarioRegime::Uscc => "USCC",
            ScenarioRegime::UsccCalib => "USCC.Calib",
            ScenarioRegime::SccEst => "SCC.Est",
            ScenarioRegime::SccTrue => "SCC.True",
            ScenarioRegime::SccNaive => "SCC.Naive",
            ScenarioRegime::UsccEst => "USCC.Est",
            ScenarioRegime::UsccTrue => "USCC.True",
            ScenarioRegime::UsccNaive => "USCC.Naive",
        }
    }

    pub fn stratified(self) -> bool {
        matches!(
            self,
            ScenarioRegime::Scc
                | ScenarioRegime::SccCalib
                | ScenarioRegime::SccEst
                | ScenarioRegime::SccTrue
                | ScenarioRegime::SccNaive
        )
    }

    pub fn needs_phase3(self) -> bool {
        matches!(
            self,
            ScenarioRegime::SccEst
                | ScenarioRegime::SccTrue
                | ScenarioRegime::SccNaive
                | ScenarioRegime::UsccEst
                | ScenarioRegime::UsccTrue
                | ScenarioRegime::UsccNaive
        )
    }

    fn analysis_regime(self) -> AnalysisRegime {
        match self {
            ScenarioRegime::Cohort => AnalysisRegime::FullCohort,
            ScenarioRegime::Scc | ScenarioRegime::Uscc => AnalysisRegime::Design,
            ScenarioRegime::SccCalib | ScenarioRegime::UsccCalib => AnalysisRegime::Calibrated,
            ScenarioRegime::SccEst | ScenarioRegime::UsccEst => AnalysisRegime::ThreePhaseEstimated,
            _ => AnalysisRegime::ThreePhaseKnown,
        }
    }
}

impl fmt::Display for ScenarioRegime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for ScenarioRegime {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self, SimError> {
        ScenarioRegime::ALL
            .iter()
            .copied()
            .find(|r| r.label().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                let valid: Vec<&str> = ScenarioRegime::ALL.iter().map(|r| r.label()).collect();
                SimError::UnknownRegime(s.to_string(), valid.join(", "))
            })
    }
}

/// Phase-three inclusion probabilities by case status.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Phase3Probs {
    pub case: f64,
    pub non_case: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    pub n: usize,
    pub p_event: f64,
    /// Non-cases sampled per expected case.
    pub k: usize,
    pub seed: u64,
    pub replicates: usize,
    pub regimes: Vec<ScenarioRegime>,
    pub pure_risk_profiles: Vec<RiskQuery>,
    pub phase3_probs: Option<Phase3Probs>,
    /// Noise SD of the continuous proxies.
    pub proxy_strength: f64,
    pub prepass_draws: usize,
    pub level: f64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            n: 10_000,
            p_event: 0.02,
            k: 2,
            seed: 1,
            replicates: 1000,
            regimes: vec![
                ScenarioRegime::Cohort,
                ScenarioRegime::Scc,
                ScenarioRegime::SccCalib,
                ScenarioRegime::Uscc,
                ScenarioRegime::UsccCalib,
            ],
            pure_risk_profiles: default_profiles(),
            phase3_probs: None,
            proxy_strength: 0.75,
            prepass_draws: 1_000_000,
            level: 0.95,
        }
    }
}

pub fn default_profiles() -> Vec<RiskQuery> {
    [[-1.0, 1.0, -0.6], [1.0, -1.0, 0.6], [1.0, 1.0, 0.6]]
        .iter()
        .map(|x| RiskQuery {
            tau1: 0.0,
            tau2: 8.0,
            x: x.to_vec(),
        })
        .collect()
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::InvalidConfig(m.to_string()));
        if self.replicates < 1 {
            return bad("replicates must be at least 1");
        }
        if self.n < 10 {
            return bad("cohort size must be at least 10");
        }
        if !(self.p_event > 0.0 && self.p_event < 1.0) {
            return bad("p_event must lie in (0, 1)");
        }
        if self.k == 0 {
            return bad("k must be positive");
        }
        if self.regimes.is_empty() {
            return bad("no regimes requested");
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return bad("level must lie in (0, 1)");
        }
        if !(self.proxy_strength >= 0.0) {
            return bad("proxy_strength must be non-negative");
        }
        if self.prepass_draws < 1000 {
            return bad("prepass_draws must be at least 1000");
        }
        for q in &self.pure_risk_profiles {
            if !(q.tau1 >= 0.0 && q.tau1 < q.tau2 && q.tau2 <= FOLLOW_UP_YEARS) {
                return bad("pure-risk intervals must lie within [0, 10] years");
            }
            if q.x.len() != 3 {
                return bad("pure-risk profiles need three covariate values");
            }
        }
        match self.phase3_probs {
            Some(p) => {
                if !(p.case > 0.0 && p.case <= 1.0 && p.non_case > 0.0 && p.non_case <= 1.0) {
                    return bad("phase-three probabilities must lie in (0, 1]");
                }
            }
            None => {
                if self.regimes.iter().any(|r| r.needs_phase3()) {
                    return bad("three-phase regimes need phase3_probs");
                }
            }
        }
        Ok(())
    }

    /// Parameter labels in summary order.
    pub fn parameter_names(&self) -> Vec<String> {
        let mut names: Vec<String> = (1..=3).map(|k| format!("beta{k}")).collect();
        for q in &self.pure_risk_profiles {
            let x: Vec<String> = q.x.iter().map(|v| v.to_string()).collect();
            names.push(format!("log_pi({},{}];x=({})", q.tau1, q.tau2, x.join(",")));
        }
        names
    }
}

/// Covariate vector of one simulated subject.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Covariates {
    pub x1: f64,
    pub x2: usize,
    pub x3: f64,
}

impl Covariates {
    pub fn draw<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let x1: f64 = rng.sample(StandardNormal);
        let probs = if x1 < -2.0 {
            [0.7, 0.05]
        } else if x1 < 1.0 {
            [0.45, 0.2]
        } else {
            [0.4, 0.3]
        };
        let u: f64 = rng.random();
        let x2 = if u < probs[0] {
            0
        } else if u < probs[0] + probs[1] {
            1
        } else {
            2
        };
        let e: f64 = rng.sample(StandardNormal);
        let x3 = X3_MEAN[0] * x1 + X3_MEAN[1] * x2 as f64 + e;
        Self { x1, x2, x3 }
    }

    pub fn as_vec(&self) -> Vec<f64> {
        vec![self.x1, self.x2 as f64, self.x3]
    }

    pub fn relative_hazard(&self) -> f64 {
        (TRUE_BETA[0] * self.x1 + TRUE_BETA[1] * self.x2 as f64 + TRUE_BETA[2] * self.x3).exp()
    }

    /// Sampling stratum `W` (zero-based).
    pub fn stratum(&self) -> usize {
        match (self.x1 >= 0.0, self.x2) {
            (true, 0) => 0,
            (false, 0) | (false, 1) => 1,
            (true, _) => 2,
            (false, _) => 3,
        }
    }
}

/// Mislabelled categorical proxy agreeing with `x2` about 80% of the time.
pub fn categorical_proxy(x2: usize, u: f64) -> usize {
    if u < 0.1 {
        [2, 0, 1][x2]
    } else if u > 0.9 {
        [1, 2, 0][x2]
    } else {
        x2
    }
}

/// Moments of the covariate distribution estimated once per scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prepass {
    pub baseline_hazard: f64,
    pub mean_relative_hazard: f64,
    pub stratum_probability: [f64; N_STRATA],
    pub stratum_relative_hazard: [f64; N_STRATA],
}

impl Prepass {
    pub fn estimate(p_event: f64, draws: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut count = [0usize; N_STRATA];
        let mut sum = [0.0; N_STRATA];
        for _ in 0..draws {
            let x = Covariates::draw(rng);
            let w = x.stratum();
            count[w] += 1;
            sum[w] += x.relative_hazard();
        }
        let total: f64 = sum.iter().sum();
        let mean_relative_hazard = total / draws as f64;
        let mut stratum_probability = [0.0; N_STRATA];
        let mut stratum_relative_hazard = [0.0; N_STRATA];
        for j in 0..N_STRATA {
            stratum_probability[j] = count[j] as f64 / draws as f64;
            stratum_relative_hazard[j] = if count[j] > 0 { sum[j] / count[j] as f64 } else { 0.0 };
        }
        Self {
            baseline_hazard: p_event / (mean_relative_hazard * FOLLOW_UP_YEARS),
            mean_relative_hazard,
            stratum_probability,
            stratum_relative_hazard,
        }
    }

    /// Subcohort size per stratum, `⌊q/(1−q)·E(n_j)·K + ½⌋` with `q` the expected ten-year risk.
    pub fn subcohort_sizes(&self, n: usize, k: usize, stratified: bool) -> Vec<usize> {
        let size = |q: f64, expected_n: f64| (q / (1.0 - q) * expected_n * k as f64 + 0.5).floor() as usize;
        if stratified {
            (0..N_STRATA)
                .map(|j| {
                    let q = self.baseline_hazard * FOLLOW_UP_YEARS * self.stratum_relative_hazard[j];
                    size(q, n as f64 * self.stratum_probability[j])
                })
                .collect()
        } else {
            let q = self.baseline_hazard * FOLLOW_UP_YEARS * self.mean_relative_hazard;
            vec![size(q, n as f64)]
        }
    }
}

/// True parameter values for coverage scoring.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    pub beta: [f64; 3],
    pub baseline_hazard: f64,
    pub pure_risks: Vec<f64>,
}

impl Truth {
    pub fn new(baseline_hazard: f64, profiles: &[RiskQuery]) -> Self {
        let pure_risks = profiles
            .iter()
            .map(|q| {
                let lp: f64 = q.x.iter().zip(TRUE_BETA).map(|(x, b)| x * b).sum();
                1.0 - (-lp.exp() * baseline_hazard * (q.tau2 - q.tau1)).exp()
            })
            .collect();
        Self {
            beta: TRUE_BETA,
            baseline_hazard,
            pure_risks,
        }
    }

    /// Truth in summary parameter order (log scale for pure risks).
    pub fn parameters(&self) -> Vec<f64> {
        let mut out = self.beta.to_vec();
        out.extend(self.pure_risks.iter().map(|p| p.ln()));
        out
    }
}

pub fn simulation_names() -> CovariateNames {
    CovariateNames {
        phase1: vec![],
        phase2: vec!["x1".into(), "x2".into(), "x3".into()],
        proxies: vec!["x1_proxy".into(), "x2_proxy".into(), "x3_proxy".into(), "w".into()],
    }
}

/// Imputation models: `X1 ~ X̃1 + W`, `X2 ~ X̃1 + X̃2 + W` (multinomial), `X3 ~ X̃1 + X̃3`.
pub fn simulation_imputation() -> ImputationSpec {
    let w = Predictor::Dummies {
        column: "w".into(),
        levels: vec![0.0, 1.0, 2.0, 3.0],
    };
    ImputationSpec {
        models: vec![
            CovariateModel {
                covariate: "x1".into(),
                kind: ModelKind::LeastSquares,
                predictors: vec![Predictor::Column("x1_proxy".into()), w.clone()],
            },
            CovariateModel {
                covariate: "x2".into(),
                kind: ModelKind::Multinomial {
                    levels: vec![0.0, 1.0, 2.0],
                    separation: SeparationPolicy::Accept,
                },
                predictors: vec![
                    Predictor::Column("x1_proxy".into()),
                    Predictor::Dummies {
                        column: "x2_proxy".into(),
                        levels: vec![0.0, 1.0, 2.0],
                    },
                    w,
                ],
            },
            CovariateModel {
                covariate: "x3".into(),
                kind: ModelKind::LeastSquares,
                predictors: vec![Predictor::Column("x1_proxy".into()), Predictor::Column("x3_proxy".into())],
            },
        ],
    }
}

/// One cohort stratified by `W + 1`; every subject carries its true covariates.
pub fn simulate_cohort(cfg: &ScenarioConfig, prepass: &Prepass, rng: &mut ChaCha8Rng) -> Result<(CohortDataset, Truth), SimError> {
    let censoring = Exp::new(-(1.0 - LOSS_TO_FOLLOW_UP).ln() / FOLLOW_UP_YEARS).expect("positive rate");
    let noise = Normal::new(0.0, cfg.proxy_strength).expect("finite sd");
    let mut records = Vec::with_capacity(cfg.n);
    for id in 0..cfg.n {
        let x = Covariates::draw(rng);
        let event = Exp::new(prepass.baseline_hazard * x.relative_hazard()).expect("positive rate");
        let t: f64 = event.sample(rng);
        let entry = rng.random::<f64>() * ENTRY_WINDOW_YEARS;
        let c: f64 = censoring.sample(rng);
        let end = (FOLLOW_UP_YEARS - entry).min(c);
        let x1_proxy = x.x1 + noise.sample(rng);
        let x3_proxy = x.x3 + noise.sample(rng);
        let x2_proxy = categorical_proxy(x.x2, rng.random());
        let w = x.stratum();
        records.push(CohortRecord {
            id: id.to_string(),
            entry_time: 0.0,
            exit_time: t.min(end),
            status: t <= end,
            stratum: w + 1,
            x_phase1: vec![],
            x_phase2: Some(x.as_vec()),
            proxies: Some(vec![x1_proxy, x2_proxy as f64, x3_proxy, w as f64]),
        });
    }
    let dataset = CohortDataset::new(records, simulation_names())?;
    Ok((dataset, Truth::new(prepass.baseline_hazard, &cfg.pure_risk_profiles)))
}

/// Same cohort collapsed to a single sampling stratum.
pub fn unstratified(dataset: &CohortDataset) -> Result<CohortDataset, SimError> {
    let records = dataset
        .records()
        .iter()
        .map(|r| CohortRecord {
            stratum: 1,
            ..r.clone()
        })
        .collect();
    Ok(dataset.with_records(records)?)
}

/// Draws `m_per_stratum[j]` subjects without replacement in each stratum and adds every case.
pub fn sample_phase2<R: Rng + ?Sized>(
    dataset: &CohortDataset,
    m_per_stratum: &[usize],
    rng: &mut R,
) -> Result<PhaseTwoDesign, DesignError> {
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); dataset.n_strata()];
    for (i, r) in dataset.records().iter().enumerate() {
        members[r.stratum - 1].push(i);
    }
    let mut subcohort = vec![false; dataset.len()];
    for (j, group) in members.iter().enumerate() {
        let m = m_per_stratum.get(j).copied().unwrap_or(0);
        if m > group.len() {
            return Err(DesignError::StratumTooSmall(j + 1));
        }
        for k in index::sample(rng, group.len(), m) {
            subcohort[group[k]] = true;
        }
    }
    PhaseTwoDesign::from_subcohort(dataset, &subcohort)
}

/// Bernoulli phase-three draw among phase-two subjects, stratified by case status.
pub fn sample_phase3<R: Rng + ?Sized>(
    p2: &PhaseTwoDesign,
    dataset: &CohortDataset,
    probs: Phase3Probs,
    known: bool,
    rng: &mut R,
) -> Result<PhaseThreeDesign, DesignError> {
    let n = dataset.len();
    let prob = |i: usize| if dataset.records()[i].status { probs.case } else { probs.non_case };
    let stratum3: Vec<usize> = dataset.records().iter().map(|r| if r.status { 2 } else { 1 }).collect();
    let observed: Vec<bool> = (0..n).map(|i| p2.sampled[i] && rng.random::<f64>() < prob(i)).collect();
    if known {
        PhaseThreeDesign::known(dataset, p2, &stratum3, &observed, (0..n).map(prob).collect())
    } else {
        estimate_phase3_weights(dataset, p2, &stratum3, &observed)
    }
}

/// Estimates and both variance estimates of one regime in one replicate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeEstimate {
    pub estimate: Vec<f64>,
    pub v_hat: Vec<f64>,
    pub v_robust: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateOutcome {
    pub replicate: usize,
    pub results: Vec<(ScenarioRegime, Result<RegimeEstimate, String>)>,
    pub dropped_time_warnings: usize,
}

fn collect_estimate(analysis: &crate::analysis::Analysis) -> RegimeEstimate {
    let mut estimate = Vec::new();
    let mut v_hat = Vec::new();
    let mut v_robust = Vec::new();
    for c in 0..analysis.fit.beta_hat.len() {
        estimate.push(analysis.fit.beta_hat[c]);
        let (v, r) = analysis.beta.variances(c);
        v_hat.push(v);
        v_robust.push(r);
    }
    for risk in &analysis.risks {
        let pi = risk.risk.value;
        let (v, r) = risk.report.variances(0);
        estimate.push(pi.ln());
        v_hat.push(v / (pi * pi));
        v_robust.push(r / (pi * pi));
    }
    RegimeEstimate {
        estimate,
        v_hat,
        v_robust,
    }
}

fn replicate_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Scenario-wide quantities shared by all replicates.
#[derive(Debug, Clone)]
pub struct ScenarioContext {
    pub prepass: Prepass,
    pub stratified_sizes: Vec<usize>,
    pub unstratified_sizes: Vec<usize>,
    pub imputation: ImputationSpec,
}

impl ScenarioContext {
    pub fn new(cfg: &ScenarioConfig) -> Self {
        let mut rng = replicate_stream(cfg.seed, 0);
        let prepass = Prepass::estimate(cfg.p_event, cfg.prepass_draws, &mut rng);
        Self {
            stratified_sizes: prepass.subcohort_sizes(cfg.n, cfg.k, true),
            unstratified_sizes: prepass.subcohort_sizes(cfg.n, cfg.k, false),
            prepass,
            imputation: simulation_imputation(),
        }
    }
}

/// Generates, samples and analyses replicate `replicate` under every requested regime.
pub fn run_replicate(cfg: &ScenarioConfig, context: &ScenarioContext, replicate: usize) -> Result<ReplicateOutcome, SimError> {
    let mut rng = replicate_stream(cfg.seed, replicate as u64 + 1);
    let (stratified, _) = simulate_cohort(cfg, &context.prepass, &mut rng)?;
    let flat = unstratified(&stratified)?;
    let needs = |pred: fn(ScenarioRegime) -> bool| cfg.regimes.iter().any(|&r| pred(r));
    // Draw order is fixed so that adding a regime does not change the others' samples.
    let scc = sample_phase2(&stratified, &context.stratified_sizes, &mut rng);
    let uscc = sample_phase2(&flat, &context.unstratified_sizes, &mut rng);
    let probs = cfg.phase3_probs;
    let mut phase3_scc = None;
    let mut phase3_uscc = None;
    if let (Some(probs), true) = (probs, needs(|r| r.needs_phase3())) {
        if let Ok(p2) = &scc {
            phase3_scc = Some(sample_phase3(p2, &stratified, probs, true, &mut rng));
        }
        if let Ok(p2) = &uscc {
            phase3_uscc = Some(sample_phase3(p2, &flat, probs, true, &mut rng));
        }
    }
    let mut results = Vec::with_capacity(cfg.regimes.len());
    let mut dropped = 0;
    for &regime in &cfg.regimes {
        let outcome = analyse_regime(
            cfg,
            context,
            regime,
            if regime.stratified() { &stratified } else { &flat },
            if regime.stratified() { &scc } else { &uscc },
            if regime.stratified() { phase3_scc.as_ref() } else { phase3_uscc.as_ref() },
        );
        results.push((
            regime,
            outcome.map(|(estimate, warnings)| {
                dropped += warnings;
                estimate
            }),
        ));
    }
    Ok(ReplicateOutcome {
        replicate,
        results,
        dropped_time_warnings: dropped,
    })
}

fn analyse_regime(
    cfg: &ScenarioConfig,
    context: &ScenarioContext,
    regime: ScenarioRegime,
    dataset: &CohortDataset,
    phase2: &Result<PhaseTwoDesign, DesignError>,
    phase3_known: Option<&Result<PhaseThreeDesign, DesignError>>,
) -> Result<(RegimeEstimate, usize), String> {
    let mut request = AnalysisRequest::new(regime.analysis_regime());
    request.risks = &cfg.pure_risk_profiles;
    let p2;
    let p3;
    if regime != ScenarioRegime::Cohort {
        p2 = phase2.as_ref().map_err(|e| e.to_string())?;
        request.phase2 = Some(p2);
    }
    if matches!(regime, ScenarioRegime::SccCalib | ScenarioRegime::UsccCalib) {
        request.imputation = Some(&context.imputation);
    }
    if regime.needs_phase3() {
        let known = phase3_known
            .ok_or_else(|| "phase-three sample unavailable".to_string())?
            .as_ref()
            .map_err(|e| e.to_string())?;
        p3 = match regime {
            ScenarioRegime::SccTrue | ScenarioRegime::UsccTrue => known.clone(),
            _ => {
                let estimated = estimate_phase3_weights(dataset, request.phase2.unwrap(), &known.stratum3, &known.observed)
                    .map_err(|e| e.to_string())?;
                if matches!(regime, ScenarioRegime::SccNaive | ScenarioRegime::UsccNaive) {
                    estimated.treat_as_known()
                } else {
                    estimated
                }
            }
        };
        request.phase3 = Some(&p3);
    }
    let analysis = analyze(dataset, &request).map_err(|e: AnalysisError| e.to_string())?;
    Ok((collect_estimate(&analysis), analysis.hazard.warning_count()))
}

/// Per-(regime, parameter) Monte Carlo summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub regime: ScenarioRegime,
    pub parameter: String,
    pub truth: f64,
    pub successes: usize,
    pub mean_estimate: f64,
    pub empirical_variance: f64,
    pub mean_v_hat: f64,
    pub mean_v_robust: f64,
    pub coverage_v_hat: f64,
    pub coverage_v_robust: f64,
    /// Empirical variance relative to the full-cohort analysis, when it was run.
    pub variance_ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSummary {
    pub config: ScenarioConfig,
    pub prepass: Prepass,
    pub subcohort_sizes: Vec<usize>,
    pub unstratified_subcohort_size: usize,
    pub rows: Vec<SummaryRow>,
    /// Failed replicates per regime with the first error seen.
    pub failures: Vec<(ScenarioRegime, usize, Option<String>)>,
    pub dropped_time_warnings: usize,
    /// Per-replicate results; not serialized.
    #[serde(skip)]
    pub outcomes: Vec<ReplicateOutcome>,
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

fn sample_variance(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return f64::NAN;
    }
    let m = mean(values);
    values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (values.len() as f64 - 1.0)
}

impl ScenarioSummary {
    pub fn row(&self, regime: ScenarioRegime, parameter: &str) -> Option<&SummaryRow> {
        self.rows.iter().find(|r| r.regime == regime && r.parameter == parameter)
    }

    pub fn failure_count(&self, regime: ScenarioRegime) -> usize {
        self.failures.iter().find(|f| f.0 == regime).map_or(0, |f| f.1)
    }

    fn draws(&self, regime: ScenarioRegime, column: usize) -> Vec<Option<f64>> {
        self.outcomes
            .iter()
            .map(|o| {
                o.results
                    .iter()
                    .find(|(r, _)| *r == regime)
                    .and_then(|(_, res)| res.as_ref().ok())
                    .map(|e| e.estimate[column])
            })
            .collect()
    }

    /// Difference of empirical variances `var(B) − var(A)` with its Monte Carlo standard error,
    /// over replicates where both regimes succeeded.
    pub fn variance_gap(&self, a: ScenarioRegime, b: ScenarioRegime, parameter: &str) -> Option<(f64, f64)> {
        let column = self.config.parameter_names().iter().position(|p| p == parameter)?;
        let (xa, xb): (Vec<f64>, Vec<f64>) = self
            .draws(a, column)
            .into_iter()
            .zip(self.draws(b, column))
            .filter_map(|(u, v)| Some((u?, v?)))
            .unzip();
        if xa.len() < 3 {
            return None;
        }
        let (ma, mb) = (mean(&xa), mean(&xb));
        let d: Vec<f64> = xa.iter().zip(&xb).map(|(u, v)| (v - mb).powi(2) - (u - ma).powi(2)).collect();
        let r = d.len() as f64;
        let gap = mean(&d) * r / (r - 1.0);
        Some((gap, sample_variance(&d).sqrt() / r.sqrt()))
    }

    /// Tab-delimited table, one line per regime and parameter.
    pub fn write_table<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(
            out,
            "regime\tparameter\ttruth\tsuccesses\tmean_estimate\tempirical_variance\tmean_v_hat\tmean_v_robust\tcoverage_v_hat\tcoverage_v_robust\tvariance_ratio"
        )?;
        for r in &self.rows {
            let ratio = r.variance_ratio.map_or_else(|| "NA".to_string(), |v| format!("{v:.12e}"));
            writeln!(
                out,
                "{}\t{}\t{:.12e}\t{}\t{:.12e}\t{:.12e}\t{:.12e}\t{:.12e}\t{:.6}\t{:.6}\t{}",
                r.regime,
                r.parameter,
                r.truth,
                r.successes,
                r.mean_estimate,
                r.empirical_variance,
                r.mean_v_hat,
                r.mean_v_robust,
                r.coverage_v_hat,
                r.coverage_v_robust,
                ratio
            )?;
        }
        Ok(())
    }
}

pub fn summarize(cfg: &ScenarioConfig, context: &ScenarioContext, outcomes: Vec<ReplicateOutcome>) -> ScenarioSummary {
    let names = cfg.parameter_names();
    let truth = Truth::new(context.prepass.baseline_hazard, &cfg.pure_risk_profiles).parameters();
    let hits = |est: f64, var: f64, truth: f64| -> bool {
        confidence_interval(est, var, cfg.level, Transform::Identity)
            .map(|ci| ci.covers(truth))
            .unwrap_or(false)
    };
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    let mut cohort_variance: Vec<Option<f64>> = vec![None; names.len()];
    let mut ordered = cfg.regimes.clone();
    ordered.sort_by_key(|r| *r != ScenarioRegime::Cohort);
    for &regime in &ordered {
        let successes: Vec<&RegimeEstimate> = outcomes
            .iter()
            .filter_map(|o| o.results.iter().find(|(r, _)| *r == regime))
            .filter_map(|(_, res)| res.as_ref().ok())
            .collect();
        let first_error = outcomes
            .iter()
            .filter_map(|o| o.results.iter().find(|(r, _)| *r == regime))
            .find_map(|(_, res)| res.as_ref().err().cloned());
        failures.push((regime, outcomes.len() - successes.len(), first_error));
        for (c, name) in names.iter().enumerate() {
            let est: Vec<f64> = successes.iter().map(|e| e.estimate[c]).collect();
            let v_hat: Vec<f64> = successes.iter().map(|e| e.v_hat[c]).collect();
            let v_robust: Vec<f64> = successes.iter().map(|e| e.v_robust[c]).collect();
            let count = |v: &[f64]| {
                est.iter().zip(v).filter(|(e, v)| hits(**e, **v, truth[c])).count() as f64 / est.len().max(1) as f64
            };
            let empirical_variance = sample_variance(&est);
            if regime == ScenarioRegime::Cohort {
                cohort_variance[c] = Some(empirical_variance);
            }
            rows.push(SummaryRow {
                regime,
                parameter: name.clone(),
                truth: truth[c],
                successes: est.len(),
                mean_estimate: mean(&est),
                empirical_variance,
                mean_v_hat: mean(&v_hat),
                mean_v_robust: mean(&v_robust),
                coverage_v_hat: count(&v_hat),
                coverage_v_robust: count(&v_robust),
                variance_ratio: cohort_variance[c].map(|cv| empirical_variance / cv),
            });
        }
    }
    let order = |r: ScenarioRegime| cfg.regimes.iter().position(|&q| q == r).unwrap_or(usize::MAX);
    rows.sort_by_key(|r| order(r.regime));
    failures.sort_by_key(|f| order(f.0));
    ScenarioSummary {
        config: cfg.clone(),
        prepass: context.prepass.clone(),
        subcohort_sizes: context.stratified_sizes.clone(),
        unstratified_subcohort_size: context.unstratified_sizes[0],
        rows,
        failures,
        dropped_time_warnings: outcomes.iter().map(|o| o.dropped_time_warnings).sum(),
        outcomes,
    }
}

/// Runs every replicate (in parallel) and aggregates in replicate order.
pub fn run_scenario(cfg: &ScenarioConfig) -> Result<ScenarioSummary, SimError> {
    cfg.validate()?;
    let context = ScenarioContext::new(cfg);
    let outcomes = (0..cfg.replicates)
        .into_par_iter()
        .map(|r| run_replicate(cfg, &context, r))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(summarize(cfg, &context, outcomes))
}
