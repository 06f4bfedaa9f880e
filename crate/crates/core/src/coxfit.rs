//! Weighted Cox partial likelihood, Breslow baseline hazard and pure risk.

use crate::dataset::{at_risk, CohortDataset};
use crate::design::PhaseTwoDesign;
use crate::linalg::{max_abs, SpdFactor};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CoxError {
    #[error("no events among the active subjects")]
    NoEvents,
    #[error("monotone likelihood: the estimate diverges after {iterations} iterations")]
    MonotoneLikelihood { iterations: usize },
    #[error("information matrix is singular")]
    SingularInformation,
    #[error("Newton-Raphson did not converge in {iterations} iterations (score max-norm {score_norm:e})")]
    MaxIterations { iterations: usize, score_norm: f64 },
    #[error("empty weighted risk set at event time {0}")]
    EmptyRiskSet(f64),
    #[error("invalid pure-risk interval ({tau1}, {tau2}]")]
    BadInterval { tau1: f64, tau2: f64 },
    #[error("invalid weighted sample: {0}")]
    InvalidSample(String),
}

/// Newton-Raphson settings for `fit_cox`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverControls {
    pub max_iterations: usize,
    pub max_halvings: usize,
    pub score_tolerance: f64,
    pub loglik_tolerance: f64,
    pub divergence_bound: f64,
}

impl Default for SolverControls {
    fn default() -> Self {
        Self {
            max_iterations: 50,
            max_halvings: 10,
            score_tolerance: 1e-9,
            loglik_tolerance: 1e-12,
            divergence_bound: 50.0,
        }
    }
}

/// Sorted unique event times of the whole cohort and each subject's at-risk index range.
#[derive(Debug, Clone)]
pub struct EventGrid {
    pub times: Vec<f64>,
    /// Subject `i` is at risk at grid points `first[i]..past[i]`.
    pub first: Vec<usize>,
    pub past: Vec<usize>,
    /// Grid index of the subject's own event.
    pub event_index: Vec<Option<usize>>,
}

impl EventGrid {
    pub fn new(dataset: &CohortDataset) -> Self {
        let mut times: Vec<f64> = dataset
            .records()
            .iter()
            .filter(|r| r.status)
            .map(|r| r.exit_time)
            .collect();
        times.sort_by(|a, b| a.partial_cmp(b).expect("finite times"));
        times.dedup();
        let mut first = Vec::with_capacity(dataset.len());
        let mut past = Vec::with_capacity(dataset.len());
        let mut event_index = Vec::with_capacity(dataset.len());
        for r in dataset.records() {
            first.push(times.partition_point(|&t| t <= r.entry_time));
            let upper = times.partition_point(|&t| t <= r.exit_time);
            past.push(upper);
            event_index.push(if r.status { Some(upper - 1) } else { None });
        }
        Self {
            times,
            first,
            past,
            event_index,
        }
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

/// A cohort together with the per-subject weights entering the Cox sums.
///
/// `active` is the phase-two (or phase-three) membership indicator and `fit_weight`
/// the design, calibrated or estimated weight; only active subjects enter the sums.
#[derive(Debug, Clone)]
pub struct WeightedSample<'a> {
    dataset: &'a CohortDataset,
    covariates: DMatrix<f64>,
    active: Vec<bool>,
    fit_weight: Vec<f64>,
    event_mass: Vec<f64>,
    grid: EventGrid,
}

impl<'a> WeightedSample<'a> {
    pub fn new(
        dataset: &'a CohortDataset,
        active: Vec<bool>,
        fit_weight: Vec<f64>,
    ) -> Result<Self, CoxError> {
        let n = dataset.len();
        let p = dataset.n_covariates();
        if active.len() != n || fit_weight.len() != n {
            return Err(CoxError::InvalidSample("vector lengths differ from the cohort size".into()));
        }
        let mut covariates = DMatrix::<f64>::zeros(n, p);
        for i in 0..n {
            if let Some(x) = dataset.covariates(i) {
                for (c, v) in x.iter().enumerate() {
                    covariates[(i, c)] = *v;
                }
            } else if active[i] {
                return Err(CoxError::InvalidSample(format!(
                    "subject {} is active but its phase-two covariates are absent",
                    dataset.records()[i].id
                )));
            }
        }
        Self::with_covariates(dataset, covariates, active, fit_weight)
    }

    /// Sample whose model covariates are supplied directly (e.g. imputed values).
    pub fn with_covariates(
        dataset: &'a CohortDataset,
        covariates: DMatrix<f64>,
        active: Vec<bool>,
        fit_weight: Vec<f64>,
    ) -> Result<Self, CoxError> {
        let n = dataset.len();
        if covariates.nrows() != n || active.len() != n || fit_weight.len() != n {
            return Err(CoxError::InvalidSample("vector lengths differ from the cohort size".into()));
        }
        for i in 0..n {
            if active[i] && !(fit_weight[i] >= 0.0 && fit_weight[i].is_finite()) {
                return Err(CoxError::InvalidSample(format!(
                    "subject {} has an invalid fit weight {}",
                    dataset.records()[i].id, fit_weight[i]
                )));
            }
        }
        Ok(Self {
            dataset,
            covariates,
            active,
            fit_weight,
            event_mass: vec![1.0; n],
            grid: EventGrid::new(dataset),
        })
    }

    pub fn full_cohort(dataset: &'a CohortDataset) -> Result<Self, CoxError> {
        Self::new(dataset, vec![true; dataset.len()], vec![1.0; dataset.len()])
    }

    pub fn from_design(dataset: &'a CohortDataset, design: &PhaseTwoDesign) -> Result<Self, CoxError> {
        Self::new(dataset, design.sampled.clone(), design.weight.clone())
    }

    /// Replaces the multiplicity of each subject's event in the Breslow numerator (default 1).
    pub fn with_event_mass(mut self, event_mass: Vec<f64>) -> Self {
        assert_eq!(event_mass.len(), self.dataset.len());
        self.event_mass = event_mass;
        self
    }

    /// Same subjects and covariates with new membership and weights.
    pub fn reweighted(&self, active: Vec<bool>, fit_weight: Vec<f64>) -> Result<Self, CoxError> {
        let mut out = Self::with_covariates(self.dataset, self.covariates.clone(), active, fit_weight)?;
        out.event_mass = self.event_mass.clone();
        Ok(out)
    }

    pub fn dataset(&self) -> &'a CohortDataset {
        self.dataset
    }

    pub fn covariates(&self) -> &DMatrix<f64> {
        &self.covariates
    }

    pub fn active(&self) -> &[bool] {
        &self.active
    }

    pub fn fit_weight(&self) -> &[f64] {
        &self.fit_weight
    }

    pub fn event_mass(&self) -> &[f64] {
        &self.event_mass
    }

    pub fn grid(&self) -> &EventGrid {
        &self.grid
    }

    pub fn len(&self) -> usize {
        self.active.len()
    }

    pub fn is_empty(&self) -> bool {
        self.active.is_empty()
    }

    pub fn n_covariates(&self) -> usize {
        self.covariates.ncols()
    }

    /// Effective weight `ω_i`, zero for inactive subjects.
    pub fn omega(&self, i: usize) -> f64 {
        if self.active[i] {
            self.fit_weight[i]
        } else {
            0.0
        }
    }

    pub fn linear_predictor(&self, i: usize, beta: &DVector<f64>) -> f64 {
        (0..beta.len()).map(|c| self.covariates[(i, c)] * beta[c]).sum()
    }
}

/// Weighted moments of the risk set at one time.
#[derive(Debug, Clone, PartialEq)]
pub struct SMoments {
    pub s0: f64,
    pub s1: DVector<f64>,
    pub s2: DMatrix<f64>,
}

/// Direct evaluation of `S0`, `S1`, `S2` at time `t`.
pub fn s_moments(sample: &WeightedSample, beta: &DVector<f64>, t: f64) -> SMoments {
    let p = sample.n_covariates();
    let mut out = SMoments {
        s0: 0.0,
        s1: DVector::zeros(p),
        s2: DMatrix::zeros(p, p),
    };
    for (i, record) in sample.dataset().records().iter().enumerate() {
        let omega = sample.omega(i);
        if omega == 0.0 || !at_risk(record, t) {
            continue;
        }
        let x = sample.covariates().row(i).transpose();
        let r = omega * sample.linear_predictor(i, beta).exp();
        out.s0 += r;
        out.s1 += &x * r;
        out.s2 += &x * x.transpose() * r;
    }
    out
}

/// Risk-set moments and weighted event sums on the event grid.
#[derive(Debug, Clone)]
pub struct RiskSetSums {
    pub s0: Vec<f64>,
    pub s1: Vec<DVector<f64>>,
    pub s2: Vec<DMatrix<f64>>,
    /// `Σ ω_i dN_i(t)` over active subjects.
    pub weighted_events: Vec<f64>,
    /// `Σ ω_i X_i dN_i(t)` over active subjects.
    pub weighted_event_x: Vec<DVector<f64>>,
    pub relative_hazard: Vec<f64>,
}

pub fn risk_set_sums(sample: &WeightedSample, beta: &DVector<f64>, with_s2: bool) -> RiskSetSums {
    let grid = sample.grid();
    let g = grid.len();
    let p = sample.n_covariates();
    let mut add0 = vec![0.0; g];
    let mut sub0 = vec![0.0; g];
    let mut add1 = vec![DVector::<f64>::zeros(p); g];
    let mut sub1 = vec![DVector::<f64>::zeros(p); g];
    let s2_dim = if with_s2 { p } else { 0 };
    let mut add2 = vec![DMatrix::<f64>::zeros(s2_dim, s2_dim); g];
    let mut sub2 = vec![DMatrix::<f64>::zeros(s2_dim, s2_dim); g];
    let mut weighted_events = vec![0.0; g];
    let mut weighted_event_x = vec![DVector::<f64>::zeros(p); g];
    let mut relative_hazard = vec![0.0; sample.len()];
    for i in 0..sample.len() {
        let rh = sample.linear_predictor(i, beta).exp();
        relative_hazard[i] = rh;
        let omega = sample.omega(i);
        if omega == 0.0 {
            continue;
        }
        let x = sample.covariates().row(i).transpose();
        if let Some(e) = grid.event_index[i] {
            weighted_events[e] += omega;
            weighted_event_x[e] += &x * omega;
        }
        let (lo, hi) = (grid.first[i], grid.past[i]);
        if hi <= lo {
            continue;
        }
        let r = omega * rh;
        let rx = &x * r;
        add0[hi - 1] += r;
        add1[hi - 1] += &rx;
        if with_s2 {
            add2[hi - 1] += &rx * x.transpose();
        }
        if lo > 0 {
            sub0[lo - 1] += r;
            sub1[lo - 1] += &rx;
            if with_s2 {
                sub2[lo - 1] += &rx * x.transpose();
            }
        }
    }
    let mut s0 = vec![0.0; g];
    let mut s1 = vec![DVector::<f64>::zeros(p); g];
    let mut s2 = vec![DMatrix::<f64>::zeros(s2_dim, s2_dim); g];
    let mut run_add0 = 0.0;
    let mut run_sub0 = 0.0;
    let mut run_add1 = DVector::<f64>::zeros(p);
    let mut run_sub1 = DVector::<f64>::zeros(p);
    let mut run_add2 = DMatrix::<f64>::zeros(s2_dim, s2_dim);
    let mut run_sub2 = DMatrix::<f64>::zeros(s2_dim, s2_dim);
    // A subject at risk on first..past is added at past-1 and removed from first-1 downwards.
    for k in (0..g).rev() {
        run_add0 += add0[k];
        run_sub0 += sub0[k];
        run_add1 += &add1[k];
        run_sub1 += &sub1[k];
        s0[k] = run_add0 - run_sub0;
        s1[k] = &run_add1 - &run_sub1;
        if with_s2 {
            run_add2 += &add2[k];
            run_sub2 += &sub2[k];
            s2[k] = &run_add2 - &run_sub2;
        }
    }
    RiskSetSums {
        s0,
        s1,
        s2,
        weighted_events,
        weighted_event_x,
        relative_hazard,
    }
}

struct Evaluation {
    loglik: f64,
    score: DVector<f64>,
    info: DMatrix<f64>,
}

fn evaluate(sample: &WeightedSample, beta: &DVector<f64>) -> Evaluation {
    let p = sample.n_covariates();
    let sums = risk_set_sums(sample, beta, true);
    let mut loglik = 0.0;
    let mut score = DVector::<f64>::zeros(p);
    let mut info = DMatrix::<f64>::zeros(p, p);
    for k in 0..sums.s0.len() {
        let d = sums.weighted_events[k];
        if d == 0.0 {
            continue;
        }
        let s0 = sums.s0[k];
        let mean = &sums.s1[k] / s0;
        loglik += beta.dot(&sums.weighted_event_x[k]) - d * s0.ln();
        score += &sums.weighted_event_x[k] - &mean * d;
        info += (&sums.s2[k] / s0 - &mean * mean.transpose()) * d;
    }
    Evaluation { loglik, score, info }
}

/// Estimated log relative hazards with solver diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub beta_hat: DVector<f64>,
    pub info: DMatrix<f64>,
    pub score_norm: f64,
    pub loglik: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Weighted partial-likelihood score at `beta`.
pub fn score(sample: &WeightedSample, beta: &DVector<f64>) -> DVector<f64> {
    evaluate(sample, beta).score
}

pub fn fit_cox(sample: &WeightedSample, controls: &SolverControls) -> Result<FitResult, CoxError> {
    let p = sample.n_covariates();
    let has_events = (0..sample.len())
        .any(|i| sample.omega(i) > 0.0 && sample.grid().event_index[i].is_some());
    if !has_events {
        return Err(CoxError::NoEvents);
    }
    let mut beta = DVector::<f64>::zeros(p);
    let mut state = evaluate(sample, &beta);
    let mut last_change: Option<f64> = None;
    for iteration in 0..=controls.max_iterations {
        let score_norm = max_abs(&state.score);
        let loglik_settled = match last_change {
            None => true,
            Some(change) => change.abs() <= controls.loglik_tolerance * (1.0 + state.loglik.abs()),
        };
        let factor = SpdFactor::new(&state.info);
        if score_norm < controls.score_tolerance && loglik_settled {
            if let Some(f) = &factor {
                let step = f.solve(&state.score);
                let scale = 1.0 + max_abs(&beta);
                if max_abs(&step) > 1e-4 * scale {
                    return Err(CoxError::MonotoneLikelihood { iterations: iteration });
                }
            }
            return Ok(FitResult {
                beta_hat: beta,
                info: state.info,
                score_norm,
                loglik: state.loglik,
                iterations: iteration,
                converged: true,
            });
        }
        if iteration == controls.max_iterations {
            return Err(CoxError::MaxIterations {
                iterations: iteration,
                score_norm,
            });
        }
        let factor = factor.ok_or(CoxError::SingularInformation)?;
        let step = factor.solve(&state.score);
        let slack = controls.loglik_tolerance * (1.0 + state.loglik.abs());
        let mut length = 1.0;
        let mut halvings = 0;
        let (candidate, next) = loop {
            let candidate = &beta + &step * length;
            if max_abs(&candidate) > controls.divergence_bound {
                return Err(CoxError::MonotoneLikelihood { iterations: iteration + 1 });
            }
            let next = evaluate(sample, &candidate);
            let improved = next.loglik.is_finite() && next.loglik >= state.loglik - slack;
            if improved || halvings == controls.max_halvings {
                break (candidate, next);
            }
            length *= 0.5;
            halvings += 1;
        };
        last_change = Some(next.loglik - state.loglik);
        beta = candidate;
        state = next;
    }
    unreachable!("loop returns on its final iteration")
}

/// Handling of event times whose weighted risk set is empty.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum RiskSetPolicy {
    #[default]
    DropWithWarning,
    Strict,
}

/// Breslow step function on the cohort event grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineHazard {
    pub event_times: Vec<f64>,
    pub increments: Vec<f64>,
    pub numerator_counts: Vec<usize>,
    /// Event times ignored because no active subject was at risk.
    pub dropped_times: Vec<f64>,
    pub tau: f64,
}

impl BaselineHazard {
    pub fn cumulative(&self, t: f64) -> f64 {
        self.event_times
            .iter()
            .zip(&self.increments)
            .take_while(|(&s, _)| s <= t)
            .map(|(_, d)| d)
            .sum()
    }

    /// `Σ_{τ1 < t ≤ τ2} dΛ0(t)`.
    pub fn interval_mass(&self, tau1: f64, tau2: f64) -> f64 {
        self.event_times
            .iter()
            .zip(&self.increments)
            .filter(|(&s, _)| s > tau1 && s <= tau2)
            .map(|(_, d)| d)
            .sum()
    }

    pub fn warning_count(&self) -> usize {
        self.dropped_times.len()
    }
}

pub fn breslow(
    sample: &WeightedSample,
    beta: &DVector<f64>,
    policy: RiskSetPolicy,
) -> Result<BaselineHazard, CoxError> {
    let sums = risk_set_sums(sample, beta, false);
    breslow_from_sums(sample, &sums, policy)
}

pub(crate) fn breslow_from_sums(
    sample: &WeightedSample,
    sums: &RiskSetSums,
    policy: RiskSetPolicy,
) -> Result<BaselineHazard, CoxError> {
    let grid = sample.grid();
    let mut numerator = vec![0.0; grid.len()];
    let mut counts = vec![0usize; grid.len()];
    for i in 0..sample.len() {
        if let Some(e) = grid.event_index[i] {
            numerator[e] += sample.event_mass()[i];
            counts[e] += 1;
        }
    }
    let mut increments = vec![0.0; grid.len()];
    let mut dropped_times = Vec::new();
    for k in 0..grid.len() {
        if sums.s0[k] > 0.0 {
            increments[k] = numerator[k] / sums.s0[k];
        } else {
            match policy {
                RiskSetPolicy::Strict => return Err(CoxError::EmptyRiskSet(grid.times[k])),
                RiskSetPolicy::DropWithWarning => dropped_times.push(grid.times[k]),
            }
        }
    }
    Ok(BaselineHazard {
        event_times: grid.times.clone(),
        increments,
        numerator_counts: counts,
        dropped_times,
        tau: sample.dataset().tau(),
    })
}

/// Covariate-specific pure risk on `(tau1, tau2]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PureRisk {
    pub tau1: f64,
    pub tau2: f64,
    pub x_profile: Vec<f64>,
    pub value: f64,
    pub hazard_mass: f64,
    pub relative_hazard: f64,
}

pub fn check_interval(tau1: f64, tau2: f64, tau: f64) -> Result<(), CoxError> {
    if !(tau1 >= 0.0 && tau1 < tau2 && tau2 <= tau) {
        return Err(CoxError::BadInterval { tau1, tau2 });
    }
    Ok(())
}

pub fn pure_risk(
    beta: &DVector<f64>,
    hazard: &BaselineHazard,
    tau1: f64,
    tau2: f64,
    x: &[f64],
) -> Result<PureRisk, CoxError> {
    check_interval(tau1, tau2, hazard.tau)?;
    if x.len() != beta.len() {
        return Err(CoxError::InvalidSample("profile length differs from the coefficient count".into()));
    }
    let hazard_mass = hazard.interval_mass(tau1, tau2);
    let relative_hazard = x.iter().zip(beta.iter()).map(|(a, b)| a * b).sum::<f64>().exp();
    Ok(PureRisk {
        tau1,
        tau2,
        x_profile: x.to_vec(),
        value: 1.0 - (-relative_hazard * hazard_mass).exp(),
        hazard_mass,
        relative_hazard,
    })
}
