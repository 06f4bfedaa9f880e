//! Per-subject influence contributions, split by sampling phase.

use crate::calibration::{AuxiliaryMatrix, CalibrationResult};
use crate::coxfit::{check_interval, risk_set_sums, BaselineHazard, CoxError, FitResult, WeightedSample};
use crate::dataset::CohortDataset;
use crate::design::{PhaseThreeDesign, PhaseTwoDesign};
use crate::linalg::SpdFactor;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::io::Write;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum InfluenceError {
    #[error("regime mismatch: {0}")]
    RegimeMismatch(String),
    #[error("information matrix is singular")]
    SingularInformation,
    #[error("calibration Gram matrix is singular")]
    SingularCalibrationGram,
    #[error("phase-three stratum {0} has no observed subject")]
    EmptyPhase3Stratum(usize),
    #[error(transparent)]
    Cox(#[from] CoxError),
    #[error("i/o error: {0}")]
    Io(String),
}

/// Which weighting scheme produced the fit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RegimeKind {
    FullCohort,
    Design,
    Calibrated,
    ThreePhaseEstimated,
    ThreePhaseKnown,
}

/// Regime together with the sampling objects its influences depend on.
#[derive(Debug, Clone, Copy)]
pub enum Regime<'a> {
    FullCohort,
    Design,
    Calibrated {
        design: &'a PhaseTwoDesign,
        aux: &'a AuxiliaryMatrix,
        calibration: &'a CalibrationResult,
    },
    ThreePhaseEstimated {
        phase2: &'a PhaseTwoDesign,
        phase3: &'a PhaseThreeDesign,
    },
    /// Known phase-three weights; also used when estimated weights are treated as known.
    ThreePhaseKnown {
        phase2: &'a PhaseTwoDesign,
        phase3: &'a PhaseThreeDesign,
    },
}

impl Regime<'_> {
    pub fn kind(&self) -> RegimeKind {
        match self {
            Regime::FullCohort => RegimeKind::FullCohort,
            Regime::Design => RegimeKind::Design,
            Regime::Calibrated { .. } => RegimeKind::Calibrated,
            Regime::ThreePhaseEstimated { .. } => RegimeKind::ThreePhaseEstimated,
            Regime::ThreePhaseKnown { .. } => RegimeKind::ThreePhaseKnown,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Target {
    Beta,
    HazardIncrement { time: f64 },
    HazardInterval { tau1: f64, tau2: f64 },
    PureRisk { tau1: f64, tau2: f64, x: Vec<f64> },
    Eta,
    Gamma,
}

impl Target {
    pub fn label(&self) -> String {
        match self {
            Target::Beta => "beta".into(),
            Target::HazardIncrement { time } => format!("dLambda0({time})"),
            Target::HazardInterval { tau1, tau2 } => format!("Lambda0({tau1},{tau2}]"),
            Target::PureRisk { tau1, tau2, x } => {
                let profile: Vec<String> = x.iter().map(|v| v.to_string()).collect();
                format!("pure_risk({tau1},{tau2}];x=({})", profile.join(" "))
            }
            Target::Eta => "eta".into(),
            Target::Gamma => "gamma".into(),
        }
    }
}

/// Influence contributions, one row per cohort subject and one column per target component.
#[derive(Debug, Clone, PartialEq)]
pub struct InfluenceSet {
    pub target: Target,
    pub regime: RegimeKind,
    pub phase1: DMatrix<f64>,
    pub phase2: DMatrix<f64>,
    pub phase3: DMatrix<f64>,
    pub total: DMatrix<f64>,
}

impl InfluenceSet {
    pub fn n_subjects(&self) -> usize {
        self.total.nrows()
    }

    pub fn dim(&self) -> usize {
        self.total.ncols()
    }

    /// `Σ_i Δ_i`.
    pub fn total_sum(&self) -> DVector<f64> {
        DVector::from_iterator(self.dim(), (0..self.dim()).map(|c| self.total.column(c).sum()))
    }

    /// Keeps only the listed components.
    pub fn select(&self, columns: &[usize]) -> InfluenceSet {
        let pick = |m: &DMatrix<f64>| m.select_columns(columns.iter());
        InfluenceSet {
            target: self.target.clone(),
            regime: self.regime,
            phase1: pick(&self.phase1),
            phase2: pick(&self.phase2),
            phase3: pick(&self.phase3),
            total: pick(&self.total),
        }
    }
}

/// Shared per-event-time factors and the per-unit score influences of a fitted sample.
///
/// Row `i` of `z` is the change in `β̂` per unit increase of subject `i`'s fit weight.
#[derive(Debug, Clone)]
pub struct InfluenceWorkspace {
    pub beta: DVector<f64>,
    pub info_inverse: DMatrix<f64>,
    pub s0: Vec<f64>,
    pub s1: Vec<DVector<f64>>,
    pub relative_hazard: Vec<f64>,
    pub z: DMatrix<f64>,
    omega: Vec<f64>,
    first: Vec<usize>,
    past: Vec<usize>,
    event_index: Vec<Option<usize>>,
    times: Vec<f64>,
    tau: f64,
}

fn prefix(values: impl Iterator<Item = f64>) -> Vec<f64> {
    let mut out = vec![0.0];
    let mut acc = 0.0;
    for v in values {
        acc += v;
        out.push(acc);
    }
    out
}

impl InfluenceWorkspace {
    pub fn new(sample: &WeightedSample, fit: &FitResult) -> Result<Self, InfluenceError> {
        let n = sample.len();
        let p = sample.n_covariates();
        let beta = fit.beta_hat.clone();
        let info_inverse = SpdFactor::new(&fit.info)
            .ok_or(InfluenceError::SingularInformation)?
            .inverse();
        let sums = risk_set_sums(sample, &beta, false);
        let g = sums.s0.len();
        let grid = sample.grid();
        // c_g = dN^ω / S0 and the matching mean-weighted totals, as prefix sums over the grid.
        let c: Vec<f64> = (0..g)
            .map(|k| if sums.s0[k] > 0.0 { sums.weighted_events[k] / sums.s0[k] } else { 0.0 })
            .collect();
        let c_prefix = prefix(c.iter().copied());
        let mut ce_prefix = vec![DVector::<f64>::zeros(p); g + 1];
        for k in 0..g {
            let mean = if sums.s0[k] > 0.0 { &sums.s1[k] / sums.s0[k] } else { DVector::zeros(p) };
            ce_prefix[k + 1] = &ce_prefix[k] + mean * c[k];
        }
        let mut raw = DMatrix::<f64>::zeros(n, p);
        for i in 0..n {
            if sample.omega(i) == 0.0 {
                continue;
            }
            let x = sample.covariates().row(i).transpose();
            let mut contrib = DVector::<f64>::zeros(p);
            if let Some(e) = grid.event_index[i] {
                if sums.s0[e] > 0.0 {
                    contrib += &x - &sums.s1[e] / sums.s0[e];
                }
            }
            let (lo, hi) = (grid.first[i], grid.past[i]);
            if hi > lo {
                let r = sums.relative_hazard[i];
                let mass = c_prefix[hi] - c_prefix[lo];
                contrib -= (&x * mass - (&ce_prefix[hi] - &ce_prefix[lo])) * r;
            }
            raw.set_row(i, &contrib.transpose());
        }
        let z = raw * &info_inverse;
        Ok(Self {
            beta,
            info_inverse,
            s0: sums.s0,
            s1: sums.s1,
            relative_hazard: sums.relative_hazard,
            z,
            omega: (0..n).map(|i| sample.omega(i)).collect(),
            first: grid.first.clone(),
            past: grid.past.clone(),
            event_index: grid.event_index.clone(),
            times: grid.times.clone(),
            tau: sample.dataset().tau(),
        })
    }

    pub fn n_subjects(&self) -> usize {
        self.omega.len()
    }

    /// Per-unit parts for the hazard mass on grid indices `window`:
    /// the numerator part (per unit event multiplicity) and the weight part (per unit fit weight).
    fn mass_parts(&self, increments: &[f64], window: std::ops::Range<usize>) -> (DVector<f64>, DVector<f64>) {
        let n = self.n_subjects();
        let p = self.beta.len();
        let mut numerator = DVector::<f64>::zeros(n);
        let mut weight_part = DVector::<f64>::zeros(n);
        let ratio: Vec<f64> = (0..self.times.len())
            .map(|k| {
                if window.contains(&k) && self.s0[k] > 0.0 {
                    increments[k] / self.s0[k]
                } else {
                    0.0
                }
            })
            .collect();
        let ratio_prefix = prefix(ratio.iter().copied());
        let mut slope = DVector::<f64>::zeros(p);
        for k in window.clone() {
            if self.s0[k] > 0.0 {
                slope += &self.s1[k] * (increments[k] / self.s0[k]);
            }
        }
        for i in 0..n {
            if let Some(e) = self.event_index[i] {
                if window.contains(&e) && self.s0[e] > 0.0 {
                    numerator[i] = 1.0 / self.s0[e];
                }
            }
            if self.omega[i] == 0.0 {
                continue;
            }
            let (lo, hi) = (self.first[i], self.past[i]);
            let mut value = 0.0;
            if hi > lo {
                value -= (ratio_prefix[hi] - ratio_prefix[lo]) * self.relative_hazard[i];
            }
            value -= slope.dot(&self.z.row(i).transpose());
            weight_part[i] = value;
        }
        (numerator, weight_part)
    }

    fn check_hazard(&self, hazard: &BaselineHazard) -> Result<(), InfluenceError> {
        if hazard.event_times.len() != self.times.len() {
            return Err(InfluenceError::RegimeMismatch(
                "baseline hazard was computed on a different event grid".into(),
            ));
        }
        Ok(())
    }

    pub fn beta(&self, regime: &Regime) -> Result<InfluenceSet, InfluenceError> {
        let zero = DMatrix::<f64>::zeros(self.z.nrows(), self.z.ncols());
        assemble(self, regime, Target::Beta, &self.z, &zero)
    }

    pub fn hazard_interval(
        &self,
        regime: &Regime,
        hazard: &BaselineHazard,
        tau1: f64,
        tau2: f64,
    ) -> Result<InfluenceSet, InfluenceError> {
        self.check_hazard(hazard)?;
        check_interval(tau1, tau2, self.tau)?;
        let a = self.times.partition_point(|&t| t <= tau1);
        let b = self.times.partition_point(|&t| t <= tau2);
        let (numerator, weight_part) = self.mass_parts(&hazard.increments, a..b);
        assemble(
            self,
            regime,
            Target::HazardInterval { tau1, tau2 },
            &DMatrix::from_column_slice(numerator.len(), 1, weight_part.as_slice()),
            &DMatrix::from_column_slice(numerator.len(), 1, numerator.as_slice()),
        )
    }

    pub fn hazard_increment(
        &self,
        regime: &Regime,
        hazard: &BaselineHazard,
        time: f64,
    ) -> Result<InfluenceSet, InfluenceError> {
        self.check_hazard(hazard)?;
        let k = self
            .times
            .iter()
            .position(|&t| t == time)
            .ok_or_else(|| InfluenceError::RegimeMismatch(format!("{time} is not an event time")))?;
        let (numerator, weight_part) = self.mass_parts(&hazard.increments, k..k + 1);
        assemble(
            self,
            regime,
            Target::HazardIncrement { time },
            &DMatrix::from_column_slice(numerator.len(), 1, weight_part.as_slice()),
            &DMatrix::from_column_slice(numerator.len(), 1, numerator.as_slice()),
        )
    }
}

struct PhaseParts {
    phase1: DMatrix<f64>,
    phase2: DMatrix<f64>,
    phase3: DMatrix<f64>,
    total: DMatrix<f64>,
}

impl PhaseParts {
    fn zeros(n: usize, d: usize) -> Self {
        Self {
            phase1: DMatrix::zeros(n, d),
            phase2: DMatrix::zeros(n, d),
            phase3: DMatrix::zeros(n, d),
            total: DMatrix::zeros(n, d),
        }
    }

    fn into_set(self, target: Target, regime: RegimeKind) -> InfluenceSet {
        InfluenceSet {
            target,
            regime,
            phase1: self.phase1,
            phase2: self.phase2,
            phase3: self.phase3,
            total: self.total,
        }
    }
}

fn check_len(what: &str, expected: usize, actual: usize) -> Result<(), InfluenceError> {
    if expected != actual {
        return Err(InfluenceError::RegimeMismatch(format!(
            "{what} covers {actual} subjects, the sample has {expected}"
        )));
    }
    Ok(())
}

/// Calibration quantities shared by every target: `G⁻¹`, `exp(η̂'A)` and the aux rows.
struct CalibrationFactors {
    gram_inverse: DMatrix<f64>,
    aux: DMatrix<f64>,
    raking_factor: Vec<f64>,
    sampled: Vec<bool>,
    design_weight: Vec<f64>,
}

fn calibration_factors(
    n: usize,
    omega: &[f64],
    design: &PhaseTwoDesign,
    aux: &AuxiliaryMatrix,
    calibration: &CalibrationResult,
) -> Result<CalibrationFactors, InfluenceError> {
    check_len("calibration auxiliaries", n, aux.values.nrows())?;
    check_len("phase-two design", n, design.sampled.len())?;
    let q = aux.values.ncols();
    if calibration.eta_hat.len() != q {
        return Err(InfluenceError::RegimeMismatch("η̂ and A have different lengths".into()));
    }
    let mut gram = DMatrix::<f64>::zeros(q, q);
    let mut raking_factor = vec![0.0; n];
    for i in 0..n {
        let a = aux.values.row(i).transpose();
        raking_factor[i] = calibration.eta_hat.dot(&a).exp();
        if design.sampled[i] {
            let w = design.weight[i] * raking_factor[i];
            if (w - omega[i]).abs() > 1e-8 * (1.0 + w.abs()) {
                return Err(InfluenceError::RegimeMismatch(format!(
                    "subject {i}: fit weight is not the calibrated design weight"
                )));
            }
            gram += &a * a.transpose() * w;
        }
    }
    let gram_inverse = SpdFactor::new(&gram)
        .ok_or(InfluenceError::SingularCalibrationGram)?
        .inverse();
    Ok(CalibrationFactors {
        gram_inverse,
        aux: aux.values.clone(),
        raking_factor,
        sampled: design.sampled.clone(),
        design_weight: design.weight.clone(),
    })
}

fn phase3_stratum_counts(phase2: &PhaseTwoDesign, phase3: &PhaseThreeDesign) -> Result<Vec<f64>, InfluenceError> {
    let mut counts = vec![0.0; phase3.n_strata3()];
    let mut observed = vec![0usize; phase3.n_strata3()];
    for i in 0..phase3.observed.len() {
        if phase2.sampled[i] {
            counts[phase3.stratum3[i] - 1] += 1.0;
            if phase3.observed[i] {
                observed[phase3.stratum3[i] - 1] += 1;
            }
        }
    }
    if let Some(s) = observed.iter().position(|&c| c == 0) {
        return Err(InfluenceError::EmptyPhase3Stratum(s + 1));
    }
    Ok(counts)
}

fn check_three_phase(
    ws: &InfluenceWorkspace,
    phase2: &PhaseTwoDesign,
    phase3: &PhaseThreeDesign,
) -> Result<(), InfluenceError> {
    let n = ws.n_subjects();
    check_len("phase-two design", n, phase2.sampled.len())?;
    check_len("phase-three design", n, phase3.observed.len())?;
    for i in 0..n {
        let active = phase2.sampled[i] && phase3.observed[i];
        if active != (ws.omega[i] > 0.0) {
            return Err(InfluenceError::RegimeMismatch(format!(
                "subject {i}: sample membership differs from phase-three observation"
            )));
        }
    }
    Ok(())
}

/// Builds phase parts from the per-unit weight part `direct` and numerator part `numerator`.
fn assemble(
    ws: &InfluenceWorkspace,
    regime: &Regime,
    target: Target,
    direct: &DMatrix<f64>,
    numerator: &DMatrix<f64>,
) -> Result<InfluenceSet, InfluenceError> {
    let n = ws.n_subjects();
    let d = direct.ncols();
    let omega = &ws.omega;
    let mut parts = PhaseParts::zeros(n, d);
    match regime {
        Regime::FullCohort | Regime::Design => {
            if matches!(regime, Regime::FullCohort)
                && omega.iter().any(|&w| (w - 1.0).abs() > 1e-12)
            {
                return Err(InfluenceError::RegimeMismatch(
                    "full-cohort influences need every subject active with weight 1".into(),
                ));
            }
            for i in 0..n {
                if omega[i] == 0.0 {
                    continue;
                }
                for c in 0..d {
                    let if2 = direct[(i, c)] + numerator[(i, c)] / omega[i];
                    parts.phase2[(i, c)] = if2;
                    parts.total[(i, c)] = omega[i] * if2;
                }
            }
        }
        Regime::Calibrated {
            design,
            aux,
            calibration,
        } => {
            let f = calibration_factors(n, omega, design, aux, calibration)?;
            let q = f.aux.ncols();
            // Sensitivity of the target to η: Σ ω direct A'.
            let mut sens = DMatrix::<f64>::zeros(d, q);
            for i in 0..n {
                if omega[i] > 0.0 {
                    sens += direct.row(i).transpose() * f.aux.row(i) * omega[i];
                }
            }
            let sens_g = &sens * &f.gram_inverse;
            for i in 0..n {
                let a = f.aux.row(i).transpose();
                let if1 = &sens_g * &a;
                parts.phase1.set_row(i, &if1.transpose());
                let mut total = if1.clone();
                if f.sampled[i] {
                    let e = f.raking_factor[i];
                    let xw = f.design_weight[i];
                    for c in 0..d {
                        let if2 = numerator[(i, c)] / xw + e * direct[(i, c)] - e * if1[c];
                        parts.phase2[(i, c)] = if2;
                        total[c] += xw * if2;
                    }
                }
                parts.total.set_row(i, &total.transpose());
            }
        }
        Regime::ThreePhaseEstimated { phase2, phase3 } => {
            check_three_phase(ws, phase2, phase3)?;
            if !phase3.is_estimated() {
                return Err(InfluenceError::RegimeMismatch(
                    "phase-three weights are known; use the known-weights regime".into(),
                ));
            }
            let counts = phase3_stratum_counts(phase2, phase3)?;
            let strata = counts.len();
            let mut sens = DMatrix::<f64>::zeros(d, strata);
            for i in 0..n {
                if omega[i] > 0.0 {
                    let s = phase3.stratum3[i] - 1;
                    for c in 0..d {
                        sens[(c, s)] += omega[i] * direct[(i, c)];
                    }
                }
            }
            for i in 0..n {
                if !phase2.sampled[i] {
                    continue;
                }
                let s = phase3.stratum3[i] - 1;
                for c in 0..d {
                    let through_gamma = sens[(c, s)] / counts[s];
                    let if2 = numerator[(i, c)] + through_gamma;
                    parts.phase2[(i, c)] = if2;
                    let mut total = if2;
                    if phase3.observed[i] {
                        let if3 = phase2.weight[i] * direct[(i, c)] - through_gamma;
                        parts.phase3[(i, c)] = if3;
                        total += phase3.est_weight[i] * if3;
                    }
                    parts.total[(i, c)] = total;
                }
            }
        }
        Regime::ThreePhaseKnown { phase2, phase3 } => {
            check_three_phase(ws, phase2, phase3)?;
            for i in 0..n {
                if !phase2.sampled[i] {
                    continue;
                }
                for c in 0..d {
                    let if2 = numerator[(i, c)];
                    parts.phase2[(i, c)] = if2;
                    let mut total = if2;
                    if phase3.observed[i] {
                        parts.phase3[(i, c)] = direct[(i, c)];
                        total += omega[i] * direct[(i, c)];
                    }
                    parts.total[(i, c)] = total;
                }
            }
        }
    }
    Ok(parts.into_set(target, regime.kind()))
}

pub fn influence_beta(
    regime: &Regime,
    fit: &FitResult,
    sample: &WeightedSample,
) -> Result<InfluenceSet, InfluenceError> {
    InfluenceWorkspace::new(sample, fit)?.beta(regime)
}

/// Influences for the interval mass `Σ_{τ1 < t ≤ τ2} dΛ0(t)`.
pub fn influence_hazard(
    regime: &Regime,
    fit: &FitResult,
    sample: &WeightedSample,
    hazard: &BaselineHazard,
    tau1: f64,
    tau2: f64,
) -> Result<InfluenceSet, InfluenceError> {
    InfluenceWorkspace::new(sample, fit)?.hazard_interval(regime, hazard, tau1, tau2)
}

/// Chain rule from the β and interval-mass influences to the pure risk.
pub fn influence_pure_risk(
    beta_set: &InfluenceSet,
    mass_set: &InfluenceSet,
    beta: &DVector<f64>,
    hazard: &BaselineHazard,
    tau1: f64,
    tau2: f64,
    x: &[f64],
) -> Result<InfluenceSet, InfluenceError> {
    if beta_set.regime != mass_set.regime {
        return Err(InfluenceError::RegimeMismatch(
            "β and hazard influences come from different regimes".into(),
        ));
    }
    match mass_set.target {
        Target::HazardInterval { tau1: a, tau2: b } if a == tau1 && b == tau2 => {}
        _ => {
            return Err(InfluenceError::RegimeMismatch(
                "hazard influences are for a different interval".into(),
            ))
        }
    }
    let risk = crate::coxfit::pure_risk(beta, hazard, tau1, tau2, x)?;
    let survival = 1.0 - risk.value;
    let d_mass = risk.relative_hazard * survival;
    let d_beta = DVector::from_iterator(
        x.len(),
        x.iter().map(|v| risk.hazard_mass * risk.relative_hazard * survival * v),
    );
    let combine = |b: &DMatrix<f64>, m: &DMatrix<f64>| -> DMatrix<f64> {
        let column = b * &d_beta + m.column(0) * d_mass;
        DMatrix::from_column_slice(column.len(), 1, column.as_slice())
    };
    Ok(InfluenceSet {
        target: Target::PureRisk {
            tau1,
            tau2,
            x: x.to_vec(),
        },
        regime: beta_set.regime,
        phase1: combine(&beta_set.phase1, &mass_set.phase1),
        phase2: combine(&beta_set.phase2, &mass_set.phase2),
        phase3: combine(&beta_set.phase3, &mass_set.phase3),
        total: combine(&beta_set.total, &mass_set.total),
    })
}

/// Influences of the raking coefficients.
pub fn influence_eta(
    design: &PhaseTwoDesign,
    aux: &AuxiliaryMatrix,
    calibration: &CalibrationResult,
    sample: &WeightedSample,
) -> Result<InfluenceSet, InfluenceError> {
    let n = sample.len();
    let omega: Vec<f64> = (0..n).map(|i| sample.omega(i)).collect();
    let f = calibration_factors(n, &omega, design, aux, calibration)?;
    let q = f.aux.ncols();
    let mut parts = PhaseParts::zeros(n, q);
    for i in 0..n {
        let if1 = &f.gram_inverse * f.aux.row(i).transpose();
        parts.phase1.set_row(i, &if1.transpose());
        let mut total = if1.clone();
        if f.sampled[i] {
            let if2 = -&if1 * f.raking_factor[i];
            total += &if2 * f.design_weight[i];
            parts.phase2.set_row(i, &if2.transpose());
        }
        parts.total.set_row(i, &total.transpose());
    }
    Ok(parts.into_set(Target::Eta, RegimeKind::Calibrated))
}

/// Influences of the log phase-three weights, one column per phase-three stratum.
pub fn influence_gamma(
    phase2: &PhaseTwoDesign,
    phase3: &PhaseThreeDesign,
) -> Result<InfluenceSet, InfluenceError> {
    if !phase3.is_estimated() {
        return Err(InfluenceError::RegimeMismatch("phase-three weights are not estimated".into()));
    }
    let counts = phase3_stratum_counts(phase2, phase3)?;
    let n = phase3.observed.len();
    let mut parts = PhaseParts::zeros(n, counts.len());
    for i in 0..n {
        if !phase2.sampled[i] {
            continue;
        }
        let s = phase3.stratum3[i] - 1;
        let g = 1.0 / counts[s];
        parts.phase2[(i, s)] = g;
        parts.total[(i, s)] = g;
        if phase3.observed[i] {
            parts.phase3[(i, s)] = -g;
            parts.total[(i, s)] -= phase3.est_weight[i] * g;
        }
    }
    Ok(parts.into_set(Target::Gamma, RegimeKind::ThreePhaseEstimated))
}

/// Writes influences as `id,target,phase,c1..cd` rows, phases `1`, `2`, `3` and `total`.
pub fn dump_influences<W: Write>(
    writer: W,
    dataset: &CohortDataset,
    sets: &[&InfluenceSet],
) -> Result<(), InfluenceError> {
    let io = |e: std::io::Error| InfluenceError::Io(e.to_string());
    let mut out = std::io::BufWriter::new(writer);
    let width = sets.iter().map(|s| s.dim()).max().unwrap_or(0);
    let mut header = vec!["id".to_string(), "target".into(), "phase".into()];
    header.extend((1..=width).map(|c| format!("c{c}")));
    writeln!(out, "{}", header.join(",")).map_err(io)?;
    for set in sets {
        let label = set.target.label().replace(',', ";");
        let phases = [("1", &set.phase1), ("2", &set.phase2), ("3", &set.phase3), ("total", &set.total)];
        for (i, record) in dataset.records().iter().enumerate() {
            for (name, matrix) in phases {
                let values: Vec<String> = (0..set.dim()).map(|c| format!("{:e}", matrix[(i, c)])).collect();
                writeln!(out, "{},{},{},{}", record.id, label, name, values.join(",")).map_err(io)?;
            }
        }
    }
    out.flush().map_err(io)
}
