//! Robust and phase-decomposed variance estimates and confidence intervals.

use crate::design::{JointInclusion, PhaseThreeDesign};
use crate::influence::{InfluenceSet, RegimeKind, Target};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VarianceError {
    #[error("regime mismatch: {0}")]
    RegimeMismatch(String),
    #[error("variance {0} is negative")]
    NegativeVariance(f64),
    #[error("log-scale interval needs a positive estimate, got {0}")]
    NonPositiveEstimate(f64),
    #[error("confidence level {0} is outside (0, 1)")]
    InvalidLevel(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct VarianceReport {
    pub target: Target,
    pub regime: RegimeKind,
    pub v_robust: DMatrix<f64>,
    pub v_decomposed: DMatrix<f64>,
    /// Named parts summing to `v_decomposed`.
    pub components: Vec<(String, DMatrix<f64>)>,
    pub dropped_time_warnings: usize,
    /// Set when a diagonal entry of `v_decomposed` is negative.
    pub negative_diagonal: bool,
}

impl VarianceReport {
    fn new(set: &InfluenceSet, components: Vec<(String, DMatrix<f64>)>) -> Self {
        let d = set.dim();
        let mut v_decomposed = DMatrix::<f64>::zeros(d, d);
        for (_, part) in &components {
            v_decomposed += part;
        }
        let v_robust = robust(set);
        let negative_diagonal = (0..d).any(|c| v_decomposed[(c, c)] < 0.0);
        Self {
            target: set.target.clone(),
            regime: set.regime,
            v_robust,
            v_decomposed,
            components,
            dropped_time_warnings: 0,
            negative_diagonal,
        }
    }

    pub fn with_dropped_times(mut self, count: usize) -> Self {
        self.dropped_time_warnings = count;
        self
    }

    pub fn component(&self, name: &str) -> Option<&DMatrix<f64>> {
        self.components.iter().find(|(n, _)| n == name).map(|(_, m)| m)
    }

    /// Diagonal of `v_decomposed` and `v_robust` for one component.
    pub fn variances(&self, c: usize) -> (f64, f64) {
        (self.v_decomposed[(c, c)], self.v_robust[(c, c)])
    }
}

fn row(m: &DMatrix<f64>, i: usize) -> DVector<f64> {
    m.row(i).transpose()
}

fn add_outer(acc: &mut DMatrix<f64>, a: &DVector<f64>, b: &DVector<f64>, scale: f64) {
    if scale == 0.0 {
        return;
    }
    for r in 0..a.len() {
        for c in 0..b.len() {
            acc[(r, c)] += scale * a[r] * b[c];
        }
    }
}

/// `a bᵀ + b aᵀ` scaled.
fn add_symmetric_cross(acc: &mut DMatrix<f64>, a: &DVector<f64>, b: &DVector<f64>, scale: f64) {
    add_outer(acc, a, b, scale);
    add_outer(acc, b, a, scale);
}

/// `Σ_i Δ_i Δ_iᵀ`.
pub fn robust(set: &InfluenceSet) -> DMatrix<f64> {
    let d = set.dim();
    let mut out = DMatrix::<f64>::zeros(d, d);
    for i in 0..set.n_subjects() {
        let delta = row(&set.total, i);
        add_outer(&mut out, &delta, &delta, 1.0);
    }
    out
}

/// `Σ_j c_j Σ_{i≠k} u_i u_kᵀ` over distinct sampled non-case pairs, via `(Σu)(Σu)ᵀ − Σ u uᵀ`.
fn pair_block(joint: &JointInclusion, d: usize, u: impl Fn(usize) -> DVector<f64>) -> DMatrix<f64> {
    let strata = joint.n_strata();
    let mut sums = vec![DVector::<f64>::zeros(d); strata];
    let mut squares = vec![DMatrix::<f64>::zeros(d, d); strata];
    for i in 0..joint.len() {
        if !joint.is_sampled(i) || joint.is_case(i) {
            continue;
        }
        let j = joint.stratum_of(i) - 1;
        let v = u(i);
        sums[j] += &v;
        add_outer(&mut squares[j], &v, &v, 1.0);
    }
    let mut out = DMatrix::<f64>::zeros(d, d);
    for j in 0..strata {
        let factor = joint.pair_factor(j + 1);
        if factor == 0.0 {
            continue;
        }
        out += (&sums[j] * sums[j].transpose() - &squares[j]) * factor;
    }
    out
}

fn check_rows(set: &InfluenceSet, joint: &JointInclusion) -> Result<(), VarianceError> {
    if set.n_subjects() != joint.len() {
        return Err(VarianceError::RegimeMismatch(
            "influences and design cover different cohorts".into(),
        ));
    }
    Ok(())
}

fn finite_population_factor(n: usize) -> f64 {
    n as f64 / (n as f64 - 1.0)
}

/// Two-phase variance with design weights: superpopulation and phase-two components.
pub fn variance_design(set: &InfluenceSet, joint: &JointInclusion) -> Result<VarianceReport, VarianceError> {
    if !matches!(set.regime, RegimeKind::Design | RegimeKind::FullCohort) {
        return Err(VarianceError::RegimeMismatch(format!(
            "design-weight variance needs design influences, got {:?}",
            set.regime
        )));
    }
    check_rows(set, joint)?;
    let n = joint.len();
    let d = set.dim();
    let scale = finite_population_factor(n);
    let mut superpopulation = DMatrix::<f64>::zeros(d, d);
    let mut phase2 = DMatrix::<f64>::zeros(d, d);
    for i in 0..n {
        if !joint.is_sampled(i) {
            continue;
        }
        let w = joint.weight(i);
        let v = row(&set.phase2, i);
        add_outer(&mut superpopulation, &v, &v, scale * w);
        add_outer(&mut phase2, &v, &v, joint.marginal_variance(i) * w * w * w);
    }
    phase2 += pair_block(joint, d, |i| row(&set.phase2, i) * joint.weight(i));
    Ok(VarianceReport::new(
        set,
        vec![("superpopulation".into(), superpopulation), ("phase2".into(), phase2)],
    ))
}

/// `(1/(n−1)) Σ ξ w IF⁽²⁾IF⁽²⁾ᵀ + Σ_{i≠k} w_{ik} σ_{ik} w_i w_k ξ_i ξ_k IF⁽²⁾_i IF⁽²⁾_kᵀ`.
pub fn design_difference(set: &InfluenceSet, joint: &JointInclusion) -> Result<DMatrix<f64>, VarianceError> {
    check_rows(set, joint)?;
    let n = joint.len();
    let d = set.dim();
    let mut out = DMatrix::<f64>::zeros(d, d);
    for i in 0..n {
        if joint.is_sampled(i) {
            let v = row(&set.phase2, i);
            add_outer(&mut out, &v, &v, joint.weight(i) / (n as f64 - 1.0));
        }
    }
    out += pair_block(joint, d, |i| row(&set.phase2, i) * joint.weight(i));
    Ok(out)
}

/// Two-phase variance with calibrated weights; the phase-one influences enter the superpopulation part.
pub fn variance_calibrated(set: &InfluenceSet, joint: &JointInclusion) -> Result<VarianceReport, VarianceError> {
    if set.regime != RegimeKind::Calibrated {
        return Err(VarianceError::RegimeMismatch(format!(
            "calibrated variance needs calibrated influences, got {:?}",
            set.regime
        )));
    }
    check_rows(set, joint)?;
    let n = joint.len();
    let d = set.dim();
    let scale = finite_population_factor(n);
    let mut superpopulation = DMatrix::<f64>::zeros(d, d);
    let mut phase2 = DMatrix::<f64>::zeros(d, d);
    for i in 0..n {
        let a = row(&set.phase1, i);
        add_outer(&mut superpopulation, &a, &a, scale);
        if !joint.is_sampled(i) {
            continue;
        }
        let w = joint.weight(i);
        let b = row(&set.phase2, i);
        add_symmetric_cross(&mut superpopulation, &a, &b, scale * w);
        add_outer(&mut superpopulation, &b, &b, scale * w);
        add_outer(&mut phase2, &b, &b, joint.marginal_variance(i) * w * w * w);
    }
    phase2 += pair_block(joint, d, |i| row(&set.phase2, i) * joint.weight(i));
    Ok(VarianceReport::new(
        set,
        vec![("superpopulation".into(), superpopulation), ("phase2".into(), phase2)],
    ))
}

/// Difference between the calibrated phase-decomposed and robust estimates, evaluated directly.
pub fn calibrated_difference(set: &InfluenceSet, joint: &JointInclusion) -> Result<DMatrix<f64>, VarianceError> {
    check_rows(set, joint)?;
    let n = joint.len();
    let d = set.dim();
    let scale = 1.0 / (n as f64 - 1.0);
    let mut out = DMatrix::<f64>::zeros(d, d);
    for i in 0..n {
        let a = row(&set.phase1, i);
        add_outer(&mut out, &a, &a, scale);
        if joint.is_sampled(i) {
            let w = joint.weight(i);
            let b = row(&set.phase2, i);
            add_symmetric_cross(&mut out, &a, &b, scale * w);
            add_outer(&mut out, &b, &b, scale * w);
        }
    }
    out += pair_block(joint, d, |i| row(&set.phase2, i) * joint.weight(i));
    Ok(out)
}

/// Three-phase variance: estimated phase-three weights, or known weights in collapsed form.
pub fn variance_three_phase(
    set: &InfluenceSet,
    joint: &JointInclusion,
    phase3: &PhaseThreeDesign,
) -> Result<VarianceReport, VarianceError> {
    check_rows(set, joint)?;
    if phase3.observed.len() != joint.len() {
        return Err(VarianceError::RegimeMismatch("phase-three design covers a different cohort".into()));
    }
    let n = joint.len();
    let d = set.dim();
    let scale = finite_population_factor(n);
    let mut superpopulation = DMatrix::<f64>::zeros(d, d);
    let mut phase2 = DMatrix::<f64>::zeros(d, d);
    let mut phase3_part = DMatrix::<f64>::zeros(d, d);
    let observed = |i: usize| if phase3.observed[i] { 1.0 } else { 0.0 };
    match set.regime {
        RegimeKind::ThreePhaseEstimated => {
            for i in 0..n {
                if !joint.is_sampled(i) {
                    continue;
                }
                let w2 = joint.weight(i);
                let w3 = phase3.est_weight[i];
                let v = observed(i);
                let a = row(&set.phase2, i);
                let b = row(&set.phase3, i);
                let mut braces = DMatrix::<f64>::zeros(d, d);
                add_outer(&mut braces, &a, &a, 1.0);
                add_symmetric_cross(&mut braces, &a, &b, v * w3);
                add_outer(&mut braces, &b, &b, v * w3);
                superpopulation += &braces * (scale / w2);
                phase2 += &braces * (joint.marginal_variance(i) * w2);
                add_outer(&mut phase3_part, &b, &b, phase3.est_var[i] * w3 * v * w3 * w3);
            }
            phase2 += pair_block(joint, d, |i| row(&set.phase2, i) + row(&set.phase3, i) * (observed(i) * phase3.est_weight[i]));
        }
        RegimeKind::ThreePhaseKnown => {
            for i in 0..n {
                if !joint.is_sampled(i) {
                    continue;
                }
                let w2 = joint.weight(i);
                let w3 = phase3.est_weight[i];
                let w = w2 * w3;
                let v = observed(i);
                let a = row(&set.phase2, i);
                let b = row(&set.phase3, i);
                add_outer(&mut superpopulation, &a, &a, scale / w2);
                add_symmetric_cross(&mut superpopulation, &a, &b, scale * v * w / w2);
                add_outer(&mut superpopulation, &b, &b, scale * v * w);
                add_outer(&mut phase2, &b, &b, joint.marginal_variance(i) * (w2 / w3) * v * w * w);
                add_outer(&mut phase3_part, &b, &b, phase3.est_var[i] * w3 * v * w * w);
            }
            phase2 += pair_block(joint, d, |i| row(&set.phase3, i) * (observed(i) * joint.weight(i) * phase3.est_weight[i]));
        }
        other => {
            return Err(VarianceError::RegimeMismatch(format!(
                "three-phase variance needs three-phase influences, got {other:?}"
            )))
        }
    }
    Ok(VarianceReport::new(
        set,
        vec![
            ("superpopulation".into(), superpopulation),
            ("phase2".into(), phase2),
            ("phase3".into(), phase3_part),
        ],
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Transform {
    Identity,
    Log,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceInterval {
    pub estimate: f64,
    /// Standard error on the scale of the transform.
    pub se: f64,
    pub lower: f64,
    pub upper: f64,
    pub transform: Transform,
}

impl ConfidenceInterval {
    pub fn covers(&self, value: f64) -> bool {
        self.lower <= value && value <= self.upper
    }
}

pub fn confidence_interval(
    estimate: f64,
    variance: f64,
    level: f64,
    transform: Transform,
) -> Result<ConfidenceInterval, VarianceError> {
    if !(level > 0.0 && level < 1.0) {
        return Err(VarianceError::InvalidLevel(level));
    }
    if !(variance >= 0.0) {
        return Err(VarianceError::NegativeVariance(variance));
    }
    let z = normal_quantile(0.5 + level / 2.0);
    match transform {
        Transform::Identity => {
            let se = variance.sqrt();
            Ok(ConfidenceInterval {
                estimate,
                se,
                lower: estimate - z * se,
                upper: estimate + z * se,
                transform,
            })
        }
        Transform::Log => {
            if !(estimate > 0.0) {
                return Err(VarianceError::NonPositiveEstimate(estimate));
            }
            let se = variance.sqrt() / estimate;
            let centre = estimate.ln();
            Ok(ConfidenceInterval {
                estimate,
                se,
                lower: (centre - z * se).exp(),
                upper: (centre + z * se).exp(),
                transform,
            })
        }
    }
}

/// Standard normal quantile; infinite at 0 and 1.
pub fn normal_quantile(p: f64) -> f64 {
    if p <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if p >= 1.0 {
        return f64::INFINITY;
    }
    Normal::standard().inverse_cdf(p)
}
