//! End-to-end estimation under one weighting regime: fit, hazard, influences and variances.

use crate::calibration::{build_auxiliaries, rake_to_totals, CalibrationControls, CalibrationError, CalibrationResult, ImputationSpec};
use crate::coxfit::{breslow, fit_cox, pure_risk, BaselineHazard, CoxError, FitResult, PureRisk, RiskSetPolicy, SolverControls, WeightedSample};
use crate::dataset::CohortDataset;
use crate::design::{joint_inclusion, DesignError, PhaseThreeDesign, PhaseTwoDesign};
use crate::influence::{influence_pure_risk, InfluenceError, InfluenceSet, InfluenceWorkspace, Regime};
use crate::variance::{variance_calibrated, variance_design, variance_three_phase, VarianceError, VarianceReport};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("missing input: {0}")]
    MissingInput(&'static str),
    #[error(transparent)]
    Cox(#[from] CoxError),
    #[error(transparent)]
    Design(#[from] DesignError),
    #[error(transparent)]
    Influence(#[from] InfluenceError),
    #[error(transparent)]
    Calibration(#[from] CalibrationError),
    #[error(transparent)]
    Variance(#[from] VarianceError),
}

impl AnalysisError {
    /// Whether the failure is numerical rather than a problem with the inputs.
    pub fn is_numerical(&self) -> bool {
        match self {
            AnalysisError::MissingInput(_) => false,
            AnalysisError::Cox(e) => !matches!(e, CoxError::BadInterval { .. } | CoxError::InvalidSample(_)),
            AnalysisError::Design(_) => false,
            AnalysisError::Calibration(e) => !matches!(
                e,
                CalibrationError::InvalidSpec(_) | CalibrationError::MissingCategory(_)
            ),
            _ => true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnalysisRegime {
    FullCohort,
    Design,
    Calibrated,
    ThreePhaseEstimated,
    /// Known phase-three probabilities collapsed with the phase-two weights.
    ThreePhaseKnown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskQuery {
    pub tau1: f64,
    pub tau2: f64,
    pub x: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
pub struct AnalysisRequest<'a> {
    pub regime: AnalysisRegime,
    pub phase2: Option<&'a PhaseTwoDesign>,
    pub phase3: Option<&'a PhaseThreeDesign>,
    pub imputation: Option<&'a ImputationSpec>,
    pub risks: &'a [RiskQuery],
    pub solver: SolverControls,
    pub calibration: CalibrationControls,
}

impl<'a> AnalysisRequest<'a> {
    pub fn new(regime: AnalysisRegime) -> Self {
        Self {
            regime,
            phase2: None,
            phase3: None,
            imputation: None,
            risks: &[],
            solver: SolverControls::default(),
            calibration: CalibrationControls::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RiskResult {
    pub risk: PureRisk,
    pub report: VarianceReport,
    pub influence: InfluenceSet,
}

#[derive(Debug, Clone)]
pub struct Analysis {
    pub regime: AnalysisRegime,
    pub fit: FitResult,
    pub hazard: BaselineHazard,
    pub beta: VarianceReport,
    pub beta_influence: InfluenceSet,
    pub risks: Vec<RiskResult>,
    pub calibration: Option<CalibrationResult>,
}

fn variance_for(
    regime: &Regime,
    set: &InfluenceSet,
    dataset: &CohortDataset,
    phase2: &PhaseTwoDesign,
) -> Result<VarianceReport, AnalysisError> {
    let joint = joint_inclusion(phase2, dataset)?;
    Ok(match regime {
        Regime::FullCohort | Regime::Design => variance_design(set, &joint)?,
        Regime::Calibrated { .. } => variance_calibrated(set, &joint)?,
        Regime::ThreePhaseEstimated { phase3, .. } | Regime::ThreePhaseKnown { phase3, .. } => {
            variance_three_phase(set, &joint, phase3)?
        }
    })
}

pub fn analyze(dataset: &CohortDataset, request: &AnalysisRequest) -> Result<Analysis, AnalysisError> {
    let n = dataset.len();
    let full = PhaseTwoDesign::full_cohort(dataset);
    let phase2 = match request.regime {
        AnalysisRegime::FullCohort => &full,
        _ => request.phase2.ok_or(AnalysisError::MissingInput("phase-two design"))?,
    };
    let mut intervals: Vec<(f64, f64)> = Vec::new();
    for r in request.risks {
        if !intervals.contains(&(r.tau1, r.tau2)) {
            intervals.push((r.tau1, r.tau2));
        }
    }
    let pipeline;
    let calibration;
    let sample = match request.regime {
        AnalysisRegime::FullCohort => {
            calibration = None;
            pipeline = None;
            WeightedSample::full_cohort(dataset)?
        }
        AnalysisRegime::Design => {
            calibration = None;
            pipeline = None;
            WeightedSample::from_design(dataset, phase2)?
        }
        AnalysisRegime::Calibrated => {
            let spec = request.imputation.ok_or(AnalysisError::MissingInput("imputation models"))?;
            let built = build_auxiliaries(dataset, phase2, spec, &intervals, &request.solver, &request.calibration)?;
            let base: Vec<f64> = (0..n).map(|i| phase2.sampling_weight(i)).collect();
            let result = rake_to_totals(&base, &built.stage2.values, &built.stage2.cohort_totals(), &request.calibration)?;
            let sample = WeightedSample::new(dataset, phase2.sampled.clone(), result.calibrated_weight.clone())?;
            calibration = Some(result);
            pipeline = Some(built);
            sample
        }
        AnalysisRegime::ThreePhaseEstimated | AnalysisRegime::ThreePhaseKnown => {
            let p3 = request.phase3.ok_or(AnalysisError::MissingInput("phase-three design"))?;
            calibration = None;
            pipeline = None;
            let active = (0..n).map(|i| phase2.sampled[i] && p3.observed[i]).collect();
            let weight = (0..n).map(|i| phase2.weight[i] * p3.est_weight[i]).collect();
            WeightedSample::new(dataset, active, weight)?
        }
    };
    let regime = match request.regime {
        AnalysisRegime::FullCohort => Regime::FullCohort,
        AnalysisRegime::Design => Regime::Design,
        AnalysisRegime::Calibrated => Regime::Calibrated {
            design: phase2,
            aux: &pipeline.as_ref().expect("calibrated pipeline").stage2,
            calibration: calibration.as_ref().expect("calibrated weights"),
        },
        AnalysisRegime::ThreePhaseEstimated => Regime::ThreePhaseEstimated {
            phase2,
            phase3: request.phase3.expect("phase-three design"),
        },
        AnalysisRegime::ThreePhaseKnown => Regime::ThreePhaseKnown {
            phase2,
            phase3: request.phase3.expect("phase-three design"),
        },
    };
    let fit = fit_cox(&sample, &request.solver)?;
    let hazard = breslow(&sample, &fit.beta_hat, RiskSetPolicy::DropWithWarning)?;
    let workspace = InfluenceWorkspace::new(&sample, &fit)?;
    let beta_influence = workspace.beta(&regime)?;
    let beta = variance_for(&regime, &beta_influence, dataset, phase2)?.with_dropped_times(hazard.warning_count());
    let mut risks = Vec::with_capacity(request.risks.len());
    for query in request.risks {
        let risk = pure_risk(&fit.beta_hat, &hazard, query.tau1, query.tau2, &query.x)?;
        let mass = workspace.hazard_interval(&regime, &hazard, query.tau1, query.tau2)?;
        let influence = influence_pure_risk(&beta_influence, &mass, &fit.beta_hat, &hazard, query.tau1, query.tau2, &query.x)?;
        let report = variance_for(&regime, &influence, dataset, phase2)?.with_dropped_times(hazard.warning_count());
        risks.push(RiskResult { risk, report, influence });
    }
    Ok(Analysis {
        regime: request.regime,
        fit,
        hazard,
        beta,
        beta_influence,
        risks,
        calibration,
    })
}
