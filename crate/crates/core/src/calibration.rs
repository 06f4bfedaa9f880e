//! Raking calibration of design weights and construction of auxiliary variables.

use crate::coxfit::{fit_cox, CoxError, FitResult, SolverControls, WeightedSample};
use crate::dataset::CohortDataset;
use crate::design::PhaseTwoDesign;
use crate::influence::{InfluenceError, InfluenceWorkspace, Regime};
use crate::linalg::{max_abs, SpdFactor};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CalibrationError {
    #[error("auxiliary variables are rank deficient over the phase-two sample")]
    RankDeficientAuxiliaries,
    #[error("auxiliary matrix must contain exactly one constant column, found {0}")]
    ConstantColumn(usize),
    #[error("raking did not converge after {iterations} iterations (residual {residual:e})")]
    NonConvergence { iterations: usize, residual: f64 },
    #[error("regression predictors are rank deficient")]
    RankDeficient,
    #[error("multinomial fit diverges (separated categories)")]
    Separation,
    #[error("category {0} has no weighted observation")]
    MissingCategory(usize),
    #[error("invalid imputation spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Cox(#[from] CoxError),
    #[error(transparent)]
    Influence(#[from] InfluenceError),
}

/// Cohort-wide auxiliary variables, one row per subject.
#[derive(Debug, Clone, PartialEq)]
pub struct AuxiliaryMatrix {
    pub values: DMatrix<f64>,
    pub column_names: Vec<String>,
}

impl AuxiliaryMatrix {
    pub fn new(values: DMatrix<f64>, column_names: Vec<String>) -> Result<Self, CalibrationError> {
        if column_names.len() != values.ncols() {
            return Err(CalibrationError::InvalidSpec(
                "one name per auxiliary column is required".into(),
            ));
        }
        let constant = (0..values.ncols())
            .filter(|&c| values.column(c).iter().all(|&v| v == 1.0))
            .count();
        if constant != 1 {
            return Err(CalibrationError::ConstantColumn(constant));
        }
        Ok(Self {
            values,
            column_names,
        })
    }

    /// Only the constant column.
    pub fn constant(n: usize) -> Self {
        Self {
            values: DMatrix::from_element(n, 1, 1.0),
            column_names: vec!["one".into()],
        }
    }

    pub fn n_columns(&self) -> usize {
        self.values.ncols()
    }

    pub fn cohort_totals(&self) -> DVector<f64> {
        DVector::from_iterator(
            self.values.ncols(),
            (0..self.values.ncols()).map(|c| self.values.column(c).sum()),
        )
    }

    /// Appends columns, keeping the existing ones.
    pub fn extended(&self, extra: &DMatrix<f64>, names: &[String]) -> Result<Self, CalibrationError> {
        let n = self.values.nrows();
        let q = self.values.ncols();
        let mut values = DMatrix::<f64>::zeros(n, q + extra.ncols());
        values.columns_mut(0, q).copy_from(&self.values);
        values.columns_mut(q, extra.ncols()).copy_from(extra);
        let mut column_names = self.column_names.clone();
        column_names.extend(names.iter().cloned());
        Self::new(values, column_names)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationControls {
    pub max_iterations: usize,
    pub max_halvings: usize,
    pub tolerance: f64,
}

impl Default for CalibrationControls {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            max_halvings: 30,
            tolerance: 1e-10,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationResult {
    pub eta_hat: DVector<f64>,
    /// `w·exp(η̂'A)` for subjects with positive base weight, 0 otherwise.
    pub calibrated_weight: Vec<f64>,
    pub constraint_residual: DVector<f64>,
    pub iterations: usize,
    pub converged: bool,
}

impl CalibrationResult {
    pub fn residual_norm(&self) -> f64 {
        max_abs(&self.constraint_residual)
    }
}

fn raking_residual(base: &[f64], aux: &DMatrix<f64>, totals: &DVector<f64>, eta: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let q = aux.ncols();
    let mut residual = -totals.clone();
    let mut jacobian = DMatrix::<f64>::zeros(q, q);
    for (i, &b) in base.iter().enumerate() {
        if b == 0.0 {
            continue;
        }
        let a = aux.row(i).transpose();
        let w = b * eta.dot(&a).exp();
        residual += &a * w;
        jacobian += &a * a.transpose() * w;
    }
    (residual, jacobian)
}

/// Rakes base weights `ξw` (zero outside phase two) so that `Σ ξ w* A = totals`.
pub fn rake_to_totals(
    base_weight: &[f64],
    aux: &DMatrix<f64>,
    totals: &DVector<f64>,
    controls: &CalibrationControls,
) -> Result<CalibrationResult, CalibrationError> {
    let q = aux.ncols();
    let tolerance = controls.tolerance * (1.0 + max_abs(totals));
    let mut eta = DVector::<f64>::zeros(q);
    let (mut residual, mut jacobian) = raking_residual(base_weight, aux, totals, &eta);
    if SpdFactor::new(&jacobian).is_none() {
        return Err(CalibrationError::RankDeficientAuxiliaries);
    }
    let mut iterations = 0;
    // Weights that already meet the totals are returned untouched.
    let mut polish = if max_abs(&residual) <= tolerance { 2 } else { 0 };
    loop {
        let norm = max_abs(&residual);
        let met = norm <= tolerance;
        if met && polish == 2 {
            break;
        }
        if iterations == controls.max_iterations {
            if met {
                break;
            }
            return Err(CalibrationError::NonConvergence {
                iterations,
                residual: norm,
            });
        }
        let factor = SpdFactor::new(&jacobian).ok_or(CalibrationError::RankDeficientAuxiliaries)?;
        let step = factor.solve(&residual);
        let mut length = 1.0;
        let mut halvings = 0;
        let (candidate, next_residual, next_jacobian) = loop {
            let candidate = &eta - &step * length;
            let (r, j) = raking_residual(base_weight, aux, totals, &candidate);
            if max_abs(&r) <= norm || halvings == controls.max_halvings {
                break (candidate, r, j);
            }
            length *= 0.5;
            halvings += 1;
        };
        // Past the tolerance, further steps are kept only while they still reduce the residual.
        if met {
            if max_abs(&next_residual) >= norm {
                break;
            }
            polish += 1;
        }
        iterations += 1;
        eta = candidate;
        residual = next_residual;
        jacobian = next_jacobian;
    }
    let calibrated_weight = base_weight
        .iter()
        .enumerate()
        .map(|(i, &b)| if b == 0.0 { 0.0 } else { b * eta.dot(&aux.row(i).transpose()).exp() })
        .collect();
    Ok(CalibrationResult {
        eta_hat: eta,
        calibrated_weight,
        constraint_residual: residual,
        iterations,
        converged: true,
    })
}

/// Rakes the sample's fit weights against the cohort totals of `aux`.
pub fn rake(
    sample: &WeightedSample,
    aux: &AuxiliaryMatrix,
    controls: &CalibrationControls,
) -> Result<CalibrationResult, CalibrationError> {
    if aux.values.nrows() != sample.len() {
        return Err(CalibrationError::InvalidSpec("auxiliary rows differ from the cohort size".into()));
    }
    let base: Vec<f64> = (0..sample.len()).map(|i| sample.omega(i)).collect();
    rake_to_totals(&base, &aux.values, &aux.cohort_totals(), controls)
}

/// Raking distance `Σ ξ {w* log(w*/w) + w − w*}`.
pub fn raking_distance(base_weight: &[f64], calibrated: &[f64]) -> f64 {
    base_weight
        .iter()
        .zip(calibrated)
        .filter(|(&b, _)| b > 0.0)
        .map(|(&b, &c)| c * (c / b).ln() + b - c)
        .sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ImputationKind {
    WeightedLeastSquares,
    /// Baseline category 0; `coefficients` has one column per non-baseline category.
    WeightedMultinomialLogistic,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImputationModel {
    pub kind: ImputationKind,
    /// Column 0 of the design is the intercept.
    pub coefficients: DMatrix<f64>,
    pub predictor_names: Vec<String>,
    pub response_name: String,
    pub iterations: usize,
}

fn with_intercept(x: &DMatrix<f64>) -> DMatrix<f64> {
    let mut design = DMatrix::<f64>::from_element(x.nrows(), x.ncols() + 1, 1.0);
    design.columns_mut(1, x.ncols()).copy_from(x);
    design
}

impl ImputationModel {
    pub fn n_categories(&self) -> usize {
        match self.kind {
            ImputationKind::WeightedLeastSquares => 1,
            ImputationKind::WeightedMultinomialLogistic => self.coefficients.ncols() + 1,
        }
    }

    /// Linear prediction (least squares) for one predictor row.
    pub fn predict(&self, x: &[f64]) -> f64 {
        self.linear(x, 0)
    }

    fn linear(&self, x: &[f64], column: usize) -> f64 {
        let coef = self.coefficients.column(column);
        coef[0] + x.iter().enumerate().map(|(k, v)| coef[k + 1] * v).sum::<f64>()
    }

    /// Category probabilities (multinomial) for one predictor row.
    pub fn probabilities(&self, x: &[f64]) -> Vec<f64> {
        let mut scores = vec![0.0];
        scores.extend((0..self.coefficients.ncols()).map(|c| self.linear(x, c)));
        let top = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scores.iter().map(|s| (s - top).exp()).collect();
        let total: f64 = exps.iter().sum();
        exps.iter().map(|e| e / total).collect()
    }
}

/// Weighted least squares with an intercept prepended to `x`.
pub fn fit_wls(x: &DMatrix<f64>, y: &DVector<f64>, w: &[f64]) -> Result<ImputationModel, CalibrationError> {
    let design = with_intercept(x);
    let k = design.ncols();
    let mut gram = DMatrix::<f64>::zeros(k, k);
    let mut rhs = DVector::<f64>::zeros(k);
    for i in 0..design.nrows() {
        if w[i] == 0.0 {
            continue;
        }
        let row = design.row(i).transpose();
        gram += &row * row.transpose() * w[i];
        rhs += &row * (w[i] * y[i]);
    }
    let factor = SpdFactor::new(&gram).ok_or(CalibrationError::RankDeficient)?;
    let coefficients = factor.solve(&rhs);
    Ok(ImputationModel {
        kind: ImputationKind::WeightedLeastSquares,
        coefficients: DMatrix::from_column_slice(k, 1, coefficients.as_slice()),
        predictor_names: Vec::new(),
        response_name: String::new(),
        iterations: 1,
    })
}

/// What to do when the multinomial likelihood has no finite maximiser.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeparationPolicy {
    #[default]
    Error,
    /// Stop once the log-likelihood stabilises; fitted probabilities are then at their limits.
    Accept,
}

/// Weighted multinomial logistic regression, categories `0..n_categories`, intercept prepended.
pub fn fit_wmultinomial(
    x: &DMatrix<f64>,
    y: &[usize],
    w: &[f64],
    n_categories: usize,
) -> Result<ImputationModel, CalibrationError> {
    fit_wmultinomial_with(x, y, w, n_categories, SeparationPolicy::Error)
}

pub fn fit_wmultinomial_with(
    x: &DMatrix<f64>,
    y: &[usize],
    w: &[f64],
    n_categories: usize,
    policy: SeparationPolicy,
) -> Result<ImputationModel, CalibrationError> {
    let design = with_intercept(x);
    let k = design.ncols();
    let free = n_categories.saturating_sub(1);
    let mut counts = vec![0.0; n_categories];
    for (i, &c) in y.iter().enumerate() {
        if c >= n_categories {
            return Err(CalibrationError::InvalidSpec(format!("category {c} out of range")));
        }
        counts[c] += w[i];
    }
    if let Some(c) = counts.iter().position(|&v| v <= 0.0) {
        return Err(CalibrationError::MissingCategory(c));
    }
    let dim = free * k;
    let mut theta = DVector::<f64>::zeros(dim);
    let evaluate = |theta: &DVector<f64>| -> (f64, DVector<f64>, DMatrix<f64>) {
        let mut loglik = 0.0;
        let mut grad = DVector::<f64>::zeros(dim);
        let mut neg_hess = DMatrix::<f64>::zeros(dim, dim);
        for i in 0..design.nrows() {
            if w[i] == 0.0 {
                continue;
            }
            let row = design.row(i).transpose();
            let mut scores = vec![0.0; n_categories];
            for c in 1..n_categories {
                scores[c] = theta.rows((c - 1) * k, k).dot(&row);
            }
            let top = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let total: f64 = scores.iter().map(|s| (s - top).exp()).sum();
            let log_norm = top + total.ln();
            let probs: Vec<f64> = scores.iter().map(|s| (s - log_norm).exp()).collect();
            loglik += w[i] * (scores[y[i]] - log_norm);
            let outer = &row * row.transpose();
            for c in 1..n_categories {
                let indicator = if y[i] == c { 1.0 } else { 0.0 };
                let mut g = grad.rows_mut((c - 1) * k, k);
                g += &row * (w[i] * (indicator - probs[c]));
                for d in 1..n_categories {
                    let delta = if c == d { 1.0 } else { 0.0 };
                    let coef = w[i] * probs[c] * (delta - probs[d]);
                    let mut block = neg_hess.view_mut(((c - 1) * k, (d - 1) * k), (k, k));
                    block += &outer * coef;
                }
            }
        }
        (loglik, grad, neg_hess)
    };
    let (mut loglik, mut grad, mut neg_hess) = evaluate(&theta);
    let mut iterations = 0;
    let mut stalled = false;
    while max_abs(&grad) >= 1e-8 && !stalled {
        let accept = policy == SeparationPolicy::Accept;
        if iterations == 100 || (!accept && max_abs(&theta) > 30.0) {
            if accept {
                break;
            }
            return Err(CalibrationError::Separation);
        }
        let factor = match SpdFactor::new(&neg_hess) {
            Some(f) => f,
            None if accept && iterations > 0 => break,
            None => return Err(CalibrationError::RankDeficient),
        };
        let step = factor.solve(&grad);
        let mut length = 1.0;
        let (candidate, next) = loop {
            let candidate = &theta + &step * length;
            let next = evaluate(&candidate);
            if next.0 >= loglik - 1e-12 * (1.0 + loglik.abs()) || length < 1e-6 {
                break (candidate, next);
            }
            length *= 0.5;
        };
        theta = candidate;
        stalled = policy == SeparationPolicy::Accept && (next.0 - loglik).abs() <= 1e-12 * (1.0 + loglik.abs());
        loglik = next.0;
        grad = next.1;
        neg_hess = next.2;
        iterations += 1;
    }
    Ok(ImputationModel {
        kind: ImputationKind::WeightedMultinomialLogistic,
        coefficients: DMatrix::from_column_slice(k, free, theta.as_slice()),
        predictor_names: Vec::new(),
        response_name: String::new(),
        iterations,
    })
}

/// Phase-one input to an imputation model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Predictor {
    /// A proxy or phase-one covariate used as a numeric predictor.
    Column(String),
    /// Indicators for every level but the first of a proxy or phase-one covariate.
    Dummies { column: String, levels: Vec<f64> },
    /// Indicators for strata 2..J.
    StratumDummies,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    LeastSquares,
    /// Categorical covariate with the listed numeric levels; the imputed value is its expectation.
    Multinomial {
        levels: Vec<f64>,
        #[serde(default)]
        separation: SeparationPolicy,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateModel {
    pub covariate: String,
    pub kind: ModelKind,
    pub predictors: Vec<Predictor>,
}

/// One imputation model per phase-two covariate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImputationSpec {
    pub models: Vec<CovariateModel>,
}

fn column_lookup(dataset: &CohortDataset, name: &str) -> Result<Vec<f64>, CalibrationError> {
    let names = dataset.covariate_names();
    if let Some(k) = names.proxies.iter().position(|p| p == name) {
        return dataset
            .records()
            .iter()
            .map(|r| {
                r.proxies
                    .as_ref()
                    .map(|p| p[k])
                    .ok_or_else(|| CalibrationError::InvalidSpec(format!("subject {} lacks proxies", r.id)))
            })
            .collect();
    }
    if let Some(k) = names.phase1.iter().position(|p| p == name) {
        return Ok(dataset.records().iter().map(|r| r.x_phase1[k]).collect());
    }
    Err(CalibrationError::InvalidSpec(format!(
        "`{name}` is neither a proxy nor a phase-one covariate"
    )))
}

fn predictor_matrix(dataset: &CohortDataset, predictors: &[Predictor]) -> Result<(DMatrix<f64>, Vec<String>), CalibrationError> {
    let n = dataset.len();
    let mut columns: Vec<Vec<f64>> = Vec::new();
    let mut names = Vec::new();
    for predictor in predictors {
        match predictor {
            Predictor::Column(name) => {
                columns.push(column_lookup(dataset, name)?);
                names.push(name.clone());
            }
            Predictor::Dummies { column, levels } => {
                let values = column_lookup(dataset, column)?;
                for level in levels.iter().skip(1) {
                    columns.push(values.iter().map(|v| if v == level { 1.0 } else { 0.0 }).collect());
                    names.push(format!("{column}=={level}"));
                }
            }
            Predictor::StratumDummies => {
                for j in 2..=dataset.n_strata() {
                    columns.push(dataset.records().iter().map(|r| if r.stratum == j { 1.0 } else { 0.0 }).collect());
                    names.push(format!("stratum=={j}"));
                }
            }
        }
    }
    let mut x = DMatrix::<f64>::zeros(n, columns.len());
    for (c, column) in columns.iter().enumerate() {
        x.set_column(c, &DVector::from_column_slice(column));
    }
    Ok((x, names))
}

/// Auxiliary variables of both calibration stages and the intermediate fits.
#[derive(Debug, Clone)]
pub struct AuxiliaryPipeline {
    pub stage1: AuxiliaryMatrix,
    pub stage2: AuxiliaryMatrix,
    pub models: Vec<ImputationModel>,
    /// Model covariates (phase one then phase two) with phase-two values imputed for everyone.
    pub imputed_covariates: DMatrix<f64>,
    pub imputed_fit: FitResult,
    pub stage1_calibration: CalibrationResult,
    pub stage1_fit: FitResult,
}

/// Time at risk inside `(tau1, tau2]`.
pub fn follow_up_in_interval(entry: f64, exit: f64, tau1: f64, tau2: f64) -> f64 {
    (exit.min(tau2) - entry.max(tau1)).max(0.0)
}

/// Imputes phase-two covariates for the whole cohort and builds the two auxiliary matrices.
pub fn build_auxiliaries(
    dataset: &CohortDataset,
    p2: &PhaseTwoDesign,
    spec: &ImputationSpec,
    intervals: &[(f64, f64)],
    solver: &SolverControls,
    controls: &CalibrationControls,
) -> Result<AuxiliaryPipeline, CalibrationError> {
    let n = dataset.len();
    let names = dataset.covariate_names();
    let p1 = names.phase1.len();
    let p = dataset.n_covariates();
    let base: Vec<f64> = (0..n).map(|i| p2.sampling_weight(i)).collect();
    let mut imputed = DMatrix::<f64>::zeros(n, p);
    for (i, r) in dataset.records().iter().enumerate() {
        for (c, v) in r.x_phase1.iter().enumerate() {
            imputed[(i, c)] = *v;
        }
    }
    let mut models = Vec::new();
    for (k, covariate) in names.phase2.iter().enumerate() {
        let model_spec = spec
            .models
            .iter()
            .find(|m| &m.covariate == covariate)
            .ok_or_else(|| CalibrationError::InvalidSpec(format!("no imputation model for `{covariate}`")))?;
        let (x, predictor_names) = predictor_matrix(dataset, &model_spec.predictors)?;
        // Fit on phase-two subjects with measured values.
        let mut weights = vec![0.0; n];
        let mut response = vec![0.0; n];
        for (i, r) in dataset.records().iter().enumerate() {
            if let (true, Some(values)) = (base[i] > 0.0, r.x_phase2.as_ref()) {
                weights[i] = base[i];
                response[i] = values[k];
            }
        }
        let mut model = match &model_spec.kind {
            ModelKind::LeastSquares => fit_wls(&x, &DVector::from_vec(response), &weights)?,
            ModelKind::Multinomial { levels, separation } => {
                let mut categories = vec![0usize; n];
                for i in 0..n {
                    if weights[i] > 0.0 {
                        categories[i] = levels.iter().position(|l| *l == response[i]).ok_or_else(|| {
                            CalibrationError::InvalidSpec(format!(
                                "`{covariate}` value {} is not a declared level",
                                response[i]
                            ))
                        })?;
                    }
                }
                fit_wmultinomial_with(&x, &categories, &weights, levels.len(), *separation)?
            }
        };
        model.predictor_names = predictor_names;
        model.response_name = covariate.clone();
        for i in 0..n {
            let row: Vec<f64> = x.row(i).iter().copied().collect();
            imputed[(i, p1 + k)] = match &model_spec.kind {
                ModelKind::LeastSquares => model.predict(&row),
                ModelKind::Multinomial { levels, .. } => model
                    .probabilities(&row)
                    .iter()
                    .zip(levels)
                    .map(|(pr, l)| pr * l)
                    .sum(),
            };
        }
        models.push(model);
    }

    let cohort = WeightedSample::with_covariates(dataset, imputed.clone(), vec![true; n], vec![1.0; n])?;
    let imputed_fit = fit_cox(&cohort, solver)?;
    let cohort_influence = InfluenceWorkspace::new(&cohort, &imputed_fit)?.beta(&Regime::FullCohort)?;
    let model_names = names.model_order();
    let influence_names: Vec<String> = model_names.iter().map(|c| format!("influence_{c}")).collect();
    let stage1 = AuxiliaryMatrix::constant(n).extended(&cohort_influence.total, &influence_names)?;

    let stage1_calibration = rake_to_totals(&base, &stage1.values, &stage1.cohort_totals(), controls)?;
    let phase2_sample = WeightedSample::new(dataset, p2.sampled.clone(), stage1_calibration.calibrated_weight.clone())?;
    let stage1_fit = fit_cox(&phase2_sample, solver)?;

    let mut extra = DMatrix::<f64>::zeros(n, intervals.len());
    let mut extra_names = Vec::new();
    for (c, &(tau1, tau2)) in intervals.iter().enumerate() {
        for (i, r) in dataset.records().iter().enumerate() {
            let lp: f64 = (0..p).map(|k| imputed[(i, k)] * stage1_fit.beta_hat[k]).sum();
            extra[(i, c)] = follow_up_in_interval(r.entry_time, r.exit_time, tau1, tau2) * lp.exp();
        }
        extra_names.push(format!("followup_hazard({tau1},{tau2}]"));
    }
    let stage2 = stage1.extended(&extra, &extra_names)?;
    Ok(AuxiliaryPipeline {
        stage1,
        stage2,
        models,
        imputed_covariates: imputed,
        imputed_fit,
        stage1_calibration,
        stage1_fit,
    })
}
