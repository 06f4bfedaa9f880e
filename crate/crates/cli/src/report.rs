//! Delimited tables and JSON summaries.

use casecohort::analysis::{Analysis, AnalysisRegime};
use casecohort::calibration::{AuxiliaryPipeline, CalibrationResult};
use casecohort::dataset::CohortDataset;
use casecohort::design::PhaseTwoDesign;
use casecohort::influence::dump_influences;
use casecohort::simharness::ScenarioSummary;
use casecohort::variance::{confidence_interval, Transform};
use serde::Serialize;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

/// Shortest round-trip text, in exponent form for very small or large magnitudes.
pub fn num(v: f64) -> String {
    let a = v.abs();
    if v == 0.0 || !v.is_finite() || (1e-4..1e15).contains(&a) {
        format!("{v}")
    } else {
        format!("{v:e}")
    }
}

fn join(values: &[f64]) -> String {
    values.iter().map(|v| num(*v)).collect::<Vec<_>>().join("\t")
}

#[derive(Debug, Clone, Serialize)]
pub struct Interval {
    pub variance: f64,
    pub se: f64,
    pub lower: f64,
    pub upper: f64,
}

fn interval(estimate: f64, variance: f64, level: f64, transform: Transform) -> Interval {
    match confidence_interval(estimate, variance, level, transform) {
        Ok(ci) => Interval {
            variance,
            se: ci.se,
            lower: ci.lower,
            upper: ci.upper,
        },
        Err(_) => Interval {
            variance,
            se: f64::NAN,
            lower: f64::NAN,
            upper: f64::NAN,
        },
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CoefficientRow {
    pub name: String,
    pub estimate: f64,
    pub decomposed: Interval,
    pub robust: Interval,
}

#[derive(Debug, Clone, Serialize)]
pub struct RiskRow {
    pub tau1: f64,
    pub tau2: f64,
    pub x: Vec<f64>,
    pub estimate: f64,
    pub hazard_mass: f64,
    /// Log-scale intervals.
    pub decomposed: Interval,
    pub robust: Interval,
}

#[derive(Debug, Clone, Serialize)]
pub struct CalibrationSummary {
    pub eta: Vec<f64>,
    pub residual_norm: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct FitReport {
    pub regime: AnalysisRegime,
    pub variance_label: &'static str,
    pub level: f64,
    pub n: usize,
    pub n_events: usize,
    pub n_phase2: usize,
    pub converged: bool,
    pub iterations: usize,
    pub score_norm: f64,
    pub loglik: f64,
    pub coefficients: Vec<CoefficientRow>,
    pub pure_risks: Vec<RiskRow>,
    pub dropped_time_warnings: usize,
    pub negative_variance_diagonal: bool,
    pub calibration: Option<CalibrationSummary>,
}

fn variance_label(regime: AnalysisRegime) -> &'static str {
    match regime {
        AnalysisRegime::FullCohort => "full cohort",
        AnalysisRegime::Design => "superpopulation + phase two (design weights)",
        AnalysisRegime::Calibrated => "superpopulation + phase two (calibrated weights)",
        AnalysisRegime::ThreePhaseEstimated => "superpopulation + phase two + phase three (estimated weights)",
        AnalysisRegime::ThreePhaseKnown => "collapsed two-phase (known phase-three weights)",
    }
}

impl FitReport {
    pub fn new(
        dataset: &CohortDataset,
        phase2: &PhaseTwoDesign,
        analysis: &Analysis,
        level: f64,
    ) -> std::io::Result<Self> {
        let names = dataset.covariate_names().model_order();
        let coefficients = names
            .iter()
            .enumerate()
            .map(|(c, name)| {
                let estimate = analysis.fit.beta_hat[c];
                let (v, r) = analysis.beta.variances(c);
                CoefficientRow {
                    name: name.clone(),
                    estimate,
                    decomposed: interval(estimate, v, level, Transform::Identity),
                    robust: interval(estimate, r, level, Transform::Identity),
                }
            })
            .collect();
        let pure_risks = analysis
            .risks
            .iter()
            .map(|r| {
                let (v, rv) = r.report.variances(0);
                RiskRow {
                    tau1: r.risk.tau1,
                    tau2: r.risk.tau2,
                    x: r.risk.x_profile.clone(),
                    estimate: r.risk.value,
                    hazard_mass: r.risk.hazard_mass,
                    decomposed: interval(r.risk.value, v, level, Transform::Log),
                    robust: interval(r.risk.value, rv, level, Transform::Log),
                }
            })
            .collect();
        Ok(Self {
            regime: analysis.regime,
            variance_label: variance_label(analysis.regime),
            level,
            n: dataset.len(),
            n_events: dataset.n_events(),
            n_phase2: phase2.n_sampled(),
            converged: analysis.fit.converged,
            iterations: analysis.fit.iterations,
            score_norm: analysis.fit.score_norm,
            loglik: analysis.fit.loglik,
            coefficients,
            pure_risks,
            dropped_time_warnings: analysis.hazard.warning_count(),
            negative_variance_diagonal: analysis.beta.negative_diagonal
                || analysis.risks.iter().any(|r| r.report.negative_diagonal),
            calibration: analysis.calibration.as_ref().map(|c| CalibrationSummary {
                eta: c.eta_hat.iter().copied().collect(),
                residual_norm: c.residual_norm(),
                iterations: c.iterations,
            }),
        })
    }

    fn write_coefficients<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        writeln!(out, "covariate\testimate\tvariance\tse\tlower\tupper\trobust_variance\trobust_se\trobust_lower\trobust_upper")?;
        for r in &self.coefficients {
            let values = [
                r.estimate,
                r.decomposed.variance,
                r.decomposed.se,
                r.decomposed.lower,
                r.decomposed.upper,
                r.robust.variance,
                r.robust.se,
                r.robust.lower,
                r.robust.upper,
            ];
            writeln!(out, "{}\t{}", r.name, join(&values))?;
        }
        Ok(())
    }

    fn write_risks<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        writeln!(out, "tau1\ttau2\tprofile\tpure_risk\thazard_mass\tvariance\tse_log\tlower\tupper\trobust_variance\trobust_se_log\trobust_lower\trobust_upper")?;
        for r in &self.pure_risks {
            let x: Vec<String> = r.x.iter().map(|v| num(*v)).collect();
            let values = [
                r.estimate,
                r.hazard_mass,
                r.decomposed.variance,
                r.decomposed.se,
                r.decomposed.lower,
                r.decomposed.upper,
                r.robust.variance,
                r.robust.se,
                r.robust.lower,
                r.robust.upper,
            ];
            writeln!(out, "{}\t{}\t{}\t{}", num(r.tau1), num(r.tau2), x.join(","), join(&values))?;
        }
        Ok(())
    }

    pub fn print<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        writeln!(out, "# regime: {:?}; variance: {}", self.regime, self.variance_label)?;
        writeln!(
            out,
            "# n = {}, events = {}, phase two = {}, iterations = {}",
            self.n, self.n_events, self.n_phase2, self.iterations
        )?;
        if self.dropped_time_warnings > 0 {
            writeln!(out, "# warning: {} event times had an empty risk set", self.dropped_time_warnings)?;
        }
        if self.negative_variance_diagonal {
            writeln!(out, "# warning: a phase-decomposed variance is negative")?;
        }
        self.write_coefficients(out)?;
        if !self.pure_risks.is_empty() {
            writeln!(out)?;
            self.write_risks(out)?;
        }
        Ok(())
    }

    pub fn write_all(&self, dir: &Path, dataset: &CohortDataset, analysis: &Analysis) -> std::io::Result<()> {
        let mut beta = BufWriter::new(File::create(dir.join("beta.tsv"))?);
        self.write_coefficients(&mut beta)?;
        beta.flush()?;
        let mut risks = BufWriter::new(File::create(dir.join("pure_risk.tsv"))?);
        self.write_risks(&mut risks)?;
        risks.flush()?;
        let mut hazard = BufWriter::new(File::create(dir.join("baseline_hazard.tsv"))?);
        writeln!(hazard, "time\tincrement\tcumulative\tevents")?;
        let mut cumulative = 0.0;
        for k in 0..analysis.hazard.event_times.len() {
            cumulative += analysis.hazard.increments[k];
            let values = [analysis.hazard.event_times[k], analysis.hazard.increments[k], cumulative];
            writeln!(hazard, "{}\t{}", join(&values), analysis.hazard.numerator_counts[k])?;
        }
        hazard.flush()?;
        let mut sets = vec![&analysis.beta_influence];
        sets.extend(analysis.risks.iter().map(|r| &r.influence));
        dump_influences(File::create(dir.join("influences.csv"))?, dataset, &sets)
            .map_err(|e| std::io::Error::other(e.to_string()))?;
        write_json(&dir.join("summary.json"), self)
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> std::io::Result<()> {
    let mut file = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut file, value).map_err(std::io::Error::other)?;
    writeln!(file)?;
    file.flush()
}

#[derive(Debug, Serialize)]
struct CalibrationReport<'a> {
    auxiliaries: &'a [String],
    eta: Vec<f64>,
    residual_norm: f64,
    iterations: usize,
    converged: bool,
    imputation_models: Vec<ModelReport>,
}

#[derive(Debug, Serialize)]
struct ModelReport {
    response: String,
    predictors: Vec<String>,
    /// One column per non-baseline category, intercept first.
    coefficients: Vec<Vec<f64>>,
}

/// Writes weights, auxiliaries and a JSON summary; returns the summary text.
pub fn write_calibration(
    dir: &Path,
    dataset: &CohortDataset,
    phase2: &PhaseTwoDesign,
    pipeline: &AuxiliaryPipeline,
    result: &CalibrationResult,
) -> std::io::Result<String> {
    let mut weights = BufWriter::new(File::create(dir.join("calibrated_weights.csv"))?);
    writeln!(weights, "id,sampled,design_weight,calibrated_weight")?;
    for (i, r) in dataset.records().iter().enumerate() {
        writeln!(
            weights,
            "{},{},{},{}",
            r.id,
            u8::from(phase2.sampled[i]),
            num(phase2.sampling_weight(i)),
            num(result.calibrated_weight[i])
        )?;
    }
    weights.flush()?;
    let aux = &pipeline.stage2;
    let mut table = BufWriter::new(File::create(dir.join("auxiliaries.csv"))?);
    writeln!(table, "id,{}", aux.column_names.join(","))?;
    for (i, r) in dataset.records().iter().enumerate() {
        let row: Vec<String> = aux.values.row(i).iter().map(|v| num(*v)).collect();
        writeln!(table, "{},{}", r.id, row.join(","))?;
    }
    table.flush()?;
    let report = CalibrationReport {
        auxiliaries: &aux.column_names,
        eta: result.eta_hat.iter().copied().collect(),
        residual_norm: result.residual_norm(),
        iterations: result.iterations,
        converged: result.converged,
        imputation_models: pipeline
            .models
            .iter()
            .map(|m| ModelReport {
                response: m.response_name.clone(),
                predictors: m.predictor_names.clone(),
                coefficients: m.coefficients.column_iter().map(|c| c.iter().copied().collect()).collect(),
            })
            .collect(),
    };
    write_json(&dir.join("calibration.json"), &report)?;
    serde_json::to_string_pretty(&report).map_err(std::io::Error::other)
}

pub fn write_scenario(dir: &Path, summary: &ScenarioSummary) -> std::io::Result<()> {
    let mut table = BufWriter::new(File::create(dir.join("summary.tsv"))?);
    summary.write_table(&mut table)?;
    table.flush()?;
    write_json(&dir.join("summary.json"), summary)
}
