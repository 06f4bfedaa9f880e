//! Finite-difference refit oracle for per-subject influences.

use casecohort::calibration::{rake_to_totals, AuxiliaryMatrix, CalibrationControls};
use casecohort::coxfit::{breslow, fit_cox, pure_risk, RiskSetPolicy, SolverControls, WeightedSample};
use casecohort::dataset::CohortDataset;
use casecohort::design::{estimate_phase3_weights, PhaseThreeDesign, PhaseTwoDesign};
use casecohort::influence::{influence_eta, influence_gamma, influence_pure_risk, InfluenceWorkspace, Regime};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const EPS: f64 = 1e-6;
pub const REL_TOL: f64 = 1e-4;

pub fn tight() -> SolverControls {
    SolverControls {
        score_tolerance: 1e-13,
        ..SolverControls::default()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OracleRegime {
    FullCohort,
    Design,
    Calibrated,
    ThreePhaseEstimated,
    ThreePhaseKnown,
}

/// Everything needed to re-estimate under perturbed subject multiplicities.
pub struct Problem<'a> {
    pub dataset: &'a CohortDataset,
    pub regime: OracleRegime,
    pub phase2: PhaseTwoDesign,
    pub phase3: Option<PhaseThreeDesign>,
    pub aux: Option<AuxiliaryMatrix>,
    pub tau1: f64,
    pub tau2: f64,
    pub profile: Vec<f64>,
}

fn base_weights(problem: &Problem) -> (Vec<bool>, Vec<f64>) {
    let n = problem.dataset.len();
    match problem.regime {
        OracleRegime::FullCohort => (vec![true; n], vec![1.0; n]),
        OracleRegime::Design | OracleRegime::Calibrated => (problem.phase2.sampled.clone(), problem.phase2.weight.clone()),
        OracleRegime::ThreePhaseEstimated | OracleRegime::ThreePhaseKnown => {
            let p3 = problem.phase3.as_ref().unwrap();
            let active = (0..n).map(|i| problem.phase2.sampled[i] && p3.observed[i]).collect();
            let weight = (0..n).map(|i| problem.phase2.weight[i] * p3.est_weight[i]).collect();
            (active, weight)
        }
    }
}

/// Stacked estimate `(β, interval mass, pure risk, η or γ)` with phase-a offsets `a` and phase-b offsets `b`.
///
/// Phase a: the cohort total of the auxiliaries (calibrated), the phase-two term of the
/// weight equation and the event multiplicity (three-phase). Phase b: the fit weight,
/// plus the event multiplicity in the two-phase regimes.
pub fn estimate(problem: &Problem, a: &[f64], b: &[f64]) -> Vec<f64> {
    let dataset = problem.dataset;
    let n = dataset.len();
    let (active, mut weight) = base_weights(problem);
    let mut mass = vec![1.0; n];
    let mut extra = Vec::new();
    match problem.regime {
        OracleRegime::FullCohort | OracleRegime::Design => {
            for i in 0..n {
                weight[i] *= 1.0 + b[i];
                mass[i] = 1.0 + b[i];
            }
        }
        OracleRegime::Calibrated => {
            let aux = problem.aux.as_ref().unwrap();
            let q = aux.values.ncols();
            let mut totals = DVector::<f64>::zeros(q);
            for i in 0..n {
                totals += aux.values.row(i).transpose() * (1.0 + a[i]);
            }
            let base: Vec<f64> = (0..n)
                .map(|i| if active[i] { weight[i] * (1.0 + b[i]) } else { 0.0 })
                .collect();
            let controls = CalibrationControls {
                tolerance: 1e-14,
                ..CalibrationControls::default()
            };
            let cal = rake_to_totals(&base, &aux.values, &totals, &controls).unwrap();
            for i in 0..n {
                weight[i] = cal.calibrated_weight[i];
                mass[i] = 1.0 + b[i];
            }
            extra.extend(cal.eta_hat.iter().copied());
        }
        OracleRegime::ThreePhaseEstimated => {
            let p3 = problem.phase3.as_ref().unwrap();
            let strata = p3.n_strata3();
            let mut num = vec![0.0; strata];
            let mut den = vec![0.0; strata];
            for i in 0..n {
                if problem.phase2.sampled[i] {
                    let s = p3.stratum3[i] - 1;
                    num[s] += 1.0 + a[i];
                    if p3.observed[i] {
                        den[s] += 1.0 + b[i];
                    }
                }
            }
            let gamma: Vec<f64> = (0..strata).map(|s| (num[s] / den[s]).ln()).collect();
            for i in 0..n {
                weight[i] = problem.phase2.weight[i] * gamma[p3.stratum3[i] - 1].exp() * (1.0 + b[i]);
                mass[i] = 1.0 + a[i];
            }
            extra.extend(gamma);
        }
        OracleRegime::ThreePhaseKnown => {
            for i in 0..n {
                weight[i] *= 1.0 + b[i];
                mass[i] = 1.0 + a[i];
            }
        }
    }
    let sample = WeightedSample::new(dataset, active, weight).unwrap().with_event_mass(mass);
    let fit = fit_cox(&sample, &tight()).unwrap();
    let hazard = breslow(&sample, &fit.beta_hat, RiskSetPolicy::DropWithWarning).unwrap();
    let risk = pure_risk(&fit.beta_hat, &hazard, problem.tau1, problem.tau2, &problem.profile).unwrap();
    let mut out: Vec<f64> = fit.beta_hat.iter().copied().collect();
    out.push(risk.hazard_mass);
    out.push(risk.value);
    out.extend(extra);
    out
}

/// Analytic influences split into the phase-a and phase-b parts, stacked like `estimate`.
pub fn analytic(problem: &Problem) -> (DMatrix<f64>, DMatrix<f64>) {
    let dataset = problem.dataset;
    let n = dataset.len();
    let (active, weight) = base_weights(problem);
    let calibration;
    let fit_weight = match problem.regime {
        OracleRegime::Calibrated => {
            let aux = problem.aux.as_ref().unwrap();
            let base: Vec<f64> = (0..n).map(|i| if active[i] { weight[i] } else { 0.0 }).collect();
            calibration = Some(rake_to_totals(&base, &aux.values, &aux.cohort_totals(), &CalibrationControls::default()).unwrap());
            calibration.as_ref().unwrap().calibrated_weight.clone()
        }
        _ => {
            calibration = None;
            weight.clone()
        }
    };
    let sample = WeightedSample::new(dataset, active, fit_weight).unwrap();
    let fit = fit_cox(&sample, &tight()).unwrap();
    let hazard = breslow(&sample, &fit.beta_hat, RiskSetPolicy::DropWithWarning).unwrap();
    let regime = match problem.regime {
        OracleRegime::FullCohort => Regime::FullCohort,
        OracleRegime::Design => Regime::Design,
        OracleRegime::Calibrated => Regime::Calibrated {
            design: &problem.phase2,
            aux: problem.aux.as_ref().unwrap(),
            calibration: calibration.as_ref().unwrap(),
        },
        OracleRegime::ThreePhaseEstimated => Regime::ThreePhaseEstimated {
            phase2: &problem.phase2,
            phase3: problem.phase3.as_ref().unwrap(),
        },
        OracleRegime::ThreePhaseKnown => Regime::ThreePhaseKnown {
            phase2: &problem.phase2,
            phase3: problem.phase3.as_ref().unwrap(),
        },
    };
    let ws = InfluenceWorkspace::new(&sample, &fit).unwrap();
    let beta = ws.beta(&regime).unwrap();
    let mass = ws.hazard_interval(&regime, &hazard, problem.tau1, problem.tau2).unwrap();
    let risk = influence_pure_risk(&beta, &mass, &fit.beta_hat, &hazard, problem.tau1, problem.tau2, &problem.profile).unwrap();
    let mut sets = vec![beta, mass, risk];
    match problem.regime {
        OracleRegime::Calibrated => sets.push(
            influence_eta(&problem.phase2, problem.aux.as_ref().unwrap(), calibration.as_ref().unwrap(), &sample).unwrap(),
        ),
        OracleRegime::ThreePhaseEstimated => {
            sets.push(influence_gamma(&problem.phase2, problem.phase3.as_ref().unwrap()).unwrap())
        }
        _ => {}
    }
    let d: usize = sets.iter().map(|s| s.dim()).sum();
    let mut part_a = DMatrix::<f64>::zeros(n, d);
    let mut part_b = DMatrix::<f64>::zeros(n, d);
    let mut col = 0;
    for set in &sets {
        for c in 0..set.dim() {
            for i in 0..n {
                let (a, b) = match problem.regime {
                    OracleRegime::FullCohort | OracleRegime::Design => (0.0, set.total[(i, c)]),
                    OracleRegime::Calibrated => (set.phase1[(i, c)], set.total[(i, c)] - set.phase1[(i, c)]),
                    OracleRegime::ThreePhaseEstimated => {
                        let p3 = problem.phase3.as_ref().unwrap();
                        (set.phase2[(i, c)], p3.est_weight[i] * set.phase3[(i, c)])
                    }
                    OracleRegime::ThreePhaseKnown => (set.phase2[(i, c)], sample.omega(i) * set.phase3[(i, c)]),
                };
                part_a[(i, col)] = a;
                part_b[(i, col)] = b;
            }
            col += 1;
        }
    }
    (part_a, part_b)
}

/// Largest relative error between analytic and central-difference influences.
pub fn max_relative_error(problem: &Problem) -> f64 {
    let n = problem.dataset.len();
    let (part_a, part_b) = analytic(problem);
    let d = part_a.ncols();
    let mut worst = 0.0f64;
    for (which, part) in [(0, &part_a), (1, &part_b)] {
        let scale: Vec<f64> = (0..d)
            .map(|c| part.column(c).iter().fold(0.0f64, |m, v| m.max(v.abs())))
            .collect();
        for i in 0..n {
            let mut plus = (vec![0.0; n], vec![0.0; n]);
            let mut minus = (vec![0.0; n], vec![0.0; n]);
            if which == 0 {
                plus.0[i] = EPS;
                minus.0[i] = -EPS;
            } else {
                plus.1[i] = EPS;
                minus.1[i] = -EPS;
            }
            let up = estimate(problem, &plus.0, &plus.1);
            let down = estimate(problem, &minus.0, &minus.1);
            for c in 0..d {
                let numeric = (up[c] - down[c]) / (2.0 * EPS);
                let exact = part[(i, c)];
                let floor = (1e-3 * scale[c]).max(1e-9);
                let err = (numeric - exact).abs() / exact.abs().max(numeric.abs()).max(floor);
                if err > worst && std::env::var("ORACLE_DEBUG").is_ok() {
                    eprintln!("part {which} subject {i} component {c}: numeric {numeric:e} analytic {exact:e}");
                }
                worst = worst.max(err);
            }
        }
    }
    worst
}

/// Random problem for `regime` on a cohort of `n` subjects with `p` covariates.
pub fn random_problem(dataset: &CohortDataset, regime: OracleRegime, seed: u64) -> Problem<'_> {
    let n = dataset.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let phase2 = match regime {
        OracleRegime::FullCohort => PhaseTwoDesign::full_cohort(dataset),
        _ => super::random_design(dataset, seed, (n / dataset.n_strata()) / 2),
    };
    let mut times: Vec<f64> = dataset.records().iter().filter(|r| r.status).map(|r| r.exit_time).collect();
    times.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let tau2 = times[times.len() / 2];
    let p = dataset.n_covariates();
    let profile: Vec<f64> = (0..p).map(|k| if k % 2 == 0 { 0.5 } else { -0.3 }).collect();
    let mut phase3 = None;
    if matches!(regime, OracleRegime::ThreePhaseEstimated | OracleRegime::ThreePhaseKnown) {
        let stratum3: Vec<usize> = dataset.records().iter().map(|r| if r.status { 2 } else { 1 }).collect();
        let observed: Vec<bool> = (0..n).map(|i| phase2.sampled[i] && rng.random::<f64>() < 0.8).collect();
        let estimated = estimate_phase3_weights(dataset, &phase2, &stratum3, &observed).unwrap();
        phase3 = Some(if regime == OracleRegime::ThreePhaseKnown {
            let probs = (0..n).map(|i| if dataset.records()[i].status { 0.8 } else { 0.9 }).collect();
            PhaseThreeDesign::known(dataset, &phase2, &stratum3, &observed, probs).unwrap()
        } else {
            estimated
        });
    }
    let aux = if regime == OracleRegime::Calibrated {
        // Constant plus proxy-based auxiliaries.
        let mut values = DMatrix::<f64>::from_element(n, 3, 1.0);
        for (i, r) in dataset.records().iter().enumerate() {
            let proxies = r.proxies.as_ref().unwrap();
            values[(i, 1)] = proxies[0];
            values[(i, 2)] = if r.status { 1.0 } else { 0.0 } * r.exit_time.min(tau2);
        }
        Some(AuxiliaryMatrix::new(values, vec!["one".into(), "proxy".into(), "time".into()]).unwrap())
    } else {
        None
    };
    Problem {
        dataset,
        regime,
        phase2,
        phase3,
        aux,
        tau1: 0.0,
        tau2,
        profile,
    }
}
