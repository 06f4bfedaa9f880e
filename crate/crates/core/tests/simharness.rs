mod common;

use casecohort::analysis::RiskQuery;
use casecohort::dataset::CohortDataset;
use casecohort::design::{DesignError, PhaseTwoDesign};
use casecohort::simharness::{
    categorical_proxy, run_scenario, sample_phase2, sample_phase3, simulate_cohort, unstratified, Covariates, Phase3Probs, Prepass,
    ScenarioConfig, ScenarioContext, ScenarioRegime, SimError, Truth, FOLLOW_UP_YEARS, TRUE_BETA,
};
use common::{assert_close, names, record};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};

fn small_config() -> ScenarioConfig {
    ScenarioConfig {
        n: 800,
        p_event: 0.1,
        k: 2,
        seed: 11,
        replicates: 4,
        regimes: vec![ScenarioRegime::Cohort, ScenarioRegime::Scc, ScenarioRegime::SccCalib, ScenarioRegime::Uscc],
        prepass_draws: 20_000,
        ..ScenarioConfig::default()
    }
}

fn flat_prepass() -> Prepass {
    Prepass {
        baseline_hazard: 0.01,
        mean_relative_hazard: 1.0,
        stratum_probability: [0.25; 4],
        stratum_relative_hazard: [1.0; 4],
    }
}

#[test]
fn subcohort_size_arithmetic() {
    // Ten-year risk 0.1, so odds 1/9, and 1000 expected subjects per stratum.
    let prepass = flat_prepass();
    assert_eq!(prepass.subcohort_sizes(4000, 2, true), vec![222; 4]);
    assert_eq!(prepass.subcohort_sizes(4000, 2, false), vec![889]);
    assert_eq!(prepass.subcohort_sizes(4000, 4, true), vec![444; 4]);
}

#[test]
fn default_prepass_matches_reference_scenario() {
    let cfg = ScenarioConfig::default();
    let context = ScenarioContext::new(&cfg);
    assert!((context.prepass.baseline_hazard - 0.0012963).abs() < 2e-5, "{}", context.prepass.baseline_hazard);
    let total: f64 = context.prepass.stratum_probability.iter().sum();
    assert_close(total, 1.0, 1e-12);
    assert_eq!(context.stratified_sizes, vec![51, 122, 118, 118]);
    assert_eq!(context.unstratified_sizes, vec![408]);
}

#[test]
fn ten_year_risk_matches_target() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let p_event = 0.02;
    let prepass = Prepass::estimate(p_event, 200_000, &mut rng);
    let draws = 1_000_000;
    let mut events = 0usize;
    for _ in 0..draws {
        let x = Covariates::draw(&mut rng);
        let t: f64 = Exp::new(prepass.baseline_hazard * x.relative_hazard()).unwrap().sample(&mut rng);
        events += (t <= FOLLOW_UP_YEARS) as usize;
    }
    let fraction = events as f64 / draws as f64;
    let se = (p_event * (1.0 - p_event) / draws as f64).sqrt();
    assert!((fraction - p_event).abs() <= 3.0 * se, "fraction {fraction}, se {se}");
}

#[test]
fn covariate_strata_partition() {
    let cases = [
        (0.5, 0, 0),
        (-0.5, 0, 1),
        (-0.5, 1, 1),
        (0.5, 1, 2),
        (0.5, 2, 2),
        (-0.5, 2, 3),
        (0.0, 0, 0),
    ];
    for (x1, x2, w) in cases {
        assert_eq!(Covariates { x1, x2, x3: 0.0 }.stratum(), w, "x1 {x1}, x2 {x2}");
    }
}

#[test]
fn categorical_proxy_bands() {
    for x2 in 0..3 {
        assert_eq!(categorical_proxy(x2, 0.5), x2);
        assert_eq!(categorical_proxy(x2, 0.1), x2);
        assert_eq!(categorical_proxy(x2, 0.9), x2);
        let low = categorical_proxy(x2, 0.05);
        let high = categorical_proxy(x2, 0.95);
        assert_ne!(low, x2);
        assert_ne!(high, x2);
        assert_ne!(low, high);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let draws = 100_000;
    let agree = (0..draws).filter(|i| categorical_proxy(i % 3, rng.random()) == i % 3).count() as f64 / draws as f64;
    let se = (0.8 * 0.2 / draws as f64).sqrt();
    assert!((agree - 0.8).abs() <= 3.0 * se, "agreement {agree}");
}

#[test]
fn fixed_seed_reproduces_the_cohort() {
    let cfg = small_config();
    let prepass = ScenarioContext::new(&cfg).prepass;
    let (a, truth_a) = simulate_cohort(&cfg, &prepass, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let (b, truth_b) = simulate_cohort(&cfg, &prepass, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    assert_eq!(a, b);
    assert_eq!(truth_a, truth_b);
    let (c, _) = simulate_cohort(&cfg, &prepass, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    assert_ne!(a, c);
    assert_eq!(a.len(), cfg.n);
    assert!(a.records().iter().all(|r| r.exit_time > 0.0 && r.exit_time <= FOLLOW_UP_YEARS));
    assert!(a.records().iter().all(|r| r.stratum == r.proxies.as_ref().unwrap()[3] as usize + 1));
    let flat = unstratified(&a).unwrap();
    assert_eq!(flat.n_strata(), 1);
    assert_eq!(flat.n_events(), a.n_events());
}

#[test]
fn truth_record_closed_form() {
    let profiles = vec![RiskQuery {
        tau1: 2.0,
        tau2: 7.0,
        x: vec![1.0, 2.0, -1.0],
    }];
    let truth = Truth::new(0.003, &profiles);
    let lp = TRUE_BETA[0] + 2.0 * TRUE_BETA[1] - TRUE_BETA[2];
    assert_close(truth.pure_risks[0], 1.0 - (-lp.exp() * 0.003 * 5.0).exp(), 1e-15);
    let params = truth.parameters();
    assert_eq!(&params[..3], &TRUE_BETA);
    assert_close(params[3], truth.pure_risks[0].ln(), 1e-15);
}

fn single_stratum(n_cases: usize, n_non_cases: usize) -> CohortDataset {
    let records = (0..n_cases + n_non_cases)
        .map(|i| record(&format!("s{i}"), 1.0 + i as f64, i < n_cases, &[0.0]))
        .collect();
    CohortDataset::new(records, names(1)).unwrap()
}

#[test]
fn pair_inclusion_frequency() {
    let data = single_stratum(0, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let draws = 40_000;
    let mut both = 0usize;
    for _ in 0..draws {
        let design = sample_phase2(&data, &[3], &mut rng).unwrap();
        assert_eq!(design.n_sampled(), 3);
        both += (design.sampled[2] && design.sampled[5]) as usize;
    }
    let expected = 3.0 * 2.0 / (8.0 * 7.0);
    let freq = both as f64 / draws as f64;
    let se = (expected * (1.0 - expected) / draws as f64).sqrt();
    assert!((freq - expected).abs() <= 3.0 * se, "frequency {freq}, expected {expected}");
}

#[test]
fn all_case_cohort_gets_unit_weights() {
    let data = single_stratum(5, 0);
    let design = sample_phase2(&data, &[0], &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    assert!(design.sampled.iter().all(|&s| s));
    assert!(design.weight.iter().all(|&w| w == 1.0));
}

#[test]
fn oversized_subcohort_is_rejected() {
    let data = single_stratum(1, 3);
    let err = sample_phase2(&data, &[5], &mut ChaCha8Rng::seed_from_u64(1)).unwrap_err();
    assert_eq!(err, DesignError::StratumTooSmall(1));
}

#[test]
fn phase_three_fractions() {
    let n = 100_000;
    let data = single_stratum(30_000, n - 30_000);
    let p2 = PhaseTwoDesign::full_cohort(&data);
    let probs = Phase3Probs { case: 0.8, non_case: 0.9 };
    let p3 = sample_phase3(&p2, &data, probs, false, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    assert!(p3.is_estimated());
    for (status, p) in [(true, 0.8), (false, 0.9)] {
        let group: Vec<usize> = (0..n).filter(|&i| data.records()[i].status == status).collect();
        let frac = group.iter().filter(|&&i| p3.observed[i]).count() as f64 / group.len() as f64;
        let se = (p * (1.0 - p) / group.len() as f64).sqrt();
        assert!((frac - p).abs() <= 3.0 * se, "status {status}: {frac}");
    }

    let known = sample_phase3(&p2, &data, probs, true, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    assert!(!known.is_estimated());
    assert_eq!(known.observed, p3.observed);
    assert_close(known.est_weight[0], 1.25, 1e-15);
}

#[test]
fn certain_phase_three_observes_the_phase_two_sample() {
    let data = single_stratum(3, 12);
    let p2 = sample_phase2(&data, &[4], &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
    let probs = Phase3Probs { case: 1.0, non_case: 1.0 };
    let p3 = sample_phase3(&p2, &data, probs, false, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
    assert_eq!(p3.observed, p2.sampled);
    assert!(p3.est_weight.iter().all(|&w| w == 1.0));
}

#[test]
fn configuration_validation() {
    assert!(ScenarioConfig::default().validate().is_ok());
    let invalid = [
        ScenarioConfig { replicates: 0, ..small_config() },
        ScenarioConfig { p_event: 1.0, ..small_config() },
        ScenarioConfig { p_event: 0.0, ..small_config() },
        ScenarioConfig { k: 0, ..small_config() },
        ScenarioConfig { regimes: vec![], ..small_config() },
        ScenarioConfig {
            pure_risk_profiles: vec![RiskQuery { tau1: 0.0, tau2: 11.0, x: vec![0.0; 3] }],
            ..small_config()
        },
        ScenarioConfig {
            pure_risk_profiles: vec![RiskQuery { tau1: 0.0, tau2: 5.0, x: vec![0.0; 2] }],
            ..small_config()
        },
        ScenarioConfig { regimes: vec![ScenarioRegime::SccEst], ..small_config() },
        ScenarioConfig {
            phase3_probs: Some(Phase3Probs { case: 0.0, non_case: 0.9 }),
            ..small_config()
        },
    ];
    for cfg in invalid {
        assert!(matches!(cfg.validate(), Err(SimError::InvalidConfig(_))), "{cfg:?}");
        assert!(run_scenario(&cfg).is_err());
    }
}

#[test]
fn regime_names_round_trip() {
    for regime in ScenarioRegime::ALL {
        assert_eq!(regime.label().parse::<ScenarioRegime>().unwrap(), regime);
    }
    assert_eq!("scc.calib".parse::<ScenarioRegime>().unwrap(), ScenarioRegime::SccCalib);
    assert!(matches!("SCC.Magic".parse::<ScenarioRegime>(), Err(SimError::UnknownRegime(..))));
}

#[test]
fn small_scenario_is_deterministic_and_well_formed() {
    let cfg = ScenarioConfig {
        regimes: vec![
            ScenarioRegime::Cohort,
            ScenarioRegime::Scc,
            ScenarioRegime::SccCalib,
            ScenarioRegime::Uscc,
            ScenarioRegime::SccEst,
            ScenarioRegime::SccTrue,
            ScenarioRegime::SccNaive,
        ],
        phase3_probs: Some(Phase3Probs { case: 0.8, non_case: 0.9 }),
        ..small_config()
    };
    let a = run_scenario(&cfg).unwrap();
    let b = run_scenario(&cfg).unwrap();
    let mut ta = Vec::new();
    let mut tb = Vec::new();
    a.write_table(&mut ta).unwrap();
    b.write_table(&mut tb).unwrap();
    assert_eq!(ta, tb);
    assert_eq!(a.rows.len(), cfg.regimes.len() * cfg.parameter_names().len());
    for row in &a.rows {
        assert_eq!(row.successes + a.failure_count(row.regime), cfg.replicates);
        assert!((0.0..=1.0).contains(&row.coverage_v_hat));
        assert!((0.0..=1.0).contains(&row.coverage_v_robust));
    }
    let cohort = a.row(ScenarioRegime::Cohort, "beta1").unwrap();
    assert_eq!(cohort.variance_ratio, Some(1.0));
    let (gap, se) = a.variance_gap(ScenarioRegime::Cohort, ScenarioRegime::Scc, "beta1").unwrap();
    assert!(gap.is_finite() && se >= 0.0);
}

#[test]
fn adding_a_regime_leaves_other_results_unchanged() {
    let base = small_config();
    let more = ScenarioConfig {
        regimes: vec![ScenarioRegime::Uscc, ScenarioRegime::Scc],
        ..small_config()
    };
    let a = run_scenario(&base).unwrap();
    let b = run_scenario(&more).unwrap();
    for name in base.parameter_names() {
        let x = a.row(ScenarioRegime::Scc, &name).unwrap();
        let y = b.row(ScenarioRegime::Scc, &name).unwrap();
        assert_eq!(x.mean_estimate, y.mean_estimate);
        assert_eq!(x.mean_v_hat, y.mean_v_hat);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn subcohort_sizes_scale_with_k(k in 1usize..6, n in 100usize..20_000) {
        let prepass = flat_prepass();
        let one = prepass.subcohort_sizes(n, 1, false)[0] as f64;
        let many = prepass.subcohort_sizes(n, k, false)[0] as f64;
        prop_assert!((many - k as f64 * one).abs() <= k as f64);
    }

    #[test]
    fn sampled_subcohort_has_requested_size(seed in 0u64..500, m in prop::collection::vec(0usize..6, 2)) {
        let data = common::random_cohort(seed, 40, 1, 2);
        let design = sample_phase2(&data, &m, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        for j in 0..2 {
            let drawn = (0..data.len())
                .filter(|&i| data.records()[i].stratum == j + 1 && design.sampled[i] && !data.records()[i].status)
                .count();
            prop_assert!(drawn <= m[j]);
        }
        prop_assert!(data.records().iter().zip(&design.sampled).all(|(r, &s)| !r.status || s));
    }
}
