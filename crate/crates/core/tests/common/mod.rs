#![allow(dead_code)]

use casecohort::dataset::{CohortDataset, CohortRecord, CovariateNames};
use casecohort::design::PhaseTwoDesign;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal};

pub fn record(id: &str, exit: f64, status: bool, x: &[f64]) -> CohortRecord {
    CohortRecord {
        id: id.into(),
        entry_time: 0.0,
        exit_time: exit,
        status,
        stratum: 1,
        x_phase1: Vec::new(),
        x_phase2: Some(x.to_vec()),
        proxies: None,
    }
}

pub fn names(p: usize) -> CovariateNames {
    CovariateNames {
        phase1: Vec::new(),
        phase2: (1..=p).map(|k| format!("x{k}")).collect(),
        proxies: Vec::new(),
    }
}

/// A: x=1 event at 1; B: x=0 event at 2; C: x=1 censored at 3.
pub fn fix_t3() -> CohortDataset {
    CohortDataset::new(
        vec![
            record("A", 1.0, true, &[1.0]),
            record("B", 2.0, true, &[0.0]),
            record("C", 3.0, false, &[1.0]),
        ],
        names(1),
    )
    .unwrap()
}

/// Random cohort with `p` covariates, some delayed entries, a few tied event times
/// and two proxies per covariate-free design; each subject gets a stratum in 1..=strata.
pub fn random_cohort(seed: u64, n: usize, p: usize, strata: usize) -> CohortDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut records = Vec::with_capacity(n);
    for i in 0..n {
        let x: Vec<f64> = (0..p).map(|_| normal.sample(&mut rng)).collect();
        let lp: f64 = x.iter().enumerate().map(|(k, v)| v * if k % 2 == 0 { 0.5 } else { -0.3 }).sum();
        let event_time: f64 = Exp::new(0.15 * lp.exp()).unwrap().sample(&mut rng);
        let censor: f64 = Exp::new(0.08f64).unwrap().sample(&mut rng);
        let censor = censor.min(8.0);
        let entry = if rng.random::<f64>() < 0.3 { rng.random::<f64>() * 1.5 } else { 0.0 };
        let mut exit = event_time.min(censor) + entry;
        // Round to create occasional ties.
        exit = (exit * 20.0).ceil() / 20.0;
        if exit <= entry {
            exit = entry + 0.05;
        }
        let status = event_time <= censor;
        let stratum = if strata == 1 { 1 } else { 1 + (i % strata) };
        let proxies: Vec<f64> = x.iter().map(|v| v + 0.5 * normal.sample(&mut rng)).collect();
        records.push(CohortRecord {
            id: format!("s{i}"),
            entry_time: entry,
            exit_time: exit,
            status,
            stratum,
            x_phase1: Vec::new(),
            x_phase2: Some(x),
            proxies: Some(proxies),
        });
    }
    let mut names = names(p);
    names.proxies = (1..=p).map(|k| format!("proxy{k}")).collect();
    let dataset = CohortDataset::new(records, names).unwrap();
    assert!(dataset.n_events() >= 4, "fixture needs events");
    dataset
}

/// Stratified subcohort of size `m` per stratum drawn without replacement.
pub fn random_design(dataset: &CohortDataset, seed: u64, m: usize) -> PhaseTwoDesign {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut subcohort = vec![false; dataset.len()];
    for j in 1..=dataset.n_strata() {
        let members: Vec<usize> = (0..dataset.len()).filter(|&i| dataset.records()[i].stratum == j).collect();
        let chosen = rand::seq::index::sample(&mut rng, members.len(), m.min(members.len()));
        for k in chosen {
            subcohort[members[k]] = true;
        }
    }
    PhaseTwoDesign::from_subcohort(dataset, &subcohort).unwrap()
}

pub fn assert_close(actual: f64, expected: f64, tol: f64) {
    assert!(
        (actual - expected).abs() <= tol,
        "expected {expected}, got {actual} (tolerance {tol})"
    );
}

/// Relative error with an absolute floor for near-zero derivatives.
pub fn rel_err(a: f64, b: f64, scale: f64) -> f64 {
    (a - b).abs() / (b.abs().max(a.abs()).max(1e-3 * scale).max(1e-12))
}
pub mod oracle;
