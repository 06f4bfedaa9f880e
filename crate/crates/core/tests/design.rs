mod common;

use casecohort::dataset::{CohortDataset, CohortRecord};
use casecohort::design::{estimate_phase3_weights, joint_inclusion, DesignError, DesignWarning, PhaseThreeDesign, PhaseTwoDesign};
use common::{assert_close, names, record};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// One case followed by three non-cases in a single stratum.
fn fix_w4() -> CohortDataset {
    CohortDataset::new(
        vec![
            record("case", 1.0, true, &[0.0]),
            record("a", 2.0, false, &[0.0]),
            record("b", 3.0, false, &[0.0]),
            record("c", 4.0, false, &[0.0]),
        ],
        names(1),
    )
    .unwrap()
}

fn cohort_with_strata(strata: &[usize], cases: &[bool]) -> CohortDataset {
    let records = strata
        .iter()
        .zip(cases)
        .enumerate()
        .map(|(i, (&s, &c))| CohortRecord {
            stratum: s,
            ..record(&format!("s{i}"), 1.0 + i as f64, c, &[0.0])
        })
        .collect();
    CohortDataset::new(records, names(1)).unwrap()
}

/// Every size-`m` subset of `0..n`, as membership vectors.
fn subsets(n: usize, m: usize) -> Vec<Vec<bool>> {
    (0u32..1 << n)
        .filter(|mask| mask.count_ones() as usize == m)
        .map(|mask| (0..n).map(|i| mask & (1 << i) != 0).collect())
        .collect()
}

#[test]
fn four_subject_pair_weights() {
    let data = fix_w4();
    let design = PhaseTwoDesign::from_subcohort(&data, &[false, true, true, false]).unwrap();
    assert_eq!(design.m_per_stratum, vec![2]);
    let weights: Vec<f64> = (0..4).map(|i| design.sampling_weight(i)).collect();
    assert_eq!(weights, vec![1.0, 2.0, 2.0, 0.0]);
    let joint = joint_inclusion(&design, &data).unwrap();
    let (w, sigma) = joint.joint(1, 2).unwrap();
    assert_close(w, 6.0, 1e-15);
    assert_close(sigma, -1.0 / 12.0, 1e-15);
    assert_close(joint.marginal_variance(1), 0.25, 1e-15);
    assert_eq!(joint.marginal_variance(0), 0.0);
    assert_eq!(joint.joint(0, 1).unwrap().1, 0.0);
}

#[test]
fn enumeration_reproduces_inclusion_moments() {
    for (n, m) in [(4usize, 2usize), (5, 2), (6, 3), (7, 4), (8, 3), (8, 6)] {
        let cases: Vec<bool> = (0..n).map(|i| i == 0).collect();
        let data = cohort_with_strata(&vec![1; n], &cases);
        let draws = subsets(n, m);
        let count = draws.len() as f64;
        let p_single = draws.iter().filter(|d| d[1]).count() as f64 / count;
        let p_pair = draws.iter().filter(|d| d[1] && d[2]).count() as f64 / count;
        let drawn = draws.iter().find(|d| d[1] && d[2]).unwrap();
        let design = PhaseTwoDesign::from_subcohort(&data, drawn).unwrap();
        let joint = joint_inclusion(&design, &data).unwrap();
        assert_close(joint.marginal_variance(1), p_single * (1.0 - p_single), 1e-14);
        let (w, sigma) = joint.joint(1, 2).unwrap();
        assert_close(w, 1.0 / p_pair, 1e-12);
        assert_close(sigma, p_pair - p_single * p_single, 1e-14);
        assert_close(joint.pair_factor(1), sigma / p_pair, 1e-13);
    }
}

#[test]
fn covariance_vanishes_across_strata_and_for_cases() {
    let data = cohort_with_strata(&[1, 1, 1, 2, 2, 2], &[false, false, true, false, false, true]);
    let design = PhaseTwoDesign::from_subcohort(&data, &[true, true, false, true, true, false]).unwrap();
    let joint = joint_inclusion(&design, &data).unwrap();
    assert_eq!(joint.joint(0, 3).unwrap().1, 0.0);
    assert_eq!(joint.joint(0, 2).unwrap().1, 0.0);
    assert!(joint.joint(0, 1).unwrap().1 < 0.0);
}

#[test]
fn bernoulli_pairs_are_independent() {
    let data = fix_w4();
    let design = PhaseTwoDesign::bernoulli(&data, vec![true, true, true, false], vec![1.0, 2.5, 4.0, 3.0]).unwrap();
    let joint = joint_inclusion(&design, &data).unwrap();
    assert!(joint.with_replacement());
    let (w, sigma) = joint.joint(1, 2).unwrap();
    assert_eq!(sigma, 0.0);
    assert_close(w, 10.0, 1e-15);
    assert_close(joint.marginal_variance(1), 0.4 * 0.6, 1e-15);
    assert_eq!(joint.pair_factor(1), 0.0);
}

#[test]
fn single_draw_with_two_sampled_non_cases_is_degenerate() {
    let data = fix_w4();
    let design = PhaseTwoDesign {
        sampled: vec![true, true, true, false],
        weight: vec![1.0, 4.0, 4.0, 1.0],
        m_per_stratum: vec![1],
        with_replacement: false,
        warnings: Vec::new(),
    };
    assert!(matches!(joint_inclusion(&design, &data), Err(DesignError::DegenerateStratum(1))));
}

#[test]
fn unsampled_or_reweighted_cases_are_rejected() {
    let data = fix_w4();
    let mut design = PhaseTwoDesign::from_subcohort(&data, &[false, true, true, false]).unwrap();
    design.weight[0] = 2.0;
    assert!(matches!(design.validate(&data), Err(DesignError::InvalidDesign { subject: 0, .. })));
}

#[test]
fn stratum_without_non_cases_warns() {
    let data = cohort_with_strata(&[1, 1, 2], &[false, true, true]);
    let design = PhaseTwoDesign::from_subcohort(&data, &[true, false, false]).unwrap();
    assert_eq!(design.warnings, vec![DesignWarning::NoNonCases(2)]);
}

#[test]
fn horvitz_thompson_is_unbiased_over_draws() {
    let data = common::random_cohort(11, 60, 1, 3);
    let f: Vec<f64> = data.records().iter().map(|r| (r.exit_time).sin() + 2.0).collect();
    let total: f64 = f.iter().sum();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let draws = 4000;
    let mut values = Vec::with_capacity(draws);
    for _ in 0..draws {
        let mut subcohort = vec![false; data.len()];
        for j in 1..=data.n_strata() {
            let members: Vec<usize> = (0..data.len()).filter(|&i| data.records()[i].stratum == j).collect();
            for k in rand::seq::index::sample(&mut rng, members.len(), 6) {
                subcohort[members[k]] = true;
            }
        }
        let design = PhaseTwoDesign::from_subcohort(&data, &subcohort).unwrap();
        values.push((0..data.len()).map(|i| design.sampling_weight(i) * f[i]).sum::<f64>());
    }
    let mean = values.iter().sum::<f64>() / draws as f64;
    let sd = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (draws as f64 - 1.0)).sqrt();
    let mc_se = sd / (draws as f64).sqrt();
    assert!((mean - total).abs() <= 3.0 * mc_se, "mean {mean}, total {total}, se {mc_se}");
}

#[test]
fn phase_three_ratio_examples() {
    let cases: Vec<bool> = (0..10).map(|i| i < 3).collect();
    let data = cohort_with_strata(&[1; 10], &cases);
    let p2 = PhaseTwoDesign::full_cohort(&data);
    let observed: Vec<bool> = (0..10).map(|i| i < 8).collect();
    let p3 = estimate_phase3_weights(&data, &p2, &[1; 10], &observed).unwrap();
    assert_close(p3.est_weight[0], 1.25, 1e-15);
    assert_close(p3.est_var[0], 0.16, 1e-15);

    let all = estimate_phase3_weights(&data, &p2, &[1; 10], &[true; 10]).unwrap();
    assert!(all.est_weight.iter().all(|&w| w == 1.0));
    assert!(all.est_var.iter().all(|&v| v == 0.0));

    let n = 60;
    let cases: Vec<bool> = (0..n).map(|i| i < 20).collect();
    let data = cohort_with_strata(&vec![1; n], &cases);
    let p2 = PhaseTwoDesign::full_cohort(&data);
    let stratum3: Vec<usize> = cases.iter().map(|&c| if c { 1 } else { 2 }).collect();
    let observed: Vec<bool> = (0..n).map(|i| i < 50).collect();
    let p3 = estimate_phase3_weights(&data, &p2, &stratum3, &observed).unwrap();
    assert_close(p3.est_weight[0], 1.0, 1e-15);
    assert_close(p3.est_weight[59], 4.0 / 3.0, 1e-15);
    assert!(p3.is_estimated());
}

#[test]
fn empty_phase_three_stratum_is_an_error() {
    let data = fix_w4();
    let p2 = PhaseTwoDesign::full_cohort(&data);
    let err = estimate_phase3_weights(&data, &p2, &[1, 2, 2, 2], &[true, false, false, false]).unwrap_err();
    assert_eq!(err, DesignError::EmptyPhase3Stratum(2));
}

#[test]
fn known_probabilities_invert_to_weights() {
    let data = fix_w4();
    let p2 = PhaseTwoDesign::full_cohort(&data);
    let p3 = PhaseThreeDesign::known(&data, &p2, &[1, 2, 2, 2], &[true, true, false, true], vec![0.8, 0.5, 0.5, 0.5]).unwrap();
    assert_close(p3.est_weight[0], 1.25, 1e-15);
    assert_close(p3.est_weight[1], 2.0, 1e-15);
    assert_close(p3.est_var[1], 0.25, 1e-15);
    assert!(!p3.is_estimated());
    assert!(PhaseThreeDesign::known(&data, &p2, &[1; 4], &[true; 4], vec![0.0, 1.0, 1.0, 1.0]).is_err());
}

#[test]
fn phase_three_requires_phase_two_membership() {
    let data = fix_w4();
    let p2 = PhaseTwoDesign::from_subcohort(&data, &[false, true, true, false]).unwrap();
    let err = estimate_phase3_weights(&data, &p2, &[1; 4], &[true, true, true, true]).unwrap_err();
    assert!(matches!(err, DesignError::InvalidDesign { subject: 3, .. }));
}

proptest! {
    #[test]
    fn estimated_weights_solve_their_equation(
        pattern in prop::collection::vec((any::<bool>(), 1usize..=3, any::<bool>()), 12..60)
    ) {
        let n = pattern.len();
        let cases: Vec<bool> = pattern.iter().map(|p| p.0).collect();
        let data = cohort_with_strata(&vec![1; n], &cases);
        let p2 = PhaseTwoDesign::full_cohort(&data);
        let mut stratum3: Vec<usize> = pattern.iter().map(|p| p.1).collect();
        let mut observed: Vec<bool> = pattern.iter().map(|p| p.2).collect();
        for s in 1..=3 {
            stratum3[s - 1] = s;
            observed[s - 1] = true;
        }
        let p3 = estimate_phase3_weights(&data, &p2, &stratum3, &observed).unwrap();
        for r in p3.estimating_residual(&p2) {
            prop_assert!(r.abs() < 1e-9);
        }
        for (&w, &v) in p3.est_weight.iter().zip(&p3.est_var) {
            prop_assert!(w >= 1.0);
            prop_assert!((v - (1.0 / w) * (1.0 - 1.0 / w)).abs() < 1e-15);
        }
    }
}
