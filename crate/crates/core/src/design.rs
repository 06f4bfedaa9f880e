//! Phase-two and phase-three sampling designs.

use crate::dataset::CohortDataset;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DesignError {
    #[error("stratum {0}: fewer than two subcohort draws, joint weights are undefined")]
    DegenerateStratum(usize),
    #[error("phase-three stratum {0} has no observed phase-two subject")]
    EmptyPhase3Stratum(usize),
    #[error("stratum {0}: requested subcohort size exceeds the stratum size")]
    StratumTooSmall(usize),
    #[error("design vector `{name}` has length {actual}, expected {expected}")]
    LengthMismatch {
        name: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("subject {subject}: {reason}")]
    InvalidDesign { subject: usize, reason: String },
}

/// Non-fatal conditions noticed while building a design.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum DesignWarning {
    /// Stratum (one-based) without non-cases; its members all carry weight 1.
    NoNonCases(usize),
}

fn check_len(name: &'static str, expected: usize, actual: usize) -> Result<(), DesignError> {
    if expected != actual {
        return Err(DesignError::LengthMismatch {
            name,
            expected,
            actual,
        });
    }
    Ok(())
}

/// Phase-two sample: all cases plus a subcohort.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseTwoDesign {
    pub sampled: Vec<bool>,
    pub weight: Vec<f64>,
    pub m_per_stratum: Vec<usize>,
    pub with_replacement: bool,
    pub warnings: Vec<DesignWarning>,
}

impl PhaseTwoDesign {
    /// Design from a subcohort drawn without replacement within each stratum.
    ///
    /// `subcohort[i]` marks membership in the random draw; cases join the phase-two
    /// sample regardless. Non-case weights are `n_j / m_j` with `m_j` the draw size.
    pub fn from_subcohort(dataset: &CohortDataset, subcohort: &[bool]) -> Result<Self, DesignError> {
        check_len("subcohort", dataset.len(), subcohort.len())?;
        let n_strata = dataset.n_strata();
        let mut m_per_stratum = vec![0usize; n_strata];
        let mut non_cases = vec![0usize; n_strata];
        for (r, &drawn) in dataset.records().iter().zip(subcohort) {
            if drawn {
                m_per_stratum[r.stratum - 1] += 1;
            }
            if !r.status {
                non_cases[r.stratum - 1] += 1;
            }
        }
        let n_per_stratum = dataset.n_per_stratum();
        let mut sampled = Vec::with_capacity(dataset.len());
        let mut weight = Vec::with_capacity(dataset.len());
        for (r, &drawn) in dataset.records().iter().zip(subcohort) {
            let j = r.stratum - 1;
            sampled.push(drawn || r.status);
            if r.status || m_per_stratum[j] == 0 {
                weight.push(1.0);
            } else {
                weight.push(n_per_stratum[j] as f64 / m_per_stratum[j] as f64);
            }
        }
        let warnings = non_cases
            .iter()
            .enumerate()
            .filter(|(_, &c)| c == 0)
            .map(|(j, _)| DesignWarning::NoNonCases(j + 1))
            .collect();
        Ok(Self {
            sampled,
            weight,
            m_per_stratum,
            with_replacement: false,
            warnings,
        })
    }

    /// Bernoulli design with user-supplied inverse inclusion probabilities.
    pub fn bernoulli(
        dataset: &CohortDataset,
        sampled: Vec<bool>,
        weight: Vec<f64>,
    ) -> Result<Self, DesignError> {
        check_len("sampled", dataset.len(), sampled.len())?;
        check_len("weight", dataset.len(), weight.len())?;
        let mut m_per_stratum = vec![0usize; dataset.n_strata()];
        for (r, &s) in dataset.records().iter().zip(&sampled) {
            if s && !r.status {
                m_per_stratum[r.stratum - 1] += 1;
            }
        }
        let design = Self {
            sampled,
            weight,
            m_per_stratum,
            with_replacement: true,
            warnings: Vec::new(),
        };
        design.validate(dataset)?;
        Ok(design)
    }

    /// Every subject sampled with weight 1.
    pub fn full_cohort(dataset: &CohortDataset) -> Self {
        Self {
            sampled: vec![true; dataset.len()],
            weight: vec![1.0; dataset.len()],
            m_per_stratum: dataset.n_per_stratum().to_vec(),
            with_replacement: false,
            warnings: Vec::new(),
        }
    }

    /// Checks that cases are sampled with unit weight and sampled weights are at least 1.
    pub fn validate(&self, dataset: &CohortDataset) -> Result<(), DesignError> {
        check_len("sampled", dataset.len(), self.sampled.len())?;
        check_len("weight", dataset.len(), self.weight.len())?;
        for (i, r) in dataset.records().iter().enumerate() {
            if r.status && (!self.sampled[i] || self.weight[i] != 1.0) {
                return Err(DesignError::InvalidDesign {
                    subject: i,
                    reason: "cases must be sampled with weight 1".into(),
                });
            }
            if self.sampled[i] && !(self.weight[i] >= 1.0 && self.weight[i].is_finite()) {
                return Err(DesignError::InvalidDesign {
                    subject: i,
                    reason: "design weights must be finite and ≥ 1".into(),
                });
            }
        }
        Ok(())
    }

    /// `ξ_i w_i`, zero outside the phase-two sample.
    pub fn sampling_weight(&self, i: usize) -> f64 {
        if self.sampled[i] {
            self.weight[i]
        } else {
            0.0
        }
    }

    pub fn n_sampled(&self) -> usize {
        self.sampled.iter().filter(|&&s| s).count()
    }
}

/// Pairwise inclusion moments of the phase-two indicators, evaluated on demand.
#[derive(Debug, Clone)]
pub struct JointInclusion {
    with_replacement: bool,
    n_per_stratum: Vec<usize>,
    m_per_stratum: Vec<usize>,
    sampled_non_cases: Vec<usize>,
    stratum: Vec<usize>,
    case: Vec<bool>,
    sampled: Vec<bool>,
    weight: Vec<f64>,
}

pub fn joint_inclusion(
    design: &PhaseTwoDesign,
    dataset: &CohortDataset,
) -> Result<JointInclusion, DesignError> {
    design.validate(dataset)?;
    let mut sampled_non_cases = vec![0usize; dataset.n_strata()];
    for (i, r) in dataset.records().iter().enumerate() {
        if design.sampled[i] && !r.status {
            sampled_non_cases[r.stratum - 1] += 1;
        }
    }
    if !design.with_replacement {
        for (j, &count) in sampled_non_cases.iter().enumerate() {
            if count >= 2 && design.m_per_stratum[j] < 2 {
                return Err(DesignError::DegenerateStratum(j + 1));
            }
        }
    }
    Ok(JointInclusion {
        with_replacement: design.with_replacement,
        n_per_stratum: dataset.n_per_stratum().to_vec(),
        m_per_stratum: design.m_per_stratum.clone(),
        sampled_non_cases,
        stratum: dataset.records().iter().map(|r| r.stratum).collect(),
        case: dataset.records().iter().map(|r| r.status).collect(),
        sampled: design.sampled.clone(),
        weight: design.weight.clone(),
    })
}

impl JointInclusion {
    pub fn len(&self) -> usize {
        self.stratum.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stratum.is_empty()
    }

    pub fn n_strata(&self) -> usize {
        self.n_per_stratum.len()
    }

    pub fn stratum_of(&self, i: usize) -> usize {
        self.stratum[i]
    }

    pub fn is_case(&self, i: usize) -> bool {
        self.case[i]
    }

    pub fn weight(&self, i: usize) -> f64 {
        self.weight[i]
    }

    pub fn is_sampled(&self, i: usize) -> bool {
        self.sampled[i]
    }

    pub fn with_replacement(&self) -> bool {
        self.with_replacement
    }

    /// `σ_{i,j} = var(ξ_{i,j})`.
    pub fn marginal_variance(&self, i: usize) -> f64 {
        if self.case[i] {
            return 0.0;
        }
        let p = if self.with_replacement {
            1.0 / self.weight[i]
        } else {
            let j = self.stratum[i] - 1;
            self.m_per_stratum[j] as f64 / self.n_per_stratum[j] as f64
        };
        p * (1.0 - p)
    }

    /// `(w_{i,k,j}, σ_{i,k,j})`; for `i == k` the marginal pair `(w_i, σ_i)`.
    pub fn joint(&self, i: usize, k: usize) -> Result<(f64, f64), DesignError> {
        if i == k {
            return Ok((self.weight[i], self.marginal_variance(i)));
        }
        let independent = (self.weight[i] * self.weight[k], 0.0);
        if self.with_replacement || self.case[i] || self.case[k] || self.stratum[i] != self.stratum[k] {
            return Ok(independent);
        }
        let j = self.stratum[i] - 1;
        let n = self.n_per_stratum[j] as f64;
        let m = self.m_per_stratum[j] as f64;
        if self.m_per_stratum[j] < 2 {
            return Err(DesignError::DegenerateStratum(j + 1));
        }
        let w_pair = n * (n - 1.0) / (m * (m - 1.0));
        let sigma_pair = (m / n) * ((m - 1.0) / (n - 1.0)) - (m / n) * (m / n);
        Ok((w_pair, sigma_pair))
    }

    /// `w_{i,k,j} σ_{i,k,j}` shared by every distinct non-case pair of stratum `j` (one-based).
    pub fn pair_factor(&self, j: usize) -> f64 {
        if self.with_replacement || self.sampled_non_cases[j - 1] < 2 {
            return 0.0;
        }
        let n = self.n_per_stratum[j - 1] as f64;
        let m = self.m_per_stratum[j - 1] as f64;
        let w_pair = n * (n - 1.0) / (m * (m - 1.0));
        let sigma_pair = (m / n) * ((m - 1.0) / (n - 1.0)) - (m / n) * (m / n);
        w_pair * sigma_pair
    }
}

/// Phase-three (complete-data) subsample of the phase-two sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseThreeDesign {
    pub observed: Vec<bool>,
    /// One-based phase-three stratum of every subject.
    pub stratum3: Vec<usize>,
    pub known_prob: Option<Vec<f64>>,
    /// Log estimated weights, one per phase-three stratum.
    pub gamma: Option<Vec<f64>>,
    pub est_weight: Vec<f64>,
    pub est_var: Vec<f64>,
}

fn check_phase3_inputs(
    dataset: &CohortDataset,
    p2: &PhaseTwoDesign,
    stratum3: &[usize],
    observed: &[bool],
) -> Result<usize, DesignError> {
    check_len("stratum3", dataset.len(), stratum3.len())?;
    check_len("observed", dataset.len(), observed.len())?;
    for i in 0..dataset.len() {
        if observed[i] && !p2.sampled[i] {
            return Err(DesignError::InvalidDesign {
                subject: i,
                reason: "observed in phase three but not sampled in phase two".into(),
            });
        }
        if stratum3[i] == 0 {
            return Err(DesignError::InvalidDesign {
                subject: i,
                reason: "phase-three strata are one-based".into(),
            });
        }
    }
    Ok(stratum3.iter().copied().max().unwrap_or(0))
}

/// Solves `Σ ξB − exp(γ'B) ξVB = 0`, one ratio per phase-three stratum.
pub fn estimate_phase3_weights(
    dataset: &CohortDataset,
    p2: &PhaseTwoDesign,
    stratum3: &[usize],
    observed: &[bool],
) -> Result<PhaseThreeDesign, DesignError> {
    let n_strata3 = check_phase3_inputs(dataset, p2, stratum3, observed)?;
    let mut in_phase2 = vec![0usize; n_strata3];
    let mut in_phase3 = vec![0usize; n_strata3];
    for i in 0..dataset.len() {
        if p2.sampled[i] {
            in_phase2[stratum3[i] - 1] += 1;
            if observed[i] {
                in_phase3[stratum3[i] - 1] += 1;
            }
        }
    }
    let mut gamma = Vec::with_capacity(n_strata3);
    for s in 0..n_strata3 {
        if in_phase3[s] == 0 {
            return Err(DesignError::EmptyPhase3Stratum(s + 1));
        }
        gamma.push((in_phase2[s] as f64 / in_phase3[s] as f64).ln());
    }
    let est_weight: Vec<f64> = stratum3.iter().map(|&s| gamma[s - 1].exp()).collect();
    let est_var = est_weight.iter().map(|&w| (1.0 / w) * (1.0 - 1.0 / w)).collect();
    Ok(PhaseThreeDesign {
        observed: observed.to_vec(),
        stratum3: stratum3.to_vec(),
        known_prob: None,
        gamma: Some(gamma),
        est_weight,
        est_var,
    })
}

impl PhaseThreeDesign {
    /// Design with known phase-three inclusion probabilities.
    pub fn known(
        dataset: &CohortDataset,
        p2: &PhaseTwoDesign,
        stratum3: &[usize],
        observed: &[bool],
        known_prob: Vec<f64>,
    ) -> Result<Self, DesignError> {
        check_phase3_inputs(dataset, p2, stratum3, observed)?;
        check_len("known_prob", dataset.len(), known_prob.len())?;
        if let Some(i) = known_prob.iter().position(|&p| !(p > 0.0 && p <= 1.0)) {
            return Err(DesignError::InvalidDesign {
                subject: i,
                reason: "phase-three probabilities must lie in (0, 1]".into(),
            });
        }
        let est_weight = known_prob.iter().map(|&p| 1.0 / p).collect();
        let est_var = known_prob.iter().map(|&p| p * (1.0 - p)).collect();
        Ok(Self {
            observed: observed.to_vec(),
            stratum3: stratum3.to_vec(),
            known_prob: Some(known_prob),
            gamma: None,
            est_weight,
            est_var,
        })
    }

    /// The same observation pattern with estimated weights reinterpreted as known.
    pub fn treat_as_known(&self) -> Self {
        Self {
            known_prob: Some(self.est_weight.iter().map(|w| 1.0 / w).collect()),
            gamma: None,
            ..self.clone()
        }
    }

    pub fn n_strata3(&self) -> usize {
        self.stratum3.iter().copied().max().unwrap_or(0)
    }

    pub fn is_estimated(&self) -> bool {
        self.gamma.is_some()
    }

    /// Residual of the weight estimating equation, per phase-three stratum.
    pub fn estimating_residual(&self, p2: &PhaseTwoDesign) -> Vec<f64> {
        let mut residual = vec![0.0; self.n_strata3()];
        for i in 0..self.observed.len() {
            if p2.sampled[i] {
                let s = self.stratum3[i] - 1;
                residual[s] += 1.0;
                if self.observed[i] {
                    residual[s] -= self.est_weight[i];
                }
            }
        }
        residual
    }
}
