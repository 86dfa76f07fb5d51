//! ε-LDP randomized response on a discrete sensitive attribute.
//!
//! The mechanism reports the true level with probability
//! `π = e^ε / (k − 1 + e^ε)` and each of the other `k − 1` levels with
//! probability `π̄ = 1 / (k − 1 + e^ε)`. The report is drawn independently
//! of features and outcome.

use rand::Rng;

use crate::data::{Dataset, Record, SensitiveLevel};
use crate::error::{Error, Result};
use crate::rng::{self, StreamRng};

/// Randomized-response parameters. ε and π are both stored; they are kept
/// consistent by the constructors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RRParams {
    epsilon: f64,
    cardinality: usize,
    pi: f64,
    pi_bar: f64,
}

impl RRParams {
    /// Parameterize by privacy budget ε > 0 (`f64::INFINITY` gives the
    /// noiseless mechanism).
    pub fn from_epsilon(epsilon: f64, cardinality: usize) -> Result<Self> {
        if epsilon.is_nan() || epsilon <= 0.0 {
            return Err(Error::InvalidInput(format!("epsilon must be > 0, got {epsilon}")));
        }
        check_cardinality(cardinality)?;
        // e^-ε form stays finite for large ε
        let t = (-epsilon).exp();
        let denom = 1.0 + (cardinality as f64 - 1.0) * t;
        Ok(RRParams {
            epsilon,
            cardinality,
            pi: 1.0 / denom,
            pi_bar: t / denom,
        })
    }

    /// Parameterize by keep probability π ∈ (1/k, 1).
    pub fn from_pi(pi: f64, cardinality: usize) -> Result<Self> {
        check_cardinality(cardinality)?;
        let k = cardinality as f64;
        if !(pi > 1.0 / k && pi < 1.0) {
            return Err(Error::InvalidInput(format!(
                "keep probability must lie in (1/{cardinality}, 1), got {pi}"
            )));
        }
        Ok(RRParams {
            epsilon: (pi * (k - 1.0) / (1.0 - pi)).ln(),
            cardinality,
            pi,
            pi_bar: (1.0 - pi) / (k - 1.0),
        })
    }

    /// The noiseless mechanism (ε = ∞, π = 1).
    pub fn identity(cardinality: usize) -> Result<Self> {
        check_cardinality(cardinality)?;
        Ok(RRParams {
            epsilon: f64::INFINITY,
            cardinality,
            pi: 1.0,
            pi_bar: 0.0,
        })
    }

    /// Keep probability `pi` including the noiseless endpoint `pi == 1`.
    pub fn from_pi_inclusive(pi: f64, cardinality: usize) -> Result<Self> {
        if pi == 1.0 {
            Self::identity(cardinality)
        } else {
            Self::from_pi(pi, cardinality)
        }
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn cardinality(&self) -> usize {
        self.cardinality
    }

    pub fn pi(&self) -> f64 {
        self.pi
    }

    pub fn pi_bar(&self) -> f64 {
        self.pi_bar
    }

    /// Q(s | d).
    pub fn likelihood(&self, s: usize, d: usize) -> f64 {
        if s == d {
            self.pi
        } else {
            self.pi_bar
        }
    }
}

fn check_cardinality(cardinality: usize) -> Result<()> {
    if cardinality < 2 {
        return Err(Error::InvalidInput(format!(
            "sensitive cardinality must be at least 2, got {cardinality}"
        )));
    }
    Ok(())
}

/// Randomized-response parameters for budget ε.
pub fn rr_params(epsilon: f64, cardinality: usize) -> Result<RRParams> {
    RRParams::from_epsilon(epsilon, cardinality)
}

/// Inverse parameterization: the mechanism with keep probability `pi`.
pub fn pi_from_target(pi: f64, cardinality: usize) -> Result<RRParams> {
    RRParams::from_pi(pi, cardinality)
}

/// One randomized-response draw from the given generator.
///
/// A single uniform decides keep vs. flip, so for a fixed stream the
/// reports at a lower π flip a superset of the records flipped at a
/// higher π.
pub fn privatize_with(d: SensitiveLevel, params: &RRParams, rng: &mut StreamRng) -> SensitiveLevel {
    let u: f64 = rng.gen();
    if u < params.pi {
        return d;
    }
    let k = params.cardinality;
    let mut j = rng.gen_range(0..k - 1);
    if j >= d.index() {
        j += 1;
    }
    SensitiveLevel::new(j, k).expect("level drawn inside the domain")
}

/// One randomized-response draw seeded by `seed`.
pub fn privatize(d: SensitiveLevel, params: &RRParams, seed: u64) -> Result<SensitiveLevel> {
    if d.index() >= params.cardinality {
        return Err(Error::LevelOutOfRange {
            index: d.index(),
            cardinality: params.cardinality,
        });
    }
    Ok(privatize_with(d, params, &mut rng::stream(seed, 0)))
}

/// Fills `s` for every record using sub-stream `i` of `seed` for record `i`.
/// The true column is dropped unless `keep_truth` is set.
pub fn privatize_dataset(
    dataset: &Dataset,
    params: &RRParams,
    seed: u64,
    keep_truth: bool,
) -> Result<Dataset> {
    if params.cardinality != dataset.sensitive_cardinality() {
        return Err(Error::InvalidInput(format!(
            "mechanism cardinality {} does not match dataset cardinality {}",
            params.cardinality,
            dataset.sensitive_cardinality()
        )));
    }
    let truth = dataset.levels(crate::data::Attribute::True)?;
    let records = dataset
        .records()
        .iter()
        .zip(truth)
        .enumerate()
        .map(|(i, (r, d))| {
            let s = privatize_with(d, params, &mut rng::stream(seed, i as u64));
            Record {
                x: r.x.clone(),
                y: r.y,
                d: if keep_truth { Some(d) } else { None },
                s: Some(s),
            }
        })
        .collect();
    dataset.with_records(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Record, Task};
    use proptest::prelude::*;

    #[test]
    fn epsilon_closed_form() {
        let p = rr_params(9f64.ln(), 2).unwrap();
        assert!((p.pi() - 0.9).abs() < 1e-12 && (p.pi_bar() - 0.1).abs() < 1e-12);
        let p = rr_params(9f64.ln(), 4).unwrap();
        assert!((p.pi() - 0.75).abs() < 1e-12 && (p.pi_bar() - 1.0 / 12.0).abs() < 1e-12);
        let p = rr_params(1e-12, 2).unwrap();
        assert!((p.pi() - 0.5).abs() < 1e-9 && (p.pi_bar() - 0.5).abs() < 1e-9);
        let p = rr_params(f64::INFINITY, 3).unwrap();
        assert_eq!((p.pi(), p.pi_bar()), (1.0, 0.0));
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(rr_params(0.0, 2).is_err());
        assert!(rr_params(-1.0, 2).is_err());
        assert!(rr_params(1.0, 1).is_err());
        assert!(pi_from_target(0.5, 2).is_err());
        assert!(pi_from_target(1.0, 2).is_err());
        assert!(pi_from_target(0.2, 4).is_err());
    }

    #[test]
    fn inverse_parameterization() {
        let p = pi_from_target(0.9, 2).unwrap();
        assert!((p.epsilon() - 9f64.ln()).abs() < 1e-12);
        assert!((p.epsilon() - 2.19722).abs() < 1e-5);
        let p = pi_from_target(0.7, 2).unwrap();
        assert!((p.epsilon() - (7.0f64 / 3.0).ln()).abs() < 1e-12);
        assert!((p.epsilon() - 0.84730).abs() < 1e-5);
        let p = pi_from_target(0.5 + 1e-9, 2).unwrap();
        assert!((p.epsilon() - 4e-9).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn invariants_hold(eps in 1e-3f64..20.0, k in 2usize..8) {
            let p = rr_params(eps, k).unwrap();
            let kf = k as f64;
            prop_assert!((p.pi() + (kf - 1.0) * p.pi_bar() - 1.0).abs() < 1e-12);
            prop_assert!(p.pi() > 1.0 / kf && p.pi() <= 1.0);
            prop_assert!(p.pi_bar() >= 0.0 && p.pi_bar() < 1.0 / kf);
            // the LDP ratio bound, tight for randomized response
            let ratio = p.likelihood(0, 0) / p.likelihood(0, 1);
            prop_assert!(ratio <= eps.exp() * (1.0 + 1e-12));
            prop_assert!((ratio - eps.exp()).abs() <= 1e-9 * eps.exp());
            let back = pi_from_target(p.pi(), k);
            if p.pi() < 1.0 {
                let back = back.unwrap();
                prop_assert!((rr_params(back.epsilon(), k).unwrap().pi() - p.pi()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn noiseless_is_identity() {
        let p = RRParams::identity(3).unwrap();
        for seed in 0..200 {
            for d in 0..3 {
                let d = SensitiveLevel::new(d, 3).unwrap();
                assert_eq!(privatize(d, &p, seed).unwrap(), d);
            }
        }
    }

    #[test]
    fn keep_rate_concentrates() {
        let p = pi_from_target(0.9, 2).unwrap();
        let d = SensitiveLevel::new(0, 2).unwrap();
        let n = 100_000;
        let kept = (0..n)
            .filter(|&i| privatize_with(d, &p, &mut rng::stream(99, i)) == d)
            .count();
        let rate = kept as f64 / n as f64;
        assert!((rate - 0.9).abs() <= 3.0 * (0.9f64 * 0.1 / n as f64).sqrt(), "rate {rate}");
    }

    #[test]
    fn non_true_levels_exchangeable_and_uniform_limit() {
        // π just above 1/k: all four levels close to uniform
        let k = 4;
        let p = pi_from_target(0.25 + 1e-9, k).unwrap();
        let d = SensitiveLevel::new(2, k).unwrap();
        let n = 40_000u64;
        let mut counts = vec![0usize; k];
        for i in 0..n {
            counts[privatize_with(d, &p, &mut rng::stream(5, i)).index()] += 1;
        }
        let tol = 3.0 * (0.25f64 * 0.75 / n as f64).sqrt();
        for c in counts {
            assert!((c as f64 / n as f64 - 0.25).abs() < tol);
        }
        // non-true levels at π = 0.7 agree with each other
        let p = pi_from_target(0.7, k).unwrap();
        let mut counts = vec![0usize; k];
        for i in 0..n {
            counts[privatize_with(d, &p, &mut rng::stream(6, i)).index()] += 1;
        }
        let q = 0.1;
        let tol = 3.0 * (q * (1.0 - q) / n as f64).sqrt();
        for (j, c) in counts.iter().enumerate() {
            if j != 2 {
                assert!((*c as f64 / n as f64 - q).abs() < tol, "level {j}: {c}");
            }
        }
    }

    fn dataset(n: usize) -> Dataset {
        let recs = (0..n)
            .map(|i| Record {
                x: vec![i as f64, (i * 7 % 13) as f64],
                y: i as f64,
                d: Some(SensitiveLevel::new(i % 3 % 2, 2).unwrap()),
                s: None,
            })
            .collect();
        Dataset::new(recs, vec!["a".into(), "b".into()], 2, Task::Regression).unwrap()
    }

    #[test]
    fn dataset_privatization_is_deterministic_and_ignores_covariates() {
        let data = dataset(300);
        let p = pi_from_target(0.8, 2).unwrap();
        let a = privatize_dataset(&data, &p, 17, false).unwrap();
        let b = privatize_dataset(&data, &p, 17, false).unwrap();
        assert_eq!(a, b);
        assert!(a.records().iter().all(|r| r.d.is_none()));

        // scramble x and y; the s column must not move
        let scrambled: Vec<Record> = data
            .records()
            .iter()
            .rev()
            .zip(data.records())
            .map(|(other, r)| Record { x: other.x.clone(), y: -other.y, ..r.clone() })
            .collect();
        let c = privatize_dataset(&data.with_records(scrambled).unwrap(), &p, 17, true).unwrap();
        let sa: Vec<_> = a.records().iter().map(|r| r.s).collect();
        let sc: Vec<_> = c.records().iter().map(|r| r.s).collect();
        assert_eq!(sa, sc);
        assert!(c.records().iter().all(|r| r.d.is_some()));
    }

    #[test]
    fn identity_mechanism_copies_truth() {
        let data = dataset(50);
        let p = RRParams::identity(2).unwrap();
        let out = privatize_dataset(&data, &p, 3, true).unwrap();
        assert!(out.records().iter().all(|r| r.s == r.d));
    }

    #[test]
    fn requires_truth_column() {
        let mut recs = dataset(3).records().to_vec();
        recs[1].d = None;
        let data = dataset(3).with_records(recs).unwrap();
        let p = pi_from_target(0.8, 2).unwrap();
        assert!(matches!(
            privatize_dataset(&data, &p, 1, false),
            Err(Error::MissingAttribute { record: 1, .. })
        ));
    }
}
