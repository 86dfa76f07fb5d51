//! Estimating the randomized-response keep probability from privatized
//! labels, using covariate regions where the true level is certain.

use crate::correction::c1;
use crate::data::SensitiveLevel;
use crate::error::{Error, Result};
use crate::model::{HypothesisSpec, LossKind, ScoreModel};
use crate::rng::streams;
use crate::train::{fit_models, TrainConfig, WeightedData};

/// Clipping applied to posterior predictions before taking the maximum.
pub const POSTERIOR_CLIP: f64 = 1e-6;
/// Smallest group accepted by [`c1_procedure`].
pub const MIN_GROUP_SIZE: usize = 50;

/// Optimizer settings for posterior fits: logistic regression on
/// standardized inputs tolerates a much larger step than the pricing nets.
pub fn default_posterior_config() -> TrainConfig {
    TrainConfig {
        learning_rate: 0.5,
        epochs: 5000,
        ..TrainConfig::default()
    }
}

/// The most frequent observed level (lowest index on ties).
pub fn default_j_star(s: &[SensitiveLevel], cardinality: usize) -> usize {
    let mut counts = vec![0usize; cardinality];
    for l in s {
        counts[l.index()] += 1;
    }
    let mut best = 0;
    for (k, &c) in counts.iter().enumerate() {
        if c > counts[best] {
            best = k;
        }
    }
    best
}

/// One-vs-rest logistic regression of `1[S = j*]` on `x*`.
pub fn fit_posterior(
    x_star: &[Vec<f64>],
    s: &[SensitiveLevel],
    j_star: usize,
    cardinality: usize,
    cfg: &TrainConfig,
) -> Result<ScoreModel> {
    if x_star.len() != s.len() {
        return Err(Error::DimensionMismatch {
            expected: x_star.len(),
            actual: s.len(),
        });
    }
    if j_star >= cardinality {
        return Err(Error::LevelOutOfRange {
            index: j_star,
            cardinality,
        });
    }
    let mut seen = vec![false; cardinality];
    for l in s {
        if l.index() >= cardinality {
            return Err(Error::LevelOutOfRange {
                index: l.index(),
                cardinality,
            });
        }
        seen[l.index()] = true;
    }
    if let Some(level) = seen.iter().position(|v| !v) {
        return Err(Error::EmptyLevel { level });
    }
    let y: Vec<f64> = s.iter().map(|l| if l.index() == j_star { 1.0 } else { 0.0 }).collect();
    let w = vec![vec![1.0; y.len()]];
    let data = WeightedData {
        x: x_star,
        y: &y,
        weights: &w,
    };
    let (mut models, _) = fit_models(
        &HypothesisSpec::Linear,
        data,
        LossKind::BinaryCrossEntropy,
        cfg,
        &[streams::POSTERIOR_INIT],
    )?;
    Ok(models.remove(0))
}

/// Largest clipped posterior `P̂(S = j* | x*)` over the sample. Fails with
/// [`Error::NoAnchor`] when it does not exceed `1/|𝒟|`.
pub fn estimate_pi_anchor(
    x_star: &[Vec<f64>],
    s: &[SensitiveLevel],
    j_star: usize,
    cardinality: usize,
    cfg: &TrainConfig,
) -> Result<f64> {
    let g = fit_posterior(x_star, s, j_star, cardinality, cfg)?;
    let mut best = f64::NEG_INFINITY;
    for x in x_star {
        best = best.max(g.predict(x)?.clamp(POSTERIOR_CLIP, 1.0 - POSTERIOR_CLIP));
    }
    if best <= 1.0 / cardinality as f64 {
        return Err(Error::NoAnchor {
            pi_hat: best,
            cardinality,
        });
    }
    Ok(best)
}

/// Inverse of the `C₁` map, `π = (C₁ + |𝒟| − 2) / (|𝒟|·C₁ − 1)`.
pub fn pi_from_c1(c1: f64, cardinality: usize) -> f64 {
    let k = cardinality as f64;
    (c1 + k - 2.0) / (k * c1 - 1.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnchorEstimate {
    pub pi_hat: f64,
    pub level_used: usize,
    /// Per-group maximum posterior; groups without an anchor hold the
    /// (uninformative) value that caused their exclusion.
    pub eta_max_per_group: Vec<f64>,
    /// `C₁` of each group, `NaN` for excluded groups.
    pub c1_per_group: Vec<f64>,
    pub excluded: Vec<bool>,
    pub c1_hat: f64,
    pub n1: usize,
    pub m: usize,
}

/// Splits the sample into `n1` contiguous groups of `m = ⌊n/n1⌋` records
/// (dropping the remainder), estimates `π` within each, averages the
/// groups' `C₁` values and maps the average back to `π̂`.
pub fn c1_procedure(
    x_star: &[Vec<f64>],
    s: &[SensitiveLevel],
    j_star: usize,
    cardinality: usize,
    n1: usize,
    cfg: &TrainConfig,
) -> Result<AnchorEstimate> {
    c1_procedure_with_min(x_star, s, j_star, cardinality, n1, MIN_GROUP_SIZE, cfg)
}

pub fn c1_procedure_with_min(
    x_star: &[Vec<f64>],
    s: &[SensitiveLevel],
    j_star: usize,
    cardinality: usize,
    n1: usize,
    min_group: usize,
    cfg: &TrainConfig,
) -> Result<AnchorEstimate> {
    if n1 == 0 {
        return Err(Error::InvalidInput("n1 must be at least 1".into()));
    }
    if x_star.len() != s.len() {
        return Err(Error::DimensionMismatch {
            expected: x_star.len(),
            actual: s.len(),
        });
    }
    let m = s.len() / n1;
    if m < min_group.max(1) {
        return Err(Error::InvalidInput(format!(
            "group size {m} below the minimum of {min_group} (n = {}, n1 = {n1})",
            s.len()
        )));
    }
    let mut eta = Vec::with_capacity(n1);
    let mut c1s = Vec::with_capacity(n1);
    let mut excluded = Vec::with_capacity(n1);
    for g in 0..n1 {
        let range = g * m..(g + 1) * m;
        match estimate_pi_anchor(&x_star[range.clone()], &s[range], j_star, cardinality, cfg) {
            Ok(p) => {
                eta.push(p);
                c1s.push(c1(p, cardinality)?);
                excluded.push(false);
            }
            Err(Error::NoAnchor { pi_hat, .. }) => {
                eta.push(pi_hat);
                c1s.push(f64::NAN);
                excluded.push(true);
            }
            Err(Error::EmptyLevel { .. }) => {
                eta.push(f64::NAN);
                c1s.push(f64::NAN);
                excluded.push(true);
            }
            Err(e) => return Err(e),
        }
    }
    let kept: Vec<usize> = (0..n1).filter(|&g| !excluded[g]).collect();
    let (c1_hat, pi_hat) = match kept.as_slice() {
        [] => {
            let best = eta.iter().copied().filter(|v| v.is_finite()).fold(f64::NAN, f64::max);
            return Err(Error::NoAnchor {
                pi_hat: best,
                cardinality,
            });
        }
        [only] => (c1s[*only], eta[*only]),
        many => {
            let c1_hat = many.iter().map(|&g| c1s[g]).sum::<f64>() / many.len() as f64;
            (c1_hat, pi_from_c1(c1_hat, cardinality))
        }
    };
    Ok(AnchorEstimate {
        pi_hat,
        level_used: j_star,
        eta_max_per_group: eta,
        c1_per_group: c1s,
        excluded,
        c1_hat,
        n1,
        m,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbMode {
    Absolute,
    Relative,
}

/// `π + offset` (absolute) or `π·(1 + offset)` (relative); the result must
/// stay in `(1/|𝒟|, 1]`.
pub fn perturb_pi(pi: f64, offset: f64, mode: PerturbMode, cardinality: usize) -> Result<f64> {
    let out = match mode {
        PerturbMode::Absolute => pi + offset,
        PerturbMode::Relative => pi * (1.0 + offset),
    };
    if !(out > 1.0 / cardinality as f64 && out <= 1.0) {
        return Err(Error::InvalidInput(format!(
            "perturbed keep probability {out} outside (1/{cardinality}, 1]"
        )));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::sigmoid;
    use crate::rng;
    use rand::Rng;

    fn levels(v: &[usize]) -> Vec<SensitiveLevel> {
        v.iter().map(|&i| SensitiveLevel(i)).collect()
    }

    #[test]
    fn perturb_examples() {
        let close = |a: f64, b: f64| (a - b).abs() < 1e-12;
        assert!(close(perturb_pi(0.9, 0.05, PerturbMode::Absolute, 2).unwrap(), 0.95));
        assert!(close(perturb_pi(0.9, -0.05, PerturbMode::Absolute, 2).unwrap(), 0.85));
        assert_eq!(perturb_pi(0.8, 0.0, PerturbMode::Absolute, 2).unwrap(), 0.8);
        assert!(close(perturb_pi(0.8, -0.15, PerturbMode::Relative, 2).unwrap(), 0.68));
        assert!(perturb_pi(0.98, 0.05, PerturbMode::Absolute, 2).is_err());
        assert!(perturb_pi(0.52, -0.05, PerturbMode::Absolute, 2).is_err());
    }

    #[test]
    fn c1_map_is_an_involution() {
        for k in 2..=5 {
            for i in 1..=50 {
                let lo = 1.0 / k as f64;
                let pi = lo + (1.0 - lo) * i as f64 / 50.0;
                let back = pi_from_c1(c1(pi, k).unwrap(), k);
                assert!((back - pi).abs() < 1e-12, "k={k} pi={pi} back={back}");
            }
        }
        assert!((pi_from_c1(1.125, 2) - 0.9).abs() < 1e-15);
    }

    #[test]
    fn constant_features_give_the_empirical_frequency() {
        let s = levels(&[1, 0, 1, 1, 0, 1, 1, 1, 0, 1]);
        let x = vec![vec![3.0]; s.len()];
        let g = fit_posterior(&x, &s, 1, 2, &default_posterior_config()).unwrap();
        assert!((g.predict(&[3.0]).unwrap() - 0.7).abs() < 1e-6);
    }

    #[test]
    fn separable_noiseless_data_saturates() {
        let x: Vec<Vec<f64>> = (0..200).map(|i| vec![i as f64]).collect();
        let s = levels(&(0..200).map(|i| usize::from(i >= 100)).collect::<Vec<_>>());
        let pi = estimate_pi_anchor(&x, &s, 1, 2, &default_posterior_config()).unwrap();
        assert!(pi > 0.99, "{pi}");
    }

    #[test]
    fn recovers_known_logistic_posterior() {
        let n = 10_000;
        let mut r = rng::stream(21, 0);
        let x: Vec<Vec<f64>> = (0..n).map(|_| vec![r.gen_range(-2.0..2.0)]).collect();
        let s: Vec<SensitiveLevel> = x
            .iter()
            .map(|v| SensitiveLevel(usize::from(r.gen::<f64>() < sigmoid(2.0 * v[0]))))
            .collect();
        let g = fit_posterior(&x, &s, 1, 2, &default_posterior_config()).unwrap();
        let mae: f64 = x.iter().map(|v| (g.predict(v).unwrap() - sigmoid(2.0 * v[0])).abs()).sum::<f64>() / n as f64;
        assert!(mae < 0.05, "{mae}");
    }

    #[test]
    fn single_level_is_rejected() {
        let x = vec![vec![0.0]; 5];
        let s = levels(&[1; 5]);
        assert!(matches!(
            fit_posterior(&x, &s, 1, 2, &default_posterior_config()),
            Err(Error::EmptyLevel { level: 0 })
        ));
    }

    #[test]
    fn one_group_matches_full_data_estimate() {
        let mut r = rng::stream(4, 0);
        let x: Vec<Vec<f64>> = (0..400).map(|_| vec![r.gen_range(0.0..1.0)]).collect();
        let s: Vec<SensitiveLevel> = x
            .iter()
            .map(|v| SensitiveLevel(usize::from(r.gen::<f64>() < 0.2 + 0.7 * v[0])))
            .collect();
        let cfg = default_posterior_config();
        let direct = estimate_pi_anchor(&x, &s, 1, 2, &cfg).unwrap();
        let est = c1_procedure(&x, &s, 1, 2, 1, &cfg).unwrap();
        assert_eq!(est.pi_hat, direct);
        assert_eq!(est.m, 400);
        let est = c1_procedure(&x, &s, 1, 2, 3, &cfg).unwrap();
        assert_eq!(est.m, 133);
        assert_eq!(est.c1_per_group.len(), 3);
        assert!(c1_procedure(&x, &s, 1, 2, 9, &cfg).is_err());
    }

    #[test]
    fn default_j_star_picks_the_mode() {
        assert_eq!(default_j_star(&levels(&[0, 1, 1, 2]), 3), 1);
        assert_eq!(default_j_star(&levels(&[0, 1]), 2), 0);
    }
}
