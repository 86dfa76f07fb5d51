//! Closed-form loss correction for randomized-response noise.
//!
//! With keep probability π over `k` levels, the marginals satisfy
//! `P(S) = T · P(D)` with `T` = π on the diagonal and π̄ off it, and the
//! conditional laws satisfy `P(·|S) = Π · P(·|D)` with
//! `Π = diag(1/P(S)) · T · diag(P(D))`. Both inverses have closed forms:
//!
//! * `T⁻¹` has diagonal `C₁ = (π + k − 2)/(kπ − 1)` and off-diagonal
//!   `(π − 1)/(kπ − 1)`;
//! * `Π⁻¹ = diag(1/P(D)) · T⁻¹ · diag(P(S))`, i.e.
//!   `Π⁻¹ᵢⱼ = T⁻¹ᵢⱼ · P(S = j) / P(D = i)`.
//!
//! The corrected risk of the group models `f₁..f_k` is then
//! `Σₖ Σⱼ wₖⱼ · mean_{i: Sᵢ = j} L(fₖ(xᵢ), yᵢ)` with
//! `wₖⱼ = Π⁻¹ₖⱼ · P̂(D = k)`. Weights may be negative and are used as-is.

use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Lower bound applied to recovered marginal entries.
pub const MARGINAL_FLOOR: f64 = 1e-3;

fn check_pi(pi: f64, cardinality: usize) -> Result<()> {
    if cardinality < 2 {
        return Err(Error::InvalidInput(format!(
            "sensitive cardinality must be at least 2, got {cardinality}"
        )));
    }
    if pi.is_nan() || pi <= 1.0 / cardinality as f64 {
        return Err(Error::SingularNoise { pi, cardinality });
    }
    if pi > 1.0 {
        return Err(Error::InvalidInput(format!("keep probability {pi} exceeds 1")));
    }
    Ok(())
}

fn pi_bar(pi: f64, cardinality: usize) -> f64 {
    (1.0 - pi) / (cardinality as f64 - 1.0)
}

/// Scaling factor `C₁ = (π + k − 2)/(kπ − 1)`.
pub fn c1(pi: f64, cardinality: usize) -> Result<f64> {
    check_pi(pi, cardinality)?;
    let k = cardinality as f64;
    Ok((pi + k - 2.0) / (k * pi - 1.0))
}

/// Off-diagonal entry of `T⁻¹`, `(π − 1)/(kπ − 1)`.
pub fn c2(pi: f64, cardinality: usize) -> Result<f64> {
    check_pi(pi, cardinality)?;
    let k = cardinality as f64;
    Ok((pi - 1.0) / (k * pi - 1.0))
}

/// Forward marginal map `T`: diagonal π, off-diagonal π̄.
pub fn t_forward(pi: f64, cardinality: usize) -> Result<Matrix> {
    check_pi(pi, cardinality)?;
    let pb = pi_bar(pi, cardinality);
    Ok(Matrix::from_fn(cardinality, |i, j| if i == j { pi } else { pb }))
}

pub fn t_inverse(pi: f64, cardinality: usize) -> Result<Matrix> {
    let diag = c1(pi, cardinality)?;
    let off = c2(pi, cardinality)?;
    Ok(Matrix::from_fn(cardinality, |i, j| if i == j { diag } else { off }))
}

/// `P(S) = T · p`, evaluated entrywise as `π pⱼ + Σ_{l≠j} π̄ pₗ`.
fn privatized_marginal(pi: f64, p_d: &[f64]) -> Vec<f64> {
    let pb = pi_bar(pi, p_d.len());
    (0..p_d.len())
        .map(|j| {
            p_d.iter()
                .enumerate()
                .map(|(l, &p)| if l == j { pi * p } else { pb * p })
                .sum()
        })
        .collect()
}

fn check_simplex(p: &[f64], name: &str) -> Result<()> {
    if p.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::InvalidInput(format!("{name} has negative or non-finite entries")));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidInput(format!("{name} sums to {total}, not 1")));
    }
    Ok(())
}

/// Forward conditional map `Π`: row i is the posterior `P(D = · | S = i)`.
pub fn pi_forward(pi: f64, p_d: &[f64]) -> Result<Matrix> {
    let k = p_d.len();
    check_pi(pi, k)?;
    check_simplex(p_d, "P(D)")?;
    let pb = pi_bar(pi, k);
    let p_s = privatized_marginal(pi, p_d);
    Ok(Matrix::from_fn(k, |i, j| {
        let q = if i == j { pi } else { pb };
        q * p_d[j] / p_s[i]
    }))
}

pub fn pi_inverse(pi: f64, p_d: &[f64]) -> Result<Matrix> {
    let k = p_d.len();
    check_pi(pi, k)?;
    check_simplex(p_d, "P(D)")?;
    if let Some(i) = p_d.iter().position(|&p| p <= 0.0) {
        return Err(Error::InvalidInput(format!(
            "P(D = {i}) is zero; the conditional correction needs every level present"
        )));
    }
    let t_inv = t_inverse(pi, k)?;
    let p_s = privatized_marginal(pi, p_d);
    Ok(Matrix::from_fn(k, |i, j| t_inv[(i, j)] * (p_s[j] / p_d[i])))
}

/// Result of inverting the privatized marginal.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginalRecovery {
    /// `T⁻¹ · P(S)` before any clamping.
    pub raw: Vec<f64>,
    /// Recovered `P(D)`, on the simplex with entries ≥ [`MARGINAL_FLOOR`].
    pub p_d: Vec<f64>,
    /// True when at least one entry had to be lifted to the floor.
    pub clamped: bool,
}

/// `P̂(D) = T⁻¹ · P̂(S)`, clamped to the floor when the finite-sample
/// estimate leaves the simplex.
pub fn recover_marginal(p_s: &[f64], pi: f64) -> Result<MarginalRecovery> {
    check_simplex(p_s, "P(S)")?;
    let t_inv = t_inverse(pi, p_s.len())?;
    let raw = t_inv.mul_vec(p_s);
    if raw.iter().all(|&v| v >= MARGINAL_FLOOR) {
        return Ok(MarginalRecovery {
            p_d: raw.clone(),
            raw,
            clamped: false,
        });
    }
    Ok(MarginalRecovery {
        p_d: clamp_to_floor(&raw, MARGINAL_FLOOR),
        raw,
        clamped: true,
    })
}

/// Lifts entries below `floor` to exactly `floor` and rescales the rest so
/// the vector sums to one, repeating while the rescaling pushes further
/// entries under the floor.
fn clamp_to_floor(raw: &[f64], floor: f64) -> Vec<f64> {
    let k = raw.len();
    let mut pinned = vec![false; k];
    loop {
        let free_mass: f64 = raw
            .iter()
            .zip(&pinned)
            .filter(|(_, p)| !**p)
            .map(|(v, _)| v.max(0.0))
            .sum();
        let budget = 1.0 - floor * pinned.iter().filter(|p| **p).count() as f64;
        let free_count = pinned.iter().filter(|p| !**p).count();
        let out: Vec<f64> = raw
            .iter()
            .zip(&pinned)
            .map(|(&v, &p)| {
                if p {
                    floor
                } else if free_mass > 0.0 {
                    v.max(0.0) * budget / free_mass
                } else {
                    budget / free_count as f64
                }
            })
            .collect();
        let mut changed = false;
        for i in 0..k {
            if !pinned[i] && out[i] < floor {
                pinned[i] = true;
                changed = true;
            }
        }
        if !changed {
            return out;
        }
    }
}

/// Correction matrices for one noise level and one observed `S` sample.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrectionMatrices {
    pub t_inv: Matrix,
    pub pi_inv: Matrix,
    /// Recovered (possibly clamped) `P̂(D)`.
    pub p_d: Vec<f64>,
    /// Empirical `P̂(S)`.
    pub p_s: Vec<f64>,
    pub c1: f64,
    /// True when marginal recovery had to clamp.
    pub clamped: bool,
}

/// Weight table of the corrected empirical risk.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrectionWeights {
    pub matrices: CorrectionMatrices,
    /// `weights[(k, j)]` multiplies the mean loss of model k over records with `S = j`.
    pub weights: Matrix,
    pub counts: Vec<usize>,
}

/// Builds `T⁻¹`, `Π⁻¹`, the recovered marginal and the weight table
/// `wₖⱼ = Π⁻¹ₖⱼ · P̂(D = k)` from the observed level counts of `S`.
pub fn corrected_risk_weights(s_counts: &[usize], pi: f64) -> Result<CorrectionWeights> {
    let k = s_counts.len();
    check_pi(pi, k)?;
    if let Some(level) = s_counts.iter().position(|&c| c == 0) {
        return Err(Error::EmptyLevel { level });
    }
    let n: usize = s_counts.iter().sum();
    let p_s: Vec<f64> = s_counts.iter().map(|&c| c as f64 / n as f64).collect();
    let recovery = recover_marginal(&p_s, pi)?;
    let t_inv = t_inverse(pi, k)?;
    let pi_inv = pi_inverse(pi, &recovery.p_d)?;
    let weights = Matrix::from_fn(k, |kk, j| pi_inv[(kk, j)] * recovery.p_d[kk]);
    Ok(CorrectionWeights {
        matrices: CorrectionMatrices {
            t_inv,
            pi_inv,
            p_d: recovery.p_d,
            p_s,
            c1: c1(pi, k)?,
            clamped: recovery.clamped,
        },
        weights,
        counts: s_counts.to_vec(),
    })
}

/// The uncorrected, group-stratified table used when the true attribute is
/// observed: `wₖⱼ = 1{k = j} · nₖ / n`.
pub fn stratified_weights(counts: &[usize]) -> Result<Matrix> {
    if let Some(level) = counts.iter().position(|&c| c == 0) {
        return Err(Error::EmptyLevel { level });
    }
    let n: usize = counts.iter().sum();
    Ok(Matrix::from_fn(counts.len(), |k, j| {
        if k == j {
            counts[k] as f64 / n as f64
        } else {
            0.0
        }
    }))
}

/// Corrected risk from per-(model, level) mean losses:
/// `Σₖ Σⱼ wₖⱼ · mean_losses[k][j]`.
pub fn corrected_risk(weights: &Matrix, mean_losses: &[Vec<f64>]) -> f64 {
    let k = weights.size();
    (0..k)
        .map(|m| (0..k).map(|j| weights[(m, j)] * mean_losses[m][j]).sum::<f64>())
        .sum()
}

/// Spreads a weight table onto records: record i (observed level gᵢ)
/// gets weight `w[(k, gᵢ)] / n_{gᵢ}` for model k.
pub fn record_weights(weights: &Matrix, counts: &[usize], groups: &[usize]) -> Vec<Vec<f64>> {
    (0..weights.size())
        .map(|k| {
            groups
                .iter()
                .map(|&g| weights[(k, g)] / counts[g] as f64)
                .collect()
        })
        .collect()
}
