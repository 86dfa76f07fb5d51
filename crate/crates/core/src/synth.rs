//! Synthetic data-generating processes with closed-form oracles.
//!
//! The pricing design has two covariates, age and smoker status, and a
//! binary sensitive attribute (level 0 = male, 1 = female) that is
//! correlated with smoking. Claims cost
//! `100 + 4·age + 100·smoker + 120·female + 200·female·1[20 ≤ age ≤ 40]`
//! plus Gaussian noise.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::data::{Dataset, Record, SensitiveLevel, Task};
use crate::error::{Error, Result};
use crate::model::sigmoid;
use crate::rng;

pub const MALE: usize = 0;
pub const FEMALE: usize = 1;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n: usize,
    pub seed: u64,
    pub sigma: f64,
    pub age_range: (i64, i64),
    pub p_smoker: f64,
    pub p_female: f64,
    pub p_female_given_smoker: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n: 5000,
            seed: 0,
            sigma: 40.0,
            age_range: (18, 80),
            p_smoker: 0.3,
            p_female: 0.45,
            p_female_given_smoker: 0.8,
        }
    }
}

impl SynthConfig {
    /// `P(female | non-smoker)` implied by the marginal constraints.
    pub fn p_female_given_nonsmoker(&self) -> f64 {
        (self.p_female - self.p_female_given_smoker * self.p_smoker) / (1.0 - self.p_smoker)
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !unit(self.p_smoker) || !unit(self.p_female) || !unit(self.p_female_given_smoker) || self.p_smoker == 1.0 {
            return Err(Error::InvalidInput("synthetic probabilities must lie in [0, 1]".into()));
        }
        let ns = self.p_female_given_nonsmoker();
        if !(-1e-12..=1.0 + 1e-12).contains(&ns) {
            return Err(Error::InvalidInput(format!(
                "implied P(female | non-smoker) = {ns} is not a probability"
            )));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::InvalidInput("sigma must be finite and non-negative".into()));
        }
        if self.age_range.0 > self.age_range.1 {
            return Err(Error::InvalidInput("empty age range".into()));
        }
        if self.n == 0 {
            return Err(Error::InvalidInput("n must be positive".into()));
        }
        Ok(())
    }

    fn check_age(&self, age: i64) -> Result<()> {
        if age < self.age_range.0 || age > self.age_range.1 {
            return Err(Error::InvalidInput(format!(
                "age {age} outside [{}, {}]",
                self.age_range.0, self.age_range.1
            )));
        }
        Ok(())
    }
}

/// Noise-free mean claim cost on the default age support.
pub fn dgp_mean(age: i64, smoker: bool, female: bool) -> Result<f64> {
    SynthConfig::default().check_age(age)?;
    Ok(mean_unchecked(age, smoker, female))
}

fn mean_unchecked(age: i64, smoker: bool, female: bool) -> f64 {
    let band = female && (20..=40).contains(&age);
    100.0
        + 4.0 * age as f64
        + if smoker { 100.0 } else { 0.0 }
        + if female { 120.0 } else { 0.0 }
        + if band { 200.0 } else { 0.0 }
}

fn draw_covariates(cfg: &SynthConfig, r: &mut rng::StreamRng) -> (i64, bool, bool) {
    let age = r.gen_range(cfg.age_range.0..=cfg.age_range.1);
    let smoker = r.gen::<f64>() < cfg.p_smoker;
    let pf = if smoker {
        cfg.p_female_given_smoker
    } else {
        cfg.p_female_given_nonsmoker()
    };
    let female = r.gen::<f64>() < pf;
    (age, smoker, female)
}

fn covariate_record(age: i64, smoker: bool, female: bool, y: f64) -> Record {
    Record {
        x: vec![age as f64, if smoker { 1.0 } else { 0.0 }],
        y,
        d: Some(SensitiveLevel(if female { FEMALE } else { MALE })),
        s: None,
    }
}

fn feature_names() -> Vec<String> {
    vec!["age".into(), "smoker".into()]
}

/// Draws `cfg.n` records with features `[age, smoker]`, outcome and true
/// sensitive level. Deterministic in `cfg.seed`.
pub fn dgp_sample(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut r = rng::stream(cfg.seed, 0);
    let records = (0..cfg.n)
        .map(|_| {
            let (age, smoker, female) = draw_covariates(cfg, &mut r);
            let z: f64 = StandardNormal.sample(&mut r);
            covariate_record(age, smoker, female, mean_unchecked(age, smoker, female) + cfg.sigma * z)
        })
        .collect();
    Dataset::new(records, feature_names(), 2, Task::Regression)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnalyticPremiums {
    /// Indexed by sensitive level (male, female).
    pub best_estimate: [f64; 2],
    pub unawareness: f64,
    pub dfp: f64,
}

/// Best-estimate, unawareness and discrimination-free premiums of the
/// default design, with reference weights equal to the population
/// marginal `(0.55, 0.45)`.
pub fn analytic_premiums(age: i64, smoker: bool) -> Result<AnalyticPremiums> {
    analytic_premiums_with(&SynthConfig::default(), age, smoker)
}

pub fn analytic_premiums_with(cfg: &SynthConfig, age: i64, smoker: bool) -> Result<AnalyticPremiums> {
    cfg.validate()?;
    cfg.check_age(age)?;
    let m = mean_unchecked(age, smoker, false);
    let f = mean_unchecked(age, smoker, true);
    let pf = if smoker {
        cfg.p_female_given_smoker
    } else {
        cfg.p_female_given_nonsmoker()
    };
    Ok(AnalyticPremiums {
        best_estimate: [m, f],
        unawareness: (1.0 - pf) * m + pf * f,
        dfp: (1.0 - cfg.p_female) * m + cfg.p_female * f,
    })
}

/// Every `(age, smoker, level)` cell of the default design.
pub fn design_grid() -> Vec<(i64, bool, usize)> {
    let cfg = SynthConfig::default();
    let mut cells = Vec::new();
    for age in cfg.age_range.0..=cfg.age_range.1 {
        for smoker in [false, true] {
            for level in [MALE, FEMALE] {
                cells.push((age, smoker, level));
            }
        }
    }
    cells
}

/// Claim probability of the classification analogue: same covariates,
/// with the regression mean's structure on the logit scale.
pub fn classification_mean(age: i64, smoker: bool, female: bool) -> Result<f64> {
    SynthConfig::default().check_age(age)?;
    Ok(classification_unchecked(age, smoker, female))
}

fn classification_unchecked(age: i64, smoker: bool, female: bool) -> f64 {
    let band = female && (20..=40).contains(&age);
    let logit = -1.5
        + 0.03 * (age as f64 - 49.0)
        + if smoker { 1.0 } else { 0.0 }
        + if female { 1.2 } else { 0.0 }
        + if band { 1.5 } else { 0.0 };
    sigmoid(logit)
}

/// Binary-outcome analogue of [`dgp_sample`]; `cfg.sigma` is ignored.
pub fn classification_sample(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut r = rng::stream(cfg.seed, 0);
    let records = (0..cfg.n)
        .map(|_| {
            let (age, smoker, female) = draw_covariates(cfg, &mut r);
            let p = classification_unchecked(age, smoker, female);
            let y = if r.gen::<f64>() < p { 1.0 } else { 0.0 };
            covariate_record(age, smoker, female, y)
        })
        .collect();
    Dataset::new(records, feature_names(), 2, Task::Classification)
}

/// A design with a region where the sensitive level is known with
/// certainty. Records fall uniformly into four cells (one-hot features
/// `cell_0..cell_3`); cell 0 has `P(D = 1) = anchor_purity`, the others
/// 0.55, 0.45 and 0.3.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorDesign {
    pub n: usize,
    pub seed: u64,
    pub anchor_purity: f64,
}

impl AnchorDesign {
    pub const PURITIES: [f64; 3] = [0.55, 0.45, 0.3];

    pub fn new(n: usize, seed: u64) -> Self {
        AnchorDesign {
            n,
            seed,
            anchor_purity: 1.0,
        }
    }

    pub fn cell_purity(&self, cell: usize) -> f64 {
        if cell == 0 {
            self.anchor_purity
        } else {
            Self::PURITIES[cell - 1]
        }
    }

    pub fn sample(&self) -> Result<Dataset> {
        if !(0.0..=1.0).contains(&self.anchor_purity) {
            return Err(Error::InvalidInput("anchor purity must lie in [0, 1]".into()));
        }
        let mut r = rng::stream(self.seed, 0);
        let records = (0..self.n)
            .map(|_| {
                let cell = r.gen_range(0..4usize);
                let d = usize::from(r.gen::<f64>() < self.cell_purity(cell));
                let z: f64 = StandardNormal.sample(&mut r);
                let mut x = vec![0.0; 4];
                x[cell] = 1.0;
                Record {
                    x,
                    y: 100.0 + 50.0 * cell as f64 + 80.0 * d as f64 + 20.0 * z,
                    d: Some(SensitiveLevel(d)),
                    s: None,
                }
            })
            .collect();
        let names = (0..4).map(|c| format!("cell_{c}")).collect();
        Dataset::new(records, names, 2, Task::Regression)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{empirical_marginal, Attribute};

    #[test]
    fn mean_examples() {
        assert_eq!(dgp_mean(30, true, true).unwrap(), 640.0);
        assert_eq!(dgp_mean(50, false, false).unwrap(), 300.0);
        assert_eq!(dgp_mean(18, false, false).unwrap(), 172.0);
        assert_eq!(dgp_mean(20, false, true).unwrap(), 500.0);
        assert_eq!(dgp_mean(40, false, true).unwrap(), 580.0);
        assert_eq!(dgp_mean(41, false, true).unwrap(), 384.0);
        assert!(dgp_mean(17, false, false).is_err());
        assert!(dgp_mean(81, true, true).is_err());
    }

    #[test]
    fn implied_conditional() {
        let cfg = SynthConfig::default();
        assert!((cfg.p_female_given_nonsmoker() - 0.3).abs() < 1e-15);
        let bad = SynthConfig {
            p_female_given_smoker: 0.1,
            p_female: 0.9,
            ..cfg
        };
        assert!(bad.validate().is_err());
        assert!(dgp_sample(&bad).is_err());
    }

    #[test]
    fn analytic_examples() {
        let a = analytic_premiums(30, true).unwrap();
        assert_eq!(a.best_estimate, [320.0, 640.0]);
        assert!((a.unawareness - 576.0).abs() < 1e-9);
        assert!((a.dfp - 464.0).abs() < 1e-9);
        let b = analytic_premiums(50, false).unwrap();
        assert_eq!(b.best_estimate, [300.0, 420.0]);
        assert!((b.unawareness - 336.0).abs() < 1e-9);
        assert!((b.dfp - 354.0).abs() < 1e-9);
    }

    #[test]
    fn analytic_dfp_is_reference_combination_everywhere() {
        for (age, smoker, _) in design_grid() {
            let a = analytic_premiums(age, smoker).unwrap();
            let want = 0.55 * a.best_estimate[0] + 0.45 * a.best_estimate[1];
            assert!((a.dfp - want).abs() < 1e-9);
            let lo = a.best_estimate[0].min(a.best_estimate[1]);
            let hi = a.best_estimate[0].max(a.best_estimate[1]);
            assert!(lo <= a.dfp && a.dfp <= hi);
        }
        assert_eq!(design_grid().len(), 252);
    }

    #[test]
    fn noiseless_sample_hits_means() {
        let cfg = SynthConfig {
            n: 3000,
            sigma: 0.0,
            seed: 11,
            ..SynthConfig::default()
        };
        let ds = dgp_sample(&cfg).unwrap();
        for r in ds.records() {
            let female = r.d.unwrap().index() == FEMALE;
            assert_eq!(r.y, dgp_mean(r.x[0] as i64, r.x[1] == 1.0, female).unwrap());
        }
    }

    #[test]
    fn sampling_is_deterministic() {
        let cfg = SynthConfig {
            n: 200,
            seed: 3,
            ..SynthConfig::default()
        };
        assert_eq!(dgp_sample(&cfg).unwrap(), dgp_sample(&cfg).unwrap());
        let other = SynthConfig { seed: 4, ..cfg.clone() };
        assert_ne!(dgp_sample(&cfg).unwrap(), dgp_sample(&other).unwrap());
    }

    #[test]
    fn marginals_concentrate() {
        let n = 200_000;
        let cfg = SynthConfig {
            n,
            seed: 7,
            ..SynthConfig::default()
        };
        let ds = dgp_sample(&cfg).unwrap();
        let pf = empirical_marginal(&ds, Attribute::True).unwrap()[FEMALE];
        assert!((pf - 0.45).abs() < 3.0 * (0.45f64 * 0.55 / n as f64).sqrt());
        let ps = ds.records().iter().filter(|r| r.x[1] == 1.0).count() as f64 / n as f64;
        assert!((ps - 0.3).abs() < 3.0 * (0.3f64 * 0.7 / n as f64).sqrt());
        let ages: Vec<f64> = ds.records().iter().map(|r| r.x[0]).collect();
        assert!(ages.iter().all(|&a| (18.0..=80.0).contains(&a) && a.fract() == 0.0));
    }

    #[test]
    fn classification_outcomes_are_binary() {
        let cfg = SynthConfig {
            n: 500,
            seed: 1,
            ..SynthConfig::default()
        };
        let ds = classification_sample(&cfg).unwrap();
        assert_eq!(ds.task(), Task::Classification);
        assert!(ds.records().iter().all(|r| r.y == 0.0 || r.y == 1.0));
        let p = classification_mean(30, true, true).unwrap();
        assert!(p > 0.0 && p < 1.0);
    }

    #[test]
    fn anchor_cell_is_pure() {
        let ds = AnchorDesign::new(2000, 5).sample().unwrap();
        for r in ds.records() {
            if r.x[0] == 1.0 {
                assert_eq!(r.d.unwrap().index(), 1);
            }
        }
    }
}
