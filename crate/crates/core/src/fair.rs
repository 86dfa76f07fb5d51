//! Group-specific pricing models trained with the true sensitive attribute
//! or with its privatized version, and the premiums derived from them.

use std::io::Write;

use crate::correction::{corrected_risk_weights, record_weights, stratified_weights, CorrectionWeights};
use crate::data::{level_counts, Attribute, Dataset, Task};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::{loss, HypothesisSpec, LossKind, ScoreModel};
use crate::noise::{c1_procedure, default_j_star, default_posterior_config, AnchorEstimate};
use crate::rng::streams;
use crate::stats;
use crate::train::{fit_models, TrainConfig, TrainReport, WeightedData};

/// A fixed distribution over sensitive levels used to combine group
/// predictions into a discrimination-free premium.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceWeights(Vec<f64>);

impl ReferenceWeights {
    pub fn new(p: Vec<f64>) -> Result<Self> {
        if p.len() < 2 {
            return Err(Error::InvalidInput("reference weights need at least two levels".into()));
        }
        if p.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::InvalidInput("reference weights must be non-negative".into()));
        }
        let total: f64 = p.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidInput(format!("reference weights sum to {total}, not 1")));
        }
        Ok(ReferenceWeights(p))
    }

    pub fn point_mass(level: usize, cardinality: usize) -> Result<Self> {
        if level >= cardinality {
            return Err(Error::LevelOutOfRange {
                index: level,
                cardinality,
            });
        }
        let mut p = vec![0.0; cardinality];
        p[level] = 1.0;
        Self::new(p)
    }

    pub fn uniform(cardinality: usize) -> Result<Self> {
        Self::new(vec![1.0 / cardinality as f64; cardinality])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// `Σₖ p*ₖ · predictions[k]`.
    pub fn combine(&self, predictions: &[f64]) -> f64 {
        self.0.iter().zip(predictions).map(|(p, f)| p * f).sum()
    }
}

/// One score function per sensitive level, optionally preceded by the
/// insurer's learned transformation of the raw features.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupModelSet {
    pub models: Vec<ScoreModel>,
    pub transformation: Option<ScoreModel>,
    pub task: Task,
}

impl GroupModelSet {
    pub fn cardinality(&self) -> usize {
        self.models.len()
    }

    /// Input of the group models for raw features `x`.
    pub fn represent(&self, x: &[f64]) -> Result<Vec<f64>> {
        match &self.transformation {
            Some(t) => t.representation(x),
            None => Ok(x.to_vec()),
        }
    }

    /// `f_k(x)` for every level k.
    pub fn predict_groups(&self, x: &[f64]) -> Result<Vec<f64>> {
        let xt = self.represent(x)?;
        self.models.iter().map(|m| m.predict(&xt)).collect()
    }

    pub const FORMAT_HEADER: &'static str = "fairprice-groupmodels v1";

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "{}\ntask {}\nmodels {}\ntransformation {}\n",
            Self::FORMAT_HEADER,
            self.task.as_str(),
            self.models.len(),
            u8::from(self.transformation.is_some())
        );
        if let Some(t) = &self.transformation {
            out.push_str(&t.to_text());
        }
        for m in &self.models {
            out.push_str(&m.to_text());
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let mut header = |key: &str| -> Result<String> {
            let line = lines
                .next()
                .ok_or_else(|| Error::InvalidInput("group model text truncated".into()))?;
            if key.is_empty() {
                return Ok(line.trim().to_string());
            }
            line.strip_prefix(key)
                .map(|v| v.trim().to_string())
                .ok_or_else(|| Error::InvalidInput(format!("expected `{key}`, found `{line}`")))
        };
        if header("")? != Self::FORMAT_HEADER {
            return Err(Error::InvalidInput("not a fairprice-groupmodels v1 document".into()));
        }
        let task: Task = header("task")?.parse()?;
        let count: usize = header("models")?
            .parse()
            .map_err(|_| Error::InvalidInput("bad model count".into()))?;
        let has_t = header("transformation")? == "1";
        let rest: Vec<&str> = lines.collect();
        let mut blocks = rest.split(|l| l.trim() == "end").filter(|b| b.iter().any(|l| !l.trim().is_empty()));
        let mut next_model = || -> Result<ScoreModel> {
            let block = blocks
                .next()
                .ok_or_else(|| Error::InvalidInput("group model text truncated".into()))?;
            ScoreModel::from_text(&format!("{}\nend\n", block.join("\n")))
        };
        let transformation = if has_t { Some(next_model()?) } else { None };
        let models = (0..count).map(|_| next_model()).collect::<Result<Vec<_>>>()?;
        Ok(GroupModelSet {
            models,
            transformation,
            task,
        })
    }
}

/// Per-record premiums. Raw values are kept; floored views are available
/// for regression, where negative premiums are not meaningful.
#[derive(Debug, Clone, PartialEq)]
pub struct PremiumReport {
    /// `best_estimate[i][k] = f_k(x_i)`.
    pub best_estimate: Vec<Vec<f64>>,
    pub unawareness: Option<Vec<f64>>,
    pub dfp: Vec<f64>,
    pub p_star: ReferenceWeights,
    pub task: Task,
}

impl PremiumReport {
    pub fn len(&self) -> usize {
        self.dfp.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dfp.is_empty()
    }

    fn floor(&self, v: f64) -> f64 {
        match self.task {
            Task::Regression => v.max(0.0),
            Task::Classification => v,
        }
    }

    /// Discrimination-free premiums as reported (floored at 0 for regression).
    pub fn dfp_reported(&self) -> Vec<f64> {
        self.dfp.iter().map(|&v| self.floor(v)).collect()
    }

    pub fn with_unawareness(mut self, model: &ScoreModel, data: &Dataset) -> Result<Self> {
        let preds = data.records().iter().map(|r| model.predict(&r.x)).collect::<Result<Vec<_>>>()?;
        self.unawareness = Some(preds);
        Ok(self)
    }

    /// CSV with reported (floored) values followed by the raw ones.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let k = self.p_star.len();
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["id".to_string()];
        header.extend((0..k).map(|j| format!("mu_{j}")));
        if self.unawareness.is_some() {
            header.push("unawareness".into());
        }
        header.push("dfp".into());
        header.extend((0..k).map(|j| format!("mu_{j}_raw")));
        if self.unawareness.is_some() {
            header.push("unawareness_raw".into());
        }
        header.push("dfp_raw".into());
        w.write_record(&header)?;
        for i in 0..self.len() {
            let be = &self.best_estimate[i];
            let mut row = vec![i.to_string()];
            row.extend(be.iter().map(|&v| self.floor(v).to_string()));
            if let Some(u) = &self.unawareness {
                row.push(self.floor(u[i]).to_string());
            }
            row.push(self.floor(self.dfp[i]).to_string());
            row.extend(be.iter().map(|v| v.to_string()));
            if let Some(u) = &self.unawareness {
                row.push(u[i].to_string());
            }
            row.push(self.dfp[i].to_string());
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Group predictions and their reference-weighted combination for every
/// record of `data`. Sensitive columns of `data` are never read.
pub fn premium_report(models: &GroupModelSet, p_star: &ReferenceWeights, data: &Dataset) -> Result<PremiumReport> {
    if p_star.len() != models.cardinality() {
        return Err(Error::DimensionMismatch {
            expected: models.cardinality(),
            actual: p_star.len(),
        });
    }
    let mut best_estimate = Vec::with_capacity(data.len());
    let mut dfp = Vec::with_capacity(data.len());
    for r in data.records() {
        let preds = models.predict_groups(&r.x)?;
        dfp.push(p_star.combine(&preds));
        best_estimate.push(preds);
    }
    Ok(PremiumReport {
        best_estimate,
        unawareness: None,
        dfp,
        p_star: p_star.clone(),
        task: models.task,
    })
}

/// How the keep probability of the privatization is obtained.
#[derive(Debug, Clone, PartialEq)]
pub enum NoiseSpec {
    Known(f64),
    Estimate(EstimateOptions),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimateOptions {
    pub n1: usize,
    /// Anchor level; defaults to the most frequent observed level.
    pub j_star: Option<usize>,
    /// Covariates for the posterior fit; defaults to the training features.
    pub x_star: Option<Vec<Vec<f64>>>,
    pub posterior: TrainConfig,
}

impl EstimateOptions {
    pub fn new(n1: usize) -> Self {
        EstimateOptions {
            n1,
            j_star: None,
            x_star: None,
            posterior: default_posterior_config(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseMode {
    /// Trained on the true attribute.
    TrueAttribute,
    Known,
    Estimated,
}

impl NoiseMode {
    pub fn as_str(self) -> &'static str {
        match self {
            NoiseMode::TrueAttribute => "true_attribute",
            NoiseMode::Known => "known",
            NoiseMode::Estimated => "estimated",
        }
    }
}

/// Everything a training pipeline produces.
#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub models: GroupModelSet,
    /// Premiums on the training data.
    pub report: PremiumReport,
    pub p_star: ReferenceWeights,
    /// `(model, level)` weight table of the empirical risk.
    pub weight_table: Matrix,
    pub correction: Option<CorrectionWeights>,
    pub noise_mode: NoiseMode,
    pub pi_used: f64,
    pub anchor: Option<AnchorEstimate>,
    pub training: TrainReport,
}

fn check_task(data: &Dataset, kind: LossKind) -> Result<()> {
    let expected = match data.task() {
        Task::Regression => LossKind::SquaredError,
        Task::Classification => LossKind::BinaryCrossEntropy,
    };
    if kind != expected {
        return Err(Error::InvalidInput(format!(
            "{} loss does not fit a {} task",
            kind.as_str(),
            data.task().as_str()
        )));
    }
    Ok(())
}

/// Trains one model per row of `table`, record `i` weighted by
/// `table[(k, gᵢ)] / n_{gᵢ}` in model k.
fn fit_groups(
    train: &Dataset,
    groups: &[usize],
    counts: &[usize],
    table: &Matrix,
    spec: &HypothesisSpec,
    kind: LossKind,
    cfg: &TrainConfig,
) -> Result<(Vec<ScoreModel>, TrainReport)> {
    let x = train.features();
    let y = train.outcomes();
    let weights = record_weights(table, counts, groups);
    let streams: Vec<u64> = (0..table.size() as u64).map(|k| streams::GROUP_INIT + k).collect();
    fit_models(
        spec,
        WeightedData {
            x: &x,
            y: &y,
            weights: &weights,
        },
        kind,
        cfg,
        &streams,
    )
}

fn finish(
    train: &Dataset,
    models: Vec<ScoreModel>,
    training: TrainReport,
    p_star: ReferenceWeights,
    weight_table: Matrix,
) -> Result<(GroupModelSet, PremiumReport, ReferenceWeights, Matrix, TrainReport)> {
    let set = GroupModelSet {
        models,
        transformation: None,
        task: train.task(),
    };
    let report = premium_report(&set, &p_star, train)?;
    Ok((set, report, p_star, weight_table, training))
}

/// Trains group models on the true attribute: model k fits the records
/// with `d = k` only. `p_star` defaults to the empirical `P̂(D)`.
pub fn mptp(
    train: &Dataset,
    spec: &HypothesisSpec,
    kind: LossKind,
    cfg: &TrainConfig,
    p_star: Option<ReferenceWeights>,
) -> Result<FitOutcome> {
    check_task(train, kind)?;
    let k = train.sensitive_cardinality();
    let groups: Vec<usize> = train.levels(Attribute::True)?.iter().map(|l| l.index()).collect();
    let counts = level_counts(&train.levels(Attribute::True)?, k);
    let table = stratified_weights(&counts)?;
    let n = train.len() as f64;
    let p_star = match p_star {
        Some(p) => p,
        None => ReferenceWeights::new(counts.iter().map(|&c| c as f64 / n).collect())?,
    };
    check_reference(&p_star, k)?;
    let (models, training) = fit_groups(train, &groups, &counts, &table, spec, kind, cfg)?;
    let (models, report, p_star, weight_table, training) = finish(train, models, training, p_star, table)?;
    Ok(FitOutcome {
        models,
        report,
        p_star,
        weight_table,
        correction: None,
        noise_mode: NoiseMode::TrueAttribute,
        pi_used: 1.0,
        anchor: None,
        training,
    })
}

fn check_reference(p: &ReferenceWeights, k: usize) -> Result<()> {
    if p.len() != k {
        return Err(Error::DimensionMismatch {
            expected: k,
            actual: p.len(),
        });
    }
    Ok(())
}

/// Trains group models from privatized labels by minimizing the corrected
/// risk. With [`NoiseSpec::Estimate`] the keep probability is first
/// estimated from anchor regions. `p_star` defaults to the recovered
/// `P̂(D)`.
pub fn mptp_ldp(
    train: &Dataset,
    noise: &NoiseSpec,
    spec: &HypothesisSpec,
    kind: LossKind,
    cfg: &TrainConfig,
    p_star: Option<ReferenceWeights>,
) -> Result<FitOutcome> {
    check_task(train, kind)?;
    let k = train.sensitive_cardinality();
    let s = train.levels(Attribute::Privatized)?;
    let groups: Vec<usize> = s.iter().map(|l| l.index()).collect();
    let counts = level_counts(&s, k);
    let (pi, mode, anchor) = match noise {
        NoiseSpec::Known(pi) => (*pi, NoiseMode::Known, None),
        NoiseSpec::Estimate(opts) => {
            let features;
            let x_star = match &opts.x_star {
                Some(x) => x,
                None => {
                    features = train.features();
                    &features
                }
            };
            let j_star = opts.j_star.unwrap_or_else(|| default_j_star(&s, k));
            let est = c1_procedure(x_star, &s, j_star, k, opts.n1, &opts.posterior)?;
            (est.pi_hat, NoiseMode::Estimated, Some(est))
        }
    };
    let correction = corrected_risk_weights(&counts, pi)?;
    let p_star = match p_star {
        Some(p) => p,
        None => ReferenceWeights::new(correction.matrices.p_d.clone()).or_else(|_| {
            let total: f64 = correction.matrices.p_d.iter().sum();
            ReferenceWeights::new(correction.matrices.p_d.iter().map(|v| v / total).collect())
        })?,
    };
    check_reference(&p_star, k)?;
    let (models, training) = fit_groups(train, &groups, &counts, &correction.weights, spec, kind, cfg)?;
    let (models, report, p_star, weight_table, training) =
        finish(train, models, training, p_star, correction.weights.clone())?;
    Ok(FitOutcome {
        models,
        report,
        p_star,
        weight_table,
        correction: Some(correction),
        noise_mode: mode,
        pi_used: pi,
        anchor,
        training,
    })
}

/// A single model of `y` on `x`, ignoring every sensitive column.
pub fn unawareness_model(
    train: &Dataset,
    spec: &HypothesisSpec,
    kind: LossKind,
    cfg: &TrainConfig,
) -> Result<(ScoreModel, TrainReport)> {
    check_task(train, kind)?;
    let x = train.features();
    let y = train.outcomes();
    let w = vec![vec![1.0; y.len()]];
    let (mut models, report) = fit_models(
        spec,
        WeightedData {
            x: &x,
            y: &y,
            weights: &w,
        },
        kind,
        cfg,
        &[streams::UNAWARE_INIT],
    )?;
    Ok((models.remove(0), report))
}

/// Supervised network whose last hidden layer serves as the insurer's
/// feature transformation.
pub fn train_transformation(
    train: &Dataset,
    hidden: &[usize],
    kind: LossKind,
    cfg: &TrainConfig,
) -> Result<(ScoreModel, TrainReport)> {
    check_task(train, kind)?;
    if hidden.is_empty() {
        return Err(Error::InvalidInput("a transformation needs at least one hidden layer".into()));
    }
    let x = train.features();
    let y = train.outcomes();
    let w = vec![vec![1.0; y.len()]];
    let (mut models, report) = fit_models(
        &HypothesisSpec::Net {
            hidden: hidden.to_vec(),
        },
        WeightedData {
            x: &x,
            y: &y,
            weights: &w,
        },
        kind,
        cfg,
        &[streams::TRANSFORM_INIT],
    )?;
    Ok((models.remove(0), report))
}

/// Replaces the features of `data` by the transformation's representation.
pub fn transform_dataset(data: &Dataset, transformation: &ScoreModel) -> Result<Dataset> {
    let features = data
        .records()
        .iter()
        .map(|r| transformation.representation(&r.x))
        .collect::<Result<Vec<_>>>()?;
    let q = features.first().map_or(0, Vec::len);
    data.with_features((0..q).map(|j| format!("t{j}")).collect(), features)
}

fn mean_loss(kind: LossKind, preds: &[f64], data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let losses = preds
        .iter()
        .zip(data.records())
        .map(|(&p, r)| loss(kind, p, r.y))
        .collect::<Result<Vec<_>>>()?;
    Ok(stats::order_invariant_sum(&losses) / losses.len() as f64)
}

/// Mean loss of each record's own-group model `f_{dᵢ}`; needs true `d`.
pub fn evaluate_stratified(models: &GroupModelSet, data: &Dataset, kind: LossKind) -> Result<f64> {
    let d = data.levels(Attribute::True)?;
    let preds = data
        .records()
        .iter()
        .zip(&d)
        .map(|(r, l)| {
            let xt = models.represent(&r.x)?;
            models.models[l.index()].predict(&xt)
        })
        .collect::<Result<Vec<_>>>()?;
    mean_loss(kind, &preds, data)
}

/// Mean loss of the discrimination-free premium against the outcome.
pub fn evaluate_dfp(models: &GroupModelSet, p_star: &ReferenceWeights, data: &Dataset, kind: LossKind) -> Result<f64> {
    let report = premium_report(models, p_star, data)?;
    mean_loss(kind, &report.dfp, data)
}

/// Mean loss of a single model.
pub fn evaluate_model(model: &ScoreModel, data: &Dataset, kind: LossKind) -> Result<f64> {
    let preds = data.records().iter().map(|r| model.predict(&r.x)).collect::<Result<Vec<_>>>()?;
    mean_loss(kind, &preds, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Record, SensitiveLevel};
    use crate::model::{Hypothesis, Link, LinearModel, Standardizer, TargetScale};

    fn constant(c: f64) -> ScoreModel {
        ScoreModel::new(
            Hypothesis::Linear(LinearModel::new(vec![0.0], c, Link::Identity)),
            Standardizer::identity(1),
            TargetScale::identity(),
        )
        .unwrap()
    }

    fn set(a: f64, b: f64) -> GroupModelSet {
        GroupModelSet {
            models: vec![constant(a), constant(b)],
            transformation: None,
            task: Task::Regression,
        }
    }

    fn tiny(ys: &[f64], d: &[usize]) -> Dataset {
        let records = ys
            .iter()
            .zip(d)
            .map(|(&y, &d)| Record {
                x: vec![0.0],
                y,
                d: Some(SensitiveLevel(d)),
                s: None,
            })
            .collect();
        Dataset::new(records, vec!["x".into()], 2, Task::Regression).unwrap()
    }

    #[test]
    fn reference_weight_examples() {
        let data = tiny(&[1.0], &[0]);
        let models = set(100.0, 300.0);
        let r = premium_report(&models, &ReferenceWeights::point_mass(1, 2).unwrap(), &data).unwrap();
        assert_eq!(r.dfp[0], 300.0);
        let r = premium_report(&models, &ReferenceWeights::uniform(2).unwrap(), &data).unwrap();
        assert_eq!(r.dfp[0], 200.0);
        assert!(ReferenceWeights::new(vec![0.5, 0.6]).is_err());
        assert!(ReferenceWeights::new(vec![1.5, -0.5]).is_err());
    }

    #[test]
    fn evaluation_examples() {
        let data = tiny(&[0.0, 2.0], &[0, 1]);
        let models = set(0.5, 0.5);
        let got = evaluate_stratified(&models, &data, LossKind::SquaredError).unwrap();
        assert!((got - (0.25 + 2.25) / 2.0).abs() < 1e-12);
        let perfect = set(0.0, 2.0);
        assert_eq!(evaluate_stratified(&perfect, &data, LossKind::SquaredError).unwrap(), 0.0);
        assert_eq!(evaluate_model(&constant(1.0), &data, LossKind::SquaredError).unwrap(), 1.0);
    }

    #[test]
    fn floor_only_in_reported_view() {
        let data = tiny(&[1.0], &[0]);
        let r = premium_report(&set(-10.0, -20.0), &ReferenceWeights::uniform(2).unwrap(), &data).unwrap();
        assert_eq!(r.dfp[0], -15.0);
        assert_eq!(r.dfp_reported()[0], 0.0);
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("id,mu_0,mu_1,dfp,mu_0_raw,mu_1_raw,dfp_raw\n"));
        assert!(text.contains("0,0,0,0,-10,-20,-15"));
    }

    #[test]
    fn group_set_text_round_trip() {
        let s = set(1.5, -2.25);
        assert_eq!(GroupModelSet::from_text(&s.to_text()).unwrap(), s);
    }

    #[test]
    fn task_and_loss_must_agree() {
        let data = tiny(&[1.0, 2.0], &[0, 1]);
        let err = mptp(&data, &HypothesisSpec::Linear, LossKind::BinaryCrossEntropy, &TrainConfig::default(), None);
        assert!(err.is_err());
    }

    #[test]
    fn bias_only_models_fit_group_means() {
        // x is constant, so each model reduces to its bias
        let data = tiny(&[1.0, 3.0, 10.0, 14.0], &[0, 0, 1, 1]);
        let cfg = TrainConfig {
            learning_rate: 0.1,
            epochs: 20_000,
            convergence_tol: 1e-13,
            ..TrainConfig::default()
        };
        let out = mptp(&data, &HypothesisSpec::Linear, LossKind::SquaredError, &cfg, None).unwrap();
        let preds = out.models.predict_groups(&[0.0]).unwrap();
        assert!((preds[0] - 2.0).abs() < 1e-6 && (preds[1] - 12.0).abs() < 1e-6, "{preds:?}");
        assert_eq!(out.p_star.as_slice(), &[0.5, 0.5]);
    }
}
