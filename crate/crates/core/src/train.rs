//! Full-batch gradient descent on signed, per-model weighted risks.
//!
//! Each model `k` minimises `Σᵢ wᵢₖ · L(fₖ(xᵢ), yᵢ)` independently. Rows with
//! identical features are merged into sufficient statistics before the
//! first epoch, which keeps training cost proportional to the number of
//! distinct covariate vectors rather than the number of records.

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::model::{sigmoid, Scratch, Hypothesis, HypothesisSpec, LossKind, ScoreModel, Standardizer, TargetScale, BCE_CLIP};
use crate::{rng, stats};

/// Objective magnitude treated as divergence.
pub const DIVERGENCE_LIMIT: f64 = 1e12;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Multiplier on the `1/√fan_in` initialization bound.
    pub init_scale: f64,
    pub convergence_tol: f64,
    /// Independent initializations per model; the one with the lowest
    /// final training objective is kept.
    pub restarts: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-2,
            epochs: 5000,
            seed: 0,
            init_scale: 1.0,
            convergence_tol: 1e-8,
            restarts: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidInput("learning_rate must be positive".into()));
        }
        if self.epochs == 0 {
            return Err(Error::InvalidInput("epochs must be positive".into()));
        }
        if !(self.init_scale > 0.0 && self.init_scale.is_finite()) {
            return Err(Error::InvalidInput("init_scale must be positive".into()));
        }
        if self.restarts == 0 {
            return Err(Error::InvalidInput("restarts must be positive".into()));
        }
        if !(self.convergence_tol >= 0.0) {
            return Err(Error::InvalidInput("convergence_tol must be non-negative".into()));
        }
        Ok(())
    }
}

/// Training rows shared by all models, with one weight column per model.
#[derive(Debug, Clone, Copy)]
pub struct WeightedData<'a> {
    pub x: &'a [Vec<f64>],
    pub y: &'a [f64],
    /// `weights[k][i]` is record `i`'s weight in model `k`'s objective.
    pub weights: &'a [Vec<f64>],
}

impl WeightedData<'_> {
    fn validate(&self, models: usize, kind: LossKind) -> Result<()> {
        if self.x.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if self.y.len() != self.x.len() {
            return Err(Error::DimensionMismatch {
                expected: self.x.len(),
                actual: self.y.len(),
            });
        }
        if self.weights.len() != models {
            return Err(Error::DimensionMismatch {
                expected: models,
                actual: self.weights.len(),
            });
        }
        for w in self.weights {
            if w.len() != self.x.len() {
                return Err(Error::DimensionMismatch {
                    expected: self.x.len(),
                    actual: w.len(),
                });
            }
            if w.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidInput("non-finite training weight".into()));
            }
        }
        if kind == LossKind::BinaryCrossEntropy && self.y.iter().any(|&t| t != 0.0 && t != 1.0) {
            return Err(Error::InvalidInput("cross-entropy targets must be 0 or 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelTrace {
    pub epochs_run: usize,
    pub converged: bool,
    /// Objective at the start of every epoch, then once after the last update.
    pub objective: Vec<f64>,
}

impl ModelTrace {
    pub fn final_objective(&self) -> f64 {
        *self.objective.last().unwrap_or(&f64::NAN)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub traces: Vec<ModelTrace>,
}

/// A distinct standardized feature vector with the weighted sums
/// `a = Σw`, `b = Σw·t`, `c = Σw·t²` of its records' training targets.
struct Row {
    x: Vec<f64>,
    a: f64,
    b: f64,
    c: f64,
}

fn lexicographic(a: &[f64], b: &[f64]) -> Ordering {
    for (u, v) in a.iter().zip(b) {
        match u.total_cmp(v) {
            Ordering::Equal => continue,
            o => return o,
        }
    }
    Ordering::Equal
}

fn compress(model: &ScoreModel, data: &WeightedData<'_>, weights: &[f64], kind: LossKind) -> Vec<Row> {
    let mut idx: Vec<usize> = (0..data.x.len()).filter(|&i| weights[i] != 0.0).collect();
    idx.sort_by(|&i, &j| lexicographic(&data.x[i], &data.x[j]).then(i.cmp(&j)));
    let target = |y: f64| match kind {
        LossKind::SquaredError => model.target.to_training(y),
        LossKind::BinaryCrossEntropy => y,
    };
    let mut rows: Vec<Row> = Vec::new();
    let mut last: Option<usize> = None;
    for i in idx {
        let same = last.is_some_and(|l| lexicographic(&data.x[l], &data.x[i]) == Ordering::Equal);
        if !same {
            rows.push(Row {
                x: model.input.apply(&data.x[i]),
                a: 0.0,
                b: 0.0,
                c: 0.0,
            });
        }
        let r = rows.last_mut().unwrap();
        let (w, t) = (weights[i], target(data.y[i]));
        r.a += w;
        r.b += w * t;
        r.c += w * t * t;
        last = Some(i);
    }
    rows
}

/// Objective and gradient over compressed rows.
fn evaluate(model: &ScoreModel, rows: &[Row], kind: LossKind, grad: &mut [f64]) -> f64 {
    grad.iter_mut().for_each(|g| *g = 0.0);
    let body = model.hypothesis.as_dyn();
    let mut total = 0.0;
    let mut scratch = Scratch::default();
    for r in rows {
        let mut dz = |z: f64| match kind {
            LossKind::SquaredError => {
                total += r.a * z * z - 2.0 * r.b * z + r.c;
                2.0 * (r.a * z - r.b)
            }
            LossKind::BinaryCrossEntropy => {
                let p = sigmoid(z);
                let pc = p.clamp(BCE_CLIP, 1.0 - BCE_CLIP);
                total -= r.b * pc.ln() + (r.a - r.b) * (1.0 - pc).ln();
                r.a * p - r.b
            }
        };
        body.backprop(&r.x, grad, &mut dz, &mut scratch);
    }
    total
}

/// Training objective `Σᵢ wᵢ · L(f(xᵢ), yᵢ)` of one model, with squared
/// error measured on the model's training (target-scaled) units.
pub fn objective(model: &ScoreModel, x: &[Vec<f64>], y: &[f64], weights: &[f64], kind: LossKind) -> Result<f64> {
    let (obj, _) = objective_gradient(model, x, y, weights, kind)?;
    Ok(obj)
}

/// Objective together with its gradient in the body's flat parameter order.
pub fn objective_gradient(
    model: &ScoreModel,
    x: &[Vec<f64>],
    y: &[f64],
    weights: &[f64],
    kind: LossKind,
) -> Result<(f64, Vec<f64>)> {
    let w = [weights.to_vec()];
    let data = WeightedData { x, y, weights: &w };
    data.validate(1, kind)?;
    check_inputs(model, &data)?;
    let rows = compress(model, &data, weights, kind);
    let mut grad = vec![0.0; model.hypothesis.as_dyn().num_params()];
    let obj = evaluate(model, &rows, kind, &mut grad);
    Ok((obj, grad))
}

fn check_inputs(model: &ScoreModel, data: &WeightedData<'_>) -> Result<()> {
    let d = model.input_dim();
    if let Some(bad) = data.x.iter().find(|r| r.len() != d) {
        return Err(Error::DimensionMismatch {
            expected: d,
            actual: bad.len(),
        });
    }
    Ok(())
}

/// Runs full-batch gradient descent on every model in place.
///
/// Model `k` stops after `cfg.epochs` updates or as soon as its largest
/// parameter update falls below `cfg.convergence_tol`. An objective that
/// is non-finite or exceeds [`DIVERGENCE_LIMIT`] aborts with
/// [`Error::Diverged`].
pub fn train_weighted(
    models: &mut [ScoreModel],
    data: WeightedData<'_>,
    kind: LossKind,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    data.validate(models.len(), kind)?;
    let mut traces = Vec::with_capacity(models.len());
    for (k, model) in models.iter_mut().enumerate() {
        if model.link() != kind.link() {
            return Err(Error::InvalidInput(format!(
                "model {k} link does not match the {} loss",
                kind.as_str()
            )));
        }
        check_inputs(model, &data)?;
        let rows = compress(model, &data, &data.weights[k], kind);
        traces.push(descend(k, model, &rows, kind, cfg)?);
    }
    Ok(TrainReport { traces })
}

fn descend(k: usize, model: &mut ScoreModel, rows: &[Row], kind: LossKind, cfg: &TrainConfig) -> Result<ModelTrace> {
    let n_params = model.hypothesis.as_dyn().num_params();
    let mut grad = vec![0.0; n_params];
    let mut params = model.hypothesis.as_dyn().params();
    let mut trace = Vec::with_capacity(cfg.epochs + 1);
    let mut converged = false;
    let mut epochs_run = 0;
    let guard = |obj: f64, epoch: usize| -> Result<()> {
        if !obj.is_finite() || obj.abs() > DIVERGENCE_LIMIT {
            return Err(Error::Diverged {
                model: k,
                epoch,
                objective: obj,
            });
        }
        Ok(())
    };
    for epoch in 0..cfg.epochs {
        let obj = evaluate(model, rows, kind, &mut grad);
        guard(obj, epoch)?;
        trace.push(obj);
        let mut max_step: f64 = 0.0;
        for (p, g) in params.iter_mut().zip(&grad) {
            let step = cfg.learning_rate * g;
            *p -= step;
            max_step = max_step.max(step.abs());
        }
        model.hypothesis.as_dyn_mut().set_params(&params);
        epochs_run = epoch + 1;
        if max_step < cfg.convergence_tol {
            converged = true;
            break;
        }
    }
    let obj = evaluate(model, rows, kind, &mut grad);
    guard(obj, epochs_run)?;
    trace.push(obj);
    Ok(ModelTrace {
        epochs_run,
        converged,
        objective: trace,
    })
}

/// Fresh, seeded model for `x` with standardization fitted on `x` and,
/// for squared error, target scaling fitted on `y`. `stream` selects the
/// initialization sub-stream of `cfg.seed`.
pub fn init_model(
    spec: &HypothesisSpec,
    x: &[Vec<f64>],
    y: &[f64],
    kind: LossKind,
    cfg: &TrainConfig,
    stream: u64,
) -> Result<ScoreModel> {
    let input = Standardizer::fit(x)?;
    let target = match kind {
        LossKind::SquaredError => TargetScale::fit(y)?,
        LossKind::BinaryCrossEntropy => TargetScale::identity(),
    };
    let mut r = rng::stream(cfg.seed, stream);
    let hypothesis = Hypothesis::init(spec, input.dim(), kind.link(), cfg.init_scale, &mut r)?;
    ScoreModel::new(hypothesis, input, target)
}

/// Stream offset between successive restarts of the same model.
const RESTART_STRIDE: u64 = 1 << 20;

/// Initializes and trains one model per weight column.
///
/// Each model standardizes features and (for squared error) scales
/// targets using only the rows with a nonzero weight in its column, so a
/// model never depends on records outside its objective. Each weight column is divided by its sum, which must be
/// positive; this leaves every model's minimizer unchanged while making
/// the learning rate independent of group sizes. Model `k`'s
/// initialization uses sub-stream `streams[k]` of `cfg.seed`, shifted for
/// each restart.
pub fn fit_models(
    spec: &HypothesisSpec,
    data: WeightedData<'_>,
    kind: LossKind,
    cfg: &TrainConfig,
    streams: &[u64],
) -> Result<(Vec<ScoreModel>, TrainReport)> {
    cfg.validate()?;
    data.validate(streams.len(), kind)?;
    let mut normalized = Vec::with_capacity(data.weights.len());
    for (k, w) in data.weights.iter().enumerate() {
        let total = stats::order_invariant_sum(w);
        if !(total > 0.0) {
            return Err(Error::InvalidInput(format!(
                "weights of model {k} sum to {total}; a positive total is required"
            )));
        }
        normalized.push(w.iter().map(|v| v / total).collect::<Vec<f64>>());
    }
    let data = WeightedData {
        weights: &normalized,
        ..data
    };
    let support: Vec<(Vec<Vec<f64>>, Vec<f64>)> = normalized
        .iter()
        .map(|w| {
            (0..w.len())
                .filter(|&i| w[i] != 0.0)
                .map(|i| (data.x[i].clone(), data.y[i]))
                .unzip()
        })
        .collect();
    let mut best: Vec<Option<(ScoreModel, ModelTrace)>> = vec![None; streams.len()];
    for r in 0..cfg.restarts as u64 {
        let mut models = streams
            .iter()
            .zip(&support)
            .map(|(&s, (x, y))| init_model(spec, x, y, kind, cfg, s + r * RESTART_STRIDE))
            .collect::<Result<Vec<_>>>()?;
        let report = train_weighted(&mut models, data, kind, cfg)?;
        for ((slot, model), trace) in best.iter_mut().zip(models).zip(report.traces) {
            let better = match slot {
                None => true,
                Some((_, t)) => trace.final_objective() < t.final_objective(),
            };
            if better {
                *slot = Some((model, trace));
            }
        }
    }
    let (models, traces) = best.into_iter().map(|b| b.expect("at least one restart")).unzip();
    Ok((models, TrainReport { traces }))
}
