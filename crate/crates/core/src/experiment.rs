//! Seeded sweeps over noise level, sample size, noise-handling mode and
//! representation, producing a long-form result table.

use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{split, Dataset, SplitConfig, Task};
use crate::error::{Error, Result};
use crate::fair::{
    evaluate_dfp, evaluate_model, evaluate_stratified, mptp, mptp_ldp, train_transformation, transform_dataset,
    unawareness_model, EstimateOptions, FitOutcome, NoiseSpec,
};
use crate::model::{HypothesisSpec, LossKind};
use crate::noise::{perturb_pi, PerturbMode};
use crate::privacy::{privatize_dataset, RRParams};
use crate::rng::derive_seed;
use crate::synth::{classification_sample, dgp_sample, SynthConfig};
use crate::train::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseHandling {
    KnownNoise,
    UnknownNoise,
    PerturbedNoise,
}

impl NoiseHandling {
    pub fn as_str(self) -> &'static str {
        match self {
            NoiseHandling::KnownNoise => "known_noise",
            NoiseHandling::UnknownNoise => "unknown_noise",
            NoiseHandling::PerturbedNoise => "perturbed_noise",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RepresentationMode {
    Raw,
    Transformed,
}

impl RepresentationMode {
    pub fn as_str(self) -> &'static str {
        match self {
            RepresentationMode::Raw => "raw",
            RepresentationMode::Transformed => "transformed",
        }
    }
}

/// Training-set size of a cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleSize {
    Full,
    Half,
    Count(usize),
}

impl SampleSize {
    fn resolve(self, available: usize) -> Result<usize> {
        let m = match self {
            SampleSize::Full => available,
            SampleSize::Half => available / 2,
            SampleSize::Count(c) => c,
        };
        if m == 0 || m > available {
            return Err(Error::InvalidInput(format!(
                "sample size {m} not available from {available} training records"
            )));
        }
        Ok(m)
    }

    pub fn label(self) -> String {
        match self {
            SampleSize::Full => "full".into(),
            SampleSize::Half => "half".into(),
            SampleSize::Count(c) => c.to_string(),
        }
    }
}

impl FromStr for SampleSize {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(SampleSize::Full),
            "half" => Ok(SampleSize::Half),
            other => other
                .parse()
                .map(SampleSize::Count)
                .map_err(|_| Error::InvalidInput(format!("bad sample size `{other}`"))),
        }
    }
}

impl Serialize for SampleSize {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.label())
    }
}

impl<'de> Deserialize<'de> for SampleSize {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Text(String),
            Int(usize),
        }
        match Raw::deserialize(d)? {
            Raw::Text(t) => t.parse().map_err(serde::de::Error::custom),
            Raw::Int(c) => Ok(SampleSize::Count(c)),
        }
    }
}

/// Flat description of a sweep. Every `(seed, sample size)` pair shares
/// one split, one privatization per `π` and one benchmark fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentPlan {
    pub pi_grid: Vec<f64>,
    pub sample_sizes: Vec<SampleSize>,
    pub seeds: Vec<u64>,
    pub mode: NoiseHandling,
    pub representation: RepresentationMode,
    pub n1_grid: Vec<usize>,
    pub perturbations: Vec<f64>,
    pub perturbation_mode: PerturbMode,
    /// `"linear"` or `"net"`.
    pub hypothesis: String,
    pub hidden: Vec<usize>,
    pub task: Task,
    pub test_fraction: f64,
    /// Size and noise of the synthetic base (ignored for external data).
    pub n: usize,
    pub sigma: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub init_scale: f64,
    pub convergence_tol: f64,
    pub restarts: usize,
    /// Keep every k-th epoch in the emitted traces.
    pub trace_every: usize,
}

impl Default for ExperimentPlan {
    fn default() -> Self {
        let t = TrainConfig::default();
        ExperimentPlan {
            pi_grid: vec![0.9, 0.8, 0.7],
            sample_sizes: vec![SampleSize::Full],
            seeds: (0..20).collect(),
            mode: NoiseHandling::KnownNoise,
            representation: RepresentationMode::Raw,
            n1_grid: vec![2, 4],
            perturbations: vec![-0.05, 0.05],
            perturbation_mode: PerturbMode::Absolute,
            hypothesis: "net".into(),
            hidden: vec![5, 5, 5],
            task: Task::Regression,
            test_fraction: 0.2,
            n: 5000,
            sigma: 40.0,
            learning_rate: t.learning_rate,
            epochs: t.epochs,
            init_scale: t.init_scale,
            convergence_tol: t.convergence_tol,
            restarts: t.restarts,
            trace_every: 10,
        }
    }
}

impl ExperimentPlan {
    pub fn from_toml(text: &str) -> Result<Self> {
        let plan: ExperimentPlan =
            toml::from_str(text).map_err(|e| Error::InvalidInput(format!("invalid plan: {e}")))?;
        plan.validate()?;
        Ok(plan)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("plan is always serializable")
    }

    /// The reduced profile: 1000 records and five seeds.
    pub fn fast(mut self) -> Self {
        self.n = 1000;
        self.seeds = (0..5).collect();
        self
    }

    pub fn spec(&self) -> Result<HypothesisSpec> {
        match self.hypothesis.as_str() {
            "linear" => Ok(HypothesisSpec::Linear),
            "net" => Ok(HypothesisSpec::Net {
                hidden: self.hidden.clone(),
            }),
            other => Err(Error::InvalidInput(format!("unknown hypothesis `{other}`"))),
        }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            epochs: self.epochs,
            seed,
            init_scale: self.init_scale,
            convergence_tol: self.convergence_tol,
            restarts: self.restarts,
        }
    }

    pub fn kind(&self) -> LossKind {
        match self.task {
            Task::Regression => LossKind::SquaredError,
            Task::Classification => LossKind::BinaryCrossEntropy,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.pi_grid.is_empty() || self.sample_sizes.is_empty() || self.seeds.is_empty() {
            return Err(Error::InvalidInput(
                "plan needs non-empty pi_grid, sample_sizes and seeds".into(),
            ));
        }
        if let Some(pi) = self.pi_grid.iter().find(|&&p| !(p > 0.5 && p <= 1.0)) {
            return Err(Error::InvalidInput(format!("pi {pi} outside (1/2, 1]")));
        }
        if self.mode == NoiseHandling::UnknownNoise && (self.n1_grid.is_empty() || self.n1_grid.contains(&0)) {
            return Err(Error::InvalidInput("unknown-noise plans need positive n1 values".into()));
        }
        if self.mode == NoiseHandling::PerturbedNoise && self.perturbations.is_empty() {
            return Err(Error::InvalidInput("perturbed-noise plans need perturbations".into()));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(Error::InvalidInput("test_fraction must lie in (0, 1)".into()));
        }
        if self.trace_every == 0 {
            return Err(Error::InvalidInput("trace_every must be positive".into()));
        }
        self.spec()?;
        self.train_config(0).validate()
    }
}

/// Where the records come from.
#[derive(Debug, Clone)]
pub enum Base {
    /// Fresh synthetic sample per seed (`cfg.seed` is replaced by the cell seed).
    Synthetic(SynthConfig),
    /// One external dataset with true sensitive levels, re-split per seed.
    External(Dataset),
}

impl Base {
    pub fn from_plan(plan: &ExperimentPlan) -> Self {
        Base::Synthetic(SynthConfig {
            n: plan.n,
            sigma: plan.sigma,
            ..SynthConfig::default()
        })
    }
}

/// One `(cell, seed, method, metric)` observation.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub seed: u64,
    pub pi: Option<f64>,
    pub n: usize,
    pub sample_size: String,
    pub mode: &'static str,
    pub representation: &'static str,
    pub n1: Option<usize>,
    pub perturbation: Option<f64>,
    pub method: &'static str,
    pub metric: &'static str,
    pub value: f64,
    pub status: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub seed: u64,
    pub pi: Option<f64>,
    pub n: usize,
    pub method: &'static str,
    pub n1: Option<usize>,
    pub perturbation: Option<f64>,
    pub model: usize,
    pub epoch: usize,
    pub objective: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ResultTable {
    pub rows: Vec<ResultRow>,
    pub traces: Vec<TraceRow>,
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl ResultTable {
    pub const HEADER: [&'static str; 12] = [
        "seed",
        "pi",
        "n",
        "sample_size",
        "mode",
        "representation",
        "n1",
        "perturbation",
        "method",
        "metric",
        "value",
        "status",
    ];

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(Self::HEADER)?;
        for r in &self.rows {
            w.write_record([
                r.seed.to_string(),
                opt(r.pi),
                r.n.to_string(),
                r.sample_size.clone(),
                r.mode.to_string(),
                r.representation.to_string(),
                opt(r.n1),
                opt(r.perturbation),
                r.method.to_string(),
                r.metric.to_string(),
                r.value.to_string(),
                r.status.clone(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_traces_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["seed", "pi", "n", "method", "n1", "perturbation", "model", "epoch", "objective"])?;
        for t in &self.traces {
            w.write_record([
                t.seed.to_string(),
                opt(t.pi),
                t.n.to_string(),
                t.method.to_string(),
                opt(t.n1),
                opt(t.perturbation),
                t.model.to_string(),
                t.epoch.to_string(),
                t.objective.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Values of `metric` for `method`, filtered by `keep`, in row order.
    pub fn values(&self, method: &str, metric: &str, keep: impl Fn(&ResultRow) -> bool) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| r.method == method && r.metric == metric && r.status == "ok" && keep(r))
            .map(|r| r.value)
            .collect()
    }
}

/// Labels shared by every row of one training run.
#[derive(Clone, Copy)]
struct Cell<'a> {
    plan: &'a ExperimentPlan,
    seed: u64,
    n: usize,
    size: SampleSize,
    pi: Option<f64>,
    n1: Option<usize>,
    perturbation: Option<f64>,
}

impl Cell<'_> {
    fn row(&self, method: &'static str, metric: &'static str, value: f64, status: String) -> ResultRow {
        ResultRow {
            seed: self.seed,
            pi: self.pi,
            n: self.n,
            sample_size: self.size.label(),
            mode: self.plan.mode.as_str(),
            representation: self.plan.representation.as_str(),
            n1: self.n1,
            perturbation: self.perturbation,
            method,
            metric,
            value,
            status,
        }
    }

    fn failure(&self, method: &'static str, err: &Error, table: &mut ResultTable) {
        table.rows.push(self.row(method, "error", f64::NAN, format!("error: {err}")));
    }

    fn record_fit(
        &self,
        method: &'static str,
        fit: Result<FitOutcome>,
        test: &Dataset,
        table: &mut ResultTable,
    ) {
        let kind = self.plan.kind();
        let out = match fit {
            Ok(o) => o,
            Err(e) => return self.failure(method, &e, table),
        };
        let metrics = evaluate_stratified(&out.models, test, kind)
            .and_then(|s| evaluate_dfp(&out.models, &out.p_star, test, kind).map(|d| (s, d)));
        match metrics {
            Ok((strat, dfp)) => {
                table.rows.push(self.row(method, "test_loss", strat, "ok".into()));
                table.rows.push(self.row(method, "test_loss_dfp", dfp, "ok".into()));
                table.rows.push(self.row(method, "pi_used", out.pi_used, "ok".into()));
            }
            Err(e) => return self.failure(method, &e, table),
        }
        self.push_traces(method, &out.training.traces, table);
    }

    fn push_traces(&self, method: &'static str, traces: &[crate::train::ModelTrace], table: &mut ResultTable) {
        for (model, t) in traces.iter().enumerate() {
            for (epoch, &objective) in t.objective.iter().enumerate() {
                if epoch % self.plan.trace_every == 0 || epoch + 1 == t.objective.len() {
                    table.traces.push(TraceRow {
                        seed: self.seed,
                        pi: self.pi,
                        n: self.n,
                        method,
                        n1: self.n1,
                        perturbation: self.perturbation,
                        model,
                        epoch,
                        objective,
                    });
                }
            }
        }
    }
}

/// Seed labels for derived randomness inside one experiment seed.
const SPLIT_LABEL: u64 = 1;
const SUBSAMPLE_LABEL: u64 = 2;
const PRIVATIZE_LABEL: u64 = 3;

fn base_sample(base: &Base, task: Task, seed: u64) -> Result<Dataset> {
    match base {
        Base::Synthetic(cfg) => {
            let cfg = SynthConfig { seed, ..cfg.clone() };
            match task {
                Task::Regression => dgp_sample(&cfg),
                Task::Classification => classification_sample(&cfg),
            }
        }
        Base::External(ds) => Ok(ds.clone()),
    }
}

/// Runs every cell of the plan sequentially. Failures of individual cells
/// become `status = "error: …"` rows; only an invalid plan is fatal.
pub fn run_plan(plan: &ExperimentPlan, base: &Base) -> Result<ResultTable> {
    plan.validate()?;
    if let Base::External(ds) = base {
        if ds.task() != plan.task {
            return Err(Error::InvalidInput("plan task differs from the dataset's task".into()));
        }
    }
    let mut table = ResultTable::default();
    for &seed in &plan.seeds {
        let data = match base_sample(base, plan.task, seed) {
            Ok(d) => d,
            Err(e) => {
                let cell = Cell {
                    plan,
                    seed,
                    n: 0,
                    size: SampleSize::Full,
                    pi: None,
                    n1: None,
                    perturbation: None,
                };
                cell.failure("data", &e, &mut table);
                continue;
            }
        };
        for &size in &plan.sample_sizes {
            run_seed_size(plan, seed, size, &data, &mut table);
        }
    }
    Ok(table)
}

fn prepare(
    plan: &ExperimentPlan,
    seed: u64,
    size: SampleSize,
    data: &Dataset,
) -> Result<(Dataset, Dataset)> {
    let (train, test) = split(data, &SplitConfig::new(plan.test_fraction, derive_seed(seed, SPLIT_LABEL))?)?;
    let m = size.resolve(train.len())?;
    let train = if m == train.len() {
        train
    } else {
        let frac = m as f64 / train.len() as f64;
        split(&train, &SplitConfig::new(frac, derive_seed(seed, SUBSAMPLE_LABEL))?)?.1
    };
    match plan.representation {
        RepresentationMode::Raw => Ok((train, test)),
        RepresentationMode::Transformed => {
            let hidden = if plan.hidden.is_empty() { vec![5, 5, 5] } else { plan.hidden.clone() };
            let (t, _) = train_transformation(&train, &hidden, plan.kind(), &plan.train_config(seed))?;
            Ok((transform_dataset(&train, &t)?, transform_dataset(&test, &t)?))
        }
    }
}

fn run_seed_size(plan: &ExperimentPlan, seed: u64, size: SampleSize, data: &Dataset, table: &mut ResultTable) {
    let mut cell = Cell {
        plan,
        seed,
        n: 0,
        size,
        pi: None,
        n1: None,
        perturbation: None,
    };
    let (train, test) = match prepare(plan, seed, size, data) {
        Ok(v) => v,
        Err(e) => return cell.failure("prepare", &e, table),
    };
    cell.n = train.len();
    let kind = plan.kind();
    let cfg = plan.train_config(seed);
    let spec = match plan.spec() {
        Ok(s) => s,
        Err(e) => return cell.failure("prepare", &e, table),
    };

    cell.record_fit("benchmark", mptp(&train, &spec, kind, &cfg, None), &test, table);
    match unawareness_model(&train, &spec, kind, &cfg) {
        Ok((model, report)) => match evaluate_model(&model, &test, kind) {
            Ok(v) => {
                table.rows.push(cell.row("unawareness", "test_loss", v, "ok".into()));
                cell.push_traces("unawareness", &report.traces, table);
            }
            Err(e) => cell.failure("unawareness", &e, table),
        },
        Err(e) => cell.failure("unawareness", &e, table),
    }

    let k = train.sensitive_cardinality();
    for &pi in &plan.pi_grid {
        cell.pi = Some(pi);
        cell.n1 = None;
        cell.perturbation = None;
        let private = RRParams::from_pi_inclusive(pi, k)
            .and_then(|p| privatize_dataset(&train, &p, derive_seed(seed, PRIVATIZE_LABEL), false));
        let private = match private {
            Ok(p) => p,
            Err(e) => {
                cell.failure("mptp_ldp", &e, table);
                continue;
            }
        };
        match plan.mode {
            NoiseHandling::KnownNoise => {
                let fit = mptp_ldp(&private, &NoiseSpec::Known(pi), &spec, kind, &cfg, None);
                cell.record_fit("mptp_ldp", fit, &test, table);
            }
            NoiseHandling::UnknownNoise => {
                for &n1 in &plan.n1_grid {
                    cell.n1 = Some(n1);
                    let fit = mptp_ldp(&private, &NoiseSpec::Estimate(EstimateOptions::new(n1)), &spec, kind, &cfg, None);
                    cell.record_fit("mptp_ldp", fit, &test, table);
                }
            }
            NoiseHandling::PerturbedNoise => {
                for &delta in &plan.perturbations {
                    cell.perturbation = Some(delta);
                    let fit = perturb_pi(pi, delta, plan.perturbation_mode, k)
                        .and_then(|used| mptp_ldp(&private, &NoiseSpec::Known(used), &spec, kind, &cfg, None));
                    cell.record_fit("mptp_ldp", fit, &test, table);
                }
            }
        }
    }
}
