use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use fairprice::correction::corrected_risk_weights;
use fairprice::data::{
    dataset_from_table, empirical_marginal, split, write_dataset, Attribute, CsvSchema, Dataset, SensitiveLevel,
    SplitConfig, Table, Task,
};
use fairprice::experiment::{run_plan, Base, ExperimentPlan, RepresentationMode};
use fairprice::fair::{
    evaluate_dfp, evaluate_model, evaluate_stratified, mptp, mptp_ldp, premium_report, train_transformation,
    transform_dataset, unawareness_model, EstimateOptions, FitOutcome, GroupModelSet, NoiseSpec, ReferenceWeights,
};
use fairprice::model::{HypothesisSpec, LossKind};
use fairprice::noise::{c1_procedure, default_j_star, default_posterior_config};
use fairprice::privacy::{privatize_dataset, RRParams};
use fairprice::protocol::{
    deserialize_payload, deserialize_result, insurer_prepare, insurer_receive, serialize_payload, serialize_result,
    ttp_serve, PrepareOptions, SensitiveStore, StoreMechanism, TtpOptions, SCHEMA_VERSION,
};
use fairprice::rng::derive_seed;
use fairprice::synth::{classification_sample, dgp_sample, SynthConfig};
use fairprice::train::TrainConfig;

use crate::config::{parse_list, Settings};
use crate::manifest::{manifest_path, RunManifest};
use crate::ComputationFailure;

#[derive(Debug, Parser)]
#[command(name = "fairprice", version, about = "Discrimination-free pricing with privatized sensitive attributes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate the synthetic insurance portfolio.
    Synth(SynthArgs),
    /// Add a randomized-response column to a CSV.
    Privatize(PrivatizeArgs),
    /// Print the correction matrices and weight table.
    Correction(CorrectionArgs),
    /// Estimate the keep probability from privatized levels.
    EstimateNoise(EstimateArgs),
    /// Train group models (or the unawareness model) and write premiums.
    Train(TrainArgs),
    /// Apply saved group models to a CSV.
    Price(PriceArgs),
    /// Run a seeded sweep described by a plan file.
    Experiment(ExperimentArgs),
    /// Insurer side of the two-party protocol.
    Insurer {
        #[command(subcommand)]
        role: InsurerCommand,
    },
    /// Trusted third party side of the two-party protocol.
    Ttp {
        #[command(subcommand)]
        role: TtpCommand,
    },
}

#[derive(Debug, Subcommand)]
pub enum InsurerCommand {
    /// Build the payload sent to the third party.
    Prepare(PrepareArgs),
    /// Turn a third-party result into premiums.
    Receive(ReceiveArgs),
}

#[derive(Debug, Subcommand)]
pub enum TtpCommand {
    /// Train on a payload joined with the stored sensitive column.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct Common {
    /// Flat TOML config file (a previous run manifest also works).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Where to write the run manifest.
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    #[arg(long)]
    input: Option<PathBuf>,
    /// Outcome column.
    #[arg(long)]
    outcome: Option<String>,
    /// regression | classification
    #[arg(long)]
    task: Option<String>,
    /// Column with the true sensitive attribute.
    #[arg(long)]
    sensitive: Option<String>,
    /// Column with the privatized sensitive attribute.
    #[arg(long)]
    privatized: Option<String>,
    /// Sensitive level labels in index order, comma separated.
    #[arg(long)]
    levels: Option<String>,
    /// Columns to ignore, comma separated.
    #[arg(long)]
    drop: Option<String>,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// linear | net
    #[arg(long)]
    hypothesis: Option<String>,
    /// Hidden layer widths, comma separated.
    #[arg(long)]
    hidden: Option<String>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    init_scale: Option<f64>,
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    restarts: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    sigma: Option<f64>,
    /// regression | classification
    #[arg(long)]
    task: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    common: Common,
}

#[derive(Debug, Args)]
pub struct PrivatizeArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, conflicts_with = "epsilon")]
    pi: Option<f64>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Remove the true sensitive column from the output.
    #[arg(long)]
    drop_truth: bool,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    common: Common,
}

#[derive(Debug, Args)]
pub struct CorrectionArgs {
    #[arg(long)]
    pi: Option<f64>,
    /// Observed counts per privatized level, comma separated.
    #[arg(long)]
    counts: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    common: Common,
}

#[derive(Debug, Args)]
pub struct NoiseArgs {
    #[arg(long)]
    n1: Option<usize>,
    #[arg(long)]
    j_star: Option<usize>,
    /// Fit the posterior on the raw features rather than the representation.
    #[arg(long)]
    use_raw_x: bool,
    #[arg(long)]
    posterior_lr: Option<f64>,
    #[arg(long)]
    posterior_epochs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EstimateArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    noise: NoiseArgs,
    /// raw | transformed
    #[arg(long)]
    representation: Option<String>,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    common: Common,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Method {
    Mptp,
    MptpLdp,
    Unaware,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(value_enum)]
    method: Method,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    noise: NoiseArgs,
    /// mse | bce
    #[arg(long)]
    loss: Option<String>,
    /// Known keep probability of the privatization.
    #[arg(long)]
    pi: Option<f64>,
    /// Estimate the keep probability instead of supplying it.
    #[arg(long)]
    estimate_noise: bool,
    /// raw | transformed
    #[arg(long)]
    representation: Option<String>,
    #[arg(long)]
    test_fraction: Option<f64>,
    /// Reference distribution over levels, comma separated.
    #[arg(long)]
    p_star: Option<String>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[command(flatten)]
    common: Common,
}

#[derive(Debug, Args)]
pub struct PriceArgs {
    #[arg(long)]
    models: Option<PathBuf>,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    p_star: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    common: Common,
}

#[derive(Debug, Args)]
pub struct ExperimentArgs {
    #[arg(long)]
    plan: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Per-epoch objective traces.
    #[arg(long)]
    traces: Option<PathBuf>,
    /// Use an external CSV (with a true sensitive column) instead of the simulator.
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    common: Common,
}

#[derive(Debug, Args)]
pub struct PrepareArgs {
    #[command(flatten)]
    data: DataArgs,
    /// raw | transformed
    #[arg(long)]
    representation: Option<String>,
    /// Also send standardized raw features for noise estimation.
    #[arg(long)]
    send_raw_x: bool,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    common: Common,
}

#[derive(Debug, Args)]
pub struct ReceiveArgs {
    #[arg(long)]
    result: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    common: Common,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    payload: Option<PathBuf>,
    /// CSV holding the stored sensitive column, aligned with payload rows.
    #[arg(long)]
    store: Option<PathBuf>,
    #[arg(long)]
    column: Option<String>,
    #[arg(long)]
    levels: Option<String>,
    #[arg(long)]
    cardinality: Option<usize>,
    #[arg(long)]
    pi: Option<f64>,
    /// The stored column is the true attribute.
    #[arg(long)]
    true_attribute: bool,
    #[arg(long)]
    estimate_noise: bool,
    #[command(flatten)]
    noise: NoiseArgs,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    p_star: Option<String>,
    /// Include trained parameters in the result.
    #[arg(long)]
    export_models: bool,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    common: Common,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => synth(a),
        Command::Privatize(a) => privatize(a),
        Command::Correction(a) => correction(a),
        Command::EstimateNoise(a) => estimate_noise(a),
        Command::Train(a) => train(a),
        Command::Price(a) => price(a),
        Command::Experiment(a) => experiment(a),
        Command::Insurer {
            role: InsurerCommand::Prepare(a),
        } => prepare(a),
        Command::Insurer {
            role: InsurerCommand::Receive(a),
        } => receive(a),
        Command::Ttp {
            role: TtpCommand::Serve(a),
        } => serve(a),
    }
}

// ---------------------------------------------------------------------------
// shared resolution
// ---------------------------------------------------------------------------

fn parse_task(text: &str) -> Result<Task> {
    text.parse::<Task>().map_err(|e| anyhow!("{e}"))
}

fn parse_representation(text: &str) -> Result<RepresentationMode> {
    match text {
        "raw" => Ok(RepresentationMode::Raw),
        "transformed" => Ok(RepresentationMode::Transformed),
        other => bail!("unknown representation `{other}` (expected raw or transformed)"),
    }
}

fn loss_for(task: Task) -> LossKind {
    match task {
        Task::Regression => LossKind::SquaredError,
        Task::Classification => LossKind::BinaryCrossEntropy,
    }
}

fn read_input(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).with_context(|| format!("reading {}", path.display()))
}

/// Which sensitive columns a command needs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Need {
    Nothing,
    Truth,
    Privatized,
}

struct Loaded {
    dataset: Dataset,
    table: Table,
    privatized_col: String,
    sensitive_col: String,
    level_labels: Vec<String>,
}

fn load_data(s: &mut Settings, a: DataArgs, need: Need, with_sensitive: bool) -> Result<Loaded> {
    let input: PathBuf = s.require("input", a.input)?;
    let outcome = s.get("outcome", a.outcome, "y".to_string())?;
    let task = parse_task(&s.get("task", a.task, "regression".to_string())?)?;
    let drop = s.opt("drop", a.drop)?.map(|d| parse_list::<String>(&d)).transpose()?.unwrap_or_default();
    let bytes = read_input(&input)?;
    let table = Table::read(bytes.as_slice())?;
    let mut schema = CsvSchema::new(&outcome, task);
    schema.drop = drop;
    let mut sensitive_col = String::new();
    let mut privatized_col = String::new();
    if with_sensitive {
        sensitive_col = s.get("sensitive", a.sensitive, "d".to_string())?;
        privatized_col = s.get("privatized", a.privatized, "s".to_string())?;
        schema.sensitive_levels = s.opt("levels", a.levels)?.map(|l| parse_list(&l)).transpose()?;
        let has = |c: &str| table.header.iter().any(|h| h == c);
        match need {
            Need::Truth if !has(&sensitive_col) => bail!(
                "{} has no true sensitive column `{sensitive_col}`; this method trains on the true attribute (use --sensitive to name it)",
                input.display()
            ),
            Need::Privatized if !has(&privatized_col) => bail!(
                "{} has no privatized column `{privatized_col}` (use --privatized to name it)",
                input.display()
            ),
            _ => {}
        }
        schema.sensitive = has(&sensitive_col).then(|| sensitive_col.clone());
        schema.privatized = has(&privatized_col).then(|| privatized_col.clone());
    }
    let (dataset, encoding) = dataset_from_table(&table, &schema)?;
    Ok(Loaded {
        dataset,
        table,
        privatized_col,
        sensitive_col,
        level_labels: encoding.sensitive_levels,
    })
}

fn resolve_model(s: &mut Settings, a: ModelArgs) -> Result<(HypothesisSpec, Vec<usize>, TrainConfig)> {
    let d = TrainConfig::default();
    let hidden = parse_list::<usize>(&s.get("hidden", a.hidden, "5,5,5".to_string())?)?;
    let spec = match s.get("hypothesis", a.hypothesis, "net".to_string())?.as_str() {
        "linear" => HypothesisSpec::Linear,
        "net" => HypothesisSpec::Net { hidden: hidden.clone() },
        other => bail!("unknown hypothesis `{other}` (expected linear or net)"),
    };
    let cfg = TrainConfig {
        learning_rate: s.get("lr", a.lr, d.learning_rate)?,
        epochs: s.get("epochs", a.epochs, d.epochs)?,
        init_scale: s.get("init_scale", a.init_scale, d.init_scale)?,
        convergence_tol: s.get("tol", a.tol, d.convergence_tol)?,
        restarts: s.get("restarts", a.restarts, d.restarts)?,
        seed: s.get("seed", a.seed, d.seed)?,
    };
    cfg.validate()?;
    Ok((spec, hidden, cfg))
}

struct NoiseSettings {
    n1: usize,
    j_star: Option<usize>,
    use_raw_x: bool,
    posterior: TrainConfig,
}

fn resolve_noise(s: &mut Settings, a: NoiseArgs, seed: u64) -> Result<NoiseSettings> {
    let d = default_posterior_config();
    let posterior = TrainConfig {
        learning_rate: s.get("posterior_lr", a.posterior_lr, d.learning_rate)?,
        epochs: s.get("posterior_epochs", a.posterior_epochs, d.epochs)?,
        seed,
        ..d
    };
    Ok(NoiseSettings {
        n1: s.get("n1", a.n1, 2)?,
        j_star: s.opt("j_star", a.j_star)?,
        use_raw_x: s.switch("use_raw_x", a.use_raw_x)?,
        posterior,
    })
}

fn resolve_p_star(s: &mut Settings, flag: Option<String>) -> Result<Option<ReferenceWeights>> {
    s.opt("p_star", flag)?
        .map(|p| Ok(ReferenceWeights::new(parse_list(&p)?)?))
        .transpose()
}

fn csv_bytes(f: impl FnOnce(&mut Vec<u8>) -> fairprice::Result<()>) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    f(&mut buf)?;
    Ok(buf)
}

fn finish(m: RunManifest, s: &Settings, common: Common, primary: Option<&Path>, command: &str) -> Result<()> {
    let path = manifest_path(common.manifest, primary, command);
    m.finish(&path, s.resolved())
}

// ---------------------------------------------------------------------------
// commands
// ---------------------------------------------------------------------------

fn synth(a: SynthArgs) -> Result<()> {
    let mut s = Settings::load(a.common.config.as_deref())?;
    let mut m = RunManifest::start();
    let d = SynthConfig::default();
    let cfg = SynthConfig {
        n: s.get("n", a.n, d.n)?,
        seed: s.get("seed", a.seed, d.seed)?,
        sigma: s.get("sigma", a.sigma, d.sigma)?,
        ..d
    };
    let task = parse_task(&s.get("task", a.task, "regression".to_string())?)?;
    let out: PathBuf = s.require("out", a.out)?;
    m.seed(cfg.seed);
    let data = match task {
        Task::Regression => dgp_sample(&cfg)?,
        Task::Classification => classification_sample(&cfg)?,
    };
    m.write(&out, &csv_bytes(|b| write_dataset(&data, b))?)?;
    finish(m, &s, a.common, Some(&out), "synth")
}

fn privatize(a: PrivatizeArgs) -> Result<()> {
    let mut s = Settings::load(a.common.config.as_deref())?;
    let mut m = RunManifest::start();
    let loaded = load_data(&mut s, a.data, Need::Truth, true)?;
    let k = loaded.dataset.sensitive_cardinality();
    let params = match (s.opt("pi", a.pi)?, s.opt("epsilon", a.epsilon)?) {
        (Some(pi), None) => RRParams::from_pi_inclusive(pi, k)?,
        (None, Some(eps)) => RRParams::from_epsilon(eps, k)?,
        (Some(_), Some(_)) => bail!("give either --pi or --epsilon, not both"),
        (None, None) => bail!("one of --pi or --epsilon is required"),
    };
    let seed = s.get("seed", a.seed, 0)?;
    let drop_truth = s.switch("drop_truth", a.drop_truth)?;
    let out: PathBuf = s.require("out", a.out)?;
    m.seed(seed);
    let mut table = loaded.table;
    if table.header.iter().any(|h| *h == loaded.privatized_col) {
        bail!("input already has a `{}` column", loaded.privatized_col);
    }
    let private = privatize_dataset(&loaded.dataset, &params, seed, true)?;
    let levels = private.levels(Attribute::Privatized)?;
    table.header.push(loaded.privatized_col.clone());
    for (row, l) in table.rows.iter_mut().zip(&levels) {
        row.push(loaded.level_labels[l.index()].clone());
    }
    if drop_truth {
        let j = table.column_index(&loaded.sensitive_col)?;
        table.header.remove(j);
        table.rows.iter_mut().for_each(|r| {
            r.remove(j);
        });
    }
    m.write(&out, &csv_bytes(|b| table.write(b))?)?;
    s.get("mechanism_epsilon", None, params.epsilon())?;
    s.get("mechanism_pi", None, params.pi())?;
    s.get("mechanism_pi_bar", None, params.pi_bar())?;
    finish(m, &s, a.common, Some(&out), "privatize")
}

fn correction(a: CorrectionArgs) -> Result<()> {
    let mut s = Settings::load(a.common.config.as_deref())?;
    let mut m = RunManifest::start();
    let pi: f64 = s.require("pi", a.pi)?;
    let counts = parse_list::<usize>(&s.require::<String>("counts", a.counts)?)?;
    let out = s.opt::<PathBuf>("out", a.out)?;
    let w = corrected_risk_weights(&counts, pi)?;
    let k = counts.len();
    let mut text = String::from("quantity,row,col,value\n");
    let mut matrix = |name: &str, mat: &fairprice::linalg::Matrix| {
        for i in 0..k {
            for j in 0..k {
                text.push_str(&format!("{name},{i},{j},{}\n", mat[(i, j)]));
            }
        }
    };
    matrix("pi_inverse", &w.matrices.pi_inv);
    matrix("t_inverse", &w.matrices.t_inv);
    matrix("weights", &w.weights);
    for (i, p) in w.matrices.p_d.iter().enumerate() {
        text.push_str(&format!("p_d,{i},,{p}\n"));
    }
    for (i, p) in w.matrices.p_s.iter().enumerate() {
        text.push_str(&format!("p_s,{i},,{p}\n"));
    }
    text.push_str(&format!("c1,,,{}\n", w.matrices.c1));
    text.push_str(&format!("marginal_clamped,,,{}\n", w.matrices.clamped));
    match &out {
        Some(p) => m.write(p, text.as_bytes())?,
        None => m.print(&text),
    }
    finish(m, &s, a.common, out.as_deref(), "correction")
}

fn estimate_noise(a: EstimateArgs) -> Result<()> {
    let mut s = Settings::load(a.common.config.as_deref())?;
    let mut m = RunManifest::start();
    let loaded = load_data(&mut s, a.data, Need::Privatized, true)?;
    let (_, hidden, cfg) = resolve_model(&mut s, a.model)?;
    let noise = resolve_noise(&mut s, a.noise, cfg.seed)?;
    let rep = parse_representation(&s.get("representation", a.representation, "raw".to_string())?)?;
    let out = s.opt::<PathBuf>("out", a.out)?;
    m.seed(cfg.seed);
    let data = &loaded.dataset;
    let x_star = if rep == RepresentationMode::Transformed && !noise.use_raw_x {
        let (t, _) = train_transformation(data, &hidden, loss_for(data.task()), &cfg)?;
        transform_dataset(data, &t)?.features()
    } else {
        data.features()
    };
    let levels = data.levels(Attribute::Privatized)?;
    let k = data.sensitive_cardinality();
    let j_star = noise.j_star.unwrap_or_else(|| default_j_star(&levels, k));
    let est = c1_procedure(&x_star, &levels, j_star, k, noise.n1, &noise.posterior)?;
    let mut text = String::from("scope,records,pi_hat,c1,excluded\n");
    for g in 0..est.eta_max_per_group.len() {
        text.push_str(&format!(
            "group_{g},{},{},{},{}\n",
            est.m, est.eta_max_per_group[g], est.c1_per_group[g], est.excluded[g]
        ));
    }
    text.push_str(&format!("overall,{},{},{},false\n", est.m * est.n1, est.pi_hat, est.c1_hat));
    s.get("anchor_level", None, est.level_used)?;
    match &out {
        Some(p) => m.write(p, text.as_bytes())?,
        None => m.print(&text),
    }
    finish(m, &s, a.common, out.as_deref(), "estimate-noise")
}

fn train(a: TrainArgs) -> Result<()> {
    let mut s = Settings::load(a.common.config.as_deref())?;
    let mut m = RunManifest::start();
    let need = match a.method {
        Method::Mptp => Need::Truth,
        Method::MptpLdp => Need::Privatized,
        Method::Unaware => Need::Nothing,
    };
    let loaded = load_data(&mut s, a.data, need, true)?;
    let data = loaded.dataset;
    let (spec, hidden, cfg) = resolve_model(&mut s, a.model)?;
    let noise = resolve_noise(&mut s, a.noise, cfg.seed)?;
    let kind: LossKind = s
        .get("loss", a.loss, loss_for(data.task()).as_str().to_string())?
        .parse()
        .map_err(|e| anyhow!("{e}"))?;
    let rep = parse_representation(&s.get("representation", a.representation, "raw".to_string())?)?;
    let test_fraction = s.get("test_fraction", a.test_fraction, 0.2)?;
    let p_star = resolve_p_star(&mut s, a.p_star)?;
    let out_dir: PathBuf = s.require("out_dir", a.out_dir)?;
    m.seed(cfg.seed);

    let (train_raw, test) = split(&data, &SplitConfig::new(test_fraction, derive_seed(cfg.seed, 1))?)?;
    let (train_set, transformation) = match rep {
        RepresentationMode::Raw => (train_raw.clone(), None),
        RepresentationMode::Transformed => {
            let (t, _) = train_transformation(&train_raw, &hidden, kind, &cfg)?;
            (transform_dataset(&train_raw, &t)?, Some(t))
        }
    };
    let mut metrics = String::from("metric,value\n");

    if a.method == Method::Unaware {
        let (model, _) = unawareness_model(&train_set, &spec, kind, &cfg)?;
        let apply = |d: &Dataset| match &transformation {
            Some(t) => Ok::<_, anyhow::Error>(transform_dataset(d, t)?),
            None => Ok(d.clone()),
        };
        let test_loss = evaluate_model(&model, &apply(&test)?, kind)?;
        metrics.push_str(&format!("test_loss_unawareness,{test_loss}\n"));
        let mut premiums = String::from("id,unawareness\n");
        for (i, r) in apply(&data)?.records().iter().enumerate() {
            premiums.push_str(&format!("{i},{}\n", model.predict(&r.x)?));
        }
        m.write(&out_dir.join("model.txt"), model.to_text().as_bytes())?;
        if let Some(t) = &transformation {
            m.write(&out_dir.join("transformation.txt"), t.to_text().as_bytes())?;
        }
        m.write(&out_dir.join("premiums.csv"), premiums.as_bytes())?;
        m.write(&out_dir.join("metrics.csv"), metrics.as_bytes())?;
        return finish(m, &s, a.common, Some(&out_dir.join("premiums.csv")), "train");
    }

    let estimate = s.switch("estimate_noise", a.estimate_noise)?;
    let out: FitOutcome = match a.method {
        Method::Mptp => mptp(&train_set, &spec, kind, &cfg, p_star)?,
        _ => {
            let spec_noise = if estimate {
                NoiseSpec::Estimate(EstimateOptions {
                    n1: noise.n1,
                    j_star: noise.j_star,
                    x_star: (noise.use_raw_x && transformation.is_some()).then(|| train_raw.features()),
                    posterior: noise.posterior.clone(),
                })
            } else {
                let pi = s
                    .opt("pi", a.pi)?
                    .context("mptp-ldp needs --pi or --estimate-noise")?;
                NoiseSpec::Known(pi)
            };
            mptp_ldp(&train_set, &spec_noise, &spec, kind, &cfg, p_star)?
        }
    };
    let mut models: GroupModelSet = out.models;
    models.transformation = transformation;
    if test.records().iter().all(|r| r.d.is_some()) {
        metrics.push_str(&format!("test_loss,{}\n", evaluate_stratified(&models, &test, kind)?));
    }
    metrics.push_str(&format!("test_loss_dfp,{}\n", evaluate_dfp(&models, &out.p_star, &test, kind)?));
    metrics.push_str(&format!("pi_used,{}\n", out.pi_used));
    metrics.push_str(&format!("noise_mode,{}\n", out.noise_mode.as_str()));
    let report = premium_report(&models, &out.p_star, &data)?;
    let premiums = csv_bytes(|b| report.write_csv(b))?;
    m.write(&out_dir.join("models.txt"), models.to_text().as_bytes())?;
    m.write(&out_dir.join("premiums.csv"), &premiums)?;
    m.write(&out_dir.join("metrics.csv"), metrics.as_bytes())?;
    finish(m, &s, a.common, Some(&out_dir.join("premiums.csv")), "train")
}

fn price(a: PriceArgs) -> Result<()> {
    let mut s = Settings::load(a.common.config.as_deref())?;
    let mut m = RunManifest::start();
    let models_path: PathBuf = s.require("models", a.models)?;
    let models = GroupModelSet::from_text(
        std::str::from_utf8(&read_input(&models_path)?).context("model file is not UTF-8")?,
    )?;
    let loaded = load_data(&mut s, a.data, Need::Nothing, true)?;
    let p_star = match resolve_p_star(&mut s, a.p_star)? {
        Some(p) => p,
        None => {
            let p = empirical_marginal(&loaded.dataset, Attribute::True)
                .context("no --p-star given and the input has no true sensitive column to estimate it from")?;
            ReferenceWeights::new(p)?
        }
    };
    let out: PathBuf = s.require("out", a.out)?;
    let report = premium_report(&models, &p_star, &loaded.dataset)?;
    m.write(&out, &csv_bytes(|b| report.write_csv(b))?)?;
    finish(m, &s, a.common, Some(&out), "price")
}

fn experiment(a: ExperimentArgs) -> Result<()> {
    let mut s = Settings::load(a.common.config.as_deref())?;
    let mut m = RunManifest::start();
    let plan_path: PathBuf = s.require("plan", a.plan)?;
    let text = String::from_utf8(read_input(&plan_path)?).context("plan is not UTF-8")?;
    let plan = ExperimentPlan::from_toml(&text)?;
    let out: PathBuf = s.require("out", a.out)?;
    let traces = s.opt::<PathBuf>("traces", a.traces)?;
    let base = if a.data.input.is_some() || s.opt::<PathBuf>("input", None)?.is_some() {
        let loaded = load_data(&mut s, a.data, Need::Truth, true)?;
        Base::External(loaded.dataset)
    } else {
        Base::from_plan(&plan)
    };
    plan.seeds.iter().for_each(|&seed| m.seed(seed));
    let table = run_plan(&plan, &base)?;
    m.write(&out, &csv_bytes(|b| table.write_csv(b))?)?;
    if let Some(t) = &traces {
        m.write(t, &csv_bytes(|b| table.write_traces_csv(b))?)?;
    }
    finish(m, &s, a.common, Some(&out), "experiment")
}

fn prepare(a: PrepareArgs) -> Result<()> {
    let mut s = Settings::load(a.common.config.as_deref())?;
    let mut m = RunManifest::start();
    let loaded = load_data(&mut s, a.data, Need::Nothing, false)?;
    let (_, hidden, cfg) = resolve_model(&mut s, a.model)?;
    let opts = PrepareOptions {
        mode: parse_representation(&s.get("representation", a.representation, "raw".to_string())?)?,
        hidden,
        cfg,
        send_raw_x_star: s.switch("send_raw_x", a.send_raw_x)?,
    };
    let out: PathBuf = s.require("out", a.out)?;
    m.seed(opts.cfg.seed);
    s.get("schema_version", None, SCHEMA_VERSION)?;
    let prepared = insurer_prepare(&loaded.dataset, &opts)?;
    m.write(&out, &serialize_payload(&prepared.payload)?)?;
    if let Some(t) = &prepared.transformation {
        let mut p = out.as_os_str().to_owned();
        p.push(".transformation.txt");
        m.write(Path::new(&p), t.to_text().as_bytes())?;
    }
    finish(m, &s, a.common, Some(&out), "insurer-prepare")
}

fn receive(a: ReceiveArgs) -> Result<()> {
    let mut s = Settings::load(a.common.config.as_deref())?;
    let mut m = RunManifest::start();
    let path: PathBuf = s.require("result", a.result)?;
    let out: PathBuf = s.require("out", a.out)?;
    s.get("schema_version", None, SCHEMA_VERSION)?;
    let result = deserialize_result(&read_input(&path)?)?;
    if !result.is_ok() {
        return Err(ComputationFailure(format!("third party reported {}", result.status)).into());
    }
    let report = insurer_receive(&result)?;
    m.write(&out, &csv_bytes(|b| report.write_csv(b))?)?;
    finish(m, &s, a.common, Some(&out), "insurer-receive")
}

fn read_store(s: &mut Settings, a: &ServeArgs) -> Result<(Vec<SensitiveLevel>, usize)> {
    let path: PathBuf = s.require("store", a.store.clone())?;
    let column = s.get("column", a.column.clone(), "s".to_string())?;
    let labels = s.opt("levels", a.levels.clone())?.map(|l| parse_list::<String>(&l)).transpose()?;
    let table = Table::read(read_input(&path)?.as_slice())?;
    let values = table.column(&column)?;
    let idx: Vec<usize> = values
        .iter()
        .enumerate()
        .map(|(i, v)| match &labels {
            Some(l) => l
                .iter()
                .position(|x| x == v)
                .ok_or_else(|| anyhow!("row {}: unknown level `{v}`", i + 1)),
            None => v
                .parse::<usize>()
                .map_err(|_| anyhow!("row {}: level `{v}` is not an index; pass --levels", i + 1)),
        })
        .collect::<Result<_>>()?;
    let implied = labels.as_ref().map_or(0, Vec::len).max(idx.iter().max().map_or(0, |m| m + 1)).max(2);
    let k = s.get("cardinality", a.cardinality, implied)?;
    let levels = idx.into_iter().map(|i| SensitiveLevel::new(i, k)).collect::<fairprice::Result<_>>()?;
    Ok((levels, k))
}

fn serve(a: ServeArgs) -> Result<()> {
    let mut s = Settings::load(a.common.config.as_deref())?;
    let mut m = RunManifest::start();
    let payload_path: PathBuf = s.require("payload", a.payload.clone())?;
    let payload = deserialize_payload(&read_input(&payload_path)?)?;
    let (levels, cardinality) = read_store(&mut s, &a)?;
    let truth = s.switch("true_attribute", a.true_attribute)?;
    let pi = s.opt("pi", a.pi)?;
    let mechanism = match (truth, pi) {
        (true, Some(_)) => bail!("--true-attribute and --pi are exclusive"),
        (true, None) => StoreMechanism::TrueAttribute,
        (false, Some(pi)) => StoreMechanism::Known(pi),
        (false, None) => StoreMechanism::Unknown,
    };
    let (spec, _, cfg) = resolve_model(&mut s, a.model)?;
    let noise = resolve_noise(&mut s, a.noise, cfg.seed)?;
    let estimate = s.switch("estimate_noise", a.estimate_noise)?;
    let p_star = resolve_p_star(&mut s, a.p_star)?;
    let export_models = s.switch("export_models", a.export_models)?;
    let out: PathBuf = s.require("out", a.out)?;
    s.get("schema_version", None, SCHEMA_VERSION)?;
    m.seed(cfg.seed);
    let opts = TtpOptions {
        spec,
        cfg,
        estimate: estimate.then(|| EstimateOptions {
            n1: noise.n1,
            j_star: noise.j_star,
            x_star: None,
            posterior: noise.posterior.clone(),
        }),
        use_raw_x: noise.use_raw_x,
        p_star,
        export_models,
    };
    let store = SensitiveStore {
        levels,
        cardinality,
        mechanism,
    };
    let result = ttp_serve(&payload, &store, &opts)?;
    m.write(&out, &serialize_result(&result)?)?;
    let status = result.status.clone();
    finish(m, &s, a.common, Some(&out), "ttp-serve")?;
    if !result.is_ok() {
        return Err(ComputationFailure(status).into());
    }
    Ok(())
}
