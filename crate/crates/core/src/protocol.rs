//! The insurer / trusted-third-party exchange.
//!
//! The insurer holds features and outcomes but no sensitive data; the
//! third party holds the (privatized) sensitive levels. The insurer sends
//! a representation of its features plus outcomes, the third party trains
//! the group models and returns per-record premiums. Both messages travel
//! through a versioned line-based text codec.

use crate::data::{Dataset, Record, SensitiveLevel, Task};
use crate::error::{CodecErrorCode, Error, Result};
use crate::experiment::RepresentationMode;
use crate::fair::{
    mptp, mptp_ldp, train_transformation, EstimateOptions, FitOutcome, GroupModelSet, NoiseMode, NoiseSpec,
    PremiumReport, ReferenceWeights,
};
use crate::model::{fmt_float, HypothesisSpec, LossKind, ScoreModel, Standardizer};
use crate::train::TrainConfig;

pub const SCHEMA_VERSION: u32 = 1;
const MAGIC: &str = "fairprice-exchange";

/// Substrings (lower-case) that mark a column as sensitive.
pub const SENSITIVE_MARKERS: [&str; 7] = ["sensitive", "gender", "sex", "privat", "protected", "race", "ethnic"];
/// Column names that are sensitive on their own.
pub const SENSITIVE_NAMES: [&str; 2] = ["d", "s"];

/// Rejects column names that look like a sensitive attribute.
pub fn audit_columns<S: AsRef<str>>(names: &[S]) -> Result<()> {
    for name in names {
        let lower = name.as_ref().to_ascii_lowercase();
        if SENSITIVE_NAMES.contains(&lower.as_str()) || SENSITIVE_MARKERS.iter().any(|m| lower.contains(m)) {
            return Err(Error::AuditFailure(name.as_ref().to_string()));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct InsurerPayload {
    pub schema_version: u32,
    pub columns: Vec<String>,
    /// One row per record: standardized raw features or the learned representation.
    pub representation: Vec<Vec<f64>>,
    pub outcomes: Vec<f64>,
    /// Alternative covariates for noise estimation (standardized raw features).
    pub x_star: Option<Vec<Vec<f64>>>,
    pub x_star_columns: Vec<String>,
    pub task: Task,
}

impl InsurerPayload {
    pub fn rows(&self) -> usize {
        self.outcomes.len()
    }

    fn validate(&self) -> Result<()> {
        audit_columns(&self.columns)?;
        audit_columns(&self.x_star_columns)?;
        let n = self.outcomes.len();
        let check = |m: &[Vec<f64>], cols: usize| -> Result<()> {
            if m.len() != n {
                return Err(Error::DimensionMismatch {
                    expected: n,
                    actual: m.len(),
                });
            }
            if let Some(r) = m.iter().find(|r| r.len() != cols) {
                return Err(Error::DimensionMismatch {
                    expected: cols,
                    actual: r.len(),
                });
            }
            Ok(())
        };
        check(&self.representation, self.columns.len())?;
        if let Some(x) = &self.x_star {
            check(x, self.x_star_columns.len())?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrepareOptions {
    pub mode: RepresentationMode,
    pub hidden: Vec<usize>,
    pub cfg: TrainConfig,
    /// Also send standardized raw features for noise estimation.
    pub send_raw_x_star: bool,
}

impl Default for PrepareOptions {
    fn default() -> Self {
        PrepareOptions {
            mode: RepresentationMode::Raw,
            hidden: vec![5, 5, 5],
            cfg: TrainConfig::default(),
            send_raw_x_star: false,
        }
    }
}

/// What the insurer keeps after preparing a payload.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub payload: InsurerPayload,
    pub standardizer: Standardizer,
    pub transformation: Option<ScoreModel>,
}

fn token(name: &str) -> String {
    name.split_whitespace().collect::<Vec<_>>().join("_")
}

/// Builds the insurer's message. Sensitive columns of `dataset` are never
/// read, and the payload must pass the column audit.
pub fn insurer_prepare(dataset: &Dataset, opts: &PrepareOptions) -> Result<Prepared> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let features = dataset.features();
    let names: Vec<String> = dataset.feature_names().iter().map(|n| token(n)).collect();
    audit_columns(&names)?;
    let standardizer = Standardizer::fit(&features)?;
    let standardized: Vec<Vec<f64>> = features.iter().map(|x| standardizer.apply(x)).collect();
    let kind = match dataset.task() {
        Task::Regression => LossKind::SquaredError,
        Task::Classification => LossKind::BinaryCrossEntropy,
    };
    let (columns, representation, transformation) = match opts.mode {
        RepresentationMode::Raw => (names.clone(), standardized.clone(), None),
        RepresentationMode::Transformed => {
            let (t, _) = train_transformation(dataset, &opts.hidden, kind, &opts.cfg)?;
            let rep = features.iter().map(|x| t.representation(x)).collect::<Result<Vec<_>>>()?;
            let q = rep.first().map_or(0, Vec::len);
            ((0..q).map(|j| format!("t{j}")).collect(), rep, Some(t))
        }
    };
    let (x_star, x_star_columns) = if opts.send_raw_x_star {
        (Some(standardized), names)
    } else {
        (None, Vec::new())
    };
    let payload = InsurerPayload {
        schema_version: SCHEMA_VERSION,
        columns,
        representation,
        outcomes: dataset.outcomes(),
        x_star,
        x_star_columns,
        task: dataset.task(),
    };
    payload.validate()?;
    Ok(Prepared {
        payload,
        standardizer,
        transformation,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StoreMechanism {
    /// Privatized levels with a known keep probability.
    Known(f64),
    /// Privatized levels, keep probability unknown.
    Unknown,
    /// The stored levels are the true attribute.
    TrueAttribute,
}

/// The third party's sensitive column, aligned with payload rows by index.
#[derive(Debug, Clone, PartialEq)]
pub struct SensitiveStore {
    pub levels: Vec<SensitiveLevel>,
    pub cardinality: usize,
    pub mechanism: StoreMechanism,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TtpOptions {
    pub spec: HypothesisSpec,
    pub cfg: TrainConfig,
    /// Estimate the keep probability instead of using the store's value.
    pub estimate: Option<EstimateOptions>,
    /// Use the payload's raw-feature block for noise estimation.
    pub use_raw_x: bool,
    pub p_star: Option<ReferenceWeights>,
    pub export_models: bool,
}

impl Default for TtpOptions {
    fn default() -> Self {
        TtpOptions {
            spec: HypothesisSpec::default_net(),
            cfg: TrainConfig::default(),
            estimate: None,
            use_raw_x: false,
            p_star: None,
            export_models: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TTPResult {
    pub schema_version: u32,
    /// `"ok"` or `"error: …"`.
    pub status: String,
    pub task: Task,
    pub group_predictions: Vec<Vec<f64>>,
    pub dfp: Vec<f64>,
    pub p_star_used: Vec<f64>,
    pub noise_mode: NoiseMode,
    pub pi_used: f64,
    pub models: Option<GroupModelSet>,
}

impl TTPResult {
    pub fn is_ok(&self) -> bool {
        self.status == "ok"
    }

    /// Largest `|dfp − group_predictions · p*|` over rows.
    pub fn consistency_error(&self) -> f64 {
        self.group_predictions
            .iter()
            .zip(&self.dfp)
            .map(|(g, d)| (g.iter().zip(&self.p_star_used).map(|(a, b)| a * b).sum::<f64>() - d).abs())
            .fold(0.0, f64::max)
    }
}

/// Joins the payload with the store into a training set.
pub fn session_dataset(payload: &InsurerPayload, store: &SensitiveStore) -> Result<Dataset> {
    payload.validate()?;
    if store.levels.len() != payload.rows() {
        return Err(Error::InvalidInput(format!(
            "sensitive store has {} rows but the payload has {}; rows are joined by index",
            store.levels.len(),
            payload.rows()
        )));
    }
    let truth = store.mechanism == StoreMechanism::TrueAttribute;
    let records = payload
        .representation
        .iter()
        .zip(&payload.outcomes)
        .zip(&store.levels)
        .map(|((x, &y), &l)| Record {
            x: x.clone(),
            y,
            d: truth.then_some(l),
            s: (!truth).then_some(l),
        })
        .collect();
    Dataset::new(records, payload.columns.clone(), store.cardinality, payload.task)
}

fn run_pipeline(data: &Dataset, payload: &InsurerPayload, store: &SensitiveStore, opts: &TtpOptions) -> Result<FitOutcome> {
    let kind = match data.task() {
        Task::Regression => LossKind::SquaredError,
        Task::Classification => LossKind::BinaryCrossEntropy,
    };
    if store.mechanism == StoreMechanism::TrueAttribute {
        return mptp(data, &opts.spec, kind, &opts.cfg, opts.p_star.clone());
    }
    let noise = match (&opts.estimate, store.mechanism) {
        (Some(est), _) => {
            let mut est = est.clone();
            if opts.use_raw_x {
                est.x_star = Some(payload.x_star.clone().ok_or_else(|| {
                    Error::InvalidInput("raw-feature noise estimation requested but the payload has no x_star".into())
                })?);
            }
            NoiseSpec::Estimate(est)
        }
        (None, StoreMechanism::Known(pi)) => NoiseSpec::Known(pi),
        (None, _) => {
            return Err(Error::InvalidInput(
                "keep probability unknown; enable noise estimation".into(),
            ))
        }
    };
    mptp_ldp(data, &noise, &opts.spec, kind, &opts.cfg, opts.p_star.clone())
}

/// Trains the group models on the joined session and packages premiums.
/// Misaligned inputs are an error; failures of the training itself are
/// reported through the result's status.
pub fn ttp_serve(payload: &InsurerPayload, store: &SensitiveStore, opts: &TtpOptions) -> Result<TTPResult> {
    let data = session_dataset(payload, store)?;
    let mut result = TTPResult {
        schema_version: SCHEMA_VERSION,
        status: "ok".into(),
        task: payload.task,
        group_predictions: Vec::new(),
        dfp: Vec::new(),
        p_star_used: Vec::new(),
        noise_mode: if opts.estimate.is_some() {
            NoiseMode::Estimated
        } else if store.mechanism == StoreMechanism::TrueAttribute {
            NoiseMode::TrueAttribute
        } else {
            NoiseMode::Known
        },
        pi_used: f64::NAN,
        models: None,
    };
    match run_pipeline(&data, payload, store, opts) {
        Ok(out) => {
            result.group_predictions = out.report.best_estimate;
            result.dfp = out.report.dfp;
            result.p_star_used = out.p_star.as_slice().to_vec();
            result.noise_mode = out.noise_mode;
            result.pi_used = out.pi_used;
            if opts.export_models {
                result.models = Some(out.models);
            }
        }
        Err(e) => result.status = format!("error: {e}"),
    }
    Ok(result)
}

/// The insurer's view of a result: per-record premiums.
pub fn insurer_receive(result: &TTPResult) -> Result<PremiumReport> {
    if !result.is_ok() {
        return Err(Error::InvalidInput(format!("third party reported {}", result.status)));
    }
    let err = result.consistency_error();
    if err > 1e-10 {
        return Err(Error::InvalidInput(format!(
            "result is inconsistent: premiums deviate from the reference combination by {err}"
        )));
    }
    Ok(PremiumReport {
        best_estimate: result.group_predictions.clone(),
        unawareness: None,
        dfp: result.dfp.clone(),
        p_star: ReferenceWeights::new(result.p_star_used.clone())?,
        task: result.task,
    })
}

// ---------------------------------------------------------------------------
// codec
// ---------------------------------------------------------------------------

fn write_section(out: &mut String, name: &str, rows: &[Vec<f64>], cols: usize) {
    out.push_str(&format!("section {name} {} {cols}\n", rows.len()));
    for r in rows {
        let line: Vec<String> = r.iter().map(|v| fmt_float(*v)).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
}

fn header(out: &mut String, kind: &str, version: u32) {
    out.push_str(&format!("{MAGIC} {version}\ntype {kind}\n"));
}

pub fn serialize_payload(p: &InsurerPayload) -> Result<Vec<u8>> {
    p.validate()?;
    let mut out = String::new();
    header(&mut out, "payload", p.schema_version);
    out.push_str(&format!("task {}\n", p.task.as_str()));
    out.push_str(&format!("rows {}\n", p.rows()));
    out.push_str(&format!("columns {}\n", p.columns.join(" ")));
    out.push_str(&format!("x_star_columns {}\n", p.x_star_columns.join(" ")));
    write_section(&mut out, "representation", &p.representation, p.columns.len());
    let outcomes: Vec<Vec<f64>> = p.outcomes.iter().map(|&y| vec![y]).collect();
    write_section(&mut out, "outcomes", &outcomes, 1);
    if let Some(x) = &p.x_star {
        write_section(&mut out, "x_star", x, p.x_star_columns.len());
    }
    out.push_str("end\n");
    Ok(out.into_bytes())
}

pub fn serialize_result(r: &TTPResult) -> Result<Vec<u8>> {
    let mut out = String::new();
    header(&mut out, "result", r.schema_version);
    out.push_str(&format!("status {}\n", r.status.replace('\n', " ")));
    out.push_str(&format!("task {}\n", r.task.as_str()));
    out.push_str(&format!("noise_mode {}\n", r.noise_mode.as_str()));
    out.push_str(&format!("pi_used {}\n", fmt_float(r.pi_used)));
    let p: Vec<String> = r.p_star_used.iter().map(|v| fmt_float(*v)).collect();
    out.push_str(&format!("p_star {}\n", p.join(" ")));
    out.push_str(&format!("rows {}\n", r.dfp.len()));
    out.push_str(&format!("levels {}\n", r.p_star_used.len()));
    write_section(&mut out, "group_predictions", &r.group_predictions, r.p_star_used.len());
    let dfp: Vec<Vec<f64>> = r.dfp.iter().map(|&v| vec![v]).collect();
    write_section(&mut out, "dfp", &dfp, 1);
    let models = r.models.as_ref().map(GroupModelSet::to_text).unwrap_or_default();
    out.push_str(&format!("models {}\n", models.lines().count()));
    out.push_str(&models);
    out.push_str("end\n");
    Ok(out.into_bytes())
}

struct Lines<'a> {
    inner: std::str::Lines<'a>,
    peeked: Option<&'a str>,
}

fn err(code: CodecErrorCode, msg: impl Into<String>) -> Error {
    Error::codec(code, msg)
}

impl<'a> Lines<'a> {
    fn new(text: &'a str) -> Self {
        Lines {
            inner: text.lines(),
            peeked: None,
        }
    }

    fn next(&mut self) -> Result<&'a str> {
        self.peeked
            .take()
            .or_else(|| self.inner.next())
            .ok_or_else(|| err(CodecErrorCode::Truncated, "unexpected end of stream"))
    }

    fn peek(&mut self) -> Option<&'a str> {
        if self.peeked.is_none() {
            self.peeked = self.inner.next();
        }
        self.peeked
    }

    fn field(&mut self, key: &str) -> Result<&'a str> {
        let line = self.next()?;
        match line.split_once(' ') {
            Some((k, v)) if k == key => Ok(v),
            None if line == key => Ok(""),
            _ => Err(err(CodecErrorCode::Malformed, format!("expected `{key}`, found `{line}`"))),
        }
    }

    fn count(&mut self, key: &str) -> Result<usize> {
        let v = self.field(key)?;
        v.trim()
            .parse()
            .map_err(|_| err(CodecErrorCode::Malformed, format!("bad count `{v}` for `{key}`")))
    }

    fn section(&mut self, name: &str, rows: usize, cols: usize) -> Result<Vec<Vec<f64>>> {
        let head = self.field("section")?;
        let parts: Vec<&str> = head.split_whitespace().collect();
        if parts.len() != 3 || parts[0] != name {
            return Err(err(CodecErrorCode::Malformed, format!("expected section `{name}`, found `{head}`")));
        }
        let parse = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| err(CodecErrorCode::Malformed, format!("bad section size `{s}`")))
        };
        let (r, c) = (parse(parts[1])?, parse(parts[2])?);
        if r != rows || c != cols {
            return Err(err(
                CodecErrorCode::CountMismatch,
                format!("section `{name}` is {r}x{c}, header implies {rows}x{cols}"),
            ));
        }
        let mut out = Vec::with_capacity(r);
        for i in 0..r {
            let line = match self.peek() {
                None => return Err(err(CodecErrorCode::Truncated, format!("section `{name}` ends at row {i} of {r}"))),
                Some(l) if l.starts_with("section ") || l == "end" || l.starts_with("models ") => {
                    return Err(err(CodecErrorCode::Truncated, format!("section `{name}` ends at row {i} of {r}")))
                }
                Some(_) => self.next()?,
            };
            let values = line
                .split_whitespace()
                .map(|v| {
                    v.parse::<f64>()
                        .map_err(|_| err(CodecErrorCode::Malformed, format!("bad number `{v}`")))
                })
                .collect::<Result<Vec<f64>>>()?;
            if values.len() != c {
                return Err(err(
                    CodecErrorCode::CountMismatch,
                    format!("row {i} of `{name}` has {} values, expected {c}", values.len()),
                ));
            }
            out.push(values);
        }
        if let Some(l) = self.peek() {
            if !(l.starts_with("section ") || l == "end" || l.starts_with("models ")) {
                return Err(err(
                    CodecErrorCode::CountMismatch,
                    format!("section `{name}` has more than the declared {r} rows"),
                ));
            }
        }
        Ok(out)
    }

    fn finish(&mut self) -> Result<()> {
        match self.next()? {
            "end" => Ok(()),
            other => Err(err(
                CodecErrorCode::CountMismatch,
                format!("expected `end`, found `{other}` (more rows than declared?)"),
            )),
        }
    }
}

fn read_header<'a>(bytes: &'a [u8], kind: &str) -> Result<Lines<'a>> {
    let text = std::str::from_utf8(bytes).map_err(|_| err(CodecErrorCode::Malformed, "stream is not UTF-8"))?;
    if text.trim_end().lines().last() != Some("end") {
        return Err(err(CodecErrorCode::Truncated, "stream does not end with `end`"));
    }
    let mut lines = Lines::new(text);
    let first = lines.next()?;
    let version = first
        .strip_prefix(MAGIC)
        .map(str::trim)
        .ok_or_else(|| err(CodecErrorCode::Malformed, "missing exchange header"))?;
    let version: u32 = version
        .parse()
        .map_err(|_| err(CodecErrorCode::Malformed, format!("bad version `{version}`")))?;
    if version != SCHEMA_VERSION {
        return Err(err(
            CodecErrorCode::VersionMismatch,
            format!("schema version {version}, this build reads {SCHEMA_VERSION}"),
        ));
    }
    let t = lines.field("type")?;
    if t != kind {
        return Err(err(CodecErrorCode::Malformed, format!("expected a {kind}, found a {t}")));
    }
    Ok(lines)
}

fn parse_task(s: &str) -> Result<Task> {
    s.parse().map_err(|_| err(CodecErrorCode::Malformed, format!("bad task `{s}`")))
}

fn names(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

pub fn deserialize_payload(bytes: &[u8]) -> Result<InsurerPayload> {
    let mut lines = read_header(bytes, "payload")?;
    let task = parse_task(lines.field("task")?)?;
    let rows = lines.count("rows")?;
    let columns = names(lines.field("columns")?);
    let x_star_columns = names(lines.field("x_star_columns")?);
    let representation = lines.section("representation", rows, columns.len())?;
    let outcomes = lines.section("outcomes", rows, 1)?.into_iter().map(|r| r[0]).collect();
    let x_star = match lines.peek() {
        Some(l) if l.starts_with("section ") => Some(lines.section("x_star", rows, x_star_columns.len())?),
        _ => None,
    };
    lines.finish()?;
    let payload = InsurerPayload {
        schema_version: SCHEMA_VERSION,
        columns,
        representation,
        outcomes,
        x_star,
        x_star_columns,
        task,
    };
    payload.validate()?;
    Ok(payload)
}

pub fn deserialize_result(bytes: &[u8]) -> Result<TTPResult> {
    let mut lines = read_header(bytes, "result")?;
    let status = lines.field("status")?.to_string();
    let task = parse_task(lines.field("task")?)?;
    let noise_mode = match lines.field("noise_mode")? {
        "true_attribute" => NoiseMode::TrueAttribute,
        "known" => NoiseMode::Known,
        "estimated" => NoiseMode::Estimated,
        other => return Err(err(CodecErrorCode::Malformed, format!("bad noise mode `{other}`"))),
    };
    let num = |s: &str| {
        s.parse::<f64>()
            .map_err(|_| err(CodecErrorCode::Malformed, format!("bad number `{s}`")))
    };
    let pi_used = num(lines.field("pi_used")?.trim())?;
    let p_star_used = lines
        .field("p_star")?
        .split_whitespace()
        .map(num)
        .collect::<Result<Vec<f64>>>()?;
    let rows = lines.count("rows")?;
    let levels = lines.count("levels")?;
    if levels != p_star_used.len() {
        return Err(err(CodecErrorCode::CountMismatch, "p_star length differs from level count"));
    }
    let group_predictions = lines.section("group_predictions", rows, levels)?;
    let dfp = lines.section("dfp", rows, 1)?.into_iter().map(|r| r[0]).collect();
    let model_lines = lines.count("models")?;
    let models = if model_lines > 0 {
        let mut text = String::new();
        for _ in 0..model_lines {
            text.push_str(lines.next()?);
            text.push('\n');
        }
        Some(GroupModelSet::from_text(&text).map_err(|e| err(CodecErrorCode::Malformed, e.to_string()))?)
    } else {
        None
    };
    lines.finish()?;
    Ok(TTPResult {
        schema_version: SCHEMA_VERSION,
        status,
        task,
        group_predictions,
        dfp,
        p_star_used,
        noise_mode,
        pi_used,
        models,
    })
}
