//! Losses, score functions and their flat text serialization.
//!
//! A [`ScoreModel`] bundles a trainable body (linear or feed-forward) with
//! the feature standardization and target scaling it was trained under, so
//! callers always pass raw features and receive predictions on the
//! outcome's own scale.

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::StreamRng;
use crate::stats;

/// Probability clipping used by the cross-entropy loss.
pub const BCE_CLIP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    SquaredError,
    BinaryCrossEntropy,
}

impl LossKind {
    pub fn link(self) -> Link {
        match self {
            LossKind::SquaredError => Link::Identity,
            LossKind::BinaryCrossEntropy => Link::Sigmoid,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            LossKind::SquaredError => "mse",
            LossKind::BinaryCrossEntropy => "bce",
        }
    }
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mse" | "squared_error" => Ok(LossKind::SquaredError),
            "bce" | "binary_cross_entropy" => Ok(LossKind::BinaryCrossEntropy),
            other => Err(Error::InvalidInput(format!("unknown loss `{other}`"))),
        }
    }
}

/// Pointwise loss. Cross-entropy clips the prediction to `[1e-12, 1 − 1e-12]`
/// and requires a 0/1 target.
pub fn loss(kind: LossKind, prediction: f64, target: f64) -> Result<f64> {
    match kind {
        LossKind::SquaredError => Ok((prediction - target) * (prediction - target)),
        LossKind::BinaryCrossEntropy => {
            if target != 0.0 && target != 1.0 {
                return Err(Error::InvalidInput(format!(
                    "cross-entropy target must be 0 or 1, got {target}"
                )));
            }
            let p = prediction.clamp(BCE_CLIP, 1.0 - BCE_CLIP);
            Ok(-(target * p.ln() + (1.0 - target) * (1.0 - p).ln()))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Link {
    Identity,
    Sigmoid,
}

impl Link {
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Link::Identity => z,
            Link::Sigmoid => sigmoid(z),
        }
    }

    fn as_str(self) -> &'static str {
        match self {
            Link::Identity => "identity",
            Link::Sigmoid => "sigmoid",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(Link::Identity),
            "sigmoid" => Ok(Link::Sigmoid),
            other => Err(Error::InvalidInput(format!("unknown link `{other}`"))),
        }
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn relu(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        0.0
    }
}

/// Parameter access and reverse-mode gradients of the pre-activation
/// output `z(x; θ)`.
pub trait Differentiable {
    fn input_dim(&self) -> usize;
    fn num_params(&self) -> usize;
    fn params(&self) -> Vec<f64>;
    fn set_params(&mut self, params: &[f64]);
    fn pre_activation(&self, x: &[f64]) -> f64;
    /// Evaluates `z(x)`, then adds `dz(z) · ∂z/∂θ` into `grad`. Returns `z`.
    fn backprop(&self, x: &[f64], grad: &mut [f64], dz: &mut dyn FnMut(f64) -> f64, scratch: &mut Scratch) -> f64;
}

/// Reusable buffers for [`Differentiable::backprop`].
#[derive(Debug, Default)]
pub struct Scratch {
    acts: Vec<f64>,
    delta: Vec<f64>,
    prev: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub link: Link,
}

impl LinearModel {
    pub fn new(weights: Vec<f64>, bias: f64, link: Link) -> Self {
        LinearModel { weights, bias, link }
    }

    pub fn forward(&self, x: &[f64]) -> Result<f64> {
        check_dim(self.weights.len(), x.len())?;
        Ok(self.link.apply(self.pre_activation(x)))
    }
}

impl Differentiable for LinearModel {
    fn input_dim(&self) -> usize {
        self.weights.len()
    }

    fn num_params(&self) -> usize {
        self.weights.len() + 1
    }

    fn params(&self) -> Vec<f64> {
        let mut p = self.weights.clone();
        p.push(self.bias);
        p
    }

    fn set_params(&mut self, params: &[f64]) {
        let d = self.weights.len();
        self.weights.copy_from_slice(&params[..d]);
        self.bias = params[d];
    }

    fn pre_activation(&self, x: &[f64]) -> f64 {
        self.bias + self.weights.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
    }

    fn backprop(&self, x: &[f64], grad: &mut [f64], dz: &mut dyn FnMut(f64) -> f64, _: &mut Scratch) -> f64 {
        let z = self.pre_activation(x);
        let g = dz(z);
        let d = self.weights.len();
        for (gw, v) in grad[..d].iter_mut().zip(x) {
            *gw += g * v;
        }
        grad[d] += g;
        z
    }
}

/// Fully connected network: ReLU hidden layers, one linear output unit,
/// then the output link.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedForwardNet {
    layer_dims: Vec<usize>,
    /// Per layer, row-major `out × in`.
    weights: Vec<Vec<f64>>,
    biases: Vec<Vec<f64>>,
    pub link: Link,
}

impl FeedForwardNet {
    /// Zero-initialized network with `layer_dims = [input, hidden.., 1]`.
    pub fn zeros(layer_dims: Vec<usize>, link: Link) -> Result<Self> {
        if layer_dims.len() < 3 {
            return Err(Error::InvalidInput(
                "a feed-forward net needs an input, at least one hidden layer and an output".into(),
            ));
        }
        if *layer_dims.last().unwrap() != 1 {
            return Err(Error::InvalidInput("network output dimension must be 1".into()));
        }
        if layer_dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidInput("layer widths must be positive".into()));
        }
        let weights = layer_dims.windows(2).map(|w| vec![0.0; w[0] * w[1]]).collect();
        let biases = layer_dims.windows(2).map(|w| vec![0.0; w[1]]).collect();
        Ok(FeedForwardNet {
            layer_dims,
            weights,
            biases,
            link,
        })
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    /// Width of the last hidden layer.
    pub fn representation_dim(&self) -> usize {
        self.layer_dims[self.layer_dims.len() - 2]
    }

    pub fn forward(&self, x: &[f64]) -> Result<f64> {
        check_dim(self.layer_dims[0], x.len())?;
        Ok(self.link.apply(self.pre_activation(x)))
    }

    /// Writes every layer's activations into `acts` (input first, output
    /// pre-activation last) and returns the per-layer offsets.
    fn forward_into(&self, x: &[f64], acts: &mut Vec<f64>) {
        let layers = self.weights.len();
        let total: usize = self.layer_dims.iter().sum();
        acts.resize(total, 0.0);
        acts[..x.len()].copy_from_slice(x);
        let mut start = 0;
        for l in 0..layers {
            let inp = self.layer_dims[l];
            let (done, rest) = acts.split_at_mut(start + inp);
            let prev = &done[start..];
            let hidden = l + 1 < layers;
            for ((out, row), b) in rest.iter_mut().zip(self.weights[l].chunks_exact(inp)).zip(&self.biases[l]) {
                let mut v = *b;
                for (a, c) in row.iter().zip(prev) {
                    v += a * c;
                }
                *out = if hidden { relu(v) } else { v };
            }
            start += inp;
        }
    }

    /// Last hidden layer's activations for input `x`.
    pub fn extract_representation(&self, x: &[f64]) -> Vec<f64> {
        let mut acts = Vec::new();
        self.forward_into(x, &mut acts);
        let q = self.representation_dim();
        acts[acts.len() - 1 - q..acts.len() - 1].to_vec()
    }
}

impl Differentiable for FeedForwardNet {
    fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    fn num_params(&self) -> usize {
        self.weights.iter().map(Vec::len).sum::<usize>() + self.biases.iter().map(Vec::len).sum::<usize>()
    }

    fn params(&self) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.num_params());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            p.extend_from_slice(w);
            p.extend_from_slice(b);
        }
        p
    }

    fn set_params(&mut self, params: &[f64]) {
        let mut off = 0;
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            let (wl, bl) = (w.len(), b.len());
            w.copy_from_slice(&params[off..off + wl]);
            off += wl;
            b.copy_from_slice(&params[off..off + bl]);
            off += bl;
        }
    }

    fn pre_activation(&self, x: &[f64]) -> f64 {
        let mut acts = Vec::new();
        self.forward_into(x, &mut acts);
        acts[acts.len() - 1]
    }

    fn backprop(&self, x: &[f64], grad: &mut [f64], dz: &mut dyn FnMut(f64) -> f64, scratch: &mut Scratch) -> f64 {
        let Scratch { acts, delta, prev } = scratch;
        self.forward_into(x, acts);
        let layers = self.weights.len();
        let z = acts[acts.len() - 1];
        let mut act_end = acts.len() - 1;
        let mut param_end = grad.len();
        delta.clear();
        delta.push(dz(z));
        for l in (0..layers).rev() {
            let (inp, out) = (self.layer_dims[l], self.layer_dims[l + 1]);
            let input = &acts[act_end - inp..act_end];
            let wlen = inp * out;
            let base = param_end - wlen - out;
            for (o, &d) in delta.iter().enumerate() {
                let row = &mut grad[base + o * inp..base + (o + 1) * inp];
                for (g, a) in row.iter_mut().zip(input) {
                    *g += d * a;
                }
                grad[base + wlen + o] += d;
            }
            if l == 0 {
                break;
            }
            let w = &self.weights[l];
            prev.clear();
            prev.resize(inp, 0.0);
            for (o, &d) in delta.iter().enumerate() {
                for (p, wv) in prev.iter_mut().zip(&w[o * inp..(o + 1) * inp]) {
                    *p += d * wv;
                }
            }
            // ReLU derivative, taken as 0 at the kink
            for (p, a) in prev.iter_mut().zip(input) {
                if *a <= 0.0 {
                    *p = 0.0;
                }
            }
            std::mem::swap(delta, prev);
            act_end -= inp;
            param_end = base;
        }
        z
    }
}

fn check_dim(expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::DimensionMismatch { expected, actual });
    }
    Ok(())
}

/// Which hypothesis class to instantiate.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum HypothesisSpec {
    Linear,
    /// Hidden-layer widths of a ReLU network.
    Net { hidden: Vec<usize> },
}

impl HypothesisSpec {
    /// Three hidden layers of five units.
    pub fn default_net() -> Self {
        HypothesisSpec::Net {
            hidden: vec![5, 5, 5],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Hypothesis {
    Linear(LinearModel),
    Net(FeedForwardNet),
}

impl Hypothesis {
    /// Uniform initialization in `[−s, s]` with `s = init_scale / √fan_in`
    /// for every weight and bias of a layer.
    pub fn init(
        spec: &HypothesisSpec,
        input_dim: usize,
        link: Link,
        init_scale: f64,
        rng: &mut StreamRng,
    ) -> Result<Self> {
        let mut draw = |fan_in: usize, n: usize| -> Vec<f64> {
            let s = init_scale / (fan_in.max(1) as f64).sqrt();
            (0..n).map(|_| rng.gen_range(-1.0..=1.0) * s).collect()
        };
        match spec {
            HypothesisSpec::Linear => {
                let mut p = draw(input_dim, input_dim + 1);
                let bias = p.pop().unwrap();
                Ok(Hypothesis::Linear(LinearModel::new(p, bias, link)))
            }
            HypothesisSpec::Net { hidden } => {
                let mut dims = vec![input_dim];
                dims.extend(hidden);
                dims.push(1);
                let mut net = FeedForwardNet::zeros(dims, link)?;
                let mut params = Vec::with_capacity(net.num_params());
                for w in net.layer_dims.windows(2) {
                    params.extend(draw(w[0], w[0] * w[1] + w[1]));
                }
                net.set_params(&params);
                Ok(Hypothesis::Net(net))
            }
        }
    }

    pub fn link(&self) -> Link {
        match self {
            Hypothesis::Linear(m) => m.link,
            Hypothesis::Net(m) => m.link,
        }
    }

    pub fn as_dyn(&self) -> &dyn Differentiable {
        match self {
            Hypothesis::Linear(m) => m,
            Hypothesis::Net(m) => m,
        }
    }

    pub fn as_dyn_mut(&mut self) -> &mut dyn Differentiable {
        match self {
            Hypothesis::Linear(m) => m,
            Hypothesis::Net(m) => m,
        }
    }

    /// Applies the body and its link to already-standardized input.
    pub fn forward(&self, x: &[f64]) -> Result<f64> {
        match self {
            Hypothesis::Linear(m) => m.forward(x),
            Hypothesis::Net(m) => m.forward(x),
        }
    }
}

/// Per-feature affine standardization `(x − mean) / scale`.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    pub fn identity(dim: usize) -> Self {
        Standardizer {
            mean: vec![0.0; dim],
            scale: vec![1.0; dim],
        }
    }

    /// Column means and population standard deviations. Results do not
    /// depend on row order. Constant columns get scale 1.
    pub fn fit(rows: &[Vec<f64>]) -> Result<Self> {
        let first = rows.first().ok_or(Error::EmptyDataset)?;
        let dim = first.len();
        let n = rows.len() as f64;
        let mut mean = Vec::with_capacity(dim);
        let mut scale = Vec::with_capacity(dim);
        for j in 0..dim {
            let col: Vec<f64> = rows.iter().map(|r| r[j]).collect();
            let m = stats::order_invariant_sum(&col) / n;
            let sq: Vec<f64> = col.iter().map(|v| (v - m) * (v - m)).collect();
            let sd = (stats::order_invariant_sum(&sq) / n).sqrt();
            mean.push(m);
            scale.push(if sd > 1e-12 { sd } else { 1.0 });
        }
        Ok(Standardizer { mean, scale })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.mean.iter().zip(&self.scale))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }
}

/// Affine map between the outcome scale and the training scale.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TargetScale {
    pub shift: f64,
    pub scale: f64,
}

impl TargetScale {
    pub fn identity() -> Self {
        TargetScale {
            shift: 0.0,
            scale: 1.0,
        }
    }

    /// Mean and population standard deviation of the outcomes, order-invariant.
    pub fn fit(ys: &[f64]) -> Result<Self> {
        if ys.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let n = ys.len() as f64;
        let m = stats::order_invariant_sum(ys) / n;
        let sq: Vec<f64> = ys.iter().map(|v| (v - m) * (v - m)).collect();
        let sd = (stats::order_invariant_sum(&sq) / n).sqrt();
        Ok(TargetScale {
            shift: m,
            scale: if sd > 1e-12 { sd } else { 1.0 },
        })
    }

    pub fn to_training(&self, y: f64) -> f64 {
        (y - self.shift) / self.scale
    }

    pub fn to_outcome(&self, z: f64) -> f64 {
        z * self.scale + self.shift
    }
}

/// A trainable score function together with its input/output scaling.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreModel {
    pub hypothesis: Hypothesis,
    pub input: Standardizer,
    pub target: TargetScale,
}

impl ScoreModel {
    pub fn new(hypothesis: Hypothesis, input: Standardizer, target: TargetScale) -> Result<Self> {
        check_dim(hypothesis.as_dyn().input_dim(), input.dim())?;
        if hypothesis.link() == Link::Sigmoid && target != TargetScale::identity() {
            return Err(Error::InvalidInput(
                "sigmoid-link models predict probabilities; target scaling must be the identity".into(),
            ));
        }
        Ok(ScoreModel {
            hypothesis,
            input,
            target,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input.dim()
    }

    pub fn link(&self) -> Link {
        self.hypothesis.link()
    }

    /// Prediction for raw features.
    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        check_dim(self.input_dim(), x.len())?;
        let z = self.hypothesis.as_dyn().pre_activation(&self.input.apply(x));
        Ok(match self.link() {
            Link::Identity => self.target.to_outcome(z),
            Link::Sigmoid => sigmoid(z),
        })
    }

    /// Last-hidden-layer activations for raw features (networks only).
    pub fn representation(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.input_dim(), x.len())?;
        match &self.hypothesis {
            Hypothesis::Net(net) => Ok(net.extract_representation(&self.input.apply(x))),
            Hypothesis::Linear(_) => Err(Error::InvalidInput(
                "a linear model has no hidden representation".into(),
            )),
        }
    }

    /// For identity-link linear models: coefficients and intercept on the
    /// raw feature and outcome scale.
    pub fn effective_linear(&self) -> Option<(Vec<f64>, f64)> {
        let Hypothesis::Linear(m) = &self.hypothesis else {
            return None;
        };
        if m.link != Link::Identity {
            return None;
        }
        let ts = self.target;
        let coef: Vec<f64> = m
            .weights
            .iter()
            .zip(&self.input.scale)
            .map(|(w, s)| ts.scale * w / s)
            .collect();
        let shift: f64 = m
            .weights
            .iter()
            .zip(self.input.mean.iter().zip(&self.input.scale))
            .map(|(w, (mu, s))| w * mu / s)
            .sum();
        Some((coef, ts.to_outcome(m.bias - shift)))
    }

    // ----- serialization -------------------------------------------------

    pub const FORMAT_HEADER: &'static str = "fairprice-model v1";

    /// Versioned flat text: one `key values...` line per field, numbers in
    /// 17-significant-digit scientific notation, parameters row-major.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(Self::FORMAT_HEADER);
        out.push('\n');
        let (kind, dims) = match &self.hypothesis {
            Hypothesis::Linear(m) => ("linear", vec![m.weights.len(), 1]),
            Hypothesis::Net(n) => ("net", n.layer_dims.clone()),
        };
        out.push_str(&format!("kind {kind}\n"));
        out.push_str(&format!("link {}\n", self.link().as_str()));
        let dims: Vec<String> = dims.iter().map(usize::to_string).collect();
        out.push_str(&format!("layer_dims {}\n", dims.join(" ")));
        out.push_str(&format!("input_mean {}\n", fmt_floats(&self.input.mean)));
        out.push_str(&format!("input_scale {}\n", fmt_floats(&self.input.scale)));
        out.push_str(&format!("target_shift {}\n", fmt_float(self.target.shift)));
        out.push_str(&format!("target_scale {}\n", fmt_float(self.target.scale)));
        out.push_str(&format!("params {}\n", fmt_floats(&self.hypothesis.as_dyn().params())));
        out.push_str("end\n");
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        if lines.next().map(str::trim) != Some(Self::FORMAT_HEADER) {
            return Err(Error::InvalidInput("not a fairprice-model v1 document".into()));
        }
        let mut field = |key: &str| -> Result<String> {
            let line = lines
                .next()
                .ok_or_else(|| Error::InvalidInput(format!("model text truncated before `{key}`")))?;
            let rest = line
                .strip_prefix(key)
                .ok_or_else(|| Error::InvalidInput(format!("expected `{key}`, found `{line}`")))?;
            Ok(rest.trim().to_string())
        };
        let kind = field("kind")?;
        let link = Link::parse(&field("link")?)?;
        let dims: Vec<usize> = field("layer_dims")?
            .split_whitespace()
            .map(|v| v.parse().map_err(|_| Error::InvalidInput(format!("bad layer dim `{v}`"))))
            .collect::<Result<_>>()?;
        let mean = parse_floats(&field("input_mean")?)?;
        let scale = parse_floats(&field("input_scale")?)?;
        let shift = parse_float(&field("target_shift")?)?;
        let tscale = parse_float(&field("target_scale")?)?;
        let params = parse_floats(&field("params")?)?;
        if field("end").is_err() {
            return Err(Error::InvalidInput("model text missing `end`".into()));
        }
        let mut hypothesis = match kind.as_str() {
            "linear" => {
                let d = *dims.first().ok_or_else(|| Error::InvalidInput("empty layer_dims".into()))?;
                Hypothesis::Linear(LinearModel::new(vec![0.0; d], 0.0, link))
            }
            "net" => Hypothesis::Net(FeedForwardNet::zeros(dims, link)?),
            other => return Err(Error::InvalidInput(format!("unknown model kind `{other}`"))),
        };
        check_dim(hypothesis.as_dyn().num_params(), params.len())?;
        hypothesis.as_dyn_mut().set_params(&params);
        check_dim(mean.len(), scale.len())?;
        ScoreModel::new(
            hypothesis,
            Standardizer { mean, scale },
            TargetScale {
                shift,
                scale: tscale,
            },
        )
    }
}

pub(crate) fn fmt_float(v: f64) -> String {
    format!("{v:.16e}")
}

pub(crate) fn fmt_floats(vs: &[f64]) -> String {
    vs.iter().map(|v| fmt_float(*v)).collect::<Vec<_>>().join(" ")
}

pub(crate) fn parse_float(s: &str) -> Result<f64> {
    s.trim()
        .parse::<f64>()
        .map_err(|_| Error::InvalidInput(format!("bad number `{s}`")))
}

fn parse_floats(s: &str) -> Result<Vec<f64>> {
    s.split_whitespace().map(parse_float).collect()
}
