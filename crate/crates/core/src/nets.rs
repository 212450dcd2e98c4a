//! Base model `f = h(g(x))`: a fully connected feature extractor `g`, a fully
//! connected inference head `h`, their losses and parameter management.
//!
//! The treatment is not an input. A prediction for treatment `t` comes from
//! adapting the parameters on samples of group `t` (see `meta_engine`).

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::numkit::{Matrix, RngStream, Tape, Var};

/// Prediction task, fixed per dataset.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// Binary outcome, logistic output, cross-entropy loss.
    Classification,
    /// Real outcome, identity output, squared-error loss.
    Regression,
}

/// Hidden-layer nonlinearity.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Elu,
    Tanh,
}

/// One dense layer: `x * weight + bias`, weight is `in x out`, bias `1 x out`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub weight: Matrix,
    pub bias: Matrix,
}

impl Layer {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Matrix::zeros(fan_in, fan_out),
            bias: Matrix::zeros(1, fan_out),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.rows()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.cols()
    }
}

/// All trainable weights: extractor layers (`psi`) and head layers (`theta`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    pub psi: Vec<Layer>,
    pub theta: Vec<Layer>,
    pub activation: Activation,
}

/// Layer widths of the two networks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    /// Output width of each extractor layer; the last one is the embedding size.
    pub extractor_widths: Vec<usize>,
    /// Input width of each head layer; the first must equal the embedding
    /// size and a final layer maps to one output.
    pub head_widths: Vec<usize>,
    pub activation: Activation,
}

impl Architecture {
    pub fn embedding_dim(&self) -> usize {
        self.extractor_widths.last().copied().unwrap_or(self.input_dim)
    }

    /// `(fan_in, fan_out)` of every extractor layer then every head layer.
    pub fn layer_shapes(&self) -> Result<(Vec<(usize, usize)>, Vec<(usize, usize)>)> {
        if self.input_dim == 0 {
            return Err(Error::InvalidArgument("input dimension must be positive".into()));
        }
        if self.extractor_widths.is_empty() || self.head_widths.is_empty() {
            return Err(Error::InvalidArgument("extractor and head need at least one layer".into()));
        }
        if let Some(w) = self.extractor_widths.iter().chain(&self.head_widths).find(|&&w| w == 0) {
            return Err(Error::InvalidArgument(format!("zero-sized layer width {w}")));
        }
        if self.head_widths[0] != self.embedding_dim() {
            return Err(shape_err(
                "architecture: head input must equal the embedding size",
                self.embedding_dim(),
                self.head_widths[0],
            ));
        }
        let mut dims = vec![self.input_dim];
        dims.extend(&self.extractor_widths);
        let psi = dims.windows(2).map(|w| (w[0], w[1])).collect();
        let mut hd = self.head_widths.clone();
        hd.push(1);
        let theta = hd.windows(2).map(|w| (w[0], w[1])).collect();
        Ok((psi, theta))
    }
}

/// Draws weights uniformly in `±sqrt(6 / (fan_in + fan_out))`; biases start at zero.
pub fn init_params(arch: &Architecture, rng: &mut RngStream) -> Result<ParamSet> {
    let (psi_shapes, theta_shapes) = arch.layer_shapes()?;
    let mut layer = |(i, o): (usize, usize)| {
        let bound = (6.0 / (i + o) as f64).sqrt();
        let w = (0..i * o).map(|_| rng.uniform_range(-bound, bound)).collect();
        Layer {
            weight: Matrix::raw(i, o, w),
            bias: Matrix::zeros(1, o),
        }
    };
    let psi = psi_shapes.into_iter().map(&mut layer).collect();
    let theta = theta_shapes.into_iter().map(&mut layer).collect();
    Ok(ParamSet {
        psi,
        theta,
        activation: arch.activation,
    })
}

impl ParamSet {
    pub fn input_dim(&self) -> usize {
        self.psi.first().map_or(0, Layer::fan_in)
    }

    pub fn embedding_dim(&self) -> usize {
        self.psi.last().map_or(0, Layer::fan_out)
    }

    pub fn layers(&self) -> impl Iterator<Item = &Layer> {
        self.psi.iter().chain(&self.theta)
    }

    pub fn layers_mut(&mut self) -> impl Iterator<Item = &mut Layer> {
        self.psi.iter_mut().chain(self.theta.iter_mut())
    }

    /// Weight and bias matrices in canonical order: for each layer (extractor
    /// first), weight then bias.
    pub fn tensors(&self) -> Vec<&Matrix> {
        self.layers().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        self.layers_mut().flat_map(|l| [&mut l.weight, &mut l.bias]).collect()
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|m| m.len()).sum()
    }

    /// Checks that layer shapes chain from the input through the embedding to one output.
    pub fn validate(&self) -> Result<()> {
        let all: Vec<&Layer> = self.layers().collect();
        if self.psi.is_empty() || self.theta.is_empty() {
            return Err(Error::InvalidArgument("parameter set needs extractor and head layers".into()));
        }
        for l in &all {
            if l.bias.shape() != (1, l.fan_out()) {
                return Err(shape_err("layer bias", format!("1x{}", l.fan_out()), format!("{:?}", l.bias.shape())));
            }
        }
        for w in all.windows(2) {
            if w[0].fan_out() != w[1].fan_in() {
                return Err(shape_err("layer chain", w[0].fan_out(), w[1].fan_in()));
            }
        }
        if all.last().map(|l| l.fan_out()) != Some(1) {
            return Err(Error::InvalidArgument("head must end in a single output".into()));
        }
        Ok(())
    }

    /// Registers every tensor as a differentiable input.
    pub fn to_tape(&self, tape: &mut Tape) -> ParamVars {
        let vars = self.tensors().into_iter().map(|m| tape.param(m.clone())).collect();
        ParamVars {
            vars,
            n_psi: self.psi.len(),
            activation: self.activation,
        }
    }

    /// Registers every tensor as a constant.
    pub fn to_tape_const(&self, tape: &mut Tape) -> ParamVars {
        let vars = self.tensors().into_iter().map(|m| tape.constant(m.clone())).collect();
        ParamVars {
            vars,
            n_psi: self.psi.len(),
            activation: self.activation,
        }
    }

    /// Copy of `self` with tensors replaced by the tape values of `vars`.
    pub fn from_tape(&self, tape: &Tape, vars: &ParamVars) -> ParamSet {
        let mut out = self.clone();
        for (dst, v) in out.tensors_mut().into_iter().zip(&vars.vars) {
            *dst = tape.value(*v).clone();
        }
        out
    }

    /// Flat little-endian binary layout:
    ///
    /// ```text
    /// magic       8 bytes  "MITEPS01"
    /// activation  u32      0 = elu, 1 = tanh
    /// n_psi       u32
    /// n_theta     u32
    /// shapes      (u32 fan_in, u32 fan_out) per layer, extractor first
    /// data        per layer: fan_in*fan_out f64 weights (row-major), fan_out f64 biases
    /// ```
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(24 + self.num_params() * 8);
        out.extend_from_slice(PARAM_MAGIC);
        let act: u32 = match self.activation {
            Activation::Elu => 0,
            Activation::Tanh => 1,
        };
        for v in [act, self.psi.len() as u32, self.theta.len() as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for l in self.layers() {
            out.extend_from_slice(&(l.fan_in() as u32).to_le_bytes());
            out.extend_from_slice(&(l.fan_out() as u32).to_le_bytes());
        }
        for m in self.tensors() {
            for v in m.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Parses [`ParamSet::to_bytes`] output; returns the set and the bytes consumed.
    pub fn from_bytes(bytes: &[u8]) -> Result<(ParamSet, usize)> {
        let mut r = ByteReader { bytes, pos: 0 };
        if r.take(8)? != PARAM_MAGIC {
            return Err(Error::Checkpoint("bad parameter-set magic".into()));
        }
        let activation = match r.u32()? {
            0 => Activation::Elu,
            1 => Activation::Tanh,
            other => return Err(Error::Checkpoint(format!("unknown activation code {other}"))),
        };
        let n_psi = r.u32()? as usize;
        let n_theta = r.u32()? as usize;
        let mut shapes = Vec::with_capacity(n_psi + n_theta);
        for _ in 0..n_psi + n_theta {
            shapes.push((r.u32()? as usize, r.u32()? as usize));
        }
        let mut layers = Vec::with_capacity(shapes.len());
        for (i, o) in shapes {
            let weight = Matrix::from_vec(i, o, r.f64s(i * o)?)?;
            let bias = Matrix::from_vec(1, o, r.f64s(o)?)?;
            layers.push(Layer { weight, bias });
        }
        let theta = layers.split_off(n_psi);
        let set = ParamSet {
            psi: layers,
            theta,
            activation,
        };
        set.validate()?;
        Ok((set, r.pos))
    }
}

const PARAM_MAGIC: &[u8; 8] = b"MITEPS01";

pub(crate) struct ByteReader<'a> {
    pub bytes: &'a [u8],
    pub pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub fn rest(&self) -> &'a [u8] {
        &self.bytes[self.pos..]
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint("truncated data".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n * 8)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

/// Parameter tensors registered on a tape, in [`ParamSet::tensors`] order.
#[derive(Clone, Debug)]
pub struct ParamVars {
    pub vars: Vec<Var>,
    pub n_psi: usize,
    pub activation: Activation,
}

impl ParamVars {
    fn layer(&self, i: usize) -> (Var, Var) {
        (self.vars[2 * i], self.vars[2 * i + 1])
    }

    fn n_layers(&self) -> usize {
        self.vars.len() / 2
    }

    /// Weight tensors only (biases excluded).
    pub fn weights(&self) -> impl Iterator<Item = Var> + '_ {
        self.vars.iter().step_by(2).copied()
    }

    pub fn with_vars(&self, vars: Vec<Var>) -> ParamVars {
        debug_assert_eq!(vars.len(), self.vars.len());
        ParamVars {
            vars,
            n_psi: self.n_psi,
            activation: self.activation,
        }
    }
}

fn activate(tape: &mut Tape, act: Activation, x: Var) -> Var {
    match act {
        Activation::Elu => tape.elu(x),
        Activation::Tanh => tape.tanh(x),
    }
}

/// Embedding `g(x; psi)`; every extractor layer is followed by the activation.
pub fn extract_on_tape(tape: &mut Tape, params: &ParamVars, x: Var) -> Var {
    let mut h = x;
    for i in 0..params.n_psi {
        let (w, b) = params.layer(i);
        let a = tape.linear(h, w, b);
        h = activate(tape, params.activation, a);
    }
    h
}

/// Head pre-activation output (logit for classification); activation on all
/// but the last layer.
pub fn head_on_tape(tape: &mut Tape, params: &ParamVars, z: Var) -> Var {
    let mut h = z;
    let n = params.n_layers();
    for i in params.n_psi..n {
        let (w, b) = params.layer(i);
        let a = tape.linear(h, w, b);
        h = if i + 1 < n { activate(tape, params.activation, a) } else { a };
    }
    h
}

/// Embedding and raw head output for a batch.
pub fn forward_on_tape(tape: &mut Tape, params: &ParamVars, x: Var) -> (Var, Var) {
    let z = extract_on_tape(tape, params, x);
    let out = head_on_tape(tape, params, z);
    (z, out)
}

/// Mean inference loss from raw head outputs. Classification uses the
/// logit form `softplus(s) - y s`, equal to the cross-entropy of `sigmoid(s)`.
pub fn loss_on_tape(tape: &mut Tape, kind: TaskKind, raw: Var, y: Var) -> Var {
    match kind {
        TaskKind::Regression => {
            let d = tape.sub(raw, y);
            let sq = tape.square(d);
            tape.mean_all(sq)
        }
        TaskKind::Classification => {
            let sp = tape.softplus(raw);
            let ys = tape.mul(y, raw);
            let l = tape.sub(sp, ys);
            tape.mean_all(l)
        }
    }
}

/// `decay * sum of squared weights` over every layer, biases excluded.
pub fn l2_on_tape(tape: &mut Tape, params: &ParamVars, decay: f64) -> Var {
    let mut acc: Option<Var> = None;
    let weights: Vec<Var> = params.weights().collect();
    for w in weights {
        let sq = tape.square(w);
        let s = tape.sum_all(sq);
        acc = Some(match acc {
            None => s,
            Some(a) => tape.add(a, s),
        });
    }
    let total = acc.unwrap_or_else(|| tape.constant(Matrix::scalar(0.0)));
    tape.scale(total, decay)
}

fn check_input(x: &Matrix, expected: usize, context: &'static str) -> Result<()> {
    if x.cols() != expected {
        return Err(shape_err(context, format!("{expected} columns"), x.cols()));
    }
    Ok(())
}

/// Embeds the rows of `x` with the extractor of `params`.
pub fn extract(params: &ParamSet, x: &Matrix) -> Result<Matrix> {
    check_input(x, params.input_dim(), "extract")?;
    let mut tape = Tape::new();
    let pv = params.to_tape_const(&mut tape);
    let xv = tape.constant(x.clone());
    let z = extract_on_tape(&mut tape, &pv, xv);
    Ok(tape.value(z).clone())
}

/// Applies the head to embeddings: probabilities for classification,
/// unbounded values for regression. Output is `B x 1`.
pub fn infer(params: &ParamSet, kind: TaskKind, z: &Matrix) -> Result<Matrix> {
    check_input(z, params.embedding_dim(), "infer")?;
    let mut tape = Tape::new();
    let pv = params.to_tape_const(&mut tape);
    let zv = tape.constant(z.clone());
    let raw = head_on_tape(&mut tape, &pv, zv);
    Ok(output_link(kind, tape.value(raw)))
}

/// `infer(extract(x))`.
pub fn predict(params: &ParamSet, kind: TaskKind, x: &Matrix) -> Result<Matrix> {
    check_input(x, params.input_dim(), "predict")?;
    let mut tape = Tape::new();
    let pv = params.to_tape_const(&mut tape);
    let xv = tape.constant(x.clone());
    let (_, raw) = forward_on_tape(&mut tape, &pv, xv);
    Ok(output_link(kind, tape.value(raw)))
}

fn output_link(kind: TaskKind, raw: &Matrix) -> Matrix {
    match kind {
        TaskKind::Regression => raw.clone(),
        TaskKind::Classification => raw.map(crate::numkit::sigmoid),
    }
}

/// Mean cross-entropy (classification) or mean squared error (regression)
/// between targets and predictions, both `B x 1` or plain vectors.
pub fn inference_loss(kind: TaskKind, y: &[f64], yhat: &[f64]) -> Result<f64> {
    if y.is_empty() {
        return Err(Error::EmptyInput("inference_loss needs a non-empty batch"));
    }
    if y.len() != yhat.len() {
        return Err(shape_err("inference_loss", y.len(), yhat.len()));
    }
    let n = y.len() as f64;
    match kind {
        TaskKind::Regression => Ok(y.iter().zip(yhat).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n),
        TaskKind::Classification => {
            if let Some(p) = yhat.iter().find(|p| !(**p > 0.0 && **p < 1.0)) {
                return Err(Error::InvalidArgument(format!(
                    "classification predictions must lie in (0,1), got {p}"
                )));
            }
            if let Some(t) = y.iter().find(|t| **t != 0.0 && **t != 1.0) {
                return Err(Error::InvalidArgument(format!("classification targets must be 0 or 1, got {t}")));
            }
            let s: f64 = y
                .iter()
                .zip(yhat)
                .map(|(t, p)| t * p.ln() + (1.0 - t) * (1.0 - p).ln())
                .sum();
            Ok(-s / n)
        }
    }
}

/// `decay * sum of squared weights` over all layers (biases excluded).
pub fn l2_penalty(params: &ParamSet, decay: f64) -> f64 {
    decay * params.layers().map(|l| l.weight.frobenius_sq()).sum::<f64>()
}
