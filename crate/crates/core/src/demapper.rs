//! Soft demappers producing per-bit LLRs.
//!
//! LLRs follow the convention `L_i > 0` ⇒ bit `i` is more likely 0, and are
//! clamped to `±LLR_CLAMP`.

use std::fmt::Write as _;
use std::path::Path;

use num_complex::Complex64;
use rand::seq::SliceRandom;
use rand::Rng;

use crate::constellation::Constellation;
use crate::error::{Error, Result};
use crate::numerics::{CVar, Tape, Tensor, Var};

pub const LLR_CLAMP: f64 = 50.0;

const WEIGHTS_MAGIC: &str = "wiener-gcs weights v1";

/// Per-bit log-likelihood ratios for one received symbol.
#[derive(Debug, Clone, PartialEq)]
pub struct LlrVector(Vec<f64>);

impl LlrVector {
    /// Clamps every entry to `±LLR_CLAMP`.
    pub fn clamped(values: Vec<f64>) -> Self {
        Self(values.into_iter().map(|l| l.clamp(-LLR_CLAMP, LLR_CLAMP)).collect())
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Index sets `X_i^b` of the points whose label has bit `b` at position `i`.
#[derive(Debug, Clone)]
pub struct SymbolSets {
    sets: Vec<[Vec<usize>; 2]>,
}

impl SymbolSets {
    pub fn new(m: usize) -> Self {
        let sets = (0..m)
            .map(|i| {
                let shift = m - 1 - i;
                let mut zero = Vec::with_capacity(1 << (m - 1));
                let mut one = Vec::with_capacity(1 << (m - 1));
                for idx in 0..1usize << m {
                    if (idx >> shift) & 1 == 0 {
                        zero.push(idx);
                    } else {
                        one.push(idx);
                    }
                }
                [zero, one]
            })
            .collect();
        Self { sets }
    }

    pub fn get(&self, position: usize, bit: u8) -> &[usize] {
        &self.sets[position][bit as usize]
    }
}

/// Exact log-MAP LLRs under an AWGN assumption with total noise variance `n0`.
pub fn logmap_llr(y: Complex64, c: &Constellation, n0: f64) -> Result<LlrVector> {
    let sets = SymbolSets::new(c.bits_per_symbol());
    logmap_llr_with(y, c, n0, &sets)
}

/// [`logmap_llr`] with precomputed index sets, for batch use.
pub fn logmap_llr_with(y: Complex64, c: &Constellation, n0: f64, sets: &SymbolSets) -> Result<LlrVector> {
    if !(n0 > 0.0) || !n0.is_finite() {
        return Err(Error::Parameter(format!("N0 must be positive, got {n0}")));
    }
    let metrics: Vec<f64> = c.points().iter().map(|x| -(y - x).norm_sqr() / n0).collect();
    // one shared max keeps every set's sum in range: the set holding the
    // maximum sums to at least 1, and underflow in the other set only
    // happens far beyond the clamp
    let max = metrics.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = metrics.iter().map(|v| (v - max).exp()).collect();
    let llrs = (0..c.bits_per_symbol())
        .map(|i| {
            let num: f64 = sets.get(i, 0).iter().map(|&j| weights[j]).sum();
            let den: f64 = sets.get(i, 1).iter().map(|&j| weights[j]).sum();
            num.ln() - den.ln()
        })
        .collect();
    Ok(LlrVector::clamped(llrs))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
        }
    }

    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    fn apply_tape(self, tape: &mut Tape, x: Var) -> Result<Var> {
        match self {
            Activation::Relu => tape.relu(x),
            Activation::Tanh => tape.tanh(x),
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            other => Err(Error::Parameter(format!("unknown activation {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layout {
    /// One network on `(ℜy, ℑy)` producing all `m` LLRs.
    Full,
    /// ℜ-network on `ℜy` for bits `1..m/2`, ℑ-network on `ℑy` for the rest.
    Separated,
}

impl Layout {
    pub fn name(self) -> &'static str {
        match self {
            Layout::Full => "full",
            Layout::Separated => "separated",
        }
    }
}

impl std::str::FromStr for Layout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Layout::Full),
            "separated" => Ok(Layout::Separated),
            other => Err(Error::Parameter(format!("unknown demapper layout {other:?}"))),
        }
    }
}

/// Half-width of the region over which initial hidden hyperplanes are
/// anchored; covers the outer points of unit-power square QAM.
const INIT_SPAN: f64 = 1.2;

/// Single-hidden-layer perceptron `W2 τ(W1 x + b1) + b2`, weights stored
/// row-major with shape (out × in).
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub inputs: usize,
    pub hidden: usize,
    pub outputs: usize,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl Mlp {
    pub fn zeros(inputs: usize, hidden: usize, outputs: usize) -> Self {
        Self {
            inputs,
            hidden,
            outputs,
            w1: vec![0.0; hidden * inputs],
            b1: vec![0.0; hidden],
            w2: vec![0.0; outputs * hidden],
            b2: vec![0.0; outputs],
        }
    }

    /// Uniform fan-in scaled initialization. Hidden biases are chosen so each
    /// unit's hyperplane passes through a Latin-hypercube point of
    /// [-INIT_SPAN, INIT_SPAN]^inputs, which spreads the relu hinges over the
    /// range of unit-power received symbols instead of clustering them.
    pub fn random<R: Rng + ?Sized>(inputs: usize, hidden: usize, outputs: usize, rng: &mut R) -> Self {
        let mut net = Self::zeros(inputs, hidden, outputs);
        let a1 = (6.0 / inputs as f64).sqrt();
        let a2 = (6.0 / (hidden + outputs) as f64).sqrt();
        net.w1.iter_mut().for_each(|w| *w = rng.random_range(-a1..a1));
        let mut anchors = vec![0.0; hidden * inputs];
        for i in 0..inputs {
            let mut strata: Vec<usize> = (0..hidden).collect();
            strata.shuffle(rng);
            for (j, s) in strata.into_iter().enumerate() {
                let u = (s as f64 + rng.random::<f64>()) / hidden as f64;
                anchors[j * inputs + i] = INIT_SPAN * (2.0 * u - 1.0);
            }
        }
        for j in 0..hidden {
            let row = j * inputs..(j + 1) * inputs;
            net.b1[j] = -net.w1[row.clone()].iter().zip(&anchors[row]).map(|(w, u)| w * u).sum::<f64>();
        }
        net.w2.iter_mut().for_each(|w| *w = rng.random_range(-a2..a2));
        net
    }

    pub fn n_params(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    fn params_into(&self, out: &mut Vec<f64>) {
        out.extend(&self.w1);
        out.extend(&self.b1);
        out.extend(&self.w2);
        out.extend(&self.b2);
    }

    fn set_params_from(&mut self, p: &[f64]) -> usize {
        let mut at = 0;
        for buf in [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2] {
            let n = buf.len();
            buf.copy_from_slice(&p[at..at + n]);
            at += n;
        }
        at
    }

    pub fn forward(&self, x: &[f64], activation: Activation) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.inputs);
        let hidden: Vec<f64> = (0..self.hidden)
            .map(|j| {
                let row = &self.w1[j * self.inputs..(j + 1) * self.inputs];
                let pre = row.iter().zip(x).map(|(w, x)| w * x).sum::<f64>() + self.b1[j];
                activation.apply(pre)
            })
            .collect();
        (0..self.outputs)
            .map(|i| {
                let row = &self.w2[i * self.hidden..(i + 1) * self.hidden];
                row.iter().zip(&hidden).map(|(w, h)| w * h).sum::<f64>() + self.b2[i]
            })
            .collect()
    }
}

/// Tape view of an [`Mlp`].
#[derive(Debug, Clone)]
pub struct MlpVars {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl MlpVars {
    fn from_vars(net: &Mlp, vars: &[Var]) -> Result<Self> {
        let (a, rest) = vars.split_at(net.w1.len());
        let (b, rest) = rest.split_at(net.b1.len());
        let (c, d) = rest.split_at(net.w2.len());
        Ok(Self {
            w1: Tensor::new(net.hidden, net.inputs, a.to_vec())?,
            b1: Tensor::column(b.to_vec()),
            w2: Tensor::new(net.outputs, net.hidden, c.to_vec())?,
            b2: Tensor::column(d.to_vec()),
        })
    }

    pub fn forward(&self, tape: &mut Tape, x: &Tensor, activation: Activation) -> Result<Tensor> {
        let pre = tape.matvec(&self.w1, x)?;
        let pre = tape.add_tensors(&pre, &self.b1)?;
        let h = tape.map_tensor(&pre, |t, v| activation.apply_tape(t, v))?;
        let out = tape.matvec(&self.w2, &h)?;
        tape.add_tensors(&out, &self.b2)
    }
}

/// Weights of a full or separated neural demapper with one hidden layer.
#[derive(Debug, Clone, PartialEq)]
pub struct NnDemapperModel {
    layout: Layout,
    m: usize,
    n: usize,
    activation: Activation,
    nets: Vec<Mlp>,
}

impl NnDemapperModel {
    fn check_dims(layout: Layout, m: usize, n: usize) -> Result<()> {
        if m == 0 || n == 0 {
            return Err(Error::Parameter(format!("demapper needs m, n ≥ 1, got m={m} n={n}")));
        }
        if layout == Layout::Separated && m % 2 != 0 {
            return Err(Error::Parameter(format!(
                "separated demapper needs an even number of bits, got {m}"
            )));
        }
        Ok(())
    }

    fn shapes(layout: Layout, m: usize) -> Vec<(usize, usize)> {
        match layout {
            Layout::Full => vec![(2, m)],
            Layout::Separated => vec![(1, m / 2), (1, m / 2)],
        }
    }

    pub fn zeros(layout: Layout, m: usize, n: usize, activation: Activation) -> Result<Self> {
        Self::check_dims(layout, m, n)?;
        let nets = Self::shapes(layout, m)
            .into_iter()
            .map(|(k, out)| Mlp::zeros(k, n, out))
            .collect();
        Ok(Self { layout, m, n, activation, nets })
    }

    pub fn random<R: Rng + ?Sized>(
        layout: Layout,
        m: usize,
        n: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        Self::check_dims(layout, m, n)?;
        let nets = Self::shapes(layout, m)
            .into_iter()
            .map(|(k, out)| Mlp::random(k, n, out, rng))
            .collect();
        Ok(Self { layout, m, n, activation, nets })
    }

    pub fn layout(&self) -> Layout {
        self.layout
    }

    pub fn bits_per_symbol(&self) -> usize {
        self.m
    }

    pub fn hidden_width(&self) -> usize {
        self.n
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    /// The full network, or the ℜ- and ℑ-networks in that order.
    pub fn nets(&self) -> &[Mlp] {
        &self.nets
    }

    pub fn nets_mut(&mut self) -> &mut [Mlp] {
        &mut self.nets
    }

    pub fn n_params(&self) -> usize {
        self.nets.iter().map(Mlp::n_params).sum()
    }

    /// All weights flattened network by network as `W1, b1, W2, b2`.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        self.nets.iter().for_each(|n| n.params_into(&mut out));
        out
    }

    pub fn set_params(&mut self, p: &[f64]) -> Result<()> {
        if p.len() != self.n_params() {
            return Err(Error::Shape(format!(
                "{} parameters for a model with {}",
                p.len(),
                self.n_params()
            )));
        }
        let mut at = 0;
        for net in &mut self.nets {
            at += net.set_params_from(&p[at..]);
        }
        Ok(())
    }

    /// LLRs for one received symbol.
    pub fn llr(&self, y: Complex64) -> LlrVector {
        let raw = match self.layout {
            Layout::Full => self.nets[0].forward(&[y.re, y.im], self.activation),
            Layout::Separated => {
                let mut out = self.nets[0].forward(&[y.re], self.activation);
                out.extend(self.nets[1].forward(&[y.im], self.activation));
                out
            }
        };
        LlrVector::clamped(raw)
    }

    /// Records the parameters on `tape` as leaves, in [`Self::params`] order.
    pub fn to_tape(&self, tape: &mut Tape) -> Result<DemapperVars> {
        let params = tape.leaves(&self.params())?;
        self.bind(&params)
    }

    /// Binds existing tape variables (in [`Self::params`] order) as weights.
    pub fn bind(&self, params: &[Var]) -> Result<DemapperVars> {
        if params.len() != self.n_params() {
            return Err(Error::Shape(format!(
                "{} variables for a model with {} parameters",
                params.len(),
                self.n_params()
            )));
        }
        let mut at = 0;
        let mut nets = Vec::with_capacity(self.nets.len());
        for net in &self.nets {
            nets.push(MlpVars::from_vars(net, &params[at..at + net.n_params()])?);
            at += net.n_params();
        }
        Ok(DemapperVars {
            layout: self.layout,
            m: self.m,
            activation: self.activation,
            nets,
        })
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "{WEIGHTS_MAGIC}\n{} {} {} {}\n",
            self.layout.name(),
            self.m,
            self.n,
            self.activation.name()
        );
        let row = |out: &mut String, values: &[f64]| {
            let line: Vec<String> = values.iter().map(|v| v.to_string()).collect();
            let _ = writeln!(out, "{}", line.join(" "));
        };
        for net in &self.nets {
            for r in net.w1.chunks(net.inputs) {
                row(&mut out, r);
            }
            row(&mut out, &net.b1);
            for r in net.w2.chunks(net.hidden) {
                row(&mut out, r);
            }
            row(&mut out, &net.b2);
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, l)) if l.trim() == WEIGHTS_MAGIC => {}
            _ => return Err(Error::parse("weights line 1", format!("expected `{WEIGHTS_MAGIC}`"))),
        }
        let (_, header) = lines
            .next()
            .ok_or_else(|| Error::parse("weights line 2", "missing header"))?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        if fields.len() != 4 {
            return Err(Error::parse("weights line 2", "expected `layout m n activation`"));
        }
        let layout: Layout = fields[0].parse()?;
        let m: usize = fields[1].parse().map_err(|e| Error::parse("weights line 2", format!("m: {e}")))?;
        let n: usize = fields[2].parse().map_err(|e| Error::parse("weights line 2", format!("n: {e}")))?;
        let activation: Activation = fields[3].parse()?;
        let mut model = Self::zeros(layout, m, n, activation)?;

        let mut next_row = |len: usize| -> Result<Vec<f64>> {
            let (i, line) = lines
                .next()
                .ok_or_else(|| Error::parse("weights", "unexpected end of file"))?;
            let values = line
                .split_whitespace()
                .map(|v| v.parse::<f64>().map_err(|e| Error::parse(format!("weights line {}", i + 1), e.to_string())))
                .collect::<Result<Vec<_>>>()?;
            if values.len() != len {
                return Err(Error::parse(
                    format!("weights line {}", i + 1),
                    format!("expected {len} values, got {}", values.len()),
                ));
            }
            Ok(values)
        };
        for net in &mut model.nets {
            let mut w1 = Vec::with_capacity(net.w1.len());
            for _ in 0..net.hidden {
                w1.extend(next_row(net.inputs)?);
            }
            net.w1 = w1;
            net.b1 = next_row(net.hidden)?;
            let mut w2 = Vec::with_capacity(net.w2.len());
            for _ in 0..net.outputs {
                w2.extend(next_row(net.hidden)?);
            }
            net.w2 = w2;
            net.b2 = next_row(net.outputs)?;
        }
        if model.params().iter().any(|p| !p.is_finite()) {
            return Err(Error::parse("weights", "non-finite weight"));
        }
        Ok(model)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, self.to_text())?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

/// Tape view of an [`NnDemapperModel`].
#[derive(Debug, Clone)]
pub struct DemapperVars {
    layout: Layout,
    m: usize,
    activation: Activation,
    nets: Vec<MlpVars>,
}

impl DemapperVars {
    pub fn layout(&self) -> Layout {
        self.layout
    }

    /// Clamped LLRs for the layout this model was built with.
    pub fn llr(&self, tape: &mut Tape, y: CVar) -> Result<Vec<Var>> {
        match self.layout {
            Layout::Full => nn_full_llr(tape, y, self),
            Layout::Separated => nn_separated_llr(tape, y, self),
        }
    }
}

fn clamp_all(tape: &mut Tape, out: Tensor) -> Result<Vec<Var>> {
    out.into_vec()
        .into_iter()
        .map(|v| tape.clamp(v, -LLR_CLAMP, LLR_CLAMP))
        .collect()
}

/// Full demapper: one network on `(ℜy, ℑy)`.
pub fn nn_full_llr(tape: &mut Tape, y: CVar, model: &DemapperVars) -> Result<Vec<Var>> {
    if model.layout != Layout::Full {
        return Err(Error::Usage("nn_full_llr called with a separated model".into()));
    }
    let x = Tensor::column(vec![y.re, y.im]);
    let out = model.nets[0].forward(tape, &x, model.activation)?;
    clamp_all(tape, out)
}

/// Separated demapper: ℜ-network on `ℜy`, ℑ-network on `ℑy`, outputs
/// concatenated in that order.
pub fn nn_separated_llr(tape: &mut Tape, y: CVar, model: &DemapperVars) -> Result<Vec<Var>> {
    if model.layout != Layout::Separated {
        return Err(Error::Usage("nn_separated_llr called with a full model".into()));
    }
    if model.m % 2 != 0 {
        return Err(Error::Parameter(format!("odd bits per symbol {}", model.m)));
    }
    let re = model.nets[0].forward(tape, &Tensor::column(vec![y.re]), model.activation)?;
    let im = model.nets[1].forward(tape, &Tensor::column(vec![y.im]), model.activation)?;
    let mut out = clamp_all(tape, re)?;
    out.extend(clamp_all(tape, im)?);
    Ok(out)
}

/// Demapper family, for complexity accounting.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DemapperKind {
    Gaussian,
    NnFull,
    NnSeparated,
}

impl std::str::FromStr for DemapperKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(DemapperKind::Gaussian),
            "full" | "nn_full" => Ok(DemapperKind::NnFull),
            "separated" | "nn_separated" => Ok(DemapperKind::NnSeparated),
            other => Err(Error::Parameter(format!("unknown demapper kind {other:?}"))),
        }
    }
}

/// `kn + (ℓ-1)n + n·outputs` real multiplications for a network with input
/// width `k`, `layers` hidden layers of width `n`.
pub fn nn_multiplications(k: u64, n: u64, layers: u64, outputs: u64) -> u64 {
    k * n + layers.saturating_sub(1) * n + n * outputs
}

/// Real multiplications per received symbol.
///
/// The Gaussian demapper needs `4M` (one complex multiplication per point at
/// four real multiplications each). The full network sees a 2-wide input;
/// the separated pair are two 1-input networks with `m/2` outputs each.
pub fn count_multiplications(kind: DemapperKind, m: u32, n: u64, layers: u64) -> u64 {
    match kind {
        DemapperKind::Gaussian => 4 * (1u64 << m),
        DemapperKind::NnFull => nn_multiplications(2, n, layers, m as u64),
        DemapperKind::NnSeparated => 2 * nn_multiplications(1, n, layers, m as u64 / 2),
    }
}

/// Hidden width at which a full network matches the Gaussian demapper's
/// multiplication count, `4·2^m/(m+2)` rounded to nearest.
pub fn equal_complexity_width(m: u32) -> u64 {
    let num = 4u64 << m;
    let den = m as u64 + 2;
    (num + den / 2) / den
}
