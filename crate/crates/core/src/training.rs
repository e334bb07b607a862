//! Bitwise auto-encoder training and BMI validation.
//!
//! One training step samples random labels, maps them through the
//! power-normalized constellation, impairs them with freshly drawn AWGN and
//! Wiener phase noise (constants on the tape), corrects the phase with the
//! soft blind phase search at the annealed temperature, demaps, and takes an
//! Adam step on the binary cross-entropy. Validation replaces the soft search
//! with the hard one and reports BMI over independent seeds.

use std::f64::consts::{FRAC_PI_2, LN_2};
use std::path::Path;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::channel::{self, ChannelParams, DEFAULT_SYMBOL_RATE_BAUD};
use crate::config::{render, KeyValues};
use crate::constellation::{normalize_power_tape, BitBlock, Constellation};
use crate::cpe::{anneal, bps_diff, bps_hard, AngleSpan, BpsConfig, Temperature};
use crate::demapper::{
    count_multiplications, logmap_llr_with, Activation, DemapperKind, DemapperVars, Layout,
    LlrVector, NnDemapperModel, SymbolSets,
};
use crate::error::{Error, Result};
use crate::numerics::{softplus, CVar, Tape, Var};

/// Noise floor used by the Gaussian demapper on a noiseless channel.
const MIN_N0: f64 = 1e-9;

// Losses and metrics.

fn check_batch(n_llrs: usize, n_bits: usize, widths: impl Iterator<Item = (usize, usize)>) -> Result<()> {
    if n_llrs != n_bits {
        return Err(Error::Shape(format!("{n_llrs} LLR vectors for {n_bits} bit blocks")));
    }
    if n_llrs == 0 {
        return Err(Error::Shape("empty batch".into()));
    }
    for (a, b) in widths {
        if a != b {
            return Err(Error::Shape(format!("{a} LLRs for {b} bits")));
        }
    }
    Ok(())
}

/// Mean binary cross-entropy in nats per bit: mean of `softplus((2b-1)·L)`.
pub fn bce_loss(llrs: &[LlrVector], bits: &[BitBlock]) -> Result<f64> {
    check_batch(llrs.len(), bits.len(), llrs.iter().zip(bits).map(|(l, b)| (l.len(), b.len())))?;
    let mut total = 0.0;
    let mut count = 0usize;
    for (l, b) in llrs.iter().zip(bits) {
        for (&llr, &bit) in l.values().iter().zip(b.bits()) {
            total += softplus((2.0 * bit as f64 - 1.0) * llr);
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Differentiable [`bce_loss`].
pub fn bce_loss_tape(tape: &mut Tape, llrs: &[Vec<Var>], bits: &[BitBlock]) -> Result<Var> {
    check_batch(llrs.len(), bits.len(), llrs.iter().zip(bits).map(|(l, b)| (l.len(), b.len())))?;
    let mut terms = Vec::with_capacity(llrs.len() * bits[0].len());
    for (l, b) in llrs.iter().zip(bits) {
        for (&llr, &bit) in l.iter().zip(b.bits()) {
            let signed = tape.scale(llr, 2.0 * bit as f64 - 1.0)?;
            terms.push(tape.softplus(signed)?);
        }
    }
    tape.mean(&terms)
}

/// Bitwise mutual information in bits per symbol, `m (1 - BCE / ln 2)`.
pub fn bmi(llrs: &[LlrVector], bits: &[BitBlock]) -> Result<f64> {
    let loss = bce_loss(llrs, bits)?;
    Ok(bmi_from_loss(loss, bits[0].len()))
}

pub fn bmi_from_loss(loss: f64, m: usize) -> f64 {
    m as f64 * (1.0 - loss / LN_2)
}

// Demappers used at validation time.

/// Receiver-side demapper of a system.
#[derive(Debug, Clone, PartialEq)]
pub enum Demapper {
    /// Log-MAP with the true channel N0.
    Gaussian,
    Neural(NnDemapperModel),
}

impl Demapper {
    pub fn kind(&self) -> DemapperKind {
        match self {
            Demapper::Gaussian => DemapperKind::Gaussian,
            Demapper::Neural(model) => match model.layout() {
                Layout::Full => DemapperKind::NnFull,
                Layout::Separated => DemapperKind::NnSeparated,
            },
        }
    }

    /// Real multiplications per received symbol.
    pub fn multiplications(&self, m: usize) -> u64 {
        let n = match self {
            Demapper::Gaussian => 0,
            Demapper::Neural(model) => model.hidden_width() as u64,
        };
        count_multiplications(self.kind(), m as u32, n, 1)
    }

    pub fn describe(&self) -> String {
        match self {
            Demapper::Gaussian => "gaussian".into(),
            Demapper::Neural(model) => format!("{} n={}", model.layout().name(), model.hidden_width()),
        }
    }
}

struct DemapContext<'a> {
    constellation: &'a Constellation,
    demapper: &'a Demapper,
    sets: SymbolSets,
    n0: f64,
}

impl<'a> DemapContext<'a> {
    fn new(sys: &'a TrainedSystem, n0: f64) -> Self {
        Self {
            constellation: &sys.constellation,
            demapper: &sys.demapper,
            sets: SymbolSets::new(sys.constellation.bits_per_symbol()),
            n0: n0.max(MIN_N0),
        }
    }

    fn llr(&self, y: Complex64) -> Result<LlrVector> {
        match self.demapper {
            Demapper::Gaussian => logmap_llr_with(y, self.constellation, self.n0, &self.sets),
            Demapper::Neural(model) => Ok(model.llr(y)),
        }
    }
}

// Configuration.

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adaptive moment estimation over a flat parameter vector.
#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    first: Vec<f64>,
    second: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n_params: usize, cfg: AdamConfig) -> Self {
        Self {
            cfg,
            first: vec![0.0; n_params],
            second: vec![0.0; n_params],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], learning_rate: f64) {
        self.step_split(params, grads, learning_rate, params.len(), learning_rate);
    }

    /// Step with `lr_head` for the first `split` parameters and `lr_tail`
    /// for the rest.
    pub fn step_split(&mut self, params: &mut [f64], grads: &[f64], lr_head: f64, split: usize, lr_tail: f64) {
        self.t += 1;
        let AdamConfig { beta1, beta2, eps } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.t);
        let c2 = 1.0 - beta2.powi(self.t);
        for (i, (((p, &g), m), v)) in params.iter_mut().zip(grads).zip(&mut self.first).zip(&mut self.second).enumerate() {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let lr = if i < split { lr_head } else { lr_tail };
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
        }
    }
}

pub const TRAIN_CONFIG_KEYS: &[&str] = &[
    "m",
    "steps",
    "batch_symbols",
    "learning_rate",
    "demapper_lr_scale",
    "seed",
    "snr_db",
    "linewidth_hz",
    "symbol_rate_baud",
    "n_angles",
    "window",
    "angle_span",
    "layout",
    "hidden",
    "activation",
    "adam_beta1",
    "adam_beta2",
    "adam_eps",
    "init_sigma",
    "freeze_noise",
];

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub m: usize,
    pub steps: usize,
    pub batch_symbols: usize,
    /// Adam step size of the constellation coordinates.
    pub learning_rate: f64,
    /// Demapper step size relative to `learning_rate`.
    pub demapper_lr_scale: f64,
    pub seed: u64,
    pub channel: ChannelParams,
    pub bps: BpsConfig,
    pub layout: Layout,
    pub hidden: usize,
    pub activation: Activation,
    pub adam: AdamConfig,
    /// Deviation of the Gaussian jitter added to the initial square QAM.
    pub init_sigma: f64,
    /// Reuse one noise realization for every step.
    pub freeze_noise: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            m: 6,
            steps: 2000,
            batch_symbols: 1024,
            learning_rate: 1e-3,
            demapper_lr_scale: 10.0,
            seed: 0,
            channel: ChannelParams::new(17.0, 100e3, DEFAULT_SYMBOL_RATE_BAUD).expect("valid defaults"),
            bps: BpsConfig::default(),
            layout: Layout::Separated,
            hidden: 8,
            activation: Activation::Relu,
            adam: AdamConfig::default(),
            init_sigma: 0.01,
            freeze_noise: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Parameter("steps must be at least 1".into()));
        }
        self.bps.validate()?;
        if self.batch_symbols < self.bps.window || self.batch_symbols <= 2 * self.bps.edge() {
            return Err(Error::Parameter(format!(
                "batch of {} symbols is too short for a BPS window of {}",
                self.batch_symbols, self.bps.window
            )));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Parameter(format!("invalid learning rate {}", self.learning_rate)));
        }
        if !(self.demapper_lr_scale >= 0.0) || !self.demapper_lr_scale.is_finite() {
            return Err(Error::Parameter(format!("invalid demapper_lr_scale {}", self.demapper_lr_scale)));
        }
        if !(self.init_sigma >= 0.0) {
            return Err(Error::Parameter(format!("invalid init_sigma {}", self.init_sigma)));
        }
        if self.m % 2 != 0 {
            return Err(Error::Parameter(format!(
                "training starts from square QAM and needs even m, got {}",
                self.m
            )));
        }
        if self.hidden == 0 {
            return Err(Error::Parameter("hidden width must be at least 1".into()));
        }
        Ok(())
    }

    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("m", self.m.to_string()),
            ("steps", self.steps.to_string()),
            ("batch_symbols", self.batch_symbols.to_string()),
            ("learning_rate", self.learning_rate.to_string()),
            ("demapper_lr_scale", self.demapper_lr_scale.to_string()),
            ("seed", self.seed.to_string()),
            ("snr_db", self.channel.snr_db.to_string()),
            ("linewidth_hz", self.channel.linewidth_hz.to_string()),
            ("symbol_rate_baud", self.channel.symbol_rate_baud.to_string()),
            ("n_angles", self.bps.n_angles.to_string()),
            ("window", self.bps.window.to_string()),
            ("angle_span", self.bps.span.name().to_string()),
            ("layout", self.layout.name().to_string()),
            ("hidden", self.hidden.to_string()),
            ("activation", self.activation.name().to_string()),
            ("adam_beta1", self.adam.beta1.to_string()),
            ("adam_beta2", self.adam.beta2.to_string()),
            ("adam_eps", self.adam.eps.to_string()),
            ("init_sigma", self.init_sigma.to_string()),
            ("freeze_noise", self.freeze_noise.to_string()),
        ]
    }

    /// Overrides fields present in `kv`; other keys are left to the caller.
    pub fn apply(&mut self, kv: &KeyValues) -> Result<()> {
        macro_rules! set {
            ($key:literal, $field:expr) => {
                if let Some(v) = kv.get($key)? {
                    $field = v;
                }
            };
        }
        set!("m", self.m);
        set!("steps", self.steps);
        set!("batch_symbols", self.batch_symbols);
        set!("learning_rate", self.learning_rate);
        set!("demapper_lr_scale", self.demapper_lr_scale);
        set!("seed", self.seed);
        let mut snr = self.channel.snr_db;
        let mut linewidth = self.channel.linewidth_hz;
        let mut rate = self.channel.symbol_rate_baud;
        set!("snr_db", snr);
        set!("linewidth_hz", linewidth);
        set!("symbol_rate_baud", rate);
        self.channel = ChannelParams::new(snr, linewidth, rate)?;
        set!("n_angles", self.bps.n_angles);
        set!("window", self.bps.window);
        if let Some(span) = kv.get::<String>("angle_span")? {
            self.bps.span = span.parse::<AngleSpan>()?;
        }
        if let Some(layout) = kv.get::<String>("layout")? {
            self.layout = layout.parse()?;
        }
        set!("hidden", self.hidden);
        if let Some(act) = kv.get::<String>("activation")? {
            self.activation = act.parse()?;
        }
        set!("adam_beta1", self.adam.beta1);
        set!("adam_beta2", self.adam.beta2);
        set!("adam_eps", self.adam.eps);
        set!("init_sigma", self.init_sigma);
        set!("freeze_noise", self.freeze_noise);
        Ok(())
    }
}

// The differentiable chain.

/// Randomness of one training batch: labels, AWGN samples and phase track.
#[derive(Debug, Clone)]
pub struct ChainSample {
    pub indices: Vec<usize>,
    pub noise: Vec<Complex64>,
    pub phases: Vec<f64>,
}

impl ChainSample {
    pub fn draw<R: Rng + ?Sized>(
        rng: &mut R,
        m: usize,
        len: usize,
        channel: &ChannelParams,
        initial_phase: f64,
    ) -> Result<Self> {
        let indices = (0..len).map(|_| rng.random_range(0..1usize << m)).collect();
        let noise = channel::sample_awgn(len, channel.sigma_n, rng)?;
        let phases = channel::sample_phase_track(len, channel.sigma_phi, initial_phase, rng)?;
        Ok(Self { indices, noise, phases })
    }
}

/// Loss and intermediate values of one pass through the differentiable chain.
#[derive(Debug, Clone)]
pub struct ChainOutput {
    pub loss: Var,
    /// Channel output before phase correction.
    pub received: Vec<CVar>,
    /// Normalized constellation points.
    pub points: Vec<CVar>,
}

/// Records Tx → channel → soft BPS → demapper → BCE on `tape`.
///
/// `points` are the raw (unnormalized) trainable coordinates. Symbols within
/// `bps.edge()` of either block end are excluded from the loss.
pub fn chain_loss(
    tape: &mut Tape,
    points: &[CVar],
    demapper: &DemapperVars,
    sample: &ChainSample,
    m: usize,
    bps: &BpsConfig,
    temperature: Temperature,
) -> Result<ChainOutput> {
    let normalized = normalize_power_tape(tape, points)?;
    let mut received = Vec::with_capacity(sample.indices.len());
    for ((&idx, &n), &phi) in sample.indices.iter().zip(&sample.noise).zip(&sample.phases) {
        let y = tape.cadd_const(normalized[idx], n)?;
        received.push(tape.crotate(y, phi)?);
    }
    let corrected = bps_diff(tape, &received, &normalized, bps, temperature)?;
    let edge = bps.edge();
    let len = received.len();
    let mut llrs = Vec::with_capacity(len - 2 * edge);
    let mut bits = Vec::with_capacity(len - 2 * edge);
    for k in edge..len - edge {
        llrs.push(demapper.llr(tape, corrected.symbols[k])?);
        bits.push(BitBlock::from_index(sample.indices[k], m));
    }
    let loss = bce_loss_tape(tape, &llrs, &bits)?;
    Ok(ChainOutput {
        loss,
        received,
        points: normalized,
    })
}

fn coords_to_points(vars: &[Var]) -> Vec<CVar> {
    vars.chunks_exact(2).map(|c| CVar { re: c[0], im: c[1] }).collect()
}

/// Loss and gradient of the chain for a flat parameter vector
/// `[constellation coords…, demapper params…]`.
pub fn chain_loss_and_grad(
    tape: &mut Tape,
    params: &[f64],
    template: &NnDemapperModel,
    sample: &ChainSample,
    bps: &BpsConfig,
    temperature: Temperature,
) -> Result<(f64, Vec<f64>)> {
    tape.clear();
    let vars = tape.leaves(params)?;
    let (coord_vars, weight_vars) = vars.split_at(2 << template.bits_per_symbol());
    let demapper = template.bind(weight_vars)?;
    let points = coords_to_points(coord_vars);
    let out = chain_loss(tape, &points, &demapper, sample, template.bits_per_symbol(), bps, temperature)?;
    tape.backward(out.loss)?;
    let grads = vars.iter().map(|&v| tape.grad(v)).collect();
    Ok((tape.value(out.loss), grads))
}

/// Miniature chain used by gradient checks: M = 4, four test angles,
/// window 4, eight symbols.
pub fn miniature_chain(seed: u64) -> Result<(Vec<f64>, NnDemapperModel, ChainSample, BpsConfig)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = 2;
    let constellation = Constellation::square_qam(m)?.perturbed(0.1, &mut rng)?;
    let model = NnDemapperModel::random(Layout::Separated, m, 4, Activation::Relu, &mut rng)?;
    let channel = ChannelParams::new(10.0, 5e8, DEFAULT_SYMBOL_RATE_BAUD)?;
    let sample = ChainSample::draw(&mut rng, m, 8, &channel, 0.05)?;
    let bps = BpsConfig::new(4, 4, AngleSpan::Quadrant)?;
    let mut params = constellation.to_coords();
    params.extend(model.params());
    Ok((params, model, sample, bps))
}

/// Gradient check of the whole miniature chain against central differences.
pub fn chain_gradcheck(seed: u64, temperature: f64, step: f64) -> Result<crate::numerics::GradCheck> {
    let (params, model, sample, bps) = miniature_chain(seed)?;
    let n_coords = 2 * (1 << model.bits_per_symbol());
    let temperature = Temperature::new(temperature)?;
    crate::numerics::gradcheck(
        |tape, vars| {
            let (c, w) = vars.split_at(n_coords);
            let demapper = model.bind(w)?;
            let out = chain_loss(tape, &coords_to_points(c), &demapper, &sample, model.bits_per_symbol(), &bps, temperature)?;
            Ok(out.loss)
        },
        &params,
        step,
    )
}

// Training.

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub temperature: f64,
    pub loss: f64,
    /// `m (1 - loss / ln 2)` on the training batch.
    pub bmi: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingMeta {
    pub config: TrainConfig,
    pub steps_run: usize,
    pub final_temperature: f64,
    pub final_loss: f64,
    /// Ambiguous BPS branch decisions when the final batch is run through
    /// the hard search with the trained constellation.
    pub slips: usize,
    pub history: Vec<StepRecord>,
}

/// Frozen constellation and demapper.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedSystem {
    pub constellation: Constellation,
    pub demapper: Demapper,
    pub meta: Option<TrainingMeta>,
}

impl TrainedSystem {
    /// Square QAM with the log-MAP demapper.
    pub fn qam_gaussian(m: usize) -> Result<Self> {
        Ok(Self {
            constellation: Constellation::square_qam(m)?,
            demapper: Demapper::Gaussian,
            meta: None,
        })
    }

    /// Untrained starting point of [`train_e2e`] for `cfg`.
    pub fn initial(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let constellation = Constellation::square_qam(cfg.m)?.perturbed(cfg.init_sigma, &mut rng)?;
        let model = NnDemapperModel::random(cfg.layout, cfg.m, cfg.hidden, cfg.activation, &mut rng)?;
        Ok(Self {
            constellation: constellation.normalize_power()?,
            demapper: Demapper::Neural(model),
            meta: None,
        })
    }

    pub fn bits_per_symbol(&self) -> usize {
        self.constellation.bits_per_symbol()
    }

    /// Writes `constellation.tsv`, `weights.txt` (neural demappers only),
    /// `metadata.txt` and, for trained systems, `history.tsv` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.constellation.write_tsv(&dir.join("constellation.tsv"))?;
        let mut pairs: Vec<(&str, String)> = Vec::new();
        match &self.demapper {
            Demapper::Gaussian => pairs.push(("demapper", "gaussian".into())),
            Demapper::Neural(model) => {
                pairs.push(("demapper", "neural".into()));
                model.write(&dir.join("weights.txt"))?;
            }
        }
        if let Some(meta) = &self.meta {
            pairs.extend(meta.config.to_pairs());
            pairs.push(("steps_run", meta.steps_run.to_string()));
            pairs.push(("final_temperature", meta.final_temperature.to_string()));
            pairs.push(("final_loss", meta.final_loss.to_string()));
            pairs.push(("slips", meta.slips.to_string()));
            let mut history = String::from("step\ttemperature\tloss\tbmi\n");
            for r in &meta.history {
                history.push_str(&format!("{}\t{}\t{}\t{}\n", r.step, r.temperature, r.loss, r.bmi));
            }
            std::fs::write(dir.join("history.tsv"), history)?;
        }
        std::fs::write(dir.join("metadata.txt"), render(&pairs))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let constellation = Constellation::read_tsv(&dir.join("constellation.tsv"))?;
        let kv = KeyValues::read(&dir.join("metadata.txt"))?;
        let demapper = match kv.raw("demapper") {
            Some("gaussian") => Demapper::Gaussian,
            Some("neural") => Demapper::Neural(NnDemapperModel::read(&dir.join("weights.txt"))?),
            other => {
                return Err(Error::parse(
                    dir.join("metadata.txt").display().to_string(),
                    format!("unknown demapper {other:?}"),
                ))
            }
        };
        let meta = match kv.get::<usize>("steps_run")? {
            None => None,
            Some(steps_run) => {
                let mut config = TrainConfig::default();
                config.apply(&kv)?;
                let history = match std::fs::read_to_string(dir.join("history.tsv")) {
                    Ok(text) => parse_history(&text)?,
                    Err(_) => Vec::new(),
                };
                Some(TrainingMeta {
                    config,
                    steps_run,
                    final_temperature: kv.get("final_temperature")?.unwrap_or(f64::NAN),
                    final_loss: kv.get("final_loss")?.unwrap_or(f64::NAN),
                    slips: kv.get("slips")?.unwrap_or(0),
                    history,
                })
            }
        };
        Ok(Self {
            constellation,
            demapper,
            meta,
        })
    }
}

fn parse_history(text: &str) -> Result<Vec<StepRecord>> {
    text.lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, line)| {
            let f: Vec<&str> = line.split('\t').collect();
            let bad = || Error::parse(format!("history line {}", i + 2), "expected 4 fields");
            if f.len() != 4 {
                return Err(bad());
            }
            Ok(StepRecord {
                step: f[0].parse().map_err(|_| bad())?,
                temperature: f[1].parse().map_err(|_| bad())?,
                loss: f[2].parse().map_err(|_| bad())?,
                bmi: f[3].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

/// Trains constellation and demapper jointly. Deterministic given the seed.
pub fn train_e2e(cfg: &TrainConfig) -> Result<TrainedSystem> {
    train_e2e_with(cfg, |_| {})
}

/// [`train_e2e`] with a callback after every step.
pub fn train_e2e_with(cfg: &TrainConfig, mut on_step: impl FnMut(&StepRecord)) -> Result<TrainedSystem> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let init = Constellation::square_qam(cfg.m)?.perturbed(cfg.init_sigma, &mut rng)?;
    let mut model = NnDemapperModel::random(cfg.layout, cfg.m, cfg.hidden, cfg.activation, &mut rng)?;
    // independent stream for the channel so the initialization does not
    // shift with batch settings
    let mut channel_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    channel_rng.set_stream(1);

    let n_coords = 2 * init.order();
    let mut params = init.to_coords();
    params.extend(model.params());
    let mut adam = Adam::new(params.len(), cfg.adam);
    let mut tape = Tape::new();
    let mut history = Vec::with_capacity(cfg.steps);

    let draw = |rng: &mut ChaCha8Rng| ChainSample::draw(rng, cfg.m, cfg.batch_symbols, &cfg.channel, 0.0);
    let frozen = if cfg.freeze_noise { Some(draw(&mut channel_rng)?) } else { None };
    let mut last_sample = None;
    let mut temperature = anneal(0, cfg.steps)?;

    for step in 0..cfg.steps {
        temperature = anneal(step, cfg.steps)?;
        let sample = match &frozen {
            Some(s) => s.clone(),
            None => draw(&mut channel_rng)?,
        };
        let diverged = |loss: f64| Error::TrainingDiverged { step, loss };
        let (loss, grads) = match chain_loss_and_grad(&mut tape, &params, &model, &sample, &cfg.bps, temperature) {
            Ok(r) => r,
            Err(Error::NumericDomain { .. }) => return Err(diverged(f64::NAN)),
            Err(e) => return Err(e),
        };
        if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
            return Err(diverged(loss));
        }
        let lr = cfg.learning_rate;
        adam.step_split(&mut params, &grads, lr, n_coords, lr * cfg.demapper_lr_scale);
        if params.iter().any(|p| !p.is_finite()) {
            return Err(diverged(loss));
        }
        let record = StepRecord {
            step,
            temperature: temperature.value(),
            loss,
            bmi: bmi_from_loss(loss, cfg.m),
        };
        on_step(&record);
        history.push(record);
        last_sample = Some(sample);
    }

    let (coords, weights) = params.split_at(n_coords);
    let constellation = Constellation::from_coords(cfg.m, coords)?.normalize_power()?;
    model.set_params(weights)?;

    let slips = match last_sample {
        Some(sample) => {
            let z: Vec<Complex64> = sample
                .indices
                .iter()
                .zip(&sample.noise)
                .zip(&sample.phases)
                .map(|((&i, n), &phi)| (constellation.point(i) + n) * Complex64::from_polar(1.0, phi))
                .collect();
            bps_hard(&z, constellation.points(), &cfg.bps)?.slips
        }
        None => 0,
    };
    let final_loss = history.last().map(|r| r.loss).unwrap_or(f64::NAN);
    Ok(TrainedSystem {
        constellation,
        demapper: Demapper::Neural(model),
        meta: Some(TrainingMeta {
            config: cfg.clone(),
            steps_run: cfg.steps,
            final_temperature: temperature.value(),
            final_loss,
            slips,
            history,
        }),
    })
}

// Validation.

/// Phase correction applied before demapping at validation time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Cpe {
    /// Hard blind phase search.
    Bps(BpsConfig),
    /// Removes the true phase track; a reference for the BPS penalty.
    Genie,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeedResult {
    pub bmi: f64,
    /// Best BMI over the four quadrant rotations of the corrected symbols
    /// (BPS only).
    pub best_rotation_bmi: Option<f64>,
    pub slips: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Validation {
    pub mean: f64,
    /// Sample standard deviation across seeds.
    pub stddev: f64,
    pub per_seed: Vec<SeedResult>,
}

impl Validation {
    pub fn best_rotation_mean(&self) -> Option<f64> {
        let values: Option<Vec<f64>> = self.per_seed.iter().map(|s| s.best_rotation_bmi).collect();
        values.map(|v| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn total_slips(&self) -> usize {
        self.per_seed.iter().map(|s| s.slips).sum()
    }
}

fn bmi_of(ctx: &DemapContext<'_>, symbols: &[Complex64], bits: &[BitBlock]) -> Result<f64> {
    let llrs = symbols.iter().map(|&y| ctx.llr(y)).collect::<Result<Vec<_>>>()?;
    bmi(&llrs, bits)
}

/// One Monte-Carlo run of the validation chain.
pub fn simulate_seed(
    sys: &TrainedSystem,
    channel: &ChannelParams,
    cpe: &Cpe,
    n_symbols: usize,
    seed: u64,
    stream: u64,
) -> Result<SeedResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let c = &sys.constellation;
    let m = c.bits_per_symbol();
    let indices: Vec<usize> = (0..n_symbols).map(|_| rng.random_range(0..c.order())).collect();
    let x: Vec<Complex64> = indices.iter().map(|&i| c.point(i)).collect();
    // the track starts at zero as in training; BPS has no absolute quadrant
    // reference, so a start near ±π/4 would leave the whole block's
    // quadrant to chance
    let (z, track) = channel::transmit(&x, channel, 0.0, &mut rng)?;

    let (corrected, edge, slips) = match cpe {
        Cpe::Bps(cfg) => {
            let out = bps_hard(&z, c.points(), cfg)?;
            (out.symbols, cfg.edge(), out.slips)
        }
        Cpe::Genie => (
            z.iter()
                .zip(&track)
                .map(|(z, &phi)| z * Complex64::from_polar(1.0, -phi))
                .collect(),
            0,
            0,
        ),
    };
    let kept = &corrected[edge..n_symbols - edge];
    let bits: Vec<BitBlock> = indices[edge..n_symbols - edge]
        .iter()
        .map(|&i| BitBlock::from_index(i, m))
        .collect();
    let ctx = DemapContext::new(sys, channel.n0());
    let value = bmi_of(&ctx, kept, &bits)?;
    let best_rotation_bmi = match cpe {
        Cpe::Bps(_) => {
            let mut best = value;
            for q in 1..4 {
                let rot = Complex64::from_polar(1.0, q as f64 * FRAC_PI_2);
                let rotated: Vec<Complex64> = kept.iter().map(|y| y * rot).collect();
                best = best.max(bmi_of(&ctx, &rotated, &bits)?);
            }
            Some(best)
        }
        Cpe::Genie => None,
    };
    Ok(SeedResult {
        bmi: value,
        best_rotation_bmi,
        slips,
    })
}

/// BMI mean and spread over `n_seeds` independent runs of `n_symbols`.
pub fn validate(
    sys: &TrainedSystem,
    channel: &ChannelParams,
    cpe: &Cpe,
    n_symbols: usize,
    n_seeds: usize,
    seed: u64,
) -> Result<Validation> {
    if n_seeds < 2 {
        return Err(Error::Parameter(format!("need at least 2 seeds, got {n_seeds}")));
    }
    let min_symbols = match cpe {
        Cpe::Bps(cfg) => cfg.window * 10,
        Cpe::Genie => 1,
    };
    if n_symbols < min_symbols {
        return Err(Error::Parameter(format!(
            "need at least {min_symbols} symbols per seed, got {n_symbols}"
        )));
    }
    let per_seed = (0..n_seeds as u64)
        .into_par_iter()
        .map(|s| simulate_seed(sys, channel, cpe, n_symbols, seed, s + 1))
        .collect::<Result<Vec<_>>>()?;
    let n = per_seed.len() as f64;
    let mean = per_seed.iter().map(|s| s.bmi).sum::<f64>() / n;
    let var = per_seed.iter().map(|s| (s.bmi - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok(Validation {
        mean,
        stddev: var.sqrt(),
        per_seed,
    })
}
