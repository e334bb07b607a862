//! SNR and linewidth sweeps over a set of frozen systems.
//!
//! Each system gets one data file: a header line (`snr mean stddev` or
//! `linewidth mean stddev`), one space-separated row per grid point in
//! ascending order, and a trailing `#` provenance comment. Linewidths are in
//! kHz in sweep files.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::channel::{ChannelParams, DEFAULT_SYMBOL_RATE_BAUD};
use crate::config::{render, KeyValues};
use crate::cpe::{AngleSpan, BpsConfig};
use crate::demapper::DemapperKind;
use crate::error::{Error, Result};
use crate::training::{validate, Cpe, Demapper, TrainedSystem};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Snr,
    Linewidth,
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::Snr => "snr",
            Axis::Linewidth => "linewidth",
        }
    }

    pub fn header(self) -> String {
        format!("{} mean stddev", self.name())
    }

    /// Default grid: 14..=25 dB, or {50, 100, 200, ..., 600} kHz.
    pub fn default_grid(self) -> Vec<f64> {
        match self {
            Axis::Snr => (14..=25).map(f64::from).collect(),
            Axis::Linewidth => vec![50.0, 100.0, 200.0, 300.0, 400.0, 500.0, 600.0],
        }
    }

    /// Fixed value of the other parameter: 100 kHz or 17 dB.
    pub fn default_fixed(self) -> f64 {
        match self {
            Axis::Snr => 100.0,
            Axis::Linewidth => 17.0,
        }
    }
}

impl FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "snr" | "snr_db" => Ok(Axis::Snr),
            "linewidth" | "linewidth_khz" => Ok(Axis::Linewidth),
            _ => Err(Error::Parameter(format!("unknown sweep axis `{s}`"))),
        }
    }
}

/// Where a system comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum SystemSource {
    /// Square QAM of the given order with the log-MAP demapper.
    Qam(usize),
    Checkpoint(PathBuf),
}

impl FromStr for SystemSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.strip_prefix("qam:") {
            Some(m) => m
                .parse()
                .map(SystemSource::Qam)
                .map_err(|_| Error::Parameter(format!("bad QAM order in `{s}`"))),
            None => Ok(SystemSource::Checkpoint(PathBuf::from(s))),
        }
    }
}

impl std::fmt::Display for SystemSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SystemSource::Qam(m) => write!(f, "qam:{m}"),
            SystemSource::Checkpoint(p) => write!(f, "{}", p.display()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SystemSpec {
    pub name: String,
    pub source: SystemSource,
}

impl FromStr for SystemSpec {
    type Err = Error;

    /// `name=source`.
    fn from_str(s: &str) -> Result<Self> {
        let (name, source) = s
            .split_once('=')
            .ok_or_else(|| Error::Parameter(format!("expected `name=source`, got `{s}`")))?;
        let name = name.trim();
        if name.is_empty() || name.contains(|c: char| c.is_whitespace() || c == '/') {
            return Err(Error::Parameter(format!("invalid system name `{name}`")));
        }
        Ok(Self {
            name: name.to_string(),
            source: source.trim().parse()?,
        })
    }
}

impl std::fmt::Display for SystemSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}={}", self.name, self.source)
    }
}

/// Loads a system, naming it in the error if its checkpoint is missing.
pub fn load_system(spec: &SystemSpec) -> Result<TrainedSystem> {
    match &spec.source {
        SystemSource::Qam(m) => TrainedSystem::qam_gaussian(*m),
        SystemSource::Checkpoint(dir) => {
            for file in ["constellation.tsv", "metadata.txt"] {
                let path = dir.join(file);
                if !path.is_file() {
                    return Err(Error::MissingCheckpoint {
                        system: spec.name.clone(),
                        path,
                    });
                }
            }
            TrainedSystem::load(dir)
        }
    }
}

pub const SWEEP_KEYS: &[&str] = &[
    "axis",
    "grid",
    "fixed",
    "systems",
    "n_symbols",
    "n_seeds",
    "symbol_rate_baud",
    "n_angles",
    "window",
    "angle_span",
    "cpe",
    "seed",
];

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSpec {
    pub axis: Axis,
    /// Strictly increasing; dB or kHz depending on the axis.
    pub grid: Vec<f64>,
    /// The other parameter (kHz for an SNR sweep, dB for a linewidth sweep).
    pub fixed: f64,
    pub systems: Vec<SystemSpec>,
    pub n_symbols: usize,
    pub n_seeds: usize,
    pub symbol_rate_baud: f64,
    pub cpe: Cpe,
    pub seed: u64,
}

impl SweepSpec {
    pub fn new(axis: Axis, systems: Vec<SystemSpec>) -> Self {
        Self {
            axis,
            grid: axis.default_grid(),
            fixed: axis.default_fixed(),
            systems,
            n_symbols: 100_000,
            n_seeds: 5,
            symbol_rate_baud: DEFAULT_SYMBOL_RATE_BAUD,
            cpe: Cpe::Bps(BpsConfig::default()),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.validate_grid()?;
        if self.systems.is_empty() {
            return Err(Error::Parameter("no systems to sweep".into()));
        }
        for (i, s) in self.systems.iter().enumerate() {
            if self.systems[..i].iter().any(|o| o.name == s.name) {
                return Err(Error::Parameter(format!("duplicate system name `{}`", s.name)));
            }
        }
        Ok(())
    }

    /// Checks everything except the system list.
    pub fn validate_grid(&self) -> Result<()> {
        if self.grid.is_empty() {
            return Err(Error::Parameter("sweep grid is empty".into()));
        }
        if self.grid.iter().any(|v| !v.is_finite()) || self.grid.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Parameter("sweep grid must be finite and strictly increasing".into()));
        }
        if let Cpe::Bps(cfg) = &self.cpe {
            cfg.validate()?;
        }
        Ok(())
    }

    pub fn channel_at(&self, value: f64) -> Result<ChannelParams> {
        let (snr, khz) = match self.axis {
            Axis::Snr => (value, self.fixed),
            Axis::Linewidth => (self.fixed, value),
        };
        ChannelParams::new(snr, khz * 1e3, self.symbol_rate_baud)
    }

    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let join = |v: Vec<String>| v.join(", ");
        let mut pairs = vec![
            ("axis", self.axis.name().to_string()),
            ("grid", join(self.grid.iter().map(f64::to_string).collect())),
            ("fixed", self.fixed.to_string()),
            ("systems", join(self.systems.iter().map(ToString::to_string).collect())),
            ("n_symbols", self.n_symbols.to_string()),
            ("n_seeds", self.n_seeds.to_string()),
            ("symbol_rate_baud", self.symbol_rate_baud.to_string()),
            ("seed", self.seed.to_string()),
        ];
        match &self.cpe {
            Cpe::Bps(cfg) => {
                pairs.push(("cpe", "bps".into()));
                pairs.push(("n_angles", cfg.n_angles.to_string()));
                pairs.push(("window", cfg.window.to_string()));
                pairs.push(("angle_span", cfg.span.name().to_string()));
            }
            Cpe::Genie => pairs.push(("cpe", "genie".into())),
        }
        pairs
    }

    /// Overrides fields present in `kv`.
    pub fn apply(&mut self, kv: &KeyValues) -> Result<()> {
        if let Some(axis) = kv.get::<String>("axis")? {
            let axis: Axis = axis.parse()?;
            if axis != self.axis {
                self.axis = axis;
                self.grid = axis.default_grid();
                self.fixed = axis.default_fixed();
            }
        }
        if let Some(grid) = kv.get_list("grid")? {
            self.grid = grid;
        }
        if let Some(v) = kv.get("fixed")? {
            self.fixed = v;
        }
        if let Some(systems) = kv.get_list::<String>("systems")? {
            self.systems = systems.iter().map(|s| s.parse()).collect::<Result<_>>()?;
        }
        if let Some(v) = kv.get("n_symbols")? {
            self.n_symbols = v;
        }
        if let Some(v) = kv.get("n_seeds")? {
            self.n_seeds = v;
        }
        if let Some(v) = kv.get("symbol_rate_baud")? {
            self.symbol_rate_baud = v;
        }
        if let Some(v) = kv.get("seed")? {
            self.seed = v;
        }
        let mut bps = match self.cpe {
            Cpe::Bps(cfg) => cfg,
            Cpe::Genie => BpsConfig::default(),
        };
        if let Some(v) = kv.get("n_angles")? {
            bps.n_angles = v;
        }
        if let Some(v) = kv.get("window")? {
            bps.window = v;
        }
        if let Some(v) = kv.get::<String>("angle_span")? {
            bps.span = v.parse::<AngleSpan>()?;
        }
        self.cpe = match kv.raw("cpe") {
            Some("genie") => Cpe::Genie,
            Some("bps") => Cpe::Bps(bps),
            None => match self.cpe {
                Cpe::Genie => Cpe::Genie,
                Cpe::Bps(_) => Cpe::Bps(bps),
            },
            Some(other) => return Err(Error::Parameter(format!("unknown cpe `{other}`"))),
        };
        Ok(())
    }

    /// Short digest of the rendered configuration.
    pub fn config_hash(&self) -> String {
        let digest = Sha256::digest(render(&self.to_pairs()).as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunRecord {
    pub value: f64,
    pub mean: f64,
    pub stddev: f64,
}

/// Results of one system over the sweep grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemTable {
    pub name: String,
    pub axis: Axis,
    pub kind: DemapperKind,
    /// Hidden width for neural demappers, 0 otherwise.
    pub hidden: usize,
    pub multiplications: u64,
    pub records: Vec<RunRecord>,
}

impl SystemTable {
    /// Data file body: header, rows, provenance comment.
    pub fn to_text(&self, provenance: &str) -> String {
        let mut out = self.axis.header();
        out.push('\n');
        for r in &self.records {
            let _ = writeln!(out, "{} {} {}", r.value, r.mean, r.stddev);
        }
        let _ = writeln!(out, "# {provenance}");
        out
    }
}

/// Parses a data file back into its axis and rows.
pub fn parse_table(text: &str, origin: &str) -> Result<(Axis, Vec<RunRecord>)> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'));
    let (_, header) = lines.next().ok_or_else(|| Error::parse(origin, "empty data file"))?;
    let axis = match header.split_whitespace().collect::<Vec<_>>().as_slice() {
        [axis, "mean", "stddev"] => axis.parse::<Axis>().map_err(|e| Error::parse(origin, e.to_string()))?,
        _ => return Err(Error::parse(format!("{origin} line 1"), format!("unexpected header `{header}`"))),
    };
    let records = lines
        .map(|(i, line)| {
            let location = format!("{origin} line {}", i + 1);
            let fields = line
                .split_whitespace()
                .map(|f| f.parse::<f64>().map_err(|_| Error::parse(&location, format!("bad number `{f}`"))))
                .collect::<Result<Vec<_>>>()?;
            match fields.as_slice() {
                &[value, mean, stddev] => Ok(RunRecord { value, mean, stddev }),
                _ => Err(Error::parse(&location, "expected 3 fields")),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((axis, records))
}

pub fn provenance(spec: &SweepSpec) -> String {
    format!("config_hash={} seed={} version={}", spec.config_hash(), spec.seed, VERSION)
}

fn table_for(name: &str, axis: Axis, sys: &TrainedSystem, records: Vec<RunRecord>) -> SystemTable {
    let hidden = match &sys.demapper {
        Demapper::Gaussian => 0,
        Demapper::Neural(model) => model.hidden_width(),
    };
    SystemTable {
        name: name.to_string(),
        axis,
        kind: sys.demapper.kind(),
        hidden,
        multiplications: sys.demapper.multiplications(sys.bits_per_symbol()),
        records,
    }
}

/// Sweeps already-loaded systems. Grid points and seeds run in parallel;
/// results come back in grid order.
pub fn sweep_systems(spec: &SweepSpec, systems: &[(String, TrainedSystem)]) -> Result<Vec<SystemTable>> {
    spec.validate_grid()?;
    systems
        .iter()
        .map(|(name, sys)| {
            let records = spec
                .grid
                .par_iter()
                .map(|&value| {
                    let channel = spec.channel_at(value)?;
                    let v = validate(sys, &channel, &spec.cpe, spec.n_symbols, spec.n_seeds, spec.seed)?;
                    Ok(RunRecord {
                        value,
                        mean: v.mean,
                        stddev: v.stddev,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(table_for(name, spec.axis, sys, records))
        })
        .collect()
}

/// Loads every system of `spec` and sweeps it.
pub fn run_sweep(spec: &SweepSpec) -> Result<Vec<SystemTable>> {
    spec.validate()?;
    let systems = spec
        .systems
        .iter()
        .map(|s| Ok((s.name.clone(), load_system(s)?)))
        .collect::<Result<Vec<_>>>()?;
    sweep_systems(spec, &systems)
}

/// Writes `<name>.dat` per system and returns the paths in system order.
pub fn write_tables(dir: &Path, tables: &[SystemTable], provenance: &str) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    tables
        .iter()
        .map(|t| {
            let path = dir.join(format!("{}.dat", t.name));
            std::fs::write(&path, t.to_text(provenance))?;
            Ok(path)
        })
        .collect()
}

fn is_n8(t: &SystemTable, kind: DemapperKind) -> bool {
    t.kind == kind && t.hidden == 8
}

/// Side-by-side BMI per grid point, deltas against the first table, each
/// system's multiplication count, and a flag where separated n=8 beats
/// full n=8.
pub fn compare_report(tables: &[SystemTable]) -> Result<String> {
    if tables.len() < 2 {
        return Err(Error::Input(format!("need at least 2 tables, got {}", tables.len())));
    }
    let reference = &tables[0];
    for t in &tables[1..] {
        let same_grid = t.axis == reference.axis
            && t.records.len() == reference.records.len()
            && t.records.iter().zip(&reference.records).all(|(a, b)| a.value == b.value);
        if !same_grid {
            return Err(Error::Input(format!(
                "table `{}` is not on the grid of `{}`",
                t.name, reference.name
            )));
        }
    }
    let separated = tables.iter().position(|t| is_n8(t, DemapperKind::NnSeparated));
    let full = tables.iter().position(|t| is_n8(t, DemapperKind::NnFull));

    let mut out = String::new();
    out.push_str("systems:\n");
    for t in tables {
        let demapper = match t.kind {
            DemapperKind::Gaussian => "gaussian".to_string(),
            DemapperKind::NnFull => format!("full n={}", t.hidden),
            DemapperKind::NnSeparated => format!("separated n={}", t.hidden),
        };
        let _ = writeln!(out, "  {}: {demapper}, {} multiplications/symbol", t.name, t.multiplications);
    }
    out.push('\n');
    let mut header = vec![reference.axis.name().to_string()];
    header.extend(tables.iter().map(|t| t.name.clone()));
    header.extend(tables[1..].iter().map(|t| format!("{}-{}", t.name, reference.name)));
    if separated.is_some() && full.is_some() {
        header.push("separated_beats_full".into());
    }
    out.push_str(&header.join(" "));
    out.push('\n');
    for (i, r) in reference.records.iter().enumerate() {
        let mut row = vec![r.value.to_string()];
        row.extend(tables.iter().map(|t| format!("{:.4}", t.records[i].mean)));
        row.extend(tables[1..].iter().map(|t| format!("{:+.4}", t.records[i].mean - r.mean)));
        if let (Some(s), Some(f)) = (separated, full) {
            let beats = tables[s].records[i].mean > tables[f].records[i].mean;
            row.push(if beats { "yes" } else { "no" }.into());
        }
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    Ok(out)
}
