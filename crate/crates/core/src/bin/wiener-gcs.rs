use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use wiener_gcs::channel::{ChannelParams, DEFAULT_SYMBOL_RATE_BAUD};
use wiener_gcs::config::{render, KeyValues};
use wiener_gcs::cpe::{AngleSpan, BpsConfig};
use wiener_gcs::demapper::{count_multiplications, Activation, DemapperKind, Layout};
use wiener_gcs::experiments::{
    compare_report, provenance, run_sweep, write_tables, Axis, SweepSpec, SystemSpec, SWEEP_KEYS,
};
use wiener_gcs::training::{
    chain_gradcheck, train_e2e_with, validate, Cpe, TrainConfig, TrainedSystem, TRAIN_CONFIG_KEYS,
};
use wiener_gcs::{Error, Result};

/// Constellation shaping for Wiener phase-noise channels.
#[derive(Parser)]
#[command(name = "wiener-gcs", version)]
struct Cli {
    /// Master seed; overrides any seed in the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output file or directory, depending on the command.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Flat `key = value` config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train constellation and demapper jointly; writes a checkpoint directory.
    Train(TrainArgs),
    /// BMI of one system at one operating point.
    Validate(ValidateArgs),
    /// Sweep SNR or linewidth over several systems.
    Sweep(SweepArgs),
    /// Print or write the constellation of a checkpoint as TSV.
    ExportConstellation {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Real multiplications per symbol of a demapper.
    Complexity {
        #[arg(long)]
        kind: DemapperKind,
        #[arg(long, default_value_t = 6)]
        m: u32,
        #[arg(long, default_value_t = 0)]
        n: u64,
        #[arg(long, default_value_t = 1)]
        layers: u64,
    },
    /// Finite-difference check of the miniature end-to-end chain.
    Gradcheck {
        #[arg(long, default_value_t = 0.5)]
        temperature: f64,
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
    },
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    demapper_lr_scale: Option<f64>,
    #[arg(long)]
    layout: Option<Layout>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    activation: Option<Activation>,
    #[arg(long)]
    snr_db: Option<f64>,
    #[arg(long)]
    linewidth_khz: Option<f64>,
    #[arg(long)]
    freeze_noise: bool,
    /// Print progress every this many steps (0 = never).
    #[arg(long, default_value_t = 100)]
    log_every: usize,
}

#[derive(Args)]
struct ChannelArgs {
    #[arg(long)]
    snr_db: Option<f64>,
    #[arg(long)]
    linewidth_khz: Option<f64>,
    #[arg(long)]
    n_symbols: Option<usize>,
    #[arg(long)]
    n_seeds: Option<usize>,
    /// Remove the true phase instead of running the blind phase search.
    #[arg(long)]
    genie: bool,
}

#[derive(Args)]
struct ValidateArgs {
    /// Trained checkpoint directory.
    #[arg(long, conflicts_with = "qam")]
    checkpoint: Option<PathBuf>,
    /// Square QAM with log-MAP demapping, given bits per symbol.
    #[arg(long)]
    qam: Option<usize>,
    #[command(flatten)]
    channel: ChannelArgs,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    axis: Option<Axis>,
    /// `name=source`, where source is a checkpoint directory or `qam:M`.
    #[arg(long = "system")]
    systems: Vec<SystemSpec>,
    /// Comma-separated grid (dB or kHz).
    #[arg(long, value_delimiter = ',')]
    grid: Option<Vec<f64>>,
    /// Value of the other parameter (kHz or dB).
    #[arg(long)]
    fixed: Option<f64>,
    #[arg(long)]
    n_symbols: Option<usize>,
    #[arg(long)]
    n_seeds: Option<usize>,
    #[arg(long)]
    genie: bool,
}

fn read_config(path: Option<&Path>, known: &[&str]) -> Result<KeyValues> {
    match path {
        Some(p) => {
            let kv = KeyValues::read(p)?;
            kv.reject_unknown(known)?;
            Ok(kv)
        }
        None => Ok(KeyValues::default()),
    }
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(path) => {
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir)?;
            }
            std::fs::write(path, text)?;
            Ok(())
        }
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn train(cli: &Cli, args: &TrainArgs) -> Result<()> {
    let mut cfg = TrainConfig::default();
    cfg.apply(&read_config(cli.config.as_deref(), TRAIN_CONFIG_KEYS)?)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.steps = args.steps.unwrap_or(cfg.steps);
    cfg.batch_symbols = args.batch.unwrap_or(cfg.batch_symbols);
    cfg.learning_rate = args.learning_rate.unwrap_or(cfg.learning_rate);
    cfg.demapper_lr_scale = args.demapper_lr_scale.unwrap_or(cfg.demapper_lr_scale);
    cfg.layout = args.layout.unwrap_or(cfg.layout);
    cfg.hidden = args.hidden.unwrap_or(cfg.hidden);
    cfg.activation = args.activation.unwrap_or(cfg.activation);
    cfg.freeze_noise |= args.freeze_noise;
    let snr = args.snr_db.unwrap_or(cfg.channel.snr_db);
    let linewidth = args.linewidth_khz.map_or(cfg.channel.linewidth_hz, |k| k * 1e3);
    cfg.channel = ChannelParams::new(snr, linewidth, cfg.channel.symbol_rate_baud)?;

    let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("run"));
    let sys = train_e2e_with(&cfg, |r| {
        if args.log_every > 0 && (r.step % args.log_every == 0 || r.step + 1 == cfg.steps) {
            eprintln!("step {:>5}  tau {:.4}  loss {:.5}  bmi {:.4}", r.step, r.temperature, r.loss, r.bmi);
        }
    })?;
    sys.save(&out)?;
    println!("checkpoint written to {}", out.display());
    Ok(())
}

const VALIDATE_KEYS: &[&str] = &[
    "snr_db",
    "linewidth_khz",
    "symbol_rate_baud",
    "n_symbols",
    "n_seeds",
    "n_angles",
    "window",
    "angle_span",
    "cpe",
    "seed",
];

fn validate_cmd(cli: &Cli, args: &ValidateArgs) -> Result<()> {
    let kv = read_config(cli.config.as_deref(), VALIDATE_KEYS)?;
    let sys = match (&args.checkpoint, args.qam) {
        (Some(dir), _) => TrainedSystem::load(dir)?,
        (None, Some(m)) => TrainedSystem::qam_gaussian(m)?,
        (None, None) => return Err(Error::Usage("validate needs --checkpoint or --qam".into())),
    };
    let c = &args.channel;
    let snr = c.snr_db.or(kv.get("snr_db")?).unwrap_or(17.0);
    let khz = c.linewidth_khz.or(kv.get("linewidth_khz")?).unwrap_or(100.0);
    let rate = kv.get("symbol_rate_baud")?.unwrap_or(DEFAULT_SYMBOL_RATE_BAUD);
    let channel = ChannelParams::new(snr, khz * 1e3, rate)?;
    let n_symbols = c.n_symbols.or(kv.get("n_symbols")?).unwrap_or(100_000);
    let n_seeds = c.n_seeds.or(kv.get("n_seeds")?).unwrap_or(5);
    let seed = cli.seed.or(kv.get("seed")?).unwrap_or(0);
    let mut bps = BpsConfig::default();
    if let Some(v) = kv.get("n_angles")? {
        bps.n_angles = v;
    }
    if let Some(v) = kv.get("window")? {
        bps.window = v;
    }
    if let Some(v) = kv.get::<String>("angle_span")? {
        bps.span = v.parse::<AngleSpan>()?;
    }
    let cpe = if c.genie || kv.raw("cpe") == Some("genie") {
        Cpe::Genie
    } else {
        Cpe::Bps(bps)
    };

    let v = validate(&sys, &channel, &cpe, n_symbols, n_seeds, seed)?;
    let mut pairs = vec![
        ("snr_db", snr.to_string()),
        ("linewidth_khz", khz.to_string()),
        ("n_symbols", n_symbols.to_string()),
        ("n_seeds", n_seeds.to_string()),
        ("seed", seed.to_string()),
        ("mean", v.mean.to_string()),
        ("stddev", v.stddev.to_string()),
    ];
    if let Some(best) = v.best_rotation_mean() {
        pairs.push(("best_rotation_mean", best.to_string()));
        pairs.push(("slips", v.total_slips().to_string()));
    }
    let per_seed: Vec<String> = v.per_seed.iter().map(|s| s.bmi.to_string()).collect();
    pairs.push(("per_seed", per_seed.join(", ")));
    emit(cli.out.as_deref(), &render(&pairs))
}

fn sweep(cli: &Cli, args: &SweepArgs) -> Result<()> {
    let kv = read_config(cli.config.as_deref(), SWEEP_KEYS)?;
    let mut spec = SweepSpec::new(args.axis.unwrap_or(Axis::Snr), Vec::new());
    spec.apply(&kv)?;
    if let Some(axis) = args.axis {
        if axis != spec.axis {
            spec.axis = axis;
            spec.grid = axis.default_grid();
            spec.fixed = axis.default_fixed();
        }
    }
    if !args.systems.is_empty() {
        spec.systems = args.systems.clone();
    }
    if let Some(grid) = &args.grid {
        spec.grid = grid.clone();
    }
    spec.fixed = args.fixed.unwrap_or(spec.fixed);
    spec.n_symbols = args.n_symbols.unwrap_or(spec.n_symbols);
    spec.n_seeds = args.n_seeds.unwrap_or(spec.n_seeds);
    if args.genie {
        spec.cpe = Cpe::Genie;
    }
    if let Some(seed) = cli.seed {
        spec.seed = seed;
    }

    let tables = run_sweep(&spec)?;
    let dir = cli.out.clone().unwrap_or_else(|| PathBuf::from("sweep"));
    let prov = provenance(&spec);
    for path in write_tables(&dir, &tables, &prov)? {
        println!("wrote {}", path.display());
    }
    std::fs::write(dir.join("sweep.conf"), render(&spec.to_pairs()))?;
    if tables.len() >= 2 {
        let report = compare_report(&tables)?;
        std::fs::write(dir.join("report.txt"), &report)?;
        print!("{report}");
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Train(args) => train(cli, args),
        Command::Validate(args) => validate_cmd(cli, args),
        Command::Sweep(args) => sweep(cli, args),
        Command::ExportConstellation { checkpoint } => {
            let sys = TrainedSystem::load(checkpoint)?;
            emit(cli.out.as_deref(), &sys.constellation.to_tsv())
        }
        Command::Complexity { kind, m, n, layers } => {
            if *kind != DemapperKind::Gaussian && *n == 0 {
                return Err(Error::Usage("neural demappers need --n".into()));
            }
            let count = count_multiplications(*kind, *m, *n, *layers);
            emit(cli.out.as_deref(), &format!("{count}\n"))
        }
        Command::Gradcheck { temperature, step } => {
            let check = chain_gradcheck(cli.seed.unwrap_or(0), *temperature, *step)?;
            let verdict = if check.max_rel_error < 1e-4 { "PASS" } else { "FAIL" };
            let text = format!("max_rel_error {:e}\n{verdict}\n", check.max_rel_error);
            emit(cli.out.as_deref(), &text)?;
            if verdict == "FAIL" {
                return Err(Error::NumericDomain {
                    op: "gradcheck",
                    detail: format!("max relative error {:e} exceeds 1e-4", check.max_rel_error),
                });
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let message = e.to_string().replace('\n', " ");
            eprintln!("error: kind={} message={message}", e.kind());
            ExitCode::FAILURE
        }
    }
}
