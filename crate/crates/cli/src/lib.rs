//! Command-line front end: `run`, `resume`, `inspect` and `gen-data`.

use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use fedmepd::simnet::codec::encode_dataset;
use fedmepd::simnet::{build_sites, metrics_csv, Checkpoint, Experiment};
use fedmepd::{Error, ExperimentConfig, Mode};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.fmpd";
pub const CONFIG_FILE: &str = "config.cfg";

#[derive(Debug, Parser)]
#[command(name = "fedmepd", version, about = "Federated multimodal segmentation simulator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run an experiment and write metrics plus a final checkpoint.
    Run(RunArgs),
    /// Continue a run from a checkpoint.
    Resume(ResumeArgs),
    /// Summarize a checkpoint: federated ratios, mask histogram, anchor norms.
    Inspect {
        checkpoint: PathBuf,
    },
    /// Write every site's synthetic train/val/test splits as dataset files.
    GenData(GenArgs),
}

#[derive(Debug, Args)]
pub struct OutArg {
    /// Output directory.
    #[arg(long, env = "FEDMEPD_OUT", default_value = "out")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Config file; without it the built-in defaults apply.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// fedmepd, fedavg, local or fully_personalized.
    #[arg(long)]
    pub mode: Option<String>,
    /// Overrides the config's round count.
    #[arg(long)]
    pub rounds: Option<u64>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[command(flatten)]
    pub out: OutArg,
}

#[derive(Debug, Args)]
pub struct ResumeArgs {
    pub checkpoint: PathBuf,
    /// Target round; defaults to the configured round count.
    #[arg(long)]
    pub rounds: Option<u64>,
    #[command(flatten)]
    pub out: OutArg,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[command(flatten)]
    pub out: OutArg,
}

/// Failure with its exit status.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => CliError::Usage(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

/// Loads the config and applies flag overrides (flags win over the file).
pub fn resolve_config(args: &ConfigArgs) -> Result<ExperimentConfig, CliError> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
            ExperimentConfig::parse(&text)?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(rounds) = args.rounds {
        cfg.rounds = rounds;
    }
    if let Some(mode) = &args.mode {
        cfg.mode = mode.parse::<Mode>().map_err(CliError::Usage)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    std::fs::write(path, bytes).map_err(|e| io_err(path, e))
}

fn save(exp: &Experiment, out: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    write_file(&out.join(METRICS_FILE), metrics_csv(&exp.metrics).as_bytes())?;
    write_file(&out.join(CHECKPOINT_FILE), &exp.checkpoint().encode())?;
    write_file(&out.join(CONFIG_FILE), exp.config.to_text().as_bytes())
}

fn final_line(exp: &Experiment) -> String {
    match exp.metrics.iter().rev().find(|r| r.site == "all") {
        Some(r) => format!(
            "round {}: client mDSC {:.4}, federated ratio {:.3}",
            r.round,
            r.mdsc,
            r.fed_ratio.unwrap_or(f64::NAN)
        ),
        None => format!("round {}: no rounds run", exp.round),
    }
}

fn cmd_run(args: &RunArgs, stdout: &mut dyn Write) -> Result<(), CliError> {
    let cfg = resolve_config(&args.config)?;
    let mut exp = Experiment::new(&cfg)?;
    exp.run_to(cfg.rounds)?;
    save(&exp, &args.out.out)?;
    writeln!(stdout, "{} ({})", final_line(&exp), cfg.mode).ok();
    writeln!(stdout, "wrote {}", args.out.out.display()).ok();
    Ok(())
}

fn read_checkpoint(path: &Path) -> Result<Checkpoint, CliError> {
    let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
    Checkpoint::decode(&bytes).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

fn cmd_resume(args: &ResumeArgs, stdout: &mut dyn Write) -> Result<(), CliError> {
    let ckpt = read_checkpoint(&args.checkpoint)?;
    let mut exp = Experiment::restore(&ckpt)?;
    let target = args.rounds.unwrap_or(exp.config.rounds);
    exp.run_to(target)?;
    save(&exp, &args.out.out)?;
    writeln!(stdout, "resumed from round {}; {}", ckpt.round, final_line(&exp)).ok();
    Ok(())
}

/// Human-readable checkpoint summary.
pub fn inspect_text(ckpt: &Checkpoint) -> Result<String, CliError> {
    let cfg = ckpt.config()?;
    let sizes = ckpt.filter_sizes()?;
    let mut s = String::new();
    writeln!(s, "round: {}", ckpt.round).ok();
    writeln!(s, "mode: {}  seed: {}  patience: {}", cfg.mode, cfg.seed, ckpt.mask.patience).ok();
    writeln!(s, "overall federated ratio: {:.6}", ckpt.mask.federated_ratio(&sizes)).ok();
    writeln!(s, "per-client federated ratio:").ok();
    for (i, m) in ckpt.clients.iter().enumerate() {
        let names: Vec<String> = m.modalities().iter().map(|x| x.name()).collect();
        writeln!(
            s,
            "  site {:>2} {:<16} {:.6}",
            i + 1,
            names.join("+"),
            ckpt.mask.client_ratio(i, &sizes)
        )
        .ok();
    }
    writeln!(s, "mask histogram (filters by number of federating clients):").ok();
    let mut hist = vec![0usize; ckpt.mask.n_clients() + 1];
    for j in 0..ckpt.mask.n_filters() {
        hist[ckpt.mask.federating(j).len()] += 1;
    }
    for (k, n) in hist.iter().enumerate() {
        writeln!(s, "  {k:>2} clients: {n}").ok();
    }
    if ckpt.anchors.is_empty() {
        writeln!(s, "anchors: none").ok();
    } else {
        writeln!(s, "anchor norms (level, class: norms):").ok();
        for (l, per) in ckpt.anchors.anchor_norms().iter().enumerate() {
            for class in 0..ckpt.anchors.n_classes {
                let k = ckpt.anchors.per_class;
                let norms: Vec<String> = per[class * k..(class + 1) * k].iter().map(|v| format!("{v:.4}")).collect();
                writeln!(s, "  l{} c{}: {}", l + 1, class, norms.join(" ")).ok();
            }
        }
    }
    Ok(s)
}

fn cmd_gen_data(args: &GenArgs, stdout: &mut dyn Write) -> Result<(), CliError> {
    let cfg = resolve_config(&args.config)?;
    let sites = build_sites(&cfg)?;
    let out = &args.out.out;
    std::fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    for site in &sites {
        for (split, samples) in [("train", &site.train), ("val", &site.val), ("test", &site.test)] {
            let path = out.join(format!("site{}_{split}.fmpd", site.spec.site_id));
            write_file(&path, &encode_dataset(samples))?;
        }
        let names: Vec<String> = site.spec.modalities.iter().map(|m| m.name()).collect();
        writeln!(
            stdout,
            "site {} {}: {} train, {} val, {} test",
            site.spec.site_id,
            names.join("+"),
            site.train.len(),
            site.val.len(),
            site.test.len()
        )
        .ok();
    }
    Ok(())
}

pub fn execute(cli: &Cli, stdout: &mut dyn Write) -> Result<(), CliError> {
    match &cli.command {
        Command::Run(a) => cmd_run(a, stdout),
        Command::Resume(a) => cmd_resume(a, stdout),
        Command::Inspect { checkpoint } => {
            let text = inspect_text(&read_checkpoint(checkpoint)?)?;
            stdout.write_all(text.as_bytes()).map_err(|e| CliError::Runtime(e.to_string()))
        }
        Command::GenData(a) => cmd_gen_data(a, stdout),
    }
}

/// Parses `args` (including the program name), runs, and returns the exit status.
pub fn main_with<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            if code == EXIT_OK {
                stdout.write_all(text.as_bytes()).ok();
            } else {
                stderr.write_all(text.as_bytes()).ok();
            }
            return code;
        }
    };
    match execute(&cli, stdout) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let (CliError::Usage(m) | CliError::Runtime(m)) = &e;
            writeln!(stderr, "error: {m}").ok();
            e.code()
        }
    }
}
