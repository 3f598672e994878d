//! `rnf`: run the random-neural-field experiments and write CSV tables plus
//! a JSON manifest that replays the run.
//!
//! Configuration is layered: command defaults, then `--config FILE` (the
//! command's JSON config, the same shape as `config` in a manifest), then
//! flags. The merged result is what gets persisted. `--replay MANIFEST`
//! re-runs a manifest's command, config and seed verbatim.

mod fetch;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rnf_core::data::{load_split, read_manifest, write_record, Dataset, ExperimentRecord, Table};
use rnf_core::experiments::{
    grid, grid_record, layered, ntk_check, ntk_check_record, regress_record, regress_sweep, run_sample, stability,
    stability_record, GridConfig, GridMetric, NtkCheckConfig, RegressConfig, SampleConfig, StabilityConfig,
};
use rnf_core::{ErrorKind, KernelMode, RnfError};
use serde_json::Value;

const VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), " (", env!("RNF_GIT_DESCRIBE"), ")");

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] RnfError),
    #[error("{0}")]
    Usage(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("fetch failed: {0}")]
    Fetch(String),
}

impl CliError {
    /// 2 configuration, 3 numerical failure, 4 I/O.
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(e) => match e.kind() {
                ErrorKind::Config => 2,
                ErrorKind::Numeric => 3,
                ErrorKind::Io => 4,
            },
            CliError::Usage(_) => 2,
            CliError::Io { .. } | CliError::Fetch(_) => 4,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "rnf", version = VERSION, about = "Random neural field experiments")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Debug, Args)]
struct Global {
    /// JSON config for the command; flags override its fields
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Root seed; every component seed is derived from it [default: 0]
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory [default: rnf-out/<command>]
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Worker threads for sweeps and linear algebra
    #[arg(long, global = true, value_name = "N")]
    jobs: Option<usize>,
    /// Re-run the command recorded in a manifest
    #[arg(long, global = true, value_name = "MANIFEST")]
    replay: Option<PathBuf>,
    /// Directory with the MNIST IDX files
    #[arg(long, global = true, env = "RNF_DATA_DIR", default_value = "data/mnist", value_name = "DIR")]
    data_dir: PathBuf,
    /// Model id(s) in 1..=5; repeat for sweeps
    #[arg(long, global = true, value_name = "ID")]
    model: Vec<u8>,
    /// Hidden width(s); ntk-check accepts several
    #[arg(long, global = true, value_name = "N", value_delimiter = ',')]
    width: Vec<usize>,
    /// Number of random trials
    #[arg(long, global = true, value_name = "N")]
    trials: Option<usize>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    Full,
    BlockDiagonal,
    Scalar,
}

impl From<ModeArg> for KernelMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Full => KernelMode::Full,
            ModeArg::BlockDiagonal => KernelMode::BlockDiagonal,
            ModeArg::Scalar => KernelMode::Scalar,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum MetricArg {
    Loss,
    Distance,
    Both,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Draw a model and write its first-layer weight matrix
    Sample {
        #[arg(long)]
        sigma_r: Option<f64>,
        #[arg(long)]
        sigma_s: Option<f64>,
    },
    /// Gradient descent versus the linearized prediction across widths
    NtkCheck {
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        log_points: Option<usize>,
        #[arg(long)]
        n_train: Option<usize>,
        #[arg(long)]
        n_val: Option<usize>,
        #[arg(long)]
        sigma_r: Option<f64>,
        #[arg(long)]
        sigma_s: Option<f64>,
        /// Take (σ_r, σ_s) from the loss argmin of a grid run
        #[arg(long, value_name = "DIR")]
        from_grid: Option<PathBuf>,
    },
    /// Kernel regression of each model on random splits
    Regress {
        #[arg(long)]
        n_train: Option<usize>,
        #[arg(long)]
        n_test: Option<usize>,
        #[arg(long, value_delimiter = ',')]
        modes: Vec<ModeArg>,
    },
    /// Kernel regression evaluated on increasingly noisy test images
    Noise {
        #[arg(long)]
        n_train: Option<usize>,
        #[arg(long)]
        n_test: Option<usize>,
        #[arg(long, value_delimiter = ',')]
        levels: Vec<f64>,
        #[arg(long, value_delimiter = ',')]
        modes: Vec<ModeArg>,
    },
    /// Relative kernel distance of perturbed copies of a digit
    Stability {
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        reference: Option<usize>,
    },
    /// Loss and distance over a σ_r × σ_s grid
    Grid {
        #[arg(long, value_enum)]
        metric: Option<MetricArg>,
        #[arg(long, value_delimiter = ',')]
        sigma_r: Vec<f64>,
        #[arg(long, value_delimiter = ',')]
        sigma_s: Vec<f64>,
        #[arg(long)]
        n_train: Option<usize>,
        #[arg(long)]
        n_test: Option<usize>,
        #[arg(long)]
        count: Option<usize>,
    },
    /// Download MNIST into the data directory and verify checksums
    Fetch {
        /// HTTP(S) base URL or a local directory
        #[arg(long, default_value = fetch::DEFAULT_MIRROR)]
        mirror: String,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Sample { .. } => "sample",
            Command::NtkCheck { .. } => "ntk-check",
            Command::Regress { .. } => "regress",
            Command::Noise { .. } => "noise",
            Command::Stability { .. } => "stability",
            Command::Grid { .. } => "grid",
            Command::Fetch { .. } => "fetch",
        }
    }
}

/// A fully merged configuration.
#[derive(Debug)]
enum Job {
    Sample(SampleConfig),
    NtkCheck(NtkCheckConfig),
    Regress(RegressConfig),
    Noise(RegressConfig),
    Stability(StabilityConfig),
    Grid(GridConfig),
}

fn job_from(command: &str, base: Option<Value>) -> Result<Job> {
    Ok(match command {
        "sample" => Job::Sample(layered(SampleConfig::default(), base)?),
        "ntk-check" => Job::NtkCheck(layered(NtkCheckConfig::default(), base)?),
        "regress" => Job::Regress(layered(RegressConfig::default(), base)?),
        "noise" => Job::Noise(layered(RegressConfig::noise_default(), base)?),
        "stability" => Job::Stability(layered(StabilityConfig::default(), base)?),
        "grid" => Job::Grid(layered(GridConfig::default(), base)?),
        other => return Err(CliError::Usage(format!("unknown command {other:?}"))),
    })
}

fn single_model(models: &[u8]) -> Result<Option<u8>> {
    match models {
        [] => Ok(None),
        [m] => Ok(Some(*m)),
        _ => Err(CliError::Usage("this command takes a single --model".into())),
    }
}

fn single_width(widths: &[usize]) -> Result<Option<usize>> {
    match widths {
        [] => Ok(None),
        [w] => Ok(Some(*w)),
        _ => Err(CliError::Usage("this command takes a single --width".into())),
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn set_receptive(
    receptive: &mut std::collections::BTreeMap<u8, [f64; 2]>,
    model: u8,
    sigma_r: Option<f64>,
    sigma_s: Option<f64>,
) {
    if sigma_r.is_none() && sigma_s.is_none() {
        return;
    }
    let default = rnf_core::network::default_receptive(model);
    let entry = receptive.entry(model).or_insert([default.0, default.1]);
    set(&mut entry[0], sigma_r);
    set(&mut entry[1], sigma_s);
}

/// `(σ_r, σ_s)` recorded as the loss argmin of a grid run for `model`.
fn grid_argmin(dir: &Path, model: u8) -> Result<[f64; 2]> {
    let m = read_manifest(&dir.join("manifest.json"))?;
    let best = &m.extra["argmin"];
    let (Some(gm), Some(r), Some(s)) = (best["model"].as_u64(), best["sigma_r"].as_f64(), best["sigma_s"].as_f64())
    else {
        return Err(CliError::Usage(format!("{} records no loss argmin", dir.display())));
    };
    if gm != model as u64 {
        return Err(CliError::Usage(format!("grid run was for model {gm}, not model {model}")));
    }
    Ok([r, s])
}

fn apply_flags(job: &mut Job, g: &Global, cmd: &Command) -> Result<()> {
    match (job, cmd) {
        (Job::Sample(c), Command::Sample { sigma_r, sigma_s }) => {
            set(&mut c.model, single_model(&g.model)?);
            set(&mut c.settings.width, single_width(&g.width)?);
            set_receptive(&mut c.settings.receptive, c.model, *sigma_r, *sigma_s);
        }
        (Job::NtkCheck(c), Command::NtkCheck { steps, log_points, n_train, n_val, sigma_r, sigma_s, from_grid }) => {
            set(&mut c.model, single_model(&g.model)?);
            if !g.width.is_empty() {
                c.widths = g.width.clone();
            }
            set(&mut c.steps, *steps);
            set(&mut c.log_points, *log_points);
            set(&mut c.n_train, *n_train);
            set(&mut c.n_val, *n_val);
            if let Some(dir) = from_grid {
                c.settings.receptive.insert(c.model, grid_argmin(dir, c.model)?);
            }
            set_receptive(&mut c.settings.receptive, c.model, *sigma_r, *sigma_s);
        }
        (Job::Regress(c), Command::Regress { n_train, n_test, modes })
        | (Job::Noise(c), Command::Noise { n_train, n_test, modes, .. }) => {
            if !g.model.is_empty() {
                c.models = g.model.clone();
            }
            set(&mut c.settings.width, single_width(&g.width)?);
            set(&mut c.trials, g.trials);
            set(&mut c.n_train, *n_train);
            set(&mut c.n_test, *n_test);
            if !modes.is_empty() {
                c.modes = modes.iter().map(|&m| m.into()).collect();
            }
            if let Command::Noise { levels, .. } = cmd {
                if !levels.is_empty() {
                    c.noise_levels = levels.clone();
                }
            }
        }
        (Job::Stability(c), Command::Stability { count, reference }) => {
            if !g.model.is_empty() {
                c.models = g.model.clone();
            }
            set(&mut c.settings.width, single_width(&g.width)?);
            set(&mut c.trials, g.trials);
            set(&mut c.count, *count);
            set(&mut c.reference, *reference);
        }
        (Job::Grid(c), Command::Grid { metric, sigma_r, sigma_s, n_train, n_test, count }) => {
            set(&mut c.model, single_model(&g.model)?);
            set(&mut c.settings.width, single_width(&g.width)?);
            set(&mut c.trials, g.trials);
            set(
                &mut c.metric,
                metric.map(|m| match m {
                    MetricArg::Loss => GridMetric::Loss,
                    MetricArg::Distance => GridMetric::Distance,
                    MetricArg::Both => GridMetric::Both,
                }),
            );
            if !sigma_r.is_empty() {
                c.sigma_r = sigma_r.clone();
            }
            if !sigma_s.is_empty() {
                c.sigma_s = sigma_s.clone();
            }
            set(&mut c.n_train, *n_train);
            set(&mut c.n_test, *n_test);
            set(&mut c.count, *count);
        }
        _ => unreachable!("job and command are built from the same name"),
    }
    Ok(())
}

fn load_training_set(dir: &Path) -> Result<Dataset> {
    let ds = load_split(dir, true).inspect_err(|e| {
        if matches!(e, RnfError::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound) {
            eprintln!("hint: set RNF_DATA_DIR or run `rnf fetch`");
        }
    })?;
    eprintln!("loaded {} training images from {}", ds.len(), dir.display());
    Ok(ds)
}

fn execute(job: &Job, seed: u64, data_dir: &Path) -> Result<(ExperimentRecord, Option<Dataset>)> {
    let needs_data = !matches!(job, Job::Sample(_));
    let ds = if needs_data { Some(load_training_set(data_dir)?) } else { None };
    let rec = match job {
        Job::Sample(c) => run_sample(c, seed)?,
        Job::NtkCheck(c) => {
            let (split, runs) = ntk_check(ds.as_ref().unwrap(), c, seed)?;
            ntk_check_record(c, seed, &split, &runs)?
        }
        Job::Regress(c) | Job::Noise(c) => {
            let name = if matches!(job, Job::Noise(_)) { "noise" } else { "regress" };
            let total = c.trials * c.models.len();
            let cells = regress_sweep(ds.as_ref().unwrap(), c, seed, |cells| {
                let last = cells.last().unwrap();
                let done = cells.len() / (c.modes.len() * c.noise_levels.len());
                eprintln!("[{done}/{total}] trial {} model {}: loss {:.5} acc {:.3}", last.trial, last.model, last.loss, last.accuracy);
            })?;
            regress_record(name, c, seed, &cells)?
        }
        Job::Stability(c) => stability_record(c, seed, &stability(ds.as_ref().unwrap(), c, seed)?)?,
        Job::Grid(c) => grid_record(c, seed, &grid(ds.as_ref().unwrap(), c, seed)?)?,
    };
    Ok((rec, ds))
}

fn configure_jobs(jobs: Option<usize>) -> Result<()> {
    let Some(n) = jobs else { return Ok(()) };
    if n == 0 {
        return Err(CliError::Usage("--jobs must be at least 1".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Usage(format!("cannot size the worker pool: {e}")))?;
    faer::set_global_parallelism(if n == 1 { faer::Par::Seq } else { faer::Par::rayon(n) });
    Ok(())
}

fn print_table(t: &Table) {
    println!("{}", t.header.join("\t"));
    for row in &t.rows {
        println!("{}", row.iter().map(|c| c.to_string()).collect::<Vec<_>>().join("\t"));
    }
}

fn run(cli: Cli) -> Result<()> {
    configure_jobs(cli.global.jobs)?;
    let g = &cli.global;

    if let Some(Command::Fetch { mirror }) = &cli.command {
        let written = fetch::fetch(mirror, &g.data_dir)?;
        println!("{} file(s) written to {}", written.len(), g.data_dir.display());
        return Ok(());
    }

    let (name, job, seed, replayed) = match &g.replay {
        Some(path) => {
            let m = read_manifest(path)?;
            if let Some(cmd) = &cli.command {
                if cmd.name() != m.command {
                    return Err(CliError::Usage(format!("manifest is for `{}`, not `{}`", m.command, cmd.name())));
                }
            }
            if g.config.is_some() || g.seed.is_some() {
                return Err(CliError::Usage("--replay takes config and seed from the manifest".into()));
            }
            let job = job_from(&m.command, Some(m.config.clone()))?;
            (m.command.clone(), job, m.seed, Some(m))
        }
        None => {
            let Some(cmd) = &cli.command else {
                return Err(CliError::Usage("no command given (see --help)".into()));
            };
            let base = match &g.config {
                Some(p) => {
                    let text = std::fs::read_to_string(p).map_err(|e| CliError::Io { path: p.clone(), source: e })?;
                    Some(serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?)
                }
                None => None,
            };
            let mut job = job_from(cmd.name(), base)?;
            apply_flags(&mut job, g, cmd)?;
            (cmd.name().to_string(), job, g.seed.unwrap_or(0), None)
        }
    };

    let start = Instant::now();
    let (mut rec, ds) = execute(&job, seed, &g.data_dir)?;
    rec.manifest.code_version = VERSION.into();
    rec.manifest.timings.insert("total".into(), start.elapsed().as_secs_f64());
    if !rec.manifest.extra.is_object() {
        rec.manifest.extra = serde_json::json!({});
    }
    if let Some(ds) = &ds {
        rec.manifest.extra["dataset"] = serde_json::json!({"split": ds.split, "examples": ds.len(), "sha256": ds.checksum});
        if let Some(old) = replayed.as_ref().and_then(|m| m.extra["dataset"]["sha256"].as_str()) {
            if old != ds.checksum {
                eprintln!("warning: dataset checksum differs from the replayed manifest");
            }
        }
    }
    if let (Job::NtkCheck(_), Some(Command::NtkCheck { from_grid: Some(dir), .. })) = (&job, &cli.command) {
        rec.manifest.extra["receptive_from"] = Value::String(dir.display().to_string());
    }

    let out = g.out.clone().unwrap_or_else(|| PathBuf::from("rnf-out").join(&name));
    let paths = write_record(&rec, &out)?;
    if let Some(summary) = rec.table("summary") {
        print_table(summary);
    }
    println!("wrote {} file(s) to {}", paths.len(), out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
