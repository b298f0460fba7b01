use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use locerr::attacks::{AttackKind, Protocol};
use locerr::data::MnistDir;
use locerr::harness::{
    self, exit_code, Datasets, Ensemble, ExperimentConfig, Figure, HarnessError, Manifest, Member, RunContext, Table,
};
use locerr::manifold::{theoretical_dimensionality, zeta_dimensionality, DimensionalityMode};
use locerr::parallel;

/// Deep networks trained with local errors: training, layer-wise attacks and
/// manifold analysis of hidden representations.
#[derive(Parser, Debug)]
#[command(name = "locerr", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// JSON experiment configuration; flags below override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Directory holding the four MNIST IDX files (default: $LOCERR_MNIST_DIR or data/mnist).
    #[arg(long, global = true)]
    data_dir: Option<PathBuf>,
    /// Reuse trained replicates stored here, keyed by their full configuration.
    #[arg(long, global = true)]
    cache: Option<PathBuf>,
    #[arg(long, global = true)]
    replicates: Option<usize>,
    /// Units in every layer.
    #[arg(long, global = true)]
    width: Option<usize>,
    /// Number of trainable layers.
    #[arg(long, global = true)]
    depth: Option<usize>,
    #[arg(long, global = true)]
    epochs: Option<usize>,
    /// Base seed from which every replicate seed is derived.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Test images used as stimuli for spectra.
    #[arg(long, global = true)]
    k_stimuli: Option<usize>,
    /// Run single-threaded for bit-exact reruns.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Only print warnings and errors.
    #[arg(short, long, global = true)]
    quiet: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train replicates and write learning curves and checkpoints.
    Train,
    /// Clean per-layer accuracy and activation spectra.
    Analyze {
        /// Trained checkpoints; without any, replicates are trained first.
        #[arg(long = "checkpoint")]
        checkpoints: Vec<PathBuf>,
    },
    /// Layer-wise attack sweep over ε.
    Attack {
        #[arg(long = "checkpoint")]
        checkpoints: Vec<PathBuf>,
        /// Attack kind (repeatable); default: every configured kind.
        #[arg(long = "kind")]
        kinds: Vec<AttackKind>,
        /// Comma-separated strengths, ascending.
        #[arg(long, value_delimiter = ',')]
        epsilons: Vec<f64>,
        #[arg(long, value_enum)]
        protocol: Option<ProtocolArg>,
    },
    /// Tabulate the theoretical dimensionality of power-law spectra.
    Dimcurve {
        /// Population sizes (comma-separated).
        #[arg(long = "n", value_delimiter = ',', default_value = "35,30,200")]
        ns: Vec<usize>,
        #[arg(long, default_value_t = 0.05)]
        alpha_min: f64,
        #[arg(long, default_value_t = 4.0)]
        alpha_max: f64,
        #[arg(long, default_value_t = 0.05)]
        alpha_step: f64,
    },
    /// Run a figure's pipeline end to end.
    ReproduceFig {
        /// Figure number.
        #[arg(value_parser = clap::value_parser!(u32).range(2..=7))]
        figure: u32,
    },
    /// Print the default configuration as JSON.
    PrintConfig,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ProtocolArg {
    Independent,
    Cascade,
}

impl From<ProtocolArg> for Protocol {
    fn from(p: ProtocolArg) -> Self {
        match p {
            ProtocolArg::Independent => Protocol::Independent,
            ProtocolArg::Cascade => Protocol::Cascade,
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { exit_code::USAGE } else { exit_code::OK };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    let level = if cli.common.quiet { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let result = if cli.common.deterministic {
        parallel::with_threads(1, || run(&cli))
    } else {
        run(&cli)
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e
                .chain()
                .find_map(|c| c.downcast_ref::<HarnessError>())
                .map_or(exit_code::USAGE, HarnessError::exit_code);
            ExitCode::from(code as u8)
        }
    }
}

fn run(cli: &Cli) -> Result<()> {
    let c = &cli.common;
    match &cli.command {
        Command::PrintConfig => {
            // A closed pipe (e.g. `| head`) is not an error worth reporting.
            let _ = writeln!(std::io::stdout(), "{}", ExperimentConfig::default().to_json());
            Ok(())
        }
        Command::Dimcurve {
            ns,
            alpha_min,
            alpha_max,
            alpha_step,
        } => dimcurve(c, ns, *alpha_min, *alpha_max, *alpha_step),
        Command::Train => {
            let cfg = build_config(c, 1)?;
            let data = load_data(c)?;
            let out = prepare_out(&cfg)?;
            let trained = harness::run_training(&cfg, &data, c.cache.as_deref())?;
            let mut files = vec![
                harness::write_curves(&out.join("curves.csv"), &trained.curves)?,
                harness::write_training_summary(&out.join("summary.csv"), &trained.curves)?,
            ];
            files.extend(harness::save_checkpoints(&cfg, &trained.ensemble, &out)?);
            finish(c, "train", &cfg, &data, &out, &files)
        }
        Command::Analyze { checkpoints } => {
            let mut cfg = build_config(c, 1)?;
            let data = load_data(c)?;
            let out = prepare_out(&cfg)?;
            let ensemble = ensemble(c, &mut cfg, checkpoints, &data)?;
            let clean = harness::run_clean_analysis(&cfg, &ensemble, &data.test)?;
            let spectra = ensemble
                .members
                .iter()
                .map(|m| Ok((m.seeds.replicate, harness::clean_spectra(&cfg, m, &data.test)?)))
                .collect::<Result<Vec<_>, HarnessError>>()?;
            let files = vec![
                harness::write_aggregates(&out.join("layers.csv"), &clean.rows)?,
                harness::write_cells(&out.join("cells.csv"), &clean.cells)?,
                harness::write_spectra(&out.join("spectrum.csv"), &spectra)?,
                harness::write_spectrum_fits(&out.join("fits.csv"), &spectra)?,
            ];
            finish(c, "analyze", &cfg, &data, &out, &files)
        }
        Command::Attack {
            checkpoints,
            kinds,
            epsilons,
            protocol,
        } => {
            let mut cfg = build_config(c, 1)?;
            if !kinds.is_empty() {
                let mut k = kinds.clone();
                k.sort();
                k.dedup();
                cfg.attack_kinds = k;
            }
            if !epsilons.is_empty() {
                cfg.epsilon_grid = epsilons.clone();
            }
            if let Some(p) = protocol {
                cfg.protocol = (*p).into();
            }
            cfg.validate()?;
            let data = load_data(c)?;
            let out = prepare_out(&cfg)?;
            let ensemble = ensemble(c, &mut cfg, checkpoints, &data)?;
            let sweep = harness::run_attack_sweep(&cfg, &ensemble, &data.test)?;
            let files = vec![
                harness::write_sweep(&out.join("sweep.csv"), &sweep.rows)?,
                harness::write_aggregates(&out.join("sweep_full.csv"), &sweep.rows)?,
                harness::write_cells(&out.join("cells.csv"), &sweep.cells)?,
                harness::write_alpha_fits(&out.join("accuracy_vs_alpha.csv"), &harness::accuracy_alpha_fits(&sweep.rows))?,
            ];
            finish(c, "attack", &cfg, &data, &out, &files)
        }
        Command::ReproduceFig { figure } => {
            let fig = Figure::from_number(*figure).expect("range checked by the parser");
            let cfg = fig.adjust(&build_config(c, fig.default_replicates())?);
            let data = load_data(c)?;
            let out = prepare_out(&cfg)?;
            let ctx = RunContext {
                data: &data,
                cache: c.cache.as_deref(),
                out_dir: &out,
            };
            let files = harness::reproduce(fig, &cfg, ctx)?;
            finish(c, &format!("fig{figure}"), &cfg, &data, &out, &files)
        }
    }
}

/// Configuration file (or defaults with `default_replicates`), then flags.
fn build_config(c: &Common, default_replicates: usize) -> Result<ExperimentConfig> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
        None => ExperimentConfig {
            replicates: default_replicates,
            ..ExperimentConfig::default()
        },
    };
    if let Some(r) = c.replicates {
        cfg.replicates = r;
    }
    if c.width.is_some() || c.depth.is_some() {
        let depth = c.depth.unwrap_or(cfg.net.depth());
        let width = c.width.unwrap_or(cfg.net.widths[0]);
        cfg.net.widths = vec![width; depth];
    }
    if let Some(e) = c.epochs {
        cfg.train.epochs = e;
    }
    if let Some(s) = c.seed {
        cfg.base_seed = s;
    }
    if let Some(k) = c.k_stimuli {
        cfg.k_stimuli = k;
    }
    if let Some(o) = &c.out {
        cfg.output_dir = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_data(c: &Common) -> Result<Datasets> {
    let dir = MnistDir::resolve(c.data_dir.as_deref());
    log::info!("loading MNIST from {}", dir.0.display());
    Ok(Datasets::load(&dir)?)
}

fn prepare_out(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let out = cfg.output_dir.clone();
    std::fs::create_dir_all(&out).map_err(|source| HarnessError::Io {
        path: out.display().to_string(),
        source,
    })?;
    Ok(out)
}

/// Members loaded from `checkpoints`, or trained from `cfg` when none given.
fn ensemble(c: &Common, cfg: &mut ExperimentConfig, checkpoints: &[PathBuf], data: &Datasets) -> Result<Ensemble> {
    if checkpoints.is_empty() {
        return Ok(harness::run_training(cfg, data, c.cache.as_deref())?.ensemble);
    }
    let members = checkpoints
        .iter()
        .map(|p| Member::load(p, cfg.base_seed).with_context(|| format!("loading {}", p.display())))
        .collect::<Result<Vec<_>>>()?;
    let first = members[0].net.config().clone();
    if members.iter().any(|m| m.net.config().widths != first.widths) {
        bail!("checkpoints have different architectures");
    }
    cfg.net = first;
    cfg.replicates = members.len();
    cfg.validate()?;
    Ok(Ensemble { members })
}

fn finish(c: &Common, name: &str, cfg: &ExperimentConfig, data: &Datasets, out: &Path, files: &[PathBuf]) -> Result<()> {
    let command = std::iter::once("locerr".to_string())
        .chain(std::env::args().skip(1))
        .collect::<Vec<_>>()
        .join(" ");
    let mut manifest = Manifest::new(&command, cfg, Some(data.fingerprint.clone()), c.deterministic);
    manifest.add_outputs(out, files)?;
    let path = manifest.write(&out.join(format!("{name}_manifest.json")))?;
    for f in files {
        println!("{}", f.display());
    }
    println!("{}", path.display());
    Ok(())
}

fn dimcurve(c: &Common, ns: &[usize], alpha_min: f64, alpha_max: f64, alpha_step: f64) -> Result<()> {
    if !(alpha_step > 0.0) || !(alpha_min >= 0.0) || !(alpha_max >= alpha_min) {
        return Err(HarnessError::Config("need 0 <= alpha-min <= alpha-max and alpha-step > 0".into()).into());
    }
    let out = c.out.clone().unwrap_or_else(|| PathBuf::from("runs"));
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let path = out.join("dimcurve.csv");
    let mut t = Table::create(&path, &["n", "alpha", "d_exact", "d_integral", "d_zeta"])?;
    let steps = ((alpha_max - alpha_min) / alpha_step + 1e-9).floor() as usize;
    for &n in ns {
        for i in 0..=steps {
            let alpha = alpha_min + i as f64 * alpha_step;
            let exact = theoretical_dimensionality(alpha, n, DimensionalityMode::ExactSum).map_err(HarnessError::from)?;
            let integral = theoretical_dimensionality(alpha, n, DimensionalityMode::Integral).map_err(HarnessError::from)?;
            let zeta = if alpha > 1.0 {
                format!("{}", zeta_dimensionality(alpha).map_err(HarnessError::from)?)
            } else {
                String::new()
            };
            t.row(&[n.to_string(), format!("{alpha}"), format!("{exact}"), format!("{integral}"), zeta])?;
        }
    }
    println!("{}", t.finish()?.display());
    Ok(())
}
