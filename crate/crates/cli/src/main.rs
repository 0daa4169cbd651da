//! `maap`: train, evaluate, sweep and plot MAAP-CNN simulations.
//!
//! Exit status is 0 on success, 2 on usage errors and 1 on runtime errors.

mod kv;
mod plot;

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use maap_core::dataio::{self, LabeledDataset};
use maap_core::device::{DeviceIdealParams, DeviceVariationSpec};
use maap_core::energy::{
    latency_estimate, op_counts_reference, total_energy, EnergyParams, LatencyParams, PICOJOULE,
    REF_MAAP_OPS,
};
use maap_core::experiments::{self, SweepSpec};
use maap_core::network::{self, MaapCnn};
use maap_core::trainer::{self, TrainConfig};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Runtime(String),
    #[error(transparent)]
    Core(#[from] maap_core::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            _ => 1,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "maap",
    version,
    about = "MAAP-CNN accelerator simulator",
    args_override_self = true
)]
struct Cli {
    /// key=value file supplying defaults for the subcommand's flags
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Worker thread cap; results do not depend on it
    #[arg(long, global = true, value_name = "N", value_parser = clap::value_parser!(u16).range(1..))]
    threads: Option<u16>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the CNN in floating point and write a weight file
    Train(TrainArgs),
    /// Noisy quantized inference at one operating point
    Eval(EvalArgs),
    /// Monte-Carlo sweep over a (bits, redundancy, sigma_vt) grid, written as CSV
    Sweep(SweepArgs),
    /// Line chart of two CSV columns as SVG
    Plot(PlotArgs),
}

#[derive(Args, Debug)]
struct DataArgs {
    /// IDX image file (optionally .gz)
    #[arg(long, value_name = "PATH")]
    images: PathBuf,
    /// IDX label file (optionally .gz)
    #[arg(long, value_name = "PATH")]
    labels: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Output weight file
    #[arg(long, value_name = "PATH")]
    out: PathBuf,
    #[arg(long, default_value_t = 3)]
    epochs: usize,
    #[arg(long, default_value_t = 0.05)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    /// Train on the first N images only
    #[arg(long, value_name = "N")]
    limit: Option<usize>,
    /// Saturation voltage the output range is fitted to
    #[arg(long, default_value_t = 1.0)]
    v_sat: f64,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long, value_name = "PATH")]
    weights: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    /// Weight and ADC precision; 32 or more disables quantization
    #[arg(long, default_value_t = 32, value_parser = clap::value_parser!(u32).range(1..=64))]
    bits: u32,
    /// Devices averaged per MAAP operation
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    redundancy: u64,
    /// Transistor threshold deviation, mV
    #[arg(long, default_value_t = 0.0)]
    sigma_vt: f64,
    /// MTJ output noise std, normalized units
    #[arg(long, default_value_t = DeviceVariationSpec::DEFAULT_SIGMA_MTJ)]
    sigma_mtj: f64,
    /// Evaluate a seeded random subset of N images instead of all
    #[arg(long, value_name = "N")]
    images_n: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// MAAP energy per operation, pJ
    #[arg(long, default_value_t = 2.2)]
    e_maap_pj: f64,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[arg(long, value_name = "PATH")]
    weights: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    /// key=value grid file: bits, redundancy, sigma_vt, sigma_mtj, trials, images_per_trial, e_maap_pj
    #[arg(long, value_name = "PATH")]
    grid_config: Option<PathBuf>,
    #[arg(long, value_name = "PATH")]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct PlotArgs {
    #[arg(long = "in", value_name = "CSV")]
    input: PathBuf,
    #[arg(long, value_name = "COLUMN")]
    x: String,
    #[arg(long, value_name = "COLUMN")]
    y: String,
    #[arg(long, value_name = "COLUMN")]
    series: String,
    #[arg(long, value_name = "SVG")]
    out: PathBuf,
}

const SUBCOMMANDS: [&str; 4] = ["train", "eval", "sweep", "plot"];

/// Splices flags from a `--config` file in front of the command-line flags
/// so that explicit flags win.
fn expand_config(args: Vec<OsString>) -> Result<Vec<OsString>, CliError> {
    let mut path = None;
    for (i, a) in args.iter().enumerate() {
        let a = a.to_string_lossy();
        if a == "--config" {
            path = args.get(i + 1).map(PathBuf::from);
        } else if let Some(p) = a.strip_prefix("--config=") {
            path = Some(PathBuf::from(p));
        }
    }
    let Some(path) = path else { return Ok(args) };
    let Some(sub) = args
        .iter()
        .position(|a| SUBCOMMANDS.contains(&a.to_string_lossy().as_ref()))
    else {
        return Ok(args);
    };
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let mut injected = Vec::new();
    for (k, v) in kv::parse(&text, &path.display().to_string())? {
        if k == "config" {
            return Err(CliError::Usage("config files cannot nest".into()));
        }
        injected.push(OsString::from(format!("--{}", k.replace('_', "-"))));
        injected.push(OsString::from(v));
    }
    let mut out = args[..=sub].to_vec();
    out.extend(injected);
    out.extend_from_slice(&args[sub + 1..]);
    Ok(out)
}

fn load_data(d: &DataArgs) -> Result<LabeledDataset, CliError> {
    Ok(LabeledDataset::load(&d.images, &d.labels)?)
}

fn check_image_shape(data: &LabeledDataset, config: &network::CnnConfig) -> Result<(), CliError> {
    if data.image_shape() != (config.input_h, config.input_w) {
        return Err(CliError::Runtime(format!(
            "images are {:?}, network expects {}x{}",
            data.image_shape(),
            config.input_h,
            config.input_w
        )));
    }
    Ok(())
}

fn cmd_train(a: &TrainArgs) -> Result<(), CliError> {
    let config = network::default_config();
    let mut data = load_data(&a.data)?;
    check_image_shape(&data, &config)?;
    if let Some(n) = a.limit {
        data = data.take(n)?;
    }
    let tc = TrainConfig {
        learning_rate: a.lr,
        batch_size: a.batch_size,
        epochs: a.epochs,
        seed: a.seed,
        momentum: a.momentum,
    };
    tc.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let weights = trainer::train_with(&config, &data, &tc, |epoch, batch, loss| {
        if batch == 0 {
            eprintln!("epoch={epoch} loss={loss:.6}");
        }
    })?;
    let images: Vec<&[f64]> = (0..data.len()).map(|i| data.image(i)).collect();
    let weights = network::fit_output_range(&config, &weights, &images, a.v_sat)?;
    dataio::save_weights(&weights, &a.out)?;
    let acc = trainer::software_accuracy(&config, &weights, &data)?;
    println!("train_accuracy={acc}");
    Ok(())
}

fn cmd_eval(a: &EvalArgs) -> Result<(), CliError> {
    let config = network::default_config();
    let weights = dataio::load_weights(&a.weights)?;
    let data = load_data(&a.data)?;
    check_image_shape(&data, &config)?;
    let variation = DeviceVariationSpec {
        sigma_mtj: a.sigma_mtj,
        ..DeviceVariationSpec::with_sigma_vt(a.sigma_vt)
    };
    variation
        .validate()
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let energy_params = EnergyParams::reference(a.e_maap_pj * PICOJOULE)
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let latency = latency_estimate(&LatencyParams::default(), REF_MAAP_OPS, a.redundancy)
        .map_err(|e| CliError::Usage(e.to_string()))?;

    let n = a.images_n.unwrap_or(data.len());
    let indices = dataio::subset_indices(data.len(), n, experiments::subset_seed(a.seed, 0))?;
    let ideal = DeviceIdealParams::default();
    let net = MaapCnn::new(config, &weights, a.bits, ideal.v_sat)?;
    let redundancy = usize::try_from(a.redundancy)
        .map_err(|_| CliError::Usage("redundancy too large".into()))?;
    let acc = experiments::evaluate(
        &net, &data, &indices, ideal, variation, redundancy, a.seed, 0, 0,
    )?;
    let energy = total_energy(&energy_params, &op_counts_reference(a.bits, a.redundancy)?);
    println!(
        "accuracy={acc} energy_j={} latency_s={}",
        experiments::fixed17(energy),
        experiments::fixed17(latency)
    );
    Ok(())
}

fn grid_spec(path: Option<&Path>, seed: u64) -> Result<SweepSpec, CliError> {
    let mut spec = SweepSpec {
        base_seed: seed,
        ..SweepSpec::default()
    };
    let Some(path) = path else { return Ok(spec) };
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    for (k, v) in kv::parse(&text, &path.display().to_string())? {
        match k.as_str() {
            "bits" => spec.bits_grid = kv::list(&k, &v)?,
            "redundancy" => spec.redundancy_grid = kv::list(&k, &v)?,
            "sigma_vt" => spec.sigma_vt_grid = kv::list(&k, &v)?,
            "sigma_mtj" => spec.device.sigma_mtj = kv::scalar(&k, &v)?,
            "trials" => spec.trials = kv::scalar(&k, &v)?,
            "images_per_trial" => spec.images_per_trial = kv::scalar(&k, &v)?,
            "e_maap_pj" => {
                let pj: f64 = kv::scalar(&k, &v)?;
                spec.energy_params = EnergyParams::reference(pj * PICOJOULE)
                    .map_err(|e| CliError::Usage(e.to_string()))?;
            }
            _ => return Err(CliError::Usage(format!("unknown grid key: {k}"))),
        }
    }
    spec.validate()
        .map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(spec)
}

fn cmd_sweep(a: &SweepArgs) -> Result<(), CliError> {
    let spec = grid_spec(a.grid_config.as_deref(), a.seed)?;
    let config = network::default_config();
    let weights = dataio::load_weights(&a.weights)?;
    let data = load_data(&a.data)?;
    check_image_shape(&data, &config)?;
    let result = experiments::run_sweep_with(&spec, &config, &weights, &data, |p| {
        eprintln!(
            "grid_index={} bits={} redundancy={} sigma_vt_mv={} mean_accuracy={} std_error={}",
            p.point.index,
            p.point.bits,
            p.point.redundancy,
            p.point.sigma_vt,
            p.mean_accuracy,
            p.std_error
        );
    })?;
    fs::write(&a.out, result.to_csv()).map_err(io_err(&a.out))?;
    Ok(())
}

fn cmd_plot(a: &PlotArgs) -> Result<(), CliError> {
    let series = plot::load_series(&a.input, &a.x, &a.y, &a.series)?;
    let svg = plot::render(&series, &a.x, &a.y, &a.series);
    fs::write(&a.out, svg).map_err(io_err(&a.out))?;
    Ok(())
}

fn run() -> Result<(), CliError> {
    let args = expand_config(std::env::args_os().collect())?;
    let cli = Cli::try_parse_from(args).unwrap_or_else(|e| e.exit());
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.into())
            .build_global()
            .map_err(|e| CliError::Runtime(e.to_string()))?;
    }
    match &cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Plot(a) => cmd_plot(a),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
