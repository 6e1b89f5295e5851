//! The `dualvdt` command line: argument parsing, jobs and run manifests.

mod config;

use std::ffi::OsString;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

pub use config::{check_seed, DatasetSection, RunConfig, SchemaMode, SynthSection, TrainSection, MAX_SEED};

use crate::attention::EncoderKind;
use crate::data::{load_csv, synth_sinusoids, write_csv, CsvSchema, RawSeries, SeriesWindow, Split, SplitWindows, ETT_COLUMNS};
use crate::diffusion::ScoreKind;
use crate::error::{Error, Result};
use crate::model::{
    ablation_cells, read_ablation_csv, run_ablation, write_ablation_csv, write_ablation_report, AblationSpec, DualVdt,
    LossReport,
};
use crate::numeric::{Rng, Tensor};
use crate::sampler::SamplerKind;

pub const SEED_ENV: &str = "DUALVDT_SEED";
pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;

const SEED_HELP: &str = "Seeds: --seed wins, then the config's top-level `seed`, then the \
DUALVDT_SEED environment variable, then 0.\n\
Exit codes: 0 success, 1 runtime failure, 2 invalid configuration or arguments.";

#[derive(Debug, Parser)]
#[command(name = "dualvdt", version, about = "Train and run latent-diffusion forecasters", after_help = SEED_HELP)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit a model; writes model.ckpt, loss.csv and a manifest.
    Train(TrainArgs),
    /// Forecast the horizon after one lookback window of a CSV file.
    Forecast(ForecastArgs),
    /// MSE/MAE of a checkpoint on one split of a CSV file.
    Evaluate(EvaluateArgs),
    /// Train every cell of an encoder × score model × dual grid.
    Ablate(AblateArgs),
    /// Render an ablation CSV as a markdown table.
    Report(ReportArgs),
    /// Write a synthetic sinusoid series as CSV.
    Synth(SynthArgs),
    /// Re-run a command from its manifest.
    Replay(ReplayArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory; overrides `output_dir` in the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Units {
    #[default]
    Original,
    Normalized,
}

#[derive(Debug, Args)]
pub struct ForecastArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    /// First row of the lookback window; defaults to the last full window.
    #[arg(long)]
    pub origin: Option<usize>,
    #[arg(long, value_enum, default_value_t = Units::Original)]
    pub units: Units,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Directory for forecast.csv and the manifest; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, default_value = "test", value_parser = parse_split)]
    pub split: Split,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Directory for evaluate.json and the manifest; stdout only when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Encoders in the grid, e.g. `fc,cnn,lt`.
    #[arg(long, value_delimiter = ',', default_value = "fc,cnn,lt", value_parser = parse_encoder)]
    pub encoders: Vec<EncoderKind>,
    #[arg(long, value_delimiter = ',', default_value = "fc,cnn", value_parser = parse_score)]
    pub scores: Vec<ScoreKind>,
    /// Dual settings, `on`, `off` or both.
    #[arg(long, value_delimiter = ',', default_value = "on,off", value_parser = parse_on_off)]
    pub dual: Vec<bool>,
    /// Sampler of the grid cells.
    #[arg(long, default_value = "as", value_parser = parse_sampler)]
    pub sampler: SamplerKind,
    /// Samplers retried at the best cell; `none` skips the sweep.
    #[arg(long, default_value = "as,rd,pf")]
    pub sweep: String,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Ablation CSV.
    #[arg(long)]
    pub input: PathBuf,
    /// Markdown file; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 4)]
    pub n: usize,
    #[arg(long, default_value_t = 400)]
    pub len: usize,
    #[arg(long, default_value_t = 0.1)]
    pub noise_std: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    pub manifest: PathBuf,
    /// Write to this directory instead of the recorded one.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn parse_split(s: &str) -> std::result::Result<Split, String> {
    s.parse().map_err(|e: Error| e.to_string())
}
fn parse_encoder(s: &str) -> std::result::Result<EncoderKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}
fn parse_score(s: &str) -> std::result::Result<ScoreKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}
fn parse_sampler(s: &str) -> std::result::Result<SamplerKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}
fn parse_on_off(s: &str) -> std::result::Result<bool, String> {
    match s.to_ascii_lowercase().as_str() {
        "on" => Ok(true),
        "off" => Ok(false),
        _ => Err(format!("expected `on` or `off`, got `{s}`")),
    }
}

/// Ablation grid as recorded in a manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Grid {
    pub encoders: Vec<EncoderKind>,
    pub scores: Vec<ScoreKind>,
    pub dual: Vec<bool>,
    pub sampler: SamplerKind,
    pub sweep: Vec<SamplerKind>,
}

/// A fully resolved unit of work: everything needed to reproduce outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "lowercase")]
pub enum Job {
    Train {
        config: RunConfig,
    },
    Forecast {
        checkpoint: PathBuf,
        input: PathBuf,
        origin: Option<usize>,
        units: Units,
    },
    Evaluate {
        checkpoint: PathBuf,
        input: PathBuf,
        split: Split,
    },
    Ablate {
        config: RunConfig,
        grid: Grid,
    },
}

impl Job {
    pub fn name(&self) -> &'static str {
        match self {
            Job::Train { .. } => "train",
            Job::Forecast { .. } => "forecast",
            Job::Evaluate { .. } => "evaluate",
            Job::Ablate { .. } => "ablate",
        }
    }
}

/// Written next to every command's outputs; `dualvdt replay` re-runs it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: String,
    pub seed: u64,
    pub out: PathBuf,
    pub job: Job,
}

impl Manifest {
    pub fn file_name(job: &Job) -> String {
        format!("manifest-{}.toml", job.name())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let de = toml::Deserializer::parse(&text).map_err(|e| Error::Config(e.to_string()))?;
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::Config(format!("{path}: {}", e.into_inner()))
        })
    }

    fn write(&self, dir: &Path) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| Error::Config(e.to_string()))?;
        fs::write(dir.join(Self::file_name(&self.job)), text)?;
        Ok(())
    }
}

/// Exclusive claim on an output directory, released on drop.
struct OutputLock(PathBuf);

impl OutputLock {
    fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let path = dir.join(".lock");
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id())?;
                Ok(OutputLock(path))
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::invalid(
                "lock",
                format!("{} is in use by another run (delete {} if it is stale)", dir.display(), path.display()),
            )),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

/// `--seed`, then the config value, then `DUALVDT_SEED`, then `fallback`.
fn resolve_seed(flag: Option<u64>, config: Option<u64>, fallback: u64) -> Result<u64> {
    let seed = match flag.or(config) {
        Some(s) => s,
        None => match std::env::var(SEED_ENV) {
            Ok(v) => v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}: `{v}` is not an unsigned integer")))?,
            Err(_) => fallback,
        },
    };
    check_seed(seed)
}

fn absolute(p: &Path) -> PathBuf {
    std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf())
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => EXIT_CONFIG,
        _ => EXIT_RUNTIME,
    }
}

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train(a) => {
            let config = RunConfig::load(&a.config)?;
            let seed = resolve_seed(a.seed, config.seed, 0)?;
            let out = a
                .out
                .or_else(|| config.output_dir.clone())
                .ok_or_else(|| Error::Config("output_dir: not set and no --out given".into()))?;
            execute(&Job::Train { config }, seed, Some(&absolute(&out)))
        }
        Command::Forecast(a) => {
            let job = Job::Forecast {
                checkpoint: absolute(&a.checkpoint),
                input: absolute(&a.input),
                origin: a.origin,
                units: a.units,
            };
            let seed = resolve_seed(a.seed, None, 0)?;
            execute(&job, seed, a.out.as_deref().map(absolute).as_deref())
        }
        Command::Evaluate(a) => {
            let job = Job::Evaluate {
                checkpoint: absolute(&a.checkpoint),
                input: absolute(&a.input),
                split: a.split,
            };
            let seed = resolve_seed(a.seed, None, 0)?;
            execute(&job, seed, a.out.as_deref().map(absolute).as_deref())
        }
        Command::Ablate(a) => {
            let config = RunConfig::load(&a.config)?;
            let seed = resolve_seed(a.seed, config.seed, 0)?;
            let out = a
                .out
                .or_else(|| config.output_dir.clone())
                .ok_or_else(|| Error::Config("output_dir: not set and no --out given".into()))?;
            let sweep = if a.sweep.eq_ignore_ascii_case("none") {
                Vec::new()
            } else {
                a.sweep
                    .split(',')
                    .map(|s| s.trim().parse::<SamplerKind>().map_err(|e| Error::Config(format!("--sweep: {e}"))))
                    .collect::<Result<_>>()?
            };
            let grid = Grid {
                encoders: a.encoders,
                scores: a.scores,
                dual: a.dual,
                sampler: a.sampler,
                sweep,
            };
            execute(&Job::Ablate { config, grid }, seed, Some(&absolute(&out)))
        }
        Command::Report(a) => {
            let rows = read_ablation_csv(File::open(&a.input)?)?;
            match a.out {
                Some(p) => {
                    let mut f = BufWriter::new(File::create(p)?);
                    write_ablation_report(&mut f, &rows)?;
                    f.flush()?;
                }
                None => write_ablation_report(&mut std::io::stdout().lock(), &rows)?,
            }
            Ok(())
        }
        Command::Synth(a) => {
            if a.n == 0 || a.len == 0 || !(a.noise_std >= 0.0) {
                return Err(Error::Config("synth: n and len must be positive, noise_std non-negative".into()));
            }
            let s = synth_sinusoids(&mut Rng::new(a.seed), a.n, a.len, a.noise_std);
            let mut f = BufWriter::new(File::create(&a.out)?);
            write_csv(&s, &mut f)?;
            f.flush()?;
            Ok(())
        }
        Command::Replay(a) => {
            let m = Manifest::load(&a.manifest)?;
            let out = a.out.map(|p| absolute(&p)).unwrap_or(m.out.clone());
            execute(&m.job, m.seed, Some(&out))
        }
    }
}

/// Runs `job`; with `out`, writes its files and manifest there under a lock.
pub fn execute(job: &Job, seed: u64, out: Option<&Path>) -> Result<()> {
    let _lock = out.map(OutputLock::acquire).transpose()?;
    match job {
        Job::Train { config } => train(config, seed, out.expect("train has an output directory"))?,
        Job::Forecast {
            checkpoint,
            input,
            origin,
            units,
        } => forecast(checkpoint, input, *origin, *units, seed, out)?,
        Job::Evaluate { checkpoint, input, split } => evaluate(checkpoint, input, *split, seed, out)?,
        Job::Ablate { config, grid } => ablate(config, grid, seed, out.expect("ablate has an output directory"))?,
    }
    if let Some(dir) = out {
        Manifest {
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            out: dir.to_path_buf(),
            job: job.clone(),
        }
        .write(dir)?;
    }
    Ok(())
}

pub fn write_loss_csv(out: impl Write, history: &[LossReport]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let io = |e: csv::Error| Error::Io(e.into());
    w.write_record(["epoch", "recon", "score", "kl", "total"]).map_err(io)?;
    for (i, r) in history.iter().enumerate() {
        w.write_record([
            (i + 1).to_string(),
            r.recon.to_string(),
            r.score.to_string(),
            r.kl.to_string(),
            r.total.to_string(),
        ])
        .map_err(io)?;
    }
    w.flush()?;
    Ok(())
}

fn train(config: &RunConfig, seed: u64, out: &Path) -> Result<()> {
    let data = config.prepare()?;
    let mut model = DualVdt::for_data(config.model.clone(), &data, seed)?;
    let tc = config.train.with_seed(seed);
    eprintln!(
        "training on {} windows ({} params), {} epochs",
        data.train.len(),
        model.store.numel(),
        tc.epochs
    );
    let history = model.train_with(&data.train, &tc, |e, r| {
        eprintln!("epoch {e}: recon {:.4} score {:.4} kl {:.4} total {:.4}", r.recon, r.score, r.kl, r.total)
    })?;
    let mut f = BufWriter::new(File::create(out.join("loss.csv"))?);
    write_loss_csv(&mut f, &history)?;
    f.flush()?;
    model.save(&out.join("model.ckpt"))?;
    Ok(())
}

/// Reads `input` and arranges its columns in the model's order.
fn load_for_model(model: &DualVdt, input: &Path) -> Result<RawSeries> {
    let names = &model.meta.names;
    let ett = names.len() == ETT_COLUMNS.len() - 1 && names.iter().zip(&ETT_COLUMNS[1..]).all(|(a, b)| a == b);
    let schema = if ett {
        CsvSchema::Ett
    } else {
        CsvSchema::Generic {
            target: model.meta.target.clone(),
        }
    };
    let s = load_csv(input, &schema)?;
    let missing: Vec<&String> = names.iter().filter(|n| !s.names.contains(n)).collect();
    let extra: Vec<&String> = s.names.iter().filter(|n| !names.contains(n)).collect();
    if !missing.is_empty() || !extra.is_empty() {
        return Err(Error::Schema {
            path: input.to_path_buf(),
            msg: format!("model expects {names:?}; missing {missing:?}, unexpected {extra:?}"),
        });
    }
    let order: Vec<usize> = names.iter().map(|n| s.names.iter().position(|m| m == n).unwrap()).collect();
    let values = s.values.iter().map(|row| order.iter().map(|&j| row[j]).collect()).collect();
    RawSeries::new(names.clone(), s.timestamps, values, model.meta.target.clone())
}

fn forecast(
    checkpoint: &Path,
    input: &Path,
    origin: Option<usize>,
    units: Units,
    seed: u64,
    out: Option<&Path>,
) -> Result<()> {
    let model = DualVdt::load(checkpoint)?;
    let series = load_for_model(&model, input)?;
    let (tx, n) = (model.dims.lookback, model.dims.n);
    if series.len() < tx {
        return Err(Error::invalid(
            "forecast",
            format!("{} rows is shorter than the lookback of {tx}", series.len()),
        ));
    }
    let origin = origin.unwrap_or(series.len() - tx);
    if origin + tx > series.len() {
        return Err(Error::invalid(
            "forecast",
            format!("origin {origin} leaves fewer than {tx} lookback rows"),
        ));
    }
    let rows: Vec<f64> = series.values[origin..origin + tx].iter().flatten().copied().collect();
    let ty = model.dims.horizon;
    let window = SeriesWindow {
        x: Tensor::new(&[tx, n], rows)?,
        y: Tensor::zeros(&[ty, n]),
        origin,
        pad_mask: vec![false; (tx + ty) * n],
    };
    let y = match (units, &model.norm) {
        (Units::Normalized, Some(norm)) => model.forecast_normalized(&[&norm.apply(&window)?], seed)?.remove(0),
        _ => model.forecast(&window, seed)?,
    };
    let write = |w: &mut dyn Write| -> Result<()> {
        let mut c = csv::Writer::from_writer(w);
        let io = |e: csv::Error| Error::Io(e.into());
        c.write_record(["index", "variable", "value"]).map_err(io)?;
        for h in 0..ty {
            for (i, name) in model.meta.names.iter().enumerate() {
                c.write_record([(origin + tx + h).to_string(), name.clone(), y.data()[h * n + i].to_string()])
                    .map_err(io)?;
            }
        }
        c.flush()?;
        Ok(())
    };
    match out {
        Some(dir) => {
            let mut f = BufWriter::new(File::create(dir.join("forecast.csv"))?);
            write(&mut f)?;
            f.flush()?;
        }
        None => write(&mut std::io::stdout().lock())?,
    }
    Ok(())
}

/// The JSON body written by `evaluate`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mse: f64,
    pub mae: f64,
    pub n_windows: usize,
    pub split: Split,
    pub seed: u64,
}

fn evaluate(checkpoint: &Path, input: &Path, split: Split, seed: u64, out: Option<&Path>) -> Result<()> {
    let model = DualVdt::load(checkpoint)?;
    let series = load_for_model(&model, input)?;
    let info = model.data.unwrap_or(crate::model::DataInfo {
        stride: 1,
        split: Default::default(),
    });
    let d = &model.dims;
    let sw = SplitWindows::new(&series, info.split, d.lookback, d.horizon, info.stride)?;
    let raw = sw.get(split);
    if raw.is_empty() {
        return Err(Error::invalid("evaluate", format!("the {} split has no windows", split.name())));
    }
    let windows = match &model.norm {
        Some(n) => n.apply_all(raw)?,
        None => raw.to_vec(),
    };
    let m = model.evaluate(&windows, seed)?;
    let report = EvalReport {
        mse: m.mse,
        mae: m.mae,
        n_windows: m.n_windows,
        split,
        seed,
    };
    let text = serde_json::to_string_pretty(&report).map_err(|e| Error::invalid("evaluate", e.to_string()))?;
    println!("{text}");
    if let Some(dir) = out {
        fs::write(dir.join("evaluate.json"), format!("{text}\n"))?;
    }
    Ok(())
}

fn ablate(config: &RunConfig, grid: &Grid, seed: u64, out: &Path) -> Result<()> {
    let data = config.prepare()?;
    let spec = AblationSpec {
        cells: ablation_cells(&grid.encoders, &grid.scores, &grid.dual, grid.sampler),
        sweep_samplers: grid.sweep.clone(),
        model: config.model.clone(),
        train: config.train.with_seed(seed),
        seed,
    };
    let rows = run_ablation(&data, &spec, |r| {
        eprintln!(
            "{} {} {} {}: mse {:.4} mae {:.4}",
            r.cell.encoder.tag(),
            r.cell.score.tag(),
            if r.cell.dual { "ON" } else { "OFF" },
            r.cell.sampler.tag(),
            r.mse,
            r.mae
        )
    })?;
    write_ablation_csv(File::create(out.join("ablation.csv"))?, &rows)?;
    let mut md = BufWriter::new(File::create(out.join("ablation.md"))?);
    write_ablation_report(&mut md, &rows)?;
    md.flush()?;
    Ok(())
}
