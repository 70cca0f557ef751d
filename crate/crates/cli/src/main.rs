//! Command-line front end for the CSI codec.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde::Deserialize;

use csi_ntc::channel::{generate_dataset, ChannelConfig, ChannelTensor, TensorFile};
use csi_ntc::entropy_model::EntropyModelParams;
use csi_ntc::pipeline::exchange::{write_pmf, write_symbols};
use csi_ntc::pipeline::{
    decode_csi_bytes, encode_csi_with_diagnostics, encode_symbols_for, expected_bits_per_level,
    rd_csv, rd_sweep, select_level, selftest, CodecModel, RateBudget,
};
use csi_ntc::quantizer::QuantLadder;
use csi_ntc::transform::{
    train, Architecture, Optimizer, SwinConfig, TrainConfig, TransformParams, WeightFile,
};

#[derive(Parser)]
#[command(
    name = "csi-ntc",
    version,
    about = "Multi-rate CSI compression with learned transform coding"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset and write it as a tensor file.
    Generate {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1000)]
        count: usize,
        #[arg(long, default_value_t = 32)]
        n_tx: usize,
        #[arg(long, default_value_t = 256)]
        n_subcarriers: usize,
        #[arg(long, default_value_t = 32)]
        n_delay: usize,
        #[arg(long, default_value_t = 6)]
        paths: usize,
        #[arg(long, default_value_t = 0.1)]
        decay: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a model on a tensor file using a TOML config.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Encode every tensor of a file into one bitstream per instance.
    Encode {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Fixed ladder level.
        #[arg(
            long,
            conflicts_with = "capacity",
            required_unless_present = "capacity"
        )]
        level: Option<usize>,
        /// Feedback capacity in bits per instance; picks the finest level that fits.
        #[arg(long)]
        capacity: Option<f64>,
        /// Calibration tensors for the expected rate per level (defaults to the input).
        #[arg(long)]
        calibration: Option<PathBuf>,
    },
    /// Decode bitstreams into a tensor file.
    Decode {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(required = true)]
        streams: Vec<PathBuf>,
    },
    /// Print the finest level whose expected length fits the capacity.
    SelectLevel {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        calibration: PathBuf,
        #[arg(long)]
        capacity: f64,
    },
    /// Sweep every level of every model and emit rate-distortion CSV.
    RdSweep {
        #[arg(long)]
        data: PathBuf,
        #[arg(long = "model", required = true)]
        models: Vec<PathBuf>,
        /// Tradeoffs to include (defaults to every model's own).
        #[arg(long = "lambda")]
        lambdas: Vec<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write one tensor's symbols and the level tables as plain text for external rate checks.
    ExportSymbols {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long)]
        level: usize,
        #[arg(long)]
        symbols: PathBuf,
        #[arg(long)]
        pmf: PathBuf,
    },
    /// Run the built-in invariant checks.
    Selftest,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainFile {
    lambda: f64,
    epochs: Option<usize>,
    learning_rate: Option<f64>,
    entropy_learning_rate: Option<f64>,
    batch_size: Option<usize>,
    seed: Option<u64>,
    #[serde(default)]
    optimizer: OptimizerChoice,
    clip_norm: Option<f64>,
    architecture: ArchitectureChoice,
    ladder: LadderSettings,
}

#[derive(Debug, Default, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
enum OptimizerChoice {
    #[default]
    Sgd,
    SgdMomentum {
        momentum: f64,
    },
    Adam,
}

#[derive(Debug, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
enum ArchitectureChoice {
    Identity,
    Linear {
        latent_dim: usize,
    },
    Mlp {
        hidden: usize,
        latent_dim: usize,
    },
    SwinToy {
        patch_size: Option<usize>,
        heads: Option<usize>,
        depths: Option<Vec<usize>>,
        embed_dim: Option<usize>,
        window: Option<usize>,
        mlp_ratio: Option<usize>,
        latent_channels: Option<usize>,
    },
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct LadderSettings {
    base_step: f64,
    levels: usize,
}

impl ArchitectureChoice {
    fn build(self) -> Architecture {
        match self {
            ArchitectureChoice::Identity => Architecture::Identity,
            ArchitectureChoice::Linear { latent_dim } => Architecture::Linear { latent_dim },
            ArchitectureChoice::Mlp { hidden, latent_dim } => {
                Architecture::Mlp { hidden, latent_dim }
            }
            ArchitectureChoice::SwinToy {
                patch_size,
                heads,
                depths,
                embed_dim,
                window,
                mlp_ratio,
                latent_channels,
            } => {
                let desk = SwinConfig::desk();
                Architecture::SwinToy(SwinConfig {
                    patch_size: patch_size.unwrap_or(desk.patch_size),
                    heads: heads.unwrap_or(desk.heads),
                    depths: depths.unwrap_or(desk.depths),
                    embed_dim: embed_dim.unwrap_or(desk.embed_dim),
                    window: window.unwrap_or(desk.window),
                    mlp_ratio: mlp_ratio.unwrap_or(desk.mlp_ratio),
                    latent_channels: latent_channels.unwrap_or(desk.latent_channels),
                })
            }
        }
    }
}

fn read_tensors(path: &Path) -> Result<TensorFile> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    TensorFile::read_from(BufReader::new(file))
        .with_context(|| format!("reading {}", path.display()))
}

fn write_tensors(path: &Path, tensors: Vec<ChannelTensor>) -> Result<()> {
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut w = BufWriter::new(file);
    TensorFile::from_tensors(tensors)?.write_to(&mut w)?;
    w.flush()?;
    Ok(())
}

fn model_id(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().replace([',', '\n', '\r'], "_"))
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "model".into())
}

fn load_model(path: &Path) -> Result<CodecModel> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let weights = WeightFile::read_from(BufReader::new(file))
        .with_context(|| format!("reading {}", path.display()))?;
    Ok(CodecModel::from_weights(model_id(path), weights)?)
}

fn generate(out: &Path, count: usize, cfg: ChannelConfig) -> Result<()> {
    if count == 0 {
        return Err(csi_ntc::Error::Config("count must be positive".into()).into());
    }
    let data = generate_dataset(&cfg, count)?;
    write_tensors(out, data)?;
    eprintln!(
        "wrote {count} channels of 2x{}x{} to {}",
        cfg.n_delay,
        cfg.n_tx,
        out.display()
    );
    Ok(())
}

fn train_command(config: &Path, data: &Path, out: &Path) -> Result<()> {
    let text =
        fs::read_to_string(config).with_context(|| format!("reading {}", config.display()))?;
    let settings: TrainFile = toml::from_str(&text)?;
    let ladder = QuantLadder::new(settings.ladder.base_step, settings.ladder.levels)?;
    let dataset = read_tensors(data)?;

    let mut cfg = TrainConfig::new(settings.lambda, ladder.base_step());
    if let Some(v) = settings.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = settings.learning_rate {
        cfg.learning_rate = v;
    }
    if let Some(v) = settings.entropy_learning_rate {
        cfg.entropy_learning_rate = v;
    }
    if let Some(v) = settings.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = settings.seed {
        cfg.seed = v;
    }
    if settings.clip_norm.is_some() {
        cfg.clip_norm = settings.clip_norm;
    }
    cfg.optimizer = match settings.optimizer {
        OptimizerChoice::Sgd => cfg.optimizer,
        OptimizerChoice::SgdMomentum { momentum } => Optimizer::Sgd { momentum },
        OptimizerChoice::Adam => Optimizer::ADAM,
    };
    cfg.validate()?;

    let params = TransformParams::init(
        settings.architecture.build(),
        dataset.n_delay,
        dataset.n_tx,
        cfg.seed,
    )?;
    let entropy = EntropyModelParams::standard(params.latent_shape().channels);
    let outcome = train(&dataset.tensors, &cfg, params, entropy)?;
    for (epoch, s) in outcome.history.iter().enumerate() {
        eprintln!(
            "epoch {:>4}  loss {:.6}  distortion {:.6}  rate {:.3} nats",
            epoch + 1,
            s.loss,
            s.distortion,
            s.rate_nats
        );
    }
    let weights = WeightFile {
        transform: outcome.transform,
        entropy: outcome.entropy,
        scale: dataset.scale,
        lambda: cfg.lambda,
        ladder,
    };
    let file = File::create(out).with_context(|| format!("creating {}", out.display()))?;
    let mut w = BufWriter::new(file);
    weights.write_to(&mut w)?;
    w.flush()?;
    eprintln!("wrote model to {}", out.display());
    Ok(())
}

fn expected_bits(model: &CodecModel, calibration: &Path) -> Result<Vec<f64>> {
    let data = read_tensors(calibration)?;
    let bits = expected_bits_per_level(model, &data.tensors)?;
    for (k, b) in bits.iter().enumerate() {
        eprintln!("level {k}: expected {b:.1} bits");
    }
    Ok(bits)
}

fn encode_command(
    model: &Path,
    input: &Path,
    out_dir: &Path,
    level: Option<usize>,
    capacity: Option<f64>,
    calibration: Option<&Path>,
) -> Result<()> {
    let model = load_model(model)?;
    let data = read_tensors(input)?;
    let level = match (level, capacity) {
        (Some(k), _) => k,
        (None, Some(c)) => {
            let bits = expected_bits(&model, calibration.unwrap_or(input))?;
            select_level(&bits, RateBudget::new(c)?)?
        }
        (None, None) => bail!(csi_ntc::Error::Config(
            "either --level or --capacity is required".into()
        )),
    };
    fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let mut total_bits = 0usize;
    let mut folds = 0usize;
    for (i, h) in data.tensors.iter().enumerate() {
        let (stream, diagnostics) = encode_csi_with_diagnostics(h, &model, level)?;
        let bytes = stream.to_bytes()?;
        total_bits += 8 * bytes.len();
        folds += diagnostics.fold_events;
        let path = out_dir.join(format!("{i:06}.csib"));
        fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
    }
    let n = data.tensors.len().max(1) as f64;
    eprintln!(
        "level {level}: {} streams, mean {:.1} bits, {:.4} bits per entry, {folds} folded symbols",
        data.tensors.len(),
        total_bits as f64 / n,
        total_bits as f64 / (n * (data.n_delay * data.n_tx) as f64)
    );
    Ok(())
}

fn decode_command(model: &Path, out: &Path, streams: &[PathBuf]) -> Result<()> {
    let model = load_model(model)?;
    let tensors = streams
        .iter()
        .map(|p| {
            let bytes = fs::read(p).with_context(|| format!("reading {}", p.display()))?;
            decode_csi_bytes(&bytes, &model).with_context(|| format!("decoding {}", p.display()))
        })
        .collect::<Result<Vec<_>>>()?;
    write_tensors(out, tensors)?;
    eprintln!("decoded {} streams into {}", streams.len(), out.display());
    Ok(())
}

fn rd_sweep_command(
    data: &Path,
    models: &[PathBuf],
    lambdas: &[f64],
    out: Option<&Path>,
) -> Result<()> {
    let dataset = read_tensors(data)?;
    let models = models
        .iter()
        .map(|p| load_model(p))
        .collect::<Result<Vec<_>>>()?;
    let lambdas = if lambdas.is_empty() {
        let mut all: Vec<f64> = models.iter().map(|m| m.lambda).collect();
        all.sort_by(f64::total_cmp);
        all.dedup();
        all
    } else {
        lambdas.to_vec()
    };
    let csv = rd_csv(&rd_sweep(&dataset.tensors, &models, &lambdas)?);
    match out {
        Some(path) => {
            fs::write(path, csv).with_context(|| format!("writing {}", path.display()))?
        }
        None => print!("{csv}"),
    }
    Ok(())
}

fn export_symbols(
    model: &Path,
    input: &Path,
    index: usize,
    level: usize,
    symbols: &Path,
    pmf: &Path,
) -> Result<()> {
    let model = load_model(model)?;
    let data = read_tensors(input)?;
    let Some(h) = data.tensors.get(index) else {
        return Err(csi_ntc::Error::Config(format!(
            "index {index} out of range for {} tensors",
            data.tensors.len()
        ))
        .into());
    };
    let (s, folds) = encode_symbols_for(h, &model, level)?;
    fs::write(symbols, write_symbols(&s))
        .with_context(|| format!("writing {}", symbols.display()))?;
    fs::write(pmf, write_pmf(model.tables(level)?))
        .with_context(|| format!("writing {}", pmf.display()))?;
    eprintln!(
        "{} symbols at level {level}, {folds} folded",
        s.symbols.len()
    );
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Generate {
            out,
            count,
            n_tx,
            n_subcarriers,
            n_delay,
            paths,
            decay,
            seed,
        } => generate(
            &out,
            count,
            ChannelConfig {
                n_tx,
                n_subcarriers,
                n_delay,
                seed,
                n_paths: paths,
                decay,
            },
        )?,
        Command::Train { config, data, out } => train_command(&config, &data, &out)?,
        Command::Encode {
            model,
            input,
            out_dir,
            level,
            capacity,
            calibration,
        } => encode_command(
            &model,
            &input,
            &out_dir,
            level,
            capacity,
            calibration.as_deref(),
        )?,
        Command::Decode {
            model,
            out,
            streams,
        } => decode_command(&model, &out, &streams)?,
        Command::SelectLevel {
            model,
            calibration,
            capacity,
        } => {
            let model = load_model(&model)?;
            let bits = expected_bits(&model, &calibration)?;
            println!("{}", select_level(&bits, RateBudget::new(capacity)?)?);
        }
        Command::RdSweep {
            data,
            models,
            lambdas,
            out,
        } => rd_sweep_command(&data, &models, &lambdas, out.as_deref())?,
        Command::ExportSymbols {
            model,
            input,
            index,
            level,
            symbols,
            pmf,
        } => export_symbols(&model, &input, index, level, &symbols, &pmf)?,
        Command::Selftest => {
            let checks = selftest::run();
            for c in &checks {
                println!(
                    "{} {}: {}",
                    if c.passed { "PASS" } else { "FAIL" },
                    c.name,
                    c.detail
                );
            }
            if checks.iter().any(|c| !c.passed) {
                return Ok(ExitCode::FAILURE);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

/// 2 for configuration problems, 4 for capacity, 3 for data and format errors.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<csi_ntc::Error>() {
            return e.exit_code() as u8;
        }
        if cause.downcast_ref::<toml::de::Error>().is_some() {
            return 2;
        }
    }
    3
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
