//! Command-line interface: train, generate, interpolate, bench, selftest.
//!
//! Every subcommand reads an optional `key = value` config file first and
//! then applies its own flags on top, so a config file can hold the model
//! shape while flags tweak the run.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::bench::{records_to_csv, run_bench, scaling_r_squared, BenchMode, BenchRecord};
use crate::checkpoint;
use crate::config::{ElementType, RunConfig, SamplerKind};
use crate::decoder::{DecoderConfig, ModelWeights};
use crate::generate::{generate_clip, Sampler};
use crate::interpolation::recursive_interpolate;
use crate::rng::SplitMix64;
use crate::selftest::run_selftests;
use crate::tensor::Scalar;
use crate::tokenizer::{
    decode_frame, read_grid_file, write_grid_text, write_ppm, Codebook, FrameGrid,
};
use crate::training::{
    clips_to_sequences, generate_dataset, train_with, write_loss_csv, MotionClass,
};
use crate::{Error, Result};

#[derive(Parser, Debug)]
#[command(
    name = "retvid",
    version,
    about = "Retention-based autoregressive video token generator"
)]
pub struct Cli {
    /// Config file of `key = value` lines, applied before any flags.
    #[arg(long, value_name = "FILE", global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train on the synthetic moving-sprite dataset and save a checkpoint.
    Train(TrainArgs),
    /// Generate key frames from a motion label and write image + grid files.
    Generate(GenerateArgs),
    /// Insert frames between two key-frame grid files and write the clip.
    Interpolate(InterpolateArgs),
    /// Time recurrent generation against the per-token full-prefix baseline.
    Bench(BenchArgs),
    /// Run the built-in health checks.
    Selftest,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Shuffle and weight-init seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Stop once the epoch loss drops to this many nats per token.
    #[arg(long)]
    early_stop: Option<f64>,
    /// Resume from an existing checkpoint instead of fresh weights.
    #[arg(long, value_name = "FILE")]
    init_from: Option<PathBuf>,
    /// Where to save the trained checkpoint.
    #[arg(long, default_value = "model.ckpt", value_name = "FILE")]
    out: PathBuf,
    /// Also write the per-epoch loss history as CSV.
    #[arg(long, value_name = "FILE")]
    loss_csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GenerateArgs {
    /// Checkpoint to load; omitted means untrained seed-0 weights.
    #[arg(long, value_name = "FILE")]
    checkpoint: Option<PathBuf>,
    /// Motion label: right, left, up, down, or diagonal.
    #[arg(long, default_value = "right")]
    label: String,
    /// Number of key frames to generate.
    #[arg(long)]
    frames: Option<usize>,
    /// Sampling seed; implies the seeded sampler unless --sampler says otherwise.
    #[arg(long)]
    seed: Option<u64>,
    /// Sampler: greedy or seeded.
    #[arg(long)]
    sampler: Option<String>,
    /// Directory for frame_NNN.ppm and frame_NNN.txt outputs.
    #[arg(long, default_value = "out", value_name = "DIR")]
    out_dir: PathBuf,
}

#[derive(Args, Debug)]
struct InterpolateArgs {
    /// Checkpoint to load; omitted means untrained seed-0 weights.
    #[arg(long, value_name = "FILE")]
    checkpoint: Option<PathBuf>,
    /// First key frame as a token grid text file.
    #[arg(long, value_name = "FILE")]
    key_a: PathBuf,
    /// Second key frame as a token grid text file.
    #[arg(long, value_name = "FILE")]
    key_b: PathBuf,
    /// Motion label for the text prompt.
    #[arg(long, default_value = "right")]
    label: String,
    /// Frames to insert between the keys per round.
    #[arg(long)]
    insert: Option<usize>,
    /// Interpolation rounds; each round fills every adjacent gap.
    #[arg(long)]
    rounds: Option<usize>,
    /// Fraction of stable tokens to inherit instead of sampling.
    #[arg(long)]
    inherit_fraction: Option<f64>,
    /// Chebyshev radius for the unstable band around changed tokens.
    #[arg(long)]
    dilation_radius: Option<usize>,
    /// Seed for inheritance choice and the seeded sampler.
    #[arg(long)]
    seed: Option<u64>,
    /// Sampler: greedy or seeded.
    #[arg(long)]
    sampler: Option<String>,
    /// Directory for frame_NNN.ppm and frame_NNN.txt outputs.
    #[arg(long, default_value = "out", value_name = "DIR")]
    out_dir: PathBuf,
}

#[derive(Args, Debug)]
struct BenchArgs {
    /// Checkpoint to time; omitted means untrained seed-0 weights.
    #[arg(long, value_name = "FILE")]
    checkpoint: Option<PathBuf>,
    /// Comma-separated modes: recurrent, ar_baseline.
    #[arg(long, value_delimiter = ',')]
    modes: Option<Vec<String>>,
    /// Comma-separated generation lengths, ascending.
    #[arg(long, value_delimiter = ',')]
    lengths: Option<Vec<usize>>,
    #[arg(long)]
    repetitions: Option<usize>,
    #[arg(long)]
    warmup: Option<usize>,
    /// Write the CSV here instead of stdout.
    #[arg(long, value_name = "FILE")]
    csv: Option<PathBuf>,
}

/// Parses `argv` and runs the chosen subcommand.
///
/// Exit codes: 0 on success (including `--help`/`--version`), 1 on a runtime
/// failure with a diagnostic on stderr, 2 on a usage error.
pub fn cli_main<I, S>(argv: I) -> u8
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    let cfg = match &cli.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    match cli.command {
        Command::Train(args) => run_train(cfg, &args),
        Command::Generate(args) => run_generate(cfg, &args),
        Command::Interpolate(args) => run_interpolate(cfg, &args),
        Command::Bench(args) => run_bench_cmd(cfg, &args),
        Command::Selftest => run_selftest_cmd(),
    }
}

/// Element type to use: the checkpoint's stored width when loading one,
/// otherwise the configured type.
fn effective_dtype(cfg: &RunConfig, checkpoint_path: Option<&Path>) -> Result<ElementType> {
    match checkpoint_path {
        Some(path) => match checkpoint::stored_dtype(path)? {
            4 => Ok(ElementType::F32),
            8 => Ok(ElementType::F64),
            other => Err(Error::CheckpointFormat(format!(
                "unsupported element width {other}"
            ))),
        },
        None => Ok(cfg.dtype),
    }
}

fn load_or_init<T: Scalar>(
    cfg: &RunConfig,
    checkpoint_path: Option<&Path>,
) -> Result<(ModelWeights<T>, DecoderConfig)> {
    match checkpoint_path {
        Some(path) => checkpoint::load_checkpoint::<T>(path),
        None => {
            eprintln!("note: no checkpoint given, using untrained weights (seed 0)");
            let dcfg = cfg.decoder_config()?;
            let mut rng = SplitMix64::new(0);
            Ok((ModelWeights::init(&dcfg, &mut rng), dcfg))
        }
    }
}

fn sampler_from(cfg: &RunConfig, flag: Option<&str>, seed_flag: Option<u64>) -> Result<Sampler> {
    let kind = match flag {
        Some("greedy") => SamplerKind::Greedy,
        Some("seeded") => SamplerKind::Seeded,
        Some(other) => {
            return Err(Error::Input(format!(
                "unknown sampler \"{other}\" (expected greedy or seeded)"
            )))
        }
        None if seed_flag.is_some() => SamplerKind::Seeded,
        None => cfg.sampler,
    };
    Ok(match kind {
        SamplerKind::Greedy => Sampler::Greedy,
        SamplerKind::Seeded => Sampler::seeded(seed_flag.unwrap_or(cfg.sample_seed)),
    })
}

fn write_frames(frames: &[FrameGrid], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let book = Codebook::default_lattice();
    for (i, frame) in frames.iter().enumerate() {
        let image = decode_frame(frame, &book, book.patch())?;
        write_ppm(&image, &dir.join(format!("frame_{i:03}.ppm")))?;
        write_grid_text(frame, &dir.join(format!("frame_{i:03}.txt")))?;
    }
    Ok(())
}

fn run_train(mut cfg: RunConfig, args: &TrainArgs) -> Result<()> {
    if let Some(v) = args.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = args.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = args.learning_rate {
        cfg.learning_rate = v;
    }
    if let Some(v) = args.seed {
        cfg.train_seed = v;
    }
    if let Some(v) = args.early_stop {
        cfg.early_stop_loss = Some(v);
    }
    match effective_dtype(&cfg, args.init_from.as_deref())? {
        ElementType::F32 => train_typed::<f32>(&cfg, args),
        ElementType::F64 => train_typed::<f64>(&cfg, args),
    }
}

fn train_typed<T: Scalar>(cfg: &RunConfig, args: &TrainArgs) -> Result<()> {
    let layout = cfg.layout()?;
    let dcfg = cfg.decoder_config()?;
    let clips = generate_dataset(&cfg.dataset_spec(), &layout)?;
    let dataset = clips_to_sequences(&clips, &layout, cfg.include_soi)?;
    let mut weights = match &args.init_from {
        Some(path) => {
            let (weights, stored_cfg) = checkpoint::load_checkpoint::<T>(path)?;
            if stored_cfg != dcfg {
                return Err(Error::Input(format!(
                    "checkpoint {} was trained with a different model configuration",
                    path.display()
                )));
            }
            weights
        }
        None => ModelWeights::<T>::init(&dcfg, &mut SplitMix64::new(cfg.train_seed)),
    };
    println!(
        "training on {} clips ({} motion classes), {} parameters",
        dataset.len(),
        cfg.dataset_spec().classes.len(),
        weights.param_count()
    );
    let report = train_with(&mut weights, &dcfg, &dataset, &cfg.train_config(), |epoch, loss, lr| {
        eprintln!("epoch {:>4}: {loss:.4} nats/token (lr {lr:.1e})", epoch + 1);
    })?;
    let final_loss = report.loss_history.last().copied().unwrap_or(f64::NAN);
    println!(
        "ran {} epochs, final loss {:.4} nats/token{}",
        report.epochs_run,
        final_loss,
        if report.stopped_early {
            " (early stop)"
        } else {
            ""
        }
    );
    checkpoint::save_checkpoint(&weights, &dcfg, &args.out)?;
    println!("checkpoint written to {}", args.out.display());
    if let Some(path) = &args.loss_csv {
        write_loss_csv(&report.loss_history, path)?;
        println!("loss history written to {}", path.display());
    }
    Ok(())
}

fn run_generate(mut cfg: RunConfig, args: &GenerateArgs) -> Result<()> {
    if let Some(v) = args.frames {
        cfg.frames = v;
    }
    match effective_dtype(&cfg, args.checkpoint.as_deref())? {
        ElementType::F32 => generate_typed::<f32>(&cfg, args),
        ElementType::F64 => generate_typed::<f64>(&cfg, args),
    }
}

fn generate_typed<T: Scalar>(cfg: &RunConfig, args: &GenerateArgs) -> Result<()> {
    let layout = cfg.layout()?;
    let (weights, dcfg) = load_or_init::<T>(cfg, args.checkpoint.as_deref())?;
    let class = MotionClass::parse(&args.label)?;
    let text = [layout.text_token(class.index())?];
    let mut sampler = sampler_from(cfg, args.sampler.as_deref(), args.seed)?;
    let frames = generate_clip(
        &weights,
        &dcfg,
        &text,
        cfg.frames,
        cfg.grid_rows,
        cfg.grid_cols,
        &layout,
        &mut sampler,
        cfg.include_soi,
    )?;
    write_frames(&frames, &args.out_dir)?;
    println!(
        "wrote {} frames ({}x{}) to {}",
        frames.len(),
        cfg.grid_rows,
        cfg.grid_cols,
        args.out_dir.display()
    );
    Ok(())
}

fn run_interpolate(mut cfg: RunConfig, args: &InterpolateArgs) -> Result<()> {
    if let Some(v) = args.insert {
        cfg.insert_count = v;
    }
    if let Some(v) = args.rounds {
        cfg.rounds = v;
    }
    if let Some(v) = args.inherit_fraction {
        cfg.inherit_fraction = v;
    }
    if let Some(v) = args.dilation_radius {
        cfg.dilation_radius = v;
    }
    if let Some(v) = args.seed {
        cfg.interp_seed = v;
        cfg.sample_seed = v;
    }
    match effective_dtype(&cfg, args.checkpoint.as_deref())? {
        ElementType::F32 => interpolate_typed::<f32>(&cfg, args),
        ElementType::F64 => interpolate_typed::<f64>(&cfg, args),
    }
}

fn interpolate_typed<T: Scalar>(cfg: &RunConfig, args: &InterpolateArgs) -> Result<()> {
    let layout = cfg.layout()?;
    let (weights, dcfg) = load_or_init::<T>(cfg, args.checkpoint.as_deref())?;
    let key_a = read_grid_file(&args.key_a)?;
    let key_b = read_grid_file(&args.key_b)?;
    let class = MotionClass::parse(&args.label)?;
    let text = [layout.text_token(class.index())?];
    let policy = cfg.interpolation_policy()?;
    let mut sampler = sampler_from(cfg, args.sampler.as_deref(), args.seed)?;
    let clip = recursive_interpolate(
        &text,
        &[key_a, key_b],
        cfg.rounds,
        cfg.insert_count,
        &weights,
        &dcfg,
        &layout,
        &policy,
        &mut sampler,
        cfg.include_soi,
    )?;
    write_frames(&clip, &args.out_dir)?;
    println!(
        "wrote {} frames (2 keys + {} inserted) to {}",
        clip.len(),
        clip.len() - 2,
        args.out_dir.display()
    );
    Ok(())
}

fn run_bench_cmd(mut cfg: RunConfig, args: &BenchArgs) -> Result<()> {
    if let Some(modes) = &args.modes {
        cfg.bench_modes = modes
            .iter()
            .map(|m| BenchMode::parse(m))
            .collect::<Result<Vec<_>>>()?;
    }
    if let Some(lengths) = &args.lengths {
        cfg.bench_lengths = lengths.clone();
    }
    if let Some(v) = args.repetitions {
        cfg.repetitions = v;
    }
    if let Some(v) = args.warmup {
        cfg.warmup = v;
    }
    match effective_dtype(&cfg, args.checkpoint.as_deref())? {
        ElementType::F32 => bench_typed::<f32>(&cfg, args),
        ElementType::F64 => bench_typed::<f64>(&cfg, args),
    }
}

fn bench_typed<T: Scalar>(cfg: &RunConfig, args: &BenchArgs) -> Result<()> {
    let (weights, dcfg) = load_or_init::<T>(cfg, args.checkpoint.as_deref())?;
    let scenario = cfg.bench_scenario();
    let records = run_bench(&scenario, &weights, &dcfg)?;
    let csv = records_to_csv(&records);
    match &args.csv {
        Some(path) => {
            std::fs::write(path, &csv)?;
            println!("CSV written to {}", path.display());
        }
        None => print!("{csv}"),
    }
    print_fit_summary(&scenario.modes, &records)?;
    Ok(())
}

/// Least-squares scaling fits and the relative speedup, printed after the CSV.
fn print_fit_summary(modes: &[BenchMode], records: &[BenchRecord]) -> Result<()> {
    for &mode in modes {
        let (lengths, totals): (Vec<usize>, Vec<f64>) = records
            .iter()
            .filter(|r| r.mode == mode)
            .map(|r| (r.length, r.mean_total_s))
            .unzip();
        let degree = match mode {
            BenchMode::Recurrent => 1,
            BenchMode::ArBaseline => 2,
        };
        if lengths.len() > degree + 1 {
            let r2 = scaling_r_squared(&lengths, &totals, degree)?;
            println!(
                "{}: total time vs L, degree-{degree} fit R^2 = {r2:.4}",
                mode.name()
            );
        }
    }
    let longest_common = records
        .iter()
        .filter(|r| r.mode == BenchMode::Recurrent)
        .filter_map(|r| {
            records
                .iter()
                .find(|b| b.mode == BenchMode::ArBaseline && b.length == r.length)
                .map(|b| (r.length, r.mean_s_per_token, b.mean_s_per_token))
        })
        .max_by_key(|&(l, _, _)| l);
    if let Some((length, fast, slow)) = longest_common {
        println!(
            "speedup at L={length}: {:.2}x (recurrent over baseline, per token)",
            slow / fast
        );
    }
    Ok(())
}

fn run_selftest_cmd() -> Result<()> {
    let outcomes = run_selftests();
    let mut failed = 0;
    for outcome in &outcomes {
        if outcome.passed {
            println!("PASS {}", outcome.name);
        } else {
            failed += 1;
            println!(
                "FAIL {} ({})",
                outcome.name,
                outcome.detail.as_deref().unwrap_or("no detail")
            );
        }
    }
    if failed > 0 {
        return Err(Error::Contract(format!(
            "{failed} of {} checks failed",
            outcomes.len()
        )));
    }
    println!("all {} checks passed", outcomes.len());
    Ok(())
}
