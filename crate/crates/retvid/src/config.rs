//! Flat `key = value` run configuration.
//!
//! One option per line, `#` starts a comment, unknown keys and malformed
//! values are rejected with their line number. Command-line flags are
//! applied on top of the file by the CLI, so the file only needs the
//! options that differ from the defaults.

use crate::bench::{BenchMode, BenchScenario};
use crate::decoder::DecoderConfig;
use crate::error::{Error, Result};
use crate::interpolation::InterpolationPolicy;
use crate::sequencer::VocabLayout;
use crate::training::{SyntheticDatasetSpec, TrainConfig};
use std::path::Path;
use std::str::FromStr;

/// Model element type selected at run time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementType {
    F32,
    F64,
}

impl ElementType {
    pub fn name(self) -> &'static str {
        match self {
            ElementType::F32 => "f32",
            ElementType::F64 => "f64",
        }
    }
}

/// Which sampling rule generation subcommands use.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplerKind {
    Greedy,
    Seeded,
}

/// Every knob the CLI exposes, with desk-scale defaults.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub max_sequence_length: usize,
    pub max_serial: usize,
    pub dtype: ElementType,

    pub grid_rows: usize,
    pub grid_cols: usize,
    pub sprite_size: usize,
    pub frames_per_clip: usize,
    pub clips_per_class: usize,
    pub dataset_seed: u64,

    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub clip_norm: f64,
    pub train_seed: u64,
    pub early_stop_loss: Option<f64>,

    pub frames: usize,
    pub sampler: SamplerKind,
    pub sample_seed: u64,
    pub include_soi: bool,

    pub insert_count: usize,
    pub rounds: usize,
    pub inherit_fraction: f64,
    pub dilation_radius: usize,
    pub interp_seed: u64,

    pub bench_lengths: Vec<usize>,
    pub bench_modes: Vec<BenchMode>,
    pub repetitions: usize,
    pub warmup: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            layers: 4,
            d_model: 128,
            heads: 4,
            ffn_hidden: 256,
            max_sequence_length: 4096,
            max_serial: 32,
            dtype: ElementType::F32,

            grid_rows: 8,
            grid_cols: 8,
            sprite_size: 3,
            frames_per_clip: 4,
            clips_per_class: 36,
            dataset_seed: 7,

            epochs: 50,
            batch_size: 8,
            learning_rate: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            clip_norm: 1.0,
            train_seed: 0,
            early_stop_loss: None,

            frames: 4,
            sampler: SamplerKind::Greedy,
            sample_seed: 0,
            include_soi: false,

            insert_count: 2,
            rounds: 1,
            inherit_fraction: 0.2,
            dilation_radius: 1,
            interp_seed: 0,

            bench_lengths: vec![64, 128, 256, 512, 1024],
            bench_modes: vec![BenchMode::Recurrent, BenchMode::ArBaseline],
            repetitions: 3,
            warmup: 1,
        }
    }
}

fn parse_value<T: FromStr>(value: &str, key: &str, line: usize) -> Result<T> {
    value.parse().map_err(|_| Error::ConfigParse {
        line,
        message: format!("\"{value}\" is not a valid value for {key}"),
    })
}

fn parse_bool(value: &str, key: &str, line: usize) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::ConfigParse {
            line,
            message: format!("\"{value}\" is not true or false for {key}"),
        }),
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        Self::parse_str(&std::fs::read_to_string(path)?)
    }

    /// Parses file contents on top of the defaults.
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content.split_once('=').ok_or_else(|| Error::ConfigParse {
                line,
                message: format!("expected `key = value`, got \"{content}\""),
            })?;
            let key = key.trim();
            let value = value.trim();
            if value.is_empty() {
                return Err(Error::ConfigParse {
                    line,
                    message: format!("{key} has no value"),
                });
            }
            cfg.set(key, value, line)?;
        }
        Ok(cfg)
    }

    fn set(&mut self, key: &str, value: &str, line: usize) -> Result<()> {
        match key {
            "layers" => self.layers = parse_value(value, key, line)?,
            "d_model" => self.d_model = parse_value(value, key, line)?,
            "heads" => self.heads = parse_value(value, key, line)?,
            "ffn_hidden" => self.ffn_hidden = parse_value(value, key, line)?,
            "max_sequence_length" => {
                self.max_sequence_length = parse_value(value, key, line)?
            }
            "max_serial" => self.max_serial = parse_value(value, key, line)?,
            "dtype" => {
                self.dtype = match value {
                    "f32" => ElementType::F32,
                    "f64" => ElementType::F64,
                    _ => {
                        return Err(Error::ConfigParse {
                            line,
                            message: format!("\"{value}\" is not f32 or f64 for dtype"),
                        })
                    }
                }
            }
            "grid_rows" => self.grid_rows = parse_value(value, key, line)?,
            "grid_cols" => self.grid_cols = parse_value(value, key, line)?,
            "sprite_size" => self.sprite_size = parse_value(value, key, line)?,
            "frames_per_clip" => self.frames_per_clip = parse_value(value, key, line)?,
            "clips_per_class" => self.clips_per_class = parse_value(value, key, line)?,
            "dataset_seed" => self.dataset_seed = parse_value(value, key, line)?,
            "epochs" => self.epochs = parse_value(value, key, line)?,
            "batch_size" => self.batch_size = parse_value(value, key, line)?,
            "learning_rate" => self.learning_rate = parse_value(value, key, line)?,
            "beta1" => self.beta1 = parse_value(value, key, line)?,
            "beta2" => self.beta2 = parse_value(value, key, line)?,
            "epsilon" => self.epsilon = parse_value(value, key, line)?,
            "clip_norm" => self.clip_norm = parse_value(value, key, line)?,
            "train_seed" => self.train_seed = parse_value(value, key, line)?,
            "early_stop_loss" => {
                self.early_stop_loss = Some(parse_value(value, key, line)?)
            }
            "frames" => self.frames = parse_value(value, key, line)?,
            "sampler" => {
                self.sampler = match value {
                    "greedy" => SamplerKind::Greedy,
                    "seeded" => SamplerKind::Seeded,
                    _ => {
                        return Err(Error::ConfigParse {
                            line,
                            message: format!(
                                "\"{value}\" is not greedy or seeded for sampler"
                            ),
                        })
                    }
                }
            }
            "sample_seed" => self.sample_seed = parse_value(value, key, line)?,
            "include_soi" => self.include_soi = parse_bool(value, key, line)?,
            "insert_count" => self.insert_count = parse_value(value, key, line)?,
            "rounds" => self.rounds = parse_value(value, key, line)?,
            "inherit_fraction" => self.inherit_fraction = parse_value(value, key, line)?,
            "dilation_radius" => self.dilation_radius = parse_value(value, key, line)?,
            "interp_seed" => self.interp_seed = parse_value(value, key, line)?,
            "bench_lengths" => {
                self.bench_lengths = value
                    .split(',')
                    .map(|part| parse_value(part.trim(), key, line))
                    .collect::<Result<_>>()?
            }
            "bench_modes" => {
                self.bench_modes = value
                    .split(',')
                    .map(|part| {
                        BenchMode::parse(part.trim()).map_err(|_| Error::ConfigParse {
                            line,
                            message: format!(
                                "\"{part}\" is not recurrent or ar_baseline for {key}"
                            ),
                        })
                    })
                    .collect::<Result<_>>()?
            }
            "repetitions" => self.repetitions = parse_value(value, key, line)?,
            "warmup" => self.warmup = parse_value(value, key, line)?,
            _ => return Err(Error::UnknownKey { line, key: key.to_string() }),
        }
        Ok(())
    }

    pub fn layout(&self) -> Result<VocabLayout> {
        VocabLayout::new(
            crate::sequencer::DEFAULT_TEXT_CLASSES,
            crate::tokenizer::DEFAULT_CODEBOOK_SIZE,
            self.max_serial,
        )
    }

    pub fn decoder_config(&self) -> Result<DecoderConfig> {
        DecoderConfig::new(
            self.layers,
            self.layout()?.vocab_size(),
            self.d_model,
            self.heads,
            self.ffn_hidden,
            self.max_sequence_length,
        )
    }

    pub fn dataset_spec(&self) -> SyntheticDatasetSpec {
        SyntheticDatasetSpec {
            rows: self.grid_rows,
            cols: self.grid_cols,
            classes: crate::training::MotionClass::all().to_vec(),
            frames_per_clip: self.frames_per_clip,
            clips_per_class: self.clips_per_class,
            sprite_size: self.sprite_size,
            seed: self.dataset_seed,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
            clip_norm: self.clip_norm,
            seed: self.train_seed,
            early_stop_loss: self.early_stop_loss,
            ..TrainConfig::default()
        }
    }

    pub fn interpolation_policy(&self) -> Result<InterpolationPolicy> {
        InterpolationPolicy::new(self.inherit_fraction, self.dilation_radius, self.interp_seed)
    }

    pub fn bench_scenario(&self) -> BenchScenario {
        BenchScenario {
            modes: self.bench_modes.clone(),
            lengths: self.bench_lengths.clone(),
            repetitions: self.repetitions,
            warmup: self.warmup,
            frame_tokens: self.grid_rows * self.grid_cols,
        }
    }
}
