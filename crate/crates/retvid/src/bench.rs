//! Inference-scaling benchmark harness.
//!
//! Two execution modes generate the same greedy token stream from the
//! same model: `recurrent` advances an O(1) state per token, while
//! `ar_baseline` re-runs the parallel forward over the whole growing
//! prefix for every token, the per-token cost profile of a conventional
//! autoregressive transformer. Wall times over a sweep of sequence
//! lengths feed least-squares scaling fits.

use crate::decoder::{forward_parallel, step_recurrent, DecoderConfig, LayerStates, ModelWeights};
use crate::error::{Error, Result};
use crate::tensor::Scalar;
use std::time::{Duration, Instant};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BenchMode {
    Recurrent,
    ArBaseline,
}

impl BenchMode {
    pub fn name(self) -> &'static str {
        match self {
            BenchMode::Recurrent => "recurrent",
            BenchMode::ArBaseline => "ar_baseline",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "recurrent" => Ok(BenchMode::Recurrent),
            "ar_baseline" => Ok(BenchMode::ArBaseline),
            other => Err(Error::Input(format!(
                "unknown bench mode \"{other}\" (expected recurrent or ar_baseline)"
            ))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BenchScenario {
    pub modes: Vec<BenchMode>,
    /// Sequence lengths to sweep, strictly ascending.
    pub lengths: Vec<usize>,
    /// Timed repetitions per (mode, length) point.
    pub repetitions: usize,
    /// Untimed runs before the repetitions.
    pub warmup: usize,
    /// Tokens per frame, for the per-frame readout.
    pub frame_tokens: usize,
}

impl Default for BenchScenario {
    fn default() -> Self {
        BenchScenario {
            modes: vec![BenchMode::Recurrent, BenchMode::ArBaseline],
            lengths: vec![64, 128, 256, 512, 1024],
            repetitions: 3,
            warmup: 1,
            frame_tokens: 64,
        }
    }
}

impl BenchScenario {
    fn validate(&self, config: &DecoderConfig) -> Result<()> {
        if self.modes.is_empty() || self.lengths.is_empty() {
            return Err(Error::Config("bench scenario sweeps nothing".into()));
        }
        if self.repetitions < 3 {
            return Err(Error::Config(format!(
                "{} repetitions are too few to report min/mean/max, need at least 3",
                self.repetitions
            )));
        }
        if self.frame_tokens == 0 {
            return Err(Error::Config("frame size must be positive".into()));
        }
        for pair in self.lengths.windows(2) {
            if pair[1] <= pair[0] {
                return Err(Error::Config(format!(
                    "lengths must ascend strictly, got {} after {}",
                    pair[1], pair[0]
                )));
            }
        }
        if self.lengths[0] == 0 {
            return Err(Error::Config("sequence lengths must be positive".into()));
        }
        let longest = *self.lengths.last().expect("nonempty");
        if longest > config.max_sequence_length {
            return Err(Error::Capacity(format!(
                "length {longest} exceeds the model cap of {}",
                config.max_sequence_length
            )));
        }
        Ok(())
    }
}

/// Timing summary for one (mode, length) point.
#[derive(Debug, Clone)]
pub struct BenchRecord {
    pub mode: BenchMode,
    pub length: usize,
    pub mean_s_per_token: f64,
    pub min_s_per_token: f64,
    pub max_s_per_token: f64,
    pub tokens_per_s: f64,
    pub mean_s_per_frame: f64,
    pub mean_total_s: f64,
}

fn argmax<T: Scalar>(row: &[T]) -> u32 {
    let mut best = 0usize;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best as u32
}

/// Greedy-generates `length` tokens with the O(1)-per-token recurrence.
pub fn generate_stream_recurrent<T: Scalar>(
    weights: &ModelWeights<T>,
    config: &DecoderConfig,
    start_token: u32,
    length: usize,
) -> Result<(Vec<u32>, Duration)> {
    let mut states = LayerStates::fresh(config);
    let mut token = start_token;
    let mut stream = Vec::with_capacity(length);
    let started = Instant::now();
    for _ in 0..length {
        let logits = step_recurrent(token, &mut states, weights, config, true)?
            .expect("logits were requested");
        token = argmax(&logits);
        stream.push(token);
    }
    Ok((stream, started.elapsed()))
}

/// Greedy-generates `length` tokens by re-running the parallel forward
/// over the whole prefix for each one, the cost profile of a standard
/// autoregressive transformer without a constant-size state.
pub fn generate_stream_ar_baseline<T: Scalar>(
    weights: &ModelWeights<T>,
    config: &DecoderConfig,
    start_token: u32,
    length: usize,
) -> Result<(Vec<u32>, Duration)> {
    let mut tokens = Vec::with_capacity(length + 1);
    tokens.push(start_token);
    let started = Instant::now();
    for _ in 0..length {
        let logits = forward_parallel(&tokens, weights, config)?;
        let width = config.vocab_size;
        let last = &logits.data()[(tokens.len() - 1) * width..];
        tokens.push(argmax(last));
    }
    Ok((tokens[1..].to_vec(), started.elapsed()))
}

fn run_once<T: Scalar>(
    mode: BenchMode,
    weights: &ModelWeights<T>,
    config: &DecoderConfig,
    length: usize,
) -> Result<Duration> {
    let (_, elapsed) = match mode {
        BenchMode::Recurrent => generate_stream_recurrent(weights, config, 0, length)?,
        BenchMode::ArBaseline => generate_stream_ar_baseline(weights, config, 0, length)?,
    };
    Ok(elapsed)
}

/// Sweeps every (mode, length) pair: warmup runs discarded, then
/// `repetitions` timed runs summarized per record.
pub fn run_bench<T: Scalar>(
    scenario: &BenchScenario,
    weights: &ModelWeights<T>,
    config: &DecoderConfig,
) -> Result<Vec<BenchRecord>> {
    scenario.validate(config)?;
    let mut records = Vec::with_capacity(scenario.modes.len() * scenario.lengths.len());
    for &mode in &scenario.modes {
        for &length in &scenario.lengths {
            for _ in 0..scenario.warmup {
                run_once(mode, weights, config, length)?;
            }
            let mut totals = Vec::with_capacity(scenario.repetitions);
            for _ in 0..scenario.repetitions {
                totals.push(run_once(mode, weights, config, length)?.as_secs_f64());
            }
            let mean_total = totals.iter().sum::<f64>() / totals.len() as f64;
            let min_total = totals.iter().cloned().fold(f64::INFINITY, f64::min);
            let max_total = totals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let per_token = mean_total / length as f64;
            records.push(BenchRecord {
                mode,
                length,
                mean_s_per_token: per_token,
                min_s_per_token: min_total / length as f64,
                max_s_per_token: max_total / length as f64,
                tokens_per_s: length as f64 / mean_total,
                mean_s_per_frame: per_token * scenario.frame_tokens as f64,
                mean_total_s: mean_total,
            });
        }
    }
    Ok(records)
}

pub const CSV_HEADER: &str = "mode,L,mean_s_per_token,min,max,tokens_per_s";

/// Renders records as CSV under the stable schema.
pub fn records_to_csv(records: &[BenchRecord]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.mode.name(),
            r.length,
            r.mean_s_per_token,
            r.min_s_per_token,
            r.max_s_per_token,
            r.tokens_per_s
        ));
    }
    out
}

/// Least-squares polynomial fit.
#[derive(Debug, Clone)]
pub struct PolyFit {
    /// Coefficients from constant term upward.
    pub coefficients: Vec<f64>,
    pub r_squared: f64,
}

impl PolyFit {
    pub fn predict(&self, x: f64) -> f64 {
        self.coefficients
            .iter()
            .rev()
            .fold(0.0, |acc, &c| acc * x + c)
    }
}

/// Fits `y = Σ c_k x^k` up to the given degree via normal equations.
pub fn fit_polynomial(xs: &[f64], ys: &[f64], degree: usize) -> Result<PolyFit> {
    if xs.len() != ys.len() {
        return Err(Error::Input(format!(
            "{} x values against {} y values",
            xs.len(),
            ys.len()
        )));
    }
    let terms = degree + 1;
    if xs.len() < terms {
        return Err(Error::Config(format!(
            "degree-{degree} fit needs at least {terms} points, got {}",
            xs.len()
        )));
    }
    let mut matrix = vec![vec![0.0; terms]; terms];
    let mut rhs = vec![0.0; terms];
    for (&x, &y) in xs.iter().zip(ys) {
        let mut powers = vec![1.0; 2 * terms - 1];
        for k in 1..powers.len() {
            powers[k] = powers[k - 1] * x;
        }
        for i in 0..terms {
            for (j, row) in matrix[i].iter_mut().enumerate() {
                *row += powers[i + j];
            }
            rhs[i] += y * powers[i];
        }
    }
    let coefficients = solve_dense(matrix, rhs)?;

    let mean_y: f64 = ys.iter().sum::<f64>() / ys.len() as f64;
    let mut ss_res = 0.0;
    let mut ss_tot = 0.0;
    let fit = PolyFit { coefficients, r_squared: 0.0 };
    for (&x, &y) in xs.iter().zip(ys) {
        let e = y - fit.predict(x);
        ss_res += e * e;
        ss_tot += (y - mean_y) * (y - mean_y);
    }
    let r_squared = if ss_tot > 0.0 {
        1.0 - ss_res / ss_tot
    } else if ss_res.abs() < 1e-30 {
        1.0
    } else {
        0.0
    };
    Ok(PolyFit { r_squared, ..fit })
}

fn solve_dense(mut m: Vec<Vec<f64>>, mut b: Vec<f64>) -> Result<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&a, &b| m[a][col].abs().partial_cmp(&m[b][col].abs()).unwrap())
            .expect("nonempty range");
        if m[pivot][col].abs() < 1e-300 {
            return Err(Error::Numeric("normal equations are singular".into()));
        }
        m.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..n {
            let factor = m[row][col] / m[col][col];
            for k in col..n {
                m[row][k] -= factor * m[col][k];
            }
            b[row] -= factor * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let mut acc = b[row];
        for k in row + 1..n {
            acc -= m[row][k] * x[k];
        }
        x[row] = acc / m[row][row];
    }
    Ok(x)
}

/// R² of a degree-`degree` fit of total time against sequence length,
/// with lengths normalized to the largest one for conditioning.
pub fn scaling_r_squared(lengths: &[usize], totals: &[f64], degree: usize) -> Result<f64> {
    if lengths.is_empty() {
        return Err(Error::Input("no data points to fit".into()));
    }
    let scale = *lengths.iter().max().expect("nonempty") as f64;
    let xs: Vec<f64> = lengths.iter().map(|&l| l as f64 / scale).collect();
    Ok(fit_polynomial(&xs, totals, degree)?.r_squared)
}
