//! Recurrent-mode sequence generation.
//!
//! [`GenerationSession`] wraps the per-layer retention states and steps
//! the decoder one token at a time in O(1) per step. Logits are only
//! materialized on request: feeding a token whose successor is given by
//! the sequencer (text, serial number, inherited vision token) skips the
//! final norm and vocabulary projection entirely, which is where most of
//! the per-token work lives for small models with a wide vocabulary.

use crate::decoder::{DecoderConfig, LayerStates, ModelWeights};
use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::sequencer::{build_keyframe_prompt, VocabLayout};
use crate::tensor::Scalar;
use crate::tokenizer::FrameGrid;

/// Picks the next vision token from a logits row.
#[derive(Debug, Clone)]
pub enum Sampler {
    /// Highest logit wins, ties to the lowest token index.
    Greedy,
    /// Draws from the softmax distribution with a private seeded stream.
    Seeded(SplitMix64),
}

impl Sampler {
    pub fn seeded(seed: u64) -> Self {
        Sampler::Seeded(SplitMix64::new(seed))
    }

    /// Chooses a token from `range`, ignoring logits outside it.
    pub fn pick<T: Scalar>(&mut self, logits: &[T], range: std::ops::Range<u32>) -> Result<u32> {
        let lo = range.start as usize;
        let hi = range.end as usize;
        if lo >= hi || hi > logits.len() {
            return Err(Error::Input(format!(
                "sampling range {lo}..{hi} does not fit logits of length {}",
                logits.len()
            )));
        }
        let window = &logits[lo..hi];
        match self {
            Sampler::Greedy => {
                let mut best = 0usize;
                for (i, &v) in window.iter().enumerate() {
                    if v > window[best] {
                        best = i;
                    }
                }
                Ok((lo + best) as u32)
            }
            Sampler::Seeded(rng) => {
                let mut max = f64::NEG_INFINITY;
                for &v in window {
                    max = max.max(v.to_f64());
                }
                if !max.is_finite() {
                    return Err(Error::Numeric("logits are not finite".into()));
                }
                let weights: Vec<f64> =
                    window.iter().map(|&v| (v.to_f64() - max).exp()).collect();
                let total: f64 = weights.iter().sum();
                let mut target = rng.uniform() * total;
                let mut chosen = window.len() - 1;
                for (i, &w) in weights.iter().enumerate() {
                    if target < w {
                        chosen = i;
                        break;
                    }
                    target -= w;
                }
                Ok((lo + chosen) as u32)
            }
        }
    }
}

/// Incremental decoding state over a fixed model.
pub struct GenerationSession<'a, T: Scalar> {
    weights: &'a ModelWeights<T>,
    config: &'a DecoderConfig,
    states: LayerStates<T>,
}

impl<'a, T: Scalar> GenerationSession<'a, T> {
    pub fn new(weights: &'a ModelWeights<T>, config: &'a DecoderConfig) -> Self {
        GenerationSession { weights, config, states: LayerStates::fresh(config) }
    }

    pub fn position(&self) -> usize {
        self.states.position()
    }

    pub fn config(&self) -> &DecoderConfig {
        self.config
    }

    /// Advances the recurrence by one token. Logits for the next position
    /// are computed only when `want_logits` is set.
    pub fn step(&mut self, token: u32, want_logits: bool) -> Result<Option<Vec<T>>> {
        crate::decoder::step_recurrent(token, &mut self.states, self.weights, self.config, want_logits)
    }

    /// Feeds given tokens whose successors are also given.
    pub fn feed(&mut self, tokens: &[u32]) -> Result<()> {
        for &t in tokens {
            self.step(t, false)?;
        }
        Ok(())
    }

    /// Feeds given tokens and returns the logits after the last one.
    pub fn feed_for_logits(&mut self, tokens: &[u32]) -> Result<Vec<T>> {
        let (last, rest) = tokens
            .split_last()
            .ok_or_else(|| Error::Input("cannot take logits from an empty prompt".into()))?;
        self.feed(rest)?;
        let logits = self.step(*last, true)?;
        Ok(logits.expect("logits were requested"))
    }
}

/// Samples `count` vision tokens after feeding `prompt`. Each sampled
/// token is fed back into the session; logits are skipped after the last
/// one since whatever follows is given by the caller.
pub fn generate_frame_tokens<T: Scalar>(
    session: &mut GenerationSession<T>,
    prompt: &[u32],
    count: usize,
    layout: &VocabLayout,
    sampler: &mut Sampler,
) -> Result<Vec<u32>> {
    if count == 0 {
        return Err(Error::Input("cannot generate an empty frame".into()));
    }
    let mut logits = session.feed_for_logits(prompt)?;
    let mut tokens = Vec::with_capacity(count);
    for i in 0..count {
        let token = sampler.pick(&logits, layout.vision_range())?;
        tokens.push(token);
        let more = i + 1 < count;
        match session.step(token, more)? {
            Some(next) => logits = next,
            None => debug_assert!(!more),
        }
    }
    Ok(tokens)
}

/// Generates a clip of key frames in temporal order: each frame is
/// announced by a repeated `[text, SN(k)]` header and then sampled
/// token by token.
pub fn generate_clip<T: Scalar>(
    weights: &ModelWeights<T>,
    config: &DecoderConfig,
    text: &[u32],
    frame_count: usize,
    rows: usize,
    cols: usize,
    layout: &VocabLayout,
    sampler: &mut Sampler,
    include_soi: bool,
) -> Result<Vec<FrameGrid>> {
    if frame_count == 0 {
        return Err(Error::Input("clip needs at least one frame".into()));
    }
    if frame_count > layout.max_serial() {
        return Err(Error::Capacity(format!(
            "{frame_count} frames exceed the serial-number budget of {}",
            layout.max_serial()
        )));
    }
    if layout.vocab_size() != config.vocab_size {
        return Err(Error::Config(format!(
            "layout vocabulary {} does not match model vocabulary {}",
            layout.vocab_size(),
            config.vocab_size
        )));
    }
    let mut session = GenerationSession::new(weights, config);
    let mut frames = Vec::with_capacity(frame_count);
    for k in 1..=frame_count {
        let prompt = build_keyframe_prompt(text, k, layout, include_soi)?;
        let tokens =
            generate_frame_tokens(&mut session, &prompt, rows * cols, layout, sampler)?;
        let codes: Vec<u32> =
            tokens.iter().map(|&t| layout.vision_code(t)).collect::<Result<_>>()?;
        frames.push(FrameGrid::new(rows, cols, codes)?);
    }
    Ok(frames)
}
