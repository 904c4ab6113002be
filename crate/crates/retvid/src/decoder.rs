//! Decoder-only model: embeddings, N pre-norm retention blocks with GLU
//! feed-forwards, a final RMS normalization, and an untied output head.
//!
//! Each block is `h ← h + Retention(RMS(h))` followed by
//! `h ← h + Down(GLU(RMS(h)))`. The stack runs in two modes backed by the
//! same weights: a parallel whole-sequence forward recorded on an autodiff
//! tape (training) and a recurrent per-token step over [`LayerStates`]
//! whose cost does not depend on the current position (generation).

use crate::error::{Error, Result};
use crate::retention::{
    self, RetentionConfig, RetentionState, RetentionVars, RetentionWeights,
};
use crate::rng::SplitMix64;
use crate::tensor::tape::{Tape, Var};
use crate::tensor::{kernels, Scalar, Tensor};

pub const RMS_EPS: f64 = 1e-6;
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderConfig {
    pub layers: usize,
    pub vocab_size: usize,
    pub d_model: usize,
    pub ffn_hidden: usize,
    pub retention: RetentionConfig,
    pub max_sequence_length: usize,
}

impl DecoderConfig {
    pub fn new(
        layers: usize,
        vocab_size: usize,
        d_model: usize,
        heads: usize,
        ffn_hidden: usize,
        max_sequence_length: usize,
    ) -> Result<Self> {
        let retention = RetentionConfig::new(d_model, heads)?;
        Self::with_retention(layers, vocab_size, ffn_hidden, max_sequence_length, retention)
    }

    pub fn with_retention(
        layers: usize,
        vocab_size: usize,
        ffn_hidden: usize,
        max_sequence_length: usize,
        retention: RetentionConfig,
    ) -> Result<Self> {
        if layers == 0 || vocab_size < 2 || ffn_hidden == 0 || max_sequence_length == 0 {
            return Err(Error::Config(format!(
                "layers {layers}, vocab {vocab_size}, ffn {ffn_hidden}, max_len \
                 {max_sequence_length} must all be positive (vocab at least 2)"
            )));
        }
        Ok(DecoderConfig {
            layers,
            vocab_size,
            d_model: retention.d_model,
            ffn_hidden,
            retention,
            max_sequence_length,
        })
    }

    pub fn head_count(&self) -> usize {
        self.retention.heads
    }
}

#[derive(Debug, Clone)]
pub struct LayerWeights<T> {
    pub retention: RetentionWeights<T>,
    pub rms1_gain: Tensor<T>,
    pub rms2_gain: Tensor<T>,
    pub w_value: Tensor<T>,
    pub w_gate: Tensor<T>,
    pub w_down: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct ModelWeights<T> {
    pub embedding: Tensor<T>,
    pub layers: Vec<LayerWeights<T>>,
    pub final_gain: Tensor<T>,
    pub head: Tensor<T>,
}

impl<T: Scalar> ModelWeights<T> {
    /// Projections drawn from normal(0, 0.02), RMS gains set to one.
    pub fn init(cfg: &DecoderConfig, rng: &mut SplitMix64) -> Self {
        let ones = |d: usize| Tensor::new(vec![d], vec![T::one(); d]).unwrap();
        let layers = (0..cfg.layers)
            .map(|_| LayerWeights {
                retention: RetentionWeights::random(&cfg.retention, INIT_STD, rng),
                rms1_gain: ones(cfg.d_model),
                rms2_gain: ones(cfg.d_model),
                w_value: Tensor::randn(vec![cfg.d_model, cfg.ffn_hidden], INIT_STD, rng),
                w_gate: Tensor::randn(vec![cfg.d_model, cfg.ffn_hidden], INIT_STD, rng),
                w_down: Tensor::randn(vec![cfg.ffn_hidden, cfg.d_model], INIT_STD, rng),
            })
            .collect();
        ModelWeights {
            embedding: Tensor::randn(vec![cfg.vocab_size, cfg.d_model], INIT_STD, rng),
            layers,
            final_gain: ones(cfg.d_model),
            head: Tensor::randn(vec![cfg.d_model, cfg.vocab_size], INIT_STD, rng),
        }
    }

    /// All-zero weights in the right shapes; used as a fill target when
    /// deserializing checkpoints.
    pub fn zeros(cfg: &DecoderConfig) -> Self {
        let r = &cfg.retention;
        let layers = (0..cfg.layers)
            .map(|_| LayerWeights {
                retention: RetentionWeights {
                    heads: (0..r.heads)
                        .map(|_| retention::HeadWeights {
                            w_q: Tensor::zeros(vec![r.d_model, r.head_dim]),
                            w_k: Tensor::zeros(vec![r.d_model, r.head_dim]),
                            w_v: Tensor::zeros(vec![r.d_model, r.head_dim]),
                        })
                        .collect(),
                    w_o: Tensor::zeros(vec![r.d_model, r.d_model]),
                },
                rms1_gain: Tensor::zeros(vec![cfg.d_model]),
                rms2_gain: Tensor::zeros(vec![cfg.d_model]),
                w_value: Tensor::zeros(vec![cfg.d_model, cfg.ffn_hidden]),
                w_gate: Tensor::zeros(vec![cfg.d_model, cfg.ffn_hidden]),
                w_down: Tensor::zeros(vec![cfg.ffn_hidden, cfg.d_model]),
            })
            .collect();
        ModelWeights {
            embedding: Tensor::zeros(vec![cfg.vocab_size, cfg.d_model]),
            layers,
            final_gain: Tensor::zeros(vec![cfg.d_model]),
            head: Tensor::zeros(vec![cfg.d_model, cfg.vocab_size]),
        }
    }

    /// Visits every weight tensor in the canonical order shared by the
    /// optimizer and the checkpoint format: embedding; per layer: per head
    /// (w_q, w_k, w_v), then w_o, rms1, rms2, w_value, w_gate, w_down;
    /// final gain; output head.
    pub fn visit<'a>(&'a self, f: &mut impl FnMut(&'a Tensor<T>)) {
        f(&self.embedding);
        for layer in &self.layers {
            for head in &layer.retention.heads {
                f(&head.w_q);
                f(&head.w_k);
                f(&head.w_v);
            }
            f(&layer.retention.w_o);
            f(&layer.rms1_gain);
            f(&layer.rms2_gain);
            f(&layer.w_value);
            f(&layer.w_gate);
            f(&layer.w_down);
        }
        f(&self.final_gain);
        f(&self.head);
    }

    /// Mutable counterpart of [`visit`](Self::visit), same order.
    pub fn visit_mut(&mut self, f: &mut impl FnMut(&mut Tensor<T>)) {
        f(&mut self.embedding);
        for layer in &mut self.layers {
            for head in &mut layer.retention.heads {
                f(&mut head.w_q);
                f(&mut head.w_k);
                f(&mut head.w_v);
            }
            f(&mut layer.retention.w_o);
            f(&mut layer.rms1_gain);
            f(&mut layer.rms2_gain);
            f(&mut layer.w_value);
            f(&mut layer.w_gate);
            f(&mut layer.w_down);
        }
        f(&mut self.final_gain);
        f(&mut self.head);
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |t| n += t.numel());
        n
    }

    pub fn all_finite(&self) -> bool {
        let mut ok = true;
        self.visit(&mut |t| ok &= t.all_finite());
        ok
    }
}

/// Tape handles for one layer's weights.
#[derive(Debug, Clone)]
pub struct LayerVars {
    pub retention: RetentionVars,
    pub rms1: Var,
    pub rms2: Var,
    pub w_value: Var,
    pub w_gate: Var,
    pub w_down: Var,
}

/// Tape handles for the whole model, in registration order.
#[derive(Debug, Clone)]
pub struct ModelVars {
    pub embedding: Var,
    pub layers: Vec<LayerVars>,
    pub final_gain: Var,
    pub head: Var,
}

impl ModelVars {
    /// Flattens the handles in the canonical weight order.
    pub fn ordered(&self) -> Vec<Var> {
        let mut out = vec![self.embedding];
        for layer in &self.layers {
            for &(q, k, v) in &layer.retention.heads {
                out.extend([q, k, v]);
            }
            out.extend([layer.retention.w_o, layer.rms1, layer.rms2]);
            out.extend([layer.w_value, layer.w_gate, layer.w_down]);
        }
        out.push(self.final_gain);
        out.push(self.head);
        out
    }
}

/// Registers all model weights on a tape.
pub fn register_model<T: Scalar>(
    tape: &mut Tape<T>,
    w: &ModelWeights<T>,
    trainable: bool,
) -> ModelVars {
    let reg =
        |tape: &mut Tape<T>, t: &Tensor<T>| if trainable { tape.param(t.clone()) } else { tape.constant(t.clone()) };
    let embedding = reg(tape, &w.embedding);
    let layers = w
        .layers
        .iter()
        .map(|l| LayerVars {
            retention: retention::register_weights(tape, &l.retention, trainable),
            rms1: reg(tape, &l.rms1_gain),
            rms2: reg(tape, &l.rms2_gain),
            w_value: reg(tape, &l.w_value),
            w_gate: reg(tape, &l.w_gate),
            w_down: reg(tape, &l.w_down),
        })
        .collect();
    let final_gain = reg(tape, &w.final_gain);
    let head = reg(tape, &w.head);
    ModelVars { embedding, layers, final_gain, head }
}

fn check_tokens(tokens: &[u32], cfg: &DecoderConfig) -> Result<()> {
    if tokens.is_empty() {
        return Err(Error::Input("empty token sequence".into()));
    }
    if tokens.len() > cfg.max_sequence_length {
        return Err(Error::Capacity(format!(
            "sequence length {} exceeds max_sequence_length {}",
            tokens.len(),
            cfg.max_sequence_length
        )));
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
        return Err(Error::Input(format!(
            "token {bad} out of vocabulary (size {})",
            cfg.vocab_size
        )));
    }
    Ok(())
}

/// Whole-sequence forward recorded on `tape`; returns the L×V logits node.
pub fn forward_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    tokens: &[u32],
    vars: &ModelVars,
    cfg: &DecoderConfig,
) -> Result<Var> {
    check_tokens(tokens, cfg)?;
    let eps = T::from_f64(RMS_EPS);
    let decay = retention::decay_vars(tape, &cfg.retention, tokens.len())?;
    let mut h = tape.embedding(vars.embedding, tokens)?;
    for layer in &vars.layers {
        let x = tape.rms_norm(h, layer.rms1, eps)?;
        let r = retention::retention_parallel(tape, x, &layer.retention, &cfg.retention, &decay, 0)?;
        h = tape.add(h, r)?;
        let x2 = tape.rms_norm(h, layer.rms2, eps)?;
        let g = tape.glu(x2, layer.w_value, layer.w_gate)?;
        let f = tape.matmul(g, layer.w_down)?;
        h = tape.add(h, f)?;
    }
    let fin = tape.rms_norm(h, vars.final_gain, eps)?;
    tape.matmul(fin, vars.head)
}

/// One-shot parallel forward without gradients.
pub fn forward_parallel<T: Scalar>(
    tokens: &[u32],
    w: &ModelWeights<T>,
    cfg: &DecoderConfig,
) -> Result<Tensor<T>> {
    let mut tape = Tape::new(false);
    let vars = register_model(&mut tape, w, false);
    let logits = forward_on_tape(&mut tape, tokens, &vars, cfg)?;
    Ok(tape.value(logits).clone())
}

/// One retention state per layer; the complete recurrent-mode carrier.
#[derive(Debug, Clone)]
pub struct LayerStates<T> {
    states: Vec<RetentionState<T>>,
}

impl<T: Scalar> LayerStates<T> {
    pub fn fresh(cfg: &DecoderConfig) -> Self {
        LayerStates {
            states: (0..cfg.layers).map(|_| RetentionState::fresh(&cfg.retention)).collect(),
        }
    }

    /// Position of the next token; identical across layers by construction.
    pub fn position(&self) -> usize {
        self.states.first().map_or(0, |s| s.position())
    }
}

fn rms_vec<T: Scalar>(x: &[T], gain: &Tensor<T>, out: &mut [T]) {
    kernels::rms_norm_row(x, gain.data(), T::from_f64(RMS_EPS), out);
}

/// Advances every layer state by one token. Returns logits only when
/// `want_logits` is set; skipping them skips the final normalization and
/// the vocabulary-sized head projection, the dominant per-token cost when
/// the vocabulary is large.
pub fn step_recurrent<T: Scalar>(
    token: u32,
    states: &mut LayerStates<T>,
    w: &ModelWeights<T>,
    cfg: &DecoderConfig,
    want_logits: bool,
) -> Result<Option<Vec<T>>> {
    if token as usize >= cfg.vocab_size {
        return Err(Error::Input(format!(
            "token {token} out of vocabulary (size {})",
            cfg.vocab_size
        )));
    }
    if states.position() >= cfg.max_sequence_length {
        return Err(Error::Capacity(format!(
            "position {} exceeds max_sequence_length {}",
            states.position(),
            cfg.max_sequence_length
        )));
    }
    let d = cfg.d_model;
    let mut h = vec![T::zero(); d];
    h.copy_from_slice(&w.embedding.data()[token as usize * d..(token as usize + 1) * d]);

    let mut x = vec![T::zero(); d];
    let mut value = vec![T::zero(); cfg.ffn_hidden];
    let mut gate = vec![T::zero(); cfg.ffn_hidden];
    let mut down = vec![T::zero(); d];
    for (layer, state) in w.layers.iter().zip(&mut states.states) {
        rms_vec(&h, &layer.rms1_gain, &mut x);
        let r = retention::retention_recurrent_step(&x, state, &layer.retention, &cfg.retention)?;
        for (hv, rv) in h.iter_mut().zip(&r) {
            *hv = *hv + *rv;
        }
        rms_vec(&h, &layer.rms2_gain, &mut x);
        kernels::matmul(&x, layer.w_value.data(), 1, d, cfg.ffn_hidden, &mut value);
        kernels::matmul(&x, layer.w_gate.data(), 1, d, cfg.ffn_hidden, &mut gate);
        for (v, &g) in value.iter_mut().zip(&gate) {
            *v = *v * kernels::sigmoid(g);
        }
        kernels::matmul(&value, layer.w_down.data(), 1, cfg.ffn_hidden, d, &mut down);
        for (hv, &dv) in h.iter_mut().zip(&down) {
            *hv = *hv + dv;
        }
    }
    if !want_logits {
        return Ok(None);
    }
    rms_vec(&h, &w.final_gain, &mut x);
    let mut logits = vec![T::zero(); cfg.vocab_size];
    kernels::matmul(&x, w.head.data(), 1, d, cfg.vocab_size, &mut logits);
    Ok(Some(logits))
}
