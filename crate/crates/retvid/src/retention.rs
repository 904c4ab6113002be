//! The retention sequence mixer in its two equivalent forms.
//!
//! Parallel form, used for training over a whole sequence at once:
//!
//! ```text
//! Retention(X) = (Q Kᵀ ⊙ D) V        D[n][m] = γ^(n−m) for n ≥ m, else 0
//! ```
//!
//! Recurrent form, used for generation one token at a time:
//!
//! ```text
//! S_n = γ S_{n−1} + kₙᵀ vₙ           yₙ = qₙ S_n
//! ```
//!
//! Queries and keys carry a position-dependent pair rotation; keys use the
//! conjugate (negated-angle) rotation. Both forms produce identical outputs
//! up to floating-point roundoff, which the tests pin down numerically. No
//! normalization is applied to the retention scores or outputs; the score
//! matrix is used as-is.

use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::tensor::tape::{Tape, Var};
use crate::tensor::{kernels, Scalar, Tensor};

/// Head geometry and decay/rotation schedules.
#[derive(Debug, Clone, PartialEq)]
pub struct RetentionConfig {
    pub d_model: usize,
    pub heads: usize,
    pub head_dim: usize,
    /// Per-head decay constant, strictly inside (0, 1).
    pub gammas: Vec<f64>,
    /// Rotation angles, one per element pair of a head. Shared by all heads.
    pub thetas: Vec<f64>,
}

impl RetentionConfig {
    /// Default schedules: γ_h = 1 − 2^(−5−h) so heads decay at different
    /// ranges, θ_j = 10000^(−2j/head_dim) as in rotary embeddings.
    pub fn new(d_model: usize, heads: usize) -> Result<Self> {
        let gammas = (0..heads).map(|h| 1.0 - 2f64.powi(-5 - h as i32)).collect();
        Self::with_gammas(d_model, heads, gammas)
    }

    /// Same geometry but every head shares one decay constant.
    pub fn with_single_gamma(d_model: usize, heads: usize, gamma: f64) -> Result<Self> {
        Self::with_gammas(d_model, heads, vec![gamma; heads])
    }

    pub fn with_gammas(d_model: usize, heads: usize, gammas: Vec<f64>) -> Result<Self> {
        if heads == 0 || d_model == 0 {
            return Err(Error::Config(format!(
                "d_model ({d_model}) and heads ({heads}) must be positive"
            )));
        }
        if d_model % heads != 0 {
            return Err(Error::Config(format!(
                "d_model {d_model} not divisible by {heads} heads"
            )));
        }
        let head_dim = d_model / heads;
        if head_dim % 2 != 0 {
            return Err(Error::Config(format!(
                "head_dim {head_dim} must be even for pair rotation"
            )));
        }
        if gammas.len() != heads {
            return Err(Error::Config(format!(
                "{} gammas for {heads} heads",
                gammas.len()
            )));
        }
        for &g in &gammas {
            if !(g > 0.0 && g < 1.0) {
                return Err(Error::Config(format!("gamma {g} outside (0, 1)")));
            }
        }
        let thetas = (0..head_dim / 2)
            .map(|j| 10000f64.powf(-2.0 * j as f64 / head_dim as f64))
            .collect();
        Ok(RetentionConfig { d_model, heads, head_dim, gammas, thetas })
    }
}

/// Lower-triangular causal decay matrix for one head.
///
/// Powers of γ are accumulated by repeated multiplication rather than
/// calling `pow` per entry; for an L×L matrix that turns L² transcendental
/// calls into L multiplies, which matters when the quadratic baseline
/// rebuilds this matrix for every prefix length.
pub fn decay_matrix<T: Scalar>(len: usize, gamma: f64) -> Result<Tensor<T>> {
    if len == 0 {
        return Err(Error::Config("decay matrix length must be at least 1".into()));
    }
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(Error::Config(format!("gamma {gamma} outside (0, 1)")));
    }
    let mut powers = vec![T::zero(); len];
    let mut acc = 1.0f64;
    for p in powers.iter_mut() {
        *p = T::from_f64(acc);
        acc *= gamma;
    }
    let mut out = Tensor::zeros(vec![len, len]);
    for n in 0..len {
        let row = &mut out.data_mut()[n * len..(n + 1) * len];
        for (m, r) in row.iter_mut().enumerate().take(n + 1) {
            *r = powers[n - m];
        }
    }
    Ok(out)
}

/// Position-dependent pair rotation of one head-sized vector.
pub fn rotate<T: Scalar>(x: &[T], n: usize, thetas: &[f64], conjugate: bool) -> Result<Vec<T>> {
    if x.len() != thetas.len() * 2 {
        return Err(Error::Config(format!(
            "rotate needs an even input of length {}, got {}",
            thetas.len() * 2,
            x.len()
        )));
    }
    let mut out = vec![T::zero(); x.len()];
    kernels::rotate_pairs(x, n, thetas, conjugate, &mut out);
    Ok(out)
}

/// Per-head projection weights.
#[derive(Debug, Clone)]
pub struct HeadWeights<T> {
    pub w_q: Tensor<T>,
    pub w_k: Tensor<T>,
    pub w_v: Tensor<T>,
}

/// All weights of one retention block.
#[derive(Debug, Clone)]
pub struct RetentionWeights<T> {
    pub heads: Vec<HeadWeights<T>>,
    pub w_o: Tensor<T>,
}

impl<T: Scalar> RetentionWeights<T> {
    pub fn random(cfg: &RetentionConfig, std: f64, rng: &mut SplitMix64) -> Self {
        let heads = (0..cfg.heads)
            .map(|_| HeadWeights {
                w_q: Tensor::randn(vec![cfg.d_model, cfg.head_dim], std, rng),
                w_k: Tensor::randn(vec![cfg.d_model, cfg.head_dim], std, rng),
                w_v: Tensor::randn(vec![cfg.d_model, cfg.head_dim], std, rng),
            })
            .collect();
        RetentionWeights {
            heads,
            w_o: Tensor::randn(vec![cfg.d_model, cfg.d_model], std, rng),
        }
    }
}

/// Tape handles for one retention block's weights.
#[derive(Debug, Clone)]
pub struct RetentionVars {
    pub heads: Vec<(Var, Var, Var)>,
    pub w_o: Var,
}

/// Registers retention weights on a tape, as trainable params or constants.
pub fn register_weights<T: Scalar>(
    tape: &mut Tape<T>,
    w: &RetentionWeights<T>,
    trainable: bool,
) -> RetentionVars {
    let mut reg = |t: &Tensor<T>| if trainable { tape.param(t.clone()) } else { tape.constant(t.clone()) };
    let heads = w
        .heads
        .iter()
        .map(|h| {
            let q = reg(&h.w_q);
            let k = reg(&h.w_k);
            let v = reg(&h.w_v);
            (q, k, v)
        })
        .collect();
    let w_o = reg(&w.w_o);
    RetentionVars { heads, w_o }
}

/// Builds the per-head decay matrices for a length-L parallel pass as tape
/// constants, so a multi-layer model pays the construction cost once.
pub fn decay_vars<T: Scalar>(
    tape: &mut Tape<T>,
    cfg: &RetentionConfig,
    len: usize,
) -> Result<Vec<Var>> {
    cfg.gammas
        .iter()
        .map(|&g| Ok(tape.constant(decay_matrix(len, g)?)))
        .collect()
}

/// Parallel-form retention over a full sequence, recorded on the tape.
///
/// `decay` must hold one decay matrix per head for the sequence length of
/// `x` (see [`decay_vars`]). `start_pos` is the absolute position of row 0.
pub fn retention_parallel<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    vars: &RetentionVars,
    cfg: &RetentionConfig,
    decay: &[Var],
    start_pos: usize,
) -> Result<Var> {
    if decay.len() != cfg.heads {
        return Err(Error::Contract(format!(
            "{} decay matrices for {} heads",
            decay.len(),
            cfg.heads
        )));
    }
    let mut head_outputs = Vec::with_capacity(cfg.heads);
    for (h, &(w_q, w_k, w_v)) in vars.heads.iter().enumerate() {
        let q_proj = tape.matmul(x, w_q)?;
        let q = tape.rotate_pairs(q_proj, &cfg.thetas, start_pos, false)?;
        let k_proj = tape.matmul(x, w_k)?;
        let k = tape.rotate_pairs(k_proj, &cfg.thetas, start_pos, true)?;
        let v = tape.matmul(x, w_v)?;
        let scores = tape.matmul_nt(q, k)?;
        let decayed = tape.mul(scores, decay[h])?;
        head_outputs.push(tape.matmul(decayed, v)?);
    }
    let merged = tape.concat_cols(&head_outputs)?;
    tape.matmul(merged, vars.w_o)
}

/// One-shot parallel retention on plain tensors (no gradients).
pub fn retention_parallel_tensor<T: Scalar>(
    x: &Tensor<T>,
    w: &RetentionWeights<T>,
    cfg: &RetentionConfig,
) -> Result<Tensor<T>> {
    let len = x.dims2("retention")?.0;
    let mut tape = Tape::new(false);
    let xv = tape.constant(x.clone());
    let vars = register_weights(&mut tape, w, false);
    let decay = decay_vars(&mut tape, cfg, len)?;
    let out = retention_parallel(&mut tape, xv, &vars, cfg, &decay, 0)?;
    Ok(tape.value(out).clone())
}

/// Recurrent carrier for one retention block: per-head state matrices and
/// the absolute position of the next token. Its size never changes.
#[derive(Debug, Clone)]
pub struct RetentionState<T> {
    s: Vec<Vec<T>>,
    position: usize,
}

impl<T: Scalar> RetentionState<T> {
    pub fn fresh(cfg: &RetentionConfig) -> Self {
        RetentionState {
            s: vec![vec![T::zero(); cfg.head_dim * cfg.head_dim]; cfg.heads],
            position: 0,
        }
    }

    pub fn position(&self) -> usize {
        self.position
    }

    /// Raw per-head state, exposed for tests that pin state dynamics.
    pub fn head_state(&self, h: usize) -> &[T] {
        &self.s[h]
    }
}

/// Advances the recurrent form by one token and returns the block output.
/// Work done here is independent of the current position.
pub fn retention_recurrent_step<T: Scalar>(
    x: &[T],
    state: &mut RetentionState<T>,
    w: &RetentionWeights<T>,
    cfg: &RetentionConfig,
) -> Result<Vec<T>> {
    if x.len() != cfg.d_model {
        return Err(Error::Shape {
            op: "retention_recurrent_step",
            lhs: vec![x.len()],
            rhs: vec![cfg.d_model],
        });
    }
    if state.s.len() != cfg.heads {
        return Err(Error::Contract(format!(
            "state has {} heads, config has {}",
            state.s.len(),
            cfg.heads
        )));
    }
    let hd = cfg.head_dim;
    let n = state.position;
    let mut merged = vec![T::zero(); cfg.d_model];
    let mut proj = vec![T::zero(); hd];
    for (h, head) in w.heads.iter().enumerate() {
        kernels::matmul(x, head.w_q.data(), 1, cfg.d_model, hd, &mut proj);
        let q = rotate(&proj, n, &cfg.thetas, false)?;
        kernels::matmul(x, head.w_k.data(), 1, cfg.d_model, hd, &mut proj);
        let k = rotate(&proj, n, &cfg.thetas, true)?;
        let mut v = vec![T::zero(); hd];
        kernels::matmul(x, head.w_v.data(), 1, cfg.d_model, hd, &mut v);
        kernels::decay_outer_acc(T::from_f64(cfg.gammas[h]), &k, &v, &mut state.s[h]);
        kernels::matmul(&q, &state.s[h], 1, hd, hd, &mut merged[h * hd..(h + 1) * hd]);
    }
    let mut out = vec![T::zero(); cfg.d_model];
    kernels::matmul(&merged, w.w_o.data(), 1, cfg.d_model, cfg.d_model, &mut out);
    state.position += 1;
    Ok(out)
}
