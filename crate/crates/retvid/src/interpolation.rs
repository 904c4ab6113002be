//! Redundant-free frame interpolation.
//!
//! Token positions of an in-between frame are classified by comparing
//! the two enclosing key frames: positions whose tokens differ are
//! `Different`, a dilated ring around them is `Unstable`, and the rest
//! is `Stable`. A seeded fraction of the stable positions is promoted to
//! `Inheritable`: their tokens are copied from the key frame instead of
//! being generated, skipping the vocabulary projection and sampling at
//! those positions while still advancing the recurrent state.

use crate::decoder::{DecoderConfig, ModelWeights};
use crate::error::{Error, Result};
use crate::generate::{GenerationSession, Sampler};
use crate::rng::SplitMix64;
use crate::sequencer::{build_interpolation_prompt, reorganize_frames, SegmentKind, VocabLayout};
use crate::tensor::Scalar;
use crate::tokenizer::FrameGrid;
use std::time::{Duration, Instant};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenClass {
    Different,
    Unstable,
    Stable,
    Inheritable,
}

/// Per-position classification of an in-between frame, shared by all
/// frames interpolated between one key-frame pair.
#[derive(Debug, Clone)]
pub struct TokenClassMap {
    rows: usize,
    cols: usize,
    classes: Vec<TokenClass>,
    inherited: Vec<Option<u32>>,
}

impl TokenClassMap {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn classes(&self) -> &[TokenClass] {
        &self.classes
    }

    pub fn class_at(&self, row: usize, col: usize) -> TokenClass {
        self.classes[row * self.cols + col]
    }

    /// Inherited codebook token at a row-major offset, if the position
    /// is inheritable.
    pub fn inherited_code(&self, offset: usize) -> Option<u32> {
        self.inherited[offset]
    }

    pub fn inherited_values(&self) -> impl Iterator<Item = ((usize, usize), u32)> + '_ {
        self.inherited.iter().enumerate().filter_map(|(i, v)| {
            v.map(|code| ((i / self.cols, i % self.cols), code))
        })
    }

    pub fn different_count(&self) -> usize {
        self.count(TokenClass::Different)
    }

    pub fn unstable_count(&self) -> usize {
        self.count(TokenClass::Unstable)
    }

    /// Stable positions before the inheritable subset was carved out.
    pub fn stable_count(&self) -> usize {
        self.count(TokenClass::Stable) + self.count(TokenClass::Inheritable)
    }

    pub fn inheritable_count(&self) -> usize {
        self.count(TokenClass::Inheritable)
    }

    fn count(&self, class: TokenClass) -> usize {
        self.classes.iter().filter(|&&c| c == class).count()
    }

    /// One character per cell: D, U, S, or I, one row per line.
    pub fn to_text_dump(&self) -> String {
        let mut s = String::new();
        for r in 0..self.rows {
            for c in 0..self.cols {
                s.push(match self.class_at(r, c) {
                    TokenClass::Different => 'D',
                    TokenClass::Unstable => 'U',
                    TokenClass::Stable => 'S',
                    TokenClass::Inheritable => 'I',
                });
            }
            s.push('\n');
        }
        s
    }
}

/// Knobs for the classification and inheritance step.
#[derive(Debug, Clone, Copy)]
pub struct InterpolationPolicy {
    /// Fraction of stable positions to inherit instead of generate.
    pub inherit_fraction: f64,
    /// Chebyshev radius of the unstable ring around different positions.
    pub dilation_radius: usize,
    /// Seed for the inheritable-subset draw.
    pub rng_seed: u64,
}

impl InterpolationPolicy {
    pub fn new(inherit_fraction: f64, dilation_radius: usize, rng_seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&inherit_fraction) {
            return Err(Error::Config(format!(
                "inherit fraction {inherit_fraction} outside [0, 1]"
            )));
        }
        Ok(InterpolationPolicy { inherit_fraction, dilation_radius, rng_seed })
    }
}

impl Default for InterpolationPolicy {
    fn default() -> Self {
        InterpolationPolicy { inherit_fraction: 0.2, dilation_radius: 1, rng_seed: 0 }
    }
}

/// Classifies every grid position by comparing the two key frames.
pub fn classify_tokens(
    key_a: &FrameGrid,
    key_b: &FrameGrid,
    policy: &InterpolationPolicy,
) -> Result<TokenClassMap> {
    if key_a.rows() != key_b.rows() || key_a.cols() != key_b.cols() {
        return Err(Error::Input(format!(
            "key frames disagree on shape: {}×{} vs {}×{}",
            key_a.rows(),
            key_a.cols(),
            key_b.rows(),
            key_b.cols()
        )));
    }
    let (rows, cols) = (key_a.rows(), key_a.cols());
    let mut classes = vec![TokenClass::Stable; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            if key_a.get(r, c) != key_b.get(r, c) {
                classes[r * cols + c] = TokenClass::Different;
            }
        }
    }
    let radius = policy.dilation_radius as isize;
    if radius > 0 {
        for r in 0..rows as isize {
            for c in 0..cols as isize {
                let idx = (r as usize) * cols + c as usize;
                if classes[idx] == TokenClass::Different {
                    continue;
                }
                'scan: for dr in -radius..=radius {
                    for dc in -radius..=radius {
                        let (nr, nc) = (r + dr, c + dc);
                        if nr < 0 || nc < 0 || nr >= rows as isize || nc >= cols as isize {
                            continue;
                        }
                        if classes[(nr as usize) * cols + nc as usize] == TokenClass::Different {
                            classes[idx] = TokenClass::Unstable;
                            break 'scan;
                        }
                    }
                }
            }
        }
    }
    let stable: Vec<usize> = (0..classes.len())
        .filter(|&i| classes[i] == TokenClass::Stable)
        .collect();
    let take = (policy.inherit_fraction * stable.len() as f64).floor() as usize;
    let mut inherited = vec![None; classes.len()];
    let mut rng = SplitMix64::new(policy.rng_seed);
    for pick in rng.sample_k(stable.len(), take) {
        let pos = stable[pick];
        classes[pos] = TokenClass::Inheritable;
        inherited[pos] = Some(key_a.tokens()[pos]);
    }
    Ok(TokenClassMap { rows, cols, classes, inherited })
}

/// Counters and wall time for one interpolation pass.
#[derive(Debug, Clone)]
pub struct InterpolationStats {
    pub inserted_frames: usize,
    pub sampled_per_frame: usize,
    pub inherited_per_frame: usize,
    pub different_count: usize,
    pub unstable_count: usize,
    pub stable_count: usize,
    pub elapsed: Duration,
}

#[derive(Debug, Clone)]
pub struct InterpolationOutcome {
    /// The inserted frames only, in temporal order.
    pub frames: Vec<FrameGrid>,
    pub stats: InterpolationStats,
}

enum Action {
    Feed,
    Sample { frame: usize },
    Inject { frame: usize, code: u32 },
}

/// Generates `insert_count` frames between two key frames. Inheritable
/// positions are copied from `key_a` and fed through the recurrence
/// without computing logits; every other frame position is sampled.
#[allow(clippy::too_many_arguments)]
pub fn interpolate_between<T: Scalar>(
    text: &[u32],
    key_a: &FrameGrid,
    key_b: &FrameGrid,
    insert_count: usize,
    weights: &ModelWeights<T>,
    config: &DecoderConfig,
    layout: &VocabLayout,
    policy: &InterpolationPolicy,
    sampler: &mut Sampler,
    include_soi: bool,
) -> Result<InterpolationOutcome> {
    if layout.vocab_size() != config.vocab_size {
        return Err(Error::Config(format!(
            "layout vocabulary {} does not match model vocabulary {}",
            layout.vocab_size(),
            config.vocab_size
        )));
    }
    let mut plan =
        build_interpolation_prompt(text, key_a, key_b, insert_count, layout, include_soi)?;
    let class_map = classify_tokens(key_a, key_b, policy)?;

    let mut actions: Vec<Action> = plan.tokens().iter().map(|_| Action::Feed).collect();
    for seg in plan.segments() {
        if seg.kind != SegmentKind::Frame {
            continue;
        }
        let frame = seg.frame_index.expect("frame segments carry a slot");
        if plan.is_filled(frame) {
            continue;
        }
        for offset in 0..seg.len {
            actions[seg.start + offset] = match class_map.inherited_code(offset) {
                Some(code) => Action::Inject { frame, code },
                None => Action::Sample { frame },
            };
        }
    }

    let cells = plan.frame_rows() * plan.frame_cols();
    let mut session = GenerationSession::new(weights, config);
    let mut buffers: Vec<Vec<u32>> = vec![Vec::with_capacity(cells); plan.frame_count()];
    let mut logits: Option<Vec<T>> = None;
    let stream_len = plan.tokens().len();
    let started = Instant::now();
    for p in 0..stream_len {
        let token = match actions[p] {
            Action::Feed => plan.tokens()[p],
            Action::Inject { frame, code } => {
                let token = layout.vision_token(code)?;
                buffers[frame].push(code);
                token
            }
            Action::Sample { frame } => {
                let row = logits.as_ref().ok_or_else(|| {
                    Error::Contract("sampling reached without logits pending".into())
                })?;
                let token = sampler.pick(row, layout.vision_range())?;
                buffers[frame].push(layout.vision_code(token)?);
                token
            }
        };
        let want = p + 1 < stream_len && matches!(actions[p + 1], Action::Sample { .. });
        logits = session.step(token, want)?;
    }
    let elapsed = started.elapsed();

    for (frame, codes) in buffers.into_iter().enumerate() {
        if codes.is_empty() {
            continue;
        }
        let grid = FrameGrid::new(plan.frame_rows(), plan.frame_cols(), codes)?;
        plan.fill_frame(frame, &grid)?;
    }
    let ordered = reorganize_frames(&plan)?;
    let frames = ordered[1..ordered.len() - 1].to_vec();

    let inherited_per_frame = class_map.inheritable_count();
    let stats = InterpolationStats {
        inserted_frames: insert_count,
        sampled_per_frame: cells - inherited_per_frame,
        inherited_per_frame,
        different_count: class_map.different_count(),
        unstable_count: class_map.unstable_count(),
        stable_count: class_map.stable_count(),
        elapsed,
    };
    Ok(InterpolationOutcome { frames, stats })
}

/// Repeatedly inserts `per_gap` frames into every adjacent gap. After
/// `rounds` rounds over `n` key frames the clip holds
/// `(n − 1)·(per_gap + 1)^rounds + 1` frames.
#[allow(clippy::too_many_arguments)]
pub fn recursive_interpolate<T: Scalar>(
    text: &[u32],
    keyframes: &[FrameGrid],
    rounds: usize,
    per_gap: usize,
    weights: &ModelWeights<T>,
    config: &DecoderConfig,
    layout: &VocabLayout,
    policy: &InterpolationPolicy,
    sampler: &mut Sampler,
    include_soi: bool,
) -> Result<Vec<FrameGrid>> {
    if keyframes.len() < 2 {
        return Err(Error::Input(format!(
            "recursive interpolation needs at least 2 key frames, got {}",
            keyframes.len()
        )));
    }
    if rounds == 0 {
        return Err(Error::Input("recursive interpolation needs at least one round".into()));
    }
    let mut clip = keyframes.to_vec();
    for _ in 0..rounds {
        let mut next = Vec::with_capacity((clip.len() - 1) * (per_gap + 1) + 1);
        next.push(clip[0].clone());
        for gap in clip.windows(2) {
            let outcome = interpolate_between(
                text,
                &gap[0],
                &gap[1],
                per_gap,
                weights,
                config,
                layout,
                policy,
                sampler,
                include_soi,
            )?;
            next.extend(outcome.frames);
            next.push(gap[1].clone());
        }
        clip = next;
    }
    Ok(clip)
}
