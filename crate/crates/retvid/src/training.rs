//! Teacher-forced training on a deterministic synthetic video dataset.
//!
//! Clips show a small sprite of distinct vision tokens gliding over a
//! uniform background with reflective bounds; the motion class is the
//! clip's text label. Training runs the decoder in parallel mode over
//! whole sequences, masks the loss to vision-token targets, and applies
//! Adam with global-norm gradient clipping. All optimizer arithmetic is
//! in f64 regardless of the model element type.

use crate::decoder::{forward_on_tape, register_model, DecoderConfig, ModelWeights};
use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::sequencer::{build_training_sequence, TrainingSequence, VocabLayout};
use crate::tensor::tape::Tape;
use crate::tensor::{Scalar, Tensor};
use crate::tokenizer::FrameGrid;
use std::path::Path;

/// Sprite motion classes; the discriminant doubles as the text label.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MotionClass {
    Right,
    Left,
    Up,
    Down,
    Diagonal,
}

impl MotionClass {
    pub fn all() -> [MotionClass; 5] {
        [
            MotionClass::Right,
            MotionClass::Left,
            MotionClass::Up,
            MotionClass::Down,
            MotionClass::Diagonal,
        ]
    }

    pub fn index(self) -> usize {
        match self {
            MotionClass::Right => 0,
            MotionClass::Left => 1,
            MotionClass::Up => 2,
            MotionClass::Down => 3,
            MotionClass::Diagonal => 4,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            MotionClass::Right => "right",
            MotionClass::Left => "left",
            MotionClass::Up => "up",
            MotionClass::Down => "down",
            MotionClass::Diagonal => "diagonal",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        MotionClass::all()
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| {
                Error::Input(format!(
                    "unknown motion class \"{s}\" (expected right, left, up, down, or diagonal)"
                ))
            })
    }

    /// (row, col) velocity in cells per frame.
    pub fn velocity(self) -> (isize, isize) {
        match self {
            MotionClass::Right => (0, 1),
            MotionClass::Left => (0, -1),
            MotionClass::Up => (-1, 0),
            MotionClass::Down => (1, 0),
            MotionClass::Diagonal => (1, 1),
        }
    }
}

pub const BACKGROUND_TOKEN: u32 = 0;

/// Relative loss improvement an epoch must deliver to reset the
/// plateau counter.
const PLATEAU_REL_IMPROVEMENT: f64 = 0.01;

#[derive(Debug, Clone)]
pub struct SyntheticDatasetSpec {
    pub rows: usize,
    pub cols: usize,
    pub classes: Vec<MotionClass>,
    pub frames_per_clip: usize,
    pub clips_per_class: usize,
    pub sprite_size: usize,
    pub seed: u64,
}

impl Default for SyntheticDatasetSpec {
    fn default() -> Self {
        SyntheticDatasetSpec {
            rows: 8,
            cols: 8,
            classes: MotionClass::all().to_vec(),
            frames_per_clip: 4,
            clips_per_class: 36,
            sprite_size: 3,
            seed: 7,
        }
    }
}

impl SyntheticDatasetSpec {
    fn validate(&self, layout: &VocabLayout) -> Result<()> {
        if self.sprite_size == 0 || self.sprite_size > self.rows || self.sprite_size > self.cols {
            return Err(Error::Config(format!(
                "sprite of {0}×{0} does not fit a {1}×{2} grid",
                self.sprite_size, self.rows, self.cols
            )));
        }
        if self.frames_per_clip < 2 {
            return Err(Error::Config("clips need at least 2 frames".into()));
        }
        if self.classes.is_empty() || self.clips_per_class == 0 {
            return Err(Error::Config("dataset needs at least one class and clip".into()));
        }
        let sprite_tokens = self.sprite_size * self.sprite_size;
        if sprite_tokens + 1 > layout.vision_codes() {
            return Err(Error::Config(format!(
                "sprite needs {} distinct tokens plus background, vocabulary has {}",
                sprite_tokens,
                layout.vision_codes()
            )));
        }
        for &class in &self.classes {
            if layout.text_token(class.index()).is_err() {
                return Err(Error::Config(format!(
                    "layout has no text token for class {class:?}"
                )));
            }
        }
        Ok(())
    }
}

/// One labeled video clip.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Clip {
    pub label: Vec<u32>,
    pub class: MotionClass,
    pub frames: Vec<FrameGrid>,
}

fn reflect_step(origin: usize, velocity: isize, span: usize, limit: usize) -> (usize, isize) {
    let fits = |p: isize| p >= 0 && (p as usize) + span <= limit;
    let tentative = origin as isize + velocity;
    if fits(tentative) {
        return (tentative as usize, velocity);
    }
    let flipped = -velocity;
    let bounced = origin as isize + flipped;
    if fits(bounced) {
        return (bounced as usize, flipped);
    }
    (origin, velocity)
}

/// Renders one clip: the sprite is painted frame by frame, moving by the
/// class velocity and reflecting off the grid edges.
pub fn simulate_clip(
    class: MotionClass,
    start: (usize, usize),
    rows: usize,
    cols: usize,
    sprite_size: usize,
    frames: usize,
) -> Vec<FrameGrid> {
    let s = sprite_size;
    let (mut r, mut c) = start;
    let (mut vr, mut vc) = class.velocity();
    let mut clip = Vec::with_capacity(frames);
    for _ in 0..frames {
        let mut grid = FrameGrid::filled(rows, cols, BACKGROUND_TOKEN);
        for i in 0..s {
            for j in 0..s {
                grid.set(r + i, c + j, 1 + (i * s + j) as u32);
            }
        }
        clip.push(grid);
        let (nr, nvr) = reflect_step(r, vr, s, rows);
        let (nc, nvc) = reflect_step(c, vc, s, cols);
        r = nr;
        vr = nvr;
        c = nc;
        vc = nvc;
    }
    clip
}

/// Deterministic dataset: identical specs yield bit-identical clips.
pub fn generate_dataset(spec: &SyntheticDatasetSpec, layout: &VocabLayout) -> Result<Vec<Clip>> {
    spec.validate(layout)?;
    let mut rng = SplitMix64::new(spec.seed);
    let origin_rows = spec.rows - spec.sprite_size + 1;
    let origin_cols = spec.cols - spec.sprite_size + 1;
    let mut clips = Vec::with_capacity(spec.classes.len() * spec.clips_per_class);
    for &class in &spec.classes {
        let label = vec![layout.text_token(class.index())?];
        // Start positions are drawn without replacement until the origin grid
        // is exhausted, so small datasets cover as many distinct starts as
        // they can and identical starts recur across classes.
        let mut origins: Vec<(usize, usize)> = (0..origin_rows)
            .flat_map(|r| (0..origin_cols).map(move |c| (r, c)))
            .collect();
        for i in (1..origins.len()).rev() {
            origins.swap(i, rng.below(i + 1));
        }
        for k in 0..spec.clips_per_class {
            let (r, c) = if k < origins.len() {
                origins[k]
            } else {
                (rng.below(origin_rows), rng.below(origin_cols))
            };
            let frames = simulate_clip(
                class,
                (r, c),
                spec.rows,
                spec.cols,
                spec.sprite_size,
                spec.frames_per_clip,
            );
            clips.push(Clip { label: label.clone(), class, frames });
        }
    }
    Ok(clips)
}

/// Builds the teacher-forcing sequences for a set of clips.
pub fn clips_to_sequences(
    clips: &[Clip],
    layout: &VocabLayout,
    include_soi: bool,
) -> Result<Vec<TrainingSequence>> {
    clips
        .iter()
        .map(|clip| build_training_sequence(&clip.label, &clip.frames, layout, include_soi))
        .collect()
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub clip_norm: f64,
    pub seed: u64,
    /// Stop once the epoch loss drops to this value.
    pub early_stop_loss: Option<f64>,
    /// Epochs without a 1% relative loss improvement before the learning
    /// rate is multiplied by [`plateau_factor`](Self::plateau_factor).
    pub plateau_patience: usize,
    pub plateau_factor: f64,
    pub min_learning_rate: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 8,
            learning_rate: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            clip_norm: 1.0,
            seed: 0,
            early_stop_loss: None,
            plateau_patience: 5,
            plateau_factor: 0.5,
            min_learning_rate: 1e-6,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch size must be positive".into()));
        }
        if self.learning_rate <= 0.0 || self.epsilon <= 0.0 || self.clip_norm <= 0.0 {
            return Err(Error::Config(
                "learning rate, epsilon, and clip norm must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in (0, 1)".into()));
        }
        if self.plateau_patience == 0 || !(0.0..1.0).contains(&self.plateau_factor) {
            return Err(Error::Config(
                "plateau patience must be positive and the factor inside (0, 1)".into(),
            ));
        }
        if self.min_learning_rate <= 0.0 {
            return Err(Error::Config("minimum learning rate must be positive".into()));
        }
        Ok(())
    }
}

struct Adam {
    step: usize,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    fn new<T: Scalar>(weights: &ModelWeights<T>) -> Self {
        let mut m = Vec::new();
        weights.visit(&mut |t: &Tensor<T>| m.push(vec![0.0; t.numel()]));
        let v = m.clone();
        Adam { step: 0, m, v }
    }

    fn apply<T: Scalar>(
        &mut self,
        weights: &mut ModelWeights<T>,
        grads: &[Vec<f64>],
        cfg: &TrainConfig,
        learning_rate: f64,
    ) -> Result<()> {
        if grads.len() != self.m.len() {
            return Err(Error::Contract(format!(
                "{} gradients for {} parameter tensors",
                grads.len(),
                self.m.len()
            )));
        }
        let norm_sq: f64 = grads.iter().flatten().map(|g| g * g).sum();
        let norm = norm_sq.sqrt();
        if !norm.is_finite() {
            return Err(Error::Numeric("gradient norm is not finite".into()));
        }
        let scale = if norm > cfg.clip_norm { cfg.clip_norm / norm } else { 1.0 };
        self.step += 1;
        let t = self.step as i32;
        let rate = learning_rate * (1.0 - cfg.beta2.powi(t)).sqrt()
            / (1.0 - cfg.beta1.powi(t));
        let mut slot = 0;
        weights.visit_mut(&mut |tensor: &mut Tensor<T>| {
            let g = &grads[slot];
            let m = &mut self.m[slot];
            let v = &mut self.v[slot];
            let data = tensor.data_mut();
            for j in 0..data.len() {
                let gj = g[j] * scale;
                m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj;
                v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj;
                let updated = data[j].to_f64() - rate * m[j] / (v[j].sqrt() + cfg.epsilon);
                data[j] = T::from_f64(updated);
            }
            slot += 1;
        });
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    /// Mean masked cross-entropy per epoch, in nats per target token.
    pub loss_history: Vec<f64>,
    pub epochs_run: usize,
    pub stopped_early: bool,
}

/// Runs Adam over the dataset. Loss is the mean cross-entropy of vision
/// targets, averaged per batch and then per epoch; a fixed seed gives a
/// bit-identical history within one build.
pub fn train<T: Scalar>(
    weights: &mut ModelWeights<T>,
    config: &DecoderConfig,
    dataset: &[TrainingSequence],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    train_with(weights, config, dataset, cfg, |_, _, _| {})
}

/// [`train`] with a per-epoch observer, called with the epoch index, its
/// mean loss, and the learning rate in effect as each epoch finishes.
pub fn train_with<T: Scalar, F: FnMut(usize, f64, f64)>(
    weights: &mut ModelWeights<T>,
    config: &DecoderConfig,
    dataset: &[TrainingSequence],
    cfg: &TrainConfig,
    mut on_epoch: F,
) -> Result<TrainReport> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Input("training dataset is empty".into()));
    }
    for (i, seq) in dataset.iter().enumerate() {
        if seq.input.len() > config.max_sequence_length {
            return Err(Error::Capacity(format!(
                "sequence {i} has {} tokens, model caps at {}",
                seq.input.len(),
                config.max_sequence_length
            )));
        }
    }
    let mut rng = SplitMix64::new(cfg.seed);
    let mut adam = Adam::new(weights);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut learning_rate = cfg.learning_rate;
    let mut best_loss = f64::INFINITY;
    let mut stale_epochs = 0usize;
    for epoch in 0..cfg.epochs {
        rng.shuffle(&mut order);
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut tape: Tape<T> = Tape::new(true);
            let vars = register_model(&mut tape, weights, true);
            let mut total: Option<crate::tensor::tape::Var> = None;
            for &idx in batch {
                let seq = &dataset[idx];
                let logits = forward_on_tape(&mut tape, &seq.input, &vars, config)?;
                let item = tape.cross_entropy(logits, &seq.labels, &seq.mask)?;
                total = Some(match total {
                    Some(acc) => tape.add(acc, item)?,
                    None => item,
                });
            }
            let total = total.expect("batches are never empty");
            let loss = tape.scale(total, T::from_f64(1.0 / batch.len() as f64));
            let loss_value = tape.value(loss).item()?.to_f64();
            if !loss_value.is_finite() {
                return Err(Error::Diverged { epoch });
            }
            loss_sum += loss_value * batch.len() as f64;
            tape.backward(loss)?;
            let grads: Vec<Vec<f64>> = vars
                .ordered()
                .iter()
                .map(|&v| {
                    let tensor = tape.value(v);
                    let grad = tensor.grad().ok_or_else(|| {
                        Error::Contract("parameter missing its gradient".into())
                    })?;
                    Ok(grad.iter().map(|&g| g.to_f64()).collect())
                })
                .collect::<Result<_>>()?;
            adam.apply(weights, &grads, cfg, learning_rate)?;
        }
        let epoch_loss = loss_sum / dataset.len() as f64;
        if !epoch_loss.is_finite() {
            return Err(Error::Diverged { epoch });
        }
        history.push(epoch_loss);
        on_epoch(epoch, epoch_loss, learning_rate);
        if epoch_loss < best_loss * (1.0 - PLATEAU_REL_IMPROVEMENT) {
            best_loss = epoch_loss;
            stale_epochs = 0;
        } else {
            stale_epochs += 1;
            if stale_epochs >= cfg.plateau_patience && learning_rate > cfg.min_learning_rate {
                learning_rate =
                    (learning_rate * cfg.plateau_factor).max(cfg.min_learning_rate);
                stale_epochs = 0;
            }
        }
        if cfg.early_stop_loss.is_some_and(|t| epoch_loss <= t) {
            return Ok(TrainReport {
                epochs_run: history.len(),
                loss_history: history,
                stopped_early: true,
            });
        }
    }
    Ok(TrainReport { epochs_run: history.len(), loss_history: history, stopped_early: false })
}

/// Mean negative log-softmax probability of the unmasked labels,
/// computed in f64 off the tape.
pub fn cross_entropy_loss<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[u32],
    mask: &[bool],
) -> Result<f64> {
    let (rows, width) = logits.dims2("cross_entropy_loss")?;
    if labels.len() != rows || mask.len() != rows {
        return Err(Error::Input(format!(
            "{rows} logit rows against {} labels and {} mask flags",
            labels.len(),
            mask.len()
        )));
    }
    let mut total = 0.0;
    let mut counted = 0usize;
    for (k, row) in logits.data().chunks(width).enumerate() {
        if !mask[k] {
            continue;
        }
        let label = labels[k] as usize;
        if label >= width {
            return Err(Error::Input(format!(
                "label {} outside vocabulary of width {width}",
                labels[k]
            )));
        }
        let mut max = f64::NEG_INFINITY;
        for &v in row {
            max = max.max(v.to_f64());
        }
        let sum_exp: f64 = row.iter().map(|&v| (v.to_f64() - max).exp()).sum();
        total += max + sum_exp.ln() - row[label].to_f64();
        counted += 1;
    }
    if counted == 0 {
        return Err(Error::Contract("every position is masked out of the loss".into()));
    }
    Ok(total / counted as f64)
}

/// Writes the per-epoch loss history as `epoch,loss` CSV.
pub fn write_loss_csv(history: &[f64], path: &Path) -> Result<()> {
    let mut out = String::from("epoch,loss\n");
    for (epoch, loss) in history.iter().enumerate() {
        out.push_str(&format!("{epoch},{loss:.6}\n"));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Best whole-cell shift in {-1,0,1}² aligning the sprite of `prev` with
/// `next`, by count of agreeing non-background cells. `None` when `prev`
/// is all background.
pub fn dominant_shift(prev: &FrameGrid, next: &FrameGrid) -> Option<(isize, isize)> {
    if prev.rows() != next.rows() || prev.cols() != next.cols() {
        return None;
    }
    let mut best: Option<((isize, isize), usize)> = None;
    for dr in -1..=1isize {
        for dc in -1..=1isize {
            let mut agree = 0usize;
            let mut seen = false;
            for r in 0..prev.rows() {
                for c in 0..prev.cols() {
                    let token = prev.get(r, c);
                    if token == BACKGROUND_TOKEN {
                        continue;
                    }
                    seen = true;
                    let (nr, nc) = (r as isize + dr, c as isize + dc);
                    if nr >= 0
                        && nc >= 0
                        && (nr as usize) < next.rows()
                        && (nc as usize) < next.cols()
                        && next.get(nr as usize, nc as usize) == token
                    {
                        agree += 1;
                    }
                }
            }
            if !seen {
                return None;
            }
            if best.is_none_or(|(_, count)| agree > count) {
                best = Some(((dr, dc), agree));
            }
        }
    }
    best.map(|(shift, _)| shift)
}

/// True when the generated frame moves the sprite the same way the true
/// next frame does.
pub fn motion_matches(
    true_prev: &FrameGrid,
    true_next: &FrameGrid,
    generated_next: &FrameGrid,
) -> bool {
    match (dominant_shift(true_prev, true_next), dominant_shift(true_prev, generated_next)) {
        (Some(a), Some(b)) => a == b,
        _ => false,
    }
}
