//! Token sequence construction for video generation.
//!
//! A clip is laid out as repeated `[text, serial-number, frame]` groups:
//! the class-label text tokens and a serial-number token are emitted
//! before every frame's vision tokens. Serial numbers let the model emit
//! frames out of temporal order; [`reorganize_frames`] restores temporal
//! order afterwards by sorting on the serial number.
//!
//! Frame interpolation uses that freedom: the two key frames are fed
//! first carrying serial numbers `1` and `K+2`, then the `K` in-between
//! frames are generated carrying serial numbers `2..=K+1`.

use crate::error::{Error, Result};
use crate::tokenizer::FrameGrid;

/// Partition of the model vocabulary into contiguous token ranges.
///
/// Order is fixed: text class labels, vision codes, serial numbers,
/// start-of-image, pad. `vocab_size` is therefore enough to recover the
/// whole layout once the text and vision range sizes are agreed on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VocabLayout {
    n_text: usize,
    n_vision: usize,
    s_max: usize,
}

pub const DEFAULT_TEXT_CLASSES: usize = 5;
pub const DEFAULT_MAX_SERIAL: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenKind {
    Text,
    Vision,
    SerialNumber,
    StartOfImage,
    Pad,
}

impl VocabLayout {
    pub fn new(n_text: usize, n_vision: usize, s_max: usize) -> Result<Self> {
        if n_text == 0 || n_vision == 0 || s_max == 0 {
            return Err(Error::Config(
                "vocabulary layout needs at least one token in every range".into(),
            ));
        }
        Ok(VocabLayout { n_text, n_vision, s_max })
    }

    /// Five motion classes, 64 vision codes, serial numbers up to 32.
    pub fn default_layout() -> Self {
        VocabLayout {
            n_text: DEFAULT_TEXT_CLASSES,
            n_vision: crate::tokenizer::DEFAULT_CODEBOOK_SIZE,
            s_max: DEFAULT_MAX_SERIAL,
        }
    }

    /// Recovers the layout from a stored vocabulary size, assuming the
    /// default text and vision range sizes.
    pub fn from_vocab_size(vocab_size: usize) -> Result<Self> {
        let fixed = DEFAULT_TEXT_CLASSES + crate::tokenizer::DEFAULT_CODEBOOK_SIZE + 2;
        if vocab_size <= fixed {
            return Err(Error::Config(format!(
                "vocab size {vocab_size} leaves no room for serial-number tokens \
                 (need more than {fixed})"
            )));
        }
        VocabLayout::new(
            DEFAULT_TEXT_CLASSES,
            crate::tokenizer::DEFAULT_CODEBOOK_SIZE,
            vocab_size - fixed,
        )
    }

    pub fn vocab_size(&self) -> usize {
        self.n_text + self.n_vision + self.s_max + 2
    }

    pub fn text_classes(&self) -> usize {
        self.n_text
    }

    pub fn vision_codes(&self) -> usize {
        self.n_vision
    }

    pub fn max_serial(&self) -> usize {
        self.s_max
    }

    pub fn text_base(&self) -> u32 {
        0
    }

    pub fn vision_base(&self) -> u32 {
        self.n_text as u32
    }

    pub fn sn_base(&self) -> u32 {
        (self.n_text + self.n_vision) as u32
    }

    pub fn soi_token(&self) -> u32 {
        (self.n_text + self.n_vision + self.s_max) as u32
    }

    pub fn pad_token(&self) -> u32 {
        self.soi_token() + 1
    }

    pub fn text_token(&self, class: usize) -> Result<u32> {
        if class >= self.n_text {
            return Err(Error::Input(format!(
                "text class {class} outside 0..{}",
                self.n_text
            )));
        }
        Ok(class as u32)
    }

    pub fn vision_token(&self, code: u32) -> Result<u32> {
        if code as usize >= self.n_vision {
            return Err(Error::Input(format!(
                "vision code {code} outside 0..{}",
                self.n_vision
            )));
        }
        Ok(self.vision_base() + code)
    }

    /// Codebook index of a vision token.
    pub fn vision_code(&self, token: u32) -> Result<u32> {
        if self.kind_of(token)? != TokenKind::Vision {
            return Err(Error::Input(format!("token {token} is not a vision token")));
        }
        Ok(token - self.vision_base())
    }

    /// Serial-number token for a 1-based serial value.
    pub fn sn_token(&self, serial: usize) -> Result<u32> {
        if serial == 0 || serial > self.s_max {
            return Err(Error::Input(format!(
                "serial number {serial} outside 1..={}",
                self.s_max
            )));
        }
        Ok(self.sn_base() + serial as u32 - 1)
    }

    /// Serial value of a serial-number token.
    pub fn serial_of(&self, token: u32) -> Result<usize> {
        if self.kind_of(token)? != TokenKind::SerialNumber {
            return Err(Error::Input(format!("token {token} is not a serial number")));
        }
        Ok((token - self.sn_base()) as usize + 1)
    }

    pub fn kind_of(&self, token: u32) -> Result<TokenKind> {
        let t = token as usize;
        if t < self.n_text {
            Ok(TokenKind::Text)
        } else if t < self.n_text + self.n_vision {
            Ok(TokenKind::Vision)
        } else if t < self.n_text + self.n_vision + self.s_max {
            Ok(TokenKind::SerialNumber)
        } else if t == self.soi_token() as usize {
            Ok(TokenKind::StartOfImage)
        } else if t == self.pad_token() as usize {
            Ok(TokenKind::Pad)
        } else {
            Err(Error::Input(format!(
                "token {token} outside vocabulary of size {}",
                self.vocab_size()
            )))
        }
    }

    pub fn is_vision(&self, token: u32) -> bool {
        matches!(self.kind_of(token), Ok(TokenKind::Vision))
    }

    /// Inclusive-exclusive vision token range, for restricting samplers.
    pub fn vision_range(&self) -> std::ops::Range<u32> {
        self.vision_base()..self.vision_base() + self.n_vision as u32
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SegmentKind {
    Text,
    SerialNumber,
    Frame,
}

/// One contiguous slice of a [`SequencePlan`]'s token stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub kind: SegmentKind,
    pub start: usize,
    pub len: usize,
    /// Serial value carried by serial-number and frame segments.
    pub serial: Option<usize>,
    /// Generation-order slot for frame segments.
    pub frame_index: Option<usize>,
}

/// A laid-out token stream with segment bookkeeping. Frame segments may
/// be pending (placeholder pad tokens) until filled by a generator.
#[derive(Debug, Clone)]
pub struct SequencePlan {
    layout: VocabLayout,
    tokens: Vec<u32>,
    segments: Vec<Segment>,
    frame_rows: usize,
    frame_cols: usize,
    filled: Vec<bool>,
}

struct PlanBuilder {
    layout: VocabLayout,
    include_soi: bool,
    tokens: Vec<u32>,
    segments: Vec<Segment>,
    filled: Vec<bool>,
}

impl PlanBuilder {
    fn new(layout: VocabLayout, include_soi: bool) -> Self {
        PlanBuilder { layout, include_soi, tokens: Vec::new(), segments: Vec::new(), filled: Vec::new() }
    }

    fn push_header(&mut self, text: &[u32], serial: usize) -> Result<()> {
        self.segments.push(Segment {
            kind: SegmentKind::Text,
            start: self.tokens.len(),
            len: text.len(),
            serial: None,
            frame_index: None,
        });
        self.tokens.extend_from_slice(text);
        let sn_len = if self.include_soi { 2 } else { 1 };
        self.segments.push(Segment {
            kind: SegmentKind::SerialNumber,
            start: self.tokens.len(),
            len: sn_len,
            serial: Some(serial),
            frame_index: None,
        });
        self.tokens.push(self.layout.sn_token(serial)?);
        if self.include_soi {
            self.tokens.push(self.layout.soi_token());
        }
        Ok(())
    }

    fn push_frame(&mut self, serial: usize, grid: Option<&FrameGrid>, rows: usize, cols: usize) -> Result<()> {
        let frame_index = self.filled.len();
        self.segments.push(Segment {
            kind: SegmentKind::Frame,
            start: self.tokens.len(),
            len: rows * cols,
            serial: Some(serial),
            frame_index: Some(frame_index),
        });
        match grid {
            Some(g) => {
                for &code in g.tokens() {
                    self.tokens.push(self.layout.vision_token(code)?);
                }
                self.filled.push(true);
            }
            None => {
                self.tokens.extend(std::iter::repeat(self.layout.pad_token()).take(rows * cols));
                self.filled.push(false);
            }
        }
        Ok(())
    }

    fn finish(self, rows: usize, cols: usize) -> SequencePlan {
        SequencePlan {
            layout: self.layout,
            tokens: self.tokens,
            segments: self.segments,
            frame_rows: rows,
            frame_cols: cols,
            filled: self.filled,
        }
    }
}

fn check_text(text: &[u32], layout: &VocabLayout) -> Result<()> {
    if text.is_empty() {
        return Err(Error::Input("text prefix must not be empty".into()));
    }
    for &t in text {
        if layout.kind_of(t)? != TokenKind::Text {
            return Err(Error::Input(format!("token {t} in text prefix is not a text token")));
        }
    }
    Ok(())
}

impl SequencePlan {
    /// Plan for a complete clip in temporal order, all frames known:
    /// `[text, SN(1), frame_0, text, SN(2), frame_1, ...]`.
    pub fn from_frames(
        text: &[u32],
        frames: &[FrameGrid],
        layout: VocabLayout,
        include_soi: bool,
    ) -> Result<Self> {
        check_text(text, &layout)?;
        if frames.is_empty() {
            return Err(Error::Input("plan needs at least one frame".into()));
        }
        if frames.len() > layout.max_serial() {
            return Err(Error::Capacity(format!(
                "{} frames exceed the serial-number budget of {}",
                frames.len(),
                layout.max_serial()
            )));
        }
        let (rows, cols) = (frames[0].rows(), frames[0].cols());
        let mut b = PlanBuilder::new(layout, include_soi);
        for (i, frame) in frames.iter().enumerate() {
            if frame.rows() != rows || frame.cols() != cols {
                return Err(Error::Input(format!(
                    "frame {i} is {}×{}, expected {rows}×{cols}",
                    frame.rows(),
                    frame.cols()
                )));
            }
            b.push_header(text, i + 1)?;
            b.push_frame(i + 1, Some(frame), rows, cols)?;
        }
        Ok(b.finish(rows, cols))
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn layout(&self) -> &VocabLayout {
        &self.layout
    }

    pub fn frame_rows(&self) -> usize {
        self.frame_rows
    }

    pub fn frame_cols(&self) -> usize {
        self.frame_cols
    }

    pub fn frame_count(&self) -> usize {
        self.filled.len()
    }

    pub fn is_filled(&self, frame_index: usize) -> bool {
        self.filled[frame_index]
    }

    pub fn is_complete(&self) -> bool {
        self.filled.iter().all(|&f| f)
    }

    /// Writes a generated frame into its pending segment.
    pub fn fill_frame(&mut self, frame_index: usize, grid: &FrameGrid) -> Result<()> {
        if frame_index >= self.filled.len() {
            return Err(Error::Input(format!(
                "frame index {frame_index} outside plan with {} frames",
                self.filled.len()
            )));
        }
        if self.filled[frame_index] {
            return Err(Error::Contract(format!("frame {frame_index} is already filled")));
        }
        if grid.rows() != self.frame_rows || grid.cols() != self.frame_cols {
            return Err(Error::Input(format!(
                "frame is {}×{}, plan expects {}×{}",
                grid.rows(),
                grid.cols(),
                self.frame_rows,
                self.frame_cols
            )));
        }
        let seg = *self
            .segments
            .iter()
            .find(|s| s.frame_index == Some(frame_index))
            .expect("frame segment exists for every filled slot");
        for (offset, &code) in grid.tokens().iter().enumerate() {
            self.tokens[seg.start + offset] = self.layout.vision_token(code)?;
        }
        self.filled[frame_index] = true;
        Ok(())
    }

    /// Frame grid currently held by a frame segment.
    pub fn frame(&self, frame_index: usize) -> Result<FrameGrid> {
        let seg = self
            .segments
            .iter()
            .find(|s| s.frame_index == Some(frame_index))
            .ok_or_else(|| {
                Error::Input(format!(
                    "frame index {frame_index} outside plan with {} frames",
                    self.filled.len()
                ))
            })?;
        if !self.filled[frame_index] {
            return Err(Error::Contract(format!("frame {frame_index} is not filled yet")));
        }
        let codes: Vec<u32> = self.tokens[seg.start..seg.start + seg.len]
            .iter()
            .map(|&t| self.layout.vision_code(t))
            .collect::<Result<_>>()?;
        FrameGrid::new(self.frame_rows, self.frame_cols, codes)
    }

    /// One segment descriptor per line: `kind start len serial frame`.
    pub fn to_text_dump(&self) -> String {
        let mut s = String::new();
        for seg in &self.segments {
            let kind = match seg.kind {
                SegmentKind::Text => "text",
                SegmentKind::SerialNumber => "sn",
                SegmentKind::Frame => "frame",
            };
            let serial = seg.serial.map_or("-".to_string(), |v| v.to_string());
            let frame = seg.frame_index.map_or("-".to_string(), |v| v.to_string());
            s.push_str(&format!("{kind} {} {} {serial} {frame}\n", seg.start, seg.len));
        }
        s
    }

    #[cfg(test)]
    fn assert_tiles_exactly(&self) {
        let mut pos = 0;
        for seg in &self.segments {
            assert_eq!(seg.start, pos, "segment starts at {} but stream is at {pos}", seg.start);
            pos += seg.len;
        }
        assert_eq!(pos, self.tokens.len(), "segments cover {pos} of {} tokens", self.tokens.len());
    }
}

/// Teacher-forcing triple: next-token targets with a loss mask that is
/// true exactly where the target is a vision token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainingSequence {
    pub input: Vec<u32>,
    pub labels: Vec<u32>,
    pub mask: Vec<bool>,
}

impl TrainingSequence {
    pub fn len(&self) -> usize {
        self.input.len()
    }

    pub fn is_empty(&self) -> bool {
        self.input.is_empty()
    }
}

/// Builds the training input `concat_i [text, SN(i+1), frame_i]` and its
/// shifted-left labels. Positions whose label is a text, serial-number,
/// start-of-image, or pad token are masked out of the loss: those tokens
/// are given by the sequencer, not predicted.
pub fn build_training_sequence(
    text: &[u32],
    frames: &[FrameGrid],
    layout: &VocabLayout,
    include_soi: bool,
) -> Result<TrainingSequence> {
    let plan = SequencePlan::from_frames(text, frames, *layout, include_soi)?;
    let input = plan.tokens().to_vec();
    let mut labels: Vec<u32> = input[1..].to_vec();
    labels.push(layout.pad_token());
    let mask: Vec<bool> = labels.iter().map(|&t| layout.is_vision(t)).collect();
    Ok(TrainingSequence { input, labels, mask })
}

/// Prompt continuation `[text, SN(k)]` announcing key frame `k`.
pub fn build_keyframe_prompt(
    text: &[u32],
    next_serial: usize,
    layout: &VocabLayout,
    include_soi: bool,
) -> Result<Vec<u32>> {
    check_text(text, layout)?;
    let mut prompt = text.to_vec();
    prompt.push(layout.sn_token(next_serial)?);
    if include_soi {
        prompt.push(layout.soi_token());
    }
    Ok(prompt)
}

/// Lays out an interpolation pass: both key frames up front (serials `1`
/// and `K+2`), then `K` pending frames with serials `2..=K+1`.
pub fn build_interpolation_prompt(
    text: &[u32],
    key_a: &FrameGrid,
    key_b: &FrameGrid,
    insert_count: usize,
    layout: &VocabLayout,
    include_soi: bool,
) -> Result<SequencePlan> {
    check_text(text, layout)?;
    if insert_count == 0 {
        return Err(Error::Input("interpolation needs at least one frame to insert".into()));
    }
    if insert_count + 2 > layout.max_serial() {
        return Err(Error::Capacity(format!(
            "{insert_count} inserted frames plus 2 keys exceed the serial-number budget of {}",
            layout.max_serial()
        )));
    }
    let (rows, cols) = (key_a.rows(), key_a.cols());
    if key_b.rows() != rows || key_b.cols() != cols {
        return Err(Error::Input(format!(
            "key frames disagree on shape: {}×{} vs {}×{}",
            rows,
            cols,
            key_b.rows(),
            key_b.cols()
        )));
    }
    let mut b = PlanBuilder::new(*layout, include_soi);
    b.push_header(text, 1)?;
    b.push_frame(1, Some(key_a), rows, cols)?;
    b.push_header(text, insert_count + 2)?;
    b.push_frame(insert_count + 2, Some(key_b), rows, cols)?;
    for j in 1..=insert_count {
        b.push_header(text, j + 1)?;
        b.push_frame(j + 1, None, rows, cols)?;
    }
    Ok(b.finish(rows, cols))
}

/// Returns the plan's frames sorted into temporal order by serial number.
pub fn reorganize_frames(plan: &SequencePlan) -> Result<Vec<FrameGrid>> {
    if !plan.is_complete() {
        return Err(Error::Contract("plan has unfilled frames".into()));
    }
    let mut by_serial: Vec<(usize, usize)> = plan
        .segments()
        .iter()
        .filter(|s| s.kind == SegmentKind::Frame)
        .map(|s| {
            (
                s.serial.expect("frame segments carry a serial"),
                s.frame_index.expect("frame segments carry a slot"),
            )
        })
        .collect();
    by_serial.sort_by_key(|&(serial, _)| serial);
    for pair in by_serial.windows(2) {
        if pair[0].0 == pair[1].0 {
            return Err(Error::Consistency(format!(
                "serial number {} appears on more than one frame",
                pair[0].0
            )));
        }
    }
    by_serial.iter().map(|&(_, idx)| plan.frame(idx)).collect()
}
