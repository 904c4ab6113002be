//! Toy image tokenizer: per-patch nearest-neighbor quantization against a
//! fixed codebook of solid color swatches, plus the inverse decoding and
//! the flatten/unflatten between grids and token streams.
//!
//! Images are dense row-major RGB with channel values in [0, 1]. The
//! default codebook is a 4×4×4 lattice over RGB (64 entries), which is
//! plenty of palette for the synthetic sprite videos this crate trains on.

use crate::error::{Error, Result};
use std::io::Write;
use std::path::Path;

pub const DEFAULT_CODEBOOK_SIZE: usize = 64;
pub const DEFAULT_PATCH: usize = 8;

/// Dense RGB image, `pixels.len() == height * width * 3`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f64>,
}

impl Image {
    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        let mut pixels = Vec::with_capacity(height * width * 3);
        for _ in 0..height * width {
            pixels.extend_from_slice(&rgb);
        }
        Image { height, width, pixels }
    }
}

/// Fixed quantization palette. Each entry is one patch's worth of pixels,
/// row-major, RGB interleaved.
#[derive(Debug, Clone)]
pub struct Codebook {
    patch: usize,
    entries: Vec<Vec<f64>>,
}

impl Codebook {
    /// 64 solid swatches over a 4×4×4 RGB lattice, patch size 8.
    pub fn default_lattice() -> Self {
        Self::lattice(4, DEFAULT_PATCH)
    }

    /// `steps³` solid swatches with channel levels evenly spaced in [0, 1].
    pub fn lattice(steps: usize, patch: usize) -> Self {
        assert!(steps >= 2 && patch >= 1);
        let level = |i: usize| i as f64 / (steps - 1) as f64;
        let mut entries = Vec::with_capacity(steps * steps * steps);
        for r in 0..steps {
            for g in 0..steps {
                for b in 0..steps {
                    let rgb = [level(r), level(g), level(b)];
                    let mut entry = Vec::with_capacity(patch * patch * 3);
                    for _ in 0..patch * patch {
                        entry.extend_from_slice(&rgb);
                    }
                    entries.push(entry);
                }
            }
        }
        Codebook { patch, entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn patch(&self) -> usize {
        self.patch
    }

    pub fn entry(&self, idx: usize) -> &[f64] {
        &self.entries[idx]
    }

    /// Representative color of an entry (first pixel); handy for building
    /// test images and rendering sprites.
    pub fn entry_rgb(&self, idx: usize) -> [f64; 3] {
        let e = &self.entries[idx];
        [e[0], e[1], e[2]]
    }
}

/// One quantized frame: a rows×cols grid of codebook indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrameGrid {
    rows: usize,
    cols: usize,
    tokens: Vec<u32>,
}

impl FrameGrid {
    pub fn new(rows: usize, cols: usize, tokens: Vec<u32>) -> Result<Self> {
        if rows * cols != tokens.len() {
            return Err(Error::Input(format!(
                "{rows}×{cols} grid needs {} tokens, got {}",
                rows * cols,
                tokens.len()
            )));
        }
        Ok(FrameGrid { rows, cols, tokens })
    }

    pub fn filled(rows: usize, cols: usize, token: u32) -> Self {
        FrameGrid { rows, cols, tokens: vec![token; rows * cols] }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn get(&self, row: usize, col: usize) -> u32 {
        self.tokens[row * self.cols + col]
    }

    pub fn set(&mut self, row: usize, col: usize, token: u32) {
        self.tokens[row * self.cols + col] = token;
    }

    pub fn max_token(&self) -> u32 {
        self.tokens.iter().copied().max().unwrap_or(0)
    }
}

/// Row-major flattening of a grid into a token stream.
pub fn flatten(grid: &FrameGrid) -> Vec<u32> {
    grid.tokens.clone()
}

/// Inverse of [`flatten`].
pub fn unflatten(tokens: &[u32], rows: usize, cols: usize) -> Result<FrameGrid> {
    FrameGrid::new(rows, cols, tokens.to_vec())
}

/// Quantizes an image to a grid of nearest codebook entries (squared
/// Euclidean distance, ties to the lowest index).
pub fn encode_frame(image: &Image, cb: &Codebook, patch: usize) -> Result<FrameGrid> {
    if patch == 0 || image.height % patch != 0 || image.width % patch != 0 {
        return Err(Error::Input(format!(
            "image {}×{} not divisible into {patch}×{patch} patches",
            image.height, image.width
        )));
    }
    if cb.patch() != patch {
        return Err(Error::Input(format!(
            "codebook patch {} differs from requested {patch}",
            cb.patch()
        )));
    }
    let rows = image.height / patch;
    let cols = image.width / patch;
    let mut tokens = Vec::with_capacity(rows * cols);
    let mut scratch = vec![0.0; patch * patch * 3];
    for pr in 0..rows {
        for pc in 0..cols {
            for y in 0..patch {
                let src = ((pr * patch + y) * image.width + pc * patch) * 3;
                let dst = y * patch * 3;
                scratch[dst..dst + patch * 3]
                    .copy_from_slice(&image.pixels[src..src + patch * 3]);
            }
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for (idx, entry) in cb.entries.iter().enumerate() {
                let d: f64 = entry
                    .iter()
                    .zip(&scratch)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                if d < best_d {
                    best_d = d;
                    best = idx;
                }
            }
            tokens.push(best as u32);
        }
    }
    FrameGrid::new(rows, cols, tokens)
}

/// Paints each token's codebook patch back into a full image.
pub fn decode_frame(grid: &FrameGrid, cb: &Codebook, patch: usize) -> Result<Image> {
    if cb.patch() != patch {
        return Err(Error::Input(format!(
            "codebook patch {} differs from requested {patch}",
            cb.patch()
        )));
    }
    if let Some(&bad) = grid.tokens().iter().find(|&&t| t as usize >= cb.len()) {
        return Err(Error::Input(format!(
            "token {bad} outside codebook of size {}",
            cb.len()
        )));
    }
    let height = grid.rows() * patch;
    let width = grid.cols() * patch;
    let mut pixels = vec![0.0; height * width * 3];
    for pr in 0..grid.rows() {
        for pc in 0..grid.cols() {
            let entry = cb.entry(grid.get(pr, pc) as usize);
            for y in 0..patch {
                let dst = ((pr * patch + y) * width + pc * patch) * 3;
                let src = y * patch * 3;
                pixels[dst..dst + patch * 3].copy_from_slice(&entry[src..src + patch * 3]);
            }
        }
    }
    Ok(Image { height, width, pixels })
}

/// Writes an image as a binary P6 file (8 bits per channel).
pub fn write_ppm(image: &Image, path: &Path) -> Result<()> {
    let mut out = Vec::with_capacity(image.pixels.len() + 32);
    write!(out, "P6\n{} {}\n255\n", image.width, image.height)?;
    for &v in &image.pixels {
        out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Writes a grid as plain text: one row per line, tokens space-separated.
pub fn write_grid_text(grid: &FrameGrid, path: &Path) -> Result<()> {
    std::fs::write(path, grid_to_text(grid))?;
    Ok(())
}

pub fn grid_to_text(grid: &FrameGrid) -> String {
    let mut s = String::new();
    for r in 0..grid.rows() {
        let row: Vec<String> =
            (0..grid.cols()).map(|c| grid.get(r, c).to_string()).collect();
        s.push_str(&row.join(" "));
        s.push('\n');
    }
    s
}

/// Parses the text format written by [`write_grid_text`].
pub fn grid_from_text(text: &str) -> Result<FrameGrid> {
    let mut rows: Vec<Vec<u32>> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut row = Vec::new();
        for field in line.split_whitespace() {
            let tok: u32 = field.parse().map_err(|_| {
                Error::Input(format!("line {}: \"{field}\" is not a token index", lineno + 1))
            })?;
            row.push(tok);
        }
        if let Some(first) = rows.first() {
            if row.len() != first.len() {
                return Err(Error::Input(format!(
                    "line {}: row has {} tokens, expected {}",
                    lineno + 1,
                    row.len(),
                    first.len()
                )));
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Input("grid text contains no rows".into()));
    }
    let cols = rows[0].len();
    let tokens: Vec<u32> = rows.concat();
    FrameGrid::new(rows.len(), cols, tokens)
}

pub fn read_grid_file(path: &Path) -> Result<FrameGrid> {
    let text = std::fs::read_to_string(path)?;
    grid_from_text(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    #[test]
    fn lattice_entries_are_distinct() {
        let cb = Codebook::default_lattice();
        assert_eq!(cb.len(), 64);
        for i in 0..cb.len() {
            for j in i + 1..cb.len() {
                assert_ne!(cb.entry(i), cb.entry(j), "entries {i} and {j} collide");
            }
        }
    }

    #[test]
    fn uniform_image_encodes_to_one_token() {
        let cb = Codebook::default_lattice();
        let img = Image::filled(16, 24, cb.entry_rgb(3));
        let grid = encode_frame(&img, &cb, 8).unwrap();
        assert_eq!(grid.rows(), 2);
        assert_eq!(grid.cols(), 3);
        assert!(grid.tokens().iter().all(|&t| t == 3));
    }

    #[test]
    fn encode_decode_round_trips_on_grids() {
        let cb = Codebook::default_lattice();
        let mut rng = SplitMix64::new(50);
        let tokens: Vec<u32> = (0..12).map(|_| rng.below(64) as u32).collect();
        let grid = FrameGrid::new(3, 4, tokens).unwrap();
        let img = decode_frame(&grid, &cb, 8).unwrap();
        assert_eq!(img.height, 24);
        assert_eq!(img.width, 32);
        let back = encode_frame(&img, &cb, 8).unwrap();
        assert_eq!(back, grid);
    }

    #[test]
    fn random_image_matches_exhaustive_nearest_scan() {
        let cb = Codebook::lattice(3, 4);
        let mut rng = SplitMix64::new(51);
        let (h, w) = (8, 12);
        let pixels: Vec<f64> = (0..h * w * 3).map(|_| rng.uniform()).collect();
        let img = Image { height: h, width: w, pixels };
        let grid = encode_frame(&img, &cb, 4).unwrap();
        for pr in 0..grid.rows() {
            for pc in 0..grid.cols() {
                let mut patch = Vec::new();
                for y in 0..4 {
                    let src = ((pr * 4 + y) * w + pc * 4) * 3;
                    patch.extend_from_slice(&img.pixels[src..src + 12]);
                }
                let chosen = grid.get(pr, pc) as usize;
                let dist = |idx: usize| -> f64 {
                    cb.entry(idx)
                        .iter()
                        .zip(&patch)
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum()
                };
                let d_chosen = dist(chosen);
                for other in 0..cb.len() {
                    let d = dist(other);
                    assert!(
                        d_chosen < d || (d_chosen == d && chosen <= other),
                        "patch ({pr},{pc}): picked {chosen} at {d_chosen}, \
                         but {other} is at {d}"
                    );
                }
            }
        }
    }

    #[test]
    fn tie_breaks_toward_lowest_index() {
        // Two identical entries: the lower index must win.
        let cb = Codebook {
            patch: 1,
            entries: vec![vec![0.5, 0.5, 0.5], vec![0.9, 0.9, 0.9], vec![0.5, 0.5, 0.5]],
        };
        let img = Image::filled(1, 1, [0.5, 0.5, 0.5]);
        let grid = encode_frame(&img, &cb, 1).unwrap();
        assert_eq!(grid.tokens(), &[0]);
    }

    #[test]
    fn encode_rejects_non_divisible_dimensions() {
        let cb = Codebook::default_lattice();
        let img = Image::filled(20, 16, [0.0, 0.0, 0.0]);
        assert!(matches!(encode_frame(&img, &cb, 8).unwrap_err(), Error::Input(_)));
    }

    #[test]
    fn decode_rejects_out_of_range_token() {
        let cb = Codebook::default_lattice();
        let grid = FrameGrid::filled(2, 2, 64);
        assert!(matches!(decode_frame(&grid, &cb, 8).unwrap_err(), Error::Input(_)));
    }

    #[test]
    fn flatten_is_row_major_and_invertible() {
        let grid = FrameGrid::new(2, 2, vec![10, 11, 12, 13]).unwrap();
        let flat = flatten(&grid);
        assert_eq!(flat, vec![10, 11, 12, 13]);
        assert_eq!(unflatten(&flat, 2, 2).unwrap(), grid);
        assert_eq!(flatten(&unflatten(&flat, 2, 2).unwrap()), flat);
    }

    #[test]
    fn unflatten_rejects_length_mismatch() {
        assert!(matches!(unflatten(&[1, 2, 3], 2, 2).unwrap_err(), Error::Input(_)));
    }

    #[test]
    fn ppm_header_has_correct_dimensions() {
        let cb = Codebook::default_lattice();
        let grid = FrameGrid::filled(2, 3, 21);
        let img = decode_frame(&grid, &cb, 8).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("frame.ppm");
        write_ppm(&img, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let header = b"P6\n24 16\n255\n";
        assert_eq!(&bytes[..header.len()], header);
        assert_eq!(bytes.len(), header.len() + 24 * 16 * 3);
    }

    #[test]
    fn grid_text_round_trips() {
        let grid = FrameGrid::new(2, 3, vec![5, 0, 63, 7, 8, 9]).unwrap();
        let text = grid_to_text(&grid);
        assert_eq!(text, "5 0 63\n7 8 9\n");
        assert_eq!(grid_from_text(&text).unwrap(), grid);
    }

    #[test]
    fn grid_text_rejects_bad_input() {
        assert!(matches!(grid_from_text("1 2\n3").unwrap_err(), Error::Input(_)));
        assert!(matches!(grid_from_text("1 x\n").unwrap_err(), Error::Input(_)));
        assert!(matches!(grid_from_text("").unwrap_err(), Error::Input(_)));
    }
}
