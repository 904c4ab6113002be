//! Binary checkpoint format for model weights.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "FVID"                      4 bytes  magic
//! version                     1 byte   currently 1
//! dtype                       1 byte   element width: 4 (f32) or 8 (f64)
//! layers, vocab_size,
//! d_model, heads,
//! ffn_hidden, max_seq_len     6 × u32  config block
//! gammas                      heads × f64
//! thetas                      (d_model/heads/2) × f64
//! weights                     raw element data, canonical visit order
//! checksum                    u64      FNV-1a over every preceding byte
//! ```
//!
//! Loading validates in a fixed order: magic, then version, then checksum,
//! then structure. A truncated or bit-flipped file therefore fails as a
//! checksum error rather than a garbled parse.

use crate::decoder::{DecoderConfig, ModelWeights};
use crate::error::{Error, Result};
use crate::retention::RetentionConfig;
use crate::tensor::Scalar;
use std::path::Path;

pub const MAGIC: [u8; 4] = *b"FVID";
pub const VERSION: u8 = 1;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Reads just the header to report the stored element width in bytes,
/// so callers can pick the matching element type before a full load.
pub fn stored_dtype(path: &Path) -> Result<u8> {
    use std::io::Read;
    let mut head = [0u8; 6];
    std::fs::File::open(path)?.read_exact(&mut head).map_err(|_| {
        Error::CheckpointFormat("file is shorter than the fixed header".into())
    })?;
    if head[0..4] != MAGIC {
        return Err(Error::BadMagic { found: [head[0], head[1], head[2], head[3]] });
    }
    if head[4] != VERSION {
        return Err(Error::BadVersion { found: head[4], supported: VERSION });
    }
    Ok(head[5])
}

pub fn save_checkpoint<T: Scalar>(
    w: &ModelWeights<T>,
    cfg: &DecoderConfig,
    path: &Path,
) -> Result<()> {
    let mut out = Vec::with_capacity(64 + w.param_count() * T::BYTES as usize);
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.push(T::BYTES);
    for dim in [
        cfg.layers,
        cfg.vocab_size,
        cfg.d_model,
        cfg.retention.heads,
        cfg.ffn_hidden,
        cfg.max_sequence_length,
    ] {
        out.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    for &g in &cfg.retention.gammas {
        out.extend_from_slice(&g.to_le_bytes());
    }
    for &t in &cfg.retention.thetas {
        out.extend_from_slice(&t.to_le_bytes());
    }
    w.visit(&mut |tensor| {
        for &v in tensor.data() {
            v.write_le(&mut out);
        }
    });
    let checksum = fnv1a(&out);
    out.extend_from_slice(&checksum.to_le_bytes());
    std::fs::write(path, out)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.at + n > self.bytes.len() {
            return Err(Error::CheckpointFormat(format!(
                "config block ends early at byte {}",
                self.at
            )));
        }
        let slice = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(slice)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<(ModelWeights<T>, DecoderConfig)> {
    let bytes = std::fs::read(path)?;
    if bytes.len() >= 4 && bytes[..4] != MAGIC {
        return Err(Error::BadMagic { found: bytes[..4].try_into().unwrap() });
    }
    if bytes.len() >= 5 && bytes[4] != VERSION {
        return Err(Error::BadVersion { found: bytes[4], supported: VERSION });
    }
    if bytes.len() < 4 + 1 + 1 + 8 {
        return Err(Error::BadChecksum);
    }
    let (payload, tail) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().unwrap());
    if fnv1a(payload) != stored {
        return Err(Error::BadChecksum);
    }

    let dtype = payload[5];
    if dtype != T::BYTES {
        return Err(Error::CheckpointFormat(format!(
            "element width {dtype} in file, build uses {}",
            T::BYTES
        )));
    }
    let mut r = Reader { bytes: payload, at: 6 };
    let layers = r.u32()? as usize;
    let vocab_size = r.u32()? as usize;
    let d_model = r.u32()? as usize;
    let heads = r.u32()? as usize;
    let ffn_hidden = r.u32()? as usize;
    let max_sequence_length = r.u32()? as usize;
    if heads == 0 || d_model == 0 || d_model % heads != 0 {
        return Err(Error::CheckpointFormat(format!(
            "bad geometry: d_model {d_model}, heads {heads}"
        )));
    }
    let gammas: Vec<f64> = (0..heads).map(|_| r.f64()).collect::<Result<_>>()?;
    let half = d_model / heads / 2;
    let stored_thetas: Vec<f64> = (0..half).map(|_| r.f64()).collect::<Result<_>>()?;

    let retention = RetentionConfig::with_gammas(d_model, heads, gammas)
        .map_err(|e| Error::CheckpointFormat(e.to_string()))?;
    let mut retention = retention;
    retention.thetas = stored_thetas;
    let cfg =
        DecoderConfig::with_retention(layers, vocab_size, ffn_hidden, max_sequence_length, retention)
            .map_err(|e| Error::CheckpointFormat(e.to_string()))?;

    let mut w = ModelWeights::<T>::zeros(&cfg);
    let elem = T::BYTES as usize;
    let mut fill_err = None;
    w.visit_mut(&mut |tensor| {
        if fill_err.is_some() {
            return;
        }
        let need = tensor.numel() * elem;
        match r.take(need) {
            Ok(raw) => {
                for (i, v) in tensor.data_mut().iter_mut().enumerate() {
                    *v = T::read_le(&raw[i * elem..]);
                }
            }
            Err(_) => {
                fill_err = Some(Error::CheckpointFormat(
                    "weight data shorter than the config implies".into(),
                ));
            }
        }
    });
    if let Some(e) = fill_err {
        return Err(e);
    }
    if r.at != payload.len() {
        return Err(Error::CheckpointFormat(format!(
            "{} trailing bytes after weight data",
            payload.len() - r.at
        )));
    }
    Ok((w, cfg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn sample() -> (ModelWeights<f64>, DecoderConfig) {
        let cfg = DecoderConfig::new(2, 19, 8, 2, 12, 128).unwrap();
        let mut rng = SplitMix64::new(40);
        (ModelWeights::init(&cfg, &mut rng), cfg)
    }

    fn bits_equal(a: &ModelWeights<f64>, b: &ModelWeights<f64>) -> bool {
        let mut flat_a = Vec::new();
        a.visit(&mut |t| flat_a.extend(t.data().iter().map(|v| v.to_bits())));
        let mut flat_b = Vec::new();
        b.visit(&mut |t| flat_b.extend(t.data().iter().map(|v| v.to_bits())));
        flat_a == flat_b
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let (w, cfg) = sample();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&w, &cfg, &path).unwrap();
        let (loaded, loaded_cfg) = load_checkpoint::<f64>(&path).unwrap();
        assert_eq!(loaded_cfg, cfg);
        assert!(bits_equal(&w, &loaded));
    }

    #[test]
    fn stored_dtype_reports_element_width() {
        let (w, cfg) = sample();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("peek.ckpt");
        save_checkpoint(&w, &cfg, &path).unwrap();
        assert_eq!(stored_dtype(&path).unwrap(), 8);

        let narrow = ModelWeights::<f32>::init(&cfg, &mut SplitMix64::new(42));
        let path32 = dir.path().join("peek32.ckpt");
        save_checkpoint(&narrow, &cfg, &path32).unwrap();
        assert_eq!(stored_dtype(&path32).unwrap(), 4);
    }

    #[test]
    fn stored_dtype_rejects_foreign_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("garbage.ckpt");
        std::fs::write(&path, b"NOPExxxx").unwrap();
        assert!(matches!(stored_dtype(&path), Err(Error::BadMagic { .. })));
        std::fs::write(&path, b"FV").unwrap();
        assert!(matches!(stored_dtype(&path), Err(Error::CheckpointFormat(_))));
    }

    #[test]
    fn round_trip_f32() {
        let cfg = DecoderConfig::new(1, 11, 8, 1, 6, 64).unwrap();
        let mut rng = SplitMix64::new(41);
        let w = ModelWeights::<f32>::init(&cfg, &mut rng);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model32.ckpt");
        save_checkpoint(&w, &cfg, &path).unwrap();
        let (loaded, _) = load_checkpoint::<f32>(&path).unwrap();
        let mut a = Vec::new();
        w.visit(&mut |t| a.extend(t.data().iter().map(|v| v.to_bits())));
        let mut b = Vec::new();
        loaded.visit(&mut |t| b.extend(t.data().iter().map(|v| v.to_bits())));
        assert_eq!(a, b);
    }

    #[test]
    fn wrong_magic_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, b"NOPExxxxxxxxxxxxxxxxxxx").unwrap();
        match load_checkpoint::<f64>(&path).unwrap_err() {
            Error::BadMagic { found } => assert_eq!(&found, b"NOPE"),
            other => panic!("wrong error: {other:?}"),
        }
    }

    #[test]
    fn wrong_version_names_both() {
        let (w, cfg) = sample();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v2.ckpt");
        save_checkpoint(&w, &cfg, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4] = 2;
        std::fs::write(&path, bytes).unwrap();
        match load_checkpoint::<f64>(&path).unwrap_err() {
            Error::BadVersion { found, supported } => {
                assert_eq!(found, 2);
                assert_eq!(supported, 1);
            }
            other => panic!("wrong error: {other:?}"),
        }
    }

    #[test]
    fn truncation_fails_the_checksum() {
        let (w, cfg) = sample();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trunc.ckpt");
        save_checkpoint(&w, &cfg, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(load_checkpoint::<f64>(&path).unwrap_err(), Error::BadChecksum));
    }

    #[test]
    fn bit_flip_fails_the_checksum() {
        let (w, cfg) = sample();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("flip.ckpt");
        save_checkpoint(&w, &cfg, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(load_checkpoint::<f64>(&path).unwrap_err(), Error::BadChecksum));
    }

    #[test]
    fn dtype_mismatch_is_a_format_error() {
        let (w, cfg) = sample();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("wide.ckpt");
        save_checkpoint(&w, &cfg, &path).unwrap();
        assert!(matches!(
            load_checkpoint::<f32>(&path).unwrap_err(),
            Error::CheckpointFormat(_)
        ));
    }

    #[test]
    fn loaded_model_produces_identical_logits() {
        let (w, cfg) = sample();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("logits.ckpt");
        save_checkpoint(&w, &cfg, &path).unwrap();
        let (loaded, loaded_cfg) = load_checkpoint::<f64>(&path).unwrap();
        let tokens = [1u32, 8, 3, 18];
        let a = crate::decoder::forward_parallel(&tokens, &w, &cfg).unwrap();
        let b = crate::decoder::forward_parallel(&tokens, &loaded, &loaded_cfg).unwrap();
        assert_eq!(a.data(), b.data());
    }
}
