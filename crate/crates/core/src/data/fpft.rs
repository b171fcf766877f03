//! FPFT binary tensor format for precomputed feature embeddings.
//!
//! Layout (all integers little-endian):
//! - magic bytes `FPFT`
//! - u32 dim count
//! - u32 per dim
//! - row-major f32 data, exactly `product(dims)` values; trailing bytes are
//!   an error.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::path::Path;

pub const FPFT_MAGIC: &[u8; 4] = b"FPFT";

pub fn encode_features_bin(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * t.shape().len() + 4 * t.numel());
    out.extend_from_slice(FPFT_MAGIC);
    out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn parse_features_bin(bytes: &[u8]) -> Result<Tensor> {
    let take4 = |offset: usize, what: &str| -> Result<[u8; 4]> {
        bytes
            .get(offset..offset + 4)
            .and_then(|s| s.try_into().ok())
            .ok_or_else(|| Error::Format(format!("truncated {what} at byte {offset}")))
    };

    let magic = take4(0, "magic")?;
    if &magic != FPFT_MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}, expected {FPFT_MAGIC:?}")));
    }
    let ndims = u32::from_le_bytes(take4(4, "dim count")?) as usize;
    if ndims == 0 {
        return Err(Error::Format("empty tensor: zero dimensions".into()));
    }
    // A header cannot legitimately declare more dims than the file has bytes.
    if ndims > bytes.len() / 4 {
        return Err(Error::Format(format!("truncated header: {ndims} dims declared")));
    }
    let mut dims = Vec::with_capacity(ndims);
    for i in 0..ndims {
        let d = u32::from_le_bytes(take4(8 + 4 * i, "dims")?) as usize;
        if d == 0 {
            return Err(Error::Format("empty tensor: zero-sized dimension".into()));
        }
        dims.push(d);
    }
    let numel = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Format(format!("dimension product overflows: {dims:?}")))?;
    let data_start = 8 + 4 * ndims;
    let expected = numel
        .checked_mul(4)
        .and_then(|n| n.checked_add(data_start))
        .ok_or_else(|| Error::Format(format!("payload size overflows: {dims:?}")))?;
    match bytes.len() {
        l if l < expected => {
            return Err(Error::Format(format!(
                "truncated payload: {} bytes, need {}",
                l, expected
            )))
        }
        l if l > expected => {
            return Err(Error::Format(format!("{} trailing bytes after payload", l - expected)))
        }
        _ => {}
    }
    let data: Vec<f64> = bytes[data_start..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Tensor::new(dims, data)
}

pub fn save_features_bin(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    std::fs::write(path, encode_features_bin(t))?;
    Ok(())
}

pub fn load_features_bin(path: impl AsRef<Path>) -> Result<Tensor> {
    parse_features_bin(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_through_f32() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let data: Vec<f64> = (0..12).map(|_| rng.random_range(-5.0..5.0)).collect();
        let t = Tensor::new(vec![3, 4], data.clone()).unwrap();
        let back = parse_features_bin(&encode_features_bin(&t)).unwrap();
        assert_eq!(back.shape(), &[3, 4]);
        for (got, want) in back.data().iter().zip(&data) {
            assert_eq!(*got, *want as f32 as f64);
        }
    }

    #[test]
    fn hand_built_file_parses_to_exact_tensor() {
        // Byte-level construction: shape [2,2], data [1,2,3,4].
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"FPFT");
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&2u32.to_le_bytes());
        for v in [1.0f32, 2.0, 3.0, 4.0] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let t = parse_features_bin(&bytes).unwrap();
        assert_eq!(t.shape(), &[2, 2]);
        assert_eq!(t.data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn zero_dimension_is_empty_tensor_error() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"FPFT");
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&0u32.to_le_bytes());
        let err = parse_features_bin(&bytes).unwrap_err();
        assert!(matches!(err, Error::Format(ref m) if m.contains("empty tensor")), "{err}");

        let mut no_dims = Vec::new();
        no_dims.extend_from_slice(b"FPFT");
        no_dims.extend_from_slice(&0u32.to_le_bytes());
        assert!(parse_features_bin(&no_dims).is_err());
    }

    #[test]
    fn bad_magic_truncation_and_trailing_bytes() {
        assert!(matches!(parse_features_bin(b"NOPE"), Err(Error::Format(_))));
        assert!(matches!(parse_features_bin(b"FP"), Err(Error::Format(_))));

        let t = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let good = encode_features_bin(&t);
        assert!(matches!(
            parse_features_bin(&good[..good.len() - 1]),
            Err(Error::Format(ref m)) if m.contains("truncated")
        ));
        let mut extra = good.clone();
        extra.push(0);
        assert!(matches!(
            parse_features_bin(&extra),
            Err(Error::Format(ref m)) if m.contains("trailing")
        ));
    }

    #[test]
    fn absurd_dim_products_fail_cleanly() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"FPFT");
        bytes.extend_from_slice(&4u32.to_le_bytes());
        for _ in 0..4 {
            bytes.extend_from_slice(&u32::MAX.to_le_bytes());
        }
        assert!(matches!(parse_features_bin(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn save_and_load_files() {
        let dir = std::env::temp_dir().join("frostbit-fpft-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("feat.fpft");
        let t = Tensor::new(vec![2, 3], vec![0.5, -1.0, 2.0, 3.5, -0.25, 0.0]).unwrap();
        save_features_bin(&path, &t).unwrap();
        let back = load_features_bin(&path).unwrap();
        assert_eq!(back.shape(), t.shape());
        assert_eq!(back.data(), t.data());
    }
}
