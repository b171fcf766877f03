//! Bitwise target encoding: an invertible quantization of a continuous
//! target into `B` binary decisions, so a regression target can be learned
//! as `B` independent classifications. Each bit answers "is the value in the
//! upper half of the current subdivision", so precision doubles per bit.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// How per-bit probabilities are turned back into a value at inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeMode {
    /// Bit = 1 iff p ≥ 0.5 (ties round up), then exact decode.
    Threshold,
    /// Independent-bit expectation of the quantization level.
    Expected,
}

/// Target-range descriptor: values in `[lo, hi]` quantized to `2^bits`
/// levels, most significant bit first.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BitCodec {
    pub lo: f64,
    pub hi: f64,
    pub bits: u32,
}

impl BitCodec {
    pub fn new(lo: f64, hi: f64, bits: u32) -> Result<Self> {
        if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::Config(format!("codec range must satisfy lo < hi, got [{lo}, {hi}]")));
        }
        if bits == 0 || bits > 52 {
            return Err(Error::Config(format!("codec bits must be in 1..=52, got {bits}")));
        }
        Ok(BitCodec { lo, hi, bits })
    }

    pub fn levels(&self) -> u64 {
        1u64 << self.bits
    }

    /// Worst-case round-trip error: half of one quantization bin.
    pub fn half_bin(&self) -> f64 {
        (self.hi - self.lo) / (1u64 << (self.bits + 1)) as f64
    }

    fn quantize(&self, v: f64) -> u64 {
        let frac = (v - self.lo) / (self.hi - self.lo);
        let q = (frac * self.levels() as f64).floor();
        if q < 0.0 {
            0
        } else if q >= self.levels() as f64 {
            self.levels() - 1
        } else {
            q as u64
        }
    }

    /// Encodes `v` (clamped to `[lo, hi]`) as `bits` binary digits of its
    /// quantization level, most significant first.
    pub fn encode(&self, v: f64) -> Result<Vec<u8>> {
        if !v.is_finite() {
            return Err(Error::Domain(format!("cannot encode non-finite value {v}")));
        }
        let q = self.quantize(v);
        Ok((0..self.bits).rev().map(|i| ((q >> i) & 1) as u8).collect())
    }

    /// Bin-center reconstruction of an encoded value.
    pub fn decode(&self, bits: &[u8]) -> Result<f64> {
        if bits.len() != self.bits as usize {
            return Err(Error::Contract(format!(
                "expected {} bits, got {}",
                self.bits,
                bits.len()
            )));
        }
        let mut q: u64 = 0;
        for &b in bits {
            q = (q << 1) | u64::from(b & 1);
        }
        Ok(self.value_of_level(q as f64))
    }

    fn value_of_level(&self, q: f64) -> f64 {
        self.lo + (q + 0.5) / self.levels() as f64 * (self.hi - self.lo)
    }

    /// Decodes a vector of per-bit probabilities.
    pub fn decode_probabilistic(&self, probs: &[f64], mode: DecodeMode) -> Result<f64> {
        if probs.len() != self.bits as usize {
            return Err(Error::Contract(format!(
                "expected {} probabilities, got {}",
                self.bits,
                probs.len()
            )));
        }
        if let Some(&bad) = probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::Domain(format!("probability outside [0,1]: {bad}")));
        }
        match mode {
            DecodeMode::Threshold => {
                let bits: Vec<u8> = probs.iter().map(|&p| u8::from(p >= 0.5)).collect();
                self.decode(&bits)
            }
            DecodeMode::Expected => {
                // E[q] under independent bits; decode is affine in q, so this
                // is the exact expectation of the decoded value.
                let expected_q: f64 = probs
                    .iter()
                    .enumerate()
                    .map(|(i, &p)| p * (1u64 << (self.bits - 1 - i as u32)) as f64)
                    .sum();
                Ok(self.value_of_level(expected_q))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mrd1_b4() -> BitCodec {
        BitCodec::new(0.0, 6.0, 4).unwrap()
    }

    #[test]
    fn constructor_rejects_degenerate_descriptors() {
        assert!(matches!(BitCodec::new(6.0, 0.0, 4), Err(Error::Config(_))));
        assert!(matches!(BitCodec::new(1.0, 1.0, 4), Err(Error::Config(_))));
        assert!(matches!(BitCodec::new(f64::NAN, 1.0, 4), Err(Error::Config(_))));
        assert!(matches!(BitCodec::new(0.0, 6.0, 0), Err(Error::Config(_))));
        assert!(matches!(BitCodec::new(0.0, 6.0, 53), Err(Error::Config(_))));
        assert_eq!(BitCodec::new(0.0, 6.0, 16).unwrap().levels(), 65536);
    }

    #[test]
    fn encode_lower_boundary_is_all_zeros() {
        for bits in [1, 4, 16] {
            let c = BitCodec::new(0.0, 6.0, bits).unwrap();
            assert_eq!(c.encode(0.0).unwrap(), vec![0; bits as usize]);
        }
    }

    #[test]
    fn encode_upper_boundary_clamps_to_all_ones() {
        for bits in [1, 4, 16] {
            let c = BitCodec::new(0.0, 6.0, bits).unwrap();
            assert_eq!(c.encode(6.0).unwrap(), vec![1; bits as usize]);
            assert_eq!(c.encode(100.0).unwrap(), vec![1; bits as usize]);
        }
    }

    #[test]
    fn encode_mrd1_mean_value() {
        // Independent quantization arithmetic: floor(2.59 / 6 * 16) = 6 = 0b0110.
        let q = (2.59f64 / 6.0 * 16.0).floor() as u64;
        assert_eq!(q, 6);
        assert_eq!(mrd1_b4().encode(2.59).unwrap(), vec![0, 1, 1, 0]);
    }

    #[test]
    fn encode_rejects_non_finite() {
        assert!(matches!(mrd1_b4().encode(f64::NAN), Err(Error::Domain(_))));
        assert!(matches!(mrd1_b4().encode(f64::INFINITY), Err(Error::Domain(_))));
    }

    #[test]
    fn decode_all_zeros_is_first_bin_center() {
        let v = mrd1_b4().decode(&[0, 0, 0, 0]).unwrap();
        assert_eq!(v, 0.5 / 16.0 * 6.0);
        assert_eq!(v, 0.1875);
    }

    #[test]
    fn decode_wrong_length_is_contract_error() {
        assert!(matches!(mrd1_b4().decode(&[0, 1]), Err(Error::Contract(_))));
    }

    #[test]
    fn bound_at_16_bits_on_mrd1_range() {
        let c = BitCodec::new(0.0, 6.0, 16).unwrap();
        let bound = c.half_bin();
        assert!((bound - 6.0 / 131072.0).abs() < 1e-18);
        assert!((bound - 4.58e-5).abs() < 1e-7);
    }

    #[test]
    fn probabilistic_zero_probs_match_hard_decode() {
        let c = mrd1_b4();
        let p = vec![0.0; 4];
        assert_eq!(
            c.decode_probabilistic(&p, DecodeMode::Threshold).unwrap(),
            c.decode(&[0; 4]).unwrap()
        );
        assert_eq!(
            c.decode_probabilistic(&p, DecodeMode::Expected).unwrap(),
            c.decode(&[0; 4]).unwrap()
        );
    }

    #[test]
    fn probabilistic_half_threshold_ties_round_up() {
        let c = mrd1_b4();
        let v = c.decode_probabilistic(&[0.5; 4], DecodeMode::Threshold).unwrap();
        assert_eq!(v, c.decode(&[1; 4]).unwrap());
    }

    #[test]
    fn probabilistic_rejects_out_of_range() {
        let c = mrd1_b4();
        assert!(matches!(
            c.decode_probabilistic(&[0.5, 0.5, 1.2, 0.5], DecodeMode::Expected),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn expected_mode_matches_exhaustive_enumeration_at_b8() {
        // Brute-force oracle: enumerate all 256 codes, weight each decoded
        // value by its probability under independent bits.
        let c = BitCodec::new(1.5, 10.0, 8).unwrap();
        let probs = [0.9, 0.2, 0.55, 0.01, 0.7, 0.5, 0.31, 0.83];
        let mut expected = 0.0;
        for code in 0u64..256 {
            let bits: Vec<u8> = (0..8).rev().map(|i| ((code >> i) & 1) as u8).collect();
            let mut weight = 1.0;
            for (b, &p) in bits.iter().zip(&probs) {
                weight *= if *b == 1 { p } else { 1.0 - p };
            }
            expected += weight * c.decode(&bits).unwrap();
        }
        let got = c.decode_probabilistic(&probs, DecodeMode::Expected).unwrap();
        assert!((got - expected).abs() < 1e-9, "{got} vs {expected}");
    }

    #[test]
    fn precision_doubles_per_bit() {
        // Dense grid including the endpoints, where the half-bin bound is
        // attained exactly.
        let ranges = [(0.0, 6.0), (1.5, 10.0), (3.5, 18.0)];
        for (lo, hi) in ranges {
            let mut prev_max: Option<f64> = None;
            for bits in 1..=20 {
                let c = BitCodec::new(lo, hi, bits).unwrap();
                let mut max_err = 0.0f64;
                for i in 0..=2000 {
                    let v = lo + (hi - lo) * i as f64 / 2000.0;
                    let err = (c.decode(&c.encode(v).unwrap()).unwrap() - v).abs();
                    max_err = max_err.max(err);
                }
                assert!(max_err <= c.half_bin() * (1.0 + 1e-12));
                if let Some(p) = prev_max {
                    assert!(max_err <= 0.5 * p * (1.0 + 1e-12), "bits={bits} {max_err} vs {p}");
                }
                prev_max = Some(max_err);
            }
        }
    }

    proptest! {
        #[test]
        fn quantization_is_monotone(a in 0.0f64..6.0, b in 0.0f64..6.0, bits in 1u32..=20) {
            let c = BitCodec::new(0.0, 6.0, bits).unwrap();
            let (lo_v, hi_v) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(c.quantize(lo_v) <= c.quantize(hi_v));
        }

        #[test]
        fn round_trip_within_half_bin(
            v in 0.0f64..1.0,
            range_idx in 0usize..3,
            bits in 1u32..=20,
        ) {
            let (lo, hi) = [(0.0, 6.0), (1.5, 10.0), (3.5, 18.0)][range_idx];
            let c = BitCodec::new(lo, hi, bits).unwrap();
            let x = lo + v * (hi - lo);
            let back = c.decode(&c.encode(x).unwrap()).unwrap();
            prop_assert!((back - x).abs() <= c.half_bin() * (1.0 + 1e-12));
        }

        #[test]
        fn encode_is_pure(v in 0.0f64..6.0) {
            let c = BitCodec::new(0.0, 6.0, 16).unwrap();
            prop_assert_eq!(c.encode(v).unwrap(), c.encode(v).unwrap());
        }
    }
}
