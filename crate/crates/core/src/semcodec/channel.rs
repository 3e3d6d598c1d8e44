//! Binary symmetric channel over codebook indices.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::CodecError;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelModel {
    /// Independent flip probability of every transmitted bit.
    pub p: f64,
    pub seed: u64,
}

impl ChannelModel {
    pub fn new(p: f64, seed: u64) -> Result<Self, CodecError> {
        let ch = Self { p, seed };
        ch.validate()?;
        Ok(ch)
    }

    pub fn noiseless() -> Self {
        Self { p: 0.0, seed: 0 }
    }

    pub fn validate(&self) -> Result<(), CodecError> {
        if !(0.0..=1.0).contains(&self.p) {
            return Err(CodecError::Validation(format!("flip probability {} outside [0, 1]", self.p)));
        }
        Ok(())
    }
}

/// `ceil(log2 K)`, at least 1.
pub fn bits_per_index(k: usize) -> u32 {
    (usize::BITS - (k.max(2) - 1).leading_zeros()).max(1)
}

/// Sends each index as `ceil(log2 K)` bits, flips each bit with probability
/// `p`, and reduces received values `>= K` modulo `K`. Returns the received
/// indices and the number of flipped bits.
pub fn channel_transmit_traced(indices: &[usize], k: usize, ch: &ChannelModel) -> (Vec<usize>, u64) {
    let bits = bits_per_index(k);
    if ch.p <= 0.0 {
        return (indices.to_vec(), 0);
    }
    let p = ch.p.min(1.0);
    let mut r = rng::stream(ch.seed, &[]);
    let mut flipped = 0u64;
    let out = indices
        .iter()
        .map(|&i| {
            let mut v = i;
            for b in 0..bits {
                if r.random_bool(p) {
                    v ^= 1 << b;
                    flipped += 1;
                }
            }
            v % k
        })
        .collect();
    (out, flipped)
}

pub fn channel_transmit(indices: &[usize], k: usize, ch: &ChannelModel) -> Vec<usize> {
    channel_transmit_traced(indices, k, ch).0
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bit_widths() {
        assert_eq!(bits_per_index(2), 1);
        assert_eq!(bits_per_index(3), 2);
        assert_eq!(bits_per_index(16), 4);
        assert_eq!(bits_per_index(17), 5);
        assert_eq!(bits_per_index(1024), 10);
    }

    #[test]
    fn noiseless_is_identity() {
        for k in [2, 3, 7, 16, 100] {
            let idx: Vec<usize> = (0..500).map(|i| i % k).collect();
            assert_eq!(channel_transmit(&idx, k, &ChannelModel::noiseless()), idx);
        }
    }

    #[test]
    fn certain_flip_complements() {
        let idx: Vec<usize> = (0..16).collect();
        let out = channel_transmit(&idx, 16, &ChannelModel::new(1.0, 3).unwrap());
        assert_eq!(out, idx.iter().map(|i| !i & 0xF).collect::<Vec<_>>());
        // K = 5 uses three bits; complements above 4 wrap
        let out = channel_transmit(&[0, 1, 4], 5, &ChannelModel::new(1.0, 3).unwrap());
        assert_eq!(out, vec![7 % 5, 6 % 5, 3]);
    }

    #[test]
    fn corruption_rate_matches_binomial() {
        let idx: Vec<usize> = (0..10_000).map(|i| i % 16).collect();
        let out = channel_transmit(&idx, 16, &ChannelModel::new(0.1, 11).unwrap());
        let rate = idx.iter().zip(&out).filter(|(a, b)| a != b).count() as f64 / idx.len() as f64;
        let expected = 1.0 - 0.9f64.powi(4);
        assert!((rate - expected).abs() < 0.02, "{rate} vs {expected}");
    }

    #[test]
    fn deterministic_and_in_range() {
        let ch = ChannelModel::new(0.3, 5).unwrap();
        let idx: Vec<usize> = (0..1000).map(|i| i % 11).collect();
        let a = channel_transmit(&idx, 11, &ch);
        assert_eq!(a, channel_transmit(&idx, 11, &ch));
        assert!(a.iter().all(|&v| v < 11));
        assert!(ChannelModel::new(1.5, 0).is_err());
    }
}
