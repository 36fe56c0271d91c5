//! Bit-packed mask serialization.
//!
//! Layout (little-endian): `N: u32`, strategy code `u32`, `round(ratio·1e4)`
//! `u32`, `round(hint_ratio·1e4)` `u32`, then `⌈N/8⌉` bytes of visibility
//! bits and `⌈N/8⌉` bytes of hint bits, LSB first.

use super::{MaskStrategy, MaskVector};
use crate::error::{Error, Result};

pub const MASK_HEADER_LEN: usize = 16;

fn pack(bits: impl Iterator<Item = bool>, n: usize) -> Vec<u8> {
    let mut out = vec![0u8; n.div_ceil(8)];
    for (i, b) in bits.enumerate() {
        if b {
            out[i / 8] |= 1 << (i % 8);
        }
    }
    out
}

pub fn encode_mask(m: &MaskVector) -> Vec<u8> {
    let n = m.len();
    let mut out = Vec::with_capacity(MASK_HEADER_LEN + 2 * n.div_ceil(8));
    out.extend_from_slice(&(n as u32).to_le_bytes());
    out.extend_from_slice(&m.strategy.code().to_le_bytes());
    out.extend_from_slice(&((m.ratio * 1e4).round() as u32).to_le_bytes());
    out.extend_from_slice(&((m.hint_ratio * 1e4).round() as u32).to_le_bytes());
    out.extend(pack(m.visible.iter().copied(), n));
    let mut hint = vec![false; n];
    for &h in &m.hint_idx {
        hint[h] = true;
    }
    out.extend(pack(hint.into_iter(), n));
    out
}

pub fn decode_mask(bytes: &[u8]) -> Result<MaskVector> {
    let bad = |m: &str| Error::Format(format!("mask: {m}"));
    if bytes.len() < MASK_HEADER_LEN {
        return Err(bad("truncated header"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().unwrap());
    let n = word(0) as usize;
    let strategy = MaskStrategy::from_code(word(1)).ok_or_else(|| bad("unknown strategy code"))?;
    let ratio = word(2) as f64 / 1e4;
    let hint_ratio = word(3) as f64 / 1e4;
    let nb = n.div_ceil(8);
    if bytes.len() != MASK_HEADER_LEN + 2 * nb {
        return Err(bad("payload length does not match N"));
    }
    let bit = |base: usize, i: usize| bytes[base + i / 8] >> (i % 8) & 1 == 1;
    let masked = (0..n).filter(|&i| !bit(MASK_HEADER_LEN, i)).collect();
    let hints: Vec<usize> = (0..n).filter(|&i| bit(MASK_HEADER_LEN + nb, i)).collect();
    let m = MaskVector::from_masked(n, masked, hints, strategy, ratio, hint_ratio);
    m.validate().map_err(|_| bad("hint bit set on a masked token"))?;
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masking::{attention_guided_mask, random_mask, MaskingConfig};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn header_and_size() {
        let m = MaskVector::from_masked(10, vec![0, 9], vec![3], MaskStrategy::Attention, 0.7, 0.1);
        let b = encode_mask(&m);
        assert_eq!(b.len(), 16 + 2 * 2);
        assert_eq!(&b[..4], &10u32.to_le_bytes());
        assert_eq!(&b[4..8], &2u32.to_le_bytes());
        assert_eq!(&b[8..12], &7000u32.to_le_bytes());
        assert_eq!(&b[12..16], &1000u32.to_le_bytes());
        // visible bits: tokens 1..=8 set
        assert_eq!(b[16], 0b1111_1110);
        assert_eq!(b[17], 0b0000_0001);
        assert_eq!(b[18], 0b0000_1000);
        assert_eq!(decode_mask(&b).unwrap(), m);
    }

    #[test]
    fn rejects_corrupt_input() {
        let m = MaskVector::from_masked(10, vec![0], vec![], MaskStrategy::Random, 0.1, 0.0);
        let b = encode_mask(&m);
        assert!(decode_mask(&b[..10]).is_err());
        assert!(decode_mask(&b[..b.len() - 1]).is_err());
        let mut bad = b.clone();
        bad[4] = 9;
        assert!(decode_mask(&bad).is_err());
        let mut hinted_masked = b;
        hinted_masked[18] |= 1;
        assert!(decode_mask(&hinted_masked).is_err());
    }

    proptest! {
        #[test]
        fn roundtrip(n in 1usize..300, seed in 0u64..1000, r in 0.0f64..1.0) {
            let m = random_mask(n, r, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let d = decode_mask(&encode_mask(&m)).unwrap();
            prop_assert_eq!(&d.visible, &m.visible);
            prop_assert_eq!(&d.masked_idx, &m.masked_idx);
            prop_assert!((d.ratio - m.ratio).abs() <= 0.5e-4);

            let satt: Vec<f64> = (0..n).map(|i| ((i * 37 + seed as usize) % 101) as f64).collect();
            let cfg = MaskingConfig { r: 0.7, s: 0.1, ..Default::default() };
            let a = attention_guided_mask(&satt, &cfg).unwrap();
            prop_assert_eq!(decode_mask(&encode_mask(&a)).unwrap(), a);
        }
    }
}
