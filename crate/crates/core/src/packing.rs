//! Fixed-length packing of codebook indices: `ceil(log2 K)` bits per index,
//! most significant bit first, zero padded to a whole byte.

use alloc::vec::Vec;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PackError {
    #[error("codebook size must be at least 1")]
    EmptyCodebook,
    #[error("index {index} at position {position} is not below codebook size {codebook}")]
    IndexOutOfRange {
        position: usize,
        index: u32,
        codebook: u32,
    },
    #[error("expected {expected} bytes, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("non-zero padding bits")]
    NonZeroPadding,
}

pub fn bits_per_index(codebook: u32) -> u32 {
    match codebook {
        0 | 1 => 0,
        k => 32 - (k - 1).leading_zeros(),
    }
}

pub fn packed_len(count: usize, codebook: u32) -> usize {
    (count * bits_per_index(codebook) as usize).div_ceil(8)
}

pub fn pack_indices(indices: &[u32], codebook: u32) -> Result<Vec<u8>, PackError> {
    if codebook == 0 {
        return Err(PackError::EmptyCodebook);
    }
    let bits = bits_per_index(codebook);
    let mut out = Vec::with_capacity(packed_len(indices.len(), codebook));
    let mut acc: u64 = 0;
    let mut filled = 0u32;
    for (position, &index) in indices.iter().enumerate() {
        if index >= codebook {
            return Err(PackError::IndexOutOfRange {
                position,
                index,
                codebook,
            });
        }
        acc = (acc << bits) | u64::from(index);
        filled += bits;
        while filled >= 8 {
            filled -= 8;
            out.push((acc >> filled) as u8);
        }
        acc &= (1u64 << filled) - 1;
    }
    if filled > 0 {
        out.push((acc << (8 - filled)) as u8);
    }
    Ok(out)
}

pub fn unpack_indices(bytes: &[u8], codebook: u32, count: usize) -> Result<Vec<u32>, PackError> {
    if codebook == 0 {
        return Err(PackError::EmptyCodebook);
    }
    let expected = packed_len(count, codebook);
    if bytes.len() != expected {
        return Err(PackError::LengthMismatch {
            expected,
            actual: bytes.len(),
        });
    }
    let bits = bits_per_index(codebook);
    let mask = (1u64 << bits) - 1;
    let mut out = Vec::with_capacity(count);
    let mut acc: u64 = 0;
    let mut filled = 0u32;
    let mut iter = bytes.iter();
    for position in 0..count {
        while filled < bits {
            // Length was checked above.
            acc = (acc << 8) | u64::from(*iter.next().unwrap_or(&0));
            filled += 8;
        }
        filled -= bits;
        let index = ((acc >> filled) & mask) as u32;
        if index >= codebook {
            return Err(PackError::IndexOutOfRange {
                position,
                index,
                codebook,
            });
        }
        out.push(index);
        acc &= (1u64 << filled) - 1;
    }
    if acc != 0 || iter.any(|&b| b != 0) {
        return Err(PackError::NonZeroPadding);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bit_widths() {
        assert_eq!(bits_per_index(4096), 12);
        assert_eq!(bits_per_index(4097), 13);
        assert_eq!(bits_per_index(2), 1);
        assert_eq!(bits_per_index(1), 0);
        assert_eq!(bits_per_index(1000), 10);
    }

    #[test]
    fn empty() {
        assert!(pack_indices(&[], 4096).unwrap().is_empty());
        assert!(unpack_indices(&[], 4096, 0).unwrap().is_empty());
    }

    #[test]
    fn known_bit_patterns() {
        assert_eq!(pack_indices(&[4095, 0], 4096).unwrap(), [0xFF, 0xF0, 0x00]);
        assert_eq!(unpack_indices(&[0x00, 0x10, 0x02], 4096, 2).unwrap(), [1, 2]);
    }

    #[test]
    fn thirty_two_tokens_fill_48_bytes() {
        let idx: Vec<u32> = (0..32).map(|i| i * 127).collect();
        assert_eq!(pack_indices(&idx, 4096).unwrap().len(), 48);
    }

    #[test]
    fn errors() {
        assert_eq!(
            pack_indices(&[1, 4096], 4096),
            Err(PackError::IndexOutOfRange {
                position: 1,
                index: 4096,
                codebook: 4096
            })
        );
        assert_eq!(
            unpack_indices(&[0, 0], 4096, 2),
            Err(PackError::LengthMismatch { expected: 3, actual: 2 })
        );
        assert_eq!(unpack_indices(&[0x00, 0x11], 4096, 1), Err(PackError::NonZeroPadding));
        // 10-bit indices can encode values above a non-power-of-two K.
        assert!(matches!(
            unpack_indices(&[0xFF, 0xC0], 1000, 1),
            Err(PackError::IndexOutOfRange { index: 1023, .. })
        ));
    }
}
