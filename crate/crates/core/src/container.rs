//! The `DLF1` container.
//!
//! ```text
//! offset  size  field
//!      0     4  magic "DLF1"
//!      4     1  version
//!      5     1  lambda_index
//!      6     4  orig_w        (u32 LE)
//!     10     4  orig_h        (u32 LE)
//!     14     4  semantic_len  (u32 LE)
//!     18     4  detail_len    (u32 LE)
//!     22     …  semantic payload, then detail payload
//! ```

use alloc::vec::Vec;

pub const MAGIC: [u8; 4] = *b"DLF1";
/// Version 1: 16-bit CDF precision, 32-bit range coder.
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 22;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ContainerError {
    #[error("bad magic {0:02x?}")]
    BadMagic([u8; 4]),
    #[error("unsupported container version {0}")]
    UnsupportedVersion(u8),
    #[error("container truncated: need {needed} bytes, have {available}")]
    Truncated { needed: u64, available: usize },
    #[error("{0} unexpected bytes after the detail payload")]
    TrailingBytes(u64),
    #[error("payload of {0} bytes does not fit a u32 length field")]
    PayloadTooLarge(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct BitContainer {
    pub lambda_index: u8,
    pub orig_width: u32,
    pub orig_height: u32,
    pub semantic: Vec<u8>,
    pub detail: Vec<u8>,
}

impl BitContainer {
    pub fn byte_len(&self) -> usize {
        HEADER_LEN + self.semantic.len() + self.detail.len()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, ContainerError> {
        let sem = u32::try_from(self.semantic.len())
            .map_err(|_| ContainerError::PayloadTooLarge(self.semantic.len()))?;
        let det = u32::try_from(self.detail.len())
            .map_err(|_| ContainerError::PayloadTooLarge(self.detail.len()))?;
        let mut out = Vec::with_capacity(self.byte_len());
        out.extend_from_slice(&MAGIC);
        out.push(VERSION);
        out.push(self.lambda_index);
        out.extend_from_slice(&self.orig_width.to_le_bytes());
        out.extend_from_slice(&self.orig_height.to_le_bytes());
        out.extend_from_slice(&sem.to_le_bytes());
        out.extend_from_slice(&det.to_le_bytes());
        out.extend_from_slice(&self.semantic);
        out.extend_from_slice(&self.detail);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ContainerError> {
        if bytes.len() >= 4 && bytes[..4] != MAGIC {
            let mut m = [0; 4];
            m.copy_from_slice(&bytes[..4]);
            return Err(ContainerError::BadMagic(m));
        }
        if bytes.len() < HEADER_LEN {
            return Err(ContainerError::Truncated {
                needed: HEADER_LEN as u64,
                available: bytes.len(),
            });
        }
        if bytes[4] != VERSION {
            return Err(ContainerError::UnsupportedVersion(bytes[4]));
        }
        let word = |at: usize| u32::from_le_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]]);
        let sem = u64::from(word(14));
        let det = u64::from(word(18));
        let needed = HEADER_LEN as u64 + sem + det;
        let available = bytes.len() as u64;
        if available < needed {
            return Err(ContainerError::Truncated {
                needed,
                available: bytes.len(),
            });
        }
        if available > needed {
            return Err(ContainerError::TrailingBytes(available - needed));
        }
        let sem_end = HEADER_LEN + sem as usize;
        Ok(Self {
            lambda_index: bytes[5],
            orig_width: word(6),
            orig_height: word(10),
            semantic: bytes[HEADER_LEN..sem_end].to_vec(),
            detail: bytes[sem_end..].to_vec(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_only_is_22_bytes() {
        let c = BitContainer {
            lambda_index: 2,
            orig_width: 250,
            orig_height: 99,
            ..Default::default()
        };
        let b = c.to_bytes().unwrap();
        assert_eq!(b.len(), 22);
        assert_eq!(&b[..4], b"DLF1");
        assert_eq!(BitContainer::from_bytes(&b).unwrap(), c);
    }

    #[test]
    fn field_layout_is_little_endian() {
        let c = BitContainer {
            lambda_index: 3,
            orig_width: 0x0102_0304,
            orig_height: 256,
            semantic: alloc::vec![0xAA; 2],
            detail: alloc::vec![0xBB],
        };
        let b = c.to_bytes().unwrap();
        assert_eq!(
            b,
            [
                b'D', b'L', b'F', b'1', 1, 3, 4, 3, 2, 1, 0, 1, 0, 0, 2, 0, 0, 0, 1, 0, 0, 0, 0xAA, 0xAA, 0xBB
            ]
        );
    }

    #[test]
    fn typed_errors() {
        let c = BitContainer {
            semantic: alloc::vec![1, 2, 3],
            ..Default::default()
        };
        let mut b = c.to_bytes().unwrap();
        assert!(matches!(
            BitContainer::from_bytes(&b[..b.len() - 1]),
            Err(ContainerError::Truncated { .. })
        ));
        assert!(matches!(BitContainer::from_bytes(&b[..10]), Err(ContainerError::Truncated { .. })));
        b[4] = 9;
        assert_eq!(BitContainer::from_bytes(&b), Err(ContainerError::UnsupportedVersion(9)));
        b[0] = b'X';
        assert!(matches!(BitContainer::from_bytes(&b), Err(ContainerError::BadMagic(_))));
        let mut ok = c.to_bytes().unwrap();
        ok.push(0);
        assert_eq!(BitContainer::from_bytes(&ok), Err(ContainerError::TrailingBytes(1)));
    }
}
