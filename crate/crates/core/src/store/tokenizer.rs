//! Byte-level tokenizer: token id = byte value, vocabulary of 256.

use crate::error::{KanacError, Result};

pub const BYTE_VOCAB: usize = 256;

/// One token per input byte.
pub fn encode_bytes(text: &[u8]) -> Vec<u32> {
    text.iter().map(|&b| b as u32).collect()
}

/// Inverse of `encode_bytes`; ids above 255 have no byte form.
pub fn decode_bytes(ids: &[u32]) -> Result<Vec<u8>> {
    ids.iter()
        .enumerate()
        .map(|(i, &id)| {
            u8::try_from(id).map_err(|_| {
                KanacError::validation(format!("id {id} at offset {i} is not a byte token"))
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encodes_ascii() {
        assert_eq!(encode_bytes(b"AB"), vec![65, 66]);
        assert_eq!(encode_bytes(b""), Vec::<u32>::new());
    }

    #[test]
    fn round_trips_arbitrary_bytes() {
        let data: Vec<u8> = (0..=255u8).chain([7, 200, 0, 255]).collect();
        assert_eq!(decode_bytes(&encode_bytes(&data)).unwrap(), data);
    }

    #[test]
    fn rejects_reserved_ids() {
        assert!(decode_bytes(&[65, 256]).is_err());
    }
}
