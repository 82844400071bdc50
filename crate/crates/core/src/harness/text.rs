//! Byte-level tokenization: each of the 128 ASCII code points is its own
//! token id, so `vocab_size` is 128 and text round-trips exactly. Id 0
//! (NUL) is reserved for the anchor token and never appears in text.

use crate::{Error, Result};

pub const VOCAB_SIZE: usize = 128;
pub const ANCHOR_TOKEN: u32 = 0;
pub const LINEBREAK_TOKEN: u32 = b'\n' as u32;
pub const TRUE_TOKEN: u32 = b'T' as u32;
pub const FALSE_TOKEN: u32 = b'F' as u32;

pub fn encode_text(text: &str) -> Result<Vec<u32>> {
    text.bytes()
        .map(|b| {
            if b == 0 {
                Err(Error::Input(
                    "NUL is reserved for the anchor token and cannot be encoded".into(),
                ))
            } else if b >= VOCAB_SIZE as u8 {
                Err(Error::Input(format!("byte 0x{b:02x} is outside the ASCII vocabulary")))
            } else {
                Ok(b as u32)
            }
        })
        .collect()
}

/// Inverse of [`encode_text`]. Anchor tokens have no text form; strip them
/// before decoding.
pub fn decode_text(tokens: &[u32]) -> Result<String> {
    tokens
        .iter()
        .map(|&t| {
            if t == ANCHOR_TOKEN {
                Err(Error::Input(
                    "anchor token has no text form; strip anchors first".into(),
                ))
            } else if t >= VOCAB_SIZE as u32 {
                Err(Error::Input(format!("token {t} is outside the ASCII vocabulary")))
            } else {
                Ok(t as u8 as char)
            }
        })
        .collect()
}
