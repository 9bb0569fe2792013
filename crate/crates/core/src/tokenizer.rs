//! Byte-level tokenizer.
//!
//! Ids 0..3 are reserved (pad, begin-of-sequence, end-of-sequence); byte `b`
//! maps to id `b + 3`, giving a vocabulary of 259 ids. Encoding never emits a
//! reserved id, so `decode(encode(s)) == s` for every string.

use thiserror::Error;

pub type TokenId = u32;

pub const PAD_ID: TokenId = 0;
pub const BOS_ID: TokenId = 1;
pub const EOS_ID: TokenId = 2;
pub const RESERVED: usize = 3;
pub const BYTE_VOCAB_SIZE: usize = 256 + RESERVED;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TokenizerError {
    #[error("invalid UTF-8 at byte offset {offset}")]
    InvalidUtf8 { offset: usize },
    #[error("token id {id} out of range for vocabulary of {vocab_size}")]
    IdOutOfRange { id: TokenId, vocab_size: usize },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ByteTokenizer;

impl ByteTokenizer {
    pub fn new() -> Self {
        Self
    }

    pub fn vocab_size(&self) -> usize {
        BYTE_VOCAB_SIZE
    }

    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        text.bytes().map(|b| b as TokenId + RESERVED as TokenId).collect()
    }

    /// Encodes raw bytes after checking they are valid UTF-8.
    pub fn encode_bytes(&self, bytes: &[u8]) -> Result<Vec<TokenId>, TokenizerError> {
        let text = std::str::from_utf8(bytes).map_err(|e| TokenizerError::InvalidUtf8 {
            offset: e.valid_up_to(),
        })?;
        Ok(self.encode(text))
    }

    /// Inverse of [`encode`](Self::encode). Reserved ids render as nothing.
    ///
    /// Arbitrary id sequences (e.g. sampled output) may form invalid UTF-8;
    /// such bytes are replaced with U+FFFD.
    pub fn decode(&self, ids: &[TokenId]) -> Result<String, TokenizerError> {
        let bytes = self.decode_bytes(ids)?;
        Ok(match String::from_utf8(bytes) {
            Ok(s) => s,
            Err(e) => String::from_utf8_lossy(e.as_bytes()).into_owned(),
        })
    }

    pub fn decode_bytes(&self, ids: &[TokenId]) -> Result<Vec<u8>, TokenizerError> {
        let mut out = Vec::with_capacity(ids.len());
        for &id in ids {
            if id as usize >= BYTE_VOCAB_SIZE {
                return Err(TokenizerError::IdOutOfRange {
                    id,
                    vocab_size: BYTE_VOCAB_SIZE,
                });
            }
            if id as usize >= RESERVED {
                out.push((id as usize - RESERVED) as u8);
            }
        }
        Ok(out)
    }
}
