//! Byte-level tokenizer with a handful of special tokens.
//!
//! The vocabulary is fixed (256 byte values plus specials), so pre-training and
//! fine-tuning always agree on embedding shapes regardless of the corpus.

use alloc::string::String;
use alloc::vec::Vec;

use crate::rationale::SEPARATOR;

pub type TokenId = usize;

pub const PAD: TokenId = 256;
pub const BOS: TokenId = 257;
pub const EOS: TokenId = 258;
pub const SEP: TokenId = 259;
pub const VOCAB_SIZE: usize = 260;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ByteTokenizer;

impl ByteTokenizer {
    pub fn vocab_size(&self) -> usize {
        VOCAB_SIZE
    }

    /// Encodes text; every literal separator becomes a single [`SEP`] token.
    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        let mut out = Vec::with_capacity(text.len());
        for (i, part) in text.split(SEPARATOR).enumerate() {
            if i > 0 {
                out.push(SEP);
            }
            out.extend(part.bytes().map(TokenId::from));
        }
        out
    }

    /// Target sequence for teacher forcing: the text bytes followed by [`EOS`].
    pub fn encode_target(&self, text: &str) -> Vec<TokenId> {
        let mut ids = self.encode(text);
        ids.push(EOS);
        ids
    }

    /// Inverse of [`encode`](Self::encode). Stops at the first [`EOS`]; skips
    /// [`BOS`] and [`PAD`].
    pub fn decode(&self, ids: &[TokenId]) -> String {
        let mut bytes = Vec::with_capacity(ids.len());
        for &id in ids {
            match id {
                EOS => break,
                BOS | PAD => {}
                SEP => bytes.extend_from_slice(SEPARATOR.as_bytes()),
                b if b < 256 => bytes.push(b as u8),
                _ => {}
            }
        }
        String::from_utf8_lossy(&bytes).into_owned()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sample::Stance;

    #[test]
    fn separator_is_one_token() {
        let t = ByteTokenizer;
        let ids = t.encode("a <sep> b");
        assert_eq!(ids, [b'a' as usize, b' ' as usize, SEP, b' ' as usize, b'b' as usize]);
        assert_eq!(t.decode(&ids), "a <sep> b");
    }

    #[test]
    fn labels_round_trip() {
        let t = ByteTokenizer;
        for s in Stance::BOTH {
            let ids = t.encode_target(s.as_str());
            assert_eq!(t.decode(&ids).parse::<Stance>().unwrap(), s);
        }
    }

    #[test]
    fn decode_stops_at_eos() {
        let t = ByteTokenizer;
        assert_eq!(t.decode(&[BOS, b'h' as usize, b'i' as usize, EOS, b'x' as usize]), "hi");
    }
}
