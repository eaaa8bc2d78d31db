//! Byte-level tokenizer: ids 0..=255 are raw bytes, four reserved ids follow.

use crate::error::{Error, Result};

pub const PAD: u32 = 256;
pub const EOS: u32 = 257;
pub const YES: u32 = 258;
pub const NO: u32 = 259;
pub const VOCAB_SIZE: usize = 260;

pub fn encode(text: &[u8]) -> Vec<u32> {
    text.iter().map(|&b| b as u32).collect()
}

/// Inverse of [`encode`]; special ids are rejected.
pub fn decode(tokens: &[u32]) -> Result<Vec<u8>> {
    tokens
        .iter()
        .map(|&t| {
            u8::try_from(t).map_err(|_| Error::TokenOutOfRange {
                id: t,
                vocab: 256,
            })
        })
        .collect()
}

pub fn is_special(id: u32) -> bool {
    (256..VOCAB_SIZE as u32).contains(&id)
}

/// Debug rendering; specials print as `⟨PAD⟩`, `⟨EOS⟩`, `⟨YES⟩`, `⟨NO⟩`.
pub fn render(tokens: &[u32]) -> String {
    let mut out = String::new();
    let mut bytes = Vec::new();
    let flush = |bytes: &mut Vec<u8>, out: &mut String| {
        out.push_str(&String::from_utf8_lossy(bytes));
        bytes.clear();
    };
    for &t in tokens {
        let special = match t {
            PAD => "⟨PAD⟩",
            EOS => "⟨EOS⟩",
            YES => "⟨YES⟩",
            NO => "⟨NO⟩",
            b if b < 256 => {
                bytes.push(b as u8);
                continue;
            }
            _ => "⟨?⟩",
        };
        flush(&mut bytes, &mut out);
        out.push_str(special);
    }
    flush(&mut bytes, &mut out);
    out
}

/// Class token for a binary label.
pub fn label_token(label: u8) -> u32 {
    if label == 1 {
        YES
    } else {
        NO
    }
}
