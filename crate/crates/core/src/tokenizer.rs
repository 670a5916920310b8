//! Byte-level tokenizer: ids 0..=255 are raw bytes, followed by two specials.

use crate::error::{Error, Result};

pub const BOS: u32 = 256;
pub const EOS: u32 = 257;
pub const VOCAB_SIZE: usize = 258;

pub fn encode(text: &str) -> Vec<u32> {
    text.bytes().map(u32::from).collect()
}

/// Decodes byte ids, dropping specials; invalid UTF-8 is replaced.
pub fn decode(ids: &[u32]) -> String {
    let bytes: Vec<u8> = ids.iter().filter(|&&t| t < 256).map(|&t| t as u8).collect();
    String::from_utf8_lossy(&bytes).into_owned()
}

/// Printable form of a single token for per-token displays.
pub fn token_text(id: u32) -> String {
    match id {
        BOS => "<bos>".into(),
        EOS => "<eos>".into(),
        b if b < 128 => char::from(b as u8).to_string(),
        b if b < 256 => format!("<{b:02x}>"),
        other => format!("<{other}>"),
    }
}

/// Parses a whitespace-separated list of token ids.
pub fn parse_ids(s: &str) -> Result<Vec<u32>> {
    s.split_whitespace()
        .map(|w| w.parse::<u32>().map_err(|_| Error::Input(format!("bad token id {w:?}"))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let s = "héllo, wörld <&>";
        assert_eq!(decode(&encode(s)), s);
        assert_eq!(encode("AB"), vec![65, 66]);
        assert_eq!(decode(&[BOS, 104, 105, EOS]), "hi");
    }

    #[test]
    fn token_texts() {
        assert_eq!(token_text(97), "a");
        assert_eq!(token_text(200), "<c8>");
        assert_eq!(token_text(BOS), "<bos>");
        assert_eq!(parse_ids("1 2\n3").unwrap(), vec![1, 2, 3]);
        assert!(parse_ids("1 x").is_err());
    }
}
