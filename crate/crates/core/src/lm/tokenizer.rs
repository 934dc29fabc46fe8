/// Token substituted for every byte outside ASCII (`'?'`).
pub const REPLACEMENT_TOKEN: u32 = 63;

/// Byte-level ASCII tokenizer: bytes below 128 map to themselves.
pub fn tokenize(text: &[u8]) -> Vec<u32> {
    text.iter()
        .map(|&b| if b < 128 { b as u32 } else { REPLACEMENT_TOKEN })
        .collect()
}

pub fn detokenize(tokens: &[u32]) -> String {
    tokens
        .iter()
        .map(|&t| char::from(u8::try_from(t).ok().filter(|b| b.is_ascii()).unwrap_or(b'?')))
        .collect()
}
