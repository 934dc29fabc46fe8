use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::{Corpus, REPLACEMENT_TOKEN};

/// The bundled default corpus.
pub const SONNETS: &[u8] = include_bytes!("../../data/sonnets.txt");

/// What `ingest` records next to the raw bytes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub source: String,
    pub bytes: usize,
    pub tokens: usize,
    /// Bytes outside ASCII, each mapped to the replacement token.
    pub replaced: usize,
    pub block_len: usize,
    pub split_seed: u64,
    pub train_blocks: Vec<usize>,
    pub val_blocks: Vec<usize>,
}

/// Reads a corpus source. Only local files are accepted; compute stages
/// never touch the network and this build ships no HTTP client.
pub fn read_source(source: Option<&Path>) -> Result<(String, Vec<u8>)> {
    let Some(path) = source else {
        return Ok(("bundled:sonnets".into(), SONNETS.to_vec()));
    };
    let s = path.to_string_lossy();
    if s.starts_with("http://") || s.starts_with("https://") {
        return Err(Error::invalid(format!("cannot fetch {s}: download it and pass the local path")));
    }
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.is_empty() {
        return Err(Error::Empty("corpus file"));
    }
    Ok((s.into_owned(), bytes))
}

/// Tokenizes and splits `bytes` into blocks of `context` tokens.
pub fn ingest(source: &str, bytes: &[u8], context: usize, split_seed: u64) -> Result<(Corpus, CorpusRecord)> {
    let corpus = Corpus::from_bytes(bytes, context, split_seed)?;
    let record = CorpusRecord {
        source: source.to_string(),
        bytes: bytes.len(),
        tokens: corpus.tokens.len(),
        replaced: corpus.tokens.iter().filter(|&&t| t == REPLACEMENT_TOKEN).count()
            - bytes.iter().filter(|&&b| b as u32 == REPLACEMENT_TOKEN).count(),
        block_len: corpus.block_len,
        split_seed,
        train_blocks: corpus.train_blocks.clone(),
        val_blocks: corpus.val_blocks.clone(),
    };
    Ok((corpus, record))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn token_count_equals_byte_count() {
        let text: Vec<u8> = (0..1_000_000u32).map(|i| b"abcdefgh \n"[(i % 10) as usize]).collect();
        let (c, r) = ingest("mem", &text, 128, 0).unwrap();
        assert_eq!(r.tokens, text.len());
        assert_eq!(c.tokens.len(), text.len());
        assert_eq!(r.replaced, 0);
    }

    #[test]
    fn non_ascii_bytes_become_the_replacement_token() {
        let text = "caf\u{e9} ok ".repeat(100);
        let (c, r) = ingest("mem", text.as_bytes(), 16, 0).unwrap();
        assert_eq!(r.replaced, 200);
        assert_eq!(c.tokens[3], 63);
        assert_eq!(c.tokens[4], 63);
    }

    #[test]
    fn reingest_gives_identical_splits() {
        let (_, a) = ingest("x", SONNETS, 128, 3).unwrap();
        let (_, b) = ingest("x", SONNETS, 128, 3).unwrap();
        assert_eq!(a, b);
        let (_, c) = ingest("x", SONNETS, 128, 4).unwrap();
        assert_ne!(a.train_blocks, c.train_blocks);
    }

    #[test]
    fn sources_are_validated() {
        assert!(read_source(Some(Path::new("https://example.org/a.txt"))).is_err());
        assert!(read_source(Some(Path::new("/nonexistent/corpus.txt"))).is_err());
        let dir = tempfile::tempdir().unwrap();
        let empty = dir.path().join("empty.txt");
        std::fs::write(&empty, b"").unwrap();
        assert!(matches!(read_source(Some(&empty)), Err(Error::Empty(_))));
        assert_eq!(read_source(None).unwrap().1.len(), SONNETS.len());
    }
}
