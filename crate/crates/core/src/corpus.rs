//! Byte-level corpora: every byte of a file is one token in `0..256`.

use std::fs;
use std::path::Path;

use crate::error::{ensure, Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ByteCorpus {
    pub tokens: Vec<u32>,
    /// Index of the first validation token.
    pub split: usize,
}

impl ByteCorpus {
    /// The first `floor(len * fraction)` bytes train, the rest validate.
    pub fn from_bytes(bytes: &[u8], fraction: f64) -> Result<Self> {
        ensure!(!bytes.is_empty(), "corpus is empty");
        ensure!(
            (0.0..=1.0).contains(&fraction),
            "split fraction {fraction} is outside [0, 1]"
        );
        let split = ((bytes.len() as f64) * fraction).floor() as usize;
        Ok(Self {
            tokens: bytes.iter().map(|&b| u32::from(b)).collect(),
            split: split.min(bytes.len()),
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn train(&self) -> &[u32] {
        &self.tokens[..self.split]
    }

    pub fn validation(&self) -> &[u32] {
        &self.tokens[self.split..]
    }
}

pub fn load_byte_corpus(path: &Path, fraction: f64) -> Result<ByteCorpus> {
    let bytes = fs::read(path).map_err(|e| {
        Error::Config(format!("cannot read corpus {}: {e}", path.display()))
    })?;
    if bytes.is_empty() {
        return Err(Error::Config(format!("corpus {} is empty", path.display())));
    }
    ByteCorpus::from_bytes(&bytes, fraction)
}
