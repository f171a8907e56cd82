//! Named seed sub-streams and content digests.
//!
//! A global seed `s` expands into a stream seed for `name` as the first eight
//! bytes (little-endian) of `sha256(s as u64 LE || name as UTF-8)`.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const DATA_SHUFFLE: &str = "data-shuffle";
pub const INIT: &str = "init";
pub const NOISE: &str = "noise";
pub const SAMPLER: &str = "sampler";

pub fn derive_seed(global: u64, name: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(global.to_le_bytes());
    h.update(name.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

/// The four standard streams derived from one global seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedStreams {
    pub global: u64,
    pub data_shuffle: u64,
    pub init: u64,
    pub noise: u64,
    pub sampler: u64,
}

impl SeedStreams {
    pub fn new(global: u64) -> Self {
        SeedStreams {
            global,
            data_shuffle: derive_seed(global, DATA_SHUFFLE),
            init: derive_seed(global, INIT),
            noise: derive_seed(global, NOISE),
            sampler: derive_seed(global, SAMPLER),
        }
    }
}

pub fn digest_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(digest_hex(&bytes))
}
