//! Flat key-value (TOML) experiment configs and deterministic RNG streams.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{BenchError, Result};

/// Parses a config file. Nested tables are rejected to keep configs flat.
pub fn load<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    parse(&text)
}

pub fn parse<T: DeserializeOwned>(text: &str) -> Result<T> {
    let value: toml::Table = toml::from_str(text).map_err(|e| BenchError::Config(e.to_string()))?;
    if let Some((k, _)) = value.iter().find(|(_, v)| v.is_table()) {
        return Err(BenchError::Config(format!(
            "key `{k}` is a table; configs must be flat"
        )));
    }
    toml::from_str(text).map_err(|e| BenchError::Config(e.to_string()))
}

/// SHA-256 of the canonical TOML rendering of a config.
pub fn config_hash<T: Serialize>(config: &T) -> Result<String> {
    let text = toml::to_string(config).map_err(|e| BenchError::Config(e.to_string()))?;
    let digest = Sha256::digest(text.as_bytes());
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// An independent stream derived from the root seed and a list of tags
/// (experiment part, repeat index, ...).
pub fn stream(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut h = 0x5151_u64;
    for t in tags {
        h = splitmix(h ^ splitmix(*t));
    }
    rng.set_stream(h);
    rng
}
