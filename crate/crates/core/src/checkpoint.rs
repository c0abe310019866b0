//! Versioned binary checkpoints: an 8-byte magic, a format version, a kind
//! tag and a bincode payload. Floats round-trip exactly, infinities included.

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::engine::Engine;
use crate::error::{Error, Result};
use crate::items::ItemStore;

pub const MAGIC: &[u8; 8] = b"RHTCKPT\0";
pub const VERSION: u32 = 1;
const HEADER: usize = 8 + 4 + 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Engine = 1,
    Simulation = 2,
    Store = 3,
}

impl Kind {
    fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            1 => Ok(Kind::Engine),
            2 => Ok(Kind::Simulation),
            3 => Ok(Kind::Store),
            t => Err(Error::Checkpoint(format!("unknown payload kind {t}"))),
        }
    }
}

pub fn encode<T: Serialize>(kind: Kind, value: &T) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(4096);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(kind as u8);
    bincode::serialize_into(&mut out, value).map_err(|e| Error::Checkpoint(e.to_string()))?;
    Ok(out)
}

/// Reads and validates the header.
pub fn peek_kind(bytes: &[u8]) -> Result<Kind> {
    if bytes.len() < HEADER || &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version} (expected {VERSION})"
        )));
    }
    Kind::from_tag(bytes[12])
}

pub fn decode<T: DeserializeOwned>(kind: Kind, bytes: &[u8]) -> Result<T> {
    let found = peek_kind(bytes)?;
    if found != kind {
        return Err(Error::Checkpoint(format!("expected a {kind:?} checkpoint, found {found:?}")));
    }
    bincode::deserialize(&bytes[HEADER..]).map_err(|e| Error::Checkpoint(e.to_string()))
}

pub fn save_engine(engine: &Engine) -> Result<Vec<u8>> {
    encode(Kind::Engine, engine)
}

pub fn load_engine(bytes: &[u8]) -> Result<Engine> {
    let mut e: Engine = decode(Kind::Engine, bytes)?;
    e.after_load();
    Ok(e)
}

pub fn save_store(store: &ItemStore) -> Result<Vec<u8>> {
    encode(Kind::Store, store)
}

pub fn load_store(bytes: &[u8]) -> Result<ItemStore> {
    let mut s: ItemStore = decode(Kind::Store, bytes)?;
    s.reindex();
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_is_checked() {
        let bytes = encode(Kind::Store, &ItemStore::new(2).unwrap()).unwrap();
        assert_eq!(peek_kind(&bytes).unwrap(), Kind::Store);
        assert!(matches!(load_engine(&bytes), Err(Error::Checkpoint(_))));
        let mut bad = bytes.clone();
        bad[8] = 9;
        assert!(peek_kind(&bad).is_err());
        assert!(peek_kind(b"RHT").is_err());
    }

    #[test]
    fn infinities_round_trip() {
        let v = vec![f64::INFINITY, f64::NEG_INFINITY, 0.1 + 0.2];
        let back: Vec<f64> = decode(Kind::Engine, &encode(Kind::Engine, &v).unwrap()).unwrap();
        assert_eq!(v, back);
    }
}
