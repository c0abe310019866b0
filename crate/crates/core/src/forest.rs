//! Storage-unit layout for the distributed variant and its sizing rules.
//!
//! `d` real units sit at depth `z` with `2^(z-1) < d <= 2^z`; the remaining
//! `2^z - d` slots are virtual (empty, Bound fixed at 0).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::items::{ItemId, ItemKey, ItemStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StorageUnit {
    /// 1-based unit id in `1..=2^z`.
    pub id: u32,
    pub items: Vec<ItemKey>,
    pub is_virtual: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ForestConfig {
    /// Number of real storage units.
    pub units: u32,
    /// Depth of the top regions.
    pub depth: u32,
}

impl ForestConfig {
    /// Explicit depth; requires `units <= 2^depth`.
    pub fn new(units: u32, depth: u32) -> Result<Self> {
        if units == 0 {
            return Err(Error::InvalidConfig("unit count must be positive".into()));
        }
        if depth >= 30 || (1u64 << depth) < units as u64 {
            return Err(Error::InvalidConfig(format!(
                "{units} units do not fit depth {depth}"
            )));
        }
        Ok(ForestConfig { units, depth })
    }

    /// Smallest depth that fits `units`.
    pub fn minimal(units: u32) -> Result<Self> {
        Self::new(units, depth_for_units(units)?)
    }

    pub fn width(&self) -> u32 {
        1 << self.depth
    }

    pub fn virtual_count(&self) -> u32 {
        self.width() - self.units
    }
}

/// Smallest `z` with `2^z >= d`.
pub fn depth_for_units(d: u32) -> Result<u32> {
    if d == 0 {
        return Err(Error::InvalidConfig("unit count must be positive".into()));
    }
    Ok(d.next_power_of_two().trailing_zeros())
}

/// `(T / ln T)^((d_X + alpha d_C) / (d_X + alpha (d_C + 3)))`: the largest
/// admissible number of top regions for horizon `T`.
pub fn unit_capacity(horizon: u64, alpha: f64, d_x: usize, d_c: usize) -> Result<f64> {
    if horizon < 3 {
        return Err(Error::HorizonTooSmall(horizon));
    }
    let t = horizon as f64;
    let (dx, dc) = (d_x as f64, d_c as f64);
    Ok((t / t.ln()).powf((dx + alpha * dc) / (dx + alpha * (dc + 3.0))))
}

/// `floor(log2(unit_capacity))`, clamped at 0.
pub fn optimal_unit_exponent(horizon: u64, alpha: f64, d_x: usize, d_c: usize) -> Result<u32> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::InvalidConfig(format!(
            "alpha = {alpha} must lie in (0, 1]"
        )));
    }
    let cap = unit_capacity(horizon, alpha, d_x, d_c)?;
    Ok(cap.log2().floor().max(0.0) as u32)
}

/// Whether `d <= 2^depth_for_units(d) <= unit_capacity(T)`.
pub fn check_unit_condition(d: u32, horizon: u64, alpha: f64, d_x: usize, d_c: usize) -> bool {
    match (depth_for_units(d), unit_capacity(horizon, alpha, d_x, d_c)) {
        (Ok(z), Ok(cap)) => d as u64 <= 1u64 << z && (1u64 << z) as f64 <= cap,
        _ => false,
    }
}

/// How synthetic item streams are spread over units.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShardPolicy {
    RoundRobin,
    Hash,
}

impl std::str::FromStr for ShardPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "round-robin" => Ok(ShardPolicy::RoundRobin),
            "hash" => Ok(ShardPolicy::Hash),
            other => Err(Error::InvalidConfig(format!(
                "unknown shard policy `{other}` (round-robin | hash)"
            ))),
        }
    }
}

impl ShardPolicy {
    /// 1-based unit for the `position`-th item with id `id`.
    pub fn assign(&self, id: ItemId, position: u64, units: u32) -> u32 {
        let slot = match self {
            ShardPolicy::RoundRobin => position,
            ShardPolicy::Hash => splitmix64(id),
        };
        (slot % units as u64) as u32 + 1
    }
}

fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE5_E9B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Groups the store's items by their unit and pads to `2^z` slots.
pub fn build_units(store: &ItemStore, cfg: &ForestConfig) -> Result<Vec<StorageUnit>> {
    let mut units: Vec<StorageUnit> = (1..=cfg.width())
        .map(|id| StorageUnit {
            id,
            items: Vec::new(),
            is_virtual: id > cfg.units,
        })
        .collect();
    for key in store.keys() {
        let unit = store.unit_of(key).ok_or_else(|| {
            Error::InvalidConfig(format!(
                "item {} has no storage unit",
                store.get(key).id
            ))
        })?;
        if unit == 0 || unit > cfg.units {
            return Err(Error::InvalidConfig(format!(
                "item {} is assigned to unit {unit}, valid units are 1..={}",
                store.get(key).id,
                cfg.units
            )));
        }
        units[unit as usize - 1].items.push(key);
    }
    if let Some(u) = units.iter().find(|u| !u.is_virtual && u.items.is_empty()) {
        return Err(Error::InvalidConfig(format!("storage unit {} is empty", u.id)));
    }
    Ok(units)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn depth_examples() {
        assert_eq!(depth_for_units(3).unwrap(), 2);
        assert_eq!(ForestConfig::minimal(3).unwrap().virtual_count(), 1);
        assert_eq!(depth_for_units(1).unwrap(), 0);
        assert_eq!(depth_for_units(4).unwrap(), 2);
        assert_eq!(ForestConfig::minimal(4).unwrap().virtual_count(), 0);
        assert_eq!(depth_for_units(5).unwrap(), 3);
        assert!(depth_for_units(0).is_err());
    }

    #[test]
    fn optimal_exponent_examples() {
        // (10^4 / ln 10^4)^(5/8) = 78.9455...
        let cap = unit_capacity(10_000, 1.0, 2, 3).unwrap();
        assert!((cap - 78.945_558_224_544_18).abs() < 1e-9);
        assert_eq!(optimal_unit_exponent(10_000, 1.0, 2, 3).unwrap(), 6);
        // (3 / ln 3)^(2/5) = 1.4945...
        assert_eq!(optimal_unit_exponent(3, 1.0, 1, 1).unwrap(), 0);
        assert_eq!(optimal_unit_exponent(100_000, 1.0, 2, 3).unwrap(), 8);
        assert!(optimal_unit_exponent(10_000, 0.0, 2, 3).is_err());
        assert_eq!(
            optimal_unit_exponent(2, 1.0, 2, 3),
            Err(Error::HorizonTooSmall(2))
        );
    }

    #[test]
    fn unit_condition_examples() {
        for t in [3, 10, 1000, 1_000_000] {
            assert!(check_unit_condition(1, t, 1.0, 2, 3));
        }
        assert!(!check_unit_condition(1024, 10_000, 1.0, 2, 3));
        assert!(check_unit_condition(64, 10_000, 1.0, 2, 3));
        assert!(!check_unit_condition(65, 10_000, 1.0, 2, 3));
    }

    #[test]
    fn hash_sharding_is_balanced() {
        let mut counts = [0u32; 3];
        for id in 0..10_000u64 {
            counts[ShardPolicy::Hash.assign(id, id, 3) as usize - 1] += 1;
        }
        let mean = 10_000.0 / 3.0;
        for c in counts {
            assert!((c as f64 - mean).abs() <= 0.1 * mean, "{counts:?}");
        }
    }

    #[test]
    fn round_robin_sharding() {
        let units: Vec<u32> = (0..5).map(|p| ShardPolicy::RoundRobin.assign(100 + p, p, 2)).collect();
        assert_eq!(units, vec![1, 2, 1, 2, 1]);
    }
}
