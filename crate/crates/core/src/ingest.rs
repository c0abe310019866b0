//! Item files: one item per line, `id,f1,...,fk[,unit=K]`. Blank lines and
//! lines starting with `#` are skipped.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::forest::ShardPolicy;
use crate::items::{CourseItem, ItemStore};

#[derive(Debug, Clone, PartialEq)]
pub struct ItemLine {
    pub line: usize,
    pub item: CourseItem,
    pub unit: Option<u32>,
}

fn bad(line: usize, msg: impl std::fmt::Display) -> Error {
    Error::InvalidItem(format!("line {line}: {msg}"))
}

/// Parses item lines. `d_c` is taken from the first item when not given.
pub fn parse_items(text: &str, d_c: Option<usize>) -> Result<Vec<ItemLine>> {
    let mut out = Vec::new();
    let mut seen: HashMap<u64, usize> = HashMap::new();
    let mut d_c = d_c;
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let s = raw.trim();
        if s.is_empty() || s.starts_with('#') {
            continue;
        }
        let mut fields: Vec<&str> = s.split(',').map(str::trim).collect();
        let unit = match fields.last().and_then(|f| f.strip_prefix("unit=")) {
            Some(u) => {
                let u: u32 = u.parse().map_err(|_| bad(line, format!("bad unit `{u}`")))?;
                if u == 0 {
                    return Err(bad(line, "units are numbered from 1"));
                }
                fields.pop();
                Some(u)
            }
            None => None,
        };
        let id: u64 = fields[0]
            .parse()
            .map_err(|_| bad(line, format!("bad item id `{}`", fields[0])))?;
        let features = fields[1..]
            .iter()
            .map(|f| f.parse::<f64>().map_err(|_| bad(line, format!("bad feature `{f}`"))))
            .collect::<Result<Vec<f64>>>()?;
        if features.is_empty() {
            return Err(bad(line, "no features"));
        }
        let dim = *d_c.get_or_insert(features.len());
        let item = CourseItem::new(id, features, dim).map_err(|e| bad(line, e))?;
        if let Some(first) = seen.insert(id, line) {
            return Err(bad(line, format!("duplicate item id {id} (first seen on line {first})")));
        }
        out.push(ItemLine { line, item, unit });
    }
    Ok(out)
}

/// Builds a store, sharding items without an explicit unit across `units`.
pub fn build_store(lines: Vec<ItemLine>, d_c: usize, shard: Option<(ShardPolicy, u32)>) -> Result<ItemStore> {
    let mut store = ItemStore::new(d_c)?;
    for (pos, l) in lines.into_iter().enumerate() {
        let unit = match (l.unit, shard) {
            (Some(u), Some((_, d))) if u > d => {
                return Err(bad(l.line, format!("unit {u} exceeds the {d} configured units")))
            }
            (Some(u), _) => Some(u),
            (None, Some((p, d))) => Some(p.assign(l.item.id, pos as u64, d)),
            (None, None) => None,
        };
        store.insert(l.item, unit).map_err(|e| bad(l.line, e))?;
    }
    Ok(store)
}

/// Item count per unit, `1..=units`.
pub fn unit_sizes(store: &ItemStore, units: u32) -> Vec<usize> {
    let mut sizes = vec![0; units as usize];
    for k in store.keys() {
        if let Some(u) = store.unit_of(k) {
            if (1..=units).contains(&u) {
                sizes[u as usize - 1] += 1;
            }
        }
    }
    sizes
}
