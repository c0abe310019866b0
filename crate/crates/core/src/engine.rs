//! The recommendation engine: context cells, lazily built item trees, and the
//! recommend / feedback round protocol.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forest::{build_units, ForestConfig};
use crate::items::{CourseItem, ItemId, ItemKey, ItemStore};
use crate::partition::{CellId, ContextPoint, PartitionConfig};
use crate::tree::{BoundParams, CellForest, NodeId};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum EngineMode {
    /// One tree per cell rooted at depth 0.
    Tree,
    /// One depth-`z` forest per cell over storage units.
    Distributed(ForestConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    pub horizon: u64,
    pub k1: f64,
    pub m: f64,
    pub k2: f64,
    pub partition: PartitionConfig,
    pub mode: EngineMode,
}

impl EngineConfig {
    /// Tree mode with the default constants `k1 = 1`, `m = 0.5`, `k2 = 2`.
    pub fn new(horizon: u64, partition: PartitionConfig) -> Self {
        EngineConfig {
            horizon,
            k1: 1.0,
            m: 0.5,
            k2: 2.0,
            partition,
            mode: EngineMode::Tree,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon < 3 {
            return Err(Error::HorizonTooSmall(self.horizon));
        }
        if !(self.k1 >= 0.0 && self.k1.is_finite()) {
            return Err(Error::InvalidConfig(format!("k1 = {} must be >= 0", self.k1)));
        }
        if !(self.m > 0.0 && self.m < 1.0) {
            return Err(Error::InvalidConfig(format!("m = {} must lie in (0, 1)", self.m)));
        }
        if !(self.k2 >= 0.0 && self.k2.is_finite()) {
            return Err(Error::InvalidConfig(format!("k2 = {} must be >= 0", self.k2)));
        }
        Ok(())
    }

    pub fn bound_params(&self) -> BoundParams {
        BoundParams {
            k1: self.k1,
            m: self.m,
            k2: self.k2,
            ln_horizon: (self.horizon as f64).ln(),
            context_gap: self.partition.context_gap(),
        }
    }
}

/// Handle pairing a recommendation with its feedback call.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Ticket(pub u64);

#[derive(Debug, Clone, PartialEq)]
pub struct Recommendation {
    pub ticket: Ticket,
    pub item: ItemId,
    pub key: ItemKey,
    pub cell: CellId,
    pub path: Vec<NodeId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Pending {
    cell: CellId,
    path: Vec<NodeId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellUsage {
    pub cell: CellId,
    pub nodes: usize,
    pub rounds: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StorageCounters {
    pub nodes: usize,
    pub items: usize,
    pub per_cell: Vec<CellUsage>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Engine {
    cfg: EngineConfig,
    params: BoundParams,
    store: ItemStore,
    cells: BTreeMap<CellId, CellForest>,
    pending: BTreeMap<Ticket, Pending>,
    busy: BTreeSet<CellId>,
    next_ticket: u64,
}

impl Engine {
    pub fn new(cfg: EngineConfig, store: ItemStore) -> Result<Self> {
        cfg.validate()?;
        if let EngineMode::Distributed(fc) = &cfg.mode {
            build_units(&store, fc)?;
        }
        Ok(Engine {
            params: cfg.bound_params(),
            cfg,
            store,
            cells: BTreeMap::new(),
            pending: BTreeMap::new(),
            busy: BTreeSet::new(),
            next_ticket: 0,
        })
    }

    pub fn config(&self) -> &EngineConfig {
        &self.cfg
    }

    pub fn bound_params(&self) -> &BoundParams {
        &self.params
    }

    pub fn store(&self) -> &ItemStore {
        &self.store
    }

    pub fn cells(&self) -> &BTreeMap<CellId, CellForest> {
        &self.cells
    }

    pub fn cell(&self, cell: &CellId) -> Option<&CellForest> {
        self.cells.get(cell)
    }

    pub fn has_pending(&self) -> bool {
        !self.pending.is_empty()
    }

    fn build_cell(&self) -> Result<CellForest> {
        match &self.cfg.mode {
            EngineMode::Tree => Ok(CellForest::single(self.store.keys().collect())),
            EngineMode::Distributed(fc) => {
                let units = build_units(&self.store, fc)?
                    .into_iter()
                    .filter(|u| !u.is_virtual)
                    .map(|u| u.items)
                    .collect();
                CellForest::distributed(fc.depth, units)
            }
        }
    }

    /// Starts one round: locates the cell, walks its tree and draws an item
    /// uniformly from the reached region.
    pub fn recommend<R: Rng + ?Sized>(&mut self, x: &ContextPoint, rng: &mut R) -> Result<Recommendation> {
        if self.store.is_empty() {
            return Err(Error::NoItems);
        }
        let cell = self.cfg.partition.locate_cell(x)?;
        if self.busy.contains(&cell) {
            return Err(Error::Protocol(format!(
                "cell {cell} already has a round awaiting feedback"
            )));
        }
        if !self.cells.contains_key(&cell) {
            let forest = self.build_cell()?;
            self.cells.insert(cell.clone(), forest);
        }
        let forest = self.cells.get_mut(&cell).expect("cell was just inserted");
        let start = forest.select_top()?;
        let path = forest.explore(start, &self.store, rng)?;
        let region = &forest.node(*path.last().expect("path is never empty")).region;
        let key = region.items[rng.gen_range(0..region.len())];

        let ticket = Ticket(self.next_ticket);
        self.next_ticket += 1;
        self.busy.insert(cell.clone());
        self.pending.insert(
            ticket,
            Pending {
                cell: cell.clone(),
                path: path.clone(),
            },
        );
        Ok(Recommendation {
            ticket,
            item: self.store.get(key).id,
            key,
            cell,
            path,
        })
    }

    /// Completes the round identified by `ticket`.
    pub fn feedback(&mut self, ticket: Ticket, reward: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&reward) {
            return Err(Error::InvalidReward(reward));
        }
        let pending = self.pending.remove(&ticket).ok_or_else(|| {
            Error::Protocol(format!("ticket {} is unknown or already used", ticket.0))
        })?;
        self.busy.remove(&pending.cell);
        let forest = self
            .cells
            .get_mut(&pending.cell)
            .expect("pending round refers to a live cell");
        forest.apply_feedback(&pending.path, reward, &self.params)
    }

    /// Adds an item to the universe and routes it into every materialized
    /// cell tree. Node statistics are not modified.
    pub fn add_course(&mut self, item: CourseItem, unit: Option<u32>) -> Result<ItemKey> {
        let root = match &self.cfg.mode {
            EngineMode::Tree => 0,
            EngineMode::Distributed(fc) => match unit {
                Some(u) if u >= 1 && u <= fc.units => u - 1,
                other => {
                    return Err(Error::InvalidItem(format!(
                        "item {} needs a unit in 1..={}, got {other:?}",
                        item.id, fc.units
                    )))
                }
            },
        };
        let key = self.store.insert(item, unit)?;
        for forest in self.cells.values_mut() {
            forest.route_item(root, key, &self.store)?;
        }
        Ok(key)
    }

    pub fn storage(&self) -> StorageCounters {
        let per_cell: Vec<CellUsage> = self
            .cells
            .iter()
            .map(|(cell, f)| CellUsage {
                cell: cell.clone(),
                nodes: f.node_count(),
                rounds: f.rounds(),
            })
            .collect();
        StorageCounters {
            nodes: per_cell.iter().map(|c| c.nodes).sum(),
            items: self.store.len(),
            per_cell,
        }
    }

    pub fn node_count(&self) -> usize {
        self.cells.values().map(CellForest::node_count).sum()
    }

    /// Hash over the statistics of every node in every cell.
    pub fn statistics_digest(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for (cell, f) in &self.cells {
            cell.hash(&mut h);
            f.statistics_digest().hash(&mut h);
        }
        h.finish()
    }

    /// Runs the forest invariant checks on every cell without a round in flight.
    pub fn check_invariants(&self) -> Result<()> {
        self.cells.keys().try_for_each(|c| self.check_cell_invariants(c))
    }

    /// Invariant checks for one cell; a cell with a round in flight or not
    /// yet created passes trivially.
    pub fn check_cell_invariants(&self, cell: &CellId) -> Result<()> {
        let Some(f) = self.cells.get(cell) else {
            return Ok(());
        };
        if self.busy.contains(cell) {
            return Ok(());
        }
        f.check_invariants()
            .map_err(|e| Error::Invariant(format!("cell {cell}: {e}")))?;
        let expected = match &self.cfg.mode {
            EngineMode::Tree => 1,
            EngineMode::Distributed(fc) => fc.width() as usize,
        };
        if f.roots().len() != expected {
            return Err(Error::Invariant(format!(
                "cell {cell} has {} top regions, expected {expected}",
                f.roots().len()
            )));
        }
        Ok(())
    }

    pub(crate) fn after_load(&mut self) {
        self.store.reindex();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn store(values: &[f64]) -> ItemStore {
        let mut s = ItemStore::new(1).unwrap();
        for (i, &v) in values.iter().enumerate() {
            s.insert(CourseItem::new(i as u64 + 1, vec![v], 1).unwrap(), Some(1))
                .unwrap();
        }
        s
    }

    fn engine(values: &[f64], n_t: u32) -> Engine {
        let p = PartitionConfig::new(1, n_t, 1.0, 1.0).unwrap();
        Engine::new(EngineConfig::new(1000, p), store(values)).unwrap()
    }

    fn x(v: f64) -> ContextPoint {
        ContextPoint::new(vec![v]).unwrap()
    }

    #[test]
    fn single_item_always_recommended() {
        let mut e = engine(&[0.3], 2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for t in 0..50 {
            let r = e.recommend(&x((t as f64 / 50.0).min(1.0)), &mut rng).unwrap();
            assert_eq!(r.item, 1);
            e.feedback(r.ticket, 0.5).unwrap();
        }
        e.check_invariants().unwrap();
    }

    #[test]
    fn one_cell_serves_all_contexts() {
        let mut e = engine(&[0.3, 0.6], 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = e.recommend(&x(0.1), &mut rng).unwrap();
        e.feedback(a.ticket, 0.5).unwrap();
        let b = e.recommend(&x(0.9), &mut rng).unwrap();
        assert_eq!(a.cell, b.cell);
        assert_eq!(e.cells().len(), 1);
    }

    #[test]
    fn uniform_choice_over_unsplit_root() {
        // Each fresh engine serves its first round from the root region.
        let mut counts = [0u32; 2];
        for seed in 0..10_000u64 {
            let mut e = engine(&[0.3, 0.6], 1);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let r = e.recommend(&x(0.5), &mut rng).unwrap();
            assert_eq!(r.path, vec![0]);
            counts[(r.item - 1) as usize] += 1;
        }
        assert!((4700..=5300).contains(&counts[0]), "{counts:?}");
    }

    #[test]
    fn protocol_errors() {
        let mut e = engine(&[0.3, 0.6], 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = e.recommend(&x(0.5), &mut rng).unwrap();
        assert!(matches!(e.recommend(&x(0.2), &mut rng), Err(Error::Protocol(_))));
        assert_eq!(e.feedback(r.ticket, 1.5), Err(Error::InvalidReward(1.5)));
        e.feedback(r.ticket, 0.5).unwrap();
        assert!(matches!(e.feedback(r.ticket, 0.5), Err(Error::Protocol(_))));
        assert!(matches!(e.feedback(Ticket(99), 0.5), Err(Error::Protocol(_))));
    }

    #[test]
    fn no_items_error() {
        let p = PartitionConfig::new(1, 1, 1.0, 1.0).unwrap();
        let mut e = Engine::new(EngineConfig::new(10, p), ItemStore::new(1).unwrap()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(e.recommend(&x(0.5), &mut rng).unwrap_err(), Error::NoItems);
    }

    #[test]
    fn horizon_is_validated() {
        let p = PartitionConfig::new(1, 1, 1.0, 1.0).unwrap();
        assert_eq!(
            Engine::new(EngineConfig::new(2, p), store(&[0.1])).unwrap_err(),
            Error::HorizonTooSmall(2)
        );
    }

    #[test]
    fn add_course_leaves_statistics_alone() {
        let mut e = engine(&[0.1, 0.4, 0.6, 0.9], 1);
        // Unexpanded root: item set grows, statistics unchanged.
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r = e.recommend(&x(0.5), &mut rng).unwrap();
        e.feedback(r.ticket, 0.2).unwrap();
        for t in 0..30 {
            let r = e.recommend(&x(0.5), &mut rng).unwrap();
            e.feedback(r.ticket, if t % 2 == 0 { 0.9 } else { 0.1 }).unwrap();
        }
        let before = e.statistics_digest();
        let nodes = e.node_count();
        for id in 100..1100u64 {
            let v = ((id * 7919) % 1000) as f64 / 1000.0;
            e.add_course(CourseItem::new(id, vec![v], 1).unwrap(), None).unwrap();
        }
        assert_eq!(e.statistics_digest(), before);
        assert_eq!(e.node_count(), nodes);
        e.check_invariants().unwrap();
        assert_eq!(
            e.add_course(CourseItem::new(100, vec![0.5], 1).unwrap(), None),
            Err(Error::DuplicateItem(100))
        );
    }

    #[test]
    fn arrival_follows_recorded_split() {
        let mut e = engine(&[0.2, 0.4, 0.6, 0.8], 1);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r = e.recommend(&x(0.5), &mut rng).unwrap();
        e.feedback(r.ticket, 0.2).unwrap();
        let root_items = e.cells().values().next().unwrap().node(0).region.len();
        let key = e
            .add_course(CourseItem::new(50, vec![0.05], 1).unwrap(), None)
            .unwrap();
        let f = e.cells().values().next().unwrap();
        let root = f.node(0);
        assert_eq!(root.region.len(), root_items + 1);
        assert_eq!(root.region.split.unwrap().threshold, 0.4);
        let [l, r] = root.children.unwrap();
        assert!(f.node(l).region.items.contains(&key));
        assert!(!f.node(r).region.items.contains(&key));
    }
}
