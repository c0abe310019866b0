//! Per-cell hierarchical item trees with optimistic Bound / Estimation statistics.
//!
//! A [`CellForest`] stores every materialized node of one context cell in an
//! arena. The plain tree variant has a single root holding the whole item
//! universe; the distributed variant starts with `2^z` roots at depth `z`, one
//! per storage unit, padded with virtual units that are never selected.
//!
//! One round is `explore` (descend by Estimation, materialize the children of
//! the reached node) followed by `apply_feedback` (update counts, means and
//! Bounds on the path, then refresh Estimations bottom-up along the path).
//! Nodes off the path keep their statistics: their Bounds only depend on their
//! own counts and the fixed horizon.

use std::cell::RefCell;
use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::items::{split_region, ItemKey, ItemStore, Region};

pub type NodeId = u32;

/// Constants entering the Bound of every node of a cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundParams {
    pub k1: f64,
    pub m: f64,
    pub k2: f64,
    /// `ln T` for the configured horizon `T`.
    pub ln_horizon: f64,
    pub context_gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeNode {
    pub depth: u32,
    pub parent: Option<NodeId>,
    pub children: Option<[NodeId; 2]>,
    /// Number of rounds whose path passed through this node.
    pub visits: u64,
    /// Empirical mean reward; meaningful once `visits >= 1`.
    pub mean: f64,
    pub bound: f64,
    pub estimate: f64,
    pub is_virtual: bool,
    pub region: Region,
}

impl TreeNode {
    fn fresh(depth: u32, parent: Option<NodeId>, items: Vec<ItemKey>) -> Self {
        TreeNode {
            depth,
            parent,
            children: None,
            visits: 0,
            mean: 0.0,
            bound: f64::INFINITY,
            estimate: f64::INFINITY,
            is_virtual: false,
            region: Region::new(items),
        }
    }

    fn virtual_unit(depth: u32) -> Self {
        TreeNode {
            bound: 0.0,
            estimate: 0.0,
            is_virtual: true,
            ..TreeNode::fresh(depth, None, Vec::new())
        }
    }

    pub fn is_leaf(&self) -> bool {
        self.children.is_none()
    }

    /// Estimation as seen by a parent during descent. A non-virtual node whose
    /// region is empty can never be chosen and reads as `-inf`; an item
    /// arriving later makes it eligible again without touching its statistics.
    #[inline]
    pub fn effective_estimate(&self) -> f64 {
        if !self.is_virtual && self.region.is_empty() {
            f64::NEG_INFINITY
        } else {
            self.estimate
        }
    }
}

/// Bound of a node: `+inf` while unvisited, otherwise
/// `mean + sqrt(k2 ln T / visits) + k1 m^depth + context_gap`.
pub fn bound_value(node: &TreeNode, p: &BoundParams) -> f64 {
    if node.visits == 0 {
        return f64::INFINITY;
    }
    let n = node.visits as f64;
    node.mean + (p.k2 * p.ln_horizon / n).sqrt() + diameter_term(p, node.depth) + p.context_gap
}

thread_local! {
    // (k1 bits, m bits, k1 m^d for d = 0..)
    static DIAM_TERMS: RefCell<(u64, u64, Vec<f64>)> = const { RefCell::new((0, 0, Vec::new())) };
}

/// `k1 m^depth`, memoized per thread. `powi` gets slow on the very deep
/// singleton chains long runs produce.
fn diameter_term(p: &BoundParams, depth: u32) -> f64 {
    const CACHED: u32 = 1 << 16;
    if depth >= CACHED {
        return p.k1 * p.m.powi(i32::try_from(depth).unwrap_or(i32::MAX));
    }
    DIAM_TERMS.with(|cell| {
        let mut cache = cell.borrow_mut();
        let (k1, m) = (p.k1.to_bits(), p.m.to_bits());
        if cache.0 != k1 || cache.1 != m {
            *cache = (k1, m, Vec::new());
        }
        let terms = &mut cache.2;
        while terms.len() <= depth as usize {
            let d = terms.len() as i32;
            terms.push(p.k1 * p.m.powi(d));
        }
        terms[depth as usize]
    })
}

/// Estimation of a node from its Bound and, when materialized, its children's
/// Estimations: `min(B, max(E_left, E_right))`, or `B` for a leaf.
pub fn estimation_value(bound: f64, children: Option<(f64, f64)>) -> f64 {
    match children {
        None => bound,
        Some((l, r)) => bound.min(l.max(r)),
    }
}

/// Folds one reward into the running mean. `visits` must already count it.
pub fn update_mean(node: &mut TreeNode, reward: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&reward) {
        return Err(Error::InvalidReward(reward));
    }
    if node.visits == 0 {
        return Err(Error::Protocol(
            "mean update before the visit count was incremented".into(),
        ));
    }
    if node.visits == 1 {
        node.mean = reward;
    } else {
        let n = node.visits as f64;
        node.mean = ((n - 1.0) * node.mean + reward) / n;
    }
    Ok(())
}

/// All materialized nodes of one context cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellForest {
    top_depth: u32,
    roots: Vec<NodeId>,
    nodes: Vec<TreeNode>,
    rounds: u64,
}

impl CellForest {
    /// A single tree whose root region is `items`.
    pub fn single(items: Vec<ItemKey>) -> Self {
        CellForest {
            top_depth: 0,
            roots: vec![0],
            nodes: vec![TreeNode::fresh(0, None, items)],
            rounds: 0,
        }
    }

    /// A depth-`z` forest over storage units. `units[i]` is the item set of unit
    /// `i + 1`; units `len + 1 ..= 2^z` become virtual.
    pub fn distributed(z: u32, units: Vec<Vec<ItemKey>>) -> Result<Self> {
        let width = 1u64
            .checked_shl(z)
            .filter(|w| *w <= u32::MAX as u64 / 4)
            .ok_or_else(|| Error::InvalidConfig(format!("forest depth z = {z} is too large")))?;
        let d = units.len() as u64;
        if d == 0 || d > width {
            return Err(Error::InvalidConfig(format!(
                "{d} storage units do not fit 2^{z} = {width} top regions"
            )));
        }
        if let Some(k) = units.iter().position(|u| u.is_empty()) {
            return Err(Error::InvalidConfig(format!(
                "storage unit {} is empty; only padding units may be empty",
                k + 1
            )));
        }
        let mut nodes: Vec<TreeNode> = units
            .into_iter()
            .map(|items| TreeNode::fresh(z, None, items))
            .collect();
        nodes.extend((d..width).map(|_| TreeNode::virtual_unit(z)));
        Ok(CellForest {
            top_depth: z,
            roots: (0..width as NodeId).collect(),
            nodes,
            rounds: 0,
        })
    }

    pub fn top_depth(&self) -> u32 {
        self.top_depth
    }

    pub fn roots(&self) -> &[NodeId] {
        &self.roots
    }

    pub fn node(&self, id: NodeId) -> &TreeNode {
        &self.nodes[id as usize]
    }

    pub fn nodes(&self) -> &[TreeNode] {
        &self.nodes
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Rounds completed in this cell, i.e. the size of the explored set.
    pub fn rounds(&self) -> u64 {
        self.rounds
    }

    /// Rank `i` of a node in the `(h, i)` numbering (roots ranked `1..=2^z`).
    /// `None` once the rank no longer fits in 128 bits.
    pub fn rank(&self, id: NodeId) -> Option<u128> {
        let mut sides = Vec::new();
        let mut cur = id;
        while let Some(p) = self.node(cur).parent {
            let [l, _] = self.node(p).children.expect("parent has children");
            sides.push(cur != l);
            cur = p;
        }
        let mut rank = self.roots.iter().position(|&r| r == cur)? as u128 + 1;
        for right in sides.into_iter().rev() {
            rank = rank.checked_mul(2)?.checked_sub(if right { 0 } else { 1 })?;
        }
        Some(rank)
    }

    /// The top region with the largest Estimation; earliest rank wins ties.
    pub fn select_top(&self) -> Result<NodeId> {
        let mut best: Option<NodeId> = None;
        for &r in &self.roots {
            let node = self.node(r);
            if node.is_virtual || node.region.is_empty() {
                continue;
            }
            match best {
                Some(b) if self.node(b).estimate >= node.estimate => {}
                _ => best = Some(r),
            }
        }
        best.ok_or(Error::NoItems)
    }

    /// Descends from `start` by Estimation until a node without materialized
    /// children, materializes its two children and returns the path.
    ///
    /// Equal child Estimations are broken by a fair coin (heads = left child).
    pub fn explore<R: Rng + ?Sized>(
        &mut self,
        start: NodeId,
        store: &ItemStore,
        rng: &mut R,
    ) -> Result<Vec<NodeId>> {
        let first = self.node(start);
        if first.is_virtual || first.region.is_empty() {
            return Err(Error::NoItems);
        }
        let mut path = vec![start];
        let mut cur = start;
        while let Some([l, r]) = self.node(cur).children {
            let el = self.node(l).effective_estimate();
            let er = self.node(r).effective_estimate();
            cur = if el > er {
                l
            } else if el < er {
                r
            } else if rng.gen_bool(0.5) {
                l
            } else {
                r
            };
            path.push(cur);
        }
        self.materialize_children(cur, store)?;
        Ok(path)
    }

    fn materialize_children(&mut self, id: NodeId, store: &ItemStore) -> Result<()> {
        let node = &self.nodes[id as usize];
        let depth = node.depth + 1;
        let out = split_region(&node.region.items, node.depth, store)?;
        let base = NodeId::try_from(self.nodes.len())
            .ok()
            .filter(|b| *b < NodeId::MAX - 1)
            .ok_or_else(|| Error::InvalidConfig("cell tree exceeds node capacity".into()))?;
        self.nodes.push(TreeNode::fresh(depth, Some(id), out.left));
        self.nodes.push(TreeNode::fresh(depth, Some(id), out.right));
        let node = &mut self.nodes[id as usize];
        node.region.split = Some(out.split);
        node.children = Some([base, base + 1]);
        Ok(())
    }

    /// Applies the reward of one round to the path returned by [`explore`](Self::explore).
    pub fn apply_feedback(&mut self, path: &[NodeId], reward: f64, params: &BoundParams) -> Result<()> {
        if !(0.0..=1.0).contains(&reward) {
            return Err(Error::InvalidReward(reward));
        }
        let &end = path
            .last()
            .ok_or_else(|| Error::Protocol("empty path".into()))?;
        if let Some(children) = self.node(end).children {
            for c in children {
                self.nodes[c as usize].estimate = f64::INFINITY;
            }
        }
        // One bottom-up pass: a node's refresh reads only its path child,
        // already updated, and an untouched sibling.
        for &id in path.iter().rev() {
            let node = &mut self.nodes[id as usize];
            node.visits += 1;
            update_mean(node, reward)?;
            node.bound = bound_value(node, params);
            self.refresh_estimate(id);
        }
        self.rounds += 1;
        Ok(())
    }

    fn refresh_estimate(&mut self, id: NodeId) {
        let node = self.node(id);
        let children = node.children.map(|[l, r]| {
            (
                self.node(l).effective_estimate(),
                self.node(r).effective_estimate(),
            )
        });
        let e = estimation_value(node.bound, children);
        self.nodes[id as usize].estimate = e;
    }

    /// Appends a newly arrived item to every region on its routing path from
    /// `root`, following the recorded splits. Statistics are left untouched.
    pub fn route_item(&mut self, root: NodeId, key: ItemKey, store: &ItemStore) -> Result<()> {
        if self.node(root).is_virtual {
            return Err(Error::InvalidConfig(
                "cannot place an item in a padding unit".into(),
            ));
        }
        let mut cur = root;
        loop {
            let node = &mut self.nodes[cur as usize];
            node.region.items.push(key);
            match (node.children, node.region.split) {
                (Some([l, r]), Some(split)) => {
                    cur = if split.goes_left(store, key) { l } else { r };
                }
                _ => return Ok(()),
            }
        }
    }

    /// Hash of every node's `(visits, mean, bound, estimate, children)`.
    pub fn statistics_digest(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for n in &self.nodes {
            n.visits.hash(&mut h);
            n.mean.to_bits().hash(&mut h);
            n.bound.to_bits().hash(&mut h);
            n.estimate.to_bits().hash(&mut h);
            n.children.hash(&mut h);
        }
        h.finish()
    }

    /// Checks the structural and statistical invariants of a settled forest
    /// (no round in flight).
    pub fn check_invariants(&self) -> Result<()> {
        let fail = |id: usize, msg: String| Err(Error::Invariant(format!("node {id}: {msg}")));
        let expected = self.roots.len() as u64 + 2 * self.rounds;
        if self.nodes.len() as u64 != expected {
            return Err(Error::Invariant(format!(
                "{} nodes after {} rounds, expected {expected}",
                self.nodes.len(),
                self.rounds
            )));
        }
        for (id, n) in self.nodes.iter().enumerate() {
            if n.is_virtual {
                if n.bound != 0.0 || n.estimate != 0.0 || n.children.is_some() || n.visits != 0 {
                    return fail(id, "padding unit was modified".into());
                }
                continue;
            }
            if n.estimate.is_nan() || n.bound.is_nan() || n.estimate > n.bound {
                return fail(id, format!("E = {} exceeds B = {}", n.estimate, n.bound));
            }
            if n.visits >= 1 && !(0.0..=1.0).contains(&n.mean) {
                return fail(id, format!("mean {} outside [0, 1]", n.mean));
            }
            match n.children {
                None => {
                    if n.estimate != n.bound {
                        return fail(id, "leaf with E != B".into());
                    }
                    if n.visits != 0 {
                        return fail(id, "visited node without children".into());
                    }
                }
                Some([l, r]) => {
                    let (l, r) = (self.node(l), self.node(r));
                    if n.visits != 1 + l.visits + r.visits {
                        return fail(
                            id,
                            format!(
                                "visits {} != 1 + {} + {}",
                                n.visits, l.visits, r.visits
                            ),
                        );
                    }
                    let mut parent = n.region.items.clone();
                    let mut union: Vec<ItemKey> =
                        l.region.items.iter().chain(&r.region.items).copied().collect();
                    parent.sort_unstable();
                    union.sort_unstable();
                    if parent != union {
                        return fail(id, "children do not partition the region".into());
                    }
                }
            }
        }
        Ok(())
    }
}
