//! Seeded experiments: regret, accuracy and storage measurements.
//!
//! Regret is the expected per-round loss at the reference cell center:
//! `oracle(cell) - f(center, chosen)`. The reference partition is shared by
//! all policies of an experiment, so policies with a coarser or finer engine
//! partition are scored against the same per-cell optima.

use std::collections::BTreeMap;
use std::io::Write;

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::engine::{Engine, EngineConfig, EngineMode, StorageCounters};
use crate::env::{best_at, generate_items, ContextDistribution, ContextStream, RewardFamily, RewardModel};
use crate::error::{Error, Result};
use crate::forest::{depth_for_units, optimal_unit_exponent, ForestConfig, ShardPolicy};
use crate::items::{CourseItem, ItemId, ItemKey, ItemStore};
use crate::partition::{compute_slicing_number, CellId, PartitionConfig};

/// Per-dimension slicing number: derived from the horizon, or explicit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SliceSpec {
    Auto,
    Fixed(u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DepthSpec {
    /// Smallest depth that fits the unit count.
    AutoMin,
    /// `optimal_unit_exponent` for the run horizon.
    AutoOptimal,
    Fixed(u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UnitsSpec {
    Fixed(u32),
    /// `min(2^z, item count)` real units.
    FillDepth,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Layout {
    Tree,
    Distributed {
        units: UnitsSpec,
        depth: DepthSpec,
        shard: ShardPolicy,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeSpec {
    pub k1: f64,
    pub m: f64,
    pub k2: f64,
    pub n_t: SliceSpec,
    pub layout: Layout,
}

impl Default for TreeSpec {
    fn default() -> Self {
        TreeSpec {
            k1: 1.0,
            m: 0.5,
            k2: 2.0,
            n_t: SliceSpec::Auto,
            layout: Layout::Tree,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum PolicySpec {
    Tree(TreeSpec),
    /// Uniformly random item each round.
    UniformRandom,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedPolicy {
    pub name: String,
    pub spec: PolicySpec,
}

impl NamedPolicy {
    pub fn new(name: impl Into<String>, spec: PolicySpec) -> Self {
        NamedPolicy {
            name: name.into(),
            spec,
        }
    }
}

/// The reference baselines: `rht-full`, `rht-nocontext`, `dsrht-z0`,
/// `dsrht-z10`, `dsrht-opt` and `uniform-random`.
pub fn baseline_configs() -> Vec<NamedPolicy> {
    let tree = TreeSpec::default();
    let dist = |units, depth| {
        PolicySpec::Tree(TreeSpec {
            layout: Layout::Distributed {
                units,
                depth,
                shard: ShardPolicy::RoundRobin,
            },
            ..TreeSpec::default()
        })
    };
    vec![
        NamedPolicy::new("rht-full", PolicySpec::Tree(tree.clone())),
        NamedPolicy::new(
            "rht-nocontext",
            PolicySpec::Tree(TreeSpec {
                n_t: SliceSpec::Fixed(1),
                ..tree
            }),
        ),
        NamedPolicy::new("dsrht-z0", dist(UnitsSpec::Fixed(1), DepthSpec::Fixed(0))),
        NamedPolicy::new("dsrht-z10", dist(UnitsSpec::FillDepth, DepthSpec::Fixed(10))),
        NamedPolicy::new("dsrht-opt", dist(UnitsSpec::FillDepth, DepthSpec::AutoOptimal)),
        NamedPolicy::new("uniform-random", PolicySpec::UniformRandom),
    ]
}

pub fn baseline(name: &str) -> Result<NamedPolicy> {
    baseline_configs()
        .into_iter()
        .find(|p| p.name == name)
        .ok_or_else(|| Error::InvalidConfig(format!("unknown policy `{name}`")))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub family: RewardFamily,
    pub d_x: usize,
    pub d_c: usize,
    pub sigma: f64,
    pub sharpness: f64,
    pub l_x: f64,
    pub alpha: f64,
    pub items: usize,
    pub seed: u64,
    pub context: ContextDistribution,
    /// New items per 1000 rounds.
    pub arrival_rate: f64,
    /// Explicit item universe; replaces the generated one.
    pub item_list: Option<Vec<CourseItem>>,
}

impl Default for EnvSpec {
    fn default() -> Self {
        EnvSpec {
            family: RewardFamily::IdealPoint,
            d_x: 2,
            d_c: 3,
            sigma: 0.1,
            sharpness: 2.0,
            l_x: 1.0,
            alpha: 1.0,
            items: 256,
            seed: 7,
            context: ContextDistribution::Uniform,
            arrival_rate: 0.0,
            item_list: None,
        }
    }
}

impl EnvSpec {
    pub fn model(&self) -> Result<RewardModel> {
        RewardModel::new(
            self.family,
            self.d_x,
            self.d_c,
            self.sigma,
            self.sharpness,
            self.l_x,
            self.alpha,
            self.seed,
        )
    }

    pub fn item_count(&self) -> usize {
        self.item_list.as_ref().map_or(self.items, Vec::len)
    }

    /// The initial item universe, identical for every replica.
    pub fn universe(&self) -> Vec<CourseItem> {
        if let Some(items) = &self.item_list {
            return items.clone();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(1);
        generate_items(self.items, self.d_c, 1, &mut rng)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub horizon: u64,
    pub seeds: Vec<u64>,
    /// Checkpoints in addition to the powers of two and the horizon.
    pub extra_checkpoints: Vec<u64>,
    pub reference_n_t: SliceSpec,
    /// Smallest checkpoint used by the log-log slope fit.
    pub slope_from: u64,
    pub keep_records: bool,
    pub jobs: usize,
}

impl ExperimentSpec {
    pub fn new(horizon: u64, seeds: Vec<u64>) -> Self {
        ExperimentSpec {
            horizon,
            seeds,
            extra_checkpoints: Vec::new(),
            reference_n_t: SliceSpec::Auto,
            slope_from: 1024,
            keep_records: false,
            jobs: 1,
        }
    }

    pub fn checkpoints(&self) -> Vec<u64> {
        let mut cps: Vec<u64> = std::iter::successors(Some(1u64), |t| t.checked_mul(2))
            .take_while(|t| *t <= self.horizon)
            .chain(self.extra_checkpoints.iter().copied().filter(|t| *t >= 1 && *t <= self.horizon))
            .chain(std::iter::once(self.horizon))
            .collect();
        cps.sort_unstable();
        cps.dedup();
        cps
    }
}

/// One round of a replica.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub round: u64,
    pub cell: CellId,
    pub item: ItemId,
    pub reward: f64,
    pub oracle: f64,
    pub regret: f64,
    pub cum_regret: f64,
    pub nodes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointRow {
    pub t: u64,
    pub cum_regret: f64,
    pub avg_regret: f64,
    pub accuracy: f64,
    pub nodes: f64,
    pub discretization_regret: f64,
}

/// Resolved parameters of a policy for a given run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolvedPolicy {
    pub name: String,
    pub n_t: Option<u32>,
    pub units: Option<u32>,
    pub z: Option<u32>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
enum Agent {
    Tree(Engine),
    Uniform(ItemStore),
}

impl Agent {
    fn store(&self) -> &ItemStore {
        match self {
            Agent::Tree(e) => e.store(),
            Agent::Uniform(s) => s,
        }
    }
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// A single seeded replica that can be stepped, extended with new items, and
/// checkpointed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Simulation {
    policy: String,
    resolved: ResolvedPolicy,
    seed: u64,
    horizon: u64,
    agent: Agent,
    model: RewardModel,
    contexts: ContextStream,
    reference: PartitionConfig,
    shard: Option<(ShardPolicy, u32)>,
    oracle: BTreeMap<CellId, (ItemKey, f64)>,
    rng_context: ChaCha8Rng,
    rng_reward: ChaCha8Rng,
    rng_agent: ChaCha8Rng,
    rng_arrival: ChaCha8Rng,
    arrival_rate: f64,
    arrival_credit: f64,
    next_item_id: u64,
    round: u64,
    cum_regret: f64,
    cum_mean_reward: f64,
    cum_oracle: f64,
    cum_discretization: f64,
    window_start: u64,
    window_reward: f64,
    window_oracle: f64,
}

impl Simulation {
    pub fn new(policy: &NamedPolicy, env: &EnvSpec, exp: &ExperimentSpec, seed: u64) -> Result<Self> {
        let horizon = exp.horizon;
        if horizon < 3 {
            return Err(Error::HorizonTooSmall(horizon));
        }
        let model = env.model()?;
        let slicing = |s: SliceSpec| match s {
            SliceSpec::Auto => compute_slicing_number(horizon, env.alpha, env.d_x, env.d_c),
            SliceSpec::Fixed(n) => Ok(n),
        };
        let reference = PartitionConfig::new(env.d_x, slicing(exp.reference_n_t)?, env.alpha, env.l_x)?;
        let universe = env.universe();
        let next_id = universe.iter().map(|c| c.id).max().unwrap_or(0) + 1;
        let mut resolved = ResolvedPolicy {
            name: policy.name.clone(),
            n_t: None,
            units: None,
            z: None,
        };
        let mut shard = None;
        let agent = match &policy.spec {
            PolicySpec::UniformRandom => {
                let mut store = ItemStore::new(env.d_c)?;
                for it in universe {
                    store.insert(it, None)?;
                }
                Agent::Uniform(store)
            }
            PolicySpec::Tree(spec) => {
                let n_t = slicing(spec.n_t)?;
                resolved.n_t = Some(n_t);
                let partition = PartitionConfig::new(env.d_x, n_t, env.alpha, env.l_x)?;
                let mode = match spec.layout {
                    Layout::Tree => EngineMode::Tree,
                    Layout::Distributed {
                        units,
                        depth,
                        shard: policy_shard,
                    } => {
                        let fc = resolve_forest(units, depth, horizon, env)?;
                        resolved.units = Some(fc.units);
                        resolved.z = Some(fc.depth);
                        shard = Some((policy_shard, fc.units));
                        EngineMode::Distributed(fc)
                    }
                };
                let mut store = ItemStore::new(env.d_c)?;
                for (pos, it) in universe.into_iter().enumerate() {
                    let unit = shard.map(|(p, d)| p.assign(it.id, pos as u64, d));
                    store.insert(it, unit)?;
                }
                let cfg = EngineConfig {
                    horizon,
                    k1: spec.k1,
                    m: spec.m,
                    k2: spec.k2,
                    partition,
                    mode,
                };
                Agent::Tree(Engine::new(cfg, store)?)
            }
        };
        let window = horizon.div_ceil(10);
        Ok(Simulation {
            policy: policy.name.clone(),
            resolved,
            seed,
            horizon,
            contexts: ContextStream::new(env.d_x, env.context.clone(), env.seed)?,
            model,
            reference,
            shard,
            oracle: BTreeMap::new(),
            rng_context: stream_rng(seed, 11),
            rng_reward: stream_rng(seed, 12),
            rng_agent: stream_rng(seed, 13),
            rng_arrival: stream_rng(seed, 14),
            arrival_rate: env.arrival_rate,
            arrival_credit: 0.0,
            next_item_id: next_id,
            agent,
            round: 0,
            cum_regret: 0.0,
            cum_mean_reward: 0.0,
            cum_oracle: 0.0,
            cum_discretization: 0.0,
            window_start: horizon - window,
            window_reward: 0.0,
            window_oracle: 0.0,
        })
    }

    pub fn policy(&self) -> &str {
        &self.policy
    }

    pub fn resolved(&self) -> &ResolvedPolicy {
        &self.resolved
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn round(&self) -> u64 {
        self.round
    }

    pub fn engine(&self) -> Option<&Engine> {
        match &self.agent {
            Agent::Tree(e) => Some(e),
            Agent::Uniform(_) => None,
        }
    }

    pub fn store(&self) -> &ItemStore {
        self.agent.store()
    }

    pub fn model(&self) -> &RewardModel {
        &self.model
    }

    pub fn reference(&self) -> &PartitionConfig {
        &self.reference
    }

    pub fn cum_regret(&self) -> f64 {
        self.cum_regret
    }

    pub fn node_count(&self) -> usize {
        self.engine().map_or(0, Engine::node_count)
    }

    /// Mean reward of the chosen items divided by the rounds played.
    pub fn accuracy(&self) -> f64 {
        if self.round == 0 {
            0.0
        } else {
            self.cum_mean_reward / self.round as f64
        }
    }

    /// Average oracle value over the rounds played.
    pub fn average_oracle(&self) -> f64 {
        if self.round == 0 {
            0.0
        } else {
            self.cum_oracle / self.round as f64
        }
    }

    /// `(accuracy, average oracle)` over the final 10% of the horizon.
    pub fn final_window(&self) -> (f64, f64) {
        let n = self.round.saturating_sub(self.window_start);
        if n == 0 {
            (0.0, 0.0)
        } else {
            (self.window_reward / n as f64, self.window_oracle / n as f64)
        }
    }

    pub fn checkpoint_row(&self) -> CheckpointRow {
        CheckpointRow {
            t: self.round,
            cum_regret: self.cum_regret,
            avg_regret: if self.round == 0 { 0.0 } else { self.cum_regret / self.round as f64 },
            accuracy: self.accuracy(),
            nodes: self.node_count() as f64,
            discretization_regret: self.cum_discretization,
        }
    }

    fn oracle_for(&mut self, cell: &CellId) -> Result<(ItemKey, f64)> {
        if let Some(o) = self.oracle.get(cell) {
            return Ok(*o);
        }
        let o = crate::env::oracle_best(&self.model, &self.reference, cell, self.agent.store())?;
        self.oracle.insert(cell.clone(), o);
        Ok(o)
    }

    /// Adds a new item to the universe; returns its id.
    pub fn add_item(&mut self, features: Vec<f64>) -> Result<ItemId> {
        let id = self.next_item_id;
        let item = CourseItem::new(id, features, self.model.d_c())?;
        let position = self.agent.store().len() as u64;
        let unit = self.shard.map(|(p, d)| p.assign(id, position, d));
        let key = match &mut self.agent {
            Agent::Tree(e) => e.add_course(item, unit)?,
            Agent::Uniform(s) => s.insert(item, None)?,
        };
        self.next_item_id += 1;
        let features = &self.agent.store().get(key).features;
        for (cell, best) in self.oracle.iter_mut() {
            let center = self.reference.cell_center(cell);
            let f = self.model.mean_reward_raw(center.coords(), features);
            // Later ids lose ties, so only a strict improvement replaces.
            if f > best.1 {
                *best = (key, f);
            }
        }
        Ok(id)
    }

    /// Plays one round.
    pub fn step(&mut self) -> Result<RunRecord> {
        if self.arrival_rate > 0.0 {
            self.arrival_credit += self.arrival_rate / 1000.0;
            while self.arrival_credit >= 1.0 {
                self.arrival_credit -= 1.0;
                let d_c = self.model.d_c();
                let features: Vec<f64> = (0..d_c).map(|_| self.rng_arrival.gen()).collect();
                self.add_item(features)?;
            }
        }
        let x = self.contexts.sample(&mut self.rng_context);
        let cell = self.reference.locate_cell(&x)?;
        let center = self.reference.cell_center(&cell);
        let (_, oracle) = self.oracle_for(&cell)?;

        let (key, ticket) = match &mut self.agent {
            Agent::Tree(e) => {
                let rec = e.recommend(&x, &mut self.rng_agent)?;
                (rec.key, Some(rec.ticket))
            }
            Agent::Uniform(s) => {
                if s.is_empty() {
                    return Err(Error::NoItems);
                }
                (self.rng_agent.gen_range(0..s.len()) as ItemKey, None)
            }
        };
        let features = self.agent.store().get(key).features.clone();
        let item = self.agent.store().get(key).id;
        let f_center = self.model.mean_reward_raw(center.coords(), &features);
        let f_actual = self.model.mean_reward_raw(x.coords(), &features);
        let regret = oracle - f_center;
        let reward = self.model.add_noise(f_actual, &mut self.rng_reward);
        if let (Agent::Tree(e), Some(t)) = (&mut self.agent, ticket) {
            e.feedback(t, reward)?;
        }
        let best_here = best_at(&self.model, x.coords(), self.agent.store())
            .map_or(f_actual, |(_, v)| v);

        self.round += 1;
        self.cum_regret += regret;
        self.cum_mean_reward += f_center;
        self.cum_oracle += oracle;
        self.cum_discretization += (best_here - f_actual) - regret;
        if self.round > self.window_start {
            self.window_reward += f_center;
            self.window_oracle += oracle;
        }
        Ok(RunRecord {
            round: self.round,
            cell,
            item,
            reward,
            oracle,
            regret,
            cum_regret: self.cum_regret,
            nodes: self.node_count(),
        })
    }

    pub fn to_checkpoint(&self) -> Result<Vec<u8>> {
        crate::checkpoint::encode(crate::checkpoint::Kind::Simulation, self)
    }

    pub fn from_checkpoint(bytes: &[u8]) -> Result<Self> {
        let mut sim: Simulation = crate::checkpoint::decode(crate::checkpoint::Kind::Simulation, bytes)?;
        match &mut sim.agent {
            Agent::Tree(e) => e.after_load(),
            Agent::Uniform(s) => s.reindex(),
        }
        Ok(sim)
    }
}

fn resolve_forest(units: UnitsSpec, depth: DepthSpec, horizon: u64, env: &EnvSpec) -> Result<ForestConfig> {
    let z = match depth {
        DepthSpec::Fixed(z) => Some(z),
        DepthSpec::AutoOptimal => Some(optimal_unit_exponent(horizon, env.alpha, env.d_x, env.d_c)?),
        DepthSpec::AutoMin => None,
    };
    let d = match units {
        UnitsSpec::Fixed(d) => d,
        UnitsSpec::FillDepth => {
            let z = z.ok_or_else(|| {
                Error::InvalidConfig("unit count `fill` needs an explicit or optimal depth".into())
            })?;
            let width = 1u64.checked_shl(z).unwrap_or(u64::MAX);
            width.min(env.item_count() as u64).max(1) as u32
        }
    };
    if d as usize > env.item_count() {
        return Err(Error::InvalidConfig(format!(
            "{d} storage units but only {} items; every real unit needs an item",
            env.item_count()
        )));
    }
    let z = match z {
        Some(z) => z,
        None => depth_for_units(d)?,
    };
    ForestConfig::new(d, z)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicaResult {
    pub seed: u64,
    pub rows: Vec<CheckpointRow>,
    pub final_window_accuracy: f64,
    pub final_window_oracle: f64,
    pub average_oracle: f64,
    pub storage: Option<StorageCounters>,
    pub records: Option<Vec<RunRecord>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlopeFit {
    pub slope: f64,
    pub intercept: f64,
    pub used: usize,
    pub excluded: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryReport {
    pub policy: ResolvedPolicy,
    pub horizon: u64,
    pub seeds: Vec<u64>,
    pub reference_n_t: u32,
    /// Replica means at every checkpoint.
    pub checkpoints: Vec<CheckpointRow>,
    pub slope: Option<SlopeFit>,
    pub theoretical_exponent: f64,
    pub final_window_accuracy: f64,
    pub final_window_oracle: f64,
    pub average_oracle: f64,
}

impl SummaryReport {
    pub fn at(&self, t: u64) -> Option<&CheckpointRow> {
        self.checkpoints.iter().find(|r| r.t == t)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentOutput {
    pub summary: SummaryReport,
    pub replicas: Vec<ReplicaResult>,
}

/// Runs one replica to the horizon, recording checkpoints.
pub fn run_replica(policy: &NamedPolicy, env: &EnvSpec, exp: &ExperimentSpec, seed: u64) -> Result<ReplicaResult> {
    run_replica_state(policy, env, exp, seed).map(|(r, _)| r)
}

/// As [`run_replica`], also returning the final simulation state.
pub fn run_replica_state(
    policy: &NamedPolicy,
    env: &EnvSpec,
    exp: &ExperimentSpec,
    seed: u64,
) -> Result<(ReplicaResult, Simulation)> {
    let mut sim = Simulation::new(policy, env, exp, seed)?;
    let checkpoints = exp.checkpoints();
    let mut rows = Vec::with_capacity(checkpoints.len());
    let mut records = exp.keep_records.then(|| Vec::with_capacity(exp.horizon as usize));
    let mut next = checkpoints.iter().peekable();
    while sim.round() < exp.horizon {
        let rec = sim.step()?;
        if let Some(r) = records.as_mut() {
            r.push(rec);
        }
        if next.peek() == Some(&&sim.round()) {
            next.next();
            rows.push(sim.checkpoint_row());
        }
    }
    let (acc, orc) = sim.final_window();
    let result = ReplicaResult {
        seed,
        rows,
        final_window_accuracy: acc,
        final_window_oracle: orc,
        average_oracle: sim.average_oracle(),
        storage: sim.engine().map(Engine::storage),
        records,
    };
    Ok((result, sim))
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Runs every seed of `exp` (in parallel over `exp.jobs` threads) and
/// aggregates the replicas.
pub fn run_experiment(policy: &NamedPolicy, env: &EnvSpec, exp: &ExperimentSpec) -> Result<ExperimentOutput> {
    run_experiment_state(policy, env, exp).map(|(o, _)| o)
}

/// As [`run_experiment`], also returning each replica's final state.
pub fn run_experiment_state(
    policy: &NamedPolicy,
    env: &EnvSpec,
    exp: &ExperimentSpec,
) -> Result<(ExperimentOutput, Vec<Simulation>)> {
    if exp.seeds.is_empty() {
        return Err(Error::InvalidConfig("at least one seed is required".into()));
    }
    // Resolves the policy once up front so configuration errors surface before any work.
    let probe = Simulation::new(policy, env, exp, exp.seeds[0])?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(exp.jobs.max(1))
        .build()
        .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
    let (replicas, states): (Vec<ReplicaResult>, Vec<Simulation>) = pool
        .install(|| {
            exp.seeds
                .par_iter()
                .map(|&s| run_replica_state(policy, env, exp, s))
                .collect::<Result<Vec<_>>>()
        })?
        .into_iter()
        .unzip();

    let checkpoints: Vec<CheckpointRow> = (0..replicas[0].rows.len())
        .map(|i| CheckpointRow {
            t: replicas[0].rows[i].t,
            cum_regret: mean(replicas.iter().map(|r| r.rows[i].cum_regret)),
            avg_regret: mean(replicas.iter().map(|r| r.rows[i].avg_regret)),
            accuracy: mean(replicas.iter().map(|r| r.rows[i].accuracy)),
            nodes: mean(replicas.iter().map(|r| r.rows[i].nodes)),
            discretization_regret: mean(replicas.iter().map(|r| r.rows[i].discretization_regret)),
        })
        .collect();
    let fit_points: Vec<(f64, f64)> = checkpoints
        .iter()
        .filter(|r| r.t >= exp.slope_from && r.t.is_power_of_two())
        .map(|r| (r.t as f64, r.cum_regret))
        .collect();
    let slope = if fit_points.len() >= 3 {
        fit_regret_slope(&fit_points).ok()
    } else {
        None
    };
    let summary = SummaryReport {
        policy: probe.resolved().clone(),
        horizon: exp.horizon,
        seeds: exp.seeds.clone(),
        reference_n_t: probe.reference().n_t(),
        checkpoints,
        slope,
        theoretical_exponent: theoretical_exponent(env.alpha, env.d_x, env.d_c),
        final_window_accuracy: mean(replicas.iter().map(|r| r.final_window_accuracy)),
        final_window_oracle: mean(replicas.iter().map(|r| r.final_window_oracle)),
        average_oracle: mean(replicas.iter().map(|r| r.average_oracle)),
    };
    Ok((ExperimentOutput { summary, replicas }, states))
}

/// Regret growth exponent `(d_X + alpha (d_C + 2)) / (d_X + alpha (d_C + 3))`.
pub fn theoretical_exponent(alpha: f64, d_x: usize, d_c: usize) -> f64 {
    let (dx, dc) = (d_x as f64, d_c as f64);
    (dx + alpha * (dc + 2.0)) / (dx + alpha * (dc + 3.0))
}

/// Least-squares slope of `ln R` against `ln T`. Points with `R <= 0` are
/// dropped with a warning.
pub fn fit_regret_slope(points: &[(f64, f64)]) -> Result<SlopeFit> {
    if points.windows(2).any(|w| w[0].0.partial_cmp(&w[1].0) != Some(std::cmp::Ordering::Less)) {
        return Err(Error::InvalidConfig(
            "checkpoint horizons must be strictly increasing".into(),
        ));
    }
    let usable: Vec<(f64, f64)> = points
        .iter()
        .filter(|(t, r)| {
            let ok = *r > 0.0 && *t > 0.0;
            if !ok {
                warn!("excluding checkpoint T = {t} with regret {r} from the slope fit");
            }
            ok
        })
        .map(|(t, r)| (t.ln(), r.ln()))
        .collect();
    if usable.len() < 3 {
        return Err(Error::InvalidConfig(format!(
            "slope fit needs at least 3 positive checkpoints, got {}",
            usable.len()
        )));
    }
    let n = usable.len() as f64;
    let mx = usable.iter().map(|p| p.0).sum::<f64>() / n;
    let my = usable.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = usable.iter().map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = usable.iter().map(|(x, _)| (x - mx) * (x - mx)).sum();
    let slope = sxy / sxx;
    Ok(SlopeFit {
        slope,
        intercept: my - slope * mx,
        used: usable.len(),
        excluded: points.len() - usable.len(),
    })
}

/// Node and item counts of a live engine.
pub fn storage_counters(engine: &Engine) -> StorageCounters {
    engine.storage()
}

pub const CSV_HEADER: [&str; 9] = [
    "run_id",
    "policy",
    "seed",
    "T",
    "cum_regret",
    "avg_regret",
    "accuracy",
    "nodes",
    "discretization_regret",
];

/// One row per checkpoint per replica, then one aggregate row per checkpoint.
pub fn write_csv<W: Write>(out: W, outputs: &[ExperimentOutput]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let io = |e: csv::Error| Error::Io(e.to_string());
    w.write_record(CSV_HEADER).map_err(io)?;
    for o in outputs {
        let name = &o.summary.policy.name;
        let row = |run_id: String, seed: String, r: &CheckpointRow| {
            vec![
                run_id,
                name.clone(),
                seed,
                r.t.to_string(),
                r.cum_regret.to_string(),
                r.avg_regret.to_string(),
                r.accuracy.to_string(),
                r.nodes.to_string(),
                r.discretization_regret.to_string(),
            ]
        };
        for (i, rep) in o.replicas.iter().enumerate() {
            for r in &rep.rows {
                w.write_record(row(format!("{name}-r{i}"), rep.seed.to_string(), r))
                    .map_err(io)?;
            }
        }
        for r in &o.summary.checkpoints {
            w.write_record(row(format!("{name}-mean"), "all".into(), r))
                .map_err(io)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Accuracy grid: one row per point in `rounds`, one column per policy.
pub fn accuracy_table(outputs: &[ExperimentOutput], rounds: &[u64]) -> String {
    let mut s = format!("{:>12}", "rounds");
    for o in outputs {
        s += &format!(" {:>16}", o.summary.policy.name);
    }
    s.push('\n');
    for &t in rounds {
        s += &format!("{t:>12}");
        for o in outputs {
            match o.summary.at(t) {
                Some(r) => s += &format!(" {:>15.2}%", 100.0 * r.accuracy),
                None => s += &format!(" {:>16}", "-"),
            }
        }
        s.push('\n');
    }
    s
}

/// Rounds at which the accuracy grid is reported: `{1..6} x 10^5`, or six
/// evenly spaced points for shorter horizons.
pub fn table_rounds(horizon: u64) -> Vec<u64> {
    if horizon >= 600_000 {
        (1..=6).map(|k| k * 100_000).collect()
    } else {
        (1..=6).map(|k| (k * horizon / 6).max(1)).collect()
    }
}

/// Maximum region diameter per depth of a fully split tree over `store`,
/// and a fitted `diam <= k1 m^h` envelope.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiameterAudit {
    pub per_depth: Vec<(u32, f64)>,
    pub k1: f64,
    pub m: f64,
}

pub fn diameter_audit(store: &ItemStore, max_depth: u32) -> Result<DiameterAudit> {
    let mut level: Vec<Vec<ItemKey>> = vec![store.keys().collect()];
    let mut per_depth = Vec::new();
    for h in 0..=max_depth {
        let mut diam = 0.0f64;
        for r in level.iter().filter(|r| !r.is_empty()) {
            diam = diam.max(crate::items::region_diam(r, store)?);
        }
        per_depth.push((h, diam));
        let mut next = Vec::new();
        for r in level.iter().filter(|r| !r.is_empty()) {
            let out = crate::items::split_region(r, h, store)?;
            next.push(out.left);
            next.push(out.right);
        }
        level = next;
    }
    let pts: Vec<(f64, f64)> = per_depth
        .iter()
        .filter(|(_, d)| *d > 0.0)
        .map(|(h, d)| (*h as f64, d.ln()))
        .collect();
    let (k1, m) = if pts.len() >= 2 {
        let n = pts.len() as f64;
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
        let sxy: f64 = pts.iter().map(|(x, y)| (x - mx) * (y - my)).sum();
        let sxx: f64 = pts.iter().map(|(x, _)| (x - mx) * (x - mx)).sum();
        let slope = sxy / sxx;
        // Shift the intercept so the envelope covers every depth.
        let lift = pts
            .iter()
            .map(|(x, y)| y - (my + slope * (x - mx)))
            .fold(0.0f64, f64::max);
        ((my - slope * mx + lift).exp(), slope.exp())
    } else {
        (per_depth[0].1, 0.5)
    };
    Ok(DiameterAudit { per_depth, k1, m })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exponent_examples() {
        assert!((theoretical_exponent(1.0, 2, 3) - 0.875).abs() < 1e-15);
        assert!((theoretical_exponent(1.0, 4, 10) - 16.0 / 17.0).abs() < 1e-15);
        for a in [0.1, 0.5, 1.0] {
            for dx in 1..5 {
                for dc in 1..12 {
                    assert!(theoretical_exponent(a, dx, dc) < 1.0);
                }
            }
        }
    }

    #[test]
    fn slope_examples() {
        let ts: Vec<f64> = (10..=17).map(|k| 2f64.powi(k)).collect();
        let lin: Vec<(f64, f64)> = ts.iter().map(|&t| (t, 3.0 * t)).collect();
        assert!((fit_regret_slope(&lin).unwrap().slope - 1.0).abs() < 1e-9);
        let pow: Vec<(f64, f64)> = ts.iter().map(|&t| (t, 0.4 * t.powf(0.875))).collect();
        assert!((fit_regret_slope(&pow).unwrap().slope - 0.875).abs() < 1e-6);
        let log: Vec<(f64, f64)> = ts.iter().map(|&t| (t, 5.0 * t.ln())).collect();
        assert!(fit_regret_slope(&log).unwrap().slope < 0.5);
    }

    #[test]
    fn slope_drops_nonpositive_points() {
        let pts = vec![(1.0, 0.0), (2.0, 2.0), (4.0, 4.0), (8.0, 8.0)];
        let fit = fit_regret_slope(&pts).unwrap();
        assert_eq!((fit.used, fit.excluded), (3, 1));
        assert!((fit.slope - 1.0).abs() < 1e-12);
        assert!(fit_regret_slope(&[(1.0, 1.0), (1.0, 2.0), (3.0, 3.0)]).is_err());
        assert!(fit_regret_slope(&[(1.0, 1.0), (2.0, 2.0)]).is_err());
    }

    #[test]
    fn checkpoint_schedule() {
        let mut e = ExperimentSpec::new(20, vec![1]);
        e.extra_checkpoints = vec![3, 50];
        assert_eq!(e.checkpoints(), vec![1, 2, 3, 4, 8, 16, 20]);
    }

    #[test]
    fn baselines_resolve() {
        let names: Vec<String> = baseline_configs().into_iter().map(|p| p.name).collect();
        assert_eq!(
            names,
            ["rht-full", "rht-nocontext", "dsrht-z0", "dsrht-z10", "dsrht-opt", "uniform-random"]
        );
        let env = EnvSpec::default();
        let exp = ExperimentSpec::new(10_000, vec![1]);
        let z10 = Simulation::new(&baseline("dsrht-z10").unwrap(), &env, &exp, 1).unwrap();
        assert_eq!((z10.resolved().units, z10.resolved().z), (Some(256), Some(10)));
        let opt = Simulation::new(&baseline("dsrht-opt").unwrap(), &env, &exp, 1).unwrap();
        assert_eq!((opt.resolved().units, opt.resolved().z), (Some(64), Some(6)));
        let full = Simulation::new(&baseline("rht-full").unwrap(), &env, &exp, 1).unwrap();
        assert_eq!(full.resolved().n_t, Some(2));
        assert!(baseline("nope").is_err());
    }

    #[test]
    fn table_rounds_scale() {
        assert_eq!(table_rounds(600_000)[0], 100_000);
        assert_eq!(table_rounds(60), vec![10, 20, 30, 40, 50, 60]);
    }

    #[test]
    fn diameter_audit_envelope_covers_profile() {
        let env = EnvSpec::default();
        let mut store = ItemStore::new(3).unwrap();
        for it in env.universe() {
            store.insert(it, None).unwrap();
        }
        let audit = diameter_audit(&store, 8).unwrap();
        assert!(audit.m < 1.0);
        for (h, d) in &audit.per_depth {
            assert!(*d <= audit.k1 * audit.m.powi(*h as i32) * (1.0 + 1e-9));
        }
        // Diameters never grow with depth.
        for w in audit.per_depth.windows(2) {
            assert!(w[1].1 <= w[0].1);
        }
    }
}
