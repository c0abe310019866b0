//! TOML run configuration with `[run]`, `[engine]`, `[partition]` and
//! `[env]` sections. Every key has a default, so an empty file is valid.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::env::{ContextDistribution, RewardFamily};
use crate::error::{Error, Result};
use crate::forest::ShardPolicy;
use crate::harness::{
    baseline, DepthSpec, EnvSpec, ExperimentSpec, Layout, NamedPolicy, PolicySpec, ResolvedPolicy, SliceSpec,
    TreeSpec, UnitsSpec,
};
use crate::ingest::{build_store, parse_items};

/// An integer, or one of a fixed set of keywords.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum IntOrWord {
    Int(u32),
    Word(String),
}

impl IntOrWord {
    fn word(w: &str) -> Self {
        IntOrWord::Word(w.to_string())
    }
}

fn parse_slice(key: &str, v: &IntOrWord) -> Result<SliceSpec> {
    match v {
        IntOrWord::Int(n) if *n >= 1 => Ok(SliceSpec::Fixed(*n)),
        IntOrWord::Word(w) if w == "auto" => Ok(SliceSpec::Auto),
        other => Err(Error::InvalidConfig(format!("{key}: expected \"auto\" or an integer >= 1, got {other:?}"))),
    }
}

fn parse_depth(key: &str, v: &IntOrWord) -> Result<DepthSpec> {
    match v {
        IntOrWord::Int(z) => Ok(DepthSpec::Fixed(*z)),
        IntOrWord::Word(w) if w == "auto-min" => Ok(DepthSpec::AutoMin),
        IntOrWord::Word(w) if w == "auto-optimal" => Ok(DepthSpec::AutoOptimal),
        other => Err(Error::InvalidConfig(format!(
            "{key}: expected \"auto-min\", \"auto-optimal\" or an integer, got {other:?}"
        ))),
    }
}

fn parse_units(key: &str, v: &IntOrWord) -> Result<UnitsSpec> {
    match v {
        IntOrWord::Int(d) if *d >= 1 => Ok(UnitsSpec::Fixed(*d)),
        IntOrWord::Word(w) if w == "fill" => Ok(UnitsSpec::FillDepth),
        other => Err(Error::InvalidConfig(format!("{key}: expected \"fill\" or an integer >= 1, got {other:?}"))),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub horizon: u64,
    pub policies: Vec<String>,
    /// Base seed; replica `i` uses `seed + i` unless `seeds` is given.
    pub seed: u64,
    pub replicas: u32,
    pub seeds: Option<Vec<u64>>,
    pub jobs: usize,
    pub checkpoints: Vec<u64>,
    pub slope_from: u64,
    pub out: Option<PathBuf>,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            horizon: 10_000,
            policies: vec!["rht-full".into()],
            seed: 1,
            replicas: 1,
            seeds: None,
            jobs: 1,
            checkpoints: Vec::new(),
            slope_from: 1024,
            out: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineSection {
    pub k1: f64,
    pub m: f64,
    pub k2: f64,
    /// Depth of the `dsrht` policy: "auto-min", "auto-optimal" or an integer.
    pub z: Option<IntOrWord>,
    /// Unit count of the `dsrht` policy: "fill" or an integer.
    pub units: Option<IntOrWord>,
    pub shard: ShardPolicy,
}

impl Default for EngineSection {
    fn default() -> Self {
        EngineSection {
            k1: 1.0,
            m: 0.5,
            k2: 2.0,
            z: None,
            units: None,
            shard: ShardPolicy::RoundRobin,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PartitionSection {
    /// Overrides the slicing number of every policy that derives it.
    pub n_t: Option<IntOrWord>,
    /// Partition used to score regret.
    pub reference_n_t: IntOrWord,
}

impl Default for PartitionSection {
    fn default() -> Self {
        PartitionSection {
            n_t: None,
            reference_n_t: IntOrWord::word("auto"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvSection {
    pub family: RewardFamily,
    pub sigma: f64,
    pub sharpness: f64,
    pub items: usize,
    /// Item file replacing the generated universe.
    pub items_file: Option<PathBuf>,
    pub d_x: usize,
    pub d_c: usize,
    pub l_x: f64,
    pub alpha: f64,
    pub seed: u64,
    pub context: ContextDistribution,
    pub arrival_rate: f64,
}

impl Default for EnvSection {
    fn default() -> Self {
        let e = EnvSpec::default();
        EnvSection {
            family: e.family,
            sigma: e.sigma,
            sharpness: e.sharpness,
            items: e.items,
            items_file: None,
            d_x: e.d_x,
            d_c: e.d_c,
            l_x: e.l_x,
            alpha: e.alpha,
            seed: e.seed,
            context: e.context,
            arrival_rate: e.arrival_rate,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub run: RunSection,
    pub engine: EngineSection,
    pub partition: PartitionSection,
    pub env: EnvSection,
    /// Written by the config echo; ignored on input.
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub resolved: Vec<ResolvedPolicy>,
}

/// A fully resolved run: one policy list, one environment, one schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct RunPlan {
    pub policies: Vec<NamedPolicy>,
    pub env: EnvSpec,
    pub experiment: ExperimentSpec,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    /// Reads a config file; a relative `items_file` resolves against the
    /// config's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text).map_err(|e| match e {
            Error::InvalidConfig(m) => Error::InvalidConfig(format!("{}: {m}", path.display())),
            other => other,
        })?;
        if let Some(f) = &cfg.env.items_file {
            if f.is_relative() {
                let base = path.parent().unwrap_or(Path::new("."));
                cfg.env.items_file = Some(base.join(f));
            }
        }
        Ok(cfg)
    }

    pub fn seeds(&self) -> Vec<u64> {
        match &self.run.seeds {
            Some(s) => s.clone(),
            None => (0..self.run.replicas as u64).map(|i| self.run.seed + i).collect(),
        }
    }

    fn policy(&self, name: &str) -> Result<NamedPolicy> {
        let mut p = match name {
            "rht" => NamedPolicy::new("rht", PolicySpec::Tree(TreeSpec::default())),
            "dsrht" => {
                let depth = match &self.engine.z {
                    Some(v) => parse_depth("engine.z", v)?,
                    None if self.engine.units.is_some() => DepthSpec::AutoMin,
                    None => DepthSpec::AutoOptimal,
                };
                let units = match &self.engine.units {
                    Some(v) => parse_units("engine.units", v)?,
                    None => UnitsSpec::FillDepth,
                };
                NamedPolicy::new(
                    "dsrht",
                    PolicySpec::Tree(TreeSpec {
                        layout: Layout::Distributed {
                            units,
                            depth,
                            shard: self.engine.shard,
                        },
                        ..TreeSpec::default()
                    }),
                )
            }
            other => baseline(other).map_err(|_| {
                Error::InvalidConfig(format!(
                    "run.policies: unknown policy `{other}` (rht, dsrht, rht-full, rht-nocontext, dsrht-z0, dsrht-z10, dsrht-opt, uniform-random)"
                ))
            })?,
        };
        if let PolicySpec::Tree(t) = &mut p.spec {
            t.k1 = self.engine.k1;
            t.m = self.engine.m;
            t.k2 = self.engine.k2;
            if let (Some(v), SliceSpec::Auto) = (&self.partition.n_t, t.n_t) {
                t.n_t = parse_slice("partition.n_t", v)?;
            }
            if let Layout::Distributed { shard, .. } = &mut t.layout {
                *shard = self.engine.shard;
            }
        }
        Ok(p)
    }

    pub fn plan(&self) -> Result<RunPlan> {
        if self.run.horizon < 3 {
            return Err(Error::HorizonTooSmall(self.run.horizon));
        }
        if self.run.policies.is_empty() {
            return Err(Error::InvalidConfig("run.policies: at least one policy is required".into()));
        }
        let seeds = self.seeds();
        if seeds.is_empty() {
            return Err(Error::InvalidConfig("run.replicas: at least one replica is required".into()));
        }
        let item_list = match &self.env.items_file {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| Error::Io(format!("env.items_file {}: {e}", path.display())))?;
                let lines = parse_items(&text, Some(self.env.d_c))?;
                let store = build_store(lines, self.env.d_c, None)?;
                Some(store.items().to_vec())
            }
            None => None,
        };
        let env = EnvSpec {
            family: self.env.family,
            d_x: self.env.d_x,
            d_c: self.env.d_c,
            sigma: self.env.sigma,
            sharpness: self.env.sharpness,
            l_x: self.env.l_x,
            alpha: self.env.alpha,
            items: self.env.items,
            seed: self.env.seed,
            context: self.env.context.clone(),
            arrival_rate: self.env.arrival_rate,
            item_list,
        };
        if !(env.arrival_rate >= 0.0 && env.arrival_rate.is_finite()) {
            return Err(Error::InvalidConfig("env.arrival_rate must be finite and >= 0".into()));
        }
        env.model()?;
        let mut experiment = ExperimentSpec::new(self.run.horizon, seeds);
        experiment.extra_checkpoints = self.run.checkpoints.clone();
        experiment.reference_n_t = parse_slice("partition.reference_n_t", &self.partition.reference_n_t)?;
        experiment.slope_from = self.run.slope_from;
        experiment.jobs = self.run.jobs.max(1);
        let policies = self
            .run
            .policies
            .iter()
            .map(|n| self.policy(n))
            .collect::<Result<Vec<_>>>()?;
        Ok(RunPlan {
            policies,
            env,
            experiment,
        })
    }

    /// The config with explicit seeds and the derived parameters filled in.
    pub fn echo(&self, resolved: &[ResolvedPolicy], reference_n_t: u32) -> Result<String> {
        let mut e = self.clone();
        e.run.seeds = Some(self.seeds());
        e.partition.reference_n_t = IntOrWord::Int(reference_n_t);
        if let Some(r) = resolved.iter().find(|r| r.name == "dsrht") {
            e.engine.z = r.z.map(IntOrWord::Int);
            e.engine.units = r.units.map(IntOrWord::Int);
        }
        e.resolved = resolved.to_vec();
        toml::to_string(&e).map_err(|e| Error::InvalidConfig(e.to_string()))
    }
}
