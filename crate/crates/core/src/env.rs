//! Synthetic reward worlds.
//!
//! The default family places a seeded "ideal item" `g(x)` in feature space for
//! every context and rewards items by their distance to it:
//!
//! `f(x, c) = (1 - 2 sigma) (1 - min(1, a |c - g(x)|)) + sigma`
//!
//! with `g(x) = clamp(b + M (x - 1/2))`. `M` is scaled so that `f` is
//! Lipschitz in `x` with constant at most `L_X` (Hoelder exponent `alpha`).
//! Observed rewards add uniform noise on `(-sigma, sigma)`, so they stay in
//! `[0, 1]`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::items::{CourseItem, ItemKey, ItemStore};
use crate::partition::{CellId, ContextPoint, PartitionConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RewardFamily {
    /// The ideal item moves with the context.
    IdealPoint,
    /// The ideal item is fixed; rewards ignore the context.
    ContextFree,
}

impl std::str::FromStr for RewardFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ideal-point" => Ok(RewardFamily::IdealPoint),
            "context-free" => Ok(RewardFamily::ContextFree),
            other => Err(Error::InvalidConfig(format!(
                "unknown reward family `{other}` (ideal-point | context-free)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardModel {
    family: RewardFamily,
    d_x: usize,
    d_c: usize,
    sigma: f64,
    sharpness: f64,
    l_x: f64,
    alpha: f64,
    seed: u64,
    offset: Vec<f64>,
    /// `d_c x d_x`, row-major.
    slope: Vec<f64>,
}

#[allow(clippy::too_many_arguments)]
impl RewardModel {
    pub fn new(
        family: RewardFamily,
        d_x: usize,
        d_c: usize,
        sigma: f64,
        sharpness: f64,
        l_x: f64,
        alpha: f64,
        seed: u64,
    ) -> Result<Self> {
        if d_x == 0 || d_c == 0 {
            return Err(Error::InvalidConfig("d_x and d_c must be positive".into()));
        }
        if !(0.0..0.5).contains(&sigma) {
            return Err(Error::InvalidConfig(format!(
                "noise half-width sigma = {sigma} must lie in [0, 0.5)"
            )));
        }
        if !(sharpness > 0.0 && sharpness.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "sharpness = {sharpness} must be positive"
            )));
        }
        if !(l_x >= 0.0 && l_x.is_finite()) || !(alpha > 0.0 && alpha <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "need l_x >= 0 and alpha in (0, 1], got l_x = {l_x}, alpha = {alpha}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let offset: Vec<f64> = (0..d_c).map(|_| rng.gen_range(0.2..0.8)).collect();
        let mut slope: Vec<f64> = (0..d_c * d_x).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let norm = slope.iter().map(|v| v * v).sum::<f64>().sqrt();
        // |f(x) - f(x')| <= (1 - 2 sigma) a |M|_F |x - x'| and
        // |x - x'| <= |x - x'|^alpha sqrt(d_x)^(1 - alpha) on the unit cube.
        let target = l_x
            / ((1.0 - 2.0 * sigma) * sharpness * (d_x as f64).sqrt().powf(1.0 - alpha));
        let scale = if family == RewardFamily::ContextFree || norm == 0.0 {
            0.0
        } else {
            target / norm
        };
        slope.iter_mut().for_each(|v| *v *= scale);
        Ok(RewardModel {
            family,
            d_x,
            d_c,
            sigma,
            sharpness,
            l_x,
            alpha,
            seed,
            offset,
            slope,
        })
    }

    pub fn family(&self) -> RewardFamily {
        self.family
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn d_x(&self) -> usize {
        self.d_x
    }

    pub fn d_c(&self) -> usize {
        self.d_c
    }

    pub fn sharpness(&self) -> f64 {
        self.sharpness
    }

    /// Hoelder constant (exponent `alpha`) of `f` in the context.
    pub fn context_lipschitz(&self) -> f64 {
        match self.family {
            RewardFamily::ContextFree => 0.0,
            RewardFamily::IdealPoint => self.l_x,
        }
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// Ideal point at the center of the context cube.
    pub fn offset(&self) -> &[f64] {
        &self.offset
    }

    /// Drift of the ideal point per unit of context, `d_c x d_x` row-major.
    pub fn slope(&self) -> &[f64] {
        &self.slope
    }

    /// The feature point with the highest mean reward for context `x`.
    pub fn ideal_point(&self, x: &[f64]) -> Vec<f64> {
        (0..self.d_c)
            .map(|j| {
                let row = &self.slope[j * self.d_x..(j + 1) * self.d_x];
                let v = self.offset[j]
                    + row
                        .iter()
                        .zip(x)
                        .map(|(m, xk)| m * (xk - 0.5))
                        .sum::<f64>();
                v.clamp(0.0, 1.0)
            })
            .collect()
    }

    /// Unchecked evaluation on raw slices.
    pub fn mean_reward_raw(&self, x: &[f64], c: &[f64]) -> f64 {
        let g = self.ideal_point(x);
        let dist = g
            .iter()
            .zip(c)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        (1.0 - 2.0 * self.sigma) * (1.0 - (self.sharpness * dist).min(1.0)) + self.sigma
    }

    fn check_dims(&self, x: &ContextPoint, c: &CourseItem) -> Result<()> {
        if x.dim() != self.d_x {
            return Err(Error::ConfigMismatch(format!(
                "context has {} coordinates, model expects {}",
                x.dim(),
                self.d_x
            )));
        }
        if c.features.len() != self.d_c {
            return Err(Error::ConfigMismatch(format!(
                "item {} has {} features, model expects {}",
                c.id,
                c.features.len(),
                self.d_c
            )));
        }
        Ok(())
    }

    pub fn mean_reward(&self, x: &ContextPoint, c: &CourseItem) -> Result<f64> {
        self.check_dims(x, c)?;
        Ok(self.mean_reward_raw(x.coords(), &c.features))
    }

    /// Mean reward plus uniform noise on `(-sigma, sigma)`.
    pub fn sample_reward<R: Rng + ?Sized>(
        &self,
        x: &ContextPoint,
        c: &CourseItem,
        rng: &mut R,
    ) -> Result<f64> {
        let f = self.mean_reward(x, c)?;
        Ok(self.add_noise(f, rng))
    }

    pub fn add_noise<R: Rng + ?Sized>(&self, mean: f64, rng: &mut R) -> f64 {
        if self.sigma == 0.0 {
            return mean;
        }
        (mean + rng.gen_range(-self.sigma..self.sigma)).clamp(0.0, 1.0)
    }
}

/// Exhaustive argmax of the mean reward at the center of `cell`.
/// Ties go to the lowest item id.
pub fn oracle_best(
    model: &RewardModel,
    partition: &PartitionConfig,
    cell: &CellId,
    store: &ItemStore,
) -> Result<(ItemKey, f64)> {
    let center = partition.cell_center(cell);
    if center.dim() != model.d_x || store.d_c() != model.d_c {
        return Err(Error::ConfigMismatch(
            "partition or item store dimensions differ from the reward model".into(),
        ));
    }
    best_at(model, center.coords(), store).ok_or(Error::NoItems)
}

/// Best item for a raw context; `None` on an empty store.
pub fn best_at(model: &RewardModel, x: &[f64], store: &ItemStore) -> Option<(ItemKey, f64)> {
    let g = model.ideal_point(x);
    let scale = 1.0 - 2.0 * model.sigma;
    let mut best: Option<(ItemKey, f64)> = None;
    for key in store.keys() {
        let c = store.get(key);
        let dist = g
            .iter()
            .zip(&c.features)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let f = scale * (1.0 - (model.sharpness * dist).min(1.0)) + model.sigma;
        best = match best {
            Some((k, v)) if v > f || (v == f && store.get(k).id < c.id) => Some((k, v)),
            _ => Some((key, f)),
        };
    }
    best
}

/// `n` items with uniform features in `[0,1]^d_c` and ids `first_id..`.
pub fn generate_items<R: Rng + ?Sized>(n: usize, d_c: usize, first_id: u64, rng: &mut R) -> Vec<CourseItem> {
    (0..n)
        .map(|i| CourseItem {
            id: first_id + i as u64,
            features: (0..d_c).map(|_| rng.gen::<f64>()).collect(),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ContextDistribution {
    Uniform,
    /// Contexts fall uniformly inside `components` seeded cells of a
    /// `grid^d_x` lattice.
    MixtureOfCells { grid: u32, components: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextStream {
    d_x: usize,
    distribution: ContextDistribution,
    /// Lower corners of the mixture cells.
    corners: Vec<Vec<f64>>,
}

impl ContextStream {
    pub fn new(d_x: usize, distribution: ContextDistribution, seed: u64) -> Result<Self> {
        let corners = match &distribution {
            ContextDistribution::Uniform => Vec::new(),
            ContextDistribution::MixtureOfCells { grid, components } => {
                if *grid == 0 || *components == 0 {
                    return Err(Error::InvalidConfig(
                        "mixture needs a positive grid and component count".into(),
                    ));
                }
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                (0..*components)
                    .map(|_| {
                        (0..d_x)
                            .map(|_| rng.gen_range(0..*grid) as f64 / *grid as f64)
                            .collect()
                    })
                    .collect()
            }
        };
        Ok(ContextStream {
            d_x,
            distribution,
            corners,
        })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> ContextPoint {
        let coords = match &self.distribution {
            ContextDistribution::Uniform => (0..self.d_x).map(|_| rng.gen::<f64>()).collect(),
            ContextDistribution::MixtureOfCells { grid, .. } => {
                let corner = &self.corners[rng.gen_range(0..self.corners.len())];
                let w = 1.0 / *grid as f64;
                corner
                    .iter()
                    .map(|c| (c + w * rng.gen::<f64>()).min(1.0))
                    .collect()
            }
        };
        ContextPoint::new(coords).expect("sampled contexts lie in the unit cube")
    }
}
