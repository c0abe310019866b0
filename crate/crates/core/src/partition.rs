//! Uniform grid partition of the context hypercube `[0,1]^d_X`.
//!
//! Every context is replaced by the center of the grid cell it falls in; each
//! cell owns an independent item tree. Intervals are half-open `[k/n, (k+1)/n)`
//! except the last one, which also owns the upper boundary `1.0`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A normalized context vector. All coordinates lie in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextPoint(Vec<f64>);

impl ContextPoint {
    pub fn new(coords: Vec<f64>) -> Result<Self> {
        if let Some((k, v)) = coords
            .iter()
            .enumerate()
            .find(|(_, v)| !(0.0..=1.0).contains(*v))
        {
            return Err(Error::InvalidContext(format!(
                "coordinate {k} = {v} is outside [0, 1]"
            )));
        }
        Ok(ContextPoint(coords))
    }

    pub fn coords(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

/// Index of a grid cell, one integer in `[0, n_T)` per context dimension.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CellId(pub Vec<u32>);

impl CellId {
    pub fn indices(&self) -> &[u32] {
        &self.0
    }
}

impl std::fmt::Display for CellId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|i| i.to_string()).collect();
        write!(f, "({})", parts.join(" "))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionConfig {
    d_x: usize,
    n_t: u32,
    alpha: f64,
    l_x: f64,
}

impl PartitionConfig {
    pub fn new(d_x: usize, n_t: u32, alpha: f64, l_x: f64) -> Result<Self> {
        if d_x == 0 {
            return Err(Error::InvalidConfig("d_x must be positive".into()));
        }
        if n_t == 0 {
            return Err(Error::InvalidConfig("n_t must be at least 1".into()));
        }
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "alpha = {alpha} must lie in (0, 1]"
            )));
        }
        if !(l_x >= 0.0 && l_x.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "l_x = {l_x} must be a nonnegative real"
            )));
        }
        Ok(PartitionConfig {
            d_x,
            n_t,
            alpha,
            l_x,
        })
    }

    pub fn d_x(&self) -> usize {
        self.d_x
    }

    pub fn n_t(&self) -> u32 {
        self.n_t
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn l_x(&self) -> f64 {
        self.l_x
    }

    /// Total number of cells, `n_T^d_X` (saturating).
    pub fn cell_count(&self) -> u64 {
        (self.n_t as u64).saturating_pow(self.d_x as u32)
    }

    pub fn locate_cell(&self, x: &ContextPoint) -> Result<CellId> {
        if x.dim() != self.d_x {
            return Err(Error::InvalidContext(format!(
                "context has {} coordinates, expected {}",
                x.dim(),
                self.d_x
            )));
        }
        let n = self.n_t;
        let indices = x
            .coords()
            .iter()
            .map(|&v| ((v * n as f64).floor() as u32).min(n - 1))
            .collect();
        Ok(CellId(indices))
    }

    /// Center point of a cell. Indices are assumed to come from this config.
    pub fn cell_center(&self, cell: &CellId) -> ContextPoint {
        let n = self.n_t as f64;
        ContextPoint(
            cell.0
                .iter()
                .map(|&i| (i as f64 + 0.5) / n)
                .collect(),
        )
    }

    /// Largest context-induced reward deviation inside one cell:
    /// `L_X * (sqrt(d_X) / n_T)^alpha`.
    pub fn context_gap(&self) -> f64 {
        self.l_x * ((self.d_x as f64).sqrt() / self.n_t as f64).powf(self.alpha)
    }

    /// Enumerate every cell in lexicographic order.
    pub fn cells(&self) -> impl Iterator<Item = CellId> + '_ {
        let total = self.cell_count();
        let n = self.n_t as u64;
        let d = self.d_x;
        (0..total).map(move |mut k| {
            let mut idx = vec![0u32; d];
            for slot in idx.iter_mut().rev() {
                *slot = (k % n) as u32;
                k /= n;
            }
            CellId(idx)
        })
    }
}

/// Per-dimension slicing number `n_T = (T / ln T)^(alpha / (d_X + alpha (d_C + 3)))`,
/// floored and clamped to at least 1.
pub fn compute_slicing_number(horizon: u64, alpha: f64, d_x: usize, d_c: usize) -> Result<u32> {
    if horizon < 3 {
        return Err(Error::HorizonTooSmall(horizon));
    }
    let t = horizon as f64;
    let exponent = alpha / (d_x as f64 + alpha * (d_c as f64 + 3.0));
    let n = (t / t.ln()).powf(exponent).floor();
    Ok(n.max(1.0) as u32)
}
