//! State space, jump rates, time scale and invariant measure of the
//! inclusion process on the discrete torus `Z / LZ`.
//!
//! A particle at `x` jumps to a neighbour `y = x ± 1` at rate
//! `θ_N · η_x · (d_N + η_y)` with `θ_N = N² / d_N`. Because the time scale is
//! folded into the rates, one unit of simulated time is one unit of the
//! macroscopic (rescaled) clock.
//!
//! The measure `μ_N(η) = Π_y w_{η_y}`, `w_n = Γ(d+n) / (Γ(d) n!)`, satisfies
//! detailed balance. It underflows badly for small `d`, so everything here is
//! kept in log space.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid parameter: {0}")]
    InvalidParams(String),
    #[error("site {site} is empty, no particle can jump from it")]
    EmptySite { site: usize },
    #[error("site {site} is outside the torus of size {len}")]
    SiteOutOfRange { site: usize, len: usize },
    #[error("configuration holds {found} particles, expected {expected}")]
    MassMismatch { expected: u32, found: u32 },
}

/// Jump direction on the torus.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    Plus,
    Minus,
}

impl Direction {
    pub const BOTH: [Direction; 2] = [Direction::Plus, Direction::Minus];

    #[inline]
    pub fn reverse(self) -> Self {
        match self {
            Direction::Plus => Direction::Minus,
            Direction::Minus => Direction::Plus,
        }
    }

    /// Site reached from `x` on a torus of size `len`.
    #[inline]
    pub fn step(self, x: usize, len: usize) -> usize {
        match self {
            Direction::Plus => {
                if x + 1 == len {
                    0
                } else {
                    x + 1
                }
            }
            Direction::Minus => {
                if x == 0 {
                    len - 1
                } else {
                    x - 1
                }
            }
        }
    }

    pub fn sign(self) -> i64 {
        match self {
            Direction::Plus => 1,
            Direction::Minus => -1,
        }
    }
}

/// Scalar parameters of the process.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    n: u32,
    l: usize,
    d: f64,
    theta: f64,
    rho: f64,
    k: usize,
}

impl ModelParams {
    /// Builds the parameter set; `θ_N` and `ρ` are derived from `n`, `l`, `d`.
    ///
    /// Logs a warning (but succeeds) when `d·N³·log N > 1`, i.e. outside the
    /// condensing regime, or when `L < 6k`.
    pub fn new(n: u32, l: usize, d: f64, k: usize) -> Result<Self, ModelError> {
        if n < 1 {
            return Err(ModelError::InvalidParams("N must be at least 1".into()));
        }
        if l < 3 {
            return Err(ModelError::InvalidParams(format!(
                "L must be at least 3 (got {l})"
            )));
        }
        if !(d > 0.0 && d.is_finite()) {
            return Err(ModelError::InvalidParams(format!(
                "d_N must be positive and finite (got {d})"
            )));
        }
        if k < 1 {
            return Err(ModelError::InvalidParams("k must be at least 1".into()));
        }
        let nf = f64::from(n);
        let params = ModelParams {
            n,
            l,
            d,
            theta: nf * nf / d,
            rho: nf / l as f64,
            k,
        };
        let indicator = params.condensing_indicator();
        if indicator > 1.0 {
            log::warn!(
                "d_N·N³·log N = {indicator:.3e} exceeds 1: outside the condensing regime"
            );
        }
        if l < 6 * k {
            log::warn!("L = {l} < 6k = {}: k well separated condensates may not fit", 6 * k);
        }
        Ok(params)
    }

    /// `d_N = c · N^(−α)`.
    pub fn with_power_law(n: u32, l: usize, c: f64, alpha: f64, k: usize) -> Result<Self, ModelError> {
        Self::new(n, l, c * f64::from(n).powf(-alpha), k)
    }

    #[inline]
    pub fn n(&self) -> u32 {
        self.n
    }
    #[inline]
    pub fn l(&self) -> usize {
        self.l
    }
    #[inline]
    pub fn d(&self) -> f64 {
        self.d
    }
    #[inline]
    pub fn theta(&self) -> f64 {
        self.theta
    }
    #[inline]
    pub fn rho(&self) -> f64 {
        self.rho
    }
    #[inline]
    pub fn k(&self) -> usize {
        self.k
    }

    /// `d_N · N³ · log N`; small values mean the condensing regime.
    pub fn condensing_indicator(&self) -> f64 {
        let nf = f64::from(self.n);
        self.d * nf.powi(3) * nf.ln()
    }

    /// Same parameters with a different `d_N` (θ_N recomputed).
    pub fn with_d(&self, d: f64) -> Result<Self, ModelError> {
        Self::new(self.n, self.l, d, self.k)
    }

    /// Rate of a jump out of a site holding `from` particles into a site
    /// holding `to` particles, without the `θ_N` prefactor.
    #[inline]
    pub(crate) fn reduced_rate(&self, from: u32, to: u32) -> f64 {
        f64::from(from) * (self.d + f64::from(to))
    }
}

/// Occupancy vector on the torus with a cached total.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Configuration {
    occupancy: Vec<u32>,
    total: u32,
}

impl Configuration {
    pub fn new(occupancy: Vec<u32>) -> Result<Self, ModelError> {
        if occupancy.len() < 3 {
            return Err(ModelError::InvalidParams(format!(
                "torus size must be at least 3 (got {})",
                occupancy.len()
            )));
        }
        let total = occupancy.iter().sum();
        Ok(Configuration { occupancy, total })
    }

    /// Builds `Σ m_i δ^{x_i}`; repeated sites accumulate.
    pub fn from_condensates(len: usize, condensates: &[(usize, u32)]) -> Result<Self, ModelError> {
        let mut occupancy = vec![0u32; len];
        for &(site, mass) in condensates {
            if site >= len {
                return Err(ModelError::SiteOutOfRange { site, len });
            }
            occupancy[site] += mass;
        }
        Self::new(occupancy)
    }

    /// All `n` particles on `site`.
    pub fn condensed_at(len: usize, site: usize, n: u32) -> Result<Self, ModelError> {
        Self::from_condensates(len, &[(site, n)])
    }

    /// Checks the total against the model's `N` and the size against `L`.
    pub fn check_against(&self, params: &ModelParams) -> Result<(), ModelError> {
        if self.occupancy.len() != params.l() {
            return Err(ModelError::InvalidParams(format!(
                "configuration has {} sites, model has L = {}",
                self.occupancy.len(),
                params.l()
            )));
        }
        if self.total != params.n() {
            return Err(ModelError::MassMismatch {
                expected: params.n(),
                found: self.total,
            });
        }
        Ok(())
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.occupancy.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.total == 0
    }

    #[inline]
    pub fn total(&self) -> u32 {
        self.total
    }

    #[inline]
    pub fn get(&self, site: usize) -> u32 {
        self.occupancy[site]
    }

    #[inline]
    pub fn occupancy(&self) -> &[u32] {
        &self.occupancy
    }

    pub fn occupied_sites(&self) -> impl Iterator<Item = usize> + '_ {
        self.occupancy
            .iter()
            .enumerate()
            .filter(|(_, &m)| m > 0)
            .map(|(x, _)| x)
    }

    /// `η − δ^x + δ^{x+dir}`.
    pub fn apply_jump(&self, site: usize, dir: Direction) -> Result<Configuration, ModelError> {
        let mut next = self.clone();
        next.apply_jump_in_place(site, dir)?;
        Ok(next)
    }

    pub(crate) fn apply_jump_in_place(&mut self, site: usize, dir: Direction) -> Result<usize, ModelError> {
        let len = self.len();
        if site >= len {
            return Err(ModelError::SiteOutOfRange { site, len });
        }
        if self.occupancy[site] == 0 {
            return Err(ModelError::EmptySite { site });
        }
        let to = dir.step(site, len);
        self.occupancy[site] -= 1;
        self.occupancy[to] += 1;
        Ok(to)
    }

    /// Rotation by `shift` sites: `η'_{x+shift} = η_x`.
    pub fn rotated(&self, shift: usize) -> Configuration {
        let len = self.len();
        let mut occupancy = vec![0; len];
        for (x, &m) in self.occupancy.iter().enumerate() {
            occupancy[(x + shift) % len] = m;
        }
        Configuration {
            occupancy,
            total: self.total,
        }
    }
}

/// One non-zero entry of the rate table of a configuration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActiveRate {
    pub site: usize,
    pub dir: Direction,
    pub rate: f64,
}

/// `θ_N · η_x · (d_N + η_{x+dir})`.
pub fn jump_rate(params: &ModelParams, eta: &Configuration, site: usize, dir: Direction) -> f64 {
    let to = dir.step(site, eta.len());
    params.theta() * params.reduced_rate(eta.get(site), eta.get(to))
}

/// Non-zero jump rates, by ascending site with `+` before `−`.
pub fn active_rates(params: &ModelParams, eta: &Configuration) -> Vec<ActiveRate> {
    eta.occupied_sites()
        .flat_map(|site| {
            Direction::BOTH.into_iter().map(move |dir| ActiveRate {
                site,
                dir,
                rate: jump_rate(params, eta, site, dir),
            })
        })
        .collect()
}

/// `log w_n` with `w_n = Γ(d+n) / (Γ(d) n!)`.
///
/// Evaluated as `log(d/n) + Σ_{j<n} log1p(d/j)`, which is the same quantity
/// without the cancellation between two large log-gamma values at small `d`.
pub fn log_weight(params: &ModelParams, n: u32) -> f64 {
    log_weight_for(params.d(), n)
}

pub(crate) fn log_weight_for(d: f64, n: u32) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let tail: f64 = (1..n).map(|j| (d / f64::from(j)).ln_1p()).sum();
    d.ln() - f64::from(n).ln() + tail
}

/// Table of `log w_n` for `n = 0..=max`.
pub fn log_weight_table(params: &ModelParams, max: u32) -> Vec<f64> {
    let d = params.d();
    let mut table = Vec::with_capacity(max as usize + 1);
    table.push(0.0);
    let mut acc = 0.0;
    for n in 1..=max {
        if n > 1 {
            acc += (d / f64::from(n - 1)).ln_1p();
        }
        table.push(d.ln() - f64::from(n).ln() + acc);
    }
    table
}

/// `log μ_N(η) = Σ_y log w_{η_y}` (unnormalised).
pub fn log_mu(params: &ModelParams, eta: &Configuration) -> f64 {
    eta.occupancy()
        .iter()
        .filter(|&&m| m > 0)
        .map(|&m| log_weight(params, m))
        .sum()
}
