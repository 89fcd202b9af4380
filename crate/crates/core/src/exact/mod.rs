//! Exhaustive analysis of small systems: generator matrix, invariant
//! measure, resolvent equation, exact trace rates and escape probabilities.

pub mod sparse;
pub mod state_index;

use thiserror::Error;

use crate::condensate::{classify, subclass, Classification, CondensedView, Subclass};
use crate::model::{log_mu, Configuration, Direction, ModelParams};

pub use sparse::{CsrMatrix, SolveInfo};
pub use state_index::{StateIndex, STATE_GUARD};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExactError {
    #[error("state space exceeds the guard of {guard} states")]
    TooLarge { states: Option<usize>, guard: usize },
    #[error("linear solve failed: {reason} (condition estimate {condition_estimate:e})")]
    SolveFailed { reason: String, condition_estimate: f64 },
    #[error("invalid input: {0}")]
    Invalid(String),
}

/// Generator `𝓛` of the chain on `Ω_{N,L}` together with its state index.
#[derive(Debug, Clone)]
pub struct GeneratorMatrix {
    pub index: StateIndex,
    pub matrix: CsrMatrix,
}

impl GeneratorMatrix {
    pub fn size(&self) -> usize {
        self.index.size()
    }

    /// Total jump rate out of state `i`.
    pub fn holding_rate(&self, i: usize) -> f64 {
        -self.matrix.get(i, i)
    }
}

/// Assembles `𝓛` over all states.
pub fn build_generator(params: &ModelParams) -> Result<GeneratorMatrix, ExactError> {
    let index = StateIndex::new(params.n(), params.l())?;
    let len = params.l();
    let size = index.size();
    let mut rows = Vec::with_capacity(size);
    let mut buf = vec![0u32; len];
    for s in 0..size {
        let occ = index.occupancy(s);
        let mut row = Vec::with_capacity(2 * len + 1);
        let mut out = 0.0;
        for x in 0..len {
            if occ[x] == 0 {
                continue;
            }
            for dir in Direction::BOTH {
                let y = dir.step(x, len);
                let rate = params.theta() * f64::from(occ[x]) * (params.d() + f64::from(occ[y]));
                buf.copy_from_slice(occ);
                buf[x] -= 1;
                buf[y] += 1;
                let t = index.rank(&buf).expect("jump stays in the state space");
                row.push((t, rate));
                out += rate;
            }
        }
        row.push((s, -out));
        rows.push(row);
    }
    Ok(GeneratorMatrix {
        matrix: CsrMatrix::from_rows(size, rows),
        index,
    })
}

/// `μ_N` normalised over `Ω_{N,L}`, by state rank.
pub fn stationary_distribution(params: &ModelParams, index: &StateIndex) -> Vec<f64> {
    let logs: Vec<f64> = (0..index.size()).map(|s| log_mu(params, &index.decode(s))).collect();
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = w.iter().sum();
    w.into_iter().map(|x| x / z).collect()
}

/// `max_η |(μᵀ𝓛)_η|` divided by the largest flux `max_η Σ_ζ μ_ζ|𝓛(ζ,η)|`.
pub fn stationarity_residual(params: &ModelParams) -> Result<f64, ExactError> {
    let gen = build_generator(params)?;
    let mu = stationary_distribution(params, &gen.index);
    Ok(stationarity_residual_of(&gen, &mu))
}

pub fn stationarity_residual_of(gen: &GeneratorMatrix, mu: &[f64]) -> f64 {
    let n = gen.size();
    let mut flux = vec![0.0; n];
    let mut scale = vec![0.0; n];
    for (i, &m) in mu.iter().enumerate() {
        for (j, v) in gen.matrix.row(i) {
            flux[j] += m * v;
            scale[j] += (m * v).abs();
        }
    }
    let top = scale.iter().copied().fold(0.0, f64::max);
    flux.iter().map(|f| f.abs()).fold(0.0, f64::max) / top
}

/// `max |μ_i 𝓛_ij − μ_j 𝓛_ji|` relative to the largest flux `μ_i 𝓛_ij`.
pub fn reversibility_defect(gen: &GeneratorMatrix, mu: &[f64]) -> f64 {
    let mut worst = 0.0f64;
    let mut top = 0.0f64;
    for i in 0..gen.size() {
        for (j, v) in gen.matrix.row(i) {
            if i == j {
                continue;
            }
            let a = mu[i] * v;
            let b = mu[j] * gen.matrix.get(j, i);
            worst = worst.max((a - b).abs());
            top = top.max(a.abs());
        }
    }
    worst / top
}

/// Right-hand side of the resolvent equation.
#[derive(Debug, Clone, PartialEq)]
pub enum Rhs {
    Ones,
    Zero,
    /// Indicator of `Δ_N = Ω_N \ E_N`.
    NotCondensed,
    Custom(Vec<f64>),
}

/// Solution of `(λ − 𝓛) F = rhs` with diagnostics.
#[derive(Debug, Clone)]
pub struct ResolventSolution {
    pub values: Vec<f64>,
    /// `‖(λ − 𝓛)F − rhs‖_∞`.
    pub residual: f64,
    /// Componentwise backward error of the solve.
    pub backward_error: f64,
    pub condition_estimate: f64,
}

/// Indicator of E_N by state rank.
pub fn condensed_mask(params: &ModelParams, index: &StateIndex) -> Vec<bool> {
    (0..index.size())
        .map(|s| matches!(classify(params, &index.decode(s)), Classification::Condensed(_)))
        .collect()
}

pub fn resolvent_solve(params: &ModelParams, lambda: f64, rhs: &Rhs) -> Result<(GeneratorMatrix, ResolventSolution), ExactError> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(ExactError::Invalid(format!("lambda must be positive (got {lambda})")));
    }
    let gen = build_generator(params)?;
    let sol = resolvent_solve_with(params, &gen, lambda, rhs)?;
    Ok((gen, sol))
}

pub fn resolvent_solve_with(
    params: &ModelParams,
    gen: &GeneratorMatrix,
    lambda: f64,
    rhs: &Rhs,
) -> Result<ResolventSolution, ExactError> {
    let n = gen.size();
    let b: Vec<f64> = match rhs {
        Rhs::Ones => vec![1.0; n],
        Rhs::Zero => vec![0.0; n],
        Rhs::NotCondensed => condensed_mask(params, &gen.index)
            .into_iter()
            .map(|c| if c { 0.0 } else { 1.0 })
            .collect(),
        Rhs::Custom(v) => {
            if v.len() != n {
                return Err(ExactError::Invalid(format!("rhs has {} entries, expected {n}", v.len())));
            }
            v.clone()
        }
    };
    let rows = (0..n)
        .map(|i| {
            gen.matrix
                .row(i)
                .map(|(j, v)| (j, if i == j { lambda - v } else { -v }))
                .collect()
        })
        .collect();
    let a = CsrMatrix::from_rows(n, rows);
    let (values, info) = sparse::solve(&a, &b, false)?;
    Ok(ResolventSolution {
        residual: sparse::residual_inf(&a, &values, &b),
        backward_error: info.backward_error,
        condition_estimate: info.condition_estimate,
        values,
    })
}

/// Exact trace-process rates out of a condensed state.
#[derive(Debug, Clone)]
pub struct TraceRates {
    /// Target configurations in E_N (excluding the origin) with rates.
    pub rates: Vec<(Configuration, f64)>,
    /// Rate of excursions that return to the origin.
    pub self_rate: f64,
    /// Raw holding rate of the origin; equals the sum of all trace rates
    /// plus `self_rate`.
    pub raw_total: f64,
}

impl TraceRates {
    pub fn rate_to(&self, target: &Configuration) -> f64 {
        self.rates
            .iter()
            .find(|(c, _)| c == target)
            .map(|(_, r)| *r)
            .unwrap_or(0.0)
    }

    pub fn total(&self) -> f64 {
        self.rates.iter().map(|(_, r)| r).sum()
    }
}

/// `R(ξ, ζ') = r(ξ, ζ') + Σ_{η∉E} r(ξ, η) P_η[first hit of E_N is ζ']`.
///
/// With `A = (−𝓛)` restricted to `Δ = Ω \ E` and `v_η = r(ξ, η)`, the sum
/// is `yᵀ 𝓛_{Δ,ζ'}` for `y = A^{−T} v`: one transposed solve serves every
/// target.
pub fn exact_trace_rates(params: &ModelParams, xi: &CondensedView) -> Result<TraceRates, ExactError> {
    let gen = build_generator(params)?;
    exact_trace_rates_with(params, &gen, xi)
}

pub fn exact_trace_rates_with(params: &ModelParams, gen: &GeneratorMatrix, xi: &CondensedView) -> Result<TraceRates, ExactError> {
    let origin_cfg = xi.to_configuration();
    let origin = gen
        .index
        .encode(&origin_cfg)
        .ok_or_else(|| ExactError::Invalid("origin does not match N and L".into()))?;
    let in_e = condensed_mask(params, &gen.index);
    if !in_e[origin] {
        return Err(ExactError::Invalid("origin is not condensed".into()));
    }
    let delta: Vec<usize> = (0..gen.size()).filter(|&s| !in_e[s]).collect();
    let mut pos = vec![usize::MAX; gen.size()];
    for (k, &s) in delta.iter().enumerate() {
        pos[s] = k;
    }
    let mut target_rate = vec![0.0; gen.size()];
    let mut v = vec![0.0; delta.len()];
    for (j, r) in gen.matrix.row(origin) {
        if j == origin {
            continue;
        }
        if in_e[j] {
            target_rate[j] += r;
        } else {
            v[pos[j]] = r;
        }
    }
    if !delta.is_empty() {
        let rows = delta
            .iter()
            .map(|&s| {
                gen.matrix
                    .row(s)
                    .filter(|&(j, _)| pos[j] != usize::MAX)
                    .map(|(j, val)| (pos[j], -val))
                    .collect()
            })
            .collect();
        let a = CsrMatrix::from_rows(delta.len(), rows);
        let (y, _) = sparse::solve(&a, &v, true)?;
        for (k, &s) in delta.iter().enumerate() {
            if y[k] == 0.0 {
                continue;
            }
            for (j, r) in gen.matrix.row(s) {
                if in_e[j] {
                    target_rate[j] += y[k] * r;
                }
            }
        }
    }
    let mut rates = Vec::new();
    for (s, &r) in target_rate.iter().enumerate() {
        if s != origin && r > 0.0 {
            rates.push((gen.index.decode(s), r));
        }
    }
    Ok(TraceRates {
        rates,
        self_rate: target_rate[origin],
        raw_total: gen.holding_rate(origin),
    })
}

/// `P_ξ[H_{E^{<ℓ}} < H_{J^ℓ}]` for `ξ ∈ K` with `ℓ` condensates: the chance
/// that a state with a close pair loses a condensate before all its
/// condensates separate.
pub fn exact_escape_prob(params: &ModelParams, xi: &CondensedView) -> Result<f64, ExactError> {
    let gen = build_generator(params)?;
    exact_escape_prob_with(params, &gen, xi)
}

pub fn exact_escape_prob_with(params: &ModelParams, gen: &GeneratorMatrix, xi: &CondensedView) -> Result<f64, ExactError> {
    if subclass(params, xi) != Subclass::K {
        return Err(ExactError::Invalid("escape probability needs a state with a close pair".into()));
    }
    let ell = xi.ell();
    let origin = gen
        .index
        .encode(&xi.to_configuration())
        .ok_or_else(|| ExactError::Invalid("origin does not match N and L".into()))?;
    // boundary value: Some(1) on fewer condensates, Some(0) on J with ℓ
    let boundary: Vec<Option<f64>> = (0..gen.size())
        .map(|s| match classify(params, &gen.index.decode(s)) {
            Classification::Condensed(v) if v.ell() < ell => Some(1.0),
            Classification::Condensed(v) if v.ell() == ell && subclass(params, &v) == Subclass::J => Some(0.0),
            _ => None,
        })
        .collect();
    let interior: Vec<usize> = (0..gen.size()).filter(|&s| boundary[s].is_none()).collect();
    let mut pos = vec![usize::MAX; gen.size()];
    for (k, &s) in interior.iter().enumerate() {
        pos[s] = k;
    }
    let mut b = vec![0.0; interior.len()];
    let rows = interior
        .iter()
        .enumerate()
        .map(|(k, &s)| {
            let mut row = Vec::new();
            for (j, val) in gen.matrix.row(s) {
                match boundary[j] {
                    Some(g) => b[k] += val * g,
                    None => row.push((pos[j], -val)),
                }
            }
            row
        })
        .collect();
    let a = CsrMatrix::from_rows(interior.len(), rows);
    let (g, _) = sparse::solve(&a, &b, false)?;
    Ok(g[pos[origin]].clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn params(n: u32, l: usize, d: f64, k: usize) -> ModelParams {
        ModelParams::new(n, l, d, k).unwrap()
    }

    #[test]
    fn single_walker_generator() {
        let p = params(1, 3, 0.2, 1);
        let gen = build_generator(&p).unwrap();
        assert_eq!(gen.size(), 3);
        let step = p.theta() * p.d();
        for i in 0..3 {
            assert_relative_eq!(gen.holding_rate(i), 2.0 * step);
            let off: Vec<f64> = gen.matrix.row(i).filter(|&(j, _)| j != i).map(|(_, v)| v).collect();
            assert_eq!(off.len(), 2);
            for v in off {
                assert_relative_eq!(v, step);
            }
        }
    }

    #[test]
    fn row_sums_vanish() {
        let p = params(4, 5, 0.05, 2);
        let gen = build_generator(&p).unwrap();
        assert_eq!(gen.size(), 70);
        for i in 0..gen.size() {
            let (s, scale) = gen.matrix.row(i).fold((0.0, 0.0f64), |(s, m), (_, v)| (s + v, m.max(v.abs())));
            assert!(s.abs() <= 1e-12 * scale);
        }
    }

    #[test]
    fn stationarity_small() {
        assert!(stationarity_residual(&params(3, 3, 0.1, 1)).unwrap() < 1e-10);
        for l in 3..=12 {
            assert!(stationarity_residual(&params(1, l, 0.3, 1)).unwrap() < 1e-12);
        }
        let p = params(4, 6, 1e-3, 2);
        let gen = build_generator(&p).unwrap();
        let mu = stationary_distribution(&p, &gen.index);
        assert!(reversibility_defect(&gen, &mu) < 1e-9);
    }

    #[test]
    fn resolvent_trivial_cases() {
        let p = params(3, 4, 0.1, 1);
        let (_, ones) = resolvent_solve(&p, 2.0, &Rhs::Ones).unwrap();
        for v in &ones.values {
            assert_relative_eq!(*v, 0.5, epsilon = 1e-12);
        }
        let (_, zero) = resolvent_solve(&p, 2.0, &Rhs::Zero).unwrap();
        assert!(zero.values.iter().all(|&v| v == 0.0));
        let (_, ind) = resolvent_solve(&p, 1.0, &Rhs::NotCondensed).unwrap();
        assert!(ind.values.iter().all(|&v| (-1e-12..=1.0 + 1e-12).contains(&v)));
        assert!(ind.backward_error < 1e-13);
    }

    #[test]
    fn trace_rates_without_excursions() {
        // N = 1: every state is condensed, trace rates are the raw rates
        let p = params(1, 5, 0.3, 1);
        let xi = CondensedView {
            positions: vec![2],
            masses: vec![1],
            len: 5,
        };
        let tr = exact_trace_rates(&p, &xi).unwrap();
        assert_eq!(tr.rates.len(), 2);
        for (_, r) in &tr.rates {
            assert_relative_eq!(*r, p.theta() * p.d());
        }
        assert_eq!(tr.self_rate, 0.0);
    }

    #[test]
    fn trace_rates_conserve_total() {
        let p = params(4, 7, 1e-2, 2);
        let xi = CondensedView {
            positions: vec![0, 2],
            masses: vec![1, 3],
            len: 7,
        };
        let tr = exact_trace_rates(&p, &xi).unwrap();
        assert_relative_eq!(tr.total() + tr.self_rate, tr.raw_total, max_relative = 1e-9);
    }
}
