//! Birth–death chains on `⟦0, M⟧` absorbed at both ends.
//!
//! `Inner` has up-rates `a_i = θ(M−i)(i+d)` and down-rates
//! `b_i = θ·i·(M−i+d)`; `Edge` keeps `a_i` and uses `b_i = θ·i·(M−i+2d)`.
//! They describe the particle count on one site of a two-site (respectively
//! three-site) excursion slab.
//!
//! Products of rate ratios are accumulated in log space and outer sums use a
//! running log-sum-exp, so `M` in the millions is safe.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{exponential, open_unit};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BdError {
    #[error("invalid chain: {0}")]
    InvalidSpec(String),
    #[error("state {i} outside the admissible range [{lo}, {hi}]")]
    OutOfRange { i: u64, lo: u64, hi: u64 },
    #[error("bound violated for M = {m}: {what} (value {value:.6e}, bound {bound:.6e})")]
    BoundViolation {
        m: u64,
        what: &'static str,
        value: f64,
        bound: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    Inner,
    Edge,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BDSpec {
    m: u64,
    theta: f64,
    d: f64,
    variant: Variant,
}

impl BDSpec {
    pub fn new(m: u64, theta: f64, d: f64, variant: Variant) -> Result<Self, BdError> {
        if m < 2 {
            return Err(BdError::InvalidSpec(format!("M must be at least 2 (got {m})")));
        }
        if !(theta > 0.0 && theta.is_finite()) {
            return Err(BdError::InvalidSpec(format!("theta must be positive (got {theta})")));
        }
        if !(d > 0.0 && d.is_finite()) {
            return Err(BdError::InvalidSpec(format!("d must be positive (got {d})")));
        }
        Ok(BDSpec { m, theta, d, variant })
    }

    pub fn m(&self) -> u64 {
        self.m
    }
    pub fn theta(&self) -> f64 {
        self.theta
    }
    pub fn d(&self) -> f64 {
        self.d
    }
    pub fn variant(&self) -> Variant {
        self.variant
    }

    /// `(a_i, b_i)` without bounds checking.
    #[inline]
    fn rates_unchecked(&self, i: u64) -> (f64, f64) {
        let (m, i) = (self.m as f64, i as f64);
        let a = self.theta * (m - i) * (i + self.d);
        let down_d = match self.variant {
            Variant::Inner => self.d,
            Variant::Edge => 2.0 * self.d,
        };
        let b = self.theta * i * (m - i + down_d);
        (a, b)
    }

    /// `log(b_i / a_i)` evaluated without the common `θ`.
    #[inline]
    fn log_ratio(&self, i: u64) -> f64 {
        let (m, i) = (self.m as f64, i as f64);
        let down_d = match self.variant {
            Variant::Inner => self.d,
            Variant::Edge => 2.0 * self.d,
        };
        (i.ln() + (m - i + down_d).ln()) - ((m - i).ln() + (i + self.d).ln())
    }
}

/// `(a_i, b_i)` for `1 ≤ i ≤ M−1`.
pub fn rates(spec: &BDSpec, i: u64) -> Result<(f64, f64), BdError> {
    if i < 1 || i >= spec.m {
        return Err(BdError::OutOfRange { i, lo: 1, hi: spec.m - 1 });
    }
    Ok(spec.rates_unchecked(i))
}

fn check_state(spec: &BDSpec, i: u64) -> Result<(), BdError> {
    if i > spec.m {
        return Err(BdError::OutOfRange { i, lo: 0, hi: spec.m });
    }
    Ok(())
}

/// Numerically stable accumulator for `log Σ exp(x_j)`.
#[derive(Debug, Clone, Copy)]
struct LogSum {
    max: f64,
    scaled: f64,
}

impl LogSum {
    fn new() -> Self {
        LogSum {
            max: f64::NEG_INFINITY,
            scaled: 0.0,
        }
    }

    fn add(&mut self, x: f64) {
        if x == f64::NEG_INFINITY {
            return;
        }
        if x <= self.max {
            self.scaled += (x - self.max).exp();
        } else {
            self.scaled = self.scaled * (self.max - x).exp() + 1.0;
            self.max = x;
        }
    }

    fn value(&self) -> f64 {
        if self.max == f64::NEG_INFINITY {
            f64::NEG_INFINITY
        } else {
            self.max + self.scaled.ln()
        }
    }
}

fn log_add(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// `log S(i)` for `i = 0..=M`, `S(i) = Σ_{j≤i} Π_{m<j} b_m/a_m`.
fn log_scale_prefix(spec: &BDSpec) -> Vec<f64> {
    let m = spec.m;
    let mut out = Vec::with_capacity(m as usize + 1);
    out.push(f64::NEG_INFINITY);
    let mut acc = LogSum::new();
    let mut log_pi = 0.0;
    for j in 1..=m {
        if j > 1 {
            log_pi += spec.log_ratio(j - 1);
        }
        acc.add(log_pi);
        out.push(acc.value());
    }
    out
}

/// `P_i[x_H = M]`.
pub fn absorb_prob(spec: &BDSpec, i: u64) -> Result<f64, BdError> {
    check_state(spec, i)?;
    if i == 0 {
        return Ok(0.0);
    }
    if i == spec.m {
        return Ok(1.0);
    }
    let s = log_scale_prefix(spec);
    Ok((s[i as usize] - s[spec.m as usize]).exp())
}

/// `log G_j` for `j = 1..=M` (index 0 unused), with
/// `G_j = Σ_{n=j}^{M−1} (1/b_n) Π_{m=j}^{n−1} a_m/b_m = 1/b_j + (a_j/b_j) G_{j+1}`.
fn log_g(spec: &BDSpec) -> Vec<f64> {
    let m = spec.m as usize;
    let mut g = vec![f64::NEG_INFINITY; m + 1];
    for j in (1..m).rev() {
        let (a, b) = spec.rates_unchecked(j as u64);
        g[j] = log_add(-b.ln(), a.ln() - b.ln() + g[j + 1]);
    }
    g
}

/// `E_i[H]` by the linear-time recurrence.
pub fn expected_hitting(spec: &BDSpec, i: u64) -> Result<f64, BdError> {
    check_state(spec, i)?;
    if i == 0 || i == spec.m {
        return Ok(0.0);
    }
    let g = log_g(spec);
    let mut head = LogSum::new();
    let mut total = LogSum::new();
    for (j, &lg) in g.iter().enumerate().skip(1) {
        if j as u64 <= i {
            head.add(lg);
        }
        total.add(lg);
    }
    let p = absorb_prob(spec, i)?;
    let value = head.value().exp() - p * total.value().exp();
    Ok(value.max(0.0))
}

/// `E_i[H]` by the literal double sum; `O(M²)`, used as a cross-check.
pub fn expected_hitting_naive(spec: &BDSpec, i: u64) -> Result<f64, BdError> {
    check_state(spec, i)?;
    if i == 0 || i == spec.m {
        return Ok(0.0);
    }
    let m = spec.m;
    let g = |j: u64| -> f64 {
        let mut sum = 0.0;
        for n in j..m {
            let mut prod = 1.0 / spec.rates_unchecked(n).1;
            for k in j..n {
                let (a, b) = spec.rates_unchecked(k);
                prod *= a / b;
            }
            sum += prod;
        }
        sum
    };
    let weights = |j: u64| -> f64 {
        let mut prod = 1.0;
        for k in 1..j {
            let (a, b) = spec.rates_unchecked(k);
            prod *= b / a;
        }
        prod
    };
    let head: f64 = (1..=i).map(g).sum();
    let total: f64 = (1..=m).map(g).sum();
    let s_i: f64 = (1..=i).map(weights).sum();
    let s_m: f64 = (1..=m).map(weights).sum();
    Ok(head - s_i * total / s_m)
}

/// Bound constants for the start `i = 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub p_lower: f64,
    pub p_upper: f64,
    pub eh_upper: f64,
}

/// `1/(M e^{c d(1+log M)}) ≤ P_1 ≤ e^{d(1+log M)}/M` with `c = 1` (Inner)
/// or `c = 2` (Edge), and `E_1[H] ≤ e^{d(1+log M)}·2(1+log M)/(θM)`.
pub fn bounds(spec: &BDSpec) -> Bounds {
    let m = spec.m as f64;
    let e = (spec.d * (1.0 + m.ln())).exp();
    let lower_factor = match spec.variant {
        Variant::Inner => e,
        Variant::Edge => e * e,
    };
    Bounds {
        p_lower: 1.0 / (m * lower_factor),
        p_upper: e / m,
        eh_upper: e * 2.0 * (1.0 + m.ln()) / (spec.theta * m),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundsReport {
    pub p1: f64,
    pub eh1: f64,
    pub bounds: Bounds,
}

/// Evaluates the exact values at `i = 1` against [`bounds`].
pub fn bounds_check(spec: &BDSpec) -> Result<BoundsReport, BdError> {
    let p1 = absorb_prob(spec, 1)?;
    let eh1 = expected_hitting(spec, 1)?;
    let b = bounds(spec);
    // relative slack for rounding in the log-space evaluation
    let slack = 1e-12;
    if p1 < b.p_lower * (1.0 - slack) {
        return Err(BdError::BoundViolation {
            m: spec.m,
            what: "absorption probability below lower bound",
            value: p1,
            bound: b.p_lower,
        });
    }
    if p1 > b.p_upper * (1.0 + slack) {
        return Err(BdError::BoundViolation {
            m: spec.m,
            what: "absorption probability above upper bound",
            value: p1,
            bound: b.p_upper,
        });
    }
    if eh1 > b.eh_upper * (1.0 + slack) {
        return Err(BdError::BoundViolation {
            m: spec.m,
            what: "expected hitting time above upper bound",
            value: eh1,
            bound: b.eh_upper,
        });
    }
    Ok(BoundsReport { p1, eh1, bounds: b })
}

/// Checks `b_m/a_m ≤ e^{c d/(M−m)}` (`c = 1` Inner, `2` Edge) and
/// `a_m/b_m ≤ e^{d/m}` for every `m`; returns the first violating `m`.
pub fn ratio_bounds(spec: &BDSpec) -> Result<(), u64> {
    let c = match spec.variant {
        Variant::Inner => 1.0,
        Variant::Edge => 2.0,
    };
    let mf = spec.m as f64;
    for m in 1..spec.m {
        let (a, b) = spec.rates_unchecked(m);
        let x = m as f64;
        let up = (c * spec.d / (mf - x)).exp() * (1.0 + 1e-13);
        let down = (spec.d / x).exp() * (1.0 + 1e-13);
        if b / a > up || a / b > down {
            return Err(m);
        }
    }
    Ok(())
}

/// Absorbing end and absorption time of one path.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Absorption {
    pub at_top: bool,
    pub time: f64,
}

/// Samples one path from `i` until absorption.
pub fn simulate<R: Rng + ?Sized>(spec: &BDSpec, i: u64, rng: &mut R) -> Result<Absorption, BdError> {
    check_state(spec, i)?;
    let mut x = i;
    let mut t = 0.0;
    while x != 0 && x != spec.m {
        let (a, b) = spec.rates_unchecked(x);
        let total = a + b;
        t += exponential(rng, total);
        if open_unit(rng) * total < a {
            x += 1;
        } else {
            x -= 1;
        }
    }
    Ok(Absorption {
        at_top: x == spec.m,
        time: t,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn spec(m: u64, theta: f64, d: f64, v: Variant) -> BDSpec {
        BDSpec::new(m, theta, d, v).unwrap()
    }

    #[test]
    fn rates_examples() {
        let (a, b) = rates(&spec(2, 1.0, 0.01, Variant::Inner), 1).unwrap();
        assert_relative_eq!(a, 1.01);
        assert_relative_eq!(b, 1.01);
        let (a, b) = rates(&spec(2, 1.0, 0.01, Variant::Edge), 1).unwrap();
        assert_relative_eq!(a, 1.01);
        assert_relative_eq!(b, 1.02);
        assert!(rates(&spec(2, 1.0, 0.01, Variant::Inner), 0).is_err());
        assert!(rates(&spec(2, 1.0, 0.01, Variant::Inner), 2).is_err());
    }

    #[test]
    fn absorb_prob_examples() {
        assert_relative_eq!(absorb_prob(&spec(2, 3.0, 0.2, Variant::Inner), 1).unwrap(), 0.5, epsilon = 1e-15);
        for &d in &[1e-8, 0.01, 0.3, 2.0] {
            let p = absorb_prob(&spec(2, 1.0, d, Variant::Edge), 1).unwrap();
            assert_relative_eq!(p, (1.0 + d) / (2.0 + 3.0 * d), max_relative = 1e-14);
        }
        let s = spec(10, 1.0, 0.1, Variant::Edge);
        assert_eq!(absorb_prob(&s, 0).unwrap(), 0.0);
        assert_eq!(absorb_prob(&s, 10).unwrap(), 1.0);
        assert!(absorb_prob(&s, 11).is_err());
        let ps: Vec<f64> = (0..=10).map(|i| absorb_prob(&s, i).unwrap()).collect();
        assert!(ps.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn expected_hitting_small() {
        let theta = 2.5;
        let d = 0.3;
        let s = spec(2, theta, d, Variant::Inner);
        assert_relative_eq!(expected_hitting(&s, 1).unwrap(), 1.0 / (2.0 * theta * (1.0 + d)), max_relative = 1e-14);
        assert_eq!(expected_hitting(&s, 0).unwrap(), 0.0);
        assert_eq!(expected_hitting(&s, 2).unwrap(), 0.0);
    }

    /// Solves the tridiagonal first-step system directly.
    fn tridiagonal_oracle(s: &BDSpec) -> (Vec<f64>, Vec<f64>) {
        let m = s.m() as usize;
        let n = m - 1;
        // p: (a+b)p_i − a p_{i+1} − b p_{i−1} = 0, p_M = 1
        // h: (a+b)h_i − a h_{i+1} − b h_{i−1} = 1
        let solve = |rhs: &dyn Fn(usize, f64, f64) -> f64| -> Vec<f64> {
            let mut diag = vec![0.0; n];
            let mut upper = vec![0.0; n];
            let mut lower = vec![0.0; n];
            let mut r = vec![0.0; n];
            for k in 0..n {
                let (a, b) = s.rates_unchecked(k as u64 + 1);
                diag[k] = a + b;
                upper[k] = -a;
                lower[k] = -b;
                r[k] = rhs(k, a, b);
            }
            for k in 1..n {
                let w = lower[k] / diag[k - 1];
                diag[k] -= w * upper[k - 1];
                r[k] -= w * r[k - 1];
            }
            let mut x = vec![0.0; n];
            x[n - 1] = r[n - 1] / diag[n - 1];
            for k in (0..n - 1).rev() {
                x[k] = (r[k] - upper[k] * x[k + 1]) / diag[k];
            }
            x
        };
        let p = solve(&|k, a, _| if k == n - 1 { a } else { 0.0 });
        let h = solve(&|_, _, _| 1.0);
        (p, h)
    }

    #[test]
    fn formulas_match_linear_solve() {
        for &v in &[Variant::Inner, Variant::Edge] {
            for &(m, d) in &[(3u64, 0.5), (8, 0.01), (40, 1e-6), (33, 2.0)] {
                let s = spec(m, 1.7, d, v);
                let (p, h) = tridiagonal_oracle(&s);
                for i in 1..m {
                    let k = (i - 1) as usize;
                    assert_relative_eq!(absorb_prob(&s, i).unwrap(), p[k], max_relative = 1e-10);
                    assert_relative_eq!(expected_hitting(&s, i).unwrap(), h[k], max_relative = 1e-9);
                }
            }
        }
    }

    #[test]
    fn linear_and_naive_agree() {
        for &v in &[Variant::Inner, Variant::Edge] {
            for &m in &[2u64, 5, 64, 200] {
                let s = spec(m, 3.0, 1e-3, v);
                for i in [1, m / 2, m - 1] {
                    let fast = expected_hitting(&s, i).unwrap();
                    let slow = expected_hitting_naive(&s, i).unwrap();
                    assert_relative_eq!(fast, slow, max_relative = 1e-9);
                }
            }
        }
    }

    #[test]
    fn bounds_hold_on_sweep() {
        for &v in &[Variant::Inner, Variant::Edge] {
            for m in 2..=512 {
                let s = spec(m, 1.0, 1e-6, v);
                bounds_check(&s).unwrap();
                ratio_bounds(&s).unwrap();
            }
        }
    }

    #[test]
    fn huge_m_is_finite() {
        let s = spec(1_000_000, 1.0, 0.5, Variant::Edge);
        let p = absorb_prob(&s, 1).unwrap();
        assert!(p.is_finite() && p > 0.0 && p < 1.0);
        let h = expected_hitting(&s, 1).unwrap();
        assert!(h.is_finite() && h > 0.0);
    }

    #[test]
    fn simulate_boundaries() {
        let mut rng = crate::rng::replica_rng(1, 1);
        let s = spec(5, 1.0, 0.1, Variant::Inner);
        assert_eq!(
            simulate(&s, 0, &mut rng).unwrap(),
            Absorption {
                at_top: false,
                time: 0.0
            }
        );
        assert!(simulate(&s, 5, &mut rng).unwrap().at_top);
    }
}
