//! Coalescing Brownian motions on the circle `R/Z`.
//!
//! Each cluster carries a real lift; its position on the circle is the lift
//! reduced mod 1, so members of a cluster always share a bit-identical
//! position. Clusters are kept in cyclic order with all lifts inside a window
//! of length one. An Euler step moves every lift by an independent
//! `N(0, 2ρ²·dt)` increment; a gap between neighbours is then a Brownian
//! motion with quadratic variation `4ρ²` per unit time, and within-step
//! hits of 0 (or 1) are detected with the Brownian-bridge crossing
//! probability.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::par;
use crate::rng::{open_unit, replica_rng};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CbmError {
    #[error("invalid parameter: {0}")]
    InvalidParams(String),
    #[error("starting point {0} is not in [0, 1)")]
    PointOutOfRange(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CBMParams {
    pub k: usize,
    pub rho: f64,
    pub dt: f64,
    pub bridge_correction: bool,
}

impl CBMParams {
    pub const DEFAULT_DT: f64 = 1e-4;

    pub fn new(k: usize, rho: f64, dt: f64, bridge_correction: bool) -> Result<Self, CbmError> {
        if k < 1 {
            return Err(CbmError::InvalidParams("k must be at least 1".into()));
        }
        if !(rho > 0.0 && rho.is_finite()) {
            return Err(CbmError::InvalidParams(format!("rho must be positive (got {rho})")));
        }
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(CbmError::InvalidParams(format!("dt must be positive (got {dt})")));
        }
        Ok(CBMParams {
            k,
            rho,
            dt,
            bridge_correction,
        })
    }

    /// Variance of one lift increment, `2ρ²·dt`.
    pub fn step_variance(&self) -> f64 {
        2.0 * self.rho * self.rho * self.dt
    }

    /// Variance of a gap increment over one step, `4ρ²·dt`.
    pub fn gap_variance(&self) -> f64 {
        2.0 * self.step_variance()
    }
}

/// Oriented circular distance `T(x, y)`: `y − x` if `x ≤ y`, else `1 + y − x`.
pub fn torus_gap(x: f64, y: f64) -> f64 {
    if x <= y {
        y - x
    } else {
        1.0 + y - x
    }
}

/// `(P[gap hits 0 before 1], E[exit time])` for a gap started at `gap0`:
/// `(1 − gap0, gap0(1 − gap0)/(4ρ²))`.
pub fn pair_exit_law(gap0: f64, rho: f64) -> (f64, f64) {
    (1.0 - gap0, gap0 * (1.0 - gap0) / (4.0 * rho * rho))
}

/// Probability that a Brownian bridge from `gap_start` to `gap_end` with
/// variance `sigma2` over the step touches 0 or 1; one when an endpoint is
/// already outside `(0, 1)`.
pub fn crossing_probability(gap_start: f64, gap_end: f64, sigma2: f64) -> f64 {
    if gap_start <= 0.0 || gap_end <= 0.0 || gap_start >= 1.0 || gap_end >= 1.0 {
        return 1.0;
    }
    let p0 = (-2.0 * gap_start * gap_end / sigma2).exp();
    let p1 = (-2.0 * (1.0 - gap_start) * (1.0 - gap_end) / sigma2).exp();
    (p0 + p1).min(1.0)
}

/// Draws whether the gap crossed a boundary within the step.
pub fn detect_coalescence<R: Rng + ?Sized>(gap_start: f64, gap_end: f64, sigma2: f64, rng: &mut R) -> bool {
    let p = crossing_probability(gap_start, gap_end, sigma2);
    p >= 1.0 || open_unit(rng) < p
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Cluster {
    lift: f64,
    members: Vec<usize>,
}

/// A merge of two clusters, identified by their smallest labels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Coalescence {
    pub t: f64,
    pub a: usize,
    pub b: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CBMState {
    clusters: Vec<Cluster>,
    /// Integer unwrap offset of each point relative to its cluster lift.
    offsets: Vec<i64>,
    start: Vec<f64>,
    t: f64,
}

impl CBMState {
    /// Points `u0` on `[0, 1)`; labels are the indices into `u0`.
    pub fn new(u0: &[f64]) -> Result<Self, CbmError> {
        if u0.is_empty() {
            return Err(CbmError::InvalidParams("need at least one point".into()));
        }
        if let Some(&x) = u0.iter().find(|&&x| !(0.0..1.0).contains(&x)) {
            return Err(CbmError::PointOutOfRange(x));
        }
        let mut order: Vec<usize> = (0..u0.len()).collect();
        order.sort_by(|&a, &b| u0[a].total_cmp(&u0[b]).then(a.cmp(&b)));
        let clusters = order
            .into_iter()
            .map(|i| Cluster {
                lift: u0[i],
                members: vec![i],
            })
            .collect();
        Ok(CBMState {
            clusters,
            offsets: vec![0; u0.len()],
            start: u0.to_vec(),
            t: 0.0,
        })
    }

    pub fn time(&self) -> f64 {
        self.t
    }

    pub fn points(&self) -> usize {
        self.offsets.len()
    }

    pub fn cluster_count(&self) -> usize {
        self.clusters.len()
    }

    /// Members of each cluster, clusters in cyclic order.
    pub fn clusters(&self) -> Vec<Vec<usize>> {
        self.clusters
            .iter()
            .map(|c| {
                let mut m = c.members.clone();
                m.sort_unstable();
                m
            })
            .collect()
    }

    /// Positions on `[0, 1)` by label.
    pub fn positions(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.points()];
        for c in &self.clusters {
            let x = c.lift.rem_euclid(1.0);
            // rem_euclid can return exactly 1.0 for tiny negative lifts
            let x = if x >= 1.0 { 0.0 } else { x };
            for &m in &c.members {
                out[m] = x;
            }
        }
        out
    }

    /// Unwrapped displacement of each label from its start.
    pub fn displacements(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.points()];
        for c in &self.clusters {
            for &m in &c.members {
                out[m] = c.lift + self.offsets[m] as f64 - self.start[m];
            }
        }
        out
    }

    /// For two merged points: whether the counter-clockwise gap from point 0
    /// to point 1 closed, as opposed to its complement.
    pub fn pair_gap_closed(&self) -> Option<bool> {
        if self.points() != 2 || self.cluster_count() != 1 {
            return None;
        }
        let gap0 = (self.start[1] - self.start[0]).rem_euclid(1.0);
        let d = self.displacements();
        Some((gap0 + d[1] - d[0]).abs() < 0.5)
    }

    fn gap(&self, i: usize) -> f64 {
        gap_in(&self.clusters, i)
    }

    fn merge(&mut self, i: usize, mid_end: f64) -> (usize, usize, usize) {
        let m = self.clusters.len();
        let j = (i + 1) % m;
        let a = *self.clusters[i].members.iter().min().unwrap();
        let b = *self.clusters[j].members.iter().min().unwrap();
        if j == 0 {
            // wrap pair: keep the merged cluster at the end of the window
            let first = self.clusters.remove(0);
            for &p in &first.members {
                self.offsets[p] -= 1;
            }
            let last = self.clusters.len() - 1;
            self.clusters[last].members.extend(first.members);
            self.clusters[last].lift = mid_end;
            (a, b, last)
        } else {
            let right = self.clusters.remove(j);
            self.clusters[i].members.extend(right.members);
            self.clusters[i].lift = mid_end;
            (a, b, i)
        }
    }
}

fn gap_in(clusters: &[Cluster], i: usize) -> f64 {
    let m = clusters.len();
    if i + 1 < m {
        clusters[i + 1].lift - clusters[i].lift
    } else {
        clusters[0].lift + 1.0 - clusters[m - 1].lift
    }
}

impl CBMState {
    /// One Euler step with the given per-cluster increments (in cluster
    /// order); crossing draws come from `rng`.
    fn step_with<R: Rng + ?Sized>(&mut self, params: &CBMParams, increments: &[f64], rng: &mut R) -> Vec<Coalescence> {
        let sigma2 = params.gap_variance();
        let m = self.clusters.len();
        let t_end = self.t + params.dt;
        let mut start_lifts: Vec<f64> = self.clusters.iter().map(|c| c.lift).collect();
        for (c, z) in self.clusters.iter_mut().zip(increments) {
            c.lift += z;
        }
        self.t = t_end;
        if m < 2 {
            return Vec::new();
        }

        let start_gap = |lifts: &[f64], i: usize| -> f64 {
            let m = lifts.len();
            if i + 1 < m {
                lifts[i + 1] - lifts[i]
            } else {
                lifts[0] + 1.0 - lifts[m - 1]
            }
        };
        let fires = |g0: f64, g1: f64, rng: &mut R| -> bool {
            if params.bridge_correction {
                detect_coalescence(g0, g1, sigma2, rng)
            } else {
                g0 <= 0.0 || g1 <= 0.0 || g0 >= 1.0 || g1 >= 1.0
            }
        };

        // With two clusters the pair gap is a single martingale absorbed at
        // 0 and 1; only pair 0 is tested and the side is chosen on merge.
        let pairs = if m == 2 { 1 } else { m };
        let mut firing: Vec<bool> = (0..pairs)
            .map(|i| fires(start_gap(&start_lifts, i), self.gap(i), rng))
            .collect();

        let mut events = Vec::new();
        loop {
            let m = self.clusters.len();
            if m < 2 {
                break;
            }
            let pairs = if m == 2 { 1 } else { m };
            let mut pick: Option<(usize, f64)> = None;
            for i in 0..pairs {
                if !firing[i] {
                    continue;
                }
                let mut g = self.gap(i);
                let mut idx = i;
                if m == 2 && g > 0.5 {
                    idx = 1;
                    g = self.gap(1);
                }
                if pick.is_none_or(|(_, best)| g < best) {
                    pick = Some((idx, g));
                }
            }
            let Some((i, g)) = pick else {
                break;
            };
            let j = (i + 1) % m;
            let g_start = start_gap(&start_lifts, i);
            let mid_end = self.clusters[i].lift + g / 2.0;
            let mid_start = start_lifts[i] + g_start / 2.0;
            let (a, b, at) = self.merge(i, mid_end);
            events.push(Coalescence { t: t_end, a: a.min(b), b: a.max(b) });

            if j == 0 {
                start_lifts.remove(0);
                let last = start_lifts.len() - 1;
                start_lifts[last] = mid_start;
            } else {
                start_lifts.remove(j);
                start_lifts[i] = mid_start;
            }

            // pair flags: drop the two pairs that touched the merged
            // clusters, re-draw the two new ones
            let m_new = self.clusters.len();
            if m_new < 2 {
                break;
            }
            let mut next = vec![false; if m_new == 2 { 1 } else { m_new }];
            if m_new > 2 {
                // old pair index p (between old clusters p, p+1) maps to new
                // index after removing cluster j
                let old_pairs = firing.len();
                for p in 0..old_pairs {
                    let q = (p + 1) % m;
                    if p == i || q == i || p == j || q == j {
                        continue;
                    }
                    let new_p = if j == 0 || p > j { p - 1 } else { p };
                    next[new_p] = firing[p];
                }
                let before = (at + m_new - 1) % m_new;
                for p in [before, at] {
                    next[p] = fires(start_gap(&start_lifts, p), self.gap(p), rng);
                }
            } else {
                next[0] = fires(start_gap(&start_lifts, 0), self.gap(0), rng);
            }
            firing = next;
        }
        events
    }
}

/// One Euler step of `state`.
pub fn step<R: Rng + ?Sized>(params: &CBMParams, state: &CBMState, rng: &mut R) -> (CBMState, Vec<Coalescence>) {
    let mut next = state.clone();
    let events = step_in_place(params, &mut next, rng);
    (next, events)
}

/// One Euler step, in place.
pub fn step_in_place<R: Rng + ?Sized>(params: &CBMParams, state: &mut CBMState, rng: &mut R) -> Vec<Coalescence> {
    let sd = params.step_variance().sqrt();
    let increments: Vec<f64> = (0..state.cluster_count())
        .map(|_| sd * normal(rng))
        .collect();
    state.step_with(params, &increments, rng)
}

/// Snapshot of a path at a probe time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CbmProbe {
    pub t: f64,
    pub positions: Vec<f64>,
    pub displacements: Vec<f64>,
    pub clusters: usize,
}

/// Summary of one sampled path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CBMPath {
    pub coalescences: Vec<Coalescence>,
    pub probes: Vec<CbmProbe>,
    pub final_state: CBMState,
    pub steps: u64,
}

impl CBMPath {
    pub fn first_coalescence(&self) -> Option<f64> {
        self.coalescences.first().map(|c| c.t)
    }
}

/// Options for [`sample_path`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PathOptions {
    /// Probe times; snapshots are taken at the first grid time `≥ t − dt/2`.
    pub probes: Vec<f64>,
    /// Stop once every point has coalesced into one cluster (only when no
    /// probes remain).
    pub stop_when_single: bool,
}

/// Samples a path on `[0, t_end]` from `u0`.
pub fn sample_path<R: Rng + ?Sized>(
    params: &CBMParams,
    u0: &[f64],
    t_end: f64,
    options: &PathOptions,
    rng: &mut R,
) -> Result<CBMPath, CbmError> {
    if !(t_end >= 0.0 && t_end.is_finite()) {
        return Err(CbmError::InvalidParams(format!("t_end must be non-negative (got {t_end})")));
    }
    let mut state = CBMState::new(u0)?;
    let n_steps = (t_end / params.dt - 1e-9).ceil().max(0.0) as u64;
    let probe_steps: Vec<u64> = options
        .probes
        .iter()
        .map(|&p| (p / params.dt).round().max(0.0) as u64)
        .collect();
    let mut probes = Vec::with_capacity(probe_steps.len());
    let mut coalescences = Vec::new();
    let snapshot = |state: &CBMState, t: f64| CbmProbe {
        t,
        positions: state.positions(),
        displacements: state.displacements(),
        clusters: state.cluster_count(),
    };
    while probes.len() < probe_steps.len() && probe_steps[probes.len()] == 0 {
        probes.push(snapshot(&state, options.probes[probes.len()]));
    }
    let mut steps = 0;
    for s in 1..=n_steps {
        coalescences.extend(step_in_place(params, &mut state, rng));
        steps = s;
        while probes.len() < probe_steps.len() && probe_steps[probes.len()] <= s {
            probes.push(snapshot(&state, options.probes[probes.len()]));
        }
        if options.stop_when_single && state.cluster_count() == 1 && probes.len() == probe_steps.len() {
            break;
        }
    }
    Ok(CBMPath {
        coalescences,
        probes,
        final_state: state,
        steps,
    })
}

/// Coalescence of a two-point system.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairMerge {
    pub t: f64,
    /// The counter-clockwise gap from point 0 to point 1 closed (rather
    /// than its complement).
    pub closed: bool,
}

impl PairMerge {
    fn of(state: &CBMState) -> Self {
        PairMerge {
            t: state.t,
            closed: state.pair_gap_closed().unwrap_or(false),
        }
    }
}

/// First coalescence of a two-point system started at `u0`, computed at
/// step size `dt` and `dt/2` from the same Brownian increments. Returns
/// `(coarse, fine)`; `None` when no merge happened by `t_max`.
pub fn coupled_pair_times<R: Rng + ?Sized>(
    params: &CBMParams,
    u0: [f64; 2],
    t_max: f64,
    rng: &mut R,
    bridge_rng_coarse: &mut R,
    bridge_rng_fine: &mut R,
) -> Result<(Option<PairMerge>, Option<PairMerge>), CbmError> {
    let fine_params = CBMParams {
        dt: params.dt / 2.0,
        ..*params
    };
    let sd = fine_params.step_variance().sqrt();
    let mut coarse = CBMState::new(&u0)?;
    let mut fine = CBMState::new(&u0)?;
    let mut m_coarse = None;
    let mut m_fine = None;
    let n_steps = (t_max / params.dt).ceil() as u64;
    for _ in 0..n_steps {
        if m_coarse.is_some() && m_fine.is_some() {
            break;
        }
        // increments indexed by label; clusters are in label order until
        // the first merge, which is all that matters here
        let z1: [f64; 2] = [sd * normal(rng), sd * normal(rng)];
        let z2: [f64; 2] = [sd * normal(rng), sd * normal(rng)];
        if m_fine.is_none() {
            let inc1 = label_order(&fine, z1);
            if !fine.step_with(&fine_params, &inc1, bridge_rng_fine).is_empty() {
                m_fine = Some(PairMerge::of(&fine));
            } else {
                let inc2 = label_order(&fine, z2);
                if !fine.step_with(&fine_params, &inc2, bridge_rng_fine).is_empty() {
                    m_fine = Some(PairMerge::of(&fine));
                }
            }
        }
        if m_coarse.is_none() {
            let inc = label_order(&coarse, [z1[0] + z2[0], z1[1] + z2[1]]);
            if !coarse.step_with(params, &inc, bridge_rng_coarse).is_empty() {
                m_coarse = Some(PairMerge::of(&coarse));
            }
        }
    }
    Ok((m_coarse, m_fine))
}

#[inline]
fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

fn label_order(state: &CBMState, z: [f64; 2]) -> Vec<f64> {
    state.clusters.iter().map(|c| z[c.members[0]]).collect()
}

/// Samples `replicas` independent paths; path `i` uses replica stream `i`.
pub fn sample_ensemble(
    params: &CBMParams,
    u0: &[f64],
    t_end: f64,
    options: &PathOptions,
    master_seed: u64,
    replicas: usize,
) -> Result<Vec<CBMPath>, CbmError> {
    CBMState::new(u0)?;
    let indices = par::range(replicas);
    par::map_indices(&indices, |i| {
        let mut rng = replica_rng(master_seed, i);
        sample_path(params, u0, t_end, options, &mut rng)
    })
    .into_iter()
    .collect()
}
