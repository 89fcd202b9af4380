//! Condensed configurations, their typical neighbours and tubes, and the
//! labelled trace process on E_N.
//!
//! A condensed configuration has at most `k` occupied sites, no two of them
//! adjacent. Its typical neighbours are the Type A shifts of one condensate
//! by one site and, for every pair of condensates two sites apart, the Type B
//! merges onto one of the three sites and the mass exchanges between the two
//! sites. Labels ride along these moves and coagulate on merges.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{Flow, Observer, SimEvent, StateView};
use crate::model::{Configuration, Direction, ModelError, ModelParams};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CondensateError {
    #[error("labels and masses differ in length ({labels} vs {masses})")]
    LengthMismatch { labels: usize, masses: usize },
    #[error("label position {site} outside the torus of size {len}")]
    SiteOutOfRange { site: usize, len: usize },
    #[error("labels sharing site {site} carry different masses")]
    SharedMassMismatch { site: usize },
    #[error("masses must be positive")]
    ZeroMass,
    #[error("distinct condensate sites {a} and {b} are adjacent (isolation constraint)")]
    NotIsolated { a: usize, b: usize },
    #[error("site {site} is listed more than once")]
    DuplicateSite { site: usize },
    #[error("label positions are not in cyclic weak order")]
    NotOrdered,
    #[error("total condensate mass {found} differs from N = {expected}")]
    MassMismatch { expected: u32, found: u32 },
    #[error("{found} distinct condensates exceed k = {k}")]
    TooManyCondensates { found: usize, k: usize },
    #[error("configuration is not condensed")]
    NotCondensed,
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Occupied sites of a condensed configuration in ascending order.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CondensedView {
    pub positions: Vec<usize>,
    pub masses: Vec<u32>,
    pub len: usize,
}

impl CondensedView {
    #[inline]
    /// Validates condensates given as `(site, mass)` against the
    /// constraints of E_N and `params`.
    pub fn from_condensates(params: &ModelParams, condensates: &[(usize, u32)]) -> Result<Self, CondensateError> {
        let len = params.l();
        let mut pairs = condensates.to_vec();
        pairs.sort_unstable();
        for &(site, mass) in &pairs {
            if site >= len {
                return Err(CondensateError::SiteOutOfRange { site, len });
            }
            if mass == 0 {
                return Err(CondensateError::ZeroMass);
            }
        }
        for w in pairs.windows(2) {
            if w[0].0 == w[1].0 {
                return Err(CondensateError::DuplicateSite { site: w[0].0 });
            }
        }
        for i in 0..pairs.len() {
            for j in i + 1..pairs.len() {
                if torus_distance(pairs[i].0, pairs[j].0, len) < 2 {
                    return Err(CondensateError::NotIsolated {
                        a: pairs[i].0,
                        b: pairs[j].0,
                    });
                }
            }
        }
        let found: u32 = pairs.iter().map(|p| p.1).sum();
        if found != params.n() {
            return Err(CondensateError::MassMismatch {
                expected: params.n(),
                found,
            });
        }
        if pairs.len() > params.k() {
            return Err(CondensateError::TooManyCondensates {
                found: pairs.len(),
                k: params.k(),
            });
        }
        Ok(Self::from_pairs(len, pairs))
    }

    pub fn ell(&self) -> usize {
        self.positions.len()
    }

    pub fn total(&self) -> u32 {
        self.masses.iter().sum()
    }

    pub fn to_configuration(&self) -> Configuration {
        let pairs: Vec<(usize, u32)> = self.positions.iter().copied().zip(self.masses.iter().copied()).collect();
        Configuration::from_condensates(self.len, &pairs).expect("view sites are in range")
    }

    /// Clockwise gap from condensate `i` to condensate `i+1` (cyclically).
    /// With one condensate the gap is `L`.
    #[inline]
    pub fn gap_after(&self, i: usize) -> usize {
        let ell = self.ell();
        let a = self.positions[i];
        let b = self.positions[(i + 1) % ell];
        cw_gap(a, b, self.len)
    }

    fn from_state(view: &StateView<'_>) -> Self {
        CondensedView {
            positions: view.occupied.to_vec(),
            masses: view.occupied.iter().map(|&x| view.eta.get(x)).collect(),
            len: view.eta.len(),
        }
    }

    fn same_as_state(&self, view: &StateView<'_>) -> bool {
        self.positions.len() == view.occupied.len()
            && self
                .positions
                .iter()
                .zip(view.occupied)
                .zip(&self.masses)
                .all(|((&p, &q), &m)| p == q && view.eta.get(q) == m)
    }

    fn from_pairs(len: usize, mut pairs: Vec<(usize, u32)>) -> Self {
        pairs.sort_unstable();
        CondensedView {
            positions: pairs.iter().map(|p| p.0).collect(),
            masses: pairs.iter().map(|p| p.1).collect(),
            len,
        }
    }
}

/// Clockwise distance from `a` to `b` in `[0, L)`; `L` when `a == b`.
#[inline]
fn cw_gap(a: usize, b: usize, len: usize) -> usize {
    let g = (b + len - a) % len;
    if g == 0 {
        len
    } else {
        g
    }
}

#[inline]
fn torus_distance(a: usize, b: usize, len: usize) -> usize {
    let g = (b + len - a) % len;
    g.min(len - g)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Classification {
    Condensed(CondensedView),
    NotCondensed,
}

/// Membership in E_N with the cyclically ordered view of the condensates.
pub fn classify(params: &ModelParams, eta: &Configuration) -> Classification {
    let positions: Vec<usize> = eta.occupied_sites().collect();
    if positions.len() > params.k() || positions.is_empty() {
        return Classification::NotCondensed;
    }
    let len = eta.len();
    if positions.len() > 1 {
        for (i, &x) in positions.iter().enumerate() {
            let y = positions[(i + 1) % positions.len()];
            if torus_distance(x, y, len) < 2 {
                return Classification::NotCondensed;
            }
        }
    }
    Classification::Condensed(CondensedView {
        masses: positions.iter().map(|&x| eta.get(x)).collect(),
        positions,
        len,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Subclass {
    /// All condensates pairwise at distance ≥ 3.
    J,
    /// Some pair at distance exactly 2.
    K,
}

pub fn subclass(_params: &ModelParams, view: &CondensedView) -> Subclass {
    let ell = view.ell();
    if ell < 2 {
        return Subclass::J;
    }
    let close = (0..ell).any(|i| view.gap_after(i) == 2 || view.len - view.gap_after(i) == 2);
    if close {
        Subclass::K
    } else {
        Subclass::J
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TraceKind {
    TypeA,
    #[serde(rename = "TypeB_Merge")]
    TypeBMerge,
    #[serde(rename = "TypeB_Exchange")]
    TypeBExchange,
}

impl TraceKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TraceKind::TypeA => "TypeA",
            TraceKind::TypeBMerge => "TypeB_Merge",
            TraceKind::TypeBExchange => "TypeB_Exchange",
        }
    }
}

/// A typical move from a condensed configuration, in terms of the
/// condensate indices of the origin view.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Move {
    /// Condensate `i` moves one site in `dir`.
    Shift { i: usize, dir: Direction },
    /// Condensates `i` and `i+1` (two sites apart clockwise) merge onto
    /// `x_i + offset`, `offset ∈ {0, 1, 2}`.
    Merge { i: usize, offset: usize },
    /// Condensate `i` keeps `m` particles, `i+1` gets the rest.
    Exchange { i: usize, m: u32 },
}

impl Move {
    fn kind(self) -> TraceKind {
        match self {
            Move::Shift { .. } => TraceKind::TypeA,
            Move::Merge { .. } => TraceKind::TypeBMerge,
            Move::Exchange { .. } => TraceKind::TypeBExchange,
        }
    }
}

/// Indices `i` whose clockwise successor sits exactly two sites ahead.
fn close_pairs(view: &CondensedView) -> impl Iterator<Item = usize> + '_ {
    let ell = view.ell();
    (0..if ell >= 2 { ell } else { 0 }).filter(move |&i| view.gap_after(i) == 2)
}

fn shift_allowed(view: &CondensedView, i: usize, dir: Direction) -> bool {
    let ell = view.ell();
    if ell == 1 {
        return true;
    }
    let gap = match dir {
        Direction::Plus => view.gap_after(i),
        Direction::Minus => view.gap_after((i + ell - 1) % ell),
    };
    gap != 2
}

fn apply_move(view: &CondensedView, mv: Move) -> CondensedView {
    let len = view.len;
    let ell = view.ell();
    let mut pairs: Vec<(usize, u32)> = view.positions.iter().copied().zip(view.masses.iter().copied()).collect();
    match mv {
        Move::Shift { i, dir } => {
            pairs[i].0 = dir.step(pairs[i].0, len);
        }
        Move::Merge { i, offset } => {
            let j = (i + 1) % ell;
            let mass = pairs[i].1 + pairs[j].1;
            let site = (pairs[i].0 + offset) % len;
            pairs[i] = (site, mass);
            pairs.remove(j);
        }
        Move::Exchange { i, m } => {
            let j = (i + 1) % ell;
            let total = pairs[i].1 + pairs[j].1;
            pairs[i].1 = m;
            pairs[j].1 = total - m;
        }
    }
    CondensedView::from_pairs(len, pairs)
}

fn typical_moves(view: &CondensedView) -> Vec<Move> {
    let ell = view.ell();
    let mut moves = Vec::new();
    for i in 0..ell {
        for dir in Direction::BOTH {
            if shift_allowed(view, i, dir) {
                moves.push(Move::Shift { i, dir });
            }
        }
    }
    for i in close_pairs(view) {
        let j = (i + 1) % ell;
        for offset in 0..3 {
            moves.push(Move::Merge { i, offset });
        }
        let total = view.masses[i] + view.masses[j];
        for m in 1..total {
            if m != view.masses[i] {
                moves.push(Move::Exchange { i, m });
            }
        }
    }
    moves
}

/// The typical neighbour set 𝒩(ξ), without duplicates, in a fixed order.
pub fn neighbors(params: &ModelParams, view: &CondensedView) -> Vec<Configuration> {
    let mut out: Vec<Configuration> = Vec::new();
    for mv in typical_moves(view) {
        let target = apply_move(view, mv);
        if target.ell() > params.k() {
            continue;
        }
        let config = target.to_configuration();
        if !out.contains(&config) {
            out.push(config);
        }
    }
    out
}

/// Site sets of the slabs 𝒜^{i,±} of the tube around `origin`, each paired
/// with the condensate indices the slab absorbs.
fn slabs(origin: &CondensedView) -> Vec<(Vec<usize>, Vec<usize>)> {
    let ell = origin.ell();
    let len = origin.len;
    let mut out = Vec::with_capacity(2 * ell);
    for i in 0..ell {
        let x = origin.positions[i];
        for dir in Direction::BOTH {
            let partner = match dir {
                Direction::Plus => (i + 1) % ell,
                Direction::Minus => (i + ell - 1) % ell,
            };
            let gap = match dir {
                Direction::Plus => origin.gap_after(i),
                Direction::Minus => origin.gap_after(partner),
            };
            if ell >= 2 && gap == 2 {
                let y = dir.step(x, len);
                let z = dir.step(y, len);
                out.push((vec![x, y, z], vec![i, partner]));
            } else {
                out.push((vec![x, dir.step(x, len)], vec![i]));
            }
        }
    }
    out
}

/// Membership of `eta` in the tube 𝒜 around the condensed `origin`.
pub fn tube_membership(_params: &ModelParams, origin: &CondensedView, eta: &Configuration) -> bool {
    let occupied: Vec<usize> = eta.occupied_sites().collect();
    tube_contains(origin, eta, &occupied)
}

fn tube_contains(origin: &CondensedView, eta: &Configuration, occupied: &[usize]) -> bool {
    slabs(origin).iter().any(|(sites, absorbed)| {
        // outside the slab, eta must coincide with the origin
        let outside_ok = occupied.iter().all(|&x| {
            if sites.contains(&x) {
                return true;
            }
            match origin.positions.iter().position(|&p| p == x) {
                Some(c) => !absorbed.contains(&c) && origin.masses[c] == eta.get(x),
                None => false,
            }
        });
        outside_ok
            && origin
                .positions
                .iter()
                .enumerate()
                .filter(|(c, p)| !absorbed.contains(c) && !sites.contains(p))
                .all(|(c, &p)| eta.get(p) == origin.masses[c])
    })
}

/// Labelled condensed state: `k` labels with positions in cyclic weak order
/// and masses shared by co-located labels.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LabeledState {
    positions: Vec<usize>,
    masses: Vec<u32>,
    len: usize,
}

/// Maximal run of co-located labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Block {
    pub position: usize,
    pub mass: u32,
    pub labels: Vec<usize>,
}

impl LabeledState {
    pub fn new(len: usize, positions: Vec<usize>, masses: Vec<u32>) -> Result<Self, CondensateError> {
        if positions.len() != masses.len() {
            return Err(CondensateError::LengthMismatch {
                labels: positions.len(),
                masses: masses.len(),
            });
        }
        if positions.is_empty() {
            return Err(CondensateError::LengthMismatch { labels: 0, masses: 0 });
        }
        if let Some(&site) = positions.iter().find(|&&x| x >= len) {
            return Err(CondensateError::SiteOutOfRange { site, len });
        }
        if masses.contains(&0) {
            return Err(CondensateError::ZeroMass);
        }
        let k = positions.len();
        for i in 0..k {
            for j in i + 1..k {
                if positions[i] == positions[j] {
                    if masses[i] != masses[j] {
                        return Err(CondensateError::SharedMassMismatch { site: positions[i] });
                    }
                } else if torus_distance(positions[i], positions[j], len) < 2 {
                    return Err(CondensateError::NotIsolated {
                        a: positions[i],
                        b: positions[j],
                    });
                }
            }
        }
        let winding: usize = (0..k)
            .map(|i| (positions[(i + 1) % k] + len - positions[i]) % len)
            .sum();
        if winding != 0 && winding != len {
            return Err(CondensateError::NotOrdered);
        }
        Ok(LabeledState { positions, masses, len })
    }

    /// One label per condensate of `view`.
    pub fn from_view(view: &CondensedView) -> Self {
        LabeledState {
            positions: view.positions.clone(),
            masses: view.masses.clone(),
            len: view.len,
        }
    }

    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    pub fn masses(&self) -> &[u32] {
        &self.masses
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn labels(&self) -> usize {
        self.positions.len()
    }

    /// Blocks in cyclic order, starting at the block containing the first
    /// label boundary.
    pub fn blocks(&self) -> Vec<Block> {
        let k = self.positions.len();
        let start = (0..k).find(|&i| self.positions[(i + k - 1) % k] != self.positions[i]);
        let Some(start) = start else {
            return vec![Block {
                position: self.positions[0],
                mass: self.masses[0],
                labels: (0..k).collect(),
            }];
        };
        let mut blocks: Vec<Block> = Vec::new();
        for step in 0..k {
            let i = (start + step) % k;
            match blocks.last_mut() {
                Some(b) if b.position == self.positions[i] => b.labels.push(i),
                _ => blocks.push(Block {
                    position: self.positions[i],
                    mass: self.masses[i],
                    labels: vec![i],
                }),
            }
        }
        blocks
    }

    /// Number of distinct condensates.
    pub fn cluster_count(&self) -> usize {
        self.blocks().len()
    }

    pub fn total_mass(&self) -> u32 {
        self.blocks().iter().map(|b| b.mass).sum()
    }

    pub fn view(&self) -> CondensedView {
        CondensedView::from_pairs(self.len, self.blocks().iter().map(|b| (b.position, b.mass)).collect())
    }
}

/// `Ψ_N`: forget the labels.
pub fn project(labeled: &LabeledState) -> Configuration {
    labeled.view().to_configuration()
}

/// Result of an accepted labelled trace jump.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelUpdate {
    pub state: LabeledState,
    pub kind: TraceKind,
    /// Signed lattice displacement of each label.
    pub shifts: Vec<i64>,
}

/// The trace jumped outside the typical neighbour set (a τ_N event).
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("atypical trace jump")]
pub struct AtypicalJump {
    pub from: CondensedView,
    pub to: CondensedView,
}

/// Labelled dynamics: moves the labels of `prev` to `next` if `next` is a
/// typical neighbour of `Ψ_N(prev)`.
pub fn label_update(prev: &LabeledState, next: &CondensedView) -> Result<LabelUpdate, AtypicalJump> {
    let blocks = prev.blocks();
    let origin = CondensedView {
        positions: blocks.iter().map(|b| b.position).collect(),
        masses: blocks.iter().map(|b| b.mass).collect(),
        len: prev.len,
    };
    let atypical = || AtypicalJump {
        from: origin.clone(),
        to: next.clone(),
    };
    if next.ell() > origin.ell() || next.len != origin.len {
        return Err(atypical());
    }
    let ell = origin.ell();
    let candidates: Vec<Move> = if next.ell() == ell {
        let mut v: Vec<Move> = (0..ell)
            .flat_map(|i| Direction::BOTH.into_iter().map(move |dir| Move::Shift { i, dir }))
            .filter(|mv| match *mv {
                Move::Shift { i, dir } => shift_allowed(&origin, i, dir),
                _ => unreachable!(),
            })
            .collect();
        // exchanges keep every site, so only the masses need checking
        if next.positions.iter().eq(sorted_positions(&origin).iter()) {
            for i in close_pairs(&origin) {
                let j = (i + 1) % ell;
                let total = origin.masses[i] + origin.masses[j];
                if let Some(idx) = next.positions.iter().position(|&p| p == origin.positions[i]) {
                    let m = next.masses[idx];
                    if m >= 1 && m < total && m != origin.masses[i] {
                        v.push(Move::Exchange { i, m });
                    }
                }
            }
        }
        v
    } else if next.ell() + 1 == ell {
        close_pairs(&origin)
            .flat_map(|i| (0..3).map(move |offset| Move::Merge { i, offset }))
            .collect()
    } else {
        Vec::new()
    };

    let mv = candidates
        .into_iter()
        .find(|&mv| apply_move(&origin, mv) == *next)
        .ok_or_else(atypical)?;

    let len = prev.len;
    let mut positions = prev.positions.clone();
    let mut masses = prev.masses.clone();
    let mut shifts = vec![0i64; positions.len()];
    match mv {
        Move::Shift { i, dir } => {
            for &l in &blocks[i].labels {
                positions[l] = dir.step(positions[l], len);
                shifts[l] = dir.sign();
            }
        }
        Move::Merge { i, offset } => {
            let j = (i + 1) % ell;
            let site = (origin.positions[i] + offset) % len;
            let mass = origin.masses[i] + origin.masses[j];
            for &l in &blocks[i].labels {
                positions[l] = site;
                masses[l] = mass;
                shifts[l] = offset as i64;
            }
            for &l in &blocks[j].labels {
                positions[l] = site;
                masses[l] = mass;
                shifts[l] = offset as i64 - 2;
            }
        }
        Move::Exchange { i, m } => {
            let j = (i + 1) % ell;
            let rest = origin.masses[i] + origin.masses[j] - m;
            for &l in &blocks[i].labels {
                masses[l] = m;
            }
            for &l in &blocks[j].labels {
                masses[l] = rest;
            }
        }
    }
    Ok(LabelUpdate {
        state: LabeledState { positions, masses, len },
        kind: mv.kind(),
        shifts,
    })
}

fn sorted_positions(view: &CondensedView) -> Vec<usize> {
    let mut p = view.positions.clone();
    p.sort_unstable();
    p
}

/// Occupation clock of E_N along a path.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct TraceClock {
    pub t_total: f64,
    pub t_in_e: f64,
}

impl TraceClock {
    /// Fraction of raw time spent outside E_N.
    pub fn fraction_outside(&self) -> f64 {
        if self.t_total > 0.0 {
            ((self.t_total - self.t_in_e) / self.t_total).max(0.0)
        } else {
            0.0
        }
    }
}

/// One labelled trace jump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub t_trace: f64,
    pub t_raw: f64,
    pub before: LabeledState,
    pub after: LabeledState,
    pub kind: TraceKind,
}

/// Snapshot of the labelled trace at a probe time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeRecord {
    pub t_trace: f64,
    /// Unwrapped lattice displacement of every label since the start.
    pub displacement: Vec<i64>,
    pub positions: Vec<usize>,
    pub clusters: usize,
}

/// Settings of a [`TraceTracker`].
#[derive(Debug, Clone, PartialEq)]
pub struct TrackerOptions {
    /// Stop the run when the trace clock reaches this value.
    pub trace_horizon: Option<f64>,
    /// Stop the run on the first atypical jump.
    pub stop_on_atypical: bool,
    /// Keep every trace event.
    pub record_events: bool,
    /// Watch the raw path for exits from the tube of the last trace state.
    pub track_tube: bool,
    /// Times (ascending) at which to snapshot the labels.
    pub probes: Vec<f64>,
    /// Read probe and merge times off the raw clock instead of the trace
    /// clock; between visits to E_N the last trace state is used.
    pub raw_clock: bool,
    /// Stop once a merge has happened and every probe has been taken.
    pub stop_when_merged: bool,
}

impl Default for TrackerOptions {
    fn default() -> Self {
        TrackerOptions {
            trace_horizon: None,
            stop_on_atypical: true,
            record_events: false,
            track_tube: false,
            probes: Vec::new(),
            raw_clock: false,
            stop_when_merged: false,
        }
    }
}

/// Observer that accumulates the trace clock and runs the labelled dynamics.
#[derive(Debug, Clone)]
pub struct TraceTracker {
    k: usize,
    options: TrackerOptions,
    clock: TraceClock,
    in_e: bool,
    current: CondensedView,
    labeled: LabeledState,
    displacement: Vec<i64>,
    events: Vec<TraceEvent>,
    trace_jumps: u64,
    atypical: Option<(f64, AtypicalJump)>,
    tube_exit: Option<f64>,
    tube_ok: bool,
    first_merge: Option<f64>,
    probes: Vec<ProbeRecord>,
    horizon_raw_time: Option<f64>,
}

impl TraceTracker {
    /// Starts from a labelled condensed state, which must project onto the
    /// initial configuration of the run.
    pub fn new(params: &ModelParams, start: LabeledState, options: TrackerOptions) -> Result<Self, CondensateError> {
        let view = start.view();
        if view.total() != params.n() {
            return Err(CondensateError::MassMismatch {
                expected: params.n(),
                found: view.total(),
            });
        }
        if view.ell() > params.k() {
            return Err(CondensateError::TooManyCondensates {
                found: view.ell(),
                k: params.k(),
            });
        }
        let labels = start.labels();
        Ok(TraceTracker {
            k: params.k(),
            options,
            clock: TraceClock::default(),
            in_e: true,
            current: view,
            labeled: start,
            displacement: vec![0; labels],
            events: Vec::new(),
            trace_jumps: 0,
            atypical: None,
            tube_exit: None,
            tube_ok: true,
            first_merge: None,
            probes: Vec::new(),
            horizon_raw_time: None,
        })
    }

    pub fn clock(&self) -> TraceClock {
        self.clock
    }

    pub fn labeled(&self) -> &LabeledState {
        &self.labeled
    }

    pub fn displacement(&self) -> &[i64] {
        &self.displacement
    }

    pub fn events(&self) -> &[TraceEvent] {
        &self.events
    }

    pub fn trace_jumps(&self) -> u64 {
        self.trace_jumps
    }

    /// Trace time and details of the first atypical jump.
    pub fn atypical(&self) -> Option<&(f64, AtypicalJump)> {
        self.atypical.as_ref()
    }

    /// Raw time of the first tube exit, if tracked and seen.
    pub fn tube_exit(&self) -> Option<f64> {
        self.tube_exit
    }

    /// Trace time of the first merge.
    pub fn first_merge(&self) -> Option<f64> {
        self.first_merge
    }

    pub fn probes(&self) -> &[ProbeRecord] {
        &self.probes
    }

    /// Raw time at which the trace clock reached the horizon (`S_N`).
    pub fn horizon_raw_time(&self) -> Option<f64> {
        self.horizon_raw_time
    }

    pub fn reached_horizon(&self) -> bool {
        self.horizon_raw_time.is_some()
    }

    /// Accounts for `holding` raw time spent in the current state, which ends
    /// at raw time `t_end_raw`. Returns true if the trace horizon was hit.
    fn advance_clock(&mut self, holding: f64, t_end_raw: f64) -> bool {
        let raw_before = self.clock.t_total;
        self.clock.t_total += holding;
        if self.options.raw_clock {
            self.take_probes(self.clock.t_total);
        }
        if !self.in_e {
            return false;
        }
        let before = self.clock.t_in_e;
        let after = before + holding;
        if !self.options.raw_clock {
            self.take_probes(after);
        }
        if let Some(h) = self.options.trace_horizon {
            if after >= h && self.horizon_raw_time.is_none() {
                let t_start_raw = t_end_raw - holding;
                self.horizon_raw_time = Some(t_start_raw + (h - before).max(0.0));
                self.clock.t_in_e = h;
                self.clock.t_total = raw_before + (h - before).max(0.0);
                return true;
            }
        }
        self.clock.t_in_e = after;
        false
    }

    /// Snapshots every pending probe at or before `upto`.
    fn take_probes(&mut self, upto: f64) {
        while self.probes.len() < self.options.probes.len() {
            let p = self.options.probes[self.probes.len()];
            if p > upto {
                break;
            }
            self.probes.push(ProbeRecord {
                t_trace: p,
                displacement: self.displacement.clone(),
                positions: self.labeled.positions.clone(),
                clusters: self.labeled.cluster_count(),
            });
        }
    }

    fn finished(&self) -> bool {
        self.options.stop_when_merged && self.first_merge.is_some() && self.probes.len() == self.options.probes.len()
    }

    fn enter(&mut self, view: CondensedView, t_raw: f64) -> Flow {
        let t_trace = self.clock.t_in_e;
        match label_update(&self.labeled, &view) {
            Ok(update) => {
                self.trace_jumps += 1;
                for (d, s) in self.displacement.iter_mut().zip(&update.shifts) {
                    *d += s;
                }
                if update.kind == TraceKind::TypeBMerge && self.first_merge.is_none() {
                    self.first_merge = Some(if self.options.raw_clock { t_raw } else { t_trace });
                }
                if self.options.record_events {
                    self.events.push(TraceEvent {
                        t_trace,
                        t_raw,
                        before: self.labeled.clone(),
                        after: update.state.clone(),
                        kind: update.kind,
                    });
                }
                self.labeled = update.state;
                self.current = view;
                if self.finished() {
                    Flow::Stop
                } else {
                    Flow::Continue
                }
            }
            Err(jump) => {
                if self.atypical.is_none() {
                    self.atypical = Some((t_trace, jump));
                }
                self.current = view;
                if self.options.stop_on_atypical {
                    Flow::Stop
                } else {
                    // labels cannot be continued canonically; restart them
                    self.labeled = LabeledState::from_view(&self.current);
                    self.displacement = vec![0; self.labeled.labels()];
                    Flow::Continue
                }
            }
        }
    }
}

impl Observer for TraceTracker {
    fn on_start(&mut self, _t: f64, state: StateView<'_>) -> Flow {
        self.in_e = state.is_condensed(self.k);
        if self.in_e && !self.current.same_as_state(&state) {
            // the labelled start does not match the initial configuration
            self.current = CondensedView::from_state(&state);
            self.labeled = LabeledState::from_view(&self.current);
            self.displacement = vec![0; self.labeled.labels()];
        }
        Flow::Continue
    }

    fn on_event(&mut self, event: &SimEvent, holding: f64, state: StateView<'_>) -> Flow {
        if self.advance_clock(holding, event.t) || self.finished() {
            return Flow::Stop;
        }
        self.in_e = state.is_condensed(self.k);
        if self.in_e {
            self.tube_ok = true;
            if !self.current.same_as_state(&state) {
                let view = CondensedView::from_state(&state);
                return self.enter(view, event.t);
            }
        } else if self.options.track_tube
            && self.tube_ok
            && self.tube_exit.is_none()
            && !tube_contains(&self.current, state.eta, state.occupied)
        {
            self.tube_ok = false;
            self.tube_exit = Some(event.t);
        }
        Flow::Continue
    }

    fn on_horizon(&mut self, t_end: f64, tail: f64, _state: StateView<'_>) {
        self.advance_clock(tail, t_end);
    }
}
