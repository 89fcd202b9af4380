//! Exact exponential-clock simulation of the inclusion process.
//!
//! The active rate set lives on occupied sites only, which during condensed
//! phases means a handful of entries, so each event rescans it instead of
//! maintaining a rate tree.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Configuration, Direction, ModelError, ModelParams};
use crate::par;
use crate::rng::{exponential, open_unit, replica_rng, ReplicaRng};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EngineError {
    #[error("total jump rate is zero")]
    DeadState,
    #[error("horizon must be finite and non-negative (got {0})")]
    InvalidHorizon(f64),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// One jump of the raw process, at absolute time `t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimEvent {
    pub t: f64,
    pub from: usize,
    pub to: usize,
}

/// Identifies one replica of an ensemble.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReplicaPlan {
    pub master_seed: u64,
    pub replica_index: u64,
    pub t_end: f64,
}

impl ReplicaPlan {
    pub fn rng(&self) -> ReplicaRng {
        replica_rng(self.master_seed, self.replica_index)
    }
}

/// Result of a single pure [`step`].
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub dt: f64,
    pub from: usize,
    pub to: usize,
    pub next: Configuration,
}

/// Read-only view of the simulator state handed to observers.
#[derive(Debug, Clone, Copy)]
pub struct StateView<'a> {
    pub eta: &'a Configuration,
    /// Occupied sites in ascending order.
    pub occupied: &'a [usize],
    /// Number of cyclically adjacent occupied pairs `(x, x+1)`.
    pub adjacent_pairs: usize,
}

impl StateView<'_> {
    /// Membership in E_N: at most `k` occupied sites, none adjacent.
    #[inline]
    pub fn is_condensed(&self, k: usize) -> bool {
        self.adjacent_pairs == 0 && self.occupied.len() <= k
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Flow {
    Continue,
    Stop,
}

/// Receives every state of a run in order.
pub trait Observer {
    fn on_start(&mut self, _t: f64, _state: StateView<'_>) -> Flow {
        Flow::Continue
    }

    /// `holding` is the time spent in the state before `event`; `state` is
    /// the state after it.
    fn on_event(&mut self, event: &SimEvent, holding: f64, state: StateView<'_>) -> Flow;

    /// Final holding interval `[t_end − tail, t_end]` in `state`.
    fn on_horizon(&mut self, _t_end: f64, _tail: f64, _state: StateView<'_>) {}
}

impl<O: Observer + ?Sized> Observer for &mut O {
    fn on_start(&mut self, t: f64, state: StateView<'_>) -> Flow {
        (**self).on_start(t, state)
    }
    fn on_event(&mut self, event: &SimEvent, holding: f64, state: StateView<'_>) -> Flow {
        (**self).on_event(event, holding, state)
    }
    fn on_horizon(&mut self, t_end: f64, tail: f64, state: StateView<'_>) {
        (**self).on_horizon(t_end, tail, state)
    }
}

impl<A: Observer, B: Observer> Observer for (A, B) {
    fn on_start(&mut self, t: f64, state: StateView<'_>) -> Flow {
        let a = self.0.on_start(t, state);
        let b = self.1.on_start(t, state);
        if a == Flow::Stop || b == Flow::Stop {
            Flow::Stop
        } else {
            Flow::Continue
        }
    }
    fn on_event(&mut self, event: &SimEvent, holding: f64, state: StateView<'_>) -> Flow {
        let a = self.0.on_event(event, holding, state);
        let b = self.1.on_event(event, holding, state);
        if a == Flow::Stop || b == Flow::Stop {
            Flow::Stop
        } else {
            Flow::Continue
        }
    }
    fn on_horizon(&mut self, t_end: f64, tail: f64, state: StateView<'_>) {
        self.0.on_horizon(t_end, tail, state);
        self.1.on_horizon(t_end, tail, state);
    }
}

/// Observer that ignores everything.
#[derive(Debug, Default, Clone, Copy)]
pub struct NoObserver;

impl Observer for NoObserver {
    fn on_event(&mut self, _: &SimEvent, _: f64, _: StateView<'_>) -> Flow {
        Flow::Continue
    }
}

/// Counts events.
#[derive(Debug, Default, Clone, Copy)]
pub struct EventCounter {
    pub events: u64,
}

impl Observer for EventCounter {
    fn on_event(&mut self, _: &SimEvent, _: f64, _: StateView<'_>) -> Flow {
        self.events += 1;
        Flow::Continue
    }
}

/// Collects every raw event.
#[derive(Debug, Default, Clone)]
pub struct EventRecorder {
    pub events: Vec<SimEvent>,
}

impl Observer for EventRecorder {
    fn on_event(&mut self, event: &SimEvent, _: f64, _: StateView<'_>) -> Flow {
        self.events.push(*event);
        Flow::Continue
    }
}

/// How a run ended.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub final_state: Configuration,
    /// `t_end`, or the time of the aborting event.
    pub t_stop: f64,
    pub events: u64,
    pub aborted: bool,
}

/// Mutable simulator state with incremental bookkeeping of occupied sites.
#[derive(Debug, Clone)]
pub struct Simulation {
    params: ModelParams,
    eta: Configuration,
    occupied: Vec<usize>,
    adjacent_pairs: usize,
    t: f64,
}

impl Simulation {
    pub fn new(params: ModelParams, eta: Configuration) -> Result<Self, EngineError> {
        eta.check_against(&params)?;
        let occupied: Vec<usize> = eta.occupied_sites().collect();
        let len = eta.len();
        let adjacent_pairs = occupied
            .iter()
            .filter(|&&x| eta.get(Direction::Plus.step(x, len)) > 0)
            .count();
        Ok(Simulation {
            params,
            eta,
            occupied,
            adjacent_pairs,
            t: 0.0,
        })
    }

    #[inline]
    pub fn time(&self) -> f64 {
        self.t
    }

    #[inline]
    pub fn state(&self) -> &Configuration {
        &self.eta
    }

    #[inline]
    pub fn view(&self) -> StateView<'_> {
        StateView {
            eta: &self.eta,
            occupied: &self.occupied,
            adjacent_pairs: self.adjacent_pairs,
        }
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn into_state(self) -> Configuration {
        self.eta
    }

    /// Total rate divided by `θ_N`.
    #[inline]
    fn reduced_total(&self) -> f64 {
        let len = self.eta.len();
        let mut total = 0.0;
        for &x in &self.occupied {
            let m = self.eta.get(x);
            total += self.params.reduced_rate(m, self.eta.get(Direction::Plus.step(x, len)));
            total += self.params.reduced_rate(m, self.eta.get(Direction::Minus.step(x, len)));
        }
        total
    }

    /// Total jump rate of the current state.
    pub fn total_rate(&self) -> f64 {
        self.params.theta() * self.reduced_total()
    }

    /// Draws the holding time and the jump, without applying it.
    #[inline]
    fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<(f64, usize, Direction), EngineError> {
        let total = self.reduced_total();
        if total.is_nan() || total <= 0.0 {
            return Err(EngineError::DeadState);
        }
        let dt = exponential(rng, self.params.theta() * total);
        let target = open_unit(rng) * total;
        let len = self.eta.len();
        let mut acc = 0.0;
        let mut last = (self.occupied[0], Direction::Plus);
        for &x in &self.occupied {
            let m = self.eta.get(x);
            for dir in Direction::BOTH {
                let r = self.params.reduced_rate(m, self.eta.get(dir.step(x, len)));
                acc += r;
                last = (x, dir);
                if target < acc {
                    return Ok((dt, x, dir));
                }
            }
        }
        // Rounding can leave `target` a hair above the last partial sum.
        Ok((dt, last.0, last.1))
    }

    #[inline]
    fn apply(&mut self, from: usize, dir: Direction) -> usize {
        let len = self.eta.len();
        let to = dir.step(from, len);
        let left = Direction::Minus.step(from, len);
        let right = Direction::Plus.step(from, len);
        // Jump source always occupied; bookkeeping errors are bugs.
        self.eta
            .apply_jump_in_place(from, dir)
            .expect("jump source is occupied");
        if self.eta.get(from) == 0 {
            let pos = self.occupied.binary_search(&from).expect("occupied list in sync");
            self.occupied.remove(pos);
            // `to` was incremented already; count neighbours as if it had not been.
            let occ_before = |y: usize| {
                let m = self.eta.get(y);
                if y == to {
                    m > 1
                } else {
                    m > 0
                }
            };
            self.adjacent_pairs -= usize::from(occ_before(left)) + usize::from(occ_before(right));
        }
        if self.eta.get(to) == 1 {
            let pos = self.occupied.binary_search(&to).unwrap_err();
            self.occupied.insert(pos, to);
            let tl = Direction::Minus.step(to, len);
            let tr = Direction::Plus.step(to, len);
            self.adjacent_pairs += usize::from(self.eta.get(tl) > 0) + usize::from(self.eta.get(tr) > 0);
        }
        to
    }

    /// Performs one jump and returns `(dt, event)`.
    pub fn advance<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<(f64, SimEvent), EngineError> {
        let (dt, from, dir) = self.draw(rng)?;
        self.t += dt;
        let to = self.apply(from, dir);
        Ok((dt, SimEvent { t: self.t, from, to }))
    }

    /// Runs until `t_end` or until the observer stops.
    pub fn run_until<R: Rng + ?Sized, O: Observer + ?Sized>(
        &mut self,
        t_end: f64,
        rng: &mut R,
        observer: &mut O,
    ) -> Result<(u64, bool), EngineError> {
        if !(t_end >= 0.0 && t_end.is_finite()) {
            return Err(EngineError::InvalidHorizon(t_end));
        }
        let mut events = 0u64;
        if observer.on_start(self.t, self.view()) == Flow::Stop {
            return Ok((0, true));
        }
        loop {
            let (dt, from, dir) = self.draw(rng)?;
            if self.t + dt > t_end {
                let tail = t_end - self.t;
                self.t = t_end;
                observer.on_horizon(t_end, tail, self.view());
                return Ok((events, false));
            }
            self.t += dt;
            let to = self.apply(from, dir);
            events += 1;
            let event = SimEvent { t: self.t, from, to };
            if observer.on_event(&event, dt, self.view()) == Flow::Stop {
                return Ok((events, true));
            }
        }
    }
}

/// One transition of the chain from `eta`.
pub fn step<R: Rng + ?Sized>(params: &ModelParams, eta: &Configuration, rng: &mut R) -> Result<StepOutcome, EngineError> {
    let mut sim = Simulation::new(*params, eta.clone())?;
    let (dt, event) = sim.advance(rng)?;
    Ok(StepOutcome {
        dt,
        from: event.from,
        to: event.to,
        next: sim.into_state(),
    })
}

/// Simulates from `eta0` on `[0, t_end]`, feeding `observer`.
pub fn run<R: Rng + ?Sized, O: Observer + ?Sized>(
    params: &ModelParams,
    eta0: &Configuration,
    t_end: f64,
    rng: &mut R,
    observer: &mut O,
) -> Result<RunOutcome, EngineError> {
    let mut sim = Simulation::new(*params, eta0.clone())?;
    let (events, aborted) = sim.run_until(t_end, rng, observer)?;
    Ok(RunOutcome {
        t_stop: sim.time(),
        final_state: sim.into_state(),
        events,
        aborted,
    })
}

/// Output of one replica.
#[derive(Debug, Clone)]
pub struct ReplicaOutput<T> {
    pub replica_index: u64,
    pub result: Result<(RunOutcome, T), EngineError>,
}

/// Runs one replica per plan; outputs come back in plan order regardless of
/// scheduling. `make` builds a fresh observer, `finish` turns it into the
/// per-replica record.
pub fn run_replicas<O, T, M, F>(
    params: &ModelParams,
    eta0: &Configuration,
    plans: &[ReplicaPlan],
    make: M,
    finish: F,
) -> Vec<ReplicaOutput<T>>
where
    O: Observer,
    T: Send,
    M: Fn(&ReplicaPlan) -> O + Sync + Send,
    F: Fn(O) -> T + Sync + Send,
{
    let positions: Vec<u64> = (0..plans.len() as u64).collect();
    par::map_indices(&positions, |pos| {
        let plan = &plans[pos as usize];
        let mut rng = plan.rng();
        let mut observer = make(plan);
        let result = run(params, eta0, plan.t_end, &mut rng, &mut observer).map(|outcome| (outcome, finish(observer)));
        ReplicaOutput {
            replica_index: plan.replica_index,
            result,
        }
    })
}

/// Plans for indices `0..replicas`.
pub fn plans(master_seed: u64, replicas: usize, t_end: f64) -> Vec<ReplicaPlan> {
    (0..replicas as u64)
        .map(|replica_index| ReplicaPlan {
            master_seed,
            replica_index,
            t_end,
        })
        .collect()
}
