//! Ensemble statistics for the limit statements: occupation of E_N, typical
//! trace jumps, the time change, and the comparison of labelled condensate
//! positions with coalescing Brownian motions.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cbm::{self, CBMParams, CbmError, PathOptions};
use crate::condensate::{classify, Classification, CondensateError, LabeledState, TraceTracker, TrackerOptions};
use crate::engine::{self, run_replicas, EngineError, Flow, Observer, SimEvent, StateView};
use crate::model::{Configuration, ModelParams};
use crate::rng::derive_seed;
use crate::stats::{self, mean_stderr, proportion, Estimate, StatsError};

pub use crate::stats::ks_two_sample;

/// Minimum number of usable replicas per side of a comparison.
pub const MIN_EFFECTIVE: usize = 100;

const CBM_STREAM: u64 = 0xCB;

#[derive(Debug, Error)]
pub enum VerifyError {
    #[error("insufficient data: {side} ensemble has {effective} effective replicas, at least {required} needed")]
    InsufficientData {
        side: String,
        effective: usize,
        required: usize,
    },
    #[error("initial configuration is not in E_N")]
    NotCondensed,
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Condensate(#[from] CondensateError),
    #[error(transparent)]
    Cbm(#[from] CbmError),
    #[error(transparent)]
    Stats(#[from] StatsError),
}

/// Per-replica record of a labelled-trace run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicaRecord {
    pub replica_index: u64,
    /// Raw jumps simulated.
    pub events: u64,
    /// Raw time covered by the run.
    pub raw_time: f64,
    /// Trace time covered by the run.
    pub trace_time: f64,
    pub fraction_outside: f64,
    pub atypical: bool,
    /// Trace time of the first atypical jump.
    pub atypical_at: Option<f64>,
    /// Time of the first merge on the comparison clock.
    pub first_merge: Option<f64>,
    /// Raw time at which the trace clock reached the horizon.
    pub horizon_raw_time: Option<f64>,
    /// Unwrapped displacement of each label at each probe, in lattice units.
    pub probe_displacements: Vec<Vec<i64>>,
    pub probe_positions: Vec<Vec<usize>>,
    pub probe_clusters: Vec<usize>,
}

/// Per-replica records with aggregates that can be recomputed from them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSummary {
    pub replicas: usize,
    pub records: Vec<ReplicaRecord>,
    pub fraction_outside: Estimate,
    pub atypical: Estimate,
    /// Merge times among replicas that merged.
    pub first_merge: Option<Estimate>,
}

impl EnsembleSummary {
    pub fn from_records(records: Vec<ReplicaRecord>) -> Self {
        let fractions: Vec<f64> = records.iter().map(|r| r.fraction_outside).collect();
        let atypical = records.iter().filter(|r| r.atypical).count();
        let merges: Vec<f64> = records.iter().filter_map(|r| r.first_merge).collect();
        EnsembleSummary {
            replicas: records.len(),
            fraction_outside: mean_stderr(&fractions),
            atypical: proportion(atypical, records.len()),
            first_merge: (!merges.is_empty()).then(|| mean_stderr(&merges)),
            records,
        }
    }
}

/// Labelled start for a configuration in E_N.
pub fn labeled_start(params: &ModelParams, eta0: &Configuration) -> Result<LabeledState, VerifyError> {
    eta0.check_against(params).map_err(|e| VerifyError::Engine(EngineError::Model(e)))?;
    match classify(params, eta0) {
        Classification::Condensed(view) => Ok(LabeledState::from_view(&view)),
        Classification::NotCondensed => Err(VerifyError::NotCondensed),
    }
}

/// Runs `replicas` tracked replicas from `start` with raw horizon `t_raw`.
pub fn tracked_ensemble(
    params: &ModelParams,
    start: &LabeledState,
    options: &TrackerOptions,
    t_raw: f64,
    replicas: usize,
    master_seed: u64,
) -> Result<EnsembleSummary, VerifyError> {
    // validates the start once so the per-replica constructor cannot fail
    TraceTracker::new(params, start.clone(), options.clone())?;
    let eta0 = crate::condensate::project(start);
    let plans = engine::plans(master_seed, replicas, t_raw);
    let outputs = run_replicas(
        params,
        &eta0,
        &plans,
        |_| TraceTracker::new(params, start.clone(), options.clone()).expect("validated start"),
        |tracker| tracker,
    );
    let mut records = Vec::with_capacity(outputs.len());
    for out in outputs {
        let (outcome, tracker) = out.result?;
        let clock = tracker.clock();
        let probes = tracker.probes();
        records.push(ReplicaRecord {
            replica_index: out.replica_index,
            events: outcome.events,
            raw_time: clock.t_total,
            trace_time: clock.t_in_e,
            fraction_outside: clock.fraction_outside(),
            atypical: tracker.atypical().is_some(),
            atypical_at: tracker.atypical().map(|a| a.0),
            first_merge: tracker.first_merge(),
            horizon_raw_time: tracker.horizon_raw_time(),
            probe_displacements: probes.iter().map(|p| p.displacement.clone()).collect(),
            probe_positions: probes.iter().map(|p| p.positions.clone()).collect(),
            probe_clusters: probes.iter().map(|p| p.clusters).collect(),
        });
    }
    Ok(EnsembleSummary::from_records(records))
}

/// Raw horizon used when a run is driven by a trace horizon `t`.
pub fn raw_cap(t: f64) -> f64 {
    2.0 * t + 1.0
}

/// Occupation of the complement of E_N on `[0, t]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Theorem1Report {
    pub t: f64,
    pub fraction: Estimate,
    pub summary: EnsembleSummary,
}

/// Estimates `E[∫₀ᵗ 1{η ∉ E_N} ds] / t` over `replicas` runs.
pub fn theorem1_stat(
    params: &ModelParams,
    eta0: &Configuration,
    t: f64,
    replicas: usize,
    master_seed: u64,
) -> Result<Theorem1Report, VerifyError> {
    if !(t >= 0.0 && t.is_finite()) {
        return Err(VerifyError::Invalid(format!("horizon must be non-negative (got {t})")));
    }
    let start = labeled_start(params, eta0)?;
    let options = TrackerOptions {
        stop_on_atypical: false,
        ..TrackerOptions::default()
    };
    let summary = tracked_ensemble(params, &start, &options, t, replicas, master_seed)?;
    Ok(Theorem1Report {
        t,
        fraction: summary.fraction_outside,
        summary,
    })
}

/// Frequency of atypical trace jumps before trace time `t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Theorem2Report {
    pub t: f64,
    pub estimate: Estimate,
    pub atypical: usize,
    /// One-sided 95% Clopper–Pearson upper bound.
    pub upper95: f64,
    /// Replicas whose raw horizon ran out before trace time `t`.
    pub censored: usize,
    pub summary: EnsembleSummary,
}

pub fn theorem2_stat(
    params: &ModelParams,
    eta0: &Configuration,
    t: f64,
    replicas: usize,
    master_seed: u64,
) -> Result<Theorem2Report, VerifyError> {
    if !(t >= 0.0 && t.is_finite()) {
        return Err(VerifyError::Invalid(format!("horizon must be non-negative (got {t})")));
    }
    let start = labeled_start(params, eta0)?;
    let options = TrackerOptions {
        trace_horizon: Some(t),
        ..TrackerOptions::default()
    };
    let summary = tracked_ensemble(params, &start, &options, raw_cap(t), replicas, master_seed)?;
    let atypical = summary.records.iter().filter(|r| r.atypical).count();
    let censored = summary
        .records
        .iter()
        .filter(|r| !r.atypical && r.horizon_raw_time.is_none())
        .count();
    Ok(Theorem2Report {
        t,
        estimate: summary.atypical,
        atypical,
        upper95: stats::clopper_pearson_upper(atypical, replicas, 0.95),
        censored,
        summary,
    })
}

/// Tail of the overshoot `S_N(t) − t` of the time change.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeChangeReport {
    pub t: f64,
    pub overshoot: Estimate,
    /// `(a, P(S_N(t) ≥ t + a))`.
    pub tail: Vec<(f64, Estimate)>,
    /// Replicas that did not reach trace time `t` within the raw cap.
    pub censored: usize,
}

pub fn time_change_stat(
    params: &ModelParams,
    eta0: &Configuration,
    t: f64,
    a_grid: &[f64],
    replicas: usize,
    master_seed: u64,
) -> Result<TimeChangeReport, VerifyError> {
    if !(t >= 0.0 && t.is_finite()) {
        return Err(VerifyError::Invalid(format!("horizon must be non-negative (got {t})")));
    }
    let start = labeled_start(params, eta0)?;
    let options = TrackerOptions {
        trace_horizon: Some(t),
        stop_on_atypical: false,
        ..TrackerOptions::default()
    };
    let summary = tracked_ensemble(params, &start, &options, raw_cap(t), replicas, master_seed)?;
    // a censored run has S_N(t) beyond the cap; its raw time is a lower bound
    let overshoots: Vec<f64> = summary
        .records
        .iter()
        .map(|r| r.horizon_raw_time.unwrap_or(r.raw_time) - t)
        .collect();
    let censored = summary.records.iter().filter(|r| r.horizon_raw_time.is_none()).count();
    let tail = a_grid
        .iter()
        .map(|&a| {
            let k = overshoots.iter().filter(|&&o| o >= a).count();
            (a, proportion(k, overshoots.len()))
        })
        .collect();
    Ok(TimeChangeReport {
        t,
        overshoot: mean_stderr(&overshoots),
        tail,
        censored,
    })
}

/// Settings of [`theorem4_compare`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Theorem4Config {
    pub sip_replicas: usize,
    pub cbm_replicas: usize,
    pub master_seed: u64,
    pub dt: f64,
    pub ks_threshold: f64,
    pub z_threshold: f64,
    /// Coalescence times are censored at this value on both sides.
    pub coalescence_cap: f64,
    /// Compare on the raw clock instead of the trace clock.
    pub raw_clock: bool,
    /// Round CBM displacements to the lattice spacing `1/L`.
    pub lattice_rounding: bool,
    /// Stop SIP replicas once merged and probed.
    pub stop_when_merged: bool,
}

impl Default for Theorem4Config {
    fn default() -> Self {
        Theorem4Config {
            sip_replicas: 2000,
            cbm_replicas: 2000,
            master_seed: 0,
            dt: cbm::CBMParams::DEFAULT_DT,
            ks_threshold: 0.05,
            z_threshold: 3.0,
            coalescence_cap: 1.0,
            raw_clock: false,
            lattice_rounding: true,
            stop_when_merged: true,
        }
    }
}

/// One distance between the two ensembles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Statistic {
    pub name: String,
    /// `"ks"`, `"kuiper"` or `"z"`.
    pub kind: String,
    pub value: f64,
    /// Pass threshold; `None` for reported-only statistics.
    pub threshold: Option<f64>,
    pub passed: Option<bool>,
}

impl Statistic {
    fn gated(name: String, kind: &str, value: f64, threshold: f64) -> Self {
        Statistic {
            name,
            kind: kind.to_string(),
            value,
            threshold: Some(threshold),
            passed: Some(value <= threshold),
        }
    }

    fn reported(name: String, kind: &str, value: f64) -> Self {
        Statistic {
            name,
            kind: kind.to_string(),
            value,
            threshold: None,
            passed: None,
        }
    }
}

/// Check of the CBM ensemble against the exact pair law.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CbmGate {
    pub expected_mean: f64,
    pub estimate: Estimate,
    pub z: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Theorem4Report {
    pub config: Theorem4Config,
    pub probes: Vec<f64>,
    pub rho: f64,
    pub sip_replicas: usize,
    pub cbm_replicas: usize,
    pub excluded: usize,
    pub excluded_fraction: f64,
    pub gate: Option<CbmGate>,
    pub statistics: Vec<Statistic>,
    pub passed: bool,
}

/// Tracker settings and raw horizon of the SIP side of [`theorem4_compare`].
pub fn theorem4_tracker(start: &LabeledState, probes: &[f64], config: &Theorem4Config) -> (TrackerOptions, f64) {
    let merging = start.cluster_count() >= 2;
    let last = probes.last().copied().unwrap_or(0.0);
    let horizon = if merging { last.max(config.coalescence_cap) } else { last };
    let options = TrackerOptions {
        trace_horizon: (!config.raw_clock).then_some(horizon),
        probes: probes.to_vec(),
        raw_clock: config.raw_clock,
        stop_when_merged: merging && config.stop_when_merged,
        ..TrackerOptions::default()
    };
    let t_raw = if config.raw_clock { horizon } else { raw_cap(horizon) };
    (options, t_raw)
}

/// Compares labelled condensate positions of the SIP with coalescing
/// Brownian motions started from `x/L` at `ρ = N/L`.
pub fn theorem4_compare(
    params: &ModelParams,
    start: &LabeledState,
    probes: &[f64],
    config: &Theorem4Config,
) -> Result<Theorem4Report, VerifyError> {
    for (side, n) in [("SIP", config.sip_replicas), ("CBM", config.cbm_replicas)] {
        if n < MIN_EFFECTIVE {
            return Err(VerifyError::InsufficientData {
                side: side.to_string(),
                effective: n,
                required: MIN_EFFECTIVE,
            });
        }
    }
    if probes.windows(2).any(|w| w[0] > w[1]) || probes.iter().any(|p| !(*p >= 0.0 && p.is_finite())) {
        return Err(VerifyError::Invalid("probe times must be finite, non-negative and ascending".into()));
    }
    let rho = params.rho();
    let mut report = Theorem4Report {
        config: config.clone(),
        probes: probes.to_vec(),
        rho,
        sip_replicas: 0,
        cbm_replicas: 0,
        excluded: 0,
        excluded_fraction: 0.0,
        gate: None,
        statistics: Vec::new(),
        passed: true,
    };
    if probes.is_empty() {
        return Ok(report);
    }
    let len = params.l();
    let labels = start.labels();
    let clusters0 = start.cluster_count();
    let merging = clusters0 >= 2;
    let cap = config.coalescence_cap;
    let (options, t_raw) = theorem4_tracker(start, probes, config);
    let horizon = options.trace_horizon.unwrap_or(t_raw);
    let sip = tracked_ensemble(params, start, &options, t_raw, config.sip_replicas, config.master_seed)?;
    // replicas whose trace never reached the last probe cannot be compared
    let usable: Vec<&ReplicaRecord> = sip
        .records
        .iter()
        .filter(|r| !r.atypical && r.probe_displacements.len() == probes.len())
        .collect();
    report.excluded = sip.records.iter().filter(|r| r.atypical).count();
    report.excluded_fraction = report.excluded as f64 / sip.replicas as f64;
    report.sip_replicas = usable.len();
    if usable.len() < MIN_EFFECTIVE {
        return Err(VerifyError::InsufficientData {
            side: "SIP".into(),
            effective: usable.len(),
            required: MIN_EFFECTIVE,
        });
    }

    let cbm_params = CBMParams::new(labels, rho, config.dt, true)?;
    let u0: Vec<f64> = start.positions().iter().map(|&x| x as f64 / len as f64).collect();
    let path_options = PathOptions {
        probes: probes.to_vec(),
        stop_when_single: true,
    };
    let paths = cbm::sample_ensemble(
        &cbm_params,
        &u0,
        horizon,
        &path_options,
        derive_seed(config.master_seed, CBM_STREAM),
        config.cbm_replicas,
    )?;
    report.cbm_replicas = paths.len();

    if merging {
        let cbm_times: Vec<f64> = paths
            .iter()
            .map(|p| p.first_coalescence().unwrap_or(cap).min(cap))
            .collect();
        if labels == 2 {
            let gap = cbm::torus_gap(u0[0], u0[1]);
            let (_, expected_mean) = cbm::pair_exit_law(gap, rho);
            let estimate = mean_stderr(&cbm_times);
            let z = estimate.z_score(expected_mean);
            report.gate = Some(CbmGate {
                expected_mean,
                estimate,
                z,
                passed: z <= config.z_threshold,
            });
        }
        let sip_times: Vec<f64> = usable
            .iter()
            .map(|r| r.first_merge.unwrap_or(cap).min(cap))
            .collect();
        report.statistics.push(Statistic::gated(
            "first_coalescence".into(),
            "ks",
            ks_two_sample(&sip_times, &cbm_times)?,
            config.ks_threshold,
        ));
    }

    let scale = 1.0 / len as f64;
    for (j, &p) in probes.iter().enumerate() {
        for i in 0..labels {
            let sip_disp: Vec<f64> = usable
                .iter()
                .map(|r| r.probe_displacements[j][i] as f64 * scale)
                .collect();
            let cbm_disp: Vec<f64> = paths
                .iter()
                .map(|path| {
                    let x = path.probes[j].displacements[i];
                    if config.lattice_rounding {
                        (x * len as f64).round() * scale
                    } else {
                        x
                    }
                })
                .collect();
            report.statistics.push(Statistic::gated(
                format!("displacement[{i}]@{p}"),
                "ks",
                ks_two_sample(&sip_disp, &cbm_disp)?,
                config.ks_threshold,
            ));
            let sip_pos: Vec<f64> = usable
                .iter()
                .map(|r| r.probe_positions[j][i] as f64 * scale)
                .collect();
            let cbm_pos: Vec<f64> = paths.iter().map(|path| path.probes[j].positions[i]).collect();
            report.statistics.push(Statistic::reported(
                format!("position[{i}]@{p}"),
                "kuiper",
                stats::kuiper_two_sample(&sip_pos, &cbm_pos)?,
            ));
        }
        if merging {
            let k_sip = usable.iter().filter(|r| r.probe_clusters[j] < clusters0).count();
            let k_cbm = paths.iter().filter(|path| path.probes[j].clusters < clusters0).count();
            let z = stats::two_proportion_z(k_sip, usable.len(), k_cbm, paths.len()).abs();
            report
                .statistics
                .push(Statistic::gated(format!("merged@{p}"), "z", z, config.z_threshold));
        }
    }
    report.passed = report.gate.as_ref().is_none_or(|g| g.passed)
        && report.statistics.iter().all(|s| s.passed != Some(false));
    Ok(report)
}

/// Outcome of excursions away from E_N inside a slab of sites.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExcursionReport {
    pub excursions: usize,
    /// Excursions that ended with all mass on `counted_site`.
    pub absorbed_top: usize,
    /// Excursions in which a particle left the slab before E_N was reached.
    pub escaped: usize,
    /// Excursions that had not ended by the raw horizon.
    pub unfinished: usize,
    pub top: Estimate,
    /// Duration of completed excursions.
    pub duration: Estimate,
}

struct Excursion<'a> {
    k: usize,
    slab: &'a [usize],
    counted_site: usize,
    mass: u32,
    outcome: Option<(bool, f64)>,
    escaped: bool,
}

impl Observer for Excursion<'_> {
    fn on_event(&mut self, event: &SimEvent, _holding: f64, state: StateView<'_>) -> Flow {
        if state.occupied.iter().any(|x| !self.slab.contains(x)) {
            self.escaped = true;
            return Flow::Stop;
        }
        if state.is_condensed(self.k) {
            let top = state.eta.get(self.counted_site) == self.mass;
            self.outcome = Some((top, event.t));
            return Flow::Stop;
        }
        Flow::Continue
    }
}

/// Runs excursions from `eta0` (outside E_N, all mass inside `slab`) until
/// the first visit to E_N. An excursion ends at the top when all the mass
/// sits on `counted_site`.
pub fn slab_excursions(
    params: &ModelParams,
    eta0: &Configuration,
    slab: &[usize],
    counted_site: usize,
    excursions: usize,
    t_raw: f64,
    master_seed: u64,
) -> Result<ExcursionReport, VerifyError> {
    eta0.check_against(params).map_err(|e| VerifyError::Engine(EngineError::Model(e)))?;
    if eta0.occupied_sites().any(|x| !slab.contains(&x)) {
        return Err(VerifyError::Invalid("initial mass must lie in the slab".into()));
    }
    let mass = params.n();
    let plans = engine::plans(master_seed, excursions, t_raw);
    let outputs = run_replicas(
        params,
        eta0,
        &plans,
        |_| Excursion {
            k: params.k(),
            slab,
            counted_site,
            mass,
            outcome: None,
            escaped: false,
        },
        |obs| (obs.outcome, obs.escaped),
    );
    let mut tops = Vec::with_capacity(excursions);
    let mut durations = Vec::with_capacity(excursions);
    let mut escaped = 0;
    let mut unfinished = 0;
    for out in outputs {
        let (_, (outcome, esc)) = out.result?;
        match outcome {
            Some((top, t)) => {
                tops.push(if top { 1.0 } else { 0.0 });
                durations.push(t);
            }
            None if esc => escaped += 1,
            None => unfinished += 1,
        }
    }
    let absorbed_top = tops.iter().filter(|&&x| x > 0.5).count();
    Ok(ExcursionReport {
        excursions,
        absorbed_top,
        escaped,
        unfinished,
        top: mean_stderr(&tops),
        duration: mean_stderr(&durations),
    })
}
