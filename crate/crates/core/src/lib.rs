//! Simulation and verification toolkit for the condensing symmetric
//! inclusion process on the discrete torus.
//!
//! * [`model`]: rates, time scale and invariant measure.
//! * [`engine`]: exact event-driven simulation with seeded replicas.
//! * [`condensate`]: condensed states, typical neighbours, labelled trace.
//! * [`cbm`]: coalescing Brownian motions on the circle.
//! * [`bdchain`]: absorbed birth–death chains governing excursions.
//! * [`exact`]: exhaustive analysis of tiny systems.
//! * [`verify`]: statistical checks of the limit statements.

pub mod bdchain;
pub mod cbm;
pub mod condensate;
pub mod engine;
pub mod exact;
pub mod model;
pub mod par;
pub mod rng;
pub mod stats;
pub mod suite;
pub mod verify;

pub use condensate::{classify, label_update, project, Classification, CondensedView, LabeledState, TraceKind};
pub use engine::{run, run_replicas, step, Observer, ReplicaPlan, SimEvent, Simulation};
pub use model::{Configuration, Direction, ModelParams};
