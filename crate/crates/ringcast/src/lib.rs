//! Token-ring reliable multicast with total ordering, delayed fair delivery,
//! NACK-reduction sets, layered repair and centralized ring reformation,
//! exercised through a deterministic discrete-event network simulator and
//! three stock-exchange applications (unified ticker, unified order stream,
//! distributed trading floor).

pub mod apps;
pub mod engine;
pub mod layering;
pub mod metrics;
pub mod nack;
pub mod protocol;
pub mod reformation;
pub mod runner;
pub mod scenario;
pub mod simnet;
pub mod time;
pub mod timing;
pub mod verify;

pub use metrics::Metrics;
pub use runner::{run_scenario, RunOutcome};
pub use engine::RunExit;
pub use scenario::{Scenario, ScenarioError};
pub use simnet::trace::{Trace, TraceRecord};
pub use time::{SimDuration, SimTime};
pub use verify::{verify_trace, VerifyReport};
