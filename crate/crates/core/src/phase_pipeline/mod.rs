//! The session state machine: phases in order, each a plan, act, check and
//! reflect loop under a step budget.

mod bridge;
mod run;
mod spec;

pub use bridge::{ConsoleBridge, OperatorChannel, OperatorError, OperatorReply, OperatorRequest, RequestKind, SubmitError};
pub use run::{
    initial_snapshot, run_session, PhaseOutcome, SessionDeps, SessionError, SessionReport, SessionStatus, BUDGET_EXHAUSTED,
    MANUAL_UNAVAILABLE, PLAN_EXHAUSTED,
};
pub use spec::*;
