//! Orchestration engine for reflect-and-revise crowd story writing.
//!
//! A story is drafted scene by scene through author-then-vote tasks, then
//! repeatedly critiqued and revised. Crowd work arrives as microtasks
//! through [`service::TaskService`]; the pure transition function in
//! [`engine`] decides what happens when a task's quorum closes, and every
//! step is recorded in an append-only [`eventlog`] that replays to the
//! same state.

pub mod aggregation;
pub mod domain;
pub mod engine;
pub mod eventlog;
pub mod service;
pub mod sim;

pub use aggregation::{compute_unlock_set, elect_goal, tally_plurality, unlock_probability};
pub use domain::{Condition, Phase, StoryConfig, StoryId, StoryState, WorkerId};
pub use engine::{advance, TaskKind, TaskSpec};
pub use eventlog::{
    replay, Event, EventPayload, EventStore, FileStore, MemoryStore, StoryDocument,
};
pub use service::{ManualClock, Rejection, SubmissionPayload, SystemClock, TaskService};

/// The guide's chapters, compiled so their snippets run as doctests.
#[cfg(doctest)]
mod guide {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/workflow.md")]
    mod workflow {}
    #[doc = include_str!("../../../book/src/aggregation.md")]
    mod aggregation {}
    #[doc = include_str!("../../../book/src/event-log.md")]
    mod event_log {}
    #[doc = include_str!("../../../book/src/http-api.md")]
    mod http_api {}
    #[doc = include_str!("../../../book/src/simulation.md")]
    mod simulation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
