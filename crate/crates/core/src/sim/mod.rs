//! Desk-scale simulation: scripted agents drive the task service end to end.

pub mod agents;
pub mod problems;
pub mod scenario;
pub mod transcript;

pub use agents::{AgentPolicy, Agents, PolicyKind, Role};
pub use problems::{inject_problem, synthetic_story, BenchmarkProblemKind};
pub use scenario::{run_batch, run_scenario, RunSpec, Scenario, SimError, TaskPort};
pub use transcript::{measure_detection, DetectionRates, Transcript};
