//! Scenario files and the deterministic scenario runner.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{
    AssignmentId, Condition, DomainError, Phase, StoryConfig, StoryId, Timestamp, WorkerId,
};
use crate::engine::TaskSpec;
use crate::eventlog::Event;
use crate::service::{
    Accepted, Assignment, ManualClock, Rejection, ServiceError, StoryStatus, SubmissionPayload,
    TaskService,
};
use crate::sim::agents::{mix_seed, Agents, Crowd};
use crate::sim::problems::{inject_problem, synthetic_story, BenchmarkProblemKind, ProblemError};
use crate::sim::transcript::{
    measure_detection, DetectionError, DetectionRates, Transcript, TranscriptError,
};

/// Simulated time starts here (2020-01-01T00:00:00Z) and moves 1 s per fetch.
pub const SIM_EPOCH: Timestamp = Timestamp(1_577_836_800_000);
pub const TICK_MS: u64 = 1000;

pub const DEFAULT_PROMPT: &str =
    "Kaley is a girl who spends all her time with an old Blue Elephant doll \
that was passed down from her grandmother. One day, it disappears.";

fn default_prompt() -> String {
    DEFAULT_PROMPT.to_owned()
}

fn default_workers() -> usize {
    64
}

fn default_runs() -> usize {
    1
}

/// A scenario file.
///
/// ```toml
/// name = "benchmark"
/// seed = 7
/// runs = 3
/// problems = ["abrupt_ending", "typos"]
///
/// [config]
/// revision_rounds = 1
///
/// [agents.author]
/// policy = "template_author"
/// template = "Scene {scene} is retold."
/// [agents.critic]
/// policy = "uniform_random"
/// [agents.selector]
/// policy = "marker_seeking"
/// detect_p = 0.9
/// [agents.voter]
/// policy = "uniform_random"
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_prompt")]
    pub prompt: String,
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default = "default_runs")]
    pub runs: usize,
    /// Benchmark problems; each one is run `runs` times on a pre-written
    /// story. Empty means plain runs from the prompt.
    #[serde(default)]
    pub problems: Vec<BenchmarkProblemKind>,
    #[serde(default)]
    pub config: StoryConfig,
    pub agents: Agents,
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read scenario: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad scenario: {0}")]
    Parse(String),
    #[error("bad scenario: {0}")]
    Invalid(String),
    #[error("bad scenario config: {0}")]
    Config(#[from] DomainError),
}

impl Scenario {
    pub fn from_toml(text: &str) -> Result<Scenario, ScenarioError> {
        let scenario: Scenario =
            toml::from_str(text).map_err(|e| ScenarioError::Parse(e.to_string()))?;
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Scenario, ScenarioError> {
        Scenario::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        self.config.validate()?;
        if self.workers == 0 {
            return Err(ScenarioError::Invalid("workers must be positive".into()));
        }
        if self.runs == 0 {
            return Err(ScenarioError::Invalid("runs must be positive".into()));
        }
        if !self.problems.is_empty() && self.config.revision_rounds != 1 {
            return Err(ScenarioError::Invalid(
                "benchmark scenarios run a single revision round; set config.revision_rounds = 1"
                    .into(),
            ));
        }
        Ok(())
    }

    /// The runs this scenario expands to, in order.
    pub fn run_specs(&self) -> Vec<RunSpec> {
        let problems: Vec<Option<BenchmarkProblemKind>> = if self.problems.is_empty() {
            vec![None]
        } else {
            self.problems.iter().copied().map(Some).collect()
        };
        let mut specs = Vec::new();
        for problem in problems {
            for run in 0..self.runs {
                let tag = problem.map_or(0, |k| k as u64 + 1);
                specs.push(RunSpec {
                    label: match problem {
                        Some(k) => format!("{}-{k}-{run:03}", self.name),
                        None => format!("{}-{run:03}", self.name),
                    },
                    config: self.config.clone(),
                    agents: self.agents.clone(),
                    prompt: self.prompt.clone(),
                    seed: mix_seed(&[self.seed, tag, run as u64]),
                    problem,
                    workers: self.workers,
                });
            }
        }
        specs
    }
}

/// Everything that determines one run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSpec {
    pub label: String,
    pub config: StoryConfig,
    pub agents: Agents,
    pub prompt: String,
    pub seed: u64,
    pub problem: Option<BenchmarkProblemKind>,
    pub workers: usize,
}

impl RunSpec {
    pub fn new(config: StoryConfig, agents: Agents, seed: u64) -> Self {
        RunSpec {
            label: format!("run-{seed}"),
            config,
            agents,
            prompt: DEFAULT_PROMPT.to_owned(),
            seed,
            problem: None,
            workers: default_workers(),
        }
    }

    pub fn with_problem(mut self, problem: BenchmarkProblemKind) -> Self {
        self.problem = Some(problem);
        self
    }
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("starvation: no simulated worker can take the open task in {phase}")]
    Starvation { phase: Phase },
    #[error("worker {worker} was rejected: {code}: {reason}")]
    Rejected {
        worker: WorkerId,
        code: String,
        reason: String,
    },
    #[error("benchmark runs need revision_rounds = 1, got {0}")]
    BenchmarkRounds(u32),
    #[error(transparent)]
    Problem(#[from] ProblemError),
    #[error(transparent)]
    Service(#[from] ServiceError),
    #[error(transparent)]
    Transcript(#[from] TranscriptError),
    #[error(transparent)]
    Detection(#[from] DetectionError),
    #[error("transport: {0}")]
    Transport(String),
}

impl SimError {
    pub fn rejected(worker: &WorkerId, r: &Rejection) -> Self {
        SimError::Rejected {
            worker: worker.clone(),
            code: r.code().to_owned(),
            reason: r.to_string(),
        }
    }
}

/// How the runner reaches a task service: in process, or over HTTP.
pub trait TaskPort {
    fn create_story(
        &mut self,
        prompt: &str,
        config: StoryConfig,
        draft: Option<Vec<String>>,
    ) -> Result<StoryId, SimError>;
    fn fetch(&mut self, worker: &WorkerId) -> Result<Option<(TaskSpec, Assignment)>, SimError>;
    fn submit(
        &mut self,
        worker: &WorkerId,
        assignment: &AssignmentId,
        payload: SubmissionPayload,
    ) -> Result<Accepted, SimError>;
    fn status(&mut self, story: &StoryId) -> Result<StoryStatus, SimError>;
    fn events(&mut self, story: &StoryId) -> Result<Vec<Event>, SimError>;
    /// Moves simulated time forward.
    fn tick(&mut self, ms: u64);
}

/// A [`TaskService`] called directly, on a [`ManualClock`].
pub struct InProcessPort {
    pub service: TaskService,
    pub clock: Arc<ManualClock>,
}

impl InProcessPort {
    /// A fresh in-memory service seeded with `seed`.
    pub fn new(seed: u64) -> Self {
        let clock = Arc::new(ManualClock::new(SIM_EPOCH));
        InProcessPort {
            service: TaskService::in_memory(clock.clone(), seed),
            clock,
        }
    }
}

impl TaskPort for InProcessPort {
    fn create_story(
        &mut self,
        prompt: &str,
        config: StoryConfig,
        draft: Option<Vec<String>>,
    ) -> Result<StoryId, SimError> {
        Ok(match draft {
            Some(d) => self.service.create_seeded_story(prompt, config, d)?,
            None => self.service.create_story(prompt, config)?,
        })
    }

    fn fetch(&mut self, worker: &WorkerId) -> Result<Option<(TaskSpec, Assignment)>, SimError> {
        Ok(self.service.fetch_task(worker)?)
    }

    fn submit(
        &mut self,
        worker: &WorkerId,
        assignment: &AssignmentId,
        payload: SubmissionPayload,
    ) -> Result<Accepted, SimError> {
        self.service
            .submit_result(worker, assignment, payload)
            .map_err(|r| SimError::rejected(worker, &r))
    }

    fn status(&mut self, story: &StoryId) -> Result<StoryStatus, SimError> {
        Ok(self.service.story_status(story)?)
    }

    fn events(&mut self, story: &StoryId) -> Result<Vec<Event>, SimError> {
        Ok(self.service.events(story)?)
    }

    fn tick(&mut self, ms: u64) {
        self.clock.advance_ms(ms);
    }
}

pub fn worker_name(i: usize) -> WorkerId {
    WorkerId(format!("w{i:03}"))
}

/// Drives one story to completion through `port` and returns its id and
/// transcript. The port should be fresh; its condition RNG must be seeded
/// from `spec.seed` for the run to be reproducible.
pub fn run_on(port: &mut dyn TaskPort, spec: &RunSpec) -> Result<(StoryId, Transcript), SimError> {
    let draft = match spec.problem {
        Some(kind) => {
            if spec.config.revision_rounds != 1 {
                return Err(SimError::BenchmarkRounds(spec.config.revision_rounds));
            }
            let story = synthetic_story(spec.config.scene_count, spec.seed);
            Some(inject_problem(&story, kind, spec.seed)?.0)
        }
        None => None,
    };
    let story = port.create_story(&spec.prompt, spec.config.clone(), draft)?;
    let workers: Vec<WorkerId> = (0..spec.workers).map(worker_name).collect();
    let mut crowd = Crowd::new(spec.agents.clone(), spec.seed);
    let mut sweep = 0usize;
    loop {
        let status = port.status(&story)?;
        if status.phase == Phase::Complete {
            break;
        }
        let mut progressed = false;
        for k in 0..workers.len() {
            let index = (sweep + k) % workers.len();
            let worker = &workers[index];
            port.tick(TICK_MS);
            let Some((task, assignment)) = port.fetch(worker)? else {
                continue;
            };
            let payload = crowd.act(index, &task);
            port.submit(worker, &assignment.assignment_id, payload)?;
            progressed = true;
        }
        if !progressed {
            return Err(SimError::Starvation {
                phase: status.phase,
            });
        }
        sweep += 1;
    }
    let transcript = Transcript::from_events(&port.events(&story)?)?;
    Ok((story, transcript))
}

/// Runs `spec` on a fresh in-process service.
pub fn run_scenario(spec: &RunSpec) -> Result<Transcript, SimError> {
    let mut port = InProcessPort::new(spec.seed);
    Ok(run_on(&mut port, spec)?.1)
}

/// Like [`run_scenario`] but also hands back the service for inspection.
pub fn run_scenario_with_port(
    spec: &RunSpec,
) -> Result<(InProcessPort, StoryId, Transcript), SimError> {
    let mut port = InProcessPort::new(spec.seed);
    let (story, transcript) = run_on(&mut port, spec)?;
    Ok((port, story, transcript))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub scenario: String,
    pub problem: String,
    pub condition: Condition,
    pub runs: usize,
    pub goals_mean: f64,
    pub vote_rate: Option<f64>,
    pub unlock_rate: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct BatchResult {
    pub runs: Vec<(String, Transcript)>,
    pub summary: Vec<SummaryRow>,
}

/// Runs every run of `scenario` and summarizes per problem kind.
pub fn run_batch(scenario: &Scenario) -> Result<BatchResult, SimError> {
    scenario
        .validate()
        .map_err(|e| SimError::Transport(e.to_string()))?;
    let mut runs = Vec::new();
    for spec in scenario.run_specs() {
        let t = run_scenario(&spec)?;
        runs.push((spec.label, t));
    }
    let summary = summarize(scenario, runs.iter().map(|(_, t)| t))?;
    Ok(BatchResult { runs, summary })
}

/// One summary row per problem kind of `scenario` (a single `none` row for
/// plain scenarios) over the given transcripts.
pub fn summarize<'a>(
    scenario: &Scenario,
    transcripts: impl IntoIterator<Item = &'a Transcript>,
) -> Result<Vec<SummaryRow>, SimError> {
    let transcripts: Vec<&Transcript> = transcripts.into_iter().collect();
    let groups: Vec<Option<BenchmarkProblemKind>> = if scenario.problems.is_empty() {
        vec![None]
    } else {
        scenario.problems.iter().copied().map(Some).collect()
    };
    let mut summary = Vec::new();
    for problem in groups {
        let group: Vec<Transcript> = transcripts
            .iter()
            .filter(|t| t.problem == problem)
            .map(|t| (*t).clone())
            .collect();
        let rates: Option<DetectionRates> = match problem {
            Some(_) => Some(measure_detection(&group)?),
            None => None,
        };
        summary.push(SummaryRow {
            scenario: scenario.name.clone(),
            problem: problem.map_or_else(|| "none".to_owned(), |k| k.name().to_owned()),
            condition: scenario.config.condition,
            runs: group.len(),
            goals_mean: group.iter().map(|t| t.goals.len() as f64).sum::<f64>()
                / group.len().max(1) as f64,
            vote_rate: rates.map(|r| r.vote_rate),
            unlock_rate: rates.map(|r| r.unlock_rate),
        });
    }
    Ok(summary)
}

/// Renders summary rows as CSV with a header line.
pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.serialize(row).expect("summary rows serialize");
    }
    String::from_utf8(w.into_inner().expect("in-memory writer")).expect("csv is utf-8")
}
