//! The live task service: publication, pull-based assignment under worker
//! constraints, submission validation, quorum collection and timeouts.
//!
//! All state sits behind one mutex, so a fetch and its slot reservation are
//! atomic and transitions of one story are serialized. Every change is
//! written to the [`EventStore`] first and then folded into memory with the
//! same [`StoryRuntime::apply`] used by replay.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::{SystemTime, UNIX_EPOCH};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use thiserror::Error;

use crate::domain::{
    AssignmentId, Candidate, Condition, Critique, DomainError, Goal, ItemId, Phase,
    SceneSelectionBallot, StoryConfig, StoryId, TaskId, Timestamp, Vote, WorkerId, WorkerProfile,
};
use crate::engine::{self, EngineError, PayloadKind, Submission, TaskKind, TaskSpec};
use crate::eventlog::{
    self, Event, EventPayload, EventStore, ExportError, LogError, ReplayError, StoryDocument,
    StoryRuntime,
};

pub trait Clock: Send + Sync {
    fn now(&self) -> Timestamp;
}

/// Wall-clock time.
#[derive(Debug, Default, Clone, Copy)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> Timestamp {
        let ms = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_millis() as u64)
            .unwrap_or(0);
        Timestamp(ms)
    }
}

/// A clock that only moves when told to. Used by the simulator and tests.
#[derive(Debug, Default)]
pub struct ManualClock {
    now: AtomicU64,
}

impl ManualClock {
    pub fn new(start: Timestamp) -> Self {
        ManualClock {
            now: AtomicU64::new(start.0),
        }
    }

    pub fn advance_ms(&self, ms: u64) -> Timestamp {
        Timestamp(self.now.fetch_add(ms, Ordering::SeqCst) + ms)
    }

    pub fn set(&self, t: Timestamp) {
        self.now.store(t.0, Ordering::SeqCst);
    }
}

impl Clock for ManualClock {
    fn now(&self) -> Timestamp {
        Timestamp(self.now.load(Ordering::SeqCst))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AssignmentStatus {
    Open,
    Submitted,
    Expired,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assignment {
    pub assignment_id: AssignmentId,
    pub task_id: TaskId,
    pub worker_id: WorkerId,
    pub issued_at: Timestamp,
    pub deadline: Timestamp,
    pub status: AssignmentStatus,
}

/// What a worker sends back for a task.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SubmissionPayload {
    Candidate {
        text: String,
    },
    Critique {
        like: String,
        wish: String,
        what_if: String,
    },
    Vote {
        choice: ItemId,
    },
    SceneSelection {
        selected: BTreeSet<usize>,
        #[serde(default, with = "crate::domain::scene_keyed")]
        suggestions: BTreeMap<usize, String>,
    },
}

impl SubmissionPayload {
    pub fn kind(&self) -> PayloadKind {
        match self {
            SubmissionPayload::Candidate { .. } => PayloadKind::Candidate,
            SubmissionPayload::Critique { .. } => PayloadKind::Critique,
            SubmissionPayload::Vote { .. } => PayloadKind::Vote,
            SubmissionPayload::SceneSelection { .. } => PayloadKind::SceneSelection,
        }
    }
}

/// Why a submission was refused. [`Rejection::code`] is the wire reason.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum Rejection {
    #[error("unknown assignment")]
    UnknownAssignment,
    #[error("assignment belongs to another worker")]
    NotAssignee,
    #[error("worker belongs to the other study condition")]
    ConditionMismatch,
    #[error("worker authored an item in this election")]
    SelfVote,
    #[error("worker already submitted to this task")]
    DuplicateSubmission,
    #[error("assignment expired")]
    ExpiredAssignment,
    #[error("task expects a {expected} payload, got {got}")]
    KindMismatch {
        expected: PayloadKind,
        got: PayloadKind,
    },
    #[error("invalid `{field}`: {reason}")]
    ValidationFailure { field: String, reason: String },
    #[error("storage failure: {0}")]
    StorageFailure(String),
    #[error("internal error: {0}")]
    Internal(String),
}

impl Rejection {
    pub fn code(&self) -> &'static str {
        match self {
            Rejection::UnknownAssignment => "unknown-assignment",
            Rejection::NotAssignee => "not-assignee",
            Rejection::ConditionMismatch => "condition-mismatch",
            Rejection::SelfVote => "self-vote",
            Rejection::DuplicateSubmission => "duplicate-submission",
            Rejection::ExpiredAssignment => "expired-assignment",
            Rejection::KindMismatch { .. } => "kind-mismatch",
            Rejection::ValidationFailure { .. } => "validation-failure",
            Rejection::StorageFailure(_) => "storage-failure",
            Rejection::Internal(_) => "internal-error",
        }
    }

    pub fn field(&self) -> Option<&str> {
        match self {
            Rejection::ValidationFailure { field, .. } => Some(field),
            _ => None,
        }
    }
}

impl From<DomainError> for Rejection {
    fn from(e: DomainError) -> Self {
        match e {
            DomainError::Validation { field, reason } => {
                Rejection::ValidationFailure { field, reason }
            }
            other => Rejection::ValidationFailure {
                field: "payload".into(),
                reason: other.to_string(),
            },
        }
    }
}

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("unknown story `{0}`")]
    UnknownStory(StoryId),
    #[error(transparent)]
    InvalidStory(#[from] DomainError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Log(#[from] LogError),
    #[error("replay of story `{story}` failed: {error}")]
    Replay { story: StoryId, error: ReplayError },
    #[error(transparent)]
    Export(#[from] ExportError),
}

impl ServiceError {
    pub fn code(&self) -> &'static str {
        match self {
            ServiceError::UnknownStory(_) => "unknown-story",
            ServiceError::InvalidStory(DomainError::InvalidConfig { .. }) => "invalid-config",
            ServiceError::InvalidStory(_) => "validation-failure",
            ServiceError::Engine(_) => "engine-error",
            ServiceError::Log(_) => "storage-failure",
            ServiceError::Replay { .. } => "corrupt-log",
            ServiceError::Export(_) => "unknown-version",
        }
    }

    /// The offending field, for config and validation errors.
    pub fn field(&self) -> Option<&str> {
        match self {
            ServiceError::InvalidStory(DomainError::InvalidConfig { field, .. }) => Some(field),
            ServiceError::InvalidStory(DomainError::Validation { field, .. }) => Some(field),
            ServiceError::InvalidStory(DomainError::EmptyPrompt) => Some("prompt"),
            ServiceError::InvalidStory(DomainError::IncompleteDraft(_)) => Some("draft"),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Accepted {
    pub story_id: StoryId,
    pub task_id: TaskId,
    /// The submission closed the quorum and the story moved on.
    pub transitioned: bool,
    pub phase: Phase,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpenTaskStatus {
    pub task: TaskSpec,
    pub submitted: usize,
    pub in_flight: usize,
}

/// Read-only snapshot of a story for requesters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoryStatus {
    pub story_id: StoryId,
    pub condition: Condition,
    pub phase: Phase,
    pub round: u32,
    pub open_tasks: Vec<OpenTaskStatus>,
    pub versions: Vec<u32>,
    pub goals: Vec<Goal>,
}

pub struct TaskService {
    inner: Mutex<Inner>,
    clock: Arc<dyn Clock>,
}

struct Inner {
    store: Box<dyn EventStore>,
    stories: BTreeMap<StoryId, StoryRuntime>,
    workers: BTreeMap<WorkerId, WorkerProfile>,
    rng: ChaCha8Rng,
    next_story: u64,
}

impl TaskService {
    /// Opens a service over `store`, replaying every story already in it.
    ///
    /// `seed` drives the random condition assignment of new workers.
    pub fn open(
        store: Box<dyn EventStore>,
        clock: Arc<dyn Clock>,
        seed: u64,
    ) -> Result<TaskService, ServiceError> {
        let mut inner = Inner {
            store,
            stories: BTreeMap::new(),
            workers: BTreeMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            next_story: 1,
        };
        for story in inner.store.stories()? {
            let events = inner.store.load(&story)?;
            let runtime = eventlog::replay(&events).map_err(|error| ServiceError::Replay {
                story: story.clone(),
                error,
            })?;
            for event in &events {
                if let EventPayload::AssignmentIssued {
                    assignment,
                    condition,
                } = &event.payload
                {
                    inner
                        .workers
                        .entry(assignment.worker_id.clone())
                        .or_insert_with(|| {
                            WorkerProfile::new(assignment.worker_id.clone(), *condition)
                        });
                }
                inner.note_submission(event);
            }
            inner.stories.insert(story, runtime);
            inner.next_story += 1;
        }
        let service = TaskService {
            inner: Mutex::new(inner),
            clock,
        };
        // a crash between the quorum-closing submission and its transition
        // leaves a full task behind; finish those now
        let pending: Vec<StoryId> = {
            let inner = service.lock();
            inner
                .stories
                .iter()
                .filter(|(_, rt)| {
                    rt.open
                        .as_ref()
                        .is_some_and(|o| o.submissions.len() == o.spec.quorum)
                })
                .map(|(id, _)| id.clone())
                .collect()
        };
        for story in pending {
            let now = service.clock.now();
            let mut inner = service.lock();
            let events = inner.transition_events(&story, None, now)?;
            inner.commit(events)?;
        }
        Ok(service)
    }

    /// A service over an in-memory store.
    pub fn in_memory(clock: Arc<dyn Clock>, seed: u64) -> TaskService {
        TaskService::open(Box::new(eventlog::MemoryStore::new()), clock, seed)
            .expect("an empty store always opens")
    }

    fn lock(&self) -> MutexGuard<'_, Inner> {
        self.inner.lock().unwrap_or_else(|p| p.into_inner())
    }

    pub fn now(&self) -> Timestamp {
        self.clock.now()
    }

    pub fn create_story(&self, prompt: &str, config: StoryConfig) -> Result<StoryId, ServiceError> {
        self.create(prompt, config, None)
    }

    /// Creates a story whose first draft is supplied; it starts at round 0
    /// of revision with the draft as version 0.
    pub fn create_seeded_story(
        &self,
        prompt: &str,
        config: StoryConfig,
        draft: Vec<String>,
    ) -> Result<StoryId, ServiceError> {
        self.create(prompt, config, Some(draft))
    }

    fn create(
        &self,
        prompt: &str,
        config: StoryConfig,
        draft: Option<Vec<String>>,
    ) -> Result<StoryId, ServiceError> {
        let now = self.clock.now();
        let mut inner = self.lock();
        let story_id = StoryId(format!("story-{:04}", inner.next_story));
        let (state, tasks) = match &draft {
            None => {
                let fresh = crate::domain::new_story(story_id.clone(), prompt, config.clone())?;
                engine::initial_tasks(&fresh)?
            }
            Some(draft) => engine::seeded_story(story_id.clone(), prompt, config.clone(), draft)?,
        };
        let mut events = vec![Event {
            seq: 0,
            story_id: story_id.clone(),
            at: now,
            payload: EventPayload::StoryCreated {
                prompt: prompt.to_owned(),
                config,
                draft,
            },
        }];
        for task in tasks {
            events.push(Event {
                seq: events.len() as u64,
                story_id: story_id.clone(),
                at: now,
                payload: EventPayload::TaskPublished { task },
            });
        }
        debug_assert!(state.outstanding.is_some() || state.phase == Phase::Complete);
        inner.store.append(&events)?;
        let mut runtime =
            StoryRuntime::from_created(&events[0]).map_err(|error| ServiceError::Replay {
                story: story_id.clone(),
                error,
            })?;
        for event in &events[1..] {
            runtime.apply(event).map_err(|error| ServiceError::Replay {
                story: story_id.clone(),
                error,
            })?;
        }
        inner.stories.insert(story_id.clone(), runtime);
        inner.next_story += 1;
        Ok(story_id)
    }

    /// Hands `worker` an eligible open task, reserving a quorum slot.
    ///
    /// Unknown workers are registered and given a random condition. A
    /// worker who already holds an open assignment gets it back.
    pub fn fetch_task(
        &self,
        worker: &WorkerId,
    ) -> Result<Option<(TaskSpec, Assignment)>, ServiceError> {
        let now = self.clock.now();
        let mut inner = self.lock();
        inner.expire(now)?;
        let condition = inner.register(worker);

        for runtime in inner.stories.values() {
            if let Some(open) = &runtime.open {
                if let Some(a) = open
                    .assignments
                    .iter()
                    .find(|a| a.worker_id == *worker && a.status == AssignmentStatus::Open)
                {
                    return Ok(Some((open.spec.clone(), a.clone())));
                }
            }
        }

        let eligible = inner.stories.values().find_map(|rt| {
            let open = rt.open.as_ref()?;
            let ok = rt.state.condition() == condition
                && open.open_slots() > 0
                && !open.has_submitted(worker)
                && !engine::ballot_authors(&rt.state).contains(worker);
            ok.then(|| (rt.state.story_id.clone(), rt.next_seq, open.spec.clone()))
        });
        let Some((story_id, seq, spec)) = eligible else {
            return Ok(None);
        };
        let timeout = inner.stories[&story_id].state.config.task_timeout_secs;
        let assignment = Assignment {
            assignment_id: AssignmentId(format!("{story_id}.a{seq:06}")),
            task_id: spec.task_id.clone(),
            worker_id: worker.clone(),
            issued_at: now,
            deadline: now.plus_secs(timeout),
            status: AssignmentStatus::Open,
        };
        inner.commit(vec![Event {
            seq,
            story_id,
            at: now,
            payload: EventPayload::AssignmentIssued {
                assignment: assignment.clone(),
                condition,
            },
        }])?;
        Ok(Some((spec, assignment)))
    }

    /// Validates and records a submission; the quorum-closing submission
    /// also advances the story, in the same durable write.
    pub fn submit_result(
        &self,
        worker: &WorkerId,
        assignment_id: &AssignmentId,
        payload: SubmissionPayload,
    ) -> Result<Accepted, Rejection> {
        let now = self.clock.now();
        let mut inner = self.lock();

        let story_id = assignment_id
            .as_str()
            .rsplit_once(".a")
            .map(|(story, _)| StoryId::new(story))
            .ok_or(Rejection::UnknownAssignment)?;
        let runtime = inner
            .stories
            .get(&story_id)
            .ok_or(Rejection::UnknownAssignment)?;
        let assignment = runtime
            .assignments
            .get(assignment_id)
            .cloned()
            .ok_or(Rejection::UnknownAssignment)?;
        let profile = inner.workers.get(worker).ok_or(Rejection::NotAssignee)?;
        if profile.condition != runtime.state.condition() {
            return Err(Rejection::ConditionMismatch);
        }
        let open = match &runtime.open {
            Some(open) if open.spec.task_id == assignment.task_id => open,
            _ => {
                let submitted = runtime
                    .submitters
                    .get(&assignment.task_id)
                    .is_some_and(|ws| ws.contains(worker));
                return Err(if submitted {
                    Rejection::DuplicateSubmission
                } else {
                    Rejection::ExpiredAssignment
                });
            }
        };
        if engine::ballot_authors(&runtime.state).contains(worker) {
            return Err(Rejection::SelfVote);
        }
        if open.has_submitted(worker) {
            return Err(Rejection::DuplicateSubmission);
        }
        if assignment.worker_id != *worker {
            return Err(Rejection::NotAssignee);
        }
        match assignment.status {
            AssignmentStatus::Submitted => return Err(Rejection::DuplicateSubmission),
            AssignmentStatus::Expired => return Err(Rejection::ExpiredAssignment),
            AssignmentStatus::Open if now > assignment.deadline => {
                let seq = runtime.next_seq;
                inner
                    .commit(vec![Event {
                        seq,
                        story_id,
                        at: now,
                        payload: EventPayload::AssignmentExpired {
                            assignment_id: assignment_id.clone(),
                        },
                    }])
                    .map_err(|e| Rejection::StorageFailure(e.to_string()))?;
                return Err(Rejection::ExpiredAssignment);
            }
            AssignmentStatus::Open => {}
        }
        let spec = &open.spec;
        let expected = spec.kind.payload_kind();
        if payload.kind() != expected {
            return Err(Rejection::KindMismatch {
                expected,
                got: payload.kind(),
            });
        }

        let seq = runtime.next_seq;
        let item_id = ItemId(format!("{story_id}.e{seq:06}"));
        let submission = build_submission(&runtime.state, spec, worker, item_id, now, payload)?;
        let task_id = spec.task_id.clone();
        let closes = open.submissions.len() + 1 == spec.quorum;

        let mut events = vec![Event {
            seq,
            story_id: story_id.clone(),
            at: now,
            payload: EventPayload::SubmissionRecorded {
                task_id: task_id.clone(),
                assignment_id: assignment_id.clone(),
                submission: submission.clone(),
            },
        }];
        if closes {
            let more = inner
                .transition_events(&story_id, Some((seq, submission)), now)
                .map_err(|e| Rejection::Internal(e.to_string()))?;
            events.extend(more);
        }
        inner.commit(events).map_err(|e| match e {
            ServiceError::Log(e) => Rejection::StorageFailure(e.to_string()),
            other => Rejection::Internal(other.to_string()),
        })?;
        let phase = inner.stories[&story_id].state.phase;
        Ok(Accepted {
            story_id,
            task_id,
            transitioned: closes,
            phase,
        })
    }

    /// Expires every open assignment whose deadline has passed, releasing
    /// its quorum slot.
    pub fn expire_stale(&self, now: Timestamp) -> Result<usize, ServiceError> {
        self.lock().expire(now)
    }

    pub fn story_status(&self, story: &StoryId) -> Result<StoryStatus, ServiceError> {
        let inner = self.lock();
        let rt = inner
            .stories
            .get(story)
            .ok_or_else(|| ServiceError::UnknownStory(story.clone()))?;
        Ok(StoryStatus::from(rt))
    }

    pub fn list_stories(&self) -> Vec<StoryStatus> {
        self.lock()
            .stories
            .values()
            .map(StoryStatus::from)
            .collect()
    }

    pub fn story_runtime(&self, story: &StoryId) -> Result<StoryRuntime, ServiceError> {
        self.lock()
            .stories
            .get(story)
            .cloned()
            .ok_or_else(|| ServiceError::UnknownStory(story.clone()))
    }

    pub fn events(&self, story: &StoryId) -> Result<Vec<Event>, ServiceError> {
        let inner = self.lock();
        if !inner.stories.contains_key(story) {
            return Err(ServiceError::UnknownStory(story.clone()));
        }
        Ok(inner.store.load(story)?)
    }

    pub fn export_story(
        &self,
        story: &StoryId,
        version: Option<u32>,
    ) -> Result<StoryDocument, ServiceError> {
        let inner = self.lock();
        let rt = inner
            .stories
            .get(story)
            .ok_or_else(|| ServiceError::UnknownStory(story.clone()))?;
        Ok(eventlog::export_story(&rt.state, version)?)
    }

    pub fn worker(&self, worker: &WorkerId) -> Option<WorkerProfile> {
        self.lock().workers.get(worker).cloned()
    }

    pub fn is_complete(&self, story: &StoryId) -> Result<bool, ServiceError> {
        Ok(self.story_status(story)?.phase == Phase::Complete)
    }
}

impl From<&StoryRuntime> for StoryStatus {
    fn from(rt: &StoryRuntime) -> StoryStatus {
        StoryStatus {
            story_id: rt.state.story_id.clone(),
            condition: rt.state.condition(),
            phase: rt.state.phase,
            round: rt.state.round,
            open_tasks: rt
                .open
                .iter()
                .map(|o| OpenTaskStatus {
                    task: o.spec.clone(),
                    submitted: o.submissions.len(),
                    in_flight: o.in_flight(),
                })
                .collect(),
            versions: rt.state.versions.iter().map(|v| v.version_number).collect(),
            goals: rt.state.goal_history.clone(),
        }
    }
}

fn build_submission(
    state: &crate::domain::StoryState,
    spec: &TaskSpec,
    worker: &WorkerId,
    id: ItemId,
    now: Timestamp,
    payload: SubmissionPayload,
) -> Result<Submission, Rejection> {
    Ok(match payload {
        SubmissionPayload::Candidate { text } => {
            let candidate = Candidate {
                candidate_id: id,
                scene_index: spec.scene_index.unwrap_or(0),
                text,
                author: worker.clone(),
                submitted_at: now,
            };
            candidate.validate()?;
            Submission::Candidate(candidate)
        }
        SubmissionPayload::Critique {
            like,
            wish,
            what_if,
        } => {
            let critique = Critique {
                id,
                author: worker.clone(),
                like,
                wish,
                what_if,
                submitted_at: now,
            };
            critique.validate()?;
            Submission::Critique(critique)
        }
        SubmissionPayload::Vote { choice } => {
            if !spec.context.options.iter().any(|o| o.id == choice) {
                return Err(Rejection::ValidationFailure {
                    field: "choice".into(),
                    reason: format!("`{choice}` is not an option of this task"),
                });
            }
            Submission::Vote(Vote {
                voter: worker.clone(),
                choice,
                submitted_at: now,
            })
        }
        SubmissionPayload::SceneSelection {
            selected,
            suggestions,
        } => {
            let ballot = SceneSelectionBallot {
                id,
                worker: worker.clone(),
                selected,
                suggestions,
                submitted_at: now,
            };
            let condition = match spec.kind {
                TaskKind::SelectScenesControl => Condition::Control,
                _ => Condition::MechanicalNovel,
            };
            ballot.validate(state.config.scene_count, condition)?;
            Submission::SceneSelection(ballot)
        }
    })
}

impl Inner {
    fn register(&mut self, worker: &WorkerId) -> Condition {
        if let Some(p) = self.workers.get(worker) {
            return p.condition;
        }
        let condition = if self.rng.gen_bool(0.5) {
            Condition::MechanicalNovel
        } else {
            Condition::Control
        };
        self.workers.insert(
            worker.clone(),
            WorkerProfile::new(worker.clone(), condition),
        );
        condition
    }

    fn note_submission(&mut self, event: &Event) {
        if let EventPayload::SubmissionRecorded {
            task_id,
            submission,
            ..
        } = &event.payload
        {
            if let Some(profile) = self.workers.get_mut(submission.worker()) {
                profile.completed_task_instances.insert(task_id.clone());
                if let Some(item) = submission.item_id() {
                    profile.authored_items.insert(item.clone());
                }
            }
        }
    }

    /// Durably appends `events` (one story) and folds them into memory.
    fn commit(&mut self, events: Vec<Event>) -> Result<(), ServiceError> {
        let Some(first) = events.first() else {
            return Ok(());
        };
        let story = first.story_id.clone();
        self.store.append(&events)?;
        let runtime = self
            .stories
            .get_mut(&story)
            .ok_or_else(|| ServiceError::UnknownStory(story.clone()))?;
        for event in &events {
            runtime.apply(event).map_err(|error| ServiceError::Replay {
                story: story.clone(),
                error,
            })?;
        }
        for event in &events {
            self.note_submission(event);
        }
        Ok(())
    }

    /// Events that close the open task of `story`. `extra` is a submission
    /// not yet folded into memory, with its seq.
    fn transition_events(
        &self,
        story: &StoryId,
        extra: Option<(u64, Submission)>,
        now: Timestamp,
    ) -> Result<Vec<Event>, ServiceError> {
        let rt = &self.stories[story];
        let open = rt.open.as_ref().expect("caller checked the open task");
        let mut batch = open.batch();
        let mut seq = rt.next_seq;
        if let Some((s, submission)) = extra {
            batch.submissions.push(submission);
            batch.closing_seq = s;
            seq = s + 1;
        }
        let transition = engine::advance(&rt.state, &batch)?;
        let mut payloads = vec![EventPayload::PhaseTransitioned {
            task_id: batch.task_id.clone(),
            from: rt.state.phase,
            to: transition.state.phase,
            winner: transition.winner.clone(),
        }];
        if let Some(goal) = transition.goal {
            payloads.push(EventPayload::GoalElected { goal });
        }
        if let Some(scenes) = transition.unlocked {
            payloads.push(EventPayload::ScenesUnlocked {
                round: transition.state.round,
                scenes,
            });
        }
        for version in transition.versions {
            payloads.push(EventPayload::VersionSnapshotted { version });
        }
        if transition.completed {
            payloads.push(EventPayload::StoryCompleted {
                round: transition.state.round,
            });
        }
        for task in transition.tasks {
            payloads.push(EventPayload::TaskPublished { task });
        }
        Ok(payloads
            .into_iter()
            .enumerate()
            .map(|(i, payload)| Event {
                seq: seq + i as u64,
                story_id: story.clone(),
                at: now,
                payload,
            })
            .collect())
    }

    fn expire(&mut self, now: Timestamp) -> Result<usize, ServiceError> {
        let mut batches = Vec::new();
        for (story, rt) in &self.stories {
            let Some(open) = &rt.open else { continue };
            let stale: Vec<AssignmentId> = open
                .assignments
                .iter()
                .filter(|a| a.status == AssignmentStatus::Open && now > a.deadline)
                .map(|a| a.assignment_id.clone())
                .collect();
            if stale.is_empty() {
                continue;
            }
            let events: Vec<Event> = stale
                .into_iter()
                .enumerate()
                .map(|(i, assignment_id)| Event {
                    seq: rt.next_seq + i as u64,
                    story_id: story.clone(),
                    at: now,
                    payload: EventPayload::AssignmentExpired { assignment_id },
                })
                .collect();
            batches.push(events);
        }
        let mut count = 0;
        for events in batches {
            count += events.len();
            self.commit(events)?;
        }
        Ok(count)
    }
}
