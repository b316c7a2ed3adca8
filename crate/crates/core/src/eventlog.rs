//! Append-only per-story event log, replay and export.
//!
//! # File format
//!
//! Each story is stored as `<story_id>.events.ndjson`: one JSON-encoded
//! [`Event`] per line, UTF-8, `\n` terminated, in `seq` order starting at 0.
//! Field order is fixed (`seq`, `story_id`, `at`, `payload`) and the payload
//! is tagged by `"type"`. `stories.idx` lists story ids, one per line, in
//! creation order.
//!
//! The log is the only durable record. [`replay`] folds it back into a
//! [`StoryRuntime`] by re-running the engine on recorded submissions and
//! checking every derived event against the engine's result.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{
    AssignmentId, Condition, Goal, ItemId, Phase, StoryConfig, StoryId, StoryState, StoryVersion,
    TaskId, Timestamp, WorkerId,
};
use crate::engine::{self, Submission, TaskResultBatch, TaskSpec};
use crate::service::{Assignment, AssignmentStatus};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    pub seq: u64,
    pub story_id: StoryId,
    pub at: Timestamp,
    pub payload: EventPayload,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum EventPayload {
    StoryCreated {
        prompt: String,
        config: StoryConfig,
        /// Pre-written first draft, for stories that skip draft authoring.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        draft: Option<Vec<String>>,
    },
    TaskPublished {
        task: TaskSpec,
    },
    AssignmentIssued {
        assignment: Assignment,
        condition: Condition,
    },
    SubmissionRecorded {
        task_id: TaskId,
        assignment_id: AssignmentId,
        submission: Submission,
    },
    AssignmentExpired {
        assignment_id: AssignmentId,
    },
    PhaseTransitioned {
        task_id: TaskId,
        from: Phase,
        to: Phase,
        winner: Option<ItemId>,
    },
    VersionSnapshotted {
        version: StoryVersion,
    },
    GoalElected {
        goal: Goal,
    },
    ScenesUnlocked {
        round: u32,
        scenes: Vec<usize>,
    },
    StoryCompleted {
        round: u32,
    },
}

impl EventPayload {
    pub fn name(&self) -> &'static str {
        match self {
            EventPayload::StoryCreated { .. } => "story_created",
            EventPayload::TaskPublished { .. } => "task_published",
            EventPayload::AssignmentIssued { .. } => "assignment_issued",
            EventPayload::SubmissionRecorded { .. } => "submission_recorded",
            EventPayload::AssignmentExpired { .. } => "assignment_expired",
            EventPayload::PhaseTransitioned { .. } => "phase_transitioned",
            EventPayload::VersionSnapshotted { .. } => "version_snapshotted",
            EventPayload::GoalElected { .. } => "goal_elected",
            EventPayload::ScenesUnlocked { .. } => "scenes_unlocked",
            EventPayload::StoryCompleted { .. } => "story_completed",
        }
    }
}

impl Event {
    /// The canonical line encoding, without the trailing newline.
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("events always serialize")
    }
}

#[derive(Debug, Error)]
pub enum LogError {
    #[error("storage failure: {0}")]
    Storage(#[from] io::Error),
    #[error("unknown story `{0}`")]
    UnknownStory(StoryId),
    #[error("story `{0}` already exists")]
    DuplicateStory(StoryId),
    #[error("append out of order: expected seq {expected}, got {got}")]
    SeqMismatch { expected: u64, got: u64 },
    #[error("corrupt event at seq {seq}: {reason}")]
    Corrupt { seq: u64, reason: String },
}

/// Durable per-story event storage.
pub trait EventStore: Send {
    /// Appends `events` (all for one story, consecutive seqs) and returns the
    /// last seq. The events are durable when this returns.
    fn append(&mut self, events: &[Event]) -> Result<u64, LogError>;
    fn load(&self, story: &StoryId) -> Result<Vec<Event>, LogError>;
    /// Story ids in creation order.
    fn stories(&self) -> Result<Vec<StoryId>, LogError>;
}

/// Checks that `events` may be appended after `len` existing events.
fn check_append(events: &[Event], existing: Option<u64>) -> Result<(), LogError> {
    let Some(first) = events.first() else {
        return Ok(());
    };
    match existing {
        None => {
            if !matches!(first.payload, EventPayload::StoryCreated { .. }) {
                return Err(LogError::UnknownStory(first.story_id.clone()));
            }
        }
        Some(_) => {
            if matches!(first.payload, EventPayload::StoryCreated { .. }) {
                return Err(LogError::DuplicateStory(first.story_id.clone()));
            }
        }
    }
    for (expected, event) in (existing.unwrap_or(0)..).zip(events) {
        if event.story_id != first.story_id {
            return Err(LogError::UnknownStory(event.story_id.clone()));
        }
        if event.seq != expected {
            return Err(LogError::SeqMismatch {
                expected,
                got: event.seq,
            });
        }
    }
    Ok(())
}

#[derive(Debug, Default, Clone)]
pub struct MemoryStore {
    logs: BTreeMap<StoryId, Vec<Event>>,
    order: Vec<StoryId>,
}

impl MemoryStore {
    pub fn new() -> Self {
        Self::default()
    }
}

impl EventStore for MemoryStore {
    fn append(&mut self, events: &[Event]) -> Result<u64, LogError> {
        let Some(first) = events.first() else {
            return Err(LogError::Corrupt {
                seq: 0,
                reason: "empty append".into(),
            });
        };
        let existing = self.logs.get(&first.story_id).map(|l| l.len() as u64);
        check_append(events, existing)?;
        if existing.is_none() {
            self.order.push(first.story_id.clone());
        }
        let log = self.logs.entry(first.story_id.clone()).or_default();
        log.extend_from_slice(events);
        Ok(log.len() as u64 - 1)
    }

    fn load(&self, story: &StoryId) -> Result<Vec<Event>, LogError> {
        self.logs
            .get(story)
            .cloned()
            .ok_or_else(|| LogError::UnknownStory(story.clone()))
    }

    fn stories(&self) -> Result<Vec<StoryId>, LogError> {
        Ok(self.order.clone())
    }
}

/// One NDJSON file per story under a directory, plus `stories.idx`.
#[derive(Debug)]
pub struct FileStore {
    dir: PathBuf,
    lens: BTreeMap<StoryId, u64>,
    order: Vec<StoryId>,
}

const INDEX_FILE: &str = "stories.idx";

impl FileStore {
    /// Opens (creating if needed) a store rooted at `dir`.
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, LogError> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        let mut store = FileStore {
            dir,
            lens: BTreeMap::new(),
            order: Vec::new(),
        };
        let index = store.dir.join(INDEX_FILE);
        if index.exists() {
            for line in fs::read_to_string(&index)?.lines() {
                let id = StoryId::new(line.trim());
                if id.as_str().is_empty() || store.lens.contains_key(&id) {
                    continue;
                }
                let path = store.story_path(&id);
                // the index is written before the first event, so a crash
                // can leave an entry with no file behind
                if !path.exists() {
                    continue;
                }
                drop_torn_tail(&path)?;
                let len = read_log(&path)?.len() as u64;
                if len == 0 {
                    continue;
                }
                store.lens.insert(id.clone(), len);
                store.order.push(id);
            }
        }
        Ok(store)
    }

    pub fn story_path(&self, story: &StoryId) -> PathBuf {
        self.dir.join(format!("{story}.events.ndjson"))
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }
}

impl EventStore for FileStore {
    fn append(&mut self, events: &[Event]) -> Result<u64, LogError> {
        let Some(first) = events.first() else {
            return Err(LogError::Corrupt {
                seq: 0,
                reason: "empty append".into(),
            });
        };
        let story = first.story_id.clone();
        let existing = self.lens.get(&story).copied();
        check_append(events, existing)?;

        let mut buf = String::new();
        for event in events {
            buf.push_str(&event.to_line());
            buf.push('\n');
        }
        if existing.is_none() {
            let mut index = OpenOptions::new()
                .create(true)
                .append(true)
                .open(self.dir.join(INDEX_FILE))?;
            writeln!(index, "{story}")?;
            index.sync_data()?;
            self.order.push(story.clone());
        }
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(self.story_path(&story))?;
        if existing.is_none() {
            // leftovers from a create that never completed
            file.set_len(0)?;
        }
        file.write_all(buf.as_bytes())?;
        file.sync_data()?;
        let len = existing.unwrap_or(0) + events.len() as u64;
        self.lens.insert(story, len);
        Ok(len - 1)
    }

    fn load(&self, story: &StoryId) -> Result<Vec<Event>, LogError> {
        if !self.lens.contains_key(story) {
            return Err(LogError::UnknownStory(story.clone()));
        }
        read_log(self.story_path(story))
    }

    fn stories(&self) -> Result<Vec<StoryId>, LogError> {
        Ok(self.order.clone())
    }
}

/// Cuts an unterminated final line, the trace of an append that crashed
/// midway. Such a write was never acknowledged, so dropping it is safe.
fn drop_torn_tail(path: &Path) -> Result<bool, LogError> {
    let bytes = fs::read(path)?;
    if bytes.is_empty() || bytes.ends_with(b"\n") {
        return Ok(false);
    }
    let keep = bytes.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
    let file = OpenOptions::new().write(true).open(path)?;
    file.set_len(keep as u64)?;
    file.sync_data()?;
    Ok(true)
}

/// Reads an event file. A line that does not decode, including a torn
/// final line without its newline, is reported as corrupt at the seq it
/// should have carried.
pub fn read_log(path: impl AsRef<Path>) -> Result<Vec<Event>, LogError> {
    let file = File::open(path)?;
    let mut reader = BufReader::new(file);
    let mut events = Vec::new();
    let mut line = String::new();
    loop {
        line.clear();
        let n = reader.read_line(&mut line)?;
        if n == 0 {
            break;
        }
        let seq = events.len() as u64;
        if !line.ends_with('\n') {
            return Err(LogError::Corrupt {
                seq,
                reason: "truncated line".into(),
            });
        }
        let event: Event =
            serde_json::from_str(line.trim_end()).map_err(|e| LogError::Corrupt {
                seq,
                reason: e.to_string(),
            })?;
        events.push(event);
    }
    Ok(events)
}

/// Writes events in the canonical file format.
pub fn write_log(path: impl AsRef<Path>, events: &[Event]) -> Result<(), LogError> {
    let mut buf = String::new();
    for event in events {
        buf.push_str(&event.to_line());
        buf.push('\n');
    }
    fs::write(path, buf)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordedSubmission {
    pub seq: u64,
    pub assignment_id: AssignmentId,
    pub submission: Submission,
}

/// The outstanding task of a story with its assignment bookkeeping.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpenTask {
    pub spec: TaskSpec,
    pub assignments: Vec<Assignment>,
    pub submissions: Vec<RecordedSubmission>,
}

impl OpenTask {
    pub fn new(spec: TaskSpec) -> Self {
        OpenTask {
            spec,
            assignments: Vec::new(),
            submissions: Vec::new(),
        }
    }

    pub fn in_flight(&self) -> usize {
        self.assignments
            .iter()
            .filter(|a| a.status == AssignmentStatus::Open)
            .count()
    }

    pub fn has_submitted(&self, worker: &WorkerId) -> bool {
        self.submissions
            .iter()
            .any(|s| s.submission.worker() == worker)
    }

    pub fn open_slots(&self) -> usize {
        self.spec
            .quorum
            .saturating_sub(self.submissions.len() + self.in_flight())
    }

    pub fn batch(&self) -> TaskResultBatch {
        TaskResultBatch {
            task_id: self.spec.task_id.clone(),
            submissions: self
                .submissions
                .iter()
                .map(|s| s.submission.clone())
                .collect(),
            closing_seq: self.submissions.last().map(|s| s.seq).unwrap_or(0),
        }
    }
}

/// Everything the service keeps about one story; exactly what the event
/// log implies.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoryRuntime {
    pub state: StoryState,
    pub open: Option<OpenTask>,
    /// Every assignment ever issued for this story.
    pub assignments: BTreeMap<AssignmentId, Assignment>,
    /// Workers who submitted to each closed or open task.
    pub submitters: BTreeMap<TaskId, Vec<WorkerId>>,
    /// Seq of the next event.
    pub next_seq: u64,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ReplayError {
    #[error("gap detected: expected seq {0}")]
    GapDetected(u64),
    #[error("corrupt event at seq {seq}: {reason}")]
    CorruptEvent { seq: u64, reason: String },
}

fn corrupt(seq: u64, reason: impl Into<String>) -> ReplayError {
    ReplayError::CorruptEvent {
        seq,
        reason: reason.into(),
    }
}

impl StoryRuntime {
    /// Builds the runtime from a `StoryCreated` event at seq 0.
    pub fn from_created(event: &Event) -> Result<StoryRuntime, ReplayError> {
        if event.seq != 0 {
            return Err(ReplayError::GapDetected(0));
        }
        let EventPayload::StoryCreated {
            prompt,
            config,
            draft,
        } = &event.payload
        else {
            return Err(corrupt(0, "log must start with story_created"));
        };
        let state = match draft {
            None => {
                let fresh =
                    crate::domain::new_story(event.story_id.clone(), prompt, config.clone())
                        .map_err(|e| corrupt(0, e.to_string()))?;
                engine::initial_tasks(&fresh)
                    .map_err(|e| corrupt(0, e.to_string()))?
                    .0
            }
            Some(draft) => {
                engine::seeded_story(event.story_id.clone(), prompt, config.clone(), draft)
                    .map_err(|e| corrupt(0, e.to_string()))?
                    .0
            }
        };
        Ok(StoryRuntime::with_state(state))
    }

    fn with_state(state: StoryState) -> StoryRuntime {
        StoryRuntime {
            state,
            open: None,
            assignments: BTreeMap::new(),
            submitters: BTreeMap::new(),
            next_seq: 1,
        }
    }

    /// Folds one event into the runtime.
    pub fn apply(&mut self, event: &Event) -> Result<(), ReplayError> {
        let seq = event.seq;
        if seq != self.next_seq {
            return Err(ReplayError::GapDetected(self.next_seq));
        }
        if event.story_id != self.state.story_id {
            return Err(corrupt(seq, format!("event for story {}", event.story_id)));
        }
        match &event.payload {
            EventPayload::StoryCreated { .. } => {
                return Err(corrupt(seq, "story_created after seq 0"));
            }
            EventPayload::TaskPublished { task } => {
                if self.open.is_some() {
                    return Err(corrupt(seq, "task published while another is open"));
                }
                if self.state.outstanding.as_ref() != Some(task) {
                    return Err(corrupt(
                        seq,
                        "published task differs from engine's next task",
                    ));
                }
                self.open = Some(OpenTask::new(task.clone()));
            }
            EventPayload::AssignmentIssued {
                assignment,
                condition,
            } => {
                if *condition != self.state.condition() {
                    return Err(corrupt(seq, "assignment condition differs from story"));
                }
                let open = self.open_task(seq, &assignment.task_id)?;
                open.assignments.push(assignment.clone());
                self.assignments
                    .insert(assignment.assignment_id.clone(), assignment.clone());
            }
            EventPayload::AssignmentExpired { assignment_id } => {
                self.set_status(seq, assignment_id, AssignmentStatus::Expired)?;
            }
            EventPayload::SubmissionRecorded {
                task_id,
                assignment_id,
                submission,
            } => {
                let open = self.open_task(seq, task_id)?;
                if open.submissions.len() >= open.spec.quorum {
                    return Err(corrupt(seq, "submission beyond quorum"));
                }
                open.submissions.push(RecordedSubmission {
                    seq,
                    assignment_id: assignment_id.clone(),
                    submission: submission.clone(),
                });
                self.submitters
                    .entry(task_id.clone())
                    .or_default()
                    .push(submission.worker().clone());
                self.set_status(seq, assignment_id, AssignmentStatus::Submitted)?;
            }
            EventPayload::PhaseTransitioned {
                task_id,
                from,
                to,
                winner,
            } => {
                let open = self.open_task(seq, task_id)?;
                let batch = open.batch();
                if *from != self.state.phase {
                    return Err(corrupt(
                        seq,
                        format!("transition from {from}, story in {}", self.state.phase),
                    ));
                }
                let transition = engine::advance(&self.state, &batch)
                    .map_err(|e| corrupt(seq, e.to_string()))?;
                if transition.state.phase != *to {
                    return Err(corrupt(
                        seq,
                        format!(
                            "recorded target {to}, engine reached {}",
                            transition.state.phase
                        ),
                    ));
                }
                if transition.winner != *winner {
                    return Err(corrupt(seq, "recorded winner differs from engine"));
                }
                self.state = transition.state;
                self.open = None;
            }
            EventPayload::VersionSnapshotted { version } => {
                if !self.state.versions.contains(version) {
                    return Err(corrupt(seq, "snapshot does not match engine state"));
                }
            }
            EventPayload::GoalElected { goal } => {
                if self.state.goal_history.last() != Some(goal) {
                    return Err(corrupt(seq, "goal does not match engine state"));
                }
            }
            EventPayload::ScenesUnlocked { round, scenes } => {
                if self.state.round != *round || self.state.unlock_set != *scenes {
                    return Err(corrupt(seq, "unlock set does not match engine state"));
                }
            }
            EventPayload::StoryCompleted { .. } => {
                if self.state.phase != Phase::Complete {
                    return Err(corrupt(seq, "completion recorded before the last round"));
                }
            }
        }
        self.next_seq += 1;
        Ok(())
    }

    fn open_task(&mut self, seq: u64, task_id: &TaskId) -> Result<&mut OpenTask, ReplayError> {
        match self.open.as_mut() {
            Some(open) if open.spec.task_id == *task_id => Ok(open),
            _ => Err(corrupt(seq, format!("task {task_id} is not open"))),
        }
    }

    fn set_status(
        &mut self,
        seq: u64,
        id: &AssignmentId,
        status: AssignmentStatus,
    ) -> Result<(), ReplayError> {
        let Some(assignment) = self.assignments.get_mut(id) else {
            return Err(corrupt(seq, format!("unknown assignment {id}")));
        };
        if assignment.status != AssignmentStatus::Open {
            return Err(corrupt(seq, format!("assignment {id} is not open")));
        }
        assignment.status = status;
        if let Some(open) = self.open.as_mut() {
            if let Some(a) = open.assignments.iter_mut().find(|a| a.assignment_id == *id) {
                a.status = status;
            }
        }
        Ok(())
    }

    /// Open task specs (zero or one).
    pub fn open_tasks(&self) -> Vec<TaskSpec> {
        self.open.iter().map(|o| o.spec.clone()).collect()
    }
}

/// Rebuilds a story from its gapless log.
pub fn replay(events: &[Event]) -> Result<StoryRuntime, ReplayError> {
    let Some(first) = events.first() else {
        return Err(ReplayError::GapDetected(0));
    };
    let mut runtime = StoryRuntime::from_created(first)?;
    for event in &events[1..] {
        runtime.apply(event)?;
    }
    Ok(runtime)
}

pub const STORY_DOCUMENT_SCHEMA: &str = "storyloop.story/1";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneProvenance {
    pub scene_index: usize,
    /// Worker whose winning candidate produced the exported text.
    pub author: WorkerId,
}

/// A story at one version, as handed to readers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoryDocument {
    pub schema: String,
    pub story_id: StoryId,
    pub prompt: String,
    pub config: StoryConfig,
    pub version: u32,
    pub round: u32,
    pub scenes: Vec<String>,
    pub goal_history: Vec<Goal>,
    pub provenance: Vec<SceneProvenance>,
}

impl StoryDocument {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("documents always serialize");
        s.push('\n');
        s
    }

    /// Scenes in order separated by blank lines.
    pub fn to_plain_text(&self) -> String {
        let mut s = self.scenes.join("\n\n");
        s.push('\n');
        s
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ExportError {
    #[error("unknown version {requested}; story has {available} versions")]
    UnknownVersion { requested: u32, available: usize },
}

/// Exports `version` (default: the latest) of a story.
pub fn export_story(
    state: &StoryState,
    version: Option<u32>,
) -> Result<StoryDocument, ExportError> {
    let available = state.versions.len();
    let requested = match version {
        Some(v) => v,
        None if available > 0 => available as u32 - 1,
        None => {
            return Err(ExportError::UnknownVersion {
                requested: 0,
                available,
            })
        }
    };
    let v = state
        .versions
        .get(requested as usize)
        .ok_or(ExportError::UnknownVersion {
            requested,
            available,
        })?;
    Ok(StoryDocument {
        schema: STORY_DOCUMENT_SCHEMA.into(),
        story_id: state.story_id.clone(),
        prompt: state.prompt.clone(),
        config: state.config.clone(),
        version: v.version_number,
        round: v.round,
        scenes: v.scene_texts.clone(),
        goal_history: state
            .goal_history
            .iter()
            .filter(|g| g.round < v.round)
            .cloned()
            .collect(),
        provenance: v
            .scene_authors
            .iter()
            .enumerate()
            .map(|(scene_index, author)| SceneProvenance {
                scene_index,
                author: author.clone(),
            })
            .collect(),
    })
}
