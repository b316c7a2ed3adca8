//! Run transcripts and detection scoring.
//!
//! A transcript is a fold over one story's event log, so it can be rebuilt
//! from the log alone; the afflicted set is read back from the markers in
//! the seeded draft.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{Condition, Goal, ItemId, StoryConfig, StoryId, StoryVersion};
use crate::engine::{Submission, TaskKind, TaskSpec};
use crate::eventlog::{Event, EventPayload};
use crate::sim::problems::{detect_kind, marked_scenes, BenchmarkProblemKind};

pub const TRANSCRIPT_SCHEMA: &str = "storyloop.transcript/1";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub task: TaskSpec,
    pub submissions: Vec<Submission>,
    pub winner: Option<ItemId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnlockRecord {
    pub round: u32,
    pub scenes: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transcript {
    pub schema: String,
    pub story_id: StoryId,
    pub prompt: String,
    pub config: StoryConfig,
    pub problem: Option<BenchmarkProblemKind>,
    pub afflicted: BTreeSet<usize>,
    pub tasks: Vec<TaskRecord>,
    pub goals: Vec<Goal>,
    pub unlocks: Vec<UnlockRecord>,
    pub versions: Vec<StoryVersion>,
    pub completed: bool,
    pub event_count: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TranscriptError {
    #[error("event log does not start with story creation")]
    MissingCreation,
    #[error("submission for unpublished task at seq {0}")]
    UnknownTask(u64),
}

impl Transcript {
    pub fn from_events(events: &[Event]) -> Result<Transcript, TranscriptError> {
        let first = events.first().ok_or(TranscriptError::MissingCreation)?;
        let EventPayload::StoryCreated {
            prompt,
            config,
            draft,
        } = &first.payload
        else {
            return Err(TranscriptError::MissingCreation);
        };
        let draft = draft.clone().unwrap_or_default();
        let mut t = Transcript {
            schema: TRANSCRIPT_SCHEMA.to_owned(),
            story_id: first.story_id.clone(),
            prompt: prompt.clone(),
            config: config.clone(),
            problem: detect_kind(&draft),
            afflicted: marked_scenes(&draft),
            tasks: Vec::new(),
            goals: Vec::new(),
            unlocks: Vec::new(),
            versions: Vec::new(),
            completed: false,
            event_count: events.len(),
        };
        for event in &events[1..] {
            match &event.payload {
                EventPayload::TaskPublished { task } => t.tasks.push(TaskRecord {
                    task: task.clone(),
                    submissions: Vec::new(),
                    winner: None,
                }),
                EventPayload::SubmissionRecorded {
                    task_id,
                    submission,
                    ..
                } => t
                    .task_mut(task_id, event.seq)?
                    .submissions
                    .push(submission.clone()),
                EventPayload::PhaseTransitioned {
                    task_id, winner, ..
                } => t.task_mut(task_id, event.seq)?.winner = winner.clone(),
                EventPayload::GoalElected { goal } => t.goals.push(goal.clone()),
                EventPayload::ScenesUnlocked { round, scenes } => t.unlocks.push(UnlockRecord {
                    round: *round,
                    scenes: scenes.clone(),
                }),
                EventPayload::VersionSnapshotted { version } => t.versions.push(version.clone()),
                EventPayload::StoryCompleted { .. } => t.completed = true,
                EventPayload::StoryCreated { .. }
                | EventPayload::AssignmentIssued { .. }
                | EventPayload::AssignmentExpired { .. } => {}
            }
        }
        Ok(t)
    }

    fn task_mut(
        &mut self,
        id: &crate::domain::TaskId,
        seq: u64,
    ) -> Result<&mut TaskRecord, TranscriptError> {
        self.tasks
            .iter_mut()
            .rev()
            .find(|r| r.task.task_id == *id)
            .ok_or(TranscriptError::UnknownTask(seq))
    }

    pub fn condition(&self) -> Condition {
        self.config.condition
    }

    pub fn count_kind(&self, kind: TaskKind) -> usize {
        self.tasks.iter().filter(|r| r.task.kind == kind).count()
    }

    pub fn draft_task_count(&self) -> usize {
        self.tasks.iter().filter(|r| r.task.kind.is_draft()).count()
    }

    pub fn final_scenes(&self) -> Option<&[String]> {
        self.versions.last().map(|v| v.scene_texts.as_slice())
    }

    /// Ballots of the first revision round.
    pub fn first_round_ballots(&self) -> Vec<&crate::domain::SceneSelectionBallot> {
        self.tasks
            .iter()
            .find(|r| {
                matches!(
                    r.task.kind,
                    TaskKind::SelectScenes | TaskKind::SelectScenesControl
                )
            })
            .map(|r| {
                r.submissions
                    .iter()
                    .filter_map(|s| match s {
                        Submission::SceneSelection(b) => Some(b),
                        _ => None,
                    })
                    .collect()
            })
            .unwrap_or_default()
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("transcripts serialize");
        s.push('\n');
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionRates {
    /// Share of all first-round scene selections that land on an afflicted scene.
    pub vote_rate: f64,
    /// Share of runs whose first unlock set touches an afflicted scene.
    pub unlock_rate: f64,
    pub runs: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DetectionError {
    #[error("no transcripts to score")]
    EmptyInput,
    #[error("transcript {0} has no unlock set")]
    NoUnlock(StoryId),
}

/// Scores detection over benchmark transcripts, using each transcript's
/// own afflicted set. A run with no selections at all contributes nothing
/// to the vote-level rate; if no run has any, that rate is 0.
pub fn measure_detection(transcripts: &[Transcript]) -> Result<DetectionRates, DetectionError> {
    if transcripts.is_empty() {
        return Err(DetectionError::EmptyInput);
    }
    let mut selections = 0usize;
    let mut hits = 0usize;
    let mut unlock_hits = 0usize;
    for t in transcripts {
        for ballot in t.first_round_ballots() {
            selections += ballot.selected.len();
            hits += ballot
                .selected
                .iter()
                .filter(|i| t.afflicted.contains(i))
                .count();
        }
        let first = t
            .unlocks
            .first()
            .ok_or_else(|| DetectionError::NoUnlock(t.story_id.clone()))?;
        if first.scenes.iter().any(|i| t.afflicted.contains(i)) {
            unlock_hits += 1;
        }
    }
    Ok(DetectionRates {
        vote_rate: if selections == 0 {
            0.0
        } else {
            hits as f64 / selections as f64
        },
        unlock_rate: unlock_hits as f64 / transcripts.len() as f64,
        runs: transcripts.len(),
    })
}
