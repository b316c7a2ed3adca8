//! Persistent domain types shared by the engine, the task service and the
//! simulator.
//!
//! Every type here has a canonical JSON encoding with snake_case field
//! names. Values are plain data: cloning a [`StoryState`] gives an
//! independent snapshot that can be handed to another thread.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::TaskSpec;

/// Upper bound on the length of a scene body, in characters.
pub const MAX_SCENE_CHARS: usize = 10_000;
/// Upper bound on critique parts and suggestions, in characters.
pub const MAX_SENTENCE_CHARS: usize = 500;

macro_rules! string_id {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub String);

        impl $name {
            pub fn new(id: impl Into<String>) -> Self {
                Self(id.into())
            }

            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl From<&str> for $name {
            fn from(s: &str) -> Self {
                Self(s.to_owned())
            }
        }
    };
}

string_id!(
    /// Identifies one story.
    StoryId
);
string_id!(
    /// Identifies one published task instance.
    TaskId
);
string_id!(
    /// Identifies a submitted item: a candidate, critique, ballot or suggestion.
    ItemId
);
string_id!(
    /// Bearer identity of a crowd worker.
    WorkerId
);
string_id!(
    /// Identifies one issued assignment of a task to a worker.
    AssignmentId
);

/// Milliseconds since the Unix epoch.
#[derive(
    Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct Timestamp(pub u64);

impl Timestamp {
    pub fn plus_secs(self, secs: u64) -> Timestamp {
        Timestamp(self.0.saturating_add(secs.saturating_mul(1000)))
    }
}

/// Which pipeline a story (and a worker) belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    /// Reflect (critique, elect a goal) then revise against the goal.
    MechanicalNovel,
    /// Iterative editing: select scenes and rewrite them, no goal.
    Control,
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Condition::MechanicalNovel => f.write_str("mechanical_novel"),
            Condition::Control => f.write_str("control"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DomainError {
    #[error("invalid config: `{field}` {reason}")]
    InvalidConfig { field: &'static str, reason: String },
    #[error("prompt must not be empty")]
    EmptyPrompt,
    #[error("incomplete draft: scene {0} has no text")]
    IncompleteDraft(usize),
    #[error("validation failure on `{field}`: {reason}")]
    Validation { field: String, reason: String },
}

impl DomainError {
    fn validation(field: impl Into<String>, reason: impl Into<String>) -> Self {
        DomainError::Validation {
            field: field.into(),
            reason: reason.into(),
        }
    }
}

/// Run parameters for one story.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StoryConfig {
    pub scene_count: usize,
    pub candidates_per_authoring: usize,
    pub voters_per_election: usize,
    pub selectors_per_unlock: usize,
    pub unlock_threshold: usize,
    pub critiques_per_round: usize,
    pub revision_rounds: u32,
    pub condition: Condition,
    /// Informational only; nothing is paid.
    pub task_pay_cents: u32,
    pub task_timeout_secs: u64,
}

impl Default for StoryConfig {
    fn default() -> Self {
        StoryConfig {
            scene_count: 6,
            candidates_per_authoring: 5,
            voters_per_election: 5,
            selectors_per_unlock: 10,
            unlock_threshold: 4,
            critiques_per_round: 5,
            revision_rounds: 5,
            condition: Condition::MechanicalNovel,
            task_pay_cents: 85,
            task_timeout_secs: 30 * 60,
        }
    }
}

impl StoryConfig {
    pub fn control() -> Self {
        StoryConfig {
            condition: Condition::Control,
            ..StoryConfig::default()
        }
    }

    pub fn validate(&self) -> Result<(), DomainError> {
        let positive = [
            ("scene_count", self.scene_count),
            ("candidates_per_authoring", self.candidates_per_authoring),
            ("voters_per_election", self.voters_per_election),
            ("selectors_per_unlock", self.selectors_per_unlock),
            ("unlock_threshold", self.unlock_threshold),
            ("critiques_per_round", self.critiques_per_round),
        ];
        for (field, value) in positive {
            if value == 0 {
                return Err(DomainError::InvalidConfig {
                    field,
                    reason: "must be a positive integer".into(),
                });
            }
        }
        if self.candidates_per_authoring < 2 {
            return Err(DomainError::InvalidConfig {
                field: "candidates_per_authoring",
                reason: format!("must be at least 2, got {}", self.candidates_per_authoring),
            });
        }
        if self.unlock_threshold > self.selectors_per_unlock {
            return Err(DomainError::InvalidConfig {
                field: "unlock_threshold",
                reason: format!(
                    "{} exceeds selectors_per_unlock {}",
                    self.unlock_threshold, self.selectors_per_unlock
                ),
            });
        }
        if self.task_timeout_secs == 0 {
            return Err(DomainError::InvalidConfig {
                field: "task_timeout_secs",
                reason: "must be a positive number of seconds".into(),
            });
        }
        Ok(())
    }
}

/// Where a story is in its pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "phase", content = "scene", rename_all = "snake_case")]
pub enum Phase {
    DraftAuthoring(usize),
    DraftVoting(usize),
    CritiqueAuthoring,
    CritiqueVoting,
    SceneSelection,
    SuggestionVoting(usize),
    RevisionAuthoring(usize),
    RevisionVoting(usize),
    Complete,
}

impl Phase {
    pub fn is_draft(&self) -> bool {
        matches!(self, Phase::DraftAuthoring(_) | Phase::DraftVoting(_))
    }

    pub fn scene(&self) -> Option<usize> {
        match *self {
            Phase::DraftAuthoring(i)
            | Phase::DraftVoting(i)
            | Phase::SuggestionVoting(i)
            | Phase::RevisionAuthoring(i)
            | Phase::RevisionVoting(i) => Some(i),
            _ => None,
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Phase::DraftAuthoring(i) => write!(f, "DraftAuthoring({i})"),
            Phase::DraftVoting(i) => write!(f, "DraftVoting({i})"),
            Phase::CritiqueAuthoring => f.write_str("CritiqueAuthoring"),
            Phase::CritiqueVoting => f.write_str("CritiqueVoting"),
            Phase::SceneSelection => f.write_str("SceneSelection"),
            Phase::SuggestionVoting(i) => write!(f, "SuggestionVoting({i})"),
            Phase::RevisionAuthoring(i) => write!(f, "RevisionAuthoring({i})"),
            Phase::RevisionVoting(i) => write!(f, "RevisionVoting({i})"),
            Phase::Complete => f.write_str("Complete"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scene {
    pub index: usize,
    pub text: String,
    pub locked: bool,
    pub pending_suggestion: Option<Suggestion>,
    /// Worker whose candidate produced the current text.
    pub author: WorkerId,
}

/// An "I like / I wish / What if" triple.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Critique {
    pub id: ItemId,
    pub author: WorkerId,
    pub like: String,
    pub wish: String,
    pub what_if: String,
    pub submitted_at: Timestamp,
}

impl Critique {
    pub fn validate(&self) -> Result<(), DomainError> {
        check_sentence("like", &self.like)?;
        check_sentence("wish", &self.wish)?;
        check_sentence("what_if", &self.what_if)
    }

    /// The text shown to voters.
    pub fn render(&self) -> String {
        format!(
            "I like: {}\nI wish: {}\nWhat if: {}",
            self.like, self.wish, self.what_if
        )
    }
}

/// The elected what-if for one revision round.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Goal {
    pub source_critique: ItemId,
    pub text: String,
    pub round: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneSelectionBallot {
    pub id: ItemId,
    pub worker: WorkerId,
    pub selected: BTreeSet<usize>,
    #[serde(default, with = "scene_keyed")]
    pub suggestions: BTreeMap<usize, String>,
    pub submitted_at: Timestamp,
}

impl SceneSelectionBallot {
    pub fn validate(&self, scene_count: usize, condition: Condition) -> Result<(), DomainError> {
        if let Some(&bad) = self.selected.iter().find(|&&i| i >= scene_count) {
            return Err(DomainError::validation(
                "selected",
                format!("scene {bad} out of range for {scene_count} scenes"),
            ));
        }
        match condition {
            Condition::MechanicalNovel => {
                for idx in &self.selected {
                    match self.suggestions.get(idx) {
                        Some(text) => check_sentence(&format!("suggestions.{idx}"), text)?,
                        None => {
                            return Err(DomainError::validation(
                                format!("suggestions.{idx}"),
                                "every selected scene needs a suggestion",
                            ))
                        }
                    }
                }
                if let Some(extra) = self.suggestions.keys().find(|k| !self.selected.contains(k)) {
                    return Err(DomainError::validation(
                        format!("suggestions.{extra}"),
                        "suggestion for a scene that was not selected",
                    ));
                }
            }
            Condition::Control => {
                if !self.suggestions.is_empty() {
                    return Err(DomainError::validation(
                        "suggestions",
                        "control ballots carry no suggestions",
                    ));
                }
            }
        }
        Ok(())
    }

    /// Splits the ballot into one [`Suggestion`] per selected scene.
    pub fn suggestions(&self) -> Vec<Suggestion> {
        self.suggestions
            .iter()
            .map(|(&scene_index, text)| Suggestion {
                id: ItemId(format!("{}.s{scene_index}", self.id)),
                scene_index,
                text: text.clone(),
                author: self.worker.clone(),
                submitted_at: self.submitted_at,
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Suggestion {
    pub id: ItemId,
    pub scene_index: usize,
    pub text: String,
    pub author: WorkerId,
    pub submitted_at: Timestamp,
}

/// A proposed body for one scene.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Candidate {
    pub candidate_id: ItemId,
    pub scene_index: usize,
    pub text: String,
    pub author: WorkerId,
    pub submitted_at: Timestamp,
}

impl Candidate {
    pub fn validate(&self) -> Result<(), DomainError> {
        check_scene_text("text", &self.text)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vote {
    pub voter: WorkerId,
    pub choice: ItemId,
    pub submitted_at: Timestamp,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoryVersion {
    pub version_number: u32,
    pub scene_texts: Vec<String>,
    pub scene_authors: Vec<WorkerId>,
    pub created_by_event: u64,
    /// Completed revision rounds when the snapshot was taken.
    pub round: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkerProfile {
    pub worker_id: WorkerId,
    pub condition: Condition,
    pub completed_task_instances: BTreeSet<TaskId>,
    pub authored_items: BTreeSet<ItemId>,
}

impl WorkerProfile {
    pub fn new(worker_id: WorkerId, condition: Condition) -> Self {
        WorkerProfile {
            worker_id,
            condition,
            completed_task_instances: BTreeSet::new(),
            authored_items: BTreeSet::new(),
        }
    }
}

/// The full live state of one story.
///
/// The fields after `goal_history` are engine bookkeeping: the items awaiting
/// an election and the single outstanding task.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoryState {
    pub story_id: StoryId,
    pub prompt: String,
    pub config: StoryConfig,
    pub scenes: Vec<Scene>,
    pub versions: Vec<StoryVersion>,
    pub phase: Phase,
    pub round: u32,
    pub goal_history: Vec<Goal>,
    /// Scenes unlocked in the current round, ascending.
    pub unlock_set: Vec<usize>,
    /// Candidates awaiting a draft or revision vote.
    pub candidates: Vec<Candidate>,
    /// Critiques awaiting the goal election.
    pub critiques: Vec<Critique>,
    /// Per unlocked scene, the suggestions written in this round's ballots.
    pub suggestion_pool: BTreeMap<usize, Vec<Suggestion>>,
    pub outstanding: Option<TaskSpec>,
    pub next_task: u64,
}

impl StoryState {
    pub fn condition(&self) -> Condition {
        self.config.condition
    }

    pub fn scene_texts(&self) -> Vec<String> {
        self.scenes.iter().map(|s| s.text.clone()).collect()
    }

    /// Appends a snapshot of the current scene texts.
    pub fn snapshot_version(
        &mut self,
        round: u32,
        created_by_event: u64,
    ) -> Result<&StoryVersion, DomainError> {
        for i in 0..self.config.scene_count {
            match self.scenes.get(i) {
                Some(scene) if !scene.text.trim().is_empty() => {}
                _ => return Err(DomainError::IncompleteDraft(i)),
            }
        }
        let version = StoryVersion {
            version_number: self.versions.len() as u32,
            scene_texts: self.scene_texts(),
            scene_authors: self.scenes.iter().map(|s| s.author.clone()).collect(),
            created_by_event,
            round,
        };
        self.versions.push(version);
        Ok(self.versions.last().expect("just pushed"))
    }
}

/// Builds an empty story awaiting its first scene.
pub fn new_story(
    story_id: StoryId,
    prompt: &str,
    config: StoryConfig,
) -> Result<StoryState, DomainError> {
    if prompt.trim().is_empty() {
        return Err(DomainError::EmptyPrompt);
    }
    config.validate()?;
    Ok(StoryState {
        story_id,
        prompt: prompt.to_owned(),
        config,
        scenes: Vec::new(),
        versions: Vec::new(),
        phase: Phase::DraftAuthoring(0),
        round: 0,
        goal_history: Vec::new(),
        unlock_set: Vec::new(),
        candidates: Vec::new(),
        critiques: Vec::new(),
        suggestion_pool: BTreeMap::new(),
        outstanding: None,
        next_task: 0,
    })
}

pub(crate) fn check_sentence(field: &str, text: &str) -> Result<(), DomainError> {
    if text.trim().is_empty() {
        return Err(DomainError::validation(field, "must not be empty"));
    }
    let len = text.chars().count();
    if len > MAX_SENTENCE_CHARS {
        return Err(DomainError::validation(
            field,
            format!("{len} characters exceeds limit of {MAX_SENTENCE_CHARS}"),
        ));
    }
    Ok(())
}

pub(crate) fn check_scene_text(field: &str, text: &str) -> Result<(), DomainError> {
    if text.trim().is_empty() {
        return Err(DomainError::validation(field, "must not be empty"));
    }
    let len = text.chars().count();
    if len > MAX_SCENE_CHARS {
        return Err(DomainError::validation(
            field,
            format!("{len} characters exceeds limit of {MAX_SCENE_CHARS}"),
        ));
    }
    Ok(())
}

/// Serde for maps keyed by scene index. JSON object keys are strings, and
/// integer keys do not survive the buffering serde does for tagged enums,
/// so keys are parsed explicitly.
pub mod scene_keyed {
    use std::collections::BTreeMap;

    use serde::de::Error as _;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(
        map: &BTreeMap<usize, String>,
        s: S,
    ) -> Result<S::Ok, S::Error> {
        map.iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect::<BTreeMap<_, _>>()
            .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(
        d: D,
    ) -> Result<BTreeMap<usize, String>, D::Error> {
        BTreeMap::<String, String>::deserialize(d)?
            .into_iter()
            .map(|(k, v)| {
                k.parse::<usize>()
                    .map(|k| (k, v))
                    .map_err(|_| D::Error::custom(format!("scene key `{k}` is not an index")))
            })
            .collect()
    }
}
