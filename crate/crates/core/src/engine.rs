//! The reflect-and-revise state machine.
//!
//! A story has at most one outstanding task. [`advance`] consumes the closed
//! result batch of that task and returns the successor state together with
//! the next task to publish. The transition graph for the reflect-revise
//! condition is:
//!
//! ```text
//! DraftAuthoring(i) -> DraftVoting(i) -> DraftAuthoring(i+1) ... -> [v0]
//!   -> CritiqueAuthoring -> CritiqueVoting -> SceneSelection
//!   -> { SuggestionVoting(s) -> RevisionAuthoring(s) -> RevisionVoting(s) } per unlocked s
//!   -> [vN] -> CritiqueAuthoring | Complete
//! ```
//!
//! The control condition drops critique authoring, critique voting and
//! suggestion voting; it goes from the draft straight to scene selection.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aggregation::{self, AggregationError};
use crate::domain::{
    Candidate, Condition, Critique, DomainError, Goal, ItemId, Phase, Scene, SceneSelectionBallot,
    StoryConfig, StoryId, StoryState, StoryVersion, Suggestion, TaskId, Timestamp, Vote, WorkerId,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    WriteScene,
    VoteScene,
    WriteCritique,
    VoteCritique,
    SelectScenes,
    VoteSuggestion,
    ReviseScene,
    VoteRevision,
    SelectScenesControl,
    EditSceneControl,
    VoteEditControl,
}

/// The payload shape a task kind accepts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PayloadKind {
    Candidate,
    Critique,
    Vote,
    SceneSelection,
}

impl fmt::Display for PayloadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PayloadKind::Candidate => "candidate",
            PayloadKind::Critique => "critique",
            PayloadKind::Vote => "vote",
            PayloadKind::SceneSelection => "scene_selection",
        })
    }
}

impl TaskKind {
    pub fn payload_kind(self) -> PayloadKind {
        use TaskKind::*;
        match self {
            WriteScene | ReviseScene | EditSceneControl => PayloadKind::Candidate,
            WriteCritique => PayloadKind::Critique,
            VoteScene | VoteCritique | VoteSuggestion | VoteRevision | VoteEditControl => {
                PayloadKind::Vote
            }
            SelectScenes | SelectScenesControl => PayloadKind::SceneSelection,
        }
    }

    pub fn is_draft(self) -> bool {
        matches!(self, TaskKind::WriteScene | TaskKind::VoteScene)
    }

    /// Critique authoring and voting.
    pub fn is_reflection(self) -> bool {
        matches!(self, TaskKind::WriteCritique | TaskKind::VoteCritique)
    }

    /// `None` for the draft tasks shared by both conditions.
    pub fn condition(self) -> Option<Condition> {
        use TaskKind::*;
        match self {
            WriteScene | VoteScene => None,
            WriteCritique | VoteCritique | SelectScenes | VoteSuggestion | ReviseScene
            | VoteRevision => Some(Condition::MechanicalNovel),
            SelectScenesControl | EditSceneControl | VoteEditControl => Some(Condition::Control),
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

/// One votable option, as shown to a worker.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskOption {
    pub id: ItemId,
    pub text: String,
}

/// Everything a worker sees when doing a task.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskContext {
    pub prompt: String,
    /// Current text of every accepted scene, in order.
    pub story: Vec<String>,
    pub goal: Option<String>,
    pub suggestion: Option<String>,
    pub options: Vec<TaskOption>,
    pub instructions: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: TaskId,
    pub story_id: StoryId,
    pub kind: TaskKind,
    pub scene_index: Option<usize>,
    /// Distinct-worker submissions required to close the task.
    pub quorum: usize,
    pub context: TaskContext,
}

/// A validated submission, stamped with its author, id and time.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Submission {
    Candidate(Candidate),
    Critique(Critique),
    Vote(Vote),
    SceneSelection(SceneSelectionBallot),
}

impl Submission {
    pub fn worker(&self) -> &WorkerId {
        match self {
            Submission::Candidate(c) => &c.author,
            Submission::Critique(c) => &c.author,
            Submission::Vote(v) => &v.voter,
            Submission::SceneSelection(b) => &b.worker,
        }
    }

    pub fn payload_kind(&self) -> PayloadKind {
        match self {
            Submission::Candidate(_) => PayloadKind::Candidate,
            Submission::Critique(_) => PayloadKind::Critique,
            Submission::Vote(_) => PayloadKind::Vote,
            Submission::SceneSelection(_) => PayloadKind::SceneSelection,
        }
    }

    /// Id of the authored item, if the submission authors one.
    pub fn item_id(&self) -> Option<&ItemId> {
        match self {
            Submission::Candidate(c) => Some(&c.candidate_id),
            Submission::Critique(c) => Some(&c.id),
            Submission::SceneSelection(b) => Some(&b.id),
            Submission::Vote(_) => None,
        }
    }
}

/// The closed result of one task.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskResultBatch {
    pub task_id: TaskId,
    pub submissions: Vec<Submission>,
    /// Sequence number of the event that closed the quorum; recorded on any
    /// version snapshot the transition takes.
    pub closing_seq: u64,
}

/// Result of [`advance`]: the successor state, the tasks to publish and
/// what the transition decided.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Transition {
    pub state: StoryState,
    pub tasks: Vec<TaskSpec>,
    pub winner: Option<ItemId>,
    pub goal: Option<Goal>,
    pub unlocked: Option<Vec<usize>>,
    pub versions: Vec<StoryVersion>,
    pub completed: bool,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EngineError {
    #[error("wrong phase: {0}")]
    WrongPhase(String),
    #[error("quorum mismatch: task needs {expected} submissions, batch has {got}")]
    QuorumMismatch { expected: usize, got: usize },
    #[error("invalid submission kind: expected {expected}, got {got}")]
    InvalidSubmissionKind {
        expected: PayloadKind,
        got: PayloadKind,
    },
    #[error("worker `{0}` submitted more than once to the same task")]
    DuplicateWorker(WorkerId),
    #[error("submission targets scene {got}, task is for scene {expected}")]
    SceneMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Aggregation(#[from] AggregationError),
    #[error(transparent)]
    Domain(#[from] DomainError),
}

/// The first task of a fresh story.
pub fn initial_tasks(state: &StoryState) -> Result<(StoryState, Vec<TaskSpec>), EngineError> {
    if state.phase != Phase::DraftAuthoring(0) || state.outstanding.is_some() {
        return Err(EngineError::WrongPhase(format!(
            "initial tasks need a fresh story in DraftAuthoring(0), story is in {}",
            state.phase
        )));
    }
    let mut next = state.clone();
    let task = publish(&mut next, TaskKind::WriteScene, Some(0));
    Ok((next, vec![task]))
}

/// A story whose first draft was written outside the crowd pipeline.
///
/// Version 0 is the supplied draft and the story starts at its first
/// revision round.
pub fn seeded_story(
    story_id: StoryId,
    prompt: &str,
    config: StoryConfig,
    draft: &[String],
) -> Result<(StoryState, Vec<TaskSpec>), EngineError> {
    let mut state = crate::domain::new_story(story_id, prompt, config)?;
    if draft.len() != state.config.scene_count {
        return Err(DomainError::Validation {
            field: "draft".into(),
            reason: format!(
                "{} scenes supplied, config needs {}",
                draft.len(),
                state.config.scene_count
            ),
        }
        .into());
    }
    for (index, text) in draft.iter().enumerate() {
        crate::domain::check_scene_text(&format!("draft.{index}"), text)?;
        state.scenes.push(Scene {
            index,
            text: text.clone(),
            locked: true,
            pending_suggestion: None,
            author: WorkerId::new("seed"),
        });
    }
    state.snapshot_version(0, 0)?;
    let mut outcome = Outcome::default();
    begin_round_or_complete(&mut state, &mut outcome);
    Ok((state, outcome.tasks))
}

pub fn is_complete(state: &StoryState) -> bool {
    state.phase == Phase::Complete
}

/// Workers excluded from the outstanding task because they wrote one of
/// the items being voted on.
pub fn ballot_authors(state: &StoryState) -> BTreeSet<WorkerId> {
    match state.phase {
        Phase::DraftVoting(_) | Phase::RevisionVoting(_) => {
            state.candidates.iter().map(|c| c.author.clone()).collect()
        }
        Phase::CritiqueVoting => state.critiques.iter().map(|c| c.author.clone()).collect(),
        Phase::SuggestionVoting(i) => state
            .suggestion_pool
            .get(&i)
            .map(|pool| pool.iter().map(|s| s.author.clone()).collect())
            .unwrap_or_default(),
        _ => BTreeSet::new(),
    }
}

/// Applies the closed batch of the outstanding task.
pub fn advance(state: &StoryState, batch: &TaskResultBatch) -> Result<Transition, EngineError> {
    let task = match &state.outstanding {
        Some(task) if task.task_id == batch.task_id => task.clone(),
        Some(task) => {
            return Err(EngineError::WrongPhase(format!(
                "batch for {} but outstanding task is {}",
                batch.task_id, task.task_id
            )))
        }
        None => {
            return Err(EngineError::WrongPhase(format!(
                "no outstanding task in phase {}",
                state.phase
            )))
        }
    };
    check_batch(&task, batch)?;

    let mut next = state.clone();
    next.outstanding = None;
    let mut outcome = Outcome::default();
    let subs = &batch.submissions;

    match (state.phase, task.kind) {
        (Phase::DraftAuthoring(i), TaskKind::WriteScene) => {
            next.candidates = candidates(subs, i)?;
            next.phase = Phase::DraftVoting(i);
            outcome
                .tasks
                .push(publish(&mut next, TaskKind::VoteScene, Some(i)));
        }
        (Phase::DraftVoting(i), TaskKind::VoteScene) => {
            let winner = elect_candidate(&next.candidates, subs)?;
            outcome.winner = Some(winner.candidate_id.clone());
            next.candidates.clear();
            next.scenes.push(Scene {
                index: i,
                text: winner.text,
                locked: true,
                pending_suggestion: None,
                author: winner.author,
            });
            if i + 1 < next.config.scene_count {
                next.phase = Phase::DraftAuthoring(i + 1);
                outcome
                    .tasks
                    .push(publish(&mut next, TaskKind::WriteScene, Some(i + 1)));
            } else {
                let v = next.snapshot_version(0, batch.closing_seq)?.clone();
                outcome.versions.push(v);
                begin_round_or_complete(&mut next, &mut outcome);
            }
        }
        (Phase::CritiqueAuthoring, TaskKind::WriteCritique) => {
            let mut critiques = Vec::with_capacity(subs.len());
            for sub in subs {
                if let Submission::Critique(c) = sub {
                    c.validate()?;
                    critiques.push(c.clone());
                }
            }
            next.critiques = critiques;
            next.phase = Phase::CritiqueVoting;
            outcome
                .tasks
                .push(publish(&mut next, TaskKind::VoteCritique, None));
        }
        (Phase::CritiqueVoting, TaskKind::VoteCritique) => {
            let goal = aggregation::elect_goal(&next.critiques, &votes(subs), next.round)?;
            outcome.winner = Some(goal.source_critique.clone());
            outcome.goal = Some(goal.clone());
            next.goal_history.push(goal);
            next.critiques.clear();
            next.phase = Phase::SceneSelection;
            outcome
                .tasks
                .push(publish(&mut next, TaskKind::SelectScenes, None));
        }
        (Phase::SceneSelection, TaskKind::SelectScenes | TaskKind::SelectScenesControl) => {
            let ballots = ballots(subs);
            for b in &ballots {
                b.validate(next.config.scene_count, next.condition())?;
            }
            let unlocked = aggregation::compute_unlock_set(
                &ballots,
                next.config.scene_count,
                next.config.unlock_threshold,
            )?;
            for &i in &unlocked {
                next.scenes[i].locked = false;
            }
            next.unlock_set = unlocked.clone();
            outcome.unlocked = Some(unlocked.clone());
            let first = unlocked[0];
            match next.condition() {
                Condition::MechanicalNovel => {
                    let mut pool: BTreeMap<usize, Vec<Suggestion>> =
                        unlocked.iter().map(|&i| (i, Vec::new())).collect();
                    for ballot in &ballots {
                        for s in ballot.suggestions() {
                            if let Some(list) = pool.get_mut(&s.scene_index) {
                                list.push(s);
                            }
                        }
                    }
                    for list in pool.values_mut() {
                        list.sort_by(|a, b| (a.submitted_at, &a.id).cmp(&(b.submitted_at, &b.id)));
                    }
                    next.suggestion_pool = pool;
                    start_revision(&mut next, first, &mut outcome);
                }
                Condition::Control => {
                    next.phase = Phase::RevisionAuthoring(first);
                    outcome
                        .tasks
                        .push(publish(&mut next, TaskKind::EditSceneControl, Some(first)));
                }
            }
        }
        (Phase::SuggestionVoting(i), TaskKind::VoteSuggestion) => {
            let pool = next.suggestion_pool.get(&i).cloned().unwrap_or_default();
            let options: Vec<(ItemId, Timestamp)> = pool
                .iter()
                .map(|s| (s.id.clone(), s.submitted_at))
                .collect();
            let winner = aggregation::tally_plurality(&votes(subs), &options)?;
            outcome.winner = Some(winner.clone());
            let chosen = pool
                .into_iter()
                .find(|s| s.id == winner)
                .expect("winner drawn from pool");
            next.scenes[i].pending_suggestion = Some(chosen);
            next.phase = Phase::RevisionAuthoring(i);
            outcome
                .tasks
                .push(publish(&mut next, TaskKind::ReviseScene, Some(i)));
        }
        (Phase::RevisionAuthoring(i), TaskKind::ReviseScene | TaskKind::EditSceneControl) => {
            next.candidates = candidates(subs, i)?;
            next.phase = Phase::RevisionVoting(i);
            let vote_kind = match task.kind {
                TaskKind::ReviseScene => TaskKind::VoteRevision,
                _ => TaskKind::VoteEditControl,
            };
            outcome.tasks.push(publish(&mut next, vote_kind, Some(i)));
        }
        (Phase::RevisionVoting(i), TaskKind::VoteRevision | TaskKind::VoteEditControl) => {
            let winner = elect_candidate(&next.candidates, subs)?;
            outcome.winner = Some(winner.candidate_id.clone());
            next.candidates.clear();
            let scene = &mut next.scenes[i];
            debug_assert!(!scene.locked, "edit of locked scene {i}");
            scene.text = winner.text;
            scene.author = winner.author;
            scene.pending_suggestion = None;

            let following = next.unlock_set.iter().copied().find(|&s| s > i);
            match (following, next.condition()) {
                (Some(s), Condition::MechanicalNovel) => start_revision(&mut next, s, &mut outcome),
                (Some(s), Condition::Control) => {
                    next.phase = Phase::RevisionAuthoring(s);
                    outcome
                        .tasks
                        .push(publish(&mut next, TaskKind::EditSceneControl, Some(s)));
                }
                (None, _) => {
                    for scene in &mut next.scenes {
                        scene.locked = true;
                    }
                    next.unlock_set.clear();
                    next.suggestion_pool.clear();
                    next.round += 1;
                    let v = next
                        .snapshot_version(next.round, batch.closing_seq)?
                        .clone();
                    outcome.versions.push(v);
                    begin_round_or_complete(&mut next, &mut outcome);
                }
            }
        }
        (phase, kind) => {
            return Err(EngineError::WrongPhase(format!(
                "task kind {kind} cannot close phase {phase}"
            )))
        }
    }

    Ok(Transition {
        state: next,
        tasks: outcome.tasks,
        winner: outcome.winner,
        goal: outcome.goal,
        unlocked: outcome.unlocked,
        versions: outcome.versions,
        completed: outcome.completed,
    })
}

#[derive(Default)]
struct Outcome {
    tasks: Vec<TaskSpec>,
    winner: Option<ItemId>,
    goal: Option<Goal>,
    unlocked: Option<Vec<usize>>,
    versions: Vec<StoryVersion>,
    completed: bool,
}

fn begin_round_or_complete(state: &mut StoryState, outcome: &mut Outcome) {
    if state.round >= state.config.revision_rounds {
        state.phase = Phase::Complete;
        outcome.completed = true;
        return;
    }
    match state.condition() {
        Condition::MechanicalNovel => {
            state.phase = Phase::CritiqueAuthoring;
            outcome
                .tasks
                .push(publish(state, TaskKind::WriteCritique, None));
        }
        Condition::Control => {
            state.phase = Phase::SceneSelection;
            outcome
                .tasks
                .push(publish(state, TaskKind::SelectScenesControl, None));
        }
    }
}

/// Opens the suggestion election for `scene`, or goes straight to the
/// rewrite when no ballot wrote a suggestion for it.
fn start_revision(state: &mut StoryState, scene: usize, outcome: &mut Outcome) {
    let has_pool = state
        .suggestion_pool
        .get(&scene)
        .is_some_and(|pool| !pool.is_empty());
    if has_pool {
        state.phase = Phase::SuggestionVoting(scene);
        outcome
            .tasks
            .push(publish(state, TaskKind::VoteSuggestion, Some(scene)));
    } else {
        state.phase = Phase::RevisionAuthoring(scene);
        outcome
            .tasks
            .push(publish(state, TaskKind::ReviseScene, Some(scene)));
    }
}

fn check_batch(task: &TaskSpec, batch: &TaskResultBatch) -> Result<(), EngineError> {
    if batch.submissions.len() != task.quorum {
        return Err(EngineError::QuorumMismatch {
            expected: task.quorum,
            got: batch.submissions.len(),
        });
    }
    let expected = task.kind.payload_kind();
    let mut seen = BTreeSet::new();
    for sub in &batch.submissions {
        if sub.payload_kind() != expected {
            return Err(EngineError::InvalidSubmissionKind {
                expected,
                got: sub.payload_kind(),
            });
        }
        if !seen.insert(sub.worker()) {
            return Err(EngineError::DuplicateWorker(sub.worker().clone()));
        }
    }
    Ok(())
}

fn candidates(subs: &[Submission], scene: usize) -> Result<Vec<Candidate>, EngineError> {
    let mut out = Vec::with_capacity(subs.len());
    for sub in subs {
        if let Submission::Candidate(c) = sub {
            if c.scene_index != scene {
                return Err(EngineError::SceneMismatch {
                    expected: scene,
                    got: c.scene_index,
                });
            }
            c.validate()?;
            out.push(c.clone());
        }
    }
    Ok(out)
}

fn votes(subs: &[Submission]) -> Vec<Vote> {
    subs.iter()
        .filter_map(|s| match s {
            Submission::Vote(v) => Some(v.clone()),
            _ => None,
        })
        .collect()
}

fn ballots(subs: &[Submission]) -> Vec<SceneSelectionBallot> {
    subs.iter()
        .filter_map(|s| match s {
            Submission::SceneSelection(b) => Some(b.clone()),
            _ => None,
        })
        .collect()
}

fn elect_candidate(pool: &[Candidate], subs: &[Submission]) -> Result<Candidate, EngineError> {
    let options: Vec<(ItemId, Timestamp)> = pool
        .iter()
        .map(|c| (c.candidate_id.clone(), c.submitted_at))
        .collect();
    let winner = aggregation::tally_plurality(&votes(subs), &options)?;
    Ok(pool
        .iter()
        .find(|c| c.candidate_id == winner)
        .cloned()
        .expect("winner drawn from pool"))
}

fn quorum(config: &StoryConfig, kind: TaskKind) -> usize {
    use TaskKind::*;
    match kind {
        WriteScene | ReviseScene | EditSceneControl => config.candidates_per_authoring,
        WriteCritique => config.critiques_per_round,
        SelectScenes | SelectScenesControl => config.selectors_per_unlock,
        VoteScene | VoteCritique | VoteSuggestion | VoteRevision | VoteEditControl => {
            config.voters_per_election
        }
    }
}

/// Builds the next task, records it as outstanding and returns it.
fn publish(state: &mut StoryState, kind: TaskKind, scene_index: Option<usize>) -> TaskSpec {
    let task_id = TaskId(format!("{}.t{:04}", state.story_id, state.next_task));
    state.next_task += 1;

    let n = state.config.scene_count;
    let goal = match (state.condition(), kind) {
        (Condition::MechanicalNovel, TaskKind::SelectScenes)
        | (Condition::MechanicalNovel, TaskKind::VoteSuggestion)
        | (Condition::MechanicalNovel, TaskKind::ReviseScene)
        | (Condition::MechanicalNovel, TaskKind::VoteRevision) => {
            state.goal_history.last().map(|g| g.text.clone())
        }
        _ => None,
    };
    let suggestion = match kind {
        TaskKind::ReviseScene | TaskKind::VoteRevision => scene_index
            .and_then(|i| state.scenes[i].pending_suggestion.as_ref())
            .map(|s| s.text.clone()),
        _ => None,
    };
    let options = match kind {
        TaskKind::VoteScene | TaskKind::VoteRevision | TaskKind::VoteEditControl => state
            .candidates
            .iter()
            .map(|c| TaskOption {
                id: c.candidate_id.clone(),
                text: c.text.clone(),
            })
            .collect(),
        TaskKind::VoteCritique => state
            .critiques
            .iter()
            .map(|c| TaskOption {
                id: c.id.clone(),
                text: c.render(),
            })
            .collect(),
        TaskKind::VoteSuggestion => scene_index
            .and_then(|i| state.suggestion_pool.get(&i))
            .map(|pool| {
                pool.iter()
                    .map(|s| TaskOption {
                        id: s.id.clone(),
                        text: s.text.clone(),
                    })
                    .collect()
            })
            .unwrap_or_default(),
        _ => Vec::new(),
    };
    let scene_no = scene_index.map(|i| i + 1).unwrap_or(0);
    let instructions = match kind {
        TaskKind::WriteScene => format!(
            "Write scene {scene_no} of {n}, continuing the story so far and following the prompt."
        ),
        TaskKind::VoteScene => format!("Vote for the best candidate for scene {scene_no}."),
        TaskKind::WriteCritique => {
            "Read the story and write one sentence each: I like..., I wish..., What if...?".into()
        }
        TaskKind::VoteCritique => "Vote for the critique you agree with most.".into(),
        TaskKind::SelectScenes => {
            "Select every scene that must change to achieve the goal, and write a one-sentence suggestion for each.".into()
        }
        TaskKind::VoteSuggestion => format!(
            "Vote for the suggestion that best represents how scene {scene_no} should change."
        ),
        TaskKind::ReviseScene => format!(
            "Rewrite scene {scene_no} so it incorporates the suggestion and works toward the goal."
        ),
        TaskKind::VoteRevision => format!(
            "Vote for the version of scene {scene_no} that best achieves the suggestion and the goal."
        ),
        TaskKind::SelectScenesControl => "Select every scene you think should be edited.".into(),
        TaskKind::EditSceneControl => format!("Edit scene {scene_no} to improve the story."),
        TaskKind::VoteEditControl => format!("Vote for the best version of scene {scene_no}."),
    };

    let task = TaskSpec {
        task_id,
        story_id: state.story_id.clone(),
        kind,
        scene_index,
        quorum: quorum(&state.config, kind),
        context: TaskContext {
            prompt: state.prompt.clone(),
            story: state.scene_texts(),
            goal,
            suggestion,
            options,
            instructions,
        },
    };
    state.outstanding = Some(task.clone());
    task
}
