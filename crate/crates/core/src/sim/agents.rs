//! Scripted stand-ins for crowd workers.
//!
//! An agent sees only the [`TaskSpec`] a person would see and answers with
//! a [`SubmissionPayload`]. Randomness comes from a per-worker, per-role
//! generator, so outputs depend only on the seeds and what was observed.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::engine::{TaskKind, TaskSpec};
use crate::service::SubmissionPayload;
use crate::sim::problems::{strip_markers, MARKER_PREFIX};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "snake_case")]
pub enum PolicyKind {
    /// Random but well-formed answers; each scene is selected with `select_p`.
    UniformRandom {
        #[serde(default = "half")]
        select_p: f64,
    },
    /// Selects scenes containing `marker` with `detect_p` and any other
    /// scene with `background_p`.
    MarkerSeeking {
        #[serde(default = "default_marker")]
        marker: String,
        detect_p: f64,
        #[serde(default = "default_background")]
        background_p: f64,
    },
    /// Cycles through fixed outputs. How an output is read depends on the
    /// task: text for writing, a comma list of scene indices for selection,
    /// an option index for votes.
    ScriptedSequence { outputs: Vec<String> },
    /// Writes text from a template; see [`render_template`].
    TemplateAuthor { template: String },
}

fn half() -> f64 {
    0.5
}

fn default_marker() -> String {
    MARKER_PREFIX.to_owned()
}

fn default_background() -> f64 {
    0.2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentPolicy {
    #[serde(flatten)]
    pub kind: PolicyKind,
    #[serde(default)]
    pub seed: u64,
}

impl AgentPolicy {
    pub fn uniform(seed: u64) -> Self {
        AgentPolicy {
            kind: PolicyKind::UniformRandom { select_p: 0.5 },
            seed,
        }
    }

    pub fn marker_seeking(detect_p: f64, seed: u64) -> Self {
        AgentPolicy {
            kind: PolicyKind::MarkerSeeking {
                marker: default_marker(),
                detect_p,
                background_p: default_background(),
            },
            seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Author,
    Critic,
    Selector,
    Voter,
}

impl Role {
    pub fn for_task(kind: TaskKind) -> Role {
        use TaskKind::*;
        match kind {
            WriteScene | ReviseScene | EditSceneControl => Role::Author,
            WriteCritique => Role::Critic,
            SelectScenes | SelectScenesControl => Role::Selector,
            VoteScene | VoteCritique | VoteSuggestion | VoteRevision | VoteEditControl => {
                Role::Voter
            }
        }
    }
}

/// One policy per role.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Agents {
    pub author: AgentPolicy,
    pub critic: AgentPolicy,
    pub selector: AgentPolicy,
    pub voter: AgentPolicy,
}

impl Agents {
    pub fn uniform(seed: u64) -> Self {
        Agents {
            author: AgentPolicy::uniform(seed),
            critic: AgentPolicy::uniform(seed),
            selector: AgentPolicy::uniform(seed),
            voter: AgentPolicy::uniform(seed),
        }
    }

    pub fn policy(&self, role: Role) -> &AgentPolicy {
        match role {
            Role::Author => &self.author,
            Role::Critic => &self.critic,
            Role::Selector => &self.selector,
            Role::Voter => &self.voter,
        }
    }
}

/// Mixes seeds into one; splitmix64 finalizer.
pub fn mix_seed(parts: &[u64]) -> u64 {
    parts.iter().fold(0x9E37_79B9_7F4A_7C15u64, |acc, &p| {
        let mut z = acc ^ p.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    })
}

/// The simulated crowd: per-(worker, role) state for every worker.
#[derive(Debug, Clone)]
pub struct Crowd {
    agents: Agents,
    base_seed: u64,
    state: BTreeMap<(usize, Role), AgentState>,
}

#[derive(Debug, Clone)]
struct AgentState {
    rng: ChaCha8Rng,
    calls: usize,
}

impl Crowd {
    pub fn new(agents: Agents, base_seed: u64) -> Self {
        Crowd {
            agents,
            base_seed,
            state: BTreeMap::new(),
        }
    }

    /// Worker `worker` answers `task`.
    pub fn act(&mut self, worker: usize, task: &TaskSpec) -> SubmissionPayload {
        let role = Role::for_task(task.kind);
        let policy = self.agents.policy(role).clone();
        let base = self.base_seed;
        let st = self
            .state
            .entry((worker, role))
            .or_insert_with(|| AgentState {
                rng: ChaCha8Rng::seed_from_u64(mix_seed(&[
                    base,
                    policy.seed,
                    worker as u64,
                    role as u64,
                ])),
                calls: 0,
            });
        let call = st.calls;
        st.calls += 1;
        respond(&policy.kind, worker, call, task, &mut st.rng)
    }
}

const IDEAS: [&str; 8] = [
    "the missing thing had been hidden on purpose",
    "the neighbor knew more than they let on",
    "the story were told over a single night",
    "the grandmother's voice appeared in a letter",
    "the hero had to give something up to get it back",
    "the weather mirrored the hero's mood",
    "a small animal led the way",
    "the ending returned to the opening image",
];

const DETAILS: [&str; 6] = [
    "A clock ticks somewhere in the dark.",
    "Rain starts to tap against the window.",
    "A dog barks twice and then goes quiet.",
    "The smell of bread drifts in from next door.",
    "Footsteps fade down the hallway.",
    "A draft lifts the corner of a paper.",
];

fn respond(
    policy: &PolicyKind,
    worker: usize,
    call: usize,
    task: &TaskSpec,
    rng: &mut ChaCha8Rng,
) -> SubmissionPayload {
    match task.kind {
        TaskKind::WriteScene | TaskKind::ReviseScene | TaskKind::EditSceneControl => {
            SubmissionPayload::Candidate {
                text: write_text(policy, worker, call, task, rng),
            }
        }
        TaskKind::WriteCritique => critique(policy, call, task, rng),
        TaskKind::SelectScenes | TaskKind::SelectScenesControl => select(policy, call, task, rng),
        _ => vote(policy, call, task, rng),
    }
}

fn scripted(outputs: &[String], call: usize) -> Option<&str> {
    (!outputs.is_empty()).then(|| outputs[call % outputs.len()].as_str())
}

/// Substitutes `{scene}` (1-based), `{index}`, `{worker}`, `{call}`,
/// `{goal}`, `{suggestion}` and `{prompt}`.
pub fn render_template(template: &str, worker: usize, call: usize, task: &TaskSpec) -> String {
    let scene = task.scene_index.unwrap_or(0);
    template
        .replace("{scene}", &(scene + 1).to_string())
        .replace("{index}", &scene.to_string())
        .replace("{worker}", &worker.to_string())
        .replace("{call}", &call.to_string())
        .replace("{goal}", task.context.goal.as_deref().unwrap_or(""))
        .replace(
            "{suggestion}",
            task.context.suggestion.as_deref().unwrap_or(""),
        )
        .replace("{prompt}", &task.context.prompt)
}

fn write_text(
    policy: &PolicyKind,
    worker: usize,
    call: usize,
    task: &TaskSpec,
    rng: &mut ChaCha8Rng,
) -> String {
    let scene = task.scene_index.unwrap_or(0);
    let fresh = match policy {
        PolicyKind::TemplateAuthor { template } => render_template(template, worker, call, task),
        PolicyKind::ScriptedSequence { outputs } => scripted(outputs, call)
            .map(str::to_owned)
            .unwrap_or_else(|| format!("Scene {} by worker {worker}.", scene + 1)),
        _ => format!(
            "Scene {} opens as worker {worker} imagines it. {}",
            scene + 1,
            DETAILS[rng.gen_range(0..DETAILS.len())]
        ),
    };
    let fresh = if fresh.trim().is_empty() {
        format!("Scene {}.", scene + 1)
    } else {
        fresh
    };
    if task.kind == TaskKind::WriteScene {
        return fresh;
    }
    // revisions edit the existing scene rather than starting over
    let current = task
        .context
        .story
        .get(scene)
        .map(|s| strip_markers(s))
        .unwrap_or_default();
    let mut text = format!("{current} {fresh}");
    if text.chars().count() > crate::domain::MAX_SCENE_CHARS {
        text = fresh;
    }
    text.trim().to_owned()
}

fn critique(
    policy: &PolicyKind,
    call: usize,
    task: &TaskSpec,
    rng: &mut ChaCha8Rng,
) -> SubmissionPayload {
    let scenes = task.context.story.len().max(1);
    let liked = rng.gen_range(0..scenes) + 1;
    let wished = rng.gen_range(0..scenes) + 1;
    let what_if = match policy {
        PolicyKind::ScriptedSequence { outputs } => scripted(outputs, call)
            .map(str::to_owned)
            .unwrap_or_else(|| "What if it were shorter?".into()),
        _ => format!("What if {}?", IDEAS[rng.gen_range(0..IDEAS.len())]),
    };
    SubmissionPayload::Critique {
        like: format!("I like how scene {liked} sets the mood."),
        wish: format!("I wish scene {wished} moved faster."),
        what_if,
    }
}

fn select(
    policy: &PolicyKind,
    call: usize,
    task: &TaskSpec,
    rng: &mut ChaCha8Rng,
) -> SubmissionPayload {
    let story = &task.context.story;
    let selected: BTreeSet<usize> = match policy {
        PolicyKind::UniformRandom { select_p } => (0..story.len())
            .filter(|_| rng.gen_bool(select_p.clamp(0.0, 1.0)))
            .collect(),
        PolicyKind::MarkerSeeking {
            marker,
            detect_p,
            background_p,
        } => story
            .iter()
            .enumerate()
            .filter(|(_, text)| {
                let p = if text.contains(marker.as_str()) {
                    *detect_p
                } else {
                    *background_p
                };
                rng.gen_bool(p.clamp(0.0, 1.0))
            })
            .map(|(i, _)| i)
            .collect(),
        PolicyKind::ScriptedSequence { outputs } => scripted(outputs, call)
            .unwrap_or("")
            .split(',')
            .filter_map(|s| s.trim().parse::<usize>().ok())
            .filter(|&i| i < story.len())
            .collect(),
        PolicyKind::TemplateAuthor { .. } => [rng.gen_range(0..story.len().max(1))].into(),
    };
    let suggestions = if task.kind == TaskKind::SelectScenes {
        let goal = task.context.goal.as_deref().unwrap_or("the goal");
        selected
            .iter()
            .map(|&i| {
                let goal = goal.trim_end_matches(['?', '.']);
                let mut text = format!("Rework scene {} so that it answers: {goal}.", i + 1);
                if text.chars().count() > crate::domain::MAX_SENTENCE_CHARS {
                    text = format!("Rework scene {} toward the goal.", i + 1);
                }
                (i, text)
            })
            .collect()
    } else {
        BTreeMap::new()
    };
    SubmissionPayload::SceneSelection {
        selected,
        suggestions,
    }
}

fn vote(
    policy: &PolicyKind,
    call: usize,
    task: &TaskSpec,
    rng: &mut ChaCha8Rng,
) -> SubmissionPayload {
    let options = &task.context.options;
    let index = match policy {
        PolicyKind::ScriptedSequence { outputs } => scripted(outputs, call)
            .and_then(|s| s.trim().parse::<usize>().ok())
            .unwrap_or(0),
        PolicyKind::TemplateAuthor { .. } => 0,
        _ => rng.gen_range(0..options.len().max(1)),
    };
    let choice = options
        .get(index % options.len().max(1))
        .map(|o| o.id.clone())
        .unwrap_or_else(|| "none".into());
    SubmissionPayload::Vote { choice }
}
