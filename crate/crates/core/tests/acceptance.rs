//! Acceptance gate. Runs criteria 1 to 8 and prints one PASS/FAIL line per
//! criterion; exits nonzero if any fails.

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use storyloop_core::aggregation::{compute_unlock_set, tally_plurality, unlock_probability};
use storyloop_core::domain::{
    AssignmentId, Condition, ItemId, Phase, SceneSelectionBallot, StoryConfig, StoryId, Timestamp,
    Vote, WorkerId,
};
use storyloop_core::engine::{self, TaskKind, TaskSpec};
use storyloop_core::eventlog::{replay, Event, EventPayload, StoryRuntime};
use storyloop_core::service::{
    Accepted, Assignment, ManualClock, StoryStatus, SubmissionPayload, TaskService,
};
use storyloop_core::sim::agents::{mix_seed, AgentPolicy, Agents, Crowd, PolicyKind};
use storyloop_core::sim::problems::BenchmarkProblemKind;
use storyloop_core::sim::scenario::{
    run_on, run_scenario, worker_name, InProcessPort, RunSpec, SimError, TaskPort, SIM_EPOCH,
};
use storyloop_core::sim::transcript::{measure_detection, Transcript};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if $cond {
        } else {
            return Err(format!($($fmt)+));
        }
    };
}

/// A port that snapshots the live story after every operation.
struct RecordingPort {
    inner: InProcessPort,
    story: Option<StoryId>,
    snapshots: Vec<StoryRuntime>,
}

impl RecordingPort {
    fn new(seed: u64) -> Self {
        RecordingPort {
            inner: InProcessPort::new(seed),
            story: None,
            snapshots: Vec::new(),
        }
    }

    fn snap(&mut self) {
        if let Some(story) = &self.story {
            self.snapshots
                .push(self.inner.service.story_runtime(story).unwrap());
        }
    }
}

impl TaskPort for RecordingPort {
    fn create_story(
        &mut self,
        prompt: &str,
        config: StoryConfig,
        draft: Option<Vec<String>>,
    ) -> Result<StoryId, SimError> {
        let id = self.inner.create_story(prompt, config, draft)?;
        self.story = Some(id.clone());
        self.snap();
        Ok(id)
    }

    fn fetch(&mut self, worker: &WorkerId) -> Result<Option<(TaskSpec, Assignment)>, SimError> {
        let r = self.inner.fetch(worker)?;
        if r.is_some() {
            self.snap();
        }
        Ok(r)
    }

    fn submit(
        &mut self,
        worker: &WorkerId,
        assignment: &AssignmentId,
        payload: SubmissionPayload,
    ) -> Result<Accepted, SimError> {
        let r = self.inner.submit(worker, assignment, payload)?;
        self.snap();
        Ok(r)
    }

    fn status(&mut self, story: &StoryId) -> Result<StoryStatus, SimError> {
        self.inner.status(story)
    }

    fn events(&mut self, story: &StoryId) -> Result<Vec<Event>, SimError> {
        self.inner.events(story)
    }

    fn tick(&mut self, ms: u64) {
        self.inner.tick(ms)
    }
}

struct Recorded {
    label: String,
    port: RecordingPort,
    story: StoryId,
    transcript: Transcript,
}

fn record(spec: &RunSpec) -> Result<Recorded, String> {
    let mut port = RecordingPort::new(spec.seed);
    let (story, transcript) =
        run_on(&mut port, spec).map_err(|e| format!("{}: {e}", spec.label))?;
    Ok(Recorded {
        label: spec.label.clone(),
        port,
        story,
        transcript,
    })
}

// ---- criterion 1 -------------------------------------------------------

/// Plurality by explicit scan, written independently of the library.
fn plurality_oracle(votes: &[usize], times: &[u64], ids: &[&str]) -> usize {
    let mut counts = vec![0usize; ids.len()];
    for &v in votes {
        counts[v] += 1;
    }
    let top = *counts.iter().max().unwrap();
    let mut best: Option<usize> = None;
    for i in 0..ids.len() {
        if counts[i] != top {
            continue;
        }
        best = Some(match best {
            None => i,
            Some(b) if times[i] < times[b] || (times[i] == times[b] && ids[i] < ids[b]) => i,
            Some(b) => b,
        });
    }
    best.unwrap()
}

/// All non-decreasing sequences of length `len` over `0..c`.
fn multisets(c: usize, len: usize) -> Vec<Vec<usize>> {
    fn go(c: usize, len: usize, start: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == len {
            out.push(cur.clone());
            return;
        }
        for x in start..c {
            cur.push(x);
            go(c, len, x, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    go(c, len, 0, &mut Vec::new(), &mut out);
    out
}

fn criterion_1() -> Outcome {
    const IDS: [&str; 5] = ["delta", "alpha", "echo", "bravo", "charlie"];
    let started = Instant::now();
    let mut elections = 0usize;
    for c in 1..=5 {
        let ids = &IDS[..c];
        let time_patterns: Vec<Vec<u64>> = vec![
            vec![0; c],
            (0..c as u64).collect(),
            (0..c as u64).rev().collect(),
            (0..c as u64).map(|i| i % 2).collect(),
        ];
        for times in &time_patterns {
            let pool: Vec<(ItemId, Timestamp)> = ids
                .iter()
                .zip(times)
                .map(|(id, t)| (ItemId::new(*id), Timestamp(*t)))
                .collect();
            ensure!(
                tally_plurality(&[], &pool).is_err(),
                "empty election over {c} candidates was not rejected"
            );
            for v in 1..=7 {
                for multiset in multisets(c, v) {
                    let expected = ids[plurality_oracle(&multiset, times, ids)];
                    for order in [multiset.clone(), multiset.iter().rev().copied().collect()] {
                        let votes: Vec<Vote> = order
                            .iter()
                            .enumerate()
                            .map(|(k, &x)| Vote {
                                voter: WorkerId::new(format!("v{k}")),
                                choice: ItemId::new(ids[x]),
                                submitted_at: Timestamp(k as u64),
                            })
                            .collect();
                        let got = tally_plurality(&votes, &pool).map_err(|e| e.to_string())?;
                        ensure!(
                            got.as_str() == expected,
                            "votes {order:?} times {times:?}: library {got}, oracle {expected}"
                        );
                        elections += 1;
                    }
                }
            }
        }
    }
    let secs = started.elapsed().as_secs_f64();
    ensure!(secs < 5.0, "sweep took {secs:.2}s");
    Ok(format!(
        "{elections} elections agree with the oracle in {secs:.2}s"
    ))
}

// ---- criterion 2 -------------------------------------------------------

fn criterion_2() -> Outcome {
    const ANALYTIC: f64 = 848.0 / 1024.0;
    // subsets of 10 selectors with at least 4 members
    let counted = (0u32..1 << 10).filter(|m| m.count_ones() >= 4).count();
    ensure!(counted == 848, "enumeration gave {counted}");
    for (p, exact) in [(0.0, 0.0), (0.5, ANALYTIC), (1.0, 1.0)] {
        let got = unlock_probability(10, p, 4).map_err(|e| e.to_string())?;
        ensure!(
            got == exact,
            "unlock_probability(10, {p}, 4) = {got}, want {exact}"
        );
    }
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let mut freqs = Vec::new();
    for p in [0.0, 0.5, 1.0] {
        let mut hits = 0usize;
        for _ in 0..10_000 {
            let ballots: Vec<SceneSelectionBallot> = (0..10)
                .map(|w| SceneSelectionBallot {
                    id: ItemId::new(format!("b{w}")),
                    worker: WorkerId::new(format!("w{w}")),
                    selected: (0..6).filter(|_| rng.gen_bool(p)).collect(),
                    suggestions: Default::default(),
                    submitted_at: Timestamp(w),
                })
                .collect();
            if compute_unlock_set(&ballots, 6, 4)
                .map_err(|e| e.to_string())?
                .contains(&5)
            {
                hits += 1;
            }
        }
        freqs.push(hits as f64 / 10_000.0);
    }
    ensure!(freqs[0] == 0.0, "p=0 unlock frequency {}", freqs[0]);
    ensure!(freqs[2] == 1.0, "p=1 unlock frequency {}", freqs[2]);
    let err = (freqs[1] - ANALYTIC).abs();
    ensure!(
        err <= 0.02,
        "p=0.5 frequency {} is {err:.4} from {ANALYTIC:.4}",
        freqs[1]
    );
    Ok(format!(
        "p=0.5 frequency {:.4} vs analytic {ANALYTIC:.4} (|diff| {err:.4}); p=0 and p=1 exact",
        freqs[1]
    ))
}

// ---- criteria 3 and 4 --------------------------------------------------

/// Task count by walking the transition table: a draft round is one
/// authoring and one voting task per scene; a revision round adds critique
/// authoring and voting, one selection, and suggestion vote, rewrite and
/// rewrite vote per unlocked scene.
fn walk_task_count(config: &StoryConfig, unlock_sizes: &[usize]) -> usize {
    let mut tasks = 0;
    for _scene in 0..config.scene_count {
        tasks += 1; // write
        tasks += 1; // vote
    }
    for &n in unlock_sizes {
        tasks += 1; // critique authoring
        tasks += 1; // critique vote
        tasks += 1; // scene selection
        for _ in 0..n {
            tasks += 3;
        }
    }
    tasks
}

fn default_agents() -> Agents {
    Agents::uniform(7)
}

fn criterion_3(mn: &Recorded) -> Outcome {
    let t = &mn.transcript;
    ensure!(t.completed, "run did not complete");
    ensure!(t.goals.len() == 5, "{} goals", t.goals.len());
    ensure!(t.versions.len() == 6, "{} versions", t.versions.len());
    ensure!(
        t.draft_task_count() == 12,
        "{} draft tasks",
        t.draft_task_count()
    );
    let sizes: Vec<usize> = t.unlocks.iter().map(|u| u.scenes.len()).collect();
    ensure!(sizes.len() == 5, "{} unlock sets", sizes.len());
    let expected = walk_task_count(&t.config, &sizes);
    ensure!(
        t.tasks.len() == expected,
        "{} tasks, walk says {expected}",
        t.tasks.len()
    );

    let spec = RunSpec::new(StoryConfig::default(), default_agents(), 7);
    let started = Instant::now();
    let again = run_scenario(&spec).map_err(|e| e.to_string())?;
    let secs = started.elapsed().as_secs_f64();
    ensure!(again.to_json() == t.to_json(), "rerun transcript differs");
    ensure!(secs < 10.0, "run took {secs:.2}s");
    Ok(format!(
        "5 goals, 6 versions, 12 draft tasks, {} tasks total, identical rerun in {secs:.2}s",
        t.tasks.len()
    ))
}

fn criterion_4(mn: &Recorded, control: &Recorded) -> Outcome {
    let t = &control.transcript;
    ensure!(t.completed, "control run did not complete");
    for kind in [
        TaskKind::WriteCritique,
        TaskKind::VoteCritique,
        TaskKind::VoteSuggestion,
    ] {
        ensure!(
            t.count_kind(kind) == 0,
            "control run has {} {kind} tasks",
            t.count_kind(kind)
        );
    }
    ensure!(t.goals.is_empty(), "control run elected goals");
    ensure!(
        t.draft_task_count() == mn.transcript.draft_task_count(),
        "draft tasks: control {}, mn {}",
        t.draft_task_count(),
        mn.transcript.draft_task_count()
    );
    let mn_reflection = mn.transcript.count_kind(TaskKind::WriteCritique)
        + mn.transcript.count_kind(TaskKind::VoteCritique);
    ensure!(
        mn_reflection == 10,
        "mn run has {mn_reflection} reflection tasks"
    );
    Ok(format!(
        "control: 0 reflection/suggestion tasks, {} draft tasks (mn: {} reflection tasks)",
        t.draft_task_count(),
        mn_reflection
    ))
}

// ---- criterion 5 -------------------------------------------------------

fn random_spec(i: u64) -> RunSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[5, i]));
    let condition = if i.is_multiple_of(2) {
        Condition::MechanicalNovel
    } else {
        Condition::Control
    };
    let config = StoryConfig {
        scene_count: rng.gen_range(2..=7),
        revision_rounds: rng.gen_range(1..=4),
        condition,
        ..StoryConfig::default()
    };
    let select_p = rng.gen_range(0.05..0.95);
    let mut agents = Agents::uniform(rng.gen());
    agents.selector = AgentPolicy {
        kind: PolicyKind::UniformRandom { select_p },
        seed: rng.gen(),
    };
    let mut spec = RunSpec::new(config, agents, rng.gen());
    spec.label = format!("random-{i:03}");
    spec
}

/// Checks that each version differs from its predecessor only at scenes
/// unlocked in that round, in text and in authorship.
fn locked_scenes_untouched(t: &Transcript) -> Result<usize, String> {
    let mut edits = 0;
    for pair in t.versions.windows(2) {
        let (before, after) = (&pair[0], &pair[1]);
        let round = before.round;
        let unlocked: BTreeSet<usize> = t
            .unlocks
            .iter()
            .find(|u| u.round == round)
            .map(|u| u.scenes.iter().copied().collect())
            .ok_or_else(|| format!("no unlock set for round {round}"))?;
        for i in 0..before.scene_texts.len() {
            let changed = before.scene_texts[i] != after.scene_texts[i]
                || before.scene_authors[i] != after.scene_authors[i];
            if changed {
                edits += 1;
                if !unlocked.contains(&i) {
                    return Err(format!(
                        "{}: version {} changed scene {i} outside unlock set {unlocked:?}",
                        t.story_id, after.version_number
                    ));
                }
            }
        }
    }
    Ok(edits)
}

fn criterion_5(runs: &[Recorded]) -> Outcome {
    ensure!(runs.len() == 100, "{} runs", runs.len());
    let mut edits = 0;
    let mut versions = 0;
    for r in runs {
        ensure!(r.transcript.completed, "{} did not complete", r.label);
        ensure!(
            r.transcript.versions.len() == r.transcript.config.revision_rounds as usize + 1,
            "{}: {} versions",
            r.label,
            r.transcript.versions.len()
        );
        edits += locked_scenes_untouched(&r.transcript).map_err(|e| format!("{}: {e}", r.label))?;
        versions += r.transcript.versions.len();
    }
    ensure!(edits > 0, "no scene was ever edited");
    Ok(format!(
        "100 runs, {versions} versions, {edits} scene edits, all inside unlock sets"
    ))
}

// ---- criterion 6 -------------------------------------------------------

fn through_ndjson(events: &[Event]) -> Result<Vec<Event>, String> {
    events
        .iter()
        .map(|e| serde_json::from_str(&e.to_line()).map_err(|err| format!("seq {}: {err}", e.seq)))
        .collect()
}

fn criterion_6(runs: &[&Recorded]) -> Outcome {
    let mut prefixes = 0;
    for r in runs {
        let live = r
            .port
            .inner
            .service
            .story_runtime(&r.story)
            .map_err(|e| e.to_string())?;
        let events = through_ndjson(
            &r.port
                .inner
                .service
                .events(&r.story)
                .map_err(|e| e.to_string())?,
        )?;
        let replayed = replay(&events).map_err(|e| format!("{}: {e}", r.label))?;
        ensure!(
            replayed == live,
            "{}: replayed final state differs from live",
            r.label
        );
        ensure!(
            replayed.open_tasks() == live.open_tasks(),
            "{}: open tasks differ",
            r.label
        );

        let mut rng =
            ChaCha8Rng::seed_from_u64(mix_seed(&[6, r.label.len() as u64, events.len() as u64]));
        let picks: Vec<&StoryRuntime> = r.port.snapshots.choose_multiple(&mut rng, 10).collect();
        ensure!(
            picks.len() == 10,
            "{}: only {} snapshots",
            r.label,
            r.port.snapshots.len()
        );
        for snap in picks {
            let k = snap.next_seq as usize;
            let prefix =
                replay(&events[..k]).map_err(|e| format!("{} prefix {k}: {e}", r.label))?;
            ensure!(
                &prefix == snap,
                "{}: prefix of {k} events differs from live state",
                r.label
            );
            ensure!(
                prefix.open_tasks() == snap.open_tasks(),
                "{}: open tasks differ at {k}",
                r.label
            );
            prefixes += 1;
        }
    }
    Ok(format!(
        "{} logs replay to the live state; {prefixes} prefixes match",
        runs.len()
    ))
}

// ---- criterion 7 -------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Attack {
    WrongCondition,
    SelfVote,
    Duplicate,
    PostDeadline,
}

impl Attack {
    fn expected(self) -> &'static str {
        match self {
            Attack::WrongCondition => "condition-mismatch",
            Attack::SelfVote => "self-vote",
            Attack::Duplicate => "duplicate-submission",
            Attack::PostDeadline => "expired-assignment",
        }
    }
}

struct Arena {
    svc: TaskService,
    clock: Arc<ManualClock>,
    crowd: Crowd,
    workers: Vec<WorkerId>,
    cursor: usize,
    /// Accepted submissions, for replaying as duplicates.
    history: Vec<(WorkerId, AssignmentId, SubmissionPayload)>,
    accepted: usize,
}

impl Arena {
    fn index(&self, w: &WorkerId) -> usize {
        self.workers.iter().position(|x| x == w).unwrap()
    }

    fn condition(&self, w: &WorkerId) -> Condition {
        self.svc.worker(w).unwrap().condition
    }

    fn submit_honestly(
        &mut self,
        w: &WorkerId,
        task: &TaskSpec,
        a: &Assignment,
    ) -> Result<(), String> {
        let payload = self.crowd.act(self.index(w), task);
        self.svc
            .submit_result(w, &a.assignment_id, payload.clone())
            .map_err(|r| format!("honest submission by {w} rejected: {}", r.code()))?;
        self.history
            .push((w.clone(), a.assignment_id.clone(), payload));
        self.accepted += 1;
        Ok(())
    }

    /// One honest fetch-and-submit by the next worker in line.
    fn step(&mut self) -> Result<(), String> {
        let w = self.workers[self.cursor % self.workers.len()].clone();
        self.cursor += 1;
        self.clock.advance_ms(1000);
        if let Some((task, a)) = self.svc.fetch_task(&w).map_err(|e| e.to_string())? {
            self.submit_honestly(&w, &task, &a)?;
        }
        Ok(())
    }

    /// First worker of `condition` (other than `not`) who is handed a task.
    fn fresh(
        &mut self,
        condition: Condition,
        not: &BTreeSet<WorkerId>,
    ) -> Result<Option<(WorkerId, TaskSpec, Assignment)>, String> {
        for k in 0..self.workers.len() {
            let w = self.workers[(self.cursor + k) % self.workers.len()].clone();
            if not.contains(&w) || self.condition(&w) != condition {
                continue;
            }
            if let Some((task, a)) = self.svc.fetch_task(&w).map_err(|e| e.to_string())? {
                return Ok(Some((w, task, a)));
            }
        }
        Ok(None)
    }

    fn keep_stories_alive(&mut self) -> Result<(), String> {
        for condition in [Condition::MechanicalNovel, Condition::Control] {
            let live = self
                .svc
                .list_stories()
                .iter()
                .any(|s| s.condition == condition && s.phase != Phase::Complete);
            if !live {
                let config = StoryConfig {
                    scene_count: 3,
                    revision_rounds: 2,
                    condition,
                    ..StoryConfig::default()
                };
                self.svc
                    .create_story("A lighthouse keeper finds a letter.", config)
                    .map_err(|e| e.to_string())?;
            }
        }
        Ok(())
    }

    /// Attempts one attack; `None` if its preconditions do not hold now.
    fn attack(&mut self, kind: Attack, rng: &mut ChaCha8Rng) -> Result<Option<String>, String> {
        let condition = if rng.gen_bool(0.5) {
            Condition::MechanicalNovel
        } else {
            Condition::Control
        };
        match kind {
            Attack::WrongCondition => {
                let Some((holder, task, a)) = self.fresh(condition, &BTreeSet::new())? else {
                    return Ok(None);
                };
                let intruder = self
                    .workers
                    .iter()
                    .filter(|w| self.condition(w) != condition)
                    .nth(rng.gen_range(0..10))
                    .cloned()
                    .unwrap();
                let payload = self.crowd.act(self.index(&intruder), &task);
                let code = self
                    .svc
                    .submit_result(&intruder, &a.assignment_id, payload)
                    .err()
                    .map(|r| r.code());
                self.submit_honestly(&holder, &task, &a)?;
                Ok(Some(code.unwrap_or("accepted").to_owned()))
            }
            Attack::SelfVote => {
                let voting = self.svc.list_stories().into_iter().find_map(|s| {
                    let rt = self.svc.story_runtime(&s.story_id).ok()?;
                    let authors = engine::ballot_authors(&rt.state);
                    (!authors.is_empty() && rt.open.as_ref()?.open_slots() > 0)
                        .then_some((s.condition, authors))
                });
                let Some((condition, authors)) = voting else {
                    return Ok(None);
                };
                let Some((voter, task, a)) = self.fresh(condition, &authors)? else {
                    return Ok(None);
                };
                let authors: Vec<&WorkerId> = authors.iter().collect();
                let author = authors[rng.gen_range(0..authors.len())].clone();
                let choice = task.context.options[rng.gen_range(0..task.context.options.len())]
                    .id
                    .clone();
                let code = self
                    .svc
                    .submit_result(
                        &author,
                        &a.assignment_id,
                        SubmissionPayload::Vote { choice },
                    )
                    .err()
                    .map(|r| r.code());
                self.submit_honestly(&voter, &task, &a)?;
                Ok(Some(code.unwrap_or("accepted").to_owned()))
            }
            Attack::Duplicate => {
                if self.history.is_empty() {
                    return Ok(None);
                }
                let (w, a, payload) = self.history[rng.gen_range(0..self.history.len())].clone();
                let code = self
                    .svc
                    .submit_result(&w, &a, payload)
                    .err()
                    .map(|r| r.code());
                Ok(Some(code.unwrap_or("accepted").to_owned()))
            }
            Attack::PostDeadline => {
                let Some((w, task, a)) = self.fresh(condition, &BTreeSet::new())? else {
                    return Ok(None);
                };
                let timeout = StoryConfig::default().task_timeout_secs;
                self.clock
                    .advance_ms(timeout * 1000 + rng.gen_range(1..60_000));
                let payload = self.crowd.act(self.index(&w), &task);
                let code = self
                    .svc
                    .submit_result(&w, &a.assignment_id, payload)
                    .err()
                    .map(|r| r.code());
                // the slot is free again and the worker may take it afresh
                let again = self.svc.fetch_task(&w).map_err(|e| e.to_string())?;
                match again {
                    Some((task, fresh)) if fresh.assignment_id != a.assignment_id => {
                        self.submit_honestly(&w, &task, &fresh)?
                    }
                    Some(_) => return Err("expired assignment handed out again".into()),
                    None => {}
                }
                Ok(Some(code.unwrap_or("accepted").to_owned()))
            }
        }
    }
}

fn criterion_7() -> Outcome {
    let clock = Arc::new(ManualClock::new(SIM_EPOCH));
    let mut arena = Arena {
        svc: TaskService::in_memory(clock.clone(), 71),
        clock,
        crowd: Crowd::new(Agents::uniform(71), 71),
        workers: (0..60).map(worker_name).collect(),
        cursor: 0,
        history: Vec::new(),
        accepted: 0,
    };
    arena.keep_stories_alive()?;
    for w in arena.workers.clone() {
        arena.svc.fetch_task(&w).map_err(|e| e.to_string())?;
        arena.cursor += 1;
        if let Some((task, a)) = arena.svc.fetch_task(&w).map_err(|e| e.to_string())? {
            arena.submit_honestly(&w, &task, &a)?;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(7_000);
    let kinds = [
        Attack::WrongCondition,
        Attack::SelfVote,
        Attack::Duplicate,
        Attack::PostDeadline,
    ];
    let mut per_kind = std::collections::BTreeMap::new();
    let mut attempts = 0;
    let mut wrong = Vec::new();
    let mut idle = 0;
    while attempts < 1000 {
        arena.keep_stories_alive()?;
        for _ in 0..rng.gen_range(1..4) {
            arena.step()?;
        }
        let kind = kinds[rng.gen_range(0..kinds.len())];
        match arena.attack(kind, &mut rng)? {
            Some(code) => {
                attempts += 1;
                idle = 0;
                *per_kind.entry(kind).or_insert(0usize) += 1;
                if code != kind.expected() {
                    wrong.push(format!("{kind:?} got {code}"));
                }
            }
            None => {
                idle += 1;
                ensure!(idle < 10_000, "attacks stopped finding openings");
            }
        }
    }
    ensure!(
        wrong.is_empty(),
        "{} of 1000 misreported, first: {}",
        wrong.len(),
        wrong[0]
    );
    ensure!(
        per_kind.len() == 4,
        "only {} attack kinds exercised",
        per_kind.len()
    );

    // the log holds exactly the honest submissions, each in its worker's condition
    let mut recorded = 0;
    for s in arena.svc.list_stories() {
        for e in arena.svc.events(&s.story_id).map_err(|e| e.to_string())? {
            if let EventPayload::SubmissionRecorded { submission, .. } = &e.payload {
                recorded += 1;
                ensure!(
                    arena.condition(submission.worker()) == s.condition,
                    "condition crossed in {}",
                    s.story_id
                );
            }
        }
    }
    ensure!(
        recorded == arena.accepted,
        "log has {recorded} submissions, {} were accepted",
        arena.accepted
    );
    Ok(format!(
        "1000/1000 rejected with the right code {per_kind:?}"
    ))
}

// ---- criterion 8 -------------------------------------------------------

fn benchmark_spec(kind: BenchmarkProblemKind, detect_p: f64, run: u64) -> RunSpec {
    let config = StoryConfig {
        revision_rounds: 1,
        ..StoryConfig::default()
    };
    let seed = mix_seed(&[8, kind as u64, run]);
    let agents = Agents {
        selector: AgentPolicy::marker_seeking(detect_p, seed),
        ..Agents::uniform(seed)
    };
    let mut spec = RunSpec::new(config, agents, seed).with_problem(kind);
    spec.label = format!("bench-{kind}-{detect_p}-{run}");
    spec
}

fn criterion_8() -> Outcome {
    let mut lines = Vec::new();
    for kind in BenchmarkProblemKind::ALL {
        let mut rates = Vec::new();
        for detect_p in [0.9, 0.3] {
            let transcripts: Vec<Transcript> = (0..200)
                .map(|run| run_scenario(&benchmark_spec(kind, detect_p, run)))
                .collect::<Result<_, _>>()
                .map_err(|e| format!("{kind}: {e}"))?;
            rates.push(
                measure_detection(&transcripts)
                    .map_err(|e| e.to_string())?
                    .unlock_rate,
            );
        }
        ensure!(
            rates[0] > rates[1],
            "{kind}: 0.9 -> {:.3}, 0.3 -> {:.3}",
            rates[0],
            rates[1]
        );
        lines.push(format!("{kind} {:.3}>{:.3}", rates[0], rates[1]));
    }
    Ok(lines.join(", "))
}

// ---- driver ------------------------------------------------------------

fn run(failures: &mut usize, id: u8, name: &str, f: impl FnOnce() -> Outcome) {
    let started = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into()))
    });
    let secs = started.elapsed().as_secs_f64();
    match outcome {
        Ok(detail) => println!("criterion {id} [{name}]: PASS ({detail}) [{secs:.1}s]"),
        Err(reason) => {
            *failures += 1;
            println!("criterion {id} [{name}]: FAIL ({reason}) [{secs:.1}s]");
        }
    }
}

fn main() -> ExitCode {
    let mut failures = 0;
    run(&mut failures, 1, "plurality oracle", criterion_1);
    run(&mut failures, 2, "quorum calibration", criterion_2);

    let recorded = (|| -> Result<(Recorded, Recorded, Vec<Recorded>), String> {
        let mn = record(&RunSpec::new(StoryConfig::default(), default_agents(), 7))?;
        let control = record(&RunSpec::new(StoryConfig::control(), default_agents(), 7))?;
        let random = (0..100)
            .map(|i| record(&random_spec(i)))
            .collect::<Result<Vec<_>, _>>()?;
        Ok((mn, control, random))
    })();
    match &recorded {
        Ok((mn, control, random)) => {
            run(&mut failures, 3, "end-to-end reflect-and-revise run", || {
                criterion_3(mn)
            });
            run(&mut failures, 4, "pipeline shape differential", || {
                criterion_4(mn, control)
            });
            run(&mut failures, 5, "locked-scene safety", || {
                criterion_5(random)
            });
            let all: Vec<&Recorded> = [mn, control].into_iter().chain(random.iter()).collect();
            run(&mut failures, 6, "replay determinism", || criterion_6(&all));
        }
        Err(e) => {
            for (id, name) in [
                (3, "end-to-end reflect-and-revise run"),
                (4, "pipeline shape differential"),
                (5, "locked-scene safety"),
                (6, "replay determinism"),
            ] {
                failures += 1;
                println!("criterion {id} [{name}]: FAIL (simulation failed: {e})");
            }
        }
    }
    run(&mut failures, 7, "constraint enforcement", criterion_7);
    run(
        &mut failures,
        8,
        "benchmark detection ordering",
        criterion_8,
    );

    if failures == 0 {
        println!("acceptance: 8/8 criteria pass");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: {failures} of 8 criteria fail");
        ExitCode::FAILURE
    }
}
