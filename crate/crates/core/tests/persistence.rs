use std::fs;
use std::path::Path;
use std::sync::Arc;

use storyloop_core::domain::{Phase, StoryConfig, StoryId, WorkerId};
use storyloop_core::eventlog::{read_log, replay, write_log, EventPayload, FileStore, LogError};
use storyloop_core::service::{ManualClock, ServiceError, TaskService};
use storyloop_core::sim::agents::{Agents, Crowd};
use storyloop_core::sim::scenario::{worker_name, SIM_EPOCH};

const PROMPT: &str =
    "A lighthouse keeper finds a letter addressed to someone who died a century ago.";

fn open(dir: &Path, clock: &Arc<ManualClock>) -> Result<TaskService, ServiceError> {
    TaskService::open(Box::new(FileStore::open(dir)?), clock.clone(), 5)
}

/// Honest fetch-and-submit cycles until `stop` holds or `limit` operations pass.
fn drive(
    svc: &TaskService,
    clock: &ManualClock,
    crowd: &mut Crowd,
    limit: usize,
    stop: impl Fn(&TaskService) -> bool,
) {
    for op in 0..limit {
        if stop(svc) {
            return;
        }
        let i = op % 64;
        let w = worker_name(i);
        clock.advance_ms(1000);
        if let Some((task, a)) = svc.fetch_task(&w).unwrap() {
            let payload = crowd.act(i, &task);
            svc.submit_result(&w, &a.assignment_id, payload).unwrap();
        }
    }
    panic!("did not reach the stop condition in {limit} operations");
}

fn small_config() -> StoryConfig {
    StoryConfig {
        scene_count: 3,
        revision_rounds: 2,
        ..StoryConfig::default()
    }
}

#[test]
fn restart_restores_every_story() {
    let dir = tempfile::tempdir().unwrap();
    let clock = Arc::new(ManualClock::new(SIM_EPOCH));
    let mut crowd = Crowd::new(Agents::uniform(3), 3);

    let (story, before, other) = {
        let svc = open(dir.path(), &clock).unwrap();
        let story = svc.create_story(PROMPT, small_config()).unwrap();
        let other = svc.create_story(PROMPT, StoryConfig::control()).unwrap();
        drive(&svc, &clock, &mut crowd, 20_000, |s| {
            s.story_status(&story).unwrap().phase == Phase::CritiqueVoting
        });
        (
            story.clone(),
            svc.story_runtime(&story).unwrap(),
            svc.story_runtime(&other).unwrap(),
        )
    };

    let svc = open(dir.path(), &clock).unwrap();
    assert_eq!(svc.story_runtime(&story).unwrap(), before);
    assert_eq!(svc.story_runtime(&other.state.story_id).unwrap(), other);
    assert_eq!(svc.list_stories().len(), 2);

    // workers keep their condition across the restart
    for a in before.assignments.values() {
        assert_eq!(
            svc.worker(&a.worker_id).unwrap().condition,
            before.state.condition()
        );
    }

    drive(&svc, &clock, &mut crowd, 50_000, |s| {
        s.is_complete(&story).unwrap()
    });
    let live = svc.story_runtime(&story).unwrap();
    assert_eq!(live.state.versions.len(), 3);
    let from_disk = read_log(dir.path().join(format!("{story}.events.ndjson"))).unwrap();
    assert_eq!(replay(&from_disk).unwrap(), live);

    // new stories continue the numbering
    let third = svc.create_story(PROMPT, small_config()).unwrap();
    assert_eq!(third.as_str(), "story-0003");
}

#[test]
fn crash_inside_a_batch_is_finished_on_open() {
    let live_dir = tempfile::tempdir().unwrap();
    let clock = Arc::new(ManualClock::new(SIM_EPOCH));
    let mut crowd = Crowd::new(Agents::uniform(4), 4);
    let svc = open(live_dir.path(), &clock).unwrap();
    let story = svc.create_story(PROMPT, small_config()).unwrap();
    drive(&svc, &clock, &mut crowd, 20_000, |s| {
        s.story_status(&story).unwrap().phase == Phase::DraftVoting(0)
    });
    let after = svc.story_runtime(&story).unwrap();
    let events = svc.events(&story).unwrap();

    // cut the log right after the submission that closed the first task
    let closing = events
        .iter()
        .position(|e| matches!(e.payload, EventPayload::PhaseTransitioned { .. }))
        .unwrap();
    let crashed = tempfile::tempdir().unwrap();
    fs::write(crashed.path().join("stories.idx"), format!("{story}\n")).unwrap();
    write_log(
        crashed.path().join(format!("{story}.events.ndjson")),
        &events[..closing],
    )
    .unwrap();

    let recovered = open(crashed.path(), &clock).unwrap();
    let rt = recovered.story_runtime(&story).unwrap();
    assert_eq!(rt.state, after.state);
    assert_eq!(rt.open_tasks(), after.open_tasks());
    assert_eq!(rt.next_seq, after.next_seq);
}

#[test]
fn torn_tail_is_dropped_and_corruption_reported() {
    let dir = tempfile::tempdir().unwrap();
    let clock = Arc::new(ManualClock::new(SIM_EPOCH));
    let story = {
        let svc = open(dir.path(), &clock).unwrap();
        let story = svc.create_story(PROMPT, small_config()).unwrap();
        svc.fetch_task(&WorkerId::new("someone")).unwrap();
        story
    };
    let path = dir.path().join(format!("{story}.events.ndjson"));
    let clean = fs::read_to_string(&path).unwrap();
    fs::write(&path, format!("{clean}{{\"seq\":3,\"story_")).unwrap();
    let svc = open(dir.path(), &clock).unwrap();
    assert_eq!(svc.events(&story).unwrap().len(), clean.lines().count());
    drop(svc);
    assert_eq!(fs::read_to_string(&path).unwrap(), clean);

    let mut lines: Vec<&str> = clean.lines().collect();
    lines[1] = "{\"seq\":1,\"garbage\":true}";
    fs::write(&path, lines.join("\n") + "\n").unwrap();
    match open(dir.path(), &clock) {
        Err(ServiceError::Log(LogError::Corrupt { seq, .. })) => assert_eq!(seq, 1),
        Err(other) => panic!("unexpected error {other}"),
        Ok(_) => panic!("corrupt log opened"),
    }
}

#[test]
fn unknown_story_lookups() {
    let clock = Arc::new(ManualClock::new(SIM_EPOCH));
    let svc = TaskService::in_memory(clock, 1);
    let missing = StoryId::new("story-0042");
    assert_eq!(
        svc.story_status(&missing).unwrap_err().code(),
        "unknown-story"
    );
    assert_eq!(svc.events(&missing).unwrap_err().code(), "unknown-story");
    assert_eq!(
        svc.export_story(&missing, None).unwrap_err().code(),
        "unknown-story"
    );
}
