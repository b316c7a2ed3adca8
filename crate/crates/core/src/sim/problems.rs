//! Synthetic benchmark stories and problem injection.
//!
//! Every afflicted scene carries a marker token, so detection can be scored
//! without any literary judgment.

use std::collections::BTreeSet;
use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Every marker starts with this.
pub const MARKER_PREFIX: &str = "[[problem:";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchmarkProblemKind {
    AbruptEnding,
    ExtraCharacters,
    OddDialogue,
    PovChange,
    Typos,
    TellNotShow,
}

impl BenchmarkProblemKind {
    pub const ALL: [BenchmarkProblemKind; 6] = [
        BenchmarkProblemKind::AbruptEnding,
        BenchmarkProblemKind::ExtraCharacters,
        BenchmarkProblemKind::OddDialogue,
        BenchmarkProblemKind::PovChange,
        BenchmarkProblemKind::Typos,
        BenchmarkProblemKind::TellNotShow,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BenchmarkProblemKind::AbruptEnding => "abrupt_ending",
            BenchmarkProblemKind::ExtraCharacters => "extra_characters",
            BenchmarkProblemKind::OddDialogue => "odd_dialogue",
            BenchmarkProblemKind::PovChange => "pov_change",
            BenchmarkProblemKind::Typos => "typos",
            BenchmarkProblemKind::TellNotShow => "tell_not_show",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }

    /// The token embedded in each afflicted scene, e.g. `[[problem:typos]]`.
    pub fn marker(self) -> String {
        format!("{MARKER_PREFIX}{}]]", self.name())
    }
}

impl fmt::Display for BenchmarkProblemKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProblemError {
    #[error("story has {0} scenes; problem injection needs at least 2")]
    TooShortStory(usize),
}

const NAMES: [&str; 6] = ["Kaley", "Maren", "Tobias", "Iris", "Dev", "Noor"];
const PLACES: [&str; 6] = [
    "the attic",
    "the old library",
    "the harbor",
    "the orchard",
    "the night market",
    "her grandmother's kitchen",
];
const OBJECTS: [&str; 5] = [
    "a blue elephant doll",
    "a brass key",
    "a faded photograph",
    "a music box",
    "a torn map",
];
const BEATS: [&str; 6] = [
    "notices that something is missing",
    "follows a trail of small clues",
    "asks a neighbor for help",
    "finds a note written in an unfamiliar hand",
    "confronts the person who took it",
    "brings it home at last",
];

/// A template-generated story with one scene per beat, cycling the beats
/// when more scenes are requested.
pub fn synthetic_story(scene_count: usize, seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hero = NAMES[rng.gen_range(0..NAMES.len())];
    let object = OBJECTS[rng.gen_range(0..OBJECTS.len())];
    (0..scene_count)
        .map(|i| {
            let place = PLACES[rng.gen_range(0..PLACES.len())];
            let beat = BEATS[i % BEATS.len()];
            format!(
                "{hero} walks into {place} carrying {object}. There, {hero} {beat}. \
                 The light is low and the floorboards creak as {hero} thinks about what comes next."
            )
        })
        .collect()
}

/// Applies one problem to a story and returns the mutated scenes with the
/// set of afflicted indices. Deterministic in `seed`.
pub fn inject_problem(
    scenes: &[String],
    kind: BenchmarkProblemKind,
    seed: u64,
) -> Result<(Vec<String>, BTreeSet<usize>), ProblemError> {
    let n = scenes.len();
    if n < 2 {
        return Err(ProblemError::TooShortStory(n));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let afflicted: BTreeSet<usize> = match kind {
        BenchmarkProblemKind::AbruptEnding => [n - 1].into(),
        BenchmarkProblemKind::ExtraCharacters => (1..n).step_by(2).collect(),
        BenchmarkProblemKind::OddDialogue => (0..n).filter(|i| i % 3 == 1).collect(),
        BenchmarkProblemKind::PovChange => (n / 2..n).collect(),
        BenchmarkProblemKind::Typos | BenchmarkProblemKind::TellNotShow => {
            let mut all: Vec<usize> = (0..n).collect();
            all.shuffle(&mut rng);
            all.into_iter().take((n / 3).max(1)).collect()
        }
    };
    let marker = kind.marker();
    let mutated = scenes
        .iter()
        .enumerate()
        .map(|(i, text)| {
            if !afflicted.contains(&i) {
                return text.clone();
            }
            let body = match kind {
                BenchmarkProblemKind::AbruptEnding => {
                    "Suddenly everyone wakes up. It was all a dream, and none of it ever happened. The end.".to_owned()
                }
                BenchmarkProblemKind::ExtraCharacters => format!(
                    "{text} Then Captain Ormsby, Aunt Velma and a juggler named Pip arrive, \
                     introduce themselves at length, and are never mentioned again."
                ),
                BenchmarkProblemKind::OddDialogue => format!(
                    "{text} \"Greetings, fellow human, I am experiencing the emotion of surprise,\" \
                     says the neighbor. \"Indeed, the weather is weather,\" comes the reply."
                ),
                BenchmarkProblemKind::PovChange => format!(
                    "I could not believe it. {text} I told myself I would never tell anyone what I saw."
                ),
                BenchmarkProblemKind::Typos => typos(text, &mut rng),
                BenchmarkProblemKind::TellNotShow => format!(
                    "{text} She was sad. She was very sad. Then she was happy, which was a big change in her feelings."
                ),
            };
            format!("{body} {marker}")
        })
        .collect();
    Ok((mutated, afflicted))
}

/// Swaps two adjacent letters in roughly every third longer word.
fn typos(text: &str, rng: &mut ChaCha8Rng) -> String {
    text.split(' ')
        .map(|word| {
            let chars: Vec<char> = word.chars().collect();
            if chars.len() > 4 && chars.iter().all(|c| c.is_alphabetic()) && rng.gen_bool(0.35) {
                let mut chars = chars;
                let i = rng.gen_range(1..chars.len() - 2);
                chars.swap(i, i + 1);
                chars.into_iter().collect()
            } else {
                word.to_owned()
            }
        })
        .collect::<Vec<_>>()
        .join(" ")
}

/// Removes every marker token from `text`.
pub fn strip_markers(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut rest = text;
    while let Some(start) = rest.find(MARKER_PREFIX) {
        out.push_str(&rest[..start]);
        match rest[start..].find("]]") {
            Some(end) => rest = &rest[start + end + 2..],
            None => {
                rest = "";
            }
        }
    }
    out.push_str(rest);
    out.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Indices of scenes carrying any marker.
pub fn marked_scenes(scenes: &[String]) -> BTreeSet<usize> {
    scenes
        .iter()
        .enumerate()
        .filter(|(_, s)| s.contains(MARKER_PREFIX))
        .map(|(i, _)| i)
        .collect()
}

/// The problem kind named by the first marker in `scenes`, if any.
pub fn detect_kind(scenes: &[String]) -> Option<BenchmarkProblemKind> {
    scenes.iter().find_map(|s| {
        let start = s.find(MARKER_PREFIX)? + MARKER_PREFIX.len();
        let end = s[start..].find("]]")? + start;
        BenchmarkProblemKind::from_name(&s[start..end])
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn afflicted_sets() {
        let story = synthetic_story(6, 1);
        let set = |k| inject_problem(&story, k, 3).unwrap().1;
        assert_eq!(set(BenchmarkProblemKind::AbruptEnding), [5].into());
        assert_eq!(set(BenchmarkProblemKind::PovChange), [3, 4, 5].into());
        assert_eq!(set(BenchmarkProblemKind::ExtraCharacters), [1, 3, 5].into());
        assert_eq!(set(BenchmarkProblemKind::OddDialogue), [1, 4].into());
        assert_eq!(set(BenchmarkProblemKind::Typos).len(), 2);
        assert_eq!(set(BenchmarkProblemKind::TellNotShow).len(), 2);
    }

    #[test]
    fn markers_exactly_in_afflicted_scenes() {
        let story = synthetic_story(6, 9);
        for kind in BenchmarkProblemKind::ALL {
            let (mutated, afflicted) = inject_problem(&story, kind, 5).unwrap();
            assert_eq!(marked_scenes(&mutated), afflicted, "{kind}");
            assert_eq!(detect_kind(&mutated), Some(kind));
            for i in 0..6 {
                if !afflicted.contains(&i) {
                    assert_eq!(mutated[i], story[i]);
                }
            }
        }
    }

    #[test]
    fn injection_is_deterministic() {
        let story = synthetic_story(6, 2);
        let a = inject_problem(&story, BenchmarkProblemKind::Typos, 11).unwrap();
        let b = inject_problem(&story, BenchmarkProblemKind::Typos, 11).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.0, story);
    }

    #[test]
    fn too_short() {
        let story = synthetic_story(1, 0);
        assert_eq!(
            inject_problem(&story, BenchmarkProblemKind::AbruptEnding, 0),
            Err(ProblemError::TooShortStory(1))
        );
    }

    #[test]
    fn strip() {
        assert_eq!(strip_markers("a [[problem:typos]] b"), "a b");
        assert_eq!(strip_markers("plain"), "plain");
        assert_eq!(strip_markers("x [[problem:open"), "x");
    }
}
