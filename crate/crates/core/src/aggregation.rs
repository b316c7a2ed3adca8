//! Election and quorum arithmetic.
//!
//! Everything here is a pure function of its arguments. Ties are broken by
//! submission time and then by id, never by the order of the input lists, so
//! results are stable under replay.

use std::cmp::Reverse;
use std::collections::BTreeMap;

use thiserror::Error;

use crate::domain::{Critique, Goal, ItemId, SceneSelectionBallot, Timestamp, Vote};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AggregationError {
    #[error("election has no votes")]
    EmptyElection,
    #[error("vote references unknown choice `{0}`")]
    UnknownChoice(ItemId),
    #[error("no ballots to count")]
    NoBallots,
    #[error("ballot selects scene {scene} but the story has {scene_count} scenes")]
    SceneOutOfRange { scene: usize, scene_count: usize },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

/// Vote counts per choice.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tally {
    pub counts: BTreeMap<ItemId, usize>,
    pub total_votes: usize,
}

impl Tally {
    /// Counts `votes`; every candidate appears in `counts`, possibly with zero.
    pub fn count(
        votes: &[Vote],
        candidates: &[(ItemId, Timestamp)],
    ) -> Result<Tally, AggregationError> {
        let mut counts: BTreeMap<ItemId, usize> =
            candidates.iter().map(|(id, _)| (id.clone(), 0)).collect();
        for vote in votes {
            match counts.get_mut(&vote.choice) {
                Some(n) => *n += 1,
                None => return Err(AggregationError::UnknownChoice(vote.choice.clone())),
            }
        }
        Ok(Tally {
            counts,
            total_votes: votes.len(),
        })
    }
}

/// Returns the choice with the most votes. Ties go to the earliest
/// submitted candidate, then to the lexicographically smallest id.
pub fn tally_plurality(
    votes: &[Vote],
    candidates: &[(ItemId, Timestamp)],
) -> Result<ItemId, AggregationError> {
    if votes.is_empty() {
        return Err(AggregationError::EmptyElection);
    }
    let tally = Tally::count(votes, candidates)?;
    let winner = candidates
        .iter()
        .min_by_key(|(id, at)| (Reverse(tally.counts[id]), *at, id.clone()))
        .map(|(id, _)| id.clone())
        .expect("votes reference candidates, so candidates is non-empty");
    Ok(winner)
}

/// Elects a critique by plurality and returns its what-if as the goal.
pub fn elect_goal(
    critiques: &[Critique],
    votes: &[Vote],
    round: u32,
) -> Result<Goal, AggregationError> {
    let pool: Vec<(ItemId, Timestamp)> = critiques
        .iter()
        .map(|c| (c.id.clone(), c.submitted_at))
        .collect();
    let winner = tally_plurality(votes, &pool)?;
    let critique = critiques
        .iter()
        .find(|c| c.id == winner)
        .expect("winner is drawn from the critique pool");
    Ok(Goal {
        source_critique: critique.id.clone(),
        text: critique.what_if.clone(),
        round,
    })
}

/// Per-scene selection counts.
pub fn selection_counts(
    ballots: &[SceneSelectionBallot],
    scene_count: usize,
) -> Result<Vec<usize>, AggregationError> {
    let mut counts = vec![0usize; scene_count];
    for ballot in ballots {
        for &scene in &ballot.selected {
            match counts.get_mut(scene) {
                Some(n) => *n += 1,
                None => return Err(AggregationError::SceneOutOfRange { scene, scene_count }),
            }
        }
    }
    Ok(counts)
}

/// Scenes selected by at least `threshold` ballots, ascending.
///
/// When no scene reaches the threshold, the single most-selected scene is
/// unlocked instead (lowest index on ties) so that every round edits
/// something.
pub fn compute_unlock_set(
    ballots: &[SceneSelectionBallot],
    scene_count: usize,
    threshold: usize,
) -> Result<Vec<usize>, AggregationError> {
    if ballots.is_empty() {
        return Err(AggregationError::NoBallots);
    }
    if scene_count == 0 {
        return Err(AggregationError::InvalidParameter(
            "scene_count must be positive".into(),
        ));
    }
    let counts = selection_counts(ballots, scene_count)?;
    let unlocked: Vec<usize> = (0..scene_count)
        .filter(|&i| counts[i] >= threshold)
        .collect();
    if !unlocked.is_empty() {
        return Ok(unlocked);
    }
    let best = (0..scene_count)
        .min_by_key(|&i| (Reverse(counts[i]), i))
        .expect("scene_count is positive");
    Ok(vec![best])
}

/// `P[Binomial(n_selectors, p_select) >= threshold]`.
pub fn unlock_probability(
    n_selectors: u32,
    p_select: f64,
    threshold: u32,
) -> Result<f64, AggregationError> {
    if !(0.0..=1.0).contains(&p_select) {
        return Err(AggregationError::InvalidParameter(format!(
            "p_select {p_select} outside [0, 1]"
        )));
    }
    if threshold > n_selectors {
        return Err(AggregationError::InvalidParameter(format!(
            "threshold {threshold} exceeds {n_selectors} selectors"
        )));
    }
    let n = n_selectors as i32;
    let q = 1.0 - p_select;
    let mut total = 0.0;
    for k in threshold as i32..=n {
        total += binomial(n as u32, k as u32) * p_select.powi(k) * q.powi(n - k);
    }
    Ok(total.min(1.0))
}

fn binomial(n: u32, k: u32) -> f64 {
    let k = k.min(n - k);
    (0..k).fold(1.0, |acc, i| acc * f64::from(n - i) / f64::from(i + 1))
}
