//! Composite rewards and pairwise preference construction.
//!
//! Candidates carry two Likert-scale scores (alignment and fidelity); the
//! composite reward is their mean. Four pairing strategies turn a scored
//! group into (winner, loser, margin) records; pairs under the margin floor
//! are dropped and the output order is deterministic.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PreferenceError {
    #[error("score {value} out of Likert range [1, 5]")]
    ScoreOutOfRange { value: f64 },
    #[error("group {condition_id} needs at least 2 candidates, has {n}")]
    TooFewCandidates { condition_id: String, n: usize },
    #[error("group {condition_id} has duplicate sample id {sample_id}")]
    DuplicateSample { condition_id: String, sample_id: String },
    #[error("unknown pairing strategy {0:?}")]
    UnknownStrategy(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {err}")]
    Parse { line: usize, err: String },
}

/// One scored candidate generation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CandidateScore {
    pub sample_id: String,
    pub r_align: f64,
    pub r_fidelity: f64,
}

impl CandidateScore {
    pub fn composite(&self) -> f64 {
        composite_reward(self.r_align, self.r_fidelity).expect("scores validated on construction")
    }
}

/// All candidates generated for one condition.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PreferenceGroup {
    pub condition_id: String,
    pub candidates: Vec<CandidateScore>,
}

impl PreferenceGroup {
    pub fn validate(&self) -> Result<(), PreferenceError> {
        if self.candidates.len() < 2 {
            return Err(PreferenceError::TooFewCandidates {
                condition_id: self.condition_id.clone(),
                n: self.candidates.len(),
            });
        }
        let mut seen = std::collections::BTreeSet::new();
        for c in &self.candidates {
            for &v in &[c.r_align, c.r_fidelity] {
                if !(1.0..=5.0).contains(&v) {
                    return Err(PreferenceError::ScoreOutOfRange { value: v });
                }
            }
            if !seen.insert(c.sample_id.clone()) {
                return Err(PreferenceError::DuplicateSample {
                    condition_id: self.condition_id.clone(),
                    sample_id: c.sample_id.clone(),
                });
            }
        }
        Ok(())
    }
}

/// One curated training pair.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PreferencePair {
    pub condition_id: String,
    pub winner_id: String,
    pub loser_id: String,
    pub margin: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairStrategy {
    /// All ordered pairs with strictly higher reward first.
    BetterVsWorse,
    /// The single top candidate against every strictly lower one.
    BestVsWorse,
    /// Every strictly higher candidate against the single bottom one.
    BetterVsWorst,
    /// Only (top, bottom).
    BestVsWorst,
}

impl PairStrategy {
    pub const ALL: [PairStrategy; 4] = [
        PairStrategy::BetterVsWorse,
        PairStrategy::BestVsWorse,
        PairStrategy::BetterVsWorst,
        PairStrategy::BestVsWorst,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            PairStrategy::BetterVsWorse => "better_vs_worse",
            PairStrategy::BestVsWorse => "best_vs_worse",
            PairStrategy::BetterVsWorst => "better_vs_worst",
            PairStrategy::BestVsWorst => "best_vs_worst",
        }
    }
}

impl std::str::FromStr for PairStrategy {
    type Err = PreferenceError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "better_vs_worse" => Ok(PairStrategy::BetterVsWorse),
            "best_vs_worse" => Ok(PairStrategy::BestVsWorse),
            "better_vs_worst" => Ok(PairStrategy::BetterVsWorst),
            "best_vs_worst" => Ok(PairStrategy::BestVsWorst),
            other => Err(PreferenceError::UnknownStrategy(other.to_string())),
        }
    }
}

/// Composite reward `r = (r_align + r_fidelity) / 2`.
pub fn composite_reward(r_align: f64, r_fidelity: f64) -> Result<f64, PreferenceError> {
    for &v in &[r_align, r_fidelity] {
        if !(1.0..=5.0).contains(&v) {
            return Err(PreferenceError::ScoreOutOfRange { value: v });
        }
    }
    Ok(0.5 * (r_align + r_fidelity))
}

/// Build preference pairs for one group.
///
/// Ties at the extremes break toward the lexicographically smallest sample id;
/// pairs with margin below `min_margin` are dropped; output is ordered by
/// descending margin, then winner id, then loser id.
pub fn build_pairs(
    group: &PreferenceGroup,
    strategy: PairStrategy,
    min_margin: f64,
) -> Result<Vec<PreferencePair>, PreferenceError> {
    group.validate()?;
    let scored: Vec<(&str, f64)> = group
        .candidates
        .iter()
        .map(|c| (c.sample_id.as_str(), c.composite()))
        .collect();
    let best = extreme(&scored, |a, b| a > b);
    let worst = extreme(&scored, |a, b| a < b);

    let mut pairs: Vec<PreferencePair> = Vec::new();
    let mut push = |winner: (&str, f64), loser: (&str, f64)| {
        if winner.1 > loser.1 {
            pairs.push(PreferencePair {
                condition_id: group.condition_id.clone(),
                winner_id: winner.0.to_string(),
                loser_id: loser.0.to_string(),
                margin: winner.1 - loser.1,
            });
        }
    };
    match strategy {
        PairStrategy::BetterVsWorse => {
            for &a in &scored {
                for &b in &scored {
                    push(a, b);
                }
            }
        }
        PairStrategy::BestVsWorse => {
            for &b in &scored {
                push(best, b);
            }
        }
        PairStrategy::BetterVsWorst => {
            for &a in &scored {
                push(a, worst);
            }
        }
        PairStrategy::BestVsWorst => push(best, worst),
    }
    pairs.retain(|p| p.margin >= min_margin);
    pairs.sort_by(|a, b| {
        b.margin
            .total_cmp(&a.margin)
            .then_with(|| a.winner_id.cmp(&b.winner_id))
            .then_with(|| a.loser_id.cmp(&b.loser_id))
    });
    Ok(pairs)
}

fn extreme<'a>(scored: &[(&'a str, f64)], better: impl Fn(f64, f64) -> bool) -> (&'a str, f64) {
    let mut pick = scored[0];
    for &(id, r) in &scored[1..] {
        if better(r, pick.1) || (r == pick.1 && id < pick.0) {
            pick = (id, r);
        }
    }
    pick
}

/// Summary statistics for a pair dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetStats {
    pub pair_count: usize,
    pub condition_count: usize,
    pub min_margin: f64,
    pub max_margin: f64,
    pub mean_margin: f64,
    /// Histogram over margins in [0, 4] with fixed-width bins.
    pub margin_bin_width: f64,
    pub margin_histogram: Vec<usize>,
    /// (condition_id, pairs for that condition), sorted by id.
    pub per_condition: Vec<(String, usize)>,
}

const MARGIN_BIN_WIDTH: f64 = 0.25;
const MARGIN_BINS: usize = 16; // covers the composite margin range [0, 4]

pub fn dataset_stats(pairs: &[PreferencePair]) -> DatasetStats {
    let mut histogram = vec![0usize; MARGIN_BINS];
    let mut per_condition: std::collections::BTreeMap<String, usize> =
        std::collections::BTreeMap::new();
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    let mut sum = 0.0;
    for p in pairs {
        min = min.min(p.margin);
        max = max.max(p.margin);
        sum += p.margin;
        let bin = ((p.margin / MARGIN_BIN_WIDTH) as usize).min(MARGIN_BINS - 1);
        histogram[bin] += 1;
        *per_condition.entry(p.condition_id.clone()).or_insert(0) += 1;
    }
    if pairs.is_empty() {
        min = 0.0;
        max = 0.0;
    }
    DatasetStats {
        pair_count: pairs.len(),
        condition_count: per_condition.len(),
        min_margin: min,
        max_margin: max,
        mean_margin: if pairs.is_empty() { 0.0 } else { sum / pairs.len() as f64 },
        margin_bin_width: MARGIN_BIN_WIDTH,
        margin_histogram: histogram,
        per_condition: per_condition.into_iter().collect(),
    }
}

/// Read JSON-lines of [`PreferenceGroup`].
pub fn read_groups(path: &Path) -> Result<Vec<PreferenceGroup>, PreferenceError> {
    let file = std::fs::File::open(path)?;
    let mut groups = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let group: PreferenceGroup = serde_json::from_str(&line)
            .map_err(|e| PreferenceError::Parse { line: i + 1, err: e.to_string() })?;
        group.validate()?;
        groups.push(group);
    }
    Ok(groups)
}

pub fn write_groups(groups: &[PreferenceGroup], path: &Path) -> Result<(), PreferenceError> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for g in groups {
        serde_json::to_writer(&mut out, g).map_err(std::io::Error::other)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Read JSON-lines of [`PreferencePair`].
pub fn read_pairs(path: &Path) -> Result<Vec<PreferencePair>, PreferenceError> {
    let file = std::fs::File::open(path)?;
    let mut pairs = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let pair: PreferencePair = serde_json::from_str(&line)
            .map_err(|e| PreferenceError::Parse { line: i + 1, err: e.to_string() })?;
        pairs.push(pair);
    }
    Ok(pairs)
}

pub fn write_pairs(pairs: &[PreferencePair], path: &Path) -> Result<(), PreferenceError> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for p in pairs {
        serde_json::to_writer(&mut out, p).map_err(std::io::Error::other)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}
