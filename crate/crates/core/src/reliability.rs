//! Entropy-based reliability scores.
//!
//! A stage's reliability is the negated mean of its `k` largest token
//! entropies, so it is always `<= 0` and values closer to zero mean a more
//! confident stage. The trace score combines the mining and reasoning stages
//! and measures how much confidence grew between them (the leap).

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::trace::{Segments, TokenInfo};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ReliabilityError {
    #[error("invalid token distribution: {0}")]
    InvalidDistribution(String),
    #[error("stage has no tokens")]
    EmptyStage,
}

/// Candidate `k` values for adaptive selection.
pub const DEFAULT_K_GRID: [usize; 10] = [1, 2, 4, 8, 16, 32, 64, 128, 256, 512];
/// `k` used when no two-stage trace is available to drive selection.
pub const DEFAULT_FALLBACK_K: usize = 10;

/// Shannon entropy (nats) of the renormalized top-k distribution.
pub fn token_entropy(top_probs: &[f64]) -> Result<f64, ReliabilityError> {
    if top_probs.is_empty() {
        return Err(ReliabilityError::InvalidDistribution("empty distribution".into()));
    }
    if let Some(bad) = top_probs.iter().find(|p| !(**p > 0.0 && p.is_finite())) {
        return Err(ReliabilityError::InvalidDistribution(format!(
            "nonpositive probability {bad}"
        )));
    }
    let mass: f64 = top_probs.iter().sum();
    let h: f64 = -top_probs
        .iter()
        .map(|p| {
            let q = p / mass;
            q * q.ln()
        })
        .sum::<f64>();
    // one-hot inputs can land on -0.0 or a tiny negative
    Ok(if h > 0.0 { h } else { 0.0 })
}

/// Entropy of one logged token; a precomputed entropy is taken verbatim.
pub fn token_info_entropy(token: &TokenInfo) -> Result<f64, ReliabilityError> {
    match (token.entropy, &token.top_probs) {
        (Some(h), _) => Ok(h),
        (None, Some(p)) => token_entropy(p),
        (None, None) => Err(ReliabilityError::InvalidDistribution(
            "token has no probability data".into(),
        )),
    }
}

pub fn entropies<'a, I>(tokens: I) -> Result<Vec<f64>, ReliabilityError>
where
    I: IntoIterator<Item = &'a TokenInfo>,
{
    tokens.into_iter().map(token_info_entropy).collect()
}

/// Negated mean of the values, summed in descending order.
///
/// Both the batch and the streaming statistic go through this function so that
/// they agree bit for bit.
fn negated_mean_desc(sorted_desc: &[f64]) -> f64 {
    let sum: f64 = sorted_desc.iter().sum();
    let mean = sum / sorted_desc.len() as f64;
    if mean == 0.0 {
        0.0
    } else {
        -mean
    }
}

fn sort_desc(values: &mut [f64]) {
    values.sort_by(|a, b| b.total_cmp(a));
}

/// `-(1/k') * sum of the k' largest entropies`, with `k' = min(k, n)`.
pub fn stage_reliability(entropies: &[f64], k: usize) -> Result<f64, ReliabilityError> {
    if entropies.is_empty() {
        return Err(ReliabilityError::EmptyStage);
    }
    let k = k.max(1).min(entropies.len());
    let mut sorted = entropies.to_vec();
    sort_desc(&mut sorted);
    Ok(negated_mean_desc(&sorted[..k]))
}

/// Per-trace entropy lists, ready for `k` selection and scoring.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct StageEntropies {
    /// Empty for single-stage traces.
    pub mining: Vec<f64>,
    pub reasoning: Vec<f64>,
}

impl StageEntropies {
    pub fn from_segments(segments: &Segments<'_>) -> Result<Self, ReliabilityError> {
        Ok(Self {
            mining: entropies(segments.mining_tokens.iter().copied())?,
            reasoning: entropies(segments.reasoning_tokens.iter().copied())?,
        })
    }

    pub fn is_two_stage(&self) -> bool {
        !self.mining.is_empty()
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            mining: self.mining.iter().map(|h| h * c).collect(),
            reasoning: self.reasoning.iter().map(|h| h * c).collect(),
        }
    }
}

/// Picks the `k` that maximizes the summed (unclamped) leap over the
/// two-stage selection traces.
///
/// The grid is clipped to the shortest stage among those traces; ties go to
/// the smaller `k`. Without any two-stage trace the fallback is returned.
pub fn select_k(selection: &[StageEntropies], grid: &[usize], fallback: usize) -> usize {
    let two_stage: Vec<&StageEntropies> = selection
        .iter()
        .filter(|s| s.is_two_stage() && !s.reasoning.is_empty())
        .collect();
    if two_stage.is_empty() || grid.is_empty() {
        return fallback;
    }
    let shortest = two_stage
        .iter()
        .map(|s| s.mining.len().min(s.reasoning.len()))
        .min()
        .unwrap_or(1);
    let mut candidates: Vec<usize> = grid
        .iter()
        .copied()
        .filter(|&k| k >= 1 && k <= shortest)
        .collect();
    candidates.sort_unstable();
    candidates.dedup();
    if candidates.is_empty() {
        candidates.push(grid.iter().copied().filter(|&k| k >= 1).min().unwrap_or(1));
    }

    // pre-sort once; each candidate then reads a prefix
    let sorted: Vec<(Vec<f64>, Vec<f64>)> = two_stage
        .iter()
        .map(|s| {
            let mut m = s.mining.clone();
            let mut r = s.reasoning.clone();
            sort_desc(&mut m);
            sort_desc(&mut r);
            (m, r)
        })
        .collect();

    let mut best: Option<(usize, f64)> = None;
    for &k in &candidates {
        let objective: f64 = sorted
            .iter()
            .map(|(m, r)| {
                let w_m = negated_mean_desc(&m[..k.min(m.len())]);
                let w_r = negated_mean_desc(&r[..k.min(r.len())]);
                w_r - w_m
            })
            .sum();
        match best {
            Some((_, b)) if objective <= b => {}
            _ => best = Some((k, objective)),
        }
    }
    best.map(|(k, _)| k).unwrap_or(fallback)
}

/// Stage reliabilities of one trace plus the derived trace reliability and leap.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageScore {
    pub w_m: Option<f64>,
    pub w_r: f64,
    pub w_t: f64,
    pub delta: f64,
    pub two_stage: bool,
}

impl StageScore {
    /// Combines stage reliabilities; a missing mining stage doubles `w_r`.
    pub fn from_stages(w_m: Option<f64>, w_r: f64) -> Self {
        match w_m {
            Some(w_m) => Self {
                w_m: Some(w_m),
                w_r,
                w_t: w_m + w_r,
                delta: (w_r - w_m).max(0.0),
                two_stage: true,
            },
            None => Self {
                w_m: None,
                w_r,
                w_t: 2.0 * w_r,
                delta: 0.0,
                two_stage: false,
            },
        }
    }
}

pub fn score_trace(stages: &StageEntropies, k: usize) -> Result<StageScore, ReliabilityError> {
    let w_r = stage_reliability(&stages.reasoning, k)?;
    let w_m = if stages.is_two_stage() {
        Some(stage_reliability(&stages.mining, k)?)
    } else {
        None
    };
    Ok(StageScore::from_stages(w_m, w_r))
}

/// Streaming top-k statistic for the turn currently being generated.
///
/// Keeps the `k` largest entropies seen so far in descending order; the
/// reported reliability is their negated mean.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningTurnStat {
    k: usize,
    top: Vec<f64>,
    n_seen: usize,
    current: f64,
}

impl RunningTurnStat {
    pub fn new(k: usize) -> Self {
        let k = k.max(1);
        Self {
            k,
            top: Vec::with_capacity(k),
            n_seen: 0,
            current: 0.0,
        }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn n_seen(&self) -> usize {
        self.n_seen
    }

    pub fn top(&self) -> &[f64] {
        &self.top
    }

    /// Current reliability; 0 before any token arrives.
    pub fn reliability(&self) -> f64 {
        self.current
    }

    pub fn push(&mut self, entropy: f64) -> f64 {
        self.n_seen += 1;
        let full = self.top.len() == self.k;
        if full && entropy <= self.top[self.k - 1] {
            // the retained multiset is unchanged
            return self.current;
        }
        let pos = self.top.partition_point(|&v| v >= entropy);
        if full {
            self.top.pop();
        }
        self.top.insert(pos, entropy);
        self.current = negated_mean_desc(&self.top);
        self.current
    }

    pub fn reset(&mut self) {
        self.top.clear();
        self.n_seen = 0;
        self.current = 0.0;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_top10_entropy_is_ln10() {
        let h = token_entropy(&[0.1; 10]).unwrap();
        assert!((h - 10f64.ln()).abs() < 1e-12);
        assert_eq!(token_entropy(&[1.0]).unwrap(), 0.0);
    }

    #[test]
    fn entropy_matches_direct_summation() {
        // -sum q ln q with q = (1/2, 1/4, 1/8, 1/8), summed independently
        let expected = 0.5 * 2f64.ln() + 0.25 * 4f64.ln() + 2.0 * 0.125 * 8f64.ln();
        let h = token_entropy(&[0.5, 0.25, 0.125, 0.125]).unwrap();
        assert!((h - expected).abs() < 1e-12);
        assert!((h - 1.2130075659799042).abs() < 1e-12);
    }

    #[test]
    fn entropy_renormalizes_truncated_mass() {
        let a = token_entropy(&[0.4, 0.4]).unwrap();
        assert!((a - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn invalid_distributions() {
        assert!(matches!(token_entropy(&[]), Err(ReliabilityError::InvalidDistribution(_))));
        assert!(token_entropy(&[0.5, 0.0]).is_err());
        assert!(token_entropy(&[0.5, -0.1]).is_err());
    }

    #[test]
    fn stage_reliability_examples() {
        assert_eq!(stage_reliability(&[0.1, 0.9, 0.5], 2).unwrap(), -0.7);
        assert_eq!(stage_reliability(&[0.0, 0.0, 0.0], 3).unwrap(), 0.0);
        assert_eq!(stage_reliability(&[0.4], 8).unwrap(), -0.4);
        assert_eq!(stage_reliability(&[], 1), Err(ReliabilityError::EmptyStage));
    }

    #[test]
    fn select_k_picks_max_leap() {
        // k=1: -1 - (-2) = 1; k=3: -1/3 - (-4/3) = 1; tie goes to k=1
        let s = StageEntropies {
            mining: vec![2.0, 2.0, 0.0],
            reasoning: vec![1.0, 0.0, 0.0],
        };
        assert_eq!(select_k(&[s], &[1, 3], 10), 1);
        // k=1: -1 - (-2) = 1; k=3: -1/3 - (-2) = 5/3
        let s = StageEntropies {
            mining: vec![2.0, 2.0, 2.0],
            reasoning: vec![1.0, 0.0, 0.0],
        };
        assert_eq!(select_k(&[s], &[1, 3], 10), 3);
    }

    #[test]
    fn select_k_ties_and_fallback() {
        let s = StageEntropies {
            mining: vec![0.3; 8],
            reasoning: vec![0.3; 8],
        };
        assert_eq!(select_k(&[s], &DEFAULT_K_GRID, 10), 1);
        let single = StageEntropies {
            mining: vec![],
            reasoning: vec![0.5; 4],
        };
        assert_eq!(select_k(&[single], &DEFAULT_K_GRID, 10), 10);
    }

    #[test]
    fn select_k_clips_grid_to_shortest_stage() {
        // leap keeps growing with k, but the shortest stage has 5 tokens
        let s = StageEntropies {
            mining: vec![1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0],
            reasoning: vec![1.0, 0.0, 0.0, 0.0, 0.0],
        };
        assert_eq!(select_k(&[s], &DEFAULT_K_GRID, 10), 4);
    }

    #[test]
    fn score_examples() {
        let s = StageScore::from_stages(Some(-0.9), -0.3);
        assert!((s.w_t + 1.2).abs() < 1e-12 && (s.delta - 0.6).abs() < 1e-12);
        let s = StageScore::from_stages(Some(-0.2), -0.5);
        assert!((s.w_t + 0.7).abs() < 1e-12);
        assert_eq!(s.delta, 0.0);
        let s = StageScore::from_stages(None, -0.4);
        assert_eq!((s.w_t, s.delta, s.two_stage), (-0.8, 0.0, false));
    }

    #[test]
    fn score_trace_requires_reasoning() {
        let e = StageEntropies {
            mining: vec![0.1],
            reasoning: vec![],
        };
        assert_eq!(score_trace(&e, 2), Err(ReliabilityError::EmptyStage));
    }

    #[test]
    fn running_stat_examples() {
        let mut s = RunningTurnStat::new(2);
        assert_eq!(s.push(0.5), -0.5);
        assert!((s.push(0.1) + 0.3).abs() < 1e-15);
        assert!((s.push(0.9) + 0.7).abs() < 1e-15);

        let mut s = RunningTurnStat::new(1);
        for _ in 0..3 {
            assert_eq!(s.push(0.2), -0.2);
        }

        let mut s = RunningTurnStat::new(3);
        assert_eq!(s.push(0.0), 0.0);
    }
}
