//! Seeded synthetic trace corpus with planted noisy-mining / noisy-reasoning
//! structure, plus a brute-force threshold sweep used as a filtering oracle.
//!
//! Every token entropy is drawn from a log-normal whose location depends on
//! the stage's latent quality, and every trace's correctness is drawn from a
//! probability that depends on the same qualities. Reliability and correctness
//! are therefore correlated only through the latent labels, which are written
//! alongside the log for oracle checks.
//!
//! Randomness: `ChaCha20Rng` from `rand_chacha`, seeded with the user seed and
//! switched to stream `question_index`, so every question draws from its own
//! independent stream and generation parallelizes without changing output.

use std::collections::BTreeMap;
use std::io::Write;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Beta, Distribution, LogNormal};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::parallel::{map_range, Execution};
use crate::reliability::{score_trace, StageEntropies, StageScore};
use crate::trace::{
    write_answer_key, write_trace_line, AnswerKey, AnswerKeyEntry, BBox, QuestionBundle,
    TokenInfo, TraceError, TraceRecord, Turn,
};
use crate::voting::majority_vote;

pub const PRNG_NAME: &str = "ChaCha20Rng(rand_chacha 0.9); seed_from_u64(seed), stream = question index";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageQuality {
    Clean,
    Noisy,
    /// Single-stage trace: there is no mining stage.
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenFormat {
    /// Write `{"entropy": h}` per token.
    #[default]
    Entropy,
    /// Write a ten-way `top_probs` list whose entropy is `h`.
    TopProbs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseProfile {
    pub p_noisy_mining: f64,
    pub p_noisy_reasoning: f64,
    pub mu_clean: f64,
    pub mu_noisy: f64,
    pub sigma: f64,
    pub p_correct_clean: f64,
    pub p_correct_noisy: f64,
    /// Correctness for a noisy mining stage followed by a clean reasoning
    /// stage, i.e. a trace whose confidence recovers once it has its cues.
    pub p_correct_recovered: f64,
    pub tokens_min: usize,
    pub tokens_max: usize,
    pub p_single_stage: f64,
    pub alphabet: Vec<String>,
    /// Clean boxes deviate from a ground-truth box by at most this fraction of its side.
    pub box_jitter: f64,
    pub image_width: f64,
    pub image_height: f64,
    pub max_mining_turns: usize,
    /// Concentration of the per-question Beta draw around each noise rate.
    /// `None` uses the global rates for every question.
    pub difficulty_concentration: Option<f64>,
    /// Chance that a wrong answer from a trace with any noisy stage lands on
    /// the question's single distractor instead of a uniform wrong letter.
    pub distractor_share: f64,
    /// Chance that a noisy mining stage also makes the reasoning stage noisy.
    pub p_cascade: f64,
    /// Standard deviation of a per-stage shift of the log-entropy location.
    pub stage_spread: f64,
    /// Log-odds change in correctness per standard deviation of the reasoning
    /// stage's shift (more uncertain reasoning, fewer correct answers).
    pub correctness_tilt: f64,
    pub token_format: TokenFormat,
}

/// Shifts `p` by `shift` on the log-odds scale; 0 and 1 stay put.
fn tilt(p: f64, shift: f64) -> f64 {
    if p <= 0.0 || p >= 1.0 || shift == 0.0 {
        return p;
    }
    let logit = (p / (1.0 - p)).ln() + shift;
    1.0 / (1.0 + (-logit).exp())
}

impl Default for NoiseProfile {
    fn default() -> Self {
        Self {
            p_noisy_mining: 0.3,
            p_noisy_reasoning: 0.2,
            mu_clean: 0.15f64.ln(),
            mu_noisy: 0.9f64.ln(),
            sigma: 0.35,
            p_correct_clean: 0.85,
            p_correct_noisy: 0.35,
            p_correct_recovered: 0.85,
            tokens_min: 40,
            tokens_max: 400,
            p_single_stage: 0.15,
            alphabet: ["A", "B", "C", "D"].map(String::from).to_vec(),
            box_jitter: 0.10,
            image_width: 1024.0,
            image_height: 1024.0,
            max_mining_turns: 3,
            difficulty_concentration: Some(2.0),
            distractor_share: 0.7,
            p_cascade: 0.5,
            stage_spread: 0.3,
            correctness_tilt: 0.6,
            token_format: TokenFormat::Entropy,
        }
    }
}

impl NoiseProfile {
    /// Homogeneous noise rates with wrong answers spread uniformly.
    pub fn uniform_wrong() -> Self {
        Self {
            difficulty_concentration: None,
            distractor_share: 0.0,
            p_cascade: 0.0,
            stage_spread: 0.0,
            correctness_tilt: 0.0,
            p_correct_recovered: 0.35,
            ..Self::default()
        }
    }

    pub fn by_name(name: &str) -> Option<Self> {
        match name {
            "default" => Some(Self::default()),
            "uniform-wrong" => Some(Self::uniform_wrong()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        let probs = [
            ("p_noisy_mining", self.p_noisy_mining),
            ("p_noisy_reasoning", self.p_noisy_reasoning),
            ("p_correct_clean", self.p_correct_clean),
            ("p_correct_noisy", self.p_correct_noisy),
            ("p_correct_recovered", self.p_correct_recovered),
            ("p_single_stage", self.p_single_stage),
            ("distractor_share", self.distractor_share),
            ("p_cascade", self.p_cascade),
        ];
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(format!("{name} = {p} outside [0, 1]"));
            }
        }
        if !(self.mu_noisy > self.mu_clean) {
            return Err("mu_noisy must exceed mu_clean".into());
        }
        if !(self.stage_spread >= 0.0 && self.correctness_tilt >= 0.0) {
            return Err("stage_spread and correctness_tilt must be nonnegative".into());
        }
        if !(self.sigma >= 0.0) {
            return Err("sigma must be nonnegative".into());
        }
        if self.tokens_min == 0 || self.tokens_min > self.tokens_max {
            return Err("token range must satisfy 1 <= min <= max".into());
        }
        if self.alphabet.len() < 2 {
            return Err("answer alphabet needs at least two entries".into());
        }
        if self.max_mining_turns == 0 {
            return Err("max_mining_turns must be at least 1".into());
        }
        if let Some(c) = self.difficulty_concentration {
            if !(c > 0.0) {
                return Err("difficulty_concentration must be positive".into());
            }
        }
        if !(self.image_width > 1.0 && self.image_height > 1.0) {
            return Err("image must be larger than one pixel".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentLabel {
    pub question_id: String,
    pub trace_id: String,
    pub mining_quality: StageQuality,
    pub reasoning_quality: StageQuality,
    pub planted_correct: bool,
}

#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub bundles: Vec<QuestionBundle>,
    pub key: AnswerKey,
    pub latent: Vec<LatentLabel>,
}

impl SyntheticDataset {
    pub fn latent_for(&self, question_id: &str) -> Vec<&LatentLabel> {
        self.latent
            .iter()
            .filter(|l| l.question_id == question_id)
            .collect()
    }

    /// Writes the trace log (without inline ground truth), the answer key and
    /// the latent-label sidecar.
    pub fn write<W1: Write, W2: Write, W3: Write>(
        &self,
        mut log: W1,
        key: W2,
        mut latent: W3,
    ) -> Result<(), TraceError> {
        for bundle in &self.bundles {
            let stripped = QuestionBundle {
                ground_truth: None,
                gt_bboxes: None,
                ..bundle.clone()
            };
            for trace in &bundle.traces {
                write_trace_line(&mut log, &stripped, trace)?;
            }
        }
        write_answer_key(key, &self.key)?;
        for label in &self.latent {
            serde_json::to_writer(&mut latent, label).map_err(std::io::Error::from)?;
            latent.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// Ten-way distribution `(1 - e, e/9, ..., e/9)` with entropy `h` (nats).
/// `h` is clamped to `[0, ln 10]`.
pub fn top10_with_entropy(h: f64) -> Vec<f64> {
    let h_max = 10f64.ln();
    let h = h.clamp(0.0, h_max);
    let entropy_of = |e: f64| {
        let head = 1.0 - e;
        let tail = e / 9.0;
        let mut s = 0.0;
        if head > 0.0 {
            s -= head * head.ln();
        }
        if tail > 0.0 {
            s -= e * tail.ln();
        }
        s
    };
    // entropy increases monotonically in e on [0, 0.9]
    let (mut lo, mut hi) = (0.0f64, 0.9f64);
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if entropy_of(mid) < h {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let e = 0.5 * (lo + hi);
    let tail = (e / 9.0).max(f64::MIN_POSITIVE);
    let mut p = vec![tail; 10];
    p[0] = (1.0 - e).max(tail);
    p
}

struct QuestionSampler<'a> {
    profile: &'a NoiseProfile,
    rng: ChaCha20Rng,
    clean: LogNormal<f64>,
    noisy: LogNormal<f64>,
}

impl QuestionSampler<'_> {
    /// `n` token entropies for a stage whose log-location is shifted by `offset`.
    fn entropy_tokens(&mut self, n: usize, quality: StageQuality, offset: f64) -> Vec<TokenInfo> {
        let dist = if quality == StageQuality::Noisy {
            self.noisy
        } else {
            self.clean
        };
        let scale = offset.exp();
        let cap = 10f64.ln();
        (0..n)
            .map(|_| {
                let h = (dist.sample(&mut self.rng) * scale).min(cap);
                match self.profile.token_format {
                    TokenFormat::Entropy => TokenInfo::from_entropy(h),
                    TokenFormat::TopProbs => TokenInfo::from_probs(top10_with_entropy(h)),
                }
            })
            .collect()
    }

    fn standard_normal(&mut self) -> f64 {
        rand_distr::StandardNormal.sample(&mut self.rng)
    }

    fn stage_len(&mut self) -> usize {
        self.rng
            .random_range(self.profile.tokens_min..=self.profile.tokens_max)
    }

    fn random_box(&mut self, min_frac: f64, max_frac: f64) -> BBox {
        let (w_img, h_img) = (self.profile.image_width, self.profile.image_height);
        let w = (w_img * self.rng.random_range(min_frac..max_frac)).max(1.0);
        let h = (h_img * self.rng.random_range(min_frac..max_frac)).max(1.0);
        let x = self.rng.random_range(0.0..(w_img - w).max(1e-9));
        let y = self.rng.random_range(0.0..(h_img - h).max(1e-9));
        BBox::new(x, y, x + w, y + h)
    }

    fn jittered(&mut self, gt: &BBox) -> BBox {
        let j = self.profile.box_jitter;
        let (w, h) = (gt.width(), gt.height());
        let mut d = |side: f64| {
            if j > 0.0 {
                self.rng.random_range(-j..=j) * side
            } else {
                0.0
            }
        };
        let x0 = (gt.x_min + d(w)).max(0.0);
        let y0 = (gt.y_min + d(h)).max(0.0);
        let x1 = (gt.x_max + d(w)).min(self.profile.image_width);
        let y1 = (gt.y_max + d(h)).min(self.profile.image_height);
        if x1 > x0 && y1 > y0 {
            BBox::new(x0, y0, x1, y1)
        } else {
            *gt
        }
    }

    fn rate(&mut self, mean: f64) -> f64 {
        match self.profile.difficulty_concentration {
            Some(c) if mean > 0.0 && mean < 1.0 => Beta::new(c * mean, c * (1.0 - mean))
                .map(|b| b.sample(&mut self.rng))
                .unwrap_or(mean),
            _ => mean,
        }
    }
}

fn generate_question(
    qi: usize,
    traces_per_question: usize,
    profile: &NoiseProfile,
    seed: u64,
) -> (QuestionBundle, AnswerKeyEntry, Vec<LatentLabel>) {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(qi as u64);
    let mut s = QuestionSampler {
        profile,
        rng,
        clean: LogNormal::new(profile.mu_clean, profile.sigma).expect("validated sigma"),
        noisy: LogNormal::new(profile.mu_noisy, profile.sigma).expect("validated sigma"),
    };

    let question_id = format!("q{qi:05}");
    let truth = profile
        .alphabet
        .choose(&mut s.rng)
        .expect("nonempty alphabet")
        .clone();
    let wrong: Vec<&String> = profile.alphabet.iter().filter(|a| **a != truth).collect();
    let distractor = (*wrong.choose(&mut s.rng).expect("alphabet has a wrong answer")).clone();
    let n_gt = s.rng.random_range(1..=2);
    let gt_boxes: Vec<BBox> = (0..n_gt).map(|_| s.random_box(0.05, 0.25)).collect();
    let p_nm = s.rate(profile.p_noisy_mining);
    let p_nr = s.rate(profile.p_noisy_reasoning);

    let mut traces = Vec::with_capacity(traces_per_question);
    let mut latent = Vec::with_capacity(traces_per_question);
    for ti in 0..traces_per_question {
        let trace_id = format!("{question_id}-t{ti:02}");
        let single = s.rng.random_bool(profile.p_single_stage);
        let mining_quality = if single {
            StageQuality::None
        } else if s.rng.random_bool(p_nm) {
            StageQuality::Noisy
        } else {
            StageQuality::Clean
        };
        let cascade = mining_quality == StageQuality::Noisy && s.rng.random_bool(profile.p_cascade);
        let reasoning_quality = if cascade || s.rng.random_bool(p_nr) {
            StageQuality::Noisy
        } else {
            StageQuality::Clean
        };
        let any_noisy =
            mining_quality == StageQuality::Noisy || reasoning_quality == StageQuality::Noisy;
        let p_correct = match (mining_quality, reasoning_quality) {
            (_, StageQuality::Noisy) => profile.p_correct_noisy,
            (StageQuality::Noisy, _) => profile.p_correct_recovered,
            _ => profile.p_correct_clean,
        };
        // per-stage shifts of the entropy level; a less certain reasoning
        // stage makes a wrong answer more likely
        let z_m = s.standard_normal();
        let z_r = s.standard_normal();
        let p_correct = tilt(p_correct, -profile.correctness_tilt * z_r);
        let correct = s.rng.random_bool(p_correct);
        let answer = if correct {
            truth.clone()
        } else if any_noisy && s.rng.random_bool(profile.distractor_share) {
            distractor.clone()
        } else {
            (*wrong.choose(&mut s.rng).expect("nonempty")).clone()
        };

        let mut turns = Vec::new();
        if !single {
            let n_turns = s.rng.random_range(1..=profile.max_mining_turns);
            let total = s.stage_len().max(n_turns);
            // split `total` tokens into `n_turns` nonempty parts
            let mut cuts: Vec<usize> = (0..n_turns - 1)
                .map(|_| s.rng.random_range(1..total))
                .collect();
            cuts.sort_unstable();
            cuts.dedup();
            let mut bounds = vec![0];
            bounds.extend(cuts);
            bounds.push(total);
            for w in bounds.windows(2) {
                let tokens = s.entropy_tokens(w[1] - w[0], mining_quality, profile.stage_spread * z_m);
                let bbox = if mining_quality == StageQuality::Noisy {
                    s.random_box(0.05, 0.25)
                } else {
                    let g = gt_boxes[s.rng.random_range(0..gt_boxes.len())];
                    s.jittered(&g)
                };
                let mut turn = Turn::mining(tokens, bbox);
                turn.text = Some(format!(
                    "Zooming into region [{:.0}, {:.0}, {:.0}, {:.0}] to inspect the detail.",
                    bbox.x_min, bbox.y_min, bbox.x_max, bbox.y_max
                ));
                turns.push(turn);
            }
        }
        let n_reason = s.stage_len();
        let text = format!("Based on the gathered evidence the answer is \\boxed{{{answer}}}.");
        turns.push(Turn::reasoning(
            s.entropy_tokens(n_reason, reasoning_quality, profile.stage_spread * z_r),
            text.clone(),
        ));

        let record = TraceRecord::new(&question_id, &trace_id, turns, text)
            .expect("generator emits valid traces");
        latent.push(LatentLabel {
            question_id: question_id.clone(),
            trace_id,
            mining_quality,
            reasoning_quality,
            planted_correct: correct,
        });
        traces.push(record);
    }

    let mut bundle = QuestionBundle::new(&question_id, traces);
    bundle.ground_truth = Some(truth.clone());
    bundle.gt_bboxes = Some(gt_boxes.clone());
    bundle.prompt_meta = Some(json!({
        "generator": "tracevote synthbench",
        "prng": PRNG_NAME,
        "seed": seed,
    }));
    let key = AnswerKeyEntry {
        question_id,
        ground_truth: Some(truth),
        gt_bboxes: Some(gt_boxes),
    };
    (bundle, key, latent)
}

pub fn generate_synthetic_dataset(
    questions: usize,
    traces_per_question: usize,
    profile: &NoiseProfile,
    seed: u64,
) -> Result<SyntheticDataset, String> {
    generate_synthetic_dataset_with(questions, traces_per_question, profile, seed, Execution::default())
}

pub fn generate_synthetic_dataset_with(
    questions: usize,
    traces_per_question: usize,
    profile: &NoiseProfile,
    seed: u64,
    exec: Execution,
) -> Result<SyntheticDataset, String> {
    if questions == 0 || traces_per_question == 0 {
        return Err("question and trace counts must be at least 1".into());
    }
    profile.validate()?;
    let parts = map_range(questions, exec, |qi| {
        generate_question(qi, traces_per_question, profile, seed)
    });
    let mut bundles = Vec::with_capacity(questions);
    let mut key = BTreeMap::new();
    let mut latent = Vec::with_capacity(questions * traces_per_question);
    for (bundle, entry, labels) in parts {
        bundles.push(bundle);
        key.insert(entry.question_id.clone(), entry);
        latent.extend(labels);
    }
    Ok(SyntheticDataset {
        bundles,
        key,
        latent,
    })
}

/// One point of the threshold sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub eta_m: f64,
    pub eta_r: f64,
    pub kept: Vec<String>,
    /// Plain majority answer over the kept traces.
    pub answer: Option<String>,
    pub correct: Option<bool>,
    /// Kept traces with a planted noisy stage.
    pub noisy_kept: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterSweep {
    pub entries: Vec<SweepEntry>,
    /// Correct entry with the largest kept set, if any entry is correct.
    pub best: Option<SweepEntry>,
}

impl FilterSweep {
    pub fn at(&self, eta_m: f64, eta_r: f64) -> Option<&SweepEntry> {
        self.entries
            .iter()
            .find(|e| e.eta_m == eta_m && e.eta_r == eta_r)
    }
}

/// Largest trace count the brute-force sweep accepts per question.
pub const SWEEP_MAX_TRACES: usize = 64;

/// Enumerates every `(eta_m, eta_r)` pair drawn from the observed stage
/// reliabilities at `k` and records the kept set and majority answer for each.
///
/// `eta_m = -inf` is included so that questions without two-stage traces (where
/// the mining condition is vacuous) have an entry too.
pub fn oracle_filter_sweep(
    bundle: &QuestionBundle,
    k: usize,
    latent: &[&LatentLabel],
) -> Result<FilterSweep, String> {
    if bundle.traces.len() > SWEEP_MAX_TRACES {
        return Err(format!(
            "sweep supports at most {SWEEP_MAX_TRACES} traces, got {}",
            bundle.traces.len()
        ));
    }
    let scored: Vec<(&TraceRecord, StageScore)> = bundle
        .traces
        .iter()
        .map(|t| {
            let stages = StageEntropies::from_segments(&t.segment()).map_err(|e| e.to_string())?;
            Ok((t, score_trace(&stages, k).map_err(|e| e.to_string())?))
        })
        .collect::<Result<_, String>>()?;
    let noisy: BTreeMap<&str, bool> = latent
        .iter()
        .map(|l| {
            (
                l.trace_id.as_str(),
                l.mining_quality == StageQuality::Noisy
                    || l.reasoning_quality == StageQuality::Noisy,
            )
        })
        .collect();
    let truth = bundle.normalized_truth();

    let mut m_values: Vec<f64> = scored.iter().filter_map(|(_, s)| s.w_m).collect();
    m_values.push(f64::NEG_INFINITY);
    let mut r_values: Vec<f64> = scored.iter().map(|(_, s)| s.w_r).collect();
    for v in [&mut m_values, &mut r_values] {
        v.sort_by(f64::total_cmp);
        v.dedup();
    }

    let mut entries = Vec::with_capacity(m_values.len() * r_values.len());
    for &eta_m in &m_values {
        for &eta_r in &r_values {
            let kept: Vec<&(&TraceRecord, StageScore)> = scored
                .iter()
                .filter(|(_, s)| {
                    let mining = match s.w_m {
                        Some(w) => w >= eta_m,
                        None => true,
                    };
                    mining && s.w_r >= eta_r
                })
                .collect();
            let answers: Vec<&str> = kept.iter().filter_map(|(t, _)| t.answer.as_deref()).collect();
            let answer = majority_vote(&answers).ok().map(|t| t.chosen);
            entries.push(SweepEntry {
                eta_m,
                eta_r,
                correct: truth.as_ref().map(|gt| answer.as_ref() == Some(gt)),
                answer,
                noisy_kept: kept
                    .iter()
                    .filter(|(t, _)| noisy.get(t.trace_id.as_str()).copied().unwrap_or(false))
                    .count(),
                kept: kept.iter().map(|(t, _)| t.trace_id.clone()).collect(),
            });
        }
    }
    let best = entries
        .iter()
        .filter(|e| e.correct == Some(true))
        .max_by_key(|e| e.kept.len())
        .cloned();
    Ok(FilterSweep { entries, best })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reliability::token_entropy;
    use crate::trace::write_trace_log;

    #[test]
    fn generation_is_deterministic() {
        let p = NoiseProfile::default();
        let write = || {
            let d = generate_synthetic_dataset(1, 1, &p, 7).unwrap();
            let (mut a, mut b, mut c) = (Vec::new(), Vec::new(), Vec::new());
            d.write(&mut a, &mut b, &mut c).unwrap();
            (a, b, c)
        };
        assert_eq!(write(), write());
    }

    #[test]
    fn parallel_and_sequential_generation_agree() {
        let p = NoiseProfile::default();
        let a = generate_synthetic_dataset_with(6, 4, &p, 3, Execution::Parallel).unwrap();
        let b = generate_synthetic_dataset_with(6, 4, &p, 3, Execution::Sequential).unwrap();
        assert_eq!(a.bundles, b.bundles);
        assert_eq!(a.latent, b.latent);
    }

    #[test]
    fn noiseless_profile_is_always_correct() {
        let p = NoiseProfile {
            p_noisy_mining: 0.0,
            p_noisy_reasoning: 0.0,
            p_correct_clean: 1.0,
            ..NoiseProfile::default()
        };
        let d = generate_synthetic_dataset(20, 8, &p, 1).unwrap();
        for b in &d.bundles {
            let truth = b.normalized_truth();
            assert!(b.traces.iter().all(|t| t.answer == truth));
        }
        assert!(d.latent.iter().all(|l| l.planted_correct));
    }

    #[test]
    fn latent_labels_match_extracted_answers() {
        let d = generate_synthetic_dataset(30, 8, &NoiseProfile::default(), 11).unwrap();
        let by_id: BTreeMap<&str, &LatentLabel> =
            d.latent.iter().map(|l| (l.trace_id.as_str(), l)).collect();
        for b in &d.bundles {
            for t in &b.traces {
                let planted = by_id[t.trace_id.as_str()].planted_correct;
                assert_eq!(t.answer == b.normalized_truth(), planted);
            }
        }
    }

    #[test]
    fn top_probs_hit_requested_entropy() {
        for h in [0.0, 0.05, 0.5, 1.3, 2.0, 10f64.ln()] {
            let p = top10_with_entropy(h);
            assert_eq!(p.len(), 10);
            assert!(p.iter().sum::<f64>() <= 1.0 + 1e-9);
            assert!((token_entropy(&p).unwrap() - h).abs() < 1e-6, "h = {h}");
        }
    }

    #[test]
    fn top_probs_format_round_trips() {
        let p = NoiseProfile {
            token_format: TokenFormat::TopProbs,
            tokens_min: 5,
            tokens_max: 10,
            ..NoiseProfile::default()
        };
        let d = generate_synthetic_dataset(2, 3, &p, 5).unwrap();
        let mut buf = Vec::new();
        write_trace_log(&mut buf, &d.bundles).unwrap();
        let parsed = crate::trace::parse_trace_log(&buf[..]).unwrap();
        assert_eq!(parsed.len(), 2);
    }

    #[test]
    fn profile_validation() {
        let bad = NoiseProfile {
            mu_noisy: -5.0,
            ..NoiseProfile::default()
        };
        assert!(bad.validate().is_err());
        assert!(generate_synthetic_dataset(0, 1, &NoiseProfile::default(), 1).is_err());
    }

    #[test]
    fn single_trace_sweep_keeps_it() {
        let d = generate_synthetic_dataset(1, 1, &NoiseProfile::default(), 2).unwrap();
        let latent = d.latent_for("q00000");
        let sweep = oracle_filter_sweep(&d.bundles[0], 8, &latent).unwrap();
        assert!(sweep.entries.iter().all(|e| e.kept.len() == 1));
    }
}
