//! Verification scoring: ten-crop embeddings, pairwise crop averaging and EER.

use std::fmt::Write as _;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::embedder::{embed, EmbedderParams, Utterance};
use crate::error::{Error, Result};
use crate::math::{cosine_similarity, l2_normalize, squared_euclidean};
use crate::sampling::UttHandle;
use crate::synth::Split;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Trial {
    pub a: UttHandle,
    pub b: UttHandle,
    /// Same speaker.
    pub target: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrialList {
    trials: Vec<Trial>,
}

impl TrialList {
    pub fn new(trials: Vec<Trial>) -> Result<Self> {
        if let Some(t) = trials.iter().find(|t| t.a == t.b) {
            return Err(Error::domain("TrialList::new", format!("utterance {} paired with itself", t.a.0)));
        }
        Ok(Self { trials })
    }

    pub fn trials(&self) -> &[Trial] {
        &self.trials
    }

    pub fn len(&self) -> usize {
        self.trials.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trials.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredTrials {
    scores: Vec<f64>,
    targets: Vec<bool>,
}

impl ScoredTrials {
    pub fn new(scores: Vec<f64>, targets: Vec<bool>) -> Result<Self> {
        if scores.len() != targets.len() {
            return Err(Error::DimensionMismatch {
                op: "ScoredTrials::new",
                expected: targets.len(),
                got: scores.len(),
            });
        }
        if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
            return Err(Error::NonFinite(format!("score of trial {i}")));
        }
        Ok(Self { scores, targets })
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn targets(&self) -> &[bool] {
        &self.targets
    }
}

/// False rejection and false acceptance rates at one threshold.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OperatingPoint {
    pub threshold: f64,
    pub frr: f64,
    pub far: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub eer: f64,
    pub threshold: f64,
    pub same_trials: usize,
    pub different_trials: usize,
    /// One point per distinct score, ascending, then a final point above
    /// every score (`frr = 1`, `far = 0`, threshold `+∞`).
    pub points: Vec<OperatingPoint>,
}

impl EvalReport {
    /// `key = value` lines.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "eer = {}", self.eer);
        let _ = writeln!(s, "eer_percent = {:.4}", 100.0 * self.eer);
        let _ = writeln!(s, "threshold = {}", self.threshold);
        let _ = writeln!(s, "same_trials = {}", self.same_trials);
        let _ = writeln!(s, "different_trials = {}", self.different_trials);
        let _ = writeln!(s, "operating_points = {}", self.points.len());
        s
    }
}

/// Start offsets of `num_crops` windows evenly spaced over `[0, T − L]`,
/// `L = min(crop_len, T)`, rounded to the nearest frame.
pub fn crop_starts(num_frames: usize, crop_len: usize, num_crops: usize) -> Vec<usize> {
    let len = crop_len.max(1).min(num_frames);
    let slack = num_frames - len;
    match num_crops {
        0 => Vec::new(),
        1 => vec![0],
        n => (0..n)
            .map(|k| (k as f64 * slack as f64 / (n - 1) as f64).round() as usize)
            .collect(),
    }
}

pub fn ten_crop(u: &Utterance, crop_len: usize, num_crops: usize) -> Vec<Utterance> {
    let len = crop_len.max(1).min(u.num_frames());
    crop_starts(u.num_frames(), crop_len, num_crops)
        .into_iter()
        .map(|s| u.crop(s, len))
        .collect()
}

/// Mean cosine similarity over every (A crop, B crop) pair.
pub fn score_trial(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    score_with(a, b, Scoring::Cosine)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scoring {
    #[default]
    Cosine,
    /// `−‖â − b̂‖²` on L2-normalised embeddings.
    NegSquaredDistance,
}

pub fn score_with(a: &[Vec<f64>], b: &[Vec<f64>], scoring: Scoring) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::domain("score_trial", "both crop lists must be nonempty"));
    }
    let mut total = CompensatedSum::default();
    match scoring {
        Scoring::Cosine => {
            for x in a {
                for y in b {
                    total.add(cosine_similarity(x, y).map_err(|e| Error::domain("score_trial", e.to_string()))?);
                }
            }
        }
        Scoring::NegSquaredDistance => {
            let unit = |v: &Vec<f64>| l2_normalize("score_trial", v).map(|(u, _)| u);
            let ua = a.iter().map(unit).collect::<Result<Vec<_>>>()?;
            let ub = b.iter().map(unit).collect::<Result<Vec<_>>>()?;
            for x in &ua {
                for y in &ub {
                    total.add(-squared_euclidean(x, y)?);
                }
            }
        }
    }
    Ok(total.value() / (a.len() * b.len()) as f64)
}

/// Neumaier summation; the result barely depends on term order.
#[derive(Default)]
struct CompensatedSum {
    sum: f64,
    carry: f64,
}

impl CompensatedSum {
    fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.carry += (self.sum - t) + x;
        } else {
            self.carry += (x - t) + self.sum;
        }
        self.sum = t;
    }

    fn value(&self) -> f64 {
        self.sum + self.carry
    }
}

/// Equal error rate by sweeping every distinct score as a threshold.
///
/// A trial is accepted when its score is `>= t`. The EER is read where
/// `FRR − FAR` first becomes non-negative, interpolating linearly (in both
/// rate and threshold) from the previous operating point.
pub fn compute_eer(scored: &ScoredTrials) -> Result<EvalReport> {
    let same = scored.targets.iter().filter(|&&t| t).count();
    let diff = scored.targets.len() - same;
    if same == 0 || diff == 0 {
        return Err(Error::domain(
            "compute_eer",
            format!("need both classes, got {same} same and {diff} different trials"),
        ));
    }
    let mut order: Vec<usize> = (0..scored.scores.len()).collect();
    order.sort_by(|&i, &j| scored.scores[i].total_cmp(&scored.scores[j]));

    // Walk ascending; before each distinct score, count what lies strictly below.
    let mut points = Vec::new();
    let (mut same_below, mut diff_below) = (0usize, 0usize);
    let mut k = 0;
    while k < order.len() {
        let t = scored.scores[order[k]];
        points.push(OperatingPoint {
            threshold: t,
            frr: same_below as f64 / same as f64,
            far: (diff - diff_below) as f64 / diff as f64,
        });
        while k < order.len() && scored.scores[order[k]] == t {
            if scored.targets[order[k]] {
                same_below += 1;
            } else {
                diff_below += 1;
            }
            k += 1;
        }
    }
    points.push(OperatingPoint {
        threshold: f64::INFINITY,
        frr: 1.0,
        far: 0.0,
    });

    let i = points
        .iter()
        .position(|p| p.frr - p.far >= 0.0)
        .expect("final point has frr − far = 1");
    let cur = points[i];
    let (eer, threshold) = if cur.frr == cur.far || i == 0 {
        (cur.frr, cur.threshold)
    } else {
        let prev = points[i - 1];
        let d0 = prev.frr - prev.far;
        let d1 = cur.frr - cur.far;
        let alpha = -d0 / (d1 - d0);
        let eer = prev.frr + alpha * (cur.frr - prev.frr);
        let threshold = if cur.threshold.is_finite() {
            prev.threshold + alpha * (cur.threshold - prev.threshold)
        } else {
            prev.threshold
        };
        (eer, threshold)
    };
    Ok(EvalReport {
        eer,
        threshold,
        same_trials: same,
        different_trials: diff,
        points,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub crop_len: usize,
    pub num_crops: usize,
    pub scoring: Scoring,
    /// Embed each utterance once and reuse it across trials.
    pub cache: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            crop_len: 20,
            num_crops: 10,
            scoring: Scoring::Cosine,
            cache: true,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.crop_len == 0 || self.num_crops == 0 {
            return Err(Error::Config("eval.crop_len and eval.num_crops must be >= 1".into()));
        }
        Ok(())
    }
}

/// Embeddings of every crop of `u`, after the model's input normalisation.
pub fn crop_embeddings(u: &Utterance, params: &EmbedderParams, cfg: &EvalConfig) -> Result<Vec<Vec<f64>>> {
    ten_crop(u, cfg.crop_len, cfg.num_crops)
        .iter()
        .map(|c| embed(&params.prepare(c), params).map(|(e, _)| e))
        .collect()
}

/// Scores every trial with ten-crop embeddings and computes the EER.
pub fn evaluate(
    params: &EmbedderParams,
    test: &Split,
    trials: &TrialList,
    cfg: &EvalConfig,
) -> Result<(EvalReport, ScoredTrials)> {
    cfg.validate()?;
    for t in trials.trials() {
        for h in [t.a, t.b] {
            if h.0 >= test.utterances.len() {
                return Err(Error::domain("evaluate", format!("missing utterance handle {}", h.0)));
            }
        }
    }
    let mut cache: Vec<Option<Vec<Vec<f64>>>> = vec![None; test.utterances.len()];
    let mut scores = Vec::with_capacity(trials.len());
    for t in trials.trials() {
        let score = if cfg.cache {
            for h in [t.a, t.b] {
                if cache[h.0].is_none() {
                    cache[h.0] = Some(crop_embeddings(test.get(h)?, params, cfg)?);
                }
            }
            let a = cache[t.a.0].as_deref().expect("filled above");
            let b = cache[t.b.0].as_deref().expect("filled above");
            score_with(a, b, cfg.scoring)?
        } else {
            let a = crop_embeddings(test.get(t.a)?, params, cfg)?;
            let b = crop_embeddings(test.get(t.b)?, params, cfg)?;
            score_with(&a, &b, cfg.scoring)?
        };
        scores.push(score);
    }
    let scored = ScoredTrials::new(scores, trials.trials().iter().map(|t| t.target).collect())?;
    Ok((compute_eer(&scored)?, scored))
}

/// Per-trial CSV: `label,file_a,file_b,score`.
pub fn write_score_csv(w: &mut impl Write, test: &Split, trials: &TrialList, scored: &ScoredTrials) -> Result<()> {
    writeln!(w, "label,file_a,file_b,score")?;
    for (t, s) in trials.trials().iter().zip(scored.scores()) {
        writeln!(
            w,
            "{},{},{},{}",
            u8::from(t.target),
            test.names[t.a.0],
            test.names[t.b.0],
            s
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn crop_start_examples() {
        assert_eq!(crop_starts(24, 24, 10), vec![0; 10]);
        assert_eq!(crop_starts(33, 24, 10), (0..10).collect::<Vec<_>>());
        let want: Vec<usize> = (0..10).map(|k| (k as f64 * 36.0 / 9.0).round() as usize).collect();
        assert_eq!(crop_starts(60, 24, 10), want);
        assert_eq!(crop_starts(5, 24, 10), vec![0; 10]);
    }

    #[test]
    fn crops_have_the_clipped_length() {
        let u = Utterance::new((0..30).map(f64::from).collect(), 30, 1, crate::sampling::SpeakerId(0)).unwrap();
        let crops = ten_crop(&u, 12, 10);
        assert_eq!(crops.len(), 10);
        assert!(crops.iter().all(|c| c.num_frames() == 12));
        assert_eq!(crops[9].frames()[0], 18.0);
        assert!(ten_crop(&u, 50, 10).iter().all(|c| c.num_frames() == 30));
    }

    #[test]
    fn eer_worked_example() {
        let s = ScoredTrials::new(
            vec![0.3, 0.8, 0.9, 0.1, 0.2, 0.7],
            vec![true, true, true, false, false, false],
        )
        .unwrap();
        let r = compute_eer(&s).unwrap();
        assert_eq!(r.eer, 1.0 / 3.0);
        assert_eq!(r.threshold, 0.7);
    }

    #[test]
    fn perfect_separation_gives_zero() {
        let s = ScoredTrials::new(vec![0.9, 0.8, 0.1, 0.2], vec![true, true, false, false]).unwrap();
        assert_eq!(compute_eer(&s).unwrap().eer, 0.0);
    }

    #[test]
    fn fully_inverted_scores_give_one() {
        let s = ScoredTrials::new(vec![0.1, 0.2, 0.8, 0.9], vec![true, true, false, false]).unwrap();
        assert_eq!(compute_eer(&s).unwrap().eer, 1.0);
    }

    #[test]
    fn single_class_is_rejected() {
        let s = ScoredTrials::new(vec![0.1, 0.2], vec![true, true]).unwrap();
        assert!(compute_eer(&s).is_err());
        assert!(ScoredTrials::new(vec![f64::NAN], vec![true]).is_err());
    }

    #[test]
    fn self_trials_are_rejected() {
        let t = Trial {
            a: UttHandle(3),
            b: UttHandle(3),
            target: true,
        };
        assert!(TrialList::new(vec![t]).is_err());
    }

    #[test]
    fn score_trial_examples() {
        let e = vec![vec![1.0, 2.0, 3.0]; 10];
        assert!((score_trial(&e, &e).unwrap() - 1.0).abs() < 1e-15);
        let a = vec![vec![1.0, 0.0]; 10];
        let b = vec![vec![0.0, 3.0]; 10];
        assert_eq!(score_trial(&a, &b).unwrap(), 0.0);
        assert!(score_trial(&a, &[vec![0.0, 0.0]]).is_err());
        assert!(score_trial(&a, &[]).is_err());
    }

    #[test]
    fn distance_scoring_ranks_like_cosine_for_single_crops() {
        let a = vec![vec![1.0, 0.5]];
        let b = vec![vec![0.3, 2.0]];
        let cos = score_with(&a, &b, Scoring::Cosine).unwrap();
        let dist = score_with(&a, &b, Scoring::NegSquaredDistance).unwrap();
        assert!((dist - (2.0 * cos - 2.0)).abs() < 1e-14);
    }

    proptest! {
        #[test]
        fn crop_count_is_fixed(t in 1usize..200, len in 1usize..100, n in 1usize..15) {
            let starts = crop_starts(t, len, n);
            prop_assert_eq!(starts.len(), n);
            let l = len.min(t);
            prop_assert!(starts.iter().all(|&s| s + l <= t));
        }

        #[test]
        fn score_is_symmetric(a in prop::collection::vec(prop::collection::vec(0.1f64..1.0, 4), 1..6),
                              b in prop::collection::vec(prop::collection::vec(-1.0f64..-0.1, 4), 1..6)) {
            let ab = score_trial(&a, &b).unwrap();
            let ba = score_trial(&b, &a).unwrap();
            prop_assert!((ab - ba).abs() <= 1e-15);
        }
    }
}
