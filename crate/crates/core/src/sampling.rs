//! Epoch planning, episodic batch construction and negative mining.

use std::collections::{BTreeMap, HashSet, VecDeque};
use std::fmt;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SpeakerId(pub u32);

impl fmt::Display for SpeakerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "spk{:04}", self.0)
    }
}

/// Index of an utterance within its split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct UttHandle(pub usize);

#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerEntry {
    pub speaker: SpeakerId,
    pub utterances: Vec<UttHandle>,
}

/// Speaker → utterance handles, plus the frame length of every handle.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetIndex {
    speakers: Vec<SpeakerEntry>,
    frame_lens: Vec<usize>,
}

impl DatasetIndex {
    pub fn new(speakers: Vec<SpeakerEntry>, frame_lens: Vec<usize>) -> Result<Self> {
        let mut seen_spk = HashSet::new();
        let mut seen_utt = HashSet::new();
        for entry in &speakers {
            if !seen_spk.insert(entry.speaker) {
                return Err(Error::domain("DatasetIndex::new", format!("duplicate speaker {}", entry.speaker)));
            }
            if entry.utterances.is_empty() {
                return Err(Error::domain("DatasetIndex::new", format!("speaker {} has no utterances", entry.speaker)));
            }
            for &h in &entry.utterances {
                if h.0 >= frame_lens.len() {
                    return Err(Error::domain("DatasetIndex::new", format!("handle {} has no frame length", h.0)));
                }
                if !seen_utt.insert(h) {
                    return Err(Error::domain("DatasetIndex::new", format!("handle {} listed twice", h.0)));
                }
            }
        }
        Ok(Self { speakers, frame_lens })
    }

    pub fn speakers(&self) -> &[SpeakerEntry] {
        &self.speakers
    }

    pub fn speaker_count(&self) -> usize {
        self.speakers.len()
    }

    pub fn utterance_count(&self) -> usize {
        self.speakers.iter().map(|s| s.utterances.len()).sum()
    }

    pub fn frame_len(&self, h: UttHandle) -> Option<usize> {
        self.frame_lens.get(h.0).copied()
    }

    /// Position of `speaker` in the index, used as its class label.
    pub fn class_of(&self, speaker: SpeakerId) -> Option<usize> {
        self.speakers.iter().position(|s| s.speaker == speaker)
    }

    pub fn speaker_ids(&self) -> impl Iterator<Item = SpeakerId> + '_ {
        self.speakers.iter().map(|s| s.speaker)
    }
}

/// The utterances drawn for one epoch, consumed batch by batch.
#[derive(Debug, Clone)]
pub struct EpochPlan {
    order: Vec<UttHandle>,
    queues: BTreeMap<SpeakerId, VecDeque<UttHandle>>,
}

impl EpochPlan {
    /// Every handle drawn for the epoch, in shuffled order.
    pub fn order(&self) -> &[UttHandle] {
        &self.order
    }

    /// Handles not yet consumed by a batch.
    pub fn remaining(&self) -> usize {
        self.queues.values().map(VecDeque::len).sum()
    }

    pub fn remaining_for(&self, speaker: SpeakerId) -> usize {
        self.queues.get(&speaker).map_or(0, VecDeque::len)
    }
}

/// Draws at most `cap` utterances per speaker without replacement and
/// shuffles the result deterministically by `seed`.
pub fn build_epoch_plan(index: &DatasetIndex, cap: usize, seed: u64) -> Result<EpochPlan> {
    if index.speakers.is_empty() {
        return Err(Error::domain("build_epoch_plan", "empty dataset"));
    }
    if cap == 0 {
        return Err(Error::domain("build_epoch_plan", "cap must be >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order = Vec::new();
    let mut owner = BTreeMap::new();
    for entry in &index.speakers {
        let mut handles = entry.utterances.clone();
        handles.shuffle(&mut rng);
        handles.truncate(cap);
        for &h in &handles {
            owner.insert(h, entry.speaker);
        }
        order.extend(handles);
    }
    order.shuffle(&mut rng);

    let mut queues: BTreeMap<SpeakerId, VecDeque<UttHandle>> = BTreeMap::new();
    for &h in &order {
        queues.entry(owner[&h]).or_default().push_back(h);
    }
    Ok(EpochPlan { order, queues })
}

/// Speaker and utterance handles of one batch, before embedding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchSkeleton {
    pub speakers: Vec<SpeakerId>,
    /// `utterances[j]` holds the `M` handles of `speakers[j]`.
    pub utterances: Vec<Vec<UttHandle>>,
}

impl BatchSkeleton {
    pub fn n(&self) -> usize {
        self.speakers.len()
    }

    pub fn m(&self) -> usize {
        self.utterances.first().map_or(0, Vec::len)
    }
}

/// Takes `M` utterances from each of `N` distinct speakers still holding at
/// least `M` unconsumed handles. Returns `None` once fewer than `N` speakers
/// qualify, which ends the epoch.
pub fn make_episodic_batch<R: Rng + ?Sized>(
    plan: &mut EpochPlan,
    n: usize,
    m: usize,
    rng: &mut R,
) -> Option<BatchSkeleton> {
    if n == 0 || m == 0 {
        return None;
    }
    let eligible: Vec<SpeakerId> = plan
        .queues
        .iter()
        .filter(|(_, q)| q.len() >= m)
        .map(|(&s, _)| s)
        .collect();
    if eligible.len() < n {
        return None;
    }
    let speakers: Vec<SpeakerId> = eligible.choose_multiple(rng, n).copied().collect();
    let utterances = speakers
        .iter()
        .map(|s| {
            let q = plan.queues.get_mut(s).expect("eligible speaker has a queue");
            q.drain(..m).collect()
        })
        .collect();
    Some(BatchSkeleton { speakers, utterances })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MiningMode {
    Random,
    Hardest,
    HardestFraction,
}

impl fmt::Display for MiningMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MiningMode::Random => "random",
            MiningMode::Hardest => "hardest",
            MiningMode::HardestFraction => "hardest_fraction",
        })
    }
}

impl std::str::FromStr for MiningMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(MiningMode::Random),
            "hardest" => Ok(MiningMode::Hardest),
            "hardest_fraction" => Ok(MiningMode::HardestFraction),
            other => Err(Error::format("mining mode", other)),
        }
    }
}

/// How triplet negatives are chosen; random before `activation_epoch`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MiningPolicy {
    pub mode: MiningMode,
    pub fraction: f64,
    pub activation_epoch: usize,
}

impl MiningPolicy {
    pub fn random() -> Self {
        Self {
            mode: MiningMode::Random,
            fraction: 1.0,
            activation_epoch: 0,
        }
    }

    pub fn hardest() -> Self {
        Self {
            mode: MiningMode::Hardest,
            fraction: 1.0,
            activation_epoch: 0,
        }
    }

    pub fn hardest_fraction(fraction: f64, activation_epoch: usize) -> Self {
        Self {
            mode: MiningMode::HardestFraction,
            fraction,
            activation_epoch,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            return Err(Error::domain("MiningPolicy", format!("fraction {} not in (0, 1]", self.fraction)));
        }
        Ok(())
    }

    pub fn effective_mode(&self, epoch: usize) -> MiningMode {
        if epoch < self.activation_epoch {
            MiningMode::Random
        } else {
            self.mode
        }
    }

    /// Size of the hardest-fraction pool among `candidates` negatives:
    /// `⌈fraction · candidates⌉`, at least one.
    pub fn pool_size(&self, candidates: usize) -> usize {
        let raw = self.fraction * candidates as f64;
        // 0.01·300 = 3.0000000000000004 must give 3
        let pool = (raw - 1e-9).ceil().max(1.0) as usize;
        pool.min(candidates)
    }
}

/// Picks a negative speaker for `anchor` from the `N − 1` other speakers.
///
/// `candidate_distances[c]` is the distance to speaker `c` if `c < anchor`,
/// otherwise to speaker `c + 1`. Returns the chosen speaker index.
pub fn select_negative<R: Rng + ?Sized>(
    anchor: usize,
    candidate_distances: &[f64],
    policy: &MiningPolicy,
    epoch: usize,
    rng: &mut R,
) -> usize {
    assert!(!candidate_distances.is_empty(), "select_negative needs at least one candidate");
    let to_speaker = |c: usize| if c < anchor { c } else { c + 1 };
    let count = candidate_distances.len();
    let pick = match policy.effective_mode(epoch) {
        MiningMode::Random => rng.random_range(0..count),
        MiningMode::Hardest => ranked(candidate_distances)[0],
        MiningMode::HardestFraction => {
            let pool = policy.pool_size(count);
            let order = ranked(candidate_distances);
            order[rng.random_range(0..pool)]
        }
    };
    to_speaker(pick)
}

/// Candidate positions sorted by ascending distance, ties by position.
fn ranked(distances: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..distances.len()).collect();
    order.sort_by(|&a, &b| distances[a].total_cmp(&distances[b]).then(a.cmp(&b)));
    order
}
