//! Deterministic synthetic speaker corpus with disjoint train and test identities.
//!
//! Every speaker owns a unit direction in feature space. An utterance
//! perturbs that direction (`sigma_within`), adds a per-utterance channel
//! offset drawn inside a fixed low-dimensional subspace (`sigma_channel`,
//! `channel_dim`) and emits `T` frames with i.i.d. frame noise
//! (`sigma_frame`). The channel offset is shared by all frames of an
//! utterance, so raw temporal means are dominated by it while a learned
//! projection can discard it.
//!
//! # On-disk layout
//!
//! ```text
//! <dir>/manifest.txt   "<split> <speaker> <file> <frames>" per utterance
//! <dir>/trials.txt     "<label> <fileA> <fileB>" per trial, label 1 = same speaker
//! <dir>/train/*.feat   one file per utterance
//! <dir>/test/*.feat
//! ```
//!
//! Utterance files are little-endian: magic `SPKF`, `u32` version (1),
//! `u32` frame count `T`, `u32` feature dim `F`, `u32` speaker id, then
//! `T·F` `f64` values row-major (frame by frame).

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::embedder::Utterance;
use crate::error::{Error, Result};
use crate::eval::{Trial, TrialList};
use crate::math::{axpy, dot, norm};
use crate::sampling::{DatasetIndex, SpeakerEntry, SpeakerId, UttHandle};

const FEAT_MAGIC: &[u8; 4] = b"SPKF";
const FEAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub train_speakers: usize,
    pub test_speakers: usize,
    pub utterances_per_speaker: usize,
    pub min_frames: usize,
    pub max_frames: usize,
    pub feature_dim: usize,
    pub sigma_within: f64,
    pub sigma_frame: f64,
    pub sigma_channel: f64,
    pub channel_dim: usize,
    pub pairs_per_class: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            train_speakers: 50,
            test_speakers: 20,
            utterances_per_speaker: 20,
            min_frames: 20,
            max_frames: 60,
            feature_dim: 16,
            sigma_within: 0.1,
            sigma_frame: 0.5,
            sigma_channel: 2.0,
            channel_dim: 4,
            pairs_per_class: 500,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.train_speakers == 0 {
            return bad("data.train_speakers must be >= 1".into());
        }
        if self.test_speakers < 2 {
            return bad("data.test_speakers must be >= 2".into());
        }
        if self.utterances_per_speaker < 2 {
            return bad("data.utterances_per_speaker must be >= 2".into());
        }
        if self.min_frames == 0 || self.min_frames > self.max_frames {
            return bad(format!(
                "data frame range {}..={} is empty or starts at 0",
                self.min_frames, self.max_frames
            ));
        }
        if self.feature_dim == 0 {
            return bad("data.feature_dim must be >= 1".into());
        }
        if self.channel_dim > self.feature_dim {
            return bad(format!(
                "data.channel_dim {} exceeds feature_dim {}",
                self.channel_dim, self.feature_dim
            ));
        }
        for (name, v) in [
            ("sigma_within", self.sigma_within),
            ("sigma_frame", self.sigma_frame),
            ("sigma_channel", self.sigma_channel),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("data.{name} must be finite and >= 0, got {v}"));
            }
        }
        if self.pairs_per_class == 0 {
            return bad("data.pairs_per_class must be >= 1".into());
        }
        Ok(())
    }
}

/// Utterances of one split together with their speaker index.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub index: DatasetIndex,
    /// Indexed by [`UttHandle`].
    pub utterances: Vec<Utterance>,
    /// Corpus-relative file name of every utterance.
    pub names: Vec<String>,
}

impl Split {
    pub fn from_utterances(utterances: Vec<Utterance>, names: Vec<String>) -> Result<Self> {
        if names.len() != utterances.len() {
            return Err(Error::DimensionMismatch {
                op: "Split::from_utterances",
                expected: utterances.len(),
                got: names.len(),
            });
        }
        let mut by_speaker: Vec<SpeakerEntry> = Vec::new();
        let mut pos: HashMap<SpeakerId, usize> = HashMap::new();
        for (h, u) in utterances.iter().enumerate() {
            let slot = *pos.entry(u.speaker).or_insert_with(|| {
                by_speaker.push(SpeakerEntry {
                    speaker: u.speaker,
                    utterances: Vec::new(),
                });
                by_speaker.len() - 1
            });
            by_speaker[slot].utterances.push(UttHandle(h));
        }
        let lens = utterances.iter().map(Utterance::num_frames).collect();
        Ok(Self {
            index: DatasetIndex::new(by_speaker, lens)?,
            utterances,
            names,
        })
    }

    pub fn get(&self, h: UttHandle) -> Result<&Utterance> {
        self.utterances
            .get(h.0)
            .ok_or_else(|| Error::domain("Split::get", format!("missing utterance handle {}", h.0)))
    }

    pub fn feature_dim(&self) -> usize {
        self.utterances.first().map_or(0, Utterance::feature_dim)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub train: Split,
    pub test: Split,
    pub trials: TrialList,
}

fn unit_gaussian(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let n = norm(&v);
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Orthonormal basis of a random `k`-dimensional subspace (Gram–Schmidt).
fn random_subspace(rng: &mut ChaCha8Rng, dim: usize, k: usize) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(k);
    while basis.len() < k {
        let mut v = unit_gaussian(rng, dim);
        for b in &basis {
            let p = dot(&v, b);
            axpy(-p, b, &mut v);
        }
        let n = norm(&v);
        if n > 1e-6 {
            basis.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    basis
}

pub fn generate(spec: &SynthSpec) -> Result<Corpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let f = spec.feature_dim;
    let channel = random_subspace(&mut rng, f, spec.channel_dim);

    let make_split = |split: &str, first_id: usize, count: usize, rng: &mut ChaCha8Rng| -> Result<Split> {
        let mut utterances = Vec::new();
        let mut names = Vec::new();
        for s in 0..count {
            let speaker = SpeakerId((first_id + s) as u32);
            let dir = unit_gaussian(rng, f);
            for k in 0..spec.utterances_per_speaker {
                let mut d = dir.clone();
                if spec.sigma_within > 0.0 {
                    for x in d.iter_mut() {
                        *x += spec.sigma_within * { let z: f64 = StandardNormal.sample(&mut *rng); z };
                    }
                    let n = norm(&d);
                    d.iter_mut().for_each(|x| *x /= n);
                }
                if spec.sigma_channel > 0.0 {
                    for b in &channel {
                        let z: f64 = StandardNormal.sample(&mut *rng);
                        axpy(spec.sigma_channel * z, b, &mut d);
                    }
                }
                let t = rng.random_range(spec.min_frames..=spec.max_frames);
                let mut frames = Vec::with_capacity(t * f);
                for _ in 0..t {
                    for &c in &d {
                        let noise = if spec.sigma_frame > 0.0 {
                            spec.sigma_frame * { let z: f64 = StandardNormal.sample(&mut *rng); z }
                        } else {
                            0.0
                        };
                        frames.push(c + noise);
                    }
                }
                utterances.push(Utterance::new(frames, t, f, speaker)?);
                names.push(format!("{split}/{speaker}_u{k:03}.feat"));
            }
        }
        Split::from_utterances(utterances, names)
    };

    let train = make_split("train", 0, spec.train_speakers, &mut rng)?;
    let test = make_split("test", spec.train_speakers, spec.test_speakers, &mut rng)?;
    let trials = build_trials(&test.index, spec.pairs_per_class, spec.seed ^ 0x7472_6961_6c73)?;
    Ok(Corpus { train, test, trials })
}

/// `pairs_per_class` same-speaker and as many different-speaker trials,
/// sampled with replacement; no trial pairs an utterance with itself.
pub fn build_trials(test: &DatasetIndex, pairs_per_class: usize, seed: u64) -> Result<TrialList> {
    const OP: &str = "build_trials";
    let speakers = test.speakers();
    if speakers.len() < 2 {
        return Err(Error::domain(OP, "needs at least two test speakers"));
    }
    let multi: Vec<&SpeakerEntry> = speakers.iter().filter(|s| s.utterances.len() >= 2).collect();
    if multi.is_empty() {
        return Err(Error::domain(OP, "no speaker has two utterances for a same-speaker trial"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut trials = Vec::with_capacity(2 * pairs_per_class);
    for _ in 0..pairs_per_class {
        let s = multi.choose(&mut rng).expect("nonempty");
        let picked: Vec<&UttHandle> = s.utterances.choose_multiple(&mut rng, 2).collect();
        trials.push(Trial {
            a: *picked[0],
            b: *picked[1],
            target: true,
        });

        let pair: Vec<&SpeakerEntry> = speakers.choose_multiple(&mut rng, 2).collect();
        trials.push(Trial {
            a: *pair[0].utterances.choose(&mut rng).expect("nonempty"),
            b: *pair[1].utterances.choose(&mut rng).expect("nonempty"),
            target: false,
        });
    }
    TrialList::new(trials)
}

pub fn write_utterance(w: &mut impl Write, u: &Utterance) -> Result<()> {
    w.write_all(FEAT_MAGIC)?;
    for v in [FEAT_VERSION, u.num_frames() as u32, u.feature_dim() as u32, u.speaker.0] {
        w.write_all(&v.to_le_bytes())?;
    }
    for x in u.frames() {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_utterance(r: &mut impl Read) -> Result<Utterance> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != FEAT_MAGIC {
        return Err(Error::format("utterance file", "bad magic"));
    }
    let version = read_u32(r)?;
    if version != FEAT_VERSION {
        return Err(Error::format("utterance file", format!("unsupported version {version}")));
    }
    let t = read_u32(r)? as usize;
    let f = read_u32(r)? as usize;
    let speaker = SpeakerId(read_u32(r)?);
    let mut frames = Vec::with_capacity(t * f);
    let mut b = [0u8; 8];
    for _ in 0..t * f {
        r.read_exact(&mut b)?;
        frames.push(f64::from_le_bytes(b));
    }
    Utterance::new(frames, t, f, speaker)
}

/// Writes the corpus in the layout described in the module docs.
pub fn export_corpus(corpus: &Corpus, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut manifest = BufWriter::new(fs::File::create(dir.join("manifest.txt"))?);
    writeln!(manifest, "# split speaker file frames")?;
    for (split_name, split) in [("train", &corpus.train), ("test", &corpus.test)] {
        fs::create_dir_all(dir.join(split_name))?;
        for (u, name) in split.utterances.iter().zip(&split.names) {
            let mut w = BufWriter::new(fs::File::create(dir.join(name))?);
            write_utterance(&mut w, u)?;
            w.flush()?;
            writeln!(manifest, "{split_name} {} {name} {}", u.speaker, u.num_frames())?;
        }
    }
    manifest.flush()?;

    let mut trials = BufWriter::new(fs::File::create(dir.join("trials.txt"))?);
    for t in corpus.trials.trials() {
        writeln!(
            trials,
            "{} {} {}",
            u8::from(t.target),
            corpus.test.names[t.a.0],
            corpus.test.names[t.b.0]
        )?;
    }
    trials.flush()?;
    Ok(())
}

/// Reads a corpus written by [`export_corpus`].
pub fn load_corpus(dir: &Path) -> Result<Corpus> {
    let manifest = BufReader::new(fs::File::open(dir.join("manifest.txt"))?);
    let mut splits: BTreeMap<&str, (Vec<Utterance>, Vec<String>)> = BTreeMap::new();
    for (lineno, line) in manifest.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let bad = |d: &str| Error::format("manifest.txt", format!("line {}: {d}", lineno + 1));
        if fields.len() != 4 {
            return Err(bad("expected `<split> <speaker> <file> <frames>`"));
        }
        let split = match fields[0] {
            "train" => "train",
            "test" => "test",
            _ => return Err(bad("split must be train or test")),
        };
        let name = fields[2].to_string();
        let u = read_utterance(&mut BufReader::new(fs::File::open(dir.join(&name))?))?;
        if u.speaker.to_string() != fields[1] || fields[3].parse::<usize>().ok() != Some(u.num_frames()) {
            return Err(bad("speaker or frame count disagrees with the utterance file"));
        }
        let entry = splits.entry(split).or_default();
        entry.0.push(u);
        entry.1.push(name);
    }
    let mut take = |s: &str| -> Result<Split> {
        let (u, n) = splits
            .remove(s)
            .ok_or_else(|| Error::format("manifest.txt", format!("no {s} utterances")))?;
        Split::from_utterances(u, n)
    };
    let train = take("train")?;
    let test = take("test")?;
    if test.index.speaker_ids().any(|s| train.index.class_of(s).is_some()) {
        return Err(Error::format("manifest.txt", "train and test share a speaker"));
    }
    let trials = read_trials(&dir.join("trials.txt"), &test)?;
    Ok(Corpus { train, test, trials })
}

/// Parses `"<label> <fileA> <fileB>"` lines against the test split's file names.
pub fn read_trials(path: &Path, test: &Split) -> Result<TrialList> {
    let by_name: HashMap<&str, UttHandle> =
        test.names.iter().enumerate().map(|(i, n)| (n.as_str(), UttHandle(i))).collect();
    let mut trials = Vec::new();
    for (lineno, line) in BufReader::new(fs::File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |d: String| Error::format("trial list", format!("line {}: {d}", lineno + 1));
        let fields: Vec<&str> = line.split_whitespace().collect();
        let [label, a, b] = fields[..] else {
            return Err(bad("expected `<label> <fileA> <fileB>`".into()));
        };
        let target = match label {
            "1" => true,
            "0" => false,
            other => return Err(bad(format!("label must be 0 or 1, got {other}"))),
        };
        let resolve = |n: &str| by_name.get(n).copied().ok_or_else(|| bad(format!("unknown utterance {n}")));
        trials.push(Trial {
            a: resolve(a)?,
            b: resolve(b)?,
            target,
        });
    }
    TrialList::new(trials)
}
