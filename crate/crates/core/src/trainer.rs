//! Training loop, curriculum schedules, telemetry and multi-run sweeps.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedder::{backward_into, embed, EmbedderConfig, EmbedderGrads, EmbedderParams, InputNorm};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalConfig};
use crate::losses::{EmbeddingBatch, Grid};
use crate::objective::{Family, LossParams, Objective, ObjectiveConfig, Registry, StepContext};
use crate::optim::{Adam, LrSchedule};
use crate::report::RunRecord;
use crate::sampling::{build_epoch_plan, make_episodic_batch, BatchSkeleton, MiningMode, SpeakerId};
use crate::synth::{Corpus, Split};

/// Margin and mining-hardness schedule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurriculumSchedule {
    pub aam_start_margin: f64,
    pub aam_final_margin: f64,
    pub switch_epoch: usize,
    pub triplet_mining_activation_epoch: usize,
    pub triplet_hard_fraction: f64,
}

impl CurriculumSchedule {
    /// Margin 0.1 → 0.3 and hardest-1% mining, both switching at epoch 100.
    pub fn standard() -> Self {
        Self {
            aam_start_margin: 0.1,
            aam_final_margin: 0.3,
            switch_epoch: 100,
            triplet_mining_activation_epoch: 100,
            triplet_hard_fraction: 0.01,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (a, b) = (self.aam_start_margin, self.aam_final_margin);
        if !(0.0 <= a && a <= b && b < std::f64::consts::FRAC_PI_2) {
            return Err(Error::Config(format!(
                "curriculum margins must satisfy 0 <= start ({a}) <= final ({b}) < pi/2"
            )));
        }
        if !(self.triplet_hard_fraction > 0.0 && self.triplet_hard_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "hard fraction {} must lie in (0, 1]",
                self.triplet_hard_fraction
            )));
        }
        Ok(())
    }
}

/// Start margin before `switch_epoch`, final margin from it onwards.
pub fn effective_margin(schedule: &CurriculumSchedule, epoch: usize) -> f64 {
    if epoch < schedule.switch_epoch {
        schedule.aam_start_margin
    } else {
        schedule.aam_final_margin
    }
}

/// Decorrelated seed for stream `stream`, item `index` of a run seeded with `seed`.
pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut z = seed
        ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ index.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub hidden: usize,
    pub dim: usize,
    pub input_norm: InputNorm,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            dim: 64,
            input_norm: InputNorm::None,
        }
    }
}

impl ModelConfig {
    pub fn embedder(&self, input_dim: usize) -> EmbedderConfig {
        EmbedderConfig {
            input_dim,
            hidden: self.hidden,
            dim: self.dim,
            input_norm: self.input_norm,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSettings {
    pub epochs: usize,
    /// Speakers per episodic batch (`N`) for metric objectives.
    pub speakers_per_batch: usize,
    /// Utterances per batch for classification objectives.
    pub batch_size: usize,
    /// Utterances drawn per speaker and epoch.
    pub max_per_speaker: usize,
    pub seed: u64,
    pub repeats: usize,
    pub lr: f64,
    pub lr_decay: f64,
    pub lr_interval: usize,
    /// Stop after this many optimizer steps in total.
    pub max_steps: Option<usize>,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            epochs: 20,
            speakers_per_batch: 30,
            batch_size: 30,
            max_per_speaker: 100,
            seed: 0,
            repeats: 1,
            lr: 1e-3,
            lr_decay: 0.95,
            lr_interval: 10,
            max_steps: None,
        }
    }
}

impl TrainSettings {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.speakers_per_batch < 2 {
            return bad("train.speakers_per_batch must be >= 2".into());
        }
        if self.batch_size == 0 || self.max_per_speaker == 0 || self.lr_interval == 0 {
            return bad("train.batch_size, max_per_speaker and lr_interval must be >= 1".into());
        }
        if self.repeats == 0 {
            return bad("train.repeats must be >= 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("train.lr must be positive, got {}", self.lr));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad(format!("train.lr_decay must lie in (0, 1], got {}", self.lr_decay));
        }
        Ok(())
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            base: self.lr,
            factor: self.lr_decay,
            interval: self.lr_interval,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainRunConfig {
    pub objective: ObjectiveConfig,
    pub model: ModelConfig,
    pub train: TrainSettings,
}

impl TrainRunConfig {
    pub fn new(objective: ObjectiveConfig) -> Self {
        Self {
            objective,
            model: ModelConfig::default(),
            train: TrainSettings::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
    pub margin: Option<f64>,
    pub mining: Option<MiningMode>,
    pub steps: usize,
    pub seconds: f64,
}

/// One record per completed epoch.
///
/// Text form: a `# objective=<name> seed=<seed>` line, a column header
/// line, then `epoch loss lr margin mining steps seconds` separated by
/// single spaces, with `-` for absent values.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainTelemetry {
    pub objective: String,
    pub seed: u64,
    pub records: Vec<EpochRecord>,
}

const TELEMETRY_HEADER: &str = "# epoch loss lr margin mining steps seconds";

impl TrainTelemetry {
    pub fn total_steps(&self) -> usize {
        self.records.iter().map(|r| r.steps).sum()
    }

    /// Equality ignoring wall-clock time; floats compared bit for bit.
    pub fn same_trajectory(&self, other: &Self) -> bool {
        self.objective == other.objective
            && self.seed == other.seed
            && self.records.len() == other.records.len()
            && self.records.iter().zip(&other.records).all(|(a, b)| {
                a.epoch == b.epoch
                    && a.loss.to_bits() == b.loss.to_bits()
                    && a.lr.to_bits() == b.lr.to_bits()
                    && a.margin.map(f64::to_bits) == b.margin.map(f64::to_bits)
                    && a.mining == b.mining
                    && a.steps == b.steps
            })
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("# objective={} seed={}\n{TELEMETRY_HEADER}\n", self.objective, self.seed);
        for r in &self.records {
            let margin = r.margin.map_or("-".to_string(), |m| m.to_string());
            let mining = r.mining.map_or("-".to_string(), |m| m.to_string());
            let _ = writeln!(
                s,
                "{} {} {} {margin} {mining} {} {:.6}",
                r.epoch, r.loss, r.lr, r.steps, r.seconds
            );
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |d: String| Error::format("telemetry", d);
        let mut lines = text.lines();
        let head = lines.next().ok_or_else(|| bad("empty".into()))?;
        let mut objective = None;
        let mut seed = None;
        for part in head.trim_start_matches('#').split_whitespace() {
            match part.split_once('=') {
                Some(("objective", v)) => objective = Some(v.to_string()),
                Some(("seed", v)) => seed = v.parse().ok(),
                _ => {}
            }
        }
        let mut records = Vec::new();
        for line in lines.filter(|l| !l.starts_with('#') && !l.trim().is_empty()) {
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 7 {
                return Err(bad(format!("expected 7 columns in `{line}`")));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|e| bad(format!("`{s}`: {e}")));
            let int = |s: &str| s.parse::<usize>().map_err(|e| bad(format!("`{s}`: {e}")));
            records.push(EpochRecord {
                epoch: int(f[0])?,
                loss: num(f[1])?,
                lr: num(f[2])?,
                margin: if f[3] == "-" { None } else { Some(num(f[3])?) },
                mining: if f[4] == "-" { None } else { Some(f[4].parse()?) },
                steps: int(f[5])?,
                seconds: num(f[6])?,
            });
        }
        Ok(Self {
            objective: objective.ok_or_else(|| bad("missing objective".into()))?,
            seed: seed.ok_or_else(|| bad("missing seed".into()))?,
            records,
        })
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub embedder: EmbedderParams,
    pub loss_params: LossParams,
    pub telemetry: TrainTelemetry,
}

struct Run<'a> {
    objective: Box<dyn Objective>,
    split: &'a Split,
    labels: HashMap<SpeakerId, usize>,
    embedder: EmbedderParams,
    loss_params: LossParams,
    theta: Vec<f64>,
    adam: Adam,
    seed: u64,
}

impl Run<'_> {
    fn diverged(&self, epoch: usize, step: usize, reason: impl Into<String>) -> Error {
        Error::Diverged {
            objective: self.objective.name().to_string(),
            epoch,
            step,
            reason: reason.into(),
        }
    }

    fn step(&mut self, sk: &BatchSkeleton, epoch: usize, step: usize) -> Result<f64> {
        let (n, m) = (sk.n(), sk.m());
        let dim = self.embedder.config().dim;
        let mut data = Vec::with_capacity(n * m * dim);
        let mut caches = Vec::with_capacity(n * m);
        let mut labels = Vec::with_capacity(n * m);
        for (speaker, handles) in sk.speakers.iter().zip(&sk.utterances) {
            for &h in handles {
                let u = self.embedder.prepare(self.split.get(h)?);
                let (e, cache) = embed(&u, &self.embedder)?;
                data.extend_from_slice(&e);
                caches.push(cache);
                labels.push(self.labels[speaker]);
            }
        }
        let grid = Grid::from_vec(n, m, dim, data)?;
        if !grid.is_finite() {
            return Err(self.diverged(epoch, step, "non-finite embedding"));
        }
        let batch = EmbeddingBatch::new(grid, sk.speakers.clone())?;
        let ctx = StepContext {
            epoch,
            seed: derive_seed(self.seed, 3, step as u64),
        };
        let result = self
            .objective
            .compute(&batch, &labels, &self.loss_params, &ctx)
            .map_err(|e| self.diverged(epoch, step, e.to_string()))?;
        if !result.is_finite() {
            return Err(self.diverged(epoch, step, format!("non-finite loss {}", result.loss)));
        }

        let mut grads = EmbedderGrads::zeros(self.embedder.config());
        for (r, cache) in caches.iter().enumerate() {
            backward_into(&mut grads, result.grad_embeddings.flat(r), cache, &self.embedder, false)?;
        }
        let mut g = grads.flatten();
        g.extend(self.loss_params.grad_from(&result));
        self.adam
            .step(&mut self.theta, &g)
            .map_err(|e| self.diverged(epoch, step, e.to_string()))?;

        let k = self.embedder.config().param_count();
        self.embedder.load_flat(&self.theta[..k])?;
        self.loss_params.load_flat(&self.theta[k..])?;
        self.loss_params.project();
        self.theta.truncate(k);
        self.theta.extend(self.loss_params.flatten());
        if !self.theta.iter().all(|v| v.is_finite()) {
            return Err(self.diverged(epoch, step, "non-finite parameters after update"));
        }
        Ok(result.loss)
    }
}

/// Trains an embedder on `split` with the objective named in `cfg`.
pub fn train(cfg: &TrainRunConfig, split: &Split) -> Result<TrainOutcome> {
    train_with(&Registry::builtin(), cfg, split)
}

pub fn train_with(registry: &Registry, cfg: &TrainRunConfig, split: &Split) -> Result<TrainOutcome> {
    cfg.train.validate()?;
    let objective = registry.build(&cfg.objective)?;
    let index = &split.index;
    let m = objective.utterances_per_speaker();
    let n = match objective.family() {
        Family::Classification => cfg.train.batch_size,
        Family::Metric => cfg.train.speakers_per_batch,
    };
    if n > index.speaker_count() {
        return Err(Error::Config(format!(
            "batch needs {n} distinct speakers but the training split has {}",
            index.speaker_count()
        )));
    }
    if m > cfg.train.max_per_speaker {
        return Err(Error::Config(format!(
            "{m} utterances per speaker exceed train.max_per_speaker = {}",
            cfg.train.max_per_speaker
        )));
    }

    let seed = cfg.train.seed;
    let mut init_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0, 0));
    let model = cfg.model.embedder(split.feature_dim());
    let embedder = EmbedderParams::init(model, &mut init_rng);
    let loss_params = objective.init_params(index.speaker_count(), model.dim, &mut init_rng);
    let mut theta = embedder.flatten();
    theta.extend(loss_params.flatten());
    let schedule = cfg.train.schedule();
    let adam = Adam::new(theta.len(), schedule.at(0))?;
    let labels = index.speakers().iter().enumerate().map(|(c, s)| (s.speaker, c)).collect();

    let mut run = Run {
        objective,
        split,
        labels,
        embedder,
        loss_params,
        theta,
        adam,
        seed,
    };
    let mut telemetry = TrainTelemetry {
        objective: run.objective.name().to_string(),
        seed,
        records: Vec::with_capacity(cfg.train.epochs),
    };
    let max_steps = cfg.train.max_steps.unwrap_or(usize::MAX);
    let mut global_step = 0usize;

    for epoch in 0..cfg.train.epochs {
        if global_step >= max_steps {
            break;
        }
        let started = Instant::now();
        let lr = schedule.at(epoch);
        run.adam.set_lr(lr)?;
        let mut plan = build_epoch_plan(index, cfg.train.max_per_speaker, derive_seed(seed, 1, epoch as u64))?;
        let mut batch_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 2, epoch as u64));
        let (mut loss_sum, mut steps) = (0.0, 0usize);
        while global_step < max_steps {
            let Some(sk) = make_episodic_batch(&mut plan, n, m, &mut batch_rng) else {
                break;
            };
            loss_sum += run.step(&sk, epoch, global_step)?;
            steps += 1;
            global_step += 1;
        }
        if steps == 0 {
            return Err(Error::Config(format!(
                "epoch {epoch} produced no batch of {n} speakers x {m} utterances"
            )));
        }
        telemetry.records.push(EpochRecord {
            epoch,
            loss: loss_sum / steps as f64,
            lr,
            margin: run.objective.margin_at(epoch),
            mining: run.objective.mining_at(epoch),
            steps,
            seconds: started.elapsed().as_secs_f64(),
        });
        log::debug!(
            "{} epoch {epoch}: loss {:.5} over {steps} steps",
            telemetry.objective,
            loss_sum / steps as f64
        );
    }

    Ok(TrainOutcome {
        embedder: run.embedder,
        loss_params: run.loss_params,
        telemetry,
    })
}

/// One grid cell of a sweep: a training configuration and its report label.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepCell {
    pub config: TrainRunConfig,
    pub hyperparameters: String,
}

#[derive(Debug, Clone)]
pub struct SweepOutcome {
    /// One record per (cell, repeat), in report order.
    pub runs: Vec<RunRecord>,
    /// Telemetry of every run that completed, aligned with `runs`.
    pub telemetry: Vec<Option<TrainTelemetry>>,
}

/// Trains and evaluates every cell `repeats` times with seeds
/// `seed + repeat`, running up to `jobs` trainings at once. A failed run is
/// recorded with its error and does not stop the sweep.
pub fn train_sweep(
    cells: &[SweepCell],
    repeats: usize,
    corpus: &Corpus,
    eval: &EvalConfig,
    jobs: usize,
) -> Result<SweepOutcome> {
    if repeats == 0 {
        return Err(Error::Config("repeats must be >= 1".into()));
    }
    let registry = Registry::builtin();
    let work: Vec<(usize, usize)> = (0..cells.len())
        .flat_map(|c| (0..repeats).map(move |r| (c, r)))
        .collect();
    let run_one = |&(c, r): &(usize, usize)| -> (RunRecord, Option<TrainTelemetry>) {
        let cell = &cells[c];
        let mut cfg = cell.config.clone();
        cfg.train.seed = cfg.train.seed.wrapping_add(r as u64);
        let outcome = train_with(&registry, &cfg, &corpus.train)
            .and_then(|o| evaluate(&o.embedder, &corpus.test, &corpus.trials, eval).map(|(rep, _)| (o, rep.eer)));
        let mut record = RunRecord::for_cell(&cfg, &cell.hyperparameters, r);
        match outcome {
            Ok((o, eer)) => {
                record.eer = Some(eer);
                record.steps = o.telemetry.total_steps();
                (record, Some(o.telemetry))
            }
            Err(e) => {
                log::warn!("{} {} repeat {r}: {e}", cfg.objective.name, cell.hyperparameters);
                record.error = Some(e.to_string());
                (record, None)
            }
        }
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot start {jobs} workers: {e}")))?;
    let results: Vec<(RunRecord, Option<TrainTelemetry>)> = pool.install(|| work.par_iter().map(run_one).collect());

    let mut order: Vec<usize> = (0..results.len()).collect();
    order.sort_by(|&a, &b| results[a].0.sort_key(&registry).cmp(&results[b].0.sort_key(&registry)));
    let (runs, telemetry) = order.into_iter().map(|i| results[i].clone()).unzip();
    Ok(SweepOutcome { runs, telemetry })
}
