//! Training objectives behind a common trait, looked up by name at runtime.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{
    aam_softmax_loss, am_softmax_loss, angular_prototypical_loss, ge2e_loss, prototypical_loss, softmax_loss,
    triplet_loss, AffineSimilarityParams, ClassifierHead, EmbeddingBatch, LossResult, MarginConfig,
};
use crate::sampling::{MiningMode, MiningPolicy};
use crate::trainer::{effective_margin, CurriculumSchedule};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Family {
    /// Utterances are classified into the training identities through a head.
    Classification,
    /// Episodic `N×M` batches compared against each other.
    Metric,
}

/// Learnable parameters owned by the objective rather than the embedder.
#[derive(Debug, Clone, PartialEq)]
pub enum LossParams {
    None,
    Head(ClassifierHead),
    Affine(AffineSimilarityParams),
}

impl LossParams {
    pub fn len(&self) -> usize {
        match self {
            LossParams::None => 0,
            LossParams::Head(h) => h.weights.as_slice().len() + h.bias.len(),
            LossParams::Affine(_) => 2,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn flatten(&self) -> Vec<f64> {
        match self {
            LossParams::None => Vec::new(),
            LossParams::Head(h) => h.weights.as_slice().iter().chain(&h.bias).copied().collect(),
            LossParams::Affine(a) => vec![a.w, a.b],
        }
    }

    pub fn load_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.len() {
            return Err(Error::DimensionMismatch {
                op: "LossParams::load_flat",
                expected: self.len(),
                got: flat.len(),
            });
        }
        match self {
            LossParams::None => {}
            LossParams::Head(h) => {
                let (w, b) = flat.split_at(h.weights.as_slice().len());
                h.weights.as_mut_slice().copy_from_slice(w);
                h.bias.copy_from_slice(b);
            }
            LossParams::Affine(a) => {
                a.w = flat[0];
                a.b = flat[1];
            }
        }
        Ok(())
    }

    /// Restores constraints after an unconstrained optimizer update.
    pub fn project(&mut self) {
        if let LossParams::Affine(a) = self {
            a.project();
        }
    }

    /// Gradient of the objective w.r.t. these parameters, in [`flatten`](Self::flatten) order.
    pub fn grad_from(&self, result: &LossResult) -> Vec<f64> {
        match self {
            LossParams::None => Vec::new(),
            LossParams::Head(h) => match &result.grad_head {
                Some(g) => g.weights.as_slice().iter().chain(&g.bias).copied().collect(),
                None => vec![0.0; h.weights.as_slice().len() + h.bias.len()],
            },
            LossParams::Affine(_) => vec![result.grad_w.unwrap_or(0.0), result.grad_b.unwrap_or(0.0)],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.flatten().iter().all(|v| v.is_finite())
    }
}

/// Per-step information an objective may depend on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct StepContext {
    pub epoch: usize,
    /// Seed for any randomness inside the loss (triplet negative draws).
    pub seed: u64,
}

pub trait Objective: fmt::Debug + Send + Sync {
    /// Registry name, e.g. `"am_softmax"`.
    fn name(&self) -> &'static str;

    fn family(&self) -> Family;

    /// Utterances drawn per speaker in every batch (`M`).
    fn utterances_per_speaker(&self) -> usize;

    fn init_params(&self, classes: usize, dim: usize, rng: &mut dyn rand::RngCore) -> LossParams;

    /// `labels` holds the class of every row of the batch in speaker-major
    /// order and is only consulted by classification objectives.
    fn compute(
        &self,
        batch: &EmbeddingBatch,
        labels: &[usize],
        params: &LossParams,
        ctx: &StepContext,
    ) -> Result<LossResult>;

    /// Margin actually used at `epoch`, for objectives that have one.
    fn margin_at(&self, _epoch: usize) -> Option<f64> {
        None
    }

    /// Negative-mining mode in force at `epoch`, for objectives that mine.
    fn mining_at(&self, _epoch: usize) -> Option<MiningMode> {
        None
    }

    /// Short hyperparameter summary used as a report label.
    fn describe(&self) -> String;
}

/// Objective name plus hyperparameters, as written in experiment configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObjectiveConfig {
    pub name: String,
    pub margin: Option<f64>,
    pub scale: Option<f64>,
    /// Utterances per speaker for the episodic objectives.
    pub utterances: Option<usize>,
    /// Start AAM-Softmax at `start_margin` and step up to `margin` at `switch_epoch`.
    pub curriculum: bool,
    pub start_margin: f64,
    pub switch_epoch: usize,
    pub mining: MiningMode,
    pub hard_fraction: f64,
    pub mining_activation_epoch: usize,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            name: "angular_prototypical".into(),
            margin: None,
            scale: None,
            utterances: None,
            curriculum: false,
            start_margin: 0.1,
            switch_epoch: 10,
            mining: MiningMode::HardestFraction,
            hard_fraction: 0.01,
            mining_activation_epoch: 10,
        }
    }
}

impl ObjectiveConfig {
    pub fn named(name: &str) -> Self {
        Self {
            name: name.into(),
            ..Self::default()
        }
    }

    pub fn schedule(&self, final_margin: f64) -> CurriculumSchedule {
        CurriculumSchedule {
            aam_start_margin: if self.curriculum { self.start_margin } else { final_margin },
            aam_final_margin: final_margin,
            switch_epoch: self.switch_epoch,
            triplet_mining_activation_epoch: self.mining_activation_epoch,
            triplet_hard_fraction: self.hard_fraction,
        }
    }

    fn reject(&self, field: &str) -> Result<()> {
        Err(Error::Config(format!("objective {} does not take `{field}`", self.name)))
    }

    fn episodic_m(&self, default: usize) -> Result<usize> {
        let m = self.utterances.unwrap_or(default);
        if m < 2 {
            return Err(Error::Config(format!("objective {} needs utterances >= 2, got {m}", self.name)));
        }
        Ok(m)
    }

    fn no_margin(&self) -> Result<()> {
        if self.margin.is_some() {
            self.reject("margin")?;
        }
        if self.scale.is_some() {
            self.reject("scale")?;
        }
        Ok(())
    }

    fn single_utterance(&self) -> Result<()> {
        match self.utterances {
            None | Some(1) => Ok(()),
            Some(_) => self.reject("utterances"),
        }
    }
}

fn expect_head<'a>(name: &str, params: &'a LossParams) -> Result<&'a ClassifierHead> {
    match params {
        LossParams::Head(h) => Ok(h),
        _ => Err(Error::Config(format!("{name} needs classifier head parameters"))),
    }
}

fn expect_affine<'a>(name: &str, params: &'a LossParams) -> Result<&'a AffineSimilarityParams> {
    match params {
        LossParams::Affine(a) => Ok(a),
        _ => Err(Error::Config(format!("{name} needs affine similarity parameters"))),
    }
}

fn init_head(classes: usize, dim: usize, rng: &mut dyn rand::RngCore) -> LossParams {
    LossParams::Head(ClassifierHead::init(classes, dim, rng))
}

#[derive(Debug)]
struct Softmax;

impl Objective for Softmax {
    fn name(&self) -> &'static str {
        "softmax"
    }
    fn family(&self) -> Family {
        Family::Classification
    }
    fn utterances_per_speaker(&self) -> usize {
        1
    }
    fn init_params(&self, classes: usize, dim: usize, rng: &mut dyn rand::RngCore) -> LossParams {
        init_head(classes, dim, rng)
    }
    fn compute(&self, batch: &EmbeddingBatch, labels: &[usize], p: &LossParams, _: &StepContext) -> Result<LossResult> {
        softmax_loss(batch, labels, expect_head(self.name(), p)?)
    }
    fn describe(&self) -> String {
        "-".into()
    }
}

#[derive(Debug)]
struct AmSoftmax(MarginConfig);

impl Objective for AmSoftmax {
    fn name(&self) -> &'static str {
        "am_softmax"
    }
    fn family(&self) -> Family {
        Family::Classification
    }
    fn utterances_per_speaker(&self) -> usize {
        1
    }
    fn init_params(&self, classes: usize, dim: usize, rng: &mut dyn rand::RngCore) -> LossParams {
        init_head(classes, dim, rng)
    }
    fn compute(&self, batch: &EmbeddingBatch, labels: &[usize], p: &LossParams, _: &StepContext) -> Result<LossResult> {
        am_softmax_loss(batch, labels, expect_head(self.name(), p)?, self.0)
    }
    fn margin_at(&self, _: usize) -> Option<f64> {
        Some(self.0.margin)
    }
    fn describe(&self) -> String {
        format!("m={} s={}", self.0.margin, self.0.scale)
    }
}

#[derive(Debug)]
struct AamSoftmax {
    scale: f64,
    schedule: CurriculumSchedule,
    curriculum: bool,
}

impl Objective for AamSoftmax {
    fn name(&self) -> &'static str {
        "aam_softmax"
    }
    fn family(&self) -> Family {
        Family::Classification
    }
    fn utterances_per_speaker(&self) -> usize {
        1
    }
    fn init_params(&self, classes: usize, dim: usize, rng: &mut dyn rand::RngCore) -> LossParams {
        init_head(classes, dim, rng)
    }
    fn compute(&self, batch: &EmbeddingBatch, labels: &[usize], p: &LossParams, ctx: &StepContext) -> Result<LossResult> {
        let cfg = MarginConfig::new(effective_margin(&self.schedule, ctx.epoch), self.scale)?;
        aam_softmax_loss(batch, labels, expect_head(self.name(), p)?, cfg)
    }
    fn margin_at(&self, epoch: usize) -> Option<f64> {
        Some(effective_margin(&self.schedule, epoch))
    }
    fn describe(&self) -> String {
        let base = format!("m={} s={}", self.schedule.aam_final_margin, self.scale);
        if self.curriculum {
            format!("{base} curriculum")
        } else {
            base
        }
    }
}

#[derive(Debug)]
struct Triplet {
    margin: f64,
    policy: MiningPolicy,
}

impl Objective for Triplet {
    fn name(&self) -> &'static str {
        "triplet"
    }
    fn family(&self) -> Family {
        Family::Metric
    }
    fn utterances_per_speaker(&self) -> usize {
        2
    }
    fn init_params(&self, _: usize, _: usize, _: &mut dyn rand::RngCore) -> LossParams {
        LossParams::None
    }
    fn compute(&self, batch: &EmbeddingBatch, _: &[usize], _: &LossParams, ctx: &StepContext) -> Result<LossResult> {
        triplet_loss(batch, self.margin, &self.policy, ctx.epoch, ctx.seed)
    }
    fn margin_at(&self, _: usize) -> Option<f64> {
        Some(self.margin)
    }
    fn mining_at(&self, epoch: usize) -> Option<MiningMode> {
        Some(self.policy.effective_mode(epoch))
    }
    fn describe(&self) -> String {
        let mining = match self.policy.mode {
            MiningMode::HardestFraction => "CHNM",
            MiningMode::Hardest => "hardest",
            MiningMode::Random => "random",
        };
        format!("m={} {mining}", self.margin)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum EpisodicKind {
    Ge2e,
    Prototypical,
    AngularPrototypical,
}

#[derive(Debug)]
struct Episodic {
    kind: EpisodicKind,
    m: usize,
}

impl Objective for Episodic {
    fn name(&self) -> &'static str {
        match self.kind {
            EpisodicKind::Ge2e => "ge2e",
            EpisodicKind::Prototypical => "prototypical",
            EpisodicKind::AngularPrototypical => "angular_prototypical",
        }
    }
    fn family(&self) -> Family {
        Family::Metric
    }
    fn utterances_per_speaker(&self) -> usize {
        self.m
    }
    fn init_params(&self, _: usize, _: usize, _: &mut dyn rand::RngCore) -> LossParams {
        match self.kind {
            EpisodicKind::Prototypical => LossParams::None,
            _ => LossParams::Affine(AffineSimilarityParams::default()),
        }
    }
    fn compute(&self, batch: &EmbeddingBatch, _: &[usize], p: &LossParams, _: &StepContext) -> Result<LossResult> {
        match self.kind {
            EpisodicKind::Ge2e => ge2e_loss(batch, expect_affine(self.name(), p)?),
            EpisodicKind::Prototypical => prototypical_loss(batch),
            EpisodicKind::AngularPrototypical => angular_prototypical_loss(batch, expect_affine(self.name(), p)?),
        }
    }
    fn describe(&self) -> String {
        format!("M={}", self.m)
    }
}

pub type Factory = fn(&ObjectiveConfig) -> Result<Box<dyn Objective>>;

fn build_softmax(cfg: &ObjectiveConfig) -> Result<Box<dyn Objective>> {
    cfg.no_margin()?;
    cfg.single_utterance()?;
    Ok(Box::new(Softmax))
}

fn margin_scale(cfg: &ObjectiveConfig) -> Result<MarginConfig> {
    MarginConfig::new(cfg.margin.unwrap_or(0.2), cfg.scale.unwrap_or(30.0)).map_err(|e| Error::Config(e.to_string()))
}

fn build_am(cfg: &ObjectiveConfig) -> Result<Box<dyn Objective>> {
    cfg.single_utterance()?;
    Ok(Box::new(AmSoftmax(margin_scale(cfg)?)))
}

fn build_aam(cfg: &ObjectiveConfig) -> Result<Box<dyn Objective>> {
    cfg.single_utterance()?;
    let mc = margin_scale(cfg)?;
    let schedule = cfg.schedule(mc.margin);
    schedule.validate()?;
    Ok(Box::new(AamSoftmax {
        scale: mc.scale,
        schedule,
        curriculum: cfg.curriculum,
    }))
}

fn build_triplet(cfg: &ObjectiveConfig) -> Result<Box<dyn Objective>> {
    if cfg.scale.is_some() {
        cfg.reject("scale")?;
    }
    if cfg.utterances.is_some_and(|m| m != 2) {
        return Err(Error::Config("triplet requires utterances = 2".into()));
    }
    let margin = cfg.margin.unwrap_or(0.2);
    if !(margin >= 0.0 && margin.is_finite()) {
        return Err(Error::Config(format!("triplet margin {margin} must be >= 0")));
    }
    let policy = MiningPolicy {
        mode: cfg.mining,
        fraction: cfg.hard_fraction,
        activation_epoch: cfg.mining_activation_epoch,
    };
    policy.validate().map_err(|e| Error::Config(e.to_string()))?;
    Ok(Box::new(Triplet { margin, policy }))
}

fn build_episodic(kind: EpisodicKind, cfg: &ObjectiveConfig) -> Result<Box<dyn Objective>> {
    cfg.no_margin()?;
    Ok(Box::new(Episodic {
        kind,
        m: cfg.episodic_m(2)?,
    }))
}

/// Name → factory table. Iteration order is the canonical report order.
#[derive(Clone)]
pub struct Registry {
    entries: Vec<(&'static str, &'static str, Factory)>,
}

impl fmt::Debug for Registry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.names()).finish()
    }
}

impl Default for Registry {
    fn default() -> Self {
        Self::builtin()
    }
}

impl Registry {
    pub fn empty() -> Self {
        Self { entries: Vec::new() }
    }

    /// The seven built-in objectives.
    pub fn builtin() -> Self {
        let mut r = Self::empty();
        r.register("softmax", "Softmax", build_softmax);
        r.register("am_softmax", "AM-Softmax", build_am);
        r.register("aam_softmax", "AAM-Softmax", build_aam);
        r.register("triplet", "Triplet", build_triplet);
        r.register("ge2e", "GE2E", |c| build_episodic(EpisodicKind::Ge2e, c));
        r.register("prototypical", "Prototypical", |c| build_episodic(EpisodicKind::Prototypical, c));
        r.register("angular_prototypical", "Angular Prototypical", |c| {
            build_episodic(EpisodicKind::AngularPrototypical, c)
        });
        r
    }

    /// Adds or replaces an entry; new names go to the end of the order.
    pub fn register(&mut self, name: &'static str, display: &'static str, factory: Factory) {
        match self.entries.iter_mut().find(|(n, _, _)| *n == name) {
            Some(entry) => *entry = (name, display, factory),
            None => self.entries.push((name, display, factory)),
        }
    }

    pub fn names(&self) -> impl Iterator<Item = &'static str> + '_ {
        self.entries.iter().map(|(n, _, _)| *n)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.rank(name).is_some()
    }

    /// Position of `name` in the canonical order.
    pub fn rank(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|(n, _, _)| *n == name)
    }

    pub fn display_name(&self, name: &str) -> Option<&'static str> {
        self.entries.iter().find(|(n, _, _)| *n == name).map(|(_, d, _)| *d)
    }

    pub fn build(&self, cfg: &ObjectiveConfig) -> Result<Box<dyn Objective>> {
        let (_, _, factory) = self.entries.iter().find(|(n, _, _)| *n == cfg.name).ok_or_else(|| {
            Error::Config(format!(
                "unknown objective `{}`; expected one of: {}",
                cfg.name,
                self.names().collect::<Vec<_>>().join(", ")
            ))
        })?;
        factory(cfg)
    }
}

/// Shorthand for `Registry::builtin().build(cfg)`.
pub fn build_objective(cfg: &ObjectiveConfig) -> Result<Box<dyn Objective>> {
    Registry::builtin().build(cfg)
}
