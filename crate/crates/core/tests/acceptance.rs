//! Acceptance gate: one PASS/FAIL line per criterion, non-zero exit on any failure.

mod common;

use std::f64::consts::PI;
use std::time::{Duration, Instant};

use rand::Rng;

use common::*;
use spkmetric::config::ExperimentConfig;
use spkmetric::embedder::Utterance;
use spkmetric::eval::{compute_eer, crop_starts, evaluate, score_trial, ten_crop, EvalConfig, ScoredTrials};
use spkmetric::losses::{
    aam_softmax_loss, am_softmax_loss, exclusive_centroid, ge2e_loss, mine_negatives, nsl_loss, AffineSimilarityParams,
    EmbeddingBatch, LossResult, MarginConfig,
};
use spkmetric::math::{cosine_similarity, dot, l2_normalize, squared_euclidean};
use spkmetric::objective::{LossParams, Objective, ObjectiveConfig, Registry, StepContext};
use spkmetric::report::{format_mean_std, render_table, summarize};
use spkmetric::sampling::{MiningMode, MiningPolicy, SpeakerId};
use spkmetric::synth::{generate, Corpus, SynthSpec};
use spkmetric::trainer::{
    effective_margin, train, train_sweep, CurriculumSchedule, ModelConfig, SweepCell, TrainRunConfig, TrainSettings,
};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------------------
// 1. gradients

const CONFIGS_PER_OBJECTIVE: usize = 20;
const KINK_GUARD: f64 = 1e-6;

struct GradCase {
    objective: Box<dyn Objective>,
    batch: EmbeddingBatch,
    labels: Vec<usize>,
    params: LossParams,
    ctx: StepContext,
}

impl GradCase {
    fn loss(&self, emb: &[f64], theta: &[f64]) -> f64 {
        let mut p = self.params.clone();
        p.load_flat(theta).unwrap();
        let b = with_values(&self.batch, emb);
        self.objective.compute(&b, &self.labels, &p, &self.ctx).unwrap().loss
    }

    fn max_error(&self) -> f64 {
        let r = self.objective.compute(&self.batch, &self.labels, &self.params, &self.ctx).unwrap();
        let emb = self.batch.embeddings().as_slice().to_vec();
        let theta = self.params.flatten();
        let fd_emb = central_differences(&emb, |e| self.loss(e, &theta));
        let fd_theta = central_differences(&theta, |t| self.loss(&emb, t));
        max_rel_err(r.grad_embeddings.as_slice(), &fd_emb).max(max_rel_err(&self.params.grad_from(&r), &fd_theta))
    }
}

fn near_triplet_kink(case: &GradCase, margin: f64) -> bool {
    let policy = MiningPolicy::hardest_fraction(0.01, 10);
    let negatives = mine_negatives(&case.batch, &policy, case.ctx.epoch, case.ctx.seed).unwrap();
    let unit = |v: &[f64]| l2_normalize("test", v).unwrap().0;
    negatives.iter().enumerate().any(|(j, &k)| {
        let a = unit(case.batch.get(j, 0));
        let p = unit(case.batch.get(j, 1));
        let n = unit(case.batch.get(k, 1));
        let v = squared_euclidean(&a, &p).unwrap() - squared_euclidean(&a, &n).unwrap() + margin;
        v.abs() < KINK_GUARD
    })
}

fn near_aam_boundary(case: &GradCase, margin: f64) -> bool {
    let LossParams::Head(head) = &case.params else { return false };
    let threshold = (PI - margin).cos();
    let emb = case.batch.embeddings();
    case.labels.iter().enumerate().any(|(r, &y)| {
        let c = cosine_similarity(emb.flat(r), head.weights.row(y)).unwrap();
        (c - threshold).abs() < KINK_GUARD || c.abs() > 1.0 - KINK_GUARD
    })
}

fn random_case(name: &str, rng: &mut impl Rng) -> (GradCase, Option<f64>) {
    let mut cfg = ObjectiveConfig::named(name);
    let d = rng.random_range(2..=6);
    let (n, m) = match name {
        "softmax" | "am_softmax" | "aam_softmax" => (rng.random_range(2..=4), rng.random_range(1..=3)),
        "triplet" => (rng.random_range(2..=5), 2),
        _ => (rng.random_range(2..=4), rng.random_range(2..=3)),
    };
    match name {
        "am_softmax" => {
            cfg.margin = Some(rng.random_range(0.0..0.5));
            cfg.scale = Some(rng.random_range(1.0..30.0));
        }
        "aam_softmax" => {
            cfg.margin = Some(rng.random_range(0.0..1.5));
            cfg.scale = Some(rng.random_range(1.0..30.0));
        }
        "triplet" => cfg.margin = Some(rng.random_range(0.0..1.0)),
        "ge2e" | "prototypical" | "angular_prototypical" => cfg.utterances = Some(m),
        _ => {}
    }
    let objective = Registry::builtin().build(&cfg).unwrap();
    let classes = rng.random_range(2..=5);
    let batch = random_batch(rng, n, m, d);
    let labels = (0..n * m).map(|_| rng.random_range(0..classes)).collect();
    let params = match objective.init_params(classes, d, rng) {
        LossParams::Head(_) => LossParams::Head(random_head(rng, classes, d)),
        LossParams::Affine(_) => LossParams::Affine(AffineSimilarityParams {
            w: rng.random_range(0.5..15.0),
            b: rng.random_range(-8.0..8.0),
        }),
        LossParams::None => LossParams::None,
    };
    let case = GradCase {
        objective,
        batch,
        labels,
        params,
        ctx: StepContext {
            epoch: 0,
            seed: rng.random(),
        },
    };
    (case, cfg.margin)
}

fn criterion_gradients() -> Outcome {
    let start = Instant::now();
    let mut rng = rng(1);
    let mut worst_overall = 0.0f64;
    let mut failures = Vec::new();
    for name in Registry::builtin().names() {
        let mut accepted = 0;
        let mut worst = 0.0f64;
        while accepted < CONFIGS_PER_OBJECTIVE {
            let (case, margin) = random_case(name, &mut rng);
            let margin = margin.unwrap_or(0.2);
            let skip = match name {
                "triplet" => near_triplet_kink(&case, margin),
                "aam_softmax" => near_aam_boundary(&case, margin),
                _ => false,
            };
            if skip {
                continue;
            }
            worst = worst.max(case.max_error());
            accepted += 1;
        }
        if worst > 1e-5 {
            failures.push(format!("{name} {worst:.2e}"));
        }
        worst_overall = worst_overall.max(worst);
    }
    let elapsed = start.elapsed();
    check(
        failures.is_empty() && elapsed < Duration::from_secs(60),
        format!(
            "7 objectives x {CONFIGS_PER_OBJECTIVE} configs, max rel err {worst_overall:.2e} (<= 1e-5), {:.1}s (< 60s){}",
            elapsed.as_secs_f64(),
            if failures.is_empty() { String::new() } else { format!(", failing: {}", failures.join(", ")) }
        ),
    )
}

// ---------------------------------------------------------------------------
// 2. reductions

fn result_gap(a: &LossResult, b: &LossResult) -> f64 {
    let ha = a.grad_head.as_ref().unwrap();
    let hb = b.grad_head.as_ref().unwrap();
    (a.loss - b.loss)
        .abs()
        .max(max_abs_diff(a.grad_embeddings.as_slice(), b.grad_embeddings.as_slice()))
        .max(max_abs_diff(ha.weights.as_slice(), hb.weights.as_slice()))
        .max(max_abs_diff(&ha.bias, &hb.bias))
}

fn criterion_reductions() -> Outcome {
    let mut rng = rng(2);
    let (mut am_nsl, mut aam_am) = (0.0f64, 0.0f64);
    for _ in 0..100 {
        let (n, d, c) = (rng.random_range(1..=6), rng.random_range(2..=8), rng.random_range(2..=8));
        let batch = random_batch(&mut rng, n, 1, d);
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
        let head = random_head(&mut rng, c, d);
        let nsl = nsl_loss(&batch, &labels, &head).unwrap();
        let am01 = am_softmax_loss(&batch, &labels, &head, MarginConfig::new(0.0, 1.0).unwrap()).unwrap();
        am_nsl = am_nsl.max(result_gap(&nsl, &am01));
        let s = rng.random_range(1.0..64.0);
        let am0 = am_softmax_loss(&batch, &labels, &head, MarginConfig::new(0.0, s).unwrap()).unwrap();
        let aam0 = aam_softmax_loss(&batch, &labels, &head, MarginConfig::new(0.0, s).unwrap()).unwrap();
        aam_am = aam_am.max(result_gap(&am0, &aam0));
    }
    check(
        am_nsl <= 1e-12 && aam_am <= 1e-12,
        format!("100 batches: |AM(0,1) - NSL| = {am_nsl:.1e}, |AAM(0) - AM(0)| = {aam_am:.1e} (<= 1e-12)"),
    )
}

// ---------------------------------------------------------------------------
// 3. GE2E

fn ge2e_direct(batch: &EmbeddingBatch, w: f64, b: f64) -> f64 {
    let (n, m, d) = (batch.n(), batch.m(), batch.dim());
    let mut total = 0.0;
    for j in 0..n {
        for i in 0..m {
            let query = batch.get(j, i);
            let logits: Vec<f64> = (0..n)
                .map(|k| {
                    let members: Vec<usize> = (0..m).filter(|&u| k != j || u != i).collect();
                    let mut centroid = vec![0.0; d];
                    for &u in &members {
                        for (c, x) in centroid.iter_mut().zip(batch.get(k, u)) {
                            *c += x / members.len() as f64;
                        }
                    }
                    let cos = dot(query, &centroid) / (dot(query, query).sqrt() * dot(&centroid, &centroid).sqrt());
                    w * cos + b
                })
                .collect();
            let denom: f64 = logits.iter().map(|z| z.exp()).sum();
            total += -logits[j] + denom.ln();
        }
    }
    total / (n * m) as f64
}

fn criterion_ge2e() -> Outcome {
    let mut rng = rng(3);
    let mut worst = 0.0f64;
    let mut exact = true;
    for _ in 0..50 {
        let (n, m, d) = (rng.random_range(2..=6), rng.random_range(2..=4), rng.random_range(2..=8));
        let batch = random_batch(&mut rng, n, m, d);
        let params = AffineSimilarityParams {
            w: rng.random_range(0.5..20.0),
            b: rng.random_range(-10.0..10.0),
        };
        let got = ge2e_loss(&batch, &params).unwrap().loss;
        worst = worst.max((got - ge2e_direct(&batch, params.w, params.b)).abs());

        for j in 0..n {
            for i in 0..m {
                let before = exclusive_centroid(&batch, j, i);
                let mut values = batch.embeddings().as_slice().to_vec();
                let offset = (j * m + i) * d;
                for v in &mut values[offset..offset + d] {
                    *v = 1e6 * normal(&mut rng);
                }
                let after = exclusive_centroid(&with_values(&batch, &values), j, i);
                exact &= before.iter().zip(&after).all(|(a, b)| a.to_bits() == b.to_bits());
            }
        }
    }
    check(
        worst <= 1e-10 && exact,
        format!("50 batches, max |loss - direct| = {worst:.1e} (<= 1e-10), exclusive centroid independent of query: {exact}"),
    )
}

// ---------------------------------------------------------------------------
// 4. EER

/// Threshold sweep that recounts every trial at every candidate threshold.
fn brute_force_eer(scores: &[f64], targets: &[bool]) -> f64 {
    let same = targets.iter().filter(|&&t| t).count() as f64;
    let diff = targets.len() as f64 - same;
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    thresholds.push(f64::INFINITY);
    let rates: Vec<(f64, f64)> = thresholds
        .iter()
        .map(|&t| {
            let fr = scores.iter().zip(targets).filter(|(&s, &y)| y && s < t).count() as f64;
            let fa = scores.iter().zip(targets).filter(|(&s, &y)| !y && s >= t).count() as f64;
            (fr / same, fa / diff)
        })
        .collect();
    let i = rates.iter().position(|(fr, fa)| fr >= fa).unwrap();
    let (fr1, fa1) = rates[i];
    if fr1 == fa1 || i == 0 {
        return fr1;
    }
    let (fr0, fa0) = rates[i - 1];
    let t = (fa0 - fr0) / ((fa0 - fr0) + (fr1 - fa1));
    fr0 + t * (fr1 - fr0)
}

fn criterion_eer() -> Outcome {
    let mut rng = rng(4);
    let mut worst = 0.0f64;
    for set in 0..1000 {
        let same = rng.random_range(1..=250);
        let diff = rng.random_range(1..=250);
        let shift = rng.random_range(0.0..3.0);
        let quantum = [0.0, 0.5, 0.1, 0.01][set % 4];
        let mut scores = Vec::new();
        let mut targets = Vec::new();
        for k in 0..same + diff {
            let target = k < same;
            let mut s = normal(&mut rng) + if target { shift } else { 0.0 };
            if quantum > 0.0 {
                s = (s / quantum).round() * quantum;
            }
            scores.push(s);
            targets.push(target);
        }
        let got = compute_eer(&ScoredTrials::new(scores.clone(), targets.clone()).unwrap()).unwrap().eer;
        worst = worst.max((got - brute_force_eer(&scores, &targets)).abs());
    }
    let example = ScoredTrials::new(
        vec![0.3, 0.8, 0.9, 0.1, 0.2, 0.7],
        vec![true, true, true, false, false, false],
    )
    .unwrap();
    let worked = compute_eer(&example).unwrap().eer;
    check(
        worst <= 1e-9 && worked == 1.0 / 3.0,
        format!("1000 score sets of size 2-500, max |eer - brute force| = {worst:.1e} (<= 1e-9); worked example eer = {worked} (1/3)"),
    )
}

// ---------------------------------------------------------------------------
// 5. protocol arithmetic

fn criterion_protocol() -> Outcome {
    let mut rng = rng(5);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let d = rng.random_range(2..=64);
        let crops = |rng: &mut rand_chacha::ChaCha8Rng| -> Vec<Vec<f64>> {
            (0..10).map(|_| (0..d).map(|_| normal(rng)).collect()).collect()
        };
        let (a, b) = (crops(&mut rng), crops(&mut rng));
        let mut sum = 0.0;
        for x in &a {
            for y in &b {
                sum += dot(x, y) / (dot(x, x).sqrt() * dot(y, y).sqrt());
            }
        }
        worst = worst.max((score_trial(&a, &b).unwrap() - sum / 100.0).abs());
    }

    let mut spacing_ok = true;
    for _ in 0..20 {
        let t = rng.random_range(1..=300);
        let crop_len = rng.random_range(1..=t + 20);
        let len = crop_len.min(t);
        let expected: Vec<usize> = (0..10)
            .map(|k| (k as f64 * (t - len) as f64 / 9.0).round() as usize)
            .collect();
        let frames: Vec<f64> = (0..t * 3).map(|v| v as f64).collect();
        let u = Utterance::new(frames, t, 3, SpeakerId(0)).unwrap();
        let cropped = ten_crop(&u, crop_len, 10);
        spacing_ok &= crop_starts(t, crop_len, 10) == expected
            && cropped.len() == 10
            && cropped
                .iter()
                .zip(&expected)
                .all(|(c, &s)| c.num_frames() == len && c.frames() == &u.frames()[s * 3..(s + len) * 3]);
    }
    check(
        worst <= 1e-12 && spacing_ok,
        format!("score_trial vs 10x10 mean: max diff {worst:.1e} (<= 1e-12); ten_crop closed form on 20 (T, L) pairs: {spacing_ok}"),
    )
}

// ---------------------------------------------------------------------------
// 6. benchmark

fn benchmark_config(objective: ObjectiveConfig) -> TrainRunConfig {
    TrainRunConfig {
        objective,
        model: ModelConfig::default(),
        train: TrainSettings {
            epochs: 200,
            speakers_per_batch: 30,
            batch_size: 30,
            max_steps: Some(2000),
            ..TrainSettings::default()
        },
    }
}

fn criterion_benchmark(corpus: &Corpus) -> Outcome {
    let mut am = ObjectiveConfig::named("am_softmax");
    am.margin = Some(0.2);
    am.scale = Some(30.0);
    let mut runs = vec![("Triplet", ObjectiveConfig::named("triplet"))];
    for (label, name) in [
        ("GE2E", "ge2e"),
        ("Prototypical", "prototypical"),
        ("Angular Prototypical", "angular_prototypical"),
    ] {
        let mut cfg = ObjectiveConfig::named(name);
        cfg.utterances = Some(2);
        runs.push((label, cfg));
    }
    runs.push(("AM-Softmax", am));

    let eval = EvalConfig::default();
    let mut ok = true;
    let mut parts = Vec::new();
    for (label, objective) in runs {
        let cfg = benchmark_config(objective);
        let mut init_cfg = cfg.clone();
        init_cfg.train.epochs = 0;
        let init = train(&init_cfg, &corpus.train).unwrap();
        let init_eer = evaluate(&init.embedder, &corpus.test, &corpus.trials, &eval).unwrap().0.eer;

        let start = Instant::now();
        let outcome = train(&cfg, &corpus.train).unwrap();
        let eer = evaluate(&outcome.embedder, &corpus.test, &corpus.trials, &eval).unwrap().0.eer;
        let secs = start.elapsed().as_secs_f64();
        let steps = outcome.telemetry.total_steps();
        let pass = eer <= 0.10 && (0.35..=0.65).contains(&init_eer) && steps <= 2000 && secs <= 300.0;
        ok &= pass;
        parts.push(format!(
            "{label} {:.1}% (init {:.1}%, {steps} steps, {secs:.0}s)",
            100.0 * eer,
            100.0 * init_eer
        ));
    }
    check(ok, format!("test EER <= 10%, init 50±15%: {}", parts.join("; ")))
}

// ---------------------------------------------------------------------------
// 7. curriculum

fn small_corpus() -> Corpus {
    generate(&SynthSpec {
        train_speakers: 12,
        test_speakers: 6,
        utterances_per_speaker: 6,
        min_frames: 10,
        max_frames: 20,
        feature_dim: 8,
        pairs_per_class: 60,
        ..SynthSpec::default()
    })
    .unwrap()
}

fn small_config(objective: ObjectiveConfig, epochs: usize) -> TrainRunConfig {
    TrainRunConfig {
        objective,
        model: ModelConfig {
            hidden: 16,
            dim: 8,
            ..ModelConfig::default()
        },
        train: TrainSettings {
            epochs,
            speakers_per_batch: 6,
            batch_size: 6,
            ..TrainSettings::default()
        },
    }
}

fn criterion_curriculum(corpus: &Corpus) -> Outcome {
    let standard = CurriculumSchedule::standard();
    let margins_ok = (0..500).all(|e| effective_margin(&standard, e) == if e < 100 { 0.1 } else { 0.3 });

    let mut triplet = ObjectiveConfig::named("triplet");
    triplet.mining_activation_epoch = 3;
    let tele = train(&small_config(triplet, 6), &corpus.train).unwrap().telemetry;
    let modes: Vec<Option<MiningMode>> = tele.records.iter().map(|r| r.mining).collect();
    let mining_ok = modes.len() == 6
        && modes.iter().enumerate().all(|(e, m)| {
            *m == Some(if e < 3 {
                MiningMode::Random
            } else {
                MiningMode::HardestFraction
            })
        });

    let mut aam = ObjectiveConfig::named("aam_softmax");
    aam.margin = Some(0.3);
    aam.curriculum = true;
    aam.switch_epoch = 2;
    let tele = train(&small_config(aam, 4), &corpus.train).unwrap().telemetry;
    let aam_ok = tele.records.iter().map(|r| r.margin).collect::<Vec<_>>() == [Some(0.1), Some(0.1), Some(0.3), Some(0.3)];

    let policy = MiningPolicy::hardest_fraction(0.01, 0);
    let pool_ok = (2..=5000usize).all(|n| policy.pool_size(n - 1) == (n - 1).div_ceil(100).max(1));

    check(
        margins_ok && mining_ok && aam_ok && pool_ok,
        format!(
            "margin schedule 0.1/0.3 at epoch 100: {margins_ok}; triplet telemetry random -> hardest_fraction at activation: {mining_ok}; \
             AAM telemetry margins: {aam_ok}; pool = max(1, ceil(0.01(N-1))) for N <= 5000: {pool_ok}"
        ),
    )
}

// ---------------------------------------------------------------------------
// 8. determinism

fn criterion_determinism(corpus: &Corpus) -> Outcome {
    let eval = EvalConfig::default();
    let mut identical = true;
    for name in ["triplet", "am_softmax", "aam_softmax", "angular_prototypical"] {
        let mut obj = ObjectiveConfig::named(name);
        obj.mining_activation_epoch = 1;
        let mut cfg = small_config(obj, 3);
        cfg.train.seed = 11;
        let a = train(&cfg, &corpus.train).unwrap();
        let b = train(&cfg, &corpus.train).unwrap();
        let ea = evaluate(&a.embedder, &corpus.test, &corpus.trials, &eval).unwrap().0.eer;
        let eb = evaluate(&b.embedder, &corpus.test, &corpus.trials, &eval).unwrap().0.eer;
        identical &= a.telemetry.same_trajectory(&b.telemetry)
            && ea.to_bits() == eb.to_bits()
            && a.embedder.flatten() == b.embedder.flatten();
    }

    let cell = SweepCell {
        config: small_config(ObjectiveConfig::named("prototypical"), 2),
        hyperparameters: "M=2".into(),
    };
    let serial = train_sweep(std::slice::from_ref(&cell), 3, corpus, &eval, 1).unwrap();
    let parallel = train_sweep(std::slice::from_ref(&cell), 3, corpus, &eval, 3).unwrap();
    identical &= serial.runs == parallel.runs;

    let eers: Vec<f64> = serial.runs.iter().map(|r| 100.0 * r.eer.unwrap()).collect();
    let mean = (eers[0] + eers[1] + eers[2]) / 3.0;
    let std = (eers.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / 3.0).sqrt();
    let registry = Registry::builtin();
    let rows = summarize(&serial.runs, &registry);
    let table = render_table(&rows, &registry);
    let stats_ok = rows.len() == 1
        && rows[0].repeats == 3
        && (rows[0].mean_eer_percent.unwrap() - mean).abs() <= 1e-12
        && (rows[0].std_eer_percent.unwrap() - std).abs() <= 1e-12
        && table.contains(&format_mean_std(mean, std));
    check(
        identical && stats_ok,
        format!("repeated runs bit-identical (telemetry, weights, EER, 1 vs 3 workers): {identical}; 3-repeat mean±std {} within 1e-12: {stats_ok}", format_mean_std(mean, std)),
    )
}

// ---------------------------------------------------------------------------
// 9. sweep structure

const REDUCED_GRID: &str = r#"
[[sweep.grid]]
objective = "am_softmax"
margins = [0.1, 0.2]
scales = [15.0, 30.0]

[[sweep.grid]]
objective = "ge2e"
utterances = [2, 3]

[[sweep.grid]]
objective = "prototypical"
utterances = [2, 3]

[[sweep.grid]]
objective = "angular_prototypical"
utterances = [2, 3]

[[sweep.grid]]
objective = "prototypical"
utterances = [2]
speakers_per_batch = [10, 30]

[[sweep.grid]]
objective = "angular_prototypical"
utterances = [2]
speakers_per_batch = [10, 30]
"#;

fn criterion_sweep(corpus: &Corpus) -> Outcome {
    let start = Instant::now();
    let cfg = ExperimentConfig::from_toml(REDUCED_GRID).unwrap();
    let cells = cfg.sweep_cells().unwrap();
    let outcome = train_sweep(&cells, 1, corpus, &cfg.eval, 1).unwrap();
    let registry = Registry::builtin();
    let rows = summarize(&outcome.runs, &registry);
    let table = render_table(&rows, &registry);
    let elapsed = start.elapsed();

    let completed = outcome.runs.iter().all(|r| r.eer.is_some());
    let ranks: Vec<usize> = rows.iter().map(|r| registry.rank(&r.objective).unwrap()).collect();
    let ordered = ranks.windows(2).all(|w| w[0] <= w[1]);
    let pos = |s: &str| table.find(s).unwrap_or(usize::MAX);
    let block_order = pos("AM-Softmax") < pos("GE2E")
        && pos("GE2E") < pos("Prototypical")
        && pos("Prototypical") < pos("Angular Prototypical")
        && table.lines().filter(|l| l.starts_with("---")).count() == 2;
    check(
        completed && ordered && block_order && rows.len() == 14 && elapsed < Duration::from_secs(1800),
        format!(
            "{} cells completed: {completed}; table in canonical block order: {}; {:.0}s single worker (<= 1800s)\n{table}",
            rows.len(),
            ordered && block_order,
            elapsed.as_secs_f64()
        ),
    )
}

fn main() {
    let default_corpus = generate(&SynthSpec::default()).unwrap();
    let small = small_corpus();

    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome + '_>)> = vec![
        ("gradient suite", Box::new(criterion_gradients)),
        ("reduction identities", Box::new(criterion_reductions)),
        ("GE2E oracle", Box::new(criterion_ge2e)),
        ("EER oracle", Box::new(criterion_eer)),
        ("protocol arithmetic", Box::new(criterion_protocol)),
        ("synthetic open-set benchmark", Box::new(|| criterion_benchmark(&default_corpus))),
        ("curriculum behaviour", Box::new(|| criterion_curriculum(&small))),
        ("determinism", Box::new(|| criterion_determinism(&small))),
        ("sweep structure", Box::new(|| criterion_sweep(&default_corpus))),
    ];

    let mut failed = 0;
    for (k, (name, run)) in criteria.iter().enumerate() {
        let outcome = std::panic::catch_unwind(std::panic::AssertUnwindSafe(run))
            .unwrap_or_else(|e| Err(format!("panicked: {:?}", e.downcast_ref::<String>().map(String::as_str).or(e.downcast_ref::<&str>().copied()))));
        match outcome {
            Ok(detail) => println!("criterion {}: PASS ({name}) {detail}", k + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {}: FAIL ({name}) {detail}", k + 1);
            }
        }
    }
    if failed > 0 {
        eprintln!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
