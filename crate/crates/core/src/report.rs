//! Sweep result records, mean ± std summaries and table rendering.

use std::cmp::Ordering;
use std::fmt::Write as _;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objective::Registry;
use crate::trainer::TrainRunConfig;

/// Outcome of one training + evaluation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub objective: String,
    pub hyperparameters: String,
    pub margin: Option<f64>,
    pub scale: Option<f64>,
    pub curriculum: bool,
    pub utterances: Option<usize>,
    pub speakers_per_batch: usize,
    pub repeat: usize,
    pub seed: u64,
    /// Fraction in `[0, 1]`; absent when the run failed.
    pub eer: Option<f64>,
    pub steps: usize,
    pub error: Option<String>,
}

/// Total order on floats for sorting, `None` first.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SortF64(pub Option<f64>);

impl Eq for SortF64 {}

impl PartialOrd for SortF64 {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for SortF64 {
    fn cmp(&self, other: &Self) -> Ordering {
        match (self.0, other.0) {
            (None, None) => Ordering::Equal,
            (None, Some(_)) => Ordering::Less,
            (Some(_), None) => Ordering::Greater,
            (Some(a), Some(b)) => a.total_cmp(&b),
        }
    }
}

pub type SortKey = (usize, SortF64, SortF64, bool, Option<usize>, usize, String, usize);

impl RunRecord {
    pub fn for_cell(cfg: &TrainRunConfig, hyperparameters: &str, repeat: usize) -> Self {
        Self {
            objective: cfg.objective.name.clone(),
            hyperparameters: hyperparameters.to_string(),
            margin: cfg.objective.margin,
            scale: cfg.objective.scale,
            curriculum: cfg.objective.curriculum,
            utterances: cfg.objective.utterances,
            speakers_per_batch: cfg.train.speakers_per_batch,
            repeat,
            seed: cfg.train.seed,
            eer: None,
            steps: 0,
            error: None,
        }
    }

    /// Canonical objective order, then scale, margin, curriculum, `M`, `N`.
    pub fn sort_key(&self, registry: &Registry) -> SortKey {
        (
            registry.rank(&self.objective).unwrap_or(usize::MAX),
            SortF64(self.scale),
            SortF64(self.margin),
            self.curriculum,
            self.utterances,
            self.speakers_per_batch,
            self.hyperparameters.clone(),
            self.repeat,
        )
    }
}

pub fn write_runs_csv(w: impl Write, runs: &[RunRecord]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in runs {
        out.serialize(r).map_err(|e| Error::format("runs csv", e.to_string()))?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_runs_csv(r: impl Read) -> Result<Vec<RunRecord>> {
    csv::Reader::from_reader(r)
        .deserialize()
        .map(|row| row.map_err(|e| Error::format("runs csv", e.to_string())))
        .collect()
}

/// Population mean and standard deviation.
pub fn mean_std(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Some((mean, var.sqrt()))
}

/// `"2.20±0.16"`.
pub fn format_mean_std(mean: f64, std: f64) -> String {
    format!("{mean:.2}±{std:.2}")
}

/// Aggregate of all repeats of one grid cell; EERs in percent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub objective: String,
    pub hyperparameters: String,
    pub repeats: usize,
    pub completed: usize,
    pub mean_eer_percent: Option<f64>,
    pub std_eer_percent: Option<f64>,
}

impl SummaryRow {
    pub fn cell_text(&self) -> String {
        match (self.mean_eer_percent, self.std_eer_percent) {
            (Some(m), Some(s)) if self.completed == self.repeats => format_mean_std(m, s),
            (Some(m), Some(s)) => format!("{} ({}/{} failed)", format_mean_std(m, s), self.repeats - self.completed, self.repeats),
            _ => "diverged".to_string(),
        }
    }
}

/// Groups runs by cell (keeping the canonical order) and summarises each group.
pub fn summarize(runs: &[RunRecord], registry: &Registry) -> Vec<SummaryRow> {
    let mut sorted: Vec<&RunRecord> = runs.iter().collect();
    sorted.sort_by_key(|r| r.sort_key(registry));
    let mut rows: Vec<SummaryRow> = Vec::new();
    let mut eers: Vec<Vec<f64>> = Vec::new();
    for r in sorted {
        let same_cell = rows
            .last()
            .is_some_and(|row| row.objective == r.objective && row.hyperparameters == r.hyperparameters);
        if !same_cell {
            rows.push(SummaryRow {
                objective: r.objective.clone(),
                hyperparameters: r.hyperparameters.clone(),
                repeats: 0,
                completed: 0,
                mean_eer_percent: None,
                std_eer_percent: None,
            });
            eers.push(Vec::new());
        }
        let row = rows.last_mut().expect("pushed above");
        row.repeats += 1;
        if let Some(e) = r.eer {
            row.completed += 1;
            eers.last_mut().expect("pushed above").push(100.0 * e);
        }
    }
    for (row, values) in rows.iter_mut().zip(&eers) {
        if let Some((m, s)) = mean_std(values) {
            row.mean_eer_percent = Some(m);
            row.std_eer_percent = Some(s);
        }
    }
    rows
}

/// Fixed-width table with a rule between the classification and metric blocks.
pub fn render_table(rows: &[SummaryRow], registry: &Registry) -> String {
    let name = |o: &str| registry.display_name(o).unwrap_or("?").to_string();
    let w_obj = rows.iter().map(|r| name(&r.objective).len()).max().unwrap_or(0).max("Objective".len());
    let w_hyp = rows
        .iter()
        .map(|r| r.hyperparameters.chars().count())
        .max()
        .unwrap_or(0)
        .max("Hyperparameters".len());
    let mut s = String::new();
    let _ = writeln!(s, "{:<w_obj$}  {:<w_hyp$}  EER (%)", "Objective", "Hyperparameters");
    let rule = "-".repeat(w_obj + w_hyp + 4 + 16);
    let _ = writeln!(s, "{rule}");
    let first_metric = registry.rank("triplet");
    let mut prev_obj: Option<&str> = None;
    for r in rows {
        if let (Some(p), Some(fm)) = (prev_obj, first_metric) {
            let crosses = registry.rank(p).is_some_and(|x| x < fm) && registry.rank(&r.objective).is_some_and(|x| x >= fm);
            if crosses {
                let _ = writeln!(s, "{rule}");
            }
        }
        let label = if prev_obj == Some(r.objective.as_str()) {
            String::new()
        } else {
            name(&r.objective)
        };
        let _ = writeln!(
            s,
            "{label:<w_obj$}  {:<w_hyp$}  {}",
            r.hyperparameters,
            r.cell_text()
        );
        prev_obj = Some(&r.objective);
    }
    s
}

pub fn write_summary_csv(w: impl Write, rows: &[SummaryRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r).map_err(|e| Error::format("summary csv", e.to_string()))?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_summary_csv(r: impl Read) -> Result<Vec<SummaryRow>> {
    csv::Reader::from_reader(r)
        .deserialize()
        .map(|row| row.map_err(|e| Error::format("summary csv", e.to_string())))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(objective: &str, hyper: &str, margin: Option<f64>, scale: Option<f64>, repeat: usize, eer: Option<f64>) -> RunRecord {
        RunRecord {
            objective: objective.into(),
            hyperparameters: hyper.into(),
            margin,
            scale,
            curriculum: false,
            utterances: None,
            speakers_per_batch: 30,
            repeat,
            seed: repeat as u64,
            eer,
            steps: 10,
            error: eer.is_none().then(|| "diverged, badly".to_string()),
        }
    }

    #[test]
    fn three_repeat_statistics() {
        let runs: Vec<RunRecord> = [0.020, 0.022, 0.024]
            .iter()
            .enumerate()
            .map(|(i, &e)| record("am_softmax", "m=0.2 s=30", Some(0.2), Some(30.0), i, Some(e)))
            .collect();
        let rows = summarize(&runs, &Registry::builtin());
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].cell_text(), "2.20±0.16");
        let want_std = ((0.04 + 0.0 + 0.04) / 3.0f64).sqrt();
        assert!((rows[0].mean_eer_percent.unwrap() - 2.2).abs() < 1e-12);
        assert!((rows[0].std_eer_percent.unwrap() - want_std).abs() < 1e-12);
    }

    #[test]
    fn single_run_has_zero_std() {
        let rows = summarize(&[record("ge2e", "M=2", None, None, 0, Some(0.05))], &Registry::builtin());
        assert_eq!(rows[0].cell_text(), "5.00±0.00");
    }

    #[test]
    fn rows_follow_canonical_order() {
        let runs = vec![
            record("angular_prototypical", "M=2", None, None, 0, Some(0.1)),
            record("triplet", "m=0.2 CHNM", Some(0.2), None, 0, Some(0.1)),
            record("am_softmax", "m=0.2 s=30", Some(0.2), Some(30.0), 0, Some(0.1)),
            record("am_softmax", "m=0.1 s=30", Some(0.1), Some(30.0), 0, Some(0.1)),
            record("am_softmax", "m=0.2 s=15", Some(0.2), Some(15.0), 0, Some(0.1)),
            record("softmax", "-", None, None, 0, None),
        ];
        let rows = summarize(&runs, &Registry::builtin());
        let got: Vec<(&str, &str)> = rows.iter().map(|r| (r.objective.as_str(), r.hyperparameters.as_str())).collect();
        assert_eq!(
            got,
            [
                ("softmax", "-"),
                ("am_softmax", "m=0.2 s=15"),
                ("am_softmax", "m=0.1 s=30"),
                ("am_softmax", "m=0.2 s=30"),
                ("triplet", "m=0.2 CHNM"),
                ("angular_prototypical", "M=2"),
            ]
        );
        let table = render_table(&rows, &Registry::builtin());
        assert!(table.contains("diverged"));
        let softmax = table.find("Softmax").unwrap();
        let triplet = table.find("Triplet").unwrap();
        let ang = table.find("Angular Prototypical").unwrap();
        assert!(softmax < triplet && triplet < ang);
        assert_eq!(table.lines().filter(|l| l.starts_with("---")).count(), 2);
    }

    #[test]
    fn csv_round_trips_losslessly() {
        let runs = vec![
            record("am_softmax", "m=0.2 s=30", Some(0.2), Some(30.0), 0, Some(0.1 + 0.2)),
            record("softmax", "-", None, None, 1, None),
        ];
        let mut buf = Vec::new();
        write_runs_csv(&mut buf, &runs).unwrap();
        assert_eq!(read_runs_csv(buf.as_slice()).unwrap(), runs);

        let rows = summarize(&runs, &Registry::builtin());
        let mut buf = Vec::new();
        write_summary_csv(&mut buf, &rows).unwrap();
        assert_eq!(read_summary_csv(buf.as_slice()).unwrap(), rows);
    }
}
