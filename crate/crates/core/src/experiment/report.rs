use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::metrics::fmt_f64;
use crate::objectives::ObjectiveKind;

use super::{io_err, ExperimentError, LinePlot, ResultRow, Series};

/// Median of the finite values; NaN when there are none.
pub fn median(values: &[f64]) -> f64 {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Seed-median metrics of one sweep cell group.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub objective: ObjectiveKind,
    pub beta: f64,
    pub mismatch_level: f64,
    pub dataset_size: usize,
    pub seeds_ok: usize,
    pub seeds_failed: usize,
    pub mismatch: f64,
    pub mean_oracle_reward: f64,
    pub win_rate_vs_base: f64,
    pub target_mass: f64,
}

pub const SUMMARY_COLUMNS: [&str; 10] = [
    "objective",
    "beta",
    "mismatch_level",
    "dataset_size",
    "seeds_ok",
    "seeds_failed",
    "median_mismatch",
    "median_mean_oracle_reward",
    "median_win_rate_vs_base",
    "median_target_mass",
];

type GroupKey = (ObjectiveKind, u64, u64, usize);

fn order_key(k: &GroupKey) -> (&'static str, f64, f64, usize) {
    (k.0.name(), f64::from_bits(k.1), f64::from_bits(k.2), k.3)
}

/// Groups rows by everything except the seed and takes medians over successful seeds.
pub fn summarize(rows: &[ResultRow]) -> Vec<SummaryRow> {
    let mut groups: Vec<(GroupKey, Vec<&ResultRow>)> = Vec::new();
    for r in rows {
        let key = (r.objective, r.beta.to_bits(), r.mismatch_level.to_bits(), r.dataset_size);
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, members)) => members.push(r),
            None => groups.push((key, vec![r])),
        }
    }
    groups.sort_by(|a, b| {
        let (ka, kb) = (order_key(&a.0), order_key(&b.0));
        ka.0.cmp(kb.0)
            .then(ka.1.total_cmp(&kb.1))
            .then(ka.2.total_cmp(&kb.2))
            .then(ka.3.cmp(&kb.3))
    });
    groups
        .into_iter()
        .map(|(key, members)| {
            let ok: Vec<&&ResultRow> = members.iter().filter(|r| r.status.is_ok()).collect();
            let med = |f: fn(&ResultRow) -> f64| median(&ok.iter().map(|r| f(r)).collect::<Vec<_>>());
            SummaryRow {
                objective: key.0,
                beta: f64::from_bits(key.1),
                mismatch_level: f64::from_bits(key.2),
                dataset_size: key.3,
                seeds_ok: ok.len(),
                seeds_failed: members.len() - ok.len(),
                mismatch: med(|r| r.report.mismatch),
                mean_oracle_reward: med(|r| r.report.mean_oracle_reward),
                win_rate_vs_base: med(|r| r.report.win_rate_vs_base),
                target_mass: med(|r| r.report.target_mass),
            }
        })
        .collect()
}

fn distinct(values: impl Iterator<Item = f64>) -> Vec<f64> {
    let mut v: Vec<f64> = values.collect();
    v.sort_by(f64::total_cmp);
    v.dedup_by(|a, b| a.to_bits() == b.to_bits());
    v
}

/// Median over seeds of the target mass against dataset size, one series per
/// objective and temperature (and mismatch level when several are present).
pub fn score_by_dataset_size(rows: &[ResultRow]) -> Vec<Series> {
    let summary = summarize(rows);
    let several_levels = distinct(summary.iter().map(|s| s.mismatch_level)).len() > 1;
    let mut series: BTreeMap<(String, u64, u64), Series> = BTreeMap::new();
    for s in &summary {
        let mut label = match s.objective {
            ObjectiveKind::Sft => "sft".to_string(),
            k => format!("{k} beta={}", fmt_f64(s.beta)),
        };
        if several_levels {
            let _ = write!(label, " m={}", fmt_f64(s.mismatch_level));
        }
        let level_key = if several_levels { s.mismatch_level.to_bits() } else { 0 };
        let key = (s.objective.name().to_string(), s.beta.to_bits(), level_key);
        series
            .entry(key)
            .or_insert_with(|| Series {
                label,
                points: Vec::new(),
            })
            .points
            .push((s.dataset_size as f64, s.target_mass));
    }
    series.into_values().collect()
}

/// Median over seeds of the MaPO minus DPO win rate against mismatch level. Runs are
/// paired by seed and dataset size. With several MaPO temperatures at one level,
/// each temperature gets its own series.
pub fn gap_by_level(rows: &[ResultRow]) -> Vec<Series> {
    let ok = |k: ObjectiveKind| rows.iter().filter(move |r| r.objective == k && r.status.is_ok());
    let levels = distinct(ok(ObjectiveKind::Mapo).map(|r| r.mismatch_level));
    let per_beta = levels.iter().any(|&l| {
        distinct(
            ok(ObjectiveKind::Mapo)
                .filter(|r| r.mismatch_level == l)
                .map(|r| r.beta),
        )
        .len()
            > 1
    });
    let mut series: BTreeMap<u64, Series> = BTreeMap::new();
    for &level in &levels {
        let mut gaps: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
        for m in ok(ObjectiveKind::Mapo).filter(|r| r.mismatch_level == level) {
            let paired = ok(ObjectiveKind::Dpo).find(|d| {
                d.mismatch_level == level && d.seed == m.seed && d.dataset_size == m.dataset_size
            });
            if let Some(d) = paired {
                let key = if per_beta { m.beta.to_bits() } else { 0 };
                gaps.entry(key)
                    .or_default()
                    .push(m.report.win_rate_vs_base - d.report.win_rate_vs_base);
            }
        }
        for (key, g) in gaps {
            let label = if per_beta {
                format!("mapo beta={} minus dpo", fmt_f64(f64::from_bits(key)))
            } else {
                "mapo minus dpo".to_string()
            };
            series
                .entry(key)
                .or_insert_with(|| Series {
                    label,
                    points: Vec::new(),
                })
                .points
                .push((level, median(&g)));
        }
    }
    series.into_values().collect()
}

/// Summary table plus the standard plots for one results table.
#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub summary: Vec<SummaryRow>,
    /// File name and plot.
    pub plots: Vec<(String, LinePlot)>,
}

impl Report {
    pub fn from_rows(rows: &[ResultRow]) -> Self {
        let mut plots = Vec::new();
        let score = score_by_dataset_size(rows);
        if score.iter().any(|s| !s.points.is_empty()) {
            let mut p = LinePlot::new("Target mass vs dataset size", "preference pairs", "median target mass");
            p.log_x = true;
            p.series = score;
            plots.push(("score_vs_dataset_size.svg".to_string(), p));
        }
        let gap = gap_by_level(rows);
        if !gap.is_empty() {
            let mut p = LinePlot::new("Win-rate gap vs mismatch", "mismatch level", "median win-rate gap");
            p.series = gap;
            plots.push(("gap_vs_mismatch.svg".to_string(), p));
        }
        Report {
            summary: summarize(rows),
            plots,
        }
    }

    pub fn summary_csv(&self) -> Result<String, ExperimentError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(SUMMARY_COLUMNS)?;
        for s in &self.summary {
            w.write_record([
                s.objective.name().to_string(),
                fmt_f64(s.beta),
                fmt_f64(s.mismatch_level),
                s.dataset_size.to_string(),
                s.seeds_ok.to_string(),
                s.seeds_failed.to_string(),
                fmt_f64(s.mismatch),
                fmt_f64(s.mean_oracle_reward),
                fmt_f64(s.win_rate_vs_base),
                fmt_f64(s.target_mass),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| csv::Error::from(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    /// Fixed-width table for terminals.
    pub fn table(&self) -> String {
        let mut out = format!(
            "{:<10}{:>10}{:>10}{:>8}{:>6}{:>11}{:>10}{:>10}{:>10}\n",
            "objective", "beta", "mismatch", "size", "ok", "distance", "reward", "win", "target"
        );
        for s in &self.summary {
            let _ = writeln!(
                out,
                "{:<10}{:>10}{:>10}{:>8}{:>6}{:>11.4}{:>10.3}{:>10.3}{:>10.3}",
                s.objective.name(),
                fmt_f64(s.beta),
                fmt_f64(s.mismatch_level),
                s.dataset_size,
                format!("{}/{}", s.seeds_ok, s.seeds_ok + s.seeds_failed),
                s.mismatch,
                s.mean_oracle_reward,
                s.win_rate_vs_base,
                s.target_mass
            );
        }
        out
    }

    /// Writes `summary.csv` and every plot into `dir`, returning the paths written.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>, ExperimentError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let mut written = Vec::new();
        let summary = dir.join("summary.csv");
        fs::write(&summary, self.summary_csv()?).map_err(io_err(&summary))?;
        written.push(summary);
        for (name, plot) in &self.plots {
            let path = dir.join(name);
            fs::write(&path, plot.render()).map_err(io_err(&path))?;
            written.push(path);
        }
        Ok(written)
    }
}
