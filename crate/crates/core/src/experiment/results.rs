use std::io::{Read, Write};

use crate::metrics::{fmt_f64, MetricsReport};
use crate::objectives::ObjectiveKind;
use crate::train::TrainError;

use super::{CellSpec, ExperimentError};

/// Column order of `results.csv`. `eval_seed` is the seed the metrics were sampled with.
pub const RESULT_COLUMNS: [&str; 14] = [
    "cell_id",
    "objective",
    "beta",
    "mismatch_level",
    "dataset_size",
    "seed",
    "mismatch",
    "mean_oracle_reward",
    "win_rate_vs_base",
    "target_mass",
    "n",
    "eval_seed",
    "wall_time_s",
    "status",
];

#[derive(Debug, Clone, PartialEq)]
pub enum CellStatus {
    Ok,
    /// Training hit a non-finite loss or gradient.
    NonFinite,
    Failed(String),
}

impl CellStatus {
    pub fn from_error(err: &ExperimentError) -> Self {
        match err {
            ExperimentError::Train(TrainError::NonFinite { .. }) => CellStatus::NonFinite,
            other => CellStatus::Failed(other.to_string()),
        }
    }

    pub fn is_ok(&self) -> bool {
        *self == CellStatus::Ok
    }

    fn encode(&self) -> String {
        match self {
            CellStatus::Ok => "ok".into(),
            CellStatus::NonFinite => "nonfinite".into(),
            CellStatus::Failed(msg) => format!("failed: {msg}"),
        }
    }

    fn decode(s: &str) -> Result<Self, String> {
        match s {
            "ok" => Ok(CellStatus::Ok),
            "nonfinite" => Ok(CellStatus::NonFinite),
            _ => s
                .strip_prefix("failed: ")
                .map(|m| CellStatus::Failed(m.to_string()))
                .ok_or_else(|| format!("unknown status `{s}`")),
        }
    }
}

/// One line of the results table.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub cell_id: String,
    pub objective: ObjectiveKind,
    pub beta: f64,
    pub mismatch_level: f64,
    pub dataset_size: usize,
    pub seed: u64,
    /// NaN-filled when the cell failed.
    pub report: MetricsReport,
    pub status: CellStatus,
}

impl ResultRow {
    pub fn new(cell: &CellSpec, outcome: Result<MetricsReport, CellStatus>) -> Self {
        let (report, status) = match outcome {
            Ok(r) => (r, CellStatus::Ok),
            Err(status) => (
                MetricsReport {
                    mismatch: f64::NAN,
                    mean_oracle_reward: f64::NAN,
                    win_rate_vs_base: f64::NAN,
                    target_mass: f64::NAN,
                    n: 0,
                    seed: 0,
                    wall_time_s: 0.0,
                },
                status,
            ),
        };
        ResultRow {
            cell_id: cell.id.clone(),
            objective: cell.objective,
            beta: cell.beta,
            mismatch_level: cell.mismatch_level,
            dataset_size: cell.dataset_size,
            seed: cell.seed,
            report,
            status,
        }
    }

    fn record(&self) -> Vec<String> {
        let mut rec = vec![
            self.cell_id.clone(),
            self.objective.name().to_string(),
            fmt_f64(self.beta),
            fmt_f64(self.mismatch_level),
            self.dataset_size.to_string(),
            self.seed.to_string(),
        ];
        rec.extend(self.report.to_csv_record());
        rec.push(self.status.encode());
        rec
    }

    fn parse(rec: &csv::StringRecord, line: usize) -> Result<Self, ExperimentError> {
        let field = |i: usize| rec.get(i).unwrap_or("");
        let bad = |col: usize, e: &dyn std::fmt::Display| {
            ExperimentError::Results(format!(
                "line {line}, column `{}`: {e}",
                RESULT_COLUMNS[col]
            ))
        };
        let f = |i: usize| field(i).parse::<f64>().map_err(|e| bad(i, &e));
        let u = |i: usize| field(i).parse::<u64>().map_err(|e| bad(i, &e));
        if rec.len() != RESULT_COLUMNS.len() {
            return Err(ExperimentError::Results(format!(
                "line {line}: expected {} fields, found {}",
                RESULT_COLUMNS.len(),
                rec.len()
            )));
        }
        Ok(ResultRow {
            cell_id: field(0).to_string(),
            objective: field(1).parse().map_err(|e: String| bad(1, &e))?,
            beta: f(2)?,
            mismatch_level: f(3)?,
            dataset_size: u(4)? as usize,
            seed: u(5)?,
            report: MetricsReport {
                mismatch: f(6)?,
                mean_oracle_reward: f(7)?,
                win_rate_vs_base: f(8)?,
                target_mass: f(9)?,
                n: u(10)? as usize,
                seed: u(11)?,
                wall_time_s: f(12)?,
            },
            status: CellStatus::decode(field(13)).map_err(|e| bad(13, &e))?,
        })
    }
}

/// Writes the header and one row per cell.
pub fn write_results<W: Write>(out: W, rows: &[ResultRow]) -> Result<(), ExperimentError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(RESULT_COLUMNS)?;
    for row in rows {
        w.write_record(row.record())?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// Reads a results table. The header must list exactly the documented columns in order;
/// unknown or missing columns are rejected.
pub fn read_results<R: Read>(input: R) -> Result<Vec<ResultRow>, ExperimentError> {
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let headers = r.headers()?.clone();
    if let Some(unknown) = headers.iter().find(|h| !RESULT_COLUMNS.contains(h)) {
        return Err(ExperimentError::Results(format!("unknown column `{unknown}`")));
    }
    if let Some(missing) = RESULT_COLUMNS.iter().find(|c| !headers.iter().any(|h| h == **c)) {
        return Err(ExperimentError::Results(format!("missing column `{missing}`")));
    }
    if !headers.iter().eq(RESULT_COLUMNS) {
        return Err(ExperimentError::Results(
            "columns are not in the documented order".into(),
        ));
    }
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        rows.push(ResultRow::parse(&rec?, i + 2)?);
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cell() -> CellSpec {
        CellSpec {
            id: "cell-0003".into(),
            objective: ObjectiveKind::Mapo,
            beta: 64.0,
            mismatch_level: 0.5,
            dataset_size: 256,
            seed: 2,
        }
    }

    fn ok_row() -> ResultRow {
        ResultRow::new(
            &cell(),
            Ok(MetricsReport {
                mismatch: 0.1 + 0.2,
                mean_oracle_reward: -2.75,
                win_rate_vs_base: 0.875,
                target_mass: 1.0 / 3.0,
                n: 256,
                seed: 99,
                wall_time_s: 0.0,
            }),
        )
    }

    #[test]
    fn round_trip_is_exact() {
        let failed = ResultRow::new(&cell(), Err(CellStatus::Failed("boom, with comma".into())));
        let nan = ResultRow::new(&cell(), Err(CellStatus::NonFinite));
        let rows = vec![ok_row(), failed, nan];
        let mut buf = Vec::new();
        write_results(&mut buf, &rows).unwrap();
        let back = read_results(buf.as_slice()).unwrap();
        assert_eq!(back[0], rows[0]);
        assert_eq!(back[1].status, rows[1].status);
        assert!(back[1].report.target_mass.is_nan());
        assert_eq!(back[2].status, CellStatus::NonFinite);
        let mut again = Vec::new();
        write_results(&mut again, &back).unwrap();
        assert_eq!(buf, again);
    }

    #[test]
    fn unknown_and_missing_columns_are_rejected() {
        let mut buf = Vec::new();
        write_results(&mut buf, &[ok_row()]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let extra = text.replacen("status", "status,extra", 1).replacen('\n', ",x\n", 2);
        let err = read_results(extra.as_bytes()).unwrap_err().to_string();
        assert!(err.contains("unknown column `extra`"), "{err}");
        let renamed = text.replacen("target_mass", "score", 1);
        assert!(read_results(renamed.as_bytes()).is_err());
    }
}
