//! CSV outputs. Headers:
//!
//! - `ap_vs_n.csv`: one row per trained cell, the fields of [`ExperimentRecord`],
//!   sorted by (family, K, N, seed, resample).
//! - `ap_vs_k.csv`: `family,seed,N,K,ap_mean,ap_std,cv_ap_mean,resamples`.
//! - `summary.csv`: cross-validated K per (family, seed, N, resample).
//! - `loglinear.csv`: `family,slope,intercept,residual,points,degenerate,target_ap,n_for_target`,
//!   fitted on the summary AP of all seeds and resamples.
//! - `longtail.csv`: `seed,rank,count`, training-pool layout counts by rank.
//! - `timing.csv`: `model,M,seconds_per_image,dt_calls_per_image`.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::analysis::fit_loglinear;
use super::{record_order, ExperimentRecord, RunOutput, TimingRow};
use crate::data_io::write_atomic;
use crate::error::{Error, Result};

/// Record selection; `None` fields match everything.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RecordFilter {
    pub family: Option<String>,
    pub k: Option<usize>,
    pub n: Option<usize>,
    pub seed: Option<u64>,
}

impl fmt::Display for RecordFilter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut parts = Vec::new();
        if let Some(v) = &self.family {
            parts.push(format!("family={v}"));
        }
        if let Some(v) = self.k {
            parts.push(format!("K={v}"));
        }
        if let Some(v) = self.n {
            parts.push(format!("N={v}"));
        }
        if let Some(v) = self.seed {
            parts.push(format!("seed={v}"));
        }
        if parts.is_empty() {
            write!(f, "<all>")
        } else {
            write!(f, "{}", parts.join(","))
        }
    }
}

pub fn select_records(records: &[ExperimentRecord], filter: &RecordFilter) -> Result<Vec<ExperimentRecord>> {
    let out: Vec<ExperimentRecord> = records
        .iter()
        .filter(|r| {
            filter.family.as_ref().map_or(true, |f| &r.family == f)
                && filter.k.map_or(true, |k| r.k == k)
                && filter.n.map_or(true, |n| r.n == n)
                && filter.seed.map_or(true, |s| r.seed == s)
        })
        .cloned()
        .collect();
    if out.is_empty() {
        return Err(Error::EmptySelection(format!("no records match {filter}")));
    }
    Ok(out)
}

fn to_csv<T: Serialize>(rows: &[T]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::Data(format!("csv: {e}")))?;
    }
    w.into_inner().map_err(|e| Error::Data(format!("csv: {e}")))
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<PathBuf> {
    write_atomic(path, &to_csv(rows)?)?;
    Ok(path.to_path_buf())
}

/// Writes records sorted by (family, K, N, seed, resample).
pub fn write_records_csv(path: &Path, records: &[ExperimentRecord]) -> Result<PathBuf> {
    let mut sorted = records.to_vec();
    sorted.sort_by(record_order);
    write_csv(path, &sorted)
}

pub fn read_records_csv(path: &Path) -> Result<Vec<ExperimentRecord>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    r.deserialize()
        .map(|row| {
            row.map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                msg: e.to_string(),
            })
        })
        .collect()
}

#[derive(Serialize)]
struct ApVsK {
    family: String,
    seed: u64,
    #[serde(rename = "N")]
    n: usize,
    #[serde(rename = "K")]
    k: usize,
    ap_mean: f64,
    ap_std: f64,
    cv_ap_mean: f64,
    resamples: usize,
}

#[derive(Serialize)]
struct LogLinearRow {
    family: String,
    slope: f64,
    intercept: f64,
    residual: f64,
    points: usize,
    degenerate: bool,
    target_ap: f64,
    n_for_target: f64,
}

#[derive(Serialize)]
struct LongTailRow {
    seed: u64,
    rank: usize,
    count: usize,
}

/// Writes every CSV into `dir` and returns the written paths. Families whose
/// summary curve cannot be fitted are left out of `loglinear.csv`.
pub fn emit_outputs(dir: &Path, run: &RunOutput, timing: &[TimingRow], target_ap: f64) -> Result<Vec<PathBuf>> {
    if run.records.is_empty() {
        return Err(Error::EmptySelection("no records to emit".into()));
    }
    let mut paths = vec![write_records_csv(&dir.join("ap_vs_n.csv"), &run.records)?];

    let mut groups: BTreeMap<(String, u64, usize, usize), Vec<&ExperimentRecord>> = BTreeMap::new();
    for r in &run.records {
        groups.entry((r.family.clone(), r.seed, r.n, r.k)).or_default().push(r);
    }
    let by_k: Vec<ApVsK> = groups
        .into_iter()
        .map(|((family, seed, n, k), rs)| {
            let m = rs.len() as f64;
            let mean = rs.iter().map(|r| r.ap).sum::<f64>() / m;
            let var = rs.iter().map(|r| (r.ap - mean).powi(2)).sum::<f64>() / m;
            ApVsK {
                family,
                seed,
                n,
                k,
                ap_mean: mean,
                ap_std: var.sqrt(),
                cv_ap_mean: rs.iter().map(|r| r.cv_ap).sum::<f64>() / m,
                resamples: rs.len(),
            }
        })
        .collect();
    paths.push(write_csv(&dir.join("ap_vs_k.csv"), &by_k)?);
    paths.push(write_csv(&dir.join("summary.csv"), &run.summary)?);

    let mut per_family: BTreeMap<&str, Vec<(usize, f64)>> = BTreeMap::new();
    for s in &run.summary {
        per_family.entry(&s.family).or_default().push((s.n, s.ap));
    }
    let mut fits = Vec::new();
    for (family, pts) in per_family {
        match fit_loglinear(&pts) {
            Ok(f) => fits.push(LogLinearRow {
                family: family.to_string(),
                slope: f.slope,
                intercept: f.intercept,
                residual: f.residual,
                points: f.points,
                degenerate: f.degenerate,
                target_ap,
                n_for_target: f.n_for_target(target_ap),
            }),
            Err(e) => log::warn!("no log-linear fit for {family}: {e}"),
        }
    }
    paths.push(write_csv(&dir.join("loglinear.csv"), &fits)?);

    let tail: Vec<LongTailRow> = run
        .longtail
        .iter()
        .flat_map(|(&seed, counts)| counts.iter().enumerate().map(move |(rank, &count)| LongTailRow { seed, rank, count }))
        .collect();
    paths.push(write_csv(&dir.join("longtail.csv"), &tail)?);
    paths.push(write_csv(&dir.join("timing.csv"), timing)?);
    Ok(paths)
}
