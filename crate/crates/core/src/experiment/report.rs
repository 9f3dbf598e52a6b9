//! Summaries of a results CSV: median and median absolute deviation of each
//! metric per estimator and sweep point.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use super::config::ExperimentKind;
use super::runner::{ResultsRow, RESULTS_HEADER};
use crate::error::{Error, Result};

pub const SUMMARY_HEADER: [&str; 9] = [
    "experiment",
    "d",
    "n",
    "k",
    "estimator",
    "metric",
    "count",
    "median",
    "mad",
];

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub experiment: ExperimentKind,
    pub d: usize,
    pub n: usize,
    pub k: usize,
    pub estimator: String,
    pub metric: String,
    pub count: usize,
    pub median: f64,
    /// Unscaled median absolute deviation from the median.
    pub mad: f64,
}

/// Median of a nonempty sample; the mean of the two middle values when the
/// count is even.
pub fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty(), "median of an empty sample");
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

pub fn mad(values: &[f64]) -> f64 {
    let m = median(values);
    let dev: Vec<f64> = values.iter().map(|v| (v - m).abs()).collect();
    median(&dev)
}

/// Reads and validates a results CSV. Errors name the offending line.
pub fn read_results<R: Read>(reader: R) -> Result<Vec<ResultsRow>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(reader);
    let mut rows = Vec::new();
    let mut records = rdr.records();
    match records.next() {
        None => return Ok(rows),
        Some(header) => {
            let header = header.map_err(|e| Error::Parse {
                line: 1,
                message: e.to_string(),
            })?;
            if header.iter().ne(RESULTS_HEADER) {
                return Err(Error::Parse {
                    line: 1,
                    message: format!("expected header '{}'", RESULTS_HEADER.join(",")),
                });
            }
        }
    }
    for rec in records {
        let rec = rec.map_err(|e| Error::Parse {
            line: e.position().map_or(0, |p| p.line() as usize),
            message: e.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let bad = |message: String| Error::Parse { line, message };
        if rec.len() != RESULTS_HEADER.len() {
            return Err(bad(format!(
                "expected {} fields, found {}",
                RESULTS_HEADER.len(),
                rec.len()
            )));
        }
        let uint = |i: usize| -> Result<usize> {
            rec[i].parse().map_err(|_| {
                bad(format!(
                    "{} is not a count: '{}'",
                    RESULTS_HEADER[i], &rec[i]
                ))
            })
        };
        let value: f64 = rec[7]
            .parse()
            .map_err(|_| bad(format!("value is not a number: '{}'", &rec[7])))?;
        if !value.is_finite() {
            return Err(bad("value is not finite".into()));
        }
        if rec[5].is_empty() || rec[6].is_empty() {
            return Err(bad("empty estimator or metric".into()));
        }
        rows.push(ResultsRow {
            experiment: rec[0].parse().map_err(|e: Error| bad(e.to_string()))?,
            d: uint(1)?,
            n: uint(2)?,
            k: uint(3)?,
            trial: uint(4)?,
            estimator: rec[5].to_string(),
            metric: rec[6].to_string(),
            value,
        });
    }
    Ok(rows)
}

type Key = (ExperimentKind, usize, usize, usize, String, String);

/// One summary row per (experiment, d, n, k, estimator, metric), sorted by
/// that key.
pub fn summarize(rows: &[ResultsRow]) -> Vec<SummaryRow> {
    let mut groups: BTreeMap<Key, Vec<f64>> = BTreeMap::new();
    for r in rows {
        groups
            .entry((
                r.experiment,
                r.d,
                r.n,
                r.k,
                r.estimator.clone(),
                r.metric.clone(),
            ))
            .or_default()
            .push(r.value);
    }
    groups
        .into_iter()
        .map(
            |((experiment, d, n, k, estimator, metric), values)| SummaryRow {
                experiment,
                d,
                n,
                k,
                estimator,
                metric,
                count: values.len(),
                median: median(&values),
                mad: mad(&values),
            },
        )
        .collect()
}

pub fn write_summary<W: Write>(rows: &[SummaryRow], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(SUMMARY_HEADER)?;
    for r in rows {
        w.write_record([
            r.experiment.label().to_string(),
            r.d.to_string(),
            r.n.to_string(),
            r.k.to_string(),
            r.estimator.clone(),
            r.metric.clone(),
            r.count.to_string(),
            r.median.to_string(),
            r.mad.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `summary.csv` plus one `<experiment>.csv` per experiment present
/// into `out_dir`, and returns the paths written.
pub fn report(input: &Path, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let rows = read_results(File::open(input)?)?;
    let summary = summarize(&rows);
    fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();
    let path = out_dir.join("summary.csv");
    write_summary(&summary, BufWriter::new(File::create(&path)?))?;
    written.push(path);
    for kind in ExperimentKind::ALL {
        let part: Vec<SummaryRow> = summary
            .iter()
            .filter(|r| r.experiment == kind)
            .cloned()
            .collect();
        if part.is_empty() {
            continue;
        }
        let path = out_dir.join(format!("{}.csv", kind.label()));
        write_summary(&part, BufWriter::new(File::create(&path)?))?;
        written.push(path);
    }
    Ok(written)
}
