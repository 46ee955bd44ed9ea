//! Case ingestion, economic features, supervised windows and rolling-origin
//! splits.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Read;
use std::ops::RangeInclusive;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::RegionGraph;
use crate::tensor::Tensor;

pub const CONFIRMED: &str = "confirmed";

/// Daily new-case counts, `regions × dates`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseMatrix {
    regions: Vec<String>,
    dates: Vec<NaiveDate>,
    /// Row `u` holds region `u`'s counts over `dates`.
    counts: Vec<Vec<u64>>,
}

impl CaseMatrix {
    pub fn new(regions: Vec<String>, dates: Vec<NaiveDate>, counts: Vec<Vec<u64>>) -> Result<Self> {
        if counts.len() != regions.len() || counts.iter().any(|r| r.len() != dates.len()) {
            return Err(Error::shape("CaseMatrix", format!("{} × {}", regions.len(), dates.len()), "ragged counts"));
        }
        if dates.windows(2).any(|w| w[0].succ_opt() != Some(w[1])) {
            return Err(Error::invalid("case dates must be contiguous days"));
        }
        Ok(CaseMatrix { regions, dates, counts })
    }

    /// A matrix of synthetic counts starting at `start`.
    pub fn from_series(regions: Vec<String>, start: NaiveDate, series: &[Vec<f64>]) -> Result<Self> {
        let days = series.first().map_or(0, Vec::len);
        let dates = date_range(start, days);
        let counts = series
            .iter()
            .map(|s| s.iter().map(|v| v.max(0.0).round() as u64).collect())
            .collect();
        CaseMatrix::new(regions, dates, counts)
    }

    pub fn regions(&self) -> &[String] {
        &self.regions
    }

    pub fn dates(&self) -> &[NaiveDate] {
        &self.dates
    }

    pub fn counts(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn n(&self) -> usize {
        self.regions.len()
    }

    pub fn days(&self) -> usize {
        self.dates.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn series(&self) -> Vec<Vec<f64>> {
        self.counts.iter().map(|r| r.iter().map(|&c| c as f64).collect()).collect()
    }

    /// Reorders regions to follow `labels`.
    pub fn reordered(&self, labels: &[String]) -> Result<Self> {
        let counts = labels
            .iter()
            .map(|l| {
                self.regions
                    .iter()
                    .position(|r| r == l)
                    .map(|i| self.counts[i].clone())
                    .ok_or_else(|| Error::UnmappedRegion(l.clone()))
            })
            .collect::<Result<_>>()?;
        CaseMatrix::new(labels.to_vec(), self.dates.clone(), counts)
    }
}

pub fn date_range(start: NaiveDate, days: usize) -> Vec<NaiveDate> {
    start.iter_days().take(days).collect()
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct IngestOptions {
    /// Inclusive date range; defaults to the span of confirmed rows.
    pub range: Option<RangeInclusive<NaiveDate>>,
}

#[derive(Debug, Deserialize)]
struct CaseRow {
    date: String,
    region: String,
    status: String,
    #[serde(default)]
    count: Option<String>,
}

struct ParsedRow {
    line: usize,
    date: NaiveDate,
    region: String,
    confirmed: bool,
    count: u64,
}

fn parse_rows<R: Read>(reader: R) -> Result<Vec<ParsedRow>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).flexible(true).from_reader(reader);
    let mut rows = Vec::new();
    for (i, rec) in rdr.deserialize::<CaseRow>().enumerate() {
        // header is line 1
        let line = i + 2;
        let row = rec.map_err(|e| Error::Parse {
            line,
            msg: e.to_string(),
        })?;
        let date = NaiveDate::parse_from_str(&row.date, "%Y-%m-%d").map_err(|e| Error::Parse {
            line,
            msg: format!("bad date `{}`: {e}", row.date),
        })?;
        let count = match row.count.as_deref().map(str::trim) {
            None | Some("") => 1,
            Some(c) => c.parse().map_err(|_| Error::Parse {
                line,
                msg: format!("bad count `{c}`"),
            })?,
        };
        rows.push(ParsedRow {
            line,
            date,
            region: row.region,
            confirmed: row.status.eq_ignore_ascii_case(CONFIRMED),
            count,
        });
    }
    Ok(rows)
}

/// Distinct region labels of a case file, sorted.
pub fn case_file_regions<R: Read>(reader: R) -> Result<Vec<String>> {
    let set: BTreeSet<String> = parse_rows(reader)?.into_iter().map(|r| r.region).collect();
    Ok(set.into_iter().collect())
}

/// Aggregates `date,region,status[,count]` rows into daily confirmed counts
/// per region, zero-filling missing days.
pub fn ingest_cases<R: Read>(reader: R, regions: &[String], opts: &IngestOptions) -> Result<CaseMatrix> {
    let rows = parse_rows(reader)?;
    let index: BTreeMap<&str, usize> = regions.iter().enumerate().map(|(i, r)| (r.as_str(), i)).collect();
    for r in &rows {
        if !index.contains_key(r.region.as_str()) {
            return Err(Error::UnknownRegion {
                line: r.line,
                label: r.region.clone(),
            });
        }
    }
    let range = match &opts.range {
        Some(r) => Some(r.clone()),
        None => {
            let mut dates = rows.iter().filter(|r| r.confirmed).map(|r| r.date);
            dates.next().map(|first| {
                let (lo, hi) = dates.fold((first, first), |(lo, hi), d| (lo.min(d), hi.max(d)));
                lo..=hi
            })
        }
    };
    let dates = match &range {
        Some(r) if r.start() <= r.end() => {
            let days = (*r.end() - *r.start()).num_days() as usize + 1;
            date_range(*r.start(), days)
        }
        _ => Vec::new(),
    };
    let mut counts = vec![vec![0u64; dates.len()]; regions.len()];
    if let Some(first) = dates.first() {
        for r in rows.iter().filter(|r| r.confirmed) {
            let offset = (r.date - *first).num_days();
            if offset < 0 || offset as usize >= dates.len() {
                continue;
            }
            counts[index[r.region.as_str()]][offset as usize] += r.count;
        }
    }
    CaseMatrix::new(regions.to_vec(), dates, counts)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MergeMode {
    Sum,
    Avg,
}

/// Per-region economic indicators, z-scored across regions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EconFeatures {
    pub categories: Vec<String>,
    /// Row per region, column per category.
    pub values: Vec<Vec<f64>>,
}

impl EconFeatures {
    pub fn width(&self) -> usize {
        self.categories.len()
    }
}

#[derive(Debug, Deserialize)]
struct EconRow {
    region: String,
    category: String,
    value: f64,
}

#[derive(Debug, Deserialize)]
struct MappingRow {
    health_region: String,
    economic_region: String,
    mode: MergeMode,
}

fn read_csv<T: serde::de::DeserializeOwned, R: Read>(reader: R) -> Result<Vec<T>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    rdr.deserialize()
        .enumerate()
        .map(|(i, r)| {
            r.map_err(|e| Error::Parse {
                line: i + 2,
                msg: e.to_string(),
            })
        })
        .collect()
}

/// Merges `region,category,value` economic rows onto health regions using
/// `health_region,economic_region,mode` mapping rows, then z-scores each
/// category across regions. Constant categories become 0.
pub fn merge_economic<R1: Read, R2: Read>(regions: &[String], econ: R1, mapping: R2) -> Result<EconFeatures> {
    let econ: Vec<EconRow> = read_csv(econ)?;
    let mapping: Vec<MappingRow> = read_csv(mapping)?;
    let categories: Vec<String> = econ.iter().map(|r| r.category.clone()).collect::<BTreeSet<_>>().into_iter().collect();
    let mut table: BTreeMap<&str, BTreeMap<&str, f64>> = BTreeMap::new();
    for r in &econ {
        *table.entry(&r.region).or_default().entry(&r.category).or_insert(0.0) += r.value;
    }
    let mut raw = Vec::with_capacity(regions.len());
    for region in regions {
        let sources: Vec<&MappingRow> = mapping.iter().filter(|m| &m.health_region == region).collect();
        if sources.is_empty() {
            return Err(Error::UnmappedRegion(region.clone()));
        }
        let mode = sources[0].mode;
        if sources.iter().any(|s| s.mode != mode) {
            return Err(Error::invalid(format!("mixed merge modes for `{region}`")));
        }
        let mut row = vec![0.0; categories.len()];
        for s in &sources {
            let values = table
                .get(s.economic_region.as_str())
                .ok_or_else(|| Error::invalid(format!("economic region `{}` has no rows", s.economic_region)))?;
            for (j, c) in categories.iter().enumerate() {
                row[j] += values.get(c.as_str()).copied().unwrap_or(0.0);
            }
        }
        if mode == MergeMode::Avg {
            row.iter_mut().for_each(|v| *v /= sources.len() as f64);
        }
        raw.push(row);
    }
    Ok(EconFeatures {
        categories,
        values: zscore_columns(raw),
    })
}

fn zscore_columns(mut rows: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
    let n = rows.len();
    if n == 0 {
        return rows;
    }
    for j in 0..rows[0].len() {
        let mean = rows.iter().map(|r| r[j]).sum::<f64>() / n as f64;
        let sd = (rows.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
        for r in rows.iter_mut() {
            r[j] = if sd > 0.0 { (r[j] - mean) / sd } else { 0.0 };
        }
    }
    rows
}

/// One supervised example.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// Day index of the last input day.
    pub anchor: usize,
    /// `context` windows of `n × (window + econ)` features, oldest first.
    pub inputs: Vec<Tensor>,
    /// Counts on day `anchor + horizon`.
    pub target: Vec<f64>,
}

impl Sample {
    pub fn target_day(&self, horizon: usize) -> usize {
        self.anchor + horizon
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowSpec {
    pub window: usize,
    pub horizon: usize,
    pub context: usize,
}

impl WindowSpec {
    /// Earliest anchor with a full context.
    pub fn first_anchor(&self) -> usize {
        self.window + self.context - 2
    }
}

/// Features of the window of `spec.window` days ending at `end`, econ
/// columns appended.
pub fn window_features(series: &[Vec<f64>], econ: Option<&EconFeatures>, end: usize, window: usize) -> Tensor {
    let n = series.len();
    let e = econ.map_or(0, EconFeatures::width);
    Tensor::from_fn(n, window + e, |u, j| {
        if j < window {
            series[u][end + 1 - window + j]
        } else {
            econ.expect("econ columns").values[u][j - window]
        }
    })
}

/// The context windows ending at `anchor`.
pub fn context_at(series: &[Vec<f64>], econ: Option<&EconFeatures>, anchor: usize, spec: &WindowSpec) -> Vec<Tensor> {
    (0..spec.context)
        .map(|k| window_features(series, econ, anchor + 1 + k - spec.context, spec.window))
        .collect()
}

/// Every sample whose context and target fit in `series`; count
/// `T − window − horizon + 1 − (context − 1)`.
pub fn build_windows(series: &[Vec<f64>], econ: Option<&EconFeatures>, spec: &WindowSpec) -> Result<Vec<Sample>> {
    if spec.window == 0 || spec.horizon == 0 || spec.context == 0 {
        return Err(Error::invalid("window, horizon and context must be positive"));
    }
    let days = series.first().map_or(0, Vec::len);
    let first = spec.first_anchor();
    if days < first + 1 + spec.horizon {
        return Err(Error::invalid(format!(
            "{days} days cannot hold a {}-day window, {} context steps and horizon {}",
            spec.window, spec.context, spec.horizon
        )));
    }
    Ok((first..days - spec.horizon)
        .map(|anchor| Sample {
            anchor,
            inputs: context_at(series, econ, anchor, spec),
            target: series.iter().map(|s| s[anchor + spec.horizon]).collect(),
        })
        .collect())
}

/// Rolling-origin protocol knobs. Day indices are 0-based.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RollingConfig {
    /// Days before each origin whose targets form the validation set.
    pub validation_len: usize,
    /// Days between consecutive origins.
    pub step: usize,
    /// Number of origins, counted back from the last usable one.
    pub origins: usize,
}

impl Default for RollingConfig {
    fn default() -> Self {
        RollingConfig {
            validation_len: 14,
            step: 7,
            origins: 4,
        }
    }
}

/// One evaluation origin `T`: train targets `≤ T − validation_len`,
/// validation targets in `(T − validation_len, T]`, test target `T + horizon`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub origin: usize,
    pub train_end: usize,
    pub horizon: usize,
}

impl Split {
    pub fn test_day(&self) -> usize {
        self.origin + self.horizon
    }

    pub fn validation_days(&self) -> RangeInclusive<usize> {
        self.train_end + 1..=self.origin
    }

    /// Indices of train, validation and test samples.
    pub fn partition(&self, samples: &[Sample]) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
        let (mut tr, mut va, mut te) = (Vec::new(), Vec::new(), Vec::new());
        for (i, s) in samples.iter().enumerate() {
            let day = s.target_day(self.horizon);
            if day <= self.train_end {
                tr.push(i);
            } else if day <= self.origin {
                va.push(i);
            } else if day == self.test_day() {
                te.push(i);
            }
        }
        (tr, va, te)
    }
}

/// Origins ending at the last day that still has a test target, stepping
/// back by `cfg.step`. The earliest origin must leave at least one training
/// target after `first_target`.
pub fn rolling_splits(days: usize, horizon: usize, first_target: usize, cfg: &RollingConfig) -> Result<Vec<Split>> {
    if cfg.step == 0 || cfg.origins == 0 || cfg.validation_len == 0 {
        return Err(Error::invalid("step, origins and validation_len must be positive"));
    }
    let Some(last) = days.checked_sub(horizon + 1) else {
        return Err(Error::invalid(format!("{days} days leave no test day at horizon {horizon}")));
    };
    let mut splits = Vec::new();
    for k in 0..cfg.origins {
        let Some(origin) = last.checked_sub(k * cfg.step) else { break };
        let Some(train_end) = origin.checked_sub(cfg.validation_len) else { break };
        if train_end < first_target {
            break;
        }
        splits.push(Split {
            origin,
            train_end,
            horizon,
        });
    }
    if splits.is_empty() {
        return Err(Error::invalid("no origin leaves room for training and validation targets"));
    }
    splits.reverse();
    Ok(splits)
}

/// Everything the trainers need from ingestion.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetBundle {
    pub cases: CaseMatrix,
    pub graph: RegionGraph,
    #[serde(default)]
    pub econ: Option<EconFeatures>,
}

impl DatasetBundle {
    pub fn new(cases: CaseMatrix, graph: RegionGraph, econ: Option<EconFeatures>) -> Result<Self> {
        if cases.regions() != graph.labels() {
            return Err(Error::invalid("case matrix and graph disagree on region order"));
        }
        if let Some(e) = &econ {
            if e.values.len() != cases.n() {
                return Err(Error::shape("DatasetBundle", cases.n(), e.values.len()));
            }
        }
        Ok(DatasetBundle { cases, graph, econ })
    }
}
