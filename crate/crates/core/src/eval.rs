//! Rolling-origin evaluation of models and baselines, metric reports and
//! autoregressive rollouts.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::baselines::{avg, avg_window, last_day, linreg_fit, pooled_samples, LINREG_WINDOW};
use crate::data::{build_windows, context_at, rolling_splits, DatasetBundle, EconFeatures, RollingConfig, Sample, WindowSpec};
use crate::error::{Error, Result};
use crate::metrics::{decay_slope, mae, mean, r2, rmse};
use crate::models::{Model, ModelConfig, ModelKind};
use crate::train::{fit, ModelCheckpoint, TrainConfig, TrainingWindow};

pub const DEFAULT_HORIZONS: [usize; 4] = [3, 7, 14, 21];

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum BaselineKind {
    Avg,
    AvgWindow,
    LastDay,
    LinReg,
    /// Predicts the mean of the test truths; an R² reference, not a forecaster.
    ConstMean,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 5] = [
        BaselineKind::Avg,
        BaselineKind::AvgWindow,
        BaselineKind::LastDay,
        BaselineKind::LinReg,
        BaselineKind::ConstMean,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BaselineKind::Avg => "AVG",
            BaselineKind::AvgWindow => "AVG_WINDOW",
            BaselineKind::LastDay => "LAST_DAY",
            BaselineKind::LinReg => "LIN_REG",
            BaselineKind::ConstMean => "CONST_MEAN",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_uppercase().replace('-', "_");
        BaselineKind::ALL
            .into_iter()
            .find(|b| b.name() == key)
            .ok_or_else(|| Error::invalid(format!("unknown baseline `{s}`")))
    }

    /// Per-region forecasts of day `origin + horizon` from days `..=origin`.
    pub fn predict(self, series: &[Vec<f64>], origin: usize, horizon: usize, window: usize) -> Result<Vec<f64>> {
        let history = |u: usize| &series[u][..=origin];
        match self {
            BaselineKind::Avg => (0..series.len()).map(|u| avg(history(u))).collect(),
            BaselineKind::AvgWindow => (0..series.len()).map(|u| avg_window(history(u), window)).collect(),
            BaselineKind::LastDay => (0..series.len()).map(|u| last_day(history(u))).collect(),
            BaselineKind::LinReg => {
                let (xs, ys) = pooled_samples(series, LINREG_WINDOW, horizon, origin);
                let fit = linreg_fit(&xs, &ys)?;
                (0..series.len())
                    .map(|u| {
                        let h = history(u);
                        if h.len() < LINREG_WINDOW {
                            return Err(Error::invalid("history shorter than the regression window"));
                        }
                        fit.predict(&h[h.len() - LINREG_WINDOW..])
                    })
                    .collect()
            }
            BaselineKind::ConstMean => {
                let day = origin + horizon;
                let truths: Vec<f64> = series
                    .iter()
                    .map(|s| s.get(day).copied().ok_or_else(|| Error::invalid("no truth at the test day")))
                    .collect::<Result<_>>()?;
                Ok(vec![mean(&truths); series.len()])
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Forecaster {
    Model(ModelKind),
    Baseline(BaselineKind),
}

impl Forecaster {
    pub fn name(self) -> &'static str {
        match self {
            Forecaster::Model(k) => k.name(),
            Forecaster::Baseline(b) => b.name(),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        ModelKind::parse(s)
            .map(Forecaster::Model)
            .or_else(|_| BaselineKind::parse(s).map(Forecaster::Baseline))
            .map_err(|_| Error::invalid(format!("unknown model or baseline `{s}`")))
    }
}

/// Everything `evaluate_horizons` needs besides the data.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalSetup {
    /// Template for every trained model; `kind`, `horizon` and `seed` are
    /// set per run.
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub rolling: RollingConfig,
    pub horizons: Vec<usize>,
    /// Window of the AVG_WINDOW baseline.
    pub baseline_window: usize,
    /// Worker threads; 0 uses the available parallelism.
    pub threads: usize,
}

impl EvalSetup {
    pub fn new(model: ModelConfig, train: TrainConfig) -> Self {
        EvalSetup {
            baseline_window: model.window,
            model,
            train,
            rolling: RollingConfig::default(),
            horizons: DEFAULT_HORIZONS.to_vec(),
            threads: 0,
        }
    }

    fn spec(&self, kind: ModelKind, horizon: usize) -> WindowSpec {
        WindowSpec {
            window: self.model.window,
            horizon,
            context: if kind.is_temporal() { self.model.context } else { 1 },
        }
    }

    /// First day any forecaster can be trained to predict at `horizon`.
    fn first_target(&self, horizon: usize) -> usize {
        let spec = WindowSpec {
            window: self.model.window.max(LINREG_WINDOW).max(self.baseline_window),
            horizon,
            context: self.model.context.max(1),
        };
        spec.first_anchor() + horizon
    }
}

/// Mixes `parts` into `base`, giving each run its own seed.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    let mut x = base;
    for &p in parts {
        x = splitmix(x ^ splitmix(p.wrapping_add(0x9e37_79b9_7f4a_7c15)));
    }
    x
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// One forecast of one region at one origin.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeriesRow {
    pub model: String,
    pub horizon: usize,
    pub origin: usize,
    pub date: String,
    pub region: String,
    pub forecast: f64,
    pub target: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub model: String,
    pub horizon: usize,
    pub mae: f64,
    pub rmse: f64,
    pub r2: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlopeRow {
    pub model: String,
    pub mae: f64,
    pub rmse: f64,
    pub r2: f64,
}

/// Bookkeeping of one trained model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainedRun {
    pub model: String,
    pub horizon: usize,
    pub origin: usize,
    pub seed: u64,
    pub fingerprint: u64,
    pub best_epoch: usize,
    pub epochs_run: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<MetricRow>,
    pub slopes: Vec<SlopeRow>,
    pub series: Vec<SeriesRow>,
    pub runs: Vec<TrainedRun>,
}

/// Per `(model, horizon)` metrics, each the mean over origins of the
/// metric computed across regions. Origins whose truths are all equal
/// contribute no R²; with none left R² is NaN.
pub fn aggregate_metrics(series: &[SeriesRow]) -> Result<Vec<MetricRow>> {
    let mut groups: Vec<((String, usize), BTreeMap<usize, (Vec<f64>, Vec<f64>)>)> = Vec::new();
    for r in series {
        let key = (r.model.clone(), r.horizon);
        let pos = match groups.iter().position(|(k, _)| *k == key) {
            Some(p) => p,
            None => {
                groups.push((key, BTreeMap::new()));
                groups.len() - 1
            }
        };
        let e = groups[pos].1.entry(r.origin).or_default();
        e.0.push(r.forecast);
        e.1.push(r.target);
    }
    groups
        .into_iter()
        .map(|((model, horizon), origins)| {
            let (mut maes, mut rmses, mut r2s) = (Vec::new(), Vec::new(), Vec::new());
            for (p, y) in origins.values() {
                maes.push(mae(p, y)?);
                rmses.push(rmse(p, y)?);
                if let Ok(v) = r2(p, y) {
                    r2s.push(v);
                }
            }
            Ok(MetricRow {
                model,
                horizon,
                mae: mean(&maes),
                rmse: mean(&rmses),
                r2: if r2s.is_empty() { f64::NAN } else { mean(&r2s) },
            })
        })
        .collect()
}

/// Decay slopes per model across its horizons; models seen at fewer than
/// two distinct horizons are skipped.
pub fn decay_slopes(rows: &[MetricRow]) -> Vec<SlopeRow> {
    let mut models: Vec<&str> = Vec::new();
    for r in rows {
        if !models.contains(&r.model.as_str()) {
            models.push(&r.model);
        }
    }
    models
        .into_iter()
        .filter_map(|m| {
            let rs: Vec<&MetricRow> = rows.iter().filter(|r| r.model == m).collect();
            let h: Vec<f64> = rs.iter().map(|r| r.horizon as f64).collect();
            let slope = |f: fn(&MetricRow) -> f64| decay_slope(&h, &rs.iter().map(|r| f(r)).collect::<Vec<_>>());
            Some(SlopeRow {
                model: m.to_string(),
                mae: slope(|r| r.mae).ok()?,
                rmse: slope(|r| r.rmse).ok()?,
                r2: slope(|r| r.r2).ok()?,
            })
        })
        .collect()
}

impl EvalReport {
    pub fn from_series(series: Vec<SeriesRow>, runs: Vec<TrainedRun>) -> Result<Self> {
        let rows = aggregate_metrics(&series)?;
        let slopes = decay_slopes(&rows);
        Ok(EvalReport {
            rows,
            slopes,
            series,
            runs,
        })
    }

    pub fn row(&self, model: &str, horizon: usize) -> Option<&MetricRow> {
        self.rows.iter().find(|r| r.model == model && r.horizon == horizon)
    }

    pub fn origins(&self) -> usize {
        let mut o: Vec<usize> = self.series.iter().map(|r| r.origin).collect();
        o.sort_unstable();
        o.dedup();
        o.len()
    }

    /// Metric table and slopes as comma-separated text with `#` comments.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "# metrics per horizon, averaged over {} rolling origin(s); each origin scores all regions",
            self.origins()
        );
        out.push_str("model,horizon,mae,rmse,r2\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{},{},{}", r.model, r.horizon, r.mae, r.rmse, r.r2);
        }
        out.push_str("\n# decay slopes: least-squares slope of each metric against horizon\n");
        out.push_str("model,mae_slope,rmse_slope,r2_slope\n");
        for s in &self.slopes {
            let _ = writeln!(out, "{},{},{},{}", s.model, s.mae, s.rmse, s.r2);
        }
        out
    }

    pub fn series_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.series {
            w.serialize(r)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::invalid(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::invalid(e.to_string()))
    }

    pub fn parse_series_csv(text: &str) -> Result<Vec<SeriesRow>> {
        let mut rdr = csv::Reader::from_reader(text.as_bytes());
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

    /// Parses the metric table of [`EvalReport::to_text`].
    pub fn parse_metric_table(text: &str) -> Result<Vec<MetricRow>> {
        let mut rows = Vec::new();
        let mut in_table = false;
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line == "model,horizon,mae,rmse,r2" {
                in_table = true;
                continue;
            }
            if !in_table || line.starts_with('#') {
                continue;
            }
            if line.is_empty() {
                break;
            }
            let f: Vec<&str> = line.split(',').collect();
            let bad = |_| Error::Parse {
                line: i + 1,
                msg: format!("bad metric row `{line}`"),
            };
            if f.len() != 5 {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: format!("expected 5 fields, got {}", f.len()),
                });
            }
            rows.push(MetricRow {
                model: f[0].to_string(),
                horizon: f[1].parse().map_err(|_| Error::Parse {
                    line: i + 1,
                    msg: format!("bad horizon `{}`", f[1]),
                })?,
                mae: f[2].parse().map_err(bad)?,
                rmse: f[3].parse().map_err(bad)?,
                r2: f[4].parse().map_err(bad)?,
            });
        }
        Ok(rows)
    }
}

fn series_rows(
    bundle: &DatasetBundle,
    name: &str,
    horizon: usize,
    origin: usize,
    forecast: &[f64],
) -> Vec<SeriesRow> {
    let day = origin + horizon;
    let date = bundle.cases.dates().get(day).map(|d| d.to_string()).unwrap_or_default();
    bundle
        .cases
        .regions()
        .iter()
        .enumerate()
        .map(|(u, region)| SeriesRow {
            model: name.to_string(),
            horizon,
            origin,
            date: date.clone(),
            region: region.clone(),
            forecast: forecast[u],
            target: bundle.cases.counts()[u][day] as f64,
        })
        .collect()
}

struct Job {
    kind: ModelKind,
    horizon: usize,
    origin: usize,
    train_end: usize,
}

struct JobOutput {
    forecast: Vec<f64>,
    run: TrainedRun,
    checkpoint: ModelCheckpoint,
}

/// Model config for one trained run.
pub fn run_config(setup: &EvalSetup, kind: ModelKind, horizon: usize, origin: usize, econ: usize) -> ModelConfig {
    let mut cfg = setup.model.clone();
    let defaults = ModelConfig::new(kind, horizon);
    cfg.kind = kind;
    cfg.horizon = horizon;
    cfg.econ_features = econ;
    if !kind.is_temporal() {
        cfg.context = 1;
    }
    if !kind.is_multiresolution() {
        cfg.cluster_sizes.clear();
    } else if cfg.cluster_sizes.is_empty() {
        cfg.cluster_sizes = defaults.cluster_sizes;
    }
    cfg.seed = derive_seed(setup.train.seed, &[kind as u64, horizon as u64, origin as u64, 1]);
    cfg
}

fn run_job(bundle: &DatasetBundle, setup: &EvalSetup, samples: &[Sample], job: &Job) -> Result<JobOutput> {
    let cfg = run_config(setup, job.kind, job.horizon, job.origin, bundle.econ.as_ref().map_or(0, EconFeatures::width));
    let mut tc = setup.train.clone();
    tc.seed = derive_seed(setup.train.seed, &[job.kind as u64, job.horizon as u64, job.origin as u64, 2]);
    let split = crate::data::Split {
        origin: job.origin,
        train_end: job.train_end,
        horizon: job.horizon,
    };
    let (tr, va, te) = split.partition(samples);
    let train: Vec<&Sample> = tr.iter().map(|&i| &samples[i]).collect();
    let val: Vec<&Sample> = va.iter().map(|&i| &samples[i]).collect();
    let Some(&test) = te.first() else {
        return Err(Error::invalid(format!("no test sample at origin {}", job.origin)));
    };
    let (checkpoint, history) = fit(
        &cfg,
        &bundle.graph,
        &train,
        &val,
        &tc,
        TrainingWindow {
            origin: job.origin,
            train_end: job.train_end,
        },
    )?;
    let model = checkpoint.model()?;
    let forecast = model.predict(&samples[test].inputs)?;
    Ok(JobOutput {
        forecast,
        run: TrainedRun {
            model: job.kind.name().to_string(),
            horizon: job.horizon,
            origin: job.origin,
            seed: tc.seed,
            fingerprint: model.params().fingerprint(),
            best_epoch: history.best_epoch,
            epochs_run: history.epochs_run,
        },
        checkpoint,
    })
}

/// Trains one model per `(kind, horizon, origin)` and scores every
/// forecaster over the rolling origins. Returns the report and the
/// checkpoints of the trained models in job order.
pub fn evaluate_horizons(
    bundle: &DatasetBundle,
    setup: &EvalSetup,
    forecasters: &[Forecaster],
) -> Result<(EvalReport, Vec<ModelCheckpoint>)> {
    if setup.horizons.is_empty() {
        return Err(Error::invalid("no horizons to evaluate"));
    }
    let series = bundle.cases.series();
    let days = bundle.cases.days();
    let mut splits = BTreeMap::new();
    for &h in &setup.horizons {
        splits.insert(h, rolling_splits(days, h, setup.first_target(h), &setup.rolling)?);
    }
    let kinds: Vec<ModelKind> = forecasters
        .iter()
        .filter_map(|f| match f {
            Forecaster::Model(k) => Some(*k),
            Forecaster::Baseline(_) => None,
        })
        .collect();

    let mut samples: BTreeMap<(ModelKind, usize), Vec<Sample>> = BTreeMap::new();
    let mut jobs = Vec::new();
    for &kind in &kinds {
        for &h in &setup.horizons {
            samples.insert((kind, h), build_windows(&series, bundle.econ.as_ref(), &setup.spec(kind, h))?);
            for s in &splits[&h] {
                jobs.push(Job {
                    kind,
                    horizon: h,
                    origin: s.origin,
                    train_end: s.train_end,
                });
            }
        }
    }

    let outputs = run_parallel(&jobs, setup.threads, |job| {
        run_job(bundle, setup, &samples[&(job.kind, job.horizon)], job)
    })?;

    let mut rows = Vec::new();
    let mut runs = Vec::new();
    let mut checkpoints = Vec::new();
    for f in forecasters {
        for &h in &setup.horizons {
            for s in &splits[&h] {
                let forecast = match f {
                    Forecaster::Baseline(b) => b.predict(&series, s.origin, h, setup.baseline_window)?,
                    Forecaster::Model(k) => {
                        let i = jobs
                            .iter()
                            .position(|j| j.kind == *k && j.horizon == h && j.origin == s.origin)
                            .expect("job scheduled");
                        outputs[i].forecast.clone()
                    }
                };
                rows.extend(series_rows(bundle, f.name(), h, s.origin, &forecast));
            }
        }
    }
    for o in outputs {
        runs.push(o.run);
        checkpoints.push(o.checkpoint);
    }
    Ok((EvalReport::from_series(rows, runs)?, checkpoints))
}

/// Scores saved checkpoints at their own origins, alongside `baselines`
/// at the same origins and horizons.
pub fn evaluate_checkpoints(
    bundle: &DatasetBundle,
    checkpoints: &[ModelCheckpoint],
    baselines: &[BaselineKind],
    baseline_window: usize,
) -> Result<EvalReport> {
    let series = bundle.cases.series();
    let mut rows = Vec::new();
    let mut points: Vec<(usize, usize)> = Vec::new();
    for c in checkpoints {
        let model = c.model()?;
        let (h, origin) = (c.horizon(), c.window.origin);
        if origin + h >= bundle.cases.days() {
            return Err(Error::invalid(format!("checkpoint origin {origin} + horizon {h} is past the data")));
        }
        let spec = WindowSpec {
            window: c.config.window,
            horizon: h,
            context: c.config.context,
        };
        let forecast = model.predict(&context_at(&series, bundle.econ.as_ref(), origin, &spec))?;
        rows.extend(series_rows(bundle, c.config.kind.name(), h, origin, &forecast));
        if !points.contains(&(h, origin)) {
            points.push((h, origin));
        }
    }
    for b in baselines {
        for &(h, origin) in &points {
            rows.extend(series_rows(bundle, b.name(), h, origin, &b.predict(&series, origin, h, baseline_window)?));
        }
    }
    EvalReport::from_series(rows, Vec::new())
}

/// Maps `f` over `jobs` on up to `threads` workers, keeping job order.
fn run_parallel<J: Sync, T: Send>(jobs: &[J], threads: usize, f: impl Fn(&J) -> Result<T> + Sync) -> Result<Vec<T>> {
    if jobs.is_empty() {
        return Ok(Vec::new());
    }
    let workers = match threads {
        0 => std::thread::available_parallelism().map_or(1, |n| n.get()),
        t => t,
    }
    .min(jobs.len());
    if workers == 1 {
        return jobs.iter().map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<T>>>> = Mutex::new((0..jobs.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= jobs.len() {
                    break;
                }
                let r = f(&jobs[i]);
                results.lock().expect("result lock")[i] = Some(r);
            });
        }
    });
    results
        .into_inner()
        .expect("result lock")
        .into_iter()
        .map(|r| r.expect("every job ran"))
        .collect()
}

/// Ground truth revealed to a rollout after a reporting delay.
#[derive(Clone, Copy, Debug)]
pub struct TruthFeed<'a> {
    /// Per-region truths for the days after the seed history.
    pub series: &'a [Vec<f64>],
    /// Days between a truth's date and the latest input day that may use it.
    pub lag: usize,
}

/// Rolls `model` forward `steps` days past `seed` (per-region history).
///
/// Day `D` is predicted from the windows ending at `D − horizon`. Input
/// days inside the seed use the seed; later input days use the rollout's
/// own clamped predictions, or the truth when a feed is given and the day
/// is at least `lag` days before the window's end. With lag 0 every input
/// is truth and each value equals a single forward pass.
pub fn autoregressive_forecast(
    model: &Model,
    econ: Option<&EconFeatures>,
    seed: &[Vec<f64>],
    steps: usize,
    truth: Option<TruthFeed<'_>>,
) -> Result<Vec<Vec<f64>>> {
    if steps == 0 {
        return Err(Error::invalid("a rollout needs at least one step"));
    }
    let cfg = model.config();
    let n = model.graph().n();
    if seed.len() != n {
        return Err(Error::shape("rollout seed", n, seed.len()));
    }
    let len = seed[0].len();
    let need = cfg.window + cfg.context - 1;
    if len < need || seed.iter().any(|s| s.len() != len) {
        return Err(Error::invalid(format!("rollout needs {need} seed days per region")));
    }
    let spec = WindowSpec {
        window: cfg.window,
        horizon: cfg.horizon,
        context: cfg.context,
    };
    let h = cfg.horizon;
    let mut preds: Vec<Vec<f64>> = vec![Vec::with_capacity(steps); n];
    for s in 1..=steps {
        let day = len - 1 + s;
        let end = day - h;
        let mut known: Vec<Vec<f64>> = seed.to_vec();
        for x in len..=end {
            let from_truth = truth.and_then(|t| {
                let k = x - len;
                (x + t.lag <= end && t.series.iter().all(|r| k < r.len())).then_some((t, k))
            });
            for u in 0..n {
                known[u].push(match from_truth {
                    Some((t, k)) => t.series[u][k],
                    None => preds[u][x - len],
                });
            }
        }
        let out = model.predict(&context_at(&known, econ, end, &spec))?;
        for (u, v) in out.into_iter().enumerate() {
            preds[u].push(v);
        }
    }
    Ok(preds)
}
