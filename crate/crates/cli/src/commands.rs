use std::fs::{self, File};
use std::path::{Path, PathBuf};

use epigraph::data::{ingest_cases, merge_economic, DatasetBundle, IngestOptions};
use epigraph::eval::{
    autoregressive_forecast, evaluate_checkpoints, evaluate_horizons, EvalReport, Forecaster, TruthFeed,
};
use epigraph::graph::{edge_list_labels, parse_edge_list, RegionGraph};
use epigraph::train::ModelCheckpoint;
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

#[derive(Clone, Copy, Debug)]
pub struct Printer(pub u8);

impl Printer {
    fn info(self, msg: impl AsRef<str>) {
        if self.0 >= 1 {
            println!("{}", msg.as_ref());
        }
    }

    fn detail(self, msg: impl AsRef<str>) {
        if self.0 >= 2 {
            println!("{}", msg.as_ref());
        }
    }

    fn warn(self, msg: impl AsRef<str>) {
        if self.0 >= 1 {
            eprintln!("warning: {}", msg.as_ref());
        }
    }
}

fn required<'a>(p: &'a Option<PathBuf>, what: &str) -> CliResult<&'a Path> {
    p.as_deref()
        .ok_or_else(|| CliError::Usage(format!("no {what} file given (flag or [paths] entry)")))
}

fn read(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

fn open(path: &Path) -> CliResult<File> {
    File::open(path).map_err(|e| CliError::io(path, e))
}

/// Writes every file or none: each goes to a sibling temp path first and is
/// renamed into place once all of them are written.
fn write_all(files: &[(PathBuf, String)]) -> CliResult<()> {
    let mut staged = Vec::with_capacity(files.len());
    for (path, text) in files {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        }
        let mut tmp = path.clone().into_os_string();
        tmp.push(".partial");
        let tmp = PathBuf::from(tmp);
        if let Err(e) = fs::write(&tmp, text) {
            for t in &staged {
                let _ = fs::remove_file(t);
            }
            let _ = fs::remove_file(&tmp);
            return Err(CliError::io(&tmp, e));
        }
        staged.push(tmp);
    }
    for (tmp, (path, _)) in staged.iter().zip(files) {
        fs::rename(tmp, path).map_err(|e| CliError::io(path, e))?;
    }
    Ok(())
}

fn region_labels(cfg: &RunConfig, adjacency: &str) -> CliResult<Vec<String>> {
    let Some(path) = &cfg.paths.regions else {
        return Ok(edge_list_labels(adjacency));
    };
    let mut labels: Vec<String> = Vec::new();
    for line in read(path)?.lines().map(str::trim) {
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if labels.iter().any(|l| l == line) {
            return Err(CliError::Usage(format!("{}: region `{line}` listed twice", path.display())));
        }
        labels.push(line.to_string());
    }
    Ok(labels)
}

pub fn ingest(cfg: &RunConfig, out: Printer) -> CliResult<()> {
    let cases_path = required(&cfg.paths.cases, "case")?;
    let adj_path = required(&cfg.paths.adjacency, "adjacency")?;
    let adjacency = read(adj_path)?;
    let labels = region_labels(cfg, &adjacency)?;
    if labels.is_empty() {
        return Err(CliError::Usage(format!("{}: no regions found", adj_path.display())));
    }
    let pairs = parse_edge_list(&adjacency, &labels).map_err(|e| CliError::input(adj_path, e))?;
    let graph = RegionGraph::new(labels.clone(), &pairs)?;

    let case_text = read(cases_path)?;
    if case_text.trim().is_empty() {
        out.warn(format!("{} is empty; writing a zero-count case matrix", cases_path.display()));
    }
    let load = |opts: &IngestOptions| {
        ingest_cases(case_text.as_bytes(), &labels, opts).map_err(|e| CliError::input(cases_path, e))
    };
    let mut cases = load(&IngestOptions::default())?;
    let (start, end) = (cfg.ingest.start, cfg.ingest.end);
    if start.is_some() || end.is_some() {
        let (first, last) = (cases.dates().first().copied(), cases.dates().last().copied());
        match (start.or(first), end.or(last)) {
            (Some(s), Some(e)) if s <= e => cases = load(&IngestOptions { range: Some(s..=e) })?,
            (Some(s), Some(e)) => return Err(CliError::Usage(format!("start {s} is after end {e}"))),
            _ => return Err(CliError::Usage("a date range needs both ends when the case file is empty".into())),
        }
    }
    if cases.total() == 0 && !case_text.trim().is_empty() {
        out.warn("no confirmed cases in range");
    }

    let econ = match (&cfg.paths.economic, &cfg.paths.mapping) {
        (Some(e), Some(m)) => Some(merge_economic(&labels, open(e)?, open(m)?).map_err(|err| CliError::input(e, err))?),
        (None, None) => None,
        _ => return Err(CliError::Usage("economic data needs both the indicator and mapping files".into())),
    };
    let econ_width = econ.as_ref().map_or(0, |e| e.width());
    let bundle = DatasetBundle::new(cases, graph, econ)?;
    let path = cfg.bundle_path();
    write_all(&[(path.clone(), serde_json::to_string(&bundle).map_err(epigraph::Error::from)?)])?;

    let c = &bundle.cases;
    out.info(format!(
        "regions: {}, days: {}, total cases: {}, borders: {}, economic columns: {econ_width}",
        c.n(),
        c.days(),
        c.total(),
        pairs.len()
    ));
    if let (Some(a), Some(b)) = (c.dates().first(), c.dates().last()) {
        out.info(format!("dates: {a} to {b}"));
    }
    out.info(format!("bundle: {}", path.display()));
    Ok(())
}

fn load_bundle(cfg: &RunConfig) -> CliResult<DatasetBundle> {
    let path = cfg.bundle_path();
    let text = read(&path)?;
    serde_json::from_str(&text).map_err(|e| CliError::input(&path, e.into()))
}

fn checkpoint_name(c: &ModelCheckpoint) -> String {
    format!("{}_h{}.json", c.config.kind.name().to_ascii_lowercase(), c.horizon())
}

pub fn train(cfg: &RunConfig, out: Printer) -> CliResult<()> {
    let bundle = load_bundle(cfg)?;
    let mut setup = cfg.eval_setup()?;
    setup.rolling.origins = 1;
    let forecasters: Vec<Forecaster> = cfg.model_kinds()?.into_iter().map(Forecaster::Model).collect();
    if forecasters.is_empty() {
        return Err(CliError::Usage("no models to train".into()));
    }
    let (report, checkpoints) = evaluate_horizons(&bundle, &setup, &forecasters)?;
    let dir = cfg.checkpoint_dir();
    let mut files = Vec::with_capacity(checkpoints.len());
    for (c, run) in checkpoints.iter().zip(&report.runs) {
        let path = dir.join(checkpoint_name(c));
        out.info(format!(
            "{} h{}: best epoch {} of {}, validation mse {} -> {}",
            run.model,
            run.horizon,
            run.best_epoch,
            run.epochs_run,
            c.best_val_loss,
            path.display()
        ));
        out.detail(format!("  seed {} parameters {:016x}", run.seed, run.fingerprint));
        files.push((path, c.to_json()?));
    }
    write_all(&files)
}

fn checkpoint_files(dir: &Path) -> CliResult<Vec<PathBuf>> {
    let mut paths = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| CliError::io(dir, e))? {
        let path = entry.map_err(|e| CliError::io(dir, e))?.path();
        if path.extension().is_some_and(|x| x == "json") {
            paths.push(path);
        }
    }
    paths.sort();
    if paths.is_empty() {
        return Err(CliError::Usage(format!("{}: no checkpoints", dir.display())));
    }
    Ok(paths)
}

fn load_checkpoints(paths: &[PathBuf], bundle: &DatasetBundle) -> CliResult<Vec<ModelCheckpoint>> {
    paths
        .iter()
        .map(|p| {
            let c = ModelCheckpoint::load(p).map_err(|e| CliError::input(p, e))?;
            if c.graph.labels() != bundle.graph.labels() {
                return Err(CliError::Usage(format!(
                    "{}: trained on different regions than the bundle",
                    p.display()
                )));
            }
            Ok(c)
        })
        .collect()
}

pub fn evaluate(cfg: &RunConfig, checkpoints: Option<&Path>, with_models: bool, out: Printer) -> CliResult<()> {
    let bundle = load_bundle(cfg)?;
    let baselines = cfg.baseline_kinds()?;
    let setup = cfg.eval_setup()?;
    let report = match checkpoints {
        Some(dir) => {
            let ckpts = load_checkpoints(&checkpoint_files(dir)?, &bundle)?;
            evaluate_checkpoints(&bundle, &ckpts, &baselines, setup.baseline_window)?
        }
        None => {
            let mut forecasters = Vec::new();
            if with_models {
                forecasters.extend(cfg.model_kinds()?.into_iter().map(Forecaster::Model));
            }
            forecasters.extend(baselines.into_iter().map(Forecaster::Baseline));
            if forecasters.is_empty() {
                return Err(CliError::Usage("nothing to evaluate".into()));
            }
            evaluate_horizons(&bundle, &setup, &forecasters)?.0
        }
    };
    write_report(cfg, &report, out)
}

fn write_report(cfg: &RunConfig, report: &EvalReport, out: Printer) -> CliResult<()> {
    let dir = cfg.output_dir();
    let mut files = vec![
        (dir.join("report.txt"), report.to_text()),
        (dir.join("series.csv"), report.series_csv()?),
    ];
    if !report.runs.is_empty() {
        let runs = serde_json::to_string_pretty(&report.runs).map_err(epigraph::Error::from)?;
        files.push((dir.join("runs.json"), runs));
    }
    write_all(&files)?;
    out.info(report.to_text().trim_end());
    out.detail(format!("wrote {}", dir.display()));
    Ok(())
}

#[derive(Serialize)]
struct ForecastRow<'a> {
    model: &'a str,
    horizon: usize,
    date: String,
    region: &'a str,
    forecast: f64,
}

pub fn forecast(cfg: &RunConfig, paths: &[PathBuf], out: Printer) -> CliResult<()> {
    let lag = cfg.lag()?;
    let steps = cfg.steps();
    if steps == 0 {
        return Err(CliError::Usage("steps must be at least 1".into()));
    }
    let bundle = load_bundle(cfg)?;
    let paths = if paths.is_empty() {
        checkpoint_files(&cfg.checkpoint_dir())?
    } else {
        paths.to_vec()
    };
    let checkpoints = load_checkpoints(&paths, &bundle)?;

    let series = bundle.cases.series();
    let days = bundle.cases.days();
    let seed_days = cfg.forecast.seed_days.unwrap_or(days);
    if seed_days == 0 || seed_days > days {
        return Err(CliError::Usage(format!("seed days {seed_days} outside 1..={days}")));
    }
    let seed: Vec<Vec<f64>> = series.iter().map(|s| s[..seed_days].to_vec()).collect();
    let rest: Vec<Vec<f64>> = series.iter().map(|s| s[seed_days..].to_vec()).collect();
    let truth = lag.map(|lag| TruthFeed { series: &rest, lag });
    let first = bundle.cases.dates()[0] + chrono::Days::new(seed_days as u64);

    let mut w = csv::Writer::from_writer(Vec::new());
    for c in &checkpoints {
        let model = c.model()?;
        let preds = autoregressive_forecast(&model, bundle.econ.as_ref(), &seed, steps, truth)?;
        let name = c.config.kind.name();
        for k in 0..steps {
            let date = (first + chrono::Days::new(k as u64)).to_string();
            for (u, region) in bundle.cases.regions().iter().enumerate() {
                w.serialize(ForecastRow {
                    model: name,
                    horizon: c.horizon(),
                    date: date.clone(),
                    region,
                    forecast: preds[u][k],
                })
                .map_err(epigraph::Error::from)?;
            }
        }
        out.info(format!("{name} h{}: {steps} days from {first}", c.horizon()));
    }
    let bytes = w.into_inner().map_err(|e| CliError::Usage(e.to_string()))?;
    let path = cfg.output_dir().join("forecast.csv");
    write_all(&[(path.clone(), String::from_utf8_lossy(&bytes).into_owned())])?;
    out.info(format!("forecast: {}", path.display()));
    Ok(())
}
