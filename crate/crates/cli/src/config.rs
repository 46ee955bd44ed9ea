//! Run configuration read from TOML, with command-line overrides applied on top.

use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use epigraph::data::RollingConfig;
use epigraph::eval::{BaselineKind, EvalSetup, DEFAULT_HORIZONS};
use epigraph::models::{ModelConfig, ModelKind, TemporalReadout};
use epigraph::train::TrainConfig;
use serde::Deserialize;

use crate::error::{CliError, CliResult};

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub cases: Option<PathBuf>,
    pub adjacency: Option<PathBuf>,
    /// One label per line; defaults to the labels of the adjacency file.
    pub regions: Option<PathBuf>,
    pub economic: Option<PathBuf>,
    pub mapping: Option<PathBuf>,
    pub bundle: Option<PathBuf>,
    pub output: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IngestSection {
    #[serde(default, deserialize_with = "date")]
    pub start: Option<NaiveDate>,
    #[serde(default, deserialize_with = "date")]
    pub end: Option<NaiveDate>,
}

/// Accepts a bare TOML date (`2022-03-01`) or a quoted one.
fn date<'de, D: serde::Deserializer<'de>>(d: D) -> Result<Option<NaiveDate>, D::Error> {
    use serde::de::Error as _;
    let text = match toml::Value::deserialize(d)? {
        toml::Value::String(s) => s,
        toml::Value::Datetime(dt) if dt.time.is_none() && dt.offset.is_none() => dt.to_string(),
        other => return Err(D::Error::custom(format!("expected a date, got {other}"))),
    };
    NaiveDate::parse_from_str(&text, "%Y-%m-%d").map(Some).map_err(D::Error::custom)
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub hidden: Option<usize>,
    pub mp_layers: Option<usize>,
    pub window: Option<usize>,
    pub context: Option<usize>,
    pub lstm_hidden: Option<usize>,
    pub cluster_sizes: Option<Vec<usize>>,
    pub heads: Option<usize>,
    pub dropout: Option<f64>,
    pub temporal_readout: Option<TemporalReadout>,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub max_epochs: Option<usize>,
    pub patience: Option<usize>,
    pub patience_start_epoch: Option<usize>,
    pub batch_size: Option<usize>,
    pub learning_rate: Option<f64>,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RollingSection {
    pub validation_len: Option<usize>,
    pub step: Option<usize>,
    pub origins: Option<usize>,
    pub baseline_window: Option<usize>,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForecastSection {
    pub steps: Option<usize>,
    pub lag: Option<usize>,
    pub seed_days: Option<usize>,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub horizons: Option<Vec<usize>>,
    pub models: Option<Vec<String>>,
    pub baselines: Option<Vec<String>>,
    pub threads: Option<usize>,
    #[serde(default)]
    pub paths: Paths,
    #[serde(default)]
    pub ingest: IngestSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub rolling: RollingSection,
    #[serde(default)]
    pub forecast: ForecastSection,
}

pub const DEFAULT_STEPS: usize = 30;
pub const MAX_LAG: usize = 9;

fn rebase(base: &Path, p: &mut Option<PathBuf>) {
    if let Some(path) = p {
        if path.is_relative() {
            *path = base.join(&*path);
        }
    }
}

impl RunConfig {
    /// Reads a config file; relative paths inside it resolve against its directory.
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let mut cfg: RunConfig = toml::from_str(&text).map_err(|e| CliError::Config {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        let p = &mut cfg.paths;
        for slot in [
            &mut p.cases,
            &mut p.adjacency,
            &mut p.regions,
            &mut p.economic,
            &mut p.mapping,
            &mut p.bundle,
            &mut p.output,
        ] {
            rebase(base, slot);
        }
        Ok(cfg)
    }

    pub fn output_dir(&self) -> PathBuf {
        self.paths.output.clone().unwrap_or_else(|| PathBuf::from("out"))
    }

    pub fn bundle_path(&self) -> PathBuf {
        self.paths.bundle.clone().unwrap_or_else(|| self.output_dir().join("bundle.json"))
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.output_dir().join("checkpoints")
    }

    pub fn horizons(&self) -> Vec<usize> {
        self.horizons.clone().unwrap_or_else(|| DEFAULT_HORIZONS.to_vec())
    }

    pub fn model_kinds(&self) -> CliResult<Vec<ModelKind>> {
        match &self.models {
            None => Ok(vec![ModelKind::MpnnLstm]),
            Some(names) => Ok(dedup(names.iter().map(|s| ModelKind::parse(s)).collect::<Result<_, _>>()?)),
        }
    }

    pub fn baseline_kinds(&self) -> CliResult<Vec<BaselineKind>> {
        match &self.baselines {
            None => Ok(BaselineKind::ALL.to_vec()),
            Some(names) => Ok(dedup(names.iter().map(|s| BaselineKind::parse(s)).collect::<Result<_, _>>()?)),
        }
    }

    /// Model template shared by every kind; each run fills in its own kind,
    /// horizon, seed and cluster sizes.
    pub fn model_template(&self) -> ModelConfig {
        let horizons = self.horizons();
        let mut m = ModelConfig::new(ModelKind::MpnnLstm, horizons.first().copied().unwrap_or(1));
        let s = &self.model;
        m.hidden = s.hidden.unwrap_or(m.hidden);
        m.mp_layers = s.mp_layers.unwrap_or(m.mp_layers);
        m.window = s.window.unwrap_or(m.window);
        m.context = s.context.unwrap_or(m.context);
        m.lstm_hidden = s.lstm_hidden.unwrap_or(m.lstm_hidden);
        m.cluster_sizes = s.cluster_sizes.clone().unwrap_or_default();
        m.heads = s.heads.unwrap_or(m.heads);
        m.dropout = s.dropout.unwrap_or(m.dropout);
        m.temporal_readout = s.temporal_readout.unwrap_or_default();
        m
    }

    pub fn train_config(&self) -> TrainConfig {
        let d = TrainConfig::default();
        let s = &self.train;
        TrainConfig {
            max_epochs: s.max_epochs.unwrap_or(d.max_epochs),
            patience: s.patience.unwrap_or(d.patience),
            patience_start_epoch: s.patience_start_epoch.unwrap_or(d.patience_start_epoch),
            batch_size: s.batch_size.unwrap_or(d.batch_size),
            learning_rate: s.learning_rate.unwrap_or(d.learning_rate),
            seed: self.seed.unwrap_or(0),
        }
    }

    pub fn eval_setup(&self) -> CliResult<EvalSetup> {
        let horizons = self.horizons();
        if horizons.is_empty() || horizons.contains(&0) {
            return Err(CliError::Usage("horizons must be a nonempty list of positive days".into()));
        }
        let tc = self.train_config();
        tc.validate()?;
        let mut setup = EvalSetup::new(self.model_template(), tc);
        setup.horizons = horizons;
        let d = RollingConfig::default();
        let r = &self.rolling;
        setup.rolling = RollingConfig {
            validation_len: r.validation_len.unwrap_or(d.validation_len),
            step: r.step.unwrap_or(d.step),
            origins: r.origins.unwrap_or(d.origins),
        };
        if let Some(w) = r.baseline_window {
            setup.baseline_window = w;
        }
        setup.threads = self.threads.unwrap_or(0);
        Ok(setup)
    }

    pub fn steps(&self) -> usize {
        self.forecast.steps.unwrap_or(DEFAULT_STEPS)
    }

    pub fn lag(&self) -> CliResult<Option<usize>> {
        match self.forecast.lag {
            Some(l) if l > MAX_LAG => Err(CliError::Usage(format!("truth lag {l} outside 0..={MAX_LAG}"))),
            l => Ok(l),
        }
    }
}

fn dedup<T: PartialEq>(items: Vec<T>) -> Vec<T> {
    let mut out = Vec::with_capacity(items.len());
    for i in items {
        if !out.contains(&i) {
            out.push(i);
        }
    }
    out
}
