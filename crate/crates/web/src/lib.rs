//! Browser demo over the 20-region border graph. Each exported function
//! returns a JSON string for the page script to draw.

use epigraph::autodiff::Tape;
use epigraph::data::{build_windows, rolling_splits, RollingConfig, Sample, WindowSpec};
use epigraph::eval::BaselineKind;
use epigraph::graph::{coarsen_adjacency, sample_assignment};
use epigraph::models::{ModelConfig, ModelKind};
use epigraph::synthetic::{dhb_graph, Diffusion};
use epigraph::train::{fit, TrainConfig, TrainingWindow};
use epigraph::{Error, Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use wasm_bindgen::prelude::*;

const WINDOW: usize = 7;

#[derive(Debug, Serialize)]
pub struct Curve {
    pub name: &'static str,
    /// Per region, per day; `None` where the forecaster has too little history.
    pub values: Vec<Vec<Option<f64>>>,
    pub mae: f64,
}

#[derive(Debug, Serialize)]
pub struct DiffusionView {
    pub labels: Vec<String>,
    pub horizon: usize,
    pub truth: Vec<Vec<f64>>,
    pub forecasts: Vec<Curve>,
}

/// Simulates planted diffusion and the baselines' `horizon`-day forecasts of it.
pub fn diffusion_view(seed: u64, days: usize, noise_mean: f64, horizon: usize) -> Result<DiffusionView> {
    // The pooled regression needs one full window-target pair before its origin.
    let first_origin = WINDOW - 1 + horizon;
    if horizon == 0 || days <= first_origin + horizon {
        return Err(Error::InvalidArgument(format!(
            "need horizon ≥ 1 and more than {} days",
            first_origin + horizon
        )));
    }
    let g = dhb_graph();
    let truth = Diffusion {
        days,
        noise_mean,
        seed,
        ..Diffusion::default()
    }
    .simulate(&g);
    let n = g.n();
    let kinds = [
        BaselineKind::Avg,
        BaselineKind::AvgWindow,
        BaselineKind::LastDay,
        BaselineKind::LinReg,
    ];
    let mut forecasts = Vec::new();
    for kind in kinds {
        let mut values = vec![vec![None; days]; n];
        let (mut err, mut count) = (0.0, 0.0);
        for origin in first_origin..days - horizon {
            let pred = kind.predict(&truth, origin, horizon, WINDOW)?;
            for (u, p) in pred.into_iter().enumerate() {
                values[u][origin + horizon] = Some(p);
                err += (p - truth[u][origin + horizon]).abs();
                count += 1.0;
            }
        }
        forecasts.push(Curve {
            name: kind.name(),
            values,
            mae: err / count,
        });
    }
    Ok(DiffusionView {
        labels: g.labels().to_vec(),
        horizon,
        truth,
        forecasts,
    })
}

#[derive(Debug, Serialize)]
pub struct CoarseningView {
    pub labels: Vec<String>,
    pub borders: Vec<(usize, usize)>,
    /// Cluster of each region.
    pub assignment: Vec<usize>,
    pub sizes: Vec<usize>,
    /// Softmax probability of each region's sampled cluster.
    pub confidence: Vec<f64>,
    pub coarse_adjacency: Vec<Vec<f64>>,
}

/// Draws one Gumbel-max clustering of the border graph into `clusters`
/// groups. Logits are random cluster affinities smoothed twice over the
/// normalized adjacency, so neighbours lean the same way; `temperature`
/// scales them down and lets the noise win more often.
pub fn coarsening_view(seed: u64, clusters: usize, temperature: f64) -> Result<CoarseningView> {
    let g = dhb_graph();
    let n = g.n();
    if clusters == 0 || clusters > n || !temperature.is_finite() || temperature <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "need 1 ≤ clusters ≤ {n} and a positive temperature"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let raw = Tensor::from_fn(n, clusters, |_, _| rng.random_range(-4.0..4.0));
    let a = g.normalized();
    let smooth = a.matmul(&a.matmul(&raw)?)?;
    let logits = smooth.map(|v| v / temperature);

    let tape = Tape::new();
    let sampled = sample_assignment(tape.constant(logits), Some(&mut rng), false)?;
    let partition = sampled.hard.partition();
    let assignment = partition.assignment().to_vec();
    let confidence = assignment
        .iter()
        .enumerate()
        .map(|(u, &c)| sampled.probabilities.get(u, c))
        .collect();
    let coarse = coarsen_adjacency(g.adjacency(), &partition)?;
    let coarse_adjacency = (0..clusters)
        .map(|i| (0..clusters).map(|j| coarse.get(i, j)).collect())
        .collect();
    Ok(CoarseningView {
        labels: g.labels().to_vec(),
        borders: g.border_pairs(),
        sizes: partition.cluster_sizes(),
        assignment,
        confidence,
        coarse_adjacency,
    })
}

#[derive(Debug, Serialize)]
pub struct TrainingView {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub best_epoch: usize,
    pub horizon: usize,
    /// Test-day MAE of the selected model and of the windowed average.
    pub model_mae: f64,
    pub avg_window_mae: f64,
}

/// Trains an MPNN on planted diffusion at the last rolling origin and
/// reports its loss curves and test error.
pub fn training_view(seed: u64, epochs: usize, hidden: usize, horizon: usize) -> Result<TrainingView> {
    let g = dhb_graph();
    let series = Diffusion {
        seed,
        ..Diffusion::default()
    }
    .simulate(&g);
    let spec = WindowSpec {
        window: WINDOW,
        horizon,
        context: 1,
    };
    let samples = build_windows(&series, None, &spec)?;
    let rolling = RollingConfig {
        origins: 1,
        ..RollingConfig::default()
    };
    let split = rolling_splits(series[0].len(), horizon, spec.first_anchor() + horizon, &rolling)?[0];
    let (tr, va, te) = split.partition(&samples);
    let pick = |ix: &[usize]| -> Vec<&Sample> { ix.iter().map(|&i| &samples[i]).collect() };
    let test = &samples[te[0]];

    let mut cfg = ModelConfig::new(ModelKind::Mpnn, horizon);
    cfg.hidden = hidden;
    cfg.seed = seed;
    let tc = TrainConfig {
        max_epochs: epochs,
        patience_start_epoch: epochs.min(TrainConfig::default().patience_start_epoch),
        seed,
        ..TrainConfig::default()
    };
    let window = TrainingWindow {
        origin: split.origin,
        train_end: split.train_end,
    };
    let (ckpt, history) = fit(&cfg, &g, &pick(&tr), &pick(&va), &tc, window)?;
    let pred = ckpt.model()?.predict(&test.inputs)?;
    let base = BaselineKind::AvgWindow.predict(&series, split.origin, horizon, WINDOW)?;
    let mae = |p: &[f64]| p.iter().zip(&test.target).map(|(a, b)| (a - b).abs()).sum::<f64>() / p.len() as f64;
    Ok(TrainingView {
        model_mae: mae(&pred),
        avg_window_mae: mae(&base),
        train_loss: history.train_loss,
        val_loss: history.val_loss,
        best_epoch: history.best_epoch,
        horizon,
    })
}

fn to_js<T: Serialize>(r: Result<T>) -> std::result::Result<String, JsError> {
    let v = r.map_err(|e| JsError::new(&e.to_string()))?;
    serde_json::to_string(&v).map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen]
pub fn simulate(seed: u32, days: u32, noise_mean: f64, horizon: u32) -> std::result::Result<String, JsError> {
    to_js(diffusion_view(seed.into(), days as usize, noise_mean, horizon as usize))
}

#[wasm_bindgen]
pub fn coarsen(seed: u32, clusters: u32, temperature: f64) -> std::result::Result<String, JsError> {
    to_js(coarsening_view(seed.into(), clusters as usize, temperature))
}

#[wasm_bindgen]
pub fn train(seed: u32, epochs: u32, hidden: u32, horizon: u32) -> std::result::Result<String, JsError> {
    to_js(training_view(seed.into(), epochs as usize, hidden as usize, horizon as usize))
}
