//! Forecasting architectures: MPNN, MGNN, MPNN+LSTM, ATMGNN and a
//! bidirectional LSTM baseline.
//!
//! Every model maps a context of `T` feature windows (one `n × f` matrix per
//! timestep, `f = window + econ_features`) to one prediction per region. A
//! batch of `B` samples is processed at once by stacking the `B` graphs
//! row-wise into `(B·n) × f` matrices.

mod layers;
mod multires;

pub use layers::{linear_readout, mp_encode, mpnn_layer, MpLayer};
pub use multires::MultiresEncoder;

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{BatchStats, Tape, Var};
use crate::error::{Error, Result};
use crate::graph::RegionGraph;
use crate::params::{Bound, ParamStore};
use crate::temporal::{lstm_sequence, EncoderBlock, EncoderShape, LstmStack};
use crate::tensor::Tensor;

/// Momentum of the batch-norm running statistics.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Mpnn,
    Mgnn,
    MpnnLstm,
    Atmgnn,
    /// Two-layer bidirectional LSTM over each region's own history.
    Lstm,
}

impl ModelKind {
    pub const ALL: [ModelKind; 5] = [
        ModelKind::Mpnn,
        ModelKind::Mgnn,
        ModelKind::MpnnLstm,
        ModelKind::Atmgnn,
        ModelKind::Lstm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Mpnn => "MPNN",
            ModelKind::Mgnn => "MGNN",
            ModelKind::MpnnLstm => "MPNN_LSTM",
            ModelKind::Atmgnn => "ATMGNN",
            ModelKind::Lstm => "LSTM",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        let norm = s.to_ascii_uppercase().replace(['-', '+'], "_");
        Self::ALL
            .into_iter()
            .find(|k| k.name() == norm)
            .ok_or_else(|| Error::invalid(format!("unknown model kind `{s}`")))
    }

    pub fn is_multiresolution(self) -> bool {
        matches!(self, ModelKind::Mgnn | ModelKind::Atmgnn)
    }

    pub fn is_temporal(self) -> bool {
        matches!(self, ModelKind::MpnnLstm | ModelKind::Atmgnn)
    }
}

/// What the MPNN+LSTM readout sees from the recurrent state.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemporalReadout {
    /// Each region's own final hidden state.
    #[default]
    Node,
    /// The mean final hidden state over all regions, broadcast back.
    Graph,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub hidden: usize,
    pub mp_layers: usize,
    /// Days of case history per feature window.
    pub window: usize,
    /// Consecutive windows fed to the model; only temporal kinds use more than the last.
    pub context: usize,
    pub horizon: usize,
    pub lstm_hidden: usize,
    pub cluster_sizes: Vec<usize>,
    pub heads: usize,
    pub dropout: f64,
    /// Static per-region columns appended after the case window.
    pub econ_features: usize,
    #[serde(default)]
    pub temporal_readout: TemporalReadout,
    pub seed: u64,
}

impl ModelConfig {
    pub fn new(kind: ModelKind, horizon: usize) -> Self {
        ModelConfig {
            kind,
            hidden: 64,
            mp_layers: 2,
            window: 7,
            context: if kind.is_temporal() { 7 } else { 1 },
            horizon,
            lstm_hidden: 64,
            cluster_sizes: if kind.is_multiresolution() { vec![10, 5] } else { Vec::new() },
            heads: 1,
            dropout: 0.5,
            econ_features: 0,
            temporal_readout: TemporalReadout::Node,
            seed: 0,
        }
    }

    pub fn features(&self) -> usize {
        self.window + self.econ_features
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        let fail = |m: String| Err(Error::invalid(m));
        if self.horizon == 0 {
            return fail("horizon must be at least 1".into());
        }
        if self.window == 0 || self.context == 0 || self.hidden == 0 {
            return fail("window, context and hidden must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.kind != ModelKind::Lstm && self.mp_layers == 0 {
            return fail("graph models need at least one message-passing layer".into());
        }
        if !self.kind.is_multiresolution() && !self.cluster_sizes.is_empty() {
            return fail(format!("{} takes no cluster sizes", self.kind.name()));
        }
        if self.kind.is_multiresolution() {
            crate::graph::validate_cluster_sizes(n, &self.cluster_sizes)?;
        }
        if matches!(self.kind, ModelKind::MpnnLstm | ModelKind::Lstm) && self.lstm_hidden == 0 {
            return fail("lstm_hidden must be positive".into());
        }
        if self.kind == ModelKind::Atmgnn {
            EncoderShape {
                width: self.hidden,
                heads: self.heads,
                ff_hidden: 2 * self.hidden,
            }
            .head_dim()?;
        }
        Ok(())
    }

    fn encoder_shape(&self) -> EncoderShape {
        EncoderShape {
            width: self.hidden,
            heads: self.heads,
            ff_hidden: 2 * self.hidden,
        }
    }

    fn bilstm(&self) -> LstmStack {
        LstmStack {
            input: 1,
            hidden: self.lstm_hidden,
            layers: 2,
            bidirectional: true,
        }
    }

    fn readout_width(&self) -> usize {
        let f = self.features();
        let skip = f + self.mp_layers * self.hidden;
        match self.kind {
            ModelKind::Mpnn => skip,
            ModelKind::Mgnn => skip + self.cluster_sizes.len() * self.hidden,
            ModelKind::MpnnLstm => f + self.lstm_hidden,
            ModelKind::Atmgnn => skip + self.hidden,
            ModelKind::Lstm => self.bilstm().output_width(),
        }
    }
}

/// Per-call mode and side effects of a forward pass.
pub struct ForwardCtx<'r> {
    /// Batch statistics in the norms and active dropout.
    pub training: bool,
    /// Route cluster-assignment gradients through the softmax probabilities.
    pub straight_through: bool,
    /// Drives dropout and Gumbel sampling; assignments use `argmax` without one.
    pub rng: Option<&'r mut ChaCha8Rng>,
    stats: Vec<(String, BatchStats)>,
}

impl<'r> ForwardCtx<'r> {
    pub fn eval() -> Self {
        ForwardCtx {
            training: false,
            straight_through: false,
            rng: None,
            stats: Vec::new(),
        }
    }

    pub fn train(rng: Option<&'r mut ChaCha8Rng>) -> Self {
        ForwardCtx {
            training: true,
            straight_through: true,
            rng,
            stats: Vec::new(),
        }
    }

    pub(crate) fn record_stats(&mut self, name: &str, stats: BatchStats) {
        self.stats.push((name.to_string(), stats));
    }

    /// Batch statistics gathered in training mode, in call order.
    pub fn stats(&self) -> &[(String, BatchStats)] {
        &self.stats
    }

    pub(crate) fn dropout<'t>(&mut self, x: Var<'t>, rate: f64) -> Result<Var<'t>> {
        if !self.training || rate == 0.0 {
            return Ok(x);
        }
        match self.rng.as_deref_mut() {
            Some(rng) => x.dropout(rate, true, rng),
            None => Err(Error::invalid("training-mode dropout needs a random generator")),
        }
    }
}

/// A forecasting model: configuration, graph and parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    config: ModelConfig,
    graph: RegionGraph,
    params: ParamStore,
    /// Case columns are divided by this before the forward pass and
    /// predictions multiplied by it afterwards.
    scale: f64,
}

impl Model {
    /// Fresh parameters drawn from `config.seed`.
    pub fn new(config: ModelConfig, graph: RegionGraph) -> Result<Self> {
        config.validate(graph.n())?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        let f = config.features();
        let hid = config.hidden;
        if config.kind != ModelKind::Lstm {
            for k in 0..config.mp_layers {
                let input = if k == 0 { f } else { hid };
                layers::init_mp_layer(&mut params, &format!("mp.l{k}"), input, hid, &mut rng);
            }
        }
        match config.kind {
            ModelKind::Mpnn => {}
            ModelKind::Mgnn | ModelKind::Atmgnn => {
                MultiresEncoder::init(&mut params, &config.cluster_sizes, hid, &mut rng);
                if config.kind == ModelKind::Atmgnn {
                    let shape = config.encoder_shape();
                    shape.init(&mut params, "atm.level", &mut rng)?;
                    shape.init(&mut params, "atm.time", &mut rng)?;
                }
            }
            ModelKind::MpnnLstm => {
                let stack = LstmStack {
                    input: config.mp_layers * hid,
                    hidden: config.lstm_hidden,
                    layers: 1,
                    bidirectional: false,
                };
                stack.init(&mut params, "lstm", &mut rng);
            }
            ModelKind::Lstm => config.bilstm().init(&mut params, "lstm", &mut rng),
        }
        layers::init_linear(&mut params, "readout", 1, config.readout_width(), &mut rng);
        params.insert("readout.b", Tensor::zeros(&[1, 1]));
        Ok(Model {
            config,
            graph,
            params,
            scale: 1.0,
        })
    }

    pub fn from_parts(config: ModelConfig, graph: RegionGraph, params: ParamStore, scale: f64) -> Result<Self> {
        config.validate(graph.n())?;
        let fresh = Model::new(config.clone(), graph.clone())?;
        for (name, t) in fresh.params.params() {
            match params.get(name) {
                Some(p) if p.shape() == t.shape() => {}
                _ => return Err(Error::invalid(format!("parameter `{name}` missing or misshapen"))),
            }
        }
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::invalid(format!("feature scale {scale} must be positive")));
        }
        Ok(Model {
            config,
            graph,
            params,
            scale,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn graph(&self) -> &RegionGraph {
        &self.graph
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn set_scale(&mut self, scale: f64) -> Result<()> {
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::invalid(format!("feature scale {scale} must be positive")));
        }
        self.scale = scale;
        Ok(())
    }

    /// Stacks `B` samples (each a context of `n × f` windows in raw units)
    /// into scaled `(B·n) × f` matrices, one per timestep.
    pub fn stack_inputs(&self, samples: &[&[Tensor]]) -> Result<Vec<Tensor>> {
        let (n, f, t_len) = (self.graph.n(), self.config.features(), self.config.context);
        if samples.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let mut steps = vec![Vec::with_capacity(samples.len() * n * f); t_len];
        for s in samples {
            if s.len() != t_len {
                return Err(Error::shape("model input", format!("{t_len} windows"), s.len()));
            }
            for (t, w) in s.iter().enumerate() {
                if w.shape() != [n, f] {
                    return Err(Error::shape("model input", format!("{n} × {f}"), format!("{:?}", w.shape())));
                }
                for i in 0..n {
                    let row = w.row_slice(i);
                    steps[t].extend(row[..self.config.window].iter().map(|v| v / self.scale));
                    steps[t].extend_from_slice(&row[self.config.window..]);
                }
            }
        }
        steps
            .into_iter()
            .map(|d| Tensor::new(vec![samples.len() * n, f], d))
            .collect()
    }

    /// Scaled `(B·n) × 1` predictions before clamping.
    pub fn forward<'t>(
        &self,
        ctx: &mut ForwardCtx<'_>,
        bound: &Bound<'t>,
        tape: &'t Tape,
        steps: &[Tensor],
    ) -> Result<Var<'t>> {
        let n = self.graph.n();
        let Some(last) = steps.last() else {
            return Err(Error::invalid("no input windows"));
        };
        let rows = last.rows();
        if rows % n != 0 || rows == 0 {
            return Err(Error::shape("forward", format!("multiple of {n} rows"), rows));
        }
        let blocks = rows / n;
        let cfg = &self.config;
        let adj_norm = tape.constant(self.graph.normalized().clone());
        let mp: Vec<MpLayer<'t>> = if cfg.kind == ModelKind::Lstm {
            Vec::new()
        } else {
            (0..cfg.mp_layers)
                .map(|k| MpLayer::bind(bound, &self.params, &format!("mp.l{k}")))
                .collect::<Result<_>>()?
        };
        let x_last = tape.constant(last.clone());
        let features = match cfg.kind {
            ModelKind::Mpnn => {
                let hs = mp_encode(ctx, x_last, adj_norm, &mp, cfg.dropout, blocks)?;
                skip_concat(tape, x_last, &hs)?
            }
            ModelKind::Mgnn => {
                let hs = mp_encode(ctx, x_last, adj_norm, &mp, cfg.dropout, blocks)?;
                let mut parts = vec![x_last];
                parts.extend(&hs);
                if !cfg.cluster_sizes.is_empty() {
                    let enc = MultiresEncoder::bind(bound, &cfg.cluster_sizes)?;
                    let finest = *hs.last().expect("at least one layer");
                    let mut per_sample = Vec::with_capacity(blocks);
                    for b in 0..blocks {
                        let h = finest.slice_rows(b * n, n)?;
                        let latents = enc.latents(ctx, &self.graph, h, &cfg.cluster_sizes)?;
                        let coarse = tape.concat_cols(&latents[1..])?;
                        per_sample.push(coarse.repeat_rows(n)?);
                    }
                    parts.push(tape.concat_rows(&per_sample)?);
                }
                tape.concat_cols(&parts)?
            }
            ModelKind::MpnnLstm => {
                let mut seq = Vec::with_capacity(steps.len());
                for s in steps {
                    let hs = mp_encode(ctx, tape.constant(s.clone()), adj_norm, &mp, cfg.dropout, blocks)?;
                    seq.push(if hs.len() == 1 { hs[0] } else { tape.concat_cols(&hs)? });
                }
                let stack = LstmStack {
                    input: cfg.mp_layers * cfg.hidden,
                    hidden: cfg.lstm_hidden,
                    layers: 1,
                    bidirectional: false,
                };
                let outs = lstm_sequence(bound, "lstm", &stack, &seq)?;
                let h_last = *outs.last().expect("nonempty sequence");
                let h_last = match cfg.temporal_readout {
                    TemporalReadout::Node => h_last,
                    TemporalReadout::Graph => {
                        let pool = Tensor::from_fn(blocks, blocks * n, |b, r| if r / n == b { 1.0 / n as f64 } else { 0.0 });
                        let expand = Tensor::from_fn(blocks * n, blocks, |r, b| if r / n == b { 1.0 } else { 0.0 });
                        tape.constant(expand).matmul(tape.constant(pool).matmul(h_last)?)?
                    }
                };
                tape.concat_cols(&[h_last, x_last])?
            }
            ModelKind::Atmgnn => self.atmgnn_features(ctx, bound, tape, steps, adj_norm, &mp, blocks)?,
            ModelKind::Lstm => {
                let seq: Vec<Var<'t>> = (0..cfg.window)
                    .map(|d| tape.constant(Tensor::from_fn(rows, 1, |r, _| last.get(r, d))))
                    .collect();
                let outs = lstm_sequence(bound, "lstm", &cfg.bilstm(), &seq)?;
                *outs.last().expect("nonempty sequence")
            }
        };
        linear_readout(features, bound.get("readout.W")?, bound.get("readout.b")?)
    }

    #[allow(clippy::too_many_arguments)]
    fn atmgnn_features<'t>(
        &self,
        ctx: &mut ForwardCtx<'_>,
        bound: &Bound<'t>,
        tape: &'t Tape,
        steps: &[Tensor],
        adj_norm: Var<'t>,
        mp: &[MpLayer<'t>],
        blocks: usize,
    ) -> Result<Var<'t>> {
        let cfg = &self.config;
        let n = self.graph.n();
        let shape = cfg.encoder_shape();
        let level_block = EncoderBlock::bind(bound, "atm.level", &shape)?;
        let time_block = EncoderBlock::bind(bound, "atm.time", &shape)?;
        let enc = MultiresEncoder::bind(bound, &cfg.cluster_sizes)?;
        // per sample, one encoded latent-set vector per timestep
        let mut per_sample: Vec<Vec<Var<'t>>> = vec![Vec::with_capacity(steps.len()); blocks];
        let mut last_skip = None;
        for (t, s) in steps.iter().enumerate() {
            let x = tape.constant(s.clone());
            let hs = mp_encode(ctx, x, adj_norm, mp, cfg.dropout, blocks)?;
            let finest = *hs.last().expect("at least one layer");
            for (b, seq) in per_sample.iter_mut().enumerate() {
                let h = finest.slice_rows(b * n, n)?;
                let latents = enc.latents(ctx, &self.graph, h, &cfg.cluster_sizes)?;
                let set = tape.concat_rows(&latents)?;
                let encoded = crate::temporal::transformer_encode(set, &level_block, false)?;
                seq.push(encoded.mean_rows()?);
            }
            if t + 1 == steps.len() {
                last_skip = Some(skip_concat(tape, x, &hs)?);
            }
        }
        let mut temporal = Vec::with_capacity(blocks);
        for seq in per_sample {
            let len = seq.len();
            let encoded = crate::temporal::transformer_encode(tape.concat_rows(&seq)?, &time_block, true)?;
            temporal.push(encoded.slice_rows(len - 1, 1)?.repeat_rows(n)?);
        }
        let skip = last_skip.expect("at least one timestep");
        tape.concat_cols(&[skip, tape.concat_rows(&temporal)?])
    }

    /// Evaluation-mode predictions in case units, clamped at zero, for one
    /// context of `n × f` windows in raw units.
    pub fn predict(&self, context: &[Tensor]) -> Result<Vec<f64>> {
        Ok(self.predict_batch(&[context])?.pop().expect("one sample"))
    }

    pub fn predict_batch(&self, samples: &[&[Tensor]]) -> Result<Vec<Vec<f64>>> {
        let steps = self.stack_inputs(samples)?;
        let tape = Tape::new();
        let bound = self.params.bind(&tape, false);
        let out = self.forward(&mut ForwardCtx::eval(), &bound, &tape, &steps)?.value();
        let n = self.graph.n();
        Ok(out
            .data()
            .chunks(n)
            .map(|c| c.iter().map(|v| (v * self.scale).max(0.0)).collect())
            .collect())
    }

    /// Folds training-mode batch statistics into the running averages.
    pub fn update_running_stats(&mut self, stats: &[(String, BatchStats)]) -> Result<()> {
        for (name, s) in stats {
            for (field, values) in [("mean", &s.mean), ("var", &s.var)] {
                let buf = self
                    .params
                    .buffer_mut(&format!("{name}.bn.{field}"))
                    .ok_or_else(|| Error::invalid(format!("missing buffer `{name}.bn.{field}`")))?;
                for (r, v) in buf.data_mut().iter_mut().zip(values) {
                    *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v;
                }
            }
        }
        Ok(())
    }

    /// Named parameter map in a form suitable for [`Bound::from_vars`].
    pub fn param_names(&self) -> Vec<String> {
        self.params.params().map(|(k, _)| k.clone()).collect()
    }
}

fn skip_concat<'t>(tape: &'t Tape, x: Var<'t>, hs: &[Var<'t>]) -> Result<Var<'t>> {
    let mut parts = vec![x];
    parts.extend_from_slice(hs);
    tape.concat_cols(&parts)
}

/// Mean squared error over all entries.
pub fn mse_loss<'t>(pred: Var<'t>, target: Var<'t>) -> Result<Var<'t>> {
    if pred.shape() != target.shape() {
        return Err(Error::shape("mse_loss", format!("{:?}", pred.shape()), format!("{:?}", target.shape())));
    }
    pred.sub(target)?.square()?.mean()
}

/// Binds `names` to the given vars, in order.
pub fn bind_vars<'t>(names: &[String], vars: &[Var<'t>]) -> Bound<'t> {
    Bound::from_vars(names.iter().cloned().zip(vars.iter().copied()).collect::<BTreeMap<_, _>>())
}
