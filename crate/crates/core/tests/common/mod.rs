//! Suites shared by the integration tests and the acceptance target.
#![allow(dead_code)]

use chrono::NaiveDate;
use epigraph::autodiff::{BatchStats, Tape, Var};
use epigraph::data::{CaseMatrix, DatasetBundle};
use epigraph::eval::{evaluate_horizons, BaselineKind, EvalReport, EvalSetup, Forecaster};
use epigraph::gradcheck::check_gradients;
use epigraph::graph::{coarsen_adjacency, coarsen_with_assignment, AssignmentMatrix, Partition, RegionGraph};
use epigraph::models::{bind_vars, mpnn_layer, mse_loss, ForwardCtx, Model, ModelConfig, ModelKind, MpLayer};
use epigraph::params::{uniform, ParamStore};
use epigraph::synthetic::{dhb_graph, random_graph, Diffusion};
use epigraph::temporal::{
    init_lstm_cell, lstm_cell_step, multi_head, self_attention, transformer_encode, EncoderBlock, EncoderShape,
    HeadParams, LstmCell, LstmState,
};
use epigraph::train::TrainConfig;
use epigraph::{Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const OP_TOLERANCE: f64 = 1e-4;
pub const MODEL_TOLERANCE: f64 = 1e-3;
const STEP: f64 = 1e-5;

pub fn rand_t(rows: usize, cols: usize, seed: u64) -> Tensor {
    uniform(rows, cols, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Entries bounded away from zero so relu kinks sit far from the probe.
fn away_from_zero(rows: usize, cols: usize, seed: u64) -> Tensor {
    rand_t(rows, cols, seed).map(|v| if v >= 0.0 { v + 0.2 } else { v - 0.2 })
}

fn scalarize<'t>(y: Var<'t>, seed: u64) -> Result<Var<'t>> {
    // A random projection keeps every output entry in play.
    let s = y.shape();
    let w = rand_t(s[0], s[1], seed ^ 0xabc);
    y.mul_const(w)?.sum()
}

pub struct GradResult {
    pub name: String,
    pub error: f64,
    pub tolerance: f64,
}

impl GradResult {
    pub fn ok(&self) -> bool {
        self.error <= self.tolerance
    }
}

fn record(
    out: &mut Vec<GradResult>,
    name: &str,
    tolerance: f64,
    inputs: &[Tensor],
    f: impl for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
) {
    let error = match check_gradients(inputs, STEP, f) {
        Ok(g) => g.max_relative_error(),
        Err(e) => {
            eprintln!("{name}: {e}");
            f64::INFINITY
        }
    };
    out.push(GradResult {
        name: name.to_string(),
        error,
        tolerance,
    });
}

fn ring(n: usize) -> RegionGraph {
    let pairs: Vec<_> = (0..n).map(|i| (i, (i + 1) % n)).collect();
    RegionGraph::new((0..n).map(|i| format!("r{i}")).collect(), &pairs).unwrap()
}

/// Central-difference checks of every differentiable operation.
pub fn op_gradients() -> Vec<GradResult> {
    let mut out = Vec::new();
    let t = OP_TOLERANCE;
    let (a, b) = (rand_t(3, 4, 1), rand_t(4, 2, 2));
    record(&mut out, "matmul", t, &[a.clone(), b.clone()], |_, v| scalarize(v[0].matmul(v[1])?, 1));
    record(&mut out, "matmul_nt", t, &[a.clone(), rand_t(5, 4, 3)], |_, v| scalarize(v[0].matmul_nt(v[1])?, 2));
    let c = rand_t(3, 4, 4);
    record(&mut out, "add", t, &[a.clone(), c.clone()], |_, v| scalarize(v[0].add(v[1])?, 3));
    record(&mut out, "sub", t, &[a.clone(), c.clone()], |_, v| scalarize(v[0].sub(v[1])?, 4));
    record(&mut out, "hadamard", t, &[a.clone(), c.clone()], |_, v| scalarize(v[0].hadamard(v[1])?, 5));
    record(&mut out, "add_row", t, &[a.clone(), rand_t(1, 4, 5)], |_, v| scalarize(v[0].add_row(v[1])?, 6));
    record(&mut out, "scale", t, std::slice::from_ref(&a), |_, v| scalarize(v[0].scale(-1.7)?, 7));
    let k = rand_t(3, 4, 6);
    record(&mut out, "add_const", t, std::slice::from_ref(&a), move |_, v| scalarize(v[0].add_const(&k)?, 8));
    let k = rand_t(3, 4, 7);
    record(&mut out, "mul_const", t, std::slice::from_ref(&a), move |_, v| scalarize(v[0].mul_const(k.clone())?, 9));
    record(&mut out, "scale_rows", t, std::slice::from_ref(&a), |_, v| scalarize(v[0].scale_rows(vec![0.5, -2.0, 3.0])?, 10));
    record(&mut out, "sigmoid", t, std::slice::from_ref(&a), |_, v| scalarize(v[0].sigmoid()?, 11));
    record(&mut out, "tanh", t, std::slice::from_ref(&a), |_, v| scalarize(v[0].tanh()?, 12));
    record(&mut out, "relu", t, &[away_from_zero(3, 4, 8)], |_, v| scalarize(v[0].relu()?, 13));
    record(&mut out, "square", t, std::slice::from_ref(&a), |_, v| scalarize(v[0].square()?, 14));
    record(&mut out, "softmax_rows", t, std::slice::from_ref(&a), |_, v| scalarize(v[0].softmax(1)?, 15));
    record(&mut out, "softmax_cols", t, std::slice::from_ref(&a), |_, v| scalarize(v[0].softmax(0)?, 16));
    record(&mut out, "transpose", t, std::slice::from_ref(&a), |_, v| scalarize(v[0].transpose()?, 17));
    record(&mut out, "slice_rows", t, std::slice::from_ref(&a), |_, v| scalarize(v[0].slice_rows(1, 2)?, 18));
    record(&mut out, "slice_cols", t, std::slice::from_ref(&a), |_, v| scalarize(v[0].slice_cols(1, 2)?, 19));
    record(&mut out, "sum", t, std::slice::from_ref(&a), |_, v| v[0].square()?.sum());
    record(&mut out, "mean", t, std::slice::from_ref(&a), |_, v| v[0].square()?.mean());
    record(&mut out, "mean_rows", t, std::slice::from_ref(&a), |_, v| scalarize(v[0].mean_rows()?, 20));
    record(&mut out, "repeat_rows", t, &[rand_t(1, 4, 9)], |_, v| scalarize(v[0].repeat_rows(3)?, 21));
    record(&mut out, "concat_cols", t, &[a.clone(), rand_t(3, 2, 10)], |tape, v| {
        scalarize(tape.concat_cols(&[v[0], v[1]])?, 22)
    });
    record(&mut out, "concat_rows", t, &[a.clone(), rand_t(2, 4, 11)], |tape, v| {
        scalarize(tape.concat_rows(&[v[0], v[1]])?, 23)
    });
    record(&mut out, "block_left_matmul", t, &[rand_t(3, 3, 12), rand_t(6, 2, 13)], |_, v| {
        scalarize(v[1].block_left_matmul(v[0], 2)?, 24)
    });
    let pos = rand_t(4, 4, 14).map(|x| x.abs() + 0.5);
    let sym = pos.add(&pos.transpose().unwrap()).unwrap();
    record(&mut out, "sym_normalize", t, &[sym], |_, v| scalarize(v[0].sym_normalize()?, 25));
    record(&mut out, "dropout", t, std::slice::from_ref(&a), |_, v| {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        scalarize(v[0].dropout(0.4, true, &mut rng)?, 26)
    });
    let (g, be) = (rand_t(1, 4, 15), rand_t(1, 4, 16));
    record(&mut out, "batch_norm_batch_stats", t, &[rand_t(5, 4, 17), g.clone(), be.clone()], |_, v| {
        scalarize(v[0].batch_norm(v[1], v[2], None)?.0, 27)
    });
    let running = BatchStats {
        mean: vec![0.1, -0.2, 0.3, 0.0],
        var: vec![1.5, 0.7, 2.0, 1.0],
    };
    record(&mut out, "batch_norm_running_stats", t, &[rand_t(5, 4, 18), g.clone(), be.clone()], move |_, v| {
        scalarize(v[0].batch_norm(v[1], v[2], Some(&running))?.0, 28)
    });
    record(&mut out, "layer_norm", t, &[rand_t(3, 4, 19), g, be], |_, v| scalarize(v[0].layer_norm(v[1], v[2])?, 29));
    record(&mut out, "mse_loss", t, &[rand_t(6, 1, 20), rand_t(6, 1, 21)], |_, v| mse_loss(v[0], v[1]));

    // Coarsening is differentiable in the adjacency for a fixed assignment.
    let p = AssignmentMatrix::from_indices(2, &[0, 1, 0, 1, 1]).unwrap().matrix().clone();
    let adj = rand_t(5, 5, 22);
    record(&mut out, "coarsen_with_assignment", t, &[adj], move |tape, v| {
        scalarize(coarsen_with_assignment(v[0], tape.constant(p.clone()))?, 30)
    });
    // and, through PᵀAP, in a relaxed assignment.
    record(&mut out, "coarsen_soft_assignment", t, &[rand_t(5, 5, 23), rand_t(5, 2, 24)], |_, v| {
        scalarize(v[1].transpose()?.matmul(v[0].matmul(v[1])?)?, 31)
    });

    // LSTM cell: input, state and all twelve parameters.
    let mut store = ParamStore::new();
    init_lstm_cell(&mut store, "cell", 3, 4, &mut ChaCha8Rng::seed_from_u64(25));
    let names: Vec<String> = store.params().map(|(k, _)| k.clone()).collect();
    let mut inputs: Vec<Tensor> = store.params().map(|(_, v)| v.clone()).collect();
    inputs.extend([rand_t(2, 3, 26), rand_t(2, 4, 27), rand_t(2, 4, 28)]);
    let np = names.len();
    record(&mut out, "lstm_cell", t, &inputs, move |_, v| {
        let bound = bind_vars(&names, &v[..np]);
        let cell = LstmCell::bind(&bound, "cell")?;
        let state = LstmState { h: v[np + 1], c: v[np + 2] };
        let (next, _) = lstm_cell_step(v[np], state, &cell)?;
        let s = scalarize(next.h, 32)?;
        s.add(scalarize(next.c, 33)?)
    });

    // Attention: single head, two heads with output projection, full block.
    let heads_in = [rand_t(4, 3, 29), rand_t(2, 3, 30), rand_t(2, 3, 31), rand_t(2, 3, 32)];
    record(&mut out, "self_attention", t, &heads_in, |_, v| {
        let (o, _) = self_attention(v[0], &HeadParams { w_q: v[1], w_k: v[2], w_v: v[3] })?;
        scalarize(o, 34)
    });
    let mut mh = vec![rand_t(4, 4, 33)];
    for s in 0..6 {
        mh.push(rand_t(2, 4, 34 + s));
    }
    mh.push(rand_t(4, 4, 40));
    record(&mut out, "multi_head", t, &mh, |_, v| {
        let heads = [
            HeadParams { w_q: v[1], w_k: v[2], w_v: v[3] },
            HeadParams { w_q: v[4], w_k: v[5], w_v: v[6] },
        ];
        scalarize(multi_head(v[0], &heads, v[7])?, 35)
    });
    let shape = EncoderShape {
        width: 4,
        heads: 2,
        ff_hidden: 8,
    };
    let mut store = ParamStore::new();
    shape.init(&mut store, "enc", &mut ChaCha8Rng::seed_from_u64(41)).unwrap();
    let names: Vec<String> = store.params().map(|(k, _)| k.clone()).collect();
    let mut inputs: Vec<Tensor> = store.params().map(|(_, v)| v.clone()).collect();
    // Perturb the identity output projection and the zero biases so every
    // parameter is exercised away from its initial symmetry.
    for (i, n) in names.iter().enumerate() {
        if n.ends_with("W_O") || n.ends_with(".b1") || n.ends_with(".b2") || n.ends_with("beta") {
            let noise = rand_t(inputs[i].rows(), inputs[i].cols(), 42 + i as u64).map(|x| 0.3 * x);
            inputs[i] = inputs[i].add(&noise).unwrap();
        }
    }
    inputs.push(rand_t(3, 4, 43));
    let np = names.len();
    record(&mut out, "transformer_encoder", t, &inputs, move |_, v| {
        let bound = bind_vars(&names, &v[..np]);
        let block = EncoderBlock::bind(&bound, "enc", &shape)?;
        scalarize(transformer_encode(v[np], &block, true)?, 36)
    });

    // Message-passing layer in training mode (batch statistics).
    let graph = ring(4);
    let adj = graph.normalized().clone();
    let mp_inputs = [rand_t(8, 3, 44), rand_t(4, 3, 45), rand_t(1, 4, 46).map(|x| x + 1.5), rand_t(1, 4, 47)];
    record(&mut out, "mpnn_layer", t, &mp_inputs, move |tape, v| {
        let layer = MpLayer {
            name: "mp".into(),
            w: v[1],
            gamma: v[2],
            beta: v[3],
            running: BatchStats {
                mean: vec![0.0; 4],
                var: vec![1.0; 4],
            },
        };
        let mut ctx = ForwardCtx::train(None);
        scalarize(mpnn_layer(&mut ctx, v[0], tape.constant(adj.clone()), &layer, 0.0, 2)?, 37)
    });
    out
}

/// Micro-scale configuration: n = 4, window 3, three timesteps, hidden 4.
pub fn micro_config(kind: ModelKind) -> ModelConfig {
    let mut c = ModelConfig::new(kind, 2);
    c.hidden = 4;
    c.window = 3;
    c.context = if kind.is_temporal() { 3 } else { 1 };
    c.lstm_hidden = 4;
    c.cluster_sizes = if kind.is_multiresolution() { vec![2] } else { Vec::new() };
    c.dropout = 0.0;
    c.seed = 7;
    c
}

/// End-to-end gradient checks of every model in evaluation mode and in
/// training mode with batch statistics, with straight-through routing off.
pub fn model_gradients() -> Vec<GradResult> {
    let mut out = Vec::new();
    let graph = ring(4);
    for kind in ModelKind::ALL {
        let cfg = micro_config(kind);
        let model = Model::new(cfg.clone(), graph.clone()).unwrap();
        let names = model.param_names();
        // Jitter away from the initial zeros so no relu sits exactly on its kink.
        let inputs: Vec<Tensor> = model
            .params()
            .params()
            .enumerate()
            .map(|(i, (_, v))| v.add(&rand_t(v.rows(), v.cols(), 900 + i as u64).map(|x| 0.1 * x)).unwrap())
            .collect();
        let context: Vec<Tensor> = (0..cfg.context).map(|s| rand_t(4, 3, 50 + s as u64).map(f64::abs)).collect();
        let steps = model.stack_inputs(&[&context, &context]).unwrap();
        let target = rand_t(8, 1, 60);
        for training in [false, true] {
            let (m, n, s, tg) = (model.clone(), names.clone(), steps.clone(), target.clone());
            let label = format!("{} ({})", kind.name(), if training { "train" } else { "eval" });
            record(&mut out, &label, MODEL_TOLERANCE, &inputs, move |tape, v| {
                let bound = bind_vars(&n, v);
                let mut ctx = if training { ForwardCtx::train(None) } else { ForwardCtx::eval() };
                ctx.straight_through = false;
                let pred = m.forward(&mut ctx, &bound, tape, &s)?;
                mse_loss(pred, tape.constant(tg.clone()))
            });
        }
    }
    out
}

/// All set partitions of `0..n` as restricted growth strings.
pub fn set_partitions(n: usize) -> Vec<Vec<usize>> {
    fn grow(prefix: &mut Vec<usize>, n: usize, out: &mut Vec<Vec<usize>>) {
        if prefix.len() == n {
            out.push(prefix.clone());
            return;
        }
        let max = prefix.iter().copied().max().map_or(0, |m| m + 1);
        for c in 0..=max {
            prefix.push(c);
            grow(prefix, n, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    grow(&mut Vec::new(), n, &mut out);
    out
}

pub struct CoarseningOutcome {
    pub partitions: usize,
    pub mismatches: usize,
}

/// For every partition of several weighted graphs with `n ≤ 6`, compares
/// `PᵀAP` against pair sums: off-diagonals equal the cross-cluster sums and
/// diagonals equal twice the halved within-cluster sums.
pub fn coarsening_oracle() -> CoarseningOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (mut partitions, mut mismatches) = (0, 0);
    for n in 1..=6 {
        for g in 0..3 {
            let a = Tensor::from_fn(n, n, |_, _| 0.0);
            let mut a = a;
            for u in 0..n {
                a.set(u, u, 1.0);
                for v in u + 1..n {
                    // integer-valued weights keep every sum exact
                    let w = if g == 0 { 2.0 } else { rng.random_range(0..4) as f64 };
                    a.set(u, v, w);
                    a.set(v, u, w);
                }
            }
            for assign in set_partitions(n) {
                let k = assign.iter().max().unwrap() + 1;
                let p = AssignmentMatrix::from_indices(k, &assign).unwrap();
                let tape = Tape::new();
                let coarse = coarsen_with_assignment(tape.constant(a.clone()), tape.constant(p.matrix().clone()))
                    .unwrap()
                    .value();
                let def1 = coarsen_adjacency(&a, &Partition::new(k, assign.clone()).unwrap()).unwrap();
                partitions += 1;
                for i in 0..k {
                    for j in 0..k {
                        let mut brute = 0.0;
                        for u in (0..n).filter(|&u| assign[u] == i) {
                            for v in (0..n).filter(|&v| assign[v] == j) {
                                brute += a.get(u, v);
                            }
                        }
                        let expect_def1 = if i == j { 0.5 * brute } else { brute };
                        let expect_matrix = if i == j { 2.0 * expect_def1 } else { expect_def1 };
                        if coarse.get(i, j) != expect_matrix || def1.get(i, j) != expect_def1 {
                            mismatches += 1;
                        }
                    }
                }
            }
        }
    }
    CoarseningOutcome { partitions, mismatches }
}

/// Configuration for the permutation suite on 20-node graphs.
pub fn permutation_config(kind: ModelKind) -> ModelConfig {
    let mut c = ModelConfig::new(kind, 3);
    c.hidden = 8;
    c.lstm_hidden = 8;
    c.window = 5;
    c.context = if kind.is_temporal() { 3 } else { 1 };
    c.seed = 17;
    c
}

pub const PERMUTATION_KINDS: [ModelKind; 4] = [ModelKind::Mpnn, ModelKind::Mgnn, ModelKind::MpnnLstm, ModelKind::Atmgnn];

/// Largest `|f(πX)[i] − f(X)[π(i)]|` over random graphs and permutations.
pub fn permutation_gap(kind: ModelKind, graphs: usize, perms: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(kind as u64 + 100);
    let mut worst: f64 = 0.0;
    for _ in 0..graphs {
        let g = random_graph(20, 0.15, &mut rng).unwrap();
        let cfg = permutation_config(kind);
        let model = Model::new(cfg.clone(), g.clone()).unwrap();
        let ctx: Vec<Tensor> = (0..cfg.context)
            .map(|_| Tensor::from_fn(20, cfg.window, |_, _| rng.random_range(0.0..50.0)))
            .collect();
        let base = model.predict(&ctx).unwrap();
        for _ in 0..perms {
            let mut perm: Vec<usize> = (0..20).collect();
            rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut rng);
            let pg = g.permuted(&perm).unwrap();
            let pm = Model::from_parts(cfg.clone(), pg, model.params().clone(), model.scale()).unwrap();
            let pctx: Vec<Tensor> = ctx
                .iter()
                .map(|t| Tensor::from_fn(20, cfg.window, |i, j| t.get(perm[i], j)))
                .collect();
            let out = pm.predict(&pctx).unwrap();
            for i in 0..20 {
                worst = worst.max((out[i] - base[perm[i]]).abs());
            }
        }
    }
    worst
}

pub fn start_date() -> NaiveDate {
    NaiveDate::from_ymd_opt(2022, 1, 1).unwrap()
}

/// The 20-region border graph with planted diffusion over 160 days.
pub fn diffusion_bundle(seed: u64) -> DatasetBundle {
    let g = dhb_graph();
    let series = Diffusion {
        seed,
        ..Diffusion::default()
    }
    .simulate(&g);
    let cases = CaseMatrix::from_series(g.labels().to_vec(), start_date(), &series).unwrap();
    DatasetBundle::new(cases, g, None).unwrap()
}

/// Training recipe for the diffusion experiment: default epochs, patience,
/// batch size and learning rate, at reduced widths.
pub fn diffusion_setup(kind: ModelKind, seed: u64, horizons: Vec<usize>) -> EvalSetup {
    let mut m = ModelConfig::new(kind, horizons[0]);
    m.hidden = 32;
    m.lstm_hidden = 32;
    m.context = if kind.is_temporal() { 7 } else { 1 };
    let tc = TrainConfig {
        seed,
        ..TrainConfig::default()
    };
    let mut setup = EvalSetup::new(m, tc);
    setup.horizons = horizons;
    setup.rolling.origins = 1;
    setup
}

/// One seed of the horizon-14 diffusion experiment:
/// `(MPNN_LSTM MAE, AVG_WINDOW MAE)`.
pub fn diffusion_experiment(seed: u64) -> (f64, f64, EvalReport) {
    let bundle = diffusion_bundle(seed);
    let setup = diffusion_setup(ModelKind::MpnnLstm, seed, vec![14]);
    let fs = [
        Forecaster::Model(ModelKind::MpnnLstm),
        Forecaster::Baseline(BaselineKind::AvgWindow),
    ];
    let (report, _) = evaluate_horizons(&bundle, &setup, &fs).unwrap();
    let model = report.row("MPNN_LSTM", 14).unwrap().mae;
    let avgw = report.row("AVG_WINDOW", 14).unwrap().mae;
    (model, avgw, report)
}
