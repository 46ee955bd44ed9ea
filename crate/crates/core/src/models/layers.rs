//! Message passing and readout shared by every graph model.

use rand::Rng;

use super::ForwardCtx;
use crate::autodiff::{BatchStats, Var};
use crate::error::{Error, Result};
use crate::params::{uniform, Bound, ParamStore};
use crate::tensor::Tensor;

/// Registers a linear map `out × input` under `{prefix}.W`.
pub(crate) fn init_linear<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, out: usize, input: usize, rng: &mut R) {
    let bound = 1.0 / (input.max(1) as f64).sqrt();
    store.insert(format!("{prefix}.W"), uniform(out, input, bound, rng));
}

/// `out × input` weights plus batch-norm scale/shift and running statistics.
pub(crate) fn init_mp_layer<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, input: usize, out: usize, rng: &mut R) {
    init_linear(store, prefix, out, input, rng);
    store.insert(format!("{prefix}.bn.gamma"), Tensor::ones(&[1, out]));
    store.insert(format!("{prefix}.bn.beta"), Tensor::zeros(&[1, out]));
    store.insert_buffer(format!("{prefix}.bn.mean"), Tensor::zeros(&[1, out]));
    store.insert_buffer(format!("{prefix}.bn.var"), Tensor::ones(&[1, out]));
}

/// One message-passing layer bound to a tape.
pub struct MpLayer<'t> {
    pub name: String,
    pub w: Var<'t>,
    pub gamma: Var<'t>,
    pub beta: Var<'t>,
    /// Running statistics used outside training.
    pub running: BatchStats,
}

impl<'t> MpLayer<'t> {
    pub fn bind(bound: &Bound<'t>, store: &ParamStore, name: &str) -> Result<Self> {
        let buf = |n: &str| {
            store
                .buffer(&format!("{name}.bn.{n}"))
                .map(|t| t.data().to_vec())
                .ok_or_else(|| Error::invalid(format!("missing buffer `{name}.bn.{n}`")))
        };
        Ok(MpLayer {
            name: name.to_string(),
            w: bound.get(&format!("{name}.W"))?,
            gamma: bound.get(&format!("{name}.bn.gamma"))?,
            beta: bound.get(&format!("{name}.bn.beta"))?,
            running: BatchStats {
                mean: buf("mean")?,
                var: buf("var")?,
            },
        })
    }
}

/// `relu(Â · H · Wᵀ)` on each of `blocks` stacked graphs, then batch norm and
/// dropout.
pub fn mpnn_layer<'t>(
    ctx: &mut ForwardCtx<'_>,
    h: Var<'t>,
    adj_norm: Var<'t>,
    layer: &MpLayer<'t>,
    dropout: f64,
    blocks: usize,
) -> Result<Var<'t>> {
    let z = h.matmul_nt(layer.w)?.block_left_matmul(adj_norm, blocks)?.relu()?;
    let z = if ctx.training {
        let (y, stats) = z.batch_norm(layer.gamma, layer.beta, None)?;
        if let Some(stats) = stats {
            ctx.record_stats(&layer.name, stats);
        }
        y
    } else {
        z.batch_norm(layer.gamma, layer.beta, Some(&layer.running))?.0
    };
    ctx.dropout(z, dropout)
}

/// Runs `layers` in sequence and returns every layer's output.
pub fn mp_encode<'t>(
    ctx: &mut ForwardCtx<'_>,
    x: Var<'t>,
    adj_norm: Var<'t>,
    layers: &[MpLayer<'t>],
    dropout: f64,
    blocks: usize,
) -> Result<Vec<Var<'t>>> {
    let mut outs = Vec::with_capacity(layers.len());
    let mut h = x;
    for layer in layers {
        h = mpnn_layer(ctx, h, adj_norm, layer, dropout, blocks)?;
        outs.push(h);
    }
    Ok(outs)
}

/// Per-row linear map to one scalar: `x · wᵀ + b`.
pub fn linear_readout<'t>(x: Var<'t>, w: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    if w.shape() != [1, x.shape()[1]] {
        return Err(Error::shape("readout", format!("1 × {}", x.shape()[1]), format!("{:?}", w.shape())));
    }
    x.matmul_nt(w)?.add_row(b)
}
