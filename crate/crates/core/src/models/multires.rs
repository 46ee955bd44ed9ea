//! Learned coarsening used by MGNN and ATMGNN.

use rand::Rng;

use super::layers::init_linear;
use super::ForwardCtx;
use crate::autodiff::Var;
use crate::error::Result;
use crate::graph::{build_hierarchy, LevelEncoder, RegionGraph, Sampling};
use crate::params::{Bound, ParamStore};

/// Per coarsening step: assignment weights `k × hidden` and a coarse-level
/// message-passing weight `hidden × hidden`.
pub struct MultiresEncoder<'t> {
    assign: Vec<Var<'t>>,
    embed: Vec<Var<'t>>,
}

impl<'t> MultiresEncoder<'t> {
    pub fn init<R: Rng + ?Sized>(store: &mut ParamStore, cluster_sizes: &[usize], hidden: usize, rng: &mut R) {
        for (l, &k) in cluster_sizes.iter().enumerate() {
            init_linear(store, &format!("mgnn.assign{l}"), k, hidden, rng);
            init_linear(store, &format!("mgnn.embed{l}"), hidden, hidden, rng);
        }
    }

    pub fn bind(bound: &Bound<'t>, cluster_sizes: &[usize]) -> Result<Self> {
        let mut assign = Vec::new();
        let mut embed = Vec::new();
        for l in 0..cluster_sizes.len() {
            assign.push(bound.get(&format!("mgnn.assign{l}.W"))?);
            embed.push(bound.get(&format!("mgnn.embed{l}.W"))?);
        }
        Ok(MultiresEncoder { assign, embed })
    }

    /// Mean-pooled latent (`1 × hidden`) of every level, finest first, for
    /// one graph with node embeddings `h`.
    pub fn latents(
        &self,
        ctx: &mut ForwardCtx<'_>,
        graph: &RegionGraph,
        h: Var<'t>,
        cluster_sizes: &[usize],
    ) -> Result<Vec<Var<'t>>> {
        let tape = h.tape();
        let adjacency = tape.constant(graph.adjacency().clone());
        let mut levels = Levels { enc: self };
        let sampling = match (ctx.training, ctx.rng.as_deref_mut()) {
            (true, Some(rng)) => Sampling::Gumbel(rng),
            _ => Sampling::Argmax,
        };
        let hier = build_hierarchy(adjacency, h, cluster_sizes, &mut levels, sampling, ctx.straight_through)?;
        Ok(hier.latents())
    }
}

struct Levels<'a, 't> {
    enc: &'a MultiresEncoder<'t>,
}

impl<'t> LevelEncoder<'t> for Levels<'_, 't> {
    fn assign_logits(&mut self, level: usize, adj_norm: Var<'t>, embeddings: Var<'t>, _k: usize) -> Result<Var<'t>> {
        adj_norm.matmul(embeddings)?.matmul_nt(self.enc.assign[level])
    }

    fn embed(&mut self, level: usize, adj_norm: Var<'t>, pooled: Var<'t>) -> Result<Var<'t>> {
        adj_norm.matmul(pooled.matmul_nt(self.enc.embed[level])?)?.relu()
    }
}
