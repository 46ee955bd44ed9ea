//! Iterated learned coarsening: embed, assign, contract, repeat.

use rand::RngCore;

use super::assign::{coarsen_with_assignment, sample_assignment, AssignmentMatrix};
use crate::autodiff::Var;
use crate::error::{Error, Result};

/// Supplies the learned pieces of each coarsening step.
pub trait LevelEncoder<'t> {
    /// `n_level × k` assignment logits for the nodes of the level being coarsened.
    fn assign_logits(&mut self, level: usize, adj_norm: Var<'t>, embeddings: Var<'t>, k: usize) -> Result<Var<'t>>;

    /// Embeddings of the nodes of a freshly coarsened level, given the
    /// cluster-mean pooled embeddings of their members.
    fn embed(&mut self, level: usize, adj_norm: Var<'t>, pooled: Var<'t>) -> Result<Var<'t>>;
}

pub enum Sampling<'r> {
    /// Deterministic `argmax` of the logits.
    Argmax,
    /// Gumbel-max sampling.
    Gumbel(&'r mut dyn RngCore),
}

pub struct HierarchyLevel<'t> {
    /// Raw (unnormalized) weighted adjacency of this level.
    pub adjacency: Var<'t>,
    pub embeddings: Var<'t>,
    /// Mean of the node embeddings, `1 × width`.
    pub latent: Var<'t>,
    /// Assignment that produced this level from the next finer one.
    pub assignment: Option<AssignmentMatrix>,
}

/// Levels ordered from the input graph (finest) to the coarsest.
pub struct CoarseningHierarchy<'t> {
    pub levels: Vec<HierarchyLevel<'t>>,
}

impl<'t> CoarseningHierarchy<'t> {
    pub fn node_counts(&self) -> Vec<usize> {
        self.levels.iter().map(|l| l.adjacency.shape()[0]).collect()
    }

    pub fn latents(&self) -> Vec<Var<'t>> {
        self.levels.iter().map(|l| l.latent).collect()
    }
}

/// Builds `1 + cluster_sizes.len()` levels starting from `adjacency` and
/// `embeddings`. Coarse adjacency is `Pᵀ A P`; coarse embeddings are the
/// member means (zero for an empty cluster).
pub fn build_hierarchy<'t, E: LevelEncoder<'t>>(
    adjacency: Var<'t>,
    embeddings: Var<'t>,
    cluster_sizes: &[usize],
    encoder: &mut E,
    mut sampling: Sampling<'_>,
    straight_through: bool,
) -> Result<CoarseningHierarchy<'t>> {
    let n = adjacency.shape()[0];
    validate_cluster_sizes(n, cluster_sizes)?;
    if embeddings.shape()[0] != n {
        return Err(Error::shape("build_hierarchy", format!("{n} embedding rows"), embeddings.shape()[0]));
    }
    let mut levels = vec![HierarchyLevel {
        adjacency,
        embeddings,
        latent: embeddings.mean_rows()?,
        assignment: None,
    }];
    for (step, &k) in cluster_sizes.iter().enumerate() {
        let current = levels.last().expect("at least one level");
        let adj_norm = current.adjacency.sym_normalize()?;
        let logits = encoder.assign_logits(step, adj_norm, current.embeddings, k)?;
        if logits.shape() != [current.adjacency.shape()[0], k] {
            return Err(Error::shape("assign_logits", format!("{k} columns"), format!("{:?}", logits.shape())));
        }
        let sampled = match &mut sampling {
            Sampling::Argmax => sample_assignment::<dyn RngCore>(logits, None, straight_through)?,
            Sampling::Gumbel(rng) => sample_assignment(logits, Some(&mut **rng), straight_through)?,
        };
        let coarse_adj = coarsen_with_assignment(current.adjacency, sampled.matrix)?;
        let inv_counts = sampled
            .hard
            .cluster_sizes()
            .iter()
            .map(|&c| if c == 0 { 0.0 } else { 1.0 / c as f64 })
            .collect();
        let pooled = sampled
            .matrix
            .transpose()?
            .matmul(current.embeddings)?
            .scale_rows(inv_counts)?;
        let coarse_norm = coarse_adj.sym_normalize()?;
        let coarse_emb = encoder.embed(step, coarse_norm, pooled)?;
        levels.push(HierarchyLevel {
            adjacency: coarse_adj,
            embeddings: coarse_emb,
            latent: coarse_emb.mean_rows()?,
            assignment: Some(sampled.hard),
        });
    }
    Ok(CoarseningHierarchy { levels })
}

pub fn validate_cluster_sizes(n: usize, sizes: &[usize]) -> Result<()> {
    let mut prev = n;
    for (i, &k) in sizes.iter().enumerate() {
        if k == 0 {
            return Err(Error::invalid("cluster size 0"));
        }
        if k > prev {
            return Err(Error::invalid(format!("cluster size {k} exceeds the {prev} nodes of the level it coarsens")));
        }
        if i > 0 && k >= prev {
            return Err(Error::invalid("cluster sizes must be strictly decreasing"));
        }
        prev = k;
    }
    Ok(())
}
