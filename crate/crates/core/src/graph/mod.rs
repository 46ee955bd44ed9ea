//! Region graphs, GCN normalization and multiresolution coarsening.

mod assign;
mod hierarchy;

pub use assign::{coarsen_with_assignment, gumbel_noise, sample_assignment, AssignmentMatrix, SampledAssignment};
pub use hierarchy::{build_hierarchy, validate_cluster_sizes, CoarseningHierarchy, HierarchyLevel, LevelEncoder, Sampling};

use serde::{Deserialize, Serialize};

use crate::autodiff::sym_normalize_values;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SELF_LOOP_WEIGHT: f64 = 1.0;
pub const BORDER_WEIGHT: f64 = 2.0;

/// Regions joined by shared borders, with unit self-loops.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionGraph {
    labels: Vec<String>,
    adjacency: Tensor,
    normalized: Tensor,
}

impl RegionGraph {
    pub fn new(labels: Vec<String>, border_pairs: &[(usize, usize)]) -> Result<Self> {
        let adjacency = build_adjacency(labels.len(), border_pairs)?;
        let normalized = normalize_adjacency(&adjacency)?;
        Ok(RegionGraph {
            labels,
            adjacency,
            normalized,
        })
    }

    pub fn n(&self) -> usize {
        self.labels.len()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn adjacency(&self) -> &Tensor {
        &self.adjacency
    }

    pub fn normalized(&self) -> &Tensor {
        &self.normalized
    }

    pub fn border_pairs(&self) -> Vec<(usize, usize)> {
        let n = self.n();
        let mut pairs = Vec::new();
        for u in 0..n {
            for v in u + 1..n {
                if self.adjacency.get(u, v) != 0.0 {
                    pairs.push((u, v));
                }
            }
        }
        pairs
    }

    /// Relabels nodes so that new node `i` is old node `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let inverse = invert_permutation(perm)?;
        let labels = perm.iter().map(|&p| self.labels[p].clone()).collect();
        let pairs: Vec<_> = self.border_pairs().into_iter().map(|(u, v)| (inverse[u], inverse[v])).collect();
        RegionGraph::new(labels, &pairs)
    }
}

pub(crate) fn invert_permutation(perm: &[usize]) -> Result<Vec<usize>> {
    let mut inverse = vec![usize::MAX; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        if p >= perm.len() || inverse[p] != usize::MAX {
            return Err(Error::invalid("not a permutation"));
        }
        inverse[p] = i;
    }
    Ok(inverse)
}

/// Symmetric adjacency: 1 on the diagonal, 2 between bordering regions,
/// 0 elsewhere. Repeated pairs are idempotent.
pub fn build_adjacency(n: usize, border_pairs: &[(usize, usize)]) -> Result<Tensor> {
    let mut a = Tensor::eye(n);
    for &(u, v) in border_pairs {
        if u >= n || v >= n {
            return Err(Error::invalid(format!("border pair ({u}, {v}) out of range for {n} regions")));
        }
        if u == v {
            return Err(Error::invalid(format!("border pair ({u}, {v}) is a self-loop")));
        }
        a.set(u, v, BORDER_WEIGHT);
        a.set(v, u, BORDER_WEIGHT);
    }
    Ok(a)
}

/// `D^{-1/2} A D^{-1/2}` with `D` the diagonal of row sums.
pub fn normalize_adjacency(a: &Tensor) -> Result<Tensor> {
    let n = a.rows();
    if a.shape() != [n, n] {
        return Err(Error::shape("normalize_adjacency", "square matrix", format!("{:?}", a.shape())));
    }
    for i in 0..n {
        if a.get(i, i) <= 0.0 {
            return Err(Error::invalid(format!("row {i} has no self-loop")));
        }
        for j in 0..n {
            if a.get(i, j) < 0.0 || a.get(i, j) != a.get(j, i) {
                return Err(Error::invalid("adjacency must be symmetric and nonnegative"));
            }
        }
    }
    let (out, s) = sym_normalize_values(a)?;
    if s.contains(&0.0) {
        return Err(Error::invalid("zero row sum"));
    }
    Ok(out)
}

/// Hard assignment of `n` nodes to `k` clusters.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Partition {
    k: usize,
    assignment: Vec<usize>,
}

impl Partition {
    pub fn new(k: usize, assignment: Vec<usize>) -> Result<Self> {
        if assignment.is_empty() {
            return Err(Error::invalid("partition over zero nodes"));
        }
        if let Some(&bad) = assignment.iter().find(|&&c| c >= k) {
            return Err(Error::invalid(format!("cluster index {bad} out of range for k = {k}")));
        }
        Ok(Partition { k, assignment })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    pub fn n(&self) -> usize {
        self.assignment.len()
    }

    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &c in &self.assignment {
            sizes[c] += 1;
        }
        sizes
    }
}

/// Coarse adjacency with within-cluster weight halved on the diagonal and
/// summed cross-cluster weight off the diagonal.
pub fn coarsen_adjacency(a: &Tensor, p: &Partition) -> Result<Tensor> {
    let n = a.rows();
    if a.shape() != [n, n] || p.n() != n {
        return Err(Error::shape("coarsen_adjacency", format!("{} nodes", p.n()), format!("{:?}", a.shape())));
    }
    let k = p.k();
    let mut out = Tensor::zeros(&[k, k]);
    for u in 0..n {
        for v in 0..n {
            let (i, j) = (p.assignment[u], p.assignment[v]);
            let w = if i == j { 0.5 * a.get(u, v) } else { a.get(u, v) };
            out.set(i, j, out.get(i, j) + w);
        }
    }
    Ok(out)
}

/// Parses a `u,v` label-pair edge list. Blank lines and `#` comments are skipped.
pub fn parse_edge_list(text: &str, labels: &[String]) -> Result<Vec<(usize, usize)>> {
    let index = |label: &str, line: usize| {
        labels
            .iter()
            .position(|l| l == label)
            .ok_or_else(|| Error::UnknownRegion {
                line,
                label: label.to_string(),
            })
    };
    let mut pairs = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (u, v) = line.split_once(',').ok_or_else(|| Error::Parse {
            line: i + 1,
            msg: format!("expected `u,v`, got `{line}`"),
        })?;
        pairs.push((index(u.trim(), i + 1)?, index(v.trim(), i + 1)?));
    }
    Ok(pairs)
}

/// Distinct labels of an edge list in first-appearance order.
pub fn edge_list_labels(text: &str) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for line in text.lines().map(str::trim) {
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some((u, v)) = line.split_once(',') {
            for l in [u.trim(), v.trim()] {
                if !out.iter().any(|x| x == l) {
                    out.push(l.to_string());
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adjacency_examples() {
        assert_eq!(build_adjacency(2, &[]).unwrap(), Tensor::eye(2));
        assert_eq!(
            build_adjacency(2, &[(0, 1)]).unwrap(),
            Tensor::from_rows(&[[1.0, 2.0], [2.0, 1.0]])
        );
        assert_eq!(
            build_adjacency(3, &[(0, 1), (1, 2), (2, 1)]).unwrap(),
            Tensor::from_rows(&[[1.0, 2.0, 0.0], [2.0, 1.0, 2.0], [0.0, 2.0, 1.0]])
        );
        assert!(build_adjacency(2, &[(0, 2)]).is_err());
        assert!(build_adjacency(2, &[(1, 1)]).is_err());
    }

    #[test]
    fn normalization_examples() {
        assert_eq!(normalize_adjacency(&Tensor::eye(3)).unwrap(), Tensor::eye(3));
        let an = normalize_adjacency(&Tensor::from_rows(&[[1.0, 2.0], [2.0, 1.0]])).unwrap();
        let expected = Tensor::from_rows(&[[1.0 / 3.0, 2.0 / 3.0], [2.0 / 3.0, 1.0 / 3.0]]);
        assert!(an.max_abs_diff(&expected) < 1e-15);
        assert!(normalize_adjacency(&Tensor::zeros(&[2, 2])).is_err());
    }

    #[test]
    fn normalized_is_symmetric_with_unit_spectral_radius() {
        let g = RegionGraph::new((0..5).map(|i| i.to_string()).collect(), &[(0, 1), (1, 2), (2, 3), (1, 4)]).unwrap();
        let an = g.normalized();
        assert_eq!(*an, an.transpose().unwrap());
        // Power iteration: the largest eigenvalue of D^{-1/2} A D^{-1/2} is 1.
        let mut v = Tensor::column(&[1.0, 0.3, -0.2, 0.7, 0.1]);
        let mut lambda = 0.0;
        for _ in 0..500 {
            let w = an.matmul(&v).unwrap();
            lambda = w.data().iter().map(|x| x * x).sum::<f64>().sqrt();
            v = w.scale(1.0 / lambda).unwrap();
        }
        assert!(lambda <= 1.0 + 1e-9, "spectral radius {lambda}");
    }

    #[test]
    fn coarsen_examples() {
        // path 1–2–3 with unit weights and no self-loops
        let a = Tensor::from_rows(&[[0.0, 1.0, 0.0], [1.0, 0.0, 1.0], [0.0, 1.0, 0.0]]);
        let p = Partition::new(2, vec![0, 0, 1]).unwrap();
        assert_eq!(coarsen_adjacency(&a, &p).unwrap(), Tensor::from_rows(&[[1.0, 1.0], [1.0, 0.0]]));
        let id = Partition::new(3, vec![0, 1, 2]).unwrap();
        assert_eq!(coarsen_adjacency(&a, &id).unwrap(), a);
        let one = Partition::new(1, vec![0, 0, 0]).unwrap();
        assert_eq!(coarsen_adjacency(&a, &one).unwrap().data(), &[2.0]);
        assert!(Partition::new(2, vec![0, 2]).is_err());
        assert!(coarsen_adjacency(&a, &Partition::new(1, vec![0, 0]).unwrap()).is_err());
    }

    #[test]
    fn edge_list_parsing() {
        let labels: Vec<String> = ["Auckland", "Hawke's Bay", "Lakes"].iter().map(|s| s.to_string()).collect();
        let text = "# borders\nAuckland, Lakes\n\nHawke's Bay,Lakes\n";
        assert_eq!(parse_edge_list(text, &labels).unwrap(), vec![(0, 2), (1, 2)]);
        match parse_edge_list("Auckland,Otago\n", &labels) {
            Err(Error::UnknownRegion { line, label }) => {
                assert_eq!(line, 1);
                assert_eq!(label, "Otago");
            }
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(edge_list_labels(text), vec!["Auckland", "Lakes", "Hawke's Bay"]);
    }

    #[test]
    fn permutation_conjugates_adjacency() {
        let g = RegionGraph::new((0..4).map(|i| i.to_string()).collect(), &[(0, 1), (1, 2), (2, 3)]).unwrap();
        let perm = [2, 0, 3, 1];
        let pg = g.permuted(&perm).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(pg.adjacency().get(i, j), g.adjacency().get(perm[i], perm[j]));
                assert_eq!(pg.normalized().get(i, j), g.normalized().get(perm[i], perm[j]));
            }
        }
    }
}
