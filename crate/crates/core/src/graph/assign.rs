//! Hard cluster assignment via the Gumbel-max trick, with a straight-through
//! backward path through the softmax probabilities.

use rand::Rng;

use super::Partition;
use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `n × k` one-hot matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct AssignmentMatrix {
    matrix: Tensor,
}

impl AssignmentMatrix {
    pub fn new(matrix: Tensor) -> Result<Self> {
        if matrix.shape().len() != 2 || matrix.cols() == 0 {
            return Err(Error::shape("AssignmentMatrix", "n × k with k ≥ 1", format!("{:?}", matrix.shape())));
        }
        for i in 0..matrix.rows() {
            let row = matrix.row_slice(i);
            let ones = row.iter().filter(|&&v| v == 1.0).count();
            let zeros = row.iter().filter(|&&v| v == 0.0).count();
            if ones != 1 || ones + zeros != row.len() {
                return Err(Error::invalid(format!("assignment row {i} is not one-hot")));
            }
        }
        Ok(AssignmentMatrix { matrix })
    }

    pub fn from_partition(p: &Partition) -> Self {
        let matrix = Tensor::from_fn(p.n(), p.k(), |u, c| if p.assignment()[u] == c { 1.0 } else { 0.0 });
        AssignmentMatrix { matrix }
    }

    pub fn from_indices(k: usize, indices: &[usize]) -> Result<Self> {
        Ok(Self::from_partition(&Partition::new(k, indices.to_vec())?))
    }

    pub fn matrix(&self) -> &Tensor {
        &self.matrix
    }

    pub fn k(&self) -> usize {
        self.matrix.cols()
    }

    pub fn partition(&self) -> Partition {
        Partition::new(self.k(), self.matrix.argmax_rows()).expect("one-hot rows")
    }

    pub fn cluster_sizes(&self) -> Vec<usize> {
        self.partition().cluster_sizes()
    }
}

/// Standard Gumbel(0, 1) draw by inverse CDF, `U` in the open interval (0, 1).
pub fn gumbel_noise<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    loop {
        let u: f64 = rng.random();
        if u > 0.0 {
            return -(-u.ln()).ln();
        }
    }
}

pub struct SampledAssignment<'t> {
    /// Forward value is the hard one-hot matrix.
    pub matrix: Var<'t>,
    pub hard: AssignmentMatrix,
    pub probabilities: Tensor,
}

/// Samples one cluster per row of `logits`.
///
/// With an rng, each row takes `argmax(logits + Gumbel noise)`; without one,
/// `argmax(logits)`. When `straight_through` is set the returned matrix
/// carries gradients to `logits` through `softmax(logits)`; otherwise it is
/// a constant.
pub fn sample_assignment<'t, R: Rng + ?Sized>(
    logits: Var<'t>,
    rng: Option<&mut R>,
    straight_through: bool,
) -> Result<SampledAssignment<'t>> {
    let values = logits.value();
    if values.shape().len() != 2 || values.cols() == 0 {
        return Err(Error::invalid(format!("assignment needs k ≥ 1, got shape {:?}", values.shape())));
    }
    let k = values.cols();
    let choice = match rng {
        Some(rng) => {
            let mut noisy = (*values).clone();
            for x in noisy.data_mut() {
                *x += gumbel_noise(rng);
            }
            noisy.argmax_rows()
        }
        None => values.argmax_rows(),
    };
    let hard = AssignmentMatrix::from_indices(k, &choice)?;
    let soft = logits.softmax(1)?;
    let probabilities = (*soft.value()).clone();
    let matrix = if straight_through {
        soft.straight_through(hard.matrix().clone())?
    } else {
        logits.tape().constant(hard.matrix().clone())
    };
    Ok(SampledAssignment {
        matrix,
        hard,
        probabilities,
    })
}

/// `Pᵀ A P` for a one-hot `P`.
pub fn coarsen_with_assignment<'t>(a: Var<'t>, p: Var<'t>) -> Result<Var<'t>> {
    AssignmentMatrix::new((*p.value()).clone())?;
    let ap = a.matmul(p)?;
    p.transpose()?.matmul(ap)
}
