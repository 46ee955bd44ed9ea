//! A 20-region border graph and planted diffusion dynamics for experiments
//! and demos.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};

use crate::error::Result;
use crate::graph::RegionGraph;

/// New Zealand's twenty district health boards, north to south.
pub const DHB_LABELS: [&str; 20] = [
    "Northland",
    "Waitemata",
    "Auckland",
    "Counties Manukau",
    "Waikato",
    "Lakes",
    "Bay of Plenty",
    "Tairawhiti",
    "Taranaki",
    "Hawke's Bay",
    "MidCentral",
    "Whanganui",
    "Capital and Coast",
    "Hutt Valley",
    "Wairarapa",
    "Nelson Marlborough",
    "West Coast",
    "Canterbury",
    "South Canterbury",
    "Southern",
];

/// Pairs of boards that share a land border.
pub const DHB_BORDERS: [(usize, usize); 29] = [
    (0, 1),
    (1, 2),
    (1, 3),
    (2, 3),
    (3, 4),
    (4, 5),
    (4, 6),
    (4, 8),
    (4, 11),
    (5, 6),
    (5, 9),
    (5, 11),
    (6, 7),
    (6, 9),
    (7, 9),
    (8, 11),
    (9, 10),
    (9, 11),
    (10, 11),
    (10, 12),
    (10, 14),
    (12, 13),
    (13, 14),
    (15, 16),
    (15, 17),
    (16, 17),
    (16, 19),
    (17, 18),
    (18, 19),
];

pub fn dhb_graph() -> RegionGraph {
    let labels = DHB_LABELS.iter().map(|s| s.to_string()).collect();
    RegionGraph::new(labels, &DHB_BORDERS).expect("static border table is valid")
}

/// The border table as a `u,v` label edge list.
pub fn dhb_edge_list() -> String {
    DHB_BORDERS
        .iter()
        .map(|&(u, v)| format!("{},{}\n", DHB_LABELS[u], DHB_LABELS[v]))
        .collect()
}

/// Uniform random border graph: a spanning path over a random order plus
/// each remaining pair with probability `p`.
pub fn random_graph(n: usize, p: f64, rng: &mut impl Rng) -> Result<RegionGraph> {
    let mut order: Vec<usize> = (0..n).collect();
    rand::seq::SliceRandom::shuffle(order.as_mut_slice(), rng);
    let mut pairs: Vec<(usize, usize)> = order.windows(2).map(|w| (w[0].min(w[1]), w[0].max(w[1]))).collect();
    for u in 0..n {
        for v in u + 1..n {
            if !pairs.contains(&(u, v)) && rng.random_bool(p) {
                pairs.push((u, v));
            }
        }
    }
    RegionGraph::new((0..n).map(|i| format!("r{i}")).collect(), &pairs)
}

/// Planted dynamics `y_{t+1} = Â·y_t + noise` with `Exp(noise_mean)` noise.
#[derive(Clone, Debug, PartialEq)]
pub struct Diffusion {
    pub days: usize,
    pub noise_mean: f64,
    /// Upper end of the uniform initial counts.
    pub initial_max: f64,
    pub seed: u64,
}

impl Default for Diffusion {
    fn default() -> Self {
        Diffusion {
            days: 160,
            noise_mean: 1.0,
            initial_max: 10.0,
            seed: 0,
        }
    }
}

impl Diffusion {
    /// Per-region series, `n` rows of `days` values.
    pub fn simulate(&self, graph: &RegionGraph) -> Vec<Vec<f64>> {
        let n = graph.n();
        let a = graph.normalized();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut y: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..=self.initial_max)).collect();
        let mut out = vec![Vec::with_capacity(self.days); n];
        for _ in 0..self.days {
            for (u, v) in y.iter().enumerate() {
                out[u].push(*v);
            }
            y = (0..n)
                .map(|u| {
                    let spread: f64 = (0..n).map(|v| a.get(u, v) * y[v]).sum();
                    let e: f64 = Exp1.sample(&mut rng);
                    spread + self.noise_mean * e
                })
                .collect();
        }
        out
    }
}
