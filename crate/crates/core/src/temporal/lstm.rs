//! LSTM with a forget gate. Rows of every input are independent sequences,
//! so a batch of regions runs through one shared cell at once.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{uniform, Bound, ParamStore};
use crate::tensor::Tensor;

const GATES: [&str; 4] = ["f", "i", "o", "c"];

/// Registers `W_g` (h×d), `U_g` (h×h) and `b_g` (1×h) for each gate
/// `g ∈ {f, i, o, c}` under `prefix`.
pub fn init_lstm_cell<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, input: usize, hidden: usize, rng: &mut R) {
    let bound = 1.0 / (hidden as f64).sqrt();
    for g in GATES {
        store.insert(format!("{prefix}.W_{g}"), uniform(hidden, input, bound, rng));
        store.insert(format!("{prefix}.U_{g}"), uniform(hidden, hidden, bound, rng));
        let bias = if g == "f" { 1.0 } else { 0.0 };
        store.insert(format!("{prefix}.b_{g}"), Tensor::full(&[1, hidden], bias));
    }
}

/// One cell's parameters bound to a tape.
#[derive(Clone, Copy)]
pub struct LstmCell<'t> {
    w: [Var<'t>; 4],
    u: [Var<'t>; 4],
    b: [Var<'t>; 4],
}

impl<'t> LstmCell<'t> {
    pub fn bind(bound: &Bound<'t>, prefix: &str) -> Result<Self> {
        let get = |kind: &str| -> Result<[Var<'t>; 4]> {
            let v: Vec<Var<'t>> = GATES
                .iter()
                .map(|g| bound.get(&format!("{prefix}.{kind}_{g}")))
                .collect::<Result<_>>()?;
            Ok([v[0], v[1], v[2], v[3]])
        };
        let cell = LstmCell {
            w: get("W")?,
            u: get("U")?,
            b: get("b")?,
        };
        let h = cell.hidden();
        let d = cell.input();
        for g in 0..4 {
            if cell.w[g].shape() != [h, d] || cell.u[g].shape() != [h, h] || cell.b[g].shape() != [1, h] {
                return Err(Error::shape("LstmCell", format!("consistent h={h}, d={d}"), prefix));
            }
        }
        Ok(cell)
    }

    pub fn hidden(&self) -> usize {
        self.w[0].shape()[0]
    }

    pub fn input(&self) -> usize {
        self.w[0].shape()[1]
    }

    fn gate(&self, g: usize, x: Var<'t>, h: Var<'t>) -> Result<Var<'t>> {
        x.matmul_nt(self.w[g])?.add(h.matmul_nt(self.u[g])?)?.add_row(self.b[g])
    }
}

#[derive(Clone, Copy)]
pub struct LstmState<'t> {
    pub h: Var<'t>,
    pub c: Var<'t>,
}

impl<'t> LstmState<'t> {
    /// `h₀ = c₀ = 0` for `batch` sequences.
    pub fn zeros(tape: &'t Tape, batch: usize, hidden: usize) -> Self {
        LstmState {
            h: tape.constant(Tensor::zeros(&[batch, hidden])),
            c: tape.constant(Tensor::zeros(&[batch, hidden])),
        }
    }
}

#[derive(Clone, Copy)]
pub struct LstmGates<'t> {
    pub forget: Var<'t>,
    pub input: Var<'t>,
    pub output: Var<'t>,
    pub candidate: Var<'t>,
}

/// One step for a `batch × d` input.
pub fn lstm_cell_step<'t>(x: Var<'t>, state: LstmState<'t>, cell: &LstmCell<'t>) -> Result<(LstmState<'t>, LstmGates<'t>)> {
    if x.shape().len() != 2 || x.shape()[1] != cell.input() {
        return Err(Error::shape("lstm_cell_step", format!("{} input columns", cell.input()), format!("{:?}", x.shape())));
    }
    let f = cell.gate(0, x, state.h)?.sigmoid()?;
    let i = cell.gate(1, x, state.h)?.sigmoid()?;
    let o = cell.gate(2, x, state.h)?.sigmoid()?;
    let candidate = cell.gate(3, x, state.h)?.tanh()?;
    let c = f.hadamard(state.c)?.add(i.hadamard(candidate)?)?;
    let h = o.hadamard(c.tanh()?)?;
    Ok((
        LstmState { h, c },
        LstmGates {
            forget: f,
            input: i,
            output: o,
            candidate,
        },
    ))
}

/// Shape of a stacked, optionally bidirectional LSTM.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LstmStack {
    pub input: usize,
    pub hidden: usize,
    pub layers: usize,
    pub bidirectional: bool,
}

impl LstmStack {
    pub fn output_width(&self) -> usize {
        if self.bidirectional {
            2 * self.hidden
        } else {
            self.hidden
        }
    }

    fn directions(&self) -> &'static [&'static str] {
        if self.bidirectional {
            &["fwd", "bwd"]
        } else {
            &["fwd"]
        }
    }

    /// Parameter prefix of one direction of one layer.
    pub fn cell_prefix(prefix: &str, layer: usize, direction: &str) -> String {
        format!("{prefix}.l{layer}.{direction}")
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, prefix: &str, rng: &mut R) {
        for layer in 0..self.layers {
            let input = if layer == 0 { self.input } else { self.output_width() };
            for dir in self.directions() {
                init_lstm_cell(store, &Self::cell_prefix(prefix, layer, dir), input, self.hidden, rng);
            }
        }
    }
}

/// Runs the stack over `xs` (one `batch × d` tensor per timestep) and
/// returns one `batch × output_width` tensor per timestep.
pub fn lstm_sequence<'t>(bound: &Bound<'t>, prefix: &str, stack: &LstmStack, xs: &[Var<'t>]) -> Result<Vec<Var<'t>>> {
    let Some(first) = xs.first() else {
        return Err(Error::invalid("lstm_sequence needs at least one timestep"));
    };
    if stack.layers == 0 {
        return Err(Error::invalid("lstm stack needs at least one layer"));
    }
    let tape = first.tape();
    let batch = first.shape()[0];
    let mut inputs = xs.to_vec();
    for layer in 0..stack.layers {
        let mut per_direction = Vec::new();
        for dir in stack.directions() {
            let cell = LstmCell::bind(bound, &LstmStack::cell_prefix(prefix, layer, dir))?;
            let mut state = LstmState::zeros(tape, batch, cell.hidden());
            let mut outs = vec![None; inputs.len()];
            let order: Vec<usize> = if *dir == "fwd" {
                (0..inputs.len()).collect()
            } else {
                (0..inputs.len()).rev().collect()
            };
            for t in order {
                state = lstm_cell_step(inputs[t], state, &cell)?.0;
                outs[t] = Some(state.h);
            }
            per_direction.push(outs.into_iter().map(|o| o.expect("every step visited")).collect::<Vec<_>>());
        }
        inputs = if per_direction.len() == 1 {
            per_direction.pop().expect("one direction")
        } else {
            (0..inputs.len())
                .map(|t| tape.concat_cols(&[per_direction[0][t], per_direction[1][t]]))
                .collect::<Result<_>>()?
        };
    }
    Ok(inputs)
}
