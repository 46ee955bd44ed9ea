//! Scaled dot-product attention, multi-head composition and a post-norm
//! transformer encoder block.

use rand::Rng;

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::params::{uniform, Bound, ParamStore};
use crate::tensor::Tensor;

/// Query/key/value projections of one head, each `h × d`.
#[derive(Clone, Copy)]
pub struct HeadParams<'t> {
    pub w_q: Var<'t>,
    pub w_k: Var<'t>,
    pub w_v: Var<'t>,
}

/// `softmax(Q Kᵀ / √h) V` with `Q = X W_Qᵀ` etc. Returns the output and the
/// row-stochastic attention matrix.
pub fn self_attention<'t>(x: Var<'t>, head: &HeadParams<'t>) -> Result<(Var<'t>, Var<'t>)> {
    let h = head.w_q.shape()[0];
    if x.shape()[0] == 0 {
        return Err(Error::invalid("attention over an empty sequence"));
    }
    if head.w_k.shape()[0] != h || head.w_v.shape()[0] != h {
        return Err(Error::shape("self_attention", format!("{h}-row projections"), format!("{:?}", head.w_k.shape())));
    }
    let q = x.matmul_nt(head.w_q)?;
    let k = x.matmul_nt(head.w_k)?;
    let v = x.matmul_nt(head.w_v)?;
    let attn = q.matmul_nt(k)?.scale(1.0 / (h as f64).sqrt())?.softmax(1)?;
    Ok((attn.matmul(v)?, attn))
}

/// `Concat(H₁, …, H_n) · W_O`.
pub fn multi_head<'t>(x: Var<'t>, heads: &[HeadParams<'t>], w_o: Var<'t>) -> Result<Var<'t>> {
    let Some(first) = heads.first() else {
        return Err(Error::invalid("multi_head needs at least one head"));
    };
    let h = first.w_q.shape()[0];
    if heads.iter().any(|hd| hd.w_q.shape()[0] != h) {
        return Err(Error::shape("multi_head", "equal head widths", "mixed"));
    }
    let outs = heads
        .iter()
        .map(|hd| self_attention(x, hd).map(|(o, _)| o))
        .collect::<Result<Vec<_>>>()?;
    let concat = if outs.len() == 1 { outs[0] } else { x.tape().concat_cols(&outs)? };
    concat.matmul(w_o)
}

/// Sinusoidal position table, `len × width`.
pub fn positional_encoding(len: usize, width: usize) -> Tensor {
    Tensor::from_fn(len, width, |pos, j| {
        let i = (j / 2) as f64;
        let angle = pos as f64 / 10000f64.powf(2.0 * i / width as f64);
        if j % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

/// Shape of one encoder block. Residuals require `width == heads · head_dim`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderShape {
    pub width: usize,
    pub heads: usize,
    pub ff_hidden: usize,
}

impl EncoderShape {
    pub fn head_dim(&self) -> Result<usize> {
        if self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return Err(Error::invalid(format!("width {} not divisible by {} heads", self.width, self.heads)));
        }
        Ok(self.width / self.heads)
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, prefix: &str, rng: &mut R) -> Result<()> {
        let h = self.head_dim()?;
        let d = self.width;
        let bound = 1.0 / (h as f64).sqrt();
        for i in 0..self.heads {
            for w in ["W_Q", "W_K", "W_V"] {
                store.insert(format!("{prefix}.head{i}.{w}"), uniform(h, d, bound, rng));
            }
        }
        store.insert(format!("{prefix}.W_O"), Tensor::eye(d));
        for ln in ["ln1", "ln2"] {
            store.insert(format!("{prefix}.{ln}.gamma"), Tensor::ones(&[1, d]));
            store.insert(format!("{prefix}.{ln}.beta"), Tensor::zeros(&[1, d]));
        }
        store.insert(format!("{prefix}.ff.W1"), uniform(self.ff_hidden, d, 1.0 / (d as f64).sqrt(), rng));
        store.insert(format!("{prefix}.ff.b1"), Tensor::zeros(&[1, self.ff_hidden]));
        store.insert(
            format!("{prefix}.ff.W2"),
            uniform(d, self.ff_hidden, 1.0 / (self.ff_hidden as f64).sqrt(), rng),
        );
        store.insert(format!("{prefix}.ff.b2"), Tensor::zeros(&[1, d]));
        Ok(())
    }
}

/// Encoder block parameters bound to a tape.
pub struct EncoderBlock<'t> {
    pub heads: Vec<HeadParams<'t>>,
    pub w_o: Var<'t>,
    pub ln1: (Var<'t>, Var<'t>),
    pub ln2: (Var<'t>, Var<'t>),
    pub ff_w1: Var<'t>,
    pub ff_b1: Var<'t>,
    pub ff_w2: Var<'t>,
    pub ff_b2: Var<'t>,
}

impl<'t> EncoderBlock<'t> {
    pub fn bind(bound: &Bound<'t>, prefix: &str, shape: &EncoderShape) -> Result<Self> {
        let g = |n: &str| bound.get(&format!("{prefix}.{n}"));
        let heads = (0..shape.heads)
            .map(|i| {
                Ok(HeadParams {
                    w_q: g(&format!("head{i}.W_Q"))?,
                    w_k: g(&format!("head{i}.W_K"))?,
                    w_v: g(&format!("head{i}.W_V"))?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(EncoderBlock {
            heads,
            w_o: g("W_O")?,
            ln1: (g("ln1.gamma")?, g("ln1.beta")?),
            ln2: (g("ln2.gamma")?, g("ln2.beta")?),
            ff_w1: g("ff.W1")?,
            ff_b1: g("ff.b1")?,
            ff_w2: g("ff.W2")?,
            ff_b2: g("ff.b2")?,
        })
    }
}

/// One post-norm encoder block over an `L × width` sequence.
pub fn transformer_encode<'t>(x: Var<'t>, block: &EncoderBlock<'t>, positional: bool) -> Result<Var<'t>> {
    let shape = x.shape();
    let width = block.w_o.shape()[0];
    if shape.len() != 2 || shape[1] != width {
        return Err(Error::shape("transformer_encode", format!("L × {width}"), format!("{shape:?}")));
    }
    let x = if positional {
        x.add_const(&positional_encoding(shape[0], width))?
    } else {
        x
    };
    let attended = multi_head(x, &block.heads, block.w_o)?;
    let h = x.add(attended)?.layer_norm(block.ln1.0, block.ln1.1)?;
    let ff = h
        .matmul_nt(block.ff_w1)?
        .add_row(block.ff_b1)?
        .relu()?
        .matmul_nt(block.ff_w2)?
        .add_row(block.ff_b2)?;
    h.add(ff)?.layer_norm(block.ln2.0, block.ln2.1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn head<'t>(tape: &'t Tape, q: Tensor, k: Tensor, v: Tensor) -> HeadParams<'t> {
        HeadParams {
            w_q: tape.constant(q),
            w_k: tape.constant(k),
            w_v: tape.constant(v),
        }
    }

    #[test]
    fn single_token_attends_to_itself() {
        let tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let hd = head(&tape, uniform(2, 3, 1.0, &mut rng), uniform(2, 3, 1.0, &mut rng), uniform(2, 3, 1.0, &mut rng));
        let x = tape.constant(Tensor::row(&[0.4, -1.0, 2.0]));
        let (out, attn) = self_attention(x, &hd).unwrap();
        assert_eq!(attn.value().data(), &[1.0]);
        let v = x.value().matmul_nt(&hd.w_v.value()).unwrap();
        assert_eq!(*out.value(), v);
    }

    #[test]
    fn orthogonal_keys_match_hand_softmax() {
        let tape = Tape::new();
        // d = h = 2, identity projections: Q = K = V = X
        let x = Tensor::from_rows(&[[1.0, 0.0], [0.0, 2.0]]);
        let hd = head(&tape, Tensor::eye(2), Tensor::eye(2), Tensor::eye(2));
        let (out, attn) = self_attention(tape.constant(x), &hd).unwrap();
        let s = 1.0 / 2f64.sqrt();
        // scores: row0 = [1, 0]·s, row1 = [0, 4]·s
        let a0 = [s.exp() / (s.exp() + 1.0), 1.0 / (s.exp() + 1.0)];
        let a1 = [1.0 / (1.0 + (4.0 * s).exp()), (4.0 * s).exp() / (1.0 + (4.0 * s).exp())];
        let expected = Tensor::from_rows(&[[a0[0], 2.0 * a0[1]], [a1[0], 2.0 * a1[1]]]);
        assert!(out.value().max_abs_diff(&expected) <= 1e-12);
        for i in 0..2 {
            assert!((attn.value().row_slice(i).iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn identical_rows_give_identical_outputs() {
        let tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let hd = head(&tape, uniform(3, 2, 1.0, &mut rng), uniform(3, 2, 1.0, &mut rng), uniform(3, 2, 1.0, &mut rng));
        let x = tape.constant(Tensor::from_rows(&[[0.3, 0.9]; 4]));
        let out = self_attention(x, &hd).unwrap().0.value();
        for i in 1..4 {
            assert_eq!(out.row_slice(i), out.row_slice(0));
        }
    }

    #[test]
    fn multi_head_composition() {
        let tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = tape.constant(uniform(5, 4, 1.0, &mut rng));
        let h1 = head(&tape, uniform(2, 4, 1.0, &mut rng), uniform(2, 4, 1.0, &mut rng), uniform(2, 4, 1.0, &mut rng));
        let h2 = head(&tape, uniform(2, 4, 1.0, &mut rng), uniform(2, 4, 1.0, &mut rng), uniform(2, 4, 1.0, &mut rng));
        let single = self_attention(x, &h1).unwrap().0.value();

        let one = multi_head(x, &[h1], tape.constant(Tensor::eye(2))).unwrap();
        assert_eq!(*one.value(), *single);

        let twice = multi_head(x, &[h1, h1], tape.constant(Tensor::eye(4))).unwrap().value();
        for i in 0..5 {
            assert_eq!(&twice.row_slice(i)[..2], single.row_slice(i));
            assert_eq!(&twice.row_slice(i)[2..], single.row_slice(i));
        }

        let w_o = uniform(4, 4, 1.0, &mut rng);
        let got = multi_head(x, &[h1, h2], tape.constant(w_o.clone())).unwrap().value();
        let o2 = self_attention(x, &h2).unwrap().0.value();
        let concat = Tensor::from_fn(5, 4, |i, j| if j < 2 { single.get(i, j) } else { o2.get(i, j - 2) });
        assert!(got.max_abs_diff(&concat.matmul(&w_o).unwrap()) <= 1e-12);
        assert!(multi_head(x, &[], tape.constant(Tensor::eye(2))).is_err());
    }

    fn encoder(seed: u64) -> (ParamStore, EncoderShape) {
        let shape = EncoderShape {
            width: 4,
            heads: 2,
            ff_hidden: 6,
        };
        let mut store = ParamStore::new();
        shape.init(&mut store, "enc", &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        (store, shape)
    }

    #[test]
    fn encoder_without_positions_is_permutation_equivariant() {
        let (store, shape) = encoder(4);
        let tape = Tape::new();
        let bound = store.bind(&tape, false);
        let block = EncoderBlock::bind(&bound, "enc", &shape).unwrap();
        let x = uniform(5, 4, 2.0, &mut ChaCha8Rng::seed_from_u64(5));
        let perm = [3, 0, 4, 1, 2];
        let px = Tensor::from_fn(5, 4, |i, j| x.get(perm[i], j));
        let out = transformer_encode(tape.constant(x), &block, false).unwrap().value();
        let pout = transformer_encode(tape.constant(px.clone()), &block, false).unwrap().value();
        for i in 0..5 {
            for j in 0..4 {
                assert!((pout.get(i, j) - out.get(perm[i], j)).abs() <= 1e-12);
            }
        }
        let with_pe = transformer_encode(tape.constant(px), &block, true).unwrap().value();
        assert!(with_pe.max_abs_diff(&pout) > 1e-6);
    }

    #[test]
    fn zero_feed_forward_leaves_normalized_attention() {
        let (mut store, shape) = encoder(6);
        for n in ["ff.W1", "ff.W2"] {
            let t = store.get_mut(&format!("enc.{n}")).unwrap();
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let tape = Tape::new();
        let bound = store.bind(&tape, false);
        let block = EncoderBlock::bind(&bound, "enc", &shape).unwrap();
        let x = tape.constant(uniform(3, 4, 1.0, &mut ChaCha8Rng::seed_from_u64(7)));
        let out = transformer_encode(x, &block, false).unwrap().value();
        let attn = multi_head(x, &block.heads, block.w_o).unwrap();
        let ln = x.add(attn).unwrap().layer_norm(block.ln1.0, block.ln1.1).unwrap().value();
        // the second norm re-normalizes an already unit-variance row
        assert!(out.max_abs_diff(&ln) <= 1e-4);
    }

    #[test]
    fn single_token_block_is_feed_forward_of_that_token() {
        let (store, shape) = encoder(8);
        let tape = Tape::new();
        let bound = store.bind(&tape, false);
        let block = EncoderBlock::bind(&bound, "enc", &shape).unwrap();
        let x = tape.constant(Tensor::row(&[0.2, -0.4, 1.0, 0.0]));
        let out = transformer_encode(x, &block, false).unwrap().value();
        // with one token every head returns its value vector
        let v: Vec<Var> = block.heads.iter().map(|h| x.matmul_nt(h.w_v).unwrap()).collect();
        let attn = tape.concat_cols(&v).unwrap().matmul(block.w_o).unwrap();
        let h = x.add(attn).unwrap().layer_norm(block.ln1.0, block.ln1.1).unwrap();
        let ff = h
            .matmul_nt(block.ff_w1)
            .unwrap()
            .add_row(block.ff_b1)
            .unwrap()
            .relu()
            .unwrap()
            .matmul_nt(block.ff_w2)
            .unwrap()
            .add_row(block.ff_b2)
            .unwrap();
        let expected = h.add(ff).unwrap().layer_norm(block.ln2.0, block.ln2.1).unwrap().value();
        assert!(out.max_abs_diff(&expected) <= 1e-12);
    }
}
