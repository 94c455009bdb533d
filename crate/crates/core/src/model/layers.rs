//! Parameter registration and tape application for the basic layers.

use rand::Rng;

use crate::params::{fan_in_uniform, Binder, ParamStore, Tag};
use crate::tape::Var;
use crate::Result;

use ndarray::Array2;

pub(crate) struct Registrar<'a, R: Rng> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut R,
    pub tag: Tag,
}

impl<R: Rng> Registrar<'_, R> {
    pub fn raw(&mut self, name: &str, value: Array2<f64>) -> Result<()> {
        self.store.insert(name, self.tag, value)
    }

    pub fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Result<()> {
        let w = fan_in_uniform(self.rng, fan_in, fan_out);
        let bound = 1.0 / (fan_in as f64).sqrt();
        let b = Array2::from_shape_fn((1, fan_out), |_| self.rng.random_range(-bound..=bound));
        self.raw(&format!("{name}.w"), w)?;
        self.raw(&format!("{name}.b"), b)
    }

    pub fn layer_norm(&mut self, name: &str, d: usize) -> Result<()> {
        self.raw(&format!("{name}.gamma"), Array2::ones((1, d)))?;
        self.raw(&format!("{name}.beta"), Array2::zeros((1, d)))
    }

    pub fn mlp(&mut self, name: &str, d_in: usize, hidden: usize, d_out: usize) -> Result<()> {
        self.linear(&format!("{name}.fc1"), d_in, hidden)?;
        self.linear(&format!("{name}.fc2"), hidden, d_out)
    }

    /// Query/key/value projections into `inner` dims and an output
    /// projection back to `d`.
    pub fn attention(&mut self, name: &str, d: usize, inner: usize) -> Result<()> {
        for p in ["q", "k", "v"] {
            self.linear(&format!("{name}.{p}"), d, inner)?;
        }
        self.linear(&format!("{name}.out"), inner, d)
    }
}

pub(crate) fn linear(b: &mut Binder, name: &str, x: Var) -> Var {
    let w = b.param(&format!("{name}.w"));
    let bias = b.param(&format!("{name}.b"));
    let y = b.tape.matmul(x, w);
    b.tape.add_row(y, bias)
}

pub(crate) fn layer_norm(b: &mut Binder, name: &str, x: Var) -> Var {
    let g = b.param(&format!("{name}.gamma"));
    let beta = b.param(&format!("{name}.beta"));
    b.tape.layer_norm(x, g, beta)
}

pub(crate) fn mlp(b: &mut Binder, name: &str, x: Var) -> Var {
    let h = linear(b, &format!("{name}.fc1"), x);
    let h = b.tape.gelu(h);
    linear(b, &format!("{name}.fc2"), h)
}

/// Multi-head scaled dot-product attention. No positional information is
/// added here; callers add encodings to `q` and `k` beforehand.
pub(crate) fn attention(b: &mut Binder, name: &str, q: Var, k: Var, v: Var, heads: usize) -> Var {
    let qp = linear(b, &format!("{name}.q"), q);
    let kp = linear(b, &format!("{name}.k"), k);
    let vp = linear(b, &format!("{name}.v"), v);
    let inner = b.tape.shape(qp).1;
    let dh = inner / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (lo, hi) = (h * dh, (h + 1) * dh);
        let qh = b.tape.slice_cols(qp, lo, hi);
        let kh = b.tape.slice_cols(kp, lo, hi);
        let vh = b.tape.slice_cols(vp, lo, hi);
        let scores = b.tape.matmul_nt(qh, kh);
        let scores = b.tape.scale(scores, scale);
        let weights = b.tape.softmax_rows(scores);
        outs.push(b.tape.matmul(weights, vh));
    }
    let joined = if heads == 1 {
        outs[0]
    } else {
        b.tape.concat_cols(&outs)
    };
    linear(b, &format!("{name}.out"), joined)
}
