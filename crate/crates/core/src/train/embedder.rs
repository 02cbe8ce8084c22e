use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::{normalize_backward, normalize_in_place};
use crate::matrix::{dot, Matrix};
use crate::scalar::Scalar;

/// `x ↦ normalize(W2 · dropout(relu(W1 x + b1)) + b2)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedder<T> {
    pub w1: Matrix<T>,
    pub b1: Vec<T>,
    pub w2: Matrix<T>,
    pub b2: Vec<T>,
}

/// Gradients (or optimizer buffers) shaped like an [`Embedder`].
pub type EmbedderGrads<T> = Embedder<T>;

/// Activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct Trace<T> {
    input: Matrix<T>,
    pre: Matrix<T>,
    // post-ReLU, post-dropout hidden activations
    hidden: Matrix<T>,
    // dropout multiplier per hidden unit (0 or 1/(1-p)), empty when dropout was off
    keep: Vec<T>,
    norms: Vec<T>,
    pub output: Matrix<T>,
}

fn gaussian<T: Scalar>(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Matrix<T> {
    let data = (0..rows * cols)
        .map(|_| T::from_f64_lossy(std * rng.sample::<f64, _>(StandardNormal)))
        .collect();
    Matrix::from_vec(rows, cols, data).expect("shape")
}

/// `x · wᵀ + b`, one output row per input row.
pub(crate) fn linear<T: Scalar>(x: &Matrix<T>, w: &Matrix<T>, b: &[T], round: fn(T) -> T) -> Matrix<T> {
    let mut out = Matrix::zeros(x.rows(), w.rows());
    out.as_mut_slice()
        .par_chunks_mut(w.rows().max(1))
        .enumerate()
        .for_each(|(i, o)| {
            let xi = x.row(i);
            for (j, oj) in o.iter_mut().enumerate() {
                *oj = round(dot(xi, w.row(j)) + b[j]);
            }
        });
    out
}

/// `dzᵀ · x`: row `o` is `Σ_i dz[i][o] · x_i`, accumulated in sample order.
pub(crate) fn weight_grad<T: Scalar>(dz: &Matrix<T>, x: &Matrix<T>, round: fn(T) -> T) -> Matrix<T> {
    let mut out = Matrix::zeros(dz.cols(), x.cols());
    out.as_mut_slice()
        .par_chunks_mut(x.cols().max(1))
        .enumerate()
        .for_each(|(o, row)| {
            for i in 0..dz.rows() {
                let g = dz[(i, o)];
                for (r, &xv) in row.iter_mut().zip(x.row(i)) {
                    *r = *r + g * xv;
                }
            }
            row.iter_mut().for_each(|r| *r = round(*r));
        });
    out
}

pub(crate) fn bias_grad<T: Scalar>(dz: &Matrix<T>, round: fn(T) -> T) -> Vec<T> {
    (0..dz.cols())
        .map(|o| round((0..dz.rows()).fold(T::zero(), |a, i| a + dz[(i, o)])))
        .collect()
}

/// `dz · w`: gradient with respect to the layer input.
pub(crate) fn input_grad<T: Scalar>(dz: &Matrix<T>, w: &Matrix<T>, round: fn(T) -> T) -> Matrix<T> {
    let mut out = Matrix::zeros(dz.rows(), w.cols());
    out.as_mut_slice()
        .par_chunks_mut(w.cols().max(1))
        .enumerate()
        .for_each(|(i, row)| {
            for o in 0..w.rows() {
                let g = dz[(i, o)];
                for (r, &wv) in row.iter_mut().zip(w.row(o)) {
                    *r = *r + g * wv;
                }
            }
            row.iter_mut().for_each(|r| *r = round(*r));
        });
    out
}

fn ident<T>(x: T) -> T {
    x
}

impl<T: Scalar> Embedder<T> {
    /// He-initialized hidden layer, zero biases.
    pub fn init(input: usize, hidden: usize, embed: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            w1: gaussian(rng, hidden, input, (2.0 / input as f64).sqrt()),
            b1: vec![T::zero(); hidden],
            w2: gaussian(rng, embed, hidden, (1.0 / hidden as f64).sqrt()),
            b2: vec![T::zero(); embed],
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            w1: Matrix::zeros(self.w1.rows(), self.w1.cols()),
            b1: vec![T::zero(); self.b1.len()],
            w2: Matrix::zeros(self.w2.rows(), self.w2.cols()),
            b2: vec![T::zero(); self.b2.len()],
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w1.cols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.rows()
    }

    pub fn embed_dim(&self) -> usize {
        self.w2.rows()
    }

    pub fn tensors(&self) -> [&[T]; 4] {
        [self.w1.as_slice(), &self.b1, self.w2.as_slice(), &self.b2]
    }

    pub fn tensors_mut(&mut self) -> [&mut [T]; 4] {
        [self.w1.as_mut_slice(), &mut self.b1, self.w2.as_mut_slice(), &mut self.b2]
    }

    pub fn map(&self, f: impl Fn(T) -> T + Copy) -> Self {
        Self {
            w1: self.w1.map(f),
            b1: self.b1.iter().map(|&x| f(x)).collect(),
            w2: self.w2.map(f),
            b2: self.b2.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|x| x.is_finite()))
    }

    /// Unit embeddings with dropout off.
    pub fn embed(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        Ok(self.forward(x, 0.0, None, ident)?.output)
    }

    /// Forward pass. Dropout with ratio `p` is applied per hidden unit when an
    /// RNG is supplied; `round` is applied to every produced activation.
    pub fn forward(
        &self,
        x: &Matrix<T>,
        p: f64,
        rng: Option<&mut ChaCha8Rng>,
        round: fn(T) -> T,
    ) -> Result<Trace<T>> {
        if x.cols() != self.input_dim() {
            return Err(Error::DimMismatch {
                expected: self.input_dim(),
                found: x.cols(),
            });
        }
        let pre = linear(x, &self.w1, &self.b1, round);
        let mut hidden = pre.map(|v| v.max(T::zero()));
        let keep = match rng {
            Some(rng) if p > 0.0 => {
                let scale = T::from_f64_lossy(1.0 / (1.0 - p));
                let keep: Vec<T> = (0..hidden.rows() * hidden.cols())
                    .map(|_| if rng.random::<f64>() < p { T::zero() } else { scale })
                    .collect();
                for (h, &k) in hidden.as_mut_slice().iter_mut().zip(&keep) {
                    *h = round(*h * k);
                }
                keep
            }
            _ => Vec::new(),
        };
        let mut output = linear(&hidden, &self.w2, &self.b2, round);
        let mut norms = Vec::with_capacity(output.rows());
        for i in 0..output.rows() {
            norms.push(normalize_in_place(output.row_mut(i)).ok_or(Error::ZeroRow { row: i })?);
        }
        Ok(Trace {
            input: x.clone(),
            pre,
            hidden,
            keep,
            norms,
            output,
        })
    }

    /// Gradients of all parameters given `d_out`, the gradient with respect to
    /// the unit embeddings. `round` is applied at every layer boundary.
    pub fn backward(&self, trace: &Trace<T>, d_out: &Matrix<T>, round: fn(T) -> T) -> EmbedderGrads<T> {
        let n = d_out.rows();
        let e = self.embed_dim();
        let mut de = Matrix::zeros(n, e);
        for i in 0..n {
            let g = normalize_backward(trace.output.row(i), d_out.row(i), trace.norms[i]);
            for (o, v) in de.row_mut(i).iter_mut().zip(g) {
                *o = round(v);
            }
        }
        let w2 = weight_grad(&de, &trace.hidden, round);
        let b2 = bias_grad(&de, round);
        let mut dz = input_grad(&de, &self.w2, round);
        for (idx, d) in dz.as_mut_slice().iter_mut().enumerate() {
            let k = if trace.keep.is_empty() { T::one() } else { trace.keep[idx] };
            let active = trace.pre.as_slice()[idx] > T::zero();
            *d = if active { round(*d * k) } else { T::zero() };
        }
        let w1 = weight_grad(&dz, &trace.input, round);
        let b1 = bias_grad(&dz, round);
        Embedder { w1, b1, w2, b2 }
    }
}
