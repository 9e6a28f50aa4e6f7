//! Reverse-mode accumulation over a fixed operation graph.
//!
//! The tape is eager: each op computes its value when recorded. The op set
//! is exactly what the losses need — affine maps, 1-d convolutions, smooth
//! activations, squared-distance logits, column softmax, embedding lookups
//! (soft and straight-through) and elementwise arithmetic. Gradients flow
//! into a caller-owned flat vector through `Param` leaves that carry an
//! offset into it.

use crate::error::{Error, Result};
use crate::mat::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Const,
    Param {
        offset: usize,
    },
    Add(usize, usize),
    Sub(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    SumSquares(usize),
    Silu(usize),
    Affine {
        input: usize,
        weight: usize,
        bias: usize,
    },
    Reshape(usize),
    NegSqDistLogits {
        z: usize,
        codebook: usize,
    },
    SoftmaxCols {
        input: usize,
        temperature: f64,
    },
    SoftLookup {
        weights: usize,
        codebook: usize,
    },
    HardLookupSt {
        weights: usize,
        codebook: usize,
        indices: Vec<usize>,
    },
    SinusoidLift {
        input: usize,
        freqs: Vec<f64>,
    },
}

struct Node {
    value: Matrix,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn constant(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Const)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(Matrix::from_vec(1, 1, vec![v]).expect("1x1"))
    }

    /// Leaf bound to `grad[offset .. offset + m.len()]` in row-major order.
    pub fn param(&mut self, m: Matrix, offset: usize) -> Var {
        self.push(m, Op::Param { offset })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.nodes[a.0].value.add(&self.nodes[b.0].value);
        self.push(value, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.nodes[a.0].value.sub(&self.nodes[b.0].value);
        self.push(value, Op::Sub(a.0, b.0))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.nodes[a.0].value.scale(s);
        self.push(value, Op::Scale(a.0, s))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = self.nodes[a.0].value.map(|x| x + c);
        self.push(value, Op::AddScalar(a.0))
    }

    pub fn sum_squares(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.frob_sq();
        let value = Matrix::from_vec(1, 1, vec![v]).expect("1x1");
        self.push(value, Op::SumSquares(a.0))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.map(|x| x * sigmoid(x));
        self.push(value, Op::Silu(a.0))
    }

    /// weight (m x n) applied to input (n x 1) plus bias (m x 1).
    pub fn affine(&mut self, input: Var, weight: Var, bias: Var) -> Var {
        let w = &self.nodes[weight.0].value;
        let x = &self.nodes[input.0].value;
        let b = &self.nodes[bias.0].value;
        assert_eq!(x.cols(), 1, "affine input must be a column");
        assert_eq!(w.cols(), x.rows(), "affine shape mismatch");
        assert_eq!(b.rows(), w.rows(), "affine bias mismatch");
        let value = Matrix::from_fn(w.rows(), 1, |r, _| {
            let mut acc = b.at(r, 0);
            for c in 0..w.cols() {
                acc += w.at(r, c) * x.at(c, 0);
            }
            acc
        });
        self.push(
            value,
            Op::Affine {
                input: input.0,
                weight: weight.0,
                bias: bias.0,
            },
        )
    }

    /// Same data, new shape; rows*cols must match.
    pub fn reshape(&mut self, input: Var, rows: usize, cols: usize) -> Var {
        let x = &self.nodes[input.0].value;
        assert_eq!(x.len(), rows * cols, "reshape must preserve length");
        let value = Matrix::from_vec(rows, cols, x.data().to_vec()).expect("length checked");
        self.push(value, Op::Reshape(input.0))
    }

    /// logits[k][n] = -||z[:,n] - e_k||^2 with codebook (K x d), z (d x N).
    pub fn neg_sqdist_logits(&mut self, z: Var, codebook: Var) -> Var {
        let zm = &self.nodes[z.0].value;
        let e = &self.nodes[codebook.0].value;
        assert_eq!(e.cols(), zm.rows(), "codebook dim mismatch");
        let value = Matrix::from_fn(e.rows(), zm.cols(), |k, n| {
            let mut acc = 0.0;
            for i in 0..zm.rows() {
                let d = zm.at(i, n) - e.at(k, i);
                acc += d * d;
            }
            -acc
        });
        self.push(
            value,
            Op::NegSqDistLogits {
                z: z.0,
                codebook: codebook.0,
            },
        )
    }

    pub fn softmax_cols(&mut self, input: Var, temperature: f64) -> Var {
        assert!(temperature > 0.0);
        let value = crate::quantizer::softmax_cols(&self.nodes[input.0].value, temperature);
        self.push(
            value,
            Op::SoftmaxCols {
                input: input.0,
                temperature,
            },
        )
    }

    /// out[:,n] = sum_k w[k,n] e_k with weights (K x N), codebook (K x d).
    pub fn soft_lookup(&mut self, weights: Var, codebook: Var) -> Var {
        let w = &self.nodes[weights.0].value;
        let e = &self.nodes[codebook.0].value;
        assert_eq!(w.rows(), e.rows());
        let value = Matrix::from_fn(e.cols(), w.cols(), |i, n| {
            (0..e.rows()).map(|k| w.at(k, n) * e.at(k, i)).sum()
        });
        self.push(
            value,
            Op::SoftLookup {
                weights: weights.0,
                codebook: codebook.0,
            },
        )
    }

    /// Straight-through lookup: forward takes the embedding at the column
    /// argmax of `weights`; backward treats the output as the soft mixture,
    /// so weight gradients follow the relaxed path while the codebook sees
    /// the hard selection.
    pub fn hard_lookup_st(&mut self, weights: Var, codebook: Var) -> Var {
        let w = &self.nodes[weights.0].value;
        let e = &self.nodes[codebook.0].value;
        assert_eq!(w.rows(), e.rows());
        let indices: Vec<usize> = (0..w.cols())
            .map(|n| {
                let mut best = 0usize;
                for k in 1..w.rows() {
                    if w.at(k, n) > w.at(best, n) {
                        best = k;
                    }
                }
                best
            })
            .collect();
        let value = Matrix::from_fn(e.cols(), w.cols(), |i, n| e.at(indices[n], i));
        self.push(
            value,
            Op::HardLookupSt {
                weights: weights.0,
                codebook: codebook.0,
                indices,
            },
        )
    }

    /// Sinusoidal feature lift: the identity rows followed, per frequency,
    /// by sin and cos of pi * f * value for every input row. Turns angular
    /// structure of the latent into linearly accessible channels, the same
    /// treatment the step index gets from its embedding.
    pub fn sinusoid_lift(&mut self, input: Var, freqs: &[f64]) -> Var {
        let x = &self.nodes[input.0].value;
        let value = sinusoid_lift_forward(x, freqs);
        self.push(
            value,
            Op::SinusoidLift {
                input: input.0,
                freqs: freqs.to_vec(),
            },
        )
    }

    /// Column argmax of a recorded value (no gradient).
    pub fn argmax_cols(&self, v: Var) -> Vec<usize> {
        let m = &self.nodes[v.0].value;
        (0..m.cols())
            .map(|n| {
                let mut best = 0usize;
                for k in 1..m.rows() {
                    if m.at(k, n) > m.at(best, n) {
                        best = k;
                    }
                }
                best
            })
            .collect()
    }

    /// Backpropagates `seed` from a scalar loss node, accumulating parameter
    /// gradients into `grad`. Returns the loss value.
    pub fn backward(&self, loss: Var, seed: f64, grad: &mut [f64]) -> Result<f64> {
        let loss_val = {
            let v = &self.nodes[loss.0].value;
            if v.shape() != (1, 1) {
                return Err(Error::shape("loss must be a 1x1 node"));
            }
            v.at(0, 0)
        };
        if !loss_val.is_finite() {
            return Err(Error::NonFinite {
                term: "loss".to_string(),
                value: loss_val,
            });
        }

        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::from_vec(1, 1, vec![seed]).expect("1x1"));

        for idx in (0..=loss.0).rev() {
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            match &self.nodes[idx].op {
                Op::Const => {}
                Op::Param { offset } => {
                    let off = *offset;
                    let data = g.data();
                    if off + data.len() > grad.len() {
                        return Err(Error::shape("parameter offset outside gradient buffer"));
                    }
                    for (i, &v) in data.iter().enumerate() {
                        grad[off + i] += v;
                    }
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, &g);
                    accumulate(&mut grads, *b, &g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, &g);
                    accumulate(&mut grads, *b, &g.scale(-1.0));
                }
                Op::Scale(a, s) => {
                    accumulate(&mut grads, *a, &g.scale(*s));
                }
                Op::AddScalar(a) => {
                    accumulate(&mut grads, *a, &g);
                }
                Op::SumSquares(a) => {
                    let gv = g.at(0, 0);
                    let da = self.nodes[*a].value.scale(2.0 * gv);
                    accumulate(&mut grads, *a, &da);
                }
                Op::Silu(a) => {
                    let x = &self.nodes[*a].value;
                    let da = x.zip(&g, |xv, gv| {
                        let s = sigmoid(xv);
                        gv * s * (1.0 + xv * (1.0 - s))
                    });
                    accumulate(&mut grads, *a, &da);
                }
                Op::Affine { input, weight, bias } => {
                    let x = &self.nodes[*input].value;
                    let w = &self.nodes[*weight].value;
                    let dw = Matrix::from_fn(w.rows(), w.cols(), |r, c| g.at(r, 0) * x.at(c, 0));
                    let dx = Matrix::from_fn(x.rows(), 1, |c, _| {
                        (0..w.rows()).map(|r| g.at(r, 0) * w.at(r, c)).sum()
                    });
                    accumulate(&mut grads, *weight, &dw);
                    accumulate(&mut grads, *bias, &g);
                    accumulate(&mut grads, *input, &dx);
                }
                Op::Reshape(a) => {
                    let x = &self.nodes[*a].value;
                    let back = Matrix::from_vec(x.rows(), x.cols(), g.data().to_vec())
                        .expect("same length");
                    accumulate(&mut grads, *a, &back);
                }
                Op::NegSqDistLogits { z, codebook } => {
                    let zm = &self.nodes[*z].value;
                    let e = &self.nodes[*codebook].value;
                    let mut de = Matrix::zeros(e.rows(), e.cols());
                    let mut dz = Matrix::zeros(zm.rows(), zm.cols());
                    for k in 0..e.rows() {
                        for n in 0..zm.cols() {
                            let gv = g.at(k, n);
                            if gv == 0.0 {
                                continue;
                            }
                            for i in 0..zm.rows() {
                                let diff = zm.at(i, n) - e.at(k, i);
                                de.set(k, i, de.at(k, i) + gv * 2.0 * diff);
                                dz.set(i, n, dz.at(i, n) - gv * 2.0 * diff);
                            }
                        }
                    }
                    accumulate(&mut grads, *codebook, &de);
                    accumulate(&mut grads, *z, &dz);
                }
                Op::SoftmaxCols { input, temperature } => {
                    let y = &self.nodes[idx].value;
                    let mut da = Matrix::zeros(y.rows(), y.cols());
                    for n in 0..y.cols() {
                        let dot: f64 = (0..y.rows()).map(|k| g.at(k, n) * y.at(k, n)).sum();
                        for k in 0..y.rows() {
                            da.set(k, n, y.at(k, n) * (g.at(k, n) - dot) / temperature);
                        }
                    }
                    accumulate(&mut grads, *input, &da);
                }
                Op::SoftLookup { weights, codebook } => {
                    let w = &self.nodes[*weights].value;
                    let e = &self.nodes[*codebook].value;
                    let dw = Matrix::from_fn(w.rows(), w.cols(), |k, n| {
                        (0..e.cols()).map(|i| g.at(i, n) * e.at(k, i)).sum()
                    });
                    let de = Matrix::from_fn(e.rows(), e.cols(), |k, i| {
                        (0..w.cols()).map(|n| w.at(k, n) * g.at(i, n)).sum()
                    });
                    accumulate(&mut grads, *weights, &dw);
                    accumulate(&mut grads, *codebook, &de);
                }
                Op::SinusoidLift { input, freqs } => {
                    let x = &self.nodes[*input].value;
                    let d = x.rows();
                    let mut dx = Matrix::zeros(d, x.cols());
                    for c in 0..g.rows() {
                        let coord = c % d;
                        let kind = c / d;
                        for n in 0..x.cols() {
                            let gv = g.at(c, n);
                            if gv == 0.0 {
                                continue;
                            }
                            let deriv = if kind == 0 {
                                1.0
                            } else {
                                let f = freqs[(kind - 1) / 2];
                                let arg = std::f64::consts::PI * f * x.at(coord, n);
                                let scale = std::f64::consts::PI * f;
                                if (kind - 1) % 2 == 0 {
                                    scale * arg.cos()
                                } else {
                                    -scale * arg.sin()
                                }
                            };
                            dx.set(coord, n, dx.at(coord, n) + gv * deriv);
                        }
                    }
                    accumulate(&mut grads, *input, &dx);
                }
                Op::HardLookupSt {
                    weights,
                    codebook,
                    indices,
                } => {
                    let w = &self.nodes[*weights].value;
                    let e = &self.nodes[*codebook].value;
                    // soft path into the relaxed weights
                    let dw = Matrix::from_fn(w.rows(), w.cols(), |k, n| {
                        (0..e.cols()).map(|i| g.at(i, n) * e.at(k, i)).sum()
                    });
                    // hard one-hot path into the embeddings
                    let mut de = Matrix::zeros(e.rows(), e.cols());
                    for (n, &k) in indices.iter().enumerate() {
                        for i in 0..e.cols() {
                            de.set(k, i, de.at(k, i) + g.at(i, n));
                        }
                    }
                    accumulate(&mut grads, *weights, &dw);
                    accumulate(&mut grads, *codebook, &de);
                }
            }
        }
        Ok(loss_val)
    }
}

fn accumulate(grads: &mut [Option<Matrix>], idx: usize, contribution: &Matrix) {
    match &mut grads[idx] {
        Some(existing) => {
            let sum = existing.add(contribution);
            *existing = sum;
        }
        slot @ None => *slot = Some(contribution.clone()),
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Shared forward kernel for the lift op and the plain prediction path.
/// Row c of the output is: the input row c for c < d, then sin/cos pairs
/// of pi * f * value per frequency, coordinate-major within each block.
pub fn sinusoid_lift_forward(x: &Matrix, freqs: &[f64]) -> Matrix {
    let d = x.rows();
    Matrix::from_fn(d * (1 + 2 * freqs.len()), x.cols(), |c, n| {
        let coord = c % d;
        let kind = c / d;
        let v = x.at(coord, n);
        if kind == 0 {
            v
        } else {
            let arg = std::f64::consts::PI * freqs[(kind - 1) / 2] * v;
            if (kind - 1) % 2 == 0 {
                arg.sin()
            } else {
                arg.cos()
            }
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    /// Central finite difference of a scalar function of a flat parameter
    /// vector; the independent check every op must pass.
    fn finite_diff(f: &dyn Fn(&[f64]) -> f64, params: &[f64], h: f64) -> Vec<f64> {
        let mut grad = vec![0.0; params.len()];
        let mut work = params.to_vec();
        for i in 0..params.len() {
            work[i] = params[i] + h;
            let up = f(&work);
            work[i] = params[i] - h;
            let down = f(&work);
            work[i] = params[i];
            grad[i] = (up - down) / (2.0 * h);
        }
        grad
    }

    fn assert_grad_close(analytic: &[f64], numeric: &[f64], tol: f64) {
        for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
            let denom = a.abs().max(n.abs()).max(1e-6);
            assert!(
                (a - n).abs() / denom < tol,
                "coordinate {i}: analytic {a} vs numeric {n}"
            );
        }
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let mut tape = Tape::new();
        let params = Matrix::from_vec(1, 3, vec![1.0, 2.0, 3.0]).unwrap();
        let _p = tape.param(params, 0);
        let c = tape.scalar(5.0);
        let mut grad = vec![0.0; 3];
        let v = tape.backward(c, 1.0, &mut grad).unwrap();
        assert_eq!(v, 5.0);
        assert_eq!(grad, vec![0.0; 3]);
    }

    #[test]
    fn quadratic_gradient_is_the_parameter() {
        let mut tape = Tape::new();
        let values = vec![0.4, -1.2, 2.5, 0.0];
        let p = tape.param(Matrix::from_vec(1, 4, values.clone()).unwrap(), 0);
        let ss = tape.sum_squares(p);
        let half = tape.scale(ss, 0.5);
        let mut grad = vec![0.0; 4];
        tape.backward(half, 1.0, &mut grad).unwrap();
        assert_eq!(grad, values);
    }

    #[test]
    fn every_op_passes_finite_differences() {
        // One composite graph touching all smooth ops, differentiated
        // against central differences at several random points.
        let mut rng = ChaCha12Rng::seed_from_u64(77);
        let d = 2;
        let n = 4;
        let k = 3;
        let hidden = 5;
        let freqs = [0.7, 1.3];
        let lifted = d * (1 + 2 * freqs.len()) * n; // flattened lift width
        let n_net = hidden * lifted + hidden // input affine
            + hidden * hidden + hidden // mid affine
            + d * n * hidden + d * n; // output affine
        let total = n_net + k * d;

        let z_raw = Matrix::randn(d, n, &mut rng);
        let gumbel = crate::mat::gumbel_matrix(k, n, &mut rng);
        let eps = Matrix::randn(d, n, &mut rng);

        let run = |params: &[f64]| -> (f64, Vec<f64>) {
            let mut tape = Tape::new();
            let mut off = 0usize;
            let take = |tape: &mut Tape, rows: usize, cols: usize, off: &mut usize| {
                let m = Matrix::from_vec(rows, cols, params[*off..*off + rows * cols].to_vec())
                    .unwrap();
                let v = tape.param(m, *off);
                *off += rows * cols;
                v
            };
            let w1 = take(&mut tape, hidden, lifted, &mut off);
            let b1 = take(&mut tape, hidden, 1, &mut off);
            let w2 = take(&mut tape, hidden, hidden, &mut off);
            let b2 = take(&mut tape, hidden, 1, &mut off);
            let w3 = take(&mut tape, d * n, hidden, &mut off);
            let b3 = take(&mut tape, d * n, 1, &mut off);
            let cb = take(&mut tape, k, d, &mut off);

            let z = tape.constant(z_raw.clone());
            let zs = tape.scale(z, 1.0 / 0.8);
            let zl = tape.sinusoid_lift(zs, &freqs);
            let flat = tape.reshape(zl, lifted, 1);
            let h1 = tape.affine(flat, w1, b1);
            let a1 = tape.silu(h1);
            let h2 = tape.affine(a1, w2, b2);
            let a2 = tape.silu(h2);
            let out_flat = tape.affine(a2, w3, b3);
            let out = tape.reshape(out_flat, d, n);

            let eps_v = tape.constant(eps.clone());
            let resid = tape.sub(eps_v, out);
            let diff_loss = tape.sum_squares(resid);
            let diff_scaled = tape.scale(diff_loss, -0.37);

            let logits = tape.neg_sqdist_logits(z, cb);
            let gnoise = tape.constant(gumbel.clone());
            let noisy = tape.add(logits, gnoise);
            let soft = tape.softmax_cols(noisy, 0.8);
            let mix = tape.soft_lookup(soft, cb);
            let r2 = tape.sub(z, mix);
            let reg = tape.sum_squares(r2);
            let reg_scaled = tape.scale(reg, 0.9);

            let sum = tape.add(diff_scaled, reg_scaled);
            let loss = tape.add_scalar(sum, 0.123);

            let mut grad = vec![0.0; total];
            let value = tape.backward(loss, 1.0, &mut grad).unwrap();
            (value, grad)
        };

        for _ in 0..3 {
            let params: Vec<f64> = (0..total)
                .map(|_| Matrix::randn(1, 1, &mut rng).at(0, 0) * 0.5)
                .collect();
            let (_, analytic) = run(&params);
            let fd = finite_diff(&|p| run(p).0, &params, 1e-5);
            assert_grad_close(&analytic, &fd, 1e-5);
        }
    }

    #[test]
    fn lift_gradient_flows_through_an_input_parameter() {
        // differentiating through the lift itself (input as parameter)
        let freqs = [0.9, 2.1];
        let init = vec![0.3, -0.6, 1.2, 0.05];
        let run = |params: &[f64]| -> (f64, Vec<f64>) {
            let mut tape = Tape::new();
            let p = tape.param(Matrix::from_vec(2, 2, params.to_vec()).unwrap(), 0);
            let l = tape.sinusoid_lift(p, &freqs);
            let ss = tape.sum_squares(l);
            let mut grad = vec![0.0; 4];
            let v = tape.backward(ss, 1.0, &mut grad).unwrap();
            (v, grad)
        };
        let (_, analytic) = run(&init);
        let fd = finite_diff(&|p| run(p).0, &init, 1e-6);
        assert_grad_close(&analytic, &fd, 1e-6);
    }

    #[test]
    fn straight_through_lookup_gradients() {
        // Forward value is the hard selection; the codebook gradient lands
        // on the selected row and the weight gradient follows the mixture.
        let mut tape = Tape::new();
        let w = Matrix::from_vec(3, 2, vec![0.1, 0.6, 0.7, 0.3, 0.2, 0.1]).unwrap();
        let e = Matrix::from_vec(3, 2, vec![1.0, 0.0, 0.0, 1.0, -1.0, -1.0]).unwrap();
        let wv = tape.constant(w);
        let ev = tape.param(e.clone(), 0);
        let out = tape.hard_lookup_st(wv, ev);
        // argmax of col 0 is k=1 (0.7), of col 1 is k=0 (0.6)
        assert_eq!(tape.value(out).column(0), vec![0.0, 1.0]);
        assert_eq!(tape.value(out).column(1), vec![1.0, 0.0]);
        let loss = tape.sum_squares(out);
        let mut grad = vec![0.0; 6];
        tape.backward(loss, 1.0, &mut grad).unwrap();
        // rows 0 and 1 receive gradient, row 2 does not
        assert!(grad[0..4].iter().any(|&g| g != 0.0));
        assert_eq!(&grad[4..6], &[0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let v = tape.constant(Matrix::zeros(2, 2));
        let mut grad = vec![0.0; 0];
        assert!(tape.backward(v, 1.0, &mut grad).is_err());
    }

    #[test]
    fn backward_flags_non_finite_loss() {
        let mut tape = Tape::new();
        let v = tape.scalar(f64::NAN);
        let mut grad = vec![0.0; 0];
        assert!(matches!(
            tape.backward(v, 1.0, &mut grad),
            Err(Error::NonFinite { .. })
        ));
    }
}
