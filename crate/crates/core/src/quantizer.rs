//! Codebook storage, nearest-neighbour assignment, Gumbel-Softmax
//! relaxations and the temperature-weighted regularizer.

use rand::Rng;

use crate::error::{Error, Result};
use crate::mat::{gumbel_matrix, Matrix};

/// Finite set of embedding vectors e_0..e_{K-1} in R^d, stored as a K x d
/// matrix with one row per embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    vectors: Matrix,
    trainable: bool,
}

impl Codebook {
    pub fn new(vectors: Matrix, trainable: bool) -> Result<Self> {
        if vectors.rows() == 0 || vectors.cols() == 0 {
            return Err(Error::invalid("codebook must have K >= 1 and d >= 1"));
        }
        if !vectors.all_finite() {
            return Err(Error::invalid("codebook vectors must be finite"));
        }
        Ok(Codebook { vectors, trainable })
    }

    pub fn k(&self) -> usize {
        self.vectors.rows()
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }

    pub fn trainable(&self) -> bool {
        self.trainable
    }

    pub fn vectors(&self) -> &Matrix {
        &self.vectors
    }

    pub fn vector(&self, k: usize) -> Vec<f64> {
        (0..self.dim()).map(|i| self.vectors.at(k, i)).collect()
    }

    /// Replaces the embedding matrix; used by the optimizer between steps.
    pub fn set_vectors(&mut self, vectors: Matrix) -> Result<()> {
        if vectors.shape() != self.vectors.shape() {
            return Err(Error::shape("codebook shape cannot change"));
        }
        self.vectors = vectors;
        Ok(())
    }

    /// Looks up one embedding per column index: result is d x N.
    pub fn lookup(&self, indices: &[usize]) -> Matrix {
        Matrix::from_fn(self.dim(), indices.len(), |i, n| {
            self.vectors.at(indices[n], i)
        })
    }

    fn sq_dist(&self, z: &Matrix, n: usize, k: usize) -> f64 {
        let mut acc = 0.0;
        for i in 0..self.dim() {
            let diff = z.at(i, n) - self.vectors.at(k, i);
            acc += diff * diff;
        }
        acc
    }
}

/// Variational temperature tau plus per-step scaling temperatures tau_t,
/// combined into the regularizer weight gamma_t = -1/tau_t + 1/tau.
#[derive(Clone, Debug, PartialEq)]
pub struct TemperatureSchedule {
    tau: f64,
    tau_t: Vec<f64>, // index t in 0..=T
}

impl TemperatureSchedule {
    pub fn new(tau: f64, tau_t: Vec<f64>) -> Result<Self> {
        if !(tau > 0.0) || tau_t.iter().any(|&v| !(v > 0.0)) {
            return Err(Error::invalid("all temperatures must be strictly positive"));
        }
        Ok(TemperatureSchedule { tau, tau_t })
    }

    /// tau_t == tau at every step, so gamma_t vanishes identically.
    pub fn constant(tau: f64, steps: usize) -> Result<Self> {
        Self::new(tau, vec![tau; steps + 1])
    }

    /// Geometric interpolation of tau_t from `start` at t = 0 down to `end`
    /// at t = T.
    pub fn geometric(tau: f64, start: f64, end: f64, steps: usize) -> Result<Self> {
        if !(start > 0.0 && end > 0.0) {
            return Err(Error::invalid("temperature endpoints must be positive"));
        }
        let tau_t = (0..=steps)
            .map(|t| {
                if steps == 0 {
                    start
                } else {
                    let frac = t as f64 / steps as f64;
                    start * (end / start).powf(frac)
                }
            })
            .collect();
        Self::new(tau, tau_t)
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn tau_t(&self, t: usize) -> f64 {
        self.tau_t[t]
    }

    pub fn max_step(&self) -> usize {
        self.tau_t.len() - 1
    }

    pub fn gamma(&self, t: usize) -> f64 {
        -1.0 / self.tau_t[t] + 1.0 / self.tau
    }
}

/// Discrete assignment per position, optionally carrying the relaxed
/// simplex weights it was obtained from.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteState {
    pub indices: Vec<usize>,
    pub relaxed: Option<Matrix>, // K x N, columns on the simplex
}

/// Hard nearest-neighbour assignment; ties break toward the lowest index.
pub fn nearest_assign(cb: &Codebook, z_e: &Matrix) -> Result<DiscreteState> {
    if z_e.rows() != cb.dim() {
        return Err(Error::shape(format!(
            "latent dim {} does not match codebook dim {}",
            z_e.rows(),
            cb.dim()
        )));
    }
    let indices = (0..z_e.cols())
        .map(|n| {
            let mut best = 0usize;
            let mut best_d = cb.sq_dist(z_e, n, 0);
            for k in 1..cb.k() {
                let d = cb.sq_dist(z_e, n, k);
                if d < best_d {
                    best = k;
                    best_d = d;
                }
            }
            best
        })
        .collect();
    Ok(DiscreteState {
        indices,
        relaxed: None,
    })
}

/// Unnormalized categorical logits: logits[k][n] = -||z_e[:,n] - e_k||^2.
pub fn categorical_logits(cb: &Codebook, z_e: &Matrix) -> Result<Matrix> {
    if z_e.rows() != cb.dim() {
        return Err(Error::shape(format!(
            "latent dim {} does not match codebook dim {}",
            z_e.rows(),
            cb.dim()
        )));
    }
    Ok(Matrix::from_fn(cb.k(), z_e.cols(), |k, n| {
        -cb.sq_dist(z_e, n, k)
    }))
}

/// Column-wise softmax of `logits / temperature`, max-shifted for stability.
pub fn softmax_cols(logits: &Matrix, temperature: f64) -> Matrix {
    let mut out = Matrix::zeros(logits.rows(), logits.cols());
    for n in 0..logits.cols() {
        let mut max = f64::NEG_INFINITY;
        for k in 0..logits.rows() {
            max = max.max(logits.at(k, n) / temperature);
        }
        let mut sum = 0.0;
        for k in 0..logits.rows() {
            let e = (logits.at(k, n) / temperature - max).exp();
            out.set(k, n, e);
            sum += e;
        }
        for k in 0..logits.rows() {
            out.set(k, n, out.at(k, n) / sum);
        }
    }
    out
}

/// Relaxed categorical draw: softmax((logits + G)/temperature) per column,
/// with hard indices given by the column argmax.
pub fn gumbel_softmax_sample(
    logits: &Matrix,
    temperature: f64,
    gumbel_noise: &Matrix,
) -> Result<DiscreteState> {
    if !(temperature > 0.0) {
        return Err(Error::invalid(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    if gumbel_noise.shape() != logits.shape() {
        return Err(Error::shape("gumbel noise must match logits shape"));
    }
    let noisy = logits.add(gumbel_noise);
    let relaxed = softmax_cols(&noisy, temperature);
    let indices = (0..relaxed.cols())
        .map(|n| {
            let mut best = 0usize;
            for k in 1..relaxed.rows() {
                if relaxed.at(k, n) > relaxed.at(best, n) {
                    best = k;
                }
            }
            best
        })
        .collect();
    Ok(DiscreteState {
        indices,
        relaxed: Some(relaxed),
    })
}

/// Convenience draw of clamped Gumbel noise shaped for `logits`.
pub fn draw_gumbel_like(logits: &Matrix, rng: &mut impl Rng) -> Matrix {
    gumbel_matrix(logits.rows(), logits.cols(), rng)
}

/// Stochastic regularizer estimate gamma_t ||z_e^t - zq_hat||^2 where zq_hat
/// is the relaxed Gumbel-Softmax mixture at the variational temperature.
/// Every embedding with nonzero relaxed mass contributes to the mixture, so
/// all of them receive gradient through this term.
pub fn reg_term(
    cb: &Codebook,
    z_e_t: &Matrix,
    sched: &TemperatureSchedule,
    t: usize,
    gumbel_noise: &Matrix,
) -> Result<f64> {
    if t > sched.max_step() {
        return Err(Error::StepOutOfRange {
            t,
            min: 0,
            max: sched.max_step(),
        });
    }
    let gamma = sched.gamma(t);
    if gamma == 0.0 {
        return Ok(0.0);
    }
    let logits = categorical_logits(cb, z_e_t)?;
    let state = gumbel_softmax_sample(&logits, sched.tau(), gumbel_noise)?;
    let mix = soft_lookup(cb, state.relaxed.as_ref().expect("relaxed weights"));
    Ok(gamma * z_e_t.sub(&mix).frob_sq())
}

/// Mixture of embeddings under relaxed weights: out[:,n] = sum_k w[k,n] e_k.
pub fn soft_lookup(cb: &Codebook, weights: &Matrix) -> Matrix {
    Matrix::from_fn(cb.dim(), weights.cols(), |i, n| {
        (0..cb.k())
            .map(|k| weights.at(k, n) * cb.vectors().at(k, i))
            .sum()
    })
}

/// Exact categorical divergence term sum_k q_k log(p_k / q_k) summed over
/// positions, with p the softmax at `tau_p` and q the softmax at `tau_q` of
/// the squared-distance logits. This is the regularizer's expectation under
/// the tempered-softmax parameterization, used by the decomposition checks.
pub fn categorical_kl_term(cb: &Codebook, z_e: &Matrix, tau_p: f64, tau_q: f64) -> Result<f64> {
    let logits = categorical_logits(cb, z_e)?;
    let p = softmax_cols(&logits, tau_p);
    let q = softmax_cols(&logits, tau_q);
    let mut acc = 0.0;
    for n in 0..logits.cols() {
        for k in 0..logits.rows() {
            let qk = q.at(k, n);
            if qk > 0.0 {
                acc += qk * (p.at(k, n).ln() - qk.ln());
            }
        }
    }
    Ok(acc)
}

/// The quantity the loss collapses to when the chain has no noising steps:
/// per position, ||z_e - zq_hat||_2 + log sum_k exp(-||z_e - e_k||_2) with
/// zq_hat the nearest embedding and unsquared norms throughout.
pub fn vqvae_reduction_loss(cb: &Codebook, z_e: &Matrix) -> Result<f64> {
    let assign = nearest_assign(cb, z_e)?;
    let mut total = 0.0;
    for n in 0..z_e.cols() {
        let d_near = cb.sq_dist(z_e, n, assign.indices[n]).sqrt();
        // d_near + log sum_k exp(-d_k) collapses to the shifted log-sum-exp
        let mut sum = 0.0;
        for k in 0..cb.k() {
            sum += (d_near - cb.sq_dist(z_e, n, k).sqrt()).exp();
        }
        total += sum.ln();
    }
    Ok(total)
}
