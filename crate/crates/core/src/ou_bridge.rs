//! Closed-form kernels of the mean-reverting noising process
//! dZ = -theta (Z - z_star) dt + eta dW and of its bridge posteriors.
//!
//! Every covariance here is a scalar multiple of the identity, so Gaussian
//! laws are carried around as a mean matrix plus a single variance.

use crate::error::{Error, Result};
use crate::mat::Matrix;

/// Guard below which `1 - alpha_bar` is treated as exactly zero. The bridge
/// at such a step is pinned to its start point.
const DEGENERATE_EPS: f64 = 1e-12;

/// Isotropic Gaussian: mean matrix plus scalar variance.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianMoments {
    pub mean: Matrix,
    pub var: f64,
}

/// Time discretization of the noising process together with the per-step
/// retention quantities beta_t = 1 - exp(-2 theta delta_t), alpha_t = 1 -
/// beta_t and the running product alpha_bar_t.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionSchedule {
    theta: f64,
    eta: f64,
    z_star: Matrix,
    delta: Vec<f64>,
    beta: Vec<f64>,      // beta[t-1] holds beta_t, t = 1..=T
    alpha: Vec<f64>,     // alpha[t-1] holds alpha_t
    alpha_bar: Vec<f64>, // alpha_bar[t] holds the product up to t, alpha_bar[0] = 1
}

impl DiffusionSchedule {
    /// Builds a schedule from explicit per-step time increments.
    pub fn new(delta: Vec<f64>, theta: f64, eta: f64, z_star: Matrix) -> Result<Self> {
        if !(theta > 0.0) || !theta.is_finite() {
            return Err(Error::invalid(format!("theta must be positive, got {theta}")));
        }
        if !(eta > 0.0) || !eta.is_finite() {
            return Err(Error::invalid(format!("eta must be positive, got {eta}")));
        }
        if delta.iter().any(|&d| !(d > 0.0) || !d.is_finite()) {
            return Err(Error::invalid("every delta_t must be positive and finite"));
        }
        if !z_star.all_finite() {
            return Err(Error::invalid("z_star must be finite"));
        }
        let beta: Vec<f64> = delta.iter().map(|&d| 1.0 - (-2.0 * theta * d).exp()).collect();
        let alpha: Vec<f64> = beta.iter().map(|&b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(delta.len() + 1);
        alpha_bar.push(1.0);
        let mut prod = 1.0;
        for &a in &alpha {
            prod *= a;
            alpha_bar.push(prod);
        }
        Ok(DiffusionSchedule {
            theta,
            eta,
            z_star,
            delta,
            beta,
            alpha,
            alpha_bar,
        })
    }

    /// Uniform grid delta_t = dt for `steps` steps.
    pub fn uniform(steps: usize, dt: f64, theta: f64, eta: f64, z_star: Matrix) -> Result<Self> {
        Self::new(vec![dt; steps], theta, eta, z_star)
    }

    pub fn step_count(&self) -> usize {
        self.delta.len()
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn z_star(&self) -> &Matrix {
        &self.z_star
    }

    pub fn delta(&self, t: usize) -> f64 {
        assert!(t >= 1 && t <= self.step_count());
        self.delta[t - 1]
    }

    pub fn beta(&self, t: usize) -> f64 {
        assert!(t >= 1 && t <= self.step_count());
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        assert!(t >= 1 && t <= self.step_count());
        self.alpha[t - 1]
    }

    /// alpha_bar_t for 0 <= t <= T, with the empty product alpha_bar_0 = 1.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        assert!(t <= self.step_count());
        self.alpha_bar[t]
    }

    /// Long-time variance eta^2 / (2 theta).
    pub fn stationary_var(&self) -> f64 {
        self.eta * self.eta / (2.0 * self.theta)
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t < 1 || t > self.step_count() {
            return Err(Error::StepOutOfRange {
                t,
                min: 1,
                max: self.step_count(),
            });
        }
        Ok(())
    }

    fn require_centered(&self, what: &str) -> Result<()> {
        if self.z_star.data().iter().any(|&v| v != 0.0) {
            return Err(Error::UnsupportedParameterization(format!(
                "{what} requires z_star = 0"
            )));
        }
        Ok(())
    }

    /// One-step transition law q(z^t | z^{t-1}): mean
    /// z_star + (z_prev - z_star) sqrt(alpha_t), variance (eta^2/2theta) beta_t.
    pub fn forward_kernel(&self, t: usize, z_prev: &Matrix) -> Result<GaussianMoments> {
        self.check_step(t)?;
        self.check_latent_shape(z_prev)?;
        let root_alpha = self.alpha(t).sqrt();
        let mean = self.z_star.axpy(root_alpha, &z_prev.sub(&self.z_star));
        Ok(GaussianMoments {
            mean,
            var: self.stationary_var() * self.beta(t),
        })
    }

    /// Moments of the marginal q(z^t | z^0).
    pub fn marginal_moments(&self, t: usize, z0: &Matrix) -> Result<GaussianMoments> {
        if t > self.step_count() {
            return Err(Error::StepOutOfRange {
                t,
                min: 0,
                max: self.step_count(),
            });
        }
        self.check_latent_shape(z0)?;
        let ab = self.alpha_bar(t);
        let mean = self.z_star.axpy(ab.sqrt(), &z0.sub(&self.z_star));
        Ok(GaussianMoments {
            mean,
            var: self.stationary_var() * (1.0 - ab),
        })
    }

    /// Reparameterized draw from q(z^t | z^0) with caller-supplied
    /// standard-normal noise.
    pub fn marginal_from_zero(&self, t: usize, z0: &Matrix, eps: &Matrix) -> Result<Matrix> {
        let m = self.marginal_moments(t, z0)?;
        if eps.shape() != z0.shape() {
            return Err(Error::shape("eps must match the latent shape"));
        }
        Ok(m.mean.axpy(m.var.sqrt(), eps))
    }

    /// Posterior of z^{t-1} given the chain endpoints z^0 and z^t. At t = 1
    /// the bridge is pinned at its start: mean z0, variance 0.
    pub fn bridge_posterior(&self, t: usize, z0: &Matrix, zt: &Matrix) -> Result<GaussianMoments> {
        self.check_step(t)?;
        self.check_latent_shape(z0)?;
        self.check_latent_shape(zt)?;
        let one_minus_ab_t = 1.0 - self.alpha_bar(t);
        if one_minus_ab_t < DEGENERATE_EPS {
            return Ok(GaussianMoments {
                mean: z0.clone(),
                var: 0.0,
            });
        }
        let beta_t = self.beta(t);
        let root_alpha_t = self.alpha(t).sqrt();
        let ab_prev = self.alpha_bar(t - 1);
        let one_minus_ab_prev = 1.0 - ab_prev;

        // beta_t/(1-ab_t) (z* + sqrt(ab_{t-1})(z0 - z*))
        let anchor = self.z_star.axpy(ab_prev.sqrt(), &z0.sub(&self.z_star));
        // (1-ab_{t-1})/(1-ab_t) sqrt(a_t) (zt - (1 - sqrt(a_t)) z*)
        let drift = zt.axpy(-(1.0 - root_alpha_t), &self.z_star);
        let mean = anchor
            .scale(beta_t / one_minus_ab_t)
            .add(&drift.scale(one_minus_ab_prev / one_minus_ab_t * root_alpha_t));
        let var = self.stationary_var() * one_minus_ab_prev / one_minus_ab_t * beta_t;
        Ok(GaussianMoments { mean, var })
    }

    /// Denoising law with the noise-prediction parameterization: mean
    /// (z^t - sqrt(eta^2/(2 theta (1-ab_t))) beta_t eps_pred)/sqrt(alpha_t),
    /// variance matched to the bridge posterior. Requires z_star = 0.
    pub fn reverse_mean(&self, t: usize, zt: &Matrix, eps_pred: &Matrix) -> Result<GaussianMoments> {
        self.check_step(t)?;
        self.require_centered("the noise-prediction reverse kernel")?;
        self.check_latent_shape(zt)?;
        if eps_pred.shape() != zt.shape() {
            return Err(Error::shape("eps_pred must match the latent shape"));
        }
        let one_minus_ab_t = 1.0 - self.alpha_bar(t);
        let one_minus_ab_prev = 1.0 - self.alpha_bar(t - 1);
        let beta_t = self.beta(t);
        let coeff = (self.stationary_var() / one_minus_ab_t).sqrt() * beta_t;
        let mean = zt.axpy(-coeff, eps_pred).scale(1.0 / self.alpha(t).sqrt());
        let var = if one_minus_ab_t < DEGENERATE_EPS {
            0.0
        } else {
            self.stationary_var() * one_minus_ab_prev / one_minus_ab_t * beta_t
        };
        Ok(GaussianMoments { mean, var })
    }

    fn check_latent_shape(&self, z: &Matrix) -> Result<()> {
        if z.shape() != self.z_star.shape() {
            return Err(Error::shape(format!(
                "latent shape {:?} does not match z_star shape {:?}",
                z.shape(),
                self.z_star.shape()
            )));
        }
        Ok(())
    }
}
