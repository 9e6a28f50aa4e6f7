//! Independent oracles for the acceptance suite: quadrature rules and
//! brute-force evaluations written from scratch, leaning on the crate only
//! for the neural predictor being measured.

use bridgevq_core::mat::Matrix;
use bridgevq_core::noise_model::NoisePredictor;
use bridgevq_core::ou_bridge::DiffusionSchedule;
use bridgevq_core::quantizer::Codebook;
use bridgevq_core::toy_domain::ToySample;

/// Gauss-Hermite rule adapted to the standard normal weight: returns
/// (nodes, weights) with sum w_i f(x_i) ~ E[f(X)], X ~ N(0,1).
/// Physicists' nodes by Newton iteration on the orthonormal recurrence.
pub fn gauss_hermite_normal(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let m = n.div_ceil(2);
    let mut z = 0.0f64;
    for i in 0..m {
        z = match i {
            0 => (2.0 * n as f64 + 1.0).sqrt() - 1.85575 * (2.0 * n as f64 + 1.0).powf(-1.0 / 6.0),
            1 => z - 1.14 * (n as f64).powf(0.426) / z,
            2 => 1.86 * z - 0.86 * x[0],
            3 => 1.91 * z - 0.91 * x[1],
            _ => 2.0 * z - x[i - 2],
        };
        let mut pp = 0.0;
        for _ in 0..200 {
            let mut p1 = std::f64::consts::PI.powf(-0.25);
            let mut p2 = 0.0;
            for j in 1..=n {
                let p3 = p2;
                p2 = p1;
                p1 = z * (2.0 / j as f64).sqrt() * p2 - ((j as f64 - 1.0) / j as f64).sqrt() * p3;
            }
            pp = (2.0 * n as f64).sqrt() * p2;
            let dz = p1 / pp;
            z -= dz;
            if dz.abs() < 1e-15 {
                break;
            }
        }
        x[i] = z;
        x[n - 1 - i] = -z;
        w[i] = 2.0 / (pp * pp);
        w[n - 1 - i] = w[i];
    }
    // rescale from weight exp(-x^2) to the standard normal
    let root_pi = std::f64::consts::PI.sqrt();
    let nodes: Vec<f64> = x.iter().map(|&v| v * std::f64::consts::SQRT_2).collect();
    let weights: Vec<f64> = w.iter().map(|&v| v / root_pi).collect();
    (nodes, weights)
}

pub fn log_normal_pdf(x: f64, mean: f64, var: f64) -> f64 {
    -0.5 * ((x - mean) * (x - mean) / var + var.ln() + (2.0 * std::f64::consts::PI).ln())
}

fn softmax2(l0: f64, l1: f64, tau: f64) -> [f64; 2] {
    let m = (l0 / tau).max(l1 / tau);
    let e0 = (l0 / tau - m).exp();
    let e1 = (l1 / tau - m).exp();
    [e0 / (e0 + e1), e1 / (e0 + e1)]
}

/// Sum over the two symbols of q_k (log p_k - log q_k) for the tempered
/// squared-distance read-outs at a scalar latent.
fn reg_sum(z: f64, e: &[f64], tau_p: f64, tau_q: f64) -> f64 {
    let l0 = -(z - e[0]) * (z - e[0]);
    let l1 = -(z - e[1]) * (z - e[1]);
    let p = softmax2(l0, l1, tau_p);
    let q = softmax2(l0, l1, tau_q);
    q[0] * (p[0].ln() - q[0].ln()) + q[1] * (p[1].ln() - q[1].ln())
}

/// Brute-force E_q[log p/q] of the two-step, one-dimensional, two-symbol
/// instance, with every density written out here. The predictor is the
/// model under test and enters only through its forward evaluations.
#[allow(clippy::too_many_arguments)]
pub fn brute_force_elbo(
    theta: f64,
    eta: f64,
    delta: &[f64],
    m: &NoisePredictor,
    x: f64,
    e: &[f64],
    sigma_x: f64,
    tau_p: &[f64],
    tau_q: f64,
    n_nodes: usize,
) -> f64 {
    assert_eq!(delta.len(), 2);
    let v = eta * eta / (2.0 * theta);
    let beta: Vec<f64> = delta.iter().map(|&d| 1.0 - (-2.0 * theta * d).exp()).collect();
    let alpha: Vec<f64> = beta.iter().map(|&b| 1.0 - b).collect();
    let ab1 = alpha[0];
    let ab2 = alpha[0] * alpha[1];

    let eps_hat = |z: f64, t: usize| -> f64 {
        m.predict(&Matrix::from_vec(1, 1, vec![z]).unwrap(), t)
            .unwrap()
            .at(0, 0)
    };
    let mu_theta = |z: f64, t: usize| -> f64 {
        let (ab, a, b) = if t == 1 {
            (ab1, alpha[0], beta[0])
        } else {
            (ab2, alpha[1], beta[1])
        };
        (z - (v / (1.0 - ab)).sqrt() * b * eps_hat(z, t)) / a.sqrt()
    };
    let sigma2_rev1 = v * beta[0];
    let sigma2_rev2 = v * (1.0 - ab1) / (1.0 - ab2) * beta[1];

    // the discrete read-out terms at z0 = x are constants of the integral
    let mut const_terms = reg_sum(x, e, tau_p[0], tau_q);
    let l0 = -(x - e[0]) * (x - e[0]);
    let l1 = -(x - e[1]) * (x - e[1]);
    let q0 = softmax2(l0, l1, tau_q);
    for k in 0..2 {
        const_terms += q0[k] * log_normal_pdf(x, e[k], sigma_x * sigma_x);
    }

    let (nodes, weights) = gauss_hermite_normal(n_nodes);
    let mut total = 0.0;
    for (&u, &wu) in nodes.iter().zip(&weights) {
        let z1 = alpha[0].sqrt() * x + (v * beta[0]).sqrt() * u;
        let mut inner = 0.0;
        for (&w_, &ww) in nodes.iter().zip(&weights) {
            let z2 = alpha[1].sqrt() * z1 + (v * beta[1]).sqrt() * w_;
            let mut val = log_normal_pdf(z2, 0.0, v); // terminal prior
            val += log_normal_pdf(z1, mu_theta(z2, 2), sigma2_rev2);
            val += log_normal_pdf(x, mu_theta(z1, 1), sigma2_rev1);
            val -= log_normal_pdf(z1, alpha[0].sqrt() * x, v * beta[0]);
            val -= log_normal_pdf(z2, alpha[1].sqrt() * z1, v * beta[1]);
            val += reg_sum(z2, e, tau_p[2], tau_q);
            inner += ww * val;
        }
        total += wu * (inner + reg_sum(z1, e, tau_p[1], tau_q));
    }
    total + const_terms
}

/// Independent recomputation of the zero-step objective: per position the
/// Gaussian log-density at the nearest embedding minus the quantization
/// loss with unsquared norms.
pub fn t0_objective_by_hand(x: &Matrix, cb: &Codebook, sigma_x: f64) -> f64 {
    let var = sigma_x * sigma_x;
    let mut rec = 0.0;
    let mut reduction = 0.0;
    for n in 0..x.cols() {
        let col = x.column(n);
        let mut best = 0usize;
        let mut best_d2 = f64::INFINITY;
        for k in 0..cb.k() {
            let e = cb.vector(k);
            let d2: f64 = col.iter().zip(&e).map(|(a, b)| (a - b) * (a - b)).sum();
            if d2 < best_d2 {
                best_d2 = d2;
                best = k;
            }
        }
        let e = cb.vector(best);
        let resid: f64 = col.iter().zip(&e).map(|(a, b)| (a - b) * (a - b)).sum();
        rec += -resid / (2.0 * var)
            - 0.5 * col.len() as f64 * (2.0 * std::f64::consts::PI * var).ln();
        let mut lse = 0.0f64;
        for k in 0..cb.k() {
            let ek = cb.vector(k);
            let d: f64 = col
                .iter()
                .zip(&ek)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            lse += (-d).exp();
        }
        reduction += best_d2.sqrt() + lse.ln();
    }
    rec - reduction
}

/// Exhaustive quadrature of the masked-conditional likelihood on the
/// two-position, two-symbol, two-step instance: position 0 observed,
/// position 1 masked, the default sampler (noise at t = 2, none at t = 1).
/// Integrates the four Gaussian inputs of the conditional chain on a
/// tensor Gauss-Hermite grid, mirroring the chain law with local formulas.
pub fn exhaustive_conditional_nll(
    s: &DiffusionSchedule,
    m: &NoisePredictor,
    sample: &ToySample,
    e: &[f64],
    n_nodes: usize,
) -> f64 {
    assert_eq!(s.step_count(), 2);
    let theta = s.theta();
    let eta = s.eta();
    let v = eta * eta / (2.0 * theta);
    let beta: Vec<f64> = (1..=2).map(|t| 1.0 - (-2.0 * theta * s.delta(t)).exp()).collect();
    let alpha: Vec<f64> = beta.iter().map(|&b| 1.0 - b).collect();
    let ab1 = alpha[0];
    let ab2 = alpha[0] * alpha[1];
    let x_obs = sample.x.at(0, 0);
    let q_masked = sample.q[1];

    let (nodes, weights) = gauss_hermite_normal(n_nodes);
    let predict = |z0: f64, z1: f64, t: usize| -> (f64, f64) {
        let z = Matrix::from_vec(1, 2, vec![z0, z1]).unwrap();
        let out = m.predict(&z, t).unwrap();
        (out.at(0, 0), out.at(0, 1))
    };

    let sigma2_rev2 = v * (1.0 - ab1) / (1.0 - ab2) * beta[1];
    let mut estimate = 0.0;
    for (&a, &wa) in nodes.iter().zip(&weights) {
        let z_masked_2 = v.sqrt() * a; // stationary start of the hidden block
        for (&b, &wb) in nodes.iter().zip(&weights) {
            let z_obs_2 = ab2.sqrt() * x_obs + (v * (1.0 - ab2)).sqrt() * b;
            // reverse step t=2 with injected noise on the hidden block
            let (_, eh2) = predict(z_obs_2, z_masked_2, 2);
            let mu2 = (z_masked_2 - (v / (1.0 - ab2)).sqrt() * beta[1] * eh2) / alpha[1].sqrt();
            for (&c, &wc) in nodes.iter().zip(&weights) {
                let z_masked_1 = mu2 + sigma2_rev2.sqrt() * c;
                for (&d, &wd) in nodes.iter().zip(&weights) {
                    let z_obs_1 = ab1.sqrt() * x_obs + (v * (1.0 - ab1)).sqrt() * d;
                    // final step is the deterministic mean
                    let (_, eh1) = predict(z_obs_1, z_masked_1, 1);
                    let mu1 =
                        (z_masked_1 - (v / (1.0 - ab1)).sqrt() * beta[0] * eh1) / alpha[0].sqrt();
                    let l0 = -(mu1 - e[0]) * (mu1 - e[0]);
                    let l1 = -(mu1 - e[1]) * (mu1 - e[1]);
                    let p = softmax2(l0, l1, 1.0);
                    estimate += wa * wb * wc * wd * p[q_masked];
                }
            }
        }
    }
    -estimate.ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hermite_rule_reproduces_normal_moments() {
        for n in [8usize, 20, 64] {
            let (nodes, weights) = gauss_hermite_normal(n);
            let total: f64 = weights.iter().sum();
            let m2: f64 = nodes.iter().zip(&weights).map(|(x, w)| w * x * x).sum();
            let m4: f64 = nodes.iter().zip(&weights).map(|(x, w)| w * x.powi(4)).sum();
            assert!((total - 1.0).abs() < 1e-12, "n={n}: mass {total}");
            assert!((m2 - 1.0).abs() < 1e-10, "n={n}: second moment {m2}");
            assert!((m4 - 3.0).abs() < 1e-9, "n={n}: fourth moment {m4}");
        }
    }
}
