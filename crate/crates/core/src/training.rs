//! Loss assembly and the stochastic training loop: a reconstruction term, a
//! per-step denoising term with one uniformly drawn step per update, and the
//! temperature-weighted regularizer sharing that step. Parameters move by
//! adaptive-moment descent on the negated objective.

use rand::Rng;

use crate::error::{Error, Result};
use crate::mat::{gumbel_matrix, Matrix};
use crate::noise_model::NoisePredictor;
use crate::ou_bridge::DiffusionSchedule;
use crate::quantizer::{
    nearest_assign, reg_term, Codebook, DiscreteState, TemperatureSchedule,
};
use crate::toy_domain::ToySample;

/// Observation likelihood p(x | z_q^0): isotropic Gaussian around the
/// looked-up embeddings with fixed standard deviation.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderModel {
    sigma_x: f64,
}

impl DecoderModel {
    pub fn new(sigma_x: f64) -> Result<Self> {
        if !(sigma_x > 0.0) {
            return Err(Error::invalid("decoder noise must be positive"));
        }
        Ok(DecoderModel { sigma_x })
    }

    pub fn sigma_x(&self) -> f64 {
        self.sigma_x
    }

    pub fn decode_mean(&self, indices: &[usize], cb: &Codebook) -> Matrix {
        cb.lookup(indices)
    }

    pub fn sample(&self, indices: &[usize], cb: &Codebook, rng: &mut impl Rng) -> Matrix {
        let mean = self.decode_mean(indices, cb);
        let noise = Matrix::randn(mean.rows(), mean.cols(), rng);
        mean.axpy(self.sigma_x, &noise)
    }
}

/// The three parts of one stochastic objective evaluation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ElboTerms {
    pub rec: f64,
    pub diff: f64,
    pub reg: f64,
    pub t_drawn: usize,
    pub total: f64,
}

impl ElboTerms {
    pub fn new(rec: f64, diff: f64, reg: f64, t_drawn: usize) -> Self {
        ElboTerms {
            rec,
            diff,
            reg,
            t_drawn,
            total: rec + diff + reg,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub step_count: u64,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub end_to_end: bool,
    /// Multiplier applied to the regularizer weight gamma_t inside the
    /// objective. Negative orients the term to pull latents and embeddings
    /// together at small t and apart near the terminal step.
    pub reg_sign: f64,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be >= 1"));
        }
        if !(self.learning_rate >= 0.0) {
            return Err(Error::invalid("learning_rate must be >= 0"));
        }
        if !(self.adam_beta1 >= 0.0 && self.adam_beta1 < 1.0)
            || !(self.adam_beta2 >= 0.0 && self.adam_beta2 < 1.0)
            || !(self.adam_eps > 0.0)
        {
            return Err(Error::invalid("bad adaptive-moment hyperparameters"));
        }
        Ok(())
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 128,
            step_count: 10_000,
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            end_to_end: false,
            reg_sign: 1.0,
            seed: 0,
        }
    }
}

/// Adaptive-moment estimation over a flat parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub steps: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(len: usize, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            m: vec![0.0; len],
            v: vec![0.0; len],
            steps: 0,
            lr,
            beta1,
            beta2,
            eps,
        }
    }

    /// One descent step on `grad`; the defining recurrence, no extras.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        assert_eq!(params.len(), grad.len());
        assert_eq!(params.len(), self.m.len());
        self.steps += 1;
        let bc1 = 1.0 - self.beta1.powi(self.steps as i32);
        let bc2 = 1.0 - self.beta2.powi(self.steps as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

/// Variance of the denoising transition used for likelihood evaluation: the
/// bridge-matched variance for t >= 2 and the one-step forward variance at
/// t = 1, where the matched expression degenerates to zero.
pub fn reverse_variance(s: &DiffusionSchedule, t: usize) -> Result<f64> {
    s.check_step(t)?;
    if t == 1 {
        return Ok(s.stationary_var() * s.beta(1));
    }
    let one_minus_ab_t = 1.0 - s.alpha_bar(t);
    Ok(s.stationary_var() * (1.0 - s.alpha_bar(t - 1)) / one_minus_ab_t * s.beta(t))
}

/// The t-th summand of the stochastic denoising objective. For t >= 2 this
/// is -beta_t/(2 alpha_t (1 - alpha_bar_{t-1})) ||eps - eps_theta(z^t, t)||^2
/// with z^t the reparameterized marginal draw; at t = 1 it is the
/// start-of-chain log-likelihood -||z0 - mu_theta(z^1, 1)||^2 / (2 sigma_1^2)
/// up to its additive constant.
pub fn diffusion_term(
    s: &DiffusionSchedule,
    m: &NoisePredictor,
    z0: &Matrix,
    t: usize,
    eps: &Matrix,
) -> Result<f64> {
    s.check_step(t)?;
    if s.z_star().data().iter().any(|&v| v != 0.0) {
        return Err(Error::UnsupportedParameterization(
            "the denoising objective requires z_star = 0".to_string(),
        ));
    }
    let zt = s.marginal_from_zero(t, z0, eps)?;
    let pred = m.predict(&zt, t)?;
    if t == 1 {
        let mu = s.reverse_mean(1, &zt, &pred)?.mean;
        let var = reverse_variance(s, 1)?;
        Ok(-z0.sub(&mu).frob_sq() / (2.0 * var))
    } else {
        let coeff = -s.beta(t) / (2.0 * s.alpha(t) * (1.0 - s.alpha_bar(t - 1)));
        Ok(coeff * eps.sub(&pred).frob_sq())
    }
}

/// Gaussian log-likelihood of `x` given quantized indices, constant
/// included.
pub fn reconstruction_term(
    dec: &DecoderModel,
    x: &Matrix,
    zq0: &DiscreteState,
    cb: &Codebook,
) -> f64 {
    let mean = dec.decode_mean(&zq0.indices, cb);
    let var = dec.sigma_x() * dec.sigma_x();
    let dn = (x.rows() * x.cols()) as f64;
    -x.sub(&mean).frob_sq() / (2.0 * var)
        - 0.5 * dn * (2.0 * std::f64::consts::PI * var).ln()
}

/// Terminal-prior mismatch: -KL(q(z^T | z0) || stationary law), in closed
/// form for the isotropic Gaussians involved. Dropped from gradients under
/// default schedules but computable on demand.
pub fn terminal_term(s: &DiffusionSchedule, z0: &Matrix) -> Result<f64> {
    let q = s.marginal_moments(s.step_count(), z0)?;
    let v_p = s.stationary_var();
    let v_q = q.var;
    let dn = (z0.rows() * z0.cols()) as f64;
    let mean_gap = q.mean.sub(s.z_star()).frob_sq();
    let kl = dn * (0.5 * (v_p / v_q).ln() + v_q / (2.0 * v_p) - 0.5) + mean_gap / (2.0 * v_p);
    Ok(-kl)
}

/// Objective of the zero-step chain: reconstruction with the hard nearest
/// assignment plus the negated quantization loss.
pub fn elbo_t0_reduction(cb: &Codebook, dec: &DecoderModel, x: &Matrix) -> Result<f64> {
    let assign = crate::quantizer::nearest_assign(cb, x)?;
    let rec = reconstruction_term(dec, x, &assign, cb);
    Ok(rec - crate::quantizer::vqvae_reduction_loss(cb, x)?)
}

/// Everything that moves during training plus the optimizer state.
pub struct Trainer {
    pub schedule: DiffusionSchedule,
    pub predictor: NoisePredictor,
    pub codebook: Codebook,
    pub decoder: DecoderModel,
    pub temperatures: TemperatureSchedule,
    pub cfg: TrainConfig,
    pub adam: Adam,
    pub step: u64,
}

impl Trainer {
    pub fn new(
        schedule: DiffusionSchedule,
        predictor: NoisePredictor,
        codebook: Codebook,
        decoder: DecoderModel,
        temperatures: TemperatureSchedule,
        cfg: TrainConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        if schedule.z_star().data().iter().any(|&v| v != 0.0) {
            return Err(Error::UnsupportedParameterization(
                "training requires z_star = 0".to_string(),
            ));
        }
        if predictor.arch().max_step != schedule.step_count() {
            return Err(Error::invalid(
                "predictor max_step must equal the schedule step count",
            ));
        }
        if temperatures.max_step() != schedule.step_count() {
            return Err(Error::invalid(
                "temperature schedule must cover steps 0..=T",
            ));
        }
        if predictor.arch().input_channels != codebook.dim() {
            return Err(Error::invalid("predictor channels must match codebook dim"));
        }
        if cfg.end_to_end && !codebook.trainable() {
            return Err(Error::invalid("end_to_end training needs a trainable codebook"));
        }
        let trainable = predictor.param_count()
            + if cfg.end_to_end {
                codebook.k() * codebook.dim()
            } else {
                0
            };
        let adam = Adam::new(
            trainable,
            cfg.learning_rate,
            cfg.adam_beta1,
            cfg.adam_beta2,
            cfg.adam_eps,
        );
        Ok(Trainer {
            schedule,
            predictor,
            codebook,
            decoder,
            temperatures,
            cfg,
            adam,
            step: 0,
        })
    }

    pub fn trainable_len(&self) -> usize {
        self.adam.m.len()
    }

    fn check_finite(term: &str, value: f64) -> Result<f64> {
        if !value.is_finite() {
            return Err(Error::NonFinite {
                term: term.to_string(),
                value,
            });
        }
        Ok(value)
    }

    /// One update: per sample, draw a step t uniformly on {0..T}, evaluate
    /// the three terms (denoising and regularizer share the draw), average
    /// over the batch, and take one optimizer step on the negated
    /// objective. The reported t_drawn is the last sample's draw.
    pub fn train_step(&mut self, batch: &[ToySample], rng: &mut impl Rng) -> Result<ElboTerms> {
        if batch.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let t_steps = self.schedule.step_count();
        let b = batch.len() as f64;
        let inv_b = 1.0 / b;
        let k = self.codebook.k();
        let net_len = self.predictor.param_count();
        let mut t = 0usize;

        let mut grad = vec![0.0; self.trainable_len()];
        let mut rec_sum = 0.0;
        let mut diff_sum = 0.0;
        let mut reg_sum = 0.0;

        for sample in batch {
            t = rng.random_range(0..=t_steps);
            let gamma_eff = self.cfg.reg_sign * self.temperatures.gamma(t);
            let z0 = &sample.x; // identity encoder at this scale
            let n = z0.cols();
            let eps = if t >= 1 {
                Some(Matrix::randn(z0.rows(), n, rng))
            } else {
                None
            };
            let g_reg = gumbel_matrix(k, n, rng);
            let z_t = match &eps {
                Some(e) => Some(self.schedule.marginal_from_zero(t, z0, e)?),
                None => None,
            };
            // the regularizer shares the drawn step; at t = 0 the latent is z0
            let z_reg = z_t.as_ref().unwrap_or(z0);

            if self.cfg.end_to_end {
                let mut tape = crate::autodiff::Tape::new();
                let net_vars = self.predictor.tape_params(&mut tape, 0);
                let cb_var = tape.param(self.codebook.vectors().clone(), net_len);

                // reconstruction through the nearest assignment: hard index
                // forward, relaxed softmax gradient backward
                let z0_c = tape.constant(z0.clone());
                let logits = tape.neg_sqdist_logits(z0_c, cb_var);
                let weights = tape.softmax_cols(logits, self.temperatures.tau());
                let zq = tape.hard_lookup_st(weights, cb_var);
                let resid = tape.sub(z0_c, zq);
                let var_x = self.decoder.sigma_x() * self.decoder.sigma_x();
                let dn = (z0.rows() * n) as f64;
                let rec_ss = tape.sum_squares(resid);
                let rec_scaled = tape.scale(rec_ss, -1.0 / (2.0 * var_x));
                let rec_node = tape.add_scalar(
                    rec_scaled,
                    -0.5 * dn * (2.0 * std::f64::consts::PI * var_x).ln(),
                );

                // denoising term
                let diff_node = match (t, &z_t, &eps) {
                    (0, _, _) => tape.scalar(0.0),
                    (1, Some(zt), _) => {
                        let zt_c = tape.constant(zt.clone());
                        let out = self.predictor.predict_on_tape(&mut tape, &net_vars, zt_c, 1)?;
                        let coeff = (self.schedule.stationary_var()
                            / (1.0 - self.schedule.alpha_bar(1)))
                        .sqrt()
                            * self.schedule.beta(1);
                        let scaled_out = tape.scale(out, coeff);
                        let num = tape.sub(zt_c, scaled_out);
                        let mu = tape.scale(num, 1.0 / self.schedule.alpha(1).sqrt());
                        let r = tape.sub(z0_c, mu);
                        let ss = tape.sum_squares(r);
                        let var1 = reverse_variance(&self.schedule, 1)?;
                        tape.scale(ss, -1.0 / (2.0 * var1))
                    }
                    (_, Some(zt), Some(e)) => {
                        let zt_c = tape.constant(zt.clone());
                        let out = self.predictor.predict_on_tape(&mut tape, &net_vars, zt_c, t)?;
                        let e_c = tape.constant(e.clone());
                        let r = tape.sub(e_c, out);
                        let ss = tape.sum_squares(r);
                        let coeff = -self.schedule.beta(t)
                            / (2.0 * self.schedule.alpha(t) * (1.0 - self.schedule.alpha_bar(t - 1)));
                        tape.scale(ss, coeff)
                    }
                    _ => unreachable!("eps drawn whenever t >= 1"),
                };

                // regularizer through the relaxed mixture
                let reg_node = if gamma_eff != 0.0 {
                    let zr_c = tape.constant(z_reg.clone());
                    let rlogits = tape.neg_sqdist_logits(zr_c, cb_var);
                    let g_reg_c = tape.constant(g_reg.clone());
                    let rnoisy = tape.add(rlogits, g_reg_c);
                    let rweights = tape.softmax_cols(rnoisy, self.temperatures.tau());
                    let mix = tape.soft_lookup(rweights, cb_var);
                    let rr = tape.sub(zr_c, mix);
                    let rss = tape.sum_squares(rr);
                    tape.scale(rss, gamma_eff)
                } else {
                    tape.scalar(0.0)
                };

                let partial = tape.add(rec_node, diff_node);
                let total = tape.add(partial, reg_node);
                tape.backward(total, inv_b, &mut grad)?;

                rec_sum += tape.value(rec_node).at(0, 0);
                diff_sum += tape.value(diff_node).at(0, 0);
                reg_sum += tape.value(reg_node).at(0, 0);
            } else {
                // frozen codebook: only the predictor trains
                let assign = nearest_assign(&self.codebook, z0)?;
                rec_sum += reconstruction_term(&self.decoder, z0, &assign, &self.codebook);

                if t >= 1 {
                    let zt = z_t.as_ref().expect("drawn above");
                    let mut tape = crate::autodiff::Tape::new();
                    let net_vars = self.predictor.tape_params(&mut tape, 0);
                    let zt_c = tape.constant(zt.clone());
                    let diff_node = if t == 1 {
                        let out = self.predictor.predict_on_tape(&mut tape, &net_vars, zt_c, 1)?;
                        let coeff = (self.schedule.stationary_var()
                            / (1.0 - self.schedule.alpha_bar(1)))
                        .sqrt()
                            * self.schedule.beta(1);
                        let scaled_out = tape.scale(out, coeff);
                        let num = tape.sub(zt_c, scaled_out);
                        let mu = tape.scale(num, 1.0 / self.schedule.alpha(1).sqrt());
                        let z0_c = tape.constant(z0.clone());
                        let r = tape.sub(z0_c, mu);
                        let ss = tape.sum_squares(r);
                        let var1 = reverse_variance(&self.schedule, 1)?;
                        tape.scale(ss, -1.0 / (2.0 * var1))
                    } else {
                        let out = self.predictor.predict_on_tape(&mut tape, &net_vars, zt_c, t)?;
                        let e_c = tape.constant(eps.as_ref().expect("drawn").clone());
                        let r = tape.sub(e_c, out);
                        let ss = tape.sum_squares(r);
                        let coeff = -self.schedule.beta(t)
                            / (2.0 * self.schedule.alpha(t) * (1.0 - self.schedule.alpha_bar(t - 1)));
                        tape.scale(ss, coeff)
                    };
                    diff_sum += tape.backward(diff_node, inv_b, &mut grad)?;
                }

                if gamma_eff != 0.0 {
                    let raw = reg_term(&self.codebook, z_reg, &self.temperatures, t, &g_reg)?;
                    reg_sum += self.cfg.reg_sign * raw;
                }
            }
        }

        let rec = Self::check_finite("rec", rec_sum / b)?;
        let diff = Self::check_finite("diff", diff_sum / b)?;
        let reg = Self::check_finite("reg", reg_sum / b)?;

        // ascend the objective: descend its negation
        for g in grad.iter_mut() {
            *g = -*g;
        }
        let mut params = Vec::with_capacity(self.trainable_len());
        params.extend_from_slice(self.predictor.params());
        if self.cfg.end_to_end {
            params.extend_from_slice(self.codebook.vectors().data());
        }
        self.adam.step(&mut params, &grad);
        self.predictor.params_mut().copy_from_slice(&params[..net_len]);
        if self.cfg.end_to_end {
            let cb_mat = Matrix::from_vec(
                self.codebook.k(),
                self.codebook.dim(),
                params[net_len..].to_vec(),
            )?;
            self.codebook.set_vectors(cb_mat)?;
        }
        self.step += 1;
        Ok(ElboTerms::new(rec, diff, reg, t))
    }
}
