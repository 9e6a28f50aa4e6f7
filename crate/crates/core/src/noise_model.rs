//! Trainable noise predictor for desk-scale latents: the step-index enters
//! through a sinusoidal embedding and one affine map, the latent through a
//! per-step standardization and a sinusoidal feature lift, and a small
//! fully-connected stack mixes every position jointly. Around five
//! thousand parameters in the toy configuration.

use rand::Rng;

use crate::autodiff::{sigmoid, sinusoid_lift_forward, Tape, Var};
use crate::error::{Error, Result};
use crate::mat::Matrix;

/// Fixed architecture descriptor; serialized with checkpoints so loads can
/// validate the parameter vector they are about to adopt.
#[derive(Clone, Debug, PartialEq)]
pub struct NetArch {
    pub input_channels: usize,
    pub positions: usize,
    pub hidden_units: usize,
    pub time_channels: usize,
    /// Largest step index the predictor is conditioned on.
    pub max_step: usize,
    /// Per-step divisor applied to the latent before the feature lift,
    /// indexed 0..=max_step. The noising process contracts latents toward
    /// its small stationary scale, so without this the late-step inputs sit
    /// in the activations' linear regime and the mode structure is lost.
    pub input_scale: Vec<f64>,
    /// Sinusoidal feature frequencies applied to the scaled latent,
    /// mirroring the treatment of the step index.
    pub lift_freqs: Vec<f64>,
}

impl NetArch {
    pub fn toy(input_channels: usize, positions: usize, max_step: usize) -> Self {
        NetArch {
            input_channels,
            positions,
            hidden_units: 48,
            time_channels: 32,
            max_step,
            input_scale: vec![1.0; max_step + 1],
            lift_freqs: vec![0.5, 1.0, 2.0],
        }
    }

    /// Toy architecture with inputs standardized by the marginal scale
    /// sqrt(alpha_bar_t rho^2 + (1 - alpha_bar_t) eta^2/(2 theta)), where
    /// rho is the reference scale of the clean latents.
    pub fn toy_for_schedule(
        input_channels: usize,
        schedule: &crate::ou_bridge::DiffusionSchedule,
        reference_scale: f64,
    ) -> Self {
        let t_max = schedule.step_count();
        let input_scale = (0..=t_max)
            .map(|t| {
                let ab = schedule.alpha_bar(t);
                (ab * reference_scale * reference_scale
                    + (1.0 - ab) * schedule.stationary_var())
                .sqrt()
            })
            .collect();
        NetArch {
            input_scale,
            ..NetArch::toy(input_channels, schedule.z_star().cols(), t_max)
        }
    }

    /// Feature channels per position after the sinusoidal lift.
    pub fn lifted_channels(&self) -> usize {
        self.input_channels * (1 + 2 * self.lift_freqs.len())
    }

    /// Width of the flattened input to the first affine layer.
    pub fn in_dim(&self) -> usize {
        self.lifted_channels() * self.positions
    }

    pub fn out_dim(&self) -> usize {
        self.input_channels * self.positions
    }

    pub fn param_count(&self) -> usize {
        let h = self.hidden_units;
        let tc = self.time_channels;
        (h * self.in_dim() + h) + (h * tc + h) + (h * h + h) + (self.out_dim() * h + self.out_dim())
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_channels == 0 || self.positions == 0 || self.hidden_units == 0 {
            return Err(Error::invalid("architecture dimensions must be positive"));
        }
        if self.input_scale.len() != self.max_step + 1 {
            return Err(Error::invalid(
                "input_scale must hold one divisor per step 0..=max_step",
            ));
        }
        if self.input_scale.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::invalid("input_scale entries must be positive"));
        }
        if self.lift_freqs.iter().any(|&f| !(f > 0.0) || !f.is_finite()) {
            return Err(Error::invalid("lift frequencies must be positive"));
        }
        Ok(())
    }
}

/// Offsets of each weight block inside the flat parameter vector.
struct Layout {
    w_in: (usize, usize, usize), // (offset, rows, cols)
    b_in: (usize, usize, usize),
    time_w: (usize, usize, usize),
    time_b: (usize, usize, usize),
    w_mid: (usize, usize, usize),
    b_mid: (usize, usize, usize),
    w_out: (usize, usize, usize),
    b_out: (usize, usize, usize),
}

impl Layout {
    fn of(arch: &NetArch) -> Layout {
        let h = arch.hidden_units;
        let mut off = 0usize;
        let mut next = |rows: usize, cols: usize| {
            let entry = (off, rows, cols);
            off += rows * cols;
            entry
        };
        Layout {
            w_in: next(h, arch.in_dim()),
            b_in: next(h, 1),
            time_w: next(h, arch.time_channels),
            time_b: next(h, 1),
            w_mid: next(h, h),
            b_mid: next(h, 1),
            w_out: next(arch.out_dim(), h),
            b_out: next(arch.out_dim(), 1),
        }
    }
}

/// Sinusoidal features of the step index at geometrically spaced
/// frequencies; the trainable affine map on top lives in the predictor.
#[derive(Clone, Debug)]
pub struct TimeEmbedding {
    dim: usize,
}

impl TimeEmbedding {
    pub fn new(dim: usize) -> Result<Self> {
        if dim < 2 || dim % 2 != 0 {
            return Err(Error::invalid("time embedding dim must be even and >= 2"));
        }
        Ok(TimeEmbedding { dim })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// (dim x 1) column of interleaved sin/cos features.
    pub fn features(&self, t: usize) -> Matrix {
        let half = self.dim / 2;
        let tf = t as f64;
        Matrix::from_fn(self.dim, 1, |r, _| {
            let pair = r / 2;
            let freq = if half == 1 {
                1.0
            } else {
                (-(10_000.0f64).ln() * pair as f64 / (half - 1) as f64).exp()
            };
            if r % 2 == 0 {
                (tf * freq).sin()
            } else {
                (tf * freq).cos()
            }
        })
    }
}

/// eps_theta(z^t, t): flat parameter vector plus the architecture that
/// interprets it.
#[derive(Clone, Debug, PartialEq)]
pub struct NoisePredictor {
    arch: NetArch,
    params: Vec<f64>,
}

impl NoisePredictor {
    /// Uniform init in +-sqrt(6 / (fan_in + fan_out)) per weight matrix,
    /// zero biases.
    pub fn init(arch: NetArch, rng: &mut impl Rng) -> Self {
        arch.validate().expect("valid architecture");
        let layout = Layout::of(&arch);
        let mut params = vec![0.0; arch.param_count()];
        for (off, rows, cols) in [layout.w_in, layout.time_w, layout.w_mid, layout.w_out] {
            let bound = (6.0 / (rows + cols) as f64).sqrt();
            for p in params[off..off + rows * cols].iter_mut() {
                *p = rng.random_range(-bound..bound);
            }
        }
        NoisePredictor { arch, params }
    }

    pub fn from_params(arch: NetArch, params: Vec<f64>) -> Result<Self> {
        arch.validate()?;
        if params.len() != arch.param_count() {
            return Err(Error::shape(format!(
                "expected {} parameters for this architecture, got {}",
                arch.param_count(),
                params.len()
            )));
        }
        Ok(NoisePredictor { arch, params })
    }

    pub fn arch(&self) -> &NetArch {
        &self.arch
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    fn slice(&self, entry: (usize, usize, usize)) -> Matrix {
        let (off, rows, cols) = entry;
        Matrix::from_vec(rows, cols, self.params[off..off + rows * cols].to_vec())
            .expect("layout within bounds")
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t < 1 || t > self.arch.max_step {
            return Err(Error::StepOutOfRange {
                t,
                min: 1,
                max: self.arch.max_step,
            });
        }
        Ok(())
    }

    fn check_input(&self, z: &Matrix) -> Result<()> {
        if z.shape() != (self.arch.input_channels, self.arch.positions) {
            return Err(Error::shape(format!(
                "expected a {}x{} latent, got {}x{}",
                self.arch.input_channels,
                self.arch.positions,
                z.rows(),
                z.cols()
            )));
        }
        Ok(())
    }

    /// Plain forward pass; deterministic in (params, z, t).
    pub fn predict(&self, z: &Matrix, t: usize) -> Result<Matrix> {
        self.check_step(t)?;
        self.check_input(z)?;
        if !z.all_finite() {
            return Err(Error::NonFinite {
                term: "predict input".to_string(),
                value: f64::NAN,
            });
        }
        let layout = Layout::of(&self.arch);
        let h = self.arch.hidden_units;

        let emb = TimeEmbedding::new(self.arch.time_channels)?.features(t);
        let tw = self.slice(layout.time_w);
        let tb = self.slice(layout.time_b);

        let scaled = z.scale(1.0 / self.arch.input_scale[t]);
        let lifted = sinusoid_lift_forward(&scaled, &self.arch.lift_freqs);
        let w_in = self.slice(layout.w_in);
        let b_in = self.slice(layout.b_in);
        let flat = lifted.data();
        let mut a1 = vec![0.0; h];
        for r in 0..h {
            let mut acc = b_in.at(r, 0) + tb.at(r, 0);
            for c in 0..flat.len() {
                acc += w_in.at(r, c) * flat[c];
            }
            for c in 0..tw.cols() {
                acc += tw.at(r, c) * emb.at(c, 0);
            }
            a1[r] = acc * sigmoid(acc);
        }
        let w_mid = self.slice(layout.w_mid);
        let b_mid = self.slice(layout.b_mid);
        let mut a2 = vec![0.0; h];
        for r in 0..h {
            let mut acc = b_mid.at(r, 0);
            for c in 0..h {
                acc += w_mid.at(r, c) * a1[c];
            }
            a2[r] = acc * sigmoid(acc);
        }
        let w_out = self.slice(layout.w_out);
        let b_out = self.slice(layout.b_out);
        let n = self.arch.positions;
        Ok(Matrix::from_fn(self.arch.input_channels, n, |i, pos| {
            let r = i * n + pos;
            let mut acc = b_out.at(r, 0);
            for c in 0..h {
                acc += w_out.at(r, c) * a2[c];
            }
            acc
        }))
    }

    /// Registers the network parameters on a tape starting at `offset` and
    /// returns the handles needed by [`NoisePredictor::predict_on_tape`].
    pub fn tape_params(&self, tape: &mut Tape, offset: usize) -> NetVars {
        let layout = Layout::of(&self.arch);
        let mut reg = |entry: (usize, usize, usize)| {
            let m = self.slice(entry);
            tape.param(m, offset + entry.0)
        };
        NetVars {
            w_in: reg(layout.w_in),
            b_in: reg(layout.b_in),
            time_w: reg(layout.time_w),
            time_b: reg(layout.time_b),
            w_mid: reg(layout.w_mid),
            b_mid: reg(layout.b_mid),
            w_out: reg(layout.w_out),
            b_out: reg(layout.b_out),
        }
    }

    /// Tape forward pass mirroring [`NoisePredictor::predict`]; the two
    /// stay in step through the shared lift and activation kernels.
    pub fn predict_on_tape(&self, tape: &mut Tape, vars: &NetVars, z: Var, t: usize) -> Result<Var> {
        self.check_step(t)?;
        let emb = TimeEmbedding::new(self.arch.time_channels)?.features(t);
        let emb = tape.constant(emb);
        let tvec = tape.affine(emb, vars.time_w, vars.time_b);
        let scaled = tape.scale(z, 1.0 / self.arch.input_scale[t]);
        let lifted = tape.sinusoid_lift(scaled, &self.arch.lift_freqs);
        let flat = tape.reshape(lifted, self.arch.in_dim(), 1);
        let h1 = tape.affine(flat, vars.w_in, vars.b_in);
        let h1t = tape.add(h1, tvec);
        let a1 = tape.silu(h1t);
        let h2 = tape.affine(a1, vars.w_mid, vars.b_mid);
        let a2 = tape.silu(h2);
        let out = tape.affine(a2, vars.w_out, vars.b_out);
        Ok(tape.reshape(out, self.arch.input_channels, self.arch.positions))
    }
}

/// Tape handles for the predictor's parameter matrices.
pub struct NetVars {
    pub w_in: Var,
    pub b_in: Var,
    pub time_w: Var,
    pub time_b: Var,
    pub w_mid: Var,
    pub b_mid: Var,
    pub w_out: Var,
    pub b_out: Var,
}

/// Runs a scalar loss construction on a fresh tape and returns its value
/// together with the exact gradient over `param_len` trainable reals. The
/// closure registers whatever parameter leaves it differentiates through.
pub fn loss_and_grad<F>(param_len: usize, build: F) -> Result<(f64, Vec<f64>)>
where
    F: FnOnce(&mut Tape) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = build(&mut tape)?;
    let mut grad = vec![0.0; param_len];
    let value = tape.backward(loss, 1.0, &mut grad)?;
    Ok((value, grad))
}
