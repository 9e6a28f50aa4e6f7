//! Ancestral sampling of the denoising chain and conditional inpainting
//! with a pinned block, plus chain snapshots for plotting.

use rand::Rng;

use crate::error::{Error, Result};
use crate::mat::Matrix;
use crate::noise_model::NoisePredictor;
use crate::ou_bridge::DiffusionSchedule;
use crate::quantizer::{categorical_logits, softmax_cols, Codebook, DiscreteState};
use crate::training::DecoderModel;

/// Snapshots of one reverse chain at a configurable stride, ending at the
/// fully denoised latent, plus its quantization and decoded observation.
#[derive(Clone, Debug, PartialEq)]
pub struct ChainRecord {
    pub steps: Vec<(usize, Matrix)>,
    pub final_zq: DiscreteState,
    pub final_x: Matrix,
}

impl ChainRecord {
    pub fn final_ze(&self) -> &Matrix {
        &self.steps.last().expect("chain records its endpoint").1
    }
}

/// Observed positions and their latent values for conditional generation.
#[derive(Clone, Debug, PartialEq)]
pub struct InpaintMask {
    known: Vec<usize>,
    known_values: Matrix, // d x |known|
}

impl InpaintMask {
    pub fn new(known: Vec<usize>, known_values: Matrix) -> Result<Self> {
        if known_values.cols() != known.len() {
            return Err(Error::shape(
                "one value column per known position is required",
            ));
        }
        let mut seen = std::collections::HashSet::new();
        for &p in &known {
            if !seen.insert(p) {
                return Err(Error::invalid(format!("duplicate known position {p}")));
            }
        }
        Ok(InpaintMask {
            known,
            known_values,
        })
    }

    pub fn empty(dim: usize) -> Self {
        InpaintMask {
            known: Vec::new(),
            known_values: Matrix::zeros(dim, 0),
        }
    }

    pub fn known(&self) -> &[usize] {
        &self.known
    }

    pub fn known_values(&self) -> &Matrix {
        &self.known_values
    }

    pub fn is_empty(&self) -> bool {
        self.known.is_empty()
    }

    fn check_range(&self, n: usize) -> Result<()> {
        if let Some(&p) = self.known.iter().find(|&&p| p >= n) {
            return Err(Error::invalid(format!(
                "known position {p} outside 0..{n}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SampleOptions {
    pub record_stride: usize,
    /// Inject Gaussian noise at the matched step variance for t > 1; the
    /// final step is always the deterministic mean.
    pub stochastic_reverse: bool,
}

impl Default for SampleOptions {
    fn default() -> Self {
        SampleOptions {
            record_stride: 10,
            stochastic_reverse: true,
        }
    }
}

/// Draw from the uninformative terminal law N(z_star, eta^2/(2 theta) I).
pub fn stationary_draw(s: &DiffusionSchedule, rng: &mut impl Rng) -> Matrix {
    let (d, n) = s.z_star().shape();
    let noise = Matrix::randn(d, n, rng);
    s.z_star().axpy(s.stationary_var().sqrt(), &noise)
}

fn should_record(t: usize, t_max: usize, stride: usize) -> bool {
    t == t_max || t == 0 || (stride > 0 && t % stride == 0)
}

/// Unconditional ancestral sampling: start stationary, walk the reverse
/// kernel down to t = 0, then quantize and decode.
pub fn sample(
    s: &DiffusionSchedule,
    m: &NoisePredictor,
    cb: &Codebook,
    dec: &DecoderModel,
    opts: &SampleOptions,
    rng: &mut impl Rng,
) -> Result<ChainRecord> {
    run_chain(s, m, cb, dec, &InpaintMask::empty(s.z_star().rows()), opts, rng)
}

/// Conditional sampling: unknown positions follow the learned reverse
/// kernel applied to the full latent, known positions walk the noising
/// bridge anchored at their observed values (forward-marginal law at every
/// step) and land on them exactly at t = 0. An empty mask makes this
/// identical to unconditional sampling, draw for draw.
pub fn inpaint(
    s: &DiffusionSchedule,
    m: &NoisePredictor,
    cb: &Codebook,
    dec: &DecoderModel,
    mask: &InpaintMask,
    opts: &SampleOptions,
    rng: &mut impl Rng,
) -> Result<ChainRecord> {
    run_chain(s, m, cb, dec, mask, opts, rng)
}

fn run_chain(
    s: &DiffusionSchedule,
    m: &NoisePredictor,
    cb: &Codebook,
    dec: &DecoderModel,
    mask: &InpaintMask,
    opts: &SampleOptions,
    rng: &mut impl Rng,
) -> Result<ChainRecord> {
    if s.z_star().data().iter().any(|&v| v != 0.0) {
        return Err(Error::UnsupportedParameterization(
            "sampling requires z_star = 0".to_string(),
        ));
    }
    let (_d, n) = s.z_star().shape();
    mask.check_range(n)?;
    let t_max = s.step_count();

    let mut z = stationary_draw(s, rng);
    init_known(s, mask, &mut z, rng)?;

    let mut steps = Vec::new();
    if should_record(t_max, t_max, opts.record_stride) {
        steps.push((t_max, z.clone()));
    }

    for t in (1..=t_max).rev() {
        // the known block bridges from its own pre-update state
        let known_state = Matrix::from_fn(z.rows(), mask.known().len(), |i, j| {
            z.at(i, mask.known()[j])
        });
        let pred = m.predict(&z, t)?;
        let moments = s.reverse_mean(t, &z, &pred)?;
        z = if opts.stochastic_reverse && t > 1 {
            let noise = Matrix::randn(z.rows(), z.cols(), rng);
            moments.mean.axpy(moments.var.sqrt(), &noise)
        } else {
            moments.mean
        };
        bridge_known(s, mask, t, &known_state, &mut z, rng)?;
        if should_record(t - 1, t_max, opts.record_stride) {
            steps.push((t - 1, z.clone()));
        }
    }

    let probs = softmax_cols(&categorical_logits(cb, &z)?, 1.0);
    let indices = sample_categorical_cols(&probs, rng);
    let final_x = dec.sample(&indices, cb, rng);
    Ok(ChainRecord {
        steps,
        final_zq: DiscreteState {
            indices,
            relaxed: None,
        },
        final_x,
    })
}

/// Initialize the known block at the terminal step from the forward
/// marginal of the observed values.
fn init_known(
    s: &DiffusionSchedule,
    mask: &InpaintMask,
    z: &mut Matrix,
    rng: &mut impl Rng,
) -> Result<()> {
    if mask.is_empty() {
        return Ok(());
    }
    let t = s.step_count();
    let vals = mask.known_values();
    if t == 0 {
        return pin_known(mask, z);
    }
    let root_ab = s.alpha_bar(t).sqrt();
    let sd = (s.stationary_var() * (1.0 - s.alpha_bar(t))).sqrt();
    let noise = Matrix::randn(z.rows(), vals.cols(), rng);
    for (j, &pos) in mask.known().iter().enumerate() {
        for i in 0..z.rows() {
            z.set(i, pos, root_ab * vals.at(i, j) + sd * noise.at(i, j));
        }
    }
    Ok(())
}

fn pin_known(mask: &InpaintMask, z: &mut Matrix) -> Result<()> {
    let vals = mask.known_values();
    for (j, &pos) in mask.known().iter().enumerate() {
        for i in 0..z.rows() {
            z.set(i, pos, vals.at(i, j));
        }
    }
    Ok(())
}

/// Step the known block from t to t-1 along the noising bridge anchored at
/// the observed values: a draw from the bridge posterior given the block's
/// current state and its clean endpoint. Marginally over runs this is the
/// forward law q(z^{t-1} | observed); across steps the trajectory stays
/// continuous, ending exactly on the observed values at t = 0.
fn bridge_known(
    s: &DiffusionSchedule,
    mask: &InpaintMask,
    t: usize,
    known_state: &Matrix,
    z: &mut Matrix,
    rng: &mut impl Rng,
) -> Result<()> {
    if mask.is_empty() {
        return Ok(());
    }
    if t == 1 {
        return pin_known(mask, z);
    }
    let vals = mask.known_values();
    let one_minus_ab_t = 1.0 - s.alpha_bar(t);
    if one_minus_ab_t < 1e-12 {
        return pin_known(mask, z);
    }
    let beta_t = s.beta(t);
    let ab_prev = s.alpha_bar(t - 1);
    let c_clean = beta_t * ab_prev.sqrt() / one_minus_ab_t;
    let c_state = (1.0 - ab_prev) * s.alpha(t).sqrt() / one_minus_ab_t;
    let sd = (s.stationary_var() * (1.0 - ab_prev) / one_minus_ab_t * beta_t).sqrt();
    let noise = Matrix::randn(z.rows(), vals.cols(), rng);
    for (j, &pos) in mask.known().iter().enumerate() {
        for i in 0..z.rows() {
            let mean = c_clean * vals.at(i, j) + c_state * known_state.at(i, j);
            z.set(i, pos, mean + sd * noise.at(i, j));
        }
    }
    Ok(())
}

/// One index per column, inverse-CDF sampled from simplex columns.
pub fn sample_categorical_cols(probs: &Matrix, rng: &mut impl Rng) -> Vec<usize> {
    (0..probs.cols())
        .map(|n| {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            for k in 0..probs.rows() {
                acc += probs.at(k, n);
                if u < acc {
                    return k;
                }
            }
            probs.rows() - 1
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise_model::NetArch;
    use crate::toy_domain::ToyConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn toy_model(t_steps: usize, seed: u64) -> (DiffusionSchedule, NoisePredictor, Codebook, DecoderModel) {
        let toy = ToyConfig::default_toy();
        let s = DiffusionSchedule::uniform(t_steps, 0.1, 2.0, 0.1, Matrix::zeros(2, 5)).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let m = NoisePredictor::init(NetArch::toy(2, 5, t_steps), &mut rng);
        (s, m, toy.centroid_codebook(), DecoderModel::new(toy.noise_std).unwrap())
    }

    #[test]
    fn chain_shape_and_ordering() {
        let (s, m, cb, dec) = toy_model(50, 1);
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let rec = sample(&s, &m, &cb, &dec, &SampleOptions::default(), &mut rng).unwrap();
        assert_eq!(rec.steps.first().unwrap().0, 50);
        assert_eq!(rec.steps.last().unwrap().0, 0);
        for w in rec.steps.windows(2) {
            assert!(w[1].0 < w[0].0);
        }
        for (_, z) in &rec.steps {
            assert_eq!(z.shape(), (2, 5));
        }
        assert_eq!(rec.final_zq.indices.len(), 5);
        assert_eq!(rec.final_x.shape(), (2, 5));
    }

    #[test]
    fn sampling_is_deterministic_per_seed() {
        let (s, m, cb, dec) = toy_model(20, 3);
        let opts = SampleOptions::default();
        let a = sample(&s, &m, &cb, &dec, &opts, &mut ChaCha12Rng::seed_from_u64(9)).unwrap();
        let b = sample(&s, &m, &cb, &dec, &opts, &mut ChaCha12Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        let c = sample(&s, &m, &cb, &dec, &opts, &mut ChaCha12Rng::seed_from_u64(10)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn empty_mask_equals_unconditional_path() {
        let (s, m, cb, dec) = toy_model(15, 4);
        let opts = SampleOptions::default();
        let mask = InpaintMask::empty(2);
        let a = sample(&s, &m, &cb, &dec, &opts, &mut ChaCha12Rng::seed_from_u64(11)).unwrap();
        let b = inpaint(&s, &m, &cb, &dec, &mask, &opts, &mut ChaCha12Rng::seed_from_u64(11)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn full_mask_reproduces_known_values_exactly() {
        let (s, m, cb, dec) = toy_model(10, 5);
        let mut rng = ChaCha12Rng::seed_from_u64(12);
        let vals = Matrix::randn(2, 5, &mut rng);
        let mask = InpaintMask::new(vec![0, 1, 2, 3, 4], vals.clone()).unwrap();
        let rec = inpaint(&s, &m, &cb, &dec, &mask, &SampleOptions::default(), &mut rng).unwrap();
        assert_eq!(rec.final_ze(), &vals);
    }

    #[test]
    fn mask_validation() {
        assert!(InpaintMask::new(vec![0, 0], Matrix::zeros(2, 2)).is_err());
        assert!(InpaintMask::new(vec![0], Matrix::zeros(2, 2)).is_err());
        let (s, m, cb, dec) = toy_model(5, 6);
        let mask = InpaintMask::new(vec![9], Matrix::zeros(2, 1)).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(13);
        assert!(inpaint(&s, &m, &cb, &dec, &mask, &SampleOptions::default(), &mut rng).is_err());
    }

    #[test]
    fn zero_step_chain_still_quantizes_and_decodes() {
        let toy = ToyConfig::default_toy();
        let s = DiffusionSchedule::uniform(0, 0.1, 2.0, 0.1, Matrix::zeros(2, 5)).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(14);
        let m = NoisePredictor::init(NetArch::toy(2, 5, 0), &mut rng);
        let rec = sample(
            &s,
            &m,
            &toy.centroid_codebook(),
            &DecoderModel::new(0.1).unwrap(),
            &SampleOptions::default(),
            &mut rng,
        )
        .unwrap();
        assert_eq!(rec.steps.len(), 1);
        assert_eq!(rec.steps[0].0, 0);
        assert_eq!(rec.final_zq.indices.len(), 5);
    }

    #[test]
    fn single_embedding_decodes_concentrate() {
        // With one embedding every draw decodes around it, whatever the
        // untrained predictor does along the way.
        let e = vec![0.7, -0.4];
        let cb = Codebook::new(Matrix::from_vec(1, 2, e.clone()).unwrap(), false).unwrap();
        let s = DiffusionSchedule::uniform(8, 0.1, 2.0, 0.1, Matrix::zeros(2, 3)).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(18);
        let m = NoisePredictor::init(NetArch::toy(2, 3, 8), &mut rng);
        let sigma = 0.1;
        let dec = DecoderModel::new(sigma).unwrap();
        let runs = 1000usize;
        let mut mean = Matrix::zeros(2, 3);
        for _ in 0..runs {
            let rec = sample(&s, &m, &cb, &dec, &SampleOptions::default(), &mut rng).unwrap();
            assert!(rec.final_zq.indices.iter().all(|&k| k == 0));
            mean = mean.add(&rec.final_x);
        }
        mean = mean.scale(1.0 / runs as f64);
        // pooled over the six coordinates: sum of squared standardized
        // deviations is chi-square with 6 dof, critical 22.46 at p = 0.001
        let se = sigma / (runs as f64).sqrt();
        let mut chi2 = 0.0;
        for n in 0..3 {
            for i in 0..2 {
                let dev = (mean.at(i, n) - e[i]) / se;
                chi2 += dev * dev;
            }
        }
        assert!(chi2 < 22.46, "decoded mean deviates: chi2 = {chi2}");
    }

    #[test]
    fn stationary_start_variance_within_one_percent() {
        let s = DiffusionSchedule::uniform(5, 0.1, 2.0, 0.3, Matrix::zeros(10, 10)).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(16);
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        let mut count = 0usize;
        while count < 1_000_000 {
            let z = stationary_draw(&s, &mut rng);
            for &v in z.data() {
                sum += v;
                sumsq += v * v;
            }
            count += z.len();
        }
        let mean = sum / count as f64;
        let var = sumsq / count as f64 - mean * mean;
        let target = s.stationary_var();
        assert!((var - target).abs() / target < 0.01, "var {var} vs {target}");
    }

    #[test]
    fn known_block_follows_forward_marginal() {
        // Empirical law of the known block at every recorded step matches
        // q(z^t | observed) in mean and variance.
        let s = DiffusionSchedule::uniform(3, 0.2, 1.5, 0.6, Matrix::zeros(1, 2)).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(17);
        let m = NoisePredictor::init(
            NetArch {
                input_channels: 1,
                positions: 2,
                hidden_units: 4,
                time_channels: 4,
                max_step: 3,
                input_scale: vec![1.0; 4],
                lift_freqs: vec![1.0],
            },
            &mut rng,
        );
        let cb = Codebook::new(Matrix::from_vec(2, 1, vec![-1.0, 1.0]).unwrap(), false).unwrap();
        let dec = DecoderModel::new(0.2).unwrap();
        let known_val = 0.8;
        let mask = InpaintMask::new(vec![0], Matrix::from_vec(1, 1, vec![known_val]).unwrap())
            .unwrap();
        let opts = SampleOptions {
            record_stride: 1,
            stochastic_reverse: true,
        };
        let runs = 10_000usize;
        let mut acc: std::collections::HashMap<usize, (f64, f64)> = Default::default();
        for _ in 0..runs {
            let rec = inpaint(&s, &m, &cb, &dec, &mask, &opts, &mut rng).unwrap();
            for (t, z) in &rec.steps {
                let v = z.at(0, 0);
                let e = acc.entry(*t).or_insert((0.0, 0.0));
                e.0 += v;
                e.1 += v * v;
            }
        }
        // pooled over the recorded steps: six standardized deviations give
        // a chi-square with 6 dof, critical 22.46 at p = 0.001
        let mut chi2 = 0.0;
        for (&t, &(sv, svv)) in &acc {
            let mean = sv / runs as f64;
            let var = svv / runs as f64 - mean * mean;
            if t == 0 {
                assert!((mean - known_val).abs() < 1e-12);
                assert!(var < 1e-12);
                continue;
            }
            // closed-form marginal of the observed scalar, written out here
            let truth_mean = s.alpha_bar(t).sqrt() * known_val;
            let truth_var = s.stationary_var() * (1.0 - s.alpha_bar(t));
            let se_mean = truth_var.sqrt() / (runs as f64).sqrt();
            let se_var = truth_var * (2.0 / (runs as f64 - 1.0)).sqrt();
            let dm = (mean - truth_mean) / se_mean;
            let dv = (var - truth_var) / se_var;
            chi2 += dm * dm + dv * dv;
        }
        assert!(chi2 < 22.46, "known-block marginals deviate: chi2 = {chi2}");
    }
}
