//! Metric suite: per-position empirical divergences with additive
//! smoothing, masked-conditional Monte Carlo likelihoods, an exact
//! order-1 autoregressive baseline and permutation-matched codebook
//! recovery.

use rand::Rng;

use crate::assignment::min_cost_assignment;
use crate::error::{Error, Result};
use crate::generation::{inpaint, InpaintMask, SampleOptions};
use crate::mat::Matrix;
use crate::noise_model::NoisePredictor;
use crate::ou_bridge::DiffusionSchedule;
use crate::quantizer::{categorical_logits, softmax_cols, Codebook};
use crate::toy_domain::ToySample;

/// Symbol counts per position: counts[n][k] over positions n and symbols k.
#[derive(Clone, Debug, PartialEq)]
pub struct PositionalHistograms {
    counts: Vec<Vec<u64>>,
}

impl PositionalHistograms {
    pub fn new(positions: usize, symbols: usize) -> Self {
        PositionalHistograms {
            counts: vec![vec![0; symbols]; positions],
        }
    }

    pub fn from_sequences<'a>(
        seqs: impl IntoIterator<Item = &'a [usize]>,
        positions: usize,
        symbols: usize,
    ) -> Result<Self> {
        let mut h = Self::new(positions, symbols);
        for seq in seqs {
            h.add(seq)?;
        }
        Ok(h)
    }

    pub fn add(&mut self, seq: &[usize]) -> Result<()> {
        if seq.len() != self.positions() {
            return Err(Error::shape("sequence length does not match histogram"));
        }
        for (n, &k) in seq.iter().enumerate() {
            if k >= self.symbols() {
                return Err(Error::invalid(format!("symbol {k} out of range")));
            }
            self.counts[n][k] += 1;
        }
        Ok(())
    }

    pub fn positions(&self) -> usize {
        self.counts.len()
    }

    pub fn symbols(&self) -> usize {
        self.counts[0].len()
    }

    pub fn total(&self, position: usize) -> u64 {
        self.counts[position].iter().sum()
    }

    pub fn count(&self, position: usize, symbol: usize) -> u64 {
        self.counts[position][symbol]
    }
}

/// Per-position KL(truth || model) with one pseudo-count of smoothing per
/// symbol on both histograms, plus the mean over positions.
pub fn positional_kl(
    truth: &PositionalHistograms,
    model: &PositionalHistograms,
) -> Result<(Vec<f64>, f64)> {
    if truth.positions() != model.positions() || truth.symbols() != model.symbols() {
        return Err(Error::shape("histograms must share positions and symbols"));
    }
    let k = truth.symbols() as f64;
    let mut per_position = Vec::with_capacity(truth.positions());
    for n in 0..truth.positions() {
        let (tt, tm) = (truth.total(n), model.total(n));
        if tt == 0 || tm == 0 {
            return Err(Error::invalid(format!("empty histogram at position {n}")));
        }
        let (tt, tm) = (tt as f64 + k, tm as f64 + k);
        let mut kl = 0.0;
        for s in 0..truth.symbols() {
            let p = (truth.count(n, s) as f64 + 1.0) / tt;
            let q = (model.count(n, s) as f64 + 1.0) / tm;
            kl += p * (p / q).ln();
        }
        per_position.push(kl);
    }
    let mean = per_position.iter().sum::<f64>() / per_position.len() as f64;
    Ok((per_position, mean))
}

/// Order-1 position-dependent chain over symbols, fit by smoothed counts.
#[derive(Clone, Debug, PartialEq)]
pub struct ArBaseline {
    initial: Vec<f64>,
    transitions: Vec<Matrix>, // transitions[s] maps symbol at s to s+1, rows sum to 1
}

impl ArBaseline {
    pub fn symbols(&self) -> usize {
        self.initial.len()
    }

    pub fn positions(&self) -> usize {
        self.transitions.len() + 1
    }

    pub fn initial(&self) -> &[f64] {
        &self.initial
    }

    pub fn transition(&self, position: usize) -> &Matrix {
        &self.transitions[position]
    }

    /// Joint log-probability of a full sequence under the chain.
    pub fn log_prob(&self, seq: &[usize]) -> f64 {
        let mut lp = self.initial[seq[0]].ln();
        for s in 0..self.transitions.len() {
            lp += self.transitions[s].at(seq[s], seq[s + 1]).ln();
        }
        lp
    }
}

/// Maximum-likelihood counts with one pseudo-count of additive smoothing.
pub fn fit_ar_baseline(
    sequences: &[Vec<usize>],
    symbols: usize,
    positions: usize,
) -> Result<ArBaseline> {
    if sequences.is_empty() {
        return Err(Error::invalid("cannot fit the baseline on an empty set"));
    }
    let mut init_counts = vec![1.0f64; symbols];
    let mut trans_counts = vec![Matrix::filled(symbols, symbols, 1.0); positions - 1];
    for seq in sequences {
        if seq.len() != positions {
            return Err(Error::shape("sequence length mismatch"));
        }
        init_counts[seq[0]] += 1.0;
        for s in 0..positions - 1 {
            let m = &mut trans_counts[s];
            m.set(seq[s], seq[s + 1], m.at(seq[s], seq[s + 1]) + 1.0);
        }
    }
    let init_total: f64 = init_counts.iter().sum();
    let initial = init_counts.into_iter().map(|c| c / init_total).collect();
    let transitions = trans_counts
        .into_iter()
        .map(|m| {
            Matrix::from_fn(symbols, symbols, |r, c| {
                let row_total: f64 = (0..symbols).map(|j| m.at(r, j)).sum();
                m.at(r, c) / row_total
            })
        })
        .collect();
    Ok(ArBaseline {
        initial,
        transitions,
    })
}

pub fn ar_sample(b: &ArBaseline, rng: &mut impl Rng) -> Vec<usize> {
    let mut seq = Vec::with_capacity(b.positions());
    seq.push(sample_index(&b.initial, rng));
    for s in 0..b.transitions.len() {
        let row: Vec<f64> = (0..b.symbols())
            .map(|c| b.transitions[s].at(seq[s], c))
            .collect();
        seq.push(sample_index(&row, rng));
    }
    seq
}

fn sample_index(probs: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (k, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return k;
        }
    }
    probs.len() - 1
}

/// Exact conditional negative log-likelihood of the masked symbols given
/// the observed ones, marginalized by enumerating every masked assignment.
/// Reported in nats per masked position.
pub fn ar_conditional_nll(
    b: &ArBaseline,
    masked: &[usize],
    sequences: &[Vec<usize>],
) -> Result<f64> {
    if masked.is_empty() || sequences.is_empty() {
        return Err(Error::invalid("need masked positions and sequences"));
    }
    if masked.iter().any(|&p| p >= b.positions()) {
        return Err(Error::invalid("masked position out of range"));
    }
    let mut total = 0.0;
    for seq in sequences {
        let joint = b.log_prob(seq);
        // log of the observed-part marginal: sum joint over masked symbols
        let mut work = seq.clone();
        let mut lse = f64::NEG_INFINITY;
        let combos = b.symbols().pow(masked.len() as u32);
        for combo in 0..combos {
            let mut c = combo;
            for &pos in masked {
                work[pos] = c % b.symbols();
                c /= b.symbols();
            }
            let lp = b.log_prob(&work);
            lse = log_add(lse, lp);
        }
        total += -(joint - lse);
    }
    Ok(total / (sequences.len() * masked.len()) as f64)
}

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// Monte Carlo estimate of the masked-conditional likelihood under the
/// denoising model: draw the masked latents by inpainting M times, score
/// the true masked symbols under the per-position categorical read-out,
/// and average in probability space. Nats per masked position.
#[allow(clippy::too_many_arguments)]
pub fn conditional_nll(
    s: &DiffusionSchedule,
    m: &NoisePredictor,
    cb: &Codebook,
    dec: &crate::training::DecoderModel,
    masked: &[usize],
    samples: &[ToySample],
    mc_draws: usize,
    opts: &SampleOptions,
    rng: &mut impl Rng,
) -> Result<f64> {
    if mc_draws == 0 {
        return Err(Error::invalid("need at least one Monte Carlo draw"));
    }
    if masked.is_empty() || samples.is_empty() {
        return Err(Error::invalid("need masked positions and samples"));
    }
    let n = s.z_star().cols();
    if masked.iter().any(|&p| p >= n) {
        return Err(Error::invalid("masked position out of range"));
    }
    let observed: Vec<usize> = (0..n).filter(|p| !masked.contains(p)).collect();
    let mut total = 0.0;
    for sample in samples {
        let known_values = Matrix::from_fn(sample.x.rows(), observed.len(), |i, j| {
            sample.x.at(i, observed[j])
        });
        let mask = InpaintMask::new(observed.clone(), known_values)?;
        let mut lse = f64::NEG_INFINITY;
        for _ in 0..mc_draws {
            let rec = inpaint(s, m, cb, dec, &mask, opts, rng)?;
            let probs = softmax_cols(&categorical_logits(cb, rec.final_ze())?, 1.0);
            let mut lp = 0.0;
            for &pos in masked {
                lp += probs.at(sample.q[pos], pos).ln();
            }
            lse = log_add(lse, lp);
        }
        let log_estimate = lse - (mc_draws as f64).ln();
        total += -log_estimate;
    }
    Ok(total / (samples.len() * masked.len()) as f64)
}

/// Smallest mean Euclidean distance between learned embeddings and
/// reference centroids over all index permutations.
pub fn codebook_recovery(learned: &Codebook, truth: &Codebook) -> Result<f64> {
    if learned.k() != truth.k() || learned.dim() != truth.dim() {
        return Err(Error::shape("codebooks must share K and d"));
    }
    let cost = Matrix::from_fn(learned.k(), truth.k(), |i, j| {
        let (a, b) = (learned.vector(i), truth.vector(j));
        a.iter()
            .zip(&b)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt()
    });
    let (_, total) = min_cost_assignment(&cost)?;
    Ok(total / learned.k() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toy_domain::{generate, is_valid_sequence, ToyConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn identical_histograms_have_zero_divergence() {
        let seqs: Vec<Vec<usize>> = vec![vec![0, 1, 2], vec![2, 1, 0], vec![1, 1, 1]];
        let refs: Vec<&[usize]> = seqs.iter().map(|s| s.as_slice()).collect();
        let h = PositionalHistograms::from_sequences(refs.iter().copied(), 3, 3).unwrap();
        let (per, mean) = positional_kl(&h, &h).unwrap();
        assert!(per.iter().all(|&v| v == 0.0));
        assert_eq!(mean, 0.0);
    }

    #[test]
    fn smoothed_divergence_matches_direct_formula() {
        // truth uniform over 8 symbols with 1e4 counts, model degenerate on
        // symbol 0; the expected value comes from writing the smoothing
        // formula out by hand.
        let n_samples = 10_000u64;
        let k = 8usize;
        let mut truth = PositionalHistograms::new(1, k);
        let mut model = PositionalHistograms::new(1, k);
        for i in 0..n_samples {
            truth.add(&[(i % 8) as usize]).unwrap();
            model.add(&[0]).unwrap();
        }
        let (per, _) = positional_kl(&truth, &model).unwrap();
        let tt = n_samples as f64 + k as f64;
        let p = (1250.0 + 1.0) / tt;
        let q_hit = (n_samples as f64 + 1.0) / tt;
        let q_miss = 1.0 / tt;
        let expect = p * (p / q_hit).ln() + 7.0 * p * (p / q_miss).ln();
        assert!((per[0] - expect).abs() < 1e-12, "{} vs {expect}", per[0]);
    }

    #[test]
    fn divergence_positive_on_unequal_histograms() {
        let mut a = PositionalHistograms::new(2, 4);
        let mut b = PositionalHistograms::new(2, 4);
        for _ in 0..500 {
            a.add(&[0, 1]).unwrap();
            b.add(&[1, 1]).unwrap();
        }
        let (per, mean) = positional_kl(&a, &b).unwrap();
        assert!(per[0] > 0.0);
        assert!(mean > 0.0);
        // empty model histogram errors
        let empty = PositionalHistograms::new(2, 4);
        assert!(positional_kl(&a, &empty).is_err());
    }

    #[test]
    fn baseline_learns_walk_transitions() {
        let cfg = ToyConfig::default_toy();
        let mut rng = ChaCha12Rng::seed_from_u64(81);
        let data = generate(&cfg, 100_000, &mut rng).unwrap();
        let seqs: Vec<Vec<usize>> = data.into_iter().map(|s| s.q).collect();
        let b = fit_ar_baseline(&seqs, 8, 5).unwrap();
        for s in 0..4 {
            let m = b.transition(s);
            for from in 0..8 {
                let up = (from + 1) % 8;
                let down = (from + 7) % 8;
                assert!(m.at(from, up) > 0.45, "s={s} from={from}: {}", m.at(from, up));
                assert!(m.at(from, down) > 0.45);
                for to in 0..8 {
                    if to != up && to != down {
                        assert!(m.at(from, to) < 0.01);
                    }
                }
            }
        }
    }

    #[test]
    fn baseline_samples_are_overwhelmingly_valid() {
        let cfg = ToyConfig::default_toy();
        let mut rng = ChaCha12Rng::seed_from_u64(82);
        let data = generate(&cfg, 50_000, &mut rng).unwrap();
        let seqs: Vec<Vec<usize>> = data.into_iter().map(|s| s.q).collect();
        let b = fit_ar_baseline(&seqs, 8, 5).unwrap();
        let valid = (0..10_000)
            .filter(|_| is_valid_sequence(&ar_sample(&b, &mut rng), 8))
            .count();
        assert!(valid >= 9900, "valid = {valid}");
    }

    #[test]
    fn single_sequence_gives_near_deterministic_chain() {
        // smoothing leaves the observed transition as the strict row mode,
        // twice as likely as any unseen one
        let b = fit_ar_baseline(&[vec![3, 4, 5, 6, 7]], 8, 5).unwrap();
        assert!((b.initial()[3] - 2.0 / 9.0).abs() < 1e-12);
        for s in 0..4 {
            let m = b.transition(s);
            let row = 3 + s;
            for to in 0..8 {
                if to != row + 1 {
                    assert!(m.at(row, row + 1) >= 2.0 * m.at(row, to) - 1e-12);
                }
            }
        }
        assert!(fit_ar_baseline(&[], 8, 5).is_err());
    }

    #[test]
    fn conditional_nll_of_baseline_approaches_conditional_entropy() {
        // Fit a chain, evaluate its own samples: the mean conditional
        // negative log-likelihood estimates the exact conditional entropy,
        // computed here by full enumeration over sequences.
        let cfg = ToyConfig::default_toy();
        let mut rng = ChaCha12Rng::seed_from_u64(83);
        let data = generate(&cfg, 20_000, &mut rng).unwrap();
        let seqs: Vec<Vec<usize>> = data.into_iter().map(|s| s.q).collect();
        let b = fit_ar_baseline(&seqs, 8, 5).unwrap();
        let masked = vec![2, 3, 4];

        // exact expectation: sum over all 8^5 sequences of p * (-log p(masked|obs))
        let mut truth = 0.0;
        let mut seq = vec![0usize; 5];
        let mut var_acc = 0.0;
        for code in 0..8usize.pow(5) {
            let mut c = code;
            for slot in seq.iter_mut() {
                *slot = c % 8;
                c /= 8;
            }
            let p = b.log_prob(&seq).exp();
            let nll = ar_conditional_nll(&b, &masked, std::slice::from_ref(&seq)).unwrap();
            truth += p * nll;
            var_acc += p * nll * nll;
        }
        let var = var_acc - truth * truth;

        let n = 100_000usize;
        let samples: Vec<Vec<usize>> = (0..n).map(|_| ar_sample(&b, &mut rng)).collect();
        let estimate = ar_conditional_nll(&b, &masked, &samples).unwrap();
        let se = (var / n as f64).sqrt();
        assert!(
            (estimate - truth).abs() < 3.0 * se,
            "estimate {estimate} vs exact {truth} (se {se})"
        );
    }

    #[test]
    fn conditional_nll_invariant_to_draw_order() {
        // averaging in probability space is permutation invariant; two seeds
        // for the same chain change draws, not validity of the bound below
        let b = fit_ar_baseline(&[vec![0, 1, 2], vec![2, 1, 0], vec![1, 0, 1]], 3, 3).unwrap();
        let masked = vec![1];
        let v = ar_conditional_nll(&b, &masked, &[vec![0, 1, 2]]).unwrap();
        assert!(v >= 0.0);
    }

    #[test]
    fn recovery_zero_on_permutations_and_norm_on_offsets() {
        let cfg = ToyConfig::default_toy();
        let truth = cfg.centroid_codebook();
        assert_eq!(codebook_recovery(&truth, &truth).unwrap(), 0.0);

        // cyclic shift
        let shifted = Codebook::new(
            Matrix::from_fn(8, 2, |k, i| truth.vectors().at((k + 3) % 8, i)),
            false,
        )
        .unwrap();
        assert!(codebook_recovery(&shifted, &truth).unwrap() < 1e-12);

        // uniform offset v: assignment unchanged, distance ||v||
        let v = [0.05f64, -0.03];
        let offset = Codebook::new(
            Matrix::from_fn(8, 2, |k, i| truth.vectors().at(k, i) + v[i]),
            false,
        )
        .unwrap();
        let norm = (v[0] * v[0] + v[1] * v[1]).sqrt();
        assert!((codebook_recovery(&offset, &truth).unwrap() - norm).abs() < 1e-12);
    }

    #[test]
    fn recovery_is_a_permutation_metric() {
        let mut rng = ChaCha12Rng::seed_from_u64(85);
        for _ in 0..20 {
            let a = Codebook::new(Matrix::randn(5, 2, &mut rng), false).unwrap();
            let b = Codebook::new(Matrix::randn(5, 2, &mut rng), false).unwrap();
            let c = Codebook::new(Matrix::randn(5, 2, &mut rng), false).unwrap();
            let ab = codebook_recovery(&a, &b).unwrap();
            let ba = codebook_recovery(&b, &a).unwrap();
            assert!((ab - ba).abs() < 1e-9, "symmetry");
            let ac = codebook_recovery(&a, &c).unwrap();
            let cb = codebook_recovery(&c, &b).unwrap();
            assert!(ab <= ac + cb + 1e-9, "triangle inequality");
        }
    }

    #[test]
    fn model_conditional_nll_uniform_and_single_class() {
        use crate::noise_model::{NetArch, NoisePredictor};
        use crate::training::DecoderModel;
        let t_steps = 3;
        let s = DiffusionSchedule::uniform(t_steps, 0.2, 2.0, 0.5, Matrix::zeros(2, 3)).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(86);
        let m = NoisePredictor::init(NetArch::toy(2, 3, t_steps), &mut rng);
        let dec = DecoderModel::new(0.1).unwrap();
        let samples = vec![ToySample {
            q: vec![0, 1, 0],
            x: Matrix::randn(2, 3, &mut rng),
        }];
        let opts = SampleOptions::default();

        // identical embeddings make the read-out exactly uniform
        let uniform_cb =
            Codebook::new(Matrix::from_fn(4, 2, |_, i| if i == 0 { 0.3 } else { -0.2 }), false)
                .unwrap();
        let nll = conditional_nll(&s, &m, &uniform_cb, &dec, &[1, 2], &samples, 8, &opts, &mut rng)
            .unwrap();
        assert!((nll - 4.0f64.ln()).abs() < 1e-9, "{nll}");

        // a single class is certain
        let single = Codebook::new(Matrix::from_vec(1, 2, vec![0.1, 0.2]).unwrap(), false).unwrap();
        let samples1 = vec![ToySample {
            q: vec![0, 0, 0],
            x: Matrix::randn(2, 3, &mut rng),
        }];
        let nll1 =
            conditional_nll(&s, &m, &single, &dec, &[2], &samples1, 4, &opts, &mut rng).unwrap();
        assert!(nll1.abs() < 1e-12);
    }
}
