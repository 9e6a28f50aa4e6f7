//! Synthetic walk dataset: K centroids at regular angles on a circle, and
//! samples whose index sequences move to an adjacent centroid (mod K) at
//! every position, observed under isotropic Gaussian noise.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::mat::Matrix;
use crate::quantizer::{nearest_assign, Codebook};

#[derive(Clone, Debug, PartialEq)]
pub struct ToyConfig {
    pub centroids: usize, // K
    pub positions: usize, // N
    pub radius: f64,
    pub noise_std: f64, // sigma_x
}

impl ToyConfig {
    pub fn default_toy() -> Self {
        ToyConfig {
            centroids: 8,
            positions: 5,
            radius: 1.0,
            noise_std: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.centroids < 2 || self.positions < 1 {
            return Err(Error::invalid("need at least 2 centroids and 1 position"));
        }
        if !(self.noise_std > 0.0) || !(self.radius > 0.0) {
            return Err(Error::invalid("radius and noise_std must be positive"));
        }
        Ok(())
    }

    /// Centroid j at angle 2*pi*j/K, radius r; doubles as the frozen
    /// codebook of the fixed-embedding experiments.
    pub fn centroid_codebook(&self) -> Codebook {
        let k = self.centroids;
        let vectors = Matrix::from_fn(k, 2, |j, i| {
            let angle = 2.0 * std::f64::consts::PI * j as f64 / k as f64;
            self.radius * if i == 0 { angle.cos() } else { angle.sin() }
        });
        Codebook::new(vectors, false).expect("valid centroid codebook")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToySample {
    pub q: Vec<usize>,
    pub x: Matrix, // 2 x N
}

/// Draws `count` samples: first index uniform, each later index one step
/// clockwise or counter-clockwise with equal probability, then Gaussian
/// noise around the visited centroids.
pub fn generate(cfg: &ToyConfig, count: usize, rng: &mut impl Rng) -> Result<Vec<ToySample>> {
    cfg.validate()?;
    if count == 0 {
        return Err(Error::invalid("count must be >= 1"));
    }
    let cb = cfg.centroid_codebook();
    let k = cfg.centroids;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let mut q = Vec::with_capacity(cfg.positions);
        q.push(rng.random_range(0..k));
        for _ in 1..cfg.positions {
            let step: isize = if rng.random::<bool>() { 1 } else { -1 };
            let prev = *q.last().unwrap() as isize;
            q.push((prev + step).rem_euclid(k as isize) as usize);
        }
        let mut x = cb.lookup(&q);
        for v in x.data_mut() {
            *v += cfg.noise_std * rng.sample::<f64, _>(StandardNormal);
        }
        out.push(ToySample { q, x });
    }
    Ok(out)
}

/// Adjacent indices must differ by exactly one, modulo K.
pub fn is_valid_sequence(q: &[usize], k: usize) -> bool {
    q.windows(2).all(|w| {
        let diff = (w[1] as isize - w[0] as isize).rem_euclid(k as isize);
        diff == 1 || diff == k as isize - 1
    })
}

/// Nearest-centroid decode of a continuous latent, one index per position.
pub fn decode_to_indices(cb: &Codebook, z_e: &Matrix) -> Result<Vec<usize>> {
    Ok(nearest_assign(cb, z_e)?.indices)
}
