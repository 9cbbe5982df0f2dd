//! Gaussian mixture on a circle, the usual mode-collapse check for 2-D GANs.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RingSpec {
    pub modes: usize,
    pub radius: f64,
    pub std: f64,
}

impl Default for RingSpec {
    fn default() -> Self {
        Self {
            modes: 8,
            radius: 2.0,
            std: 0.02,
        }
    }
}

pub fn ring_centers(spec: &RingSpec) -> Vec<[f64; 2]> {
    (0..spec.modes)
        .map(|i| {
            let a = std::f64::consts::TAU * i as f64 / spec.modes as f64;
            [spec.radius * a.cos(), spec.radius * a.sin()]
        })
        .collect()
}

/// `n` draws, mode chosen uniformly; returns `[n, 2]`.
pub fn ring_samples<R: Rng + ?Sized>(spec: &RingSpec, n: usize, rng: &mut R) -> Tensor {
    let centers = ring_centers(spec);
    let mut data = Vec::with_capacity(2 * n);
    for _ in 0..n {
        let c = centers[rng.random_range(0..centers.len())];
        for x in c {
            let e: f64 = rng.sample(StandardNormal);
            data.push(x + spec.std * e);
        }
    }
    Tensor::from_parts(vec![n, 2], data)
}

/// Number of centres with at least one sample within three mode deviations.
pub fn covered_modes(samples: &Tensor, spec: &RingSpec) -> usize {
    let reach2 = (3.0 * spec.std).powi(2);
    ring_centers(spec)
        .iter()
        .filter(|c| {
            samples
                .data()
                .chunks_exact(2)
                .any(|p| (p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2) <= reach2)
        })
        .count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn true_samples_cover_every_mode() {
        let spec = RingSpec::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = ring_samples(&spec, 400, &mut rng);
        assert_eq!(covered_modes(&s, &spec), 8);
    }

    #[test]
    fn collapsed_samples_cover_one() {
        let spec = RingSpec::default();
        let s = Tensor::new(&[3, 2], vec![2.0, 0.0, 2.01, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(covered_modes(&s, &spec), 1);
    }
}
