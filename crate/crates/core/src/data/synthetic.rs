use std::f64::consts::PI;

use rand_distr::{Distribution, Normal};

use super::{DomainDataset, DomainTag};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

/// Noiseless position of point `i` of `count` on the arc of `class`.
///
/// Class 0 is the upper half circle `(cos θ, sin θ)`; class 1 is the lower
/// arc `(1 − cos θ, 0.5 − sin θ)`, with `θ` evenly spaced over `[0, π]`.
pub fn moon_point(class: usize, i: usize, count: usize) -> [f64; 2] {
    let theta = if count > 1 {
        PI * i as f64 / (count - 1) as f64
    } else {
        0.0
    };
    if class == 0 {
        [theta.cos(), theta.sin()]
    } else {
        [1.0 - theta.cos(), 0.5 - theta.sin()]
    }
}

/// Two interleaved half circles; class 0 gets `ceil(n/2)` points.
pub fn gen_two_moons(n: usize, noise_sigma: f64, seed: u64) -> Result<DomainDataset> {
    if n < 2 {
        return Err(Error::invalid("n", format!("two moons need at least 2 points, got {n}")));
    }
    if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
        return Err(Error::invalid("noise_sigma", format!("must be >= 0, got {noise_sigma}")));
    }
    let counts = [n - n / 2, n / 2];
    let mut rng = rng::rng_from(&[seed, 0x6d6f_6f6e]);
    let normal = Normal::new(0.0, noise_sigma.max(f64::MIN_POSITIVE)).expect("valid sigma");
    let mut values = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for (class, &count) in counts.iter().enumerate() {
        for i in 0..count {
            let p = moon_point(class, i, count);
            for v in p {
                let jitter = if noise_sigma > 0.0 { normal.sample(&mut rng) } else { 0.0 };
                values.push(v + jitter);
            }
            labels.push(class as i64);
        }
    }
    DomainDataset::new(Tensor::matrix(n, 2, values)?, labels, DomainTag::Source, 2)
}

/// Unit-variance Gaussian clusters.
///
/// Means sit on a circle of radius `separation` in the first two
/// dimensions (on a line when `d == 1`). Class `c` receives
/// `n / C` points, plus one when `c < n % C`.
pub fn gen_blobs(n: usize, classes: usize, d: usize, separation: f64, seed: u64) -> Result<DomainDataset> {
    if classes < 2 {
        return Err(Error::invalid("classes", format!("need at least 2 classes, got {classes}")));
    }
    if d == 0 {
        return Err(Error::invalid("dim", "feature dimension must be positive"));
    }
    if n < classes {
        return Err(Error::invalid("n", format!("{n} points cannot cover {classes} classes")));
    }
    if !separation.is_finite() {
        return Err(Error::invalid("separation", "must be finite"));
    }
    let mut rng = rng::rng_from(&[seed, 0x626c_6f62]);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut values = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for c in 0..classes {
        let count = n / classes + usize::from(c < n % classes);
        let mut mean = vec![0.0; d];
        if d == 1 {
            mean[0] = separation * c as f64;
        } else {
            let angle = 2.0 * PI * c as f64 / classes as f64;
            mean[0] = separation * angle.cos();
            mean[1] = separation * angle.sin();
        }
        for _ in 0..count {
            values.extend(mean.iter().map(|m| m + normal.sample(&mut rng)));
            labels.push(c as i64);
        }
    }
    DomainDataset::new(Tensor::matrix(n, d, values)?, labels, DomainTag::Source, classes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noiseless_moons_lie_on_arcs() {
        let ds = gen_two_moons(100, 0.0, 1).unwrap();
        assert_eq!(ds.class_counts(), vec![50, 50]);
        for r in 0..100 {
            let [x, y] = [ds.features.row(r)[0], ds.features.row(r)[1]];
            if ds.labels[r] == 0 {
                assert!((x * x + y * y - 1.0).abs() < 1e-9);
                assert!(y >= -1e-12);
            } else {
                let (u, v) = (1.0 - x, 0.5 - y);
                assert!((u * u + v * v - 1.0).abs() < 1e-9);
                assert!(y <= 0.5 + 1e-12);
            }
        }
    }

    #[test]
    fn moons_are_seed_deterministic() {
        assert_eq!(gen_two_moons(64, 0.1, 3).unwrap(), gen_two_moons(64, 0.1, 3).unwrap());
        assert_ne!(gen_two_moons(64, 0.1, 3).unwrap(), gen_two_moons(64, 0.1, 4).unwrap());
    }

    #[test]
    fn noisy_moons_stay_near_arcs() {
        let sigma = 0.1;
        let noisy = gen_two_moons(200, sigma, 9).unwrap();
        let clean = gen_two_moons(200, 0.0, 9).unwrap();
        for (a, b) in noisy.features.values().iter().zip(clean.features.values()) {
            assert!((a - b).abs() < 5.0 * sigma);
        }
    }

    #[test]
    fn too_few_moons_rejected() {
        assert!(gen_two_moons(1, 0.0, 0).is_err());
    }

    #[test]
    fn blob_counts_and_determinism() {
        let ds = gen_blobs(10, 2, 2, 5.0, 1).unwrap();
        assert_eq!(ds.class_counts(), vec![5, 5]);
        assert_eq!(ds, gen_blobs(10, 2, 2, 5.0, 1).unwrap());
        let uneven = gen_blobs(11, 3, 4, 5.0, 1).unwrap();
        assert_eq!(uneven.class_counts(), vec![4, 4, 3]);
        assert_eq!(uneven.dim(), 4);
    }

    #[test]
    fn invalid_blob_params() {
        assert!(gen_blobs(10, 1, 2, 1.0, 0).is_err());
        assert!(gen_blobs(10, 2, 0, 1.0, 0).is_err());
        assert!(gen_blobs(1, 2, 2, 1.0, 0).is_err());
    }
}
