use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{DomainDataset, NOISE_LABEL};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

/// How a target domain differs from the data it is derived from.
///
/// Geometry is applied first (rotation about the origin, translation,
/// Gaussian jitter), then class removal, then class-prior resampling, and
/// finally clusters of unlabeled noise points are appended.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ShiftSpec {
    pub rotation_deg: f64,
    /// Empty means no translation.
    pub translation: Vec<f64>,
    pub noise_sigma: f64,
    pub dropped_classes: Vec<usize>,
    pub extra_noise_classes: usize,
    pub class_prior: Option<Vec<f64>>,
}

impl ShiftSpec {
    pub fn identity() -> Self {
        Self::default()
    }

    pub fn validate(&self, classes: usize, dim: usize) -> Result<()> {
        if !self.rotation_deg.is_finite() {
            return Err(Error::invalid("rotation_deg", "must be finite"));
        }
        if self.rotation_deg != 0.0 && dim != 2 {
            return Err(Error::invalid("rotation_deg", format!("rotation needs 2-D features, got {dim}")));
        }
        if !self.translation.is_empty() && self.translation.len() != dim {
            return Err(Error::invalid(
                "translation",
                format!("{} components for {dim}-D features", self.translation.len()),
            ));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::invalid("noise_sigma", format!("must be >= 0, got {}", self.noise_sigma)));
        }
        if let Some(&c) = self.dropped_classes.iter().find(|&&c| c >= classes) {
            return Err(Error::invalid("dropped_classes", format!("class {c} not in [0, {classes})")));
        }
        if let Some(prior) = &self.class_prior {
            if prior.len() != classes {
                return Err(Error::invalid("class_prior", format!("{} entries for {classes} classes", prior.len())));
            }
            let total: f64 = prior.iter().sum();
            if prior.iter().any(|&p| !(p >= 0.0)) || (total - 1.0).abs() > 1e-9 {
                return Err(Error::invalid("class_prior", format!("must be non-negative and sum to 1, sums to {total}")));
            }
        }
        Ok(())
    }
}

/// Applies `spec` to `ds`; an identity spec returns an exact copy.
pub fn apply_shift(ds: &DomainDataset, spec: &ShiftSpec, seed: u64) -> Result<DomainDataset> {
    let d = ds.dim();
    spec.validate(ds.classes, d)?;
    let mut values = ds.features.values().to_vec();

    if spec.rotation_deg != 0.0 {
        let (s, c) = spec.rotation_deg.to_radians().sin_cos();
        for p in values.chunks_exact_mut(2) {
            let (x, y) = (p[0], p[1]);
            p[0] = c * x - s * y;
            p[1] = s * x + c * y;
        }
    }
    if spec.translation.iter().any(|&t| t != 0.0) {
        for row in values.chunks_exact_mut(d) {
            row.iter_mut().zip(&spec.translation).for_each(|(v, t)| *v += t);
        }
    }
    if spec.noise_sigma > 0.0 {
        let mut rng = rng::rng_from(&[seed, 0x6e6f_6973]);
        let normal = Normal::new(0.0, spec.noise_sigma).expect("validated sigma");
        values.iter_mut().for_each(|v| *v += normal.sample(&mut rng));
    }

    let mut out = DomainDataset::new(
        Tensor::new(ds.features.shape().to_vec(), values)?,
        ds.labels.clone(),
        ds.domain,
        ds.classes,
    )?;

    if !spec.dropped_classes.is_empty() {
        let keep: Vec<usize> = (0..out.len())
            .filter(|&i| out.labels[i] < 0 || !spec.dropped_classes.contains(&(out.labels[i] as usize)))
            .collect();
        if keep.is_empty() {
            return Err(Error::Empty("dataset after dropping classes"));
        }
        out = out.subset(&keep)?;
    }

    if let Some(prior) = &spec.class_prior {
        out = resample_to_prior(&out, prior, seed)?;
    }

    if spec.extra_noise_classes > 0 {
        out = append_noise_clusters(&out, spec.extra_noise_classes, seed)?;
    }
    Ok(out)
}

/// Subsamples without replacement to the largest set matching `prior`.
fn resample_to_prior(ds: &DomainDataset, prior: &[f64], seed: u64) -> Result<DomainDataset> {
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); ds.classes];
    for (i, &l) in ds.labels.iter().enumerate() {
        if l >= 0 {
            by_class[l as usize].push(i);
        }
    }
    let total = by_class
        .iter()
        .zip(prior)
        .filter(|(_, &p)| p > 0.0)
        .map(|(idx, &p)| idx.len() as f64 / p)
        .fold(f64::INFINITY, f64::min);
    if !(total.is_finite() && total >= 1.0) {
        return Err(Error::Empty("dataset after class-prior resampling"));
    }
    let mut rng = rng::rng_from(&[seed, 0x7072_696f]);
    let mut keep: Vec<usize> = ds
        .labels
        .iter()
        .enumerate()
        .filter(|(_, &l)| l < 0)
        .map(|(i, _)| i)
        .collect();
    for (idx, &p) in by_class.iter().zip(prior) {
        let want = ((p * total + 1e-9).floor() as usize).min(idx.len());
        let mut shuffled = idx.clone();
        shuffled.shuffle(&mut rng);
        keep.extend_from_slice(&shuffled[..want]);
    }
    if keep.is_empty() {
        return Err(Error::Empty("dataset after class-prior resampling"));
    }
    keep.sort_unstable();
    ds.subset(&keep)
}

/// Appends `k` Gaussian clusters labeled [`NOISE_LABEL`].
///
/// Each cluster gets as many points as an average present class, is
/// centred uniformly inside the data's bounding box and has a spread of a
/// quarter of the mean per-dimension standard deviation.
fn append_noise_clusters(ds: &DomainDataset, k: usize, seed: u64) -> Result<DomainDataset> {
    let d = ds.dim();
    let present = ds.class_counts().iter().filter(|&&c| c > 0).count().max(1);
    let labeled = ds.labels.iter().filter(|&&l| l >= 0).count();
    let per_cluster = (labeled / present).max(1);

    let mut lo = vec![f64::INFINITY; d];
    let mut hi = vec![f64::NEG_INFINITY; d];
    for r in 0..ds.len() {
        for (j, &v) in ds.features.row(r).iter().enumerate() {
            lo[j] = lo[j].min(v);
            hi[j] = hi[j].max(v);
        }
    }
    let stats = super::FeatureStats::of(ds);
    let spread = 0.25 * stats.std.iter().sum::<f64>() / d as f64;
    let normal = Normal::new(0.0, spread.max(1e-6)).expect("positive spread");

    let mut rng = rng::rng_from(&[seed, 0x6578_7472]);
    let mut values = ds.features.values().to_vec();
    let mut labels = ds.labels.clone();
    for _ in 0..k {
        let centre: Vec<f64> = lo
            .iter()
            .zip(&hi)
            .map(|(&a, &b)| if b > a { rng.random_range(a..b) } else { a })
            .collect();
        for _ in 0..per_cluster {
            values.extend(centre.iter().map(|c| c + normal.sample(&mut rng)));
            labels.push(NOISE_LABEL);
        }
    }
    let n = labels.len();
    DomainDataset::new(Tensor::matrix(n, d, values)?, labels, ds.domain, ds.classes)
}
