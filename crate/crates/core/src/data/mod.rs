//! Domain datasets: synthetic generators, domain shifts, IDX ingestion,
//! CSV export and paired mini-batching.

mod batch;
mod csv;
mod idx;
mod shift;
mod synthetic;

pub use batch::{BatchIter, DomainBatch};
pub use csv::{read_csv, write_csv};
pub use idx::{load_idx, read_idx_images, read_idx_labels, write_idx_images, write_idx_labels, IdxImages, IMAGE_MAGIC, LABEL_MAGIC, TARGET_SIDE};
pub use shift::{apply_shift, ShiftSpec};
pub use synthetic::{gen_blobs, gen_two_moons, moon_point};

use std::fmt;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Label carried by points from classes the source never saw.
pub const NOISE_LABEL: i64 = -1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DomainTag {
    Source,
    Target,
}

impl DomainTag {
    pub fn as_str(self) -> &'static str {
        match self {
            DomainTag::Source => "source",
            DomainTag::Target => "target",
        }
    }
}

impl fmt::Display for DomainTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// `N × d` features with one label per row.
///
/// Labels lie in `[0, classes)`, or equal [`NOISE_LABEL`] for injected noise
/// points, which never count towards accuracy.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainDataset {
    pub features: Tensor,
    pub labels: Vec<i64>,
    pub domain: DomainTag,
    pub classes: usize,
}

impl DomainDataset {
    pub fn new(features: Tensor, labels: Vec<i64>, domain: DomainTag, classes: usize) -> Result<Self> {
        if features.shape().len() != 2 {
            return Err(Error::shape("dataset", format!("features must be N × d, got {:?}", features.shape())));
        }
        if features.rows() != labels.len() {
            return Err(Error::shape(
                "dataset",
                format!("{} feature rows vs {} labels", features.rows(), labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l != NOISE_LABEL && (l < 0 || l as usize >= classes)) {
            return Err(Error::LabelOutOfRange { label: bad, classes });
        }
        Ok(Self {
            features,
            labels,
            domain,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn with_domain(mut self, domain: DomainTag) -> Self {
        self.domain = domain;
        self
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &l in &self.labels {
            if l >= 0 {
                counts[l as usize] += 1;
            }
        }
        counts
    }

    /// Keeps the listed rows in the given order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let features = self.features.gather_rows(indices)?;
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Ok(Self {
            features,
            labels,
            domain: self.domain,
            classes: self.classes,
        })
    }

    /// Keeps the first `n` rows.
    pub fn truncate(&self, n: usize) -> Result<Self> {
        let n = n.min(self.len());
        self.subset(&(0..n).collect::<Vec<_>>())
    }
}

/// Per-dimension mean and standard deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl FeatureStats {
    pub fn of(ds: &DomainDataset) -> Self {
        let (n, d) = (ds.len() as f64, ds.dim());
        let mut mean = vec![0.0; d];
        for r in 0..ds.len() {
            mean.iter_mut().zip(ds.features.row(r)).for_each(|(m, v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for r in 0..ds.len() {
            for ((s, v), m) in var.iter_mut().zip(ds.features.row(r)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var
            .into_iter()
            .map(|s| {
                let sd = (s / n).sqrt();
                if sd > 1e-12 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, std }
    }

    pub fn apply(&self, ds: &DomainDataset) -> Result<DomainDataset> {
        let d = ds.dim();
        if d != self.mean.len() {
            return Err(Error::shape("standardize", format!("stats for {} dims, data has {d}", self.mean.len())));
        }
        let values = ds
            .features
            .values()
            .iter()
            .enumerate()
            .map(|(i, v)| (v - self.mean[i % d]) / self.std[i % d])
            .collect();
        let mut out = ds.clone();
        out.features = Tensor::new(ds.features.shape().to_vec(), values)?;
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_labels() {
        let f = Tensor::zeros(vec![2, 2]).unwrap();
        assert!(DomainDataset::new(f.clone(), vec![0, 2], DomainTag::Source, 2).is_err());
        assert!(DomainDataset::new(f.clone(), vec![0, -1], DomainTag::Target, 2).is_ok());
        assert!(DomainDataset::new(f, vec![0], DomainTag::Source, 2).is_err());
    }

    #[test]
    fn standardization_uses_given_stats() {
        let f = Tensor::from_rows(&[vec![1.0, 10.0], vec![3.0, 10.0]]).unwrap();
        let ds = DomainDataset::new(f, vec![0, 1], DomainTag::Source, 2).unwrap();
        let stats = FeatureStats::of(&ds);
        assert_eq!(stats.mean, vec![2.0, 10.0]);
        assert_eq!(stats.std, vec![1.0, 1.0]);
        let z = stats.apply(&ds).unwrap();
        assert_eq!(z.features.values(), &[-1.0, 0.0, 1.0, 0.0]);
    }
}
