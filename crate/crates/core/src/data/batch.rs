use rand::seq::SliceRandom;

use super::DomainDataset;
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

/// Equal-sized source and target mini-batches.
#[derive(Debug, Clone)]
pub struct DomainBatch {
    pub source_x: Tensor,
    pub source_y: Vec<usize>,
    pub target_x: Tensor,
    pub source_indices: Vec<usize>,
    pub target_indices: Vec<usize>,
}

impl DomainBatch {
    pub fn size(&self) -> usize {
        self.source_y.len()
    }
}

/// Reshuffling cursor over one domain.
struct Cursor {
    order: Vec<usize>,
    pos: usize,
    cycle: u64,
    n: usize,
    seed: u64,
    epoch: u64,
    domain: u64,
}

impl Cursor {
    fn new(n: usize, seed: u64, epoch: u64, domain: u64) -> Self {
        let mut c = Self {
            order: Vec::new(),
            pos: 0,
            cycle: 0,
            n,
            seed,
            epoch,
            domain,
        };
        c.reshuffle();
        c
    }

    fn reshuffle(&mut self) {
        let mut rng = rng::rng_from(&[self.seed, self.epoch, self.domain, self.cycle]);
        self.order = (0..self.n).collect();
        self.order.shuffle(&mut rng);
        self.pos = 0;
    }

    fn take(&mut self, k: usize) -> Vec<usize> {
        if self.pos + k > self.n {
            self.cycle += 1;
            self.reshuffle();
        }
        let out = self.order[self.pos..self.pos + k].to_vec();
        self.pos += k;
        out
    }
}

/// One epoch of paired batches.
///
/// Each domain is shuffled independently from `(seed, epoch)`. The epoch
/// lasts `max(N_s, N_t) / batch_size` steps; the shorter domain starts a
/// fresh shuffle whenever fewer than `batch_size` unseen samples remain.
pub struct BatchIter<'a> {
    source: &'a DomainDataset,
    target: &'a DomainDataset,
    batch_size: usize,
    steps: usize,
    done: usize,
    src: Cursor,
    tgt: Cursor,
}

impl<'a> BatchIter<'a> {
    pub fn new(
        source: &'a DomainDataset,
        target: &'a DomainDataset,
        batch_size: usize,
        seed: u64,
        epoch: u64,
    ) -> Result<Self> {
        if batch_size == 0 || batch_size > source.len().min(target.len()) {
            return Err(Error::invalid(
                "batch_size",
                format!(
                    "must lie in [1, {}] for {} source / {} target samples",
                    source.len().min(target.len()),
                    source.len(),
                    target.len()
                ),
            ));
        }
        if let Some(&l) = source.labels.iter().find(|&&l| l < 0) {
            return Err(Error::LabelOutOfRange {
                label: l,
                classes: source.classes,
            });
        }
        Ok(Self {
            source,
            target,
            batch_size,
            steps: source.len().max(target.len()) / batch_size,
            done: 0,
            src: Cursor::new(source.len(), seed, epoch, 0),
            tgt: Cursor::new(target.len(), seed, epoch, 1),
        })
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.steps
    }
}

impl Iterator for BatchIter<'_> {
    type Item = DomainBatch;

    fn next(&mut self) -> Option<DomainBatch> {
        if self.done == self.steps {
            return None;
        }
        self.done += 1;
        let si = self.src.take(self.batch_size);
        let ti = self.tgt.take(self.batch_size);
        let source_x = self.source.features.gather_rows(&si).ok()?;
        let target_x = self.target.features.gather_rows(&ti).ok()?;
        let source_y = si.iter().map(|&i| self.source.labels[i] as usize).collect();
        Some(DomainBatch {
            source_x,
            source_y,
            target_x,
            source_indices: si,
            target_indices: ti,
        })
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let left = self.steps - self.done;
        (left, Some(left))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_blobs;

    #[test]
    fn epoch_covers_source_once() {
        let s = gen_blobs(40, 2, 2, 3.0, 0).unwrap();
        let t = gen_blobs(40, 2, 2, 3.0, 1).unwrap();
        let mut seen: Vec<usize> = BatchIter::new(&s, &t, 8, 3, 0)
            .unwrap()
            .flat_map(|b| b.source_indices)
            .collect();
        assert_eq!(seen.len(), 40);
        seen.sort_unstable();
        assert_eq!(seen, (0..40).collect::<Vec<_>>());
    }

    #[test]
    fn batch_order_is_seeded() {
        let s = gen_blobs(40, 2, 2, 3.0, 0).unwrap();
        let t = gen_blobs(30, 2, 2, 3.0, 1).unwrap();
        let a: Vec<_> = BatchIter::new(&s, &t, 10, 3, 2).unwrap().map(|b| b.target_indices).collect();
        let b: Vec<_> = BatchIter::new(&s, &t, 10, 3, 2).unwrap().map(|b| b.target_indices).collect();
        let c: Vec<_> = BatchIter::new(&s, &t, 10, 3, 3).unwrap().map(|b| b.target_indices).collect();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn shorter_domain_recycles_with_fresh_shuffle() {
        let s = gen_blobs(100, 2, 2, 3.0, 0).unwrap();
        let t = gen_blobs(50, 2, 2, 3.0, 1).unwrap();
        let batches: Vec<_> = BatchIter::new(&s, &t, 10, 7, 0).unwrap().collect();
        assert_eq!(batches.len(), 10);
        let first: Vec<usize> = batches[..5].iter().flat_map(|b| b.target_indices.clone()).collect();
        let second: Vec<usize> = batches[5..].iter().flat_map(|b| b.target_indices.clone()).collect();
        let mut f = first.clone();
        let mut g = second.clone();
        f.sort_unstable();
        g.sort_unstable();
        assert_eq!(f, (0..50).collect::<Vec<_>>());
        assert_eq!(g, (0..50).collect::<Vec<_>>());
        assert_ne!(first, second);
    }

    #[test]
    fn invalid_batch_sizes() {
        let s = gen_blobs(20, 2, 2, 3.0, 0).unwrap();
        let t = gen_blobs(10, 2, 2, 3.0, 1).unwrap();
        assert!(BatchIter::new(&s, &t, 0, 0, 0).is_err());
        assert!(BatchIter::new(&s, &t, 11, 0, 0).is_err());
    }
}
