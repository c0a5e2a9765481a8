//! Channel-wise attention (CWA) masks: random binary channel dropping.
//!
//! A mask over a group of `xi` channels has exactly `floor(xi / 2)` zeros
//! placed uniformly at random, i.e. `ceil(xi / 2)` survivors. During
//! training a fresh mask is drawn per sample, per group, per forward pass;
//! gradient checks freeze one draw and reuse it.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// One 0/1 mask over a channel group, tagged with the seed of the stream
/// that produced it so a run can be replayed exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct CwaMask {
    bits: Vec<f64>,
    seed: u64,
}

impl CwaMask {
    /// All-ones mask (CWA disabled or frozen-off).
    pub fn ones(xi: usize) -> Self {
        CwaMask { bits: vec![1.0; xi], seed: 0 }
    }

    pub fn bits(&self) -> &[f64] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn ones_count(&self) -> usize {
        self.bits.iter().filter(|&&b| b == 1.0).count()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }
}

/// Draws one mask over `xi` channels: `floor(xi / 2)` zero positions chosen
/// uniformly over position subsets.
pub fn sample_cwa_mask(xi: usize, rng: &mut impl Rng) -> CwaMask {
    sample_with_seed(xi, rng, 0)
}

fn sample_with_seed(xi: usize, rng: &mut impl Rng, seed: u64) -> CwaMask {
    let zeros = xi / 2;
    let mut bits = vec![1.0; xi];
    for z in index::sample(rng, xi, zeros) {
        bits[z] = 0.0;
    }
    CwaMask { bits, seed }
}

/// Masks for one forward pass: one per (sample, group).
#[derive(Debug, Clone)]
pub struct MaskSet {
    masks: Vec<Vec<CwaMask>>,
    seed: u64,
}

impl MaskSet {
    /// Fresh independent masks for a `batch x groups` grid, drawn from a
    /// caller-owned stream. `seed` is recorded for replay bookkeeping.
    pub fn sample(
        batch: usize,
        group_sizes: &[usize],
        rng: &mut impl Rng,
        seed: u64,
    ) -> Self {
        let masks = (0..batch)
            .map(|_| {
                group_sizes
                    .iter()
                    .map(|&xi| sample_with_seed(xi, rng, seed))
                    .collect()
            })
            .collect();
        MaskSet { masks, seed }
    }

    /// Convenience constructor owning its own stream; used by gradient
    /// checks that need one reproducible frozen draw.
    pub fn sample_seeded(batch: usize, group_sizes: &[usize], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        MaskSet::sample(batch, group_sizes, &mut rng, seed)
    }

    /// All-ones masks, the CWA-off case.
    pub fn all_ones(batch: usize, group_sizes: &[usize]) -> Self {
        let masks = (0..batch)
            .map(|_| group_sizes.iter().map(|&xi| CwaMask::ones(xi)).collect())
            .collect();
        MaskSet { masks, seed: 0 }
    }

    pub fn batch(&self) -> usize {
        self.masks.len()
    }

    pub fn groups(&self) -> usize {
        self.masks.first().map(|m| m.len()).unwrap_or(0)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn mask(&self, sample: usize, group: usize) -> &CwaMask {
        &self.masks[sample][group]
    }

    /// Checks the grid against the group sizes a loss call expects.
    pub fn validate(&self, batch: usize, group_sizes: &[usize]) -> Result<()> {
        if self.batch() != batch || self.groups() != group_sizes.len() {
            return Err(Error::MaskLengthMismatch {
                mask: self.batch() * self.groups().max(1),
                group: batch * group_sizes.len(),
            });
        }
        for row in &self.masks {
            for (m, &xi) in row.iter().zip(group_sizes) {
                if m.len() != xi {
                    return Err(Error::MaskLengthMismatch { mask: m.len(), group: xi });
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn xi_three_has_one_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let m = sample_cwa_mask(3, &mut rng);
            assert_eq!(m.ones_count(), 2);
            assert_eq!(m.len(), 3);
        }
    }

    #[test]
    fn xi_one_is_always_kept() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let m = sample_cwa_mask(1, &mut rng);
            assert_eq!(m.bits(), &[1.0]);
        }
    }

    #[test]
    fn survivor_count_is_ceil_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for xi in 1..=8 {
            for _ in 0..200 {
                let m = sample_cwa_mask(xi, &mut rng);
                assert_eq!(m.ones_count(), xi - xi / 2, "xi={xi}");
            }
        }
    }

    #[test]
    fn xi_four_zero_frequency_near_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(20260809);
        let draws = 10_000;
        let mut zero_counts = [0usize; 4];
        for _ in 0..draws {
            let m = sample_cwa_mask(4, &mut rng);
            for (i, &b) in m.bits().iter().enumerate() {
                if b == 0.0 {
                    zero_counts[i] += 1;
                }
            }
        }
        for (i, &z) in zero_counts.iter().enumerate() {
            let freq = z as f64 / draws as f64;
            assert!((freq - 0.5).abs() <= 0.02, "position {i}: {freq}");
        }
    }

    #[test]
    fn same_seed_same_masks() {
        let a = MaskSet::sample_seeded(4, &[2, 3, 1], 99);
        let b = MaskSet::sample_seeded(4, &[2, 3, 1], 99);
        for s in 0..4 {
            for g in 0..3 {
                assert_eq!(a.mask(s, g), b.mask(s, g));
            }
        }
    }

    #[test]
    fn validate_catches_wrong_grid() {
        let m = MaskSet::sample_seeded(2, &[2, 2], 1);
        assert!(m.validate(2, &[2, 2]).is_ok());
        assert!(m.validate(3, &[2, 2]).is_err());
        assert!(m.validate(2, &[2, 3]).is_err());
    }
}
