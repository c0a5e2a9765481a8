//! Channel-to-class assignment: which contiguous block of feature channels
//! represents which class.

use std::ops::Range;

use crate::error::{Error, Result};

/// Per-class contiguous channel ranges tiling `[0, channels)`.
///
/// Group lengths take at most two consecutive values: with `channels`
/// divisible by `classes` every class gets `channels / classes`; otherwise
/// the first classes (in index order) get `floor(channels / classes)` and
/// the rest one more, so the ranges exactly cover the channel axis.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChannelAssignment {
    groups: Vec<Range<usize>>,
    channels: usize,
}

impl ChannelAssignment {
    pub fn classes(&self) -> usize {
        self.groups.len()
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Channel range of class `i`.
    pub fn group(&self, i: usize) -> Range<usize> {
        self.groups[i].clone()
    }

    /// Group size of class `i`.
    pub fn xi(&self, i: usize) -> usize {
        self.groups[i].len()
    }

    pub fn iter(&self) -> impl Iterator<Item = Range<usize>> + '_ {
        self.groups.iter().cloned()
    }

    /// `(classes_with_low, xi_low, classes_with_high, xi_high)`; the second
    /// bucket is empty when the split is uniform.
    pub fn buckets(&self) -> (usize, usize, usize, usize) {
        let lo = self.groups.first().map(|g| g.len()).unwrap_or(0);
        let low_count = self.groups.iter().take_while(|g| g.len() == lo).count();
        if low_count == self.groups.len() {
            (low_count, lo, 0, lo)
        } else {
            (low_count, lo, self.groups.len() - low_count, lo + 1)
        }
    }

    /// Per-class index lists, the form the loss functions consume.
    pub fn to_groups(&self) -> Vec<Vec<usize>> {
        self.groups.iter().map(|g| g.clone().collect()).collect()
    }
}

/// Splits `channels` feature channels over `classes` classes the way a
/// fixed-width backbone is carved up: `xi_low = floor(channels / classes)`;
/// the first `classes * (xi_low + 1) - channels` classes get `xi_low`
/// channels each and the remaining classes get `xi_low + 1`.
pub fn solve_channel_assignment(channels: usize, classes: usize) -> Result<ChannelAssignment> {
    if classes == 0 || channels < classes {
        return Err(Error::AssignmentInfeasible { channels, classes });
    }
    let xi_low = channels / classes;
    let low_count = classes * (xi_low + 1) - channels;
    let mut groups = Vec::with_capacity(classes);
    let mut start = 0usize;
    for i in 0..classes {
        let len = if i < low_count { xi_low } else { xi_low + 1 };
        groups.push(start..start + len);
        start += len;
    }
    debug_assert_eq!(start, channels);
    Ok(ChannelAssignment { groups, channels })
}

/// Uniform assignment: every class gets exactly `xi` contiguous channels,
/// so the feature map must provide `classes * xi` of them.
pub fn uniform_assignment(classes: usize, xi: usize) -> Result<ChannelAssignment> {
    if classes == 0 || xi == 0 {
        return Err(Error::AssignmentInfeasible { channels: classes * xi, classes });
    }
    let groups = (0..classes).map(|i| i * xi..(i + 1) * xi).collect();
    Ok(ChannelAssignment { groups, channels: classes * xi })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// The eight published (classes, channels) splits for 512- and
    /// 2048-channel backbones across the four standard benchmarks.
    const KNOWN_SPLITS: [(usize, usize, usize, usize, usize, usize); 8] = [
        // (channels, classes, low_count, xi_low, high_count, xi_high)
        (512, 200, 88, 2, 112, 3),
        (2048, 200, 152, 10, 48, 11),
        (512, 196, 76, 2, 120, 3),
        (2048, 196, 108, 10, 88, 11),
        (512, 100, 88, 5, 12, 6),
        (2048, 100, 52, 20, 48, 21),
        (512, 102, 100, 5, 2, 6),
        (2048, 102, 94, 20, 8, 21),
    ];

    #[test]
    fn known_backbone_splits_reproduced() {
        for (channels, classes, lc, lo, hc, hi) in KNOWN_SPLITS {
            let a = solve_channel_assignment(channels, classes).unwrap();
            let (got_lc, got_lo, got_hc, got_hi) = a.buckets();
            assert_eq!((got_lc, got_lo, got_hc, got_hi), (lc, lo, hc, hi),
                "split for {channels} channels / {classes} classes");
            assert_eq!(a.channels(), channels);
            assert_eq!(a.iter().map(|g| g.len()).sum::<usize>(), channels);
        }
    }

    #[test]
    fn extra_channels_go_to_later_classes() {
        let a = solve_channel_assignment(512, 200).unwrap();
        assert_eq!(a.xi(0), 2);
        assert_eq!(a.xi(87), 2);
        assert_eq!(a.xi(88), 3);
        assert_eq!(a.xi(199), 3);
        assert_eq!(a.group(0), 0..2);
        assert_eq!(a.group(88), 176..179);
    }

    #[test]
    fn too_few_channels_rejected() {
        assert!(matches!(
            solve_channel_assignment(199, 200),
            Err(Error::AssignmentInfeasible { .. })
        ));
        assert!(matches!(
            solve_channel_assignment(10, 0),
            Err(Error::AssignmentInfeasible { .. })
        ));
    }

    #[test]
    fn uniform_assignment_examples() {
        let a = uniform_assignment(200, 3).unwrap();
        assert_eq!(a.channels(), 600);
        assert!(a.iter().all(|g| g.len() == 3));

        let a = uniform_assignment(1, 1).unwrap();
        assert_eq!(a.group(0), 0..1);

        let a = uniform_assignment(8, 3).unwrap();
        for i in 0..8 {
            assert_eq!(a.group(i), 3 * i..3 * i + 3);
        }
    }

    proptest! {
        #[test]
        fn tiles_without_gaps(classes in 1usize..400, extra in 0usize..800) {
            let channels = classes + extra;
            let a = solve_channel_assignment(channels, classes).unwrap();
            let mut next = 0usize;
            let lo = channels / classes;
            for g in a.iter() {
                prop_assert_eq!(g.start, next);
                prop_assert!(g.len() == lo || g.len() == lo + 1);
                prop_assert!(!g.is_empty());
                next = g.end;
            }
            prop_assert_eq!(next, channels);
        }
    }
}
