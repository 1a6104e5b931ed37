//! Quadtree coding order for the detail symbol grid.
//!
//! Every 2×2 spatial cell is split into four groups by the parity of its
//! coordinates. Groups are coded in the order of [`GROUP_PATTERNS`], each one
//! conditioned only on the groups before it.

use alloc::vec::Vec;

pub const GROUP_COUNT: usize = 4;

/// `(y mod 2, x mod 2)` of each group, in coding order.
pub const GROUP_PATTERNS: [(usize, usize); GROUP_COUNT] = [(0, 0), (1, 1), (0, 1), (1, 0)];

/// Group index of spatial position `(y, x)`.
pub fn group_of(y: usize, x: usize) -> usize {
    match (y % 2, x % 2) {
        (0, 0) => 0,
        (1, 1) => 1,
        (0, 1) => 2,
        _ => 3,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodingSchedule {
    pub height: usize,
    pub width: usize,
    groups: [Vec<(usize, usize)>; GROUP_COUNT],
}

pub fn quadtree_schedule(height: usize, width: usize) -> CodingSchedule {
    let mut groups: [Vec<(usize, usize)>; GROUP_COUNT] = Default::default();
    for y in 0..height {
        for x in 0..width {
            groups[group_of(y, x)].push((y, x));
        }
    }
    CodingSchedule {
        height,
        width,
        groups,
    }
}

impl CodingSchedule {
    /// Spatial positions of group `k`, row-major.
    pub fn group(&self, k: usize) -> &[(usize, usize)] {
        &self.groups[k]
    }

    /// Channel-major `(channel, y, x)` coding order of group `k`.
    pub fn group_positions(&self, k: usize, channels: usize) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        (0..channels).flat_map(move |c| self.groups[k].iter().map(move |&(y, x)| (c, y, x)))
    }

    /// Full coding order across all groups.
    pub fn coding_order(&self, channels: usize) -> Vec<(usize, usize, usize)> {
        (0..GROUP_COUNT)
            .flat_map(|k| self.group_positions(k, channels))
            .collect()
    }

    /// Number of symbols coded before group `k` starts.
    pub fn group_start(&self, k: usize, channels: usize) -> usize {
        self.groups[..k].iter().map(|g| g.len() * channels).sum()
    }

    /// Row-major `height × width` mask with 1.0 where the group is `< k`.
    pub fn context_mask(&self, k: usize) -> Vec<f32> {
        let mut mask = alloc::vec![0.0; self.height * self.width];
        for g in &self.groups[..k] {
            for &(y, x) in g {
                mask[y * self.width + x] = 1.0;
            }
        }
        mask
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_cell() {
        let s = quadtree_schedule(2, 2);
        for k in 0..4 {
            assert_eq!(s.group(k).len(), 1);
            assert_eq!(s.group(k)[0], GROUP_PATTERNS[k]);
        }
    }

    #[test]
    fn four_by_four() {
        let s = quadtree_schedule(4, 4);
        for k in 0..4 {
            assert_eq!(s.group(k).len(), 4);
        }
    }

    #[test]
    fn degenerate_grid() {
        let s = quadtree_schedule(1, 1);
        assert_eq!(s.group(0), &[(0, 0)]);
        for k in 1..4 {
            assert!(s.group(k).is_empty());
        }
    }

    #[test]
    fn group_starts_accumulate() {
        let s = quadtree_schedule(3, 5);
        assert_eq!(s.group_start(0, 2), 0);
        assert_eq!(s.group_start(4, 2), 30);
        assert_eq!(s.coding_order(2).len(), 30);
    }
}
