//! Naive tree simulator: recomputes, from first principles, which
//! metadata nodes each update must create. Used to check node sets and
//! per-update node counts independently of the tree engine.
//!
//! An update touching pages `[first, first + count)` of a snapshot whose
//! tree spans `cover` pages creates exactly the aligned positions (at
//! every level up to the root) whose range intersects the update. The
//! simulator enumerates positions directly from that definition.

use std::collections::BTreeSet;

use vblob_core::range::{page_span, pages_for, ByteRange, NodePos};
use vblob_core::Version;

struct Step {
    first: u64,
    count: u64,
    cover: u64,
}

pub struct TreeSim {
    psize: u64,
    size: u64,
    steps: Vec<Step>,
}

impl TreeSim {
    pub fn new(psize: u64) -> Self {
        assert!(psize.is_power_of_two());
        Self {
            psize,
            size: 0,
            steps: Vec::new(),
        }
    }

    /// Register the next update (byte range) and return its version.
    pub fn push_update(&mut self, range: ByteRange) -> Version {
        assert!(range.offset <= self.size, "update leaves a hole");
        assert!(range.size >= 1);
        let (first, count) = page_span(range, self.psize);
        self.size = self.size.max(range.end());
        let cover = pages_for(self.size, self.psize).next_power_of_two();
        self.steps.push(Step {
            first,
            count,
            cover,
        });
        self.steps.len() as Version
    }

    pub fn snapshot_size(&self, v: Version) -> u64 {
        self.steps[..v as usize]
            .iter()
            .fold(0, |acc, s| acc.max((s.first + s.count) * self.psize))
            .min(self.size)
    }

    /// Every node position update `v` creates: enumerate all aligned
    /// positions within the root cover, keep those intersecting the
    /// update's pages.
    pub fn created_nodes(&self, v: Version) -> BTreeSet<NodePos> {
        let s = &self.steps[v as usize - 1];
        let mut out = BTreeSet::new();
        let mut width = 1u64;
        while width <= s.cover {
            let mut off = 0u64;
            while off < s.cover {
                if off < s.first + s.count && s.first < off + width {
                    out.insert(NodePos::new(off, width));
                }
                off += width;
            }
            width *= 2;
        }
        out
    }

    /// How many nodes update `v` writes.
    pub fn new_node_count(&self, v: Version) -> usize {
        self.created_nodes(v).len()
    }

    /// Versions whose count exceeds the previous update's count by
    /// exactly one because the root grew (page count crossed a power of
    /// two) are the expected "step" points of an append-one-page series.
    pub fn append_series_counts(psize: u64, pages: u64) -> Vec<usize> {
        let mut sim = TreeSim::new(psize);
        (0..pages)
            .map(|p| {
                let v = sim.push_update(ByteRange::new(p * psize, psize));
                sim.new_node_count(v)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pos_set(items: &[(u64, u64)]) -> BTreeSet<NodePos> {
        items.iter().map(|&(o, s)| NodePos::new(o, s)).collect()
    }

    #[test]
    fn weaving_sequence_node_sets() {
        let mut sim = TreeSim::new(1);
        let v1 = sim.push_update(ByteRange::new(0, 4));
        assert_eq!(
            sim.created_nodes(v1),
            pos_set(&[(0, 1), (1, 1), (2, 1), (3, 1), (0, 2), (2, 2), (0, 4)])
        );
        let v2 = sim.push_update(ByteRange::new(1, 2));
        assert_eq!(
            sim.created_nodes(v2),
            pos_set(&[(1, 1), (2, 1), (0, 2), (2, 2), (0, 4)])
        );
        let v3 = sim.push_update(ByteRange::new(4, 1));
        assert_eq!(
            sim.created_nodes(v3),
            pos_set(&[(4, 1), (4, 2), (4, 4), (0, 8)])
        );
    }

    #[test]
    fn one_page_append_series() {
        assert_eq!(
            TreeSim::append_series_counts(1024, 5),
            vec![1, 2, 3, 3, 4]
        );
        // count steps up by one exactly when the old page count is a
        // power of two
        let counts = TreeSim::append_series_counts(1024, 64);
        for p in 1..64usize {
            let stepped = counts[p] == counts[p - 1] + 1;
            assert_eq!(stepped, p.is_power_of_two(), "at page {p}");
        }
    }

    #[test]
    fn unaligned_updates_round_to_pages() {
        let mut sim = TreeSim::new(1024);
        let v1 = sim.push_update(ByteRange::new(0, 100));
        assert_eq!(sim.created_nodes(v1), pos_set(&[(0, 1)]));
        let v2 = sim.push_update(ByteRange::new(50, 1100));
        // touches pages 0 and 1
        assert_eq!(
            sim.created_nodes(v2),
            pos_set(&[(0, 1), (1, 1), (0, 2)])
        );
    }
}
