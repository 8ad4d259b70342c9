//! Page and range arithmetic.
//!
//! All tree coordinates are in page units; byte offsets exist only at the
//! client API surface. Every range is half-open.

use crate::error::{Error, Result};
use crate::id::Version;

/// A half-open byte interval `[offset, offset + size)`. Size may be 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ByteRange {
    pub offset: u64,
    pub size: u64,
}

impl ByteRange {
    pub fn new(offset: u64, size: u64) -> Self {
        Self { offset, size }
    }

    pub fn end(&self) -> u64 {
        self.offset + self.size
    }

    pub fn is_empty(&self) -> bool {
        self.size == 0
    }

    /// True iff the two half-open intervals share at least one byte.
    pub fn intersects(&self, other: &ByteRange) -> bool {
        intersects(self.offset, self.size, other.offset, other.size)
    }
}

/// Half-open interval overlap, shared by byte and page coordinates.
/// Empty intervals intersect nothing.
pub fn intersects(a_off: u64, a_size: u64, b_off: u64, b_size: u64) -> bool {
    a_size > 0 && b_size > 0 && a_off < b_off + b_size && b_off < a_off + a_size
}

/// Which half of its parent a node occupies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Left,
    Right,
}

/// Position of a tree node: a power-of-two aligned page range.
///
/// `size_p` is a power of two and `offset_p` is a multiple of `size_p`;
/// leaves have `size_p == 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodePos {
    pub offset_p: u64,
    pub size_p: u64,
}

impl NodePos {
    pub fn new(offset_p: u64, size_p: u64) -> Self {
        debug_assert!(size_p.is_power_of_two());
        debug_assert!(offset_p % size_p == 0);
        Self { offset_p, size_p }
    }

    /// Checked constructor for positions arriving over the wire.
    pub fn checked(offset_p: u64, size_p: u64) -> Result<Self> {
        if !size_p.is_power_of_two() || offset_p % size_p != 0 {
            return Err(Error::Malformed(format!(
                "invalid node position ({offset_p}, {size_p})"
            )));
        }
        Ok(Self { offset_p, size_p })
    }

    pub fn end_p(&self) -> u64 {
        self.offset_p + self.size_p
    }

    pub fn is_leaf(&self) -> bool {
        self.size_p == 1
    }

    pub fn left_child(&self) -> NodePos {
        debug_assert!(!self.is_leaf());
        NodePos::new(self.offset_p, self.size_p / 2)
    }

    pub fn right_child(&self) -> NodePos {
        debug_assert!(!self.is_leaf());
        NodePos::new(self.offset_p + self.size_p / 2, self.size_p / 2)
    }

    /// True iff this node's page range overlaps `[first, first + count)`.
    pub fn intersects_pages(&self, first: u64, count: u64) -> bool {
        intersects(self.offset_p, self.size_p, first, count)
    }

    /// True iff this node's range lies fully inside `[0, cover)`.
    pub fn within_cover(&self, cover: u64) -> bool {
        self.end_p() <= cover
    }

    /// The parent position and which half this node occupies in it.
    ///
    /// A node whose offset is an even multiple of its size sits in the
    /// left half; otherwise in the right half.
    pub fn parent(&self) -> (NodePos, Side) {
        if self.offset_p % (2 * self.size_p) == 0 {
            (NodePos::new(self.offset_p, 2 * self.size_p), Side::Left)
        } else {
            (
                NodePos::new(self.offset_p - self.size_p, 2 * self.size_p),
                Side::Right,
            )
        }
    }
}

/// The minimal contiguous page interval covering byte range `r`:
/// `(first_page, n_pages)`. Empty ranges cover zero pages.
pub fn page_span(r: ByteRange, psize: u64) -> (u64, u64) {
    debug_assert!(psize.is_power_of_two() && psize > 0);
    if r.size == 0 {
        return (r.offset / psize, 0);
    }
    let first = r.offset / psize;
    let last = (r.end() - 1) / psize;
    (first, last - first + 1)
}

/// Number of pages needed to hold `size` bytes.
pub fn pages_for(size: u64, psize: u64) -> u64 {
    size.div_ceil(psize)
}

/// Root extent of the tree for a blob of `n_pages`: the smallest power of
/// two >= n_pages. Zero for the empty snapshot, which has no tree.
pub fn root_cover(n_pages: u64) -> u64 {
    if n_pages == 0 {
        0
    } else {
        n_pages.next_power_of_two()
    }
}

/// Interval of versions `(low, high)` exclusive on both ends, as used for
/// concurrent-update bookkeeping. Mostly a readability helper in tests.
pub fn between(v: Version, low: Version, high: Version) -> bool {
    low < v && v < high
}
