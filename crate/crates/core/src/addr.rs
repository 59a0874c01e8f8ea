//! Physical address decomposition into line offset, set index, tag and slice.

use serde::{Deserialize, Serialize};

/// Bits addressing a byte within a 64-byte line.
pub const OFFSET_BITS: u32 = 6;
pub const LINE_SIZE: u64 = 1 << OFFSET_BITS;

/// A decomposed address for one cache level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CacheAddress {
    pub raw: u64,
    pub offset: u64,
    pub set_index: u64,
    pub tag: u64,
    pub slice: u32,
}

/// Index geometry of one cache level.
///
/// `slice_count` is 1 for private levels. Sliced levels pick the slice with
/// an XOR-fold of the tag bits. That fold is a stand-in: real parts use an
/// undocumented hash over many address bits, which nothing here depends on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Geometry {
    index_bits: u32,
    slice_bits: u32,
}

impl Geometry {
    /// `sets` is the number of sets per slice. Both counts must be powers of two.
    pub fn new(sets: usize, slice_count: usize) -> Self {
        assert!(
            sets.is_power_of_two(),
            "set count {sets} is not a power of two"
        );
        assert!(
            slice_count.is_power_of_two(),
            "slice count {slice_count} is not a power of two"
        );
        Self {
            index_bits: sets.trailing_zeros(),
            slice_bits: slice_count.trailing_zeros(),
        }
    }

    pub fn index_bits(&self) -> u32 {
        self.index_bits
    }

    pub fn sets(&self) -> usize {
        1 << self.index_bits
    }

    pub fn slice_count(&self) -> usize {
        1 << self.slice_bits
    }

    #[inline]
    pub fn set_index(&self, raw: u64) -> u64 {
        (raw >> OFFSET_BITS) & ((1 << self.index_bits) - 1)
    }

    #[inline]
    pub fn tag(&self, raw: u64) -> u64 {
        raw >> (OFFSET_BITS + self.index_bits)
    }

    #[inline]
    pub fn slice_of_tag(&self, tag: u64) -> u32 {
        if self.slice_bits == 0 {
            return 0;
        }
        let mask = (1u64 << self.slice_bits) - 1;
        let mut rest = tag;
        let mut folded = 0;
        while rest != 0 {
            folded ^= rest & mask;
            rest >>= self.slice_bits;
        }
        folded as u32
    }

    pub fn decompose(&self, raw: u64) -> CacheAddress {
        let tag = self.tag(raw);
        CacheAddress {
            raw,
            offset: raw & (LINE_SIZE - 1),
            set_index: self.set_index(raw),
            tag,
            slice: self.slice_of_tag(tag),
        }
    }

    pub fn compose(&self, tag: u64, set_index: u64, offset: u64) -> u64 {
        debug_assert!(set_index < (1 << self.index_bits));
        debug_assert!(offset < LINE_SIZE);
        (tag << (OFFSET_BITS + self.index_bits)) | (set_index << OFFSET_BITS) | offset
    }

    /// Line-aligned address of the line holding `tag` in `set_index`.
    pub fn line_address(&self, tag: u64, set_index: u64) -> u64 {
        self.compose(tag, set_index, 0)
    }
}

/// Line-aligned form of `raw`.
#[inline]
pub fn line_of(raw: u64) -> u64 {
    raw & !(LINE_SIZE - 1)
}
