use std::any::Any;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{CacheSet, PolicyKind, ReplacementPolicy, SetId};

macro_rules! boxed_plumbing {
    () => {
        fn clone_box(&self) -> Box<dyn ReplacementPolicy> {
            Box::new(self.clone())
        }

        fn as_any(&self) -> &dyn Any {
            self
        }
    };
}

/// Way holding the smallest `extra` stamp.
fn oldest_stamp(set: &CacheSet) -> usize {
    set.lines
        .iter()
        .enumerate()
        .min_by_key(|(_, l)| l.extra)
        .map(|(w, _)| w)
        .unwrap_or(0)
}

fn stamp(set: &mut CacheSet, way: usize) {
    set.meta += 1;
    set.lines[way].extra = set.meta;
}

/// Exact recency order, kept as monotonically increasing stamps.
#[derive(Debug, Clone, Copy, Default)]
pub struct TrueLru;

impl ReplacementPolicy for TrueLru {
    fn kind(&self) -> PolicyKind {
        PolicyKind::TrueLru
    }

    fn on_fill(&mut self, _id: SetId, set: &mut CacheSet, way: usize) {
        stamp(set, way);
    }

    fn on_hit(&mut self, _id: SetId, set: &mut CacheSet, way: usize) {
        stamp(set, way);
    }

    fn candidate(&self, _id: SetId, set: &CacheSet) -> usize {
        oldest_stamp(set)
    }

    boxed_plumbing!();
}

/// Insertion order only; hits change nothing.
#[derive(Debug, Clone, Copy, Default)]
pub struct Fifo;

impl ReplacementPolicy for Fifo {
    fn kind(&self) -> PolicyKind {
        PolicyKind::Fifo
    }

    fn on_fill(&mut self, _id: SetId, set: &mut CacheSet, way: usize) {
        stamp(set, way);
    }

    fn on_hit(&mut self, _id: SetId, _set: &mut CacheSet, _way: usize) {}

    fn candidate(&self, _id: SetId, set: &CacheSet) -> usize {
        oldest_stamp(set)
    }

    boxed_plumbing!();
}

/// Binary-tree pseudo-LRU over the next power of two of the way count.
///
/// Node `n` has children `2n+1` and `2n+2`; its bit lives at position `n` of
/// the set's `meta`. A clear bit sends the victim walk left. Subtrees made of
/// ways beyond the real associativity are never chosen.
#[derive(Debug, Clone, Copy)]
pub struct TreePlru {
    ways: usize,
    leaves: usize,
}

impl TreePlru {
    pub fn new(ways: usize) -> Self {
        let leaves = ways.next_power_of_two();
        assert!(leaves <= 64, "tree-plru supports at most 64 ways");
        Self { ways, leaves }
    }

    fn touch(&self, set: &mut CacheSet, way: usize) {
        let (mut node, mut lo, mut span) = (0usize, 0usize, self.leaves);
        while span > 1 {
            span /= 2;
            let went_left = way < lo + span;
            if went_left {
                set.meta |= 1 << node;
                node = 2 * node + 1;
            } else {
                set.meta &= !(1 << node);
                lo += span;
                node = 2 * node + 2;
            }
        }
    }
}

impl ReplacementPolicy for TreePlru {
    fn kind(&self) -> PolicyKind {
        PolicyKind::TreePlru
    }

    fn on_fill(&mut self, _id: SetId, set: &mut CacheSet, way: usize) {
        self.touch(set, way);
    }

    fn on_hit(&mut self, _id: SetId, set: &mut CacheSet, way: usize) {
        self.touch(set, way);
    }

    fn candidate(&self, _id: SetId, set: &CacheSet) -> usize {
        let (mut node, mut lo, mut span) = (0usize, 0usize, self.leaves);
        while span > 1 {
            span /= 2;
            let right_exists = lo + span < self.ways;
            let go_right = right_exists && set.meta & (1 << node) != 0;
            if go_right {
                lo += span;
                node = 2 * node + 2;
            } else {
                node = 2 * node + 1;
            }
        }
        lo
    }

    boxed_plumbing!();
}

/// Second-chance clock. The reference bit is kept in `age`, the hand in `meta`.
#[derive(Debug, Clone, Copy, Default)]
pub struct Clock;

impl ReplacementPolicy for Clock {
    fn kind(&self) -> PolicyKind {
        PolicyKind::Clock
    }

    fn on_fill(&mut self, _id: SetId, set: &mut CacheSet, way: usize) {
        set.lines[way].age = 1;
        set.meta = ((way + 1) % set.ways()) as u64;
    }

    fn on_hit(&mut self, _id: SetId, set: &mut CacheSet, way: usize) {
        set.lines[way].age = 1;
    }

    fn candidate(&self, _id: SetId, set: &CacheSet) -> usize {
        let w = set.ways();
        let hand = set.meta as usize % w;
        (0..w)
            .map(|step| (hand + step) % w)
            .find(|&way| set.lines[way].age == 0)
            .unwrap_or(hand)
    }

    fn evict(&mut self, id: SetId, set: &mut CacheSet) -> usize {
        let victim = self.candidate(id, set);
        let w = set.ways();
        if set.lines[victim].age != 0 {
            // A full sweep clears every bit and lands back on the hand.
            set.lines.iter_mut().for_each(|l| l.age = 0);
        } else {
            let mut way = set.meta as usize % w;
            while way != victim {
                set.lines[way].age = 0;
                way = (way + 1) % w;
            }
        }
        set.meta = victim as u64;
        victim
    }

    boxed_plumbing!();
}

/// Not-recently-used bit per way, kept in `age`.
#[derive(Debug, Clone, Copy, Default)]
pub struct Nru;

impl Nru {
    fn mark(set: &mut CacheSet, way: usize) {
        set.lines[way].age = 1;
        if set.lines.iter().all(|l| l.valid && l.age == 1) {
            for (w, line) in set.lines.iter_mut().enumerate() {
                if w != way {
                    line.age = 0;
                }
            }
        }
    }
}

impl ReplacementPolicy for Nru {
    fn kind(&self) -> PolicyKind {
        PolicyKind::Nru
    }

    fn on_fill(&mut self, _id: SetId, set: &mut CacheSet, way: usize) {
        Self::mark(set, way);
    }

    fn on_hit(&mut self, _id: SetId, set: &mut CacheSet, way: usize) {
        Self::mark(set, way);
    }

    fn candidate(&self, _id: SetId, set: &CacheSet) -> usize {
        set.lines.iter().position(|l| l.age == 0).unwrap_or(0)
    }

    boxed_plumbing!();
}

/// Uniform random victim. The draw for the next eviction is made at fill time
/// and parked in `meta`, so the candidate can be read without consuming
/// randomness.
#[derive(Debug, Clone)]
pub struct RandomPolicy {
    rng: ChaCha8Rng,
}

impl RandomPolicy {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

impl ReplacementPolicy for RandomPolicy {
    fn kind(&self) -> PolicyKind {
        PolicyKind::Random
    }

    fn on_fill(&mut self, _id: SetId, set: &mut CacheSet, _way: usize) {
        set.meta = self.rng.gen_range(0..set.ways()) as u64;
    }

    fn on_hit(&mut self, _id: SetId, _set: &mut CacheSet, _way: usize) {}

    fn candidate(&self, _id: SetId, set: &CacheSet) -> usize {
        set.meta as usize % set.ways()
    }

    fn sync_from(&mut self, other: &dyn ReplacementPolicy) {
        if let Some(o) = other.as_any().downcast_ref::<RandomPolicy>() {
            self.rng = o.rng.clone();
        }
    }

    boxed_plumbing!();
}
