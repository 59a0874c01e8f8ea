//! Library components checked against small reference implementations
//! written independently of the library code.

use aes::cipher::{BlockEncrypt, KeyInit};
use cachelab::policy::{install, CacheSet, PolicyConfig, PolicyKind, ReplacementPolicy, SetId};
use cachelab::victim::aes::{AesTTable, TableLayout};
use cachelab::victim::rsa::{random_exponent, sqm_ops, LeadingBit, SqmOp};
use cachelab::Geometry;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const ID: SetId = SetId { slice: 0, index: 0 };

/// Outcome of one access as the references report it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Step {
    Hit,
    Miss { evicted: Option<u64> },
}

/// Textbook 2-bit RRIP set: insert at `insert`, on a hit step the age down
/// (or to zero with `to_zero`), and evict the first line at age 3 after aging
/// everyone until one gets there.
struct RripRef {
    ways: Vec<Option<(u64, u8)>>,
    insert: u8,
    to_zero: bool,
}

impl RripRef {
    fn new(w: usize, insert: u8, to_zero: bool) -> Self {
        Self {
            ways: vec![None; w],
            insert,
            to_zero,
        }
    }

    fn access(&mut self, tag: u64) -> Step {
        if let Some(slot) = self.ways.iter_mut().flatten().find(|(t, _)| *t == tag) {
            slot.1 = if self.to_zero {
                0
            } else {
                slot.1.saturating_sub(1)
            };
            return Step::Hit;
        }
        if let Some(free) = self.ways.iter().position(Option::is_none) {
            self.ways[free] = Some((tag, self.insert));
            return Step::Miss { evicted: None };
        }
        loop {
            if let Some(i) = self.ways.iter().position(|s| s.unwrap().1 == 3) {
                let old = self.ways[i].unwrap().0;
                self.ways[i] = Some((tag, self.insert));
                return Step::Miss { evicted: Some(old) };
            }
            for s in self.ways.iter_mut().flatten() {
                s.1 += 1;
            }
        }
    }

    fn ages(&self) -> Vec<Option<u8>> {
        self.ways.iter().map(|s| s.map(|(_, a)| a)).collect()
    }
}

/// Recency list, most recent last. `touch_on_hit` false gives FIFO.
struct ListRef {
    order: Vec<u64>,
    cap: usize,
    touch_on_hit: bool,
}

impl ListRef {
    fn access(&mut self, tag: u64) -> Step {
        if let Some(i) = self.order.iter().position(|&t| t == tag) {
            if self.touch_on_hit {
                self.order.remove(i);
                self.order.push(tag);
            }
            return Step::Hit;
        }
        let evicted = (self.order.len() == self.cap).then(|| self.order.remove(0));
        self.order.push(tag);
        Step::Miss { evicted }
    }
}

/// The library policy driven the way a cache level drives it.
struct LibSet {
    policy: Box<dyn ReplacementPolicy>,
    set: CacheSet,
}

impl LibSet {
    fn new(kind: PolicyKind, w: usize) -> Self {
        Self {
            policy: PolicyConfig::new(kind).build(w),
            set: CacheSet::new(w),
        }
    }

    fn access(&mut self, tag: u64) -> Step {
        match self.set.find(tag) {
            Some(way) => {
                self.policy.on_hit(ID, &mut self.set, way);
                Step::Hit
            }
            None => {
                let p = install(self.policy.as_mut(), ID, &mut self.set, tag);
                Step::Miss {
                    evicted: p.evicted.map(|l| l.tag),
                }
            }
        }
    }

    fn ages(&self) -> Vec<Option<u8>> {
        self.set
            .lines
            .iter()
            .map(|l| l.valid.then_some(l.age))
            .collect()
    }
}

fn accesses() -> impl Strategy<Value = (usize, Vec<u64>)> {
    (2usize..=16).prop_flat_map(|w| {
        (
            Just(w),
            proptest::collection::vec(0u64..(2 * w as u64 + 2), 0..300),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn quad_age_matches_reference((w, seq) in accesses(), mode2 in any::<bool>()) {
        let kind = if mode2 { PolicyKind::QuadAgeMode2 } else { PolicyKind::QuadAgeMode1 };
        let mut lib = LibSet::new(kind, w);
        let mut reference = RripRef::new(w, if mode2 { 3 } else { 2 }, false);
        for &t in &seq {
            prop_assert_eq!(lib.access(t), reference.access(t));
            prop_assert_eq!(lib.ages(), reference.ages());
        }
    }

    #[test]
    fn srrip_matches_reference((w, seq) in accesses()) {
        let mut lib = LibSet::new(PolicyKind::Srrip, w);
        let mut reference = RripRef::new(w, 2, true);
        for &t in &seq {
            prop_assert_eq!(lib.access(t), reference.access(t));
            prop_assert_eq!(lib.ages(), reference.ages());
        }
    }

    #[test]
    fn lru_and_fifo_match_reference((w, seq) in accesses()) {
        for (kind, touch_on_hit) in [(PolicyKind::TrueLru, true), (PolicyKind::Fifo, false)] {
            let mut lib = LibSet::new(kind, w);
            let mut reference = ListRef { order: Vec::new(), cap: w, touch_on_hit };
            for &t in &seq {
                prop_assert_eq!(lib.access(t), reference.access(t), "{:?}", kind);
            }
        }
    }
}

#[test]
fn srrip_worked_victim() {
    let mut reference = RripRef::new(3, 2, true);
    reference.ways = vec![Some((10, 2)), Some((11, 3)), Some((12, 1))];
    assert_eq!(reference.access(13), Step::Miss { evicted: Some(11) });

    let mut lib = LibSet::new(PolicyKind::Srrip, 3);
    for (way, (tag, age)) in [(10, 2), (11, 3), (12, 1)].into_iter().enumerate() {
        let line = &mut lib.set.lines[way];
        (line.tag, line.valid, line.age) = (tag, true, age);
    }
    assert_eq!(lib.policy.candidate(ID, &lib.set), 1);
    assert_eq!(lib.access(13), Step::Miss { evicted: Some(11) });
}

#[test]
fn ttable_aes_matches_reference_cipher() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xae5);
    for _ in 0..10_000 {
        let key: [u8; 16] = rng.gen();
        let pt: [u8; 16] = rng.gen();
        let ours = AesTTable::new(key, TableLayout::default()).encrypt(&pt);
        let mut block = aes::Block::from(pt);
        aes::Aes128::new(&key.into()).encrypt_block(&mut block);
        assert_eq!(ours, <[u8; 16]>::from(block), "key {key:02x?} pt {pt:02x?}");
    }
}

/// Run the operation sequence as real arithmetic modulo a prime.
fn run_ops(ops: &[SqmOp], base: u128, modulus: u128, start: u128) -> u128 {
    let mut x = start;
    for op in ops {
        match op {
            SqmOp::Square => x *= x,
            SqmOp::Multiply => x *= base,
            SqmOp::Reduce => x %= modulus,
        }
    }
    x
}

/// Right-to-left binary exponentiation, independent of bit order.
fn pow_mod(base: u128, bits: &[bool], modulus: u128) -> u128 {
    let mut result = 1u128;
    let mut b = base % modulus;
    for &bit in bits.iter().rev() {
        if bit {
            result = result * b % modulus;
        }
        b = b * b % modulus;
    }
    result
}

#[test]
fn square_and_multiply_computes_the_power() {
    let modulus = 4_294_967_291u128;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for bits in [1usize, 2, 17, 64, 512] {
        for seed in 0..20 {
            let e = random_exponent(bits, seed);
            let base = rng.gen_range(2..modulus);
            let want = pow_mod(base, &e, modulus);
            assert_eq!(
                run_ops(&sqm_ops(&e, LeadingBit::Process), base, modulus, 1),
                want
            );
            assert_eq!(
                run_ops(&sqm_ops(&e, LeadingBit::Consume), base, modulus, base),
                want
            );
        }
    }
}

#[test]
fn address_decomposition_round_trips() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let geometries = [
        Geometry::new(64, 1),
        Geometry::new(2048, 4),
        Geometry::new(1024, 8),
        Geometry::new(512, 1),
    ];
    for _ in 0..100_000 {
        let raw = rng.gen::<u64>() >> rng.gen_range(0..20);
        for g in &geometries {
            let d = g.decompose(raw);
            assert_eq!(g.compose(d.tag, d.set_index, d.offset), raw);
            assert!(d.set_index < g.sets() as u64);
            assert!((d.slice as usize) < g.slice_count());
            assert_eq!(d.slice, g.slice_of_tag(d.tag));
        }
    }
}
