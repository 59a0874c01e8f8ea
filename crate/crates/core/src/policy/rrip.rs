use std::any::Any;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    Aging, CacheSet, DuelArm, DuelingSelector, HitPromotion, PolicyKind, ReplacementPolicy, SetId,
};

pub const MAX_AGE: u8 = 3;

/// Age given to a newly filled line.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InsertRule {
    Age(u8),
    /// Insert at `MAX_AGE`, except once every `denominator` fills on average
    /// insert at `MAX_AGE - 1`.
    Bimodal {
        denominator: u32,
    },
}

/// The 2-bit age family: SRRIP, BRRIP, DRRIP and the quad-age variants.
///
/// Victim is the leftmost line holding the largest age. With [`Aging::Rrip`]
/// a miss first raises every age by the amount needed for that line to reach
/// `MAX_AGE`.
#[derive(Debug, Clone)]
pub struct Rrip {
    kind: PolicyKind,
    arms: [InsertRule; 2],
    selector: Option<DuelingSelector>,
    promotion: HitPromotion,
    aging: Aging,
    rng: ChaCha8Rng,
}

impl Rrip {
    pub fn srrip() -> Self {
        Self::fixed(
            PolicyKind::Srrip,
            InsertRule::Age(MAX_AGE - 1),
            HitPromotion::ToZero,
            Aging::Rrip,
            0,
        )
    }

    pub fn brrip(denominator: u32, seed: u64) -> Self {
        Self::fixed(
            PolicyKind::Brrip,
            InsertRule::Bimodal { denominator },
            HitPromotion::ToZero,
            Aging::Rrip,
            seed,
        )
    }

    pub fn drrip(denominator: u32, selector: DuelingSelector, seed: u64) -> Self {
        Self {
            kind: PolicyKind::Drrip,
            arms: [
                InsertRule::Age(MAX_AGE - 1),
                InsertRule::Bimodal { denominator },
            ],
            selector: Some(selector),
            promotion: HitPromotion::ToZero,
            aging: Aging::Rrip,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Fixed quad-age with insertion age 2 (mode 1) or 3 (mode 2).
    pub fn quad_age(insert_age: u8, aging: Aging, promotion: HitPromotion) -> Self {
        let kind = match insert_age {
            2 => PolicyKind::QuadAgeMode1,
            3 => PolicyKind::QuadAgeMode2,
            other => panic!("quad-age insertion age must be 2 or 3, got {other}"),
        };
        Self::fixed(kind, InsertRule::Age(insert_age), promotion, aging, 0)
    }

    pub fn quad_age_dueling(
        selector: DuelingSelector,
        aging: Aging,
        promotion: HitPromotion,
    ) -> Self {
        Self {
            kind: PolicyKind::QuadAgeDueling,
            arms: [InsertRule::Age(2), InsertRule::Age(3)],
            selector: Some(selector),
            promotion,
            aging,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    fn fixed(
        kind: PolicyKind,
        rule: InsertRule,
        promotion: HitPromotion,
        aging: Aging,
        seed: u64,
    ) -> Self {
        Self {
            kind,
            arms: [rule, rule],
            selector: None,
            promotion,
            aging,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn selector(&self) -> Option<&DuelingSelector> {
        self.selector.as_ref()
    }

    fn rule_for(&self, id: SetId) -> InsertRule {
        match self.selector.as_ref().map(|s| s.arm_for(id)) {
            Some(DuelArm::Second) => self.arms[1],
            _ => self.arms[0],
        }
    }

    fn leftmost_oldest(set: &CacheSet) -> (usize, u8) {
        let mut best = (0, set.lines[0].age);
        for (way, line) in set.lines.iter().enumerate().skip(1) {
            if line.age > best.1 {
                best = (way, line.age);
            }
        }
        best
    }
}

impl ReplacementPolicy for Rrip {
    fn kind(&self) -> PolicyKind {
        self.kind
    }

    fn on_fill(&mut self, id: SetId, set: &mut CacheSet, way: usize) {
        let age = match self.rule_for(id) {
            InsertRule::Age(a) => a,
            InsertRule::Bimodal { denominator } => {
                if self.rng.gen_ratio(1, denominator.max(1)) {
                    MAX_AGE - 1
                } else {
                    MAX_AGE
                }
            }
        };
        set.lines[way].age = age;
    }

    fn on_hit(&mut self, _id: SetId, set: &mut CacheSet, way: usize) {
        let line = &mut set.lines[way];
        line.age = match self.promotion {
            HitPromotion::Decrement => line.age.saturating_sub(1),
            HitPromotion::ToZero => 0,
        };
    }

    fn on_miss(&mut self, id: SetId) {
        if let Some(s) = self.selector.as_mut() {
            s.record_miss(id);
        }
    }

    fn candidate(&self, _id: SetId, set: &CacheSet) -> usize {
        Self::leftmost_oldest(set).0
    }

    fn evict(&mut self, _id: SetId, set: &mut CacheSet) -> usize {
        let (way, oldest) = Self::leftmost_oldest(set);
        if self.aging == Aging::Rrip && oldest < MAX_AGE {
            let step = MAX_AGE - oldest;
            for line in &mut set.lines {
                line.age = (line.age + step).min(MAX_AGE);
            }
        }
        way
    }

    fn psel(&self) -> Option<u32> {
        self.selector.as_ref().map(|s| s.psel())
    }

    fn set_psel(&mut self, value: u32) {
        if let Some(s) = self.selector.as_mut() {
            s.set_psel(value);
        }
    }

    fn arm_for(&self, id: SetId) -> Option<DuelArm> {
        self.selector.as_ref().map(|s| s.arm_for(id))
    }

    fn sync_from(&mut self, other: &dyn ReplacementPolicy) {
        if let Some(o) = other.as_any().downcast_ref::<Rrip>() {
            if o.kind == self.kind {
                self.rng = o.rng.clone();
                if let (Some(mine), Some(theirs)) = (self.selector.as_mut(), o.selector.as_ref()) {
                    mine.set_psel(theirs.psel());
                }
            }
        }
    }

    fn clone_box(&self) -> Box<dyn ReplacementPolicy> {
        Box::new(self.clone())
    }

    fn as_any(&self) -> &dyn Any {
        self
    }
}
