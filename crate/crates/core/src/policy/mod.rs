//! Replacement policies.
//!
//! Every policy works on a [`CacheSet`], a way-ordered array of [`LineState`]
//! plus one word of set-level metadata. Policy objects carry only state that
//! is global to a cache level (random generators, the dueling counter), so a
//! single instance serves every set of that level and a clone of it can act
//! as a software shadow of the hardware.

mod classic;
mod dueling;
mod rrip;

use std::any::Any;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use classic::{Clock, Fifo, Nru, RandomPolicy, TreePlru, TrueLru};
pub use dueling::{DuelArm, DuelingSelector, LeaderRegion};
pub use rrip::{InsertRule, Rrip};

use crate::error::ConfigError;

/// Per-way occupancy record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct LineState {
    pub tag: u64,
    pub valid: bool,
    /// Policy control value. Quad-age and RRIP ages live in 0..=3.
    pub age: u8,
    /// Opaque per-policy storage (recency stamps and the like).
    pub extra: u64,
}

/// One set of a cache level.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CacheSet {
    pub lines: Vec<LineState>,
    /// Set-level policy storage (tree bits, clock hand, pre-drawn victim).
    pub meta: u64,
}

impl CacheSet {
    pub fn new(ways: usize) -> Self {
        Self {
            lines: vec![LineState::default(); ways],
            meta: 0,
        }
    }

    pub fn ways(&self) -> usize {
        self.lines.len()
    }

    #[inline]
    pub fn find(&self, tag: u64) -> Option<usize> {
        self.lines.iter().position(|l| l.valid && l.tag == tag)
    }

    #[inline]
    pub fn first_invalid(&self) -> Option<usize> {
        self.lines.iter().position(|l| !l.valid)
    }

    pub fn valid_count(&self) -> usize {
        self.lines.iter().filter(|l| l.valid).count()
    }
}

/// Identity of a set inside a (possibly sliced) level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SetId {
    pub slice: u32,
    pub index: u32,
}

impl SetId {
    pub fn new(slice: u32, index: u32) -> Self {
        Self { slice, index }
    }
}

/// The contract every replacement policy implements.
///
/// `candidate` is pure: it names the way the next miss would evict without
/// touching state. `evict` performs the same choice and applies whatever
/// bookkeeping the policy does at replacement time (RRIP-style aging, clock
/// hand movement). Both are only called on full sets; free ways are always
/// filled first by [`install`].
pub trait ReplacementPolicy: fmt::Debug + Send {
    fn kind(&self) -> PolicyKind;

    fn on_fill(&mut self, id: SetId, set: &mut CacheSet, way: usize);

    fn on_hit(&mut self, id: SetId, set: &mut CacheSet, way: usize);

    /// Called once per miss in the set, before the fill.
    fn on_miss(&mut self, _id: SetId) {}

    fn on_invalidate(&mut self, _id: SetId, _set: &mut CacheSet, _way: usize) {}

    fn candidate(&self, id: SetId, set: &CacheSet) -> usize;

    fn evict(&mut self, id: SetId, set: &mut CacheSet) -> usize {
        self.candidate(id, set)
    }

    /// Dueling counter, for policies that have one.
    fn psel(&self) -> Option<u32> {
        None
    }

    fn set_psel(&mut self, _value: u32) {}

    /// Arm a dueling policy uses for `id` right now.
    fn arm_for(&self, _id: SetId) -> Option<DuelArm> {
        None
    }

    /// Copy level-global state (generators, dueling counter) from another
    /// instance of the same concrete policy. No-op for mismatched kinds.
    fn sync_from(&mut self, _other: &dyn ReplacementPolicy) {}

    fn clone_box(&self) -> Box<dyn ReplacementPolicy>;

    fn as_any(&self) -> &dyn Any;
}

impl Clone for Box<dyn ReplacementPolicy> {
    fn clone(&self) -> Self {
        self.clone_box()
    }
}

/// Way chosen for a fill and the line it displaced, if any.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Placement {
    pub way: usize,
    pub evicted: Option<LineState>,
}

/// Miss handling shared by every level: notify the policy, take the leftmost
/// free way or ask the policy for a victim, then install `tag`.
pub fn install(
    policy: &mut dyn ReplacementPolicy,
    id: SetId,
    set: &mut CacheSet,
    tag: u64,
) -> Placement {
    policy.on_miss(id);
    let (way, evicted) = match set.first_invalid() {
        Some(way) => (way, None),
        None => {
            let way = policy.evict(id, set);
            (way, Some(set.lines[way]))
        }
    };
    set.lines[way] = LineState {
        tag,
        valid: true,
        age: 0,
        extra: 0,
    };
    policy.on_fill(id, set, way);
    Placement { way, evicted }
}

/// Way the next fill into `set` would use.
pub fn next_fill_way(policy: &dyn ReplacementPolicy, id: SetId, set: &CacheSet) -> usize {
    set.first_invalid()
        .unwrap_or_else(|| policy.candidate(id, set))
}

pub fn invalidate(policy: &mut dyn ReplacementPolicy, id: SetId, set: &mut CacheSet, way: usize) {
    set.lines[way].valid = false;
    policy.on_invalidate(id, set, way);
}

/// Names of the policies in the zoo.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum PolicyKind {
    TrueLru,
    TreePlru,
    Fifo,
    Clock,
    Nru,
    Srrip,
    Brrip,
    Drrip,
    QuadAgeMode1,
    QuadAgeMode2,
    QuadAgeDueling,
    Random,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 12] = [
        PolicyKind::TrueLru,
        PolicyKind::TreePlru,
        PolicyKind::Fifo,
        PolicyKind::Clock,
        PolicyKind::Nru,
        PolicyKind::Srrip,
        PolicyKind::Brrip,
        PolicyKind::Drrip,
        PolicyKind::QuadAgeMode1,
        PolicyKind::QuadAgeMode2,
        PolicyKind::QuadAgeDueling,
        PolicyKind::Random,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::TrueLru => "lru",
            PolicyKind::TreePlru => "tree-plru",
            PolicyKind::Fifo => "fifo",
            PolicyKind::Clock => "clock",
            PolicyKind::Nru => "nru",
            PolicyKind::Srrip => "srrip",
            PolicyKind::Brrip => "brrip",
            PolicyKind::Drrip => "drrip",
            PolicyKind::QuadAgeMode1 => "quad-age-mode1",
            PolicyKind::QuadAgeMode2 => "quad-age-mode2",
            PolicyKind::QuadAgeDueling => "quad-age-dueling",
            PolicyKind::Random => "random",
        }
    }

    pub fn is_quad_age(self) -> bool {
        matches!(
            self,
            PolicyKind::QuadAgeMode1 | PolicyKind::QuadAgeMode2 | PolicyKind::QuadAgeDueling
        )
    }

    pub fn duels(self) -> bool {
        matches!(self, PolicyKind::QuadAgeDueling | PolicyKind::Drrip)
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl TryFrom<String> for PolicyKind {
    type Error = ConfigError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<PolicyKind> for String {
    fn from(k: PolicyKind) -> String {
        k.name().to_string()
    }
}

impl FromStr for PolicyKind {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let wanted = s.trim().to_ascii_lowercase();
        PolicyKind::ALL
            .into_iter()
            .find(|k| k.name() == wanted)
            .ok_or_else(|| ConfigError::UnknownPolicy(s.to_string()))
    }
}

/// What happens when a miss finds no line at the maximum age.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Aging {
    /// Increment every age until one reaches the maximum, then evict it.
    #[default]
    Rrip,
    /// Evict the leftmost line with the largest age; ages are left alone.
    None,
}

/// Age update on a hit served by the level itself.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HitPromotion {
    #[default]
    Decrement,
    ToZero,
}

/// Everything needed to instantiate a policy for one cache level.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub kind: PolicyKind,
    #[serde(default)]
    pub aging: Aging,
    #[serde(default)]
    pub hit_promotion: HitPromotion,
    /// BRRIP inserts at the intermediate age once every this many fills on average.
    #[serde(default = "default_bimodal_denominator")]
    pub bimodal_denominator: u32,
    #[serde(default = "default_psel_bits")]
    pub psel_bits: u32,
    #[serde(default = "LeaderRegion::default_layout")]
    pub leaders: Vec<LeaderRegion>,
    #[serde(default)]
    pub seed: u64,
}

fn default_bimodal_denominator() -> u32 {
    32
}

fn default_psel_bits() -> u32 {
    10
}

impl PolicyConfig {
    pub fn new(kind: PolicyKind) -> Self {
        Self {
            kind,
            aging: Aging::default(),
            hit_promotion: HitPromotion::default(),
            bimodal_denominator: default_bimodal_denominator(),
            psel_bits: default_psel_bits(),
            leaders: LeaderRegion::default_layout(),
            seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn build(&self, ways: usize) -> Box<dyn ReplacementPolicy> {
        let selector = || DuelingSelector::new(self.leaders.clone(), self.psel_bits);
        match self.kind {
            PolicyKind::TrueLru => Box::new(TrueLru),
            PolicyKind::TreePlru => Box::new(TreePlru::new(ways)),
            PolicyKind::Fifo => Box::new(Fifo),
            PolicyKind::Clock => Box::new(Clock),
            PolicyKind::Nru => Box::new(Nru),
            PolicyKind::Random => Box::new(RandomPolicy::new(self.seed)),
            PolicyKind::Srrip => Box::new(Rrip::srrip()),
            PolicyKind::Brrip => Box::new(Rrip::brrip(self.bimodal_denominator, self.seed)),
            PolicyKind::Drrip => {
                Box::new(Rrip::drrip(self.bimodal_denominator, selector(), self.seed))
            }
            PolicyKind::QuadAgeMode1 => Box::new(Rrip::quad_age(2, self.aging, self.hit_promotion)),
            PolicyKind::QuadAgeMode2 => Box::new(Rrip::quad_age(3, self.aging, self.hit_promotion)),
            PolicyKind::QuadAgeDueling => Box::new(Rrip::quad_age_dueling(
                selector(),
                self.aging,
                self.hit_promotion,
            )),
        }
    }
}

/// One instance of every policy in the zoo for a `ways`-way set.
pub fn policy_zoo(ways: usize, seed: u64) -> Vec<Box<dyn ReplacementPolicy>> {
    PolicyKind::ALL
        .into_iter()
        .map(|k| PolicyConfig::new(k).with_seed(seed).build(ways))
        .collect()
}
