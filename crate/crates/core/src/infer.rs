//! Black-box replacement-policy inference.
//!
//! Everything here talks to the machine through a [`Prober`]: timed reads and
//! flushes on addresses the attacker owns. The attacker is assumed to control
//! the LLC set-index bits of its addresses (as with huge pages) but not to
//! know which slice a line lands in.

use std::collections::{BTreeMap, HashSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cache::Hierarchy;
use crate::error::InferenceError;
use crate::policy::{self, CacheSet, DuelArm, PolicyConfig, PolicyKind, ReplacementPolicy, SetId};

/// Timed-read access to a machine, as seen from one core.
pub struct Prober<'a> {
    hier: &'a mut Hierarchy,
    core: usize,
    jitter: u64,
    rng: ChaCha8Rng,
}

impl<'a> Prober<'a> {
    pub fn new(hier: &'a mut Hierarchy, core: usize, seed: u64) -> Self {
        Self {
            hier,
            core,
            jitter: 0,
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9),
        }
    }

    /// Add uniform noise in `[-cycles, cycles]` to every measured latency.
    pub fn with_jitter(mut self, cycles: u64) -> Self {
        self.jitter = cycles;
        self
    }

    pub fn read(&mut self, addr: u64) {
        self.hier.access(self.core, addr);
    }

    pub fn timed_read(&mut self, addr: u64) -> u64 {
        let lat = self.hier.access(self.core, addr).latency;
        if self.jitter == 0 {
            return lat;
        }
        let j = self.jitter as i64;
        (lat as i64 + self.rng.gen_range(-j..=j)).max(1) as u64
    }

    pub fn flush(&mut self, addr: u64) {
        self.hier.flush(addr);
    }

    pub fn read_all(&mut self, addrs: &[u64]) {
        for &a in addrs {
            self.read(a);
        }
    }

    pub fn flush_all(&mut self, addrs: &[u64]) {
        for &a in addrs {
            self.flush(a);
        }
    }

    pub fn ll_threshold(&self) -> u64 {
        self.hier.profile().ll_threshold
    }

    pub fn mem_threshold(&self) -> u64 {
        self.hier.profile().mem_threshold
    }

    pub fn ways(&self) -> usize {
        self.hier.profile().llc.ways
    }

    pub fn sets_per_slice(&self) -> usize {
        self.hier.profile().llc.sets
    }

    pub fn slice_count(&self) -> usize {
        self.hier.profile().llc.slice_count
    }

    /// Copy the generator and dueling counter of the machine's LLC policy
    /// into `model`. Randomized and dueling policies cannot be shadowed
    /// without it; deterministic ones ignore the call.
    pub fn sync_model(&self, model: &mut dyn ReplacementPolicy) {
        model.sync_from(self.hier.llc().policy());
    }

    pub fn hierarchy(&self) -> &Hierarchy {
        self.hier
    }
}

/// `count` line addresses that share LLC set index `set_index`, with
/// consecutive tags starting at `first_tag`.
pub fn candidate_pool(h: &Hierarchy, set_index: u64, first_tag: u64, count: usize) -> Vec<u64> {
    let g = h.llc().geometry();
    (0..count as u64)
        .map(|k| g.line_address(first_tag + k, set_index))
        .collect()
}

/// `w` addresses mapping to one LLC set of one slice.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvictionSet(pub Vec<u64>);

/// A second, disjoint group of `w` addresses for the same set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConflictingSet(pub Vec<u64>);

impl EvictionSet {
    pub fn addresses(&self) -> &[u64] {
        &self.0
    }

    /// The same lines moved to another set index. Slices depend on tag bits
    /// only, so the result still shares one slice.
    pub fn translated(&self, h: &Hierarchy, set_index: u64) -> EvictionSet {
        EvictionSet(translate(h, &self.0, set_index))
    }
}

impl ConflictingSet {
    pub fn addresses(&self) -> &[u64] {
        &self.0
    }

    pub fn translated(&self, h: &Hierarchy, set_index: u64) -> ConflictingSet {
        ConflictingSet(translate(h, &self.0, set_index))
    }
}

fn translate(h: &Hierarchy, addrs: &[u64], set_index: u64) -> Vec<u64> {
    let g = h.llc().geometry();
    addrs
        .iter()
        .map(|&a| g.line_address(g.tag(a), set_index))
        .collect()
}

/// Most passes over a group before a surviving target counts as not evicted.
const MAX_GROUP_PASSES: usize = 256;

/// Read `group` and re-time `target` until the target is gone or a pass over
/// the group misses nowhere, which means the group fits and nothing will
/// change. Deterministic policies settle on the first pass; under random
/// replacement each overflowing pass evicts only a line or two.
fn group_evicts(p: &mut Prober, target: u64, group: &[u64]) -> bool {
    let mem = p.mem_threshold();
    for _ in 0..MAX_GROUP_PASSES {
        let mut missed = false;
        for &a in group {
            missed |= p.timed_read(a) > mem;
        }
        if p.timed_read(target) > mem {
            return true;
        }
        if !missed {
            return false;
        }
    }
    false
}

/// Does accessing `group` after `target` push `target` out of the LLC?
///
/// Every address in `scrub` is flushed first so earlier experiments leave no
/// residue in the set.
fn evicts(p: &mut Prober, scrub: &[u64], target: u64, group: &[u64]) -> bool {
    p.flush_all(scrub);
    p.flush(target);
    p.read(target);
    group_evicts(p, target, group)
}

/// Reduce `pool` to `w` lines that evict `target`, by repeatedly splitting
/// into `w + 1` groups and dropping one whose removal keeps the eviction.
pub fn build_eviction_set(
    p: &mut Prober,
    target: u64,
    pool: &[u64],
) -> Result<EvictionSet, InferenceError> {
    let w = p.ways();
    let scrub: Vec<u64> = pool.iter().copied().chain([target]).collect();
    let mut set: Vec<u64> = pool.iter().copied().filter(|&a| a != target).collect();
    if set.len() < w || !evicts(p, &scrub, target, &set) {
        return Err(InferenceError::PoolExhausted {
            found: 0,
            needed: w,
        });
    }
    while set.len() > w {
        let groups = w + 1;
        let n = set.len();
        let mut reduced = false;
        // Later groups go first so a pool that is already congruent keeps its head.
        for g in (0..groups).rev() {
            let (lo, hi) = (g * n / groups, (g + 1) * n / groups);
            if lo == hi {
                continue;
            }
            let rest: Vec<u64> = set[..lo].iter().chain(&set[hi..]).copied().collect();
            if rest.len() >= w && evicts(p, &scrub, target, &rest) {
                set = rest;
                reduced = true;
                break;
            }
        }
        if !reduced {
            return Err(InferenceError::PoolExhausted {
                found: set.len().min(w - 1),
                needed: w,
            });
        }
    }
    p.flush_all(&scrub);
    Ok(EvictionSet(set))
}

/// Collect `w` further lines that conflict with `evset`, testing each
/// candidate exactly as follows: read the eviction set, flush it, read the
/// candidate, read the eviction set again, then time a re-read of the
/// candidate. A memory-latency re-read means the candidate shares the set.
/// When the candidate survives but the eviction set missed, the last two
/// steps repeat until one of them settles it. The candidate is flushed after
/// its test.
pub fn get_conflicting_set(
    p: &mut Prober,
    evset: &EvictionSet,
    candidates: &[u64],
) -> Result<ConflictingSet, InferenceError> {
    let w = p.ways();
    let ev = evset.addresses();
    let mut out = Vec::with_capacity(w);
    for &e in candidates {
        if ev.contains(&e) || out.contains(&e) {
            continue;
        }
        p.read_all(ev);
        p.flush_all(ev);
        p.read(e);
        let conflicts = group_evicts(p, e, ev);
        // The timed re-read brought e back; drop it so the next test starts clean.
        p.flush(e);
        if conflicts {
            out.push(e);
            if out.len() == w {
                return Ok(ConflictingSet(out));
            }
        }
    }
    Err(InferenceError::PoolExhausted {
        found: out.len(),
        needed: w,
    })
}

/// Eviction and conflicting sets for one LLC set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SetPair {
    pub evset: EvictionSet,
    pub cset: ConflictingSet,
}

impl SetPair {
    pub fn translated(&self, h: &Hierarchy, set_index: u64) -> SetPair {
        SetPair {
            evset: self.evset.translated(h, set_index),
            cset: self.cset.translated(h, set_index),
        }
    }

    pub fn all(&self) -> impl Iterator<Item = u64> + '_ {
        self.evset.0.iter().chain(&self.cset.0).copied()
    }
}

/// Pool size that comfortably holds three groups of `w` congruent lines.
pub fn default_pool_size(p: &Prober) -> usize {
    p.slice_count() * (3 * p.ways() + 8)
}

/// Build an eviction set around `target` from `pool`, then a conflicting set
/// from what remains.
pub fn build_set_pair(
    p: &mut Prober,
    target: u64,
    pool: &[u64],
) -> Result<SetPair, InferenceError> {
    let evset = build_eviction_set(p, target, pool)?;
    p.flush_all(pool);
    p.flush(target);
    let rest: Vec<u64> = std::iter::once(target)
        .chain(pool.iter().copied())
        .filter(|a| !evset.0.contains(a))
        .collect();
    let cset = get_conflicting_set(p, &evset, &rest)?;
    p.flush_all(&rest);
    p.flush_all(&evset.0);
    Ok(SetPair { evset, cset })
}

/// One set pair per slice, all at set index `set_index`.
pub fn build_slice_pairs(
    p: &mut Prober,
    set_index: u64,
    first_tag: u64,
) -> Result<Vec<SetPair>, InferenceError> {
    let slices = p.slice_count();
    let w = p.ways();
    let pool = candidate_pool(p.hierarchy(), set_index, first_tag, default_pool_size(p));
    let mut remaining = pool.clone();
    let mut pairs: Vec<SetPair> = Vec::with_capacity(slices);
    while pairs.len() < slices {
        let Some(&target) = remaining.first() else {
            return Err(InferenceError::PoolExhausted {
                found: pairs.len(),
                needed: slices,
            });
        };
        let others: Vec<u64> = remaining[1..].to_vec();
        let pair = build_set_pair(p, target, &others)?;
        let taken: HashSet<u64> = pair.all().collect();
        // Drop every line this pair's eviction set can evict: they share its slice.
        let mut next = Vec::with_capacity(remaining.len());
        for &a in &remaining {
            if taken.contains(&a) {
                continue;
            }
            if evicts(p, &pool, a, &pair.evset.0) {
                continue;
            }
            next.push(a);
        }
        p.flush_all(&pool);
        remaining = next;
        if remaining.len() < 2 * w + 1 && pairs.len() + 1 < slices {
            return Err(InferenceError::PoolExhausted {
                found: pairs.len() + 1,
                needed: slices,
            });
        }
        pairs.push(pair);
    }
    Ok(pairs)
}

/// Software shadow of one cache set under a candidate policy.
#[derive(Debug, Clone)]
pub struct PolicyModel {
    pub name: String,
    id: SetId,
    policy: Box<dyn ReplacementPolicy>,
    set: CacheSet,
}

impl PolicyModel {
    pub fn new(config: &PolicyConfig, ways: usize, id: SetId) -> Self {
        Self {
            name: config.kind.name().to_string(),
            id,
            policy: config.build(ways),
            set: CacheSet::new(ways),
        }
    }

    pub fn kind(&self) -> PolicyKind {
        self.policy.kind()
    }

    pub fn reset(&mut self) {
        let w = self.set.ways();
        self.set = CacheSet::new(w);
    }

    pub fn policy_mut(&mut self) -> &mut dyn ReplacementPolicy {
        self.policy.as_mut()
    }

    /// Shadow contents by way; `None` for an empty way.
    pub fn address_array(&self) -> Vec<Option<u64>> {
        self.set
            .lines
            .iter()
            .map(|l| l.valid.then_some(l.tag))
            .collect()
    }

    /// Shadow control values by way; −1 for an empty way.
    pub fn control_array(&self) -> Vec<i64> {
        self.set
            .lines
            .iter()
            .map(|l| if l.valid { l.age as i64 } else { -1 })
            .collect()
    }

    /// Apply one access that reached the LLC.
    pub fn update(&mut self, addr: u64) {
        match self.set.find(addr) {
            Some(way) => self.policy.on_hit(self.id, &mut self.set, way),
            None => {
                policy::install(self.policy.as_mut(), self.id, &mut self.set, addr);
            }
        }
    }

    /// Address the next miss would evict, once the shadow set is full.
    pub fn candidate(&self) -> Option<u64> {
        if self.set.first_invalid().is_some() {
            return None;
        }
        let way = self.policy.candidate(self.id, &self.set);
        Some(self.set.lines[way].tag)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolicyScore {
    pub trials: usize,
    pub correct: usize,
    pub discarded: usize,
}

impl PolicyScore {
    /// Fraction of kept trials whose predicted victim was the real one.
    pub fn accuracy(&self) -> f64 {
        let kept = self.trials - self.discarded;
        if kept == 0 {
            0.0
        } else {
            self.correct as f64 / kept as f64
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TestPolicyConfig {
    pub trials: usize,
    pub max_random_accesses: usize,
    pub seed: u64,
}

impl Default for TestPolicyConfig {
    fn default() -> Self {
        Self {
            trials: 1000,
            max_random_accesses: 50,
            seed: 0,
        }
    }
}

/// Fill, flush and reload `evset` so insertion order is known.
pub fn initialize_set(p: &mut Prober, pair: &SetPair) {
    p.read_all(&pair.evset.0);
    p.flush_all(&pair.evset.0);
    p.flush_all(&pair.cset.0);
    p.read_all(&pair.evset.0);
}

/// After a forced miss by `forcer`, find which eviction-set member left.
///
/// `forcer` is flushed first so the refill of the evicted member lands in the
/// freed way and the probe evicts nothing else. Returns `None` unless exactly
/// one member is slow.
pub fn detect_evicted(p: &mut Prober, evset: &EvictionSet, forcer: Option<u64>) -> Option<u64> {
    if let Some(f) = forcer {
        p.flush(f);
    }
    let mut slow = None;
    let mut count = 0;
    for &a in &evset.0 {
        if p.timed_read(a) > p.mem_threshold() {
            slow = Some(a);
            count += 1;
        }
    }
    (count == 1).then_some(slow).flatten()
}

/// Score `model` against the machine: in each trial, reload the set in a
/// known order, make a random number of random accesses while shadowing
/// those that reach the LLC, force one miss with a conflicting line, and
/// compare the shadow's predicted victim with the line that really left.
pub fn test_policy(
    p: &mut Prober,
    pair: &SetPair,
    model: &mut PolicyModel,
    cfg: &TestPolicyConfig,
) -> Result<PolicyScore, InferenceError> {
    if cfg.trials == 0 {
        return Err(InferenceError::ZeroTrials);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let ll = p.ll_threshold();
    let ev = pair.evset.0.clone();
    let mut score = PolicyScore {
        trials: cfg.trials,
        correct: 0,
        discarded: 0,
    };
    for _ in 0..cfg.trials {
        p.read_all(&ev);
        p.flush_all(&ev);
        p.flush_all(&pair.cset.0);
        model.reset();
        p.sync_model(model.policy_mut());
        for &a in &ev {
            if p.timed_read(a) >= ll {
                model.update(a);
            }
        }
        let lim = rng.gen_range(0..=cfg.max_random_accesses);
        for _ in 0..lim {
            let a = ev[rng.gen_range(0..ev.len())];
            if p.timed_read(a) >= ll {
                model.update(a);
            }
        }
        let forcer = pair.cset.0[rng.gen_range(0..pair.cset.0.len())];
        let predicted = model.candidate();
        if p.timed_read(forcer) >= ll {
            model.update(forcer);
        }
        match detect_evicted(p, &pair.evset, Some(forcer)) {
            Some(evicted) if Some(evicted) == predicted => score.correct += 1,
            Some(_) => {}
            None => score.discarded += 1,
        }
    }
    if score.discarded == score.trials {
        return Err(InferenceError::AllTrialsDiscarded);
    }
    Ok(score)
}

/// Quad-age mode a set currently uses, as seen by timing.
///
/// After the eviction set fills the set, one conflicting line and then the
/// first eviction-set line are read. Under mode 1 the second miss evicts the
/// second eviction-set line; under mode 2 it evicts the conflicting line
/// instead, so the second line still hits.
pub fn measure_mode(p: &mut Prober, pair: &SetPair) -> DuelArm {
    let ev = &pair.evset.0;
    p.flush_all(ev);
    p.flush_all(&pair.cset.0);
    p.read_all(ev);
    p.read(pair.cset.0[0]);
    p.read(ev[0]);
    if p.timed_read(ev[1]) > p.mem_threshold() {
        DuelArm::First
    } else {
        DuelArm::Second
    }
}

/// Miss-heavy pattern for first-arm sets: eviction set, whole conflicting
/// set, eviction set again.
fn burst(p: &mut Prober, pair: &SetPair) {
    p.flush_all(&pair.evset.0);
    p.flush_all(&pair.cset.0);
    p.read_all(&pair.evset.0);
    p.read_all(&pair.cset.0);
    p.read_all(&pair.evset.0);
}

/// Miss-heavy pattern for second-arm sets: alternate two conflicting lines
/// over a full set.
fn thrash(p: &mut Prober, pair: &SetPair, rounds: usize) {
    p.flush_all(&pair.evset.0);
    p.flush_all(&pair.cset.0);
    p.read_all(&pair.evset.0);
    for _ in 0..rounds {
        p.read(pair.cset.0[0]);
        p.read(pair.cset.0[1]);
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LeaderSearchConfig {
    pub seed: u64,
    pub batch: usize,
    pub top_up_sets: usize,
    pub thrash_rounds: usize,
    pub training_passes: usize,
    /// Extra high/low rounds a leader candidate must survive.
    pub confirm_passes: usize,
}

impl Default for LeaderSearchConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            batch: 128,
            top_up_sets: 1024,
            thrash_rounds: 16,
            training_passes: 2,
            confirm_passes: 3,
        }
    }
}

/// Sets that kept one mode through both training regimes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LeaderMap {
    /// Slice number as discovered (the attacker cannot name physical slices).
    pub slices: Vec<SliceLeaders>,
    pub followers_flipped: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SliceLeaders {
    pub first: Vec<u32>,
    pub second: Vec<u32>,
}

impl SliceLeaders {
    /// Runs of consecutive indices as half-open ranges.
    pub fn regions(indices: &[u32]) -> Vec<(u32, u32)> {
        let mut out: Vec<(u32, u32)> = Vec::new();
        for &i in indices {
            match out.last_mut() {
                Some((_, end)) if *end == i => *end += 1,
                _ => out.push((i, i + 1)),
            }
        }
        out
    }
}

impl LeaderMap {
    pub fn is_empty(&self) -> bool {
        self.slices
            .iter()
            .all(|s| s.first.is_empty() && s.second.is_empty())
    }
}

type Regime = fn(&mut Prober, &SetPair, usize);

fn train(p: &mut Prober, pairs: &[SetPair], sets: &[(usize, u64)], regime: Regime, rounds: usize) {
    for &(s, idx) in sets {
        let pair = pairs[s].translated(p.hierarchy(), idx);
        regime(p, &pair, rounds);
    }
}

fn measure_all(
    p: &mut Prober,
    pairs: &[SetPair],
    population: &[(usize, u64)],
    targets: &[(usize, u64)],
    regime: Regime,
    cfg: &LeaderSearchConfig,
    rng: &mut ChaCha8Rng,
) -> BTreeMap<(usize, u64), DuelArm> {
    let mut out = BTreeMap::new();
    for batch in targets.chunks(cfg.batch) {
        let top_up: Vec<(usize, u64)> = (0..cfg.top_up_sets)
            .map(|_| *population.choose(rng).expect("non-empty population"))
            .collect();
        train(p, pairs, &top_up, regime, cfg.thrash_rounds);
        for &(s, idx) in batch {
            let pair = pairs[s].translated(p.hierarchy(), idx);
            out.insert((s, idx), measure_mode(p, &pair));
        }
    }
    out
}

/// Find the dueling leader sets by timing alone.
///
/// One set pair is built per slice at index 0 and translated to every other
/// index. The whole cache is first trained so followers take the second arm,
/// every set's mode is measured in a seeded random order, then training
/// pushes followers to the first arm and everything is measured again. Sets
/// whose mode did not move are leader candidates, and candidates are measured
/// again for `confirm_passes` more rounds. If nothing moved in the first
/// round there is no dueling and no leaders are reported.
pub fn locate_leader_sets(
    p: &mut Prober,
    cfg: &LeaderSearchConfig,
) -> Result<LeaderMap, InferenceError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let pairs = build_slice_pairs(p, 0, 1 + rng.gen_range(0..1u64 << 20))?;
    let sets = p.sets_per_slice() as u64;
    let mut order: Vec<(usize, u64)> = (0..pairs.len())
        .flat_map(|s| (0..sets).map(move |i| (s, i)))
        .collect();
    order.shuffle(&mut rng);

    let burst_regime: Regime = |p, pair, _| burst(p, pair);
    let thrash_regime: Regime = thrash;

    // The selector only drifts toward the trained arm, so a follower can
    // read as a leader when it is measured during a dip. Leaders never move,
    // which lets extra rounds weed such followers out.
    let mut candidates = order.clone();
    let mut flipped = 0;
    let mut kept: BTreeMap<(usize, u64), DuelArm> = BTreeMap::new();
    for round in 0..=cfg.confirm_passes {
        for _ in 0..cfg.training_passes {
            train(p, &pairs, &order, burst_regime, 0);
        }
        let high = measure_all(p, &pairs, &order, &candidates, burst_regime, cfg, &mut rng);
        order.shuffle(&mut rng);
        for _ in 0..cfg.training_passes {
            train(p, &pairs, &order, thrash_regime, cfg.thrash_rounds);
        }
        let low = measure_all(p, &pairs, &order, &candidates, thrash_regime, cfg, &mut rng);
        if round == 0 {
            flipped = high.iter().filter(|(k, v)| low[k] != **v).count();
            if flipped == 0 {
                kept.clear();
                break;
            }
        }
        kept = high
            .into_iter()
            .filter(|(k, arm)| low[k] == *arm && kept.get(k).is_none_or(|a| a == arm))
            .collect();
        candidates = kept.keys().copied().collect();
        candidates.shuffle(&mut rng);
    }

    let mut slices = vec![
        SliceLeaders {
            first: Vec::new(),
            second: Vec::new(),
        };
        pairs.len()
    ];
    for (&(s, idx), &arm) in &kept {
        match arm {
            DuelArm::First => slices[s].first.push(idx as u32),
            DuelArm::Second => slices[s].second.push(idx as u32),
        }
    }
    Ok(LeaderMap {
        slices,
        followers_flipped: flipped,
    })
}
