//! Inclusive three-level cache hierarchy.
//!
//! Each core owns an L1 and an L2; the sliced LLC is shared and inclusive, so
//! an LLC eviction removes the line from every private cache. LLC control
//! bits only move when the LLC itself serves or fills an access.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::addr::{line_of, Geometry};
use crate::policy::{self, CacheSet, LineState, PolicyConfig, ReplacementPolicy, SetId};
use crate::profile::{CacheLevelConfig, MachineProfile};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ServedBy {
    L1,
    L2,
    Llc,
    Memory,
}

impl ServedBy {
    pub fn label(self) -> &'static str {
        match self {
            ServedBy::L1 => "L1",
            ServedBy::L2 => "L2",
            ServedBy::Llc => "LLC",
            ServedBy::Memory => "MEM",
        }
    }

    pub fn reached_llc(self) -> bool {
        matches!(self, ServedBy::Llc | ServedBy::Memory)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccessOutcome {
    pub served_by: ServedBy,
    pub latency: u64,
    /// Line address evicted from the LLC by this access.
    pub llc_evicted: Option<u64>,
    /// Line addresses removed from private caches because of that eviction.
    pub back_invalidated: Vec<u64>,
}

/// Which cache an `inspect_set` call looks at.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LevelId {
    L1 { core: usize },
    L2 { core: usize },
    Llc,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("no set {index} in slice {slice} of {level:?}")]
pub struct OutOfRange {
    pub level: LevelId,
    pub index: usize,
    pub slice: usize,
}

/// One cache level: geometry, sets and the level's policy instance.
#[derive(Debug, Clone)]
pub struct CacheLevel {
    config: CacheLevelConfig,
    geometry: Geometry,
    sets: Vec<CacheSet>,
    policy: Box<dyn ReplacementPolicy>,
}

impl CacheLevel {
    pub fn new(config: CacheLevelConfig, policy: Box<dyn ReplacementPolicy>) -> Self {
        let geometry = Geometry::new(config.sets, config.slice_count);
        let sets = vec![CacheSet::new(config.ways); config.total_sets()];
        Self {
            config,
            geometry,
            sets,
            policy,
        }
    }

    pub fn config(&self) -> &CacheLevelConfig {
        &self.config
    }

    pub fn geometry(&self) -> Geometry {
        self.geometry
    }

    pub fn policy(&self) -> &dyn ReplacementPolicy {
        self.policy.as_ref()
    }

    pub fn policy_mut(&mut self) -> &mut dyn ReplacementPolicy {
        self.policy.as_mut()
    }

    /// Set identity and tag of `raw` in this level.
    #[inline]
    pub fn locate(&self, raw: u64) -> (SetId, u64) {
        let tag = self.geometry.tag(raw);
        let id = SetId::new(
            self.geometry.slice_of_tag(tag),
            self.geometry.set_index(raw) as u32,
        );
        (id, tag)
    }

    #[inline]
    fn flat(&self, id: SetId) -> usize {
        id.slice as usize * self.config.sets + id.index as usize
    }

    pub fn set(&self, id: SetId) -> &CacheSet {
        &self.sets[self.flat(id)]
    }

    pub fn contains(&self, raw: u64) -> bool {
        let (id, tag) = self.locate(raw);
        self.set(id).find(tag).is_some()
    }

    /// Look up `raw` and promote it on a hit.
    fn touch(&mut self, raw: u64) -> bool {
        let (id, tag) = self.locate(raw);
        let flat = self.flat(id);
        let set = &mut self.sets[flat];
        match set.find(tag) {
            Some(way) => {
                self.policy.on_hit(id, set, way);
                true
            }
            None => false,
        }
    }

    /// Install `raw`; returns the displaced line address, if any.
    fn fill(&mut self, raw: u64) -> Option<u64> {
        let (id, tag) = self.locate(raw);
        let flat = self.flat(id);
        let placement = policy::install(self.policy.as_mut(), id, &mut self.sets[flat], tag);
        placement
            .evicted
            .map(|line| self.geometry.line_address(line.tag, id.index as u64))
    }

    fn invalidate(&mut self, raw: u64) -> bool {
        let (id, tag) = self.locate(raw);
        let flat = self.flat(id);
        let set = &mut self.sets[flat];
        match set.find(tag) {
            Some(way) => {
                policy::invalidate(self.policy.as_mut(), id, set, way);
                true
            }
            None => false,
        }
    }

    pub fn valid_lines(&self) -> impl Iterator<Item = u64> + '_ {
        self.sets.iter().enumerate().flat_map(move |(flat, set)| {
            let index = (flat % self.config.sets) as u64;
            set.lines
                .iter()
                .filter(|l| l.valid)
                .map(move |l| self.geometry.line_address(l.tag, index))
        })
    }

    fn hash_into(&self, h: &mut Sha256) {
        h.update(self.config.name.as_bytes());
        for set in &self.sets {
            h.update(set.meta.to_le_bytes());
            for l in &set.lines {
                if l.valid {
                    h.update([1, l.age]);
                    h.update(l.tag.to_le_bytes());
                    h.update(l.extra.to_le_bytes());
                } else {
                    h.update([0]);
                }
            }
        }
        if let Some(p) = self.policy.psel() {
            h.update(p.to_le_bytes());
        }
    }
}

#[derive(Debug, Clone)]
struct PrivateCaches {
    l1: CacheLevel,
    l2: CacheLevel,
}

#[derive(Debug, Clone)]
pub struct Hierarchy {
    profile: MachineProfile,
    cores: Vec<PrivateCaches>,
    llc: CacheLevel,
    verify: bool,
}

impl Hierarchy {
    pub fn new(profile: &MachineProfile, seed: u64) -> Self {
        let private = |cfg: &CacheLevelConfig, salt: u64| {
            CacheLevel::new(
                cfg.clone(),
                PolicyConfig::new(cfg.policy)
                    .with_seed(seed ^ salt)
                    .build(cfg.ways),
            )
        };
        let cores = (0..profile.cores)
            .map(|c| PrivateCaches {
                l1: private(&profile.l1, 0x11 + c as u64),
                l2: private(&profile.l2, 0x22 + c as u64),
            })
            .collect();
        let llc = CacheLevel::new(
            profile.llc.clone(),
            profile.llc_policy_config(seed).build(profile.llc.ways),
        );
        Self {
            profile: profile.clone(),
            cores,
            llc,
            verify: cfg!(debug_assertions),
        }
    }

    pub fn profile(&self) -> &MachineProfile {
        &self.profile
    }

    pub fn core_count(&self) -> usize {
        self.cores.len()
    }

    pub fn llc(&self) -> &CacheLevel {
        &self.llc
    }

    pub fn llc_mut(&mut self) -> &mut CacheLevel {
        &mut self.llc
    }

    /// Enable the per-access inclusivity assertion (on by default in debug builds).
    pub fn set_verify(&mut self, on: bool) {
        self.verify = on;
    }

    pub fn llc_set_of(&self, raw: u64) -> SetId {
        self.llc.locate(raw).0
    }

    pub fn access(&mut self, core: usize, raw: u64) -> AccessOutcome {
        let raw = line_of(raw);
        let lat = self.profile.latency;
        let mut outcome = AccessOutcome {
            served_by: ServedBy::Memory,
            latency: lat.memory,
            llc_evicted: None,
            back_invalidated: Vec::new(),
        };
        let private = &mut self.cores[core];
        if private.l1.touch(raw) {
            outcome.served_by = ServedBy::L1;
            outcome.latency = lat.l1;
        } else if private.l2.touch(raw) {
            private.l1.fill(raw);
            outcome.served_by = ServedBy::L2;
            outcome.latency = lat.l2;
        } else if self.llc.touch(raw) {
            private.l2.fill(raw);
            private.l1.fill(raw);
            outcome.served_by = ServedBy::Llc;
            outcome.latency = lat.llc;
        } else {
            if let Some(victim) = self.llc.fill(raw) {
                outcome.llc_evicted = Some(victim);
                let mut held = false;
                for pc in &mut self.cores {
                    held |= pc.l1.invalidate(victim);
                    held |= pc.l2.invalidate(victim);
                }
                if held {
                    outcome.back_invalidated.push(victim);
                }
            }
            let private = &mut self.cores[core];
            private.l2.fill(raw);
            private.l1.fill(raw);
        }
        if self.verify {
            self.assert_access_inclusive(raw, &outcome);
        }
        outcome
    }

    /// Invalidate the line at every level of every core.
    pub fn flush(&mut self, raw: u64) {
        let raw = line_of(raw);
        for pc in &mut self.cores {
            pc.l1.invalidate(raw);
            pc.l2.invalidate(raw);
        }
        self.llc.invalidate(raw);
    }

    /// Level that would serve `raw` for `core`, without side effects.
    pub fn probe(&self, core: usize, raw: u64) -> ServedBy {
        let pc = &self.cores[core];
        if pc.l1.contains(raw) {
            ServedBy::L1
        } else if pc.l2.contains(raw) {
            ServedBy::L2
        } else if self.llc.contains(raw) {
            ServedBy::Llc
        } else {
            ServedBy::Memory
        }
    }

    pub fn inspect_set(
        &self,
        level: LevelId,
        index: usize,
        slice: usize,
    ) -> Result<Vec<LineState>, OutOfRange> {
        let err = OutOfRange {
            level,
            index,
            slice,
        };
        let lvl = match level {
            LevelId::L1 { core } => &self.cores.get(core).ok_or(err.clone())?.l1,
            LevelId::L2 { core } => &self.cores.get(core).ok_or(err.clone())?.l2,
            LevelId::Llc => &self.llc,
        };
        if index >= lvl.config.sets || slice >= lvl.config.slice_count {
            return Err(err);
        }
        Ok(lvl
            .set(SetId::new(slice as u32, index as u32))
            .lines
            .clone())
    }

    /// Snapshot of the LLC set holding `raw`.
    pub fn llc_set_state(&self, raw: u64) -> &CacheSet {
        self.llc.set(self.llc_set_of(raw))
    }

    /// Way of `raw` in its LLC set, if resident.
    pub fn llc_way_of(&self, raw: u64) -> Option<usize> {
        let (id, tag) = self.llc.locate(raw);
        self.llc.set(id).find(tag)
    }

    /// Line the LLC would evict next from the set holding `raw`.
    pub fn llc_candidate(&self, raw: u64) -> Option<u64> {
        let (id, _) = self.llc.locate(raw);
        let set = self.llc.set(id);
        if set.first_invalid().is_some() {
            return None;
        }
        let way = self.llc.policy().candidate(id, set);
        Some(
            self.llc
                .geometry
                .line_address(set.lines[way].tag, id.index as u64),
        )
    }

    /// Full sweep: every private line must also be in the LLC.
    pub fn check_inclusive(&self) -> Result<(), u64> {
        for pc in &self.cores {
            for raw in pc.l1.valid_lines().chain(pc.l2.valid_lines()) {
                if !self.llc.contains(raw) {
                    return Err(raw);
                }
            }
        }
        Ok(())
    }

    /// The two ways a single access can break inclusivity: the accessed line
    /// missing from the LLC, or the LLC victim surviving in a private cache.
    fn assert_access_inclusive(&self, raw: u64, outcome: &AccessOutcome) {
        assert!(self.llc.contains(raw), "accessed line {raw:#x} not in LLC");
        if let Some(victim) = outcome.llc_evicted {
            for pc in &self.cores {
                assert!(
                    !pc.l1.contains(victim) && !pc.l2.contains(victim),
                    "LLC victim {victim:#x} still private"
                );
            }
        }
    }

    /// Hex SHA-256 over every level's contents and control state.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for pc in &self.cores {
            pc.l1.hash_into(&mut h);
            pc.l2.hash_into(&mut h);
        }
        self.llc.hash_into(&mut h);
        hex::encode(h.finalize())
    }
}
