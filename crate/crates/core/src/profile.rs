//! Machine profiles: cache geometry, policies and latencies.
//!
//! Profiles are TOML documents. The built-in ones are named after the desktop
//! and laptop parts whose behavior they approximate; a file named
//! `<name>.toml` in the directory given by `CACHELAB_PROFILE_DIR` takes
//! precedence over a built-in of the same name.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::ConfigError;
use crate::policy::{Aging, HitPromotion, LeaderRegion, PolicyConfig, PolicyKind};

pub const PROFILE_DIR_ENV: &str = "CACHELAB_PROFILE_DIR";

/// Geometry and hit latency of one cache level.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheLevelConfig {
    pub name: String,
    /// Sets per slice.
    pub sets: usize,
    pub ways: usize,
    pub latency_cycles: u64,
    #[serde(default)]
    pub inclusive_of_lower: bool,
    #[serde(default = "one")]
    pub slice_count: usize,
    /// Replacement policy for private levels. The LLC policy comes from the
    /// profile's insertion mode unless `llc_policy` overrides it.
    #[serde(default = "default_private_policy")]
    pub policy: PolicyKind,
}

fn one() -> usize {
    1
}

fn default_private_policy() -> PolicyKind {
    PolicyKind::TrueLru
}

impl CacheLevelConfig {
    pub fn sliced(&self) -> bool {
        self.slice_count > 1
    }

    pub fn total_sets(&self) -> usize {
        self.sets * self.slice_count
    }
}

/// How the LLC chooses insertion ages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InsertionMode {
    Mode1Fixed,
    Mode2Fixed,
    SetDueling,
}

impl InsertionMode {
    pub fn policy_kind(self) -> PolicyKind {
        match self {
            InsertionMode::Mode1Fixed => PolicyKind::QuadAgeMode1,
            InsertionMode::Mode2Fixed => PolicyKind::QuadAgeMode2,
            InsertionMode::SetDueling => PolicyKind::QuadAgeDueling,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Latencies {
    pub l1: u64,
    pub l2: u64,
    pub llc: u64,
    pub memory: u64,
    /// Cost charged to the agent issuing a flush.
    pub flush: u64,
}

impl Default for Latencies {
    fn default() -> Self {
        Self {
            l1: 4,
            l2: 12,
            llc: 105,
            memory: 345,
            flush: 40,
        }
    }
}

/// Knobs of the quad-age and dueling LLC policies.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LlcPolicyTuning {
    #[serde(default)]
    pub aging: Aging,
    #[serde(default)]
    pub hit_promotion: HitPromotion,
    #[serde(default = "ten")]
    pub psel_bits: u32,
    #[serde(default = "LeaderRegion::default_layout")]
    pub leaders: Vec<LeaderRegion>,
}

fn ten() -> u32 {
    10
}

impl Default for LlcPolicyTuning {
    fn default() -> Self {
        Self {
            aging: Aging::default(),
            hit_promotion: HitPromotion::default(),
            psel_bits: 10,
            leaders: LeaderRegion::default_layout(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MachineProfile {
    pub name: String,
    pub generation: u32,
    pub cores: usize,
    pub insertion_mode: InsertionMode,
    /// Replaces the insertion-mode policy, for running the policy zoo.
    #[serde(default)]
    pub llc_policy: Option<PolicyKind>,
    #[serde(default)]
    pub tuning: LlcPolicyTuning,
    pub latency: Latencies,
    /// Latencies at or above this come from the LLC or memory.
    pub ll_threshold: u64,
    /// Latencies at or above this come from memory.
    pub mem_threshold: u64,
    pub l1: CacheLevelConfig,
    pub l2: CacheLevelConfig,
    pub llc: CacheLevelConfig,
}

fn level(
    name: &str,
    sets: usize,
    ways: usize,
    latency_cycles: u64,
    slice_count: usize,
) -> CacheLevelConfig {
    CacheLevelConfig {
        name: name.to_string(),
        sets,
        ways,
        latency_cycles,
        inclusive_of_lower: name == "llc",
        slice_count,
        policy: PolicyKind::TrueLru,
    }
}

struct Shape {
    name: &'static str,
    generation: u32,
    cores: usize,
    mode: InsertionMode,
    slices: usize,
    llc_sets: usize,
    llc_ways: usize,
    l2_sets: usize,
    l2_ways: usize,
}

const BUILT_INS: &[Shape] = &[
    Shape {
        name: "i7-4790",
        generation: 4,
        cores: 4,
        mode: InsertionMode::SetDueling,
        slices: 4,
        llc_sets: 2048,
        llc_ways: 16,
        l2_sets: 512,
        l2_ways: 8,
    },
    Shape {
        name: "i3-5010U",
        generation: 5,
        cores: 2,
        mode: InsertionMode::SetDueling,
        slices: 2,
        llc_sets: 2048,
        llc_ways: 12,
        l2_sets: 512,
        l2_ways: 8,
    },
    Shape {
        name: "i7-6700K",
        generation: 6,
        cores: 4,
        mode: InsertionMode::Mode1Fixed,
        slices: 8,
        llc_sets: 1024,
        llc_ways: 16,
        l2_sets: 1024,
        l2_ways: 4,
    },
    Shape {
        name: "i5-7600K",
        generation: 7,
        cores: 4,
        mode: InsertionMode::Mode1Fixed,
        slices: 4,
        llc_sets: 2048,
        llc_ways: 12,
        l2_sets: 1024,
        l2_ways: 4,
    },
    Shape {
        name: "i7-8650U",
        generation: 8,
        cores: 4,
        mode: InsertionMode::Mode1Fixed,
        slices: 8,
        llc_sets: 1024,
        llc_ways: 16,
        l2_sets: 1024,
        l2_ways: 4,
    },
    Shape {
        name: "generic",
        generation: 0,
        cores: 2,
        mode: InsertionMode::Mode1Fixed,
        slices: 1,
        llc_sets: 2048,
        llc_ways: 12,
        l2_sets: 1024,
        l2_ways: 4,
    },
];

impl MachineProfile {
    pub fn builtin_names() -> Vec<&'static str> {
        BUILT_INS.iter().map(|s| s.name).collect()
    }

    pub fn builtin(name: &str) -> Result<Self, ConfigError> {
        let shape = BUILT_INS
            .iter()
            .find(|s| s.name.eq_ignore_ascii_case(name))
            .ok_or_else(|| ConfigError::UnknownProfile(name.to_string()))?;
        let latency = Latencies::default();
        Ok(Self {
            name: shape.name.to_string(),
            generation: shape.generation,
            cores: shape.cores,
            insertion_mode: shape.mode,
            llc_policy: None,
            tuning: LlcPolicyTuning::default(),
            latency,
            ll_threshold: 60,
            mem_threshold: 300,
            l1: level("l1", 64, 8, latency.l1, 1),
            l2: level("l2", shape.l2_sets, shape.l2_ways, latency.l2, 1),
            llc: level(
                "llc",
                shape.llc_sets,
                shape.llc_ways,
                latency.llc,
                shape.slices,
            ),
        })
    }

    /// Resolve `name`: a path to a TOML file, a file in the profile directory,
    /// or a built-in.
    pub fn load(name: &str) -> Result<Self, ConfigError> {
        let as_path = Path::new(name);
        if name.ends_with(".toml") {
            return Self::from_file(as_path);
        }
        if let Some(dir) = std::env::var_os(PROFILE_DIR_ENV) {
            let candidate = PathBuf::from(dir).join(format!("{name}.toml"));
            if candidate.is_file() {
                return Self::from_file(&candidate);
            }
        }
        Self::builtin(name)
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text).map_err(|e| match e {
            ConfigError::Parse { reason, .. } => ConfigError::Parse {
                path: path.display().to_string(),
                reason,
            },
            other => other,
        })
    }

    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let profile: MachineProfile = toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: "<inline>".into(),
            reason: e.to_string(),
        })?;
        profile.validate()?;
        Ok(profile)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("profile serializes")
    }

    /// Hex SHA-256 of the canonical TOML form.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |reason: String| ConfigError::InvalidProfile {
            name: self.name.clone(),
            reason,
        };
        if self.cores == 0 {
            return Err(bad("at least one core is required".into()));
        }
        for lvl in [&self.l1, &self.l2, &self.llc] {
            if !lvl.sets.is_power_of_two() {
                return Err(bad(format!(
                    "{}: set count {} is not a power of two",
                    lvl.name, lvl.sets
                )));
            }
            if !lvl.slice_count.is_power_of_two() {
                return Err(bad(format!(
                    "{}: slice count {} is not a power of two",
                    lvl.name, lvl.slice_count
                )));
            }
            if lvl.ways == 0 || lvl.ways > 64 {
                return Err(bad(format!(
                    "{}: associativity {} outside 1..=64",
                    lvl.name, lvl.ways
                )));
            }
            if lvl.latency_cycles == 0 {
                return Err(bad(format!("{}: latency must be positive", lvl.name)));
            }
        }
        if self.l1.sliced() || self.l2.sliced() {
            return Err(bad("only the LLC may be sliced".into()));
        }
        if self.l1.inclusive_of_lower || self.l2.inclusive_of_lower || !self.llc.inclusive_of_lower
        {
            return Err(bad("exactly the LLC must be inclusive".into()));
        }
        let l = &self.latency;
        if self.l1.latency_cycles != l.l1
            || self.l2.latency_cycles != l.l2
            || self.llc.latency_cycles != l.llc
        {
            return Err(bad("level latencies disagree with the latency table".into()));
        }
        if !(l.l1 < l.l2 && l.l2 < l.llc && l.llc < l.memory) {
            return Err(bad("latencies must increase from L1 to memory".into()));
        }
        if !(l.l2 < self.ll_threshold && self.ll_threshold <= l.llc) {
            return Err(bad("ll_threshold must separate L2 from LLC latency".into()));
        }
        if !(l.llc < self.mem_threshold && self.mem_threshold <= l.memory) {
            return Err(bad(
                "mem_threshold must separate LLC from memory latency".into()
            ));
        }
        if self.tuning.psel_bits == 0 || self.tuning.psel_bits > 31 {
            return Err(bad("psel_bits must be in 1..=31".into()));
        }
        Ok(())
    }

    pub fn with_llc_policy(mut self, kind: PolicyKind) -> Self {
        self.llc_policy = Some(kind);
        self
    }

    pub fn with_insertion_mode(mut self, mode: InsertionMode) -> Self {
        self.insertion_mode = mode;
        self.llc_policy = None;
        self
    }

    pub fn llc_policy_kind(&self) -> PolicyKind {
        self.llc_policy
            .unwrap_or_else(|| self.insertion_mode.policy_kind())
    }

    pub fn llc_policy_config(&self, seed: u64) -> PolicyConfig {
        let mut cfg = PolicyConfig::new(self.llc_policy_kind()).with_seed(seed);
        cfg.aging = self.tuning.aging;
        cfg.hit_promotion = self.tuning.hit_promotion;
        cfg.psel_bits = self.tuning.psel_bits;
        cfg.leaders = self.tuning.leaders.clone();
        cfg
    }

    pub fn duels(&self) -> bool {
        self.llc_policy_kind().duels()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtins_validate() {
        for name in MachineProfile::builtin_names() {
            let p = MachineProfile::builtin(name).unwrap();
            p.validate().unwrap();
            assert!(p.latency.l1 < p.latency.l2 && p.latency.l2 < p.latency.llc);
        }
    }

    #[test]
    fn toml_round_trip() {
        let p = MachineProfile::builtin("i7-4790").unwrap();
        let back = MachineProfile::from_toml(&p.to_toml()).unwrap();
        assert_eq!(p, back);
        assert_eq!(p.hash(), back.hash());
    }

    #[test]
    fn unknown_policy_rejected_at_load() {
        let p = MachineProfile::builtin("generic").unwrap();
        let text = p.to_toml().replace("policy = \"lru\"", "policy = \"mru\"");
        assert!(matches!(
            MachineProfile::from_toml(&text),
            Err(ConfigError::Parse { .. })
        ));
    }

    #[test]
    fn bad_thresholds_rejected() {
        let mut p = MachineProfile::builtin("generic").unwrap();
        p.mem_threshold = 50;
        assert!(p.validate().is_err());
        let mut p = MachineProfile::builtin("generic").unwrap();
        p.llc.sets = 1000;
        assert!(p.validate().is_err());
    }

    #[test]
    fn modes_by_generation() {
        assert!(MachineProfile::builtin("i7-4790").unwrap().duels());
        assert!(MachineProfile::builtin("i3-5010U").unwrap().duels());
        for n in ["i7-6700K", "i5-7600K", "i7-8650U"] {
            let p = MachineProfile::builtin(n).unwrap();
            assert_eq!(p.llc_policy_kind(), PolicyKind::QuadAgeMode1);
        }
        assert!(MachineProfile::builtin("i9-9900K").is_err());
    }
}
