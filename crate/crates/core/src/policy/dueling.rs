use serde::{Deserialize, Serialize};

use super::SetId;

/// The two competing insertion behaviors of a dueling policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DuelArm {
    /// Quad-age mode 1, or SRRIP for DRRIP.
    First,
    /// Quad-age mode 2, or BRRIP for DRRIP.
    Second,
}

/// A run of leader sets dedicated to one arm.
///
/// `slice: None` applies the run to every slice. A per-slice run of length one
/// models parts where only a single set per slice is pinned.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LeaderRegion {
    pub arm: DuelArm,
    pub start: u32,
    pub len: u32,
    #[serde(default)]
    pub slice: Option<u32>,
}

impl LeaderRegion {
    pub fn new(arm: DuelArm, start: u32, len: u32) -> Self {
        Self {
            arm,
            start,
            len,
            slice: None,
        }
    }

    /// Two 64-set regions per slice, at 512 for the first arm and 768 for the second.
    pub fn default_layout() -> Vec<LeaderRegion> {
        vec![
            LeaderRegion::new(DuelArm::First, 512, 64),
            LeaderRegion::new(DuelArm::Second, 768, 64),
        ]
    }

    #[inline]
    pub fn contains(&self, id: SetId) -> bool {
        self.slice.is_none_or(|s| s == id.slice)
            && id.index >= self.start
            && id.index < self.start + self.len
    }
}

/// Leader map plus the saturating selection counter.
///
/// Misses in first-arm leaders push the counter up, misses in second-arm
/// leaders push it down, and followers take the second arm once the counter
/// is above its midpoint.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DuelingSelector {
    leaders: Vec<LeaderRegion>,
    max: u32,
    psel: u32,
}

impl DuelingSelector {
    pub fn new(leaders: Vec<LeaderRegion>, bits: u32) -> Self {
        assert!((1..=31).contains(&bits), "psel width {bits} out of range");
        let max = (1u32 << bits) - 1;
        Self {
            leaders,
            max,
            psel: max.div_ceil(2),
        }
    }

    pub fn midpoint(&self) -> u32 {
        self.max.div_ceil(2)
    }

    pub fn max(&self) -> u32 {
        self.max
    }

    pub fn psel(&self) -> u32 {
        self.psel
    }

    pub fn set_psel(&mut self, value: u32) {
        self.psel = value.min(self.max);
    }

    pub fn leaders(&self) -> &[LeaderRegion] {
        &self.leaders
    }

    pub fn leader_arm(&self, id: SetId) -> Option<DuelArm> {
        self.leaders.iter().find(|r| r.contains(id)).map(|r| r.arm)
    }

    pub fn arm_for(&self, id: SetId) -> DuelArm {
        self.leader_arm(id)
            .unwrap_or(if self.psel > self.midpoint() {
                DuelArm::Second
            } else {
                DuelArm::First
            })
    }

    pub fn record_miss(&mut self, id: SetId) {
        match self.leader_arm(id) {
            Some(DuelArm::First) => self.psel = (self.psel + 1).min(self.max),
            Some(DuelArm::Second) => self.psel = self.psel.saturating_sub(1),
            None => {}
        }
    }
}
