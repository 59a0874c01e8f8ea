//! Detectability statistics: per-run histograms, means and periodic miss
//! series.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attack::Technique;
use crate::error::ConfigError;

/// Who, if anyone, attacks the victim.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Scenario {
    NoAttack,
    Attack(Technique),
}

impl Scenario {
    pub const ALL: [Scenario; 4] = [
        Scenario::NoAttack,
        Scenario::Attack(Technique::ReloadRefresh),
        Scenario::Attack(Technique::FlushReload),
        Scenario::Attack(Technique::PrimeProbe),
    ];

    pub fn label(self) -> &'static str {
        match self {
            Scenario::NoAttack => "none",
            Scenario::Attack(t) => t.short_name(),
        }
    }

    pub fn technique(self) -> Option<Technique> {
        match self {
            Scenario::NoAttack => None,
            Scenario::Attack(t) => Some(t),
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Scenario {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, ConfigError> {
        match s {
            "none" => Ok(Scenario::NoAttack),
            other => other.parse().map(Scenario::Attack),
        }
    }
}

/// Histogram over non-negative integer values with fixed-width bins.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Histogram {
    pub bin_width: u64,
    /// Lower edge of each bin.
    pub edges: Vec<u64>,
    pub counts: Vec<u64>,
}

impl Histogram {
    pub fn new(values: &[u64], bin_width: u64) -> Self {
        assert!(bin_width > 0, "bin width must be positive");
        let bins = values
            .iter()
            .max()
            .map_or(0, |&m| (m / bin_width + 1) as usize);
        let mut counts = vec![0u64; bins];
        for &v in values {
            counts[(v / bin_width) as usize] += 1;
        }
        Self {
            bin_width,
            edges: (0..bins as u64).map(|b| b * bin_width).collect(),
            counts,
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn percentages(&self) -> Vec<f64> {
        let total = self.total();
        self.counts
            .iter()
            .map(|&c| {
                if total == 0 {
                    0.0
                } else {
                    100.0 * c as f64 / total as f64
                }
            })
            .collect()
    }

    /// Percentage of samples in the bin holding `value`.
    pub fn percent_at(&self, value: u64) -> f64 {
        let bin = (value / self.bin_width) as usize;
        self.percentages().get(bin).copied().unwrap_or(0.0)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["bin_start", "count", "percent"])?;
        for ((e, c), p) in self.edges.iter().zip(&self.counts).zip(self.percentages()) {
            w.write_record([e.to_string(), c.to_string(), format!("{p:.4}")])?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn mean(values: &[u64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.iter().sum::<u64>() as f64 / values.len() as f64
}

/// Summary of one scenario's per-run counts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub runs: usize,
    pub zero_fraction: f64,
    pub mean_misses: f64,
    pub mean_cycles: f64,
}

impl Summary {
    pub fn new(misses: &[u64], cycles: &[u64]) -> Self {
        let zero = misses.iter().filter(|&&m| m == 0).count();
        Self {
            runs: misses.len(),
            zero_fraction: if misses.is_empty() {
                0.0
            } else {
                zero as f64 / misses.len() as f64
            },
            mean_misses: mean(misses),
            mean_cycles: mean(cycles),
        }
    }
}

/// Periods of a miss series after the process has settled: the first
/// `skip` periods are dropped, and the last one too since it is partial.
pub fn steady_state(series: &[u64], skip: usize) -> &[u64] {
    let end = series.len().saturating_sub(1);
    if skip >= end {
        return &[];
    }
    &series[skip..end]
}

pub fn write_series_csv<W: Write>(series: &[u64], period: u64, out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["period_start", "misses"])?;
    for (k, m) in series.iter().enumerate() {
        w.write_record([(k as u64 * period).to_string(), m.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Sidecar describing where a CSV came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub scenario: String,
    pub seed: u64,
    pub profile: String,
    pub description: String,
}
