//! End-to-end runs: policy identification, leader location, and the AES and
//! RSA attack campaigns with their telemetry.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attack::{
    calibrate, congruent_lines, prepare_target, AttackAgent, AttackConfig, NoiseAgent, NoiseMode,
    Pacing, ProbeStyle, ReloadStyle, Sample, Target, Technique, Thresholds,
};
use crate::cache::Hierarchy;
use crate::error::{ConfigError, Result};
use crate::infer::{
    build_set_pair, candidate_pool, default_pool_size, locate_leader_sets, test_policy, LeaderMap,
    LeaderSearchConfig, PolicyModel, PolicyScore, Prober, TestPolicyConfig,
};
use crate::policy::{PolicyConfig, PolicyKind};
use crate::profile::MachineProfile;
use crate::sched::{periodic_series, run, Agent, RunConfig, RunReport};
use crate::telemetry::{steady_state, Scenario};
use crate::victim::aes::{
    AesTTable, AesVictim, EncryptionRecord, KeyRecoveryState, Lockstep, MonitoredLine, TableLayout,
};
use crate::victim::rsa::{
    decode_exponent, random_exponent, resolution_warning, sqm_ops, CodeLayout, DecodeConfig,
    LeadingBit, MultiplyStats, Observation, OpCosts, OpRecord, RsaVictim, TimingModel,
};

/// First tag of the attacker's candidate pools. Far above every victim
/// region's tags, for every built-in geometry.
pub const POOL_FIRST_TAG: u64 = 0x10_000;
/// First tag for noise lines.
pub const NOISE_FIRST_TAG: u64 = 0x40_000;

pub const ATTACKER_CORE: usize = 0;
pub const VICTIM_CORE: usize = 1;
pub const NOISE_CORE: usize = 2;

/// Cycles per sample of the periodic miss series.
pub const SERIES_PERIOD: u64 = 100_000;

/// Accuracy of one candidate model against the machine.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolicyRow {
    pub model: PolicyKind,
    pub score: PolicyScore,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PolicyInference {
    pub trials: usize,
    pub seed: u64,
    /// Uniform timing noise of up to this many cycles either way.
    pub jitter: u64,
    /// LLC set index the experiment runs in.
    pub set_index: u64,
}

impl Default for PolicyInference {
    fn default() -> Self {
        Self {
            trials: 1000,
            seed: 0,
            jitter: 0,
            set_index: 37,
        }
    }
}

/// Score every model in `models` against a machine built from `profile`.
pub fn infer_policies(
    profile: &MachineProfile,
    models: &[PolicyKind],
    cfg: &PolicyInference,
) -> Result<Vec<PolicyRow>> {
    let mut h = Hierarchy::new(profile, cfg.seed);
    let ways = profile.llc.ways;
    let base = profile.llc_policy_config(cfg.seed);
    let mut p = Prober::new(&mut h, ATTACKER_CORE, cfg.seed ^ 0x5eed).with_jitter(cfg.jitter);
    let pool = candidate_pool(
        p.hierarchy(),
        cfg.set_index,
        POOL_FIRST_TAG,
        default_pool_size(&p),
    );
    let pair = build_set_pair(&mut p, pool[0], &pool[1..])?;
    let id = p.hierarchy().llc_set_of(pair.evset.0[0]);
    let mut rows = Vec::with_capacity(models.len());
    for &kind in models {
        let config = PolicyConfig {
            kind,
            ..base.clone()
        };
        let mut model = PolicyModel::new(&config, ways, id);
        let test = TestPolicyConfig {
            trials: cfg.trials,
            seed: cfg.seed,
            ..TestPolicyConfig::default()
        };
        let score = test_policy(&mut p, &pair, &mut model, &test)?;
        rows.push(PolicyRow { model: kind, score });
    }
    Ok(rows)
}

/// Find the leader sets of a dueling machine.
pub fn locate_leaders(profile: &MachineProfile, seed: u64) -> Result<LeaderMap> {
    let mut h = Hierarchy::new(profile, seed);
    let mut p = Prober::new(&mut h, ATTACKER_CORE, seed ^ 0x5eed);
    let cfg = LeaderSearchConfig {
        seed,
        ..LeaderSearchConfig::default()
    };
    Ok(locate_leader_sets(&mut p, &cfg)?)
}

/// AES key drawn from `seed`.
pub fn random_key(seed: u64) -> [u8; 16] {
    let mut key = [0u8; 16];
    ChaCha8Rng::seed_from_u64(seed).fill_bytes(&mut key);
    key
}

/// Third-party noise in the monitored sets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    /// Distinct lines per monitored set.
    pub lines: usize,
    /// Chance of one access per lockstep window.
    pub probability: f64,
}

#[derive(Debug, Clone)]
pub struct AesCampaign {
    pub profile: MachineProfile,
    pub scenario: Scenario,
    pub encryptions: u64,
    pub key: [u8; 16],
    pub seed: u64,
    pub reload_style: ReloadStyle,
    pub probe_style: ProbeStyle,
    pub target_slot: usize,
    pub monitored: Vec<MonitoredLine>,
    pub noise: Option<NoiseSpec>,
    pub trace: bool,
}

impl AesCampaign {
    pub fn new(
        profile: MachineProfile,
        scenario: Scenario,
        encryptions: u64,
        key: [u8; 16],
        seed: u64,
    ) -> Self {
        Self {
            profile,
            scenario,
            encryptions,
            key,
            seed,
            reload_style: ReloadStyle::Verbatim,
            probe_style: ProbeStyle::Alternating,
            target_slot: 0,
            monitored: crate::victim::aes::one_line_per_table(),
            noise: None,
            trace: false,
        }
    }

    fn attack_config(&self, technique: Technique) -> AttackConfig {
        // Insertion at age 3 leaves nothing to refresh: use the variant that
        // watches the attacker's own first line instead.
        let mode2_variant = technique == Technique::ReloadRefresh
            && self.profile.llc_policy_kind() == PolicyKind::QuadAgeMode2;
        let mut go = vec![0];
        let mut done = vec![1];
        if self.noise.is_some() {
            go.push(2);
            done.push(3);
        }
        AttackConfig {
            technique,
            target_slot: self.target_slot,
            reload_style: self.reload_style,
            probe_style: self.probe_style,
            mode2_variant,
            pacing: Pacing::Lockstep { go, done },
            ..AttackConfig::default()
        }
    }

    pub fn run(&self) -> Result<AesOutcome> {
        let profile = &self.profile;
        if self.noise.is_some() && profile.cores <= NOISE_CORE {
            return Err(ConfigError::InvalidParameter(format!(
                "noise needs a third core; {} has {}",
                profile.name, profile.cores
            ))
            .into());
        }
        let layout = TableLayout::default();
        let mut h = Hierarchy::new(profile, self.seed);
        let cipher = AesTTable::new(self.key, layout);
        let mut victim = AesVictim::new(VICTIM_CORE, cipher, self.encryptions, self.seed ^ 0xae5);

        let Some(technique) = self.scenario.technique() else {
            let report = run(&mut h, &mut [&mut victim], &self.run_config())?;
            return Ok(AesOutcome {
                digest: h.digest(),
                records: victim.records,
                samples: Vec::new(),
                thresholds: None,
                targets: Vec::new(),
                report,
                noisy_rounds: Vec::new(),
            });
        };

        let mut targets = Vec::with_capacity(self.monitored.len());
        for (i, m) in self.monitored.iter().enumerate() {
            let line = layout.line_address(m.table, m.line);
            targets.push(prepare_target(
                &mut h,
                ATTACKER_CORE,
                line,
                POOL_FIRST_TAG,
                self.seed + i as u64,
            )?);
        }
        // The run starts cold so a trace of it replays from a fresh hierarchy.
        h = Hierarchy::new(profile, self.seed);
        let config = self.attack_config(technique);
        let thresholds = calibrate(
            profile,
            &config,
            &targets,
            ATTACKER_CORE,
            VICTIM_CORE,
            self.seed,
        )?;
        let mut attacker =
            AttackAgent::new(ATTACKER_CORE, &config, targets.clone(), thresholds, profile)?
                .with_rounds(self.encryptions + 1);
        victim = victim.with_lockstep(Lockstep { go: 0, done: 1 });

        let report;
        let mut noisy_rounds = Vec::new();
        if let Some(spec) = self.noise {
            let lines: Vec<u64> = targets
                .iter()
                .flat_map(|t| congruent_lines(&h, t.line, NOISE_FIRST_TAG, spec.lines))
                .collect();
            let mut noise = NoiseAgent::new(
                NOISE_CORE,
                lines,
                NoiseMode::Lockstep {
                    go: 2,
                    done: 3,
                    probability: spec.probability,
                    rounds: self.encryptions,
                },
                self.seed ^ 0x401,
            );
            report = run(
                &mut h,
                &mut [&mut victim, &mut attacker, &mut noise],
                &self.run_config(),
            )?;
            noisy_rounds = noise.noisy_rounds;
        } else {
            report = run(
                &mut h,
                &mut [&mut victim, &mut attacker],
                &self.run_config(),
            )?;
        }
        Ok(AesOutcome {
            digest: h.digest(),
            records: victim.records,
            samples: attacker.samples,
            thresholds: Some(thresholds),
            targets,
            report,
            noisy_rounds,
        })
    }

    fn run_config(&self) -> RunConfig {
        RunConfig {
            seed: self.seed,
            trace: self.trace,
            ..RunConfig::default()
        }
    }
}

#[derive(Debug, Clone)]
pub struct AesOutcome {
    pub records: Vec<EncryptionRecord>,
    pub samples: Vec<Sample>,
    pub thresholds: Option<Thresholds>,
    pub targets: Vec<Target>,
    /// Agent 0 is the victim, 1 the attacker, 2 the noise agent.
    pub report: RunReport,
    pub noisy_rounds: Vec<bool>,
    pub digest: String,
}

impl AesOutcome {
    /// Verdicts about encryption `k`, one per monitored line. They come from
    /// the round after the encryption.
    pub fn verdicts(&self, k: usize, monitors: usize) -> Vec<bool> {
        let start = (k + 1) * monitors;
        self.samples[start..start + monitors]
            .iter()
            .map(|s| s.verdict.accessed())
            .collect()
    }

    /// Fraction of verdicts that match the lines each encryption touched.
    pub fn verdict_accuracy(&self, monitored: &[MonitoredLine]) -> f64 {
        let mut right = 0usize;
        let mut total = 0usize;
        for (k, r) in self.records.iter().enumerate() {
            for (v, m) in self.verdicts(k, monitored.len()).iter().zip(monitored) {
                right += (*v == r.touched_line(m.table, m.line)) as usize;
                total += 1;
            }
        }
        if total == 0 {
            0.0
        } else {
            right as f64 / total as f64
        }
    }

    /// Counting attack over the first `limit` encryptions.
    pub fn recover(&self, monitored: &[MonitoredLine], limit: usize) -> KeyRecoveryState {
        let mut st = KeyRecoveryState::new(monitored.to_vec());
        for (k, r) in self.records.iter().enumerate().take(limit) {
            st.observe(&r.ciphertext, &self.verdicts(k, monitored.len()));
        }
        st
    }

    /// Records after the first `warmup` encryptions.
    pub fn steady(&self, warmup: usize) -> &[EncryptionRecord] {
        &self.records[warmup.min(self.records.len())..]
    }

    pub fn misses(&self, warmup: usize) -> Vec<u64> {
        self.steady(warmup).iter().map(|r| r.misses).collect()
    }

    pub fn cycles(&self, warmup: usize) -> Vec<u64> {
        self.steady(warmup).iter().map(|r| r.cycles).collect()
    }
}

/// How the RSA attacker spaces its rounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RsaPacing {
    Cadence,
    Gap,
}

#[derive(Debug, Clone)]
pub struct RsaCampaign {
    pub profile: MachineProfile,
    pub scenario: Scenario,
    pub bits: usize,
    pub exponent_seed: u64,
    pub seed: u64,
    pub pacing: RsaPacing,
    pub sampling_period: u64,
    pub reload_style: ReloadStyle,
    pub costs: OpCosts,
    pub leading: LeadingBit,
    pub trace: bool,
}

impl RsaCampaign {
    pub fn new(profile: MachineProfile, scenario: Scenario, bits: usize, seed: u64) -> Self {
        Self {
            profile,
            scenario,
            bits,
            exponent_seed: seed ^ 0xe5,
            seed,
            pacing: RsaPacing::Cadence,
            sampling_period: 3000,
            reload_style: ReloadStyle::Conditional,
            costs: OpCosts::default(),
            leading: LeadingBit::Process,
            trace: false,
        }
    }

    pub fn run(&self) -> Result<RsaOutcome> {
        let profile = &self.profile;
        let exponent = random_exponent(self.bits, self.exponent_seed);
        let layout = CodeLayout::default();
        let mut h = Hierarchy::new(profile, self.seed);
        let mut victim = RsaVictim::new(VICTIM_CORE, &exponent, self.leading)
            .with_costs(self.costs)
            .with_layout(layout);
        let run_config = RunConfig {
            seed: self.seed,
            stop_after: Some(0),
            trace: self.trace,
            ..RunConfig::default()
        };
        let mut samples = Vec::new();
        let mut thresholds = None;
        let report = match self.scenario.technique() {
            None => run(&mut h, &mut [&mut victim], &run_config)?,
            Some(technique) => {
                let target = prepare_target(
                    &mut h,
                    ATTACKER_CORE,
                    layout.multiply,
                    POOL_FIRST_TAG,
                    self.seed,
                )?;
                h = Hierarchy::new(profile, self.seed);
                let config = AttackConfig {
                    technique,
                    sampling_period: self.sampling_period,
                    reload_style: self.reload_style,
                    pacing: match self.pacing {
                        RsaPacing::Cadence => Pacing::Cadence,
                        RsaPacing::Gap => Pacing::Gap,
                    },
                    ..AttackConfig::default()
                };
                let th = calibrate(
                    profile,
                    &config,
                    std::slice::from_ref(&target),
                    ATTACKER_CORE,
                    VICTIM_CORE,
                    self.seed,
                )?;
                thresholds = Some(th);
                let mut attacker =
                    AttackAgent::new(ATTACKER_CORE, &config, vec![target], th, profile)?;
                let agents: &mut [&mut dyn Agent] = &mut [&mut victim, &mut attacker];
                let report = run(&mut h, agents, &run_config)?;
                samples = attacker.samples;
                report
            }
        };
        let start = victim.start_cycle().unwrap_or(0);
        Ok(RsaOutcome {
            multiply_times: victim.multiply_times(),
            log: victim.log.clone(),
            start,
            end: report.end_cycle,
            exponent,
            samples,
            thresholds,
            digest: h.digest(),
            report,
            leading: self.leading,
            costs: self.costs,
            profile: profile.clone(),
            sampling_period: self.sampling_period,
            technique: self.scenario.technique(),
        })
    }
}

#[derive(Debug, Clone)]
pub struct RsaOutcome {
    pub exponent: Vec<bool>,
    pub multiply_times: Vec<u64>,
    /// Every operation the victim issued, with its cycle.
    pub log: Vec<OpRecord>,
    /// Cycle of the first square.
    pub start: u64,
    pub end: u64,
    pub samples: Vec<Sample>,
    pub thresholds: Option<Thresholds>,
    /// Agent 0 is the victim, 1 the attacker.
    pub report: RunReport,
    pub digest: String,
    pub leading: LeadingBit,
    pub costs: OpCosts,
    pub profile: MachineProfile,
    pub sampling_period: u64,
    pub technique: Option<Technique>,
}

/// Exponent recovered from one RSA run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RsaRecovery {
    pub bits: Vec<bool>,
    pub bit_accuracy: f64,
    pub stats: MultiplyStats,
    pub warning: Option<String>,
}

impl RsaOutcome {
    /// Samples as the decoder sees them. FLUSH+RELOAD leaves the line out of
    /// the cache for the whole window; the reload of the other techniques
    /// only between the round start and the decisive read.
    pub fn observations(&self) -> Vec<Observation> {
        let mut previous = 0;
        self.samples
            .iter()
            .map(|s| {
                let absent_since = if self.technique == Some(Technique::FlushReload) {
                    previous
                } else {
                    s.cycle
                };
                previous = s.observed;
                Observation {
                    cycle: s.observed,
                    accessed: s.verdict.accessed(),
                    absent_since,
                }
            })
            .collect()
    }

    pub fn timing_model(&self) -> TimingModel {
        TimingModel::from_costs(&self.costs, &self.profile.latency)
    }

    pub fn recover(&self) -> RsaRecovery {
        let obs = self.observations();
        let model = self.timing_model();
        let bits = decode_exponent(
            &obs,
            self.start,
            self.exponent.len(),
            &model,
            &DecodeConfig {
                leading: self.leading,
                ..DecodeConfig::default()
            },
        );
        RsaRecovery {
            bit_accuracy: crate::victim::rsa::bit_accuracy(&self.exponent, &bits),
            bits,
            stats: MultiplyStats::compute(&self.multiply_times, &obs, self.start, self.end),
            warning: resolution_warning(self.sampling_period, &model),
        }
    }

    /// Victim LLC misses per [`SERIES_PERIOD`] cycles from cycle 0.
    pub fn miss_series(&self) -> Vec<u64> {
        periodic_series(
            &self.report.agents[0].miss_times,
            SERIES_PERIOD,
            0,
            self.end,
        )
    }

    /// Mean of the series once the cold start is over: periods up to and
    /// including the one where the first square ran are skipped.
    pub fn steady_mean(&self) -> f64 {
        let series = self.miss_series();
        let skip = (self.start / SERIES_PERIOD) as usize + 1;
        crate::telemetry::mean(steady_state(&series, skip))
    }

    /// Operations the exponent implies, for cross-checking the victim log.
    pub fn expected_ops(&self) -> usize {
        sqm_ops(&self.exponent, self.leading).len()
    }
}

/// Experiments the harness knows how to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    PolicyInfer,
    LeaderLocate,
    AttackAes,
    AttackRsa,
    Telemetry,
    TraceReplay,
}

/// Everything needed to rerun an experiment exactly. Written before any
/// other artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub experiment: ExperimentKind,
    pub profile: String,
    /// Hash of the resolved profile, so edits to a profile file show up.
    pub profile_hash: String,
    pub seed: u64,
    /// Remaining parameters by flag name.
    pub parameters: std::collections::BTreeMap<String, String>,
    pub tool_version: String,
    pub trace_version: u32,
}

impl Manifest {
    pub fn new(experiment: ExperimentKind, profile: &MachineProfile, seed: u64) -> Self {
        Self {
            experiment,
            profile: profile.name.clone(),
            profile_hash: profile.hash(),
            seed,
            parameters: Default::default(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            trace_version: crate::replay::TRACE_VERSION,
        }
    }

    pub fn with(mut self, key: &str, value: impl ToString) -> Self {
        self.parameters.insert(key.into(), value.to_string());
        self
    }
}
