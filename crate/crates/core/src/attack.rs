//! RELOAD+REFRESH and the FLUSH+RELOAD and PRIME+PROBE baselines, written as
//! scheduler agents.
//!
//! One [`AttackAgent`] monitors any number of targets. Each round visits the
//! targets in order, produces one [`Sample`] per target and then paces itself
//! until the next round.

use std::collections::VecDeque;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cache::Hierarchy;
use crate::error::{ConfigError, InferenceError, Result};
use crate::infer::{build_set_pair, candidate_pool, default_pool_size, Prober};
use crate::profile::MachineProfile;
use crate::sched::{run, Agent, Channel, Event, Response, RunConfig, Script};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Technique {
    ReloadRefresh,
    FlushReload,
    PrimeProbe,
}

impl Technique {
    pub fn short_name(self) -> &'static str {
        match self {
            Technique::ReloadRefresh => "rr",
            Technique::FlushReload => "fr",
            Technique::PrimeProbe => "pp",
        }
    }
}

impl Technique {
    /// Name as used in result tables.
    pub fn table_name(self) -> &'static str {
        match self {
            Technique::ReloadRefresh => "R+R",
            Technique::FlushReload => "F+R",
            Technique::PrimeProbe => "P+P",
        }
    }
}

impl fmt::Display for Technique {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short_name())
    }
}

impl FromStr for Technique {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, ConfigError> {
        match s {
            "rr" => Ok(Technique::ReloadRefresh),
            "fr" => Ok(Technique::FlushReload),
            "pp" => Ok(Technique::PrimeProbe),
            _ => Err(ConfigError::InvalidParameter(format!(
                "unknown technique `{s}`"
            ))),
        }
    }
}

/// How RELOAD+REFRESH reloads the target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum ReloadStyle {
    /// Read, flush, read the target every round; the verdict comes from the
    /// duration of the whole reload.
    #[default]
    Verbatim,
    /// Time one target read. A miss has already put the target back, so the
    /// flush and second read run only after a hit.
    Conditional,
}

/// How PRIME+PROBE walks the eviction set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum ProbeStyle {
    /// One timed pass per round, direction flipping each time, so every
    /// probe is also the next prime.
    #[default]
    Alternating,
    /// A timed backward probe followed by an untimed forward prime.
    Reprime,
}

/// What happens between rounds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Pacing {
    /// Start a round every sampling period (or at once if late).
    Cadence,
    /// Wait one sampling period after each round.
    Gap,
    /// Signal every `go` channel, then wait for every `done` channel.
    Lockstep {
        go: Vec<Channel>,
        done: Vec<Channel>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub technique: Technique,
    pub sampling_period: u64,
    /// Position of the target in the fill order: 0, or 1 for noise tolerance.
    pub target_slot: usize,
    /// RELOAD+REFRESH without shared memory, for insertion at age 3.
    pub mode2_variant: bool,
    pub reload_style: ReloadStyle,
    pub probe_style: ProbeStyle,
    pub pacing: Pacing,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            technique: Technique::ReloadRefresh,
            sampling_period: 3000,
            target_slot: 0,
            mode2_variant: false,
            reload_style: ReloadStyle::Verbatim,
            probe_style: ProbeStyle::Alternating,
            pacing: Pacing::Gap,
        }
    }
}

impl AttackConfig {
    pub fn new(technique: Technique) -> Self {
        Self {
            technique,
            ..Self::default()
        }
    }

    pub fn with_pacing(mut self, pacing: Pacing) -> Self {
        self.pacing = pacing;
        self
    }

    pub fn validate(&self, ways: usize, targets: &[Target]) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::InvalidParameter(m));
        if self.sampling_period == 0 {
            return bad("sampling period must be positive".into());
        }
        if self.target_slot > 1 {
            return bad(format!("target slot {} is not 0 or 1", self.target_slot));
        }
        if targets.is_empty() {
            return bad("no targets to monitor".into());
        }
        for t in targets {
            if t.evset.len() != ways {
                return bad(format!(
                    "eviction set has {} lines, the LLC has {ways} ways",
                    t.evset.len()
                ));
            }
            if self.strategy() == Strategy::NoiseTolerant && t.conflict.is_empty() {
                return bad("noise-tolerant placement needs a spare conflicting line".into());
            }
        }
        Ok(())
    }

    pub fn strategy(&self) -> Strategy {
        match self.technique {
            Technique::FlushReload => Strategy::FlushReload,
            Technique::PrimeProbe => Strategy::PrimeProbe,
            Technique::ReloadRefresh if self.mode2_variant => Strategy::Mode2,
            Technique::ReloadRefresh if self.target_slot == 1 => Strategy::NoiseTolerant,
            Technique::ReloadRefresh => match self.reload_style {
                ReloadStyle::Verbatim => Strategy::Standard,
                ReloadStyle::Conditional => Strategy::Conditional,
            },
        }
    }
}

/// Round procedure actually executed, resolved from an [`AttackConfig`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Strategy {
    Standard,
    Conditional,
    NoiseTolerant,
    Mode2,
    FlushReload,
    PrimeProbe,
}

/// One monitored line with the attacker's lines for its set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Target {
    /// Victim line. Never read by the mode-2 and PRIME+PROBE rounds, which
    /// only need its set.
    pub line: u64,
    /// `w` attacker lines congruent with `line`.
    pub evset: Vec<u64>,
    /// Further congruent attacker lines.
    pub conflict: Vec<u64>,
}

/// Build a target's eviction set and conflicting lines through timing alone.
///
/// Candidates share the target's set index and have consecutive tags from
/// `first_tag`, so they must not overlap the victim's own memory.
pub fn prepare_target(
    h: &mut Hierarchy,
    core: usize,
    line: u64,
    first_tag: u64,
    seed: u64,
) -> Result<Target, InferenceError> {
    let set_index = h.llc().geometry().set_index(line);
    let mut p = Prober::new(h, core, seed);
    let pool = candidate_pool(p.hierarchy(), set_index, first_tag, default_pool_size(&p));
    let pair = build_set_pair(&mut p, line, &pool)?;
    Ok(Target {
        line,
        evset: pair.evset.0,
        conflict: pair.cset.0.into_iter().filter(|&a| a != line).collect(),
    })
}

/// `count` lines sharing `line`'s LLC set and slice, read off the slice hash.
pub fn congruent_lines(h: &Hierarchy, line: u64, first_tag: u64, count: usize) -> Vec<u64> {
    let g = h.llc().geometry();
    let set_index = g.set_index(line);
    let slice = g.slice_of_tag(g.tag(line));
    (first_tag..)
        .filter(|&t| g.slice_of_tag(t) == slice && t != g.tag(line))
        .take(count)
        .map(|t| g.line_address(t, set_index))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    Accessed,
    NotAccessed,
}

impl Verdict {
    pub fn accessed(self) -> bool {
        self == Verdict::Accessed
    }

    pub fn label(self) -> &'static str {
        match self {
            Verdict::Accessed => "accessed",
            Verdict::NotAccessed => "idle",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub round: u64,
    pub monitor: usize,
    /// Start of this target's reload (or probe).
    pub cycle: u64,
    /// Issue of the access that decides the verdict. Victim accesses before
    /// this point show up in this sample, later ones in a later sample.
    pub observed: u64,
    /// Reload duration; probe duration for PRIME+PROBE; the single timed
    /// read for the conditional, noise-tolerant and mode-2 rounds.
    pub reload_time: u64,
    pub refresh_time: u64,
    pub verdict: Verdict,
    /// Someone else used the set: the refresh took too long, or missed.
    pub flagged: bool,
}

pub fn write_samples_csv<W: Write>(samples: &[Sample], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "round",
        "monitor",
        "cycle",
        "reload_time",
        "refresh_time",
        "verdict",
        "flagged",
    ])?;
    for s in samples {
        w.write_record([
            s.round.to_string(),
            s.monitor.to_string(),
            s.cycle.to_string(),
            s.reload_time.to_string(),
            s.refresh_time.to_string(),
            s.verdict.label().to_string(),
            s.flagged.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Verdict cut-offs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Thresholds {
    /// Verbatim reload: shorter means accessed.
    pub reload: u64,
    /// Single timed read: below means the line was cached.
    pub latency: u64,
    /// Probe duration per traversal direction (backward, forward): above
    /// means accessed.
    pub probe: [u64; 2],
    /// Refresh durations above this mean someone else used the set.
    pub refresh_bound: u64,
}

impl Thresholds {
    /// Values derived from the profile's latencies alone.
    pub fn nominal(profile: &MachineProfile) -> Self {
        let lat = &profile.latency;
        let w = profile.llc.ways as u64;
        Self {
            reload: 2 * lat.memory + 2 * lat.flush + (lat.memory + lat.llc) / 2,
            latency: profile.mem_threshold,
            probe: [w * lat.llc + (lat.memory - lat.llc); 2],
            refresh_bound: w.saturating_sub(2) * lat.llc + (lat.memory - lat.llc) / 2,
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Stage {
    Setup,
    Step { monitor: usize, step: u8 },
    Pace,
    Done,
}

#[derive(Debug, Clone, Copy, Default)]
struct Partial {
    cycle: u64,
    observed: u64,
    latency: u64,
}

/// Attacker agent running one strategy over a list of targets.
#[derive(Debug)]
pub struct AttackAgent {
    core: usize,
    strategy: Strategy,
    pacing: Pacing,
    period: u64,
    targets: Vec<Target>,
    thresholds: Thresholds,
    ll_threshold: u64,
    script: Script,
    stage: Stage,
    round: u64,
    max_rounds: Option<u64>,
    round_start: u64,
    /// PRIME+PROBE: next traversal runs forward.
    forward: Vec<bool>,
    probe_style: ProbeStyle,
    partial: Partial,
    pub samples: Vec<Sample>,
}

impl AttackAgent {
    pub fn new(
        core: usize,
        config: &AttackConfig,
        targets: Vec<Target>,
        thresholds: Thresholds,
        profile: &MachineProfile,
    ) -> Result<Self, ConfigError> {
        config.validate(profile.llc.ways, &targets)?;
        Ok(Self {
            core,
            strategy: config.strategy(),
            pacing: config.pacing.clone(),
            period: config.sampling_period,
            forward: vec![false; targets.len()],
            probe_style: config.probe_style,
            targets,
            thresholds,
            ll_threshold: profile.ll_threshold,
            script: Script::new(),
            stage: Stage::Setup,
            round: 0,
            max_rounds: None,
            round_start: 0,
            partial: Partial::default(),
            samples: Vec::new(),
        })
    }

    /// Stop after this many rounds. Lockstep pacing is skipped after the last.
    pub fn with_rounds(mut self, rounds: u64) -> Self {
        self.max_rounds = Some(rounds);
        self
    }

    pub fn strategy(&self) -> Strategy {
        self.strategy
    }

    pub fn targets(&self) -> &[Target] {
        &self.targets
    }

    pub fn thresholds(&self) -> &Thresholds {
        &self.thresholds
    }

    /// Samples of one target, in round order.
    pub fn samples_of(&self, monitor: usize) -> impl Iterator<Item = &Sample> + '_ {
        self.samples.iter().filter(move |s| s.monitor == monitor)
    }

    /// Lines in the order the set is filled for `target`.
    fn fill_order(&self, t: &Target) -> Vec<u64> {
        let w = t.evset.len();
        match self.strategy {
            Strategy::Standard | Strategy::Conditional => std::iter::once(t.line)
                .chain(t.evset[..w - 1].iter().copied())
                .collect(),
            Strategy::NoiseTolerant => std::iter::once(t.evset[0])
                .chain([t.line])
                .chain(t.evset[1..w - 1].iter().copied())
                .collect(),
            Strategy::Mode2 | Strategy::PrimeProbe => t.evset.clone(),
            Strategy::FlushReload => Vec::new(),
        }
    }

    /// Fill, flush everything, refill in order: every line lands in the way
    /// matching its position, with the insertion age.
    fn push_initialize(&mut self, order: &[u64]) {
        for &a in order {
            self.script.read(a);
        }
        for &a in order {
            self.script.flush(a);
        }
        for &a in order {
            self.script.read(a);
        }
    }

    fn push_setup(&mut self) {
        for m in 0..self.targets.len() {
            let t = self.targets[m].clone();
            match self.strategy {
                Strategy::FlushReload => {
                    self.script.flush(t.line);
                }
                Strategy::PrimeProbe => {
                    for &a in &t.evset {
                        self.script.read(a);
                    }
                }
                _ => {
                    let order = self.fill_order(&t);
                    self.push_initialize(&order);
                }
            }
        }
    }

    fn finish(
        &mut self,
        monitor: usize,
        reload_time: u64,
        refresh_time: u64,
        verdict: Verdict,
        flagged: bool,
    ) {
        self.samples.push(Sample {
            round: self.round,
            monitor,
            cycle: self.partial.cycle,
            observed: self.partial.observed,
            reload_time,
            refresh_time,
            verdict,
            flagged,
        });
    }

    /// Push the next chunk of a round. Returns the next step, or `None` once
    /// the sample for this target is recorded.
    fn advance(&mut self, m: usize, step: u8, c: &[u64]) -> Option<u8> {
        let t = self.targets[m].clone();
        let w = t.evset.len();
        let th = self.thresholds;
        let s = &mut self.script;
        match (self.strategy, step) {
            (Strategy::Standard, 0) => {
                s.stamp().read(t.evset[w - 1]).flush(t.evset[w - 1]);
                s.stamp().read(t.line).flush(t.line).read(t.line).stamp();
                s.read(t.evset[0]).stamp();
                for &a in &t.evset[1..w - 1] {
                    s.read(a);
                }
                s.stamp();
                Some(1)
            }
            (Strategy::Standard, _) => {
                let (s0, obs, s1, s2, s3) = (c[0], c[1], c[2], c[3], c[4]);
                self.partial.cycle = s0;
                self.partial.observed = obs;
                let reload = s1 - s0;
                let refresh = s3 - s2;
                let verdict = if reload < th.reload {
                    Verdict::Accessed
                } else {
                    Verdict::NotAccessed
                };
                self.finish(m, reload, refresh, verdict, refresh > th.refresh_bound);
                None
            }
            (Strategy::Conditional, 0) => {
                s.stamp()
                    .read(t.evset[w - 1])
                    .flush(t.evset[w - 1])
                    .timed_read(t.line)
                    .stamp();
                Some(1)
            }
            (Strategy::Conditional, 1) => {
                self.partial = Partial {
                    cycle: c[0],
                    latency: c[1],
                    observed: c[2] - c[1],
                };
                if c[1] < th.latency {
                    s.flush(t.line).read(t.line);
                }
                s.stamp().read(t.evset[0]).stamp();
                for &a in &t.evset[1..w - 1] {
                    s.read(a);
                }
                s.stamp();
                Some(2)
            }
            (Strategy::Conditional, _) => {
                let reload = c[0] - self.partial.cycle;
                let refresh = c[2] - c[1];
                let verdict = if self.partial.latency < th.latency {
                    Verdict::Accessed
                } else {
                    Verdict::NotAccessed
                };
                self.finish(m, reload, refresh, verdict, refresh > th.refresh_bound);
                None
            }
            (Strategy::NoiseTolerant, 0) => {
                // Two forced misses: the first takes slot 0, which noise may
                // already have taken; the second takes the target if idle.
                let spare = t.conflict[0];
                s.stamp().read(t.evset[w - 1]).read(spare);
                s.flush(t.evset[w - 1]).flush(spare);
                s.timed_read(t.line).stamp().flush(t.line).stamp();
                s.stamp().timed_read(t.evset[0]).timed_read(t.line);
                for &a in &t.evset[1..w - 1] {
                    s.timed_read(a);
                }
                s.stamp();
                Some(1)
            }
            (Strategy::NoiseTolerant, _) => {
                let (s0, lat, obs, s1, s2) = (c[0], c[1], c[2], c[3], c[4]);
                let refresh_lat = &c[5..c.len() - 1];
                let s3 = c[c.len() - 1];
                self.partial.cycle = s0;
                self.partial.observed = obs - lat;
                // Without noise the refresh refetches at most slot 0, the
                // target and slot 2.
                let misses = refresh_lat.iter().filter(|&&l| l >= th.latency).count();
                let noisy = misses > 3;
                let verdict = if lat < th.latency {
                    Verdict::Accessed
                } else {
                    Verdict::NotAccessed
                };
                self.finish(m, s1 - s0, s3 - s2, verdict, noisy);
                if noisy {
                    self.push_purge(&t);
                }
                None
            }
            (Strategy::Mode2, 0) => {
                s.stamp().timed_read(t.evset[0]).stamp();
                Some(1)
            }
            (Strategy::Mode2, _) => {
                let (s0, lat, obs) = (c[0], c[1], c[2]);
                self.partial.cycle = s0;
                self.partial.observed = obs - lat;
                let accessed = lat >= th.latency;
                if !accessed {
                    // Hit: the read may have lowered the age; reinsert.
                    s.flush(t.evset[0]).read(t.evset[0]);
                }
                let verdict = if accessed {
                    Verdict::Accessed
                } else {
                    Verdict::NotAccessed
                };
                self.finish(m, lat, 0, verdict, false);
                None
            }
            (Strategy::FlushReload, 0) => {
                s.stamp().timed_read(t.line).stamp().flush(t.line);
                Some(1)
            }
            (Strategy::FlushReload, _) => {
                let (s0, lat, obs) = (c[0], c[1], c[2]);
                self.partial.cycle = s0;
                self.partial.observed = obs - lat;
                let verdict = if lat < th.latency {
                    Verdict::Accessed
                } else {
                    Verdict::NotAccessed
                };
                self.finish(m, lat, 0, verdict, false);
                None
            }
            (Strategy::PrimeProbe, 0) => {
                s.stamp();
                if self.forward[m] {
                    for &a in &t.evset {
                        s.read(a);
                    }
                } else {
                    for &a in t.evset.iter().rev() {
                        s.read(a);
                    }
                }
                s.stamp();
                Some(1)
            }
            (Strategy::PrimeProbe, _) => {
                let (s0, s1) = (c[0], c[1]);
                self.partial.cycle = s0;
                self.partial.observed = s0;
                let dir = self.forward[m] as usize;
                match self.probe_style {
                    ProbeStyle::Alternating => self.forward[m] = !self.forward[m],
                    ProbeStyle::Reprime => {
                        for &a in &t.evset {
                            s.read(a);
                        }
                    }
                }
                let probe = s1 - s0;
                let verdict = if probe > th.probe[dir] {
                    Verdict::Accessed
                } else {
                    Verdict::NotAccessed
                };
                self.finish(m, probe, 0, verdict, false);
                None
            }
        }
    }

    /// Throw a foreign line out of the set and rebuild the canonical state.
    ///
    /// With every attacker line flushed, the foreign line is alone. Refilling
    /// the other ways and then forcing further misses ages it to the maximum,
    /// and as the leftmost line it goes first.
    fn push_purge(&mut self, t: &Target) {
        let ours: Vec<u64> = std::iter::once(t.line)
            .chain(t.evset.iter().copied())
            .chain(t.conflict.iter().copied().take(2))
            .collect();
        for &a in &ours {
            self.script.flush(a);
        }
        for &a in &ours {
            self.script.read(a);
        }
        for &a in &ours {
            self.script.flush(a);
        }
        let order = self.fill_order(t);
        for &a in &order {
            self.script.read(a);
        }
    }

    fn push_pacing(&mut self, now: u64) {
        match &self.pacing {
            Pacing::Cadence => {
                let next = self.round_start + self.period;
                self.script.wait(next.saturating_sub(now));
            }
            Pacing::Gap => {
                self.script.wait(self.period);
            }
            Pacing::Lockstep { go, done } => {
                for &ch in go {
                    self.script.push(Event::Signal(ch));
                }
                for &ch in done {
                    self.script.push(Event::WaitFor(ch));
                }
            }
        }
    }

    /// Plan the next chunk. `false` once the agent is finished.
    fn plan(&mut self, now: u64) -> bool {
        let captured = self.script.take_captured();
        match self.stage {
            Stage::Setup => {
                self.push_setup();
                self.stage = Stage::Step {
                    monitor: 0,
                    step: 0,
                };
            }
            Stage::Step { monitor, step } => {
                if monitor == 0 && step == 0 {
                    self.round_start = now;
                }
                self.stage = match self.advance(monitor, step, &captured) {
                    Some(next) => Stage::Step {
                        monitor,
                        step: next,
                    },
                    None if monitor + 1 < self.targets.len() => Stage::Step {
                        monitor: monitor + 1,
                        step: 0,
                    },
                    None => Stage::Pace,
                };
            }
            Stage::Pace => {
                self.round += 1;
                if self.max_rounds.is_some_and(|n| self.round >= n) {
                    self.stage = Stage::Done;
                    return false;
                }
                self.push_pacing(now);
                self.stage = Stage::Step {
                    monitor: 0,
                    step: 0,
                };
            }
            Stage::Done => return false,
        }
        true
    }

    /// Threshold separating L1/L2 hits from LLC hits, for callers that
    /// classify raw latencies.
    pub fn ll_threshold(&self) -> u64 {
        self.ll_threshold
    }
}

impl Agent for AttackAgent {
    fn core(&self) -> usize {
        self.core
    }

    fn next(&mut self, now: u64, last: &Response) -> Option<Event> {
        loop {
            if let Some(e) = self.script.step(last) {
                return Some(e);
            }
            if !self.plan(now) {
                return None;
            }
        }
    }
}

/// Agent that reads a fixed list of lines in lockstep rounds, touching them
/// in round `r` iff `pattern(r)`.
#[derive(Debug)]
pub struct Toucher {
    core: usize,
    lines: Vec<u64>,
    go: Channel,
    done: Channel,
    pattern: Vec<bool>,
    round: usize,
    pending: VecDeque<Event>,
}

impl Toucher {
    pub fn new(
        core: usize,
        lines: Vec<u64>,
        go: Channel,
        done: Channel,
        pattern: Vec<bool>,
    ) -> Self {
        Self {
            core,
            lines,
            go,
            done,
            pattern,
            round: 0,
            pending: VecDeque::new(),
        }
    }
}

impl Agent for Toucher {
    fn core(&self) -> usize {
        self.core
    }

    fn next(&mut self, _now: u64, _last: &Response) -> Option<Event> {
        if self.pending.is_empty() {
            if self.round == self.pattern.len() {
                return None;
            }
            self.pending.push_back(Event::WaitFor(self.go));
            if self.pattern[self.round] {
                self.pending
                    .extend(self.lines.iter().map(|&a| Event::Read(a)));
            }
            self.pending.push_back(Event::Signal(self.done));
            self.round += 1;
        }
        self.pending.pop_front()
    }
}

/// How a [`NoiseAgent`] decides when to touch its lines.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum NoiseMode {
    /// In each of `rounds` lockstep rounds, touch one line with `probability`.
    Lockstep {
        go: Channel,
        done: Channel,
        probability: f64,
        rounds: u64,
    },
    /// Touch one line after each gap drawn uniformly from `[0, 2 * mean_gap]`,
    /// until cycle `until`.
    Rate { mean_gap: u64, until: u64 },
}

/// Third party sharing the monitored set.
#[derive(Debug)]
pub struct NoiseAgent {
    core: usize,
    lines: Vec<u64>,
    mode: NoiseMode,
    rng: ChaCha8Rng,
    round: u64,
    pending: VecDeque<Event>,
    /// Lockstep rounds in which a line was touched.
    pub noisy_rounds: Vec<bool>,
    pub touches: u64,
}

impl NoiseAgent {
    pub fn new(core: usize, lines: Vec<u64>, mode: NoiseMode, seed: u64) -> Self {
        Self {
            core,
            lines,
            mode,
            rng: ChaCha8Rng::seed_from_u64(seed),
            round: 0,
            pending: VecDeque::new(),
            noisy_rounds: Vec::new(),
            touches: 0,
        }
    }

    fn pick(&mut self) -> Event {
        self.touches += 1;
        Event::Read(self.lines[self.rng.gen_range(0..self.lines.len())])
    }
}

impl Agent for NoiseAgent {
    fn core(&self) -> usize {
        self.core
    }

    fn next(&mut self, now: u64, _last: &Response) -> Option<Event> {
        if let Some(e) = self.pending.pop_front() {
            return Some(e);
        }
        match self.mode.clone() {
            NoiseMode::Lockstep {
                go,
                done,
                probability,
                rounds,
            } => {
                if self.round == rounds {
                    return None;
                }
                self.round += 1;
                let noisy = self.rng.gen_bool(probability);
                self.noisy_rounds.push(noisy);
                if noisy {
                    let e = self.pick();
                    self.pending.push_back(e);
                }
                self.pending.push_back(Event::Signal(done));
                Some(Event::WaitFor(go))
            }
            NoiseMode::Rate { mean_gap, until } => {
                if now >= until {
                    return None;
                }
                let gap = self.rng.gen_range(0..=2 * mean_gap);
                let e = self.pick();
                self.pending.push_back(e);
                Some(Event::Wait(gap.max(1)))
            }
        }
    }
}

/// Touched windows in a calibration run.
pub const CALIBRATION_ROUNDS: usize = 32;
/// One window in this many is touched. Odd, so both probe directions see
/// touched windows.
const CALIBRATION_STRIDE: usize = 5;

/// Derive thresholds by running the attack on a fresh copy of the machine
/// while a helper on `helper_core` touches every target line in one lockstep
/// window out of five.
///
/// Idle windows count only after two quiet ones, so a set still settling
/// from the last touch does not blur the idle class.
pub fn calibrate(
    profile: &MachineProfile,
    config: &AttackConfig,
    targets: &[Target],
    attacker_core: usize,
    helper_core: usize,
    seed: u64,
) -> Result<Thresholds> {
    let nominal = Thresholds::nominal(profile);
    let mut h = Hierarchy::new(profile, seed);
    let lockstep = AttackConfig {
        pacing: Pacing::Lockstep {
            go: vec![0],
            done: vec![1],
        },
        ..config.clone()
    };
    let windows = CALIBRATION_STRIDE * CALIBRATION_ROUNDS;
    let pattern: Vec<bool> = (0..windows)
        .map(|r| r % CALIBRATION_STRIDE == CALIBRATION_STRIDE - 1)
        .collect();
    let mut agent = AttackAgent::new(attacker_core, &lockstep, targets.to_vec(), nominal, profile)?
        .with_rounds(windows as u64 + 1);
    let lines: Vec<u64> = targets.iter().map(|t| t.line).collect();
    let mut helper = Toucher::new(helper_core, lines, 0, 1, pattern.clone());
    run(
        &mut h,
        &mut [&mut agent, &mut helper],
        &RunConfig {
            seed,
            ..RunConfig::default()
        },
    )?;

    // Sample of round r reports on the window after round r - 1.
    let mut touched: [Vec<u64>; 2] = Default::default();
    let mut idle: [Vec<u64>; 2] = Default::default();
    let mut refresh_max = 0;
    for m in 0..targets.len() {
        for (k, s) in agent.samples_of(m).enumerate() {
            refresh_max = refresh_max.max(s.refresh_time);
            if k == 0 {
                continue;
            }
            // Alternating probes start backward.
            let alternating = config.technique == Technique::PrimeProbe
                && config.probe_style == ProbeStyle::Alternating;
            let dir = if alternating { k % 2 } else { 0 };
            if pattern[k - 1] {
                touched[dir].push(s.reload_time);
            } else if k >= 3 && !pattern[k - 2] && !pattern[k - 3] {
                idle[dir].push(s.reload_time);
            }
        }
    }
    let split = |low: &[u64], high: &[u64], fallback: u64| -> u64 {
        match (low.iter().max(), high.iter().min()) {
            (Some(&lo), Some(&hi)) if lo < hi => (lo + hi).div_ceil(2),
            _ => fallback,
        }
    };
    let mut th = nominal;
    match config.strategy() {
        Strategy::Standard => th.reload = split(&touched[0], &idle[0], nominal.reload),
        Strategy::PrimeProbe => {
            for dir in 0..2 {
                th.probe[dir] = split(&idle[dir], &touched[dir], nominal.probe[dir]);
            }
        }
        _ => {}
    }
    let lat = &profile.latency;
    th.refresh_bound = refresh_max + (lat.memory - lat.llc) / 2;
    Ok(th)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sched::ScriptedAgent;

    fn setup(profile: &str) -> (MachineProfile, Hierarchy, Target) {
        let profile = MachineProfile::builtin(profile).unwrap();
        let mut h = Hierarchy::new(&profile, 1);
        let line = h.llc().geometry().line_address(0x777, 300);
        let t = prepare_target(&mut h, 0, line, 0x10_000, 2).unwrap();
        (profile, h, t)
    }

    /// Run `rounds` lockstep rounds, the helper touching the target in the
    /// windows listed by `pattern`. Returns the agent after the run.
    fn lockstep_run(
        profile: &MachineProfile,
        h: &mut Hierarchy,
        config: AttackConfig,
        target: &Target,
        pattern: Vec<bool>,
    ) -> AttackAgent {
        let th = calibrate(profile, &config, std::slice::from_ref(target), 0, 1, 5).unwrap();
        let config = config.with_pacing(Pacing::Lockstep {
            go: vec![0],
            done: vec![1],
        });
        let mut agent = AttackAgent::new(0, &config, vec![target.clone()], th, profile)
            .unwrap()
            .with_rounds(pattern.len() as u64 + 1);
        let mut helper = Toucher::new(1, vec![target.line], 0, 1, pattern);
        run(h, &mut [&mut agent, &mut helper], &RunConfig::default()).unwrap();
        agent
    }

    fn verdicts(agent: &AttackAgent) -> Vec<bool> {
        agent
            .samples
            .iter()
            .skip(1)
            .map(|s| s.verdict.accessed())
            .collect()
    }

    fn pattern(n: usize, seed: u64) -> Vec<bool> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.gen_bool(0.5)).collect()
    }

    #[test]
    fn technique_names() {
        for t in [
            Technique::ReloadRefresh,
            Technique::FlushReload,
            Technique::PrimeProbe,
        ] {
            assert_eq!(t.short_name().parse::<Technique>().unwrap(), t);
        }
        assert!("xx".parse::<Technique>().is_err());
    }

    #[test]
    fn config_validation() {
        let (profile, _, t) = setup("i5-7600K");
        let w = profile.llc.ways;
        let mut c = AttackConfig::default();
        assert!(c.validate(w, std::slice::from_ref(&t)).is_ok());
        c.sampling_period = 0;
        assert!(c.validate(w, std::slice::from_ref(&t)).is_err());
        c.sampling_period = 10;
        c.target_slot = 2;
        assert!(c.validate(w, std::slice::from_ref(&t)).is_err());
        c.target_slot = 0;
        let mut short = t;
        short.evset.pop();
        assert!(c.validate(w, &[short]).is_err());
    }

    #[test]
    fn initialize_leaves_target_as_candidate() {
        let (profile, mut h, t) = setup("i5-7600K");
        let config = AttackConfig::default().with_pacing(Pacing::Gap);
        let mut agent = AttackAgent::new(
            0,
            &config,
            vec![t.clone()],
            Thresholds::nominal(&profile),
            &profile,
        )
        .unwrap();
        let order = agent.fill_order(&t);
        agent.push_initialize(&order);
        let mut runner = ScriptedAgent {
            core: 0,
            script: agent.script.clone(),
        };
        run(&mut h, &mut [&mut runner], &RunConfig::default()).unwrap();
        let set = h.llc_set_state(t.line);
        assert!(set.lines.iter().all(|l| !l.valid || l.age == 2));
        assert_eq!(h.llc_way_of(t.line), Some(0));
        assert_eq!(h.llc_candidate(t.line), Some(crate::addr::line_of(t.line)));
        // Gone from the attacker's private caches.
        assert_eq!(h.probe(0, t.line), crate::cache::ServedBy::Llc);
    }

    #[test]
    fn standard_round_tracks_the_victim() {
        let (profile, mut h, t) = setup("i5-7600K");
        let p = pattern(200, 1);
        let agent = lockstep_run(&profile, &mut h, AttackConfig::default(), &t, p.clone());
        assert_eq!(verdicts(&agent), p);
    }

    #[test]
    fn conditional_round_tracks_the_victim() {
        let (profile, mut h, t) = setup("i7-6700K");
        let p = pattern(200, 2);
        let config = AttackConfig {
            reload_style: ReloadStyle::Conditional,
            ..AttackConfig::default()
        };
        let agent = lockstep_run(&profile, &mut h, config, &t, p.clone());
        assert_eq!(verdicts(&agent), p);
    }

    #[test]
    fn flush_reload_tracks_the_victim() {
        let (profile, mut h, t) = setup("i5-7600K");
        let p = pattern(100, 3);
        let agent = lockstep_run(
            &profile,
            &mut h,
            AttackConfig::new(Technique::FlushReload),
            &t,
            p.clone(),
        );
        assert_eq!(verdicts(&agent), p);
    }

    #[test]
    fn prime_probe_sees_isolated_accesses() {
        let (profile, mut h, t) = setup("i5-7600K");
        let p: Vec<bool> = (0..200).map(|r| r % 5 == 4).collect();
        let agent = lockstep_run(
            &profile,
            &mut h,
            AttackConfig::new(Technique::PrimeProbe),
            &t,
            p.clone(),
        );
        let got = verdicts(&agent);
        let caught = got
            .iter()
            .zip(&p)
            .filter(|&(&g, &truth)| g && truth)
            .count();
        assert_eq!(caught, 40);
        // The probe right after an access refetches the evicted lines and can
        // push the victim line out, so only settled windows must stay quiet.
        for k in 2..p.len() {
            if !p[k] && !p[k - 1] && !p[k - 2] {
                assert!(!got[k], "false alarm in window {k}");
            }
        }
    }

    #[test]
    fn mode2_round_without_shared_memory() {
        let profile = MachineProfile::builtin("i5-7600K")
            .unwrap()
            .with_insertion_mode(crate::profile::InsertionMode::Mode2Fixed);
        let mut h = Hierarchy::new(&profile, 1);
        let line = h.llc().geometry().line_address(0x777, 300);
        let t = prepare_target(&mut h, 0, line, 0x10_000, 2).unwrap();
        let p = pattern(100, 5);
        let config = AttackConfig {
            mode2_variant: true,
            ..AttackConfig::default()
        };
        let agent = lockstep_run(&profile, &mut h, config, &t, p.clone());
        assert_eq!(verdicts(&agent), p);
    }

    fn noise_tolerant() -> AttackConfig {
        AttackConfig {
            target_slot: 1,
            ..AttackConfig::default()
        }
    }

    /// Lockstep run with a helper touching the target per `pattern` and a
    /// noise agent touching `noise` with `probability` in every window.
    fn noisy_run(
        profile: &MachineProfile,
        h: &mut Hierarchy,
        config: AttackConfig,
        target: &Target,
        pattern: Vec<bool>,
        probability: f64,
    ) -> (AttackAgent, NoiseAgent, crate::sched::RunReport) {
        let th = calibrate(profile, &config, std::slice::from_ref(target), 0, 1, 5).unwrap();
        let config = config.with_pacing(Pacing::Lockstep {
            go: vec![0, 2],
            done: vec![1, 3],
        });
        let rounds = pattern.len() as u64;
        let mut agent = AttackAgent::new(0, &config, vec![target.clone()], th, profile)
            .unwrap()
            .with_rounds(rounds + 1);
        let mut helper = Toucher::new(1, vec![target.line], 0, 1, pattern);
        let noise_lines = congruent_lines(h, target.line, 0x20_000, 1);
        let mut noise = NoiseAgent::new(
            2,
            noise_lines,
            NoiseMode::Lockstep {
                go: 2,
                done: 3,
                probability,
                rounds,
            },
            9,
        );
        let report = run(
            h,
            &mut [&mut agent, &mut helper, &mut noise],
            &RunConfig::default(),
        )
        .unwrap();
        (agent, noise, report)
    }

    #[test]
    fn noise_tolerant_without_noise_matches_standard() {
        let (profile, h, t) = setup("i5-7600K");
        let p = pattern(200, 6);
        let standard = lockstep_run(
            &profile,
            &mut h.clone(),
            AttackConfig::default(),
            &t,
            p.clone(),
        );
        let tolerant = lockstep_run(&profile, &mut h.clone(), noise_tolerant(), &t, p.clone());
        assert_eq!(verdicts(&tolerant), verdicts(&standard));
        assert_eq!(verdicts(&tolerant), p);
        assert!(tolerant.samples.iter().all(|s| !s.flagged));
    }

    #[test]
    fn noise_tolerant_under_single_line_noise() {
        let (profile, mut h, t) = setup("i5-7600K");
        let p = pattern(300, 7);
        let (agent, noise, report) =
            noisy_run(&profile, &mut h, noise_tolerant(), &t, p.clone(), 0.5);
        assert_eq!(verdicts(&agent), p);
        // The victim line is never evicted while the victim uses it.
        assert_eq!(report.agents[1].counters.llc_misses, 0);
        let flagged: Vec<bool> = agent.samples.iter().skip(1).map(|s| s.flagged).collect();
        assert_eq!(flagged, noise.noisy_rounds);
    }

    #[test]
    fn noise_hurts_the_standard_placement() {
        let (profile, mut h, t) = setup("i5-7600K");
        let p = pattern(300, 7);
        let (agent, _, report) = noisy_run(
            &profile,
            &mut h,
            AttackConfig::default(),
            &t,
            p.clone(),
            0.5,
        );
        let wrong = verdicts(&agent)
            .iter()
            .zip(&p)
            .filter(|(a, b)| a != b)
            .count();
        let victim_misses = report.agents[1].counters.llc_misses;
        assert!(wrong > 0 || victim_misses > 0);
    }

    #[test]
    fn refresh_restores_the_initialized_state() {
        let (profile, h, t) = setup("i5-7600K");
        let conditional = AttackConfig {
            reload_style: ReloadStyle::Conditional,
            ..AttackConfig::default()
        };
        for config in [AttackConfig::default(), conditional, noise_tolerant()] {
            restores(&profile, &h, &t, config);
        }
    }

    fn restores(profile: &MachineProfile, h: &Hierarchy, t: &Target, config: AttackConfig) {
        let (profile, t) = (profile.clone(), t.clone());
        let th = calibrate(&profile, &config, std::slice::from_ref(&t), 0, 1, 5).unwrap();
        let config = config.with_pacing(Pacing::Lockstep {
            go: vec![0],
            done: vec![1],
        });
        // Snapshot after setup only: one round, no windows.
        let mut init = AttackAgent::new(0, &config, vec![t.clone()], th, &profile).unwrap();
        let order = init.fill_order(&t);
        init.push_initialize(&order);
        let mut fresh = h.clone();
        let mut runner = ScriptedAgent {
            core: 0,
            script: init.script.clone(),
        };
        run(&mut fresh, &mut [&mut runner], &RunConfig::default()).unwrap();
        let canonical = fresh.llc_set_state(t.line).clone();
        for touch in [false, true] {
            let mut hh = h.clone();
            let mut agent = AttackAgent::new(0, &config, vec![t.clone()], th, &profile)
                .unwrap()
                .with_rounds(2);
            let mut helper = Toucher::new(1, vec![t.line], 0, 1, vec![touch]);
            run(
                &mut hh,
                &mut [&mut agent, &mut helper],
                &RunConfig::default(),
            )
            .unwrap();
            let after = hh.llc_set_state(t.line);
            let ways = |s: &crate::policy::CacheSet| -> Vec<(u64, bool, u8)> {
                s.lines.iter().map(|l| (l.tag, l.valid, l.age)).collect()
            };
            assert_eq!(
                ways(after),
                ways(&canonical),
                "{:?} touch = {touch}",
                config.strategy()
            );
        }
    }
}
