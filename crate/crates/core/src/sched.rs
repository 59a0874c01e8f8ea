//! Cycle-driven interleaving of agents over a shared hierarchy.
//!
//! Each agent has its own ready time. The scheduler repeatedly picks the
//! agent with the smallest ready time (ties go round-robin from a seeded
//! starting point), asks it for one event, applies that event atomically and
//! advances the agent's clock by the event's cost.

use std::collections::{HashMap, VecDeque};
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cache::{Hierarchy, ServedBy};
use crate::error::SimError;

pub type Channel = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Event {
    Read(u64),
    Flush(u64),
    /// Ordering marker. Events of one agent already run in program order.
    Fence,
    Wait(u64),
    Timestamp,
    CounterRead,
    /// Post one token on a channel.
    Signal(Channel),
    /// Block until a token is available on the channel, then consume it.
    WaitFor(Channel),
}

impl Event {
    pub fn label(&self) -> &'static str {
        match self {
            Event::Read(_) => "read",
            Event::Flush(_) => "flush",
            Event::Fence => "fence",
            Event::Wait(_) => "wait",
            Event::Timestamp => "timestamp",
            Event::CounterRead => "counters",
            Event::Signal(_) => "signal",
            Event::WaitFor(_) => "wait-for",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PerfCounters {
    pub llc_misses: u64,
    pub llc_accesses: u64,
    pub cycles: u64,
}

impl PerfCounters {
    pub fn delta(&self, earlier: &PerfCounters) -> PerfCounters {
        PerfCounters {
            llc_misses: self.llc_misses - earlier.llc_misses,
            llc_accesses: self.llc_accesses - earlier.llc_accesses,
            cycles: self.cycles - earlier.cycles,
        }
    }
}

/// What the previous event returned to the agent.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Response {
    Start,
    Done,
    Read { served_by: ServedBy, latency: u64 },
    Timestamp(u64),
    Counters(PerfCounters),
}

pub trait Agent {
    fn core(&self) -> usize;

    /// Next event, or `None` once the program has finished.
    fn next(&mut self, now: u64, last: &Response) -> Option<Event>;
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub cycle: u64,
    pub agent: usize,
    pub event: Event,
    pub served_by: Option<ServedBy>,
    pub latency: u64,
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub seed: u64,
    /// Agents are not dispatched at or after this cycle.
    pub max_cycle: u64,
    /// Stop as soon as this agent finishes.
    pub stop_after: Option<usize>,
    pub trace: bool,
    pub start_cycle: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            max_cycle: u64::MAX,
            stop_after: None,
            trace: false,
            start_cycle: 0,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct AgentReport {
    pub counters: PerfCounters,
    /// Cycle of every LLC miss the agent suffered.
    pub miss_times: Vec<u64>,
    pub finished: bool,
}

#[derive(Debug, Clone, Default)]
pub struct RunReport {
    pub agents: Vec<AgentReport>,
    pub trace: Vec<TraceRecord>,
    pub end_cycle: u64,
}

impl RunReport {
    /// Per-period LLC miss counts for `agent`, covering `[start, end_cycle)`.
    pub fn periodic_misses(&self, agent: usize, period: u64, start: u64) -> Vec<u64> {
        periodic_series(
            &self.agents[agent].miss_times,
            period,
            start,
            self.end_cycle,
        )
    }

    pub fn write_trace_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["cycle", "agent", "event", "address", "level", "latency"])?;
        for r in &self.trace {
            let addr = match r.event {
                Event::Read(a) | Event::Flush(a) => format!("{a:#x}"),
                Event::Wait(c) => c.to_string(),
                Event::Signal(ch) | Event::WaitFor(ch) => ch.to_string(),
                _ => String::new(),
            };
            w.write_record([
                r.cycle.to_string(),
                r.agent.to_string(),
                r.event.label().to_string(),
                addr,
                r.served_by.map(|s| s.label()).unwrap_or("").to_string(),
                r.latency.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Bucket event times into fixed periods starting at `start`.
pub fn periodic_series(times: &[u64], period: u64, start: u64, end: u64) -> Vec<u64> {
    assert!(period > 0, "sampling period must be positive");
    let len = end.saturating_sub(start).div_ceil(period) as usize;
    let mut series = vec![0u64; len];
    for &t in times {
        if t >= start && t < end {
            series[((t - start) / period) as usize] += 1;
        }
    }
    series
}

struct Slot {
    ready: u64,
    blocked_on: Option<Channel>,
    last: Response,
    report: AgentReport,
}

pub fn run(
    hierarchy: &mut Hierarchy,
    agents: &mut [&mut dyn Agent],
    config: &RunConfig,
) -> Result<RunReport, SimError> {
    for (i, a) in agents.iter().enumerate() {
        if a.core() >= hierarchy.core_count() {
            return Err(SimError::BadCore {
                agent: i,
                core: a.core(),
                cores: hierarchy.core_count(),
            });
        }
    }
    let n = agents.len();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut cursor = if n > 0 { rng.gen_range(0..n) } else { 0 };
    let mut slots: Vec<Slot> = (0..n)
        .map(|_| Slot {
            ready: config.start_cycle,
            blocked_on: None,
            last: Response::Start,
            report: AgentReport::default(),
        })
        .collect();
    let mut tokens: HashMap<Channel, u64> = HashMap::new();
    let mut trace = Vec::new();
    let flush_cost = hierarchy.profile().latency.flush;
    let mut end = config.start_cycle;

    loop {
        let mut pick: Option<usize> = None;
        for step in 0..n {
            let i = (cursor + step) % n;
            let s = &slots[i];
            if s.report.finished || s.blocked_on.is_some() {
                continue;
            }
            if pick.is_none_or(|p| s.ready < slots[p].ready) {
                pick = Some(i);
            }
        }
        let Some(i) = pick else {
            if slots.iter().any(|s| !s.report.finished) {
                return Err(SimError::Deadlock { cycle: end });
            }
            break;
        };
        let now = slots[i].ready;
        if now >= config.max_cycle {
            break;
        }
        cursor = (i + 1) % n;
        end = end.max(now);
        let last = slots[i].last;
        let Some(event) = agents[i].next(now, &last) else {
            slots[i].report.finished = true;
            slots[i].report.counters.cycles = now;
            if config.stop_after == Some(i) {
                break;
            }
            continue;
        };
        let slot = &mut slots[i];
        let mut served = None;
        let cost = match event {
            Event::Read(addr) => {
                let out = hierarchy.access(agents[i].core(), addr);
                let c = &mut slot.report.counters;
                if out.served_by.reached_llc() {
                    c.llc_accesses += 1;
                }
                if out.served_by == ServedBy::Memory {
                    c.llc_misses += 1;
                    slot.report.miss_times.push(now);
                }
                served = Some(out.served_by);
                slot.last = Response::Read {
                    served_by: out.served_by,
                    latency: out.latency,
                };
                out.latency
            }
            Event::Flush(addr) => {
                hierarchy.flush(addr);
                slot.last = Response::Done;
                flush_cost
            }
            Event::Fence => {
                slot.last = Response::Done;
                0
            }
            Event::Wait(c) => {
                slot.last = Response::Done;
                c
            }
            Event::Timestamp => {
                slot.last = Response::Timestamp(now);
                0
            }
            Event::CounterRead => {
                let mut c = slot.report.counters;
                c.cycles = now;
                slot.last = Response::Counters(c);
                0
            }
            Event::Signal(ch) => {
                *tokens.entry(ch).or_default() += 1;
                slot.last = Response::Done;
                0
            }
            Event::WaitFor(ch) => {
                slot.last = Response::Done;
                slot.blocked_on = Some(ch);
                0
            }
        };
        slot.ready = now + cost;
        slot.report.counters.cycles = slot.ready;
        end = end.max(slot.ready);
        if config.trace {
            trace.push(TraceRecord {
                cycle: now,
                agent: i,
                event,
                served_by: served,
                latency: cost,
            });
        }
        // Hand out tokens to blocked agents in index order.
        for (j, s) in slots.iter_mut().enumerate() {
            let Some(ch) = s.blocked_on else { continue };
            let t = tokens.entry(ch).or_default();
            if *t > 0 {
                *t -= 1;
                s.blocked_on = None;
                s.ready = s.ready.max(if j == i { now } else { now + cost });
            }
        }
    }

    for s in &mut slots {
        s.report.counters.cycles = s.report.counters.cycles.max(s.ready.min(end));
    }
    Ok(RunReport {
        agents: slots.into_iter().map(|s| s.report).collect(),
        trace,
        end_cycle: end,
    })
}

/// Queue of pending events plus captured results, for agents written as a
/// sequence of phases.
///
/// A phase pushes events; reads pushed with [`Script::timed_read`] and stamps
/// pushed with [`Script::stamp`] append their latency or cycle to
/// `captured`, in program order. When the queue drains, the owning agent
/// inspects the results and plans the next phase.
#[derive(Debug, Default, Clone)]
pub struct Script {
    queue: VecDeque<(Event, bool)>,
    awaiting: bool,
    pub captured: Vec<u64>,
}

impl Script {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, e: Event) -> &mut Self {
        self.queue.push_back((e, false));
        self
    }

    pub fn read(&mut self, addr: u64) -> &mut Self {
        self.push(Event::Read(addr))
    }

    pub fn flush(&mut self, addr: u64) -> &mut Self {
        self.push(Event::Flush(addr))
    }

    pub fn wait(&mut self, cycles: u64) -> &mut Self {
        if cycles > 0 {
            self.push(Event::Wait(cycles));
        }
        self
    }

    pub fn timed_read(&mut self, addr: u64) -> &mut Self {
        self.queue.push_back((Event::Read(addr), true));
        self
    }

    pub fn stamp(&mut self) -> &mut Self {
        self.queue.push_back((Event::Timestamp, true));
        self
    }

    pub fn is_idle(&self) -> bool {
        self.queue.is_empty() && !self.awaiting
    }

    /// Record the result of the previous captured event, then pop the next one.
    pub fn step(&mut self, last: &Response) -> Option<Event> {
        self.absorb(last);
        let (e, capture) = self.queue.pop_front()?;
        self.awaiting = capture;
        Some(e)
    }

    /// Record a pending capture without popping.
    pub fn absorb(&mut self, last: &Response) {
        if self.awaiting {
            match *last {
                Response::Read { latency, .. } => self.captured.push(latency),
                Response::Timestamp(t) => self.captured.push(t),
                _ => {}
            }
            self.awaiting = false;
        }
    }

    pub fn take_captured(&mut self) -> Vec<u64> {
        std::mem::take(&mut self.captured)
    }
}

/// Agent that plays a fixed list of events once.
#[derive(Debug, Clone)]
pub struct ScriptedAgent {
    pub core: usize,
    pub script: Script,
}

impl ScriptedAgent {
    pub fn new(core: usize, events: impl IntoIterator<Item = Event>) -> Self {
        let mut script = Script::new();
        for e in events {
            script.push(e);
        }
        Self { core, script }
    }
}

impl Agent for ScriptedAgent {
    fn core(&self) -> usize {
        self.core
    }

    fn next(&mut self, _now: u64, last: &Response) -> Option<Event> {
        self.script.step(last)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::profile::MachineProfile;

    fn machine() -> Hierarchy {
        Hierarchy::new(&MachineProfile::builtin("generic").unwrap(), 0)
    }

    #[test]
    fn single_cold_read() {
        let mut h = machine();
        let mut a = ScriptedAgent::new(0, [Event::Read(0x1000)]);
        let r = run(
            &mut h,
            &mut [&mut a],
            &RunConfig {
                trace: true,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(r.trace.len(), 1);
        assert_eq!(r.trace[0].served_by, Some(ServedBy::Memory));
        assert_eq!(r.agents[0].counters.llc_misses, 1);
        assert_eq!(r.agents[0].counters.cycles, 345);
    }

    #[test]
    fn min_ready_order_and_costs() {
        let mut h = machine();
        let mut slow = ScriptedAgent::new(0, [Event::Wait(1000), Event::Read(0x40)]);
        let mut fast = ScriptedAgent::new(1, [Event::Read(0x40), Event::Read(0x40)]);
        let r = run(
            &mut h,
            &mut [&mut slow, &mut fast],
            &RunConfig {
                trace: true,
                ..Default::default()
            },
        )
        .unwrap();
        let reads: Vec<_> = r
            .trace
            .iter()
            .filter(|t| matches!(t.event, Event::Read(_)))
            .map(|t| (t.cycle, t.agent, t.served_by.unwrap()))
            .collect();
        assert_eq!(
            reads,
            vec![
                (0, 1, ServedBy::Memory),
                (345, 1, ServedBy::L1),
                (1000, 0, ServedBy::Llc)
            ]
        );
    }

    #[test]
    fn timestamps_and_capture() {
        let mut h = machine();
        struct Timer(Script);
        impl Agent for Timer {
            fn core(&self) -> usize {
                0
            }
            fn next(&mut self, _now: u64, last: &Response) -> Option<Event> {
                self.0.step(last)
            }
        }
        let mut s = Script::new();
        s.stamp().timed_read(0x80).timed_read(0x80).stamp();
        let mut t = Timer(s);
        run(&mut h, &mut [&mut t], &RunConfig::default()).unwrap();
        // The final stamp is absorbed on the call that ends the script.
        assert_eq!(t.0.captured, vec![0, 345, 4, 349]);
    }

    #[test]
    fn channels_hand_off() {
        let mut h = machine();
        let mut first = ScriptedAgent::new(0, [Event::Wait(500), Event::Signal(1)]);
        let mut second = ScriptedAgent::new(1, [Event::WaitFor(1), Event::Read(0x40)]);
        let r = run(
            &mut h,
            &mut [&mut first, &mut second],
            &RunConfig {
                trace: true,
                ..Default::default()
            },
        )
        .unwrap();
        let read = r
            .trace
            .iter()
            .find(|t| matches!(t.event, Event::Read(_)))
            .unwrap();
        assert_eq!(read.cycle, 500);
    }

    #[test]
    fn deadlock_is_an_error() {
        let mut h = machine();
        let mut a = ScriptedAgent::new(0, [Event::WaitFor(3)]);
        assert!(matches!(
            run(&mut h, &mut [&mut a], &RunConfig::default()),
            Err(SimError::Deadlock { .. })
        ));
    }

    #[test]
    fn bad_core_rejected() {
        let mut h = machine();
        let mut a = ScriptedAgent::new(7, [Event::Fence]);
        assert!(run(&mut h, &mut [&mut a], &RunConfig::default()).is_err());
    }

    #[test]
    fn sampler_conserves_counts() {
        let mut h = machine();
        let events: Vec<Event> = (0..300u64)
            .flat_map(|i| [Event::Read(i << 12), Event::Wait(777)])
            .collect();
        let mut a = ScriptedAgent::new(0, events);
        let r = run(&mut h, &mut [&mut a], &RunConfig::default()).unwrap();
        let series = r.periodic_misses(0, 10_000, 0);
        assert_eq!(series.iter().sum::<u64>(), r.agents[0].counters.llc_misses);
        assert!(periodic_series(&[], 100, 0, 1000).iter().all(|&x| x == 0));
    }

    #[test]
    fn same_seed_same_trace() {
        let go = |seed| {
            let mut h = machine();
            let mut a = ScriptedAgent::new(0, (0..50).map(|i| Event::Read(i * 64)));
            let mut b = ScriptedAgent::new(1, (0..50).map(|i| Event::Read(i * 64)));
            let cfg = RunConfig {
                seed,
                trace: true,
                ..Default::default()
            };
            run(&mut h, &mut [&mut a, &mut b], &cfg).unwrap().trace
        };
        assert_eq!(go(4), go(4));
    }
}
