//! JSON-lines access traces that can be re-simulated to certify determinism.
//!
//! A trace is a header line, one line per event, and a footer carrying the
//! event count and the final hierarchy digest. Replay applies every read and
//! flush to a fresh hierarchy built from the header and compares digests.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::cache::Hierarchy;
use crate::error::ReplayError;
use crate::profile::MachineProfile;
use crate::sched::{Event, TraceRecord};

pub const TRACE_FORMAT: &str = "cachelab-trace";
pub const TRACE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    /// Profile as TOML, so a trace replays without the profile search path.
    pub profile: String,
    /// Core of each agent, by agent index.
    pub cores: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct TraceLine {
    c: u64,
    a: usize,
    e: Event,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceFooter {
    pub events: u64,
    pub digest: String,
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum Line {
    Event(TraceLine),
    Footer(TraceFooter),
}

/// Write a complete trace. `digest` is the state the run ended in.
pub fn write_trace<W: Write>(
    mut out: W,
    profile: &MachineProfile,
    seed: u64,
    cores: &[usize],
    records: &[TraceRecord],
    digest: &str,
) -> std::io::Result<()> {
    let header = TraceHeader {
        format: TRACE_FORMAT.into(),
        version: TRACE_VERSION,
        seed,
        profile: profile.to_toml(),
        cores: cores.to_vec(),
    };
    serde_json::to_writer(&mut out, &header)?;
    out.write_all(b"\n")?;
    for r in records {
        serde_json::to_writer(
            &mut out,
            &TraceLine {
                c: r.cycle,
                a: r.agent,
                e: r.event,
            },
        )?;
        out.write_all(b"\n")?;
    }
    serde_json::to_writer(
        &mut out,
        &TraceFooter {
            events: records.len() as u64,
            digest: digest.into(),
        },
    )?;
    out.write_all(b"\n")?;
    out.flush()
}

/// Result of re-simulating a trace.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReplayOutcome {
    pub events: u64,
    pub recorded: String,
    pub replayed: String,
}

impl ReplayOutcome {
    pub fn matches(&self) -> bool {
        self.recorded == self.replayed
    }
}

fn malformed(line: usize, what: impl std::fmt::Display) -> ReplayError {
    ReplayError::Malformed(format!("line {line}: {what}"))
}

pub fn replay<R: BufRead>(input: R) -> Result<ReplayOutcome, ReplayError> {
    let mut lines = input.lines();
    let first = lines
        .next()
        .ok_or_else(|| ReplayError::Truncated("empty trace".into()))??;
    let header: TraceHeader = serde_json::from_str(&first).map_err(|e| malformed(1, e))?;
    if header.format != TRACE_FORMAT {
        return Err(malformed(1, format!("unknown format `{}`", header.format)));
    }
    if header.version != TRACE_VERSION {
        return Err(ReplayError::VersionMismatch {
            expected: TRACE_VERSION,
            found: header.version,
        });
    }
    let profile = MachineProfile::from_toml(&header.profile).map_err(|e| malformed(1, e))?;
    let mut h = Hierarchy::new(&profile, header.seed);
    let mut events = 0u64;
    for (i, text) in lines.enumerate() {
        let n = i + 2;
        let text = text?;
        if text.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<Line>(&text).map_err(|e| malformed(n, e))? {
            Line::Event(ev) => {
                let core = *header
                    .cores
                    .get(ev.a)
                    .ok_or_else(|| malformed(n, format!("agent {} has no core", ev.a)))?;
                if core >= h.core_count() {
                    return Err(malformed(n, format!("core {core} out of range")));
                }
                match ev.e {
                    Event::Read(a) => {
                        h.access(core, a);
                    }
                    Event::Flush(a) => h.flush(a),
                    _ => {}
                }
                events += 1;
            }
            Line::Footer(f) => {
                if f.events != events {
                    return Err(ReplayError::Truncated(format!(
                        "footer counts {} events, trace holds {events}",
                        f.events
                    )));
                }
                return Ok(ReplayOutcome {
                    events,
                    recorded: f.digest,
                    replayed: h.digest(),
                });
            }
        }
    }
    Err(ReplayError::Truncated(format!(
        "no footer after {events} events"
    )))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sched::{run, RunConfig, Script, ScriptedAgent};

    fn traced_run(seed: u64) -> Vec<u8> {
        let profile = MachineProfile::builtin("i5-7600K").unwrap();
        let mut h = Hierarchy::new(&profile, seed);
        let mut script = Script::new();
        for k in 0..200u64 {
            script.read(k * 4096 + (seed % 7) * 64);
            if k % 9 == 0 {
                script.flush(k * 4096);
            }
        }
        let mut agent = ScriptedAgent { core: 1, script };
        let cfg = RunConfig {
            seed,
            trace: true,
            ..RunConfig::default()
        };
        let report = run(&mut h, &mut [&mut agent], &cfg).unwrap();
        let mut out = Vec::new();
        write_trace(&mut out, &profile, seed, &[1], &report.trace, &h.digest()).unwrap();
        out
    }

    #[test]
    fn replay_reproduces_digest() {
        let trace = traced_run(3);
        let r = replay(trace.as_slice()).unwrap();
        assert!(r.matches());
        assert!(r.events > 200);
    }

    #[test]
    fn digests_depend_on_seed() {
        let a = replay(traced_run(3).as_slice()).unwrap();
        let b = replay(traced_run(4).as_slice()).unwrap();
        assert_ne!(a.recorded, b.recorded);
    }

    #[test]
    fn truncated_trace_is_an_error() {
        let trace = traced_run(5);
        let text = String::from_utf8(trace).unwrap();
        let cut: String = text.lines().take(50).map(|l| format!("{l}\n")).collect();
        assert!(matches!(
            replay(cut.as_bytes()),
            Err(ReplayError::Truncated(_))
        ));
        assert!(matches!(replay(&b""[..]), Err(ReplayError::Truncated(_))));
        let without_event: Vec<&str> = text
            .lines()
            .enumerate()
            .filter(|(i, _)| *i != 10)
            .map(|(_, l)| l)
            .collect();
        assert!(matches!(
            replay(without_event.join("\n").as_bytes()),
            Err(ReplayError::Truncated(_))
        ));
    }

    #[test]
    fn version_and_garbage_are_rejected() {
        let text = String::from_utf8(traced_run(6)).unwrap();
        let bumped = text.replacen("\"version\":1", "\"version\":2", 1);
        assert!(matches!(
            replay(bumped.as_bytes()),
            Err(ReplayError::VersionMismatch {
                expected: 1,
                found: 2
            })
        ));
        let garbage = text.replacen("{\"c\"", "{\"x\"", 1);
        assert!(matches!(
            replay(garbage.as_bytes()),
            Err(ReplayError::Malformed(_))
        ));
    }
}
