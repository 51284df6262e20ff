//! Episode trace export: one JSON object per step.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Action, EnvError, WorldState};

/// One step of a replayable episode trace. `agent` is the post-action
/// (x, y, heading) triple.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub seed: u64,
    pub t: u32,
    pub action: u8,
    pub reward: f32,
    pub done: bool,
    pub agent: [u8; 3],
}

impl TraceRow {
    pub fn capture(state: &WorldState, t: u32, action: Action, reward: f32, done: bool) -> Self {
        TraceRow {
            seed: state.rng_seed,
            t,
            action: action.id(),
            reward,
            done,
            agent: [
                state.agent_pos.0 as u8,
                state.agent_pos.1 as u8,
                state.agent_heading.index() as u8,
            ],
        }
    }
}

pub fn write_trace(path: &Path, rows: &[TraceRow]) -> std::io::Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for row in rows {
        serde_json::to_writer(&mut out, row)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

pub fn read_trace(path: &Path) -> std::io::Result<Vec<TraceRow>> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut rows = Vec::new();
    for line in file.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        rows.push(serde_json::from_str(&line)?);
    }
    Ok(rows)
}

/// Roll an episode with the given action script, capturing a trace row per
/// step. Stops early when the episode terminates.
pub fn record_episode(
    state: &mut WorldState,
    actions: &[Action],
) -> Result<Vec<TraceRow>, EnvError> {
    let mut rows = Vec::new();
    for &action in actions {
        let out = state.step(action)?;
        rows.push(TraceRow::capture(state, state.step_count, action, out.reward, out.done));
        if out.done {
            break;
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::EnvConfig;

    #[test]
    fn trace_round_trips_through_jsonl() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.jsonl");
        let (mut state, _) = crate::env::reset(EnvConfig::default(), 99);
        let script = [Action::Forward, Action::Left, Action::Forward, Action::Right];
        let rows = record_episode(&mut state, &script).unwrap();
        write_trace(&path, &rows).unwrap();
        assert_eq!(read_trace(&path).unwrap(), rows);
    }
}
