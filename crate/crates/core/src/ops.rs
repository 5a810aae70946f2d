//! Operator commands, tick-boundary application, telemetry frames and
//! record/replay.
//!
//! A [`Session`] owns the closed loop. Commands are queued with a sequence
//! number and applied only between ticks, in sequence order, so a run is
//! fully determined by its configuration and its command log.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::governor::{Breakpoint, Sense};
use crate::plant::{PlantState, OUTPUT_CHANNELS};
use crate::scenario::{ClosedLoop, ScenarioConfig, TickRecord};
use crate::sysid::StateSpaceModel;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CommandKind {
    /// Step the reactor power reference to `mw` from the tick of effect on.
    SetReference {
        mw: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        effective_t: Option<f64>,
    },
    /// Replace one output bound from the tick of effect on, either with an
    /// absolute `value` or shifted by `delta`.
    UpdateConstraint {
        output: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        value: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        delta: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        effective_t: Option<f64>,
    },
    ToggleGovernor { enabled: bool },
    Pause,
    Resume,
    /// Wall-clock pacing factor; only the server loop reads it.
    SetSpeed { factor: f64 },
    Noop,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommandMessage {
    pub seq: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub client: Option<String>,
    #[serde(flatten)]
    pub kind: CommandKind,
}

impl CommandMessage {
    pub fn new(seq: u64, kind: CommandKind) -> Self {
        Self { seq, client: None, kind }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("commands always serialize")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

pub const MAX_SPEED: f64 = 1000.0;

/// Why a command was refused.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "reason", content = "detail", rename_all = "snake_case")]
pub enum Rejection {
    /// Field values out of range or naming unknown outputs.
    Invalid(String),
    /// Sequence number not above the last accepted one.
    Stale { last: u64 },
}

impl std::fmt::Display for Rejection {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Rejection::Invalid(m) => write!(f, "invalid command: {m}"),
            Rejection::Stale { last } => write!(f, "stale sequence number (last accepted {last})"),
        }
    }
}

/// Result of applying one command.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Ack {
    pub seq: u64,
    pub accepted: bool,
    /// Tick whose record first reflects the command.
    pub effective_tick: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// A command as it took effect, for replay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoggedCommand {
    pub tick: u64,
    pub command: CommandMessage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GovernorFrame {
    pub r: f64,
    pub v: f64,
    pub kappa: f64,
    /// Admissible input band in MW; `null` for an unbounded side.
    pub band: [Option<f64>; 2],
    pub binding: String,
    pub infeasible: bool,
    pub enabled: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintFrame {
    pub output: String,
    pub sense: Sense,
    pub bound: f64,
    pub schedule: Vec<Breakpoint>,
}

pub const TELEMETRY_SCHEMA: u32 = 1;

/// One stream frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TelemetryFrame {
    pub schema: u32,
    pub tick: u64,
    pub t: f64,
    pub states: BTreeMap<String, f64>,
    pub measured: BTreeMap<String, f64>,
    /// Smoothed measurements; precursor channels hold the smoothed observer
    /// estimates.
    pub denoised: BTreeMap<String, f64>,
    pub governor: GovernorFrame,
    pub constraints: Vec<ConstraintFrame>,
    pub paused: bool,
}

fn check_time(t: Option<f64>) -> std::result::Result<(), Rejection> {
    match t {
        Some(t) if !(t.is_finite() && t >= 0.0) => {
            Err(Rejection::Invalid("effective_t must be a finite time >= 0".into()))
        }
        _ => Ok(()),
    }
}

fn finite(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

/// Closed loop plus command handling.
pub struct Session {
    sim: ClosedLoop,
    pending: Vec<CommandMessage>,
    last_seq: Option<u64>,
    paused: bool,
    speed: f64,
    log: Vec<LoggedCommand>,
    last_frame: Option<TelemetryFrame>,
}

impl Session {
    pub fn new(cfg: &ScenarioConfig, model: Option<StateSpaceModel>) -> Result<Self> {
        Ok(Self {
            sim: ClosedLoop::new(cfg, model)?,
            pending: Vec::new(),
            last_seq: None,
            paused: false,
            speed: 1.0,
            log: Vec::new(),
            last_frame: None,
        })
    }

    /// Hold the clock until a resume command arrives.
    pub fn start_paused(mut self) -> Self {
        self.paused = true;
        self
    }

    pub fn has_pending(&self) -> bool {
        !self.pending.is_empty()
    }

    pub fn sim(&self) -> &ClosedLoop {
        &self.sim
    }

    pub fn paused(&self) -> bool {
        self.paused
    }

    pub fn speed(&self) -> f64 {
        self.speed
    }

    pub fn command_log(&self) -> &[LoggedCommand] {
        &self.log
    }

    pub fn last_frame(&self) -> Option<&TelemetryFrame> {
        self.last_frame.as_ref()
    }

    pub fn finished(&self) -> bool {
        self.sim.tick_index() as usize >= self.sim.config().ticks()
    }

    /// Range and name checks that do not depend on timing.
    pub fn check(&self, cmd: &CommandMessage) -> std::result::Result<(), Rejection> {
        let rated = self.sim.config().plant.anchors.q_rx_mw;
        match &cmd.kind {
            CommandKind::SetReference { mw, effective_t } => {
                if !(mw.is_finite() && (0.2 * rated..=rated).contains(mw)) {
                    return Err(Rejection::Invalid(format!(
                        "reference {mw} MW outside [{}, {rated}] MW",
                        0.2 * rated
                    )));
                }
                check_time(*effective_t)?;
            }
            CommandKind::UpdateConstraint {
                output,
                value,
                delta,
                effective_t,
            } => {
                match (value, delta) {
                    (Some(v), None) | (None, Some(v)) if v.is_finite() => {}
                    _ => {
                        return Err(Rejection::Invalid(
                            "give exactly one finite `value` or `delta`".into(),
                        ))
                    }
                }
                if !self.sim.constraints().outputs.iter().any(|c| &c.output == output) {
                    return Err(Rejection::Invalid(format!("no constraint on `{output}`")));
                }
                check_time(*effective_t)?;
            }
            CommandKind::ToggleGovernor { enabled: true } if !self.sim.has_governor() => {
                return Err(Rejection::Invalid("no governor model is loaded".into()));
            }
            CommandKind::SetSpeed { factor } => {
                if !(factor.is_finite() && *factor > 0.0 && *factor <= MAX_SPEED) {
                    return Err(Rejection::Invalid(format!("speed factor must be in (0, {MAX_SPEED}]")));
                }
            }
            _ => {}
        }
        Ok(())
    }

    /// Queue a command for the next tick boundary.
    pub fn submit(&mut self, cmd: CommandMessage) -> std::result::Result<u64, Rejection> {
        if let Some(last) = self.last_seq {
            if cmd.seq <= last {
                log::warn!("rejected command seq {} (last {last})", cmd.seq);
                return Err(Rejection::Stale { last });
            }
        }
        self.check(&cmd)?;
        self.last_seq = Some(cmd.seq);
        self.pending.push(cmd);
        Ok(self.sim.tick_index())
    }

    /// Apply every queued command in sequence order.
    pub fn apply_pending(&mut self) -> Vec<Ack> {
        let mut pending = std::mem::take(&mut self.pending);
        pending.sort_by_key(|c| c.seq);
        pending.into_iter().map(|c| self.apply(c)).collect()
    }

    fn apply(&mut self, cmd: CommandMessage) -> Ack {
        let now = self.sim.tick_index();
        let dt = self.sim.config().dt;
        // Future effective times are rounded up to the tick grid.
        let at = |t: Option<f64>| match t {
            Some(t) if t > now as f64 * dt => (t / dt - 1e-9).ceil() as u64,
            _ => now,
        };
        let mut tick = now;
        let outcome: Result<()> = match &cmd.kind {
            CommandKind::SetReference { mw, effective_t } => {
                tick = at(*effective_t);
                self.sim.reference_mut().set_from(tick as f64 * dt, *mw);
                Ok(())
            }
            CommandKind::UpdateConstraint {
                output,
                value,
                delta,
                effective_t,
            } => {
                tick = at(*effective_t);
                let t = tick as f64 * dt;
                let set = self.sim.constraints_mut();
                match set.outputs.iter_mut().find(|c| &c.output == output) {
                    Some(c) => {
                        let v = match (value, delta) {
                            (Some(v), _) => *v,
                            (None, Some(d)) => c.bound_at(t) + d,
                            (None, None) => c.bound_at(t),
                        };
                        c.set_from(t, v);
                        Ok(())
                    }
                    None => Err(Error::UnknownChannel(output.clone())),
                }
            }
            CommandKind::ToggleGovernor { enabled } => self.sim.set_governor_enabled(*enabled),
            CommandKind::Pause => {
                self.paused = true;
                Ok(())
            }
            CommandKind::Resume => {
                self.paused = false;
                Ok(())
            }
            CommandKind::SetSpeed { factor } => {
                self.speed = *factor;
                Ok(())
            }
            CommandKind::Noop => Ok(()),
        };
        match outcome {
            Ok(()) => {
                if cmd.kind != CommandKind::Noop {
                    // Logged at the tick it was applied, which is when a
                    // replay must apply it too.
                    self.log.push(LoggedCommand { tick: now, command: cmd.clone() });
                }
                Ack {
                    seq: cmd.seq,
                    accepted: true,
                    effective_tick: Some(tick),
                    error: None,
                }
            }
            Err(e) => {
                log::warn!("command seq {} failed: {e}", cmd.seq);
                Ack {
                    seq: cmd.seq,
                    accepted: false,
                    effective_tick: None,
                    error: Some(e.to_string()),
                }
            }
        }
    }

    /// Apply queued commands, then advance one tick unless paused or done.
    pub fn step(&mut self) -> Result<(Vec<Ack>, Option<TickRecord>)> {
        let acks = self.apply_pending();
        if self.paused || self.finished() {
            return Ok((acks, None));
        }
        let rec = self.sim.tick()?;
        self.last_frame = Some(self.frame(&rec));
        Ok((acks, Some(rec)))
    }

    pub fn frame(&self, rec: &TickRecord) -> TelemetryFrame {
        let t = rec.tick as f64 * self.sim.config().dt;
        let row = rec.state.to_row();
        let channels = |vals: &[f64; 14]| -> BTreeMap<String, f64> {
            OUTPUT_CHANNELS.iter().zip(vals).map(|(k, v)| (k.to_string(), *v)).collect()
        };
        let mut states: BTreeMap<String, f64> = PlantState::FIELDS[1..]
            .iter()
            .zip(&row[1..])
            .map(|(k, v)| (k.to_string(), *v))
            .collect();
        states.insert("ukf_rho".into(), rec.ukf_rho);
        let d = &rec.decision;
        TelemetryFrame {
            schema: TELEMETRY_SCHEMA,
            tick: rec.tick,
            t,
            states,
            measured: channels(&rec.measured),
            denoised: channels(&rec.denoised),
            governor: GovernorFrame {
                r: d.r,
                v: d.v,
                kappa: d.kappa,
                band: [finite(d.band.0), finite(d.band.1)],
                binding: d.binding.code(),
                infeasible: d.infeasible,
                enabled: self.sim.governor_enabled(),
            },
            constraints: self
                .sim
                .constraints()
                .outputs
                .iter()
                .zip(&rec.bounds)
                .map(|(c, b)| ConstraintFrame {
                    output: c.output.clone(),
                    sense: c.sense,
                    bound: *b,
                    schedule: c.schedule.clone(),
                })
                .collect(),
            paused: self.paused,
        }
    }
}

/// Re-run a scenario headless, applying each logged command before the tick
/// it took effect on.
pub fn replay(
    cfg: &ScenarioConfig,
    model: Option<StateSpaceModel>,
    log: &[LoggedCommand],
    ticks: usize,
) -> Result<Vec<TickRecord>> {
    let mut s = Session::new(cfg, model)?;
    let mut next = 0;
    let mut out = Vec::with_capacity(ticks);
    while out.len() < ticks && !s.finished() {
        let tick = s.sim.tick_index();
        while next < log.len() && log[next].tick <= tick {
            let ack = s.apply(log[next].command.clone());
            if !ack.accepted {
                return Err(Error::Config(format!("logged command seq {} no longer applies", ack.seq)));
            }
            next += 1;
        }
        // Pausing only holds wall-clock time; the replay keeps ticking.
        s.paused = false;
        out.push(s.sim.tick()?);
    }
    Ok(out)
}

/// Bounded buffer of recent frames.
#[derive(Debug, Clone)]
pub struct History {
    frames: VecDeque<TelemetryFrame>,
    capacity: usize,
}

impl History {
    pub fn new(capacity: usize) -> Self {
        Self {
            frames: VecDeque::with_capacity(capacity.min(1 << 16)),
            capacity: capacity.max(1),
        }
    }

    pub fn push(&mut self, f: TelemetryFrame) {
        if self.frames.len() == self.capacity {
            self.frames.pop_front();
        }
        self.frames.push_back(f);
    }

    /// Frames with `tick >= since`, at most `limit` of them.
    pub fn since(&self, since: u64, limit: usize) -> Vec<TelemetryFrame> {
        self.frames
            .iter()
            .filter(|f| f.tick >= since)
            .take(limit)
            .cloned()
            .collect()
    }

    /// Frames with `from <= tick < to`.
    pub fn range(&self, from: u64, to: u64) -> Vec<TelemetryFrame> {
        self.frames
            .iter()
            .filter(|f| (from..to).contains(&f.tick))
            .cloned()
            .collect()
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}
