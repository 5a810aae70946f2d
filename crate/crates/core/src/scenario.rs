//! Scenario configuration, the closed control loop, training data and PID
//! tuning.
//!
//! One tick runs, in order: plant step, measurement, Savitzky-Golay
//! smoothing of the measurements, the precursor observer (whose estimates are
//! smoothed as well), the reference governor, the three PI loops, and
//! actuation. Row `k` of a log holds the state at `t = k dt` and the
//! decisions taken from it.

use std::io::Write;
use std::path::Path;
use std::sync::mpsc;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::governor::{
    Binding, ConstraintSet, Disturbance, Governor, GovernorConfig, GovernorDecision, OutputConstraint, Sense,
};
use crate::linalg::RankRule;
use crate::pid::{gain_grid, pid_step, tracking_cost, tune_grid_search, PidGains, PidState, TuneReport};
use crate::plant::{measure, Actuation, NoiseSpec, Plant, PlantParams, PlantState, OUTPUT_CHANNELS};
use crate::sgf::{SgfConfig, SgfKernel, SgfStream};
use crate::sysid::{assemble_snapshots, fit, Centering, StateSpaceModel};
use crate::trajectory::{format_float, Trajectory};
use crate::ukf::{ObserverState, Ukf, UkfConfig};
use crate::{Error, Result};

pub const CONFIG_VERSION: u32 = 1;

/// Channel logged as the model input (admitted reactor power reference, MW).
pub const INPUT_CHANNEL: &str = "q_rx_ref";

/// Governor state list: eight mandatory process variables, three precursor
/// groups and the two heat-transfer rates.
pub const GOVERNOR_STATES: [&str; 13] = [
    "mdot_p",
    "mdot_s",
    "t_core_in",
    "t_core_out",
    "p_core_in",
    "p_core_out",
    "t_sec_in",
    "t_sec_out",
    "c1",
    "c2",
    "c3",
    "q_hx",
    "q_sg",
];

pub const MANDATORY_STATES: [&str; 8] = [
    "mdot_p",
    "mdot_s",
    "t_core_in",
    "t_core_out",
    "p_core_in",
    "p_core_out",
    "t_sec_in",
    "t_sec_out",
];

/// Piecewise-linear reactor power reference in MW. Two points at the same
/// time make a step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceProfile {
    pub points: Vec<RefPoint>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RefPoint {
    pub t: f64,
    pub mw: f64,
}

impl ReferenceProfile {
    pub fn constant(mw: f64) -> Self {
        Self {
            points: vec![RefPoint { t: 0.0, mw }],
        }
    }

    /// Hold `start` until `t0`, then ramp at `rate` MW/min to each level in
    /// turn, holding each until the given time.
    pub fn ramps(start: f64, t0: f64, rate_per_min: f64, legs: &[(f64, f64)]) -> Self {
        let mut points = vec![RefPoint { t: 0.0, mw: start }, RefPoint { t: t0, mw: start }];
        let mut t = t0;
        let mut level = start;
        for &(target, hold_until) in legs {
            t += (target - level).abs() / rate_per_min * 60.0;
            points.push(RefPoint { t, mw: target });
            level = target;
            if hold_until > t {
                t = hold_until;
                points.push(RefPoint { t, mw: target });
            }
        }
        Self { points }
    }

    pub fn validate(&self, rated: f64) -> Result<()> {
        if self.points.is_empty() {
            return Err(Error::Config("reference profile is empty".into()));
        }
        if self.points.windows(2).any(|w| w[1].t < w[0].t) {
            return Err(Error::Config("reference times must be non-decreasing".into()));
        }
        for p in &self.points {
            if !p.t.is_finite() || !(0.2 * rated - 1e-9..=rated + 1e-9).contains(&p.mw) {
                return Err(Error::Config(format!(
                    "reference point {} MW at t = {} outside [0.2, 1.0] x rated",
                    p.mw, p.t
                )));
            }
        }
        Ok(())
    }

    pub fn value_at(&self, t: f64) -> f64 {
        let idx = self.points.partition_point(|p| p.t <= t);
        if idx == 0 {
            return self.points[0].mw;
        }
        let a = self.points[idx - 1];
        match self.points.get(idx) {
            Some(b) if b.t > a.t => a.mw + (b.mw - a.mw) * (t - a.t) / (b.t - a.t),
            _ => a.mw,
        }
    }

    /// Step to `mw` at `t`, dropping everything scheduled after it.
    pub fn set_from(&mut self, t: f64, mw: f64) {
        let current = self.value_at(t);
        self.points.retain(|p| p.t < t);
        self.points.push(RefPoint { t, mw: current });
        self.points.push(RefPoint { t, mw });
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstraintMode {
    /// Schedule values are bounds in engineering units.
    Raw,
    /// Schedule values are fractions of the equilibrium shift between full
    /// power and `target_load`.
    Scaled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConstraintConfig {
    pub mode: ConstraintMode,
    #[serde(default = "default_target_load")]
    pub target_load: f64,
    pub rate_limit_per_min: f64,
    pub outputs: Vec<OutputConstraint>,
}

fn default_target_load() -> f64 {
    0.6
}

impl Default for ConstraintConfig {
    fn default() -> Self {
        use crate::governor::Breakpoint;
        Self {
            mode: ConstraintMode::Scaled,
            target_load: 0.6,
            rate_limit_per_min: 16.0,
            outputs: vec![
                OutputConstraint {
                    output: "t_sec_in".into(),
                    sense: Sense::Ge,
                    schedule: vec![
                        Breakpoint {
                            t: 0.0,
                            value: 1.77 / 2.2,
                        },
                        Breakpoint {
                            t: 700.0,
                            value: 2.02 / 2.2,
                        },
                    ],
                },
                OutputConstraint::constant("t_sec_out", Sense::Le, 5.43 / 6.0),
            ],
        }
    }
}

impl ConstraintConfig {
    /// Constraint set in engineering units for `plant`.
    pub fn resolve(&self, plant: &Plant) -> Result<ConstraintSet> {
        let outputs = match self.mode {
            ConstraintMode::Raw => self.outputs.clone(),
            ConstraintMode::Scaled => {
                let full = plant.steady_state(1.0)?;
                let part = plant.steady_state(self.target_load)?;
                self.outputs
                    .iter()
                    .map(|c| {
                        let a = full
                            .get(&c.output)
                            .ok_or_else(|| Error::UnknownChannel(c.output.clone()))?;
                        let b = part.get(&c.output).unwrap_or(a);
                        let mut out = c.clone();
                        for bp in &mut out.schedule {
                            bp.value = a + bp.value * (b - a);
                        }
                        Ok(out)
                    })
                    .collect::<Result<Vec<_>>>()?
            }
        };
        let set = ConstraintSet {
            outputs,
            rate_limit_per_min: self.rate_limit_per_min,
        };
        set.validate()?;
        Ok(set)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ControllerConfig {
    /// Normalized power -> external reactivity.
    pub power: PidGains,
    /// Core outlet temperature -> primary pump head.
    pub t_core_out: PidGains,
    /// Core inlet temperature -> secondary pump head.
    pub t_core_in: PidGains,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            power: PidGains {
                kp: 0.003,
                ki: 0.0006,
                kd: 0.0,
                out_min: -0.003,
                out_max: 0.003,
                integral_limit: 100.0,
                bias: 0.0,
                reverse: false,
            },
            t_core_out: PidGains {
                kp: 10.0,
                ki: 0.5,
                kd: 0.0,
                out_min: 100.0,
                out_max: 1600.0,
                integral_limit: 1e4,
                bias: 0.0,
                reverse: true,
            },
            t_core_in: PidGains {
                kp: 10.0,
                ki: 0.2,
                kd: 0.0,
                out_min: 40.0,
                out_max: 800.0,
                integral_limit: 1e4,
                bias: 0.0,
                reverse: true,
            },
        }
    }
}

impl ControllerConfig {
    pub fn validate(&self) -> Result<()> {
        self.power.validate("power controller")?;
        self.t_core_out.validate("core outlet controller")?;
        self.t_core_in.validate("core inlet controller")
    }
}

/// Where the governor's model comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Saved model document; when absent the model is fitted on the fly.
    pub path: Option<String>,
    /// Fixed SVD rank; the energy rule is used when absent.
    pub rank: Option<usize>,
    pub energy: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            path: None,
            rank: None,
            energy: 0.99999,
        }
    }
}

impl ModelConfig {
    pub fn rank_rule(&self) -> RankRule {
        match self.rank {
            Some(r) => RankRule::Fixed(r),
            None => RankRule::Energy(self.energy),
        }
    }
}

/// Position of the governor relative to the smoothing stage. Only used to
/// check that the wiring matters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Wiring {
    #[default]
    Standard,
    /// The governor sees the previous tick's smoothed state.
    GovernorBeforeSgf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    pub version: u32,
    pub name: String,
    pub duration: f64,
    pub dt: f64,
    pub initial_load: f64,
    pub plant: PlantParams,
    pub controllers: ControllerConfig,
    pub reference: ReferenceProfile,
    pub constraints: ConstraintConfig,
    pub governor: GovernorConfig,
    pub noise: NoiseSpec,
    pub noise_enabled: bool,
    /// Tighten output constraints by the 3-sigma measurement noise.
    pub robust_margin: bool,
    pub sgf: SgfConfig,
    pub ukf: UkfConfig,
    pub model: ModelConfig,
    pub seed: u64,
    pub wiring: Wiring,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        let plant = PlantParams::default();
        let rated = plant.anchors.q_rx_mw;
        Self {
            version: CONFIG_VERSION,
            name: "load-follow-100-60".into(),
            duration: 2000.0,
            dt: 0.2,
            initial_load: 1.0,
            controllers: ControllerConfig::default(),
            reference: ReferenceProfile::ramps(rated, 50.0, 0.05 * rated, &[(0.6 * rated, 0.0)]),
            constraints: ConstraintConfig::default(),
            governor: GovernorConfig::default(),
            noise: NoiseSpec::sensor_defaults(7),
            noise_enabled: false,
            robust_margin: false,
            sgf: SgfConfig::default(),
            ukf: UkfConfig::default(),
            model: ModelConfig::default(),
            seed: 7,
            wiring: Wiring::Standard,
            plant,
        }
    }
}

impl ScenarioConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ScenarioConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn ticks(&self) -> usize {
        (self.duration / self.dt).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "config version {} is not supported (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        if !(self.dt > 0.0 && self.dt.is_finite() && self.duration > 0.0 && self.duration.is_finite()) {
            return Err(Error::Config("duration and dt must be positive".into()));
        }
        let on_grid = |t: f64| ((t / self.dt).round() * self.dt - t).abs() < 1e-9 * t.abs().max(1.0);
        if !on_grid(self.duration) {
            return Err(Error::Config("dt must divide the duration".into()));
        }
        for c in &self.constraints.outputs {
            for bp in &c.schedule {
                if !on_grid(bp.t) {
                    return Err(Error::Config(format!(
                        "constraint breakpoint t = {} is not a multiple of dt",
                        bp.t
                    )));
                }
            }
        }
        if !(0.2..=1.0).contains(&self.initial_load) {
            return Err(Error::Config("initial_load must be in [0.2, 1.0]".into()));
        }
        if !(0.2..=1.0).contains(&self.constraints.target_load) {
            return Err(Error::Config("constraint target_load must be in [0.2, 1.0]".into()));
        }
        self.reference.validate(self.plant.anchors.q_rx_mw)?;
        self.controllers.validate()?;
        self.noise.validate()?;
        self.sgf.validate()?;
        self.plant.kinetics.validate()?;
        Ok(())
    }
}

/// Everything logged for one tick.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TickRecord {
    pub tick: u64,
    pub state: PlantState,
    pub measured: [f64; 14],
    /// Smoothed measurements; the precursor slots hold the smoothed observer
    /// estimates instead.
    pub denoised: [f64; 14],
    pub ukf_n: f64,
    pub ukf_c: [f64; 6],
    pub ukf_rho: f64,
    pub decision: GovernorDecision,
    /// Active constraint bounds (engineering units).
    pub bounds: Vec<f64>,
    pub actuation: Actuation,
}

impl TickRecord {
    /// Value of a smoothed governor channel by name.
    pub fn denoised_value(&self, name: &str) -> Option<f64> {
        OUTPUT_CHANNELS
            .iter()
            .position(|c| *c == name)
            .map(|i| self.denoised[i])
    }
}

/// Column names of the simulation log.
pub fn record_columns(constraint_outputs: &[String]) -> Vec<String> {
    let mut cols: Vec<String> = PlantState::FIELDS[1..].iter().map(|s| s.to_string()).collect();
    cols.extend(OUTPUT_CHANNELS.iter().map(|c| format!("meas_{c}")));
    cols.extend(OUTPUT_CHANNELS.iter().map(|c| format!("sgf_{c}")));
    cols.push("ukf_n".into());
    cols.extend((1..=6).map(|i| format!("ukf_c{i}")));
    cols.push("ukf_rho".into());
    for c in [INPUT_CHANNEL, "r", "kappa", "binding", "binding_step", "infeasible", "band_lo", "band_hi"] {
        cols.push(c.into());
    }
    cols.extend(constraint_outputs.iter().map(|o| format!("bound_{o}")));
    cols
}

fn binding_columns(b: &Binding) -> (f64, f64) {
    match b {
        Binding::None => (-2.0, -1.0),
        Binding::Rate => (-1.0, -1.0),
        Binding::Row { constraint, step } => (*constraint as f64, step.map(|s| s as f64).unwrap_or(-1.0)),
    }
}

impl TickRecord {
    /// Row matching [`record_columns`], without the leading time.
    pub fn row(&self, rated: f64) -> Vec<f64> {
        let mut row: Vec<f64> = self.state.to_row()[1..].to_vec();
        row.extend_from_slice(&self.measured);
        row.extend_from_slice(&self.denoised);
        row.push(self.ukf_n);
        row.extend_from_slice(&self.ukf_c);
        row.push(self.ukf_rho);
        let d = &self.decision;
        let (bind, step) = binding_columns(&d.binding);
        let clip = |v: f64| if v.is_nan() { -1.0 } else { v.clamp(0.0, 2.0 * rated) };
        row.extend_from_slice(&[
            d.v,
            d.r,
            d.kappa,
            bind,
            step,
            if d.infeasible { 1.0 } else { 0.0 },
            clip(d.band.0),
            clip(d.band.1),
        ]);
        row.extend_from_slice(&self.bounds);
        row
    }
}

/// True when both runs logged bit-identical rows (decision timing aside).
pub fn bit_identical(a: &[TickRecord], b: &[TickRecord], rated: f64) -> bool {
    a.len() == b.len()
        && a.iter().zip(b).all(|(x, y)| {
            x.tick == y.tick
                && x.row(rated)
                    .iter()
                    .zip(y.row(rated))
                    .all(|(p, q)| p.to_bits() == q.to_bits())
        })
}

/// Closed-loop simulation that can be advanced one tick at a time.
pub struct ClosedLoop {
    cfg: ScenarioConfig,
    plant: Plant,
    state: PlantState,
    actuation: Actuation,
    pid: [PidState; 3],
    gains: ControllerConfig,
    ukf: Option<(Ukf, ObserverState)>,
    filters: Vec<SgfStream>,
    ukf_filters: Vec<SgfStream>,
    governor: Option<Governor>,
    /// Constraint set used when there is no governor (for logging bounds).
    constraints: ConstraintSet,
    /// Source of each governor state: index into the smoothed measurement
    /// vector, or precursor group for `c1..c6`.
    sources: Vec<Source>,
    last_governor_input: Vec<f64>,
    rng: ChaCha8Rng,
    noise: NoiseSpec,
    reference: ReferenceProfile,
    v: f64,
    tick: u64,
    setpoints: (f64, f64),
}

#[derive(Debug, Clone, Copy)]
enum Source {
    Measured(usize),
    Precursor(usize),
}

impl ClosedLoop {
    /// Full loop. `model` is required when the governor is enabled and is
    /// otherwise optional (without it the governor is bypassed entirely).
    pub fn new(cfg: &ScenarioConfig, model: Option<StateSpaceModel>) -> Result<Self> {
        Self::build(cfg, model, true)
    }

    /// Plant and PI loops only, with `v = r`. Used for training data.
    pub fn plant_only(cfg: &ScenarioConfig) -> Result<Self> {
        Self::build(cfg, None, false)
    }

    fn build(cfg: &ScenarioConfig, model: Option<StateSpaceModel>, full: bool) -> Result<Self> {
        cfg.validate()?;
        let plant = Plant::new(cfg.plant.clone())?;
        let state = plant.steady_state(cfg.initial_load)?;
        let actuation = state.actuation();
        let mut gains = cfg.controllers.clone();
        gains.power.bias = actuation.rho_ext;
        gains.t_core_out.bias = actuation.head_primary;
        gains.t_core_in.bias = actuation.head_secondary;
        let noise = if cfg.noise_enabled {
            cfg.noise.clone()
        } else {
            NoiseSpec::zero()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let constraints = cfg.constraints.resolve(&plant)?;

        let mut sources = Vec::new();
        let governor = match (full, model) {
            (true, Some(model)) => {
                for name in &model.state_names {
                    let src = match name.strip_prefix('c').and_then(|g| g.parse::<usize>().ok()) {
                        Some(g) if (1..=6).contains(&g) => Source::Precursor(g - 1),
                        _ => Source::Measured(
                            OUTPUT_CHANNELS
                                .iter()
                                .position(|c| c == name)
                                .ok_or_else(|| Error::UnknownChannel(name.clone()))?,
                        ),
                    };
                    sources.push(src);
                }
                let disturbance = if cfg.robust_margin {
                    let margins: Vec<f64> = model.output_names.iter().map(|o| noise_margin(&cfg.noise, o)).collect();
                    Disturbance::output_margins(&model, &margins)?
                } else {
                    Disturbance::none(&model)
                };
                let v0 = cfg.reference.value_at(0.0);
                Some(Governor::new(model, constraints.clone(), cfg.governor.clone(), disturbance, v0)?)
            }
            (true, None) if cfg.governor.enabled => {
                return Err(Error::Config("governor is enabled but no model was given".into()))
            }
            _ => None,
        };

        let (ukf, filters, ukf_filters) = if full {
            let kernel = SgfKernel::new(&cfg.sgf)?;
            let ukf = Ukf::new(cfg.plant.kinetics.clone(), cfg.ukf.clone())?;
            let obs = ukf.start(state.n);
            let mut filters: Vec<SgfStream> = (0..OUTPUT_CHANNELS.len()).map(|_| SgfStream::new(kernel.clone())).collect();
            let mut ukf_filters: Vec<SgfStream> = (0..6).map(|_| SgfStream::new(kernel.clone())).collect();
            // The plant sat at the initial equilibrium before t = 0, so the
            // smoothing windows start full of pre-roll samples.
            let c0 = state.precursors();
            for _ in 1..cfg.sgf.window {
                let y = measure(&state, &noise, &mut rng);
                for (f, v) in filters.iter_mut().zip(y) {
                    f.push(v);
                }
                for (f, v) in ukf_filters.iter_mut().zip(c0) {
                    f.push(v);
                }
            }
            (Some((ukf, obs)), filters, ukf_filters)
        } else {
            (None, Vec::new(), Vec::new())
        };

        let v = cfg.reference.value_at(0.0);
        Ok(Self {
            setpoints: (cfg.plant.anchors.t_core_out, cfg.plant.anchors.t_core_in),
            last_governor_input: Vec::new(),
            reference: cfg.reference.clone(),
            cfg: cfg.clone(),
            plant,
            state,
            actuation,
            pid: [PidState::default(); 3],
            gains,
            ukf,
            filters,
            ukf_filters,
            governor,
            constraints,
            sources,
            rng,
            noise,
            v,
            tick: 0,
        })
    }

    pub fn config(&self) -> &ScenarioConfig {
        &self.cfg
    }

    pub fn state(&self) -> &PlantState {
        &self.state
    }

    pub fn tick_index(&self) -> u64 {
        self.tick
    }

    pub fn time(&self) -> f64 {
        self.tick as f64 * self.cfg.dt
    }

    pub fn reference_mut(&mut self) -> &mut ReferenceProfile {
        &mut self.reference
    }

    pub fn reference(&self) -> &ReferenceProfile {
        &self.reference
    }

    pub fn constraints(&self) -> &ConstraintSet {
        match &self.governor {
            Some(g) => &g.constraints,
            None => &self.constraints,
        }
    }

    /// Mutable constraint schedule (takes effect on the next tick).
    pub fn constraints_mut(&mut self) -> &mut ConstraintSet {
        match &mut self.governor {
            Some(g) => &mut g.constraints,
            None => &mut self.constraints,
        }
    }

    pub fn has_governor(&self) -> bool {
        self.governor.is_some()
    }

    pub fn governor_enabled(&self) -> bool {
        self.governor.as_ref().map(|g| g.config.enabled).unwrap_or(false)
    }

    pub fn set_governor_enabled(&mut self, on: bool) -> Result<()> {
        match &mut self.governor {
            Some(g) => {
                g.config.enabled = on;
                Ok(())
            }
            None if !on => Ok(()),
            None => Err(Error::Config("no governor model loaded".into())),
        }
    }

    pub fn constraint_outputs(&self) -> Vec<String> {
        self.constraints().outputs.iter().map(|c| c.output.clone()).collect()
    }

    pub fn columns(&self) -> Vec<String> {
        record_columns(&self.constraint_outputs())
    }

    /// Advance one tick and return its record.
    pub fn tick(&mut self) -> Result<TickRecord> {
        let dt = self.cfg.dt;
        if self.tick > 0 {
            self.state = self.plant.step(&self.state, &self.actuation, dt)?;
        }
        let t = self.time();
        let measured = measure(&self.state, &self.noise, &mut self.rng);

        let mut denoised = measured;
        let mut ukf_n = self.state.n;
        let mut ukf_c = self.state.precursors();
        let mut ukf_rho = self.state.rho_total;
        let mut gov_input = Vec::new();
        if let Some((ukf, obs)) = &mut self.ukf {
            if self.cfg.wiring == Wiring::GovernorBeforeSgf {
                gov_input = self.last_governor_input.clone();
            }
            for (i, f) in self.filters.iter_mut().enumerate() {
                denoised[i] = f.push(measured[i]);
            }
            let n_idx = OUTPUT_CHANNELS.len() - 1;
            let next = ukf.step(obs, measured[n_idx], dt).map_err(|e| match e {
                Error::NonFinite { what, .. } => Error::NonFinite { what, t },
                other => other,
            })?;
            *obs = next;
            ukf_n = obs.n();
            ukf_rho = obs.reactivity();
            let c = obs.precursors();
            for g in 0..6 {
                ukf_c[g] = self.ukf_filters[g].push(c[g]);
            }
            // Precursor slots of the denoised vector carry the estimates.
            for (g, ch) in ["c1", "c2", "c3"].iter().enumerate() {
                if let Some(i) = OUTPUT_CHANNELS.iter().position(|c| c == ch) {
                    denoised[i] = ukf_c[g];
                }
            }
            let current: Vec<f64> = self
                .sources
                .iter()
                .map(|s| match *s {
                    Source::Measured(i) => denoised[i],
                    Source::Precursor(g) => ukf_c[g],
                })
                .collect();
            if self.cfg.wiring == Wiring::Standard || gov_input.is_empty() {
                gov_input = current.clone();
            }
            self.last_governor_input = current;
        }

        let r = self.reference.value_at(t);
        let decision = match &mut self.governor {
            Some(g) => g.govern_tick(&gov_input, r, t, dt),
            None => GovernorDecision {
                kappa: 1.0,
                r,
                v: r,
                binding: Binding::None,
                infeasible: false,
                band: (f64::NEG_INFINITY, f64::INFINITY),
                micros: 0,
            },
        };
        self.v = decision.v;

        // PI loops on the raw measurements.
        let rated = self.cfg.plant.anchors.q_rx_mw;
        let idx = |name: &str| OUTPUT_CHANNELS.iter().position(|c| *c == name).expect("known channel");
        let (rho, p0) = pid_step(&self.gains.power, &self.pid[0], self.v / rated, measured[idx("n")], dt);
        let (head_p, p1) = pid_step(
            &self.gains.t_core_out,
            &self.pid[1],
            self.setpoints.0,
            measured[idx("t_core_out")],
            dt,
        );
        let (head_s, p2) = pid_step(
            &self.gains.t_core_in,
            &self.pid[2],
            self.setpoints.1,
            measured[idx("t_core_in")],
            dt,
        );
        self.pid = [p0, p1, p2];
        self.actuation = Actuation {
            rho_ext: rho,
            head_primary: head_p,
            head_secondary: head_s,
        };

        let bounds = self.constraints().bounds_at(t);
        let record = TickRecord {
            tick: self.tick,
            state: self.state,
            measured,
            denoised,
            ukf_n,
            ukf_c,
            ukf_rho,
            decision,
            bounds,
            actuation: self.actuation,
        };
        self.tick += 1;
        Ok(record)
    }
}

fn noise_margin(noise: &NoiseSpec, output: &str) -> f64 {
    noise.three_sigma(output)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub name: String,
    pub ticks: usize,
    pub max_abs_t_core_in_error: f64,
    pub max_abs_t_core_out_error: f64,
    /// Same, over the last quarter of the run.
    pub settled_t_core_in_error: f64,
    pub settled_t_core_out_error: f64,
    pub min_t_sec_in: f64,
    pub max_t_sec_out: f64,
    /// Ticks where a constraint was violated by more than 0.1 of its unit.
    pub violations: usize,
    pub peak_rho_ext_dollars: f64,
    pub first_intervention_t: Option<f64>,
    pub final_v: f64,
    pub max_governor_micros: u64,
    pub wall_clock_s: f64,
}

/// Result of a scenario run.
pub struct RunOutput {
    pub records: Vec<TickRecord>,
    pub columns: Vec<String>,
    pub summary: RunSummary,
}

impl RunOutput {
    pub fn trajectory(&self, dt: f64, rated: f64) -> Result<Trajectory> {
        let mut traj = Trajectory::with_capacity("run", self.columns.clone(), self.records.len());
        for r in &self.records {
            traj.push(r.tick as f64 * dt, &r.row(rated))?;
        }
        Ok(traj)
    }
}

/// Writes log rows on a background thread in the order they are sent.
pub struct LogWriter {
    tx: Option<mpsc::Sender<Vec<f64>>>,
    handle: Option<std::thread::JoinHandle<Result<()>>>,
}

impl LogWriter {
    pub fn create(path: impl AsRef<Path>, columns: &[String]) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let file = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        let (tx, rx) = mpsc::channel::<Vec<f64>>();
        let mut header = String::from("t");
        for c in columns {
            header.push(',');
            header.push_str(c);
        }
        let handle = std::thread::spawn(move || -> Result<()> {
            let mut w = std::io::BufWriter::new(file);
            writeln!(w, "{header}").map_err(|e| Error::io(&path, e))?;
            let mut line = String::new();
            for row in rx {
                line.clear();
                for (i, v) in row.iter().enumerate() {
                    if i > 0 {
                        line.push(',');
                    }
                    line.push_str(&format_float(*v));
                }
                writeln!(w, "{line}").map_err(|e| Error::io(&path, e))?;
            }
            w.flush().map_err(|e| Error::io(&path, e))
        });
        Ok(Self {
            tx: Some(tx),
            handle: Some(handle),
        })
    }

    /// Queue a row whose first value is the time.
    pub fn send(&self, row: Vec<f64>) {
        if let Some(tx) = &self.tx {
            // A closed channel means the writer failed; `finish` reports it.
            let _ = tx.send(row);
        }
    }

    pub fn finish(mut self) -> Result<()> {
        drop(self.tx.take());
        match self.handle.take().map(|h| h.join()) {
            Some(Ok(r)) => r,
            Some(Err(_)) => Err(Error::Numeric("log writer thread panicked".into())),
            None => Ok(()),
        }
    }
}

/// Run a scenario to completion, optionally streaming the log to `log_path`.
pub fn run_scenario(
    cfg: &ScenarioConfig,
    model: Option<StateSpaceModel>,
    log_path: Option<&Path>,
) -> Result<RunOutput> {
    let start = Instant::now();
    let mut sim = ClosedLoop::new(cfg, model)?;
    let columns = sim.columns();
    let rated = cfg.plant.anchors.q_rx_mw;
    let writer = log_path.map(|p| LogWriter::create(p, &columns)).transpose()?;
    let n = cfg.ticks();
    let mut records = Vec::with_capacity(n);
    for _ in 0..n {
        let rec = sim.tick()?;
        if let Some(w) = &writer {
            let mut row = vec![rec.tick as f64 * cfg.dt];
            row.extend(rec.row(rated));
            w.send(row);
        }
        records.push(rec);
    }
    if let Some(w) = writer {
        w.finish()?;
    }
    let summary = summarize(cfg, &sim, &records, start.elapsed().as_secs_f64());
    Ok(RunOutput {
        records,
        columns,
        summary,
    })
}

fn summarize(cfg: &ScenarioConfig, sim: &ClosedLoop, records: &[TickRecord], wall: f64) -> RunSummary {
    let a = &cfg.plant.anchors;
    let settle_from = records.len() * 3 / 4;
    let err_in = |r: &TickRecord| (r.state.t_core_in - a.t_core_in).abs();
    let err_out = |r: &TickRecord| (r.state.t_core_out - a.t_core_out).abs();
    let fold_max = |f: &dyn Fn(&TickRecord) -> f64, from: usize| {
        records[from..].iter().map(f).fold(0.0_f64, f64::max)
    };
    let outputs = sim.constraints().outputs.clone();
    let violations = records
        .iter()
        .filter(|r| {
            outputs.iter().zip(&r.bounds).any(|(c, b)| {
                let y = r.state.get(&c.output).unwrap_or(f64::NAN);
                match c.sense {
                    Sense::Ge => y < b - 0.1,
                    Sense::Le => y > b + 0.1,
                }
            })
        })
        .count();
    let beta = cfg.plant.kinetics.beta_total();
    RunSummary {
        name: cfg.name.clone(),
        ticks: records.len(),
        max_abs_t_core_in_error: fold_max(&err_in, 0),
        max_abs_t_core_out_error: fold_max(&err_out, 0),
        settled_t_core_in_error: fold_max(&err_in, settle_from),
        settled_t_core_out_error: fold_max(&err_out, settle_from),
        min_t_sec_in: records.iter().map(|r| r.state.t_sec_in).fold(f64::INFINITY, f64::min),
        max_t_sec_out: records.iter().map(|r| r.state.t_sec_out).fold(f64::NEG_INFINITY, f64::max),
        violations,
        peak_rho_ext_dollars: records.iter().map(|r| (r.state.rho_ext / beta).abs()).fold(0.0, f64::max),
        first_intervention_t: first_intervention(records).map(|k| records[k].tick as f64 * cfg.dt),
        final_v: records.last().map(|r| r.decision.v).unwrap_or(f64::NAN),
        max_governor_micros: records.iter().map(|r| r.decision.micros).max().unwrap_or(0),
        wall_clock_s: wall,
    }
}

/// Index of the first tick where an output constraint row held kappa below 1.
pub fn first_intervention(records: &[TickRecord]) -> Option<usize> {
    records
        .iter()
        .position(|r| r.decision.binding.is_row() && r.decision.kappa < 1.0)
}

/// One training profile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Excitation {
    pub name: String,
    pub reference: ReferenceProfile,
}

/// The 22 excitation profiles used to fit the governor model.
pub fn training_profiles(rated: f64) -> Vec<Excitation> {
    let pct = |p: f64| rated * p / 100.0;
    let rate5 = pct(5.0);
    let mut out = Vec::new();
    for depth in [5.0, 10.0, 15.0, 20.0, 25.0, 30.0, 35.0, 40.0] {
        out.push(Excitation {
            name: format!("cycle_{depth:.0}"),
            reference: ReferenceProfile::ramps(
                rated,
                50.0,
                rate5,
                &[(pct(100.0 - depth), 1000.0), (rated, 0.0)],
            ),
        });
    }
    for depth in [15.0, 25.0, 35.0, 45.0] {
        out.push(Excitation {
            name: format!("fast_{depth:.0}"),
            reference: ReferenceProfile::ramps(rated, 50.0, pct(10.0), &[(pct(100.0 - depth), 0.0)]),
        });
    }
    for depth in [10.0, 20.0, 30.0, 40.0] {
        out.push(Excitation {
            name: format!("slow_{depth:.0}"),
            reference: ReferenceProfile::ramps(rated, 50.0, pct(2.5), &[(pct(100.0 - depth), 0.0)]),
        });
    }
    for depth in [2.0, 5.0, 10.0] {
        let mut reference = ReferenceProfile::constant(rated);
        reference.set_from(50.0, pct(100.0 - depth));
        out.push(Excitation {
            name: format!("step_{depth:.0}"),
            reference,
        });
    }
    out.push(Excitation {
        name: "stairs_a".into(),
        reference: ReferenceProfile::ramps(
            rated,
            50.0,
            rate5,
            &[(pct(80.0), 600.0), (pct(90.0), 1100.0), (pct(70.0), 0.0)],
        ),
    });
    out.push(Excitation {
        name: "stairs_b".into(),
        reference: ReferenceProfile::ramps(
            rated,
            100.0,
            pct(7.5),
            &[(pct(85.0), 500.0), (pct(95.0), 900.0), (pct(65.0), 1500.0), (pct(75.0), 0.0)],
        ),
    });
    out.push(Excitation {
        name: "hold".into(),
        reference: ReferenceProfile::constant(rated),
    });
    out
}

/// Held-out validation profile: 100% to 60% at 5%/min, then hold.
pub fn validation_profile(rated: f64) -> Excitation {
    Excitation {
        name: "ramp_40".into(),
        reference: ReferenceProfile::ramps(rated, 50.0, 0.05 * rated, &[(0.6 * rated, 0.0)]),
    }
}

/// Channels of a training trajectory: every plant state field plus the
/// model input.
pub fn training_columns() -> Vec<String> {
    let mut c: Vec<String> = PlantState::FIELDS[1..].iter().map(|s| s.to_string()).collect();
    c.push(INPUT_CHANNEL.into());
    c
}

/// Run the plant with its PI loops under `profile` (no governor, no noise).
pub fn simulate_profile(cfg: &ScenarioConfig, profile: &Excitation) -> Result<Trajectory> {
    let mut c = cfg.clone();
    c.reference = profile.reference.clone();
    c.noise_enabled = false;
    c.governor.enabled = false;
    let mut sim = ClosedLoop::plant_only(&c)?;
    let n = c.ticks();
    let mut traj = Trajectory::with_capacity(profile.name.clone(), training_columns(), n);
    let mut row = Vec::with_capacity(PlantState::FIELDS.len());
    for _ in 0..n {
        let rec = sim.tick()?;
        row.clear();
        row.extend_from_slice(&rec.state.to_row()[1..]);
        row.push(rec.decision.v);
        traj.push(rec.tick as f64 * c.dt, &row)?;
    }
    Ok(traj)
}

/// Simulate every profile in parallel. Profiles whose run diverges are
/// skipped with a warning.
pub fn generate_training_set(cfg: &ScenarioConfig, profiles: &[Excitation]) -> Vec<Trajectory> {
    profiles
        .par_iter()
        .filter_map(|p| match simulate_profile(cfg, p) {
            Ok(t) => Some(t),
            Err(e) => {
                log::warn!("profile `{}` skipped: {e}", p.name);
                None
            }
        })
        .collect()
}

/// Fit the governor model on `trajectories`.
pub fn fit_model(trajectories: &[Trajectory], states: &[String], rank: RankRule) -> Result<StateSpaceModel> {
    let snaps = assemble_snapshots(trajectories, states, &[INPUT_CHANNEL.to_string()], &Centering::FirstSample)?;
    fit(&snaps, rank)
}

pub fn governor_states() -> Vec<String> {
    GOVERNOR_STATES.iter().map(|s| s.to_string()).collect()
}

/// Model named by the config, or one fitted on a freshly generated training
/// set.
pub fn load_or_fit_model(cfg: &ScenarioConfig) -> Result<StateSpaceModel> {
    match &cfg.model.path {
        Some(p) => StateSpaceModel::load(p),
        None => {
            let profiles = training_profiles(cfg.plant.anchors.q_rx_mw);
            let data = generate_training_set(cfg, &profiles);
            fit_model(&data, &governor_states(), cfg.model.rank_rule())
        }
    }
}

/// Which PI loop to tune.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoopId {
    Power,
    CoreOutlet,
    CoreInlet,
}

/// Grid-search one loop's `(kp, ki)` on the configured reference with the
/// governor off, keeping the other loops at their configured gains.
pub fn tune_loop(cfg: &ScenarioConfig, which: LoopId, kp: &[f64], ki: &[f64]) -> Result<TuneReport> {
    let grid = gain_grid(kp, ki);
    let a = cfg.plant.anchors.clone();
    let rated = a.q_rx_mw;
    tune_grid_search(&grid, |p, i| {
        let mut c = cfg.clone();
        c.governor.enabled = false;
        c.noise_enabled = false;
        let g = match which {
            LoopId::Power => &mut c.controllers.power,
            LoopId::CoreOutlet => &mut c.controllers.t_core_out,
            LoopId::CoreInlet => &mut c.controllers.t_core_in,
        };
        *g = g.with_gains(p, i);
        let mut sim = ClosedLoop::plant_only(&c).ok()?;
        let mut errors = Vec::with_capacity(c.ticks());
        for _ in 0..c.ticks() {
            let rec = sim.tick().ok()?;
            let e = match which {
                LoopId::Power => rec.decision.v / rated - rec.state.n,
                LoopId::CoreOutlet => a.t_core_out - rec.state.t_core_out,
                LoopId::CoreInlet => a.t_core_in - rec.state.t_core_in,
            };
            if !e.is_finite() || e.abs() > 50.0 {
                return None;
            }
            errors.push(e);
        }
        // Growing oscillation at the end of the run counts as unstable.
        let tail = &errors[errors.len() * 9 / 10..];
        let mid = &errors[errors.len() * 8 / 10..errors.len() * 9 / 10];
        let amp = |s: &[f64]| s.iter().fold(0.0_f64, |m, e| m.max(e.abs()));
        if amp(tail) > 1.5 * amp(mid) + 1e-6 {
            return None;
        }
        Some(tracking_cost(&errors, c.dt, 100.0))
    })
}
