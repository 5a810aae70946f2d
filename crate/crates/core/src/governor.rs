//! Scalar reference governor.
//!
//! The admissible set is the finite-horizon maximal output admissible set of
//! the identified model under a held input `v`:
//!
//! ```text
//! s (C A^k x + (C G_k B + D) v) <= s b - t_k,   k = 0..T
//! s (C (I - A)^-1 B + D) v      <= (s b - t_inf)(1 - eps)
//! ```
//!
//! with `G_k = sum_{j<k} A^j`, `s = +1` for upper bounds and `-1` for lower
//! bounds, and `t_k` the worst-case effect of a disturbance `w in [-1, 1]`
//! entering through `B_w` and `D_w`. Everything is in the model's normalized
//! coordinates; bounds and inputs are converted at the boundary.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::sysid::StateSpaceModel;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sense {
    /// `y <= bound`
    Le,
    /// `y >= bound`
    Ge,
}

impl Sense {
    fn sign(self) -> f64 {
        match self {
            Sense::Le => 1.0,
            Sense::Ge => -1.0,
        }
    }
}

/// Bound value that takes effect at `t` seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Breakpoint {
    pub t: f64,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputConstraint {
    /// Model output name.
    pub output: String,
    pub sense: Sense,
    /// Piecewise-constant schedule sorted by time; the first entry applies
    /// from `t = -inf`.
    pub schedule: Vec<Breakpoint>,
}

impl OutputConstraint {
    pub fn constant(output: impl Into<String>, sense: Sense, value: f64) -> Self {
        Self {
            output: output.into(),
            sense,
            schedule: vec![Breakpoint { t: 0.0, value }],
        }
    }

    pub fn bound_at(&self, t: f64) -> f64 {
        let mut v = self.schedule[0].value;
        for bp in &self.schedule {
            if bp.t <= t {
                v = bp.value;
            } else {
                break;
            }
        }
        v
    }

    /// Replace the schedule from `t` onwards with `value`.
    pub fn set_from(&mut self, t: f64, value: f64) {
        self.schedule.retain(|bp| bp.t < t);
        self.schedule.push(Breakpoint { t, value });
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintSet {
    pub outputs: Vec<OutputConstraint>,
    /// Bound on |dv/dt| of the admitted reference, in input units per minute.
    pub rate_limit_per_min: f64,
}

impl ConstraintSet {
    pub fn validate(&self) -> Result<()> {
        for c in &self.outputs {
            if c.schedule.is_empty() {
                return Err(Error::Config(format!(
                    "constraint on `{}` has an empty schedule",
                    c.output
                )));
            }
            if c.schedule.iter().any(|bp| !bp.value.is_finite() || !bp.t.is_finite()) {
                return Err(Error::Config(format!(
                    "constraint on `{}` has a non-finite breakpoint",
                    c.output
                )));
            }
            if c.schedule.windows(2).any(|w| w[1].t <= w[0].t) {
                return Err(Error::Config(format!(
                    "constraint schedule for `{}` must be strictly increasing in time",
                    c.output
                )));
            }
        }
        if !(self.rate_limit_per_min > 0.0) {
            return Err(Error::Config("rate limit must be > 0 (use inf to disable)".into()));
        }
        Ok(())
    }

    pub fn bounds_at(&self, t: f64) -> Vec<f64> {
        self.outputs.iter().map(|c| c.bound_at(t)).collect()
    }

    pub fn rate_per_tick(&self, dt: f64) -> f64 {
        self.rate_limit_per_min * dt / 60.0
    }
}

/// Scalar disturbance `w in [-1, 1]` entering through `B_w` (n) and `D_w`
/// (one entry per model output), both in normalized units.
#[derive(Debug, Clone, PartialEq)]
pub struct Disturbance {
    pub b_w: DVector<f64>,
    pub d_w: DVector<f64>,
}

impl Disturbance {
    pub fn none(model: &StateSpaceModel) -> Self {
        Self {
            b_w: DVector::zeros(model.n_states()),
            d_w: DVector::zeros(model.c.nrows()),
        }
    }

    /// Output-side margins given in engineering units, one per model output.
    pub fn output_margins(model: &StateSpaceModel, margins: &[f64]) -> Result<Self> {
        if margins.len() != model.c.nrows() {
            return Err(Error::Dimension(format!(
                "{} margins for {} outputs",
                margins.len(),
                model.c.nrows()
            )));
        }
        let mut d_w = DVector::zeros(margins.len());
        for (j, m) in margins.iter().enumerate() {
            d_w[j] = m.abs() / output_scale(model, j)?;
        }
        Ok(Self {
            b_w: DVector::zeros(model.n_states()),
            d_w,
        })
    }
}

fn output_scale(model: &StateSpaceModel, j: usize) -> Result<f64> {
    Ok(model.state_norm.scale[model.state_index(&model.output_names[j])?])
}

fn output_center(model: &StateSpaceModel, j: usize) -> Result<f64> {
    Ok(model.state_norm.center[model.state_index(&model.output_names[j])?])
}

/// Which inequality a row came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowTag {
    /// Index into the constraint list.
    pub constraint: usize,
    /// Prediction step, or `None` for the steady-state row.
    pub step: Option<usize>,
}

/// `H_x x + H_v v <= h` in normalized coordinates.
#[derive(Debug, Clone)]
pub struct AdmissibleSet {
    pub hx: DMatrix<f64>,
    pub hv: DVector<f64>,
    pub h: DVector<f64>,
    pub tags: Vec<RowTag>,
    pub horizon: usize,
    pub epsilon: f64,
    /// Engineering-unit bounds the set was built for.
    pub bounds: Vec<f64>,
    input_center: f64,
    input_scale: f64,
}

/// A constraint row resolved at one time.
#[derive(Debug, Clone, PartialEq)]
pub struct ActiveConstraint {
    pub output: String,
    pub sense: Sense,
    pub bound: f64,
}

/// Build the admissible set for `constraints` (bounds in engineering units).
pub fn build_admissible_set(
    model: &StateSpaceModel,
    constraints: &[ActiveConstraint],
    horizon: usize,
    epsilon: f64,
    disturbance: &Disturbance,
) -> Result<AdmissibleSet> {
    if model.n_inputs() != 1 {
        return Err(Error::Dimension(format!(
            "scalar governor needs one input, model has {}",
            model.n_inputs()
        )));
    }
    if horizon == 0 {
        return Err(Error::Config("governor horizon must be >= 1".into()));
    }
    if !(0.0..1.0).contains(&epsilon) {
        return Err(Error::Config("epsilon must be in [0, 1)".into()));
    }
    if disturbance.b_w.iter().chain(disturbance.d_w.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Config("disturbance bounds must be finite".into()));
    }
    let n = model.n_states();
    let a = &model.a;
    let b = model.b.column(0).into_owned();
    let rows_per = horizon + 2;
    let total = constraints.len() * rows_per;
    let mut hx = DMatrix::zeros(total, n);
    let mut hv = DVector::zeros(total);
    let mut h = DVector::zeros(total);
    let mut tags = Vec::with_capacity(total);

    // Steady-state gain (I - A)^-1 B.
    let ss_gain = (DMatrix::identity(n, n) - a)
        .lu()
        .solve(&b)
        .ok_or_else(|| Error::Numeric("I - A is singular; model has a unit eigenvalue".into()))?;

    for (ci, con) in constraints.iter().enumerate() {
        let j = model
            .output_names
            .iter()
            .position(|o| *o == con.output)
            .ok_or_else(|| Error::UnknownChannel(con.output.clone()))?;
        let s = con.sense.sign();
        let b_norm = (con.bound - output_center(model, j)?) / output_scale(model, j)?;
        let rhs = s * b_norm;
        let c_row = model.c.row(j).into_owned();
        let d = model.d[(j, 0)];
        let d_w = disturbance.d_w[j].abs();

        // c A^k, c G_k B and the accumulated disturbance, advanced together.
        let mut ca = c_row.clone();
        let mut cgb = 0.0;
        let mut acc_w = 0.0;
        for k in 0..=horizon {
            let r = ci * rows_per + k;
            hx.row_mut(r).copy_from(&(&ca * s));
            hv[r] = s * (cgb + d);
            h[r] = rhs - acc_w - d_w;
            tags.push(RowTag {
                constraint: ci,
                step: Some(k),
            });
            cgb += (&ca * &b)[(0, 0)];
            acc_w += (&ca * &disturbance.b_w)[(0, 0)].abs();
            ca = &ca * a;
        }
        let r = ci * rows_per + horizon + 1;
        let ss_rhs = rhs - acc_w - d_w;
        hv[r] = s * ((&c_row * &ss_gain)[(0, 0)] + d);
        h[r] = ss_rhs - epsilon * ss_rhs.abs();
        tags.push(RowTag {
            constraint: ci,
            step: None,
        });
    }

    let set = AdmissibleSet {
        hx,
        hv,
        h,
        tags,
        horizon,
        epsilon,
        bounds: constraints.iter().map(|c| c.bound).collect(),
        input_center: model.input_norm.center[0],
        input_scale: model.input_norm.scale[0],
    };

    // Some held input must satisfy every steady-state row.
    let (lo, hi, lo_row, hi_row) = set.interval(|r| set.tags[r].step.is_none(), |_| 0.0);
    if lo > hi {
        let tag = set.tags[hi_row.or(lo_row).unwrap_or(0)];
        return Err(Error::Infeasible(format!(
            "no equilibrium input satisfies constraint {} (`{}`); steady-state range is [{lo}, {hi}]",
            tag.constraint, constraints[tag.constraint].output
        )));
    }
    Ok(set)
}

impl AdmissibleSet {
    pub fn len(&self) -> usize {
        self.h.len()
    }

    pub fn is_empty(&self) -> bool {
        self.h.is_empty()
    }

    fn to_norm_input(&self, v: f64) -> f64 {
        (v - self.input_center) / self.input_scale
    }

    fn to_input(&self, z: f64) -> f64 {
        z * self.input_scale + self.input_center
    }

    /// Normalized `[lo, hi]` from rows passing `keep`, where
    /// `offset(row)` is `H_x x` for that row. Also returns the limiting rows.
    fn interval(
        &self,
        keep: impl Fn(usize) -> bool,
        offset: impl Fn(usize) -> f64,
    ) -> (f64, f64, Option<usize>, Option<usize>) {
        let (mut lo, mut hi) = (f64::NEG_INFINITY, f64::INFINITY);
        let (mut lo_row, mut hi_row) = (None, None);
        for r in 0..self.len() {
            if !keep(r) {
                continue;
            }
            let coef = self.hv[r];
            let slack = self.h[r] - offset(r);
            if coef > 1e-14 {
                let v = slack / coef;
                if v < hi {
                    hi = v;
                    hi_row = Some(r);
                }
            } else if coef < -1e-14 {
                let v = slack / coef;
                if v > lo {
                    lo = v;
                    lo_row = Some(r);
                }
            } else if slack < 0.0 {
                // Row violated whatever the input.
                lo = f64::INFINITY;
                hi = f64::NEG_INFINITY;
                lo_row = Some(r);
                hi_row = Some(r);
            }
        }
        (lo, hi, lo_row, hi_row)
    }

    fn hx_times(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.hx * x
    }

    /// Admissible held inputs at normalized state `x`, in input units.
    pub fn band(&self, x: &DVector<f64>) -> (f64, f64) {
        let hxx = self.hx_times(x);
        let (lo, hi, _, _) = self.interval(|_| true, |r| hxx[r]);
        (self.to_input(lo), self.to_input(hi))
    }

    /// Whether `(x, v)` satisfies every row to within `tol`.
    pub fn contains(&self, x: &DVector<f64>, v: f64, tol: f64) -> bool {
        let z = self.to_norm_input(v);
        let lhs = self.hx_times(x) + &self.hv * z;
        (0..self.len()).all(|r| lhs[r] <= self.h[r] + tol)
    }
}

/// What limited kappa.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Binding {
    None,
    Rate,
    Row { constraint: usize, step: Option<usize> },
}

impl Binding {
    pub fn is_row(&self) -> bool {
        matches!(self, Binding::Row { .. })
    }

    /// Compact text form for logs: `none`, `rate`, `c0@17`, `c1@ss`.
    pub fn code(&self) -> String {
        match self {
            Binding::None => "none".into(),
            Binding::Rate => "rate".into(),
            Binding::Row { constraint, step } => match step {
                Some(k) => format!("c{constraint}@{k}"),
                None => format!("c{constraint}@ss"),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GovernorDecision {
    pub kappa: f64,
    pub r: f64,
    pub v: f64,
    pub binding: Binding,
    /// The current state violated the set at `kappa = 0`.
    pub infeasible: bool,
    /// Admissible held-input range at this state.
    pub band: (f64, f64),
    pub micros: u64,
}

/// Largest `kappa in [0, 1]` such that `v_prev + kappa (r - v_prev)` keeps
/// `(x, v)` in the set and `|kappa (r - v_prev)| <= rate_bound`.
pub fn compute_kappa(
    set: &AdmissibleSet,
    x: &DVector<f64>,
    v_prev: f64,
    r: f64,
    rate_bound: f64,
) -> GovernorDecision {
    let start = Instant::now();
    let band = set.band(x);
    let delta = r - v_prev;
    let mut kappa = 1.0;
    let mut binding = Binding::None;
    let mut infeasible = false;
    if delta != 0.0 {
        if delta.abs() > rate_bound {
            kappa = rate_bound / delta.abs();
            binding = Binding::Rate;
        }
        let z_prev = set.to_norm_input(v_prev);
        let dz = delta / set.input_scale;
        let hxx = set.hx_times(x);
        for row in 0..set.len() {
            let slack = set.h[row] - hxx[row] - set.hv[row] * z_prev;
            if slack < -1e-9 {
                infeasible = true;
                kappa = 0.0;
                binding = Binding::Row {
                    constraint: set.tags[row].constraint,
                    step: set.tags[row].step,
                };
                break;
            }
            let coef = set.hv[row] * dz;
            if coef > 1e-14 && coef * kappa > slack {
                kappa = (slack / coef).max(0.0);
                binding = Binding::Row {
                    constraint: set.tags[row].constraint,
                    step: set.tags[row].step,
                };
            }
        }
    }
    GovernorDecision {
        kappa,
        r,
        v: v_prev + kappa * delta,
        binding,
        infeasible,
        band,
        micros: start.elapsed().as_micros() as u64,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GovernorConfig {
    pub horizon: usize,
    pub epsilon: f64,
    pub enabled: bool,
}

impl Default for GovernorConfig {
    fn default() -> Self {
        Self {
            horizon: 2500,
            epsilon: 1e-4,
            enabled: true,
        }
    }
}

/// Stateful governor: holds `v_{k-1}` and the set for the active bounds.
#[derive(Debug, Clone)]
pub struct Governor {
    model: StateSpaceModel,
    pub constraints: ConstraintSet,
    pub config: GovernorConfig,
    disturbance: Disturbance,
    cache: Option<AdmissibleSet>,
    v_prev: f64,
    rebuilds: usize,
}

impl Governor {
    pub fn new(
        model: StateSpaceModel,
        constraints: ConstraintSet,
        config: GovernorConfig,
        disturbance: Disturbance,
        v0: f64,
    ) -> Result<Self> {
        model.validate()?;
        constraints.validate()?;
        for c in &constraints.outputs {
            if !model.output_names.contains(&c.output) {
                return Err(Error::UnknownChannel(c.output.clone()));
            }
        }
        if model.spectral_radius >= 1.0 {
            return Err(Error::Numeric(format!(
                "model is not stable (spectral radius {})",
                model.spectral_radius
            )));
        }
        Ok(Self {
            model,
            constraints,
            config,
            disturbance,
            cache: None,
            v_prev: v0,
            rebuilds: 0,
        })
    }

    pub fn model(&self) -> &StateSpaceModel {
        &self.model
    }

    pub fn v_prev(&self) -> f64 {
        self.v_prev
    }

    /// Number of admissible-set constructions so far.
    pub fn rebuilds(&self) -> usize {
        self.rebuilds
    }

    pub fn active(&self, t: f64) -> Vec<ActiveConstraint> {
        self.constraints
            .outputs
            .iter()
            .map(|c| ActiveConstraint {
                output: c.output.clone(),
                sense: c.sense,
                bound: c.bound_at(t),
            })
            .collect()
    }

    /// Set for the bounds active at `t`, rebuilt when they change.
    pub fn set_at(&mut self, t: f64) -> Result<&AdmissibleSet> {
        let bounds = self.constraints.bounds_at(t);
        let stale = self.cache.as_ref().map(|s| s.bounds != bounds).unwrap_or(true);
        if stale {
            let set = build_admissible_set(
                &self.model,
                &self.active(t),
                self.config.horizon,
                self.config.epsilon,
                &self.disturbance,
            )?;
            self.cache = Some(set);
            self.rebuilds += 1;
        }
        Ok(self.cache.as_ref().expect("cache filled above"))
    }

    /// One governor tick at time `t` with state `x` in engineering units.
    pub fn govern_tick(&mut self, x: &[f64], r: f64, t: f64, dt: f64) -> GovernorDecision {
        let v_prev = self.v_prev;
        let z = self.model.normalize_state(x);
        let rate = self.constraints.rate_per_tick(dt);
        let enabled = self.config.enabled;
        let decision = match self.set_at(t) {
            Ok(set) if enabled => compute_kappa(set, &z, v_prev, r, rate),
            Ok(set) => GovernorDecision {
                kappa: 1.0,
                r,
                v: r,
                binding: Binding::None,
                infeasible: false,
                band: set.band(&z),
                micros: 0,
            },
            Err(e) => {
                log::error!("admissible set unavailable at t = {t}: {e}");
                let v = if enabled { v_prev } else { r };
                GovernorDecision {
                    kappa: if enabled { 0.0 } else { 1.0 },
                    r,
                    v,
                    binding: Binding::None,
                    infeasible: true,
                    band: (f64::NAN, f64::NAN),
                    micros: 0,
                }
            }
        };
        self.v_prev = decision.v;
        decision
    }
}
