//! Positional PI(D) controllers for the low-level layer.
//!
//! Three loops are used by the plant: reactor power -> external reactivity,
//! core outlet temperature -> primary pump head and core inlet temperature ->
//! secondary pump head. The derivative term exists in the gain block but
//! must stay at zero.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PidGains {
    pub kp: f64,
    pub ki: f64,
    #[serde(default)]
    pub kd: f64,
    pub out_min: f64,
    pub out_max: f64,
    /// Bound on |integral of error| (error units x s).
    pub integral_limit: f64,
    /// Feedforward term added to the output; set from the equilibrium
    /// actuation so the loop starts balanced.
    #[serde(default)]
    pub bias: f64,
    /// Reverse acting: the error is `measurement - setpoint`, so the output
    /// rises when the measurement is above setpoint.
    #[serde(default)]
    pub reverse: bool,
}

impl PidGains {
    pub fn validate(&self, name: &str) -> Result<()> {
        let finite = [
            self.kp,
            self.ki,
            self.kd,
            self.out_min,
            self.out_max,
            self.integral_limit,
            self.bias,
        ]
        .iter()
        .all(|v| v.is_finite());
        if !finite {
            return Err(Error::Config(format!("{name}: gains must be finite")));
        }
        if self.kd != 0.0 {
            return Err(Error::Config(format!("{name}: derivative gain must be 0")));
        }
        if self.out_min >= self.out_max {
            return Err(Error::Config(format!("{name}: out_min must be < out_max")));
        }
        if self.integral_limit < 0.0 || self.kp < 0.0 || self.ki < 0.0 {
            return Err(Error::Config(format!(
                "{name}: kp, ki and integral_limit must be >= 0"
            )));
        }
        Ok(())
    }

    pub fn with_gains(&self, kp: f64, ki: f64) -> PidGains {
        PidGains {
            kp,
            ki,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PidState {
    pub integral: f64,
    pub prev_error: f64,
    pub output: f64,
}

/// One positional PID update.
///
/// The integral is clamped to `integral_limit` and is not advanced while the
/// output is saturated in the direction the error pushes.
pub fn pid_step(
    gains: &PidGains,
    state: &PidState,
    setpoint: f64,
    measurement: f64,
    dt: f64,
) -> (f64, PidState) {
    debug_assert!(dt > 0.0);
    let error = if gains.reverse {
        measurement - setpoint
    } else {
        setpoint - measurement
    };
    let lim = gains.integral_limit;
    let candidate = (state.integral + error * dt).clamp(-lim, lim);
    let derivative = (error - state.prev_error) / dt;
    let raw = |i: f64| gains.bias + gains.kp * error + gains.ki * i + gains.kd * derivative;

    let mut integral = candidate;
    let unclamped = raw(candidate);
    if (unclamped > gains.out_max && error > 0.0) || (unclamped < gains.out_min && error < 0.0) {
        integral = state.integral.clamp(-lim, lim);
    }
    let output = raw(integral).clamp(gains.out_min, gains.out_max);
    (
        output,
        PidState {
            integral,
            prev_error: error,
            output,
        },
    )
}

/// Tracking cost: integral of absolute error plus a penalty on overshoot
/// past the final setpoint.
///
/// `errors` is setpoint minus measurement, sampled every `dt`.
pub fn tracking_cost(errors: &[f64], dt: f64, overshoot_weight: f64) -> f64 {
    let iae: f64 = errors.iter().map(|e| e.abs() * dt).sum();
    let final_sign = errors
        .iter()
        .rev()
        .find(|e| e.abs() > 1e-12)
        .map(|e| e.signum())
        .unwrap_or(0.0);
    // Overshoot shows up as error of the opposite sign to the initial error.
    let first_sign = errors
        .iter()
        .find(|e| e.abs() > 1e-12)
        .map(|e| e.signum())
        .unwrap_or(final_sign);
    let overshoot = errors
        .iter()
        .filter(|e| e.signum() == -first_sign)
        .fold(0.0_f64, |m, e| m.max(e.abs()));
    iae + overshoot_weight * overshoot
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TuneCandidate {
    pub kp: f64,
    pub ki: f64,
    /// `None` when the closed loop was unstable or the run failed.
    pub cost: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TuneReport {
    pub best: TuneCandidate,
    pub candidates: Vec<TuneCandidate>,
}

impl TuneReport {
    /// `kp,ki,cost` rows; unstable candidates have an empty cost cell.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("kp,ki,cost\n");
        for c in &self.candidates {
            let cost = c.cost.map(|v| v.to_string()).unwrap_or_default();
            out.push_str(&format!("{},{},{}\n", c.kp, c.ki, cost));
        }
        out
    }
}

/// Cartesian product of the two gain axes.
pub fn gain_grid(kp: &[f64], ki: &[f64]) -> Vec<(f64, f64)> {
    kp.iter()
        .flat_map(|&p| ki.iter().map(move |&i| (p, i)))
        .collect()
}

/// Evaluate every `(kp, ki)` with `evaluate` (in parallel) and return the
/// cheapest. `evaluate` returns `None` for an unstable candidate. Ties go to
/// the smaller kp, then the smaller ki.
pub fn tune_grid_search<F>(grid: &[(f64, f64)], evaluate: F) -> Result<TuneReport>
where
    F: Fn(f64, f64) -> Option<f64> + Sync,
{
    let candidates: Vec<TuneCandidate> = grid
        .par_iter()
        .map(|&(kp, ki)| TuneCandidate {
            kp,
            ki,
            cost: evaluate(kp, ki).filter(|c| c.is_finite()),
        })
        .collect();
    let best = candidates
        .iter()
        .filter(|c| c.cost.is_some())
        .min_by(|a, b| {
            a.cost
                .unwrap()
                .total_cmp(&b.cost.unwrap())
                .then(a.kp.total_cmp(&b.kp))
                .then(a.ki.total_cmp(&b.ki))
        })
        .cloned()
        .ok_or(Error::AllUnstable(grid.len()))?;
    Ok(TuneReport { best, candidates })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gains() -> PidGains {
        PidGains {
            kp: 2.0,
            ki: 0.5,
            kd: 0.0,
            out_min: -10.0,
            out_max: 10.0,
            integral_limit: 4.0,
            bias: 1.5,
            reverse: false,
        }
    }

    #[test]
    fn zero_error_gives_bias() {
        let (u, s) = pid_step(&gains(), &PidState::default(), 3.0, 3.0, 0.2);
        assert_eq!(u, 1.5);
        assert_eq!(s.integral, 0.0);
    }

    #[test]
    fn integral_grows_linearly_until_clamp() {
        let mut g = gains();
        g.kp = 0.0;
        g.out_max = 1e9;
        let mut s = PidState::default();
        for k in 1..=100 {
            (_, s) = pid_step(&g, &s, 1.0, 0.0, 0.2);
            let expect = (k as f64 * 0.2).min(4.0);
            assert!((s.integral - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn output_is_always_saturated_and_integral_stops() {
        let g = gains();
        let mut s = PidState::default();
        for _ in 0..50 {
            let (u, next) = pid_step(&g, &s, 100.0, 0.0, 0.2);
            assert!(u <= g.out_max);
            s = next;
        }
        // Saturated from the first step, so the integral never moved.
        assert_eq!(s.integral, 0.0);
    }

    #[test]
    fn reverse_acting_flips_the_error() {
        let mut g = gains();
        g.reverse = true;
        let (u, _) = pid_step(&g, &PidState::default(), 0.0, 1.0, 0.2);
        assert!(u > g.bias);
    }

    #[test]
    fn derivative_gain_is_rejected() {
        let mut g = gains();
        g.kd = 0.1;
        assert!(g.validate("x").is_err());
        assert!(gains().validate("x").is_ok());
    }

    #[test]
    fn grid_with_one_stable_candidate_returns_it() {
        let grid = gain_grid(&[1.0, 2.0, 3.0], &[0.1]);
        let r = tune_grid_search(&grid, |kp, _| (kp == 2.0).then_some(5.0)).unwrap();
        assert_eq!((r.best.kp, r.best.ki), (2.0, 0.1));
    }

    #[test]
    fn ties_break_on_smaller_kp_then_ki() {
        let grid = vec![(2.0, 0.2), (1.0, 0.3), (1.0, 0.2), (2.0, 0.2), (1.0, 0.2)];
        let r = tune_grid_search(&grid, |_, _| Some(1.0)).unwrap();
        assert_eq!((r.best.kp, r.best.ki), (1.0, 0.2));
    }

    #[test]
    fn all_unstable_is_an_error() {
        let grid = gain_grid(&[1.0], &[1.0, 2.0]);
        assert!(matches!(
            tune_grid_search(&grid, |_, _| None),
            Err(Error::AllUnstable(2))
        ));
    }

    #[test]
    fn tracking_cost_penalises_overshoot() {
        let smooth = [1.0, 0.5, 0.25, 0.0];
        let over = [1.0, 0.0, -0.5, 0.0];
        assert!(tracking_cost(&over, 1.0, 10.0) > tracking_cost(&smooth, 1.0, 10.0));
    }
}
