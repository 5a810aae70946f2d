//! Unscented Kalman filter over the point kinetics equations.
//!
//! State `x = [n, C_1..C_6, alpha, omega]`, where reactivity over one step
//! is modelled as `rho(t) = alpha + omega t`. The filter measures `n` only.

use nalgebra::{Cholesky, SMatrix, SVector};
use serde::{Deserialize, Serialize};

use crate::kinetics::{KineticsMatrix, KineticsParams, GROUPS};
use crate::{Error, Result};

pub const DIM: usize = GROUPS + 3;
pub const N_SIGMA: usize = 2 * DIM + 1;

pub type StateVec = SVector<f64, DIM>;
pub type StateCov = SMatrix<f64, DIM, DIM>;

const ALPHA_IDX: usize = GROUPS + 1;
const OMEGA_IDX: usize = GROUPS + 2;

/// Van der Merwe scaled sigma-point parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SigmaParams {
    pub alpha: f64,
    pub beta: f64,
    pub kappa: f64,
}

impl Default for SigmaParams {
    fn default() -> Self {
        Self {
            alpha: 0.001,
            beta: 2.0,
            kappa: 0.0,
        }
    }
}

impl SigmaParams {
    fn lambda(&self) -> f64 {
        self.alpha * self.alpha * (DIM as f64 + self.kappa) - DIM as f64
    }

    /// `(mean weights, covariance weights)`.
    pub fn weights(&self) -> ([f64; N_SIGMA], [f64; N_SIGMA]) {
        let l = DIM as f64;
        let lam = self.lambda();
        let wi = 1.0 / (2.0 * (l + lam));
        let mut wm = [wi; N_SIGMA];
        let mut wc = [wi; N_SIGMA];
        wm[0] = lam / (l + lam);
        wc[0] = wm[0] + (1.0 - self.alpha * self.alpha + self.beta);
        (wm, wc)
    }
}

/// Transition over `dt` of the augmented state.
///
/// The PKE block uses the exact matrix exponential with reactivity taken at
/// the midpoint of the step, `alpha + omega dt / 2`. For constant reactivity
/// (`omega = 0`) this is the exact solution. The reactivity rows are exact.
pub fn pke_transition(x: &StateVec, dt: f64, kinetics: &KineticsParams) -> Result<StateVec> {
    let alpha = x[ALPHA_IDX];
    let omega = x[OMEGA_IDX];
    let rho_mid = alpha + 0.5 * omega * dt;
    let phi: KineticsMatrix = (kinetics.matrix(rho_mid) * dt).exp();
    let pke = phi * x.fixed_rows::<{ GROUPS + 1 }>(0);
    let mut out = StateVec::zeros();
    out.fixed_rows_mut::<{ GROUPS + 1 }>(0).copy_from(&pke);
    out[ALPHA_IDX] = alpha + omega * dt;
    out[OMEGA_IDX] = omega;
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("matrix exponential produced non-finite values".into()));
    }
    Ok(out)
}

/// Equilibrium augmented state at normalized power `n` and zero reactivity.
pub fn equilibrium(n: f64, kinetics: &KineticsParams) -> StateVec {
    let mut x = StateVec::zeros();
    x[0] = n;
    for (i, c) in kinetics.equilibrium_precursors(n).iter().enumerate() {
        x[i + 1] = *c;
    }
    x
}

fn cholesky_with_jitter(p: &StateCov) -> Result<Cholesky<f64, nalgebra::Const<DIM>>> {
    if let Some(c) = Cholesky::new(*p) {
        return Ok(c);
    }
    Cholesky::new(p + StateCov::identity() * 1e-12)
        .ok_or_else(|| Error::Numeric("covariance is not positive definite".into()))
}

/// Van der Merwe sigma points. Point 0 is the mean; points `1..=DIM` and
/// `DIM+1..` are the mean plus and minus the columns of
/// `sqrt((DIM + lambda) P)`.
pub fn sigma_points(
    mean: &StateVec,
    cov: &StateCov,
    params: &SigmaParams,
) -> Result<([StateVec; N_SIGMA], [f64; N_SIGMA], [f64; N_SIGMA])> {
    let l = DIM as f64;
    let chol = cholesky_with_jitter(&(cov * (l + params.lambda())))?;
    let root = chol.l();
    let mut pts = [*mean; N_SIGMA];
    for j in 0..DIM {
        let col = root.column(j);
        pts[1 + j] = mean + col;
        pts[1 + DIM + j] = mean - col;
    }
    let (wm, wc) = params.weights();
    Ok((pts, wm, wc))
}

/// Weighted mean and covariance of transformed sigma points, computed from
/// deviations to point 0 so the large central weight does not cancel.
fn unscented_moments<const D: usize>(
    pts: &[SVector<f64, D>; N_SIGMA],
    wm: &[f64; N_SIGMA],
    params: &SigmaParams,
) -> (SVector<f64, D>, SMatrix<f64, D, D>) {
    let mut delta = SVector::<f64, D>::zeros();
    let mut cov = SMatrix::<f64, D, D>::zeros();
    for i in 1..N_SIGMA {
        let d = pts[i] - pts[0];
        delta += d * wm[i];
        cov += d * d.transpose() * wm[i];
    }
    let k = params.beta - params.alpha * params.alpha;
    cov += delta * delta.transpose() * k;
    (pts[0] + delta, cov)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UkfConfig {
    pub sigma: SigmaParams,
    /// Diagonal of the process noise covariance.
    pub process_noise: [f64; DIM],
    /// Measurement noise variance on `n`.
    pub measurement_variance: f64,
    /// Diagonal of the initial covariance.
    pub initial_variance: f64,
}

impl Default for UkfConfig {
    fn default() -> Self {
        let mut q = [0.0; DIM];
        q[0] = 1e-10;
        for v in q.iter_mut().take(GROUPS + 1).skip(1) {
            *v = 1e-10;
        }
        q[ALPHA_IDX] = 1e-9;
        q[OMEGA_IDX] = 1e-10;
        Self {
            sigma: SigmaParams::default(),
            process_noise: q,
            measurement_variance: 1e-6,
            initial_variance: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObserverState {
    pub mean: StateVec,
    pub cov: StateCov,
    pub last_innovation: f64,
}

impl ObserverState {
    pub fn n(&self) -> f64 {
        self.mean[0]
    }

    pub fn precursors(&self) -> [f64; GROUPS] {
        std::array::from_fn(|i| self.mean[i + 1])
    }

    /// Current reactivity estimate `alpha`.
    pub fn reactivity(&self) -> f64 {
        self.mean[ALPHA_IDX]
    }
}

#[derive(Debug, Clone)]
pub struct Ukf {
    pub kinetics: KineticsParams,
    pub config: UkfConfig,
    q: StateCov,
}

impl Ukf {
    pub fn new(kinetics: KineticsParams, config: UkfConfig) -> Result<Self> {
        kinetics.validate()?;
        if !(config.measurement_variance > 0.0
            && config.initial_variance > 0.0
            && config.process_noise.iter().all(|q| q.is_finite() && *q >= 0.0))
        {
            return Err(Error::Config(
                "ukf: measurement and initial variance must be > 0, process noise >= 0".into(),
            ));
        }
        let q = StateCov::from_diagonal(&StateVec::from(config.process_noise));
        Ok(Self { kinetics, config, q })
    }

    /// Observer warm-started at the equilibrium for power `n`.
    pub fn start(&self, n: f64) -> ObserverState {
        ObserverState {
            mean: equilibrium(n, &self.kinetics),
            cov: StateCov::identity() * self.config.initial_variance,
            last_innovation: 0.0,
        }
    }

    /// Predict through the kinetics, then update with a measurement of `n`.
    pub fn step(&self, obs: &ObserverState, measured_n: f64, dt: f64) -> Result<ObserverState> {
        if !measured_n.is_finite() {
            return Err(Error::NonFinite {
                what: "ukf power measurement".into(),
                t: f64::NAN,
            });
        }
        let p = &self.config.sigma;
        let (pts, wm, _) = sigma_points(&obs.mean, &obs.cov, p)?;
        let mut prop = [StateVec::zeros(); N_SIGMA];
        for (dst, src) in prop.iter_mut().zip(pts.iter()) {
            *dst = pke_transition(src, dt, &self.kinetics)?;
        }
        let (x_pred, p_xx) = unscented_moments(&prop, &wm, p);
        let p_pred = symmetrize(&(p_xx + self.q));

        // Redraw sigma points around the prediction so the process noise is
        // reflected in the measurement statistics.
        let (pts, wm, _) = sigma_points(&x_pred, &p_pred, p)?;
        let mut z_dev = [0.0; N_SIGMA];
        let mut z_mean_delta = 0.0;
        for i in 1..N_SIGMA {
            z_dev[i] = pts[i][0] - pts[0][0];
            z_mean_delta += wm[i] * z_dev[i];
        }
        let z_pred = pts[0][0] + z_mean_delta;
        let k_corr = p.beta - p.alpha * p.alpha;
        let mut s = self.config.measurement_variance + k_corr * z_mean_delta * z_mean_delta;
        let mut x_mean_delta = StateVec::zeros();
        for i in 1..N_SIGMA {
            s += wm[i] * z_dev[i] * z_dev[i];
            x_mean_delta += (pts[i] - pts[0]) * wm[i];
        }
        let mut p_xz = x_mean_delta * (k_corr * z_mean_delta);
        for i in 1..N_SIGMA {
            p_xz += (pts[i] - pts[0]) * (wm[i] * z_dev[i]);
        }
        let innovation = measured_n - z_pred;
        if !innovation.is_finite() || !(s > 0.0) {
            return Err(Error::Numeric("ukf innovation is not finite".into()));
        }
        let gain = p_xz / s;
        let mut mean = x_pred + gain * innovation;
        mean[0] = mean[0].max(0.0);
        let cov = symmetrize(&(p_pred - gain * gain.transpose() * s));
        if Cholesky::new(cov).is_none() && Cholesky::new(cov + StateCov::identity() * 1e-12).is_none() {
            return Err(Error::Numeric("ukf covariance lost positive definiteness".into()));
        }
        Ok(ObserverState {
            mean,
            cov,
            last_innovation: innovation,
        })
    }
}

fn symmetrize(p: &StateCov) -> StateCov {
    (p + p.transpose()) * 0.5
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn k() -> KineticsParams {
        KineticsParams::default()
    }

    #[test]
    fn equilibrium_is_a_fixed_point() {
        let x = equilibrium(0.8, &k());
        let y = pke_transition(&x, 0.2, &k()).unwrap();
        for i in 0..DIM {
            assert!((x[i] - y[i]).abs() <= 1e-10 * x[i].abs().max(1.0));
        }
    }

    #[test]
    fn reactivity_advances_by_slope() {
        let mut x = equilibrium(1.0, &k());
        x[OMEGA_IDX] = 1e-4;
        let y = pke_transition(&x, 0.2, &k()).unwrap();
        assert!((y[ALPHA_IDX] - 2e-5).abs() < 1e-18);
        assert_eq!(y[OMEGA_IDX], 1e-4);
    }

    #[test]
    fn weights_sum_to_one() {
        let (wm, wc) = SigmaParams::default().weights();
        assert!((wm.iter().sum::<f64>() - 1.0).abs() < 1e-12 * wm[0].abs());
        assert!(wc[0] > wm[0]);
    }

    #[test]
    fn points_are_symmetric_for_identity_covariance() {
        let (pts, _, _) =
            sigma_points(&StateVec::zeros(), &StateCov::identity(), &SigmaParams::default())
                .unwrap();
        for j in 0..DIM {
            assert!((pts[1 + j] + pts[1 + DIM + j]).norm() < 1e-15);
        }
    }

    #[test]
    fn covariance_reconstruction_from_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = StateCov::from_fn(|_, _| rng.random_range(-1.0..1.0));
        let cov = m * m.transpose() + StateCov::identity() * 0.1;
        let mean = StateVec::from_fn(|_, _| rng.random_range(-2.0..2.0));
        let p = SigmaParams::default();
        let (pts, wm, wc) = sigma_points(&mean, &cov, &p).unwrap();
        let (mu, c) = unscented_moments(&pts, &wm, &p);
        assert!((mu - mean).norm() < 1e-10);
        assert!((c - cov).abs().max() < 1e-10);
        // Direct weighted sums agree too.
        let mut direct = StateCov::zeros();
        for i in 0..N_SIGMA {
            let d = pts[i] - mean;
            direct += d * d.transpose() * wc[i];
        }
        assert!((direct - cov).abs().max() < 1e-9);
    }

    #[test]
    fn steady_measurement_keeps_precursors_at_equilibrium() {
        let ukf = Ukf::new(k(), UkfConfig::default()).unwrap();
        let mut obs = ukf.start(0.9);
        for _ in 0..2000 {
            obs = ukf.step(&obs, 0.9, 0.2).unwrap();
        }
        // sigma-point spread in alpha leaves a small fixed offset
        let expect = k().equilibrium_precursors(0.9);
        for i in 0..GROUPS {
            assert!((obs.precursors()[i] - expect[i]).abs() <= 1e-5 * expect[i]);
        }
        assert!(obs.reactivity().abs() < 1e-6);
    }

    #[test]
    fn non_finite_measurement_is_rejected() {
        let ukf = Ukf::new(k(), UkfConfig::default()).unwrap();
        assert!(ukf.step(&ukf.start(1.0), f64::NAN, 0.2).is_err());
    }
}
