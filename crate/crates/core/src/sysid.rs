//! Dynamic mode decomposition with control.
//!
//! Snapshots are centered (by default on the first sample, the full-power
//! equilibrium in every generated trajectory) and divided by each channel's
//! standard deviation. The fit is `G = X' pinv([X; U])`, split into `A` and
//! `B`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::linalg::{spectral_radius, truncated_svd, RankRule};
use crate::trajectory::Trajectory;
use crate::{Error, Result};

/// Reference point subtracted from every channel before scaling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Centering {
    /// First sample of the first trajectory.
    FirstSample,
    /// Mean over all samples.
    Mean,
    /// Explicit values, states then inputs.
    Given(Vec<f64>),
}

/// Per-channel affine map `z = (x - center) / scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub center: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Normalization {
    pub fn identity(len: usize) -> Self {
        Self {
            center: vec![0.0; len],
            scale: vec![1.0; len],
        }
    }

    pub fn normalize(&self, i: usize, v: f64) -> f64 {
        (v - self.center[i]) / self.scale[i]
    }

    pub fn denormalize(&self, i: usize, z: f64) -> f64 {
        z * self.scale[i] + self.center[i]
    }

    fn slice(&self, range: std::ops::Range<usize>) -> Normalization {
        Normalization {
            center: self.center[range.clone()].to_vec(),
            scale: self.scale[range].to_vec(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SnapshotSet {
    pub x: DMatrix<f64>,
    pub xp: DMatrix<f64>,
    pub u: DMatrix<f64>,
    pub dt: f64,
    pub state_names: Vec<String>,
    pub input_names: Vec<String>,
    /// States first, then inputs.
    pub norm: Normalization,
}

impl SnapshotSet {
    pub fn pairs(&self) -> usize {
        self.x.ncols()
    }
}

/// Stack the listed channels of every trajectory into snapshot matrices.
/// Pairs never straddle two trajectories.
pub fn assemble_snapshots(
    trajectories: &[Trajectory],
    state_names: &[String],
    input_names: &[String],
    centering: &Centering,
) -> Result<SnapshotSet> {
    if trajectories.is_empty() {
        return Err(Error::Config("no trajectories given".into()));
    }
    let names: Vec<String> = state_names.iter().chain(input_names).cloned().collect();
    let n = state_names.len();
    let m = input_names.len();
    let mut columns = Vec::with_capacity(trajectories.len());
    for tr in trajectories {
        if tr.len() < 2 {
            return Err(Error::TooShort {
                name: tr.name.clone(),
                len: tr.len(),
                min: 2,
            });
        }
        let cols: Vec<&[f64]> = names.iter().map(|c| tr.channel(c)).collect::<Result<_>>()?;
        columns.push(cols);
    }
    let dt = trajectories[0].dt().unwrap_or(0.0);

    let center = match centering {
        Centering::FirstSample => columns[0].iter().map(|c| c[0]).collect(),
        Centering::Mean => {
            let total: usize = trajectories.iter().map(Trajectory::len).sum();
            (0..names.len())
                .map(|j| columns.iter().map(|c| c[j].iter().sum::<f64>()).sum::<f64>() / total as f64)
                .collect()
        }
        Centering::Given(v) => {
            if v.len() != names.len() {
                return Err(Error::Dimension(format!(
                    "centering has {} values for {} channels",
                    v.len(),
                    names.len()
                )));
            }
            v.clone()
        }
    };
    let total: usize = trajectories.iter().map(Trajectory::len).sum();
    let scale: Vec<f64> = (0..names.len())
        .map(|j| {
            let mean =
                columns.iter().map(|c| c[j].iter().sum::<f64>()).sum::<f64>() / total as f64;
            let var = columns
                .iter()
                .map(|c| c[j].iter().map(|v| (v - mean) * (v - mean)).sum::<f64>())
                .sum::<f64>()
                / total as f64;
            let sd = var.sqrt();
            if sd > 1e-12 * mean.abs().max(1.0) {
                sd
            } else {
                1.0
            }
        })
        .collect();
    let norm = Normalization { center, scale };

    let pairs: usize = trajectories.iter().map(|t| t.len() - 1).sum();
    let mut x = DMatrix::zeros(n, pairs);
    let mut xp = DMatrix::zeros(n, pairs);
    let mut u = DMatrix::zeros(m, pairs);
    let mut col = 0;
    for cols in &columns {
        let len = cols[0].len();
        for k in 0..len - 1 {
            for i in 0..n {
                x[(i, col)] = norm.normalize(i, cols[i][k]);
                xp[(i, col)] = norm.normalize(i, cols[i][k + 1]);
            }
            for j in 0..m {
                u[(j, col)] = norm.normalize(n + j, cols[n + j][k]);
            }
            col += 1;
        }
    }
    Ok(SnapshotSet {
        x,
        xp,
        u,
        dt,
        state_names: state_names.to_vec(),
        input_names: input_names.to_vec(),
        norm,
    })
}

/// Discrete-time model in normalized deviation coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateSpaceModel {
    #[serde(with = "rows")]
    pub a: DMatrix<f64>,
    #[serde(with = "rows")]
    pub b: DMatrix<f64>,
    #[serde(with = "rows")]
    pub c: DMatrix<f64>,
    #[serde(with = "rows")]
    pub d: DMatrix<f64>,
    #[serde(with = "column")]
    pub b_w: DVector<f64>,
    #[serde(with = "column")]
    pub d_w: DVector<f64>,
    pub dt: f64,
    pub state_names: Vec<String>,
    pub input_names: Vec<String>,
    pub output_names: Vec<String>,
    pub state_norm: Normalization,
    pub input_norm: Normalization,
    /// SVD rank used for the fit.
    pub rank: usize,
    pub spectral_radius: f64,
}

impl StateSpaceModel {
    /// Model from explicit matrices with identity normalization, `C = I`,
    /// `D = 0` and generated names `x0..`, `u0..`.
    pub fn from_matrices(a: DMatrix<f64>, b: DMatrix<f64>, dt: f64) -> Result<Self> {
        let n = a.nrows();
        let m = b.ncols();
        let state_names: Vec<String> = (0..n).map(|i| format!("x{i}")).collect();
        let model = StateSpaceModel {
            spectral_radius: spectral_radius(&a),
            rank: n + m,
            c: DMatrix::identity(n, n),
            d: DMatrix::zeros(n, m),
            b_w: DVector::zeros(n),
            d_w: DVector::zeros(n),
            dt,
            output_names: state_names.clone(),
            state_names,
            input_names: (0..m).map(|i| format!("u{i}")).collect(),
            state_norm: Normalization::identity(n),
            input_norm: Normalization::identity(m),
            a,
            b,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn n_states(&self) -> usize {
        self.a.nrows()
    }

    pub fn n_inputs(&self) -> usize {
        self.b.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.a.nrows();
        let m = self.b.ncols();
        let p = self.c.nrows();
        let ok = self.a.ncols() == n
            && self.b.nrows() == n
            && self.c.ncols() == n
            && self.d.nrows() == p
            && self.d.ncols() == m
            && self.b_w.len() == n
            && self.d_w.len() == p
            && self.state_names.len() == n
            && self.input_names.len() == m
            && self.output_names.len() == p
            && self.state_norm.center.len() == n
            && self.state_norm.scale.len() == n
            && self.input_norm.center.len() == m
            && self.input_norm.scale.len() == m;
        if !ok {
            return Err(Error::Dimension("model matrices and name lists disagree".into()));
        }
        let finite = [&self.a, &self.b, &self.c, &self.d]
            .iter()
            .all(|mat| mat.iter().all(|v| v.is_finite()))
            && self.b_w.iter().chain(self.d_w.iter()).all(|v| v.is_finite());
        let scales_ok = self
            .state_norm
            .scale
            .iter()
            .chain(&self.input_norm.scale)
            .all(|s| s.is_finite() && *s > 0.0)
            && self
                .state_norm
                .center
                .iter()
                .chain(&self.input_norm.center)
                .all(|c| c.is_finite());
        if !finite || !scales_ok || !(self.dt.is_finite() && self.dt > 0.0) {
            return Err(Error::Config(
                "model has non-finite entries, non-positive scales or dt".into(),
            ));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Parse and validate a model document.
    pub fn from_json(text: &str) -> Result<Self> {
        let model: StateSpaceModel = serde_json::from_str(text)?;
        model.validate()?;
        Ok(model)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn state_index(&self, name: &str) -> Result<usize> {
        self.state_names
            .iter()
            .position(|s| s == name)
            .ok_or_else(|| Error::UnknownChannel(name.to_string()))
    }

    pub fn normalize_state(&self, x: &[f64]) -> DVector<f64> {
        DVector::from_iterator(x.len(), x.iter().enumerate().map(|(i, v)| self.state_norm.normalize(i, *v)))
    }

    pub fn denormalize_state(&self, z: &DVector<f64>) -> Vec<f64> {
        z.iter()
            .enumerate()
            .map(|(i, v)| self.state_norm.denormalize(i, *v))
            .collect()
    }

    pub fn normalize_input(&self, u: &[f64]) -> DVector<f64> {
        DVector::from_iterator(u.len(), u.iter().enumerate().map(|(i, v)| self.input_norm.normalize(i, *v)))
    }

    /// Open-loop rollout in normalized coordinates: returns `x_1..x_N` for
    /// inputs `u_0..u_{N-1}`.
    pub fn rollout_normalized(&self, x0: &DVector<f64>, u: &[DVector<f64>]) -> Result<Vec<DVector<f64>>> {
        if x0.len() != self.n_states() || u.iter().any(|v| v.len() != self.n_inputs()) {
            return Err(Error::Dimension("rollout: state or input length".into()));
        }
        let mut x = x0.clone();
        let mut out = Vec::with_capacity(u.len());
        for uk in u {
            x = &self.a * &x + &self.b * uk;
            out.push(x.clone());
        }
        Ok(out)
    }

    /// Open-loop rollout in engineering units.
    pub fn predict(&self, x0: &[f64], u: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        if x0.len() != self.n_states() {
            return Err(Error::Dimension(format!(
                "x0 has {} values, model has {} states",
                x0.len(),
                self.n_states()
            )));
        }
        let zu: Vec<DVector<f64>> = u.iter().map(|v| self.normalize_input(v)).collect();
        let z = self.rollout_normalized(&self.normalize_state(x0), &zu)?;
        Ok(z.iter().map(|v| self.denormalize_state(v)).collect())
    }

    /// Open-loop replay of a logged trajectory from its first sample.
    /// Returns normalized `(predicted, actual)` rows for samples `1..L`.
    fn replay(&self, traj: &Trajectory) -> Result<(Vec<DVector<f64>>, Vec<DVector<f64>>)> {
        if traj.len() < 2 {
            return Err(Error::TooShort {
                name: traj.name.clone(),
                len: traj.len(),
                min: 2,
            });
        }
        let xs: Vec<&[f64]> = self
            .state_names
            .iter()
            .map(|c| traj.channel(c))
            .collect::<Result<_>>()?;
        let us: Vec<&[f64]> = self
            .input_names
            .iter()
            .map(|c| traj.channel(c))
            .collect::<Result<_>>()?;
        let state_at = |k: usize| {
            DVector::from_iterator(
                xs.len(),
                xs.iter().enumerate().map(|(i, c)| self.state_norm.normalize(i, c[k])),
            )
        };
        let inputs: Vec<DVector<f64>> = (0..traj.len() - 1)
            .map(|k| {
                DVector::from_iterator(
                    us.len(),
                    us.iter().enumerate().map(|(j, c)| self.input_norm.normalize(j, c[k])),
                )
            })
            .collect();
        let predicted = self.rollout_normalized(&state_at(0), &inputs)?;
        let actual = (1..traj.len()).map(state_at).collect();
        Ok((predicted, actual))
    }

    /// Per-state MSE and R² of an open-loop replay, in normalized units.
    pub fn score(&self, traj: &Trajectory) -> Result<Vec<ChannelScore>> {
        let (pred, actual) = self.replay(traj)?;
        Ok((0..self.n_states())
            .map(|i| {
                let p: Vec<f64> = pred.iter().map(|v| v[i]).collect();
                let a: Vec<f64> = actual.iter().map(|v| v[i]).collect();
                let (mse, r2) = mse_r2(&a, &p);
                ChannelScore {
                    name: self.state_names[i].clone(),
                    mse,
                    r2,
                }
            })
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChannelScore {
    pub name: String,
    pub mse: f64,
    /// `None` when the actual channel has zero variance.
    pub r2: Option<f64>,
}

/// Mean of the defined R² values, or `None` if none are defined.
pub fn mean_r2(scores: &[ChannelScore]) -> Option<f64> {
    let defined: Vec<f64> = scores.iter().filter_map(|s| s.r2).collect();
    (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
}

/// `(MSE, R²)` of `predicted` against `actual`.
pub fn mse_r2(actual: &[f64], predicted: &[f64]) -> (f64, Option<f64>) {
    let n = actual.len() as f64;
    let mean = actual.iter().sum::<f64>() / n;
    let ss_res: f64 = actual
        .iter()
        .zip(predicted)
        .map(|(a, p)| (a - p) * (a - p))
        .sum();
    let ss_tot: f64 = actual.iter().map(|a| (a - mean) * (a - mean)).sum();
    let r2 = (ss_tot > 1e-24 * n).then(|| 1.0 - ss_res / ss_tot);
    (ss_res / n, r2)
}

/// Fit `(A, B)` by DMDc. `C` is the identity (every state is an output) and
/// `D`, `B_w`, `D_w` are zero.
pub fn fit(snapshots: &SnapshotSet, rank: RankRule) -> Result<StateSpaceModel> {
    let n = snapshots.x.nrows();
    let m = snapshots.u.nrows();
    let l = snapshots.x.ncols();
    if l == 0 || n == 0 {
        return Err(Error::Config("empty snapshot set".into()));
    }
    if let RankRule::Fixed(r) = rank {
        if r == 0 || r > (n + m).min(l) {
            return Err(Error::Config(format!(
                "svd rank {r} outside 1..={}",
                (n + m).min(l)
            )));
        }
    }
    let mut omega = DMatrix::zeros(n + m, l);
    omega.rows_mut(0, n).copy_from(&snapshots.x);
    omega.rows_mut(n, m).copy_from(&snapshots.u);
    let svd = truncated_svd(&omega, rank)?;
    if svd.rank() < svd.requested_rank {
        log::warn!(
            "snapshot matrix has rank {} below the requested {}; using {}",
            svd.rank(),
            svd.requested_rank,
            svd.rank()
        );
    }
    // G = X' V S^-1 U^T, without forming the L x (n+m) pseudoinverse.
    let mut xv = &snapshots.xp * svd.v_t.transpose();
    for (j, s) in svd.singular_values.iter().enumerate() {
        xv.column_mut(j).scale_mut(1.0 / s);
    }
    let g = xv * svd.u.transpose();
    let a = g.columns(0, n).into_owned();
    let b = g.columns(n, m).into_owned();
    let rho = spectral_radius(&a);
    let model = StateSpaceModel {
        a,
        b,
        c: DMatrix::identity(n, n),
        d: DMatrix::zeros(n, m),
        b_w: DVector::zeros(n),
        d_w: DVector::zeros(n),
        dt: if snapshots.dt > 0.0 { snapshots.dt } else { 1.0 },
        state_names: snapshots.state_names.clone(),
        input_names: snapshots.input_names.clone(),
        output_names: snapshots.state_names.clone(),
        state_norm: snapshots.norm.slice(0..n),
        input_norm: snapshots.norm.slice(n..n + m),
        rank: svd.rank(),
        spectral_radius: rho,
    };
    if model.a.iter().chain(model.b.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Numeric("DMDc fit produced non-finite entries".into()));
    }
    Ok(model)
}

/// `DMatrix` as a list of rows.
mod rows {
    use nalgebra::DMatrix;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<Vec<f64>> = m.row_iter().map(|r| r.iter().copied().collect()).collect();
        (m.ncols(), rows).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        let (ncols, rows): (usize, Vec<Vec<f64>>) = Deserialize::deserialize(d)?;
        if rows.iter().any(|r| r.len() != ncols) {
            return Err(serde::de::Error::custom("ragged matrix rows"));
        }
        if ncols > 0 && rows.len() > usize::MAX / ncols {
            return Err(serde::de::Error::custom("matrix too large"));
        }
        let flat: Vec<f64> = rows.into_iter().flatten().collect();
        let nrows = if ncols == 0 { 0 } else { flat.len() / ncols };
        Ok(DMatrix::from_row_slice(nrows, ncols, &flat))
    }
}

mod column {
    use nalgebra::DVector;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &DVector<f64>, s: S) -> Result<S::Ok, S::Error> {
        v.as_slice().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DVector<f64>, D::Error> {
        let v: Vec<f64> = Deserialize::deserialize(d)?;
        Ok(DVector::from_vec(v))
    }
}
