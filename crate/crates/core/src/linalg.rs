//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::DMatrix;

use crate::{Error, Result};

/// How many singular values to keep in a truncated pseudoinverse.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RankRule {
    /// Keep exactly this many (reduced if the data has fewer nonzero values).
    Fixed(usize),
    /// Keep the smallest rank whose squared singular values reach this
    /// fraction of the total energy.
    Energy(f64),
}

/// Thin SVD factors of a truncated decomposition `M ~ U diag(s) V^T`.
#[derive(Debug, Clone)]
pub struct TruncatedSvd {
    pub u: DMatrix<f64>,
    pub singular_values: Vec<f64>,
    pub v_t: DMatrix<f64>,
    /// Rank that was asked for, before any reduction.
    pub requested_rank: usize,
    /// Full singular spectrum, for diagnostics.
    pub spectrum: Vec<f64>,
}

impl TruncatedSvd {
    pub fn rank(&self) -> usize {
        self.singular_values.len()
    }

    /// `V diag(1/s) U^T`.
    pub fn pseudoinverse(&self) -> DMatrix<f64> {
        let mut v_scaled = self.v_t.transpose();
        for (j, s) in self.singular_values.iter().enumerate() {
            v_scaled.column_mut(j).scale_mut(1.0 / s);
        }
        v_scaled * self.u.transpose()
    }
}

/// Truncated SVD of `m`. Singular values below `rel_tol * s_max` are
/// treated as zero regardless of the rule.
pub fn truncated_svd(m: &DMatrix<f64>, rule: RankRule) -> Result<TruncatedSvd> {
    if m.nrows() == 0 || m.ncols() == 0 {
        return Err(Error::Dimension("SVD of an empty matrix".into()));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("SVD input has non-finite entries".into()));
    }
    // Work on the orientation with few rows: the gram-free route through
    // nalgebra's bidiagonalization is accurate either way, but a tall
    // matrix keeps the V factor small.
    let tall = m.nrows() >= m.ncols();
    let svd = if tall {
        m.clone().svd(true, true)
    } else {
        m.transpose().svd(true, true)
    };
    let (u_full, v_t_full) = match (svd.u, svd.v_t) {
        (Some(u), Some(v_t)) => {
            if tall {
                (u, v_t)
            } else {
                (v_t.transpose(), u.transpose())
            }
        }
        _ => return Err(Error::Numeric("SVD did not produce singular vectors".into())),
    };
    let s: Vec<f64> = svd.singular_values.iter().copied().collect();

    // nalgebra does not promise sorted output.
    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_by(|&a, &b| s[b].total_cmp(&s[a]));
    let spectrum: Vec<f64> = order.iter().map(|&i| s[i]).collect();

    let s_max = spectrum.first().copied().unwrap_or(0.0);
    let numeric_rank = spectrum
        .iter()
        .take_while(|&&v| v > s_max * 1e-13 && v > 0.0)
        .count();
    let requested = match rule {
        RankRule::Fixed(r) => r,
        RankRule::Energy(frac) => {
            let total: f64 = spectrum.iter().map(|v| v * v).sum();
            let mut acc = 0.0;
            let mut r = 0;
            for v in &spectrum {
                acc += v * v;
                r += 1;
                if acc >= frac * total {
                    break;
                }
            }
            r
        }
    };
    let rank = requested.min(numeric_rank);
    if rank == 0 {
        return Err(Error::Numeric("matrix is numerically zero".into()));
    }

    let u = DMatrix::from_fn(u_full.nrows(), rank, |i, j| u_full[(i, order[j])]);
    let v_t = DMatrix::from_fn(rank, v_t_full.ncols(), |i, j| v_t_full[(order[i], j)]);
    Ok(TruncatedSvd {
        u,
        singular_values: spectrum[..rank].to_vec(),
        v_t,
        requested_rank: requested,
        spectrum,
    })
}

/// Largest eigenvalue modulus.
pub fn spectral_radius(a: &DMatrix<f64>) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    a.complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max)
}

pub fn frobenius(a: &DMatrix<f64>) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pseudoinverse_of_full_rank_matrix_is_a_left_inverse() {
        let m = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 7.0]);
        let p = truncated_svd(&m, RankRule::Fixed(2)).unwrap().pseudoinverse();
        let eye = &p * &m;
        assert!((eye - DMatrix::identity(2, 2)).abs().max() < 1e-12);
    }

    #[test]
    fn wide_and_tall_orientations_agree() {
        let m = DMatrix::from_fn(3, 40, |i, j| ((i * 7 + j * 3) % 11) as f64 - 5.0);
        let a = truncated_svd(&m, RankRule::Fixed(3)).unwrap().pseudoinverse();
        let b = truncated_svd(&m.transpose(), RankRule::Fixed(3))
            .unwrap()
            .pseudoinverse()
            .transpose();
        assert!((a - b).abs().max() < 1e-12);
    }

    #[test]
    fn rank_is_reduced_to_numeric_rank() {
        let m = DMatrix::from_row_slice(3, 3, &[1.0, 2.0, 3.0, 2.0, 4.0, 6.0, 1.0, 0.0, 1.0]);
        let svd = truncated_svd(&m, RankRule::Fixed(3)).unwrap();
        assert_eq!(svd.rank(), 2);
        assert_eq!(svd.requested_rank, 3);
    }

    #[test]
    fn energy_rule_keeps_dominant_directions() {
        let m = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![30.0, 1.0, 1e-4]));
        let svd = truncated_svd(&m, RankRule::Energy(0.9999)).unwrap();
        assert_eq!(svd.rank(), 2);
    }

    #[test]
    fn spectral_radius_of_rotation_scaled() {
        let a = DMatrix::from_row_slice(2, 2, &[0.0, -0.5, 0.5, 0.0]);
        assert!((spectral_radius(&a) - 0.5).abs() < 1e-12);
    }
}
