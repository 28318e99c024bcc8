use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Damped Gauss-Newton step: solves `(JᵀJ + damping · diag(JᵀJ)) δ = −Jᵀr`.
///
/// Zero diagonal entries (parameters the residuals do not depend on) get a
/// unit diagonal instead so the system stays solvable; their step is zero.
pub fn lm_step(residuals: &DVector<f64>, jacobian: &DMatrix<f64>, damping: f64) -> Result<DVector<f64>> {
    if jacobian.nrows() != residuals.len() {
        return Err(Error::DimensionMismatch {
            expected: residuals.len(),
            got: jacobian.nrows(),
        });
    }
    if !(damping >= 0.0) {
        return Err(Error::InvalidInput(format!("damping must be non-negative, got {damping}")));
    }
    // Least squares on the stacked system [J; √damping · D] δ = [−r; 0],
    // solved by QR so the conditioning of J is not squared.
    let (m, n) = jacobian.shape();
    let mut stacked = DMatrix::zeros(m + n, n);
    stacked.view_mut((0, 0), (m, n)).copy_from(jacobian);
    for j in 0..n {
        let d = jacobian.column(j).norm_squared();
        stacked[(m + j, j)] = if d > 0.0 { (damping * d).sqrt() } else { 1.0 };
    }
    let mut rhs = DVector::zeros(m + n);
    rhs.rows_mut(0, m).copy_from(&(-residuals));
    let qr = stacked.qr();
    let qtb = qr.q().transpose() * rhs;
    qr.r()
        .solve_upper_triangular(&qtb)
        .ok_or_else(|| Error::InvalidInput("singular normal equations".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_residuals_give_zero_step() {
        let j = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 0.5, -1.0, 3.0, 1.0]);
        let step = lm_step(&DVector::zeros(3), &j, 1e-3).unwrap();
        assert_eq!(step, DVector::zeros(2));
    }

    #[test]
    fn undamped_step_solves_linear_least_squares() {
        // r(x) = A x − b at x = 0 is −b; the step must be the normal-equation solution.
        let a = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, 1.0, 1.0, 1.0, 2.0, 1.0, 3.0]);
        let b = DVector::from_vec(vec![1.0, 2.0, 2.0, 4.0]);
        let step = lm_step(&(-&b), &a, 0.0).unwrap();
        // Closed form for a line fit through (0,1),(1,2),(2,2),(3,4): intercept 0.9, slope 0.9.
        assert!((step[0] - 0.9).abs() < 1e-12 && (step[1] - 0.9).abs() < 1e-12);
    }

    #[test]
    fn damping_shrinks_the_step() {
        let a = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 1.0]);
        let r = DVector::from_vec(vec![1.0, 1.0]);
        let small = lm_step(&r, &a, 10.0).unwrap().norm();
        let large = lm_step(&r, &a, 0.0).unwrap().norm();
        assert!(small < large);
    }
}
