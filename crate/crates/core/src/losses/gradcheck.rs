//! Central finite-difference checks of analytic gradients and Jacobians.

use nalgebra::DMatrix;
use serde::Serialize;

pub const DEFAULT_EPS: f64 = 1e-6;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

/// Points closer than this many step sizes to a kink are not judged.
const KINK_MARGIN: f64 = 100.0;

/// Floor of the relative-error denominator, so all-zero gradients compare
/// absolutely.
const SCALE_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GradCheck {
    /// `max_i |a_i − n_i| / max(‖a‖∞, ‖n‖∞, 1e-8)`.
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub worst_index: Option<usize>,
    /// False when the point lies within the kink margin of a non-smooth
    /// point; such checks pass without being judged.
    pub smooth: bool,
    pub passed: bool,
}

fn judge(errors: impl Iterator<Item = (usize, f64)>, scale: f64, smooth: bool, tol: f64) -> GradCheck {
    let mut max_abs = 0.0;
    let mut worst = None;
    for (i, e) in errors {
        if e > max_abs || worst.is_none() || e.is_nan() {
            max_abs = e;
            worst = Some(i);
        }
    }
    let rel = max_abs / scale.max(SCALE_FLOOR);
    GradCheck {
        max_rel_error: rel,
        max_abs_error: max_abs,
        worst_index: worst,
        smooth,
        passed: !smooth || rel < tol,
    }
}

/// Central-difference gradient of `f` at `x`.
pub fn numeric_gradient(f: impl Fn(&[f64]) -> f64, x: &[f64], eps: f64) -> Vec<f64> {
    let mut work = x.to_vec();
    (0..x.len())
        .map(|i| {
            work[i] = x[i] + eps;
            let hi = f(&work);
            work[i] = x[i] - eps;
            let lo = f(&work);
            work[i] = x[i];
            (hi - lo) / (2.0 * eps)
        })
        .collect()
}

/// Compares `analytic` with central differences of `f` at `x`.
///
/// `kink_distance` is how far `x` is (in parameter units) from the nearest
/// non-smooth point of `f`; pass `f64::INFINITY` for smooth functions.
pub fn check_gradients(
    f: impl Fn(&[f64]) -> f64,
    x: &[f64],
    analytic: &[f64],
    eps: f64,
    kink_distance: f64,
) -> GradCheck {
    assert_eq!(x.len(), analytic.len(), "gradient length");
    let numeric = numeric_gradient(f, x, eps);
    let inf = |v: &[f64]| v.iter().fold(0.0f64, |m, a| m.max(a.abs()));
    let scale = inf(analytic).max(inf(&numeric));
    let smooth = kink_distance > KINK_MARGIN * eps;
    judge(
        analytic.iter().zip(&numeric).map(|(a, n)| (a - n).abs()).enumerate(),
        scale,
        smooth,
        DEFAULT_TOLERANCE,
    )
}

/// Central-difference Jacobian (`rows = outputs`) of `f` at `x`.
pub fn numeric_jacobian(f: impl Fn(&[f64]) -> Vec<f64>, x: &[f64], eps: f64) -> DMatrix<f64> {
    let mut work = x.to_vec();
    let mut cols = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        work[i] = x[i] + eps;
        let hi = f(&work);
        work[i] = x[i] - eps;
        let lo = f(&work);
        work[i] = x[i];
        cols.push(hi.iter().zip(&lo).map(|(h, l)| (h - l) / (2.0 * eps)).collect::<Vec<_>>());
    }
    let rows = cols.first().map_or(0, Vec::len);
    DMatrix::from_fn(rows, x.len(), |r, c| cols[c][r])
}

/// Jacobian analogue of [`check_gradients`]; the error scale is the largest
/// entry of either Jacobian. `worst_index` is the row-major entry index.
pub fn check_jacobian(
    f: impl Fn(&[f64]) -> Vec<f64>,
    x: &[f64],
    analytic: &DMatrix<f64>,
    eps: f64,
) -> GradCheck {
    let numeric = numeric_jacobian(f, x, eps);
    assert_eq!(numeric.shape(), analytic.shape(), "Jacobian shape");
    let scale = analytic.amax().max(numeric.amax());
    let cols = analytic.ncols();
    judge(
        (0..analytic.nrows())
            .flat_map(|r| (0..cols).map(move |c| (r, c)))
            .map(|(r, c)| (r * cols + c, (analytic[(r, c)] - numeric[(r, c)]).abs())),
        scale,
        true,
        DEFAULT_TOLERANCE,
    )
}
