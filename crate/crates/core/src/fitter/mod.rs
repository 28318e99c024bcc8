//! Levenberg-Marquardt recovery of pose and shape from 2D keypoints.
//!
//! For every cluster of the shape space and every starting yaw the fitter
//! minimizes the reprojection error of the landmark vertices plus a
//! Mahalanobis prior on the cluster's PCA coefficients, then keeps the best
//! start. The returned code is one-hot on the chosen cluster.

mod lm;

use std::f64::consts::{FRAC_PI_2, PI};

use nalgebra::{DMatrix, DVector, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    normalize_euler, project_point, project_point_with_jacobian, CameraIntrinsics, Keypoint2D, Pose6DoF,
};
use crate::scenegen::{AnnotatedInstance, SceneAnnotation};
use crate::shape_space::{ClusterModel, ShapeCode, ShapeSpace};

pub use lm::lm_step;

/// Damping above this value ends a run as not converged.
pub const MAX_DAMPING: f64 = 1e12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitConfig {
    pub max_iters: usize,
    pub damping_init: f64,
    pub damping_factor: f64,
    pub rel_tol: f64,
    pub min_visible: usize,
    pub multistart_yaw: Vec<f64>,
    /// Weight of the coefficient prior `λ_reg · Σ c_j² / λ_j`.
    pub lambda_reg: f64,
    /// Re-run LM on the winning start with the prior and the coefficient
    /// box switched off, so that noiseless observations are matched exactly
    /// instead of with the prior's shrinkage bias. The refinement is kept
    /// only when its coefficients end within the box.
    pub refine_without_prior: bool,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            max_iters: 100,
            damping_init: 1e-3,
            damping_factor: 10.0,
            rel_tol: 1e-8,
            min_visible: 6,
            multistart_yaw: vec![0.0, FRAC_PI_2, PI, 3.0 * FRAC_PI_2],
            lambda_reg: 1e-2,
            refine_without_prior: true,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidInput(format!("fit config: {m}")));
        if self.max_iters == 0 {
            return bad("max_iters must be positive");
        }
        if !(self.damping_init > 0.0) || !(self.rel_tol > 0.0) {
            return bad("damping_init and rel_tol must be positive");
        }
        if !(self.damping_factor > 1.0) {
            return bad("damping_factor must exceed 1");
        }
        if !(self.lambda_reg >= 0.0) {
            return bad("lambda_reg must be non-negative");
        }
        if self.multistart_yaw.is_empty() || self.multistart_yaw.iter().any(|y| !y.is_finite()) {
            return bad("multistart_yaw must hold at least one finite angle");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub pose: Pose6DoF,
    pub shape_code: ShapeCode,
    /// Reprojection cost `Σ_i V_i ‖p_i − p̄_i‖²` at the solution, px².
    pub final_cost: f64,
    /// Coefficient prior `λ_reg · Σ c_j² / λ_j` at the solution (reported
    /// with the configured `λ_reg` even after a prior-free refinement).
    pub prior_cost: f64,
    pub iters: usize,
    pub converged: bool,
    pub cluster_chosen: usize,
}

/// Residuals of one cluster's fitting problem over the parameter vector
/// `[T (3), Euler angles (3), coefficients (n)]`.
///
/// Rows are `2 × landmarks` reprojection residuals (zero for invisible
/// keypoints) followed by `n` prior rows `√(λ_reg/λ_j) · c_j`.
pub struct FitProblem<'a> {
    pub cluster: &'a ClusterModel,
    pub landmarks: &'a [usize],
    pub obs: &'a [Keypoint2D],
    pub cam: &'a CameraIntrinsics,
    pub lambda_reg: f64,
}

impl FitProblem<'_> {
    pub fn param_count(&self) -> usize {
        6 + self.cluster.components()
    }

    pub fn residual_count(&self) -> usize {
        2 * self.landmarks.len() + self.cluster.components()
    }

    fn landmark(&self, v: usize, coeffs: &[f64]) -> Vector3<f64> {
        let c = self.cluster;
        let r = 3 * v;
        let mut p = Vector3::new(c.mean[r], c.mean[r + 1], c.mean[r + 2]);
        for (k, &a) in coeffs.iter().enumerate() {
            p += Vector3::new(c.basis[(r, k)], c.basis[(r + 1, k)], c.basis[(r + 2, k)]) * a;
        }
        p
    }

    fn prior_scale(&self, j: usize) -> f64 {
        let lambda = self.cluster.eigenvalues[j];
        if lambda > 0.0 {
            (self.lambda_reg / lambda).sqrt()
        } else {
            0.0
        }
    }

    pub fn pose_of(x: &[f64]) -> Pose6DoF {
        Pose6DoF::new(Vector3::new(x[0], x[1], x[2]), Vector3::new(x[3], x[4], x[5]))
    }

    /// Residual vector, or [`Error::NonPositiveDepth`] when a visible
    /// landmark falls behind the camera.
    pub fn residuals(&self, x: &[f64]) -> Result<DVector<f64>> {
        Ok(self.evaluate(x, false)?.0)
    }

    pub fn residuals_and_jacobian(&self, x: &[f64]) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let (r, j) = self.evaluate(x, true)?;
        Ok((r, j.expect("jacobian requested")))
    }

    fn evaluate(&self, x: &[f64], with_jacobian: bool) -> Result<(DVector<f64>, Option<DMatrix<f64>>)> {
        if x.len() != self.param_count() {
            return Err(Error::DimensionMismatch {
                expected: self.param_count(),
                got: x.len(),
            });
        }
        let n = self.cluster.components();
        let pose = Self::pose_of(x);
        let coeffs = &x[6..];
        let mut r = DVector::zeros(self.residual_count());
        let mut jac = with_jacobian.then(|| DMatrix::zeros(self.residual_count(), self.param_count()));
        for (i, (&v, o)) in self.landmarks.iter().zip(self.obs).enumerate() {
            if !o.visible {
                continue;
            }
            let p = self.landmark(v, coeffs);
            let (proj, pj) = project_point_with_jacobian(&p, &pose, self.cam)?;
            let d = proj.pixel - o.pixel();
            r[2 * i] = d.x;
            r[2 * i + 1] = d.y;
            if let Some(j) = jac.as_mut() {
                j.view_mut((2 * i, 0), (2, 3)).copy_from(&pj.wrt_translation);
                j.view_mut((2 * i, 3), (2, 3)).copy_from(&pj.wrt_rotation);
                let rows = self.cluster.basis.view((3 * v, 0), (3, n));
                j.view_mut((2 * i, 6), (2, n)).copy_from(&(pj.wrt_point * rows));
            }
        }
        let base = 2 * self.landmarks.len();
        for k in 0..n {
            let s = self.prior_scale(k);
            r[base + k] = s * coeffs[k];
            if let Some(j) = jac.as_mut() {
                j[(base + k, 6 + k)] = s;
            }
        }
        Ok((r, jac))
    }

    /// Splits `‖r‖²` into reprojection and prior parts.
    pub fn cost_parts(&self, r: &DVector<f64>) -> (f64, f64) {
        let base = 2 * self.landmarks.len();
        let reproj = r.rows(0, base).norm_squared();
        let prior = r.rows(base, r.len() - base).norm_squared();
        (reproj, prior)
    }

    fn clamp(&self, x: &mut [f64]) {
        for (k, &lambda) in self.cluster.eigenvalues.iter().enumerate() {
            let bound = 3.0 * lambda.max(0.0).sqrt();
            x[6 + k] = x[6 + k].clamp(-bound, bound);
        }
    }
}

/// Outcome of one LM run.
#[derive(Debug, Clone)]
struct Run {
    x: Vec<f64>,
    reproj: f64,
    prior: f64,
    iters: usize,
    converged: bool,
    /// Total cost after initialization and after each accepted step.
    #[cfg_attr(not(test), allow(dead_code))]
    history: Vec<f64>,
}

impl Run {
    fn total(&self) -> f64 {
        self.reproj + self.prior
    }
}

/// With `bounded`, shape coefficients are clamped to ±3√λ_j after each step.
fn run_lm(problem: &FitProblem<'_>, x0: Vec<f64>, cfg: &FitConfig, bounded: bool) -> Result<Run> {
    let mut x = x0;
    let (mut r, mut jac) = problem.residuals_and_jacobian(&x)?;
    let mut cost = r.norm_squared();
    let mut history = vec![cost];
    let mut damping = cfg.damping_init;
    let mut converged = false;
    let mut iters = 0;
    while iters < cfg.max_iters && !converged {
        iters += 1;
        if cost <= f64::MIN_POSITIVE || (jac.transpose() * &r).amax() <= 1e-14 * cost.max(1.0) {
            converged = true;
            break;
        }
        let mut accepted = false;
        while damping <= MAX_DAMPING {
            let step = lm_step(&r, &jac, damping)?;
            let mut trial: Vec<f64> = x.iter().zip(step.iter()).map(|(a, d)| a + d).collect();
            if bounded {
                problem.clamp(&mut trial);
            }
            let outcome = problem.residuals_and_jacobian(&trial);
            match outcome {
                Ok((tr, tj)) if tr.norm_squared() < cost => {
                    let new_cost = tr.norm_squared();
                    let rel = (cost - new_cost) / cost;
                    let moved = trial
                        .iter()
                        .zip(&x)
                        .map(|(a, b)| (a - b).abs())
                        .fold(0.0, f64::max);
                    x = trial;
                    r = tr;
                    jac = tj;
                    cost = new_cost;
                    history.push(cost);
                    damping = (damping / cfg.damping_factor).max(1e-15);
                    accepted = true;
                    converged = rel <= cfg.rel_tol || moved <= 1e-12;
                    break;
                }
                _ => damping *= cfg.damping_factor,
            }
        }
        if !accepted {
            break;
        }
    }
    let (reproj, prior) = problem.cost_parts(&r);
    Ok(Run {
        x,
        reproj,
        prior,
        iters,
        converged,
        history,
    })
}

/// Starting parameters for one cluster and yaw: the cluster mean shape,
/// upright at `yaw`, at the depth where its landmark spread matches the
/// observed pixel spread.
fn initial_params(problem: &FitProblem<'_>, yaw: f64) -> Vec<f64> {
    let cam = problem.cam;
    let zeros = vec![0.0; problem.cluster.components()];
    let visible: Vec<(Vector3<f64>, nalgebra::Vector2<f64>)> = problem
        .landmarks
        .iter()
        .zip(problem.obs)
        .filter(|(_, o)| o.visible)
        .map(|(&v, o)| (problem.landmark(v, &zeros), o.pixel()))
        .collect();
    let k = visible.len() as f64;
    let m3 = visible.iter().map(|(p, _)| p).sum::<Vector3<f64>>() / k;
    let m2 = visible.iter().map(|(_, q)| q).sum::<nalgebra::Vector2<f64>>() / k;
    let s3 = (visible.iter().map(|(p, _)| (p - m3).norm_squared()).sum::<f64>() / k).sqrt();
    let s2 = (visible.iter().map(|(_, q)| (q - m2).norm_squared()).sum::<f64>() / k).sqrt();
    let f = 0.5 * (cam.fx + cam.fy);
    let depth = if s2 > 1e-9 && s3 > 0.0 { f * s3 / s2 } else { 10.0 };
    let ray = Vector3::new((m2.x - cam.px) / cam.fx, (m2.y - cam.py) / cam.fy, 1.0) * depth;
    let rotation = Vector3::new(0.0, yaw, 0.0);
    let t = ray - crate::geometry::euler_to_matrix(&rotation) * m3;
    let mut x = vec![t.x, t.y, t.z, 0.0, yaw, 0.0];
    x.extend(zeros);
    x
}

/// Fits pose and shape to one instance's 66 keypoints.
///
/// Every cluster is tried from every starting yaw, each start solving for
/// the pose on the cluster mean before freeing the shape; the run with the lowest
/// total cost (reprojection plus prior) wins, ties going to the lower
/// cluster index and then the lower yaw index. The winner is then refined
/// without the prior when [`FitConfig::refine_without_prior`] is set.
pub fn fit_instance(
    obs: &[Keypoint2D],
    cam: &CameraIntrinsics,
    space: &ShapeSpace,
    landmarks: &[usize],
    cfg: &FitConfig,
) -> Result<FitResult> {
    cfg.validate()?;
    cam.validate()?;
    if obs.len() != landmarks.len() {
        return Err(Error::DimensionMismatch {
            expected: landmarks.len(),
            got: obs.len(),
        });
    }
    if landmarks.iter().any(|&v| v >= space.vertex_count) {
        return Err(Error::InvalidInput("landmark vertex index out of range".into()));
    }
    let visible = obs.iter().filter(|o| o.visible).count();
    if visible < cfg.min_visible.max(1) {
        return Err(Error::TooFewKeypoints {
            visible,
            required: cfg.min_visible.max(1),
        });
    }

    let mut best: Option<(usize, Run)> = None;
    for (ci, cluster) in space.clusters.iter().enumerate() {
        let problem = FitProblem {
            cluster,
            landmarks,
            obs,
            cam,
            lambda_reg: cfg.lambda_reg,
        };
        let rigid = cluster.mean_only();
        let pose_problem = FitProblem {
            cluster: &rigid,
            ..problem
        };
        for &yaw in &cfg.multistart_yaw {
            // Pose on the cluster mean first, then pose and shape together.
            // A start whose visible landmarks fall behind the camera is skipped.
            let Ok(posed) = run_lm(&pose_problem, initial_params(&pose_problem, yaw), cfg, true) else {
                continue;
            };
            let mut x0 = posed.x;
            x0.resize(problem.param_count(), 0.0);
            let Ok(run) = run_lm(&problem, x0, cfg, true) else {
                continue;
            };
            if best.as_ref().is_none_or(|(_, b)| run.total() < b.total()) {
                best = Some((ci, run));
            }
        }
    }
    let (cluster, mut run) = best.ok_or_else(|| {
        Error::InvalidInput("no multistart produced a valid initialization".into())
    })?;
    let problem = FitProblem {
        cluster: &space.clusters[cluster],
        landmarks,
        obs,
        cam,
        lambda_reg: cfg.lambda_reg,
    };
    if cfg.refine_without_prior && cfg.lambda_reg > 0.0 {
        let free = FitProblem { lambda_reg: 0.0, ..problem };
        // Unclamped, so a run stopped against the box can still reach an
        // interior exact fit; the result is kept only if it ends inside.
        let refined = run_lm(&free, run.x.clone(), cfg, false)?;
        let mut inside = refined.x.clone();
        problem.clamp(&mut inside);
        if refined.reproj <= run.reproj && inside == refined.x {
            run = Run {
                iters: run.iters + refined.iters,
                ..refined
            };
        }
    }
    let (_, prior_cost) = problem.cost_parts(&problem.residuals(&run.x)?);
    let pose = FitProblem::pose_of(&run.x);
    Ok(FitResult {
        pose: Pose6DoF::new(pose.translation, normalize_euler(&pose.rotation)),
        shape_code: ShapeCode::one_hot(space, cluster, run.x[6..].to_vec()),
        final_cost: run.reproj,
        prior_cost,
        iters: run.iters,
        converged: run.converged,
        cluster_chosen: cluster,
    })
}

/// Outcome counts of [`fit_scene`].
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SceneFitSummary {
    pub fitted: usize,
    pub not_converged: usize,
    /// `car_id`s left out for having too few visible keypoints.
    pub skipped: Vec<String>,
    pub fits: Vec<InstanceFit>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceFit {
    pub car_id: String,
    pub result: FitResult,
}

/// Confidence of a fit: `1 / (1 + mean squared reprojection error in px²)`.
pub fn fit_score(result: &FitResult, visible: usize) -> f64 {
    1.0 / (1.0 + result.final_cost / visible.max(1) as f64)
}

/// Fits every instance of an annotated image and returns the predictions as
/// an annotation with scores, shape codes, and reprojected keypoints.
/// Instances with too few visible keypoints are skipped.
pub fn fit_scene(
    scene: &SceneAnnotation,
    space: &ShapeSpace,
    landmarks: &[usize],
    cfg: &FitConfig,
) -> Result<(SceneAnnotation, SceneFitSummary)> {
    let mut summary = SceneFitSummary::default();
    let mut instances = Vec::with_capacity(scene.instances.len());
    let (w, h) = (scene.image_size.0 as f64, scene.image_size.1 as f64);
    for inst in &scene.instances {
        let fit = match fit_instance(&inst.keypoints, &scene.camera, space, landmarks, cfg) {
            Ok(f) => f,
            Err(Error::TooFewKeypoints { .. }) => {
                summary.skipped.push(inst.car_id.clone());
                continue;
            }
            Err(e) => return Err(e),
        };
        summary.fitted += 1;
        summary.not_converged += usize::from(!fit.converged);
        let visible = inst.keypoints.iter().filter(|k| k.visible).count();
        let keypoints = landmarks
            .iter()
            .map(|&v| match project_point(&space.blend_vertex(&fit.shape_code, v), &fit.pose, &scene.camera) {
                Ok(p) if (0.0..=w).contains(&p.pixel.x) && (0.0..=h).contains(&p.pixel.y) => {
                    Keypoint2D::new(p.pixel.x, p.pixel.y, true)
                }
                _ => Keypoint2D::invisible(),
            })
            .collect();
        instances.push(AnnotatedInstance {
            car_id: inst.car_id.clone(),
            sub_type: inst.sub_type,
            pose: fit.pose,
            keypoints,
            score: Some(fit_score(&fit, visible)),
            shape_code: Some(fit.shape_code.clone()),
        });
        summary.fits.push(InstanceFit {
            car_id: inst.car_id.clone(),
            result: fit,
        });
    }
    Ok((
        SceneAnnotation {
            schema_version: scene.schema_version,
            camera: scene.camera,
            image_size: scene.image_size,
            instances,
        },
        summary,
    ))
}

#[cfg(test)]
mod tests;
