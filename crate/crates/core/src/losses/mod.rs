//! Training losses with hand-derived gradients.
//!
//! Every term returns its value together with the gradient with respect to
//! whatever it is differentiated against: pose (translation and Euler
//! angles), shape code (blend probabilities and per-cluster coefficients),
//! sub-type logits, or raw mesh vertices. [`gradcheck`] compares these
//! against central finite differences.

pub mod gradcheck;
mod total;

use nalgebra::{Matrix3, Vector3};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    euler_to_matrix_derivatives, normalize_angle, project_point_with_jacobian, CameraIntrinsics,
    Keypoint2D, Pose6DoF,
};
use crate::mesh::CanonicalMesh;
use crate::shape_space::{CodeGradient, ShapeCode, ShapeSpace};

pub use total::{loss_total, InstanceTarget, LossContext, LossReport, SceneTargets, TermValues};

/// Weights of the seven loss terms in the total objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub loc: f64,
    pub glo: f64,
    pub kpts: f64,
    pub mesh: f64,
    pub trans: f64,
    pub rot: f64,
    pub cls: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            loc: 5.0,
            glo: 5.0,
            kpts: 0.01,
            mesh: 10.0,
            trans: 0.5,
            rot: 1.0,
            cls: 0.5,
        }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        Self {
            loc: 0.0,
            glo: 0.0,
            kpts: 0.0,
            mesh: 0.0,
            trans: 0.0,
            rot: 0.0,
            cls: 0.0,
        }
    }

    pub fn as_array(&self) -> [f64; 7] {
        [self.loc, self.glo, self.kpts, self.mesh, self.trans, self.rot, self.cls]
    }

    pub fn validate(&self) -> Result<()> {
        if self.as_array().iter().all(|w| w.is_finite() && *w >= 0.0) {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!("loss weights must be finite and non-negative: {self:?}")))
        }
    }
}

/// Plane `a·x + b·y + c·z + d = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Plane {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
}

impl Plane {
    pub fn normal(&self) -> Vector3<f64> {
        Vector3::new(self.a, self.b, self.c)
    }

    /// The same plane with all four coefficients multiplied by `k`.
    pub fn scaled(&self, k: f64) -> Self {
        Self {
            a: self.a * k,
            b: self.b * k,
            c: self.c * k,
            d: self.d * k,
        }
    }
}

/// Unnormalized normal of the plane through three points, or
/// [`Error::DegenerateTriple`] when they are (nearly) collinear.
fn triple_normal(p: &[Vector3<f64>; 3]) -> Result<Vector3<f64>> {
    let e1 = p[1] - p[0];
    let e2 = p[2] - p[0];
    let scale = e1.norm().max(e2.norm()).max((p[2] - p[1]).norm());
    let n = e1.cross(&e2);
    if scale == 0.0 || !(n.norm() > 1e-9 * scale * scale) {
        return Err(Error::DegenerateTriple);
    }
    Ok(n)
}

/// Plane through three points with a unit normal along `(p1 − p0) × (p2 − p0)`.
pub fn fit_plane(points: &[Vector3<f64>; 3]) -> Result<Plane> {
    let n = triple_normal(points)?.normalize();
    Ok(Plane {
        a: n.x,
        b: n.y,
        c: n.z,
        d: -n.dot(&points[0]),
    })
}

/// `|a·x + b·y + c·z + d| / √(a² + b² + c²)`.
pub fn point_plane_distance(plane: &Plane, p: &Vector3<f64>) -> f64 {
    (plane.normal().dot(p) + plane.d).abs() / plane.normal().norm()
}

/// Distance of `p[3]` from the plane through `p[0..3]`, with its gradient
/// with respect to each of the four points.
pub(crate) fn coplanar_residual(p: &[Vector3<f64>; 4]) -> Result<(f64, [Vector3<f64>; 4])> {
    let n = triple_normal(&[p[0], p[1], p[2]])?;
    let (e1, e2, q) = (p[1] - p[0], p[2] - p[0], p[3] - p[0]);
    let nn = n.norm();
    let h = n.dot(&q);
    let s = if h > 0.0 {
        1.0
    } else if h < 0.0 {
        -1.0
    } else {
        0.0
    };
    let value = h.abs() / nn;
    let w = q * (s / nn) - n * (h.abs() / (nn * nn * nn));
    let g1 = e2.cross(&w);
    let g2 = w.cross(&e1);
    let g3 = n * (s / nn);
    Ok((value, [-g1 - g2 - g3, g1, g2, g3]))
}

/// Scene-level prediction for one car.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstancePrediction {
    pub pose: Pose6DoF,
    pub shape_code: ShapeCode,
    pub subtype_logits: Vec<f64>,
}

impl InstancePrediction {
    pub fn param_count(&self) -> usize {
        6 + self.shape_code.cluster_probs.len()
            + self.shape_code.coefficients.iter().map(Vec::len).sum::<usize>()
            + self.subtype_logits.len()
    }

    /// Flat parameter vector: translation, Euler angles, probabilities,
    /// coefficients cluster by cluster, logits.
    pub fn to_params(&self) -> Vec<f64> {
        let mut x = Vec::with_capacity(self.param_count());
        x.extend(self.pose.translation.iter());
        x.extend(self.pose.rotation.iter());
        x.extend(&self.shape_code.cluster_probs);
        for c in &self.shape_code.coefficients {
            x.extend(c);
        }
        x.extend(&self.subtype_logits);
        x
    }

    /// Inverse of [`Self::to_params`], using `self` for the layout.
    pub fn with_params(&self, x: &[f64]) -> Self {
        assert_eq!(x.len(), self.param_count(), "parameter vector length");
        let mut out = self.clone();
        let mut it = x.iter().copied();
        let mut next = || it.next().expect("length checked above");
        out.pose.translation = Vector3::new(next(), next(), next());
        out.pose.rotation = Vector3::new(next(), next(), next());
        for p in &mut out.shape_code.cluster_probs {
            *p = next();
        }
        for c in &mut out.shape_code.coefficients {
            for v in c.iter_mut() {
                *v = next();
            }
        }
        for l in &mut out.subtype_logits {
            *l = next();
        }
        out
    }
}

/// Gradient of a scalar with respect to one [`InstancePrediction`].
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceGradient {
    pub translation: Vector3<f64>,
    pub rotation: Vector3<f64>,
    pub shape: CodeGradient,
    pub logits: Vec<f64>,
}

impl InstanceGradient {
    pub fn zeros(space: &ShapeSpace, logits: usize) -> Self {
        Self {
            translation: Vector3::zeros(),
            rotation: Vector3::zeros(),
            shape: CodeGradient::zeros(space),
            logits: vec![0.0; logits],
        }
    }

    /// Same layout as [`InstancePrediction::to_params`].
    pub fn to_vec(&self) -> Vec<f64> {
        let mut x = Vec::new();
        x.extend(self.translation.iter());
        x.extend(self.rotation.iter());
        x.extend(&self.shape.cluster_probs);
        for c in &self.shape.coefficients {
            x.extend(c);
        }
        x.extend(&self.logits);
        x
    }

    pub fn norm(&self) -> f64 {
        self.to_vec().iter().map(|g| g * g).sum::<f64>().sqrt()
    }

    pub(crate) fn add_code(&mut self, g: &CodeGradient, w: f64) {
        for (a, b) in self.shape.cluster_probs.iter_mut().zip(&g.cluster_probs) {
            *a += w * b;
        }
        for (ca, cb) in self.shape.coefficients.iter_mut().zip(&g.coefficients) {
            for (a, b) in ca.iter_mut().zip(cb) {
                *a += w * b;
            }
        }
    }
}

/// Rotation matrix and its Euler derivatives for backpropagating through
/// `x = R·m + T`.
pub(crate) struct PoseFrame {
    rot: Matrix3<f64>,
    drot: [Matrix3<f64>; 3],
    translation: Vector3<f64>,
}

impl PoseFrame {
    pub(crate) fn new(pose: &Pose6DoF) -> Self {
        Self {
            rot: pose.rotation_matrix(),
            drot: euler_to_matrix_derivatives(&pose.rotation),
            translation: pose.translation,
        }
    }

    pub(crate) fn apply(&self, m: &Vector3<f64>) -> Vector3<f64> {
        self.rot * m + self.translation
    }

    /// Adds the pose part of `g = ∂L/∂x` at canonical point `m` and returns `∂L/∂m`.
    pub(crate) fn backprop(
        &self,
        m: &Vector3<f64>,
        g: &Vector3<f64>,
        d_trans: &mut Vector3<f64>,
        d_rot: &mut Vector3<f64>,
    ) -> Vector3<f64> {
        *d_trans += g;
        for a in 0..3 {
            d_rot[a] += g.dot(&(self.drot[a] * m));
        }
        self.rot.transpose() * g
    }
}

/// Pose gradient plus per-landmark gradients of a reprojection term.
pub(crate) struct KptsTerm {
    pub value: f64,
    pub d_trans: Vector3<f64>,
    pub d_rot: Vector3<f64>,
    /// `∂L/∂m` for each landmark's canonical position.
    pub d_points: Vec<Vector3<f64>>,
}

pub(crate) fn kpts_term(
    pose: &Pose6DoF,
    points: &[Vector3<f64>],
    obs: &[Keypoint2D],
    cam: &CameraIntrinsics,
) -> KptsTerm {
    let mut out = KptsTerm {
        value: 0.0,
        d_trans: Vector3::zeros(),
        d_rot: Vector3::zeros(),
        d_points: vec![Vector3::zeros(); points.len()],
    };
    for (i, (m, o)) in points.iter().zip(obs).enumerate() {
        if !o.visible {
            continue;
        }
        // Behind-camera landmarks are treated as invisible.
        let Ok((proj, jac)) = project_point_with_jacobian(m, pose, cam) else {
            continue;
        };
        let r = proj.pixel - o.pixel();
        out.value += r.norm_squared();
        let g = r * 2.0;
        out.d_trans += jac.wrt_translation.transpose() * g;
        out.d_rot += jac.wrt_rotation.transpose() * g;
        out.d_points[i] = jac.wrt_point.transpose() * g;
    }
    out
}

fn check_landmarks(space: &ShapeSpace, landmarks: &[usize], obs: &[Keypoint2D]) -> Result<()> {
    if obs.len() != landmarks.len() {
        return Err(Error::DimensionMismatch {
            expected: landmarks.len(),
            got: obs.len(),
        });
    }
    if let Some(&bad) = landmarks.iter().find(|&&v| v >= space.vertex_count) {
        return Err(Error::InvalidInput(format!(
            "landmark vertex {bad} out of range for {} vertices",
            space.vertex_count
        )));
    }
    Ok(())
}

fn check_prediction(space: &ShapeSpace, pred: &InstancePrediction) -> Result<()> {
    // blend_flat performs the shape checks without the simplex requirement.
    if pred.shape_code.cluster_probs.len() != space.cluster_count()
        || pred.shape_code.coefficients.len() != space.cluster_count()
    {
        return Err(Error::DimensionMismatch {
            expected: space.cluster_count(),
            got: pred.shape_code.cluster_probs.len(),
        });
    }
    for (c, coeffs) in space.clusters.iter().zip(&pred.shape_code.coefficients) {
        if coeffs.len() != c.components() {
            return Err(Error::DimensionMismatch {
                expected: c.components(),
                got: coeffs.len(),
            });
        }
    }
    Ok(())
}

/// Reprojection loss `Σ_i V_i ‖p_i − p̄_i‖²` over the landmarks of the
/// blended, posed mesh. Invisible and behind-camera landmarks contribute 0.
pub fn loss_kpts(
    pred: &InstancePrediction,
    space: &ShapeSpace,
    landmarks: &[usize],
    obs: &[Keypoint2D],
    cam: &CameraIntrinsics,
) -> Result<(f64, InstanceGradient)> {
    check_prediction(space, pred)?;
    check_landmarks(space, landmarks, obs)?;
    let code = &pred.shape_code;
    let points: Vec<Vector3<f64>> = landmarks.iter().map(|&v| space.blend_vertex(code, v)).collect();
    let term = kpts_term(&pred.pose, &points, obs, cam);
    let sparse: Vec<(usize, Vector3<f64>)> =
        landmarks.iter().copied().zip(term.d_points.iter().copied()).collect();
    let mut grad = InstanceGradient::zeros(space, pred.subtype_logits.len());
    grad.translation = term.d_trans;
    grad.rotation = term.d_rot;
    grad.shape = space.pullback_sparse(code, &sparse);
    Ok((term.value, grad))
}

/// Posed center `R · mean(M) + T` of one prediction's blended mesh.
fn posed_center(space: &ShapeSpace, pred: &InstancePrediction) -> Result<Vector3<f64>> {
    Ok(PoseFrame::new(&pred.pose).apply(&space.blend_centroid(&pred.shape_code)))
}

/// Inter-instance co-planarity: four instances are drawn with a seeded RNG,
/// a plane is fitted through the first three posed mesh centers, and the
/// value is the fourth center's distance from it.
///
/// Returns 0 with zero gradients for fewer than four instances, or when ten
/// draws in a row give collinear triples.
pub fn loss_coplanar_global(
    preds: &[InstancePrediction],
    space: &ShapeSpace,
    seed: u64,
) -> Result<(f64, Vec<InstanceGradient>)> {
    for p in preds {
        check_prediction(space, p)?;
    }
    let mut grads: Vec<InstanceGradient> = preds
        .iter()
        .map(|p| InstanceGradient::zeros(space, p.subtype_logits.len()))
        .collect();
    let Some((quad, value, point_grads)) =
        coplanar_quadruple(preds.len(), seed, |i| posed_center(space, &preds[i]))?
    else {
        return Ok((0.0, grads));
    };
    for (&i, g) in quad.iter().zip(point_grads.iter()) {
        let pred = &preds[i];
        let frame = PoseFrame::new(&pred.pose);
        let m = space.blend_centroid(&pred.shape_code);
        let out = &mut grads[i];
        let dm = frame.backprop(&m, g, &mut out.translation, &mut out.rotation);
        out.add_code(&space.pullback_centroid(&pred.shape_code, &dm), 1.0);
    }
    Ok((value, grads))
}

/// Indices drawn by the global co-planar term for `n` instances and `seed`,
/// its value, and the gradient with respect to each drawn center.
/// `None` for fewer than four instances or persistent degeneracy.
#[allow(clippy::type_complexity)]
pub(crate) fn coplanar_quadruple(
    n: usize,
    seed: u64,
    mut center: impl FnMut(usize) -> Result<Vector3<f64>>,
) -> Result<Option<([usize; 4], f64, [Vector3<f64>; 4])>> {
    const MAX_DRAWS: usize = 10;
    if n < 4 {
        return Ok(None);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..MAX_DRAWS {
        let drawn = sample(&mut rng, n, 4).into_vec();
        let quad = [drawn[0], drawn[1], drawn[2], drawn[3]];
        let pts = [center(quad[0])?, center(quad[1])?, center(quad[2])?, center(quad[3])?];
        match coplanar_residual(&pts) {
            Ok((value, g)) => return Ok(Some((quad, value, g))),
            Err(Error::DegenerateTriple) => continue,
            Err(e) => return Err(e),
        }
    }
    Ok(None)
}

fn check_wheel_sets(space: &ShapeSpace, wheel_sets: &[Vec<usize>; 4]) -> Result<()> {
    for set in wheel_sets {
        if set.is_empty() {
            return Err(Error::InvalidInput("wheel vertex set is empty".into()));
        }
        if set.iter().any(|&v| v >= space.vertex_count) {
            return Err(Error::InvalidInput("wheel vertex index out of range".into()));
        }
    }
    Ok(())
}

/// Intra-instance co-planarity of the four wheel centroids, ordered
/// front-left, front-right, rear-left, rear-right: distance of the rear-right
/// centroid from the plane through the other three.
pub fn loss_coplanar_local(
    pred: &InstancePrediction,
    space: &ShapeSpace,
    wheel_sets: &[Vec<usize>; 4],
) -> Result<(f64, InstanceGradient)> {
    check_prediction(space, pred)?;
    check_wheel_sets(space, wheel_sets)?;
    let code = &pred.shape_code;
    let lookup = |v: usize| space.blend_vertex(code, v);
    let frame = PoseFrame::new(&pred.pose);
    let mut grad = InstanceGradient::zeros(space, pred.subtype_logits.len());
    let (value, dm) = wheel_term(&frame, wheel_sets, lookup, &mut grad.translation, &mut grad.rotation)?;
    let mut sparse = Vec::new();
    for (set, g) in wheel_sets.iter().zip(dm) {
        let per = g / set.len() as f64;
        sparse.extend(set.iter().map(|&v| (v, per)));
    }
    grad.shape = space.pullback_sparse(code, &sparse);
    Ok((value, grad))
}

/// Value of the wheel co-planarity term, accumulating pose gradients and
/// returning `∂L/∂(canonical wheel centroid)` per wheel.
pub(crate) fn wheel_term(
    frame: &PoseFrame,
    wheel_sets: &[Vec<usize>; 4],
    vertex: impl Fn(usize) -> Vector3<f64>,
    d_trans: &mut Vector3<f64>,
    d_rot: &mut Vector3<f64>,
) -> Result<(f64, [Vector3<f64>; 4])> {
    let canon: [Vector3<f64>; 4] = std::array::from_fn(|k| {
        let set = &wheel_sets[k];
        set.iter().map(|&v| vertex(v)).sum::<Vector3<f64>>() / set.len() as f64
    });
    let posed = canon.map(|m| frame.apply(&m));
    let (value, g) = coplanar_residual(&posed)?;
    let dm = std::array::from_fn(|k| frame.backprop(&canon[k], &g[k], d_trans, d_rot));
    Ok((value, dm))
}

/// Mean squared vertex distance and its gradient `2(M_j − M̄_j)/m`.
pub fn loss_mesh(pred: &CanonicalMesh, gt: &CanonicalMesh) -> Result<(f64, Vec<Vector3<f64>>)> {
    if !pred.same_topology(gt) {
        return Err(Error::TopologyMismatch(format!("{} vs {}", pred.car_id, gt.car_id)));
    }
    Ok(mesh_term(&pred.vertices, &gt.vertices))
}

pub(crate) fn mesh_term(pred: &[Vector3<f64>], gt: &[Vector3<f64>]) -> (f64, Vec<Vector3<f64>>) {
    if pred.is_empty() {
        return (0.0, Vec::new());
    }
    let m = pred.len() as f64;
    let value = crate::shape_space::vertex_mse(pred, gt);
    let grad = pred.iter().zip(gt).map(|(p, q)| (p - q) * (2.0 / m)).collect();
    (value, grad)
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `Σ_axes |T_pred − T_gt|`, with subgradient 0 at ties.
pub fn loss_trans(pred: &Vector3<f64>, gt: &Vector3<f64>) -> (f64, Vector3<f64>) {
    let d = pred - gt;
    (d.abs().sum(), d.map(sign))
}

/// Per-axis wrapped angular difference, summed over the three axes:
/// `δ` when `δ ≤ π`, otherwise `2π − δ`, with `δ = |r_pred − r_gt|`.
///
/// Inputs are normalized to `[−π, π]` first, which leaves in-range inputs
/// untouched and makes the loss invariant to adding full turns.
pub fn loss_rot(pred: &Vector3<f64>, gt: &Vector3<f64>) -> (f64, Vector3<f64>) {
    let mut value = 0.0;
    let mut grad = Vector3::zeros();
    for a in 0..3 {
        let d = normalize_angle(pred[a]) - normalize_angle(gt[a]);
        let delta = d.abs();
        if delta <= std::f64::consts::PI {
            value += delta;
            grad[a] = sign(d);
        } else {
            value += 2.0 * std::f64::consts::PI - delta;
            grad[a] = -sign(d);
        }
    }
    (value, grad)
}

/// Distance of any axis from a kink of [`loss_rot`] (`δ = 0` or `δ = π`).
pub fn loss_rot_kink_distance(pred: &Vector3<f64>, gt: &Vector3<f64>) -> f64 {
    (0..3)
        .map(|a| {
            let delta = (normalize_angle(pred[a]) - normalize_angle(gt[a])).abs();
            delta.min((delta - std::f64::consts::PI).abs())
        })
        .fold(f64::INFINITY, f64::min)
}

/// Softmax cross-entropy of the sub-type logits against `label`.
pub fn loss_cls(logits: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    if label >= logits.len() {
        return Err(Error::InvalidInput(format!(
            "label {label} out of range for {} logits",
            logits.len()
        )));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    let value = z.ln() + max - logits[label];
    let mut grad: Vec<f64> = exps.iter().map(|e| e / z).collect();
    grad[label] -= 1.0;
    Ok((value, grad))
}
