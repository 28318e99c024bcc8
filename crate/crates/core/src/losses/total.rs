use nalgebra::Vector3;
use serde::Serialize;

use super::{
    coplanar_quadruple, kpts_term, loss_cls, loss_rot, loss_trans, mesh_term, wheel_term,
    check_landmarks, check_prediction, check_wheel_sets, InstanceGradient, InstancePrediction,
    LossWeights, PoseFrame,
};
use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, Keypoint2D, Pose6DoF};
use crate::shape_space::ShapeSpace;

/// Ground truth for one instance.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceTarget {
    pub pose: Pose6DoF,
    /// Canonical-frame vertices of the true shape.
    pub vertices: Vec<Vector3<f64>>,
    pub keypoints: Vec<Keypoint2D>,
    pub sub_type: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneTargets {
    pub camera: CameraIntrinsics,
    pub instances: Vec<InstanceTarget>,
}

/// Fixed inputs shared by every instance of a scene.
#[derive(Debug, Clone, Copy)]
pub struct LossContext<'a> {
    pub space: &'a ShapeSpace,
    pub landmarks: &'a [usize],
    pub wheel_sets: &'a [Vec<usize>; 4],
    /// Seed of the quadruple drawn by the global co-planar term.
    pub seed: u64,
}

/// Unweighted term values; per-instance terms are averaged over instances.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct TermValues {
    pub loc: f64,
    pub glo: f64,
    pub kpts: f64,
    pub mesh: f64,
    pub trans: f64,
    pub rot: f64,
    pub cls: f64,
}

impl TermValues {
    pub fn as_array(&self) -> [f64; 7] {
        [self.loc, self.glo, self.kpts, self.mesh, self.trans, self.rot, self.cls]
    }

    pub fn weighted_sum(&self, w: &LossWeights) -> f64 {
        self.as_array()
            .iter()
            .zip(w.as_array())
            .map(|(v, w)| v * w)
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossReport {
    pub total: f64,
    pub terms: TermValues,
    pub weights: LossWeights,
    /// Euclidean norm of each instance's gradient.
    pub gradient_norms: Vec<f64>,
    #[serde(skip)]
    pub gradients: Vec<InstanceGradient>,
}

/// Per-instance intermediate state.
struct Posed {
    frame: PoseFrame,
    verts: Vec<Vector3<f64>>,
    centroid: Vector3<f64>,
    d_verts: Vec<Vector3<f64>>,
}

/// Weighted sum of all seven terms with gradients for every instance.
///
/// Keypoint, mesh, wheel co-planarity, translation, rotation and
/// classification terms are averaged over instances; the global co-planar
/// term is added once for the scene.
pub fn loss_total(
    preds: &[InstancePrediction],
    targets: &SceneTargets,
    weights: &LossWeights,
    ctx: &LossContext<'_>,
) -> Result<LossReport> {
    weights.validate()?;
    let space = ctx.space;
    if preds.len() != targets.instances.len() {
        return Err(Error::DimensionMismatch {
            expected: targets.instances.len(),
            got: preds.len(),
        });
    }
    check_wheel_sets(space, ctx.wheel_sets)?;
    for (p, t) in preds.iter().zip(&targets.instances) {
        check_prediction(space, p)?;
        check_landmarks(space, ctx.landmarks, &t.keypoints)?;
        if t.vertices.len() != space.vertex_count {
            return Err(Error::TopologyMismatch(format!(
                "target has {} vertices, shape space {}",
                t.vertices.len(),
                space.vertex_count
            )));
        }
    }

    let n = preds.len();
    let mut terms = TermValues::default();
    let mut grads: Vec<InstanceGradient> = preds
        .iter()
        .map(|p| InstanceGradient::zeros(space, p.subtype_logits.len()))
        .collect();
    let mut posed = Vec::with_capacity(n);
    let inv_n = if n > 0 { 1.0 / n as f64 } else { 0.0 };

    for ((pred, target), grad) in preds.iter().zip(&targets.instances).zip(grads.iter_mut()) {
        let frame = PoseFrame::new(&pred.pose);
        let verts = space.blend_vertices(&pred.shape_code)?;
        let mut d_verts = vec![Vector3::zeros(); verts.len()];

        let points: Vec<Vector3<f64>> = ctx.landmarks.iter().map(|&v| verts[v]).collect();
        let k = kpts_term(&pred.pose, &points, &target.keypoints, &targets.camera);
        let wk = weights.kpts * inv_n;
        terms.kpts += k.value * inv_n;
        grad.translation += k.d_trans * wk;
        grad.rotation += k.d_rot * wk;
        for (&v, g) in ctx.landmarks.iter().zip(&k.d_points) {
            d_verts[v] += g * wk;
        }

        let (mesh_value, mesh_grad) = mesh_term(&verts, &target.vertices);
        let wm = weights.mesh * inv_n;
        terms.mesh += mesh_value * inv_n;
        for (d, g) in d_verts.iter_mut().zip(&mesh_grad) {
            *d += g * wm;
        }

        let wl = weights.loc * inv_n;
        let (mut dt, mut dr) = (Vector3::zeros(), Vector3::zeros());
        let (loc_value, wheel_grads) =
            wheel_term(&frame, ctx.wheel_sets, |v| verts[v], &mut dt, &mut dr)?;
        terms.loc += loc_value * inv_n;
        grad.translation += dt * wl;
        grad.rotation += dr * wl;
        for (set, g) in ctx.wheel_sets.iter().zip(&wheel_grads) {
            let per = g * (wl / set.len() as f64);
            for &v in set {
                d_verts[v] += per;
            }
        }

        let (tv, tg) = loss_trans(&pred.pose.translation, &target.pose.translation);
        terms.trans += tv * inv_n;
        grad.translation += tg * (weights.trans * inv_n);

        let (rv, rg) = loss_rot(&pred.pose.rotation, &target.pose.rotation);
        terms.rot += rv * inv_n;
        grad.rotation += rg * (weights.rot * inv_n);

        let (cv, cg) = loss_cls(&pred.subtype_logits, target.sub_type)?;
        terms.cls += cv * inv_n;
        for (a, b) in grad.logits.iter_mut().zip(&cg) {
            *a += b * weights.cls * inv_n;
        }

        let centroid = crate::mesh::centroid(&verts);
        posed.push(Posed {
            frame,
            verts,
            centroid,
            d_verts,
        });
    }

    if let Some((quad, value, center_grads)) =
        coplanar_quadruple(n, ctx.seed, |i| Ok(posed[i].frame.apply(&posed[i].centroid)))?
    {
        terms.glo = value;
        for (&i, g) in quad.iter().zip(&center_grads) {
            let g = g * weights.glo;
            let p = &mut posed[i];
            let gi = &mut grads[i];
            let dm = p.frame.backprop(&p.centroid, &g, &mut gi.translation, &mut gi.rotation);
            let per = dm / p.verts.len() as f64;
            for d in &mut p.d_verts {
                *d += per;
            }
        }
    }

    for ((pred, p), grad) in preds.iter().zip(&posed).zip(grads.iter_mut()) {
        let code_grad = space.pullback(&pred.shape_code, &p.d_verts)?;
        grad.add_code(&code_grad, 1.0);
    }

    Ok(LossReport {
        total: terms.weighted_sum(weights),
        terms,
        weights: *weights,
        gradient_norms: grads.iter().map(InstanceGradient::norm).collect(),
        gradients: grads,
    })
}
