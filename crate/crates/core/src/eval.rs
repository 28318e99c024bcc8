//! Instance-level 3D average precision over translation, rotation and shape
//! thresholds, and viewpoint accuracy metrics.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{rotation_geodesic_distance, Pose6DoF};
use crate::mesh::CanonicalMesh;
use crate::raster::{multiview_iou, RenderConfig};
use crate::scenegen::SceneAnnotation;
use crate::shape_space::ShapeSpace;

pub const THRESHOLD_COUNT: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TranslationMode {
    /// Translation error in meters.
    Absolute,
    /// Translation error divided by the ground-truth range `‖T_gt‖`.
    Relative,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Threshold {
    pub trans: f64,
    /// Radians.
    pub rot: f64,
    pub shape_iou: f64,
}

/// Ten threshold triples ordered from loose to strict.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct A3DPCriteria {
    pub mode: TranslationMode,
    pub thresholds: Vec<Threshold>,
}

fn linspace(a: f64, b: f64, i: usize) -> f64 {
    a + (b - a) * i as f64 / (THRESHOLD_COUNT - 1) as f64
}

impl A3DPCriteria {
    /// Linear schedule: translation `loose → strict`, rotation π/6 → π/60,
    /// shape IoU 0.5 → 0.95.
    pub fn schedule(mode: TranslationMode, trans_loose: f64, trans_strict: f64) -> Self {
        let thresholds = (0..THRESHOLD_COUNT)
            .map(|i| Threshold {
                trans: linspace(trans_loose, trans_strict, i),
                rot: linspace(PI / 6.0, PI / 60.0, i),
                shape_iou: linspace(0.5, 0.95, i),
            })
            .collect();
        Self { mode, thresholds }
    }

    pub fn absolute() -> Self {
        Self::schedule(TranslationMode::Absolute, 2.8, 0.1)
    }

    pub fn relative() -> Self {
        Self::schedule(TranslationMode::Relative, 0.10, 0.01)
    }

    pub fn for_mode(mode: TranslationMode) -> Self {
        match mode {
            TranslationMode::Absolute => Self::absolute(),
            TranslationMode::Relative => Self::relative(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.thresholds.len() != THRESHOLD_COUNT {
            return Err(Error::DimensionMismatch {
                expected: THRESHOLD_COUNT,
                got: self.thresholds.len(),
            });
        }
        for t in &self.thresholds {
            let ok = t.trans.is_finite()
                && t.trans >= 0.0
                && t.rot.is_finite()
                && t.rot >= 0.0
                && (0.0..=1.0).contains(&t.shape_iou);
            if !ok {
                return Err(Error::InvalidInput(format!("invalid threshold {t:?}")));
            }
        }
        for w in self.thresholds.windows(2) {
            if w[1].trans > w[0].trans || w[1].rot > w[0].rot || w[1].shape_iou < w[0].shape_iou {
                return Err(Error::InvalidInput("thresholds must run from loose to strict".into()));
            }
        }
        Ok(())
    }
}

impl Default for A3DPCriteria {
    fn default() -> Self {
        Self::absolute()
    }
}

/// A posed mesh with a confidence score (ignored for ground truth).
#[derive(Debug, Clone)]
pub struct EvalInstance {
    pub pose: Pose6DoF,
    pub mesh: Arc<CanonicalMesh>,
    pub score: f64,
}

/// Predictions and ground truth of one image.
#[derive(Debug, Clone, Default)]
pub struct EvalScene {
    pub preds: Vec<EvalInstance>,
    pub gts: Vec<EvalInstance>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mean_ap: f64,
    pub ap_per_threshold: Vec<f64>,
    /// AP at the loosest threshold.
    pub c_l: f64,
    /// AP at the strictest threshold.
    pub c_s: f64,
    /// Mean translation error of the loosest-threshold matches, meters.
    pub trans_err_mean: Option<f64>,
    /// Mean rotation error of the loosest-threshold matches, radians.
    pub rot_err_mean: Option<f64>,
    pub num_predictions: usize,
    pub num_ground_truth: usize,
    pub criteria: A3DPCriteria,
    pub render: RenderConfig,
}

impl EvalReport {
    /// One row per threshold: index, the three thresholds, and AP.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("index,trans_thresh,rot_thresh,shape_iou_thresh,ap\n");
        for (i, (t, ap)) in self.criteria.thresholds.iter().zip(&self.ap_per_threshold).enumerate() {
            out.push_str(&format!("{i},{},{},{},{}\n", t.trans, t.rot, t.shape_iou, ap));
        }
        out
    }
}

/// Pairwise distances between one scene's predictions and ground truths,
/// with the shape IoU filled in lazily.
struct PairTable<'a> {
    scene: &'a EvalScene,
    trans_abs: Vec<f64>,
    trans: Vec<f64>,
    rot: Vec<f64>,
    iou: HashMap<(usize, usize), f64>,
    render: RenderConfig,
}

impl<'a> PairTable<'a> {
    fn new(scene: &'a EvalScene, mode: TranslationMode, render: RenderConfig) -> Self {
        let n = scene.preds.len() * scene.gts.len();
        let (mut trans_abs, mut trans, mut rot) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
        for p in &scene.preds {
            for g in &scene.gts {
                let d = (p.pose.translation - g.pose.translation).norm();
                trans_abs.push(d);
                trans.push(match mode {
                    TranslationMode::Absolute => d,
                    TranslationMode::Relative => d / g.pose.translation.norm(),
                });
                rot.push(rotation_geodesic_distance(&p.pose.rotation, &g.pose.rotation));
            }
        }
        Self {
            scene,
            trans_abs,
            trans,
            rot,
            iou: HashMap::new(),
            render,
        }
    }

    fn idx(&self, p: usize, g: usize) -> usize {
        p * self.scene.gts.len() + g
    }

    /// Shape similarity compares the two meshes in their own object frames.
    fn shape_iou(&mut self, p: usize, g: usize) -> Result<f64> {
        if let Some(&v) = self.iou.get(&(p, g)) {
            return Ok(v);
        }
        let (a, b) = (&self.scene.preds[p].mesh, &self.scene.gts[g].mesh);
        let v = if Arc::ptr_eq(a, b) || (a.vertices == b.vertices && a.faces == b.faces) {
            1.0
        } else {
            let id = Pose6DoF::identity();
            multiview_iou((a, &id), (b, &id), self.render.views, self.render.size)?
        };
        self.iou.insert((p, g), v);
        Ok(v)
    }

    fn passes(&mut self, p: usize, g: usize, t: &Threshold) -> Result<bool> {
        let k = self.idx(p, g);
        Ok(self.trans[k] <= t.trans && self.rot[k] <= t.rot && self.shape_iou(p, g)? >= t.shape_iou)
    }
}

/// Prediction order: descending score, ties by index.
fn score_order(preds: &[EvalInstance]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].score.total_cmp(&preds[a].score).then(a.cmp(&b)));
    order
}

/// Greedy matching of one scene under one threshold; returns the matched
/// ground-truth index of every prediction.
fn greedy_match(table: &mut PairTable, t: &Threshold) -> Result<Vec<Option<usize>>> {
    let scene = table.scene;
    let mut taken = vec![false; scene.gts.len()];
    let mut out = vec![None; scene.preds.len()];
    for p in score_order(&scene.preds) {
        let mut best: Option<usize> = None;
        for g in 0..scene.gts.len() {
            if taken[g] || !table.passes(p, g, t)? {
                continue;
            }
            if best.is_none_or(|b| table.trans_abs[table.idx(p, g)] < table.trans_abs[table.idx(p, b)]) {
                best = Some(g);
            }
        }
        if let Some(g) = best {
            taken[g] = true;
            out[p] = Some(g);
        }
    }
    Ok(out)
}

/// All-point interpolated AP of scored detections against `n_gt` objects.
///
/// Detections with equal scores form a single operating point, so the
/// result does not depend on their order.
pub fn average_precision(detections: &[(f64, bool)], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return if detections.is_empty() { 1.0 } else { 0.0 };
    }
    let mut sorted = detections.to_vec();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut points: Vec<(f64, f64)> = Vec::new();
    let (mut tp, mut seen) = (0usize, 0usize);
    for (i, &(score, hit)) in sorted.iter().enumerate() {
        tp += hit as usize;
        seen += 1;
        let group_end = sorted.get(i + 1).is_none_or(|next| next.0 != score);
        if group_end {
            points.push((tp as f64 / n_gt as f64, tp as f64 / seen as f64));
        }
    }
    let mut ap = 0.0;
    let mut best_precision = 0.0f64;
    for k in (0..points.len()).rev() {
        best_precision = best_precision.max(points[k].1);
        let prev_recall = if k == 0 { 0.0 } else { points[k - 1].0 };
        ap += (points[k].0 - prev_recall) * best_precision;
    }
    ap
}

/// Scores a single image.
pub fn match_and_score(
    preds: &[EvalInstance],
    gts: &[EvalInstance],
    criteria: &A3DPCriteria,
    render: &RenderConfig,
) -> Result<EvalReport> {
    let scene = EvalScene {
        preds: preds.to_vec(),
        gts: gts.to_vec(),
    };
    evaluate(std::slice::from_ref(&scene), criteria, render)
}

/// Scores a set of images, pooling detections across them before the
/// precision-recall curve is built.
pub fn evaluate(scenes: &[EvalScene], criteria: &A3DPCriteria, render: &RenderConfig) -> Result<EvalReport> {
    criteria.validate()?;
    render.validate()?;
    for inst in scenes.iter().flat_map(|s| s.preds.iter()) {
        if !inst.score.is_finite() {
            return Err(Error::InvalidInput(format!("non-finite score {}", inst.score)));
        }
    }
    let n_gt: usize = scenes.iter().map(|s| s.gts.len()).sum();
    let n_pred: usize = scenes.iter().map(|s| s.preds.len()).sum();
    let mut tables: Vec<PairTable> = scenes
        .iter()
        .map(|s| PairTable::new(s, criteria.mode, *render))
        .collect();
    let mut aps = Vec::with_capacity(THRESHOLD_COUNT);
    let (mut trans_err, mut rot_err) = (None, None);
    for (ti, t) in criteria.thresholds.iter().enumerate() {
        let mut detections = Vec::with_capacity(n_pred);
        let (mut t_sum, mut r_sum, mut n_match) = (0.0, 0.0, 0usize);
        for table in &mut tables {
            let matches = greedy_match(table, t)?;
            for (p, m) in matches.iter().enumerate() {
                detections.push((table.scene.preds[p].score, m.is_some()));
                if let Some(g) = *m {
                    let k = table.idx(p, g);
                    t_sum += table.trans_abs[k];
                    r_sum += table.rot[k];
                    n_match += 1;
                }
            }
        }
        if ti == 0 && n_match > 0 {
            trans_err = Some(t_sum / n_match as f64);
            rot_err = Some(r_sum / n_match as f64);
        }
        aps.push(average_precision(&detections, n_gt));
    }
    Ok(EvalReport {
        mean_ap: aps.iter().sum::<f64>() / aps.len() as f64,
        c_l: aps[0],
        c_s: aps[THRESHOLD_COUNT - 1],
        ap_per_threshold: aps,
        trans_err_mean: trans_err,
        rot_err_mean: rot_err,
        num_predictions: n_pred,
        num_ground_truth: n_gt,
        criteria: criteria.clone(),
        render: *render,
    })
}

/// Builds evaluation instances from an annotation file.
///
/// Each instance's mesh is the blend of its shape code when one is present,
/// otherwise the database mesh whose `car_id` equals the instance's.
/// Ground-truth annotations have no scores; predictions without a score
/// are rejected.
pub fn instances_from_annotation(
    ann: &SceneAnnotation,
    space: Option<&ShapeSpace>,
    database: &[CanonicalMesh],
    require_scores: bool,
) -> Result<Vec<EvalInstance>> {
    ann.instances
        .iter()
        .map(|inst| {
            let mesh = match (&inst.shape_code, space) {
                (Some(code), Some(space)) => space.blend_shape(code)?,
                (Some(_), None) => {
                    return Err(Error::InvalidInput(format!(
                        "instance {} has a shape code but no shape space was given",
                        inst.car_id
                    )))
                }
                (None, _) => database
                    .iter()
                    .find(|m| m.car_id == inst.car_id)
                    .cloned()
                    .ok_or_else(|| Error::InvalidInput(format!("no mesh for car_id {}", inst.car_id)))?,
            };
            let score = match inst.score {
                Some(s) => s,
                None if require_scores => {
                    return Err(Error::InvalidInput(format!("prediction {} has no score", inst.car_id)))
                }
                None => 1.0,
            };
            Ok(EvalInstance {
                pose: inst.pose,
                mesh: Arc::new(mesh),
                score,
            })
        })
        .collect()
}

/// Fraction of rotations within π/6 of ground truth and the median error in
/// degrees.
pub fn viewpoint_metrics(
    pred_rots: &[nalgebra::Vector3<f64>],
    gt_rots: &[nalgebra::Vector3<f64>],
) -> Result<(f64, f64)> {
    if pred_rots.len() != gt_rots.len() {
        return Err(Error::DimensionMismatch {
            expected: gt_rots.len(),
            got: pred_rots.len(),
        });
    }
    if gt_rots.is_empty() {
        return Err(Error::InvalidInput("viewpoint metrics need at least one rotation".into()));
    }
    let mut errs: Vec<f64> = pred_rots
        .iter()
        .zip(gt_rots)
        .map(|(p, g)| rotation_geodesic_distance(p, g))
        .collect();
    let acc = errs.iter().filter(|&&e| e < PI / 6.0).count() as f64 / errs.len() as f64;
    errs.sort_by(f64::total_cmp);
    let n = errs.len();
    let med = if n % 2 == 1 {
        errs[n / 2]
    } else {
        (errs[n / 2 - 1] + errs[n / 2]) / 2.0
    };
    Ok((acc, med.to_degrees()))
}
