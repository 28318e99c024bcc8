//! Fixtures and brute-force reference implementations shared by the
//! integration tests.
#![allow(dead_code)]

use std::sync::Arc;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use carshape::eval::{A3DPCriteria, EvalInstance, EvalScene, TranslationMode};
use carshape::geometry::{rotation_geodesic_distance, Pose6DoF};
use carshape::mesh::{sphere_directions, sphere_faces, CanonicalMesh};
use carshape::raster::{multiview_iou, RenderConfig};

pub const BALL_RADII: [f64; 3] = [1.0, 0.85, 0.6];

pub fn small_render() -> RenderConfig {
    RenderConfig { views: 4, size: (48, 36) }
}

/// Squashed balls of a few sizes; cheap to rasterize.
pub fn ball_meshes() -> Vec<Arc<CanonicalMesh>> {
    let faces = sphere_faces(6, 10);
    BALL_RADII
        .iter()
        .enumerate()
        .map(|(i, &r)| {
            let verts = sphere_directions(6, 10)
                .into_iter()
                .map(|d| Vector3::new(2.0 * d.x, 0.7 * d.y, 1.0 * d.z) * r)
                .collect();
            Arc::new(CanonicalMesh::new(verts, faces.clone(), format!("ball{i}"), i).unwrap())
        })
        .collect()
}

/// Random scene with near-miss predictions, false positives, and scores
/// drawn from a coarse grid so that ties occur.
pub fn random_scene(rng: &mut ChaCha8Rng, meshes: &[Arc<CanonicalMesh>], max_instances: usize) -> EvalScene {
    let n_gt = rng.gen_range(0..=max_instances);
    let gts: Vec<EvalInstance> = (0..n_gt)
        .map(|_| EvalInstance {
            pose: Pose6DoF::new(
                Vector3::new(rng.gen_range(-8.0..8.0), rng.gen_range(0.5..2.0), rng.gen_range(6.0..40.0)),
                Vector3::new(0.0, rng.gen_range(-3.0..3.0), 0.0),
            ),
            mesh: meshes[rng.gen_range(0..meshes.len())].clone(),
            score: 1.0,
        })
        .collect();
    let mut preds = Vec::new();
    for g in &gts {
        if rng.gen_bool(0.2) {
            continue;
        }
        let jitter = |rng: &mut ChaCha8Rng, s: f64| Vector3::new(rng.gen_range(-s..s), rng.gen_range(-s..s), rng.gen_range(-s..s));
        let ts = rng.gen_range(0.0..2.5);
        let rs = rng.gen_range(0.0..0.5);
        preds.push(EvalInstance {
            pose: Pose6DoF::new(g.pose.translation + jitter(rng, ts), g.pose.rotation + jitter(rng, rs)),
            mesh: meshes[rng.gen_range(0..meshes.len())].clone(),
            score: rng.gen_range(1..=5) as f64 / 5.0,
        });
    }
    for _ in 0..rng.gen_range(0..=2usize) {
        preds.push(EvalInstance {
            pose: Pose6DoF::new(
                Vector3::new(rng.gen_range(-8.0..8.0), 1.0, rng.gen_range(6.0..40.0)),
                Vector3::new(0.0, rng.gen_range(-3.0..3.0), 0.0),
            ),
            mesh: meshes[rng.gen_range(0..meshes.len())].clone(),
            score: rng.gen_range(1..=5) as f64 / 5.0,
        });
    }
    if preds.len() > max_instances {
        preds.truncate(max_instances);
    }
    EvalScene { preds, gts }
}

pub fn random_scenes(seed: u64, n: usize, max_instances: usize) -> Vec<EvalScene> {
    let meshes = ball_meshes();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| random_scene(&mut rng, &meshes, max_instances)).collect()
}

/// AP as the area under the interpolated precision envelope, evaluated
/// at every score cutoff.
pub fn brute_force_ap(dets: &[(f64, bool)], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return if dets.is_empty() { 1.0 } else { 0.0 };
    }
    let mut cutoffs: Vec<f64> = dets.iter().map(|d| d.0).collect();
    cutoffs.sort_by(|a, b| b.total_cmp(a));
    cutoffs.dedup();
    let curve: Vec<(f64, f64)> = cutoffs
        .iter()
        .map(|&c| {
            let kept: Vec<bool> = dets.iter().filter(|d| d.0 >= c).map(|d| d.1).collect();
            let tp = kept.iter().filter(|&&h| h).count() as f64;
            (tp / n_gt as f64, tp / kept.len() as f64)
        })
        .collect();
    let mut recalls: Vec<f64> = curve.iter().map(|p| p.0).collect();
    recalls.sort_by(f64::total_cmp);
    recalls.dedup();
    let mut area = 0.0;
    let mut prev = 0.0;
    for r in recalls {
        let p = curve.iter().filter(|q| q.0 >= r).map(|q| q.1).fold(0.0, f64::max);
        area += (r - prev) * p;
        prev = r;
    }
    area
}

/// Per-threshold AP from a direct transcription of the matching rules.
pub fn brute_force_eval(scenes: &[EvalScene], criteria: &A3DPCriteria, render: &RenderConfig) -> Vec<f64> {
    let n_gt: usize = scenes.iter().map(|s| s.gts.len()).sum();
    let id = Pose6DoF::identity();
    let ious: Vec<Vec<Vec<f64>>> = scenes
        .iter()
        .map(|s| {
            s.preds
                .iter()
                .map(|p| {
                    s.gts
                        .iter()
                        .map(|g| {
                            if p.mesh.vertices == g.mesh.vertices {
                                1.0
                            } else {
                                multiview_iou((&p.mesh, &id), (&g.mesh, &id), render.views, render.size).unwrap()
                            }
                        })
                        .collect()
                })
                .collect()
        })
        .collect();
    criteria
        .thresholds
        .iter()
        .map(|t| {
            let mut dets = Vec::new();
            for (s, scene) in scenes.iter().enumerate() {
                let mut order: Vec<usize> = (0..scene.preds.len()).collect();
                order.sort_by(|&a, &b| scene.preds[b].score.partial_cmp(&scene.preds[a].score).unwrap().then(a.cmp(&b)));
                let mut used = vec![false; scene.gts.len()];
                for p in order {
                    let pred = &scene.preds[p];
                    let candidates = (0..scene.gts.len()).filter(|&g| {
                        let gt = &scene.gts[g];
                        let d = (pred.pose.translation - gt.pose.translation).norm();
                        let te = match criteria.mode {
                            TranslationMode::Absolute => d,
                            TranslationMode::Relative => d / gt.pose.translation.norm(),
                        };
                        !used[g]
                            && te <= t.trans
                            && rotation_geodesic_distance(&pred.pose.rotation, &gt.pose.rotation) <= t.rot
                            && ious[s][p][g] >= t.shape_iou
                    });
                    let best = candidates.min_by(|&a, &b| {
                        let da = (pred.pose.translation - scene.gts[a].pose.translation).norm();
                        let db = (pred.pose.translation - scene.gts[b].pose.translation).norm();
                        da.partial_cmp(&db).unwrap().then(a.cmp(&b))
                    });
                    if let Some(g) = best {
                        used[g] = true;
                    }
                    dets.push((pred.score, best.is_some()));
                }
            }
            brute_force_ap(&dets, n_gt)
        })
        .collect()
}
