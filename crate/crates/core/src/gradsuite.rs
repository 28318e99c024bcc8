//! Seeded finite-difference verification of every analytic gradient in the
//! library: the loss terms, the weighted total, and the fitter Jacobian.
//!
//! Each check draws a random configuration away from the non-smooth points
//! of the function under test, so every check is actually judged.

use std::f64::consts::PI;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::cars::synthetic_car_database;
use crate::error::Result;
use crate::fitter::FitProblem;
use crate::geometry::{project_point, CameraIntrinsics, Keypoint2D, Pose6DoF};
use crate::losses::gradcheck::{check_gradients, check_jacobian, GradCheck, DEFAULT_EPS, DEFAULT_TOLERANCE};
use crate::losses::{
    loss_cls, loss_coplanar_global, loss_coplanar_local, loss_kpts, loss_mesh, loss_rot, loss_rot_kink_distance,
    loss_total, loss_trans, InstancePrediction, InstanceTarget, LossContext, LossWeights, SceneTargets,
};
use crate::mesh::{sphere_directions, sphere_faces, CanonicalMesh, SUB_TYPE_COUNT};
use crate::shape_space::{
    build_shape_space, default_landmarks, default_wheel_sets, ShapeCode, ShapeSpace, ShapeSpaceConfig,
};

/// Configurations closer than this to a kink are redrawn.
const MIN_KINK_DISTANCE: f64 = 1e-3;

#[derive(Debug, Clone, Serialize)]
pub struct SuiteConfig {
    pub seed: u64,
    /// Random configurations per checked function.
    pub configs: usize,
    pub eps: f64,
    /// PCA components per cluster of the test shape space.
    pub max_components: usize,
    /// Weights of the checked total loss.
    pub weights: LossWeights,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            configs: 100,
            eps: DEFAULT_EPS,
            max_components: 3,
            weights: LossWeights::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteEntry {
    pub name: String,
    pub checks: usize,
    pub failures: usize,
    pub worst_rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteReport {
    pub tolerance: f64,
    pub entries: Vec<SuiteEntry>,
    pub passed: bool,
}

struct Tally(SuiteEntry);

impl Tally {
    fn new(name: &str) -> Self {
        Tally(SuiteEntry {
            name: name.to_string(),
            checks: 0,
            failures: 0,
            worst_rel_error: 0.0,
        })
    }

    fn add(&mut self, c: GradCheck) {
        self.0.checks += 1;
        if !(c.passed && c.smooth) {
            self.0.failures += 1;
        }
        if c.max_rel_error > self.0.worst_rel_error || c.max_rel_error.is_nan() {
            self.0.worst_rel_error = c.max_rel_error;
        }
    }
}

struct Fixture {
    space: ShapeSpace,
    landmarks: Vec<usize>,
    wheel_sets: [Vec<usize>; 4],
    cam: CameraIntrinsics,
}

impl Fixture {
    fn new(cfg: &SuiteConfig) -> Result<Self> {
        let db = synthetic_car_database([5, 6, 4, 7], 0.05, cfg.seed);
        let space_cfg = ShapeSpaceConfig {
            max_components: cfg.max_components,
            seed: cfg.seed,
            ..Default::default()
        };
        let space = build_shape_space(&db, &space_cfg)?.0;
        let landmarks = default_landmarks(space.vertex_count);
        // Synthetic cars are mirror-symmetric, which makes the wheel
        // centroids exactly co-planar; drop one vertex to move off the kink.
        let mut wheel_sets = default_wheel_sets(&space.cluster_mean_mesh(0)?)?;
        wheel_sets[3].remove(0);
        Ok(Self {
            space,
            landmarks,
            wheel_sets,
            cam: CameraIntrinsics::new(1000.0, 1000.0, 640.0, 360.0)?,
        })
    }

    fn prediction(&self, rng: &mut ChaCha8Rng) -> InstancePrediction {
        let mut code = ShapeCode::zeros(&self.space);
        for (ci, c) in self.space.clusters.iter().enumerate() {
            code.cluster_probs[ci] = rng.gen_range(0.05..1.0);
            code.coefficients[ci] = c.eigenvalues.iter().map(|l| rng.gen_range(-1.5..1.5) * l.sqrt()).collect();
        }
        InstancePrediction {
            pose: Pose6DoF::new(
                Vector3::new(rng.gen_range(-4.0..4.0), rng.gen_range(0.5..2.0), rng.gen_range(10.0..30.0)),
                Vector3::new(rng.gen_range(-0.3..0.3), rng.gen_range(-PI..PI), rng.gen_range(-0.3..0.3)),
            ),
            shape_code: code,
            subtype_logits: (0..SUB_TYPE_COUNT).map(|_| rng.gen_range(-3.0..3.0)).collect(),
        }
    }

    /// Exact keypoints of `truth` with about a third hidden.
    fn observe(&self, truth: &InstancePrediction, rng: &mut ChaCha8Rng) -> Result<Vec<Keypoint2D>> {
        self.landmarks
            .iter()
            .map(|&v| {
                let p = project_point(&self.space.blend_vertex(&truth.shape_code, v), &truth.pose, &self.cam)?;
                Ok(Keypoint2D::new(p.pixel.x, p.pixel.y, rng.gen_bool(0.7)))
            })
            .collect()
    }

    /// A prediction and a nearby, different ground truth.
    fn perturbed_pair(&self, rng: &mut ChaCha8Rng) -> Result<(InstancePrediction, InstanceTarget)> {
        let truth = self.prediction(rng);
        let mut pred = truth.clone();
        for k in 0..3 {
            pred.pose.translation[k] += rng.gen_range(-0.5..0.5);
            pred.pose.rotation[k] += rng.gen_range(-0.2..0.2);
        }
        for c in &mut pred.shape_code.coefficients {
            for x in c.iter_mut() {
                *x *= rng.gen_range(0.5..1.5);
            }
        }
        let target = InstanceTarget {
            pose: truth.pose,
            vertices: self.space.blend_vertices(&truth.shape_code)?,
            keypoints: self.observe(&truth, rng)?,
            sub_type: rng.gen_range(0..SUB_TYPE_COUNT),
        };
        Ok((pred, target))
    }
}

fn trans_kink(pred: &Vector3<f64>, gt: &Vector3<f64>) -> f64 {
    (pred - gt).abs().min()
}

fn small_mesh(rng: &mut ChaCha8Rng) -> CanonicalMesh {
    let v = sphere_directions(4, 6)
        .into_iter()
        .map(|d| d + Vector3::new(rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3)))
        .collect();
    CanonicalMesh::new(v, sphere_faces(4, 6), "probe", 0).expect("sphere topology is valid")
}

/// Runs every check and reports per-function failure counts.
pub fn run_gradient_suite(cfg: &SuiteConfig) -> Result<SuiteReport> {
    let fx = Fixture::new(cfg)?;
    let space = &fx.space;
    let eps = cfg.eps;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut entries = Vec::new();

    let mut t = Tally::new("loss_kpts");
    for _ in 0..cfg.configs {
        let (pred, target) = fx.perturbed_pair(&mut rng)?;
        let obs = &target.keypoints;
        let (_, g) = loss_kpts(&pred, space, &fx.landmarks, obs, &fx.cam)?;
        let f = |x: &[f64]| {
            loss_kpts(&pred.with_params(x), space, &fx.landmarks, obs, &fx.cam).map_or(f64::NAN, |r| r.0)
        };
        t.add(check_gradients(f, &pred.to_params(), &g.to_vec(), eps, f64::INFINITY));
    }
    entries.push(t.0);

    let mut t = Tally::new("loss_mesh");
    for _ in 0..cfg.configs {
        let (pred, gt) = (small_mesh(&mut rng), small_mesh(&mut rng));
        let (_, g) = loss_mesh(&pred, &gt)?;
        let x: Vec<f64> = pred.flatten().iter().copied().collect();
        let f = |x: &[f64]| {
            let verts = x.chunks(3).map(|c| Vector3::new(c[0], c[1], c[2])).collect();
            loss_mesh(&pred.with_vertices(verts), &gt).map_or(f64::NAN, |r| r.0)
        };
        let analytic: Vec<f64> = g.iter().flat_map(|v| v.iter().copied()).collect();
        t.add(check_gradients(f, &x, &analytic, eps, f64::INFINITY));
    }
    entries.push(t.0);

    let mut t = Tally::new("loss_trans");
    for _ in 0..cfg.configs {
        let (pred, gt) = loop {
            let p = Vector3::from_fn(|_, _| rng.gen_range(-20.0..20.0));
            let g = Vector3::from_fn(|_, _| rng.gen_range(-20.0..20.0));
            if trans_kink(&p, &g) > MIN_KINK_DISTANCE {
                break (p, g);
            }
        };
        let (_, g) = loss_trans(&pred, &gt);
        let f = |x: &[f64]| loss_trans(&Vector3::from_column_slice(x), &gt).0;
        t.add(check_gradients(f, pred.as_slice(), g.as_slice(), eps, trans_kink(&pred, &gt)));
    }
    entries.push(t.0);

    let mut t = Tally::new("loss_rot");
    for _ in 0..cfg.configs {
        let (pred, gt) = loop {
            let p = Vector3::from_fn(|_, _| rng.gen_range(-PI..PI));
            let g = Vector3::from_fn(|_, _| rng.gen_range(-PI..PI));
            if loss_rot_kink_distance(&p, &g) > MIN_KINK_DISTANCE {
                break (p, g);
            }
        };
        let (_, g) = loss_rot(&pred, &gt);
        let f = |x: &[f64]| loss_rot(&Vector3::from_column_slice(x), &gt).0;
        t.add(check_gradients(f, pred.as_slice(), g.as_slice(), eps, loss_rot_kink_distance(&pred, &gt)));
    }
    entries.push(t.0);

    let mut t = Tally::new("loss_coplanar_global");
    for i in 0..cfg.configs {
        let n = rng.gen_range(4..=6);
        let preds: Vec<_> = (0..n).map(|_| fx.prediction(&mut rng)).collect();
        let seed = cfg.seed.wrapping_add(i as u64);
        let (value, grads) = loss_coplanar_global(&preds, space, seed)?;
        for (k, g) in grads.iter().enumerate() {
            let f = |x: &[f64]| {
                let mut ps = preds.clone();
                ps[k] = preds[k].with_params(x);
                loss_coplanar_global(&ps, space, seed).map_or(f64::NAN, |r| r.0)
            };
            t.add(check_gradients(f, &preds[k].to_params(), &g.to_vec(), eps, value));
        }
    }
    entries.push(t.0);

    let mut t = Tally::new("loss_coplanar_local");
    for _ in 0..cfg.configs {
        let pred = fx.prediction(&mut rng);
        let (value, g) = loss_coplanar_local(&pred, space, &fx.wheel_sets)?;
        let f = |x: &[f64]| loss_coplanar_local(&pred.with_params(x), space, &fx.wheel_sets).map_or(f64::NAN, |r| r.0);
        t.add(check_gradients(f, &pred.to_params(), &g.to_vec(), eps, value));
    }
    entries.push(t.0);

    let mut t = Tally::new("loss_cls");
    for _ in 0..cfg.configs {
        let logits: Vec<f64> = (0..SUB_TYPE_COUNT).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let label = rng.gen_range(0..SUB_TYPE_COUNT);
        let (_, g) = loss_cls(&logits, label)?;
        let f = |x: &[f64]| loss_cls(x, label).map_or(f64::NAN, |r| r.0);
        t.add(check_gradients(f, &logits, &g, eps, f64::INFINITY));
    }
    entries.push(t.0);

    let mut t = Tally::new("loss_total");
    let weights = cfg.weights;
    weights.validate()?;
    for i in 0..cfg.configs {
        let n = 4;
        let mut preds = Vec::with_capacity(n);
        let mut instances = Vec::with_capacity(n);
        while preds.len() < n {
            let (p, target) = fx.perturbed_pair(&mut rng)?;
            let kink = trans_kink(&p.pose.translation, &target.pose.translation)
                .min(loss_rot_kink_distance(&p.pose.rotation, &target.pose.rotation))
                .min(loss_coplanar_local(&p, space, &fx.wheel_sets)?.0);
            if kink > MIN_KINK_DISTANCE {
                preds.push(p);
                instances.push(target);
            }
        }
        let targets = SceneTargets {
            camera: fx.cam,
            instances,
        };
        let ctx = LossContext {
            space,
            landmarks: &fx.landmarks,
            wheel_sets: &fx.wheel_sets,
            seed: cfg.seed.wrapping_add(i as u64),
        };
        let glo = loss_coplanar_global(&preds, space, ctx.seed)?.0;
        let report = loss_total(&preds, &targets, &weights, &ctx)?;
        // One instance per configuration keeps the suite fast; the instance
        // rotates so every slot is exercised.
        let k = i % n;
        let f = |x: &[f64]| {
            let mut ps = preds.clone();
            ps[k] = preds[k].with_params(x);
            loss_total(&ps, &targets, &weights, &ctx).map_or(f64::NAN, |r| r.total)
        };
        t.add(check_gradients(f, &preds[k].to_params(), &report.gradients[k].to_vec(), eps, glo));
    }
    entries.push(t.0);

    let mut t = Tally::new("fitter_jacobian");
    for _ in 0..cfg.configs {
        let truth = fx.prediction(&mut rng);
        let obs = fx.observe(&truth, &mut rng)?;
        let cluster = &space.clusters[rng.gen_range(0..space.cluster_count())];
        let problem = FitProblem {
            cluster,
            landmarks: &fx.landmarks,
            obs: &obs,
            cam: &fx.cam,
            lambda_reg: rng.gen_range(1e-3..1e-1),
        };
        let mut x = vec![0.0; problem.param_count()];
        for k in 0..3 {
            x[k] = truth.pose.translation[k] + rng.gen_range(-0.3..0.3);
            x[3 + k] = truth.pose.rotation[k] + rng.gen_range(-0.1..0.1);
        }
        for (k, l) in cluster.eigenvalues.iter().enumerate() {
            x[6 + k] = rng.gen_range(-1.5..1.5) * l.sqrt();
        }
        let (_, jac) = problem.residuals_and_jacobian(&x)?;
        let f = |x: &[f64]| {
            problem
                .residuals(x)
                .map_or_else(|_| vec![f64::NAN; problem.residual_count()], |r| r.as_slice().to_vec())
        };
        t.add(check_jacobian(f, &x, &jac, eps));
    }
    entries.push(t.0);

    let passed = entries.iter().all(|e| e.failures == 0 && e.checks > 0);
    Ok(SuiteReport {
        tolerance: DEFAULT_TOLERANCE,
        entries,
        passed,
    })
}
