use std::sync::OnceLock;

use super::*;
use crate::cars::synthetic_car_database;
use crate::geometry::{project_point, rotation_geodesic_distance};
use crate::losses::gradcheck::{check_jacobian, DEFAULT_EPS};
use crate::scenegen::{generate_scene, SceneConfig};
use crate::shape_space::{build_shape_space, default_landmarks, ShapeSpaceConfig};

fn space() -> &'static ShapeSpace {
    static SPACE: OnceLock<ShapeSpace> = OnceLock::new();
    SPACE.get_or_init(|| {
        let db = synthetic_car_database([5, 6, 4, 7], 0.05, 3);
        build_shape_space(&db, &ShapeSpaceConfig::default()).unwrap().0
    })
}

fn landmarks() -> Vec<usize> {
    default_landmarks(space().vertex_count)
}

#[test]
fn noiseless_recovery() {
    let space = space();
    let lm = landmarks();
    let cfg = SceneConfig::default();
    let scene = generate_scene(space, &lm, 6, &cfg, 11).unwrap();
    for inst in &scene.annotation.instances {
        let fit = fit_instance(&inst.keypoints, &cfg.camera, space, &lm, &FitConfig::default()).unwrap();
        let terr = (fit.pose.translation - inst.pose.translation).norm();
        let rerr = rotation_geodesic_distance(&fit.pose.rotation, &inst.pose.rotation);
        assert!(terr < 1e-3, "{}: translation error {terr}", inst.car_id);
        assert!(rerr < 1e-3, "{}: rotation error {rerr}", inst.car_id);
        assert_eq!(fit.cluster_chosen, inst.shape_code.as_ref().unwrap().dominant_cluster());
        assert!(fit.pose.rotation.iter().all(|a| a.abs() <= PI));
    }
}

#[test]
fn cluster_mean_selects_its_cluster() {
    let space = space();
    let lm = landmarks();
    let cam = SceneConfig::default().camera;
    let pose = Pose6DoF::new(Vector3::new(1.0, 1.2, 18.0), Vector3::new(0.0, 0.7, 0.0));
    let mean = space.cluster_mean_mesh(2).unwrap();
    let obs: Vec<Keypoint2D> = lm
        .iter()
        .map(|&v| {
            let p = project_point(&mean.vertices[v], &pose, &cam).unwrap();
            Keypoint2D::new(p.pixel.x, p.pixel.y, true)
        })
        .collect();
    let fit = fit_instance(&obs, &cam, space, &lm, &FitConfig::default()).unwrap();
    assert_eq!(fit.cluster_chosen, 2);
    assert!(fit.final_cost < 1e-8, "{}", fit.final_cost);
    assert!(fit.converged);
}

#[test]
fn too_few_keypoints() {
    let space = space();
    let lm = landmarks();
    let cam = SceneConfig::default().camera;
    let mut obs = vec![Keypoint2D::invisible(); lm.len()];
    for k in obs.iter_mut().take(5) {
        *k = Keypoint2D::new(100.0, 100.0, true);
    }
    assert!(matches!(
        fit_instance(&obs, &cam, space, &lm, &FitConfig::default()),
        Err(Error::TooFewKeypoints { visible: 5, required: 6 })
    ));
}

#[test]
fn config_validation() {
    assert!(FitConfig::default().validate().is_ok());
    let bad = FitConfig {
        damping_factor: 1.0,
        ..Default::default()
    };
    assert!(bad.validate().is_err());
    let bad = FitConfig {
        multistart_yaw: vec![],
        ..Default::default()
    };
    assert!(bad.validate().is_err());
    assert!(serde_json::from_str::<FitConfig>(r#"{"max_iter": 3}"#).is_err());
}

#[test]
fn jacobian_matches_finite_differences() {
    let space = space();
    let lm = landmarks();
    let cfg = SceneConfig::default();
    let scene = generate_scene(space, &lm, 3, &cfg, 4).unwrap();
    for inst in &scene.annotation.instances {
        let code = inst.shape_code.as_ref().unwrap();
        let ci = code.dominant_cluster();
        let problem = FitProblem {
            cluster: &space.clusters[ci],
            landmarks: &lm,
            obs: &inst.keypoints,
            cam: &cfg.camera,
            lambda_reg: 1e-2,
        };
        let mut x = vec![0.0; problem.param_count()];
        x[..3].copy_from_slice(inst.pose.translation.as_slice());
        x[3..6].copy_from_slice(inst.pose.rotation.as_slice());
        for (k, c) in code.coefficients[ci].iter().enumerate() {
            x[6 + k] = 0.5 * c + 0.01;
        }
        let (_, jac) = problem.residuals_and_jacobian(&x).unwrap();
        let r = check_jacobian(|x| problem.residuals(x).unwrap().as_slice().to_vec(), &x, &jac, DEFAULT_EPS);
        assert!(r.passed, "{r:?}");
    }
}

#[test]
fn deterministic() {
    let space = space();
    let lm = landmarks();
    let cfg = SceneConfig {
        pixel_noise: 2.0,
        ..Default::default()
    };
    let scene = generate_scene(space, &lm, 1, &cfg, 8).unwrap();
    let obs = &scene.annotation.instances[0].keypoints;
    let a = fit_instance(obs, &cfg.camera, space, &lm, &FitConfig::default()).unwrap();
    let b = fit_instance(obs, &cfg.camera, space, &lm, &FitConfig::default()).unwrap();
    assert_eq!(a, b);
}

#[test]
fn accepted_steps_never_increase_cost() {
    let space = space();
    let lm = landmarks();
    let cfg = SceneConfig {
        pixel_noise: 3.0,
        ..Default::default()
    };
    let scene = generate_scene(space, &lm, 2, &cfg, 13).unwrap();
    for inst in &scene.annotation.instances {
        let problem = FitProblem {
            cluster: &space.clusters[0],
            landmarks: &lm,
            obs: &inst.keypoints,
            cam: &cfg.camera,
            lambda_reg: 1e-2,
        };
        let x0 = initial_params(&problem, 0.3);
        let run = run_lm(&problem, x0, &FitConfig::default(), true).unwrap();
        assert!(run.history.windows(2).all(|w| w[1] <= w[0]), "{:?}", run.history);
    }
}

#[test]
fn fit_scene_outputs_valid_predictions() {
    let space = space();
    let lm = landmarks();
    let cfg = SceneConfig::default();
    let mut gt = generate_scene(space, &lm, 3, &cfg, 21).unwrap().annotation;
    for k in gt.instances[1].keypoints.iter_mut().skip(3) {
        k.visible = false;
    }
    let (pred, summary) = fit_scene(&gt, space, &lm, &FitConfig::default()).unwrap();
    assert_eq!(summary.fitted, 2);
    assert_eq!(summary.skipped, vec![gt.instances[1].car_id.clone()]);
    pred.validate().unwrap();
    for p in &pred.instances {
        let s = p.score.unwrap();
        assert!(s > 0.99 && s <= 1.0, "{s}");
    }
}
