mod common;

use nalgebra::Vector3;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use carshape::eval::{evaluate, A3DPCriteria, EvalInstance, EvalScene, TranslationMode};
use carshape::geometry::Pose6DoF;

use common::{ball_meshes, brute_force_eval, random_scenes, small_render};

#[test]
fn pooled_evaluation_matches_brute_force() {
    let render = small_render();
    for (seed, mode) in [(1, TranslationMode::Absolute), (2, TranslationMode::Relative)] {
        let scenes = random_scenes(seed, 12, 6);
        let criteria = A3DPCriteria::for_mode(mode);
        let report = evaluate(&scenes, &criteria, &render).unwrap();
        let oracle = brute_force_eval(&scenes, &criteria, &render);
        for (got, want) in report.ap_per_threshold.iter().zip(&oracle) {
            assert!((got - want).abs() < 1e-12, "{mode:?}: {got} vs {want}");
        }
        assert!(report.ap_per_threshold.iter().all(|ap| (0.0..=1.0).contains(ap)));
        let lo = oracle.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = oracle.iter().cloned().fold(0.0, f64::max);
        assert!(report.mean_ap >= lo - 1e-15 && report.mean_ap <= hi + 1e-15);
    }
}

#[test]
fn loose_ap_is_never_below_strict_ap() {
    let render = small_render();
    let criteria = A3DPCriteria::absolute();
    for scene in random_scenes(7, 100, 6) {
        let report = evaluate(std::slice::from_ref(&scene), &criteria, &render).unwrap();
        assert!(report.c_l >= report.c_s, "{} < {}", report.c_l, report.c_s);
    }
}

/// Cars 10 m apart so no prediction can reach a second ground truth.
fn separated_scene(rng: &mut ChaCha8Rng) -> EvalScene {
    let meshes = ball_meshes();
    let mut scene = EvalScene::default();
    for i in 0..6 {
        let t = Vector3::new(-25.0 + 10.0 * i as f64, 1.5, 20.0);
        let yaw = rng.gen_range(-3.0..3.0);
        scene.gts.push(EvalInstance {
            pose: Pose6DoF::new(t, Vector3::new(0.0, yaw, 0.0)),
            mesh: meshes[i % 3].clone(),
            score: 1.0,
        });
        for _ in 0..rng.gen_range(0..3) {
            let dt = Vector3::new(rng.gen_range(-1.5..1.5), rng.gen_range(-1.5..1.5), rng.gen_range(-1.5..1.5));
            scene.preds.push(EvalInstance {
                pose: Pose6DoF::new(t + dt, Vector3::new(0.0, yaw + rng.gen_range(-0.4..0.4), 0.0)),
                mesh: meshes[rng.gen_range(0..3)].clone(),
                score: 0.5,
            });
        }
    }
    scene
}

#[test]
fn shuffling_tied_predictions_keeps_ap() {
    let render = small_render();
    let criteria = A3DPCriteria::absolute();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..10 {
        let mut scene = separated_scene(&mut rng);
        let before = evaluate(std::slice::from_ref(&scene), &criteria, &render).unwrap();
        scene.preds.shuffle(&mut rng);
        let after = evaluate(std::slice::from_ref(&scene), &criteria, &render).unwrap();
        assert_eq!(before.ap_per_threshold, after.ap_per_threshold);
    }
}

#[test]
fn shuffling_distinct_scores_keeps_ap() {
    let render = small_render();
    let criteria = A3DPCriteria::absolute();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for mut scene in random_scenes(13, 30, 6) {
        for (i, p) in scene.preds.iter_mut().enumerate() {
            p.score = rng.gen_range(0.0..1.0) + i as f64 * 1e-9;
        }
        let before = evaluate(std::slice::from_ref(&scene), &criteria, &render).unwrap();
        scene.preds.shuffle(&mut rng);
        let after = evaluate(std::slice::from_ref(&scene), &criteria, &render).unwrap();
        assert_eq!(before.ap_per_threshold, after.ap_per_threshold);
    }
}

#[test]
fn relative_equals_absolute_at_unit_range() {
    let render = small_render();
    let mut scenes = random_scenes(21, 20, 5);
    for scene in &mut scenes {
        for g in &mut scene.gts {
            g.pose.translation = g.pose.translation.normalize();
        }
        for p in &mut scene.preds {
            p.pose.translation = p.pose.translation.normalize() + (p.pose.translation - p.pose.translation.normalize()) * 0.01;
        }
    }
    // Same numeric thresholds under both modes.
    let abs = A3DPCriteria::schedule(TranslationMode::Absolute, 0.3, 0.01);
    let rel = A3DPCriteria::schedule(TranslationMode::Relative, 0.3, 0.01);
    let a = evaluate(&scenes, &abs, &render).unwrap();
    let r = evaluate(&scenes, &rel, &render).unwrap();
    assert_eq!(a.ap_per_threshold, r.ap_per_threshold);
    assert!(a.mean_ap > 0.0 && a.mean_ap < 1.0, "{}", a.mean_ap);
}
