//! Seeded synthetic traffic scenes with exact keypoint ground truth.
//!
//! Cars stand on a common ground plane below the camera, shapes are drawn
//! from the PCA prior of a [`ShapeSpace`], and the 66 keypoints are the
//! projections of the landmark vertices with optional occlusion and noise.

use std::f64::consts::PI;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{project_point, CameraIntrinsics, Keypoint2D, Pose6DoF};
use crate::mesh::{CanonicalMesh, SUB_TYPE_COUNT};
use crate::shape_space::{ShapeCode, ShapeSpace, LANDMARK_COUNT};

pub const SCHEMA_VERSION: u32 = 1;

/// One annotated (or predicted) car.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotatedInstance {
    pub car_id: String,
    pub sub_type: usize,
    pub pose: Pose6DoF,
    pub keypoints: Vec<Keypoint2D>,
    /// Confidence; present on predictions only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shape_code: Option<ShapeCode>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneAnnotation {
    pub schema_version: u32,
    pub camera: CameraIntrinsics,
    /// `(width, height)` in pixels.
    pub image_size: (u32, u32),
    pub instances: Vec<AnnotatedInstance>,
}

impl SceneAnnotation {
    /// Checks the schema version, keypoint counts, and that visible
    /// keypoints lie inside the image.
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::InvalidInput(format!(
                "unsupported schema_version {}",
                self.schema_version
            )));
        }
        self.camera.validate()?;
        let (w, h) = (self.image_size.0 as f64, self.image_size.1 as f64);
        for inst in &self.instances {
            if inst.keypoints.len() != LANDMARK_COUNT {
                return Err(Error::DimensionMismatch {
                    expected: LANDMARK_COUNT,
                    got: inst.keypoints.len(),
                });
            }
            if inst
                .keypoints
                .iter()
                .any(|k| k.visible && !(k.x >= 0.0 && k.x <= w && k.y >= 0.0 && k.y <= h))
            {
                return Err(Error::InvalidInput(format!(
                    "instance {} has a visible keypoint outside the image",
                    inst.car_id
                )));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let scene: Self = serde_json::from_str(text)?;
        scene.validate()?;
        Ok(scene)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub camera: CameraIntrinsics,
    pub image_size: (u32, u32),
    /// Ground plane `y = ground_height`, meters below the camera.
    pub ground_height: f64,
    /// Standard deviation of per-car center height, meters.
    pub height_jitter: f64,
    pub depth_range: (f64, f64),
    /// Largest pitch and roll magnitude, degrees.
    pub max_tilt_deg: f64,
    /// Probability of dropping each in-image keypoint.
    pub occlusion_rate: f64,
    /// Standard deviation of Gaussian keypoint noise, pixels.
    pub pixel_noise: f64,
    /// Placements with fewer in-image keypoints are redrawn.
    pub min_in_view: usize,
    /// Smallest allowed distance between car centers, meters.
    pub min_separation: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            camera: CameraIntrinsics {
                fx: 2304.54786556982,
                fy: 2305.875668062,
                px: 1686.23787612802,
                py: 1354.98486439791,
            },
            image_size: (3384, 2710),
            ground_height: 1.5,
            height_jitter: 0.0,
            depth_range: (5.0, 60.0),
            max_tilt_deg: 2.0,
            occlusion_rate: 0.0,
            pixel_noise: 0.0,
            min_in_view: 12,
            min_separation: 6.0,
        }
    }
}

impl SceneConfig {
    /// Same scene geometry at `1/factor` the image resolution.
    pub fn downscaled(mut self, factor: f64) -> Self {
        let c = &mut self.camera;
        c.fx /= factor;
        c.fy /= factor;
        c.px /= factor;
        c.py /= factor;
        self.image_size = (
            (self.image_size.0 as f64 / factor).round() as u32,
            (self.image_size.1 as f64 / factor).round() as u32,
        );
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.camera.validate()?;
        let (lo, hi) = self.depth_range;
        let ok = self.image_size.0 > 0
            && self.image_size.1 > 0
            && lo > 0.0
            && hi >= lo
            && self.height_jitter >= 0.0
            && self.max_tilt_deg >= 0.0
            && (0.0..=1.0).contains(&self.occlusion_rate)
            && self.pixel_noise >= 0.0
            && self.min_in_view <= LANDMARK_COUNT
            && self.min_separation >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!("invalid scene config: {self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedScene {
    pub annotation: SceneAnnotation,
    /// Canonical-frame ground-truth mesh of each instance.
    pub meshes: Vec<CanonicalMesh>,
}

/// Redraws of a single car's placement before giving up on constraints.
const MAX_PLACEMENT_DRAWS: usize = 200;

/// Generates `n_cars` cars. The result depends only on the inputs and `seed`.
pub fn generate_scene(
    space: &ShapeSpace,
    landmarks: &[usize],
    n_cars: usize,
    cfg: &SceneConfig,
    seed: u64,
) -> Result<GeneratedScene> {
    cfg.validate()?;
    if n_cars == 0 {
        return Err(Error::InvalidInput("n_cars must be at least 1".into()));
    }
    if landmarks.len() != LANDMARK_COUNT || landmarks.iter().any(|&v| v >= space.vertex_count) {
        return Err(Error::InvalidInput(format!(
            "need {LANDMARK_COUNT} in-range landmark vertices"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let (w, h) = (cfg.image_size.0 as f64, cfg.image_size.1 as f64);
    let cam = &cfg.camera;
    let tilt = cfg.max_tilt_deg.to_radians();

    let mut instances = Vec::with_capacity(n_cars);
    let mut meshes = Vec::with_capacity(n_cars);
    let mut centers: Vec<Vector3<f64>> = Vec::with_capacity(n_cars);
    for i in 0..n_cars {
        let cluster = rng.gen_range(0..space.cluster_count());
        let coeffs: Vec<f64> = space.clusters[cluster]
            .eigenvalues
            .iter()
            .map(|l| {
                // Truncated normal on ±2σ by rejection.
                loop {
                    let z: f64 = unit.sample(&mut rng);
                    if z.abs() <= 2.0 {
                        return z * l.sqrt();
                    }
                }
            })
            .collect();
        let code = ShapeCode::one_hot(space, cluster, coeffs);
        let verts = space.blend_vertices(&code)?;
        let centroid = crate::mesh::centroid(&verts);
        let points: Vec<Vector3<f64>> = landmarks.iter().map(|&v| verts[v]).collect();

        let mut placed = None;
        for draw in 0..MAX_PLACEMENT_DRAWS {
            let depth = rng.gen_range(cfg.depth_range.0..=cfg.depth_range.1);
            let u = rng.gen_range(0.1 * w..=0.9 * w);
            let y = cfg.ground_height + cfg.height_jitter * unit.sample(&mut rng);
            let center = Vector3::new((u - cam.px) * depth / cam.fx, y, depth);
            let rotation = Vector3::new(
                rng.gen_range(-tilt..=tilt),
                rng.gen_range(-PI..PI),
                rng.gen_range(-tilt..=tilt),
            );
            let rot = crate::geometry::euler_to_matrix(&rotation);
            let pose = Pose6DoF::new(center - rot * centroid, rotation);
            let exact: Vec<Option<Keypoint2D>> = points
                .iter()
                .map(|p| {
                    project_point(p, &pose, cam).ok().and_then(|pr| {
                        let (x, y) = (pr.pixel.x, pr.pixel.y);
                        (x >= 0.0 && x <= w && y >= 0.0 && y <= h).then(|| Keypoint2D::new(x, y, true))
                    })
                })
                .collect();
            let in_view = exact.iter().flatten().count();
            let separated = centers.iter().all(|c| (c - center).norm() >= cfg.min_separation);
            if (in_view >= cfg.min_in_view && separated) || draw + 1 == MAX_PLACEMENT_DRAWS {
                placed = Some((pose, center, exact));
                break;
            }
        }
        let (pose, center, exact) = placed.expect("loop always places on its last draw");
        centers.push(center);

        let keypoints = exact
            .into_iter()
            .map(|k| match k {
                Some(k) if rng.gen::<f64>() >= cfg.occlusion_rate => {
                    if cfg.pixel_noise > 0.0 {
                        let x = (k.x + cfg.pixel_noise * unit.sample(&mut rng)).clamp(0.0, w);
                        let y = (k.y + cfg.pixel_noise * unit.sample(&mut rng)).clamp(0.0, h);
                        Keypoint2D::new(x, y, true)
                    } else {
                        k
                    }
                }
                _ => Keypoint2D::invisible(),
            })
            .collect();
        let sub_type = rng.gen_range(0..SUB_TYPE_COUNT);
        let car_id = format!("car-{seed}-{i:03}");
        meshes.push(CanonicalMesh {
            vertices: verts,
            faces: std::sync::Arc::clone(&space.faces),
            car_id: car_id.clone(),
            sub_type,
        });
        instances.push(AnnotatedInstance {
            car_id,
            sub_type,
            pose,
            keypoints,
            score: None,
            shape_code: Some(code),
        });
    }
    Ok(GeneratedScene {
        annotation: SceneAnnotation {
            schema_version: SCHEMA_VERSION,
            camera: *cam,
            image_size: cfg.image_size,
            instances,
        },
        meshes,
    })
}
