//! Parametric synthetic car meshes on the canonical topology.
//!
//! Each car is a boxy superellipsoid body with a cabin raised over part of
//! its length. Object frame: `x` lateral (right), `y` down, `z` forward.
//! Every generated mesh is mirror-symmetric about `x = 0` and centered on its
//! vertex centroid.

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::mesh::{canonical_directions, canonical_faces, CanonicalMesh};

/// Shape parameters of one synthetic car, meters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CarParams {
    pub length: f64,
    pub width: f64,
    pub body_height: f64,
    pub cabin_height: f64,
    pub cabin_length: f64,
    /// Cabin center along `z`, relative to the body center.
    pub cabin_offset: f64,
    /// Superellipsoid exponent; smaller is boxier.
    pub roundness: f64,
    /// Family whose local detail features (spoilers, flares, racks, …) apply.
    pub family: Archetype,
    /// Outward displacement of each family detail feature.
    pub details: [f64; DETAIL_FEATURES],
}

/// Local detail features per family.
pub const DETAIL_FEATURES: usize = 4;

/// Coarse vehicle families used to seed the synthetic database.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Archetype {
    Sedan,
    Suv,
    Hatchback,
    Minivan,
}

impl Archetype {
    pub const ALL: [Archetype; 4] = [
        Archetype::Sedan,
        Archetype::Suv,
        Archetype::Hatchback,
        Archetype::Minivan,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Archetype::Sedan => "sedan",
            Archetype::Suv => "suv",
            Archetype::Hatchback => "hatchback",
            Archetype::Minivan => "minivan",
        }
    }

    pub fn base_params(self) -> CarParams {
        match self {
            Archetype::Sedan => CarParams {
                length: 4.7,
                width: 1.8,
                body_height: 0.75,
                cabin_height: 0.6,
                cabin_length: 2.4,
                cabin_offset: -0.25,
                roundness: 0.35,
                family: Archetype::Sedan,
                details: [0.0; DETAIL_FEATURES],
            },
            Archetype::Suv => CarParams {
                length: 4.8,
                width: 1.95,
                body_height: 1.0,
                cabin_height: 0.8,
                cabin_length: 3.3,
                cabin_offset: -0.45,
                roundness: 0.25,
                family: Archetype::Suv,
                details: [0.0; DETAIL_FEATURES],
            },
            Archetype::Hatchback => CarParams {
                length: 3.9,
                width: 1.7,
                body_height: 0.8,
                cabin_height: 0.7,
                cabin_length: 2.3,
                cabin_offset: -0.55,
                roundness: 0.4,
                family: Archetype::Hatchback,
                details: [0.0; DETAIL_FEATURES],
            },
            Archetype::Minivan => CarParams {
                length: 5.1,
                width: 1.95,
                body_height: 1.1,
                cabin_height: 0.9,
                cabin_length: 4.3,
                cabin_offset: -0.2,
                roundness: 0.3,
                family: Archetype::Minivan,
                details: [0.0; DETAIL_FEATURES],
            },
        }
    }

    /// Sphere directions and angular widths of this family's detail features.
    /// Each feature is mirrored across `x = 0`.
    fn detail_features(self) -> [([f64; 3], f64); DETAIL_FEATURES] {
        match self {
            Archetype::Sedan => [
                ([0.0, -0.5, -0.85], 0.04),
                ([0.0, -0.6, 0.8], 0.06),
                ([0.9, 0.3, 0.0], 0.05),
                ([0.0, 0.2, -0.98], 0.03),
            ],
            Archetype::Suv => [
                ([0.0, -1.0, 0.0], 0.03),
                ([0.0, 0.0, -1.0], 0.02),
                ([0.8, 0.3, 0.5], 0.04),
                ([0.0, 0.1, 1.0], 0.05),
            ],
            Archetype::Hatchback => [
                ([0.0, -0.6, -0.8], 0.05),
                ([0.7, -0.7, 0.0], 0.04),
                ([0.5, 0.2, 0.85], 0.03),
                ([0.9, 0.0, -0.4], 0.04),
            ],
            Archetype::Minivan => [
                ([0.95, -0.3, 0.0], 0.06),
                ([0.0, -0.95, 0.3], 0.04),
                ([0.0, 0.4, 0.9], 0.03),
                ([0.6, 0.6, -0.5], 0.05),
            ],
        }
    }

    /// Sub-type classes reserved for this family.
    fn sub_type_range(self) -> (usize, usize) {
        match self {
            Archetype::Sedan => (0, 10),
            Archetype::Suv => (10, 19),
            Archetype::Hatchback => (19, 27),
            Archetype::Minivan => (27, 34),
        }
    }
}

fn signed_pow(t: f64, e: f64) -> f64 {
    t.signum() * t.abs().powf(e)
}

/// Vertex positions for one car, before centering.
pub fn car_vertices(p: &CarParams) -> Vec<Vector3<f64>> {
    canonical_directions()
        .into_iter()
        .map(|d| {
            let e = p.roundness;
            let x = 0.5 * p.width * signed_pow(d.x, e);
            let z = 0.5 * p.length * signed_pow(d.z, e);
            let mut y = 0.5 * p.body_height * signed_pow(d.y, e);
            if d.y < 0.0 {
                let along = ((z - p.cabin_offset) / (0.5 * p.cabin_length)).abs();
                let across = (x / (0.48 * p.width)).abs();
                let bump = (1.0 - along.powi(4)).max(0.0) * (1.0 - across.powi(4)).max(0.0);
                y -= p.cabin_height * bump * (-d.y).sqrt();
            }
            let mut v = Vector3::new(x, y, z);
            for (&amp, (center, width)) in p.details.iter().zip(p.family.detail_features()) {
                if amp == 0.0 {
                    continue;
                }
                let c = Vector3::from(center).normalize();
                let mirrored = Vector3::new(-c.x, c.y, c.z);
                let w = ((d.dot(&c) - 1.0) / width).exp() + ((d.dot(&mirrored) - 1.0) / width).exp();
                let w = if c.x == 0.0 { w / 2.0 } else { w };
                v += d * (amp * w);
            }
            v
        })
        .collect()
}

/// Builds a centered canonical mesh from car parameters.
pub fn synthetic_car(p: &CarParams, car_id: impl Into<String>, sub_type: usize) -> CanonicalMesh {
    let mut verts = car_vertices(p);
    let c = crate::mesh::centroid(&verts);
    // Keep exact left/right symmetry: only shift along y and z.
    let shift = Vector3::new(0.0, c.y, c.z);
    for v in &mut verts {
        *v -= shift;
    }
    CanonicalMesh::new(verts, canonical_faces(), car_id, sub_type)
        .expect("synthetic car parameters always produce a valid mesh")
}

const DETAIL_SCALE: f64 = 0.08;

/// Per-family counts of the default synthetic database (79 meshes in total).
pub const DEFAULT_FAMILY_COUNTS: [usize; 4] = [9, 24, 14, 32];

/// Deterministic database of jittered cars; `counts[i]` meshes of
/// `Archetype::ALL[i]`, each parameter scaled by `1 + jitter · N(0, 1)`.
/// Detail features get amplitude `detail_scale · jitter / 0.04 · N(0, 1)` meters.
pub fn synthetic_car_database(counts: [usize; 4], jitter: f64, seed: u64) -> Vec<CanonicalMesh> {
    let detail = DETAIL_SCALE * jitter / 0.04;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let faces = canonical_faces();
    let mut out = Vec::with_capacity(counts.iter().sum());
    for (arch, &count) in Archetype::ALL.iter().zip(counts.iter()) {
        let base = arch.base_params();
        let (lo, hi) = arch.sub_type_range();
        for i in 0..count {
            let mut scale = || (1.0 + jitter * normal.sample(&mut rng)).clamp(0.7, 1.3);
            let p = CarParams {
                length: base.length * scale(),
                width: base.width * scale(),
                body_height: base.body_height * scale(),
                cabin_height: base.cabin_height * scale(),
                cabin_length: base.cabin_length * scale(),
                cabin_offset: base.cabin_offset * scale(),
                roundness: base.roundness * scale(),
                family: *arch,
                details: std::array::from_fn(|_| detail * normal.sample(&mut rng)),
            };
            let sub_type = lo + i % (hi - lo);
            let mut mesh = synthetic_car(&p, format!("{}-{:03}", arch.name(), i), sub_type);
            mesh.faces = std::sync::Arc::clone(&faces);
            out.push(mesh);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn database_is_deterministic_and_sized() {
        let a = synthetic_car_database(DEFAULT_FAMILY_COUNTS, 0.04, 7);
        let b = synthetic_car_database(DEFAULT_FAMILY_COUNTS, 0.04, 7);
        assert_eq!(a.len(), 79);
        assert_eq!(a, b);
        assert!(a.iter().all(|m| m.is_canonical_size()));
    }

    #[test]
    fn cars_are_centered_and_mirror_symmetric() {
        let mesh = synthetic_car(&Archetype::Suv.base_params(), "suv", 10);
        assert!(mesh.centroid().norm() < 1e-12);
        let dirs = canonical_directions();
        // The grid is mirror symmetric in x: find the partner of each vertex.
        for (i, d) in dirs.iter().enumerate().step_by(7) {
            let j = dirs
                .iter()
                .position(|e| (e - Vector3::new(-d.x, d.y, d.z)).norm() < 1e-12)
                .unwrap();
            let (a, b) = (mesh.vertices[i], mesh.vertices[j]);
            assert!((a.x + b.x).abs() < 1e-12 && (a.y - b.y).abs() < 1e-12, "{i} {j} {a:?} {b:?}");
        }
    }

    #[test]
    fn dimensions_follow_parameters() {
        let p = Archetype::Sedan.base_params();
        let mesh = synthetic_car(&p, "sedan", 0);
        let max = |f: fn(&Vector3<f64>) -> f64| mesh.vertices.iter().map(f).fold(f64::MIN, f64::max);
        let min = |f: fn(&Vector3<f64>) -> f64| mesh.vertices.iter().map(f).fold(f64::MAX, f64::min);
        assert!((max(|v| v.x) - min(|v| v.x) - p.width).abs() < 0.05);
        assert!((max(|v| v.z) - min(|v| v.z) - p.length).abs() < 0.05);
        let height = max(|v| v.y) - min(|v| v.y);
        assert!(height > p.body_height && height < p.body_height + p.cabin_height + 0.01);
    }
}
