//! Correspondence between the 66 annotated 2D keypoints and mesh vertices.

use std::collections::HashMap;

use nalgebra::{Vector2, Vector3};

use crate::error::{Error, Result};
use crate::geometry::{project_point, CameraIntrinsics, Keypoint2D, Pose6DoF};
use crate::mesh::{grid_index, CanonicalMesh, CANONICAL_RINGS, CANONICAL_SEGMENTS, CANONICAL_VERTEX_COUNT};

/// Semantic keypoints per car instance.
pub const LANDMARK_COUNT: usize = 66;

/// Fixed landmark table used when voting leaves a slot unresolved.
///
/// On the canonical topology this is 11 rings × 6 longitudes, staggered
/// between neighboring rings; on any other topology it is evenly strided.
pub fn default_landmarks(vertex_count: usize) -> Vec<usize> {
    if vertex_count != CANONICAL_VERTEX_COUNT {
        return (0..LANDMARK_COUNT)
            .map(|i| i * vertex_count / LANDMARK_COUNT)
            .collect();
    }
    const RINGS: [usize; 11] = [1, 3, 5, 8, 11, 13, 15, 18, 21, 23, 25];
    debug_assert!(RINGS.iter().all(|&r| r < CANONICAL_RINGS));
    let mut out = Vec::with_capacity(LANDMARK_COUNT);
    for (k, &ring) in RINGS.iter().enumerate() {
        for j in 0..6 {
            let seg = (CANONICAL_SEGMENTS * (2 * j + 1)) / 12 + 4 * (k % 2);
            out.push(grid_index(ring, seg, CANONICAL_SEGMENTS));
        }
    }
    out
}

/// Vertex sets of the four wheels in the order front-left, front-right,
/// rear-left, rear-right.
///
/// Takes the bottom band of the mesh (largest `y`, since `y` points down),
/// drops vertices near the longitudinal and lateral mid-planes, and splits
/// the rest by the signs of `x` (left is negative) and `z` (front is positive).
pub fn default_wheel_sets(mesh: &CanonicalMesh) -> Result<[Vec<usize>; 4]> {
    let v = &mesh.vertices;
    let ext = |f: fn(&Vector3<f64>) -> f64| {
        v.iter()
            .map(f)
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| (lo.min(x), hi.max(x)))
    };
    let (ymin, ymax) = ext(|p| p.y);
    let (xmin, xmax) = ext(|p| p.x);
    let (zmin, zmax) = ext(|p| p.z);
    let (cx, cz) = ((xmin + xmax) / 2.0, (zmin + zmax) / 2.0);
    let (hx, hz) = ((xmax - xmin) / 2.0, (zmax - zmin) / 2.0);
    let band = ymax - 0.15 * (ymax - ymin);

    let mut sets: [Vec<usize>; 4] = Default::default();
    for (i, p) in v.iter().enumerate() {
        let (dx, dz) = (p.x - cx, p.z - cz);
        if p.y < band || dx.abs() < 0.1 * hx || dz.abs() < 0.3 * hz {
            continue;
        }
        let slot = match (dz > 0.0, dx < 0.0) {
            (true, true) => 0,
            (true, false) => 1,
            (false, true) => 2,
            (false, false) => 3,
        };
        sets[slot].push(i);
    }
    if sets.iter().any(Vec::is_empty) {
        return Err(Error::InvalidInput(format!(
            "mesh {} has no bottom vertices in some wheel quadrant",
            mesh.car_id
        )));
    }
    Ok(sets)
}

/// One annotated ground-truth instance.
#[derive(Debug, Clone, Copy)]
pub struct LandmarkSample<'a> {
    pub mesh: &'a CanonicalMesh,
    pub pose: &'a Pose6DoF,
    pub camera: &'a CameraIntrinsics,
    pub keypoints: &'a [Keypoint2D],
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SelectionConfig {
    /// Slots with fewer visible annotations than this are unresolved.
    pub min_annotations: usize,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self { min_annotations: 5 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SemanticVertexSelection {
    /// Winning vertex per slot; `None` if unresolved.
    pub indices: Vec<Option<usize>>,
    /// Visible annotations seen per slot.
    pub annotations: Vec<usize>,
    /// Votes received by the winner per slot.
    pub votes: Vec<usize>,
}

impl SemanticVertexSelection {
    pub fn unresolved(&self) -> usize {
        self.indices.iter().filter(|i| i.is_none()).count()
    }

    /// Resolved indices with unresolved slots taken from `fallback`.
    pub fn with_fallback(&self, fallback: &[usize]) -> Vec<usize> {
        self.indices
            .iter()
            .zip(fallback)
            .map(|(i, &f)| i.unwrap_or(f))
            .collect()
    }
}

/// Votes every visible keypoint onto its nearest projected vertex and keeps,
/// per slot, the vertex with the most votes (ties to the lowest index).
pub fn select_semantic_vertices(
    samples: &[LandmarkSample<'_>],
    cfg: &SelectionConfig,
) -> Result<SemanticVertexSelection> {
    let mut votes: Vec<HashMap<usize, usize>> = vec![HashMap::new(); LANDMARK_COUNT];
    let mut annotations = vec![0usize; LANDMARK_COUNT];
    for s in samples {
        if s.keypoints.len() != LANDMARK_COUNT {
            return Err(Error::DimensionMismatch {
                expected: LANDMARK_COUNT,
                got: s.keypoints.len(),
            });
        }
        let projected: Vec<(usize, Vector2<f64>)> = s
            .mesh
            .vertices
            .iter()
            .enumerate()
            .filter_map(|(i, v)| project_point(v, s.pose, s.camera).ok().map(|p| (i, p.pixel)))
            .collect();
        if projected.is_empty() {
            continue;
        }
        for (slot, kp) in s.keypoints.iter().enumerate() {
            if !kp.visible {
                continue;
            }
            annotations[slot] += 1;
            let target = kp.pixel();
            let mut best = (usize::MAX, f64::INFINITY);
            for &(i, px) in &projected {
                let d = (px - target).norm_squared();
                if d < best.1 {
                    best = (i, d);
                }
            }
            *votes[slot].entry(best.0).or_insert(0) += 1;
        }
    }

    let mut indices = Vec::with_capacity(LANDMARK_COUNT);
    let mut won = Vec::with_capacity(LANDMARK_COUNT);
    for (slot, tally) in votes.iter().enumerate() {
        let winner = tally
            .iter()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
            .map(|(&v, &n)| (v, n));
        match winner {
            Some((v, n)) if annotations[slot] >= cfg.min_annotations.max(1) => {
                indices.push(Some(v));
                won.push(n);
            }
            _ => {
                indices.push(None);
                won.push(0);
            }
        }
    }
    Ok(SemanticVertexSelection {
        indices,
        annotations,
        votes: won,
    })
}
