//! Fixed-topology car meshes and their on-disk database format.
//!
//! The canonical topology is a closed genus-0 surface with 1352 vertices and
//! 2700 triangles, laid out as a latitude/longitude grid: vertex 0 is the top
//! pole, then [`CANONICAL_RINGS`] rings of [`CANONICAL_SEGMENTS`] vertices,
//! then the bottom pole.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use nalgebra::{DVector, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CANONICAL_VERTEX_COUNT: usize = 1352;
pub const CANONICAL_FACE_COUNT: usize = 2700;
pub const CANONICAL_RINGS: usize = 27;
pub const CANONICAL_SEGMENTS: usize = 50;
/// Number of vehicle sub-type classes.
pub const SUB_TYPE_COUNT: usize = 34;

pub type Face = [usize; 3];

/// A triangle mesh sharing the database-wide topology.
#[derive(Debug, Clone, PartialEq)]
pub struct CanonicalMesh {
    pub vertices: Vec<Vector3<f64>>,
    pub faces: Arc<Vec<Face>>,
    pub car_id: String,
    pub sub_type: usize,
}

impl CanonicalMesh {
    pub fn new(
        vertices: Vec<Vector3<f64>>,
        faces: Arc<Vec<Face>>,
        car_id: impl Into<String>,
        sub_type: usize,
    ) -> Result<Self> {
        let mesh = Self {
            vertices,
            faces,
            car_id: car_id.into(),
            sub_type,
        };
        mesh.validate()?;
        Ok(mesh)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.vertices.len();
        if let Some(f) = self.faces.iter().find(|f| f.iter().any(|&i| i >= n)) {
            return Err(Error::InvalidInput(format!(
                "mesh {}: face {:?} indexes past {} vertices",
                self.car_id, f, n
            )));
        }
        if self.sub_type >= SUB_TYPE_COUNT {
            return Err(Error::InvalidInput(format!(
                "mesh {}: sub_type {} out of range [0, {})",
                self.car_id, self.sub_type, SUB_TYPE_COUNT
            )));
        }
        if self.vertices.iter().any(|v| !v.iter().all(|x| x.is_finite())) {
            return Err(Error::InvalidInput(format!(
                "mesh {}: non-finite vertex coordinate",
                self.car_id
            )));
        }
        Ok(())
    }

    /// Same faces, new vertex positions.
    pub fn with_vertices(&self, vertices: Vec<Vector3<f64>>) -> Self {
        Self {
            vertices,
            faces: Arc::clone(&self.faces),
            car_id: self.car_id.clone(),
            sub_type: self.sub_type,
        }
    }

    pub fn is_canonical_size(&self) -> bool {
        self.vertices.len() == CANONICAL_VERTEX_COUNT && self.faces.len() == CANONICAL_FACE_COUNT
    }

    /// `[x0, y0, z0, x1, ...]`.
    pub fn flatten(&self) -> DVector<f64> {
        flatten_vertices(&self.vertices)
    }

    pub fn centroid(&self) -> Vector3<f64> {
        centroid(&self.vertices)
    }

    pub fn same_topology(&self, other: &CanonicalMesh) -> bool {
        self.vertices.len() == other.vertices.len()
            && (Arc::ptr_eq(&self.faces, &other.faces) || self.faces == other.faces)
    }
}

pub fn flatten_vertices(vertices: &[Vector3<f64>]) -> DVector<f64> {
    DVector::from_iterator(vertices.len() * 3, vertices.iter().flat_map(|v| v.iter().copied()))
}

pub fn unflatten_vertices(flat: &DVector<f64>) -> Vec<Vector3<f64>> {
    flat.as_slice()
        .chunks_exact(3)
        .map(|c| Vector3::new(c[0], c[1], c[2]))
        .collect()
}

pub fn centroid(vertices: &[Vector3<f64>]) -> Vector3<f64> {
    if vertices.is_empty() {
        return Vector3::zeros();
    }
    vertices.iter().sum::<Vector3<f64>>() / vertices.len() as f64
}

/// Fails with `TopologyMismatch` unless every mesh shares vertex count and faces.
pub fn check_shared_topology(meshes: &[CanonicalMesh]) -> Result<()> {
    let Some(first) = meshes.first() else {
        return Ok(());
    };
    for m in &meshes[1..] {
        if !first.same_topology(m) {
            return Err(Error::TopologyMismatch(format!(
                "{} ({} vertices, {} faces) vs {} ({} vertices, {} faces)",
                first.car_id,
                first.vertices.len(),
                first.faces.len(),
                m.car_id,
                m.vertices.len(),
                m.faces.len()
            )));
        }
    }
    Ok(())
}

/// Faces of the canonical latitude/longitude topology, wound outward.
pub fn canonical_faces() -> Arc<Vec<Face>> {
    sphere_faces(CANONICAL_RINGS, CANONICAL_SEGMENTS)
}

/// Vertex index of `(ring, segment)` in a lat/long grid with a pole at index 0.
pub fn grid_index(ring: usize, segment: usize, segments: usize) -> usize {
    1 + ring * segments + segment % segments
}

pub fn sphere_faces(rings: usize, segments: usize) -> Arc<Vec<Face>> {
    let bottom = 1 + rings * segments;
    let mut faces = Vec::with_capacity(2 * segments * rings);
    for s in 0..segments {
        faces.push([0, grid_index(0, s, segments), grid_index(0, s + 1, segments)]);
    }
    for r in 0..rings - 1 {
        for s in 0..segments {
            let a = grid_index(r, s, segments);
            let b = grid_index(r, s + 1, segments);
            let c = grid_index(r + 1, s, segments);
            let d = grid_index(r + 1, s + 1, segments);
            faces.push([a, c, b]);
            faces.push([b, c, d]);
        }
    }
    for s in 0..segments {
        faces.push([
            bottom,
            grid_index(rings - 1, s + 1, segments),
            grid_index(rings - 1, s, segments),
        ]);
    }
    Arc::new(faces)
}

/// Unit directions of the canonical grid vertices. `y` points down, so the
/// first vertex is the top pole `(0, -1, 0)`.
pub fn canonical_directions() -> Vec<Vector3<f64>> {
    sphere_directions(CANONICAL_RINGS, CANONICAL_SEGMENTS)
}

pub fn sphere_directions(rings: usize, segments: usize) -> Vec<Vector3<f64>> {
    use std::f64::consts::PI;
    let mut dirs = Vec::with_capacity(2 + rings * segments);
    dirs.push(Vector3::new(0.0, -1.0, 0.0));
    for r in 0..rings {
        let theta = PI * (r + 1) as f64 / (rings + 1) as f64;
        let (st, ct) = theta.sin_cos();
        for s in 0..segments {
            let phi = 2.0 * PI * s as f64 / segments as f64;
            let (sp, cp) = phi.sin_cos();
            // Snap rounding noise so the grid is exactly mirror symmetric.
            let snap = |x: f64| if x.abs() < 1e-12 { 0.0 } else { x };
            dirs.push(Vector3::new(snap(st * cp), snap(-ct), snap(st * sp)));
        }
    }
    dirs.push(Vector3::new(0.0, 1.0, 0.0));
    dirs
}

/// Entry of the database index file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeshIndexEntry {
    pub file: String,
    pub sub_type: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cluster: Option<usize>,
}

pub const MESH_INDEX_FILE: &str = "index.json";

/// Reads `v` and triangular `f` records, keeping vertex order as written.
/// Texture/normal references (`f 1/2/3 ...`) and negative indices are accepted;
/// other record types are ignored.
pub fn read_obj(path: impl AsRef<Path>) -> Result<(Vec<Vector3<f64>>, Vec<Face>)> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_obj(&text).map_err(|message| Error::Obj {
        path: path.display().to_string(),
        message,
    })
}

fn parse_obj(text: &str) -> std::result::Result<(Vec<Vector3<f64>>, Vec<Face>), String> {
    let mut vertices = Vec::new();
    let mut raw_faces: Vec<([i64; 3], usize)> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let lineno = lineno + 1;
        let mut parts = line.split_whitespace();
        match parts.next() {
            Some("v") => {
                let coords: Vec<f64> = parts
                    .take(3)
                    .map(str::parse)
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| format!("line {lineno}: {e}"))?;
                if coords.len() != 3 {
                    return Err(format!("line {lineno}: vertex needs 3 coordinates"));
                }
                vertices.push(Vector3::new(coords[0], coords[1], coords[2]));
            }
            Some("f") => {
                let idx: Vec<i64> = parts
                    .map(|t| t.split('/').next().unwrap_or("").parse::<i64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| format!("line {lineno}: {e}"))?;
                if idx.len() != 3 {
                    return Err(format!(
                        "line {lineno}: only triangular faces are supported, got {} corners",
                        idx.len()
                    ));
                }
                raw_faces.push(([idx[0], idx[1], idx[2]], vertices.len()));
            }
            _ => {}
        }
    }
    if vertices.is_empty() {
        return Err("no vertices".into());
    }
    let n = vertices.len() as i64;
    let faces = raw_faces
        .into_iter()
        .map(|(f, seen)| {
            let mut out = [0usize; 3];
            for (o, &i) in out.iter_mut().zip(&f) {
                let resolved = if i > 0 { i - 1 } else { seen as i64 + i };
                if !(0..n).contains(&resolved) {
                    return Err(format!("face index {i} out of range"));
                }
                *o = resolved as usize;
            }
            Ok(out)
        })
        .collect::<std::result::Result<_, String>>()?;
    Ok((vertices, faces))
}

pub fn write_obj(mesh: &CanonicalMesh, path: impl AsRef<Path>) -> Result<()> {
    use std::fmt::Write as _;
    let mut out = String::with_capacity(mesh.vertices.len() * 40 + mesh.faces.len() * 20);
    let _ = writeln!(out, "# car_id {}", mesh.car_id);
    for v in &mesh.vertices {
        let _ = writeln!(out, "v {} {} {}", v.x, v.y, v.z);
    }
    for f in mesh.faces.iter() {
        let _ = writeln!(out, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1);
    }
    fs::write(path.as_ref(), out).map_err(|e| Error::io(path.as_ref(), e))
}

/// Loads an OBJ directory described by `index.json`, sorted by `car_id`.
///
/// With `require_canonical`, every mesh must have exactly 1352 vertices and
/// 2700 faces. Meshes read from disk share a single face list afterwards.
pub fn load_mesh_database(
    dir: impl AsRef<Path>,
    require_canonical: bool,
) -> Result<Vec<(CanonicalMesh, MeshIndexEntry)>> {
    let dir = dir.as_ref();
    if !dir.is_dir() {
        return Err(Error::InvalidInput(format!(
            "mesh directory {} does not exist",
            dir.display()
        )));
    }
    let index_path = dir.join(MESH_INDEX_FILE);
    let text = fs::read_to_string(&index_path).map_err(|e| Error::io(&index_path, e))?;
    let index: BTreeMap<String, MeshIndexEntry> = serde_json::from_str(&text)?;
    if index.is_empty() {
        return Err(Error::InvalidInput(format!("{} lists no meshes", index_path.display())));
    }

    let mut shared: Option<Arc<Vec<Face>>> = None;
    let mut out = Vec::with_capacity(index.len());
    for (car_id, entry) in index {
        let (vertices, faces) = read_obj(dir.join(&entry.file))?;
        let faces = match &shared {
            Some(s) if **s == faces => Arc::clone(s),
            Some(_) => {
                return Err(Error::TopologyMismatch(format!(
                    "{car_id} ({}) has a different face list",
                    entry.file
                )))
            }
            None => {
                let s = Arc::new(faces);
                shared = Some(Arc::clone(&s));
                s
            }
        };
        let mesh = CanonicalMesh::new(vertices, faces, car_id, entry.sub_type)?;
        if require_canonical && !mesh.is_canonical_size() {
            return Err(Error::TopologyMismatch(format!(
                "{} has {} vertices / {} faces, expected {} / {}",
                mesh.car_id,
                mesh.vertices.len(),
                mesh.faces.len(),
                CANONICAL_VERTEX_COUNT,
                CANONICAL_FACE_COUNT
            )));
        }
        out.push((mesh, entry));
    }
    let meshes: Vec<CanonicalMesh> = out.iter().map(|(m, _)| m.clone()).collect();
    check_shared_topology(&meshes)?;
    Ok(out)
}

/// Writes meshes as `<car_id>.obj` plus `index.json`.
pub fn write_mesh_database(dir: impl AsRef<Path>, meshes: &[CanonicalMesh]) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut index = BTreeMap::new();
    for mesh in meshes {
        let file = format!("{}.obj", mesh.car_id);
        write_obj(mesh, dir.join(&file))?;
        index.insert(
            mesh.car_id.clone(),
            MeshIndexEntry {
                file,
                sub_type: mesh.sub_type,
                cluster: None,
            },
        );
    }
    let path = dir.join(MESH_INDEX_FILE);
    fs::write(&path, serde_json::to_string_pretty(&index)?).map_err(|e| Error::io(&path, e))
}
