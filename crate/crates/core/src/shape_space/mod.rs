//! Divide-and-conquer PCA shape space.
//!
//! A mesh database is partitioned with k-means on flattened vertex vectors
//! and each cluster gets its own mean-centered PCA basis. A shape is a
//! [`ShapeCode`]: cluster probabilities plus per-cluster coefficients; the
//! mesh is the probability-weighted blend of the per-cluster reconstructions.

mod experiment;
pub mod kmeans;
mod landmarks;
pub mod pca;

use std::fs;
use std::path::Path;
use std::sync::{Arc, OnceLock};

use nalgebra::{DMatrix, DVector, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::{check_shared_topology, unflatten_vertices, CanonicalMesh, Face};

pub use experiment::{compare_shape_representations, ShapeComparison};
pub use landmarks::{
    default_landmarks, default_wheel_sets, select_semantic_vertices, LandmarkSample,
    SemanticVertexSelection, SelectionConfig, LANDMARK_COUNT,
};

/// Hard ceiling on the number of PCA components per cluster.
pub const MAX_COMPONENTS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShapeSpaceConfig {
    pub clusters: usize,
    pub max_components: usize,
    pub seed: u64,
}

impl Default for ShapeSpaceConfig {
    fn default() -> Self {
        Self {
            clusters: 4,
            max_components: MAX_COMPONENTS,
            seed: 0,
        }
    }
}

/// One cluster's linear shape model.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterModel {
    pub member_ids: Vec<String>,
    pub mean: DVector<f64>,
    pub basis: DMatrix<f64>,
    pub eigenvalues: Vec<f64>,
    /// Total sample variance of the members, for explained-variance ratios.
    pub total_variance: f64,
}

impl ClusterModel {
    pub fn components(&self) -> usize {
        self.basis.ncols()
    }

    pub fn explained_variance_ratio(&self) -> f64 {
        if self.total_variance <= 0.0 {
            1.0
        } else {
            self.eigenvalues.iter().sum::<f64>() / self.total_variance
        }
    }

    pub fn reconstruct_flat(&self, coeffs: &[f64]) -> Result<DVector<f64>> {
        if coeffs.len() != self.components() {
            return Err(Error::DimensionMismatch {
                expected: self.components(),
                got: coeffs.len(),
            });
        }
        Ok(&self.mean + &self.basis * DVector::from_column_slice(coeffs))
    }

    /// The same cluster with every component removed.
    pub fn mean_only(&self) -> Self {
        Self {
            member_ids: self.member_ids.clone(),
            mean: self.mean.clone(),
            basis: DMatrix::zeros(self.mean.len(), 0),
            eigenvalues: Vec::new(),
            total_variance: self.total_variance,
        }
    }

    /// Projection coefficients and squared residual of a flattened target.
    pub fn project(&self, target: &DVector<f64>) -> (Vec<f64>, f64) {
        let centered = target - &self.mean;
        let coeffs = self.basis.transpose() * &centered;
        let residual = (&centered - &self.basis * &coeffs).norm_squared();
        (coeffs.as_slice().to_vec(), residual)
    }
}

/// Cluster probabilities plus per-cluster PCA coefficients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeCode {
    pub cluster_probs: Vec<f64>,
    pub coefficients: Vec<Vec<f64>>,
}

impl ShapeCode {
    /// All probability on `cluster`, with the given coefficients there and zeros elsewhere.
    pub fn one_hot(space: &ShapeSpace, cluster: usize, coeffs: Vec<f64>) -> Self {
        let mut code = Self::zeros(space);
        code.cluster_probs.fill(0.0);
        code.cluster_probs[cluster] = 1.0;
        code.coefficients[cluster] = coeffs;
        code
    }

    /// Zero coefficients with all probability mass on cluster 0.
    pub fn zeros(space: &ShapeSpace) -> Self {
        let mut cluster_probs = vec![0.0; space.clusters.len()];
        cluster_probs[0] = 1.0;
        Self {
            cluster_probs,
            coefficients: space
                .clusters
                .iter()
                .map(|c| vec![0.0; c.components()])
                .collect(),
        }
    }

    pub fn dominant_cluster(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.cluster_probs.iter().enumerate() {
            if p > self.cluster_probs[best] {
                best = i;
            }
        }
        best
    }
}

/// Gradient of a scalar with respect to a [`ShapeCode`]'s entries.
#[derive(Debug, Clone, PartialEq)]
pub struct CodeGradient {
    pub cluster_probs: Vec<f64>,
    pub coefficients: Vec<Vec<f64>>,
}

impl CodeGradient {
    pub fn zeros(space: &ShapeSpace) -> Self {
        Self {
            cluster_probs: vec![0.0; space.clusters.len()],
            coefficients: space
                .clusters
                .iter()
                .map(|c| vec![0.0; c.components()])
                .collect(),
        }
    }
}

/// Cluster sizes and explained variance of a freshly built space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuildReport {
    pub cluster_sizes: Vec<usize>,
    pub components: Vec<usize>,
    pub explained_variance: Vec<f64>,
    pub kmeans_iterations: usize,
    pub seed_used: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShapeSpace {
    pub clusters: Vec<ClusterModel>,
    pub faces: Arc<Vec<Face>>,
    pub vertex_count: usize,
    centroids: CentroidCache,
}

/// Vertex centroids of every cluster mean and basis column, computed on
/// first use. Derived data, so it never affects equality.
#[derive(Debug, Clone, Default)]
struct CentroidCache(OnceLock<Vec<(Vector3<f64>, Vec<Vector3<f64>>)>>);

impl PartialEq for CentroidCache {
    fn eq(&self, _: &Self) -> bool {
        true
    }
}

fn flat_centroid(flat: impl Iterator<Item = f64>, vertex_count: usize) -> Vector3<f64> {
    let mut sum = Vector3::zeros();
    for (i, x) in flat.enumerate() {
        sum[i % 3] += x;
    }
    sum / vertex_count as f64
}

/// Clusters the database and fits a PCA model per cluster.
///
/// Cluster labels are renumbered by first appearance in `meshes`, so the
/// output only depends on the partition, not on k-means label order.
pub fn build_shape_space(
    meshes: &[CanonicalMesh],
    cfg: &ShapeSpaceConfig,
) -> Result<(ShapeSpace, BuildReport)> {
    if meshes.len() < cfg.clusters || cfg.clusters == 0 {
        return Err(Error::InvalidInput(format!(
            "need at least {} meshes to build {} clusters, got {}",
            cfg.clusters.max(1),
            cfg.clusters,
            meshes.len()
        )));
    }
    check_shared_topology(meshes)?;
    let flat: Vec<DVector<f64>> = meshes.iter().map(CanonicalMesh::flatten).collect();
    let km = kmeans::kmeans(&flat, &kmeans::KMeansConfig::new(cfg.clusters, cfg.seed))?;

    let mut relabel = vec![usize::MAX; cfg.clusters];
    let mut next = 0;
    for &a in &km.assignments {
        if relabel[a] == usize::MAX {
            relabel[a] = next;
            next += 1;
        }
    }

    let n_max = cfg.max_components.min(MAX_COMPONENTS);
    let mut clusters = Vec::with_capacity(cfg.clusters);
    for label in 0..cfg.clusters {
        let members: Vec<usize> = (0..meshes.len())
            .filter(|&i| relabel[km.assignments[i]] == label)
            .collect();
        let samples: Vec<DVector<f64>> = members.iter().map(|&i| flat[i].clone()).collect();
        let fit = pca::fit_pca(&samples, n_max);
        let total_variance = if samples.len() > 1 {
            samples
                .iter()
                .map(|s| (s - &fit.mean).norm_squared())
                .sum::<f64>()
                / (samples.len() - 1) as f64
        } else {
            0.0
        };
        clusters.push(ClusterModel {
            member_ids: members.iter().map(|&i| meshes[i].car_id.clone()).collect(),
            mean: fit.mean,
            basis: fit.basis,
            eigenvalues: fit.eigenvalues,
            total_variance,
        });
    }
    let report = BuildReport {
        cluster_sizes: clusters.iter().map(|c| c.member_ids.len()).collect(),
        components: clusters.iter().map(ClusterModel::components).collect(),
        explained_variance: clusters
            .iter()
            .map(ClusterModel::explained_variance_ratio)
            .collect(),
        kmeans_iterations: km.iterations,
        seed_used: km.seed_used,
    };
    let space = ShapeSpace::new(clusters, Arc::clone(&meshes[0].faces), meshes[0].vertices.len());
    Ok((space, report))
}

impl ShapeSpace {
    pub fn new(clusters: Vec<ClusterModel>, faces: Arc<Vec<Face>>, vertex_count: usize) -> Self {
        Self {
            clusters,
            faces,
            vertex_count,
            centroids: CentroidCache::default(),
        }
    }

    fn centroid_table(&self) -> &[(Vector3<f64>, Vec<Vector3<f64>>)] {
        self.centroids.0.get_or_init(|| {
            let n = self.vertex_count;
            self.clusters
                .iter()
                .map(|c| {
                    let cols = (0..c.components())
                        .map(|k| flat_centroid(c.basis.column(k).iter().copied(), n))
                        .collect();
                    (flat_centroid(c.mean.iter().copied(), n), cols)
                })
                .collect()
        })
    }

    /// Vertex centroid of the blended mesh, without building the mesh.
    /// Probabilities act as free weights.
    pub fn blend_centroid(&self, code: &ShapeCode) -> Vector3<f64> {
        let mut out = Vector3::zeros();
        for ((table, &p), coeffs) in self.centroid_table().iter().zip(&code.cluster_probs).zip(&code.coefficients) {
            let mut m = table.0;
            for (col, &a) in table.1.iter().zip(coeffs) {
                m += col * a;
            }
            out += m * p;
        }
        out
    }

    /// Chain rule from a gradient on [`Self::blend_centroid`] to the code.
    pub fn pullback_centroid(&self, code: &ShapeCode, grad: &Vector3<f64>) -> CodeGradient {
        let mut out = CodeGradient::zeros(self);
        for (ci, table) in self.centroid_table().iter().enumerate() {
            let p = code.cluster_probs[ci];
            let mut m = table.0;
            for (k, (col, &a)) in table.1.iter().zip(&code.coefficients[ci]).enumerate() {
                m += col * a;
                out.coefficients[ci][k] = p * col.dot(grad);
            }
            out.cluster_probs[ci] = m.dot(grad);
        }
        out
    }

    pub fn cluster_count(&self) -> usize {
        self.clusters.len()
    }

    fn cluster(&self, index: usize) -> Result<&ClusterModel> {
        self.clusters.get(index).ok_or(Error::DimensionMismatch {
            expected: self.clusters.len(),
            got: index,
        })
    }

    fn mesh_from_flat(&self, flat: &DVector<f64>, car_id: String) -> CanonicalMesh {
        CanonicalMesh {
            vertices: unflatten_vertices(flat),
            faces: Arc::clone(&self.faces),
            car_id,
            sub_type: 0,
        }
    }

    /// `mean + basis · coeffs` of one cluster, as a mesh.
    pub fn reconstruct_in_cluster(&self, cluster: usize, coeffs: &[f64]) -> Result<CanonicalMesh> {
        let flat = self.cluster(cluster)?.reconstruct_flat(coeffs)?;
        Ok(self.mesh_from_flat(&flat, format!("cluster-{cluster}")))
    }

    pub fn cluster_mean_mesh(&self, cluster: usize) -> Result<CanonicalMesh> {
        let c = self.cluster(cluster)?;
        Ok(self.mesh_from_flat(&c.mean, format!("cluster-{cluster}-mean")))
    }

    /// Checks lengths and the probability simplex.
    pub fn validate_code(&self, code: &ShapeCode) -> Result<()> {
        self.check_code_shape(code)?;
        if code.cluster_probs.iter().any(|&p| !(p >= -1e-12)) {
            return Err(Error::SimplexViolation(format!(
                "negative or NaN probability in {:?}",
                code.cluster_probs
            )));
        }
        let sum: f64 = code.cluster_probs.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::SimplexViolation(format!("probabilities sum to {sum}")));
        }
        Ok(())
    }

    fn check_code_shape(&self, code: &ShapeCode) -> Result<()> {
        if code.cluster_probs.len() != self.clusters.len() {
            return Err(Error::DimensionMismatch {
                expected: self.clusters.len(),
                got: code.cluster_probs.len(),
            });
        }
        if code.coefficients.len() != self.clusters.len() {
            return Err(Error::DimensionMismatch {
                expected: self.clusters.len(),
                got: code.coefficients.len(),
            });
        }
        for (c, coeffs) in self.clusters.iter().zip(&code.coefficients) {
            if coeffs.len() != c.components() {
                return Err(Error::DimensionMismatch {
                    expected: c.components(),
                    got: coeffs.len(),
                });
            }
        }
        Ok(())
    }

    /// Probability-weighted sum of per-cluster reconstructions.
    pub fn blend_shape(&self, code: &ShapeCode) -> Result<CanonicalMesh> {
        self.validate_code(code)?;
        let flat = self.blend_flat(code)?;
        Ok(self.mesh_from_flat(&flat, "blend".into()))
    }

    /// Blend without the simplex check; probabilities act as free weights.
    /// Used by the losses, whose gradients treat probabilities as parameters.
    pub fn blend_flat(&self, code: &ShapeCode) -> Result<DVector<f64>> {
        self.check_code_shape(code)?;
        let mut out = DVector::zeros(self.vertex_count * 3);
        for ((c, &p), coeffs) in self.clusters.iter().zip(&code.cluster_probs).zip(&code.coefficients) {
            if p != 0.0 {
                out.axpy(p, &c.reconstruct_flat(coeffs)?, 1.0);
            }
        }
        Ok(out)
    }

    pub fn blend_vertices(&self, code: &ShapeCode) -> Result<Vec<Vector3<f64>>> {
        Ok(unflatten_vertices(&self.blend_flat(code)?))
    }

    /// Chain rule from per-vertex gradients of the blended mesh to the code.
    pub fn pullback(&self, code: &ShapeCode, vertex_grads: &[Vector3<f64>]) -> Result<CodeGradient> {
        self.check_code_shape(code)?;
        if vertex_grads.len() != self.vertex_count {
            return Err(Error::DimensionMismatch {
                expected: self.vertex_count,
                got: vertex_grads.len(),
            });
        }
        let g = crate::mesh::flatten_vertices(vertex_grads);
        let mut out = CodeGradient::zeros(self);
        for (ci, c) in self.clusters.iter().enumerate() {
            let recon = c.reconstruct_flat(&code.coefficients[ci])?;
            out.cluster_probs[ci] = g.dot(&recon);
            let dc = c.basis.transpose() * &g * code.cluster_probs[ci];
            out.coefficients[ci] = dc.as_slice().to_vec();
        }
        Ok(out)
    }

    /// One vertex of the blended mesh. Probabilities act as free weights and
    /// the code is assumed to have the right shape.
    pub fn blend_vertex(&self, code: &ShapeCode, vertex: usize) -> Vector3<f64> {
        let r = 3 * vertex;
        let mut out = Vector3::zeros();
        for ((c, &p), coeffs) in self.clusters.iter().zip(&code.cluster_probs).zip(&code.coefficients) {
            if p == 0.0 {
                continue;
            }
            let mut v = Vector3::new(c.mean[r], c.mean[r + 1], c.mean[r + 2]);
            for (k, &a) in coeffs.iter().enumerate() {
                v += Vector3::new(c.basis[(r, k)], c.basis[(r + 1, k)], c.basis[(r + 2, k)]) * a;
            }
            out += v * p;
        }
        out
    }

    /// [`Self::pullback`] for gradients supported on a few vertices.
    /// Repeated indices accumulate.
    pub fn pullback_sparse(&self, code: &ShapeCode, grads: &[(usize, Vector3<f64>)]) -> CodeGradient {
        let mut out = CodeGradient::zeros(self);
        for (ci, c) in self.clusters.iter().enumerate() {
            let coeffs = &code.coefficients[ci];
            let p = code.cluster_probs[ci];
            for &(v, g) in grads {
                let r = 3 * v;
                let mut recon = Vector3::new(c.mean[r], c.mean[r + 1], c.mean[r + 2]);
                for (k, &a) in coeffs.iter().enumerate() {
                    let col = Vector3::new(c.basis[(r, k)], c.basis[(r + 1, k)], c.basis[(r + 2, k)]);
                    recon += col * a;
                    out.coefficients[ci][k] += p * col.dot(&g);
                }
                out.cluster_probs[ci] += g.dot(&recon);
            }
        }
        out
    }

    /// Per-cluster projection of `target`, with probabilities given by a
    /// softmax of negative squared residuals at `temperature`. A temperature
    /// of zero picks the best cluster outright.
    pub fn fit_code(&self, target: &CanonicalMesh, temperature: f64) -> Result<ShapeCode> {
        if target.vertices.len() != self.vertex_count || *target.faces != *self.faces {
            return Err(Error::TopologyMismatch(format!(
                "target {} does not share the shape-space topology",
                target.car_id
            )));
        }
        let flat = target.flatten();
        let (coefficients, residuals): (Vec<Vec<f64>>, Vec<f64>) =
            self.clusters.iter().map(|c| c.project(&flat)).unzip();
        Ok(ShapeCode {
            cluster_probs: softmax_neg(&residuals, temperature),
            coefficients,
        })
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string(&ShapeSpaceFile::from(self))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&ShapeSpaceFile::from(self))?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ShapeSpaceFile = serde_json::from_str(text)?;
        file.try_into()
    }
}

fn softmax_neg(residuals: &[f64], temperature: f64) -> Vec<f64> {
    let best = residuals
        .iter()
        .enumerate()
        .fold(0, |b, (i, &r)| if r < residuals[b] { i } else { b });
    if temperature <= 0.0 {
        let mut p = vec![0.0; residuals.len()];
        p[best] = 1.0;
        return p;
    }
    let min = residuals[best];
    let w: Vec<f64> = residuals.iter().map(|r| (-(r - min) / temperature).exp()).collect();
    let z: f64 = w.iter().sum();
    w.into_iter().map(|x| x / z).collect()
}

/// Mean squared vertex distance between two meshes of identical topology.
pub fn shape_error(pred: &CanonicalMesh, gt: &CanonicalMesh) -> Result<f64> {
    if !pred.same_topology(gt) {
        return Err(Error::TopologyMismatch(format!(
            "{} vs {}",
            pred.car_id, gt.car_id
        )));
    }
    Ok(vertex_mse(&pred.vertices, &gt.vertices))
}

pub(crate) fn vertex_mse(a: &[Vector3<f64>], b: &[Vector3<f64>]) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    a.iter().zip(b).map(|(p, q)| (p - q).norm_squared()).sum::<f64>() / a.len() as f64
}

/// Index of the database mesh closest to `target` in [`shape_error`],
/// skipping entries with the target's `car_id` when `exclude_self` is set.
/// Ties go to the lower index.
pub fn retrieval_baseline(
    database: &[CanonicalMesh],
    target: &CanonicalMesh,
    exclude_self: bool,
) -> Result<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, m) in database.iter().enumerate() {
        if exclude_self && m.car_id == target.car_id {
            continue;
        }
        let e = shape_error(m, target)?;
        if best.is_none_or(|(_, b)| e < b) {
            best = Some((i, e));
        }
    }
    best.ok_or_else(|| Error::InvalidInput("retrieval database is empty".into()))
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ClusterFile {
    member_ids: Vec<String>,
    mean: Vec<f64>,
    /// One inner vector per basis column.
    basis: Vec<Vec<f64>>,
    eigenvalues: Vec<f64>,
    total_variance: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ShapeSpaceFile {
    format: String,
    version: u32,
    vertex_count: usize,
    faces: Vec<Face>,
    clusters: Vec<ClusterFile>,
}

const FORMAT_NAME: &str = "carshape-shape-space";

impl From<&ShapeSpace> for ShapeSpaceFile {
    fn from(s: &ShapeSpace) -> Self {
        Self {
            format: FORMAT_NAME.into(),
            version: 1,
            vertex_count: s.vertex_count,
            faces: s.faces.as_ref().clone(),
            clusters: s
                .clusters
                .iter()
                .map(|c| ClusterFile {
                    member_ids: c.member_ids.clone(),
                    mean: c.mean.as_slice().to_vec(),
                    basis: c.basis.column_iter().map(|col| col.iter().copied().collect()).collect(),
                    eigenvalues: c.eigenvalues.clone(),
                    total_variance: c.total_variance,
                })
                .collect(),
        }
    }
}

impl TryFrom<ShapeSpaceFile> for ShapeSpace {
    type Error = Error;

    fn try_from(f: ShapeSpaceFile) -> Result<Self> {
        if f.format != FORMAT_NAME || f.version != 1 {
            return Err(Error::InvalidInput(format!(
                "unsupported shape space file {} v{}",
                f.format, f.version
            )));
        }
        if f.clusters.is_empty() {
            return Err(Error::InvalidInput("shape space has no clusters".into()));
        }
        let dim = f.vertex_count * 3;
        if f.faces.iter().flatten().any(|&i| i >= f.vertex_count) {
            return Err(Error::InvalidInput("face index out of range".into()));
        }
        let mut clusters = Vec::with_capacity(f.clusters.len());
        for c in f.clusters {
            if c.mean.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: c.mean.len(),
                });
            }
            if c.basis.len() != c.eigenvalues.len() || c.basis.len() > MAX_COMPONENTS {
                return Err(Error::InvalidInput(format!(
                    "cluster has {} basis columns and {} eigenvalues",
                    c.basis.len(),
                    c.eigenvalues.len()
                )));
            }
            if let Some(col) = c.basis.iter().find(|col| col.len() != dim) {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: col.len(),
                });
            }
            let basis = DMatrix::from_fn(dim, c.basis.len(), |r, k| c.basis[k][r]);
            clusters.push(ClusterModel {
                member_ids: c.member_ids,
                mean: DVector::from_vec(c.mean),
                basis,
                eigenvalues: c.eigenvalues,
                total_variance: c.total_variance,
            });
        }
        Ok(ShapeSpace::new(clusters, Arc::new(f.faces), f.vertex_count))
    }
}
