use serde::{Deserialize, Serialize};

use super::{build_shape_space, retrieval_baseline, shape_error, ShapeSpaceConfig};
use crate::error::{Error, Result};
use crate::mesh::CanonicalMesh;

/// Mean held-out [`shape_error`] of three shape representations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShapeComparison {
    pub retrieval: f64,
    pub single_pca: f64,
    pub divide_and_conquer: f64,
    pub heldout: usize,
}

/// Holds out every `holdout_every`-th mesh, builds a single-cluster and a
/// `cfg.clusters`-cluster space on the rest, and scores each held-out mesh by
/// nearest-neighbor retrieval, single PCA projection, and the blended
/// divide-and-conquer code from [`super::ShapeSpace::fit_code`].
pub fn compare_shape_representations(
    meshes: &[CanonicalMesh],
    cfg: &ShapeSpaceConfig,
    holdout_every: usize,
    temperature: f64,
) -> Result<ShapeComparison> {
    if holdout_every < 2 {
        return Err(Error::InvalidInput("holdout_every must be at least 2".into()));
    }
    let (test, train): (Vec<_>, Vec<_>) = meshes
        .iter()
        .enumerate()
        .partition(|(i, _)| i % holdout_every == holdout_every - 1);
    let test: Vec<&CanonicalMesh> = test.into_iter().map(|(_, m)| m).collect();
    let train: Vec<CanonicalMesh> = train.into_iter().map(|(_, m)| m.clone()).collect();
    if test.is_empty() {
        return Err(Error::InvalidInput("no held-out meshes".into()));
    }

    let single_cfg = ShapeSpaceConfig {
        clusters: 1,
        ..*cfg
    };
    let (single, _) = build_shape_space(&train, &single_cfg)?;
    let (dc, _) = build_shape_space(&train, cfg)?;

    let mut sums = [0.0; 3];
    for target in &test {
        let (idx, e) = retrieval_baseline(&train, target, true)?;
        debug_assert!(idx < train.len());
        sums[0] += e;

        let (coeffs, _) = single.clusters[0].project(&target.flatten());
        sums[1] += shape_error(&single.reconstruct_in_cluster(0, &coeffs)?, target)?;

        let code = dc.fit_code(target, temperature)?;
        sums[2] += shape_error(&dc.blend_shape(&code)?, target)?;
    }
    let n = test.len() as f64;
    Ok(ShapeComparison {
        retrieval: sums[0] / n,
        single_pca: sums[1] / n,
        divide_and_conquer: sums[2] / n,
        heldout: test.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cars::{synthetic_car_database, DEFAULT_FAMILY_COUNTS};

    #[test]
    fn ordering_on_synthetic_database() {
        let db = synthetic_car_database(DEFAULT_FAMILY_COUNTS, 0.04, 2);
        let r = compare_shape_representations(&db, &ShapeSpaceConfig::default(), 5, 1.0).unwrap();
        assert_eq!(r.heldout, 15);
        assert!(r.divide_and_conquer < r.single_pca, "{r:?}");
        assert!(r.single_pca < r.retrieval, "{r:?}");
    }
}
