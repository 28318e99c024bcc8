use nalgebra::{DMatrix, DVector, SymmetricEigen};

/// Mean-centered PCA of a set of equally sized samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Pca {
    pub mean: DVector<f64>,
    /// `N × n`, orthonormal columns ordered by decreasing variance.
    pub basis: DMatrix<f64>,
    /// Sample variance along each basis column.
    pub eigenvalues: Vec<f64>,
}

/// Variances below this fraction of the largest are treated as zero.
const RANK_TOLERANCE: f64 = 1e-10;

/// Fits at most `min(n_max, samples − 1)` components of the centered data.
/// Numerically zero-variance directions are dropped.
pub fn fit_pca(samples: &[DVector<f64>], n_max: usize) -> Pca {
    assert!(!samples.is_empty(), "PCA needs at least one sample");
    let m = samples.len();
    let dim = samples[0].len();
    let mean = samples.iter().fold(DVector::zeros(dim), |acc, s| acc + s) / m as f64;
    let n_cap = n_max.min(m - 1);
    if n_cap == 0 {
        return Pca {
            mean,
            basis: DMatrix::zeros(dim, 0),
            eigenvalues: Vec::new(),
        };
    }

    // Eigen-decomposition of the small m × m Gram matrix; every basis
    // vector is then an exact combination of the centered samples.
    let centered = DMatrix::from_fn(dim, m, |r, c| samples[c][r] - mean[r]);
    let gram = centered.transpose() * &centered;
    let eig = SymmetricEigen::new(gram);
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let top = eig.eigenvalues[order[0]].max(0.0);
    let kept: Vec<usize> = order
        .into_iter()
        .filter(|&i| top > 0.0 && eig.eigenvalues[i] > RANK_TOLERANCE * top)
        .take(n_cap)
        .collect();

    let mut basis = DMatrix::zeros(dim, kept.len());
    let mut eigenvalues = Vec::with_capacity(kept.len());
    for (j, &i) in kept.iter().enumerate() {
        let mut col = &centered * eig.eigenvectors.column(i);
        col /= col.norm();
        // Sign convention: the largest-magnitude entry is positive.
        let imax = col.iamax();
        if col[imax] < 0.0 {
            col.neg_mut();
        }
        basis.set_column(j, &col);
        eigenvalues.push(eig.eigenvalues[i] / (m - 1) as f64);
    }
    Pca {
        mean,
        basis,
        eigenvalues,
    }
}
