use nalgebra::{DMatrix, SymmetricEigen};

use super::WindowDescriptor;
use crate::error::{Error, Result};

/// Result of projecting descriptors onto their top principal directions.
#[derive(Clone, Debug)]
pub struct PcaOutput {
    /// One reduced vector per input, `out_dim` (+1 with aspect) long.
    pub vectors: Vec<Vec<f64>>,
    /// Scatter-matrix eigenvalues in decreasing order (all of them).
    pub eigenvalues: Vec<f64>,
    /// Sum of squared reconstruction errors over the input set.
    pub reconstruction_error: f64,
    /// Set when `out_dim` exceeded the data rank and trailing dims were zero-padded.
    pub rank_deficient: bool,
}

/// Projects mean-centred descriptors onto the `out_dim` leading eigenvectors
/// of their scatter matrix. With `aspects`, each sample's box aspect ratio is
/// appended unscaled as a final coordinate.
pub fn pca_reduce(
    vectors: &[WindowDescriptor],
    out_dim: usize,
    aspects: Option<&[f64]>,
) -> Result<PcaOutput> {
    let n = vectors.len();
    if n <= out_dim {
        return Err(Error::Size(format!(
            "PCA to {out_dim} dims needs more than {out_dim} samples, got {n}"
        )));
    }
    let d = vectors[0].values.len();
    if vectors.iter().any(|v| v.values.len() != d) {
        return Err(Error::Data("descriptors differ in length".into()));
    }
    if let Some(a) = aspects {
        if a.len() != n {
            return Err(Error::Data(format!("{} aspects for {n} descriptors", a.len())));
        }
    }

    let mut mean = vec![0.0; d];
    for v in vectors {
        for (m, x) in mean.iter_mut().zip(&v.values) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centred = DMatrix::from_fn(n, d, |i, j| vectors[i].values[j] - mean[j]);

    // Eigen-decompose whichever of X^T X (d x d) or X X^T (n x n) is smaller;
    // both share their non-zero spectrum.
    let (eigenvalues, basis) = if d <= n {
        let scatter = centred.transpose() * &centred;
        let (vals, vecs) = sorted_eigen(scatter);
        (vals, vecs)
    } else {
        let gram = &centred * centred.transpose();
        let (vals, vecs) = sorted_eigen(gram);
        // map Gram eigenvectors u to scatter eigenvectors X^T u / sqrt(lambda)
        let mut basis = DMatrix::zeros(d, vals.len());
        for (k, &lambda) in vals.iter().enumerate() {
            if lambda > 0.0 {
                let col = centred.transpose() * vecs.column(k) / lambda.sqrt();
                basis.set_column(k, &col);
            }
        }
        (vals, basis)
    };

    let max_eig = eigenvalues.first().copied().unwrap_or(0.0).max(0.0);
    let tol = max_eig * 1e-12 * (n.max(d) as f64);
    let rank = eigenvalues.iter().filter(|&&l| l > tol).count();
    let kept = out_dim.min(rank);
    let rank_deficient = out_dim > rank;
    if rank_deficient {
        log::warn!("PCA: requested {out_dim} dims but data rank is {rank}; zero-padding");
    }

    let mut out = Vec::with_capacity(n);
    let mut reconstruction_error = 0.0;
    for i in 0..n {
        let row = centred.row(i);
        let mut reduced = vec![0.0; out_dim];
        let mut recon = vec![0.0; d];
        for k in 0..kept {
            let axis = basis.column(k);
            let c = row.dot(&axis.transpose());
            reduced[k] = c;
            for j in 0..d {
                recon[j] += c * axis[j];
            }
        }
        reconstruction_error += (0..d).map(|j| (row[j] - recon[j]).powi(2)).sum::<f64>();
        if let Some(a) = aspects {
            reduced.push(a[i]);
        }
        out.push(reduced);
    }

    Ok(PcaOutput {
        vectors: out,
        eigenvalues,
        reconstruction_error,
        rank_deficient,
    })
}

/// Eigenpairs sorted by decreasing eigenvalue, each eigenvector signed so its
/// largest-magnitude component is positive.
fn sorted_eigen(m: DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let eig = SymmetricEigen::new(m);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let dim = eig.eigenvectors.nrows();
    let mut vecs = DMatrix::zeros(dim, order.len());
    let mut vals = Vec::with_capacity(order.len());
    for (k, &src) in order.iter().enumerate() {
        let mut col = eig.eigenvectors.column(src).into_owned();
        let pivot = col
            .iter()
            .copied()
            .fold(0.0f64, |acc, v| if v.abs() > acc.abs() { v } else { acc });
        if pivot < 0.0 {
            col = -col;
        }
        vecs.set_column(k, &col);
        vals.push(eig.eigenvalues[src].max(0.0));
    }
    (vals, vecs)
}
