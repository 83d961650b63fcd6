use ndarray::{Array1, Array2, Axis};
use ndarray_linalg::{Eigh, QR, UPLO};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Above this dimensionality the top eigenpairs come from randomized subspace
/// iteration instead of a full dense decomposition.
const DENSE_EIGH_MAX_DIM: usize = 1536;
const SUBSPACE_OVERSAMPLE: usize = 32;
const SUBSPACE_POWER_ITERS: usize = 6;
/// Singular values below this fraction of the largest count as zero.
const RANK_TOL: f64 = 1e-6;

/// Principal directions (rows) and singular values of a sample matrix.
#[derive(Debug, Clone)]
pub struct PcaBasis {
    pub directions: Array2<f64>,
    pub singular_values: Array1<f64>,
}

/// Top `k` right singular vectors of the `rows × N` sample matrix `x`.
pub(crate) fn fit_pca(x: &Array2<f64>, k: usize, seed: u64) -> Result<PcaBasis> {
    let gram = x.t().dot(x);
    let (values, vectors) = top_eigenpairs(&gram, k, seed)?;
    let largest = values[0].max(0.0).sqrt();
    let mut singular_values = Array1::zeros(k);
    for (i, &v) in values.iter().enumerate() {
        let s = v.max(0.0).sqrt();
        if !(s > RANK_TOL * largest) {
            return Err(Error::RankDeficient { index: i, value: s, largest });
        }
        singular_values[i] = s;
    }
    Ok(PcaBasis { directions: vectors, singular_values })
}

/// Largest `k` eigenpairs of a symmetric PSD matrix, eigenvalues descending,
/// eigenvectors as rows. Each vector's sign is fixed so that its largest
/// magnitude entry is positive.
pub fn top_eigenpairs(a: &Array2<f64>, k: usize, seed: u64) -> Result<(Array1<f64>, Array2<f64>)> {
    let n = a.nrows();
    let (values, vectors) = if n <= DENSE_EIGH_MAX_DIM || k + SUBSPACE_OVERSAMPLE >= n / 2 {
        let (w, v) = a.eigh(UPLO::Upper)?;
        take_top(&w, &v, k)
    } else {
        subspace_iteration(a, k, seed)?
    };
    Ok((values, canonical_signs(vectors)))
}

fn take_top(w: &Array1<f64>, v: &Array2<f64>, k: usize) -> (Array1<f64>, Array2<f64>) {
    let n = w.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| w[j].total_cmp(&w[i]).then(i.cmp(&j)));
    let order = &order[..k];
    let values = order.iter().map(|&i| w[i]).collect();
    let vectors = v.select(Axis(1), order).reversed_axes().as_standard_layout().to_owned();
    (values, vectors)
}

fn subspace_iteration(a: &Array2<f64>, k: usize, seed: u64) -> Result<(Array1<f64>, Array2<f64>)> {
    let n = a.nrows();
    let width = (k + SUBSPACE_OVERSAMPLE).min(n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5ca1_ab1e);
    let omega = Array2::from_shape_simple_fn((n, width), || StandardNormal.sample(&mut rng));
    let (mut q, _) = a.dot(&omega).qr()?;
    for _ in 0..SUBSPACE_POWER_ITERS {
        let (next, _) = a.dot(&q).qr()?;
        q = next;
    }
    let small = q.t().dot(a).dot(&q);
    let (w, v) = small.eigh(UPLO::Upper)?;
    let (values, ritz) = take_top(&w, &v, k);
    let vectors = ritz.dot(&q.t());
    Ok((values, vectors))
}

fn canonical_signs(mut vectors: Array2<f64>) -> Array2<f64> {
    for mut row in vectors.axis_iter_mut(Axis(0)) {
        let pivot = row.iter().copied().fold(0.0f64, |best, v| if v.abs() > best.abs() { v } else { best });
        if pivot < 0.0 {
            row.mapv_inplace(|v| -v);
        }
    }
    vectors
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn diagonal_matrix_eigenpairs_are_sorted() {
        let a = array![[1.0, 0.0, 0.0], [0.0, 3.0, 0.0], [0.0, 0.0, 2.0]];
        let (w, v) = top_eigenpairs(&a, 2, 0).unwrap();
        assert!((w[0] - 3.0).abs() < 1e-12 && (w[1] - 2.0).abs() < 1e-12);
        assert!((v[[0, 1]] - 1.0).abs() < 1e-12);
        assert!((v[[1, 2]] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn subspace_iteration_matches_dense() {
        let n = 120;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b = Array2::from_shape_simple_fn((n, n), || -> f64 { StandardNormal.sample(&mut rng) });
        // Strongly decaying spectrum so a handful of power steps suffice.
        let d = Array1::from_shape_fn(n, |i| 0.7f64.powi(i as i32));
        let (q, _) = b.qr().unwrap();
        let a = q.dot(&Array2::from_diag(&d)).dot(&q.t());
        let (w_dense, v_dense) = {
            let (w, v) = a.eigh(UPLO::Upper).unwrap();
            take_top(&w, &v, 5)
        };
        let (w_sub, v_sub) = subspace_iteration(&a, 5, 1).unwrap();
        for i in 0..5 {
            assert!((w_dense[i] - w_sub[i]).abs() < 1e-9 * w_dense[0]);
            let dot: f64 = v_dense.row(i).dot(&v_sub.row(i));
            assert!((dot.abs() - 1.0).abs() < 1e-6, "component {i}: {dot}");
        }
    }
}
