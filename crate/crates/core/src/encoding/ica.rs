//! Symmetric (parallel) FastICA with the log-cosh contrast.

use ndarray::{Array1, Array2, Axis};
use ndarray_linalg::{Eigh, UPLO};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct IcaOutcome {
    /// Orthogonal unmixing rotation in whitened space, one component per row.
    pub unmixing: Array2<f64>,
    pub iterations: usize,
}

/// Runs FastICA on whitened data `z` (`components × samples`).
///
/// Fails with [`Error::ConvergenceFailure`] when the largest change of any
/// unmixing direction is still above `tol` after `max_iter` updates.
pub fn fast_ica(z: &Array2<f64>, max_iter: usize, tol: f64, seed: u64) -> Result<IcaOutcome> {
    let (k, n) = z.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let init = Array2::from_shape_simple_fn((k, k), || StandardNormal.sample(&mut rng));
    let mut w = symmetric_decorrelation(&init)?;
    let inv_n = 1.0 / n as f64;

    let mut last_change = f64::INFINITY;
    for iter in 1..=max_iter {
        let mut g = w.dot(z);
        let mut g_prime_mean = Array1::<f64>::zeros(k);
        for (mut row, gp) in g.axis_iter_mut(Axis(0)).zip(g_prime_mean.iter_mut()) {
            let mut acc = 0.0;
            row.mapv_inplace(|v| {
                let t = v.tanh();
                acc += 1.0 - t * t;
                t
            });
            *gp = acc * inv_n;
        }
        let mut next = g.dot(&z.t());
        next.mapv_inplace(|v| v * inv_n);
        for ((mut row, old), &gp) in next.axis_iter_mut(Axis(0)).zip(w.rows()).zip(g_prime_mean.iter()) {
            row.scaled_add(-gp, &old);
        }
        let next = symmetric_decorrelation(&next)?;

        last_change =
            next.rows().into_iter().zip(w.rows()).map(|(a, b)| (a.dot(&b).abs() - 1.0).abs()).fold(0.0, f64::max);
        w = next;
        if last_change < tol {
            return Ok(IcaOutcome { unmixing: canonical(w), iterations: iter });
        }
    }
    Err(Error::ConvergenceFailure { iterations: max_iter, last_change })
}

/// `(W Wᵀ)^{-1/2} W`.
fn symmetric_decorrelation(w: &Array2<f64>) -> Result<Array2<f64>> {
    let (vals, vecs) = w.dot(&w.t()).eigh(UPLO::Upper)?;
    if vals.iter().any(|&v| !(v > 0.0)) {
        return Err(Error::Linalg("singular matrix in symmetric decorrelation".into()));
    }
    let inv_sqrt = Array2::from_diag(&vals.mapv(|v| 1.0 / v.sqrt()));
    Ok(vecs.dot(&inv_sqrt).dot(&vecs.t()).dot(w))
}

/// Sign-normalize rows so the largest-magnitude entry is positive.
fn canonical(mut w: Array2<f64>) -> Array2<f64> {
    for mut row in w.axis_iter_mut(Axis(0)) {
        let pivot = row.iter().copied().fold(0.0f64, |b, v| if v.abs() > b.abs() { v } else { b });
        if pivot < 0.0 {
            row.mapv_inplace(|v| -v);
        }
    }
    w
}
