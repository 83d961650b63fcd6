//! Deterministic synthetic data with heavy-tailed latent structure.
//!
//! Each point draws a cluster, adds Laplacian noise with slowly decaying
//! per-dimension scales to the cluster center in a latent space, and is
//! rotated into the observed space by a fixed random orthogonal matrix. Any
//! row range can be generated independently, so very large sets stream.

use ndarray::{Array1, Array2, Axis};
use ndarray_linalg::QR;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::encoding::RawDataset;
use crate::error::Result;
use crate::search::PointSource;

#[derive(Debug, Clone)]
pub struct SyntheticSpec {
    pub n_points: usize,
    pub dim: usize,
    pub n_clusters: usize,
    /// Laplacian scale of cluster centers.
    pub center_scale: f32,
    /// Laplacian scale of the per-point noise.
    pub noise_scale: f32,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn new(n_points: usize, dim: usize, seed: u64) -> Self {
        SyntheticSpec { n_points, dim, n_clusters: 1000, center_scale: 1.0, noise_scale: 0.5, seed }
    }
}

#[derive(Debug, Clone)]
pub struct Synthetic {
    spec: SyntheticSpec,
    centers: Array2<f32>,
    scales: Array1<f32>,
    offset: Array1<f32>,
    /// Transposed mixing matrix, so `latent · mixing_t` gives observed rows.
    mixing_t: Array2<f32>,
}

fn laplace(rng: &mut impl Rng) -> f32 {
    let u: f64 = rng.gen_range(-0.5..0.5);
    (-u.signum() * (1.0 - 2.0 * u.abs()).max(f64::MIN_POSITIVE).ln()) as f32
}

impl Synthetic {
    pub fn new(spec: SyntheticSpec) -> Result<Self> {
        let n = spec.dim;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let gauss = Array2::from_shape_fn((n, n), |_| rng.sample::<f64, _>(StandardNormal));
        let (q, _) = gauss.qr()?;
        let mixing_t = q.t().mapv(|v| v as f32);
        let scales = Array1::from_shape_fn(n, |d| (1.0 + 4.0 * d as f32 / n as f32).powf(-0.5));
        let centers = Array2::from_shape_fn((spec.n_clusters.max(1), n), |(_, d)| {
            spec.center_scale * scales[d] * laplace(&mut rng)
        });
        let offset = Array1::from_shape_fn(n, |_| 0.2 * rng.sample::<f32, _>(StandardNormal));
        Ok(Synthetic { spec, centers, scales, offset, mixing_t })
    }

    pub fn spec(&self) -> &SyntheticSpec {
        &self.spec
    }

    fn latent_row(&self, index: usize, out: &mut [f32]) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.spec.seed ^ 0x5eed_0f_da7a);
        rng.set_stream(index as u64);
        let cluster = rng.gen_range(0..self.centers.nrows());
        let center = self.centers.row(cluster);
        for (d, o) in out.iter_mut().enumerate() {
            *o = center[d] + self.spec.noise_scale * self.scales[d] * laplace(&mut rng);
        }
    }

    /// Rows `start..end`, generated independently of any other range.
    pub fn generate(&self, start: usize, end: usize) -> RawDataset {
        let n = self.spec.dim;
        let mut latent = Array2::<f32>::zeros((end - start, n));
        latent
            .axis_iter_mut(Axis(0))
            .into_par_iter()
            .enumerate()
            .for_each(|(i, mut row)| self.latent_row(start + i, row.as_slice_mut().expect("contiguous row")));
        let mut observed = latent.dot(&self.mixing_t);
        observed += &self.offset;
        RawDataset::new(observed).expect("positive dimension")
    }

    pub fn generate_all(&self) -> RawDataset {
        self.generate(0, self.spec.n_points)
    }
}

impl PointSource for Synthetic {
    fn len(&self) -> usize {
        self.spec.n_points
    }

    fn dim(&self) -> usize {
        self.spec.dim
    }

    fn rows(&self, start: usize, end: usize) -> Result<RawDataset> {
        Ok(self.generate(start, end.min(self.spec.n_points)))
    }
}
