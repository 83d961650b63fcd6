//! PCA/ICA encoding of raw vectors into a reduced, sparse coordinate space.
//!
//! A fitted [`EncodingModel`] holds the training mean, the top principal
//! directions `V_PCA`, their singular values and an orthogonal ICA rotation
//! `M_ICA`. The encoding matrix is `C = M_ICA · V_PCA`; because its rows are
//! orthonormal, dot products between encoded vectors approximate the dot
//! products between the (centered, normalized) originals, and are exact when
//! no components are dropped.

mod ica;
mod pca;

use std::io::Read;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rayon::prelude::*;

use crate::binio::{put_f32s, put_u32, write_file, LeReader};
use crate::error::{Error, Result};

pub use ica::{fast_ica, IcaOutcome};
pub use pca::{top_eigenpairs, PcaBasis};

const MODEL_MAGIC: &[u8; 8] = b"SANN-ENC";
const MODEL_VERSION: u32 = 1;

/// Norm below which a centered point is treated as degenerate.
pub const MIN_NORM: f64 = 1e-12;

/// `M` points of dimension `N`, one point per row.
#[derive(Debug, Clone, PartialEq)]
pub struct RawDataset {
    data: Array2<f32>,
    mean: Option<Array1<f32>>,
}

impl RawDataset {
    pub fn new(data: Array2<f32>) -> Result<Self> {
        if data.ncols() == 0 {
            return Err(Error::Config("dataset has zero dimensions".into()));
        }
        Ok(RawDataset { data, mean: None })
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let n = rows.first().map(Vec::len).unwrap_or(0);
        let mut data = Array2::zeros((rows.len(), n));
        for (i, row) in rows.iter().enumerate() {
            if row.len() != n {
                return Err(Error::DimensionMismatch { expected: n, got: row.len() });
            }
            data.row_mut(i).assign(&ArrayView1::from(row.as_slice()));
        }
        Self::new(data)
    }

    pub fn len(&self) -> usize {
        self.data.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.data.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }

    pub fn data(&self) -> ArrayView2<'_, f32> {
        self.data.view()
    }

    pub fn point(&self, i: usize) -> ArrayView1<'_, f32> {
        self.data.row(i)
    }

    /// Mean used for centering, once [`center_normalize`] has been applied.
    pub fn mean(&self) -> Option<&Array1<f32>> {
        self.mean.as_ref()
    }

    pub fn into_inner(self) -> Array2<f32> {
        self.data
    }

    /// Rows `start..end` as a new dataset (mean is carried along).
    pub fn slice_rows(&self, start: usize, end: usize) -> RawDataset {
        RawDataset { data: self.data.slice(ndarray::s![start..end, ..]).to_owned(), mean: self.mean.clone() }
    }

    /// Copy of the rows at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> RawDataset {
        RawDataset { data: self.data.select(Axis(0), indices), mean: self.mean.clone() }
    }
}

/// Centers every point on `model_mean` (or the sample mean when absent) and
/// scales it to unit L2 norm.
///
/// This is not idempotent: running it again re-centers already centered data.
pub fn center_normalize(points: &RawDataset, model_mean: Option<&Array1<f32>>) -> Result<RawDataset> {
    let n = points.dim();
    let mean = match model_mean {
        Some(m) => {
            if m.len() != n {
                return Err(Error::DimensionMismatch { expected: n, got: m.len() });
            }
            m.clone()
        }
        None => sample_mean(&points.data),
    };
    let mut out = points.data.clone();
    out.axis_iter_mut(Axis(0)).into_par_iter().enumerate().try_for_each(|(i, mut row)| -> Result<()> {
        let norm = row
            .iter()
            .zip(mean.iter())
            .map(|(&x, &m)| {
                let d = x as f64 - m as f64;
                d * d
            })
            .sum::<f64>()
            .sqrt();
        if norm < MIN_NORM {
            return Err(Error::ZeroVector { index: i });
        }
        for (x, &m) in row.iter_mut().zip(mean.iter()) {
            *x = ((*x as f64 - m as f64) / norm) as f32;
        }
        Ok(())
    })?;
    Ok(RawDataset { data: out, mean: Some(mean) })
}

fn sample_mean(data: &Array2<f32>) -> Array1<f32> {
    let m = data.nrows().max(1) as f64;
    let mut acc = vec![0f64; data.ncols()];
    for row in data.rows() {
        for (a, &x) in acc.iter_mut().zip(row.iter()) {
            *a += x as f64;
        }
    }
    acc.into_iter().map(|a| (a / m) as f32).collect()
}

/// Options for [`fit_encoding`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitParams {
    pub n_components: usize,
    /// Skip FastICA and use the identity rotation.
    pub skip_ica: bool,
    pub ica_iters: usize,
    pub ica_tol: f64,
    pub seed: u64,
}

impl FitParams {
    pub fn new(n_components: usize) -> Self {
        FitParams { n_components, skip_ica: false, ica_iters: 200, ica_tol: 1e-4, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncodingModel {
    mean: Array1<f32>,
    v_pca: Array2<f32>,
    singular_values: Array1<f32>,
    m_ica: Array2<f32>,
    c: Array2<f32>,
    ica_iterations: usize,
}

impl EncodingModel {
    /// Builds a model from its stored parts; `C` is recomputed.
    pub fn from_parts(
        mean: Array1<f32>,
        v_pca: Array2<f32>,
        singular_values: Array1<f32>,
        m_ica: Array2<f32>,
    ) -> Result<Self> {
        let (nc, n) = v_pca.dim();
        if mean.len() != n {
            return Err(Error::DimensionMismatch { expected: n, got: mean.len() });
        }
        if singular_values.len() != nc {
            return Err(Error::DimensionMismatch { expected: nc, got: singular_values.len() });
        }
        if m_ica.dim() != (nc, nc) {
            return Err(Error::DimensionMismatch { expected: nc, got: m_ica.nrows() });
        }
        let c = compose(&m_ica, &v_pca);
        Ok(EncodingModel { mean, v_pca, singular_values, m_ica, c, ica_iterations: 0 })
    }

    /// Pass-through encoding for data that is already reduced and sparse.
    pub fn identity(n: usize, mean: Option<Array1<f32>>) -> Self {
        let eye = Array2::eye(n);
        let mean = mean.unwrap_or_else(|| Array1::zeros(n));
        EncodingModel {
            mean,
            v_pca: eye.clone(),
            singular_values: Array1::ones(n),
            m_ica: eye.clone(),
            c: eye,
            ica_iterations: 0,
        }
    }

    pub fn dim(&self) -> usize {
        self.v_pca.ncols()
    }

    pub fn n_components(&self) -> usize {
        self.v_pca.nrows()
    }

    pub fn mean(&self) -> &Array1<f32> {
        &self.mean
    }

    pub fn v_pca(&self) -> &Array2<f32> {
        &self.v_pca
    }

    pub fn singular_values(&self) -> &Array1<f32> {
        &self.singular_values
    }

    pub fn m_ica(&self) -> &Array2<f32> {
        &self.m_ica
    }

    /// The encoding matrix `C` (`N_C × N`).
    pub fn c(&self) -> &Array2<f32> {
        &self.c
    }

    /// FastICA iterations used during fitting (0 when ICA was skipped or the
    /// model was loaded from disk).
    pub fn ica_iterations(&self) -> usize {
        self.ica_iterations
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let (nc, n) = self.v_pca.dim();
        let mut out = Vec::with_capacity(20 + 4 * (n + nc * n + nc + nc * nc));
        out.extend_from_slice(MODEL_MAGIC);
        put_u32(&mut out, MODEL_VERSION);
        put_u32(&mut out, n as u32);
        put_u32(&mut out, nc as u32);
        put_f32s(&mut out, self.mean.iter());
        put_f32s(&mut out, self.v_pca.iter());
        put_f32s(&mut out, self.singular_values.iter());
        put_f32s(&mut out, self.m_ica.iter());
        out
    }

    pub fn from_reader(r: impl Read) -> Result<Self> {
        let mut r = LeReader::new(r);
        r.magic(MODEL_MAGIC)?;
        let at = r.offset();
        let version = r.u32()?;
        if version != MODEL_VERSION {
            return Err(Error::format(at, format!("unsupported model version {version}")));
        }
        let n = r.u32()? as usize;
        let nc = r.u32()? as usize;
        if n == 0 || nc == 0 || nc > n {
            return Err(Error::format(at + 4, format!("invalid shape N={n}, N_C={nc}")));
        }
        let mean = Array1::from(r.f32s(n)?);
        let v_pca = Array2::from_shape_vec((nc, n), r.f32s(nc * n)?).expect("shape checked");
        let sv = Array1::from(r.f32s(nc)?);
        let m_ica = Array2::from_shape_vec((nc, nc), r.f32s(nc * nc)?).expect("shape checked");
        r.at_eof()?;
        Self::from_parts(mean, v_pca, sv, m_ica)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_reader(std::io::BufReader::new(f))
    }
}

/// `C = M_ICA · V_PCA`, accumulated in f64 with a fixed summation order so the
/// result is reproducible bit for bit from the stored factors.
fn compose(m_ica: &Array2<f32>, v_pca: &Array2<f32>) -> Array2<f32> {
    let (nc, n) = v_pca.dim();
    let mut c = Array2::<f32>::zeros((nc, n));
    c.axis_iter_mut(Axis(0)).into_par_iter().enumerate().for_each(|(i, mut out)| {
        let mut acc = vec![0f64; n];
        for (k, &m) in m_ica.row(i).iter().enumerate() {
            if m == 0.0 {
                continue;
            }
            let m = m as f64;
            for (a, &v) in acc.iter_mut().zip(v_pca.row(k).iter()) {
                *a += m * v as f64;
            }
        }
        for (o, a) in out.iter_mut().zip(acc) {
            *o = a as f32;
        }
    });
    c
}

/// Fits PCA (and, unless skipped, symmetric FastICA) on an already centered
/// and normalized sample. The sample's recorded mean becomes the model mean.
pub fn fit_encoding(sample: &RawDataset, params: &FitParams) -> Result<EncodingModel> {
    let (rows, n) = sample.data.dim();
    let nc = params.n_components;
    if nc == 0 || nc > n {
        return Err(Error::Config(format!("n_components must be in 1..={n}, got {nc}")));
    }
    if rows < nc {
        return Err(Error::SampleTooSmall { rows, components: nc });
    }
    let x = sample.data.mapv(|v| v as f64);
    let basis = pca::fit_pca(&x, nc, params.seed)?;

    let (m_ica, iterations) = if params.skip_ica {
        (Array2::<f64>::eye(nc), 0)
    } else {
        // Whitened PCA coordinates: z = sqrt(n) Σ⁻¹ V x, one column per sample.
        let scale = (rows as f64).sqrt();
        let mut z = basis.directions.dot(&x.t());
        for (mut r, &s) in z.axis_iter_mut(Axis(0)).zip(basis.singular_values.iter()) {
            r.mapv_inplace(|v| v * scale / s);
        }
        let out = ica::fast_ica(&z, params.ica_iters, params.ica_tol, params.seed)?;
        (out.unmixing, out.iterations)
    };

    let mean = sample.mean.clone().unwrap_or_else(|| Array1::zeros(n));
    let mut model = EncodingModel::from_parts(
        mean,
        basis.directions.mapv(|v| v as f32),
        basis.singular_values.mapv(|v| v as f32),
        m_ica.mapv(|v| v as f32),
    )?;
    model.ica_iterations = iterations;
    Ok(model)
}

/// A query key in the reduced space (`ẽ`).
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedKey(Array1<f32>);

impl EncodedKey {
    pub fn as_slice(&self) -> &[f32] {
        self.0.as_slice().expect("contiguous")
    }

    pub fn view(&self) -> ArrayView1<'_, f32> {
        self.0.view()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Wraps coordinates that are already in the reduced space, such as a
    /// stored column of `E`.
    pub fn from_reduced(values: Vec<f32>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("encoded key has non-finite values".into()));
        }
        Ok(EncodedKey(Array1::from(values)))
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.0.into_raw_vec()
    }
}

/// `ẽ = C · (key − mean) / ‖key − mean‖`.
pub fn encode_key(model: &EncodingModel, key: ArrayView1<'_, f32>) -> Result<EncodedKey> {
    if key.len() != model.dim() {
        return Err(Error::DimensionMismatch { expected: model.dim(), got: key.len() });
    }
    let diff: Vec<f64> = key.iter().zip(model.mean.iter()).map(|(&k, &m)| k as f64 - m as f64).collect();
    let norm = diff.iter().map(|d| d * d).sum::<f64>().sqrt();
    if norm < MIN_NORM {
        return Err(Error::ZeroVector { index: 0 });
    }
    let centered: Array1<f32> = diff.into_iter().map(|d| (d / norm) as f32).collect();
    let e = model.c.dot(&centered);
    if e.iter().any(|v| !v.is_finite()) {
        return Err(Error::Linalg("non-finite encoded key".into()));
    }
    Ok(EncodedKey(e))
}

/// The dataset in reduced coordinates. Stored pattern-major (`M × N_C`), so
/// [`EncodedDataset::column`] is contiguous; [`EncodedDataset::matrix`] gives
/// the `N_C × M` view.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedDataset {
    patterns: Array2<f32>,
}

impl EncodedDataset {
    pub fn from_patterns(patterns: Array2<f32>) -> Self {
        EncodedDataset { patterns }
    }

    pub fn len(&self) -> usize {
        self.patterns.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.patterns.nrows() == 0
    }

    pub fn n_components(&self) -> usize {
        self.patterns.ncols()
    }

    /// Column `j` of `E`.
    pub fn column(&self, j: usize) -> ArrayView1<'_, f32> {
        self.patterns.row(j)
    }

    /// `E` as an `N_C × M` view.
    pub fn matrix(&self) -> ArrayView2<'_, f32> {
        self.patterns.t()
    }

    pub fn patterns(&self) -> ArrayView2<'_, f32> {
        self.patterns.view()
    }

    pub fn into_patterns(self) -> Array2<f32> {
        self.patterns
    }

    /// `Eᵀ ẽ`.
    pub fn scores(&self, key: &EncodedKey) -> Array1<f32> {
        self.patterns.dot(&key.0)
    }
}

/// `E = C D` for a raw (not yet centered) dataset, using the model mean.
pub fn encode_dataset(model: &EncodingModel, data: &RawDataset) -> Result<EncodedDataset> {
    if data.dim() != model.dim() {
        return Err(Error::DimensionMismatch { expected: model.dim(), got: data.dim() });
    }
    let normalized = center_normalize(data, Some(&model.mean))?;
    Ok(encode_normalized(model, normalized.data.view()))
}

/// `E = C D` for rows that are already centered and normalized.
pub fn encode_normalized(model: &EncodingModel, rows: ArrayView2<'_, f32>) -> EncodedDataset {
    EncodedDataset { patterns: rows.dot(&model.c.t()) }
}

/// Sample excess kurtosis of each row of `coords` (rows are coordinates,
/// columns are samples).
pub fn excess_kurtosis(coords: ArrayView2<'_, f64>) -> Array1<f64> {
    coords
        .rows()
        .into_iter()
        .map(|r| {
            let n = r.len() as f64;
            let mean = r.sum() / n;
            let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let m4 = r.iter().map(|v| (v - mean).powi(4)).sum::<f64>() / n;
            m4 / (var * var) - 3.0
        })
        .collect()
}
