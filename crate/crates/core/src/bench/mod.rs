//! Exact ground truth, recall metrics, dataset ingestion and benchmark
//! reports.
//!
//! Distances are `1 - cos`, computed on centered, unit-norm full-precision
//! data. Ground-truth ties are broken by ascending id.

mod formats;
pub mod synth;

pub use formats::{load_dataset, raw_header, write_dataset, DataFormat};

use std::io::Write;
use std::path::Path;

use ndarray::{Array1, ArrayView1, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoding::{center_normalize, RawDataset};
use crate::error::{Error, Result};
use crate::search::{Index, QueryResult};

/// True top-`k` for one query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub ids: Vec<u64>,
    pub distances: Vec<f64>,
}

impl GroundTruth {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// First `k` entries; valid because ordering is total.
    pub fn prefix(&self, k: usize) -> GroundTruth {
        let k = k.min(self.ids.len());
        GroundTruth { ids: self.ids[..k].to_vec(), distances: self.distances[..k].to_vec() }
    }
}

fn dot64(a: ArrayView1<'_, f32>, b: ArrayView1<'_, f32>) -> f64 {
    a.iter().zip(b.iter()).map(|(&x, &y)| x as f64 * y as f64).sum()
}

/// Cosine distances from `key` to every row of unit-norm `data`.
pub fn distances(data: ArrayView2<'_, f32>, key: ArrayView1<'_, f32>) -> Vec<f64> {
    let norm = dot64(key, key).sqrt();
    let inv = if norm > 0.0 { 1.0 / norm } else { 0.0 };
    data.outer_iter().into_par_iter().map(|row| (1.0 - dot64(row, key) * inv).max(0.0)).collect()
}

/// Top-`k` rows of unit-norm `data` by cosine similarity to `key`.
pub fn exact_knn(data: ArrayView2<'_, f32>, key: ArrayView1<'_, f32>, k: usize) -> GroundTruth {
    let dist = distances(data, key);
    let mut order: Vec<u32> = (0..dist.len() as u32).collect();
    let cmp = |a: &u32, b: &u32| dist[*a as usize].total_cmp(&dist[*b as usize]).then(a.cmp(b));
    let k = k.min(order.len());
    if k == 0 {
        return GroundTruth { ids: vec![], distances: vec![] };
    }
    if k < order.len() {
        order.select_nth_unstable_by(k - 1, cmp);
        order.truncate(k);
    }
    order.sort_unstable_by(cmp);
    GroundTruth {
        ids: order.iter().map(|&i| i as u64).collect(),
        distances: order.iter().map(|&i| dist[i as usize]).collect(),
    }
}

/// Fraction of `k = truth.len()` slots filled by a returned point no further
/// than `(1 + epsilon)` times the k-th true distance. Missing entries count
/// as misses.
pub fn recall_at(returned_distances: &[f64], truth: &GroundTruth, epsilon: f64) -> f64 {
    let k = truth.len();
    if k == 0 {
        return 0.0;
    }
    let bound = (1.0 + epsilon) * truth.distances[k - 1];
    let hits = returned_distances.iter().take(k).filter(|&&d| d <= bound).count();
    hits as f64 / k as f64
}

/// Full-precision reference over a dataset, normalized with a fixed mean.
#[derive(Debug, Clone)]
pub struct Oracle {
    normalized: RawDataset,
    mean: Array1<f32>,
}

impl Oracle {
    pub fn new(raw: &RawDataset, mean: &Array1<f32>) -> Result<Self> {
        Ok(Oracle { normalized: center_normalize(raw, Some(mean))?, mean: mean.clone() })
    }

    pub fn len(&self) -> usize {
        self.normalized.len()
    }

    pub fn is_empty(&self) -> bool {
        self.normalized.is_empty()
    }

    pub fn normalized(&self) -> &RawDataset {
        &self.normalized
    }

    /// Centers a raw key the same way as the data.
    pub fn center(&self, key: ArrayView1<'_, f32>) -> Array1<f32> {
        &key - &self.mean
    }

    pub fn knn(&self, key: ArrayView1<'_, f32>, k: usize) -> GroundTruth {
        exact_knn(self.normalized.data(), self.center(key).view(), k)
    }

    /// Cosine distances from a raw key to the given ids.
    pub fn distances_to(&self, key: ArrayView1<'_, f32>, ids: &[u64]) -> Vec<f64> {
        let c = self.center(key);
        let norm = dot64(c.view(), c.view()).sqrt();
        let inv = if norm > 0.0 { 1.0 / norm } else { 0.0 };
        ids.iter().map(|&id| (1.0 - dot64(self.normalized.point(id as usize), c.view()) * inv).max(0.0)).collect()
    }
}

/// Noisy copies of stored points whose clean original is still the exact
/// nearest neighbor. Noise is Gaussian with `sigma_factor` times each
/// dimension's standard deviation; failed draws are resampled.
pub fn noisy_self_queries(
    raw: &RawDataset,
    oracle: &Oracle,
    count: usize,
    sigma_factor: f64,
    seed: u64,
) -> Result<(RawDataset, Vec<u64>)> {
    if raw.is_empty() {
        return Err(Error::SampleTooSmall { rows: 0, components: 1 });
    }
    let std = per_dimension_std(raw);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(count);
    let mut ids = Vec::with_capacity(count);
    const ATTEMPTS: usize = 64;
    while rows.len() < count {
        let id = rng.gen_range(0..raw.len());
        let clean = raw.point(id);
        for _ in 0..ATTEMPTS {
            let noisy: Vec<f32> = clean
                .iter()
                .zip(std.iter())
                .map(|(&x, &s)| x + (sigma_factor * s * rng.sample::<f64, _>(StandardNormal)) as f32)
                .collect();
            if oracle.knn(ArrayView1::from(noisy.as_slice()), 1).ids == [id as u64] {
                rows.push(noisy);
                ids.push(id as u64);
                break;
            }
        }
    }
    Ok((RawDataset::from_rows(&rows)?, ids))
}

pub fn per_dimension_std(raw: &RawDataset) -> Vec<f64> {
    let m = raw.len().max(1) as f64;
    (0..raw.dim())
        .into_par_iter()
        .map(|d| {
            let col = raw.data().column(d).to_owned();
            let mean = col.iter().map(|&v| v as f64).sum::<f64>() / m;
            (col.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / m).sqrt()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallRow {
    pub k: usize,
    pub epsilon: f64,
    pub recall: f64,
}

/// Latency and traffic statistics over all queries for one `k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyRow {
    pub k: usize,
    pub starved: usize,
    pub median_first_timestep: f64,
    pub median_kth_timestep: f64,
    pub mean_mesh_timesteps: f64,
    pub mean_modeled_us: f64,
    pub median_modeled_us: f64,
    pub max_modeled_us: f64,
    pub mean_spikes_in: f64,
    pub mean_spikes_out: f64,
    pub mean_input_spikes: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub n_points: usize,
    pub n_queries: usize,
    pub build_seconds: f64,
    pub index_bytes: u64,
    pub recall: Vec<RecallRow>,
    pub latency: Vec<LatencyRow>,
}

impl BenchReport {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_vec_pretty(self)?;
        text.push(b'\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// One row per `(k, epsilon)` with recall, modeled latency, build time
    /// and index size.
    pub fn write_csv(&self, mut out: impl Write) -> std::io::Result<()> {
        writeln!(out, "k,epsilon,recall,query_latency_ms,index_build_time_s,index_size_kb")?;
        for r in &self.recall {
            let latency = self.latency.iter().find(|l| l.k == r.k).map(|l| l.mean_modeled_us / 1e3).unwrap_or(f64::NAN);
            writeln!(
                out,
                "{},{},{:.4},{:.4},{:.3},{:.1}",
                r.k,
                r.epsilon,
                r.recall,
                latency,
                self.build_seconds,
                self.index_bytes as f64 / 1024.0
            )?;
        }
        Ok(())
    }
}

pub fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.sort_unstable_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

fn mean(values: impl ExactSizeIterator<Item = f64>) -> f64 {
    let n = values.len();
    if n == 0 {
        return f64::NAN;
    }
    values.sum::<f64>() / n as f64
}

/// Per-query outputs kept for analysis.
#[derive(Debug, Clone)]
pub struct QueryRecord {
    pub k: usize,
    pub result: QueryResult,
    pub starved: bool,
    pub truth: GroundTruth,
    pub returned_distances: Vec<f64>,
}

/// Runs every query at every `k` and scores it against the oracle.
pub fn run_bench(
    index: &mut Index,
    oracle: &Oracle,
    queries: &RawDataset,
    ks: &[usize],
    epsilons: &[f64],
) -> Result<(BenchReport, Vec<QueryRecord>)> {
    let mut report = BenchReport {
        n_points: index.len(),
        n_queries: queries.len(),
        build_seconds: index.manifest().build_seconds,
        ..BenchReport::default()
    };
    if queries.is_empty() || ks.is_empty() {
        return Ok((report, Vec::new()));
    }
    let k_max = *ks.iter().max().expect("nonempty");
    let truths: Vec<GroundTruth> =
        (0..queries.len()).into_par_iter().map(|q| oracle.knn(queries.point(q), k_max)).collect();

    let mut records = Vec::new();
    for &k in ks {
        for (q, truth) in truths.iter().enumerate() {
            let outcome = index.query_traced(queries.point(q), k)?;
            let starved = outcome.is_starved();
            let returned_distances = oracle.distances_to(queries.point(q), &outcome.result.ids);
            records.push(QueryRecord {
                k,
                result: outcome.result,
                starved,
                truth: truth.prefix(k),
                returned_distances,
            });
        }
    }
    for &k in ks {
        let rs: Vec<&QueryRecord> = records.iter().filter(|r| r.k == k).collect();
        for &eps in epsilons {
            let recall = mean(
                rs.iter().map(|r| recall_at(&r.returned_distances, &r.truth, eps)).collect::<Vec<_>>().into_iter(),
            );
            report.recall.push(RecallRow { k, epsilon: eps, recall });
        }
        let answered: Vec<&&QueryRecord> = rs.iter().filter(|r| !r.result.ids.is_empty()).collect();
        let mut first: Vec<f64> = answered.iter().map(|r| r.result.timesteps[0] as f64).collect();
        let mut kth: Vec<f64> = answered.iter().map(|r| *r.result.timesteps.last().expect("nonempty") as f64).collect();
        let mut modeled: Vec<f64> = rs.iter().map(|r| r.result.trace.modeled_us).collect();
        report.latency.push(LatencyRow {
            k,
            starved: rs.iter().filter(|r| r.starved).count(),
            median_first_timestep: median(&mut first),
            median_kth_timestep: median(&mut kth),
            mean_mesh_timesteps: mean(rs.iter().map(|r| r.result.trace.timesteps as f64)),
            mean_modeled_us: mean(modeled.iter().copied()),
            median_modeled_us: median(&mut modeled),
            max_modeled_us: modeled.iter().copied().fold(f64::NAN, f64::max),
            mean_spikes_in: mean(rs.iter().map(|r| r.result.trace.spikes_in as f64)),
            mean_spikes_out: mean(rs.iter().map(|r| r.result.trace.spikes_out as f64)),
            mean_input_spikes: mean(rs.iter().map(|r| r.result.trace.input_spikes as f64)),
        });
    }
    Ok((report, records))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};
    use proptest::prelude::*;
    use rand::Rng;

    fn unit_rows(m: usize, n: usize, seed: u64) -> Array2<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut a = Array2::from_shape_fn((m, n), |_| rng.sample::<f32, _>(StandardNormal));
        for mut row in a.rows_mut() {
            let norm = row.dot(&row).sqrt();
            row /= norm;
        }
        a
    }

    #[test]
    fn stored_point_is_its_own_nearest() {
        let data = unit_rows(50, 8, 1);
        let t = exact_knn(data.view(), data.row(13), 3);
        assert_eq!(t.ids[0], 13);
        assert!(t.distances[0].abs() < 1e-6);
        assert!(t.distances.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn orthonormal_points() {
        let data = array![[1.0f32, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        assert_eq!(exact_knn(data.view(), data.row(1), 1).ids, vec![1]);
        // Equal distances fall back to id order.
        assert_eq!(exact_knn(data.view(), data.row(1), 3).ids, vec![1, 0, 2]);
    }

    #[test]
    fn matches_a_plain_loop() {
        let data = unit_rows(300, 16, 2);
        let keys = unit_rows(20, 16, 3);
        for key in keys.rows() {
            let mut scored: Vec<(f64, u64)> = Vec::new();
            for i in 0..data.nrows() {
                let mut s = 0.0f64;
                for d in 0..16 {
                    s += data[[i, d]] as f64 * key[d] as f64;
                }
                scored.push((1.0 - s, i as u64));
            }
            scored.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
            let want: Vec<u64> = scored.iter().take(10).map(|s| s.1).collect();
            assert_eq!(exact_knn(data.view(), key, 10).ids, want);
        }
    }

    #[test]
    fn recall_arithmetic() {
        let truth = GroundTruth { ids: vec![1, 2], distances: vec![0.10, 0.20] };
        assert_eq!(recall_at(&[0.10, 0.21], &truth, 0.05), 1.0);
        assert_eq!(recall_at(&[0.10, 0.21], &truth, 0.0), 0.5);
        assert_eq!(recall_at(&truth.distances, &truth, 0.0), 1.0);
        assert_eq!(recall_at(&[0.5, 0.6], &truth, 0.1), 0.0);
        // A starved answer scores its missing slots as misses.
        assert_eq!(recall_at(&[0.10], &truth, 0.0), 0.5);
    }

    #[test]
    fn median_of_even_count_averages() {
        assert_eq!(median(&mut [4.0, 1.0, 3.0, 2.0]), 2.5);
        assert!(median(&mut []).is_nan());
    }

    #[test]
    fn noisy_queries_keep_their_origin_as_nearest() {
        let raw = RawDataset::new(unit_rows(200, 12, 4) * 3.0).unwrap();
        let mean = Array1::zeros(12);
        let oracle = Oracle::new(&raw, &mean).unwrap();
        let (queries, ids) = noisy_self_queries(&raw, &oracle, 25, 0.1, 7).unwrap();
        assert_eq!(queries.len(), 25);
        for (q, id) in ids.iter().enumerate() {
            assert_eq!(oracle.knn(queries.point(q), 1).ids, vec![*id]);
            assert_ne!(queries.point(q), raw.point(*id as usize));
        }
    }

    #[test]
    fn csv_mirrors_recall_rows() {
        let report = BenchReport {
            n_points: 10,
            n_queries: 0,
            build_seconds: 1.5,
            index_bytes: 2048,
            recall: vec![RecallRow { k: 1, epsilon: 0.0, recall: 1.0 }],
            latency: vec![],
        };
        let mut out = Vec::new();
        report.write_csv(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert!(text.lines().nth(1).unwrap().starts_with("1,0,1.0000,NaN,1.500,2.0"));
    }

    proptest! {
        #[test]
        fn recall_grows_with_epsilon(d in prop::collection::vec(0.0f64..2.0, 1..20), r in prop::collection::vec(0.0f64..2.0, 0..20), e1 in 0.0f64..1.0, e2 in 0.0f64..1.0) {
            let mut d = d;
            d.sort_by(f64::total_cmp);
            let truth = GroundTruth { ids: (0..d.len() as u64).collect(), distances: d };
            let (lo, hi) = if e1 <= e2 { (e1, e2) } else { (e2, e1) };
            let a = recall_at(&r, &truth, lo);
            let b = recall_at(&r, &truth, hi);
            prop_assert!(a <= b);
            prop_assert!((0.0..=1.0).contains(&a));
        }

        #[test]
        fn knn_ignores_positive_key_scale(seed in 0u64..1000, c in prop::sample::select(vec![0.5f32, 2.0, 8.0, 1024.0])) {
            let data = unit_rows(60, 6, seed);
            let key = unit_rows(1, 6, seed + 1).row(0).to_owned();
            let scaled = &key * c;
            prop_assert_eq!(exact_knn(data.view(), key.view(), 5).ids, exact_knn(data.view(), scaled.view(), 5).ids);
        }
    }
}
