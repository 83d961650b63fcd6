//! On-disk index: build, program onto a mesh, query and insert.
//!
//! An index directory holds `manifest.json`, a copy of the encoding model
//! (`model.enc`) and, for every chip, its weight file (`chip_NNNNN.chp`) and
//! the float encoded patterns used for exact tie-breaking (`chip_NNNNN.emb`).

use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{Array2, ArrayView1};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::binio::{put_f32s, put_u32, sha256_hex, write_file, LeReader};
use crate::config::{IndexConfig, ThetaV};
use crate::encoding::{center_normalize, encode_key, encode_normalized, EncodedKey, EncodingModel, RawDataset};
use crate::error::{Error, Result};
use crate::mesh::{Mesh, MeshTopology, TimestepTrace};
use crate::neurocore::{chip_threshold, ChipStore};
use crate::spikecodec::{encode_spikes, spike_count, SpikePattern};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MODEL_FILE: &str = "model.enc";
const MANIFEST_VERSION: u32 = 1;
const EMB_MAGIC: &[u8; 8] = b"SANN-EMB";
const EMB_VERSION: u32 = 1;

/// Anything that can hand out contiguous row ranges of raw points.
pub trait PointSource: Sync {
    fn len(&self) -> usize;
    fn dim(&self) -> usize;
    /// Rows `start..end`, not yet centered.
    fn rows(&self, start: usize, end: usize) -> Result<RawDataset>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl PointSource for RawDataset {
    fn len(&self) -> usize {
        RawDataset::len(self)
    }

    fn dim(&self) -> usize {
        RawDataset::dim(self)
    }

    fn rows(&self, start: usize, end: usize) -> Result<RawDataset> {
        Ok(self.slice_rows(start, end))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChipEntry {
    pub weights_file: String,
    pub weights_sha256: String,
    pub patterns_file: String,
    pub patterns_sha256: String,
    pub occupied: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexManifest {
    pub version: u32,
    pub model_file: String,
    pub model_sha256: String,
    /// Number of stored points `M`; global ids are `0..M`.
    pub n_points: usize,
    pub n_dims: usize,
    pub n_components: usize,
    pub config: IndexConfig,
    pub chips: Vec<ChipEntry>,
    pub build_seconds: f64,
    /// Where the raw data came from, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data_path: Option<String>,
    /// `assignment[global_id] = (chip, slot)`; rebuilt from chip files.
    #[serde(skip)]
    assignment: Vec<(u32, u32)>,
}

impl IndexManifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_slice(&text)?)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let mut text = serde_json::to_vec_pretty(self)?;
        text.push(b'\n');
        write_file(&dir.join(MANIFEST_FILE), &text)
    }

    /// `(chip, slot)` storing `global_id`.
    pub fn locate(&self, global_id: u64) -> Option<(usize, usize)> {
        self.assignment.get(global_id as usize).map(|&(c, s)| (c as usize, s as usize))
    }

    /// Total size of chip weight files in bytes.
    pub fn weight_bytes(&self, dir: &Path) -> u64 {
        self.chips.iter().filter_map(|c| std::fs::metadata(dir.join(&c.weights_file)).ok()).map(|m| m.len()).sum()
    }

    fn rebuild_assignment(&mut self, chips: &[ChipStore]) -> Result<()> {
        let mut assignment = vec![(u32::MAX, u32::MAX); self.n_points];
        for (c, chip) in chips.iter().enumerate() {
            for (s, &id) in chip.global_ids().iter().enumerate() {
                let slot = assignment
                    .get_mut(id as usize)
                    .ok_or_else(|| Error::Config(format!("chip {c} stores id {id} beyond {}", self.n_points)))?;
                if slot.0 != u32::MAX {
                    return Err(Error::Config(format!("id {id} stored twice")));
                }
                *slot = (c as u32, s as u32);
            }
        }
        if let Some(missing) = assignment.iter().position(|a| a.0 == u32::MAX) {
            return Err(Error::Config(format!("id {missing} is not stored on any chip")));
        }
        self.assignment = assignment;
        Ok(())
    }
}

fn chip_file_names(c: usize) -> (String, String) {
    (format!("chip_{c:05}.chp"), format!("chip_{c:05}.emb"))
}

fn patterns_to_bytes(n_components: usize, patterns: &[f32]) -> Vec<u8> {
    let occupied = patterns.len() / n_components.max(1);
    let mut out = Vec::with_capacity(20 + 4 * patterns.len());
    out.extend_from_slice(EMB_MAGIC);
    put_u32(&mut out, EMB_VERSION);
    put_u32(&mut out, n_components as u32);
    put_u32(&mut out, occupied as u32);
    put_f32s(&mut out, patterns.iter());
    out
}

fn patterns_from_bytes(bytes: &[u8]) -> Result<(usize, Vec<f32>)> {
    let mut r = LeReader::new(bytes);
    r.magic(EMB_MAGIC)?;
    let at = r.offset();
    let version = r.u32()?;
    if version != EMB_VERSION {
        return Err(Error::format(at, format!("unsupported pattern file version {version}")));
    }
    let nc = r.u32()? as usize;
    let occupied = r.u32()? as usize;
    let values = r.f32s(nc * occupied)?;
    r.at_eof()?;
    Ok((nc, values))
}

fn read_verified(path: &Path, sha256: &str) -> Result<Vec<u8>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if sha256_hex(&bytes) != sha256 {
        return Err(Error::ChecksumMismatch { path: path.to_path_buf() });
    }
    Ok(bytes)
}

/// Encodes `source` chip by chip, quantizes and writes every chip's files
/// plus the manifest into `out_dir`.
pub fn build_index(
    source: &dyn PointSource,
    model: &EncodingModel,
    config: &IndexConfig,
    out_dir: &Path,
) -> Result<IndexManifest> {
    let started = Instant::now();
    config.validate(model.n_components())?;
    if source.dim() != model.dim() {
        return Err(Error::DimensionMismatch { expected: model.dim(), got: source.dim() });
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let model_bytes = model.to_bytes();
    write_file(&out_dir.join(MODEL_FILE), &model_bytes)?;

    let m = source.len();
    let cap = config.capacity;
    let n_chips = m.div_ceil(cap);
    let quant = config.quant();
    let nc = model.n_components();
    let chips: Vec<ChipEntry> = (0..n_chips)
        .into_par_iter()
        .map(|c| -> Result<ChipEntry> {
            let start = c * cap;
            let end = (start + cap).min(m);
            let raw = source.rows(start, end)?;
            let normalized = center_normalize(&raw, Some(model.mean())).map_err(|e| match e {
                Error::ZeroVector { index } => Error::ZeroVector { index: start + index },
                other => other,
            })?;
            let encoded = encode_normalized(model, normalized.data());
            let ids: Vec<u64> = (start as u64..end as u64).collect();
            let chip = ChipStore::program(encoded.patterns(), &ids, cap, quant)?;
            let (wname, pname) = chip_file_names(c);
            let wbytes = chip.to_bytes();
            let pbytes = patterns_to_bytes(nc, encoded.patterns().as_slice().expect("standard layout"));
            write_file(&out_dir.join(&wname), &wbytes)?;
            write_file(&out_dir.join(&pname), &pbytes)?;
            Ok(ChipEntry {
                weights_file: wname,
                weights_sha256: sha256_hex(&wbytes),
                patterns_file: pname,
                patterns_sha256: sha256_hex(&pbytes),
                occupied: end - start,
            })
        })
        .collect::<Result<_>>()?;

    let manifest = IndexManifest {
        version: MANIFEST_VERSION,
        model_file: MODEL_FILE.into(),
        model_sha256: sha256_hex(&model_bytes),
        n_points: m,
        n_dims: model.dim(),
        n_components: nc,
        config: config.clone(),
        chips,
        build_seconds: started.elapsed().as_secs_f64(),
        data_path: None,
        assignment: Vec::new(),
    };
    manifest.save(out_dir)?;
    log::info!("built {} chips for {m} points in {:.2}s", manifest.chips.len(), manifest.build_seconds);
    Ok(manifest)
}

/// Per-query timing and traffic.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TraceSummary {
    pub timesteps: usize,
    pub modeled_us: f64,
    pub spikes_in: u64,
    pub spikes_out: u64,
    /// Spikes in the query pattern itself.
    pub input_spikes: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    pub ids: Vec<u64>,
    /// Exact `E`-space dot products of the returned ids with the key.
    pub scores: Vec<f32>,
    /// Normalized match timesteps.
    pub timesteps: Vec<u32>,
    /// Size of the tie group that straddled position `k` (0 if none).
    pub tie_group: usize,
    pub trace: TraceSummary,
}

/// Everything a query produced, including traffic details.
#[derive(Debug, Clone)]
pub struct QueryOutcome {
    pub result: QueryResult,
    pub requested: usize,
    pub pattern: SpikePattern,
    pub trace: TimestepTrace,
}

impl QueryOutcome {
    pub fn is_starved(&self) -> bool {
        self.result.ids.len() < self.requested
    }

    pub fn into_result(self) -> Result<QueryResult> {
        if self.is_starved() {
            Err(Error::Starved {
                found: self.result.ids.len(),
                requested: self.requested,
                partial: Box::new(self.result),
            })
        } else {
            Ok(self.result)
        }
    }
}

/// A programmed, queryable index.
#[derive(Debug)]
pub struct Index {
    dir: Option<PathBuf>,
    manifest: IndexManifest,
    model: EncodingModel,
    mesh: Mesh,
    /// Encoded patterns per chip, `occupied × N_C` row-major.
    patterns: Vec<Vec<f32>>,
    threshold: f64,
    t_max: u32,
    /// Chips before this one are full.
    next_free: usize,
    dirty: Vec<bool>,
}

/// Loads and verifies every chip of `manifest` from `dir` onto `topology`.
/// Returns the mesh (with `theta_v` resolved), the tie-break patterns and the
/// scale-free threshold.
pub fn program_mesh(
    manifest: &IndexManifest,
    dir: &Path,
    topology: &MeshTopology,
    workers: usize,
) -> Result<(Mesh, Vec<Vec<f32>>, f64)> {
    let cfg = &manifest.config;
    let available = topology.n_chips() * cfg.capacity;
    if manifest.n_points > available || manifest.chips.len() > topology.n_chips() {
        return Err(Error::CapacityExceeded { needed: manifest.n_points, available });
    }
    let quant = cfg.quant();
    let loaded: Vec<(ChipStore, Vec<f32>)> = manifest
        .chips
        .par_iter()
        .map(|entry| -> Result<(ChipStore, Vec<f32>)> {
            let wpath = dir.join(&entry.weights_file);
            let chip = ChipStore::from_reader(read_verified(&wpath, &entry.weights_sha256)?.as_slice(), quant)?;
            let ppath = dir.join(&entry.patterns_file);
            let (nc, mut pats) = patterns_from_bytes(&read_verified(&ppath, &entry.patterns_sha256)?)?;
            if nc != manifest.n_components || chip.n_components() != nc || pats.len() != nc * chip.occupied() {
                return Err(Error::Config(format!("chip files {} disagree on shape", entry.weights_file)));
            }
            pats.reserve(nc * (chip.capacity() - chip.occupied()));
            Ok((chip, pats))
        })
        .collect::<Result<_>>()?;
    let (chips, patterns): (Vec<_>, Vec<_>) = loaded.into_iter().unzip();
    let mut mesh = Mesh::new(*topology, chips, cfg.codec(), cfg.cost_for(manifest.n_points), workers)?;

    let threshold = match cfg.theta_v {
        ThetaV::Fixed(v) => v,
        ThetaV::Auto => {
            let (keys, ids) = calibration_keys(manifest, mesh.chips(), &patterns, cfg.calibration_keys, cfg.seed)?;
            mesh.tune_threshold_excluding(&keys, &ids, cfg.calibration_target())?.value
        }
    };
    mesh.set_threshold(threshold);
    Ok((mesh, patterns, threshold))
}

/// Stored patterns sampled as calibration keys, each paired with its own id
/// so that its self-match can be left out.
fn calibration_keys(
    manifest: &IndexManifest,
    chips: &[ChipStore],
    patterns: &[Vec<f32>],
    count: usize,
    seed: u64,
) -> Result<(Vec<EncodedKey>, Vec<Option<u64>>)> {
    let nc = manifest.n_components;
    let all: Vec<(&[f32], u64)> =
        patterns.iter().zip(chips).flat_map(|(p, c)| p.chunks_exact(nc).zip(c.global_ids().iter().copied())).collect();
    if all.is_empty() {
        return Err(Error::NoActivity);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picks = sample(&mut rng, all.len(), count.min(all.len())).into_vec();
    picks.sort_unstable();
    let mut keys = Vec::with_capacity(picks.len());
    let mut ids = Vec::with_capacity(picks.len());
    for i in picks {
        keys.push(EncodedKey::from_reduced(all[i].0.to_vec())?);
        ids.push(Some(all[i].1));
    }
    Ok((keys, ids))
}

impl Index {
    /// Opens and programs the index in `dir` using its stored configuration.
    pub fn open(dir: &Path) -> Result<Self> {
        let manifest = IndexManifest::load(dir)?;
        let topology = manifest.config.topology();
        let workers = manifest.config.workers;
        Self::open_with(dir, manifest, &topology, workers)
    }

    /// Like [`Index::open`] with an explicit topology and worker count.
    pub fn open_with(dir: &Path, mut manifest: IndexManifest, topology: &MeshTopology, workers: usize) -> Result<Self> {
        let model_path = dir.join(&manifest.model_file);
        let model_bytes = read_verified(&model_path, &manifest.model_sha256)?;
        let model = EncodingModel::from_reader(model_bytes.as_slice())?;
        if model.n_components() != manifest.n_components || model.dim() != manifest.n_dims {
            return Err(Error::Config("model shape disagrees with manifest".into()));
        }
        let (mesh, patterns, threshold) = program_mesh(&manifest, dir, topology, workers)?;
        manifest.rebuild_assignment(mesh.chips())?;
        let t_max = manifest.config.t_max();
        let next_free = mesh.chips().iter().position(|c| !c.is_full()).unwrap_or(mesh.chips().len());
        let dirty = vec![false; mesh.chips().len()];
        Ok(Index { dir: Some(dir.to_path_buf()), manifest, model, mesh, patterns, threshold, t_max, next_free, dirty })
    }

    pub fn manifest(&self) -> &IndexManifest {
        &self.manifest
    }

    pub fn model(&self) -> &EncodingModel {
        &self.model
    }

    pub fn mesh(&self) -> &Mesh {
        &self.mesh
    }

    pub fn mesh_mut(&mut self) -> &mut Mesh {
        &mut self.mesh
    }

    pub fn len(&self) -> usize {
        self.manifest.n_points
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.n_points == 0
    }

    /// Scale-free firing threshold in use.
    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn set_threshold(&mut self, value: f64) {
        self.threshold = value;
        self.mesh.set_threshold(value);
    }

    pub fn t_max(&self) -> u32 {
        self.t_max
    }

    pub fn set_t_max(&mut self, t_max: u32) {
        self.t_max = t_max;
    }

    /// Stored encoded pattern for `global_id`.
    pub fn encoded(&self, global_id: u64) -> Option<&[f32]> {
        let nc = self.manifest.n_components;
        let (c, s) = self.manifest.locate(global_id)?;
        Some(&self.patterns[c][s * nc..(s + 1) * nc])
    }

    /// Exact reduced-space score of `global_id` against an encoded key.
    pub fn exact_score(&self, key: &EncodedKey, global_id: u64) -> f32 {
        self.encoded(global_id)
            .map(|p| p.iter().zip(key.as_slice()).map(|(a, b)| a * b).sum())
            .unwrap_or(f32::NEG_INFINITY)
    }

    /// Top-`k` query. Fewer than `k` matches yields [`Error::Starved`] with
    /// the partial result attached.
    pub fn query(&mut self, key: ArrayView1<'_, f32>, k: usize) -> Result<QueryResult> {
        self.query_traced(key, k)?.into_result()
    }

    /// Runs a query and returns the pattern and full trace alongside the
    /// result. Starvation is reported through [`QueryOutcome::is_starved`].
    pub fn query_traced(&mut self, key: ArrayView1<'_, f32>, k: usize) -> Result<QueryOutcome> {
        let encoded = encode_key(&self.model, key)?;
        self.query_encoded(&encoded, k)
    }

    pub fn query_encoded(&mut self, encoded: &EncodedKey, k: usize) -> Result<QueryOutcome> {
        if k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        let pattern = encode_spikes(encoded, self.mesh.codec())?;
        let run = self.mesh.run_query(&pattern, k, self.t_max)?;
        let events = run.merged.events();

        // Exact scores order every tie group; the group straddling position
        // k is cut to the k' best.
        let mut picked: Vec<(u64, f32, u32)> = Vec::with_capacity(k.min(events.len()));
        let mut tie_group = 0;
        let mut i = 0;
        while i < events.len() && picked.len() < k {
            let t = events[i].normalized_timestep;
            let end = i + events[i..].iter().take_while(|e| e.normalized_timestep == t).count();
            let mut group: Vec<(u64, f32, u32)> =
                events[i..end].iter().map(|e| (e.global_id, self.exact_score(encoded, e.global_id), t)).collect();
            group.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            let room = k - picked.len();
            if group.len() > room {
                tie_group = group.len();
                group.truncate(room);
            }
            picked.extend(group);
            i = end;
        }

        let result = QueryResult {
            ids: picked.iter().map(|p| p.0).collect(),
            scores: picked.iter().map(|p| p.1).collect(),
            timesteps: picked.iter().map(|p| p.2).collect(),
            tie_group,
            trace: TraceSummary {
                timesteps: run.trace.len(),
                modeled_us: run.trace.modeled_us(),
                spikes_in: run.trace.spikes_in(),
                spikes_out: run.trace.spikes_out(),
                input_spikes: spike_count(&pattern),
            },
        };
        Ok(QueryOutcome { result, requested: k, pattern, trace: run.trace })
    }

    /// Stores a new raw point on the first chip with a free slot (opening a
    /// new chip if the mesh has room) and returns its global id. Cost does not
    /// depend on the number of stored points.
    pub fn insert(&mut self, point: ArrayView1<'_, f32>) -> Result<u64> {
        let encoded = encode_key(&self.model, point)?;
        let nc = self.manifest.n_components;
        while self.next_free < self.mesh.chips().len() && self.mesh.chips()[self.next_free].is_full() {
            self.next_free += 1;
        }
        let cfg = &self.manifest.config;
        if self.next_free == self.mesh.chips().len() {
            if self.mesh.chips().len() == self.mesh.topology().n_chips() {
                let available = self.mesh.topology().n_chips() * cfg.capacity;
                return Err(Error::CapacityExceeded { needed: self.manifest.n_points + 1, available });
            }
            let chip = ChipStore::empty(nc, cfg.capacity, cfg.quant());
            let index = self.mesh.push_chip(chip)?;
            let (wname, pname) = chip_file_names(index);
            self.manifest.chips.push(ChipEntry {
                weights_file: wname,
                weights_sha256: String::new(),
                patterns_file: pname,
                patterns_sha256: String::new(),
                occupied: 0,
            });
            self.patterns.push(Vec::with_capacity(nc * cfg.capacity));
            self.dirty.push(true);
        }
        let c = self.next_free;
        let id = self.manifest.n_points as u64;
        let threshold = self.threshold;
        let chip = self.mesh.chip_mut(c);
        let was_empty = chip.occupied() == 0;
        let slot = chip.store_pattern(&encoded, id)?;
        if was_empty {
            chip.set_theta_v(chip_threshold(threshold, chip.scale()));
        }
        self.patterns[c].extend_from_slice(encoded.as_slice());
        self.manifest.assignment.push((c as u32, slot as u32));
        self.manifest.chips[c].occupied += 1;
        self.manifest.n_points += 1;
        self.dirty[c] = true;
        Ok(id)
    }

    /// Rewrites the files of chips changed by [`Index::insert`] and the
    /// manifest.
    pub fn save(&mut self) -> Result<()> {
        let dir = self.dir.clone().ok_or_else(|| Error::Config("index has no directory".into()))?;
        let nc = self.manifest.n_components;
        for c in 0..self.dirty.len() {
            if !std::mem::take(&mut self.dirty[c]) {
                continue;
            }
            let wbytes = self.mesh.chips()[c].to_bytes();
            let pbytes = patterns_to_bytes(nc, &self.patterns[c]);
            let entry = &mut self.manifest.chips[c];
            write_file(&dir.join(&entry.weights_file), &wbytes)?;
            write_file(&dir.join(&entry.patterns_file), &pbytes)?;
            entry.weights_sha256 = sha256_hex(&wbytes);
            entry.patterns_sha256 = sha256_hex(&pbytes);
        }
        self.manifest.save(&dir)
    }
}

/// Encoded patterns of a raw dataset in chip order, for tests and tools.
pub fn encode_all(model: &EncodingModel, data: &RawDataset) -> Result<Array2<f32>> {
    let normalized = center_normalize(data, Some(model.mean()))?;
    Ok(encode_normalized(model, normalized.data()).into_patterns())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoding::{fit_encoding, FitParams};
    use ndarray::Array2;
    use rand::Rng;

    fn random_data(m: usize, n: usize, seed: u64) -> RawDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        RawDataset::new(Array2::from_shape_fn((m, n), |_| rng.gen_range(-1.0f32..1.0))).unwrap()
    }

    fn small_config() -> IndexConfig {
        IndexConfig {
            columns: 1,
            chips_per_column: 4,
            column_width: 1,
            capacity: 50,
            theta_e: 0.0,
            window: 120,
            ..IndexConfig::default()
        }
    }

    fn model_for(data: &RawDataset) -> EncodingModel {
        let norm = center_normalize(data, None).unwrap();
        fit_encoding(&norm, &FitParams { skip_ica: true, ..FitParams::new(data.dim()) }).unwrap()
    }

    #[test]
    fn one_chunk_builds_one_chip() {
        let data = random_data(50, 8, 1);
        let model = model_for(&data);
        let dir = tempfile::tempdir().unwrap();
        let m = build_index(&data, &model, &small_config(), dir.path()).unwrap();
        assert_eq!(m.chips.len(), 1);
        assert_eq!(m.chips[0].occupied, 50);
        let mut idx = Index::open(dir.path()).unwrap();
        let r = idx.query(data.point(17), 1).unwrap();
        assert_eq!(r.ids, vec![17]);
    }

    #[test]
    fn partial_last_chip_and_assignment() {
        let data = random_data(120, 8, 2);
        let model = model_for(&data);
        let dir = tempfile::tempdir().unwrap();
        let m = build_index(&data, &model, &small_config(), dir.path()).unwrap();
        assert_eq!(m.chips.iter().map(|c| c.occupied).collect::<Vec<_>>(), vec![50, 50, 20]);
        let idx = Index::open(dir.path()).unwrap();
        assert_eq!(idx.manifest().locate(0), Some((0, 0)));
        assert_eq!(idx.manifest().locate(119), Some((2, 19)));
        assert_eq!(idx.manifest().locate(120), None);
    }

    #[test]
    fn too_small_mesh_is_rejected() {
        let data = random_data(120, 8, 3);
        let model = model_for(&data);
        let dir = tempfile::tempdir().unwrap();
        let m = build_index(&data, &model, &small_config(), dir.path()).unwrap();
        let topo = MeshTopology::new(1, 2, 1).unwrap();
        assert!(matches!(Index::open_with(dir.path(), m, &topo, 1), Err(Error::CapacityExceeded { .. })));
    }

    #[test]
    fn corrupted_chip_fails_checksum() {
        let data = random_data(60, 8, 4);
        let model = model_for(&data);
        let dir = tempfile::tempdir().unwrap();
        let m = build_index(&data, &model, &small_config(), dir.path()).unwrap();
        let path = dir.path().join(&m.chips[1].weights_file);
        let mut bytes = std::fs::read(&path).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0x55;
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(Index::open(dir.path()), Err(Error::ChecksumMismatch { .. })));
    }

    #[test]
    fn insert_then_find_and_persist() {
        let data = random_data(60, 8, 5);
        let model = model_for(&data);
        let dir = tempfile::tempdir().unwrap();
        build_index(&data, &model, &small_config(), dir.path()).unwrap();
        let mut idx = Index::open(dir.path()).unwrap();
        let extra = random_data(1, 8, 99);
        let id = idx.insert(extra.point(0)).unwrap();
        assert_eq!(id, 60);
        assert_eq!(idx.query(extra.point(0), 1).unwrap().ids, vec![60]);
        idx.save().unwrap();
        let mut again = Index::open(dir.path()).unwrap();
        assert_eq!(again.len(), 61);
        assert_eq!(again.query(extra.point(0), 1).unwrap().ids, vec![60]);
    }

    #[test]
    fn insert_into_full_mesh_fails() {
        let data = random_data(50, 8, 6);
        let model = model_for(&data);
        let dir = tempfile::tempdir().unwrap();
        let cfg = IndexConfig { chips_per_column: 1, ..small_config() };
        build_index(&data, &model, &cfg, dir.path()).unwrap();
        let mut idx = Index::open(dir.path()).unwrap();
        assert!(matches!(idx.insert(data.point(3)), Err(Error::CapacityExceeded { .. })));
    }

    #[test]
    fn insert_opens_new_chip_when_needed() {
        let data = random_data(50, 8, 7);
        let model = model_for(&data);
        let dir = tempfile::tempdir().unwrap();
        build_index(&data, &model, &small_config(), dir.path()).unwrap();
        let mut idx = Index::open(dir.path()).unwrap();
        let extra = random_data(1, 8, 8);
        let id = idx.insert(extra.point(0)).unwrap();
        assert_eq!(idx.manifest().locate(id), Some((1, 0)));
        assert_eq!(idx.query(extra.point(0), 1).unwrap().ids, vec![id]);
    }

    #[test]
    fn infinite_horizon_shortfall_is_starved() {
        let data = random_data(30, 8, 9);
        let model = model_for(&data);
        let dir = tempfile::tempdir().unwrap();
        build_index(&data, &model, &small_config(), dir.path()).unwrap();
        let mut idx = Index::open(dir.path()).unwrap();
        match idx.query(data.point(0), 31) {
            Err(Error::Starved { found, requested, partial }) => {
                assert_eq!(requested, 31);
                assert_eq!(found, partial.ids.len());
                assert!(found <= 30);
                let mut ids = partial.ids.clone();
                ids.sort_unstable();
                ids.dedup();
                assert_eq!(ids.len(), found);
            }
            other => panic!("expected starvation, got {other:?}"),
        }
    }

    #[test]
    fn tie_group_is_resolved_by_exact_score() {
        let data = random_data(100, 8, 10);
        let model = model_for(&data);
        let dir = tempfile::tempdir().unwrap();
        // A coarse window makes ties common.
        let cfg = IndexConfig { window: 4, ..small_config() };
        build_index(&data, &model, &cfg, dir.path()).unwrap();
        let mut idx = Index::open(dir.path()).unwrap();
        let key = encode_key(idx.model(), data.point(3)).unwrap();
        let out = idx.query_encoded(&key, 5).unwrap();
        let r = out.result;
        assert_eq!(r.ids.len(), 5);
        // Within each timestep group scores are nonincreasing.
        for w in r.ids.windows(2).zip(r.scores.windows(2)).zip(r.timesteps.windows(2)) {
            let ((_, s), t) = w;
            assert!(t[0] <= t[1]);
            if t[0] == t[1] {
                assert!(s[0] >= s[1]);
            }
        }
    }
}
