use std::path::Path;

use spikeann::bench::synth::{Synthetic, SyntheticSpec};
use spikeann::bench::Oracle;
use spikeann::config::IndexConfig;
use spikeann::encoding::{center_normalize, fit_encoding, EncodingModel, FitParams, RawDataset};
use spikeann::search::{build_index, Index, IndexManifest};

fn setup(m: usize, dim: usize, seed: u64) -> (RawDataset, RawDataset, EncodingModel) {
    let synth = Synthetic::new(SyntheticSpec::new(m + 20, dim, seed)).unwrap();
    let data = synth.generate(0, m);
    let queries = synth.generate(m, m + 20);
    let normalized = center_normalize(&data, None).unwrap();
    let params = FitParams { skip_ica: true, seed, ..FitParams::new(dim) };
    let model = fit_encoding(&normalized, &params).unwrap();
    (data, queries, model)
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().unwrap() != "manifest.json")
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    out.sort();
    out
}

fn small_config() -> IndexConfig {
    IndexConfig { columns: 2, chips_per_column: 4, column_width: 2, capacity: 256, ..IndexConfig::default() }
}

#[test]
fn rebuild_writes_identical_files() {
    let (data, _, model) = setup(1500, 32, 1);
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let cfg = small_config();
    let ma = build_index(&data, &model, &cfg, a.path()).unwrap();
    let mb = build_index(&data, &model, &cfg, b.path()).unwrap();
    assert_eq!(files(a.path()), files(b.path()));
    assert_eq!(ma.chips.len(), 6);
    assert_eq!(
        ma.chips.iter().map(|c| c.weights_sha256.clone()).collect::<Vec<_>>(),
        mb.chips.iter().map(|c| c.weights_sha256.clone()).collect::<Vec<_>>()
    );
}

#[test]
fn reopened_index_answers_identically() {
    let (data, queries, model) = setup(1500, 32, 2);
    let dir = tempfile::tempdir().unwrap();
    build_index(&data, &model, &small_config(), dir.path()).unwrap();
    let run = || {
        let mut index = Index::open(dir.path()).unwrap();
        (0..queries.len())
            .map(|q| {
                let r = index.query_traced(queries.point(q), 10).unwrap().result;
                (r.ids, r.timesteps)
            })
            .collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

#[test]
fn stored_point_finds_itself_on_a_single_chip() {
    let (data, _, model) = setup(200, 16, 3);
    let dir = tempfile::tempdir().unwrap();
    let cfg = IndexConfig { columns: 1, chips_per_column: 1, column_width: 1, capacity: 256, ..IndexConfig::default() };
    let manifest = build_index(&data, &model, &cfg, dir.path()).unwrap();
    assert_eq!(manifest.chips.len(), 1);
    let mut index = Index::open(dir.path()).unwrap();
    let oracle = Oracle::new(&data, model.mean()).unwrap();
    let mut hits = 0;
    for i in (0..200).step_by(10) {
        let r = index.query(data.point(i), 1).unwrap();
        hits += (r.ids.first() == oracle.knn(data.point(i), 1).ids.first()) as usize;
    }
    assert!(hits >= 19, "self-match found for {hits}/20");
}

#[test]
fn manifest_round_trips_through_disk() {
    let (data, _, model) = setup(700, 16, 4);
    let dir = tempfile::tempdir().unwrap();
    let built = build_index(&data, &model, &small_config(), dir.path()).unwrap();
    let loaded = IndexManifest::load(dir.path()).unwrap();
    assert_eq!(loaded.n_points, built.n_points);
    assert_eq!(loaded.chips.len(), 3);
    assert_eq!(loaded.chips.iter().map(|c| c.occupied).sum::<usize>(), 700);
}
