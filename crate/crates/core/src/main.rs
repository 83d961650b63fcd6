use std::io::Read;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ndarray::Array1;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use spikeann::bench::synth::{Synthetic, SyntheticSpec};
use spikeann::bench::{load_dataset, noisy_self_queries, run_bench, write_dataset, DataFormat, Oracle};
use spikeann::config::IndexConfig;
use spikeann::encoding::{center_normalize, fit_encoding, EncodingModel, FitParams, RawDataset};
use spikeann::search::{build_index, Index, IndexManifest};
use spikeann::{Error, Result};

#[derive(Parser)]
#[command(name = "spikeann", version, about = "Spiking approximate nearest-neighbor search on a simulated chip mesh")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct DataArg {
    /// Input format; inferred from the extension when omitted.
    #[arg(long)]
    format: Option<DataFormat>,
}

impl DataArg {
    fn load(&self, path: &Path) -> Result<RawDataset> {
        load_dataset(path, self.format.unwrap_or_else(|| DataFormat::from_path(path)))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Fit the encoding model on a sample of the data.
    Preprocess {
        #[arg(long, alias = "data")]
        input: PathBuf,
        #[arg(long, default_value_t = 20000)]
        sample: usize,
        #[arg(long, default_value_t = 500)]
        components: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Stop after PCA.
        #[arg(long)]
        skip_ica: bool,
        #[arg(long, default_value_t = 200)]
        max_iter: usize,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        data: DataArg,
    },
    /// Encode, quantize and write an index.
    Build {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        /// TOML mesh configuration.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        fmt: DataArg,
    },
    /// Run one query and print the matches as JSON.
    Query {
        #[arg(long)]
        index: PathBuf,
        /// Key file, or `-` for whitespace or comma separated numbers on stdin.
        #[arg(long)]
        key: String,
        /// Row of the key file to use.
        #[arg(long, default_value_t = 0)]
        row: usize,
        #[arg(short, default_value_t = 10)]
        k: usize,
        #[arg(long)]
        dump_trace: Option<PathBuf>,
        #[arg(long)]
        dump_spikes: Option<PathBuf>,
        #[arg(long)]
        workers: Option<usize>,
        #[command(flatten)]
        fmt: DataArg,
    },
    /// Append every point of a file to the index.
    Insert {
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        point: PathBuf,
        #[command(flatten)]
        fmt: DataArg,
    },
    /// Score queries against exact ground truth.
    Bench {
        #[arg(long)]
        index: PathBuf,
        /// Query file; omit together with --noisy-self to draw noisy copies of stored points.
        #[arg(long)]
        queries: Option<PathBuf>,
        /// Raw data the index was built from; defaults to the path in the manifest.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(short, value_delimiter = ',', default_values_t = vec![1usize, 10, 100])]
        k: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_values_t = vec![0.0f64, 0.01, 0.05])]
        eps: Vec<f64>,
        /// Number of noisy-self queries to generate.
        #[arg(long)]
        noisy_self: Option<usize>,
        #[arg(long, default_value_t = 0.1)]
        sigma: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Write a synthetic dataset.
    Gen {
        #[arg(long)]
        points: usize,
        #[arg(long)]
        dim: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// First point index to emit, for drawing query sets disjoint from data.
        #[arg(long, default_value_t = 0)]
        offset: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn read_key(arg: &str, row: usize, fmt: &DataArg) -> Result<Array1<f32>> {
    if arg == "-" {
        let mut text = String::new();
        std::io::stdin().read_to_string(&mut text).map_err(|e| Error::io(Path::new("<stdin>"), e))?;
        let values = text
            .split(|c: char| c.is_whitespace() || c == ',' || c == '[' || c == ']')
            .filter(|s| !s.is_empty())
            .map(|s| s.parse::<f32>().map_err(|e| Error::Config(format!("{s:?}: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        return Ok(Array1::from(values));
    }
    let data = fmt.load(Path::new(arg))?;
    if row >= data.len() {
        return Err(Error::Config(format!("row {row} out of range for {} rows", data.len())));
    }
    Ok(data.point(row).to_owned())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Preprocess { input, sample: n_sample, components, seed, skip_ica, max_iter, out, data } => {
            let raw = data.load(&input)?;
            let picked = if raw.len() > n_sample {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut idx = sample(&mut rng, raw.len(), n_sample).into_vec();
                idx.sort_unstable();
                raw.select(&idx)
            } else {
                raw
            };
            let normalized = center_normalize(&picked, None)?;
            let params = FitParams { skip_ica, ica_iters: max_iter, seed, ..FitParams::new(components) };
            let model = fit_encoding(&normalized, &params)?;
            model.save(&out)?;
            eprintln!(
                "fitted {}x{} model ({} ICA iterations) -> {}",
                model.n_components(),
                model.dim(),
                model.ica_iterations(),
                out.display()
            );
        }
        Command::Build { data, model, config, out, fmt } => {
            let cfg = match config {
                Some(p) => IndexConfig::load(&p)?,
                None => IndexConfig::default(),
            };
            let model = EncodingModel::load(&model)?;
            let raw = fmt.load(&data)?;
            let mut manifest = build_index(&raw, &model, &cfg, &out)?;
            manifest.data_path = Some(std::fs::canonicalize(&data).unwrap_or(data).display().to_string());
            manifest.save(&out)?;
            eprintln!(
                "indexed {} points on {} chips in {:.2}s",
                manifest.n_points,
                manifest.chips.len(),
                manifest.build_seconds
            );
        }
        Command::Query { index, key, row, k, dump_trace, dump_spikes, workers, fmt } => {
            let mut idx = match workers {
                Some(w) => {
                    let manifest = IndexManifest::load(&index)?;
                    let topo = manifest.config.topology();
                    Index::open_with(&index, manifest, &topo, w)?
                }
                None => Index::open(&index)?,
            };
            let key = read_key(&key, row, &fmt)?;
            let outcome = idx.query_traced(key.view(), k)?;
            if let Some(path) = dump_trace {
                let f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
                outcome.trace.write_jsonl(std::io::BufWriter::new(f)).map_err(|e| Error::io(&path, e))?;
            }
            if let Some(path) = dump_spikes {
                std::fs::write(&path, outcome.pattern.to_json().to_string()).map_err(|e| Error::io(&path, e))?;
            }
            println!("{}", serde_json::to_string_pretty(&outcome.result)?);
            if outcome.is_starved() {
                return Err(Error::Starved {
                    found: outcome.result.ids.len(),
                    requested: k,
                    partial: Box::new(outcome.result),
                });
            }
        }
        Command::Insert { index, point, fmt } => {
            let mut idx = Index::open(&index)?;
            let points = fmt.load(&point)?;
            for p in 0..points.len() {
                println!("{}", idx.insert(points.point(p))?);
            }
            idx.save()?;
        }
        Command::Bench { index, queries, data, k, eps, noisy_self, sigma, seed, report, csv } => {
            let mut idx = Index::open(&index)?;
            let data_path = data
                .or_else(|| idx.manifest().data_path.clone().map(PathBuf::from))
                .ok_or_else(|| Error::Config("no --data given and the manifest records no data path".into()))?;
            let raw = load_dataset(&data_path, DataFormat::from_path(&data_path))?;
            let oracle = Oracle::new(&raw, idx.model().mean())?;
            let queries = match (queries, noisy_self) {
                (Some(q), _) => load_dataset(&q, DataFormat::from_path(&q))?,
                (None, Some(n)) => noisy_self_queries(&raw, &oracle, n, sigma, seed)?.0,
                (None, None) => return Err(Error::Config("give --queries or --noisy-self".into())),
            };
            let (mut rep, _) = run_bench(&mut idx, &oracle, &queries, &k, &eps)?;
            rep.index_bytes = idx.manifest().weight_bytes(&index);
            rep.write_json(&report)?;
            if let Some(path) = csv {
                let f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
                rep.write_csv(f).map_err(|e| Error::io(&path, e))?;
            }
            rep.write_csv(std::io::stdout().lock()).map_err(|e| Error::io(Path::new("<stdout>"), e))?;
        }
        Command::Gen { points, dim, seed, offset, out } => {
            let synth = Synthetic::new(SyntheticSpec::new(offset + points, dim, seed))?;
            let data = synth.generate(offset, offset + points);
            write_dataset(&out, &data, DataFormat::from_path(&out))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
