//! Command-line interface: dataset synthesis, featurization, pack
//! statistics, training, parameter counting and ensembling.

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use gpspp::encodings::{featurize_dataset, save_features};
use gpspp::ensemble::{ensemble_eval, load_spec, save_predictions};
use gpspp::graph::{load_dataset, make_split, save_dataset, SplitName, SynthConfig, Vocabulary};
use gpspp::model::{config_from_toml, count_params, save_checkpoint, ModelConfig};
use gpspp::pack::{graphs_per_pack_histogram, pack_efficiency, pack_stream, GraphSize, PackSpec};
use gpspp::train::{train, TrainConfig};

#[derive(Parser)]
#[command(name = "gpspp", about = "Molecular graph regression with a hybrid MPNN/attention network")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic molecule-like dataset (JSON Lines).
    Synth {
        #[arg(long, default_value_t = 64)]
        num_graphs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 4)]
        min_nodes: usize,
        #[arg(long, default_value_t = 12)]
        max_nodes: usize,
        /// Omit 3D positions.
        #[arg(long)]
        no_positions: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Precompute per-graph features into a binary sidecar.
    Featurize {
        #[arg(long)]
        dataset: PathBuf,
        /// Output path (defaults to `<dataset>.gpsf`).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Model config TOML controlling feature sizes.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Pack a dataset and print efficiency statistics as CSV.
    PackStats {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value_t = 60)]
        max_nodes: usize,
        #[arg(long, default_value_t = 120)]
        max_edges: usize,
        #[arg(long, default_value_t = 8)]
        max_graphs: usize,
    },
    /// Train a model and write checkpoint, metrics CSV and summary JSON.
    Train {
        /// TOML with model and training keys (flat, optional).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value = "original")]
        split: String,
        /// Size of the nominal validation portion (last indices); defaults
        /// to one tenth of the dataset.
        #[arg(long)]
        valid_count: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Count learnable parameters for a configuration.
    CountParams {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Also print the parameter share removed by each ablation flag.
        #[arg(long)]
        ablations: bool,
    },
    /// Ensemble member checkpoints / prediction files over a dataset split.
    Ensemble {
        /// JSON list of {checkpoint|predictions, weight}.
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value = "original")]
        split: String,
        #[arg(long)]
        valid_count: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory for predictions CSV and summary JSON.
        #[arg(long)]
        out: PathBuf,
    },
}

/// Flat run configuration: model and training keys side by side.
#[derive(serde::Deserialize, Default)]
#[serde(default)]
struct RunConfig {
    #[serde(flatten)]
    model: ModelConfig,
    #[serde(flatten)]
    train: TrainConfig,
}

fn read_run_config(path: Option<&PathBuf>) -> gpspp::Result<(ModelConfig, TrainConfig)> {
    match path {
        None => Ok((ModelConfig::default(), TrainConfig::default())),
        Some(p) => {
            let text = std::fs::read_to_string(p)?;
            let rc: RunConfig =
                toml::from_str(&text).map_err(|e| gpspp::Error::Config(e.to_string()))?;
            rc.model.validate()?;
            rc.train.validate()?;
            Ok((rc.model, rc.train))
        }
    }
}


/// Print a line, exiting quietly if the reader closed the pipe
/// (`gpspp pack-stats | head` must not panic).
fn emit(args: std::fmt::Arguments) {
    use std::io::Write;
    let mut stdout = std::io::stdout();
    if stdout
        .write_fmt(args)
        .and_then(|()| stdout.write_all(b"\n"))
        .is_err()
    {
        std::process::exit(0);
    }
}

macro_rules! emitln {
    ($($arg:tt)*) => { emit(format_args!($($arg)*)) };
}

fn main() {
    if let Err(e) = run() {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}

fn run() -> gpspp::Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Synth {
            num_graphs,
            seed,
            min_nodes,
            max_nodes,
            no_positions,
            out,
        } => {
            let cfg = SynthConfig {
                num_graphs,
                min_nodes,
                max_nodes,
                with_positions: !no_positions,
                with_targets: true,
                seed,
                vocab: Vocabulary::toy(),
                ..SynthConfig::default()
            };
            let ds = gpspp::graph::synth_dataset(&cfg);
            save_dataset(&ds, &out)?;
            emitln!("wrote {} graphs to {}", ds.len(), out.display());
        }
        Command::Featurize { dataset, out, config } => {
            let ds = load_dataset(&dataset)?;
            let mcfg = match config {
                Some(p) => config_from_toml(&std::fs::read_to_string(p)?)?,
                None => ModelConfig::default(),
            };
            let enc = mcfg.encoding_config();
            let feats = featurize_dataset(&ds.graphs, &enc)?;
            let out = out.unwrap_or_else(|| {
                let mut p = dataset.clone();
                p.set_extension("gpsf");
                p
            });
            save_features(&out, &enc, &feats)?;
            emitln!("featurized {} graphs into {}", ds.len(), out.display());
        }
        Command::PackStats {
            dataset,
            max_nodes,
            max_edges,
            max_graphs,
        } => {
            let ds = load_dataset(&dataset)?;
            let spec = PackSpec {
                max_nodes,
                max_edges,
                max_graphs,
            };
            let sizes: Vec<GraphSize> = ds
                .graphs
                .iter()
                .enumerate()
                .map(|(id, g)| GraphSize {
                    id,
                    nodes: g.num_nodes,
                    edges: g.num_edges(),
                })
                .collect();
            let packs = pack_stream(&sizes, spec)?;
            let eff = pack_efficiency(&packs)?;
            emitln!("metric,value");
            emitln!("packs,{}", packs.len());
            emitln!("node_efficiency,{}", eff.node_efficiency);
            emitln!("edge_efficiency,{}", eff.edge_efficiency);
            emitln!("mean_graphs_per_pack,{}", eff.mean_graphs_per_pack);
            for (count, packs) in graphs_per_pack_histogram(&packs).iter().enumerate() {
                if *packs > 0 {
                    emitln!("packs_with_{}_graphs,{}", count, packs);
                }
            }
        }
        Command::Train {
            config,
            dataset,
            split,
            valid_count,
            seed,
            out,
        } => {
            let (mcfg, mut tcfg) = read_run_config(config.as_ref())?;
            if let Some(seed) = seed {
                tcfg.seed = seed;
            }
            let ds = load_dataset(&dataset)?;
            let name: SplitName = split.parse()?;
            let valid = valid_count.unwrap_or(ds.len() / 10);
            let split = make_split(ds.len(), valid, name, tcfg.seed)?;
            std::fs::create_dir_all(&out)?;
            let outcome = train(&ds, &split, &mcfg, &tcfg)?;
            std::fs::write(out.join("metrics.csv"), &outcome.metrics_csv)?;
            let summary = serde_json::to_string_pretty(&outcome.summary)
                .map_err(|e| gpspp::Error::Config(e.to_string()))?;
            std::fs::write(out.join("summary.json"), summary)?;
            save_checkpoint(out.join("model.gpsc"), &mcfg, &ds.vocab, &outcome.params)?;
            if let Some(step) = outcome.summary.diverged_at_step {
                eprintln!("loss diverged at step {step}; wrote the last good checkpoint");
            }
            emitln!(
                "trained {} epochs ({} steps); final train MAE {:.6}{}",
                outcome.summary.epochs_run,
                outcome.summary.steps,
                outcome.summary.final_train_mae,
                outcome
                    .summary
                    .final_eval_mae
                    .map(|m| format!(", eval MAE {m:.6}"))
                    .unwrap_or_default()
            );
        }
        Command::CountParams { config, ablations } => {
            let mcfg = match config {
                Some(p) => config_from_toml(&std::fs::read_to_string(p)?)?,
                None => ModelConfig::default(),
            };
            let vocab = Vocabulary::reference_set1();
            let full = count_params(&mcfg, &vocab);
            emitln!("total,{full}");
            if ablations {
                type Toggle = fn(&mut ModelConfig);
                let flags: [(&str, Toggle); 7] = [
                    ("mpnn", |c| c.use_mpnn = false),
                    ("edge_features", |c| c.use_edge_features = false),
                    ("global_features", |c| c.use_global_features = false),
                    ("sender_aggregation", |c| c.use_sender_aggregation = false),
                    ("adjacent_node_aggregation", |c| {
                        c.use_adjacent_node_aggregation = false
                    }),
                    ("mhsa", |c| c.use_mhsa = false),
                    ("ffn", |c| c.use_ffn = false),
                ];
                for (name, apply) in flags {
                    let mut c = mcfg.clone();
                    apply(&mut c);
                    let count = count_params(&c, &vocab);
                    let delta = 100.0 * (full - count) as f64 / full as f64;
                    emitln!("without_{name},{count},-{delta:.1}%");
                }
            }
        }
        Command::Ensemble {
            spec,
            dataset,
            split,
            valid_count,
            seed,
            out,
        } => {
            let spec = load_spec(&spec)?;
            let ds = load_dataset(&dataset)?;
            let name: SplitName = split.parse()?;
            let valid = valid_count.unwrap_or(ds.len() / 10);
            let split = make_split(ds.len(), valid, name, seed)?;
            std::fs::create_dir_all(&out)?;
            let (report, preds) = ensemble_eval(&spec, &ds, &split)?;
            let rows: Vec<(usize, f64)> = split
                .eval_indices
                .iter()
                .copied()
                .zip(preds.iter().copied())
                .collect();
            save_predictions(out.join("predictions.csv"), &rows)?;
            let json = serde_json::to_string_pretty(&report)
                .map_err(|e| gpspp::Error::Config(e.to_string()))?;
            std::fs::write(out.join("summary.json"), &json)?;
            emitln!("{json}");
        }
    }
    Ok(())
}
