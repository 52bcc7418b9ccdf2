//! Command-line surface: synth | featurize | train | design | eval | bench.
//!
//! Machine-readable output goes to stdout or `--out`; diagnostics go to
//! stderr. Exit codes: 0 success, 2 usage, 3 missing input/checkpoint,
//! 4 invalid data or configuration, 5 runtime failure.

use clap::{Args, Parser, Subcommand, ValueEnum};
use pifold::bench::{bench_decoding, BenchConfig};
use pifold::checkpoint;
use pifold::data;
use pifold::decode::{autoregressive_decode, expand_to_protein, one_shot_decode, DecodeOutput};
use pifold::error::Error;
use pifold::featurize::{featurize, featurize_dense, layout};
use pifold::metrics::{evaluate, EvalOptions};
use pifold::model::{init_ar_params, init_params, init_virtual_atoms, ModelConfig};
use pifold::protein::letter_of;
use pifold::real::{Precision, Real};
use pifold::train::{train_loop, TrainConfig};
use serde_json::json;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "pifold", version, about = "Structure-based protein sequence design")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PrecisionArg {
    F32,
    F64,
}

impl From<PrecisionArg> for Precision {
    fn from(p: PrecisionArg) -> Precision {
        match p {
            PrecisionArg::F32 => Precision::F32,
            PrecisionArg::F64 => Precision::F64,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum DecoderArg {
    OneShot,
    Ar,
}

#[derive(Args, Clone)]
struct CommonOpts {
    /// JSON config file with optional "model" and "train" sections.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Numeric precision for all tensor math.
    #[arg(long, value_enum, default_value = "f64")]
    precision: PrecisionArg,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a deterministic synthetic backbone dataset (JSON lines).
    Synth {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Residues per protein.
        #[arg(long, default_value_t = 50)]
        n: usize,
        /// Number of proteins.
        #[arg(long, default_value_t = 1)]
        count: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Assemble residue graphs and feature matrices.
    Featurize {
        /// JSON-lines dataset (not read with --describe).
        #[arg(required_unless_present = "describe")]
        data: Option<PathBuf>,
        /// Print the versioned feature-layout table and exit.
        #[arg(long)]
        describe: bool,
        /// Checkpoint supplying virtual-atom coordinates (default: seeded init).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: CommonOpts,
    },
    /// Train a model and write a checkpoint.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Held-out set evaluated after training (summary on stderr).
        #[arg(long)]
        val: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Checkpoint output path.
        #[arg(long)]
        out: PathBuf,
        /// JSON-lines metrics log (step, loss, lr, wall time).
        #[arg(long)]
        metrics: Option<PathBuf>,
        /// Attach a seeded (untrained) autoregressive decoder of this depth
        /// to the checkpoint for latency experiments.
        #[arg(long)]
        ar_layers: Option<usize>,
        /// Featurize the dataset on the rayon pool.
        #[arg(long, default_value_t = true)]
        parallel: bool,
        #[command(flatten)]
        common: CommonOpts,
    },
    /// Decode sequences; emits FASTA plus a JSON sidecar.
    Design {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "one-shot")]
        decoder: DecoderArg,
        /// FASTA output path (stdout if omitted).
        #[arg(long)]
        out: Option<PathBuf>,
        /// JSON sidecar with per-residue log-probabilities and timing.
        #[arg(long)]
        sidecar: Option<PathBuf>,
        #[command(flatten)]
        common: CommonOpts,
    },
    /// Evaluate perplexity and recovery; emits a JSON report.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Keep only proteins up to this length (short-chain setting).
        #[arg(long)]
        max_len: Option<usize>,
        /// Split-manifest JSON restricting the evaluated names.
        #[arg(long)]
        subset: Option<PathBuf>,
        /// Which manifest list to use.
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = true)]
        parallel: bool,
        #[command(flatten)]
        common: CommonOpts,
    },
    /// Decoding-latency benchmark: one-shot vs autoregressive.
    Bench {
        /// Comma-separated chain lengths.
        #[arg(long, value_delimiter = ',', default_values_t = vec![200usize, 400, 800, 1600])]
        lengths: Vec<usize>,
        #[arg(long, default_value_t = 5)]
        reps: usize,
        #[arg(long, default_value_t = 2)]
        warmup: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 8)]
        dim: usize,
        #[arg(long, default_value_t = 8)]
        k: usize,
        #[arg(long, default_value_t = 5)]
        oneshot_layers: usize,
        #[arg(long, default_value_t = 3)]
        enc_layers: usize,
        #[arg(long, default_value_t = 2)]
        dec_layers: usize,
        /// Throughput mode: run repetitions concurrently.
        #[arg(long, default_value_t = false)]
        parallel: bool,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Numeric precision (f32 is the usual benchmark setting).
        #[arg(long, value_enum, default_value = "f32")]
        precision: PrecisionArg,
    },
}

#[derive(Debug, Default, serde::Deserialize)]
struct ConfigFile {
    #[serde(default)]
    model: Option<ModelConfig>,
    #[serde(default)]
    train: Option<TrainConfig>,
}

fn load_config(path: &Option<PathBuf>) -> Result<ConfigFile, Error> {
    match path {
        None => Ok(ConfigFile::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Error::io(p.display().to_string(), e))?;
            Ok(serde_json::from_str(&text)?)
        }
    }
}

/// Directory for cached benchmark inputs; override with PIFOLD_CACHE_DIR
/// (the only environment variable the CLI reads).
fn cache_dir() -> PathBuf {
    match std::env::var_os("PIFOLD_CACHE_DIR") {
        Some(dir) => PathBuf::from(dir),
        None => std::env::temp_dir().join("pifold-cache"),
    }
}

fn write_output(out: &Option<PathBuf>, content: &str) -> Result<(), Error> {
    match out {
        Some(path) => {
            let mut f = std::fs::File::create(path)
                .map_err(|e| Error::io(path.display().to_string(), e))?;
            f.write_all(content.as_bytes())
                .map_err(|e| Error::io(path.display().to_string(), e))
        }
        None => {
            print!("{content}");
            Ok(())
        }
    }
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::FileNotFound(_) | Error::CheckpointNotFound(_) => 3,
        Error::Config(_)
        | Error::Invalid(_)
        | Error::DataLines(_)
        | Error::Json(_)
        | Error::Checkpoint(_) => 4,
        _ => 5,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.cmd {
        Cmd::Synth { seed, n, count, out } => {
            if n < 2 {
                return Err(Error::Invalid("synth needs --n >= 2".into()));
            }
            let proteins = data::synth_dataset(seed, n, count);
            let mut text = String::new();
            for p in &proteins {
                text.push_str(&data::canonical_line(p));
                text.push('\n');
            }
            write_output(&out, &text)?;
            eprintln!("wrote {count} synthetic proteins (n = {n}, seed = {seed})");
            Ok(())
        }
        Cmd::Featurize { data, describe, checkpoint, seed, out, common } => {
            let cfgfile = load_config(&common.config)?;
            let model_cfg = cfgfile.model.unwrap_or_default();
            model_cfg.validate()?;
            if describe {
                let lay = layout(&model_cfg.features);
                write_output(&out, &lay.describe())?;
                return Ok(());
            }
            let data = data.expect("clap enforces data unless --describe");
            match Precision::from(common.precision) {
                Precision::F32 => run_featurize::<f32>(&data, &model_cfg, &checkpoint, seed, &out),
                Precision::F64 => run_featurize::<f64>(&data, &model_cfg, &checkpoint, seed, &out),
            }
        }
        Cmd::Train { data, val, seed, epochs, out, metrics, ar_layers, parallel, common } => {
            let cfgfile = load_config(&common.config)?;
            let model_cfg = cfgfile.model.unwrap_or_default();
            let mut train_cfg = cfgfile.train.unwrap_or_default();
            if let Some(s) = seed {
                train_cfg.seed = s;
            }
            if let Some(e) = epochs {
                train_cfg.epochs = e;
            }
            train_cfg.precision = Precision::from(common.precision);
            match train_cfg.precision {
                Precision::F32 => run_train::<f32>(
                    &data, &val, &model_cfg, &train_cfg, &out, &metrics, ar_layers, parallel,
                ),
                Precision::F64 => run_train::<f64>(
                    &data, &val, &model_cfg, &train_cfg, &out, &metrics, ar_layers, parallel,
                ),
            }
        }
        Cmd::Design { data, checkpoint, decoder, out, sidecar, common } => {
            match Precision::from(common.precision) {
                Precision::F32 => run_design::<f32>(&data, &checkpoint, decoder, &out, &sidecar),
                Precision::F64 => run_design::<f64>(&data, &checkpoint, decoder, &out, &sidecar),
            }
        }
        Cmd::Eval { data, checkpoint, max_len, subset, split, out, parallel, common } => {
            match Precision::from(common.precision) {
                Precision::F32 => {
                    run_eval::<f32>(&data, &checkpoint, max_len, &subset, &split, &out, parallel)
                }
                Precision::F64 => {
                    run_eval::<f64>(&data, &checkpoint, max_len, &subset, &split, &out, parallel)
                }
            }
        }
        Cmd::Bench {
            lengths,
            reps,
            warmup,
            seed,
            dim,
            k,
            oneshot_layers,
            enc_layers,
            dec_layers,
            parallel,
            out,
            precision,
        } => {
            let cfg = BenchConfig {
                lengths,
                reps,
                warmup,
                seed,
                dim,
                k,
                oneshot_layers,
                enc_layers,
                dec_layers,
                parallel,
                ..BenchConfig::default()
            };
            stage_bench_inputs(&cfg)?;
            let report = match Precision::from(precision) {
                Precision::F32 => bench_decoding::<f32>(&cfg)?,
                Precision::F64 => bench_decoding::<f64>(&cfg)?,
            };
            for entry in &report.entries {
                eprintln!(
                    "L={:>5}  one-shot {:>10.2} ms  autoregressive {:>12.2} ms  ratio {:>8.1}x",
                    entry.length,
                    entry.one_shot.median_ms,
                    entry.autoregressive.median_ms,
                    entry.ratio
                );
            }
            write_output(&out, &format!("{}\n", serde_json::to_string_pretty(&report)?))
        }
    }
}

/// Persist the benchmark's synthetic inputs in the cache directory so a
/// report can be matched to the exact chains it timed.
fn stage_bench_inputs(cfg: &BenchConfig) -> Result<(), Error> {
    let dir = cache_dir();
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    for &length in &cfg.lengths {
        let path = dir.join(format!("bench-L{length}-seed{}.jsonl", cfg.seed));
        if !path.exists() {
            let p = data::synth_protein(cfg.seed.wrapping_add(length as u64), length);
            data::write_jsonl(&path, std::slice::from_ref(&p))?;
        }
    }
    Ok(())
}

fn run_featurize<T: Real>(
    data_path: &Path,
    model_cfg: &ModelConfig,
    checkpoint_path: &Option<PathBuf>,
    seed: u64,
    out: &Option<PathBuf>,
) -> Result<(), Error> {
    let proteins = data::parse_jsonl(data_path)?;
    let vparams = match checkpoint_path {
        Some(p) => {
            let (params, _) = checkpoint::load::<T>(p)?;
            params.set.tensors[params.virtual_atoms].clone()
        }
        None => init_virtual_atoms::<T>(model_cfg.features.n_virtual, seed),
    };
    let mut text = String::new();
    for protein in &proteins {
        let (graph, node, edge) = featurize_dense(protein, &model_cfg.features, &vparams)?;
        let node_rows: Vec<Vec<T>> = (0..node.rows()).map(|r| node.row(r).to_vec()).collect();
        let edge_rows: Vec<Vec<T>> = (0..edge.rows()).map(|r| edge.row(r).to_vec()).collect();
        let record = json!({
            "name": graph.name,
            "n": graph.n,
            "edges": {"src": graph.src, "tgt": graph.tgt},
            "node_features": node_rows,
            "edge_features": edge_rows,
        });
        text.push_str(&serde_json::to_string(&record)?);
        text.push('\n');
    }
    write_output(out, &text)?;
    eprintln!("featurized {} proteins", proteins.len());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn run_train<T: Real>(
    data_path: &Path,
    val_path: &Option<PathBuf>,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    out: &Path,
    metrics_path: &Option<PathBuf>,
    ar_layers: Option<usize>,
    parallel: bool,
) -> Result<(), Error> {
    model_cfg.validate()?;
    train_cfg.validate()?;
    let proteins = data::parse_jsonl(data_path)?;
    let graphs = pifold::parallel::try_map(parallel, &proteins, |p| {
        featurize::<T>(p, &model_cfg.features)
    })?;
    let mut params = init_params::<T>(model_cfg, train_cfg.seed)?;

    let mut metrics_file = match metrics_path {
        Some(p) => Some(
            std::fs::File::create(p).map_err(|e| Error::io(p.display().to_string(), e))?,
        ),
        None => None,
    };
    let mut log_err: Option<std::io::Error> = None;
    train_loop(&graphs, &mut params, train_cfg, |log| {
        if let Some(f) = metrics_file.as_mut() {
            if let Err(e) =
                writeln!(f, "{}", serde_json::to_string(log).expect("step log serializes"))
            {
                log_err.get_or_insert(e);
            }
        }
        if log.step % 50 == 0 {
            eprintln!("step {:>6}  epoch {:>3}  loss {:.4}  lr {:.2e}", log.step, log.epoch, log.loss, log.lr);
        }
    })?;
    if let Some(e) = log_err {
        return Err(Error::io("metrics log", e));
    }

    let dec = match ar_layers {
        Some(layers) => Some(init_ar_params::<T>(model_cfg, layers, train_cfg.seed)?),
        None => None,
    };
    checkpoint::save(out, &params, dec.as_ref())?;
    eprintln!("checkpoint written to {}", out.display());

    if let Some(vp) = val_path {
        let val = data::parse_jsonl(vp)?;
        let report = evaluate(
            &val,
            &params,
            &model_cfg.features,
            &EvalOptions { parallel, ..Default::default() },
        )?;
        eprintln!(
            "validation: perplexity {:?}, median recovery {:?}%",
            report.perplexity, report.median_recovery
        );
    }
    Ok(())
}

fn run_design<T: Real>(
    data_path: &Path,
    checkpoint_path: &Path,
    decoder: DecoderArg,
    out: &Option<PathBuf>,
    sidecar: &Option<PathBuf>,
) -> Result<(), Error> {
    let (params, dec) = checkpoint::load::<T>(checkpoint_path)?;
    let proteins = data::parse_jsonl(data_path)?;
    let started = std::time::Instant::now();
    let mut fasta = String::new();
    let mut results = Vec::new();
    for protein in &proteins {
        let graph = featurize::<T>(protein, &params.cfg.features)?;
        let output: DecodeOutput<T> = match decoder {
            DecoderArg::OneShot => one_shot_decode(&graph, &params)?,
            DecoderArg::Ar => {
                let dec = dec.as_ref().ok_or_else(|| {
                    Error::Invalid(
                        "checkpoint has no autoregressive decoder; train with --ar-layers".into(),
                    )
                })?;
                autoregressive_decode(&graph, &params, dec)?
            }
        };
        let (codes, log_probs) = expand_to_protein(&output, &graph);
        let seq: String = codes
            .iter()
            .zip(&protein.mask)
            .map(|(&c, &m)| if m { letter_of(c) } else { 'X' })
            .collect();
        fasta.push_str(&format!(">{}\n{}\n", protein.name, seq));
        let lp_rows: Vec<Vec<T>> =
            (0..log_probs.rows()).map(|r| log_probs.row(r).to_vec()).collect();
        results.push(json!({
            "name": protein.name,
            "sequence": seq,
            "designed": protein.mask,
            "log_probs": lp_rows,
            "forward_passes": output.forward_passes,
            "timing": {"decode_ms": output.wall.as_secs_f64() * 1e3},
        }));
    }
    write_output(out, &fasta)?;
    if let Some(path) = sidecar {
        let doc = json!({
            "results": results,
            "timing": {"total_ms": started.elapsed().as_secs_f64() * 1e3},
        });
        write_output(&Some(path.clone()), &format!("{}\n", serde_json::to_string_pretty(&doc)?))?;
    }
    eprintln!(
        "designed {} sequences in {:.1} ms",
        proteins.len(),
        started.elapsed().as_secs_f64() * 1e3
    );
    Ok(())
}

fn run_eval<T: Real>(
    data_path: &Path,
    checkpoint_path: &Path,
    max_len: Option<usize>,
    subset: &Option<PathBuf>,
    split: &str,
    out: &Option<PathBuf>,
    parallel: bool,
) -> Result<(), Error> {
    let (params, _) = checkpoint::load::<T>(checkpoint_path)?;
    let proteins = data::parse_jsonl(data_path)?;
    let subset_names = match subset {
        Some(path) => {
            let manifest = data::SplitManifest::load(path)?;
            let list = match split {
                "train" => &manifest.train,
                "validation" => &manifest.validation,
                "test" => &manifest.test,
                other => {
                    return Err(Error::Invalid(format!(
                        "unknown split '{other}' (expected train|validation|test)"
                    )))
                }
            };
            Some(list.iter().cloned().collect())
        }
        None => None,
    };
    let report = evaluate(
        &proteins,
        &params,
        &params.cfg.features,
        &EvalOptions { max_len, subset: subset_names, parallel },
    )?;
    if report.empty_subset {
        eprintln!("empty subset: no proteins matched the filters");
    }
    write_output(out, &format!("{}\n", serde_json::to_string_pretty(&report)?))
}
