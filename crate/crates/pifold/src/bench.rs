//! Decoding-latency benchmark: one-shot vs autoregressive decoding over a
//! ladder of synthetic chain lengths. Medians over repeated runs on a
//! monotonic clock, with warm-up runs excluded and automatic inner-loop
//! amplification when a case is too fast for the timer.

use crate::data::synth_protein;
use crate::decode::{autoregressive_decode, one_shot_decode};
use crate::error::Result;
use crate::featurize::{featurize, FeatureConfig, ProteinGraph};
use crate::model::{init_ar_params, init_params, ArDecoderParams, ModelConfig, ModelParams};
use crate::real::Real;
use serde::{Deserialize, Serialize};
use std::time::Instant;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchConfig {
    #[serde(default = "default_lengths")]
    pub lengths: Vec<usize>,
    /// Timed repetitions per scheme and length (medians reported).
    #[serde(default = "default_reps")]
    pub reps: usize,
    /// Untimed warm-up runs per scheme and length.
    #[serde(default = "default_warmup")]
    pub warmup: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_bench_dim")]
    pub dim: usize,
    #[serde(default = "default_bench_heads")]
    pub heads: usize,
    #[serde(default = "default_bench_k")]
    pub k: usize,
    /// Depth of the one-shot model.
    #[serde(default = "default_oneshot_layers")]
    pub oneshot_layers: usize,
    /// Encoder depth of the autoregressive model.
    #[serde(default = "default_enc_layers")]
    pub enc_layers: usize,
    /// Decoder depth of the autoregressive model.
    #[serde(default = "default_dec_layers")]
    pub dec_layers: usize,
    /// Throughput mode: run repetitions concurrently (reported separately;
    /// latency runs are single-threaded by default to stabilize timings).
    #[serde(default)]
    pub parallel: bool,
}

fn default_lengths() -> Vec<usize> {
    vec![200, 400, 800, 1600]
}
fn default_reps() -> usize {
    5
}
fn default_warmup() -> usize {
    2
}
fn default_seed() -> u64 {
    7
}
fn default_bench_dim() -> usize {
    8
}
fn default_bench_heads() -> usize {
    4
}
fn default_bench_k() -> usize {
    8
}
fn default_oneshot_layers() -> usize {
    5
}
fn default_enc_layers() -> usize {
    3
}
fn default_dec_layers() -> usize {
    2
}

impl Default for BenchConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults")
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SchemeTiming {
    pub median_ms: f64,
    pub p95_ms: f64,
    pub reps: usize,
    /// Inner repetitions per sample when a case was too fast to time
    /// directly (1 = timed directly).
    pub inner_loops: usize,
    pub samples_ms: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct LengthEntry {
    pub length: usize,
    pub one_shot: SchemeTiming,
    pub autoregressive: SchemeTiming,
    /// autoregressive median / one-shot median.
    pub ratio: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct EnvFingerprint {
    pub os: String,
    pub arch: String,
    pub cpu_threads: usize,
    pub build_profile: &'static str,
    pub precision: &'static str,
    pub timer: &'static str,
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchReport {
    pub config: BenchConfig,
    pub config_hash: String,
    pub env: EnvFingerprint,
    pub entries: Vec<LengthEntry>,
    pub notes: Vec<String>,
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let idx = ((sorted.len() as f64 * q).ceil() as usize).clamp(1, sorted.len()) - 1;
    sorted[idx]
}

fn summarize(samples: Vec<f64>, inner: usize) -> SchemeTiming {
    let mut sorted = samples.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    SchemeTiming {
        median_ms: percentile(&sorted, 0.5),
        p95_ms: percentile(&sorted, 0.95),
        reps: samples.len(),
        inner_loops: inner,
        samples_ms: samples,
    }
}

/// Minimum sample duration before inner-loop amplification kicks in.
const MIN_SAMPLE_MS: f64 = 2.0;

fn time_scheme<F: Fn() + Sync>(
    run: F,
    reps: usize,
    warmup: usize,
    parallel: bool,
    notes: &mut Vec<String>,
    label: &str,
) -> SchemeTiming {
    for _ in 0..warmup {
        run();
    }
    // probe once to decide inner repetitions
    let probe_start = Instant::now();
    run();
    let probe_ms = probe_start.elapsed().as_secs_f64() * 1e3;
    let inner = if probe_ms < MIN_SAMPLE_MS {
        let loops = (MIN_SAMPLE_MS / probe_ms.max(1e-4)).ceil() as usize;
        notes.push(format!(
            "{label}: case too fast for the timer ({probe_ms:.4} ms); using {loops} inner loops per sample"
        ));
        loops
    } else {
        1
    };

    if parallel {
        let idx: Vec<usize> = (0..reps).collect();
        let start = Instant::now();
        crate::parallel::map(true, &idx, |_| {
            for _ in 0..inner {
                run();
            }
        });
        let per_rep = start.elapsed().as_secs_f64() * 1e3 / (reps * inner) as f64;
        summarize(vec![per_rep; reps], inner)
    } else {
        let samples: Vec<f64> = (0..reps)
            .map(|_| {
                let start = Instant::now();
                for _ in 0..inner {
                    run();
                }
                start.elapsed().as_secs_f64() * 1e3 / inner as f64
            })
            .collect();
        summarize(samples, inner)
    }
}

fn config_hash(cfg: &BenchConfig, precision: &str) -> String {
    use sha2::{Digest, Sha256};
    let mut hasher = Sha256::new();
    hasher.update(serde_json::to_vec(cfg).expect("serializable"));
    hasher.update(precision.as_bytes());
    hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

pub struct BenchModels<T: Real> {
    pub oneshot: ModelParams<T>,
    pub ar_encoder: ModelParams<T>,
    pub ar_decoder: ArDecoderParams<T>,
    pub features: FeatureConfig,
}

/// Seeded random parameters for both schemes (timings do not depend on
/// training state).
pub fn bench_models<T: Real>(cfg: &BenchConfig) -> Result<BenchModels<T>> {
    let features = FeatureConfig { k: cfg.k, ..FeatureConfig::default() };
    let oneshot_cfg = ModelConfig {
        dim: cfg.dim,
        n_layers: cfg.oneshot_layers,
        heads: cfg.heads,
        dropout: 0.0,
        features: features.clone(),
    };
    let enc_cfg = ModelConfig { n_layers: cfg.enc_layers, ..oneshot_cfg.clone() };
    Ok(BenchModels {
        oneshot: init_params(&oneshot_cfg, cfg.seed)?,
        ar_encoder: init_params(&enc_cfg, cfg.seed ^ 1)?,
        ar_decoder: init_ar_params(&enc_cfg, cfg.dec_layers, cfg.seed ^ 2)?,
        features,
    })
}

/// Time one-shot and autoregressive decoding over the configured length
/// ladder, with matched total depth between the two schemes.
pub fn bench_decoding<T: Real>(cfg: &BenchConfig) -> Result<BenchReport> {
    let models: BenchModels<T> = bench_models(cfg)?;
    let mut notes = vec![format!(
        "{} warm-up runs per scheme excluded from timings",
        cfg.warmup
    )];
    if cfg.parallel {
        notes.push(
            "throughput mode: repetitions ran concurrently; samples are effective per-rep times"
                .into(),
        );
    }
    let mut entries = Vec::new();
    for &length in &cfg.lengths {
        let protein = synth_protein(cfg.seed.wrapping_add(length as u64), length);
        let graph: ProteinGraph<T> = featurize(&protein, &models.features)?;

        let one_shot = time_scheme(
            || {
                one_shot_decode(&graph, &models.oneshot).expect("one-shot decode");
            },
            cfg.reps,
            cfg.warmup,
            cfg.parallel,
            &mut notes,
            &format!("one_shot L={length}"),
        );
        let autoregressive = time_scheme(
            || {
                autoregressive_decode(&graph, &models.ar_encoder, &models.ar_decoder)
                    .expect("autoregressive decode");
            },
            cfg.reps,
            cfg.warmup,
            cfg.parallel,
            &mut notes,
            &format!("autoregressive L={length}"),
        );
        let ratio = autoregressive.median_ms / one_shot.median_ms;
        entries.push(LengthEntry { length, one_shot, autoregressive, ratio });
    }

    Ok(BenchReport {
        config: cfg.clone(),
        config_hash: config_hash(cfg, T::DTYPE.name()),
        env: EnvFingerprint {
            os: std::env::consts::OS.to_string(),
            arch: std::env::consts::ARCH.to_string(),
            cpu_threads: std::thread::available_parallelism().map_or(1, |n| n.get()),
            build_profile: if cfg!(debug_assertions) { "debug" } else { "release" },
            precision: T::DTYPE.name(),
            timer: "monotonic",
        },
        entries,
        notes,
    })
}
