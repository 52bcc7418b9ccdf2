//! Optimizer loop: Adam with gradient clipping, optional one-cycle
//! schedule, dropout, and the unit-norm re-projection of virtual-atom
//! coordinates after every step.

use crate::error::{Error, Result};
use crate::featurize::{merge_graphs, ProteinGraph};
use crate::model::{bind_set, make_dropout, pifold_forward, ModelParams};
use crate::real::{Precision, Real};
use crate::runner::Runner;
use crate::tape::Tape;
use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    #[default]
    Constant,
    OneCycle,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default = "default_lr")]
    pub lr: f64,
    /// Batch size in proteins.
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_precision")]
    pub precision: Precision,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    /// Global gradient-norm clip.
    #[serde(default = "default_clip")]
    pub clip_norm: f64,
    #[serde(default)]
    pub schedule: Schedule,
}

fn default_lr() -> f64 {
    1e-3
}
fn default_batch() -> usize {
    8
}
fn default_epochs() -> usize {
    20
}
fn default_precision() -> Precision {
    Precision::F64
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}
fn default_clip() -> f64 {
    1.0
}

impl Default for TrainConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults")
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 || self.batch_size == 0 || self.clip_norm <= 0.0 {
            return Err(Error::Config("rates and sizes must be positive".into()));
        }
        Ok(())
    }

    /// Learning rate at `step` of `total_steps`. One-cycle ramps from
    /// lr/25 to lr over the first 30% of steps, then cosine-anneals to
    /// lr/1e4.
    pub fn lr_at(&self, step: usize, total_steps: usize) -> f64 {
        match self.schedule {
            Schedule::Constant => self.lr,
            Schedule::OneCycle => {
                let total = total_steps.max(1) as f64;
                let warm = (0.3 * total).max(1.0);
                let s = step as f64;
                if s < warm {
                    let t = s / warm;
                    self.lr / 25.0 + (self.lr - self.lr / 25.0) * t
                } else {
                    let t = ((s - warm) / (total - warm).max(1.0)).clamp(0.0, 1.0);
                    let floor = self.lr / 1e4;
                    floor + (self.lr - floor) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
                }
            }
        }
    }
}

// ── Adam ─────────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct AdamState<T> {
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    t: usize,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &ModelParams<T>) -> Self {
        let zeros: Vec<Tensor<T>> = params
            .set
            .tensors
            .iter()
            .map(|t| Tensor::zeros(t.shape().to_vec()))
            .collect();
        AdamState { m: zeros.clone(), v: zeros, t: 0 }
    }
}

/// Re-project every virtual-atom row to unit norm (the constraint
/// `x² + y² + z² = 1` is enforced after each step, not by
/// reparameterization).
pub fn project_virtual_atoms<T: Real>(params: &mut ModelParams<T>) {
    let vt = &mut params.set.tensors[params.virtual_atoms];
    let rows = vt.rows();
    let data = vt.data_mut();
    for r in 0..rows {
        let row = &mut data[r * 3..(r + 1) * 3];
        let norm = (row[0] * row[0] + row[1] * row[1] + row[2] * row[2]).sqrt();
        if norm > T::from(1e-12).unwrap() {
            for v in row {
                *v /= norm;
            }
        } else {
            row[0] = T::one();
            row[1] = T::zero();
            row[2] = T::zero();
        }
    }
}

/// Worst deviation of any virtual-atom row from unit norm.
pub fn virtual_atom_norm_error<T: Real>(params: &ModelParams<T>) -> f64 {
    let vt = &params.set.tensors[params.virtual_atoms];
    let mut worst = 0.0f64;
    for r in 0..vt.rows() {
        let row = vt.row(r);
        let norm = (row[0] * row[0] + row[1] * row[1] + row[2] * row[2])
            .sqrt()
            .to_f64()
            .unwrap();
        worst = worst.max((norm - 1.0).abs());
    }
    worst
}

/// One gradient step on every parameter (including virtual-atom
/// coordinates) over a merged batch graph. Returns the batch loss.
pub fn train_step<T: Real>(
    batch: &ProteinGraph<T>,
    params: &mut ModelParams<T>,
    opt: &mut AdamState<T>,
    cfg: &TrainConfig,
    lr: f64,
    step: usize,
) -> Result<f64> {
    let mut tape = Tape::new();
    let vals = bind_set(&mut tape, &params.set);

    let dropout = if params.cfg.dropout > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (step as u64).wrapping_mul(0x9e37_79b9));
        Some(make_dropout::<T>(
            &mut rng,
            params.cfg.dropout,
            batch.n,
            batch.n_edges(),
            params.cfg.dim,
        ))
    } else {
        None
    };

    let logits = pifold_forward(&mut tape, batch, &vals, params, dropout.as_ref())?;
    let loss_var = tape.nll_loss(&logits, &batch.labels, &batch.label_mask)?;
    let loss = tape.value(loss_var).item().to_f64().unwrap();
    if !loss.is_finite() {
        return Err(Error::TrainAbort(format!(
            "non-finite loss {loss} at step {step} (lr {lr:.3e}, batch '{}')",
            batch.name
        )));
    }

    let grads = tape.backward(loss_var)?;
    let mut grad_tensors: Vec<Tensor<T>> = params
        .set
        .tensors
        .iter()
        .zip(&vals)
        .map(|(t, v)| grads.get_or_zeros(*v, t.shape()))
        .collect();

    // global-norm clip
    let total_sq: f64 = grad_tensors
        .iter()
        .map(|g| {
            let n = g.frob_norm().to_f64().unwrap();
            n * n
        })
        .sum();
    let total = total_sq.sqrt();
    if !total.is_finite() {
        return Err(Error::TrainAbort(format!(
            "non-finite gradient norm at step {step}"
        )));
    }
    if total > cfg.clip_norm {
        let scale = T::from(cfg.clip_norm / total).unwrap();
        for g in &mut grad_tensors {
            g.scale_in_place(scale);
        }
    }

    // Adam
    opt.t += 1;
    let b1: T = T::from(cfg.beta1).unwrap();
    let b2: T = T::from(cfg.beta2).unwrap();
    let eps: T = T::from(cfg.eps).unwrap();
    let lr_t: T = T::from(lr).unwrap();
    let bc1 = T::one() - T::from(cfg.beta1.powi(opt.t as i32)).unwrap();
    let bc2 = T::one() - T::from(cfg.beta2.powi(opt.t as i32)).unwrap();
    for (idx, g) in grad_tensors.iter().enumerate() {
        let m = opt.m[idx].data_mut();
        let v = opt.v[idx].data_mut();
        let p = params.set.tensors[idx].data_mut();
        for i in 0..p.len() {
            let gi = g.data()[i];
            m[i] = b1 * m[i] + (T::one() - b1) * gi;
            v[i] = b2 * v[i] + (T::one() - b2) * gi * gi;
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            p[i] -= lr_t * mhat / (vhat.sqrt() + eps);
        }
    }

    project_virtual_atoms(params);
    Ok(loss)
}

/// One line of the training metrics log.
#[derive(Debug, Clone, Serialize)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
    pub wall_ms: f64,
}

/// Epoch loop over featurized graphs: seeded shuffling, batching by
/// protein count, one optimizer step per batch.
pub fn train_loop<T: Real>(
    graphs: &[ProteinGraph<T>],
    params: &mut ModelParams<T>,
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&StepLog),
) -> Result<()> {
    cfg.validate()?;
    if graphs.is_empty() {
        return Err(Error::Invalid("no training graphs".into()));
    }
    let mut opt = AdamState::new(params);
    let batches_per_epoch = graphs.len().div_ceil(cfg.batch_size);
    let total_steps = batches_per_epoch * cfg.epochs;
    let mut order: Vec<usize> = (0..graphs.len()).collect();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(epoch as u64));
        // Fisher-Yates
        for i in (1..order.len()).rev() {
            let j = rand::Rng::gen_range(&mut rng, 0..=i);
            order.swap(i, j);
        }
        for chunk in order.chunks(cfg.batch_size) {
            let started = std::time::Instant::now();
            let members: Vec<&ProteinGraph<T>> = chunk.iter().map(|&i| &graphs[i]).collect();
            let batch = merge_graphs(&members)?;
            let lr = cfg.lr_at(step, total_steps);
            let loss = train_step(&batch, params, &mut opt, cfg, lr, step)?;
            step += 1;
            on_step(&StepLog {
                step,
                epoch,
                loss,
                lr,
                wall_ms: started.elapsed().as_secs_f64() * 1e3,
            });
        }
    }
    Ok(())
}
