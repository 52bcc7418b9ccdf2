//! PiGNN encoder: learnable parameters, input projections, stacked layers
//! (MLP attention → node update → edge update → gated global context), and
//! the residue-type readout.

use crate::error::{Error, Result};
use crate::featurize::{bind_features, layout, FeatureConfig, ProteinGraph};
use crate::real::Real;
use crate::runner::Runner;
use crate::tensor::Tensor;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const N_CLASSES: usize = 20;

// ── Configuration ────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Hidden width d.
    #[serde(default = "default_dim")]
    pub dim: usize,
    /// Encoder depth.
    #[serde(default = "default_layers")]
    pub n_layers: usize,
    /// Attention heads; must divide `dim`.
    #[serde(default = "default_heads")]
    pub heads: usize,
    /// Dropout rate on projected node/edge features during training.
    #[serde(default = "default_dropout")]
    pub dropout: f64,
    #[serde(default)]
    pub features: FeatureConfig,
}

fn default_dim() -> usize {
    128
}
fn default_layers() -> usize {
    10
}
fn default_heads() -> usize {
    4
}
fn default_dropout() -> f64 {
    0.1
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            dim: default_dim(),
            n_layers: default_layers(),
            heads: default_heads(),
            dropout: default_dropout(),
            features: FeatureConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.features.validate()?;
        if self.n_layers == 0 {
            return Err(Error::Config("n_layers must be >= 1".into()));
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "heads {} must divide dim {}",
                self.heads, self.dim
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("dropout must be in [0, 1)".into()));
        }
        Ok(())
    }
}

// ── Parameter storage ────────────────────────────────────────────────

/// Flat named parameter store; index order is the canonical order for
/// optimizers, checkpoints and tape binding.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<T> {
    pub names: Vec<String>,
    pub tensors: Vec<Tensor<T>>,
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet { names: Vec::new(), tensors: Vec::new() }
    }

    pub fn push(&mut self, name: String, t: Tensor<T>) -> usize {
        self.names.push(name);
        self.tensors.push(t);
        self.names.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }
}

impl<T: Real> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MlpIdx {
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerIdx {
    pub att: MlpIdx,
    pub node: MlpIdx,
    pub edge: MlpIdx,
    pub gate: MlpIdx,
    pub node_norm: (usize, usize),
    pub edge_norm: (usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProjIdx {
    Affine { w: usize, b: usize },
    /// Learned constant embedding used when the configured feature width is
    /// zero, so ablations with a family switched off still run.
    Embed(usize),
}

/// All learnable tensors of the encoder, with typed indices into the set.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub cfg: ModelConfig,
    pub set: ParamSet<T>,
    pub virtual_atoms: usize,
    pub node_proj: ProjIdx,
    pub edge_proj: ProjIdx,
    pub layers: Vec<LayerIdx>,
    pub readout: (usize, usize),
}

/// Autoregressive decoder variant: extra PiGNN layers plus a label
/// embedding injected into edge features for already-decoded sources.
#[derive(Debug, Clone, PartialEq)]
pub struct ArDecoderParams<T> {
    pub set: ParamSet<T>,
    pub layers: Vec<LayerIdx>,
    pub label_embed: usize,
    pub n_layers: usize,
}

// ── Initialization ───────────────────────────────────────────────────

fn xavier<T: Real>(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<T> {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| T::from(rng.gen_range(-bound..bound)).unwrap())
        .collect();
    Tensor::new(vec![rows, cols], data).expect("shape fixed")
}

fn mlp_init<T: Real>(
    set: &mut ParamSet<T>,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    d_in: usize,
    d_hid: usize,
    d_out: usize,
) -> MlpIdx {
    MlpIdx {
        w1: set.push(format!("{prefix}.w1"), xavier(rng, d_in, d_hid)),
        b1: set.push(format!("{prefix}.b1"), Tensor::zeros(vec![d_hid])),
        w2: set.push(format!("{prefix}.w2"), xavier(rng, d_hid, d_out)),
        b2: set.push(format!("{prefix}.b2"), Tensor::zeros(vec![d_out])),
    }
}

fn layer_init<T: Real>(
    set: &mut ParamSet<T>,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    d: usize,
    heads: usize,
) -> LayerIdx {
    LayerIdx {
        att: mlp_init(set, rng, &format!("{prefix}.att"), 3 * d, d, heads),
        node: mlp_init(set, rng, &format!("{prefix}.node"), 2 * d, d, d),
        edge: mlp_init(set, rng, &format!("{prefix}.edge"), 3 * d, d, d),
        gate: mlp_init(set, rng, &format!("{prefix}.gate"), d, d, d),
        node_norm: (
            set.push(format!("{prefix}.node_norm.gain"), Tensor::filled(vec![d], T::one())),
            set.push(format!("{prefix}.node_norm.bias"), Tensor::zeros(vec![d])),
        ),
        edge_norm: (
            set.push(format!("{prefix}.edge_norm.gain"), Tensor::filled(vec![d], T::one())),
            set.push(format!("{prefix}.edge_norm.bias"), Tensor::zeros(vec![d])),
        ),
    }
}

/// Seeded unit-norm virtual-atom coordinates `[n_virtual, 3]`.
pub fn init_virtual_atoms<T: Real>(n_virtual: usize, seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x76a7_0c3d);
    let mut data = Vec::with_capacity(n_virtual * 3);
    for _ in 0..n_virtual {
        let v = loop {
            let v = [
                rng.gen::<f64>() * 2.0 - 1.0,
                rng.gen::<f64>() * 2.0 - 1.0,
                rng.gen::<f64>() * 2.0 - 1.0,
            ];
            let n = crate::geometry::norm(v);
            if n > 0.1 && n <= 1.0 {
                break crate::geometry::scale(v, 1.0 / n);
            }
        };
        data.extend(v.iter().map(|&x| T::from(x).unwrap()));
    }
    Tensor::new(vec![n_virtual, 3], data).expect("shape fixed")
}

/// Deterministic seeded initialization of all encoder parameters.
pub fn init_params<T: Real>(cfg: &ModelConfig, seed: u64) -> Result<ModelParams<T>> {
    cfg.validate()?;
    let lay = layout(&cfg.features);
    let d = cfg.dim;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut set = ParamSet::new();

    let virtual_atoms =
        set.push("virtual_atoms".into(), init_virtual_atoms(cfg.features.n_virtual, seed));

    let node_proj = if lay.f_n > 0 {
        ProjIdx::Affine {
            w: set.push("node_proj.w".into(), xavier(&mut rng, lay.f_n, d)),
            b: set.push("node_proj.b".into(), Tensor::zeros(vec![d])),
        }
    } else {
        ProjIdx::Embed(set.push("node_embed".into(), xavier(&mut rng, 1, d)))
    };
    let edge_proj = if lay.f_e > 0 {
        ProjIdx::Affine {
            w: set.push("edge_proj.w".into(), xavier(&mut rng, lay.f_e, d)),
            b: set.push("edge_proj.b".into(), Tensor::zeros(vec![d])),
        }
    } else {
        ProjIdx::Embed(set.push("edge_embed".into(), xavier(&mut rng, 1, d)))
    };

    let layers = (0..cfg.n_layers)
        .map(|l| layer_init(&mut set, &mut rng, &format!("enc.{l}"), d, cfg.heads))
        .collect();

    let readout = (
        set.push("readout.w".into(), xavier(&mut rng, d, N_CLASSES)),
        set.push("readout.b".into(), Tensor::zeros(vec![N_CLASSES])),
    );

    Ok(ModelParams { cfg: cfg.clone(), set, virtual_atoms, node_proj, edge_proj, layers, readout })
}

/// Seeded initialization of the autoregressive decoder stack.
pub fn init_ar_params<T: Real>(
    cfg: &ModelConfig,
    dec_layers: usize,
    seed: u64,
) -> Result<ArDecoderParams<T>> {
    cfg.validate()?;
    if dec_layers == 0 {
        return Err(Error::Config("autoregressive decoder needs >= 1 layer".into()));
    }
    let d = cfg.dim;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xdec0_dec0);
    let mut set = ParamSet::new();
    let label_embed = set.push("dec.label_embed".into(), xavier(&mut rng, N_CLASSES, d));
    let layers = (0..dec_layers)
        .map(|l| layer_init(&mut set, &mut rng, &format!("dec.{l}"), d, cfg.heads))
        .collect();
    Ok(ArDecoderParams { set, layers, label_embed, n_layers: dec_layers })
}

/// Register every tensor of a set on a runner as gradient-tracked
/// parameters, preserving index order.
pub fn bind_set<T: Real, R: Runner<T>>(r: &mut R, set: &ParamSet<T>) -> Vec<R::V> {
    set.tensors.iter().map(|t| r.param(t.clone())).collect()
}

// ── Dropout ──────────────────────────────────────────────────────────

/// Pre-scaled inverted-dropout masks for the projected node/edge features.
#[derive(Debug, Clone)]
pub struct Dropout<T> {
    pub node: Tensor<T>,
    pub edge: Tensor<T>,
}

pub fn make_dropout<T: Real>(
    rng: &mut ChaCha8Rng,
    rate: f64,
    n: usize,
    m: usize,
    d: usize,
) -> Dropout<T> {
    let keep = 1.0 - rate;
    let scale = T::from(1.0 / keep).unwrap();
    let mut draw = |count: usize| -> Vec<T> {
        (0..count)
            .map(|_| if rng.gen::<f64>() < keep { scale } else { T::zero() })
            .collect()
    };
    Dropout {
        node: Tensor::new(vec![n, d], draw(n * d)).expect("shape fixed"),
        edge: Tensor::new(vec![m, d], draw(m * d)).expect("shape fixed"),
    }
}

// ── Forward pass ─────────────────────────────────────────────────────

fn mlp_forward<T: Real, R: Runner<T>>(
    r: &mut R,
    vals: &[R::V],
    idx: &MlpIdx,
    x: &R::V,
) -> Result<R::V> {
    let h = r.matmul(x, &vals[idx.w1])?;
    let h = r.add_bias(&h, &vals[idx.b1])?;
    let h = r.gelu(&h)?;
    let y = r.matmul(&h, &vals[idx.w2])?;
    r.add_bias(&y, &vals[idx.b2])
}

/// Per-edge multi-head attention weights, softmax-normalized over each
/// target node's in-neighborhood:
/// `w_ji = AttMLP(h_j ‖ e_ji ‖ h_i)`, `a_ji = softmax_{j ∈ N(i)}(w_ji)`.
#[allow(clippy::too_many_arguments)]
pub fn attention_weights<T: Real, R: Runner<T>>(
    r: &mut R,
    h: &R::V,
    e: &R::V,
    src: &[usize],
    tgt: &[usize],
    n_nodes: usize,
    vals: &[R::V],
    layer: &LayerIdx,
) -> Result<R::V> {
    let h_src = r.gather_rows(h, src)?;
    let h_tgt = r.gather_rows(h, tgt)?;
    let cat = r.concat_cols(&[h_src, e.clone(), h_tgt])?;
    let w = mlp_forward(r, vals, &layer.att, &cat)?;
    r.segment_softmax(&w, tgt, n_nodes)
}

/// Attention-weighted node aggregation with residual + normalization:
/// `v_j = NodeMLP(e_ji ‖ h_j)`, `ĥ_i = LN(h_i + Σ_j a_ji ⊙ v_j)` with the
/// per-head weights scaling head-sized value slices.
#[allow(clippy::too_many_arguments)]
pub fn node_update<T: Real, R: Runner<T>>(
    r: &mut R,
    h: &R::V,
    e: &R::V,
    attn: &R::V,
    src: &[usize],
    tgt: &[usize],
    n_nodes: usize,
    vals: &[R::V],
    layer: &LayerIdx,
) -> Result<R::V> {
    let h_src = r.gather_rows(h, src)?;
    let v_in = r.concat_cols(&[e.clone(), h_src])?;
    let v = mlp_forward(r, vals, &layer.node, &v_in)?;
    let agg = r.segment_weighted_sum(attn, &v, tgt, n_nodes)?;
    let sum = r.add(h, &agg)?;
    r.layer_norm(&sum, &vals[layer.node_norm.0], &vals[layer.node_norm.1])
}

/// Edge refresh from updated endpoints:
/// `e_ji ← LN(e_ji + EdgeMLP(ĥ_j ‖ e_ji ‖ ĥ_i))`.
pub fn edge_update<T: Real, R: Runner<T>>(
    r: &mut R,
    h_hat: &R::V,
    e: &R::V,
    src: &[usize],
    tgt: &[usize],
    vals: &[R::V],
    layer: &LayerIdx,
) -> Result<R::V> {
    let h_src = r.gather_rows(h_hat, src)?;
    let h_tgt = r.gather_rows(h_hat, tgt)?;
    let cat = r.concat_cols(&[h_src, e.clone(), h_tgt])?;
    let upd = mlp_forward(r, vals, &layer.edge, &cat)?;
    let sum = r.add(e, &upd)?;
    r.layer_norm(&sum, &vals[layer.edge_norm.0], &vals[layer.edge_norm.1])
}

/// Gated global context: per-protein mean of node states, squashed through
/// GateMLP + sigmoid, applied multiplicatively. Linear in node count.
pub fn global_gate<T: Real, R: Runner<T>>(
    r: &mut R,
    h_hat: &R::V,
    protein_ids: &[usize],
    n_proteins: usize,
    vals: &[R::V],
    layer: &LayerIdx,
) -> Result<R::V> {
    let context = r.segment_mean(h_hat, protein_ids, n_proteins)?;
    let gate = mlp_forward(r, vals, &layer.gate, &context)?;
    let gate = r.sigmoid(&gate)?;
    let per_node = r.gather_rows(&gate, protein_ids)?;
    r.mul(h_hat, &per_node)
}

/// One full PiGNN layer: attention → node update → edge update → gate.
#[allow(clippy::too_many_arguments)]
pub fn pignn_layer<T: Real, R: Runner<T>>(
    r: &mut R,
    h: &R::V,
    e: &R::V,
    src: &[usize],
    tgt: &[usize],
    protein_ids: &[usize],
    n_proteins: usize,
    vals: &[R::V],
    layer: &LayerIdx,
) -> Result<(R::V, R::V)> {
    let n_nodes = protein_ids.len();
    if src.is_empty() {
        // zero-edge graph (single-residue protein): no messages to
        // aggregate, the residual path and gate still apply
        let h_hat = r.layer_norm(h, &vals[layer.node_norm.0], &vals[layer.node_norm.1])?;
        let h_next = global_gate(r, &h_hat, protein_ids, n_proteins, vals, layer)?;
        return Ok((h_next, e.clone()));
    }
    let attn = attention_weights(r, h, e, src, tgt, n_nodes, vals, layer)?;
    let h_hat = node_update(r, h, e, &attn, src, tgt, n_nodes, vals, layer)?;
    let e_next = edge_update(r, &h_hat, e, src, tgt, vals, layer)?;
    let h_next = global_gate(r, &h_hat, protein_ids, n_proteins, vals, layer)?;
    Ok((h_next, e_next))
}

/// Feature projection into the hidden width (or constant embeddings for
/// zero-width feature configs), with optional dropout.
pub fn project_inputs<T: Real, R: Runner<T>>(
    r: &mut R,
    graph: &ProteinGraph<T>,
    vals: &[R::V],
    params: &ModelParams<T>,
    dropout: Option<&Dropout<T>>,
) -> Result<(R::V, R::V)> {
    let vparams = &vals[params.virtual_atoms];
    let (node_feat, edge_feat) = bind_features(r, graph, vparams)?;

    let mut h = match (params.node_proj, node_feat) {
        (ProjIdx::Affine { w, b }, Some(nf)) => {
            let p = r.matmul(&nf, &vals[w])?;
            r.add_bias(&p, &vals[b])?
        }
        (ProjIdx::Embed(i), None) => r.repeat_row(&vals[i], graph.n)?,
        _ => {
            return Err(Error::Shape {
                op: "project_inputs",
                detail: "node feature width does not match projection kind".into(),
            })
        }
    };
    let mut e = match (params.edge_proj, edge_feat) {
        (ProjIdx::Affine { w, b }, Some(ef)) => {
            let p = r.matmul(&ef, &vals[w])?;
            r.add_bias(&p, &vals[b])?
        }
        (ProjIdx::Embed(i), None) => r.repeat_row(&vals[i], graph.n_edges())?,
        _ => {
            return Err(Error::Shape {
                op: "project_inputs",
                detail: "edge feature width does not match projection kind".into(),
            })
        }
    };
    if let Some(masks) = dropout {
        let nm = r.constant(masks.node.clone());
        let em = r.constant(masks.edge.clone());
        h = r.mul(&h, &nm)?;
        e = r.mul(&e, &em)?;
    }
    Ok((h, e))
}

/// Run a stack of layers over hidden states.
pub fn run_layers<T: Real, R: Runner<T>>(
    r: &mut R,
    mut h: R::V,
    mut e: R::V,
    graph: &ProteinGraph<T>,
    vals: &[R::V],
    layers: &[LayerIdx],
) -> Result<(R::V, R::V)> {
    for layer in layers {
        let (h2, e2) = pignn_layer(
            r,
            &h,
            &e,
            &graph.src,
            &graph.tgt,
            &graph.protein_ids,
            graph.n_proteins,
            vals,
            layer,
        )?;
        h = h2;
        e = e2;
    }
    Ok((h, e))
}

/// Final residue-type logits from node states.
pub fn readout<T: Real, R: Runner<T>>(
    r: &mut R,
    h: &R::V,
    vals: &[R::V],
    params: &ModelParams<T>,
) -> Result<R::V> {
    let logits = r.matmul(h, &vals[params.readout.0])?;
    r.add_bias(&logits, &vals[params.readout.1])
}

/// Projection + encoder stack, before the readout. The sequence never
/// enters: logits are a function of structure alone.
pub fn forward_hidden<T: Real, R: Runner<T>>(
    r: &mut R,
    graph: &ProteinGraph<T>,
    vals: &[R::V],
    params: &ModelParams<T>,
    dropout: Option<&Dropout<T>>,
) -> Result<(R::V, R::V)> {
    let (h, e) = project_inputs(r, graph, vals, params, dropout)?;
    run_layers(r, h, e, graph, vals, &params.layers)
}

/// Full one-shot forward pass: `[n, 20]` logits in a single pass with no
/// sequential dependency on residue index.
pub fn pifold_forward<T: Real, R: Runner<T>>(
    r: &mut R,
    graph: &ProteinGraph<T>,
    vals: &[R::V],
    params: &ModelParams<T>,
    dropout: Option<&Dropout<T>>,
) -> Result<R::V> {
    let (h, _e) = forward_hidden(r, graph, vals, params, dropout)?;
    readout(r, &h, vals, params)
}

/// Convenience: run the forward pass without gradients and return dense
/// logits.
pub fn forward_logits<T: Real>(
    graph: &ProteinGraph<T>,
    params: &ModelParams<T>,
) -> Result<Tensor<T>> {
    let mut eval = crate::runner::Eval;
    let vals = bind_set(&mut eval, &params.set);
    pifold_forward(&mut eval, graph, &vals, params, None)
}
