//! k-NN residue graphs and node/edge feature assembly.
//!
//! Feature matrices split into two kinds of blocks, laid out in a fixed
//! documented order:
//!
//! - *static* blocks depend only on coordinates (real-atom RBF distances,
//!   backbone angles, directions, relative-rotation quaternions, sequence
//!   position encodings) and are computed once per protein;
//! - *virtual* blocks depend on the learnable virtual-atom coordinates and
//!   are re-evaluated through a [`Runner`] on every forward pass, keeping
//!   them differentiable.
//!
//! Masked residues are excluded from k-NN candidacy and never appear as
//! graph nodes, so they can neither leak labels nor receive them.

use crate::error::{Error, Result};
use crate::geometry::{
    self, backbone_angles, direction_features, local_frames, quaternion_rel, LocalFrame, RbfSpec,
};
use crate::ops::FramesCast;
use crate::protein::Protein;
use crate::real::Real;
use crate::runner::Runner;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

pub const LAYOUT_VERSION: &str = "feature-layout-v1";

// ── Atoms and typed pairs ────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Atom {
    N,
    Ca,
    C,
    O,
}

impl Atom {
    pub const ALL: [Atom; 4] = [Atom::N, Atom::Ca, Atom::C, Atom::O];

    pub fn label(self) -> &'static str {
        match self {
            Atom::N => "N",
            Atom::Ca => "CA",
            Atom::C => "C",
            Atom::O => "O",
        }
    }

    pub fn pos(self, p: &Protein, i: usize) -> [f64; 3] {
        match self {
            Atom::N => p.n[i],
            Atom::Ca => p.ca[i],
            Atom::C => p.c[i],
            Atom::O => p.o[i],
        }
    }
}

/// The six unordered intra-residue atom pairs, in canonical order.
pub const NODE_PAIRS: [(Atom, Atom); 6] = [
    (Atom::N, Atom::Ca),
    (Atom::N, Atom::C),
    (Atom::N, Atom::O),
    (Atom::Ca, Atom::C),
    (Atom::Ca, Atom::O),
    (Atom::C, Atom::O),
];

/// The ten typed inter-residue pairs (A from the source residue j, B from
/// the target residue i).
pub fn default_edge_pairs() -> Vec<(Atom, Atom)> {
    vec![
        (Atom::Ca, Atom::Ca),
        (Atom::Ca, Atom::C),
        (Atom::Ca, Atom::N),
        (Atom::Ca, Atom::O),
        (Atom::C, Atom::C),
        (Atom::C, Atom::N),
        (Atom::C, Atom::O),
        (Atom::N, Atom::N),
        (Atom::N, Atom::O),
        (Atom::O, Atom::O),
    ]
}

// ── Configuration ────────────────────────────────────────────────────

/// Feature-family switches plus graph and encoding parameters. The six
/// family flags mirror the node/edge ablation grid; the distance-pair
/// whitelist and virtual-atom count mirror the distance ablation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureConfig {
    pub node_distance: bool,
    pub node_angle: bool,
    pub node_direction: bool,
    pub edge_distance: bool,
    pub edge_angle: bool,
    pub edge_direction: bool,
    /// Sinusoidal encoding of the clipped sequence offset j − i on edges.
    pub edge_position_encoding: bool,
    pub edge_pairs: Vec<(Atom, Atom)>,
    /// Number of learnable virtual atoms, 0..=3.
    pub n_virtual: usize,
    /// Neighbors per residue.
    pub k: usize,
    pub rbf: RbfSpec,
    pub pos_clip: i64,
    pub pos_dim: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            node_distance: true,
            node_angle: true,
            node_direction: true,
            edge_distance: true,
            edge_angle: true,
            edge_direction: true,
            edge_position_encoding: true,
            edge_pairs: default_edge_pairs(),
            n_virtual: 3,
            k: 30,
            rbf: RbfSpec::default(),
            pos_clip: 32,
            pos_dim: 16,
        }
    }
}

impl FeatureConfig {
    pub fn validate(&self) -> Result<()> {
        let families = [
            self.node_distance,
            self.node_angle,
            self.node_direction,
            self.edge_distance,
            self.edge_angle,
            self.edge_direction,
        ];
        if !families.iter().any(|&f| f) {
            return Err(Error::Config("at least one feature family must be enabled".into()));
        }
        if self.k < 1 {
            return Err(Error::Config("k must be >= 1".into()));
        }
        if self.n_virtual > 3 {
            return Err(Error::Config(format!("n_virtual {} > 3", self.n_virtual)));
        }
        if self.pos_dim == 0 || !self.pos_dim.is_multiple_of(2) {
            return Err(Error::Config("pos_dim must be a positive even number".into()));
        }
        if self.rbf.count < 2 || self.rbf.max <= self.rbf.min {
            return Err(Error::Config("rbf spec needs >= 2 centers and max > min".into()));
        }
        for (i, p) in self.edge_pairs.iter().enumerate() {
            if self.edge_pairs[..i].contains(p) {
                return Err(Error::Config(format!(
                    "duplicate edge pair {}-{}",
                    p.0.label(),
                    p.1.label()
                )));
            }
        }
        Ok(())
    }

    fn virtual_node_pairs(&self) -> Vec<(usize, usize)> {
        let mut pairs = Vec::new();
        for k in 0..self.n_virtual {
            for l in k + 1..self.n_virtual {
                pairs.push((k, l));
            }
        }
        pairs
    }

    fn virtual_edge_pairs(&self) -> Vec<(usize, usize)> {
        let mut pairs = Vec::new();
        for k in 0..self.n_virtual {
            for l in 0..self.n_virtual {
                pairs.push((k, l));
            }
        }
        pairs
    }
}

// ── Layout ───────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayoutEntry {
    pub name: String,
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FeatureLayout {
    pub version: &'static str,
    pub node: Vec<LayoutEntry>,
    pub edge: Vec<LayoutEntry>,
    pub f_n: usize,
    pub f_e: usize,
}

impl FeatureLayout {
    pub fn describe(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("{} (f_n = {}, f_e = {})\n", self.version, self.f_n, self.f_e));
        out.push_str("node features:\n");
        for e in &self.node {
            out.push_str(&format!("  [{:>4}, {:>4})  {}\n", e.start, e.end, e.name));
        }
        out.push_str("edge features:\n");
        for e in &self.edge {
            out.push_str(&format!("  [{:>4}, {:>4})  {}\n", e.start, e.end, e.name));
        }
        out
    }
}

/// Column layout implied by a configuration. This is the single source of
/// truth for feature order; assembly walks the same lists.
pub fn layout(cfg: &FeatureConfig) -> FeatureLayout {
    let nr = cfg.rbf.count;
    let mut node = Vec::new();
    let mut cursor = 0usize;
    let push = |list: &mut Vec<LayoutEntry>, cursor: &mut usize, name: String, width: usize| {
        list.push(LayoutEntry { name, start: *cursor, end: *cursor + width });
        *cursor += width;
    };

    if cfg.node_distance {
        for (a, b) in NODE_PAIRS {
            push(&mut node, &mut cursor, format!("node.dist.{}-{}", a.label(), b.label()), nr);
        }
        for (k, l) in cfg.virtual_node_pairs() {
            push(&mut node, &mut cursor, format!("node.dist.V{k}-V{l}"), nr);
        }
    }
    if cfg.node_angle {
        for name in ["alpha", "beta", "gamma", "omega", "phi", "psi"] {
            push(&mut node, &mut cursor, format!("node.angle.{name}"), 2);
        }
    }
    if cfg.node_direction {
        for a in [Atom::N, Atom::C, Atom::O] {
            push(&mut node, &mut cursor, format!("node.dir.{}", a.label()), 3);
        }
    }
    let f_n = cursor;

    let mut edge = Vec::new();
    cursor = 0;
    if cfg.edge_distance {
        for (a, b) in &cfg.edge_pairs {
            push(&mut edge, &mut cursor, format!("edge.dist.{}-{}", a.label(), b.label()), nr);
        }
        for (k, l) in cfg.virtual_edge_pairs() {
            push(&mut edge, &mut cursor, format!("edge.dist.V{k}-V{l}"), nr);
        }
    }
    if cfg.edge_angle {
        push(&mut edge, &mut cursor, "edge.quat".into(), 4);
    }
    if cfg.edge_direction {
        for a in Atom::ALL {
            push(&mut edge, &mut cursor, format!("edge.dir.{}", a.label()), 3);
        }
    }
    if cfg.edge_position_encoding {
        push(&mut edge, &mut cursor, "edge.posenc".into(), cfg.pos_dim);
    }
    let f_e = cursor;

    FeatureLayout { version: LAYOUT_VERSION, node, edge, f_n, f_e }
}

/// Hex digest of the layout description, used to pin checkpoints to a
/// feature order.
pub fn layout_hash(cfg: &FeatureConfig) -> String {
    use sha2::{Digest, Sha256};
    let mut hasher = Sha256::new();
    hasher.update(layout(cfg).describe().as_bytes());
    let out = hasher.finalize();
    out.iter().map(|b| format!("{b:02x}")).collect()
}

// ── k-NN graph ───────────────────────────────────────────────────────

/// Directed edges j→i from each residue's `min(k, n−1)` nearest neighbors
/// by CA–CA distance, ties broken by lower index, self excluded. Edges are
/// emitted target-major, so `tgt` is sorted and segments keyed by target
/// are contiguous.
pub fn build_knn_graph(ca: &[[f64; 3]], k: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    let n = ca.len();
    if n < 2 {
        return Err(Error::Invalid(format!("k-NN graph needs n >= 2, got {n}")));
    }
    let take = k.min(n - 1);
    let mut src = Vec::with_capacity(n * take);
    let mut tgt = Vec::with_capacity(n * take);
    let mut cand: Vec<(f64, usize)> = Vec::with_capacity(n - 1);
    for i in 0..n {
        cand.clear();
        for (j, cj) in ca.iter().enumerate() {
            if j == i {
                continue;
            }
            let dx = cj[0] - ca[i][0];
            let dy = cj[1] - ca[i][1];
            let dz = cj[2] - ca[i][2];
            cand.push((dx * dx + dy * dy + dz * dz, j));
        }
        cand.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap());
        for &(_, j) in cand.iter().take(take) {
            src.push(j);
            tgt.push(i);
        }
    }
    Ok((src, tgt))
}

// ── Graph container ──────────────────────────────────────────────────

/// One block of a feature matrix, in layout order.
#[derive(Debug, Clone, PartialEq)]
pub enum FeatPart<T> {
    /// Precomputed coordinate-derived block.
    Static(Tensor<T>),
    /// Intra-residue virtual-pair RBF distances (materialized per forward).
    VirtualNode,
    /// Cross-residue virtual-pair RBF distances (materialized per forward).
    VirtualEdge,
}

/// A featurized protein (or merged batch): k-NN edges, static feature
/// blocks, frames for virtual-atom placement, and per-node labels. Nodes
/// are the valid residues in chain order.
#[derive(Debug, Clone, PartialEq)]
pub struct ProteinGraph<T> {
    pub name: String,
    /// Graph nodes (valid residues).
    pub n: usize,
    /// Residues in the source protein, including masked ones.
    pub n_orig: usize,
    /// Node → position in the source protein.
    pub orig_index: Vec<usize>,
    /// Native residue codes per node.
    pub labels: Vec<usize>,
    /// Loss mask per node (all true: masked residues are not nodes).
    pub label_mask: Vec<bool>,
    pub src: Vec<usize>,
    pub tgt: Vec<usize>,
    /// Per-node protein id within a merged batch.
    pub protein_ids: Vec<usize>,
    pub n_proteins: usize,
    pub frames: Vec<LocalFrame>,
    pub frames_cast: FramesCast<T>,
    pub node_parts: Vec<FeatPart<T>>,
    pub edge_parts: Vec<FeatPart<T>>,
    pub config: FeatureConfig,
}

impl<T: Real> ProteinGraph<T> {
    pub fn n_edges(&self) -> usize {
        self.src.len()
    }
}

fn sinusoidal_posenc(delta: i64, dim: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(dim);
    let d = delta as f64;
    for u in 0..dim / 2 {
        let freq = 1.0 / 10000f64.powf(2.0 * u as f64 / dim as f64);
        out.push((d * freq).sin());
        out.push((d * freq).cos());
    }
    out
}

/// Build the static parts of a protein graph. Virtual blocks are recorded
/// as markers and materialized by [`bind_features`].
pub fn featurize<T: Real>(protein: &Protein, cfg: &FeatureConfig) -> Result<ProteinGraph<T>> {
    cfg.validate()?;
    protein.validate()?;

    let orig_index: Vec<usize> =
        (0..protein.len()).filter(|&i| protein.mask[i]).collect();
    let n = orig_index.len();
    if n == 0 {
        return Err(Error::Invalid(format!(
            "protein '{}' has no valid residues",
            protein.name
        )));
    }

    let all_frames = local_frames(protein);
    let frames: Vec<LocalFrame> = orig_index.iter().map(|&i| all_frames[i]).collect();
    let ca: Vec<[f64; 3]> = orig_index.iter().map(|&i| protein.ca[i]).collect();
    // a single valid residue yields the (valid) zero-edge graph
    let (src, tgt) = if n == 1 { (Vec::new(), Vec::new()) } else { build_knn_graph(&ca, cfg.k)? };
    let m = src.len();
    let nr = cfg.rbf.count;

    let mut node_parts: Vec<FeatPart<T>> = Vec::new();
    if cfg.node_distance {
        let mut data = Vec::with_capacity(n * 6 * nr);
        for &ri in &orig_index {
            for (a, b) in NODE_PAIRS {
                let d = geometry::distance(a.pos(protein, ri), b.pos(protein, ri));
                data.extend(cfg.rbf.encode_unchecked(d).into_iter().map(|v| T::from(v).unwrap()));
            }
        }
        node_parts.push(FeatPart::Static(Tensor::new(vec![n, 6 * nr], data)?));
        if !cfg.virtual_node_pairs().is_empty() {
            node_parts.push(FeatPart::VirtualNode);
        }
    }
    if cfg.node_angle {
        let angles = backbone_angles(protein);
        let mut data = Vec::with_capacity(n * 12);
        for &ri in &orig_index {
            for pair in angles[ri] {
                data.push(T::from(pair[0]).unwrap());
                data.push(T::from(pair[1]).unwrap());
            }
        }
        node_parts.push(FeatPart::Static(Tensor::new(vec![n, 12], data)?));
    }
    if cfg.node_direction {
        let mut data = Vec::with_capacity(n * 9);
        for (vi, &ri) in orig_index.iter().enumerate() {
            let atoms = [protein.n[ri], protein.c[ri], protein.o[ri]];
            let (rows, _) = direction_features(&frames[vi], &atoms);
            for row in rows {
                data.extend(row.iter().map(|&v| T::from(v).unwrap()));
            }
        }
        node_parts.push(FeatPart::Static(Tensor::new(vec![n, 9], data)?));
    }

    let mut edge_parts: Vec<FeatPart<T>> = Vec::new();
    if cfg.edge_distance {
        if !cfg.edge_pairs.is_empty() {
            let width = cfg.edge_pairs.len() * nr;
            let mut data = Vec::with_capacity(m * width);
            for e in 0..m {
                let rs = orig_index[src[e]];
                let rt = orig_index[tgt[e]];
                for (a, b) in &cfg.edge_pairs {
                    let d = geometry::distance(a.pos(protein, rs), b.pos(protein, rt));
                    data.extend(
                        cfg.rbf.encode_unchecked(d).into_iter().map(|v| T::from(v).unwrap()),
                    );
                }
            }
            edge_parts.push(FeatPart::Static(Tensor::new(vec![m, width], data)?));
        }
        if !cfg.virtual_edge_pairs().is_empty() {
            edge_parts.push(FeatPart::VirtualEdge);
        }
    }
    if cfg.edge_angle {
        let mut data = Vec::with_capacity(m * 4);
        for e in 0..m {
            let q = quaternion_rel(&frames[tgt[e]], &frames[src[e]])?;
            data.extend(q.iter().map(|&v| T::from(v).unwrap()));
        }
        edge_parts.push(FeatPart::Static(Tensor::new(vec![m, 4], data)?));
    }
    if cfg.edge_direction {
        let mut data = Vec::with_capacity(m * 12);
        for e in 0..m {
            let rs = orig_index[src[e]];
            let atoms = [protein.n[rs], protein.ca[rs], protein.c[rs], protein.o[rs]];
            let (rows, _) = direction_features(&frames[tgt[e]], &atoms);
            for row in rows {
                data.extend(row.iter().map(|&v| T::from(v).unwrap()));
            }
        }
        edge_parts.push(FeatPart::Static(Tensor::new(vec![m, 12], data)?));
    }
    if cfg.edge_position_encoding {
        let mut data = Vec::with_capacity(m * cfg.pos_dim);
        for e in 0..m {
            let delta = orig_index[src[e]] as i64 - orig_index[tgt[e]] as i64;
            let clipped = delta.clamp(-cfg.pos_clip, cfg.pos_clip);
            data.extend(
                sinusoidal_posenc(clipped, cfg.pos_dim)
                    .into_iter()
                    .map(|v| T::from(v).unwrap()),
            );
        }
        edge_parts.push(FeatPart::Static(Tensor::new(vec![m, cfg.pos_dim], data)?));
    }

    let frames_cast = FramesCast::from_frames(&frames);
    Ok(ProteinGraph {
        name: protein.name.clone(),
        n,
        n_orig: protein.len(),
        orig_index,
        labels: protein
            .mask
            .iter()
            .zip(&protein.seq)
            .filter(|(m, _)| **m)
            .map(|(_, &c)| c as usize)
            .collect(),
        label_mask: vec![true; n],
        src,
        tgt,
        protein_ids: vec![0; n],
        n_proteins: 1,
        frames,
        frames_cast,
        node_parts,
        edge_parts,
        config: cfg.clone(),
    })
}

/// Materialize node and edge feature matrices on a runner. `vparams` is the
/// `[n_virtual, 3]` virtual-atom tensor (or any `[0, 3]` value when unused);
/// the virtual blocks stay differentiable with respect to it. Returns
/// `None` for a side whose configured width is zero.
#[allow(clippy::type_complexity)]
pub fn bind_features<T: Real, R: Runner<T>>(
    r: &mut R,
    graph: &ProteinGraph<T>,
    vparams: &R::V,
) -> Result<(Option<R::V>, Option<R::V>)> {
    let cfg = &graph.config;
    let nv = cfg.n_virtual;

    let mut node_vals: Vec<R::V> = Vec::new();
    for part in &graph.node_parts {
        match part {
            FeatPart::Static(t) => node_vals.push(r.constant(t.clone())),
            FeatPart::VirtualNode => {
                let mut blocks = Vec::new();
                for (k, l) in cfg.virtual_node_pairs() {
                    let a = r.gather_rows(vparams, &[k])?;
                    let b = r.gather_rows(vparams, &[l])?;
                    blocks.push(r.rbf_dist(&a, &b, &cfg.rbf)?);
                }
                let row = r.concat_cols(&blocks)?;
                node_vals.push(r.repeat_row(&row, graph.n)?);
            }
            FeatPart::VirtualEdge => unreachable!("edge marker in node parts"),
        }
    }

    let mut edge_vals: Vec<R::V> = Vec::new();
    for part in &graph.edge_parts {
        match part {
            FeatPart::Static(t) => edge_vals.push(r.constant(t.clone())),
            FeatPart::VirtualEdge => {
                let placed = r.frame_map(vparams, &graph.frames_cast)?;
                let mut src_gather: Vec<R::V> = Vec::with_capacity(nv);
                let mut tgt_gather: Vec<R::V> = Vec::with_capacity(nv);
                for k in 0..nv {
                    let idx_s: Vec<usize> = graph.src.iter().map(|&s| s * nv + k).collect();
                    let idx_t: Vec<usize> = graph.tgt.iter().map(|&t| t * nv + k).collect();
                    src_gather.push(r.gather_rows(&placed, &idx_s)?);
                    tgt_gather.push(r.gather_rows(&placed, &idx_t)?);
                }
                let mut blocks = Vec::new();
                for (k, l) in cfg.virtual_edge_pairs() {
                    blocks.push(r.rbf_dist(&src_gather[k], &tgt_gather[l], &cfg.rbf)?);
                }
                edge_vals.push(r.concat_cols(&blocks)?);
            }
            FeatPart::VirtualNode => unreachable!("node marker in edge parts"),
        }
    }

    let node = if node_vals.is_empty() { None } else { Some(r.concat_cols(&node_vals)?) };
    let edge = if edge_vals.is_empty() { None } else { Some(r.concat_cols(&edge_vals)?) };
    Ok((node, edge))
}

/// Featurize and materialize dense matrices in one step (no gradients).
/// Zero-width sides come back as `[rows, 0]` tensors.
pub fn featurize_dense<T: Real>(
    protein: &Protein,
    cfg: &FeatureConfig,
    vparams: &Tensor<T>,
) -> Result<(ProteinGraph<T>, Tensor<T>, Tensor<T>)> {
    let graph = featurize::<T>(protein, cfg)?;
    let mut eval = crate::runner::Eval;
    let vp = Runner::<T>::constant(&mut eval, vparams.clone());
    let (node, edge) = bind_features(&mut eval, &graph, &vp)?;
    let n = graph.n;
    let m = graph.n_edges();
    Ok((
        graph,
        node.unwrap_or_else(|| Tensor::zeros(vec![n, 0])),
        edge.unwrap_or_else(|| Tensor::zeros(vec![m, 0])),
    ))
}

/// Merge featurized graphs into one batch graph. Per-protein features are
/// preserved exactly: edges never cross protein boundaries and the global
/// context segments follow `protein_ids`.
pub fn merge_graphs<T: Real>(graphs: &[&ProteinGraph<T>]) -> Result<ProteinGraph<T>> {
    let first = *graphs.first().ok_or_else(|| Error::Invalid("empty batch".into()))?;
    if graphs.len() == 1 {
        return Ok(first.clone());
    }
    for g in graphs {
        if g.config != first.config {
            return Err(Error::Invalid("cannot merge graphs with different configs".into()));
        }
        if g.node_parts.len() != first.node_parts.len()
            || g.edge_parts.len() != first.edge_parts.len()
        {
            return Err(Error::Invalid("cannot merge graphs with different part lists".into()));
        }
    }

    let mut merged = ProteinGraph {
        name: graphs.iter().map(|g| g.name.as_str()).collect::<Vec<_>>().join("+"),
        n: 0,
        n_orig: 0,
        orig_index: Vec::new(),
        labels: Vec::new(),
        label_mask: Vec::new(),
        src: Vec::new(),
        tgt: Vec::new(),
        protein_ids: Vec::new(),
        n_proteins: 0,
        frames: Vec::new(),
        frames_cast: FramesCast { q: Vec::new(), origin: Vec::new() },
        node_parts: Vec::new(),
        edge_parts: Vec::new(),
        config: first.config.clone(),
    };

    for g in graphs {
        let node_off = merged.n;
        let prot_off = merged.n_proteins;
        merged.src.extend(g.src.iter().map(|&s| s + node_off));
        merged.tgt.extend(g.tgt.iter().map(|&t| t + node_off));
        merged.protein_ids.extend(g.protein_ids.iter().map(|&p| p + prot_off));
        merged.orig_index.extend_from_slice(&g.orig_index);
        merged.labels.extend_from_slice(&g.labels);
        merged.label_mask.extend_from_slice(&g.label_mask);
        merged.frames.extend_from_slice(&g.frames);
        merged.frames_cast.q.extend_from_slice(&g.frames_cast.q);
        merged.frames_cast.origin.extend_from_slice(&g.frames_cast.origin);
        merged.n += g.n;
        merged.n_orig += g.n_orig;
        merged.n_proteins += g.n_proteins;
    }

    let stack = |select: fn(&ProteinGraph<T>) -> &Vec<FeatPart<T>>,
                 idx: usize|
     -> Result<FeatPart<T>> {
        match &select(first)[idx] {
            FeatPart::Static(t0) => {
                let cols = t0.cols();
                let mut data = Vec::new();
                let mut rows = 0;
                for g in graphs {
                    match &select(g)[idx] {
                        FeatPart::Static(t) => {
                            if t.cols() != cols {
                                return Err(Error::Invalid("mismatched part widths".into()));
                            }
                            rows += t.rows();
                            data.extend_from_slice(t.data());
                        }
                        _ => return Err(Error::Invalid("mismatched part kinds".into())),
                    }
                }
                Ok(FeatPart::Static(Tensor::new(vec![rows, cols], data)?))
            }
            FeatPart::VirtualNode => Ok(FeatPart::VirtualNode),
            FeatPart::VirtualEdge => Ok(FeatPart::VirtualEdge),
        }
    };
    for idx in 0..first.node_parts.len() {
        let part = stack(|g| &g.node_parts, idx)?;
        merged.node_parts.push(part);
    }
    for idx in 0..first.edge_parts.len() {
        let part = stack(|g| &g.edge_parts, idx)?;
        merged.edge_parts.push(part);
    }
    Ok(merged)
}

/// Expected feature widths from the configuration alone (the documented
/// arithmetic the layout must match).
pub fn expected_widths(cfg: &FeatureConfig) -> (usize, usize) {
    let nr = cfg.rbf.count;
    let nv = cfg.n_virtual;
    let mut f_n = 0;
    if cfg.node_distance {
        f_n += (6 + nv * (nv.saturating_sub(1)) / 2) * nr;
    }
    if cfg.node_angle {
        f_n += 12;
    }
    if cfg.node_direction {
        f_n += 9;
    }
    let mut f_e = 0;
    if cfg.edge_distance {
        f_e += (cfg.edge_pairs.len() + nv * nv) * nr;
    }
    if cfg.edge_angle {
        f_e += 4;
    }
    if cfg.edge_direction {
        f_e += 12;
    }
    if cfg.edge_position_encoding {
        f_e += cfg.pos_dim;
    }
    (f_n, f_e)
}
