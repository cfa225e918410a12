//! Pre-trainable message-passing backbones: GCN, SAGE, GIN, GAT.
//!
//! All four kinds share one message convention: the neighbor message along a
//! directed edge (u, v) is `H_u + edge_embedding(u, v)`, aggregated at v.
//! GCN means over `N(v) ∪ {v}`; SAGE, GIN and GAT aggregate over `N(v)` only,
//! with the empty-neighborhood aggregate defined as the zero vector.
//!
//! `conv_layer` returns the pre-activation output; the stack applies relu
//! between layers (not after the last) and dropout after every layer when
//! training. All K per-layer outputs are retained so downstream fusion can
//! combine scales.

use crate::error::{FtError, Result};
use crate::graph::GraphBatch;
use crate::params::ParamSet;
use crate::tensor::{Rng, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConvKind {
    Gcn,
    Sage,
    Gin,
    Gat,
}

impl std::str::FromStr for ConvKind {
    type Err = FtError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gcn" => Ok(ConvKind::Gcn),
            "sage" => Ok(ConvKind::Sage),
            "gin" => Ok(ConvKind::Gin),
            "gat" => Ok(ConvKind::Gat),
            _ => Err(FtError::Config(format!("unknown conv kind {s}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub conv: ConvKind,
    /// K, the number of message-passing layers.
    pub num_layers: usize,
    /// d, the hidden width.
    pub hidden_dim: usize,
    /// Vocabulary size per node feature slot. Slot 0's embedding table gets
    /// one extra reserved row (the mask token) in every model.
    pub node_cardinalities: Vec<usize>,
    pub edge_cardinalities: Vec<usize>,
    pub gin_epsilon: f64,
    pub gin_train_eps: bool,
    pub gat_heads: usize,
    pub dropout: f64,
}

impl BackboneConfig {
    pub fn new(conv: ConvKind, node_cards: Vec<usize>, edge_cards: Vec<usize>) -> Self {
        BackboneConfig {
            conv,
            num_layers: 5,
            hidden_dim: 300,
            node_cardinalities: node_cards,
            edge_cardinalities: edge_cards,
            gin_epsilon: 0.0,
            gin_train_eps: false,
            gat_heads: 2,
            dropout: 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 || self.hidden_dim == 0 {
            return Err(FtError::Config("K and d must be >= 1".into()));
        }
        if self.node_cardinalities.is_empty() {
            return Err(FtError::Config("need at least one node feature slot".into()));
        }
        if self.conv == ConvKind::Gat && self.hidden_dim % self.gat_heads != 0 {
            return Err(FtError::Config(format!(
                "hidden_dim {} not divisible by gat_heads {}",
                self.hidden_dim, self.gat_heads
            )));
        }
        Ok(())
    }

    /// Index reserved for the attribute-mask token in node slot 0.
    pub fn mask_token(&self) -> usize {
        self.node_cardinalities[0]
    }
}

#[derive(Debug, Clone)]
pub enum LayerIdx {
    Gcn { w: usize, b: usize },
    Sage { w: usize, b: usize },
    Gin { w1: usize, b1: usize, w2: usize, b2: usize, eps: usize },
    Gat { w: usize, att_src: usize, att_dst: usize, w_out: usize, b_out: usize },
}

/// Indices of backbone parameters inside a [`ParamSet`].
#[derive(Debug, Clone)]
pub struct BackboneIdx {
    pub node_tables: Vec<usize>,
    /// Per layer, per edge slot.
    pub edge_tables: Vec<Vec<usize>>,
    pub layers: Vec<LayerIdx>,
}

/// Push freshly initialized backbone parameters into `set` under the
/// "backbone." prefix. Matrices are uniform in [-1/sqrt(d), 1/sqrt(d)],
/// biases zero, GIN epsilon at its configured value.
pub fn build_backbone(cfg: &BackboneConfig, set: &mut ParamSet, rng: &mut Rng) -> BackboneIdx {
    let d = cfg.hidden_dim;
    let mut node_tables = Vec::new();
    for (s, &card) in cfg.node_cardinalities.iter().enumerate() {
        let rows = if s == 0 { card + 1 } else { card };
        node_tables.push(set.add(
            format!("backbone.node_embed.{s}"),
            Tensor::uniform_init(vec![rows, d], d, rng),
        ));
    }
    let mut edge_tables = Vec::new();
    let mut layers = Vec::new();
    for k in 0..cfg.num_layers {
        let mut per_layer = Vec::new();
        for (s, &card) in cfg.edge_cardinalities.iter().enumerate() {
            per_layer.push(set.add(
                format!("backbone.layer.{k}.edge_embed.{s}"),
                Tensor::uniform_init(vec![card, d], d, rng),
            ));
        }
        edge_tables.push(per_layer);
        let layer = match cfg.conv {
            ConvKind::Gcn => LayerIdx::Gcn {
                w: set.add(format!("backbone.layer.{k}.w"), Tensor::uniform_init(vec![d, d], d, rng)),
                b: set.add(format!("backbone.layer.{k}.b"), Tensor::zeros(vec![d])),
            },
            ConvKind::Sage => LayerIdx::Sage {
                w: set.add(
                    format!("backbone.layer.{k}.w"),
                    Tensor::uniform_init(vec![2 * d, d], d, rng),
                ),
                b: set.add(format!("backbone.layer.{k}.b"), Tensor::zeros(vec![d])),
            },
            ConvKind::Gin => LayerIdx::Gin {
                w1: set.add(
                    format!("backbone.layer.{k}.mlp_w1"),
                    Tensor::uniform_init(vec![d, 2 * d], d, rng),
                ),
                b1: set.add(format!("backbone.layer.{k}.mlp_b1"), Tensor::zeros(vec![2 * d])),
                w2: set.add(
                    format!("backbone.layer.{k}.mlp_w2"),
                    Tensor::uniform_init(vec![2 * d, d], d, rng),
                ),
                b2: set.add(format!("backbone.layer.{k}.mlp_b2"), Tensor::zeros(vec![d])),
                eps: set.add(
                    format!("backbone.layer.{k}.eps"),
                    Tensor::scalar(cfg.gin_epsilon),
                ),
            },
            ConvKind::Gat => {
                let dh = d / cfg.gat_heads;
                LayerIdx::Gat {
                    w: set.add(
                        format!("backbone.layer.{k}.w"),
                        Tensor::uniform_init(vec![d, d], d, rng),
                    ),
                    att_src: set.add(
                        format!("backbone.layer.{k}.att_src"),
                        Tensor::uniform_init(vec![cfg.gat_heads, dh], d, rng),
                    ),
                    att_dst: set.add(
                        format!("backbone.layer.{k}.att_dst"),
                        Tensor::uniform_init(vec![cfg.gat_heads, dh], d, rng),
                    ),
                    w_out: set.add(
                        format!("backbone.layer.{k}.w_out"),
                        Tensor::uniform_init(vec![d, d], d, rng),
                    ),
                    b_out: set.add(format!("backbone.layer.{k}.b_out"), Tensor::zeros(vec![d])),
                }
            }
        };
        layers.push(layer);
    }
    BackboneIdx {
        node_tables,
        edge_tables,
        layers,
    }
}

/// Analytic parameter count for a config; checkpoints must match it.
pub fn backbone_param_count(cfg: &BackboneConfig) -> usize {
    let d = cfg.hidden_dim;
    let mut n = 0;
    for (s, &card) in cfg.node_cardinalities.iter().enumerate() {
        n += (if s == 0 { card + 1 } else { card }) * d;
    }
    let per_edge: usize = cfg.edge_cardinalities.iter().map(|&c| c * d).sum();
    let per_layer = per_edge
        + match cfg.conv {
            ConvKind::Gcn => d * d + d,
            ConvKind::Sage => 2 * d * d + d,
            ConvKind::Gin => d * 2 * d + 2 * d + 2 * d * d + d + 1,
            ConvKind::Gat => 2 * d * d + 3 * d,
        };
    n + cfg.num_layers * per_layer
}

/// Widths of the adapter insertion points inside one layer's update
/// function, per conv kind (one per linear stage).
pub fn adapter_widths(cfg: &BackboneConfig) -> Vec<usize> {
    let d = cfg.hidden_dim;
    match cfg.conv {
        ConvKind::Gin => vec![2 * d, d],
        ConvKind::Gcn | ConvKind::Sage | ConvKind::Gat => vec![d],
    }
}

/// Hook invoked after each linear stage of a layer update; the adapter
/// strategy injects bottlenecks here, everything else passes through.
pub type StageHook<'h> = &'h mut dyn FnMut(&mut Tape, usize, usize, Var) -> Result<Var>;

/// Sum the slot embeddings for every node: H0[v] = sum_s table_s[x_vs].
pub fn embed(
    tape: &mut Tape,
    batch: &GraphBatch,
    cfg: &BackboneConfig,
    idx: &BackboneIdx,
    vars: &[Var],
) -> Result<Var> {
    let mut h: Option<Var> = None;
    for (s, &table) in idx.node_tables.iter().enumerate() {
        let ids: Vec<usize> = batch.node_feats.iter().map(|f| f[s]).collect();
        let rows = tape.gather_rows(vars[table], &ids).map_err(|_| FtError::Domain {
            op: "embed",
            msg: format!("node feature index out of vocabulary in slot {s}"),
        })?;
        h = Some(match h {
            None => rows,
            Some(acc) => tape.add(acc, rows)?,
        });
    }
    let _ = cfg;
    h.ok_or_else(|| FtError::Config("no node feature slots".into()))
}

/// Per-layer edge attribute embedding: one row per directed edge.
fn embed_edges(
    tape: &mut Tape,
    batch: &GraphBatch,
    idx: &BackboneIdx,
    vars: &[Var],
    layer: usize,
) -> Result<Option<Var>> {
    let tables = &idx.edge_tables[layer];
    if tables.is_empty() {
        return Ok(None);
    }
    let mut e: Option<Var> = None;
    for (s, &table) in tables.iter().enumerate() {
        let ids: Vec<usize> = batch.edge_feats.iter().map(|f| f[s]).collect();
        let rows = tape.gather_rows(vars[table], &ids).map_err(|_| FtError::Domain {
            op: "embed_edges",
            msg: format!("edge feature index out of vocabulary in slot {s}"),
        })?;
        e = Some(match e {
            None => rows,
            Some(acc) => tape.add(acc, rows)?,
        });
    }
    Ok(e)
}

/// One message-passing layer, pre-activation.
pub fn conv_layer(
    tape: &mut Tape,
    batch: &GraphBatch,
    cfg: &BackboneConfig,
    idx: &BackboneIdx,
    vars: &[Var],
    layer: usize,
    h: Var,
    hook: Option<StageHook>,
) -> Result<Var> {
    let n = batch.num_nodes;
    let src: Vec<usize> = batch.edges.iter().map(|&(u, _)| u).collect();
    let dst: Vec<usize> = batch.edges.iter().map(|&(_, v)| v).collect();

    let apply_hook = |tape: &mut Tape, stage: usize, v: Var, hook: &mut Option<StageHook>| {
        match hook {
            Some(f) => f(tape, layer, stage, v),
            None => Ok(v),
        }
    };
    let mut hook = hook;

    // Neighbor messages: H_u plus the layer's edge attribute embedding.
    let gathered = tape.gather_rows(h, &src)?;
    let msgs = match embed_edges(tape, batch, idx, vars, layer)? {
        Some(e) => tape.add(gathered, e)?,
        None => gathered,
    };

    match &idx.layers[layer] {
        LayerIdx::Gcn { w, b } => {
            // Mean over N(v) ∪ {v}.
            let summed = tape.segment_sum(msgs, &dst, n)?;
            let with_self = tape.add(summed, h)?;
            let degs = batch.in_degrees();
            let inv: Vec<f64> = degs.iter().map(|&dg| 1.0 / (dg as f64 + 1.0)).collect();
            let inv = tape.constant(inv, vec![n, 1]);
            let m = tape.scale_rows(with_self, inv)?;
            let z = tape.matmul(m, vars[*w])?;
            let z = tape.add_bias(z, vars[*b])?;
            apply_hook(tape, 0, z, &mut hook)
        }
        LayerIdx::Sage { w, b } => {
            let summed = tape.segment_sum(msgs, &dst, n)?;
            let degs = batch.in_degrees();
            let inv: Vec<f64> = degs
                .iter()
                .map(|&dg| if dg == 0 { 0.0 } else { 1.0 / dg as f64 })
                .collect();
            let inv = tape.constant(inv, vec![n, 1]);
            let m = tape.scale_rows(summed, inv)?;
            let cat = tape.concat_cols(&[h, m])?;
            let z = tape.matmul(cat, vars[*w])?;
            let z = tape.add_bias(z, vars[*b])?;
            apply_hook(tape, 0, z, &mut hook)
        }
        LayerIdx::Gin { w1, b1, w2, b2, eps } => {
            let summed = tape.segment_sum(msgs, &dst, n)?;
            let one_plus_eps = tape.add_scalar(vars[*eps], 1.0);
            let scaled_self = tape.scale(h, one_plus_eps)?;
            let base = tape.add(scaled_self, summed)?;
            let mid = tape.matmul(base, vars[*w1])?;
            let mid = tape.add_bias(mid, vars[*b1])?;
            let mid = tape.relu(mid);
            let mid = apply_hook(tape, 0, mid, &mut hook)?;
            let z = tape.matmul(mid, vars[*w2])?;
            let z = tape.add_bias(z, vars[*b2])?;
            apply_hook(tape, 1, z, &mut hook)
        }
        LayerIdx::Gat { w, att_src, att_dst, w_out, b_out } => {
            let heads = cfg.gat_heads;
            let dh = cfg.hidden_dim / heads;
            let t = tape.matmul(msgs, vars[*w])?; // [E, d]
            let tv = tape.matmul(h, vars[*w])?; // [N, d]
            let tv_dst = tape.gather_rows(tv, &dst)?; // [E, d]
            let mut head_outs = Vec::with_capacity(heads);
            for hd in 0..heads {
                let t_h = tape.slice_cols(t, hd * dh, (hd + 1) * dh)?;
                let a_src = tape.gather_rows(vars[*att_src], &[hd])?;
                let a_src = tape.reshape(a_src, vec![dh])?;
                let src_part = tape.mul_cols(t_h, a_src)?;
                let src_score = tape.sum_rows(src_part)?; // [E,1]
                let tv_h = tape.slice_cols(tv_dst, hd * dh, (hd + 1) * dh)?;
                let a_dst = tape.gather_rows(vars[*att_dst], &[hd])?;
                let a_dst = tape.reshape(a_dst, vec![dh])?;
                let dst_part = tape.mul_cols(tv_h, a_dst)?;
                let dst_score = tape.sum_rows(dst_part)?;
                let score = tape.add(src_score, dst_score)?;
                let score = tape.leaky_relu(score, 0.2);
                let alpha = tape.segment_softmax(score, &dst, n)?;
                let weighted = tape.scale_rows(t_h, alpha)?;
                head_outs.push(tape.segment_sum(weighted, &dst, n)?);
            }
            let m = if head_outs.len() == 1 {
                head_outs[0]
            } else {
                tape.concat_cols(&head_outs)?
            };
            let z = tape.matmul(m, vars[*w_out])?;
            let z = tape.add_bias(z, vars[*b_out])?;
            apply_hook(tape, 0, z, &mut hook)
        }
    }
}

/// Post-layer treatment: relu between layers (identity after the last),
/// dropout after every layer when training.
pub fn post_layer(
    tape: &mut Tape,
    cfg: &BackboneConfig,
    layer: usize,
    z: Var,
    train: bool,
    rng: &mut Rng,
) -> Result<Var> {
    let a = if layer + 1 < cfg.num_layers { tape.relu(z) } else { z };
    if train && cfg.dropout > 0.0 {
        tape.dropout(a, cfg.dropout, rng)
    } else {
        Ok(a)
    }
}

/// Vanilla stacked forward; returns all K per-layer outputs.
pub fn forward_plain(
    tape: &mut Tape,
    batch: &GraphBatch,
    cfg: &BackboneConfig,
    idx: &BackboneIdx,
    vars: &[Var],
    train: bool,
    rng: &mut Rng,
) -> Result<Vec<Var>> {
    let mut h = embed(tape, batch, cfg, idx, vars)?;
    let mut outs = Vec::with_capacity(cfg.num_layers);
    for k in 0..cfg.num_layers {
        let z = conv_layer(tape, batch, cfg, idx, vars, k, h, None)?;
        h = post_layer(tape, cfg, k, z, train, rng)?;
        outs.push(h);
    }
    Ok(outs)
}
