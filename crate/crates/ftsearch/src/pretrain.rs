//! Self-supervised pre-training objectives and checkpoint persistence.
//!
//! Two desk-scale objectives: edge prediction (score true edges above
//! sampled non-edges from final-layer inner products) and attribute masking
//! (recover a masked categorical slot from context). Both produce a
//! [`Checkpoint`]: the backbone descriptor plus all backbone tensors,
//! serialized bit-exactly.

use crate::error::{FtError, Result};
use crate::gnn::{build_backbone, forward_plain, BackboneConfig};
use crate::graph::{batch, Graph};
use crate::optim::Adam;
use crate::params::ParamSet;
use crate::tensor::{rng_from_seed, Tape, Tensor};
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use std::io::{Read as _, Write as _};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"FTCKPT01";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub objective: String,
    pub seed: u64,
    pub epochs: usize,
}

/// Serialized backbone: descriptor + named tensors. `load(save(c))` is
/// bit-exact, and the descriptor alone rebuilds the parameter layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: BackboneConfig,
    pub provenance: Provenance,
    pub tensors: Vec<(String, Tensor)>,
}

#[derive(Serialize, Deserialize)]
struct TensorDesc {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    config: BackboneConfig,
    provenance: Provenance,
    tensors: Vec<TensorDesc>,
}

impl Checkpoint {
    fn from_params(
        config: &BackboneConfig,
        params: &ParamSet,
        provenance: Provenance,
    ) -> Checkpoint {
        let tensors = params
            .iter()
            .filter(|(n, _)| n.starts_with("backbone."))
            .map(|(n, t)| (n.to_string(), t.clone()))
            .collect();
        Checkpoint {
            format_version: CHECKPOINT_VERSION,
            config: config.clone(),
            provenance,
            tensors,
        }
    }

    /// Rebuild backbone parameters from the descriptor and stored tensors.
    pub fn build_params(&self) -> Result<(ParamSet, crate::gnn::BackboneIdx)> {
        let mut set = ParamSet::new();
        let idx = build_backbone(&self.config, &mut set, &mut rng_from_seed(0));
        if set.len() != self.tensors.len() {
            return Err(FtError::Checkpoint(format!(
                "descriptor expects {} tensors, checkpoint holds {}",
                set.len(),
                self.tensors.len()
            )));
        }
        for (i, (name, t)) in self.tensors.iter().enumerate() {
            if set.name(i) != name {
                return Err(FtError::Checkpoint(format!(
                    "tensor {i} named {name}, descriptor expects {}",
                    set.name(i)
                )));
            }
            if set.tensor(i).shape != t.shape {
                return Err(FtError::Checkpoint(format!(
                    "tensor {name} shape {:?} does not match descriptor {:?}",
                    t.shape,
                    set.tensor(i).shape
                )));
            }
            set.tensor_mut(i).data = t.data.clone();
        }
        Ok((set, idx))
    }

    /// Error unless the checkpoint was produced for `expected`.
    pub fn validate_config(&self, expected: &BackboneConfig) -> Result<()> {
        if &self.config != expected {
            return Err(FtError::Checkpoint(format!(
                "descriptor mismatch: checkpoint built for {:?}, expected {:?}",
                self.config.conv, expected.conv
            )));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(|(_, t)| t.numel()).sum()
    }
}

/// Write the checkpoint container: magic, JSON header, raw little-endian
/// f64 payload.
pub fn save(c: &Checkpoint, path: &std::path::Path) -> Result<()> {
    let mut descs = Vec::new();
    let mut offset = 0usize;
    for (name, t) in &c.tensors {
        descs.push(TensorDesc {
            name: name.clone(),
            shape: t.shape.clone(),
            offset,
            len: t.numel(),
        });
        offset += t.numel();
    }
    let header = Header {
        format_version: c.format_version,
        config: c.config.clone(),
        provenance: c.provenance.clone(),
        tensors: descs,
    };
    let header_bytes = serde_json::to_vec(&header)
        .map_err(|e| FtError::Checkpoint(format!("header encode: {e}")))?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(MAGIC)?;
    f.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
    f.write_all(&header_bytes)?;
    for (_, t) in &c.tensors {
        for v in &t.data {
            f.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn load(path: &std::path::Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(FtError::Checkpoint(
            "not a checkpoint container (bad magic or truncated)".into(),
        ));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    if bytes.len() < 16 + header_len {
        return Err(FtError::Checkpoint("truncated header".into()));
    }
    let header: Header = serde_json::from_slice(&bytes[16..16 + header_len])
        .map_err(|e| FtError::Checkpoint(format!("header parse: {e}")))?;
    if header.format_version != CHECKPOINT_VERSION {
        return Err(FtError::Checkpoint(format!(
            "format version {} unsupported, this build reads {CHECKPOINT_VERSION}",
            header.format_version
        )));
    }
    let payload = &bytes[16 + header_len..];
    let total: usize = header.tensors.iter().map(|d| d.len).sum();
    if payload.len() != total * 8 {
        return Err(FtError::Checkpoint(format!(
            "truncated payload: {} bytes, expected {}",
            payload.len(),
            total * 8
        )));
    }
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for d in &header.tensors {
        if d.shape.iter().product::<usize>() != d.len {
            return Err(FtError::Checkpoint(format!(
                "tensor {} shape {:?} disagrees with payload length {}",
                d.name, d.shape, d.len
            )));
        }
        let start = d.offset * 8;
        let data: Vec<f64> = payload[start..start + d.len * 8]
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        tensors.push((d.name.clone(), Tensor::new(d.shape.clone(), data)?));
    }
    let ckpt = Checkpoint {
        format_version: header.format_version,
        config: header.config,
        provenance: header.provenance,
        tensors,
    };
    // Cross-check stored shapes against the descriptor's analytic layout.
    ckpt.build_params()?;
    Ok(ckpt)
}

// ---------------------------------------------------------------------------
// Objectives
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct PretrainConfig {
    pub backbone: BackboneConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub mask_rate: f64,
}

impl PretrainConfig {
    pub fn new(backbone: BackboneConfig) -> Self {
        PretrainConfig {
            backbone,
            epochs: 20,
            batch_size: 32,
            lr: 1e-3,
            mask_rate: 0.15,
        }
    }
}

pub struct PretrainOutcome {
    pub checkpoint: Checkpoint,
    pub epoch_losses: Vec<f64>,
}

fn shuffled_batches(n: usize, batch_size: usize, rng: &mut crate::tensor::Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch_size.max(1)).map(|c| c.to_vec()).collect()
}

/// Train the backbone so inner products of final-layer representations score
/// true edges above uniformly resampled non-edges (one negative per
/// positive, binary cross-entropy).
pub fn run_edgepred(graphs: &[Graph], cfg: &PretrainConfig, seed: u64) -> Result<PretrainOutcome> {
    cfg.backbone.validate()?;
    if graphs.iter().all(|g| g.edges.is_empty()) {
        return Err(FtError::Data("edge prediction on a dataset with zero edges".into()));
    }
    let mut rng = rng_from_seed(seed);
    let mut params = ParamSet::new();
    let idx = build_backbone(&cfg.backbone, &mut params, &mut rng);
    let mut opt = Adam::new(cfg.lr, &params);
    let trainable = vec![true; params.len()];
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let mut epoch_loss = 0.0;
        let mut batches_seen = 0usize;
        for (bi, chunk) in shuffled_batches(graphs.len(), cfg.batch_size, &mut rng)
            .into_iter()
            .enumerate()
        {
            let members: Vec<&Graph> = chunk.iter().map(|&i| &graphs[i]).collect();
            let gb = batch(&members)?;

            // Positive pairs (each undirected edge once) plus one sampled
            // non-edge per positive from the same graph.
            use std::collections::HashSet;
            let edge_set: HashSet<(usize, usize)> = gb.edges.iter().copied().collect();
            let mut pos = Vec::new();
            let mut neg = Vec::new();
            for g in 0..gb.num_graphs {
                let (ns, ne) = (gb.node_offsets[g], gb.node_offsets[g + 1]);
                if ne - ns < 2 {
                    continue;
                }
                for ei in gb.edge_offsets[g]..gb.edge_offsets[g + 1] {
                    let (u, v) = gb.edges[ei];
                    if u >= v {
                        continue;
                    }
                    let mut found = None;
                    for _ in 0..20 {
                        let w = rng.gen_range(ns..ne);
                        if w != u && !edge_set.contains(&(u, w)) {
                            found = Some((u, w));
                            break;
                        }
                    }
                    if let Some(nw) = found {
                        pos.push((u, v));
                        neg.push(nw);
                    }
                }
            }
            if pos.is_empty() {
                continue;
            }

            let mut tape = Tape::new();
            let vars = params.register(&mut tape, &trainable);
            let outs = forward_plain(&mut tape, &gb, &cfg.backbone, &idx, &vars, true, &mut rng)?;
            let h = *outs.last().unwrap();

            let (us, vs): (Vec<usize>, Vec<usize>) =
                pos.iter().chain(neg.iter()).copied().unzip();
            let hu = tape.gather_rows(h, &us)?;
            let hv = tape.gather_rows(h, &vs)?;
            let prod = tape.mul(hu, hv)?;
            let scores = tape.sum_rows(prod)?; // [(P+N), 1]
            let labels: Vec<f64> = std::iter::repeat(1.0)
                .take(pos.len())
                .chain(std::iter::repeat(0.0).take(neg.len()))
                .collect();
            let y = tape.constant(labels, vec![pos.len() + neg.len(), 1]);
            let sp = tape.softplus(scores);
            let ys = tape.mul(scores, y)?;
            let per_pair = tape.sub(sp, ys)?;
            let loss = tape.mean(per_pair);

            let loss_val = tape.value(loss)[0];
            if !loss_val.is_finite() {
                return Err(FtError::NonFiniteLoss { epoch, batch: bi });
            }
            epoch_loss += loss_val;
            batches_seen += 1;
            tape.backward(loss)?;
            let grads: Vec<Option<Vec<f64>>> = vars
                .iter()
                .map(|&v| tape.grad(v).map(|g| g.to_vec()))
                .collect();
            opt.step(&mut params, &grads, &trainable);
        }
        epoch_losses.push(if batches_seen > 0 { epoch_loss / batches_seen as f64 } else { 0.0 });
    }

    Ok(PretrainOutcome {
        checkpoint: Checkpoint::from_params(
            &cfg.backbone,
            &params,
            Provenance {
                objective: "edgepred".into(),
                seed,
                epochs: cfg.epochs,
            },
        ),
        epoch_losses,
    })
}

pub fn pretrain_edgepred(graphs: &[Graph], cfg: &PretrainConfig, seed: u64) -> Result<Checkpoint> {
    Ok(run_edgepred(graphs, cfg, seed)?.checkpoint)
}

/// Internal result of attribute-mask training: checkpoint plus the trained
/// decoder, which evaluation helpers need but checkpoints discard.
pub struct AttrMaskOutcome {
    pub checkpoint: Checkpoint,
    pub epoch_losses: Vec<f64>,
    pub full_params: ParamSet,
    pub backbone_idx: crate::gnn::BackboneIdx,
    pub decoder_w: usize,
    pub decoder_b: usize,
}

/// Mask the first categorical slot of a fraction of nodes (replacing it with
/// the reserved mask token) and train a linear decoder on final-layer
/// representations to recover the original index.
pub fn run_attrmask(
    graphs: &[Graph],
    cfg: &PretrainConfig,
    mask_rate: f64,
    seed: u64,
) -> Result<AttrMaskOutcome> {
    cfg.backbone.validate()?;
    if !(0.0..1.0).contains(&mask_rate) || mask_rate <= 0.0 {
        return Err(FtError::Config(format!("mask_rate {mask_rate} outside (0, 1)")));
    }
    let vocab = cfg.backbone.node_cardinalities[0];
    if vocab < 2 {
        return Err(FtError::Config(
            "attribute masking with vocabulary of size 1: nothing to predict".into(),
        ));
    }
    let d = cfg.backbone.hidden_dim;
    let mut rng = rng_from_seed(seed);
    let mut params = ParamSet::new();
    let idx = build_backbone(&cfg.backbone, &mut params, &mut rng);
    let dec_w = params.add("decoder.w", Tensor::uniform_init(vec![d, vocab], d, &mut rng));
    let dec_b = params.add("decoder.b", Tensor::zeros(vec![vocab]));
    let mut opt = Adam::new(cfg.lr, &params);
    let trainable = vec![true; params.len()];
    let mask_token = cfg.backbone.mask_token();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let mut epoch_loss = 0.0;
        let mut batches_seen = 0usize;
        for (bi, chunk) in shuffled_batches(graphs.len(), cfg.batch_size, &mut rng)
            .into_iter()
            .enumerate()
        {
            let members: Vec<&Graph> = chunk.iter().map(|&i| &graphs[i]).collect();
            let mut gb = batch(&members)?;
            let masked: Vec<usize> = (0..gb.num_nodes)
                .filter(|_| rng.gen::<f64>() < mask_rate)
                .collect();
            if masked.is_empty() {
                continue; // zero masked nodes: the batch contributes no loss
            }
            let targets: Vec<usize> = masked.iter().map(|&v| gb.node_feats[v][0]).collect();
            for &v in &masked {
                gb.node_feats[v][0] = mask_token;
            }

            let mut tape = Tape::new();
            let vars = params.register(&mut tape, &trainable);
            let outs = forward_plain(&mut tape, &gb, &cfg.backbone, &idx, &vars, true, &mut rng)?;
            let h = *outs.last().unwrap();
            let picked = tape.gather_rows(h, &masked)?;
            let logits = tape.matmul(picked, vars[dec_w])?;
            let logits = tape.add_bias(logits, vars[dec_b])?;
            let lse = tape.logsumexp(logits)?;
            let mut onehot = vec![0.0; masked.len() * vocab];
            for (r, &t) in targets.iter().enumerate() {
                onehot[r * vocab + t] = 1.0;
            }
            let oh = tape.constant(onehot, vec![masked.len(), vocab]);
            let sel = tape.mul(logits, oh)?;
            let sel = tape.sum_rows(sel)?;
            let per_node = tape.sub(lse, sel)?;
            let loss = tape.mean(per_node);

            let loss_val = tape.value(loss)[0];
            if !loss_val.is_finite() {
                return Err(FtError::NonFiniteLoss { epoch, batch: bi });
            }
            epoch_loss += loss_val;
            batches_seen += 1;
            tape.backward(loss)?;
            let grads: Vec<Option<Vec<f64>>> = vars
                .iter()
                .map(|&v| tape.grad(v).map(|g| g.to_vec()))
                .collect();
            opt.step(&mut params, &grads, &trainable);
        }
        epoch_losses.push(if batches_seen > 0 { epoch_loss / batches_seen as f64 } else { 0.0 });
    }

    Ok(AttrMaskOutcome {
        checkpoint: Checkpoint::from_params(
            &cfg.backbone,
            &params,
            Provenance {
                objective: "attrmask".into(),
                seed,
                epochs: cfg.epochs,
            },
        ),
        epoch_losses,
        full_params: params,
        backbone_idx: idx,
        decoder_w: dec_w,
        decoder_b: dec_b,
    })
}

pub fn pretrain_attrmask(
    graphs: &[Graph],
    cfg: &PretrainConfig,
    mask_rate: f64,
    seed: u64,
) -> Result<Checkpoint> {
    Ok(run_attrmask(graphs, cfg, mask_rate, seed)?.checkpoint)
}

/// Masked-slot prediction accuracy of a trained attr-mask model on held-out
/// graphs, with the same masking procedure. Returns (accuracy, majority
/// baseline over the evaluated targets).
pub fn attrmask_eval_accuracy(
    outcome: &AttrMaskOutcome,
    graphs: &[Graph],
    mask_rate: f64,
    seed: u64,
) -> Result<(f64, f64)> {
    let cfg = &outcome.checkpoint.config;
    let vocab = cfg.node_cardinalities[0];
    let mut rng = rng_from_seed(seed);
    let mut correct = 0usize;
    let mut total = 0usize;
    let mut class_counts = vec![0usize; vocab];
    for g in graphs {
        let mut gb = batch(&[g])?;
        let masked: Vec<usize> = (0..gb.num_nodes)
            .filter(|_| rng.gen::<f64>() < mask_rate)
            .collect();
        if masked.is_empty() {
            continue;
        }
        let targets: Vec<usize> = masked.iter().map(|&v| gb.node_feats[v][0]).collect();
        for &v in &masked {
            gb.node_feats[v][0] = cfg.mask_token();
        }
        let mut tape = Tape::new();
        let vars = outcome.full_params.register_all_frozen(&mut tape);
        let outs = forward_plain(
            &mut tape,
            &gb,
            cfg,
            &outcome.backbone_idx,
            &vars,
            false,
            &mut rng,
        )?;
        let h = *outs.last().unwrap();
        let picked = tape.gather_rows(h, &masked)?;
        let logits = tape.matmul(picked, vars[outcome.decoder_w])?;
        let logits = tape.add_bias(logits, vars[outcome.decoder_b])?;
        let lv = tape.value(logits);
        for (r, &t) in targets.iter().enumerate() {
            let row = &lv[r * vocab..(r + 1) * vocab];
            let pred = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .unwrap()
                .0;
            if pred == t {
                correct += 1;
            }
            class_counts[t] += 1;
            total += 1;
        }
    }
    if total == 0 {
        return Err(FtError::Data("no nodes masked during evaluation".into()));
    }
    let majority = *class_counts.iter().max().unwrap() as f64 / total as f64;
    Ok((correct as f64 / total as f64, majority))
}

/// Mean final-layer inner-product scores of (true edges, sampled non-edges)
/// over a graph set, for edge-prediction evaluation.
pub fn edgepred_eval_scores(ckpt: &Checkpoint, graphs: &[Graph], seed: u64) -> Result<(f64, f64)> {
    let (params, idx) = ckpt.build_params()?;
    let mut rng = rng_from_seed(seed);
    let mut pos_sum = 0.0;
    let mut pos_n = 0usize;
    let mut neg_sum = 0.0;
    let mut neg_n = 0usize;
    for g in graphs {
        if g.num_nodes < 2 {
            continue;
        }
        let gb = batch(&[g])?;
        let mut tape = Tape::new();
        let vars = params.register_all_frozen(&mut tape);
        let outs = forward_plain(&mut tape, &gb, &ckpt.config, &idx, &vars, false, &mut rng)?;
        let h = tape.value(*outs.last().unwrap()).to_vec();
        let d = ckpt.config.hidden_dim;
        let dot = |u: usize, v: usize| -> f64 {
            (0..d).map(|j| h[u * d + j] * h[v * d + j]).sum()
        };
        use std::collections::HashSet;
        let edge_set: HashSet<(usize, usize)> = gb.edges.iter().copied().collect();
        for &(u, v) in gb.edges.iter().filter(|&&(u, v)| u < v) {
            pos_sum += dot(u, v);
            pos_n += 1;
            for _ in 0..20 {
                let w = rng.gen_range(0..gb.num_nodes);
                if w != u && !edge_set.contains(&(u, w)) {
                    neg_sum += dot(u, w);
                    neg_n += 1;
                    break;
                }
            }
        }
    }
    if pos_n == 0 || neg_n == 0 {
        return Err(FtError::Data("no evaluable edge pairs".into()));
    }
    Ok((pos_sum / pos_n as f64, neg_sum / neg_n as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gnn::{backbone_param_count, ConvKind};
    use crate::graph::graph_from_undirected;

    fn tiny_backbone() -> BackboneConfig {
        let mut c = BackboneConfig::new(ConvKind::Gin, vec![4, 3], vec![3]);
        c.hidden_dim = 8;
        c.num_layers = 2;
        c.dropout = 0.2;
        c
    }

    fn toy_graphs(n: usize) -> Vec<Graph> {
        (0..n)
            .map(|i| {
                graph_from_undirected(
                    3,
                    &[(0, 1, vec![i % 3]), (1, 2, vec![(i + 1) % 3])],
                    vec![vec![i % 4, 0], vec![(i + 1) % 4, 1], vec![(i + 2) % 4, 2]],
                    vec![0.0],
                    vec![true],
                )
                .unwrap()
            })
            .collect()
    }

    #[test]
    fn zero_epochs_checkpoint_equals_initialization() {
        let mut cfg = PretrainConfig::new(tiny_backbone());
        cfg.epochs = 0;
        let out = run_edgepred(&toy_graphs(4), &cfg, 7).unwrap();
        let mut fresh = ParamSet::new();
        build_backbone(&cfg.backbone, &mut fresh, &mut rng_from_seed(7));
        for ((name, t), i) in out.checkpoint.tensors.iter().zip(0..) {
            assert_eq!(fresh.name(i), name);
            assert_eq!(&fresh.tensor(i).data, &t.data);
        }
    }

    #[test]
    fn same_seed_gives_bit_identical_checkpoints() {
        let mut cfg = PretrainConfig::new(tiny_backbone());
        cfg.epochs = 2;
        let a = pretrain_edgepred(&toy_graphs(6), &cfg, 3).unwrap();
        let b = pretrain_edgepred(&toy_graphs(6), &cfg, 3).unwrap();
        assert_eq!(a, b);
        let c = pretrain_attrmask(&toy_graphs(6), &cfg, 0.3, 3).unwrap();
        let d = pretrain_attrmask(&toy_graphs(6), &cfg, 0.3, 3).unwrap();
        assert_eq!(c, d);
    }

    #[test]
    fn checkpoint_param_count_matches_analytic() {
        let mut cfg = PretrainConfig::new(tiny_backbone());
        cfg.epochs = 1;
        let ckpt = pretrain_edgepred(&toy_graphs(4), &cfg, 0).unwrap();
        assert_eq!(ckpt.param_count(), backbone_param_count(&cfg.backbone));
    }

    #[test]
    fn save_load_round_trip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = PretrainConfig::new(tiny_backbone());
        cfg.epochs = 1;
        let ckpt = pretrain_edgepred(&toy_graphs(4), &cfg, 1).unwrap();
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        save(&ckpt, &p1).unwrap();
        let loaded = load(&p1).unwrap();
        assert_eq!(loaded, ckpt);
        save(&loaded, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn truncated_file_is_rejected_without_partial_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = PretrainConfig::new(tiny_backbone());
        cfg.epochs = 0;
        let ckpt = pretrain_edgepred(&toy_graphs(4), &cfg, 1).unwrap();
        let p = dir.path().join("t.ckpt");
        save(&ckpt, &p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() / 2]).unwrap();
        assert!(load(&p).is_err());
    }

    #[test]
    fn version_mismatch_names_both_versions() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = PretrainConfig::new(tiny_backbone());
        cfg.epochs = 0;
        let mut ckpt = pretrain_edgepred(&toy_graphs(4), &cfg, 1).unwrap();
        ckpt.format_version = 9;
        let p = dir.path().join("v.ckpt");
        save(&ckpt, &p).unwrap();
        let err = load(&p).unwrap_err().to_string();
        assert!(err.contains('9') && err.contains('1'), "{err}");
    }

    #[test]
    fn config_mismatch_is_a_descriptor_error() {
        let mut cfg = PretrainConfig::new(tiny_backbone());
        cfg.epochs = 0;
        let ckpt = pretrain_edgepred(&toy_graphs(4), &cfg, 1).unwrap();
        let mut other = tiny_backbone();
        other.conv = ConvKind::Gcn;
        assert!(ckpt.validate_config(&other).is_err());
        assert!(ckpt.validate_config(&tiny_backbone()).is_ok());
    }

    #[test]
    fn vocab_of_one_has_nothing_to_predict() {
        let mut bb = tiny_backbone();
        bb.node_cardinalities = vec![1, 3];
        let cfg = PretrainConfig::new(bb);
        let err = pretrain_attrmask(&toy_graphs(4), &cfg, 0.15, 0)
            .unwrap_err()
            .to_string();
        assert!(err.contains("nothing to predict"), "{err}");
    }

    #[test]
    fn zero_edge_dataset_rejected_for_edgepred() {
        let g = Graph {
            num_nodes: 2,
            edges: vec![],
            node_feats: vec![vec![0, 0], vec![1, 1]],
            edge_feats: vec![],
            labels: vec![0.0],
            label_mask: vec![true],
            split_key: None,
        };
        let cfg = PretrainConfig::new(tiny_backbone());
        assert!(pretrain_edgepred(&[g], &cfg, 0).is_err());
    }
}
