//! A downstream model assembled from a checkpoint and a strategy choice:
//! backbone layers interleaved with identity augmentation, fusion over the K
//! layer outputs, graph-level readout, then a linear prediction head.
//!
//! The backbone tensors come from the checkpoint bit-exactly; strategy parts
//! and the head are freshly initialized. Additive strategy parts start at
//! zero, so every assembled model begins at the pre-trained function.

use crate::error::{FtError, Result};
use crate::gnn::{self, BackboneConfig, BackboneIdx};
use crate::graph::GraphBatch;
use crate::params::ParamSet;
use crate::pretrain::Checkpoint;
use crate::strategy::{
    self, build_gpr, build_lstm_fuse, build_neural_pool, build_set2set, build_sort_pool,
    build_trans_aug, fuse_width, read_width, FuseParams, IdAug, Fuse, Read, ReadParams,
    StrategyChoice, TransAugIdx,
};
use crate::tensor::{Rng, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskType {
    Classification,
    Regression,
}

#[derive(Debug, Clone, Copy)]
pub struct HeadIdx {
    pub w: usize,
    pub b: usize,
}

pub fn build_head(prefix: &str, width: usize, tasks: usize, set: &mut ParamSet, rng: &mut Rng) -> HeadIdx {
    HeadIdx {
        w: set.add(
            format!("{prefix}.w"),
            Tensor::uniform_init(vec![width, tasks], width, rng),
        ),
        b: set.add(format!("{prefix}.b"), Tensor::zeros(vec![tasks])),
    }
}

/// Strategy parameters a discrete choice needs.
#[derive(Debug, Clone, Default)]
pub struct StrategyIdx {
    pub trans: Vec<Option<TransAugIdx>>,
    pub fuse: FuseParams,
    pub read: ReadParams,
}

/// One bottleneck adapter insertion.
#[derive(Debug, Clone, Copy)]
pub struct AdapterStage {
    pub w_down: usize,
    pub b_down: usize,
    pub w_up: usize,
    pub b_up: usize,
}

/// Adapters per layer, one per linear stage of the layer update.
#[derive(Debug, Clone, Default)]
pub struct AdapterIdx {
    pub per_layer: Vec<Vec<AdapterStage>>,
}

/// Residual bottleneck with zero-initialized up-projection: identity at
/// step 0.
pub fn build_adapters(cfg: &BackboneConfig, m: usize, set: &mut ParamSet, rng: &mut Rng) -> AdapterIdx {
    let widths = gnn::adapter_widths(cfg);
    let mut per_layer = Vec::with_capacity(cfg.num_layers);
    for k in 0..cfg.num_layers {
        let mut stages = Vec::with_capacity(widths.len());
        for (s, &w) in widths.iter().enumerate() {
            stages.push(AdapterStage {
                w_down: set.add(
                    format!("adapter.{k}.{s}.w_down"),
                    Tensor::uniform_init(vec![w, m], w, rng),
                ),
                b_down: set.add(format!("adapter.{k}.{s}.b_down"), Tensor::zeros(vec![m])),
                w_up: set.add(format!("adapter.{k}.{s}.w_up"), Tensor::zeros(vec![m, w])),
                b_up: set.add(format!("adapter.{k}.{s}.b_up"), Tensor::zeros(vec![w])),
            });
        }
        per_layer.push(stages);
    }
    AdapterIdx { per_layer }
}

fn apply_adapter(tape: &mut Tape, st: &AdapterStage, x: Var, vars: &[Var]) -> Result<Var> {
    let down = tape.matmul(x, vars[st.w_down])?;
    let down = tape.add_bias(down, vars[st.b_down])?;
    let mid = tape.relu(down);
    let up = tape.matmul(mid, vars[st.w_up])?;
    let up = tape.add_bias(up, vars[st.b_up])?;
    tape.add(x, up)
}

/// Fully wired downstream model.
#[derive(Debug, Clone)]
pub struct FineTuneModel {
    pub config: BackboneConfig,
    pub choice: StrategyChoice,
    pub num_tasks: usize,
    pub params: ParamSet,
    pub backbone: BackboneIdx,
    pub strategy: StrategyIdx,
    pub head: HeadIdx,
    pub adapters: Option<AdapterIdx>,
}

/// Build the strategy parameters the given choice requires, in a fixed
/// order (per-layer trans bottlenecks, fusion, readout).
pub fn build_strategy_params(
    choice: &StrategyChoice,
    cfg: &BackboneConfig,
    set: &mut ParamSet,
    rng: &mut Rng,
) -> StrategyIdx {
    let d = cfg.hidden_dim;
    let mut idx = StrategyIdx::default();
    for (k, aug) in choice.id_aug.iter().enumerate() {
        idx.trans.push(match aug {
            IdAug::TransAug => Some(build_trans_aug(&format!("strategy.id.{k}.trans"), d, set, rng)),
            _ => None,
        });
    }
    match choice.fuse {
        Fuse::Lstm => idx.fuse.lstm = Some(build_lstm_fuse("strategy.fuse.lstm", d, set, rng)),
        Fuse::Gpr => idx.fuse.gpr = Some(build_gpr("strategy.fuse.gpr", cfg.num_layers, set)),
        _ => {}
    }
    let w = fuse_width(choice.fuse, cfg.num_layers, d);
    match choice.read {
        Read::Set2set => idx.read.set2set = Some(build_set2set("strategy.read.set2set", w, set, rng)),
        Read::SortPooling => idx.read.sort = Some(build_sort_pool("strategy.read.sort", w, set, rng)),
        Read::NeuralPooling => {
            idx.read.neural = Some(build_neural_pool("strategy.read.neural", w, set, rng))
        }
        _ => {}
    }
    idx
}

/// Assemble a downstream model: backbone from the checkpoint, fresh strategy
/// parts and head seeded by `seed`.
pub fn assemble_model(
    ckpt: &Checkpoint,
    choice: StrategyChoice,
    num_tasks: usize,
    seed: u64,
) -> Result<FineTuneModel> {
    let cfg = ckpt.config.clone();
    if choice.id_aug.len() != cfg.num_layers {
        return Err(FtError::Config(format!(
            "choice has {} id_aug entries, checkpoint backbone has {} layers",
            choice.id_aug.len(),
            cfg.num_layers
        )));
    }
    let (mut params, backbone) = ckpt.build_params()?;
    let mut rng = crate::tensor::rng_from_seed(seed);
    let strategy = build_strategy_params(&choice, &cfg, &mut params, &mut rng);
    let w = fuse_width(choice.fuse, cfg.num_layers, cfg.hidden_dim);
    let head = build_head("head", read_width(choice.read, w), num_tasks, &mut params, &mut rng);
    Ok(FineTuneModel {
        config: cfg,
        choice,
        num_tasks,
        params,
        backbone,
        strategy,
        head,
        adapters: None,
    })
}

impl FineTuneModel {
    /// Forward to logits [B, num_tasks] with caller-registered vars.
    pub fn forward_with_vars(
        &self,
        tape: &mut Tape,
        batch: &GraphBatch,
        vars: &[Var],
        train: bool,
        rng: &mut Rng,
    ) -> Result<Var> {
        let cfg = &self.config;
        let mut h = gnn::embed(tape, batch, cfg, &self.backbone, vars)?;
        let mut layer_outs = Vec::with_capacity(cfg.num_layers);
        for k in 0..cfg.num_layers {
            let z = match &self.adapters {
                None => gnn::conv_layer(tape, batch, cfg, &self.backbone, vars, k, h, None)?,
                Some(ad) => {
                    let stages = ad.per_layer[k].clone();
                    let mut hook = |tape: &mut Tape, _layer: usize, stage: usize, v: Var| {
                        apply_adapter(tape, &stages[stage], v, vars)
                    };
                    gnn::conv_layer(tape, batch, cfg, &self.backbone, vars, k, h, Some(&mut hook))?
                }
            };
            let aug = strategy::identity_aug(
                tape,
                self.choice.id_aug[k],
                h,
                z,
                self.strategy.trans[k].as_ref(),
                vars,
            )?;
            h = gnn::post_layer(tape, cfg, k, aug, train, rng)?;
            layer_outs.push(h);
        }
        let fused = strategy::fuse(tape, self.choice.fuse, &layer_outs, &self.strategy.fuse, vars)?;
        let hg = strategy::readout(tape, self.choice.read, fused, batch, &self.strategy.read, vars)?;
        let logits = tape.matmul(hg, vars[self.head.w])?;
        tape.add_bias(logits, vars[self.head.b])
    }

    /// Evaluation-mode logits as a plain tensor.
    pub fn predict(&self, batch: &GraphBatch) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.params.register_all_frozen(&mut tape);
        let mut rng = crate::tensor::rng_from_seed(0);
        let logits = self.forward_with_vars(&mut tape, batch, &vars, false, &mut rng)?;
        Ok(tape.detach(logits))
    }
}

/// Masked multi-task loss: cross-entropy (binary, with logits) for
/// classification, MSE for regression. Masked labels contribute exactly
/// zero; returns None when the batch has no present labels.
pub fn task_loss(
    tape: &mut Tape,
    logits: Var,
    labels: &[f64],
    mask: &[bool],
    task: TaskType,
) -> Result<Option<Var>> {
    let n = labels.len();
    if tape.numel(logits) != n {
        return Err(FtError::Shape {
            op: "task_loss",
            lhs: tape.shape(logits).to_vec(),
            rhs: vec![n],
        });
    }
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Ok(None);
    }
    let shape = tape.shape(logits).to_vec();
    let y = tape.constant(labels.to_vec(), shape.clone());
    let mf = tape.constant(
        mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect(),
        shape,
    );
    let per_entry = match task {
        TaskType::Classification => {
            let sp = tape.softplus(logits);
            let yz = tape.mul(logits, y)?;
            tape.sub(sp, yz)?
        }
        TaskType::Regression => {
            let d = tape.sub(logits, y)?;
            tape.mul(d, d)?
        }
    };
    let masked = tape.mul(per_entry, mf)?;
    let total = tape.sum(masked);
    Ok(Some(tape.mul_scalar(total, 1.0 / count as f64)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gnn::ConvKind;
    use crate::graph::{batch, graph_from_undirected, Graph};
    use crate::pretrain::{pretrain_edgepred, PretrainConfig};
    use crate::strategy::readout;
    use crate::tensor::rng_from_seed;

    fn tiny_ckpt(conv: ConvKind) -> Checkpoint {
        let mut bb = BackboneConfig::new(conv, vec![4, 3], vec![3]);
        bb.hidden_dim = 8;
        bb.num_layers = 3;
        bb.dropout = 0.3;
        let mut cfg = PretrainConfig::new(bb);
        cfg.epochs = 1;
        let graphs: Vec<Graph> = (0..6)
            .map(|i| {
                graph_from_undirected(
                    4,
                    &[(0, 1, vec![i % 3]), (1, 2, vec![0]), (2, 3, vec![1]), (3, 0, vec![2])],
                    vec![vec![i % 4, 0], vec![(i + 1) % 4, 1], vec![(i + 2) % 4, 2], vec![0, 0]],
                    vec![0.0],
                    vec![true],
                )
                .unwrap()
            })
            .collect();
        pretrain_edgepred(&graphs, &cfg, 5).unwrap()
    }

    fn toy_batch() -> GraphBatch {
        let g1 = graph_from_undirected(
            3,
            &[(0, 1, vec![0]), (1, 2, vec![1])],
            vec![vec![0, 0], vec![1, 1], vec![2, 2]],
            vec![1.0],
            vec![true],
        )
        .unwrap();
        let g2 = graph_from_undirected(
            2,
            &[(0, 1, vec![2])],
            vec![vec![3, 2], vec![2, 0]],
            vec![0.0],
            vec![true],
        )
        .unwrap();
        batch(&[&g1, &g2]).unwrap()
    }

    #[test]
    fn k_mismatch_is_rejected() {
        let ckpt = tiny_ckpt(ConvKind::Gin);
        let mut choice = StrategyChoice::degenerate(2);
        choice.id_aug.pop();
        assert!(assemble_model(&ckpt, choice, 1, 0).is_err());
    }

    /// The degenerate choice reproduces the vanilla wiring: backbone forward,
    /// mean pooling over the last layer, linear head — computed independently.
    #[test]
    fn degenerate_choice_equals_vanilla_wiring() {
        let ckpt = tiny_ckpt(ConvKind::Gin);
        let model = assemble_model(&ckpt, StrategyChoice::degenerate(3), 2, 9).unwrap();
        let b = toy_batch();
        let got = model.predict(&b).unwrap();

        // Independent route: plain backbone forward + mean pool + head.
        let (params, idx) = ckpt.build_params().unwrap();
        let mut tape = Tape::new();
        let vars = params.register_all_frozen(&mut tape);
        let outs = gnn::forward_plain(
            &mut tape,
            &b,
            &ckpt.config,
            &idx,
            &vars,
            false,
            &mut rng_from_seed(0),
        )
        .unwrap();
        let pooled = readout(
            &mut tape,
            Read::MeanPooling,
            *outs.last().unwrap(),
            &b,
            &ReadParams::default(),
            &[],
        )
        .unwrap();
        let hw = model.params.tensor(model.head.w);
        let hb = model.params.tensor(model.head.b);
        let wv = tape.leaf(hw.data.clone(), hw.shape.clone(), false);
        let bv = tape.leaf(hb.data.clone(), hb.shape.clone(), false);
        let logits = tape.matmul(pooled, wv).unwrap();
        let logits = tape.add_bias(logits, bv).unwrap();
        for (a, b) in got.data.iter().zip(tape.value(logits)) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    /// Additive-only strategy parts are zero-initialized, so at step 0 the
    /// assembled outputs equal the vanilla ones.
    #[test]
    fn zero_initialized_new_parts_preserve_vanilla_outputs() {
        let ckpt = tiny_ckpt(ConvKind::Gin);
        let vanilla = assemble_model(&ckpt, StrategyChoice::degenerate(3), 1, 4).unwrap();
        let trans = StrategyChoice {
            id_aug: vec![IdAug::TransAug; 3],
            fuse: Fuse::Last,
            read: Read::MeanPooling,
        };
        let mut model = assemble_model(&ckpt, trans, 1, 4).unwrap();
        // Align the head weights; the trans model consumed extra RNG draws.
        model
            .params
            .set_named("head.w", vanilla.params.tensor(vanilla.head.w).data.clone())
            .unwrap();
        model
            .params
            .set_named("head.b", vanilla.params.tensor(vanilla.head.b).data.clone())
            .unwrap();
        let b = toy_batch();
        let a = vanilla.predict(&b).unwrap();
        let c = model.predict(&b).unwrap();
        for (x, y) in a.data.iter().zip(&c.data) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn concat_fusion_widens_the_head() {
        let ckpt = tiny_ckpt(ConvKind::Gin);
        let choice = StrategyChoice {
            id_aug: vec![IdAug::ZeroAug; 3],
            fuse: Fuse::Concat,
            read: Read::SumPooling,
        };
        let model = assemble_model(&ckpt, choice, 2, 0).unwrap();
        assert_eq!(model.params.tensor(model.head.w).shape, vec![3 * 8, 2]);
        let b = toy_batch();
        assert_eq!(model.predict(&b).unwrap().shape, vec![2, 2]);
    }

    #[test]
    fn every_choice_combination_runs_forward() {
        let ckpt = tiny_ckpt(ConvKind::Gat);
        let b = toy_batch();
        for fuse in Fuse::ALL {
            for read in Read::ALL {
                for aug in IdAug::ALL {
                    let choice = StrategyChoice {
                        id_aug: vec![aug; 3],
                        fuse,
                        read,
                    };
                    let model = assemble_model(&ckpt, choice, 1, 1).unwrap();
                    let out = model.predict(&b).unwrap();
                    assert_eq!(out.shape, vec![2, 1]);
                    assert!(out.is_finite());
                }
            }
        }
    }

    #[test]
    fn masked_labels_contribute_exactly_zero() {
        let mut tape = Tape::new();
        let logits = tape.leaf(vec![0.3, -0.7, 1.1, 0.0], vec![2, 2], false);
        let labels_a = [1.0, 0.0, 1.0, 0.0];
        let labels_b = [1.0, 123.0, 1.0, 0.0]; // flip a masked label
        let mask = [true, false, true, true];
        let la = task_loss(&mut tape, logits, &labels_a, &mask, TaskType::Classification)
            .unwrap()
            .unwrap();
        let lb = task_loss(&mut tape, logits, &labels_b, &mask, TaskType::Classification)
            .unwrap()
            .unwrap();
        assert_eq!(tape.value(la)[0], tape.value(lb)[0]);

        let ra = task_loss(&mut tape, logits, &labels_a, &mask, TaskType::Regression)
            .unwrap()
            .unwrap();
        let rb = task_loss(&mut tape, logits, &labels_b, &mask, TaskType::Regression)
            .unwrap()
            .unwrap();
        assert_eq!(tape.value(ra)[0], tape.value(rb)[0]);
    }

    #[test]
    fn all_masked_batch_has_no_loss() {
        let mut tape = Tape::new();
        let logits = tape.leaf(vec![0.5, 0.5], vec![1, 2], false);
        let out = task_loss(
            &mut tape,
            logits,
            &[1.0, 0.0],
            &[false, false],
            TaskType::Classification,
        )
        .unwrap();
        assert!(out.is_none());
    }

    #[test]
    fn adapter_is_identity_at_step_zero() {
        let ckpt = tiny_ckpt(ConvKind::Gin);
        let mut model = assemble_model(&ckpt, StrategyChoice::degenerate(3), 1, 2).unwrap();
        let b = toy_batch();
        let before = model.predict(&b).unwrap();
        let mut rng = rng_from_seed(3);
        let adapters = build_adapters(&model.config, 4, &mut model.params, &mut rng);
        model.adapters = Some(adapters);
        let after = model.predict(&b).unwrap();
        for (x, y) in before.data.iter().zip(&after.data) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
