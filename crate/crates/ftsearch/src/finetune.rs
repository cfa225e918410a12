//! Fixed fine-tuning strategies and the shared training protocol: vanilla,
//! L2-SP regularized, feature extractor, last-k, and bottleneck adapters.
//!
//! The protocol follows one shape everywhere: Adam at lr 1e-3, batch 32,
//! dropout 0.5, up to 100 epochs with early stopping on the validation
//! aggregate (patience 20), report on the test split with the
//! best-validation parameters.

use crate::error::{FtError, Result};
use crate::graph::{batch, Graph};
use crate::metrics::{self, EpochRecord, MetricReport};
use crate::model::{assemble_model, build_adapters, task_loss, FineTuneModel, TaskType};
use crate::optim::Adam;
use crate::pretrain::Checkpoint;
use crate::strategy::StrategyChoice;
use crate::tensor::{rng_from_seed, Tape};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Vanilla,
    L2sp,
    FeatureExtractor,
    LastK,
    Adapter,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub strategy: Strategy,
    /// Number of trailing tunable layers (last-k only).
    pub k: Option<usize>,
    /// Adapter bottleneck width.
    pub adapter_m: usize,
    pub l2sp_lambda: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub dropout: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
}

impl FinetuneConfig {
    pub fn new(strategy: Strategy) -> Self {
        FinetuneConfig {
            strategy,
            k: None,
            adapter_m: 8,
            l2sp_lambda: 1e-2,
            lr: 1e-3,
            batch_size: 32,
            dropout: 0.5,
            max_epochs: 100,
            patience: 20,
            seed: 0,
        }
    }
}

/// Which parameters a strategy leaves tunable.
fn trainable_mask(model: &FineTuneModel, cfg: &FinetuneConfig) -> Result<Vec<bool>> {
    let params = &model.params;
    let mut mask = vec![true; params.len()];
    match cfg.strategy {
        Strategy::Vanilla | Strategy::L2sp => {}
        Strategy::FeatureExtractor | Strategy::Adapter => {
            for i in params.indices_with_prefix("backbone.") {
                mask[i] = false;
            }
        }
        Strategy::LastK => {
            let k = cfg.k.ok_or_else(|| {
                FtError::Config("last_k strategy requires k".into())
            })?;
            let total = model.config.num_layers;
            if k > total {
                return Err(FtError::Config(format!(
                    "last_k k={k} exceeds backbone depth {total}"
                )));
            }
            // Embeddings sit before the first frozen layer; at k = K nothing
            // is frozen and the trajectory must match vanilla bit-exactly.
            if k < total {
                for i in params.indices_with_prefix("backbone.node_embed.") {
                    mask[i] = false;
                }
            }
            for layer in 0..total - k {
                for i in params.indices_with_prefix(&format!("backbone.layer.{layer}.")) {
                    mask[i] = false;
                }
            }
        }
    }
    // GIN epsilon participates only when configured learnable.
    if !model.config.gin_train_eps {
        for i in 0..params.len() {
            if params.name(i).ends_with(".eps") {
                mask[i] = false;
            }
        }
    }
    Ok(mask)
}

/// Run eval-mode predictions over graphs in fixed order; returns flattened
/// logits plus labels and mask, row-major [n, tasks].
pub fn predict_set(
    model: &FineTuneModel,
    graphs: &[&Graph],
    batch_size: usize,
) -> Result<(Vec<f64>, Vec<f64>, Vec<bool>)> {
    let mut logits = Vec::new();
    let mut labels = Vec::new();
    let mut mask = Vec::new();
    for chunk in graphs.chunks(batch_size.max(1)) {
        let gb = batch(chunk)?;
        let out = model.predict(&gb)?;
        logits.extend_from_slice(&out.data);
        labels.extend_from_slice(&gb.labels);
        mask.extend_from_slice(&gb.label_mask);
    }
    Ok((logits, labels, mask))
}

/// Validation/test aggregate for a model on a graph set.
pub fn evaluate_model(
    model: &FineTuneModel,
    graphs: &[&Graph],
    batch_size: usize,
    task: TaskType,
) -> Result<(f64, Vec<Option<f64>>)> {
    let (logits, labels, mask) = predict_set(model, graphs, batch_size)?;
    metrics::evaluate(&logits, &labels, &mask, model.num_tasks, task)
}

/// Fine-tune a checkpoint with a fixed strategy. `choice` defaults to the
/// degenerate wiring (vanilla backbone + mean pooling). Returns the
/// best-validation model and its test report.
pub fn finetune(
    ckpt: &Checkpoint,
    choice: Option<StrategyChoice>,
    train: &[&Graph],
    val: &[&Graph],
    test: &[&Graph],
    task: TaskType,
    num_tasks: usize,
    cfg: &FinetuneConfig,
) -> Result<(FineTuneModel, MetricReport)> {
    if train.is_empty() || val.is_empty() || test.is_empty() {
        return Err(FtError::Data("empty split".into()));
    }
    let choice = choice.unwrap_or_else(|| StrategyChoice::degenerate(ckpt.config.num_layers));
    let mut model = assemble_model(ckpt, choice, num_tasks, cfg.seed)?;
    model.config.dropout = cfg.dropout;
    if cfg.strategy == Strategy::Adapter && cfg.adapter_m > 0 {
        let mut rng = rng_from_seed(cfg.seed.wrapping_add(1));
        let adapters = build_adapters(&model.config, cfg.adapter_m, &mut model.params, &mut rng);
        model.adapters = Some(adapters);
    }
    let trainable = trainable_mask(&model, cfg)?;

    // L2-SP reference point: the pre-trained backbone tensors.
    let backbone_idxs = model.params.indices_with_prefix("backbone.");
    let l2sp_init: Option<Vec<(usize, Vec<f64>)>> = match cfg.strategy {
        Strategy::L2sp => Some(
            backbone_idxs
                .iter()
                .map(|&i| (i, model.params.tensor(i).data.clone()))
                .collect(),
        ),
        _ => None,
    };
    let new_part_idxs: Vec<usize> = (0..model.params.len())
        .filter(|&i| !model.params.name(i).starts_with("backbone."))
        .collect();

    let mut opt = Adam::new(cfg.lr, &model.params);
    let mut rng = rng_from_seed(cfg.seed);
    let mut history = Vec::new();
    let mut best_val = f64::NAN;
    let mut best_snapshot = model.params.snapshot();
    let mut best_epoch = 0usize;

    for epoch in 0..cfg.max_epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches_seen = 0usize;
        for (bi, chunk) in order.chunks(cfg.batch_size.max(1)).enumerate() {
            let members: Vec<&Graph> = chunk.iter().map(|&i| train[i]).collect();
            let gb = batch(&members)?;
            let mut tape = Tape::new();
            let vars = model.params.register(&mut tape, &trainable);
            let logits = model.forward_with_vars(&mut tape, &gb, &vars, true, &mut rng)?;
            let Some(mut loss) = task_loss(&mut tape, logits, &gb.labels, &gb.label_mask, task)?
            else {
                continue;
            };
            if let Some(init) = &l2sp_init {
                // task loss + (lambda/2)|theta_b - theta_init|^2
                //           + (lambda/2)|theta_new|^2
                let mut penalty = None;
                for (i, init_data) in init {
                    let ref_c = tape.constant(init_data.clone(), model.params.tensor(*i).shape.clone());
                    let diff = tape.sub(vars[*i], ref_c)?;
                    let sq = tape.mul(diff, diff)?;
                    let s = tape.sum(sq);
                    penalty = Some(match penalty {
                        None => s,
                        Some(p) => tape.add(p, s)?,
                    });
                }
                for &i in &new_part_idxs {
                    let sq = tape.mul(vars[i], vars[i])?;
                    let s = tape.sum(sq);
                    penalty = Some(match penalty {
                        None => s,
                        Some(p) => tape.add(p, s)?,
                    });
                }
                if let Some(p) = penalty {
                    let scaled = tape.mul_scalar(p, cfg.l2sp_lambda / 2.0);
                    loss = tape.add(loss, scaled)?;
                }
            }
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
            // Frozen-tensor audit: nothing may flow to frozen leaves.
            for (i, t) in trainable.iter().enumerate() {
                if !t && grads[i].is_some() {
                    return Err(FtError::Autodiff(format!(
                        "gradient reached frozen parameter {}",
                        model.params.name(i)
                    )));
                }
            }
            opt.step(&mut model.params, &grads, &trainable);
        }

        let (val_metric, _) = evaluate_model(&model, val, cfg.batch_size, task)?;
        history.push(EpochRecord {
            epoch,
            train_loss: if batches_seen > 0 { epoch_loss / batches_seen as f64 } else { 0.0 },
            val_metric,
        });
        if best_val.is_nan() || metrics::improves(task, val_metric, best_val) {
            best_val = val_metric;
            best_snapshot = model.params.snapshot();
            best_epoch = epoch;
        } else if epoch - best_epoch >= cfg.patience {
            break;
        }
    }

    model.params.restore(&best_snapshot);
    let (agg, per_task) = evaluate_model(&model, test, cfg.batch_size, task)?;
    Ok((
        model,
        MetricReport {
            task_type: task,
            aggregate: agg,
            per_task,
            history,
        },
    ))
}

/// Tunable-parameter fraction of the adapter strategy: (adapter + head)
/// params over the original backbone params, computed analytically.
pub fn adapter_param_ratio(
    backbone: &crate::gnn::BackboneConfig,
    adapter_m: usize,
    num_tasks: usize,
) -> f64 {
    let total = crate::gnn::backbone_param_count(backbone) as f64;
    let widths = crate::gnn::adapter_widths(backbone);
    let per_layer: usize = widths
        .iter()
        .map(|&w| if adapter_m == 0 { 0 } else { 2 * w * adapter_m + adapter_m + w })
        .sum();
    let head = backbone.hidden_dim * num_tasks + num_tasks;
    (backbone.num_layers * per_layer + head) as f64 / total
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gnn::{BackboneConfig, ConvKind};
    use crate::graph::graph_from_undirected;
    use crate::pretrain::{pretrain_edgepred, PretrainConfig};

    fn toy_dataset(n: usize) -> Vec<Graph> {
        // Binary labels determined by the majority node type.
        (0..n)
            .map(|i| {
                let major = if i % 2 == 0 { 0 } else { 1 };
                let label = (i % 2) as f64;
                graph_from_undirected(
                    4,
                    &[(0, 1, vec![0]), (1, 2, vec![1]), (2, 3, vec![2]), (3, 0, vec![0])],
                    vec![
                        vec![major, 0],
                        vec![major, 1],
                        vec![major, 2],
                        vec![1 - major + 2, 0],
                    ],
                    vec![label],
                    vec![true],
                )
                .unwrap()
            })
            .collect()
    }

    fn tiny_ckpt() -> Checkpoint {
        let mut bb = BackboneConfig::new(ConvKind::Gin, vec![4, 3], vec![3]);
        bb.hidden_dim = 8;
        bb.num_layers = 2;
        let mut cfg = PretrainConfig::new(bb);
        cfg.epochs = 2;
        pretrain_edgepred(&toy_dataset(8), &cfg, 11).unwrap()
    }

    fn splits(data: &[Graph]) -> (Vec<&Graph>, Vec<&Graph>, Vec<&Graph>) {
        let n = data.len();
        let train: Vec<&Graph> = data[..n * 8 / 10].iter().collect();
        let val: Vec<&Graph> = data[n * 8 / 10..n * 9 / 10].iter().collect();
        let test: Vec<&Graph> = data[n * 9 / 10..].iter().collect();
        (train, val, test)
    }

    fn quick_cfg(strategy: Strategy) -> FinetuneConfig {
        let mut c = FinetuneConfig::new(strategy);
        c.max_epochs = 4;
        c.patience = 4;
        c.batch_size = 8;
        c.dropout = 0.2;
        c
    }

    #[test]
    fn feature_extractor_leaves_backbone_bit_identical() {
        let ckpt = tiny_ckpt();
        let data = toy_dataset(20);
        let (train, val, test) = splits(&data);
        let (model, _) = finetune(
            &ckpt,
            None,
            &train,
            &val,
            &test,
            TaskType::Classification,
            1,
            &quick_cfg(Strategy::FeatureExtractor),
        )
        .unwrap();
        for (name, t) in model.params.iter() {
            if let Some(orig) = ckpt.tensors.iter().find(|(n, _)| n == name) {
                assert_eq!(t.data, orig.1.data, "{name} moved");
            }
        }
    }

    #[test]
    fn last_k_equal_to_depth_matches_vanilla_trajectory() {
        let ckpt = tiny_ckpt();
        let data = toy_dataset(20);
        let (train, val, test) = splits(&data);
        let mut lk = quick_cfg(Strategy::LastK);
        lk.k = Some(2);
        let (m1, r1) = finetune(
            &ckpt, None, &train, &val, &test, TaskType::Classification, 1, &lk,
        )
        .unwrap();
        let (m2, r2) = finetune(
            &ckpt,
            None,
            &train,
            &val,
            &test,
            TaskType::Classification,
            1,
            &quick_cfg(Strategy::Vanilla),
        )
        .unwrap();
        for i in 0..m1.params.len() {
            assert_eq!(m1.params.tensor(i).data, m2.params.tensor(i).data);
        }
        assert_eq!(
            serde_json::to_string(&r1).unwrap(),
            serde_json::to_string(&r2).unwrap()
        );
    }

    #[test]
    fn last_k_freezes_early_layers_only() {
        let ckpt = tiny_ckpt();
        let data = toy_dataset(20);
        let (train, val, test) = splits(&data);
        let mut lk = quick_cfg(Strategy::LastK);
        lk.k = Some(1);
        let (model, _) = finetune(
            &ckpt, None, &train, &val, &test, TaskType::Classification, 1, &lk,
        )
        .unwrap();
        let orig: std::collections::HashMap<&str, &Vec<f64>> =
            ckpt.tensors.iter().map(|(n, t)| (n.as_str(), &t.data)).collect();
        // Layer 0 and embeddings frozen; layer 1 moved.
        let mut layer1_moved = false;
        for (name, t) in model.params.iter() {
            if name.starts_with("backbone.node_embed.") || name.starts_with("backbone.layer.0.") {
                assert_eq!(&t.data, orig[name], "{name} should be frozen");
            }
            if name.starts_with("backbone.layer.1.") && !name.ends_with(".eps") && &t.data != orig[name] {
                layer1_moved = true;
            }
        }
        assert!(layer1_moved);
    }

    #[test]
    fn last_k_without_k_errors() {
        let ckpt = tiny_ckpt();
        let data = toy_dataset(10);
        let (train, val, test) = splits(&data);
        let err = finetune(
            &ckpt,
            None,
            &train,
            &val,
            &test,
            TaskType::Classification,
            1,
            &quick_cfg(Strategy::LastK),
        )
        .unwrap_err();
        assert!(err.to_string().contains("requires k"));
    }

    #[test]
    fn l2sp_with_huge_lambda_pins_backbone_to_init() {
        let ckpt = tiny_ckpt();
        let data = toy_dataset(20);
        let (train, val, test) = splits(&data);
        let mut cfg = quick_cfg(Strategy::L2sp);
        cfg.l2sp_lambda = 1e6;
        cfg.lr = 3e-4;
        cfg.max_epochs = 30;
        cfg.patience = 30;
        let (model, _) = finetune(
            &ckpt, None, &train, &val, &test, TaskType::Classification, 1, &cfg,
        )
        .unwrap();
        for (name, t) in model.params.iter() {
            if let Some((_, orig)) = ckpt.tensors.iter().find(|(n, _)| n == name) {
                let dist: f64 = t
                    .data
                    .iter()
                    .zip(&orig.data)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                assert!(dist <= 1e-3, "{name} drifted {dist}");
            }
        }

        // Penalty dominance is meaningful: vanilla at the same lr drifts more.
        let mut vcfg = quick_cfg(Strategy::Vanilla);
        vcfg.lr = 3e-4;
        vcfg.max_epochs = 30;
        vcfg.patience = 30;
        let (vmodel, _) = finetune(
            &ckpt, None, &train, &val, &test, TaskType::Classification, 1, &vcfg,
        )
        .unwrap();
        let mut max_vanilla = 0.0f64;
        for (name, t) in vmodel.params.iter() {
            if let Some((_, orig)) = ckpt.tensors.iter().find(|(n, _)| n == name) {
                let dist: f64 = t
                    .data
                    .iter()
                    .zip(&orig.data)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                max_vanilla = max_vanilla.max(dist);
            }
        }
        assert!(max_vanilla > 1e-3, "vanilla drift only {max_vanilla}");
    }

    #[test]
    fn adapter_strategy_freezes_backbone_and_tunes_adapters() {
        let ckpt = tiny_ckpt();
        let data = toy_dataset(20);
        let (train, val, test) = splits(&data);
        let mut cfg = quick_cfg(Strategy::Adapter);
        cfg.adapter_m = 2;
        let (model, _) = finetune(
            &ckpt, None, &train, &val, &test, TaskType::Classification, 1, &cfg,
        )
        .unwrap();
        assert!(model.adapters.is_some());
        for (name, t) in model.params.iter() {
            if let Some((_, orig)) = ckpt.tensors.iter().find(|(n, _)| n == name) {
                assert_eq!(t.data, orig.data, "{name} moved under adapter tuning");
            }
        }
    }

    #[test]
    fn adapter_ratio_bands_for_reference_gin() {
        // d=300, K=5 GIN with molecular-scale vocabularies.
        let mut bb = BackboneConfig::new(ConvKind::Gin, vec![120, 3], vec![6, 3]);
        bb.hidden_dim = 300;
        bb.num_layers = 5;
        let r2 = adapter_param_ratio(&bb, 2, 1);
        let r8 = adapter_param_ratio(&bb, 8, 1);
        assert!((0.010..=0.020).contains(&r2), "m=2 ratio {r2}");
        assert!((0.040..=0.060).contains(&r8), "m=8 ratio {r8}");
        // m=0: no adapters, head-only fraction.
        let r0 = adapter_param_ratio(&bb, 0, 1);
        let head_only = 301.0 / crate::gnn::backbone_param_count(&bb) as f64;
        assert!((r0 - head_only).abs() < 1e-15);
    }

    #[test]
    fn fixed_seed_reproduces_identical_reports() {
        let ckpt = tiny_ckpt();
        let data = toy_dataset(20);
        let (train, val, test) = splits(&data);
        let cfg = quick_cfg(Strategy::Vanilla);
        let (_, r1) = finetune(
            &ckpt, None, &train, &val, &test, TaskType::Classification, 1, &cfg,
        )
        .unwrap();
        let (_, r2) = finetune(
            &ckpt, None, &train, &val, &test, TaskType::Classification, 1, &cfg,
        )
        .unwrap();
        assert_eq!(
            serde_json::to_string(&r1).unwrap(),
            serde_json::to_string(&r2).unwrap()
        );
    }

    #[test]
    fn early_stopping_returns_best_validation_model() {
        let ckpt = tiny_ckpt();
        let data = toy_dataset(30);
        let (train, val, test) = splits(&data);
        let mut cfg = quick_cfg(Strategy::Vanilla);
        cfg.max_epochs = 8;
        cfg.patience = 3;
        let (model, report) = finetune(
            &ckpt, None, &train, &val, &test, TaskType::Classification, 1, &cfg,
        )
        .unwrap();
        let best = report
            .history
            .iter()
            .map(|e| e.val_metric)
            .fold(f64::NEG_INFINITY, f64::max);
        let (recomputed, _) =
            evaluate_model(&model, &val, cfg.batch_size, TaskType::Classification).unwrap();
        assert!((recomputed - best).abs() < 1e-12);
    }

    #[test]
    fn empty_split_is_rejected() {
        let ckpt = tiny_ckpt();
        let data = toy_dataset(10);
        let (train, val, _) = splits(&data);
        let err = finetune(
            &ckpt,
            None,
            &train,
            &val,
            &[],
            TaskType::Classification,
            1,
            &quick_cfg(Strategy::Vanilla),
        )
        .unwrap_err();
        assert!(err.to_string().contains("empty split"));
    }
}
