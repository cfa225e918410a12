//! The searchable fine-tuning dimensions: per-layer identity augmentation,
//! multi-scale fusion of the K layer outputs, and graph-level readout.
//!
//! Each dimension has a fixed candidate set; the conv operator itself is a
//! singleton (the pre-trained backbone transfers unchanged). A discrete point
//! of the space is a [`StrategyChoice`]; continuous search over the space
//! lives in [`crate::search`].

use crate::error::{FtError, Result};
use crate::graph::GraphBatch;
use crate::params::ParamSet;
use crate::tensor::{Rng, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

// ---------------------------------------------------------------------------
// Candidate sets
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IdAug {
    ZeroAug,
    IdentityAug,
    TransAug,
}

impl IdAug {
    pub const ALL: [IdAug; 3] = [IdAug::ZeroAug, IdAug::IdentityAug, IdAug::TransAug];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fuse {
    Last,
    Concat,
    Max,
    Mean,
    Ppr,
    Lstm,
    Gpr,
}

impl Fuse {
    pub const ALL: [Fuse; 7] = [
        Fuse::Last,
        Fuse::Concat,
        Fuse::Max,
        Fuse::Mean,
        Fuse::Ppr,
        Fuse::Lstm,
        Fuse::Gpr,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Read {
    SumPooling,
    MeanPooling,
    MaxPooling,
    Set2set,
    SortPooling,
    NeuralPooling,
}

impl Read {
    pub const ALL: [Read; 6] = [
        Read::SumPooling,
        Read::MeanPooling,
        Read::MaxPooling,
        Read::Set2set,
        Read::SortPooling,
        Read::NeuralPooling,
    ];
}

/// Personalized-PageRank teleport constant for the `ppr` fusion weights.
pub const PPR_BETA: f64 = 0.15;
/// Nodes kept per graph by sort pooling (shorter graphs zero-pad).
pub const SORT_POOL_K: usize = 10;
/// Attention-with-recurrence processing steps in set2set.
pub const SET2SET_STEPS: usize = 3;

/// Bottleneck width for the transformed identity augmentation: 16 capped at
/// d/4 so the map stays parameter-efficient at any model width.
pub fn trans_bottleneck(d: usize) -> usize {
    16.min((d / 4).max(1))
}

/// One discrete fine-tuning strategy.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StrategyChoice {
    pub id_aug: Vec<IdAug>,
    pub fuse: Fuse,
    pub read: Read,
}

impl StrategyChoice {
    /// The degenerate point: vanilla backbone wiring plus mean pooling.
    pub fn degenerate(num_layers: usize) -> Self {
        StrategyChoice {
            id_aug: vec![IdAug::ZeroAug; num_layers],
            fuse: Fuse::Last,
            read: Read::MeanPooling,
        }
    }
}

/// Width of the fused representation for a given fusion candidate.
pub fn fuse_width(fuse: Fuse, num_layers: usize, d: usize) -> usize {
    match fuse {
        Fuse::Concat => num_layers * d,
        _ => d,
    }
}

/// Width of the readout output for input width `w`.
pub fn read_width(read: Read, w: usize) -> usize {
    match read {
        Read::Set2set => 2 * w,
        _ => w,
    }
}

// ---------------------------------------------------------------------------
// Space enumeration
// ---------------------------------------------------------------------------

/// Sizes of the four candidate sets.
#[derive(Debug, Clone, Copy)]
pub struct CandidateCounts {
    pub conv: usize,
    pub id: usize,
    pub fuse: usize,
    pub read: usize,
}

impl Default for CandidateCounts {
    fn default() -> Self {
        CandidateCounts {
            conv: 1,
            id: IdAug::ALL.len(),
            fuse: Fuse::ALL.len(),
            read: Read::ALL.len(),
        }
    }
}

/// |O_conv|^K * |O_id|^K * |O_fuse| * |O_read|.
pub fn enumerate_space(num_layers: usize, counts: CandidateCounts) -> u128 {
    (counts.conv as u128).pow(num_layers as u32)
        * (counts.id as u128).pow(num_layers as u32)
        * counts.fuse as u128
        * counts.read as u128
}

// ---------------------------------------------------------------------------
// Parameter bundles
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct TransAugIdx {
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

/// The output projection starts at zero so every strategy begins exactly at
/// the pre-trained function.
pub fn build_trans_aug(prefix: &str, d: usize, set: &mut ParamSet, rng: &mut Rng) -> TransAugIdx {
    let m = trans_bottleneck(d);
    TransAugIdx {
        w1: set.add(format!("{prefix}.w1"), Tensor::uniform_init(vec![d, m], d, rng)),
        b1: set.add(format!("{prefix}.b1"), Tensor::zeros(vec![m])),
        w2: set.add(format!("{prefix}.w2"), Tensor::zeros(vec![m, d])),
        b2: set.add(format!("{prefix}.b2"), Tensor::zeros(vec![d])),
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LstmCellIdx {
    pub w_ih: usize,
    pub w_hh: usize,
    pub b: usize,
}

fn build_lstm_cell(prefix: &str, din: usize, hidden: usize, set: &mut ParamSet, rng: &mut Rng) -> LstmCellIdx {
    LstmCellIdx {
        w_ih: set.add(
            format!("{prefix}.w_ih"),
            Tensor::uniform_init(vec![din, 4 * hidden], din.max(1), rng),
        ),
        w_hh: set.add(
            format!("{prefix}.w_hh"),
            Tensor::uniform_init(vec![hidden, 4 * hidden], hidden.max(1), rng),
        ),
        b: set.add(format!("{prefix}.b"), Tensor::zeros(vec![4 * hidden])),
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LstmFuseIdx {
    pub fw: LstmCellIdx,
    pub bw: LstmCellIdx,
    pub att_w: usize,
    pub att_b: usize,
    pub hidden: usize,
}

pub fn build_lstm_fuse(prefix: &str, d: usize, set: &mut ParamSet, rng: &mut Rng) -> LstmFuseIdx {
    let hidden = (d / 2).max(1);
    let fw = build_lstm_cell(&format!("{prefix}.fw"), d, hidden, set, rng);
    let bw = build_lstm_cell(&format!("{prefix}.bw"), d, hidden, set, rng);
    LstmFuseIdx {
        fw,
        bw,
        att_w: set.add(
            format!("{prefix}.att_w"),
            Tensor::uniform_init(vec![2 * hidden, 1], 2 * hidden, rng),
        ),
        att_b: set.add(format!("{prefix}.att_b"), Tensor::zeros(vec![1])),
        hidden,
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GprIdx {
    pub gamma: usize,
}

/// Gamma initialized so tanh(gamma) = 1/K: the gated fusion starts near mean
/// fusion but can learn per-layer signs.
pub fn build_gpr(prefix: &str, num_layers: usize, set: &mut ParamSet) -> GprIdx {
    let target = if num_layers == 1 { 3.0 } else { (1.0 / num_layers as f64).atanh() };
    GprIdx {
        gamma: set.add(
            format!("{prefix}.gamma"),
            Tensor::new(vec![num_layers], vec![target; num_layers]).unwrap(),
        ),
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Set2setIdx {
    pub cell: LstmCellIdx,
    pub width: usize,
}

pub fn build_set2set(prefix: &str, w: usize, set: &mut ParamSet, rng: &mut Rng) -> Set2setIdx {
    Set2setIdx {
        cell: build_lstm_cell(&format!("{prefix}.cell"), 2 * w, w, set, rng),
        width: w,
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SortPoolIdx {
    pub w: usize,
    pub b: usize,
    pub width: usize,
}

pub fn build_sort_pool(prefix: &str, w: usize, set: &mut ParamSet, rng: &mut Rng) -> SortPoolIdx {
    SortPoolIdx {
        w: set.add(
            format!("{prefix}.w"),
            Tensor::uniform_init(vec![SORT_POOL_K * w, w], SORT_POOL_K * w, rng),
        ),
        b: set.add(format!("{prefix}.b"), Tensor::zeros(vec![w])),
        width: w,
    }
}

#[derive(Debug, Clone, Copy)]
pub struct NeuralPoolIdx {
    pub wa: usize,
    pub ba: usize,
    pub wb: usize,
    pub bb: usize,
}

pub fn build_neural_pool(prefix: &str, w: usize, set: &mut ParamSet, rng: &mut Rng) -> NeuralPoolIdx {
    NeuralPoolIdx {
        wa: set.add(format!("{prefix}.wa"), Tensor::uniform_init(vec![w, w], w, rng)),
        ba: set.add(format!("{prefix}.ba"), Tensor::zeros(vec![w])),
        wb: set.add(format!("{prefix}.wb"), Tensor::uniform_init(vec![w, w], w, rng)),
        bb: set.add(format!("{prefix}.bb"), Tensor::zeros(vec![w])),
    }
}

/// Fusion parameter bundle covering every parameterized candidate at one
/// width (the supernet builds all of them, a discrete model only what the
/// choice needs).
#[derive(Debug, Clone, Copy, Default)]
pub struct FuseParams {
    pub lstm: Option<LstmFuseIdx>,
    pub gpr: Option<GprIdx>,
}

/// Readout parameter bundle at one input width.
#[derive(Debug, Clone, Copy, Default)]
pub struct ReadParams {
    pub set2set: Option<Set2setIdx>,
    pub sort: Option<SortPoolIdx>,
    pub neural: Option<NeuralPoolIdx>,
}

// ---------------------------------------------------------------------------
// Operations
// ---------------------------------------------------------------------------

/// Augment a layer's conv output with the center node's incoming
/// representation.
pub fn identity_aug(
    tape: &mut Tape,
    mode: IdAug,
    h_prev: Var,
    z: Var,
    trans: Option<&TransAugIdx>,
    vars: &[Var],
) -> Result<Var> {
    match mode {
        IdAug::ZeroAug => Ok(z),
        IdAug::IdentityAug => tape.add(h_prev, z),
        IdAug::TransAug => {
            let t = trans.ok_or_else(|| {
                FtError::Config("trans_aug selected without bottleneck parameters".into())
            })?;
            let g = trans_aug_map(tape, h_prev, t, vars)?;
            tape.add(g, z)
        }
    }
}

/// The bottleneck map g(.) of the transformed augmentation.
pub fn trans_aug_map(tape: &mut Tape, h: Var, t: &TransAugIdx, vars: &[Var]) -> Result<Var> {
    let mid = tape.matmul(h, vars[t.w1])?;
    let mid = tape.add_bias(mid, vars[t.b1])?;
    let mid = tape.relu(mid);
    let out = tape.matmul(mid, vars[t.w2])?;
    tape.add_bias(out, vars[t.b2])
}

/// Closed-form ppr fusion weights: beta*(1-beta)^(K-k) for k = 1..K,
/// renormalized to sum to one.
pub fn ppr_weights(num_layers: usize, beta: f64) -> Vec<f64> {
    let raw: Vec<f64> = (1..=num_layers)
        .map(|k| beta * (1.0 - beta).powi((num_layers - k) as i32))
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / total).collect()
}

fn lstm_cell_step(
    tape: &mut Tape,
    x: Var,
    h: Var,
    c: Var,
    cell: &LstmCellIdx,
    hidden: usize,
    vars: &[Var],
) -> Result<(Var, Var)> {
    let gx = tape.matmul(x, vars[cell.w_ih])?;
    let gh = tape.matmul(h, vars[cell.w_hh])?;
    let gates = tape.add(gx, gh)?;
    let gates = tape.add_bias(gates, vars[cell.b])?;
    let i_g = tape.slice_cols(gates, 0, hidden)?;
    let i_g = tape.sigmoid(i_g);
    let f_g = tape.slice_cols(gates, hidden, 2 * hidden)?;
    let f_g = tape.sigmoid(f_g);
    let g_g = tape.slice_cols(gates, 2 * hidden, 3 * hidden)?;
    let g_g = tape.tanh(g_g);
    let o_g = tape.slice_cols(gates, 3 * hidden, 4 * hidden)?;
    let o_g = tape.sigmoid(o_g);
    let fc = tape.mul(f_g, c)?;
    let ig = tape.mul(i_g, g_g)?;
    let c_new = tape.add(fc, ig)?;
    let tc = tape.tanh(c_new);
    let h_new = tape.mul(o_g, tc)?;
    Ok((h_new, c_new))
}

/// Attentive (JK-style) fusion: a bidirectional recurrent pass over the layer
/// sequence scores each layer per node; softmax across layers yields the
/// fusion weights. Returns (fused, weights[N, K]).
pub fn fuse_lstm_with_weights(
    tape: &mut Tape,
    layers: &[Var],
    idx: &LstmFuseIdx,
    vars: &[Var],
) -> Result<(Var, Var)> {
    let k = layers.len();
    let n = tape.shape(layers[0])[0];
    let hh = idx.hidden;
    let zero_h = tape.constant(vec![0.0; n * hh], vec![n, hh]);
    let zero_c = tape.constant(vec![0.0; n * hh], vec![n, hh]);

    let mut fw_states = Vec::with_capacity(k);
    let (mut h, mut c) = (zero_h, zero_c);
    for &x in layers {
        let (h2, c2) = lstm_cell_step(tape, x, h, c, &idx.fw, hh, vars)?;
        h = h2;
        c = c2;
        fw_states.push(h);
    }
    let mut bw_states = vec![None; k];
    let (mut h, mut c) = (zero_h, zero_c);
    for ki in (0..k).rev() {
        let (h2, c2) = lstm_cell_step(tape, layers[ki], h, c, &idx.bw, hh, vars)?;
        h = h2;
        c = c2;
        bw_states[ki] = Some(h);
    }

    let mut scores = Vec::with_capacity(k);
    for ki in 0..k {
        let cat = tape.concat_cols(&[fw_states[ki], bw_states[ki].unwrap()])?;
        let s = tape.matmul(cat, vars[idx.att_w])?;
        let s = tape.add_bias(s, vars[idx.att_b])?;
        scores.push(s);
    }
    let score_mat = tape.concat_cols(&scores)?; // [N, K]
    let weights = tape.softmax(score_mat)?;
    let mut fused: Option<Var> = None;
    for (ki, &layer) in layers.iter().enumerate() {
        let wk = tape.slice_cols(weights, ki, ki + 1)?;
        let part = tape.scale_rows(layer, wk)?;
        fused = Some(match fused {
            None => part,
            Some(acc) => tape.add(acc, part)?,
        });
    }
    Ok((fused.unwrap(), weights))
}

/// Fuse the K per-layer node representations into one.
pub fn fuse(
    tape: &mut Tape,
    mode: Fuse,
    layers: &[Var],
    params: &FuseParams,
    vars: &[Var],
) -> Result<Var> {
    if layers.is_empty() {
        return Err(FtError::Config("fuse of zero layers".into()));
    }
    let k = layers.len();
    match mode {
        Fuse::Last => Ok(layers[k - 1]),
        Fuse::Concat => tape.concat_cols(layers),
        Fuse::Max => {
            let mut acc = layers[0];
            for &l in &layers[1..] {
                acc = tape.max_elem(acc, l)?;
            }
            Ok(acc)
        }
        Fuse::Mean => {
            let mut acc = layers[0];
            for &l in &layers[1..] {
                acc = tape.add(acc, l)?;
            }
            Ok(tape.mul_scalar(acc, 1.0 / k as f64))
        }
        Fuse::Ppr => {
            let w = ppr_weights(k, PPR_BETA);
            let mut acc: Option<Var> = None;
            for (ki, &l) in layers.iter().enumerate() {
                let part = tape.mul_scalar(l, w[ki]);
                acc = Some(match acc {
                    None => part,
                    Some(a) => tape.add(a, part)?,
                });
            }
            Ok(acc.unwrap())
        }
        Fuse::Lstm => {
            let idx = params.lstm.as_ref().ok_or_else(|| {
                FtError::Config("lstm fusion selected without parameters".into())
            })?;
            Ok(fuse_lstm_with_weights(tape, layers, idx, vars)?.0)
        }
        Fuse::Gpr => {
            let idx = params
                .gpr
                .as_ref()
                .ok_or_else(|| FtError::Config("gpr fusion selected without parameters".into()))?;
            let gamma = tape.reshape(vars[idx.gamma], vec![1, k])?;
            let mut acc: Option<Var> = None;
            for (ki, &l) in layers.iter().enumerate() {
                let gk = tape.slice_cols(gamma, ki, ki + 1)?;
                let gk = tape.tanh(gk);
                let part = tape.scale(l, gk)?;
                acc = Some(match acc {
                    None => part,
                    Some(a) => tape.add(a, part)?,
                });
            }
            Ok(acc.unwrap())
        }
    }
}

/// Node order used by sort pooling: descending by last channel, ties broken
/// by the full feature row (descending, lexicographic), then by node index.
/// The feature tie-break keeps the readout permutation-invariant whenever
/// rows differ anywhere; identical rows are interchangeable.
pub(crate) fn sort_pool_indices(values: &[f64], width: usize, batch: &GraphBatch) -> Vec<usize> {
    let mut order = Vec::with_capacity(batch.num_graphs * SORT_POOL_K);
    let pad = batch.num_nodes; // index of the appended zero row
    for g in 0..batch.num_graphs {
        let (s, e) = (batch.node_offsets[g], batch.node_offsets[g + 1]);
        let mut nodes: Vec<usize> = (s..e).collect();
        nodes.sort_by(|&a, &b| {
            let ra = &values[a * width..(a + 1) * width];
            let rb = &values[b * width..(b + 1) * width];
            rb[width - 1]
                .total_cmp(&ra[width - 1])
                .then_with(|| {
                    for (x, y) in ra.iter().zip(rb) {
                        let c = y.total_cmp(x);
                        if c != std::cmp::Ordering::Equal {
                            return c;
                        }
                    }
                    std::cmp::Ordering::Equal
                })
                .then(a.cmp(&b))
        });
        for slot in 0..SORT_POOL_K {
            order.push(nodes.get(slot).copied().unwrap_or(pad));
        }
    }
    order
}

/// Permutation-invariant reduction of node representations to one vector per
/// graph. Output width depends on the candidate (see [`read_width`]).
pub fn readout(
    tape: &mut Tape,
    mode: Read,
    h: Var,
    batch: &GraphBatch,
    params: &ReadParams,
    vars: &[Var],
) -> Result<Var> {
    for g in 0..batch.num_graphs {
        if batch.node_offsets[g + 1] == batch.node_offsets[g] {
            return Err(FtError::Graph(format!("graph {g} with zero nodes in readout")));
        }
    }
    let ids = &batch.graph_ids;
    let b = batch.num_graphs;
    match mode {
        Read::SumPooling => tape.segment_sum(h, ids, b),
        Read::MeanPooling => {
            let sums = tape.segment_sum(h, ids, b)?;
            let inv: Vec<f64> = (0..b)
                .map(|g| 1.0 / (batch.node_offsets[g + 1] - batch.node_offsets[g]) as f64)
                .collect();
            let inv = tape.constant(inv, vec![b, 1]);
            tape.scale_rows(sums, inv)
        }
        Read::MaxPooling => tape.segment_max(h, ids, b),
        Read::Set2set => {
            let idx = params.set2set.as_ref().ok_or_else(|| {
                FtError::Config("set2set selected without parameters".into())
            })?;
            let w = idx.width;
            let mut q_star = tape.constant(vec![0.0; b * 2 * w], vec![b, 2 * w]);
            let mut hs = tape.constant(vec![0.0; b * w], vec![b, w]);
            let mut cs = tape.constant(vec![0.0; b * w], vec![b, w]);
            for _ in 0..SET2SET_STEPS {
                let (h2, c2) = lstm_cell_step(tape, q_star, hs, cs, &idx.cell, w, vars)?;
                hs = h2;
                cs = c2;
                let q_nodes = tape.gather_rows(hs, ids)?;
                let prod = tape.mul(h, q_nodes)?;
                let scores = tape.sum_rows(prod)?;
                let attn = tape.segment_softmax(scores, ids, b)?;
                let weighted = tape.scale_rows(h, attn)?;
                let r = tape.segment_sum(weighted, ids, b)?;
                q_star = tape.concat_cols(&[hs, r])?;
            }
            Ok(q_star)
        }
        Read::SortPooling => {
            let idx = params.sort.as_ref().ok_or_else(|| {
                FtError::Config("sort_pooling selected without parameters".into())
            })?;
            let w = idx.width;
            let order = sort_pool_indices(tape.value(h), w, batch);
            let zero_row = tape.constant(vec![0.0; w], vec![1, w]);
            let padded = tape.concat_rows(h, zero_row)?;
            let picked = tape.gather_rows(padded, &order)?;
            let flat = tape.reshape(picked, vec![b, SORT_POOL_K * w])?;
            let out = tape.matmul(flat, vars[idx.w])?;
            tape.add_bias(out, vars[idx.b])
        }
        Read::NeuralPooling => {
            let idx = params.neural.as_ref().ok_or_else(|| {
                FtError::Config("neural_pooling selected without parameters".into())
            })?;
            let gate_in = tape.matmul(h, vars[idx.wa])?;
            let gate_in = tape.add_bias(gate_in, vars[idx.ba])?;
            let gate = tape.sigmoid(gate_in);
            let val = tape.matmul(h, vars[idx.wb])?;
            let val = tape.add_bias(val, vars[idx.bb])?;
            let gated = tape.mul(gate, val)?;
            tape.segment_sum(gated, ids, b)
        }
    }
}
