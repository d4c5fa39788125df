//! Every training loss as a standalone tape function: the two directional
//! contrastive losses, the multi-positive text-to-image variant used in
//! stage 1, label-smoothed identity cross-entropy, batch-hard triplet,
//! image-to-text cross-entropy against all cached identity anchors, the
//! stage totals, and the averaged-feature stage-1 shortcut.
//!
//! All batch losses reduce by mean so learning rates are batch-size
//! independent.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::math;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct BatchLabels {
    pub ids: Vec<usize>,
    pub camids: Vec<usize>,
}

impl BatchLabels {
    pub fn from_ids(ids: Vec<usize>) -> Self {
        let camids = alloc::vec![0; ids.len()];
        BatchLabels { ids, camids }
    }

    /// Distinct ids in first-appearance order with their member indices.
    pub fn groups(&self) -> Vec<(usize, Vec<usize>)> {
        let mut groups: Vec<(usize, Vec<usize>)> = Vec::new();
        for (i, &y) in self.ids.iter().enumerate() {
            match groups.iter_mut().find(|(gid, _)| *gid == y) {
                Some((_, members)) => members.push(i),
                None => groups.push((y, alloc::vec![i])),
            }
        }
        groups
    }
}

/// Label-smoothed target distribution q_k = (1-eps)*[k == y] + eps/N.
#[derive(Debug, Clone, PartialEq)]
pub struct SmoothedTarget {
    pub q: Vec<f64>,
    pub epsilon: f64,
    pub y: usize,
}

pub const DEFAULT_SMOOTHING: f64 = 0.1;

impl SmoothedTarget {
    pub fn new(n_classes: usize, y: usize, epsilon: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&epsilon) {
            return Err(Error::Config(format!("smoothing epsilon {epsilon} outside [0,1)")));
        }
        if y >= n_classes {
            return Err(Error::Contract(format!("class {y} out of range {n_classes}")));
        }
        let base = epsilon / n_classes as f64;
        let mut q = alloc::vec![base; n_classes];
        q[y] += 1.0 - epsilon;
        Ok(SmoothedTarget { q, epsilon, y })
    }
}

/// Per-term weights of the stage-2 total.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stage2Weights {
    pub id: f64,
    pub tri: f64,
    pub i2tce: f64,
}

impl Stage2Weights {
    pub fn vit() -> Self {
        Stage2Weights { id: 0.25, tri: 1.0, i2tce: 1.0 }
    }

    pub fn cnn() -> Self {
        Stage2Weights { id: 1.0, tri: 1.0, i2tce: 1.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.id < 0.0 || self.tri < 0.0 || self.i2tce < 0.0 {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        Ok(())
    }
}

fn require_square(g: &Graph, s: Var) -> Result<usize> {
    let v = g.value(s);
    if v.rows != v.cols {
        return Err(Error::Contract(format!(
            "similarity matrix {}x{} is not square",
            v.rows, v.cols
        )));
    }
    Ok(v.rows)
}

/// Image-to-text contrastive loss: mean over rows of -log softmax at the
/// diagonal (matched pair).
pub fn loss_i2t(g: &mut Graph, s: Var) -> Result<Var> {
    let b = require_square(g, s)?;
    let ls = g.log_softmax_rows(s);
    let idx: Vec<(usize, usize)> = (0..b).map(|i| (i, i)).collect();
    let diag = g.gather_elems(ls, &idx);
    let m = g.mean_all(diag);
    Ok(g.scale(m, -1.0))
}

/// Text-to-image contrastive loss: as above but softmax over columns.
pub fn loss_t2i(g: &mut Graph, s: Var) -> Result<Var> {
    require_square(g, s)?;
    let st = g.transpose(s);
    loss_i2t(g, st)
}

/// Multi-positive text-to-image loss. Column i of `s` scores every batch
/// image against the text anchor of identity ids[i]; columns of images
/// sharing an identity are therefore duplicates. Per distinct identity the
/// log of (sum of positive exponentials / all exponentials) is taken (the
/// printed outer average over positives has a p-independent summand, so it
/// reduces to this), then averaged across distinct identities.
pub fn loss_t2i_multipos(g: &mut Graph, s: Var, labels: &BatchLabels) -> Result<Var> {
    let b = require_square(g, s)?;
    if labels.ids.len() != b {
        return Err(Error::Contract("label count != batch size".into()));
    }
    let groups = labels.groups();
    let mut per_id = Vec::with_capacity(groups.len());
    for (_, members) in &groups {
        if members.is_empty() {
            return Err(Error::Contract("empty positive set".into()));
        }
        let anchor_col = members[0];
        let pos_idx: Vec<(usize, usize)> =
            members.iter().map(|&p| (p, anchor_col)).collect();
        let all_idx: Vec<(usize, usize)> = (0..b).map(|a| (a, anchor_col)).collect();
        let pos = g.gather_elems(s, &pos_idx);
        let all = g.gather_elems(s, &all_idx);
        let num = g.log_sum_exp_all(pos);
        let den = g.log_sum_exp_all(all);
        per_id.push(g.sub(den, num));
    }
    let stacked = g.concat_rows(&per_id);
    Ok(g.mean_all(stacked))
}

/// Label-smoothed cross-entropy over raw scores (log-softmax applied
/// internally). `scores` is R×N; one target per row; mean over rows.
pub fn loss_id(g: &mut Graph, scores: Var, targets: &[SmoothedTarget]) -> Result<Var> {
    let v = g.value(scores);
    let (rows, n) = (v.rows, v.cols);
    if targets.len() != rows {
        return Err(Error::Contract("target count != score rows".into()));
    }
    for t in targets {
        if t.q.len() != n {
            return Err(Error::Contract(format!(
                "target has {} classes, scores have {n}",
                t.q.len()
            )));
        }
    }
    let ls = g.log_softmax_rows(scores);
    let mut q = Tensor::zeros(rows, n);
    for (r, t) in targets.iter().enumerate() {
        for (c, &qv) in t.q.iter().enumerate() {
            *q.at_mut(r, c) = qv;
        }
    }
    let qc = g.constant(q);
    let prod = g.mul(qc, ls);
    let per_row_sum = g.sum_all(prod);
    Ok(g.scale(per_row_sum, -1.0 / rows as f64))
}

/// Image-to-text cross-entropy against all `n_total` cached identity
/// anchors (not just the batch), with label smoothing.
pub fn loss_i2tce(
    g: &mut Graph,
    s_rows: Var,
    targets: &[SmoothedTarget],
    n_total: usize,
) -> Result<Var> {
    let v = g.value(s_rows);
    if v.cols != n_total {
        return Err(Error::Contract(format!(
            "similarity row length {} != total identity count {n_total}",
            v.cols
        )));
    }
    loss_id(g, s_rows, targets)
}

/// Averaged-feature text-to-image cross-entropy: `s_col` holds the
/// similarities of every per-identity mean image feature against one text
/// anchor T_y; the loss is -log softmax at y.
pub fn loss_t2ice_averaged(g: &mut Graph, s_col: Var, y: usize, n_total: usize) -> Result<Var> {
    let v = g.value(s_col);
    if v.len() != n_total {
        return Err(Error::Contract(format!(
            "similarity column length {} != total identity count {n_total}",
            v.len()
        )));
    }
    if y >= n_total {
        return Err(Error::Contract("identity out of range".into()));
    }
    let flat_idx = if v.rows == 1 { (0, y) } else { (y, 0) };
    let matched = g.gather_elems(s_col, &[flat_idx]);
    let matched = g.sum_all(matched);
    let lse = g.log_sum_exp_all(s_col);
    Ok(g.sub(lse, matched))
}

/// Batch-hard triplet mining result for one anchor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MinedTriplet {
    pub anchor: usize,
    pub hardest_pos: usize,
    pub hardest_neg: usize,
}

pub const DIST_EPS: f64 = 1e-12;

/// Euclidean distance table on raw (unnormalized) feature rows.
pub fn pairwise_distances(features: &Tensor) -> Tensor {
    let b = features.rows;
    let mut d = Tensor::zeros(b, b);
    for i in 0..b {
        for j in i + 1..b {
            let mut acc = 0.0;
            for c in 0..features.cols {
                let diff = features.at(i, c) - features.at(j, c);
                acc += diff * diff;
            }
            let dist = math::sqrt(acc + DIST_EPS);
            *d.at_mut(i, j) = dist;
            *d.at_mut(j, i) = dist;
        }
    }
    d
}

/// Batch-hard mining: per anchor the farthest same-id (self excluded) and
/// the closest different-id sample.
pub fn mine_batch_hard(dist: &Tensor, ids: &[usize]) -> Result<Vec<MinedTriplet>> {
    let b = ids.len();
    let mut out = Vec::with_capacity(b);
    for a in 0..b {
        let mut pos: Option<(usize, f64)> = None;
        let mut neg: Option<(usize, f64)> = None;
        for j in 0..b {
            if j == a {
                continue;
            }
            let d = dist.at(a, j);
            if ids[j] == ids[a] {
                if pos.is_none_or(|(_, best)| d > best) {
                    pos = Some((j, d));
                }
            } else if neg.is_none_or(|(_, best)| d < best) {
                neg = Some((j, d));
            }
        }
        match (pos, neg) {
            (Some((p, _)), Some((n, _))) => {
                out.push(MinedTriplet { anchor: a, hardest_pos: p, hardest_neg: n })
            }
            _ => {
                return Err(Error::Contract(format!(
                    "anchor {a} lacks a positive or negative in the batch"
                )))
            }
        }
    }
    Ok(out)
}

fn row_distance(g: &mut Graph, features: Var, i: usize, j: usize) -> Var {
    let a = g.gather_rows(features, &[i]);
    let b = g.gather_rows(features, &[j]);
    let diff = g.sub(a, b);
    let sq = g.mul(diff, diff);
    let sum = g.sum_all(sq);
    g.sqrt_eps(sum, DIST_EPS)
}

/// Batch-hard triplet loss: mean over anchors of
/// max(d_pos - d_neg + margin, 0).
pub fn loss_triplet(g: &mut Graph, features: Var, ids: &[usize], margin: f64) -> Result<Var> {
    let v = g.value(features);
    if v.rows != ids.len() {
        return Err(Error::Contract("feature rows != label count".into()));
    }
    let dist = pairwise_distances(v);
    let mined = mine_batch_hard(&dist, ids)?;
    let mut per_anchor = Vec::with_capacity(mined.len());
    for t in &mined {
        let dp = row_distance(g, features, t.anchor, t.hardest_pos);
        let dn = row_distance(g, features, t.anchor, t.hardest_neg);
        let gap = g.sub(dp, dn);
        let shifted = g.add_const(gap, margin);
        per_anchor.push(g.relu(shifted));
    }
    let stacked = g.concat_rows(&per_anchor);
    Ok(g.mean_all(stacked))
}

/// Stage-1 total: L_i2t + multi-positive L_t2i over one batch similarity
/// matrix.
pub fn loss_stage1(g: &mut Graph, s: Var, labels: &BatchLabels) -> Result<Var> {
    let a = loss_i2t(g, s)?;
    let b = loss_t2i_multipos(g, s, labels)?;
    Ok(g.add(a, b))
}

/// Stage-2 total: weighted sum of the identity, triplet, and
/// image-to-text cross-entropy terms.
pub fn loss_stage2(
    g: &mut Graph,
    weights: &Stage2Weights,
    id_term: Var,
    tri_term: Var,
    i2tce_term: Var,
) -> Result<Var> {
    weights.validate()?;
    let a = g.scale(id_term, weights.id);
    let b = g.scale(tri_term, weights.tri);
    let c = g.scale(i2tce_term, weights.i2tce);
    let ab = g.add(a, b);
    Ok(g.add(ab, c))
}

/// Evaluate a loss on a constant matrix without keeping the tape around.
pub fn eval_on(
    t: &Tensor,
    f: impl FnOnce(&mut Graph, Var) -> Result<Var>,
) -> Result<f64> {
    let store = crate::params::ParamStore::new();
    let mut g = Graph::new(&store);
    let v = g.constant(t.clone());
    let out = f(&mut g, v)?;
    Ok(g.value(out).item())
}
