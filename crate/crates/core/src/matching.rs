//! Query-to-segment assignment: focal and mask losses, the matching cost,
//! and an exact Kuhn–Munkres solver.

use serde::{Deserialize, Serialize};

use crate::diffcore::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{sigmoid, Tensor};

/// Probability clamp applied before every logarithm in the focal loss.
pub const PROB_EPS: f64 = 1e-7;

/// Weights and temperatures shared by every training objective.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub alpha_focal: f64,
    pub gamma_focal: f64,
    /// Multiplier on the focal classification term inside the matching loss.
    pub cls_weight: f64,
    pub mask_bce_weight: f64,
    pub mask_dice_weight: f64,
    pub lambda_c: f64,
    pub lambda_r: f64,
    pub lambda_f: f64,
    /// Condition scale of the global-alignment weights.
    pub gamma_cond: f64,
    pub tau: f64,
    pub tau_r: f64,
    pub bandwidths: Vec<f64>,
    pub bank_size: usize,
    pub beta_kl: f64,
    /// Treat other matched real queries as query-contrast negatives.
    pub qc_matched_negatives: bool,
    /// Weight of the seen focal term during union-finetuning.
    pub fcls_weight: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha_focal: 0.25,
            gamma_focal: 2.0,
            cls_weight: 1.0,
            mask_bce_weight: 1.0,
            mask_dice_weight: 1.0,
            lambda_c: 1.0,
            lambda_r: 0.1,
            lambda_f: 0.01,
            gamma_cond: 2.0,
            tau: 0.07,
            tau_r: 0.07,
            bandwidths: vec![2.0, 5.0, 10.0, 20.0, 40.0, 60.0],
            bank_size: 32,
            beta_kl: 1.0,
            qc_matched_negatives: true,
            fcls_weight: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let named = [
            ("alpha_focal", self.alpha_focal),
            ("gamma_focal", self.gamma_focal),
            ("cls_weight", self.cls_weight),
            ("mask_bce_weight", self.mask_bce_weight),
            ("mask_dice_weight", self.mask_dice_weight),
            ("lambda_c", self.lambda_c),
            ("lambda_r", self.lambda_r),
            ("lambda_f", self.lambda_f),
            ("gamma_cond", self.gamma_cond),
            ("beta_kl", self.beta_kl),
            ("fcls_weight", self.fcls_weight),
        ];
        for (name, v) in named {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("losses.{name} must be finite and >= 0, got {v}")));
            }
        }
        if self.alpha_focal > 1.0 {
            return Err(Error::Config("losses.alpha_focal must be <= 1".into()));
        }
        for (name, t) in [("tau", self.tau), ("tau_r", self.tau_r)] {
            if !(t > 0.0 && t.is_finite()) {
                return Err(Error::Config(format!("losses.{name} must be > 0, got {t}")));
            }
        }
        if self.bandwidths.is_empty() || self.bandwidths.iter().any(|&b| !(b > 0.0)) {
            return Err(Error::Config(
                "losses.bandwidths must be a non-empty list of positive values".into(),
            ));
        }
        Ok(())
    }
}

fn check_same(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a == b {
        Ok(())
    } else {
        Err(Error::ShapeMismatch {
            op,
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        })
    }
}

fn focal_term(p: f64, y: f64, alpha: f64, gamma: f64) -> f64 {
    let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    -alpha * (1.0 - p).powf(gamma) * y * p.ln() - (1.0 - alpha) * p.powf(gamma) * (1.0 - y) * (1.0 - p).ln()
}

/// Mean sigmoid focal loss over elements, on probabilities.
pub fn focal_loss(probs: &Tensor, targets: &Tensor, alpha: f64, gamma: f64) -> Result<f64> {
    check_same("focal_loss", probs.shape(), targets.shape())?;
    if probs.numel() == 0 {
        return Ok(0.0);
    }
    let s: f64 = probs
        .data()
        .iter()
        .zip(targets.data())
        .map(|(&p, &y)| focal_term(p, y, alpha, gamma))
        .sum();
    Ok(s / probs.numel() as f64)
}

/// Differentiable [`focal_loss`]; `targets` are constants.
pub fn focal_loss_var(g: &mut Graph, probs: Var, targets: &Tensor, alpha: f64, gamma: f64) -> Result<Var> {
    check_same("focal_loss", g.shape(probs), targets.shape())?;
    let p = g.clamp(probs, PROB_EPS, 1.0 - PROB_EPS)?;
    let neg_p = g.scale(p, -1.0)?;
    let q = g.shift(neg_p, 1.0)?;
    let log_p = g.log(p)?;
    let log_q = g.log(q)?;
    let q_pow = g.powf(q, gamma)?;
    let p_pow = g.powf(p, gamma)?;
    let pos = g.mul(q_pow, log_p)?;
    let neg = g.mul(p_pow, log_q)?;
    let wpos = g.constant(targets.map(|y| -alpha * y));
    let wneg = g.constant(targets.map(|y| -(1.0 - alpha) * (1.0 - y)));
    let a = g.mul(pos, wpos)?;
    let b = g.mul(neg, wneg)?;
    let total = g.add(a, b)?;
    g.mean(total)
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Sigmoid BCE (mean) plus smoothed dice, on mask logits.
pub fn mask_loss(logits: &[f64], gt: &[bool], bce_weight: f64, dice_weight: f64) -> Result<f64> {
    if logits.len() != gt.len() {
        return Err(Error::ShapeMismatch {
            op: "mask_loss",
            lhs: vec![logits.len()],
            rhs: vec![gt.len()],
        });
    }
    if logits.is_empty() {
        return Ok(0.0);
    }
    let mut bce = 0.0;
    let (mut inter, mut psum, mut gsum) = (0.0, 0.0, 0.0);
    for (&x, &m) in logits.iter().zip(gt) {
        let y = if m { 1.0 } else { 0.0 };
        bce += softplus(x) - x * y;
        let p = sigmoid(x);
        inter += p * y;
        psum += p;
        gsum += y;
    }
    bce /= logits.len() as f64;
    let dice = 1.0 - (2.0 * inter + 1.0) / (psum + gsum + 1.0);
    Ok(bce_weight * bce + dice_weight * dice)
}

/// Differentiable [`mask_loss`]; `logits` is a `1 × HW` row.
pub fn mask_loss_var(g: &mut Graph, logits: Var, gt: &[bool], bce_weight: f64, dice_weight: f64) -> Result<Var> {
    if g.value(logits).numel() != gt.len() {
        return Err(Error::ShapeMismatch {
            op: "mask_loss",
            lhs: g.shape(logits).to_vec(),
            rhs: vec![gt.len()],
        });
    }
    let y = Tensor::new(
        g.shape(logits).to_vec(),
        gt.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect(),
    )?;
    let gsum: f64 = y.data().iter().sum();
    let yv = g.constant(y);
    let sp = g.map(logits, softplus, sigmoid)?;
    let xy = g.mul(logits, yv)?;
    let bce_el = g.sub(sp, xy)?;
    let bce = g.mean(bce_el)?;
    let p = g.sigmoid(logits)?;
    let py = g.mul(p, yv)?;
    let inter = g.sum(py)?;
    let psum = g.sum(p)?;
    let num0 = g.scale(inter, 2.0)?;
    let num = g.shift(num0, 1.0)?;
    let den = g.shift(psum, gsum + 1.0)?;
    let ratio = g.div(num, den)?;
    let neg = g.scale(ratio, -1.0)?;
    let dice = g.shift(neg, 1.0)?;
    let a = g.scale(bce, bce_weight)?;
    let b = g.scale(dice, dice_weight)?;
    g.add(a, b)
}

/// `K × O` focal classification cost of each query against each segment's
/// one-hot label. `labels` index the columns of `class_probs`.
pub fn class_cost_matrix(class_probs: &Tensor, labels: &[usize], alpha: f64, gamma: f64) -> Result<Tensor> {
    let (k, n) = (class_probs.rows(), class_probs.cols());
    let mut out = Vec::with_capacity(k * labels.len());
    for q in 0..k {
        let row = class_probs.row(q);
        // focal against all-zero targets, then swap in the positive term
        let base: f64 = row.iter().map(|&p| focal_term(p, 0.0, alpha, gamma)).sum();
        for &l in labels {
            if l >= n {
                return Err(Error::InvalidArgument(format!("label {l} out of range for {n} classes")));
            }
            let c = base - focal_term(row[l], 0.0, alpha, gamma) + focal_term(row[l], 1.0, alpha, gamma);
            out.push(c / n as f64);
        }
    }
    Tensor::matrix(k, labels.len(), out)
}

/// `K × O` mask cost of each query's predicted mask against each segment.
pub fn mask_cost_matrix(pred_mask_logits: &Tensor, gt_masks: &[&[bool]], bce_weight: f64, dice_weight: f64) -> Result<Tensor> {
    let k = pred_mask_logits.shape()[0];
    let mut out = Vec::with_capacity(k * gt_masks.len());
    for q in 0..k {
        let logits = pred_mask_logits.plane_slice(q);
        for m in gt_masks {
            out.push(mask_loss(logits, m, bce_weight, dice_weight)?);
        }
    }
    Tensor::matrix(k, gt_masks.len(), out)
}

/// Full matching cost: focal classification plus mask loss, no gradients.
pub fn match_cost_matrix(
    class_probs: &Tensor,
    pred_mask_logits: &Tensor,
    labels: &[usize],
    gt_masks: &[&[bool]],
    weights: &LossWeights,
) -> Result<Tensor> {
    let k = class_probs.rows();
    if labels.len() != gt_masks.len() {
        return Err(Error::InvalidArgument("one label per ground-truth mask".into()));
    }
    if labels.len() > k {
        return Err(Error::InfeasibleMatching {
            queries: k,
            segments: labels.len(),
        });
    }
    if pred_mask_logits.shape().len() != 3 || pred_mask_logits.shape()[0] != k {
        return Err(Error::ShapeMismatch {
            op: "match_cost_matrix",
            lhs: class_probs.shape().to_vec(),
            rhs: pred_mask_logits.shape().to_vec(),
        });
    }
    let cls = class_cost_matrix(class_probs, labels, weights.alpha_focal, weights.gamma_focal)?;
    let mask = mask_cost_matrix(pred_mask_logits, gt_masks, weights.mask_bce_weight, weights.mask_dice_weight)?;
    combine_costs(&cls, &mask, weights.cls_weight)
}

pub(crate) fn combine_costs(cls: &Tensor, mask: &Tensor, cls_weight: f64) -> Result<Tensor> {
    check_same("match_cost_matrix", cls.shape(), mask.shape())?;
    let data = cls
        .data()
        .iter()
        .zip(mask.data())
        .map(|(c, m)| cls_weight * c + m)
        .collect();
    Tensor::new(cls.shape().to_vec(), data)
}

/// Result of [`hungarian`]: `query_to_segment[k]` is the segment matched to
/// query `k`, if any.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    pub query_to_segment: Vec<Option<usize>>,
    pub total_cost: f64,
}

impl Assignment {
    pub fn n_matched(&self) -> usize {
        self.query_to_segment.iter().flatten().count()
    }

    /// `segment_to_query[o]`.
    pub fn segment_to_query(&self, n_segments: usize) -> Vec<Option<usize>> {
        let mut out = vec![None; n_segments];
        for (q, s) in self.query_to_segment.iter().enumerate() {
            if let Some(s) = s {
                out[*s] = Some(q);
            }
        }
        out
    }

    pub fn matched_flags(&self) -> Vec<bool> {
        self.query_to_segment.iter().map(Option::is_some).collect()
    }

    pub fn unmatched_queries(&self) -> Vec<usize> {
        self.query_to_segment
            .iter()
            .enumerate()
            .filter_map(|(q, s)| s.is_none().then_some(q))
            .collect()
    }
}

/// Kuhn–Munkres with potentials on a `rows × cols` sub-problem,
/// `rows.len() <= cols.len()`. `cost(r, c)` is indexed by the original ids.
/// Returns the total and the column chosen for every row.
fn solve(cost: &dyn Fn(usize, usize) -> f64, rows: &[usize], cols: &[usize]) -> (f64, Vec<usize>) {
    let (n, m) = (rows.len(), cols.len());
    if n == 0 {
        return (0.0, vec![]);
    }
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost(rows[i0 - 1], cols[j - 1]) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut col_of_row = vec![0usize; n];
    for j in 1..=m {
        if p[j] != 0 {
            col_of_row[p[j] - 1] = cols[j - 1];
        }
    }
    let total = rows
        .iter()
        .zip(&col_of_row)
        .map(|(&r, &c)| cost(r, c))
        .sum();
    (total, col_of_row)
}

fn ties(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12 * a.abs().max(b.abs()).max(1.0)
}

/// Minimum-cost injective assignment of segments (columns of the `K × O`
/// cost) to queries (rows). Among optimal assignments the one giving the
/// lowest query to segment 0, then segment 1, and so on, is returned.
pub fn hungarian(cost: &Tensor) -> Result<Assignment> {
    if !cost.is_matrix() {
        return Err(Error::Contract(format!("cost must be a matrix, got {:?}", cost.shape())));
    }
    let (k, o) = (cost.rows(), cost.cols());
    if o > k {
        return Err(Error::InfeasibleMatching {
            queries: k,
            segments: o,
        });
    }
    if !cost.all_finite() {
        return Err(Error::NonFinite { op: "hungarian" });
    }
    // rows of the solver are segments, columns are queries
    let c = |seg: usize, q: usize| cost.at(q, seg);
    let segments: Vec<usize> = (0..o).collect();
    let queries: Vec<usize> = (0..k).collect();
    let (best, mut chosen) = solve(&c, &segments, &queries);

    let mut fixed_cost = 0.0;
    let mut used = vec![false; k];
    for s in 0..o {
        let rest_rows: Vec<usize> = (s + 1..o).collect();
        for q in 0..chosen[s] {
            if used[q] {
                continue;
            }
            let rest_cols: Vec<usize> = (0..k).filter(|&j| !used[j] && j != q).collect();
            let (rest, assign) = solve(&c, &rest_rows, &rest_cols);
            if ties(fixed_cost + c(s, q) + rest, best) {
                chosen[s] = q;
                chosen[s + 1..].copy_from_slice(&assign);
                break;
            }
        }
        used[chosen[s]] = true;
        fixed_cost += c(s, chosen[s]);
    }

    let mut query_to_segment = vec![None; k];
    for (s, &q) in chosen.iter().enumerate() {
        query_to_segment[q] = Some(s);
    }
    let total_cost = chosen.iter().enumerate().map(|(s, &q)| c(s, q)).sum();
    Ok(Assignment {
        query_to_segment,
        total_cost,
    })
}
