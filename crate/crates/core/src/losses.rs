//! Training objectives: classification logits, conditional global and
//! instance alignment, the token bank, MMD, query contrast, the KL term and
//! the per-stage composites.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::diffcore::{Axis, Graph, Var};
use crate::error::{invalid, Error, Result};
use crate::matching::{focal_loss_var, mask_loss, Assignment, LossWeights};
use crate::tensor::{norm, sigmoid, Tensor};

/// Additive mask that removes a candidate from an InfoNCE denominator.
const MASKED: f64 = -1e9;

/// `sigmoid(S · A_subᵀ)`, on the graph.
pub fn classification_probs(g: &mut Graph, s: Var, a_sub: Var) -> Result<Var> {
    let at = g.transpose(a_sub)?;
    let logits = g.matmul(s, at)?;
    g.sigmoid(logits)
}

/// Plain-value class probabilities with an optional per-column logit offset.
pub fn class_probs(s: &Tensor, a_sub: &Tensor, logit_offset: Option<&[f64]>) -> Result<Tensor> {
    let mut logits = s.matmul(&a_sub.transpose())?;
    if let Some(off) = logit_offset {
        if off.len() != logits.cols() {
            return Err(invalid(format!(
                "logit offset has {} entries for {} classes",
                off.len(),
                logits.cols()
            )));
        }
        for r in 0..logits.rows() {
            for (v, o) in logits.row_mut(r).iter_mut().zip(off) {
                *v += o;
            }
        }
    }
    Ok(logits.map(sigmoid))
}

fn normalized_rows(t: &Tensor) -> Tensor {
    let mut out = t.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let n = norm(row);
        if n < 1e-12 {
            row.iter_mut().for_each(|v| *v = 0.0);
        } else {
            row.iter_mut().for_each(|v| *v /= n);
        }
    }
    out
}

/// Per-query weights `softmax_k(cos(s_k, c) · (γ·1{matched_k} + 1))`, `K × 1`.
pub fn conditional_weights(g: &mut Graph, s: Var, c: &Tensor, matched: &[bool], gamma: f64) -> Result<Var> {
    let k = g.value(s).rows();
    if matched.len() != k {
        return Err(invalid(format!("{} matched flags for {k} queries", matched.len())));
    }
    let sn = g.l2_normalize(s)?;
    let cn = g.constant(normalized_rows(c).transpose());
    let cos = g.matmul(sn, cn)?;
    let mult = g.constant(Tensor::column_vector(
        &matched.iter().map(|&m| if m { gamma + 1.0 } else { 1.0 }).collect::<Vec<_>>(),
    ));
    let logits = g.mul(cos, mult)?;
    g.softmax(logits, Axis::Rows)
}

/// `Wᵀ · S`, a `1 × C` token.
pub fn reconstruct_cls(g: &mut Graph, w: Var, s: Var) -> Result<Var> {
    let wt = g.transpose(w)?;
    g.matmul(wt, s)
}

/// FIFO store of recent CLS tokens used as extra negatives.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenBank {
    capacity: usize,
    tokens: VecDeque<Vec<f64>>,
}

impl TokenBank {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            tokens: VecDeque::with_capacity(capacity),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Appends every row of `batch`, evicting the oldest entries.
    pub fn push(&mut self, batch: &Tensor) {
        if self.capacity == 0 {
            return;
        }
        for r in 0..batch.rows() {
            if self.tokens.len() == self.capacity {
                self.tokens.pop_front();
            }
            self.tokens.push_back(batch.row(r).to_vec());
        }
    }

    /// Oldest first; `None` when empty.
    pub fn as_tensor(&self) -> Option<Tensor> {
        let first = self.tokens.front()?;
        Tensor::from_rows(&self.tokens.iter().collect::<Vec<_>>(), first.len()).ok()
    }

    pub fn clear(&mut self) {
        self.tokens.clear();
    }
}

/// An objective that may be skipped when it has no pairs.
#[derive(Clone, Copy, Debug)]
pub struct Term {
    pub value: Var,
    pub skipped: bool,
}

/// `−log softmax` InfoNCE: anchor `i` is positive with `candidates[i]`,
/// every other candidate row is a negative unless `exclude(i, j)`.
/// Similarities are cosines divided by `tau`; candidates carry no gradient.
fn info_nce(
    g: &mut Graph,
    anchors: Var,
    candidates: &Tensor,
    tau: f64,
    exclude: impl Fn(usize, usize) -> bool,
) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(invalid(format!("temperature must be > 0, got {tau}")));
    }
    let n = g.value(anchors).rows();
    if candidates.rows() < n || candidates.cols() != g.value(anchors).cols() {
        return Err(Error::ShapeMismatch {
            op: "info_nce",
            lhs: g.shape(anchors).to_vec(),
            rhs: candidates.shape().to_vec(),
        });
    }
    let m = candidates.rows();
    let an = g.l2_normalize(anchors)?;
    let ct = g.constant(normalized_rows(candidates).transpose());
    let sims = g.matmul(an, ct)?;
    let mut logits = g.scale(sims, 1.0 / tau)?;
    let mut mask = vec![0.0; n * m];
    let mut any = false;
    for i in 0..n {
        for j in 0..m {
            if j != i && exclude(i, j) {
                mask[i * m + j] = MASKED;
                any = true;
            }
        }
    }
    if any {
        let mv = g.constant(Tensor::matrix(n, m, mask)?);
        logits = g.add(logits, mv)?;
    }
    let ls = g.log_softmax(logits, Axis::Cols)?;
    let idx: Vec<(usize, usize)> = (0..n).map(|i| (i, i)).collect();
    let pos = g.gather(ls, &idx)?;
    let m = g.mean(pos)?;
    g.neg(m)
}

fn stack_candidates(first: &Tensor, rest: Option<&Tensor>) -> Result<Tensor> {
    match rest {
        Some(r) if r.rows() > 0 => {
            if r.cols() != first.cols() {
                return Err(Error::ShapeMismatch {
                    op: "info_nce",
                    lhs: first.shape().to_vec(),
                    rhs: r.shape().to_vec(),
                });
            }
            let mut data = first.data().to_vec();
            data.extend_from_slice(r.data());
            Tensor::matrix(first.rows() + r.rows(), first.cols(), data)
        }
        _ => Ok(first.clone()),
    }
}

/// Global alignment of reconstructed tokens `recon` (`B × C`) with image CLS
/// `targets`; the bank's tokens are extra negatives. The bank is updated
/// with `targets` afterwards.
pub fn cga_loss(g: &mut Graph, recon: Var, targets: &Tensor, bank: &mut TokenBank, tau: f64) -> Result<Var> {
    if g.value(recon).rows() != targets.rows() {
        return Err(Error::ShapeMismatch {
            op: "cga_loss",
            lhs: g.shape(recon).to_vec(),
            rhs: targets.shape().to_vec(),
        });
    }
    let negatives = bank.as_tensor();
    let cands = stack_candidates(targets, negatives.as_ref())?;
    let loss = info_nce(g, recon, &cands, tau, |_, _| false)?;
    bank.push(targets);
    Ok(loss)
}

/// Rows of `s` whose query is matched, ordered by segment index, with the
/// segment index of each row.
pub fn select_matched(assignment: &Assignment) -> Vec<(usize, usize)> {
    let mut pairs: Vec<(usize, usize)> = assignment
        .query_to_segment
        .iter()
        .enumerate()
        .filter_map(|(q, s)| s.map(|s| (s, q)))
        .collect();
    pairs.sort_unstable();
    pairs.into_iter().map(|(s, q)| (q, s)).collect()
}

/// Instance alignment of pooled matched semantic queries with their segment
/// CLS tokens. Skipped (value 0) when there are no pairs.
pub fn cia_loss(g: &mut Graph, matched: Option<Var>, segment_cls: &Tensor, tau: f64) -> Result<Term> {
    match matched {
        Some(s) if g.value(s).rows() > 0 => {
            if g.value(s).rows() != segment_cls.rows() {
                return Err(Error::ShapeMismatch {
                    op: "cia_loss",
                    lhs: g.shape(s).to_vec(),
                    rhs: segment_cls.shape().to_vec(),
                });
            }
            Ok(Term {
                value: info_nce(g, s, segment_cls, tau, |_, _| false)?,
                skipped: false,
            })
        }
        _ => Ok(Term {
            value: g.scalar(0.0),
            skipped: true,
        }),
    }
}

fn sq_dists(x: &Tensor, y: &Tensor) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.rows() * y.rows());
    for i in 0..x.rows() {
        for j in 0..y.rows() {
            out.push(x.row(i).iter().zip(y.row(j)).map(|(a, b)| (a - b) * (a - b)).sum());
        }
    }
    out
}

fn check_mmd_inputs(real: &Tensor, generated: &Tensor, bandwidths: &[f64]) -> Result<()> {
    if real.rows() == 0 || generated.rows() == 0 {
        return Err(invalid("mmd needs at least one sample on each side"));
    }
    if real.cols() != generated.cols() {
        return Err(Error::ShapeMismatch {
            op: "mmd_loss",
            lhs: real.shape().to_vec(),
            rhs: generated.shape().to_vec(),
        });
    }
    if bandwidths.is_empty() || bandwidths.iter().any(|&b| !(b > 0.0)) {
        return Err(invalid("bandwidths must be positive and non-empty"));
    }
    Ok(())
}

/// Plain-value biased squared MMD summed over Gaussian bandwidths.
pub fn mmd_value(real: &Tensor, generated: &Tensor, bandwidths: &[f64]) -> Result<f64> {
    check_mmd_inputs(real, generated, bandwidths)?;
    let (n, m) = (real.rows() as f64, generated.rows() as f64);
    let (rr, gg, rg) = (
        sq_dists(real, real),
        sq_dists(generated, generated),
        sq_dists(real, generated),
    );
    let mut total = 0.0;
    for &l in bandwidths {
        let k = |d: &f64| (-d / (2.0 * l * l)).exp();
        total += rr.iter().map(k).sum::<f64>() / (n * n) + gg.iter().map(k).sum::<f64>() / (m * m)
            - 2.0 * rg.iter().map(k).sum::<f64>() / (n * m);
    }
    Ok(total)
}

/// Differentiable MMD; gradients flow only to `generated`.
pub fn mmd_loss(g: &mut Graph, real: &Tensor, generated: Var, bandwidths: &[f64]) -> Result<Var> {
    check_mmd_inputs(real, g.value(generated), bandwidths)?;
    let n = real.rows() as f64;
    let rr = sq_dists(real, real);
    let rv = g.constant(real.clone());
    let dgg = g.pairwise_sq_dist(generated, generated)?;
    let drg = g.pairwise_sq_dist(rv, generated)?;
    let mut rr_total = 0.0;
    let mut parts = Vec::with_capacity(bandwidths.len());
    for &l in bandwidths {
        let c = -1.0 / (2.0 * l * l);
        rr_total += rr.iter().map(|d| (d * c).exp()).sum::<f64>() / (n * n);
        let a = g.scale(dgg, c)?;
        let ka = g.exp(a)?;
        let ma = g.mean(ka)?;
        let b = g.scale(drg, c)?;
        let kb = g.exp(b)?;
        let mb = g.mean(kb)?;
        let mb2 = g.scale(mb, -2.0)?;
        parts.push(g.add(ma, mb2)?);
    }
    let mut total = parts[0];
    for p in &parts[1..] {
        total = g.add(total, *p)?;
    }
    g.shift(total, rr_total)
}

/// Query contrast: generated row `i` is pulled toward `real[i]` and pushed
/// from unmatched queries and, when `matched_negatives`, the other matched
/// reals. Skipped (value 0) when there are no generated rows.
pub fn query_contrast_loss(
    g: &mut Graph,
    generated: Var,
    real: &Tensor,
    unmatched: Option<&Tensor>,
    tau_r: f64,
    matched_negatives: bool,
) -> Result<Term> {
    let o = g.value(generated).rows();
    if o == 0 {
        return Ok(Term {
            value: g.scalar(0.0),
            skipped: true,
        });
    }
    if real.rows() != o {
        return Err(Error::ShapeMismatch {
            op: "query_contrast_loss",
            lhs: g.shape(generated).to_vec(),
            rhs: real.shape().to_vec(),
        });
    }
    let cands = stack_candidates(real, unmatched)?;
    let value = info_nce(g, generated, &cands, tau_r, |_, j| !matched_negatives && j < o)?;
    Ok(Term { value, skipped: false })
}

/// `mean_rows ½ Σ (exp(logvar) + μ² − 1 − logvar)`.
pub fn kl_loss(g: &mut Graph, mu: Var, logvar: Var) -> Result<Var> {
    if g.shape(mu) != g.shape(logvar) {
        return Err(Error::ShapeMismatch {
            op: "kl_loss",
            lhs: g.shape(mu).to_vec(),
            rhs: g.shape(logvar).to_vec(),
        });
    }
    let (rows, numel) = (g.value(mu).rows(), g.value(mu).numel());
    let ev = g.exp(logvar)?;
    let mu2 = g.mul(mu, mu)?;
    let a = g.add(ev, mu2)?;
    let b = g.sub(a, logvar)?;
    let s = g.sum(b)?;
    let s = g.shift(s, -(numel as f64))?;
    g.scale(s, 0.5 / rows.max(1) as f64)
}

/// Matching loss of one image: focal over all queries and seen classes
/// (matched queries target their one-hot label, unmatched ones all zeros)
/// plus the mask loss averaged over matched pairs. The predicted masks are
/// frozen inputs, so the mask term carries no gradient.
pub fn match_loss(
    g: &mut Graph,
    probs: Var,
    assignment: &Assignment,
    labels: &[usize],
    pred_mask_logits: &Tensor,
    gt_masks: &[&[bool]],
    weights: &LossWeights,
) -> Result<Var> {
    let (k, n) = (g.value(probs).rows(), g.value(probs).cols());
    let targets = one_hot_targets(k, n, assignment, labels)?;
    let focal = focal_loss_var(g, probs, &targets, weights.alpha_focal, weights.gamma_focal)?;
    let focal = g.scale(focal, weights.cls_weight)?;
    let pairs = select_matched(assignment);
    if pairs.is_empty() {
        return Ok(focal);
    }
    let mut mask_total = 0.0;
    for &(q, s) in &pairs {
        mask_total += mask_loss(
            pred_mask_logits.plane_slice(q),
            gt_masks[s],
            weights.mask_bce_weight,
            weights.mask_dice_weight,
        )?;
    }
    g.shift(focal, mask_total / pairs.len() as f64)
}

/// `K × n` targets: one-hot rows for matched queries, zeros otherwise.
pub fn one_hot_targets(k: usize, n: usize, assignment: &Assignment, labels: &[usize]) -> Result<Tensor> {
    if assignment.query_to_segment.len() != k {
        return Err(invalid(format!(
            "assignment covers {} queries, expected {k}",
            assignment.query_to_segment.len()
        )));
    }
    let mut t = Tensor::zeros(&[k, n]);
    for (q, s) in assignment.query_to_segment.iter().enumerate() {
        if let Some(s) = s {
            let l = *labels
                .get(*s)
                .ok_or_else(|| invalid(format!("segment {s} has no label")))?;
            if l >= n {
                return Err(invalid(format!("label {l} out of range for {n} classes")));
            }
            t.row_mut(q)[l] = 1.0;
        }
    }
    Ok(t)
}

/// Training stage whose composite objective is assembled.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    Projector,
    Generator,
    Finetune,
}

impl Stage {
    pub fn number(self) -> u8 {
        match self {
            Stage::Projector => 1,
            Stage::Generator => 2,
            Stage::Finetune => 3,
        }
    }

    /// `(component, weight)` in summation order.
    pub fn terms(self, w: &LossWeights) -> Vec<(&'static str, f64)> {
        match self {
            Stage::Projector => vec![("cga", 1.0), ("cia", w.lambda_c), ("match", 1.0)],
            Stage::Generator => vec![
                ("gmmn", 1.0),
                ("kl", w.beta_kl),
                ("qc", w.lambda_r),
                ("sup", w.lambda_f),
            ],
            Stage::Finetune => vec![("seen", w.fcls_weight), ("pseudo", 1.0)],
        }
    }
}

/// Component values and weighted total of one optimization step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageLossReport {
    pub stage: u8,
    pub components: BTreeMap<String, f64>,
    pub weights: BTreeMap<String, f64>,
    pub skipped: Vec<String>,
    pub total: f64,
}

/// Weighted sum of named stage components. Terms with weight 0 are left out
/// of the graph entirely.
pub fn compose_stage_loss(
    g: &mut Graph,
    stage: Stage,
    components: &[(&str, Term)],
    weights: &LossWeights,
) -> Result<(Var, StageLossReport)> {
    let mut report = StageLossReport {
        stage: stage.number(),
        components: BTreeMap::new(),
        weights: BTreeMap::new(),
        skipped: Vec::new(),
        total: 0.0,
    };
    let mut total: Option<Var> = None;
    for (name, w) in stage.terms(weights) {
        let term = components
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, t)| *t)
            .ok_or(Error::MissingComponent(name))?;
        let v = g.item(term.value)?;
        report.components.insert(name.to_string(), v);
        report.weights.insert(name.to_string(), w);
        if term.skipped {
            report.skipped.push(name.to_string());
        }
        if w == 0.0 {
            continue;
        }
        let scaled = if w == 1.0 { term.value } else { g.scale(term.value, w)? };
        total = Some(match total {
            Some(t) => g.add(t, scaled)?,
            None => scaled,
        });
    }
    let total = match total {
        Some(t) => t,
        None => g.scalar(0.0),
    };
    report.total = g.item(total)?;
    Ok((total, report))
}
