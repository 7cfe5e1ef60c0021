//! Helpers shared by the integration tests: random inputs, gradient-check
//! cases for every objective, and brute-force oracles for matching and the
//! panoptic metrics.

#![allow(dead_code)]

use concat_core::datagen::GtSegment;
use concat_core::diffcore::{gradcheck, GradcheckReport, Graph, ParamStore, Var};
use concat_core::losses::{
    cga_loss, cia_loss, classification_probs, compose_stage_loss, conditional_weights, kl_loss,
    match_loss, mmd_loss, one_hot_targets, query_contrast_loss, reconstruct_cls, select_matched,
    Stage, Term, TokenBank,
};
use concat_core::matching::{
    focal_loss_var, hungarian, mask_loss_var, match_cost_matrix, Assignment, LossWeights,
};
use concat_core::metrics::PanopticPrediction;
use concat_core::models::{
    reparameterize, Binding, Conditioning, Generator, GeneratorConfig, NormMode, SemanticProjector,
};
use concat_core::{Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const GRAD_TOL: f64 = 1e-4;
pub const GRAD_STEP: f64 = 1e-6;
pub const GRAD_SEEDS: u64 = 20;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

pub fn unit_rows(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let mut t = uniform(rng, rows, cols, 1.0);
    for r in 0..rows {
        let n = t.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
        for v in t.row_mut(r) {
            *v /= n;
        }
    }
    t
}

fn single(store: &mut ParamStore, name: &str, value: Tensor) -> concat_core::diffcore::ParamId {
    store.add(name, value, true).unwrap()
}

pub fn check_focal(seed: u64) -> Result<GradcheckReport> {
    let mut r = rng(seed);
    let (k, n) = (r.random_range(1..=8), r.random_range(1..=16));
    let mut store = ParamStore::new();
    let id = single(&mut store, "logits", uniform(&mut r, k, n, 3.0));
    let targets = Tensor::matrix(k, n, (0..k * n).map(|_| r.random_range(0..2) as f64).collect())?;
    gradcheck(&mut store, GRAD_STEP, GRAD_TOL, |g, st| {
        let x = g.param(st, id);
        let p = g.sigmoid(x)?;
        focal_loss_var(g, p, &targets, 0.25, 2.0)
    })
}

pub fn check_mask(seed: u64) -> Result<GradcheckReport> {
    let mut r = rng(seed);
    let hw = r.random_range(1..=16);
    let mut store = ParamStore::new();
    let id = single(&mut store, "mask_logits", uniform(&mut r, 1, hw, 4.0));
    let gt: Vec<bool> = (0..hw).map(|_| r.random_bool(0.5)).collect();
    gradcheck(&mut store, GRAD_STEP, GRAD_TOL, |g, st| {
        let x = g.param(st, id);
        mask_loss_var(g, x, &gt, 1.0, 1.0)
    })
}

pub fn check_cga(seed: u64) -> Result<GradcheckReport> {
    let mut r = rng(seed);
    let (b, c) = (r.random_range(1..=8), r.random_range(2..=16));
    let bank_rows = r.random_range(0..=8);
    let mut store = ParamStore::new();
    let id = single(&mut store, "recon", uniform(&mut r, b, c, 1.0));
    let targets = unit_rows(&mut r, b, c);
    let bank_tokens = unit_rows(&mut r, bank_rows.max(1), c);
    let tau = [0.07, 0.5, 1.0][r.random_range(0..3)];
    gradcheck(&mut store, GRAD_STEP, GRAD_TOL, |g, st| {
        let mut bank = TokenBank::new(8);
        if bank_rows > 0 {
            bank.push(&bank_tokens);
        }
        let x = g.param(st, id);
        cga_loss(g, x, &targets, &mut bank, tau)
    })
}

pub fn check_cia(seed: u64) -> Result<GradcheckReport> {
    let mut r = rng(seed);
    let (o, c) = (r.random_range(1..=8), r.random_range(2..=16));
    let mut store = ParamStore::new();
    let id = single(&mut store, "matched", uniform(&mut r, o, c, 1.0));
    let cls = unit_rows(&mut r, o, c);
    gradcheck(&mut store, GRAD_STEP, GRAD_TOL, |g, st| {
        let x = g.param(st, id);
        Ok(cia_loss(g, Some(x), &cls, 0.07)?.value)
    })
}

pub fn check_mmd(seed: u64) -> Result<GradcheckReport> {
    let mut r = rng(seed);
    let (n, m, d) = (r.random_range(1..=8), r.random_range(1..=8), r.random_range(1..=16));
    let mut store = ParamStore::new();
    let id = single(&mut store, "generated", uniform(&mut r, m, d, 2.0));
    let real = uniform(&mut r, n, d, 2.0);
    let bw = LossWeights::default().bandwidths;
    gradcheck(&mut store, GRAD_STEP, GRAD_TOL, |g, st| {
        let x = g.param(st, id);
        mmd_loss(g, &real, x, &bw)
    })
}

pub fn check_query_contrast(seed: u64) -> Result<GradcheckReport> {
    let mut r = rng(seed);
    let (o, d) = (r.random_range(1..=6), r.random_range(2..=16));
    let un = r.random_range(0..=(8 - o));
    let mut store = ParamStore::new();
    let id = single(&mut store, "generated", uniform(&mut r, o, d, 1.0));
    let real = uniform(&mut r, o, d, 1.0);
    let unmatched = uniform(&mut r, un.max(1), d, 1.0);
    let matched_negatives = r.random_bool(0.5);
    gradcheck(&mut store, GRAD_STEP, GRAD_TOL, |g, st| {
        let x = g.param(st, id);
        let negs = (un > 0).then_some(&unmatched);
        Ok(query_contrast_loss(g, x, &real, negs, 0.07, matched_negatives)?.value)
    })
}

pub fn check_kl(seed: u64) -> Result<GradcheckReport> {
    let mut r = rng(seed);
    let (o, c) = (r.random_range(1..=8), r.random_range(1..=16));
    let mut store = ParamStore::new();
    let mu = single(&mut store, "mu", uniform(&mut r, o, c, 2.0));
    let lv = single(&mut store, "logvar", uniform(&mut r, o, c, 2.0));
    gradcheck(&mut store, GRAD_STEP, GRAD_TOL, |g, st| {
        let m = g.param(st, mu);
        let l = g.param(st, lv);
        kl_loss(g, m, l)
    })
}

/// A tiny image: `k` queries over a `side × side` grid with `o` segments.
pub struct TinyImage {
    pub queries: Tensor,
    pub mask_logits: Tensor,
    pub masks: Vec<Vec<bool>>,
    pub labels: Vec<usize>,
    pub global_cls: Tensor,
    pub segment_cls: Tensor,
}

pub fn tiny_image(r: &mut ChaCha8Rng, k: usize, d: usize, c: usize, n_classes: usize, side: usize) -> TinyImage {
    let o = r.random_range(1..=k.min(3));
    let hw = side * side;
    let mut masks = Vec::with_capacity(o);
    for _ in 0..o {
        masks.push((0..hw).map(|_| r.random_bool(0.3)).collect::<Vec<bool>>());
    }
    let labels = (0..o).map(|_| r.random_range(0..n_classes)).collect();
    let mask_logits = Tensor::new(vec![k, side, side], (0..k * hw).map(|_| r.random_range(-4.0..4.0)).collect()).unwrap();
    TinyImage {
        queries: uniform(r, k, d, 1.0),
        mask_logits,
        masks,
        labels,
        global_cls: unit_rows(r, 1, c),
        segment_cls: unit_rows(r, o, c),
    }
}

impl TinyImage {
    pub fn mask_refs(&self) -> Vec<&[bool]> {
        self.masks.iter().map(Vec::as_slice).collect()
    }
}

/// Stage-1 objective on a batch: matching is solved once at the starting
/// parameters and held fixed, since the assignment is piecewise constant.
pub fn check_stage1(seed: u64) -> Result<GradcheckReport> {
    let mut r = rng(seed);
    let (k, d, c, n) = (r.random_range(2..=6), 6, 5, 4);
    let w = LossWeights {
        lambda_c: [0.0, 1.0][r.random_range(0..2)],
        gamma_cond: [0.0, 2.0][r.random_range(0..2)],
        ..LossWeights::default()
    };
    let images: Vec<TinyImage> = (0..r.random_range(1..=3)).map(|_| tiny_image(&mut r, k, d, c, n, 3)).collect();
    let a_s = unit_rows(&mut r, n, c);
    let bank_tokens = unit_rows(&mut r, 3, c);
    let mut projector = SemanticProjector::new(d, c, seed)?;
    let assignments: Vec<Assignment> = images
        .iter()
        .map(|img| {
            let probs = concat_core::losses::class_probs(&projector.project(&img.queries)?, &a_s, None)?;
            hungarian(&match_cost_matrix(&probs, &img.mask_logits, &img.labels, &img.mask_refs(), &w)?)
        })
        .collect::<Result<_>>()?;
    let proj = projector.clone();
    gradcheck(&mut projector.store, GRAD_STEP, GRAD_TOL, |g, st| {
        let a = g.constant(a_s.clone());
        let mut recon = Vec::new();
        let mut targets = Vec::new();
        let mut matched = Vec::new();
        let mut seg_cls = Vec::new();
        let mut match_terms = Vec::new();
        for (img, asg) in images.iter().zip(&assignments) {
            let v = g.constant(img.queries.clone());
            let s = proj.forward_with(st, g, v, Binding::Trainable)?;
            let probs = classification_probs(g, s, a)?;
            match_terms.push(match_loss(g, probs, asg, &img.labels, &img.mask_logits, &img.mask_refs(), &w)?);
            let cw = conditional_weights(g, s, &img.global_cls, &asg.matched_flags(), w.gamma_cond)?;
            recon.push(reconstruct_cls(g, cw, s)?);
            targets.push(img.global_cls.row(0).to_vec());
            let pairs = select_matched(asg);
            let qs: Vec<usize> = pairs.iter().map(|&(q, _)| q).collect();
            matched.push(g.select_rows(s, &qs)?);
            seg_cls.extend(pairs.iter().map(|&(_, o)| img.segment_cls.row(o).to_vec()));
        }
        let recon = g.concat(&recon, concat_core::diffcore::Axis::Rows)?;
        let mut bank = TokenBank::new(w.bank_size);
        bank.push(&bank_tokens);
        let cga = cga_loss(g, recon, &Tensor::from_rows(&targets, c)?, &mut bank, w.tau)?;
        let s_all = g.concat(&matched, concat_core::diffcore::Axis::Rows)?;
        let cia = cia_loss(g, Some(s_all), &Tensor::from_rows(&seg_cls, c)?, w.tau)?;
        let mut m = match_terms[0];
        for t in &match_terms[1..] {
            m = g.add(m, *t)?;
        }
        let m = g.scale(m, 1.0 / images.len() as f64)?;
        let terms = [
            ("cga", Term { value: cga, skipped: false }),
            ("cia", cia),
            ("match", Term { value: m, skipped: false }),
        ];
        Ok(compose_stage_loss(g, Stage::Projector, &terms, &w)?.0)
    })
}

/// Stage-2 objective with batch norm in eval mode and a frozen projector.
pub fn check_stage2(seed: u64) -> Result<GradcheckReport> {
    let mut r = rng(seed);
    let (o, d, c, n) = (r.random_range(1..=6), 6, 4, 3);
    let cfg = GeneratorConfig {
        hidden: 0,
        blocks: 2,
        conditioning: [Conditioning::Add, Conditioning::Concat][r.random_range(0..2)],
    };
    let mut generator = Generator::new(d, c, cfg, seed)?;
    let projector = SemanticProjector::new(d, c, seed + 1)?;
    let real = uniform(&mut r, o, d, 1.0);
    let n_un = r.random_range(1..=4);
    let unmatched = uniform(&mut r, n_un, d, 1.0);
    let a_s = unit_rows(&mut r, n, c);
    let labels: Vec<usize> = (0..o).map(|_| r.random_range(0..n)).collect();
    let cond = a_s.select_rows(&labels)?;
    let eps = uniform(&mut r, o, c, 1.0);
    let w = LossWeights::default();
    let gen = generator.clone();
    gradcheck(&mut generator.store, GRAD_STEP, GRAD_TOL, |g, st| {
        let mut updates = Vec::new();
        let v = g.constant(real.clone());
        let enc = gen.encode_with(st, g, v, NormMode::Eval, &mut updates)?;
        let z = reparameterize(g, enc.mu, enc.logvar, &eps)?;
        let cv = g.constant(cond.clone());
        let vhat = gen.decode_with(st, g, z, cv, Binding::Trainable, NormMode::Eval, &mut updates)?;
        let gmmn = mmd_loss(g, &real, vhat, &w.bandwidths)?;
        let kl = kl_loss(g, enc.mu, enc.logvar)?;
        let qc = query_contrast_loss(g, vhat, &real, Some(&unmatched), w.tau_r, w.qc_matched_negatives)?;
        let s_hat = projector.forward(g, vhat, Binding::Frozen)?;
        let a = g.constant(a_s.clone());
        let probs = classification_probs(g, s_hat, a)?;
        let mut targets = Tensor::zeros(&[o, n]);
        for (row, &l) in labels.iter().enumerate() {
            targets.row_mut(row)[l] = 1.0;
        }
        let sup = focal_loss_var(g, probs, &targets, w.alpha_focal, w.gamma_focal)?;
        let terms = [
            ("gmmn", Term { value: gmmn, skipped: false }),
            ("kl", Term { value: kl, skipped: false }),
            ("qc", qc),
            ("sup", Term { value: sup, skipped: false }),
        ];
        Ok(compose_stage_loss(g, Stage::Generator, &terms, &w)?.0)
    })
}

/// Union-finetuning objective: seen focal with no-object rows plus focal
/// over the full table on fixed pseudo queries.
pub fn check_stage3(seed: u64) -> Result<GradcheckReport> {
    let mut r = rng(seed);
    let (k, d, c, n_seen, n_all) = (r.random_range(2..=6), 6, 5, 3, 5);
    let images: Vec<TinyImage> = (0..r.random_range(1..=2)).map(|_| tiny_image(&mut r, k, d, c, n_seen, 3)).collect();
    let all = unit_rows(&mut r, n_all, c);
    let a_s = all.select_rows(&[0, 1, 2])?;
    let n_pseudo = r.random_range(1..=8);
    let pseudo = uniform(&mut r, n_pseudo, d, 1.0);
    let pseudo_labels: Vec<usize> = (0..pseudo.rows()).map(|_| r.random_range(n_seen..n_all)).collect();
    let w = LossWeights::default();
    let mut projector = SemanticProjector::new(d, c, seed)?;
    let assignments: Vec<Assignment> = images
        .iter()
        .map(|img| {
            let probs = concat_core::losses::class_probs(&projector.project(&img.queries)?, &a_s, None)?;
            hungarian(&match_cost_matrix(&probs, &img.mask_logits, &img.labels, &img.mask_refs(), &w)?)
        })
        .collect::<Result<_>>()?;
    let proj = projector.clone();
    gradcheck(&mut projector.store, GRAD_STEP, GRAD_TOL, |g, st| {
        let a = g.constant(a_s.clone());
        let mut seen_terms = Vec::new();
        for (img, asg) in images.iter().zip(&assignments) {
            let v = g.constant(img.queries.clone());
            let s = proj.forward_with(st, g, v, Binding::Trainable)?;
            let probs = classification_probs(g, s, a)?;
            let t = one_hot_targets(k, n_seen, asg, &img.labels)?;
            seen_terms.push(focal_loss_var(g, probs, &t, w.alpha_focal, w.gamma_focal)?);
        }
        let mut seen = seen_terms[0];
        for t in &seen_terms[1..] {
            seen = g.add(seen, *t)?;
        }
        let seen = g.scale(seen, 1.0 / images.len() as f64)?;
        let v = g.constant(pseudo.clone());
        let s = proj.forward_with(st, g, v, Binding::Trainable)?;
        let af = g.constant(all.clone());
        let probs = classification_probs(g, s, af)?;
        let mut t = Tensor::zeros(&[pseudo.rows(), n_all]);
        for (row, &l) in pseudo_labels.iter().enumerate() {
            t.row_mut(row)[l] = 1.0;
        }
        let ps = focal_loss_var(g, probs, &t, w.alpha_focal, w.gamma_focal)?;
        let terms = [
            ("seen", Term { value: seen, skipped: false }),
            ("pseudo", Term { value: ps, skipped: false }),
        ];
        Ok(compose_stage_loss(g, Stage::Finetune, &terms, &w)?.0)
    })
}

pub type GradCase = (&'static str, fn(u64) -> Result<GradcheckReport>);

pub const GRAD_CASES: [GradCase; 10] = [
    ("focal", check_focal),
    ("mask", check_mask),
    ("cga_with_bank", check_cga),
    ("cia", check_cia),
    ("mmd", check_mmd),
    ("query_contrast", check_query_contrast),
    ("kl", check_kl),
    ("stage1_composite", check_stage1),
    ("stage2_composite", check_stage2),
    ("stage3_composite", check_stage3),
];

/// Seeds on which `case` fails, with the worst relative error seen.
pub fn grad_failures(case: fn(u64) -> Result<GradcheckReport>) -> (Vec<u64>, f64) {
    let mut failed = Vec::new();
    let mut worst: f64 = 0.0;
    for seed in 0..GRAD_SEEDS {
        let report = case(seed).expect("gradcheck ran");
        worst = worst.max(report.max_rel_err());
        if !report.passed() {
            failed.push(seed);
        }
    }
    (failed, worst)
}

/// Minimum total cost over all injective segment-to-query maps.
pub fn brute_force_assignment(cost: &Tensor) -> f64 {
    fn go(cost: &Tensor, seg: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
        if seg == cost.cols() {
            *best = best.min(acc);
            return;
        }
        for q in 0..cost.rows() {
            if !used[q] {
                used[q] = true;
                go(cost, seg + 1, used, acc + cost.at(q, seg), best);
                used[q] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    go(cost, 0, &mut vec![false; cost.rows()], 0.0, &mut best);
    best
}

/// A random `side × side` image: up to three ground-truth segments and a
/// prediction drawn independently, both as per-pixel labels.
pub fn random_grid_case(r: &mut ChaCha8Rng, side: usize, n_categories: usize) -> (PanopticPrediction, Vec<GtSegment>) {
    let hw = side * side;
    let n_gt = r.random_range(0..=3);
    let gt_cats: Vec<usize> = (0..n_gt).map(|_| r.random_range(0..n_categories)).collect();
    let gt_labels: Vec<Option<usize>> = (0..hw)
        .map(|_| {
            let x = r.random_range(0..=n_gt);
            (x < n_gt).then_some(x)
        })
        .collect();
    let mut gts = Vec::new();
    for (i, &cat) in gt_cats.iter().enumerate() {
        let mask: Vec<bool> = gt_labels.iter().map(|l| *l == Some(i)).collect();
        if mask.iter().any(|&m| m) {
            gts.push(GtSegment {
                category: cat,
                segment_id: i as u32 + 1,
                mask,
            });
        }
    }
    // predictions either perturb the ground truth or are drawn fresh
    let n_pred = r.random_range(0..=3);
    let pred_cats: Vec<usize> = (0..n_pred)
        .map(|i| {
            if i < gt_cats.len() && r.random_bool(0.7) {
                gt_cats[i]
            } else {
                r.random_range(0..n_categories)
            }
        })
        .collect();
    let segment_map: Vec<Option<usize>> = gt_labels
        .iter()
        .map(|&l| {
            let keep = r.random_bool(0.75);
            match l {
                Some(i) if keep && i < n_pred => Some(i),
                _ if n_pred == 0 => None,
                _ => {
                    let x = r.random_range(0..=n_pred);
                    (x < n_pred).then_some(x)
                }
            }
        })
        .collect();
    let segments = pred_cats
        .iter()
        .map(|&category| concat_core::metrics::PredSegment {
            category,
            confidence: 1.0,
        })
        .collect();
    (
        PanopticPrediction {
            height: side,
            width: side,
            segment_map,
            segments,
        },
        gts,
    )
}

/// Pixel-counting PQ per category: `(tp, fp, fn, iou_sum)`.
pub fn oracle_pq_counts(
    preds: &[PanopticPrediction],
    gts: &[Vec<GtSegment>],
    category: usize,
) -> (usize, usize, usize, f64) {
    let (mut tp, mut fp, mut fn_, mut iou_sum) = (0, 0, 0, 0.0);
    for (pred, gt) in preds.iter().zip(gts) {
        let pred_ids: Vec<usize> = (0..pred.segments.len())
            .filter(|&p| pred.segments[p].category == category && pred.segment_map.contains(&Some(p)))
            .collect();
        let gt_ids: Vec<usize> = (0..gt.len()).filter(|&s| gt[s].category == category).collect();
        let mut pred_hit = vec![false; pred_ids.len()];
        for &s in &gt_ids {
            let mut hit = false;
            for (pi, &p) in pred_ids.iter().enumerate() {
                let mut inter = 0;
                let mut union = 0;
                for (pix, &m) in gt[s].mask.iter().enumerate() {
                    let in_p = pred.segment_map[pix] == Some(p);
                    if m && in_p {
                        inter += 1;
                    }
                    if m || in_p {
                        union += 1;
                    }
                }
                let iou = inter as f64 / union as f64;
                if iou > 0.5 {
                    hit = true;
                    pred_hit[pi] = true;
                    tp += 1;
                    iou_sum += iou;
                }
            }
            if !hit {
                fn_ += 1;
            }
        }
        fp += pred_hit.iter().filter(|&&h| !h).count();
    }
    (tp, fp, fn_, iou_sum)
}

/// Pixel-counting IoU of one category accumulated over the split, with the
/// number of ground-truth pixels.
pub fn oracle_iou(preds: &[PanopticPrediction], gts: &[Vec<GtSegment>], category: usize) -> (f64, usize) {
    let (mut inter, mut union, mut gt_pixels) = (0usize, 0usize, 0usize);
    for (pred, gt) in preds.iter().zip(gts) {
        for pix in 0..pred.height * pred.width {
            let in_gt = gt.iter().any(|s| s.category == category && s.mask[pix]);
            let in_pred = pred.segment_map[pix].is_some_and(|p| pred.segments[p].category == category);
            inter += usize::from(in_gt && in_pred);
            union += usize::from(in_gt || in_pred);
            gt_pixels += usize::from(in_gt);
        }
    }
    let iou = if union == 0 { 0.0 } else { inter as f64 / union as f64 };
    (iou, gt_pixels)
}

pub fn graph_value(f: impl FnOnce(&mut Graph) -> Result<Var>) -> f64 {
    let mut g = Graph::new();
    let v = f(&mut g).unwrap();
    g.item(v).unwrap()
}
