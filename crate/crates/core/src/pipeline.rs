//! The three training stages, panoptic inference and run-directory
//! orchestration.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{Mode, RunConfig};
use crate::datagen::{derive_seed, generate_dataset, ImageSample, SeenEmbeddings, SemanticEmbeddingTable, SyntheticDataset};
use crate::diffcore::{load_checkpoint, save_checkpoint, Adam, AdamConfig, Graph, Var};
use crate::error::{invalid, Error, Result};
use crate::losses::{
    cga_loss, cia_loss, class_probs, classification_probs, compose_stage_loss, conditional_weights, kl_loss,
    match_loss, mmd_loss, mmd_value, one_hot_targets, query_contrast_loss, reconstruct_cls, select_matched, Stage,
    StageLossReport, Term, TokenBank,
};
use crate::matching::{class_cost_matrix, combine_costs, focal_loss_var, hungarian, mask_cost_matrix, Assignment, LossWeights};
use crate::metrics::{evaluate, with_pool, MetricsReport, PanopticPrediction, PredSegment};
use crate::models::{
    reparameterize, sample_pseudo_unseen, standard_normal, Binding, Generator, NormMode, SemanticProjector,
};
use crate::tensor::{cosine, sigmoid, Tensor};

/// Queries whose best class probability is below this are dropped.
pub const SEGMENT_THRESHOLD: f64 = 0.1;
/// Added to unseen-category logits at inductive inference.
pub const UNSEEN_LOGIT_BOOST: f64 = 1.0;
/// Pixels whose winning mask probability is below this stay void.
pub const MASK_THRESHOLD: f64 = 0.5;

const STREAM_SHUFFLE: u64 = 200;
const STREAM_EPS: u64 = 210;
const STREAM_PSEUDO: u64 = 220;
const STREAM_PROBE: u64 = 230;
/// Real queries per category used by the per-epoch MMD probe.
const PROBE_CAP: usize = 100;

/// One JSON-lines log entry: `kind` is `"iter"` or `"epoch"`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub kind: String,
    pub stage: u8,
    pub epoch: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub iteration: Option<usize>,
    pub lr: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub losses: Option<StageLossReport>,
    #[serde(skip_serializing_if = "BTreeMap::is_empty", default)]
    pub metrics: BTreeMap<String, f64>,
}

impl LogRecord {
    fn iter(stage: Stage, epoch: usize, iteration: usize, lr: f64, report: StageLossReport) -> Self {
        Self {
            kind: "iter".into(),
            stage: stage.number(),
            epoch,
            iteration: Some(iteration),
            lr,
            losses: Some(report),
            metrics: BTreeMap::new(),
        }
    }

    fn epoch(stage: Stage, epoch: usize, lr: f64, metrics: BTreeMap<String, f64>) -> Self {
        Self {
            kind: "epoch".into(),
            stage: stage.number(),
            epoch,
            iteration: None,
            lr,
            losses: None,
            metrics,
        }
    }
}

/// Mean iteration total of every epoch in a log.
pub fn epoch_losses(log: &[LogRecord]) -> Vec<f64> {
    log.iter()
        .filter(|r| r.kind == "epoch")
        .filter_map(|r| r.metrics.get("loss").copied())
        .collect()
}

/// A training image with its matching inputs resolved against the seen
/// classifier.
struct Prepared<'a> {
    img: &'a ImageSample,
    labels: Vec<usize>,
    masks: Vec<&'a [bool]>,
    mask_cost: Tensor,
}

fn prepare<'a>(images: &'a [ImageSample], seen: &SeenEmbeddings, w: &LossWeights) -> Result<Vec<Prepared<'a>>> {
    images
        .iter()
        .enumerate()
        .map(|(i, img)| {
            let labels = img
                .gt_segments
                .iter()
                .map(|s| {
                    seen.local_index(s.category)
                        .ok_or_else(|| Error::Contract(format!("training image {i} contains non-seen category {}", s.category)))
                })
                .collect::<Result<Vec<_>>>()?;
            let masks: Vec<&[bool]> = img.gt_segments.iter().map(|s| s.mask.as_slice()).collect();
            let mask_cost = mask_cost_matrix(&img.pred_mask_logits, &masks, w.mask_bce_weight, w.mask_dice_weight)?;
            Ok(Prepared {
                img,
                labels,
                masks,
                mask_cost,
            })
        })
        .collect()
}

fn match_prepared(p: &Prepared, probs: &Tensor, w: &LossWeights) -> Result<Assignment> {
    if p.labels.len() > probs.rows() {
        return Err(Error::InfeasibleMatching {
            queries: probs.rows(),
            segments: p.labels.len(),
        });
    }
    let cls = class_cost_matrix(probs, &p.labels, w.alpha_focal, w.gamma_focal)?;
    hungarian(&combine_costs(&cls, &p.mask_cost, w.cls_weight)?)
}

fn batches(n: usize, batch: usize, seed: u64, stage: Stage, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, STREAM_SHUFFLE + stage.number() as u64, epoch as u64));
    order.shuffle(&mut rng);
    order.chunks(batch).map(<[usize]>::to_vec).collect()
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

fn sum_vars(g: &mut Graph, vars: &[Var]) -> Result<Var> {
    let mut acc = *vars.first().ok_or_else(|| invalid("sum of no terms"))?;
    for v in &vars[1..] {
        acc = g.add(acc, *v)?;
    }
    Ok(acc)
}

pub struct Stage1Output {
    pub projector: SemanticProjector,
    pub log: Vec<LogRecord>,
}

/// Trains the projector with global alignment, instance alignment and the
/// matching loss. Only seen embeddings are visible here.
pub fn train_stage1(train: &[ImageSample], seen: &SeenEmbeddings, cfg: &RunConfig) -> Result<Stage1Output> {
    if train.is_empty() {
        return Err(invalid("stage 1 needs a non-empty training split"));
    }
    let w = &cfg.losses;
    let prep = prepare(train, seen, w)?;
    let d = train[0].vision_queries.cols();
    let mut projector = SemanticProjector::new(d, seen.matrix.cols(), cfg.seed)?;
    let lr = cfg.stages.base_lr;
    let mut adam = Adam::new(AdamConfig::with_lr(lr));
    let mut bank = TokenBank::new(w.bank_size);
    let mut log = Vec::new();
    let mut it = 0;
    for epoch in 0..cfg.stages.stage1_epochs {
        let mut totals = Vec::new();
        for batch in batches(prep.len(), cfg.stages.batch_size, cfg.seed, Stage::Projector, epoch) {
            let mut g = Graph::new();
            let a_s = g.constant(seen.matrix.clone());
            let mut recon = Vec::with_capacity(batch.len());
            let mut targets = Vec::with_capacity(batch.len());
            let mut matched = Vec::new();
            let mut seg_cls = Vec::new();
            let mut match_terms = Vec::with_capacity(batch.len());
            for &i in &batch {
                let p = &prep[i];
                let v = g.constant(p.img.vision_queries.clone());
                let s = projector.forward(&mut g, v, Binding::Trainable)?;
                let probs = classification_probs(&mut g, s, a_s)?;
                let asg = match_prepared(p, g.value(probs), w)?;
                match_terms.push(match_loss(&mut g, probs, &asg, &p.labels, &p.img.pred_mask_logits, &p.masks, w)?);
                let weights = conditional_weights(&mut g, s, &p.img.global_cls, &asg.matched_flags(), w.gamma_cond)?;
                recon.push(reconstruct_cls(&mut g, weights, s)?);
                targets.push(p.img.global_cls.row(0).to_vec());
                let pairs = select_matched(&asg);
                if !pairs.is_empty() {
                    let qs: Vec<usize> = pairs.iter().map(|&(q, _)| q).collect();
                    matched.push(g.select_rows(s, &qs)?);
                    seg_cls.extend(pairs.iter().map(|&(_, o)| p.img.segment_cls.row(o).to_vec()));
                }
            }
            let recon = g.concat(&recon, crate::diffcore::Axis::Rows)?;
            let targets = Tensor::from_rows(&targets, seen.matrix.cols())?;
            let cga = cga_loss(&mut g, recon, &targets, &mut bank, w.tau)?;
            let cia = if matched.is_empty() {
                cia_loss(&mut g, None, &Tensor::zeros(&[0, seen.matrix.cols()]), w.tau)?
            } else {
                let s_all = g.concat(&matched, crate::diffcore::Axis::Rows)?;
                let c_all = Tensor::from_rows(&seg_cls, seen.matrix.cols())?;
                cia_loss(&mut g, Some(s_all), &c_all, w.tau)?
            };
            let m = sum_vars(&mut g, &match_terms)?;
            let m = g.scale(m, 1.0 / batch.len() as f64)?;
            let terms = [
                ("cga", Term { value: cga, skipped: false }),
                ("cia", cia),
                ("match", Term { value: m, skipped: false }),
            ];
            let (total, report) = compose_stage_loss(&mut g, Stage::Projector, &terms, w)?;
            let grads = g.backward(total)?;
            adam.step(&mut projector.store, &grads)?;
            totals.push(report.total);
            log.push(LogRecord::iter(Stage::Projector, epoch, it, lr, report));
            it += 1;
        }
        let mut metrics = BTreeMap::new();
        metrics.insert("loss".into(), mean(&totals));
        log.push(LogRecord::epoch(Stage::Projector, epoch, lr, metrics));
    }
    Ok(Stage1Output { projector, log })
}

/// Fraction of matched training queries whose top seen class is the label.
pub fn matched_accuracy(train: &[ImageSample], seen: &SeenEmbeddings, projector: &SemanticProjector, w: &LossWeights) -> Result<f64> {
    let prep = prepare(train, seen, w)?;
    let (mut hit, mut total) = (0usize, 0usize);
    for p in &prep {
        let probs = class_probs(&projector.project(&p.img.vision_queries)?, &seen.matrix, None)?;
        let asg = match_prepared(p, &probs, w)?;
        for (q, s) in select_matched(&asg) {
            total += 1;
            if argmax(probs.row(q)).0 == p.labels[s] {
                hit += 1;
            }
        }
    }
    Ok(if total == 0 { 0.0 } else { hit as f64 / total as f64 })
}

fn argmax(xs: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, &x) in xs.iter().enumerate() {
        if x > best.1 {
            best = (i, x);
        }
    }
    best
}

/// Matched real queries of one training image under a frozen projector.
#[derive(Clone, Debug)]
pub struct MatchedImage {
    /// `O × D`, segment order.
    pub real: Tensor,
    /// `O × C` seen embeddings of the matched labels.
    pub cond: Tensor,
    /// Seen-local labels.
    pub labels: Vec<usize>,
    /// `(K − O) × D`.
    pub unmatched: Tensor,
}

pub fn collect_matched(
    train: &[ImageSample],
    seen: &SeenEmbeddings,
    projector: &SemanticProjector,
    w: &LossWeights,
) -> Result<Vec<MatchedImage>> {
    let prep = prepare(train, seen, w)?;
    prep.iter()
        .map(|p| {
            let v = &p.img.vision_queries;
            let probs = class_probs(&projector.project(v)?, &seen.matrix, None)?;
            let asg = match_prepared(p, &probs, w)?;
            let pairs = select_matched(&asg);
            let qs: Vec<usize> = pairs.iter().map(|&(q, _)| q).collect();
            let labels: Vec<usize> = pairs.iter().map(|&(_, o)| p.labels[o]).collect();
            Ok(MatchedImage {
                real: v.select_rows(&qs)?,
                cond: seen.matrix.select_rows(&labels)?,
                labels,
                unmatched: v.select_rows(&asg.unmatched_queries())?,
            })
        })
        .collect()
}

fn stack(parts: &[&Tensor], cols: usize) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut rows = 0;
    for p in parts {
        rows += p.rows();
        data.extend_from_slice(p.data());
    }
    Tensor::matrix(rows, cols, data)
}

/// Mean MMD between real matched queries of each seen category and as many
/// generated ones, with fixed probe noise.
pub fn generator_mmd_probe(matched: &[MatchedImage], seen: &SeenEmbeddings, generator: &Generator, w: &LossWeights, seed: u64) -> Result<f64> {
    let d = generator.d_vision();
    let mut per_cat: Vec<Vec<&[f64]>> = vec![Vec::new(); seen.len()];
    for m in matched {
        for (r, &l) in m.labels.iter().enumerate() {
            if per_cat[l].len() < PROBE_CAP {
                per_cat[l].push(m.real.row(r));
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, STREAM_PROBE, 0));
    let mut vals = Vec::new();
    for (c, rows) in per_cat.iter().enumerate() {
        if rows.is_empty() {
            continue;
        }
        let real = Tensor::from_rows(rows, d)?;
        let z = standard_normal(&mut rng, rows.len(), generator.latent_dim());
        let cond = seen.matrix.select_rows(&vec![c; rows.len()])?;
        vals.push(mmd_value(&real, &generator.generate(&z, &cond)?, &w.bandwidths)?);
    }
    Ok(mean(&vals))
}

pub struct Stage2Output {
    pub generator: Generator,
    pub log: Vec<LogRecord>,
    pub skipped_batches: usize,
    /// Probe MMD after each epoch.
    pub mmd_per_epoch: Vec<f64>,
}

/// Trains the conditional generator on matched real queries with the
/// projector frozen.
pub fn train_stage2(train: &[ImageSample], seen: &SeenEmbeddings, projector: &SemanticProjector, cfg: &RunConfig) -> Result<Stage2Output> {
    if train.is_empty() {
        return Err(invalid("stage 2 needs a non-empty training split"));
    }
    let w = &cfg.losses;
    let matched = collect_matched(train, seen, projector, w)?;
    let d = projector.d_in();
    let c = seen.matrix.cols();
    let mut generator = Generator::new(d, c, cfg.generator.clone(), cfg.seed)?;
    let lr = cfg.stages.base_lr * cfg.stages.stage2_lr_mult;
    let mut adam = Adam::new(AdamConfig::with_lr(lr));
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_EPS, 0));
    let mut log = Vec::new();
    let mut skipped_batches = 0;
    let mut mmd_per_epoch = Vec::new();
    let mut it = 0;
    for epoch in 0..cfg.stages.stage2_epochs {
        let mut totals = Vec::new();
        for batch in batches(matched.len(), cfg.stages.batch_size, cfg.seed, Stage::Generator, epoch) {
            let imgs: Vec<&MatchedImage> = batch.iter().map(|&i| &matched[i]).filter(|m| !m.labels.is_empty()).collect();
            if imgs.is_empty() {
                skipped_batches += 1;
                continue;
            }
            let real = stack(&imgs.iter().map(|m| &m.real).collect::<Vec<_>>(), d)?;
            let cond = stack(&imgs.iter().map(|m| &m.cond).collect::<Vec<_>>(), c)?;
            let labels: Vec<usize> = imgs.iter().flat_map(|m| m.labels.iter().copied()).collect();
            let o = real.rows();

            let mut g = Graph::new();
            let mut updates = Vec::new();
            let v = g.constant(real.clone());
            let enc = generator.encode_with(&generator.store, &mut g, v, NormMode::Train, &mut updates)?;
            let eps = standard_normal(&mut rng, o, c);
            let z = reparameterize(&mut g, enc.mu, enc.logvar, &eps)?;
            let cv = g.constant(cond);
            let vhat = generator.decode_with(&generator.store, &mut g, z, cv, Binding::Trainable, NormMode::Train, &mut updates)?;

            let gmmn = mmd_loss(&mut g, &real, vhat, &w.bandwidths)?;
            let kl = kl_loss(&mut g, enc.mu, enc.logvar)?;
            let mut qc_terms = Vec::with_capacity(imgs.len());
            let mut start = 0;
            for m in &imgs {
                let rows: Vec<usize> = (start..start + m.real.rows()).collect();
                start += m.real.rows();
                let vi = g.select_rows(vhat, &rows)?;
                let un = (m.unmatched.rows() > 0).then_some(&m.unmatched);
                qc_terms.push(query_contrast_loss(&mut g, vi, &m.real, un, w.tau_r, w.qc_matched_negatives)?.value);
            }
            let qc = sum_vars(&mut g, &qc_terms)?;
            let qc = g.scale(qc, 1.0 / imgs.len() as f64)?;
            let sup = if w.lambda_f > 0.0 {
                let s_hat = projector.forward(&mut g, vhat, Binding::Frozen)?;
                let a_s = g.constant(seen.matrix.clone());
                let probs = classification_probs(&mut g, s_hat, a_s)?;
                let mut targets = Tensor::zeros(&[o, seen.len()]);
                for (r, &l) in labels.iter().enumerate() {
                    targets.row_mut(r)[l] = 1.0;
                }
                focal_loss_var(&mut g, probs, &targets, w.alpha_focal, w.gamma_focal)?
            } else {
                g.scalar(0.0)
            };
            let terms = [
                ("gmmn", Term { value: gmmn, skipped: false }),
                ("kl", Term { value: kl, skipped: false }),
                ("qc", Term { value: qc, skipped: false }),
                ("sup", Term { value: sup, skipped: w.lambda_f == 0.0 }),
            ];
            let (total, report) = compose_stage_loss(&mut g, Stage::Generator, &terms, w)?;
            let grads = g.backward(total)?;
            adam.step(&mut generator.store, &grads)?;
            generator.apply_norm_updates(&updates)?;
            totals.push(report.total);
            log.push(LogRecord::iter(Stage::Generator, epoch, it, lr, report));
            it += 1;
        }
        let probe = generator_mmd_probe(&matched, seen, &generator, w, cfg.seed)?;
        mmd_per_epoch.push(probe);
        let mut metrics = BTreeMap::new();
        metrics.insert("loss".into(), mean(&totals));
        metrics.insert("mmd_probe".into(), probe);
        metrics.insert("skipped_batches".into(), skipped_batches as f64);
        log.push(LogRecord::epoch(Stage::Generator, epoch, lr, metrics));
    }
    Ok(Stage2Output {
        generator,
        log,
        skipped_batches,
        mmd_per_epoch,
    })
}

/// Share of generated queries per seen category whose projection is
/// nearest (cosine) to the conditioning embedding among seen embeddings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Fidelity {
    pub overall: f64,
    pub per_category: BTreeMap<usize, f64>,
}

pub fn generator_fidelity(
    generator: &Generator,
    projector: &SemanticProjector,
    seen: &SeenEmbeddings,
    samples: usize,
    seed: u64,
) -> Result<Fidelity> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, STREAM_PROBE, 1));
    let mut per_category = BTreeMap::new();
    let mut hits = 0;
    for (local, &cat) in seen.ids.iter().enumerate() {
        let z = standard_normal(&mut rng, samples, generator.latent_dim());
        let cond = seen.matrix.select_rows(&vec![local; samples])?;
        let s = projector.project(&generator.generate(&z, &cond)?)?;
        let mut h = 0;
        for r in 0..samples {
            let sims: Vec<f64> = (0..seen.len()).map(|j| cosine(s.row(r), seen.matrix.row(j))).collect();
            if argmax(&sims).0 == local {
                h += 1;
            }
        }
        hits += h;
        per_category.insert(cat, if samples == 0 { 0.0 } else { h as f64 / samples as f64 });
    }
    let n = samples * seen.len();
    Ok(Fidelity {
        overall: if n == 0 { 0.0 } else { hits as f64 / n as f64 },
        per_category,
    })
}

pub struct Stage3Output {
    pub projector: SemanticProjector,
    pub log: Vec<LogRecord>,
    /// Transductive test metrics after each epoch.
    pub epoch_reports: Vec<MetricsReport>,
}

impl Stage3Output {
    /// Epoch index and report with the highest hPQ (first on ties).
    pub fn best(&self) -> Option<(usize, &MetricsReport)> {
        let mut best: Option<(usize, &MetricsReport)> = None;
        for (i, r) in self.epoch_reports.iter().enumerate() {
            if best.is_none_or(|(_, b)| r.h_pq > b.h_pq) {
                best = Some((i, r));
            }
        }
        best
    }
}

/// Finetunes the projector on real seen queries plus generated unseen ones.
/// Needs the unseen embeddings, so it is transductive by construction.
pub fn union_finetune(
    dataset: &SyntheticDataset,
    generator: &Generator,
    projector: SemanticProjector,
    cfg: &RunConfig,
) -> Result<Stage3Output> {
    let table = &dataset.table;
    if table.unseen_ids().is_empty() {
        return Err(invalid("union-finetuning needs unseen embeddings"));
    }
    if dataset.train.is_empty() {
        return Err(invalid("stage 3 needs a non-empty training split"));
    }
    let w = &cfg.losses;
    let seen = table.seen();
    let all = table.all().clone();
    let prep = prepare(&dataset.train, &seen, w)?;
    let mut projector = projector;
    let lr = cfg.stages.base_lr * cfg.stages.stage3_lr_mult;
    let mut adam = Adam::new(AdamConfig::with_lr(lr));
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_PSEUDO, 0));
    let mut log = Vec::new();
    let mut epoch_reports = Vec::new();
    let mut it = 0;
    for epoch in 0..cfg.stages.stage3_epochs {
        let mut totals = Vec::new();
        for batch in batches(prep.len(), cfg.stages.batch_size, cfg.seed, Stage::Finetune, epoch) {
            let mut g = Graph::new();
            let a_s = g.constant(seen.matrix.clone());
            let mut seen_terms = Vec::with_capacity(batch.len());
            for &i in &batch {
                let p = &prep[i];
                let v = g.constant(p.img.vision_queries.clone());
                let s = projector.forward(&mut g, v, Binding::Trainable)?;
                let probs = classification_probs(&mut g, s, a_s)?;
                let asg = match_prepared(p, g.value(probs), w)?;
                let targets = one_hot_targets(p.img.n_queries(), seen.len(), &asg, &p.labels)?;
                seen_terms.push(focal_loss_var(&mut g, probs, &targets, w.alpha_focal, w.gamma_focal)?);
            }
            let seen_sum = sum_vars(&mut g, &seen_terms)?;
            let seen_term = g.scale(seen_sum, 1.0 / batch.len() as f64)?;
            let pseudo = if cfg.stages.pseudo_per_step == 0 {
                Term {
                    value: g.scalar(0.0),
                    skipped: true,
                }
            } else {
                let (vu, lu) = sample_pseudo_unseen(table, cfg.stages.pseudo_per_step, generator, &mut rng)?;
                let v = g.constant(vu);
                let s = projector.forward(&mut g, v, Binding::Trainable)?;
                let a = g.constant(all.clone());
                let probs = classification_probs(&mut g, s, a)?;
                let mut targets = Tensor::zeros(&[lu.len(), all.rows()]);
                for (r, &l) in lu.iter().enumerate() {
                    targets.row_mut(r)[l] = 1.0;
                }
                Term {
                    value: focal_loss_var(&mut g, probs, &targets, w.alpha_focal, w.gamma_focal)?,
                    skipped: false,
                }
            };
            let terms = [("seen", Term { value: seen_term, skipped: false }), ("pseudo", pseudo)];
            let (total, report) = compose_stage_loss(&mut g, Stage::Finetune, &terms, w)?;
            let grads = g.backward(total)?;
            adam.step(&mut projector.store, &grads)?;
            totals.push(report.total);
            log.push(LogRecord::iter(Stage::Finetune, epoch, it, lr, report));
            it += 1;
        }
        let report = evaluate_split(&dataset.test, &projector, table, Mode::Transductive)?;
        let mut metrics = BTreeMap::new();
        metrics.insert("loss".into(), mean(&totals));
        metrics.insert("sPQ".into(), report.s_pq);
        metrics.insert("uPQ".into(), report.u_pq);
        metrics.insert("hPQ".into(), report.h_pq);
        log.push(LogRecord::epoch(Stage::Finetune, epoch, lr, metrics));
        epoch_reports.push(report);
    }
    Ok(Stage3Output {
        projector,
        log,
        epoch_reports,
    })
}

/// Classifier rows and logit offsets for inference over all categories.
struct Classifier {
    embeddings: Tensor,
    offset: Option<Vec<f64>>,
}

impl Classifier {
    fn new(table: &SemanticEmbeddingTable, mode: Mode) -> Self {
        let embeddings = table.all().clone();
        let offset = (mode == Mode::Inductive).then(|| {
            let mut off = vec![0.0; embeddings.rows()];
            for &u in table.unseen_ids() {
                off[u] = UNSEEN_LOGIT_BOOST;
            }
            off
        });
        Self { embeddings, offset }
    }

    fn predict(&self, sample: &ImageSample, projector: &SemanticProjector) -> Result<PanopticPrediction> {
        let s = projector.project(&sample.vision_queries)?;
        let probs = class_probs(&s, &self.embeddings, self.offset.as_deref())?;
        merge_queries(&probs, &sample.pred_mask_logits)
    }
}

/// Drops low-confidence queries and assigns every pixel to the kept query
/// with the highest `class prob × mask prob`.
pub fn merge_queries(probs: &Tensor, pred_mask_logits: &Tensor) -> Result<PanopticPrediction> {
    let shape = pred_mask_logits.shape();
    if shape.len() != 3 || shape[0] != probs.rows() {
        return Err(Error::ShapeMismatch {
            op: "merge_queries",
            lhs: probs.shape().to_vec(),
            rhs: shape.to_vec(),
        });
    }
    let (h, w) = (shape[1], shape[2]);
    let kept: Vec<(usize, usize, f64)> = (0..probs.rows())
        .filter_map(|q| {
            let (c, p) = argmax(probs.row(q));
            (p >= SEGMENT_THRESHOLD).then_some((q, c, p))
        })
        .collect();
    let mut owner = vec![None; h * w];
    for (pix, cell) in owner.iter_mut().enumerate() {
        let mut best: Option<(usize, f64, f64)> = None;
        for (slot, &(q, _, p)) in kept.iter().enumerate() {
            let m = sigmoid(pred_mask_logits.plane_slice(q)[pix]);
            let score = p * m;
            if best.is_none_or(|(_, b, _)| score > b) {
                best = Some((slot, score, m));
            }
        }
        if let Some((slot, _, m)) = best {
            if m >= MASK_THRESHOLD {
                *cell = Some(slot);
            }
        }
    }
    let mut remap = vec![None; kept.len()];
    let mut segments = Vec::new();
    for cell in owner.iter().flatten() {
        if remap[*cell].is_none() {
            remap[*cell] = Some(usize::MAX);
        }
    }
    for (slot, r) in remap.iter_mut().enumerate() {
        if r.is_some() {
            *r = Some(segments.len());
            segments.push(PredSegment {
                category: kept[slot].1,
                confidence: kept[slot].2,
            });
        }
    }
    Ok(PanopticPrediction {
        height: h,
        width: w,
        segment_map: owner.iter().map(|c| c.and_then(|s| remap[s])).collect(),
        segments,
    })
}

/// Panoptic prediction for one image over all categories. Inductive mode
/// raises unseen logits by [`UNSEEN_LOGIT_BOOST`].
pub fn infer_panoptic(
    sample: &ImageSample,
    projector: &SemanticProjector,
    table: &SemanticEmbeddingTable,
    mode: Mode,
) -> Result<PanopticPrediction> {
    Classifier::new(table, mode).predict(sample, projector)
}

pub fn evaluate_split(
    images: &[ImageSample],
    projector: &SemanticProjector,
    table: &SemanticEmbeddingTable,
    mode: Mode,
) -> Result<MetricsReport> {
    let clf = Classifier::new(table, mode);
    let preds: Vec<PanopticPrediction> =
        with_pool(|| images.par_iter().map(|img| clf.predict(img, projector)).collect::<Result<Vec<_>>>())?;
    let gts: Vec<_> = images.iter().map(|i| i.gt_segments.clone()).collect();
    evaluate(&preds, &gts, table.seen_ids(), table.unseen_ids())
}

/// Everything a full run produces.
pub struct PipelineRun {
    pub dataset: SyntheticDataset,
    pub stage1: Stage1Output,
    pub stage2: Option<Stage2Output>,
    pub stage3: Option<Stage3Output>,
    /// Final report under the configured mode.
    pub report: MetricsReport,
    /// Unseen-embedding reads made while training stages 1 and 2.
    pub unseen_reads_stage12: usize,
}

/// Inductive: stage 1 then inductive inference. Transductive: all three
/// stages then plain inference.
pub fn run_pipeline(cfg: &RunConfig) -> Result<PipelineRun> {
    cfg.validate()?;
    let dataset = generate_dataset(&cfg.dataset)?;
    run_pipeline_on(dataset, cfg)
}

pub fn run_pipeline_on(dataset: SyntheticDataset, cfg: &RunConfig) -> Result<PipelineRun> {
    dataset.table.reset_access_log();
    let seen = dataset.table.seen();
    let stage1 = train_stage1(&dataset.train, &seen, cfg)?;
    let stage2 = match cfg.mode {
        Mode::Inductive => None,
        Mode::Transductive => Some(train_stage2(&dataset.train, &seen, &stage1.projector, cfg)?),
    };
    let unseen_reads_stage12 = dataset.table.unseen_access_count();
    if unseen_reads_stage12 != 0 {
        return Err(Error::Contract(format!(
            "stages 1-2 read unseen embeddings {unseen_reads_stage12} times"
        )));
    }
    let (stage3, report) = match &stage2 {
        Some(s2) => {
            let s3 = union_finetune(&dataset, &s2.generator, stage1.projector.clone(), cfg)?;
            let report = evaluate_split(&dataset.test, &s3.projector, &dataset.table, cfg.mode)?;
            (Some(s3), report)
        }
        None => (None, evaluate_split(&dataset.test, &stage1.projector, &dataset.table, cfg.mode)?),
    };
    Ok(PipelineRun {
        dataset,
        stage1,
        stage2,
        stage3,
        report,
        unseen_reads_stage12,
    })
}

/// File layout of a run directory.
#[derive(Clone, Debug)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn create(root: &Path) -> Result<Self> {
        fs::create_dir_all(root)?;
        Ok(Self { root: root.to_path_buf() })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn config_path(&self) -> PathBuf {
        self.root.join("config.json")
    }

    pub fn dataset_stem(&self) -> PathBuf {
        self.root.join("dataset")
    }

    pub fn stage_stem(&self, stage: u8) -> PathBuf {
        self.root.join(format!("stage{stage}"))
    }

    pub fn log_path(&self, stage: u8) -> PathBuf {
        self.root.join(format!("stage{stage}.log.jsonl"))
    }

    pub fn metrics_path(&self) -> PathBuf {
        self.root.join("metrics.json")
    }

    pub fn write_config(&self, cfg: &RunConfig) -> Result<()> {
        fs::write(self.config_path(), cfg.to_json()?)?;
        Ok(())
    }

    pub fn read_config(&self) -> Result<RunConfig> {
        RunConfig::load(&self.config_path())
    }

    /// Loads the stored dataset when its spec matches, otherwise generates
    /// and stores a fresh one.
    pub fn dataset(&self, cfg: &RunConfig) -> Result<SyntheticDataset> {
        let stem = self.dataset_stem();
        if crate::datagen::sidecar_path(&stem).exists() {
            let ds = SyntheticDataset::load(&stem)?;
            if ds.spec == cfg.dataset {
                return Ok(ds);
            }
        }
        let ds = generate_dataset(&cfg.dataset)?;
        ds.save(&stem)?;
        Ok(ds)
    }

    /// Checkpoint stem of a finished stage, or an error naming it.
    pub fn require_stage(&self, stage: u8) -> Result<PathBuf> {
        let stem = self.stage_stem(stage);
        if stem.with_extension("json").exists() && stem.with_extension("bin").exists() {
            Ok(stem)
        } else {
            Err(Error::MissingStage {
                stage,
                path: stem.display().to_string(),
            })
        }
    }

    pub fn write_log(&self, stage: u8, log: &[LogRecord]) -> Result<()> {
        let mut f = std::io::BufWriter::new(fs::File::create(self.log_path(stage))?);
        for r in log {
            serde_json::to_writer(&mut f, r)?;
            f.write_all(b"\n")?;
        }
        f.flush()?;
        Ok(())
    }

    pub fn save_projector(&self, stage: u8, p: &SemanticProjector) -> Result<()> {
        save_checkpoint(&p.store, &self.stage_stem(stage))?;
        Ok(())
    }

    pub fn load_projector(&self, stage: u8) -> Result<SemanticProjector> {
        SemanticProjector::from_store(load_checkpoint(&self.require_stage(stage)?)?)
    }

    pub fn save_generator(&self, g: &Generator) -> Result<()> {
        save_checkpoint(&g.store, &self.stage_stem(2))?;
        Ok(())
    }

    pub fn load_generator(&self, cfg: &RunConfig) -> Result<Generator> {
        Generator::from_store(load_checkpoint(&self.require_stage(2)?)?, cfg.generator.clone())
    }

    pub fn write_metrics(&self, report: &MetricsReport) -> Result<()> {
        fs::write(self.metrics_path(), metrics_json(report)?)?;
        Ok(())
    }
}

/// Canonical bytes of a metrics report.
pub fn metrics_json(report: &MetricsReport) -> Result<String> {
    let mut s = serde_json::to_string_pretty(report)?;
    s.push('\n');
    Ok(s)
}
