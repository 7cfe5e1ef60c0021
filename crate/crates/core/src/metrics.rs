//! Panoptic quality, mean IoU and harmonic aggregation over the seen and
//! unseen partitions.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::GtSegment;
use crate::error::{Error, Result};

/// Environment variable capping evaluation threads.
pub const THREADS_ENV: &str = "CONCAT_LAB_THREADS";

/// One predicted segment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredSegment {
    pub category: usize,
    pub confidence: f64,
}

/// Per-pixel segment ids (`None` is void) plus the segments they refer to.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PanopticPrediction {
    pub height: usize,
    pub width: usize,
    pub segment_map: Vec<Option<usize>>,
    pub segments: Vec<PredSegment>,
}

impl PanopticPrediction {
    pub fn void(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            segment_map: vec![None; height * width],
            segments: Vec::new(),
        }
    }

    /// Per-pixel category map.
    pub fn category_map(&self) -> Vec<Option<usize>> {
        self.segment_map
            .iter()
            .map(|s| s.map(|s| self.segments[s].category))
            .collect()
    }

    pub fn area(&self, segment: usize) -> usize {
        self.segment_map.iter().filter(|&&s| s == Some(segment)).count()
    }
}

/// Accumulated PQ counts of one category.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PqCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub iou_sum: f64,
}

impl PqCounts {
    pub fn is_empty(&self) -> bool {
        self.tp + self.fp + self.fn_ == 0
    }

    pub fn pq(&self) -> f64 {
        let den = self.tp as f64 + 0.5 * self.fp as f64 + 0.5 * self.fn_ as f64;
        if den == 0.0 {
            0.0
        } else {
            self.iou_sum / den
        }
    }

    fn merge(&mut self, o: &PqCounts) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
        self.iou_sum += o.iou_sum;
    }
}

/// Per-category result of [`panoptic_quality`] or [`mean_iou`] plus the
/// mean over the categories that count.
#[derive(Clone, Debug, PartialEq)]
pub struct CategoryScores<T> {
    pub per_category: BTreeMap<usize, T>,
    pub mean: f64,
}

fn check_grid(pred: &PanopticPrediction, gt: &[GtSegment]) -> Result<()> {
    let n = pred.height * pred.width;
    if pred.segment_map.len() != n {
        return Err(Error::ShapeMismatch {
            op: "panoptic_quality",
            lhs: vec![pred.height, pred.width],
            rhs: vec![pred.segment_map.len()],
        });
    }
    for s in gt {
        if s.mask.len() != n {
            return Err(Error::ShapeMismatch {
                op: "panoptic_quality",
                lhs: vec![pred.height, pred.width],
                rhs: vec![s.mask.len()],
            });
        }
    }
    if pred.segment_map.iter().flatten().any(|&s| s >= pred.segments.len()) {
        return Err(Error::Contract("segment map refers to a missing segment".into()));
    }
    Ok(())
}

fn image_pq(pred: &PanopticPrediction, gt: &[GtSegment]) -> Result<BTreeMap<usize, PqCounts>> {
    check_grid(pred, gt)?;
    let n_pred = pred.segments.len();
    let pred_area: Vec<usize> = {
        let mut a = vec![0; n_pred];
        for s in pred.segment_map.iter().flatten() {
            a[*s] += 1;
        }
        a
    };
    let mut out: BTreeMap<usize, PqCounts> = BTreeMap::new();
    let mut pred_matched = vec![false; n_pred];
    for g in gt {
        let counts = out.entry(g.category).or_default();
        let mut inter = vec![0usize; n_pred];
        for (p, &m) in pred.segment_map.iter().zip(&g.mask) {
            if let (Some(p), true) = (p, m) {
                inter[*p] += 1;
            }
        }
        let g_area = g.area();
        let mut hit: Option<(usize, f64)> = None;
        for p in 0..n_pred {
            if pred.segments[p].category != g.category || inter[p] == 0 {
                continue;
            }
            let union = pred_area[p] + g_area - inter[p];
            let iou = inter[p] as f64 / union as f64;
            if iou > 0.5 {
                if hit.is_some() || pred_matched[p] {
                    return Err(Error::Contract("IoU > 0.5 matching was not unique".into()));
                }
                hit = Some((p, iou));
            }
        }
        match hit {
            Some((p, iou)) => {
                pred_matched[p] = true;
                counts.tp += 1;
                counts.iou_sum += iou;
            }
            None => counts.fn_ += 1,
        }
    }
    for p in 0..n_pred {
        if pred_area[p] > 0 && !pred_matched[p] {
            out.entry(pred.segments[p].category).or_default().fp += 1;
        }
    }
    Ok(out)
}

/// Runs `f` on a pool capped by [`THREADS_ENV`] when it is set.
pub fn with_pool<R: Send>(f: impl FnOnce() -> R + Send) -> R {
    let threads = std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0);
    match threads {
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(f),
            Err(_) => f(),
        },
        None => f(),
    }
}

/// Per-category PQ over a split, restricted to `categories`. Categories
/// with no ground-truth and no predicted segments are left out of the mean.
pub fn panoptic_quality(
    preds: &[PanopticPrediction],
    gts: &[Vec<GtSegment>],
    categories: &[usize],
) -> Result<CategoryScores<PqCounts>> {
    if preds.len() != gts.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions for {} images",
            preds.len(),
            gts.len()
        )));
    }
    // per-image results are merged in image order so sums are reproducible
    let per_image: Vec<Result<BTreeMap<usize, PqCounts>>> =
        with_pool(|| preds.par_iter().zip(gts.par_iter()).map(|(p, g)| image_pq(p, g)).collect());
    let mut total: BTreeMap<usize, PqCounts> = categories.iter().map(|&c| (c, PqCounts::default())).collect();
    for img in per_image {
        for (c, counts) in img? {
            if let Some(t) = total.get_mut(&c) {
                t.merge(&counts);
            }
        }
    }
    let present: Vec<f64> = total.values().filter(|c| !c.is_empty()).map(PqCounts::pq).collect();
    let mean = if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    };
    Ok(CategoryScores {
        per_category: total,
        mean,
    })
}

/// Intersection and union pixel counts of one category.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IouCounts {
    pub intersection: usize,
    pub union: usize,
    pub gt_pixels: usize,
}

impl IouCounts {
    pub fn iou(&self) -> f64 {
        if self.union == 0 {
            0.0
        } else {
            self.intersection as f64 / self.union as f64
        }
    }
}

fn gt_category_map(gt: &[GtSegment], n: usize) -> Vec<Option<usize>> {
    let mut map = vec![None; n];
    for s in gt {
        for (cell, &m) in map.iter_mut().zip(&s.mask) {
            if m {
                *cell = Some(s.category);
            }
        }
    }
    map
}

/// Per-category IoU accumulated over the split; the mean runs over the
/// categories in `categories` that appear in the ground truth.
pub fn mean_iou(
    preds: &[PanopticPrediction],
    gts: &[Vec<GtSegment>],
    categories: &[usize],
) -> Result<CategoryScores<IouCounts>> {
    if preds.len() != gts.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions for {} images",
            preds.len(),
            gts.len()
        )));
    }
    let mut total: BTreeMap<usize, IouCounts> = categories.iter().map(|&c| (c, IouCounts::default())).collect();
    for (p, g) in preds.iter().zip(gts) {
        check_grid(p, g)?;
        let pm = p.category_map();
        let gm = gt_category_map(g, pm.len());
        for (a, b) in pm.iter().zip(&gm) {
            if let Some(c) = b {
                if let Some(t) = total.get_mut(c) {
                    t.gt_pixels += 1;
                    t.union += 1;
                    if a == b {
                        t.intersection += 1;
                    }
                }
            }
            if let Some(c) = a {
                if a != b {
                    if let Some(t) = total.get_mut(c) {
                        t.union += 1;
                    }
                }
            }
        }
    }
    let present: Vec<f64> = total.values().filter(|c| c.gt_pixels > 0).map(IouCounts::iou).collect();
    let mean = if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    };
    Ok(CategoryScores {
        per_category: total,
        mean,
    })
}

/// Harmonic mean, 0 when either argument is 0.
pub fn harmonic(seen: f64, unseen: f64) -> f64 {
    if seen <= 0.0 || unseen <= 0.0 {
        0.0
    } else {
        2.0 * seen * unseen / (seen + unseen)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoryMetrics {
    pub seen: bool,
    pub pq: f64,
    pub iou: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    #[serde(rename = "sPQ")]
    pub s_pq: f64,
    #[serde(rename = "uPQ")]
    pub u_pq: f64,
    #[serde(rename = "hPQ")]
    pub h_pq: f64,
    #[serde(rename = "sIoU")]
    pub s_iou: f64,
    #[serde(rename = "uIoU")]
    pub u_iou: f64,
    #[serde(rename = "hIoU")]
    pub h_iou: f64,
    pub per_category: BTreeMap<usize, CategoryMetrics>,
}

/// Full report over a split.
pub fn evaluate(
    preds: &[PanopticPrediction],
    gts: &[Vec<GtSegment>],
    seen_ids: &[usize],
    unseen_ids: &[usize],
) -> Result<MetricsReport> {
    let spq = panoptic_quality(preds, gts, seen_ids)?;
    let upq = panoptic_quality(preds, gts, unseen_ids)?;
    let siou = mean_iou(preds, gts, seen_ids)?;
    let uiou = mean_iou(preds, gts, unseen_ids)?;
    let mut per_category = BTreeMap::new();
    for (seen, pq, iou) in [(true, &spq, &siou), (false, &upq, &uiou)] {
        for (c, counts) in &pq.per_category {
            per_category.insert(
                *c,
                CategoryMetrics {
                    seen,
                    pq: counts.pq(),
                    iou: iou.per_category[c].iou(),
                    tp: counts.tp,
                    fp: counts.fp,
                    fn_: counts.fn_,
                },
            );
        }
    }
    Ok(MetricsReport {
        s_pq: spq.mean,
        u_pq: upq.mean,
        h_pq: harmonic(spq.mean, upq.mean),
        s_iou: siou.mean,
        u_iou: uiou.mean,
        h_iou: harmonic(siou.mean, uiou.mean),
        per_category,
    })
}
