//! Deterministic synthetic stand-in for the frozen segmenter, the panoptic
//! dataset and the vision-language encoders.
//!
//! Every category owns a unit prototype in vision space; its semantic
//! embedding is a fixed random linear image of the prototype plus noise.
//! Images are grids of non-overlapping rectangles. Each segment yields one
//! vision query (prototype plus noise) whose predicted mask is the ground
//! truth with a few flipped pixels; the remaining queries are distractors.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffcore::{load_checkpoint, save_checkpoint, ParamStore};
use crate::error::{invalid, Error, Result};
use crate::tensor::{norm, Tensor};

const PLACEMENT_RETRIES: usize = 200;
const PROTOTYPE_RETRIES: usize = 10_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub n_seen: usize,
    pub n_unseen: usize,
    pub d_vision: usize,
    pub c_semantic: usize,
    pub k_queries: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub n_train: usize,
    pub n_test: usize,
    /// Inclusive `[min, max]` segment count per image.
    pub segments_per_image: [usize; 2],
    pub sigma_vision: f64,
    pub sigma_cls: f64,
    pub mask_flip_rate: f64,
    pub seed: u64,
    /// Dimension of the subspace the prototypes are drawn from; 0 draws
    /// them isotropically in the full vision space.
    #[serde(default)]
    pub prototype_rank: usize,
    /// Noise added to the linear image of a prototype before normalizing.
    #[serde(default = "default_sigma_semantic")]
    pub sigma_semantic: f64,
    /// Magnitude of the predicted mask logits.
    #[serde(default = "default_mask_logit")]
    pub mask_logit: f64,
    /// Upper bound on |cosine| between two prototypes, and between two
    /// semantic embeddings.
    #[serde(default = "default_max_cosine")]
    pub max_cosine: f64,
}

fn default_sigma_semantic() -> f64 {
    0.05
}

fn default_mask_logit() -> f64 {
    6.0
}

fn default_max_cosine() -> f64 {
    0.8
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            n_seen: 8,
            n_unseen: 4,
            d_vision: 32,
            c_semantic: 16,
            k_queries: 12,
            grid_h: 32,
            grid_w: 32,
            n_train: 400,
            n_test: 100,
            segments_per_image: [1, 4],
            sigma_vision: 0.1,
            sigma_cls: 0.05,
            mask_flip_rate: 0.02,
            seed: 0,
            prototype_rank: 6,
            sigma_semantic: default_sigma_semantic(),
            mask_logit: default_mask_logit(),
            max_cosine: default_max_cosine(),
        }
    }
}

impl DatasetSpec {
    pub fn n_categories(&self) -> usize {
        self.n_seen + self.n_unseen
    }

    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.segments_per_image;
        let checks: [(bool, &str); 9] = [
            (self.n_seen >= 2, "n_seen must be at least 2"),
            (self.n_unseen >= 1, "n_unseen must be at least 1"),
            (lo >= 1 && lo <= hi, "segments_per_image must satisfy 1 <= min <= max"),
            (self.k_queries >= hi, "k_queries must be >= max segments per image"),
            (self.d_vision >= 1 && self.c_semantic >= 1, "dimensions must be positive"),
            (self.grid_h >= 2 && self.grid_w >= 2, "grid must be at least 2x2"),
            (
                self.sigma_vision >= 0.0 && self.sigma_cls >= 0.0 && self.sigma_semantic >= 0.0,
                "noise scales must be non-negative",
            ),
            (
                (0.0..=1.0).contains(&self.mask_flip_rate),
                "mask_flip_rate must lie in [0, 1]",
            ),
            (
                self.prototype_rank <= self.d_vision,
                "prototype_rank must not exceed d_vision",
            ),
        ];
        for (ok, msg) in checks {
            if !ok {
                return Err(Error::Config(format!("dataset: {msg}")));
            }
        }
        Ok(())
    }
}

/// Category embeddings with the seen/unseen partition. Reads that expose
/// unseen rows are counted so inductive runs can prove they made none.
#[derive(Debug)]
pub struct SemanticEmbeddingTable {
    embeddings: Tensor,
    seen_ids: Vec<usize>,
    unseen_ids: Vec<usize>,
    unseen_reads: AtomicUsize,
}

impl Clone for SemanticEmbeddingTable {
    fn clone(&self) -> Self {
        Self {
            embeddings: self.embeddings.clone(),
            seen_ids: self.seen_ids.clone(),
            unseen_ids: self.unseen_ids.clone(),
            unseen_reads: AtomicUsize::new(self.unseen_reads.load(Ordering::Relaxed)),
        }
    }
}

impl PartialEq for SemanticEmbeddingTable {
    fn eq(&self, other: &Self) -> bool {
        self.embeddings == other.embeddings
            && self.seen_ids == other.seen_ids
            && self.unseen_ids == other.unseen_ids
    }
}

/// Seen-category rows only, in `seen_ids` order. Local index `i` is global
/// category `ids[i]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SeenEmbeddings {
    pub matrix: Tensor,
    pub ids: Vec<usize>,
}

impl SeenEmbeddings {
    pub fn local_index(&self, category: usize) -> Option<usize> {
        self.ids.iter().position(|&c| c == category)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

impl SemanticEmbeddingTable {
    pub fn new(embeddings: Tensor, seen_ids: Vec<usize>, unseen_ids: Vec<usize>) -> Result<Self> {
        let n = embeddings.rows();
        let mut all: Vec<usize> = seen_ids.iter().chain(&unseen_ids).copied().collect();
        all.sort_unstable();
        if all != (0..n).collect::<Vec<_>>() {
            return Err(invalid(
                "seen and unseen ids must partition the embedding rows",
            ));
        }
        for r in 0..n {
            let nr = norm(embeddings.row(r));
            if (nr - 1.0).abs() > 1e-9 {
                return Err(invalid(format!("embedding row {r} has norm {nr}")));
            }
        }
        Ok(Self {
            embeddings,
            seen_ids,
            unseen_ids,
            unseen_reads: AtomicUsize::new(0),
        })
    }

    pub fn n_categories(&self) -> usize {
        self.embeddings.rows()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.cols()
    }

    pub fn seen_ids(&self) -> &[usize] {
        &self.seen_ids
    }

    pub fn is_seen(&self, category: usize) -> bool {
        self.seen_ids.contains(&category)
    }

    pub fn seen(&self) -> SeenEmbeddings {
        SeenEmbeddings {
            matrix: self
                .embeddings
                .select_rows(&self.seen_ids)
                .expect("seen ids are in range"),
            ids: self.seen_ids.clone(),
        }
    }

    /// Full `N × C` table. Counts as an unseen read.
    pub fn all(&self) -> &Tensor {
        self.unseen_reads.fetch_add(1, Ordering::Relaxed);
        &self.embeddings
    }

    /// Unseen category ids. Counts as an unseen read.
    pub fn unseen_ids(&self) -> &[usize] {
        self.unseen_reads.fetch_add(1, Ordering::Relaxed);
        &self.unseen_ids
    }

    pub fn unseen_access_count(&self) -> usize {
        self.unseen_reads.load(Ordering::Relaxed)
    }

    pub fn reset_access_log(&self) {
        self.unseen_reads.store(0, Ordering::Relaxed);
    }

    /// Seen-category row by global id; `None` for unseen ids.
    pub fn seen_row(&self, category: usize) -> Option<&[f64]> {
        self.is_seen(category).then(|| self.embeddings.row(category))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GtSegment {
    pub category: usize,
    pub segment_id: u32,
    /// Row-major `H × W` membership.
    pub mask: Vec<bool>,
}

impl GtSegment {
    pub fn area(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageSample {
    /// `K × D`, frozen.
    pub vision_queries: Tensor,
    /// `K × H × W`.
    pub pred_mask_logits: Tensor,
    pub gt_segments: Vec<GtSegment>,
    /// `1 × C`.
    pub global_cls: Tensor,
    /// `O × C`, row `o` belongs to `gt_segments[o]`.
    pub segment_cls: Tensor,
}

impl ImageSample {
    pub fn n_queries(&self) -> usize {
        self.vision_queries.rows()
    }

    pub fn categories(&self) -> Vec<usize> {
        self.gt_segments.iter().map(|s| s.category).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub spec: DatasetSpec,
    pub table: SemanticEmbeddingTable,
    pub train: Vec<ImageSample>,
    pub test: Vec<ImageSample>,
    /// `N × D`.
    pub category_prototypes: Tensor,
}

/// Output of [`surrogate_cls`].
#[derive(Clone, Debug, PartialEq)]
pub struct ClsToken {
    pub vector: Vec<f64>,
    /// Set when the mean had norm below 1e-12 and was returned unnormalized.
    pub degenerate: bool,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent stream seed for `(base, stream, index)`.
pub fn derive_seed(base: u64, stream: u64, index: u64) -> u64 {
    splitmix(splitmix(splitmix(base) ^ stream.wrapping_mul(0xA24B_AED4_963E_E407)) ^ index)
}

const STREAM_GLOBAL: u64 = 1;
const STREAM_TRAIN: u64 = 2;
const STREAM_TEST: u64 = 3;

fn gaussian_vec(rng: &mut impl Rng, n: usize, sigma: f64) -> Vec<f64> {
    (0..n)
        .map(|_| sigma * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

fn normalized(v: &[f64]) -> Option<Vec<f64>> {
    let n = norm(v);
    (n >= 1e-12).then(|| v.iter().map(|x| x / n).collect())
}

/// Surrogate vision-language CLS token: normalized mean of the listed
/// embeddings plus isotropic noise, re-normalized.
pub fn surrogate_cls(
    category_ids: &[usize],
    embeddings: &Tensor,
    sigma_cls: f64,
    rng: &mut impl Rng,
) -> Result<ClsToken> {
    if category_ids.is_empty() {
        return Err(invalid("surrogate_cls needs at least one category"));
    }
    let c = embeddings.cols();
    let mut mean = vec![0.0; c];
    for &id in category_ids {
        if id >= embeddings.rows() {
            return Err(invalid(format!("category {id} out of range")));
        }
        for (m, v) in mean.iter_mut().zip(embeddings.row(id)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= category_ids.len() as f64);
    let Some(unit) = normalized(&mean) else {
        return Ok(ClsToken {
            vector: mean,
            degenerate: true,
        });
    };
    if sigma_cls == 0.0 {
        return Ok(ClsToken {
            vector: unit,
            degenerate: false,
        });
    }
    let noisy: Vec<f64> = unit
        .iter()
        .zip(gaussian_vec(rng, c, sigma_cls))
        .map(|(a, b)| a + b)
        .collect();
    match normalized(&noisy) {
        Some(v) => Ok(ClsToken {
            vector: v,
            degenerate: false,
        }),
        None => Ok(ClsToken {
            vector: noisy,
            degenerate: true,
        }),
    }
}

fn max_abs_cosine(v: &[f64], others: &[Vec<f64>]) -> f64 {
    others
        .iter()
        .map(|o| crate::tensor::dot(v, o).abs())
        .fold(0.0, f64::max)
}

struct Categories {
    prototypes: Vec<Vec<f64>>,
    embeddings: Vec<Vec<f64>>,
}

fn draw_categories(spec: &DatasetSpec, rng: &mut ChaCha8Rng) -> Result<Categories> {
    let (d, c, n) = (spec.d_vision, spec.c_semantic, spec.n_categories());
    let rank = if spec.prototype_rank == 0 { d } else { spec.prototype_rank };
    // D × rank basis and C × D semantic map
    let basis: Vec<Vec<f64>> = (0..d).map(|_| gaussian_vec(rng, rank, 1.0)).collect();
    let map: Vec<Vec<f64>> = (0..c)
        .map(|_| gaussian_vec(rng, d, 1.0 / (d as f64).sqrt()))
        .collect();
    let mut prototypes: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut embeddings: Vec<Vec<f64>> = Vec::with_capacity(n);
    while prototypes.len() < n {
        let mut accepted = false;
        for _ in 0..PROTOTYPE_RETRIES {
            let z = gaussian_vec(rng, rank, 1.0);
            let raw: Vec<f64> = basis.iter().map(|b| crate::tensor::dot(b, &z)).collect();
            let Some(p) = normalized(&raw) else { continue };
            let noise = gaussian_vec(rng, c, spec.sigma_semantic);
            let img: Vec<f64> = map
                .iter()
                .zip(&noise)
                .map(|(row, e)| crate::tensor::dot(row, &p) + e)
                .collect();
            let Some(a) = normalized(&img) else { continue };
            if max_abs_cosine(&p, &prototypes) <= spec.max_cosine
                && max_abs_cosine(&a, &embeddings) <= spec.max_cosine
            {
                prototypes.push(p);
                embeddings.push(a);
                accepted = true;
                break;
            }
        }
        if !accepted {
            return Err(Error::Config(format!(
                "could not draw {n} categories with |cosine| <= {}; raise max_cosine or prototype_rank",
                spec.max_cosine
            )));
        }
    }
    Ok(Categories {
        prototypes,
        embeddings,
    })
}

#[derive(Clone, Copy)]
enum Split {
    Train,
    Test,
}

struct ImageContext<'a> {
    spec: &'a DatasetSpec,
    prototypes: &'a [Vec<f64>],
    embeddings: &'a Tensor,
    seen_ids: &'a [usize],
    unseen_ids: &'a [usize],
}

fn place_rectangles(
    spec: &DatasetSpec,
    count: usize,
    rng: &mut ChaCha8Rng,
    index: usize,
) -> Result<Vec<Vec<bool>>> {
    let (h, w) = (spec.grid_h, spec.grid_w);
    let min_side = (h.min(w) / 8).max(2).min(h.min(w));
    let max_h = (h / 2).max(min_side);
    let max_w = (w / 2).max(min_side);
    let mut occupied = vec![false; h * w];
    let mut masks = Vec::with_capacity(count);
    for o in 0..count {
        let mut placed = None;
        for _ in 0..PLACEMENT_RETRIES {
            let rh = rng.random_range(min_side..=max_h);
            let rw = rng.random_range(min_side..=max_w);
            let top = rng.random_range(0..=h - rh);
            let left = rng.random_range(0..=w - rw);
            let free = (top..top + rh).all(|r| (left..left + rw).all(|c| !occupied[r * w + c]));
            if free {
                placed = Some((top, left, rh, rw));
                break;
            }
        }
        let Some((top, left, rh, rw)) = placed else {
            return Err(Error::Generation {
                index,
                reason: format!("no free {min_side}x{min_side}+ rectangle for segment {o}"),
            });
        };
        let mut mask = vec![false; h * w];
        for r in top..top + rh {
            for c in left..left + rw {
                mask[r * w + c] = true;
                occupied[r * w + c] = true;
            }
        }
        masks.push(mask);
    }
    Ok(masks)
}

fn mask_logits(mask: &[bool], logit: f64, flip_rate: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    mask.iter()
        .map(|&m| {
            let v = if m { logit } else { -logit };
            if flip_rate > 0.0 && rng.random::<f64>() < flip_rate {
                -v
            } else {
                v
            }
        })
        .collect()
}

fn generate_image(ctx: &ImageContext<'_>, split: Split, index: usize) -> Result<ImageSample> {
    let spec = ctx.spec;
    let stream = match split {
        Split::Train => STREAM_TRAIN,
        Split::Test => STREAM_TEST,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, stream, index as u64));
    let (d, k) = (spec.d_vision, spec.k_queries);
    let (h, w) = (spec.grid_h, spec.grid_w);
    let [lo, hi] = spec.segments_per_image;
    let count = rng.random_range(lo..=hi);
    let label = match split {
        Split::Train => index,
        Split::Test => spec.n_train + index,
    };
    let masks = place_rectangles(spec, count, &mut rng, label)?;

    let pool: Vec<usize> = match split {
        Split::Train => ctx.seen_ids.to_vec(),
        Split::Test => (0..spec.n_categories()).collect(),
    };
    let mut categories: Vec<usize> = (0..count)
        .map(|_| pool[rng.random_range(0..pool.len())])
        .collect();
    if matches!(split, Split::Test) && index == 0 {
        // guarantees the test split exercises at least one unseen category
        categories[0] = ctx.unseen_ids[rng.random_range(0..ctx.unseen_ids.len())];
    }

    let mut slots: Vec<usize> = (0..k).collect();
    slots.shuffle(&mut rng);

    let mut queries = vec![0.0; k * d];
    let mut logits = vec![0.0; k * h * w];
    let mut gt_segments = Vec::with_capacity(count);
    for (o, (mask, &cat)) in masks.iter().zip(&categories).enumerate() {
        let slot = slots[o];
        let noise = gaussian_vec(&mut rng, d, spec.sigma_vision);
        for (j, q) in queries[slot * d..(slot + 1) * d].iter_mut().enumerate() {
            *q = ctx.prototypes[cat][j] + noise[j];
        }
        let ml = mask_logits(mask, spec.mask_logit, spec.mask_flip_rate, &mut rng);
        logits[slot * h * w..(slot + 1) * h * w].copy_from_slice(&ml);
        gt_segments.push(GtSegment {
            category: cat,
            segment_id: o as u32 + 1,
            mask: mask.clone(),
        });
    }
    let distractor_pool: &[usize] = match split {
        Split::Train => ctx.seen_ids,
        Split::Test => &pool,
    };
    for &slot in &slots[count..] {
        let a = distractor_pool[rng.random_range(0..distractor_pool.len())];
        let mut b = distractor_pool[rng.random_range(0..distractor_pool.len())];
        while b == a && distractor_pool.len() > 1 {
            b = distractor_pool[rng.random_range(0..distractor_pool.len())];
        }
        let noise = gaussian_vec(&mut rng, d, spec.sigma_vision);
        for (j, q) in queries[slot * d..(slot + 1) * d].iter_mut().enumerate() {
            *q = 0.5 * (ctx.prototypes[a][j] + ctx.prototypes[b][j]) + noise[j];
        }
        let blob = place_rectangles(spec, 1, &mut rng, label)?.remove(0);
        let ml = mask_logits(&blob, spec.mask_logit, spec.mask_flip_rate, &mut rng);
        logits[slot * h * w..(slot + 1) * h * w].copy_from_slice(&ml);
    }

    let members: Vec<usize> = categories
        .iter()
        .copied()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let global = surrogate_cls(&members, ctx.embeddings, spec.sigma_cls, &mut rng)?;
    let mut seg_rows = Vec::with_capacity(count);
    for &cat in &categories {
        seg_rows.push(surrogate_cls(&[cat], ctx.embeddings, spec.sigma_cls, &mut rng)?.vector);
    }
    Ok(ImageSample {
        vision_queries: Tensor::matrix(k, d, queries)?,
        pred_mask_logits: Tensor::new(vec![k, h, w], logits)?,
        gt_segments,
        global_cls: Tensor::row_vector(&global.vector),
        segment_cls: Tensor::from_rows(&seg_rows, spec.c_semantic)?,
    })
}

pub fn generate_dataset(spec: &DatasetSpec) -> Result<SyntheticDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, STREAM_GLOBAL, 0));
    let cats = draw_categories(spec, &mut rng)?;
    let mut order: Vec<usize> = (0..spec.n_categories()).collect();
    order.shuffle(&mut rng);
    let mut unseen_ids = order[..spec.n_unseen].to_vec();
    let mut seen_ids = order[spec.n_unseen..].to_vec();
    unseen_ids.sort_unstable();
    seen_ids.sort_unstable();

    let embeddings = Tensor::from_rows(&cats.embeddings, spec.c_semantic)?;
    let ctx = ImageContext {
        spec,
        prototypes: &cats.prototypes,
        embeddings: &embeddings,
        seen_ids: &seen_ids,
        unseen_ids: &unseen_ids,
    };
    let train = (0..spec.n_train)
        .into_par_iter()
        .map(|i| generate_image(&ctx, Split::Train, i))
        .collect::<Result<Vec<_>>>()?;
    let test = (0..spec.n_test)
        .into_par_iter()
        .map(|i| generate_image(&ctx, Split::Test, i))
        .collect::<Result<Vec<_>>>()?;
    let prototypes = Tensor::from_rows(&cats.prototypes, spec.d_vision)?;
    Ok(SyntheticDataset {
        spec: spec.clone(),
        table: SemanticEmbeddingTable::new(embeddings, seen_ids, unseen_ids)?,
        train,
        test,
        category_prototypes: prototypes,
    })
}

/// JSON sidecar written next to a serialized dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSidecar {
    pub spec: DatasetSpec,
    pub seen_ids: Vec<usize>,
    pub unseen_ids: Vec<usize>,
    pub digest: String,
    pub n_train: usize,
    pub n_test: usize,
}

fn mask_tensor(segs: &[GtSegment], h: usize, w: usize) -> Tensor {
    let data = segs
        .iter()
        .flat_map(|s| s.mask.iter().map(|&m| if m { 1.0 } else { 0.0 }))
        .collect();
    Tensor::new(vec![segs.len(), h, w], data).expect("mask sizes")
}

impl SyntheticDataset {
    /// Named tensors in a fixed order; the basis of both the digest and the
    /// on-disk format.
    pub fn to_store(&self) -> Result<ParamStore> {
        let mut store = ParamStore::new();
        store.add("embeddings", self.table.embeddings.clone(), false)?;
        store.add("prototypes", self.category_prototypes.clone(), false)?;
        let (h, w) = (self.spec.grid_h, self.spec.grid_w);
        for (split, images) in [("train", &self.train), ("test", &self.test)] {
            for (i, img) in images.iter().enumerate() {
                let p = format!("{split}.{i}");
                store.add(format!("{p}.vision_queries"), img.vision_queries.clone(), false)?;
                store.add(format!("{p}.pred_mask_logits"), img.pred_mask_logits.clone(), false)?;
                store.add(format!("{p}.gt_masks"), mask_tensor(&img.gt_segments, h, w), false)?;
                let cats: Vec<f64> = img.gt_segments.iter().map(|s| s.category as f64).collect();
                store.add(format!("{p}.gt_categories"), Tensor::column_vector(&cats), false)?;
                store.add(format!("{p}.global_cls"), img.global_cls.clone(), false)?;
                store.add(format!("{p}.segment_cls"), img.segment_cls.clone(), false)?;
            }
        }
        Ok(store)
    }

    /// SHA-256 over the spec JSON, the partition and every tensor byte.
    pub fn digest(&self) -> Result<String> {
        let mut hasher = Sha256::new();
        hasher.update(serde_json::to_vec(&self.spec)?);
        for id in self.table.seen_ids.iter().chain(&self.table.unseen_ids) {
            hasher.update((*id as u64).to_le_bytes());
        }
        let store = self.to_store()?;
        for id in store.ids() {
            hasher.update(store.name(id).as_bytes());
            for v in store.get(id).data() {
                hasher.update(v.to_le_bytes());
            }
        }
        Ok(hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect())
    }

    pub fn save(&self, stem: &Path) -> Result<DatasetSidecar> {
        save_checkpoint(&self.to_store()?, stem)?;
        let sidecar = DatasetSidecar {
            spec: self.spec.clone(),
            seen_ids: self.table.seen_ids.clone(),
            unseen_ids: self.table.unseen_ids.clone(),
            digest: self.digest()?,
            n_train: self.train.len(),
            n_test: self.test.len(),
        };
        fs::write(
            sidecar_path(stem),
            serde_json::to_string_pretty(&sidecar)?,
        )?;
        Ok(sidecar)
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let sidecar: DatasetSidecar = serde_json::from_str(&fs::read_to_string(sidecar_path(stem))?)?;
        let store = load_checkpoint(stem)?;
        let get = |name: &str| -> Result<Tensor> {
            store
                .id(name)
                .map(|id| store.get(id).clone())
                .ok_or_else(|| Error::Checkpoint(format!("dataset entry `{name}` missing")))
        };
        let (h, w) = (sidecar.spec.grid_h, sidecar.spec.grid_w);
        let read_split = |split: &str, n: usize| -> Result<Vec<ImageSample>> {
            (0..n)
                .map(|i| {
                    let p = format!("{split}.{i}");
                    let masks = get(&format!("{p}.gt_masks"))?;
                    let cats = get(&format!("{p}.gt_categories"))?;
                    let gt_segments = cats
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(o, &c)| GtSegment {
                            category: c as usize,
                            segment_id: o as u32 + 1,
                            mask: masks.data()[o * h * w..(o + 1) * h * w]
                                .iter()
                                .map(|&v| v > 0.5)
                                .collect(),
                        })
                        .collect();
                    Ok(ImageSample {
                        vision_queries: get(&format!("{p}.vision_queries"))?,
                        pred_mask_logits: get(&format!("{p}.pred_mask_logits"))?,
                        gt_segments,
                        global_cls: get(&format!("{p}.global_cls"))?,
                        segment_cls: get(&format!("{p}.segment_cls"))?,
                    })
                })
                .collect()
        };
        let ds = Self {
            table: SemanticEmbeddingTable::new(
                get("embeddings")?,
                sidecar.seen_ids.clone(),
                sidecar.unseen_ids.clone(),
            )?,
            category_prototypes: get("prototypes")?,
            train: read_split("train", sidecar.n_train)?,
            test: read_split("test", sidecar.n_test)?,
            spec: sidecar.spec.clone(),
        };
        let digest = ds.digest()?;
        if digest != sidecar.digest {
            return Err(Error::Checkpoint(format!(
                "dataset digest mismatch: sidecar {} vs content {digest}",
                sidecar.digest
            )));
        }
        Ok(ds)
    }
}

pub fn sidecar_path(stem: &Path) -> std::path::PathBuf {
    let mut name = stem
        .file_name()
        .map(|n| n.to_os_string())
        .unwrap_or_default();
    name.push(".dataset.json");
    stem.with_file_name(name)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> DatasetSpec {
        DatasetSpec {
            n_train: 40,
            n_test: 20,
            ..DatasetSpec::default()
        }
    }

    #[test]
    fn identical_spec_identical_digest() {
        let a = generate_dataset(&small_spec()).unwrap();
        let b = generate_dataset(&small_spec()).unwrap();
        assert_eq!(a.digest().unwrap(), b.digest().unwrap());
        let mut other = small_spec();
        other.seed = 1;
        let c = generate_dataset(&other).unwrap();
        assert_ne!(a.digest().unwrap(), c.digest().unwrap());
    }

    #[test]
    fn single_unseen_category_only_in_test() {
        let spec = DatasetSpec {
            n_unseen: 1,
            ..small_spec()
        };
        let ds = generate_dataset(&spec).unwrap();
        let unseen = ds.table.unseen_ids()[0];
        assert!(ds.train.iter().all(|im| !im.categories().contains(&unseen)));
        assert!(ds.test.iter().any(|im| im.categories().contains(&unseen)));
    }

    #[test]
    fn zero_noise_single_segment_cls_is_embedding() {
        let spec = DatasetSpec {
            sigma_cls: 0.0,
            segments_per_image: [1, 1],
            ..small_spec()
        };
        let ds = generate_dataset(&spec).unwrap();
        for im in &ds.train {
            let cat = im.gt_segments[0].category;
            let emb = normalized(ds.table.seen_row(cat).unwrap()).unwrap();
            assert_eq!(im.global_cls.data(), emb.as_slice());
            assert_eq!(im.segment_cls.row(0), emb.as_slice());
        }
    }

    #[test]
    fn surrogate_cls_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let e = Tensor::matrix(3, 2, vec![1.0, 0.0, -1.0, 0.0, 0.0, 1.0]).unwrap();
        let one = surrogate_cls(&[2], &e, 0.0, &mut rng).unwrap();
        assert_eq!(one.vector, vec![0.0, 1.0]);
        assert!(!one.degenerate);
        let anti = surrogate_cls(&[0, 1], &e, 0.0, &mut rng).unwrap();
        assert!(anti.degenerate);
        assert_eq!(anti.vector, vec![0.0, 0.0]);
        let orth = surrogate_cls(&[0, 2], &e, 0.0, &mut rng).unwrap();
        let r = 1.0 / 2f64.sqrt();
        assert!((orth.vector[0] - r).abs() < 1e-15 && (orth.vector[1] - r).abs() < 1e-15);
        assert!(surrogate_cls(&[], &e, 0.0, &mut rng).is_err());
    }

    #[test]
    fn segments_are_disjoint_and_train_is_seen_only() {
        let ds = generate_dataset(&small_spec()).unwrap();
        for im in ds.train.iter().chain(&ds.test) {
            let cells = ds.spec.grid_h * ds.spec.grid_w;
            for p in 0..cells {
                let owners = im.gt_segments.iter().filter(|s| s.mask[p]).count();
                assert!(owners <= 1);
            }
        }
        for im in &ds.train {
            assert!(im.categories().iter().all(|&c| ds.table.is_seen(c)));
        }
    }

    #[test]
    fn embedding_rows_are_unit_norm() {
        let ds = generate_dataset(&small_spec()).unwrap();
        let e = ds.table.all();
        for r in 0..e.rows() {
            assert!((norm(e.row(r)) - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn overcrowded_grid_fails_with_image_index() {
        let spec = DatasetSpec {
            grid_h: 4,
            grid_w: 4,
            segments_per_image: [8, 8],
            k_queries: 12,
            ..small_spec()
        };
        match generate_dataset(&spec) {
            Err(Error::Generation { index, .. }) => assert!(index < spec.n_train + spec.n_test),
            other => panic!("expected generation error, got {other:?}"),
        }
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut s = small_spec();
        s.n_seen = 1;
        assert!(s.validate().is_err());
        let mut s = small_spec();
        s.k_queries = 3;
        assert!(s.validate().is_err());
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = DatasetSpec {
            n_train: 5,
            n_test: 3,
            ..DatasetSpec::default()
        };
        let ds = generate_dataset(&spec).unwrap();
        let stem = dir.path().join("data");
        let side = ds.save(&stem).unwrap();
        let back = SyntheticDataset::load(&stem).unwrap();
        assert_eq!(back, ds);
        assert_eq!(side.digest, back.digest().unwrap());
    }
}
