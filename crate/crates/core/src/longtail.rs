//! Repeat-factor sampling over long-tailed category frequencies, plus the
//! self-training pseudo-label collection and proposal-ignore rules.
//!
//! Images containing a category seen in fewer than a threshold fraction `t`
//! of images are oversampled by `r = max(1, sqrt(t / f))`. Pseudo labels are
//! confident predictions with no overlap against the ground truth; proposals
//! overlapping a pseudo label are flagged so a trainer can ignore them
//! (missing annotations in a federated dataset are not negatives).

use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand::{seq::index::sample, Rng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::mask::{bbox_iou, BBox, Instance};
use crate::tta::Detection;

/// LVIS-style rarity grouping by training-image count: rare <= 10,
/// common 11..=100, frequent > 100.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Bucket {
    Rare = 0,
    Common = 1,
    Frequent = 2,
}

impl Bucket {
    pub const ALL: [Bucket; 3] = [Bucket::Rare, Bucket::Common, Bucket::Frequent];

    pub fn from_image_count(count: u64) -> Bucket {
        match count {
            0..=10 => Bucket::Rare,
            11..=100 => Bucket::Common,
            _ => Bucket::Frequent,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Bucket::Rare => "rare",
            Bucket::Common => "common",
            Bucket::Frequent => "frequent",
        }
    }
}

/// Per-category sampling statistics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CategoryStats {
    pub category_id: u32,
    /// Number of images containing at least one instance of the category.
    pub image_count: u64,
    /// Fraction of images containing the category, in (0, 1].
    pub image_frequency: f64,
    /// Oversampling factor `max(1, sqrt(t / f))`.
    pub repeat_factor: f64,
    pub bucket: Bucket,
}

impl CategoryStats {
    pub fn new(category_id: u32, image_count: u64, total_images: u64, threshold: f64) -> Result<Self> {
        if total_images == 0 {
            return Err(Error::EmptyInput("dataset has no images"));
        }
        let f = image_count as f64 / total_images as f64;
        Ok(CategoryStats {
            category_id,
            image_count,
            image_frequency: f,
            repeat_factor: repeat_factor(f, threshold)?,
            bucket: Bucket::from_image_count(image_count),
        })
    }
}

/// Image frequency `f(c)` for every category present in at least one image.
pub fn category_frequencies(dataset: &Dataset) -> Result<BTreeMap<u32, f64>> {
    if dataset.images.is_empty() {
        return Err(Error::EmptyInput("dataset has no images"));
    }
    let total = dataset.images.len() as f64;
    let mut counts: BTreeMap<u32, u64> = BTreeMap::new();
    for cats in dataset.image_categories().values() {
        for &c in cats {
            *counts.entry(c).or_insert(0) += 1;
        }
    }
    Ok(counts
        .into_iter()
        .map(|(c, n)| (c, n as f64 / total))
        .collect())
}

/// `max(1, sqrt(t / f))` for image frequency `f` and threshold `t`.
pub fn repeat_factor(f: f64, t: f64) -> Result<f64> {
    if !(f > 0.0 && f <= 1.0) {
        return Err(Error::arg(format!("image frequency must be in (0, 1], got {f}")));
    }
    if !(t > 0.0) {
        return Err(Error::arg("threshold must be positive"));
    }
    Ok((t / f).sqrt().max(1.0))
}

/// Stats for every category present in the dataset, keyed by category id.
/// Categories never seen in any image carry no statistics and are omitted.
pub fn category_stats(dataset: &Dataset, threshold: f64) -> Result<BTreeMap<u32, CategoryStats>> {
    if dataset.images.is_empty() {
        return Err(Error::EmptyInput("dataset has no images"));
    }
    let total = dataset.images.len() as u64;
    let mut counts: BTreeMap<u32, u64> = BTreeMap::new();
    for cats in dataset.image_categories().values() {
        for &c in cats {
            *counts.entry(c).or_insert(0) += 1;
        }
    }
    counts
        .into_iter()
        .map(|(c, n)| CategoryStats::new(c, n, total, threshold).map(|s| (c, s)))
        .collect()
}

/// Repeat factor of one image: the maximum over the categories it contains,
/// 1 for images without instances.
pub fn image_repeat_factor(
    categories: &BTreeSet<u32>,
    stats: &BTreeMap<u32, CategoryStats>,
) -> f64 {
    categories
        .iter()
        .filter_map(|c| stats.get(c).map(|s| s.repeat_factor))
        .fold(1.0, f64::max)
}

/// One sampling epoch: each image id appears `floor(r_i)` times plus one
/// more with probability `frac(r_i)`. Randomness is drawn from a stream
/// keyed by (seed, image id), so the result is independent of traversal
/// or thread order.
pub fn build_epoch(
    dataset: &Dataset,
    stats: &BTreeMap<u32, CategoryStats>,
    seed: u64,
) -> Vec<u64> {
    let per_image = dataset.image_categories();
    let mut epoch = Vec::with_capacity(dataset.images.len());
    for img in &dataset.images {
        let empty = BTreeSet::new();
        let cats = per_image.get(&img.id).unwrap_or(&empty);
        let r = image_repeat_factor(cats, stats);
        let mut count = r.floor() as u64;
        let frac = r.fract();
        if frac > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(img.id);
            if rng.random::<f64>() < frac {
                count += 1;
            }
        }
        for _ in 0..count {
            epoch.push(img.id);
        }
    }
    epoch
}

/// A confident prediction kept as a pseudo label.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabel {
    pub bbox: BBox,
    pub category_id: u32,
    pub score: f64,
    pub source_image: u64,
}

/// Keep predictions that score at least `score_threshold` and whose IoU with
/// every ground-truth box stays at or below `overlap_iou` (0 by default:
/// strictly no overlap).
pub fn collect_pseudo_labels(
    source_image: u64,
    predictions: &[Detection],
    gts: &[Instance],
    overlap_iou: f64,
    score_threshold: f64,
) -> Vec<PseudoLabel> {
    predictions
        .iter()
        .filter(|det| det.score >= score_threshold)
        .filter(|det| {
            gts.iter()
                .all(|gt| bbox_iou(&det.bbox, gt.bbox()) <= overlap_iou)
        })
        .map(|det| PseudoLabel {
            bbox: det.bbox,
            category_id: det.category_id,
            score: det.score,
            source_image,
        })
        .collect()
}

/// Flag proposals whose IoU with some pseudo label reaches `ignore_iou`.
pub fn mark_ignored_proposals(
    proposals: &[BBox],
    pseudo: &[PseudoLabel],
    ignore_iou: f64,
) -> Result<Vec<bool>> {
    if !(ignore_iou > 0.0 && ignore_iou <= 1.0) {
        return Err(Error::arg("ignore_iou must be in (0, 1]"));
    }
    Ok(proposals
        .iter()
        .map(|p| pseudo.iter().any(|pl| bbox_iou(p, &pl.bbox) >= ignore_iou))
        .collect())
}

/// Uniform sample of `k` ids without replacement, deterministic per seed.
pub fn subsample_pool(pool: &[u64], k: usize, seed: u64) -> Result<Vec<u64>> {
    if k > pool.len() {
        return Err(Error::arg(format!(
            "cannot sample {k} from a pool of {}",
            pool.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picked = sample(&mut rng, pool.len(), k);
    Ok(picked.iter().map(|i| pool[i]).collect())
}
