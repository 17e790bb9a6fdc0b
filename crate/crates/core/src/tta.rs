//! Modified multi-scale test-time-augmentation merge: per-scale valid box
//! ranges, a score boost for rare categories, class-wise NMS followed by
//! Soft-NMS, and area-ratio-aware selection of the mask source scale.
//!
//! The merge pipeline is
//! `filter_by_scale_range -> concatenate -> boost_rare -> nms -> soft_nms`,
//! applied to detections already mapped to reference-image coordinates.
//! Duplicates across scales are suppressed, not fused. Output is sorted by
//! descending score, ties broken by category id then insertion order.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::levels::{assign_level, AssignmentConfig};
use crate::mask::{bbox_iou, BBox, BinaryMask};

/// A scored, categorized box with the test resolution that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    pub score: f64,
    pub category_id: u32,
    pub scale_id: u32,
    pub mask: Option<BinaryMask>,
}

impl Detection {
    pub fn new(
        bbox: BBox,
        score: f64,
        category_id: u32,
        scale_id: u32,
        mask: Option<BinaryMask>,
    ) -> Result<Self> {
        if !(0.0..=1.0).contains(&score) {
            return Err(Error::arg(format!("score must be in [0, 1], got {score}")));
        }
        Ok(Detection {
            bbox,
            score,
            category_id,
            scale_id,
            mask,
        })
    }
}

/// One test resolution: accepted box-area range `[lo, hi)` in
/// reference-image pixels squared.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScaleConfig {
    pub scale_id: u32,
    /// Long side of the resized test image; larger means higher resolution.
    pub image_size: u32,
    pub area_range: [f64; 2],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SoftNmsMethod {
    #[default]
    Gaussian,
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SoftNmsConfig {
    pub method: SoftNmsMethod,
    /// Gaussian decay: `score *= exp(-iou^2 / sigma)`.
    pub sigma: f64,
    /// Linear decay: `score *= (1 - iou)` when `iou > iou_threshold`.
    pub iou_threshold: f64,
    /// Detections whose decayed score falls below this are dropped.
    pub score_floor: f64,
}

impl Default for SoftNmsConfig {
    fn default() -> Self {
        SoftNmsConfig {
            method: SoftNmsMethod::Gaussian,
            sigma: 0.5,
            iou_threshold: 0.3,
            score_floor: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TtaConfig {
    pub scales: Vec<ScaleConfig>,
    /// Additive score boost for rare categories, clamped at 1.
    pub rare_boost: f64,
    pub nms_iou: f64,
    pub soft_nms: SoftNmsConfig,
    /// Ratio divisor used when picking the mask source scale.
    pub mask_ratio_cut: f64,
}

impl Default for TtaConfig {
    fn default() -> Self {
        TtaConfig {
            // geometric partition of box area: the finest scale accepts the
            // smallest boxes
            scales: vec![
                ScaleConfig { scale_id: 0, image_size: 1600, area_range: [0.0, 9216.0] },
                ScaleConfig { scale_id: 1, image_size: 1200, area_range: [9216.0, 65536.0] },
                ScaleConfig { scale_id: 2, image_size: 800, area_range: [65536.0, f64::INFINITY] },
            ],
            rare_boost: 0.05,
            nms_iou: 0.7,
            soft_nms: SoftNmsConfig::default(),
            mask_ratio_cut: 0.25,
        }
    }
}

impl TtaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scales.is_empty() {
            return Err(Error::arg("at least one scale must be configured"));
        }
        let mut ids = std::collections::BTreeSet::new();
        for s in &self.scales {
            if !ids.insert(s.scale_id) {
                return Err(Error::arg(format!("duplicate scale id {}", s.scale_id)));
            }
            if s.image_size == 0 {
                return Err(Error::arg("scale image_size must be positive"));
            }
            if !(s.area_range[0] >= 0.0 && s.area_range[1] > s.area_range[0]) {
                return Err(Error::arg("scale area range must satisfy 0 <= lo < hi"));
            }
        }
        // the ranges must jointly cover (0, inf)
        let mut ranges: Vec<[f64; 2]> = self.scales.iter().map(|s| s.area_range).collect();
        ranges.sort_by(|a, b| a[0].total_cmp(&b[0]));
        if ranges[0][0] > 0.0 {
            return Err(Error::arg("scale ranges leave a gap at small areas"));
        }
        let mut covered = ranges[0][1];
        for r in &ranges[1..] {
            if r[0] > covered {
                return Err(Error::arg(format!(
                    "scale ranges leave a gap at area {covered}"
                )));
            }
            covered = covered.max(r[1]);
        }
        if covered.is_finite() {
            return Err(Error::arg("scale ranges must extend to infinity"));
        }
        if !(self.nms_iou > 0.0 && self.nms_iou < 1.0) {
            return Err(Error::arg("nms_iou must be in (0, 1)"));
        }
        if !(self.rare_boost >= 0.0) {
            return Err(Error::arg("rare_boost must be non-negative"));
        }
        if !(self.mask_ratio_cut > 0.0 && self.mask_ratio_cut <= 1.0) {
            return Err(Error::arg("mask_ratio_cut must be in (0, 1]"));
        }
        if !(self.soft_nms.sigma > 0.0) {
            return Err(Error::arg("soft-nms sigma must be positive"));
        }
        if !(0.0..1.0).contains(&self.soft_nms.iou_threshold) {
            return Err(Error::arg("soft-nms iou_threshold must be in [0, 1)"));
        }
        if !(self.soft_nms.score_floor >= 0.0) {
            return Err(Error::arg("soft-nms score_floor must be non-negative"));
        }
        Ok(())
    }

    fn scale(&self, scale_id: u32) -> Result<&ScaleConfig> {
        self.scales
            .iter()
            .find(|s| s.scale_id == scale_id)
            .ok_or_else(|| Error::arg(format!("unknown scale id {scale_id}")))
    }

    /// Scale ids ordered from highest to lowest resolution.
    fn resolution_order(&self) -> Vec<u32> {
        let mut order: Vec<&ScaleConfig> = self.scales.iter().collect();
        order.sort_by(|a, b| b.image_size.cmp(&a.image_size).then(a.scale_id.cmp(&b.scale_id)));
        order.into_iter().map(|s| s.scale_id).collect()
    }
}

/// Keep only detections whose box area lies in the valid range of the scale
/// that produced them.
pub fn filter_by_scale_range(dets: Vec<Detection>, cfg: &TtaConfig) -> Result<Vec<Detection>> {
    let mut out = Vec::with_capacity(dets.len());
    for det in dets {
        let scale = cfg.scale(det.scale_id)?;
        let area = det.bbox.area();
        if area >= scale.area_range[0] && area < scale.area_range[1] {
            out.push(det);
        }
    }
    Ok(out)
}

/// Additively boost rare-category scores, clamped at 1. Detections keep
/// their input order; within the rare group and within the non-rare group
/// the relative score order is preserved.
pub fn boost_rare(
    mut dets: Vec<Detection>,
    rare_categories: &std::collections::BTreeSet<u32>,
    boost: f64,
) -> Vec<Detection> {
    debug_assert!(boost >= 0.0);
    for det in &mut dets {
        if rare_categories.contains(&det.category_id) {
            det.score = (det.score + boost).min(1.0);
        }
    }
    dets
}

fn score_order(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b]
            .score
            .total_cmp(&dets[a].score)
            .then(dets[a].category_id.cmp(&dets[b].category_id))
            .then(a.cmp(&b))
    });
    order
}

/// Greedy class-wise NMS: keep the highest-scoring detection, suppress
/// same-category detections with IoU strictly above the threshold, repeat.
pub fn nms(dets: Vec<Detection>, iou_threshold: f64) -> Vec<Detection> {
    let order = score_order(&dets);
    let mut kept: Vec<usize> = Vec::new();
    for &i in &order {
        let suppressed = kept.iter().any(|&k| {
            dets[k].category_id == dets[i].category_id
                && bbox_iou(&dets[k].bbox, &dets[i].bbox) > iou_threshold
        });
        if !suppressed {
            kept.push(i);
        }
    }
    let mut dets = dets;
    let mut out = Vec::with_capacity(kept.len());
    // pull kept detections out in score order without cloning masks
    let mut taken: Vec<Option<Detection>> = dets.drain(..).map(Some).collect();
    for i in kept {
        out.push(taken[i].take().expect("kept index is unique"));
    }
    out
}

/// Class-wise Soft-NMS: repeatedly promote the current maximum, decay the
/// scores of the remaining same-category detections, and drop any whose
/// decayed score falls below the floor. Boxes and masks are unchanged;
/// scores never increase.
pub fn soft_nms(dets: Vec<Detection>, cfg: &SoftNmsConfig) -> Vec<Detection> {
    // (original index, current score) per category
    let mut pools: BTreeMap<u32, Vec<(usize, f64)>> = BTreeMap::new();
    for (i, det) in dets.iter().enumerate() {
        pools.entry(det.category_id).or_default().push((i, det.score));
    }
    let mut final_scores: Vec<Option<f64>> = vec![None; dets.len()];
    for pool in pools.values_mut() {
        while !pool.is_empty() {
            let best_pos = pool
                .iter()
                .enumerate()
                .max_by(|(_, a), (_, b)| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)))
                .map(|(pos, _)| pos)
                .expect("pool is non-empty");
            let (best_idx, best_score) = pool.swap_remove(best_pos);
            final_scores[best_idx] = Some(best_score);
            for (idx, score) in pool.iter_mut() {
                let iou = bbox_iou(&dets[best_idx].bbox, &dets[*idx].bbox);
                match cfg.method {
                    SoftNmsMethod::Gaussian => *score *= (-iou * iou / cfg.sigma).exp(),
                    SoftNmsMethod::Linear => {
                        if iou > cfg.iou_threshold {
                            *score *= 1.0 - iou;
                        }
                    }
                }
            }
            pool.retain(|&(_, score)| score >= cfg.score_floor);
        }
    }
    let mut out: Vec<Detection> = dets
        .into_iter()
        .zip(final_scores)
        .filter_map(|(mut det, score)| {
            det.score = score?;
            Some(det)
        })
        .collect();
    let order = score_order(&out);
    let mut taken: Vec<Option<Detection>> = out.drain(..).map(Some).collect();
    order
        .into_iter()
        .map(|i| taken[i].take().expect("order indices are unique"))
        .collect()
}

/// The full merge for one image: per-scale range filter, concatenation,
/// rare-score boost, NMS then Soft-NMS.
pub fn merge_multiscale(
    per_scale: BTreeMap<u32, Vec<Detection>>,
    cfg: &TtaConfig,
    rare_categories: &std::collections::BTreeSet<u32>,
) -> Result<Vec<Detection>> {
    cfg.validate()?;
    let mut pooled = Vec::new();
    for (scale_id, dets) in per_scale {
        cfg.scale(scale_id)?;
        for det in dets {
            if det.scale_id != scale_id {
                return Err(Error::arg(format!(
                    "detection tagged scale {} listed under scale {scale_id}",
                    det.scale_id
                )));
            }
            pooled.push(det);
        }
    }
    let filtered = filter_by_scale_range(pooled, cfg)?;
    let boosted = boost_rare(filtered, rare_categories, cfg.rare_boost);
    Ok(soft_nms(nms(boosted, cfg.nms_iou), &cfg.soft_nms))
}

/// Pick which scale's mask prediction to keep for a detection.
///
/// Each candidate scale offers a mask area; the assignment rule (with
/// `mask_ratio_cut` as the ratio divisor) maps (box area, mask area) to a
/// level, levels map proportionally onto the available resolution tiers
/// (level 0 -> highest resolution, coarsest level -> lowest), and the
/// candidate closest to its own desired tier wins. Ties go to the higher
/// resolution.
pub fn select_mask_source(
    det: &Detection,
    candidates: &BTreeMap<u32, f64>,
    cfg: &TtaConfig,
) -> Result<u32> {
    cfg.validate()?;
    if candidates.is_empty() {
        return Err(Error::EmptyInput("no candidate masks to choose from"));
    }
    let assign_cfg = AssignmentConfig {
        ratio_divisor: cfg.mask_ratio_cut,
        ..AssignmentConfig::default()
    };
    let order = cfg.resolution_order();
    let tier_of = |scale_id: u32| -> Result<usize> {
        order
            .iter()
            .position(|&s| s == scale_id)
            .ok_or_else(|| Error::arg(format!("unknown scale id {scale_id}")))
    };
    let tiers = order.len();
    let s_bbox = det.bbox.area();
    let mut best: Option<(usize, usize, u32)> = None; // (distance, tier, scale)
    for (&scale_id, &mask_area) in candidates {
        let tier = tier_of(scale_id)?;
        // predictions from other resolutions may claim more area than the
        // reference box; clamp so the assignment precondition holds
        let s_mask = mask_area.min(s_bbox).max(0.0);
        let level = assign_level(s_bbox, s_mask, &assign_cfg)?;
        let desired = if assign_cfg.coarsest_level == 0 {
            0.0
        } else {
            (level as f64 * (tiers as f64 - 1.0) / assign_cfg.coarsest_level as f64).round()
        };
        let distance = (tier as f64 - desired).abs() as usize;
        let key = (distance, tier, scale_id);
        if best.map_or(true, |b| (key.0, key.1) < (b.0, b.1)) {
            best = Some(key);
        }
    }
    Ok(best.expect("candidates are non-empty").2)
}
