//! Mask-AP evaluation with rare/common/frequent grouping.
//!
//! Matching is greedy per image: detections in descending score order claim
//! the unmatched same-category ground truth with the highest mask IoU, each
//! ground truth at most once. Per-category AP is 101-point interpolated
//! (the LVIS/COCO convention) over the globally score-sorted TP/FP sequence,
//! at a single IoU threshold of 0.5 by default.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, DetectionRecord};
use crate::error::{Error, Result};
use crate::longtail::{category_stats, Bucket};
use crate::mask::{mask_iou, Instance};
use crate::tta::Detection;

/// Outcome for one detection, in descending-score order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchOutcome {
    /// Index of the detection in the input list.
    pub det_index: usize,
    pub score: f64,
    pub category_id: u32,
    /// Index of the matched ground truth, if any.
    pub matched_gt: Option<usize>,
}

impl MatchOutcome {
    pub fn is_tp(&self) -> bool {
        self.matched_gt.is_some()
    }
}

/// Greedy per-image matching at one IoU threshold.
///
/// Detections are processed by descending score (ties by input order); each
/// claims the unmatched ground truth of its own category with the highest
/// mask IoU, provided that IoU reaches the threshold. Detections without a
/// mask never match.
pub fn match_detections(
    dets: &[Detection],
    gts: &[Instance],
    iou_threshold: f64,
) -> Result<Vec<MatchOutcome>> {
    if !(iou_threshold > 0.0 && iou_threshold <= 1.0) {
        return Err(Error::arg("iou threshold must be in (0, 1]"));
    }
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    let mut gt_taken = vec![false; gts.len()];
    let mut outcomes = Vec::with_capacity(dets.len());
    for &i in &order {
        let det = &dets[i];
        let mut best: Option<(f64, usize)> = None;
        if let Some(det_mask) = &det.mask {
            for (g, gt) in gts.iter().enumerate() {
                if gt_taken[g] || gt.category_id() != det.category_id {
                    continue;
                }
                let iou = mask_iou(det_mask, gt.mask())?;
                if iou >= iou_threshold && best.map_or(true, |(b, _)| iou > b) {
                    best = Some((iou, g));
                }
            }
        }
        let matched_gt = best.map(|(_, g)| g);
        if let Some(g) = matched_gt {
            gt_taken[g] = true;
        }
        outcomes.push(MatchOutcome {
            det_index: i,
            score: det.score,
            category_id: det.category_id,
            matched_gt,
        });
    }
    Ok(outcomes)
}

/// 101-point interpolated average precision over a score-ranked TP/FP
/// sequence.
///
/// Returns `Some(0.0)` when detections exist but there is no ground truth,
/// and `None` (category skipped) when both are absent.
pub fn average_precision(tp_flags: &[bool], num_gt: u64) -> Option<f64> {
    if num_gt == 0 {
        return if tp_flags.is_empty() { None } else { Some(0.0) };
    }
    if tp_flags.is_empty() {
        return Some(0.0);
    }
    let mut tp = 0u64;
    let mut fp = 0u64;
    let mut recall = Vec::with_capacity(tp_flags.len());
    let mut precision = Vec::with_capacity(tp_flags.len());
    for &hit in tp_flags {
        if hit {
            tp += 1;
        } else {
            fp += 1;
        }
        recall.push(tp as f64 / num_gt as f64);
        precision.push(tp as f64 / (tp + fp) as f64);
    }
    // precision envelope from the right
    for i in (0..precision.len() - 1).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut sum = 0.0;
    for k in 0..=100u32 {
        let r = k as f64 / 100.0;
        if let Some(i) = recall.iter().position(|&rc| rc >= r) {
            sum += precision[i];
        }
    }
    Some(sum / 101.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Mask IoU thresholds; per-category AP is the mean over the thresholds when more
    /// than one is configured.
    pub iou_thresholds: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            iou_thresholds: vec![0.5],
        }
    }
}

impl EvalConfig {
    /// The 0.5:0.05:0.95 threshold sweep.
    pub fn coco() -> Self {
        EvalConfig {
            iou_thresholds: (0..10).map(|i| 0.5 + 0.05 * i as f64).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.iou_thresholds.is_empty() {
            return Err(Error::arg("need at least one IoU threshold"));
        }
        if self
            .iou_thresholds
            .iter()
            .any(|t| !(*t > 0.0 && *t <= 1.0))
        {
            return Err(Error::arg("IoU thresholds must be in (0, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CategoryEval {
    pub category_id: u32,
    pub bucket: Bucket,
    pub num_gt: u64,
    /// `None` when the category has neither ground truth nor detections.
    pub ap: Option<f64>,
    /// True positives and false positives at the first configured threshold.
    pub tp: u64,
    pub fp: u64,
}

/// Aggregated evaluation: per-category APs plus bucket means in the
/// AP / AP_r / AP_c / AP_f reporting order.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub per_category: Vec<CategoryEval>,
    pub ap: Option<f64>,
    pub ap_rare: Option<f64>,
    pub ap_common: Option<f64>,
    pub ap_frequent: Option<f64>,
    /// Matched ground truths at the first threshold.
    pub matched: u64,
    pub unmatched_gt: u64,
}

impl EvalResult {
    /// CSV with columns `category,bucket,num_gt,ap` (one row per evaluated
    /// category; skipped categories emit an empty ap field).
    pub fn per_category_csv(&self) -> String {
        let mut out = String::from("category,bucket,num_gt,ap\n");
        for c in &self.per_category {
            out.push_str(&format!(
                "{},{},{},{}\n",
                c.category_id,
                c.bucket.as_str(),
                c.num_gt,
                c.ap.map(|a| a.to_string()).unwrap_or_default()
            ));
        }
        out
    }

    /// One-line aggregate in the `ap,ap_rare,ap_common,ap_frequent` column
    /// order; empty buckets leave their field blank.
    pub fn summary_csv(&self) -> String {
        let fmt = |v: Option<f64>| v.map(|a| a.to_string()).unwrap_or_default();
        format!(
            "ap,ap_rare,ap_common,ap_frequent,matched,unmatched_gt\n{},{},{},{},{},{}\n",
            fmt(self.ap),
            fmt(self.ap_rare),
            fmt(self.ap_common),
            fmt(self.ap_frequent),
            self.matched,
            self.unmatched_gt
        )
    }
}

/// Mean AP per rarity bucket over per-category results. Buckets without any
/// evaluated category report `None`, not zero.
pub fn grouped_ap(per_category: &[CategoryEval]) -> EvalResult {
    let mean_of = |filter: &dyn Fn(&CategoryEval) -> bool| -> Option<f64> {
        let values: Vec<f64> = per_category
            .iter()
            .filter(|c| filter(c))
            .filter_map(|c| c.ap)
            .collect();
        if values.is_empty() {
            None
        } else {
            Some(values.iter().sum::<f64>() / values.len() as f64)
        }
    };
    let matched: u64 = per_category.iter().map(|c| c.tp).sum();
    let total_gt: u64 = per_category.iter().map(|c| c.num_gt).sum();
    EvalResult {
        ap: mean_of(&|_| true),
        ap_rare: mean_of(&|c| c.bucket == Bucket::Rare),
        ap_common: mean_of(&|c| c.bucket == Bucket::Common),
        ap_frequent: mean_of(&|c| c.bucket == Bucket::Frequent),
        matched,
        unmatched_gt: total_gt - matched,
        per_category: per_category.to_vec(),
    }
}

/// Evaluate detections against a ground-truth dataset.
pub fn evaluate(
    dataset: &Dataset,
    detections: &[DetectionRecord],
    cfg: &EvalConfig,
) -> Result<EvalResult> {
    cfg.validate()?;
    dataset.validate()?;

    let image_ids: BTreeSet<u64> = dataset.images.iter().map(|i| i.id).collect();
    for det in detections {
        if !image_ids.contains(&det.image_id) {
            return Err(Error::arg(format!(
                "detection references unknown image {}",
                det.image_id
            )));
        }
    }

    // decode ground truth per image
    let gts_by_image: BTreeMap<u64, Vec<Instance>> = {
        let decoded: Vec<(u64, Vec<Instance>)> = dataset
            .images
            .par_iter()
            .map(|img| -> Result<(u64, Vec<Instance>)> {
                let insts = dataset
                    .annotations_of_image(img.id)
                    .map(|ann| dataset.instance(ann))
                    .collect::<Result<Vec<_>>>()?;
                Ok((img.id, insts))
            })
            .collect::<Result<_>>()?;
        decoded.into_iter().collect()
    };

    let mut dets_by_image: BTreeMap<u64, Vec<Detection>> = BTreeMap::new();
    for record in detections {
        dets_by_image
            .entry(record.image_id)
            .or_default()
            .push(record.to_detection()?);
    }

    // category universe: everything in the table plus anything detected
    let mut category_ids: BTreeSet<u32> = dataset.categories.iter().map(|c| c.id).collect();
    category_ids.extend(detections.iter().map(|d| d.category_id));

    let mut num_gt: BTreeMap<u32, u64> = BTreeMap::new();
    for insts in gts_by_image.values() {
        for inst in insts {
            *num_gt.entry(inst.category_id()).or_insert(0) += 1;
        }
    }
    let stats = category_stats(dataset, 1e-3)?;
    let bucket_of = |c: u32| {
        stats
            .get(&c)
            .map(|s| s.bucket)
            .unwrap_or(Bucket::from_image_count(0))
    };

    // per threshold: globally score-ranked outcome sequence
    let mut per_threshold: Vec<Vec<(f64, u32, bool, u64, usize)>> = Vec::new();
    for &threshold in &cfg.iou_thresholds {
        let mut matched: Vec<(u64, Vec<MatchOutcome>)> = dets_by_image
            .par_iter()
            .map(|(&image_id, dets)| -> Result<(u64, Vec<MatchOutcome>)> {
                let empty = Vec::new();
                let gts = gts_by_image.get(&image_id).unwrap_or(&empty);
                Ok((image_id, match_detections(dets, gts, threshold)?))
            })
            .collect::<Result<_>>()?;
        matched.sort_by_key(|(id, _)| *id);
        let mut entries: Vec<(f64, u32, bool, u64, usize)> = matched
            .into_iter()
            .flat_map(|(image_id, outcomes)| {
                outcomes
                    .into_iter()
                    .map(move |o| (o.score, o.category_id, o.is_tp(), image_id, o.det_index))
            })
            .collect();
        entries.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.3.cmp(&b.3)).then(a.4.cmp(&b.4)));
        per_threshold.push(entries);
    }

    let per_category: Vec<CategoryEval> = category_ids
        .iter()
        .map(|&category_id| {
            let gt_count = num_gt.get(&category_id).copied().unwrap_or(0);
            let mut aps = Vec::with_capacity(cfg.iou_thresholds.len());
            for entries in &per_threshold {
                let flags: Vec<bool> = entries
                    .iter()
                    .filter(|e| e.1 == category_id)
                    .map(|e| e.2)
                    .collect();
                if let Some(ap) = average_precision(&flags, gt_count) {
                    aps.push(ap);
                }
            }
            let ap = if aps.is_empty() {
                None
            } else {
                Some(aps.iter().sum::<f64>() / aps.len() as f64)
            };
            let (tp, fp) = per_threshold
                .first()
                .map(|entries| {
                    let tp = entries.iter().filter(|e| e.1 == category_id && e.2).count() as u64;
                    let fp = entries.iter().filter(|e| e.1 == category_id && !e.2).count() as u64;
                    (tp, fp)
                })
                .unwrap_or((0, 0));
            CategoryEval {
                category_id,
                bucket: bucket_of(category_id),
                num_gt: gt_count,
                ap,
                tp,
                fp,
            }
        })
        .collect();

    Ok(grouped_ap(&per_category))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::{BBox, BinaryMask};

    fn block_mask(h: usize, w: usize, r0: usize, c0: usize, bh: usize, bw: usize) -> BinaryMask {
        let mut m = BinaryMask::zeros(h, w).unwrap();
        for r in r0..r0 + bh {
            for c in c0..c0 + bw {
                m.set(r, c, true);
            }
        }
        m
    }

    fn gt(cat: u32, mask: BinaryMask) -> Instance {
        Instance::with_tight_bbox(cat, mask).unwrap()
    }

    fn det_with_mask(score: f64, cat: u32, mask: BinaryMask) -> Detection {
        let bbox = crate::mask::tight_bbox(&mask).unwrap();
        Detection::new(bbox, score, cat, 0, Some(mask)).unwrap()
    }

    #[test]
    fn perfect_overlap_is_a_true_positive() {
        let m = block_mask(8, 8, 2, 2, 3, 3);
        let gts = vec![gt(1, m.clone())];
        let dets = vec![det_with_mask(0.9, 1, m)];
        let out = match_detections(&dets, &gts, 0.5).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].matched_gt, Some(0));
    }

    #[test]
    fn second_detection_on_same_gt_is_fp() {
        let m = block_mask(8, 8, 2, 2, 3, 3);
        let gts = vec![gt(1, m.clone())];
        let dets = vec![det_with_mask(0.7, 1, m.clone()), det_with_mask(0.9, 1, m)];
        let out = match_detections(&dets, &gts, 0.5).unwrap();
        // higher score processed first and wins the ground truth
        assert_eq!(out[0].det_index, 1);
        assert!(out[0].is_tp());
        assert!(!out[1].is_tp());
    }

    #[test]
    fn wrong_category_never_matches() {
        let m = block_mask(8, 8, 2, 2, 3, 3);
        let gts = vec![gt(1, m.clone())];
        let dets = vec![det_with_mask(0.9, 2, m)];
        let out = match_detections(&dets, &gts, 0.5).unwrap();
        assert!(!out[0].is_tp());
    }

    #[test]
    fn detection_without_mask_never_matches() {
        let m = block_mask(8, 8, 2, 2, 3, 3);
        let gts = vec![gt(1, m.clone())];
        let bbox = crate::mask::tight_bbox(&m).unwrap();
        let dets = vec![Detection::new(bbox, 0.9, 1, 0, None).unwrap()];
        let out = match_detections(&dets, &gts, 0.5).unwrap();
        assert!(!out[0].is_tp());
    }

    #[test]
    fn ap_fixture_values() {
        // single TP over a single GT
        assert_eq!(average_precision(&[true], 1), Some(1.0));
        // no detections but ground truth exists
        assert_eq!(average_precision(&[], 1), Some(0.0));
        // [TP, FP] over one GT: full recall reached before the FP
        assert_eq!(average_precision(&[true, false], 1), Some(1.0));
        // detections with no ground truth count as zero
        assert_eq!(average_precision(&[false], 0), Some(0.0));
        // nothing at all: skipped
        assert_eq!(average_precision(&[], 0), None);
        // half recall: precision 1 up to r=0.5, zero beyond
        let ap = average_precision(&[true, false], 2).unwrap();
        assert!((ap - 51.0 / 101.0).abs() < 1e-12);
    }

    #[test]
    fn appending_a_trailing_fp_never_raises_ap() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(13);
        for _ in 0..100 {
            let n = rng.random_range(1..12usize);
            let flags: Vec<bool> = (0..n).map(|_| rng.random::<f64>() < 0.5).collect();
            let tps = flags.iter().filter(|&&t| t).count() as u64;
            let num_gt = tps + rng.random_range(0..4u64);
            let base = average_precision(&flags, num_gt);
            let mut appended = flags.clone();
            appended.push(false);
            let with_fp = average_precision(&appended, num_gt);
            match (base, with_fp) {
                (Some(a), Some(b)) => assert!(b <= a + 1e-15, "{a} -> {b}"),
                (None, Some(b)) => assert_eq!(b, 0.0),
                _ => panic!("appending a detection cannot erase the result"),
            }
        }
    }

    #[test]
    fn grouped_means_and_empty_buckets() {
        let mk = |id: u32, bucket: Bucket, ap: Option<f64>| CategoryEval {
            category_id: id,
            bucket,
            num_gt: 1,
            ap,
            tp: 0,
            fp: 0,
        };
        let evals = vec![
            mk(0, Bucket::Rare, Some(0.2)),
            mk(1, Bucket::Frequent, Some(0.8)),
            mk(2, Bucket::Frequent, Some(0.6)),
        ];
        let result = grouped_ap(&evals);
        assert_eq!(result.ap_rare, Some(0.2));
        assert!((result.ap_frequent.unwrap() - 0.7).abs() < 1e-15);
        assert!((result.ap.unwrap() - (0.2 + 0.8 + 0.6) / 3.0).abs() < 1e-15);
        assert_eq!(result.ap_common, None); // absent, not zero

        let single = grouped_ap(&[mk(5, Bucket::Common, Some(1.0))]);
        assert_eq!(single.ap, Some(1.0));
        assert_eq!(single.ap_common, Some(1.0));

        let all_perfect = grouped_ap(&[
            mk(0, Bucket::Rare, Some(1.0)),
            mk(1, Bucket::Common, Some(1.0)),
            mk(2, Bucket::Frequent, Some(1.0)),
        ]);
        assert_eq!(all_perfect.ap, Some(1.0));
        assert_eq!(all_perfect.ap_rare, Some(1.0));
        assert_eq!(all_perfect.ap_common, Some(1.0));
        assert_eq!(all_perfect.ap_frequent, Some(1.0));
    }

    #[test]
    fn end_to_end_evaluate_on_tiny_dataset() {
        use crate::dataset::{AnnotationRecord, CategoryRecord, ImageRecord};

        let gt_mask = block_mask(10, 10, 1, 1, 4, 4);
        let dataset = Dataset {
            images: vec![ImageRecord { id: 0, height: 10, width: 10 }],
            annotations: vec![AnnotationRecord {
                id: 0,
                image_id: 0,
                category_id: 1,
                bbox: [1.0, 1.0, 4.0, 4.0],
                rle: gt_mask.to_rle(),
            }],
            categories: vec![CategoryRecord { id: 1, name: "thing".into() }],
        };

        // exact-mask detection: AP 1
        let hit = DetectionRecord {
            image_id: 0,
            category_id: 1,
            score: 0.9,
            scale_id: 0,
            bbox: [1.0, 1.0, 4.0, 4.0],
            rle: Some(gt_mask.to_rle()),
        };
        let result = evaluate(&dataset, &[hit.clone()], &EvalConfig::default()).unwrap();
        assert_eq!(result.ap, Some(1.0));
        assert_eq!(result.matched, 1);
        assert_eq!(result.unmatched_gt, 0);

        // no detections: AP 0
        let result = evaluate(&dataset, &[], &EvalConfig::default()).unwrap();
        assert_eq!(result.ap, Some(0.0));
        assert_eq!(result.unmatched_gt, 1);

        // disjoint detection mask: FP, AP 0
        let miss_mask = block_mask(10, 10, 6, 6, 3, 3);
        let miss = DetectionRecord {
            rle: Some(miss_mask.to_rle()),
            bbox: [6.0, 6.0, 3.0, 3.0],
            ..hit
        };
        let result = evaluate(&dataset, &[miss], &EvalConfig::default()).unwrap();
        assert_eq!(result.ap, Some(0.0));
        assert_eq!(result.matched, 0);
    }
}
