//! Mask-proposal-to-FPN-level assignment.
//!
//! The routing rule takes both the box scale and the mask/box area ratio
//! into account:
//!
//! ```text
//! level = min( floor(s_bbox / finest_area),
//!              floor(s_mask / (ratio_divisor * s_bbox)),
//!              coarsest_level )
//! ```
//!
//! so proposals whose mask fills less than `ratio_divisor` of the box always
//! land on the finest level, no matter how large the box is. A conventional
//! scale-only rule (`floor(log2(sqrt(area) / 56))`) is provided as baseline.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::longtail::Bucket;
use crate::mask::Instance;

/// How the box-scale term of the assignment rule is computed.
///
/// `Literal` is the linear form `floor(s_bbox / finest_area)`. `Log2`
/// replaces it with the conventional logarithmic mapping
/// `floor(log2(sqrt(s_bbox) / sqrt(finest_area)))`, clamped at 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BoxTermMode {
    #[default]
    Literal,
    Log2,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AssignmentConfig {
    /// Box area mapped to the finest level; 56^2 by default.
    pub finest_area: f64,
    /// Area-ratio divisor of the ratio term; masks thinner than this always
    /// route to level 0.
    pub ratio_divisor: f64,
    /// Index of the coarsest feature level (0..=coarsest, P2..P5 by default).
    pub coarsest_level: u32,
    pub box_term_mode: BoxTermMode,
}

impl Default for AssignmentConfig {
    fn default() -> Self {
        AssignmentConfig {
            finest_area: 56.0 * 56.0,
            ratio_divisor: 0.25,
            coarsest_level: 3,
            box_term_mode: BoxTermMode::Literal,
        }
    }
}

impl AssignmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.finest_area > 0.0) {
            return Err(Error::arg("finest_area must be positive"));
        }
        if !(self.ratio_divisor > 0.0 && self.ratio_divisor <= 1.0) {
            return Err(Error::arg("ratio_divisor must be in (0, 1]"));
        }
        Ok(())
    }
}

fn check_areas(s_bbox: f64, s_mask: f64) -> Result<()> {
    if !(s_bbox > 0.0) {
        return Err(Error::arg(format!("box area must be positive, got {s_bbox}")));
    }
    if s_mask < 0.0 {
        return Err(Error::arg(format!("mask area must be non-negative, got {s_mask}")));
    }
    if s_mask > s_bbox {
        return Err(Error::MaskExceedsBox);
    }
    Ok(())
}

/// Assign a mask proposal to a feature level from its box and mask areas.
///
/// A zero mask area is accepted (pseudo data can produce it) and routes to
/// level 0 through the ratio term.
pub fn assign_level(s_bbox: f64, s_mask: f64, cfg: &AssignmentConfig) -> Result<u32> {
    cfg.validate()?;
    check_areas(s_bbox, s_mask)?;
    let box_term = match cfg.box_term_mode {
        BoxTermMode::Literal => (s_bbox / cfg.finest_area).floor(),
        BoxTermMode::Log2 => (s_bbox.sqrt() / cfg.finest_area.sqrt()).log2().floor(),
    };
    let ratio_term = (s_mask / (cfg.ratio_divisor * s_bbox)).floor();
    let level = box_term
        .min(ratio_term)
        .min(cfg.coarsest_level as f64)
        .max(0.0);
    Ok(level as u32)
}

/// The conventional scale-only routing rule: `floor(log2(sqrt(area) / 56))`
/// clamped to `[0, coarsest_level]`.
pub fn assign_level_baseline(s_bbox: f64, cfg: &AssignmentConfig) -> Result<u32> {
    cfg.validate()?;
    if !(s_bbox > 0.0) {
        return Err(Error::arg(format!("box area must be positive, got {s_bbox}")));
    }
    let raw = (s_bbox.sqrt() / cfg.finest_area.sqrt()).log2().floor();
    let level = raw.min(cfg.coarsest_level as f64).max(0.0);
    Ok(level as u32)
}

/// A single proposal for the assignment report: its two areas plus the
/// rarity bucket of its category.
#[derive(Debug, Clone, Copy)]
pub struct ReportEntry {
    pub s_bbox: f64,
    pub s_mask: f64,
    pub bucket: Bucket,
}

impl ReportEntry {
    pub fn from_instance(inst: &Instance, bucket: Bucket) -> Self {
        ReportEntry {
            s_bbox: inst.bbox().area(),
            s_mask: inst.mask().area() as f64,
            bucket,
        }
    }
}

/// Which routing rule a histogram column belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AssignmentRule {
    AreaRatio,
    ScaleOnly,
}

impl AssignmentRule {
    pub fn as_str(&self) -> &'static str {
        match self {
            AssignmentRule::AreaRatio => "area_ratio",
            AssignmentRule::ScaleOnly => "scale_only",
        }
    }
}

/// Level x bucket histogram under both routing rules, plus the level-0 rate
/// of thin proposals (area ratio below the configured divisor) per rule.
#[derive(Debug, Clone)]
pub struct AssignmentReport {
    coarsest_level: u32,
    /// counts[level][bucket], indexed by `Bucket as usize`
    area_ratio_counts: Vec<[u64; 3]>,
    scale_only_counts: Vec<[u64; 3]>,
    pub total: u64,
    /// Entries with `s_mask == 0`; they are counted at level 0 rather than
    /// rejected because pseudo labels can carry empty masks.
    pub degenerate: u64,
    pub thin_total: u64,
    pub thin_level0_area_ratio: u64,
    pub thin_level0_scale_only: u64,
}

impl AssignmentReport {
    pub fn count(&self, rule: AssignmentRule, level: u32, bucket: Bucket) -> u64 {
        let table = match rule {
            AssignmentRule::AreaRatio => &self.area_ratio_counts,
            AssignmentRule::ScaleOnly => &self.scale_only_counts,
        };
        table[level as usize][bucket as usize]
    }

    pub fn level_total(&self, rule: AssignmentRule, level: u32) -> u64 {
        Bucket::ALL
            .iter()
            .map(|&b| self.count(rule, level, b))
            .sum()
    }

    pub fn thin_level0_rate(&self, rule: AssignmentRule) -> Option<f64> {
        if self.thin_total == 0 {
            return None;
        }
        let hits = match rule {
            AssignmentRule::AreaRatio => self.thin_level0_area_ratio,
            AssignmentRule::ScaleOnly => self.thin_level0_scale_only,
        };
        Some(hits as f64 / self.thin_total as f64)
    }

    /// CSV with columns `rule,level,bucket,count`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("rule,level,bucket,count\n");
        for rule in [AssignmentRule::AreaRatio, AssignmentRule::ScaleOnly] {
            for level in 0..=self.coarsest_level {
                for bucket in Bucket::ALL {
                    out.push_str(&format!(
                        "{},{},{},{}\n",
                        rule.as_str(),
                        level,
                        bucket.as_str(),
                        self.count(rule, level, bucket)
                    ));
                }
            }
        }
        out
    }

    /// One summary line per rule: thin-proposal counts and level-0 rate.
    pub fn summary_csv(&self) -> String {
        let mut out = String::from("rule,total,degenerate,thin_total,thin_level0,thin_level0_rate\n");
        for rule in [AssignmentRule::AreaRatio, AssignmentRule::ScaleOnly] {
            let hits = match rule {
                AssignmentRule::AreaRatio => self.thin_level0_area_ratio,
                AssignmentRule::ScaleOnly => self.thin_level0_scale_only,
            };
            let rate = self
                .thin_level0_rate(rule)
                .map(|r| r.to_string())
                .unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                rule.as_str(),
                self.total,
                self.degenerate,
                self.thin_total,
                hits,
                rate
            ));
        }
        out
    }
}

/// Tabulate both routing rules over a set of proposals.
pub fn assignment_report(entries: &[ReportEntry], cfg: &AssignmentConfig) -> Result<AssignmentReport> {
    cfg.validate()?;
    if entries.is_empty() {
        return Err(Error::EmptyInput("assignment report needs at least one proposal"));
    }
    let levels = cfg.coarsest_level as usize + 1;
    let mut report = AssignmentReport {
        coarsest_level: cfg.coarsest_level,
        area_ratio_counts: vec![[0; 3]; levels],
        scale_only_counts: vec![[0; 3]; levels],
        total: 0,
        degenerate: 0,
        thin_total: 0,
        thin_level0_area_ratio: 0,
        thin_level0_scale_only: 0,
    };
    for e in entries {
        let eq_level = assign_level(e.s_bbox, e.s_mask, cfg)?;
        let base_level = assign_level_baseline(e.s_bbox, cfg)?;
        let b = e.bucket as usize;
        report.area_ratio_counts[eq_level as usize][b] += 1;
        report.scale_only_counts[base_level as usize][b] += 1;
        report.total += 1;
        if e.s_mask == 0.0 {
            report.degenerate += 1;
        }
        if e.s_mask / e.s_bbox < cfg.ratio_divisor {
            report.thin_total += 1;
            if eq_level == 0 {
                report.thin_level0_area_ratio += 1;
            }
            if base_level == 0 {
                report.thin_level0_scale_only += 1;
            }
        }
    }
    Ok(report)
}

/// Convenience over [`assignment_report`] for instances paired with their
/// category's rarity bucket.
pub fn assignment_report_for_instances(
    instances: &[(Instance, Bucket)],
    cfg: &AssignmentConfig,
) -> Result<AssignmentReport> {
    let entries: Vec<ReportEntry> = instances
        .iter()
        .map(|(inst, bucket)| ReportEntry::from_instance(inst, *bucket))
        .collect();
    assignment_report(&entries, cfg)
}
