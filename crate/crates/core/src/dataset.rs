//! On-disk dataset and detection formats.
//!
//! Datasets are plain JSON: `images`, `annotations` and `categories` arrays.
//! Annotation masks are stored as uncompressed row-major RLE
//! (`[height, width, run, run, ...]`, background first, see
//! [`BinaryMask::to_rle`]) in the pixel frame of their image.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{BBox, BinaryMask, Instance};
use crate::tta::Detection;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: u64,
    pub height: u32,
    pub width: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub id: u64,
    pub image_id: u64,
    pub category_id: u32,
    /// [x_min, y_min, width, height]
    pub bbox: [f64; 4],
    /// `[height, width, run, ...]`, image-sized
    pub rle: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryRecord {
    pub id: u32,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub images: Vec<ImageRecord>,
    pub annotations: Vec<AnnotationRecord>,
    pub categories: Vec<CategoryRecord>,
}

impl Dataset {
    pub fn from_json(json: &str) -> Result<Self> {
        let ds: Dataset =
            serde_json::from_str(json).map_err(|e| Error::arg(format!("bad dataset JSON: {e}")))?;
        ds.validate()?;
        Ok(ds)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("dataset serialization cannot fail")
    }

    pub fn validate(&self) -> Result<()> {
        if self.images.is_empty() {
            return Err(Error::EmptyInput("dataset has no images"));
        }
        let mut image_dims = BTreeMap::new();
        for img in &self.images {
            if image_dims.insert(img.id, (img.height, img.width)).is_some() {
                return Err(Error::arg(format!("duplicate image id {}", img.id)));
            }
        }
        let category_ids: BTreeSet<u32> = self.categories.iter().map(|c| c.id).collect();
        if category_ids.len() != self.categories.len() {
            return Err(Error::arg("duplicate category id"));
        }
        let mut ann_ids = BTreeSet::new();
        for ann in &self.annotations {
            if !ann_ids.insert(ann.id) {
                return Err(Error::arg(format!("duplicate annotation id {}", ann.id)));
            }
            let Some(&(h, w)) = image_dims.get(&ann.image_id) else {
                return Err(Error::arg(format!(
                    "annotation {} references unknown image {}",
                    ann.id, ann.image_id
                )));
            };
            if !category_ids.contains(&ann.category_id) {
                return Err(Error::arg(format!(
                    "annotation {} references unknown category {}",
                    ann.id, ann.category_id
                )));
            }
            if ann.rle.len() >= 2 && (ann.rle[0] != h || ann.rle[1] != w) {
                return Err(Error::arg(format!(
                    "annotation {} mask is {}x{}, image {} is {h}x{w}",
                    ann.id, ann.rle[0], ann.rle[1], ann.image_id
                )));
            }
        }
        Ok(())
    }

    /// Decode one annotation into an [`Instance`].
    pub fn instance(&self, ann: &AnnotationRecord) -> Result<Instance> {
        let mask = BinaryMask::from_rle(&ann.rle)?;
        let bbox = BBox::from_xywh(ann.bbox)?;
        Instance::new(ann.category_id, bbox, mask)
    }

    /// Categories present per image (images without annotations map to an
    /// empty set).
    pub fn image_categories(&self) -> BTreeMap<u64, BTreeSet<u32>> {
        let mut out: BTreeMap<u64, BTreeSet<u32>> =
            self.images.iter().map(|img| (img.id, BTreeSet::new())).collect();
        for ann in &self.annotations {
            if let Some(set) = out.get_mut(&ann.image_id) {
                set.insert(ann.category_id);
            }
        }
        out
    }

    pub fn annotations_of_image(&self, image_id: u64) -> impl Iterator<Item = &AnnotationRecord> {
        self.annotations.iter().filter(move |a| a.image_id == image_id)
    }
}

/// One detection on disk; `rle` is optional because box-only pipelines do
/// not carry masks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub image_id: u64,
    pub category_id: u32,
    pub score: f64,
    pub scale_id: u32,
    /// [x_min, y_min, width, height] in reference-image coordinates
    pub bbox: [f64; 4],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rle: Option<Vec<u32>>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DetectionFile {
    pub detections: Vec<DetectionRecord>,
}

impl DetectionFile {
    pub fn from_json(json: &str) -> Result<Self> {
        serde_json::from_str(json).map_err(|e| Error::arg(format!("bad detections JSON: {e}")))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("detection serialization cannot fail")
    }
}

impl DetectionRecord {
    pub fn to_detection(&self) -> Result<Detection> {
        let mask = match &self.rle {
            Some(rle) => Some(BinaryMask::from_rle(rle)?),
            None => None,
        };
        Detection::new(
            BBox::from_xywh(self.bbox)?,
            self.score,
            self.category_id,
            self.scale_id,
            mask,
        )
    }

    pub fn from_detection(image_id: u64, det: &Detection) -> Self {
        DetectionRecord {
            image_id,
            category_id: det.category_id,
            score: det.score,
            scale_id: det.scale_id,
            bbox: det.bbox.to_xywh(),
            rle: det.mask.as_ref().map(|m| m.to_rle()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_dataset() -> Dataset {
        let mut mask = BinaryMask::zeros(4, 4).unwrap();
        mask.set(1, 1, true);
        mask.set(1, 2, true);
        Dataset {
            images: vec![ImageRecord { id: 0, height: 4, width: 4 }],
            annotations: vec![AnnotationRecord {
                id: 0,
                image_id: 0,
                category_id: 7,
                bbox: [1.0, 1.0, 2.0, 1.0],
                rle: mask.to_rle(),
            }],
            categories: vec![CategoryRecord { id: 7, name: "bar".into() }],
        }
    }

    #[test]
    fn json_round_trip() {
        let ds = tiny_dataset();
        let back = Dataset::from_json(&ds.to_json()).unwrap();
        assert_eq!(ds, back);
    }

    #[test]
    fn instance_decoding() {
        let ds = tiny_dataset();
        let inst = ds.instance(&ds.annotations[0]).unwrap();
        assert_eq!(inst.category_id(), 7);
        assert_eq!(inst.mask().area(), 2);
        assert_eq!(inst.bbox().to_xywh(), [1.0, 1.0, 2.0, 1.0]);
    }

    #[test]
    fn validation_catches_bad_references() {
        let mut ds = tiny_dataset();
        ds.annotations[0].image_id = 99;
        assert!(ds.validate().is_err());

        let mut ds = tiny_dataset();
        ds.annotations[0].category_id = 99;
        assert!(ds.validate().is_err());

        let mut ds = tiny_dataset();
        ds.images.clear();
        assert!(matches!(ds.validate(), Err(Error::EmptyInput(_))));
    }
}
