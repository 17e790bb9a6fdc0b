//! Geometry and mask primitives shared by every other module: areas, tight
//! boxes, IoU and the mask/box area ratio.
//!
//! Pixel model: the mask pixel at (row r, col c) is the unit square
//! [c, c+1) x [r, r+1). Tight boxes therefore have integer corners and
//! `mask.area() <= tight_bbox(mask).area()` holds exactly.

use crate::error::{Error, Result};

/// Axis-aligned box in pixel coordinates, stored as (x_min, y_min, width, height).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    x_min: f64,
    y_min: f64,
    width: f64,
    height: f64,
}

impl BBox {
    pub fn new(x_min: f64, y_min: f64, width: f64, height: f64) -> Result<Self> {
        if !(x_min.is_finite() && y_min.is_finite() && width.is_finite() && height.is_finite()) {
            return Err(Error::arg("box coordinates must be finite"));
        }
        if x_min < 0.0 || y_min < 0.0 {
            return Err(Error::arg(format!(
                "box origin must be non-negative, got ({x_min}, {y_min})"
            )));
        }
        if width <= 0.0 || height <= 0.0 {
            return Err(Error::arg(format!(
                "box sides must be positive, got {width}x{height}"
            )));
        }
        Ok(BBox {
            x_min,
            y_min,
            width,
            height,
        })
    }

    pub fn x_min(&self) -> f64 {
        self.x_min
    }

    pub fn y_min(&self) -> f64 {
        self.y_min
    }

    pub fn width(&self) -> f64 {
        self.width
    }

    pub fn height(&self) -> f64 {
        self.height
    }

    pub fn x_max(&self) -> f64 {
        self.x_min + self.width
    }

    pub fn y_max(&self) -> f64 {
        self.y_min + self.height
    }

    pub fn area(&self) -> f64 {
        self.width * self.height
    }

    /// (x_min, y_min, width, height) as an array, the order used on disk.
    pub fn to_xywh(&self) -> [f64; 4] {
        [self.x_min, self.y_min, self.width, self.height]
    }

    pub fn from_xywh(v: [f64; 4]) -> Result<Self> {
        BBox::new(v[0], v[1], v[2], v[3])
    }

    /// True when `other` lies entirely inside `self` (boundaries may touch).
    pub fn contains(&self, other: &BBox) -> bool {
        other.x_min >= self.x_min
            && other.y_min >= self.y_min
            && other.x_max() <= self.x_max()
            && other.y_max() <= self.y_max()
    }
}

/// Intersection-over-union of two boxes; 0 when disjoint.
pub fn bbox_iou(a: &BBox, b: &BBox) -> f64 {
    let ix = (a.x_max().min(b.x_max()) - a.x_min.max(b.x_min)).max(0.0);
    let iy = (a.y_max().min(b.y_max()) - a.y_min.max(b.y_min)).max(0.0);
    let inter = ix * iy;
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    inter / union
}

/// Dense binary mask, row-major, one byte per pixel holding 0 or 1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    bits: Vec<u8>,
}

impl BinaryMask {
    /// All-zero mask of the given size.
    pub fn zeros(height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::arg("mask dimensions must be at least 1x1"));
        }
        Ok(BinaryMask {
            height,
            width,
            bits: vec![0; height * width],
        })
    }

    pub fn from_bits(height: usize, width: usize, bits: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::arg("mask dimensions must be at least 1x1"));
        }
        if bits.len() != height * width {
            return Err(Error::arg(format!(
                "mask needs {} entries, got {}",
                height * width,
                bits.len()
            )));
        }
        if bits.iter().any(|&b| b > 1) {
            return Err(Error::arg("mask entries must be 0 or 1"));
        }
        Ok(BinaryMask {
            height,
            width,
            bits,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.width + col] == 1
    }

    pub fn set(&mut self, row: usize, col: usize, value: bool) {
        self.bits[row * self.width + col] = value as u8;
    }

    /// Number of 1-pixels.
    pub fn area(&self) -> u64 {
        self.bits.iter().map(|&b| b as u64).sum()
    }

    /// Indices (row, col) of all set pixels, row-major order.
    pub fn set_pixels(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.bits
            .iter()
            .enumerate()
            .filter(|(_, &b)| b == 1)
            .map(move |(i, _)| (i / self.width, i % self.width))
    }

    /// Uncompressed row-major RLE: `[height, width, run0, run1, ...]` with runs
    /// alternating background-first (the first run may be 0). Round-trips
    /// bit-exactly through [`BinaryMask::from_rle`].
    pub fn to_rle(&self) -> Vec<u32> {
        let mut out = Vec::with_capacity(8);
        out.push(self.height as u32);
        out.push(self.width as u32);
        let mut current = 0u8;
        let mut run = 0u32;
        for &b in &self.bits {
            if b == current {
                run += 1;
            } else {
                out.push(run);
                current = b;
                run = 1;
            }
        }
        out.push(run);
        out
    }

    pub fn from_rle(rle: &[u32]) -> Result<Self> {
        if rle.len() < 3 {
            return Err(Error::InvalidRle(
                "need at least height, width and one run".into(),
            ));
        }
        let height = rle[0] as usize;
        let width = rle[1] as usize;
        if height == 0 || width == 0 {
            return Err(Error::InvalidRle("zero mask dimension".into()));
        }
        let runs = &rle[2..];
        let total: u64 = runs.iter().map(|&r| r as u64).sum();
        if total != (height * width) as u64 {
            return Err(Error::InvalidRle(format!(
                "runs sum to {total}, expected {}",
                height * width
            )));
        }
        // Canonical form: only the leading background run may be zero.
        if runs[1..].iter().any(|&r| r == 0) {
            return Err(Error::InvalidRle("zero-length run after the first".into()));
        }
        let mut bits = Vec::with_capacity(height * width);
        let mut value = 0u8;
        for &r in runs {
            bits.resize(bits.len() + r as usize, value);
            value = 1 - value;
        }
        Ok(BinaryMask {
            height,
            width,
            bits,
        })
    }
}

/// Count of 1-pixels in the mask.
pub fn mask_area(mask: &BinaryMask) -> u64 {
    mask.area()
}

/// Smallest axis-aligned box covering all 1-pixels. Corners are integers
/// because pixel (r, c) occupies [c, c+1) x [r, r+1).
pub fn tight_bbox(mask: &BinaryMask) -> Result<BBox> {
    let mut min_r = usize::MAX;
    let mut max_r = 0usize;
    let mut min_c = usize::MAX;
    let mut max_c = 0usize;
    let mut any = false;
    for (r, c) in mask.set_pixels() {
        any = true;
        min_r = min_r.min(r);
        max_r = max_r.max(r);
        min_c = min_c.min(c);
        max_c = max_c.max(c);
    }
    if !any {
        return Err(Error::EmptyMask);
    }
    BBox::new(
        min_c as f64,
        min_r as f64,
        (max_c - min_c + 1) as f64,
        (max_r - min_r + 1) as f64,
    )
}

/// Intersection-over-union of two equally sized masks. Two empty masks give 0
/// so that empty predictions never match anything.
pub fn mask_iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    if a.height != b.height || a.width != b.width {
        return Err(Error::DimensionMismatch(
            a.height, a.width, b.height, b.width,
        ));
    }
    let mut inter = 0u64;
    let mut union = 0u64;
    for (&x, &y) in a.bits.iter().zip(&b.bits) {
        inter += (x & y) as u64;
        union += (x | y) as u64;
    }
    if union == 0 {
        return Ok(0.0);
    }
    Ok(inter as f64 / union as f64)
}

/// A ground-truth object: category, box and mask in the same pixel frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    category_id: u32,
    bbox: BBox,
    mask: BinaryMask,
}

impl Instance {
    /// The box may be the tight box or looser, but must contain every 1-pixel.
    pub fn new(category_id: u32, bbox: BBox, mask: BinaryMask) -> Result<Self> {
        let tight = tight_bbox(&mask)?; // rejects empty masks
        if !bbox.contains(&tight) {
            return Err(Error::arg(format!(
                "box [{}, {}, {}, {}] does not contain all mask pixels (tight box [{}, {}, {}, {}])",
                bbox.x_min, bbox.y_min, bbox.width, bbox.height,
                tight.x_min, tight.y_min, tight.width, tight.height,
            )));
        }
        Ok(Instance {
            category_id,
            bbox,
            mask,
        })
    }

    /// Instance whose box is exactly the tight box of the mask.
    pub fn with_tight_bbox(category_id: u32, mask: BinaryMask) -> Result<Self> {
        let bbox = tight_bbox(&mask)?;
        Ok(Instance {
            category_id,
            bbox,
            mask,
        })
    }

    pub fn category_id(&self) -> u32 {
        self.category_id
    }

    pub fn bbox(&self) -> &BBox {
        &self.bbox
    }

    pub fn mask(&self) -> &BinaryMask {
        &self.mask
    }
}

/// Mask area divided by box area, in (0, 1] whenever the box is tight.
/// Small values mean a thin mask inside a large box.
pub fn area_ratio(inst: &Instance) -> f64 {
    inst.mask.area() as f64 / inst.bbox.area()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask_from(rows: &[&str]) -> BinaryMask {
        let height = rows.len();
        let width = rows[0].len();
        let bits = rows
            .iter()
            .flat_map(|r| r.bytes().map(|b| (b == b'#') as u8))
            .collect();
        BinaryMask::from_bits(height, width, bits).unwrap()
    }

    #[test]
    fn mask_area_counts_ones() {
        assert_eq!(mask_area(&BinaryMask::zeros(2, 2).unwrap()), 0);
        assert_eq!(mask_area(&mask_from(&["##", "##"])), 4);
        assert_eq!(mask_area(&mask_from(&["...", ".#.", "..."])), 1);
    }

    #[test]
    fn tight_bbox_single_pixel() {
        let mut mask = BinaryMask::zeros(5, 6).unwrap();
        mask.set(2, 3, true);
        let b = tight_bbox(&mask).unwrap();
        assert_eq!(b.to_xywh(), [3.0, 2.0, 1.0, 1.0]);
    }

    #[test]
    fn tight_bbox_spanning_pixels() {
        // 1s at (row 0, col 0) and (row 4, col 9): min/max over set pixels.
        let mut mask = BinaryMask::zeros(5, 10).unwrap();
        mask.set(0, 0, true);
        mask.set(4, 9, true);
        let b = tight_bbox(&mask).unwrap();
        assert_eq!(b.to_xywh(), [0.0, 0.0, 10.0, 5.0]);
    }

    #[test]
    fn tight_bbox_full_grid() {
        let mask = BinaryMask::from_bits(5, 7, vec![1; 35]).unwrap();
        let b = tight_bbox(&mask).unwrap();
        assert_eq!(b.to_xywh(), [0.0, 0.0, 7.0, 5.0]);
    }

    #[test]
    fn tight_bbox_rejects_empty() {
        let mask = BinaryMask::zeros(3, 3).unwrap();
        assert_eq!(tight_bbox(&mask), Err(Error::EmptyMask));
    }

    #[test]
    fn bbox_iou_identity_disjoint_partial() {
        let a = BBox::new(0.0, 0.0, 2.0, 2.0).unwrap();
        assert_eq!(bbox_iou(&a, &a), 1.0);

        let far = BBox::new(10.0, 10.0, 2.0, 2.0).unwrap();
        assert_eq!(bbox_iou(&a, &far), 0.0);

        // intersection 2, union 6
        let b = BBox::new(1.0, 0.0, 2.0, 2.0).unwrap();
        assert!((bbox_iou(&a, &b) - 2.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn mask_iou_cases() {
        let a = mask_from(&["##..", "...."]);
        assert_eq!(mask_iou(&a, &a).unwrap(), 1.0);

        let b = mask_from(&["##..", "..##"]);
        assert_eq!(mask_iou(&a, &b).unwrap(), 0.5);

        let left = mask_from(&["#.", ".."]);
        let right = mask_from(&[".#", ".."]);
        assert_eq!(mask_iou(&left, &right).unwrap(), 0.0);

        let empty = BinaryMask::zeros(2, 2).unwrap();
        assert_eq!(mask_iou(&empty, &empty).unwrap(), 0.0);

        let other = BinaryMask::zeros(3, 2).unwrap();
        assert!(matches!(
            mask_iou(&empty, &other),
            Err(Error::DimensionMismatch(..))
        ));
    }

    #[test]
    fn area_ratio_full_box() {
        let inst = Instance::with_tight_bbox(0, mask_from(&["##", "##"])).unwrap();
        assert_eq!(area_ratio(&inst), 1.0);
    }

    #[test]
    fn area_ratio_rotated_bar() {
        // Pixel-count oracle: rasterize a 100x4 bar rotated 45 degrees by
        // testing each pixel center against the rotated rectangle.
        let (h, w) = (96, 96);
        let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
        let (half_l, half_t) = (50.0, 2.0);
        let theta = std::f64::consts::FRAC_PI_4;
        let (cos, sin) = (theta.cos(), theta.sin());
        let mut mask = BinaryMask::zeros(h, w).unwrap();
        for r in 0..h {
            for c in 0..w {
                let px = c as f64 + 0.5 - cx;
                let py = r as f64 + 0.5 - cy;
                let u = px * cos + py * sin;
                let v = -px * sin + py * cos;
                if u.abs() <= half_l && v.abs() <= half_t {
                    mask.set(r, c, true);
                }
            }
        }
        let inst = Instance::with_tight_bbox(0, mask).unwrap();
        let rho = area_ratio(&inst);
        assert!((rho - 0.073).abs() < 0.02, "rho = {rho}");
        // The tight box of the diagonal bar is roughly 74x74.
        assert!((inst.bbox().width() - 74.0).abs() <= 2.0);
        assert!((inst.bbox().height() - 74.0).abs() <= 2.0);
    }

    #[test]
    fn instance_rejects_box_not_covering_mask() {
        let mask = mask_from(&["#.", ".#"]);
        let bbox = BBox::new(0.0, 0.0, 1.0, 1.0).unwrap();
        assert!(Instance::new(0, bbox, mask).is_err());
    }

    #[test]
    fn rle_round_trip_edges() {
        // leading foreground: first run is 0
        let full = BinaryMask::from_bits(2, 2, vec![1; 4]).unwrap();
        assert_eq!(full.to_rle(), vec![2, 2, 0, 4]);
        assert_eq!(BinaryMask::from_rle(&full.to_rle()).unwrap(), full);

        let empty = BinaryMask::zeros(2, 3).unwrap();
        assert_eq!(empty.to_rle(), vec![2, 3, 6]);
        assert_eq!(BinaryMask::from_rle(&empty.to_rle()).unwrap(), empty);

        assert!(BinaryMask::from_rle(&[2, 2, 1, 1]).is_err()); // bad sum
        assert!(BinaryMask::from_rle(&[2, 2, 1, 0, 3]).is_err()); // interior zero run
    }
}
