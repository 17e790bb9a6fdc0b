//! Synthetic long-tailed thin-mask dataset generator and prediction
//! perturbation.
//!
//! Images are never rendered; an "image" is a pixel frame holding binary
//! instance masks. Category image counts follow a rank power law
//! `n(c) ~ max_frequency * rank^(-frequency_exponent)`, so the category list
//! is long-tailed by construction. Four shape families span the mask/box
//! area ratio range:
//!
//! * bar - rectangle with aspect ratio 15, rotated; rho ~ 0.05..0.22 for
//!   rotations in the default 15..75 degree range
//! * annulus - ring with inner radius 0.87 of the outer; rho ~ 0.19
//! * ellipse - rho ~ 0.6..0.79
//! * blob - axis-aligned filled rectangle; rho = 1 exactly
//!
//! All randomness comes from streams keyed by (seed, image id) or
//! (seed, category id), so generation is reproducible and independent of
//! thread count.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{AnnotationRecord, CategoryRecord, Dataset, ImageRecord};
use crate::error::{Error, Result};
use crate::loss::ProbMask;
use crate::mask::{tight_bbox, BinaryMask, Instance};
use crate::tta::Detection;

/// RNG streams above this base index are reserved for category assignment;
/// streams below it address per-image shape generation.
const CATEGORY_STREAM_BASE: u64 = 1 << 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Bar,
    Annulus,
    Ellipse,
    Blob,
}

/// Sampling weights over the four shape families; must sum to 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ShapeMix {
    pub bar: f64,
    pub annulus: f64,
    pub ellipse: f64,
    pub blob: f64,
}

impl Default for ShapeMix {
    fn default() -> Self {
        ShapeMix {
            bar: 0.3,
            annulus: 0.2,
            ellipse: 0.25,
            blob: 0.25,
        }
    }
}

impl ShapeMix {
    fn weights(&self) -> [(ShapeKind, f64); 4] {
        [
            (ShapeKind::Bar, self.bar),
            (ShapeKind::Annulus, self.annulus),
            (ShapeKind::Ellipse, self.ellipse),
            (ShapeKind::Blob, self.blob),
        ]
    }

    fn validate(&self) -> Result<()> {
        let ws = self.weights();
        if ws.iter().any(|(_, w)| *w < 0.0) {
            return Err(Error::arg("shape weights must be non-negative"));
        }
        let sum: f64 = ws.iter().map(|(_, w)| w).sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::arg(format!("shape weights must sum to 1, got {sum}")));
        }
        Ok(())
    }

    fn sample(&self, rng: &mut impl Rng) -> ShapeKind {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (kind, w) in self.weights() {
            acc += w;
            if u < acc {
                return kind;
            }
        }
        ShapeKind::Blob
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub num_categories: u32,
    pub num_images: u32,
    /// Rank power-law exponent of the category image counts.
    pub frequency_exponent: f64,
    /// Image frequency of the most frequent category.
    pub max_frequency: f64,
    pub shape_mix: ShapeMix,
    /// Characteristic shape size (bar length, ring/blob diameter, ellipse
    /// major axis) in pixels, sampled uniformly.
    pub size_range: [f64; 2],
    /// Rotation of bars and ellipses, degrees.
    pub rotation_range: [f64; 2],
    pub image_height: u32,
    pub image_width: u32,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            num_categories: 24,
            num_images: 1000,
            frequency_exponent: 1.5,
            max_frequency: 0.6,
            shape_mix: ShapeMix::default(),
            size_range: [40.0, 160.0],
            rotation_range: [15.0, 75.0],
            image_height: 192,
            image_width: 192,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_categories == 0 || self.num_images == 0 {
            return Err(Error::arg("need at least one category and one image"));
        }
        self.shape_mix.validate()?;
        let [lo, hi] = self.size_range;
        if !(lo > 0.0 && hi >= lo) {
            return Err(Error::arg("size range must satisfy 0 < lo <= hi"));
        }
        if self.rotation_range[1] < self.rotation_range[0] {
            return Err(Error::arg("rotation range must satisfy lo <= hi"));
        }
        if !(self.frequency_exponent >= 0.0) {
            return Err(Error::arg("frequency exponent must be non-negative"));
        }
        if !(self.max_frequency > 0.0 && self.max_frequency <= 1.0) {
            return Err(Error::arg("max frequency must be in (0, 1]"));
        }
        if self.image_height < 8 || self.image_width < 8 {
            return Err(Error::arg("canvas must be at least 8x8"));
        }
        // the ring must be at least a pixel-diagonal thick to rasterize
        if self.shape_mix.annulus > 0.0 && lo < 24.0 {
            return Err(Error::arg(
                "annulus shapes need a minimum size of 24 pixels",
            ));
        }
        // the smallest shape must fit the canvas at any sampled rotation
        let allowed = self.max_extent();
        let worst = [
            (self.shape_mix.bar, lo + bar_thickness(lo)),
            (self.shape_mix.annulus, lo),
            (self.shape_mix.ellipse, lo),
            (self.shape_mix.blob, lo),
        ];
        for (weight, extent) in worst {
            if weight > 0.0 && extent > allowed {
                return Err(Error::arg(format!(
                    "shapes of minimum size {lo} cannot fit a {}x{} canvas",
                    self.image_height, self.image_width
                )));
            }
        }
        Ok(())
    }

    fn max_extent(&self) -> f64 {
        (self.image_height.min(self.image_width) as f64) - 2.0
    }

    /// Target number of images containing each category, by rank.
    pub fn category_image_counts(&self) -> Vec<u64> {
        let n = self.num_images as f64;
        (0..self.num_categories)
            .map(|c| {
                let f = self.max_frequency * ((c + 1) as f64).powf(-self.frequency_exponent);
                ((n * f).round() as u64).clamp(1, self.num_images as u64)
            })
            .collect()
    }
}

fn bar_thickness(length: f64) -> f64 {
    (length / 15.0).max(2.0)
}

/// Axis-aligned extent of a shape at the given rotation.
fn shape_extent(kind: ShapeKind, size: f64, theta: f64, aspect: f64) -> (f64, f64) {
    match kind {
        ShapeKind::Bar => {
            let t = bar_thickness(size);
            let (sin, cos) = theta.sin_cos();
            (
                size * cos.abs() + t * sin.abs(),
                size * sin.abs() + t * cos.abs(),
            )
        }
        ShapeKind::Annulus => (size, size),
        ShapeKind::Ellipse => {
            let a = size / 2.0;
            let b = a * aspect;
            let (sin, cos) = theta.sin_cos();
            let w = 2.0 * (a * a * cos * cos + b * b * sin * sin).sqrt();
            let h = 2.0 * (a * a * sin * sin + b * b * cos * cos).sqrt();
            (w, h)
        }
        ShapeKind::Blob => (size, size * aspect),
    }
}

fn rasterize(
    kind: ShapeKind,
    center: (f64, f64),
    size: f64,
    theta: f64,
    aspect: f64,
    height: usize,
    width: usize,
) -> Result<BinaryMask> {
    let (cx, cy) = center;
    let (sin, cos) = theta.sin_cos();
    let mut mask = BinaryMask::zeros(height, width)?;
    // scan only the bounding window of the shape
    let (ext_w, ext_h) = shape_extent(kind, size, theta, aspect);
    let r0 = ((cy - ext_h / 2.0 - 1.0).floor().max(0.0)) as usize;
    let r1 = ((cy + ext_h / 2.0 + 1.0).ceil() as usize).min(height);
    let c0 = ((cx - ext_w / 2.0 - 1.0).floor().max(0.0)) as usize;
    let c1 = ((cx + ext_w / 2.0 + 1.0).ceil() as usize).min(width);
    for r in r0..r1 {
        for c in c0..c1 {
            let dx = c as f64 + 0.5 - cx;
            let dy = r as f64 + 0.5 - cy;
            let inside = match kind {
                ShapeKind::Bar => {
                    let u = dx * cos + dy * sin;
                    let v = -dx * sin + dy * cos;
                    let t = bar_thickness(size);
                    u.abs() <= size / 2.0 && v.abs() <= t / 2.0
                }
                ShapeKind::Annulus => {
                    let d = (dx * dx + dy * dy).sqrt();
                    let r_out = size / 2.0;
                    let r_in = 0.87 * r_out;
                    d >= r_in && d <= r_out
                }
                ShapeKind::Ellipse => {
                    let u = dx * cos + dy * sin;
                    let v = -dx * sin + dy * cos;
                    let a = size / 2.0;
                    let b = a * aspect;
                    (u / a) * (u / a) + (v / b) * (v / b) <= 1.0
                }
                ShapeKind::Blob => dx.abs() <= size / 2.0 && dy.abs() <= (size * aspect) / 2.0,
            };
            if inside {
                mask.set(r, c, true);
            }
        }
    }
    Ok(mask)
}

/// One generated object together with the shape family that produced it.
#[derive(Debug, Clone)]
pub struct GeneratedInstance {
    pub kind: ShapeKind,
    pub instance: Instance,
}

/// Draw a single instance of `category` on an empty canvas.
pub(crate) fn gen_instance(
    rng: &mut impl Rng,
    spec: &SynthSpec,
    category: u32,
) -> Result<GeneratedInstance> {
    let kind = spec.shape_mix.sample(rng);
    let [size_lo, size_hi] = spec.size_range;
    let mut size = if size_hi > size_lo {
        rng.random_range(size_lo..size_hi)
    } else {
        size_lo
    };
    let [rot_lo, rot_hi] = spec.rotation_range;
    let theta_deg = if rot_hi > rot_lo {
        rng.random_range(rot_lo..rot_hi)
    } else {
        rot_lo
    };
    let theta = theta_deg.to_radians();
    let aspect = match kind {
        ShapeKind::Ellipse => rng.random_range(0.45..0.8),
        _ => rng.random_range(0.6..1.0),
    };

    // shrink until the rotated extent fits the canvas
    let allowed = spec.max_extent();
    let (ext_w, ext_h) = shape_extent(kind, size, theta, aspect);
    let extent = ext_w.max(ext_h);
    if extent > allowed {
        size *= allowed / extent;
    }
    let (ext_w, ext_h) = shape_extent(kind, size, theta, aspect);

    let width = spec.image_width as f64;
    let height = spec.image_height as f64;
    let (x_lo, x_hi) = (ext_w / 2.0 + 1.0, width - ext_w / 2.0 - 1.0);
    let (y_lo, y_hi) = (ext_h / 2.0 + 1.0, height - ext_h / 2.0 - 1.0);
    let cx = if x_hi > x_lo { rng.random_range(x_lo..x_hi) } else { width / 2.0 };
    let cy = if y_hi > y_lo { rng.random_range(y_lo..y_hi) } else { height / 2.0 };

    let mask = rasterize(
        kind,
        (cx, cy),
        size,
        theta,
        aspect,
        spec.image_height as usize,
        spec.image_width as usize,
    )?;
    let instance = Instance::with_tight_bbox(category, mask)?;
    Ok(GeneratedInstance { kind, instance })
}

/// Generate a full dataset per the spec. Deterministic for a fixed seed and
/// independent of thread count.
pub fn gen_dataset(spec: &SynthSpec) -> Result<Dataset> {
    spec.validate()?;
    let num_images = spec.num_images as u64;

    // assign each category to its images with a category-keyed stream
    let counts = spec.category_image_counts();
    let mut per_image: Vec<Vec<u32>> = vec![Vec::new(); spec.num_images as usize];
    for (c, &count) in counts.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(CATEGORY_STREAM_BASE + c as u64);
        let picked = rand::seq::index::sample(&mut rng, spec.num_images as usize, count as usize);
        for img in picked {
            per_image[img].push(c as u32);
        }
    }
    for cats in &mut per_image {
        cats.sort_unstable();
    }

    // per-image shape generation with image-keyed streams
    let generated: Vec<Vec<(u32, Instance)>> = (0..num_images)
        .into_par_iter()
        .map(|image_id| -> Result<Vec<(u32, Instance)>> {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(image_id);
            per_image[image_id as usize]
                .iter()
                .map(|&c| gen_instance(&mut rng, spec, c).map(|g| (c, g.instance)))
                .collect()
        })
        .collect::<Result<_>>()?;

    let images = (0..num_images)
        .map(|id| ImageRecord {
            id,
            height: spec.image_height,
            width: spec.image_width,
        })
        .collect();
    let mut annotations = Vec::new();
    for (image_id, insts) in generated.into_iter().enumerate() {
        for (category_id, inst) in insts {
            annotations.push(AnnotationRecord {
                id: annotations.len() as u64,
                image_id: image_id as u64,
                category_id,
                bbox: inst.bbox().to_xywh(),
                rle: inst.mask().to_rle(),
            });
        }
    }
    let categories = (0..spec.num_categories)
        .map(|id| CategoryRecord {
            id,
            name: format!("category_{id:03}"),
        })
        .collect();
    Ok(Dataset {
        images,
        annotations,
        categories,
    })
}

/// Rotate an instance's mask about its centroid by nearest-neighbor
/// resampling and recompute the box as the tight box of the rotated mask
/// (never by rotating box corners). Quarter-turn angles take a lattice-exact
/// path that preserves the pixel count.
pub fn rotate_instance(inst: &Instance, angle_degrees: f64) -> Result<Instance> {
    let mask = inst.mask();
    let (height, width) = (mask.height(), mask.width());
    let area = mask.area();
    if area == 0 {
        return Err(Error::EmptyMask);
    }
    let (mut sx, mut sy) = (0.0f64, 0.0f64);
    for (r, c) in mask.set_pixels() {
        sx += c as f64 + 0.5;
        sy += r as f64 + 0.5;
    }
    let cx = sx / area as f64;
    let cy = sy / area as f64;

    let normalized = angle_degrees.rem_euclid(360.0);
    let quarter = (normalized / 90.0).round();
    let mut rotated = BinaryMask::zeros(height, width)?;
    if (normalized - quarter * 90.0).abs() < 1e-9 {
        // exact quarter turns: a bijection of the pixel lattice
        let k = (quarter as u32) % 4;
        for (r, c) in mask.set_pixels() {
            let dx = c as f64 + 0.5 - cx;
            let dy = r as f64 + 0.5 - cy;
            let (rx, ry) = match k {
                0 => (dx, dy),
                1 => (-dy, dx),
                2 => (-dx, -dy),
                _ => (dy, -dx),
            };
            let tc = (cx + rx).floor();
            let tr = (cy + ry).floor();
            if tc < 0.0 || tr < 0.0 || tc >= width as f64 || tr >= height as f64 {
                return Err(Error::arg("rotated mask leaves the canvas"));
            }
            rotated.set(tr as usize, tc as usize, true);
        }
    } else {
        let theta = normalized.to_radians();
        let (sin, cos) = theta.sin_cos();
        // conservative bound: the rotated tight box must stay inside
        let tight = tight_bbox(mask)?;
        for (px, py) in [
            (tight.x_min(), tight.y_min()),
            (tight.x_max(), tight.y_min()),
            (tight.x_min(), tight.y_max()),
            (tight.x_max(), tight.y_max()),
        ] {
            let dx = px - cx;
            let dy = py - cy;
            let rx = cx + dx * cos - dy * sin;
            let ry = cy + dx * sin + dy * cos;
            if rx < 0.0 || ry < 0.0 || rx > width as f64 || ry > height as f64 {
                return Err(Error::arg("rotated mask leaves the canvas"));
            }
        }
        // backward nearest-neighbor resampling
        for r in 0..height {
            for c in 0..width {
                let dx = c as f64 + 0.5 - cx;
                let dy = r as f64 + 0.5 - cy;
                let sx = cx + dx * cos + dy * sin;
                let sy = cy - dx * sin + dy * cos;
                if sx < 0.0 || sy < 0.0 {
                    continue;
                }
                let (sc, sr) = (sx.floor() as usize, sy.floor() as usize);
                if sc < width && sr < height && mask.get(sr, sc) {
                    rotated.set(r, c, true);
                }
            }
        }
    }
    Instance::with_tight_bbox(inst.category_id(), rotated)
}

/// Noise model for deriving an imperfect prediction from ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PerturbNoise {
    /// Independent per-pixel flip probability, in [0, 0.5).
    pub flip_prob: f64,
    /// Number of 3x3 box-blur passes applied to the probability grid.
    pub blur_passes: u32,
}

impl Default for PerturbNoise {
    fn default() -> Self {
        PerturbNoise {
            flip_prob: 0.1,
            blur_passes: 0,
        }
    }
}

fn box_blur(probs: &mut Vec<f64>, height: usize, width: usize) {
    let src = probs.clone();
    for r in 0..height {
        for c in 0..width {
            let mut sum = 0.0;
            let mut count = 0.0;
            for dr in -1i64..=1 {
                for dc in -1i64..=1 {
                    let rr = r as i64 + dr;
                    let cc = c as i64 + dc;
                    if rr >= 0 && cc >= 0 && (rr as usize) < height && (cc as usize) < width {
                        sum += src[rr as usize * width + cc as usize];
                        count += 1.0;
                    }
                }
            }
            probs[r * width + c] = sum / count;
        }
    }
}

/// Derive a noisy probability grid and a paired detection from a
/// ground-truth instance. Deterministic per seed.
pub fn perturb_prediction(
    inst: &Instance,
    noise: &PerturbNoise,
    seed: u64,
) -> Result<(ProbMask, Detection)> {
    if !(0.0..0.5).contains(&noise.flip_prob) {
        return Err(Error::arg("flip_prob must be in [0, 0.5)"));
    }
    let mask = inst.mask();
    let (height, width) = (mask.height(), mask.width());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bits = mask.bits().to_vec();
    if noise.flip_prob > 0.0 {
        for b in bits.iter_mut() {
            if rng.random::<f64>() < noise.flip_prob {
                *b = 1 - *b;
            }
        }
    }
    let flipped = BinaryMask::from_bits(height, width, bits)?;
    let mut probs: Vec<f64> = flipped.bits().iter().map(|&b| b as f64).collect();
    for _ in 0..noise.blur_passes {
        box_blur(&mut probs, height, width);
    }
    let prob_mask = ProbMask::new(height, width, probs)?;
    // an all-background flip leaves no box to derive; fall back to the truth
    let bbox = tight_bbox(&flipped).unwrap_or(*inst.bbox());
    let det = Detection::new(
        bbox,
        1.0 - noise.flip_prob,
        inst.category_id(),
        0,
        Some(flipped),
    )?;
    Ok((prob_mask, det))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::area_ratio;

    fn small_spec() -> SynthSpec {
        SynthSpec {
            num_categories: 8,
            num_images: 60,
            image_height: 192,
            image_width: 192,
            seed: 5,
            ..SynthSpec::default()
        }
    }

    fn bar_100x4(height: usize, width: usize, origin: (usize, usize)) -> Instance {
        let mut mask = BinaryMask::zeros(height, width).unwrap();
        for r in origin.0..origin.0 + 4 {
            for c in origin.1..origin.1 + 100 {
                mask.set(r, c, true);
            }
        }
        Instance::with_tight_bbox(3, mask).unwrap()
    }

    #[test]
    fn same_seed_same_dataset() {
        let spec = small_spec();
        let a = gen_dataset(&spec).unwrap();
        let b = gen_dataset(&spec).unwrap();
        assert_eq!(a, b);
        let c = gen_dataset(&SynthSpec { seed: 6, ..spec }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn category_counts_follow_the_power_law() {
        let spec = small_spec();
        let ds = gen_dataset(&spec).unwrap();
        let expected = spec.category_image_counts();
        let per_image = ds.image_categories();
        let mut counts = vec![0u64; spec.num_categories as usize];
        for cats in per_image.values() {
            for &c in cats {
                counts[c as usize] += 1;
            }
        }
        assert_eq!(counts, expected);
        // monotone non-increasing in rank, and every category present
        for pair in counts.windows(2) {
            assert!(pair[0] >= pair[1]);
        }
        assert!(counts.iter().all(|&n| n >= 1));
    }

    #[test]
    fn boxes_are_tight_and_instances_valid() {
        let ds = gen_dataset(&small_spec()).unwrap();
        assert!(!ds.annotations.is_empty());
        for ann in &ds.annotations {
            let inst = ds.instance(ann).unwrap();
            let tight = tight_bbox(inst.mask()).unwrap();
            assert_eq!(*inst.bbox(), tight);
        }
    }

    #[test]
    fn shape_families_span_the_ratio_range() {
        let spec = SynthSpec::default();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut seen = [false; 4];
        for _ in 0..400 {
            let g = gen_instance(&mut rng, &spec, 0).unwrap();
            let rho = area_ratio(&g.instance);
            match g.kind {
                ShapeKind::Bar | ShapeKind::Annulus => {
                    assert!(rho < 0.25, "{:?} produced rho = {rho}", g.kind)
                }
                ShapeKind::Ellipse => assert!(rho > 0.5, "ellipse rho = {rho}"),
                ShapeKind::Blob => assert_eq!(rho, 1.0),
            }
            seen[match g.kind {
                ShapeKind::Bar => 0,
                ShapeKind::Annulus => 1,
                ShapeKind::Ellipse => 2,
                ShapeKind::Blob => 3,
            }] = true;
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn axis_aligned_bar_fills_its_box() {
        let spec = SynthSpec {
            shape_mix: ShapeMix { bar: 1.0, annulus: 0.0, ellipse: 0.0, blob: 0.0 },
            rotation_range: [0.0, 0.0],
            ..SynthSpec::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let g = gen_instance(&mut rng, &spec, 0).unwrap();
            assert_eq!(area_ratio(&g.instance), 1.0);
        }
    }

    #[test]
    fn impossible_spec_is_rejected() {
        let spec = SynthSpec {
            size_range: [300.0, 400.0],
            image_height: 64,
            image_width: 64,
            ..SynthSpec::default()
        };
        assert!(spec.validate().is_err());
        assert!(gen_dataset(&spec).is_err());
    }

    #[test]
    fn rotate_quarter_turn_swaps_box_and_keeps_area() {
        let inst = bar_100x4(160, 160, (80, 20));
        let rotated = rotate_instance(&inst, 90.0).unwrap();
        assert_eq!(rotated.mask().area(), inst.mask().area());
        assert_eq!(rotated.bbox().width(), inst.bbox().height());
        assert_eq!(rotated.bbox().height(), inst.bbox().width());

        let back = rotate_instance(&inst, 360.0).unwrap();
        assert_eq!(back.mask(), inst.mask());
        assert_eq!(back.bbox(), inst.bbox());
    }

    #[test]
    fn rotate_45_thins_the_bar() {
        let inst = bar_100x4(160, 160, (78, 30));
        assert_eq!(area_ratio(&inst), 1.0);
        let rotated = rotate_instance(&inst, 45.0).unwrap();
        let rho = area_ratio(&rotated);
        assert!((rho - 0.073).abs() < 0.02, "rho = {rho}");
        assert!((rotated.bbox().width() - 74.0).abs() <= 3.0);
        assert!((rotated.bbox().height() - 74.0).abs() <= 3.0);
        // nearest-neighbor resampling keeps the area within 5%
        let relative = rotated.mask().area() as f64 / inst.mask().area() as f64;
        assert!((relative - 1.0).abs() < 0.05, "area ratio {relative}");
    }

    #[test]
    fn rotate_out_of_canvas_errors() {
        // bar hugging the left edge cannot rotate 45 degrees in place
        let inst = bar_100x4(110, 110, (2, 2));
        assert!(rotate_instance(&inst, 45.0).is_err());
    }

    #[test]
    fn rotation_area_drift_within_bounds_for_arbitrary_angles() {
        let spec = SynthSpec::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for angle in [10.0, 30.0, 60.0, 120.0, 215.0, 333.0] {
            let g = gen_instance(&mut rng, &spec, 0).unwrap();
            match rotate_instance(&g.instance, angle) {
                Ok(rot) => {
                    let rel = rot.mask().area() as f64 / g.instance.mask().area() as f64;
                    assert!((rel - 1.0).abs() < 0.05, "{:?} at {angle}: {rel}", g.kind);
                }
                // shapes near the border may legitimately not fit
                Err(Error::InvalidArgument(_)) => {}
                Err(e) => panic!("unexpected error: {e}"),
            }
        }
    }

    #[test]
    fn perturb_zero_noise_is_exact() {
        let inst = bar_100x4(120, 120, (40, 10));
        let noise = PerturbNoise { flip_prob: 0.0, blur_passes: 0 };
        let (probs, det) = perturb_prediction(&inst, &noise, 7).unwrap();
        let expected: Vec<f64> = inst.mask().bits().iter().map(|&b| b as f64).collect();
        assert_eq!(probs.probs(), &expected[..]);
        assert_eq!(det.score, 1.0);
        assert_eq!(det.mask.as_ref().unwrap(), inst.mask());
        assert_eq!(det.bbox, *inst.bbox());
    }

    #[test]
    fn perturb_is_deterministic_per_seed() {
        let inst = bar_100x4(120, 120, (40, 10));
        let noise = PerturbNoise { flip_prob: 0.2, blur_passes: 1 };
        let (p1, d1) = perturb_prediction(&inst, &noise, 7).unwrap();
        let (p2, d2) = perturb_prediction(&inst, &noise, 7).unwrap();
        assert_eq!(p1, p2);
        assert_eq!(d1, d2);
        let (p3, _) = perturb_prediction(&inst, &noise, 8).unwrap();
        assert_ne!(p1, p3);
    }

    #[test]
    fn perturb_flip_rate_concentrates() {
        // 25x40 grid: 1000 pixels, flip probability 0.1
        let mut mask = BinaryMask::zeros(25, 40).unwrap();
        for r in 5..15 {
            for c in 5..25 {
                mask.set(r, c, true);
            }
        }
        let inst = Instance::with_tight_bbox(0, mask).unwrap();
        let noise = PerturbNoise { flip_prob: 0.1, blur_passes: 0 };
        let (_, det) = perturb_prediction(&inst, &noise, 21).unwrap();
        let flipped = det.mask.unwrap();
        let hamming: u64 = flipped
            .bits()
            .iter()
            .zip(inst.mask().bits())
            .map(|(&a, &b)| (a != b) as u64)
            .sum();
        let rate = hamming as f64 / 1000.0;
        assert!((0.07..=0.13).contains(&rate), "flip rate {rate}");
    }

    #[test]
    fn perturb_blur_stays_in_unit_interval() {
        let inst = bar_100x4(120, 120, (40, 10));
        let noise = PerturbNoise { flip_prob: 0.05, blur_passes: 3 };
        let (probs, _) = perturb_prediction(&inst, &noise, 3).unwrap();
        assert!(probs.probs().iter().all(|p| (0.0..=1.0).contains(p)));
        // blur must produce genuinely soft values
        assert!(probs.probs().iter().any(|&p| p > 0.0 && p < 1.0));
    }

    #[test]
    fn perturb_rejects_bad_flip_prob() {
        let inst = bar_100x4(120, 120, (40, 10));
        assert!(perturb_prediction(&inst, &PerturbNoise { flip_prob: 0.5, blur_passes: 0 }, 0).is_err());
    }
}
