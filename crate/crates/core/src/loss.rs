//! The balanced mask loss: Dice plus area-ratio-weighted binary
//! cross-entropy, with analytic gradients and a finite-difference verifier.
//!
//! For a predicted mask `p` and binary target `y` over an HxW grid:
//!
//! ```text
//! dice(p, y)  = 1 - (2*sum(p*y) + eps) / (sum(p^2) + sum(y^2) + eps)
//! wbce(p, y)  = -sum_i w_i * [y_i*ln(p_i) + (1-y_i)*ln(1-p_i)]
//! w_i         = 1                                  where y_i = 0
//!               max(1, 0.5 * s_bbox / s_mask)      where y_i = 1
//! total       = dice + lambda * wbce
//! ```
//!
//! The printed cross-entropy sum is a log-likelihood (non-positive); it is
//! implemented with the leading minus so both terms are penalties. Losses
//! are sums over the grid, not means; `LossConfig::normalize` divides the
//! cross-entropy term by H*W for experiments. The foreground weight uses the
//! ground-truth box and mask areas of the instance the pixel belongs to.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{BinaryMask, Instance};

/// Dense grid of probabilities in [0, 1], row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMask {
    height: usize,
    width: usize,
    probs: Vec<f64>,
}

impl ProbMask {
    pub fn new(height: usize, width: usize, probs: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::arg("probability grid must be at least 1x1"));
        }
        if probs.len() != height * width {
            return Err(Error::arg(format!(
                "probability grid needs {} entries, got {}",
                height * width,
                probs.len()
            )));
        }
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::arg("probabilities must lie in [0, 1]"));
        }
        Ok(ProbMask {
            height,
            width,
            probs,
        })
    }

    pub fn constant(height: usize, width: usize, value: f64) -> Result<Self> {
        ProbMask::new(height, width, vec![value; height * width])
    }

    /// Binary mask viewed as hard 0/1 probabilities.
    pub fn from_mask(mask: &BinaryMask) -> Self {
        ProbMask {
            height: mask.height(),
            width: mask.width(),
            probs: mask.bits().iter().map(|&b| b as f64).collect(),
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }
}

/// Per-pixel loss weights: 1 on background, a single shared weight >= 1 on
/// foreground.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightGrid {
    height: usize,
    width: usize,
    weights: Vec<f64>,
    foreground_weight: f64,
}

impl WeightGrid {
    /// All-ones grid; turns the weighted cross-entropy into plain BCE.
    pub fn uniform(height: usize, width: usize) -> Self {
        WeightGrid {
            height,
            width,
            weights: vec![1.0; height * width],
            foreground_weight: 1.0,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn foreground_weight(&self) -> f64 {
        self.foreground_weight
    }

    /// Sum of weights over foreground pixels; equals
    /// `max(s_mask, 0.5 * s_bbox)` up to summation rounding.
    pub fn foreground_sum(&self, target: &BinaryMask) -> f64 {
        self.weights
            .iter()
            .zip(target.bits())
            .filter(|(_, &y)| y == 1)
            .map(|(&w, _)| w)
            .sum()
    }
}

/// Eq.-style per-pixel weights from the instance's box and mask areas:
/// background pixels get 1, foreground pixels get `max(1, 0.5*s_bbox/s_mask)`.
pub fn pixel_weights(target: &BinaryMask, s_bbox: f64, s_mask: f64) -> Result<WeightGrid> {
    if !(s_bbox > 0.0) {
        return Err(Error::arg(format!("box area must be positive, got {s_bbox}")));
    }
    if !(s_mask > 0.0) {
        return Err(Error::EmptyTarget);
    }
    let fg = (0.5 * s_bbox / s_mask).max(1.0);
    let weights = target
        .bits()
        .iter()
        .map(|&y| if y == 1 { fg } else { 1.0 })
        .collect();
    Ok(WeightGrid {
        height: target.height(),
        width: target.width(),
        weights,
        foreground_weight: fg,
    })
}

/// Constants for the combined loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// Weight of the cross-entropy term.
    pub lambda: f64,
    /// Smoothing term of the dice loss.
    pub epsilon: f64,
    /// Probabilities are clipped to [clamp, 1 - clamp] before logs.
    pub clamp: f64,
    /// Divide the cross-entropy sum by H*W. Off by default: the losses are
    /// defined as sums over the grid.
    pub normalize: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda: 1.0,
            epsilon: 1.0,
            clamp: 1e-7,
            normalize: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) {
            return Err(Error::arg("epsilon must be positive"));
        }
        if !(self.clamp > 0.0 && self.clamp < 0.5) {
            return Err(Error::arg("clamp must be in (0, 0.5)"));
        }
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return Err(Error::arg("lambda must be finite and non-negative"));
        }
        Ok(())
    }
}

/// The combined loss, split into its parts. `total = dice + lambda * wbce`
/// holds bit-for-bit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub dice: f64,
    pub wbce: f64,
    pub total: f64,
    pub lambda: f64,
    pub epsilon: f64,
}

fn check_dims(
    (ah, aw): (usize, usize),
    (bh, bw): (usize, usize),
) -> Result<()> {
    if (ah, aw) != (bh, bw) {
        return Err(Error::DimensionMismatch(ah, aw, bh, bw));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// raw kernels over slices; the public functions validate and delegate here
// so the finite-difference driver can perturb entries freely
// ---------------------------------------------------------------------------

fn dice_parts(probs: &[f64], target: &[u8], eps: f64) -> (f64, f64) {
    let mut dot = 0.0;
    let mut p_sq = 0.0;
    let mut y_sq = 0.0;
    for (&p, &y) in probs.iter().zip(target) {
        dot += p * y as f64;
        p_sq += p * p;
        y_sq += (y as f64) * (y as f64);
    }
    (2.0 * dot + eps, p_sq + y_sq + eps)
}

fn dice_value_raw(probs: &[f64], target: &[u8], eps: f64) -> f64 {
    let (n, d) = dice_parts(probs, target, eps);
    1.0 - n / d
}

fn dice_grad_raw(probs: &[f64], target: &[u8], eps: f64) -> Vec<f64> {
    let (n, d) = dice_parts(probs, target, eps);
    let d_sq = d * d;
    probs
        .iter()
        .zip(target)
        .map(|(&p, &y)| -(2.0 * y as f64 * d - n * 2.0 * p) / d_sq)
        .collect()
}

fn clip(p: f64, clamp: f64) -> f64 {
    p.max(clamp).min(1.0 - clamp)
}

fn wbce_value_raw(probs: &[f64], target: &[u8], weights: &[f64], clamp: f64) -> f64 {
    let mut sum = 0.0;
    for ((&p, &y), &w) in probs.iter().zip(target).zip(weights) {
        let p = clip(p, clamp);
        let term = if y == 1 { p.ln() } else { (1.0 - p).ln() };
        sum += w * term;
    }
    -sum
}

fn wbce_grad_raw(probs: &[f64], target: &[u8], weights: &[f64], clamp: f64) -> Vec<f64> {
    probs
        .iter()
        .zip(target)
        .zip(weights)
        .map(|((&p, &y), &w)| {
            if p < clamp || p > 1.0 - clamp {
                0.0 // clipping zeroes the derivative
            } else {
                w * (p - y as f64) / (p * (1.0 - p))
            }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// public operations
// ---------------------------------------------------------------------------

/// Smoothed dice loss in [0, 1]; 0 for a perfect binary prediction.
pub fn dice_loss(p: &ProbMask, y: &BinaryMask, eps: f64) -> Result<f64> {
    if !(eps > 0.0) {
        return Err(Error::arg("epsilon must be positive"));
    }
    check_dims((p.height, p.width), (y.height(), y.width()))?;
    Ok(dice_value_raw(&p.probs, y.bits(), eps))
}

/// Analytic gradient of [`dice_loss`] with respect to the probabilities,
/// row-major.
pub fn dice_grad(p: &ProbMask, y: &BinaryMask, eps: f64) -> Result<Vec<f64>> {
    if !(eps > 0.0) {
        return Err(Error::arg("epsilon must be positive"));
    }
    check_dims((p.height, p.width), (y.height(), y.width()))?;
    Ok(dice_grad_raw(&p.probs, y.bits(), eps))
}

/// Weighted binary cross-entropy (a sum over the grid, non-negative).
pub fn weighted_bce(p: &ProbMask, y: &BinaryMask, w: &WeightGrid, clamp: f64) -> Result<f64> {
    if !(clamp > 0.0 && clamp < 0.5) {
        return Err(Error::arg("clamp must be in (0, 0.5)"));
    }
    check_dims((p.height, p.width), (y.height(), y.width()))?;
    check_dims((p.height, p.width), (w.height, w.width))?;
    Ok(wbce_value_raw(&p.probs, y.bits(), &w.weights, clamp))
}

/// Analytic gradient of [`weighted_bce`]; zero wherever clipping is active.
pub fn weighted_bce_grad(
    p: &ProbMask,
    y: &BinaryMask,
    w: &WeightGrid,
    clamp: f64,
) -> Result<Vec<f64>> {
    if !(clamp > 0.0 && clamp < 0.5) {
        return Err(Error::arg("clamp must be in (0, 0.5)"));
    }
    check_dims((p.height, p.width), (y.height(), y.width()))?;
    check_dims((p.height, p.width), (w.height, w.width))?;
    Ok(wbce_grad_raw(&p.probs, y.bits(), &w.weights, clamp))
}

/// Dice plus lambda-weighted cross-entropy against the instance's mask, with
/// foreground weights from the instance's ground-truth areas.
pub fn balanced_mask_loss(p: &ProbMask, inst: &Instance, cfg: &LossConfig) -> Result<LossBreakdown> {
    cfg.validate()?;
    let mask = inst.mask();
    check_dims((p.height, p.width), (mask.height(), mask.width()))?;
    let weights = pixel_weights(mask, inst.bbox().area(), mask.area() as f64)?;
    let dice = dice_value_raw(&p.probs, mask.bits(), cfg.epsilon);
    let mut wbce = wbce_value_raw(&p.probs, mask.bits(), &weights.weights, cfg.clamp);
    if cfg.normalize {
        wbce /= (p.height * p.width) as f64;
    }
    Ok(LossBreakdown {
        dice,
        wbce,
        total: dice + cfg.lambda * wbce,
        lambda: cfg.lambda,
        epsilon: cfg.epsilon,
    })
}

/// Map a gradient from probability space to logit space (`p = sigmoid(z)`),
/// i.e. multiply each entry by `p * (1 - p)`.
pub fn logit_space_grad(probs: &[f64], prob_grad: &[f64]) -> Vec<f64> {
    probs
        .iter()
        .zip(prob_grad)
        .map(|(&p, &g)| g * p * (1.0 - p))
        .collect()
}

// ---------------------------------------------------------------------------
// differentiable-loss handles and the finite-difference verifier
// ---------------------------------------------------------------------------

/// A loss of the predicted probabilities with a closed-form gradient, bound
/// to a fixed target.
pub trait DifferentiableLoss {
    fn name(&self) -> &'static str;
    fn dims(&self) -> (usize, usize);
    fn value(&self, probs: &[f64]) -> f64;
    fn gradient(&self, probs: &[f64]) -> Vec<f64>;
}

pub struct DiceObjective<'a> {
    target: &'a BinaryMask,
    epsilon: f64,
}

impl<'a> DiceObjective<'a> {
    pub fn new(target: &'a BinaryMask, epsilon: f64) -> Self {
        DiceObjective { target, epsilon }
    }
}

impl DifferentiableLoss for DiceObjective<'_> {
    fn name(&self) -> &'static str {
        "dice"
    }

    fn dims(&self) -> (usize, usize) {
        (self.target.height(), self.target.width())
    }

    fn value(&self, probs: &[f64]) -> f64 {
        dice_value_raw(probs, self.target.bits(), self.epsilon)
    }

    fn gradient(&self, probs: &[f64]) -> Vec<f64> {
        dice_grad_raw(probs, self.target.bits(), self.epsilon)
    }
}

pub struct WeightedBceObjective<'a> {
    target: &'a BinaryMask,
    weights: WeightGrid,
    clamp: f64,
}

impl<'a> WeightedBceObjective<'a> {
    /// Weights per the area-ratio rule of the instance's geometry.
    pub fn for_instance(inst: &'a Instance, clamp: f64) -> Result<Self> {
        let weights = pixel_weights(inst.mask(), inst.bbox().area(), inst.mask().area() as f64)?;
        Ok(WeightedBceObjective {
            target: inst.mask(),
            weights,
            clamp,
        })
    }

    pub fn new(target: &'a BinaryMask, weights: WeightGrid, clamp: f64) -> Self {
        WeightedBceObjective {
            target,
            weights,
            clamp,
        }
    }
}

impl DifferentiableLoss for WeightedBceObjective<'_> {
    fn name(&self) -> &'static str {
        "weighted_bce"
    }

    fn dims(&self) -> (usize, usize) {
        (self.target.height(), self.target.width())
    }

    fn value(&self, probs: &[f64]) -> f64 {
        wbce_value_raw(probs, self.target.bits(), self.weights.weights(), self.clamp)
    }

    fn gradient(&self, probs: &[f64]) -> Vec<f64> {
        wbce_grad_raw(probs, self.target.bits(), self.weights.weights(), self.clamp)
    }
}

pub struct BalancedObjective<'a> {
    inst: &'a Instance,
    weights: WeightGrid,
    cfg: LossConfig,
}

impl<'a> BalancedObjective<'a> {
    pub fn new(inst: &'a Instance, cfg: LossConfig) -> Result<Self> {
        cfg.validate()?;
        let weights = pixel_weights(inst.mask(), inst.bbox().area(), inst.mask().area() as f64)?;
        Ok(BalancedObjective { inst, weights, cfg })
    }
}

impl DifferentiableLoss for BalancedObjective<'_> {
    fn name(&self) -> &'static str {
        "balanced"
    }

    fn dims(&self) -> (usize, usize) {
        (self.inst.mask().height(), self.inst.mask().width())
    }

    fn value(&self, probs: &[f64]) -> f64 {
        let mask = self.inst.mask();
        let dice = dice_value_raw(probs, mask.bits(), self.cfg.epsilon);
        let mut wbce = wbce_value_raw(probs, mask.bits(), self.weights.weights(), self.cfg.clamp);
        if self.cfg.normalize {
            wbce /= probs.len() as f64;
        }
        dice + self.cfg.lambda * wbce
    }

    fn gradient(&self, probs: &[f64]) -> Vec<f64> {
        let mask = self.inst.mask();
        let dice = dice_grad_raw(probs, mask.bits(), self.cfg.epsilon);
        let wbce = wbce_grad_raw(probs, mask.bits(), self.weights.weights(), self.cfg.clamp);
        let scale = if self.cfg.normalize {
            self.cfg.lambda / probs.len() as f64
        } else {
            self.cfg.lambda
        };
        dice.iter().zip(&wbce).map(|(&d, &b)| d + scale * b).collect()
    }
}

/// Compare the analytic gradient against central finite differences.
///
/// Returns the maximum over pixels of
/// `|analytic - central| / max(1e-12, |central|)`.
pub fn grad_check(loss: &dyn DifferentiableLoss, p: &ProbMask, step: f64) -> Result<f64> {
    if !(step > 0.0 && step <= 1e-3) {
        return Err(Error::arg("step must be in (0, 1e-3]"));
    }
    check_dims((p.height, p.width), loss.dims())?;
    let analytic = loss.gradient(&p.probs);
    let mut work = p.probs.clone();
    let mut max_rel = 0.0f64;
    for i in 0..work.len() {
        let orig = work[i];
        work[i] = orig + step;
        let plus = loss.value(&work);
        work[i] = orig - step;
        let minus = loss.value(&work);
        work[i] = orig;
        let central = (plus - minus) / (2.0 * step);
        let rel = (analytic[i] - central).abs() / central.abs().max(1e-12);
        max_rel = max_rel.max(rel);
    }
    Ok(max_rel)
}

/// Outcome of one gradient-verification round.
#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    pub loss: &'static str,
    pub trials: u32,
    pub max_rel_err: f64,
}

/// Deterministic random fixture for gradient checks: a small thin-ish
/// instance with a tight box and probabilities kept away from the clip
/// boundaries so the finite differences stay well conditioned.
pub fn random_loss_fixture(seed: u64, trial: u64) -> (ProbMask, Instance) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial);
    let height = rng.random_range(8..=24usize);
    let width = rng.random_range(8..=24usize);
    let density = rng.random_range(0.05..0.35f64);
    let mut bits = vec![0u8; height * width];
    for b in bits.iter_mut() {
        *b = (rng.random::<f64>() < density) as u8;
    }
    if bits.iter().all(|&b| b == 0) {
        let i = rng.random_range(0..bits.len());
        bits[i] = 1;
    }
    let mask = BinaryMask::from_bits(height, width, bits).unwrap();
    let inst = Instance::with_tight_bbox(0, mask).unwrap();
    let probs = (0..height * width)
        .map(|_| rng.random_range(0.05..0.95f64))
        .collect();
    let p = ProbMask::new(height, width, probs).unwrap();
    (p, inst)
}

/// Run [`grad_check`] for the dice, weighted-BCE and balanced losses over
/// `trials` random fixtures; reports the worst relative error per loss.
pub fn grad_check_suite(
    trials: u32,
    step: f64,
    seed: u64,
    cfg: &LossConfig,
) -> Result<Vec<GradCheckReport>> {
    cfg.validate()?;
    let per_trial: Vec<[f64; 3]> = (0..trials as u64)
        .into_par_iter()
        .map(|trial| -> Result<[f64; 3]> {
            let (p, inst) = random_loss_fixture(seed, trial);
            let dice = DiceObjective::new(inst.mask(), cfg.epsilon);
            let wbce = WeightedBceObjective::for_instance(&inst, cfg.clamp)?;
            let balanced = BalancedObjective::new(&inst, *cfg)?;
            Ok([
                grad_check(&dice, &p, step)?,
                grad_check(&wbce, &p, step)?,
                grad_check(&balanced, &p, step)?,
            ])
        })
        .collect::<Result<_>>()?;
    let mut maxima = [0.0f64; 3];
    for errs in &per_trial {
        for (m, &e) in maxima.iter_mut().zip(errs) {
            *m = m.max(e);
        }
    }
    Ok(vec![
        GradCheckReport { loss: "dice", trials, max_rel_err: maxima[0] },
        GradCheckReport { loss: "weighted_bce", trials, max_rel_err: maxima[1] },
        GradCheckReport { loss: "balanced", trials, max_rel_err: maxima[2] },
    ])
}
