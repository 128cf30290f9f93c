//! Training objectives: de-noising MSE, monotonic matching against target
//! affinity patterns, BCE/focal detection, and their weighted sum.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Relationship between an enrolled keyword and the audio it is paired with.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum MatchType {
    FullMatch,
    NonMatch,
    /// The first `boundary_k` text phonemes agree with the audio.
    PartialFront {
        boundary_k: usize,
    },
    PartialBack,
}

impl MatchType {
    pub fn label(self) -> u8 {
        u8::from(self == MatchType::FullMatch)
    }

    pub fn name(self) -> &'static str {
        match self {
            MatchType::FullMatch => "full",
            MatchType::NonMatch => "non",
            MatchType::PartialFront { .. } => "partial_front",
            MatchType::PartialBack => "partial_back",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// Weight of the de-noising term.
    pub lambda_dn: f64,
    /// Weight of the monotonic matching term.
    pub lambda_mm: f64,
    pub focal_gamma: f64,
    pub focal_alpha: f64,
    /// Fraction of training after which BCE is replaced by focal loss.
    pub switch_fraction: f64,
    /// Width of the Gaussian diagonal target.
    pub diagonal_width: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_dn: 0.5,
            lambda_mm: 0.3,
            focal_gamma: 2.0,
            focal_alpha: 0.25,
            switch_fraction: 0.5,
            diagonal_width: 0.2,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let finite = [
            self.lambda_dn,
            self.lambda_mm,
            self.focal_gamma,
            self.focal_alpha,
            self.switch_fraction,
            self.diagonal_width,
        ]
        .iter()
        .all(|v| v.is_finite());
        if !finite {
            return Err(Error::param("loss weights must be finite"));
        }
        if self.lambda_dn < 0.0 || self.lambda_mm < 0.0 {
            return Err(Error::param("loss lambdas must be nonnegative"));
        }
        if !(0.0..=1.0).contains(&self.switch_fraction) {
            return Err(Error::param("switch_fraction must lie in [0, 1]"));
        }
        if self.focal_gamma < 0.0 || self.focal_alpha <= 0.0 {
            return Err(Error::param("focal gamma must be >= 0 and alpha > 0"));
        }
        if self.diagonal_width <= 0.0 {
            return Err(Error::param("diagonal width must be positive"));
        }
        Ok(())
    }

    /// Detection objective in force at `step_fraction` of training.
    pub fn phase_at(&self, step_fraction: f64) -> DetectionPhase {
        if step_fraction < self.switch_fraction {
            DetectionPhase::Bce
        } else {
            DetectionPhase::Focal
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DetectionPhase {
    Bce,
    Focal,
}

impl DetectionPhase {
    pub fn name(self) -> &'static str {
        match self {
            DetectionPhase::Bce => "bce",
            DetectionPhase::Focal => "focal",
        }
    }
}

fn check_dims(t_t: usize, t_a: usize) -> Result<()> {
    if t_t == 0 || t_a == 0 {
        return Err(Error::param(format!("target dims must be positive, got {t_t}x{t_a}")));
    }
    Ok(())
}

fn normalize_rows(data: &mut [f64], cols: usize) {
    for row in data.chunks_exact_mut(cols) {
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= s);
    }
}

/// Gaussian diagonal target: entry `(i, j)` ∝
/// `exp(−(j/T_a − i/T_t)² / 2g²)` with 1-based positions, rows normalised.
pub fn target_full(t_t: usize, t_a: usize, g: f64) -> Result<Tensor> {
    check_dims(t_t, t_a)?;
    if g.is_nan() || g <= 0.0 {
        return Err(Error::param("diagonal width must be positive"));
    }
    let mut data = Vec::with_capacity(t_t * t_a);
    for i in 1..=t_t {
        for j in 1..=t_a {
            let d = j as f64 / t_a as f64 - i as f64 / t_t as f64;
            data.push((-d * d / (2.0 * g * g)).exp());
        }
    }
    normalize_rows(&mut data, t_a);
    Tensor::new(&[t_t, t_a], data)
}

/// Scattered target: `|X|`, `X ~ N(0, 1)` per entry, rows normalised.
pub fn target_non(t_t: usize, t_a: usize, seed: u64) -> Result<Tensor> {
    check_dims(t_t, t_a)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data: Vec<f64> = (0..t_t * t_a)
        .map(|_| {
            let x: f64 = StandardNormal.sample(&mut rng);
            x.abs().max(f64::MIN_POSITIVE)
        })
        .collect();
    normalize_rows(&mut data, t_a);
    Tensor::new(&[t_t, t_a], data)
}

/// Rows `1..=boundary_k` from the diagonal target, the rest scattered.
pub fn target_partial(t_t: usize, t_a: usize, boundary_k: usize, g: f64, seed: u64) -> Result<Tensor> {
    check_dims(t_t, t_a)?;
    if boundary_k > t_t {
        return Err(Error::param(format!(
            "boundary {boundary_k} exceeds {t_t} text positions"
        )));
    }
    let full = target_full(t_t, t_a, g)?;
    let non = target_non(t_t, t_a, seed)?;
    let split = boundary_k * t_a;
    let mut data = full.into_data();
    data[split..].copy_from_slice(&non.data()[split..]);
    Tensor::new(&[t_t, t_a], data)
}

/// Target affinity pattern for a match type. Back-only matches are treated
/// as non-matching.
pub fn target_for(mt: MatchType, t_t: usize, t_a: usize, g: f64, seed: u64) -> Result<Tensor> {
    match mt {
        MatchType::FullMatch => target_full(t_t, t_a, g),
        MatchType::NonMatch | MatchType::PartialBack => target_non(t_t, t_a, seed),
        MatchType::PartialFront { boundary_k } => target_partial(t_t, t_a, boundary_k, g, seed),
    }
}

fn mean_square(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    if a.is_empty() {
        return Err(Error::EmptyInput("mean square of empty tensors"));
    }
    let s: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(s / a.numel() as f64)
}

/// Mean squared distance between clean and noisy audio embeddings.
pub fn denoising_loss(e_clean: &Tensor, e_noisy: &Tensor) -> Result<f64> {
    mean_square(e_clean, e_noisy)
}

/// Mean squared distance between `A` and the target for `mt`.
pub fn mml_loss(a: &Tensor, mt: MatchType, g: f64, seed: u64) -> Result<f64> {
    let (t_t, t_a) = a.dims2()?;
    mean_square(a, &target_for(mt, t_t, t_a, g, seed)?)
}

pub fn bce(p: f64, y: u8) -> Result<f64> {
    focal(p, y, 0.0, 1.0)
}

/// `−α (1 − p_t)^γ ln p_t` with `p_t = p` for positives, `1 − p` otherwise.
pub fn focal(p: f64, y: u8, gamma: f64, alpha: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::param(format!("probability must lie in (0, 1), got {p}")));
    }
    if y > 1 {
        return Err(Error::param(format!("label must be 0 or 1, got {y}")));
    }
    let pt = if y == 1 { p } else { 1.0 - p };
    Ok(-alpha * (1.0 - pt).powf(gamma) * pt.ln())
}

/// BCE before `switch_fraction` of training, focal loss afterwards.
pub fn detection_loss(p: f64, y: u8, step_fraction: f64, weights: &LossWeights) -> Result<f64> {
    match weights.phase_at(step_fraction) {
        DetectionPhase::Bce => bce(p, y),
        DetectionPhase::Focal => focal(p, y, weights.focal_gamma, weights.focal_alpha),
    }
}

/// `λ1·L_DN + λ2·L_MM + L_D`.
pub fn total_loss(l_dn: f64, l_mm: f64, l_d: f64, weights: &LossWeights) -> Result<f64> {
    if [l_dn, l_mm, l_d].iter().any(|v| v.is_nan() || *v < 0.0) {
        return Err(Error::param("loss components must be nonnegative"));
    }
    Ok(weights.lambda_dn * l_dn + weights.lambda_mm * l_mm + l_d)
}

/// Smallest probability fed to the log on the tape.
pub const PROB_FLOOR: f64 = 1e-12;

/// Tape form of [`detection_loss`]; `prob` is a one-element tensor. Returns a
/// scalar.
pub fn detection_loss_on(
    tape: &mut Tape,
    prob: Var,
    y: u8,
    phase: DetectionPhase,
    weights: &LossWeights,
) -> Result<Var> {
    if tape.value(prob).numel() != 1 {
        return Err(Error::shape("detection loss expects a single probability"));
    }
    let (gamma, alpha) = match phase {
        DetectionPhase::Bce => (0.0, 1.0),
        DetectionPhase::Focal => (weights.focal_gamma, weights.focal_alpha),
    };
    let p = tape.sum(prob)?;
    let pt = if y == 1 {
        p
    } else {
        let neg = tape.scale(p, -1.0)?;
        tape.add_scalar(neg, 1.0)?
    };
    let pt = tape.clamp(pt, PROB_FLOOR, 1.0)?;
    let log_pt = tape.ln(pt)?;
    let weighted = if gamma == 0.0 {
        log_pt
    } else {
        let neg = tape.scale(pt, -1.0)?;
        let miss = tape.add_scalar(neg, 1.0)?;
        let modulator = tape.pow(miss, gamma)?;
        tape.mul(modulator, log_pt)?
    };
    tape.scale(weighted, -alpha)
}

/// Loss variables for one training pair.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub denoising: Var,
    pub matching: Var,
    pub detection: Var,
    pub total: Var,
}

/// Assembles `λ1·L_DN + λ2·L_MM + L_D` on the tape.
pub fn total_loss_on(
    tape: &mut Tape,
    denoising: Var,
    matching: Var,
    detection: Var,
    weights: &LossWeights,
) -> Result<LossTerms> {
    let dn = tape.scale(denoising, weights.lambda_dn)?;
    let mm = tape.scale(matching, weights.lambda_mm)?;
    let partial = tape.add(dn, mm)?;
    let total = tape.add(partial, detection)?;
    Ok(LossTerms {
        denoising,
        matching,
        detection,
        total,
    })
}
