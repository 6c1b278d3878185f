//! Training objective terms and their analytic gradients.
//!
//! All gradients are taken with respect to the prediction inputs and have
//! the same shape as those inputs. Regression terms read only the object
//! center cells and average over the object count; with no objects they are
//! zero.

mod descent;
mod gradcheck;

use std::f64::consts::{FRAC_PI_2, PI};
use std::fmt;
use std::str::FromStr;

use ndarray::Array3;
use thiserror::Error;

use crate::codec::{Cell, DenseMaps, EncodedTargets};
use crate::geometry::wrap_angle_delta_checked;

pub use descent::{fit_angle, TrajectoryPoint};
pub use gradcheck::{
    finite_difference_check, run_gradcheck, GradCheckLoss, GradCheckRow, DEFAULT_EPSILON, DEFAULT_TOLERANCE,
};

/// Predictions are clamped into `[PROB_CLAMP, 1 - PROB_CLAMP]` before logs.
pub const PROB_CLAMP: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LossError {
    #[error("shape mismatch for {what}: prediction {pred:?} vs target {target:?}")]
    ShapeMismatch {
        what: &'static str,
        pred: (usize, usize, usize),
        target: (usize, usize, usize),
    },
    #[error("center cell ({x}, {y}) outside {width}x{height} map")]
    CenterOutOfBounds {
        x: usize,
        y: usize,
        width: usize,
        height: usize,
    },
    #[error("{0} channel must have exactly {1} channels")]
    ChannelCount(&'static str, usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda_size: f64,
    pub lambda_off: f64,
    pub lambda_angle: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_size: 0.1,
            lambda_off: 1.0,
            lambda_angle: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FocalParams {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        Self { alpha: 2.0, beta: 4.0 }
    }
}

/// Angle regression variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum AngleLossKind {
    /// `|θ̂ - θ|` with no wrapping.
    PlainL1,
    /// `|d|` with `d` the wrapped difference.
    PeriodicL1,
    /// Smooth L1 of the wrapped difference.
    #[default]
    SmoothPeriodicL1,
}

impl AngleLossKind {
    pub const ALL: [AngleLossKind; 3] = [Self::PlainL1, Self::PeriodicL1, Self::SmoothPeriodicL1];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::PlainL1 => "l1",
            Self::PeriodicL1 => "periodic-l1",
            Self::SmoothPeriodicL1 => "smooth-periodic-l1",
        }
    }
}

impl fmt::Display for AngleLossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AngleLossKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown angle loss `{s}`"))
    }
}

/// How the raw orientation output `t` maps to an angle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum RangeMode {
    /// `(π/2)·tanh(t)`
    HalfPi,
    /// `π·tanh(t)`
    #[default]
    Pi,
    /// `t`
    Unbounded,
}

impl RangeMode {
    pub const ALL: [RangeMode; 3] = [Self::HalfPi, Self::Pi, Self::Unbounded];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::HalfPi => "halfpi",
            Self::Pi => "pi",
            Self::Unbounded => "unbounded",
        }
    }

    fn scale(self) -> Option<f64> {
        match self {
            Self::HalfPi => Some(FRAC_PI_2),
            Self::Pi => Some(PI),
            Self::Unbounded => None,
        }
    }

    pub fn decode(self, t: f64) -> f64 {
        match self.scale() {
            Some(s) => s * t.tanh(),
            None => t,
        }
    }

    /// `dθ̂/dt`
    pub fn derivative(self, t: f64) -> f64 {
        match self.scale() {
            Some(s) => {
                let th = t.tanh();
                s * (1.0 - th * th)
            }
            None => 1.0,
        }
    }

    /// Raw value producing `theta`, if `theta` is inside the open range.
    pub fn raw_for(self, theta: f64) -> Option<f64> {
        match self.scale() {
            Some(s) if theta.abs() < s => Some((theta / s).atanh()),
            Some(_) => None,
            None => Some(theta),
        }
    }
}

impl fmt::Display for RangeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RangeMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown range mode `{s}`"))
    }
}

/// Gradients of the total objective with respect to each prediction map.
/// `orientation` is with respect to the raw head output.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGradients {
    pub heatmap: Array3<f64>,
    pub offset: Array3<f64>,
    pub size: Array3<f64>,
    pub orientation: Array3<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub l_k: f64,
    pub l_off: f64,
    pub l_size: f64,
    pub l_angle: f64,
    pub total: f64,
    pub grads: LossGradients,
}

fn check_same(what: &'static str, pred: &Array3<f64>, target: &Array3<f64>) -> Result<(), LossError> {
    if pred.dim() != target.dim() {
        return Err(LossError::ShapeMismatch {
            what,
            pred: pred.dim(),
            target: target.dim(),
        });
    }
    Ok(())
}

fn check_centers(map: &Array3<f64>, centers: &[Cell]) -> Result<(), LossError> {
    let (height, width, _) = map.dim();
    match centers.iter().find(|c| c.x >= width || c.y >= height) {
        Some(c) => Err(LossError::CenterOutOfBounds {
            x: c.x,
            y: c.y,
            width,
            height,
        }),
        None => Ok(()),
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Penalty-reduced pixel-wise focal loss over a heatmap.
///
/// Cells with target exactly 1 are positives; every other cell is weighted by
/// `(1 - K)^β`. Normalized by `max(n_objects, 1)`.
pub fn focal_loss(
    pred: &Array3<f64>,
    target: &Array3<f64>,
    params: FocalParams,
    n_objects: usize,
) -> Result<(f64, Array3<f64>), LossError> {
    check_same("heatmap", pred, target)?;
    let norm = n_objects.max(1) as f64;
    let FocalParams { alpha, beta } = params;
    let (lo, hi) = (PROB_CLAMP, 1.0 - PROB_CLAMP);
    let mut grad = Array3::zeros(pred.dim());
    let mut sum = 0.0;
    for ((g, &raw), &k) in grad.iter_mut().zip(pred.iter()).zip(target.iter()) {
        let p = raw.clamp(lo, hi);
        let pass = if raw < lo || raw > hi { 0.0 } else { 1.0 };
        let (term, dterm) = if k == 1.0 {
            let q = 1.0 - p;
            let term = q.powf(alpha) * p.ln();
            let dterm = -alpha * q.powf(alpha - 1.0) * p.ln() + q.powf(alpha) / p;
            (term, dterm)
        } else {
            let wneg = (1.0 - k).powf(beta);
            let l1p = (1.0 - p).ln();
            let term = wneg * p.powf(alpha) * l1p;
            let dterm = wneg * (alpha * p.powf(alpha - 1.0) * l1p - p.powf(alpha) / (1.0 - p));
            (term, dterm)
        };
        sum += term;
        *g = -dterm * pass / norm;
    }
    Ok((-sum / norm, grad))
}

/// Mean over centers of the L1 distance summed across channels.
fn l1_at_centers(
    what: &'static str,
    pred: &Array3<f64>,
    target: &Array3<f64>,
    centers: &[Cell],
) -> Result<(f64, Array3<f64>), LossError> {
    check_same(what, pred, target)?;
    check_centers(pred, centers)?;
    let mut grad = Array3::zeros(pred.dim());
    if centers.is_empty() {
        return Ok((0.0, grad));
    }
    let n = centers.len() as f64;
    let channels = pred.dim().2;
    let mut sum = 0.0;
    for c in centers {
        for ch in 0..channels {
            let r = pred[[c.y, c.x, ch]] - target[[c.y, c.x, ch]];
            sum += r.abs();
            grad[[c.y, c.x, ch]] += sign(r) / n;
        }
    }
    Ok((sum / n, grad))
}

pub fn offset_loss(
    pred: &Array3<f64>,
    target: &Array3<f64>,
    centers: &[Cell],
) -> Result<(f64, Array3<f64>), LossError> {
    if pred.dim().2 != 2 {
        return Err(LossError::ChannelCount("offset", 2));
    }
    l1_at_centers("offset", pred, target, centers)
}

pub fn size_loss(pred: &Array3<f64>, target: &Array3<f64>, centers: &[Cell]) -> Result<(f64, Array3<f64>), LossError> {
    if pred.dim().2 != 2 {
        return Err(LossError::ChannelCount("size", 2));
    }
    l1_at_centers("size", pred, target, centers)
}

/// Loss and `d loss / d θ̂` for a single predicted/target angle pair.
pub fn angle_term(pred: f64, target: f64, kind: AngleLossKind) -> (f64, f64) {
    match kind {
        AngleLossKind::PlainL1 => {
            let d = pred - target;
            (d.abs(), sign(d))
        }
        AngleLossKind::PeriodicL1 | AngleLossKind::SmoothPeriodicL1 => {
            let w = wrap_angle_delta_checked(pred - target);
            let d = w.value;
            let (loss, slope) = match kind {
                AngleLossKind::PeriodicL1 => (d.abs(), sign(d)),
                _ if d.abs() >= 1.0 => (d.abs() - 0.5, sign(d)),
                _ => (0.5 * d * d, d),
            };
            (loss, if w.singular { 0.0 } else { slope })
        }
    }
}

/// Angle loss at the center cells. `pred_angles` holds decoded radians.
pub fn angle_loss(
    pred_angles: &Array3<f64>,
    target_angles: &Array3<f64>,
    centers: &[Cell],
    kind: AngleLossKind,
) -> Result<(f64, Array3<f64>), LossError> {
    check_same("orientation", pred_angles, target_angles)?;
    if pred_angles.dim().2 != 1 {
        return Err(LossError::ChannelCount("orientation", 1));
    }
    check_centers(pred_angles, centers)?;
    let mut grad = Array3::zeros(pred_angles.dim());
    if centers.is_empty() {
        return Ok((0.0, grad));
    }
    let n = centers.len() as f64;
    let mut sum = 0.0;
    for c in centers {
        let idx = [c.y, c.x, 0];
        let (l, g) = angle_term(pred_angles[idx], target_angles[idx], kind);
        sum += l;
        grad[idx] += g / n;
    }
    Ok((sum / n, grad))
}

/// Weighted sum of the four terms.
///
/// The prediction's orientation channel holds raw outputs decoded with
/// `π·tanh(t)`; its gradient is chained through that decode.
pub fn total_loss(
    pred: &DenseMaps,
    targets: &EncodedTargets,
    weights: LossWeights,
    focal: FocalParams,
    kind: AngleLossKind,
) -> Result<LossBreakdown, LossError> {
    let t = &targets.maps;
    let centers = &targets.centers;
    let (l_k, g_k) = focal_loss(&pred.heatmap, &t.heatmap, focal, targets.object_count())?;
    let (l_off, g_off) = offset_loss(&pred.offset, &t.offset, centers)?;
    let (l_size, g_size) = size_loss(&pred.size, &t.size, centers)?;
    let mode = RangeMode::Pi;
    let decoded = pred.orientation.mapv(|v| mode.decode(v));
    let (l_angle, g_theta) = angle_loss(&decoded, &t.orientation, centers, kind)?;

    let total = l_k + weights.lambda_size * l_size + weights.lambda_off * l_off + weights.lambda_angle * l_angle;

    let mut orientation = g_theta;
    orientation.zip_mut_with(&pred.orientation, |g, &raw| {
        *g *= weights.lambda_angle * mode.derivative(raw)
    });
    Ok(LossBreakdown {
        l_k,
        l_off,
        l_size,
        l_angle,
        total,
        grads: LossGradients {
            heatmap: g_k,
            offset: g_off * weights.lambda_off,
            size: g_size * weights.lambda_size,
            orientation,
        },
    })
}
