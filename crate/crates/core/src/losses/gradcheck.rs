//! Central finite-difference verification of the analytic gradients.
//!
//! Sample points are drawn away from every non-differentiable locus: L1
//! residuals stay at least `KINK_MARGIN` from zero, wrapped angle residuals
//! stay that far from 0, ±1 and ±π/2, and heatmap predictions stay inside
//! `[0.05, 0.95]`, well clear of the clamp.

use std::f64::consts::{FRAC_PI_2, PI};
use std::fmt;
use std::str::FromStr;

use ndarray::Array3;

use super::{angle_loss, focal_loss, offset_loss, size_loss, total_loss, AngleLossKind, FocalParams, LossWeights};
use crate::codec::{encode_targets, splat_gaussian, Cell, DenseMaps, EncodedTargets};
use crate::geometry::ObbBox;
use crate::rng::SeededRng;

pub const DEFAULT_EPSILON: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;
const KINK_MARGIN: f64 = 1e-2;

/// Max over coordinates of `|analytic - central difference| / max(1, |analytic|)`.
///
/// `loss_fn` returns the value and its analytic gradient at a point.
pub fn finite_difference_check<F>(loss_fn: F, point: &[f64], epsilon: f64) -> f64
where
    F: Fn(&[f64]) -> (f64, Vec<f64>),
{
    let (_, analytic) = loss_fn(point);
    assert_eq!(analytic.len(), point.len(), "gradient length must match point");
    let mut probe = point.to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..point.len() {
        probe[i] = point[i] + epsilon;
        let up = loss_fn(&probe).0;
        probe[i] = point[i] - epsilon;
        let down = loss_fn(&probe).0;
        probe[i] = point[i];
        let numeric = (up - down) / (2.0 * epsilon);
        let err = (analytic[i] - numeric).abs() / analytic[i].abs().max(1.0);
        worst = worst.max(err);
    }
    worst
}

/// Which objective to verify.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradCheckLoss {
    Focal,
    Offset,
    Size,
    /// All three angle variants.
    Angle,
    Total,
}

impl GradCheckLoss {
    pub const ALL: [GradCheckLoss; 5] = [Self::Focal, Self::Offset, Self::Size, Self::Angle, Self::Total];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Focal => "focal",
            Self::Offset => "offset",
            Self::Size => "size",
            Self::Angle => "angle",
            Self::Total => "total",
        }
    }
}

impl fmt::Display for GradCheckLoss {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for GradCheckLoss {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown loss `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckRow {
    pub name: String,
    pub samples: usize,
    pub max_relative_error: f64,
}

impl GradCheckRow {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_relative_error <= tolerance
    }
}

/// Checks `samples` random non-degenerate points per loss (per variant for
/// the angle loss).
pub fn run_gradcheck(loss: GradCheckLoss, samples: usize, epsilon: f64, seed: u64) -> Vec<GradCheckRow> {
    let row = |name: &str, sampler: &dyn Fn(&mut SeededRng) -> f64| {
        let mut rng = SeededRng::new(seed);
        let max_relative_error = (0..samples).map(|_| sampler(&mut rng)).fold(0.0, f64::max);
        GradCheckRow {
            name: name.to_string(),
            samples,
            max_relative_error,
        }
    };
    match loss {
        GradCheckLoss::Focal => vec![row("focal", &|r| check_focal(r, epsilon))],
        GradCheckLoss::Offset => vec![row("offset", &|r| check_l1(r, epsilon, false))],
        GradCheckLoss::Size => vec![row("size", &|r| check_l1(r, epsilon, true))],
        GradCheckLoss::Angle => AngleLossKind::ALL
            .iter()
            .map(|&kind| row(&format!("angle/{kind}"), &|r| check_angle(r, epsilon, kind)))
            .collect(),
        GradCheckLoss::Total => vec![row("total", &|r| check_total(r, epsilon))],
    }
}

fn reshape(dim: (usize, usize, usize), values: &[f64]) -> Array3<f64> {
    Array3::from_shape_vec(dim, values.to_vec()).expect("point length matches map shape")
}

fn distinct_cells(rng: &mut SeededRng, width: usize, height: usize, count: usize) -> Vec<Cell> {
    let mut cells: Vec<Cell> = Vec::with_capacity(count);
    while cells.len() < count {
        let c = Cell::new(
            rng.int_inclusive(0, width as u64 - 1) as usize,
            rng.int_inclusive(0, height as u64 - 1) as usize,
        );
        if !cells.contains(&c) {
            cells.push(c);
        }
    }
    cells
}

/// Residual with magnitude in `[KINK_MARGIN, max]` and random sign.
fn residual(rng: &mut SeededRng, max: f64) -> f64 {
    rng.sign() * rng.range(KINK_MARGIN, max)
}

/// Wrapped-angle residual avoiding 0, ±1 and ±π/2.
fn periodic_residual(rng: &mut SeededRng) -> f64 {
    loop {
        let d = rng.range(-FRAC_PI_2 + KINK_MARGIN, FRAC_PI_2 - KINK_MARGIN);
        if d.abs() > KINK_MARGIN && (d.abs() - 1.0).abs() > KINK_MARGIN {
            return d;
        }
    }
}

fn check_focal(rng: &mut SeededRng, eps: f64) -> f64 {
    let dim = (6, 6, 1);
    let mut target = Array3::zeros(dim);
    let n = rng.int_inclusive(1, 2) as usize;
    for c in distinct_cells(rng, 6, 6, n) {
        let sigma = rng.range(0.5, 1.5);
        splat_gaussian(&mut target, 0, c, sigma).expect("cell inside map");
    }
    let point: Vec<f64> = (0..36).map(|_| rng.range(0.05, 0.95)).collect();
    let params = FocalParams::default();
    finite_difference_check(
        |x| {
            let (l, g) = focal_loss(&reshape(dim, x), &target, params, n).expect("shapes match");
            (l, g.into_raw_vec())
        },
        &point,
        eps,
    )
}

fn check_l1(rng: &mut SeededRng, eps: f64, size: bool) -> f64 {
    let dim = (6, 6, 2);
    let n = rng.int_inclusive(1, 3) as usize;
    let centers = distinct_cells(rng, 6, 6, n);
    let (scale, max_res) = if size { (50.0, 5.0) } else { (1.0, 0.5) };
    let target = Array3::from_shape_fn(dim, |_| rng.range(0.0, scale));
    let mut pred = Array3::from_shape_fn(dim, |_| rng.range(0.0, scale));
    for c in &centers {
        for ch in 0..2 {
            pred[[c.y, c.x, ch]] = target[[c.y, c.x, ch]] + residual(rng, max_res);
        }
    }
    finite_difference_check(
        |x| {
            let p = reshape(dim, x);
            let (l, g) = if size {
                size_loss(&p, &target, &centers)
            } else {
                offset_loss(&p, &target, &centers)
            }
            .expect("shapes match");
            (l, g.into_raw_vec())
        },
        pred.as_slice().expect("standard layout"),
        eps,
    )
}

fn check_angle(rng: &mut SeededRng, eps: f64, kind: AngleLossKind) -> f64 {
    let dim = (4, 4, 1);
    let n = rng.int_inclusive(1, 3) as usize;
    let centers = distinct_cells(rng, 4, 4, n);
    let target = Array3::from_shape_fn(dim, |_| rng.range(-FRAC_PI_2, FRAC_PI_2));
    let mut pred = Array3::from_shape_fn(dim, |_| rng.range(-PI, PI));
    for c in &centers {
        let idx = [c.y, c.x, 0];
        pred[idx] = match kind {
            AngleLossKind::PlainL1 => target[idx] + residual(rng, 3.0),
            _ => target[idx] + periodic_residual(rng) + PI * rng.int_inclusive(0, 2) as f64 - PI,
        };
    }
    finite_difference_check(
        |x| {
            let (l, g) = angle_loss(&reshape(dim, x), &target, &centers, kind).expect("shapes match");
            (l, g.into_raw_vec())
        },
        pred.as_slice().expect("standard layout"),
        eps,
    )
}

fn random_targets(rng: &mut SeededRng) -> EncodedTargets {
    let n = rng.int_inclusive(1, 3) as usize;
    let boxes: Vec<ObbBox> = distinct_cells(rng, 8, 8, n)
        .into_iter()
        .map(|c| {
            let h = rng.range(6.0, 20.0);
            ObbBox::new(
                (c.x as f64 + rng.range(0.0, 0.99)) * 4.0,
                (c.y as f64 + rng.range(0.0, 0.99)) * 4.0,
                h * rng.range(0.3, 0.9),
                h,
                rng.range(-FRAC_PI_2, FRAC_PI_2),
            )
        })
        .collect();
    encode_targets(&boxes, 32, 32, 4).expect("centers inside image")
}

fn pack(maps: &DenseMaps) -> Vec<f64> {
    [&maps.heatmap, &maps.offset, &maps.size, &maps.orientation]
        .iter()
        .flat_map(|a| a.iter().copied())
        .collect()
}

fn unpack(template: &DenseMaps, x: &[f64]) -> DenseMaps {
    let mut out = template.clone();
    let mut at = 0;
    for arr in [&mut out.heatmap, &mut out.offset, &mut out.size, &mut out.orientation] {
        let len = arr.len();
        *arr = reshape(arr.dim(), &x[at..at + len]);
        at += len;
    }
    out
}

fn check_total(rng: &mut SeededRng, eps: f64) -> f64 {
    let targets = random_targets(rng);
    let t = &targets.maps;
    let mut pred = DenseMaps::zeros(8, 8, 1, 4);
    pred.heatmap = Array3::from_shape_fn(t.heatmap.dim(), |_| rng.range(0.05, 0.95));
    pred.offset = Array3::from_shape_fn(t.offset.dim(), |_| rng.range(0.0, 1.0));
    pred.size = Array3::from_shape_fn(t.size.dim(), |_| rng.range(1.0, 30.0));
    pred.orientation = Array3::from_shape_fn(t.orientation.dim(), |_| rng.range(-2.0, 2.0));
    for c in &targets.centers {
        for ch in 0..2 {
            pred.offset[[c.y, c.x, ch]] = t.offset[[c.y, c.x, ch]] + residual(rng, 0.5);
            pred.size[[c.y, c.x, ch]] = t.size[[c.y, c.x, ch]] + residual(rng, 5.0);
        }
        let theta = t.orientation[[c.y, c.x, 0]];
        let theta_hat = loop {
            let candidate = theta + periodic_residual(rng);
            if candidate.abs() < PI - 0.05 {
                break candidate;
            }
        };
        pred.orientation[[c.y, c.x, 0]] = (theta_hat / PI).atanh();
    }
    let template = pred.clone();
    finite_difference_check(
        |x| {
            let b = total_loss(
                &unpack(&template, x),
                &targets,
                LossWeights::default(),
                FocalParams::default(),
                AngleLossKind::SmoothPeriodicL1,
            )
            .expect("shapes match");
            let g = b.grads;
            let grad = [g.heatmap, g.offset, g.size, g.orientation]
                .iter()
                .flat_map(|a| a.iter().copied())
                .collect();
            (b.total, grad)
        },
        &pack(&pred),
        eps,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::angle_term;

    fn scalar_angle(kind: AngleLossKind, target: f64) -> impl Fn(&[f64]) -> (f64, Vec<f64>) {
        move |x: &[f64]| {
            let (l, g) = angle_term(x[0], target, kind);
            (l, vec![g])
        }
    }

    #[test]
    fn smooth_quadratic_branch() {
        let err = finite_difference_check(scalar_angle(AngleLossKind::SmoothPeriodicL1, 0.0), &[0.3], 1e-5);
        assert!(err <= 1e-5, "{err}");
    }

    #[test]
    fn smooth_linear_branch_slope() {
        let (_, g) = angle_term(1.5, 0.0, AngleLossKind::SmoothPeriodicL1);
        assert_eq!(g, 1.0);
        let err = finite_difference_check(scalar_angle(AngleLossKind::SmoothPeriodicL1, 0.0), &[1.5], 1e-5);
        assert!(err <= 1e-9, "{err}");
    }

    #[test]
    fn detects_wrong_gradient() {
        let err = finite_difference_check(|x: &[f64]| (x[0] * x[0], vec![x[0]]), &[2.0], 1e-5);
        assert!((err - 1.0).abs() < 1e-6, "{err}");
    }

    #[test]
    fn every_loss_passes_small_run() {
        for loss in GradCheckLoss::ALL {
            for row in run_gradcheck(loss, 5, DEFAULT_EPSILON, 11) {
                assert!(row.passes(DEFAULT_TOLERANCE), "{row:?}");
            }
        }
    }

    #[test]
    fn names_parse() {
        assert_eq!("total".parse::<GradCheckLoss>().unwrap(), GradCheckLoss::Total);
        assert!("hinge".parse::<GradCheckLoss>().is_err());
    }
}
