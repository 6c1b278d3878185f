//! Single-angle gradient descent, used to compare how each angle loss and
//! prediction range behaves from a given starting point.

use super::{angle_term, AngleLossKind, RangeMode};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryPoint {
    pub step: usize,
    /// Raw parameter.
    pub t: f64,
    /// Decoded angle, radians.
    pub theta_hat: f64,
    pub loss: f64,
}

/// Fixed-step descent on the raw parameter `t` through `range_mode`.
///
/// Returns `steps + 1` points: the initial state, then the state after each
/// update.
pub fn fit_angle(
    target_theta: f64,
    t_init: f64,
    range_mode: RangeMode,
    kind: AngleLossKind,
    learning_rate: f64,
    steps: usize,
) -> Vec<TrajectoryPoint> {
    let mut t = t_init;
    let mut out = Vec::with_capacity(steps + 1);
    for step in 0..=steps {
        let theta_hat = range_mode.decode(t);
        let (loss, slope) = angle_term(theta_hat, target_theta, kind);
        out.push(TrajectoryPoint {
            step,
            t,
            theta_hat,
            loss,
        });
        if step < steps {
            t -= learning_rate * slope * range_mode.derivative(t);
        }
    }
    out
}
