use std::f64::consts::PI;

use ndarray::Array3;
use obbdet::codec::Cell;
use obbdet::losses::{
    angle_loss, angle_term, finite_difference_check, focal_loss, run_gradcheck, AngleLossKind, FocalParams,
    GradCheckLoss, RangeMode, DEFAULT_EPSILON, DEFAULT_TOLERANCE,
};
use proptest::prelude::*;

const PERIODIC: [AngleLossKind; 2] = [AngleLossKind::PeriodicL1, AngleLossKind::SmoothPeriodicL1];

fn one_cell(v: f64) -> Array3<f64> {
    Array3::from_elem((1, 1, 1), v)
}

#[test]
fn gradcheck_other_seeds() {
    for seed in [1, 2, 3] {
        for loss in GradCheckLoss::ALL {
            for row in run_gradcheck(loss, 20, DEFAULT_EPSILON, seed) {
                assert!(row.passes(DEFAULT_TOLERANCE), "seed {seed}: {row:?}");
            }
        }
    }
}

#[test]
fn plain_l1_is_not_periodic() {
    let (a, _) = angle_term(0.3, 0.0, AngleLossKind::PlainL1);
    let (b, _) = angle_term(0.3 + PI, 0.0, AngleLossKind::PlainL1);
    assert!(b > a + 3.0);
}

proptest! {
    #[test]
    fn periodic_losses_exact_on_dyadic_grid(p in -(1i64 << 41)..(1i64 << 41), t in -(1i64 << 41)..(1i64 << 41), k in -2i32..=2) {
        let scale = (2.0f64).powi(-40);
        let (pred, target) = (p as f64 * scale, t as f64 * scale);
        for kind in PERIODIC {
            let c = [Cell::new(0, 0)];
            let base = angle_loss(&one_cell(pred), &one_cell(target), &c, kind).unwrap();
            let shifted = angle_loss(&one_cell(pred + k as f64 * PI), &one_cell(target), &c, kind).unwrap();
            prop_assert_eq!(base.0, shifted.0);
            prop_assert_eq!(base.1, shifted.1);
        }
    }

    #[test]
    fn periodic_losses_near_periodic_anywhere(pred in -4.0f64..4.0, target in -2.0f64..2.0, k in -2i32..=2) {
        for kind in PERIODIC {
            let (a, _) = angle_term(pred, target, kind);
            let (b, _) = angle_term(pred + k as f64 * PI, target, kind);
            prop_assert!((a - b).abs() < 1e-12, "{:?} {} {}", kind, a, b);
        }
    }

    #[test]
    fn angle_losses_bounded_and_nonnegative(pred in -4.0f64..4.0, target in -2.0f64..2.0) {
        for kind in AngleLossKind::ALL {
            let (l, g) = angle_term(pred, target, kind);
            prop_assert!(l >= 0.0);
            prop_assert!(g.abs() <= 1.0);
        }
        for kind in PERIODIC {
            prop_assert!(angle_term(pred, target, kind).0 <= PI / 2.0);
        }
    }

    #[test]
    fn focal_nonnegative_with_zero_at_perfect_prediction(v in proptest::collection::vec(0.0f64..0.999, 16), peak in 0usize..16) {
        let mut target = Array3::from_shape_vec((4, 4, 1), v).unwrap();
        target.as_slice_mut().unwrap()[peak] = 1.0;
        let pred = target.mapv(|k| if k == 1.0 { 1.0 } else { 0.0 });
        let (l, _) = focal_loss(&pred, &target, FocalParams::default(), 1).unwrap();
        prop_assert!((0.0..1e-9).contains(&l), "{}", l);
        let noisy = target.mapv(|k| 0.5 * k + 0.25);
        prop_assert!(focal_loss(&noisy, &target, FocalParams::default(), 1).unwrap().0 > 0.0);
    }

    #[test]
    fn range_chain_rule(t in -2.0f64..2.0) {
        for mode in RangeMode::ALL {
            let err = finite_difference_check(|x: &[f64]| (mode.decode(x[0]), vec![mode.derivative(x[0])]), &[t], 1e-6);
            prop_assert!(err < 1e-6, "{:?} {}", mode, err);
        }
    }
}
