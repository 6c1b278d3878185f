//! Dense target encoding and NMS-free decoding.
//!
//! Ground-truth boxes become four maps at `1/stride` resolution: a
//! class heatmap with a Gaussian bump per object, a sub-cell offset, the box
//! extents and the box angle. Decoding picks 3x3 local maxima of the heatmap
//! and reads the other channels at those cells.

use std::f64::consts::PI;

use ndarray::{Array3, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{canonicalize, GeometryError, ObbBox};

pub const DEFAULT_STRIDE: usize = 4;
pub const DEFAULT_MIN_OVERLAP: f64 = 0.7;
pub const DEFAULT_CONF_THRESHOLD: f64 = 0.3;
pub const DEFAULT_TOP_K: usize = 100;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CodecError {
    #[error("stride must be positive")]
    ZeroStride,
    #[error("image size {width}x{height} is not divisible by stride {stride}")]
    StrideMismatch { width: usize, height: usize, stride: usize },
    #[error("cell ({x}, {y}) is outside the {width}x{height} map")]
    CellOutOfBounds {
        x: usize,
        y: usize,
        width: usize,
        height: usize,
    },
    #[error("class channel {class} out of range for {channels} channels")]
    ClassOutOfRange { class: usize, channels: usize },
    #[error("sigma must be positive and finite, got {0}")]
    BadSigma(f64),
    #[error("object centers outside the image at annotation indices {0:?}")]
    CentersOutsideImage(Vec<usize>),
    #[error("annotation {index}: {source}")]
    InvalidAnnotation {
        index: usize,
        #[source]
        source: GeometryError,
    },
    #[error("map shapes disagree: {0}")]
    ShapeMismatch(String),
}

/// Integer cell index on the output grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Cell {
    pub x: usize,
    pub y: usize,
}

impl Cell {
    pub const fn new(x: usize, y: usize) -> Self {
        Self { x, y }
    }
}

/// The four output channels at `1/stride` resolution, laid out `[H, W, C]`.
///
/// For targets the orientation channel holds the canonical angle; for
/// predictions it holds the raw head output `t` with `θ = π·tanh(t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMaps {
    pub stride: usize,
    pub heatmap: Array3<f64>,
    pub offset: Array3<f64>,
    pub size: Array3<f64>,
    pub orientation: Array3<f64>,
}

impl DenseMaps {
    pub fn zeros(width_out: usize, height_out: usize, classes: usize, stride: usize) -> Self {
        Self {
            stride,
            heatmap: Array3::zeros((height_out, width_out, classes)),
            offset: Array3::zeros((height_out, width_out, 2)),
            size: Array3::zeros((height_out, width_out, 2)),
            orientation: Array3::zeros((height_out, width_out, 1)),
        }
    }

    /// Zeroed maps for an input image of the given size.
    pub fn for_image(image_w: usize, image_h: usize, stride: usize) -> Result<Self, CodecError> {
        let (w, h) = output_dims(image_w, image_h, stride)?;
        Ok(Self::zeros(w, h, 1, stride))
    }

    pub fn width_out(&self) -> usize {
        self.heatmap.dim().1
    }

    pub fn height_out(&self) -> usize {
        self.heatmap.dim().0
    }

    pub fn classes(&self) -> usize {
        self.heatmap.dim().2
    }

    pub fn check_shapes(&self) -> Result<(), CodecError> {
        let (h, w, _) = self.heatmap.dim();
        let expect = [
            ("offset", &self.offset, 2),
            ("size", &self.size, 2),
            ("orientation", &self.orientation, 1),
        ];
        for (name, arr, c) in expect {
            if arr.dim() != (h, w, c) {
                return Err(CodecError::ShapeMismatch(format!(
                    "{name} is {:?}, expected {:?}",
                    arr.dim(),
                    (h, w, c)
                )));
            }
        }
        Ok(())
    }

    pub fn contains(&self, cell: Cell) -> bool {
        cell.x < self.width_out() && cell.y < self.height_out()
    }
}

/// Output grid size for an input image, requiring exact divisibility.
pub fn output_dims(image_w: usize, image_h: usize, stride: usize) -> Result<(usize, usize), CodecError> {
    if stride == 0 {
        return Err(CodecError::ZeroStride);
    }
    if !image_w.is_multiple_of(stride) || !image_h.is_multiple_of(stride) {
        return Err(CodecError::StrideMismatch {
            width: image_w,
            height: image_h,
            stride,
        });
    }
    Ok((image_w / stride, image_h / stride))
}

/// Encoded ground truth for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedTargets {
    pub maps: DenseMaps,
    /// One cell per annotation, in annotation order.
    pub centers: Vec<Cell>,
}

impl EncodedTargets {
    pub fn object_count(&self) -> usize {
        self.centers.len()
    }
}

/// A decoded box with its heatmap confidence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(flatten)]
    pub bbox: ObbBox,
    pub score: f64,
}

/// Object-size adaptive Gaussian radius, in cells.
///
/// For each of the three corner-perturbation cases (one corner in and one
/// out, both in, both out) this solves for the largest corner shift `r` that
/// still keeps IoU ≥ `min_overlap`, and returns the smallest of the three,
/// bounded below by 1.
pub fn gaussian_radius(box_h: f64, box_w: f64, min_overlap: f64) -> f64 {
    let (h, w, o) = (box_h, box_w, min_overlap);
    // (h-r)(w-r) / (2hw - (h-r)(w-r)) >= o
    let b1 = h + w;
    let c1 = w * h * (1.0 - o) / (1.0 + o);
    let r1 = (b1 - (b1 * b1 - 4.0 * c1).max(0.0).sqrt()) / 2.0;
    // (h-2r)(w-2r) / hw >= o
    let a2 = 4.0;
    let b2 = 2.0 * (h + w);
    let c2 = (1.0 - o) * w * h;
    let r2 = (b2 - (b2 * b2 - 4.0 * a2 * c2).max(0.0).sqrt()) / (2.0 * a2);
    // hw / ((h+2r)(w+2r)) >= o
    let a3 = 4.0 * o;
    let b3 = 2.0 * o * (h + w);
    let c3 = (o - 1.0) * w * h;
    let r3 = (-b3 + (b3 * b3 - 4.0 * a3 * c3).max(0.0).sqrt()) / (2.0 * a3);
    let r = r1.min(r2).min(r3);
    if r.is_finite() {
        r.max(1.0)
    } else {
        1.0
    }
}

/// Writes `exp(-d²/2σ²)` around `center` into one class channel, keeping the
/// element-wise maximum with what is already there.
///
/// The kernel covers a `(2⌈3σ⌉+1)²` window and is truncated at the map edges.
pub fn splat_gaussian(heatmap: &mut Array3<f64>, class: usize, center: Cell, sigma: f64) -> Result<(), CodecError> {
    let (height, width, channels) = heatmap.dim();
    if center.x >= width || center.y >= height {
        return Err(CodecError::CellOutOfBounds {
            x: center.x,
            y: center.y,
            width,
            height,
        });
    }
    if class >= channels {
        return Err(CodecError::ClassOutOfRange { class, channels });
    }
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(CodecError::BadSigma(sigma));
    }
    let reach = (3.0 * sigma).ceil() as usize;
    let denom = 2.0 * sigma * sigma;
    let y0 = center.y.saturating_sub(reach);
    let y1 = (center.y + reach).min(height - 1);
    let x0 = center.x.saturating_sub(reach);
    let x1 = (center.x + reach).min(width - 1);
    for y in y0..=y1 {
        for x in x0..=x1 {
            let dx = x as f64 - center.x as f64;
            let dy = y as f64 - center.y as f64;
            let v = (-(dx * dx + dy * dy) / denom).exp();
            let cell = &mut heatmap[[y, x, class]];
            if v > *cell {
                *cell = v;
            }
        }
    }
    Ok(())
}

/// Builds the target maps for one image.
///
/// When two objects fall in the same cell the later annotation's offset,
/// size and angle win; the heatmap keeps the maximum.
pub fn encode_targets(
    annotations: &[ObbBox],
    image_w: usize,
    image_h: usize,
    stride: usize,
) -> Result<EncodedTargets, CodecError> {
    let mut maps = DenseMaps::for_image(image_w, image_h, stride)?;
    let canonical = annotations
        .iter()
        .enumerate()
        .map(|(index, b)| canonicalize(b).map_err(|source| CodecError::InvalidAnnotation { index, source }))
        .collect::<Result<Vec<_>, _>>()?;

    let outside: Vec<usize> = canonical
        .iter()
        .enumerate()
        .filter(|(_, b)| !(b.cx >= 0.0 && b.cx < image_w as f64 && b.cy >= 0.0 && b.cy < image_h as f64))
        .map(|(i, _)| i)
        .collect();
    if !outside.is_empty() {
        return Err(CodecError::CentersOutsideImage(outside));
    }

    let s = stride as f64;
    let mut centers = Vec::with_capacity(canonical.len());
    for b in &canonical {
        let (gx, gy) = (b.cx / s, b.cy / s);
        let cell = Cell::new(gx.floor() as usize, gy.floor() as usize);
        let sigma = gaussian_radius(b.h / s, b.w / s, DEFAULT_MIN_OVERLAP) / 3.0;
        splat_gaussian(&mut maps.heatmap, 0, cell, sigma)?;
        let (x, y) = (cell.x, cell.y);
        maps.offset[[y, x, 0]] = gx - gx.floor();
        maps.offset[[y, x, 1]] = gy - gy.floor();
        maps.size[[y, x, 0]] = b.w;
        maps.size[[y, x, 1]] = b.h;
        maps.orientation[[y, x, 0]] = b.theta;
        centers.push(cell);
    }
    Ok(EncodedTargets { maps, centers })
}

/// `π·tanh(t)`: maps the raw orientation output into `(-π, π)`.
pub fn decode_angle(t_theta: f64) -> f64 {
    PI * t_theta.tanh()
}

/// Inverse of [`decode_angle`] on `(-π, π)`.
pub fn encode_angle(theta: f64) -> f64 {
    (theta / PI).atanh()
}

/// Rewrites a target orientation channel (angles) into raw head outputs, so
/// that encoded targets can be fed straight to the decoder.
pub fn angles_to_raw(maps: &mut DenseMaps) {
    maps.orientation.mapv_inplace(encode_angle);
}

/// A heatmap local maximum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Peak {
    pub cell: Cell,
    pub class: usize,
    pub score: f64,
}

/// Cells that are `>=` all eight neighbours and at least `conf_threshold`,
/// highest score first (row-major order among equal scores), at most `top_k`.
pub fn extract_peaks(heatmap: &Array3<f64>, conf_threshold: f64, top_k: usize) -> Vec<Peak> {
    let (height, width, channels) = heatmap.dim();
    let mut peaks = Vec::new();
    for class in 0..channels {
        let plane = heatmap.index_axis(Axis(2), class);
        for y in 0..height {
            for x in 0..width {
                let v = plane[[y, x]];
                if v.is_nan() || v < conf_threshold {
                    continue;
                }
                let is_max = (y.saturating_sub(1)..=(y + 1).min(height - 1))
                    .all(|ny| (x.saturating_sub(1)..=(x + 1).min(width - 1)).all(|nx| plane[[ny, nx]] <= v));
                if is_max {
                    peaks.push(Peak {
                        cell: Cell::new(x, y),
                        class,
                        score: v,
                    });
                }
            }
        }
    }
    peaks.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then((a.cell.y, a.cell.x, a.class).cmp(&(b.cell.y, b.cell.x, b.class)))
    });
    peaks.truncate(top_k);
    peaks
}

/// Turns predicted maps into canonical boxes, highest score first.
///
/// Peaks whose predicted size is not a positive finite pair cannot form a box
/// and are skipped.
pub fn decode_detections(maps: &DenseMaps, conf_threshold: f64, top_k: usize) -> Vec<Detection> {
    let s = maps.stride as f64;
    extract_peaks(&maps.heatmap, conf_threshold, top_k)
        .into_iter()
        .filter_map(|peak| {
            let Cell { x, y } = peak.cell;
            let b = ObbBox::new(
                (x as f64 + maps.offset[[y, x, 0]]) * s,
                (y as f64 + maps.offset[[y, x, 1]]) * s,
                maps.size[[y, x, 0]],
                maps.size[[y, x, 1]],
                decode_angle(maps.orientation[[y, x, 0]]),
            );
            canonicalize(&b).ok().map(|bbox| Detection {
                bbox,
                score: peak.score,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn radius_lower_bound() {
        assert_eq!(gaussian_radius(1e-9, 1e-9, 0.7), 1.0);
        // The three roots for a 10x10 box are all below one cell.
        assert_eq!(gaussian_radius(10.0, 10.0, 0.7), 1.0);
    }

    #[test]
    fn radius_fixtures() {
        // Frozen from a bisection solve of the three IoU conditions.
        assert_relative_eq!(gaussian_radius(100.0, 100.0, 0.7), 8.166998673296224, epsilon = 1e-9);
        assert_relative_eq!(gaussian_radius(40.0, 20.0, 0.7), 2.1547674213348715, epsilon = 1e-9);
        assert_relative_eq!(gaussian_radius(30.0, 12.0, 0.7), 1.375856204552671, epsilon = 1e-9);
    }

    #[test]
    fn splat_single_peak() {
        let mut hm = Array3::zeros((9, 9, 1));
        splat_gaussian(&mut hm, 0, Cell::new(4, 4), 1.0).unwrap();
        assert_eq!(hm[[4, 4, 0]], 1.0);
        assert!(hm[[4, 5, 0]] < 1.0 && hm[[4, 6, 0]] < hm[[4, 5, 0]]);
        assert_relative_eq!(hm[[5, 5, 0]], (-1.0f64).exp(), epsilon = 1e-15);
    }

    #[test]
    fn splat_twice_same_cell_is_idempotent() {
        let mut once = Array3::zeros((9, 9, 1));
        splat_gaussian(&mut once, 0, Cell::new(3, 4), 1.3).unwrap();
        let mut twice = once.clone();
        splat_gaussian(&mut twice, 0, Cell::new(3, 4), 1.3).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn overlapping_splats_take_max() {
        let mut hm = Array3::zeros((1, 9, 1));
        splat_gaussian(&mut hm, 0, Cell::new(2, 0), 1.5).unwrap();
        splat_gaussian(&mut hm, 0, Cell::new(5, 0), 1.5).unwrap();
        let k = |d: f64| (-(d * d) / (2.0 * 1.5 * 1.5)).exp();
        // cell 4 is 2 from the first center and 1 from the second
        assert_eq!(hm[[0, 4, 0]], k(1.0).max(k(2.0)));
        assert!(hm[[0, 4, 0]] < k(1.0) + k(2.0));
    }

    #[test]
    fn splat_rejects_out_of_bounds() {
        let mut hm = Array3::<f64>::zeros((4, 4, 1));
        assert!(matches!(
            splat_gaussian(&mut hm, 0, Cell::new(4, 0), 1.0),
            Err(CodecError::CellOutOfBounds { .. })
        ));
        assert!(matches!(
            splat_gaussian(&mut hm, 1, Cell::new(0, 0), 1.0),
            Err(CodecError::ClassOutOfRange { .. })
        ));
    }

    #[test]
    fn splat_truncates_at_border() {
        let mut hm = Array3::zeros((5, 5, 1));
        splat_gaussian(&mut hm, 0, Cell::new(0, 0), 2.0).unwrap();
        assert_eq!(hm[[0, 0, 0]], 1.0);
        assert!(hm.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn encode_center_and_offset() {
        let t = encode_targets(&[ObbBox::new(17.0, 9.0, 6.0, 12.0, 0.1)], 32, 32, 4).unwrap();
        assert_eq!(t.centers, vec![Cell::new(4, 2)]);
        assert_eq!(t.maps.offset[[2, 4, 0]], 0.25);
        assert_eq!(t.maps.offset[[2, 4, 1]], 0.25);
        assert_eq!(t.maps.size[[2, 4, 0]], 6.0);
        assert_eq!(t.maps.size[[2, 4, 1]], 12.0);
        assert_eq!(t.maps.orientation[[2, 4, 0]], 0.1);
        assert_eq!(t.maps.heatmap[[2, 4, 0]], 1.0);
    }

    #[test]
    fn encode_empty() {
        let t = encode_targets(&[], 16, 8, 4).unwrap();
        assert_eq!(t.object_count(), 0);
        assert_eq!(t.maps.heatmap.dim(), (2, 4, 1));
        assert!(t.maps.heatmap.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn encode_canonicalizes_before_writing() {
        let t = encode_targets(&[ObbBox::new(8.0, 8.0, 12.0, 6.0, 0.0)], 16, 16, 4).unwrap();
        assert_eq!(t.maps.size[[2, 2, 0]], 6.0);
        assert_eq!(t.maps.size[[2, 2, 1]], 12.0);
        assert_relative_eq!(t.maps.orientation[[2, 2, 0]], -std::f64::consts::FRAC_PI_2);
    }

    #[test]
    fn encode_collision_later_wins() {
        let a = ObbBox::new(17.0, 9.0, 6.0, 12.0, 0.1);
        let b = ObbBox::new(18.0, 10.0, 5.0, 11.0, -0.2);
        let t = encode_targets(&[a, b], 32, 32, 4).unwrap();
        assert_eq!(t.centers, vec![Cell::new(4, 2), Cell::new(4, 2)]);
        assert_eq!(t.object_count(), 2);
        assert_eq!(t.maps.offset[[2, 4, 0]], 0.5);
        assert_eq!(t.maps.offset[[2, 4, 1]], 0.5);
        assert_eq!(t.maps.size[[2, 4, 0]], 5.0);
        assert_eq!(t.maps.orientation[[2, 4, 0]], -0.2);
        assert_eq!(t.maps.heatmap[[2, 4, 0]], 1.0);
    }

    #[test]
    fn encode_reports_every_outside_center() {
        let boxes = [
            ObbBox::new(-1.0, 5.0, 2.0, 4.0, 0.0),
            ObbBox::new(5.0, 5.0, 2.0, 4.0, 0.0),
            ObbBox::new(5.0, 16.0, 2.0, 4.0, 0.0),
        ];
        assert_eq!(
            encode_targets(&boxes, 16, 16, 4),
            Err(CodecError::CentersOutsideImage(vec![0, 2]))
        );
    }

    #[test]
    fn encode_rejects_bad_stride() {
        assert!(matches!(
            encode_targets(&[], 18, 16, 4),
            Err(CodecError::StrideMismatch { .. })
        ));
        assert_eq!(encode_targets(&[], 16, 16, 0), Err(CodecError::ZeroStride));
    }

    #[test]
    fn decode_angle_examples() {
        assert_eq!(decode_angle(0.0), 0.0);
        assert!(decode_angle(50.0) <= PI && decode_angle(50.0) > PI - 1e-12);
        assert_relative_eq!(decode_angle(0.25f64.atanh()), PI / 4.0, epsilon = 1e-15);
        assert_relative_eq!(0.25f64.atanh(), 0.25541281188299536, epsilon = 1e-15);
    }

    #[test]
    fn peaks_single_spike() {
        let mut hm = Array3::zeros((5, 5, 1));
        hm[[2, 3, 0]] = 1.0;
        let p = extract_peaks(&hm, 0.3, 100);
        assert_eq!(p.len(), 1);
        assert_eq!(p[0].cell, Cell::new(3, 2));
        assert!(extract_peaks(&Array3::zeros((5, 5, 1)), 0.3, 100).is_empty());
    }

    #[test]
    fn peaks_plateau_both_qualify_in_row_major_order() {
        let mut hm = Array3::zeros((4, 4, 1));
        hm[[2, 1, 0]] = 0.9;
        hm[[1, 2, 0]] = 0.9;
        let p = extract_peaks(&hm, 0.3, 100);
        let cells: Vec<_> = p.iter().map(|p| p.cell).collect();
        assert_eq!(cells, vec![Cell::new(2, 1), Cell::new(1, 2)]);
    }

    #[test]
    fn peaks_sorted_and_truncated() {
        let mut hm = Array3::zeros((7, 7, 1));
        hm[[0, 0, 0]] = 0.4;
        hm[[3, 3, 0]] = 0.9;
        hm[[6, 6, 0]] = 0.6;
        let p = extract_peaks(&hm, 0.3, 2);
        assert_eq!(p.iter().map(|p| p.score).collect::<Vec<_>>(), vec![0.9, 0.6]);
    }

    #[test]
    fn decode_skips_degenerate_size() {
        let mut maps = DenseMaps::zeros(4, 4, 1, 4);
        maps.heatmap[[1, 1, 0]] = 1.0;
        assert!(decode_detections(&maps, 0.3, 10).is_empty());
        maps.size[[1, 1, 0]] = 3.0;
        maps.size[[1, 1, 1]] = 5.0;
        assert_eq!(decode_detections(&maps, 0.3, 10).len(), 1);
        assert!(decode_detections(&maps, 1.1, 10).is_empty());
    }

    #[test]
    fn check_shapes_flags_mismatch() {
        let mut maps = DenseMaps::zeros(4, 3, 1, 4);
        assert!(maps.check_shapes().is_ok());
        maps.size = Array3::zeros((3, 4, 1));
        assert!(maps.check_shapes().is_err());
    }
}
