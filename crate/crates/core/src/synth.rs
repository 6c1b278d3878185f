//! Synthetic overhead-camera scenes.
//!
//! People are canonical boxes whose long (`h`) axis points along the ray from
//! the image center, as standing people do under a ceiling-mounted fisheye
//! lens. Each image draws from its own seeded stream (see [`crate::rng`]), so
//! output does not depend on generation order.

use std::f64::consts::FRAC_PI_2;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{Detection, DEFAULT_STRIDE};
use crate::eval::{GroundTruthSet, ImageAnnotation, ImageDetections};
use crate::geometry::{canonicalize, ObbBox};
use crate::rng::SeededRng;

/// Rejection-sampling budget per person before a scene is declared infeasible.
const MAX_PLACEMENT_ATTEMPTS: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SynthError {
    #[error("invalid scene config: {0}")]
    InvalidConfig(String),
    #[error("image {image}: could not place person {person} after {attempts} attempts")]
    Crowded {
        image: usize,
        person: usize,
        attempts: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub seed: u64,
    /// Square image side in pixels.
    pub image_size: usize,
    pub n_images: usize,
    /// Inclusive person-count range per image.
    pub people_per_image: (usize, usize),
    /// Range of box `h` in pixels.
    pub size_range: (f64, f64),
    /// Range of `w / h`.
    pub aspect_range: (f64, f64),
    /// Minimum distance from a box's bounding circle to the image border.
    pub center_margin: f64,
    /// Minimum distance between person centers.
    pub min_center_distance: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            image_size: 512,
            n_images: 10,
            people_per_image: (2, 5),
            size_range: (40.0, 120.0),
            aspect_range: (0.3, 0.6),
            center_margin: 0.0,
            min_center_distance: 2.0 * DEFAULT_STRIDE as f64,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::InvalidConfig(m));
        if self.image_size == 0 || !self.image_size.is_multiple_of(DEFAULT_STRIDE) {
            return bad(format!(
                "image size {} must be a positive multiple of {DEFAULT_STRIDE}",
                self.image_size
            ));
        }
        let (pmin, pmax) = self.people_per_image;
        if pmin > pmax {
            return bad(format!("people range {pmin}:{pmax} is reversed"));
        }
        let (hmin, hmax) = self.size_range;
        if !(hmin > 0.0 && hmin <= hmax && hmax.is_finite()) {
            return bad(format!("size range ({hmin}, {hmax}) must be positive and ordered"));
        }
        let (amin, amax) = self.aspect_range;
        if !(amin > 0.0 && amin <= amax && amax < 1.0) {
            return bad(format!(
                "aspect range ({amin}, {amax}) must lie in (0, 1) and be ordered"
            ));
        }
        if !(self.center_margin >= 0.0 && self.min_center_distance >= 0.0) {
            return bad("margins must be non-negative".into());
        }
        let reach = self.center_margin + 0.5 * hmax * (1.0 + amax * amax).sqrt();
        if 2.0 * reach >= self.image_size as f64 {
            return bad(format!(
                "largest person plus margin needs {:.1} px, image is {} px",
                2.0 * reach,
                self.image_size
            ));
        }
        Ok(())
    }
}

/// Radial orientation for a center: `h` along the ray from the image center.
/// Centers within 1 px of the image center get angle 0.
pub fn radial_angle(cx: f64, cy: f64, image_size: usize) -> f64 {
    let c = 0.5 * image_size as f64;
    let (dx, dy) = (cx - c, cy - c);
    if dx.hypot(dy) < 1.0 {
        return 0.0;
    }
    // local +y is (-sin θ, cos θ); aligning it with the ray gives θ = φ - π/2
    dy.atan2(dx) - FRAC_PI_2
}

pub fn image_id(index: usize) -> String {
    format!("img_{index:05}")
}

fn generate_image(cfg: &SceneConfig, index: usize) -> Result<ImageAnnotation, SynthError> {
    let mut rng = SeededRng::stream(cfg.seed, index as u64);
    let (pmin, pmax) = cfg.people_per_image;
    let count = rng.int_inclusive(pmin as u64, pmax as u64) as usize;
    let size = cfg.image_size as f64;
    let mut boxes: Vec<ObbBox> = Vec::with_capacity(count);
    for person in 0..count {
        let h = rng.range(cfg.size_range.0, cfg.size_range.1);
        let w = h * rng.range(cfg.aspect_range.0, cfg.aspect_range.1);
        let reach = cfg.center_margin + 0.5 * w.hypot(h);
        let mut placed = None;
        for _ in 0..MAX_PLACEMENT_ATTEMPTS {
            let cx = rng.range(reach, size - reach);
            let cy = rng.range(reach, size - reach);
            let clear = boxes
                .iter()
                .all(|b| (b.cx - cx).hypot(b.cy - cy) >= cfg.min_center_distance);
            if clear {
                placed = Some((cx, cy));
                break;
            }
        }
        let (cx, cy) = placed.ok_or(SynthError::Crowded {
            image: index,
            person,
            attempts: MAX_PLACEMENT_ATTEMPTS,
        })?;
        let raw = ObbBox::new(cx, cy, w, h, radial_angle(cx, cy, cfg.image_size));
        boxes.push(canonicalize(&raw).expect("generated box has positive finite fields"));
    }
    Ok(ImageAnnotation {
        image_id: image_id(index),
        width: cfg.image_size,
        height: cfg.image_size,
        boxes,
    })
}

/// Deterministic scene set for `cfg`.
pub fn generate_scene(cfg: &SceneConfig) -> Result<GroundTruthSet, SynthError> {
    cfg.validate()?;
    let images = (0..cfg.n_images)
        .map(|i| generate_image(cfg, i))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(GroundTruthSet::new(images).expect("generated ids are unique"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbConfig {
    pub seed: u64,
    pub center_noise_sigma: f64,
    /// Relative to each dimension.
    pub size_noise_sigma: f64,
    pub angle_noise_sigma: f64,
    pub drop_rate: f64,
    /// Expected number of spurious boxes per image (Poisson).
    pub spurious_rate: f64,
    /// Kept boxes score uniformly in `[floor, ceiling]`; spurious ones in
    /// `[0, ceiling]`.
    pub score_floor: f64,
    pub score_ceiling: f64,
}

impl Default for PerturbConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            center_noise_sigma: 0.0,
            size_noise_sigma: 0.0,
            angle_noise_sigma: 0.0,
            drop_rate: 0.0,
            spurious_rate: 0.0,
            score_floor: 1.0,
            score_ceiling: 1.0,
        }
    }
}

impl PerturbConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let sigmas = [self.center_noise_sigma, self.size_noise_sigma, self.angle_noise_sigma];
        if sigmas.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
            return Err(SynthError::InvalidConfig(
                "noise sigmas must be finite and non-negative".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.drop_rate) {
            return Err(SynthError::InvalidConfig(format!(
                "drop rate {} outside [0, 1]",
                self.drop_rate
            )));
        }
        if !(self.spurious_rate >= 0.0 && self.spurious_rate.is_finite()) {
            return Err(SynthError::InvalidConfig("spurious rate must be non-negative".into()));
        }
        if !(0.0 <= self.score_floor && self.score_floor <= self.score_ceiling && self.score_ceiling <= 1.0) {
            return Err(SynthError::InvalidConfig(format!(
                "scores need 0 <= floor ({}) <= ceiling ({}) <= 1",
                self.score_floor, self.score_ceiling
            )));
        }
        Ok(())
    }
}

/// Smallest dimension a perturbed box may shrink to, in pixels.
const MIN_PERTURBED_DIM: f64 = 1e-3;

/// Turns ground truth into pseudo-detections.
///
/// Per image, per box in order, the stream yields: a drop draw, five normals
/// (cx, cy, w, h, θ) and a score draw, all consumed whether or not the box is
/// kept. Then a Poisson count of spurious boxes, each drawing cx, cy, the
/// index of a ground-truth box to copy the size from, θ and a score.
pub fn perturb(gt: &GroundTruthSet, cfg: &PerturbConfig) -> Result<Vec<ImageDetections>, SynthError> {
    cfg.validate()?;
    Ok(gt
        .images()
        .iter()
        .enumerate()
        .map(|(index, img)| perturb_image(img, index, cfg))
        .collect())
}

fn perturb_image(img: &ImageAnnotation, index: usize, cfg: &PerturbConfig) -> ImageDetections {
    let mut rng = SeededRng::stream(cfg.seed, index as u64);
    let mut detections = Vec::with_capacity(img.boxes.len());
    for b in &img.boxes {
        let drop = rng.uniform() < cfg.drop_rate;
        let noise: [f64; 5] = std::array::from_fn(|_| rng.normal());
        let score = rng.range(cfg.score_floor, cfg.score_ceiling);
        if drop {
            continue;
        }
        let noisy = ObbBox::new(
            b.cx + cfg.center_noise_sigma * noise[0],
            b.cy + cfg.center_noise_sigma * noise[1],
            (b.w * (1.0 + cfg.size_noise_sigma * noise[2])).max(MIN_PERTURBED_DIM),
            (b.h * (1.0 + cfg.size_noise_sigma * noise[3])).max(MIN_PERTURBED_DIM),
            b.theta + cfg.angle_noise_sigma * noise[4],
        );
        if let Ok(bbox) = canonicalize(&noisy) {
            detections.push(Detection { bbox, score });
        }
    }
    let spurious = rng.poisson(cfg.spurious_rate);
    for _ in 0..spurious {
        let cx = rng.range(0.0, img.width as f64);
        let cy = rng.range(0.0, img.height as f64);
        let pick = rng.uniform();
        let (w, h) = if img.boxes.is_empty() {
            (20.0, 40.0)
        } else {
            let b = img.boxes[((pick * img.boxes.len() as f64) as usize).min(img.boxes.len() - 1)];
            (b.w, b.h)
        };
        let theta = rng.range(-FRAC_PI_2, FRAC_PI_2);
        let score = rng.range(0.0, cfg.score_ceiling);
        let bbox = canonicalize(&ObbBox::new(cx, cy, w, h, theta)).expect("spurious box is valid");
        detections.push(Detection { bbox, score });
    }
    ImageDetections {
        image_id: img.image_id.clone(),
        width: img.width,
        height: img.height,
        detections,
    }
}
