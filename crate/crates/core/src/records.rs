//! JSONL annotation and detection files: one image per line.
//!
//! ```text
//! {"image_id":"img_00000","width":512,"height":512,"boxes":[{"cx":..,"cy":..,"w":..,"h":..,"theta":..}]}
//! ```
//!
//! Detection files add a `score` to every box. Angles are radians.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::Detection;
use crate::eval::{EvalError, GroundTruthSet, ImageAnnotation, ImageDetections};
use crate::geometry::{canonicalize, ObbBox};

#[derive(Debug, Error)]
pub enum RecordError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse { path: String, line: usize, message: String },
    #[error(transparent)]
    Eval(#[from] EvalError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxRecord {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub theta: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub image_id: String,
    pub width: usize,
    pub height: usize,
    pub boxes: Vec<BoxRecord>,
}

impl BoxRecord {
    fn obb(&self) -> ObbBox {
        ObbBox::new(self.cx, self.cy, self.w, self.h, self.theta)
    }

    fn from_obb(b: &ObbBox, score: Option<f64>) -> Self {
        Self {
            cx: b.cx,
            cy: b.cy,
            w: b.w,
            h: b.h,
            theta: b.theta,
            score,
        }
    }
}

impl From<&ImageAnnotation> for AnnotationRecord {
    fn from(img: &ImageAnnotation) -> Self {
        Self {
            image_id: img.image_id.clone(),
            width: img.width,
            height: img.height,
            boxes: img.boxes.iter().map(|b| BoxRecord::from_obb(b, None)).collect(),
        }
    }
}

impl From<&ImageDetections> for AnnotationRecord {
    fn from(img: &ImageDetections) -> Self {
        Self {
            image_id: img.image_id.clone(),
            width: img.width,
            height: img.height,
            boxes: img
                .detections
                .iter()
                .map(|d| BoxRecord::from_obb(&d.bbox, Some(d.score)))
                .collect(),
        }
    }
}

/// Serializes records, one compact JSON object per line.
pub fn to_jsonl<'a, I>(records: I) -> String
where
    I: IntoIterator<Item = &'a AnnotationRecord>,
{
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("records always serialize"));
        out.push('\n');
    }
    out
}

/// Parses JSONL; blank lines are skipped. `origin` labels error messages.
pub fn parse_jsonl(text: &str, origin: &str) -> Result<Vec<AnnotationRecord>, RecordError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| RecordError::Parse {
                path: origin.to_string(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

fn read_text(path: &Path) -> Result<String, RecordError> {
    fs::read_to_string(path).map_err(|source| RecordError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn write_text(path: &Path, text: &str) -> Result<(), RecordError> {
    let io = |source| RecordError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut f = fs::File::create(path).map_err(io)?;
    f.write_all(text.as_bytes()).map_err(io)
}

fn box_error(origin: &str, line: usize, index: usize, e: impl std::fmt::Display) -> RecordError {
    RecordError::Parse {
        path: origin.to_string(),
        line,
        message: format!("box {index}: {e}"),
    }
}

/// Ground truth from records. Boxes are validated and canonicalized.
pub fn ground_truth_from_records(records: Vec<AnnotationRecord>, origin: &str) -> Result<GroundTruthSet, RecordError> {
    let images = records
        .into_iter()
        .enumerate()
        .map(|(line, r)| {
            let boxes = r
                .boxes
                .iter()
                .enumerate()
                .map(|(i, b)| canonicalize(&b.obb()).map_err(|e| box_error(origin, line + 1, i, e)))
                .collect::<Result<Vec<_>, _>>()?;
            Ok(ImageAnnotation {
                image_id: r.image_id,
                width: r.width,
                height: r.height,
                boxes,
            })
        })
        .collect::<Result<Vec<_>, RecordError>>()?;
    Ok(GroundTruthSet::new(images)?)
}

/// Detections from records. Every box needs a score in `[0, 1]`.
pub fn detections_from_records(
    records: Vec<AnnotationRecord>,
    origin: &str,
) -> Result<Vec<ImageDetections>, RecordError> {
    records
        .into_iter()
        .enumerate()
        .map(|(line, r)| {
            let detections = r
                .boxes
                .iter()
                .enumerate()
                .map(|(i, b)| {
                    let score = b
                        .score
                        .filter(|s| (0.0..=1.0).contains(s))
                        .ok_or_else(|| box_error(origin, line + 1, i, "missing or out-of-range score"))?;
                    let bbox = canonicalize(&b.obb()).map_err(|e| box_error(origin, line + 1, i, e))?;
                    Ok(Detection { bbox, score })
                })
                .collect::<Result<Vec<_>, RecordError>>()?;
            Ok(ImageDetections {
                image_id: r.image_id,
                width: r.width,
                height: r.height,
                detections,
            })
        })
        .collect()
}

pub fn read_ground_truth(path: &Path) -> Result<GroundTruthSet, RecordError> {
    let origin = path.display().to_string();
    ground_truth_from_records(parse_jsonl(&read_text(path)?, &origin)?, &origin)
}

pub fn read_detections(path: &Path) -> Result<Vec<ImageDetections>, RecordError> {
    let origin = path.display().to_string();
    detections_from_records(parse_jsonl(&read_text(path)?, &origin)?, &origin)
}

pub fn write_ground_truth(path: &Path, gt: &GroundTruthSet) -> Result<(), RecordError> {
    let records: Vec<AnnotationRecord> = gt.images().iter().map(AnnotationRecord::from).collect();
    write_text(path, &to_jsonl(&records))
}

pub fn write_detections(path: &Path, dets: &[ImageDetections]) -> Result<(), RecordError> {
    let records: Vec<AnnotationRecord> = dets.iter().map(AnnotationRecord::from).collect();
    write_text(path, &to_jsonl(&records))
}
