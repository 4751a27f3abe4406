//! Image-level predictions from detector boxes and box-level class scores.
//!
//! Box scores are averaged with the detector confidences as weights over all
//! classes, `empty` included; the image label is the argmax of that average
//! (lowest class index on ties). Images without a box at or above `alpha` are
//! empty with confidence 1.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::embedding::EmbedderId;
use crate::error::{Error, Result};
use crate::ingest::{DetectionSet, LabelSpace};

/// Tolerance on score vectors summing to 1.
pub const NORMALIZATION_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MergeRule {
    /// Label is the argmax of the weighted average over all classes.
    #[default]
    Aggregate,
    /// Image is empty only if every box's own argmax is empty; otherwise the
    /// label is the non-empty class with the highest weighted average.
    PerBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub alpha: f64,
    pub beta: f64,
    pub embedder: EmbedderId,
    #[serde(default)]
    pub merge_rule: MergeRule,
}

impl PipelineConfig {
    pub fn new(alpha: f64, embedder: EmbedderId) -> Self {
        Self {
            alpha,
            beta: 0.0,
            embedder,
            merge_rule: MergeRule::Aggregate,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidConfig(format!("{name} = {v} outside [0,1]")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImagePrediction {
    pub image_id: String,
    pub label: String,
    /// Weighted class scores, one per class in label-space order.
    pub scores: Vec<f64>,
    /// Number of high-confidence boxes whose own argmax is each class; the
    /// `empty` slot is always 0. Counts are reported even when the image
    /// label is `empty`.
    pub counts: Vec<u32>,
    pub confidence: f64,
    pub abstained: bool,
}

impl ImagePrediction {
    pub fn is_empty(&self) -> bool {
        self.label == crate::ingest::EMPTY
    }
}

/// Index of the largest value, lowest index on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn check_normalized(s: &[f64], g: usize) -> Result<()> {
    if s.len() != g {
        return Err(Error::LengthMismatch {
            expected: g,
            found: s.len(),
        });
    }
    let sum: f64 = s.iter().sum();
    if (sum - 1.0).abs() > NORMALIZATION_TOLERANCE || s.iter().any(|v| v.is_nan() || *v < 0.0) {
        return Err(Error::UnnormalizedScore { sum });
    }
    Ok(())
}

/// Merge the scores of the high-confidence boxes of one image.
///
/// `box_scores` holds `(c_j, s_j)` for the boxes of `ds` at or above
/// `cfg.alpha`, in detection order.
pub fn merge_image(
    ds: &DetectionSet,
    box_scores: &[(f64, Vec<f64>)],
    label_space: &LabelSpace,
    cfg: &PipelineConfig,
) -> Result<ImagePrediction> {
    let g = label_space.len();
    let empty = label_space.empty_index();
    let expected = ds.high_conf(cfg.alpha).count();
    if box_scores.len() != expected {
        return Err(Error::LengthMismatch {
            expected,
            found: box_scores.len(),
        });
    }
    let mut counts = vec![0u32; g];
    if box_scores.is_empty() {
        let mut scores = vec![0.0; g];
        scores[empty] = 1.0;
        return Ok(ImagePrediction {
            image_id: ds.image_id.clone(),
            label: label_space.name(empty).to_string(),
            scores,
            counts,
            confidence: 1.0,
            abstained: false,
        });
    }
    for (_, s) in box_scores {
        check_normalized(s, g)?;
    }
    let weight_sum: f64 = box_scores.iter().map(|(c, _)| c).sum();
    // All-zero confidences only happen with alpha = 0; fall back to a plain mean.
    let weight = |c: f64| {
        if weight_sum > 0.0 {
            c / weight_sum
        } else {
            1.0 / box_scores.len() as f64
        }
    };
    let mut scores = vec![0.0; g];
    for (c, s) in box_scores {
        let w = weight(*c);
        for (acc, v) in scores.iter_mut().zip(s) {
            *acc += w * v;
        }
        let k = argmax(s);
        if k != empty {
            counts[k] += 1;
        }
    }
    let top = argmax(&scores);
    let label_index = match cfg.merge_rule {
        MergeRule::Aggregate => top,
        MergeRule::PerBox => {
            if box_scores.iter().all(|(_, s)| argmax(s) == empty) {
                empty
            } else {
                let mut best = None::<usize>;
                for k in (0..g).filter(|&k| k != empty) {
                    if best.is_none_or(|b| scores[k] > scores[b]) {
                        best = Some(k);
                    }
                }
                best.unwrap_or(empty)
            }
        }
    };
    let confidence = scores[top];
    Ok(ImagePrediction {
        image_id: ds.image_id.clone(),
        label: label_space.name(label_index).to_string(),
        scores,
        counts,
        confidence,
        abstained: confidence <= cfg.beta,
    })
}

/// Predictions CSV: `image_id,label,confidence,abstained,score_<class>...,count_<class>...`
/// with count columns for the non-empty classes only.
pub fn predictions_csv(predictions: &[ImagePrediction], label_space: &LabelSpace) -> String {
    let empty = label_space.empty_index();
    let mut out = String::from("image_id,label,confidence,abstained");
    for c in label_space.classes() {
        let _ = write!(out, ",score_{c}");
    }
    for (k, c) in label_space.classes().iter().enumerate() {
        if k != empty {
            let _ = write!(out, ",count_{c}");
        }
    }
    out.push('\n');
    for p in predictions {
        let _ = write!(
            out,
            "{},{},{},{}",
            p.image_id, p.label, p.confidence, p.abstained
        );
        for s in &p.scores {
            let _ = write!(out, ",{s}");
        }
        for (k, c) in p.counts.iter().enumerate() {
            if k != empty {
                let _ = write!(out, ",{c}");
            }
        }
        out.push('\n');
    }
    out
}

pub fn write_predictions(
    predictions: &[ImagePrediction],
    label_space: &LabelSpace,
    path: &Path,
) -> Result<()> {
    std::fs::write(path, predictions_csv(predictions, label_space)).map_err(|e| Error::io(path, e))
}
