//! Proposal classification: cosine similarity maps, box-averaged scores,
//! argmax labelling with background rejection, and per-class NMS.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::geometry::{nms_with, DEFAULT_NMS_IOU};
use crate::pooling::check_dim;
use crate::types::{ClassTable, Detection, FeatureMap, PixelBox, PrototypeSet};

/// Per-cell cosine similarity against every prototype row, stored
/// `grid_h × grid_w × rows`.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMap {
    grid_h: usize,
    grid_w: usize,
    rows: usize,
    patch_size: usize,
    image_h: usize,
    image_w: usize,
    data: Vec<f64>,
}

impl SimilarityMap {
    pub fn rows(&self) -> usize {
        self.rows
    }
    pub fn grid_h(&self) -> usize {
        self.grid_h
    }
    pub fn grid_w(&self) -> usize {
        self.grid_w
    }

    pub fn at(&self, row: usize, col: usize) -> &[f64] {
        let start = (row * self.grid_w + col) * self.rows;
        &self.data[start..start + self.rows]
    }
}

/// Cosine similarity of every cell feature with every prototype row. Cells
/// whose feature has zero norm score 0 everywhere.
pub fn similarity_map(fm: &FeatureMap, protos: &PrototypeSet) -> Result<SimilarityMap> {
    check_dim(protos.dim(), fm.dim())?;
    let rows = protos.num_rows();
    let proto_rows = protos.rows_f64();
    let mut data = Vec::with_capacity(fm.grid_h() * fm.grid_w() * rows);
    for r in 0..fm.grid_h() {
        for c in 0..fm.grid_w() {
            let f = fm.cell(r, c);
            let norm = f.iter().map(|v| (*v as f64) * (*v as f64)).sum::<f64>().sqrt();
            for p in &proto_rows {
                let s = if norm > 0.0 {
                    let d: f64 = f.iter().zip(p).map(|(a, b)| *a as f64 * b).sum();
                    (d / norm).clamp(-1.0, 1.0)
                } else {
                    0.0
                };
                data.push(s);
            }
        }
    }
    Ok(SimilarityMap {
        grid_h: fm.grid_h(),
        grid_w: fm.grid_w(),
        rows,
        patch_size: fm.patch_size(),
        image_h: fm.image_h(),
        image_w: fm.image_w(),
        data,
    })
}

/// Area-weighted mean similarity under `bbox`, one entry per prototype row.
pub fn score_box(sim: &SimilarityMap, bbox: &PixelBox) -> Result<Vec<f64>> {
    let weights =
        crate::geometry::cell_weights(bbox, sim.patch_size, sim.image_w, sim.image_h, sim.grid_h, sim.grid_w)?;
    Ok(weights.weighted_mean(sim.rows, |r, c| sim.at(r, c)))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Verdict {
    Object {
        class_id: usize,
        score: f64,
    },
    /// Best row is a background prototype (index within the background block).
    Background {
        cluster: usize,
        score: f64,
    },
}

/// Index of the largest score; ties go to the lowest index.
pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, s) in scores.iter().enumerate().skip(1) {
        if *s > scores[best] {
            best = i;
        }
    }
    best
}

pub fn classify_proposal(scores: &[f64], table: &ClassTable) -> Verdict {
    let best = argmax(scores);
    if table.is_background_row(best) {
        Verdict::Background {
            cluster: best - table.num_objects(),
            score: scores[best],
        }
    } else {
        Verdict::Object {
            class_id: best,
            score: scores[best],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ScoreMode {
    /// Winning class's average similarity.
    #[default]
    Raw,
    /// Winning similarity minus the best background similarity.
    Margin,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectOptions {
    pub nms_iou: f64,
    pub score_mode: ScoreMode,
    pub class_agnostic_nms: bool,
}

impl Default for DetectOptions {
    fn default() -> Self {
        Self {
            nms_iou: DEFAULT_NMS_IOU,
            score_mode: ScoreMode::Raw,
            class_agnostic_nms: false,
        }
    }
}

/// Classifies every proposal, drops background verdicts and applies NMS.
pub fn detect_image(
    fm: &FeatureMap,
    proposals: &[PixelBox],
    protos: &PrototypeSet,
    opts: &DetectOptions,
) -> Result<Vec<Detection>> {
    if proposals.is_empty() {
        return Ok(Vec::new());
    }
    let sim = similarity_map(fm, protos)?;
    let table = protos.class_table();
    let mut dets = Vec::new();
    for b in proposals {
        let scores = score_box(&sim, b)?;
        if let Verdict::Object { class_id, score } = classify_proposal(&scores, table) {
            let score = match opts.score_mode {
                ScoreMode::Raw => score,
                ScoreMode::Margin => {
                    let bg = scores[table.num_objects()..]
                        .iter()
                        .copied()
                        .fold(f64::NEG_INFINITY, f64::max);
                    if bg.is_finite() {
                        score - bg
                    } else {
                        score
                    }
                }
            };
            dets.push(Detection {
                bbox: *b,
                class_id,
                score,
            });
        }
    }
    Ok(nms_with(&dets, opts.nms_iou, opts.class_agnostic_nms))
}
