//! Box arithmetic shared by pooling, crop sampling, NMS and evaluation.

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::types::{Detection, FeatureMap, PixelBox};

pub const DEFAULT_NMS_IOU: f64 = 0.5;

pub fn iou(a: &PixelBox, b: &PixelBox) -> f64 {
    let inter = a.intersection_area(b);
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellWeight {
    pub row: usize,
    pub col: usize,
    /// Fraction of the cell's `p × p` footprint covered, in `(0, 1]`.
    pub weight: f64,
}

/// Sparse coverage of the patch grid by one box.
///
/// Averaging a per-cell quantity with these weights is the same as
/// nearest-neighbour upsampling it to pixel resolution and averaging over
/// the box's pixels.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct OverlapWeightMap {
    pub cells: Vec<CellWeight>,
}

impl OverlapWeightMap {
    pub fn total_weight(&self) -> f64 {
        self.cells.iter().map(|c| c.weight).sum()
    }

    /// Weighted mean of a per-cell vector quantity of length `len`, read via
    /// `value(row, col)`.
    pub fn weighted_mean<'a, T, F>(&self, len: usize, mut value: F) -> Vec<f64>
    where
        T: Copy + Into<f64> + 'a,
        F: FnMut(usize, usize) -> &'a [T],
    {
        let mut acc = vec![0.0f64; len];
        let mut total = 0.0;
        for c in &self.cells {
            for (a, v) in acc.iter_mut().zip(value(c.row, c.col)) {
                *a += c.weight * (*v).into();
            }
            total += c.weight;
        }
        acc.iter_mut().for_each(|a| *a /= total);
        acc
    }
}

/// Footprint of a box on the patch grid. The box is clipped to the image
/// first; a box with no area left is an error.
pub fn box_to_cell_weights(bbox: &PixelBox, fm: &FeatureMap) -> Result<OverlapWeightMap> {
    cell_weights(
        bbox,
        fm.patch_size(),
        fm.image_w(),
        fm.image_h(),
        fm.grid_h(),
        fm.grid_w(),
    )
}

pub(crate) fn cell_weights(
    bbox: &PixelBox,
    patch: usize,
    image_w: usize,
    image_h: usize,
    grid_h: usize,
    grid_w: usize,
) -> Result<OverlapWeightMap> {
    let b = bbox
        .is_finite()
        .then(|| bbox.clip(image_w, image_h))
        .flatten()
        .ok_or(Error::DegenerateBox(bbox.x_min, bbox.y_min, bbox.x_max, bbox.y_max))?;
    let p = patch as f64;
    let cell_area = p * p;
    let col_lo = (b.x_min / p).floor() as usize;
    let col_hi = ((b.x_max / p).ceil() as usize).min(grid_w);
    let row_lo = (b.y_min / p).floor() as usize;
    let row_hi = ((b.y_max / p).ceil() as usize).min(grid_h);
    let mut cells = Vec::with_capacity((row_hi - row_lo) * (col_hi - col_lo));
    for row in row_lo..row_hi {
        let y0 = row as f64 * p;
        let dy = b.y_max.min(y0 + p) - b.y_min.max(y0);
        if dy <= 0.0 {
            continue;
        }
        for col in col_lo..col_hi {
            let x0 = col as f64 * p;
            let dx = b.x_max.min(x0 + p) - b.x_min.max(x0);
            if dx <= 0.0 {
                continue;
            }
            cells.push(CellWeight {
                row,
                col,
                weight: (dx * dy / cell_area).min(1.0),
            });
        }
    }
    if cells.is_empty() {
        return Err(Error::DegenerateBox(b.x_min, b.y_min, b.x_max, b.y_max));
    }
    Ok(OverlapWeightMap { cells })
}

/// Suppression order: score descending, then smaller area, then input order.
fn suppression_order(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b]
            .score
            .partial_cmp(&dets[a].score)
            .unwrap_or(Ordering::Equal)
            .then_with(|| {
                dets[a]
                    .bbox
                    .area()
                    .partial_cmp(&dets[b].bbox.area())
                    .unwrap_or(Ordering::Equal)
            })
            .then_with(|| a.cmp(&b))
    });
    order
}

/// Greedy per-class non-maximum suppression. A detection survives iff its
/// IoU with every previously kept detection of the same class is below
/// `iou_threshold`. Output is in kept order.
pub fn nms(detections: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    nms_with(detections, iou_threshold, false)
}

/// NMS that ignores class labels when `class_agnostic` is set.
pub fn nms_with(detections: &[Detection], iou_threshold: f64, class_agnostic: bool) -> Vec<Detection> {
    let mut kept: Vec<Detection> = Vec::new();
    for i in suppression_order(detections) {
        let d = &detections[i];
        let suppressed = kept
            .iter()
            .filter(|k| class_agnostic || k.class_id == d.class_id)
            .any(|k| iou(&k.bbox, &d.bbox) >= iou_threshold);
        if !suppressed {
            kept.push(*d);
        }
    }
    kept
}
