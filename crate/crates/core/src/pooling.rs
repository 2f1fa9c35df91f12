//! Area-weighted pooling of patch features inside a box.

use crate::error::{Error, Result};
use crate::geometry::{box_to_cell_weights, CellWeight, OverlapWeightMap};
use crate::types::{FeatureMap, Mask, PixelBox};

#[derive(Debug, Clone, PartialEq)]
pub struct Pooled {
    pub embedding: Vec<f64>,
    /// Set when a mask was supplied but had no foreground inside the box,
    /// so plain box pooling was used instead.
    pub mask_fallback: bool,
}

/// Mean of the patch features under `bbox`, each cell weighted by the
/// fraction of its footprint the box covers. With a mask, only foreground
/// mask pixels inside the box contribute area.
pub fn pool_box_embedding(fm: &FeatureMap, bbox: &PixelBox, mask: Option<&Mask>) -> Result<Pooled> {
    let box_weights = box_to_cell_weights(bbox, fm)?;
    if let Some(mask) = mask {
        let masked = masked_cell_weights(fm, bbox, mask);
        if !masked.cells.is_empty() {
            return Ok(Pooled {
                embedding: masked.weighted_mean(fm.dim(), |r, c| fm.cell(r, c)),
                mask_fallback: false,
            });
        }
        log::warn!(
            "mask has no foreground inside box {:?}; pooling the whole box",
            <[f64; 4]>::from(*bbox)
        );
        return Ok(Pooled {
            embedding: box_weights.weighted_mean(fm.dim(), |r, c| fm.cell(r, c)),
            mask_fallback: true,
        });
    }
    Ok(Pooled {
        embedding: box_weights.weighted_mean(fm.dim(), |r, c| fm.cell(r, c)),
        mask_fallback: false,
    })
}

/// Plain box pooling.
pub fn pool_box(fm: &FeatureMap, bbox: &PixelBox) -> Result<Vec<f64>> {
    Ok(pool_box_embedding(fm, bbox, None)?.embedding)
}

/// Cell weights restricted to foreground mask pixels: each foreground pixel
/// contributes `area(pixel ∩ box) / p²` to the single cell containing it.
fn masked_cell_weights(fm: &FeatureMap, bbox: &PixelBox, mask: &Mask) -> OverlapWeightMap {
    let Some(b) = bbox.clip(fm.image_w(), fm.image_h()) else {
        return OverlapWeightMap::default();
    };
    let p = fm.patch_size() as i64;
    let cell_area = (p * p) as f64;
    let mut acc = vec![0.0f64; fm.grid_h() * fm.grid_w()];
    for j in 0..mask.height {
        let y = mask.origin_y + j as i64;
        let dy = b.y_max.min((y + 1) as f64) - b.y_min.max(y as f64);
        if dy <= 0.0 || y < 0 || y / p >= fm.grid_h() as i64 {
            continue;
        }
        for i in 0..mask.width {
            if !mask.get(i, j) {
                continue;
            }
            let x = mask.origin_x + i as i64;
            let dx = b.x_max.min((x + 1) as f64) - b.x_min.max(x as f64);
            if dx <= 0.0 || x < 0 || x / p >= fm.grid_w() as i64 {
                continue;
            }
            acc[(y / p) as usize * fm.grid_w() + (x / p) as usize] += dx * dy / cell_area;
        }
    }
    let cells = acc
        .iter()
        .enumerate()
        .filter(|(_, w)| **w > 0.0)
        .map(|(i, w)| CellWeight {
            row: i / fm.grid_w(),
            col: i % fm.grid_w(),
            weight: *w,
        })
        .collect();
    OverlapWeightMap { cells }
}

pub(crate) fn check_dim(expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::DimensionMismatch { expected, actual });
    }
    Ok(())
}
