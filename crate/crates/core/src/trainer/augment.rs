//! Spatial augmentations applied directly to feature grids.
//!
//! Every transform works in the grid's padded pixel frame
//! (`grid_w·p × grid_h·p`), so the output map reports that frame as its
//! image size and boxes stay exact.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::types::{Annotation, FeatureMap, Mask, PixelBox};

/// Boxes keeping less than this fraction of their area after a crop are dropped.
pub const MIN_CROP_AREA_FRACTION: f64 = 0.2;
pub const CROP_SCALE_MIN: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Augmentations {
    pub hflip: bool,
    pub vflip: bool,
    pub rot90: bool,
    pub random_crop: bool,
}

impl Augmentations {
    pub const ALL: Self = Self {
        hflip: true,
        vflip: true,
        rot90: true,
        random_crop: true,
    };
    pub const NONE: Self = Self {
        hflip: false,
        vflip: false,
        rot90: false,
        random_crop: false,
    };

    pub fn any(&self) -> bool {
        self.hflip || self.vflip || self.rot90 || self.random_crop
    }
}

impl Default for Augmentations {
    fn default() -> Self {
        Self::ALL
    }
}

fn padded(fm: &FeatureMap) -> (f64, f64) {
    (
        (fm.grid_w() * fm.patch_size()) as f64,
        (fm.grid_h() * fm.patch_size()) as f64,
    )
}

fn rebuild(fm: &FeatureMap, grid_h: usize, grid_w: usize, data: Vec<f32>) -> FeatureMap {
    FeatureMap::from_grid(grid_h, grid_w, fm.dim(), fm.patch_size(), data).expect("transform preserves shape")
}

fn remap_grid(
    fm: &FeatureMap,
    grid_h: usize,
    grid_w: usize,
    src: impl Fn(usize, usize) -> (usize, usize),
) -> FeatureMap {
    let mut data = Vec::with_capacity(grid_h * grid_w * fm.dim());
    for r in 0..grid_h {
        for c in 0..grid_w {
            let (sr, sc) = src(r, c);
            data.extend_from_slice(fm.cell(sr, sc));
        }
    }
    rebuild(fm, grid_h, grid_w, data)
}

fn remap_mask(
    m: &Mask,
    origin_x: i64,
    origin_y: i64,
    width: usize,
    height: usize,
    src: impl Fn(usize, usize) -> (usize, usize),
) -> Mask {
    let mut bits = Vec::with_capacity(width * height);
    for j in 0..height {
        for i in 0..width {
            let (si, sj) = src(i, j);
            bits.push(m.get(si, sj));
        }
    }
    Mask::new(origin_x, origin_y, width, height, bits).expect("mask shape")
}

pub fn hflip(fm: &FeatureMap, anns: &[Annotation]) -> (FeatureMap, Vec<Annotation>) {
    let (w, _) = padded(fm);
    let gw = fm.grid_w();
    let out = remap_grid(fm, fm.grid_h(), gw, |r, c| (r, gw - 1 - c));
    let anns = anns
        .iter()
        .map(|a| Annotation {
            bbox: PixelBox::new(w - a.bbox.x_max, a.bbox.y_min, w - a.bbox.x_min, a.bbox.y_max),
            class_id: a.class_id,
            mask: a.mask.as_ref().map(|m| {
                let ox = w as i64 - (m.origin_x + m.width as i64);
                remap_mask(m, ox, m.origin_y, m.width, m.height, |i, j| (m.width - 1 - i, j))
            }),
        })
        .collect();
    (out, anns)
}

pub fn vflip(fm: &FeatureMap, anns: &[Annotation]) -> (FeatureMap, Vec<Annotation>) {
    let (_, h) = padded(fm);
    let gh = fm.grid_h();
    let out = remap_grid(fm, gh, fm.grid_w(), |r, c| (gh - 1 - r, c));
    let anns = anns
        .iter()
        .map(|a| Annotation {
            bbox: PixelBox::new(a.bbox.x_min, h - a.bbox.y_max, a.bbox.x_max, h - a.bbox.y_min),
            class_id: a.class_id,
            mask: a.mask.as_ref().map(|m| {
                let oy = h as i64 - (m.origin_y + m.height as i64);
                remap_mask(m, m.origin_x, oy, m.width, m.height, |i, j| (i, m.height - 1 - j))
            }),
        })
        .collect();
    (out, anns)
}

/// Quarter turn clockwise: pixel `(x, y)` maps to `(H − y, x)`.
pub fn rot90(fm: &FeatureMap, anns: &[Annotation]) -> (FeatureMap, Vec<Annotation>) {
    let (_, h) = padded(fm);
    let gh = fm.grid_h();
    let out = remap_grid(fm, fm.grid_w(), gh, |r, c| (gh - 1 - c, r));
    let anns = anns
        .iter()
        .map(|a| Annotation {
            bbox: PixelBox::new(h - a.bbox.y_max, a.bbox.x_min, h - a.bbox.y_min, a.bbox.x_max),
            class_id: a.class_id,
            mask: a.mask.as_ref().map(|m| {
                let ox = h as i64 - (m.origin_y + m.height as i64);
                remap_mask(m, ox, m.origin_x, m.height, m.width, |i, j| (j, m.height - 1 - i))
            }),
        })
        .collect();
    (out, anns)
}

/// Sub-grid of `rows × cols` cells starting at cell `(row0, col0)`. Boxes
/// are shifted, clipped, and dropped when less than
/// [`MIN_CROP_AREA_FRACTION`] of their area survives.
pub fn crop(
    fm: &FeatureMap,
    anns: &[Annotation],
    row0: usize,
    col0: usize,
    rows: usize,
    cols: usize,
) -> (FeatureMap, Vec<Annotation>) {
    assert!(row0 + rows <= fm.grid_h() && col0 + cols <= fm.grid_w() && rows > 0 && cols > 0);
    let out = remap_grid(fm, rows, cols, |r, c| (r + row0, c + col0));
    let p = fm.patch_size();
    let (dx, dy) = ((col0 * p) as f64, (row0 * p) as f64);
    let anns = anns
        .iter()
        .filter_map(|a| {
            let moved = a.bbox.translate(-dx, -dy);
            let clipped = moved.clip(cols * p, rows * p)?;
            if clipped.area() < MIN_CROP_AREA_FRACTION * a.bbox.area() {
                return None;
            }
            let mask = a.mask.as_ref().map(|m| {
                let shifted = Mask::new(
                    m.origin_x - (col0 * p) as i64,
                    m.origin_y - (row0 * p) as i64,
                    m.width,
                    m.height,
                    m.bits().to_vec(),
                )
                .expect("mask shape");
                shifted.crop_to(&clipped)
            });
            Some(Annotation {
                bbox: clipped,
                class_id: a.class_id,
                mask,
            })
        })
        .collect();
    (out, anns)
}

/// Random flips, a random quarter-turn rotation (one to three turns) and a
/// random crop keeping 50–100 % of each side, each applied with p = 0.5.
pub fn augment_feature_grid<R: Rng + ?Sized>(
    fm: &FeatureMap,
    anns: &[Annotation],
    flags: &Augmentations,
    rng: &mut R,
) -> (FeatureMap, Vec<Annotation>) {
    let mut cur = (fm.clone(), anns.to_vec());
    if flags.hflip && rng.random_bool(0.5) {
        cur = hflip(&cur.0, &cur.1);
    }
    if flags.vflip && rng.random_bool(0.5) {
        cur = vflip(&cur.0, &cur.1);
    }
    if flags.rot90 && rng.random_bool(0.5) {
        let turns = rng.random_range(1..=3);
        for _ in 0..turns {
            cur = rot90(&cur.0, &cur.1);
        }
    }
    if flags.random_crop && rng.random_bool(0.5) {
        let (gh, gw) = (cur.0.grid_h(), cur.0.grid_w());
        let rows = rng.random_range(min_side(gh)..=gh);
        let cols = rng.random_range(min_side(gw)..=gw);
        let row0 = rng.random_range(0..=gh - rows);
        let col0 = rng.random_range(0..=gw - cols);
        if (rows, cols) != (gh, gw) {
            cur = crop(&cur.0, &cur.1, row0, col0, rows, cols);
        }
    }
    cur
}

fn min_side(n: usize) -> usize {
    ((n as f64 * CROP_SCALE_MIN).ceil() as usize).clamp(1, n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn grid(gh: usize, gw: usize) -> FeatureMap {
        let data = (0..gh * gw * 2).map(|i| i as f32).collect();
        FeatureMap::from_grid(gh, gw, 2, 4, data).unwrap()
    }

    fn anns() -> Vec<Annotation> {
        let b = PixelBox::new(1.5, 2.0, 7.0, 11.0);
        let (ox, oy, w, h) = Mask::envelope(&b);
        let bits = (0..w * h).map(|i| (i * 7) % 3 == 0).collect();
        vec![
            Annotation {
                bbox: b,
                class_id: 1,
                mask: Some(Mask::new(ox, oy, w, h, bits).unwrap()),
            },
            Annotation {
                bbox: PixelBox::new(8.0, 0.0, 12.0, 4.0),
                class_id: 0,
                mask: None,
            },
        ]
    }

    #[test]
    fn flips_are_involutions() {
        let fm = grid(3, 4);
        let a = anns();
        let (f1, a1) = hflip(&fm, &a);
        assert_ne!(f1, fm);
        assert_eq!(hflip(&f1, &a1), (fm.clone(), a.clone()));
        let (f2, a2) = vflip(&fm, &a);
        assert_eq!(vflip(&f2, &a2), (fm, a));
    }

    #[test]
    fn four_quarter_turns_are_identity() {
        let fm = grid(3, 5);
        let a = anns();
        let mut cur = (fm.clone(), a.clone());
        for i in 0..4 {
            cur = rot90(&cur.0, &cur.1);
            if i == 0 {
                assert_eq!((cur.0.grid_h(), cur.0.grid_w()), (5, 3));
            }
        }
        assert_eq!(cur, (fm, a));
    }

    #[test]
    fn rot90_moves_features_with_boxes() {
        // the pooled feature under each box must be preserved by the transform
        let fm = grid(3, 5);
        let a = anns();
        let (rf, ra) = rot90(&fm, &a);
        for (orig, rot) in a.iter().zip(&ra) {
            let p0 = crate::pooling::pool_box_embedding(&fm, &orig.bbox, orig.mask.as_ref())
                .unwrap()
                .embedding;
            let p1 = crate::pooling::pool_box_embedding(&rf, &rot.bbox, rot.mask.as_ref())
                .unwrap()
                .embedding;
            for (x, y) in p0.iter().zip(&p1) {
                assert!((x - y).abs() < 1e-9);
            }
        }
        let (hf, ha) = hflip(&fm, &a);
        let (vf, va) = vflip(&fm, &a);
        for (t, ta) in [(hf, ha), (vf, va)] {
            for (orig, moved) in a.iter().zip(&ta) {
                let p0 = crate::pooling::pool_box_embedding(&fm, &orig.bbox, orig.mask.as_ref())
                    .unwrap()
                    .embedding;
                let p1 = crate::pooling::pool_box_embedding(&t, &moved.bbox, moved.mask.as_ref())
                    .unwrap()
                    .embedding;
                for (x, y) in p0.iter().zip(&p1) {
                    assert!((x - y).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn full_crop_is_identity() {
        let fm = grid(4, 4);
        let a = anns();
        assert_eq!(crop(&fm, &a, 0, 0, 4, 4), (fm, a));
    }

    #[test]
    fn crop_drops_mostly_removed_boxes() {
        let fm = grid(4, 4);
        let a = vec![
            Annotation {
                bbox: PixelBox::new(0.0, 0.0, 10.0, 4.0),
                class_id: 0,
                mask: None,
            },
            Annotation {
                bbox: PixelBox::new(6.0, 6.0, 10.0, 10.0),
                class_id: 1,
                mask: None,
            },
        ];
        // keep cells rows 1..3, cols 2..4: first box keeps nothing, second keeps 2x2 of 4x4
        let (c, ca) = crop(&fm, &a, 1, 2, 3, 2);
        assert_eq!((c.grid_h(), c.grid_w()), (3, 2));
        assert_eq!(ca.len(), 1);
        assert_eq!(ca[0].bbox, PixelBox::new(0.0, 2.0, 2.0, 6.0));
        assert_eq!(c.cell(0, 0), fm.cell(1, 2));
    }

    #[test]
    fn random_augmentation_is_deterministic_and_valid() {
        let fm = FeatureMap::new(5, 7, 2, 4, 18, 27, (0..70).map(|i| i as f32).collect()).unwrap();
        let a = anns();
        for seed in 0..30 {
            let x = augment_feature_grid(&fm, &a, &Augmentations::ALL, &mut ChaCha8Rng::seed_from_u64(seed));
            let y = augment_feature_grid(&fm, &a, &Augmentations::ALL, &mut ChaCha8Rng::seed_from_u64(seed));
            assert_eq!(x, y);
            let (m, boxes) = x;
            assert!(m.grid_h() >= 3 && m.grid_w() >= 3);
            for b in boxes {
                assert!(b.bbox.clip(m.image_w(), m.image_h()) == Some(b.bbox));
                if let Some(mask) = &b.mask {
                    assert!(mask.matches_box(&b.bbox));
                }
            }
        }
        let none = augment_feature_grid(&fm, &a, &Augmentations::NONE, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(none, (fm, a));
    }
}
