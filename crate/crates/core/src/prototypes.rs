//! Object prototypes from annotated shots and background prototypes from
//! clustered object-free crops.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::kmeans::{kmeans, KMeansResult, DEFAULT_MAX_ITERS, DEFAULT_TOL};
use crate::pooling::pool_box_embedding;
use crate::types::{normalized, Annotation, PixelBox, PrototypeSet, Provenance, DEFAULT_TEMPERATURE};

pub const DEFAULT_BACKGROUND_K: usize = 200;
pub const DEFAULT_CROPS_PER_IMAGE: usize = 10;
pub const MAX_CROP_ATTEMPTS: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectPrototypeOptions {
    /// Pool with annotation masks where present.
    pub use_masks: bool,
    pub temperature: f64,
}

impl Default for ObjectPrototypeOptions {
    fn default() -> Self {
        Self {
            use_masks: false,
            temperature: DEFAULT_TEMPERATURE,
        }
    }
}

/// Pooled embedding of every annotation, grouped by class, in manifest order.
pub fn pooled_shots(ds: &Dataset, use_masks: bool) -> Result<Vec<Vec<Vec<f64>>>> {
    let per_image: Vec<Vec<(usize, Vec<f64>)>> = ds
        .manifest
        .entries
        .par_iter()
        .zip(&ds.maps)
        .map(|(entry, fm)| {
            entry
                .annotations
                .iter()
                .map(|a| {
                    let mask = if use_masks { a.mask.as_ref() } else { None };
                    let pooled = pool_box_embedding(fm, &a.bbox, mask)?;
                    if pooled.mask_fallback {
                        log::warn!(
                            "[{}] class `{}`: empty mask, used the full box",
                            entry.image_id,
                            ds.manifest.class_table.name(a.class_id)
                        );
                    }
                    Ok((a.class_id, pooled.embedding))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let mut by_class = vec![Vec::new(); ds.manifest.class_table.num_objects()];
    for (class_id, e) in per_image.into_iter().flatten() {
        by_class[class_id].push(e);
    }
    Ok(by_class)
}

/// One row per object class: mean of the per-box mean embeddings of its
/// shots, L2-normalized. The result has no background rows.
pub fn build_object_prototypes(ds: &Dataset, opts: ObjectPrototypeOptions) -> Result<PrototypeSet> {
    let table = ds.manifest.class_table.with_background(0);
    let by_class = pooled_shots(ds, opts.use_masks)?;
    let mut rows = Vec::with_capacity(by_class.len());
    for (j, shots) in by_class.iter().enumerate() {
        let name = table.name(j);
        let Some(first) = shots.first() else {
            return Err(Error::MissingShots(name.to_owned()));
        };
        let mut mean = vec![0.0f64; first.len()];
        for s in shots {
            for (m, v) in mean.iter_mut().zip(s) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= shots.len() as f64);
        if normalized(&mean).is_none() {
            return Err(Error::DegeneratePrototype(name.to_owned()));
        }
        rows.push(mean);
    }
    PrototypeSet::from_rows(table, &rows, opts.temperature, Provenance::Averaged)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CropSample {
    pub image_index: usize,
    pub image_id: String,
    pub bbox: PixelBox,
    pub embedding: Vec<f64>,
}

/// Uniform ranges for crop width and height, in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CropSizeRange {
    pub width: (f64, f64),
    pub height: (f64, f64),
}

impl CropSizeRange {
    /// Empirical range of annotation sizes across the dataset. Without any
    /// annotation, falls back to one patch up to half the smallest image side.
    pub fn from_dataset(ds: &Dataset) -> Self {
        let mut w = (f64::INFINITY, 0.0f64);
        let mut h = (f64::INFINITY, 0.0f64);
        for a in ds.manifest.entries.iter().flat_map(|e| &e.annotations) {
            w = (w.0.min(a.bbox.width()), w.1.max(a.bbox.width()));
            h = (h.0.min(a.bbox.height()), h.1.max(a.bbox.height()));
        }
        if w.0.is_finite() {
            return Self { width: w, height: h };
        }
        let patch = ds.maps.iter().map(|m| m.patch_size()).min().unwrap_or(1) as f64;
        let side = ds
            .manifest
            .entries
            .iter()
            .map(|e| e.image_w.min(e.image_h))
            .min()
            .unwrap_or(1) as f64;
        let hi = (side / 2.0).max(patch.min(side));
        let lo = patch.min(hi);
        Self {
            width: (lo, hi),
            height: (lo, hi),
        }
    }

    fn draw(range: (f64, f64), rng: &mut ChaCha8Rng) -> f64 {
        if range.1 > range.0 {
            rng.random_range(range.0..=range.1)
        } else {
            range.0
        }
    }
}

/// Up to `count` boxes inside a `width × height` image with zero
/// intersection with every obstacle, each found within
/// [`MAX_CROP_ATTEMPTS`] rejection-sampling draws.
pub fn sample_free_boxes(
    rng: &mut ChaCha8Rng,
    width: usize,
    height: usize,
    obstacles: &[PixelBox],
    sizes: &CropSizeRange,
    count: usize,
) -> Vec<PixelBox> {
    let (iw, ih) = (width as f64, height as f64);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        for _ in 0..MAX_CROP_ATTEMPTS {
            let w = CropSizeRange::draw(sizes.width, rng).clamp(1.0_f64.min(iw), iw);
            let h = CropSizeRange::draw(sizes.height, rng).clamp(1.0_f64.min(ih), ih);
            let x = if iw > w { rng.random_range(0.0..iw - w) } else { 0.0 };
            let y = if ih > h { rng.random_range(0.0..ih - h) } else { 0.0 };
            let b = PixelBox::new(x, y, x + w, y + h);
            if obstacles.iter().all(|o| b.intersection_area(o) == 0.0) {
                out.push(b);
                break;
            }
        }
    }
    out
}

fn annotation_boxes(annotations: &[Annotation]) -> Vec<PixelBox> {
    annotations.iter().map(|a| a.bbox).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CropSampling {
    pub crops: Vec<CropSample>,
    /// Human-readable notes about images that yielded no crops.
    pub diagnostics: Vec<String>,
}

/// Object-free crops from every image, deterministic in `seed`. Each image
/// draws from its own stream of the seeded generator, so results do not
/// depend on scheduling.
pub fn sample_background_crops(ds: &Dataset, crops_per_image: usize, seed: u64) -> Result<CropSampling> {
    let sizes = CropSizeRange::from_dataset(ds);
    let per_image = ds
        .manifest
        .entries
        .par_iter()
        .zip(&ds.maps)
        .enumerate()
        .map(|(i, (entry, fm))| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let obstacles = annotation_boxes(&entry.annotations);
            sample_free_boxes(
                &mut rng,
                entry.image_w,
                entry.image_h,
                &obstacles,
                &sizes,
                crops_per_image,
            )
            .into_iter()
            .map(|b| {
                Ok(CropSample {
                    image_index: i,
                    image_id: entry.image_id.clone(),
                    bbox: b,
                    embedding: pool_box_embedding(fm, &b, None)?.embedding,
                })
            })
            .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let mut diagnostics = Vec::new();
    for (entry, crops) in ds.manifest.entries.iter().zip(&per_image) {
        if crops_per_image > 0 && crops.is_empty() {
            diagnostics.push(format!("[{}] no object-free crop found; image skipped", entry.image_id));
        }
    }
    for d in &diagnostics {
        log::warn!("{d}");
    }
    Ok(CropSampling {
        crops: per_image.into_iter().flatten().collect(),
        diagnostics,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackgroundPrototypes {
    /// Unit-norm rows, one per cluster.
    pub rows: Vec<Vec<f64>>,
    pub clustering: KMeansResult,
    pub diagnostics: Vec<String>,
}

/// K-Means over crop embeddings; each cluster mean becomes one normalized
/// background row.
pub fn build_background_prototypes(crops: &[CropSample], k: usize, seed: u64) -> Result<BackgroundPrototypes> {
    if crops.is_empty() {
        return Err(Error::Invalid("no background crops to cluster".into()));
    }
    let points: Vec<Vec<f64>> = crops.iter().map(|c| c.embedding.clone()).collect();
    let clustering = kmeans(&points, k, seed, DEFAULT_MAX_ITERS, DEFAULT_TOL)?;
    let mut diagnostics = Vec::new();
    if let Some(req) = clustering.reduced_from {
        diagnostics.push(format!(
            "requested {req} background prototypes but only {} crops are available; using {}",
            crops.len(),
            clustering.centroids.len()
        ));
    }
    let rows = clustering
        .centroids
        .iter()
        .enumerate()
        .map(|(c, centroid)| normalized(centroid).ok_or_else(|| Error::DegeneratePrototype(format!("bg_{c}"))))
        .collect::<Result<Vec<_>>>()?;
    Ok(BackgroundPrototypes {
        rows,
        clustering,
        diagnostics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{ClassEntry, ClassRole, ClassTable, DatasetManifest, FeatureMap, ManifestEntry, SplitRole};

    pub(crate) fn dataset(maps: Vec<FeatureMap>, annotations: Vec<Vec<(PixelBox, usize)>>, classes: usize) -> Dataset {
        let table = ClassTable::new(
            (0..classes)
                .map(|j| ClassEntry {
                    name: format!("class{j}"),
                    role: ClassRole::Novel,
                })
                .collect(),
            0,
        )
        .unwrap();
        let entries = maps
            .iter()
            .zip(annotations)
            .enumerate()
            .map(|(i, (fm, anns))| ManifestEntry {
                image_id: format!("img{i}"),
                feature_file: format!("img{i}.fmap").into(),
                image_h: fm.image_h(),
                image_w: fm.image_w(),
                annotations: anns
                    .into_iter()
                    .map(|(b, c)| Annotation {
                        bbox: b,
                        class_id: c,
                        mask: None,
                    })
                    .collect(),
                proposals: vec![],
            })
            .collect();
        Dataset::new(
            DatasetManifest {
                entries,
                class_table: table,
                split_role: SplitRole::TrainShots,
            },
            maps,
        )
        .unwrap()
    }

    fn constant_map(v: &[f32], g: usize, p: usize) -> FeatureMap {
        let data = v.iter().copied().cycle().take(g * g * v.len()).collect();
        FeatureMap::from_grid(g, g, v.len(), p, data).unwrap()
    }

    #[test]
    fn single_shot_prototype_is_normalized_vector() {
        let ds = dataset(
            vec![constant_map(&[3.0, 0.0, 4.0], 4, 8)],
            vec![vec![(PixelBox::new(2.0, 2.0, 20.0, 9.0), 0)]],
            1,
        );
        let p = build_object_prototypes(&ds, ObjectPrototypeOptions::default()).unwrap();
        assert_eq!(p.row(0), &[0.6f32, 0.0, 0.8]);
        assert_eq!(p.class_table().num_background(), 0);
        assert_eq!(p.provenance(), Provenance::Averaged);
    }

    #[test]
    fn cancelling_shots_are_degenerate() {
        let ds = dataset(
            vec![constant_map(&[1.0, -2.0], 2, 4), constant_map(&[-1.0, 2.0], 2, 4)],
            vec![
                vec![(PixelBox::new(0.0, 0.0, 4.0, 4.0), 0)],
                vec![(PixelBox::new(0.0, 0.0, 8.0, 8.0), 0)],
            ],
            1,
        );
        assert!(matches!(
            build_object_prototypes(&ds, ObjectPrototypeOptions::default()),
            Err(Error::DegeneratePrototype(_))
        ));
    }

    #[test]
    fn class_without_shots_is_named() {
        let ds = dataset(
            vec![constant_map(&[1.0, 0.0], 2, 4)],
            vec![vec![(PixelBox::new(0.0, 0.0, 4.0, 4.0), 0)]],
            2,
        );
        match build_object_prototypes(&ds, ObjectPrototypeOptions::default()) {
            Err(Error::MissingShots(name)) => assert_eq!(name, "class1"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn crops_on_empty_and_covered_images() {
        let ds = dataset(
            vec![constant_map(&[1.0, 0.0], 4, 8), constant_map(&[1.0, 0.0], 4, 8)],
            vec![vec![], vec![(PixelBox::new(0.0, 0.0, 32.0, 32.0), 0)]],
            1,
        );
        let s = sample_background_crops(&ds, 7, 3).unwrap();
        assert_eq!(s.crops.iter().filter(|c| c.image_index == 0).count(), 7);
        assert_eq!(s.crops.iter().filter(|c| c.image_index == 1).count(), 0);
        assert_eq!(s.diagnostics.len(), 1);
        assert!(s.diagnostics[0].contains("img1"));
    }

    #[test]
    fn crops_avoid_annotations_and_are_deterministic() {
        let anns = vec![
            (PixelBox::new(0.0, 0.0, 10.0, 12.0), 0),
            (PixelBox::new(30.0, 30.0, 42.0, 40.0), 0),
        ];
        let ds = dataset(vec![constant_map(&[1.0, 2.0], 8, 8)], vec![anns.clone()], 1);
        let a = sample_background_crops(&ds, 20, 99).unwrap();
        let b = sample_background_crops(&ds, 20, 99).unwrap();
        assert_eq!(a, b);
        assert!(!a.crops.is_empty());
        for c in &a.crops {
            for (o, _) in &anns {
                assert_eq!(c.bbox.intersection_area(o), 0.0);
            }
            assert!(c.bbox.width() >= 10.0 - 1e-9 && c.bbox.width() <= 12.0 + 1e-9);
            assert!(c.bbox.height() >= 10.0 - 1e-9 && c.bbox.height() <= 12.0 + 1e-9);
        }
        assert_ne!(a, sample_background_crops(&ds, 20, 100).unwrap());
    }

    fn crop(e: Vec<f64>) -> CropSample {
        CropSample {
            image_index: 0,
            image_id: "x".into(),
            bbox: PixelBox::new(0.0, 0.0, 1.0, 1.0),
            embedding: e,
        }
    }

    #[test]
    fn single_crop_single_cluster() {
        let bg = build_background_prototypes(&[crop(vec![0.0, -2.0, 0.0])], 1, 0).unwrap();
        assert_eq!(bg.rows, vec![vec![0.0, -1.0, 0.0]]);
    }

    #[test]
    fn k_reduced_to_crop_count() {
        let crops: Vec<CropSample> = (0..40).map(|i| crop(vec![1.0, i as f64])).collect();
        let bg = build_background_prototypes(&crops, 200, 1).unwrap();
        assert_eq!(bg.rows.len(), 40);
        assert_eq!(bg.diagnostics.len(), 1);
        assert!(build_background_prototypes(&[], 3, 0).is_err());
    }

    #[test]
    fn clustered_crops_recover_cluster_directions() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let dirs = [
            vec![1.0, 0.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0, 0.0],
            vec![0.0, 0.0, 0.0, 1.0],
        ];
        let mut crops = Vec::new();
        let mut sums = vec![vec![0.0; 4]; 3];
        for i in 0..90 {
            let c = i % 3;
            let e: Vec<f64> = dirs[c]
                .iter()
                .map(|d| 5.0 * d + rng.random_range(-0.05..0.05))
                .collect();
            for (s, v) in sums[c].iter_mut().zip(&e) {
                *s += v;
            }
            crops.push(crop(e));
        }
        let bg = build_background_prototypes(&crops, 3, 4).unwrap();
        for s in &sums {
            let target = normalized(s).unwrap();
            let best = bg
                .rows
                .iter()
                .map(|r| crate::types::dot(r, &target).clamp(-1.0, 1.0).acos())
                .fold(f64::INFINITY, f64::min);
            assert!(best < 1e-3, "angle {best}");
        }
    }
}
