//! Brute-force reference implementations and builders shared by the
//! integration tests. Each oracle is written independently of the library
//! code it checks.

#![allow(dead_code)]

use std::path::Path;

use protodetect::{
    Annotation, ClassEntry, ClassRole, ClassTable, Dataset, DatasetManifest, Detection, FeatureMap, ManifestEntry,
    PixelBox, PrototypeSet, Provenance, SplitRole,
};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn table(j: usize, k: usize) -> ClassTable {
    ClassTable::new(
        (0..j)
            .map(|i| ClassEntry {
                name: format!("c{i}"),
                role: if i % 2 == 0 { ClassRole::Novel } else { ClassRole::Base },
            })
            .collect(),
        k,
    )
    .unwrap()
}

pub fn protos(rows: &[Vec<f64>], j: usize) -> PrototypeSet {
    PrototypeSet::from_rows(table(j, rows.len() - j), rows, 0.1, Provenance::Averaged).unwrap()
}

pub fn random_map(rng: &mut ChaCha8Rng, max_grid: usize, max_patch: usize, max_dim: usize) -> FeatureMap {
    let gh = rng.random_range(1..=max_grid);
    let gw = rng.random_range(1..=max_grid);
    let p = rng.random_range(1..=max_patch);
    let dim = rng.random_range(1..=max_dim);
    // image extent anywhere inside the last row/column of patches
    let ih = (gh - 1) * p + rng.random_range(1..=p);
    let iw = (gw - 1) * p + rng.random_range(1..=p);
    let data = (0..gh * gw * dim).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    FeatureMap::new(gh, gw, dim, p, ih, iw, data).unwrap()
}

/// Random box with positive area inside the image; integer or fractional.
pub fn random_box(rng: &mut ChaCha8Rng, w: usize, h: usize) -> PixelBox {
    let integer = rng.random_bool(0.5);
    let pick = |rng: &mut ChaCha8Rng, extent: usize| -> (f64, f64) {
        if integer && extent >= 1 {
            let a = rng.random_range(0..extent);
            let b = rng.random_range(a + 1..=extent);
            (a as f64, b as f64)
        } else {
            let a = rng.random_range(0.0..extent as f64 * 0.95);
            let b = rng.random_range(a + 0.01..=extent as f64);
            (a, b)
        }
    };
    let (x0, x1) = pick(rng, w);
    let (y0, y1) = pick(rng, h);
    PixelBox::new(x0, y0, x1, y1)
}

/// Mean of `value(x, y)` over every pixel of the image, weighting pixel
/// `[x, x+1) × [y, y+1)` by the area it shares with the box.
fn pixel_mean(
    b: &PixelBox,
    iw: usize,
    ih: usize,
    len: usize,
    mut value: impl FnMut(usize, usize) -> Vec<f64>,
) -> Vec<f64> {
    let mut acc = vec![0.0; len];
    let mut total = 0.0;
    for y in 0..ih {
        let dy = (b.y_max.min(y as f64 + 1.0) - b.y_min.max(y as f64)).max(0.0);
        if dy == 0.0 {
            continue;
        }
        for x in 0..iw {
            let dx = (b.x_max.min(x as f64 + 1.0) - b.x_min.max(x as f64)).max(0.0);
            if dx == 0.0 {
                continue;
            }
            let w = dx * dy;
            for (a, v) in acc.iter_mut().zip(value(x, y)) {
                *a += w * v;
            }
            total += w;
        }
    }
    acc.iter().map(|a| a / total).collect()
}

/// Feature map upsampled to pixels by nearest neighbour, averaged over the box.
pub fn pixel_pool(fm: &FeatureMap, b: &PixelBox) -> Vec<f64> {
    let p = fm.patch_size();
    pixel_mean(b, fm.image_w(), fm.image_h(), fm.dim(), |x, y| {
        fm.cell(y / p, x / p).iter().map(|v| *v as f64).collect()
    })
}

/// Per-pixel cosine similarity of the upsampled map against every row,
/// averaged over the box.
pub fn pixel_scores(fm: &FeatureMap, protos: &PrototypeSet, b: &PixelBox) -> Vec<f64> {
    let p = fm.patch_size();
    let rows: Vec<Vec<f64>> = (0..protos.num_rows())
        .map(|r| protos.row(r).iter().map(|v| *v as f64).collect())
        .collect();
    pixel_mean(b, fm.image_w(), fm.image_h(), rows.len(), |x, y| {
        let f: Vec<f64> = fm.cell(y / p, x / p).iter().map(|v| *v as f64).collect();
        let nf = f.iter().map(|v| v * v).sum::<f64>().sqrt();
        rows.iter()
            .map(|r| {
                if nf == 0.0 {
                    return 0.0;
                }
                let nr = r.iter().map(|v| v * v).sum::<f64>().sqrt();
                f.iter().zip(r).map(|(a, b)| a * b).sum::<f64>() / (nf * nr)
            })
            .collect()
    })
}

pub fn ref_iou(a: &PixelBox, b: &PixelBox) -> f64 {
    let iw = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let ih = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = iw * ih;
    let area = |r: &PixelBox| (r.x_max - r.x_min) * (r.y_max - r.y_min);
    let union = area(a) + area(b) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Suppression decided from the full pairwise IoU matrix: a detection
/// survives iff no higher-ranked survivor of its class overlaps it at or
/// above the threshold. Rank: score desc, area asc, input index asc.
pub fn ref_nms(dets: &[Detection], thr: f64) -> Vec<Detection> {
    let n = dets.len();
    let overlap: Vec<Vec<bool>> = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| dets[i].class_id == dets[j].class_id && ref_iou(&dets[i].bbox, &dets[j].bbox) >= thr)
                .collect()
        })
        .collect();
    let area = |d: &Detection| (d.bbox.x_max - d.bbox.x_min) * (d.bbox.y_max - d.bbox.y_min);
    let outranks = |i: usize, j: usize| {
        let (a, b) = (&dets[i], &dets[j]);
        a.score > b.score || (a.score == b.score && (area(a) < area(b) || (area(a) == area(b) && i < j)))
    };
    // repeatedly settle the top-ranked unsettled detection
    let mut state = vec![None::<bool>; n];
    let mut order = Vec::new();
    for _ in 0..n {
        let top = (0..n)
            .filter(|&i| state[i].is_none())
            .find(|&i| (0..n).all(|j| j == i || state[j].is_some() || outranks(i, j)))
            .unwrap();
        let keep = (0..n).all(|j| !(state[j] == Some(true) && overlap[top][j]));
        state[top] = Some(keep);
        if keep {
            order.push(dets[top]);
        }
    }
    order
}

/// AP by sweeping every distinct score threshold: each threshold's detection
/// set is matched from scratch, and the area under the precision envelope is
/// integrated over the observed recall levels.
pub fn ref_ap(dets: &[(usize, Detection)], gt: &[Vec<PixelBox>], thr: f64) -> f64 {
    let num_gt: usize = gt.iter().map(Vec::len).sum();
    if num_gt == 0 {
        return 0.0;
    }
    let mut thresholds: Vec<f64> = dets.iter().map(|(_, d)| d.score).collect();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let mut points = Vec::new();
    for t in thresholds {
        let mut chosen: Vec<&(usize, Detection)> = dets.iter().filter(|(_, d)| d.score >= t).collect();
        chosen.sort_by(|a, b| b.1.score.total_cmp(&a.1.score));
        let mut used: Vec<Vec<bool>> = gt.iter().map(|g| vec![false; g.len()]).collect();
        let mut tp = 0;
        for (img, d) in &chosen {
            let mut best: Option<(usize, f64)> = None;
            for (k, g) in gt[*img].iter().enumerate() {
                let o = ref_iou(&d.bbox, g);
                if !used[*img][k] && o >= thr && best.map_or(true, |(_, bo)| o > bo) {
                    best = Some((k, o));
                }
            }
            if let Some((k, _)) = best {
                used[*img][k] = true;
                tp += 1;
            }
        }
        points.push((tp as f64 / num_gt as f64, tp as f64 / chosen.len() as f64));
    }
    let mut levels: Vec<f64> = points.iter().map(|p| p.0).collect();
    levels.sort_by(f64::total_cmp);
    levels.dedup();
    let mut ap = 0.0;
    let mut prev = 0.0;
    for r in levels {
        let p = points.iter().filter(|q| q.0 >= r).map(|q| q.1).fold(0.0, f64::max);
        ap += (r - prev) * p;
        prev = r;
    }
    ap
}

pub fn manifest(
    images: Vec<(usize, usize, Vec<(PixelBox, usize)>, Vec<PixelBox>)>,
    table: ClassTable,
) -> DatasetManifest {
    DatasetManifest {
        entries: images
            .into_iter()
            .enumerate()
            .map(|(i, (w, h, anns, proposals))| ManifestEntry {
                image_id: format!("img{i:03}"),
                feature_file: format!("img{i:03}.fmap").into(),
                image_h: h,
                image_w: w,
                annotations: anns
                    .into_iter()
                    .map(|(bbox, class_id)| Annotation {
                        bbox,
                        class_id,
                        mask: None,
                    })
                    .collect(),
                proposals,
            })
            .collect(),
        class_table: table,
        split_role: SplitRole::TrainShots,
    }
}

pub fn dataset(maps: Vec<FeatureMap>, anns: Vec<Vec<(PixelBox, usize)>>, table: ClassTable) -> Dataset {
    let images = maps
        .iter()
        .zip(anns)
        .map(|(m, a)| (m.image_w(), m.image_h(), a, vec![]))
        .collect();
    Dataset::new(manifest(images, table), maps).unwrap()
}

/// Grid whose every cell equals `fill(row, col)`.
pub fn grid_map(
    gh: usize,
    gw: usize,
    p: usize,
    dim: usize,
    mut fill: impl FnMut(usize, usize) -> Vec<f32>,
) -> FeatureMap {
    let mut data = Vec::with_capacity(gh * gw * dim);
    for r in 0..gh {
        for c in 0..gw {
            let v = fill(r, c);
            assert_eq!(v.len(), dim);
            data.extend(v);
        }
    }
    FeatureMap::from_grid(gh, gw, dim, p, data).unwrap()
}

pub fn axis(dim: usize, k: usize) -> Vec<f32> {
    let mut v = vec![0.0; dim];
    v[k] = 1.0;
    v
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    d / (na * nb)
}

pub fn read_bytes(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}
