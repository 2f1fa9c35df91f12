//! Seeded synthetic datasets with planted class directions.
//!
//! Every cell of an image's feature grid is a base direction plus isotropic
//! noise: planted object regions use their class direction, everything else
//! uses the image's background-type direction. Annotation boxes extend past
//! the planted region by a margin, so averaged prototypes pick up some
//! background signal. Masks mark the planted region exactly.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::iou;
use crate::io::fmap;
use crate::io::manifest::{AnnotationFile, EntryFile, ManifestFile, MaskFile};
use crate::types::{grid_covers, ClassEntry, ClassRole, ClassTable, FeatureMap, Mask, PixelBox, SplitRole};

const PLACEMENT_ATTEMPTS: usize = 1000;
const DISTRACTOR_ATTEMPTS: usize = 100;
const DISTRACTOR_MAX_IOU: f64 = 0.3;
const JITTER_MIN_IOU: f64 = 0.7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FixtureSpec {
    pub n_classes: usize,
    pub dim: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub patch_size: usize,
    pub image_h: usize,
    pub image_w: usize,
    /// Training images per class, one planted object each.
    pub shots_per_class: usize,
    pub test_images: usize,
    /// Planted objects per test image.
    pub boxes_per_image: usize,
    /// Planted object side length range, in cells.
    pub object_cells: (usize, usize),
    /// Pixels added around each planted region to form its annotation box.
    pub annotation_margin: f64,
    pub distractors_per_image: usize,
    pub jitters_per_object: usize,
    /// Pairwise angle between class directions, in degrees, within (0, 90].
    pub separation_deg: f64,
    /// Norm of the isotropic noise added to every cell.
    pub noise: f64,
    pub background_types: usize,
    /// Scale of the background-type direction in non-object cells.
    pub background_strength: f64,
    pub seed: u64,
}

impl Default for FixtureSpec {
    fn default() -> Self {
        Self {
            n_classes: 4,
            dim: 32,
            grid_h: 16,
            grid_w: 16,
            patch_size: 14,
            image_h: 220,
            image_w: 220,
            shots_per_class: 10,
            test_images: 20,
            boxes_per_image: 3,
            object_cells: (2, 4),
            annotation_margin: 7.0,
            distractors_per_image: 10,
            jitters_per_object: 2,
            separation_deg: 90.0,
            noise: 0.3,
            background_types: 3,
            background_strength: 1.0,
            seed: 0,
        }
    }
}

impl FixtureSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_classes == 0 || self.dim == 0 || self.patch_size == 0 {
            return bad("n_classes, dim and patch_size must be positive".into());
        }
        if !(self.separation_deg > 0.0 && self.separation_deg <= 90.0) {
            return bad(format!(
                "separation_deg must lie in (0, 90], got {}",
                self.separation_deg
            ));
        }
        let needed = self.direction_count();
        if needed > self.dim {
            return bad(format!(
                "{} classes and {} background types at {}° need {needed} orthogonal directions, but dim is {}",
                self.n_classes, self.background_types, self.separation_deg, self.dim
            ));
        }
        if !grid_covers(self.grid_h, self.patch_size, self.image_h)
            || !grid_covers(self.grid_w, self.patch_size, self.image_w)
        {
            return bad("grid does not match the image size and patch size".into());
        }
        let (lo, hi) = self.object_cells;
        if lo == 0 || lo > hi || hi > self.grid_h.min(self.grid_w) {
            return bad(format!("object_cells range ({lo}, {hi}) does not fit the grid"));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite())
            || !(self.annotation_margin.is_finite() && self.annotation_margin >= 0.0)
        {
            return bad("noise and annotation_margin must be non-negative".into());
        }
        Ok(())
    }

    fn direction_count(&self) -> usize {
        let shared = usize::from(self.separation_deg < 90.0);
        self.n_classes + self.background_types + shared
    }
}

/// Paths of a generated fixture.
#[derive(Debug, Clone, PartialEq)]
pub struct FixtureOutput {
    pub train_manifest: PathBuf,
    pub test_manifest: PathBuf,
    pub class_directions: Vec<Vec<f64>>,
}

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        if v.iter().any(|x| *x != 0.0) {
            return unit(v);
        }
    }
}

/// Gram-Schmidt over seeded Gaussian vectors.
fn orthonormal(rng: &mut ChaCha8Rng, count: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(count);
    while basis.len() < count {
        let mut v = random_unit(rng, dim);
        for b in &basis {
            let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            basis.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    basis
}

/// Class directions with pairwise cosine `cos(separation)` and
/// background-type directions orthogonal to all of them.
fn directions(spec: &FixtureSpec, rng: &mut ChaCha8Rng) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let basis = orthonormal(rng, spec.direction_count(), spec.dim);
    let (classes, rest) = basis.split_at(spec.n_classes);
    let (backgrounds, shared) = rest.split_at(spec.background_types);
    let class_dirs = match shared.first() {
        None => classes.to_vec(),
        Some(s) => {
            let c = spec.separation_deg.to_radians().cos();
            let (a, b) = (c.sqrt(), (1.0 - c).sqrt());
            classes
                .iter()
                .map(|e| s.iter().zip(e).map(|(x, y)| a * x + b * y).collect())
                .collect()
        }
    };
    (class_dirs, backgrounds.to_vec())
}

struct Planted {
    class_id: usize,
    /// Cell rectangle: row0, col0, rows, cols.
    cells: (usize, usize, usize, usize),
}

struct Image {
    map: FeatureMap,
    annotations: Vec<(PixelBox, usize, Mask)>,
    proposals: Vec<PixelBox>,
}

fn place(spec: &FixtureSpec, rng: &mut ChaCha8Rng, classes: &[usize]) -> Result<Vec<Planted>> {
    let mut placed: Vec<Planted> = Vec::with_capacity(classes.len());
    // usable cells are those fully inside the image
    let rows_in = spec.image_h / spec.patch_size;
    let cols_in = spec.image_w / spec.patch_size;
    for &class_id in classes {
        let mut ok = false;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let rows = rng.random_range(spec.object_cells.0..=spec.object_cells.1);
            let cols = rng.random_range(spec.object_cells.0..=spec.object_cells.1);
            if rows > rows_in || cols > cols_in {
                continue;
            }
            let r0 = rng.random_range(0..=rows_in - rows);
            let c0 = rng.random_range(0..=cols_in - cols);
            // keep one free cell between planted regions
            let clear = placed.iter().all(|p| {
                let (pr, pc, ph, pw) = p.cells;
                r0 + rows < pr || pr + ph < r0 || c0 + cols < pc || pc + pw < c0
            });
            if clear {
                placed.push(Planted {
                    class_id,
                    cells: (r0, c0, rows, cols),
                });
                ok = true;
                break;
            }
        }
        if !ok {
            return Err(Error::Config(format!(
                "could not place {} objects in a {}x{} grid",
                classes.len(),
                spec.grid_h,
                spec.grid_w
            )));
        }
    }
    Ok(placed)
}

fn render(
    spec: &FixtureSpec,
    rng: &mut ChaCha8Rng,
    class_dirs: &[Vec<f64>],
    bg_dirs: &[Vec<f64>],
    classes: &[usize],
) -> Result<Image> {
    let planted = place(spec, rng, classes)?;
    let bg: Option<&Vec<f64>> = if bg_dirs.is_empty() {
        None
    } else {
        Some(&bg_dirs[rng.random_range(0..bg_dirs.len())])
    };
    let mut owner = vec![None; spec.grid_h * spec.grid_w];
    for (k, p) in planted.iter().enumerate() {
        let (r0, c0, h, w) = p.cells;
        for r in r0..r0 + h {
            for c in c0..c0 + w {
                owner[r * spec.grid_w + c] = Some(k);
            }
        }
    }
    let mut data = Vec::with_capacity(spec.grid_h * spec.grid_w * spec.dim);
    for cell_owner in &owner {
        let noise = random_unit(rng, spec.dim);
        let base: Vec<f64> = match (cell_owner, bg) {
            (Some(k), _) => class_dirs[planted[*k].class_id].clone(),
            (None, Some(b)) => b.iter().map(|x| x * spec.background_strength).collect(),
            (None, None) => vec![0.0; spec.dim],
        };
        data.extend(base.iter().zip(&noise).map(|(b, n)| (b + spec.noise * n) as f32));
    }
    let map = FeatureMap::new(
        spec.grid_h,
        spec.grid_w,
        spec.dim,
        spec.patch_size,
        spec.image_h,
        spec.image_w,
        data,
    )?;

    let p = spec.patch_size as f64;
    let m = spec.annotation_margin;
    let mut annotations = Vec::with_capacity(planted.len());
    for pl in &planted {
        let (r0, c0, h, w) = pl.cells;
        let core = PixelBox::new(c0 as f64 * p, r0 as f64 * p, (c0 + w) as f64 * p, (r0 + h) as f64 * p);
        let bbox = PixelBox::new(core.x_min - m, core.y_min - m, core.x_max + m, core.y_max + m)
            .clip(spec.image_w, spec.image_h)
            .expect("planted region lies inside the image");
        let (ox, oy, mw, mh) = Mask::envelope(&bbox);
        let mut bits = Vec::with_capacity(mw * mh);
        for j in 0..mh {
            for i in 0..mw {
                let (x, y) = ((ox + i as i64) as f64 + 0.5, (oy + j as i64) as f64 + 0.5);
                bits.push(x >= core.x_min && x < core.x_max && y >= core.y_min && y < core.y_max);
            }
        }
        annotations.push((bbox, pl.class_id, Mask::new(ox, oy, mw, mh, bits)?));
    }

    let mut proposals = Vec::new();
    for (gt, _, _) in &annotations {
        proposals.push(*gt);
        let mut made = 0;
        for _ in 0..DISTRACTOR_ATTEMPTS {
            if made == spec.jitters_per_object {
                break;
            }
            let j = |rng: &mut ChaCha8Rng| rng.random_range(-0.15..0.15);
            let (dw, dh) = (gt.width(), gt.height());
            let cand = PixelBox::new(
                gt.x_min + j(rng) * dw,
                gt.y_min + j(rng) * dh,
                gt.x_max + j(rng) * dw,
                gt.y_max + j(rng) * dh,
            );
            if let Some(c) = cand.clip(spec.image_w, spec.image_h) {
                if iou(&c, gt) >= JITTER_MIN_IOU {
                    proposals.push(c);
                    made += 1;
                }
            }
        }
    }
    let (lo, hi) = (spec.object_cells.0 as f64 * p, (spec.object_cells.1 as f64 + 1.0) * p);
    for _ in 0..spec.distractors_per_image {
        for _ in 0..DISTRACTOR_ATTEMPTS {
            let w = rng.random_range(lo..=hi).min(spec.image_w as f64);
            let h = rng.random_range(lo..=hi).min(spec.image_h as f64);
            let x = rng.random_range(0.0..=(spec.image_w as f64 - w));
            let y = rng.random_range(0.0..=(spec.image_h as f64 - h));
            let cand = PixelBox::new(x, y, x + w, y + h);
            if annotations.iter().all(|(gt, _, _)| iou(&cand, gt) < DISTRACTOR_MAX_IOU) {
                proposals.push(cand);
                break;
            }
        }
    }
    proposals.shuffle(rng);
    Ok(Image {
        map,
        annotations,
        proposals,
    })
}

fn class_table(spec: &FixtureSpec) -> ClassTable {
    ClassTable {
        object_classes: (0..spec.n_classes)
            .map(|j| ClassEntry {
                name: format!("class_{j}"),
                role: ClassRole::Novel,
            })
            .collect(),
        background_count: 0,
    }
}

fn write_split(out_dir: &Path, name: &str, role: SplitRole, table: &ClassTable, images: &[Image]) -> Result<PathBuf> {
    let mut entries = Vec::with_capacity(images.len());
    for (i, img) in images.iter().enumerate() {
        let image_id = format!("{name}_{i:04}");
        let rel = format!("features/{image_id}.fmap");
        fmap::write(&out_dir.join(&rel), &img.map)?;
        entries.push(EntryFile {
            image_id,
            feature_file: rel,
            image_h: img.map.image_h(),
            image_w: img.map.image_w(),
            annotations: img
                .annotations
                .iter()
                .map(|(bbox, class_id, mask)| AnnotationFile {
                    bbox: *bbox,
                    class: table.name(*class_id).to_owned(),
                    mask: Some(MaskFile {
                        width: mask.width,
                        height: mask.height,
                        rle: mask.to_rle(),
                    }),
                })
                .collect(),
            proposals: img.proposals.clone(),
        });
    }
    let path = out_dir.join(format!("{name}.json"));
    ManifestFile {
        class_table: table.clone(),
        split_role: role,
        entries,
    }
    .write(&path)?;
    Ok(path)
}

/// Writes `train.json`, `test.json` and their feature files under `out_dir`.
/// Output is a pure function of the fixture spec.
pub fn generate_fixture(spec: &FixtureSpec, out_dir: &Path) -> Result<FixtureOutput> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (class_dirs, bg_dirs) = directions(spec, &mut rng);
    let mut train = Vec::with_capacity(spec.n_classes * spec.shots_per_class);
    for class_id in 0..spec.n_classes {
        for _ in 0..spec.shots_per_class {
            train.push(render(spec, &mut rng, &class_dirs, &bg_dirs, &[class_id])?);
        }
    }
    let mut test = Vec::with_capacity(spec.test_images);
    for i in 0..spec.test_images {
        let classes: Vec<usize> = (0..spec.boxes_per_image)
            .map(|k| (i * spec.boxes_per_image + k) % spec.n_classes)
            .collect();
        test.push(render(spec, &mut rng, &class_dirs, &bg_dirs, &classes)?);
    }
    let table = class_table(spec);
    let train_manifest = write_split(out_dir, "train", SplitRole::TrainShots, &table, &train)?;
    let test_manifest = write_split(out_dir, "test", SplitRole::Test, &table, &test)?;
    Ok(FixtureOutput {
        train_manifest,
        test_manifest,
        class_directions: class_dirs,
    })
}
