//! Shared data model: feature grids, pixel boxes, annotations, class tables
//! and prototype sets.
//!
//! Everything here is immutable after construction. Class identity is a dense
//! index in memory; names only appear in files and are resolved through the
//! [`ClassTable`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense grid of per-patch embeddings for one image.
///
/// Cell `(r, c)` covers the pixel footprint
/// `[c·p, (c+1)·p) × [r·p, (r+1)·p)`; the grid may extend past the image on
/// the bottom and right edges by less than one patch.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    grid_h: usize,
    grid_w: usize,
    dim: usize,
    patch_size: usize,
    image_h: usize,
    image_w: usize,
    data: Vec<f32>,
}

impl FeatureMap {
    pub fn new(
        grid_h: usize,
        grid_w: usize,
        dim: usize,
        patch_size: usize,
        image_h: usize,
        image_w: usize,
        data: Vec<f32>,
    ) -> Result<Self> {
        if dim == 0 || patch_size == 0 || grid_h == 0 || grid_w == 0 {
            return Err(Error::Invalid(format!(
                "feature map dimensions must be positive (grid {grid_h}x{grid_w}, dim {dim}, patch {patch_size})"
            )));
        }
        if !grid_covers(grid_h, patch_size, image_h) || !grid_covers(grid_w, patch_size, image_w) {
            return Err(Error::Invalid(format!(
                "grid {grid_h}x{grid_w} with patch {patch_size} does not tile image {image_h}x{image_w}"
            )));
        }
        let expected = grid_h * grid_w * dim;
        if data.len() != expected {
            return Err(Error::DimensionMismatch {
                expected,
                actual: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("feature map contains non-finite values".into()));
        }
        Ok(Self {
            grid_h,
            grid_w,
            dim,
            patch_size,
            image_h,
            image_w,
            data,
        })
    }

    /// Feature map whose image extent is exactly the grid's pixel extent.
    pub fn from_grid(grid_h: usize, grid_w: usize, dim: usize, patch_size: usize, data: Vec<f32>) -> Result<Self> {
        Self::new(
            grid_h,
            grid_w,
            dim,
            patch_size,
            grid_h * patch_size,
            grid_w * patch_size,
            data,
        )
    }

    pub fn grid_h(&self) -> usize {
        self.grid_h
    }
    pub fn grid_w(&self) -> usize {
        self.grid_w
    }
    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn patch_size(&self) -> usize {
        self.patch_size
    }
    pub fn image_h(&self) -> usize {
        self.image_h
    }
    pub fn image_w(&self) -> usize {
        self.image_w
    }
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn cell(&self, row: usize, col: usize) -> &[f32] {
        let start = (row * self.grid_w + col) * self.dim;
        &self.data[start..start + self.dim]
    }

    pub fn image_rect(&self) -> PixelBox {
        PixelBox::image(self.image_w, self.image_h)
    }
}

/// `grid·p ≥ extent` and `(grid−1)·p < extent`.
pub fn grid_covers(grid: usize, patch: usize, extent: usize) -> bool {
    extent > 0 && grid * patch >= extent && (grid - 1) * patch < extent
}

/// Number of patches needed to tile `extent` pixels.
pub fn grid_extent(extent: usize, patch: usize) -> usize {
    extent.div_ceil(patch)
}

/// Axis-aligned box in continuous pixel coordinates, half-open
/// `[x_min, x_max) × [y_min, y_max)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct PixelBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl From<[f64; 4]> for PixelBox {
    fn from(v: [f64; 4]) -> Self {
        PixelBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<PixelBox> for [f64; 4] {
    fn from(b: PixelBox) -> Self {
        [b.x_min, b.y_min, b.x_max, b.y_max]
    }
}

impl PixelBox {
    pub const fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Self {
        Self {
            x_min,
            y_min,
            x_max,
            y_max,
        }
    }

    pub fn image(width: usize, height: usize) -> Self {
        Self::new(0.0, 0.0, width as f64, height as f64)
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    /// Zero for inverted or empty boxes.
    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn is_finite(&self) -> bool {
        self.x_min.is_finite() && self.y_min.is_finite() && self.x_max.is_finite() && self.y_max.is_finite()
    }

    pub fn is_valid(&self) -> bool {
        self.is_finite() && self.x_min < self.x_max && self.y_min < self.y_max
    }

    pub fn intersection(&self, other: &PixelBox) -> Option<PixelBox> {
        let b = PixelBox::new(
            self.x_min.max(other.x_min),
            self.y_min.max(other.y_min),
            self.x_max.min(other.x_max),
            self.y_max.min(other.y_max),
        );
        (b.x_min < b.x_max && b.y_min < b.y_max).then_some(b)
    }

    pub fn intersection_area(&self, other: &PixelBox) -> f64 {
        self.intersection(other).map_or(0.0, |b| b.area())
    }

    /// Clips to `[0, width) × [0, height)`. Returns `None` when nothing of
    /// the box remains inside the image.
    pub fn clip(&self, width: usize, height: usize) -> Option<PixelBox> {
        self.intersection(&PixelBox::image(width, height))
    }

    pub fn translate(&self, dx: f64, dy: f64) -> PixelBox {
        PixelBox::new(self.x_min + dx, self.y_min + dy, self.x_max + dx, self.y_max + dy)
    }
}

/// Binary foreground mask anchored at the integer pixel `(origin_x, origin_y)`.
/// Pixel `(i, j)` of the mask covers `[origin_x+i, origin_x+i+1) × [origin_y+j, origin_y+j+1)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub origin_x: i64,
    pub origin_y: i64,
    pub width: usize,
    pub height: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn new(origin_x: i64, origin_y: i64, width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != width * height {
            return Err(Error::DimensionMismatch {
                expected: width * height,
                actual: bits.len(),
            });
        }
        Ok(Self {
            origin_x,
            origin_y,
            width,
            height,
            bits,
        })
    }

    /// Mask of all-foreground pixels covering the integer envelope of `b`.
    pub fn full_for(b: &PixelBox) -> Self {
        let (ox, oy, w, h) = Self::envelope(b);
        Self {
            origin_x: ox,
            origin_y: oy,
            width: w,
            height: h,
            bits: vec![true; w * h],
        }
    }

    /// Integer pixel envelope `(origin_x, origin_y, width, height)` of a box.
    pub fn envelope(b: &PixelBox) -> (i64, i64, usize, usize) {
        let ox = b.x_min.floor() as i64;
        let oy = b.y_min.floor() as i64;
        let w = (b.x_max.ceil() as i64 - ox).max(0) as usize;
        let h = (b.y_max.ceil() as i64 - oy).max(0) as usize;
        (ox, oy, w, h)
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.bits[j * self.width + i]
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn foreground_count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn matches_box(&self, b: &PixelBox) -> bool {
        Self::envelope(b) == (self.origin_x, self.origin_y, self.width, self.height)
    }

    /// Restricts the mask to the integer envelope of `b`, which must lie
    /// inside the current extent.
    pub fn crop_to(&self, b: &PixelBox) -> Mask {
        let (ox, oy, w, h) = Self::envelope(b);
        let mut bits = Vec::with_capacity(w * h);
        for j in 0..h {
            for i in 0..w {
                let si = ox + i as i64 - self.origin_x;
                let sj = oy + j as i64 - self.origin_y;
                let inside = si >= 0 && sj >= 0 && (si as usize) < self.width && (sj as usize) < self.height;
                bits.push(inside && self.get(si as usize, sj as usize));
            }
        }
        Mask {
            origin_x: ox,
            origin_y: oy,
            width: w,
            height: h,
            bits,
        }
    }

    /// Run-length encoding: comma-separated run lengths over the row-major
    /// bit sequence, alternating background/foreground, starting with a
    /// (possibly zero) background run.
    pub fn to_rle(&self) -> String {
        let mut runs = Vec::new();
        let mut current = false;
        let mut len = 0usize;
        for &b in &self.bits {
            if b == current {
                len += 1;
            } else {
                runs.push(len);
                current = b;
                len = 1;
            }
        }
        runs.push(len);
        runs.iter().map(|r| r.to_string()).collect::<Vec<_>>().join(",")
    }

    pub fn from_rle(origin_x: i64, origin_y: i64, width: usize, height: usize, rle: &str) -> Result<Self> {
        let mut bits = Vec::with_capacity(width * height);
        let mut value = false;
        for tok in rle.split(',').map(str::trim).filter(|t| !t.is_empty()) {
            let n: usize = tok
                .parse()
                .map_err(|_| Error::Invalid(format!("bad mask run length `{tok}`")))?;
            bits.extend(std::iter::repeat_n(value, n));
            value = !value;
        }
        Self::new(origin_x, origin_y, width, height, bits)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Annotation {
    pub bbox: PixelBox,
    pub class_id: usize,
    pub mask: Option<Mask>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassRole {
    Base,
    Novel,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassEntry {
    pub name: String,
    pub role: ClassRole,
}

/// Ordered object classes followed by `background_count` anonymous
/// background clusters. Row `j < J` is object class `j`; row `J + k` is
/// background cluster `k`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassTable {
    pub object_classes: Vec<ClassEntry>,
    pub background_count: usize,
}

impl ClassTable {
    pub fn new(object_classes: Vec<ClassEntry>, background_count: usize) -> Result<Self> {
        let table = Self {
            object_classes,
            background_count,
        };
        table.check()?;
        Ok(table)
    }

    pub fn check(&self) -> Result<()> {
        if self.object_classes.is_empty() {
            return Err(Error::Invalid("class table has no object classes".into()));
        }
        for (i, c) in self.object_classes.iter().enumerate() {
            if self.object_classes[..i].iter().any(|o| o.name == c.name) {
                return Err(Error::Invalid(format!("duplicate class name `{}`", c.name)));
            }
        }
        Ok(())
    }

    pub fn num_objects(&self) -> usize {
        self.object_classes.len()
    }

    pub fn num_background(&self) -> usize {
        self.background_count
    }

    pub fn num_rows(&self) -> usize {
        self.num_objects() + self.background_count
    }

    pub fn is_background_row(&self, row: usize) -> bool {
        row >= self.num_objects()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.object_classes.iter().position(|c| c.name == name)
    }

    pub fn name(&self, class_id: usize) -> &str {
        &self.object_classes[class_id].name
    }

    pub fn row_label(&self, row: usize) -> String {
        if row < self.num_objects() {
            self.object_classes[row].name.clone()
        } else {
            format!("bg_{}", row - self.num_objects())
        }
    }

    pub fn with_background(&self, background_count: usize) -> Self {
        Self {
            object_classes: self.object_classes.clone(),
            background_count,
        }
    }

    pub fn ids_with_role(&self, role: ClassRole) -> Vec<usize> {
        (0..self.num_objects())
            .filter(|&j| self.object_classes[j].role == role)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Averaged,
    Finetuned,
}

/// `J` object rows followed by `K` background rows, each of unit L2 norm.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeSet {
    class_table: ClassTable,
    dim: usize,
    temperature: f64,
    provenance: Provenance,
    vectors: Vec<f32>,
}

pub const DEFAULT_TEMPERATURE: f64 = 0.1;

impl PrototypeSet {
    /// Normalizes every row in double precision before narrowing to `f32`.
    pub fn from_rows(
        class_table: ClassTable,
        rows: &[Vec<f64>],
        temperature: f64,
        provenance: Provenance,
    ) -> Result<Self> {
        if rows.len() != class_table.num_rows() {
            return Err(Error::DimensionMismatch {
                expected: class_table.num_rows(),
                actual: rows.len(),
            });
        }
        let dim = rows.first().map_or(0, Vec::len);
        if dim == 0 {
            return Err(Error::Invalid("prototype dimension must be positive".into()));
        }
        let mut vectors = Vec::with_capacity(rows.len() * dim);
        for (r, row) in rows.iter().enumerate() {
            if row.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    actual: row.len(),
                });
            }
            let unit = normalized(row).ok_or_else(|| Error::DegeneratePrototype(class_table.row_label(r)))?;
            vectors.extend(unit.iter().map(|v| *v as f32));
        }
        Self::from_raw(class_table, dim, temperature, provenance, vectors)
    }

    /// Takes already-normalized `f32` rows verbatim (used when loading files).
    pub fn from_raw(
        class_table: ClassTable,
        dim: usize,
        temperature: f64,
        provenance: Provenance,
        vectors: Vec<f32>,
    ) -> Result<Self> {
        class_table.check()?;
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::Config(format!(
                "temperature must be positive, got {temperature}"
            )));
        }
        if dim == 0 || vectors.len() != class_table.num_rows() * dim {
            return Err(Error::DimensionMismatch {
                expected: class_table.num_rows() * dim,
                actual: vectors.len(),
            });
        }
        for (r, row) in vectors.chunks_exact(dim).enumerate() {
            let n = norm_f32(row);
            if !n.is_finite() || (n - 1.0).abs() > 1e-4 {
                return Err(Error::Invalid(format!(
                    "prototype row {} ({}) has norm {n}, expected 1",
                    r,
                    class_table.row_label(r)
                )));
            }
        }
        Ok(Self {
            class_table,
            dim,
            temperature,
            provenance,
            vectors,
        })
    }

    pub fn class_table(&self) -> &ClassTable {
        &self.class_table
    }
    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn temperature(&self) -> f64 {
        self.temperature
    }
    pub fn provenance(&self) -> Provenance {
        self.provenance
    }
    pub fn vectors(&self) -> &[f32] {
        &self.vectors
    }
    pub fn num_rows(&self) -> usize {
        self.class_table.num_rows()
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.vectors[r * self.dim..(r + 1) * self.dim]
    }

    pub fn rows_f64(&self) -> Vec<Vec<f64>> {
        self.vectors
            .chunks_exact(self.dim)
            .map(|r| r.iter().map(|v| *v as f64).collect())
            .collect()
    }

    pub fn object_rows_f64(&self) -> Vec<Vec<f64>> {
        let mut rows = self.rows_f64();
        rows.truncate(self.class_table.num_objects());
        rows
    }

    pub fn with_temperature(mut self, temperature: f64) -> Result<Self> {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::Config(format!(
                "temperature must be positive, got {temperature}"
            )));
        }
        self.temperature = temperature;
        Ok(self)
    }

    /// Replaces all background rows with `background`.
    pub fn with_background_rows(&self, background: &[Vec<f64>]) -> Result<Self> {
        let mut rows = self.object_rows_f64();
        rows.extend(background.iter().cloned());
        Self::from_rows(
            self.class_table.with_background(background.len()),
            &rows,
            self.temperature,
            self.provenance,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "box")]
    pub bbox: PixelBox,
    pub class_id: usize,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitRole {
    TrainShots,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub image_id: String,
    pub feature_file: std::path::PathBuf,
    pub image_h: usize,
    pub image_w: usize,
    pub annotations: Vec<Annotation>,
    pub proposals: Vec<PixelBox>,
}

/// Resolved, clipped in-memory manifest. Produced from the file form by
/// [`crate::io::manifest::ManifestFile::resolve`].
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub class_table: ClassTable,
    pub split_role: SplitRole,
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn norm_f32(a: &[f32]) -> f64 {
    a.iter().map(|v| (*v as f64) * (*v as f64)).sum::<f64>().sqrt()
}

/// `None` for zero-norm or non-finite vectors.
pub fn normalized(a: &[f64]) -> Option<Vec<f64>> {
    let n = norm(a);
    (n > 0.0 && n.is_finite()).then(|| a.iter().map(|v| v / n).collect())
}
