//! Manifest JSON and its validation.
//!
//! ```json
//! {
//!   "class_table": {"object_classes": [{"name": "plane", "role": "novel"}], "background_count": 0},
//!   "split_role": "train_shots",
//!   "entries": [{
//!     "image_id": "img_000",
//!     "feature_file": "features/img_000.fmap",
//!     "image_h": 224, "image_w": 224,
//!     "annotations": [{"box": [10, 12, 50, 40], "class": "plane",
//!                      "mask": {"width": 40, "height": 28, "rle": "0,1120"}}],
//!     "proposals": [[0, 0, 64, 64]]
//!   }]
//! }
//! ```
//!
//! Feature paths are relative to the manifest's directory. A mask covers the
//! integer pixel envelope of its annotation box as written in the file.

use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::fmap;
use crate::types::{Annotation, ClassTable, DatasetManifest, ManifestEntry, Mask, PixelBox, SplitRole};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskFile {
    pub width: usize,
    pub height: usize,
    pub rle: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationFile {
    #[serde(rename = "box")]
    pub bbox: PixelBox,
    pub class: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<MaskFile>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntryFile {
    pub image_id: String,
    pub feature_file: String,
    pub image_h: usize,
    pub image_w: usize,
    #[serde(default)]
    pub annotations: Vec<AnnotationFile>,
    #[serde(default)]
    pub proposals: Vec<PixelBox>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestFile {
    pub class_table: ClassTable,
    pub split_role: SplitRole,
    pub entries: Vec<EntryFile>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Rule {
    EmptyClassTable,
    DuplicateClass,
    DuplicateImage,
    EmptyImage,
    DegenerateBox,
    BoxOutsideImage,
    UnknownClass,
    InvalidMask,
    UnreadableFeatureFile,
    FeatureShapeMismatch,
}

impl Rule {
    fn label(self) -> &'static str {
        match self {
            Rule::EmptyClassTable => "empty class table",
            Rule::DuplicateClass => "duplicate class",
            Rule::DuplicateImage => "duplicate image id",
            Rule::EmptyImage => "empty image",
            Rule::DegenerateBox => "degenerate box",
            Rule::BoxOutsideImage => "box outside image",
            Rule::UnknownClass => "unknown class",
            Rule::InvalidMask => "invalid mask",
            Rule::UnreadableFeatureFile => "unreadable feature file",
            Rule::FeatureShapeMismatch => "feature shape mismatch",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Diagnostic {
    /// Image id of the offending entry, `None` for manifest-level problems.
    pub entry: Option<String>,
    pub rule: Rule,
    pub message: String,
    pub fatal: bool,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let level = if self.fatal { "error" } else { "warning" };
        match &self.entry {
            Some(e) => write!(f, "{level}: [{e}] {}: {}", self.rule.label(), self.message),
            None => write!(f, "{level}: {}: {}", self.rule.label(), self.message),
        }
    }
}

fn diag(entry: Option<&str>, rule: Rule, message: String) -> Diagnostic {
    Diagnostic {
        entry: entry.map(str::to_owned),
        rule,
        message,
        fatal: true,
    }
}

fn check_box(entry: &EntryFile, b: &PixelBox, what: &str, out: &mut Vec<Diagnostic>) -> bool {
    let id = Some(entry.image_id.as_str());
    if !b.is_valid() {
        out.push(diag(
            id,
            Rule::DegenerateBox,
            format!("{what} {:?} has no area", <[f64; 4]>::from(*b)),
        ));
        return false;
    }
    if entry.image_w > 0 && entry.image_h > 0 && b.clip(entry.image_w, entry.image_h).is_none() {
        out.push(diag(
            id,
            Rule::BoxOutsideImage,
            format!(
                "{what} {:?} does not intersect the {}x{} image",
                <[f64; 4]>::from(*b),
                entry.image_w,
                entry.image_h
            ),
        ));
        return false;
    }
    true
}

/// Every rule violated by the manifest; empty when it is valid. Feature
/// files are resolved against `base_dir` and only their headers are read.
pub fn validate_manifest(manifest: &ManifestFile, base_dir: &Path) -> Vec<Diagnostic> {
    let mut out = Vec::new();
    let table = &manifest.class_table;
    if table.object_classes.is_empty() {
        out.push(diag(None, Rule::EmptyClassTable, "no object classes declared".into()));
    }
    let mut names = HashSet::new();
    for c in &table.object_classes {
        if !names.insert(c.name.as_str()) {
            out.push(diag(
                None,
                Rule::DuplicateClass,
                format!("class `{}` declared twice", c.name),
            ));
        }
    }
    let mut ids = HashSet::new();
    for entry in &manifest.entries {
        let id = Some(entry.image_id.as_str());
        if !ids.insert(entry.image_id.as_str()) {
            out.push(diag(id, Rule::DuplicateImage, "image id appears more than once".into()));
        }
        if entry.image_h == 0 || entry.image_w == 0 {
            out.push(diag(
                id,
                Rule::EmptyImage,
                format!("image size {}x{}", entry.image_w, entry.image_h),
            ));
        }
        let path = base_dir.join(&entry.feature_file);
        match fmap::read_header(&path) {
            Err(e) => out.push(diag(
                id,
                Rule::UnreadableFeatureFile,
                format!("{}: {e}", path.display()),
            )),
            Ok(h) => {
                if h.image_h as usize != entry.image_h || h.image_w as usize != entry.image_w {
                    out.push(diag(
                        id,
                        Rule::FeatureShapeMismatch,
                        format!(
                            "{} describes a {}x{} image, manifest says {}x{}",
                            path.display(),
                            h.image_w,
                            h.image_h,
                            entry.image_w,
                            entry.image_h
                        ),
                    ));
                }
                let (gh, gw, p) = (h.grid_h as usize, h.grid_w as usize, h.patch_size as usize);
                let tiles = p > 0
                    && gh > 0
                    && gw > 0
                    && crate::types::grid_covers(gh, p, h.image_h as usize)
                    && crate::types::grid_covers(gw, p, h.image_w as usize);
                if !tiles || h.dim == 0 {
                    out.push(diag(
                        id,
                        Rule::FeatureShapeMismatch,
                        format!(
                            "{}: grid {gh}x{gw} (patch {p}, dim {}) does not tile its image",
                            path.display(),
                            h.dim
                        ),
                    ));
                }
            }
        }
        for (i, ann) in entry.annotations.iter().enumerate() {
            let what = format!("annotation {i}");
            if table.index_of(&ann.class).is_none() {
                out.push(diag(
                    id,
                    Rule::UnknownClass,
                    format!("{what} references class `{}` absent from the class table", ann.class),
                ));
            }
            let box_ok = check_box(entry, &ann.bbox, &what, &mut out);
            if let (Some(m), true) = (&ann.mask, box_ok) {
                let (_, _, w, h) = Mask::envelope(&ann.bbox);
                if m.width != w || m.height != h {
                    out.push(diag(
                        id,
                        Rule::InvalidMask,
                        format!("{what} mask is {}x{}, box envelope is {w}x{h}", m.width, m.height),
                    ));
                    continue;
                }
                match Mask::from_rle(0, 0, m.width, m.height, &m.rle) {
                    Err(e) => out.push(diag(id, Rule::InvalidMask, format!("{what}: {e}"))),
                    Ok(mask) if mask.foreground_count() == 0 => out.push(diag(
                        id,
                        Rule::InvalidMask,
                        format!("{what} mask has no foreground pixel"),
                    )),
                    Ok(_) => {}
                }
            }
        }
        for (i, b) in entry.proposals.iter().enumerate() {
            check_box(entry, b, &format!("proposal {i}"), &mut out);
        }
    }
    out
}

impl ManifestFile {
    pub fn read(path: &Path) -> Result<Self> {
        super::read_json(path)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        super::write_json(path, self)
    }

    /// Validates, then resolves class names, joins feature paths onto
    /// `base_dir`, and clips boxes (and masks) to their images.
    pub fn resolve(&self, base_dir: &Path) -> Result<DatasetManifest> {
        let diags = validate_manifest(self, base_dir);
        if diags.iter().any(|d| d.fatal) {
            let msg = diags.iter().map(ToString::to_string).collect::<Vec<_>>().join("\n");
            return Err(Error::Invalid(msg));
        }
        let table = &self.class_table;
        let entries = self
            .entries
            .iter()
            .map(|e| {
                let annotations = e
                    .annotations
                    .iter()
                    .map(|a| {
                        let clipped = a.bbox.clip(e.image_w, e.image_h).expect("validated");
                        let mask = match &a.mask {
                            None => None,
                            Some(m) => {
                                let (ox, oy, _, _) = Mask::envelope(&a.bbox);
                                let full = Mask::from_rle(ox, oy, m.width, m.height, &m.rle)?;
                                Some(full.crop_to(&clipped))
                            }
                        };
                        Ok(Annotation {
                            bbox: clipped,
                            class_id: table.index_of(&a.class).expect("validated"),
                            mask,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(ManifestEntry {
                    image_id: e.image_id.clone(),
                    feature_file: base_dir.join(&e.feature_file),
                    image_h: e.image_h,
                    image_w: e.image_w,
                    annotations,
                    proposals: e
                        .proposals
                        .iter()
                        .map(|b| b.clip(e.image_w, e.image_h).expect("validated"))
                        .collect(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(DatasetManifest {
            entries,
            class_table: table.clone(),
            split_role: self.split_role,
        })
    }
}

/// Directory that relative feature paths of a manifest file resolve against.
pub fn base_dir(manifest_path: &Path) -> PathBuf {
    match manifest_path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

pub fn load(path: &Path) -> Result<DatasetManifest> {
    ManifestFile::read(path)?.resolve(&base_dir(path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{ClassEntry, ClassRole, FeatureMap};
    use proptest::prelude::*;

    fn write_fmap(dir: &Path, name: &str) {
        let fm = FeatureMap::new(4, 4, 2, 16, 64, 64, vec![0.5; 32]).unwrap();
        fmap::write(&dir.join(name), &fm).unwrap();
    }

    fn manifest(boxes: Vec<(PixelBox, &str)>) -> ManifestFile {
        ManifestFile {
            class_table: ClassTable {
                object_classes: vec![ClassEntry {
                    name: "plane".into(),
                    role: ClassRole::Novel,
                }],
                background_count: 0,
            },
            split_role: SplitRole::TrainShots,
            entries: vec![EntryFile {
                image_id: "img0".into(),
                feature_file: "img0.fmap".into(),
                image_h: 64,
                image_w: 64,
                annotations: boxes
                    .into_iter()
                    .map(|(b, c)| AnnotationFile {
                        bbox: b,
                        class: c.into(),
                        mask: None,
                    })
                    .collect(),
                proposals: vec![PixelBox::new(0.0, 0.0, 32.0, 32.0)],
            }],
        }
    }

    #[test]
    fn valid_manifest_has_no_diagnostics() {
        let dir = tempfile::tempdir().unwrap();
        write_fmap(dir.path(), "img0.fmap");
        let m = manifest(vec![(PixelBox::new(1.0, 2.0, 30.0, 40.0), "plane")]);
        assert!(validate_manifest(&m, dir.path()).is_empty());
    }

    #[test]
    fn degenerate_box_is_reported_once() {
        let dir = tempfile::tempdir().unwrap();
        write_fmap(dir.path(), "img0.fmap");
        let m = manifest(vec![(PixelBox::new(5.0, 2.0, 5.0, 40.0), "plane")]);
        let d = validate_manifest(&m, dir.path());
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].rule, Rule::DegenerateBox);
        assert_eq!(d[0].entry.as_deref(), Some("img0"));
    }

    #[test]
    fn unknown_class_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        write_fmap(dir.path(), "img0.fmap");
        let m = manifest(vec![(PixelBox::new(1.0, 2.0, 30.0, 40.0), "airliner")]);
        let d = validate_manifest(&m, dir.path());
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].rule, Rule::UnknownClass);
        assert!(d[0].message.contains("airliner"));
    }

    #[test]
    fn missing_feature_file_names_the_path() {
        let dir = tempfile::tempdir().unwrap();
        let m = manifest(vec![]);
        let d = validate_manifest(&m, dir.path());
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].rule, Rule::UnreadableFeatureFile);
        assert!(d[0].message.contains("img0.fmap"));
    }

    #[test]
    fn resolve_clips_boxes_and_masks() {
        let dir = tempfile::tempdir().unwrap();
        write_fmap(dir.path(), "img0.fmap");
        let mut m = manifest(vec![(PixelBox::new(-2.0, 60.0, 3.0, 70.0), "plane")]);
        m.entries[0].annotations[0].mask = Some(MaskFile {
            width: 5,
            height: 10,
            rle: Mask::new(0, 0, 5, 10, (0..50).map(|i| i % 5 >= 2).collect())
                .unwrap()
                .to_rle(),
        });
        let r = m.resolve(dir.path()).unwrap();
        let a = &r.entries[0].annotations[0];
        assert_eq!(a.bbox, PixelBox::new(0.0, 60.0, 3.0, 64.0));
        let mask = a.mask.as_ref().unwrap();
        assert!(mask.matches_box(&a.bbox));
        // columns 0..3 of the clipped box are source columns 2..5: all foreground
        assert_eq!(mask.foreground_count(), 12);
        assert_eq!(r.entries[0].feature_file, dir.path().join("img0.fmap"));
    }

    #[test]
    fn bad_masks_are_diagnosed() {
        let dir = tempfile::tempdir().unwrap();
        write_fmap(dir.path(), "img0.fmap");
        let mut m = manifest(vec![(PixelBox::new(0.0, 0.0, 4.0, 4.0), "plane")]);
        m.entries[0].annotations[0].mask = Some(MaskFile {
            width: 4,
            height: 4,
            rle: "16".into(),
        });
        assert_eq!(validate_manifest(&m, dir.path())[0].rule, Rule::InvalidMask);
        m.entries[0].annotations[0].mask = Some(MaskFile {
            width: 3,
            height: 4,
            rle: "0,12".into(),
        });
        assert_eq!(validate_manifest(&m, dir.path())[0].rule, Rule::InvalidMask);
    }

    fn arb_box() -> impl Strategy<Value = PixelBox> {
        (-10.0..100.0f64, -10.0..100.0f64, 0.001..80.0f64, 0.001..80.0f64)
            .prop_map(|(x, y, w, h)| PixelBox::new(x, y, x + w, y + h))
    }

    proptest! {
        #[test]
        fn manifest_json_roundtrip(
            boxes in prop::collection::vec(arb_box(), 0..6),
            proposals in prop::collection::vec(arb_box(), 0..6),
            h in 1..500usize,
        ) {
            let mut m = manifest(boxes.into_iter().map(|b| (b, "plane")).collect());
            m.entries[0].proposals = proposals;
            m.entries[0].image_h = h;
            let text = serde_json::to_string(&m).unwrap();
            let back: ManifestFile = serde_json::from_str(&text).unwrap();
            prop_assert_eq!(back, m);
        }
    }
}
