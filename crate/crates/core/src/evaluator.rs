//! Detection mAP at an IoU threshold and GT-box classification metrics.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifier::{argmax, score_box, similarity_map};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::geometry::iou;
use crate::types::{ClassRole, ClassTable, DatasetManifest, Detection, PrototypeSet};

pub const DEFAULT_EVAL_IOU: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ClassFilter {
    Novel,
    Base,
    #[default]
    All,
}

impl ClassFilter {
    pub fn class_ids(self, table: &ClassTable) -> Vec<usize> {
        match self {
            Self::Novel => table.ids_with_role(ClassRole::Novel),
            Self::Base => table.ids_with_role(ClassRole::Base),
            Self::All => (0..table.num_objects()).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interpolation {
    /// Area under the monotone precision envelope.
    #[default]
    AllPoint,
    /// Mean of the envelope sampled at recall 0, 0.1, …, 1.
    Voc11,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub class: String,
    /// `None` when the class has no ground truth; such classes do not enter the mean.
    pub ap: Option<f64>,
    pub num_gt: usize,
    pub num_detections: usize,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub iou_threshold: f64,
    pub interpolation: Interpolation,
    pub per_class: Vec<ClassAp>,
    /// Mean AP over the filtered classes that have ground truth.
    pub map: f64,
    pub classes_in_map: Vec<String>,
    #[serde(default)]
    pub config: serde_json::Value,
}

/// Area under the precision envelope for points given in ranked order.
pub fn average_precision(tp_flags: &[bool], num_gt: usize, interpolation: Interpolation) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut recall = Vec::with_capacity(tp_flags.len());
    let mut precision = Vec::with_capacity(tp_flags.len());
    let mut tp = 0usize;
    for (i, &hit) in tp_flags.iter().enumerate() {
        tp += usize::from(hit);
        recall.push(tp as f64 / num_gt as f64);
        precision.push(tp as f64 / (i + 1) as f64);
    }
    match interpolation {
        Interpolation::AllPoint => {
            let mut envelope = precision.clone();
            for i in (0..envelope.len().saturating_sub(1)).rev() {
                envelope[i] = envelope[i].max(envelope[i + 1]);
            }
            let mut ap = 0.0;
            let mut prev_recall = 0.0;
            for (r, p) in recall.iter().zip(&envelope) {
                ap += (r - prev_recall) * p;
                prev_recall = *r;
            }
            ap
        }
        Interpolation::Voc11 => {
            (0..=10)
                .map(|t| {
                    let t = t as f64 / 10.0;
                    recall
                        .iter()
                        .zip(&precision)
                        .filter(|(r, _)| **r >= t - 1e-12)
                        .map(|(_, p)| *p)
                        .fold(0.0, f64::max)
                })
                .sum::<f64>()
                / 11.0
        }
    }
}

/// Greedy matching in rank order: each detection takes the unmatched GT
/// box with the highest IoU at or above the threshold (ties to the lower
/// GT index). `ranked` holds `(image, detection)` pairs in rank order.
pub fn match_detections(ranked: &[(usize, &Detection)], gt: &[Vec<crate::types::PixelBox>], iou_thr: f64) -> Vec<bool> {
    let mut used: Vec<Vec<bool>> = gt.iter().map(|g| vec![false; g.len()]).collect();
    ranked
        .iter()
        .map(|(img, d)| {
            let mut best: Option<(usize, f64)> = None;
            for (g, b) in gt[*img].iter().enumerate() {
                if used[*img][g] {
                    continue;
                }
                let o = iou(&d.bbox, b);
                if o >= iou_thr && best.is_none_or(|(_, bo)| o > bo) {
                    best = Some((g, o));
                }
            }
            if let Some((g, _)) = best {
                used[*img][g] = true;
                true
            } else {
                false
            }
        })
        .collect()
}

/// Per-class AP and mAP over `class_filter` (object class ids).
///
/// Detections are ranked by score descending; equal scores keep image order
/// and then listing order. Detections for images absent from the manifest
/// are an error.
pub fn evaluate_detections(
    detections: &[(String, Vec<Detection>)],
    manifest: &DatasetManifest,
    iou_thr: f64,
    class_filter: &[usize],
    interpolation: Interpolation,
) -> Result<EvalReport> {
    if class_filter.is_empty() {
        return Err(Error::Config("class filter selects no classes".into()));
    }
    let table = &manifest.class_table;
    let index: HashMap<&str, usize> = manifest
        .entries
        .iter()
        .enumerate()
        .map(|(i, e)| (e.image_id.as_str(), i))
        .collect();
    let mut per_image: Vec<Vec<&Detection>> = vec![Vec::new(); manifest.entries.len()];
    for (id, dets) in detections {
        let i = *index
            .get(id.as_str())
            .ok_or_else(|| Error::Invalid(format!("detections reference unknown image `{id}`")))?;
        for d in dets {
            if d.class_id >= table.num_objects() {
                return Err(Error::Invalid(format!(
                    "[{id}] detection class {} out of range",
                    d.class_id
                )));
            }
        }
        per_image[i].extend(dets);
    }

    let per_class: Vec<ClassAp> = (0..table.num_objects())
        .into_par_iter()
        .map(|c| {
            let gt: Vec<Vec<_>> = manifest
                .entries
                .iter()
                .map(|e| {
                    e.annotations
                        .iter()
                        .filter(|a| a.class_id == c)
                        .map(|a| a.bbox)
                        .collect()
                })
                .collect();
            let num_gt = gt.iter().map(Vec::len).sum();
            let mut ranked: Vec<(usize, &Detection)> = per_image
                .iter()
                .enumerate()
                .flat_map(|(i, ds)| ds.iter().filter(|d| d.class_id == c).map(move |d| (i, *d)))
                .collect();
            ranked.sort_by(|a, b| b.1.score.total_cmp(&a.1.score));
            let flags = match_detections(&ranked, &gt, iou_thr);
            let tp = flags.iter().filter(|f| **f).count();
            ClassAp {
                class: table.name(c).to_owned(),
                ap: (num_gt > 0).then(|| average_precision(&flags, num_gt, interpolation)),
                num_gt,
                num_detections: ranked.len(),
                tp,
                fp: ranked.len() - tp,
                fn_: num_gt - tp,
            }
        })
        .collect();

    let included: Vec<&ClassAp> = class_filter
        .iter()
        .map(|&c| &per_class[c])
        .filter(|c| c.ap.is_some())
        .collect();
    let map = if included.is_empty() {
        0.0
    } else {
        included.iter().filter_map(|c| c.ap).sum::<f64>() / included.len() as f64
    };
    Ok(EvalReport {
        iou_threshold: iou_thr,
        interpolation,
        classes_in_map: included.iter().map(|c| c.class.clone()).collect(),
        per_class,
        map,
        config: serde_json::Value::Null,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: String,
    pub support: usize,
    pub predicted: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub total: usize,
    pub correct: usize,
    pub accuracy: f64,
    /// Mean F1 over object classes with any ground truth or prediction.
    pub macro_f1: f64,
    pub per_class: Vec<ClassMetrics>,
    /// Column labels: object classes, then one `background` column that
    /// collects every background-row verdict.
    pub labels: Vec<String>,
    /// `confusion[gt][predicted]`, one row per object class.
    pub confusion: Vec<Vec<usize>>,
    #[serde(default)]
    pub config: serde_json::Value,
}

/// Classifies every ground-truth box as if it were a proposal. A box whose
/// best row is a background prototype counts as an error for its class.
pub fn evaluate_classification(ds: &Dataset, protos: &PrototypeSet) -> Result<ClassificationReport> {
    let table = protos.class_table();
    let j = table.num_objects();
    if ds.manifest.class_table.object_classes != table.object_classes {
        return Err(Error::Config(
            "prototype class table does not match the manifest's object classes".into(),
        ));
    }
    let pairs: Vec<Vec<(usize, usize)>> = ds
        .manifest
        .entries
        .par_iter()
        .zip(&ds.maps)
        .map(|(entry, fm)| {
            if entry.annotations.is_empty() {
                return Ok(Vec::new());
            }
            let sim = similarity_map(fm, protos)?;
            entry
                .annotations
                .iter()
                .map(|a| {
                    let best = argmax(&score_box(&sim, &a.bbox)?);
                    Ok((a.class_id, best.min(j)))
                })
                .collect()
        })
        .collect::<Result<Vec<_>>>()?;

    let mut confusion = vec![vec![0usize; j + 1]; j];
    for (gt, pred) in pairs.into_iter().flatten() {
        confusion[gt][pred] += 1;
    }
    let total: usize = confusion.iter().flatten().sum();
    if total == 0 {
        return Err(Error::Invalid("manifest has no annotations to classify".into()));
    }
    let correct: usize = (0..j).map(|c| confusion[c][c]).sum();
    let per_class: Vec<ClassMetrics> = (0..j)
        .map(|c| {
            let support: usize = confusion[c].iter().sum();
            let predicted: usize = confusion.iter().map(|row| row[c]).sum();
            let tp = confusion[c][c] as f64;
            let precision = if predicted > 0 { tp / predicted as f64 } else { 0.0 };
            let recall = if support > 0 { tp / support as f64 } else { 0.0 };
            let f1 = if precision + recall > 0.0 {
                2.0 * precision * recall / (precision + recall)
            } else {
                0.0
            };
            ClassMetrics {
                class: table.name(c).to_owned(),
                support,
                predicted,
                precision,
                recall,
                f1,
            }
        })
        .collect();
    let scored: Vec<f64> = per_class
        .iter()
        .filter(|m| m.support > 0 || m.predicted > 0)
        .map(|m| m.f1)
        .collect();
    let mut labels: Vec<String> = (0..j).map(|c| table.name(c).to_owned()).collect();
    labels.push("background".into());
    Ok(ClassificationReport {
        total,
        correct,
        accuracy: correct as f64 / total as f64,
        macro_f1: scored.iter().sum::<f64>() / scored.len().max(1) as f64,
        per_class,
        labels,
        confusion,
        config: serde_json::Value::Null,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{Annotation, ClassEntry, ManifestEntry, PixelBox, SplitRole};

    fn manifest(gt: Vec<Vec<(PixelBox, usize)>>, classes: usize) -> DatasetManifest {
        DatasetManifest {
            entries: gt
                .into_iter()
                .enumerate()
                .map(|(i, boxes)| ManifestEntry {
                    image_id: format!("img{i}"),
                    feature_file: "x.fmap".into(),
                    image_h: 100,
                    image_w: 100,
                    annotations: boxes
                        .into_iter()
                        .map(|(bbox, class_id)| Annotation {
                            bbox,
                            class_id,
                            mask: None,
                        })
                        .collect(),
                    proposals: vec![],
                })
                .collect(),
            class_table: ClassTable::new(
                (0..classes)
                    .map(|c| ClassEntry {
                        name: format!("c{c}"),
                        role: if c == 0 { ClassRole::Base } else { ClassRole::Novel },
                    })
                    .collect(),
                0,
            )
            .unwrap(),
            split_role: SplitRole::Test,
        }
    }

    fn b(x: f64, y: f64, s: f64) -> PixelBox {
        PixelBox::new(x, y, x + s, y + s)
    }

    #[test]
    fn perfect_detections_give_ap_one() {
        let m = manifest(
            vec![
                vec![(b(0.0, 0.0, 10.0), 0), (b(50.0, 50.0, 10.0), 1)],
                vec![(b(5.0, 5.0, 20.0), 1)],
            ],
            2,
        );
        let dets: Vec<(String, Vec<Detection>)> = m
            .entries
            .iter()
            .enumerate()
            .map(|(i, e)| {
                let d = e
                    .annotations
                    .iter()
                    .enumerate()
                    .map(|(k, a)| Detection {
                        bbox: a.bbox,
                        class_id: a.class_id,
                        score: 0.9 - 0.1 * (i * 2 + k) as f64,
                    })
                    .collect();
                (e.image_id.clone(), d)
            })
            .collect();
        let r = evaluate_detections(&dets, &m, 0.5, &[0, 1], Interpolation::AllPoint).unwrap();
        assert!(r.per_class.iter().all(|c| c.ap == Some(1.0)));
        assert_eq!(r.map, 1.0);
        let novel = ClassFilter::Novel.class_ids(&m.class_table);
        assert_eq!(novel, vec![1]);
    }

    #[test]
    fn no_detections_give_zero() {
        let m = manifest(vec![vec![(b(0.0, 0.0, 10.0), 0)]], 1);
        let r = evaluate_detections(&[], &m, 0.5, &[0], Interpolation::AllPoint).unwrap();
        assert_eq!(r.per_class[0].ap, Some(0.0));
        assert_eq!(r.per_class[0].fn_, 1);
        assert!(evaluate_detections(&[], &m, 0.5, &[], Interpolation::AllPoint).is_err());
    }

    #[test]
    fn hand_computed_curve() {
        // ranks: TP, FP, TP with 2 GT -> precision 1, 1/2, 2/3 at recall 0.5, 0.5, 1
        let flags = [true, false, true];
        let ap = average_precision(&flags, 2, Interpolation::AllPoint);
        assert!((ap - (0.5 * 1.0 + 0.5 * 2.0 / 3.0)).abs() < 1e-15);
        let ap11 = average_precision(&flags, 2, Interpolation::Voc11);
        assert!((ap11 - (6.0 * 1.0 + 5.0 * 2.0 / 3.0) / 11.0).abs() < 1e-15);
    }

    #[test]
    fn duplicate_detection_is_false_positive() {
        let m = manifest(vec![vec![(b(0.0, 0.0, 10.0), 0)]], 1);
        let d = |s| Detection {
            bbox: b(0.0, 0.0, 10.0),
            class_id: 0,
            score: s,
        };
        let r = evaluate_detections(
            &[("img0".into(), vec![d(0.9), d(0.8)])],
            &m,
            0.5,
            &[0],
            Interpolation::AllPoint,
        )
        .unwrap();
        assert_eq!((r.per_class[0].tp, r.per_class[0].fp), (1, 1));
        assert_eq!(r.per_class[0].ap, Some(1.0));
    }

    #[test]
    fn highest_iou_gt_wins() {
        let gts = vec![vec![b(0.0, 0.0, 10.0), b(2.0, 0.0, 10.0)]];
        let d1 = Detection {
            bbox: b(2.0, 0.0, 10.0),
            class_id: 0,
            score: 0.9,
        };
        let d2 = Detection {
            bbox: b(0.0, 0.0, 10.0),
            class_id: 0,
            score: 0.8,
        };
        // d1 takes GT 1 (exact), so d2 can still take GT 0
        assert_eq!(match_detections(&[(0, &d1), (0, &d2)], &gts, 0.5), vec![true, true]);
    }

    #[test]
    fn unknown_image_is_an_error() {
        let m = manifest(vec![vec![]], 1);
        assert!(evaluate_detections(&[("nope".into(), vec![])], &m, 0.5, &[0], Interpolation::AllPoint).is_err());
    }
}
