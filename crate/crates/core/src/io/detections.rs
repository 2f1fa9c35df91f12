//! Detection output, one record list per image:
//!
//! ```json
//! {"images": [{"image_id": "img_000",
//!              "detections": [{"box": [10, 12, 50, 40], "class": "plane", "score": 0.93}]}]}
//! ```
//!
//! Records are listed in NMS kept order (score descending).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{ClassTable, Detection, PixelBox};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    #[serde(rename = "box")]
    pub bbox: PixelBox,
    pub class: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageDetections {
    pub image_id: String,
    pub detections: Vec<DetectionRecord>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DetectionsFile {
    pub images: Vec<ImageDetections>,
}

impl DetectionsFile {
    pub fn from_detections(table: &ClassTable, per_image: &[(String, Vec<Detection>)]) -> Self {
        Self {
            images: per_image
                .iter()
                .map(|(id, dets)| ImageDetections {
                    image_id: id.clone(),
                    detections: dets
                        .iter()
                        .map(|d| DetectionRecord {
                            bbox: d.bbox,
                            class: table.name(d.class_id).to_owned(),
                            score: d.score,
                        })
                        .collect(),
                })
                .collect(),
        }
    }

    /// Resolves class names against `table`.
    pub fn to_detections(&self, table: &ClassTable) -> Result<Vec<(String, Vec<Detection>)>> {
        self.images
            .iter()
            .map(|img| {
                let dets = img
                    .detections
                    .iter()
                    .map(|r| {
                        let class_id = table
                            .index_of(&r.class)
                            .ok_or_else(|| Error::UnknownClass(r.class.clone()))?;
                        if !r.score.is_finite() || !r.bbox.is_finite() {
                            return Err(Error::Invalid(format!(
                                "[{}] detection with non-finite box or score",
                                img.image_id
                            )));
                        }
                        Ok(Detection {
                            bbox: r.bbox,
                            class_id,
                            score: r.score,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok((img.image_id.clone(), dets))
            })
            .collect()
    }

    pub fn read(path: &Path) -> Result<Self> {
        super::read_json(path)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        super::write_json(path, self)
    }
}
