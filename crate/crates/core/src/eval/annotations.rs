//! Box annotation files: a JSON array of `{image_id, boxes: [...]}`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::metrics::{BBox, Detection, GroundTruthBox};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxRecord {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confidence: Option<f64>,
}

impl BoxRecord {
    fn bbox(&self) -> Result<BBox> {
        BBox::new(self.x_min, self.y_min, self.x_max, self.y_max)
    }

    fn from_bbox(b: &BBox, confidence: Option<f64>) -> Self {
        BoxRecord {
            x_min: b.x_min,
            y_min: b.y_min,
            x_max: b.x_max,
            y_max: b.y_max,
            confidence,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageAnnotations {
    pub image_id: String,
    pub boxes: Vec<BoxRecord>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AnnotationFile {
    pub images: Vec<ImageAnnotations>,
}

impl AnnotationFile {
    fn entry(&mut self, id: &str) -> &mut ImageAnnotations {
        let i = match self.images.iter().position(|a| a.image_id == id) {
            Some(i) => i,
            None => {
                self.images.push(ImageAnnotations {
                    image_id: id.to_string(),
                    boxes: Vec::new(),
                });
                self.images.len() - 1
            }
        };
        &mut self.images[i]
    }

    /// Register an image, possibly without boxes.
    pub fn add_image(&mut self, id: &str) {
        self.entry(id);
    }

    pub fn push_ground_truth(&mut self, g: &GroundTruthBox) {
        self.entry(&g.image_id).boxes.push(BoxRecord::from_bbox(&g.bbox, None));
    }

    pub fn push_detection(&mut self, d: &Detection) {
        self.entry(&d.image_id).boxes.push(BoxRecord::from_bbox(&d.bbox, Some(d.confidence)));
    }

    pub fn ground_truth(&self) -> Result<Vec<GroundTruthBox>> {
        let mut out = Vec::new();
        for a in &self.images {
            for b in &a.boxes {
                out.push(GroundTruthBox {
                    image_id: a.image_id.clone(),
                    bbox: b.bbox()?,
                });
            }
        }
        Ok(out)
    }

    /// Boxes without a confidence are read as confidence 1.
    pub fn detections(&self) -> Result<Vec<Detection>> {
        let mut out = Vec::new();
        for a in &self.images {
            for b in &a.boxes {
                let confidence = b.confidence.unwrap_or(1.0);
                if !(0.0..=1.0).contains(&confidence) {
                    return Err(Error::Format {
                        field: "confidence".into(),
                        detail: format!("{confidence} outside [0, 1] for image {}", a.image_id),
                    });
                }
                out.push(Detection {
                    image_id: a.image_id.clone(),
                    bbox: b.bbox()?,
                    confidence,
                });
            }
        }
        Ok(out)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let f: AnnotationFile = serde_json::from_str(text).map_err(|e| Error::Format {
            field: "annotations".into(),
            detail: e.to_string(),
        })?;
        for a in &f.images {
            for b in &a.boxes {
                b.bbox().map_err(|e| Error::Format {
                    field: "boxes".into(),
                    detail: format!("image {}: {e}", a.image_id),
                })?;
            }
        }
        Ok(f)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}
