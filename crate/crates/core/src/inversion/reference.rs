use std::path::Path;

use log::warn;

use crate::diffusion::PromptEncoding;
use crate::error::{ensure, Error, Result};
use crate::grid::{BinaryMask, Grid};
use crate::imageio::{load_mask_png, load_png};

/// Below this centroid-aligned mask IoU the references are flagged as
/// morphologically dissimilar.
pub const MORPHOLOGY_WARN_IOU: f64 = 0.2;

#[derive(Debug, Clone)]
pub struct ReferenceSample {
    pub image: Grid,
    pub mask: BinaryMask,
}

/// Three to five masked examples of one defect type plus the prompt
/// template (with exactly one placeholder) used while learning.
#[derive(Debug, Clone)]
pub struct ReferenceSet {
    samples: Vec<ReferenceSample>,
    template: String,
}

impl ReferenceSet {
    pub fn new(samples: Vec<ReferenceSample>, template: impl Into<String>) -> Result<Self> {
        let template = template.into();
        ensure!(
            (3..=5).contains(&samples.len()),
            Error::Data(format!("reference set needs 3 to 5 samples, got {}", samples.len()))
        );
        for (i, s) in samples.iter().enumerate() {
            s.image.check_mask(&s.mask, &format!("reference {i}"))?;
            ensure!(
                !s.mask.is_empty(),
                Error::Data(format!("reference {i}: empty defect mask"))
            );
            ensure!(
                s.image.is_valid_image(),
                Error::Data(format!("reference {i}: image values must be finite and in [0,1]"))
            );
        }
        let probe = PromptEncoding::parse(&template, 64)?;
        ensure!(
            probe.placeholder_slot().is_some(),
            Error::Parameter(format!("template {template:?} has no placeholder"))
        );
        let set = ReferenceSet { samples, template };
        let iou = set.morphology_iou();
        if iou < MORPHOLOGY_WARN_IOU {
            warn!("reference masks look morphologically dissimilar (min aligned IoU {iou:.3})");
        }
        Ok(set)
    }

    /// Load `(image, mask)` PNG pairs.
    pub fn load<P: AsRef<Path>>(pairs: &[(P, P)], template: impl Into<String>) -> Result<Self> {
        let samples = pairs
            .iter()
            .map(|(i, m)| {
                Ok(ReferenceSample {
                    image: load_png(i.as_ref())?,
                    mask: load_mask_png(m.as_ref())?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(samples, template)
    }

    pub fn samples(&self) -> &[ReferenceSample] {
        &self.samples
    }

    pub fn template(&self) -> &str {
        &self.template
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Smallest pairwise IoU of the masks after moving each centroid to the
    /// frame centre.
    pub fn morphology_iou(&self) -> f64 {
        let centred: Vec<BinaryMask> = self.samples.iter().map(|s| s.mask.centered()).collect();
        let mut min = 1.0f64;
        for i in 0..centred.len() {
            for j in i + 1..centred.len() {
                if centred[i].same_shape(&centred[j]) {
                    min = min.min(centred[i].iou(&centred[j]));
                }
            }
        }
        min
    }
}
