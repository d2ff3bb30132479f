//! Pluggable detector interface and a small per-pixel convolutional scorer.

use std::path::Path;

use log::debug;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::metrics::{BBox, Detection};
use crate::error::{ensure, Error, Result};
use crate::grid::{BinaryMask, Grid};
use crate::nn::ops::{self, Conv2d};
use crate::nn::{clip_grad_norm, Adam, ParamLayout};

/// Maps an image to scored boxes.
pub trait Detector {
    fn detect(&self, image_id: &str, image: &Grid) -> Result<Vec<Detection>>;
}

/// A training image with its pixel-exact defect mask (empty for clean).
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorSample {
    pub image: Grid,
    pub mask: BinaryMask,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorConfig {
    pub hidden: usize,
    pub steps: usize,
    pub batch: usize,
    /// Side of the random training crops.
    pub crop: usize,
    pub lr: f64,
    /// Loss weight of defect pixels relative to clean ones.
    pub pos_weight: f32,
    /// Random horizontal/vertical flips of training crops.
    pub flips: bool,
    pub seed: u64,
    /// Pixels scoring at least this are grouped into candidate regions.
    pub score_floor: f32,
    /// Dilation used only to join nearby candidate pixels.
    pub join_radius: usize,
    pub max_detections: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            hidden: 12,
            steps: 1000,
            batch: 8,
            crop: 32,
            lr: 3e-3,
            pos_weight: 4.0,
            flips: true,
            seed: 0,
            score_floor: 0.1,
            join_radius: 1,
            max_detections: 20,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Net {
    c1: Conv2d,
    c2: Conv2d,
    c3: Conv2d,
    head: Conv2d,
}

impl Net {
    fn declare(hidden: usize) -> (Net, ParamLayout) {
        let mut l = ParamLayout::default();
        let g = 2f64.sqrt() * 3f64.sqrt();
        let net = Net {
            c1: Conv2d::declare(&mut l, "c1", 1, hidden, 3, 1, g),
            c2: Conv2d::declare(&mut l, "c2", hidden, hidden, 3, 2, g),
            c3: Conv2d::declare(&mut l, "c3", hidden, hidden, 3, 4, g),
            head: Conv2d::declare(&mut l, "head", hidden, 1, 1, 1, 3f64.sqrt()),
        };
        (net, l)
    }
}

struct Cache {
    cols: [Vec<f32>; 4],
    pre: [Vec<f32>; 3],
}

impl Net {
    fn forward(&self, p: &[f32], x: &[f32], h: usize, w: usize) -> (Vec<f32>, Cache) {
        let (a1, k1) = self.c1.forward(p, x, h, w);
        let r1 = ops::relu(&a1);
        let (a2, k2) = self.c2.forward(p, &r1, h, w);
        let r2 = ops::relu(&a2);
        let (a3, k3) = self.c3.forward(p, &r2, h, w);
        let r3 = ops::relu(&a3);
        let (logits, k4) = self.head.forward(p, &r3, h, w);
        (
            logits,
            Cache {
                cols: [k1, k2, k3, k4],
                pre: [a1, a2, a3],
            },
        )
    }

    fn backward(&self, p: &[f32], c: &Cache, h: usize, w: usize, dlogits: &[f32], g: &mut [f32]) {
        let d3 = self.head.backward(p, &c.cols[3], h, w, dlogits, Some(g), true).expect("input grad");
        let d3 = ops::relu_backward(&c.pre[2], &d3);
        let d2 = self.c3.backward(p, &c.cols[2], h, w, &d3, Some(g), true).expect("input grad");
        let d2 = ops::relu_backward(&c.pre[1], &d2);
        let d1 = self.c2.backward(p, &c.cols[1], h, w, &d2, Some(g), true).expect("input grad");
        let d1 = ops::relu_backward(&c.pre[0], &d1);
        self.c1.backward(p, &c.cols[0], h, w, &d1, Some(g), false);
    }
}

/// Grey level minus 0.5; colour images are averaged over channels.
fn input_plane(image: &Grid) -> Vec<f32> {
    let c = image.channels() as f32;
    (0..image.plane_len())
        .map(|i| (0..image.channels()).map(|ch| image.channel(ch)[i]).sum::<f32>() / c - 0.5)
        .collect()
}

/// Per-pixel defect scorer. Candidate pixels are joined into 8-connected
/// regions; each region yields its bounding box scored by its peak
/// probability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceDetector {
    pub config: DetectorConfig,
    params: Vec<f32>,
    trained: bool,
}

#[derive(Serialize, Deserialize)]
struct SavedDetector {
    format: String,
    detector: ReferenceDetector,
}

const DETECTOR_FORMAT: &str = "defect-synth-detector-1";

impl ReferenceDetector {
    /// Freshly initialised and not yet usable for detection.
    pub fn new(config: DetectorConfig) -> Result<Self> {
        ensure!(
            config.hidden > 0 && config.batch > 0 && config.crop >= 8 && config.lr > 0.0 && config.pos_weight > 0.0,
            Error::Config("detector sizes, lr and pos_weight must be positive (crop >= 8)".into())
        );
        let (_, layout) = Net::declare(config.hidden);
        let params = layout.initialise(&mut ChaCha8Rng::seed_from_u64(config.seed));
        Ok(ReferenceDetector {
            config,
            params,
            trained: false,
        })
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    pub fn params(&self) -> &[f32] {
        &self.params
    }

    /// Train (or continue training) on `samples`, drawn uniformly, so
    /// repeated entries weigh proportionally. Returns the loss per step.
    pub fn train(&mut self, samples: &[DetectorSample], seed: u64) -> Result<Vec<f64>> {
        ensure!(!samples.is_empty(), Error::Data("detector training set is empty".into()));
        for s in samples {
            s.image.check_mask(&s.mask, "detector sample")?;
            ensure!(
                s.image.height() >= self.config.crop && s.image.width() >= self.config.crop,
                Error::Data(format!("training image smaller than the {0}x{0} crop", self.config.crop))
            );
        }
        let cfg = self.config.clone();
        let (net, _) = Net::declare(cfg.hidden);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut opt = Adam::new(self.params.len(), cfg.lr);
        let mut grads = vec![0f32; self.params.len()];
        let n = cfg.crop;
        let mut trace = Vec::with_capacity(cfg.steps);
        for step in 0..cfg.steps {
            grads.iter_mut().for_each(|g| *g = 0.0);
            let mut batch = Vec::with_capacity(cfg.batch);
            let mut wsum = 0f64;
            for _ in 0..cfg.batch {
                let s = &samples[rng.random_range(0..samples.len())];
                let y0 = rng.random_range(0..=s.image.height() - n);
                let x0 = rng.random_range(0..=s.image.width() - n);
                let mut img = s.image.crop(y0, x0, n, n)?;
                let mut m = s.mask.crop(y0, x0, n, n)?;
                if cfg.flips && rng.random_bool(0.5) {
                    img = img.flip_horizontal();
                    m = m.flip_horizontal();
                }
                if cfg.flips && rng.random_bool(0.5) {
                    img = img.flip_vertical();
                    m = m.flip_vertical();
                }
                wsum += m.data().iter().map(|&v| if v != 0 { cfg.pos_weight as f64 } else { 1.0 }).sum::<f64>();
                batch.push((input_plane(&img), m));
            }
            let mut loss = 0f64;
            for (x, m) in &batch {
                let (logits, cache) = net.forward(&self.params, x, n, n);
                let mut dl = vec![0f32; logits.len()];
                for (i, (&z, &y)) in logits.iter().zip(m.data()).enumerate() {
                    let (wt, pos) = if y != 0 { (cfg.pos_weight, true) } else { (1.0, false) };
                    // softplus(-z) for positives, softplus(z) for negatives.
                    let zz = if pos { -z } else { z };
                    loss += wt as f64 * (zz.max(0.0) + (-zz.abs()).exp().ln_1p()) as f64;
                    let target = if pos { 1.0 } else { 0.0 };
                    dl[i] = (wt as f64 * (ops::sigmoid(z) - target) as f64 / wsum) as f32;
                }
                net.backward(&self.params, &cache, n, n, &dl, &mut grads);
            }
            loss /= wsum;
            let gnorm = clip_grad_norm(&mut grads, 5.0);
            if !loss.is_finite() || !gnorm.is_finite() {
                return Err(Error::NonFinite {
                    step,
                    loss,
                    grad_norm: gnorm,
                });
            }
            opt.update(&mut self.params, &grads);
            trace.push(loss);
            if step % 200 == 0 {
                debug!("detector step {step}: loss {loss:.4}");
            }
        }
        self.trained = true;
        Ok(trace)
    }

    /// Per-pixel defect probability.
    pub fn heatmap(&self, image: &Grid) -> Result<Vec<f32>> {
        ensure!(self.trained, Error::Uncalibrated("detector has not been trained".into()));
        ensure!(image.all_finite(), Error::Data("image has non-finite values".into()));
        let (net, _) = Net::declare(self.config.hidden);
        let (logits, _) = net.forward(&self.params, &input_plane(image), image.height(), image.width());
        Ok(logits.into_iter().map(ops::sigmoid).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let s = SavedDetector {
            format: DETECTOR_FORMAT.into(),
            detector: self.clone(),
        };
        std::fs::write(path, serde_json::to_string(&s)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let s: SavedDetector = serde_json::from_str(&text).map_err(|e| Error::Format {
            field: "detector".into(),
            detail: e.to_string(),
        })?;
        ensure!(
            s.format == DETECTOR_FORMAT,
            Error::Format {
                field: "format".into(),
                detail: format!("unsupported detector format {:?}", s.format),
            }
        );
        let (_, layout) = Net::declare(s.detector.config.hidden);
        ensure!(
            s.detector.params.len() == layout.total,
            Error::Format {
                field: "params".into(),
                detail: format!("expected {} parameters, found {}", layout.total, s.detector.params.len()),
            }
        );
        Ok(s.detector)
    }
}

/// 8-connected components of `mask`, as lists of row-major pixel indices.
pub fn connected_components(mask: &BinaryMask) -> Vec<Vec<usize>> {
    let (h, w) = (mask.height(), mask.width());
    let mut seen = vec![false; h * w];
    let mut out = Vec::new();
    for start in 0..h * w {
        if seen[start] || mask.data()[start] == 0 {
            continue;
        }
        seen[start] = true;
        let mut comp = vec![start];
        let mut k = 0;
        while k < comp.len() {
            let p = comp[k];
            k += 1;
            let (y, x) = ((p / w) as isize, (p % w) as isize);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (ny, nx) = (y + dy, x + dx);
                    if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                        continue;
                    }
                    let q = ny as usize * w + nx as usize;
                    if !seen[q] && mask.data()[q] != 0 {
                        seen[q] = true;
                        comp.push(q);
                    }
                }
            }
        }
        out.push(comp);
    }
    out
}

impl Detector for ReferenceDetector {
    fn detect(&self, image_id: &str, image: &Grid) -> Result<Vec<Detection>> {
        let prob = self.heatmap(image)?;
        let (h, w) = (image.height(), image.width());
        let cand = BinaryMask::from_fn(h, w, |y, x| prob[y * w + x] >= self.config.score_floor);
        let joined = cand.dilate(self.config.join_radius);
        let mut dets = Vec::new();
        for comp in connected_components(&joined) {
            let core: Vec<usize> = comp.into_iter().filter(|&p| cand.data()[p] != 0).collect();
            if core.is_empty() {
                continue;
            }
            let (mut x0, mut y0, mut x1, mut y1) = (w, h, 0, 0);
            let mut peak = 0f32;
            for &p in &core {
                let (y, x) = (p / w, p % w);
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x);
                y1 = y1.max(y);
                peak = peak.max(prob[p]);
            }
            dets.push(Detection {
                image_id: image_id.to_string(),
                bbox: BBox::new(x0 as f64, y0 as f64, (x1 + 1) as f64, (y1 + 1) as f64)?,
                confidence: peak as f64,
            });
        }
        dets.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
        dets.truncate(self.config.max_detections);
        Ok(dets)
    }
}
