//! Few-shot and zero-shot experiment presets with the bundled detector.

use std::path::Path;
use std::time::Instant;

use log::info;
use serde::{Deserialize, Serialize};

use super::config::PipelineConfig;
use super::stages::{generate_batch, generation_prompt, learn, manifest_references, write_generated, GeneratedSample};
use crate::bench::{build_dataset, DatasetManifest, DatasetPreset, Role};
use crate::diffusion::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::eval::{
    comparison_table, evaluate, BBox, ComparisonRow, Detection, Detector, DetectorSample, EvalReport, GroundTruthBox, ReferenceDetector,
};
use crate::inversion::{save_embedding, InversionConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    RealOnly,
    SyntheticOnly,
    RealPlusSynthetic,
    SourceOnly,
    SyntheticFinetune,
}

impl Arm {
    pub fn name(self) -> &'static str {
        match self {
            Arm::RealOnly => "real-only",
            Arm::SyntheticOnly => "synthetic-only",
            Arm::RealPlusSynthetic => "real+synthetic",
            Arm::SourceOnly => "source-only",
            Arm::SyntheticFinetune => "synthetic-finetune",
        }
    }

    pub fn of(preset: DatasetPreset) -> &'static [Arm] {
        match preset {
            DatasetPreset::FewShot => &[Arm::RealOnly, Arm::SyntheticOnly, Arm::RealPlusSynthetic],
            DatasetPreset::ZeroShot => &[Arm::SourceOnly, Arm::SyntheticOnly, Arm::SyntheticFinetune],
        }
    }
}

/// Literal repetition, cycling through `items` until `n` entries.
pub fn duplicate_to<T: Clone>(items: &[T], n: usize) -> Vec<T> {
    if items.is_empty() {
        return Vec::new();
    }
    (0..n).map(|i| items[i % items.len()].clone()).collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArmResult {
    pub arm: Arm,
    pub training_images: usize,
    pub report: EvalReport,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedOutcome {
    pub seed: u64,
    pub arms: Vec<ArmResult>,
    /// Final concept-learning loss (mean of the last 100 steps).
    pub concept_loss: f64,
    pub seconds: f64,
}

impl SeedOutcome {
    pub fn map_of(&self, arm: Arm) -> Option<f64> {
        self.arms.iter().find(|a| a.arm == arm).map(|a| a.report.map)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentOutcome {
    pub preset: DatasetPreset,
    pub seeds: Vec<SeedOutcome>,
    /// Per-arm medians over seeds.
    pub median: Vec<ComparisonRow>,
}

pub fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

impl ExperimentOutcome {
    pub fn median_map(&self, arm: Arm) -> Option<f64> {
        self.median.iter().find(|r| r.arm == arm.name()).map(|r| r.map)
    }

    pub fn table(&self) -> String {
        comparison_table(&self.median)
    }
}

fn samples_of(manifest: &DatasetManifest, role: Role) -> Result<Vec<DetectorSample>> {
    Ok(manifest
        .samples(role)?
        .into_iter()
        .map(|s| DetectorSample {
            image: s.image,
            mask: s.mask,
        })
        .collect())
}

fn synthetic_samples(gen: &[GeneratedSample]) -> Vec<DetectorSample> {
    gen.iter()
        .map(|g| DetectorSample {
            image: g.image.clone(),
            mask: g.mask.clone(),
        })
        .collect()
}

/// Run `detector` over the test split and score it.
pub fn evaluate_detector(detector: &dyn Detector, manifest: &DatasetManifest, cfg: &PipelineConfig) -> Result<EvalReport> {
    let mut dets: Vec<Detection> = Vec::new();
    let mut gts = Vec::new();
    for it in manifest.with_role(Role::Test) {
        let s = manifest.materialize(it)?;
        dets.extend(detector.detect(&it.id, &s.image)?);
        if let Some(b) = &s.bbox {
            gts.push(GroundTruthBox {
                image_id: it.id.clone(),
                bbox: BBox::from_pixels(b),
            });
        }
    }
    evaluate(&dets, &gts, &cfg.experiment.eval)
}

fn stage<T>(arm: &str, stage: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| e.in_stage(format!("arm {arm}, stage {stage}")))
}

/// One seed of a preset: dataset, concept, 150 synthetic images, then every
/// arm's detector trained and evaluated on the held-out test split.
pub fn run_seed(preset: DatasetPreset, seed: u64, cfg: &PipelineConfig, backbone: &Checkpoint, out: Option<&Path>) -> Result<SeedOutcome> {
    let t0 = Instant::now();
    let n = cfg.image_size;
    let manifest = stage("shared", "dataset", build_dataset(preset, seed, preset.default_counts(), n, n))?;
    let refs = stage("shared", "references", manifest_references(&manifest))?;
    let inv = InversionConfig {
        seed,
        domain: preset.source_domain().word().into(),
        ..cfg.inversion.clone()
    };
    info!("{preset:?} seed {seed}: learning concept");
    let run = stage("shared", "concept learning", learn(backbone, &refs, &inv))?;
    let tail = &run.losses[run.losses.len().saturating_sub(100)..];
    let concept_loss = if tail.is_empty() { f64::NAN } else { tail.iter().sum::<f64>() / tail.len() as f64 };

    let backgrounds: Vec<_> = manifest
        .with_role(Role::Background)
        .map(|it| Ok((it.id.clone(), manifest.materialize(it)?.image)))
        .collect::<Result<_>>()?;
    let mut gcfg = cfg.generate.clone();
    gcfg.options.prompt = generation_prompt(preset.target_domain());
    info!("{preset:?} seed {seed}: generating {} images", gcfg.count);
    let gen = stage(
        "shared",
        "generation",
        generate_batch(backbone, &run.embedding, &backgrounds, None, gcfg.count, seed, &gcfg),
    )?;
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        manifest.save(&dir.join("dataset_manifest.json"))?;
        save_embedding(&run.embedding, &dir.join("concept.dfe"))?;
        write_generated(&gen, &dir.join("synthetic"))?;
    }
    let synthetic = synthetic_samples(&gen);
    let parity = cfg.experiment.parity_size;
    let det_cfg = crate::eval::DetectorConfig {
        seed: seed ^ 0xD37,
        ..cfg.detector.clone()
    };
    let train_seed = seed.wrapping_mul(0x9E37_79B9).wrapping_add(17);

    let mut arms = Vec::new();
    let mut source: Option<ReferenceDetector> = None;
    for &arm in Arm::of(preset) {
        let name = arm.name();
        let (mut det, data) = match arm {
            Arm::RealOnly => (None, duplicate_to(&stage(name, "data", samples_of(&manifest, Role::Reference))?, parity)),
            Arm::SyntheticOnly => (None, duplicate_to(&synthetic, parity)),
            Arm::RealPlusSynthetic => {
                let real = stage(name, "data", samples_of(&manifest, Role::Reference))?;
                let half = parity / 2;
                let mut d = duplicate_to(&real, parity - half);
                d.extend(duplicate_to(&synthetic, half));
                (None, d)
            }
            Arm::SourceOnly => {
                let mut d = stage(name, "data", samples_of(&manifest, Role::SourceTrain))?;
                d.extend(stage(name, "data", samples_of(&manifest, Role::Reference))?);
                (None, d)
            }
            Arm::SyntheticFinetune => {
                let src = source
                    .clone()
                    .ok_or_else(|| Error::Config("fine-tune arm needs the source-only arm first".into()).in_stage(name))?;
                (Some(src), synthetic.clone())
            }
        };
        let fresh = det.is_none();
        let mut d = match det.take() {
            Some(d) => d,
            None => stage(name, "detector init", ReferenceDetector::new(det_cfg.clone()))?,
        };
        info!("{preset:?} seed {seed}: training {name} on {} images", data.len());
        stage(name, "detector training", d.train(&data, if fresh { train_seed } else { train_seed ^ 0xF1 }))?;
        let report = stage(name, "evaluation", evaluate_detector(&d, &manifest, cfg))?;
        info!("{preset:?} seed {seed}: {name} mAP@0.01 = {:.3}", report.map);
        if let Some(dir) = out {
            let ddir = dir.join("detectors");
            let rdir = dir.join("reports");
            for p in [&ddir, &rdir] {
                std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))?;
            }
            d.save(&ddir.join(format!("{}.json", arm_file(arm))))?;
            report.save(&rdir, arm_file(arm))?;
        }
        if arm == Arm::SourceOnly {
            source = Some(d);
        }
        arms.push(ArmResult {
            arm,
            training_images: data.len(),
            report,
        });
    }
    Ok(SeedOutcome {
        seed,
        arms,
        concept_loss,
        seconds: t0.elapsed().as_secs_f64(),
    })
}

fn arm_file(arm: Arm) -> &'static str {
    match arm {
        Arm::RealOnly => "real_only",
        Arm::SyntheticOnly => "synthetic_only",
        Arm::RealPlusSynthetic => "real_plus_synthetic",
        Arm::SourceOnly => "source_only",
        Arm::SyntheticFinetune => "synthetic_finetune",
    }
}

/// All configured seeds of a preset, then per-arm medians. With `out`, each
/// seed writes under `out/seed_<s>/` and the comparison lands in
/// `out/comparison.{md,json}`.
pub fn run_experiment(preset: DatasetPreset, cfg: &PipelineConfig, backbone: &Checkpoint, out: Option<&Path>) -> Result<ExperimentOutcome> {
    let mut seeds = Vec::new();
    for &s in &cfg.experiment.seeds {
        let dir = out.map(|o| o.join(format!("seed_{s}")));
        seeds.push(run_seed(preset, s, cfg, backbone, dir.as_deref())?);
    }
    let median_rows = Arm::of(preset)
        .iter()
        .map(|&arm| {
            let rows: Vec<ComparisonRow> = seeds
                .iter()
                .flat_map(|s| s.arms.iter().filter(|a| a.arm == arm))
                .map(|a| ComparisonRow::from_report(arm.name(), &a.report))
                .collect();
            let col = |f: fn(&ComparisonRow) -> f64| median(&rows.iter().map(f).collect::<Vec<_>>());
            ComparisonRow {
                arm: arm.name().to_string(),
                map: col(|r| r.map),
                best_f1: col(|r| r.best_f1),
                precision: col(|r| r.precision),
                recall: col(|r| r.recall),
                f1: col(|r| r.f1),
            }
        })
        .collect();
    let outcome = ExperimentOutcome {
        preset,
        seeds,
        median: median_rows,
    };
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let md = dir.join("comparison.md");
        std::fs::write(&md, outcome.table()).map_err(|e| Error::io(&md, e))?;
        let js = dir.join("comparison.json");
        std::fs::write(&js, serde_json::to_string_pretty(&outcome)?).map_err(|e| Error::io(&js, e))?;
    }
    Ok(outcome)
}
