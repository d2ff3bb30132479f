//! Pipeline stages shared by the command line and the experiment runner.

use std::path::Path;

use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::config::{GenerateConfig, PipelineConfig};
use crate::bench::{
    build_dataset, pretraining_corpus, render_stroke, sample_seed, DatasetCounts, DatasetManifest, DatasetPreset, Domain, Role,
    StrokeDistribution,
};
use crate::diffusion::checkpoint::Checkpoint;
use crate::diffusion::train::{train_denoiser, TrainingExample};
use crate::diffusion::{Autoencoder, Denoiser, NoiseSchedule};
use crate::error::{ensure, Error, Result};
use crate::eval::{AnnotationFile, BBox, GroundTruthBox};
use crate::generation::{generate_defect, GenerationRequest};
use crate::grid::{BinaryMask, Grid, PixelBox};
use crate::imageio::{save_mask_png, save_png};
use crate::integration::integrate;
use crate::inversion::{learn_concept, ConceptEmbedding, InversionConfig, InversionRun, ReferenceSample, ReferenceSet};

/// Render a dataset under `out`. The manifest is written last, so a failed
/// run never leaves a manifest behind.
pub fn synth_data(preset: DatasetPreset, seed: u64, counts: DatasetCounts, size: usize, out: &Path) -> Result<DatasetManifest> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let m = build_dataset(preset, seed, counts, size, size)?;
    m.write_files(out)?;
    Ok(m)
}

/// Content hash of a training corpus.
pub fn corpus_fingerprint(data: &[TrainingExample]) -> String {
    let mut h = Sha256::new();
    for ex in data {
        for v in ex.image.data() {
            h.update(v.to_le_bytes());
        }
        for t in ex.prompt.tokens() {
            h.update(t.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

/// Train the backbone on the generic corpus plus `extra`.
pub fn train_backbone(cfg: &PipelineConfig, extra: &[TrainingExample]) -> Result<(Checkpoint, Vec<f64>)> {
    let n = cfg.image_size;
    let mut data = pretraining_corpus(cfg.pretrain.images, n, n, cfg.pretrain.seed, cfg.denoiser.context_len)?;
    data.extend_from_slice(extra);
    let sched = NoiseSchedule::from_config(&cfg.schedule)?;
    let mut model = Denoiser::new(cfg.denoiser.clone(), cfg.train.seed)?;
    let ae = Autoencoder::Identity;
    info!("training backbone on {} images for {} steps", data.len(), cfg.train.steps);
    let losses = train_denoiser(&mut model, &data, &sched, &ae, &cfg.train)?;
    Ok((
        Checkpoint {
            model,
            schedule: cfg.schedule.clone(),
            autoencoder: ae,
            training_seed: cfg.train.seed,
            dataset_fingerprint: corpus_fingerprint(&data),
        },
        losses,
    ))
}

/// Prompt used while learning a concept seen on `domain`.
pub fn learn_template(domain: Domain) -> String {
    format!("a photo of {} with S*", domain.word())
}

/// Prompt used when generating onto `domain`.
pub fn generation_prompt(domain: Domain) -> String {
    learn_template(domain)
}

pub fn manifest_references(manifest: &DatasetManifest) -> Result<ReferenceSet> {
    let items: Vec<_> = manifest.with_role(Role::Reference).collect();
    ensure!(!items.is_empty(), Error::Data("dataset has no reference items".into()));
    let domain = items[0].domain;
    let samples = items
        .iter()
        .map(|it| {
            let s = manifest.materialize(it)?;
            Ok(ReferenceSample {
                image: s.image,
                mask: s.mask,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    ReferenceSet::new(samples, learn_template(domain))
}

pub fn learn(ckpt: &Checkpoint, refs: &ReferenceSet, cfg: &InversionConfig) -> Result<InversionRun> {
    let sched = NoiseSchedule::from_config(&ckpt.schedule)?;
    learn_concept(&ckpt.model, &ckpt.autoencoder, refs, &sched, cfg)
}

#[derive(Debug, Clone)]
pub struct GeneratedSample {
    pub id: String,
    pub background_id: String,
    pub image: Grid,
    pub mask: BinaryMask,
    pub bbox: PixelBox,
    pub seed: u64,
}

/// Procedural scratch mask drawn for generated sample `seed` on `bg`.
pub fn procedural_mask(bg: &Grid, seed: u64) -> Result<BinaryMask> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let stroke = StrokeDistribution::scratch().sample(&mut rng, bg.height(), bg.width());
    Ok(render_stroke(bg, &stroke)?.1)
}

/// Generate `count` samples, cycling through `backgrounds` round-robin, so
/// each is used `count / n` or `count / n + 1` times. Every use draws a fresh
/// mask (unless masks are provided per background) and a fresh seed.
pub fn generate_batch(
    ckpt: &Checkpoint,
    embedding: &ConceptEmbedding,
    backgrounds: &[(String, Grid)],
    masks: Option<&[BinaryMask]>,
    count: usize,
    seed: u64,
    gcfg: &GenerateConfig,
) -> Result<Vec<GeneratedSample>> {
    if count == 0 {
        return Ok(Vec::new());
    }
    ensure!(!backgrounds.is_empty(), Error::Data("no backgrounds to generate on".into()));
    if let Some(m) = masks {
        ensure!(
            m.len() == backgrounds.len(),
            Error::Data(format!("{} masks for {} backgrounds", m.len(), backgrounds.len()))
        );
    }
    let sched = NoiseSchedule::from_config(&ckpt.schedule)?;
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let (bg_id, bg) = &backgrounds[i % backgrounds.len()];
        let s = sample_seed(Role::Generation, seed, i as u64);
        let mask = match masks {
            Some(m) => m[i % backgrounds.len()].clone(),
            None => procedural_mask(bg, s)?,
        };
        let req = GenerationRequest {
            background: bg.clone(),
            defect_mask: mask,
            embedding: embedding.clone(),
            seed: s,
            options: gcfg.options.clone(),
        };
        let res = generate_defect(&req, &ckpt.model, &ckpt.autoencoder, &sched).map_err(|e| e.in_stage(format!("generate sample {i}")))?;
        let image = if gcfg.integrate {
            integrate(&res, bg, &gcfg.integration)?.image
        } else {
            res.image
        };
        out.push(GeneratedSample {
            id: format!("syn_{i:04}"),
            background_id: bg_id.clone(),
            image,
            bbox: res.bbox,
            mask: res.mask,
            seed: s,
        });
    }
    Ok(out)
}

/// Ground-truth annotations for generated samples.
pub fn generated_annotations(samples: &[GeneratedSample]) -> AnnotationFile {
    let mut f = AnnotationFile::default();
    for s in samples {
        f.push_ground_truth(&GroundTruthBox {
            image_id: s.id.clone(),
            bbox: BBox::from_pixels(&s.bbox),
        });
    }
    f
}

/// Write images, masks and `annotations.json` under `dir`.
pub fn write_generated(samples: &[GeneratedSample], dir: &Path) -> Result<AnnotationFile> {
    for sub in ["images", "masks"] {
        let p = dir.join(sub);
        std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    for s in samples {
        save_png(&s.image, &dir.join("images").join(format!("{}.png", s.id)))?;
        save_mask_png(&s.mask, &dir.join("masks").join(format!("{}.png", s.id)))?;
    }
    let ann = generated_annotations(samples);
    ann.save(&dir.join("annotations.json"))?;
    Ok(ann)
}
