//! Seeded dataset manifests. Every item is regenerable from its seed alone.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::texture::{render_spot, render_stroke, synth_background, synth_scratch, Domain, LabeledSample, StrokeDistribution, TextureSpec};
use crate::diffusion::train::TrainingExample;
use crate::diffusion::PromptEncoding;
use crate::error::{ensure, Error, Result};
use crate::grid::{BinaryMask, PixelBox};
use crate::imageio::{save_mask_png, save_png};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    /// Few real defects the concept is learned from.
    Reference,
    /// Clean target-domain surfaces used for generation.
    Background,
    /// Held-out real defects.
    Test,
    /// Real defects of the source domain (zero-shot only).
    SourceTrain,
    /// Generic pretraining images.
    Pretrain,
    /// Stroke masks drawn at generation time.
    Generation,
}

impl Role {
    fn code(self) -> u64 {
        match self {
            Role::Reference => 1,
            Role::Background => 2,
            Role::Test => 3,
            Role::SourceTrain => 4,
            Role::Pretrain => 5,
            Role::Generation => 6,
        }
    }

    fn prefix(self) -> &'static str {
        match self {
            Role::Reference => "ref",
            Role::Background => "bg",
            Role::Test => "test",
            Role::SourceTrain => "src",
            Role::Pretrain => "pre",
            Role::Generation => "gen",
        }
    }

    pub fn has_defect(self) -> bool {
        !matches!(self, Role::Background)
    }
}

/// `role` in the top 4 bits, the low 40 bits of the base seed, then a 20-bit
/// index. Distinct roles and indices never collide.
pub fn sample_seed(role: Role, base: u64, index: u64) -> u64 {
    debug_assert!(index < 1 << 20);
    (role.code() << 60) | ((base & 0xFF_FFFF_FFFF) << 20) | (index & 0xF_FFFF)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetPreset {
    FewShot,
    ZeroShot,
}

impl DatasetPreset {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "few_shot" | "few-shot" => Ok(DatasetPreset::FewShot),
            "zero_shot" | "zero-shot" => Ok(DatasetPreset::ZeroShot),
            other => Err(Error::Config(format!("unknown preset {other:?}"))),
        }
    }

    pub fn default_counts(self) -> DatasetCounts {
        match self {
            DatasetPreset::FewShot => DatasetCounts {
                references: 4,
                backgrounds: 20,
                test: 129,
                source_train: 0,
            },
            DatasetPreset::ZeroShot => DatasetCounts {
                references: 4,
                backgrounds: 20,
                test: 133,
                source_train: 150,
            },
        }
    }

    /// Domain of the reference defects.
    pub fn source_domain(self) -> Domain {
        match self {
            DatasetPreset::FewShot => Domain::B,
            DatasetPreset::ZeroShot => Domain::A,
        }
    }

    pub fn target_domain(self) -> Domain {
        Domain::B
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetCounts {
    pub references: usize,
    pub backgrounds: usize,
    pub test: usize,
    pub source_train: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestItem {
    pub id: String,
    pub role: Role,
    pub domain: Domain,
    pub seed: u64,
    /// Paths relative to the manifest's directory.
    pub image: String,
    pub mask: Option<String>,
    /// Inclusive pixel box of the mask.
    pub bbox: Option<PixelBox>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub preset: DatasetPreset,
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub items: Vec<ManifestItem>,
}

/// Regenerate one item from its seed.
pub fn materialize(height: usize, width: usize, item: &ManifestItem) -> Result<LabeledSample> {
    let bg = synth_background(&TextureSpec::new(item.domain, height, width, item.seed))?;
    if !item.role.has_defect() {
        return Ok(LabeledSample {
            mask: BinaryMask::zeros(height, width),
            image: bg,
            bbox: None,
            domain: item.domain,
            defect: false,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(item.seed);
    rng.set_stream(1);
    let stroke = StrokeDistribution::scratch().sample(&mut rng, height, width);
    synth_scratch(&bg, &stroke, item.domain)
}

/// Build the manifest for a preset. Each item is rendered once to record
/// its bounding box.
pub fn build_dataset(preset: DatasetPreset, seed: u64, counts: DatasetCounts, height: usize, width: usize) -> Result<DatasetManifest> {
    ensure!(
        height >= 16 && width >= 16,
        Error::Config(format!("dataset images must be at least 16x16, got {height}x{width}"))
    );
    let plan = [
        (Role::Reference, preset.source_domain(), counts.references),
        (Role::SourceTrain, preset.source_domain(), counts.source_train),
        (Role::Background, preset.target_domain(), counts.backgrounds),
        (Role::Test, preset.target_domain(), counts.test),
    ];
    let mut items = Vec::new();
    for (role, domain, n) in plan {
        ensure!(n < 1 << 20, Error::Config(format!("too many {role:?} items")));
        for i in 0..n {
            let id = format!("{}_{i:04}", role.prefix());
            let mut item = ManifestItem {
                image: format!("images/{id}.png"),
                mask: role.has_defect().then(|| format!("masks/{id}.png")),
                id,
                role,
                domain,
                seed: sample_seed(role, seed, i as u64),
                bbox: None,
            };
            item.bbox = materialize(height, width, &item)?.bbox;
            items.push(item);
        }
    }
    Ok(DatasetManifest {
        version: MANIFEST_VERSION,
        preset,
        seed,
        height,
        width,
        items,
    })
}

impl DatasetManifest {
    pub fn with_role(&self, role: Role) -> impl Iterator<Item = &ManifestItem> {
        self.items.iter().filter(move |i| i.role == role)
    }

    pub fn count(&self, role: Role) -> usize {
        self.with_role(role).count()
    }

    pub fn materialize(&self, item: &ManifestItem) -> Result<LabeledSample> {
        materialize(self.height, self.width, item)
    }

    /// Materialise every item of a role, in manifest order.
    pub fn samples(&self, role: Role) -> Result<Vec<LabeledSample>> {
        self.with_role(role).map(|i| self.materialize(i)).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: DatasetManifest = serde_json::from_str(text).map_err(|e| Error::Format {
            field: "manifest".into(),
            detail: e.to_string(),
        })?;
        ensure!(
            m.version == MANIFEST_VERSION,
            Error::Format {
                field: "version".into(),
                detail: format!("unsupported manifest version {}", m.version),
            }
        );
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Render every image and mask under `dir` and write `manifest.json` last.
    pub fn write_files(&self, dir: &Path) -> Result<()> {
        for sub in ["images", "masks"] {
            let p = dir.join(sub);
            std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        }
        for item in &self.items {
            let s = self.materialize(item)?;
            save_png(&s.image, &dir.join(&item.image))?;
            if let Some(m) = &item.mask {
                save_mask_png(&s.mask, &dir.join(m))?;
            }
        }
        self.save(&dir.join("manifest.json"))
    }
}

/// Generic corpus for training the backbone. Domains alternate; half the
/// images carry several marks (strokes of either polarity, spots, or both)
/// and the prompt names the kind of mark and, for half the images, the
/// surface.
pub fn pretraining_corpus(n: usize, height: usize, width: usize, seed: u64, context_len: usize) -> Result<Vec<TrainingExample>> {
    let marks = StrokeDistribution::generic_mark();
    (0..n)
        .map(|i| {
            let domain = if i % 2 == 0 { Domain::A } else { Domain::B };
            let s = sample_seed(Role::Pretrain, seed, i as u64);
            let bg = synth_background(&TextureSpec::new(domain, height, width, s))?;
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            rng.set_stream(1);
            // Half the prompts leave the surface unnamed, so the model also
            // learns to read it from the image.
            let named = (i / 4) % 2 == 0;
            let (image, text) = if (i / 2) % 2 == 1 {
                // Several marks of one kind (or mixed), so most training crops
                // of a marked image still show one.
                let kind = rng.random_range(0..3u8);
                let mut img = bg;
                for _ in 0..rng.random_range(3..=5) {
                    let stroke = match kind {
                        0 => true,
                        1 => false,
                        _ => rng.random_bool(0.7),
                    };
                    img = if stroke {
                        render_stroke(&img, &marks.sample(&mut rng, height, width))?.0
                    } else {
                        let r = rng.random_range(1.5f32..4.0);
                        let cx = rng.random_range(r + 2.0..width as f32 - r - 2.0);
                        let cy = rng.random_range(r + 2.0..height as f32 - r - 2.0);
                        let mag = rng.random_range(0.1f32..0.35);
                        render_spot(&img, cx, cy, r, if rng.random_bool(0.5) { mag } else { -mag })
                    };
                }
                let word = ["scratch", "spot", "defect"][kind as usize];
                let text = if named {
                    format!("a photo of {} with {word}", domain.word())
                } else {
                    format!("a photo with {word}")
                };
                (img, text)
            } else if named {
                (bg, format!("a photo of clean {}", domain.word()))
            } else {
                (bg, "a clean photo".to_string())
            };
            Ok(TrainingExample {
                image,
                prompt: PromptEncoding::parse(&text, context_len)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preset_counts() {
        let m = build_dataset(DatasetPreset::FewShot, 3, DatasetPreset::FewShot.default_counts(), 32, 32).unwrap();
        assert_eq!(
            (m.count(Role::Reference), m.count(Role::Background), m.count(Role::Test)),
            (4, 20, 129)
        );
        let z = DatasetPreset::ZeroShot.default_counts();
        assert_eq!((z.references, z.source_train, z.backgrounds, z.test), (4, 150, 20, 133));
        let mut seeds: Vec<u64> = m.items.iter().map(|i| i.seed).collect();
        seeds.sort_unstable();
        seeds.dedup();
        assert_eq!(seeds.len(), m.items.len());
    }

    #[test]
    fn manifest_regenerates_and_round_trips() {
        let counts = DatasetCounts {
            references: 3,
            backgrounds: 2,
            test: 2,
            source_train: 1,
        };
        let m = build_dataset(DatasetPreset::ZeroShot, 9, counts, 32, 32).unwrap();
        let again = build_dataset(DatasetPreset::ZeroShot, 9, counts, 32, 32).unwrap();
        assert_eq!(m, again);
        let back = DatasetManifest::from_json(&m.to_json().unwrap()).unwrap();
        assert_eq!(back, m);
        for it in &m.items {
            let s = m.materialize(it).unwrap();
            assert_eq!(s.bbox, it.bbox);
            assert_eq!(s.defect, it.role.has_defect());
        }
        assert!(DatasetManifest::from_json("{").is_err());
    }

    #[test]
    fn seed_fields_are_disjoint() {
        assert_ne!(sample_seed(Role::Reference, 5, 0), sample_seed(Role::Test, 5, 0));
        assert_ne!(sample_seed(Role::Test, 5, 1), sample_seed(Role::Test, 6, 1));
    }

    #[test]
    fn corpus_is_balanced_and_deterministic() {
        let c = pretraining_corpus(8, 32, 32, 1, 8).unwrap();
        let words: Vec<_> = ["scratch", "spot", "defect"].iter().map(|w| crate::diffusion::token_id(w).unwrap()).collect();
        let marked = c.iter().filter(|e| e.prompt.tokens().iter().any(|t| words.contains(t))).count();
        assert_eq!(marked, 4);
        assert_eq!(c[3].image, pretraining_corpus(8, 32, 32, 1, 8).unwrap()[3].image);
    }
}
