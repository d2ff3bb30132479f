//! Procedural benchmark: two surface domains, thin scratch defects with exact
//! masks, seeded dataset manifests and a generic pretraining corpus.

mod dataset;
mod texture;

pub use dataset::{
    build_dataset, materialize, pretraining_corpus, sample_seed, DatasetCounts, DatasetManifest, DatasetPreset, ManifestItem, Role,
    MANIFEST_VERSION,
};
pub use texture::{
    domain_mean, render_spot, render_stroke, synth_background, synth_scratch, DefectStroke, Domain, LabeledSample, StrokeDistribution,
    TextureSpec,
};
