use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::info;

use defect_synth::bench::{DatasetManifest, DatasetPreset, Domain, Role};
use defect_synth::diffusion::Checkpoint;
use defect_synth::error::{Error, Result};
use defect_synth::eval::{evaluate, AnnotationFile, BBox, Detector, GroundTruthBox, ReferenceDetector};
use defect_synth::imageio::{load_mask_png, load_png, save_png};
use defect_synth::integration::integrate_images;
use defect_synth::inversion::{load_embedding, save_embedding, ReferenceSet};
use defect_synth::pipeline::stages::{
    generate_batch, generation_prompt, learn, learn_template, manifest_references, synth_data, train_backbone, write_generated,
};
use defect_synth::pipeline::{run_experiment, MaskSource, PipelineConfig, RunRecorder};

#[derive(Parser)]
#[command(name = "defect-synth", version, about = "Few-shot defect synthesis and detection experiments")]
struct Cli {
    /// JSON configuration layered over the defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// `key.path=value` override applied after the config file.
    #[arg(long = "set", global = true)]
    overrides: Vec<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Run manifest path; defaults to `<out>/run_manifest.json`.
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a benchmark dataset and its manifest.
    SynthData {
        #[arg(long, default_value = "few_shot")]
        preset: String,
    },
    /// Train the diffusion backbone.
    Train {
        /// Add the clean backgrounds of this dataset to the corpus.
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Learn a concept embedding from 3 to 5 masked references.
    Learn {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory with `images/*.png` and same-named `masks/*.png`.
        #[arg(long, conflicts_with = "dataset")]
        references: Option<PathBuf>,
        /// Use the reference items of a dataset manifest.
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Surface named in the learning prompt.
        #[arg(long, default_value = "surface-b")]
        domain: String,
    },
    /// Synthesise defects on clean backgrounds.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        embedding: PathBuf,
        /// Directory of background PNGs.
        #[arg(long)]
        backgrounds: PathBuf,
        /// Directory of masks named like the backgrounds; otherwise masks
        /// are drawn procedurally.
        #[arg(long)]
        masks: Option<PathBuf>,
        #[arg(long)]
        count: Option<usize>,
        /// Surface named in the generation prompt.
        #[arg(long, default_value = "surface-b")]
        domain: String,
        /// Skip colour matching and gradient-domain blending.
        #[arg(long)]
        no_integrate: bool,
    },
    /// Colour-match and blend a source image into a target over a mask.
    Blend {
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        mask: PathBuf,
    },
    /// Score detections against ground truth, or run a saved detector on a
    /// dataset's test split.
    Eval {
        #[arg(long)]
        ground_truth: Option<PathBuf>,
        #[arg(long)]
        detections: Option<PathBuf>,
        #[arg(long, requires = "dataset")]
        detector: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Run every arm of an experiment preset.
    Experiment {
        #[arg(long, default_value = "few_shot")]
        preset: String,
        /// Reuse a trained backbone instead of training one.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

fn png_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    v.sort();
    Ok(v)
}

fn stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn run(cli: Cli) -> Result<()> {
    let (mut cfg, _) = PipelineConfig::layered(cli.config.as_deref(), &cli.overrides)?;
    let out = cli.out.clone();
    let manifest_path = cli.manifest.clone().unwrap_or_else(|| out.join("run_manifest.json"));
    let name = match &cli.command {
        Command::SynthData { .. } => "synth-data",
        Command::Train { .. } => "train",
        Command::Learn { .. } => "learn",
        Command::Generate { .. } => "generate",
        Command::Blend { .. } => "blend",
        Command::Eval { .. } => "eval",
        Command::Experiment { .. } => "experiment",
    };
    if let Some(s) = cli.seed {
        cfg.train.seed = s;
        cfg.inversion.seed = s;
        cfg.experiment.seeds = vec![s];
    }
    let seed = cli.seed.unwrap_or(0);
    let snapshot = serde_json::to_value(&cfg)?;
    let mut rec = RunRecorder::new(name, snapshot);
    if let Some(c) = &cli.config {
        rec.input(c)?;
    }
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;

    match cli.command {
        Command::SynthData { preset } => {
            let preset = DatasetPreset::parse(&preset)?;
            rec.seed("dataset", seed);
            rec.start("synthesis");
            let m = synth_data(preset, seed, preset.default_counts(), cfg.image_size, &out)?;
            rec.stop();
            info!(
                "wrote {} items ({} reference, {} background, {} test, {} source)",
                m.items.len(),
                m.count(Role::Reference),
                m.count(Role::Background),
                m.count(Role::Test),
                m.count(Role::SourceTrain)
            );
            for sub in ["images", "masks", "manifest.json"] {
                rec.output(&out.join(sub))?;
            }
        }
        Command::Train { dataset } => {
            let mut extra = Vec::new();
            if let Some(d) = &dataset {
                rec.input(d)?;
                let m = DatasetManifest::load(d)?;
                for it in m.with_role(Role::Background) {
                    let s = m.materialize(it)?;
                    extra.push(defect_synth::diffusion::TrainingExample {
                        image: s.image,
                        prompt: defect_synth::diffusion::PromptEncoding::parse(
                            &format!("a photo of clean {}", it.domain.word()),
                            cfg.denoiser.context_len,
                        )?,
                    });
                }
            }
            rec.seed("train", cfg.train.seed);
            rec.seed("pretrain", cfg.pretrain.seed);
            rec.start("training");
            let (ckpt, losses) = train_backbone(&cfg, &extra)?;
            rec.stop();
            let p = out.join("checkpoint.dfck");
            ckpt.save(&p)?;
            let l = out.join("losses.json");
            std::fs::write(&l, serde_json::to_string(&losses)?).map_err(|e| Error::io(&l, e))?;
            rec.output(&p)?;
            rec.output(&l)?;
        }
        Command::Learn {
            checkpoint,
            references,
            dataset,
            domain,
        } => {
            rec.input(&checkpoint)?;
            let ckpt = Checkpoint::load(&checkpoint)?;
            let refs = match (references, dataset) {
                (Some(dir), _) => {
                    let imgs = png_files(&dir.join("images"))?;
                    let pairs: Vec<(PathBuf, PathBuf)> = imgs
                        .into_iter()
                        .map(|p| {
                            let m = dir.join("masks").join(p.file_name().expect("file name"));
                            (p, m)
                        })
                        .collect();
                    for (i, m) in &pairs {
                        rec.input(i)?;
                        rec.input(m)?;
                    }
                    ReferenceSet::load(&pairs, learn_template(Domain::parse(&domain)?))?
                }
                (None, Some(d)) => {
                    rec.input(&d)?;
                    manifest_references(&DatasetManifest::load(&d)?)?
                }
                (None, None) => return Err(Error::Config("learn needs --references or --dataset".into())),
            };
            let mut inv = cfg.inversion.clone();
            if inv.domain.is_empty() {
                inv.domain = domain.clone();
            }
            rec.seed("inversion", inv.seed);
            rec.start("concept learning");
            let run = learn(&ckpt, &refs, &inv)?;
            rec.stop();
            let p = out.join("concept.dfe");
            save_embedding(&run.embedding, &p)?;
            let l = out.join("losses.json");
            std::fs::write(&l, serde_json::to_string(&run.losses)?).map_err(|e| Error::io(&l, e))?;
            rec.output(&p)?;
            rec.output(&l)?;
        }
        Command::Generate {
            checkpoint,
            embedding,
            backgrounds,
            masks,
            count,
            domain,
            no_integrate,
        } => {
            rec.input(&checkpoint)?;
            rec.input(&embedding)?;
            let ckpt = Checkpoint::load(&checkpoint)?;
            let emb = load_embedding(&embedding)?;
            let mut bgs = Vec::new();
            let mut provided = Vec::new();
            for p in png_files(&backgrounds)? {
                rec.input(&p)?;
                bgs.push((stem(&p), load_png(&p)?));
                if let Some(md) = &masks {
                    let mp = md.join(p.file_name().expect("file name"));
                    rec.input(&mp)?;
                    provided.push(load_mask_png(&mp)?);
                }
            }
            let mut g = cfg.generate.clone();
            if let Some(c) = count {
                g.count = c;
            }
            if masks.is_some() {
                g.masks = MaskSource::Provided;
            }
            if no_integrate {
                g.integrate = false;
            }
            g.options.prompt = generation_prompt(Domain::parse(&domain)?);
            rec.seed("generation", seed);
            rec.start("generation");
            let masks_arg = (g.masks == MaskSource::Provided).then_some(provided.as_slice());
            let samples = generate_batch(&ckpt, &emb, &bgs, masks_arg, g.count, seed, &g)?;
            write_generated(&samples, &out)?;
            rec.stop();
            rec.output(&out.join("annotations.json"))?;
            if !samples.is_empty() {
                rec.output(&out.join("images"))?;
                rec.output(&out.join("masks"))?;
            }
        }
        Command::Blend { source, target, mask } => {
            for p in [&source, &target, &mask] {
                rec.input(p)?;
            }
            let s = load_png(&source)?;
            let t = load_png(&target)?;
            let m = load_mask_png(&mask)?;
            rec.start("blend");
            let o = integrate_images(&s, &t, &m, &cfg.generate.integration)?;
            rec.stop();
            if o.clamped > 0 {
                info!("{} pixels clamped into [0, 1]", o.clamped);
            }
            let p = out.join("blended.png");
            save_png(&o.image, &p)?;
            rec.output(&p)?;
        }
        Command::Eval {
            ground_truth,
            detections,
            detector,
            dataset,
        } => {
            rec.start("evaluation");
            let (gts, dets) = match (detector, dataset, ground_truth, detections) {
                (Some(dp), Some(ds), _, _) => {
                    rec.input(&dp)?;
                    rec.input(&ds)?;
                    let det = ReferenceDetector::load(&dp)?;
                    let m = DatasetManifest::load(&ds)?;
                    let mut gts = Vec::new();
                    let mut dets = AnnotationFile::default();
                    for it in m.with_role(Role::Test) {
                        let s = m.materialize(it)?;
                        dets.add_image(&it.id);
                        for d in det.detect(&it.id, &s.image)? {
                            dets.push_detection(&d);
                        }
                        if let Some(b) = &s.bbox {
                            gts.push(GroundTruthBox {
                                image_id: it.id.clone(),
                                bbox: BBox::from_pixels(b),
                            });
                        }
                    }
                    let p = out.join("detections.json");
                    dets.save(&p)?;
                    rec.output(&p)?;
                    (gts, dets.detections()?)
                }
                (None, _, Some(g), Some(d)) => {
                    rec.input(&g)?;
                    rec.input(&d)?;
                    (AnnotationFile::load(&g)?.ground_truth()?, AnnotationFile::load(&d)?.detections()?)
                }
                _ => {
                    return Err(Error::Config(
                        "eval needs --ground-truth and --detections, or --detector and --dataset".into(),
                    ))
                }
            };
            let report = evaluate(&dets, &gts, &cfg.experiment.eval)?;
            rec.stop();
            report.save(&out, "report")?;
            println!(
                "mAP@{:.2} {:.4}  best F1 {:.4} @ {:.3}  P {:.4} R {:.4} F1 {:.4} @ {:.2}",
                report.primary_iou,
                report.map,
                report.best_f1.f1,
                report.best_f1.threshold,
                report.operating_point.precision,
                report.operating_point.recall,
                report.operating_point.f1,
                report.operating_point.threshold
            );
            rec.output(&out.join("report.json"))?;
            rec.output(&out.join("report_pr.csv"))?;
        }
        Command::Experiment { preset, checkpoint } => {
            let preset = DatasetPreset::parse(&preset)?;
            for &s in &cfg.experiment.seeds {
                rec.seed(&format!("experiment_{s}"), s);
            }
            let ckpt = match checkpoint {
                Some(p) => {
                    rec.input(&p)?;
                    Checkpoint::load(&p)?
                }
                None => {
                    rec.start("backbone training");
                    let (c, _) = train_backbone(&cfg, &[])?;
                    let p = out.join("checkpoint.dfck");
                    c.save(&p)?;
                    rec.output(&p)?;
                    c
                }
            };
            rec.start("experiment");
            let outcome = run_experiment(preset, &cfg, &ckpt, Some(&out))?;
            rec.stop();
            print!("{}", outcome.table());
            for s in &cfg.experiment.seeds {
                rec.output(&out.join(format!("seed_{s}")))?;
            }
            rec.output(&out.join("comparison.md"))?;
            rec.output(&out.join("comparison.json"))?;
        }
    }
    let m = rec.finish(&manifest_path)?;
    info!("run {} complete; manifest at {}", m.run_id, manifest_path.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
