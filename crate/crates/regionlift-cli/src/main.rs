//! Command-line interface for the detection post-processing toolkit.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use regionlift::pipeline::{
    build_region_dataset, dump_regions, evaluate_only, load_model, run_cascade, save_model,
    simulate, train_bundle, train_classifiers, train_codebooks, train_rescorers, write_run_outputs,
    write_scenes, Annotations, CascadeInputs, ConfigFile, DatasetPolicy, Detections, DiskImages,
    FusionMode, ModelBundle, ModelScorer, OracleScorer, RegionDataset, RunConfig,
};
use regionlift::support::Orientation;

#[derive(Parser)]
#[command(
    name = "regionlift",
    about = "Detection post-processing: supporting regions, bag-of-words region scoring, score fusion, and interpolated-AP evaluation",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum OrientationArg {
    Higher,
    Lower,
}

#[derive(Clone, Copy, ValueEnum)]
enum FusionArg {
    Simple,
    Rescore,
}

#[derive(Clone, Copy, ValueEnum)]
enum PolicyArg {
    GtOnly,
    GtPlusFalseAlarms,
}

/// Config file plus the flag overrides shared by most commands.
#[derive(Args)]
struct ConfigArgs {
    /// TOML config file ([run] and [simulate] tables).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    orientation: Option<OrientationArg>,
    /// Margin of the local-background ring as a fraction of box size.
    #[arg(long)]
    margin_frac: Option<f64>,
    /// Candidate-score cutoff (default -0.95).
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    fusion: Option<FusionArg>,
    /// Weight of the classification score in simple fusion.
    #[arg(long)]
    weight: Option<f64>,
}

impl ConfigArgs {
    fn load_file(&self) -> Result<Option<ConfigFile>> {
        match &self.config {
            Some(path) => Ok(Some(ConfigFile::load(path)?)),
            None => Ok(None),
        }
    }

    fn apply(&self, run: &mut RunConfig, seed: Option<u64>) {
        if let Some(o) = self.orientation {
            run.orientation = match o {
                OrientationArg::Higher => Orientation::Higher,
                OrientationArg::Lower => Orientation::Lower,
            };
        }
        if let Some(m) = self.margin_frac {
            run.margin_frac = m;
        }
        if let Some(t) = self.threshold {
            run.score_threshold = t;
        }
        if let Some(f) = self.fusion {
            run.fusion = match f {
                FusionArg::Simple => FusionMode::Simple,
                FusionArg::Rescore => FusionMode::Rescore,
            };
        }
        if let Some(w) = self.weight {
            run.fusion_weight = w;
        }
        if let Some(s) = seed {
            run.seed = s;
        }
    }

    fn resolve(&self, seed: Option<u64>) -> Result<RunConfig> {
        let mut run = self.load_file()?.map(|f| f.run).unwrap_or_default();
        self.apply(&mut run, seed);
        run.validate()?;
        Ok(run)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a seeded synthetic dataset (images, annotations, detections).
    Simulate {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Build the region-level training dataset from annotations.
    BuildDataset {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        annotations: PathBuf,
        /// Required for the gt-plus-false-alarms policy.
        #[arg(long)]
        detections: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "gt-only")]
        policy: PolicyArg,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the codebook(s) over a region dataset.
    TrainCodebook {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        seed: u64,
        /// Output model file (codebooks only; classifiers come next).
        #[arg(long)]
        out: PathBuf,
    },
    /// Train per-category linear region classifiers into a model file.
    TrainClassifier {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Model file holding trained codebooks (from train-codebook).
        /// Omit to train codebooks and classifiers in one go.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train per-category RBF rescorers from training detections.
    TrainRescorer {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long)]
        detections: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Dump the supporting regions of one image as JSON.
    Regions {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long)]
        detections: PathBuf,
        #[arg(long)]
        image: String,
        #[arg(long)]
        category: Option<u32>,
        /// Write to a file instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the cascade: threshold, support regions, classify, fuse, evaluate.
    Run {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long)]
        detections: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Diagnostic: score boxes against ground truth instead of the model.
        #[arg(long, default_value_t = false)]
        oracle: bool,
    },
    /// Evaluate detections against annotations (no rescoring).
    Eval {
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long)]
        detections: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        iou_threshold: f64,
        /// Require overlap strictly above the threshold.
        #[arg(long, default_value_t = false)]
        strict: bool,
        /// Write report.json and PR CSVs here.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
}

fn images_root(annotations_path: &Path) -> PathBuf {
    annotations_path.parent().unwrap_or(Path::new(".")).to_path_buf()
}

fn load_inputs(annotations: &Path, detections: &Path) -> Result<(Annotations, Detections)> {
    let ann = Annotations::load(annotations)
        .with_context(|| format!("loading annotations {}", annotations.display()))?;
    let det = Detections::load(detections, &ann)
        .with_context(|| format!("loading detections {}", detections.display()))?;
    Ok((ann, det))
}

fn main() {
    if let Err(e) = run() {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run() -> Result<()> {
    match Cli::parse().command {
        Command::Simulate { config, seed, out_dir } => {
            let params = config.load_file()?.map(|f| f.simulate).unwrap_or_default();
            let scenes = simulate(&params, seed)?;
            write_scenes(&out_dir, &scenes)?;
            let resolved = ConfigFile {
                run: RunConfig { seed, ..RunConfig::default() },
                simulate: params.clone(),
            };
            resolved.save(&out_dir.join("config.toml"))?;
            println!(
                "wrote {} images, {} objects, {} detections to {}",
                scenes.images.len(),
                scenes.annotations.objects.len(),
                scenes.detections.items.len(),
                out_dir.display()
            );
        }
        Command::BuildDataset { config, annotations, detections, policy, seed, out } => {
            let run = config.resolve(Some(seed))?;
            let ann = Annotations::load(&annotations)?;
            let policy = match policy {
                PolicyArg::GtOnly => DatasetPolicy::GtOnly,
                PolicyArg::GtPlusFalseAlarms => DatasetPolicy::GtPlusFalseAlarms,
            };
            let det = match (&detections, policy) {
                (Some(path), _) => Detections::load(path, &ann)?,
                (None, DatasetPolicy::GtOnly) => Detections::default(),
                (None, DatasetPolicy::GtPlusFalseAlarms) => {
                    bail!("--detections is required for the gt-plus-false-alarms policy")
                }
            };
            let ds = build_region_dataset(&ann, &det, policy, &run.support_config(), seed)?;
            ds.save(&out)?;
            println!("wrote {} region samples to {}", ds.samples.len(), out.display());
        }
        Command::TrainCodebook { config, annotations, dataset, seed, out } => {
            let run = config.resolve(Some(seed))?;
            let ann = Annotations::load(&annotations)?;
            let ds = RegionDataset::load(&dataset)?;
            let provider = DiskImages { root: images_root(&annotations) };
            let (codebooks, assignment) = train_codebooks(&ann, &ds, &provider, &run)?;
            let bundle = ModelBundle {
                config: run,
                codebooks,
                categories: assignment
                    .into_iter()
                    .map(|(cat, idx)| {
                        (cat, regionlift::pipeline::CategoryModel {
                            codebook_idx: idx,
                            weights: Vec::new(),
                            bias: 0.0,
                        })
                    })
                    .collect(),
                rescorers: BTreeMap::new(),
            };
            save_model(&out, &bundle)?;
            println!("wrote {} codebook(s) to {}", bundle.codebooks.len(), out.display());
        }
        Command::TrainClassifier { config, annotations, dataset, model, seed, out } => {
            let ann = Annotations::load(&annotations)?;
            let ds = RegionDataset::load(&dataset)?;
            let provider = DiskImages { root: images_root(&annotations) };
            let bundle = match model {
                Some(path) => {
                    let mut bundle = load_model(&path)?;
                    config.apply(&mut bundle.config, Some(seed));
                    bundle.config.validate()?;
                    let assignment: BTreeMap<u32, usize> = bundle
                        .categories
                        .iter()
                        .map(|(&c, m)| (c, m.codebook_idx))
                        .collect();
                    bundle.categories = train_classifiers(
                        &ann,
                        &ds,
                        &provider,
                        &bundle.codebooks,
                        &assignment,
                        &bundle.config,
                    )?;
                    bundle
                }
                None => {
                    let run = config.resolve(Some(seed))?;
                    train_bundle(&ann, &ds, &provider, &run)?
                }
            };
            save_model(&out, &bundle)?;
            println!(
                "wrote classifiers for {} categories to {}",
                bundle.categories.len(),
                out.display()
            );
        }
        Command::TrainRescorer { config, annotations, detections, model, seed, out } => {
            let (ann, det) = load_inputs(&annotations, &detections)?;
            let mut bundle = load_model(&model)?;
            config.apply(&mut bundle.config, Some(seed));
            bundle.config.validate()?;
            let provider = DiskImages { root: images_root(&annotations) };
            bundle.rescorers =
                train_rescorers(&bundle, &ann, &det, &provider, &bundle.config)?;
            save_model(&out, &bundle)?;
            let trained = bundle
                .rescorers
                .values()
                .filter(|s| matches!(s, regionlift::pipeline::RescorerState::Model(_)))
                .count();
            println!(
                "wrote rescorers ({} trained, {} fallback) to {}",
                trained,
                bundle.rescorers.len() - trained,
                out.display()
            );
        }
        Command::Regions { config, annotations, detections, image, category, out } => {
            let run = config.resolve(None)?;
            let (ann, det) = load_inputs(&annotations, &detections)?;
            let json = dump_regions(&run, &ann, &det, &image, category)?;
            match out {
                Some(path) => std::fs::write(&path, json + "\n")
                    .with_context(|| format!("writing {}", path.display()))?,
                None => println!("{json}"),
            }
        }
        Command::Run { config, annotations, detections, model, out_dir, oracle } => {
            let (ann, det) = load_inputs(&annotations, &detections)?;
            let bundle = load_model(&model)?;
            let mut run = match config.load_file()? {
                Some(file) => file.run,
                None => bundle.config.clone(),
            };
            config.apply(&mut run, None);
            run.validate()?;
            let provider = DiskImages { root: images_root(&annotations) };
            let model_scorer = ModelScorer { bundle: &bundle };
            let oracle_scorer = OracleScorer::new(&ann, run.iou_threshold);
            let inputs = CascadeInputs {
                config: &run,
                annotations: &ann,
                detections: &det,
                scorer: if oracle { &oracle_scorer } else { &model_scorer },
                provider: &provider,
                rescorers: Some(&bundle.rescorers),
                threads: None,
            };
            let output = run_cascade(&inputs)?;
            write_run_outputs(&out_dir, &run, &ann, &output)?;
            let baseline = evaluate_only(&ann, &det, &run)?;
            println!("baseline mAP: {:.6}", baseline.mean_ap);
            println!("rescored mAP: {:.6}", output.report.mean_ap);
            for c in &output.report.categories {
                let name = ann.categories.name(c.category).unwrap_or("?");
                println!("  {name}: AP {:.6} ({} ground truth)", c.ap, c.total_gt);
            }
            println!("outputs in {}", out_dir.display());
        }
        Command::Eval { annotations, detections, iou_threshold, strict, out_dir } => {
            let (ann, det) = load_inputs(&annotations, &detections)?;
            let run = RunConfig { iou_threshold, strict_iou: strict, ..RunConfig::default() };
            run.validate()?;
            let report = evaluate_only(&ann, &det, &run)?;
            println!("mAP: {:.6}", report.mean_ap);
            for c in &report.categories {
                let name = ann.categories.name(c.category).unwrap_or("?");
                println!("  {name}: AP {:.6} ({} ground truth)", c.ap, c.total_gt);
            }
            if let Some(dir) = out_dir {
                let output = regionlift::pipeline::CascadeOutput {
                    rescored: det,
                    report,
                    retained: BTreeMap::new(),
                };
                write_run_outputs(&dir, &run, &ann, &output)?;
                println!("outputs in {}", dir.display());
            }
        }
    }
    Ok(())
}
