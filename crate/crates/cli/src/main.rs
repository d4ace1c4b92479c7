//! `maskguide`: generate synthetic data, train, evaluate, visualize and
//! inspect mask-guided action classifiers.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use serde_json::json;

use maskguide::activation::{attention_in_mask, predicted_pam, render_overlay, sam, ActivationMap, MapKind};
use maskguide::checkpoint::{self, Checkpoint, MAGIC};
use maskguide::data::{load_image, resize_bilinear, save_image, ActionLabelSpace};
use maskguide::dataset::{load_images, load_manifest, Dataset, Manifest, Split};
use maskguide::losses::softmax;
use maskguide::mask::{mask_to_target, sample_mask};
use maskguide::network::{forward_traced, predict, BACKBONE_STRIDE};
use maskguide::synthetic::{generate_synthetic, SyntheticSpec};
use maskguide::train::{ablation, evaluate_split, mean_attention, score_split, TrainConfig, Trainer, LAST_CHECKPOINT};

#[derive(Parser)]
#[command(name = "maskguide", version, about = "Mask-guided still-image action recognition")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic misleading-context benchmark.
    Generate(GenerateArgs),
    /// Train a model on a manifest.
    Train(TrainArgs),
    /// Compute per-class AP and mAP of a checkpoint on one split.
    Evaluate(EvaluateArgs),
    /// Write SAM, PAM and heatmap overlays for individual images.
    Visualize(VisualizeArgs),
    /// Train with and without the mask loss over several seeds and compare.
    Ablation(AblationArgs),
    /// Summarize a checkpoint or a manifest.
    Inspect(InspectArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// Number of action classes (2 to 10).
    #[arg(long)]
    classes: usize,
    /// Training images.
    #[arg(long)]
    train: usize,
    /// Validation images.
    #[arg(long, default_value_t = 0)]
    val: usize,
    /// Test images.
    #[arg(long)]
    test: usize,
    /// Probability that a training distractor is tied to another class.
    #[arg(long)]
    correlation: f64,
    /// Same probability for validation and test [default: 1/classes].
    #[arg(long)]
    test_correlation: Option<f64>,
    /// Image side in pixels; a multiple of 32.
    #[arg(long, default_value_t = 128)]
    canvas: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ConfigOverrides {
    /// Configuration file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<u64>,
    #[arg(long)]
    lambda_mask: Option<f64>,
    #[arg(long)]
    max_steps: Option<u64>,
    #[arg(long)]
    checkpoint_every: Option<u64>,
    #[arg(long)]
    eval_every: Option<u64>,
    #[arg(long)]
    image_size: Option<usize>,
}

impl ConfigOverrides {
    fn resolve(&self) -> Result<TrainConfig> {
        let mut c = match &self.config {
            Some(p) => TrainConfig::load(p)?,
            None => TrainConfig::default(),
        };
        if let Some(v) = self.seed {
            c.seed = v;
        }
        if let Some(v) = self.learning_rate {
            c.learning_rate = v;
        }
        if let Some(v) = self.batch_size {
            c.batch_size = v;
        }
        if let Some(v) = self.epochs {
            c.epochs = v;
        }
        if let Some(v) = self.lambda_mask {
            c.lambda_mask = v;
        }
        if let Some(v) = self.max_steps {
            c.max_steps = Some(v);
        }
        if let Some(v) = self.checkpoint_every {
            c.checkpoint_every = v;
        }
        if let Some(v) = self.eval_every {
            c.eval_every = v;
        }
        if let Some(v) = self.image_size {
            c.image_size = v;
        }
        Ok(c)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    overrides: ConfigOverrides,
    /// Disable the mask loss (sets lambda_mask = 0).
    #[arg(long, conflicts_with = "lambda_mask")]
    no_mask_loss: bool,
    /// Manifest file.
    #[arg(long)]
    manifest: PathBuf,
    /// Run directory for checkpoints and metrics.
    #[arg(long)]
    out: PathBuf,
    /// Continue from the last checkpoint in the run directory.
    #[arg(long)]
    resume: bool,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value = "test")]
    split: Split,
    /// Directory for report.json, report.txt and predictions.tsv.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct VisualizeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Directory for overlays and records.
    #[arg(long)]
    out: PathBuf,
    /// Manifest providing person boxes for attention_in_mask.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Images to visualize.
    #[arg(required = true)]
    images: Vec<PathBuf>,
}

#[derive(Args)]
struct AblationArgs {
    #[command(flatten)]
    overrides: ConfigOverrides,
    #[arg(long)]
    manifest: PathBuf,
    /// Comma-separated seeds; at least three.
    #[arg(long, value_delimiter = ',', default_values_t = [1u64, 2, 3, 4, 5])]
    seeds: Vec<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct InspectArgs {
    /// Checkpoint or manifest file.
    path: PathBuf,
}

/// Exclusive claim on an output directory, released on drop.
struct OutDirLock {
    path: PathBuf,
}

impl OutDirLock {
    fn acquire(dir: &Path) -> Result<OutDirLock> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join(".lock");
        fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
            .with_context(|| {
                format!(
                    "{} is in use by another run (remove {} if that run is gone)",
                    dir.display(),
                    path.display()
                )
            })?;
        Ok(OutDirLock { path })
    }
}

impl Drop for OutDirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate(a) => cmd_generate(a),
        Command::Train(a) => cmd_train(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Visualize(a) => cmd_visualize(a),
        Command::Ablation(a) => cmd_ablation(a),
        Command::Inspect(a) => cmd_inspect(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn cmd_generate(a: GenerateArgs) -> Result<()> {
    let spec = SyntheticSpec {
        num_classes: a.classes,
        train: a.train,
        val: a.val,
        test: a.test,
        canvas_size: a.canvas,
        train_correlation: a.correlation,
        test_correlation: a.test_correlation,
        seed: a.seed,
    };
    spec.validate()?;
    let _lock = OutDirLock::acquire(&a.out)?;
    let manifest = generate_synthetic(&spec, &a.out)?;
    println!("{}", a.out.join("manifest.jsonl").display());
    for split in [Split::Train, Split::Val, Split::Test] {
        println!("{split}\t{}", manifest.split_len(split));
    }
    Ok(())
}

fn load_dataset(path: &Path, config: &TrainConfig) -> Result<Dataset> {
    let manifest = load_manifest(path)?;
    info!("loading {} images from {}", manifest.records.len(), path.display());
    Ok(Dataset::load(&manifest, config.dataset_config())?)
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut config = a.overrides.resolve()?;
    if a.no_mask_loss {
        config.lambda_mask = 0.0;
    }
    config.validate()?;
    let _lock = OutDirLock::acquire(&a.out)?;
    let dataset = load_dataset(&a.manifest, &config)?;
    fs::write(a.out.join("config.toml"), config.to_toml_string()).context("writing config.toml")?;
    let trainer = if a.resume {
        let ckpt = a.out.join(LAST_CHECKPOINT);
        if !ckpt.exists() {
            bail!("--resume given but {} does not exist", ckpt.display());
        }
        Trainer::resume(config.clone(), &dataset, &a.out, &ckpt)?
    } else {
        Trainer::new(config.clone(), &dataset, Some(&a.out))?
    };
    info!(
        "training from step {} (lambda_mask = {})",
        trainer.state().step,
        config.lambda_mask
    );
    let outcome = trainer.run()?;
    println!(
        "finished at step {} (epoch {}); checkpoints and metrics in {}",
        outcome.state.step,
        outcome.state.epoch,
        a.out.display()
    );
    Ok(())
}

fn load_checkpoint_for(path: &Path, manifest: &Manifest) -> Result<Checkpoint> {
    let ckpt = checkpoint::load(path)?;
    if ckpt.label_names != manifest.label_space.names() {
        bail!(
            "checkpoint classes {:?} differ from manifest classes {:?}",
            ckpt.label_names,
            manifest.label_space.names()
        );
    }
    Ok(ckpt)
}

fn cmd_evaluate(a: EvaluateArgs) -> Result<()> {
    let manifest = load_manifest(&a.manifest)?;
    let ckpt = load_checkpoint_for(&a.checkpoint, &manifest)?;
    let _lock = OutDirLock::acquire(&a.out)?;
    let images = load_images(&manifest)?;
    let params = &ckpt.state.params;
    let dataset_config = ckpt.config.dataset_config();

    // Classification sees the images only: annotations are stripped first.
    let bare = Dataset::from_images(&manifest.without_annotations(), images.clone(), dataset_config)?;
    let report = evaluate_split(params, &bare, a.split, false)?;
    let (table, indices) = score_split(params, &bare, a.split)?;

    let labels = &manifest.label_space;
    fs::write(a.out.join("report.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    fs::write(a.out.join("report.txt"), report.to_text(Some(labels)))?;
    let mut tsv = String::from("image\tlabel\tpredicted\tconfidence\n");
    for (row, &i) in indices.iter().enumerate() {
        let scores = table.scores().row(row);
        let (pred, conf) = scores
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (c, &p)| if p > best.1 { (c, p) } else { best });
        let rec = &manifest.records[i];
        tsv.push_str(&format!(
            "{}\t{}\t{}\t{conf:.6}\n",
            rec.image,
            labels.name(rec.label).unwrap_or("?"),
            labels.name(pred).unwrap_or("?")
        ));
    }
    fs::write(a.out.join("predictions.tsv"), tsv)?;

    // Attention needs person boxes, so it is reported separately.
    let annotated = Dataset::from_images(&manifest, images, dataset_config)?;
    if let Some(att) = mean_attention(params, &annotated, &indices)? {
        fs::write(
            a.out.join("attention.json"),
            serde_json::to_string_pretty(&json!({ "split": a.split.as_str(), "mean_attention_in_mask": att }))? + "\n",
        )?;
    }
    print!("{}", report.to_text(Some(labels)));
    Ok(())
}

fn cmd_visualize(a: VisualizeArgs) -> Result<()> {
    let ckpt = checkpoint::load(&a.checkpoint)?;
    let labels = ActionLabelSpace::new(ckpt.label_names.clone())?;
    let manifest = a.manifest.as_deref().map(load_manifest).transpose()?;
    let _lock = OutDirLock::acquire(&a.out)?;
    let size = ckpt.config.image_size;
    let mut used = HashSet::new();
    let mut ok = 0usize;
    for (i, path) in a.images.iter().enumerate() {
        let pixels = match load_image(path) {
            Ok(p) => p,
            Err(e) => {
                warn!("skipping {}: {e}", path.display());
                continue;
            }
        };
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("image").to_string();
        let name = if used.insert(stem.clone()) { stem } else { format!("{stem}-{i}") };
        visualize_one(&ckpt, &labels, manifest.as_ref(), path, &pixels, size, &a.out, &name)?;
        ok += 1;
    }
    if ok == 0 {
        bail!("none of the {} images could be read", a.images.len());
    }
    println!("wrote {ok} visualizations to {}", a.out.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn visualize_one(
    ckpt: &Checkpoint,
    labels: &ActionLabelSpace,
    manifest: Option<&Manifest>,
    path: &Path,
    original: &maskguide::data::Image,
    size: usize,
    out: &Path,
    name: &str,
) -> Result<()> {
    let params = &ckpt.state.params;
    let (h, w, _) = original.dim();
    let pixels = resize_bilinear(original, size, size);
    let (outputs, _) = forward_traced(params, &pixels)?;
    let predicted = predict(&outputs)?;
    let confidence = softmax(outputs.logits.as_slice().expect("contiguous"))[predicted];
    let pam = predicted_pam(params, &outputs)?;
    let heatmap = ActivationMap {
        grid: outputs.heatmap.clone(),
        kind: MapKind::Heatmap,
    };
    save_image(&out.join(format!("{name}_sam.png")), &render_overlay(&pixels, &sam(&outputs.f_cls)))?;
    save_image(&out.join(format!("{name}_pam.png")), &render_overlay(&pixels, &pam))?;
    save_image(&out.join(format!("{name}_heatmap.png")), &render_overlay(&pixels, &heatmap))?;

    let mut record = json!({
        "image": path.display().to_string(),
        "predicted_class": predicted,
        "predicted_label": labels.name(predicted),
        "confidence": confidence,
    });
    let canonical = fs::canonicalize(path).ok();
    let annotated = manifest.and_then(|m| {
        m.records
            .iter()
            .find(|r| canonical.is_some() && fs::canonicalize(m.image_path(r)).ok() == canonical)
            .filter(|r| r.has_person_evidence())
    });
    if let Some(rec) = annotated {
        let (sx, sy) = (size as f64 / w as f64, size as f64 / h as f64);
        let boxes: Vec<_> = rec.boxes.iter().map(|b| b.scaled(sx, sy)).collect();
        let kps = rec.keypoints.as_ref().map(|k| k.scaled(sx, sy));
        let mask = sample_mask(&boxes, kps.as_ref(), ckpt.config.min_extent, size, size)?;
        let f = size / BACKBONE_STRIDE;
        let target = mask_to_target(&mask, f, f, ckpt.config.mask_target)?;
        record["attention_in_mask"] = json!(attention_in_mask(&pam, &target)?);
    }
    fs::write(out.join(format!("{name}.json")), serde_json::to_string_pretty(&record)? + "\n")?;
    Ok(())
}

fn cmd_ablation(a: AblationArgs) -> Result<()> {
    let config = a.overrides.resolve()?;
    config.validate()?;
    let _lock = OutDirLock::acquire(&a.out)?;
    let dataset = load_dataset(&a.manifest, &config)?;
    let report = ablation(&config, &dataset, &a.seeds)?;
    fs::write(a.out.join("ablation.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    println!("seed\tmAP delta\tattention delta");
    for d in &report.per_seed {
        println!(
            "{}\t{:+.4}\t{}",
            d.seed,
            d.map_delta,
            d.attention_delta.map_or("n/a".into(), |v| format!("{v:+.4}"))
        );
    }
    println!(
        "mean mAP without {:.4}, with {:.4}",
        report.mean_map_without, report.mean_map_with
    );
    if let (Some(w0), Some(w1)) = (report.mean_attention_without, report.mean_attention_with) {
        println!("mean attention_in_mask without {w0:.4}, with {w1:.4}");
    }
    Ok(())
}

fn cmd_inspect(a: InspectArgs) -> Result<()> {
    let bytes = fs::read(&a.path).with_context(|| format!("reading {}", a.path.display()))?;
    if bytes.starts_with(MAGIC) {
        let c = checkpoint::decode(&bytes)?;
        let s = &c.state;
        println!("checkpoint {}", a.path.display());
        println!("classes: {}", c.label_names.join(", "));
        println!("parameters: {}", s.params.num_parameters());
        println!("backbone channels: {:?}", s.params.spec.backbone.stage_channels);
        println!(
            "heads: cls {} loc {:?} ({:?})",
            s.params.spec.cls_channels, s.params.spec.loc_channels, s.params.spec.loc_output
        );
        println!("optimizer: {:?}", s.optimizer.kind());
        println!("step {} epoch {} batch {}", s.step, s.epoch, s.batch_cursor);
        if let Some(m) = s.best_val_map {
            println!("best val mAP: {m:.4}");
        }
        print!("{}", c.config.to_toml_string());
    } else {
        let m = load_manifest(&a.path)?;
        println!("manifest {}", a.path.display());
        for split in [Split::Train, Split::Val, Split::Test] {
            let recs: Vec<_> = m.records.iter().filter(|r| r.split == split).collect();
            let per_class: Vec<String> = (0..m.label_space.len())
                .map(|c| {
                    let n = recs.iter().filter(|r| r.label == c).count();
                    format!("{}={n}", m.label_space.name(c).unwrap_or("?"))
                })
                .collect();
            println!("{split}\t{}\t{}", recs.len(), per_class.join(" "));
        }
    }
    Ok(())
}
