//! Command-line interface for the textured-surface defect inspection
//! pipeline: synthetic-defect previews, two-phase training, memory-bank
//! establishment, single-image inspection, dataset evaluation, edge/cloud
//! split execution and the desk-scale smoke run.

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use fmrnet::config::Config;
use fmrnet::imaging::{self, DatasetLayout};
use fmrnet::inspection;
use fmrnet::pipeline::{self, ExitPolicy, InferencePayload};
use fmrnet::smoke;
use fmrnet::synth::make_training_pair;
use fmrnet::training::{establish_memory, Model, TrainCorpus, Trainer};
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "fmrnet",
    about = "Unsupervised textured-surface defect inspection",
    version
)]
struct Cli {
    /// TOML configuration file; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Preview artificial synthetic defects for dataset images.
    Synthesize(SynthesizeArgs),
    /// Run the two-phase training procedure.
    Train(TrainArgs),
    /// Establish the memory bank from a phase-1 checkpoint.
    BuildMemory(BuildMemoryArgs),
    /// Inspect a single image at patch, pixel or automatic level.
    Inspect(InspectArgs),
    /// Evaluate a dataset and emit metrics as JSON or CSV.
    Evaluate(EvaluateArgs),
    /// Run the edge head and write the feature interchange file.
    SplitExport(SplitExportArgs),
    /// Resume pixel-level inference from a feature interchange file.
    SplitResume(SplitResumeArgs),
    /// Desk-scale end-to-end run on the procedural striped corpus.
    Smoke(SmokeArgs),
    /// Print the default configuration as TOML.
    DefaultConfig,
}

#[derive(Args)]
struct SynthesizeArgs {
    /// Number of preview samples.
    #[arg(long, default_value_t = 4)]
    count: usize,
    #[arg(long, default_value = "synth_preview")]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, value_enum, default_value_t = PhaseArg::All)]
    phase: PhaseArg,
    /// Checkpoint to continue from (required for phase 2 alone).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Output checkpoint path.
    #[arg(long, default_value = "model.fmrc")]
    out: PathBuf,
    /// Loss log CSV path.
    #[arg(long)]
    log_csv: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum PhaseArg {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    All,
}

#[derive(Args)]
struct BuildMemoryArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct InspectArgs {
    /// Image to inspect.
    image: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_enum, default_value_t = LevelArg::Pixel)]
    level: LevelArg,
    /// Output directory for maps, mask and metrics.
    #[arg(long, default_value = "inspect_out")]
    out: PathBuf,
    /// Also write the per-modality anomaly maps.
    #[arg(long)]
    modality_maps: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum LevelArg {
    Patch,
    Pixel,
    Auto,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Metrics output path (.json or .csv).
    #[arg(long, default_value = "metrics.json")]
    out: PathBuf,
}

#[derive(Args)]
struct SplitExportArgs {
    image: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Interchange output file.
    #[arg(long, default_value = "features.fmrx")]
    out: PathBuf,
}

#[derive(Args)]
struct SplitResumeArgs {
    /// Interchange file produced by split-export.
    interchange: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value = "resume_out")]
    out: PathBuf,
}

#[derive(Args)]
struct SmokeArgs {
    /// Write the trained smoke model here.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write the smoke report JSON here.
    #[arg(long)]
    report: Option<PathBuf>,
}

fn load_config(path: &Option<PathBuf>) -> Result<Config> {
    match path {
        Some(p) => Config::load(p).with_context(|| format!("loading config {}", p.display())),
        None => Ok(Config::default()),
    }
}

fn load_corpus(cfg: &Config) -> Result<(TrainCorpus, imaging::DatasetIndex)> {
    let ws = cfg.dataset.working_size();
    let index = imaging::load_dataset(&cfg.dataset.root, DatasetLayout::MvtecLike, ws, cfg.dataset.colorspace)
        .context("indexing dataset")?;
    let mut images = Vec::with_capacity(index.train.len());
    for entry in &index.train {
        images.push(imaging::load_image(&entry.image_path, ws, cfg.dataset.colorspace)?);
    }
    let pool = cfg.synth.load_pool(ws, cfg.dataset.colorspace)?;
    Ok((TrainCorpus { images, synth: cfg.synth.to_synth_config(), pool }, index))
}

fn load_model(cfg: &Config, path: &Path) -> Result<Model> {
    let arch = cfg.arch.to_arch_config()?;
    // Fall back to the checkpoint's own architecture when the configured
    // preset does not pin this file.
    let model = Model::load(path, Some(&arch)).or_else(|e| match e {
        fmrnet::networks::NetworkError::ConfigMismatch { .. } => Model::load(path, None),
        other => Err(other),
    })?;
    Ok(model)
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    std::fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn cmd_synthesize(cfg: &Config, args: &SynthesizeArgs) -> Result<()> {
    let ws = cfg.dataset.working_size();
    let index = imaging::load_dataset(
        &cfg.dataset.root,
        DatasetLayout::MvtecLike,
        ws,
        cfg.dataset.colorspace,
    )?;
    let pool = cfg.synth.load_pool(ws, cfg.dataset.colorspace)?;
    let synth = cfg.synth.to_synth_config();
    std::fs::create_dir_all(&args.out)?;
    let seed = fmrnet::env_seed_override().unwrap_or(args.seed);
    for i in 0..args.count {
        let entry = &index.train[i % index.train.len()];
        let img = imaging::load_image(&entry.image_path, ws, cfg.dataset.colorspace)?;
        let pair = make_training_pair(&img, &synth, &pool, seed.wrapping_add(i as u64))?;
        pipeline::save_image_png(pair.synthetic.pixels(), &args.out.join(format!("{i:03}_synthetic.png")))?;
        pipeline::save_image_png(pair.clean.pixels(), &args.out.join(format!("{i:03}_clean.png")))?;
        pipeline::save_mask_png(&pair.mask, &args.out.join(format!("{i:03}_mask.png")))?;
        println!("sample {i:03}: mode {:?}", pair.mode);
    }
    println!("previews written to {}", args.out.display());
    Ok(())
}

fn cmd_train(cfg: &Config, args: &TrainArgs) -> Result<()> {
    let (corpus, _) = load_corpus(cfg)?;
    let arch = cfg.arch.to_arch_config()?;
    let sched = cfg.train.to_schedule();
    let model = match (&args.checkpoint, args.phase) {
        (Some(p), _) => load_model(cfg, p)?,
        (None, PhaseArg::Two) => bail!("--phase 2 requires --checkpoint from phase 1"),
        (None, _) => Model::init(arch, sched.seed)?,
    };
    let mut trainer = Trainer::new(model, cfg.train.weights.clone(), sched);
    if let Some(dir) = args.out.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
            trainer.checkpoint_dir = Some(dir.to_path_buf());
        }
    }
    match args.phase {
        PhaseArg::One => {
            println!("phase 1: {} iterations", trainer.sched.t1);
            trainer.train_phase1(&corpus)?;
        }
        PhaseArg::Two => {
            if trainer.model.bank.is_none() {
                println!("establishing memory bank");
                establish_memory(
                    &mut trainer.model,
                    &corpus,
                    cfg.memory_seed(),
                    cfg.memory.calibration_margin,
                )?;
            }
            println!("phase 2: {} iterations", trainer.sched.t2);
            trainer.train_phase2(&corpus)?;
        }
        PhaseArg::All => {
            println!("phase 1: {} iterations", trainer.sched.t1);
            trainer.train_phase1(&corpus)?;
            println!("establishing memory bank");
            establish_memory(
                &mut trainer.model,
                &corpus,
                cfg.memory_seed(),
                cfg.memory.calibration_margin,
            )?;
            println!("phase 2: {} iterations", trainer.sched.t2);
            trainer.train_phase2(&corpus)?;
        }
    }
    trainer.model.save(&args.out)?;
    println!("checkpoint written to {}", args.out.display());
    if let Some(csv) = &args.log_csv {
        trainer.write_log_csv(csv)?;
        println!("loss log written to {}", csv.display());
    }
    Ok(())
}

fn cmd_build_memory(cfg: &Config, args: &BuildMemoryArgs) -> Result<()> {
    let (corpus, _) = load_corpus(cfg)?;
    let mut model = load_model(cfg, &args.checkpoint)?;
    establish_memory(&mut model, &corpus, cfg.memory_seed(), cfg.memory.calibration_margin)?;
    let out = args.out.clone().unwrap_or_else(|| args.checkpoint.clone());
    model.save(&out)?;
    println!(
        "memory bank ({} entries) written to {}",
        model.bank.as_ref().map_or(0, |b| b.len()),
        out.display()
    );
    Ok(())
}

fn cmd_inspect(cfg: &Config, args: &InspectArgs) -> Result<()> {
    let model = load_model(cfg, &args.checkpoint)?;
    let ws = cfg.dataset.working_size();
    let mut img = imaging::load_image(&args.image, ws, cfg.dataset.colorspace)?;
    if cfg.inspect.noise_p > 0.0 {
        img = imaging::inject_speckle(&img, cfg.inspect.noise_p, cfg.inspect.noise_seed)?;
    }
    let icfg = &cfg.inspect.maps;
    let (patch, stride) = (cfg.patch.size, cfg.patch.stride);
    let result = match args.level {
        LevelArg::Patch => pipeline::infer_patch_level(&model, &img, patch, stride)?,
        LevelArg::Pixel => pipeline::infer_pixel(&model, &img, patch, stride, icfg)?,
        LevelArg::Auto => {
            let policy = ExitPolicy {
                mode: cfg.exit.mode,
                patch_score_threshold: cfg.exit.threshold.or(model.patch_threshold),
            };
            pipeline::infer_auto(&model, &img, patch, stride, icfg, &policy)?
        }
    };
    std::fs::create_dir_all(&args.out)?;
    match &result.payload {
        InferencePayload::Patch { scores, coords } => {
            let record = serde_json::json!({
                "level": "patch",
                "scores": scores,
                "coords": coords,
                "threshold": model.patch_threshold,
                "timings_ms": result.timings,
            });
            write_json(&args.out.join("metrics.json"), &record)?;
            println!("patch-level scores written to {}", args.out.join("metrics.json").display());
        }
        InferencePayload::Pixel { maps, reconstruction } => {
            pipeline::save_map_png16(&maps.fused, &args.out.join("anomaly_fused.png"))?;
            let mask = inspection::binarize_ksigma(&maps.fused, icfg.k_sigma);
            pipeline::save_mask_png(&mask, &args.out.join("mask.png"))?;
            pipeline::save_image_png(reconstruction, &args.out.join("reconstruction.png"))?;
            if args.modality_maps {
                pipeline::save_map_png16(&maps.a_m1, &args.out.join("anomaly_m1.png"))?;
                pipeline::save_map_png16(&maps.a_m2, &args.out.join("anomaly_m2.png"))?;
                pipeline::save_map_png16(&maps.a_m3, &args.out.join("anomaly_m3.png"))?;
            }
            let max_fused = maps.fused.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let record = serde_json::json!({
                "level": "pixel",
                "max_fused": max_fused,
                "k_sigma": icfg.k_sigma,
                "flagged_pixels": mask.iter().filter(|&&v| v).count(),
                "timings_ms": result.timings,
            });
            write_json(&args.out.join("metrics.json"), &record)?;
            println!("pixel-level outputs written to {}", args.out.display());
        }
    }
    Ok(())
}

fn cmd_evaluate(cfg: &Config, args: &EvaluateArgs) -> Result<()> {
    let model = load_model(cfg, &args.checkpoint)?;
    let ws = cfg.dataset.working_size();
    let index = imaging::load_dataset(
        &cfg.dataset.root,
        DatasetLayout::MvtecLike,
        ws,
        cfg.dataset.colorspace,
    )?;
    let noise = (cfg.inspect.noise_p > 0.0).then_some((cfg.inspect.noise_p, cfg.inspect.noise_seed));
    let (report, per_image) = pipeline::evaluate(
        &model,
        &index,
        cfg.patch.size,
        cfg.patch.stride,
        &cfg.inspect.maps,
        noise,
    )?;
    println!(
        "pixel AUC {:?}  precision {:.4}  recall {:.4}  f1 {:.4}",
        report.auc_roc, report.precision, report.recall, report.f1
    );
    if args.out.extension().and_then(|e| e.to_str()) == Some("csv") {
        let mut csv = String::from("path,label,has_mask,max_fused,precision,recall,f1\n");
        for r in &per_image {
            let (p, rc, f1) =
                r.prf.map_or((f64::NAN, f64::NAN, f64::NAN), |x| (x.precision, x.recall, x.f1));
            csv.push_str(&format!(
                "{},{:?},{},{},{},{},{}\n",
                r.path, r.label, r.has_mask, r.max_fused, p, rc, f1
            ));
        }
        std::fs::write(&args.out, csv)?;
    } else {
        write_json(&args.out, &serde_json::json!({ "dataset": report, "images": per_image }))?;
    }
    println!("metrics written to {}", args.out.display());
    Ok(())
}

fn cmd_split_export(cfg: &Config, args: &SplitExportArgs) -> Result<()> {
    let model = load_model(cfg, &args.checkpoint)?;
    let ws = cfg.dataset.working_size();
    let img = imaging::load_image(&args.image, ws, cfg.dataset.colorspace)?;
    let bytes = pipeline::split_export(&model, &img, cfg.patch.size, cfg.patch.stride)?;
    std::fs::write(&args.out, &bytes)?;
    println!("interchange ({} bytes) written to {}", bytes.len(), args.out.display());
    Ok(())
}

fn cmd_split_resume(cfg: &Config, args: &SplitResumeArgs) -> Result<()> {
    let model = load_model(cfg, &args.checkpoint)?;
    let bytes = std::fs::read(&args.interchange)?;
    let result = pipeline::split_resume(&model, &bytes, &cfg.inspect.maps)?;
    let InferencePayload::Pixel { maps, reconstruction } = &result.payload else {
        bail!("split-resume produced a non-pixel payload");
    };
    std::fs::create_dir_all(&args.out)?;
    pipeline::save_map_png16(&maps.fused, &args.out.join("anomaly_fused.png"))?;
    let mask = inspection::binarize_ksigma(&maps.fused, cfg.inspect.maps.k_sigma);
    pipeline::save_mask_png(&mask, &args.out.join("mask.png"))?;
    pipeline::save_image_png(reconstruction, &args.out.join("reconstruction.png"))?;
    println!("resumed pixel-level outputs written to {}", args.out.display());
    Ok(())
}

fn cmd_smoke(cfg: &Config, args: &SmokeArgs) -> Result<()> {
    let (report, model) = smoke::run_smoke(&cfg.smoke, &cfg.inspect.maps, |msg| {
        println!("[smoke] {msg}");
    })?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    if let Some(path) = &args.report {
        write_json(path, &report)?;
    }
    if let Some(path) = &args.out {
        model.save(path)?;
        println!("smoke model written to {}", path.display());
    }
    let pass = report.pixel_auc >= 0.85 && report.patch_auc >= 0.90 && report.latency_ordering_holds;
    println!(
        "smoke {}: pixel AUC {:.4} (>= 0.85), patch AUC {:.4} (>= 0.90), latency ordering {}",
        if pass { "PASS" } else { "FAIL" },
        report.pixel_auc,
        report.patch_auc,
        report.latency_ordering_holds
    );
    if !pass {
        std::process::exit(1);
    }
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let cfg = load_config(&cli.config)?;
    match &cli.command {
        Command::Synthesize(args) => cmd_synthesize(&cfg, args),
        Command::Train(args) => cmd_train(&cfg, args),
        Command::BuildMemory(args) => cmd_build_memory(&cfg, args),
        Command::Inspect(args) => cmd_inspect(&cfg, args),
        Command::Evaluate(args) => cmd_evaluate(&cfg, args),
        Command::SplitExport(args) => cmd_split_export(&cfg, args),
        Command::SplitResume(args) => cmd_split_resume(&cfg, args),
        Command::Smoke(args) => cmd_smoke(&cfg, args),
        Command::DefaultConfig => {
            println!("{}", Config::default().to_toml_string());
            Ok(())
        }
    }
}
