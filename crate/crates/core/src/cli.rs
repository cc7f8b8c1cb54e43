//! Command-line front end. Exit codes: 0 ok, 2 config, 3 training, 4 artifacts.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::attention::{begin_capture_with, dump_maps, AttentionMapSet, TokenRole};
use crate::backend::{pretrained_adapter, sample_latent, toy_backend, DiffusionBackend, ToyBackend};
use crate::concept::{embedding_drift, EmbeddingSnapshot, UNDER_LEARNING_DRIFT};
use crate::config::{BackendKind, RunConfig, TrainingMode, RUN_CONFIG_FILE};
use crate::data::{load_concept_images, preprocess, write_synthetic_concept};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, load_prompt_suite, EvalConfig, ProjectionEmbedder, PromptSuite};
use crate::seed::rng_for;
use crate::trainer::{restore_run, run_full, snapshot_stem, RunSummary, StageId, FINAL_DIR};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_TRAINING: i32 = 3;
pub const EXIT_ARTIFACTS: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "attndb", version, about = "Staged concept personalization for latent diffusion models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a concept from a run config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Train the single joint embedding + denoiser stage instead of the staged schedule.
        #[arg(long)]
        baseline: bool,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        backend: Option<BackendKind>,
    },
    /// Score a trained run on the prompt suite.
    Evaluate {
        #[arg(long)]
        run_dir: PathBuf,
        /// `default` or a file with one template per line.
        #[arg(long, default_value = "default")]
        suite: String,
        #[arg(long)]
        images_per_prompt: Option<usize>,
    },
    /// Sample a prompt with attention capture and write per-token heatmaps.
    VisualizeAttn {
        #[arg(long)]
        run_dir: PathBuf,
        #[arg(long)]
        prompt: String,
        /// 1, 2, 3, baseline or final.
        #[arg(long, default_value = "final")]
        stage: String,
        /// Only these roles (`V`, `category`, `pos<N>`); default is every prompt token.
        #[arg(long = "token")]
        tokens: Vec<String>,
        /// Also dump every denoising step separately.
        #[arg(long)]
        per_step: bool,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory; defaults to `<run_dir>/visualize/<stage>`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Report cosine drift of the concept embedding from its initialization.
    DiagnoseEmbedding {
        #[arg(long)]
        run_dir: PathBuf,
    },
    /// Write synthetic concept images and a matching toy config.
    SynthConcept {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        count: usize,
        #[arg(long, default_value_t = 32)]
        size: u32,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

impl std::str::FromStr for StageArg {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "final" {
            Ok(StageArg::Final)
        } else {
            s.parse().map(StageArg::Stage)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum StageArg {
    Stage(StageId),
    Final,
}

/// Maps an error to its exit code.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::InvalidConfig(_)
        | Error::PlaceholderCollision(_)
        | Error::MultiTokenCategory { .. }
        | Error::UnknownToken(_)
        | Error::UnknownTokenRole(_)
        | Error::MissingTokenRole(_)
        | Error::WeightsUnavailable(_)
        | Error::BackendUnsupported { .. }
        | Error::EmptyImageSet(_)
        | Error::UnknownGroup(_) => EXIT_CONFIG,
        Error::MissingArtifact(_)
        | Error::MalformedArtifact { .. }
        | Error::IoFailure { .. }
        | Error::Image { .. }
        | Error::Json(_)
        | Error::EmptySession
        | Error::SessionAlreadyActive => EXIT_ARTIFACTS,
        Error::NonFiniteLoss { .. }
        | Error::ScopeResolutionFailure(_)
        | Error::SamplingFailure(_)
        | Error::TimestepOutOfRange { .. }
        | Error::DimensionMismatch { .. }
        | Error::ShapeMismatch { .. }
        | Error::ZeroVector => EXIT_TRAINING,
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(err) => {
            let _ = err.print();
            return if err.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match execute(cli.command) {
        Ok(()) => EXIT_OK,
        Err(err) => {
            eprintln!("error: {err}");
            exit_code(&err)
        }
    }
}

pub fn execute(command: Command) -> Result<()> {
    match command {
        Command::Train { config, baseline, seed, backend } => cmd_train(&config, baseline, seed, backend),
        Command::Evaluate { run_dir, suite, images_per_prompt } => cmd_evaluate(&run_dir, &suite, images_per_prompt),
        Command::VisualizeAttn { run_dir, prompt, stage, tokens, per_step, seed, out } => {
            cmd_visualize_attn(&run_dir, &prompt, stage.parse()?, &tokens, per_step, seed, out.as_deref())
        }
        Command::DiagnoseEmbedding { run_dir } => cmd_diagnose_embedding(&run_dir),
        Command::SynthConcept { out, count, size, seed } => cmd_synth_concept(&out, count, size, seed),
    }
}

fn build_backend(config: &RunConfig, pretrain: bool) -> Result<Box<dyn DiffusionBackend>> {
    match config.backend.kind {
        BackendKind::Toy if pretrain => Ok(Box::new(toy_backend(config.backend.toy.clone(), config.seed)?)),
        BackendKind::Toy => Ok(Box::new(ToyBackend::new(config.backend.toy.clone(), config.seed)?)),
        BackendKind::Pretrained => {
            let path = config.backend.weights_path.as_deref().expect("validated");
            Ok(Box::new(pretrained_adapter(path)?))
        }
    }
}

fn cmd_train(config_path: &Path, baseline: bool, seed: Option<u64>, backend: Option<BackendKind>) -> Result<()> {
    let mut config = RunConfig::load(config_path)?;
    if baseline {
        config.training.mode = TrainingMode::Baseline;
    }
    if let Some(seed) = seed {
        config.seed = seed;
    }
    if let Some(kind) = backend {
        config.backend.kind = kind;
    }
    config.validate()?;
    let run_dir = config.effective_run_dir();
    config.output_dir = run_dir.clone();

    let images = load_concept_images(&config.concept.image_dir)?;
    let mut model = build_backend(&config, true)?;
    fs::create_dir_all(&run_dir).map_err(|e| Error::io(&run_dir, e))?;
    let config_out = run_dir.join(RUN_CONFIG_FILE);
    fs::write(&config_out, config.to_toml_string()?).map_err(|e| Error::io(&config_out, e))?;

    let schedule = config.schedule();
    let run = run_full(
        model.as_mut(),
        &config.concept,
        &images,
        &schedule,
        &config.train_options(),
        config.seed,
        Some(&run_dir),
    )?;
    println!("{:<9} {:>6} {:>12} {:>12} {:>9}  changed groups", "stage", "steps", "diffusion", "reg", "seconds");
    for stage in &run.stages {
        let last = stage.final_losses().expect("at least one step");
        println!(
            "{:<9} {:>6} {:>12.6} {:>12.4e} {:>9.1}  {}",
            stage.plan.stage_id.to_string(),
            stage.plan.steps,
            last.diffusion_loss,
            last.reg_loss,
            stage.wall_time_secs,
            stage.changed_groups.join(",")
        );
    }
    println!("run directory: {}", run_dir.display());
    Ok(())
}

fn load_run_config(run_dir: &Path) -> Result<RunConfig> {
    let path = run_dir.join(RUN_CONFIG_FILE);
    if !path.is_file() {
        return Err(Error::MissingArtifact(path));
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    RunConfig::from_toml_str(&text).map_err(|e| Error::MalformedArtifact { path, reason: e.to_string() })
}

/// A fresh backend with the run's parameters loaded up to `stage`.
fn restored(run_dir: &Path, config: &RunConfig, stage: StageArg) -> Result<Box<dyn DiffusionBackend>> {
    let mut model = build_backend(config, false)?;
    let upto = match stage {
        StageArg::Stage(id) => Some(id),
        StageArg::Final => None,
    };
    restore_run(model.as_mut(), &config.concept, run_dir, upto)?;
    Ok(model)
}

fn cmd_evaluate(run_dir: &Path, suite_arg: &str, images_per_prompt: Option<usize>) -> Result<()> {
    let config = load_run_config(run_dir)?;
    let model = restored(run_dir, &config, StageArg::Final)?;
    let suite = match (suite_arg, &config.evaluation.suite) {
        ("default", None) => load_prompt_suite(),
        ("default", Some(path)) => PromptSuite::from_file(path)?,
        (path, _) => PromptSuite::from_file(Path::new(path))?,
    };
    let images = load_concept_images(&config.concept.image_dir)?;
    let reference: Vec<_> = images.images.iter().map(|i| preprocess(i, model.input_resolution())).collect();
    let embedder = ProjectionEmbedder::new(config.evaluation.embedder_seed, 32);
    let eval = EvalConfig {
        images_per_prompt: images_per_prompt.unwrap_or(config.evaluation.images_per_prompt),
        sampler: config.sampler(),
        seed: config.seed,
    };
    let report = evaluate(model.as_ref(), &config.concept, &suite, &reference, &embedder, eval)?;
    let final_dir = run_dir.join(FINAL_DIR);
    report.save(&final_dir.join("report.json"), Some(&final_dir.join("report.csv")))?;
    println!("{:<24} {:>9} {:>9} {:>8}", "concept", "identity", "text", "prompts");
    println!(
        "{:<24} {:>9.4} {:>9.4} {:>8}",
        report.concept_id,
        report.identity,
        report.text_alignment,
        report.per_prompt.len()
    );
    Ok(())
}

/// Roles for every prompt token after the start token.
fn prompt_roles(model: &dyn DiffusionBackend, config: &RunConfig, ids: &[usize]) -> Vec<(TokenRole, usize)> {
    let tokenizer = model.tokenizer();
    let placeholder = tokenizer.id_of(&config.concept.placeholder);
    let category = config.concept.category_id(tokenizer).ok();
    let start = usize::from(tokenizer.bos_id().is_some_and(|b| ids.first() == Some(&b)));
    let mut seen_concept = false;
    let mut seen_category = false;
    (start..ids.len())
        .map(|i| {
            let role = if Some(ids[i]) == placeholder && !seen_concept {
                seen_concept = true;
                TokenRole::Concept
            } else if Some(ids[i]) == category && seen_concept && !seen_category {
                seen_category = true;
                TokenRole::Category
            } else {
                TokenRole::Position(i)
            };
            (role, i)
        })
        .collect()
}

fn cmd_visualize_attn(
    run_dir: &Path,
    prompt: &str,
    stage: StageArg,
    requested: &[String],
    per_step: bool,
    seed: Option<u64>,
    out: Option<&Path>,
) -> Result<()> {
    let config = load_run_config(run_dir)?;
    let model = restored(run_dir, &config, stage)?;
    let ids = model.tokenize(prompt);
    let tokens: Vec<String> = ids.iter().map(|&id| model.tokenizer().token(id).unwrap_or("?").to_string()).collect();
    let mut roles = prompt_roles(model.as_ref(), &config, &ids);
    if !requested.is_empty() {
        let mut picked = Vec::with_capacity(requested.len());
        for name in requested {
            let role: TokenRole = name.parse()?;
            let entry = roles.iter().find(|(r, _)| *r == role).ok_or_else(|| Error::UnknownTokenRole(name.clone()))?;
            picked.push(entry.clone());
        }
        roles = picked;
    }

    let stage_name = match stage {
        StageArg::Stage(id) => id.to_string(),
        StageArg::Final => "final".to_string(),
    };
    let out_dir = out.map(Path::to_path_buf).unwrap_or_else(|| run_dir.join("visualize").join(&stage_name));
    let cond = model.encode_text(&ids)?;
    let uncond = model.encode_text(&model.tokenize(""))?;
    let session = begin_capture_with(model.tap(), &ids, roles.clone(), tokens.clone(), per_step)?;
    let mut rng = rng_for(seed.unwrap_or(config.seed), "visualize");
    let latent = sample_latent(model.as_ref(), &cond, &uncond, config.sampler(), &mut rng)?;
    session.end();

    let maps: AttentionMapSet = session.collect_maps()?;
    let manifest = dump_maps(&maps, &out_dir)?;
    if per_step {
        for (i, step_maps) in session.per_pass_maps().iter().enumerate() {
            dump_maps(step_maps, &out_dir.join(format!("step_{i:03}")))?;
        }
    }
    let image = model.decode_latent(&latent)?;
    save_rgb(&image, &out_dir.join("sample.png"))?;
    println!("{} heatmaps from {} passes: {}", roles.len(), session.passes(), manifest.display());
    Ok(())
}

fn save_rgb(image: &crate::tensor::Tensor, path: &Path) -> Result<()> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let data = image.data();
    let img = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let at = |c: usize| ((data[c * h * w + y as usize * w + x as usize] + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8;
        image::Rgb([at(0), at(1), at(2)])
    });
    img.save(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

fn cmd_diagnose_embedding(run_dir: &Path) -> Result<()> {
    let summary = RunSummary::load(run_dir)?;
    let init = EmbeddingSnapshot::load(&snapshot_stem(run_dir, "init"))?;
    println!("{:<9} {:>8} {:>10}", "stage", "step", "drift");
    println!("{:<9} {:>8} {:>10.6}", "init", init.step, embedding_drift(&init, &init)?);
    let joint = summary.stages.iter().any(|s| s.stage == StageId::Baseline);
    for stage in &summary.stages {
        let snap = EmbeddingSnapshot::load(&snapshot_stem(run_dir, stage.stage.dir_name()))?;
        let drift = embedding_drift(&init, &snap)?;
        let flag = if joint && drift >= UNDER_LEARNING_DRIFT { "  under-learned: embedding barely moved" } else { "" };
        println!("{:<9} {:>8} {:>10.6}{flag}", stage.stage.to_string(), snap.step, drift);
    }
    println!("(threshold {UNDER_LEARNING_DRIFT} after joint training)");
    Ok(())
}

fn cmd_synth_concept(out: &Path, count: usize, size: u32, seed: u64) -> Result<()> {
    if count == 0 || size < 8 {
        return Err(Error::InvalidConfig("synth-concept needs --count >= 1 and --size >= 8".into()));
    }
    let image_dir = out.join("images");
    write_synthetic_concept(&image_dir, count, size, seed)?;
    let concept = crate::concept::ConceptSpec::new("synthetic-toy", "images", "toy");
    let config = RunConfig::toy(concept, "run");
    let path = out.join("run.toml");
    fs::write(&path, config.to_toml_string()?).map_err(|e| Error::io(&path, e))?;
    println!("wrote {count} images to {} and config {}", image_dir.display(), path.display());
    Ok(())
}
