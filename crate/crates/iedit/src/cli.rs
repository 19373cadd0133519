//! Command-line entry points binding the pipeline into reproducible runs:
//! `pretrain`, `invert`, `edit`, `eval`, `ablate`, and `fixtures`.

use crate::archive::{sha256_hex, TensorArchive};
use crate::backbone::BaseCheckpoint;
use crate::config::{AblationFlags, RunConfig};
use crate::editing::{edit, EditRequest};
use crate::error::{Error, Result};
use crate::fixture::{
    cached_base, generate_fixture_benchmark, pretrain, FixtureBenchOptions, PretrainOptions,
};
use crate::iebench::{
    run_benchmark, BackendProvider, BenchEditor, BenchmarkInstance, BenchmarkManifest, EvalReport,
    ExternalBackendProvider, MockBackendProvider,
};
use crate::inversion::{invert, InversionArtifact, TrainConfig};
use crate::scene::{encode_rgb_png, Image, SceneBundle};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

#[derive(Parser, Debug)]
#[command(
    name = "iedit",
    version,
    about = "Zero-shot human-object interaction editing on a toy diffusion backbone"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BackendChoice {
    Mock,
    External,
}

#[derive(Args, Debug)]
pub struct ConfigArgs {
    /// Run-config JSON file; defaults to the built-in toy configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        match &self.config {
            None => Ok(RunConfig::default()),
            Some(path) => {
                let bytes =
                    std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
                RunConfig::from_json_bytes(&bytes)
            }
        }
    }
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train the frozen toy base checkpoint on procedural scenes.
    Pretrain {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        dataset_scenes: Option<usize>,
    },
    /// Invert one scene bundle into concept clues plus adapters.
    Invert {
        #[command(flatten)]
        config: ConfigArgs,
        /// Scene bundle directory (image.png, mask_*.png, meta.json).
        #[arg(long)]
        scene: PathBuf,
        /// Base checkpoint archive.
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        stage1_steps: Option<usize>,
        #[arg(long)]
        stage2_steps: Option<usize>,
        /// Train a single merged concept with a full-image mask.
        #[arg(long)]
        no_disassembly: bool,
        /// Train Query projections as well (disable selective fine-tuning).
        #[arg(long)]
        no_sft: bool,
        /// Use dense weight deltas instead of low-rank factors.
        #[arg(long)]
        no_lora: bool,
    },
    /// Synthesize edited images from an artifact and a target interaction.
    Edit {
        #[arg(long)]
        artifact: PathBuf,
        #[arg(long)]
        base: PathBuf,
        /// Target interaction verb (must be in the toy vocabulary).
        #[arg(long)]
        interaction: String,
        /// Seeds: an inclusive range "0..9" or a comma list "0,3,7".
        #[arg(long, default_value = "0..9")]
        seeds: String,
        #[arg(long)]
        out: PathBuf,
        /// Denoising steps (defaults to the artifact's sampler setting).
        #[arg(long)]
        steps: Option<usize>,
        /// Apply the artifact even if the base checksum differs.
        #[arg(long)]
        force: bool,
    },
    /// Score edits over a benchmark manifest.
    Eval {
        #[arg(long)]
        manifest: PathBuf,
        /// Directory of per-instance artifacts named `<instance_id>.iea`.
        #[arg(long)]
        artifact_dir: PathBuf,
        #[arg(long)]
        base: PathBuf,
        #[arg(long, value_enum, default_value_t = BackendChoice::Mock)]
        backends: BackendChoice,
        #[arg(long)]
        report: PathBuf,
        /// Optional CSV export mirroring the benchmark table columns.
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        seeds_per_pair: u64,
        #[arg(long)]
        edit_steps: Option<usize>,
        #[arg(long, default_value_t = 0.5)]
        conf_threshold: f64,
    },
    /// Run the ablation grid on a fixture benchmark and tabulate the scores.
    Ablate {
        #[command(flatten)]
        config: ConfigArgs,
        /// Fixture benchmark directory (generated when absent).
        #[arg(long)]
        scenes: Option<PathBuf>,
        /// Base checkpoint (pretrained and cached when absent).
        #[arg(long)]
        base: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Comma list of grid rows; defaults to the published six.
        #[arg(long)]
        configs: Option<String>,
        #[arg(long, default_value_t = 3)]
        seeds_per_pair: u64,
        #[arg(long)]
        stage1_steps: Option<usize>,
        #[arg(long)]
        stage2_steps: Option<usize>,
        #[arg(long)]
        edit_steps: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Generate a procedural fixture benchmark (scene bundles + manifest).
    Fixtures {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        scenes: usize,
        #[arg(long, default_value_t = 3)]
        targets_per_scene: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// Parse "0..9" (inclusive), "7", or "0,3,9" into a seed list.
pub fn parse_seeds(spec: &str) -> Result<Vec<u64>> {
    let spec = spec.trim();
    if let Some((a, b)) = spec.split_once("..") {
        let start: u64 = a
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("bad seed range {spec:?}")))?;
        let end: u64 = b
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("bad seed range {spec:?}")))?;
        if end < start {
            return Err(Error::Config(format!("empty seed range {spec:?}")));
        }
        return Ok((start..=end).collect());
    }
    spec.split(',')
        .map(|s| {
            s.trim()
                .parse::<u64>()
                .map_err(|_| Error::Config(format!("bad seed {s:?}")))
        })
        .collect()
}

fn load_base(path: &Path) -> Result<(BaseCheckpoint, String)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let checksum = sha256_hex(&bytes);
    let archive = TensorArchive::from_bytes(&bytes)?;
    Ok((BaseCheckpoint::from_archive(&archive)?, checksum))
}

fn load_artifact(path: &Path) -> Result<InversionArtifact> {
    let archive = TensorArchive::load(path)?;
    InversionArtifact::from_archive(&archive)
}

#[derive(Serialize)]
struct EditSidecar<'a> {
    schema_version: u32,
    prompt: &'a str,
    interaction: &'a str,
    seed: u64,
    steps: usize,
    config_hash: &'a str,
    base_checksum: &'a str,
    artifact: String,
}

/// Editor over a directory of per-instance artifacts.
pub struct ArtifactEditor {
    base: BaseCheckpoint,
    artifacts: BTreeMap<String, InversionArtifact>,
    steps: Option<usize>,
}

impl ArtifactEditor {
    pub fn new(
        base: BaseCheckpoint,
        artifact_dir: &Path,
        manifest: &BenchmarkManifest,
        steps: Option<usize>,
    ) -> Self {
        let mut artifacts = BTreeMap::new();
        for inst in &manifest.instances {
            let path = artifact_dir.join(format!("{}.iea", inst.id));
            if let Ok(artifact) = load_artifact(&path) {
                artifacts.insert(inst.id.clone(), artifact);
            }
        }
        ArtifactEditor {
            base,
            artifacts,
            steps,
        }
    }

    pub fn from_artifacts(
        base: BaseCheckpoint,
        artifacts: BTreeMap<String, InversionArtifact>,
        steps: Option<usize>,
    ) -> Self {
        ArtifactEditor {
            base,
            artifacts,
            steps,
        }
    }
}

impl BenchEditor for ArtifactEditor {
    fn edit(
        &self,
        instance: &BenchmarkInstance,
        _bundle: &SceneBundle,
        target_interaction: &str,
        seed: u64,
    ) -> Result<Image> {
        let artifact = self
            .artifacts
            .get(&instance.id)
            .ok_or_else(|| Error::InvalidInstance {
                id: instance.id.clone(),
                reason: "no inversion artifact for this instance".into(),
            })?;
        let req = EditRequest {
            artifact: artifact.clone(),
            target_interaction: target_interaction.to_string(),
            seed,
            steps: self.steps,
        };
        edit(&req, &self.base, false)
    }
}

/// Run a parsed command; returns the process exit code.
pub fn run(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Pretrain {
            config,
            out,
            seed,
            steps,
            batch,
            lr,
            dataset_scenes,
        } => {
            let run_config = config.load()?;
            let mut opts = PretrainOptions::default();
            if let Some(s) = steps {
                opts.steps = s;
            }
            if let Some(b) = batch {
                opts.batch = b;
            }
            if let Some(l) = lr {
                opts.lr = l;
            }
            if let Some(d) = dataset_scenes {
                opts.dataset_scenes = d;
            }
            let mut last = f64::NAN;
            let mut first = f64::NAN;
            let ckpt = pretrain(
                &run_config,
                &opts,
                seed,
                Some(&mut |step, loss| {
                    if step == 0 {
                        first = loss;
                    }
                    last = loss;
                    if step % 500 == 0 {
                        println!("pretrain step {step}: loss {loss:.5}");
                    }
                }),
            )?;
            ckpt.to_archive().save(&out)?;
            println!(
                "pretrained {} steps (loss {first:.5} -> {last:.5}); wrote {}",
                opts.steps,
                out.display()
            );
            Ok(0)
        }
        Command::Invert {
            config,
            scene,
            base,
            out,
            seed,
            stage1_steps,
            stage2_steps,
            no_disassembly,
            no_sft,
            no_lora,
        } => {
            let run_config = config.load()?;
            let (base_ckpt, _) = load_base(&base)?;
            let bundle = crate::scene::load_bundle(&scene)?;
            let mut train = run_config.train.clone();
            if let Some(s) = stage1_steps {
                train.stage1_steps = s;
            }
            if let Some(s) = stage2_steps {
                train.stage2_steps = s;
            }
            train.ablation = AblationFlags {
                disassembly: !no_disassembly,
                sft: !no_sft,
                lora: !no_lora,
            };
            let outcome = invert(&base_ckpt, &bundle, train, seed)?;
            outcome.artifact.to_archive().save(&out)?;
            let s1: Vec<f64> = outcome
                .history
                .iter()
                .filter(|(stage, ..)| *stage == 1)
                .map(|(_, _, rec, _)| *rec)
                .collect();
            let s2: Vec<f64> = outcome
                .history
                .iter()
                .filter(|(stage, ..)| *stage == 2)
                .map(|(_, _, rec, _)| *rec)
                .collect();
            let head = |v: &[f64]| v.first().copied().unwrap_or(f64::NAN);
            let tail = |v: &[f64]| v.last().copied().unwrap_or(f64::NAN);
            println!(
                "stage 1: {} steps, reconstruction {:.5} -> {:.5}",
                s1.len(),
                head(&s1),
                tail(&s1)
            );
            println!(
                "stage 2: {} steps, reconstruction {:.5} -> {:.5}",
                s2.len(),
                head(&s2),
                tail(&s2)
            );
            println!(
                "probe: {:.5} -> {:.5}; wrote {}",
                outcome.initial_probe,
                outcome.final_probe,
                out.display()
            );
            Ok(0)
        }
        Command::Edit {
            artifact,
            base,
            interaction,
            seeds,
            out,
            steps,
            force,
        } => {
            let (base_ckpt, _) = load_base(&base)?;
            let art = load_artifact(&artifact)?;
            let seed_list = parse_seeds(&seeds)?;
            std::fs::create_dir_all(&out).map_err(|e| Error::io(out.display().to_string(), e))?;
            let prompt = crate::editing::build_target_prompt(&art, &interaction)?;
            let steps_used = steps.unwrap_or(art.config.sampler.inference_steps);
            for &seed in &seed_list {
                let req = EditRequest {
                    artifact: art.clone(),
                    target_interaction: interaction.clone(),
                    seed,
                    steps,
                };
                let image = edit(&req, &base_ckpt, force)?;
                let png = encode_rgb_png(&image)?;
                let stem = format!("edit_{}_{seed:04}", interaction.replace(' ', "_"));
                let png_path = out.join(format!("{stem}.png"));
                std::fs::write(&png_path, png)
                    .map_err(|e| Error::io(png_path.display().to_string(), e))?;
                let sidecar = EditSidecar {
                    schema_version: 1,
                    prompt: &prompt.text,
                    interaction: &interaction,
                    seed,
                    steps: steps_used,
                    config_hash: &art.config.hash(),
                    base_checksum: &art.base_checksum,
                    artifact: artifact.display().to_string(),
                };
                let json_path = out.join(format!("{stem}.json"));
                let mut bytes = serde_json::to_vec_pretty(&sidecar)?;
                bytes.push(b'\n');
                std::fs::write(&json_path, bytes)
                    .map_err(|e| Error::io(json_path.display().to_string(), e))?;
            }
            println!(
                "wrote {} edits for {interaction:?} to {}",
                seed_list.len(),
                out.display()
            );
            Ok(0)
        }
        Command::Eval {
            manifest,
            artifact_dir,
            base,
            backends,
            report,
            csv,
            seeds_per_pair,
            edit_steps,
            conf_threshold,
        } => {
            let manifest_root = manifest
                .parent()
                .map(Path::to_path_buf)
                .unwrap_or_else(|| PathBuf::from("."));
            let manifest = BenchmarkManifest::load(&manifest)?;
            let (base_ckpt, _) = load_base(&base)?;
            let provider: Box<dyn BackendProvider> = match backends {
                BackendChoice::Mock => Box::new(MockBackendProvider),
                BackendChoice::External => Box::new(ExternalBackendProvider),
            };
            let editor = ArtifactEditor::new(base_ckpt, &artifact_dir, &manifest, edit_steps);
            let config_hash = editor
                .artifacts
                .values()
                .next()
                .map(|a| a.config.hash())
                .unwrap_or_default();
            let result = run_benchmark(
                &manifest,
                &manifest_root,
                &editor,
                provider.as_ref(),
                seeds_per_pair,
                conf_threshold,
                &config_hash,
            )?;
            std::fs::write(&report, result.to_json_bytes())
                .map_err(|e| Error::io(report.display().to_string(), e))?;
            if let Some(csv_path) = csv {
                let mut text = EvalReport::CSV_HEADER.to_string();
                text.push_str(&result.to_csv_row(manifest.name.as_str()));
                std::fs::write(&csv_path, text)
                    .map_err(|e| Error::io(csv_path.display().to_string(), e))?;
            }
            println!(
                "editability {:.4}  identity {:.4}  overall {:.4}  ({} cells{})",
                result.editability_mean,
                result.identity_consistency_mean,
                result.overall,
                result.cells.len(),
                if result.partial { ", PARTIAL" } else { "" }
            );
            Ok(if result.partial { 2 } else { 0 })
        }
        Command::Ablate {
            config,
            scenes,
            base,
            out,
            configs,
            seeds_per_pair,
            stage1_steps,
            stage2_steps,
            edit_steps,
            seed,
        } => {
            let run_config = config.load()?;
            std::fs::create_dir_all(&out).map_err(|e| Error::io(out.display().to_string(), e))?;
            let bench_dir = match &scenes {
                Some(dir) => dir.clone(),
                None => {
                    let dir = out.join("fixture");
                    generate_fixture_benchmark(
                        &dir,
                        &run_config,
                        &FixtureBenchOptions::default(),
                        seed,
                    )?;
                    dir
                }
            };
            let manifest = BenchmarkManifest::load(&bench_dir.join("manifest.json"))?;
            let base_ckpt = match &base {
                Some(path) => load_base(path)?.0,
                None => cached_base(&run_config, &PretrainOptions::default(), seed)?,
            };
            let labels: Vec<String> = configs
                .map(|s| s.split(',').map(|x| x.trim().to_string()).collect())
                .unwrap_or_else(|| {
                    [
                        "full",
                        "wo_sft",
                        "wo_lora",
                        "wo_sft_lora",
                        "wo_disassembly",
                        "baseline",
                    ]
                    .iter()
                    .map(|s| s.to_string())
                    .collect()
                });
            let mut train = run_config.train.clone();
            if let Some(s) = stage1_steps {
                train.stage1_steps = s;
            }
            if let Some(s) = stage2_steps {
                train.stage2_steps = s;
            }
            let mut grid_csv = EvalReport::CSV_HEADER.to_string();
            let mut grid = BTreeMap::new();
            for label in &labels {
                let flags = AblationFlags::from_label(label).ok_or_else(|| {
                    Error::Config(format!(
                        "unknown ablation config {label:?} (expected full, wo_sft, wo_lora, \
                         wo_sft_lora, wo_disassembly, baseline)"
                    ))
                })?;
                let report = run_ablation_config(
                    &base_ckpt,
                    &manifest,
                    &bench_dir,
                    &out,
                    label,
                    TrainConfig {
                        ablation: flags,
                        ..train.clone()
                    },
                    seeds_per_pair,
                    edit_steps,
                    seed,
                )?;
                println!(
                    "{label:>16}: editability {:.4}  identity {:.4}  overall {:.4}",
                    report.editability_mean, report.identity_consistency_mean, report.overall
                );
                grid_csv.push_str(&report.to_csv_row(label));
                grid.insert(label.clone(), report);
            }
            let grid_path = out.join("grid.json");
            let mut bytes = serde_json::to_vec_pretty(&grid)?;
            bytes.push(b'\n');
            std::fs::write(&grid_path, bytes)
                .map_err(|e| Error::io(grid_path.display().to_string(), e))?;
            let csv_path = out.join("grid.csv");
            std::fs::write(&csv_path, grid_csv)
                .map_err(|e| Error::io(csv_path.display().to_string(), e))?;
            println!("wrote {}", grid_path.display());
            Ok(0)
        }
        Command::Fixtures {
            config,
            out,
            scenes,
            targets_per_scene,
            seed,
        } => {
            let run_config = config.load()?;
            let manifest = generate_fixture_benchmark(
                &out,
                &run_config,
                &FixtureBenchOptions {
                    scenes,
                    targets_per_scene,
                },
                seed,
            )?;
            println!(
                "wrote {} scenes and manifest to {}",
                manifest.instances.len(),
                out.display()
            );
            Ok(0)
        }
    }
}

/// Invert every instance under one ablation config, then score the grid row.
#[allow(clippy::too_many_arguments)]
pub fn run_ablation_config(
    base: &BaseCheckpoint,
    manifest: &BenchmarkManifest,
    bench_dir: &Path,
    out: &Path,
    label: &str,
    train: TrainConfig,
    seeds_per_pair: u64,
    edit_steps: Option<usize>,
    seed: u64,
) -> Result<EvalReport> {
    let artifact_dir = out.join(label).join("artifacts");
    std::fs::create_dir_all(&artifact_dir)
        .map_err(|e| Error::io(artifact_dir.display().to_string(), e))?;
    let mut artifacts = BTreeMap::new();
    for inst in &manifest.instances {
        let bundle = crate::scene::load_bundle(&bench_dir.join(&inst.source_image))?;
        let outcome = invert(base, &bundle, train.clone(), seed)?;
        outcome
            .artifact
            .to_archive()
            .save(&artifact_dir.join(format!("{}.iea", inst.id)))?;
        artifacts.insert(inst.id.clone(), outcome.artifact);
    }
    let config_hash = artifacts
        .values()
        .next()
        .map(|a| a.config.hash())
        .unwrap_or_default();
    let editor = ArtifactEditor::from_artifacts(base.clone(), artifacts, edit_steps);
    let report = run_benchmark(
        manifest,
        bench_dir,
        &editor,
        &MockBackendProvider,
        seeds_per_pair,
        0.5,
        &config_hash,
    )?;
    let report_path = out.join(label).join("report.json");
    std::fs::write(&report_path, report.to_json_bytes())
        .map_err(|e| Error::io(report_path.display().to_string(), e))?;
    Ok(report)
}
