//! Pretraining of the frozen toy base checkpoint on procedurally generated
//! scenes, a file cache for that checkpoint, and the procedural benchmark
//! used by the end-to-end experiments.
//!
//! The base prior must exist before any inversion: it is what carries the
//! interaction knowledge that zero-shot editing relies on.

use crate::backbone::{
    encode_prompt, forward, grad_or_zeros, BaseCheckpoint, Denoiser, PromptSequence,
};
use crate::config::RunConfig;
use crate::diffusion::{add_noise, NoiseSchedule};
use crate::error::{Error, Result};
use crate::iebench::{BenchmarkInstance, BenchmarkManifest};
use crate::optim::Adam;
use crate::rng;
use crate::scene::{render_scene, save_bundle, Interaction, Scene, SceneSpec, INTERACTIONS};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

/// Hyperparameters of the base pretraining run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainOptions {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    /// Size of the fixed procedural scene pool.
    pub dataset_scenes: usize,
    /// Global gradient-norm bound.
    pub clip_norm: f64,
}

impl Default for PretrainOptions {
    fn default() -> Self {
        PretrainOptions {
            steps: 6000,
            batch: 4,
            lr: 1e-3,
            dataset_scenes: 192,
            clip_norm: 1.0,
        }
    }
}

/// Which pixels a pretraining caption describes.
enum CaptionRegion {
    Full,
    Subject,
    Object,
}

/// Caption forms used during pretraining. Single-entity captions pair with a
/// loss masked to that entity, which is what lets a bag-of-words text
/// encoder bind colors to the right glyph; the bare prefix doubles as the
/// null prompt for classifier-free guidance.
fn caption_variant(scene: &Scene, spec: &SceneSpec, pick: u32) -> (String, CaptionRegion) {
    let subject_color = crate::scene::color_name(spec.subject_color).unwrap_or("red");
    let object_color = crate::scene::color_name(spec.object_color).unwrap_or("blue");
    match pick % 10 {
        0..=4 => (spec.caption(), CaptionRegion::Full),
        5..=6 => (
            format!(
                "a photo of person {} {}",
                scene.meta.interaction, scene.meta.object_label
            ),
            CaptionRegion::Full,
        ),
        7 => (
            format!("a photo of {subject_color} person"),
            CaptionRegion::Subject,
        ),
        8 => (
            format!("a photo of {object_color} {}", scene.meta.object_label),
            CaptionRegion::Object,
        ),
        _ => ("a photo of".to_string(), CaptionRegion::Full),
    }
}

/// Train a fresh base model on procedural scenes with the standard
/// noise-prediction objective. Deterministic given `seed`.
pub fn pretrain(
    run: &RunConfig,
    opts: &PretrainOptions,
    seed: u64,
    mut progress: Option<&mut dyn FnMut(usize, f64)>,
) -> Result<BaseCheckpoint> {
    run.validate()?;
    let cfg = &run.denoiser;
    let mut denoiser = Denoiser::new_random(cfg, seed)?;
    let sched = NoiseSchedule::for_sampler(&run.sampler)?;

    // fixed scene pool
    let mut pool_rng = rng::stream(seed, "pretrain_pool", 0);
    let pool: Vec<(SceneSpec, Scene)> = (0..opts.dataset_scenes)
        .map(|_| {
            let spec = SceneSpec::sample(&mut pool_rng);
            let scene = render_scene(&spec, cfg.img_res);
            (spec, scene)
        })
        .collect();

    let mut adam = Adam::new(opts.lr, 0.0);
    let param_names: Vec<String> = denoiser.params.names().map(|s| s.to_string()).collect();
    let slots: Vec<usize> = param_names
        .iter()
        .map(|n| adam.register(denoiser.params.get(n).data.len()))
        .collect();

    let n = cfg.latent_channels * cfg.img_res * cfg.img_res;
    for step in 0..opts.steps {
        let mut tape = crate::autograd::Tape::new();
        let bound = denoiser.bind(&mut tape, true);
        let mut losses = Vec::with_capacity(opts.batch);
        for b in 0..opts.batch {
            let sample_idx = (step * opts.batch + b) as u64;
            let mut pick_rng = rng::stream(seed, "pretrain_pick", sample_idx);
            let (spec, scene) = &pool[pick_rng.random_range(0..pool.len())];
            let (caption, region) = caption_variant(scene, spec, pick_rng.random::<u32>());
            let seq = PromptSequence::parse(&caption)?;
            let t = pick_rng.random_range(0..sched.timesteps);
            let eps = rng::normal_vec(seed, "pretrain_eps", sample_idx, n);
            let z_t = add_noise(&scene.image.data, &eps, t, &sched)?;
            let cond = encode_prompt(&mut tape, bound.var("text.table"), &seq, &BTreeMap::new())?;
            let zv = tape.leaf(
                z_t,
                vec![cfg.latent_channels, cfg.img_res, cfg.img_res],
                false,
            );
            let out = forward(&mut tape, cfg, &bound, None, zv, t, cond, false)?;
            let eps_leaf = tape.leaf(
                eps,
                vec![cfg.latent_channels, cfg.img_res, cfg.img_res],
                false,
            );
            let loss = match region {
                CaptionRegion::Full => tape.sq_diff_mean(out.eps, eps_leaf),
                CaptionRegion::Subject => {
                    let mask: Vec<f64> = scene.subject_mask.iter().map(|&m| m as f64).collect();
                    tape.masked_sq_mean(out.eps, eps_leaf, &mask)?
                }
                CaptionRegion::Object => {
                    let mask: Vec<f64> = scene.object_mask.iter().map(|&m| m as f64).collect();
                    tape.masked_sq_mean(out.eps, eps_leaf, &mask)?
                }
            };
            losses.push(loss);
        }
        let loss = tape.mean_vars(&losses);
        let loss_value = tape.scalar(loss);
        if !loss_value.is_finite() {
            return Err(Error::NonFinite {
                ctx: "pretraining loss",
                step,
            });
        }
        let grads = tape.backward(loss);
        let mut grad_bufs: Vec<Vec<f64>> = param_names
            .iter()
            .map(|name| {
                let var = bound.var(name);
                grad_or_zeros(&grads, var, denoiser.params.get(name).data.len())
            })
            .collect();
        crate::optim::clip_grad_norm(&mut grad_bufs, opts.clip_norm);
        adam.begin_step();
        for ((name, slot), g) in param_names.iter().zip(&slots).zip(&grad_bufs) {
            let tensor = denoiser.params.get_mut(name);
            adam.update(*slot, &mut tensor.data, g);
        }
        if let Some(cb) = progress.as_deref_mut() {
            cb(step, loss_value);
        }
    }

    Ok(BaseCheckpoint {
        run: run.clone(),
        denoiser,
        seed,
    })
}

/// Cache directory for generated fixtures: `IEDIT_CACHE_DIR` when set, else
/// `target/iedit-cache` under the workspace.
pub fn cache_dir() -> PathBuf {
    if let Ok(dir) = std::env::var("IEDIT_CACHE_DIR") {
        return PathBuf::from(dir);
    }
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("..")
        .join("..")
        .join("target")
        .join("iedit-cache")
}

fn options_tag(run: &RunConfig, opts: &PretrainOptions, seed: u64) -> String {
    let payload = serde_json::json!({
        "arch": crate::backbone::ARCH_VERSION,
        "config": run,
        "pretrain": opts,
        "seed": seed,
    });
    let text = serde_json::to_string(&payload).expect("tag serializes");
    crate::archive::sha256_hex(text.as_bytes())[..16].to_string()
}

/// The pretrained toy base checkpoint shipped with the crate.
pub const BUNDLED_BASE: &[u8] = include_bytes!("../assets/base_toy.iea");

/// Load the shipped toy base checkpoint.
pub fn bundled_base() -> Result<BaseCheckpoint> {
    let archive = crate::archive::TensorArchive::from_bytes(BUNDLED_BASE)?;
    BaseCheckpoint::from_archive(&archive)
}

/// Load the base checkpoint for this configuration: the shipped fixture when
/// it matches, a previously cached build otherwise, pretraining from scratch
/// as the last resort.
pub fn cached_base(run: &RunConfig, opts: &PretrainOptions, seed: u64) -> Result<BaseCheckpoint> {
    let tag = options_tag(run, opts, seed);
    if let Ok(archive) = crate::archive::TensorArchive::from_bytes(BUNDLED_BASE) {
        if archive.meta.get("options_tag") == Some(&tag) {
            return BaseCheckpoint::from_archive(&archive);
        }
    }
    let dir = cache_dir();
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let path = dir.join(format!("base_{tag}.iea"));
    if path.exists() {
        let archive = crate::archive::TensorArchive::load(&path)?;
        return BaseCheckpoint::from_archive(&archive);
    }
    let ckpt = pretrain(run, opts, seed, None)?;
    // write-then-rename so concurrent builders never see a torn file
    let tmp = path.with_extension(format!("tmp{}", std::process::id()));
    let mut archive = ckpt.to_archive();
    archive.meta.insert("options_tag".into(), tag);
    let bytes = archive.to_bytes();
    std::fs::write(&tmp, &bytes).map_err(|e| Error::io(tmp.display().to_string(), e))?;
    std::fs::rename(&tmp, &path).map_err(|e| Error::io(path.display().to_string(), e))?;
    // reload so callers always see the f32-quantized checkpoint, the same
    // bytes any later process will load
    let archive = crate::archive::TensorArchive::load(&path)?;
    BaseCheckpoint::from_archive(&archive)
}

/// Options for the procedural fixture benchmark.
#[derive(Debug, Clone)]
pub struct FixtureBenchOptions {
    pub scenes: usize,
    pub targets_per_scene: usize,
}

impl Default for FixtureBenchOptions {
    fn default() -> Self {
        FixtureBenchOptions {
            scenes: 8,
            targets_per_scene: 3,
        }
    }
}

/// Generate `scenes` bundles plus a manifest under `dir`. Every scene gets
/// `targets_per_scene` target interactions distinct from its source verb.
pub fn generate_fixture_benchmark(
    dir: &Path,
    run: &RunConfig,
    opts: &FixtureBenchOptions,
    seed: u64,
) -> Result<BenchmarkManifest> {
    let res = run.denoiser.img_res;
    let mut gen_rng = rng::stream(seed, "fixture_bench", 0);
    let mut instances = Vec::new();
    for i in 0..opts.scenes {
        // rotate the source verb so every interaction appears as a source
        let mut spec = SceneSpec::sample(&mut gen_rng);
        spec.interaction = INTERACTIONS[i % INTERACTIONS.len()];
        let scene = render_scene(&spec, res);
        let id = format!("scene_{i:02}");
        save_bundle(&dir.join("scenes").join(&id), &scene)?;
        let targets: Vec<String> = INTERACTIONS
            .iter()
            .filter(|v| **v != spec.interaction)
            .take(opts.targets_per_scene)
            .map(|v| v.word().to_string())
            .collect();
        instances.push(BenchmarkInstance {
            id: id.clone(),
            source_image: format!("scenes/{id}"),
            masks: format!("scenes/{id}"),
            subject_label: scene.meta.subject_label.clone(),
            source_interaction: scene.meta.interaction.clone(),
            object_label: scene.meta.object_label.clone(),
            target_interactions: targets,
        });
    }
    let all_verbs: Vec<String> = INTERACTIONS.iter().map(|v| v.word().to_string()).collect();
    let candidate_interactions: BTreeMap<String, Vec<String>> = instances
        .iter()
        .map(|i| (i.object_label.clone(), all_verbs.clone()))
        .collect();
    let manifest = BenchmarkManifest {
        schema_version: 1,
        name: "procedural-fixture".into(),
        candidate_interactions,
        instances,
    };
    let path = dir.join("manifest.json");
    let mut bytes = serde_json::to_vec_pretty(&manifest)?;
    bytes.push(b'\n');
    std::fs::write(&path, bytes).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(manifest)
}

/// Interactions as verbs, for CLI help output.
pub fn interaction_words() -> Vec<&'static str> {
    INTERACTIONS.iter().map(Interaction::word).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_opts() -> PretrainOptions {
        PretrainOptions {
            steps: 4,
            batch: 2,
            lr: 1e-3,
            dataset_scenes: 6,
            clip_norm: 1.0,
        }
    }

    #[test]
    fn pretraining_reduces_the_loss_and_is_deterministic() {
        let run = RunConfig::micro();
        let opts = PretrainOptions {
            steps: 60,
            batch: 2,
            lr: 2e-3,
            dataset_scenes: 8,
            clip_norm: 1.0,
        };
        let mut losses = Vec::new();
        let ckpt = pretrain(&run, &opts, 3, Some(&mut |_, l| losses.push(l))).unwrap();
        let early: f64 = losses[..10].iter().sum::<f64>() / 10.0;
        let late: f64 = losses[losses.len() - 10..].iter().sum::<f64>() / 10.0;
        assert!(
            late < early,
            "loss should fall during pretraining ({early} -> {late})"
        );
        let ckpt2 = pretrain(&run, &opts, 3, None).unwrap();
        assert_eq!(ckpt.checksum(), ckpt2.checksum());
    }

    #[test]
    fn cached_base_builds_once_and_reloads_identically() {
        let tmp = tempfile::tempdir().unwrap();
        // scope the env var to this test's cache
        std::env::set_var("IEDIT_CACHE_DIR", tmp.path());
        let run = RunConfig::micro();
        let opts = tiny_opts();
        let a = cached_base(&run, &opts, 1).unwrap();
        let b = cached_base(&run, &opts, 1).unwrap();
        std::env::remove_var("IEDIT_CACHE_DIR");
        assert_eq!(a.checksum(), b.checksum());
        let entries = std::fs::read_dir(tmp.path()).unwrap().count();
        assert_eq!(entries, 1, "exactly one cached checkpoint");
    }

    #[test]
    fn fixture_benchmark_has_the_requested_shape() {
        let tmp = tempfile::tempdir().unwrap();
        let run = RunConfig::micro();
        let opts = FixtureBenchOptions {
            scenes: 6,
            targets_per_scene: 3,
        };
        let manifest = generate_fixture_benchmark(tmp.path(), &run, &opts, 11).unwrap();
        manifest.validate().unwrap();
        assert_eq!(manifest.instances.len(), 6);
        for inst in &manifest.instances {
            assert_eq!(inst.target_interactions.len(), 3);
            assert!(!inst.target_interactions.contains(&inst.source_interaction));
            let bundle = crate::scene::load_bundle(&tmp.path().join(&inst.source_image)).unwrap();
            assert_eq!(bundle.image.res, run.denoiser.img_res);
        }
        // manifest file parses back
        let loaded = BenchmarkManifest::load(&tmp.path().join("manifest.json")).unwrap();
        assert_eq!(loaded, manifest);
    }
}
