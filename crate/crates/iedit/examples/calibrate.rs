//! Developer calibration harness: timing probes, prior-quality checks, and
//! ablation-grid dry runs on the procedural fixture benchmark.
//!
//! Usage: cargo run --release --example calibrate -- <speed|prior|grid> [args]

use iedit::backbone::BaseCheckpoint;
use iedit::cli::{run_ablation_config, ArtifactEditor};
use iedit::config::{AblationFlags, RunConfig};
use iedit::diffusion::{sample, NoiseSchedule};
use iedit::editing::HOITriplet;
use iedit::fixture::{
    generate_fixture_benchmark, FixtureBenchOptions, PretrainOptions,
};
use iedit::iebench::{hoi_match, BackendProvider, BenchmarkManifest, MockBackendProvider};
use iedit::inversion::TrainConfig;
use iedit::rng;
use iedit::scene::{render_scene, SceneSpec};
use std::collections::BTreeMap;
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let mode = args.first().map(String::as_str).unwrap_or("speed");
    match mode {
        "speed" => speed_probe(),
        "prior" => prior_probe(&args[1..]),
        "grid" => grid_probe(&args[1..]),
        "reuse" => reuse_probe(&args[1..]),
        other => eprintln!("unknown mode {other}"),
    }
}

/// Re-evaluate an existing checkpoint file under the current sampler.
fn reuse_probe(args: &[String]) {
    let path = std::path::PathBuf::from(&args[0]);
    let archive = iedit::archive::TensorArchive::load(&path).unwrap();
    let mut ckpt = BaseCheckpoint::from_archive(&archive).unwrap();
    ckpt.run.sampler = RunConfig::default().sampler;
    let run = ckpt.run.clone();
    validation_mse(&ckpt, &run);
    trajectory_probe(&ckpt, &run);
    prior_accuracy(&ckpt, &run, 40);
}

/// Print per-step sampling statistics plus a denoise-from-mid-t
/// reconstruction check.
fn trajectory_probe(ckpt: &BaseCheckpoint, run: &RunConfig) {
    let sched = NoiseSchedule::for_sampler(&run.sampler).unwrap();
    let cfg = &run.denoiser;
    let n = cfg.latent_channels * cfg.img_res * cfg.img_res;
    let mut gen_rng = rng::stream(4242, "traj", 0);
    let spec = SceneSpec::sample(&mut gen_rng);
    let seq = iedit::backbone::PromptSequence::parse(&spec.caption()).unwrap();

    println!("trajectory for: {}", spec.caption());
    let mut step = 0usize;
    let den = &ckpt.denoiser;
    let mut predictor = |z: &[f64], t: usize| {
        let out = iedit::backbone::predict_noise(den, None, z, t, &seq, &BTreeMap::new(), false)?;
        let ab = sched.alpha_bar(t);
        let x0: Vec<f64> = z
            .iter()
            .zip(&out.eps)
            .map(|(zv, e)| (zv - (1.0 - ab).sqrt() * e) / ab.sqrt())
            .collect();
        let stat = |v: &[f64]| {
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            let std =
                (v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / v.len() as f64).sqrt();
            (mean, std)
        };
        if step.is_multiple_of(10) || step == 49 {
            let (zm, zs) = stat(z);
            let (xm, xs) = stat(&x0);
            let (em, es) = stat(&out.eps);
            println!(
                "  step {step:2} t={t:3}: z ({zm:+.2},{zs:.2})  eps_hat ({em:+.2},{es:.2})  x0 ({xm:+.2},{xs:.2})"
            );
        }
        step += 1;
        Ok(out.eps)
    };
    let z0 = sample(&mut predictor, &sched, &run.sampler, n, 31337).unwrap();
    let image = iedit::scene::Image {
        res: cfg.img_res,
        channels: 3,
        data: z0.iter().map(|v| v.clamp(-1.0, 1.0)).collect(),
    };
    let scene = render_scene(&spec, cfg.img_res);
    let backends = MockBackendProvider.for_instance(&scene.meta).unwrap();
    let dets = backends.hoi.detect(&image);
    println!(
        "  full sample dets: {:?}",
        dets.iter()
            .map(|d| (d.triplet.interaction.clone(), d.confidence))
            .collect::<Vec<_>>()
    );

    // denoise a real noised scene from mid-trajectory
    for t_start in [40usize, 80, 120] {
        let eps = rng::normal_vec(99, "recon_eps", t_start as u64, n);
        let z_t = iedit::diffusion::add_noise(&scene.image.data, &eps, t_start, &sched).unwrap();
        let mut z = z_t;
        // strided walk down from t_start
        let ts: Vec<usize> = (0..=t_start / 4).map(|i| i * 4).rev().collect();
        for (i, &t) in ts.iter().enumerate() {
            let out =
                iedit::backbone::predict_noise(den, None, &z, t, &seq, &BTreeMap::new(), false)
                    .unwrap();
            let ab = sched.alpha_bar(t);
            let ab_prev = if i + 1 < ts.len() {
                sched.alpha_bar(ts[i + 1])
            } else {
                1.0
            };
            z = z
                .iter()
                .zip(&out.eps)
                .map(|(zv, e)| {
                    let x0 = ((zv - (1.0 - ab).sqrt() * e) / ab.sqrt()).clamp(-1.0, 1.0);
                    ab_prev.sqrt() * x0 + (1.0 - ab_prev).sqrt() * e
                })
                .collect();
        }
        let recon = iedit::scene::Image {
            res: cfg.img_res,
            channels: 3,
            data: z.iter().map(|v| v.clamp(-1.0, 1.0)).collect(),
        };
        let mse: f64 = recon
            .data
            .iter()
            .zip(&scene.image.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / recon.data.len() as f64;
        let dets = backends.hoi.detect(&recon);
        println!(
            "  recon from t={t_start}: mse {mse:.4}, dets {:?}",
            dets.iter()
                .map(|d| (d.triplet.interaction.clone(), d.confidence))
                .collect::<Vec<_>>()
        );
    }
}

/// Noise-prediction MSE on held-out scenes per timestep band, against the
/// trivial predict-zero baseline (MSE 1.0).
fn validation_mse(ckpt: &BaseCheckpoint, run: &RunConfig) {
    let sched = NoiseSchedule::for_sampler(&run.sampler).unwrap();
    let cfg = &run.denoiser;
    let n = cfg.latent_channels * cfg.img_res * cfg.img_res;
    let mut gen_rng = rng::stream(777, "val_scenes", 0);
    for t in [5usize, 25, 60, 120, 180] {
        let mut acc = 0.0;
        let trials = 6;
        for k in 0..trials {
            let spec = SceneSpec::sample(&mut gen_rng);
            let scene = render_scene(&spec, cfg.img_res);
            let seq = iedit::backbone::PromptSequence::parse(&spec.caption()).unwrap();
            let eps = rng::normal_vec(500 + k, "val_eps", t as u64, n);
            let z_t = iedit::diffusion::add_noise(&scene.image.data, &eps, t, &sched).unwrap();
            let out = iedit::backbone::predict_noise(
                &ckpt.denoiser,
                None,
                &z_t,
                t,
                &seq,
                &BTreeMap::new(),
                false,
            )
            .unwrap();
            acc += out
                .eps
                .iter()
                .zip(&eps)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                / n as f64;
        }
        println!("  val mse @ t={t}: {:.4}", acc / trials as f64);
    }
}

/// Time pretraining steps and one sampling pass at toy scale.
fn speed_probe() {
    let run = RunConfig::default();
    let opts = PretrainOptions {
        steps: 10,
        batch: 4,
        ..Default::default()
    };
    let t0 = Instant::now();
    let ckpt = iedit::fixture::pretrain(&run, &opts, 0, None).unwrap();
    let dt = t0.elapsed().as_secs_f64();
    println!(
        "pretrain: {:.3}s for {} steps x batch {} => {:.1} ms/sample",
        dt,
        opts.steps,
        opts.batch,
        1000.0 * dt / (opts.steps * opts.batch) as f64
    );

    let sched = NoiseSchedule::for_sampler(&run.sampler).unwrap();
    let seq =
        iedit::backbone::PromptSequence::parse("a photo of red person ride blue ball at field")
            .unwrap();
    let cfg = run.denoiser.clone();
    let n = cfg.latent_channels * cfg.img_res * cfg.img_res;
    let den = ckpt.denoiser.clone();
    let mut predictor = move |z: &[f64], t: usize| {
        iedit::backbone::predict_noise(&den, None, z, t, &seq, &BTreeMap::new(), false)
            .map(|o| o.eps)
    };
    let t0 = Instant::now();
    let _ = sample(&mut predictor, &sched, &run.sampler, n, 0).unwrap();
    println!("one 50-step sample: {:.3}s", t0.elapsed().as_secs_f64());
}

/// Pretrain (with a live loss curve) and measure how often the mock detector
/// reads the captioned interaction back off sampled images.
fn prior_probe(args: &[String]) {
    let steps: usize = args.first().and_then(|s| s.parse().ok()).unwrap_or(4000);
    let lr: f64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(1e-3);
    let run = RunConfig::default();
    let opts = PretrainOptions {
        steps,
        lr,
        ..Default::default()
    };
    let t0 = Instant::now();
    let mut recent: Vec<f64> = Vec::new();
    let ckpt = iedit::fixture::pretrain(
        &run,
        &opts,
        0,
        Some(&mut |step, loss| {
            recent.push(loss);
            if (step + 1) % 200 == 0 {
                let window: f64 = recent[recent.len().saturating_sub(200)..]
                    .iter()
                    .sum::<f64>()
                    / 200.0;
                println!("  step {:5}: loss(200-avg) {window:.4}", step + 1);
            }
        }),
    )
    .unwrap();
    println!("pretrained in {:.1}s", t0.elapsed().as_secs_f64());
    let save = std::env::temp_dir().join(format!("probe_base_{steps}.iea"));
    ckpt.to_archive().save(&save).unwrap();
    println!("saved {}", save.display());
    validation_mse(&ckpt, &run);
    trajectory_probe(&ckpt, &run);
    prior_accuracy(&ckpt, &run, 40);
}

fn prior_accuracy(ckpt: &BaseCheckpoint, run: &RunConfig, trials: usize) {
    let guidance: f64 = std::env::var("PROBE_GUIDANCE")
        .ok()
        .and_then(|s| s.parse().ok())
        .unwrap_or(run.sampler.guidance_scale);
    println!("prior accuracy with guidance {guidance}:");
    let sched = NoiseSchedule::for_sampler(&run.sampler).unwrap();
    let cfg = run.denoiser.clone();
    let n = cfg.latent_channels * cfg.img_res * cfg.img_res;
    let mut verb_hits = 0usize;
    let mut both_blobs = 0usize;
    let mut gen_rng = rng::stream(123, "prior_probe", 0);
    for trial in 0..trials {
        let spec = SceneSpec::sample(&mut gen_rng);
        let caption = spec.caption();
        let seq = iedit::backbone::PromptSequence::parse(&caption).unwrap();
        let null_seq = iedit::backbone::PromptSequence::parse("a photo of").unwrap();
        let den = &ckpt.denoiser;
        let mut predictor = |z: &[f64], t: usize| {
            let cond =
                iedit::backbone::predict_noise(den, None, z, t, &seq, &BTreeMap::new(), false)?;
            if guidance == 1.0 {
                return Ok(cond.eps);
            }
            let uncond = iedit::backbone::predict_noise(
                den,
                None,
                z,
                t,
                &null_seq,
                &BTreeMap::new(),
                false,
            )?;
            Ok(uncond
                .eps
                .iter()
                .zip(&cond.eps)
                .map(|(u, c)| u + guidance * (c - u))
                .collect())
        };
        let z0 = sample(&mut predictor, &sched, &run.sampler, n, 1000 + trial as u64).unwrap();
        let image = iedit::scene::Image {
            res: cfg.img_res,
            channels: 3,
            data: z0.iter().map(|v| v.clamp(-1.0, 1.0)).collect(),
        };
        let scene = render_scene(&spec, cfg.img_res);
        let backends = MockBackendProvider.for_instance(&scene.meta).unwrap();
        let dets = backends.hoi.detect(&image);
        if trial < 6 {
            let mean = image.data.iter().sum::<f64>() / image.data.len() as f64;
            let std = (image
                .data
                .iter()
                .map(|v| (v - mean) * (v - mean))
                .sum::<f64>()
                / image.data.len() as f64)
                .sqrt();
            let subj = iedit::scene::find_color_blob(&image, scene.meta.subject_color, 0.62, 1)
                .map(|b| b.pixels)
                .unwrap_or(0);
            let obj = iedit::scene::find_color_blob(&image, scene.meta.object_color, 0.62, 1)
                .map(|b| b.pixels)
                .unwrap_or(0);
            println!(
                "  sample {trial}: verb={} mean={mean:.2} std={std:.2} subj_px={subj} obj_px={obj} dets={}",
                spec.interaction.word(),
                dets.len()
            );
            if let Some(d) = dets.first() {
                println!(
                    "    detected verb={} conf={:.2}",
                    d.triplet.interaction, d.confidence
                );
            }
        }
        if !dets.is_empty() {
            both_blobs += 1;
            let target = HOITriplet::new(
                "person",
                spec.interaction.word(),
                scene.meta.object_label.as_str(),
            );
            if hoi_match(&dets, &target, 0.5) == 1.0 {
                verb_hits += 1;
            }
        }
    }
    println!(
        "prior: {both_blobs}/{trials} samples had both entities; {verb_hits}/{trials} matched the captioned verb"
    );
}

/// Run selected ablation rows on a fixture benchmark.
fn grid_probe(args: &[String]) {
    let base_path = args.first().expect("grid <base.iea> [s1 s2 scenes seeds labels]");
    let s1: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(400);
    let s2: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(150);
    let scenes: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(4);
    let seeds: u64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(2);
    let labels: Vec<String> = args
        .get(5)
        .map(|s| s.split(',').map(str::to_string).collect())
        .unwrap_or_else(|| {
            vec![
                "full".into(),
                "wo_lora".into(),
                "wo_sft_lora".into(),
                "baseline".into(),
            ]
        });

    let archive = iedit::archive::TensorArchive::load(std::path::Path::new(base_path)).unwrap();
    let mut base = BaseCheckpoint::from_archive(&archive).unwrap();
    base.run.sampler = RunConfig::default().sampler;
    let run = base.run.clone();

    let dir = std::env::temp_dir().join(format!("iedit-grid-{}", std::process::id()));
    generate_fixture_benchmark(
        &dir,
        &run,
        &FixtureBenchOptions {
            scenes,
            targets_per_scene: 3,
        },
        7,
    )
    .unwrap();
    let manifest = BenchmarkManifest::load(&dir.join("manifest.json")).unwrap();

    for label in &labels {
        let flags = AblationFlags::from_label(label).unwrap();
        let train = TrainConfig {
            stage1_steps: s1,
            stage2_steps: s2,
            ablation: flags,
            ..Default::default()
        };
        let t0 = Instant::now();
        let report =
            run_ablation_config(&base, &manifest, &dir, &dir, label, train, seeds, None, 0)
                .unwrap();
        println!(
            "{label:>16}: editability {:.4}  identity {:.4}  overall {:.4}   ({:.0}s)",
            report.editability_mean,
            report.identity_consistency_mean,
            report.overall,
            t0.elapsed().as_secs_f64()
        );
    }
    let _ = ArtifactEditor::from_artifacts; // keep the import used in all modes
}
