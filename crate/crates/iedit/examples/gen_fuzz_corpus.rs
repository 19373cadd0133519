//! Regenerate the checked-in fuzz corpus seeds and the reference benchmark
//! manifest asset.
//!
//! Usage: cargo run --example gen_fuzz_corpus

use iedit::archive::KIND_BASE;
use iedit::config::RunConfig;
use iedit::iebench::{reference_manifest, EvalCell, EvalReport};
use iedit::scene::{render_scene, Interaction, SceneSpec, NAMED_COLORS};
use std::fs;
use std::path::Path;

fn write(path: &Path, bytes: &[u8]) {
    fs::create_dir_all(path.parent().unwrap()).unwrap();
    fs::write(path, bytes).unwrap();
    println!("wrote {}", path.display());
}

fn main() {
    let crate_dir = Path::new(env!("CARGO_MANIFEST_DIR"));
    let corpus = crate_dir.join("fuzz").join("corpus");

    // reference manifest asset
    let manifest = reference_manifest();
    let mut manifest_json = serde_json::to_vec_pretty(&manifest).unwrap();
    manifest_json.push(b'\n');
    write(
        &crate_dir.join("assets").join("iebench_manifest.json"),
        &manifest_json,
    );

    // archive seeds: a base checkpoint at micro scale and a tiny artifact
    let run = RunConfig::micro();
    let denoiser = iedit::backbone::Denoiser::new_random(&run.denoiser, 7).unwrap();
    let base = iedit::backbone::BaseCheckpoint {
        run: run.clone(),
        denoiser,
        seed: 7,
    };
    write(
        &corpus.join("archive_parse").join("base_checkpoint.iea"),
        &base.to_archive().to_bytes(),
    );
    let mut small = iedit::archive::TensorArchive::new(KIND_BASE, run.clone(), 1, "");
    small.insert_f64("t.a", vec![2, 2], &[1.0, 2.0, 3.0, 4.0]);
    small.insert_f64("t.b", vec![3], &[0.5, -0.5, 0.25]);
    write(
        &corpus.join("archive_parse").join("tiny.iea"),
        &small.to_bytes(),
    );

    // manifest seeds
    write(
        &corpus.join("manifest_parse").join("reference.json"),
        &manifest_json,
    );

    // config seeds
    for (name, cfg) in [
        ("toy.json", RunConfig::default()),
        ("micro.json", run.clone()),
    ] {
        write(
            &corpus.join("config_parse").join(name),
            cfg.to_json_pretty().as_bytes(),
        );
    }

    // scene meta + png seeds from a rendered scene
    let spec = SceneSpec {
        subject_color: NAMED_COLORS[0].1,
        object_kind: iedit::scene::ObjectKind::Ball,
        object_color: NAMED_COLORS[1].1,
        background_kind: iedit::scene::BackgroundKind::Field,
        interaction: Interaction::Hold,
        jitter: (0.0, 0.0),
    };
    let scene = render_scene(&spec, 32);
    write(
        &corpus.join("scene_meta_parse").join("meta.json"),
        &serde_json::to_vec_pretty(&scene.meta).unwrap(),
    );
    write(
        &corpus.join("png_decode").join("image.png"),
        &iedit::scene::encode_rgb_png(&scene.image).unwrap(),
    );
    write(
        &corpus.join("png_decode").join("mask.png"),
        &iedit::scene::encode_mask_png(&scene.subject_mask, 32).unwrap(),
    );

    // report seed
    let cells = vec![
        EvalCell {
            instance_id: "scene_00".into(),
            target_interaction: "ride".into(),
            seed: 0,
            editability: 1.0,
            identity_consistency: 0.75,
            config_hash: "abc123".into(),
        },
        EvalCell {
            instance_id: "scene_00".into(),
            target_interaction: "ride".into(),
            seed: 1,
            editability: 0.0,
            identity_consistency: 0.5,
            config_hash: "abc123".into(),
        },
    ];
    let (e, ic, o) = EvalReport::recompute_aggregates(&cells);
    let report = EvalReport {
        schema_version: 1,
        benchmark: "toy".into(),
        config_hash: "abc123".into(),
        seeds_per_pair: 2,
        editability_mean: e,
        identity_consistency_mean: ic,
        overall: o,
        partial: false,
        invalid_instances: vec![],
        cells,
    };
    write(
        &corpus.join("report_parse").join("report.json"),
        &report.to_json_bytes(),
    );

    // tokenizer seeds
    write(
        &corpus.join("tokenize").join("target_prompt.txt"),
        b"a photo of <s*> ride <o*> at <bg*>.",
    );
    write(
        &corpus.join("tokenize").join("caption.txt"),
        b"a photo of red person hold blue ball at field",
    );
}
