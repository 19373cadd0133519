//! The evaluation harness: interaction editability, identity consistency,
//! and the overall score over a benchmark manifest, with pluggable
//! perception backends.
//!
//! The shipped mock backends are scripted against scene metadata (entity
//! colors), so the whole harness runs hermetically; real detector/segmenter/
//! embedder stacks can be plugged in behind the same traits.

use crate::editing::{normalize_label, HOITriplet};
use crate::error::{Error, Result};
use crate::rng;
use crate::scene::{classify_relation, find_color_blob, Image, Mask, SceneBundle, SceneMeta};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

/// Inclusive pixel rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl Rect {
    pub fn within(&self, res: usize) -> bool {
        self.x0 <= self.x1 && self.y0 <= self.y1 && self.x1 < res && self.y1 < res
    }

    pub fn area(&self) -> usize {
        (self.x1 - self.x0 + 1) * (self.y1 - self.y0 + 1)
    }
}

/// One detected interaction with localized subject and object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub triplet: HOITriplet,
    pub subject_box: Rect,
    pub object_box: Rect,
    pub confidence: f64,
}

pub trait HoiDetector {
    fn detect(&self, image: &Image) -> Vec<Detection>;
}

pub trait ObjectDetector {
    fn locate(&self, image: &Image, label: &str) -> Option<Rect>;
}

pub trait Segmenter {
    fn segment(&self, image: &Image, rect: &Rect) -> Mask;
}

pub trait Embedder {
    fn embed(&self, image: &Image, mask: &Mask) -> Vec<f64>;
}

/// The four perception callables the metrics run against.
pub struct PerceptionBackends {
    pub hoi: Box<dyn HoiDetector>,
    pub object: Box<dyn ObjectDetector>,
    pub segmenter: Box<dyn Segmenter>,
    pub embedder: Box<dyn Embedder>,
}

/// Builds per-instance backends; mock backends key on the scene metadata.
pub trait BackendProvider {
    fn for_instance(&self, meta: &SceneMeta) -> Result<PerceptionBackends>;
}

/// Editability score: 1.0 iff any detection matches the target triplet
/// (case-insensitive, whitespace normalized) at or above the confidence
/// threshold. An empty detection list scores 0.0.
pub fn hoi_match(detections: &[Detection], target: &HOITriplet, conf_threshold: f64) -> f64 {
    let want = target.normalized();
    for det in detections {
        if det.confidence >= conf_threshold && det.triplet.normalized() == want {
            return 1.0;
        }
    }
    0.0
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    dot / (na * nb)
}

/// Identity consistency: for the subject and the object, detect → segment →
/// embed in both images and compare by cosine; the score is the mean of the
/// two cosines.
///
/// An entity the detector cannot find in the edited image contributes 0.0
/// (the edit destroyed it); an entity missing from the source marks the
/// instance invalid.
pub fn identity_consistency(
    source: &Image,
    edited: &Image,
    subject_label: &str,
    object_label: &str,
    backends: &PerceptionBackends,
) -> Result<f64> {
    let mut acc = 0.0;
    for label in [subject_label, object_label] {
        let Some(src_box) = backends.object.locate(source, label) else {
            return Err(Error::InvalidInstance {
                id: label.to_string(),
                reason: format!("{label:?} not detected in the source image"),
            });
        };
        let Some(edit_box) = backends.object.locate(edited, label) else {
            // entity destroyed by the edit: floor score for this entity
            continue;
        };
        let src_mask = backends.segmenter.segment(source, &src_box);
        let edit_mask = backends.segmenter.segment(edited, &edit_box);
        let src_emb = backends.embedder.embed(source, &src_mask);
        let edit_emb = backends.embedder.embed(edited, &edit_mask);
        acc += cosine(&src_emb, &edit_emb);
    }
    Ok(acc / 2.0)
}

/// Overall score: the arithmetic mean of editability and identity
/// consistency.
pub fn overall(editability: f64, ic: f64) -> f64 {
    (editability + ic) / 2.0
}

// ---------------------------------------------------------------------------
// mock perception backends
// ---------------------------------------------------------------------------

const BLOB_TOL: f64 = 0.62;
const BLOB_MIN_PIXELS: usize = 3;

fn blob_rect(blob: &crate::scene::Blob) -> Rect {
    Rect {
        x0: blob.bbox.0,
        y0: blob.bbox.1,
        x1: blob.bbox.2,
        y1: blob.bbox.3,
    }
}

/// Scripted interaction detector keyed by the scene's entity colors: find
/// both color blobs, then classify the verb from their displacement.
/// Confidence reflects how crisp the color match is.
pub struct MockHoiDetector {
    meta: SceneMeta,
}

impl HoiDetector for MockHoiDetector {
    fn detect(&self, image: &Image) -> Vec<Detection> {
        let subj = find_color_blob(image, self.meta.subject_color, BLOB_TOL, BLOB_MIN_PIXELS);
        let obj = find_color_blob(image, self.meta.object_color, BLOB_TOL, BLOB_MIN_PIXELS);
        let (Some(subj), Some(obj)) = (subj, obj) else {
            return Vec::new();
        };
        let verb = classify_relation(subj.centroid, obj.centroid, image.res);
        // crispness: fraction of matched mass that is a strong match
        let strong_subj = find_color_blob(image, self.meta.subject_color, BLOB_TOL / 2.0, 1);
        let strong_obj = find_color_blob(image, self.meta.object_color, BLOB_TOL / 2.0, 1);
        let crisp = |strong: Option<crate::scene::Blob>, full: &crate::scene::Blob| {
            strong.map_or(0.0, |s| (s.pixels as f64 / full.pixels as f64).min(1.0))
        };
        let confidence = (crisp(strong_subj, &subj) + crisp(strong_obj, &obj)) / 2.0;
        vec![Detection {
            triplet: HOITriplet::new(
                &self.meta.subject_label,
                verb.word(),
                &self.meta.object_label,
            ),
            subject_box: blob_rect(&subj),
            object_box: blob_rect(&obj),
            confidence,
        }]
    }
}

/// Color-keyed object detector: label → color from the scene metadata.
pub struct MockObjectDetector {
    meta: SceneMeta,
}

impl MockObjectDetector {
    fn color_for(&self, label: &str) -> Option<[f64; 3]> {
        let label = normalize_label(label);
        if label == normalize_label(&self.meta.subject_label) {
            Some(self.meta.subject_color)
        } else if label == normalize_label(&self.meta.object_label) {
            Some(self.meta.object_color)
        } else if label == normalize_label(&self.meta.background_label) {
            Some(self.meta.background_color)
        } else {
            None
        }
    }
}

impl ObjectDetector for MockObjectDetector {
    fn locate(&self, image: &Image, label: &str) -> Option<Rect> {
        let color = self.color_for(label)?;
        find_color_blob(image, color, BLOB_TOL, BLOB_MIN_PIXELS).map(|b| blob_rect(&b))
    }
}

/// Box-prompted segmenter: seed from the box center region, then threshold
/// on color distance to the seed.
pub struct MockSegmenter;

impl Segmenter for MockSegmenter {
    fn segment(&self, image: &Image, rect: &Rect) -> Mask {
        let res = image.res;
        let mut mask = vec![0u8; res * res];
        if !rect.within(res) {
            return mask;
        }
        // seed color: average of the central half of the box
        let cx0 = rect.x0 + (rect.x1 - rect.x0) / 4;
        let cx1 = rect.x1 - (rect.x1 - rect.x0) / 4;
        let cy0 = rect.y0 + (rect.y1 - rect.y0) / 4;
        let cy1 = rect.y1 - (rect.y1 - rect.y0) / 4;
        let mut seed = [0.0; 3];
        let mut n = 0.0;
        for y in cy0..=cy1 {
            for x in cx0..=cx1 {
                let p = image.pixel(y, x);
                for c in 0..3 {
                    seed[c] += p[c];
                }
                n += 1.0;
            }
        }
        for s in &mut seed {
            *s /= n;
        }
        for y in rect.y0..=rect.y1 {
            for x in rect.x0..=rect.x1 {
                let p = image.pixel(y, x);
                let d = ((p[0] - seed[0]).powi(2)
                    + (p[1] - seed[1]).powi(2)
                    + (p[2] - seed[2]).powi(2))
                .sqrt();
                if d < 0.5 {
                    mask[y * res + x] = 1;
                }
            }
        }
        mask
    }
}

/// Projection-based embedder over masked pixels: color and shape moments
/// through a fixed random projection, L2-normalized.
pub struct MockEmbedder {
    projection: Vec<f64>, // [16 × 8]
}

impl MockEmbedder {
    pub fn new() -> Self {
        MockEmbedder {
            projection: rng::normal_vec(0xE3B0, "embedder_projection", 0, 16 * 8),
        }
    }
}

impl Default for MockEmbedder {
    fn default() -> Self {
        Self::new()
    }
}

impl Embedder for MockEmbedder {
    fn embed(&self, image: &Image, mask: &Mask) -> Vec<f64> {
        let res = image.res;
        let mut mean = [0.0f64; 3];
        let mut m2 = [0.0f64; 3];
        let mut count = 0.0;
        let mut bbox = (usize::MAX, usize::MAX, 0usize, 0usize);
        for y in 0..res {
            for x in 0..res {
                if mask[y * res + x] == 0 {
                    continue;
                }
                let p = image.pixel(y, x);
                for c in 0..3 {
                    mean[c] += p[c];
                    m2[c] += p[c] * p[c];
                }
                count += 1.0;
                bbox.0 = bbox.0.min(x);
                bbox.1 = bbox.1.min(y);
                bbox.2 = bbox.2.max(x);
                bbox.3 = bbox.3.max(y);
            }
        }
        if count == 0.0 {
            return vec![0.0; 16];
        }
        let mut features = [0.0f64; 8];
        for c in 0..3 {
            mean[c] /= count;
            features[c] = mean[c];
            features[3 + c] = (m2[c] / count - mean[c] * mean[c]).max(0.0).sqrt();
        }
        features[6] = count / (res * res) as f64;
        let w = (bbox.2 - bbox.0 + 1) as f64;
        let h = (bbox.3 - bbox.1 + 1) as f64;
        features[7] = (w / h).ln();
        let mut out = vec![0.0; 16];
        for (i, o) in out.iter_mut().enumerate() {
            for (j, f) in features.iter().enumerate() {
                *o += self.projection[i * 8 + j] * f;
            }
        }
        let norm: f64 = out.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            for o in &mut out {
                *o /= norm;
            }
        }
        out
    }
}

/// Provider for the scripted mock backends.
pub struct MockBackendProvider;

impl BackendProvider for MockBackendProvider {
    fn for_instance(&self, meta: &SceneMeta) -> Result<PerceptionBackends> {
        Ok(PerceptionBackends {
            hoi: Box::new(MockHoiDetector { meta: meta.clone() }),
            object: Box::new(MockObjectDetector { meta: meta.clone() }),
            segmenter: Box::new(MockSegmenter),
            embedder: Box::new(MockEmbedder::new()),
        })
    }
}

/// Placeholder provider for real perception stacks; always unavailable in
/// this build.
pub struct ExternalBackendProvider;

impl BackendProvider for ExternalBackendProvider {
    fn for_instance(&self, _meta: &SceneMeta) -> Result<PerceptionBackends> {
        Err(Error::BackendUnavailable("external".into()))
    }
}

// ---------------------------------------------------------------------------
// benchmark manifest
// ---------------------------------------------------------------------------

/// One benchmark instance: a source scene and its target interactions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkInstance {
    pub id: String,
    /// Relative path of the scene bundle directory.
    pub source_image: String,
    /// Relative path of the mask set (same directory for bundles).
    pub masks: String,
    pub subject_label: String,
    pub source_interaction: String,
    pub object_label: String,
    pub target_interactions: Vec<String>,
}

impl BenchmarkInstance {
    pub fn source_triplet(&self) -> HOITriplet {
        HOITriplet::new(
            &self.subject_label,
            &self.source_interaction,
            &self.object_label,
        )
    }
}

/// A versioned benchmark manifest with per-object candidate interactions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkManifest {
    pub schema_version: u32,
    pub name: String,
    /// Object label → plausible target interactions.
    pub candidate_interactions: BTreeMap<String, Vec<String>>,
    pub instances: Vec<BenchmarkInstance>,
}

impl BenchmarkManifest {
    pub fn from_json_bytes(bytes: &[u8]) -> Result<Self> {
        let manifest: BenchmarkManifest = serde_json::from_slice(bytes)?;
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::from_json_bytes(&bytes)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != 1 {
            return Err(Error::Config(format!(
                "unsupported manifest schema {}",
                self.schema_version
            )));
        }
        let mut seen = BTreeSet::new();
        for inst in &self.instances {
            if inst.id.is_empty() || !seen.insert(&inst.id) {
                return Err(Error::Config(format!(
                    "instance id {:?} empty or duplicated",
                    inst.id
                )));
            }
            if inst.target_interactions.is_empty() {
                return Err(Error::Config(format!(
                    "instance {:?} has no target interactions",
                    inst.id
                )));
            }
            inst.source_triplet().validate()?;
            // target plausibility against the candidate table, when the
            // object is listed there
            if let Some(candidates) = self.candidate_interactions.get(&inst.object_label) {
                let cset: BTreeSet<String> =
                    candidates.iter().map(|c| normalize_label(c)).collect();
                for target in &inst.target_interactions {
                    if !cset.contains(&normalize_label(target)) {
                        return Err(Error::Config(format!(
                            "instance {:?}: target {target:?} not plausible for {:?}",
                            inst.id, inst.object_label
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// (pairs, sources, distinct target actions, distinct objects)
    pub fn shape(&self) -> (usize, usize, usize, usize) {
        let pairs: usize = self
            .instances
            .iter()
            .map(|i| i.target_interactions.len())
            .sum();
        let actions: BTreeSet<String> = self
            .instances
            .iter()
            .flat_map(|i| i.target_interactions.iter().map(|t| normalize_label(t)))
            .collect();
        let objects: BTreeSet<&str> = self
            .instances
            .iter()
            .map(|i| i.object_label.as_str())
            .collect();
        (pairs, self.instances.len(), actions.len(), objects.len())
    }
}

/// The reference benchmark structure: 100 ⟨source, target interaction⟩ pairs
/// over 28 sources, 25 target actions, and 13 objects, with per-object
/// candidate interactions.
pub fn reference_manifest() -> BenchmarkManifest {
    let candidates: &[(&str, &[&str])] = &[
        ("broccoli", &["cut", "eat", "hold", "smell", "wash"]),
        ("dining table", &["clean", "eat at", "sit at"]),
        ("skateboard", &["hold", "jump", "ride", "sit on"]),
        ("chair", &["hold", "lie on", "sit on", "stand on"]),
        ("book", &["carry", "hold", "read"]),
        ("snowboard", &["hold", "jump", "ride"]),
        ("surfboard", &["hold", "jump", "ride", "sit on"]),
        (
            "sports ball",
            &["catch", "dribble", "hit", "hold", "kick", "throw"],
        ),
        ("cake", &["blow", "cut", "eat", "hold", "make"]),
        ("horse", &["feed", "kiss", "ride", "walk", "wash"]),
        ("dog", &["feed", "groom", "hug", "walk", "wash"]),
        ("pizza", &["cut", "eat", "hold", "make", "pick up"]),
        ("cat", &["feed", "hold", "hug", "kiss", "wash"]),
    ];
    let sources: &[(&str, &str, &str, &[&str])] = &[
        (
            "ball_01",
            "sports ball",
            "kick",
            &["catch", "dribble", "hit", "hold", "throw"],
        ),
        (
            "ball_02",
            "sports ball",
            "hit",
            &["catch", "dribble", "hold", "kick", "throw"],
        ),
        (
            "ball_03",
            "sports ball",
            "throw",
            &["catch", "dribble", "hit", "hold", "kick"],
        ),
        (
            "ball_04",
            "sports ball",
            "dribble",
            &["catch", "hit", "hold", "kick", "throw"],
        ),
        ("dog_01", "dog", "walk", &["feed", "groom", "hug", "wash"]),
        ("dog_02", "dog", "wash", &["feed", "groom", "hug", "walk"]),
        ("dog_03", "dog", "hug", &["feed", "groom", "walk", "wash"]),
        ("cat_01", "cat", "hold", &["feed", "hug", "kiss", "wash"]),
        ("cat_02", "cat", "hug", &["feed", "hold", "kiss", "wash"]),
        ("cat_03", "cat", "feed", &["hold", "hug", "kiss", "wash"]),
        (
            "horse_01",
            "horse",
            "ride",
            &["feed", "kiss", "walk", "wash"],
        ),
        (
            "horse_02",
            "horse",
            "walk",
            &["feed", "kiss", "ride", "wash"],
        ),
        (
            "horse_03",
            "horse",
            "feed",
            &["kiss", "ride", "walk", "wash"],
        ),
        (
            "pizza_01",
            "pizza",
            "eat",
            &["cut", "hold", "make", "pick up"],
        ),
        (
            "pizza_02",
            "pizza",
            "hold",
            &["cut", "eat", "make", "pick up"],
        ),
        (
            "broccoli_01",
            "broccoli",
            "hold",
            &["cut", "eat", "smell", "wash"],
        ),
        (
            "broccoli_02",
            "broccoli",
            "eat",
            &["cut", "hold", "smell", "wash"],
        ),
        ("cake_01", "cake", "hold", &["cut", "eat", "make"]),
        ("cake_02", "cake", "eat", &["cut", "hold", "make"]),
        (
            "skateboard_01",
            "skateboard",
            "hold",
            &["jump", "ride", "sit on"],
        ),
        (
            "skateboard_02",
            "skateboard",
            "ride",
            &["hold", "jump", "sit on"],
        ),
        (
            "chair_01",
            "chair",
            "sit on",
            &["hold", "lie on", "stand on"],
        ),
        (
            "chair_02",
            "chair",
            "stand on",
            &["hold", "lie on", "sit on"],
        ),
        (
            "surfboard_01",
            "surfboard",
            "hold",
            &["jump", "ride", "sit on"],
        ),
        (
            "snowboard_01",
            "snowboard",
            "carry",
            &["hold", "jump", "ride"],
        ),
        ("book_01", "book", "hold", &["carry"]),
        ("book_02", "book", "carry", &["hold"]),
        ("table_01", "dining table", "clean", &["eat at", "sit at"]),
    ];
    BenchmarkManifest {
        schema_version: 1,
        name: "interaction-editing-benchmark".into(),
        candidate_interactions: candidates
            .iter()
            .map(|(obj, list)| {
                (
                    obj.to_string(),
                    list.iter().map(|s| s.to_string()).collect(),
                )
            })
            .collect(),
        instances: sources
            .iter()
            .map(|(id, object, source, targets)| BenchmarkInstance {
                id: id.to_string(),
                source_image: format!("scenes/{id}"),
                masks: format!("scenes/{id}"),
                subject_label: "person".into(),
                source_interaction: source.to_string(),
                object_label: object.to_string(),
                target_interactions: targets.iter().map(|s| s.to_string()).collect(),
            })
            .collect(),
    }
}

// ---------------------------------------------------------------------------
// benchmark runner + report
// ---------------------------------------------------------------------------

/// Anything that can produce an edited image for an instance.
pub trait BenchEditor {
    fn edit(
        &self,
        instance: &BenchmarkInstance,
        bundle: &SceneBundle,
        target_interaction: &str,
        seed: u64,
    ) -> Result<Image>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalCell {
    pub instance_id: String,
    pub target_interaction: String,
    pub seed: u64,
    pub editability: f64,
    pub identity_consistency: f64,
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvalidInstanceRecord {
    pub id: String,
    pub reason: String,
}

/// Per-cell scores plus aggregates. The aggregates always recompute exactly
/// from the cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub benchmark: String,
    pub config_hash: String,
    pub seeds_per_pair: u64,
    pub editability_mean: f64,
    pub identity_consistency_mean: f64,
    pub overall: f64,
    pub partial: bool,
    pub invalid_instances: Vec<InvalidInstanceRecord>,
    pub cells: Vec<EvalCell>,
}

impl EvalReport {
    pub fn recompute_aggregates(cells: &[EvalCell]) -> (f64, f64, f64) {
        if cells.is_empty() {
            return (0.0, 0.0, 0.0);
        }
        let n = cells.len() as f64;
        let e = cells.iter().map(|c| c.editability).sum::<f64>() / n;
        let ic = cells.iter().map(|c| c.identity_consistency).sum::<f64>() / n;
        (e, ic, overall(e, ic))
    }

    pub fn to_json_bytes(&self) -> Vec<u8> {
        let mut bytes = serde_json::to_vec_pretty(self).expect("report serializes");
        bytes.push(b'\n');
        bytes
    }

    pub fn from_json_bytes(bytes: &[u8]) -> Result<Self> {
        let report: EvalReport = serde_json::from_slice(bytes)?;
        if report.schema_version != 1 {
            return Err(Error::Config(format!(
                "unsupported report schema {}",
                report.schema_version
            )));
        }
        let (e, ic, o) = Self::recompute_aggregates(&report.cells);
        if e != report.editability_mean
            || ic != report.identity_consistency_mean
            || o != report.overall
        {
            return Err(Error::Config(
                "report aggregates do not recompute from the cells".into(),
            ));
        }
        Ok(report)
    }

    /// One CSV row per method label, mirroring the benchmark table columns.
    pub fn to_csv_row(&self, method: &str) -> String {
        format!(
            "{method},{:.4},{:.4},{:.4}\n",
            self.overall, self.editability_mean, self.identity_consistency_mean
        )
    }

    pub const CSV_HEADER: &'static str = "method,overall,hoi_editability,identity_consistency\n";
}

/// Run the benchmark: for every (instance, target interaction, seed), edit
/// and score. Invalid instances are recorded and excluded; `partial` flags a
/// run with any exclusions.
pub fn run_benchmark(
    manifest: &BenchmarkManifest,
    root: &Path,
    editor: &dyn BenchEditor,
    provider: &dyn BackendProvider,
    seeds_per_pair: u64,
    conf_threshold: f64,
    config_hash: &str,
) -> Result<EvalReport> {
    manifest.validate()?;
    let mut cells = Vec::new();
    let mut invalid = Vec::new();
    for instance in &manifest.instances {
        let bundle_dir = root.join(&instance.source_image);
        let outcome = score_instance(
            instance,
            &bundle_dir,
            editor,
            provider,
            seeds_per_pair,
            conf_threshold,
            config_hash,
        );
        match outcome {
            Ok(mut instance_cells) => cells.append(&mut instance_cells),
            Err(err) => invalid.push(InvalidInstanceRecord {
                id: instance.id.clone(),
                reason: err.to_string(),
            }),
        }
    }
    let (e, ic, o) = EvalReport::recompute_aggregates(&cells);
    Ok(EvalReport {
        schema_version: 1,
        benchmark: manifest.name.clone(),
        config_hash: config_hash.to_string(),
        seeds_per_pair,
        editability_mean: e,
        identity_consistency_mean: ic,
        overall: o,
        partial: !invalid.is_empty(),
        invalid_instances: invalid,
        cells,
    })
}

fn score_instance(
    instance: &BenchmarkInstance,
    bundle_dir: &Path,
    editor: &dyn BenchEditor,
    provider: &dyn BackendProvider,
    seeds_per_pair: u64,
    conf_threshold: f64,
    config_hash: &str,
) -> Result<Vec<EvalCell>> {
    let bundle = crate::scene::load_bundle(bundle_dir)?;
    let backends = provider.for_instance(&bundle.meta)?;
    // both entities must be detectable in the source, else the instance is
    // invalid
    for label in [&instance.subject_label, &instance.object_label] {
        if backends.object.locate(&bundle.image, label).is_none() {
            return Err(Error::InvalidInstance {
                id: instance.id.clone(),
                reason: format!("{label:?} not detected in the source image"),
            });
        }
    }
    let mut cells = Vec::new();
    for target in &instance.target_interactions {
        let target_triplet =
            HOITriplet::new(&instance.subject_label, target, &instance.object_label);
        for seed in 0..seeds_per_pair {
            let edited = editor.edit(instance, &bundle, target, seed)?;
            let detections = backends.hoi.detect(&edited);
            let editability = hoi_match(&detections, &target_triplet, conf_threshold);
            let ic = identity_consistency(
                &bundle.image,
                &edited,
                &instance.subject_label,
                &instance.object_label,
                &backends,
            )?;
            cells.push(EvalCell {
                instance_id: instance.id.clone(),
                target_interaction: target.clone(),
                seed,
                editability,
                identity_consistency: ic,
                config_hash: config_hash.to_string(),
            });
        }
    }
    Ok(cells)
}
