//! Procedurally generated interaction scenes, their on-disk bundle format,
//! and the color-blob analysis the mock perception backends build on.
//!
//! A scene is a colored "person" glyph and an object glyph arranged on a
//! textured background according to an interaction verb. The arrangement is
//! what the verbs mean in the toy world, so a detector can read the verb back
//! off the geometry.

use crate::error::{Error, Result};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Cursor;
use std::path::Path;

/// CHW image in [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub res: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn filled(res: usize, channels: usize, value: f64) -> Self {
        Image {
            res,
            channels,
            data: vec![value; channels * res * res],
        }
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let hw = self.res * self.res;
        [
            self.data[y * self.res + x],
            self.data[hw + y * self.res + x],
            self.data[2 * hw + y * self.res + x],
        ]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f64; 3]) {
        let hw = self.res * self.res;
        self.data[y * self.res + x] = rgb[0];
        self.data[hw + y * self.res + x] = rgb[1];
        self.data[2 * hw + y * self.res + x] = rgb[2];
    }
}

pub type Mask = Vec<u8>;

/// Interaction verbs of the toy world. Each verb is a distinct spatial
/// relation between subject and object.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interaction {
    Hold,
    Ride,
    Kick,
    Throw,
    Lift,
}

pub const INTERACTIONS: [Interaction; 5] = [
    Interaction::Hold,
    Interaction::Ride,
    Interaction::Kick,
    Interaction::Throw,
    Interaction::Lift,
];

impl Interaction {
    pub fn word(&self) -> &'static str {
        match self {
            Interaction::Hold => "hold",
            Interaction::Ride => "ride",
            Interaction::Kick => "kick",
            Interaction::Throw => "throw",
            Interaction::Lift => "lift",
        }
    }

    pub fn from_word(word: &str) -> Option<Self> {
        INTERACTIONS.iter().copied().find(|i| i.word() == word)
    }

    /// Canonical object offset from the subject center, in units of the
    /// image resolution.
    pub fn canonical_offset(&self) -> (f64, f64) {
        match self {
            Interaction::Hold => (0.22, -0.08),
            Interaction::Ride => (0.00, 0.30),
            Interaction::Kick => (0.30, 0.24),
            Interaction::Throw => (0.34, -0.30),
            Interaction::Lift => (0.00, -0.36),
        }
    }
}

/// Object archetypes, each with a distinct silhouette.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectKind {
    Ball,
    Board,
    Block,
    Ring,
}

pub const OBJECT_KINDS: [ObjectKind; 4] = [
    ObjectKind::Ball,
    ObjectKind::Board,
    ObjectKind::Block,
    ObjectKind::Ring,
];

impl ObjectKind {
    pub fn label(&self) -> &'static str {
        match self {
            ObjectKind::Ball => "ball",
            ObjectKind::Board => "board",
            ObjectKind::Block => "block",
            ObjectKind::Ring => "ring",
        }
    }

    pub fn from_label(label: &str) -> Option<Self> {
        OBJECT_KINDS.iter().copied().find(|o| o.label() == label)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackgroundKind {
    Field,
    Room,
    Court,
    Beach,
}

pub const BACKGROUND_KINDS: [BackgroundKind; 4] = [
    BackgroundKind::Field,
    BackgroundKind::Room,
    BackgroundKind::Court,
    BackgroundKind::Beach,
];

impl BackgroundKind {
    pub fn label(&self) -> &'static str {
        match self {
            BackgroundKind::Field => "field",
            BackgroundKind::Room => "room",
            BackgroundKind::Court => "court",
            BackgroundKind::Beach => "beach",
        }
    }

    pub fn base_color(&self) -> [f64; 3] {
        match self {
            BackgroundKind::Field => [-0.55, 0.25, -0.55],
            BackgroundKind::Room => [0.15, 0.05, -0.05],
            BackgroundKind::Court => [0.45, -0.05, -0.35],
            BackgroundKind::Beach => [0.65, 0.45, 0.05],
        }
    }
}

/// Named colors shared by scene generation and the pretraining captions.
pub const NAMED_COLORS: [(&str, [f64; 3]); 8] = [
    ("red", [0.90, -0.75, -0.75]),
    ("blue", [-0.70, -0.60, 0.90]),
    ("yellow", [0.90, 0.85, -0.70]),
    ("purple", [0.55, -0.65, 0.80]),
    ("orange", [0.95, 0.25, -0.70]),
    ("cyan", [-0.70, 0.80, 0.85]),
    ("magenta", [0.90, -0.60, 0.80]),
    ("white", [0.90, 0.90, 0.90]),
];

pub fn color_name(rgb: [f64; 3]) -> Option<&'static str> {
    NAMED_COLORS
        .iter()
        .find(|(_, c)| c.iter().zip(&rgb).all(|(a, b)| (a - b).abs() < 1e-9))
        .map(|(n, _)| *n)
}

/// Everything that determines how a scene is drawn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub subject_color: [f64; 3],
    pub object_kind: ObjectKind,
    pub object_color: [f64; 3],
    pub background_kind: BackgroundKind,
    pub interaction: Interaction,
    /// Subject center jitter in units of the resolution.
    pub jitter: (f64, f64),
}

impl SceneSpec {
    /// Sample a scene with distinct subject/object colors.
    pub fn sample(rng: &mut ChaCha8Rng) -> Self {
        let si = rng.random_range(0..NAMED_COLORS.len());
        let mut oi = rng.random_range(0..NAMED_COLORS.len());
        while oi == si {
            oi = rng.random_range(0..NAMED_COLORS.len());
        }
        SceneSpec {
            subject_color: NAMED_COLORS[si].1,
            object_kind: OBJECT_KINDS[rng.random_range(0..OBJECT_KINDS.len())],
            object_color: NAMED_COLORS[oi].1,
            background_kind: BACKGROUND_KINDS[rng.random_range(0..BACKGROUND_KINDS.len())],
            interaction: INTERACTIONS[rng.random_range(0..INTERACTIONS.len())],
            jitter: (rng.random_range(-0.03..0.03), rng.random_range(-0.03..0.03)),
        }
    }

    pub fn caption(&self) -> String {
        format!(
            "a photo of {} person {} {} {} at {}",
            color_name(self.subject_color).unwrap_or("red"),
            self.interaction.word(),
            color_name(self.object_color).unwrap_or("blue"),
            self.object_kind.label(),
            self.background_kind.label()
        )
    }
}

/// Labels and colors recorded with each generated bundle; the mock perception
/// backends key on these.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneMeta {
    pub schema_version: u32,
    pub subject_label: String,
    pub object_label: String,
    pub background_label: String,
    pub interaction: String,
    pub subject_color: [f64; 3],
    pub object_color: [f64; 3],
    pub background_color: [f64; 3],
}

impl SceneMeta {
    pub fn from_json_bytes(bytes: &[u8]) -> Result<Self> {
        let meta: SceneMeta = serde_json::from_slice(bytes)?;
        if meta.schema_version != 1 {
            return Err(Error::Config(format!(
                "unsupported scene meta schema {}",
                meta.schema_version
            )));
        }
        for c in [meta.subject_color, meta.object_color, meta.background_color] {
            if c.iter().any(|v| !v.is_finite()) {
                return Err(Error::Config("non-finite color in scene meta".into()));
            }
        }
        Ok(meta)
    }
}

/// A rendered scene: image, per-concept masks, and metadata.
#[derive(Debug, Clone)]
pub struct Scene {
    pub image: Image,
    pub subject_mask: Mask,
    pub object_mask: Mask,
    pub background_mask: Mask,
    pub meta: SceneMeta,
}

pub fn render_scene(spec: &SceneSpec, res: usize) -> Scene {
    let r = res as f64;
    let mut image = Image::filled(res, 3, 0.0);
    let mut subject_mask = vec![0u8; res * res];
    let mut object_mask = vec![0u8; res * res];

    // flat background: the kinds are told apart by color alone
    let bg = spec.background_kind.base_color();
    for y in 0..res {
        for x in 0..res {
            image.set_pixel(y, x, bg);
        }
    }

    let (dx, dy) = spec.interaction.canonical_offset();
    let sx = (0.40 + spec.jitter.0) * r;
    let sy = (0.52 + spec.jitter.1) * r;
    let ox = sx + dx * r;
    let oy = sy + dy * r;

    let draw_subject = |image: &mut Image, mask: &mut Mask| {
        let torso_w = 0.16 * r;
        let torso_h = 0.34 * r;
        let head_r = 0.085 * r;
        for y in 0..res {
            for x in 0..res {
                let fx = x as f64 + 0.5;
                let fy = y as f64 + 0.5;
                let in_torso = (fx - sx).abs() <= torso_w / 2.0 && (fy - sy).abs() <= torso_h / 2.0;
                let hx = sx;
                let hy = sy - torso_h / 2.0 - head_r * 0.8;
                let in_head = (fx - hx).powi(2) + (fy - hy).powi(2) <= head_r * head_r;
                if in_torso || in_head {
                    image.set_pixel(y, x, spec.subject_color);
                    mask[y * res + x] = 1;
                }
            }
        }
    };

    let draw_object = |image: &mut Image, mask: &mut Mask| {
        for y in 0..res {
            for x in 0..res {
                let fx = x as f64 + 0.5;
                let fy = y as f64 + 0.5;
                let inside = match spec.object_kind {
                    ObjectKind::Ball => {
                        let rad = 0.11 * r;
                        (fx - ox).powi(2) + (fy - oy).powi(2) <= rad * rad
                    }
                    ObjectKind::Board => {
                        (fx - ox).abs() <= 0.17 * r && (fy - oy).abs() <= 0.045 * r
                    }
                    ObjectKind::Block => {
                        (fx - ox).abs() <= 0.085 * r && (fy - oy).abs() <= 0.085 * r
                    }
                    ObjectKind::Ring => {
                        let d2 = (fx - ox).powi(2) + (fy - oy).powi(2);
                        let outer = 0.12 * r;
                        let inner = 0.055 * r;
                        d2 <= outer * outer && d2 >= inner * inner
                    }
                };
                if inside {
                    image.set_pixel(y, x, spec.object_color);
                    mask[y * res + x] = 1;
                }
            }
        }
    };

    // z-order: when the subject is on top of the object (ride), draw the
    // subject last; otherwise the object sits in front.
    if spec.interaction == Interaction::Ride {
        draw_object(&mut image, &mut object_mask);
        draw_subject(&mut image, &mut subject_mask);
        for i in 0..res * res {
            if subject_mask[i] == 1 {
                object_mask[i] = 0;
            }
        }
    } else {
        draw_subject(&mut image, &mut subject_mask);
        draw_object(&mut image, &mut object_mask);
        for i in 0..res * res {
            if object_mask[i] == 1 {
                subject_mask[i] = 0;
            }
        }
    }

    let background_mask: Mask = (0..res * res)
        .map(|i| u8::from(subject_mask[i] == 0 && object_mask[i] == 0))
        .collect();

    let meta = SceneMeta {
        schema_version: 1,
        subject_label: "person".into(),
        object_label: spec.object_kind.label().into(),
        background_label: spec.background_kind.label().into(),
        interaction: spec.interaction.word().into(),
        subject_color: spec.subject_color,
        object_color: spec.object_color,
        background_color: spec.background_kind.base_color(),
    };
    Scene {
        image,
        subject_mask,
        object_mask,
        background_mask,
        meta,
    }
}

// ---------------------------------------------------------------------------
// color-blob analysis (shared by the mock perception backends)
// ---------------------------------------------------------------------------

/// Soft color-matched blob statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct Blob {
    /// Weighted centroid (x, y) in pixels.
    pub centroid: (f64, f64),
    /// (x0, y0, x1, y1) inclusive bounds of matched pixels.
    pub bbox: (usize, usize, usize, usize),
    /// Total match weight.
    pub mass: f64,
    /// Number of pixels above the match threshold.
    pub pixels: usize,
}

/// Find the soft blob of pixels near `color`. Returns None when fewer than
/// `min_pixels` pixels match within the tolerance.
pub fn find_color_blob(
    image: &Image,
    color: [f64; 3],
    tol: f64,
    min_pixels: usize,
) -> Option<Blob> {
    let res = image.res;
    let mut mass = 0.0;
    let mut cx = 0.0;
    let mut cy = 0.0;
    let mut pixels = 0usize;
    let mut bbox = (usize::MAX, usize::MAX, 0usize, 0usize);
    for y in 0..res {
        for x in 0..res {
            let p = image.pixel(y, x);
            let dist =
                ((p[0] - color[0]).powi(2) + (p[1] - color[1]).powi(2) + (p[2] - color[2]).powi(2))
                    .sqrt();
            if dist < tol {
                let w = tol - dist;
                mass += w;
                cx += w * (x as f64 + 0.5);
                cy += w * (y as f64 + 0.5);
                pixels += 1;
                bbox.0 = bbox.0.min(x);
                bbox.1 = bbox.1.min(y);
                bbox.2 = bbox.2.max(x);
                bbox.3 = bbox.3.max(y);
            }
        }
    }
    if pixels < min_pixels || mass <= 0.0 {
        return None;
    }
    Some(Blob {
        centroid: (cx / mass, cy / mass),
        bbox,
        mass,
        pixels,
    })
}

/// Classify the interaction from the object-minus-subject displacement,
/// normalized by resolution: nearest canonical offset wins.
pub fn classify_relation(subject: (f64, f64), object: (f64, f64), res: usize) -> Interaction {
    let r = res as f64;
    let d = ((object.0 - subject.0) / r, (object.1 - subject.1) / r);
    let mut best = Interaction::Hold;
    let mut best_dist = f64::INFINITY;
    for verb in INTERACTIONS {
        let (cx, cy) = verb.canonical_offset();
        let dist = (d.0 - cx).powi(2) + (d.1 - cy).powi(2);
        if dist < best_dist {
            best_dist = dist;
            best = verb;
        }
    }
    best
}

// ---------------------------------------------------------------------------
// PNG + bundle IO
// ---------------------------------------------------------------------------

const MAX_PNG_DIM: u32 = 4096;

pub fn encode_rgb_png(image: &Image) -> Result<Vec<u8>> {
    let res = image.res as u32;
    let mut bytes = Vec::with_capacity(image.res * image.res * 3);
    for y in 0..image.res {
        for x in 0..image.res {
            for c in image.pixel(y, x) {
                bytes.push(unit_to_u8(c));
            }
        }
    }
    let mut out = Vec::new();
    {
        let mut encoder = png::Encoder::new(Cursor::new(&mut out), res, res);
        encoder.set_color(png::ColorType::Rgb);
        encoder.set_depth(png::BitDepth::Eight);
        let mut writer = encoder
            .write_header()
            .map_err(|e| Error::Png(e.to_string()))?;
        writer
            .write_image_data(&bytes)
            .map_err(|e| Error::Png(e.to_string()))?;
    }
    Ok(out)
}

pub fn decode_rgb_png(bytes: &[u8]) -> Result<Image> {
    let decoder = png::Decoder::new(Cursor::new(bytes));
    let mut reader = decoder.read_info().map_err(|e| Error::Png(e.to_string()))?;
    let info = reader.info();
    if info.width != info.height || info.width == 0 || info.width > MAX_PNG_DIM {
        return Err(Error::Png(format!(
            "expected small square image, got {}x{}",
            info.width, info.height
        )));
    }
    let mut buf = vec![0u8; reader.output_buffer_size().unwrap_or(0)];
    let frame = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::Png(e.to_string()))?;
    let res = frame.width as usize;
    if frame.color_type != png::ColorType::Rgb || frame.bit_depth != png::BitDepth::Eight {
        return Err(Error::Png(format!(
            "expected 8-bit RGB, got {:?}/{:?}",
            frame.color_type, frame.bit_depth
        )));
    }
    let mut image = Image::filled(res, 3, 0.0);
    for y in 0..res {
        for x in 0..res {
            let o = (y * res + x) * 3;
            image.set_pixel(
                y,
                x,
                [
                    u8_to_unit(buf[o]),
                    u8_to_unit(buf[o + 1]),
                    u8_to_unit(buf[o + 2]),
                ],
            );
        }
    }
    Ok(image)
}

pub fn encode_mask_png(mask: &[u8], res: usize) -> Result<Vec<u8>> {
    assert_eq!(mask.len(), res * res);
    let bytes: Vec<u8> = mask.iter().map(|&m| if m > 0 { 255 } else { 0 }).collect();
    let mut out = Vec::new();
    {
        let mut encoder = png::Encoder::new(Cursor::new(&mut out), res as u32, res as u32);
        encoder.set_color(png::ColorType::Grayscale);
        encoder.set_depth(png::BitDepth::Eight);
        let mut writer = encoder
            .write_header()
            .map_err(|e| Error::Png(e.to_string()))?;
        writer
            .write_image_data(&bytes)
            .map_err(|e| Error::Png(e.to_string()))?;
    }
    Ok(out)
}

pub fn decode_mask_png(bytes: &[u8]) -> Result<(Mask, usize)> {
    let decoder = png::Decoder::new(Cursor::new(bytes));
    let mut reader = decoder.read_info().map_err(|e| Error::Png(e.to_string()))?;
    let info = reader.info();
    if info.width != info.height || info.width == 0 || info.width > MAX_PNG_DIM {
        return Err(Error::Png(format!(
            "expected small square mask, got {}x{}",
            info.width, info.height
        )));
    }
    let mut buf = vec![0u8; reader.output_buffer_size().unwrap_or(0)];
    let frame = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::Png(e.to_string()))?;
    if frame.color_type != png::ColorType::Grayscale || frame.bit_depth != png::BitDepth::Eight {
        return Err(Error::Png(format!(
            "expected 8-bit grayscale mask, got {:?}/{:?}",
            frame.color_type, frame.bit_depth
        )));
    }
    let res = frame.width as usize;
    let mask = buf[..res * res]
        .iter()
        .map(|&b| u8::from(b >= 128))
        .collect();
    Ok((mask, res))
}

fn unit_to_u8(v: f64) -> u8 {
    (((v.clamp(-1.0, 1.0) + 1.0) / 2.0) * 255.0).round() as u8
}

fn u8_to_unit(b: u8) -> f64 {
    (b as f64 / 255.0) * 2.0 - 1.0
}

/// A scene bundle loaded from disk.
#[derive(Debug, Clone)]
pub struct SceneBundle {
    pub image: Image,
    pub masks: BTreeMap<String, Mask>,
    pub meta: SceneMeta,
}

pub const BUNDLE_FILES: [&str; 5] = [
    "image.png",
    "mask_subject.png",
    "mask_object.png",
    "mask_background.png",
    "meta.json",
];

pub fn save_bundle(dir: &Path, scene: &Scene) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let res = scene.image.res;
    let write = |name: &str, bytes: Vec<u8>| -> Result<()> {
        let path = dir.join(name);
        std::fs::write(&path, bytes).map_err(|e| Error::io(path.display().to_string(), e))
    };
    write("image.png", encode_rgb_png(&scene.image)?)?;
    write(
        "mask_subject.png",
        encode_mask_png(&scene.subject_mask, res)?,
    )?;
    write("mask_object.png", encode_mask_png(&scene.object_mask, res)?)?;
    write(
        "mask_background.png",
        encode_mask_png(&scene.background_mask, res)?,
    )?;
    write("meta.json", serde_json::to_vec_pretty(&scene.meta)?)?;
    Ok(())
}

pub fn load_bundle(dir: &Path) -> Result<SceneBundle> {
    let read = |name: &str| -> Result<Vec<u8>> {
        let path = dir.join(name);
        std::fs::read(&path).map_err(|_| {
            Error::Config(format!(
                "scene bundle {} is missing expected file {name}",
                dir.display()
            ))
        })
    };
    let image = decode_rgb_png(&read("image.png")?)?;
    let mut masks = BTreeMap::new();
    for (key, file) in [
        ("subject", "mask_subject.png"),
        ("object", "mask_object.png"),
        ("background", "mask_background.png"),
    ] {
        let (mask, res) = decode_mask_png(&read(file)?)?;
        if res != image.res {
            return Err(Error::Config(format!(
                "{file} resolution {res} does not match image {}",
                image.res
            )));
        }
        masks.insert(key.to_string(), mask);
    }
    let meta = SceneMeta::from_json_bytes(&read("meta.json")?)?;
    Ok(SceneBundle { image, masks, meta })
}
