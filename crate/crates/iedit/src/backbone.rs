//! The toy text-conditioned denoiser: a small encoder-decoder with self- and
//! cross-attention at two resolutions, plus the text embedding table that
//! hosts learnable concept tokens.
//!
//! The network predicts the noise in a latent given a timestep and a prompt
//! conditioning matrix. Attention projections can carry adapters; everything
//! else is part of the frozen base once pretraining finishes.

use crate::archive::{sha256_hex, TensorArchive, KIND_BASE};
use crate::attention_lora::{
    attention_on_tape, effective_weight_on_tape, AdapterVars, FreezePolicy, ProjKind,
};
use crate::autograd::{Grads, Tape, Var};
use crate::config::{DenoiserConfig, RunConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::rng;
use crate::vocab;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Dense f64 tensor with a shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }
}

/// Named parameter buffers in a stable registration order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<(String, Tensor)>,
    index: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn insert(&mut self, name: &str, tensor: Tensor) {
        assert!(!self.index.contains_key(name), "duplicate parameter {name}");
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push((name.to_string(), tensor));
    }

    pub fn get(&self, name: &str) -> &Tensor {
        let i = self.index[name];
        &self.entries[i].1
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        let i = self.index[name];
        &mut self.entries[i].1
    }

    pub fn try_get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn total_len(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.data.len()).sum()
    }
}

/// Role of a concept clue inside prompts and artifacts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConceptRole {
    Subject,
    Object,
    Background,
    /// Single fused concept under the no-disassembly ablation.
    Merged,
}

impl ConceptRole {
    pub fn marker(&self) -> &'static str {
        match self {
            ConceptRole::Subject => "<s*>",
            ConceptRole::Object => "<o*>",
            ConceptRole::Background => "<bg*>",
            ConceptRole::Merged => "<c*>",
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ConceptRole::Subject => "subject",
            ConceptRole::Object => "object",
            ConceptRole::Background => "background",
            ConceptRole::Merged => "merged",
        }
    }
}

/// A learnable concept: token id in the reserved range, live embedding, and
/// the binary spatial mask that grounds it in the source image.
#[derive(Debug, Clone, PartialEq)]
pub struct ConceptClue {
    pub role: ConceptRole,
    /// Scene label the concept stands for (e.g. "person", "ball").
    pub label: String,
    pub token_id: usize,
    pub embedding: Vec<f64>,
    /// Row-major binary mask at image resolution.
    pub mask: Vec<u8>,
}

impl ConceptClue {
    pub fn validate(&self, cfg: &DenoiserConfig) -> Result<()> {
        if !vocab::is_concept_id(self.token_id) {
            return Err(Error::Config(format!(
                "concept token id {} outside reserved range",
                self.token_id
            )));
        }
        if self.embedding.len() != cfg.d_text {
            return Err(Error::Config(format!(
                "concept embedding dim {} != d_text {}",
                self.embedding.len(),
                cfg.d_text
            )));
        }
        if self.mask.len() != cfg.img_res * cfg.img_res {
            return Err(Error::Config("concept mask resolution mismatch".into()));
        }
        if self.mask.iter().any(|&m| m > 1) {
            return Err(Error::Config("concept mask must be binary".into()));
        }
        if !self.mask.contains(&1) {
            return Err(Error::DegenerateMask);
        }
        Ok(())
    }
}

/// A tokenized prompt with the positions of any concept markers.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptSequence {
    pub tokens: Vec<usize>,
    pub concept_positions: BTreeMap<ConceptRole, usize>,
    pub text: String,
}

impl PromptSequence {
    /// Tokenize `text`, recording the position of each concept marker.
    pub fn parse(text: &str) -> Result<Self> {
        let tokens = vocab::tokenize(text)?;
        let mut concept_positions = BTreeMap::new();
        for (pos, &id) in tokens.iter().enumerate() {
            let Some(word) = vocab::word_of(id) else {
                continue;
            };
            let role = match word {
                "<s*>" => Some(ConceptRole::Subject),
                "<o*>" => Some(ConceptRole::Object),
                "<bg*>" => Some(ConceptRole::Background),
                "<c*>" => Some(ConceptRole::Merged),
                _ => None,
            };
            if let Some(role) = role {
                if concept_positions.insert(role, pos).is_some() {
                    return Err(Error::Config(format!(
                        "concept marker {word} appears more than once"
                    )));
                }
            }
        }
        Ok(PromptSequence {
            tokens,
            concept_positions,
            text: text.to_string(),
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Attention block names in network order: encoder, two middle blocks at the
/// map resolution, decoder.
pub const ATTN_BLOCKS: [&str; 4] = ["attn.enc", "attn.mid0", "attn.mid1", "attn.dec"];

/// Bump when the parameter layout changes shape without a config change.
pub const ARCH_VERSION: u32 = 2;

/// Resolution at which a named attention block operates.
pub fn block_res(cfg: &DenoiserConfig, block: &str) -> usize {
    match block {
        "attn.enc" | "attn.dec" => cfg.img_res / 2,
        "attn.mid0" | "attn.mid1" => cfg.img_res / 4,
        other => panic!("unknown attention block {other}"),
    }
}

/// Channel width of a named attention block: the coarsest level runs at
/// twice the base width.
pub fn block_width(cfg: &DenoiserConfig, block: &str) -> usize {
    match block {
        "attn.enc" | "attn.dec" => cfg.base_width,
        "attn.mid0" | "attn.mid1" => 2 * cfg.base_width,
        other => panic!("unknown attention block {other}"),
    }
}

const RES_BLOCKS: [&str; 3] = ["res.enc", "res.mid", "res.dec"];

/// `(name, shape, init_std)` for every base parameter. `init_std == 0` means
/// zero init (biases).
fn param_layout(cfg: &DenoiserConfig) -> Vec<(String, Vec<usize>, f64)> {
    let c = cfg.base_width;
    let ch_in = cfg.latent_channels;
    let dt = cfg.d_text;
    let vocab_rows = cfg.vocab_size + cfg.reserved_concept_slots;
    let mut out: Vec<(String, Vec<usize>, f64)> = Vec::new();
    let conv_std = |cin: usize| 1.0 / ((cin * 9) as f64).sqrt();
    let lin_std = |cin: usize| 1.0 / (cin as f64).sqrt();

    out.push(("text.table".into(), vec![vocab_rows, dt], lin_std(dt)));
    out.push(("time.w1".into(), vec![c, c], lin_std(c)));
    out.push(("time.b1".into(), vec![c], 0.0));
    out.push(("time.w2".into(), vec![c, c], lin_std(c)));
    out.push(("time.b2".into(), vec![c], 0.0));
    // the stem sees the latent plus two fixed coordinate planes
    out.push((
        "stem.w".into(),
        vec![c, (ch_in + 2) * 9],
        conv_std(ch_in + 2),
    ));
    out.push(("stem.b".into(), vec![c], 0.0));
    // the coarsest level runs at twice the base width
    let cm = 2 * c;
    out.push(("down1.w".into(), vec![c, c * 9], conv_std(c)));
    out.push(("down1.b".into(), vec![c], 0.0));
    out.push(("down2.w".into(), vec![cm, c * 9], conv_std(c)));
    out.push(("down2.b".into(), vec![cm], 0.0));
    for name in RES_BLOCKS {
        let w = if name == "res.mid" { cm } else { c };
        out.push((format!("{name}.conv1.w"), vec![w, w * 9], conv_std(w)));
        out.push((format!("{name}.conv1.b"), vec![w], 0.0));
        // the second conv starts small so residual blocks begin near identity
        out.push((format!("{name}.conv2.w"), vec![w, w * 9], conv_std(w) * 0.1));
        out.push((format!("{name}.conv2.b"), vec![w], 0.0));
        out.push((format!("{name}.time.w"), vec![w, c], lin_std(c)));
        out.push((format!("{name}.time.b"), vec![w], 0.0));
    }
    for block in ATTN_BLOCKS {
        let w = if block.starts_with("attn.mid") { cm } else { c };
        for kind in ["self", "cross"] {
            let d_in = if kind == "self" { w } else { dt };
            out.push((format!("{block}.{kind}.q.w"), vec![w, w], lin_std(w)));
            out.push((format!("{block}.{kind}.k.w"), vec![w, d_in], lin_std(d_in)));
            out.push((format!("{block}.{kind}.v.w"), vec![w, d_in], lin_std(d_in)));
            out.push((format!("{block}.{kind}.o.w"), vec![w, w], lin_std(w) * 0.1));
        }
    }
    out.push(("up1.w".into(), vec![c, (cm + c) * 9], conv_std(cm + c)));
    out.push(("up1.b".into(), vec![c], 0.0));
    out.push((
        "head.w".into(),
        vec![ch_in, 2 * c * 9],
        conv_std(2 * c) * 0.1,
    ));
    out.push(("head.b".into(), vec![ch_in], 0.0));
    out
}

/// The toy denoiser: config plus base parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Denoiser {
    pub config: DenoiserConfig,
    pub params: ParamStore,
}

impl Denoiser {
    pub fn new_random(config: &DenoiserConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::default();
        for (i, (name, shape, std)) in param_layout(config).into_iter().enumerate() {
            let n: usize = shape.iter().product();
            let data = if std == 0.0 {
                vec![0.0; n]
            } else {
                rng::normal_vec(seed, "base_init", i as u64, n)
                    .into_iter()
                    .map(|x| x * std)
                    .collect()
            };
            params.insert(&name, Tensor { shape, data });
        }
        Ok(Denoiser {
            config: config.clone(),
            params,
        })
    }

    /// Bind every base parameter onto a tape.
    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> BoundBase {
        let mut vars = BTreeMap::new();
        for (name, tensor) in self.params.iter() {
            let v = tape.leaf(tensor.data.clone(), tensor.shape.clone(), requires_grad);
            vars.insert(name.to_string(), v);
        }
        BoundBase { vars }
    }
}

/// Base parameters bound to a tape for one forward/backward pass.
pub struct BoundBase {
    pub vars: BTreeMap<String, Var>,
}

impl BoundBase {
    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("unbound parameter {name}"))
    }
}

/// Adapter parameters for one projection.
#[derive(Debug, Clone, PartialEq)]
pub enum AdapterParams {
    LowRank { a: Tensor, b: Tensor, rank: usize },
    Dense { delta: Tensor },
}

/// One adapted projection: `layer_path` like `attn.enc.self`, plus the
/// projection kind.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterEntry {
    pub layer_path: String,
    pub proj: ProjKind,
    pub params: AdapterParams,
}

impl AdapterEntry {
    pub fn key(&self) -> String {
        format!("{}.{}", self.layer_path, proj_letter(self.proj))
    }
}

pub fn proj_letter(p: ProjKind) -> &'static str {
    match p {
        ProjKind::Q => "q",
        ProjKind::K => "k",
        ProjKind::V => "v",
    }
}

/// All adapters of a fine-tuned model (the weight half of the inversion
/// clues). Entries are kept in a deterministic order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdapterSet {
    pub entries: Vec<AdapterEntry>,
}

impl AdapterSet {
    /// Create adapters for every projection the policy trains. LoRA factors
    /// start as A ~ N(0, 0.01), B = 0; dense deltas start at zero, so the
    /// forward pass is exactly the base model before training.
    pub fn init(cfg: &DenoiserConfig, train: &TrainConfig, seed: u64) -> Result<Self> {
        let policy: FreezePolicy = train.effective_policy();
        let mut entries = Vec::new();
        let mut counter = 0u64;
        for block in ATTN_BLOCKS {
            let w = block_width(cfg, block);
            for kind in ["self", "cross"] {
                let d_in = if kind == "self" { w } else { cfg.d_text };
                let pp = if kind == "self" {
                    policy.self_attn
                } else {
                    policy.cross_attn
                };
                for proj in [ProjKind::Q, ProjKind::K, ProjKind::V] {
                    if !pp.trains(proj) {
                        continue;
                    }
                    let layer_path = format!("{block}.{kind}");
                    let params = if train.ablation.lora {
                        let rank = match proj {
                            ProjKind::V => train.rank_v,
                            _ => train.rank_k,
                        };
                        if rank > w.min(d_in) {
                            return Err(Error::Config(format!(
                                "rank {rank} exceeds min dim of {w}x{d_in} projection"
                            )));
                        }
                        let a_data: Vec<f64> =
                            rng::normal_vec(seed, "lora_a_init", counter, w * rank)
                                .into_iter()
                                .map(|x| x * 0.01)
                                .collect();
                        counter += 1;
                        AdapterParams::LowRank {
                            a: Tensor {
                                shape: vec![w, rank],
                                data: a_data,
                            },
                            b: Tensor::zeros(vec![d_in, rank]),
                            rank,
                        }
                    } else {
                        AdapterParams::Dense {
                            delta: Tensor::zeros(vec![w, d_in]),
                        }
                    };
                    entries.push(AdapterEntry {
                        layer_path,
                        proj,
                        params,
                    });
                }
            }
        }
        Ok(AdapterSet { entries })
    }

    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> BoundAdapters {
        let mut map = BTreeMap::new();
        let mut factors = Vec::new();
        for entry in &self.entries {
            let key = entry.key();
            let vars = match &entry.params {
                AdapterParams::LowRank { a, b, .. } => {
                    let va = tape.leaf(a.data.clone(), a.shape.clone(), requires_grad);
                    let vb = tape.leaf(b.data.clone(), b.shape.clone(), requires_grad);
                    factors.push((format!("{key}.lora_A"), va));
                    factors.push((format!("{key}.lora_B"), vb));
                    AdapterVars::LowRank { a: va, b: vb }
                }
                AdapterParams::Dense { delta } => {
                    let vd = tape.leaf(delta.data.clone(), delta.shape.clone(), requires_grad);
                    factors.push((format!("{key}.delta"), vd));
                    AdapterVars::Dense { delta: vd }
                }
            };
            map.insert(key, vars);
        }
        BoundAdapters { map, factors }
    }

    /// Write updated factor values back from optimized buffers, in the same
    /// order `bind` produced them.
    pub fn factor_buffers_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for entry in &mut self.entries {
            let key = format!("{}.{}", entry.layer_path, proj_letter(entry.proj));
            match &mut entry.params {
                AdapterParams::LowRank { a, b, .. } => {
                    out.push((format!("{key}.lora_A"), &mut *a));
                    out.push((format!("{key}.lora_B"), &mut *b));
                }
                AdapterParams::Dense { delta } => {
                    out.push((format!("{key}.delta"), &mut *delta));
                }
            }
        }
        out
    }

    /// Total trainable scalar count.
    pub fn param_count(&self) -> usize {
        self.entries
            .iter()
            .map(|e| match &e.params {
                AdapterParams::LowRank { a, b, .. } => a.data.len() + b.data.len(),
                AdapterParams::Dense { delta } => delta.data.len(),
            })
            .sum()
    }
}

/// Adapters bound to a tape: lookup by `layer_path.proj` plus the flat factor
/// list in binding order.
pub struct BoundAdapters {
    map: BTreeMap<String, AdapterVars>,
    pub factors: Vec<(String, Var)>,
}

impl BoundAdapters {
    pub fn get(&self, layer_path: &str, proj: ProjKind) -> Option<AdapterVars> {
        self.map
            .get(&format!("{layer_path}.{}", proj_letter(proj)))
            .copied()
    }
}

/// Two fixed coordinate planes in [-1, 1], row-major (x plane then y plane).
pub fn coordinate_planes(res: usize) -> Vec<f64> {
    let mut out = vec![0.0; 2 * res * res];
    for y in 0..res {
        for x in 0..res {
            out[y * res + x] = 2.0 * (x as f64 + 0.5) / res as f64 - 1.0;
            out[res * res + y * res + x] = 2.0 * (y as f64 + 0.5) / res as f64 - 1.0;
        }
    }
    out
}

/// Sinusoidal timestep features of dimension `dim` (even).
pub fn timestep_embedding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        let angle = t as f64 * freq;
        out[2 * i] = angle.sin();
        out[2 * i + 1] = angle.cos();
    }
    out
}

/// Cross-attention probabilities captured during a forward pass.
pub struct CrossCapture {
    pub block: &'static str,
    pub res: usize,
    /// One `[res² × seq_len]` softmax matrix per head.
    pub head_probs: Vec<Var>,
}

pub struct ForwardOutput {
    pub eps: Var,
    pub captures: Vec<CrossCapture>,
}

/// Encode a prompt into a conditioning matrix on the tape. Plain tokens are
/// rows of the frozen table; concept positions read the live concept
/// embedding vars, so concept gradients flow and re-encoding after a
/// mutation sees the new value.
pub fn encode_prompt(
    tape: &mut Tape,
    table: Var,
    seq: &PromptSequence,
    concepts: &BTreeMap<ConceptRole, Var>,
) -> Result<Var> {
    if seq.is_empty() {
        return Err(Error::Config("empty prompt".into()));
    }
    for role in seq.concept_positions.keys() {
        if !concepts.contains_key(role) {
            return Err(Error::UnknownConcept(role.name().to_string()));
        }
    }
    let pos_to_role: BTreeMap<usize, ConceptRole> = seq
        .concept_positions
        .iter()
        .map(|(r, p)| (*p, *r))
        .collect();
    let vocab_rows = tape.shape(table)[0];
    let mut rows = Vec::with_capacity(seq.len());
    for (pos, &token) in seq.tokens.iter().enumerate() {
        if let Some(role) = pos_to_role.get(&pos) {
            rows.push(concepts[role]);
        } else {
            if token >= vocab_rows {
                return Err(Error::Config(format!(
                    "token id {token} outside embedding table ({vocab_rows} rows)"
                )));
            }
            rows.push(tape.gather_rows(table, &[token]));
        }
    }
    Ok(tape.stack_rows(&rows))
}

/// Full denoiser forward pass on the tape.
///
/// `z_t` is a `[latent_channels, img_res, img_res]` var, `cond` a
/// `[seq_len × d_text]` conditioning matrix. Captures hold the cross-attention
/// probabilities of every block when `capture` is set.
#[allow(clippy::too_many_arguments)]
pub fn forward(
    tape: &mut Tape,
    cfg: &DenoiserConfig,
    base: &BoundBase,
    adapters: Option<&BoundAdapters>,
    z_t: Var,
    t: usize,
    cond: Var,
    capture: bool,
) -> Result<ForwardOutput> {
    let c = cfg.base_width;

    // timestep features -> small MLP
    let temb = tape.leaf(timestep_embedding(t, c), vec![c], false);
    let t1 = linear(tape, base.var("time.w1"), base.var("time.b1"), temb);
    let t1s = tape.silu(t1);
    let tfeat = linear(tape, base.var("time.w2"), base.var("time.b2"), t1s);

    // fixed coordinate planes give attention and convs a position signal
    let coords = tape.leaf(
        coordinate_planes(cfg.img_res),
        vec![2, cfg.img_res, cfg.img_res],
        false,
    );
    let stem_in = tape.concat_channels(z_t, coords);
    let x0 = tape.conv2d(stem_in, base.var("stem.w"), base.var("stem.b"), 1);
    let d1 = tape.conv2d(x0, base.var("down1.w"), base.var("down1.b"), 2);
    let r1 = resblock(tape, base, "res.enc", d1, tfeat);

    let mut captures = Vec::new();
    let a1 = attn_block(
        tape,
        cfg,
        base,
        adapters,
        "attn.enc",
        r1,
        cond,
        capture,
        &mut captures,
    )?;
    let d2 = tape.conv2d(a1, base.var("down2.w"), base.var("down2.b"), 2);
    let r2 = resblock(tape, base, "res.mid", d2, tfeat);
    let m0 = attn_block(
        tape,
        cfg,
        base,
        adapters,
        "attn.mid0",
        r2,
        cond,
        capture,
        &mut captures,
    )?;
    let m1 = attn_block(
        tape,
        cfg,
        base,
        adapters,
        "attn.mid1",
        m0,
        cond,
        capture,
        &mut captures,
    )?;
    let u1raw = tape.upsample_nearest2(m1);
    let cat1 = tape.concat_channels(u1raw, a1);
    let u1 = tape.conv2d(cat1, base.var("up1.w"), base.var("up1.b"), 1);
    let a2 = attn_block(
        tape,
        cfg,
        base,
        adapters,
        "attn.dec",
        u1,
        cond,
        capture,
        &mut captures,
    )?;
    let r3 = resblock(tape, base, "res.dec", a2, tfeat);
    let u2raw = tape.upsample_nearest2(r3);
    let cat2 = tape.concat_channels(u2raw, x0);
    let eps = tape.conv2d(cat2, base.var("head.w"), base.var("head.b"), 1);
    debug_assert_eq!(
        tape.shape(eps),
        &[cfg.latent_channels, cfg.img_res, cfg.img_res]
    );
    Ok(ForwardOutput { eps, captures })
}

fn linear(tape: &mut Tape, w: Var, b: Var, x: Var) -> Var {
    // x: [d_in] treated as a row; returns [d_out]
    let xt = tape.transpose(x);
    let wx = tape.matmul(w, xt);
    let d_out = tape.shape(wx)[0];
    let flat = tape.reshape(wx, vec![d_out]);
    tape.add(flat, b)
}

fn resblock(tape: &mut Tape, base: &BoundBase, name: &str, x: Var, tfeat: Var) -> Var {
    let h1 = tape.conv2d(
        x,
        base.var(&format!("{name}.conv1.w")),
        base.var(&format!("{name}.conv1.b")),
        1,
    );
    let tb = linear(
        tape,
        base.var(&format!("{name}.time.w")),
        base.var(&format!("{name}.time.b")),
        tfeat,
    );
    let h2 = tape.add_channel_bias(h1, tb);
    let h3 = tape.silu(h2);
    let h4 = tape.conv2d(
        h3,
        base.var(&format!("{name}.conv2.w")),
        base.var(&format!("{name}.conv2.b")),
        1,
    );
    tape.add(x, h4)
}

fn proj(
    tape: &mut Tape,
    base: &BoundBase,
    adapters: Option<&BoundAdapters>,
    layer_path: &str,
    kind: ProjKind,
    input: Var,
) -> Var {
    let w_base = base.var(&format!("{layer_path}.{}.w", proj_letter(kind)));
    let adapter = adapters.and_then(|a| a.get(layer_path, kind));
    let w_eff = effective_weight_on_tape(tape, w_base, adapter);
    let wt = tape.transpose(w_eff);
    tape.matmul(input, wt)
}

#[allow(clippy::too_many_arguments)]
fn attn_block(
    tape: &mut Tape,
    cfg: &DenoiserConfig,
    base: &BoundBase,
    adapters: Option<&BoundAdapters>,
    block: &'static str,
    x: Var,
    cond: Var,
    capture: bool,
    captures: &mut Vec<CrossCapture>,
) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let flat = tape.reshape(x, vec![c, h * w]);
    let tokens = tape.transpose(flat); // [hw × c]

    // self-attention with residual
    let self_path = format!("{block}.self");
    let n1 = tape.rms_norm_rows(tokens, 1e-6);
    let q = proj(tape, base, adapters, &self_path, ProjKind::Q, n1);
    let k = proj(tape, base, adapters, &self_path, ProjKind::K, n1);
    let v = proj(tape, base, adapters, &self_path, ProjKind::V, n1);
    let (sa, _) = attention_on_tape(tape, q, k, v, cfg.n_heads)?;
    let wo = base.var(&format!("{self_path}.o.w"));
    let wot = tape.transpose(wo);
    let sa_o = tape.matmul(sa, wot);
    let t1 = tape.add(tokens, sa_o);

    // cross-attention with residual
    let cross_path = format!("{block}.cross");
    let n2 = tape.rms_norm_rows(t1, 1e-6);
    let qc = proj(tape, base, adapters, &cross_path, ProjKind::Q, n2);
    let kc = proj(tape, base, adapters, &cross_path, ProjKind::K, cond);
    let vc = proj(tape, base, adapters, &cross_path, ProjKind::V, cond);
    let (ca, probs) = attention_on_tape(tape, qc, kc, vc, cfg.n_heads)?;
    if capture {
        captures.push(CrossCapture {
            block,
            res: h,
            head_probs: probs,
        });
    }
    let woc = base.var(&format!("{cross_path}.o.w"));
    let woct = tape.transpose(woc);
    let ca_o = tape.matmul(ca, woct);
    let t2 = tape.add(t1, ca_o);

    let back = tape.transpose(t2); // [c × hw]
    Ok(tape.reshape(back, vec![c, h, w]))
}

/// Averaged, min-max-normalized cross-attention map for one token position,
/// built from the captures taken at the configured map resolution.
pub fn cross_attention_map_on_tape(
    tape: &mut Tape,
    cfg: &DenoiserConfig,
    captures: &[CrossCapture],
    token_index: usize,
) -> Result<Var> {
    let mut columns = Vec::new();
    for cap in captures.iter().filter(|c| c.res == cfg.map_res) {
        for &probs in &cap.head_probs {
            let cols = tape.shape(probs)[1];
            if token_index >= cols {
                return Err(Error::Config(format!(
                    "token index {token_index} outside conditioning length {cols}"
                )));
            }
            columns.push(tape.select_column(probs, token_index));
        }
    }
    if columns.is_empty() {
        return Err(Error::Config(format!(
            "no cross-attention layer at map resolution {}",
            cfg.map_res
        )));
    }
    let avg = tape.mean_vars(&columns);
    Ok(tape.minmax_normalize(avg))
}

/// Convenience wrapper: one conditioned forward pass outside any training
/// loop. Returns the predicted noise and, when `capture_maps`, the normalized
/// per-concept maps for every concept position in the prompt.
#[derive(Debug)]
pub struct PredictOutcome {
    pub eps: Vec<f64>,
    pub concept_maps: BTreeMap<ConceptRole, Vec<f64>>,
}

#[allow(clippy::too_many_arguments)]
pub fn predict_noise(
    denoiser: &Denoiser,
    adapters: Option<&AdapterSet>,
    z_t: &[f64],
    t: usize,
    seq: &PromptSequence,
    concepts: &BTreeMap<ConceptRole, Vec<f64>>,
    capture_maps: bool,
) -> Result<PredictOutcome> {
    let cfg = &denoiser.config;
    if z_t.len() != cfg.latent_channels * cfg.img_res * cfg.img_res {
        return Err(Error::ShapeMismatch {
            ctx: "predict_noise",
            expected: format!("{}x{}x{}", cfg.latent_channels, cfg.img_res, cfg.img_res),
            got: format!("{} values", z_t.len()),
        });
    }
    if z_t.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            ctx: "predict_noise input",
            step: t,
        });
    }
    if t >= 10_000 {
        return Err(Error::Config(format!("timestep {t} out of range")));
    }
    let mut tape = Tape::new();
    let base = denoiser.bind(&mut tape, false);
    let bound_adapters = adapters.map(|a| a.bind(&mut tape, false));
    let mut concept_vars = BTreeMap::new();
    for (role, emb) in concepts {
        let v = tape.leaf(emb.clone(), vec![emb.len()], false);
        concept_vars.insert(*role, v);
    }
    let cond = encode_prompt(&mut tape, base.var("text.table"), seq, &concept_vars)?;
    let zv = tape.leaf(
        z_t.to_vec(),
        vec![cfg.latent_channels, cfg.img_res, cfg.img_res],
        false,
    );
    let out = forward(
        &mut tape,
        cfg,
        &base,
        bound_adapters.as_ref(),
        zv,
        t,
        cond,
        capture_maps,
    )?;
    let eps = tape.data(out.eps).to_vec();
    if eps.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            ctx: "predict_noise output",
            step: t,
        });
    }
    let mut concept_maps = BTreeMap::new();
    if capture_maps {
        for (role, &pos) in &seq.concept_positions {
            let map = cross_attention_map_on_tape(&mut tape, cfg, &out.captures, pos)?;
            concept_maps.insert(*role, tape.data(map).to_vec());
        }
    }
    Ok(PredictOutcome { eps, concept_maps })
}

/// A frozen base checkpoint: run config, parameters, and provenance.
#[derive(Debug, Clone)]
pub struct BaseCheckpoint {
    pub run: RunConfig,
    pub denoiser: Denoiser,
    pub seed: u64,
}

impl BaseCheckpoint {
    pub fn to_archive(&self) -> TensorArchive {
        let mut archive = TensorArchive::new(KIND_BASE, self.run.clone(), self.seed, "");
        for (name, tensor) in self.denoiser.params.iter() {
            archive.insert_f64(&format!("base.{name}"), tensor.shape.clone(), &tensor.data);
        }
        archive
    }

    pub fn from_archive(archive: &TensorArchive) -> Result<Self> {
        if archive.kind != KIND_BASE {
            return Err(Error::Archive(format!(
                "expected a {KIND_BASE} archive, got {:?}",
                archive.kind
            )));
        }
        archive.config.validate()?;
        let cfg = archive.config.denoiser.clone();
        let mut params = ParamStore::default();
        for (name, shape, _) in param_layout(&cfg) {
            let full = format!("base.{name}");
            let t = archive
                .tensor(&full)
                .ok_or_else(|| Error::Archive(format!("missing tensor entry {full:?}")))?;
            if t.shape != shape {
                return Err(Error::Archive(format!(
                    "tensor {full:?} has shape {:?}, expected {:?}",
                    t.shape, shape
                )));
            }
            params.insert(
                &name,
                Tensor {
                    shape,
                    data: t.data.iter().map(|&x| x as f64).collect(),
                },
            );
        }
        Ok(BaseCheckpoint {
            run: archive.config.clone(),
            denoiser: Denoiser {
                config: cfg,
                params,
            },
            seed: archive.seed,
        })
    }

    /// Checksum of the serialized checkpoint; this is what artifacts record
    /// and what the freeze-invariance checks compare.
    pub fn checksum(&self) -> String {
        sha256_hex(&self.to_archive().to_bytes())
    }
}

/// Gradient lookup helper shared by the training loops.
pub fn grad_or_zeros(grads: &Grads, var: Var, len: usize) -> Vec<f64> {
    grads
        .get(var)
        .map(|g| g.to_vec())
        .unwrap_or_else(|| vec![0.0; len])
}
