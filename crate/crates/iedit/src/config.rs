//! Configuration for the denoiser, training, sampling, and ablations, plus
//! the canonical config hash stamped into every emitted file.

use crate::attention_lora::FreezePolicy;
use crate::error::{Error, Result};
use crate::vocab;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Geometry of the toy text-conditioned denoiser.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    /// Latent grid resolution (pixel-space latents).
    pub img_res: usize,
    pub latent_channels: usize,
    /// Channel width of the conv/attention trunk.
    pub base_width: usize,
    /// Resolution at which cross-attention maps are extracted.
    pub map_res: usize,
    pub n_heads: usize,
    pub d_text: usize,
    pub vocab_size: usize,
    pub reserved_concept_slots: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            img_res: 32,
            latent_channels: 3,
            base_width: 32,
            map_res: 8,
            n_heads: 1,
            d_text: 32,
            vocab_size: vocab::VOCAB_WORDS,
            reserved_concept_slots: vocab::RESERVED_SLOTS,
        }
    }
}

impl DenoiserConfig {
    /// Small geometry for fast tests; same architecture, fewer positions.
    pub fn micro() -> Self {
        DenoiserConfig {
            img_res: 16,
            latent_channels: 3,
            base_width: 16,
            map_res: 4,
            n_heads: 1,
            d_text: 16,
            vocab_size: vocab::VOCAB_WORDS,
            reserved_concept_slots: vocab::RESERVED_SLOTS,
        }
    }

    /// The two attention resolutions of the encoder-decoder trunk.
    pub fn attn_resolutions(&self) -> [usize; 2] {
        [self.img_res / 2, self.img_res / 4]
    }

    pub fn validate(&self) -> Result<()> {
        if self.img_res < 8 || !self.img_res.is_multiple_of(4) {
            return Err(Error::Config(format!(
                "img_res {} must be a multiple of 4 and at least 8",
                self.img_res
            )));
        }
        if self.map_res == 0 || !self.img_res.is_multiple_of(self.map_res) {
            return Err(Error::Config(format!(
                "map_res {} must divide img_res {}",
                self.map_res, self.img_res
            )));
        }
        if !self.attn_resolutions().contains(&self.map_res) {
            return Err(Error::Config(format!(
                "no cross-attention layer at map resolution {} (attention sits at {:?})",
                self.map_res,
                self.attn_resolutions()
            )));
        }
        if self.reserved_concept_slots < 3 {
            return Err(Error::Config(
                "reserved_concept_slots must be at least 3".into(),
            ));
        }
        if self.vocab_size != vocab::VOCAB_WORDS
            || self.reserved_concept_slots != vocab::RESERVED_SLOTS
        {
            return Err(Error::Config(format!(
                "vocab {}+{} does not match the fixed tokenizer table {}+{}",
                self.vocab_size,
                self.reserved_concept_slots,
                vocab::VOCAB_WORDS,
                vocab::RESERVED_SLOTS
            )));
        }
        if !self.base_width.is_multiple_of(self.n_heads) || self.base_width < 4 {
            return Err(Error::Config(format!(
                "base_width {} must be a multiple of n_heads {}",
                self.base_width, self.n_heads
            )));
        }
        if !self.d_text.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_text {} must be a multiple of n_heads {}",
                self.d_text, self.n_heads
            )));
        }
        Ok(())
    }
}

/// Ablation toggles: concept disassembly, selective fine-tuning, low-rank
/// adapters. All on by default.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationFlags {
    pub disassembly: bool,
    pub sft: bool,
    pub lora: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        AblationFlags {
            disassembly: true,
            sft: true,
            lora: true,
        }
    }
}

impl AblationFlags {
    pub fn from_label(label: &str) -> Option<Self> {
        let (disassembly, sft, lora) = match label {
            "full" => (true, true, true),
            "wo_lora" => (true, true, false),
            "wo_sft" => (true, false, true),
            "wo_sft_lora" => (true, false, false),
            "wo_disassembly" => (false, true, true),
            "baseline" => (false, false, false),
            _ => return None,
        };
        Some(AblationFlags {
            disassembly,
            sft,
            lora,
        })
    }

    pub fn label(&self) -> &'static str {
        match (self.disassembly, self.sft, self.lora) {
            (true, true, true) => "full",
            (true, true, false) => "wo_lora",
            (true, false, true) => "wo_sft",
            (true, false, false) => "wo_sft_lora",
            (false, true, true) => "wo_disassembly",
            (false, false, false) => "baseline",
            (false, true, false) => "wo_disassembly_lora",
            (false, false, true) => "wo_disassembly_sft",
        }
    }
}

/// Two-stage fine-tuning hyperparameters. Defaults are the published recipe:
/// 1000 concept-only steps at 5e-4, then 200 joint steps at 1e-4, Adam with
/// batch 1 and weight decay 1e-4, attention-loss weight 0.01.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub stage1_steps: usize,
    pub stage1_lr: f64,
    pub stage2_steps: usize,
    pub stage2_lr: f64,
    pub batch: usize,
    pub weight_decay: f64,
    pub lambda_attn: f64,
    pub freeze: FreezePolicy,
    pub rank_k: usize,
    pub rank_v: usize,
    pub ablation: AblationFlags,
    /// Whether the source prompt includes the original interaction word.
    pub include_source_interaction: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            stage1_steps: 1000,
            stage1_lr: 5e-4,
            stage2_steps: 200,
            stage2_lr: 1e-4,
            batch: 1,
            weight_decay: 1e-4,
            lambda_attn: 0.01,
            freeze: FreezePolicy::default(),
            rank_k: 4,
            rank_v: 4,
            ablation: AblationFlags::default(),
            include_source_interaction: false,
        }
    }
}

impl TrainConfig {
    /// The freeze policy actually in force: disabling selective fine-tuning
    /// trains Query projections too.
    pub fn effective_policy(&self) -> FreezePolicy {
        if self.ablation.sft {
            self.freeze
        } else {
            FreezePolicy::train_all()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lambda_attn < 0.0 {
            return Err(Error::Config("lambda_attn must be non-negative".into()));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch must be positive".into()));
        }
        if self.rank_k == 0 || self.rank_v == 0 {
            return Err(Error::Config("lora ranks must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerKind {
    Ddim,
    Ddpm,
}

fn default_true() -> bool {
    true
}

/// Noise schedule and reverse-sampler settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub train_timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Denoising steps at inference time.
    pub inference_steps: usize,
    /// 0.0 gives the deterministic reverse update.
    pub eta: f64,
    pub kind: SamplerKind,
    /// 1.0 disables classifier-free guidance.
    pub guidance_scale: f64,
    /// Clamp the implied clean latent to [-1, 1] at every reverse step;
    /// standard for pixel-space latents.
    #[serde(default = "default_true")]
    pub clip_denoised: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            // beta_end is scaled up from the reference 1000-step linear
            // schedule so that 200 training steps accumulate comparable
            // total noise; otherwise the terminal latent keeps a large
            // signal fraction and sampling from pure noise is
            // out-of-distribution.
            train_timesteps: 200,
            beta_start: 1e-4,
            beta_end: 6e-2,
            inference_steps: 50,
            eta: 0.0,
            kind: SamplerKind::Ddim,
            guidance_scale: 1.0,
            clip_denoised: true,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.train_timesteps == 0 || self.inference_steps == 0 {
            return Err(Error::Config("timesteps must be positive".into()));
        }
        if self.inference_steps > self.train_timesteps {
            return Err(Error::Config(format!(
                "inference_steps {} exceeds train_timesteps {}",
                self.inference_steps, self.train_timesteps
            )));
        }
        if !(0.0 < self.beta_start && self.beta_start < self.beta_end && self.beta_end < 1.0) {
            return Err(Error::Config(format!(
                "betas must satisfy 0 < {} < {} < 1",
                self.beta_start, self.beta_end
            )));
        }
        if self.eta < 0.0 {
            return Err(Error::Config("eta must be non-negative".into()));
        }
        Ok(())
    }
}

/// Everything that determines a run's behavior, serializable and hashable.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunConfig {
    pub denoiser: DenoiserConfig,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
}

impl RunConfig {
    pub fn micro() -> Self {
        RunConfig {
            denoiser: DenoiserConfig::micro(),
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.denoiser.validate()?;
        self.train.validate()?;
        self.sampler.validate()
    }

    pub fn from_json_bytes(bytes: &[u8]) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_slice(bytes)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Canonical hash: serialize through `serde_json::Value` (sorted object
    /// keys), so the hash is stable across field-order permutations of the
    /// source file.
    pub fn hash(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        let canonical = serde_json::to_string(&value).expect("value serializes");
        let mut hasher = Sha256::new();
        hasher.update(canonical.as_bytes());
        let digest = hasher.finalize();
        hex(&digest[..8])
    }
}

pub fn hex(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
    }
    s
}
