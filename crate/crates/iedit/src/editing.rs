//! Editing: reassemble concept clues with a target interaction into a new
//! prompt and synthesize the edited image from pure noise with the adapters
//! applied. Identity is carried entirely by the inversion clues; no source
//! image or inverted latent enters the editing path.

use crate::backbone::{BaseCheckpoint, ConceptRole, PromptSequence};
use crate::config::SamplerConfig;
use crate::diffusion::{sample, NoiseSchedule};
use crate::error::{Error, Result};
use crate::inversion::InversionArtifact;
use crate::scene::Image;
use crate::vocab;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// A ⟨subject, interaction, object⟩ triplet.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct HOITriplet {
    pub subject: String,
    pub interaction: String,
    pub object: String,
}

impl HOITriplet {
    pub fn new(subject: &str, interaction: &str, object: &str) -> Self {
        HOITriplet {
            subject: subject.to_string(),
            interaction: interaction.to_string(),
            object: object.to_string(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.subject.is_empty() || self.interaction.is_empty() || self.object.is_empty() {
            return Err(Error::Config("triplet fields must be non-empty".into()));
        }
        Ok(())
    }

    /// Canonical form used for matching: lowercase, spaces joined with
    /// underscores (so "Sit On" and "sit_on" compare equal).
    pub fn normalized(&self) -> HOITriplet {
        HOITriplet {
            subject: normalize_label(&self.subject),
            interaction: normalize_label(&self.interaction),
            object: normalize_label(&self.object),
        }
    }
}

/// Lowercase and join whitespace with underscores.
pub fn normalize_label(label: &str) -> String {
    label
        .to_lowercase()
        .split_whitespace()
        .collect::<Vec<_>>()
        .join("_")
}

/// A request to synthesize one edited image.
#[derive(Debug, Clone)]
pub struct EditRequest {
    pub artifact: InversionArtifact,
    pub target_interaction: String,
    pub seed: u64,
    /// Denoising steps; defaults to the artifact's sampler setting (50).
    pub steps: Option<usize>,
}

impl EditRequest {
    pub fn sampler_config(&self) -> SamplerConfig {
        let mut s = self.artifact.config.sampler.clone();
        if let Some(steps) = self.steps {
            s.inference_steps = steps;
        }
        s
    }
}

/// Build the target prompt: `a photo of [subject] <verb> [object] at
/// [background]`, or the degenerate merged form `a photo of [concept] <verb>`
/// for no-disassembly artifacts.
pub fn build_target_prompt(
    artifact: &InversionArtifact,
    target_interaction: &str,
) -> Result<PromptSequence> {
    // every word of the interaction must tokenize (this reports the
    // vocabulary for unknown verbs)
    vocab::tokenize(target_interaction)?;
    let has_merged = artifact
        .concepts
        .iter()
        .any(|c| c.role == ConceptRole::Merged);
    let text = if has_merged {
        format!(
            "a photo of {} {target_interaction}",
            ConceptRole::Merged.marker()
        )
    } else {
        format!(
            "a photo of {} {target_interaction} {} at {}",
            ConceptRole::Subject.marker(),
            ConceptRole::Object.marker(),
            ConceptRole::Background.marker()
        )
    };
    PromptSequence::parse(&text)
}

/// Verify an artifact matches the loaded base checkpoint. Checksum or config
/// mismatches are refused unless `force` is set.
pub fn check_compatibility(
    artifact: &InversionArtifact,
    base: &BaseCheckpoint,
    force: bool,
) -> Result<()> {
    let base_checksum = base.checksum();
    if artifact.config.denoiser != base.run.denoiser {
        return Err(Error::IncompatibleArtifact {
            reason: "denoiser geometry differs from the base checkpoint".into(),
        });
    }
    if artifact.base_checksum != base_checksum {
        if force {
            return Ok(());
        }
        return Err(Error::IncompatibleArtifact {
            reason: format!(
                "artifact was trained against base {} but the loaded base is {}",
                &artifact.base_checksum[..12.min(artifact.base_checksum.len())],
                &base_checksum[..12]
            ),
        });
    }
    Ok(())
}

/// Synthesize one edited image: seeded noise, reverse sampling conditioned on
/// the target prompt, adapters applied, base untouched.
pub fn edit(req: &EditRequest, base: &BaseCheckpoint, force: bool) -> Result<Image> {
    check_compatibility(&req.artifact, base, force)?;
    let prompt = build_target_prompt(&req.artifact, &req.target_interaction)?;
    let sampler_cfg = req.sampler_config();
    sampler_cfg.validate()?;
    let sched = NoiseSchedule::for_sampler(&sampler_cfg)?;
    let cfg = &base.denoiser.config;
    let n = cfg.latent_channels * cfg.img_res * cfg.img_res;

    let concepts: BTreeMap<ConceptRole, Vec<f64>> = req
        .artifact
        .concepts
        .iter()
        .map(|c| (c.role, c.embedding.clone()))
        .collect();
    for role in prompt.concept_positions.keys() {
        if !concepts.contains_key(role) {
            return Err(Error::UnknownConcept(role.name().to_string()));
        }
    }

    // optional classifier-free guidance against a bare prefix prompt
    let guidance = sampler_cfg.guidance_scale;
    let uncond = if guidance != 1.0 {
        Some(PromptSequence::parse("a photo of")?)
    } else {
        None
    };

    let denoiser = &base.denoiser;
    let adapters = &req.artifact.adapters;
    let mut predictor = |z_t: &[f64], t: usize| -> Result<Vec<f64>> {
        let cond_out = crate::backbone::predict_noise(
            denoiser,
            Some(adapters),
            z_t,
            t,
            &prompt,
            &concepts,
            false,
        )?;
        match &uncond {
            None => Ok(cond_out.eps),
            Some(u) => {
                let uncond_out = crate::backbone::predict_noise(
                    denoiser,
                    Some(adapters),
                    z_t,
                    t,
                    u,
                    &BTreeMap::new(),
                    false,
                )?;
                Ok(uncond_out
                    .eps
                    .iter()
                    .zip(&cond_out.eps)
                    .map(|(eu, ec)| eu + guidance * (ec - eu))
                    .collect())
            }
        }
    };
    let z0 = sample(&mut predictor, &sched, &sampler_cfg, n, req.seed)?;
    let data: Vec<f64> = z0.iter().map(|v| v.clamp(-1.0, 1.0)).collect();
    Ok(Image {
        res: cfg.img_res,
        channels: cfg.latent_channels,
        data,
    })
}
