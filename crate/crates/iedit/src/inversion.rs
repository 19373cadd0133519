//! Two-stage inversion: learn concept clues from one source image under the
//! masked reconstruction loss, then jointly fine-tune concept embeddings and
//! attention adapters with the cross-attention alignment loss.
//!
//! Stage 1 optimizes only the concept token embeddings; stage 2 adds the
//! adapter factors selected by the freeze policy. Base weights are never
//! touched.

use crate::archive::{TensorArchive, KIND_ARTIFACT};
use crate::backbone::{
    cross_attention_map_on_tape, encode_prompt, forward, grad_or_zeros, AdapterParams, AdapterSet,
    BaseCheckpoint, ConceptClue, ConceptRole, PromptSequence,
};
pub use crate::config::TrainConfig;
use crate::config::{DenoiserConfig, RunConfig};
use crate::diffusion::{add_noise, NoiseSchedule};
use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::rng;
use crate::scene::SceneBundle;
use crate::vocab;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

/// The concepts a source image disassembles into: subject, object, and
/// background, or a single merged concept under the no-disassembly ablation.
#[derive(Debug, Clone)]
pub struct ConceptSet {
    pub concepts: Vec<ConceptClue>,
}

impl ConceptSet {
    pub fn roles(&self) -> Vec<ConceptRole> {
        self.concepts.iter().map(|c| c.role).collect()
    }

    pub fn get(&self, role: ConceptRole) -> Option<&ConceptClue> {
        self.concepts.iter().find(|c| c.role == role)
    }

    pub fn validate(&self, cfg: &DenoiserConfig) -> Result<()> {
        for c in &self.concepts {
            c.validate(cfg)?;
        }
        // disassembled masks must be pairwise disjoint
        for i in 0..self.concepts.len() {
            for j in (i + 1)..self.concepts.len() {
                let overlap = self.concepts[i]
                    .mask
                    .iter()
                    .zip(&self.concepts[j].mask)
                    .any(|(a, b)| *a == 1 && *b == 1);
                if overlap {
                    return Err(Error::Config(format!(
                        "masks of {:?} and {:?} overlap",
                        self.concepts[i].role, self.concepts[j].role
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Uniformly sample a non-empty subset of the available concepts,
/// preserving canonical order (background last).
pub fn sample_concept_subset(roles: &[ConceptRole], rng: &mut ChaCha8Rng) -> Vec<ConceptRole> {
    assert!(!roles.is_empty());
    if roles.len() == 1 {
        return roles.to_vec();
    }
    let n = roles.len();
    let mask = rng.random_range(1..(1usize << n));
    roles
        .iter()
        .enumerate()
        .filter(|(i, _)| mask & (1 << i) != 0)
        .map(|(_, r)| *r)
        .collect()
}

/// Source-prompt template for a concept subset. With
/// `interaction = Some(verb)` and both subject and object selected, the verb
/// sits between them.
pub fn source_prompt_for_subset(subset: &[ConceptRole], interaction: Option<&str>) -> String {
    let has = |r: ConceptRole| subset.contains(&r);
    let verb_between = interaction.filter(|_| {
        has(ConceptRole::Subject) && has(ConceptRole::Object) || has(ConceptRole::Merged)
    });
    let mut parts: Vec<String> = vec!["a photo of".into()];
    match subset.len() {
        1 => {
            parts.push(subset[0].marker().into());
            if let (Some(v), ConceptRole::Merged) = (verb_between, subset[0]) {
                parts.push(v.into());
            }
        }
        2 => {
            parts.push(subset[0].marker().into());
            if let Some(v) = verb_between {
                parts.push(v.into());
            } else {
                parts.push("and".into());
            }
            parts.push(subset[1].marker().into());
        }
        3 => {
            parts.push(ConceptRole::Subject.marker().into());
            if let Some(v) = verb_between {
                parts.push(v.into());
            } else {
                parts.push("and".into());
            }
            parts.push(ConceptRole::Object.marker().into());
            parts.push("at".into());
            parts.push(ConceptRole::Background.marker().into());
        }
        n => panic!("unsupported subset size {n}"),
    }
    parts.join(" ")
}

/// Masked diffusion loss: mean over masked elements of `(ε − ε̂)²`, the mask
/// broadcast across channels.
pub fn masked_reconstruction_loss(eps: &[f64], eps_hat: &[f64], mask_union: &[f64]) -> Result<f64> {
    if eps.len() != eps_hat.len() || !eps.len().is_multiple_of(mask_union.len()) {
        return Err(Error::ShapeMismatch {
            ctx: "masked_reconstruction_loss",
            expected: format!("multiple of {}", mask_union.len()),
            got: format!("{} vs {}", eps.len(), eps_hat.len()),
        });
    }
    let channels = eps.len() / mask_union.len();
    let nnz = mask_union.iter().filter(|&&m| m != 0.0).count();
    if nnz == 0 {
        return Err(Error::DegenerateMask);
    }
    let hw = mask_union.len();
    let mut acc = 0.0;
    for c in 0..channels {
        for i in 0..hw {
            let d = (eps[c * hw + i] - eps_hat[c * hw + i]) * mask_union[i];
            acc += d * d;
        }
    }
    Ok(acc / (nnz * channels) as f64)
}

/// Cross-attention alignment loss: mean over concepts of the mean squared
/// error between each normalized map and its mask at map resolution.
pub fn attention_alignment_loss(maps: &[Vec<f64>], masks: &[Vec<f64>]) -> Result<f64> {
    if maps.len() != masks.len() || maps.is_empty() {
        return Err(Error::ShapeMismatch {
            ctx: "attention_alignment_loss",
            expected: format!("{} masks", maps.len().max(1)),
            got: format!("{}", masks.len()),
        });
    }
    let mut acc = 0.0;
    for (map, mask) in maps.iter().zip(masks) {
        if map.len() != mask.len() {
            return Err(Error::ShapeMismatch {
                ctx: "attention_alignment_loss",
                expected: format!("{}", mask.len()),
                got: format!("{}", map.len()),
            });
        }
        let mse: f64 = map
            .iter()
            .zip(mask)
            .map(|(m, t)| (m - t) * (m - t))
            .sum::<f64>()
            / map.len() as f64;
        acc += mse;
    }
    Ok(acc / maps.len() as f64)
}

/// `L_total = L_rec + λ_attn · L_attn`
pub fn total_loss(l_rec: f64, l_attn: f64, lambda_attn: f64) -> f64 {
    assert!(lambda_attn >= 0.0, "lambda_attn must be non-negative");
    l_rec + lambda_attn * l_attn
}

/// Area-average a binary mask down to `to × to`, thresholding at 0.5.
pub fn downsample_mask(mask: &[u8], from: usize, to: usize) -> Vec<u8> {
    assert_eq!(mask.len(), from * from);
    assert!(to > 0 && from.is_multiple_of(to));
    let k = from / to;
    let mut out = vec![0u8; to * to];
    for y in 0..to {
        for x in 0..to {
            let mut acc = 0usize;
            for dy in 0..k {
                for dx in 0..k {
                    acc += mask[(y * k + dy) * from + (x * k + dx)] as usize;
                }
            }
            out[y * to + x] = u8::from(acc * 2 >= k * k);
        }
    }
    out
}

/// Pixelwise union (max) of binary masks.
pub fn union_mask(masks: &[&[u8]]) -> Vec<u8> {
    let n = masks[0].len();
    let mut out = vec![0u8; n];
    for mask in masks {
        assert_eq!(mask.len(), n);
        for (o, &m) in out.iter_mut().zip(*mask) {
            *o = (*o).max(m);
        }
    }
    out
}

/// The complete inversion result: concept clues plus adapter factors plus
/// provenance. Applying it to a pristine base reproduces the fine-tuned
/// model; no base weights are stored.
#[derive(Debug, Clone)]
pub struct InversionArtifact {
    pub concepts: Vec<ConceptClue>,
    pub adapters: AdapterSet,
    pub config: RunConfig,
    pub seed: u64,
    pub base_checksum: String,
    pub source_template: String,
}

impl InversionArtifact {
    pub fn to_archive(&self) -> TensorArchive {
        let mut archive = TensorArchive::new(
            KIND_ARTIFACT,
            self.config.clone(),
            self.seed,
            &self.base_checksum,
        );
        archive
            .meta
            .insert("source_template".into(), self.source_template.clone());
        archive
            .meta
            .insert("ablation".into(), self.config.train.ablation.label().into());
        for clue in &self.concepts {
            let role = clue.role.name();
            archive
                .meta
                .insert(format!("label.{role}"), clue.label.clone());
            archive.insert_f64(
                &format!("concepts.{role}.embedding"),
                vec![clue.embedding.len()],
                &clue.embedding,
            );
            let mask_f: Vec<f64> = clue.mask.iter().map(|&m| m as f64).collect();
            let res = (clue.mask.len() as f64).sqrt() as usize;
            archive.insert_f64(&format!("concepts.{role}.mask"), vec![res, res], &mask_f);
        }
        for entry in &self.adapters.entries {
            let key = entry.key();
            match &entry.params {
                AdapterParams::LowRank { a, b, .. } => {
                    archive.insert_f64(&format!("{key}.lora_A"), a.shape.clone(), &a.data);
                    archive.insert_f64(&format!("{key}.lora_B"), b.shape.clone(), &b.data);
                }
                AdapterParams::Dense { delta } => {
                    archive.insert_f64(&format!("{key}.delta"), delta.shape.clone(), &delta.data);
                }
            }
        }
        archive
    }

    pub fn from_archive(archive: &TensorArchive) -> Result<Self> {
        if archive.kind != KIND_ARTIFACT {
            return Err(Error::Archive(format!(
                "expected an {KIND_ARTIFACT} archive, got {:?}",
                archive.kind
            )));
        }
        let config = archive.config.clone();
        config.validate()?;
        let cfg = &config.denoiser;
        let roles = if config.train.ablation.disassembly {
            vec![
                ConceptRole::Subject,
                ConceptRole::Object,
                ConceptRole::Background,
            ]
        } else {
            vec![ConceptRole::Merged]
        };
        let mut concepts = Vec::new();
        for role in roles {
            let name = role.name();
            let embedding = archive.tensor_f64(&format!("concepts.{name}.embedding"))?;
            if embedding.len() != cfg.d_text {
                return Err(Error::Archive(format!(
                    "concept {name} embedding has dim {}, expected {}",
                    embedding.len(),
                    cfg.d_text
                )));
            }
            let mask: Vec<u8> = archive
                .tensor_f64(&format!("concepts.{name}.mask"))?
                .iter()
                .map(|&v| u8::from(v >= 0.5))
                .collect();
            if mask.len() != cfg.img_res * cfg.img_res {
                return Err(Error::Archive(format!(
                    "concept {name} mask resolution mismatch"
                )));
            }
            let label = archive
                .meta
                .get(&format!("label.{name}"))
                .cloned()
                .unwrap_or_else(|| name.to_string());
            concepts.push(ConceptClue {
                role,
                label,
                token_id: vocab::token_id(role.marker()).expect("marker in vocab"),
                embedding,
                mask,
            });
        }
        // rebuild adapters in layout order, then fill from the archive
        let mut adapters = AdapterSet::init(cfg, &config.train, 0)?;
        let mut expected = 0usize;
        for (name, tensor) in adapters.factor_buffers_mut() {
            let stored = archive.tensor_f64(&name)?;
            if stored.len() != tensor.data.len() {
                return Err(Error::Archive(format!(
                    "adapter tensor {name:?} has {} values, expected {}",
                    stored.len(),
                    tensor.data.len()
                )));
            }
            tensor.data = stored;
            expected += 1;
        }
        // every adapter entry in the archive must be accounted for
        let adapter_entries = archive
            .names()
            .filter(|n| n.ends_with(".lora_A") || n.ends_with(".lora_B") || n.ends_with(".delta"))
            .count();
        if adapter_entries != expected {
            return Err(Error::Archive(format!(
                "archive holds {adapter_entries} adapter tensors, layout expects {expected}"
            )));
        }
        let source_template = archive
            .meta
            .get("source_template")
            .cloned()
            .unwrap_or_default();
        Ok(InversionArtifact {
            concepts,
            adapters,
            config,
            seed: archive.seed,
            base_checksum: archive.base_checksum.clone(),
            source_template,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    ConceptsOnly,
    Joint,
}

/// Closed-form trainable-parameter count for a stage.
pub fn trainable_param_count(cfg: &DenoiserConfig, train: &TrainConfig, stage: Stage) -> usize {
    let n_concepts = if train.ablation.disassembly { 3 } else { 1 };
    let concept_params = n_concepts * cfg.d_text;
    if stage == Stage::ConceptsOnly {
        return concept_params;
    }
    let policy = train.effective_policy();
    let mut adapter_params = 0usize;
    for block in crate::backbone::ATTN_BLOCKS {
        let w = crate::backbone::block_width(cfg, block);
        for kind in ["self", "cross"] {
            let d_in = if kind == "self" { w } else { cfg.d_text };
            let pp = if kind == "self" {
                policy.self_attn
            } else {
                policy.cross_attn
            };
            for (trains, rank) in [
                (pp.train_q, train.rank_k),
                (pp.train_k, train.rank_k),
                (pp.train_v, train.rank_v),
            ] {
                if !trains {
                    continue;
                }
                adapter_params += if train.ablation.lora {
                    w * rank + d_in * rank
                } else {
                    w * d_in
                };
            }
        }
    }
    concept_params + adapter_params
}

/// A running inversion with explicit stages.
pub struct InversionRun<'a> {
    base: &'a BaseCheckpoint,
    pub concept_set: ConceptSet,
    pub adapters: AdapterSet,
    pub run_config: RunConfig,
    seed: u64,
    sched: NoiseSchedule,
    image: Vec<f64>,
    map_masks: BTreeMap<ConceptRole, Vec<f64>>,
    step_counter: u64,
    /// (stage, step, L_rec, L_attn) per optimization step.
    pub loss_history: Vec<(u8, usize, f64, f64)>,
    base_checksum: String,
    source_interaction: Option<String>,
}

impl<'a> InversionRun<'a> {
    pub fn new(
        base: &'a BaseCheckpoint,
        bundle: &SceneBundle,
        train: TrainConfig,
        seed: u64,
    ) -> Result<Self> {
        train.validate()?;
        let mut run_config = base.run.clone();
        run_config.train = train.clone();
        run_config.validate()?;
        let cfg = &base.denoiser.config;
        let res = cfg.img_res;
        if bundle.image.res != res {
            return Err(Error::Config(format!(
                "scene image resolution {} does not match model {}",
                bundle.image.res, res
            )));
        }

        let concept_set = if train.ablation.disassembly {
            let mk = |role: ConceptRole, label: &str, mask: &[u8], idx: u64| ConceptClue {
                role,
                label: label.to_string(),
                token_id: vocab::token_id(role.marker()).expect("marker in vocab"),
                embedding: rng::normal_vec(seed, "concept_init", idx, cfg.d_text)
                    .into_iter()
                    .map(|x| x / (cfg.d_text as f64).sqrt())
                    .collect(),
                mask: mask.to_vec(),
            };
            ConceptSet {
                concepts: vec![
                    mk(
                        ConceptRole::Subject,
                        &bundle.meta.subject_label,
                        &bundle.masks["subject"],
                        0,
                    ),
                    mk(
                        ConceptRole::Object,
                        &bundle.meta.object_label,
                        &bundle.masks["object"],
                        1,
                    ),
                    mk(
                        ConceptRole::Background,
                        &bundle.meta.background_label,
                        &bundle.masks["background"],
                        2,
                    ),
                ],
            }
        } else {
            ConceptSet {
                concepts: vec![ConceptClue {
                    role: ConceptRole::Merged,
                    label: format!("{}+{}", bundle.meta.subject_label, bundle.meta.object_label),
                    token_id: vocab::token_id(ConceptRole::Merged.marker()).unwrap(),
                    embedding: rng::normal_vec(seed, "concept_init", 0, cfg.d_text)
                        .into_iter()
                        .map(|x| x / (cfg.d_text as f64).sqrt())
                        .collect(),
                    mask: vec![1u8; res * res],
                }],
            }
        };
        concept_set.validate(cfg)?;

        let adapters = AdapterSet::init(cfg, &train, seed)?;
        let sched = NoiseSchedule::for_sampler(&run_config.sampler)?;
        let map_masks = concept_set
            .concepts
            .iter()
            .map(|c| {
                let down = downsample_mask(&c.mask, res, cfg.map_res);
                (c.role, down.iter().map(|&m| m as f64).collect())
            })
            .collect();
        let source_interaction = train
            .include_source_interaction
            .then(|| bundle.meta.interaction.clone());
        Ok(InversionRun {
            base,
            concept_set,
            adapters,
            run_config,
            seed,
            sched,
            image: bundle.image.data.clone(),
            map_masks,
            step_counter: 0,
            loss_history: Vec::new(),
            base_checksum: base.checksum(),
            source_interaction,
        })
    }

    fn train_step(&mut self, stage: Stage, adam: &mut Adam, slots: &[usize]) -> Result<()> {
        let cfg = self.base.denoiser.config.clone();
        let train = self.run_config.train.clone();
        let roles = self.concept_set.roles();
        let idx = self.step_counter;
        self.step_counter += 1;

        let mut tape = crate::autograd::Tape::new();
        let bound_base = self.base.denoiser.bind(&mut tape, false);
        let train_adapters = stage == Stage::Joint;
        let bound_adapters = self.adapters.bind(&mut tape, train_adapters);

        let mut concept_vars = BTreeMap::new();
        for clue in &self.concept_set.concepts {
            let v = tape.leaf(clue.embedding.clone(), vec![cfg.d_text], true);
            concept_vars.insert(clue.role, v);
        }

        let mut batch_totals = Vec::new();
        let mut rec_sum = 0.0;
        let mut attn_sum = 0.0;
        for b in 0..train.batch {
            let sample_idx = idx * train.batch as u64 + b as u64;
            let mut subset_rng = rng::stream(self.seed, "step_subset", sample_idx);
            let subset = sample_concept_subset(&roles, &mut subset_rng);
            let prompt_text = source_prompt_for_subset(&subset, self.source_interaction.as_deref());
            let seq = PromptSequence::parse(&prompt_text)?;

            let mut t_rng = rng::stream(self.seed, "step_t", sample_idx);
            let t = t_rng.random_range(0..self.sched.timesteps);
            let eps = rng::normal_vec(self.seed, "step_eps", sample_idx, self.image.len());
            let z_t = add_noise(&self.image, &eps, t, &self.sched)?;

            let cond = encode_prompt(&mut tape, bound_base.var("text.table"), &seq, &concept_vars)?;
            let zv = tape.leaf(
                z_t,
                vec![cfg.latent_channels, cfg.img_res, cfg.img_res],
                false,
            );
            let out = forward(
                &mut tape,
                &cfg,
                &bound_base,
                Some(&bound_adapters),
                zv,
                t,
                cond,
                true,
            )?;

            let selected_masks: Vec<&[u8]> = subset
                .iter()
                .map(|r| self.concept_set.get(*r).unwrap().mask.as_slice())
                .collect();
            let mu: Vec<f64> = union_mask(&selected_masks)
                .iter()
                .map(|&m| m as f64)
                .collect();
            let eps_leaf = tape.leaf(
                eps,
                vec![cfg.latent_channels, cfg.img_res, cfg.img_res],
                false,
            );
            let l_rec = tape.masked_sq_mean(out.eps, eps_leaf, &mu)?;

            let mut per_concept = Vec::new();
            for role in &subset {
                let pos = seq.concept_positions[role];
                let map = cross_attention_map_on_tape(&mut tape, &cfg, &out.captures, pos)?;
                let target = tape.leaf(
                    self.map_masks[role].clone(),
                    vec![cfg.map_res * cfg.map_res],
                    false,
                );
                per_concept.push(tape.sq_diff_mean(map, target));
            }
            let l_attn = tape.mean_vars(&per_concept);
            let l_attn_scaled = tape.scale(l_attn, train.lambda_attn);
            let total = tape.add(l_rec, l_attn_scaled);
            rec_sum += tape.scalar(l_rec);
            attn_sum += tape.scalar(l_attn);
            batch_totals.push(total);
        }
        let loss = tape.mean_vars(&batch_totals);
        if !tape.scalar(loss).is_finite() {
            return Err(Error::NonFinite {
                ctx: "inversion loss",
                step: idx as usize,
            });
        }
        let grads = tape.backward(loss);

        adam.begin_step();
        let mut slot_iter = slots.iter();
        for clue in &mut self.concept_set.concepts {
            let var = concept_vars[&clue.role];
            let g = grad_or_zeros(&grads, var, cfg.d_text);
            adam.update(*slot_iter.next().unwrap(), &mut clue.embedding, &g);
        }
        if train_adapters {
            let factor_vars: Vec<_> = bound_adapters.factors.clone();
            for ((_, var), (_, tensor)) in
                factor_vars.iter().zip(self.adapters.factor_buffers_mut())
            {
                let g = grad_or_zeros(&grads, *var, tensor.data.len());
                adam.update(*slot_iter.next().unwrap(), &mut tensor.data, &g);
            }
        }
        let stage_id = if stage == Stage::ConceptsOnly { 1 } else { 2 };
        self.loss_history.push((
            stage_id,
            idx as usize,
            rec_sum / train.batch as f64,
            attn_sum / train.batch as f64,
        ));
        Ok(())
    }

    /// Stage 1: optimize only the concept embeddings.
    pub fn stage1(&mut self) -> Result<()> {
        let train = self.run_config.train.clone();
        let mut adam = Adam::new(train.stage1_lr, train.weight_decay);
        let slots: Vec<usize> = self
            .concept_set
            .concepts
            .iter()
            .map(|c| adam.register(c.embedding.len()))
            .collect();
        for _ in 0..train.stage1_steps {
            self.train_step(Stage::ConceptsOnly, &mut adam, &slots)?;
        }
        Ok(())
    }

    /// Stage 2: jointly optimize concept embeddings and adapter factors.
    pub fn stage2(&mut self) -> Result<()> {
        let train = self.run_config.train.clone();
        let mut adam = Adam::new(train.stage2_lr, train.weight_decay);
        let mut slots: Vec<usize> = self
            .concept_set
            .concepts
            .iter()
            .map(|c| adam.register(c.embedding.len()))
            .collect();
        for (_, tensor) in self.adapters.factor_buffers_mut() {
            slots.push(adam.register(tensor.data.len()));
        }
        for _ in 0..train.stage2_steps {
            self.train_step(Stage::Joint, &mut adam, &slots)?;
        }
        Ok(())
    }

    /// Deterministic reconstruction-loss probe on the full source prompt,
    /// averaged over `probes` fixed (t, ε) draws.
    pub fn reconstruction_probe(&self, probes: usize) -> Result<f64> {
        let roles = self.concept_set.roles();
        let prompt = source_prompt_for_subset(&roles, self.source_interaction.as_deref());
        let seq = PromptSequence::parse(&prompt)?;
        let concepts: BTreeMap<ConceptRole, Vec<f64>> = self
            .concept_set
            .concepts
            .iter()
            .map(|c| (c.role, c.embedding.clone()))
            .collect();
        let all_masks: Vec<&[u8]> = self
            .concept_set
            .concepts
            .iter()
            .map(|c| c.mask.as_slice())
            .collect();
        let mu: Vec<f64> = union_mask(&all_masks).iter().map(|&m| m as f64).collect();
        let mut acc = 0.0;
        for p in 0..probes {
            let mut t_rng = rng::stream(self.seed, "probe_t", p as u64);
            let t = t_rng.random_range(0..self.sched.timesteps);
            let eps = rng::normal_vec(self.seed, "probe_eps", p as u64, self.image.len());
            let z_t = add_noise(&self.image, &eps, t, &self.sched)?;
            let out = crate::backbone::predict_noise(
                &self.base.denoiser,
                Some(&self.adapters),
                &z_t,
                t,
                &seq,
                &concepts,
                false,
            )?;
            acc += masked_reconstruction_loss(&eps, &out.eps, &mu)?;
        }
        Ok(acc / probes as f64)
    }

    pub fn artifact(&self) -> InversionArtifact {
        let roles = self.concept_set.roles();
        InversionArtifact {
            concepts: self.concept_set.concepts.clone(),
            adapters: self.adapters.clone(),
            config: self.run_config.clone(),
            seed: self.seed,
            base_checksum: self.base_checksum.clone(),
            source_template: source_prompt_for_subset(&roles, self.source_interaction.as_deref()),
        }
    }
}

/// Outcome of a full inversion, with the loss probes used by reporting.
#[derive(Debug)]
pub struct InvertOutcome {
    pub artifact: InversionArtifact,
    pub initial_probe: f64,
    pub final_probe: f64,
    pub history: Vec<(u8, usize, f64, f64)>,
}

/// Run both stages on a scene bundle against a pristine base checkpoint.
pub fn invert(
    base: &BaseCheckpoint,
    bundle: &SceneBundle,
    train: TrainConfig,
    seed: u64,
) -> Result<InvertOutcome> {
    let mut run = InversionRun::new(base, bundle, train, seed)?;
    let initial_probe = run.reconstruction_probe(4)?;
    run.stage1()?;
    run.stage2()?;
    let final_probe = run.reconstruction_probe(4)?;
    Ok(InvertOutcome {
        artifact: run.artifact(),
        initial_probe,
        final_probe,
        history: run.loss_history.clone(),
    })
}
