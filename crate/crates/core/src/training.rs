//! The optimization loop: batch assembly, the per-step two-phase schedule
//! (teacher inference and randomness first, then the differentiable student
//! pass), SGD with polynomial LR decay, EMA updates, CSV logging,
//! checkpointing, and ablation toggles.
//!
//! A step splits into:
//!  * [`plan_step`] (no gradients): draws every random element, runs DDIM
//!    and the teacher forwards, fuses the pseudo-labels, builds CutMix and
//!    patch masks. Everything a target needs is frozen here.
//!  * [`step_losses`] (pure): student forwards and loss assembly as a
//!    deterministic function of (parameters, plan). Finite-difference
//!    checks perturb parameters against a fixed plan.
//!  * commit: backward, SGD, EMA, difficulty-tracker update.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax_classes, Tape, Var, VarShape};
use crate::checkpoint::{hash_config, Checkpoint, InferenceExport};
use crate::data::{load_manifest, load_sample, Batch, DatasetManifest, SplitEntry};
use crate::error::{Error, Result};
use crate::losses::{
    batch_class_dice, loss_deno, loss_diff, loss_kd, loss_mic, loss_mix, loss_rec, total_loss,
    DifficultyTracker, DrsConfig, LossComponents, LossWeights,
};
use crate::masking::{apply_cutmix, apply_patch_mask, make_cutmix_mask, make_patch_mask, PatchMaskSpec};
use crate::network::{
    correlation_features_from, ddim_pseudo_predict, forward_labeled_diffusion, forward_plain,
    DecoderChoice, DiffusionSchedule, ModelBundle, NetConfig,
};
use crate::params::{sgd_step, SgdConfig, StoreKey};
use crate::propagation::{
    correlation_map_var, loss_corr_branch, pool_labels_majority, propagate_pooled_logits,
};
use crate::pseudo::{
    ensemble_predictions, reparameterize_smooth, RsConfig, TeacherPrediction, TeacherSource,
};
use crate::rng::{RngState, SeedRng};
use crate::vol::{one_hot_encode, ClassVolume, LabelVolume, Volume};

/// Loss-term and teacher toggles mirroring the ablation axes.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct AblationFlags {
    pub enable_mic: bool,
    pub enable_kd: bool,
    pub enable_rec: bool,
    pub enable_corr: bool,
    /// Use only the RS teacher as the pseudo-label source.
    pub teacher1_only: bool,
    /// Use only the EMA mean teacher as the pseudo-label source.
    pub teacher2_only: bool,
    /// Train on the labeled losses alone; unlabeled losses log as zero.
    pub supervised_only: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        AblationFlags {
            enable_mic: true,
            enable_kd: true,
            enable_rec: true,
            enable_corr: true,
            teacher1_only: false,
            teacher2_only: false,
            supervised_only: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct TrainConfig {
    pub data_dir: String,
    pub out_dir: String,
    pub seed: u64,
    pub epochs: usize,
    /// LR horizon and run length; 0 derives `epochs * steps_per_epoch`.
    pub max_iterations: usize,
    pub lr_init: f64,
    pub sgd: SgdConfig,
    pub batch_labeled: usize,
    pub batch_unlabeled: usize,
    /// Patch-mask drop ratio r.
    pub mask_ratio: f64,
    /// Patch size b; 0 derives extent/16.
    pub patch_size: usize,
    pub cutmix_fraction: (f64, f64),
    pub weights: LossWeights,
    pub gamma_ema: f64,
    pub diffusion_t: usize,
    pub ddim_steps: usize,
    pub rs: RsConfig,
    pub drs: DrsConfig,
    pub net: NetConfig,
    pub ablation: AblationFlags,
    /// Apply the Gumbel reparameterization to the supervised branch instead
    /// of the diffusion branch.
    pub gumbel_on_psi: bool,
    /// Scale the correlation softmax output instead of its input.
    pub literal_corr_scale: bool,
    pub log_every: usize,
    /// Checkpoint every n iterations; 0 keeps only the final one.
    pub ckpt_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            data_dir: "data".into(),
            out_dir: "runs/default".into(),
            seed: 1,
            epochs: 20,
            max_iterations: 0,
            lr_init: 0.01,
            sgd: SgdConfig::default(),
            batch_labeled: 2,
            batch_unlabeled: 2,
            mask_ratio: 0.5,
            patch_size: 0,
            cutmix_fraction: (0.2, 0.5),
            weights: LossWeights::default(),
            gamma_ema: 0.99,
            diffusion_t: 1000,
            ddim_steps: 10,
            rs: RsConfig::default(),
            drs: DrsConfig::default(),
            net: NetConfig::default(),
            ablation: AblationFlags::default(),
            gumbel_on_psi: false,
            literal_corr_scale: false,
            log_every: 10,
            ckpt_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn from_toml_str(s: &str) -> Result<TrainConfig> {
        let cfg: TrainConfig =
            toml::from_str(s).map_err(|e| Error::Config(format!("config parse: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml_path(path: &Path) -> Result<TrainConfig> {
        let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&s)
    }

    /// Canonical serialization used for the checkpoint config hash.
    pub fn canonical_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| Error::Runtime(format!("serialize config: {e}")))
    }

    pub fn config_hash(&self) -> Result<u64> {
        Ok(hash_config(&self.canonical_json()?))
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 && self.max_iterations == 0 {
            return Err(Error::Config("epochs or max_iterations must be set".into()));
        }
        if self.lr_init <= 0.0 || !self.lr_init.is_finite() {
            return Err(Error::Config(format!("lr_init {} invalid", self.lr_init)));
        }
        if self.batch_labeled == 0 {
            return Err(Error::Config("batch_labeled must be >= 1".into()));
        }
        if !self.ablation.supervised_only && self.batch_unlabeled == 0 {
            return Err(Error::Config("batch_unlabeled must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.mask_ratio) {
            return Err(Error::Config(format!("mask_ratio {} invalid", self.mask_ratio)));
        }
        if !(0.0..=1.0).contains(&self.gamma_ema) {
            return Err(Error::Config(format!("gamma_ema {} invalid", self.gamma_ema)));
        }
        if self.ablation.teacher1_only && self.ablation.teacher2_only {
            return Err(Error::Config(
                "teacher1_only and teacher2_only are mutually exclusive".into(),
            ));
        }
        if self.ddim_steps == 0 || self.ddim_steps > self.diffusion_t {
            return Err(Error::Config(format!(
                "ddim_steps {} must lie in 1..={}",
                self.ddim_steps, self.diffusion_t
            )));
        }
        self.weights.validate()?;
        self.net.validate()?;
        if self.sgd.momentum < 0.0 || self.sgd.momentum >= 1.0 || self.sgd.weight_decay < 0.0 {
            return Err(Error::Config("invalid sgd momentum/weight_decay".into()));
        }
        Ok(())
    }

    fn patch_size_for(&self, dims: crate::vol::Dims3) -> Result<usize> {
        let b = if self.patch_size > 0 {
            self.patch_size
        } else {
            (dims.l.min(dims.w).min(dims.h) / 16).max(1)
        };
        if !dims.divisible_by(b) {
            return Err(Error::Config(format!(
                "patch size {b} does not divide volume dims {dims}"
            )));
        }
        Ok(b)
    }
}

/// Epoch-cycled sampler: the unlabeled stream defines an epoch; the labeled
/// set cycles independently, reshuffled whenever it runs out.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EpochSampler {
    labeled_pool: Vec<usize>,
    unlabeled_pool: Vec<usize>,
    labeled_order: Vec<usize>,
    labeled_pos: usize,
    unlabeled_order: Vec<usize>,
    unlabeled_pos: usize,
}

impl EpochSampler {
    pub fn new(train: &[SplitEntry], cfg: &TrainConfig) -> Result<EpochSampler> {
        let labeled_pool: Vec<usize> = train
            .iter()
            .enumerate()
            .filter(|(_, e)| e.labeled)
            .map(|(i, _)| i)
            .collect();
        let unlabeled_pool: Vec<usize> = train
            .iter()
            .enumerate()
            .filter(|(_, e)| !e.labeled)
            .map(|(i, _)| i)
            .collect();
        if labeled_pool.len() < cfg.batch_labeled {
            return Err(Error::Validation(format!(
                "split 'train' has {} labeled samples, batch needs {}",
                labeled_pool.len(),
                cfg.batch_labeled
            )));
        }
        if !cfg.ablation.supervised_only && unlabeled_pool.len() < cfg.batch_unlabeled {
            return Err(Error::Validation(format!(
                "split 'train' has {} unlabeled samples, batch needs {}",
                unlabeled_pool.len(),
                cfg.batch_unlabeled
            )));
        }
        Ok(EpochSampler {
            labeled_pool,
            unlabeled_pool,
            labeled_order: Vec::new(),
            labeled_pos: 0,
            unlabeled_order: Vec::new(),
            unlabeled_pos: 0,
        })
    }

    fn draw(
        pool: &[usize],
        order: &mut Vec<usize>,
        pos: &mut usize,
        n: usize,
        rng: &mut SeedRng,
    ) -> Vec<usize> {
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            if *pos >= order.len() {
                *order = pool.to_vec();
                rng.shuffle(order);
                *pos = 0;
            }
            out.push(order[*pos]);
            *pos += 1;
        }
        out
    }

    /// Next `(labeled, unlabeled)` indices into the train split.
    pub fn next(&mut self, cfg: &TrainConfig, rng: &mut SeedRng) -> (Vec<usize>, Vec<usize>) {
        let lab = Self::draw(
            &self.labeled_pool,
            &mut self.labeled_order,
            &mut self.labeled_pos,
            cfg.batch_labeled,
            rng,
        );
        let unl = if cfg.ablation.supervised_only {
            Vec::new()
        } else {
            Self::draw(
                &self.unlabeled_pool,
                &mut self.unlabeled_order,
                &mut self.unlabeled_pos,
                cfg.batch_unlabeled,
                rng,
            )
        };
        (lab, unl)
    }

    pub fn steps_per_epoch(&self, cfg: &TrainConfig) -> usize {
        if cfg.ablation.supervised_only {
            (self.labeled_pool.len() / cfg.batch_labeled).max(1)
        } else {
            (self.unlabeled_pool.len() / cfg.batch_unlabeled).max(1)
        }
    }
}

/// Polynomial decay `lr_init * (1 - i/I)^0.9`, clamped to zero past `I`.
pub fn lr_schedule(lr_init: f64, i: usize, max_iterations: usize) -> f64 {
    if max_iterations == 0 || i >= max_iterations {
        return 0.0;
    }
    lr_init * (1.0 - i as f64 / max_iterations as f64).powf(0.9)
}

// ---------------------------------------------------------------------------
// step plan (phase A)
// ---------------------------------------------------------------------------

pub struct LabeledPlan {
    pub onehot: ClassVolume,
    pub t: usize,
    pub y_t: ClassVolume,
    /// Present when the reconstruction loss is on.
    pub patch_mask: Option<PatchMaskSpec>,
    pub teacher_logits: Option<ClassVolume>,
}

pub struct UnlabeledPlan {
    pub pseudo_hard: LabelVolume,
    pub pseudo_onehot: ClassVolume,
    /// Diffusion-branch probability map (distillation target).
    pub ddim_probs: Option<ClassVolume>,
    /// Supervised-branch probability map (distillation target).
    pub psi_probs: Option<ClassVolume>,
    pub mixed_image: Volume,
    pub mixed_onehot: ClassVolume,
    pub patch_mask: Option<PatchMaskSpec>,
    pub teacher_logits: Option<ClassVolume>,
}

pub struct StepPlan {
    pub labeled: Vec<LabeledPlan>,
    pub unlabeled: Vec<UnlabeledPlan>,
}

fn need_flags(cfg: &TrainConfig) -> (bool, bool, bool, bool) {
    let a = &cfg.ablation;
    // (teacher-1 path, psi unlabeled forward, teacher-2 path, masked flows)
    let need_t1 = !a.teacher2_only || a.enable_kd;
    let need_psi = need_t1 || a.enable_kd;
    let need_t2 = !a.teacher1_only || a.enable_rec;
    let need_mask = a.enable_mic || a.enable_rec;
    (need_t1, need_psi, need_t2, need_mask)
}

/// Phase A: draws randomness and runs every no-gradient teacher forward.
pub fn plan_step(
    bundle: &ModelBundle,
    schedule: &DiffusionSchedule,
    cfg: &TrainConfig,
    batch: &Batch,
    rng: &mut SeedRng,
) -> Result<StepPlan> {
    let classes = bundle.cfg.classes;
    let mut labeled = Vec::with_capacity(batch.labeled.len());
    for s in &batch.labeled {
        let lbl = s.label.as_ref().ok_or_else(|| {
            Error::Validation(format!("labeled sample {} missing label", s.sample_id))
        })?;
        let onehot = one_hot_encode(lbl, classes)?;
        let t = rng.index(schedule.t_count);
        let mut eps = vec![0.0; onehot.data.len()];
        rng.fill_standard_normal(&mut eps);
        let y_t = crate::network::diffusion_forward(&onehot, t, &eps, schedule)?;
        labeled.push(LabeledPlan {
            onehot,
            t,
            y_t,
            patch_mask: None,
            teacher_logits: None,
        });
    }

    let mut unlabeled = Vec::new();
    if !cfg.ablation.supervised_only {
        let (need_t1, need_psi, need_t2, need_mask) = need_flags(cfg);
        // pseudo-labels and teacher targets first
        struct Teacher {
            ddim: Option<ClassVolume>,
            psi: Option<ClassVolume>,
            t2_logits: Option<ClassVolume>,
            pseudo_hard: LabelVolume,
            pseudo_onehot: ClassVolume,
        }
        let mut teachers = Vec::with_capacity(batch.unlabeled.len());
        for s in &batch.unlabeled {
            let ddim_probs = if need_t1 {
                Some(ddim_pseudo_predict(bundle, schedule, &s.image, rng)?)
            } else {
                None
            };
            let psi_probs = if need_psi {
                let mut tape = Tape::no_grad();
                let (logits, _) = forward_plain(&mut tape, bundle, &s.image, DecoderChoice::Psi, false)?;
                Some(softmax_classes(&mut tape, &logits).to_class_volume())
            } else {
                None
            };
            let t1 = if need_t1 {
                let p_xi = ddim_probs.as_ref().unwrap();
                let psi = psi_probs.as_ref().unwrap();
                // psi probabilities as logits via log (softmax(log p) = p)
                let psi_logits = ClassVolume {
                    classes,
                    dims: psi.dims,
                    data: psi.data.iter().map(|p| p.max(1e-12).ln()).collect(),
                };
                let t1 = if cfg.gumbel_on_psi {
                    let xi_logits = ClassVolume {
                        classes,
                        dims: p_xi.dims,
                        data: p_xi.data.iter().map(|p| p.max(1e-12).ln()).collect(),
                    };
                    reparameterize_smooth(psi, &xi_logits, cfg.rs, rng)?
                } else {
                    reparameterize_smooth(p_xi, &psi_logits, cfg.rs, rng)?
                };
                Some(t1)
            } else {
                None
            };
            let (t2_logits, t2) = if need_t2 {
                let mut tape = Tape::no_grad();
                let (logits, _) = forward_plain(&mut tape, bundle, &s.image, DecoderChoice::Theta, true)?;
                let probs = softmax_classes(&mut tape, &logits).to_class_volume();
                (
                    Some(logits.to_class_volume()),
                    Some(TeacherPrediction::new(probs, TeacherSource::T2Ema)?),
                )
            } else {
                (None, None)
            };
            let ensembled = match (cfg.ablation.teacher1_only, cfg.ablation.teacher2_only) {
                (true, _) => {
                    let t1 = t1.as_ref().expect("teacher-1 required");
                    let h = crate::pseudo::entropy_map(&t1.probs);
                    crate::pseudo::ensemble_with_entropies(&t1.probs, &t1.probs, &h, &h)?
                }
                (_, true) => {
                    let t2 = t2.as_ref().expect("teacher-2 required");
                    let h = crate::pseudo::entropy_map(&t2.probs);
                    crate::pseudo::ensemble_with_entropies(&t2.probs, &t2.probs, &h, &h)?
                }
                _ => ensemble_predictions(t1.as_ref().unwrap(), t2.as_ref().unwrap())?,
            };
            let pseudo_onehot = one_hot_encode(&ensembled.hard, classes)?;
            teachers.push(Teacher {
                ddim: ddim_probs,
                psi: psi_probs,
                t2_logits,
                pseudo_hard: ensembled.hard,
                pseudo_onehot,
            });
        }
        // CutMix pairs: x_i unlabeled, x_j from the rest of the batch
        for (j, s) in batch.unlabeled.iter().enumerate() {
            let dims = s.image.dims;
            let pool_len = batch.labeled.len() + batch.unlabeled.len() - 1;
            if pool_len == 0 {
                return Err(Error::Validation(
                    "cutmix needs at least two samples in the batch".into(),
                ));
            }
            let pick = rng.index(pool_len);
            let mask = make_cutmix_mask(dims, cfg.cutmix_fraction, rng)?;
            let (xj, yj): (&Volume, LabelVolume) = if pick < batch.labeled.len() {
                (
                    &batch.labeled[pick].image,
                    batch.labeled[pick].label.clone().unwrap(),
                )
            } else {
                let mut o = pick - batch.labeled.len();
                if o >= j {
                    o += 1; // skip self
                }
                (&batch.unlabeled[o].image, teachers[o].pseudo_hard.clone())
            };
            let (mixed_image, mixed_hard) =
                apply_cutmix(&s.image, xj, &teachers[j].pseudo_hard, &yj, &mask.mask)?;
            let mixed_onehot = one_hot_encode(&mixed_hard, classes)?;
            let patch_mask = if need_mask {
                let b = cfg.patch_size_for(dims)?;
                Some(make_patch_mask(dims, cfg.mask_ratio, b, rng)?)
            } else {
                None
            };
            let t = &teachers[j];
            unlabeled.push(UnlabeledPlan {
                pseudo_hard: t.pseudo_hard.clone(),
                pseudo_onehot: t.pseudo_onehot.clone(),
                ddim_probs: if cfg.ablation.enable_kd { t.ddim.clone() } else { None },
                psi_probs: if cfg.ablation.enable_kd { t.psi.clone() } else { None },
                mixed_image,
                mixed_onehot,
                patch_mask,
                teacher_logits: if cfg.ablation.enable_rec {
                    t.t2_logits.clone()
                } else {
                    None
                },
            });
        }
        // labeled-side masks and teacher targets for the reconstruction loss
        if cfg.ablation.enable_rec {
            for (i, s) in batch.labeled.iter().enumerate() {
                let b = cfg.patch_size_for(s.image.dims)?;
                labeled[i].patch_mask = Some(make_patch_mask(s.image.dims, cfg.mask_ratio, b, rng)?);
                let mut tape = Tape::no_grad();
                let (logits, _) = forward_plain(&mut tape, bundle, &s.image, DecoderChoice::Theta, true)?;
                labeled[i].teacher_logits = Some(logits.to_class_volume());
            }
        }
    }
    Ok(StepPlan { labeled, unlabeled })
}

// ---------------------------------------------------------------------------
// losses (phase B)
// ---------------------------------------------------------------------------

/// Scalar loss values of one iteration, as logged.
#[derive(Debug, Clone, PartialEq)]
pub struct StepLossValues {
    pub total: f64,
    pub deno: f64,
    pub diff: f64,
    pub u: f64,
    pub mix: f64,
    pub mic: f64,
    pub kd: f64,
    pub rec: f64,
    pub corr: f64,
    pub class_weights: Vec<f64>,
}

pub struct StepGraph {
    pub total: Var,
    pub values: StepLossValues,
    /// This iteration's per-class Dice of the diffusion branch (committed to
    /// the tracker after the optimizer step).
    pub lambda: Vec<f64>,
}

fn zero_scalar() -> Var {
    Var::constant(vec![0.0], VarShape::Scalar)
}

/// Phase B: student forwards and the full loss graph against the frozen
/// plan. Pure in (parameters, plan); the tracker is only peeked.
pub fn step_losses(
    tape: &mut Tape,
    bundle: &ModelBundle,
    batch: &Batch,
    plan: &StepPlan,
    cfg: &TrainConfig,
    tracker: &DifficultyTracker,
) -> Result<StepGraph> {
    let classes = bundle.cfg.classes;
    let a = &cfg.ablation;

    // (1) diffusion flow on labeled volumes
    let mut deno_probs = Vec::new();
    let mut deno_targets = Vec::new();
    let mut hard_preds = Vec::new();
    for (s, p) in batch.labeled.iter().zip(plan.labeled.iter()) {
        let (logits, _) = forward_labeled_diffusion(tape, bundle, &s.image, &p.y_t, p.t)?;
        let probs = softmax_classes(tape, &logits);
        hard_preds.push(probs.to_class_volume().argmax());
        deno_probs.push(probs);
        deno_targets.push(&p.onehot);
    }
    let l_deno = loss_deno(tape, &deno_probs, &deno_targets)?;

    // (2) difficulty-aware supervised flow
    let gts: Vec<LabelVolume> = batch
        .labeled
        .iter()
        .map(|s| s.label.clone().expect("labeled sample"))
        .collect();
    let lambda = batch_class_dice(&hard_preds, &gts, classes);
    let class_weights = tracker.peek_weights(&lambda);
    let mut psi_probs_vars = Vec::new();
    let mut psi_encs = Vec::new();
    let mut psi_logits_vars = Vec::new();
    for s in &batch.labeled {
        let (logits, enc) = forward_plain(tape, bundle, &s.image, DecoderChoice::Psi, false)?;
        psi_probs_vars.push(softmax_classes(tape, &logits));
        psi_logits_vars.push(logits);
        psi_encs.push(enc);
    }
    let l_diff = loss_diff(tape, &psi_probs_vars, &deno_targets, &class_weights)?;

    if a.supervised_only {
        let mix = zero_scalar();
        let parts = LossComponents {
            deno: l_deno.clone(),
            diff: l_diff.clone(),
            mix: mix.clone(),
            mic: None,
            kd: None,
            rec: None,
            corr: None,
        };
        let total = total_loss(tape, &parts, &cfg.weights);
        let values = StepLossValues {
            total: total.scalar_value(),
            deno: l_deno.scalar_value(),
            diff: l_diff.scalar_value(),
            u: 0.0,
            mix: 0.0,
            mic: 0.0,
            kd: 0.0,
            rec: 0.0,
            corr: 0.0,
            class_weights,
        };
        check_finite(&values)?;
        return Ok(StepGraph {
            total,
            values,
            lambda,
        });
    }

    // (3)-(4) theta flow on unlabeled volumes; the plain unsupervised loss is
    // evaluated for the log (the total follows the weighted composition)
    let mut theta_probs_vars = Vec::new();
    let mut theta_logits_vars = Vec::new();
    let mut theta_encs = Vec::new();
    for s in &batch.unlabeled {
        let (logits, enc) = forward_plain(tape, bundle, &s.image, DecoderChoice::Theta, false)?;
        theta_probs_vars.push(softmax_classes(tape, &logits));
        theta_logits_vars.push(logits);
        theta_encs.push(enc);
    }
    let mut l_u_value = 0.0;
    for (p, u) in theta_probs_vars.iter().zip(plan.unlabeled.iter()) {
        l_u_value += crate::losses::dice_ce(&p.to_class_volume(), &u.pseudo_onehot)?;
    }
    l_u_value /= plan.unlabeled.len().max(1) as f64;

    // (5) CutMix global consistency
    let mut mix_probs = Vec::new();
    let mut mix_targets = Vec::new();
    for u in &plan.unlabeled {
        let (logits, _) = forward_plain(tape, bundle, &u.mixed_image, DecoderChoice::Theta, false)?;
        mix_probs.push(softmax_classes(tape, &logits));
        mix_targets.push(&u.mixed_onehot);
    }
    let l_mix = loss_mix(tape, &mix_probs, &mix_targets)?;

    // (6) patch-masked local consistency + (7) masked reconstruction
    let mut masked_unl_logits = Vec::new();
    for (s, u) in batch.unlabeled.iter().zip(plan.unlabeled.iter()) {
        if let Some(m) = &u.patch_mask {
            let masked = apply_patch_mask(&s.image, m)?;
            let (logits, _) = forward_plain(tape, bundle, &masked, DecoderChoice::Theta, false)?;
            masked_unl_logits.push(logits);
        }
    }
    let l_mic = if a.enable_mic {
        let probs: Vec<Var> = masked_unl_logits
            .iter()
            .map(|l| softmax_classes(tape, l))
            .collect();
        let targets: Vec<&ClassVolume> = plan.unlabeled.iter().map(|u| &u.pseudo_onehot).collect();
        Some(loss_mic(tape, &probs, &targets)?)
    } else {
        None
    };
    let l_rec = if a.enable_rec {
        let mut student = Vec::new();
        let mut teacher = Vec::new();
        for (s, p) in batch.labeled.iter().zip(plan.labeled.iter()) {
            let m = p.patch_mask.as_ref().expect("labeled mask planned");
            let masked = apply_patch_mask(&s.image, m)?;
            let (logits, _) = forward_plain(tape, bundle, &masked, DecoderChoice::Theta, false)?;
            student.push(logits);
            teacher.push(p.teacher_logits.as_ref().expect("teacher target planned"));
        }
        for (logits, u) in masked_unl_logits.iter().zip(plan.unlabeled.iter()) {
            student.push(logits.clone());
            teacher.push(u.teacher_logits.as_ref().expect("teacher target planned"));
        }
        Some(loss_rec(tape, &student, &teacher)?)
    } else {
        None
    };

    // (8) knowledge distillation from the two auxiliary branches
    let l_kd = if a.enable_kd {
        let xi: Vec<&ClassVolume> = plan
            .unlabeled
            .iter()
            .map(|u| u.ddim_probs.as_ref().expect("kd targets planned"))
            .collect();
        let psi: Vec<&ClassVolume> = plan
            .unlabeled
            .iter()
            .map(|u| u.psi_probs.as_ref().expect("kd targets planned"))
            .collect();
        Some(loss_kd(tape, &theta_probs_vars, &xi, &psi)?)
    } else {
        None
    };

    // (9) correlation maps and label propagation, both branches
    let l_corr = if a.enable_corr {
        let mut u_terms = Vec::new();
        for ((enc, logits), u) in theta_encs
            .iter()
            .zip(theta_logits_vars.iter())
            .zip(plan.unlabeled.iter())
        {
            let (e1, e2) = correlation_features_from(tape, &bundle.cfg, &bundle.corr, enc)?;
            let c = correlation_map_var(tape, &e1, &e2, cfg.literal_corr_scale)?;
            let (prop, grid) = propagate_pooled_logits(tape, logits, &c)?;
            let factor = u.pseudo_hard.dims.l / grid.l;
            let pooled = pool_labels_majority(&u.pseudo_hard, factor, classes)?;
            let target = one_hot_encode(&pooled, classes)?;
            u_terms.push(loss_corr_branch(tape, &prop, &target)?);
        }
        let mut l_terms = Vec::new();
        for ((enc, logits), s) in psi_encs
            .iter()
            .zip(psi_logits_vars.iter())
            .zip(batch.labeled.iter())
        {
            let (e1, e2) = correlation_features_from(tape, &bundle.cfg, &bundle.corr, enc)?;
            let c = correlation_map_var(tape, &e1, &e2, cfg.literal_corr_scale)?;
            let (prop, grid) = propagate_pooled_logits(tape, logits, &c)?;
            let factor = s.image.dims.l / grid.l;
            let gt = s.label.as_ref().expect("labeled sample");
            let pooled = pool_labels_majority(gt, factor, classes)?;
            let target = one_hot_encode(&pooled, classes)?;
            l_terms.push(loss_corr_branch(tape, &prop, &target)?);
        }
        let w_u = 1.0 / u_terms.len().max(1) as f64;
        let w_l = 1.0 / l_terms.len().max(1) as f64;
        let mut terms: Vec<(Var, f64)> = u_terms.into_iter().map(|t| (t, w_u)).collect();
        terms.extend(l_terms.into_iter().map(|t| (t, w_l)));
        Some(crate::autodiff::weighted_sum(tape, &terms))
    } else {
        None
    };

    let parts = LossComponents {
        deno: l_deno,
        diff: l_diff,
        mix: l_mix,
        mic: l_mic,
        kd: l_kd,
        rec: l_rec,
        corr: l_corr,
    };
    let total = total_loss(tape, &parts, &cfg.weights);
    let values = StepLossValues {
        total: total.scalar_value(),
        deno: parts.deno.scalar_value(),
        diff: parts.diff.scalar_value(),
        u: l_u_value,
        mix: parts.mix.scalar_value(),
        mic: parts.mic.as_ref().map_or(0.0, Var::scalar_value),
        kd: parts.kd.as_ref().map_or(0.0, Var::scalar_value),
        rec: parts.rec.as_ref().map_or(0.0, Var::scalar_value),
        corr: parts.corr.as_ref().map_or(0.0, Var::scalar_value),
        class_weights,
    };
    check_finite(&values)?;
    Ok(StepGraph {
        total,
        values,
        lambda,
    })
}

fn check_finite(v: &StepLossValues) -> Result<()> {
    let parts = [
        ("total", v.total),
        ("deno", v.deno),
        ("diff", v.diff),
        ("u", v.u),
        ("mix", v.mix),
        ("mic", v.mic),
        ("kd", v.kd),
        ("rec", v.rec),
        ("corr", v.corr),
    ];
    let bad: Vec<&str> = parts
        .iter()
        .filter(|(_, x)| !x.is_finite())
        .map(|(n, _)| *n)
        .collect();
    if bad.is_empty() {
        Ok(())
    } else {
        Err(Error::Runtime(format!(
            "non-finite loss components: {} (all: {:?})",
            bad.join(", "),
            parts
        )))
    }
}

// ---------------------------------------------------------------------------
// train state and loop
// ---------------------------------------------------------------------------

pub struct TrainState {
    pub cfg: TrainConfig,
    pub manifest: DatasetManifest,
    pub data_dir: PathBuf,
    pub bundle: ModelBundle,
    pub schedule: DiffusionSchedule,
    pub tracker: DifficultyTracker,
    pub sampler: EpochSampler,
    pub rng: SeedRng,
    pub iteration: usize,
    pub max_iterations: usize,
}

impl TrainState {
    pub fn new(cfg: &TrainConfig, manifest: DatasetManifest, data_dir: &Path) -> Result<TrainState> {
        cfg.validate()?;
        let mut net = cfg.net.clone();
        net.classes = manifest.classes;
        let bundle = ModelBundle::init(&net, cfg.seed)?;
        let schedule = DiffusionSchedule::linear(cfg.diffusion_t, cfg.ddim_steps)?;
        let sampler = EpochSampler::new(&manifest.train, cfg)?;
        let max_iterations = if cfg.max_iterations > 0 {
            cfg.max_iterations
        } else {
            cfg.epochs * sampler.steps_per_epoch(cfg)
        };
        Ok(TrainState {
            tracker: DifficultyTracker::new(manifest.classes, cfg.drs),
            sampler,
            rng: SeedRng::new(cfg.seed).derive(0x747261696e),
            iteration: 0,
            max_iterations,
            bundle,
            schedule,
            manifest,
            data_dir: data_dir.to_path_buf(),
            cfg: cfg.clone(),
        })
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut extra = std::collections::BTreeMap::new();
        extra.insert("train_config".into(), self.cfg.canonical_json()?);
        extra.insert(
            "rng".into(),
            serde_json::to_string(&self.rng.state()).map_err(|e| Error::Runtime(e.to_string()))?,
        );
        extra.insert(
            "sampler".into(),
            serde_json::to_string(&self.sampler).map_err(|e| Error::Runtime(e.to_string()))?,
        );
        extra.insert(
            "tracker".into(),
            serde_json::to_string(&self.tracker).map_err(|e| Error::Runtime(e.to_string()))?,
        );
        Ok(Checkpoint {
            config_hash: self.cfg.config_hash()?,
            iteration: self.iteration as u64,
            net_cfg: self.bundle.cfg.clone(),
            schedule: self.schedule.clone(),
            stores: vec![
                ("enc".into(), self.bundle.enc.clone()),
                ("dec_xi".into(), self.bundle.dec_xi.clone()),
                ("dec_psi".into(), self.bundle.dec_psi.clone()),
                ("dec_theta".into(), self.bundle.dec_theta.clone()),
                ("corr".into(), self.bundle.corr.clone()),
                ("teacher_enc".into(), self.bundle.teacher_enc.clone()),
                ("teacher_dec_theta".into(), self.bundle.teacher_dec_theta.clone()),
            ],
            extra,
        })
    }

    pub fn from_checkpoint(
        cfg: &TrainConfig,
        manifest: DatasetManifest,
        data_dir: &Path,
        ckpt: &Checkpoint,
    ) -> Result<TrainState> {
        if ckpt.config_hash != cfg.config_hash()? {
            return Err(Error::Config(
                "checkpoint config hash does not match the supplied config".into(),
            ));
        }
        let mut state = TrainState::new(cfg, manifest, data_dir)?;
        state.bundle = ModelBundle {
            cfg: ckpt.net_cfg.clone(),
            enc: ckpt.store("enc")?.clone(),
            dec_xi: ckpt.store("dec_xi")?.clone(),
            dec_psi: ckpt.store("dec_psi")?.clone(),
            dec_theta: ckpt.store("dec_theta")?.clone(),
            corr: ckpt.store("corr")?.clone(),
            teacher_enc: ckpt.store("teacher_enc")?.clone(),
            teacher_dec_theta: ckpt.store("teacher_dec_theta")?.clone(),
        };
        state.schedule = ckpt.schedule.clone();
        state.iteration = ckpt.iteration as usize;
        let rng_state: RngState = serde_json::from_str(
            ckpt.extra.get("rng").ok_or_else(|| Error::Runtime("checkpoint missing rng".into()))?,
        )
        .map_err(|e| Error::Runtime(e.to_string()))?;
        state.rng = SeedRng::restore(rng_state);
        state.sampler = serde_json::from_str(
            ckpt.extra
                .get("sampler")
                .ok_or_else(|| Error::Runtime("checkpoint missing sampler".into()))?,
        )
        .map_err(|e| Error::Runtime(e.to_string()))?;
        state.tracker = serde_json::from_str(
            ckpt.extra
                .get("tracker")
                .ok_or_else(|| Error::Runtime("checkpoint missing tracker".into()))?,
        )
        .map_err(|e| Error::Runtime(e.to_string()))?;
        Ok(state)
    }

    pub fn load_batch(&self, lab_idx: &[usize], unl_idx: &[usize]) -> Result<Batch> {
        let labeled = lab_idx
            .iter()
            .map(|&i| load_sample(&self.data_dir, &self.manifest, &self.manifest.train[i], true))
            .collect::<Result<Vec<_>>>()?;
        let unlabeled = unl_idx
            .iter()
            .map(|&i| load_sample(&self.data_dir, &self.manifest, &self.manifest.train[i], false))
            .collect::<Result<Vec<_>>>()?;
        Ok(Batch { labeled, unlabeled })
    }

    /// Inference export: the theta decoder for semi-supervised runs, psi for
    /// supervised-only runs (theta never trains there).
    pub fn inference_export(&self) -> Result<InferenceExport> {
        let (role, dec) = if self.cfg.ablation.supervised_only {
            ("psi", self.bundle.dec_psi.clone())
        } else {
            ("theta", self.bundle.dec_theta.clone())
        };
        Ok(InferenceExport {
            config_hash: self.cfg.config_hash()?,
            net_cfg: self.bundle.cfg.clone(),
            decoder_role: role.into(),
            enc: self.bundle.enc.clone(),
            dec,
        })
    }
}

/// One full optimization step: plan, losses, backward, SGD, EMA, tracker.
pub fn train_step(state: &mut TrainState, batch: &Batch) -> Result<StepLossValues> {
    let plan = plan_step(&state.bundle, &state.schedule, &state.cfg, batch, &mut state.rng)?;
    let mut tape = Tape::new();
    let graph = step_losses(&mut tape, &state.bundle, batch, &plan, &state.cfg, &state.tracker)?;
    let grads = tape.backward(&graph.total)?;
    state.bundle.zero_grads();
    for (key, idx, g) in tape.param_grads(&grads) {
        let dst = &mut state.bundle.student_store_mut(key).entries[idx].grad;
        for (d, s) in dst.iter_mut().zip(g.iter()) {
            *d += s;
        }
    }
    let lr = lr_schedule(state.cfg.lr_init, state.iteration, state.max_iterations);
    for key in StoreKey::ALL {
        sgd_step(state.bundle.student_store_mut(key), lr, state.cfg.sgd);
    }
    state.bundle.ema_update(state.cfg.gamma_ema)?;
    state.tracker.update(&graph.lambda)?;
    state.iteration += 1;
    Ok(graph.values)
}

/// Artifacts written by a full run.
#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub out_dir: PathBuf,
    pub loss_csv: PathBuf,
    pub final_checkpoint: PathBuf,
    pub export: PathBuf,
    pub iterations: usize,
}

pub fn csv_header(classes: usize) -> String {
    let mut s = String::from("iteration,lr,total,deno,diff,u,mix,mic,kd,rec,corr");
    for k in 0..classes {
        s.push_str(&format!(",w{k}"));
    }
    s.push('\n');
    s
}

pub fn csv_row(iteration: usize, lr: f64, v: &StepLossValues) -> String {
    let mut s = format!(
        "{iteration},{lr},{},{},{},{},{},{},{},{},{}",
        v.total, v.deno, v.diff, v.u, v.mix, v.mic, v.kd, v.rec, v.corr
    );
    for w in &v.class_weights {
        s.push_str(&format!(",{w}"));
    }
    s.push('\n');
    s
}

/// Runs (or resumes) training to completion, writing the loss CSV, periodic
/// checkpoints, the final checkpoint, and the inference export.
pub fn run_training(cfg: &TrainConfig, resume: Option<&Path>) -> Result<RunArtifacts> {
    cfg.validate()?;
    let data_dir = PathBuf::from(&cfg.data_dir);
    let manifest = load_manifest(&data_dir)?;
    let out_dir = PathBuf::from(&cfg.out_dir);
    fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
    let mut state = match resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            TrainState::from_checkpoint(cfg, manifest, &data_dir, &ckpt)?
        }
        None => TrainState::new(cfg, manifest, &data_dir)?,
    };

    let loss_csv = out_dir.join("loss.csv");
    let mut csv = fs::File::create(&loss_csv).map_err(|e| Error::io(&loss_csv, e))?;
    csv.write_all(csv_header(state.manifest.classes).as_bytes())
        .map_err(|e| Error::io(&loss_csv, e))?;

    while state.iteration < state.max_iterations {
        let (lab, unl) = state.sampler.next(&state.cfg, &mut state.rng);
        let batch = state.load_batch(&lab, &unl)?;
        let iteration = state.iteration;
        let lr = lr_schedule(state.cfg.lr_init, iteration, state.max_iterations);
        let values = train_step(&mut state, &batch)?;
        csv.write_all(csv_row(iteration, lr, &values).as_bytes())
            .map_err(|e| Error::io(&loss_csv, e))?;
        if cfg.log_every > 0 && iteration % cfg.log_every == 0 {
            eprintln!(
                "iter {iteration}/{}: total {:.4} deno {:.4} diff {:.4} mix {:.4}",
                state.max_iterations, values.total, values.deno, values.diff, values.mix
            );
        }
        if cfg.ckpt_every > 0 && state.iteration % cfg.ckpt_every == 0 && state.iteration < state.max_iterations
        {
            let path = out_dir.join(format!("checkpoint_iter{:06}.ckpt", state.iteration));
            state.to_checkpoint()?.save(&path)?;
        }
    }
    csv.flush().map_err(|e| Error::io(&loss_csv, e))?;

    let final_checkpoint = out_dir.join("checkpoint_final.ckpt");
    state.to_checkpoint()?.save(&final_checkpoint)?;
    let export_path = out_dir.join("inference.export");
    state.inference_export()?.save(&export_path)?;
    Ok(RunArtifacts {
        out_dir,
        loss_csv,
        final_checkpoint,
        export: export_path,
        iterations: state.iteration,
    })
}
