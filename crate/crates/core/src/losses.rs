//! Training objectives: denoising and difficulty-weighted supervised losses,
//! the unsupervised / CutMix / masked-modeling DiceCE family, masked
//! reconstruction, soft-dice distillation, and the weighted total.
//!
//! Graph-building assemblers operate on tape [`Var`]s (student side) against
//! detached constant targets; thin plain-value wrappers evaluate the same
//! fused kernels on a no-grad tape.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::autodiff::{
    dice_ce_loss, dice_ce_per_class_weighted, rec_ratio_loss, soft_dice_loss, weighted_sum, Tape,
    Var, VarShape,
};
use crate::error::{Error, Result};
use crate::vol::{ClassVolume, LabelVolume};

/// Coefficients of the optional total-loss terms.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub eta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        // masked-modeling 2.0, distillation 0.1, reconstruction 0.2,
        // correlation 1.2
        LossWeights {
            alpha: 2.0,
            beta: 0.1,
            gamma: 0.2,
            eta: 1.2,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("eta", self.eta),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("loss weight {name} = {v} invalid")));
            }
        }
        Ok(())
    }
}

fn constant_probs(p: &ClassVolume) -> Var {
    Var::constant(p.data.clone(), VarShape::Chan(p.classes, p.dims))
}

/// `0.5 * (CE + Dice)` on plain values.
pub fn dice_ce(probs: &ClassVolume, target: &ClassVolume) -> Result<f64> {
    let mut tape = Tape::no_grad();
    Ok(dice_ce_loss(&mut tape, &constant_probs(probs), &target.data)?.scalar_value())
}

/// Per-class weighted DiceCE on plain values (one-vs-rest CE per channel).
pub fn dice_ce_per_class(probs: &ClassVolume, target: &ClassVolume, weights: &[f64]) -> Result<f64> {
    let mut tape = Tape::no_grad();
    Ok(
        dice_ce_per_class_weighted(&mut tape, &constant_probs(probs), &target.data, weights)?
            .scalar_value(),
    )
}

/// Squared-denominator soft dice on plain probability maps.
pub fn soft_dice(p: &ClassVolume, q: &ClassVolume) -> Result<f64> {
    let mut tape = Tape::no_grad();
    Ok(soft_dice_loss(&mut tape, &constant_probs(p), &q.data)?.scalar_value())
}

/// Teacher-normalized squared logit error on plain values.
pub fn rec_ratio(s: &ClassVolume, t: &ClassVolume) -> Result<f64> {
    let mut tape = Tape::no_grad();
    Ok(rec_ratio_loss(&mut tape, &constant_probs(s), &t.data)?.scalar_value())
}

fn batch_mean(tape: &mut Tape, terms: Vec<Var>) -> Result<Var> {
    if terms.is_empty() {
        return Err(Error::Validation("loss over an empty batch".into()));
    }
    let w = 1.0 / terms.len() as f64;
    Ok(weighted_sum(
        tape,
        &terms.into_iter().map(|t| (t, w)).collect::<Vec<_>>(),
    ))
}

/// Mean DiceCE of a batch of probability maps against one-hot targets.
/// Serves the denoising, unsupervised, CutMix, and masked-modeling losses,
/// which share this kernel and differ only in what produced the inputs.
pub fn batch_dice_ce(tape: &mut Tape, probs: &[Var], targets: &[&ClassVolume]) -> Result<Var> {
    if probs.len() != targets.len() {
        return Err(Error::Shape(format!(
            "batch size mismatch: {} predictions vs {} targets",
            probs.len(),
            targets.len()
        )));
    }
    let mut terms = Vec::with_capacity(probs.len());
    for (p, t) in probs.iter().zip(targets.iter()) {
        terms.push(dice_ce_loss(tape, p, &t.data)?);
    }
    batch_mean(tape, terms)
}

/// Denoising loss of the diffusion branch over the labeled batch.
pub fn loss_deno(tape: &mut Tape, probs: &[Var], targets: &[&ClassVolume]) -> Result<Var> {
    batch_dice_ce(tape, probs, targets)
}

/// Unsupervised loss of the theta branch against hard pseudo-labels.
pub fn loss_u(tape: &mut Tape, probs: &[Var], pseudo: &[&ClassVolume]) -> Result<Var> {
    batch_dice_ce(tape, probs, pseudo)
}

/// Global-consistency loss on CutMix volumes against mixed targets.
pub fn loss_mix(tape: &mut Tape, probs: &[Var], mixed_targets: &[&ClassVolume]) -> Result<Var> {
    batch_dice_ce(tape, probs, mixed_targets)
}

/// Local-consistency loss: masked-input predictions against the full
/// pseudo-label, evaluated over all voxels.
pub fn loss_mic(tape: &mut Tape, probs: &[Var], pseudo: &[&ClassVolume]) -> Result<Var> {
    batch_dice_ce(tape, probs, pseudo)
}

/// Difficulty-weighted supervised loss of the psi branch.
pub fn loss_diff(
    tape: &mut Tape,
    probs: &[Var],
    targets: &[&ClassVolume],
    class_weights: &[f64],
) -> Result<Var> {
    if probs.len() != targets.len() {
        return Err(Error::Shape("batch size mismatch".into()));
    }
    let mut terms = Vec::with_capacity(probs.len());
    for (p, t) in probs.iter().zip(targets.iter()) {
        terms.push(dice_ce_per_class_weighted(tape, p, &t.data, class_weights)?);
    }
    batch_mean(tape, terms)
}

/// Masked reconstruction: mean over the labeled+unlabeled batch of
/// `||s - t||^2 / ||t||^2` on voxel-wise logits, teacher side detached.
pub fn loss_rec(tape: &mut Tape, student_logits: &[Var], teacher_logits: &[&ClassVolume]) -> Result<Var> {
    if student_logits.len() != teacher_logits.len() {
        return Err(Error::Shape("batch size mismatch".into()));
    }
    let mut terms = Vec::with_capacity(student_logits.len());
    for (s, t) in student_logits.iter().zip(teacher_logits.iter()) {
        terms.push(rec_ratio_loss(tape, s, &t.data)?);
    }
    batch_mean(tape, terms)
}

/// Distillation: mean over the unlabeled batch of
/// `sdice(p_theta, p_xi) + sdice(p_theta, p_psi)`, teacher maps detached.
pub fn loss_kd(
    tape: &mut Tape,
    p_theta: &[Var],
    p_xi: &[&ClassVolume],
    p_psi: &[&ClassVolume],
) -> Result<Var> {
    if p_theta.len() != p_xi.len() || p_theta.len() != p_psi.len() {
        return Err(Error::Shape("batch size mismatch".into()));
    }
    let mut terms = Vec::with_capacity(p_theta.len());
    for ((p, xi), psi) in p_theta.iter().zip(p_xi.iter()).zip(p_psi.iter()) {
        let a = soft_dice_loss(tape, p, &xi.data)?;
        let b = soft_dice_loss(tape, p, &psi.data)?;
        terms.push(weighted_sum(tape, &[(a, 1.0), (b, 1.0)]));
    }
    batch_mean(tape, terms)
}

/// Scalar components of one iteration; disabled terms are `None` and
/// contribute exactly zero.
pub struct LossComponents {
    pub deno: Var,
    pub diff: Var,
    pub mix: Var,
    pub mic: Option<Var>,
    pub kd: Option<Var>,
    pub rec: Option<Var>,
    pub corr: Option<Var>,
}

/// `L = deno + diff + mix + alpha*mic + beta*kd + gamma*rec + eta*corr`.
pub fn total_loss(tape: &mut Tape, parts: &LossComponents, weights: &LossWeights) -> Var {
    let mut terms = vec![
        (parts.deno.clone(), 1.0),
        (parts.diff.clone(), 1.0),
        (parts.mix.clone(), 1.0),
    ];
    if let Some(mic) = &parts.mic {
        terms.push((mic.clone(), weights.alpha));
    }
    if let Some(kd) = &parts.kd {
        terms.push((kd.clone(), weights.beta));
    }
    if let Some(rec) = &parts.rec {
        terms.push((rec.clone(), weights.gamma));
    }
    if let Some(corr) = &parts.corr {
        terms.push((corr.clone(), weights.eta));
    }
    weighted_sum(tape, &terms)
}

/// Plain-value total from already-logged components (zeros for disabled
/// terms); mirrors [`total_loss`] for log-consistency checks.
pub fn total_from_values(
    deno: f64,
    diff: f64,
    mix: f64,
    mic: f64,
    kd: f64,
    rec: f64,
    corr: f64,
    w: &LossWeights,
) -> f64 {
    deno + diff + mix + w.alpha * mic + w.beta * kd + w.gamma * rec + w.eta * corr
}

// ---------------------------------------------------------------------------
// difficulty-aware re-weighting
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct DrsConfig {
    /// Trailing accumulation window (iterations).
    pub window: usize,
    /// Outlier-damping exponent on `d = du/dl`.
    pub exponent: f64,
    /// Weight floor keeping every class trained.
    pub w_min: f64,
    /// Dice floor applied before log ratios.
    pub lambda_floor: f64,
    /// Multiply by the normalized inverse-Dice factor `K(1-l_k)/sum(1-l_j)`;
    /// off means that factor is 1.
    pub inverse_dice_factor: bool,
}

impl Default for DrsConfig {
    fn default() -> Self {
        DrsConfig {
            window: 50,
            exponent: 0.2,
            w_min: 0.1,
            lambda_floor: 1e-4,
            inverse_dice_factor: true,
        }
    }
}

/// Windowed accumulators of per-class Dice dynamics.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DifficultyTracker {
    pub cfg: DrsConfig,
    pub classes: usize,
    prev_lambda: Option<Vec<f64>>,
    latest_lambda: Vec<f64>,
    history_len: usize,
    /// Per-iteration `(du_term, dl_term)` pairs per class, oldest first.
    terms: VecDeque<(Vec<f64>, Vec<f64>)>,
}

/// Per-class accumulator snapshot.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DrsStat {
    pub du: f64,
    pub dl: f64,
    pub d: f64,
}

impl DifficultyTracker {
    pub fn new(classes: usize, cfg: DrsConfig) -> Self {
        DifficultyTracker {
            cfg,
            classes,
            prev_lambda: None,
            latest_lambda: vec![1.0; classes],
            history_len: 0,
            terms: VecDeque::new(),
        }
    }

    pub fn history_len(&self) -> usize {
        self.history_len
    }

    fn gated_terms(&self, lambda: &[f64]) -> Option<(Vec<f64>, Vec<f64>)> {
        let prev = self.prev_lambda.as_ref()?;
        let mut du = vec![0.0; self.classes];
        let mut dl = vec![0.0; self.classes];
        for k in 0..self.classes {
            let cur = lambda[k].max(self.cfg.lambda_floor);
            let pre = prev[k].max(self.cfg.lambda_floor);
            let delta = lambda[k] - prev[k];
            let ratio = (cur / pre).ln();
            // falling Dice feeds du, rising Dice feeds dl
            du[k] = delta.min(0.0) * ratio;
            dl[k] = delta.max(0.0) * ratio;
        }
        Some((du, dl))
    }

    /// Records this iteration's per-class Dice of the diffusion branch.
    pub fn update(&mut self, lambda: &[f64]) -> Result<()> {
        if lambda.len() != self.classes {
            return Err(Error::Shape(format!(
                "lambda length {} vs {} classes",
                lambda.len(),
                self.classes
            )));
        }
        if lambda.iter().any(|l| !(0.0..=1.0).contains(l)) {
            return Err(Error::Validation("dice scores must lie in [0, 1]".into()));
        }
        if let Some(t) = self.gated_terms(lambda) {
            self.terms.push_back(t);
            while self.terms.len() > self.cfg.window {
                self.terms.pop_front();
            }
        }
        self.prev_lambda = Some(lambda.to_vec());
        self.latest_lambda = lambda.to_vec();
        self.history_len += 1;
        Ok(())
    }

    /// Windowed `du`, `dl`, and their ratio (`d = 0` when `dl = 0`).
    pub fn stats(&self) -> Vec<DrsStat> {
        let mut out = vec![
            DrsStat {
                du: 0.0,
                dl: 0.0,
                d: 0.0
            };
            self.classes
        ];
        for (du_t, dl_t) in &self.terms {
            for k in 0..self.classes {
                out[k].du += du_t[k];
                out[k].dl += dl_t[k];
            }
        }
        for s in out.iter_mut() {
            s.d = if s.dl == 0.0 { 0.0 } else { s.du / s.dl };
        }
        out
    }

    fn weights_from(&self, stats: &[DrsStat], lambda: &[f64]) -> Vec<f64> {
        let k = self.classes;
        let mut inv: Vec<f64> = lambda.iter().map(|l| (1.0 - l).max(0.0)).collect();
        let inv_sum: f64 = inv.iter().sum();
        if self.cfg.inverse_dice_factor && inv_sum > 1e-9 {
            inv.iter_mut().for_each(|v| *v = k as f64 * *v / inv_sum);
        } else {
            inv.iter_mut().for_each(|v| *v = 1.0);
        }
        stats
            .iter()
            .zip(inv.iter())
            .map(|(s, w_l)| (w_l * s.d.powf(self.cfg.exponent)).max(self.cfg.w_min))
            .collect()
    }

    /// Current per-class weights; unit weights until two Dice observations
    /// have arrived.
    pub fn weights(&self) -> Vec<f64> {
        if self.history_len < 2 {
            return vec![1.0; self.classes];
        }
        self.weights_from(&self.stats(), &self.latest_lambda)
    }

    /// Weights as they would be after `update(lambda)`, without mutating the
    /// tracker (the step computes weights from the current iteration's Dice
    /// before committing it).
    pub fn peek_weights(&self, lambda: &[f64]) -> Vec<f64> {
        if self.history_len < 1 {
            return vec![1.0; self.classes];
        }
        let mut stats = self.stats();
        if let Some((du_t, dl_t)) = self.gated_terms(lambda) {
            // slide the window forward by one
            if self.terms.len() >= self.cfg.window {
                if let Some((du_old, dl_old)) = self.terms.front() {
                    for k in 0..self.classes {
                        stats[k].du -= du_old[k];
                        stats[k].dl -= dl_old[k];
                    }
                }
            }
            for k in 0..self.classes {
                stats[k].du += du_t[k];
                stats[k].dl += dl_t[k];
                stats[k].d = if stats[k].dl == 0.0 {
                    0.0
                } else {
                    stats[k].du / stats[k].dl
                };
            }
        }
        self.weights_from(&stats, lambda)
    }
}

/// Per-class hard Dice over a batch (voxel counts pooled across samples);
/// classes empty on both sides score 1, empty on one side 0.
pub fn batch_class_dice(preds: &[LabelVolume], gts: &[LabelVolume], classes: usize) -> Vec<f64> {
    let mut inter = vec![0u64; classes];
    let mut psum = vec![0u64; classes];
    let mut gsum = vec![0u64; classes];
    for (p, g) in preds.iter().zip(gts.iter()) {
        for (pv, gv) in p.data.iter().zip(g.data.iter()) {
            psum[*pv as usize] += 1;
            gsum[*gv as usize] += 1;
            if pv == gv {
                inter[*pv as usize] += 1;
            }
        }
    }
    (0..classes)
        .map(|k| {
            let denom = psum[k] + gsum[k];
            if denom == 0 {
                1.0
            } else {
                2.0 * inter[k] as f64 / denom as f64
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vol::Dims3;

    fn onehot_of(labels: &[u8], classes: usize, dims: Dims3) -> ClassVolume {
        let lbl = LabelVolume::from_vec(dims, labels.to_vec()).unwrap();
        crate::vol::one_hot_encode(&lbl, classes).unwrap()
    }

    #[test]
    fn dice_ce_perfect_prediction_is_tiny() {
        let dims = Dims3::new(2, 2, 2);
        let target = onehot_of(&[0, 1, 0, 1, 1, 0, 0, 1], 2, dims);
        let loss = dice_ce(&target, &target).unwrap();
        assert!(loss < 0.01, "loss {loss}");
    }

    #[test]
    fn dice_ce_uniform_on_balanced_two_voxels() {
        // CE = ln 2, Dice ~ 0.5 -> total ~ 0.5966
        let dims = Dims3::new(1, 1, 2);
        let probs = ClassVolume::from_vec(2, dims, vec![0.5, 0.5, 0.5, 0.5]).unwrap();
        let target = onehot_of(&[0, 1], 2, dims);
        let loss = dice_ce(&probs, &target).unwrap();
        assert!((loss - 0.5966).abs() < 1e-3, "loss {loss}");
    }

    #[test]
    fn dice_ce_permutation_equivariant() {
        let dims = Dims3::new(2, 2, 2);
        let mut rng = crate::rng::SeedRng::new(3);
        let labels: Vec<u8> = (0..8).map(|_| rng.index(2) as u8).collect();
        let target = onehot_of(&labels, 2, dims);
        let mut probs = ClassVolume::zeros(2, dims);
        for v in 0..8 {
            let a = rng.uniform_range(0.1, 0.9);
            probs.data[v] = a;
            probs.data[8 + v] = 1.0 - a;
        }
        let base = dice_ce(&probs, &target).unwrap();
        // shuffle voxels identically in both
        let perm: Vec<usize> = vec![5, 2, 7, 0, 3, 6, 1, 4];
        let mut probs2 = ClassVolume::zeros(2, dims);
        let mut labels2 = vec![0u8; 8];
        for (dst, &src) in perm.iter().enumerate() {
            probs2.data[dst] = probs.data[src];
            probs2.data[8 + dst] = probs.data[8 + src];
            labels2[dst] = labels[src];
        }
        let target2 = onehot_of(&labels2, 2, dims);
        let shuffled = dice_ce(&probs2, &target2).unwrap();
        assert!((base - shuffled).abs() < 1e-12);
    }

    #[test]
    fn soft_dice_hand_case() {
        // single voxel, p=(0.6,0.4), q=(0.5,0.5) -> 0.0204
        let dims = Dims3::new(1, 1, 1);
        let p = ClassVolume::from_vec(2, dims, vec![0.6, 0.4]).unwrap();
        let q = ClassVolume::from_vec(2, dims, vec![0.5, 0.5]).unwrap();
        let loss = soft_dice(&p, &q).unwrap();
        assert!((loss - 0.0204).abs() < 1e-3, "loss {loss}");
        assert!(soft_dice(&p, &p).unwrap() < 1e-4);
        let a = ClassVolume::from_vec(2, dims, vec![1.0, 0.0]).unwrap();
        let b = ClassVolume::from_vec(2, dims, vec![0.0, 1.0]).unwrap();
        assert!(soft_dice(&a, &b).unwrap() > 0.9999);
    }

    #[test]
    fn rec_ratio_endpoints() {
        let dims = Dims3::new(2, 2, 2);
        let mut rng = crate::rng::SeedRng::new(4);
        let mut t = ClassVolume::zeros(2, dims);
        t.data.iter_mut().for_each(|v| *v = rng.uniform_range(-1.0, 1.0));
        assert_eq!(rec_ratio(&t, &t).unwrap(), 0.0);
        let zero = ClassVolume::zeros(2, dims);
        let one = rec_ratio(&zero, &t).unwrap();
        assert!((one - 1.0).abs() < 1e-12, "ratio {one}");
    }

    #[test]
    fn drs_hand_traced_sequence() {
        // lambda = (0.5, 0.4, 0.6): du = 0.02231, dl = 0.08109, d = 0.2751
        let mut tr = DifficultyTracker::new(1, DrsConfig::default());
        for l in [0.5, 0.4, 0.6] {
            tr.update(&[l]).unwrap();
        }
        let s = tr.stats()[0];
        assert!((s.du - 0.02231).abs() < 1e-4, "du {}", s.du);
        assert!((s.dl - 0.08109).abs() < 1e-4, "dl {}", s.dl);
        assert!((s.d - 0.2751).abs() < 1e-4, "d {}", s.d);
    }

    #[test]
    fn drs_monotone_rise_floors_weight() {
        let mut tr = DifficultyTracker::new(2, DrsConfig::default());
        for i in 0..10 {
            let l = 0.3 + 0.05 * i as f64;
            tr.update(&[l, l]).unwrap();
        }
        let s = &tr.stats()[0];
        assert_eq!(s.du, 0.0);
        assert!(s.dl > 0.0);
        assert_eq!(s.d, 0.0);
        let w = tr.weights();
        assert_eq!(w, vec![0.1, 0.1]);
    }

    #[test]
    fn drs_constant_lambda_degenerates_to_floor() {
        let mut tr = DifficultyTracker::new(1, DrsConfig::default());
        for _ in 0..5 {
            tr.update(&[0.5]).unwrap();
        }
        let s = tr.stats()[0];
        assert_eq!((s.du, s.dl, s.d), (0.0, 0.0, 0.0));
        assert_eq!(tr.weights(), vec![0.1]);
    }

    #[test]
    fn drs_sign_gating_property() {
        let mut rng = crate::rng::SeedRng::new(9);
        let mut tr = DifficultyTracker::new(3, DrsConfig::default());
        let mut prev: Option<Vec<f64>> = None;
        for _ in 0..200 {
            let l: Vec<f64> = (0..3).map(|_| rng.uniform()).collect();
            let before = tr.stats();
            tr.update(&l).unwrap();
            let after = tr.stats();
            if let Some(p) = &prev {
                for k in 0..3 {
                    // window not yet saturated: an iteration only moves the
                    // matching accumulator
                    if tr.history_len() <= tr.cfg.window {
                        let delta = l[k] - p[k];
                        if delta > 0.0 {
                            assert_eq!(after[k].du, before[k].du);
                            assert!(after[k].dl >= before[k].dl);
                        } else if delta < 0.0 {
                            assert_eq!(after[k].dl, before[k].dl);
                            assert!(after[k].du >= before[k].du);
                        }
                    }
                    assert!(after[k].du >= 0.0);
                    assert!(after[k].dl >= 0.0);
                }
            }
            prev = Some(l);
        }
    }

    #[test]
    fn drs_cold_tracker_gives_unit_weights() {
        let mut tr = DifficultyTracker::new(2, DrsConfig::default());
        assert_eq!(tr.weights(), vec![1.0, 1.0]);
        tr.update(&[0.5, 0.5]).unwrap();
        assert_eq!(tr.weights(), vec![1.0, 1.0]);
    }

    #[test]
    fn drs_peek_matches_commit() {
        let mut rng = crate::rng::SeedRng::new(21);
        let mut tr = DifficultyTracker::new(2, DrsConfig {
            window: 5,
            ..DrsConfig::default()
        });
        for _ in 0..30 {
            let l: Vec<f64> = (0..2).map(|_| rng.uniform()).collect();
            let peek = tr.peek_weights(&l);
            tr.update(&l).unwrap();
            let committed = tr.weights();
            for (a, b) in peek.iter().zip(committed.iter()) {
                assert!((a - b).abs() < 1e-12, "peek {a} vs committed {b}");
            }
        }
    }

    #[test]
    fn loss_diff_linearity_in_weights() {
        let dims = Dims3::new(2, 2, 2);
        let mut rng = crate::rng::SeedRng::new(6);
        let labels: Vec<u8> = (0..8).map(|_| rng.index(3) as u8).collect();
        let target = onehot_of(&labels, 3, dims);
        let mut probs = ClassVolume::zeros(3, dims);
        let n = 8;
        for v in 0..n {
            let mut s = 0.0;
            for k in 0..3 {
                probs.data[k * n + v] = rng.uniform() + 0.1;
                s += probs.data[k * n + v];
            }
            for k in 0..3 {
                probs.data[k * n + v] /= s;
            }
        }
        let base = dice_ce_per_class(&probs, &target, &[1.0, 1.0, 1.0]).unwrap();
        let bumped = dice_ce_per_class(&probs, &target, &[1.0, 2.0, 1.0]).unwrap();
        let only_k1 = dice_ce_per_class(&probs, &target, &[0.0, 1.0, 0.0]).unwrap();
        assert!((bumped - base - only_k1).abs() < 1e-12);
    }

    #[test]
    fn batch_means_match_per_sample_values() {
        let dims = Dims3::new(2, 2, 2);
        let mut rng = crate::rng::SeedRng::new(7);
        let mut tape = Tape::no_grad();
        let mut probs_vars = Vec::new();
        let mut targets = Vec::new();
        let mut singles = Vec::new();
        for _ in 0..2 {
            let labels: Vec<u8> = (0..8).map(|_| rng.index(2) as u8).collect();
            let target = onehot_of(&labels, 2, dims);
            let mut p = ClassVolume::zeros(2, dims);
            for v in 0..8 {
                let a = rng.uniform_range(0.05, 0.95);
                p.data[v] = a;
                p.data[8 + v] = 1.0 - a;
            }
            singles.push(dice_ce(&p, &target).unwrap());
            probs_vars.push(constant_probs(&p));
            targets.push(target);
        }
        let trefs: Vec<&ClassVolume> = targets.iter().collect();
        let mean = loss_deno(&mut tape, &probs_vars, &trefs).unwrap().scalar_value();
        let expect = (singles[0] + singles[1]) / 2.0;
        assert!((mean - expect).abs() < 1e-12);
        // single-sample batch equals the plain kernel
        let one = loss_u(&mut tape, &probs_vars[..1], &trefs[..1]).unwrap().scalar_value();
        assert!((one - singles[0]).abs() < 1e-12);
    }

    #[test]
    fn total_loss_arithmetic() {
        let mut tape = Tape::no_grad();
        let one = || Var::constant(vec![1.0], VarShape::Scalar);
        let parts = LossComponents {
            deno: one(),
            diff: one(),
            mix: one(),
            mic: Some(one()),
            kd: Some(one()),
            rec: Some(one()),
            corr: Some(one()),
        };
        let w = LossWeights::default(); // 2.0, 0.1, 0.2, 1.2
        let total = total_loss(&mut tape, &parts, &w).scalar_value();
        assert!((total - 6.5).abs() < 1e-12, "total {total}");
        let none = LossComponents {
            deno: one(),
            diff: one(),
            mix: one(),
            mic: None,
            kd: None,
            rec: None,
            corr: None,
        };
        let total = total_loss(&mut tape, &none, &w).scalar_value();
        assert!((total - 3.0).abs() < 1e-12);
    }

    #[test]
    fn empty_batch_rejected() {
        let mut tape = Tape::no_grad();
        assert!(loss_deno(&mut tape, &[], &[]).is_err());
    }

    #[test]
    fn batch_class_dice_conventions() {
        let dims = Dims3::new(1, 1, 4);
        let gt = LabelVolume::from_vec(dims, vec![0, 1, 1, 0]).unwrap();
        let pred = LabelVolume::from_vec(dims, vec![0, 1, 0, 0]).unwrap();
        let d = batch_class_dice(&[pred], &[gt.clone()], 3);
        // class 2 absent from both -> 1
        assert_eq!(d[2], 1.0);
        assert!((d[1] - 2.0 / 3.0).abs() < 1e-12);
        // class present only in gt -> 0
        let pred0 = LabelVolume::from_vec(dims, vec![0, 0, 0, 0]).unwrap();
        let d = batch_class_dice(&[pred0], &[gt], 2);
        assert_eq!(d[1], 0.0);
    }
}
