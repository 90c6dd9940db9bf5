//! Dual-teacher pseudo-labeling: the reparameterize-and-smooth teacher built
//! from the diffusion and supervised branches, the EMA mean teacher, and the
//! per-voxel entropy-weighted ensemble of the two.

use crate::error::{Error, Result};
use crate::rng::SeedRng;
use crate::vol::{ClassVolume, LabelVolume, Volume};

/// Where a teacher probability map came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TeacherSource {
    /// Reparameterize-and-smooth fusion of the diffusion and supervised branches.
    T1Rs,
    /// EMA mean-teacher prediction.
    T2Ema,
}

#[derive(Debug, Clone)]
pub struct TeacherPrediction {
    pub probs: ClassVolume,
    pub source: TeacherSource,
}

impl TeacherPrediction {
    pub fn new(probs: ClassVolume, source: TeacherSource) -> Result<Self> {
        if !probs.is_normalized(1e-5) {
            return Err(Error::Validation(
                "teacher prediction is not a normalized probability map".into(),
            ));
        }
        Ok(TeacherPrediction { probs, source })
    }
}

/// Fused prediction with its hard labels and the per-voxel teacher entropies
/// (bits) that produced the weighting.
#[derive(Debug, Clone)]
pub struct EnsembledPrediction {
    pub probs: ClassVolume,
    pub hard: LabelVolume,
    pub entropy_t1: Volume,
    pub entropy_t2: Volume,
}

/// Tunables of the RS teacher.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize, PartialEq)]
#[serde(default)]
pub struct RsConfig {
    /// Gumbel-Softmax temperature.
    pub tau_g: f64,
    /// Gaussian blur sigma; 0 disables smoothing.
    pub sigma_blur: f64,
}

impl Default for RsConfig {
    fn default() -> Self {
        RsConfig {
            tau_g: 1.0,
            sigma_blur: 1.0,
        }
    }
}

/// Separable 3^3 Gaussian blur per channel, replicate edges, followed by
/// per-voxel renormalization across channels.
fn blur_and_renormalize(map: &mut ClassVolume, sigma: f64) -> Result<()> {
    if sigma > 0.0 {
        let w = (-1.0 / (2.0 * sigma * sigma)).exp();
        let norm = 1.0 + 2.0 * w;
        let taps = [w / norm, 1.0 / norm, w / norm];
        let dims = map.dims;
        let n = dims.voxels();
        for k in 0..map.classes {
            let mut cur = map.channel(k).to_vec();
            for axis in 0..3 {
                let mut next = vec![0.0; n];
                for i in 0..dims.l {
                    for j in 0..dims.w {
                        for kk in 0..dims.h {
                            let mut acc = 0.0;
                            for (ti, t) in taps.iter().enumerate() {
                                let off = ti as isize - 1;
                                let (mut a, mut b, mut c) =
                                    (i as isize, j as isize, kk as isize);
                                match axis {
                                    0 => a += off,
                                    1 => b += off,
                                    _ => c += off,
                                }
                                let a = a.clamp(0, dims.l as isize - 1) as usize;
                                let b = b.clamp(0, dims.w as isize - 1) as usize;
                                let c = c.clamp(0, dims.h as isize - 1) as usize;
                                acc += t * cur[dims.index(a, b, c)];
                            }
                            next[dims.index(i, j, kk)] = acc;
                        }
                    }
                }
                cur = next;
            }
            map.channel_mut(k).copy_from_slice(&cur);
        }
    }
    // renormalize per voxel
    let n = map.voxels();
    for v in 0..n {
        let mut sum = 0.0;
        for k in 0..map.classes {
            sum += map.data[k * n + v];
        }
        if !(sum > 0.0) || !sum.is_finite() {
            return Err(Error::Validation(format!(
                "non-normalizable voxel {v}: channel sum {sum}"
            )));
        }
        for k in 0..map.classes {
            map.data[k * n + v] /= sum;
        }
    }
    Ok(())
}

/// Core of the RS teacher with injected Gumbel noise (one value per entry of
/// the diffusion probability map). Exposed for deterministic tests.
pub fn reparameterize_smooth_with_noise(
    p_xi: &ClassVolume,
    p_psi_logits: &ClassVolume,
    cfg: RsConfig,
    gumbel: &[f64],
) -> Result<TeacherPrediction> {
    if p_xi.classes != p_psi_logits.classes || p_xi.dims != p_psi_logits.dims {
        return Err(Error::Shape(format!(
            "rs teacher: xi {}x{} vs psi {}x{}",
            p_xi.classes, p_xi.dims, p_psi_logits.classes, p_psi_logits.dims
        )));
    }
    if cfg.tau_g <= 0.0 {
        return Err(Error::Config(format!("tau_g must be > 0, got {}", cfg.tau_g)));
    }
    if gumbel.len() != p_xi.data.len() {
        return Err(Error::Shape("gumbel noise length mismatch".into()));
    }
    let k = p_xi.classes;
    let n = p_xi.voxels();
    // Gumbel-Softmax over the diffusion probabilities: softmax((ln p + g)/tau)
    let mut gs = ClassVolume::zeros(k, p_xi.dims);
    for v in 0..n {
        let mut max = f64::NEG_INFINITY;
        for kk in 0..k {
            let idx = kk * n + v;
            let z = (p_xi.data[idx].max(1e-12).ln() + gumbel[idx]) / cfg.tau_g;
            gs.data[idx] = z;
            max = max.max(z);
        }
        let mut sum = 0.0;
        for kk in 0..k {
            let idx = kk * n + v;
            gs.data[idx] = (gs.data[idx] - max).exp();
            sum += gs.data[idx];
        }
        for kk in 0..k {
            gs.data[kk * n + v] /= sum;
        }
    }
    let psi_probs = p_psi_logits.softmax();
    let mut out = ClassVolume::zeros(k, p_xi.dims);
    for i in 0..out.data.len() {
        out.data[i] = 0.5 * (gs.data[i] + psi_probs.data[i]);
    }
    blur_and_renormalize(&mut out, cfg.sigma_blur)?;
    TeacherPrediction::new(out, TeacherSource::T1Rs)
}

/// RS teacher: Gumbel-Softmax randomization of the diffusion probability map
/// averaged with the softmaxed supervised logits, then blurred and
/// renormalized.
pub fn reparameterize_smooth(
    p_xi: &ClassVolume,
    p_psi_logits: &ClassVolume,
    cfg: RsConfig,
    rng: &mut SeedRng,
) -> Result<TeacherPrediction> {
    let mut gumbel = vec![0.0; p_xi.data.len()];
    for g in gumbel.iter_mut() {
        *g = rng.gumbel();
    }
    reparameterize_smooth_with_noise(p_xi, p_psi_logits, cfg, &gumbel)
}

/// Per-voxel Shannon entropy in bits, with `0 * log 0 = 0`.
pub fn entropy_map(probs: &ClassVolume) -> Volume {
    let n = probs.voxels();
    let mut out = Volume::zeros(probs.dims);
    for v in 0..n {
        let mut h = 0.0;
        for k in 0..probs.classes {
            let p = probs.data[k * n + v];
            if p > 0.0 {
                h -= p * p.log2();
            }
        }
        out.data[v] = h;
    }
    out
}

/// Ensemble with explicit per-voxel entropies; weights are `2^-H` so that a
/// zero-entropy teacher gets weight 1 and a one-bit teacher weight 1/2.
pub fn ensemble_with_entropies(
    t1: &ClassVolume,
    t2: &ClassVolume,
    h1: &Volume,
    h2: &Volume,
) -> Result<EnsembledPrediction> {
    if t1.classes != t2.classes || t1.dims != t2.dims {
        return Err(Error::Shape("teacher map shapes differ".into()));
    }
    if h1.dims != t1.dims || h2.dims != t1.dims {
        return Err(Error::Shape("entropy map shapes differ".into()));
    }
    let k = t1.classes;
    let n = t1.voxels();
    let mut probs = ClassVolume::zeros(k, t1.dims);
    for v in 0..n {
        let w1 = (-h1.data[v]).exp2();
        let w2 = (-h2.data[v]).exp2();
        let norm = w1 + w2;
        for kk in 0..k {
            let idx = kk * n + v;
            probs.data[idx] = (w1 * t1.data[idx] + w2 * t2.data[idx]) / norm;
        }
    }
    let hard = probs.argmax();
    Ok(EnsembledPrediction {
        probs,
        hard,
        entropy_t1: h1.clone(),
        entropy_t2: h2.clone(),
    })
}

/// Entropy-weighted fusion of the two teacher predictions.
pub fn ensemble_predictions(
    t1: &TeacherPrediction,
    t2: &TeacherPrediction,
) -> Result<EnsembledPrediction> {
    let h1 = entropy_map(&t1.probs);
    let h2 = entropy_map(&t2.probs);
    ensemble_with_entropies(&t1.probs, &t2.probs, &h1, &h2)
}

/// Per-voxel argmax with lowest-index tie-break.
pub fn harden(probs: &ClassVolume) -> LabelVolume {
    probs.argmax()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vol::Dims3;

    fn uniform_map(k: usize, dims: Dims3) -> ClassVolume {
        let mut m = ClassVolume::zeros(k, dims);
        m.data.iter_mut().for_each(|v| *v = 1.0 / k as f64);
        m
    }

    #[test]
    fn entropy_uniform_and_onehot() {
        let dims = Dims3::new(2, 2, 2);
        let m = uniform_map(2, dims);
        let h = entropy_map(&m);
        assert!(h.data.iter().all(|&v| (v - 1.0).abs() < 1e-12));
        let mut onehot = ClassVolume::zeros(2, dims);
        onehot.channel_mut(0).iter_mut().for_each(|v| *v = 1.0);
        let h = entropy_map(&onehot);
        assert!(h.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn entropy_hand_value() {
        let dims = Dims3::new(1, 1, 1);
        let m = ClassVolume::from_vec(2, dims, vec![0.75, 0.25]).unwrap();
        let h = entropy_map(&m);
        assert!((h.data[0] - 0.811278).abs() < 1e-6, "H = {}", h.data[0]);
    }

    #[test]
    fn ensemble_hand_case() {
        // t1 = (1, 0) with H=0, t2 = (0.5, 0.5) with H=1
        // -> p = (1*(1,0) + 0.5*(0.5,0.5)) / 1.5 = (0.8333, 0.1667)
        let dims = Dims3::new(1, 1, 1);
        let t1 = TeacherPrediction::new(
            ClassVolume::from_vec(2, dims, vec![1.0, 0.0]).unwrap(),
            TeacherSource::T1Rs,
        )
        .unwrap();
        let t2 = TeacherPrediction::new(
            ClassVolume::from_vec(2, dims, vec![0.5, 0.5]).unwrap(),
            TeacherSource::T2Ema,
        )
        .unwrap();
        let e = ensemble_predictions(&t1, &t2).unwrap();
        assert!((e.probs.data[0] - 5.0 / 6.0).abs() < 1e-9);
        assert!((e.probs.data[1] - 1.0 / 6.0).abs() < 1e-9);
        assert_eq!(e.hard.data[0], 0);
    }

    #[test]
    fn ensemble_fixed_point_and_symmetry() {
        let dims = Dims3::new(2, 2, 2);
        let mut rng = SeedRng::new(3);
        let mut a = ClassVolume::zeros(3, dims);
        let n = dims.voxels();
        for v in 0..n {
            let mut sum = 0.0;
            for k in 0..3 {
                a.data[k * n + v] = rng.uniform() + 0.05;
                sum += a.data[k * n + v];
            }
            for k in 0..3 {
                a.data[k * n + v] /= sum;
            }
        }
        let t1 = TeacherPrediction::new(a.clone(), TeacherSource::T1Rs).unwrap();
        let t2 = TeacherPrediction::new(a.clone(), TeacherSource::T2Ema).unwrap();
        let e = ensemble_predictions(&t1, &t2).unwrap();
        for (x, y) in e.probs.data.iter().zip(a.data.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
        // equal entropies, different maps -> arithmetic mean
        let dims1 = Dims3::new(1, 1, 1);
        let p = ClassVolume::from_vec(2, dims1, vec![0.8, 0.2]).unwrap();
        let q = ClassVolume::from_vec(2, dims1, vec![0.2, 0.8]).unwrap();
        let h1 = entropy_map(&p);
        let h2 = entropy_map(&q);
        let e = ensemble_with_entropies(&p, &q, &h1, &h2).unwrap();
        assert!((e.probs.data[0] - 0.5).abs() < 1e-12);
        assert!((e.probs.data[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn ensemble_convex_hull_and_monotone_trust() {
        let dims = Dims3::new(1, 1, 1);
        let mut rng = SeedRng::new(17);
        for _ in 0..1000 {
            let mk = |rng: &mut SeedRng| {
                let a = rng.uniform() + 1e-3;
                let b = rng.uniform() + 1e-3;
                let c = rng.uniform() + 1e-3;
                let s = a + b + c;
                ClassVolume::from_vec(3, dims, vec![a / s, b / s, c / s]).unwrap()
            };
            let q1 = mk(&mut rng);
            let q2 = mk(&mut rng);
            let h1v = rng.uniform_range(0.0, 1.5);
            let h2v = rng.uniform_range(0.0, 1.5);
            let h = |v: f64| Volume {
                dims,
                data: vec![v],
            };
            let e = ensemble_with_entropies(&q1, &q2, &h(h1v), &h(h2v)).unwrap();
            for k in 0..3 {
                let lo = q1.data[k].min(q2.data[k]) - 1e-12;
                let hi = q1.data[k].max(q2.data[k]) + 1e-12;
                assert!(e.probs.data[k] >= lo && e.probs.data[k] <= hi);
            }
            // lowering H1 moves the fusion toward q1 in L1
            let e_lower = ensemble_with_entropies(&q1, &q2, &h(h1v * 0.5), &h(h2v)).unwrap();
            let l1 = |a: &ClassVolume, b: &ClassVolume| {
                a.data
                    .iter()
                    .zip(b.data.iter())
                    .map(|(x, y)| (x - y).abs())
                    .sum::<f64>()
            };
            assert!(l1(&e_lower.probs, &q1) <= l1(&e.probs, &q1) + 1e-12);
        }
    }

    #[test]
    fn rs_noise_free_reduction() {
        // zero gumbel noise, tau 1, no blur: output = 0.5 * (p_xi + softmax(psi))
        let dims = Dims3::new(2, 2, 2);
        let mut rng = SeedRng::new(5);
        let n = dims.voxels();
        let mut p_xi = ClassVolume::zeros(2, dims);
        for v in 0..n {
            let a = rng.uniform_range(0.1, 0.9);
            p_xi.data[v] = a;
            p_xi.data[n + v] = 1.0 - a;
        }
        let mut psi = ClassVolume::zeros(2, dims);
        psi.data.iter_mut().for_each(|v| *v = rng.uniform_range(-2.0, 2.0));
        let cfg = RsConfig {
            tau_g: 1.0,
            sigma_blur: 0.0,
        };
        let zeros = vec![0.0; p_xi.data.len()];
        let t1 = reparameterize_smooth_with_noise(&p_xi, &psi, cfg, &zeros).unwrap();
        let psi_sm = psi.softmax();
        for i in 0..t1.probs.data.len() {
            let expect = 0.5 * (p_xi.data[i] + psi_sm.data[i]);
            assert!((t1.probs.data[i] - expect).abs() < 1e-9);
        }
    }

    #[test]
    fn rs_output_normalized_on_random_inputs() {
        let dims = Dims3::new(4, 4, 4);
        let mut rng = SeedRng::new(6);
        let n = dims.voxels();
        let mut p_xi = ClassVolume::zeros(3, dims);
        for v in 0..n {
            let mut sum = 0.0;
            for k in 0..3 {
                p_xi.data[k * n + v] = rng.uniform() + 0.01;
                sum += p_xi.data[k * n + v];
            }
            for k in 0..3 {
                p_xi.data[k * n + v] /= sum;
            }
        }
        let mut psi = ClassVolume::zeros(3, dims);
        psi.data.iter_mut().for_each(|v| *v = rng.uniform_range(-3.0, 3.0));
        let t1 = reparameterize_smooth(&p_xi, &psi, RsConfig::default(), &mut rng).unwrap();
        assert!(t1.probs.is_normalized(1e-5));
    }

    #[test]
    fn rs_uniform_inputs_stay_uniform_in_expectation() {
        let dims = Dims3::new(2, 2, 2);
        let p_xi = uniform_map(2, dims);
        let psi = ClassVolume::zeros(2, dims); // softmax -> uniform
        let mut rng = SeedRng::new(7);
        let mut mean = vec![0.0; p_xi.data.len()];
        let draws = 1000;
        for _ in 0..draws {
            let t1 = reparameterize_smooth(&p_xi, &psi, RsConfig::default(), &mut rng).unwrap();
            for (m, v) in mean.iter_mut().zip(t1.probs.data.iter()) {
                *m += v;
            }
        }
        for m in mean {
            assert!((m / draws as f64 - 0.5).abs() < 0.02);
        }
    }

    #[test]
    fn harden_matches_brute_force() {
        let dims = Dims3::new(3, 3, 3);
        let mut rng = SeedRng::new(8);
        let n = dims.voxels();
        let mut p = ClassVolume::zeros(4, dims);
        p.data.iter_mut().for_each(|v| *v = rng.uniform());
        let hard = harden(&p);
        for v in 0..n {
            let mut best = 0;
            let mut bv = p.data[v];
            for k in 1..4 {
                if p.data[k * n + v] > bv {
                    bv = p.data[k * n + v];
                    best = k;
                }
            }
            assert_eq!(hard.data[v], best as u8);
        }
    }
}
