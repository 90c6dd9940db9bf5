//! Stochastic spatial structures for consistency learning: single-box CutMix
//! masks and block-constant patch masks.

use crate::error::{Error, Result};
use crate::rng::SeedRng;
use crate::vol::{ClassVolume, Dims3, LabelVolume, Volume};

/// Axis-aligned box, `origin + size` per axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BoxRegion {
    pub origin: (usize, usize, usize),
    pub size: (usize, usize, usize),
}

impl BoxRegion {
    pub fn voxels(&self) -> usize {
        self.size.0 * self.size.1 * self.size.2
    }
}

/// Binary mask that is 1 exactly on one contiguous box.
#[derive(Debug, Clone)]
pub struct CutMixMask {
    pub dims: Dims3,
    pub region: BoxRegion,
    pub mask: Vec<u8>,
}

impl CutMixMask {
    pub fn ones_fraction(&self) -> f64 {
        self.region.voxels() as f64 / self.dims.voxels() as f64
    }

    pub fn complement(&self) -> Vec<u8> {
        self.mask.iter().map(|&m| 1 - m).collect()
    }
}

/// Integer voxel window `[lo, hi]` implied by a fractional range.
fn voxel_window(fraction_range: (f64, f64), total: usize) -> Result<(usize, usize)> {
    let (lo, hi) = fraction_range;
    if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
        return Err(Error::Config(format!(
            "invalid cutmix fraction range [{lo}, {hi}]"
        )));
    }
    let lo_vox = ((lo * total as f64) - 1e-9).ceil().max(1.0) as usize;
    let hi_vox = ((hi * total as f64) + 1e-9).floor() as usize;
    if lo_vox > hi_vox || hi_vox == 0 {
        return Err(Error::Config(format!(
            "cutmix fraction range [{lo}, {hi}] admits no integer box volume on {total} voxels"
        )));
    }
    Ok((lo_vox, hi_vox.min(total)))
}

/// Draws one box whose volume fraction lies in `fraction_range`, placed
/// uniformly at random. Dims must all be >= 4.
pub fn make_cutmix_mask(
    dims: Dims3,
    fraction_range: (f64, f64),
    rng: &mut SeedRng,
) -> Result<CutMixMask> {
    if dims.l < 4 || dims.w < 4 || dims.h < 4 {
        return Err(Error::Config(format!("cutmix needs dims >= 4, got {dims}")));
    }
    let total = dims.voxels();
    let (lo_vox, hi_vox) = voxel_window(fraction_range, total)?;
    let extents = [dims.l, dims.w, dims.h];

    // cube-root sizing toward a sampled target fraction, then greedy +-1
    // nudges until the volume lands in the window
    let f = rng.uniform_range(fraction_range.0, fraction_range.1);
    let target = f * total as f64;
    let t = f.powf(1.0 / 3.0);
    let mut size: Vec<usize> = extents
        .iter()
        .map(|&e| ((e as f64 * t).round() as usize).clamp(1, e))
        .collect();
    let mut found = false;
    for _ in 0..extents.iter().sum::<usize>() * 2 {
        let vol = size.iter().product::<usize>();
        if (lo_vox..=hi_vox).contains(&vol) {
            found = true;
            break;
        }
        let grow = vol < lo_vox;
        let mut best: Option<(usize, f64)> = None;
        for ax in 0..3 {
            let cand = if grow {
                if size[ax] >= extents[ax] {
                    continue;
                }
                size[ax] + 1
            } else {
                if size[ax] <= 1 {
                    continue;
                }
                size[ax] - 1
            };
            let vol_new = vol / size[ax] * cand;
            let err = (vol_new as f64 - target).abs();
            if best.map_or(true, |(_, e)| err < e) {
                best = Some((ax, err));
            }
        }
        match best {
            Some((ax, _)) => {
                if grow {
                    size[ax] += 1;
                } else {
                    size[ax] -= 1;
                }
            }
            None => break,
        }
    }

    if !found {
        // exhaustive fallback over (a, b) in shuffled order; exact windows
        // like [0.25, 0.25] land here when rounding cannot hit them
        let mut pairs: Vec<(usize, usize)> = (1..=dims.l)
            .flat_map(|a| (1..=dims.w).map(move |b| (a, b)))
            .collect();
        rng.shuffle(&mut pairs);
        let mut placed = false;
        for (a, b) in pairs {
            let ab = a * b;
            let c_lo = lo_vox.div_ceil(ab).max(1);
            let c_hi = (hi_vox / ab).min(dims.h);
            if c_lo <= c_hi {
                let c = c_lo + rng.index(c_hi - c_lo + 1);
                size = vec![a, b, c];
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Config(format!(
                "no axis-aligned box on {dims} has volume in [{lo_vox}, {hi_vox}]"
            )));
        }
    }

    let origin = (
        rng.index(dims.l - size[0] + 1),
        rng.index(dims.w - size[1] + 1),
        rng.index(dims.h - size[2] + 1),
    );
    let region = BoxRegion {
        origin,
        size: (size[0], size[1], size[2]),
    };
    let mut mask = vec![0u8; total];
    for i in origin.0..origin.0 + size[0] {
        for j in origin.1..origin.1 + size[1] {
            for k in origin.2..origin.2 + size[2] {
                mask[dims.index(i, j, k)] = 1;
            }
        }
    }
    Ok(CutMixMask { dims, region, mask })
}

fn check_same_dims(op: &str, a: Dims3, b: Dims3) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!("{op}: {a} vs {b}")));
    }
    Ok(())
}

/// `x_mix = (1 - M) .* x_i + M .* x_j`, identically for the hard targets.
pub fn apply_cutmix(
    x_i: &Volume,
    x_j: &Volume,
    y_i: &LabelVolume,
    y_j: &LabelVolume,
    mask: &[u8],
) -> Result<(Volume, LabelVolume)> {
    check_same_dims("cutmix", x_i.dims, x_j.dims)?;
    check_same_dims("cutmix", x_i.dims, y_i.dims)?;
    check_same_dims("cutmix", x_i.dims, y_j.dims)?;
    if mask.len() != x_i.dims.voxels() {
        return Err(Error::Shape(format!(
            "cutmix mask length {} vs {} voxels",
            mask.len(),
            x_i.dims.voxels()
        )));
    }
    let mut img = Volume::zeros(x_i.dims);
    let mut lbl = LabelVolume::zeros(x_i.dims);
    for v in 0..mask.len() {
        if mask[v] == 0 {
            img.data[v] = x_i.data[v];
            lbl.data[v] = y_i.data[v];
        } else {
            img.data[v] = x_j.data[v];
            lbl.data[v] = y_j.data[v];
        }
    }
    Ok((img, lbl))
}

/// Soft-target variant mixing one-hot (or probability) maps.
pub fn apply_cutmix_onehot(
    y_i: &ClassVolume,
    y_j: &ClassVolume,
    mask: &[u8],
) -> Result<ClassVolume> {
    check_same_dims("cutmix", y_i.dims, y_j.dims)?;
    if y_i.classes != y_j.classes {
        return Err(Error::Shape(format!(
            "cutmix class counts {} vs {}",
            y_i.classes, y_j.classes
        )));
    }
    let n = y_i.voxels();
    let mut out = ClassVolume::zeros(y_i.classes, y_i.dims);
    for k in 0..y_i.classes {
        for v in 0..n {
            out.data[k * n + v] = if mask[v] == 0 {
                y_i.data[k * n + v]
            } else {
                y_j.data[k * n + v]
            };
        }
    }
    Ok(out)
}

/// Block-constant keep mask: one uniform draw per aligned `b^3` patch,
/// kept (value 1) iff `v > r`.
#[derive(Debug, Clone)]
pub struct PatchMaskSpec {
    pub ratio: f64,
    pub patch: usize,
    pub dims: Dims3,
    pub mask: Vec<f64>,
}

impl PatchMaskSpec {
    pub fn kept_fraction(&self) -> f64 {
        self.mask.iter().sum::<f64>() / self.mask.len() as f64
    }
}

pub fn make_patch_mask(dims: Dims3, r: f64, b: usize, rng: &mut SeedRng) -> Result<PatchMaskSpec> {
    if !(0.0..=1.0).contains(&r) {
        return Err(Error::Config(format!("mask ratio {r} outside [0, 1]")));
    }
    if !dims.divisible_by(b) {
        return Err(Error::Config(format!(
            "dims {dims} not divisible by patch size {b}"
        )));
    }
    let mut mask = vec![0.0; dims.voxels()];
    for pi in 0..dims.l / b {
        for pj in 0..dims.w / b {
            for pk in 0..dims.h / b {
                let keep = rng.uniform() > r;
                if keep {
                    for i in pi * b..(pi + 1) * b {
                        for j in pj * b..(pj + 1) * b {
                            for k in pk * b..(pk + 1) * b {
                                mask[dims.index(i, j, k)] = 1.0;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(PatchMaskSpec {
        ratio: r,
        patch: b,
        dims,
        mask,
    })
}

/// `x_mask = mask .* x`.
pub fn apply_patch_mask(x: &Volume, spec: &PatchMaskSpec) -> Result<Volume> {
    check_same_dims("patch mask", x.dims, spec.dims)?;
    let data = x
        .data
        .iter()
        .zip(spec.mask.iter())
        .map(|(v, m)| v * m)
        .collect();
    Volume::from_vec(x.dims, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rand_volume(dims: Dims3, rng: &mut SeedRng) -> Volume {
        Volume {
            dims,
            data: (0..dims.voxels()).map(|_| rng.uniform()).collect(),
        }
    }

    fn rand_label(dims: Dims3, classes: u8, rng: &mut SeedRng) -> LabelVolume {
        LabelVolume {
            dims,
            data: (0..dims.voxels()).map(|_| rng.index(classes as usize) as u8).collect(),
        }
    }

    #[test]
    fn full_fraction_gives_all_ones() {
        let mut rng = SeedRng::new(1);
        let m = make_cutmix_mask(Dims3::new(8, 8, 8), (1.0, 1.0), &mut rng).unwrap();
        assert!(m.mask.iter().all(|&v| v == 1));
        assert_eq!(m.region.voxels(), 512);
    }

    #[test]
    fn exact_quarter_fraction_on_32() {
        let mut rng = SeedRng::new(2);
        for _ in 0..20 {
            let m = make_cutmix_mask(Dims3::new(32, 32, 32), (0.25, 0.25), &mut rng).unwrap();
            let ones: usize = m.mask.iter().map(|&v| v as usize).sum();
            assert_eq!(ones, 8192);
            assert_eq!(m.region.voxels(), 8192);
        }
    }

    #[test]
    fn fraction_stays_in_range_and_mean_centers() {
        let mut rng = SeedRng::new(3);
        let dims = Dims3::new(16, 16, 16);
        let mut mean = 0.0;
        let n = 1000;
        for _ in 0..n {
            let m = make_cutmix_mask(dims, (0.2, 0.4), &mut rng).unwrap();
            let f = m.ones_fraction();
            assert!((0.2..=0.4).contains(&f), "fraction {f}");
            mean += f;
        }
        mean /= n as f64;
        assert!((0.25..=0.35).contains(&mean), "mean fraction {mean}");
    }

    #[test]
    fn mask_is_exactly_its_box() {
        let mut rng = SeedRng::new(4);
        let dims = Dims3::new(10, 12, 8);
        let m = make_cutmix_mask(dims, (0.1, 0.3), &mut rng).unwrap();
        let ones: usize = m.mask.iter().map(|&v| v as usize).sum();
        assert_eq!(ones, m.region.voxels());
        let (oi, oj, ok) = m.region.origin;
        let (si, sj, sk) = m.region.size;
        for i in 0..dims.l {
            for j in 0..dims.w {
                for k in 0..dims.h {
                    let inside = (oi..oi + si).contains(&i)
                        && (oj..oj + sj).contains(&j)
                        && (ok..ok + sk).contains(&k);
                    assert_eq!(m.mask[dims.index(i, j, k)] == 1, inside);
                }
            }
        }
    }

    #[test]
    fn cutmix_endpoint_masks() {
        let mut rng = SeedRng::new(5);
        let dims = Dims3::new(4, 4, 4);
        let (xi, xj) = (rand_volume(dims, &mut rng), rand_volume(dims, &mut rng));
        let (yi, yj) = (rand_label(dims, 3, &mut rng), rand_label(dims, 3, &mut rng));
        let zeros = vec![0u8; dims.voxels()];
        let ones = vec![1u8; dims.voxels()];
        let (mx, my) = apply_cutmix(&xi, &xj, &yi, &yj, &zeros).unwrap();
        assert_eq!(mx, xi);
        assert_eq!(my, yi);
        let (mx, my) = apply_cutmix(&xi, &xj, &yi, &yj, &ones).unwrap();
        assert_eq!(mx, xj);
        assert_eq!(my, yj);
    }

    #[test]
    fn cutmix_voxelwise_and_involution() {
        let mut rng = SeedRng::new(6);
        let dims = Dims3::new(6, 6, 6);
        let (xi, xj) = (rand_volume(dims, &mut rng), rand_volume(dims, &mut rng));
        let (yi, yj) = (rand_label(dims, 2, &mut rng), rand_label(dims, 2, &mut rng));
        let m = make_cutmix_mask(dims, (0.2, 0.5), &mut rng).unwrap();
        let (mx, my) = apply_cutmix(&xi, &xj, &yi, &yj, &m.mask).unwrap();
        for v in 0..dims.voxels() {
            if m.mask[v] == 0 {
                assert_eq!(mx.data[v], xi.data[v]);
                assert_eq!(my.data[v], yi.data[v]);
            } else {
                assert_eq!(mx.data[v], xj.data[v]);
                assert_eq!(my.data[v], yj.data[v]);
            }
        }
        // swapping inputs under the complement mask reproduces the volume
        let (mx2, my2) = apply_cutmix(&xj, &xi, &yj, &yi, &m.complement()).unwrap();
        assert_eq!(mx, mx2);
        assert_eq!(my, my2);
    }

    #[test]
    fn patch_mask_extremes() {
        let mut rng = SeedRng::new(7);
        let dims = Dims3::new(8, 8, 8);
        let all = make_patch_mask(dims, 0.0, 2, &mut rng).unwrap();
        assert!(all.mask.iter().all(|&v| v == 1.0));
        let none = make_patch_mask(dims, 1.0, 2, &mut rng).unwrap();
        assert!(none.mask.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn infeasible_fraction_errors() {
        let mut rng = SeedRng::new(12);
        // no integer box volume lies in (0, 0]
        assert!(make_cutmix_mask(Dims3::new(8, 8, 8), (0.0, 0.0), &mut rng).is_err());
        // reversed range is a config error
        assert!(make_cutmix_mask(Dims3::new(8, 8, 8), (0.5, 0.2), &mut rng).is_err());
        // dims below 4 are rejected
        assert!(make_cutmix_mask(Dims3::new(3, 8, 8), (0.2, 0.5), &mut rng).is_err());
    }

    #[test]
    fn patch_mask_requires_divisible_dims() {
        let mut rng = SeedRng::new(8);
        assert!(make_patch_mask(Dims3::new(9, 8, 8), 0.5, 2, &mut rng).is_err());
    }

    #[test]
    fn patch_mask_kept_fraction_statistics() {
        // r = 0.7 keeps ~30% of patches
        let mut rng = SeedRng::new(9);
        let dims = Dims3::new(40, 40, 40);
        let mut kept = 0usize;
        let mut patches = 0usize;
        while patches < 10_000 {
            let m = make_patch_mask(dims, 0.7, 4, &mut rng).unwrap();
            let per = dims.voxels() / (4 * 4 * 4);
            patches += per;
            kept += (m.mask.iter().sum::<f64>() as usize) / 64;
        }
        let frac = kept as f64 / patches as f64;
        assert!((frac - 0.3).abs() < 0.02, "kept fraction {frac}");
    }

    #[test]
    fn patch_mask_block_constant() {
        let mut rng = SeedRng::new(10);
        let dims = Dims3::new(12, 12, 12);
        let b = 3;
        let m = make_patch_mask(dims, 0.5, b, &mut rng).unwrap();
        for i in 0..dims.l {
            for j in 0..dims.w {
                for k in 0..dims.h {
                    let anchor = m.mask[dims.index(i / b * b, j / b * b, k / b * b)];
                    assert_eq!(m.mask[dims.index(i, j, k)], anchor);
                }
            }
        }
    }

    #[test]
    fn apply_patch_mask_zeroes_masked() {
        let mut rng = SeedRng::new(11);
        let dims = Dims3::new(8, 8, 8);
        let x = rand_volume(dims, &mut rng);
        let m = make_patch_mask(dims, 0.5, 2, &mut rng).unwrap();
        let masked = apply_patch_mask(&x, &m).unwrap();
        for v in 0..dims.voxels() {
            if m.mask[v] == 0.0 {
                assert_eq!(masked.data[v], 0.0);
            } else {
                assert_eq!(masked.data[v], x.data[v]);
            }
        }
    }
}
