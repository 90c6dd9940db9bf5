//! Segmentation metrics (Dice, Jaccard, HD95, ASD), the serving-time
//! inference path, and report assembly.
//!
//! Distances are in voxel units. Boundaries are foreground voxels with at
//! least one six-connected background neighbor (outside the volume counts
//! as background); distances between boundary sets are exact brute force,
//! which is fine at desk scale.

use std::fs;
use std::path::Path;

use crate::checkpoint::InferenceExport;
use crate::data::{load_sample, DatasetManifest};
use crate::error::{Error, Result};
use crate::network::{decoder_forward, encoder_forward};
use crate::params::StoreKey;
use crate::vol::{LabelVolume, Volume};
use crate::autodiff::Tape;

/// Hard prediction from an inference export: `argmax softmax dec(enc(x))`.
/// No teachers, no auxiliary decoders, no diffusion loop.
pub fn infer(export: &InferenceExport, x: &Volume) -> Result<LabelVolume> {
    let mut tape = Tape::no_grad();
    let enc = encoder_forward(
        &mut tape,
        &export.net_cfg,
        &export.enc,
        StoreKey::Encoder,
        x,
        None,
        0,
    )?;
    let logits = decoder_forward(
        &mut tape,
        &export.net_cfg,
        &export.dec,
        StoreKey::DecoderTheta,
        &enc,
    )?;
    Ok(logits.to_class_volume().argmax())
}

/// Per-class overlap scores.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Overlap {
    pub dice: f64,
    pub jaccard: f64,
}

/// Binary per-class Dice and Jaccard. A class empty in both volumes scores
/// 1 by convention; empty in exactly one scores 0.
pub fn dice_jaccard(pred: &LabelVolume, gt: &LabelVolume, classes: usize) -> Result<Vec<Overlap>> {
    if pred.dims != gt.dims {
        return Err(Error::Shape(format!("{} vs {}", pred.dims, gt.dims)));
    }
    let mut inter = vec![0u64; classes];
    let mut p_count = vec![0u64; classes];
    let mut g_count = vec![0u64; classes];
    for (p, g) in pred.data.iter().zip(gt.data.iter()) {
        let (p, g) = (*p as usize, *g as usize);
        if p >= classes || g >= classes {
            return Err(Error::Validation(format!(
                "label value out of range for {classes} classes"
            )));
        }
        p_count[p] += 1;
        g_count[g] += 1;
        if p == g {
            inter[p] += 1;
        }
    }
    Ok((0..classes)
        .map(|k| {
            if p_count[k] == 0 && g_count[k] == 0 {
                Overlap {
                    dice: 1.0,
                    jaccard: 1.0,
                }
            } else {
                let i = inter[k] as f64;
                let union = (p_count[k] + g_count[k]) as f64 - i;
                Overlap {
                    dice: 2.0 * i / (p_count[k] + g_count[k]) as f64,
                    jaccard: if union == 0.0 { 1.0 } else { i / union },
                }
            }
        })
        .collect())
}

/// Boundary voxels of the binary mask `label == class`: mask voxels with a
/// six-connected background neighbor.
pub fn boundary_voxels(label: &LabelVolume, class: u8) -> Vec<(usize, usize, usize)> {
    let dims = label.dims;
    let mut out = Vec::new();
    let is_fg = |i: isize, j: isize, k: isize| -> bool {
        if i < 0 || j < 0 || k < 0 || i >= dims.l as isize || j >= dims.w as isize || k >= dims.h as isize
        {
            return false;
        }
        label.at(i as usize, j as usize, k as usize) == class
    };
    for i in 0..dims.l {
        for j in 0..dims.w {
            for k in 0..dims.h {
                if label.at(i, j, k) != class {
                    continue;
                }
                let (iz, jz, kz) = (i as isize, j as isize, k as isize);
                let edge = !is_fg(iz - 1, jz, kz)
                    || !is_fg(iz + 1, jz, kz)
                    || !is_fg(iz, jz - 1, kz)
                    || !is_fg(iz, jz + 1, kz)
                    || !is_fg(iz, jz, kz - 1)
                    || !is_fg(iz, jz, kz + 1);
                if edge {
                    out.push((i, j, k));
                }
            }
        }
    }
    out
}

fn directed_min_distances(from: &[(usize, usize, usize)], to: &[(usize, usize, usize)]) -> Vec<f64> {
    from.iter()
        .map(|&(ai, aj, ak)| {
            let mut best = f64::INFINITY;
            for &(bi, bj, bk) in to {
                let dz = ai as f64 - bi as f64;
                let dy = aj as f64 - bj as f64;
                let dx = ak as f64 - bk as f64;
                let d2 = dz * dz + dy * dy + dx * dx;
                if d2 < best {
                    best = d2;
                }
            }
            best.sqrt()
        })
        .collect()
}

/// Linearly interpolated percentile of a sorted-on-demand sample.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    debug_assert!(!values.is_empty());
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let rank = q * (v.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    if lo == hi {
        v[lo]
    } else {
        let t = rank - lo as f64;
        v[lo] * (1.0 - t) + v[hi] * t
    }
}

/// 95th-percentile Hausdorff distance and average symmetric surface
/// distance for one class. `None` when either mask is empty (metric
/// undefined; callers exclude it from aggregates).
pub fn surface_distances(pred: &LabelVolume, gt: &LabelVolume, class: u8) -> Result<Option<(f64, f64)>> {
    if pred.dims != gt.dims {
        return Err(Error::Shape(format!("{} vs {}", pred.dims, gt.dims)));
    }
    let a = boundary_voxels(pred, class);
    let b = boundary_voxels(gt, class);
    if a.is_empty() || b.is_empty() {
        return Ok(None);
    }
    let d_ab = directed_min_distances(&a, &b);
    let d_ba = directed_min_distances(&b, &a);
    let mut pool = d_ab.clone();
    pool.extend_from_slice(&d_ba);
    let hd95 = percentile(&pool, 0.95);
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let asd = 0.5 * (mean(&d_ab) + mean(&d_ba));
    Ok(Some((hd95, asd)))
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ClassMetrics {
    pub dice: f64,
    pub jaccard: f64,
    pub hd95: Option<f64>,
    pub asd: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct SampleMetrics {
    pub sample_id: String,
    pub per_class: Vec<ClassMetrics>,
}

/// Metrics of one model over one split.
#[derive(Debug, Clone)]
pub struct RepeatReport {
    pub samples: Vec<SampleMetrics>,
    pub classes: usize,
}

impl RepeatReport {
    /// Per-class means over samples; undefined distances are excluded.
    pub fn class_means(&self) -> Vec<ClassMetrics> {
        let mut out = Vec::with_capacity(self.classes);
        for k in 0..self.classes {
            let mut dice = 0.0;
            let mut jac = 0.0;
            let mut hd = (0.0, 0usize);
            let mut asd = (0.0, 0usize);
            for s in &self.samples {
                dice += s.per_class[k].dice;
                jac += s.per_class[k].jaccard;
                if let Some(v) = s.per_class[k].hd95 {
                    hd = (hd.0 + v, hd.1 + 1);
                }
                if let Some(v) = s.per_class[k].asd {
                    asd = (asd.0 + v, asd.1 + 1);
                }
            }
            let n = self.samples.len().max(1) as f64;
            out.push(ClassMetrics {
                dice: dice / n,
                jaccard: jac / n,
                hd95: (hd.1 > 0).then(|| hd.0 / hd.1 as f64),
                asd: (asd.1 > 0).then(|| asd.0 / asd.1 as f64),
            });
        }
        out
    }

    /// Mean Dice over foreground classes.
    pub fn mean_foreground_dice(&self) -> f64 {
        let means = self.class_means();
        let fg = &means[1..];
        fg.iter().map(|m| m.dice).sum::<f64>() / fg.len().max(1) as f64
    }
}

/// Metrics across repeated runs (one repeat per export).
#[derive(Debug, Clone)]
pub struct MetricReport {
    pub classes: usize,
    pub repeats: Vec<RepeatReport>,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() > 1 {
        (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, std)
}

/// One aggregate row: `mean +- std` across repeats of a per-repeat class
/// mean.
#[derive(Debug, Clone)]
pub struct AggregateRow {
    pub label: String,
    pub dice: (f64, f64),
    pub jaccard: (f64, f64),
    pub hd95: Option<(f64, f64)>,
    pub asd: Option<(f64, f64)>,
}

impl MetricReport {
    pub fn aggregate(&self) -> Vec<AggregateRow> {
        let mut rows = Vec::new();
        let per_repeat_means: Vec<Vec<ClassMetrics>> =
            self.repeats.iter().map(|r| r.class_means()).collect();
        for k in 0..self.classes {
            let dice: Vec<f64> = per_repeat_means.iter().map(|m| m[k].dice).collect();
            let jac: Vec<f64> = per_repeat_means.iter().map(|m| m[k].jaccard).collect();
            let hd: Vec<f64> = per_repeat_means.iter().filter_map(|m| m[k].hd95).collect();
            let asd: Vec<f64> = per_repeat_means.iter().filter_map(|m| m[k].asd).collect();
            rows.push(AggregateRow {
                label: format!("class{k}"),
                dice: mean_std(&dice),
                jaccard: mean_std(&jac),
                hd95: (!hd.is_empty()).then(|| mean_std(&hd)),
                asd: (!asd.is_empty()).then(|| mean_std(&asd)),
            });
        }
        let fg: Vec<f64> = self
            .repeats
            .iter()
            .map(|r| r.mean_foreground_dice())
            .collect();
        let fg_jac: Vec<f64> = per_repeat_means
            .iter()
            .map(|m| m[1..].iter().map(|c| c.jaccard).sum::<f64>() / (self.classes - 1) as f64)
            .collect();
        rows.push(AggregateRow {
            label: "mean".into(),
            dice: mean_std(&fg),
            jaccard: mean_std(&fg_jac),
            hd95: None,
            asd: None,
        });
        rows
    }

    pub fn mean_foreground_dice(&self) -> f64 {
        let per: Vec<f64> = self
            .repeats
            .iter()
            .map(|r| r.mean_foreground_dice())
            .collect();
        per.iter().sum::<f64>() / per.len().max(1) as f64
    }
}

/// Scores every sample of a split against every export (repeat).
pub fn evaluate_split(
    dir: &Path,
    manifest: &DatasetManifest,
    split: &str,
    exports: &[InferenceExport],
) -> Result<MetricReport> {
    let entries = manifest.split(split)?;
    if exports.is_empty() {
        return Err(Error::Validation("no exports to evaluate".into()));
    }
    let classes = manifest.classes;
    let mut repeats = Vec::with_capacity(exports.len());
    for export in exports {
        if export.net_cfg.classes != classes {
            return Err(Error::Config(format!(
                "export has {} classes, manifest {}",
                export.net_cfg.classes, classes
            )));
        }
        let mut samples = Vec::with_capacity(entries.len());
        for entry in entries {
            let sample = load_sample(dir, manifest, entry, true)?;
            let gt = sample.label.as_ref().ok_or_else(|| {
                Error::Validation(format!("sample {} has no label for evaluation", entry.id))
            })?;
            let pred = infer(export, &sample.image)?;
            let overlaps = dice_jaccard(&pred, gt, classes)?;
            let mut per_class = Vec::with_capacity(classes);
            for k in 0..classes {
                let sd = surface_distances(&pred, gt, k as u8)?;
                if sd.is_none() {
                    eprintln!(
                        "warning: class {k} empty in prediction or truth for {}; surface distances skipped",
                        entry.id
                    );
                }
                per_class.push(ClassMetrics {
                    dice: overlaps[k].dice,
                    jaccard: overlaps[k].jaccard,
                    hd95: sd.map(|(h, _)| h),
                    asd: sd.map(|(_, a)| a),
                });
            }
            samples.push(SampleMetrics {
                sample_id: entry.id.clone(),
                per_class,
            });
        }
        repeats.push(RepeatReport { samples, classes });
    }
    Ok(MetricReport { classes, repeats })
}

fn opt_cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Per-sample rows: `repeat,sample_id,class,dice,jaccard,hd95,asd`.
pub fn write_metrics_csv(report: &MetricReport, path: &Path) -> Result<()> {
    let mut out = String::from("repeat,sample_id,class,dice,jaccard,hd95,asd\n");
    for (ri, rep) in report.repeats.iter().enumerate() {
        for s in &rep.samples {
            for (k, m) in s.per_class.iter().enumerate() {
                out.push_str(&format!(
                    "{ri},{},{k},{},{},{},{}\n",
                    s.sample_id,
                    m.dice,
                    m.jaccard,
                    opt_cell(m.hd95),
                    opt_cell(m.asd)
                ));
            }
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Aggregate rows: `label,dice_mean,dice_std,jaccard_mean,jaccard_std,...`.
pub fn write_summary_csv(report: &MetricReport, path: &Path) -> Result<()> {
    let mut out =
        String::from("label,dice_mean,dice_std,jaccard_mean,jaccard_std,hd95_mean,hd95_std,asd_mean,asd_std\n");
    for row in report.aggregate() {
        let (dm, ds) = row.dice;
        let (jm, js) = row.jaccard;
        let hd = row.hd95.map(|(m, s)| (m.to_string(), s.to_string())).unwrap_or_default();
        let asd = row.asd.map(|(m, s)| (m.to_string(), s.to_string())).unwrap_or_default();
        out.push_str(&format!(
            "{},{dm},{ds},{jm},{js},{},{},{},{}\n",
            row.label, hd.0, hd.1, asd.0, asd.1
        ));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vol::Dims3;

    fn cube(dims: Dims3, lo: (usize, usize, usize), hi: (usize, usize, usize)) -> LabelVolume {
        let mut lbl = LabelVolume::zeros(dims);
        for i in lo.0..hi.0 {
            for j in lo.1..hi.1 {
                for k in lo.2..hi.2 {
                    lbl.data[dims.index(i, j, k)] = 1;
                }
            }
        }
        lbl
    }

    #[test]
    fn dice_jaccard_identity_and_overlap_case() {
        let dims = Dims3::new(8, 8, 8);
        // two 4^3 cubes sharing a 2x4x4 slab
        let a = cube(dims, (0, 0, 0), (4, 4, 4));
        let b = cube(dims, (2, 0, 0), (6, 4, 4));
        let m = dice_jaccard(&a, &b, 2).unwrap();
        assert!((m[1].dice - 0.5).abs() < 1e-12);
        assert!((m[1].jaccard - 1.0 / 3.0).abs() < 1e-12);
        // D = 2J / (1 + J)
        for o in &m {
            let d = 2.0 * o.jaccard / (1.0 + o.jaccard);
            assert!((o.dice - d).abs() < 1e-9);
        }
    }

    #[test]
    fn identical_masks_score_perfect_and_zero_distance() {
        let dims = Dims3::new(6, 6, 6);
        let a = cube(dims, (1, 1, 1), (4, 4, 4));
        let m = dice_jaccard(&a, &a, 2).unwrap();
        assert_eq!(m[1].dice, 1.0);
        assert_eq!(m[1].jaccard, 1.0);
        let (hd, asd) = surface_distances(&a, &a, 1).unwrap().unwrap();
        assert_eq!(hd, 0.0);
        assert_eq!(asd, 0.0);
    }

    #[test]
    fn disjoint_masks_zero_dice() {
        let dims = Dims3::new(8, 8, 8);
        let a = cube(dims, (0, 0, 0), (2, 2, 2));
        let b = cube(dims, (4, 4, 4), (6, 6, 6));
        let m = dice_jaccard(&a, &b, 2).unwrap();
        assert_eq!(m[1].dice, 0.0);
        assert_eq!(m[1].jaccard, 0.0);
    }

    #[test]
    fn empty_class_conventions() {
        let dims = Dims3::new(4, 4, 4);
        let empty = LabelVolume::zeros(dims);
        let some = cube(dims, (0, 0, 0), (2, 2, 2));
        let both_empty = dice_jaccard(&empty, &empty, 2).unwrap();
        assert_eq!(both_empty[1].dice, 1.0);
        let one_empty = dice_jaccard(&empty, &some, 2).unwrap();
        assert_eq!(one_empty[1].dice, 0.0);
        assert!(surface_distances(&empty, &some, 1).unwrap().is_none());
    }

    #[test]
    fn shifted_cube_matches_brute_force_oracle() {
        // definitional double loop over boundary voxels, written separately
        let dims = Dims3::new(8, 8, 8);
        let a = cube(dims, (1, 1, 1), (4, 4, 4));
        let b = cube(dims, (2, 1, 1), (5, 4, 4));
        let (hd, asd) = surface_distances(&a, &b, 1).unwrap().unwrap();
        let ba = boundary_voxels(&a, 1);
        let bb = boundary_voxels(&b, 1);
        let mut pool = Vec::new();
        let mut sum_ab = 0.0;
        for p in &ba {
            let mut best = f64::INFINITY;
            for q in &bb {
                let d = ((p.0 as f64 - q.0 as f64).powi(2)
                    + (p.1 as f64 - q.1 as f64).powi(2)
                    + (p.2 as f64 - q.2 as f64).powi(2))
                .sqrt();
                best = best.min(d);
            }
            pool.push(best);
            sum_ab += best;
        }
        let mut sum_ba = 0.0;
        for q in &bb {
            let mut best = f64::INFINITY;
            for p in &ba {
                let d = ((p.0 as f64 - q.0 as f64).powi(2)
                    + (p.1 as f64 - q.1 as f64).powi(2)
                    + (p.2 as f64 - q.2 as f64).powi(2))
                .sqrt();
                best = best.min(d);
            }
            pool.push(best);
            sum_ba += best;
        }
        let expect_asd = 0.5 * (sum_ab / ba.len() as f64 + sum_ba / bb.len() as f64);
        assert!((asd - expect_asd).abs() < 1e-9);
        let expect_hd = percentile(&pool, 0.95);
        assert!((hd - expect_hd).abs() < 1e-9);
        // hd95 never exceeds the true maximum
        let hd_max = pool.iter().cloned().fold(0.0f64, f64::max);
        assert!(hd <= hd_max + 1e-12);
    }

    #[test]
    fn metrics_permutation_invariant_under_relabeling() {
        let dims = Dims3::new(6, 6, 6);
        let mut rng = crate::rng::SeedRng::new(3);
        let mut pred = LabelVolume::zeros(dims);
        let mut gt = LabelVolume::zeros(dims);
        for v in 0..dims.voxels() {
            pred.data[v] = rng.index(3) as u8;
            gt.data[v] = rng.index(3) as u8;
        }
        let base = dice_jaccard(&pred, &gt, 3).unwrap();
        // swap class ids 1 <-> 2 in both volumes
        let swap = |l: &LabelVolume| LabelVolume {
            dims,
            data: l.data.iter().map(|&v| match v {
                1 => 2,
                2 => 1,
                x => x,
            }).collect(),
        };
        let swapped = dice_jaccard(&swap(&pred), &swap(&gt), 3).unwrap();
        assert_eq!(base[1], swapped[2]);
        assert_eq!(base[2], swapped[1]);
        assert_eq!(base[0], swapped[0]);
    }

    #[test]
    fn infer_matches_full_bundle_theta_path() {
        use crate::network::{forward_plain, DecoderChoice, ModelBundle, NetConfig};
        let cfg = NetConfig {
            classes: 2,
            stages: 2,
            base_width: 2,
            convs_per_block: 1,
            time_embed_dim: 8,
            dfeat: 4,
            ..NetConfig::default()
        };
        let bundle = ModelBundle::init(&cfg, 5).unwrap();
        let export = crate::checkpoint::InferenceExport {
            config_hash: 0,
            net_cfg: cfg.clone(),
            decoder_role: "theta".into(),
            enc: bundle.enc.clone(),
            dec: bundle.dec_theta.clone(),
        };
        let dims = Dims3::new(8, 8, 8);
        let mut rng = crate::rng::SeedRng::new(9);
        let x = Volume {
            dims,
            data: (0..dims.voxels()).map(|_| rng.uniform()).collect(),
        };
        let via_export = infer(&export, &x).unwrap();
        let mut tape = Tape::no_grad();
        let (logits, _) = forward_plain(&mut tape, &bundle, &x, DecoderChoice::Theta, false).unwrap();
        let via_bundle = logits.to_class_volume().softmax().argmax();
        assert_eq!(via_export, via_bundle);
    }

    #[test]
    fn metrics_csv_roundtrips_values() {
        let dims = Dims3::new(4, 4, 4);
        let a = cube(dims, (0, 0, 0), (2, 2, 2));
        let b = cube(dims, (1, 0, 0), (3, 2, 2));
        let overlaps = dice_jaccard(&a, &b, 2).unwrap();
        let sd = surface_distances(&a, &b, 1).unwrap();
        let report = MetricReport {
            classes: 2,
            repeats: vec![RepeatReport {
                classes: 2,
                samples: vec![SampleMetrics {
                    sample_id: "s1".into(),
                    per_class: (0..2)
                        .map(|k| ClassMetrics {
                            dice: overlaps[k].dice,
                            jaccard: overlaps[k].jaccard,
                            hd95: if k == 1 { sd.map(|(h, _)| h) } else { None },
                            asd: if k == 1 { sd.map(|(_, s)| s) } else { None },
                        })
                        .collect(),
                }],
            }],
        };
        let dir = std::env::temp_dir().join(format!("triseg-csvrt-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("metrics.csv");
        write_metrics_csv(&report, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut rows = text.lines().skip(1);
        for k in 0..2 {
            let cols: Vec<&str> = rows.next().unwrap().split(',').collect();
            assert_eq!(cols[1], "s1");
            assert_eq!(cols[2], k.to_string());
            assert_eq!(cols[3].parse::<f64>().unwrap(), overlaps[k].dice);
            assert_eq!(cols[4].parse::<f64>().unwrap(), overlaps[k].jaccard);
            if k == 1 {
                assert_eq!(cols[5].parse::<f64>().unwrap(), sd.unwrap().0);
                assert_eq!(cols[6].parse::<f64>().unwrap(), sd.unwrap().1);
            } else {
                assert!(cols[5].is_empty() && cols[6].is_empty());
            }
        }
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn aggregate_mean_matches_hand_computation() {
        let dims = Dims3::new(4, 4, 4);
        let a = cube(dims, (0, 0, 0), (2, 2, 2));
        let b = cube(dims, (0, 0, 0), (3, 3, 3));
        let m1 = dice_jaccard(&a, &b, 2).unwrap();
        let samples = vec![
            SampleMetrics {
                sample_id: "x".into(),
                per_class: vec![
                    ClassMetrics {
                        dice: m1[0].dice,
                        jaccard: m1[0].jaccard,
                        hd95: None,
                        asd: None,
                    },
                    ClassMetrics {
                        dice: m1[1].dice,
                        jaccard: m1[1].jaccard,
                        hd95: Some(2.0),
                        asd: Some(1.0),
                    },
                ],
            },
            SampleMetrics {
                sample_id: "y".into(),
                per_class: vec![
                    ClassMetrics {
                        dice: 1.0,
                        jaccard: 1.0,
                        hd95: None,
                        asd: None,
                    },
                    ClassMetrics {
                        dice: 0.5,
                        jaccard: 1.0 / 3.0,
                        hd95: None,
                        asd: None,
                    },
                ],
            },
        ];
        let rep = RepeatReport {
            samples,
            classes: 2,
        };
        let means = rep.class_means();
        assert!((means[1].dice - (m1[1].dice + 0.5) / 2.0).abs() < 1e-12);
        // distances ignore the sample where they are undefined
        assert_eq!(means[1].hd95, Some(2.0));
        assert!((rep.mean_foreground_dice() - means[1].dice).abs() < 1e-12);
    }
}
