//! Synthetic multi-domain 3D segmentation dataset: generation, persistence,
//! and batching.
//!
//! Samples are ellipsoid phantoms: `classes - 1` foreground blobs on a
//! background, with per-domain intensity transforms (gamma, bias field,
//! noise, optional contrast inversion) standing in for scanner/modality
//! shift. Images are stored as raw little-endian f32, labels as raw u8, and
//! the manifest as JSON next to them.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeedRng;
use crate::vol::{Dims3, LabelVolume, Volume};

/// Label-preserving intensity transform attached to one domain.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct DomainTransform {
    /// Intensity exponent applied to the [0,1] image.
    pub gamma: f64,
    /// Strength of a smooth multiplicative bias field (>= 0).
    pub bias_field_strength: f64,
    /// Additive Gaussian noise sigma (>= 0).
    pub noise_sigma: f64,
    pub contrast_inversion: bool,
}

impl Default for DomainTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl DomainTransform {
    pub fn identity() -> Self {
        DomainTransform {
            gamma: 1.0,
            bias_field_strength: 0.0,
            noise_sigma: 0.0,
            contrast_inversion: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.gamma <= 0.0 || self.bias_field_strength < 0.0 || self.noise_sigma < 0.0 {
            return Err(Error::Config(format!("invalid domain transform {self:?}")));
        }
        Ok(())
    }

    /// Applies gamma, then the bias field, then inversion, then noise; the
    /// result is clamped to [0, 1]. Labels are never touched.
    pub fn apply(&self, image: &mut Volume, rng: &mut SeedRng) {
        let dims = image.dims;
        for v in image.data.iter_mut() {
            *v = v.clamp(0.0, 1.0).powf(self.gamma);
        }
        if self.bias_field_strength > 0.0 {
            let freq: Vec<f64> = (0..3).map(|_| rng.uniform_range(0.5, 1.5)).collect();
            let phase: Vec<f64> = (0..3).map(|_| rng.uniform()).collect();
            let tau = std::f64::consts::TAU;
            for i in 0..dims.l {
                let fz = (tau * (freq[0] * i as f64 / dims.l as f64 + phase[0])).cos();
                for j in 0..dims.w {
                    let fy = (tau * (freq[1] * j as f64 / dims.w as f64 + phase[1])).cos();
                    for k in 0..dims.h {
                        let fx = (tau * (freq[2] * k as f64 / dims.h as f64 + phase[2])).cos();
                        let b = 1.0 + self.bias_field_strength * fz * fy * fx;
                        *image.at_mut(i, j, k) *= b;
                    }
                }
            }
        }
        if self.contrast_inversion {
            for v in image.data.iter_mut() {
                *v = 1.0 - v.clamp(0.0, 1.0);
            }
        }
        if self.noise_sigma > 0.0 {
            for v in image.data.iter_mut() {
                *v += self.noise_sigma * rng.standard_normal();
            }
        }
        for v in image.data.iter_mut() {
            *v = v.clamp(0.0, 1.0);
        }
    }
}

/// Generation parameters; `generate_dataset` consumes this plus a seed.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub classes: usize,
    pub shape: (usize, usize, usize),
    /// One transform per domain; domain count is the vector length.
    pub domain_transforms: Vec<DomainTransform>,
    pub samples_per_domain: usize,
    /// Labeled samples per *training* domain.
    pub labeled_per_domain: usize,
    /// Domains routed to the test split (held out from training).
    pub test_domains: Vec<usize>,
    /// Shrink the last two foreground classes to stress class imbalance.
    pub imbalance: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            classes: 3,
            shape: (32, 32, 32),
            domain_transforms: vec![
                DomainTransform {
                    gamma: 0.75,
                    bias_field_strength: 0.15,
                    noise_sigma: 0.02,
                    contrast_inversion: false,
                },
                DomainTransform {
                    gamma: 1.5,
                    bias_field_strength: 0.3,
                    noise_sigma: 0.03,
                    contrast_inversion: false,
                },
                DomainTransform {
                    gamma: 1.1,
                    bias_field_strength: 0.22,
                    noise_sigma: 0.025,
                    contrast_inversion: false,
                },
            ],
            samples_per_domain: 10,
            labeled_per_domain: 1,
            test_domains: vec![2],
            imbalance: false,
        }
    }
}

impl DataConfig {
    pub fn dims(&self) -> Dims3 {
        Dims3::new(self.shape.0, self.shape.1, self.shape.2)
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config(format!(
                "classes must be >= 2, got {}",
                self.classes
            )));
        }
        let d = self.dims();
        for extent in [d.l, d.w, d.h] {
            if extent < 16 || extent % 16 != 0 {
                return Err(Error::Config(format!(
                    "shape dims must be >= 16 and divisible by 16, got {d}"
                )));
            }
        }
        if self.domain_transforms.is_empty() {
            return Err(Error::Config("at least one domain required".into()));
        }
        for t in &self.domain_transforms {
            t.validate()?;
        }
        for &td in &self.test_domains {
            if td >= self.domain_transforms.len() {
                return Err(Error::Config(format!("test domain {td} out of range")));
            }
        }
        if self.samples_per_domain == 0 {
            return Err(Error::Config("samples_per_domain must be > 0".into()));
        }
        if self.labeled_per_domain > self.samples_per_domain {
            return Err(Error::Config(
                "labeled_per_domain exceeds samples_per_domain".into(),
            ));
        }
        Ok(())
    }
}

/// One sample reference inside a split.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct SplitEntry {
    pub id: String,
    pub domain: usize,
    pub labeled: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DatasetManifest {
    pub classes: usize,
    pub shape: (usize, usize, usize),
    pub seed: u64,
    pub domains: Vec<DomainTransform>,
    pub train: Vec<SplitEntry>,
    pub test: Vec<SplitEntry>,
}

impl DatasetManifest {
    pub fn dims(&self) -> Dims3 {
        Dims3::new(self.shape.0, self.shape.1, self.shape.2)
    }

    pub fn split(&self, name: &str) -> Result<&[SplitEntry]> {
        match name {
            "train" => Ok(&self.train),
            "test" => Ok(&self.test),
            other => Err(Error::Validation(format!("unknown split '{other}'"))),
        }
    }

    fn validate(&self) -> Result<()> {
        for (name, entries) in [("train", &self.train), ("test", &self.test)] {
            let mut seen = BTreeSet::new();
            for e in entries {
                if !seen.insert(&e.id) {
                    return Err(Error::Validation(format!(
                        "split '{name}' references '{}' twice",
                        e.id
                    )));
                }
            }
        }
        Ok(())
    }
}

/// A sample held in memory. The label is absent when the sample enters a
/// batch through the unlabeled stream.
#[derive(Debug, Clone)]
pub struct VolumeSample {
    pub sample_id: String,
    pub domain_id: usize,
    pub image: Volume,
    pub label: Option<LabelVolume>,
}

impl VolumeSample {
    pub fn validate(&self, classes: usize) -> Result<()> {
        if let Some(lbl) = &self.label {
            if lbl.dims != self.image.dims {
                return Err(Error::Shape(format!(
                    "sample {}: image {} vs label {}",
                    self.sample_id, self.image.dims, lbl.dims
                )));
            }
            if (lbl.max_class() as usize) >= classes {
                return Err(Error::Validation(format!(
                    "sample {}: label value {} >= classes {}",
                    self.sample_id,
                    lbl.max_class(),
                    classes
                )));
            }
        }
        Ok(())
    }
}

/// One training batch: labeled samples carry labels, unlabeled do not.
#[derive(Debug, Clone)]
pub struct Batch {
    pub labeled: Vec<VolumeSample>,
    pub unlabeled: Vec<VolumeSample>,
}

// ---------------------------------------------------------------------------
// generation
// ---------------------------------------------------------------------------

fn smooth3(image: &Volume) -> Volume {
    // separable blur with [0.25, 0.5, 0.25] taps, replicate edges
    let dims = image.dims;
    let taps = [0.25, 0.5, 0.25];
    let mut cur = image.data.clone();
    for axis in 0..3 {
        let mut next = vec![0.0; cur.len()];
        for i in 0..dims.l {
            for j in 0..dims.w {
                for k in 0..dims.h {
                    let mut acc = 0.0;
                    for (ti, t) in taps.iter().enumerate() {
                        let off = ti as isize - 1;
                        let (mut a, mut b, mut c) = (i as isize, j as isize, k as isize);
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
                    next[dims.index(i, j, k)] = acc;
                }
            }
        }
        cur = next;
    }
    Volume { dims, data: cur }
}

/// Draws the phantom geometry and base intensities for one sample.
fn synth_sample(cfg: &DataConfig, rng: &mut SeedRng) -> (Volume, LabelVolume) {
    let dims = cfg.dims();
    let mut label = LabelVolume::zeros(dims);
    let mut image = Volume::zeros(dims);
    for v in image.data.iter_mut() {
        *v = 0.22;
    }
    let extents = [dims.l as f64, dims.w as f64, dims.h as f64];
    for class in 1..cfg.classes {
        // later classes overwrite earlier ones where ellipsoids overlap
        let scale = if cfg.imbalance {
            if class == cfg.classes - 1 {
                0.25
            } else if cfg.classes > 2 && class == cfg.classes - 2 {
                0.75
            } else {
                1.0
            }
        } else {
            1.0
        };
        let center: Vec<f64> = extents
            .iter()
            .map(|&e| rng.uniform_range(0.30, 0.70) * e)
            .collect();
        let semi: Vec<f64> = extents
            .iter()
            .map(|&e| rng.uniform_range(0.12, 0.32) * e * scale)
            .collect();
        let intensity = 0.55 + 0.4 * (class as f64 - 1.0) / (cfg.classes.saturating_sub(2).max(1) as f64);
        for i in 0..dims.l {
            for j in 0..dims.w {
                for k in 0..dims.h {
                    let dz = (i as f64 - center[0]) / semi[0];
                    let dy = (j as f64 - center[1]) / semi[1];
                    let dx = (k as f64 - center[2]) / semi[2];
                    if dz * dz + dy * dy + dx * dx <= 1.0 {
                        label.data[dims.index(i, j, k)] = class as u8;
                        image.data[dims.index(i, j, k)] = intensity;
                    }
                }
            }
        }
    }
    // mild texture, then a blur so boundaries are graded
    for v in image.data.iter_mut() {
        *v += 0.04 * (rng.uniform() - 0.5);
    }
    (smooth3(&image), label)
}

fn image_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}.img.f32"))
}

fn label_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}.lbl.u8"))
}

fn write_image(path: &Path, vol: &Volume) -> Result<()> {
    let mut bytes = Vec::with_capacity(vol.data.len() * 4);
    for &v in &vol.data {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_image(path: &Path, dims: Dims3) -> Result<Volume> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != dims.voxels() * 4 {
        return Err(Error::Validation(format!(
            "{}: expected {} f32 values, file holds {} bytes",
            path.display(),
            dims.voxels(),
            bytes.len()
        )));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Volume::from_vec(dims, data)
}

fn read_label(path: &Path, dims: Dims3) -> Result<LabelVolume> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    LabelVolume::from_vec(dims, bytes)
}

/// Generates and persists the dataset; deterministic for a fixed
/// `(config, seed)` pair.
pub fn generate_dataset(cfg: &DataConfig, seed: u64, out_dir: &Path) -> Result<DatasetManifest> {
    cfg.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut rng = SeedRng::new(seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    let mut counter = 0usize;
    for (domain, transform) in cfg.domain_transforms.iter().enumerate() {
        let is_test = cfg.test_domains.contains(&domain);
        for s in 0..cfg.samples_per_domain {
            let id = format!("s{counter:04}");
            counter += 1;
            let (mut image, label) = synth_sample(cfg, &mut rng);
            transform.apply(&mut image, &mut rng);
            write_image(&image_path(out_dir, &id), &image)?;
            fs::write(label_path(out_dir, &id), &label.data)
                .map_err(|e| Error::io(label_path(out_dir, &id), e))?;
            let entry = SplitEntry {
                id,
                domain,
                labeled: !is_test && s < cfg.labeled_per_domain,
            };
            if is_test {
                test.push(SplitEntry {
                    labeled: true,
                    ..entry
                });
            } else {
                train.push(entry);
            }
        }
    }
    let manifest = DatasetManifest {
        classes: cfg.classes,
        shape: cfg.shape,
        seed,
        domains: cfg.domain_transforms.clone(),
        train,
        test,
    };
    save_manifest(&manifest, out_dir)?;
    Ok(manifest)
}

pub fn save_manifest(manifest: &DatasetManifest, dir: &Path) -> Result<()> {
    let path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(manifest)
        .map_err(|e| Error::Runtime(format!("manifest serialization: {e}")))?;
    fs::write(&path, json).map_err(|e| Error::io(&path, e))
}

/// Loads the manifest and checks every referenced sample file exists.
pub fn load_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join("manifest.json");
    let json = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: DatasetManifest = serde_json::from_str(&json)
        .map_err(|e| Error::Validation(format!("manifest parse: {e}")))?;
    manifest.validate()?;
    for entry in manifest.train.iter().chain(manifest.test.iter()) {
        for p in [image_path(dir, &entry.id), label_path(dir, &entry.id)] {
            if !p.exists() {
                return Err(Error::Validation(format!(
                    "manifest references missing file {}",
                    p.display()
                )));
            }
        }
    }
    Ok(manifest)
}

/// Loads one sample; the label is attached only when `with_label` holds.
pub fn load_sample(
    dir: &Path,
    manifest: &DatasetManifest,
    entry: &SplitEntry,
    with_label: bool,
) -> Result<VolumeSample> {
    let dims = manifest.dims();
    let image = read_image(&image_path(dir, &entry.id), dims)?;
    let label = if with_label {
        Some(read_label(&label_path(dir, &entry.id), dims)?)
    } else {
        None
    };
    let sample = VolumeSample {
        sample_id: entry.id.clone(),
        domain_id: entry.domain,
        image,
        label,
    };
    sample.validate(manifest.classes)?;
    Ok(sample)
}

/// Picks `n_labeled + n_unlabeled` distinct entries uniformly, without
/// replacement within the batch.
pub fn choose_batch_entries<'a>(
    split_name: &str,
    entries: &'a [SplitEntry],
    n_labeled: usize,
    n_unlabeled: usize,
    rng: &mut SeedRng,
) -> Result<(Vec<&'a SplitEntry>, Vec<&'a SplitEntry>)> {
    let labeled: Vec<&SplitEntry> = entries.iter().filter(|e| e.labeled).collect();
    let unlabeled: Vec<&SplitEntry> = entries.iter().filter(|e| !e.labeled).collect();
    if labeled.len() < n_labeled || unlabeled.len() < n_unlabeled {
        return Err(Error::Validation(format!(
            "split '{split_name}' has {} labeled / {} unlabeled samples, need {n_labeled}+{n_unlabeled}",
            labeled.len(),
            unlabeled.len()
        )));
    }
    let li = rng.sample_distinct(labeled.len(), n_labeled);
    let ui = rng.sample_distinct(unlabeled.len(), n_unlabeled);
    Ok((
        li.into_iter().map(|i| labeled[i]).collect(),
        ui.into_iter().map(|i| unlabeled[i]).collect(),
    ))
}

/// Uniform batch sampling from a split (the spec-level operation; the
/// training loop uses its own epoch-cycled sampler).
pub fn sample_batch(
    dir: &Path,
    manifest: &DatasetManifest,
    split: &str,
    n_labeled: usize,
    n_unlabeled: usize,
    rng: &mut SeedRng,
) -> Result<Batch> {
    let entries = manifest.split(split)?;
    let (lab, unl) = choose_batch_entries(split, entries, n_labeled, n_unlabeled, rng)?;
    let labeled = lab
        .into_iter()
        .map(|e| load_sample(dir, manifest, e, true))
        .collect::<Result<Vec<_>>>()?;
    let unlabeled = unl
        .into_iter()
        .map(|e| load_sample(dir, manifest, e, false))
        .collect::<Result<Vec<_>>>()?;
    Ok(Batch { labeled, unlabeled })
}

/// Total voxels of each class over a set of label volumes.
pub fn class_voxel_counts(labels: &[LabelVolume], classes: usize) -> Vec<u64> {
    let mut counts = vec![0u64; classes];
    for lbl in labels {
        for &v in &lbl.data {
            counts[v as usize] += 1;
        }
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmpdir(tag: &str) -> PathBuf {
        let dir = std::env::temp_dir().join(format!("triseg-data-{tag}-{}", std::process::id()));
        let _ = fs::remove_dir_all(&dir);
        fs::create_dir_all(&dir).unwrap();
        dir
    }

    fn small_cfg() -> DataConfig {
        DataConfig {
            samples_per_domain: 4,
            labeled_per_domain: 2,
            ..DataConfig::default()
        }
    }

    #[test]
    fn generate_produces_expected_classes() {
        let dir = tmpdir("gen");
        let cfg = small_cfg();
        let manifest = generate_dataset(&cfg, 7, &dir).unwrap();
        assert_eq!(manifest.train.len() + manifest.test.len(), 12);
        let mut seen = BTreeSet::new();
        for e in manifest.train.iter().chain(manifest.test.iter()) {
            let s = load_sample(&dir, &manifest, e, true).unwrap();
            for &v in &s.label.as_ref().unwrap().data {
                seen.insert(v);
            }
        }
        assert_eq!(seen, BTreeSet::from([0u8, 1, 2]));
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn generation_is_deterministic() {
        let (d1, d2) = (tmpdir("det1"), tmpdir("det2"));
        let cfg = small_cfg();
        let m1 = generate_dataset(&cfg, 99, &d1).unwrap();
        let m2 = generate_dataset(&cfg, 99, &d2).unwrap();
        assert_eq!(m1, m2);
        for e in m1.train.iter().chain(m1.test.iter()) {
            let a = fs::read(image_path(&d1, &e.id)).unwrap();
            let b = fs::read(image_path(&d2, &e.id)).unwrap();
            assert_eq!(a, b, "image bytes differ for {}", e.id);
            let a = fs::read(label_path(&d1, &e.id)).unwrap();
            let b = fs::read(label_path(&d2, &e.id)).unwrap();
            assert_eq!(a, b, "label bytes differ for {}", e.id);
        }
        fs::remove_dir_all(&d1).unwrap();
        fs::remove_dir_all(&d2).unwrap();
    }

    #[test]
    fn invalid_shape_rejected() {
        let cfg = DataConfig {
            shape: (20, 32, 32),
            ..small_cfg()
        };
        assert!(matches!(
            generate_dataset(&cfg, 1, &tmpdir("bad")),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn imbalance_shrinks_minor_classes() {
        let dir = tmpdir("imb");
        let cfg = DataConfig {
            imbalance: true,
            samples_per_domain: 6,
            ..small_cfg()
        };
        let manifest = generate_dataset(&cfg, 13, &dir).unwrap();
        let labels: Vec<LabelVolume> = manifest
            .train
            .iter()
            .chain(manifest.test.iter())
            .map(|e| load_sample(&dir, &manifest, e, true).unwrap().label.unwrap())
            .collect();
        let counts = class_voxel_counts(&labels, 3);
        let fg: Vec<u64> = counts[1..].to_vec();
        let smallest = *fg.iter().min().unwrap() as f64;
        let largest = *fg.iter().max().unwrap() as f64;
        assert!(
            smallest < 0.2 * largest,
            "smallest {smallest} vs largest {largest}"
        );
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn transform_never_touches_labels() {
        let cfg = small_cfg();
        let mut rng = SeedRng::new(5);
        let (mut img, lbl) = synth_sample(&cfg, &mut rng);
        let before = lbl.clone();
        for t in &cfg.domain_transforms {
            t.apply(&mut img, &mut rng);
        }
        assert_eq!(before, lbl);
        assert!(img.data.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn manifest_roundtrip() {
        let dir = tmpdir("rt");
        let manifest = generate_dataset(&small_cfg(), 21, &dir).unwrap();
        let loaded = load_manifest(&dir).unwrap();
        assert_eq!(manifest, loaded);
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn missing_file_detected_on_load() {
        let dir = tmpdir("missing");
        let manifest = generate_dataset(&small_cfg(), 3, &dir).unwrap();
        fs::remove_file(image_path(&dir, &manifest.train[0].id)).unwrap();
        assert!(load_manifest(&dir).is_err());
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn batch_ids_disjoint_and_shaped() {
        let dir = tmpdir("batch");
        let cfg = DataConfig {
            samples_per_domain: 10,
            labeled_per_domain: 2,
            ..small_cfg()
        };
        let manifest = generate_dataset(&cfg, 4, &dir).unwrap();
        let mut rng = SeedRng::new(1);
        let batch = sample_batch(&dir, &manifest, "train", 2, 2, &mut rng).unwrap();
        assert_eq!(batch.labeled.len(), 2);
        assert_eq!(batch.unlabeled.len(), 2);
        assert!(batch.labeled.iter().all(|s| s.label.is_some()));
        assert!(batch.unlabeled.iter().all(|s| s.label.is_none()));
        let mut ids: Vec<&str> = batch
            .labeled
            .iter()
            .chain(batch.unlabeled.iter())
            .map(|s| s.sample_id.as_str())
            .collect();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), 4);
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn batch_sampling_uniform_over_labeled() {
        // frequency of each labeled id over many draws stays near uniform
        let entries: Vec<SplitEntry> = (0..8)
            .map(|i| SplitEntry {
                id: format!("s{i}"),
                domain: 0,
                labeled: i < 4,
            })
            .collect();
        let mut rng = SeedRng::new(10);
        let mut counts = std::collections::BTreeMap::<String, usize>::new();
        let draws = 10_000;
        for _ in 0..draws {
            let (lab, _) = choose_batch_entries("train", &entries, 2, 2, &mut rng).unwrap();
            for e in lab {
                *counts.entry(e.id.clone()).or_default() += 1;
            }
        }
        let expect = draws as f64 * 2.0 / 4.0;
        for (_, c) in counts {
            assert!((c as f64 - expect).abs() < 0.05 * expect);
        }
    }

    #[test]
    fn insufficient_labeled_names_split() {
        let entries = vec![SplitEntry {
            id: "only".into(),
            domain: 0,
            labeled: true,
        }];
        let mut rng = SeedRng::new(2);
        let err = choose_batch_entries("train", &entries, 2, 2, &mut rng).unwrap_err();
        assert!(err.to_string().contains("train"), "{err}");
    }
}
