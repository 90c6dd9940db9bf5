//! End-to-end learning-signal criterion: on the synthetic three-domain
//! benchmark (K = 3, 32^3 volumes, 10% labeled, one domain held out as the
//! test split), full semi-supervised training must beat the supervised-only
//! baseline (denoising + difficulty losses, same seeds) by at least two
//! Dice points absolute, averaged over three repeats; and one ablation row
//! per optional loss term must complete with finite losses.
//!
//! This is the expensive test (tens of minutes on a two-core CPU). Skip it
//! during development with `cargo test -- --skip e2e`.

use std::fs;
use std::path::{Path, PathBuf};

use triseg_core::checkpoint::InferenceExport;
use triseg_core::data::{generate_dataset, load_manifest, DataConfig};
use triseg_core::evaluation::evaluate_split;
use triseg_core::training::{run_training, TrainConfig};

fn arm_config(data: &Path, out: &Path, seed: u64, supervised_only: bool) -> TrainConfig {
    let mut cfg = TrainConfig {
        data_dir: data.to_string_lossy().into_owned(),
        out_dir: out.to_string_lossy().into_owned(),
        seed,
        max_iterations: 140,
        lr_init: 0.004,
        gamma_ema: 0.9,
        ddim_steps: 4,
        log_every: 50,
        ..TrainConfig::default()
    };
    cfg.ablation.supervised_only = supervised_only;
    cfg
}

fn mean_test_dice(data: &Path, export_path: &Path) -> f64 {
    let manifest = load_manifest(data).unwrap();
    let export = InferenceExport::load(export_path).unwrap();
    let report = evaluate_split(data, &manifest, "test", &[export]).unwrap();
    report.mean_foreground_dice()
}

#[test]
fn acceptance_10_e2e_learning_signal() {
    let base: PathBuf = std::env::temp_dir().join(format!("triseg-acc10-{}", std::process::id()));
    let _ = fs::remove_dir_all(&base);
    fs::create_dir_all(&base).unwrap();
    let data = base.join("data");
    // 3 domains x 10 samples; domains 0 and 1 train with one labeled sample
    // each (2/20 = 10% labeled), domain 2 is the held-out test split
    generate_dataset(&DataConfig::default(), 7, &data).unwrap();

    let seeds = [101u64, 202, 303];
    let mut full_scores = Vec::new();
    let mut sup_scores = Vec::new();
    for &seed in &seeds {
        let sup_out = base.join(format!("sup_{seed}"));
        let art = run_training(&arm_config(&data, &sup_out, seed, true), None).unwrap();
        let sup = mean_test_dice(&data, &art.export);
        eprintln!("seed {seed}: supervised-only mean test dice {sup:.4}");
        sup_scores.push(sup);

        let full_out = base.join(format!("full_{seed}"));
        let art = run_training(&arm_config(&data, &full_out, seed, false), None).unwrap();
        let full = mean_test_dice(&data, &art.export);
        eprintln!("seed {seed}: full training mean test dice {full:.4}");
        full_scores.push(full);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (full_mean, sup_mean) = (mean(&full_scores), mean(&sup_scores));
    let gap = full_mean - sup_mean;
    eprintln!(
        "full {full_mean:.4} vs supervised-only {sup_mean:.4} (gap {:.2} dice points)",
        gap * 100.0
    );
    assert!(
        gap >= 0.02,
        "full training must beat the supervised baseline by >= 2 dice points, got {:.2} ({full_scores:?} vs {sup_scores:?})",
        gap * 100.0
    );

    // one ablation row per optional loss term completes with finite losses
    // (run_training aborts on any non-finite component)
    for toggle in ["mic", "kd", "rec", "corr"] {
        let out = base.join(format!("ablate_no_{toggle}"));
        let mut cfg = arm_config(&data, &out, 11, false);
        cfg.max_iterations = 8;
        match toggle {
            "mic" => cfg.ablation.enable_mic = false,
            "kd" => cfg.ablation.enable_kd = false,
            "rec" => cfg.ablation.enable_rec = false,
            "corr" => cfg.ablation.enable_corr = false,
            _ => unreachable!(),
        }
        let art = run_training(&cfg, None).unwrap();
        assert_eq!(art.iterations, 8);
        let log = fs::read_to_string(&art.loss_csv).unwrap();
        for line in log.lines().skip(1) {
            for cell in line.split(',') {
                let v: f64 = cell.parse().unwrap();
                assert!(v.is_finite(), "non-finite value in ablation row {toggle}");
            }
        }
        eprintln!("ablation row without {toggle}: finite over 8 iterations");
    }

    let _ = fs::remove_dir_all(&base);
    println!(
        "ACCEPTANCE 10 end-to-end learning signal (full {full_mean:.4} vs supervised {sup_mean:.4}, gap {:.2} points): PASS",
        gap * 100.0
    );
}
