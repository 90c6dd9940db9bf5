//! Command-line entry point: data generation, training, evaluation,
//! ablation grids, and report aggregation.
//!
//! Exit codes: 0 success, 1 usage, 2 configuration, 3 runtime.

mod plots;
mod report;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use triseg_core::checkpoint::{Checkpoint, InferenceExport};
use triseg_core::data::{generate_dataset, load_manifest, DataConfig};
use triseg_core::evaluation::{evaluate_split, write_metrics_csv, write_summary_csv};
use triseg_core::training::{run_training, TrainConfig};
use triseg_core::Error;

const CONFIG_HELP: &str = "\
CONFIG FILES (TOML)

  Training config (train/ablate --config). Every key is optional and falls
  back to the shown default:
    data_dir = \"data\"            dataset directory (manifest.json + samples)
    out_dir = \"runs/default\"     run output directory
    seed = 1                     master seed (data order, noise, masks, init)
    epochs = 20                  epochs over the unlabeled stream
    max_iterations = 0           LR horizon and run length; 0 = epochs*steps
    lr_init = 0.01               initial learning rate, decays (1 - i/I)^0.9
    batch_labeled = 2            labeled samples per batch
    batch_unlabeled = 2          unlabeled samples per batch
    mask_ratio = 0.5             patch-mask drop ratio r
    patch_size = 0               mask block size b; 0 = extent/16
    cutmix_fraction = [0.2, 0.5] CutMix box volume fraction range
    gamma_ema = 0.99             EMA teacher momentum
    diffusion_t = 1000           forward-process steps T
    ddim_steps = 10              DDIM sampling steps for pseudo-labels
    gumbel_on_psi = false        reparameterize the supervised branch instead
    literal_corr_scale = false   scale correlation softmax output, not input
    log_every = 10               stderr progress cadence (0 = quiet)
    ckpt_every = 0               periodic checkpoint cadence (0 = final only)
    [sgd]      momentum = 0.9, weight_decay = 1e-4
    [weights]  alpha = 2.0 (masked modeling), beta = 0.1 (distillation),
               gamma = 0.2 (masked reconstruction), eta = 1.2 (correlation)
    [rs]       tau_g = 1.0 (Gumbel-Softmax temperature),
               sigma_blur = 1.0 (teacher-1 smoothing)
    [drs]      window = 50, exponent = 0.2, w_min = 0.1,
               lambda_floor = 1e-4, inverse_dice_factor = true
    [net]      classes = 3 (overridden by the manifest), stages = 3,
               base_width = 8, convs_per_block = 2, time_embed_dim = 32,
               dfeat = 16, pool_target = 8, leaky_slope = 0.01
    [ablation] enable_mic/enable_kd/enable_rec/enable_corr = true,
               teacher1_only/teacher2_only = false, supervised_only = false

  Data config (generate-data --config):
    classes = 3                  label classes including background
    shape = [32, 32, 32]         volume dims, each >= 16 and divisible by 16
    samples_per_domain = 10
    labeled_per_domain = 1       labeled samples per training domain
    test_domains = [2]           domains held out as the test split
    imbalance = false            shrink the last two classes
    [[domain_transforms]]        one block per domain:
    gamma = 1.0, bias_field_strength = 0.0, noise_sigma = 0.01,
    contrast_inversion = false

ENVIRONMENT
    TRISEG_OUT_ROOT              when set, relative output paths are created
                                 under this root
";

#[derive(Parser)]
#[command(
    name = "triseg",
    version,
    about = "Semi-supervised 3D segmentation trainer on synthetic multi-domain phantoms",
    after_long_help = CONFIG_HELP
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic multi-domain dataset.
    GenerateData {
        /// TOML data config; defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory for manifest.json and sample files.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Train a model from a TOML config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Resume from a checkpoint produced by the same config.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate checkpoints or inference exports on a split.
    Eval {
        /// Checkpoint (.ckpt) or export; repeat for mean +- std across runs.
        #[arg(long, required = true, num_args = 1..)]
        checkpoint: Vec<PathBuf>,
        /// Dataset directory.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Output directory for metrics.csv and summary.csv.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train + evaluate every subset of the listed loss toggles.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated toggles from {mic, kd, rec, corr}.
        #[arg(long, default_value = "mic,kd,rec,corr")]
        grid: String,
        /// Output root; one run directory per subset plus a summary CSV.
        #[arg(long)]
        out: PathBuf,
    },
    /// Aggregate loss curves and summaries from finished runs.
    Report {
        /// Run directories (each holding loss.csv and optionally eval CSVs).
        #[arg(long, required = true, num_args = 1..)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Relative output paths land under `TRISEG_OUT_ROOT` when it is set.
fn resolve_out(path: &Path) -> PathBuf {
    if path.is_absolute() {
        return path.to_path_buf();
    }
    match std::env::var_os("TRISEG_OUT_ROOT") {
        Some(root) => PathBuf::from(root).join(path),
        None => path.to_path_buf(),
    }
}

fn load_export(path: &Path) -> Result<InferenceExport, Error> {
    if let Ok(export) = InferenceExport::load(path) {
        return Ok(export);
    }
    let ckpt = Checkpoint::load(path)?;
    // choose the serving decoder the checkpointed run would have exported
    let cfg_json = ckpt
        .extra
        .get("train_config")
        .ok_or_else(|| Error::Runtime("checkpoint missing its train config".into()))?;
    let cfg: TrainConfig = serde_json::from_str(cfg_json)
        .map_err(|e| Error::Runtime(format!("checkpoint train config: {e}")))?;
    let role = if cfg.ablation.supervised_only {
        "psi"
    } else {
        "theta"
    };
    Ok(InferenceExport {
        config_hash: ckpt.config_hash,
        net_cfg: ckpt.net_cfg.clone(),
        decoder_role: role.into(),
        enc: ckpt.store("enc")?.clone(),
        dec: ckpt
            .store(if role == "psi" { "dec_psi" } else { "dec_theta" })?
            .clone(),
    })
}

fn cmd_generate_data(config: Option<&Path>, out: &Path, seed: u64) -> Result<(), Error> {
    let cfg = match config {
        Some(p) => {
            let s = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            toml::from_str::<DataConfig>(&s)
                .map_err(|e| Error::Config(format!("data config parse: {e}")))?
        }
        None => DataConfig::default(),
    };
    let out = resolve_out(out);
    let manifest = generate_dataset(&cfg, seed, &out)?;
    println!(
        "generated {} train + {} test samples ({} classes, {}) in {}",
        manifest.train.len(),
        manifest.test.len(),
        manifest.classes,
        manifest.dims(),
        out.display()
    );
    Ok(())
}

fn cmd_train(config: &Path, resume: Option<&Path>) -> Result<(), Error> {
    let mut cfg = TrainConfig::from_toml_path(config)?;
    cfg.out_dir = resolve_out(Path::new(&cfg.out_dir)).to_string_lossy().into_owned();
    let artifacts = run_training(&cfg, resume)?;
    println!(
        "trained {} iterations; checkpoint {}, export {}, losses {}",
        artifacts.iterations,
        artifacts.final_checkpoint.display(),
        artifacts.export.display(),
        artifacts.loss_csv.display()
    );
    Ok(())
}

fn cmd_eval(checkpoints: &[PathBuf], data: &Path, split: &str, out: Option<&Path>) -> Result<(), Error> {
    let manifest = load_manifest(data)?;
    let exports: Vec<InferenceExport> = checkpoints
        .iter()
        .map(|p| load_export(p))
        .collect::<Result<_, _>>()?;
    let report = evaluate_split(data, &manifest, split, &exports)?;
    let out = resolve_out(out.unwrap_or(Path::new("eval")));
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    write_metrics_csv(&report, &out.join("metrics.csv"))?;
    write_summary_csv(&report, &out.join("summary.csv"))?;
    for row in report.aggregate() {
        let (dm, ds) = row.dice;
        println!("{:>8}: dice {:.4} +- {:.4}", row.label, dm, ds);
    }
    println!("wrote {}", out.join("summary.csv").display());
    Ok(())
}

fn parse_grid(grid: &str) -> Result<Vec<String>, Error> {
    let mut toggles = Vec::new();
    for t in grid.split(',').map(str::trim).filter(|t| !t.is_empty()) {
        match t {
            "mic" | "kd" | "rec" | "corr" => toggles.push(t.to_string()),
            other => {
                return Err(Error::Config(format!(
                    "unknown ablation toggle '{other}' (expected mic, kd, rec, corr)"
                )))
            }
        }
    }
    if toggles.is_empty() {
        return Err(Error::Config("ablation grid is empty".into()));
    }
    Ok(toggles)
}

fn cmd_ablate(config: &Path, grid: &str, out: &Path) -> Result<(), Error> {
    let base = TrainConfig::from_toml_path(config)?;
    let toggles = parse_grid(grid)?;
    let out = resolve_out(out);
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let mut summary = String::from("run,mic,kd,rec,corr,mean_dice\n");
    // subsets in binary-counting order for deterministic logs
    for mask in 0..(1usize << toggles.len()) {
        let mut cfg = base.clone();
        for (bit, name) in toggles.iter().enumerate() {
            let on = mask & (1 << bit) != 0;
            match name.as_str() {
                "mic" => cfg.ablation.enable_mic = on,
                "kd" => cfg.ablation.enable_kd = on,
                "rec" => cfg.ablation.enable_rec = on,
                "corr" => cfg.ablation.enable_corr = on,
                _ => unreachable!(),
            }
        }
        let label: Vec<&str> = toggles
            .iter()
            .enumerate()
            .filter(|(bit, _)| mask & (1 << bit) != 0)
            .map(|(_, n)| n.as_str())
            .collect();
        let name = if label.is_empty() {
            "none".to_string()
        } else {
            label.join("+")
        };
        let run_dir = out.join(format!("ablate_{name}"));
        cfg.out_dir = run_dir.to_string_lossy().into_owned();
        eprintln!("== ablation '{name}' ==");
        let artifacts = run_training(&cfg, None)?;
        let manifest = load_manifest(Path::new(&cfg.data_dir))?;
        let export = InferenceExport::load(&artifacts.export)?;
        let report = evaluate_split(Path::new(&cfg.data_dir), &manifest, "test", &[export])?;
        write_summary_csv(&report, &run_dir.join("summary.csv"))?;
        let a = &cfg.ablation;
        summary.push_str(&format!(
            "{name},{},{},{},{},{}\n",
            a.enable_mic as u8,
            a.enable_kd as u8,
            a.enable_rec as u8,
            a.enable_corr as u8,
            report.mean_foreground_dice()
        ));
    }
    let path = out.join("ablation_summary.csv");
    std::fs::write(&path, summary).map_err(|e| Error::io(&path, e))?;
    println!("wrote {}", path.display());
    Ok(())
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.cmd {
        Cmd::GenerateData { config, out, seed } => {
            cmd_generate_data(config.as_deref(), &out, seed)
        }
        Cmd::Train { config, resume } => cmd_train(&config, resume.as_deref()),
        Cmd::Eval {
            checkpoint,
            data,
            split,
            out,
        } => cmd_eval(&checkpoint, &data, &split, out.as_deref()),
        Cmd::Ablate { config, grid, out } => cmd_ablate(&config, &grid, &out),
        Cmd::Report { runs, out } => report::cmd_report(&runs, &resolve_out(&out)),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    print!("{e}");
                    return ExitCode::SUCCESS;
                }
                _ => 1,
            };
            eprint!("{e}");
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let code = match e {
                Error::Config(_) => 2,
                _ => 3,
            };
            ExitCode::from(code)
        }
    }
}
