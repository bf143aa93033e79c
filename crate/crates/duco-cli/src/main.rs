//! `duco`: the full harmonization pipeline as one binary — synthetic data,
//! training, single-image inference, dataset evaluation, color analysis,
//! weight-map export and preference ranking.
//!
//! Every command is deterministic given its flags and config file: all
//! randomness flows from explicit seeds, never the clock. Commands exit zero
//! only on complete success and remove partial outputs on failure; output
//! directories must be new or empty so cleanup can never touch user files.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use duconet::color::{
    channel_change_stats_rgb, channel_correlation, load_mask_png, load_rgb_png, save_rgb_png,
};
use duconet::metrics::{
    bt_fit, evaluate_dataset, export_weight_maps, read_pairs_csv, write_bt_json,
    write_metrics_csv, BT_MAX_ITER, BT_TOLERANCE,
};
use duconet::net::{duconet_forward, load_checkpoint, AblationMode, DucoNetConfig};
use duconet::synth::{make_dataset, read_dataset, write_dataset, PerturbSpec};
use duconet::train::{train, TrainConfig};
use duconet::{Error, Result};

/// Dual color space image harmonization pipeline.
#[derive(Parser)]
#[command(name = "duco", version, propagate_version = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset: ground truth, mask and composite PNG
    /// triplets plus a manifest, per the config's data section.
    Synth {
        /// Run config JSON (model / train / data sections).
        #[arg(long)]
        config: PathBuf,
        /// Output directory; must be new or empty.
        #[arg(long)]
        out: PathBuf,
        /// Number of samples to generate.
        #[arg(long)]
        n: usize,
    },
    /// Train on a dataset directory and write the final checkpoint, with the
    /// loss curve CSV next to it (`ckpt.dhck` -> `ckpt.loss.csv`).
    Train {
        /// Run config JSON (model / train / data sections).
        #[arg(long)]
        config: PathBuf,
        /// Dataset directory produced by `synth`.
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint file to write.
        #[arg(long)]
        out: PathBuf,
        /// Override the config's ablation mode (kebab-case, e.g. cm-pix).
        #[arg(long)]
        ablation: Option<String>,
    },
    /// Harmonize one composite image with a trained checkpoint.
    Harmonize {
        /// Checkpoint file from `train`.
        #[arg(long)]
        ckpt: PathBuf,
        /// Composite PNG sized to the model's input.
        #[arg(long)]
        comp: PathBuf,
        /// Foreground mask PNG of the same size.
        #[arg(long)]
        mask: PathBuf,
        /// Harmonized PNG to write.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on a dataset: per-image CSV rows plus `composite`
    /// (identity baseline) and `mean` aggregate rows.
    Evaluate {
        /// Checkpoint file from `train`.
        #[arg(long)]
        ckpt: PathBuf,
        /// Dataset directory produced by `synth`.
        #[arg(long)]
        data: PathBuf,
        /// Metrics CSV to write.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate every ablation mode under the one seed and budget
    /// in the config, emitting a mode,mse,fmse,psnr CSV.
    AblationTable {
        /// Run config JSON; its ablation_mode field is ignored.
        #[arg(long)]
        config: PathBuf,
        /// Training dataset directory.
        #[arg(long)]
        data: PathBuf,
        /// Evaluation dataset directory; defaults to the training one.
        #[arg(long)]
        eval_data: Option<PathBuf>,
        /// Table CSV to write.
        #[arg(long)]
        out: PathBuf,
    },
    /// Sample pixels from a corpus of images and report RGB and Lab channel
    /// correlation matrices.
    Correlation {
        /// Glob matching the corpus image files.
        #[arg(long)]
        images: String,
        /// Number of pixels to sample.
        #[arg(long, default_value_t = 1000)]
        n: usize,
        /// Sampling seed.
        #[arg(long)]
        seed: u64,
        /// Report JSON to write.
        #[arg(long)]
        out: PathBuf,
    },
    /// Mean absolute L/a/b change between composites and ground truths over
    /// the foreground, averaged across a dataset.
    ChannelStats {
        /// Dataset directory produced by `synth`.
        #[arg(long)]
        data: PathBuf,
        /// Stats JSON to write.
        #[arg(long)]
        out: PathBuf,
    },
    /// Export the pixel-fusion weight maps for one composite as grayscale
    /// PNGs (`stage{1..3}_{L,a,b}.png`), background zeroed.
    WeightMaps {
        /// Checkpoint file; must use the pixel-fusion mode.
        #[arg(long)]
        ckpt: PathBuf,
        /// Composite PNG sized to the model's input.
        #[arg(long)]
        comp: PathBuf,
        /// Foreground mask PNG of the same size.
        #[arg(long)]
        mask: PathBuf,
        /// Output directory; must be new or empty.
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit a global ranking from pairwise preference records.
    BtRank {
        /// CSV with a winner_id,loser_id header and one record per row.
        #[arg(long)]
        pairs: PathBuf,
        /// Scores JSON to write.
        #[arg(long)]
        out: PathBuf,
    },
}

/// Top-level JSON config: the model, its training schedule and the
/// synthetic-data recipe.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunConfigFile {
    model: DucoNetConfig,
    train: TrainConfig,
    data: DataSection,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DataSection {
    /// Square sample resolution for `synth`.
    size: usize,
    perturb: PerturbSpec,
}

impl RunConfigFile {
    fn load(path: &Path) -> Result<Self> {
        let cfg: RunConfigFile = serde_json::from_str(&fs::read_to_string(path)?)?;
        cfg.model.validate()?;
        cfg.train.validate()?;
        cfg.data.perturb.validate()?;
        if cfg.data.size == 0 {
            return Err(Error::InvalidConfig("data.size must be positive".into()));
        }
        Ok(cfg)
    }
}

/// Deletes the declared outputs on drop unless disarmed; a failed command
/// must not leave partial artifacts behind.
struct OutputGuard {
    files: Vec<PathBuf>,
    dirs: Vec<PathBuf>,
    armed: bool,
}

impl OutputGuard {
    fn new() -> Self {
        Self { files: Vec::new(), dirs: Vec::new(), armed: true }
    }

    fn file(&mut self, p: &Path) {
        self.files.push(p.to_path_buf());
    }

    fn dir(&mut self, p: &Path) {
        self.dirs.push(p.to_path_buf());
    }

    fn disarm(mut self) {
        self.armed = false;
    }
}

impl Drop for OutputGuard {
    fn drop(&mut self) {
        if !self.armed {
            return;
        }
        for f in &self.files {
            let _ = fs::remove_file(f);
        }
        for d in &self.dirs {
            let _ = fs::remove_dir_all(d);
        }
    }
}

/// Claims an output directory for a command that owns it wholesale. The
/// directory must be new or empty, so failure cleanup can delete it without
/// touching anything a user put there.
fn claim_out_dir(path: &Path) -> Result<()> {
    if path.exists() {
        if !path.is_dir() {
            return Err(Error::InvalidConfig(format!(
                "{} exists and is not a directory",
                path.display()
            )));
        }
        if fs::read_dir(path)?.next().is_some() {
            return Err(Error::InvalidConfig(format!(
                "output directory {} is not empty",
                path.display()
            )));
        }
    } else {
        fs::create_dir_all(path)?;
    }
    Ok(())
}

/// Runs `write` with `path` under guard: a failure removes the partial file.
fn write_guarded(path: &Path, write: impl FnOnce() -> Result<()>) -> Result<()> {
    let mut guard = OutputGuard::new();
    guard.file(path);
    write()?;
    guard.disarm();
    Ok(())
}

fn cmd_synth(config: &Path, out: &Path, n: usize) -> Result<()> {
    let cfg = RunConfigFile::load(config)?;
    claim_out_dir(out)?;
    let mut guard = OutputGuard::new();
    guard.dir(out);
    let samples = make_dataset(n, cfg.data.size, &cfg.data.perturb)?;
    write_dataset(out, &samples, &cfg.data.perturb)?;
    guard.disarm();
    println!("wrote {} samples of size {} to {}", n, cfg.data.size, out.display());
    Ok(())
}

/// `ckpt.dhck` -> `ckpt.loss.csv`, next to the checkpoint.
fn loss_csv_path(out: &Path) -> PathBuf {
    out.with_extension("loss.csv")
}

fn cmd_train(config: &Path, data: &Path, out: &Path, ablation: Option<&str>) -> Result<()> {
    let cfg = RunConfigFile::load(config)?;
    let mut model_cfg = cfg.model.clone();
    if let Some(mode) = ablation {
        model_cfg.ablation_mode = AblationMode::parse(mode)?;
    }
    let dataset = read_dataset(data)?;
    let work = tempfile::tempdir()?;
    let report = train(&model_cfg, &dataset, &cfg.train, work.path())?;

    let loss_csv = loss_csv_path(out);
    let mut guard = OutputGuard::new();
    guard.file(out);
    guard.file(&loss_csv);
    fs::copy(work.path().join("checkpoint_final.ckpt"), out)?;
    fs::copy(work.path().join("loss.csv"), &loss_csv)?;
    guard.disarm();

    let last = report.curve.last().expect("at least one epoch");
    println!(
        "trained {} for {} epochs, final mean L1 {:.6}; wrote {} and {}",
        model_cfg.ablation_mode.name(),
        cfg.train.epochs,
        last.mean_l1,
        out.display(),
        loss_csv.display()
    );
    Ok(())
}

fn cmd_harmonize(ckpt: &Path, comp: &Path, mask: &Path, out: &Path) -> Result<()> {
    let (cfg, params) = load_checkpoint(ckpt)?;
    let comp = load_rgb_png(comp)?;
    let mask = load_mask_png(mask)?;
    let pred = duconet_forward(&comp, &mask, &params, &cfg)?;
    write_guarded(out, || save_rgb_png(out, &pred))?;
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_evaluate(ckpt: &Path, data: &Path, out: &Path) -> Result<()> {
    let (cfg, params) = load_checkpoint(ckpt)?;
    let eval = evaluate_dataset(&cfg, &params, data)?;
    write_guarded(out, || write_metrics_csv(out, &eval))?;
    println!(
        "{} images; composite mse {:.4} / model mse {:.4}, fmse {:.4}, psnr {:.4}",
        eval.per_image.len(),
        eval.composite.mse,
        eval.mean.mse,
        eval.mean.fmse,
        eval.mean.psnr
    );
    Ok(())
}

fn cmd_ablation_table(
    config: &Path,
    data: &Path,
    eval_data: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let cfg = RunConfigFile::load(config)?;
    let dataset = read_dataset(data)?;
    let eval_dir = eval_data.unwrap_or(data);
    let mut csv = String::from("mode,mse,fmse,psnr\n");
    for mode in AblationMode::ALL {
        let mut model_cfg = cfg.model.clone();
        model_cfg.ablation_mode = mode;
        let work = tempfile::tempdir()?;
        let report = train(&model_cfg, &dataset, &cfg.train, work.path())?;
        let eval = evaluate_dataset(&model_cfg, &report.params, eval_dir)?;
        let m = eval.mean;
        let _ = writeln!(csv, "{},{},{},{}", mode.name(), m.mse, m.fmse, m.psnr);
        eprintln!("{}: mse {:.4} fmse {:.4} psnr {:.4}", mode.name(), m.mse, m.fmse, m.psnr);
    }
    write_guarded(out, || Ok(fs::write(out, &csv)?))?;
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_correlation(pattern: &str, n: usize, seed: u64, out: &Path) -> Result<()> {
    let glob_err = |e: String| Error::InvalidConfig(format!("glob {:?}: {}", pattern, e));
    let mut paths: Vec<PathBuf> = glob::glob(pattern)
        .map_err(|e| glob_err(e.to_string()))?
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| glob_err(e.to_string()))?;
    paths.sort();
    if paths.is_empty() {
        return Err(Error::InvalidConfig(format!("glob {:?} matched no files", pattern)));
    }
    let images = paths.iter().map(load_rgb_png).collect::<Result<Vec<_>>>()?;
    let report = channel_correlation(&images, n, seed)?;
    write_guarded(out, || {
        Ok(fs::write(out, format!("{}\n", serde_json::to_string_pretty(&report)?))?)
    })?;
    println!("sampled {} pixels from {} images into {}", n, images.len(), out.display());
    Ok(())
}

/// Dataset-level foreground color shift, one number per Lab channel.
#[derive(Serialize)]
struct ChannelStatsReport {
    n_samples: usize,
    mean_abs_delta_l: f64,
    mean_abs_delta_a: f64,
    mean_abs_delta_b: f64,
}

fn cmd_channel_stats(data: &Path, out: &Path) -> Result<()> {
    let samples = read_dataset(data)?;
    if samples.is_empty() {
        return Err(Error::InvalidConfig(format!("dataset {} is empty", data.display())));
    }
    let mut sums = [0.0f64; 3];
    for s in &samples {
        let d = channel_change_stats_rgb(&s.composite, &s.gt, &s.mask)?;
        for (acc, v) in sums.iter_mut().zip(d) {
            *acc += v;
        }
    }
    let n = samples.len() as f64;
    let report = ChannelStatsReport {
        n_samples: samples.len(),
        mean_abs_delta_l: sums[0] / n,
        mean_abs_delta_a: sums[1] / n,
        mean_abs_delta_b: sums[2] / n,
    };
    write_guarded(out, || {
        Ok(fs::write(out, format!("{}\n", serde_json::to_string_pretty(&report)?))?)
    })?;
    println!(
        "mean |dL| {:.2}, |da| {:.2}, |db| {:.2} over {} samples",
        report.mean_abs_delta_l, report.mean_abs_delta_a, report.mean_abs_delta_b, samples.len()
    );
    Ok(())
}

fn cmd_weight_maps(ckpt: &Path, comp: &Path, mask: &Path, out: &Path) -> Result<()> {
    let (cfg, params) = load_checkpoint(ckpt)?;
    let comp = load_rgb_png(comp)?;
    let mask = load_mask_png(mask)?;
    claim_out_dir(out)?;
    let mut guard = OutputGuard::new();
    guard.dir(out);
    let paths = export_weight_maps(&cfg, &params, &comp, &mask, out)?;
    guard.disarm();
    println!("wrote {} weight maps to {}", paths.len(), out.display());
    Ok(())
}

fn cmd_bt_rank(pairs: &Path, out: &Path) -> Result<()> {
    let records = read_pairs_csv(pairs)?;
    let result = bt_fit(&records, BT_TOLERANCE, BT_MAX_ITER)?;
    if !result.converged {
        eprintln!(
            "warning: ranking did not converge in {} iterations (an undefeated or \
             winless item makes strengths drift); scores written anyway",
            result.iterations
        );
    }
    write_guarded(out, || write_bt_json(out, &result))?;
    println!(
        "ranked {} items from {} comparisons ({} iterations); wrote {}",
        result.scores.len(),
        records.len(),
        result.iterations,
        out.display()
    );
    Ok(())
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Synth { config, out, n } => cmd_synth(&config, &out, n),
        Command::Train { config, data, out, ablation } => {
            cmd_train(&config, &data, &out, ablation.as_deref())
        }
        Command::Harmonize { ckpt, comp, mask, out } => cmd_harmonize(&ckpt, &comp, &mask, &out),
        Command::Evaluate { ckpt, data, out } => cmd_evaluate(&ckpt, &data, &out),
        Command::AblationTable { config, data, eval_data, out } => {
            cmd_ablation_table(&config, &data, eval_data.as_deref(), &out)
        }
        Command::Correlation { images, n, seed, out } => cmd_correlation(&images, n, seed, &out),
        Command::ChannelStats { data, out } => cmd_channel_stats(&data, &out),
        Command::WeightMaps { ckpt, comp, mask, out } => cmd_weight_maps(&ckpt, &comp, &mask, &out),
        Command::BtRank { pairs, out } => cmd_bt_rank(&pairs, &out),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e);
            ExitCode::FAILURE
        }
    }
}
