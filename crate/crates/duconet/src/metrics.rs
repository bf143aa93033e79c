//! Evaluation metrics and preference ranking.
//!
//! Predictions are scored with MSE, foreground MSE and PSNR at 255 pixel
//! scale. Dataset evaluation emits a per-image CSV plus two aggregate rows —
//! the `composite` identity baseline and the model `mean` — both computed as
//! per-image averages, never from pooled errors. Pixel-fusion weight maps
//! export as grayscale PNGs with the background zeroed, and pairwise
//! "which looks more harmonious" records turn into a global ranking through
//! a Bradley-Terry model fit by minorization-maximization.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::color::{save_gray_png, Mask, RgbImage};
use crate::net::{
    downsample_mask, duconet_forward, duconet_forward_with_maps, DucoNetConfig, ModelParams,
};
use crate::synth::{read_dataset, read_manifest};
use crate::{Error, Result};

/// PSNR ceiling reported once the error effectively vanishes.
pub const PSNR_CAP_DB: f64 = 100.0;
/// MSE below this hits the cap: 255^2 * 1e-10, where the uncapped formula
/// would cross 100 dB.
const PSNR_CAP_MSE: f64 = 65025e-10;
/// Default Bradley-Terry convergence tolerance (max log-score change per
/// sweep).
pub const BT_TOLERANCE: f64 = 1e-10;
/// Default Bradley-Terry sweep budget.
pub const BT_MAX_ITER: usize = 10_000;
/// Per-record floor on win counts; keeps the log-strength of an item that
/// never won finite. Scaling by the record count preserves the invariance of
/// the fit under duplicating the whole record set.
const BT_WIN_FLOOR_PER_RECORD: f64 = 1e-8;

// ---------------------------------------------------------------------------
// image metrics

/// Quality scores for one prediction, at 255 pixel scale.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    /// Mean squared error over all pixels and channels.
    pub mse: f64,
    /// Mean squared error over foreground pixels (mask > 0.5) only.
    pub fmse: f64,
    /// `10 * log10(255^2 / mse)`, capped at [`PSNR_CAP_DB`].
    pub psnr: f64,
    /// Fraction of pixels with mask > 0.5.
    pub foreground_fraction: f64,
}

/// `10 * log10(255^2 / mse)` with the underflow cap.
pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse < PSNR_CAP_MSE {
        PSNR_CAP_DB
    } else {
        10.0 * (255.0 * 255.0 / mse).log10()
    }
}

/// Scores `pred` against `gt`. The mask only selects the fMSE region; both
/// MSE and PSNR cover the full frame.
pub fn image_metrics(pred: &RgbImage, gt: &RgbImage, mask: &Mask) -> Result<ImageMetrics> {
    let (h, w) = (gt.height(), gt.width());
    if pred.height() != h || pred.width() != w || mask.height() != h || mask.width() != w {
        return Err(Error::ShapeMismatch {
            op: "image_metrics",
            detail: format!(
                "pred {}x{}, gt {}x{}, mask {}x{}",
                pred.height(),
                pred.width(),
                h,
                w,
                mask.height(),
                mask.width()
            ),
        });
    }
    let mut total = 0.0;
    let mut fg_total = 0.0;
    let mut fg_pixels = 0usize;
    for y in 0..h {
        for x in 0..w {
            let p = pred.get(y, x);
            let g = gt.get(y, x);
            let se: f64 = (0..3)
                .map(|c| {
                    let e = (p[c] - g[c]) * 255.0;
                    e * e
                })
                .sum();
            total += se;
            if mask.get(y, x) > 0.5 {
                fg_total += se;
                fg_pixels += 1;
            }
        }
    }
    if fg_pixels == 0 {
        return Err(Error::EmptyForeground);
    }
    let n = (h * w) as f64;
    let mse = total / (3.0 * n);
    Ok(ImageMetrics {
        mse,
        fmse: fg_total / (3.0 * fg_pixels as f64),
        psnr: psnr_from_mse(mse),
        foreground_fraction: fg_pixels as f64 / n,
    })
}

/// Field-wise arithmetic mean of per-image metrics. This is the aggregation
/// used for report rows: averaging per-image PSNR is not the PSNR of the
/// averaged MSE.
pub fn mean_metrics(items: &[ImageMetrics]) -> Result<ImageMetrics> {
    if items.is_empty() {
        return Err(Error::OutOfRange {
            what: "metrics aggregation",
            detail: "no per-image rows to average".into(),
        });
    }
    let n = items.len() as f64;
    Ok(ImageMetrics {
        mse: items.iter().map(|m| m.mse).sum::<f64>() / n,
        fmse: items.iter().map(|m| m.fmse).sum::<f64>() / n,
        psnr: items.iter().map(|m| m.psnr).sum::<f64>() / n,
        foreground_fraction: items.iter().map(|m| m.foreground_fraction).sum::<f64>() / n,
    })
}

// ---------------------------------------------------------------------------
// dataset evaluation

/// One CSV row: a sample id and its scores.
#[derive(Clone, Debug)]
pub struct MetricsRow {
    pub id: String,
    pub metrics: ImageMetrics,
}

/// Evaluation of a dataset directory: per-image rows for the model, plus the
/// `composite` identity baseline and the model `mean`, both per-image
/// averages.
#[derive(Clone, Debug)]
pub struct DatasetEvaluation {
    pub per_image: Vec<MetricsRow>,
    pub composite: ImageMetrics,
    pub mean: ImageMetrics,
}

/// Runs the model over every sample in `dir` and scores predictions and raw
/// composites against the ground truths.
pub fn evaluate_dataset(
    cfg: &DucoNetConfig,
    params: &ModelParams,
    dir: impl AsRef<Path>,
) -> Result<DatasetEvaluation> {
    let dir = dir.as_ref();
    let manifest = read_manifest(dir)?;
    let samples = read_dataset(dir)?;
    let mut per_image = Vec::with_capacity(samples.len());
    let mut baseline = Vec::with_capacity(samples.len());
    for (meta, s) in manifest.per_sample.iter().zip(&samples) {
        let pred = duconet_forward(&s.composite, &s.mask, params, cfg)?;
        per_image.push(MetricsRow {
            id: meta.id.clone(),
            metrics: image_metrics(&pred, &s.gt, &s.mask)?,
        });
        baseline.push(image_metrics(&s.composite, &s.gt, &s.mask)?);
    }
    let model: Vec<ImageMetrics> = per_image.iter().map(|r| r.metrics).collect();
    Ok(DatasetEvaluation {
        per_image,
        composite: mean_metrics(&baseline)?,
        mean: mean_metrics(&model)?,
    })
}

/// Renders the metrics CSV: header `id,mse,fmse,psnr,fg_fraction`, one row
/// per image, then the `composite` and `mean` aggregate rows.
pub fn metrics_csv(eval: &DatasetEvaluation) -> String {
    let mut out = String::from("id,mse,fmse,psnr,fg_fraction\n");
    for row in &eval.per_image {
        push_row(&mut out, &row.id, &row.metrics);
    }
    push_row(&mut out, "composite", &eval.composite);
    push_row(&mut out, "mean", &eval.mean);
    out
}

fn push_row(out: &mut String, id: &str, m: &ImageMetrics) {
    let _ = writeln!(out, "{},{},{},{},{}", id, m.mse, m.fmse, m.psnr, m.foreground_fraction);
}

pub fn write_metrics_csv(path: impl AsRef<Path>, eval: &DatasetEvaluation) -> Result<()> {
    fs::write(path, metrics_csv(eval))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// weight-map export

/// Runs the model on one composite and writes each pixel-fusion weight map
/// as a grayscale PNG named `stage{1..3}_{L,a,b}.png`, values mapped
/// [0,1] -> 0..255 and background pixels zeroed with the stage-resolution
/// mask. Returns the written paths; modes without a fusion head are
/// rejected.
pub fn export_weight_maps(
    cfg: &DucoNetConfig,
    params: &ModelParams,
    composite: &RgbImage,
    mask: &Mask,
    out_dir: impl AsRef<Path>,
) -> Result<Vec<PathBuf>> {
    let (_, maps) = duconet_forward_with_maps(composite, mask, params, cfg)?;
    if maps.is_empty() {
        return Err(Error::InvalidConfig(format!(
            "ablation mode {} produces no pixel-fusion weight maps",
            cfg.ablation_mode.name()
        )));
    }
    let out_dir = out_dir.as_ref();
    fs::create_dir_all(out_dir)?;
    let mut paths = Vec::with_capacity(maps.len() * 3);
    for (t, triple) in maps.iter().enumerate() {
        let sz = triple[0].shape()[2];
        let stage_mask = downsample_mask(mask, sz, sz)?;
        for (name, map) in ["L", "a", "b"].iter().zip(triple) {
            let vals: Vec<f64> =
                map.data().iter().zip(stage_mask.data()).map(|(&a, &m)| a * m).collect();
            let path = out_dir.join(format!("stage{}_{}.png", t + 1, name));
            save_gray_png(&path, &vals, sz, sz)?;
            paths.push(path);
        }
    }
    Ok(paths)
}

// ---------------------------------------------------------------------------
// Bradley-Terry ranking

/// One pairwise preference: `winner` was judged better than `loser`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ComparisonRecord {
    pub winner: String,
    pub loser: String,
}

/// A global ranking: zero-sum log-strengths, one per item.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BtResult {
    pub scores: BTreeMap<String, f64>,
    pub converged: bool,
    pub iterations: usize,
}

/// Fits Bradley-Terry log-strengths by minorization-maximization. Each sweep
/// recomputes every strength from the previous sweep's values, so the result
/// is independent of record order; convergence is declared when the largest
/// log-strength change in a sweep drops below `tolerance`.
pub fn bt_fit(records: &[ComparisonRecord], tolerance: f64, max_iter: usize) -> Result<BtResult> {
    if records.is_empty() {
        return Err(Error::NoComparisons);
    }
    if !(tolerance > 0.0) || !tolerance.is_finite() {
        return Err(Error::InvalidConfig(format!("tolerance {} must be positive", tolerance)));
    }
    if max_iter == 0 {
        return Err(Error::InvalidConfig("max_iter must be positive".into()));
    }
    let mut items = BTreeSet::new();
    for r in records {
        if r.winner == r.loser {
            return Err(Error::InvalidConfig(format!(
                "item {:?} compared against itself",
                r.winner
            )));
        }
        items.insert(r.winner.clone());
        items.insert(r.loser.clone());
    }
    let ids: Vec<String> = items.into_iter().collect();
    let index: BTreeMap<&str, usize> =
        ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let k = ids.len();
    let mut wins = vec![0.0f64; k];
    let mut losses = vec![0.0f64; k];
    let mut pair = vec![0.0f64; k * k];
    for r in records {
        let w = index[r.winner.as_str()];
        let l = index[r.loser.as_str()];
        wins[w] += 1.0;
        losses[l] += 1.0;
        pair[w * k + l] += 1.0;
        pair[l * k + w] += 1.0;
    }
    for i in 0..k {
        if wins[i] == 0.0 && losses[i] == 0.0 {
            return Err(Error::UnconstrainedItem(ids[i].clone()));
        }
    }
    let components = connected_components(k, &pair);
    if components.len() > 1 {
        return Err(Error::DisconnectedComparisons {
            components: components
                .iter()
                .map(|c| c.iter().map(|&i| ids[i].clone()).collect())
                .collect(),
        });
    }

    let floor = BT_WIN_FLOOR_PER_RECORD * records.len() as f64;
    let mut pi = vec![1.0f64; k];
    let mut iterations = 0;
    let mut converged = false;
    while iterations < max_iter {
        iterations += 1;
        let mut next = vec![0.0f64; k];
        for i in 0..k {
            let mut denom = 0.0;
            for j in 0..k {
                let nij = pair[i * k + j];
                if nij > 0.0 {
                    denom += nij / (pi[i] + pi[j]);
                }
            }
            next[i] = wins[i].max(floor) / denom;
        }
        // re-center log strengths each sweep; the update is scale-equivariant
        // so this only fixes the gauge
        let mean_log = next.iter().map(|p| p.ln()).sum::<f64>() / k as f64;
        let scale = (-mean_log).exp();
        for p in next.iter_mut() {
            *p *= scale;
        }
        let delta =
            pi.iter().zip(&next).map(|(&a, &b)| (b.ln() - a.ln()).abs()).fold(0.0, f64::max);
        pi = next;
        if delta < tolerance {
            converged = true;
            break;
        }
    }

    let logs: Vec<f64> = pi.iter().map(|p| p.ln()).collect();
    let mean = logs.iter().sum::<f64>() / k as f64;
    let scores = ids.iter().zip(&logs).map(|(id, &s)| (id.clone(), s - mean)).collect();
    Ok(BtResult { scores, converged, iterations })
}

/// Log-likelihood of `records` under log-strength `scores`; each
/// minorization-maximization sweep of [`bt_fit`] can only increase it.
pub fn bt_log_likelihood(
    records: &[ComparisonRecord],
    scores: &BTreeMap<String, f64>,
) -> Result<f64> {
    let mut ll = 0.0;
    for r in records {
        let (sw, sl) = match (scores.get(&r.winner), scores.get(&r.loser)) {
            (Some(&a), Some(&b)) => (a, b),
            _ => {
                return Err(Error::InvalidConfig(format!(
                    "record {:?} vs {:?} references an unscored item",
                    r.winner, r.loser
                )))
            }
        };
        // ln p(winner) = -ln(1 + exp(loser - winner))
        ll -= (sl - sw).exp().ln_1p();
    }
    Ok(ll)
}

fn connected_components(k: usize, pair: &[f64]) -> Vec<Vec<usize>> {
    let mut seen = vec![false; k];
    let mut components = Vec::new();
    for start in 0..k {
        if seen[start] {
            continue;
        }
        seen[start] = true;
        let mut queue = vec![start];
        let mut comp = Vec::new();
        while let Some(i) = queue.pop() {
            comp.push(i);
            for j in 0..k {
                if !seen[j] && pair[i * k + j] > 0.0 {
                    seen[j] = true;
                    queue.push(j);
                }
            }
        }
        comp.sort_unstable();
        components.push(comp);
    }
    components
}

// ---------------------------------------------------------------------------
// pairwise CSV / ranking JSON

/// Parses the pairwise CSV: a `winner_id,loser_id` header, then one record
/// per line.
pub fn parse_pairs_csv(text: &str) -> Result<Vec<ComparisonRecord>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == "winner_id,loser_id" => {}
        other => {
            return Err(Error::BadFormat(format!(
                "pairs CSV must start with 'winner_id,loser_id', got {:?}",
                other.unwrap_or("")
            )))
        }
    }
    let mut records = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        match (fields.next(), fields.next(), fields.next()) {
            (Some(w), Some(l), None) if !w.trim().is_empty() && !l.trim().is_empty() => records
                .push(ComparisonRecord {
                    winner: w.trim().to_string(),
                    loser: l.trim().to_string(),
                }),
            _ => {
                return Err(Error::BadFormat(format!(
                    "pairs CSV line {}: expected 'winner,loser', got {:?}",
                    i + 2,
                    line
                )))
            }
        }
    }
    Ok(records)
}

pub fn read_pairs_csv(path: impl AsRef<Path>) -> Result<Vec<ComparisonRecord>> {
    parse_pairs_csv(&fs::read_to_string(path)?)
}

/// Writes the ranking as JSON: `{scores: {id: value}, converged, iterations}`.
pub fn write_bt_json(path: impl AsRef<Path>, result: &BtResult) -> Result<()> {
    fs::write(path, format!("{}\n", serde_json::to_string_pretty(result)?))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::color::load_mask_png;
    use crate::net::{init_params, AblationMode};
    use crate::synth::{make_dataset, write_dataset, PerturbSpec};
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn gradient_image(size: usize) -> RgbImage {
        RgbImage::from_fn(size, size, |y, x| {
            let u = y as f64 / (size - 1) as f64;
            let v = x as f64 / (size - 1) as f64;
            [0.1 + 0.8 * u, 0.2 + 0.6 * v, 0.3 + 0.4 * u * v]
        })
        .unwrap()
    }

    fn rect_mask(size: usize, h: usize, w: usize) -> Mask {
        Mask::new(
            size,
            size,
            (0..size * size)
                .map(|i| if i / size < h && i % size < w { 1.0 } else { 0.0 })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn identical_images_hit_the_psnr_cap() {
        let img = gradient_image(16);
        let mask = rect_mask(16, 8, 16);
        let m = image_metrics(&img, &img, &mask).unwrap();
        assert_eq!(m.mse, 0.0);
        assert_eq!(m.fmse, 0.0);
        assert_eq!(m.psnr, PSNR_CAP_DB);
        assert_eq!(m.foreground_fraction, 0.5);
    }

    #[test]
    fn uniform_error_matches_the_closed_form() {
        let size = 8;
        let gt = RgbImage::from_fn(size, size, |_, _| [0.25; 3]).unwrap();
        let pred = RgbImage::from_fn(size, size, |_, _| [0.25 + 16.0 / 255.0; 3]).unwrap();
        let mask = rect_mask(size, size, size);
        let m = image_metrics(&pred, &gt, &mask).unwrap();
        assert!((m.mse - 256.0).abs() <= 1e-9, "mse {}", m.mse);
        let expected_psnr = 10.0 * (65025.0f64 / 256.0).log10();
        assert!((m.psnr - expected_psnr).abs() <= 1e-6);
        assert!((m.psnr - 24.05).abs() < 5e-3);
        // all-foreground mask: same pixels, same mean
        assert!((m.fmse - m.mse).abs() <= 1e-12);
        assert_eq!(m.foreground_fraction, 1.0);
    }

    #[test]
    fn foreground_confined_error_scales_inversely_with_area() {
        let size = 32;
        let gt = gradient_image(size);
        let mask = rect_mask(size, 16, 16); // exactly a quarter of the frame
        let mut pred = gt.clone();
        for y in 0..16 {
            for x in 0..16 {
                let mut px = pred.get(y, x);
                px[0] = (px[0] + 0.002 * ((y * x) % 7 + 1) as f64).min(1.0);
                px[2] = (px[2] - 0.001 * ((y + x) % 5) as f64).max(0.0);
                pred.set(y, x, px);
            }
        }
        let m = image_metrics(&pred, &gt, &mask).unwrap();
        let rho = m.foreground_fraction;
        assert_eq!(rho, 0.25);
        assert!(m.fmse > 0.0);
        assert!((m.fmse - m.mse / rho).abs() <= 1e-9, "fmse {} mse/rho {}", m.fmse, m.mse / rho);
    }

    #[test]
    fn quantization_shifts_mse_within_the_rounding_bound() {
        let size = 64;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let gt = RgbImage::from_fn(size, size, |_, _| {
            [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)]
        })
        .unwrap();
        let pred = RgbImage::from_fn(size, size, |y, x| {
            let g = gt.get(y, x);
            [
                (g[0] + rng.gen_range(-10.0 / 255.0..10.0 / 255.0)).clamp(0.0, 1.0),
                (g[1] + rng.gen_range(-10.0 / 255.0..10.0 / 255.0)).clamp(0.0, 1.0),
                (g[2] + rng.gen_range(-10.0 / 255.0..10.0 / 255.0)).clamp(0.0, 1.0),
            ]
        })
        .unwrap();
        let quantize = |img: &RgbImage| {
            RgbImage::from_fn(size, size, |y, x| {
                let p = img.get(y, x);
                [
                    (p[0] * 255.0).round() / 255.0,
                    (p[1] * 255.0).round() / 255.0,
                    (p[2] * 255.0).round() / 255.0,
                ]
            })
            .unwrap()
        };
        let mask = rect_mask(size, size, size);
        let real = image_metrics(&pred, &gt, &mask).unwrap();
        let quant = image_metrics(&quantize(&pred), &quantize(&gt), &mask).unwrap();
        assert!(
            (real.mse - quant.mse).abs() <= 3.0 * 0.25,
            "real {} quantized {}",
            real.mse,
            quant.mse
        );
    }

    #[test]
    fn degenerate_metric_inputs_are_rejected() {
        let img = gradient_image(8);
        assert!(matches!(
            image_metrics(&img, &img, &Mask::zeros(8, 8)),
            Err(Error::EmptyForeground)
        ));
        let small = gradient_image(4);
        assert!(image_metrics(&small, &img, &rect_mask(8, 4, 4)).is_err());
    }

    #[test]
    fn aggregates_average_per_image_not_pooled() {
        let a = ImageMetrics {
            mse: 1.0,
            fmse: 4.0,
            psnr: psnr_from_mse(1.0),
            foreground_fraction: 0.25,
        };
        let b = ImageMetrics {
            mse: 100.0,
            fmse: 200.0,
            psnr: psnr_from_mse(100.0),
            foreground_fraction: 0.5,
        };
        let m = mean_metrics(&[a, b]).unwrap();
        assert_eq!(m.mse, 50.5);
        assert_eq!(m.fmse, 102.0);
        assert_eq!(m.foreground_fraction, 0.375);
        assert!((m.psnr - (a.psnr + b.psnr) / 2.0).abs() <= 1e-12);
        // pooling would have given a different number
        assert!((m.psnr - psnr_from_mse(m.mse)).abs() > 1.0);
        assert!(mean_metrics(&[]).is_err());
    }

    #[test]
    fn dataset_evaluation_appends_baseline_and_mean_rows() {
        let dir = tempfile::tempdir().unwrap();
        let spec = PerturbSpec { seed: 5, ..PerturbSpec::default() };
        let samples = make_dataset(3, 8, &spec).unwrap();
        write_dataset(dir.path(), &samples, &spec).unwrap();

        let cfg = DucoNetConfig::tiny(AblationMode::BackboneOnly, 7);
        let params = init_params(&cfg).unwrap();
        let eval = evaluate_dataset(&cfg, &params, dir.path()).unwrap();
        assert_eq!(eval.per_image.len(), 3);
        assert_eq!(eval.per_image[0].id, "0000");
        assert_eq!(eval.per_image[2].id, "0002");

        let rows: Vec<ImageMetrics> = eval.per_image.iter().map(|r| r.metrics).collect();
        let mean = mean_metrics(&rows).unwrap();
        assert_eq!(eval.mean, mean);

        let stored = read_dataset(dir.path()).unwrap();
        let baseline: Vec<ImageMetrics> = stored
            .iter()
            .map(|s| image_metrics(&s.composite, &s.gt, &s.mask).unwrap())
            .collect();
        assert_eq!(eval.composite, mean_metrics(&baseline).unwrap());

        let csv = metrics_csv(&eval);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 6);
        assert_eq!(lines[0], "id,mse,fmse,psnr,fg_fraction");
        assert!(lines[4].starts_with("composite,"));
        assert!(lines[5].starts_with("mean,"));

        let again = evaluate_dataset(&cfg, &params, dir.path()).unwrap();
        assert_eq!(metrics_csv(&again), csv);
    }

    #[test]
    fn weight_maps_export_only_under_pixel_fusion() {
        let cfg = DucoNetConfig::tiny(AblationMode::CmPix, 9);
        let params = init_params(&cfg).unwrap();
        let comp = gradient_image(8);
        let mask = rect_mask(8, 4, 4); // block-aligned quadrant
        let dir = tempfile::tempdir().unwrap();
        let paths = export_weight_maps(&cfg, &params, &comp, &mask, dir.path()).unwrap();
        let names: Vec<String> =
            paths.iter().map(|p| p.file_name().unwrap().to_string_lossy().into_owned()).collect();
        assert_eq!(
            names,
            vec![
                "stage1_L.png",
                "stage1_a.png",
                "stage1_b.png",
                "stage2_L.png",
                "stage2_a.png",
                "stage2_b.png",
                "stage3_L.png",
                "stage3_a.png",
                "stage3_b.png"
            ]
        );

        // full-resolution maps: background exactly zero, foreground on the
        // softmax simplex up to PNG rounding
        let l = load_mask_png(dir.path().join("stage3_L.png")).unwrap();
        let a = load_mask_png(dir.path().join("stage3_a.png")).unwrap();
        let b = load_mask_png(dir.path().join("stage3_b.png")).unwrap();
        for y in 0..8 {
            for x in 0..8 {
                let sum = l.get(y, x) + a.get(y, x) + b.get(y, x);
                if mask.get(y, x) > 0.5 {
                    assert!((sum - 1.0).abs() <= 1.5 / 255.0 + 1e-12, "sum {}", sum);
                } else {
                    assert_eq!(sum, 0.0);
                }
            }
        }

        let avg = DucoNetConfig::tiny(AblationMode::CmAvg, 9);
        let avg_params = init_params(&avg).unwrap();
        assert!(matches!(
            export_weight_maps(&avg, &avg_params, &comp, &mask, dir.path()),
            Err(Error::InvalidConfig(_))
        ));
    }

    fn lopsided_records() -> Vec<ComparisonRecord> {
        let mut records = Vec::new();
        for _ in 0..75 {
            records.push(ComparisonRecord { winner: "A".into(), loser: "B".into() });
        }
        for _ in 0..25 {
            records.push(ComparisonRecord { winner: "B".into(), loser: "A".into() });
        }
        records
    }

    #[test]
    fn even_split_is_symmetric() {
        let mut records = Vec::new();
        for _ in 0..10 {
            records.push(ComparisonRecord { winner: "x".into(), loser: "y".into() });
            records.push(ComparisonRecord { winner: "y".into(), loser: "x".into() });
        }
        let fit = bt_fit(&records, BT_TOLERANCE, BT_MAX_ITER).unwrap();
        assert!(fit.converged);
        assert!(fit.scores["x"].abs() <= 1e-12);
        assert!(fit.scores["y"].abs() <= 1e-12);
    }

    #[test]
    fn lopsided_split_recovers_the_log_odds() {
        let fit = bt_fit(&lopsided_records(), BT_TOLERANCE, BT_MAX_ITER).unwrap();
        assert!(fit.converged);
        assert!(fit.iterations <= BT_MAX_ITER);
        let gap = fit.scores["A"] - fit.scores["B"];
        assert!((gap - 3.0f64.ln()).abs() <= 1e-6, "gap {}", gap);
        let sum: f64 = fit.scores.values().sum();
        assert!(sum.abs() <= 1e-9);
    }

    fn sampled_records(truth: &[(&str, f64)], per_pair: usize, seed: u64) -> Vec<ComparisonRecord> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut records = Vec::new();
        for i in 0..truth.len() {
            for j in (i + 1)..truth.len() {
                let p = 1.0 / (1.0 + (truth[j].1 - truth[i].1).exp());
                for _ in 0..per_pair {
                    let (w, l) = if rng.gen_range(0.0..1.0) < p { (i, j) } else { (j, i) };
                    records.push(ComparisonRecord {
                        winner: truth[w].0.into(),
                        loser: truth[l].0.into(),
                    });
                }
            }
        }
        records
    }

    #[test]
    fn sampled_strengths_are_recovered() {
        let truth = [("a", 0.8), ("b", 0.0), ("c", -0.8)];
        let records = sampled_records(&truth, 1000, 42);
        let fit = bt_fit(&records, BT_TOLERANCE, BT_MAX_ITER).unwrap();
        assert!(fit.converged);
        for i in 0..truth.len() {
            for j in (i + 1)..truth.len() {
                let est = fit.scores[truth[i].0] - fit.scores[truth[j].0];
                let want = truth[i].1 - truth[j].1;
                assert!((est - want).abs() <= 0.15, "{}-{}: est {} want {}", i, j, est, want);
            }
        }
    }

    #[test]
    fn fit_ignores_record_order_and_duplication() {
        let records = lopsided_records();
        let base = bt_fit(&records, BT_TOLERANCE, BT_MAX_ITER).unwrap();

        let mut shuffled = records.clone();
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(3));
        let permuted = bt_fit(&shuffled, BT_TOLERANCE, BT_MAX_ITER).unwrap();
        for (id, s) in &base.scores {
            assert!((permuted.scores[id] - s).abs() <= 1e-10);
        }

        let mut doubled = records.clone();
        doubled.extend(records);
        let twice = bt_fit(&doubled, BT_TOLERANCE, BT_MAX_ITER).unwrap();
        for (id, s) in &base.scores {
            assert!((twice.scores[id] - s).abs() <= 1e-10);
        }
    }

    #[test]
    fn log_likelihood_never_decreases_over_sweeps() {
        let truth = [("a", 0.9), ("b", 0.2), ("c", -1.1)];
        let records = sampled_records(&truth, 60, 17);
        let mut prev = f64::NEG_INFINITY;
        for sweeps in 1..=25 {
            let fit = bt_fit(&records, BT_TOLERANCE, sweeps).unwrap();
            let ll = bt_log_likelihood(&records, &fit.scores).unwrap();
            assert!(ll >= prev - 1e-9, "sweeps {}: {} < {}", sweeps, ll, prev);
            prev = ll;
        }
    }

    #[test]
    fn one_sided_sweeps_stay_finite() {
        let records: Vec<ComparisonRecord> = (0..5)
            .map(|_| ComparisonRecord { winner: "best".into(), loser: "rest".into() })
            .collect();
        let fit = bt_fit(&records, BT_TOLERANCE, BT_MAX_ITER).unwrap();
        assert!(fit.converged);
        let gap = fit.scores["best"] - fit.scores["rest"];
        assert!(gap.is_finite() && gap > 10.0, "gap {}", gap);
    }

    #[test]
    fn disconnected_graphs_are_named() {
        let records = vec![
            ComparisonRecord { winner: "a".into(), loser: "b".into() },
            ComparisonRecord { winner: "a".into(), loser: "b".into() },
            ComparisonRecord { winner: "c".into(), loser: "d".into() },
        ];
        match bt_fit(&records, BT_TOLERANCE, BT_MAX_ITER) {
            Err(Error::DisconnectedComparisons { components }) => {
                assert_eq!(components, vec![vec!["a", "b"], vec!["c", "d"]]);
            }
            other => panic!("expected disconnected error, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn degenerate_ranking_inputs_are_rejected() {
        assert!(matches!(bt_fit(&[], 1e-10, 10), Err(Error::NoComparisons)));
        let selfie = vec![ComparisonRecord { winner: "a".into(), loser: "a".into() }];
        assert!(bt_fit(&selfie, 1e-10, 10).is_err());
        let ok = lopsided_records();
        assert!(bt_fit(&ok, 0.0, 10).is_err());
        assert!(bt_fit(&ok, 1e-10, 0).is_err());
    }

    #[test]
    fn pairs_csv_and_ranking_json_round_trip() {
        let text = "winner_id,loser_id\na,b\nb,c\n\na,c\n";
        let records = parse_pairs_csv(text).unwrap();
        assert_eq!(records.len(), 3);
        assert_eq!(records[0], ComparisonRecord { winner: "a".into(), loser: "b".into() });
        assert!(parse_pairs_csv("winner,loser\na,b\n").is_err());
        assert!(parse_pairs_csv("winner_id,loser_id\na,b,c\n").is_err());
        assert!(parse_pairs_csv("winner_id,loser_id\na\n").is_err());

        let dir = tempfile::tempdir().unwrap();
        let csv_path = dir.path().join("pairs.csv");
        fs::write(&csv_path, text).unwrap();
        assert_eq!(read_pairs_csv(&csv_path).unwrap(), records);

        let fit = bt_fit(&lopsided_records(), BT_TOLERANCE, BT_MAX_ITER).unwrap();
        let json_path = dir.path().join("scores.json");
        write_bt_json(&json_path, &fit).unwrap();
        let raw = fs::read_to_string(&json_path).unwrap();
        assert!(raw.contains("\"scores\""));
        let back: BtResult = serde_json::from_str(&raw).unwrap();
        assert_eq!(back, fit);
    }
}
