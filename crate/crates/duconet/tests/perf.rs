//! Manual performance probes, ignored by default. Run with
//! `cargo test -p duconet --test perf -- --ignored --nocapture` to check that
//! desk-scale training fits its wall-clock budgets on the current machine.

use std::time::Instant;

use duconet::color::{Mask, RgbImage};
use duconet::metrics::{image_metrics, mean_metrics, ImageMetrics};
use duconet::net::{duconet_forward, init_params, loss_and_gradients, AblationMode, DucoNetConfig};
use duconet::synth::{make_dataset, PerturbSpec, SyntheticSample};
use duconet::train::{adam_step, lr_at, AdamState, TrainConfig};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
#[ignore]
fn desk_batch_step_cost() {
    let cfg = DucoNetConfig::desk(AblationMode::CmPix, 1);
    let params = init_params(&cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let size = cfg.input_size;
    let imgs: Vec<RgbImage> = (0..8)
        .map(|_| {
            RgbImage::from_fn(size, size, |_, _| {
                [rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9)]
            })
            .unwrap()
        })
        .collect();
    let mask = Mask::new(
        size,
        size,
        (0..size * size)
            .map(|i| if (i / size) > size / 4 && (i % size) < size / 2 { 1.0 } else { 0.0 })
            .collect(),
    )
    .unwrap();

    let comps: Vec<&RgbImage> = imgs.iter().take(8).collect();
    let masks: Vec<&Mask> = (0..8).map(|_| &mask).collect();
    let targets: Vec<&RgbImage> = imgs.iter().rev().take(8).collect();

    // warm up once, then time three steps
    let t0 = Instant::now();
    let (loss, grads) = loss_and_gradients(&cfg, &params, &comps, &masks, &targets).unwrap();
    println!("first step: {:.3}s loss {:.4} ({} grads)", t0.elapsed().as_secs_f64(), loss, grads.len());
    let t1 = Instant::now();
    for _ in 0..3 {
        loss_and_gradients(&cfg, &params, &comps, &masks, &targets).unwrap();
    }
    println!("steady state: {:.3}s per batch-8 step", t1.elapsed().as_secs_f64() / 3.0);
}

fn test_fmse(cfg: &DucoNetConfig, params: &duconet::net::ModelParams, set: &[SyntheticSample]) -> f64 {
    let rows: Vec<ImageMetrics> = set
        .iter()
        .map(|s| {
            let pred = duconet_forward(&s.composite, &s.mask, params, cfg).unwrap();
            image_metrics(&pred, &s.gt, &s.mask).unwrap()
        })
        .collect();
    mean_metrics(&rows).unwrap().fmse
}

/// Charts how quickly the desk-scale full model closes the gap to the
/// composite baseline on held-out data; used to pick training budgets.
#[test]
#[ignore]
fn held_out_gain_trajectory() {
    let train_set = make_dataset(256, 64, &PerturbSpec { seed: 1000, ..PerturbSpec::default() }).unwrap();
    let test_set = make_dataset(64, 64, &PerturbSpec { seed: 2000, ..PerturbSpec::default() }).unwrap();
    let baseline_rows: Vec<ImageMetrics> = test_set
        .iter()
        .map(|s| image_metrics(&s.composite, &s.gt, &s.mask).unwrap())
        .collect();
    let baseline = mean_metrics(&baseline_rows).unwrap().fmse;
    println!("composite baseline test fMSE {:.2}", baseline);

    let cfg = DucoNetConfig::desk(AblationMode::CmPix, 0);
    let tc = TrainConfig { epochs: 30, decay_epochs: vec![24, 28], ..TrainConfig::desk(0) };
    let mut params = init_params(&cfg).unwrap();
    let mut state = AdamState::new(&params, tc.adam_beta1, tc.adam_beta2, tc.adam_eps);
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let started = Instant::now();
    for epoch in 0..tc.epochs {
        let lr = lr_at(epoch, &tc);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(tc.batch_size) {
            let comps: Vec<&RgbImage> = batch.iter().map(|&i| &train_set[i].composite).collect();
            let masks: Vec<&Mask> = batch.iter().map(|&i| &train_set[i].mask).collect();
            let targets: Vec<&RgbImage> = batch.iter().map(|&i| &train_set[i].gt).collect();
            let (loss, grads) = loss_and_gradients(&cfg, &params, &comps, &masks, &targets).unwrap();
            loss_sum += loss * batch.len() as f64;
            adam_step(&mut params, &grads, &mut state, lr).unwrap();
        }
        if epoch % 3 == 2 || epoch == 0 {
            let f = test_fmse(&cfg, &params, &test_set);
            println!(
                "epoch {:>3}: train L1 {:.5}, test fMSE {:.2} ({:.1}% of baseline), {:.1} min elapsed",
                epoch,
                loss_sum / train_set.len() as f64,
                f,
                100.0 * f / baseline,
                started.elapsed().as_secs_f64() / 60.0
            );
        } else {
            println!(
                "epoch {:>3}: train L1 {:.5}, {:.1} min elapsed",
                epoch,
                loss_sum / train_set.len() as f64,
                started.elapsed().as_secs_f64() / 60.0
            );
        }
    }
}
