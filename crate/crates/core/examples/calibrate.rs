//! Scratch calibration for the toy end-to-end experiment.
//! Args: iters lr edge eval_every terminal_decay lambda [roughness] [ckpt_out]

use std::time::Instant;

use demres::degrade::MaskSpec;
use demres::denoiser::DenoiserConfig;
use demres::eval::{bicubic_baseline, evaluate};
use demres::raster::{synth_terrain, tile, TileSet};
use demres::rng::derive_seed;
use demres::sampling::{restore_batch, SampleMode, SamplerConfig};
use demres::sde::{ScheduleSpec, ThetaProfile};
use demres::training::*;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let iters: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(500);
    let lr: f64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(1e-3);
    let edge: f64 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(0.1);
    let eval_every: usize = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(1000);
    let terminal_decay: f64 = args.get(5).map(|s| s.parse().unwrap()).unwrap_or(0.005);
    let lambda: f64 = args.get(6).map(|s| s.parse().unwrap()).unwrap_or(0.2);
    let roughness: f64 = args.get(7).map(|s| s.parse().unwrap()).unwrap_or(0.75);
    let ckpt_out = args.get(8).cloned();

    let terrain = synth_terrain(1408, 640, roughness, 20).unwrap();
    let (train_set, test_set) = tile(&terrain, 64, 64, 200.0 / 220.0, 77).unwrap();
    println!("train {} test {} | lr {lr} edge {edge} decay {terminal_decay} lambda {lambda} roughness {roughness}", train_set.len(), test_set.len());

    let mask: MaskSpec = "M-311".parse().unwrap();
    let sched_spec = ScheduleSpec { t: 50, profile: ThetaProfile::CosineIncreasing, lambda, terminal_decay };
    let sched = sched_spec.build().unwrap();
    let model_config = DenoiserConfig::desk();
    let config = TrainConfig {
        iterations: iters,
        batch_size: 4,
        lr_init: lr,
        lr_schedule: LrSchedule::Cosine { min_factor: 0.05 },
        edge_weight: edge,
        seed: 33,
        ..Default::default()
    };

    let mut degraded = TileSet { tiles: vec![], tile_rows: 32, tile_cols: 32, split_seed: 0 };
    let mut baseline = TileSet { tiles: vec![], tile_rows: 64, tile_cols: 64, split_seed: 0 };
    for (k, t) in test_set.tiles.iter().enumerate() {
        let d = degrade_for_eval(t, 2, &mask, derive_seed(33, 0x9000 + k as u64)).unwrap();
        baseline.tiles.push(bicubic_baseline(&d, 2).unwrap());
        degraded.tiles.push(d);
    }
    let (base_rep, _) = evaluate(&baseline, &test_set).unwrap();
    println!("bicubic baseline: rmse {:.4} psnr {:.3} ssim {:.4}", base_rep.rmse, base_rep.psnr, base_rep.ssim);

    let pairs: Vec<_> = train_set.tiles.iter().enumerate()
        .map(|(k, t)| demres::degrade::make_pair(t, 2, &mask, derive_seed(33, 0x1000 + k as u64)).unwrap())
        .collect();
    let mut state = TrainState::new(model_config, &config).unwrap();
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut cursor = order.len();
    let mut erng = demres::rng::rng_from_seed(derive_seed(33, 0x33));

    let eval_variants = |model: &demres::denoiser::Denoiser, tag: &str, full: bool| {
        let mut variants: Vec<(&str, SamplerConfig)> = vec![(
            "optimal+clamp",
            SamplerConfig { t: 50, mode: SampleMode::OptimalState, stochastic: false, seed: 99, ..Default::default() },
        )];
        if full {
            variants.push((
                "optimal-noclamp",
                SamplerConfig { t: 50, mode: SampleMode::OptimalState, stochastic: false, seed: 99, x0_clamp: None },
            ));
            variants.push((
                "optimal+clamp+stoch",
                SamplerConfig { t: 50, mode: SampleMode::OptimalState, stochastic: true, seed: 99, ..Default::default() },
            ));
            variants.push((
                "euler",
                SamplerConfig { t: 50, mode: SampleMode::EulerSde, stochastic: false, seed: 99, ..Default::default() },
            ));
        }
        for (name, sampler) in variants {
            let restored = restore_batch(&degraded, model, &sched, 2, &sampler).unwrap();
            let (rep, _) = evaluate(&restored, &test_set).unwrap();
            println!(
                "eval[{tag}][{name}]: rmse {:.4} (bicubic {:.4}) psnr {:.3} (bicubic {:.3}) ssim {:.4}",
                rep.rmse, base_rep.rmse, rep.psnr, base_rep.psnr, rep.ssim
            );
        }
    };

    let t0 = Instant::now();
    for step in 0..iters {
        let mut batch = Vec::with_capacity(4);
        for _ in 0..4 {
            if cursor >= order.len() {
                for i in (1..order.len()).rev() {
                    let j = rand::Rng::gen_range(&mut erng, 0..=i);
                    order.swap(i, j);
                }
                cursor = 0;
            }
            batch.push(&pairs[order[cursor]]);
            cursor += 1;
        }
        let r = train_batch_step(&mut state, &batch, &sched, &config).unwrap();
        if step % 200 == 0 {
            println!(
                "step {step}: l_sde {:.4} l_edge {:.4} lr {:.2e} ({:.0} ms/step)",
                r.l_sde, r.l_edge, r.lr,
                t0.elapsed().as_millis() as f64 / (step + 1) as f64
            );
        }
        if (step + 1) % eval_every == 0 && step + 1 != iters {
            eval_variants(&state.model, &format!("{}", step + 1), false);
        }
    }
    eval_variants(&state.model, "final", true);
    if let Some(path) = ckpt_out {
        demres::denoiser::save_checkpoint(&mut state.model, &sched_spec, state.step, std::path::Path::new(&path)).unwrap();
        println!("saved checkpoint to {path}");
    }
    println!("total {:.1}s", t0.elapsed().as_secs_f64());
}
