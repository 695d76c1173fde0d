//! Trains the full model, a uniform-attention variant and a global-only
//! variant on the synthetic world and prints test mAP for each seed.
//!
//! cargo run --release --example ablation -- [num_seeds] [noise_sigma]

use std::time::Instant;

use viewreid::distance::{AttentionMode, DistanceOptions, FusionWeights};
use viewreid::eval::EvalProtocol;
use viewreid::synth::{generate, SynthConfig};
use viewreid::trainer::{evaluate_model, train_on, TrainConfig, TrainingSet};

fn main() -> viewreid::Result<()> {
    let seeds: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(1);
    let noise: Option<f64> = std::env::args().nth(2).and_then(|s| s.parse().ok());
    let protocol = EvalProtocol::cross_camera();
    for seed in 0..seeds {
        let start = Instant::now();
        let mut synth = SynthConfig { seed, ..Default::default() };
        if let Some(n) = noise {
            synth.noise_sigma = n;
        }
        let data = generate(&synth)?;
        let set = TrainingSet::from_synthetic(&data)?;
        let variants = [
            ("full", true, AttentionMode::CommonVisible, FusionWeights::default()),
            ("uniform", true, AttentionMode::Uniform, FusionWeights::default()),
            ("global-only", false, AttentionMode::CommonVisible, FusionWeights::global_only()),
        ];
        let mut line = format!("seed {seed}:");
        for (name, local_term, attention, weights) in variants {
            let cfg = TrainConfig { seed, local_term, attention, ..Default::default() };
            let out = train_on(&set, &cfg)?;
            let opts = DistanceOptions { weights, attention, normalize: false };
            let r = evaluate_model(&out.model, &set, &opts, &protocol)?;
            let first = out.log.first().unwrap().total;
            let last = out.log.last().unwrap().total;
            line += &format!(" {name} mAP={:.4} r1={:.4} loss {first:.3}->{last:.3}", r.map, r.cmc_at(1).unwrap());
            if name == "full" {
                for (l1, l2) in [(1.0, 0.0), (1.0, 0.5), (0.0, 1.0)] {
                    let opts = DistanceOptions { weights: FusionWeights::new(l1, l2)?, attention, normalize: false };
                    let r = evaluate_model(&out.model, &set, &opts, &protocol)?;
                    line += &format!(" [{l1},{l2}]={:.4}", r.map);
                }
                line += ";";
            }
        }
        println!("{line} ({:.1}s)", start.elapsed().as_secs_f64());
    }
    Ok(())
}
