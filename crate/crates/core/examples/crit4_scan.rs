//! Baseline-only scan: when does r1_i2t first reach 0.9? (calibration scratch)
use iterlearn_core::config::RunConfig;
use iterlearn_core::iterate::run_experiment_quiet;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let noise: f32 = args[1].parse().unwrap();
    let distractors: usize = args[2].parse().unwrap();
    let seeds: u64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(5);
    let mut hits = Vec::new();
    for seed in 0..seeds {
        let mut cfg = RunConfig::desk_default(seed).to_baseline();
        cfg.world.noise_sigma = noise;
        cfg.world.distractor_patches = distractors;
        cfg.schedule.final_extension_steps = 3600 - cfg.schedule.warmup_steps;
        let out = run_experiment_quiet(&cfg).unwrap();
        let first = out.records.iter().find(|r| r.r1_i2t >= 0.9).map(|r| r.step);
        let last = out.records.last().unwrap();
        hits.push((seed, first, last.loss_total, last.topo_sim));
    }
    println!("noise {noise} d {distractors}: {hits:?}");
}
