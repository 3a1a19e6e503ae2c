//! Print lips_vision trajectories for IL vs baseline (calibration scratch).
use iterlearn_core::config::RunConfig;
use iterlearn_core::iterate::run_experiment_quiet;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let noise: f32 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(0.3);
    let distractors: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(2);
    let final_ext: u64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(2400);
    let wd: f32 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(0.1);
    for seed in 0..2u64 {
        let mut il_cfg = RunConfig::desk_default(seed);
        il_cfg.world.noise_sigma = noise;
        il_cfg.world.distractor_patches = distractors;
        il_cfg.schedule.final_extension_steps = final_ext;
        il_cfg.optim.weight_decay = wd;
        let base_cfg = il_cfg.to_baseline();
        let il = run_experiment_quiet(&il_cfg).unwrap();
        let base = run_experiment_quiet(&base_cfg).unwrap();
        let pick = |recs: &[iterlearn_core::metrics::MetricsRecord]| -> Vec<(u64, f64, f64)> {
            recs.iter()
                .filter(|r| r.step % 600 == 0 || r.step == recs.last().unwrap().step)
                .map(|r| (r.step, r.lips_vision, r.loss_total))
                .collect()
        };
        println!("seed {seed} IL:   {:?}", pick(&il.records).iter().map(|(s, l, o)| format!("{s}:{l:.1}({o:.2})")).collect::<Vec<_>>());
        println!("seed {seed} base: {:?}", pick(&base.records).iter().map(|(s, l, o)| format!("{s}:{l:.1}({o:.2})")).collect::<Vec<_>>());
    }
}
