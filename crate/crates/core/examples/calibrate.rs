//! Calibration harness for the directional criteria. Not part of the test
//! suite. Usage:
//!   cargo run --release -p iterlearn-core --example calibrate -- <noise> <distractors> <final_ext> <seeds>

use iterlearn_core::config::RunConfig;
use iterlearn_core::iterate::{run_experiment, PhaseTag, RunEvent, TrainState};
use iterlearn_core::metrics::{MetricsRecord, ProbeConfig};
use iterlearn_core::world::make_world;

fn probe(state: &TrainState, _seed: u64, generation: u64) -> f64 {
    let world = make_world(state.config.world.clone()).unwrap();
    let cfg = ProbeConfig {
        probe_seed: 0,
        probe_steps: 500,
        probe_log_every: 100,
        batch_size: state.config.hyper.batch_size,
        tau: state.config.hyper.tau,
        base_lr: state.config.optim.base_lr,
        lr_warmup_steps: 50,
        beta1: state.config.optim.beta1,
        beta2: state.config.optim.beta2,
        weight_decay: state.config.optim.weight_decay,
        use_codebook: state.config.ablation.use_codebook,
        source_generation: generation,
    };
    iterlearn_core::metrics::probe_score(
        &state.vision,
        &state.codebook,
        &world,
        &state.config.language_arch,
        &cfg,
        &[901, 902, 903],
    )
    .unwrap()
}

fn gen_minima(records: &[MetricsRecord], k: u64) -> Vec<f64> {
    (1..=k)
        .map(|g| {
            records
                .iter()
                .filter(|r| r.generation == g && r.phase != PhaseTag::Distill)
                .map(|r| 0.5 * (r.loss_i2t + r.loss_t2i))
                .fold(f64::INFINITY, f64::min)
        })
        .collect()
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let noise: f32 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(0.2);
    let distractors: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(2);
    let final_ext: u64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(2400);
    let seeds: u64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(2);
    let with_probes = args.get(5).map(|s| s != "noprobe").unwrap_or(true);

    let mut crit5_pass = 0;
    let mut crit6_slope = 0;
    let mut crit6_below = 0;
    let mut crit7_win = 0;
    let mut crit8_win = 0;
    let mut crit4_pass = 0;
    for seed in 0..seeds {
        let mut il_cfg = RunConfig::desk_default(seed);
        il_cfg.world.noise_sigma = noise;
        il_cfg.world.distractor_patches = distractors;
        il_cfg.schedule.final_extension_steps = final_ext;
        let base_cfg = il_cfg.to_baseline();
        let k = il_cfg.schedule.generations;

        // per-generation snapshots for the probe-monotonicity check
        let mut gen_probe_scores = Vec::new();
        let il = run_experiment(&il_cfg, &mut |e| {
            if let RunEvent::Checkpoint(state) = e {
                if with_probes
                    && state.phase.tag == PhaseTag::Distill
                    && state.phase.generation >= 2
                {
                    // checkpoint at the start of gen g = artifacts of g-1
                    gen_probe_scores.push((state.phase.generation - 1, probe(state, seed, state.phase.generation - 1)));
                }
            }
        })
        .unwrap();
        let base = iterlearn_core::iterate::run_experiment_quiet(&base_cfg).unwrap();

        // criterion 4: baseline r1 >= 0.9 within 3000 steps
        let hit = base
            .records
            .iter()
            .any(|r| r.step <= 3000 && r.r1_i2t >= 0.9);
        crit4_pass += hit as u32;
        let first_hit = base.records.iter().find(|r| r.r1_i2t >= 0.9).map(|r| r.step);
        let base_final_loss = base.records.last().unwrap().loss_total;
        println!("  crit4 first r1>=0.9 at {first_hit:?}, baseline final loss {base_final_loss:.3}");

        // criterion 5: spikes + decreasing minima
        let minima = gen_minima(&il.records, k);
        let decreasing = minima.windows(2).filter(|w| w[1] < w[0]).count();
        let needed = (k as usize - 1) * 4 / 5;
        if decreasing >= needed {
            crit5_pass += 1;
        }

        // criterion 6: lips slope across generations + IL final below baseline
        let lips_per_gen: Vec<f64> = (1..=k)
            .map(|g| {
                il.records
                    .iter()
                    .filter(|r| r.generation == g)
                    .map(|r| r.lips_vision.ln())
                    .last()
                    .unwrap()
            })
            .collect();
        let n = lips_per_gen.len() as f64;
        let mean_x = (n - 1.0) / 2.0;
        let mean_y = lips_per_gen.iter().sum::<f64>() / n;
        let slope: f64 = lips_per_gen
            .iter()
            .enumerate()
            .map(|(i, y)| (i as f64 - mean_x) * (y - mean_y))
            .sum::<f64>()
            / lips_per_gen
                .iter()
                .enumerate()
                .map(|(i, _)| (i as f64 - mean_x).powi(2))
                .sum::<f64>();
        if slope < 0.0 {
            crit6_slope += 1;
        }
        let il_final_lips = il.records.last().unwrap().lips_vision;
        let base_final_lips = base.records.last().unwrap().lips_vision;
        if il_final_lips < base_final_lips {
            crit6_below += 1;
        }

        // criterion 7: ease-of-learn probe, final artifacts
        let (il_probe, base_probe) = if with_probes {
            (probe(&il.state, seed, k), probe(&base.state, seed, 0))
        } else {
            (0.0, 0.0)
        };
        if il_probe > base_probe {
            crit7_win += 1;
        }

        // criterion 8: topo
        let il_topo = il.records.last().unwrap().topo_sim;
        let base_topo = base.records.last().unwrap().topo_sim;
        if il_topo >= base_topo {
            crit8_win += 1;
        }

        gen_probe_scores.push((k, il_probe));
        println!(
            "seed {seed}: minima {:?} dec {}/{}",
            minima.iter().map(|x| (x * 1000.0).round() / 1000.0).collect::<Vec<_>>(),
            decreasing,
            k - 1
        );
        println!(
            "  lips/gen {:?} slope {slope:.4} | IL lips {il_final_lips:.1} vs base {base_final_lips:.1}",
            lips_per_gen.iter().map(|x| (x * 100.0).round() / 100.0).collect::<Vec<_>>()
        );
        println!(
            "  probe IL {il_probe:.3} vs base {base_probe:.3} | per-gen probes {:?}",
            gen_probe_scores
                .iter()
                .map(|(g, s)| format!("g{g}:{s:.3}"))
                .collect::<Vec<_>>()
        );
        println!("  topo IL {il_topo:.3} vs base {base_topo:.3} | crit4 r1 hit {hit}");
    }
    println!(
        "=== noise {noise} distractors {distractors} final {final_ext}: crit4 {crit4_pass}/{seeds} crit5 {crit5_pass}/{seeds} crit6 slope {crit6_slope}/{seeds} below {crit6_below}/{seeds} crit7 {crit7_win}/{seeds} crit8 {crit8_win}/{seeds}"
    );
}
