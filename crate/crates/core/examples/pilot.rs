//! Scratch pilot for schedule/threshold calibration. Not part of the test
//! suite; run with `cargo run --release -p iterlearn-core --example pilot`.

use std::time::Instant;

use iterlearn_core::config::RunConfig;
use iterlearn_core::iterate::{run_experiment, RunEvent};

fn main() {
    let mode = std::env::args().nth(1).unwrap_or_else(|| "baseline".into());
    let seed: u64 = std::env::args()
        .nth(2)
        .and_then(|s| s.parse().ok())
        .unwrap_or(0);
    let noise: f32 = std::env::args()
        .nth(3)
        .and_then(|s| s.parse().ok())
        .unwrap_or(0.1);
    let distractors: usize = std::env::args()
        .nth(4)
        .and_then(|s| s.parse().ok())
        .unwrap_or(1);
    let mut cfg = match mode.as_str() {
        "il" => RunConfig::desk_default(seed),
        _ => RunConfig::desk_default(seed).to_baseline(),
    };
    cfg.world.noise_sigma = noise;
    cfg.world.distractor_patches = distractors;
    eprintln!(
        "mode={mode} seed={seed} total_steps={}",
        cfg.schedule.total_steps()
    );
    let start = Instant::now();
    let outcome = run_experiment(&cfg, &mut |event| {
        if let RunEvent::Metrics(r) = event {
            if r.step % 200 == 0 || r.step == cfg.schedule.total_steps() {
                eprintln!(
                    "step {:5} gen {} {:>14?} lr {:.2e} loss {:7.4} r1 {:.3}/{:.3} lips {:8.1}/{:8.1} topo {:.3} codes {:3}",
                    r.step, r.generation, r.phase, r.lr, r.loss_total,
                    r.r1_i2t, r.r1_t2i, r.lips_vision, r.lips_language,
                    r.topo_sim, r.active_codes
                );
            }
        }
    })
    .unwrap();
    let elapsed = start.elapsed();
    eprintln!(
        "done in {:.1?} ({:.2} ms/step)",
        elapsed,
        elapsed.as_secs_f64() * 1000.0 / cfg.schedule.total_steps() as f64
    );
    let last = outcome.records.last().unwrap();
    eprintln!(
        "final: loss {:.4} r1 {:.3}/{:.3} topo {:.3} lips_v {:.1} active {}",
        last.loss_total, last.r1_i2t, last.r1_t2i, last.topo_sim, last.lips_vision, last.active_codes
    );
}
