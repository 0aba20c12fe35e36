use agvsim_core::config::{Mode, ScenarioConfig};
use agvsim_core::sim::run_scenario;
use std::time::Instant;

fn main() {
    for k in [20u32, 30, 40, 60] {
        for mode in [Mode::Uncontrolled, Mode::LocalOnly, Mode::CommIdeal] {
            let mut sum = 0u64;
            let mut done_all = true;
            let t = Instant::now();
            for seed in 1..=3u64 {
                let mut cfg = ScenarioConfig::default();
                cfg.mode.kind = mode;
                cfg.agv.count = k;
                let m = run_scenario(&cfg, seed).unwrap();
                sum += m.makespan;
                done_all &= !m.timed_out;
            }
            println!(
                "K={k} {mode:?}: mean makespan {} complete={} [{:.1}s/3 runs]",
                sum / 3, done_all, t.elapsed().as_secs_f64()
            );
        }
    }
}
