//! Trains one agent and prints periodic greedy evaluations.
//!
//! `cargo run --release --example train_probe -- <episodes> <seed> [full]`

use std::time::Instant;

use rlcharge::ddpg::{evaluate, train, TrainConfig};
use rlcharge::env::{AgingScenario, BatteryEnv, EnvConfig, ObservationMode};
use rlcharge::params::{CellParameters, Discretization};

fn var<T: std::str::FromStr>(name: &str) -> Option<T> {
    std::env::var(name).ok().and_then(|v| v.parse().ok())
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().collect();
    let episodes = args.get(1).map_or(Ok(600), |s| s.parse())?;
    let seed = args.get(2).map_or(Ok(0), |s| s.parse())?;
    let mode = if args.get(3).is_some_and(|s| s == "full") {
        ObservationMode::Full
    } else {
        ObservationMode::Simplified
    };
    let env = BatteryEnv::new(
        &CellParameters::default_graphite_nmc(),
        &Discretization::default(),
        EnvConfig {
            observation_mode: mode,
            ..EnvConfig::default()
        },
        AgingScenario::IDENTITY,
    )?;
    let cfg = TrainConfig {
        episodes,
        seed,
        eval_every: 25,
        noise_anneal_episodes: var("PROBE_ANNEAL").unwrap_or(episodes.min(1000)),
        noise_sigma: var("PROBE_SIGMA").unwrap_or(0.2),
        ..TrainConfig::default()
    };
    let t0 = Instant::now();
    let out = train(&env, &cfg)?;
    println!("trained in {:.1} s, diverged {:?}", t0.elapsed().as_secs_f64(), out.diverged);
    let steps: usize = out.log.training().map(|r| r.steps).sum();
    println!("total env steps {steps}");
    println!("{:>6} {:>9} {:>9} {:>9} {:>7}", "ep", "reward", "v_mV", "t_K", "min");
    for r in out.log.evaluations() {
        println!(
            "{:>6} {:>9.3} {:>9.2} {:>9.2} {:>7.1}",
            r.episode,
            r.cum_reward,
            r.v_score * 1e3,
            r.t_score,
            r.charge_time_min
        );
    }
    let mut e = env.clone();
    let ev = evaluate(&out.agent, &mut e, 0)?;
    let acts: Vec<f64> = ev.trajectory.iter().skip(1).map(|r| r.action).collect();
    let n = acts.len().div_ceil(10).max(1);
    println!(
        "SUMMARY seed {seed} first_decile {:.3} time {:.0} v_mV {:.2} t_K {:.2} reward {:.3}",
        acts[..n].iter().sum::<f64>() / n as f64,
        ev.charge_time_min,
        ev.v_score * 1e3,
        ev.t_score,
        ev.cum_reward
    );
    for r in &ev.trajectory {
        println!(
            "t={:>5.0} a={:>6.3} I={:>6.2}A V={:.4} T={:.2}C soc={:.3}",
            r.point.time_s,
            r.action,
            -r.point.current_a,
            r.point.voltage.v_terminal,
            r.point.t_cell_k - 273.15,
            r.point.soc_anode
        );
    }
    Ok(())
}
