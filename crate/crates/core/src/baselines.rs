//! Reference chargers and independent numerical checks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ddpg::{Agent, TrainConfig};
use crate::env::{EnvConfig, Observation, ObservationMode, Transition};
use crate::error::{Error, Result};
use crate::nn::{Mlp, OutputActivation, ParameterVector};
use crate::params::{CellParameters, Discretization};
use crate::spmet::{simulate_profile, CellState, CurrentProfile, SimulatorContext, TrajectoryPoint};

/// Output-feedback constant-current / constant-voltage charger.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CcCvConfig {
    /// C-rate during the constant-current phase.
    pub cc_rate: f64,
    /// V
    pub v_hold: f64,
    /// °C
    pub t_hold: f64,
    /// C-rate allowed per volt of headroom below `v_hold`.
    pub voltage_gain: f64,
    /// C-rate allowed per kelvin of headroom below `t_hold`.
    pub temperature_gain: f64,
    pub cutoff_soc: f64,
}

impl Default for CcCvConfig {
    fn default() -> Self {
        Self {
            cc_rate: 1.0,
            v_hold: 4.2,
            t_hold: 47.0,
            voltage_gain: 20.0,
            temperature_gain: 1.0,
            cutoff_soc: 0.8,
        }
    }
}

impl CcCvConfig {
    pub fn validate(&self, env: &EnvConfig) -> Result<()> {
        if !(self.cc_rate > 0.0 && self.cc_rate <= env.i_max) {
            return Err(Error::InvalidConfig(format!(
                "cc_rate {} must lie in (0, {}]",
                self.cc_rate, env.i_max
            )));
        }
        if !(self.v_hold <= env.v_max) {
            return Err(Error::InvalidConfig(format!(
                "v_hold {} exceeds v_max {}",
                self.v_hold, env.v_max
            )));
        }
        if !(self.voltage_gain >= 0.0 && self.temperature_gain >= 0.0) {
            return Err(Error::InvalidConfig("gains must be non-negative".into()));
        }
        Ok(())
    }
}

/// Measured quantities available to the charger.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Measurement {
    pub v_terminal: f64,
    pub t_cell_c: f64,
    pub soc: f64,
}

/// Commanded C-rate: `cc_rate` until proportional feedback on the voltage or
/// temperature headroom asks for less, clamped to `[0, i_max]`.
pub fn cccv_rate(m: Measurement, cfg: &CcCvConfig, i_max: f64) -> f64 {
    if m.soc >= cfg.cutoff_soc {
        return 0.0;
    }
    let by_voltage = cfg.voltage_gain * (cfg.v_hold - m.v_terminal);
    let by_temperature = cfg.temperature_gain * (cfg.t_hold - m.t_cell_c);
    cfg.cc_rate.min(by_voltage).min(by_temperature).clamp(0.0, i_max)
}

/// [`cccv_rate`] expressed as an action in `[-1, 1]`.
pub fn cccv_controller(m: Measurement, cfg: &CcCvConfig, i_max: f64) -> f64 {
    2.0 * cccv_rate(m, cfg, i_max) / i_max - 1.0
}

/// Bulk SOC by integrating each segment's current; negative current charges.
pub fn coulomb_counting_oracle(profile: &CurrentProfile, capacity_ah: f64, soc_init: f64) -> Vec<f64> {
    let mut soc = soc_init;
    let mut out = Vec::with_capacity(profile.segments.len() + 1);
    out.push(soc);
    for &(dt, current) in &profile.segments {
        soc -= current * dt / (3600.0 * capacity_ah);
        out.push(soc);
    }
    out
}

/// Largest number of solver states a refined run may allocate.
pub const MAX_REFINED_STATES: usize = 20_000;

/// Re-runs a profile with the grid and the inner step refined by `factor`.
pub fn fine_grid_reference(
    params: &CellParameters,
    disc: &Discretization,
    initial_soc: f64,
    t_init_k: f64,
    profile: &CurrentProfile,
    factor: usize,
) -> Result<Vec<TrajectoryPoint>> {
    if factor < 2 {
        return Err(Error::InvalidConfig(format!("refinement factor must be at least 2, got {factor}")));
    }
    let fine = disc.refined(factor);
    if fine.state_count() > MAX_REFINED_STATES {
        return Err(Error::InvalidConfig(format!(
            "refinement factor {factor} needs {} states (limit {MAX_REFINED_STATES})",
            fine.state_count()
        )));
    }
    run_profile(params, &fine, initial_soc, t_init_k, profile)
}

pub fn run_profile(
    params: &CellParameters,
    disc: &Discretization,
    initial_soc: f64,
    t_init_k: f64,
    profile: &CurrentProfile,
) -> Result<Vec<TrajectoryPoint>> {
    let ctx = SimulatorContext::new(params, disc)?;
    let state: CellState = ctx.equilibrium_state(initial_soc, t_init_k)?;
    Ok(simulate_profile(&ctx, &state, profile)?.0)
}

/// `|a - n| / max(|a|, |n|)`, or zero when the two agree to 1e-10.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let d = (analytic - numeric).abs();
    if d <= 1e-10 {
        0.0
    } else {
        d / analytic.abs().max(numeric.abs())
    }
}

/// Which gradients to compare against central differences.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradientTarget {
    Parameters,
    Inputs,
    /// Only the last input, the action slice of a critic.
    LastInput,
    All,
}

/// Worst relative error between analytic and central-difference gradients
/// of `sum(y)` over `samples` random inputs in `[-1, 1]`. Coordinates whose
/// perturbation changes the set of active hidden units are skipped, since
/// the difference quotient straddles a kink there.
pub fn gradient_check(net: &Mlp, samples: usize, h: f64, target: GradientTarget, seed: u64) -> Result<f64> {
    if !(h > 0.0) {
        return Err(Error::InvalidConfig(format!("step must be positive, got {h}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let upstream = vec![1.0; net.output_dim()];
    let value = |n: &Mlp, x: &[f64]| -> Result<f64> { Ok(n.forward(x)?.iter().sum()) };
    let mut worst = 0.0_f64;
    for _ in 0..samples {
        let x: Vec<f64> = (0..net.input_dim()).map(|_| rng.random_range(-1.0..=1.0)).collect();
        let pattern = net.relu_pattern(&x)?;
        let (g, dx) = net.backward(&x, &upstream)?;
        if matches!(target, GradientTarget::Parameters | GradientTarget::All) {
            let mut probe = net.clone();
            let base = net.parameters().clone();
            let mut p = base.clone();
            for i in 0..base.len() {
                p.0[i] = base.0[i] + h;
                probe.set_parameters(p.clone())?;
                let fp = value(&probe, &x)?;
                let kink_p = probe.relu_pattern(&x)? != pattern;
                p.0[i] = base.0[i] - h;
                probe.set_parameters(p.clone())?;
                let fm = value(&probe, &x)?;
                let kink_m = probe.relu_pattern(&x)? != pattern;
                p.0[i] = base.0[i];
                if kink_p || kink_m {
                    continue;
                }
                worst = worst.max(relative_error(g.0[i], (fp - fm) / (2.0 * h)));
            }
        }
        let inputs = match target {
            GradientTarget::Parameters => 0..0,
            GradientTarget::Inputs | GradientTarget::All => 0..x.len(),
            GradientTarget::LastInput => x.len() - 1..x.len(),
        };
        for j in inputs {
            let mut xp = x.clone();
            xp[j] += h;
            let mut xm = x.clone();
            xm[j] -= h;
            if net.relu_pattern(&xp)? != pattern || net.relu_pattern(&xm)? != pattern {
                continue;
            }
            let numeric = (value(net, &xp)? - value(net, &xm)?) / (2.0 * h);
            worst = worst.max(relative_error(dx[j], numeric));
        }
    }
    Ok(worst)
}

/// Upper 1% point of the chi-square distribution with 99 degrees of freedom.
pub const CHI_SQUARE_99_DF_1PCT: f64 = 134.642;

/// Pearson statistic of `counts` against equal expected counts.
pub fn chi_square_uniform(counts: &[u64]) -> Result<f64> {
    let total: u64 = counts.iter().sum();
    if counts.is_empty() || total == 0 {
        return Err(Error::Empty("count table"));
    }
    let expected = total as f64 / counts.len() as f64;
    Ok(counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum())
}

/// Critic whose value ignores the state and is the piecewise-linear
/// interpolant of `-(a - maximizer)^2` on knots `-1, -1 + spacing, ..., 1`.
/// `maximizer` must sit on a knot, so it is also the interpolant's argmax.
pub fn quadratic_toy_critic(obs_dim: usize, maximizer: f64, spacing: f64) -> Result<Mlp> {
    let n = (2.0 / spacing).round() as usize;
    let on_knot = ((maximizer + 1.0) / spacing - ((maximizer + 1.0) / spacing).round()).abs() < 1e-9;
    if n < 2 || (n as f64 * spacing - 2.0).abs() > 1e-9 || !on_knot || maximizer.abs() >= 1.0 {
        return Err(Error::InvalidConfig(format!(
            "maximizer {maximizer} must be an interior knot of a grid with spacing {spacing} dividing [-1, 1]"
        )));
    }
    let f = |a: f64| -(a - maximizer).powi(2);
    let knot = |k: usize| -1.0 + k as f64 * spacing;
    let sizes = vec![obs_dim + 1, n, 1];
    let mut net = Mlp::from_parts(sizes.clone(), OutputActivation::Identity, ParameterVector::zeros(Mlp::parameter_count(&sizes)))?;
    {
        let (w, b) = net.layer_mut(0);
        for k in 0..n {
            w[k * (obs_dim + 1) + obs_dim] = 1.0;
            b[k] = -knot(k);
        }
    }
    let (w, b) = net.layer_mut(1);
    w[0] = (f(knot(1)) - f(knot(0))) / spacing;
    for wk in &mut w[1..] {
        *wk = -2.0 * spacing;
    }
    b[0] = f(knot(0));
    Ok(net)
}

/// Trains a fresh actor against [`quadratic_toy_critic`] on `states` random
/// states, returning the worst `|policy(s) - maximizer|` after each update.
pub fn quadratic_toy(
    config: &TrainConfig,
    obs_dim: usize,
    maximizer: f64,
    states: usize,
    updates: usize,
) -> Result<Vec<f64>> {
    let mut agent = Agent::new(obs_dim, config)?;
    agent.critic = quadratic_toy_critic(obs_dim, maximizer, 0.05)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let batch: Vec<Transition> = (0..states)
        .map(|_| {
            let obs = Observation {
                values: (0..obs_dim).map(|_| rng.random_range(-1.0..=1.0)).collect(),
                mode: ObservationMode::Simplified,
            };
            Transition {
                next_obs: obs.clone(),
                obs,
                action: 0.0,
                reward: 0.0,
                done: false,
                v_margin: 0.0,
                t_margin: 0.0,
            }
        })
        .collect();
    let refs: Vec<&Transition> = batch.iter().collect();
    let mut errors = Vec::with_capacity(updates);
    for _ in 0..updates {
        agent.actor_update(&refs)?;
        let mut worst = 0.0_f64;
        for t in &batch {
            worst = worst.max((agent.policy(&t.obs.values)? - maximizer).abs());
        }
        errors.push(worst);
    }
    Ok(errors)
}
