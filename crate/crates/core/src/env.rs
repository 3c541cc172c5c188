//! Minimum-time charging as an episodic environment.
//!
//! Each step applies a constant charging current for `dt_ctrl` seconds. The
//! reward is a fixed time penalty plus linear penalties on voltage and
//! temperature excursions above their limits. An episode ends when the bulk
//! anode state of charge reaches the target, the simulator saturates, or the
//! step budget runs out.

use std::io::Write;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{CellParameters, Discretization};
use crate::spmet::{self, CellState, Electrode, SimulatorContext, TrajectoryPoint};

pub const KELVIN_OFFSET: f64 = 273.15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObservationMode {
    /// Every simulator state.
    Full,
    /// Bulk anode SOC and normalized temperature.
    #[default]
    Simplified,
}

impl std::str::FromStr for ObservationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Self::Full),
            "simplified" => Ok(Self::Simplified),
            other => Err(Error::InvalidConfig(format!(
                "unknown observation mode `{other}` (expected full or simplified)"
            ))),
        }
    }
}

impl std::fmt::Display for ObservationMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Full => "full",
            Self::Simplified => "simplified",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    pub soc_init: f64,
    pub soc_ref: f64,
    /// Nominal starting voltage, V. The actual rest voltage follows from `soc_init`.
    pub v_init: f64,
    /// °C
    pub t_init: f64,
    /// V
    pub v_max: f64,
    /// °C
    pub t_max: f64,
    /// Upper current limit as a C-rate.
    pub i_max: f64,
    /// Control period, s.
    pub dt_ctrl: f64,
    pub max_steps: usize,
    pub observation_mode: ObservationMode,
    pub r_fast: f64,
    pub k_volt: f64,
    pub k_temp: f64,
    /// Half-width of the uniform jitter applied to `soc_init` at reset.
    pub soc_init_jitter: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            soc_init: 0.3,
            soc_ref: 0.8,
            v_init: 3.6,
            t_init: 27.0,
            v_max: 4.2,
            t_max: 47.0,
            i_max: 1.8,
            dt_ctrl: 60.0,
            max_steps: 120,
            observation_mode: ObservationMode::Simplified,
            r_fast: -0.1,
            k_volt: 100.0,
            k_temp: 5.0,
            soc_init_jitter: 0.0,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if !(0.0 <= self.soc_init && self.soc_init < self.soc_ref && self.soc_ref <= 1.0) {
            return bad(format!(
                "need 0 <= soc_init < soc_ref <= 1, got {} and {}",
                self.soc_init, self.soc_ref
            ));
        }
        if !(self.v_max > self.v_init) {
            return bad(format!("v_max {} must exceed v_init {}", self.v_max, self.v_init));
        }
        if !(self.t_max > self.t_init) {
            return bad(format!("t_max {} must exceed t_init {}", self.t_max, self.t_init));
        }
        if !(self.i_max.is_finite() && self.i_max > 0.0) {
            return bad(format!("i_max must be positive, got {}", self.i_max));
        }
        if !(self.dt_ctrl.is_finite() && self.dt_ctrl > 0.0) {
            return bad(format!("dt_ctrl must be positive, got {}", self.dt_ctrl));
        }
        if self.max_steps == 0 {
            return bad("max_steps must be at least 1".into());
        }
        if !(self.r_fast <= 0.0 && self.k_volt >= 0.0 && self.k_temp >= 0.0) {
            return bad("rewards must be non-positive: need r_fast <= 0, k_volt >= 0, k_temp >= 0".into());
        }
        if !(self.soc_init_jitter >= 0.0 && self.soc_init - self.soc_init_jitter >= 0.0
            && self.soc_init + self.soc_init_jitter < self.soc_ref)
        {
            return bad(format!("soc_init_jitter {} leaves the valid range", self.soc_init_jitter));
        }
        Ok(())
    }

    pub fn t_max_k(&self) -> f64 {
        self.t_max + KELVIN_OFFSET
    }
}

/// Aging modelled as multipliers on film resistance and generated heat.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgingScenario {
    pub film_resistance_multiplier: f64,
    pub heat_generation_multiplier: f64,
}

impl Default for AgingScenario {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl AgingScenario {
    pub const IDENTITY: Self = Self {
        film_resistance_multiplier: 1.0,
        heat_generation_multiplier: 1.0,
    };

    /// Default aged cell: film resistance doubled, heat generation up by half.
    pub const AGED: Self = Self {
        film_resistance_multiplier: 2.0,
        heat_generation_multiplier: 1.5,
    };

    pub fn validate(&self) -> Result<()> {
        for (name, m) in [
            ("film_resistance_multiplier", self.film_resistance_multiplier),
            ("heat_generation_multiplier", self.heat_generation_multiplier),
        ] {
            if !(m.is_finite() && m > 0.0) {
                return Err(Error::param(name, format!("must be finite and positive, got {m}")));
            }
        }
        Ok(())
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::IDENTITY
    }

    pub fn apply(&self, params: &CellParameters) -> CellParameters {
        let mut p = params.clone();
        p.anode.film_resistance *= self.film_resistance_multiplier;
        p.cathode.film_resistance *= self.film_resistance_multiplier;
        p
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub values: Vec<f64>,
    pub mode: ObservationMode,
}

impl Observation {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub r_fast: f64,
    pub r_volt: f64,
    pub r_temp: f64,
    pub total: f64,
}

/// Reward for a completed step with terminal voltage `v_terminal` (V) and
/// temperature `t_cell_c` (°C). The time penalty is waived on the step that
/// reaches the target.
pub fn reward(v_terminal: f64, t_cell_c: f64, reached_target: bool, config: &EnvConfig) -> RewardBreakdown {
    let r_fast = if reached_target { 0.0 } else { config.r_fast };
    let r_volt = if v_terminal >= config.v_max {
        -config.k_volt * (v_terminal - config.v_max)
    } else {
        0.0
    };
    let r_temp = if t_cell_c >= config.t_max {
        -config.k_temp * (t_cell_c - config.t_max)
    } else {
        0.0
    };
    RewardBreakdown {
        r_fast,
        r_volt,
        r_temp,
        total: r_fast + r_volt + r_temp,
    }
}

/// Maps an actor output in [-1, 1] to a charging current magnitude in A.
/// Returns the magnitude and whether the input had to be clamped.
pub fn scale_action(action: f64, config: &EnvConfig, capacity_ah: f64) -> (f64, bool) {
    let clamped = if action.is_nan() { -1.0 } else { action.clamp(-1.0, 1.0) };
    let was_clamped = clamped != action;
    let fraction = 0.5 * (clamped + 1.0);
    (fraction * config.i_max * capacity_ah, was_clamped)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Termination {
    /// Bulk anode SOC reached `soc_ref`.
    Charged,
    /// Step budget exhausted.
    Timeout,
    /// The simulator clipped a concentration.
    Saturated,
}

impl Termination {
    /// Whether the value after this step should not be bootstrapped.
    pub fn is_absorbing(self) -> bool {
        !matches!(self, Termination::Timeout)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepInfo {
    /// `V_T - v_max`, V.
    pub v_margin: f64,
    /// `T_cell - t_max`, K.
    pub t_margin: f64,
    pub v_terminal: f64,
    pub t_cell_c: f64,
    pub soc: f64,
    pub current_a: f64,
    pub action_clamped: bool,
    pub termination: Option<Termination>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub observation: Observation,
    pub reward: RewardBreakdown,
    pub done: bool,
    pub info: StepInfo,
}

/// One replay tuple. `done` is set only for absorbing terminations; a timeout
/// ends the episode but still bootstraps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub obs: Observation,
    pub action: f64,
    pub reward: f64,
    pub next_obs: Observation,
    pub done: bool,
    pub v_margin: f64,
    pub t_margin: f64,
}

/// A sample of an episode, with the reward earned on the step that ended there.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnvRecord {
    pub point: TrajectoryPoint,
    pub action: f64,
    pub reward: f64,
    pub done: bool,
}

#[derive(Debug, Clone)]
pub struct BatteryEnv {
    ctx: Arc<SimulatorContext>,
    config: EnvConfig,
    scenario: AgingScenario,
    state: CellState,
    steps: usize,
    done: bool,
    trajectory: Vec<EnvRecord>,
}

impl BatteryEnv {
    pub fn new(
        params: &CellParameters,
        disc: &Discretization,
        config: EnvConfig,
        scenario: AgingScenario,
    ) -> Result<Self> {
        config.validate()?;
        scenario.validate()?;
        let aged = scenario.apply(params);
        let ctx = SimulatorContext::new(&aged, disc)?.with_heat_scale(scenario.heat_generation_multiplier)?;
        ctx.inner_steps(config.dt_ctrl)?;
        let state = ctx.equilibrium_state(config.soc_init, config.t_init + KELVIN_OFFSET)?;
        let mut env = Self {
            ctx: Arc::new(ctx),
            config,
            scenario,
            state,
            steps: 0,
            done: false,
            trajectory: Vec::new(),
        };
        // Bounds of the jitter range must be realizable too.
        for soc in [config.soc_init - config.soc_init_jitter, config.soc_init + config.soc_init_jitter] {
            env.ctx.equilibrium_state(soc, config.t_init + KELVIN_OFFSET)?;
        }
        env.reset(0)?;
        Ok(env)
    }

    /// Same cell and limits under a different aging scenario.
    pub fn with_scenario(&self, scenario: AgingScenario) -> Result<Self> {
        let base = self.scenario_free_params();
        Self::new(&base, self.ctx.discretization(), self.config, scenario)
    }

    fn scenario_free_params(&self) -> CellParameters {
        let mut p = self.ctx.params().clone();
        p.anode.film_resistance /= self.scenario.film_resistance_multiplier;
        p.cathode.film_resistance /= self.scenario.film_resistance_multiplier;
        p
    }

    pub fn reset(&mut self, seed: u64) -> Result<Observation> {
        let soc = if self.config.soc_init_jitter > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let j = self.config.soc_init_jitter;
            self.config.soc_init + rng.random_range(-j..=j)
        } else {
            self.config.soc_init
        };
        self.state = self.ctx.equilibrium_state(soc, self.config.t_init + KELVIN_OFFSET)?;
        self.steps = 0;
        self.done = false;
        let point = spmet::sample(&self.ctx, &self.state, 0.0, 0.0)?;
        self.trajectory.clear();
        self.trajectory.push(EnvRecord {
            point,
            action: -1.0,
            reward: 0.0,
            done: false,
        });
        Ok(self.observe())
    }

    pub fn step(&mut self, action: f64) -> Result<StepOutcome> {
        if self.done {
            return Err(Error::EpisodeFinished);
        }
        let capacity = self.ctx.capacity_ah();
        let (magnitude, action_clamped) = scale_action(action, &self.config, capacity);
        let current = -magnitude;
        self.state = self.ctx.step(&self.state, current, self.config.dt_ctrl)?;
        self.steps += 1;

        let soc = self.soc();
        let voltage = self.ctx.terminal_voltage(&self.state, current);
        let saturated = self.state.saturated || voltage.is_err();
        let point = spmet::sample(&self.ctx, &self.state, self.steps as f64 * self.config.dt_ctrl, current)?;
        let v_terminal = point.voltage.v_terminal;
        let t_cell_c = self.state.t_cell - KELVIN_OFFSET;

        let termination = if soc >= self.config.soc_ref {
            Some(Termination::Charged)
        } else if saturated {
            Some(Termination::Saturated)
        } else if self.steps >= self.config.max_steps {
            Some(Termination::Timeout)
        } else {
            None
        };
        let reached = termination == Some(Termination::Charged);
        let r = reward(v_terminal, t_cell_c, reached, &self.config);
        self.done = termination.is_some();
        self.trajectory.push(EnvRecord {
            point,
            action: action.clamp(-1.0, 1.0),
            reward: r.total,
            done: self.done,
        });

        Ok(StepOutcome {
            observation: self.observe(),
            reward: r,
            done: self.done,
            info: StepInfo {
                v_margin: v_terminal - self.config.v_max,
                t_margin: self.state.t_cell - self.config.t_max_k(),
                v_terminal,
                t_cell_c,
                soc,
                current_a: magnitude,
                action_clamped,
                termination,
            },
        })
    }

    pub fn observe(&self) -> Observation {
        let t_lo = self.ctx.params().thermal.ambient_temperature;
        let t_hi = self.config.t_max_k();
        let t_norm = 2.0 * (self.state.t_cell - t_lo) / (t_hi - t_lo) - 1.0;
        let values = match self.config.observation_mode {
            ObservationMode::Simplified => vec![self.soc(), t_norm],
            ObservationMode::Full => {
                let c0 = self.ctx.params().electrolyte.initial_concentration;
                let mut v = Vec::with_capacity(self.ctx.state_count());
                v.extend(self.state.c_s_anode.iter().map(|c| c / self.ctx.anode.c_max));
                v.extend(self.state.c_s_cathode.iter().map(|c| c / self.ctx.cathode.c_max));
                v.extend(self.state.c_e.iter().map(|c| c / c0 - 1.0));
                v.push(t_norm);
                v
            }
        };
        Observation {
            values,
            mode: self.config.observation_mode,
        }
    }

    pub fn observation_dim(&self) -> usize {
        match self.config.observation_mode {
            ObservationMode::Simplified => 2,
            ObservationMode::Full => self.ctx.state_count(),
        }
    }

    pub fn soc(&self) -> f64 {
        self.ctx.bulk_soc(&self.state, Electrode::Anode)
    }

    pub fn state(&self) -> &CellState {
        &self.state
    }

    pub fn context(&self) -> &SimulatorContext {
        &self.ctx
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn scenario(&self) -> AgingScenario {
        self.scenario
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    /// Initial sample plus one record per completed step.
    pub fn trajectory(&self) -> &[EnvRecord] {
        &self.trajectory
    }

    pub fn capacity_ah(&self) -> f64 {
        self.ctx.capacity_ah()
    }
}

/// Worst excursions above the voltage and temperature limits over a
/// trajectory; positive values are violations.
pub fn violation_scores(points: &[TrajectoryPoint], config: &EnvConfig) -> Result<(f64, f64)> {
    if points.is_empty() {
        return Err(Error::Empty("trajectory"));
    }
    let t_max_k = config.t_max_k();
    let v = points
        .iter()
        .map(|p| p.voltage.v_terminal - config.v_max)
        .fold(f64::NEG_INFINITY, f64::max);
    let t = points
        .iter()
        .map(|p| p.t_cell_k - t_max_k)
        .fold(f64::NEG_INFINITY, f64::max);
    Ok((v, t))
}

pub const ENV_CSV_EXTRA: [&str; 3] = ["action", "reward", "done"];

/// Simulator trajectory columns followed by action, reward and done.
pub fn write_env_trajectory_csv<W: Write>(out: W, records: &[EnvRecord]) -> Result<()> {
    let err = |e: csv::Error| Error::parse("trajectory csv", e);
    let mut w = csv::Writer::from_writer(out);
    let header: Vec<&str> = TrajectoryPoint::CSV_HEADER
        .iter()
        .chain(ENV_CSV_EXTRA.iter())
        .copied()
        .collect();
    w.write_record(&header).map_err(err)?;
    for r in records {
        let mut row: Vec<String> = r.point.csv_fields().to_vec();
        row.push(r.action.to_string());
        row.push(r.reward.to_string());
        row.push(u8::from(r.done).to_string());
        w.write_record(&row).map_err(err)?;
    }
    w.flush().map_err(|e| Error::parse("trajectory csv", e))?;
    Ok(())
}
