//! The five verbs. Each writes its outputs under an output directory and
//! returns a status the binary turns into an exit code.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use rlcharge::baselines::{cccv_controller, coulomb_counting_oracle, Measurement};
use rlcharge::ddpg::{evaluate, rollout, train, train_from, Agent, AgentCheckpoint, Evaluation, RunLog, TrainOutcome};
use rlcharge::env::{write_env_trajectory_csv, AgingScenario, BatteryEnv, ObservationMode, KELVIN_OFFSET};
use rlcharge::report::{aggregate, write_panel_csv, Metric};
use rlcharge::spmet::{simulate_profile, write_trajectory_csv, CurrentProfile, SimulatorContext};
use serde::{Deserialize, Serialize};

use crate::config::Resolved;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Ok,
    /// Some run stopped on a non-finite loss; its logs were still written.
    Diverged,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunEntry {
    pub mode: ObservationMode,
    pub seed: u64,
    /// Relative to the manifest's directory.
    pub runlog: String,
    pub checkpoint: String,
    pub diverged: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config_sha256: String,
    /// Fully resolved configuration, TOML.
    pub config: String,
    pub params_file: Option<String>,
    pub seeds: Vec<u64>,
    pub runs: Vec<RunEntry>,
    pub wall_clock_s: f64,
}

impl Manifest {
    fn new(command: &str, r: &Resolved) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            config_sha256: r.hash(),
            config: r.config_toml(),
            params_file: r.params_path.as_ref().map(|p| p.display().to_string()),
            seeds: r.config.seeds.clone(),
            runs: Vec::new(),
            wall_clock_s: 0.0,
        }
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    fn save(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self)?;
        fs::write(&path, text + "\n").with_context(|| format!("writing {}", path.display()))
    }
}

/// Summary of a single greedy episode, written next to its trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSummary {
    pub cum_reward: f64,
    pub v_score: f64,
    pub t_score: f64,
    pub charge_time_min: f64,
    pub steps: usize,
    pub termination: String,
}

impl From<&Evaluation> for EpisodeSummary {
    fn from(e: &Evaluation) -> Self {
        Self {
            cum_reward: e.cum_reward,
            v_score: e.v_score,
            t_score: e.t_score,
            charge_time_min: e.charge_time_min,
            steps: e.steps,
            termination: format!("{:?}", e.termination).to_lowercase(),
        }
    }
}

impl std::fmt::Display for EpisodeSummary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "reward {:.3}, v_score {:.1} mV, t_score {:.2} K, {:.0} min in {} steps ({})",
            self.cum_reward,
            self.v_score * 1e3,
            self.t_score,
            self.charge_time_min,
            self.steps,
            self.termination
        )
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

fn write_episode(dir: &Path, stem: &str, ev: &Evaluation) -> Result<EpisodeSummary> {
    write_env_trajectory_csv(create(&dir.join(format!("{stem}_trajectory.csv")))?, &ev.trajectory)?;
    let summary = EpisodeSummary::from(ev);
    write_json(&dir.join(format!("{stem}_summary.json")), &summary)?;
    Ok(summary)
}

fn make_env(r: &Resolved, mode: ObservationMode, scenario: AgingScenario) -> Result<BatteryEnv> {
    Ok(BatteryEnv::new(
        &r.params,
        &r.config.discretization,
        r.config.env_for(mode),
        scenario,
    )?)
}

fn load_checkpoint(path: &Path) -> Result<AgentCheckpoint> {
    AgentCheckpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

/// Observation mode a checkpoint was trained for, checked against the config.
fn checkpoint_mode(agent: &Agent, r: &Resolved) -> Result<ObservationMode> {
    let mode = r.config.env.observation_mode;
    let expected = make_env(r, mode, AgingScenario::IDENTITY)?.observation_dim();
    if agent.obs_dim() != expected {
        bail!(
            "checkpoint takes {} observations but observation mode `{mode}` provides {expected}; pass the matching --obs",
            agent.obs_dim()
        );
    }
    Ok(mode)
}

fn run_dir(out: &Path, mode: ObservationMode) -> PathBuf {
    out.join(mode.to_string())
}

/// Persists one finished run: its log and a checkpoint without the buffer.
fn persist_run(out: &Path, mode: ObservationMode, seed: u64, outcome: &TrainOutcome) -> Result<RunEntry> {
    let dir = run_dir(out, mode);
    create_dir(&dir)?;
    let runlog = format!("{mode}/runlog_seed{seed}.csv");
    let checkpoint = format!("{mode}/checkpoint_seed{seed}.json");
    outcome.log.write_csv(create(&out.join(&runlog))?)?;
    AgentCheckpoint::new(outcome.agent.clone(), None).save(&out.join(&checkpoint))?;
    Ok(RunEntry {
        mode,
        seed,
        runlog,
        checkpoint,
        diverged: outcome.diverged.clone(),
    })
}

/// Runs one closure per seed on its own thread, keeping seed order.
fn per_seed<T, F>(seeds: &[u64], f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(u64) -> Result<T> + Sync,
{
    std::thread::scope(|s| {
        let f = &f;
        let handles: Vec<_> = seeds.iter().map(|&seed| s.spawn(move || f(seed))).collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| bail!("training thread panicked")))
            .collect()
    })
}

fn finish(manifest: &mut Manifest, out: &Path, started: Instant) -> Result<Status> {
    manifest.wall_clock_s = started.elapsed().as_secs_f64();
    manifest.save(out)?;
    let diverged: Vec<_> = manifest.runs.iter().filter_map(|r| r.diverged.as_ref().map(|d| (r, d))).collect();
    for (r, d) in &diverged {
        eprintln!("warning: {} seed {} diverged: {d}", r.mode, r.seed);
    }
    Ok(if diverged.is_empty() { Status::Ok } else { Status::Diverged })
}

pub fn cmd_train(r: &Resolved, out: &Path) -> Result<Status> {
    let started = Instant::now();
    create_dir(out)?;
    let mut manifest = Manifest::new("train", r);
    for mode in r.config.modes() {
        let env = make_env(r, mode, AgingScenario::IDENTITY)?;
        let outcomes = per_seed(&r.config.seeds, |seed| Ok(train(&env, &r.config.train_for(seed))?))?;
        for (seed, outcome) in r.config.seeds.iter().zip(&outcomes) {
            manifest.runs.push(persist_run(out, mode, *seed, outcome)?);
            if let Some(last) = outcome.log.evaluations().last() {
                println!(
                    "{mode} seed {seed}: final evaluation reward {:.3}, {:.0} min, v_score {:.1} mV",
                    last.cum_reward,
                    last.charge_time_min,
                    last.v_score * 1e3
                );
            }
        }
    }
    finish(&mut manifest, out, started)
}

/// What `eval` rolls out.
#[derive(Debug, Clone)]
pub enum PolicySource {
    Checkpoint(PathBuf),
    CcCv,
}

pub fn cmd_eval(r: &Resolved, policy: &PolicySource, seed: u64, out: &Path) -> Result<EpisodeSummary> {
    create_dir(out)?;
    let ev = match policy {
        PolicySource::Checkpoint(path) => {
            let ck = load_checkpoint(path)?;
            let mode = checkpoint_mode(&ck.agent, r)?;
            let mut env = make_env(r, mode, AgingScenario::IDENTITY)?;
            evaluate(&ck.agent, &mut env, seed)?
        }
        PolicySource::CcCv => {
            let mut env = make_env(r, r.config.env.observation_mode, AgingScenario::IDENTITY)?;
            cccv_rollout(r, &mut env, seed)?
        }
    };
    let summary = write_episode(out, "eval", &ev)?;
    println!("{summary}");
    Ok(summary)
}

pub fn cccv_rollout(r: &Resolved, env: &mut BatteryEnv, seed: u64) -> Result<Evaluation> {
    let cfg = r.config.cccv;
    let i_max = r.config.env.i_max;
    Ok(rollout(env, seed, |_, e| {
        let p = e.trajectory().last().expect("reset records a sample").point;
        let m = Measurement {
            v_terminal: p.voltage.v_terminal,
            t_cell_c: p.t_cell_k - KELVIN_OFFSET,
            soc: p.soc_anode,
        };
        Ok(cccv_controller(m, &cfg, i_max))
    })?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgeReport {
    pub fresh: EpisodeSummary,
    pub frozen: EpisodeSummary,
    pub adapted: Vec<EpisodeSummary>,
    pub status: Status,
}

/// Phase 1 evaluates the frozen checkpoint under the scenario; phase 2
/// continues training it there, once per seed.
pub fn cmd_age(r: &Resolved, checkpoint: &Path, out: &Path) -> Result<AgeReport> {
    let started = Instant::now();
    create_dir(out)?;
    let scenario = r.config.scenario;
    if scenario.is_identity() {
        eprintln!("note: identity aging scenario; phase 1 repeats a plain evaluation");
    }
    let ck = load_checkpoint(checkpoint)?;
    let mode = checkpoint_mode(&ck.agent, r)?;
    let eval_seed = r.config.seeds[0];

    let mut fresh_env = make_env(r, mode, AgingScenario::IDENTITY)?;
    let fresh = write_episode(out, "fresh", &evaluate(&ck.agent, &mut fresh_env, eval_seed)?)?;
    let mut aged_env = make_env(r, mode, scenario)?;
    let frozen = write_episode(out, "phase1", &evaluate(&ck.agent, &mut aged_env, eval_seed)?)?;
    println!("fresh cell: {fresh}");
    println!("aged cell, frozen policy: {frozen}");

    let mut manifest = Manifest::new("age", r);
    let outcomes = per_seed(&r.config.seeds, |seed| {
        let mut agent = ck.agent.clone();
        agent.reseed(seed);
        Ok(train_from(agent, &aged_env, &r.config.train_for(seed))?)
    })?;
    let mut adapted = Vec::new();
    for (seed, outcome) in r.config.seeds.iter().zip(&outcomes) {
        manifest.runs.push(persist_run(out, mode, *seed, outcome)?);
        let mut env = aged_env.clone();
        let ev = evaluate(&outcome.agent, &mut env, eval_seed)?;
        let summary = write_episode(out, &format!("phase2_seed{seed}"), &ev)?;
        println!("aged cell, adapted seed {seed}: {summary}");
        adapted.push(summary);
    }
    let status = finish(&mut manifest, out, started)?;
    Ok(AgeReport {
        fresh,
        frozen,
        adapted,
        status,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub points: usize,
    pub final_soc: f64,
    /// Largest gap between simulated bulk SOC and coulomb counting.
    pub max_soc_deviation: f64,
}

pub fn cmd_sim(r: &Resolved, profile_path: &Path, out: &Path) -> Result<SimReport> {
    let text = fs::read_to_string(profile_path).with_context(|| format!("reading profile {}", profile_path.display()))?;
    let profile = CurrentProfile::from_csv_str(&text, &profile_path.display().to_string())?;
    create_dir(out)?;
    let ctx = SimulatorContext::new(&r.params, &r.config.discretization)?;
    let initial = ctx.equilibrium_state(r.config.env.soc_init, r.config.env.t_init + KELVIN_OFFSET)?;
    let (points, _) = simulate_profile(&ctx, &initial, &profile)?;
    write_trajectory_csv(create(&out.join("trajectory.csv"))?, &points)?;
    let oracle = coulomb_counting_oracle(&profile, ctx.capacity_ah(), r.config.env.soc_init);
    let max_soc_deviation = points
        .iter()
        .zip(&oracle)
        .map(|(p, o)| (p.soc_anode - o).abs())
        .fold(0.0, f64::max);
    let report = SimReport {
        points: points.len(),
        final_soc: points.last().map_or(r.config.env.soc_init, |p| p.soc_anode),
        max_soc_deviation,
    };
    write_json(&out.join("sim_summary.json"), &report)?;
    println!(
        "{} samples, final SOC {:.6}, max deviation from coulomb counting {:.3e}",
        report.points, report.final_soc, report.max_soc_deviation
    );
    Ok(report)
}

/// Writes `{train,eval}_{metric}.csv` with one group per observation mode.
pub fn cmd_export(run: &Path, out: &Path) -> Result<Vec<PathBuf>> {
    let manifest = Manifest::load(run)?;
    if manifest.runs.is_empty() {
        bail!("{} lists no runs", run.join(MANIFEST_FILE).display());
    }
    let mut modes: Vec<ObservationMode> = Vec::new();
    for e in &manifest.runs {
        if !modes.contains(&e.mode) {
            modes.push(e.mode);
        }
    }
    let mut logs: Vec<(ObservationMode, Vec<RunLog>)> = Vec::new();
    for mode in modes {
        let mut v = Vec::new();
        for e in manifest.runs.iter().filter(|e| e.mode == mode) {
            let path = run.join(&e.runlog);
            let file = File::open(&path).with_context(|| format!("opening {}", path.display()))?;
            v.push(RunLog::read_csv(file, &path.display().to_string())?);
        }
        logs.push((mode, v));
    }
    create_dir(out)?;
    let mut written = Vec::new();
    for (kind, evaluated) in [("train", false), ("eval", true)] {
        for metric in Metric::ALL {
            let names: Vec<String> = logs.iter().map(|(m, _)| m.to_string()).collect();
            let mut groups = Vec::new();
            for ((_, l), name) in logs.iter().zip(&names) {
                let rows = aggregate(l, evaluated, metric).with_context(|| format!("aggregating {name} runs"))?;
                groups.push((name.as_str(), rows));
            }
            let path = out.join(format!("{kind}_{}.csv", metric.name()));
            write_panel_csv(create(&path)?, &groups)?;
            written.push(path);
        }
    }
    Ok(written)
}
