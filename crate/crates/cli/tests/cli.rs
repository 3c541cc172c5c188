use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use rlcharge::params::CellParameters;
use rlcharge_cli::commands::Manifest;
use rlcharge_cli::config::PARAMS_PATH_VAR;

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rlcharge"))
        .current_dir(dir)
        .env_remove(PARAMS_PATH_VAR)
        .args(args)
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn quick_config(dir: &Path) -> String {
    let path = dir.join("quick.toml");
    fs::write(&path, "[train]\nepisodes = 6\nbatch_size = 16\nwarmup = 50\neval_every = 3\nactor_hidden = [6, 6]\ncritic_hidden = [8, 8]\n").unwrap();
    path.display().to_string()
}

#[test]
fn help_and_version_exit_zero() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(code(&run(d.path(), &["--help"])), 0);
    assert_eq!(code(&run(d.path(), &["--version"])), 0);
    assert_eq!(code(&run(d.path(), &["train", "--help"])), 0);
}

#[test]
fn usage_and_config_errors_exit_one() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(code(&run(d.path(), &[])), 1);
    assert_eq!(code(&run(d.path(), &["train", "--bogus"])), 1);
    assert_eq!(code(&run(d.path(), &["train", "--obs", "partial"])), 1);
    assert_eq!(code(&run(d.path(), &["train", "--seeds", "0"])), 1);
    fs::write(d.path().join("bad.toml"), "[env]\nsoc_init = 0.9\n").unwrap();
    assert_eq!(code(&run(d.path(), &["train", "--config", "bad.toml"])), 1);
    fs::write(d.path().join("typo.toml"), "[trian]\nepisodes = 1\n").unwrap();
    assert_eq!(code(&run(d.path(), &["train", "--config", "typo.toml"])), 1);
}

#[test]
fn missing_files_exit_three() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(code(&run(d.path(), &["train", "--config", "absent.toml"])), 3);
    assert_eq!(code(&run(d.path(), &["eval", "--checkpoint", "absent.json"])), 3);
    assert_eq!(code(&run(d.path(), &["sim", "absent.csv"])), 3);
    assert_eq!(code(&run(d.path(), &["export", "absent"])), 3);
    fs::write(d.path().join("p.toml"), "params = \"nowhere.toml\"\n").unwrap();
    assert_eq!(code(&run(d.path(), &["train", "--config", "p.toml"])), 3);
}

#[test]
fn zero_episodes_give_empty_logs() {
    let d = tempfile::tempdir().unwrap();
    let o = run(d.path(), &["train", "--episodes", "0", "--seeds", "2", "--out", "run"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for seed in 0..2 {
        let log = fs::read_to_string(d.path().join(format!("run/simplified/runlog_seed{seed}.csv"))).unwrap();
        assert_eq!(log.lines().count(), 1);
        assert!(d.path().join(format!("run/simplified/checkpoint_seed{seed}.json")).is_file());
    }
    let m = Manifest::load(&d.path().join("run")).unwrap();
    assert_eq!(m.seeds, vec![0, 1]);
    assert_eq!(m.runs.len(), 2);
    assert_eq!(m.config_sha256.len(), 64);
}

#[test]
fn train_eval_export_pipeline_is_reproducible() {
    let d = tempfile::tempdir().unwrap();
    let cfg = quick_config(d.path());
    for out in ["a", "b"] {
        let o = run(d.path(), &["train", "--config", &cfg, "--obs", "both", "--seeds", "2", "--out", out]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    for rel in ["simplified/runlog_seed1.csv", "full/runlog_seed0.csv", "full/checkpoint_seed1.json"] {
        assert_eq!(fs::read(d.path().join("a").join(rel)).unwrap(), fs::read(d.path().join("b").join(rel)).unwrap());
    }
    let (ma, mb) = (Manifest::load(&d.path().join("a")).unwrap(), Manifest::load(&d.path().join("b")).unwrap());
    assert_eq!(ma.config_sha256, mb.config_sha256);

    let ck = "a/full/checkpoint_seed0.json";
    for out in ["e1", "e2"] {
        let o = run(d.path(), &["eval", "--config", &cfg, "--obs", "full", "--checkpoint", ck, "--out", out]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    let t1 = fs::read_to_string(d.path().join("e1/eval_trajectory.csv")).unwrap();
    assert_eq!(t1, fs::read_to_string(d.path().join("e2/eval_trajectory.csv")).unwrap());
    let header = t1.lines().next().unwrap();
    for col in ["current", "v_terminal", "t_cell", "soc"] {
        assert!(header.contains(col), "{header}");
    }
    let o = run(d.path(), &["eval", "--config", &cfg, "--checkpoint", ck, "--out", "e3"]);
    assert_eq!(code(&o), 1);

    assert_eq!(code(&run(d.path(), &["export", "a"])), 0);
    let first = fs::read(d.path().join("a/export/eval_v_score.csv")).unwrap();
    assert_eq!(code(&run(d.path(), &["export", "a"])), 0);
    assert_eq!(first, fs::read(d.path().join("a/export/eval_v_score.csv")).unwrap());
    let panel = String::from_utf8(first).unwrap();
    assert!(panel.lines().any(|l| l.starts_with("simplified,")));
    assert!(panel.lines().any(|l| l.starts_with("full,")));
    assert_eq!(fs::read_dir(d.path().join("a/export")).unwrap().count(), 8);
}

#[test]
fn identity_aging_repeats_eval() {
    let d = tempfile::tempdir().unwrap();
    let cfg = quick_config(d.path());
    assert_eq!(code(&run(d.path(), &["train", "--config", &cfg, "--out", "run"])), 0);
    let ck = "run/simplified/checkpoint_seed0.json";
    assert_eq!(code(&run(d.path(), &["eval", "--config", &cfg, "--checkpoint", ck, "--out", "ev"])), 0);
    let o = run(
        d.path(),
        &["age", "--config", &cfg, "--checkpoint", ck, "--scenario", "identity", "--episodes", "2", "--out", "age"],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(
        fs::read(d.path().join("ev/eval_trajectory.csv")).unwrap(),
        fs::read(d.path().join("age/phase1_trajectory.csv")).unwrap()
    );
    assert!(d.path().join("age/simplified/runlog_seed0.csv").is_file());
    assert_eq!(code(&run(d.path(), &["export", "age"])), 0);
}

#[test]
fn cccv_baseline_eval() {
    let d = tempfile::tempdir().unwrap();
    let o = run(d.path(), &["eval", "--cccv", "--out", "cc"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let s: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.path().join("cc/eval_summary.json")).unwrap()).unwrap();
    assert_eq!(s["termination"], "charged");
    assert!(s["v_score"].as_f64().unwrap() <= 0.0);
}

#[test]
fn sim_runs_profiles_and_uses_search_path() {
    let d = tempfile::tempdir().unwrap();
    fs::write(d.path().join("rest.csv"), "time_s,current_A\n0,0\n1800,0\n3600,0\n").unwrap();
    let o = run(d.path(), &["sim", "rest.csv", "--out", "rest"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let s: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.path().join("rest/sim_summary.json")).unwrap()).unwrap();
    assert!((s["final_soc"].as_f64().unwrap() - 0.3).abs() < 1e-12);

    fs::write(d.path().join("mixed.csv"), "0,-6\n300,2.5\n420,-9\n900,0\n960,0\n").unwrap();
    let o = run(d.path(), &["sim", "mixed.csv", "--out", "mixed"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let s: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.path().join("mixed/sim_summary.json")).unwrap()).unwrap();
    assert!(s["max_soc_deviation"].as_f64().unwrap() < 1e-6);

    fs::write(d.path().join("bad.csv"), "0,1\n0,2\n").unwrap();
    assert_eq!(code(&run(d.path(), &["sim", "bad.csv"])), 1);

    let lib = tempfile::tempdir().unwrap();
    let data = Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/data");
    for f in ["graphite_ocp.csv", "nmc_ocp.csv"] {
        fs::copy(data.join(f), lib.path().join(f)).unwrap();
    }
    fs::write(lib.path().join("cell.toml"), CellParameters::default_graphite_nmc().to_toml_string()).unwrap();
    fs::write(d.path().join("cfg.toml"), "params = \"cell.toml\"\n").unwrap();
    assert_eq!(code(&run(d.path(), &["sim", "rest.csv", "--config", "cfg.toml"])), 3);
    let o = Command::new(env!("CARGO_BIN_EXE_rlcharge"))
        .current_dir(d.path())
        .env(PARAMS_PATH_VAR, lib.path())
        .args(["sim", "rest.csv", "--config", "cfg.toml", "--out", "found"])
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.path().join("found/sim_summary.json")).unwrap()).unwrap();
    assert!((m["final_soc"].as_f64().unwrap() - 0.3).abs() < 1e-12);
}
