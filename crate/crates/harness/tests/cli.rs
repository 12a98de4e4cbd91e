use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn thermolab(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_thermolab")).args(args).current_dir(dir).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn json(path: PathBuf) -> Value {
    serde_json::from_str(&fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))).unwrap()
}

fn est(v: &Value) -> (f64, f64) {
    (v["value"].as_f64().unwrap(), v["stderr"].as_f64().unwrap())
}

/// Run `cmd` on a config and return the exit code and output directory.
fn run(dir: &Path, cmd: &str, config: &str, extra: &[&str]) -> (Output, PathBuf) {
    let cfg = write(dir, &format!("{cmd}-{}.toml", extra.len()), config);
    let out = dir.join(format!("out-{cmd}-{}", fs::read_dir(dir).unwrap().count()));
    let mut args = vec![cmd, "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    (thermolab(&args, dir), out)
}

const SMALL: &str = "[estimation]\nbatch = 1024\nnll_batch = 512\n";

#[test]
fn exact_gaussian_bound_is_tight_and_tagged() {
    let dir = TempDir::new().unwrap();
    let (o, out) = run(dir.path(), "bound", SMALL, &[]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let j = json(out.join("bound.json"));
    let (gap, se) = est(&j["report"]["gap"]);
    assert!(gap.abs() <= 4.0 * se, "gap {gap} ± {se}");
    let hash = j["meta"]["config_hash"].as_str().unwrap().to_string();
    assert_eq!(hash.len(), 64);
    assert_eq!(j["report"]["config_hash"].as_str(), Some(hash.as_str()));
    assert_eq!(j["meta"]["seeds"]["estimation"].as_u64(), Some(0));
    let csv = fs::read_to_string(out.join("bound.csv")).unwrap();
    assert!(csv.starts_with(&format!("# config_hash={hash}")));
    assert_eq!(csv.lines().count(), 3);
    let copy = fs::read_to_string(out.join("config.toml")).unwrap();
    assert!(copy.contains(&hash) && copy.contains("nll_batch = 512") && copy.contains("grid_points = 64"));
}

#[test]
fn rerun_reproduces_identical_artifacts() {
    let dir = TempDir::new().unwrap();
    let (a, out_a) = run(dir.path(), "bound", SMALL, &[]);
    let (b, out_b) = run(dir.path(), "bound", SMALL, &[]);
    assert_eq!((code(&a), code(&b)), (0, 0));
    for f in ["bound.json", "bound.csv"] {
        assert_eq!(fs::read(out_a.join(f)).unwrap(), fs::read(out_b.join(f)).unwrap(), "{f}");
    }
    // the copied config records its own output directory
    let strip = |p: PathBuf| -> Vec<String> {
        fs::read_to_string(p).unwrap().lines().filter(|l| !l.starts_with("dir = ")).map(String::from).collect()
    };
    assert_eq!(strip(out_a.join("config.toml")), strip(out_b.join("config.toml")));
    let (c, out_c) = run(dir.path(), "bound", SMALL, &["--seed", "7"]);
    assert_eq!(code(&c), 0);
    assert_ne!(fs::read(out_a.join("bound.json")).unwrap(), fs::read(out_c.join("bound.json")).unwrap());
    assert_eq!(json(out_c.join("bound.json"))["meta"]["seeds"]["estimation"].as_u64(), Some(7));
}

#[test]
fn perturbed_field_has_positive_gap() {
    let dir = TempDir::new().unwrap();
    let cfg = format!("{SMALL}[field]\nvariant = \"perturbed\"\nperturbation = {{ epsilon = 0.3, seed = 2 }}\n");
    let (o, out) = run(dir.path(), "bound", &cfg, &[]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let (gap, se) = est(&json(out.join("bound.json"))["report"]["gap"]);
    assert!(gap > 4.0 * se, "gap {gap} ± {se}");
}

#[test]
fn corrupted_checkpoint_is_a_config_error_naming_the_file() {
    let dir = TempDir::new().unwrap();
    write(dir.path(), "broken.ckpt", "NOTACHECKPOINT0000000000");
    let (o, _) = run(dir.path(), "bound", "[field]\nvariant = \"checkpoint\"\ncheckpoint = \"broken.ckpt\"\n", &[]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("broken.ckpt"), "{}", stderr(&o));
    let (o, _) = run(dir.path(), "bound", "[field]\nvariant = \"checkpoint\"\ncheckpoint = \"missing.ckpt\"\n", &[]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("missing.ckpt"));
}

#[test]
fn malformed_configs_and_flags_exit_with_two() {
    let dir = TempDir::new().unwrap();
    for bad in ["[process\n", "[process]\nsigma = \"ten\"\n", "[process]\nsigma = 0.5\n", "[typo]\nx = 1\n"] {
        let (o, _) = run(dir.path(), "bound", bad, &[]);
        assert_eq!(code(&o), 2, "{bad:?}: {}", stderr(&o));
    }
    assert_eq!(code(&thermolab(&["bound", "--grid", "many"], dir.path())), 2);
    assert_eq!(code(&thermolab(&["bound", "--format", "png"], dir.path())), 2);
    assert_eq!(code(&thermolab(&["bound", "--config", "absent.toml"], dir.path())), 2);
    assert_eq!(code(&thermolab(&["--help"], dir.path())), 0);
}

#[test]
fn format_flag_limits_artifacts() {
    let dir = TempDir::new().unwrap();
    let (o, out) = run(dir.path(), "entropy", "[estimation]\nbatch = 256\ngrid_points = 8\n", &["--format", "json"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(out.join("entropy.json").exists());
    assert!(!out.join("entropy.csv").exists() && !out.join("entropy.svg").exists());
}

fn csv_rows(path: PathBuf) -> Vec<Vec<String>> {
    let text = fs::read_to_string(path).unwrap();
    text.lines().filter(|l| !l.starts_with('#')).skip(1).map(|l| l.split(',').map(str::to_string).collect()).collect()
}

#[test]
fn exact_controlled_forward_shows_the_two_to_one_ratio() {
    let dir = TempDir::new().unwrap();
    let cfg = "[data]\nkind = \"gaussian-product\"\nmean = [0.0]\nvariance = [1.0]\n[estimation]\nseed = 2\n";
    let (o, out) = run(dir.path(), "entropy", cfg, &[]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let j = json(out.join("entropy.json"));
    assert!(j["run"]["max_ratio_z"].as_f64().unwrap() <= 4.0);
    let text = fs::read_to_string(out.join("entropy.csv")).unwrap();
    let mut lines = text.lines();
    assert!(lines.next().unwrap().starts_with("# config_hash="));
    assert_eq!(lines.next().unwrap(), "t,Si,Si_err,Se,Se_err,S,S_err,picture,plug_in");
    let rows = csv_rows(out.join("entropy.csv"));
    // Divergence-based rows first, then the norm-based rows of the same ensemble.
    assert_eq!(rows.len(), 128);
    assert!(rows[..64].iter().all(|r| r[7] == "controlled-forward" && r[8] == "divergence-based"));
    assert!(rows[64..].iter().all(|r| r[8] == "norm-based"));
    let svg = fs::read_to_string(out.join("entropy.svg")).unwrap();
    assert_eq!(svg.matches("<polyline").count(), 3);
    assert!(svg.contains(j["meta"]["config_hash"].as_str().unwrap()));
}

#[test]
fn zero_field_gives_flat_zero_curves() {
    let dir = TempDir::new().unwrap();
    let (o, out) = run(dir.path(), "entropy", "[field]\nvariant = \"zero\"\n[estimation]\nbatch = 256\ngrid_points = 16\n", &[]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for r in csv_rows(out.join("entropy.csv")) {
        for c in [1, 3, 5] {
            assert_eq!(r[c].parse::<f64>().unwrap(), 0.0, "{r:?}");
        }
    }
}

#[test]
fn trained_network_on_uniform_removes_entropy() {
    let dir = TempDir::new().unwrap();
    let cfg = "[data]\nkind = \"uniform-unit\"\ndim = 2\n[field]\nvariant = \"trained\"\n[field.train]\nmodel = \"feed-forward\"\n[estimation]\nbatch = 1024\ngrid_points = 32\n";
    let (o, out) = run(dir.path(), "entropy", cfg, &[]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let j = json(out.join("entropy.json"));
    let s = &j["run"]["series"];
    let si: Vec<f64> = s["intrinsic"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
    let sys: Vec<f64> = s["system"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
    assert!(si.iter().all(|&v| v > 0.0), "{si:?}");
    assert!(sys.iter().all(|&v| v < 0.0), "{sys:?}");
    assert!(j["run"]["total_system"]["value"].as_f64().unwrap() < 0.0);
}

#[test]
fn training_beats_the_zero_field_and_resumes_exactly() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    let lin = "[field.train]\nmodel = \"linear\"\nsteps = 200\n";
    let (o, straight) = run(d, "train", lin, &[]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let (o, first) = run(d, "train", "[field.train]\nmodel = \"linear\"\nsteps = 80\n", &[]);
    assert_eq!(code(&o), 0);
    let resume = format!("[field]\nresume = \"{}\"\n{lin}", first.join("checkpoint.bin").display());
    let (o, resumed) = run(d, "train", &resume, &[]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(fs::read(straight.join("checkpoint.bin")).unwrap(), fs::read(resumed.join("checkpoint.bin")).unwrap());
    assert_eq!(json(resumed.join("train.json"))["start_step"].as_u64(), Some(80));

    let ck = format!("{SMALL}[field]\nvariant = \"checkpoint\"\ncheckpoint = \"{}\"\n", straight.join("checkpoint.bin").display());
    let (o, trained) = run(d, "bound", &ck, &[]);
    assert!(matches!(code(&o), 0 | 4), "{}", stderr(&o));
    let (o, zero) = run(d, "bound", &format!("{SMALL}[field]\nvariant = \"zero\"\n"), &[]);
    assert!(matches!(code(&o), 0 | 4));
    let (g_trained, _) = est(&json(trained.join("bound.json"))["report"]["gap"]);
    let (g_zero, _) = est(&json(zero.join("bound.json"))["report"]["gap"]);
    assert!(g_trained < g_zero, "{g_trained} vs {g_zero}");
}

#[test]
fn zero_steps_writes_the_initialisation() {
    let dir = TempDir::new().unwrap();
    let (o, out) = run(dir.path(), "train", "[field.train]\nmodel = \"feed-forward\"\nsteps = 0\n", &[]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    use thermo_diffusion::{Checkpoint, ModelKind, Process, TrainConfig};
    let ck = Checkpoint::<f64>::read(&out.join("checkpoint.bin")).unwrap();
    let init = TrainConfig::for_model(ModelKind::FeedForward).initial_model(&Process::ve(10.0, 2).unwrap()).unwrap();
    assert_eq!(ck.model, init);
    assert_eq!(ck.step, 0);
}

#[test]
fn diverging_training_exits_with_three() {
    let dir = TempDir::new().unwrap();
    let (o, _) = run(dir.path(), "train", "[field.train]\nmodel = \"linear\"\nsteps = 50\nlearning_rate = 1e6\n", &[]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(stderr(&o).contains("last finite step"), "{}", stderr(&o));
}

#[test]
fn checkpoint_for_another_process_is_rejected() {
    let dir = TempDir::new().unwrap();
    let (o, out) = run(dir.path(), "train", "[field.train]\nsteps = 1\n", &[]);
    assert_eq!(code(&o), 0);
    let cfg = format!("[process]\nsigma = 20.0\n[field]\nvariant = \"checkpoint\"\ncheckpoint = \"{}\"\n", out.join("checkpoint.bin").display());
    let (o, _) = run(dir.path(), "bound", &cfg, &[]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("checkpoint.bin"), "{}", stderr(&o));
}

#[test]
fn single_cell_sweep_matches_bound() {
    let dir = TempDir::new().unwrap();
    let cfg = format!("{SMALL}[sweep]\nsigmas = [10.0]\nprocesses = [\"ve\"]\nepsilons = [0.0]\nmodels = []\n");
    let (o, b) = run(dir.path(), "bound", &cfg, &[]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let (o, s) = run(dir.path(), "sweep", &cfg, &[]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let bound = json(b.join("bound.json"));
    let sweep = json(s.join("sweep.json"));
    let rows = sweep["sweep"]["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0]["report"], bound["report"]);
    assert_eq!(rows[0]["config_hash"], bound["meta"]["config_hash"]);
}

#[test]
fn perturbation_ladder_sweep_is_valid_and_correlated() {
    let dir = TempDir::new().unwrap();
    let cfg = format!("{SMALL}[sweep]\nsigmas = [10.0, 20.0]\nmodels = []\n");
    let (o, out) = run(dir.path(), "sweep", &cfg, &[]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let sweep = json(out.join("sweep.json"));
    let rows = sweep["sweep"]["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 2 * 2 * 5);
    assert!(rows.iter().all(|r| r["status"] == "ok"));
    assert!(sweep["sweep"]["spearman"].as_f64().unwrap() > 0.0);
    assert!(sweep["violations"].as_array().unwrap().is_empty());
    let svg = fs::read_to_string(out.join("sweep.svg")).unwrap();
    assert_eq!(svg.matches("<circle").count(), 20);
    assert_eq!(csv_rows(out.join("sweep.csv")).len(), 20);
}

#[test]
fn uniform_vp_cells_are_marked_unsupported() {
    let dir = TempDir::new().unwrap();
    let cfg = format!("{SMALL}[data]\nkind = \"uniform-unit\"\ndim = 1\n[sweep]\nsigmas = [10.0]\nepsilons = [0.0]\nmodels = []\n");
    let (o, out) = run(dir.path(), "sweep", &cfg, &[]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let rows = csv_rows(out.join("sweep.csv"));
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0][1], "ok");
    assert_eq!(rows[1][1], "unsupported");
}

#[test]
fn sample_writes_terminal_states() {
    let dir = TempDir::new().unwrap();
    let cfg = "[data]\nkind = \"uniform-unit\"\ndim = 2\n[sampler]\npaths = 200\nsteps = 128\nrecord_every = 128\ntrajectories = true\n";
    let (o, out) = run(dir.path(), "sample", cfg, &[]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let rows = csv_rows(out.join("samples.csv"));
    assert_eq!(rows.len(), 200);
    assert!(rows.iter().all(|r| r.len() == 2));
    let bin = fs::read(out.join("trajectories.bin")).unwrap();
    let ens = thermo_diffusion::TrajectoryEnsemble::<f64>::read_binary(&bin[..]).unwrap();
    assert_eq!((ens.paths, ens.times.len()), (200, 2));
    let s = json(out.join("sample.json"));
    assert_eq!(s["summary"]["paths"].as_u64(), Some(200));
    let (o, more) = run(dir.path(), "sample", cfg, &["--batch", "50", "--seed", "4"]);
    assert_eq!(code(&o), 0);
    assert_eq!(csv_rows(more.join("samples.csv")).len(), 50);
}
