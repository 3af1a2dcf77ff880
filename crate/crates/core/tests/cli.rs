use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn pgg(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pgg"))
        .args(args)
        .current_dir(dir)
        .env_remove("RUST_LOG")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const SMALL: &str = "\
env: str = cartpole
total_timesteps: int = 1024 # two iterations
checkpoint_interval: int = 512
gamma_train: float = 1.1
";

#[test]
fn missing_env_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.txt"), "seed: int = 2\n").unwrap();
    let o = pgg(&["train", "--config", "c.txt", "--out", "run"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("env: required"), "{}", stderr(&o));
}

#[test]
fn bad_fields_are_named() {
    let dir = tempfile::tempdir().unwrap();
    for (text, field) in [
        ("env: str = cartpole\nlearning_rat: float = 0.1\n", "learning_rat: unknown key"),
        ("env: str = cartpole\nseed: float = 1.5\n", "seed: declared as float"),
        ("env: str = cartpole\np_drop: float = 1.5\n", "p_drop: must lie in [0, 1]"),
        ("env: str = cartpole\nnum_steps: int = abc\n", "num_steps"),
        ("env: str = walker\n", "env: unknown environment"),
    ] {
        fs::write(dir.path().join("c.txt"), text).unwrap();
        let o = pgg(&["train", "--config", "c.txt", "--out", "run"], dir.path());
        assert_eq!(o.status.code(), Some(2), "{text}");
        assert!(stderr(&o).contains(field), "{text}: {}", stderr(&o));
    }
}

#[test]
fn override_precedence_file_env_cli() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.txt"), format!("{SMALL}seed: int = 3\n")).unwrap();
    let run = |extra: &[&str], env: Option<(&str, &str)>| {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_pgg"));
        cmd.args(["train", "--config", "c.txt", "--out", "run"]).args(extra).current_dir(dir.path());
        if let Some((k, v)) = env {
            cmd.env(k, v);
        }
        let o = cmd.output().unwrap();
        assert!(o.status.success(), "{}", stderr(&o));
        let text = fs::read_to_string(dir.path().join("run/config.txt")).unwrap();
        text.lines().find(|l| l.starts_with("seed:")).unwrap().to_string()
    };
    assert_eq!(run(&[], None), "seed: int = 3");
    assert_eq!(run(&[], Some(("PGG_SEED", "4"))), "seed: int = 4");
    assert_eq!(run(&["--seed", "5"], Some(("PGG_SEED", "4"))), "seed: int = 5");

    let o = Command::new(env!("CARGO_BIN_EXE_pgg"))
        .args(["train", "--config", "c.txt", "--out", "run"])
        .env("PGG_SEEED", "1")
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert!(stderr(&o).contains("PGG_SEEED: unknown key"), "{}", stderr(&o));
}

#[test]
fn train_eval_plot_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("c.txt"), SMALL).unwrap();
    let o = pgg(&["train", "--config", "c.txt", "--seeds", "1,2", "--out", "runs"], d);
    assert!(o.status.success(), "{}", stderr(&o));
    for s in [1, 2] {
        let metrics = fs::read_to_string(d.join(format!("runs/seed_{s}/metrics.csv"))).unwrap();
        assert!(metrics.starts_with("step,return,policy_loss,value_loss,entropy,approx_kl,clipfrac\n"));
        assert_eq!(metrics.lines().count(), 3);
    }

    // same config and seed, same metrics
    let o = pgg(&["train", "--config", "c.txt", "--seed", "1", "--out", "again"], d);
    assert!(o.status.success());
    assert_eq!(
        fs::read(d.join("again/metrics.csv")).unwrap(),
        fs::read(d.join("runs/seed_1/metrics.csv")).unwrap()
    );

    let o = pgg(&["eval", "runs", "--checkpoints", "999", "--episodes", "2", "--out", "ev"], d);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("available: 512, 1024"), "{}", stderr(&o));

    let ck = d.join("runs/seed_1/checkpoints/step_000000512.json");
    let before = fs::read(&ck).unwrap();
    let o = pgg(
        &["eval", "runs", "--gammas", "1,2", "--checkpoints", "512,1024", "--episodes", "3", "--out", "ev"],
        d,
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read(&ck).unwrap(), before);
    let csv = fs::read_to_string(d.join("ev/report.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "env,step,gamma,mean,std,ci95,n_episodes,n_seeds");
    assert_eq!(lines.len(), 5);
    assert!(lines[1..].iter().all(|l| l.ends_with(",3,2")));

    let o = pgg(&["plot", "ev/report.json", "ev/report.json", "--out", "figs"], d);
    assert!(o.status.success(), "{}", stderr(&o));
    let o2 = pgg(&["plot", "ev/report.json", "ev/report.json", "--out", "figs2"], d);
    assert!(o2.status.success());
    let svg = fs::read(d.join("figs/cartpole.svg")).unwrap();
    assert_eq!(svg, fs::read(d.join("figs2/cartpole.svg")).unwrap());
    assert!(String::from_utf8(svg).unwrap().starts_with("<svg"));
    assert!(d.join("figs/cartpole_table.csv").is_file());

    let o = pgg(&["plot", "--out", "figs3"], d);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("no reports"));
}

#[test]
fn verify_catches_injected_faults() {
    let dir = tempfile::tempdir().unwrap();
    let o = pgg(&["verify"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert!(stdout(&o).contains("6 of 6 suites passed"));

    let o = pgg(&["verify", "--inject", "drop-uncond"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    let out = stdout(&o);
    assert!(out.contains("PASS gamma-one-reduction"), "{out}");
    assert!(out.contains("FAIL gradient-interpolation"), "{out}");

    let o = pgg(&["verify", "--inject", "biased-advantage"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("FAIL z-cancellation"));

    let o = pgg(&["verify", "--inject", "nonsense"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}
