use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const QUBIT: &str = r#"
[model]
block_dims = [1, 1]
[[model.diffusive]]
l = [[1.0, 0.0], [-1.0, 0.0]]
gamma = 1.0
eta = 0.5
[[model.jump]]
c = [[1.0, 0.0], [2.0, 0.0]]
iota = 1.0
theta = 0.3

[grid]
target = "sqrt_eta_gamma"
channel = 1
lambda_lo = 0.5
lambda_hi = 2.0
abar = 0.5
bbar = 1.5

[campaign]
q0 = [0.5, 0.5]
max_rounds = 1
samples = 50
"#;

fn qnd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qnd"))
        .args(args)
        .env_remove("QND_OUTPUT_DIR")
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("m.toml");
    fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

fn manifest_files(dir: &Path) -> serde_like::Files {
    serde_like::files(&fs::read_to_string(dir.join("manifest.json")).unwrap())
}

/// Minimal extraction of `"path"`/`"sha256"` pairs without a JSON dependency.
mod serde_like {
    pub type Files = Vec<(String, String)>;

    pub fn files(json: &str) -> Files {
        let mut out = Vec::new();
        let mut rest = json;
        while let Some(i) = rest.find("\"path\": \"") {
            rest = &rest[i + 9..];
            let end = rest.find('"').unwrap();
            let path = rest[..end].to_string();
            let j = rest.find("\"sha256\": \"").unwrap();
            rest = &rest[j + 11..];
            let end = rest.find('"').unwrap();
            out.push((path, rest[..end].to_string()));
        }
        out
    }
}

#[test]
fn simulate_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), QUBIT);
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for out in [&a, &b] {
        let o = qnd(&[
            "simulate",
            "--model",
            &cfg,
            "--traj",
            "3",
            "--T",
            "0.5",
            "--dt",
            "1e-3",
            "--seed",
            "7",
            "--out",
            out.to_str().unwrap(),
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let fa = manifest_files(&a);
    assert_eq!(fa.len(), 6);
    assert_eq!(fa, manifest_files(&b));
    let rec = fs::read_to_string(a.join("records/record_00000.csv")).unwrap();
    assert!(rec.starts_with("# dt=1.0000000000000000e-3 seed=7 stream=0 model="));
    assert_eq!(rec.lines().count(), 502);
}

#[test]
fn simulate_rejects_coarse_step() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), QUBIT);
    let o = qnd(&[
        "simulate",
        "--model",
        &cfg,
        "--T",
        "1",
        "--dt",
        "0.1",
        "--out",
        tmp.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&o.stderr).contains("dt"));
}

#[test]
fn output_dir_from_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), QUBIT);
    let env_out = tmp.path().join("env_out");
    let o = Command::new(env!("CARGO_BIN_EXE_qnd"))
        .args(["simulate", "--model", &cfg, "--T", "0.01", "--dt", "1e-3"])
        .env("QND_OUTPUT_DIR", &env_out)
        .output()
        .unwrap();
    assert!(o.status.success());
    assert!(env_out.join("manifest.json").exists());
}

#[test]
fn replay_matches_inline_estimation() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), QUBIT);
    let sim = tmp.path().join("sim");
    let o = qnd(&[
        "simulate",
        "--model",
        &cfg,
        "--traj",
        "4",
        "--T",
        "3",
        "--dt",
        "1e-3",
        "--seed",
        "11",
        "--simulator",
        "reduced",
        "--out",
        sim.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let inline = tmp.path().join("inline");
    let replay = tmp.path().join("replay");
    let a = qnd(&[
        "estimate",
        "--config",
        &cfg,
        "--traj",
        "4",
        "--T",
        "3",
        "--dt",
        "1e-3",
        "--seed",
        "11",
        "--simulator",
        "reduced",
        "--out",
        inline.to_str().unwrap(),
    ]);
    let b = qnd(&[
        "estimate",
        "--config",
        &cfg,
        "--records",
        sim.join("records").to_str().unwrap(),
        "--out",
        replay.to_str().unwrap(),
    ]);
    assert_eq!(a.status.code(), b.status.code());
    let ra = fs::read_to_string(inline.join("results.jsonl")).unwrap();
    let rb = fs::read_to_string(replay.join("results.jsonl")).unwrap();
    assert_eq!(ra.lines().count(), 4);
    assert_eq!(ra, rb);
    assert!(fs::read_to_string(inline.join("summary.csv"))
        .unwrap()
        .starts_with("round,candidate,lambda_hat,pi_mean"));
}

#[test]
fn replay_with_foreign_model_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), QUBIT);
    let sim = tmp.path().join("sim");
    assert!(qnd(&[
        "simulate",
        "--model",
        &cfg,
        "--T",
        "0.1",
        "--out",
        sim.to_str().unwrap()
    ])
    .status
    .success());
    let other = tmp.path().join("other");
    fs::create_dir_all(&other).unwrap();
    let cfg2 = write_config(&other, &QUBIT.replace("theta = 0.3", "theta = 0.4"));
    let o = qnd(&[
        "estimate",
        "--config",
        &cfg2,
        "--records",
        sim.join("records").to_str().unwrap(),
        "--out",
        other.join("o").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&o.stderr).contains("hash mismatch"));
}

#[test]
fn mu_request_is_refused() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        &QUBIT.replace("target = \"sqrt_eta_gamma\"", "target = \"mu\""),
    );
    let o = qnd(&[
        "estimate",
        "--config",
        &cfg,
        "--out",
        tmp.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(4));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("non-identifiable parameter mu"), "{err}");
}

#[test]
fn rates_report_separation_constant() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), QUBIT);
    let o = qnd(&[
        "rates",
        "--config",
        &cfg,
        "--out",
        tmp.path().join("o").to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("E_lc = 2.87136"), "{text}");
    assert!(text.contains("f_bar < 0"));
    assert!(tmp.path().join("o/rates.json").exists());
}

#[test]
fn infeasible_grid_names_binding_constraint() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        &QUBIT
            .replace("abar = 0.5", "abar = 0.995")
            .replace("bbar = 1.5", "bbar = 1.001"),
    );
    let o = qnd(&[
        "grid",
        "--config",
        &cfg,
        "--out",
        tmp.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("infeasible design"));
}

#[test]
fn grid_prints_margins() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), QUBIT);
    let o = qnd(&[
        "grid",
        "--config",
        &cfg,
        "--out",
        tmp.path().join("o").to_str().unwrap(),
    ]);
    assert!(o.status.success());
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("a = 0.75, b = 1.5"), "{text}");
    assert!(text.contains("0 violations"));
}
