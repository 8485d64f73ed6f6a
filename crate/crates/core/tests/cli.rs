use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_dkg-lab"))
}

fn run(args: &[&str], out: &Path) -> Output {
    bin()
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .expect("binary runs")
}

fn read_dir(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (
                e.file_name().to_string_lossy().into_owned(),
                fs::read(e.path()).unwrap(),
            )
        })
        .collect()
}

const SMALL_SWEEP: &[&str] = &[
    "sweep",
    "--sweep",
    "0.1,0.08,0.06",
    "--n",
    "16",
    "--stride",
    "50",
    "--svg",
];

#[test]
fn sweep_output_does_not_depend_on_worker_count() {
    let tmp = tempfile::tempdir().unwrap();
    let mut dirs = Vec::new();
    for workers in ["1", "3"] {
        let dir = tmp.path().join(format!("w{workers}"));
        let out = bin()
            .args(SMALL_SWEEP)
            .arg("--out")
            .arg(&dir)
            .env("DKG_LAB_WORKERS", workers)
            .output()
            .unwrap();
        assert!(
            out.status.success(),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
        dirs.push(read_dir(&dir));
    }
    assert_eq!(dirs[0], dirs[1]);
    for name in [
        "summary.json",
        "config.json",
        "scaling.svg",
        "justify_00.csv",
        "justify_02.csv",
    ] {
        assert!(dirs[0].contains_key(name), "{name} missing");
    }
}

#[test]
fn reruns_are_byte_identical_and_carry_the_hash() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    let args = ["simulate-dkg", "--n", "8", "--t-end", "2", "--stride", "50"];
    let first = run(&args, &a);
    assert!(first.status.success());
    assert!(run(&args, &b).status.success());
    let (fa, fb) = (read_dir(&a), read_dir(&b));
    assert_eq!(fa, fb);

    let printed: serde_json::Value = serde_json::from_slice(&first.stdout).unwrap();
    let hash = printed["config_hash"].as_str().unwrap().to_string();
    assert_eq!(hash.len(), 64);
    for (name, body) in &fa {
        if name == "config.json" {
            continue;
        }
        let text = String::from_utf8_lossy(body);
        assert!(text.contains(&hash), "{name} lacks the config hash");
    }
}

#[test]
fn prints_effective_config_with_defaults() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(&["soliton", "--n", "6"], tmp.path());
    assert!(out.status.success());
    let cfg: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(cfg["epsilon"], 0.05);
    assert_eq!(cfg["rho"][0], 0.05);
    assert_eq!(cfg["dt"], 0.001);
    assert_eq!(cfg["command"], "soliton");
    let csv = fs::read_to_string(tmp.path().join("profile.csv")).unwrap();
    assert!(csv.lines().nth(1) == Some("j,A"));
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let ok = run(
        &["normalform", "--epsilon", "0.1", "--n", "32"],
        &tmp.path().join("nf"),
    );
    assert_eq!(ok.status.code(), Some(0));
    assert!(tmp.path().join("nf/coefficients.json").exists());
    assert!(tmp.path().join("nf/decay.csv").exists());

    let violated = run(
        &["thresholds", "--epsilon", "0.3", "--n", "16"],
        &tmp.path().join("th"),
    );
    assert_eq!(violated.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&violated.stderr).contains("f(eps)"));

    let bad = run(&["justify", "--epsilon", "0.6"], &tmp.path().join("bad"));
    assert_eq!(bad.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("(0, 1/2)"));
    assert!(!tmp.path().join("bad").exists());

    let regime = run(
        &["justify", "--rho", "0.000125"],
        &tmp.path().join("regime"),
    );
    assert_eq!(regime.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&regime.stderr).contains("eps^2 << rho"));

    let unknown_flag = run(&["justify", "--bogus", "1"], &tmp.path().join("flag"));
    assert_eq!(unknown_flag.status.code(), Some(1));
}

#[test]
fn config_file_is_merged_under_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("exp.cfg");
    fs::write(&cfg, "# small normal form\nepsilon = 0.2\nn = 12\n").unwrap();
    let out = bin()
        .args(["normalform", "--config"])
        .arg(&cfg)
        .args(["--n", "10", "--out"])
        .arg(tmp.path().join("o"))
        .output()
        .unwrap();
    assert!(out.status.success());
    let printed: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(printed["epsilon"], 0.2);
    assert_eq!(printed["n"], 10);

    fs::write(&cfg, "epsilon = 0.2\nspeed = 3\n").unwrap();
    let out = bin()
        .args(["normalform", "--config"])
        .arg(&cfg)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown key"));
}

#[test]
fn version_reports_build_metadata() {
    let out = bin().arg("--version").output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains(env!("CARGO_PKG_VERSION")) && text.contains("build"));
}

#[test]
fn justify_sweep_reports_fit() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(
        &[
            "justify",
            "--sweep",
            "0.1,0.05,0.025",
            "--rho-rule",
            "eps",
            "--n",
            "24",
            "--stride",
            "100",
        ],
        tmp.path(),
    );
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("summary.json")).unwrap())
            .unwrap();
    let slope = summary["fit"]["slope"].as_f64().unwrap();
    assert!((0.8..=1.2).contains(&slope), "{slope}");
    assert_eq!(summary["points"].as_array().unwrap().len(), 3);
}
