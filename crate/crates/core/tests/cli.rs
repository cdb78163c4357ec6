use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = "aps = 2\nantennas = [3, 3]\nusers = 2\nsubcarriers = 4\nrng_seed = 3\n";

fn cfmimo(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cfmimo")).args(args).output().unwrap()
}

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("system.toml");
    std::fs::write(&path, text).unwrap();
    path.to_string_lossy().into_owned()
}

fn sweep(dir: &Path, config: &str, workers: &str) -> Vec<u8> {
    let out = dir.join(format!("sweep{workers}.csv"));
    let status = cfmimo(&[
        "subcarrier-sweep",
        "--config",
        config,
        "--subcarriers",
        "1,4",
        "--realizations",
        "3",
        "--workers",
        workers,
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
    std::fs::read(out).unwrap()
}

#[test]
fn sweep_output_does_not_depend_on_worker_count() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), SMALL);
    let one = sweep(dir.path(), &config, "1");
    let two = sweep(dir.path(), &config, "2");
    assert_eq!(one, two);
    let text = String::from_utf8(one).unwrap();
    assert!(text.starts_with("aps,users,subcarriers,method,metric,mean,stderr,count\n"));
    assert!(text.contains(",pas_ratio,"));

    let records = std::fs::read_to_string(dir.path().join("sweep1.records.csv")).unwrap();
    assert_eq!(records.lines().filter(|l| l.contains(",ok,")).count(), 2 * 3 * 3);
    let meta = std::fs::read_to_string(dir.path().join("sweep1.meta.txt")).unwrap();
    assert!(meta.contains("experiment = subcarrier-sweep"));
    assert!(meta.contains("[config]"));
}

#[test]
fn antenna_profile_writes_one_row_per_antenna() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), SMALL);
    let out = dir.path().join("profile.csv");
    let status = cfmimo(&["antenna-profile", "--config", &config, "--out", out.to_str().unwrap()]);
    assert!(status.status.success());
    let text = std::fs::read_to_string(&out).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("antenna,ap,optimal,conventional,rmt"));
    assert_eq!(lines.count(), 6);
    assert!(dir.path().join("profile.summary.csv").exists());
}

#[test]
fn load_sweep_reports_infeasible_points() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), SMALL);
    let out = dir.path().join("load.csv");
    let status = cfmimo(&[
        "load-sweep",
        "--config",
        &config,
        "--users",
        "1,6",
        "--aps",
        "2",
        "--realizations",
        "2",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(status.status.success());
    assert!(String::from_utf8_lossy(&status.stderr).contains("skipped K=6 L=2"));
    let text = std::fs::read_to_string(&out).unwrap();
    assert!(text.lines().skip(1).all(|l| l.starts_with("2,1,")));
}

#[test]
fn invalid_config_exits_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "aps = 2\nantennas = [1]\n");
    let status = cfmimo(&["subcarrier-sweep", "--config", &config, "--realizations", "1"]);
    assert_eq!(status.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&status.stderr).contains("antennas"));
}

#[test]
fn validate_passes_on_a_short_run() {
    let status = cfmimo(&["validate", "--realizations", "4"]);
    assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stdout));
    let text = String::from_utf8(status.stdout).unwrap();
    assert_eq!(text.lines().filter(|l| l.starts_with("PASS")).count(), 5);
}
