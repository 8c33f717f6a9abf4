use std::path::PathBuf;
use std::process::Command;

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("hympc-cli-{name}-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn hympc(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_hympc"))
        .args(args)
        .output()
        .unwrap()
}

#[test]
fn simulate_writes_a_log_and_exits_zero() {
    let out = scratch("sim");
    let o = hympc(&[
        "--out",
        out.to_str().unwrap(),
        "--controller",
        "standard-mpc",
        "--seed",
        "3",
        "simulate",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("episode.json").exists());
    let csvs = std::fs::read_dir(&out).unwrap().filter(|e| {
        e.as_ref()
            .unwrap()
            .path()
            .extension()
            .is_some_and(|x| x == "csv")
    });
    assert_eq!(csvs.count(), 1);
    std::fs::remove_dir_all(out).ok();
}

#[test]
fn bad_config_exits_nonzero() {
    let out = scratch("bad");
    let cfg = out.join("cfg.json");
    std::fs::write(&cfg, r#"{"mpc": {"dt": -1.0}}"#).unwrap();
    let o = hympc(&[
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "eval",
    ]);
    assert_eq!(o.status.code(), Some(1));
    let missing = hympc(&[
        "--config",
        "/nonexistent/cfg.json",
        "--out",
        out.to_str().unwrap(),
        "eval",
    ]);
    assert_eq!(missing.status.code(), Some(1));
    std::fs::remove_dir_all(out).ok();
}

#[test]
fn deep_without_a_policy_is_an_io_error() {
    let out = scratch("nopolicy");
    let o = hympc(&[
        "--out",
        out.to_str().unwrap(),
        "--controller",
        "hympc-deep",
        "eval",
    ]);
    assert_eq!(o.status.code(), Some(1));
    std::fs::remove_dir_all(out).ok();
}
