use std::path::Path;
use std::process::{Command, Output};

fn pcm(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pcm"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("pcm runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn text(bytes: &[u8]) -> String {
    String::from_utf8_lossy(bytes).into_owned()
}

#[test]
fn every_subcommand_has_help() {
    let dir = tempfile::tempdir().unwrap();
    for cmd in [
        "scheduler",
        "worker",
        "factory",
        "trace",
        "run",
        "submit",
        "status",
        "stop",
        "summarize",
        "plot",
    ] {
        let o = pcm(dir.path(), &[cmd, "--help"]);
        assert_eq!(code(&o), 0, "{cmd}");
        assert!(text(&o.stdout).contains("Usage: pcm"), "{cmd}");
    }
    for sub in ["generate", "inspect"] {
        assert_eq!(code(&pcm(dir.path(), &["trace", sub, "--help"])), 0);
    }
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&pcm(dir.path(), &["run", "--frobnicate"])), 2);
    assert_eq!(code(&pcm(dir.path(), &["run", "--awareness", "psychic"])), 2);
    assert_eq!(code(&pcm(dir.path(), &[])), 2);
}

#[test]
fn config_errors_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.toml"), "bogus = [").unwrap();
    let o = pcm(dir.path(), &["--config", "bad.toml", "run", "--items", "10"]);
    assert_eq!(code(&o), 3, "{}", text(&o.stderr));
    assert_eq!(code(&pcm(dir.path(), &["--config", "missing.toml", "run"])), 3);
    std::fs::write(dir.path().join("neg.toml"), "[cost]\nfs_aggregate_bandwidth = -1.0\n").unwrap();
    assert_eq!(
        code(&pcm(dir.path(), &["--config", "neg.toml", "run", "--items", "10"])),
        3
    );
}

#[test]
fn traces_are_reproducible_from_the_seed() {
    let dir = tempfile::tempdir().unwrap();
    let a = pcm(dir.path(), &["trace", "generate", "preempt-1pm", "--seed", "7"]);
    let b = pcm(dir.path(), &["trace", "generate", "preempt-1pm", "--seed", "7"]);
    assert_eq!(code(&a), 0);
    assert!(!a.stdout.is_empty());
    assert_eq!(a.stdout, b.stdout);
    assert_ne!(
        a.stdout,
        pcm(dir.path(), &["trace", "generate", "high-capacity", "--seed", "7"]).stdout
    );

    assert_eq!(
        code(&pcm(
            dir.path(),
            &["trace", "generate", "preempt-1pm", "--seed", "7", "--out", "t.jsonl"]
        )),
        0
    );
    let summary = pcm(dir.path(), &["trace", "inspect", "t.jsonl"]);
    assert_eq!(code(&summary), 0);
    let v: serde_json::Value = serde_json::from_slice(&summary.stdout).unwrap();
    assert_eq!(v["arrivals"], 20);
    assert_eq!(v["preemptions"], 20);
}

#[test]
fn sim_run_writes_the_metrics_csv_then_summarize_and_plot_read_it() {
    let dir = tempfile::tempdir().unwrap();
    let o = pcm(
        dir.path(),
        &[
            "run",
            "--scenario",
            "static20",
            "--awareness",
            "full",
            "--items",
            "3000",
            "--out",
            "full.csv",
        ],
    );
    assert_eq!(code(&o), 0, "{}", text(&o.stderr));
    let csv = std::fs::read_to_string(dir.path().join("full.csv")).unwrap();
    assert_eq!(
        csv.lines().next(),
        Some("t_emulated,completed_items,connected_workers,warm_workers")
    );
    assert!(csv.lines().last().unwrap().split(',').nth(1) == Some("3000"));

    let args = [
        "run",
        "--awareness",
        "agnostic",
        "--items",
        "3000",
        "--out",
        "ag.csv",
        "--report",
        "ag.json",
    ];
    assert_eq!(code(&pcm(dir.path(), &args)), 0);
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("ag.json")).unwrap()).unwrap();
    assert_eq!(report["credited_items"], 3000);

    let s = pcm(dir.path(), &["summarize", "ag.csv", "full.csv"]);
    assert_eq!(code(&s), 0, "{}", text(&s.stderr));
    assert!(text(&s.stdout).contains("ag -> full"));

    let p = pcm(dir.path(), &["plot", "ag.csv", "full.csv", "--out", "fig.svg"]);
    assert_eq!(code(&p), 0);
    let svg = std::fs::read_to_string(dir.path().join("fig.svg")).unwrap();
    assert!(svg.starts_with("<svg") && svg.contains("full"));

    assert_eq!(code(&pcm(dir.path(), &["summarize", "nope.csv"])), 1);
}

#[test]
fn an_emptied_pool_is_a_deadlock_exit_4() {
    let dir = tempfile::tempdir().unwrap();
    let o = pcm(
        dir.path(),
        &[
            "run",
            "--scenario",
            "preempt-1pm",
            "--items",
            "150000",
            "--out",
            "p.csv",
        ],
    );
    assert_eq!(code(&o), 4, "{}", text(&o.stderr));
    assert!(text(&o.stderr).contains("deadlock"));
    // the partial series is still written
    assert!(
        std::fs::read_to_string(dir.path().join("p.csv"))
            .unwrap()
            .lines()
            .count()
            > 100
    );
}

#[test]
fn live_run_with_workers_as_child_processes() {
    let dir = tempfile::tempdir().unwrap();
    let o = pcm(
        dir.path(),
        &[
            "run",
            "--mode",
            "live",
            "--spawn",
            "process",
            "--items",
            "2000",
            "--event-log",
            "events.jsonl",
            "--out",
            "live.csv",
        ],
    );
    assert_eq!(code(&o), 0, "{}", text(&o.stderr));
    assert!(text(&o.stdout).contains("credited=2000/2000"), "{}", text(&o.stdout));
    let log = std::fs::read_to_string(dir.path().join("events.jsonl")).unwrap();
    assert_eq!(
        log.lines().filter(|l| l.contains("\"worker_registered\"")).count(),
        20,
        "{log}"
    );
}

/// First stdout line of a long-running child, e.g. its listen addresses.
fn first_line(child: &mut std::process::Child) -> String {
    use std::io::BufRead;
    let out = child.stdout.take().unwrap();
    let mut line = String::new();
    std::io::BufReader::new(out).read_line(&mut line).unwrap();
    line.trim().to_string()
}

fn field<'a>(line: &'a str, key: &str) -> &'a str {
    line.split_whitespace()
        .find_map(|w| w.strip_prefix(key))
        .unwrap_or_else(|| panic!("{key} in {line:?}"))
}

#[test]
fn separate_scheduler_factory_and_client_processes() {
    use std::process::Stdio;
    let dir = tempfile::tempdir().unwrap();
    let spawn = |args: &[&str]| {
        Command::new(env!("CARGO_BIN_EXE_pcm"))
            .current_dir(dir.path())
            .args(args)
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .unwrap()
    };
    let mut sched = spawn(&[
        "scheduler",
        "--listen",
        "127.0.0.1:0",
        "--http",
        "127.0.0.1:0",
        "--event-log",
        "ev.jsonl",
    ]);
    let line = first_line(&mut sched);
    let (workers, http) = (field(&line, "workers=").to_string(), field(&line, "http=").to_string());
    let factory = spawn(&[
        "factory",
        "--scheduler",
        &workers,
        "--http",
        &http,
        "--fs-listen",
        "127.0.0.1:0",
    ]);

    let sub = pcm(
        dir.path(),
        &["submit", "--http", &http, "--items", "2000", "--wait", "m.csv"],
    );
    assert_eq!(code(&sub), 0, "{}", text(&sub.stderr));
    assert!(text(&sub.stdout).contains("credited 2000/2000"));
    let status = pcm(dir.path(), &["status", "--http", &http, "--workers"]);
    assert!(text(&status.stdout).contains("\"drained\": true"));

    assert_eq!(code(&pcm(dir.path(), &["stop", "--http", &http])), 0);
    assert!(sched.wait().unwrap().success());
    let f = factory.wait_with_output().unwrap();
    assert!(f.status.success());
    // workers got SHUTDOWN rather than a dropped socket
    assert!(
        !text(&f.stderr).contains("closed the connection"),
        "{}",
        text(&f.stderr)
    );
    let csv = std::fs::read_to_string(dir.path().join("m.csv")).unwrap();
    assert!(csv.lines().last().unwrap().split(',').nth(1) == Some("2000"));
}
