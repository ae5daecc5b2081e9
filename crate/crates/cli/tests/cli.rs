use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn demo(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../demo")
        .join(name)
}

fn forkstart(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_forkstart"))
        .args(args)
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn validate_exit_codes() {
    let ok = forkstart(&["validate", s(&demo("two_apps.rgraph"))]);
    assert_eq!(code(&ok), 0, "{}", stderr(&ok));

    let cyc = forkstart(&["validate", s(&demo("cycle.rgraph"))]);
    assert_eq!(code(&cyc), 1);
    assert!(stderr(&cyc).contains("srv [a]") && stderr(&cyc).contains("srv [b]"));

    assert_eq!(code(&forkstart(&["validate", "/nonexistent.rgraph"])), 2);

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.rgraph");
    std::fs::write(&bad, "[conditions]\nsrv [a] -> \n").unwrap();
    assert_eq!(code(&forkstart(&["validate", s(&bad)])), 1);
}

#[test]
fn run_then_check_the_trace() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("run.trace");
    for mode in ["conc", "seq"] {
        let out = forkstart(&[
            "run",
            s(&demo("two_apps.rel")),
            "--mode",
            mode,
            "--virtual-clock",
            "--trace",
            s(&trace),
        ]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        let expected = if mode == "conc" {
            "70.000 ms"
        } else {
            "150.000 ms"
        };
        assert!(stdout(&out).contains(expected), "{}", stdout(&out));

        let check = forkstart(&[
            "check",
            s(&trace),
            s(&demo("two_apps.rgraph")),
            s(&demo("app1.tree")),
            s(&demo("app2.tree")),
            "--mode",
            mode,
        ]);
        assert_eq!(code(&check), 0, "{}", stdout(&check));
    }
}

#[test]
fn wall_clock_run() {
    let out = forkstart(&["run", s(&demo("two_apps.rel"))]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(stdout(&out).contains("4 wrapper(s)"));
}

#[test]
fn cyclic_release() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("cycle.trace");
    let refused = forkstart(&[
        "run",
        s(&demo("cycle.rel")),
        "--virtual-clock",
        "--trace",
        s(&trace),
    ]);
    assert_eq!(code(&refused), 1);
    assert!(stderr(&refused).contains("cycle"));
    assert!(!trace.exists(), "nothing may start");

    let dead = forkstart(&[
        "run",
        s(&demo("cycle.rel")),
        "--virtual-clock",
        "--allow-cycles",
        "--deadlock-timeout",
        "200",
        "--trace",
        s(&trace),
    ]);
    assert_eq!(code(&dead), 1);
    let err = stderr(&dead);
    assert!(err.contains("deadlock after 200 ms"), "{err}");
    assert!(
        err.contains("srv [a] waits on {cond_b}") && err.contains("srv [b] waits on {cond_a}"),
        "{err}"
    );
    assert!(std::fs::read_to_string(&trace)
        .unwrap()
        .contains(" deadlock "));
}

#[test]
fn check_rejects_forged_traces() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("t");
    let run = forkstart(&[
        "run",
        s(&demo("two_apps.rel")),
        "--virtual-clock",
        "--trace",
        s(&trace),
    ]);
    assert_eq!(code(&run), 0);
    let text = std::fs::read_to_string(&trace).unwrap();
    let check = |body: &str| {
        std::fs::write(&trace, body).unwrap();
        forkstart(&[
            "check",
            s(&trace),
            s(&demo("two_apps.rgraph")),
            s(&demo("app1.tree")),
            s(&demo("app2.tree")),
        ])
    };

    // app2_server1 acks before it ever waited
    let lines: Vec<&str> = text.lines().collect();
    let wait = lines
        .iter()
        .position(|l| l.contains(" wait_begin /app2_rootsup/app2_server1@wrapper/"))
        .unwrap();
    let mut forged: Vec<&str> = lines.clone();
    forged.remove(wait);
    let out = check(&(forged.join("\n") + "\n"));
    assert_eq!(code(&out), 1);
    assert!(
        stdout(&out).contains("wait-end-before-begin"),
        "{}",
        stdout(&out)
    );

    let empty = check("");
    assert_eq!(code(&empty), 1);
    assert!(stdout(&empty).contains("missing-events"));

    let garbage = check("this is not a trace\n");
    assert_eq!(code(&garbage), 2);
}

#[test]
fn bench_deep_sequential_matches_node_count() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("deep.csv");
    let out = forkstart(&[
        "bench",
        "--topology",
        "deep",
        "--mode",
        "seq",
        "--repeat",
        "5",
        "--virtual-clock",
        "--delay-ms",
        "1",
        "--out",
        s(&csv),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let summary = stdout(&out);
    assert!(
        summary.contains("mean=1093.000") && summary.contains("prediction=1093.000"),
        "{summary}"
    );
    assert_eq!(std::fs::read_to_string(&csv).unwrap().lines().count(), 6);
}

#[test]
fn bench_wide_fork_depth_one() {
    let out = forkstart(&[
        "bench",
        "--topology",
        "wide",
        "--fork-depth",
        "1",
        "--mode",
        "conc",
        "--virtual-clock",
        "--delay-ms",
        "1",
        "--repeat",
        "1",
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(stdout(&out).contains("mean=12.000"), "{}", stdout(&out));
}

#[test]
fn bench_config_file_and_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bench.toml");
    std::fs::write(
        &cfg,
        "topology = \"wide\"\ndelay_ms = 1\nvirtual_clock = true\nrepeat = 2\nfork_depth = 1\n",
    )
    .unwrap();
    let out = forkstart(&["bench", "--config", s(&cfg)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(stdout(&out).contains("mean=12.000") && stdout(&out).contains("reps=2"));

    let out = forkstart(&["bench", "--config", s(&cfg), "--mode", "seq"]);
    assert!(stdout(&out).contains("mean=111.000"), "{}", stdout(&out));

    std::fs::write(&cfg, "topology = \"wide\"\nbogus = 3\n").unwrap();
    assert_eq!(code(&forkstart(&["bench", "--config", s(&cfg)])), 2);
}

#[test]
fn bench_usage_errors() {
    assert_eq!(
        code(&forkstart(&[
            "bench",
            "--fork-depth",
            "1",
            "--fork-count",
            "2"
        ])),
        2
    );
    assert_eq!(
        code(&forkstart(&[
            "bench",
            "--topology",
            "wide",
            "--fork-depth",
            "7",
            "--virtual-clock"
        ])),
        2
    );
    assert_eq!(code(&forkstart(&["bench", "--topology", "ring"])), 2);
    assert_eq!(
        code(&forkstart(&["bench", "--repeat", "0", "--virtual-clock"])),
        2
    );
    assert_eq!(code(&forkstart(&[])), 2);
}
