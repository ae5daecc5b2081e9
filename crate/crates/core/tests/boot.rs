use std::path::{Path, PathBuf};
use std::time::Duration;

use forkstart::boot::*;
use forkstart::depgraph::{parse_release_graph, ModuleKey};
use forkstart::suptree::{check_trace, expected_tree, NodeKind, QuiescenceError};
use forkstart::trace::EventKind;
use forkstart::ClockKind;

fn demo(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../demo")
        .join(name)
}

#[test]
fn two_app_release_boots_and_checks() {
    let release = load_release(&demo("two_apps.rel")).unwrap();
    let names: Vec<&str> = release
        .applications
        .iter()
        .map(|a| a.name.as_str())
        .collect();
    assert_eq!(names, ["app1", "app2"]);

    let out = run_release(&release, &BootOptions::default(), ClockKind::Virtual).unwrap();
    let violations = check_trace(&out.trace, &release.graph, &out.roots);
    assert!(violations.is_empty(), "{violations:#?}");

    // app1's root acks at once; its servers finish by 50 ms. app2_server1
    // waits for all of app1 and then needs 20 ms more.
    assert_eq!(out.report.startup.duration, Duration::from_millis(70));
    assert_eq!(out.report.startup.wrapper_count, 4);
    assert_eq!(out.report.startup.node_count, 7);
    let expected: Vec<_> = release
        .applications
        .iter()
        .map(|a| expected_tree(&a.root))
        .collect();
    assert_eq!(out.tree, expected);

    // the server comes first, applications ack in release order
    assert_eq!(out.trace[0].kind, EventKind::ServerStart);
    let acks: Vec<String> = out
        .trace
        .iter()
        .filter(|e| e.kind == EventKind::Ack && e.node.depth() == 0)
        .map(|e| e.node.to_string())
        .collect();
    assert_eq!(acks, ["/app1_rootsup", "/app2_rootsup"]);
}

#[test]
fn sequential_mode_has_same_tree_without_wrappers() {
    let release = load_release(&demo("two_apps.rel")).unwrap();
    let conc = run_release(&release, &BootOptions::default(), ClockKind::Virtual).unwrap();
    let seq_opts = BootOptions {
        mode: BootMode::Sequential,
        ..BootOptions::default()
    };
    let seq = run_release(&release, &seq_opts, ClockKind::Virtual).unwrap();
    assert!(check_trace(&seq.trace, &release.graph, &seq.roots).is_empty());
    assert!(seq.report.startup.duration >= conc.report.startup.duration);
    assert_eq!(seq.report.startup.duration, Duration::from_millis(150));
    assert_eq!(seq.report.startup.wrapper_count, 0);
    assert!(!seq
        .trace
        .iter()
        .any(|e| e.node.segments().iter().any(|s| s.ends_with("@wrapper"))));

    fn strip(t: &forkstart::suptree::TreeNode) -> Vec<forkstart::suptree::TreeNode> {
        if t.kind == NodeKind::Wrapper {
            t.children.iter().flat_map(strip).collect()
        } else {
            vec![forkstart::suptree::TreeNode {
                children: t.children.iter().flat_map(strip).collect(),
                ..t.clone()
            }]
        }
    }
    let a: Vec<_> = conc.tree.iter().flat_map(strip).collect();
    assert_eq!(a, seq.tree);
}

#[test]
fn per_application_durations() {
    let release = load_release(&demo("two_apps.rel")).unwrap();
    let seq = run_release(
        &release,
        &BootOptions {
            mode: BootMode::Sequential,
            ..BootOptions::default()
        },
        ClockKind::Virtual,
    )
    .unwrap();
    assert_eq!(
        seq.report.applications,
        [
            ("app1".to_string(), Duration::from_millis(120)),
            ("app2".to_string(), Duration::from_millis(30))
        ]
    );
}

#[test]
fn cyclic_graph_is_refused() {
    let release = load_release(&demo("cycle.rel")).unwrap();
    let err = run_release(&release, &BootOptions::default(), ClockKind::Virtual).unwrap_err();
    let BootError::Cycle(keys) = err else {
        panic!("{err}")
    };
    assert!(keys.contains(&ModuleKey::exact("srv", "a")));
    assert!(keys.contains(&ModuleKey::exact("srv", "b")));
}

#[test]
fn cyclic_graph_deadlocks_when_allowed() {
    let release = load_release(&demo("cycle.rel")).unwrap();
    let opts = BootOptions {
        allow_cycles: true,
        deadlock_timeout: Duration::from_millis(500),
        ..BootOptions::default()
    };
    let err = run_release(&release, &opts, ClockKind::Virtual).unwrap_err();
    let BootError::Quiescence {
        error: QuiescenceError::Deadlock(report),
        trace,
        ..
    } = err
    else {
        panic!("{err}")
    };
    let keys: Vec<String> = report.blocked.iter().map(|(k, _)| k.to_string()).collect();
    assert_eq!(keys, ["srv [a]", "srv [b]"]);
    assert_eq!(report.elapsed, Duration::from_millis(500));
    assert!(trace.iter().any(|e| e.kind == EventKind::Deadlock));
    assert!(check_trace(&trace, &release.graph, &release.roots()).is_empty());
}

#[test]
fn empty_release_only_starts_the_server() {
    let release = Release {
        name: "empty".into(),
        graph: parse_release_graph("").unwrap(),
        applications: vec![],
    };
    assert_eq!(make_boot_plan(&release).steps.len(), 1);
    let out = run_release(&release, &BootOptions::default(), ClockKind::Virtual).unwrap();
    assert_eq!(out.trace.len(), 1);
    assert_eq!(out.report.startup.node_count, 0);
}

#[test]
fn load_errors() {
    let dir = tempfile::tempdir().unwrap();
    let write = |name: &str, body: &str| std::fs::write(dir.path().join(name), body).unwrap();
    write("g.rgraph", "");
    write("a.tree", "worker a srv [a]\n");
    write(
        "r.rel",
        "release r\ngraph g.rgraph\napp x a.tree\napp y missing.tree\n",
    );
    let err = load_release(&dir.path().join("r.rel")).unwrap_err();
    let LoadError::Invalid { diagnostics, .. } = err else {
        panic!("{err}")
    };
    assert_eq!(diagnostics[0].code, "unknown-tree-file");

    write(
        "r.rel",
        "release r\ngraph g.rgraph\napp x a.tree\napp y a.tree\n",
    );
    let LoadError::Invalid { diagnostics, .. } =
        load_release(&dir.path().join("r.rel")).unwrap_err()
    else {
        panic!()
    };
    assert_eq!(diagnostics[0].code, "duplicate-root");

    write("r.rel", "release r\ngraph nope.rgraph\n");
    assert!(matches!(
        load_release(&dir.path().join("r.rel")),
        Err(LoadError::Io { .. })
    ));
}

#[test]
fn wall_clock_boot() {
    let release = load_release(&demo("two_apps.rel")).unwrap();
    let out = run_release(&release, &BootOptions::default(), ClockKind::Wall).unwrap();
    assert!(check_trace(&out.trace, &release.graph, &out.roots).is_empty());
    assert!(out.report.startup.duration >= Duration::from_millis(70));
}
