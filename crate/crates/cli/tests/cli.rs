use std::process::{Command, Output};

fn refgraph(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_refgraph"))
        .args(args)
        .env_remove("RUST_BACKTRACE")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn load_validates_edge_lists() {
    let dir = tempfile::tempdir().unwrap();
    let good = dir.path().join("good.txt");
    std::fs::write(&good, "# triangle\na b\nb c\nc a\na b\n").unwrap();
    let o = refgraph(&["load", good.to_str().unwrap()]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("3 vertices, 4 edges"), "{}", stdout(&o));

    let bad = dir.path().join("bad.txt");
    std::fs::write(&bad, "a b\nc\n").unwrap();
    let o = refgraph(&["load", bad.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 2"));
}

#[test]
fn simulated_history_round_trips_through_check() {
    let dir = tempfile::tempdir().unwrap();
    let h = dir.path().join("h.jsonl");
    let o = refgraph(&["simulate", "--ops", "200", "--seed", "3", "--history", h.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("checker         pass"));

    let o = refgraph(&["check", h.to_str().unwrap()]);
    assert!(o.status.success());
    assert!(stdout(&o).starts_with("PASS"));
}

#[test]
fn check_rejects_a_stale_read() {
    let dir = tempfile::tempdir().unwrap();
    let h = dir.path().join("h.jsonl");
    let o = refgraph(&["simulate", "--ops", "40", "--seed", "1", "--history", h.to_str().unwrap()]);
    assert!(o.status.success());
    // A read that observes a value no transaction ever wrote.
    let text = std::fs::read_to_string(&h).unwrap();
    let forged = "999\ttx\t{\"Tx\":{\"reads\":[\"v0\"],\"writes\":[]}}\t900000000\t900000001\t\
                  {\"Committed\":{\"ts\":{\"epoch\":0,\"issuer\":0,\"clocks\":[999999,0,0]},\
                  \"reads\":[{\"props\":{\"p\":\"never\"},\"edges\":{}}]}}";
    std::fs::write(&h, format!("{text}{forged}\n")).unwrap();
    let o = refgraph(&["check", h.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(stdout(&o).starts_with("VIOLATION"), "{}", stdout(&o));
}

#[test]
fn fault_recovers() {
    let o = refgraph(&["fault", "--kill", "gatekeeper1", "--at", "60ms"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let out = stdout(&o);
    assert!(out.contains("epoch 1 installed"), "{out}");
    assert!(out.contains("epoch order     ok"));
    assert!(out.contains("real-time order ok"));

    let o = refgraph(&["fault", "--kill", "oracle", "--at", "1ms"]);
    assert!(!o.status.success());
}

#[test]
fn sweep_prints_one_row_per_period() {
    let o = refgraph(&["sweep-tau", "--values", "2,64", "--ops", "120"]);
    assert!(o.status.success());
    assert_eq!(stdout(&o).lines().count(), 3);
}

#[test]
fn bench_runs_briefly() {
    let o = refgraph(&["bench", "--workload", "get_node", "--clients", "2", "--duration", "0.3", "--vertices", "50"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("throughput"));
}
