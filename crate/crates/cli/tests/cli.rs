use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_fsdpsim");

fn data(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data").join(name).to_string_lossy().into_owned()
}

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn report_field(dir: &Path, key: &str) -> u64 {
    let text = fs::read_to_string(dir.join("report.txt")).unwrap();
    text.lines()
        .find_map(|l| l.strip_prefix(key).map(|v| v.trim().parse().unwrap()))
        .unwrap_or_else(|| panic!("{key} missing"))
}

fn sim_two_bucket(out: &Path, extra: &[&str]) {
    let spec = data("two_bucket.toml");
    let cost = data("two_bucket_cost.toml");
    let o = out.to_string_lossy();
    let mut args = vec!["simulate", "--spec", &spec, "--cost", &cost, "--out", &o];
    args.extend_from_slice(extra);
    ok(&args);
}

#[test]
fn build_minimal_and_single_device() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("b");
    let stdout = ok(&["build", "--spec", &data("minimal.toml"), "--out", out.to_str().unwrap()]);
    assert!(stdout.contains("11 nodes"), "{stdout}");
    let graph = fs::read_to_string(out.join("graph.txt")).unwrap();
    assert_eq!(graph.lines().filter(|l| l.starts_with("node ")).count(), 11);

    let stdout = ok(&["build", "--spec", &data("single_device.toml"), "--out", out.to_str().unwrap()]);
    assert!(stdout.contains("2 nodes"), "{stdout}");
    let graph = fs::read_to_string(out.join("graph.txt")).unwrap();
    assert!(graph.lines().filter(|l| l.starts_with("node ")).all(|l| l.split(' ').nth(2) == Some("C")));
}

#[test]
fn build_bundled_llama_counts_gathers() {
    let dir = tempfile::tempdir().unwrap();
    let stdout = ok(&["build", "--spec", "llama3-8B", "--out", dir.path().to_str().unwrap()]);
    // embeddings + 32 x (2 norms + 4 attention + 3 feed-forward) + norm + output
    let params = 1 + 32 * 9 + 1 + 1;
    assert!(stdout.contains(&format!("fwd AG   {params:>6} nodes")), "{stdout}");
}

#[test]
fn simulate_two_bucket_vanilla_and_reordered() {
    // Hand trace, forward then backward, 1 ns/B, free copies:
    // vanilla  AG1 5 | C1 10 | AG2 8 | C2 10 | AG2 8 | B2 20 | RS2 8 | AG1 5 | B1 20 | RS1 5 = 99 us
    // reorder  AG1 5 | C1 10 (AG2 hidden) | C2 10 | AG2 8 | B2 20 (AG1 hidden) | B1 20 | RS1 5 = 78 us
    let dir = tempfile::tempdir().unwrap();
    let (v, r) = (dir.path().join("v"), dir.path().join("r"));
    sim_two_bucket(&v, &["--no-reorder"]);
    sim_two_bucket(&r, &[]);
    assert_eq!(report_field(&v, "total_time_ns"), 99_000);
    assert_eq!(report_field(&v, "exposed_comm_ns"), 39_000);
    assert_eq!(report_field(&r, "total_time_ns"), 78_000);
    assert_eq!(report_field(&r, "exposed_comm_ns"), 18_000);
    for name in ["graph.txt", "plan.txt", "report.txt", "trace.json"] {
        assert!(r.join(name).exists(), "{name}");
    }
    let trace: serde_json::Value = serde_json::from_str(&fs::read_to_string(r.join("trace.json")).unwrap()).unwrap();
    let events = trace["traceEvents"].as_array().unwrap();
    assert!(events.iter().all(|e| e["ph"] == "X" && e["pid"] == 0));
    // the prefetched second gather runs [5, 13] us on the comm lane
    assert!(events.iter().any(|e| e["tid"] == 1 && e["ts"] == 5.0 && e["dur"] == 8.0));

    let table = ok(&["compare", v.join("report.txt").to_str().unwrap(), r.join("report.txt").to_str().unwrap()]);
    assert!(table.contains("-21.21%"), "{table}");
}

#[test]
fn simulate_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    sim_two_bucket(&a, &["--plan", "auto"]);
    sim_two_bucket(&b, &["--plan", "auto"]);
    for name in ["graph.txt", "plan.txt", "report.txt", "trace.json", "trace.txt"] {
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap(), "{name}");
    }
}

#[test]
fn plan_sources() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let (spec, cost, profile) =
        (data("three_param.toml"), data("three_param_cost.toml"), data("three_param_profile.toml"));
    let base = ["plan", "--spec", &spec, "--cost", &cost, "--out", out];

    let mut args = base.to_vec();
    args.extend(["--profile", &profile, "--plan", "auto"]);
    ok(&args);
    assert_eq!(fs::read_to_string(dir.path().join("plan.txt")).unwrap(), "p1 p2\np3\n");
    assert_eq!(fs::read_to_string(dir.path().join("trace.txt")).unwrap().lines().count(), 7);

    let mut args = base.to_vec();
    args.extend(["--profile", &profile, "--plan", "auto", "--mem-limit", "0"]);
    ok(&args);
    assert_eq!(fs::read_to_string(dir.path().join("plan.txt")).unwrap(), "p1\np2\np3\n");

    let mut args = base.to_vec();
    args.extend(["--plan", "manual", "--modules", "three"]);
    ok(&args);
    assert_eq!(fs::read_to_string(dir.path().join("plan.txt")).unwrap(), "p1 p2 p3\n");

    let mut args = base.to_vec();
    args.extend(["--plan", "manual", "--modules", "l1,l3"]);
    ok(&args);
    assert_eq!(fs::read_to_string(dir.path().join("plan.txt")).unwrap(), "p1\np2\np3\n");
}

#[test]
fn scenario_file_with_flag_override() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = dir.path().join("s.toml");
    fs::write(
        &scenario,
        format!(
            "label = \"from-file\"\nspec = {:?}\ncost = {:?}\nreorder = false\nout = \"run\"\n",
            data("two_bucket.toml"),
            data("two_bucket_cost.toml")
        ),
    )
    .unwrap();
    ok(&["simulate", "--scenario", scenario.to_str().unwrap()]);
    let run_dir: PathBuf = dir.path().join("run");
    assert_eq!(report_field(&run_dir, "total_time_ns"), 99_000);
    let report = fs::read_to_string(run_dir.join("report.txt")).unwrap();
    assert!(report.contains("label from-file"));

    let out = dir.path().join("flag");
    ok(&["simulate", "--scenario", scenario.to_str().unwrap(), "--out", out.to_str().unwrap(), "--label", "x"]);
    assert!(fs::read_to_string(out.join("report.txt")).unwrap().contains("label x"));
}

#[test]
fn oracle_reports_gap() {
    let dir = tempfile::tempdir().unwrap();
    let stdout = ok(&[
        "oracle",
        "--spec",
        &data("three_param.toml"),
        "--cost",
        &data("three_param_cost.toml"),
        "--profile",
        &data("three_param_profile.toml"),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert!(stdout.contains("evaluated 16 variants"), "{stdout}");
    assert!(stdout.contains("greedy gap"));
    assert!(dir.path().join("compare.txt").exists());
}

#[test]
fn errors_exit_nonzero() {
    let bad = run(&["build", "--spec", "no-such-model"]);
    assert!(!bad.status.success());
    assert!(String::from_utf8_lossy(&bad.stderr).contains("no-such-model"));
    assert!(bad.stdout.is_empty());

    let one = run(&["compare", &data("minimal.toml")]);
    assert_eq!(one.status.code(), Some(2));

    let dir = tempfile::tempdir().unwrap();
    let manual = run(&[
        "plan",
        "--spec",
        &data("three_param.toml"),
        "--cost",
        &data("three_param_cost.toml"),
        "--plan",
        "manual",
        "--modules",
        "nope",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert!(!manual.status.success());
    assert!(String::from_utf8_lossy(&manual.stderr).contains("unknown module"));
}
