use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn semforge(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_semforge"))
        .args(args)
        .env("SEMFORGE_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Two-node data set with a strong 0 → 1 effect, written as TSV.
fn write_two_node(dir: &Path, n: usize) {
    let mut state = 0x2545_f491_4f6c_dd1du64;
    let mut uniform = move || {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        (state >> 11) as f64 / (1u64 << 53) as f64
    };
    let mut normal = move || {
        let (a, b) = (uniform().max(1e-300), uniform());
        (-2.0 * a.ln()).sqrt() * (2.0 * std::f64::consts::PI * b).cos()
    };
    let mut y = String::from("A\tB\n");
    let mut x = String::from("gA\tgB\n");
    for _ in 0..n {
        let (ga, gb) = (normal(), normal());
        let a = ga + 0.3 * normal();
        let b = 0.8 * a + gb + 0.3 * normal();
        y.push_str(&format!("{a}\t{b}\n"));
        x.push_str(&format!("{ga}\t{gb}\n"));
    }
    fs::write(dir.join("y.tsv"), y).unwrap();
    fs::write(dir.join("x.tsv"), x).unwrap();
    fs::write(dir.join("assign.json"), r#"{"A": ["gA"], "B": ["gB"]}"#).unwrap();
}

fn input_args(dir: &Path, out: &str) -> Vec<String> {
    vec![
        "--y".into(),
        p(&dir.join("y.tsv")).into(),
        "--x".into(),
        p(&dir.join("x.tsv")).into(),
        "--assign".into(),
        p(&dir.join("assign.json")).into(),
        "--out".into(),
        p(&dir.join(out)).into(),
    ]
}

fn run(cmd: &str, dir: &Path, out: &str, extra: &[&str]) -> Output {
    let mut args: Vec<String> = vec![cmd.into()];
    args.extend(input_args(dir, out));
    args.extend(extra.iter().map(|s| s.to_string()));
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    semforge(&refs)
}

fn edge_lines(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split('\t').map(str::to_string).collect())
        .collect()
}

#[test]
fn fit_writes_edges_and_report() {
    let dir = TempDir::new().unwrap();
    write_two_node(dir.path(), 300);
    let o = run("fit", dir.path(), "out", &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let edges = fs::read_to_string(dir.path().join("out/edges.tsv")).unwrap();
    assert!(edges.starts_with("source\ttarget\teffect\n"));
    let rows = edge_lines(&dir.path().join("out/edges.tsv"));
    assert!(rows.iter().any(|r| r[0] == "A" && r[1] == "B"));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("out/report.json")).unwrap())
            .unwrap();
    assert_eq!(report["observations"], 300);
    assert_eq!(report["endogenous"], 2);
}

#[test]
fn overlapping_assignment_is_a_validation_error() {
    let dir = TempDir::new().unwrap();
    write_two_node(dir.path(), 50);
    fs::write(dir.path().join("assign.json"), r#"{"A": ["gA"], "B": ["gA", "gB"]}"#).unwrap();
    let o = run("fit", dir.path(), "out", &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("overlap at exogenous index 0"), "{}", stderr(&o));
}

#[test]
fn missing_file_is_an_io_error() {
    let dir = TempDir::new().unwrap();
    write_two_node(dir.path(), 50);
    fs::remove_file(dir.path().join("x.tsv")).unwrap();
    let o = run("fit", dir.path(), "out", &[]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn malformed_number_reports_its_position() {
    let dir = TempDir::new().unwrap();
    write_two_node(dir.path(), 50);
    fs::write(dir.path().join("y.tsv"), "A\tB\n1\t2\n3\tx7\n").unwrap();
    let o = run("fit", dir.path(), "out", &[]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("y.tsv:3:2"), "{}", stderr(&o));
}

#[test]
fn bootstrap_is_reproducible_and_filters() {
    let dir = TempDir::new().unwrap();
    write_two_node(dir.path(), 200);
    for out in ["b1", "b2"] {
        let o = run("bootstrap", dir.path(), out, &["--boot-b", "2", "--seed", "9"]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let a = fs::read(dir.path().join("b1/edges.tsv")).unwrap();
    let b = fs::read(dir.path().join("b2/edges.tsv")).unwrap();
    assert_eq!(a, b);

    let o = run(
        "bootstrap",
        dir.path(),
        "b3",
        &["--boot-b", "2", "--seed", "9", "--boot-threshold", "0.8"],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    for row in edge_lines(&dir.path().join("b3/edges.tsv")) {
        assert!(row[3].parse::<f64>().unwrap() >= 0.8);
    }
}

#[test]
fn bootstrap_keeps_the_strong_edge() {
    let dir = TempDir::new().unwrap();
    write_two_node(dir.path(), 400);
    let o = run("bootstrap", dir.path(), "out", &["--boot-b", "100"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rows = edge_lines(&dir.path().join("out/edges.tsv"));
    let top = &rows[0];
    assert_eq!((top[0].as_str(), top[1].as_str()), ("A", "B"));
    assert!(top[3].parse::<f64>().unwrap() >= 0.95);
}

#[test]
fn simulated_data_fits_back() {
    let dir = TempDir::new().unwrap();
    let sim = dir.path().join("sim");
    let o = semforge(&["simulate", "--p", "8", "--n", "400", "--seed", "3", "--out", p(&sim)]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["y.tsv", "x.tsv", "assign.json", "truth_edges.tsv", "truth_instruments.tsv", "simulation.json"] {
        assert!(sim.join(f).exists(), "{f} missing");
    }
    let o = run("fit", &sim, "fit", &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let truth = edge_lines(&sim.join("truth_edges.tsv"));
    let found = edge_lines(&sim.join("fit/edges.tsv"));
    let hits = truth
        .iter()
        .filter(|t| found.iter().any(|f| f[0] == t[0] && f[1] == t[1]))
        .count();
    assert!(hits * 10 >= truth.len() * 8, "{hits} of {} true edges", truth.len());
}

fn csv_rows(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut rdr = csv::Reader::from_path(path).unwrap();
    let header = rdr.headers().unwrap().iter().map(str::to_string).collect();
    let rows = rdr
        .records()
        .map(|r| r.unwrap().iter().map(str::to_string).collect())
        .collect();
    (header, rows)
}

#[test]
fn bench_rows_and_summary_agree() {
    let dir = TempDir::new().unwrap();
    let bench = |out: &str| {
        semforge(&[
            "bench", "--p", "10", "--topology", "acyclic,cyclic", "--ns", "100,300",
            "--replicates", "3", "--strategies", "ridge,alasso", "--omit-timing", "--seed", "5",
            "--out", p(&dir.path().join(out)),
        ])
    };
    let o = bench("a");
    assert!(o.status.success(), "{}", stderr(&o));
    let (header, rows) = csv_rows(&dir.path().join("a/metrics.csv"));
    assert_eq!(rows.len(), 2 * 2 * 3 * 2);
    let col = |name: &str| header.iter().position(|h| h == name).unwrap();

    let (sh, summary) = csv_rows(&dir.path().join("a/summary.csv"));
    let scol = |name: &str| sh.iter().position(|h| h == name).unwrap();
    assert_eq!(summary.len(), 2 * 2 * 2);
    for s in &summary {
        let key = |r: &Vec<String>, c: &dyn Fn(&str) -> usize| {
            ["topology", "n", "strategy"].map(|k| r[c(k)].clone())
        };
        let members: Vec<&Vec<String>> =
            rows.iter().filter(|r| key(r, &col) == key(s, &scol)).collect();
        assert_eq!(members.len(), 3);
        let mean = members.iter().map(|r| r[col("power")].parse::<f64>().unwrap()).sum::<f64>() / 3.0;
        let reported: f64 = s[scol("mean_power")].parse().unwrap();
        assert!((mean - reported).abs() < 1e-12);
    }

    let o = bench("b");
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["metrics.csv", "summary.csv"] {
        assert_eq!(
            fs::read(dir.path().join("a").join(f)).unwrap(),
            fs::read(dir.path().join("b").join(f)).unwrap(),
            "{f} differs"
        );
    }
}

#[test]
fn unknown_extension_is_rejected() {
    let dir = TempDir::new().unwrap();
    write_two_node(dir.path(), 50);
    fs::rename(dir.path().join("y.tsv"), dir.path().join("y.dat")).unwrap();
    let o = semforge(&[
        "fit", "--y", p(&dir.path().join("y.dat")), "--x", p(&dir.path().join("x.tsv")),
        "--assign", p(&dir.path().join("assign.json")), "--out", p(&dir.path().join("out")),
    ]);
    assert_eq!(o.status.code(), Some(3));
}
