use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn tubepmp(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tubepmp"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn text(bytes: &[u8]) -> String {
    String::from_utf8_lossy(bytes).into_owned()
}

/// Writes the bundled examples into a fresh temp dir.
fn examples() -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let out = tubepmp(&["examples", "--out", "problems"], dir.path());
    assert_eq!(code(&out), 0, "{}", text(&out.stderr));
    let problems = dir.path().join("problems");
    (dir, problems)
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn write(path: &Path, contents: &str) {
    std::fs::write(path, contents).unwrap();
}

#[test]
fn examples_are_listed() {
    let dir = tempfile::tempdir().unwrap();
    let out = tubepmp(&["examples"], dir.path());
    assert_eq!(code(&out), 0);
    let listed = text(&out.stdout);
    for name in [
        "sphere_e1_to_e3.json",
        "double_integrator.json",
        "plane_chebyshev.json",
        "sphere_submanifold_target.json",
    ] {
        assert!(listed.contains(name), "{listed}");
    }
}

#[test]
fn double_integrator_solve_is_reproducible_and_round_trips() {
    let (dir, problems) = examples();
    let file = problems.join("double_integrator.json");
    let file = file.to_str().unwrap();
    let a = tubepmp(&["solve", file, "--out", "a"], dir.path());
    assert_eq!(code(&a), 0, "{}", text(&a.stderr));
    assert!(text(&a.stdout).contains("wall time"));
    let report = json(&dir.path().join("a/report.json"));
    let t1 = report["terminal_time"].as_f64().unwrap();
    assert!((t1 - 2.0).abs() < 1e-4, "{t1}");
    assert_eq!(report["pass"], true);
    assert_eq!(report["problem_digest"].as_str().unwrap().len(), 64);
    assert!(report.get("wall_time").is_none());
    assert!(json(&dir.path().join("a/certificate.json"))["pass"]
        .as_bool()
        .unwrap());
    assert!(dir.path().join("a/plot.gp").exists());

    let b = tubepmp(&["solve", file, "--out", "b", "--seed", "0"], dir.path());
    assert_eq!(code(&b), 0);
    for name in [
        "extremal.csv",
        "extremal.json",
        "certificate.json",
        "report.json",
        "plot.gp",
    ] {
        let x = std::fs::read(dir.path().join("a").join(name)).unwrap();
        let y = std::fs::read(dir.path().join("b").join(name)).unwrap();
        assert!(x == y, "{name} differs between identical runs");
    }

    // the solver's own output certifies
    let v = tubepmp(&["verify", file, "a/extremal.csv"], dir.path());
    assert_eq!(code(&v), 0, "{}", text(&v.stderr));
    let cert: serde_json::Value = serde_json::from_str(&text(&v.stdout)).unwrap();
    assert_eq!(cert["pass"], true);

    // negating the control column breaks the maximum condition
    let csv = std::fs::read_to_string(dir.path().join("a/extremal.csv")).unwrap();
    let mut lines = csv.lines();
    let header = lines.next().unwrap();
    let u = header.split(',').position(|h| h == "u1").unwrap();
    let mut negated = format!("{header}\n");
    for line in lines {
        let mut cells: Vec<String> = line.split(',').map(str::to_string).collect();
        cells[u] = format!("{:?}", -cells[u].parse::<f64>().unwrap());
        negated.push_str(&cells.join(","));
        negated.push('\n');
    }
    write(&dir.path().join("a/negated.csv"), &negated);
    std::fs::copy(
        dir.path().join("a/extremal.json"),
        dir.path().join("a/negated.json"),
    )
    .unwrap();
    let v = tubepmp(&["verify", file, "a/negated.csv"], dir.path());
    assert_eq!(code(&v), 1);
    let cert: serde_json::Value = serde_json::from_str(&text(&v.stdout)).unwrap();
    let failures: Vec<&str> = cert["failures"]
        .as_array()
        .unwrap()
        .iter()
        .map(|f| f.as_str().unwrap())
        .collect();
    assert!(
        failures.contains(&"statement3_maximum_condition"),
        "{failures:?}"
    );

    let v = tubepmp(&["verify", file, "a/missing.csv"], dir.path());
    assert_eq!(code(&v), 2);
}

#[test]
fn sphere_solve_meets_the_rotation_bound() {
    let (dir, problems) = examples();
    let file = problems.join("sphere_e1_to_e3.json");
    let out = tubepmp(&["solve", file.to_str().unwrap(), "--out", "s"], dir.path());
    assert_eq!(code(&out), 0, "{}", text(&out.stderr));
    let report = json(&dir.path().join("s/report.json"));
    let t1 = report["terminal_time"].as_f64().unwrap();
    assert!(t1 <= std::f64::consts::PI / 2f64.sqrt() + 1e-3, "{t1}");
}

#[test]
fn malformed_files_exit_2_with_position() {
    let dir = tempfile::tempdir().unwrap();
    write(
        &dir.path().join("bad.json"),
        "{\n  \"manifold\": {\"kind\": \"plane\", \"dim\": 3,}\n}\n",
    );
    write(
        &dir.path().join("unknown.json"),
        "{\"manifold\": {\"kind\": \"plane\", \"dim\": 3, \"color\": 1}}",
    );
    for (file, cmd) in [
        ("bad.json", "solve"),
        ("unknown.json", "check"),
        ("absent.json", "solve"),
    ] {
        let out = tubepmp(&[cmd, file], dir.path());
        assert_eq!(code(&out), 2, "{file}: {}", text(&out.stderr));
    }
    let out = tubepmp(&["solve", "bad.json"], dir.path());
    assert!(
        text(&out.stderr).contains("line 2, column"),
        "{}",
        text(&out.stderr)
    );
}

#[test]
fn unreachable_targets_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    write(
        &dir.path().join("p.json"),
        r#"{
          "manifold": {"kind": "plane", "dim": 3},
          "system": {
            "dynamics": {"kind": "expressions", "controls": 1, "fields": ["1", "u1", "0"]},
            "cost": {"kind": "time"},
            "controls": {"kind": "symmetric_box", "dim": 1, "bound": 1.0},
            "start": {"kind": "point", "point": [0, 0, 0]},
            "end": {"kind": "point", "point": [-1, 0, 0]},
            "terminal_time": {"kind": "free"}
          },
          "solver": {"starts": 4}
        }"#,
    );
    let out = tubepmp(&["solve", "p.json"], dir.path());
    assert_eq!(code(&out), 3, "{}", text(&out.stderr));
}

#[test]
fn simulate_follows_the_rotation_oracle() {
    let (dir, problems) = examples();
    let file = problems.join("sphere_e1_to_e3.json");
    let file = file.to_str().unwrap();
    write(
        &dir.path().join("ones.json"),
        r#"{"controls": [[1.0, 1.0]]}"#,
    );
    write(
        &dir.path().join("zero.json"),
        r#"{"controls": [[0.0, 0.0]]}"#,
    );
    let span = format!("0,{}", std::f64::consts::PI / 2f64.sqrt());

    let out = tubepmp(
        &["simulate", file, "--control", "ones.json", "--tspan", &span],
        dir.path(),
    );
    assert_eq!(code(&out), 0, "{}", text(&out.stderr));
    let summary: serde_json::Value = serde_json::from_str(&text(&out.stdout)).unwrap();
    let x: Vec<f64> = serde_json::from_value(summary["final_state"].clone()).unwrap();
    let err = (x[0].powi(2) + x[1].powi(2) + (x[2] - 1.0).powi(2)).sqrt();
    assert!(err < 1e-6, "{x:?}");
    assert!(summary["max_drift"].as_f64().unwrap() <= 1e-7);
    let csv = std::fs::read_to_string(dir.path().join("simulation.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "t,x1,x2,x3,u1,u2,g_norm");

    let out = tubepmp(
        &[
            "simulate",
            file,
            "--control",
            "zero.json",
            "--tspan",
            "0,2",
            "--out",
            "still.csv",
        ],
        dir.path(),
    );
    assert_eq!(code(&out), 0);
    let summary: serde_json::Value = serde_json::from_str(&text(&out.stdout)).unwrap();
    assert_eq!(summary["final_state"], serde_json::json!([1.0, 0.0, 0.0]));

    let out = tubepmp(
        &[
            "simulate",
            file,
            "--control",
            "absent.json",
            "--tspan",
            "0,1",
        ],
        dir.path(),
    );
    assert_eq!(code(&out), 2);
}

// On the sphere the extended field is f(π(z), u) = Ω(u) z / |z|, so |z| = s is
// conserved and π(z(t)) is the on-manifold flow from π(z₀) evaluated at t / s.
#[test]
fn off_manifold_simulation_shadows_the_projected_flow() {
    let (dir, problems) = examples();
    let file = problems.join("sphere_e1_to_e3.json");
    let file = file.to_str().unwrap();
    write(
        &dir.path().join("ones.json"),
        r#"{"controls": [[1.0, 1.0]]}"#,
    );
    let s = 1.02;
    let span = format!("0,{}", s * std::f64::consts::PI / 2f64.sqrt());
    let out = tubepmp(
        &[
            "simulate",
            file,
            "--control",
            "ones.json",
            "--tspan",
            &span,
            "--start",
            "1.02,0,0",
        ],
        dir.path(),
    );
    assert_eq!(code(&out), 0, "{}", text(&out.stderr));
    let summary: serde_json::Value = serde_json::from_str(&text(&out.stdout)).unwrap();
    let z: Vec<f64> = serde_json::from_value(summary["final_state"].clone()).unwrap();
    let norm = z.iter().map(|v| v * v).sum::<f64>().sqrt();
    assert!((norm - s).abs() < 1e-9, "{norm}");
    let shadow: Vec<f64> = z.iter().map(|v| v / norm).collect();
    assert!(
        (shadow[2] - 1.0).abs() < 1e-6 && shadow[0].abs() < 1e-6 && shadow[1].abs() < 1e-6,
        "{shadow:?}"
    );

    // on a plane the retraction fixes tangent vectors: the shadow is the flow itself
    let problem = problems.join("plane_chebyshev.json");
    write(
        &dir.path().join("diag.json"),
        r#"{"switch_times": [0.5], "controls": [[1.0, -1.0], [1.0, 1.0]]}"#,
    );
    let out = tubepmp(
        &[
            "simulate",
            problem.to_str().unwrap(),
            "--control",
            "diag.json",
            "--tspan",
            "0,1",
            "--start",
            "0,0,0.3",
        ],
        dir.path(),
    );
    assert_eq!(code(&out), 0, "{}", text(&out.stderr));
    let summary: serde_json::Value = serde_json::from_str(&text(&out.stdout)).unwrap();
    let z: Vec<f64> = serde_json::from_value(summary["final_state"].clone()).unwrap();
    assert!(
        (z[0] - 1.0).abs() < 1e-12 && z[1].abs() < 1e-12 && (z[2] - 0.3).abs() < 1e-12,
        "{z:?}"
    );
}

#[test]
fn check_diagnoses_problems() {
    let (dir, problems) = examples();
    for name in [
        "sphere_e1_to_e3",
        "double_integrator",
        "plane_chebyshev",
        "sphere_submanifold_target",
    ] {
        let path = problems.join(format!("{name}.json"));
        let out = tubepmp(&["check", path.to_str().unwrap()], dir.path());
        assert_eq!(code(&out), 0, "{name}: {}", text(&out.stdout));
    }

    let radial = std::fs::read_to_string(problems.join("sphere_e1_to_e3.json")).unwrap().replace(
        r#"{ "kind": "sphere_rotation" }"#,
        r#"{ "kind": "expressions", "controls": 2, "fields": ["x1 * u1", "x2 * u1", "x3 * u2"] }"#,
    );
    write(&dir.path().join("radial.json"), &radial);
    let out = tubepmp(&["check", "radial.json"], dir.path());
    assert_eq!(code(&out), 1);
    let report: serde_json::Value = serde_json::from_str(&text(&out.stdout)).unwrap();
    let tangency = report
        .as_array()
        .unwrap()
        .iter()
        .find(|d| d["name"] == "tangency")
        .unwrap();
    assert_eq!(tangency["pass"], false);

    let flat = std::fs::read_to_string(problems.join("double_integrator.json"))
        .unwrap()
        .replace(
            r#"{ "kind": "plane", "dim": 3 }"#,
            r#"{ "kind": "constraints", "dim": 3, "expressions": ["0 * x3"] }"#,
        );
    write(&dir.path().join("flat.json"), &flat);
    let out = tubepmp(&["check", "flat.json"], dir.path());
    assert_eq!(code(&out), 1, "{}", text(&out.stdout));
    assert!(
        text(&out.stdout).contains("rank_deficient"),
        "{}",
        text(&out.stdout)
    );
}
