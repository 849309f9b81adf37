use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_honeybee")).args(args).output().expect("binary runs")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let (policy, vectors, workload, plan, dep, log) =
        (d.join("p.txt"), d.join("v.fvecs"), d.join("w.txt"), d.join("plan.txt"), d.join("dep"), d.join("log.txt"));

    let o = run(&[
        "gen", "--users", "60", "--roles", "15", "--docs", "1200", "--seed", "3", "--out", path(&policy), "--dim", "8",
        "--vectors", path(&vectors), "--queries", "30", "--workload", path(&workload),
    ]);
    assert_eq!(o.status.code(), Some(0), "{o:?}");
    assert!(stdout(&o).starts_with("users=60 roles=15 docs=1200"));

    let o = run(&["plan", "--policy", path(&policy), "--alpha", "1.5", "--out", path(&plan), "--routing", path(&d.join("r.txt"))]);
    assert_eq!(o.status.code(), Some(0), "{o:?}");
    assert!(fs::read_to_string(&plan).unwrap().lines().count() >= 2);

    let o = run(&["deploy", "--policy", path(&policy), "--plan", path(&plan), "--vectors", path(&vectors), "--ef-s", "400", "--out", path(&dep)]);
    assert_eq!(o.status.code(), Some(0), "{o:?}");
    for f in ["policy.txt", "plan.txt", "routing.txt", "vectors.fvecs", "params.txt"] {
        assert!(dep.join(f).exists(), "{f}");
    }

    let o = run(&["query", "--deployment", path(&dep), "--workload", path(&workload)]);
    assert_eq!(o.status.code(), Some(0), "{o:?}");
    let csv = stdout(&o);
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("qid,user,k,wall_us,dist_evals,recall"));
    let rows: Vec<Vec<String>> = lines.map(|l| l.split(',').map(String::from).collect()).collect();
    assert_eq!(rows.len(), 30);
    let mean: f64 = rows.iter().map(|r| r[5].parse::<f64>().unwrap()).sum::<f64>() / 30.0;
    assert!(mean > 0.95, "mean recall {mean}");

    fs::write(&log, "# changes\nrole_add 15 docs=1,2,3 users=0,1\ndoc_del_from_role 15 2\nuser_del 4\nrole_del 15\n").unwrap();
    let o = run(&["update", "--deployment", path(&dep), "--log", path(&log), "--alpha", "1.5", "--staleness"]);
    assert!(matches!(o.status.code(), Some(0) | Some(2)), "{o:?}");
    assert!(stdout(&o).contains("cost_gap="));
    assert!(fs::read_to_string(dep.join("policy.txt")).unwrap().contains("users="));

    // the deleted user no longer has a route
    fs::write(d.join("w4.txt"), "k=5\n4 0\n").unwrap();
    let o = run(&["query", "--deployment", path(&dep), "--workload", path(&d.join("w4.txt"))]);
    assert_eq!(o.status.code(), Some(1), "{o:?}");
}

#[test]
fn bench_prints_fixed_header() {
    let o = run(&[
        "bench", "--set", "users=40", "--set", "roles=10", "--set", "docs=800", "--set", "dim=8", "--alphas", "1.0,1.5",
        "--queries", "20", "--methods", "rls,honeybee",
    ]);
    assert_eq!(o.status.code(), Some(0), "{o:?}");
    let csv = stdout(&o);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "method,alpha_target,alpha_measured,k,seed,ef_s,mean_recall,mean_wall_us,mean_dist_evals,num_partitions");
    assert_eq!(lines.len(), 4);
    assert!(lines[1].starts_with("rls,,1.000000,"));
}

#[test]
fn bench_unreachable_target_warns() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.txt");
    let out = dir.path().join("out.csv");
    fs::write(&cfg, "generator = tree_alpha\nusers = 40\nroles = 10\ndocs = 2000\ndim = 8\nmethods = rls\nepsilon = 0.999\nef_cap = 12\nqueries = 20\n").unwrap();
    let o = run(&["bench", "--config", path(&cfg), "--out", path(&out)]);
    assert_eq!(o.status.code(), Some(2), "{o:?}");
    assert!(String::from_utf8_lossy(&o.stderr).contains("warning:"));
    assert!(fs::read_to_string(&out).unwrap().contains("# warning: row 1"));
}

#[test]
fn errors_exit_one() {
    assert_eq!(run(&["plan", "--policy", "/nonexistent/p.txt", "--out", "/tmp/x"]).status.code(), Some(1));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(run(&["bench", "--set", "epsilon=2"]).status.code(), Some(1));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}
