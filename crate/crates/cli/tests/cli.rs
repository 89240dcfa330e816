use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_rfmoe"))
}

fn repo(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// A short micro run written into `dir`.
fn micro_config(dir: &Path, steps: usize) -> PathBuf {
    let text = fs::read_to_string(repo("configs/micro_rf.toml"))
        .unwrap()
        .replace("steps = 40", &format!("steps = {steps}"));
    let path = dir.join("micro.toml");
    fs::write(&path, text).unwrap();
    path
}

#[test]
fn train_writes_metrics_checkpoint_and_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = micro_config(dir.path(), 12);
    let out = dir.path().join("run");
    let o = run(bin().args(["train", "--config"]).arg(&cfg).arg("--out").arg(&out));
    assert!(o.status.success(), "{}", stderr(&o));

    let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
    let mut lines = metrics.lines();
    assert_eq!(
        lines.next().unwrap(),
        "step,loss_total,loss_lm,loss_lb,lambda,rho,rho_tilde,rho_l0,rho_l1,val_loss"
    );
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 12);
    assert!(rows.iter().all(|r| r.len() == 10));
    assert_eq!(rows[0][9], "");
    assert!(!rows[9][9].is_empty() && !rows[11][9].is_empty());
    assert!(out.join("model.ckpt").exists());

    let resolved = fs::read_to_string(out.join("config.toml")).unwrap();
    assert!(resolved.contains("steps = 12"));

    // Rerunning the resolved config reproduces the metrics exactly.
    let again = dir.path().join("again");
    let o = run(bin().args(["train", "--config"]).arg(out.join("config.toml")).arg("--out").arg(&again));
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read_to_string(again.join("metrics.csv")).unwrap(), metrics);
}

#[test]
fn seed_flag_changes_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = micro_config(dir.path(), 3);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(run(bin().args(["train", "--config"]).arg(&cfg).arg("--out").arg(&a)).status.success());
    assert!(run(bin().args(["train", "--seed", "7", "--config"]).arg(&cfg).arg("--out").arg(&b))
        .status
        .success());
    assert_ne!(
        fs::read_to_string(a.join("metrics.csv")).unwrap(),
        fs::read_to_string(b.join("metrics.csv")).unwrap()
    );
    assert!(fs::read_to_string(b.join("config.toml")).unwrap().contains("seed = 7"));
}

#[test]
fn invalid_config_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let text = fs::read_to_string(repo("configs/micro_topk.toml"))
        .unwrap()
        .replace("k = 1", "k = 9");
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, text).unwrap();
    let o = run(bin().args(["train", "--config"]).arg(&cfg).arg("--out").arg(dir.path().join("x")));
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("model.gate.k"), "{}", stderr(&o));

    let text = fs::read_to_string(repo("configs/micro_rf.toml")).unwrap().replace("lr =", "learning_rate =");
    fs::write(&cfg, text).unwrap();
    let o = run(bin().args(["train", "--config"]).arg(&cfg));
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("learning_rate"), "{}", stderr(&o));
}

#[test]
fn gradcheck_passes_and_detects_a_fault() {
    for cfg in ["configs/micro_rf.toml", "configs/micro_topk.toml"] {
        let o = run(bin().args(["gradcheck", "--config"]).arg(repo(cfg)));
        assert!(o.status.success(), "{cfg}: {}{}", stdout(&o), stderr(&o));
        assert!(stdout(&o).contains("PASS"));
    }
    let o = run(bin()
        .args(["gradcheck", "--inject-fault", "--samples", "10", "--config"])
        .arg(repo("configs/micro_rf.toml")));
    assert_eq!(o.status.code(), Some(2));
    assert!(stdout(&o).contains("FAIL"));
}

#[test]
fn simep_device_sweep() {
    let o = run(bin().args(["simep", "--grid"]).arg(repo("configs/grid_m_sweep.csv")));
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let h = rdr.headers().unwrap().clone();
    let col = |name: &str| h.iter().position(|c| c == name).unwrap();
    let (m, db, ag) = (col("m"), col("delta_b"), col("rf_t_ag"));
    let rows: Vec<csv::StringRecord> = rdr.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 6);
    for r in &rows {
        let mv: usize = r[m].parse().unwrap();
        let d: f64 = r[db].parse().unwrap();
        assert_eq!(d.partial_cmp(&0.0), (4i64 - mv as i64).partial_cmp(&0), "m = {mv}");
        if mv == 1 {
            assert_eq!(r[ag].parse::<f64>().unwrap(), 0.0);
        }
    }
}

#[test]
fn simep_skips_bad_rows_and_fails_when_none_remain() {
    let dir = tempfile::tempdir().unwrap();
    let grid = dir.path().join("grid.csv");
    let header = "n,m,t,d,d_act,r,k,bytes,alpha,bandwidth,compute_rate\n";
    fs::write(&grid, format!("{header}12,5,1,8,8,1,1,2,1e-6,1e9,1e12\n12,4,1,8,8,1,1,2,1e-6,1e9,1e12\n")).unwrap();
    let o = run(bin().args(["simep", "--grid"]).arg(&grid));
    assert!(o.status.success());
    assert!(stderr(&o).contains("row 1"));
    assert_eq!(stdout(&o).lines().count(), 2);

    fs::write(&grid, format!("{header}12,5,1,8,8,1,1,2,1e-6,1e9,1e12\n")).unwrap();
    let o = run(bin().args(["simep", "--grid"]).arg(&grid));
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn simep_thousand_points_is_fast() {
    let dir = tempfile::tempdir().unwrap();
    let grid = dir.path().join("grid.csv");
    let mut text = String::from("n,m,t,d,d_act,r,k,bytes,alpha,bandwidth,compute_rate\n");
    for i in 0..1000 {
        let m = [1, 2, 3, 4, 6, 12][i % 6];
        text.push_str(&format!("12,{m},{},512,128,{},3,2,5e-6,1e11,1e13\n", 1 + i, 1 + i % 100));
    }
    fs::write(&grid, text).unwrap();
    let out = dir.path().join("out.csv");
    let start = std::time::Instant::now();
    let o = run(bin().args(["simep", "--grid"]).arg(&grid).arg("--out").arg(&out));
    let elapsed = start.elapsed();
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read_to_string(&out).unwrap().lines().count(), 1001);
    assert!(elapsed.as_secs_f64() < 1.0, "{elapsed:?}");
}

#[test]
fn stats_reproduce_the_published_comparison() {
    let o = run(bin().args(["stats", "--format", "csv", "--pairs"]).arg(fixture("pairs_all.csv")));
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "n,mean_delta,t,p,d,wins,losses");
    let v: Vec<&str> = lines.next().unwrap().split(',').collect();
    let f = |i: usize| v[i].parse::<f64>().unwrap();
    assert_eq!(v[0], "27");
    assert!((f(1) - 0.77).abs() < 0.01);
    assert!((f(2) - 1.858).abs() < 0.01);
    assert!((f(3) - 0.037).abs() < 0.002);
    assert!((f(4) - 0.358).abs() < 0.01);
    assert_eq!((v[5], v[6]), ("16", "11"));

    let o = run(bin().args(["stats", "--pairs"]).arg(fixture("pairs_small.csv")));
    assert!(o.status.success());
    assert!(stdout(&o).contains("1.48"), "{}", stdout(&o));
}

#[test]
fn stats_reports_the_malformed_row() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("pairs.csv");
    fs::write(&p, "a,b\n1,2\n2,3.5\nx,4\n").unwrap();
    let o = run(bin().args(["stats", "--pairs"]).arg(&p));
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("row 3"), "{}", stderr(&o));
}

#[test]
fn sweep_theta_from_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = micro_config(dir.path(), 2);
    let out = dir.path().join("run");
    assert!(run(bin().args(["train", "--config"]).arg(&cfg).arg("--out").arg(&out)).status.success());
    let ckpt = out.join("model.ckpt");
    let sweep = |thetas: &str| {
        run(bin()
            .args(["sweep-theta", "--batch-size", "4", "--batches", "2", "--corpus-tokens", "2000", "--thetas", thetas])
            .arg("--checkpoint")
            .arg(&ckpt))
    };
    let o = sweep("0.5,1.0,1.5");
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.starts_with("theta,rho_eff,flops,val_loss\n"));
    let rho: Vec<f64> = text
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
        .collect();
    assert_eq!(rho.len(), 3);
    assert!(rho.windows(2).all(|w| w[1] <= w[0]));

    let o = sweep("1.0");
    assert_eq!(stdout(&o).lines().count(), 2);
    let o = sweep("");
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn sweep_theta_rejects_a_routed_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let text = fs::read_to_string(repo("configs/micro_topk.toml"))
        .unwrap()
        .replace("steps = 40", "steps = 1");
    let cfg = dir.path().join("topk.toml");
    fs::write(&cfg, text).unwrap();
    let out = dir.path().join("run");
    assert!(run(bin().args(["train", "--config"]).arg(&cfg).arg("--out").arg(&out)).status.success());
    let o = run(bin()
        .args(["sweep-theta", "--corpus-tokens", "2000", "--batch-size", "2", "--thetas", "1.0", "--checkpoint"])
        .arg(out.join("model.ckpt")));
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("model.gate"), "{}", stderr(&o));
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(run(bin().arg("bogus")).status.code(), Some(1));
    assert_eq!(run(bin().args(["train"])).status.code(), Some(1));
    assert_eq!(run(bin().args(["--help"])).status.code(), Some(0));
}
