use std::path::Path;
use std::process::{Command, Output};

use sympgnn::data::{gen_sbm, load_dataset, SbmConfig};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sympgnn")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn train(out: &Path, extra: &[&str]) -> Output {
    let out_kv = format!("out={}", out.display());
    let mut args = vec!["train", "--config", "sbm", "--override", "epochs=15", "--override", &out_kv];
    for e in extra {
        args.push("--override");
        args.push(e);
    }
    run(&args)
}

#[test]
fn gen_data_tree_counts() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("tree");
    let o = run(&["gen-data", "--kind", "tree", "--depth", "5", "--branching", "2", "--seed", "7", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("nodes 63, edges 62"), "{}", stdout(&o));
    let ds = load_dataset(&out).unwrap();
    assert_eq!((ds.num_nodes(), ds.num_edges()), (63, 62));
}

#[test]
fn gen_data_sbm_reloads_identically() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("sbm");
    let o = run(&["gen-data", "--kind", "sbm", "--blocks", "2", "--n-per-block", "50", "--seed", "1", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let loaded = load_dataset(&out).unwrap();
    let direct = gen_sbm(&SbmConfig {
        seed: 1,
        ..SbmConfig::default()
    })
    .unwrap();
    assert_eq!(loaded.edges(), direct.edges());
    assert_eq!(loaded.features(), direct.features());
    assert_eq!(loaded.labels(), direct.labels());
    assert_eq!(loaded.split(), direct.split());
}

#[test]
fn gen_data_usage_errors() {
    let o = run(&["gen-data", "--kind", "tree"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("Usage"));
    let o = run(&["gen-data", "--kind", "sbm", "--p-in", "0.01", "--p-out", "0.5", "--out", "unused"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn train_writes_outputs_and_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    let o = train(&a, &[]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("test accuracy"));
    assert_eq!(train(&b, &[]).status.code(), Some(0));
    let report = std::fs::read(a.join("report.csv")).unwrap();
    assert_eq!(report, std::fs::read(b.join("report.csv")).unwrap());
    let text = String::from_utf8(report).unwrap();
    assert!(text.starts_with("epoch,train_loss,val_loss,val_acc,residual_l1\n"));
    assert!(std::fs::read_to_string(a.join("energy.csv")).unwrap().starts_with("epoch,layer,t,H\n"));
    for f in ["input.txt", "output.txt", "layer1_theta.txt", "layer1_phi.txt", "layer1_m.txt"] {
        assert!(a.join("checkpoint").join(f).is_file(), "{f}");
    }
    let summary: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(a.join("summary.json")).unwrap()).unwrap();
    for key in ["test_acc", "best_epoch", "variant", "seed", "config"] {
        assert!(summary.get(key).is_some(), "{key}");
    }

    let c = tmp.path().join("c");
    let mut cfg = summary["config"].clone();
    cfg["out"] = serde_json::Value::String(c.display().to_string());
    let cfg_path = tmp.path().join("echo.json");
    std::fs::write(&cfg_path, cfg.to_string()).unwrap();
    let o = run(&["train", "--config", cfg_path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(std::fs::read(c.join("report.csv")).unwrap(), std::fs::read(a.join("report.csv")).unwrap());
}

#[test]
fn variants_give_comparable_energy_files() {
    let tmp = tempfile::tempdir().unwrap();
    let s = tmp.path().join("standard");
    let m = tmp.path().join("manifold");
    assert_eq!(train(&s, &["variant=standard", "patience=100"]).status.code(), Some(0));
    assert_eq!(train(&m, &["variant=manifold", "patience=100"]).status.code(), Some(0));
    let keys = |p: &Path| -> Vec<String> {
        std::fs::read_to_string(p.join("energy.csv"))
            .unwrap()
            .lines()
            .map(|l| l.rsplit_once(',').unwrap().0.to_string())
            .collect()
    };
    assert_eq!(keys(&s), keys(&m));

    let merged = tmp.path().join("merged.csv");
    let o = run(&["energy-report", "--runs", s.to_str().unwrap(), m.to_str().unwrap(), "--out", merged.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = std::fs::read_to_string(&merged).unwrap();
    assert!(text.starts_with("variant,epoch,runs,energy_mean,energy_std,energy_drift"));
    assert_eq!(text.lines().count(), 1 + 2 * 15);
}

#[test]
fn train_error_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("x");
    assert_eq!(train(&out, &["variant=soft"]).status.code(), Some(2));
    assert_eq!(train(&out, &["bogus=1"]).status.code(), Some(2));
    assert_eq!(run(&["train", "--config", "no-such-preset"]).status.code(), Some(2));
    let o = train(&out, &["manifold_lr=1e12"]);
    assert_eq!(o.status.code(), Some(4));
    assert!(stderr(&o).contains("epoch 0"), "{}", stderr(&o));
    let missing = tmp.path().join("missing");
    let o = run(&["train", "--config", "cora-defaults", "--override", &format!("dataset={}", missing.display())]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn cora_preset_encodes_its_column() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let ds = tmp.path().join("ds");
    let o = run(&["gen-data", "--kind", "tree", "--depth", "3", "--out", ds.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    let o = run(&[
        "train",
        "--config",
        "cora-defaults",
        "--override",
        &format!("dataset={}", ds.display()),
        "--override",
        "epochs=1",
        "--override",
        &format!("out={}", out.display()),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let summary: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    let c = &summary["config"];
    assert_eq!(c["lr"], 0.01);
    assert_eq!(c["hidden"], 64);
    assert_eq!(c["layers"], 1);
    assert_eq!(c["ode_step"], 0.2);
    assert_eq!(c["max_grad_norm"], 1.0);
}

#[test]
fn check_manifold_exit_codes() {
    let o = run(&["check-manifold", "--seeds", "20"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert!(stdout(&o).contains("all 21 properties passed"));
    let o = run(&["check-manifold", "--sizes", "2,3"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("invalid sizes"));
    let o = run(&["check-manifold", "--sizes", "3,1;2,2", "--seeds", "3"]);
    assert_eq!(o.status.code(), Some(0));
}

#[test]
fn energy_report_missing_inputs() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(&["energy-report", "--runs", tmp.path().join("nope").to_str().unwrap(), "--out", tmp.path().join("m.csv").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("missing input"));
}
