use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use oraclebench_core::experiments::shift::label_marginal_kl;
use oraclebench_core::oracle::ClassPrior;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_oraclebench"));
    c.env_remove("ORACLEBENCH_OUT");
    c
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn run(kind: &str, cfg: &Path, out: &Path, extra: &[&str]) -> Output {
    bin()
        .args([kind, "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()])
        .args(extra)
        .output()
        .unwrap()
}

fn read(p: &Path) -> String {
    std::fs::read_to_string(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

const SCALING: &str = r#"{
  "kind": "scaling",
  "oracle": {"world": "scaling"},
  "seeds": [0, 1],
  "params": {
    "sizes": [32, 64, 128],
    "variants": [{"id": "mlp", "hidden": [16]}],
    "eval_size": 300,
    "epochs": 4,
    "learning_rate": 0.003
  }
}"#;

#[test]
fn scaling_run_writes_artifacts_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "scaling.json", SCALING);
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    assert!(run("scaling", &cfg, &a, &["--jobs", "1"]).status.success());
    assert!(run("scaling", &cfg, &b, &["--jobs", "1"]).status.success());
    assert!(run("scaling", &cfg, &c, &["--jobs", "4"]).status.success());

    let csv = read(&a.join("scaling.csv"));
    assert!(csv.starts_with("variant,N,seed,total_ce,aleatoric,epistemic,accuracy,ece\n"));
    assert_eq!(csv.lines().count(), 1 + 6);
    assert!(!csv.contains('\r'));
    assert_eq!(csv, read(&b.join("scaling.csv")));
    assert_eq!(csv, read(&c.join("scaling.csv")));

    let manifest: serde_json::Value = serde_json::from_str(&read(&a.join("manifest.json"))).unwrap();
    assert_eq!(manifest["kind"], "scaling");
    assert_eq!(manifest["config_sha256"].as_str().unwrap().len(), 64);
    assert_eq!(manifest["rng_scheme"], "chacha20/seed-u64/stream-u64");
    let cells = manifest["cells"].as_array().unwrap();
    assert_eq!(cells.len(), 6);
    // every row maps to a manifest cell
    for line in csv.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let id = format!("{}/N={}/seed={}", f[0], f[1], f[2]);
        assert!(cells.iter().any(|c| c["id"] == id.as_str() && c["ok"] == true), "{id}");
    }

    let fit: serde_json::Value = serde_json::from_str(&read(&a.join("fit.json"))).unwrap();
    let alpha = fit[0]["fit"]["fit"]["alpha"].as_f64().unwrap();
    let svg = read(&a.join("loglog.svg"));
    let doc = roxmltree::Document::parse(&svg).unwrap();
    let markers = doc
        .descendants()
        .filter(|n| n.attribute("class") == Some("marker"))
        .count();
    assert_eq!(markers, 6);
    let label = doc
        .descendants()
        .find(|n| n.attribute("class") == Some("alpha"))
        .and_then(|n| n.text())
        .unwrap();
    assert_eq!(label, format!("α = {alpha:.3}"));
}

#[test]
fn seed_offset_changes_results() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "scaling.json", SCALING);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(run("scaling", &cfg, &a, &[]).status.success());
    assert!(run("scaling", &cfg, &b, &["--seed-offset", "10"]).status.success());
    let csv_b = read(&b.join("scaling.csv"));
    assert!(csv_b.contains(",10,") && csv_b.contains(",11,"));
    assert_ne!(read(&a.join("scaling.csv")), csv_b);
}

#[test]
fn output_root_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "tiny.json", SCALING);
    let root = dir.path().join("root");
    let o = bin()
        .args(["scaling", "--config", cfg.to_str().unwrap()])
        .env("ORACLEBENCH_OUT", &root)
        .output()
        .unwrap();
    assert!(o.status.success());
    assert!(root.join("tiny").join("scaling.csv").exists());
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn malformed_configs_exit_2_with_location() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");

    let unknown = SCALING.replace("\"epochs\": 4,", "\"epochs\": 4,\n    \"epochz\": 4,");
    let o = run("scaling", &write(dir.path(), "u.json", &unknown), &out, &[]);
    assert_eq!(o.status.code(), Some(2));
    let e = stderr(&o);
    assert!(e.contains("epochz") && e.contains(":10:"), "{e}");
    assert!(e.contains("\"field\":\"params.epochz\""), "{e}");

    let wrong_type = SCALING.replace("[32, 64, 128]", "[32, \"x\", 128]");
    let o = run("scaling", &write(dir.path(), "t.json", &wrong_type), &out, &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("params.sizes[1]"), "{}", stderr(&o));

    let o = run("shift", &write(dir.path(), "k.json", SCALING), &out, &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("kind"));

    let missing = SCALING.replace("{\"world\": \"scaling\"}", "{\"path\": \"nope.json\"}");
    let o = run("scaling", &write(dir.path(), "m.json", &missing), &out, &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("oracle.path"));

    let no_seeds = SCALING.replace("[0, 1]", "[]");
    let o = run("scaling", &write(dir.path(), "s.json", &no_seeds), &out, &[]);
    assert_eq!(o.status.code(), Some(2));

    let o = run(
        "scaling",
        &write(dir.path(), "j.json", "{\"kind\": \"scaling\",, }"),
        &out,
        &[],
    );
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains(":1:"));
    assert!(!out.exists());
}

#[test]
fn diverging_cell_exits_1_with_cell_id() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SCALING
        .replace("\"learning_rate\": 0.003", "\"learning_rate\": 1e308")
        .replace("\"hidden\": [16]", "\"hidden\": []");
    let out = dir.path().join("o");
    let o = run("scaling", &write(dir.path(), "d.json", &cfg), &out, &[]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    assert!(stderr(&o).contains("\"cell\":\"mlp/N=32/seed=0\""), "{}", stderr(&o));
    let manifest: serde_json::Value = serde_json::from_str(&read(&out.join("manifest.json"))).unwrap();
    assert!(manifest["cells"].as_array().unwrap().iter().any(|c| c["ok"] == false));
}

#[test]
fn shift_table_reports_label_kl_targets() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = r#"{
      "kind": "shift",
      "oracle": {"world": "shift"},
      "seeds": [0],
      "params": {
        "protocol": {"n_train": 200, "test_size": 200, "epochs": 2, "hidden": [8], "n_mc": 200},
        "configs": [
          {"name": "moderate", "pi": [0.5, 0.3, 0.2], "n_train": 200},
          {"name": "strong", "pi": [0.6, 0.25, 0.15], "n_train": 200},
          {"name": "very_strong", "pi": [0.7, 0.2, 0.1], "n_train": 200},
          {"name": "noise", "pi": [0.3333333333333333, 0.3333333333333333, 0.3333333333333334], "sigma": 0.1, "n_train": 200}
        ]
      }
    }"#;
    let out = dir.path().join("o");
    let o = run("shift", &write(dir.path(), "shift.json", cfg), &out, &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = read(&out.join("shift.csv"));
    let mut rdr = csv::Reader::from_reader(csv.as_bytes());
    let headers = rdr.headers().unwrap().clone();
    let col = headers.iter().position(|h| h == "kl_y_target").unwrap();
    let name = headers.iter().position(|h| h == "config").unwrap();
    let mut seen = 0;
    for rec in rdr.records() {
        let rec = rec.unwrap();
        let v: f64 = rec[col].parse().unwrap();
        let pi = match &rec[name] {
            "moderate" => [0.5, 0.3, 0.2],
            "strong" => [0.6, 0.25, 0.15],
            "very_strong" => [0.7, 0.2, 0.1],
            _ => continue,
        };
        assert_eq!(v, label_marginal_kl(&ClassPrior::new(pi.to_vec()).unwrap()));
        seen += 1;
    }
    assert_eq!(seen, 3);
    for f in ["shift_summary.csv", "regression.json", "shift.svg", "manifest.json"] {
        assert!(out.join(f).exists(), "{f}");
    }
    roxmltree::Document::parse(&read(&out.join("shift.svg"))).unwrap();
}

#[test]
fn train_then_validate_oracle() {
    let dir = tempfile::tempdir().unwrap();
    let train = r#"{
      "kind": "train-oracle",
      "oracle": {"world": "scaling"},
      "seeds": [3],
      "out": "flow",
      "params": {
        "n_per_class": 200,
        "flow": {"layers": 2, "hidden": 8},
        "train": {"epochs": 5, "adam": {"learning_rate": 0.005}}
      }
    }"#;
    let cfg = write(dir.path(), "train.json", train);
    let o = bin()
        .args(["train-oracle", "--config", cfg.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    let flow_dir = dir.path().join("flow");
    for f in ["oracle.json", "train_data.csv", "nll.csv", "loss.svg", "manifest.json"] {
        assert!(flow_dir.join(f).exists(), "{f}");
    }
    assert!(read(&flow_dir.join("nll.csv")).starts_with("class,epoch,nll\n"));
    assert_eq!(read(&flow_dir.join("train_data.csv")).lines().count(), 601);

    let validate = r#"{
      "kind": "validate",
      "oracle": {"path": "flow/oracle.json"},
      "seeds": [3],
      "params": {
        "real": {"csv": "flow/train_data.csv"},
        "checks": {
          "self_validation": {"n_train": 300, "variants": [{"id": "small", "hidden": [8]}], "n_test": 300, "mc_samples": 500, "epochs": 3}
        },
        "histogram_bins": 12
      }
    }"#;
    let cfg = write(dir.path(), "validate.json", validate);
    let out = dir.path().join("v");
    let o = run("validate", &cfg, &out, &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_str(&read(&out.join("validation.json"))).unwrap();
    for key in ["memorization_rate", "coverage"] {
        let v = report[key].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&v), "{key} {v}");
    }
    let q: Vec<f64> = report["nn_distance_quantiles"]
        .as_object()
        .unwrap()
        .values()
        .map(|v| v.as_f64().unwrap())
        .collect();
    assert!(q.windows(2).all(|w| w[0] <= w[1]));
    let hist = read(&out.join("nn_hist.csv"));
    assert!(hist.starts_with("distance,count\n"));
    assert_eq!(hist.lines().count(), 13);
    roxmltree::Document::parse(&read(&out.join("nn_hist.svg"))).unwrap();
}

#[test]
fn softlabels_and_active_runs() {
    let dir = tempfile::tempdir().unwrap();
    let soft = r#"{
      "kind": "softlabels",
      "oracle": {"world": "soft_label"},
      "seeds": [0],
      "params": {"sizes": [50, 100], "eval_size": 200, "epochs": 3, "hidden": [8]}
    }"#;
    let out = dir.path().join("s");
    let o = run("softlabels", &write(dir.path(), "soft.json", soft), &out, &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = read(&out.join("softlabels.csv"));
    assert!(csv.starts_with("mode,N,seed,total_ce,aleatoric,epistemic,accuracy,ece\n"));
    assert!(csv.contains("\nhard,50,0,") && csv.contains("\nsoft,100,0,"));

    let active = r#"{
      "kind": "active",
      "oracle": {"world": "two_region"},
      "seeds": [0, 1],
      "params": {"pool_size": 100, "initial": 10, "batch_size": 10, "rounds": 2, "test_size": 200, "epochs": 3, "hidden": [8]}
    }"#;
    let out = dir.path().join("a");
    let o = run("active", &write(dir.path(), "active.json", active), &out, &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = read(&out.join("active.csv"));
    assert!(csv.starts_with("strategy,seed,round,labels,accuracy,epistemic,ambiguous_fraction\n"));
    assert_eq!(csv.lines().count(), 1 + 3 * 2 * 3);
    assert!(read(&out.join("efficiency.csv")).starts_with("strategy,seed,target_accuracy,labels_to_target\n"));
    let doc = read(&out.join("active.svg"));
    let d = roxmltree::Document::parse(&doc).unwrap();
    assert_eq!(
        d.descendants()
            .filter(|n| n.attribute("class") == Some("series"))
            .count(),
        3
    );
}
