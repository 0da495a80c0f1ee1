use std::path::Path;
use std::process::Command;

fn svco(args: &[&str]) -> i32 {
    let mut argv = vec!["svco"];
    argv.extend_from_slice(args);
    svco_cli::run(argv)
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn unknown_objective_exits_2_and_lists_choices() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_svco"))
        .args(["train", "--corpus", "c.jsonl", "--objective", "nosuch", "--out"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    for name in ["svco", "vco", "dpo", "viscon", "mdpo", "sft2"] {
        assert!(err.contains(name), "{err}");
    }
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(svco(&[]), 2);
    assert_eq!(svco(&["gen-data", "--n", "3"]), 2);
    assert_eq!(svco(&["filter", "--store", "x", "--out", "y", "--bogus"]), 2);
    assert_eq!(svco(&["report", "--base", "b.json"]), 2);
}

#[test]
fn runtime_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let missing = d.join("missing.jsonl");
    assert_eq!(svco(&["train", "--corpus", p(&missing), "--out", p(&d.join("run"))]), 1);
    assert_eq!(svco(&["gen-data", "--n", "0", "--out", p(&d.join("c.jsonl"))]), 1);
    assert_eq!(svco(&["report", "--out", p(&d.join("r.json"))]), 1);

    std::fs::write(d.join("bad.bin"), b"not a store").unwrap();
    assert_eq!(
        svco(&["filter", "--store", p(&d.join("bad.bin")), "--out", p(&d.join("k.jsonl"))]),
        1
    );
    std::fs::write(d.join("bad.ckpt"), b"SVCOCKPT").unwrap();
    assert_eq!(
        svco(&["eval", "--checkpoint", p(&d.join("bad.ckpt")), "--corpus", p(&missing)]),
        1
    );
}

#[test]
fn bad_config_values_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let corpus = d.join("c.jsonl");
    assert_eq!(svco(&["gen-data", "--n", "8", "--out", p(&corpus)]), 0);
    let cfg = d.join("cfg.txt");
    std::fs::write(&cfg, "objective = svco\nepochs = zero\n").unwrap();
    assert_eq!(
        svco(&["train", "--corpus", p(&corpus), "--config", p(&cfg), "--out", p(&d.join("r"))]),
        1
    );
    assert_eq!(
        svco(&["train", "--corpus", p(&corpus), "--batch-size", "0", "--out", p(&d.join("r"))]),
        1
    );
}

#[test]
fn full_pipeline_smoke() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let (corpus, store, kept, aug, run) = (
        d.join("corpus.jsonl"),
        d.join("store.bin"),
        d.join("kept.jsonl"),
        d.join("aug.jsonl"),
        d.join("run"),
    );
    assert_eq!(
        svco(&["gen-data", "--n", "60", "--seed", "4", "--shortcut", "--out", p(&corpus), "--store", p(&store)]),
        0
    );
    assert_eq!(
        svco(&["filter", "--store", p(&store), "--out", p(&kept), "--report", p(&d.join("filter.json"))]),
        0
    );
    assert_eq!(
        svco(&["augment", "--in", p(&corpus), "--kept", p(&kept), "--out", p(&aug), "--cache", p(&d.join("cache"))]),
        0
    );
    let cfg = d.join("cfg.txt");
    std::fs::write(&cfg, "# short run\nepochs = 2\nbatch-size = 8\nholdout_fraction = 0.2\n").unwrap();
    assert_eq!(
        svco(&[
            "train", "--corpus", p(&corpus), "--kept", p(&kept), "--config", p(&cfg),
            "--checkpoint-interval", "2", "--learning-rate", "0.1", "--out", p(&run),
        ]),
        0
    );
    assert!(run.join("run.jsonl").exists());
    assert!(run.join("final.ckpt").exists());
    assert!(run.join("config.txt").exists());

    let ckpt = run.join("final.ckpt");
    let eval = d.join("eval.json");
    assert_eq!(
        svco(&["eval", "--checkpoint", p(&ckpt), "--corpus", p(&corpus), "--strip-style", "--out", p(&eval), "--csv", p(&d.join("eval.csv"))]),
        0
    );
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(&eval).unwrap()).unwrap();
    let acc = report["pair_accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));

    let probe = d.join("probe.json");
    assert_eq!(svco(&["probe", "--checkpoint", p(&ckpt), "--corpus", p(&corpus), "--out", p(&probe)]), 0);
    let pr: serde_json::Value = serde_json::from_slice(&std::fs::read(&probe).unwrap()).unwrap();
    let hist: u64 = pr["histogram"].as_object().unwrap().values().map(|v| v.as_u64().unwrap()).sum();
    assert_eq!(hist, pr["n"].as_u64().unwrap());

    let sel = d.join("select.json");
    assert_eq!(svco(&["report", "--run", p(&run), "--out", p(&sel)]), 0);
    let s: serde_json::Value = serde_json::from_slice(&std::fs::read(&sel).unwrap()).unwrap();
    assert!(s["selected_checkpoint"].as_str().unwrap().ends_with(".ckpt"));
}

#[test]
fn report_aggregates_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("base.json"), r#"{"acc": 50.0, "hal_rate": 40.0}"#).unwrap();
    std::fs::write(d.join("tuned.json"), r#"{"acc": 55.0, "hal_rate": 30.0}"#).unwrap();
    std::fs::write(
        d.join("dep.csv"),
        "metric,with_images,without_images,improvement\na,80,40,10\nb,50,45,2\nc,60,60,0\n",
    )
    .unwrap();
    let out = d.join("agg.json");
    assert_eq!(
        svco(&[
            "report", "--base", p(&d.join("base.json")), "--tuned", p(&d.join("tuned.json")),
            "--lower-better", "hal_rate", "--dependency", p(&d.join("dep.csv")), "--out", p(&out),
        ]),
        0
    );
    let v: serde_json::Value = serde_json::from_slice(&std::fs::read(&out).unwrap()).unwrap();
    // ((55-50)/50 + (40-30)/40) / 2 = 17.5%
    assert!((v["avg_improvement_pct"].as_f64().unwrap() - 17.5).abs() < 1e-12);
    // Dependencies 0.5, 0.1, 0; slope of improvement on dependency.
    let slope = v["improvement_vs_dependency_slope"].as_f64().unwrap();
    let xs = [0.5, 0.1, 0.0];
    let ys = [10.0, 2.0, 0.0];
    let (mx, my) = (0.2, 4.0);
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    assert!((slope - sxy / sxx).abs() < 1e-9, "{slope}");
}
