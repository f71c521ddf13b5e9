use gdflow::config::RunConfig;
use gdflow::model::{save_checkpoint, ModelConfig, ModelParams};
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn gdflow(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gdflow"))
        .args(args)
        .env("GDFLOW_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn p(dir: &Path, name: &str) -> String {
    dir.join(name).to_string_lossy().into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn small_model() -> ModelConfig {
    ModelConfig {
        d: 2,
        d_h: 4,
        order: 2,
        k: 4,
        heads: 1,
        key_dim: 2,
        lift_hidden: 8,
        ..ModelConfig::default()
    }
}

#[test]
fn synth_noise_free_and_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let o = gdflow(&["synth", "--shape", "sphere", "--n", "256", "--noise", "0", "--seed", "3", "--out", &p(d, "a.xyz"), "--clean", &p(d, "c.xyz")]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(std::fs::read(d.join("a.xyz")).unwrap(), std::fs::read(d.join("c.xyz")).unwrap());

    let args = |out: &str| vec!["synth", "--shape", "torus", "--n", "300", "--noise", "0.02", "--seed", "9", "--out", out].into_iter().map(String::from).collect::<Vec<_>>();
    for out in ["t1.xyz", "t2.xyz"] {
        let a = args(&p(d, out));
        let a: Vec<&str> = a.iter().map(|s| s.as_str()).collect();
        assert!(gdflow(&a).status.success());
    }
    assert_eq!(std::fs::read(d.join("t1.xyz")).unwrap(), std::fs::read(d.join("t2.xyz")).unwrap());
}

#[test]
fn synth_rejects_unknown_shape() {
    let dir = tempfile::tempdir().unwrap();
    let o = gdflow(&["synth", "--shape", "pyramid", "--n", "64", "--out", &p(dir.path(), "x.xyz")]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("pyramid"));
}

#[test]
fn eval_hand_cases() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("a.xyz"), "0 0 0\n").unwrap();
    std::fs::write(d.join("b.xyz"), "1 0 0\n").unwrap();
    std::fs::write(d.join("c.xyz"), "0 0 0\n5 0 0\n").unwrap();

    let o = gdflow(&["eval", "--ref", &p(d, "a.xyz"), "--test", &p(d, "b.xyz"), "--metrics", "cd,emd,hd,rmsd"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["cd"], 2.0);
    assert_eq!(v["emd"], 1.0);
    assert_eq!(v["hd"], 1.0);
    assert_eq!(v["rmsd"], 1.0);
    assert_eq!(v["n_ref"], 1);
    assert_eq!(v["emd_exact"], true);

    let o = gdflow(&["eval", "--ref", &p(d, "c.xyz"), "--test", &p(d, "c.xyz")]);
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    for k in ["cd", "emd", "hd", "rmsd"] {
        assert_eq!(v[k], 0.0);
    }

    let o = gdflow(&["eval", "--ref", &p(d, "a.xyz"), "--test", &p(d, "c.xyz"), "--metrics", "hd"]);
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["hd"], 5.0);
    assert!(v["cd"].is_null());

    let o = gdflow(&["eval", "--ref", &p(d, "a.xyz"), "--test", &p(d, "c.xyz"), "--metrics", "cd,emd"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(o.stdout.is_empty());
}

#[test]
fn filter_response_csv() {
    let dir = tempfile::tempdir().unwrap();
    let out = p(dir.path(), "r.csv");
    let o = gdflow(&["filter-response", "--basis", "bernstein", "--K", "3", "--theta", "0.5,0.5,0.5,0.5", "--grid", "11", "--out", &out]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(&out).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows[0], "lambda,response");
    assert_eq!(rows.len(), 12);
    let vals: Vec<f64> = rows[1..].iter().map(|r| r.split(',').nth(1).unwrap().parse().unwrap()).collect();
    for v in &vals {
        assert!((v - vals[0]).abs() < 1e-8 && *v <= 1.0);
    }

    let o = gdflow(&["filter-response", "--filter", "ppr", "--theta", "1", "--grid", "5"]);
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.lines().skip(1).all(|r| r.ends_with(",1.00000000")), "{text}");

    let o = gdflow(&["filter-response", "--filter", "ppr", "--theta", "0"]);
    assert_eq!(o.status.code(), Some(2));

    let o = gdflow(&["filter-response", "--basis", "bernstein", "--K", "4", "--theta", "1,-1"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn selftest_clean_and_faulty() {
    let o = gdflow(&["selftest"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let suites: Vec<&str> = v["suites"].as_array().unwrap().iter().map(|s| s["suite"].as_str().unwrap()).collect();
    assert_eq!(suites, ["grad-check", "bernstein-bound", "rk4-order", "kronecker-spectrum"]);

    let o = gdflow(&["selftest", "--inject-fault", "spmm"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("spmm"));
}

fn write_config(dir: &Path, iterations: usize) -> PathBuf {
    let mut cfg = RunConfig::default();
    cfg.model = small_model();
    cfg.train.iterations = iterations;
    cfg.train.batch_size = 2;
    cfg.train.patch_size = 64;
    cfg.train.val_every = 2;
    let path = dir.join("cfg.json");
    std::fs::write(&path, cfg.to_json()).unwrap();
    path
}

fn write_data(dir: &Path) -> (PathBuf, PathBuf) {
    let data = dir.join("data");
    let val = dir.join("val");
    std::fs::create_dir_all(&data).unwrap();
    std::fs::create_dir_all(&val).unwrap();
    for (i, shape) in ["sphere", "torus"].iter().enumerate() {
        let seed = i.to_string();
        assert!(gdflow(&["synth", "--shape", shape, "--n", "128", "--seed", &seed, "--out", &p(&data, &format!("{shape}.xyz"))]).status.success());
    }
    assert!(gdflow(&["synth", "--shape", "sphere", "--n", "96", "--seed", "7", "--out", &p(&val, "v.xyz")]).status.success());
    (data, val)
}

#[test]
fn train_then_denoise() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = write_config(d, 3);
    let (data, val) = write_data(d);
    let ckpt = p(d, "ckpt");
    let o = gdflow(&["train", "--config", &cfg.to_string_lossy(), "--data", &data.to_string_lossy(), "--val", &val.to_string_lossy(), "--out", &ckpt]);
    assert!(o.status.success(), "{}", stderr(&o));
    let summary: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(summary["best_val_cd"].as_f64().unwrap() <= summary["initial_val_cd"].as_f64().unwrap());
    let log = std::fs::read_to_string(d.join("ckpt/train_log.csv")).unwrap();
    assert_eq!(log.lines().next(), Some("iter,loss,lr,val_cd"));
    assert!(d.join("ckpt/best/manifest.json").exists());

    assert!(gdflow(&["synth", "--shape", "sphere", "--n", "80", "--noise", "0.02", "--seed", "4", "--out", &p(d, "noisy.xyz")]).status.success());
    let o = gdflow(&["denoise", "--ckpt", &ckpt, "--in", &p(d, "noisy.xyz"), "--out", &p(d, "out.xyz")]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = gdflow(&["denoise", "--ckpt", &ckpt, "--in", &p(d, "noisy.xyz"), "--out", &p(d, "snap.xyz"), "--snapshots", "0.5,1.0"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(d.join("snap.t0.5.xyz").exists());
    assert_eq!(std::fs::read(d.join("snap.t1.0.xyz")).unwrap(), std::fs::read(d.join("out.xyz")).unwrap());

    let o = gdflow(&["denoise", "--ckpt", &ckpt, "--in", &p(d, "noisy.xyz"), "--out", &p(d, "bad.xyz"), "--snapshots", "0.25"]);
    assert_eq!(o.status.code(), Some(2));
    let o = gdflow(&["denoise", "--ckpt", &ckpt, "--in", &p(d, "noisy.xyz"), "--out", &p(d, "v.xyz"), "--variant", "dtl-gcn"]);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn zero_iterations_and_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = write_config(d, 0);
    let (data, val) = write_data(d);
    let run = |cfg: &Path, out: &str| {
        gdflow(&["train", "--config", &cfg.to_string_lossy(), "--data", &data.to_string_lossy(), "--val", &val.to_string_lossy(), "--out", out])
    };
    let o = run(&cfg, &p(d, "zero"));
    assert!(o.status.success(), "{}", stderr(&o));
    let (params, mcfg) = gdflow::model::load_checkpoint(&d.join("zero"), None).unwrap();
    let init = ModelParams::init(&mcfg, 0).unwrap();
    for ((n, a), (_, b)) in params.named().iter().zip(init.named()) {
        assert_eq!(a.data(), b.data(), "{n}");
    }

    let mut v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&cfg).unwrap()).unwrap();
    v["train"].as_object_mut().unwrap().remove("lr_min");
    std::fs::write(d.join("missing.json"), v.to_string()).unwrap();
    let o = run(&d.join("missing.json"), &p(d, "m"));
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("train.lr_min"), "{}", stderr(&o));

    let o = gdflow(&["train", "--config", &cfg.to_string_lossy(), "--data", &p(d, "nowhere"), "--val", &val.to_string_lossy(), "--out", &p(d, "x")]);
    assert_ne!(o.status.code(), Some(0));
}

#[test]
fn denoise_zero_head_is_identity_and_checks_dims() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = small_model();
    let params = ModelParams::init(&cfg, 1).unwrap();
    save_checkpoint(&d.join("ck"), &params, &cfg).unwrap();
    assert!(gdflow(&["synth", "--shape", "cube", "--n", "64", "--noise", "0.01", "--out", &p(d, "n.xyz")]).status.success());
    let o = gdflow(&["denoise", "--ckpt", &p(d, "ck"), "--in", &p(d, "n.xyz"), "--out", &p(d, "o.xyz")]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(std::fs::read(d.join("n.xyz")).unwrap(), std::fs::read(d.join("o.xyz")).unwrap());

    // tamper with d_h so the stored tensors no longer fit
    let manifest = d.join("ck/manifest.json");
    let mut m: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&manifest).unwrap()).unwrap();
    m["config"]["d_h"] = 6.into();
    std::fs::write(&manifest, m.to_string()).unwrap();
    let o = gdflow(&["denoise", "--ckpt", &p(d, "ck"), "--in", &p(d, "n.xyz"), "--out", &p(d, "o2.xyz")]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn bad_thread_count_is_usage_error() {
    let o = Command::new(env!("CARGO_BIN_EXE_gdflow"))
        .args(["selftest"])
        .env("GDFLOW_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}
