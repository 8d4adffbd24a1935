use std::path::Path;
use std::process::{Command, Output};

use nbf::pipeline::{BeamExport, DatasetManifest};
use nbf::tensor::{Dtype, Tensor};
use num_complex::Complex64;

fn nbf(args: &[&str], out: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_nbf"));
    cmd.args(args).env_remove("NBF_DATA_DIR");
    if let Some(dir) = out {
        cmd.arg("--out").arg(dir);
    }
    cmd.output().expect("spawn nbf")
}

fn ok(o: &Output) {
    assert!(
        o.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        o.status.code(),
        String::from_utf8_lossy(&o.stdout),
        String::from_utf8_lossy(&o.stderr)
    );
}

/// Two 1.5 s items at 0 dB SIR.
fn small_config(dir: &Path) -> String {
    let path = dir.join("config.json");
    std::fs::write(&path, r#"{"test_sirs_db": [0.0], "items_per_sir": 2, "duration_s": 1.5}"#).unwrap();
    path.to_str().unwrap().to_owned()
}

#[test]
fn help_lists_every_subcommand() {
    let o = nbf(&["--help"], None);
    ok(&o);
    let text = String::from_utf8_lossy(&o.stdout);
    for sub in ["design", "simulate", "enhance", "eval", "export-beams"] {
        assert!(text.contains(sub), "{sub} missing from help");
    }
    let o = nbf(&["simulate", "--help"], None);
    let text = String::from_utf8_lossy(&o.stdout);
    for flag in ["--config", "--seed", "--out", "--provider", "--beams", "--jobs"] {
        assert!(text.contains(flag), "{flag} missing from help");
    }
}

#[test]
fn design_writes_bank_with_expected_dims() {
    let tmp = tempfile::tempdir().unwrap();
    ok(&nbf(&["design"], Some(tmp.path())));
    assert_eq!(Tensor::load(tmp.path().join("bank.nbf")).unwrap().dims(), &[19, 257, 9]);
    let info: serde_json::Value = serde_json::from_slice(&std::fs::read(tmp.path().join("bank.json")).unwrap()).unwrap();
    assert_eq!(info["look_angles_deg"].as_array().unwrap().len(), 19);

    ok(&nbf(&["design", "--beams", "10"], Some(tmp.path())));
    assert_eq!(Tensor::load(tmp.path().join("bank.nbf")).unwrap().dims(), &[10, 257, 9]);
}

#[test]
fn data_dir_comes_from_the_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_nbf"))
        .args(["design", "--beams", "5"])
        .env("NBF_DATA_DIR", tmp.path())
        .output()
        .unwrap();
    ok(&o);
    assert!(tmp.path().join("bank.nbf").exists());
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let code = |o: Output| o.status.code();

    assert_eq!(code(nbf(&["design", "--provider", "psychic"], Some(tmp.path()))), Some(2));
    assert_eq!(code(nbf(&["design", "--beams", "1"], Some(tmp.path()))), Some(2));

    let bad = tmp.path().join("bad.json");
    std::fs::write(&bad, r#"{"beams": 19, "colour": "blue"}"#).unwrap();
    assert_eq!(code(nbf(&["design", "--config", bad.to_str().unwrap()], Some(tmp.path()))), Some(2));

    let missing = tmp.path().join("missing.json");
    assert_eq!(code(nbf(&["design", "--config", missing.to_str().unwrap()], Some(tmp.path()))), Some(3));

    let empty = tmp.path().join("empty");
    assert_eq!(code(nbf(&["enhance"], Some(&empty))), Some(3));
    assert_eq!(code(nbf(&["eval"], Some(&empty))), Some(3));
}

#[test]
fn end_to_end_is_deterministic_and_oracle_identity_holds() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for (dir, jobs) in [(&a, "1"), (&b, "3")] {
        ok(&nbf(&["simulate", "--config", &cfg, "--seed", "5", "--jobs", jobs], Some(dir)));
        for provider in ["nearest_beam", "perfect_residual"] {
            ok(&nbf(&["enhance", "--config", &cfg, "--provider", provider, "--jobs", jobs], Some(dir)));
            ok(&nbf(&["eval", "--config", &cfg, "--provider", provider, "--jobs", jobs], Some(dir)));
        }
    }
    for rel in ["manifest.json", "eval/nearest_beam/metrics.csv", "eval/perfect_residual/metrics.csv"] {
        assert_eq!(std::fs::read(a.join(rel)).unwrap(), std::fs::read(b.join(rel)).unwrap(), "{rel}");
    }
    let manifest = DatasetManifest::load(&a).unwrap();
    assert_eq!(manifest.seed, 5);
    assert_eq!(manifest.items.len(), 2);
    manifest.verify(&a).unwrap();

    let csv = std::fs::read_to_string(a.join("eval/perfect_residual/metrics.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("utterance,condition,si_sdr_db,estoi"));
    for line in lines {
        let cols: Vec<&str> = line.split(',').collect();
        assert_eq!(cols[2].parse::<f64>().unwrap(), 100.0, "{line}");
        assert!((cols[3].parse::<f64>().unwrap() - 1.0).abs() < 1e-9, "{line}");
    }

    // a different seed gives a different dataset
    let c = tmp.path().join("c");
    ok(&nbf(&["simulate", "--config", &cfg, "--seed", "6"], Some(&c)));
    assert_ne!(std::fs::read(a.join("manifest.json")).unwrap(), std::fs::read(c.join("manifest.json")).unwrap());
}

#[test]
fn exported_beams_feed_the_external_tensor_provider() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let out = tmp.path().join("data");
    ok(&nbf(&["simulate", "--config", &cfg], Some(&out)));
    ok(&nbf(&["export-beams", "--config", &cfg], Some(&out)));

    let index: BeamExport = serde_json::from_slice(&std::fs::read(out.join("beams/index.json")).unwrap()).unwrap();
    assert_eq!(index.look_angles_deg.len(), 19);
    assert_eq!(index.num_bins, 257);
    let tensors = out.join("tensors");
    for item in &index.items {
        let beams = Tensor::load(out.join("beams").join(&item.beams)).unwrap();
        assert_eq!(beams.dims(), &[19, item.frames, 257]);
        let reference = Tensor::load(out.join("beams").join(&item.reference)).unwrap();
        assert_eq!(reference.dims(), &[item.frames, 257]);
        let target = Tensor::load(out.join("beams").join(&item.target)).unwrap();

        // all weight on no beam, residual = clean target: exact reconstruction
        Tensor::zeros(&[19, item.frames, 257])
            .save(tensors.join(format!("{}.weights.nbf", item.id)), Dtype::Complex64)
            .unwrap();
        target.save(tensors.join(format!("{}.residual.nbf", item.id)), Dtype::Complex64).unwrap();
    }
    ok(&nbf(&["enhance", "--config", &cfg, "--provider", "external_tensor"], Some(&out)));
    ok(&nbf(&["eval", "--config", &cfg, "--provider", "external_tensor"], Some(&out)));
    let csv = std::fs::read_to_string(out.join("eval/external_tensor/metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    for line in csv.lines().skip(1) {
        let sdr: f64 = line.split(',').nth(2).unwrap().parse().unwrap();
        assert!(sdr > 40.0, "{line}");
    }

    // non-finite tensors are a numerical failure
    let item = &index.items[0];
    let mut bad = Tensor::zeros(&[19, item.frames, 257]);
    bad.data_mut()[0] = Complex64::new(f64::NAN, 0.0);
    bad.save(tensors.join(format!("{}.weights.nbf", item.id)), Dtype::Complex64).unwrap();
    let o = nbf(&["enhance", "--config", &cfg, "--provider", "external_tensor"], Some(&out));
    assert_eq!(o.status.code(), Some(4), "{}", String::from_utf8_lossy(&o.stderr));

    // wrong shapes are a configuration problem, missing files an I/O one
    Tensor::zeros(&[3, 2, 1])
        .save(tensors.join(format!("{}.weights.nbf", item.id)), Dtype::Complex64)
        .unwrap();
    let o = nbf(&["enhance", "--config", &cfg, "--provider", "external_tensor"], Some(&out));
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
    std::fs::remove_file(tensors.join(format!("{}.weights.nbf", item.id))).unwrap();
    let o = nbf(&["enhance", "--config", &cfg, "--provider", "external_tensor"], Some(&out));
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}
