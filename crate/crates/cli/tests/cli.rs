use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use depthforge::pipeline::write_primitive_models;

fn depthforge(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_depthforge"))
        .args(args)
        .env("DEPTHFORGE_LOG", "error")
        .output()
        .expect("spawn depthforge")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn two_models(dir: &Path) {
    write_primitive_models(dir, 1, 3).unwrap();
    for class in ["box", "sphere", "cone"] {
        fs::remove_dir_all(dir.join(class)).unwrap();
    }
}

#[test]
fn gen_is_deterministic_across_jobs() {
    let tmp = tempfile::tempdir().unwrap();
    let models = tmp.path().join("models");
    two_models(&models);
    let mut manifests = Vec::new();
    for (run, jobs) in [("a", "1"), ("b", "1"), ("c", "8")] {
        let out = tmp.path().join(run);
        let o = depthforge(&[
            "gen",
            "--models",
            models.to_str().unwrap(),
            "--count",
            "100",
            "--seed",
            "7",
            "--jobs",
            jobs,
            "--output",
            out.to_str().unwrap(),
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        let manifest = fs::read(out.join("manifest.jsonl")).unwrap();
        let rows = manifest.split(|&b| b == b'\n').filter(|l| !l.is_empty()).count();
        let dedup = fs::read_to_string(out.join("dedup.csv")).unwrap();
        let kept: usize = dedup
            .lines()
            .skip(1)
            .map(|l| l.split(',').nth(2).unwrap().parse::<usize>().unwrap())
            .sum();
        assert_eq!(rows, kept);
        assert_eq!(dedup.lines().count(), 3);
        manifests.push((manifest, fs::read(out.join("hashes.csv")).unwrap()));
    }
    assert_eq!(manifests[0], manifests[1]);
    assert_eq!(manifests[0], manifests[2]);
}

fn write_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("run.toml");
    fs::write(
        &path,
        "seed = 5\n\n[paths]\nmodels = \"models\"\noutput = \"out\"\n\n[render]\nresolution = 64\ncount = 8\n\n\
         [train]\ntotal_epochs = 1\nfirst_step_epochs = 1\n\n[eval]\nc_grid = [1.0]\ncv_folds = 2\n",
    )
    .unwrap();
    path
}

#[test]
fn stages_from_config_file() {
    let tmp = tempfile::tempdir().unwrap();
    write_primitive_models(&tmp.path().join("models"), 2, 4).unwrap();
    let cfg = write_config(tmp.path());
    let cfg = cfg.to_str().unwrap();
    let out = tmp.path().join("out");
    for args in [
        vec!["gen", "--config", cfg],
        vec!["dedup-report", "--threshold", "0", "--config", cfg],
        vec!["train", "--config", cfg],
        vec!["extract", "--layer", "pool_last", "--preproc", "minmax", "--config", cfg],
        vec!["eval", "--config", cfg],
        vec!["fuse", "--p", "2", "--C", "1", "--config", cfg],
    ] {
        let o = depthforge(&args);
        assert!(o.status.success(), "{args:?}: {}", stderr(&o));
    }
    for f in [
        "manifest.jsonl",
        "reports/dedup_report.csv",
        "net/weights.bin",
        "net/curve.csv",
        "features/pool_last_minmax.bin",
        "reports/eval.csv",
        "reports/fusion.csv",
    ] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    let curve = fs::read_to_string(out.join("net/curve.csv")).unwrap();
    assert!(curve.starts_with("epoch,lr,loss,train_acc\n"));

    let o = depthforge(&["extract", "--layer", "fc9", "--config", cfg]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("convnet") && err.contains("unknown layer `fc9`"), "{err}");
}

#[test]
fn errors_exit_with_code_two() {
    let o = depthforge(&["render-all"]);
    assert_eq!(o.status.code(), Some(2));

    let tmp = tempfile::tempdir().unwrap();
    let o = depthforge(&["gen", "--models", tmp.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("seed"), "{}", stderr(&o));

    let o = depthforge(&["gen", "--seed", "1", "--models", tmp.path().join("nope").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("paths.models"), "{}", stderr(&o));

    let bad = tmp.path().join("bad.toml");
    fs::write(&bad, "seed = 1\n[render]\ncount = 0\n").unwrap();
    let o = depthforge(&["train", "--config", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("render.count"), "{}", stderr(&o));

    let o = depthforge(&["extract", "--layer", "fc6", "--preproc", "zscore", "--seed", "1"]);
    assert_eq!(o.status.code(), Some(2));
}
