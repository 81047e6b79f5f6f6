use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;
use std::time::Instant;

fn conclu(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_conclu"))
        .args(args)
        .output()
        .expect("run conclu")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        stderr(out)
    );
}

fn scratch(name: &str) -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR"))
        .join("conclu-cli")
        .join(name);
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn tiny_config(manifest: &Path, epochs: u64) -> String {
    format!(
        r#"{{
  "network": {{
    "encoder_widths": [3, 16, 32],
    "head_widths": [32, 16, 4],
    "proj_hidden": 16,
    "proj_out": 8,
    "pred_hidden": 8,
    "num_prototypes": 4
  }},
  "train": {{
    "epochs": {epochs},
    "batch_size": 4,
    "lr": 0.003,
    "checkpoint_every": 1,
    "augment": {{ "out_points": 128 }}
  }},
  "data": {{ "train_manifest": "{}" }}
}}"#,
        p(manifest)
    )
}

fn read_json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

struct Fixture {
    train_manifest: PathBuf,
    test_manifest: PathBuf,
    checkpoint: PathBuf,
}

/// Sphere-vs-plane data and a checkpoint pretrained on it, shared by the
/// probe, segment and export tests.
fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = scratch("fixture");
        let (train, test) = (dir.join("train"), dir.join("test"));
        for (d, seed) in [(&train, "1"), (&test, "2")] {
            assert_ok(&conclu(&[
                "gen-data",
                "--kinds",
                "sphere,plane",
                "--n-per-class",
                "4",
                "--points",
                "128",
                "--out",
                p(d),
                "--seed",
                seed,
            ]));
        }
        let train_manifest = train.join("manifest.json");
        let config = dir.join("config.json");
        fs::write(&config, tiny_config(&train_manifest, 1)).unwrap();
        let run = dir.join("run");
        assert_ok(&conclu(&[
            "pretrain",
            "--config",
            p(&config),
            "--out",
            p(&run),
        ]));
        Fixture {
            train_manifest,
            test_manifest: test.join("manifest.json"),
            checkpoint: run.join("checkpoints/epoch-0001.ccl"),
        }
    })
}

#[test]
fn help_exits_zero() {
    let out = conclu(&["--help"]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8_lossy(&out.stdout);
    for cmd in ["gen-data", "pretrain", "probe", "segment", "export"] {
        assert!(text.contains(cmd), "{cmd} missing from help");
    }
    assert_eq!(conclu(&["pretrain", "--help"]).status.code(), Some(0));
}

#[test]
fn missing_arguments_exit_two() {
    assert_eq!(conclu(&[]).status.code(), Some(2));
    assert_eq!(conclu(&["probe"]).status.code(), Some(2));
}

#[test]
fn gen_data_writes_one_file_per_cloud_and_a_manifest() {
    let dir = scratch("gen");
    let out = dir.join("data");
    assert_ok(&conclu(&[
        "gen-data",
        "--kinds",
        "sphere,box,cylinder",
        "--n-per-class",
        "10",
        "--points",
        "64",
        "--out",
        p(&out),
        "--seed",
        "5",
    ]));
    let xyz = fs::read_dir(&out)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().unwrap() == "xyz")
        .count();
    assert_eq!(xyz, 30);
    let manifest = read_json(&out.join("manifest.json"));
    let items = manifest["items"].as_array().unwrap();
    assert_eq!(items.len(), 30);
    for label in 0..3 {
        assert_eq!(items.iter().filter(|i| i["label"] == label).count(), 10);
    }
    let first = fs::read_to_string(out.join(items[0]["path"].as_str().unwrap())).unwrap();
    assert_eq!(first.lines().count(), 64);
}

#[test]
fn gen_data_is_deterministic() {
    let dir = scratch("gen-repeat");
    let (a, b) = (dir.join("a"), dir.join("b"));
    for d in [&a, &b] {
        assert_ok(&conclu(&[
            "gen-data",
            "--kinds",
            "box,two_blobs",
            "--n-per-class",
            "3",
            "--points",
            "50",
            "--out",
            p(d),
            "--seed",
            "9",
        ]));
    }
    let mut names: Vec<_> = fs::read_dir(&a)
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    names.sort();
    assert_eq!(names.len(), 7);
    for n in names {
        assert_eq!(
            fs::read(a.join(&n)).unwrap(),
            fs::read(b.join(&n)).unwrap(),
            "{n:?}"
        );
    }
}

#[test]
fn unknown_kind_exits_two_with_message() {
    let dir = scratch("gen-bad");
    let out = conclu(&[
        "gen-data",
        "--kinds",
        "sphere,torus",
        "--out",
        p(&dir.join("x")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("torus"), "{}", stderr(&out));
}

#[test]
fn outputs_are_never_overwritten() {
    let dir = scratch("gen-twice");
    let args = [
        "gen-data",
        "--n-per-class",
        "2",
        "--points",
        "16",
        "--out",
        p(&dir),
    ];
    assert_ok(&conclu(&args));
    let again = conclu(&args);
    assert_eq!(again.status.code(), Some(2));
    assert!(stderr(&again).contains("already exists"));
}

#[test]
fn tiny_pretrain_completes_quickly_and_writes_a_run_directory() {
    let dir = scratch("pretrain");
    assert_ok(&conclu(&[
        "gen-data",
        "--kinds",
        "sphere,box",
        "--n-per-class",
        "4",
        "--points",
        "128",
        "--out",
        p(&dir.join("data")),
    ]));
    let config = dir.join("config.json");
    fs::write(&config, tiny_config(&dir.join("data/manifest.json"), 2)).unwrap();
    let run = dir.join("run");
    let start = Instant::now();
    assert_ok(&conclu(&[
        "pretrain",
        "--config",
        p(&config),
        "--out",
        p(&run),
    ]));
    assert!(start.elapsed().as_secs() < 60);
    assert!(run.join("checkpoints/epoch-0001.ccl").is_file());
    assert!(run.join("checkpoints/epoch-0002.ccl").is_file());
    let echo = read_json(&run.join("config.json"));
    assert_eq!(echo["train"]["epochs"], 2);
    assert_eq!(echo["network"]["num_prototypes"], 4);
    let log = fs::read_to_string(run.join("train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 1 + 2 * 2);
}

#[test]
fn global_only_leaves_clustering_columns_at_zero() {
    let dir = scratch("global-only");
    assert_ok(&conclu(&[
        "gen-data",
        "--kinds",
        "sphere,box",
        "--n-per-class",
        "2",
        "--points",
        "64",
        "--out",
        p(&dir.join("data")),
    ]));
    let config = dir.join("config.json");
    fs::write(&config, tiny_config(&dir.join("data/manifest.json"), 1)).unwrap();
    let run = dir.join("run");
    assert_ok(&conclu(&[
        "pretrain",
        "--config",
        p(&config),
        "--out",
        p(&run),
        "--loss-mode",
        "global_only",
    ]));
    let log = fs::read_to_string(run.join("train_log.csv")).unwrap();
    let mut lines = log.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let zeroed: Vec<usize> = header
        .iter()
        .enumerate()
        .filter(|(_, h)| h.starts_with("ce_") || h.starts_with("orth_"))
        .map(|(i, _)| i)
        .collect();
    assert_eq!(zeroed.len(), 4);
    let mut rows = 0;
    for line in lines {
        let fields: Vec<&str> = line.split(',').collect();
        for &i in &zeroed {
            assert_eq!(fields[i].parse::<f64>().unwrap(), 0.0, "{}", header[i]);
        }
        rows += 1;
    }
    assert!(rows > 0);
    assert_eq!(
        read_json(&run.join("config.json"))["train"]["loss_mode"],
        "global_only"
    );
}

#[test]
fn invalid_config_key_exits_two_naming_it() {
    let dir = scratch("bad-config");
    let config = dir.join("config.json");
    fs::write(&config, r#"{"train": {"epochs": 1, "learning_rate": 0.1}}"#).unwrap();
    let out = conclu(&[
        "pretrain",
        "--config",
        p(&config),
        "--out",
        p(&dir.join("run")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("learning_rate"), "{}", stderr(&out));
    assert!(!dir.join("run").exists());
}

#[test]
fn unknown_loss_mode_exits_two() {
    let dir = scratch("bad-mode");
    let config = dir.join("config.json");
    fs::write(&config, "{}").unwrap();
    let out = conclu(&[
        "pretrain",
        "--config",
        p(&config),
        "--out",
        p(&dir),
        "--loss-mode",
        "both",
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_checkpoint_exits_two() {
    let f = fixture();
    let dir = scratch("no-checkpoint");
    let out = conclu(&[
        "probe",
        "--checkpoint",
        p(&dir.join("nope.ccl")),
        "--train-manifest",
        p(&f.train_manifest),
        "--test-manifest",
        p(&f.test_manifest),
        "--out",
        p(&dir.join("out")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("nope.ccl"));
}

#[test]
fn corrupt_checkpoint_exits_two() {
    let f = fixture();
    let dir = scratch("corrupt-checkpoint");
    let bad = dir.join("bad.ccl");
    fs::write(&bad, b"CCLU garbage").unwrap();
    let out = conclu(&[
        "export",
        "--checkpoint",
        p(&bad),
        "--manifest",
        p(&f.test_manifest),
        "--out",
        p(&dir.join("out")),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn probe_separates_spheres_from_planes() {
    let f = fixture();
    let dir = scratch("probe");
    assert_ok(&conclu(&[
        "probe",
        "--checkpoint",
        p(&f.checkpoint),
        "--train-manifest",
        p(&f.train_manifest),
        "--test-manifest",
        p(&f.test_manifest),
        "--out",
        p(&dir),
    ]));
    let m = read_json(&dir.join("probe.json"));
    assert_eq!(m["probe_accuracy"], 1.0);
    assert_eq!(m["test_clouds"], 8);
    assert_eq!(m["config"]["network"]["num_prototypes"], 4);
}

#[test]
fn segment_labels_every_point_and_reports_ari() {
    let f = fixture();
    let dir = scratch("segment");
    assert_ok(&conclu(&[
        "gen-data",
        "--kinds",
        "two_blobs",
        "--n-per-class",
        "1",
        "--points",
        "200",
        "--out",
        p(&dir.join("data")),
    ]));
    let cloud = dir.join("data/two_blobs_000.xyz");
    assert_ok(&conclu(&[
        "segment",
        "--checkpoint",
        p(&f.checkpoint),
        "--cloud",
        p(&cloud),
        "--out",
        p(&dir.join("out")),
    ]));
    let text = fs::read_to_string(dir.join("out/segment.xyz")).unwrap();
    assert_eq!(text.lines().count(), 200);
    for line in text.lines() {
        let fields: Vec<&str> = line.split_whitespace().collect();
        assert_eq!(fields.len(), 4);
        assert!(fields[3].parse::<u32>().unwrap() < 4);
    }
    let m = read_json(&dir.join("out/segment.json"));
    let ari = m["ari"]
        .as_f64()
        .expect("ari reported for a cloud with parts");
    assert!((-1.0..=1.0).contains(&ari));
    assert_eq!(m["points"], 200);
    let sizes = m["balance"]["sizes"].as_array().unwrap();
    assert_eq!(sizes.iter().map(|s| s.as_u64().unwrap()).sum::<u64>(), 200);
}

#[test]
fn segment_without_parts_reports_no_ari() {
    let f = fixture();
    let dir = scratch("segment-plain");
    let cloud = fs::read_dir(f.test_manifest.parent().unwrap())
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.extension().unwrap() == "xyz")
        .unwrap();
    assert_ok(&conclu(&[
        "segment",
        "--checkpoint",
        p(&f.checkpoint),
        "--cloud",
        p(&cloud),
        "--out",
        p(&dir),
    ]));
    assert!(read_json(&dir.join("segment.json"))["ari"].is_null());
}

#[test]
fn export_writes_one_row_per_cloud_deterministically() {
    let f = fixture();
    let dir = scratch("export");
    for run in ["a", "b"] {
        assert_ok(&conclu(&[
            "export",
            "--checkpoint",
            p(&f.checkpoint),
            "--manifest",
            p(&f.test_manifest),
            "--out",
            p(&dir.join(run)),
        ]));
    }
    for file in ["features.csv", "pca.csv", "export.json"] {
        assert_eq!(
            fs::read(dir.join("a").join(file)).unwrap(),
            fs::read(dir.join("b").join(file)).unwrap(),
            "{file}"
        );
    }
    let features = fs::read_to_string(dir.join("a/features.csv")).unwrap();
    assert_eq!(features.lines().count(), 1 + 8);
    assert_eq!(features.lines().next().unwrap().split(',').count(), 1 + 32);
    let pca = fs::read_to_string(dir.join("a/pca.csv")).unwrap();
    assert_eq!(pca.lines().next().unwrap(), "label,pc1,pc2");
    assert_eq!(pca.lines().count(), 1 + 8);
    let v = read_json(&dir.join("a/export.json"))["pca_variances"].clone();
    assert!(v[0].as_f64().unwrap() >= v[1].as_f64().unwrap());
}
