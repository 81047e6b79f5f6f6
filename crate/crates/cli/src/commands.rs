use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use conclu::checkpoint::{self, Checkpoint};
use conclu::config::{load_cloud, Manifest, ManifestItem, RunConfig};
use conclu::evaluate::{
    adjusted_rand_index, export_features_csv, extract_features, hard_assignments,
    partition_balance, pca_2d, soft_balance_deviation, LinearProbe,
};
use conclu::geometry::{normalize_cloud, save_xyz, synthetic_dataset, ShapeKind};
use conclu::seed;
use conclu::trainer::{self, LossMode, Outputs, TrainState};
use serde_json::{json, Value};

use crate::error::{CliError, CliResult};

/// Fails if any of `files` already exists in `dir`, then creates `dir`.
fn prepare_out(dir: &Path, files: &[&str]) -> CliResult<()> {
    for f in files {
        let p = dir.join(f);
        if p.exists() {
            return Err(CliError::Usage(format!(
                "{} already exists; choose a fresh output directory",
                p.display()
            )));
        }
    }
    fs::create_dir_all(dir).map_err(|source| CliError::Write {
        path: dir.to_path_buf(),
        source,
    })
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> CliResult<()> {
    fs::write(path, contents).map_err(|source| CliError::Write {
        path: path.to_path_buf(),
        source,
    })
}

fn write_json(path: &Path, value: &Value) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).expect("json value serializes");
    text.push('\n');
    write_file(path, text)
}

fn require_file(path: &Path, what: &str) -> CliResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Usage(format!(
            "{what} {} does not exist",
            path.display()
        )))
    }
}

fn load_checkpoint(path: &Path) -> CliResult<Checkpoint> {
    require_file(path, "checkpoint")?;
    Ok(checkpoint::load(path)?)
}

fn load_manifest(path: &Path) -> CliResult<Manifest> {
    require_file(path, "manifest")?;
    let m = Manifest::load(path)?;
    if m.is_empty() {
        return Err(CliError::Usage(format!(
            "manifest {} lists no clouds",
            path.display()
        )));
    }
    Ok(m)
}

fn config_echo(ck: &Checkpoint) -> Value {
    json!({
        "network": ck.state.model.config,
        "train": ck.train,
        "epoch": ck.state.epoch,
        "step": ck.state.step,
    })
}

pub fn gen_data(
    kinds: &[ShapeKind],
    per_class: usize,
    points: usize,
    out: &Path,
    seed: u64,
) -> CliResult<()> {
    if kinds.is_empty() || per_class == 0 {
        return Err(CliError::Usage(
            "need at least one kind and one cloud per class".into(),
        ));
    }
    let clouds = synthetic_dataset(kinds, per_class, points, seed)?;
    let names: Vec<String> = clouds
        .iter()
        .enumerate()
        .map(|(i, pc)| {
            let kind = kinds[pc.label.unwrap_or(0) as usize];
            format!("{kind}_{:03}.xyz", i % per_class)
        })
        .collect();
    let mut expected: Vec<&str> = names.iter().map(String::as_str).collect();
    expected.push("manifest.json");
    prepare_out(out, &expected)?;
    let mut manifest = Manifest::default();
    for (pc, name) in clouds.iter().zip(&names) {
        save_xyz(out.join(name), pc, None)?;
        manifest.items.push(ManifestItem {
            path: PathBuf::from(name),
            label: pc.label.unwrap_or(0),
        });
    }
    manifest.save(&out.join("manifest.json"))?;
    let noun = if clouds.len() == 1 { "cloud" } else { "clouds" };
    println!(
        "wrote {} {noun} of {points} points to {}",
        clouds.len(),
        out.display()
    );
    Ok(())
}

#[derive(Debug, Default)]
pub struct Overrides {
    pub loss_mode: Option<LossMode>,
    pub train_manifest: Option<PathBuf>,
    pub epochs: Option<u64>,
    pub seed: Option<u64>,
}

pub fn pretrain(config: &Path, out: &Path, ov: Overrides) -> CliResult<()> {
    require_file(config, "config")?;
    let mut cfg = RunConfig::load(config)?;
    if let Some(m) = ov.loss_mode {
        cfg.train.loss_mode = m;
    }
    if let Some(p) = ov.train_manifest {
        cfg.data.train_manifest = Some(p);
    }
    if let Some(e) = ov.epochs {
        cfg.train.epochs = e;
    }
    if let Some(s) = ov.seed {
        cfg.train.seed = s;
    }
    cfg.validate()?;
    let manifest_path = cfg.data.train_manifest.clone().ok_or_else(|| {
        CliError::Usage("no training data: set data.train_manifest or --train-manifest".into())
    })?;
    let manifest = load_manifest(&manifest_path)?;
    prepare_out(out, &["config.json", "train_log.csv", "checkpoints"])?;
    write_file(&out.join("config.json"), cfg.to_json() + "\n")?;

    let clouds = manifest.load_clouds(cfg.data.mesh_points, cfg.train.seed)?;
    let mut state = TrainState::new(cfg.network.clone(), cfg.train.seed)?;
    let outputs = Outputs {
        dir: out.to_path_buf(),
    };
    let report = trainer::train(&mut state, &clouds, &cfg.train, Some(&outputs))?;
    let last = report.log.last().map_or(f64::NAN, |r| r.loss.total);
    println!(
        "trained {} epochs ({} steps) on {} clouds, final loss {last:.6}",
        state.epoch,
        state.step,
        clouds.len()
    );
    for p in &report.checkpoints {
        println!("checkpoint {}", p.display());
    }
    Ok(())
}

pub fn probe(
    checkpoint: &Path,
    train_manifest: &Path,
    test_manifest: &Path,
    out: &Path,
    reg: f64,
) -> CliResult<()> {
    if reg.is_nan() || reg <= 0.0 {
        return Err(CliError::Usage(format!(
            "--reg must be positive, got {reg}"
        )));
    }
    let mut ck = load_checkpoint(checkpoint)?;
    let train_m = load_manifest(train_manifest)?;
    let test_m = load_manifest(test_manifest)?;
    prepare_out(out, &["probe.json"])?;
    let mesh_seed = ck.train.seed;
    let model = &mut ck.state.model;
    let train_clouds = train_m.load_clouds(ck.train.augment.out_points, mesh_seed)?;
    let test_clouds = test_m.load_clouds(ck.train.augment.out_points, mesh_seed)?;
    let train = extract_features(model, &train_clouds, "train")?;
    let test = extract_features(model, &test_clouds, "test")?;
    let probe = LinearProbe::fit(&train, reg)?;
    let accuracy = probe.accuracy(&test);
    let metrics = json!({
        "probe_accuracy": accuracy,
        "train_accuracy": probe.accuracy(&train),
        "train_clouds": train.len(),
        "test_clouds": test.len(),
        "feature_dim": train.dim(),
        "reg": reg,
        "checkpoint": checkpoint,
        "train_manifest": train_manifest,
        "test_manifest": test_manifest,
        "config": config_echo(&ck),
    });
    write_json(&out.join("probe.json"), &metrics)?;
    println!("probe accuracy {accuracy:.4} on {} test clouds", test.len());
    Ok(())
}

pub fn segment(checkpoint: &Path, cloud: &Path, out: &Path) -> CliResult<()> {
    let mut ck = load_checkpoint(checkpoint)?;
    require_file(cloud, "cloud")?;
    prepare_out(out, &["segment.xyz", "segment.json"])?;
    let raw = load_cloud(
        cloud,
        ck.train.augment.out_points,
        seed::derive(ck.train.seed, &[0]),
    )?;
    let pc = normalize_cloud(&raw)?;
    let seg = hard_assignments(
        &mut ck.state.model,
        &pc,
        ck.train.sinkhorn_epsilon,
        ck.train.sinkhorn_iters,
    )?;
    let j = ck.state.model.config.num_prototypes;
    save_xyz(out.join("segment.xyz"), &raw, Some(&seg.labels))?;
    let balance = partition_balance(&seg.labels, j)?;
    let ari = match &raw.part_labels {
        Some(parts) => Some(adjusted_rand_index(&seg.labels, parts)?),
        None => None,
    };
    let metrics = json!({
        "points": raw.len(),
        "num_prototypes": j,
        "balance": balance,
        "soft_balance_deviation": soft_balance_deviation(&seg.gamma),
        "ari": ari,
        "checkpoint": checkpoint,
        "cloud": cloud,
        "config": config_echo(&ck),
    });
    write_json(&out.join("segment.json"), &metrics)?;
    match ari {
        Some(a) => println!(
            "segmented {} points into {j} clusters, ARI {a:.4}",
            raw.len()
        ),
        None => println!("segmented {} points into {j} clusters", raw.len()),
    }
    Ok(())
}

pub fn export(checkpoint: &Path, manifest: &Path, out: &Path) -> CliResult<()> {
    let mut ck = load_checkpoint(checkpoint)?;
    let m = load_manifest(manifest)?;
    prepare_out(out, &["features.csv", "pca.csv", "export.json"])?;
    let clouds = m.load_clouds(ck.train.augment.out_points, ck.train.seed)?;
    let table = extract_features(&mut ck.state.model, &clouds, "export")?;
    export_features_csv(&table, &out.join("features.csv"))?;
    let pca = pca_2d(&table)?;
    let mut csv = String::from("label,pc1,pc2\n");
    for (p, label) in pca.projected.iter().zip(&table.labels) {
        writeln!(csv, "{label},{:e},{:e}", p[0], p[1]).expect("write to String");
    }
    write_file(&out.join("pca.csv"), csv)?;
    let metrics = json!({
        "clouds": table.len(),
        "feature_dim": table.dim(),
        "pca_variances": pca.variances,
        "checkpoint": checkpoint,
        "manifest": manifest,
        "config": config_echo(&ck),
    });
    write_json(&out.join("export.json"), &metrics)?;
    println!(
        "exported {} features of dimension {}",
        table.len(),
        table.dim()
    );
    Ok(())
}
