//! Frozen-feature evaluation: linear probe, segmentation quality and
//! balance, and 2D feature maps.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::diff::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::geometry::PointCloud;
use crate::network::{cloud_tensor, Model};
use crate::objectives;
use crate::transport::{cost_matrix, pseudo_labels, sinkhorn, TransportPlan};

/// One global feature per cloud, with its class id.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureTable {
    pub rows: Vec<Vec<f64>>,
    pub labels: Vec<u32>,
    pub source: String,
}

impl FeatureTable {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.rows.first().map_or(0, Vec::len)
    }
}

/// Eval-mode max-pooled features of labelled clouds, without augmentation.
pub fn extract_features(
    model: &mut Model,
    clouds: &[PointCloud],
    source: &str,
) -> Result<FeatureTable> {
    let mut rows = Vec::with_capacity(clouds.len());
    let mut labels = Vec::with_capacity(clouds.len());
    for (k, pc) in clouds.iter().enumerate() {
        let label = pc
            .label
            .ok_or_else(|| Error::Config(format!("cloud {k} of {source} has no class label")))?;
        let f = model.embed(pc).map_err(|e| e.at_cloud(k))?;
        if f.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite feature".into()).at_cloud(k));
        }
        rows.push(f);
        labels.push(label);
    }
    Ok(FeatureTable {
        rows,
        labels,
        source: source.to_string(),
    })
}

pub const PROBE_REG: f64 = 1e-3;
pub const PROBE_MAX_ITERS: usize = 10_000;
pub const PROBE_GRAD_TOL: f64 = 1e-6;

/// A one-vs-rest linear classifier on standardized features.
#[derive(Clone, Debug)]
pub struct LinearProbe {
    pub classes: Vec<u32>,
    mean: Vec<f64>,
    scale: Vec<f64>,
    /// One weight vector per class, bias last.
    weights: Vec<Vec<f64>>,
    pub iterations: Vec<usize>,
}

fn augmented(x: &[f64], mean: &[f64], scale: &[f64]) -> Vec<f64> {
    x.iter()
        .zip(mean)
        .zip(scale)
        .map(|((v, m), s)| (v - m) / s)
        .chain(std::iter::once(1.0))
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Minimizes `λ/2 ‖w‖² + mean(max(0, 1 - y w·x))` by full-batch projected
/// subgradient descent with step `1/(λ t)`.
fn fit_binary(xs: &[Vec<f64>], ys: &[f64], reg: f64) -> (Vec<f64>, usize) {
    let d = xs[0].len();
    let m = xs.len() as f64;
    let radius = 1.0 / reg.sqrt();
    let mut w = vec![0.0; d];
    for t in 1..=PROBE_MAX_ITERS {
        let mut hinge = vec![0.0; d];
        for (x, &y) in xs.iter().zip(ys) {
            if y * dot(&w, x) < 1.0 {
                hinge.iter_mut().zip(x).for_each(|(h, v)| *h += y * v / m);
            }
        }
        let grad: Vec<f64> = w.iter().zip(&hinge).map(|(wi, h)| reg * wi - h).collect();
        if dot(&grad, &grad).sqrt() < PROBE_GRAD_TOL {
            return (w, t - 1);
        }
        let lr = 1.0 / (reg * t as f64);
        w.iter_mut().zip(&grad).for_each(|(wi, g)| *wi -= lr * g);
        let norm = dot(&w, &w).sqrt();
        if norm > radius {
            w.iter_mut().for_each(|wi| *wi *= radius / norm);
        }
    }
    (w, PROBE_MAX_ITERS)
}

impl LinearProbe {
    pub fn fit(train: &FeatureTable, reg: f64) -> Result<Self> {
        if !(reg > 0.0) {
            return Err(Error::Config(format!(
                "probe regularization must be positive, got {reg}"
            )));
        }
        if train.is_empty() {
            return Err(Error::EmptyInput("probe training table"));
        }
        let mut classes = train.labels.clone();
        classes.sort_unstable();
        classes.dedup();
        if classes.len() < 2 {
            return Err(Error::Config(
                "linear probe needs at least 2 classes in the training set".into(),
            ));
        }
        let d = train.dim();
        let m = train.len() as f64;
        let mean: Vec<f64> = (0..d)
            .map(|k| train.rows.iter().map(|r| r[k]).sum::<f64>() / m)
            .collect();
        let scale: Vec<f64> = (0..d)
            .map(|k| {
                let var = train
                    .rows
                    .iter()
                    .map(|r| (r[k] - mean[k]).powi(2))
                    .sum::<f64>()
                    / m;
                if var > 1e-24 {
                    var.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        let xs: Vec<Vec<f64>> = train
            .rows
            .iter()
            .map(|r| augmented(r, &mean, &scale))
            .collect();
        let mut weights = Vec::with_capacity(classes.len());
        let mut iterations = Vec::with_capacity(classes.len());
        for &c in &classes {
            let ys: Vec<f64> = train
                .labels
                .iter()
                .map(|&l| if l == c { 1.0 } else { -1.0 })
                .collect();
            let (w, it) = fit_binary(&xs, &ys, reg);
            weights.push(w);
            iterations.push(it);
        }
        Ok(Self {
            classes,
            mean,
            scale,
            weights,
            iterations,
        })
    }

    /// Highest-scoring class; ties go to the smallest class id.
    pub fn predict(&self, x: &[f64]) -> u32 {
        let xa = augmented(x, &self.mean, &self.scale);
        let mut best = 0;
        let mut best_score = f64::NEG_INFINITY;
        for (k, w) in self.weights.iter().enumerate() {
            let s = dot(w, &xa);
            if s > best_score {
                best_score = s;
                best = k;
            }
        }
        self.classes[best]
    }

    pub fn accuracy(&self, table: &FeatureTable) -> f64 {
        if table.is_empty() {
            return 0.0;
        }
        let hits = table
            .rows
            .iter()
            .zip(&table.labels)
            .filter(|(x, &y)| self.predict(x) == y)
            .count();
        hits as f64 / table.len() as f64
    }
}

/// Test accuracy of a probe trained on `train`.
pub fn linear_probe(train: &FeatureTable, test: &FeatureTable, reg: f64) -> Result<f64> {
    if train.dim() != test.dim() && !test.is_empty() {
        return Err(Error::Dimension {
            op: "linear_probe",
            left: vec![train.dim()],
            right: vec![test.dim()],
        });
    }
    Ok(LinearProbe::fit(train, reg)?.accuracy(test))
}

/// Row-wise argmax; ties go to the lowest column.
pub fn argmax_rows(m: &Tensor) -> Vec<u32> {
    (0..m.rows())
        .map(|i| {
            let row = m.row(i);
            let mut best = 0;
            for (k, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = k;
                }
            }
            best as u32
        })
        .collect()
}

/// Result of segmenting one cloud.
#[derive(Clone, Debug)]
pub struct Segmentation {
    pub labels: Vec<u32>,
    /// Pseudo-labels γ = N·Γ.
    pub gamma: Tensor,
    pub plan: TransportPlan,
}

/// Hard point labels from the eval-mode pseudo-labels: logits, class
/// probabilities, prototypes, transport, then the row argmax of γ.
pub fn hard_assignments(
    model: &mut Model,
    pc: &PointCloud,
    epsilon: f64,
    iters: usize,
) -> Result<Segmentation> {
    let logits = model.logits(pc)?;
    let mut tape = Tape::new();
    let g = tape.constant(logits);
    let s = objectives::class_probabilities(&mut tape, g)?;
    let coords = cloud_tensor(pc)?;
    let x = tape.constant(coords.clone());
    let c = objectives::prototypes(&mut tape, x, s)?;
    let d = cost_matrix(&coords, tape.value(c))?;
    let plan = sinkhorn(&d, epsilon, iters)?;
    let gamma = pseudo_labels(&plan);
    Ok(Segmentation {
        labels: argmax_rows(&gamma),
        gamma,
        plan,
    })
}

/// Cluster-size statistics of a hard partition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Balance {
    pub min: usize,
    pub max: usize,
    pub mean: f64,
    /// Largest `|size - N/J|`.
    pub max_deviation: f64,
    pub sizes: Vec<usize>,
}

pub fn partition_balance(labels: &[u32], j: usize) -> Result<Balance> {
    if j == 0 {
        return Err(Error::Config("partition_balance needs J >= 1".into()));
    }
    let mut sizes = vec![0usize; j];
    for &l in labels {
        let slot = sizes
            .get_mut(l as usize)
            .ok_or_else(|| Error::Config(format!("label {l} out of range for J = {j}")))?;
        *slot += 1;
    }
    let target = labels.len() as f64 / j as f64;
    Ok(Balance {
        min: *sizes.iter().min().expect("j >= 1"),
        max: *sizes.iter().max().expect("j >= 1"),
        mean: target,
        max_deviation: sizes
            .iter()
            .map(|&s| (s as f64 - target).abs())
            .fold(0.0, f64::max),
        sizes,
    })
}

/// Largest `|column sum of γ - N/J|`.
pub fn soft_balance_deviation(gamma: &Tensor) -> f64 {
    let (n, j) = (gamma.rows(), gamma.cols());
    let target = n as f64 / j as f64;
    (0..j)
        .map(|c| ((0..n).map(|i| gamma.at(i, c)).sum::<f64>() - target).abs())
        .fold(0.0, f64::max)
}

fn choose2(n: u64) -> f64 {
    (n * n.saturating_sub(1)) as f64 / 2.0
}

/// Adjusted Rand index from the pair-counting contingency table. Two
/// labelings that both put every point in one cluster (or both in
/// singletons) agree perfectly and score 1.
pub fn adjusted_rand_index(pred: &[u32], truth: &[u32]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::Dimension {
            op: "adjusted_rand_index",
            left: vec![pred.len()],
            right: vec![truth.len()],
        });
    }
    if pred.is_empty() {
        return Err(Error::EmptyInput("adjusted_rand_index"));
    }
    let mut table = std::collections::BTreeMap::<(u32, u32), u64>::new();
    let mut rows = std::collections::BTreeMap::<u32, u64>::new();
    let mut cols = std::collections::BTreeMap::<u32, u64>::new();
    for (&p, &t) in pred.iter().zip(truth) {
        *table.entry((p, t)).or_default() += 1;
        *rows.entry(p).or_default() += 1;
        *cols.entry(t).or_default() += 1;
    }
    let index: f64 = table.values().map(|&n| choose2(n)).sum();
    let a: f64 = rows.values().map(|&n| choose2(n)).sum();
    let b: f64 = cols.values().map(|&n| choose2(n)).sum();
    let expected = a * b / choose2(pred.len() as u64).max(f64::MIN_POSITIVE);
    let max = 0.5 * (a + b);
    if (max - expected).abs() < 1e-12 {
        return Ok(1.0);
    }
    Ok((index - expected) / (max - expected))
}

/// Writes `label,f1,...,fd` rows with round-trip precision.
pub fn export_features_csv(table: &FeatureTable, path: &Path) -> Result<()> {
    let mut out = String::from("label");
    for k in 1..=table.dim() {
        write!(out, ",f{k}").expect("write to String");
    }
    out.push('\n');
    for (row, label) in table.rows.iter().zip(&table.labels) {
        write!(out, "{label}").expect("write to String");
        for v in row {
            write!(out, ",{v:e}").expect("write to String");
        }
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_features_csv(path: &Path) -> Result<FeatureTable> {
    let text = fs::read_to_string(path)?;
    let mut table = FeatureTable {
        rows: Vec::new(),
        labels: Vec::new(),
        source: path.display().to_string(),
    };
    for (i, line) in text.lines().enumerate().skip(1) {
        let bad = |msg: String| Error::Parse {
            path: path.into(),
            line: i + 1,
            msg,
        };
        let mut fields = line.split(',');
        let label = fields
            .next()
            .unwrap_or("")
            .parse::<u32>()
            .map_err(|e| bad(format!("label: {e}")))?;
        let row = fields
            .map(|f| {
                f.parse::<f64>()
                    .map_err(|e| bad(format!("value {f:?}: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        table.labels.push(label);
        table.rows.push(row);
    }
    Ok(table)
}

/// Principal components of the features.
#[derive(Clone, Debug)]
pub struct Pca {
    /// `M x 2` projections of the centered features.
    pub projected: Vec<[f64; 2]>,
    /// Variances along the two components.
    pub variances: [f64; 2],
}

/// Projects onto the top two eigenvectors of the feature covariance. Each
/// eigenvector's sign makes its largest-magnitude loading positive.
pub fn pca_2d(table: &FeatureTable) -> Result<Pca> {
    let (m, d) = (table.len(), table.dim());
    if m < 2 {
        return Err(Error::Config(format!("PCA needs at least 2 rows, got {m}")));
    }
    if d == 0 || table.rows.iter().any(|r| r.len() != d) {
        return Err(Error::Dimension {
            op: "pca_2d",
            left: vec![m, d],
            right: table.rows.iter().map(Vec::len).collect(),
        });
    }
    let mean: Vec<f64> = (0..d)
        .map(|k| table.rows.iter().map(|r| r[k]).sum::<f64>() / m as f64)
        .collect();
    let x = DMatrix::from_fn(m, d, |i, k| table.rows[i][k] - mean[k]);
    let cov = (x.transpose() * &x) / (m as f64 - 1.0);
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .total_cmp(&eig.eigenvalues[a])
            .then(a.cmp(&b))
    });
    let mut axes = Vec::with_capacity(2);
    let mut variances = [0.0; 2];
    for (slot, &k) in order.iter().take(2).enumerate() {
        let mut v: Vec<f64> = eig.eigenvectors.column(k).iter().copied().collect();
        let lead = v
            .iter()
            .copied()
            .fold(0.0f64, |a, b| if b.abs() > a.abs() { b } else { a });
        if lead < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        variances[slot] = eig.eigenvalues[k].max(0.0);
        axes.push(v);
    }
    while axes.len() < 2 {
        axes.push(vec![0.0; d]);
    }
    let projected = (0..m)
        .map(|i| {
            let row: Vec<f64> = x.row(i).iter().copied().collect();
            [dot(&row, &axes[0]), dot(&row, &axes[1])]
        })
        .collect();
    Ok(Pca {
        projected,
        variances,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;
    use rand::Rng;

    fn table(rows: Vec<Vec<f64>>, labels: Vec<u32>) -> FeatureTable {
        FeatureTable {
            rows,
            labels,
            source: "test".into(),
        }
    }

    fn blobs(n_per: usize, centers: &[[f64; 2]], spread: f64, s: u64) -> FeatureTable {
        let mut rng = seed::rng(s);
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for (c, center) in centers.iter().enumerate() {
            for _ in 0..n_per {
                rows.push(
                    center
                        .iter()
                        .map(|m| m + rng.random_range(-spread..spread))
                        .collect(),
                );
                labels.push(c as u32);
            }
        }
        table(rows, labels)
    }

    #[test]
    fn separable_blobs_are_classified_perfectly() {
        let train = blobs(20, &[[0.0, 0.0], [5.0, 5.0]], 1.0, 1);
        let test = blobs(20, &[[0.0, 0.0], [5.0, 5.0]], 1.0, 2);
        assert_eq!(linear_probe(&train, &test, PROBE_REG).unwrap(), 1.0);
        assert_eq!(linear_probe(&train, &train, PROBE_REG).unwrap(), 1.0);
        let three = blobs(15, &[[0.0, 0.0], [6.0, 0.0], [0.0, 6.0]], 1.0, 3);
        assert_eq!(linear_probe(&three, &three, PROBE_REG).unwrap(), 1.0);
    }

    #[test]
    fn single_class_training_set_is_rejected() {
        let t = table(vec![vec![0.0], vec![1.0]], vec![4, 4]);
        assert!(matches!(
            LinearProbe::fit(&t, PROBE_REG),
            Err(Error::Config(_))
        ));
        let two = table(vec![vec![0.0], vec![1.0]], vec![0, 1]);
        assert!(matches!(LinearProbe::fit(&two, 0.0), Err(Error::Config(_))));
    }

    #[test]
    fn probe_is_invariant_to_feature_reordering() {
        let train = blobs(20, &[[0.0, 1.0], [1.5, 0.0], [0.5, 2.0]], 1.2, 5);
        let test = blobs(20, &[[0.0, 1.0], [1.5, 0.0], [0.5, 2.0]], 1.2, 6);
        let swap = |t: &FeatureTable| {
            table(
                t.rows.iter().map(|r| vec![r[1], r[0]]).collect(),
                t.labels.clone(),
            )
        };
        let a = linear_probe(&train, &test, PROBE_REG).unwrap();
        let b = linear_probe(&swap(&train), &swap(&test), PROBE_REG).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn argmax_examples() {
        let g = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![0.5, 0.5]]).unwrap();
        assert_eq!(argmax_rows(&g), vec![0, 1, 0]);
    }

    #[test]
    fn balance_examples() {
        let perfect: Vec<u32> = (0..64).collect();
        let b = partition_balance(&perfect, 64).unwrap();
        assert_eq!((b.min, b.max, b.max_deviation), (1, 1, 0.0));
        let skew = partition_balance(&[0, 0, 0, 1], 2).unwrap();
        assert_eq!(
            (skew.min, skew.max, skew.mean, skew.max_deviation),
            (1, 3, 2.0, 1.0)
        );
        assert!(partition_balance(&[2], 2).is_err());
    }

    #[test]
    fn ari_examples() {
        let truth = [0, 0, 0, 1, 1, 1];
        assert_eq!(adjusted_rand_index(&truth, &truth).unwrap(), 1.0);
        assert_eq!(adjusted_rand_index(&[0; 6], &truth).unwrap(), 0.0);
        assert_eq!(
            adjusted_rand_index(&[5, 5, 5, 2, 2, 2], &truth).unwrap(),
            1.0
        );
        assert!(adjusted_rand_index(&[0, 1], &truth).is_err());
    }

    #[test]
    fn ari_matches_a_hand_computed_value() {
        // contingency [[2,1],[0,3]]: index 1+3 = 4, rows 3+3 = 6 pairs,
        // columns 1+6 = 7 pairs, 15 total pairs
        let pred = [0, 0, 0, 1, 1, 1];
        let truth = [0, 0, 1, 1, 1, 1];
        let expected = 6.0 * 7.0 / 15.0;
        let want = (4.0 - expected) / (6.5 - expected);
        assert!((adjusted_rand_index(&pred, &truth).unwrap() - want).abs() < 1e-15);
        assert_eq!(
            adjusted_rand_index(&pred, &truth).unwrap(),
            adjusted_rand_index(&truth, &pred).unwrap()
        );
    }

    #[test]
    fn pca_of_centered_2d_data_preserves_distances() {
        let t = blobs(10, &[[0.0, 0.0], [3.0, 1.0]], 1.0, 7);
        let mean = [0, 1].map(|k| t.rows.iter().map(|r| r[k]).sum::<f64>() / t.len() as f64);
        let centered = table(
            t.rows
                .iter()
                .map(|r| vec![r[0] - mean[0], r[1] - mean[1]])
                .collect(),
            t.labels.clone(),
        );
        let p = pca_2d(&centered).unwrap();
        for i in 0..t.len() {
            for j in 0..i {
                let a = (centered.rows[i][0] - centered.rows[j][0])
                    .hypot(centered.rows[i][1] - centered.rows[j][1]);
                let b = (p.projected[i][0] - p.projected[j][0])
                    .hypot(p.projected[i][1] - p.projected[j][1]);
                assert!((a - b).abs() < 1e-9);
            }
        }
        assert!(p.variances[0] >= p.variances[1]);
    }

    #[test]
    fn pca_of_rank_one_data_has_no_second_variance() {
        let rows = (0..20)
            .map(|i| [1.0, -2.0, 0.5].map(|v| v * i as f64).to_vec())
            .collect();
        let p = pca_2d(&table(rows, vec![0; 20])).unwrap();
        assert!(p.variances[1] < 1e-9 * p.variances[0]);
        assert!(p.projected.iter().all(|r| r[1].abs() < 1e-9));
        // the largest loading (-2) is flipped positive, so the last row
        // projects negatively
        assert!(p.projected[19][0] < 0.0);
    }

    #[test]
    fn feature_csv_round_trip() {
        let t = blobs(5, &[[0.1, 1e-7], [123.456, -9.0]], 0.3, 8);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.csv");
        export_features_csv(&t, &path).unwrap();
        let back = read_features_csv(&path).unwrap();
        assert_eq!(back.labels, t.labels);
        for (a, b) in back.rows.iter().flatten().zip(t.rows.iter().flatten()) {
            assert!((a - b).abs() <= 1e-9);
        }
    }
}
