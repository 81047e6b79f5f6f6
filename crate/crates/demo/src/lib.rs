//! WebAssembly bindings behind `www/index.html`.
//!
//! Three operations are exposed: augmented view pairs of a synthetic
//! shape, the transport plan of one cloud against a set of prototypes at a
//! chosen ε, and segmentation of a two-blob cloud by a freshly trained
//! small network. Each has a plain Rust function that the tests call and a
//! thin exported wrapper that converts errors for JavaScript.

use conclu::evaluate::{adjusted_rand_index, hard_assignments, partition_balance};
use conclu::geometry::{generate_shape, make_views, normalize_cloud, AugmentConfig, PointCloud};
use conclu::network::NetworkConfig;
use conclu::seed;
use conclu::trainer::{train, TrainConfig, TrainState};
use conclu::transport::{cost_matrix, sinkhorn};
use conclu::Result;
use wasm_bindgen::prelude::*;

fn js(e: conclu::Error) -> JsError {
    JsError::new(&e.to_string())
}

fn shape(kind: &str, points: usize, seed: u64) -> Result<PointCloud> {
    normalize_cloud(&generate_shape(kind.parse()?, points, seed)?)
}

/// A cloud and the two augmented views drawn from it, as flat `x y z`
/// triples.
#[wasm_bindgen]
#[derive(Clone, Debug)]
pub struct Views {
    original: Vec<f64>,
    view_a: Vec<f64>,
    view_b: Vec<f64>,
}

#[wasm_bindgen]
impl Views {
    pub fn original(&self) -> Vec<f64> {
        self.original.clone()
    }

    pub fn view_a(&self) -> Vec<f64> {
        self.view_a.clone()
    }

    pub fn view_b(&self) -> Vec<f64> {
        self.view_b.clone()
    }
}

pub fn compute_views(
    kind: &str,
    points: usize,
    seed: u32,
    keep_fraction: f64,
    max_angle_deg: f64,
    jitter_sigma: f64,
) -> Result<Views> {
    let pc = shape(kind, points, u64::from(seed))?;
    let cfg = AugmentConfig {
        keep_fraction,
        out_points: points,
        max_angle_deg,
        jitter_sigma,
        jitter_clip: 2.5 * jitter_sigma,
    };
    let (a, b) = make_views(&pc, &cfg, seed::derive(u64::from(seed), &[1]))?;
    Ok(Views {
        original: pc.flat(),
        view_a: a.flat(),
        view_b: b.flat(),
    })
}

#[wasm_bindgen]
pub fn views(
    kind: &str,
    points: usize,
    seed: u32,
    keep_fraction: f64,
    max_angle_deg: f64,
    jitter_sigma: f64,
) -> std::result::Result<Views, JsError> {
    compute_views(
        kind,
        points,
        seed,
        keep_fraction,
        max_angle_deg,
        jitter_sigma,
    )
    .map_err(js)
}

/// A transport plan with its rows grouped by the prototype each point is
/// mostly sent to.
#[wasm_bindgen]
#[derive(Clone, Debug)]
pub struct Plan {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
    row_deviation: f64,
    col_deviation: f64,
    log_domain: bool,
}

#[wasm_bindgen]
impl Plan {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    /// Row-major `rows x cols` entries of Γ.
    pub fn values(&self) -> Vec<f64> {
        self.values.clone()
    }

    pub fn row_deviation(&self) -> f64 {
        self.row_deviation
    }

    pub fn col_deviation(&self) -> f64 {
        self.col_deviation
    }

    pub fn log_domain(&self) -> bool {
        self.log_domain
    }
}

/// Plans `points` sphere points onto `prototypes` other sphere points.
pub fn compute_plan(
    points: usize,
    prototypes: usize,
    epsilon: f64,
    iters: usize,
    seed: u32,
) -> Result<Plan> {
    let pc = shape("sphere", points, u64::from(seed))?;
    let x = conclu::network::cloud_tensor(&pc)?;
    let pool = shape(
        "sphere",
        prototypes.max(8),
        seed::derive(u64::from(seed), &[2]),
    )?;
    let protos: Vec<usize> = (0..prototypes).collect();
    let c = conclu::network::cloud_tensor(&pool.select(&protos))?;
    let plan = sinkhorn(&cost_matrix(&x, &c)?, epsilon, iters)?;
    let g = &plan.gamma_joint;
    let mut order: Vec<usize> = (0..g.rows()).collect();
    let best = |i: usize| {
        (0..g.cols())
            .max_by(|&a, &b| g.at(i, a).total_cmp(&g.at(i, b)).then(b.cmp(&a)))
            .unwrap_or(0)
    };
    order.sort_by_key(|&i| (best(i), i));
    let values = order.iter().flat_map(|&i| g.row(i).to_vec()).collect();
    Ok(Plan {
        rows: g.rows(),
        cols: g.cols(),
        values,
        row_deviation: plan.row_deviation(),
        col_deviation: plan.col_deviation(),
        log_domain: plan.log_domain,
    })
}

#[wasm_bindgen]
pub fn plan(
    points: usize,
    prototypes: usize,
    epsilon: f64,
    iters: usize,
    seed: u32,
) -> std::result::Result<Plan, JsError> {
    compute_plan(points, prototypes, epsilon, iters, seed).map_err(js)
}

/// Hard labels of a held-out two-blob cloud next to its true blob ids.
#[wasm_bindgen]
#[derive(Clone, Debug)]
pub struct BlobSegmentation {
    points: Vec<f64>,
    truth: Vec<u32>,
    labels: Vec<u32>,
    ari: f64,
    sizes: Vec<u32>,
}

#[wasm_bindgen]
impl BlobSegmentation {
    pub fn points(&self) -> Vec<f64> {
        self.points.clone()
    }

    pub fn truth(&self) -> Vec<u32> {
        self.truth.clone()
    }

    pub fn labels(&self) -> Vec<u32> {
        self.labels.clone()
    }

    pub fn ari(&self) -> f64 {
        self.ari
    }

    pub fn sizes(&self) -> Vec<u32> {
        self.sizes.clone()
    }
}

fn small_network(seed: u64) -> NetworkConfig {
    NetworkConfig {
        encoder_widths: vec![3, 16, 32],
        head_widths: vec![32, 16, 2],
        proj_hidden: 16,
        proj_out: 8,
        pred_hidden: 8,
        num_prototypes: 2,
        bn_over_batch: false,
        seed,
    }
}

/// Trains for `epochs` epochs on six blob clouds, then segments a seventh.
pub fn compute_blob_segmentation(
    points: usize,
    epochs: u32,
    seed: u32,
) -> Result<BlobSegmentation> {
    let seed = u64::from(seed);
    let clouds: Vec<PointCloud> = (0..6)
        .map(|i| shape("two_blobs", points, seed::derive(seed, &[3, i])))
        .collect::<Result<_>>()?;
    let cfg = TrainConfig {
        epochs: u64::from(epochs),
        batch_size: 6,
        lr: 3e-3,
        augment: AugmentConfig {
            out_points: points,
            ..AugmentConfig::default()
        },
        seed,
        ..TrainConfig::default()
    };
    let mut state = TrainState::new(small_network(seed), seed)?;
    train(&mut state, &clouds, &cfg, None)?;
    let held_out = shape("two_blobs", points, seed::derive(seed, &[4]))?;
    let seg = hard_assignments(
        &mut state.model,
        &held_out,
        cfg.sinkhorn_epsilon,
        cfg.sinkhorn_iters,
    )?;
    let truth = held_out.part_labels.clone().unwrap_or_default();
    let balance = partition_balance(&seg.labels, 2)?;
    Ok(BlobSegmentation {
        points: held_out.flat(),
        ari: adjusted_rand_index(&seg.labels, &truth)?,
        truth,
        labels: seg.labels,
        sizes: balance.sizes.iter().map(|&s| s as u32).collect(),
    })
}

#[wasm_bindgen]
pub fn segment_blobs(
    points: usize,
    epochs: u32,
    seed: u32,
) -> std::result::Result<BlobSegmentation, JsError> {
    compute_blob_segmentation(points, epochs, seed).map_err(js)
}
