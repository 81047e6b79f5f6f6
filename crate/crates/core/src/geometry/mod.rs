//! Point clouds: the data model, synthetic shapes, augmentations and I/O.

mod augment;
mod io;

pub use augment::{
    crop_survivors, keep_count, make_views, random_crop, random_jitter, random_rotation,
    rotation_matrix, AugmentConfig,
};
pub use io::{load_off, load_xyz, parse_off, parse_xyz, save_xyz, write_xyz, Mesh};

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

pub type Point = [f64; 3];

#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Point>,
    pub label: Option<u32>,
    /// Per-point ground-truth segment ids, when known.
    pub part_labels: Option<Vec<u32>>,
}

impl PointCloud {
    pub fn new(points: Vec<Point>) -> Result<Self> {
        Self::with_labels(points, None, None)
    }

    pub fn with_labels(
        points: Vec<Point>,
        label: Option<u32>,
        part_labels: Option<Vec<u32>>,
    ) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyInput("point cloud"));
        }
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(
                "point cloud has non-finite coordinates".into(),
            ));
        }
        if let Some(parts) = &part_labels {
            if parts.len() != points.len() {
                return Err(Error::Dimension {
                    op: "part_labels",
                    left: vec![points.len()],
                    right: vec![parts.len()],
                });
            }
        }
        Ok(Self {
            points,
            label,
            part_labels,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn centroid(&self) -> Point {
        let mut c = [0.0; 3];
        for p in &self.points {
            (0..3).for_each(|k| c[k] += p[k]);
        }
        c.map(|v| v / self.len() as f64)
    }

    /// Row-major `N x 3` coordinates.
    pub fn flat(&self) -> Vec<f64> {
        self.points.iter().flatten().copied().collect()
    }

    /// The cloud with points taken at `indices`, labels carried along.
    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            points: indices.iter().map(|&i| self.points[i]).collect(),
            label: self.label,
            part_labels: self
                .part_labels
                .as_ref()
                .map(|parts| indices.iter().map(|&i| parts[i]).collect()),
        }
    }

    pub fn map_points(&self, f: impl FnMut(&Point) -> Point) -> Self {
        Self {
            points: self.points.iter().map(f).collect(),
            label: self.label,
            part_labels: self.part_labels.clone(),
        }
    }
}

pub fn norm(p: &Point) -> f64 {
    (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt()
}

pub fn dist2(a: &Point, b: &Point) -> f64 {
    (0..3).map(|k| (a[k] - b[k]).powi(2)).sum()
}

/// Centers the cloud on its centroid and scales the farthest point to norm 1.
pub fn normalize_cloud(pc: &PointCloud) -> Result<PointCloud> {
    let c = pc.centroid();
    let centered = pc.map_points(|p| [p[0] - c[0], p[1] - c[1], p[2] - c[2]]);
    let radius = centered.points.iter().map(norm).fold(0.0, f64::max);
    if !(radius > 1e-12 * (1.0 + norm(&c))) {
        return Err(Error::DegenerateCloud);
    }
    Ok(centered.map_points(|p| p.map(|v| v / radius)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Sphere,
    Box,
    Plane,
    Cylinder,
    TwoBlobs,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 5] = [
        ShapeKind::Sphere,
        ShapeKind::Box,
        ShapeKind::Plane,
        ShapeKind::Cylinder,
        ShapeKind::TwoBlobs,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Sphere => "sphere",
            ShapeKind::Box => "box",
            ShapeKind::Plane => "plane",
            ShapeKind::Cylinder => "cylinder",
            ShapeKind::TwoBlobs => "two_blobs",
        }
    }
}

impl fmt::Display for ShapeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ShapeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ShapeKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown shape kind `{s}`")))
    }
}

/// Standard deviation of each `two_blobs` component.
pub const BLOB_SIGMA: f64 = 0.1;
/// Distance between the two blob centers, in units of [`BLOB_SIGMA`].
pub const BLOB_SEPARATION: f64 = 8.0;

fn unit_vector(rng: &mut impl Rng) -> Point {
    loop {
        let v: Point = [
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        ];
        let n = norm(&v);
        if n > 1e-9 {
            return v.map(|x| x / n);
        }
    }
}

/// Samples `n` points uniformly on the surface of a unit-scale shape.
///
/// `two_blobs` instead draws two isotropic Gaussians whose centers are
/// [`BLOB_SEPARATION`] standard deviations apart along a random direction;
/// the first `ceil(n/2)` points belong to blob 0 and carry part label 0.
pub fn generate_shape(kind: ShapeKind, n: usize, seed: u64) -> Result<PointCloud> {
    if n < 8 {
        return Err(Error::Config(format!(
            "generate_shape needs n >= 8, got {n}"
        )));
    }
    let mut rng = seed::rng(seed);
    let rng = &mut rng;
    let mut parts = None;
    let points = match kind {
        ShapeKind::Sphere => (0..n).map(|_| unit_vector(rng)).collect(),
        ShapeKind::Box => (0..n)
            .map(|_| {
                let face = rng.random_range(0..6);
                let axis = face / 2;
                let side = if face % 2 == 0 { -1.0 } else { 1.0 };
                let mut p = [
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    0.0,
                ];
                p.swap(2, axis);
                p[axis] = side;
                p
            })
            .collect(),
        ShapeKind::Plane => (0..n)
            .map(|_| {
                [
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    0.0,
                ]
            })
            .collect(),
        ShapeKind::Cylinder => (0..n)
            .map(|_| {
                // radius 1, height 2: lateral area 4π, caps 2π together
                let u: f64 = rng.random();
                if u < 2.0 / 3.0 {
                    let t = rng.random_range(0.0..std::f64::consts::TAU);
                    [t.cos(), t.sin(), rng.random_range(-1.0..1.0)]
                } else {
                    let r = rng.random::<f64>().sqrt();
                    let t = rng.random_range(0.0..std::f64::consts::TAU);
                    let z = if u < 5.0 / 6.0 { -1.0 } else { 1.0 };
                    [r * t.cos(), r * t.sin(), z]
                }
            })
            .collect(),
        ShapeKind::TwoBlobs => {
            let axis = unit_vector(rng);
            let half = BLOB_SEPARATION * BLOB_SIGMA / 2.0;
            let first = n.div_ceil(2);
            let labels: Vec<u32> = (0..n).map(|i| u32::from(i >= first)).collect();
            let pts = labels
                .iter()
                .map(|&blob| {
                    let sign = if blob == 0 { -1.0 } else { 1.0 };
                    std::array::from_fn(|k| {
                        let z: f64 = StandardNormal.sample(rng);
                        sign * half * axis[k] + BLOB_SIGMA * z
                    })
                })
                .collect();
            parts = Some(labels);
            pts
        }
    };
    PointCloud::with_labels(points, None, parts)
}

/// A labelled synthetic dataset: `per_class` clouds of each kind, each with
/// a random anisotropic scale in [0.75, 1.25] per axis, then normalized.
/// Class ids follow the order of `kinds`.
pub fn synthetic_dataset(
    kinds: &[ShapeKind],
    per_class: usize,
    points: usize,
    seed: u64,
) -> Result<Vec<PointCloud>> {
    let mut out = Vec::with_capacity(kinds.len() * per_class);
    for (class, &kind) in kinds.iter().enumerate() {
        for i in 0..per_class {
            let s = seed::derive(seed, &[class as u64, i as u64]);
            let raw = generate_shape(kind, points, s)?;
            let mut rng = seed::rng(seed::derive(s, &[1]));
            let stretch: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.75..1.25));
            let stretched = raw.map_points(|p| std::array::from_fn(|k| p[k] * stretch[k]));
            let mut pc = normalize_cloud(&stretched)?;
            pc.label = Some(class as u32);
            out.push(pc);
        }
    }
    Ok(out)
}
