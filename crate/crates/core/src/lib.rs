//! Self-supervised point cloud representation learning by balanced
//! point-level clustering and instance-level contrasting.
//!
//! ```no_run
//! use conclu::evaluate::{extract_features, linear_probe, PROBE_REG};
//! use conclu::geometry::{synthetic_dataset, ShapeKind};
//! use conclu::network::NetworkConfig;
//! use conclu::trainer::{train, TrainConfig, TrainState};
//!
//! # fn main() -> conclu::Result<()> {
//! let kinds = [ShapeKind::Sphere, ShapeKind::Box, ShapeKind::Cylinder];
//! let data = synthetic_dataset(&kinds, 20, 512, 1)?;
//! let mut cfg = TrainConfig { epochs: 10, ..TrainConfig::default() };
//! cfg.augment.out_points = 512;
//! let mut state = TrainState::new(NetworkConfig::with_prototypes(16), cfg.seed)?;
//! train(&mut state, &data, &cfg, None)?;
//!
//! let test = synthetic_dataset(&kinds, 10, 512, 2)?;
//! let train_f = extract_features(&mut state.model, &data, "train")?;
//! let test_f = extract_features(&mut state.model, &test, "test")?;
//! println!("probe accuracy {}", linear_probe(&train_f, &test_f, PROBE_REG)?);
//! # Ok(())
//! # }
//! ```

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod config;
pub mod diff;
pub mod error;
pub mod evaluate;
pub mod geometry;
pub mod network;
pub mod objectives;
pub mod optim;
pub mod seed;
pub mod trainer;
pub mod transport;

pub use error::{Error, Result};
