//! Shared per-point encoder, per-point classification head, projector and
//! predictor.
//!
//! Parameters live in a flat, named list so the optimizer and checkpoint
//! code can treat them uniformly. A forward pass first binds every
//! parameter to a tape with [`Model::bind`]; the layer functions then
//! operate on the bound handles.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diff::{self, Mode, RunningStats, Tape, Tensor, Var, BN_EPS, LEAKY_SLOPE};
use crate::error::{Error, Result};
use crate::geometry::PointCloud;
use crate::seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    /// Per-point MLP widths, starting with the input dimension 3.
    pub encoder_widths: Vec<usize>,
    /// Output widths of the three head layers; the last is the number of
    /// prototypes.
    pub head_widths: Vec<usize>,
    pub proj_hidden: usize,
    pub proj_out: usize,
    pub pred_hidden: usize,
    pub num_prototypes: usize,
    /// Normalize per-point layers over all points of the batch instead of
    /// over each cloud separately.
    pub bn_over_batch: bool,
    pub seed: u64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self::with_prototypes(64)
    }
}

impl NetworkConfig {
    pub fn with_prototypes(j: usize) -> Self {
        Self {
            encoder_widths: vec![3, 64, 128, 256],
            head_widths: vec![256, 128, j],
            proj_hidden: 128,
            proj_out: 64,
            pred_hidden: 32,
            num_prototypes: j,
            bn_over_batch: false,
            seed: 0,
        }
    }

    pub fn feature_dim(&self) -> usize {
        *self.encoder_widths.last().unwrap_or(&0)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.encoder_widths.len() < 2 || self.encoder_widths[0] != 3 {
            return bad(format!(
                "encoder_widths must start at 3 and have at least one layer, got {:?}",
                self.encoder_widths
            ));
        }
        if self.head_widths.len() != 3 {
            return bad(format!(
                "head_widths must list 3 layers, got {:?}",
                self.head_widths
            ));
        }
        if self.head_widths[2] != self.num_prototypes {
            return bad(format!(
                "head_widths must end at num_prototypes = {}, got {:?}",
                self.num_prototypes, self.head_widths
            ));
        }
        if self.num_prototypes < 2 {
            return bad("num_prototypes must be at least 2".into());
        }
        let all = self.encoder_widths.iter().chain(&self.head_widths).chain([
            &self.proj_hidden,
            &self.proj_out,
            &self.pred_hidden,
        ]);
        if all.into_iter().any(|&w| w == 0) {
            return bad("all widths must be positive".into());
        }
        Ok(())
    }
}

/// A named trainable tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    /// Batch-norm scales and shifts are exempt from weight decay.
    pub decay: bool,
}

#[derive(Clone, Copy, Debug)]
struct Layer {
    weight: usize,
    bias: usize,
    /// (scale, shift, running statistics) indices.
    norm: Option<(usize, usize, usize)>,
    activate: bool,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: NetworkConfig,
    pub params: Vec<Param>,
    /// Running batch-norm statistics, named after their layer.
    pub running: Vec<(String, RunningStats)>,
    encoder: Vec<Layer>,
    head: Vec<Layer>,
    projector: Vec<Layer>,
    predictor: Vec<Layer>,
}

/// Tape handles for every parameter, in [`Model::params`] order.
#[derive(Clone, Debug)]
pub struct Bound {
    pub vars: Vec<Var>,
}

struct Builder<'a> {
    params: Vec<Param>,
    running: Vec<(String, RunningStats)>,
    rng: &'a mut rand_chacha::ChaCha8Rng,
}

impl Builder<'_> {
    fn layer(
        &mut self,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        norm: bool,
        activate: bool,
    ) -> Layer {
        let bound = (1.0 / fan_in as f64).sqrt();
        let mut draw = |len: usize| -> Vec<f64> {
            (0..len)
                .map(|_| self.rng.random_range(-bound..=bound))
                .collect()
        };
        let w = draw(fan_in * fan_out);
        let b = draw(fan_out);
        let weight = self.push(
            format!("{name}.weight"),
            Tensor::matrix(fan_in, fan_out, w).expect("sized"),
            true,
        );
        let bias = self.push(format!("{name}.bias"), Tensor::vector(b), true);
        let norm = norm.then(|| {
            let scale = self.push(
                format!("{name}.bn.scale"),
                Tensor::vector(vec![1.0; fan_out]),
                false,
            );
            let shift = self.push(
                format!("{name}.bn.shift"),
                Tensor::vector(vec![0.0; fan_out]),
                false,
            );
            self.running
                .push((format!("{name}.bn"), RunningStats::new(fan_out)));
            (scale, shift, self.running.len() - 1)
        });
        Layer {
            weight,
            bias,
            norm,
            activate,
        }
    }

    fn push(&mut self, name: String, value: Tensor, decay: bool) -> usize {
        self.params.push(Param { name, value, decay });
        self.params.len() - 1
    }
}

impl Model {
    /// Fresh model with fan-in uniform initialization, a pure function of
    /// the config (including its seed).
    pub fn new(config: NetworkConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = seed::rng(seed::derive(config.seed, &[0x6e6574]));
        let mut b = Builder {
            params: Vec::new(),
            running: Vec::new(),
            rng: &mut rng,
        };
        let encoder = config
            .encoder_widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| b.layer(&format!("encoder.{i}"), w[0], w[1], true, true))
            .collect();
        let mut fan_in = config.feature_dim();
        let mut head = Vec::new();
        for (i, &w) in config.head_widths.iter().enumerate() {
            head.push(b.layer(
                &format!("head.{i}"),
                fan_in,
                w,
                true,
                i + 1 < config.head_widths.len(),
            ));
            fan_in = w;
        }
        let d = config.feature_dim();
        let projector = vec![
            b.layer("projector.0", d, config.proj_hidden, true, true),
            b.layer(
                "projector.1",
                config.proj_hidden,
                config.proj_hidden,
                true,
                true,
            ),
            b.layer(
                "projector.2",
                config.proj_hidden,
                config.proj_out,
                true,
                false,
            ),
        ];
        let predictor = vec![
            b.layer(
                "predictor.0",
                config.proj_out,
                config.pred_hidden,
                true,
                true,
            ),
            b.layer(
                "predictor.1",
                config.pred_hidden,
                config.proj_out,
                false,
                false,
            ),
        ];
        let (params, running) = (b.params, b.running);
        Ok(Self {
            config,
            params,
            running,
            encoder,
            head,
            projector,
            predictor,
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Puts every parameter on the tape as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound {
            vars: self
                .params
                .iter()
                .map(|p| tape.param(p.value.clone()))
                .collect(),
        }
    }

    /// Puts every parameter on the tape as a constant.
    pub fn bind_frozen(&self, tape: &mut Tape) -> Bound {
        Bound {
            vars: self
                .params
                .iter()
                .map(|p| tape.constant(p.value.clone()))
                .collect(),
        }
    }

    fn apply(
        &mut self,
        tape: &mut Tape,
        b: &Bound,
        layers: Stack,
        mut x: Var,
        mode: Mode,
    ) -> Result<Var> {
        let layers = match layers {
            Stack::Encoder => self.encoder.clone(),
            Stack::Head => self.head.clone(),
            Stack::Projector => self.projector.clone(),
            Stack::Predictor => self.predictor.clone(),
        };
        for layer in layers {
            let lin = tape.matmul(x, b.vars[layer.weight])?;
            x = tape.add_row(lin, b.vars[layer.bias])?;
            if let Some((scale, shift, stats)) = layer.norm {
                let running = &mut self.running[stats].1;
                x = diff::batch_norm(tape, x, b.vars[scale], b.vars[shift], BN_EPS, mode, running)?;
            }
            if layer.activate {
                x = tape.leaky_relu(x, LEAKY_SLOPE);
            }
        }
        Ok(x)
    }

    /// Per-point features (`N x d`) of an `N x 3` coordinate matrix.
    pub fn encode(&mut self, tape: &mut Tape, b: &Bound, points: Var, mode: Mode) -> Result<Var> {
        self.apply(tape, b, Stack::Encoder, points, mode)
    }

    /// Max-pooled global feature of per-point features.
    pub fn global_feature(tape: &mut Tape, features: Var) -> Result<Var> {
        tape.max_pool_rows(features)
    }

    /// Per-point logits (`N x J`).
    pub fn class_logits(
        &mut self,
        tape: &mut Tape,
        b: &Bound,
        features: Var,
        mode: Mode,
    ) -> Result<Var> {
        self.apply(tape, b, Stack::Head, features, mode)
    }

    /// Projector over a `B x d` batch of global features.
    pub fn project(&mut self, tape: &mut Tape, b: &Bound, h: Var, mode: Mode) -> Result<Var> {
        self.apply(tape, b, Stack::Projector, h, mode)
    }

    /// Predictor over a `B x proj_out` batch of projections.
    pub fn predict(&mut self, tape: &mut Tape, b: &Bound, z: Var, mode: Mode) -> Result<Var> {
        self.apply(tape, b, Stack::Predictor, z, mode)
    }

    /// Eval-mode global feature of one cloud, off any training tape.
    pub fn embed(&mut self, pc: &PointCloud) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let b = self.bind_frozen(&mut tape);
        let x = tape.constant(cloud_tensor(pc)?);
        let f = self.encode(&mut tape, &b, x, Mode::Eval)?;
        let h = Self::global_feature(&mut tape, f)?;
        Ok(tape.value(h).data().to_vec())
    }

    /// Eval-mode per-point logits of one cloud, off any training tape.
    pub fn logits(&mut self, pc: &PointCloud) -> Result<Tensor> {
        let mut tape = Tape::new();
        let b = self.bind_frozen(&mut tape);
        let x = tape.constant(cloud_tensor(pc)?);
        let f = self.encode(&mut tape, &b, x, Mode::Eval)?;
        let g = self.class_logits(&mut tape, &b, f, Mode::Eval)?;
        Ok(tape.value(g).clone())
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.all_finite())
            && self
                .running
                .iter()
                .all(|(_, r)| r.mean.iter().chain(&r.var).all(|v| v.is_finite()))
    }
}

#[derive(Clone, Copy)]
enum Stack {
    Encoder,
    Head,
    Projector,
    Predictor,
}

/// `N x 3` coordinate matrix of a cloud.
pub fn cloud_tensor(pc: &PointCloud) -> Result<Tensor> {
    Tensor::matrix(pc.len(), 3, pc.flat())
}

/// Parameter count implied by a config, without building the model.
pub fn expected_param_count(cfg: &NetworkConfig) -> usize {
    let linear = |i: usize, o: usize| i * o + o;
    let normed = |i: usize, o: usize| linear(i, o) + 2 * o;
    let enc: usize = cfg
        .encoder_widths
        .windows(2)
        .map(|w| normed(w[0], w[1]))
        .sum();
    let mut fan_in = cfg.feature_dim();
    let mut head = 0;
    for &w in &cfg.head_widths {
        head += normed(fan_in, w);
        fan_in = w;
    }
    let d = cfg.feature_dim();
    let proj = normed(d, cfg.proj_hidden)
        + normed(cfg.proj_hidden, cfg.proj_hidden)
        + normed(cfg.proj_hidden, cfg.proj_out);
    let pred = normed(cfg.proj_out, cfg.pred_hidden) + linear(cfg.pred_hidden, cfg.proj_out);
    enc + head + proj + pred
}
