//! Joint training: every step draws two views per cloud, reassigns
//! balanced pseudo-labels by optimal transport on each view (E-step), and
//! takes one optimizer step on the clustering and contrasting losses
//! (M-step).

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::diff::{Mode, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::{make_views, AugmentConfig, PointCloud};
use crate::network::{cloud_tensor, Bound, Model, NetworkConfig};
use crate::objectives::{self, LossBreakdown, ViewTerms};
use crate::optim::{lr_at, AdamW};
use crate::seed;
use crate::transport::{self, cost_matrix, pseudo_labels};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    #[default]
    Joint,
    GlobalOnly,
    LocalOnly,
}

impl LossMode {
    pub fn uses_global(self) -> bool {
        self != LossMode::LocalOnly
    }

    pub fn uses_local(self) -> bool {
        self != LossMode::GlobalOnly
    }
}

impl std::str::FromStr for LossMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "joint" => Ok(LossMode::Joint),
            "global_only" => Ok(LossMode::GlobalOnly),
            "local_only" => Ok(LossMode::LocalOnly),
            other => Err(Error::Config(format!(
                "unknown loss mode {other:?} (expected joint, global_only or local_only)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_decay: f64,
    pub lr_decay_every: u64,
    pub weight_decay: f64,
    pub eta: f64,
    pub sinkhorn_epsilon: f64,
    pub sinkhorn_iters: usize,
    pub augment: AugmentConfig,
    pub seed: u64,
    pub loss_mode: LossMode,
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 32,
            lr: 1e-3,
            lr_decay: 0.7,
            lr_decay_every: 20,
            weight_decay: 1e-2,
            eta: objectives::ETA,
            sinkhorn_epsilon: transport::DEFAULT_EPSILON,
            sinkhorn_iters: transport::DEFAULT_ITERS,
            augment: AugmentConfig::default(),
            seed: 0,
            loss_mode: LossMode::Joint,
            checkpoint_every: 20,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.lr > 0.0) || !(self.lr_decay > 0.0) || self.lr_decay_every == 0 {
            return bad("lr, lr_decay and lr_decay_every must be positive");
        }
        if !(self.weight_decay >= 0.0) || !(self.eta >= 0.0) {
            return bad("weight_decay and eta must be non-negative");
        }
        if !(self.sinkhorn_epsilon > 0.0) || self.sinkhorn_iters == 0 {
            return bad("sinkhorn_epsilon and sinkhorn_iters must be positive");
        }
        if self.checkpoint_every == 0 {
            return bad("checkpoint_every must be positive");
        }
        self.augment.validate()
    }

    pub fn lr_at(&self, epoch: u64) -> f64 {
        lr_at(epoch, self.lr, self.lr_decay, self.lr_decay_every)
    }
}

/// Everything that evolves during training.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: Model,
    pub optimizer: AdamW,
    /// Completed epochs.
    pub epoch: u64,
    /// Completed optimizer steps.
    pub step: u64,
    /// Master seed from which every random draw is derived.
    pub seed: u64,
}

impl TrainState {
    pub fn new(network: NetworkConfig, seed: u64) -> Result<Self> {
        let model = Model::new(network)?;
        let optimizer = AdamW::new(&model.params);
        Ok(Self {
            model,
            optimizer,
            epoch: 0,
            step: 0,
            seed,
        })
    }
}

/// Random-stream identifiers.
const VIEWS: u64 = 1;
const SHUFFLE: u64 = 2;

/// The two augmented views of every cloud in a batch.
pub type ViewPair = (PointCloud, PointCloud);

pub fn draw_views(
    batch: &[&PointCloud],
    cfg: &TrainConfig,
    seed: u64,
    epoch: u64,
    step: u64,
) -> Result<Vec<ViewPair>> {
    batch
        .iter()
        .enumerate()
        .map(|(k, pc)| {
            let s = seed::derive(seed, &[epoch, step, k as u64, VIEWS]);
            make_views(pc, &cfg.augment, s).map_err(|e| e.at_cloud(k))
        })
        .collect()
}

/// Per-view quantities produced by the forward pass.
struct ViewForward {
    pooled: Vec<Var>,
    /// (probabilities, prototypes, constant point coordinates) per cloud.
    clustering: Vec<Option<(Var, Var, Tensor)>>,
}

fn forward_view(
    model: &mut Model,
    tape: &mut Tape,
    b: &Bound,
    clouds: &[&PointCloud],
    mode: Mode,
    local: bool,
) -> Result<ViewForward> {
    let coords: Vec<Tensor> = clouds
        .iter()
        .map(|pc| cloud_tensor(pc))
        .collect::<Result<_>>()?;
    let mut features = Vec::with_capacity(clouds.len());
    let mut logits = Vec::with_capacity(clouds.len());
    if model.config.bn_over_batch {
        let total: usize = clouds.iter().map(|pc| pc.len()).sum();
        let all: Vec<f64> = coords
            .iter()
            .flat_map(|t| t.data().iter().copied())
            .collect();
        let x = tape.constant(Tensor::matrix(total, 3, all)?);
        let f = model.encode(tape, b, x, mode)?;
        let g = if local {
            Some(model.class_logits(tape, b, f, mode)?)
        } else {
            None
        };
        let mut start = 0;
        for pc in clouds {
            let end = start + pc.len();
            features.push(tape.slice_rows(f, start, end)?);
            logits.push(g.map(|g| tape.slice_rows(g, start, end)).transpose()?);
            start = end;
        }
    } else {
        for (k, t) in coords.iter().enumerate() {
            let x = tape.constant(t.clone());
            let f = model.encode(tape, b, x, mode).map_err(|e| e.at_cloud(k))?;
            let g = if local {
                Some(
                    model
                        .class_logits(tape, b, f, mode)
                        .map_err(|e| e.at_cloud(k))?,
                )
            } else {
                None
            };
            features.push(f);
            logits.push(g);
        }
    }
    let mut pooled = Vec::with_capacity(clouds.len());
    let mut clustering = Vec::with_capacity(clouds.len());
    for (k, (f, g)) in features.into_iter().zip(logits).enumerate() {
        pooled.push(Model::global_feature(tape, f)?);
        clustering.push(match g {
            Some(g) => {
                let s = objectives::class_probabilities(tape, g).map_err(|e| e.at_cloud(k))?;
                let x = tape.constant(coords[k].clone());
                let c = objectives::prototypes(tape, x, s).map_err(|e| e.at_cloud(k))?;
                Some((s, c, coords[k].clone()))
            }
            None => None,
        });
    }
    Ok(ViewForward { pooled, clustering })
}

/// Pseudo-labels for one view of one cloud: transport between its points
/// and the current prototype values. Only plain values cross into the
/// solver, so nothing it produces is on the tape.
fn assign(tape: &Tape, protos: Var, coords: &Tensor, cfg: &TrainConfig) -> Result<Tensor> {
    let d = cost_matrix(coords, tape.value(protos))?;
    let plan = transport::sinkhorn(&d, cfg.sinkhorn_epsilon, cfg.sinkhorn_iters)?;
    Ok(pseudo_labels(&plan))
}

/// Forward pass and loss over a batch of view pairs.
pub struct BatchLoss {
    pub tape: Tape,
    pub bound: Bound,
    /// Batch-mean total loss, the differentiated scalar.
    pub loss: Var,
    pub per_cloud: Vec<LossBreakdown>,
    /// Pseudo-labels per cloud as (view a, view b), when clustering ran.
    pub gammas: Vec<Option<(Tensor, Tensor)>>,
    pub projections: Option<(Tensor, Tensor)>,
}

impl BatchLoss {
    pub fn breakdown(&self) -> LossBreakdown {
        LossBreakdown::mean(&self.per_cloud)
    }
}

/// Quantities to hold fixed instead of recomputing them from the current
/// parameters.
#[derive(Clone, Copy, Debug, Default)]
pub struct Frozen<'a> {
    /// Pseudo-labels per cloud, reused instead of solving transport.
    pub gammas: Option<&'a [Option<(Tensor, Tensor)>]>,
    /// Projections `(z_a, z_b)` (each `B x proj_out`) used as the
    /// stop-gradient targets of the contrasting loss.
    pub targets: Option<&'a (Tensor, Tensor)>,
}

/// Builds the full training objective on a fresh tape.
pub fn batch_loss(
    model: &mut Model,
    views: &[ViewPair],
    cfg: &TrainConfig,
    mode: Mode,
    frozen: Frozen<'_>,
) -> Result<BatchLoss> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let terms = loss_on_tape(model, &mut tape, &bound, views, cfg, mode, frozen)?;
    Ok(BatchLoss {
        tape,
        bound,
        loss: terms.loss,
        per_cloud: terms.per_cloud,
        gammas: terms.gammas,
        projections: terms.projections,
    })
}

/// The loss graph of [`batch_loss`], recorded on `tape` against parameter
/// handles `b` (which may be constants).
pub struct LossTerms {
    pub loss: Var,
    pub per_cloud: Vec<LossBreakdown>,
    pub gammas: Vec<Option<(Tensor, Tensor)>>,
    /// `(z_a, z_b)` when the contrasting branch ran.
    pub projections: Option<(Tensor, Tensor)>,
}

pub fn loss_on_tape(
    model: &mut Model,
    tape: &mut Tape,
    b: &Bound,
    views: &[ViewPair],
    cfg: &TrainConfig,
    mode: Mode,
    frozen: Frozen<'_>,
) -> Result<LossTerms> {
    if views.is_empty() {
        return Err(Error::EmptyInput("training batch"));
    }
    let lm = cfg.loss_mode;
    if lm.uses_global() && views.len() < 2 && mode == Mode::Train {
        return Err(Error::BatchTooSmall(views.len()));
    }
    if frozen.gammas.is_some_and(|f| f.len() != views.len()) {
        return Err(Error::Config(
            "frozen pseudo-labels must cover every cloud of the batch".into(),
        ));
    }
    let va: Vec<&PointCloud> = views.iter().map(|v| &v.0).collect();
    let vb: Vec<&PointCloud> = views.iter().map(|v| &v.1).collect();
    let fa = forward_view(model, tape, b, &va, mode, lm.uses_local())?;
    let fb = forward_view(model, tape, b, &vb, mode, lm.uses_local())?;

    let mut projections = None;
    let global = if lm.uses_global() {
        let ha = tape.stack_rows(&fa.pooled)?;
        let hb = tape.stack_rows(&fb.pooled)?;
        let za = model.project(tape, b, ha, mode)?;
        let zb = model.project(tape, b, hb, mode)?;
        let qa = model.predict(tape, b, za, mode)?;
        let qb = model.predict(tape, b, zb, mode)?;
        projections = Some((tape.value(za).clone(), tape.value(zb).clone()));
        let (za, zb) = match frozen.targets {
            Some((ta, tb)) => (tape.constant(ta.clone()), tape.constant(tb.clone())),
            None => (za, zb),
        };
        let mut terms = Vec::with_capacity(views.len());
        for k in 0..views.len() {
            let row = |tape: &mut Tape, v: Var| tape.slice_rows(v, k, k + 1);
            let (qa_k, zb_k, qb_k, za_k) = (
                row(tape, qa)?,
                row(tape, zb)?,
                row(tape, qb)?,
                row(tape, za)?,
            );
            terms.push(
                objectives::global_loss(tape, qa_k, zb_k, qb_k, za_k).map_err(|e| e.at_cloud(k))?,
            );
        }
        Some(terms)
    } else {
        None
    };

    let mut per_cloud = Vec::with_capacity(views.len());
    let mut gammas = Vec::with_capacity(views.len());
    let mut total: Option<Var> = None;
    for k in 0..views.len() {
        let mut cloud_loss = global.as_ref().map(|g| g[k]);
        let g_val = cloud_loss.map_or(0.0, |v| tape.value(v).item());
        let mut bd = LossBreakdown::assemble(0.0, 0.0, 0.0, 0.0, g_val, cfg.eta);
        match (&fa.clustering[k], &fb.clustering[k]) {
            (Some((sa, ca, xa)), Some((sb, cb, xb))) => {
                let (ga, gb) = match frozen.gammas.and_then(|f| f[k].clone()) {
                    Some(pair) => pair,
                    None => (
                        assign(tape, *ca, xa, cfg).map_err(|e| e.at_cloud(k))?,
                        assign(tape, *cb, xb, cfg).map_err(|e| e.at_cloud(k))?,
                    ),
                };
                let ta: ViewTerms =
                    objectives::view_terms(tape, *sa, *ca, &ga).map_err(|e| e.at_cloud(k))?;
                let tb: ViewTerms =
                    objectives::view_terms(tape, *sb, *cb, &gb).map_err(|e| e.at_cloud(k))?;
                let local = objectives::local_loss(tape, ta, tb, cfg.eta)?;
                let v = |t: &Tape, x: Var| t.value(x).item();
                bd = LossBreakdown::assemble(
                    v(tape, ta.ce),
                    v(tape, tb.ce),
                    v(tape, ta.orth),
                    v(tape, tb.orth),
                    g_val,
                    cfg.eta,
                );
                cloud_loss = Some(match cloud_loss {
                    Some(g) => objectives::total_loss(tape, g, local)?,
                    None => local,
                });
                gammas.push(Some((ga, gb)));
            }
            _ => gammas.push(None),
        }
        let cloud_loss =
            cloud_loss.ok_or_else(|| Error::Config("loss mode produced no loss terms".into()))?;
        if !bd.total.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss {bd:?}")).at_cloud(k));
        }
        per_cloud.push(bd);
        total = Some(match total {
            Some(t) => tape.add(t, cloud_loss)?,
            None => cloud_loss,
        });
    }
    let total = total.expect("batch is non-empty");
    let loss = tape.scale(total, 1.0 / views.len() as f64);
    Ok(LossTerms {
        loss,
        per_cloud,
        gammas,
        projections,
    })
}

/// One optimization step on a batch of clouds. Views are drawn from the
/// state's seed and counters, so the step is a pure function of
/// (state, batch, cfg).
pub fn train_step(
    state: &mut TrainState,
    batch: &[&PointCloud],
    cfg: &TrainConfig,
) -> Result<LossBreakdown> {
    let views = draw_views(batch, cfg, state.seed, state.epoch, state.step)?;
    step_on_views(state, &views, cfg)
}

/// One optimization step on given views.
pub fn step_on_views(
    state: &mut TrainState,
    views: &[ViewPair],
    cfg: &TrainConfig,
) -> Result<LossBreakdown> {
    let mut model = state.model.clone();
    let mut out = batch_loss(&mut model, views, cfg, Mode::Train, Frozen::default())?;
    let grads = out.tape.backward(out.loss)?;
    let grads: Vec<Vec<f64>> = model
        .params
        .iter()
        .zip(&out.bound.vars)
        .map(|(p, v)| grads.get_or_zeros(*v, p.value.len()))
        .collect();
    let lr = cfg.lr_at(state.epoch);
    state
        .optimizer
        .update(&mut model.params, &grads, lr, cfg.weight_decay, state.step)?;
    if !model.all_finite() {
        return Err(Error::Numeric(format!(
            "parameters became non-finite at step {}",
            state.step
        )));
    }
    state.model = model;
    state.step += 1;
    Ok(out.breakdown())
}

/// Shuffled batches of dataset indices for one epoch. A trailing batch of a
/// single cloud is folded into the previous one, since the projector
/// normalizes over the batch.
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed::rng(seed::derive(seed, &[epoch, SHUFFLE])));
    let mut batches: Vec<Vec<usize>> = order
        .chunks(batch_size.max(1))
        .map(<[usize]>::to_vec)
        .collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() == 1) {
        let last = batches.pop().expect("checked");
        batches.last_mut().expect("checked").extend(last);
    }
    batches
}

/// One row of the training log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: u64,
    pub epoch: u64,
    pub lr: f64,
    #[serde(flatten)]
    pub loss: LossBreakdown,
}

pub const LOG_HEADER: &str = "step,epoch,lr,ce_a,ce_b,orth_a,orth_b,local,global,total";

impl LogRow {
    pub fn csv(&self) -> String {
        let l = &self.loss;
        format!(
            "{},{},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e}",
            self.step,
            self.epoch,
            self.lr,
            l.ce_a,
            l.ce_b,
            l.orth_a,
            l.orth_b,
            l.local,
            l.global,
            l.total
        )
    }
}

/// Where [`train`] writes its artifacts.
#[derive(Clone, Debug)]
pub struct Outputs {
    pub dir: PathBuf,
}

impl Outputs {
    pub fn log_path(&self) -> PathBuf {
        self.dir.join("train_log.csv")
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.dir.join("checkpoints")
    }

    pub fn checkpoint_path(&self, epoch: u64) -> PathBuf {
        self.checkpoint_dir().join(format!("epoch-{epoch:04}.ccl"))
    }
}

pub struct TrainReport {
    pub log: Vec<LogRow>,
    pub checkpoints: Vec<PathBuf>,
}

/// Trains from `state` until `cfg.epochs` epochs are complete. With
/// `outputs`, appends every step to the CSV log and writes a checkpoint
/// every `checkpoint_every` epochs and after the last one.
pub fn train(
    state: &mut TrainState,
    dataset: &[PointCloud],
    cfg: &TrainConfig,
    outputs: Option<&Outputs>,
) -> Result<TrainReport> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::EmptyInput("training dataset"));
    }
    if cfg.loss_mode.uses_global() && dataset.len() < 2 {
        return Err(Error::BatchTooSmall(dataset.len()));
    }
    let mut log_file = match outputs {
        Some(o) => {
            fs::create_dir_all(o.checkpoint_dir())?;
            let path = o.log_path();
            let fresh = !path.exists() || state.step == 0;
            let file = if fresh {
                File::create(&path)?
            } else {
                File::options().append(true).open(&path)?
            };
            let mut w = BufWriter::new(file);
            if fresh {
                writeln!(w, "{LOG_HEADER}")?;
            }
            Some(w)
        }
        None => None,
    };
    let mut report = TrainReport {
        log: Vec::new(),
        checkpoints: Vec::new(),
    };
    let result = (|| -> Result<()> {
        while state.epoch < cfg.epochs {
            let lr = cfg.lr_at(state.epoch);
            for idx in epoch_batches(dataset.len(), cfg.batch_size, state.seed, state.epoch) {
                let batch: Vec<&PointCloud> = idx.iter().map(|&i| &dataset[i]).collect();
                let step = state.step;
                let loss = train_step(state, &batch, cfg)?;
                let row = LogRow {
                    step,
                    epoch: state.epoch,
                    lr,
                    loss,
                };
                if let Some(w) = log_file.as_mut() {
                    writeln!(w, "{}", row.csv())?;
                }
                report.log.push(row);
            }
            state.epoch += 1;
            if let Some(o) = outputs {
                if state.epoch.is_multiple_of(cfg.checkpoint_every) || state.epoch == cfg.epochs {
                    let path = o.checkpoint_path(state.epoch);
                    crate::checkpoint::save(&path, state, cfg)?;
                    report.checkpoints.push(path);
                }
            }
        }
        Ok(())
    })();
    if let Some(mut w) = log_file {
        w.flush()?;
    }
    result.map(|()| report)
}

/// Reads a training log written by [`train`].
pub fn read_log(path: &Path) -> Result<Vec<LogRow>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == LOG_HEADER => {}
        _ => {
            return Err(Error::Parse {
                path: path.into(),
                line: 1,
                msg: "missing training-log header".into(),
            })
        }
    }
    lines
        .map(|(i, line)| {
            let bad = |msg: String| Error::Parse {
                path: path.into(),
                line: i + 1,
                msg,
            };
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 10 {
                return Err(bad(format!("expected 10 fields, found {}", f.len())));
            }
            let num = |k: usize| {
                f[k].parse::<f64>()
                    .map_err(|e| bad(format!("field {k}: {e}")))
            };
            let int = |k: usize| {
                f[k].parse::<u64>()
                    .map_err(|e| bad(format!("field {k}: {e}")))
            };
            Ok(LogRow {
                step: int(0)?,
                epoch: int(1)?,
                lr: num(2)?,
                loss: LossBreakdown {
                    ce_a: num(3)?,
                    ce_b: num(4)?,
                    orth_a: num(5)?,
                    orth_b: num(6)?,
                    local: num(7)?,
                    global: num(8)?,
                    total: num(9)?,
                    eta: 0.0,
                },
            })
        })
        .collect()
}
