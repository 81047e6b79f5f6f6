#![allow(dead_code)]

use conclu::diff::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Entropic transport solved without any row/column scaling: gradient
/// ascent on the dual potentials
/// `max_{f,g} a·f + b·g - ε Σ exp((f_i + g_j - D_ij)/ε)`
/// until the gradient (the marginal violation) has norm below `tol`.
///
/// The step is `ε / (2 L)` where `L` bounds the current row and column
/// masses, a Gershgorin bound on the Hessian, so every step is stable.
pub fn entropic_dual_oracle(d: &Tensor, eps: f64, tol: f64, max_steps: usize) -> (Tensor, usize) {
    let (n, j) = (d.rows(), d.cols());
    let (a, b) = (1.0 / n as f64, 1.0 / j as f64);
    let mut f = vec![eps * a.ln(); n];
    let mut g = vec![eps * b.ln(); j];
    let plan = |f: &[f64], g: &[f64]| -> Vec<f64> {
        (0..n * j)
            .map(|k| ((f[k / j] + g[k % j] - d.data()[k]) / eps).exp())
            .collect()
    };
    for step in 0..max_steps {
        let p = plan(&f, &g);
        let rows: Vec<f64> = (0..n).map(|i| p[i * j..(i + 1) * j].iter().sum()).collect();
        let cols: Vec<f64> = (0..j).map(|c| (0..n).map(|i| p[i * j + c]).sum()).collect();
        let grad_f: Vec<f64> = rows.iter().map(|r| a - r).collect();
        let grad_g: Vec<f64> = cols.iter().map(|c| b - c).collect();
        let norm = grad_f
            .iter()
            .chain(&grad_g)
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        if norm < tol {
            return (Tensor::matrix(n, j, p).unwrap(), step);
        }
        let lip = rows.iter().chain(&cols).copied().fold(a.max(b), f64::max);
        let lr = eps / (2.0 * lip);
        f.iter_mut().zip(&grad_f).for_each(|(x, d)| *x += lr * d);
        g.iter_mut().zip(&grad_g).for_each(|(x, d)| *x += lr * d);
    }
    panic!("dual oracle did not converge in {max_steps} steps");
}

pub fn random_matrix(rng: &mut ChaCha8Rng, n: usize, j: usize) -> Tensor {
    Tensor::matrix(n, j, (0..n * j).map(|_| rng.random::<f64>()).collect()).unwrap()
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

use conclu::geometry::{synthetic_dataset, AugmentConfig, PointCloud, ShapeKind};
use conclu::network::NetworkConfig;
use conclu::trainer::TrainConfig;

/// A network small enough for finite differences and quick runs.
pub fn tiny_network(j: usize, seed: u64) -> NetworkConfig {
    NetworkConfig {
        encoder_widths: vec![3, 8, 12],
        head_widths: vec![10, 8, j],
        proj_hidden: 8,
        proj_out: 6,
        pred_hidden: 4,
        num_prototypes: j,
        bn_over_batch: false,
        seed,
    }
}

/// Desk-scale widths used by the end-to-end runs.
pub fn desk_network(j: usize, seed: u64) -> NetworkConfig {
    NetworkConfig {
        encoder_widths: vec![3, 32, 64, 128],
        head_widths: vec![128, 64, j],
        proj_hidden: 64,
        proj_out: 32,
        pred_hidden: 16,
        num_prototypes: j,
        bn_over_batch: false,
        seed,
    }
}

pub fn quick_train_config(epochs: u64, batch_size: usize, points: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size,
        seed,
        augment: AugmentConfig {
            out_points: points,
            ..AugmentConfig::default()
        },
        ..TrainConfig::default()
    }
}

pub fn shapes(per_class: usize, points: usize, seed: u64) -> Vec<PointCloud> {
    synthetic_dataset(
        &[ShapeKind::Sphere, ShapeKind::Box, ShapeKind::Cylinder],
        per_class,
        points,
        seed,
    )
    .unwrap()
}

use conclu::diff::{finite_diff_check, GradCheck, Mode, Tape};
use conclu::network::{cloud_tensor, Bound, Model};
use conclu::objectives;
use conclu::trainer::{batch_loss, draw_views, loss_on_tape, Frozen};

/// Central differences of the joint objective on a fixed 2-cloud batch,
/// over every parameter of a tiny model. Pseudo-labels and the
/// contrasting targets are held at their values for the unperturbed
/// parameters, which is what the analytic gradient treats as constant.
/// Returns the check and the parameter count.
pub fn full_loss_gradient_check(seed: u64, h: f64) -> (GradCheck, usize) {
    let data = shapes(1, 16, 12);
    let batch: Vec<_> = data[..2].iter().collect();
    let cfg = quick_train_config(1, 2, 16, seed);
    let views = draw_views(&batch, &cfg, seed, 0, 0).unwrap();
    let model = Model::new(tiny_network(3, seed)).unwrap();
    let base = batch_loss(
        &mut model.clone(),
        &views,
        &cfg,
        Mode::Train,
        Frozen::default(),
    )
    .unwrap();
    let (gammas, targets) = (base.gammas.clone(), base.projections.clone());
    let frozen = Frozen {
        gammas: Some(&gammas),
        targets: targets.as_ref(),
    };

    // holding the targets fixed is exactly what the stop-gradient does
    let grads = |frozen: Frozen<'_>| {
        let mut out = batch_loss(&mut model.clone(), &views, &cfg, Mode::Train, frozen).unwrap();
        let g = out.tape.backward(out.loss).unwrap();
        out.bound
            .vars
            .iter()
            .zip(&model.params)
            .map(|(v, p)| g.get_or_zeros(*v, p.value.len()))
            .collect::<Vec<_>>()
    };
    let only_labels = Frozen {
        gammas: Some(&gammas),
        targets: None,
    };
    assert_eq!(grads(only_labels), grads(frozen));

    let inputs: Vec<_> = model.params.iter().map(|p| p.value.clone()).collect();
    let check = finite_diff_check(
        |tape: &mut Tape, vars| {
            let b = Bound {
                vars: vars.to_vec(),
            };
            Ok(loss_on_tape(
                &mut model.clone(),
                tape,
                &b,
                &views,
                &cfg,
                Mode::Train,
                frozen,
            )?
            .loss)
        },
        &inputs,
        h,
    )
    .unwrap();
    (check, model.param_count())
}

/// Gradients of the contrasting loss with respect to two separately bound
/// copies of the model, one per branch. Without `symmetric` the loss is
/// `D(q_a, stopgrad(z_b))`; with it, both symmetric terms.
pub fn branch_gradients(seed: u64, symmetric: bool) -> (Vec<f64>, Vec<f64>) {
    let data = shapes(1, 24, 13);
    let batch: Vec<_> = data.iter().collect();
    let cfg = quick_train_config(1, 3, 24, seed);
    let views = draw_views(&batch, &cfg, seed, 0, 0).unwrap();
    let mut model = Model::new(tiny_network(3, seed)).unwrap();
    let mut tape = Tape::new();
    let ba = model.bind(&mut tape);
    let bb = model.bind(&mut tape);
    let mut branch = |tape: &mut Tape, b: &Bound, second: bool| {
        let pooled: Vec<_> = views
            .iter()
            .map(|v| {
                let pc = if second { &v.1 } else { &v.0 };
                let x = tape.constant(cloud_tensor(pc).unwrap());
                let f = model.encode(tape, b, x, Mode::Train).unwrap();
                Model::global_feature(tape, f).unwrap()
            })
            .collect();
        let h = tape.stack_rows(&pooled).unwrap();
        let z = model.project(tape, b, h, Mode::Train).unwrap();
        let q = model.predict(tape, b, z, Mode::Train).unwrap();
        (z, q)
    };
    let (za, qa) = branch(&mut tape, &ba, false);
    let (zb, qb) = branch(&mut tape, &bb, true);
    let mut terms = Vec::new();
    for k in 0..views.len() {
        let mut row = |v| tape.slice_rows(v, k, k + 1).unwrap();
        let (qa, zb, qb, za) = (row(qa), row(zb), row(qb), row(za));
        terms.push(if symmetric {
            objectives::global_loss(&mut tape, qa, zb, qb, za).unwrap()
        } else {
            let stopped = tape.stop_gradient(zb);
            objectives::cosine_distance(&mut tape, qa, stopped).unwrap()
        });
    }
    let mut loss = terms[0];
    for t in &terms[1..] {
        loss = tape.add(loss, *t).unwrap();
    }
    let g = tape.backward(loss).unwrap();
    let collect = |b: &Bound| -> Vec<f64> {
        b.vars
            .iter()
            .zip(&model.params)
            .flat_map(|(v, p)| g.get_or_zeros(*v, p.value.len()))
            .collect()
    };
    (collect(&ba), collect(&bb))
}
