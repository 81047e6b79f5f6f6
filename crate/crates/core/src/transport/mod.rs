//! Entropic optimal transport between a cloud's points and its prototypes
//! under uniform marginals, solved by Sinkhorn-Knopp scaling.
//!
//! The plan Γ minimizes `<Γ, D> - ε H(Γ)` subject to row sums `1/N` and
//! column sums `1/J`. Each sweep rescales rows then columns, so at exit the
//! column marginals hold to roundoff and the row marginals carry whatever
//! residual the finite iteration count leaves.

pub mod exact;

use std::cell::Cell;

use crate::diff::Tensor;
use crate::error::{Error, Result};

pub const DEFAULT_EPSILON: f64 = 1e-3;
pub const DEFAULT_ITERS: usize = 20;

/// Above this value of `max(D)/ε` the plain kernel is at risk of
/// underflow and the solver switches to log-domain potentials.
pub const LOG_DOMAIN_THRESHOLD: f64 = 600.0;

thread_local! {
    static CALLS: Cell<u64> = const { Cell::new(0) };
}

/// Number of solver invocations made on the current thread.
pub fn sinkhorn_calls() -> u64 {
    CALLS.with(Cell::get)
}

/// Squared Euclidean distances between the rows of `points` (`N x d`) and
/// the rows of `protos` (`J x d`).
pub fn cost_matrix(points: &Tensor, protos: &Tensor) -> Result<Tensor> {
    if points.cols() != protos.cols() {
        return Err(Error::Dimension {
            op: "cost_matrix",
            left: points.shape().to_vec(),
            right: protos.shape().to_vec(),
        });
    }
    let (n, j) = (points.rows(), protos.rows());
    let mut d = Vec::with_capacity(n * j);
    for i in 0..n {
        let p = points.row(i);
        for k in 0..j {
            d.push(
                p.iter()
                    .zip(protos.row(k))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum(),
            );
        }
    }
    Tensor::matrix(n, j, d)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransportPlan {
    /// Γ, an `N x J` joint distribution.
    pub gamma_joint: Tensor,
    pub epsilon: f64,
    pub iterations: usize,
    pub log_domain: bool,
}

impl TransportPlan {
    /// Largest `|row sum - 1/N|`.
    pub fn row_deviation(&self) -> f64 {
        row_deviation(&self.gamma_joint)
    }

    /// Largest `|column sum - 1/J|`.
    pub fn col_deviation(&self) -> f64 {
        let g = &self.gamma_joint;
        let target = 1.0 / g.cols() as f64;
        column_sums(g)
            .iter()
            .map(|s| (s - target).abs())
            .fold(0.0, f64::max)
    }
}

fn row_deviation(g: &Tensor) -> f64 {
    let target = 1.0 / g.rows() as f64;
    (0..g.rows())
        .map(|i| (g.row(i).iter().sum::<f64>() - target).abs())
        .fold(0.0, f64::max)
}

fn column_sums(g: &Tensor) -> Vec<f64> {
    let mut sums = vec![0.0; g.cols()];
    for i in 0..g.rows() {
        for (s, v) in sums.iter_mut().zip(g.row(i)) {
            *s += v;
        }
    }
    sums
}

/// Which arithmetic the solver uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Domain {
    /// Plain scaling unless `max(D)/ε` exceeds [`LOG_DOMAIN_THRESHOLD`].
    #[default]
    Auto,
    Plain,
    Log,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SinkhornOptions {
    pub epsilon: f64,
    /// Sweep count, or the cap on sweeps when `tolerance` is set.
    pub iters: usize,
    /// Stop as soon as the row deviation falls to this value.
    pub tolerance: Option<f64>,
    pub domain: Domain,
}

impl Default for SinkhornOptions {
    fn default() -> Self {
        Self {
            epsilon: DEFAULT_EPSILON,
            iters: DEFAULT_ITERS,
            tolerance: None,
            domain: Domain::Auto,
        }
    }
}

/// Fixed-iteration Sinkhorn with kernel `exp(-D/ε)`.
pub fn sinkhorn(d: &Tensor, epsilon: f64, iters: usize) -> Result<TransportPlan> {
    sinkhorn_with(
        d,
        &SinkhornOptions {
            epsilon,
            iters,
            ..SinkhornOptions::default()
        },
    )
}

pub fn sinkhorn_with(d: &Tensor, opts: &SinkhornOptions) -> Result<TransportPlan> {
    solve(d, opts, None)
}

/// Runs the solver and returns the plan after every full sweep.
pub fn sinkhorn_trace(d: &Tensor, opts: &SinkhornOptions) -> Result<Vec<Tensor>> {
    let mut trace = Vec::new();
    solve(d, opts, Some(&mut |g: &Tensor| trace.push(g.clone())))?;
    Ok(trace)
}

fn validate(d: &Tensor, opts: &SinkhornOptions) -> Result<()> {
    if !(opts.epsilon > 0.0) || !opts.epsilon.is_finite() {
        return Err(Error::Config(format!(
            "sinkhorn epsilon must be positive, got {}",
            opts.epsilon
        )));
    }
    if opts.iters == 0 {
        return Err(Error::Config(
            "sinkhorn needs at least one iteration".into(),
        ));
    }
    if d.shape().len() != 2 || d.is_empty() {
        return Err(Error::EmptyInput("sinkhorn cost matrix"));
    }
    if d.data().iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::Numeric(
            "cost matrix must be finite and non-negative".into(),
        ));
    }
    Ok(())
}

type Observer<'a> = Option<&'a mut dyn FnMut(&Tensor)>;

fn solve(d: &Tensor, opts: &SinkhornOptions, observer: Observer<'_>) -> Result<TransportPlan> {
    CALLS.with(|c| c.set(c.get() + 1));
    validate(d, opts)?;
    let d_max = d.data().iter().copied().fold(0.0, f64::max);
    let log_domain = match opts.domain {
        Domain::Auto => d_max / opts.epsilon > LOG_DOMAIN_THRESHOLD,
        Domain::Plain => false,
        Domain::Log => true,
    };
    let (gamma, iterations) = if log_domain {
        solve_log(d, opts, observer)?
    } else {
        solve_plain(d, opts, observer)?
    };
    if !gamma.all_finite() {
        return Err(Error::Numeric("sinkhorn produced a non-finite plan".into()));
    }
    Ok(TransportPlan {
        gamma_joint: gamma,
        epsilon: opts.epsilon,
        iterations,
        log_domain,
    })
}

fn solve_plain(
    d: &Tensor,
    opts: &SinkhornOptions,
    mut observer: Observer<'_>,
) -> Result<(Tensor, usize)> {
    let (n, j) = (d.rows(), d.cols());
    let d_min = d.data().iter().copied().fold(f64::INFINITY, f64::min);
    let data: Vec<f64> = d
        .data()
        .iter()
        .map(|v| (-(v - d_min) / opts.epsilon).exp())
        .collect();
    let mut g = Tensor::matrix(n, j, data)?;
    let (row_target, col_target) = (1.0 / n as f64, 1.0 / j as f64);
    let mut done = 0;
    for _ in 0..opts.iters {
        for i in 0..n {
            let row = &mut g.data_mut()[i * j..(i + 1) * j];
            let s: f64 = row.iter().sum();
            if !(s > 0.0) {
                return Err(Error::Numeric(format!(
                    "sinkhorn row {i} vanished in the plain kernel"
                )));
            }
            let f = row_target / s;
            row.iter_mut().for_each(|v| *v *= f);
        }
        let sums = column_sums(&g);
        if let Some(k) = sums.iter().position(|s| !(*s > 0.0)) {
            return Err(Error::Numeric(format!(
                "sinkhorn column {k} vanished in the plain kernel"
            )));
        }
        let factors: Vec<f64> = sums.iter().map(|s| col_target / s).collect();
        for row in g.data_mut().chunks_mut(j) {
            row.iter_mut().zip(&factors).for_each(|(v, f)| *v *= f);
        }
        done += 1;
        if let Some(obs) = observer.as_deref_mut() {
            obs(&g);
        }
        if opts.tolerance.is_some_and(|tol| row_deviation(&g) <= tol) {
            break;
        }
    }
    Ok((g, done))
}

/// Terms this far below the running maximum contribute nothing to a
/// log-sum-exp in double precision and are skipped.
const LSE_CUTOFF: f64 = 60.0;

fn solve_log(
    d: &Tensor,
    opts: &SinkhornOptions,
    mut observer: Observer<'_>,
) -> Result<(Tensor, usize)> {
    let (n, j) = (d.rows(), d.cols());
    let eps = opts.epsilon;
    let k: Vec<f64> = d.data().iter().map(|v| -v / eps).collect();
    let (log_r, log_c) = (-(n as f64).ln(), -(j as f64).ln());
    let mut f = vec![0.0; n];
    let mut g = vec![0.0; j];
    let mut colmax = vec![0.0; j];
    let mut colsum = vec![0.0; j];
    let mut done = 0;
    let plan = |f: &[f64], g: &[f64]| -> Result<Tensor> {
        let data = k
            .chunks(j)
            .zip(f)
            .flat_map(|(row, fi)| row.iter().zip(g).map(move |(kv, gj)| (kv + fi + gj).exp()))
            .collect();
        Tensor::matrix(n, j, data)
    };
    for _ in 0..opts.iters {
        for (i, row) in k.chunks(j).enumerate() {
            let m = row
                .iter()
                .zip(&g)
                .map(|(a, b)| a + b)
                .fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = row
                .iter()
                .zip(&g)
                .map(|(a, b)| a + b - m)
                .filter(|x| *x > -LSE_CUTOFF)
                .map(f64::exp)
                .sum();
            f[i] = log_r - (m + s.ln());
        }
        colmax.fill(f64::NEG_INFINITY);
        for (row, fi) in k.chunks(j).zip(&f) {
            for (cm, kv) in colmax.iter_mut().zip(row) {
                *cm = cm.max(kv + fi);
            }
        }
        colsum.fill(0.0);
        for (row, fi) in k.chunks(j).zip(&f) {
            for ((cs, kv), cm) in colsum.iter_mut().zip(row).zip(&colmax) {
                let x = kv + fi - cm;
                if x > -LSE_CUTOFF {
                    *cs += x.exp();
                }
            }
        }
        for ((gj, cm), cs) in g.iter_mut().zip(&colmax).zip(&colsum) {
            *gj = log_c - (cm + cs.ln());
        }
        if f.iter().chain(&g).any(|v| !v.is_finite()) {
            return Err(Error::Numeric(
                "sinkhorn potentials became non-finite".into(),
            ));
        }
        done += 1;
        if observer.is_some() || opts.tolerance.is_some() {
            let gamma = plan(&f, &g)?;
            if let Some(obs) = observer.as_deref_mut() {
                obs(&gamma);
            }
            if opts
                .tolerance
                .is_some_and(|tol| row_deviation(&gamma) <= tol)
            {
                return Ok((gamma, done));
            }
        }
    }
    Ok((plan(&f, &g)?, done))
}

/// γ = N·Γ: per-point soft assignments whose rows sum to ~1.
pub fn pseudo_labels(plan: &TransportPlan) -> Tensor {
    let n = plan.gamma_joint.rows() as f64;
    let data = plan.gamma_joint.data().iter().map(|v| v * n).collect();
    Tensor::new(plan.gamma_joint.shape().to_vec(), data).expect("shape is unchanged")
}

/// `<Γ, D>`.
pub fn transport_cost(gamma: &Tensor, d: &Tensor) -> f64 {
    gamma.data().iter().zip(d.data()).map(|(g, c)| g * c).sum()
}

/// `-Σ Γ ln Γ` with `0 ln 0 = 0`.
pub fn entropy(gamma: &Tensor) -> f64 {
    -gamma
        .data()
        .iter()
        .filter(|g| **g > 0.0)
        .map(|g| g * g.ln())
        .sum::<f64>()
}

/// `<Γ, D> - ε H(Γ)`.
pub fn entropic_objective(gamma: &Tensor, d: &Tensor, epsilon: f64) -> f64 {
    transport_cost(gamma, d) - epsilon * entropy(gamma)
}

/// The dual value at the potentials that generate `gamma`:
/// `Σ_ij (ε ln Γ_ij + D_ij)/(NJ) - ε Σ Γ + ε`. Each half-sweep of the
/// solver is an exact coordinate ascent step on this quantity, so it never
/// decreases. Needs a strictly positive plan.
pub fn dual_objective(gamma: &Tensor, d: &Tensor, epsilon: f64) -> f64 {
    let nj = gamma.len() as f64;
    let pot: f64 = gamma
        .data()
        .iter()
        .zip(d.data())
        .map(|(g, c)| epsilon * g.ln() + c)
        .sum::<f64>()
        / nj;
    pot - epsilon * gamma.data().iter().sum::<f64>() + epsilon
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn cost_matrix_examples() {
        let p = m(&[&[0.0, 0.0, 0.0], &[1.0, 2.0, 2.0]]);
        let c = m(&[&[1.0, 0.0, 0.0], &[0.0, 0.0, 0.0]]);
        let d = cost_matrix(&p, &c).unwrap();
        assert_eq!(d.data(), &[1.0, 0.0, 8.0, 9.0]);
        assert!(cost_matrix(&p, &m(&[&[0.0, 0.0]])).is_err());
    }

    #[test]
    fn zero_cost_gives_uniform_plan() {
        let plan = sinkhorn(&Tensor::zeros(vec![2, 2]), 1e-3, 20).unwrap();
        assert_eq!(plan.gamma_joint.data(), &[0.25; 4]);
    }

    #[test]
    fn separated_costs_give_the_matching() {
        let d = m(&[&[0.0, 10.0], &[10.0, 0.0]]);
        let plan = sinkhorn(&d, 1e-3, 20).unwrap();
        assert!(plan.log_domain);
        for (got, want) in plan.gamma_joint.data().iter().zip([0.5, 0.0, 0.0, 0.5]) {
            assert!((got - want).abs() < 1e-6);
        }
    }

    #[test]
    fn bad_arguments_are_rejected() {
        let d = Tensor::zeros(vec![2, 2]);
        assert!(matches!(sinkhorn(&d, 0.0, 20), Err(Error::Config(_))));
        assert!(matches!(sinkhorn(&d, -1.0, 20), Err(Error::Config(_))));
        assert!(matches!(sinkhorn(&d, 1e-3, 0), Err(Error::Config(_))));
        let bad = m(&[&[f64::NAN, 0.0]]);
        assert!(matches!(sinkhorn(&bad, 1e-3, 5), Err(Error::Numeric(_))));
    }

    #[test]
    fn column_marginals_are_exact_at_exit() {
        let d = m(&[
            &[0.3, 1.2, 0.5],
            &[0.9, 0.1, 0.4],
            &[0.2, 0.8, 0.7],
            &[1.1, 0.6, 0.05],
        ]);
        for domain in [Domain::Plain, Domain::Log] {
            let opts = SinkhornOptions {
                epsilon: 0.1,
                iters: 3,
                domain,
                ..SinkhornOptions::default()
            };
            let plan = sinkhorn_with(&d, &opts).unwrap();
            assert!(plan.col_deviation() < 1e-16, "{domain:?}");
        }
    }

    #[test]
    fn pseudo_label_examples() {
        let uniform = sinkhorn(&Tensor::zeros(vec![3, 4]), 1.0, 1).unwrap();
        let gamma = pseudo_labels(&uniform);
        assert!(gamma.data().iter().all(|v| (v - 0.25).abs() < 1e-15));

        let plan = TransportPlan {
            gamma_joint: m(&[&[0.5, 0.0], &[0.0, 0.5]]),
            epsilon: 1e-3,
            iterations: 1,
            log_domain: false,
        };
        assert_eq!(pseudo_labels(&plan).data(), &[1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn call_counter_counts_this_thread() {
        let before = sinkhorn_calls();
        sinkhorn(&Tensor::zeros(vec![2, 2]), 1.0, 1).unwrap();
        sinkhorn(&Tensor::zeros(vec![2, 2]), 1.0, 1).unwrap();
        assert_eq!(sinkhorn_calls(), before + 2);
    }

    #[test]
    fn entropy_of_uniform_plan() {
        let g = Tensor::matrix(2, 2, vec![0.25; 4]).unwrap();
        assert!((entropy(&g) - 4f64.ln()).abs() < 1e-15);
        let h = Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap();
        assert_eq!(entropy(&h), 0.0);
    }
}
