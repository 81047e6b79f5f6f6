//! Loss terms. Point-level clustering contributes a cross-entropy against
//! balanced pseudo-labels plus an orthogonality penalty on the prototypes;
//! instance-level contrasting contributes a symmetric cosine distance
//! between predictor and stop-gradient projector outputs.

use serde::{Deserialize, Serialize};

use crate::diff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Weight of the orthogonality penalty.
pub const ETA: f64 = 2e-3;
/// Probabilities are floored at this value inside the logarithm.
pub const LOG_FLOOR: f64 = 1e-12;
/// A prototype whose soft column mass is at or below this is dead.
pub const MASS_FLOOR: f64 = 1e-8;

/// Row-wise softmax of the `N x J` logits.
pub fn class_probabilities(tape: &mut Tape, logits: Var) -> Result<Var> {
    tape.row_softmax(logits)
}

/// Soft cluster centers `c_j = Σ_i s_ij p_i / Σ_i s_ij` as a `J x 3` matrix.
pub fn prototypes(tape: &mut Tape, points: Var, probs: Var) -> Result<Var> {
    tape.weighted_means(probs, points, MASS_FLOOR)
}

/// `-(1/N) <γ, ln S>` with γ a constant target.
pub fn cross_entropy(tape: &mut Tape, gamma: &Tensor, probs: Var) -> Result<Var> {
    if gamma.shape() != tape.value(probs).shape() {
        return Err(Error::Dimension {
            op: "cross_entropy",
            left: gamma.shape().to_vec(),
            right: tape.value(probs).shape().to_vec(),
        });
    }
    tape.cross_entropy(probs, gamma.data().to_vec(), LOG_FLOOR)
}

/// Elementwise L1 norm of `Ĉ Ĉᵀ - I`, where `Ĉ` holds the unit-normalized
/// prototypes as rows.
pub fn orth_reg(tape: &mut Tape, protos: Var) -> Result<Var> {
    let unit = tape.normalize_rows(protos)?;
    let unit_t = tape.transpose(unit)?;
    let gram = tape.matmul(unit, unit_t)?;
    let j = tape.value(gram).rows();
    let mut eye = Tensor::zeros(vec![j, j]);
    (0..j).for_each(|k| eye.data_mut()[k * j + k] = 1.0);
    let eye = tape.constant(eye);
    let off = tape.sub(gram, eye)?;
    let abs = tape.abs(off);
    Ok(tape.sum(abs))
}

/// `‖q/‖q‖ - z/‖z‖‖²`, which equals `2 - 2 cos(q, z)`, clamped to
/// `[0, 4]` against roundoff in the normalization. Matrices are compared
/// row by row and the distances summed, so the bound becomes `4 * rows`.
pub fn cosine_distance(tape: &mut Tape, q: Var, z: Var) -> Result<Var> {
    let qn = tape.l2_normalize(q)?;
    let zn = tape.l2_normalize(z)?;
    let diff = tape.sub(qn, zn)?;
    let rows = tape.value(diff).rows();
    let d = tape.dot(diff, diff)?;
    Ok(tape.clamp(d, 0.0, 4.0 * rows as f64))
}

/// `D(q_a, sg(z_b)) + D(q_b, sg(z_a))`.
pub fn global_loss(tape: &mut Tape, qa: Var, zb: Var, qb: Var, za: Var) -> Result<Var> {
    let zb = tape.stop_gradient(zb);
    let za = tape.stop_gradient(za);
    let ab = cosine_distance(tape, qa, zb)?;
    let ba = cosine_distance(tape, qb, za)?;
    tape.add(ab, ba)
}

/// Cross-entropy and orthogonality terms of one view.
#[derive(Clone, Copy, Debug)]
pub struct ViewTerms {
    pub ce: Var,
    pub orth: Var,
}

/// Clustering terms of one view from its probabilities, its prototypes and
/// its (constant) pseudo-labels.
pub fn view_terms(tape: &mut Tape, probs: Var, protos: Var, gamma: &Tensor) -> Result<ViewTerms> {
    let ce = cross_entropy(tape, gamma, probs)?;
    let orth = orth_reg(tape, protos)?;
    Ok(ViewTerms { ce, orth })
}

/// `ce_a + ce_b + η (orth_a + orth_b)`.
pub fn local_loss(tape: &mut Tape, a: ViewTerms, b: ViewTerms, eta: f64) -> Result<Var> {
    if !(eta >= 0.0) {
        return Err(Error::Config(format!(
            "eta must be non-negative, got {eta}"
        )));
    }
    let ce = tape.add(a.ce, b.ce)?;
    let orth = tape.add(a.orth, b.orth)?;
    let orth = tape.scale(orth, eta);
    tape.add(ce, orth)
}

/// Per-step loss values, as logged.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce_a: f64,
    pub ce_b: f64,
    pub orth_a: f64,
    pub orth_b: f64,
    pub local: f64,
    pub global: f64,
    pub total: f64,
    pub eta: f64,
}

impl LossBreakdown {
    /// Fills `local` and `total` from the component terms.
    pub fn assemble(ce_a: f64, ce_b: f64, orth_a: f64, orth_b: f64, global: f64, eta: f64) -> Self {
        let local = ce_a + ce_b + eta * (orth_a + orth_b);
        Self {
            ce_a,
            ce_b,
            orth_a,
            orth_b,
            local,
            global,
            total: global + local,
            eta,
        }
    }

    /// Componentwise mean over a batch.
    pub fn mean(items: &[LossBreakdown]) -> Self {
        let k = items.len().max(1) as f64;
        let sum = |f: fn(&LossBreakdown) -> f64| items.iter().map(f).sum::<f64>() / k;
        Self {
            ce_a: sum(|b| b.ce_a),
            ce_b: sum(|b| b.ce_b),
            orth_a: sum(|b| b.orth_a),
            orth_b: sum(|b| b.orth_b),
            local: sum(|b| b.local),
            global: sum(|b| b.global),
            total: sum(|b| b.total),
            eta: items.first().map_or(0.0, |b| b.eta),
        }
    }
}

/// `total = global + local`.
pub fn total_loss(tape: &mut Tape, global: Var, local: Var) -> Result<Var> {
    tape.add(global, local)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::finite_diff_check;

    fn m(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    fn eval(f: impl FnOnce(&mut Tape) -> Result<Var>) -> Result<f64> {
        let mut tape = Tape::new();
        let out = f(&mut tape)?;
        Ok(tape.value(out).item())
    }

    #[test]
    fn probabilities_examples() {
        let mut tape = Tape::new();
        let g = tape.constant(m(&[&[0.0, 0.0, 0.0]]));
        let s = class_probabilities(&mut tape, g).unwrap();
        assert!(tape
            .value(s)
            .data()
            .iter()
            .all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
        let g = tape.constant(m(&[&[2f64.ln(), 0.0]]));
        let s = class_probabilities(&mut tape, g).unwrap();
        assert!((tape.value(s).at(0, 0) - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn prototype_examples() {
        let mut tape = Tape::new();
        let p = tape.constant(m(&[&[0.0, 0.0, 0.0], &[2.0, 0.0, 0.0]]));
        let hard = tape.constant(m(&[&[1.0, 0.0], &[0.0, 1.0]]));
        let c = prototypes(&mut tape, p, hard).unwrap();
        assert_eq!(tape.value(c).data(), &[0.0, 0.0, 0.0, 2.0, 0.0, 0.0]);
        let uniform = tape.constant(m(&[&[0.5, 0.5], &[0.5, 0.5]]));
        let c = prototypes(&mut tape, p, uniform).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn empty_prototype_column_is_reported() {
        let mut tape = Tape::new();
        let p = tape.constant(m(&[&[0.0, 0.0, 0.0], &[2.0, 0.0, 0.0]]));
        let s = tape.constant(m(&[&[1.0, 0.0], &[1.0, 0.0]]));
        assert!(matches!(
            prototypes(&mut tape, p, s),
            Err(Error::DeadPrototype { column: 1, .. })
        ));
    }

    #[test]
    fn prototype_gradient_matches_differences() {
        let p = m(&[
            &[0.1, -0.4, 0.7],
            &[0.9, 0.2, -0.3],
            &[-0.5, 0.6, 0.2],
            &[0.3, 0.3, -0.8],
        ]);
        let g = m(&[
            &[0.2, -0.1, 0.4],
            &[1.1, 0.3, -0.6],
            &[-0.2, 0.5, 0.0],
            &[0.7, -0.9, 0.1],
        ]);
        let w = m(&[&[0.3, -1.2, 0.5], &[0.8, 0.4, -0.7], &[-0.6, 0.9, 1.3]]);
        let report = finite_diff_check(
            |t, v| {
                let s = class_probabilities(t, v[1])?;
                let c = prototypes(t, v[0], s)?;
                let wc = t.mul(c, v[2])?;
                Ok(t.sum(wc))
            },
            &[p, g, w],
            1e-6,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-6, "{report:?}");
    }

    #[test]
    fn cross_entropy_examples() {
        let s = m(&[&[0.5, 0.5]]);
        let v = eval(|t| {
            let s = t.constant(s);
            cross_entropy(t, &m(&[&[1.0, 0.0]]), s)
        })
        .unwrap();
        assert!((v - 2f64.ln()).abs() < 1e-15);

        let hard = m(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let v = eval(|t| {
            let s = t.constant(hard.clone());
            cross_entropy(t, &hard, s)
        })
        .unwrap();
        assert_eq!(v, 0.0);

        let j = 5;
        let uni = Tensor::matrix(3, j, vec![1.0 / j as f64; 3 * j]).unwrap();
        let v = eval(|t| {
            let s = t.constant(uni.clone());
            cross_entropy(t, &uni, s)
        })
        .unwrap();
        assert!((v - (j as f64).ln()).abs() < 1e-14);

        let mut tape = Tape::new();
        let s = tape.constant(m(&[&[0.5, 0.5]]));
        assert!(matches!(
            cross_entropy(&mut tape, &m(&[&[1.0, 0.0, 0.0]]), s),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn orth_examples() {
        let v = eval(|t| {
            let c = t.constant(m(&[&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0], &[0.0, 0.0, 1.0]]));
            orth_reg(t, c)
        })
        .unwrap();
        assert!(v.abs() < 1e-12);
        let v = eval(|t| {
            let c = t.constant(m(&[&[0.6, 0.8, 0.0], &[0.6, 0.8, 0.0]]));
            orth_reg(t, c)
        })
        .unwrap();
        assert!((v - 2.0).abs() < 1e-12);
    }

    #[test]
    fn orth_four_prototypes_spot_value() {
        // direct oracle: Gram entries of the normalized rows, by hand
        let rows: [[f64; 3]; 4] = [
            [1.0, 0.0, 0.0],
            [0.0, 2.0, 0.0],
            [0.0, 0.0, 3.0],
            [1.0, 1.0, 0.0],
        ];
        let unit: Vec<[f64; 3]> = rows
            .iter()
            .map(|r| {
                let n = (r[0] * r[0] + r[1] * r[1] + r[2] * r[2]).sqrt();
                r.map(|x| x / n)
            })
            .collect();
        let mut expect = 0.0;
        for a in 0..4 {
            for b in 0..4 {
                let dot: f64 = (0..3).map(|k| unit[a][k] * unit[b][k]).sum();
                expect += (dot - f64::from(u8::from(a == b))).abs();
            }
        }
        // rows 0 and 1 each meet row 3 at cos 1/√2, counted twice each
        assert!((expect - 4.0 / 2f64.sqrt()).abs() < 1e-12);
        let got = eval(|t| {
            let c = t.constant(
                Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap(),
            );
            orth_reg(t, c)
        })
        .unwrap();
        assert!((got - expect).abs() < 1e-12);
    }

    #[test]
    fn orth_zero_prototype_fails() {
        let mut tape = Tape::new();
        let c = tape.constant(m(&[&[0.0, 0.0, 0.0], &[1.0, 0.0, 0.0]]));
        assert!(matches!(
            orth_reg(&mut tape, c),
            Err(Error::DegenerateNorm(_))
        ));
    }

    #[test]
    fn cosine_examples() {
        let d = |q: Vec<f64>, z: Vec<f64>| {
            eval(|t| {
                let q = t.constant(Tensor::vector(q));
                let z = t.constant(Tensor::vector(z));
                cosine_distance(t, q, z)
            })
        };
        assert_eq!(d(vec![1.0, 2.0], vec![1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(d(vec![0.0, 3.0], vec![0.0, -1.0]).unwrap(), 4.0);
        assert_eq!(d(vec![2.0, 0.0], vec![0.0, 5.0]).unwrap(), 2.0);
        assert!(matches!(
            d(vec![0.0, 0.0], vec![1.0, 0.0]),
            Err(Error::DegenerateNorm(_))
        ));
    }

    #[test]
    fn cosine_on_rows_sums_and_keeps_its_gradient() {
        let mut tape = Tape::new();
        let q = tape.param(m(&[&[0.0, 3.0], &[1.0, 0.1], &[-2.0, 0.5]]));
        let z = tape.constant(m(&[&[0.0, -1.0], &[-1.0, 0.0], &[1.0, 0.0]]));
        let d = cosine_distance(&mut tape, q, z).unwrap();
        assert!(tape.value(d).item() > 4.0);
        let g = tape.backward(d).unwrap();
        assert!(g.get_or_zeros(q, 6).iter().any(|&v| v != 0.0));
    }

    #[test]
    fn global_examples() {
        let g = |qa: [f64; 4], zb: [f64; 4], qb: [f64; 4], za: [f64; 4]| {
            eval(|t| {
                let v = [qa, zb, qb, za].map(|x| t.constant(Tensor::vector(x.to_vec())));
                global_loss(t, v[0], v[1], v[2], v[3])
            })
            .unwrap()
        };
        let u = [1.0, 2.0, 3.0, 4.0];
        let w = [-2.0, 0.5, 1.0, 0.0];
        assert_eq!(g(u, u, w, w), 0.0);
        let e = |k: usize| std::array::from_fn(|i| f64::from(u8::from(i == k)));
        assert_eq!(g(e(0), e(1), e(2), e(3)), 4.0);
    }

    #[test]
    fn local_examples() {
        let mut tape = Tape::new();
        let [ca, oa, cb, ob] = [0.7, 1.5, 0.4, 2.5].map(|x| tape.constant(Tensor::scalar(x)));
        let a = ViewTerms { ce: ca, orth: oa };
        let b = ViewTerms { ce: cb, orth: ob };
        let l0 = local_loss(&mut tape, a, b, 0.0).unwrap();
        assert!((tape.value(l0).item() - 1.1).abs() < 1e-15);
        let l = local_loss(&mut tape, a, a, ETA).unwrap();
        assert!((tape.value(l).item() - 2.0 * (0.7 + ETA * 1.5)).abs() < 1e-15);
        assert!(local_loss(&mut tape, a, b, -1.0).is_err());
    }

    #[test]
    fn breakdown_is_consistent() {
        let b = LossBreakdown::assemble(0.5, 0.25, 2.0, 3.0, 1.5, ETA);
        assert_eq!(b.local, 0.5 + 0.25 + ETA * 5.0);
        assert_eq!(b.total, b.global + b.local);
        let zero_global = LossBreakdown::assemble(0.5, 0.25, 2.0, 3.0, 0.0, ETA);
        assert_eq!(zero_global.total, zero_global.local);
    }
}
