//! Exact unregularized transport for tiny problems.
//!
//! Every vertex of the transportation polytope is a basic solution whose
//! support lies on a spanning tree of the complete bipartite graph between
//! rows and columns. Enumerating all spanning trees, solving each for its
//! unique flow and keeping the cheapest non-negative one yields a global
//! minimizer of `<Γ, D>`.

use crate::diff::Tensor;
use crate::error::{Error, Result};

pub const MAX_ROWS: usize = 6;
pub const MAX_COLS: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct LpSolution {
    pub cost: f64,
    pub plan: Tensor,
    /// Spanning trees visited, feasible or not.
    pub trees: usize,
}

struct Search<'a> {
    d: &'a Tensor,
    n: usize,
    j: usize,
    edges: Vec<(usize, usize)>,
    chosen: Vec<usize>,
    best: Option<(f64, Vec<f64>)>,
    trees: usize,
}

fn find(parent: &[usize], mut x: usize) -> usize {
    while parent[x] != x {
        x = parent[x];
    }
    x
}

impl Search<'_> {
    fn run(&mut self, start: usize, parent: &mut Vec<usize>) {
        let need = self.n + self.j - 1;
        if self.chosen.len() == need {
            self.trees += 1;
            self.evaluate();
            return;
        }
        let remaining = self.edges.len() - start;
        if remaining < need - self.chosen.len() {
            return;
        }
        for e in start..self.edges.len() {
            if self.edges.len() - e < need - self.chosen.len() {
                break;
            }
            let (r, c) = self.edges[e];
            let (a, b) = (find(parent, r), find(parent, self.n + c));
            if a == b {
                continue;
            }
            let saved = parent.clone();
            parent[a] = b;
            self.chosen.push(e);
            self.run(e + 1, parent);
            self.chosen.pop();
            *parent = saved;
        }
    }

    /// Solves the tree's flows by repeatedly peeling a leaf: its single
    /// edge must carry the leaf's entire remaining supply.
    fn evaluate(&mut self) {
        let (n, j) = (self.n, self.j);
        let mut supply: Vec<f64> = (0..n)
            .map(|_| 1.0 / n as f64)
            .chain((0..j).map(|_| 1.0 / j as f64))
            .collect();
        let mut alive: Vec<bool> = vec![true; self.chosen.len()];
        let mut degree = vec![0usize; n + j];
        for &e in &self.chosen {
            let (r, c) = self.edges[e];
            degree[r] += 1;
            degree[n + c] += 1;
        }
        let mut flow = vec![0.0; n * j];
        for _ in 0..self.chosen.len() {
            let Some((slot, leaf)) = self
                .chosen
                .iter()
                .enumerate()
                .filter(|(s, _)| alive[*s])
                .find_map(|(s, &e)| {
                    let (r, c) = self.edges[e];
                    if degree[r] == 1 {
                        Some((s, r))
                    } else if degree[n + c] == 1 {
                        Some((s, n + c))
                    } else {
                        None
                    }
                })
            else {
                return;
            };
            let (r, c) = self.edges[self.chosen[slot]];
            let other = if leaf == r { n + c } else { r };
            let x = supply[leaf];
            if x < -1e-12 {
                return;
            }
            flow[r * j + c] = x.max(0.0);
            supply[leaf] = 0.0;
            supply[other] -= x;
            degree[r] -= 1;
            degree[n + c] -= 1;
            alive[slot] = false;
        }
        if supply.iter().any(|s| s.abs() > 1e-12) {
            return;
        }
        let cost: f64 = flow.iter().zip(self.d.data()).map(|(f, c)| f * c).sum();
        if self.best.as_ref().is_none_or(|(b, _)| cost < *b) {
            self.best = Some((cost, flow));
        }
    }
}

/// Minimizes `<Γ, D>` over plans with row sums `1/N` and column sums `1/J`
/// by exhaustive enumeration. Limited to `N <= 6`, `J <= 4`.
pub fn transport_lp_oracle(d: &Tensor) -> Result<LpSolution> {
    if d.shape().len() != 2 || d.is_empty() {
        return Err(Error::EmptyInput("transport oracle cost matrix"));
    }
    let (n, j) = (d.rows(), d.cols());
    if n > MAX_ROWS || j > MAX_COLS {
        return Err(Error::Scale { n, j });
    }
    let edges = (0..n).flat_map(|r| (0..j).map(move |c| (r, c))).collect();
    let mut search = Search {
        d,
        n,
        j,
        edges,
        chosen: Vec::with_capacity(n + j - 1),
        best: None,
        trees: 0,
    };
    let mut parent: Vec<usize> = (0..n + j).collect();
    search.run(0, &mut parent);
    let (cost, flow) = search
        .best
        .ok_or_else(|| Error::Numeric("no feasible vertex found".into()))?;
    Ok(LpSolution {
        cost,
        plan: Tensor::matrix(n, j, flow)?,
        trees: search.trees,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tree_count_matches_the_bipartite_formula() {
        // K_{n,j} has n^(j-1) * j^(n-1) spanning trees
        for (n, j) in [(1, 1), (2, 2), (3, 2), (4, 3), (5, 4)] {
            let sol = transport_lp_oracle(&Tensor::zeros(vec![n, j])).unwrap();
            let expect = n.pow(j as u32 - 1) * j.pow(n as u32 - 1);
            assert_eq!(sol.trees, expect, "{n}x{j}");
        }
    }

    #[test]
    fn matching_has_zero_cost() {
        let d = Tensor::from_rows(&[vec![0.0, 10.0], vec![10.0, 0.0]]).unwrap();
        let sol = transport_lp_oracle(&d).unwrap();
        assert_eq!(sol.cost, 0.0);
        assert_eq!(sol.plan.data(), &[0.5, 0.0, 0.0, 0.5]);
    }

    #[test]
    fn constant_cost_is_one() {
        let d = Tensor::matrix(3, 2, vec![1.0; 6]).unwrap();
        let sol = transport_lp_oracle(&d).unwrap();
        assert!((sol.cost - 1.0).abs() < 1e-15);
    }

    #[test]
    fn oracle_plan_is_feasible() {
        let d = Tensor::matrix(3, 2, vec![0.4, 0.1, 0.3, 0.9, 0.5, 0.2]).unwrap();
        let sol = transport_lp_oracle(&d).unwrap();
        for i in 0..3 {
            assert!((sol.plan.row(i).iter().sum::<f64>() - 1.0 / 3.0).abs() < 1e-12);
        }
        for c in 0..2 {
            let s: f64 = (0..3).map(|i| sol.plan.at(i, c)).sum();
            assert!((s - 0.5).abs() < 1e-12);
        }
        // hand solution: row 1 takes column 0, row 2 takes column 1, row 0
        // splits 1/6 each way
        let by_hand = (0.4 + 0.1) / 6.0 + 0.3 / 3.0 + 0.2 / 3.0;
        assert!((sol.cost - by_hand).abs() < 1e-12);
    }

    #[test]
    fn oversized_problem_is_rejected() {
        assert!(matches!(
            transport_lp_oracle(&Tensor::zeros(vec![7, 2])),
            Err(Error::Scale { n: 7, j: 2 })
        ));
        assert!(matches!(
            transport_lp_oracle(&Tensor::zeros(vec![2, 5])),
            Err(Error::Scale { .. })
        ));
    }
}
