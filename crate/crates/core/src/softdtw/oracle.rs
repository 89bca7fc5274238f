//! Reference implementations used to validate the banded DP.
//!
//! These deliberately share no code with the production kernel apart from
//! the branch-to-frame rule of [`CostIndexing`].

use super::CostIndexing;
use crate::autodiff::Tensor;

fn l1(x: &Tensor<f64>, a: usize, y: &Tensor<f64>, b: usize) -> f64 {
    x.row(a)
        .iter()
        .zip(y.row(b))
        .map(|(p, q)| (p - q).abs())
        .sum()
}

/// Cost of the step that enters `(i, j)` through `branch` (0 vertical, 1 horizontal, 2 diagonal).
fn step_cost(
    x: &Tensor<f64>,
    y: &Tensor<f64>,
    warp: f64,
    indexing: CostIndexing,
    i: usize,
    j: usize,
    branch: usize,
) -> f64 {
    let (tx, ty) = (x.shape()[0], y.shape()[0]);
    let (a, b) = indexing.branch_frames(i, j, tx, ty)[branch];
    l1(x, a, y, b) + if branch == 2 { 0.0 } else { warp }
}

/// Total cost of every monotone path from `(0,0)` to `(T_x,T_y)`.
///
/// Paths may not touch the `+∞` borders, so the first step is always the
/// diagonal into `(1,1)`.
pub fn enumerate_path_costs(
    x: &Tensor<f64>,
    y: &Tensor<f64>,
    warp: f64,
    indexing: CostIndexing,
) -> Vec<f64> {
    let (tx, ty) = (x.shape()[0], y.shape()[0]);
    let mut out = Vec::new();
    let first = step_cost(x, y, warp, indexing, 1, 1, 2);
    walk(x, y, warp, indexing, (1, 1), first, (tx, ty), &mut out);
    out
}

#[allow(clippy::too_many_arguments)]
fn walk(
    x: &Tensor<f64>,
    y: &Tensor<f64>,
    warp: f64,
    indexing: CostIndexing,
    at: (usize, usize),
    cost: f64,
    end: (usize, usize),
    out: &mut Vec<f64>,
) {
    if at == end {
        out.push(cost);
        return;
    }
    let (i, j) = at;
    if i < end.0 {
        let c = step_cost(x, y, warp, indexing, i + 1, j, 0);
        walk(x, y, warp, indexing, (i + 1, j), cost + c, end, out);
    }
    if j < end.1 {
        let c = step_cost(x, y, warp, indexing, i, j + 1, 1);
        walk(x, y, warp, indexing, (i, j + 1), cost + c, end, out);
    }
    if i < end.0 && j < end.1 {
        let c = step_cost(x, y, warp, indexing, i + 1, j + 1, 2);
        walk(x, y, warp, indexing, (i + 1, j + 1), cost + c, end, out);
    }
}

/// `−γ·log Σ_paths exp(−cost/γ)` over all enumerated paths.
pub fn path_enumeration_soft_dtw(
    x: &Tensor<f64>,
    y: &Tensor<f64>,
    gamma: f64,
    warp: f64,
    indexing: CostIndexing,
) -> f64 {
    let costs = enumerate_path_costs(x, y, warp, indexing);
    let m = costs.iter().copied().fold(f64::INFINITY, f64::min);
    let s: f64 = costs.iter().map(|c| (-(c - m) / gamma).exp()).sum();
    m - gamma * s.ln()
}

/// Classic min-DP over the full table with the same branch costs.
pub fn hard_dtw_oracle(x: &Tensor<f64>, y: &Tensor<f64>, warp: f64, indexing: CostIndexing) -> f64 {
    let (tx, ty) = (x.shape()[0], y.shape()[0]);
    let mut r = vec![vec![f64::INFINITY; ty + 1]; tx + 1];
    r[0][0] = 0.0;
    for i in 1..=tx {
        for j in 1..=ty {
            let v = r[i - 1][j] + step_cost(x, y, warp, indexing, i, j, 0);
            let h = r[i][j - 1] + step_cost(x, y, warp, indexing, i, j, 1);
            let d = r[i - 1][j - 1] + step_cost(x, y, warp, indexing, i, j, 2);
            r[i][j] = v.min(h).min(d);
        }
    }
    r[tx][ty]
}

/// Soft-DTW over the full `(T_x+1)×(T_y+1)` table, no band.
pub fn dense_soft_dtw(
    x: &Tensor<f64>,
    y: &Tensor<f64>,
    gamma: f64,
    warp: f64,
    indexing: CostIndexing,
) -> f64 {
    let (tx, ty) = (x.shape()[0], y.shape()[0]);
    let mut r = vec![vec![f64::INFINITY; ty + 1]; tx + 1];
    r[0][0] = 0.0;
    for i in 1..=tx {
        for j in 1..=ty {
            let cands = [
                r[i - 1][j] + step_cost(x, y, warp, indexing, i, j, 0),
                r[i][j - 1] + step_cost(x, y, warp, indexing, i, j, 1),
                r[i - 1][j - 1] + step_cost(x, y, warp, indexing, i, j, 2),
            ];
            let m = cands.iter().copied().fold(f64::INFINITY, f64::min);
            r[i][j] = if m.is_infinite() {
                m
            } else {
                m - gamma
                    * cands
                        .iter()
                        .map(|c| (-(c - m) / gamma).exp())
                        .sum::<f64>()
                        .ln()
            };
        }
    }
    r[tx][ty]
}

/// Central differences of the full-table loss with respect to every element of `y`.
pub fn finite_difference_grad(
    x: &Tensor<f64>,
    y: &Tensor<f64>,
    gamma: f64,
    warp: f64,
    indexing: CostIndexing,
    step: f64,
) -> Tensor<f64> {
    let mut work = y.clone();
    let mut out = Tensor::zeros(y.shape().to_vec());
    for idx in 0..y.len() {
        let orig = work.data()[idx];
        work.data_mut()[idx] = orig + step;
        let plus = dense_soft_dtw(x, &work, gamma, warp, indexing);
        work.data_mut()[idx] = orig - step;
        let minus = dense_soft_dtw(x, &work, gamma, warp, indexing);
        work.data_mut()[idx] = orig;
        out.data_mut()[idx] = (plus - minus) / (2.0 * step);
    }
    out
}

/// Worst relative error between [`soft_dtw_grad`](super::soft_dtw_grad) and
/// central differences of the dense loss, plus the number of entries skipped
/// because some `|y[j][f] − x[i][f]|` lies within two steps of the L1 kink.
pub fn gradient_check(
    x: &Tensor<f64>,
    y: &Tensor<f64>,
    cfg: &super::SoftDtwConfig,
    step: f64,
    floor: f64,
) -> crate::Result<(f64, usize)> {
    let analytic = super::soft_dtw_grad(x, y, cfg)?;
    let numeric = finite_difference_grad(x, y, cfg.gamma, cfg.warp, cfg.cost_indexing, step);
    let (tx, f) = (x.shape()[0], y.shape()[1]);
    let (mut worst, mut skipped) = (0.0f64, 0);
    for (idx, (&a, &n)) in analytic.data().iter().zip(numeric.data()).enumerate() {
        let (j, c) = (idx / f, idx % f);
        if (0..tx).any(|i| (y.at2(j, c) - x.at2(i, c)).abs() <= 2.0 * step) {
            skipped += 1;
            continue;
        }
        worst = worst.max((a - n).abs() / a.abs().max(n.abs()).max(floor));
    }
    Ok((worst, skipped))
}
