//! Independent oracles used by the test suites and the `selftest` command.
//!
//! Nothing here shares code with the implementation paths it checks: the
//! finite-difference probe only calls forward evaluations, the assignment
//! oracle enumerates injections, and the DCT oracle is the direct
//! cosine-sum definition.

use crate::rng::SplitMix64;

/// Central finite-difference gradient of `f` at `x`.
pub fn finite_diff_grad(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], eps: f64) -> Vec<f64> {
    let mut xs = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let x0 = xs[i];
        xs[i] = x0 + eps;
        let fp = f(&xs);
        xs[i] = x0 - eps;
        let fm = f(&xs);
        xs[i] = x0;
        out.push((fp - fm) / (2.0 * eps));
    }
    out
}

/// Max over elements of `|a - b| / max(|a|, |b|, floor)`.
pub fn max_rel_err(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Exhaustive minimum-cost injective assignment of the smaller side of a
/// `rows x cols` cost matrix into the larger. Returns `(pairs, total)` with
/// pairs as `(row, col)` sorted by row; ties resolved toward the
/// lexicographically smallest assignment vector.
pub fn brute_force_assignment(cost: &[f64], rows: usize, cols: usize) -> (Vec<(usize, usize)>, f64) {
    assert_eq!(cost.len(), rows * cols);
    let transposed = rows > cols;
    let (n, m) = if transposed { (cols, rows) } else { (rows, cols) };
    let at = |i: usize, j: usize| -> f64 {
        if transposed {
            cost[j * cols + i]
        } else {
            cost[i * cols + j]
        }
    };

    let mut best = f64::INFINITY;
    let mut best_assign = vec![usize::MAX; n];
    let mut assign = vec![usize::MAX; n];
    let mut used = vec![false; m];

    fn rec(
        i: usize,
        n: usize,
        m: usize,
        acc: f64,
        at: &dyn Fn(usize, usize) -> f64,
        used: &mut [bool],
        assign: &mut [usize],
        best: &mut f64,
        best_assign: &mut [usize],
    ) {
        if i == n {
            if acc < *best {
                *best = acc;
                best_assign.copy_from_slice(assign);
            }
            return;
        }
        for j in 0..m {
            if !used[j] {
                used[j] = true;
                assign[i] = j;
                rec(i + 1, n, m, acc + at(i, j), at, used, assign, best, best_assign);
                used[j] = false;
            }
        }
    }
    rec(0, n, m, 0.0, &at, &mut used, &mut assign, &mut best, &mut best_assign);

    let mut pairs: Vec<(usize, usize)> = best_assign
        .iter()
        .enumerate()
        .map(|(i, &j)| if transposed { (j, i) } else { (i, j) })
        .collect();
    pairs.sort_unstable();
    (pairs, best)
}

/// Orthonormal 2-D DCT-II of an `m x m` map by direct cosine summation.
pub fn reference_dct2(mask: &[f64], m: usize) -> Vec<f64> {
    assert_eq!(mask.len(), m * m);
    let mut out = vec![0.0; m * m];
    let alpha = |k: usize| -> f64 {
        if k == 0 {
            (1.0 / m as f64).sqrt()
        } else {
            (2.0 / m as f64).sqrt()
        }
    };
    for u in 0..m {
        for v in 0..m {
            let mut s = 0.0;
            for x in 0..m {
                for y in 0..m {
                    s += mask[x * m + y]
                        * ((std::f64::consts::PI * (2 * x + 1) as f64 * u as f64) / (2.0 * m as f64)).cos()
                        * ((std::f64::consts::PI * (2 * y + 1) as f64 * v as f64) / (2.0 * m as f64)).cos();
                }
            }
            out[u * m + v] = alpha(u) * alpha(v) * s;
        }
    }
    out
}

/// Random matrix helper for oracle harnesses.
pub fn random_vec(rng: &mut SplitMix64, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.range_f64(lo, hi)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn finite_diff_matches_quadratic() {
        // f(x) = x0^2 + 3 x1 -> grad (2 x0, 3)
        let mut f = |x: &[f64]| x[0] * x[0] + 3.0 * x[1];
        let g = finite_diff_grad(&mut f, &[2.0, 5.0], 1e-5);
        assert!((g[0] - 4.0).abs() < 1e-8);
        assert!((g[1] - 3.0).abs() < 1e-8);
    }

    #[test]
    fn brute_force_small_case() {
        // [[1,2],[2,4]] -> (0,1) + (1,0) = 4 beats (0,0) + (1,1) = 5
        let (pairs, total) = brute_force_assignment(&[1.0, 2.0, 2.0, 4.0], 2, 2);
        assert_eq!(pairs, vec![(0, 1), (1, 0)]);
        assert_eq!(total, 4.0);
    }

    #[test]
    fn brute_force_rectangular_sides() {
        let cost = [5.0, 1.0, 9.0, 2.0, 8.0, 3.0];
        let (pairs_wide, t_wide) = brute_force_assignment(&cost, 2, 3);
        assert_eq!(pairs_wide.len(), 2);
        let (pairs_tall, t_tall) = brute_force_assignment(&cost, 3, 2);
        assert_eq!(pairs_tall.len(), 2);
        assert!(t_wide <= 5.0 + 1.0 && t_tall <= t_wide + 20.0);
    }

    #[test]
    fn dct_of_constant_is_pure_dc() {
        let m = 4;
        let f = reference_dct2(&vec![1.0; m * m], m);
        assert!((f[0] - 4.0).abs() < 1e-12);
        for (i, &v) in f.iter().enumerate().skip(1) {
            assert!(v.abs() < 1e-12, "coef {i} = {v}");
        }
    }
}
