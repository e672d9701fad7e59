//! Dynamic programs over a linear-chain lattice.
//!
//! `emissions` is an `n × k` row-major matrix of per-position tag scores and
//! `trans` a `(k + 2) × (k + 2)` matrix indexed `[from][to]`, where index `k`
//! is BOS and `k + 1` is EOS. All scores live in the log domain.
//!
//! A path is scored left to right as
//! `((t(BOS, y0) + e0(y0)) + t(y0, y1)) + e1(y1) ... + t(y_last, EOS)`;
//! Viterbi accumulates in the same order, so its best value equals the score
//! of the path it returns bit for bit.

use super::Matrix;

pub fn bos(k: usize) -> usize {
    k
}

pub fn eos(k: usize) -> usize {
    k + 1
}

pub fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY || max.is_nan() {
        return max;
    }
    max + xs.map(|x| (x - max).exp()).sum::<f64>().ln()
}

fn check(emissions: &[f64], k: usize, trans: &Matrix) -> usize {
    assert!(k > 0 && emissions.len().is_multiple_of(k), "emission shape");
    assert_eq!((trans.rows, trans.cols), (k + 2, k + 2), "transition shape");
    emissions.len() / k
}

pub fn score_path(emissions: &[f64], k: usize, trans: &Matrix, path: &[usize]) -> f64 {
    let n = check(emissions, k, trans);
    assert_eq!(path.len(), n, "path length");
    let mut s = trans.get(bos(k), path[0]) + emissions[path[0]];
    for i in 1..n {
        s = (s + trans.get(path[i - 1], path[i])) + emissions[i * k + path[i]];
    }
    s + trans.get(path[n - 1], eos(k))
}

/// Forward log-scores `alpha[i * k + y]`.
pub fn forward(emissions: &[f64], k: usize, trans: &Matrix) -> Vec<f64> {
    let n = check(emissions, k, trans);
    let mut alpha = vec![0.0; n * k];
    for y in 0..k {
        alpha[y] = trans.get(bos(k), y) + emissions[y];
    }
    for i in 1..n {
        for y in 0..k {
            let prev = &alpha[(i - 1) * k..i * k];
            let lse = log_sum_exp((0..k).map(|p| prev[p] + trans.get(p, y)));
            alpha[i * k + y] = lse + emissions[i * k + y];
        }
    }
    alpha
}

/// Backward log-scores `beta[i * k + y]`, including the EOS transition.
pub fn backward(emissions: &[f64], k: usize, trans: &Matrix) -> Vec<f64> {
    let n = check(emissions, k, trans);
    let mut beta = vec![0.0; n * k];
    for y in 0..k {
        beta[(n - 1) * k + y] = trans.get(y, eos(k));
    }
    for i in (0..n - 1).rev() {
        for y in 0..k {
            let next = (i + 1) * k;
            beta[i * k + y] = log_sum_exp(
                (0..k).map(|q| trans.get(y, q) + emissions[next + q] + beta[next + q]),
            );
        }
    }
    beta
}

pub fn log_partition(emissions: &[f64], k: usize, trans: &Matrix) -> f64 {
    let n = check(emissions, k, trans);
    let alpha = forward(emissions, k, trans);
    let last = &alpha[(n - 1) * k..];
    log_sum_exp((0..k).map(|y| last[y] + trans.get(y, eos(k))))
}

/// Posterior expectations under the CRF distribution.
#[derive(Debug, Clone)]
pub struct Marginals {
    pub log_z: f64,
    /// `n × k` position marginals.
    pub unary: Vec<f64>,
    /// Expected transition counts, same shape as the transition matrix.
    pub pairwise: Matrix,
}

pub fn marginals(emissions: &[f64], k: usize, trans: &Matrix) -> Marginals {
    let n = check(emissions, k, trans);
    let alpha = forward(emissions, k, trans);
    let beta = backward(emissions, k, trans);
    let last = &alpha[(n - 1) * k..];
    let log_z = log_sum_exp((0..k).map(|y| last[y] + trans.get(y, eos(k))));

    let unary: Vec<f64> = alpha
        .iter()
        .zip(&beta)
        .map(|(a, b)| (a + b - log_z).exp())
        .collect();

    let mut pairwise = Matrix::zeros(k + 2, k + 2);
    for y in 0..k {
        *pairwise.get_mut(bos(k), y) += unary[y];
        *pairwise.get_mut(y, eos(k)) += unary[(n - 1) * k + y];
    }
    for i in 0..n.saturating_sub(1) {
        for a in 0..k {
            let fa = alpha[i * k + a];
            for b in 0..k {
                let next = (i + 1) * k + b;
                let lp = fa + trans.get(a, b) + emissions[next] + beta[next] - log_z;
                *pairwise.get_mut(a, b) += lp.exp();
            }
        }
    }
    Marginals {
        log_z,
        unary,
        pairwise,
    }
}

/// Best path; ties go to the lower tag id at every backpointer and at the end.
pub fn viterbi(emissions: &[f64], k: usize, trans: &Matrix) -> (Vec<usize>, f64) {
    let n = check(emissions, k, trans);
    let mut delta = vec![0.0; n * k];
    let mut back = vec![0usize; n * k];
    for y in 0..k {
        delta[y] = trans.get(bos(k), y) + emissions[y];
    }
    for i in 1..n {
        for y in 0..k {
            let mut best = f64::NEG_INFINITY;
            let mut arg = 0;
            for p in 0..k {
                let s = delta[(i - 1) * k + p] + trans.get(p, y);
                if s > best {
                    best = s;
                    arg = p;
                }
            }
            delta[i * k + y] = best + emissions[i * k + y];
            back[i * k + y] = arg;
        }
    }
    let mut best = f64::NEG_INFINITY;
    let mut last = 0;
    for y in 0..k {
        let s = delta[(n - 1) * k + y] + trans.get(y, eos(k));
        if s > best {
            best = s;
            last = y;
        }
    }
    let mut path = vec![0; n];
    path[n - 1] = last;
    for i in (1..n).rev() {
        path[i - 1] = back[i * k + path[i]];
    }
    (path, best)
}

#[cfg(test)]
pub(crate) mod oracle {
    //! Exhaustive enumeration, independent of the dynamic programs above.
    use super::*;

    pub fn all_paths(n: usize, k: usize) -> Vec<Vec<usize>> {
        let total = k.pow(n as u32);
        (0..total)
            .map(|mut code| {
                let mut p = vec![0; n];
                for slot in p.iter_mut() {
                    *slot = code % k;
                    code /= k;
                }
                p
            })
            .collect()
    }

    pub fn brute_log_partition(em: &[f64], k: usize, trans: &Matrix) -> f64 {
        let n = em.len() / k;
        let scores: Vec<f64> = all_paths(n, k)
            .iter()
            .map(|p| score_path(em, k, trans, p))
            .collect();
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        max + scores.iter().map(|s| (s - max).exp()).sum::<f64>().ln()
    }

    /// Highest score; among equal scores the path that is smallest when read
    /// from the last position backwards.
    pub fn brute_argmax(em: &[f64], k: usize, trans: &Matrix) -> Vec<usize> {
        let n = em.len() / k;
        let mut best: Option<(f64, Vec<usize>)> = None;
        for p in all_paths(n, k) {
            let s = score_path(em, k, trans, &p);
            let better = match &best {
                None => true,
                Some((bs, bp)) => {
                    s > *bs || (s == *bs && p.iter().rev().lt(bp.iter().rev()))
                }
            };
            if better {
                best = Some((s, p));
            }
        }
        best.unwrap().1
    }
}
