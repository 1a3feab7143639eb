//! Ranking (multi-class) NCE over log-scores, shared by every objective
//! that picks the positive out of a candidate set: nce_ranking, SimCLR,
//! MoCo, CLIP, the NCE form of generalized power iteration, and NCA.
//!
//! Scores enter as a matrix `ell[x, x′] = log u(x, x′)`; callers chain the
//! returned `d value / d ell` through their own parametrization.

use ndarray::{Array1, Array2};

use crate::dist::PairBatch;
use crate::error::{Error, Result};
use crate::linalg::logsumexp;

/// How the k−1 negatives of each anchor are realized.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RankingMode<'a> {
    /// Exact expectation over k−1 i.i.d. negatives from the column
    /// marginal, enumerated as multinomial count vectors. This is the
    /// population value of the sampled estimator.
    Expected,
    /// The inner expectation moved inside the log:
    /// `log(u_pos + (k−1)·E_py[u])`. Cheap, exact at u ≡ const and k = 1,
    /// but its minimizer is only proportional to the ratio as k → ∞.
    Surrogate,
    /// Sample means over a batch: anchor i uses `pos_pairs[i]` and the
    /// x′-components of `neg_pairs[i(k−1) .. (i+1)(k−1)]`.
    Sampled(&'a PairBatch),
}

/// Value and gradient with respect to the log-score matrix.
#[derive(Debug, Clone)]
pub struct RankingOutput {
    pub value: f64,
    pub grad: Array2<f64>,
}

/// Upper bound on multinomial count vectors enumerated per anchor.
pub const MAX_COMPOSITIONS: usize = 200_000;

/// All count vectors of `total` draws over `m` bins, with their
/// log multinomial coefficients.
pub fn compositions(total: usize, m: usize) -> Result<Vec<(Vec<usize>, f64)>> {
    let count = binomial(total + m - 1, m - 1);
    if count > MAX_COMPOSITIONS as f64 {
        return Err(Error::Config(format!(
            "{count} candidate configurations for k−1 = {total} over {m} items; use the surrogate or sampled mode"
        )));
    }
    let log_fact: Vec<f64> = std::iter::once(0.0)
        .chain((1..=total).scan(0.0, |acc, i| {
            *acc += (i as f64).ln();
            Some(*acc)
        }))
        .collect();
    let mut out = Vec::new();
    let mut cur = vec![0usize; m];
    fn rec(pos: usize, left: usize, cur: &mut Vec<usize>, out: &mut Vec<(Vec<usize>, f64)>, lf: &[f64]) {
        let m = cur.len();
        if pos == m - 1 {
            cur[pos] = left;
            let coef = lf[lf.len() - 1] - cur.iter().map(|&c| lf[c]).sum::<f64>();
            out.push((cur.clone(), coef));
            return;
        }
        for c in 0..=left {
            cur[pos] = c;
            rec(pos + 1, left - c, cur, out, lf);
        }
    }
    rec(0, total, &mut cur, &mut out, &log_fact);
    Ok(out)
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Ranking NCE with anchors drawn from the rows of `p` (weights `p[x, x′]`)
/// and negatives from `py`. The positive is always one of the k candidates.
pub fn ranking_loss(
    p: &Array2<f64>,
    py: &Array1<f64>,
    ell: &Array2<f64>,
    k: usize,
    mode: RankingMode,
) -> Result<RankingOutput> {
    if k == 0 {
        return Err(Error::Config("ranking NCE needs k ≥ 1".into()));
    }
    if p.dim() != ell.dim() || py.len() != ell.ncols() {
        return Err(Error::DimensionMismatch(format!("p {:?} vs scores {:?}", p.dim(), ell.dim())));
    }
    match mode {
        RankingMode::Expected => expected(p, py, ell, k),
        RankingMode::Surrogate => surrogate(p, py, ell, k),
        RankingMode::Sampled(batch) => sampled(ell, k, batch),
    }
}

fn expected(p: &Array2<f64>, py: &Array1<f64>, ell: &Array2<f64>, k: usize) -> Result<RankingOutput> {
    let (n, m) = ell.dim();
    let comps = compositions(k - 1, m)?;
    let log_py = py.mapv(f64::ln);
    let probs: Vec<f64> = comps
        .iter()
        .map(|(c, coef)| {
            let lp: f64 = c.iter().zip(log_py.iter()).filter(|(&ci, _)| ci > 0).map(|(&ci, &l)| ci as f64 * l).sum();
            (coef + lp).exp()
        })
        .collect();
    let mut value = 0.0;
    let mut grad = Array2::<f64>::zeros((n, m));
    for x in 0..n {
        let row = ell.row(x);
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|&v| (v - mx).exp()).collect();
        for (ci, (c, _)) in comps.iter().enumerate() {
            let pc = probs[ci];
            if pc == 0.0 {
                continue;
            }
            let base: f64 = c.iter().zip(&e).map(|(&cj, &ej)| cj as f64 * ej).sum();
            for y in 0..m {
                let w = p[[x, y]] * pc;
                if w == 0.0 {
                    continue;
                }
                let s = e[y] + base;
                value += w * (-(row[y] - mx) + s.ln());
                grad[[x, y]] += w * (-1.0 + e[y] / s);
                for (j, &cj) in c.iter().enumerate() {
                    if cj > 0 {
                        grad[[x, j]] += w * cj as f64 * e[j] / s;
                    }
                }
            }
        }
    }
    Ok(RankingOutput { value, grad })
}

fn surrogate(p: &Array2<f64>, py: &Array1<f64>, ell: &Array2<f64>, k: usize) -> Result<RankingOutput> {
    let (n, m) = ell.dim();
    let km1 = (k - 1) as f64;
    let mut value = 0.0;
    let mut grad = Array2::<f64>::zeros((n, m));
    for x in 0..n {
        let row = ell.row(x);
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|&v| (v - mx).exp()).collect();
        let z: f64 = e.iter().zip(py.iter()).map(|(a, b)| a * b).sum();
        // d value / d z, accumulated over positives
        let mut dz = 0.0;
        for y in 0..m {
            let w = p[[x, y]];
            if w == 0.0 {
                continue;
            }
            let s = e[y] + km1 * z;
            value += w * (-(row[y] - mx) + s.ln());
            grad[[x, y]] += w * (-1.0 + e[y] / s);
            dz += w * km1 / s;
        }
        for j in 0..m {
            grad[[x, j]] += dz * py[j] * e[j];
        }
    }
    Ok(RankingOutput { value, grad })
}

fn sampled(ell: &Array2<f64>, k: usize, batch: &PairBatch) -> Result<RankingOutput> {
    let (n, m) = ell.dim();
    let n_anchor = batch.pos_pairs.len();
    if n_anchor == 0 {
        return Err(Error::DimensionMismatch("sampled ranking NCE needs positives".into()));
    }
    if batch.neg_pairs.len() < n_anchor * (k - 1) {
        return Err(Error::DimensionMismatch(format!(
            "{} negatives for {} anchors with k = {}",
            batch.neg_pairs.len(),
            n_anchor,
            k
        )));
    }
    let w = 1.0 / n_anchor as f64;
    let mut value = 0.0;
    let mut grad = Array2::<f64>::zeros((n, m));
    for (i, &(x, y)) in batch.pos_pairs.iter().enumerate() {
        let cands: Vec<usize> = std::iter::once(y)
            .chain(batch.neg_pairs[i * (k - 1)..(i + 1) * (k - 1)].iter().map(|&(_, yn)| yn))
            .collect();
        let lse = logsumexp(cands.iter().map(|&c| ell[[x, c]]));
        value += w * (-ell[[x, y]] + lse);
        grad[[x, y]] -= w;
        for &c in &cands {
            grad[[x, c]] += w * (ell[[x, c]] - lse).exp();
        }
    }
    Ok(RankingOutput { value, grad })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dist::block4;

    #[test]
    fn composition_probabilities_sum_to_one() {
        let comps = compositions(3, 4).unwrap();
        assert_eq!(comps.len(), 20);
        let total: f64 = comps
            .iter()
            .map(|(c, coef)| (coef + c.iter().map(|&ci| ci as f64 * 0.25f64.ln()).sum::<f64>()).exp())
            .sum();
        assert!((total - 1.0).abs() < 1e-14);
    }

    #[test]
    fn constant_scores_give_log_k() {
        let j = block4();
        let ell = Array2::zeros((4, 4));
        for mode in [RankingMode::Expected, RankingMode::Surrogate] {
            let out = ranking_loss(j.p(), j.py(), &ell, 8, mode).unwrap();
            assert!((out.value - 8f64.ln()).abs() < 1e-12);
            let k1 = ranking_loss(j.p(), j.py(), &ell.mapv(|v| v + 0.3), 1, mode).unwrap();
            assert!(k1.value.abs() < 1e-15);
        }
    }
}
