//! Small dense linear algebra: Jacobi eigen/SVD solvers, LU solves and
//! helpers shared by every module. Matrices here are at most a few hundred
//! entries, so the O(n³) sweeps are cheap and accurate.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};

use crate::error::{Error, Result};

const EPS: f64 = f64::EPSILON;

/// Symmetric eigendecomposition by cyclic Jacobi rotations.
///
/// Returns eigenvalues sorted descending and the matching eigenvectors as
/// columns, with the first nonzero entry of each column made positive.
pub fn sym_eigen(a: ArrayView2<f64>) -> (Array1<f64>, Array2<f64>) {
    let n = a.nrows();
    assert_eq!(n, a.ncols(), "sym_eigen needs a square matrix");
    let mut m = a.to_owned();
    // symmetrize to kill round-off asymmetry in callers' products
    for i in 0..n {
        for j in 0..i {
            let v = 0.5 * (m[[i, j]] + m[[j, i]]);
            m[[i, j]] = v;
            m[[j, i]] = v;
        }
    }
    let mut v = Array2::<f64>::eye(n);
    for _sweep in 0..100 {
        let mut off = 0.0;
        let mut total = 0.0;
        for i in 0..n {
            for j in 0..n {
                let x = m[[i, j]] * m[[i, j]];
                total += x;
                if i != j {
                    off += x;
                }
            }
        }
        if off <= (EPS * EPS) * total || off < 1e-300 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[[p, q]];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let app = m[[p, p]];
                let aqq = m[[q, q]];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[[k, p]];
                    let mkq = m[[k, q]];
                    m[[k, p]] = c * mkp - s * mkq;
                    m[[k, q]] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[[p, k]];
                    let mqk = m[[q, k]];
                    m[[p, k]] = c * mpk - s * mqk;
                    m[[q, k]] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[[k, p]];
                    let vkq = v[[k, q]];
                    v[[k, p]] = c * vkp - s * vkq;
                    v[[k, q]] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[[j, j]].total_cmp(&m[[i, i]]).then(i.cmp(&j)));
    let vals = Array1::from_iter(order.iter().map(|&i| m[[i, i]]));
    let mut vecs = Array2::<f64>::zeros((n, n));
    for (c, &i) in order.iter().enumerate() {
        vecs.column_mut(c).assign(&v.column(i));
    }
    fix_signs(&mut vecs, None);
    (vals, vecs)
}

/// Thin singular value decomposition `a = u · diag(s) · vᵀ`.
#[derive(Debug, Clone)]
pub struct Svd {
    /// n×r left singular vectors, r = min(n, m).
    pub u: Array2<f64>,
    /// Singular values, descending.
    pub s: Array1<f64>,
    /// m×r right singular vectors.
    pub v: Array2<f64>,
}

/// One-sided (Hestenes) Jacobi SVD. Small singular values are computed to
/// high relative accuracy, which matters for rank decisions near 1e-8.
pub fn svd(a: ArrayView2<f64>) -> Svd {
    let (n, m) = a.dim();
    if n < m {
        let t = svd(a.t());
        return Svd { u: t.v, s: t.s, v: t.u };
    }
    let mut w = a.to_owned();
    let mut v = Array2::<f64>::eye(m);
    for _sweep in 0..80 {
        let mut rotated = false;
        for p in 0..m {
            for q in (p + 1)..m {
                let (mut alpha, mut beta, mut gamma) = (0.0, 0.0, 0.0);
                for i in 0..n {
                    let x = w[[i, p]];
                    let y = w[[i, q]];
                    alpha += x * x;
                    beta += y * y;
                    gamma += x * y;
                }
                if gamma.abs() <= EPS * (alpha * beta).sqrt() || gamma.abs() < 1e-300 {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..n {
                    let x = w[[i, p]];
                    let y = w[[i, q]];
                    w[[i, p]] = c * x - s * y;
                    w[[i, q]] = s * x + c * y;
                }
                for i in 0..m {
                    let x = v[[i, p]];
                    let y = v[[i, q]];
                    v[[i, p]] = c * x - s * y;
                    v[[i, q]] = s * x + c * y;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let norms: Vec<f64> = (0..m).map(|j| w.column(j).dot(&w.column(j)).sqrt()).collect();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]).then(i.cmp(&j)));
    let smax = norms.iter().cloned().fold(0.0, f64::max);
    let mut u = Array2::<f64>::zeros((n, m));
    let mut vs = Array2::<f64>::zeros((m, m));
    let mut s = Array1::<f64>::zeros(m);
    let mut missing = Vec::new();
    for (c, &j) in order.iter().enumerate() {
        s[c] = norms[j];
        vs.column_mut(c).assign(&v.column(j));
        if norms[j] > 1e-150 * smax.max(1e-300) && norms[j] > 0.0 {
            let col = w.column(j).mapv(|x| x / norms[j]);
            u.column_mut(c).assign(&col);
        } else {
            missing.push(c);
        }
    }
    complete_orthonormal(&mut u, &missing);
    // sign convention on u, mirrored on v
    for c in 0..m {
        if first_nonzero_negative(u.column(c).iter().copied()) {
            u.column_mut(c).mapv_inplace(|x| -x);
            vs.column_mut(c).mapv_inplace(|x| -x);
        }
    }
    Svd { u, s, v: vs }
}

fn first_nonzero_negative(it: impl Iterator<Item = f64>) -> bool {
    let vals: Vec<f64> = it.collect();
    let scale = vals.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
    for x in vals {
        if x.abs() > 1e-12 * scale.max(1e-300) {
            return x < 0.0;
        }
    }
    false
}

/// Flip column signs so the first nonzero entry is positive. When `partner`
/// is given its columns are flipped alongside.
pub fn fix_signs(a: &mut Array2<f64>, mut partner: Option<&mut Array2<f64>>) {
    for c in 0..a.ncols() {
        if first_nonzero_negative(a.column(c).iter().copied()) {
            a.column_mut(c).mapv_inplace(|x| -x);
            if let Some(p) = partner.as_deref_mut() {
                p.column_mut(c).mapv_inplace(|x| -x);
            }
        }
    }
}

/// Fill the listed columns of `u` with unit vectors orthogonal to every
/// other column (Gram–Schmidt against the standard basis, twice).
fn complete_orthonormal(u: &mut Array2<f64>, missing: &[usize]) {
    let n = u.nrows();
    for &c in missing {
        u.column_mut(c).fill(0.0);
    }
    let mut filled: Vec<bool> = (0..u.ncols()).map(|c| !missing.contains(&c)).collect();
    for &c in missing {
        let mut best: Option<Array1<f64>> = None;
        let mut best_norm = 0.0;
        for e in 0..n {
            let mut cand = Array1::<f64>::zeros(n);
            cand[e] = 1.0;
            for _ in 0..2 {
                for k in 0..u.ncols() {
                    if filled[k] {
                        let col = u.column(k);
                        let proj = col.dot(&cand);
                        cand.scaled_add(-proj, &col);
                    }
                }
            }
            let nrm = cand.dot(&cand).sqrt();
            if nrm > best_norm {
                best_norm = nrm;
                best = Some(cand);
            }
            if nrm > 0.5 {
                break;
            }
        }
        let b = best.expect("completion candidate");
        u.column_mut(c).assign(&b.mapv(|x| x / best_norm));
        filled[c] = true;
    }
}

/// Solve `a x = b` by LU with partial pivoting. `b` may hold several
/// right-hand sides as columns.
pub fn solve(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<Array2<f64>> {
    let n = a.nrows();
    if a.ncols() != n || b.nrows() != n {
        return Err(Error::DimensionMismatch(format!("solve: a is {:?}, b is {:?}", a.dim(), b.dim())));
    }
    let mut lu = a.to_owned();
    let mut x = b.to_owned();
    let scale = lu.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    for k in 0..n {
        let mut piv = k;
        for i in (k + 1)..n {
            if lu[[i, k]].abs() > lu[[piv, k]].abs() {
                piv = i;
            }
        }
        if lu[[piv, k]].abs() <= 1e-14 * scale.max(1e-300) {
            return Err(Error::SingularGram(format!("pivot {k} vanishes")));
        }
        if piv != k {
            for j in 0..n {
                lu.swap([k, j], [piv, j]);
            }
            for j in 0..x.ncols() {
                x.swap([k, j], [piv, j]);
            }
        }
        for i in (k + 1)..n {
            let f = lu[[i, k]] / lu[[k, k]];
            if f == 0.0 {
                continue;
            }
            for j in k..n {
                lu[[i, j]] -= f * lu[[k, j]];
            }
            for j in 0..x.ncols() {
                x[[i, j]] -= f * x[[k, j]];
            }
        }
    }
    for k in (0..n).rev() {
        for j in 0..x.ncols() {
            let mut acc = x[[k, j]];
            for i in (k + 1)..n {
                acc -= lu[[k, i]] * x[[i, j]];
            }
            x[[k, j]] = acc / lu[[k, k]];
        }
    }
    Ok(x)
}

/// Solve `a x = b` for a single vector.
pub fn solve_vec(a: ArrayView2<f64>, b: &Array1<f64>) -> Result<Array1<f64>> {
    let bm = b.clone().insert_axis(Axis(1));
    Ok(solve(a, bm.view())?.column(0).to_owned())
}

/// Condition number of a symmetric positive semidefinite matrix
/// (ratio of extreme eigenvalues; infinite when singular).
pub fn sym_condition(a: ArrayView2<f64>) -> f64 {
    let (vals, _) = sym_eigen(a);
    let hi = vals.iter().cloned().fold(f64::MIN, f64::max);
    let lo = vals.iter().cloned().fold(f64::MAX, f64::min);
    if lo <= 0.0 {
        f64::INFINITY
    } else {
        hi / lo
    }
}

/// `a^{-1/2}` for a symmetric positive definite matrix, after adding
/// `ridge · I`.
pub fn inv_sqrt_sym(a: ArrayView2<f64>, ridge: f64) -> Result<Array2<f64>> {
    let n = a.nrows();
    let (vals, vecs) = sym_eigen(a);
    let mut out = Array2::<f64>::zeros((n, n));
    for k in 0..n {
        let l = vals[k] + ridge;
        if l <= 0.0 {
            return Err(Error::SingularGram(format!("eigenvalue {l:e} after ridge")));
        }
        let col = vecs.column(k);
        let w = 1.0 / l.sqrt();
        for i in 0..n {
            for j in 0..n {
                out[[i, j]] += w * col[i] * col[j];
            }
        }
    }
    Ok(out)
}

/// Orthonormal basis for the column span of `a` (left singular vectors of
/// the nonzero singular values). Errors when the numerical rank is below
/// the column count, using `smallest < rel_tol · largest`.
pub fn orthonormal_basis(a: ArrayView2<f64>, rel_tol: f64) -> Result<Array2<f64>> {
    let d = a.ncols();
    if d > a.nrows() {
        return Err(Error::RankDeficient(format!("{} columns in dimension {}", d, a.nrows())));
    }
    let f = svd(a);
    let smax = f.s[0];
    let smin = f.s[d - 1];
    if !(smax > 0.0) || smin < rel_tol * smax {
        return Err(Error::RankDeficient(format!("singular values {:?}", f.s.to_vec())));
    }
    Ok(f.u.slice(s![.., ..d]).to_owned())
}

/// Multiply row i of `a` by `w[i]`.
pub fn scale_rows(a: ArrayView2<f64>, w: &Array1<f64>) -> Array2<f64> {
    let mut out = a.to_owned();
    for (mut row, &wi) in out.rows_mut().into_iter().zip(w.iter()) {
        row.mapv_inplace(|x| x * wi);
    }
    out
}

/// Multiply column j of `a` by `w[j]`.
pub fn scale_cols(a: ArrayView2<f64>, w: &Array1<f64>) -> Array2<f64> {
    let mut out = a.to_owned();
    for (mut col, &wj) in out.columns_mut().into_iter().zip(w.iter()) {
        col.mapv_inplace(|x| x * wj);
    }
    out
}

/// Frobenius norm.
pub fn fro(a: ArrayView2<f64>) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Largest absolute entry of `a − b`.
pub fn max_abs_diff(a: ArrayView2<f64>, b: ArrayView2<f64>) -> f64 {
    a.iter().zip(b.iter()).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
}

/// Keep the lower triangle (including the diagonal), zeroing the rest.
pub fn lower_triangle(a: ArrayView2<f64>) -> Array2<f64> {
    let mut out = a.to_owned();
    for i in 0..out.nrows() {
        for j in (i + 1)..out.ncols() {
            out[[i, j]] = 0.0;
        }
    }
    out
}

/// Numerically stable `log(1 + exp(x))`.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Logistic function `1 / (1 + exp(−x))`.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log σ(x)` without overflow.
pub fn log_sigmoid(x: f64) -> f64 {
    -softplus(-x)
}

/// Row-wise softmax.
pub fn softmax_rows(a: ArrayView2<f64>) -> Array2<f64> {
    let mut out = a.to_owned();
    for mut row in out.rows_mut() {
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|x| (x - mx).exp());
        let z: f64 = row.sum();
        row.mapv_inplace(|x| x / z);
    }
    out
}

/// `log Σ exp(x_i)`.
pub fn logsumexp(xs: impl IntoIterator<Item = f64> + Clone) -> f64 {
    let mx = xs.clone().into_iter().fold(f64::NEG_INFINITY, f64::max);
    if mx == f64::NEG_INFINITY {
        return mx;
    }
    mx + xs.into_iter().map(|x| (x - mx).exp()).sum::<f64>().ln()
}
