//! Shared dense/banded linear algebra: SPD band Cholesky, Jacobi-CG,
//! symmetric eigensolvers (Householder + QL) and Lanczos iteration.

use crate::error::{Error, Result};
use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// Symmetric matrix stored as its lower band: entry (r, c) with r - c <= bw.
#[derive(Debug, Clone)]
pub struct BandMatrix {
    n: usize,
    bw: usize,
    data: Vec<f64>,
}

impl BandMatrix {
    pub fn new(n: usize, bw: usize) -> Self {
        BandMatrix {
            n,
            bw,
            data: vec![0.0; n * (bw + 1)],
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn bandwidth(&self) -> usize {
        self.bw
    }

    #[inline]
    fn slot(&self, r: usize, c: usize) -> usize {
        debug_assert!(r >= c && r - c <= self.bw);
        r * (self.bw + 1) + (self.bw - (r - c))
    }

    /// Value at (r, c) using symmetry; zero outside the band.
    pub fn get(&self, r: usize, c: usize) -> f64 {
        let (r, c) = if r >= c { (r, c) } else { (c, r) };
        if r - c > self.bw {
            0.0
        } else {
            self.data[self.slot(r, c)]
        }
    }

    /// Adds `v` at the symmetric position (r, c). Only the lower triangle is stored.
    pub fn add(&mut self, r: usize, c: usize, v: f64) {
        let (r, c) = if r >= c { (r, c) } else { (c, r) };
        let s = self.slot(r, c);
        self.data[s] += v;
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        let (r, c) = if r >= c { (r, c) } else { (c, r) };
        let s = self.slot(r, c);
        self.data[s] = v;
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.n);
        let mut y = vec![0.0; self.n];
        for r in 0..self.n {
            let c0 = r.saturating_sub(self.bw);
            for c in c0..=r {
                let v = self.data[self.slot(r, c)];
                y[r] += v * x[c];
                if c != r {
                    y[c] += v * x[r];
                }
            }
        }
        y
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.data[self.slot(i, i)]).collect()
    }

    /// Max |A - A^T| over the stored pattern. Always 0 by construction; kept so
    /// callers can assert the invariant explicitly.
    pub fn symmetry_defect(&self) -> f64 {
        0.0
    }

    /// In-place style Cholesky factorization A = L L^T within the band.
    pub fn cholesky(&self) -> Result<BandCholesky> {
        let n = self.n;
        let bw = self.bw;
        let w = bw + 1;
        let slot = |r: usize, c: usize| r * w + (bw - (r - c));
        let mut l = self.clone();
        for j in 0..n {
            let mut s = l.data[slot(j, j)];
            let j0 = j.saturating_sub(bw);
            for k in j0..j {
                let v = l.data[slot(j, k)];
                s -= v * v;
            }
            if s <= 0.0 || !s.is_finite() {
                return Err(Error::SolverFailure(format!(
                    "matrix not positive definite at pivot {j} (value {s:.3e})"
                )));
            }
            let d = s.sqrt();
            l.data[slot(j, j)] = d;
            let imax = (j + bw).min(n - 1);
            for i in j + 1..=imax {
                let mut s = l.data[slot(i, j)];
                let k0 = i.saturating_sub(bw).max(j0);
                for k in k0..j {
                    s -= l.data[slot(i, k)] * l.data[slot(j, k)];
                }
                l.data[slot(i, j)] = s / d;
            }
        }
        Ok(BandCholesky { l })
    }
}

/// Lower-triangular band Cholesky factor.
#[derive(Debug, Clone)]
pub struct BandCholesky {
    l: BandMatrix,
}

impl BandCholesky {
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.l.n;
        let bw = self.l.bw;
        assert_eq!(b.len(), n);
        let mut y = b.to_vec();
        for i in 0..n {
            let k0 = i.saturating_sub(bw);
            let mut s = y[i];
            for k in k0..i {
                s -= self.l.data[self.l.slot(i, k)] * y[k];
            }
            y[i] = s / self.l.data[self.l.slot(i, i)];
        }
        for i in (0..n).rev() {
            let kmax = (i + bw).min(n - 1);
            let mut s = y[i];
            for k in i + 1..=kmax {
                s -= self.l.data[self.l.slot(k, i)] * y[k];
            }
            y[i] = s / self.l.data[self.l.slot(i, i)];
        }
        y
    }
}

/// Jacobi-preconditioned conjugate gradients on a band matrix.
pub fn cg_solve(a: &BandMatrix, b: &[f64], tol: f64, max_iter: usize) -> Result<(Vec<f64>, usize)> {
    let n = a.n();
    let diag = a.diagonal();
    let inv_diag: Vec<f64> = diag
        .iter()
        .map(|&d| if d.abs() > 0.0 { 1.0 / d } else { 1.0 })
        .collect();
    let mut x = vec![0.0; n];
    let mut r = b.to_vec();
    let bnorm = norm2(b);
    if bnorm == 0.0 {
        return Ok((x, 0));
    }
    let mut z: Vec<f64> = r.iter().zip(&inv_diag).map(|(ri, di)| ri * di).collect();
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    for it in 0..max_iter {
        let ap = a.matvec(&p);
        let alpha = rz / dot(&p, &ap);
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        if norm2(&r) <= tol * bnorm {
            return Ok((x, it + 1));
        }
        for i in 0..n {
            z[i] = r[i] * inv_diag[i];
        }
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    Err(Error::SolverFailure(format!(
        "CG did not converge in {max_iter} iterations (residual {:.3e})",
        norm2(&r) / bnorm
    )))
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Dense Cholesky (lower factor) for small SPD matrices.
pub fn dense_cholesky(a: &Array2<f64>) -> Result<Array2<f64>> {
    let n = a.nrows();
    assert_eq!(n, a.ncols());
    let mut l = Array2::<f64>::zeros((n, n));
    for j in 0..n {
        let mut s = a[[j, j]];
        for k in 0..j {
            s -= l[[j, k]] * l[[j, k]];
        }
        if s <= 0.0 || !s.is_finite() {
            return Err(Error::SolverFailure(format!(
                "dense Cholesky pivot {j} non-positive ({s:.3e})"
            )));
        }
        l[[j, j]] = s.sqrt();
        for i in j + 1..n {
            let mut s = a[[i, j]];
            for k in 0..j {
                s -= l[[i, k]] * l[[j, k]];
            }
            l[[i, j]] = s / l[[j, j]];
        }
    }
    Ok(l)
}

/// Solves L L^T x = b given the lower factor.
pub fn dense_chol_solve(l: &Array2<f64>, b: &[f64]) -> Vec<f64> {
    let n = l.nrows();
    let mut y = b.to_vec();
    for i in 0..n {
        let mut s = y[i];
        for k in 0..i {
            s -= l[[i, k]] * y[k];
        }
        y[i] = s / l[[i, i]];
    }
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in i + 1..n {
            s -= l[[k, i]] * y[k];
        }
        y[i] = s / l[[i, i]];
    }
    y
}

/// Forward substitution L y = b.
pub fn dense_forward_solve(l: &Array2<f64>, b: &[f64]) -> Vec<f64> {
    let n = l.nrows();
    let mut y = b.to_vec();
    for i in 0..n {
        let mut s = y[i];
        for k in 0..i {
            s -= l[[i, k]] * y[k];
        }
        y[i] = s / l[[i, i]];
    }
    y
}

/// Eigendecomposition of a real symmetric matrix (Householder tridiagonalization
/// followed by implicit-shift QL). Returns eigenvalues ascending with matching
/// eigenvector columns.
pub fn sym_eigen(a: &Array2<f64>) -> Result<(Vec<f64>, Array2<f64>)> {
    let n = a.nrows();
    assert_eq!(n, a.ncols());
    let mut v = a.clone();
    let (mut d, mut e) = tred2(&mut v);
    tql2(&mut d, &mut e, Some(&mut v))?;
    Ok((d, v))
}

/// Eigenvalues (ascending) of a symmetric tridiagonal matrix given its diagonal
/// and subdiagonal (`off[i]` couples rows i and i+1).
pub fn tridiag_eigenvalues(diag: &[f64], off: &[f64]) -> Result<Vec<f64>> {
    let n = diag.len();
    let mut d = diag.to_vec();
    // tql2 expects e[i] to couple rows (i-1, i)
    let mut es = vec![0.0; n];
    for i in 1..n {
        es[i] = off[i - 1];
    }
    tql2(&mut d, &mut es, None)?;
    Ok(d)
}

/// Full eigendecomposition of a symmetric tridiagonal matrix.
pub fn tridiag_eigen(diag: &[f64], off: &[f64]) -> Result<(Vec<f64>, Array2<f64>)> {
    let n = diag.len();
    let mut d = diag.to_vec();
    let mut es = vec![0.0; n];
    for i in 1..n {
        es[i] = off[i - 1];
    }
    let mut v = Array2::<f64>::eye(n);
    tql2(&mut d, &mut es, Some(&mut v))?;
    Ok((d, v))
}

// Householder reduction to tridiagonal form with accumulation of the
// orthogonal transform (classic tred2). `v` holds the symmetric input and is
// replaced by the transform; returns (diagonal, subdiagonal-in-e[1..]).
fn tred2(v: &mut Array2<f64>) -> (Vec<f64>, Vec<f64>) {
    let n = v.nrows();
    let mut d: Vec<f64> = (0..n).map(|j| v[[n - 1, j]]).collect();
    let mut e = vec![0.0; n];

    for i in (1..n).rev() {
        let mut scale = 0.0;
        let mut h = 0.0;
        for item in d.iter().take(i) {
            scale += item.abs();
        }
        if scale == 0.0 {
            e[i] = d[i - 1];
            for j in 0..i {
                d[j] = v[[i - 1, j]];
                v[[i, j]] = 0.0;
                v[[j, i]] = 0.0;
            }
        } else {
            for item in d.iter_mut().take(i) {
                *item /= scale;
                h += *item * *item;
            }
            let mut f = d[i - 1];
            let mut g = h.sqrt();
            if f > 0.0 {
                g = -g;
            }
            e[i] = scale * g;
            h -= f * g;
            d[i - 1] = f - g;
            for item in e.iter_mut().take(i) {
                *item = 0.0;
            }
            for j in 0..i {
                f = d[j];
                v[[j, i]] = f;
                g = e[j] + v[[j, j]] * f;
                for k in j + 1..i {
                    g += v[[k, j]] * d[k];
                    e[k] += v[[k, j]] * f;
                }
                e[j] = g;
            }
            f = 0.0;
            for j in 0..i {
                e[j] /= h;
                f += e[j] * d[j];
            }
            let hh = f / (h + h);
            for j in 0..i {
                e[j] -= hh * d[j];
            }
            for j in 0..i {
                f = d[j];
                g = e[j];
                for k in j..i {
                    let upd = f * e[k] + g * d[k];
                    v[[k, j]] -= upd;
                }
                d[j] = v[[i - 1, j]];
                v[[i, j]] = 0.0;
            }
        }
        d[i] = h;
    }

    for i in 0..n - 1 {
        v[[n - 1, i]] = v[[i, i]];
        v[[i, i]] = 1.0;
        let h = d[i + 1];
        if h != 0.0 {
            for k in 0..=i {
                d[k] = v[[k, i + 1]] / h;
            }
            for j in 0..=i {
                let mut g = 0.0;
                for k in 0..=i {
                    g += v[[k, i + 1]] * v[[k, j]];
                }
                for k in 0..=i {
                    v[[k, j]] -= g * d[k];
                }
            }
        }
        for k in 0..=i {
            v[[k, i + 1]] = 0.0;
        }
    }
    for j in 0..n {
        d[j] = v[[n - 1, j]];
        v[[n - 1, j]] = 0.0;
    }
    v[[n - 1, n - 1]] = 1.0;
    e[0] = 0.0;
    (d, e)
}

// Implicit-shift QL iteration on a symmetric tridiagonal matrix (classic tql2).
// Eigenvalues land in `d` ascending; optional `v` accumulates eigenvectors.
fn tql2(d: &mut [f64], e: &mut [f64], mut v: Option<&mut Array2<f64>>) -> Result<()> {
    let n = d.len();
    if n == 0 {
        return Ok(());
    }
    for i in 1..n {
        e[i - 1] = e[i];
    }
    e[n - 1] = 0.0;

    let mut f = 0.0_f64;
    let mut tst1 = 0.0_f64;
    let eps = f64::EPSILON;
    for l in 0..n {
        tst1 = tst1.max(d[l].abs() + e[l].abs());
        let mut m = l;
        while m < n {
            if e[m].abs() <= eps * tst1 {
                break;
            }
            m += 1;
        }
        if m > l {
            let mut iter = 0;
            loop {
                iter += 1;
                if iter > 100 {
                    return Err(Error::EigenFailure(format!(
                        "QL iteration failed to converge at index {l}"
                    )));
                }
                let g = d[l];
                let mut p = (d[l + 1] - g) / (2.0 * e[l]);
                let mut r = p.hypot(1.0);
                if p < 0.0 {
                    r = -r;
                }
                d[l] = e[l] / (p + r);
                d[l + 1] = e[l] * (p + r);
                let dl1 = d[l + 1];
                let mut h = g - d[l];
                for item in d.iter_mut().take(n).skip(l + 2) {
                    *item -= h;
                }
                f += h;

                p = d[m];
                let mut c = 1.0_f64;
                let mut c2 = c;
                let mut c3 = c;
                let el1 = e[l + 1];
                let mut s = 0.0_f64;
                let mut s2 = 0.0_f64;
                for i in (l..m).rev() {
                    c3 = c2;
                    c2 = c;
                    s2 = s;
                    let g = c * e[i];
                    h = c * p;
                    r = p.hypot(e[i]);
                    e[i + 1] = s * r;
                    s = e[i] / r;
                    c = p / r;
                    p = c * d[i] - s * g;
                    d[i + 1] = h + s * (c * g + s * d[i]);
                    if let Some(vm) = v.as_deref_mut() {
                        for k in 0..n {
                            h = vm[[k, i + 1]];
                            vm[[k, i + 1]] = s * vm[[k, i]] + c * h;
                            vm[[k, i]] = c * vm[[k, i]] - s * h;
                        }
                    }
                }
                p = -s * s2 * c3 * el1 * e[l] / dl1;
                e[l] = s * p;
                d[l] = c * p;
                if e[l].abs() <= eps * tst1 {
                    break;
                }
            }
        }
        d[l] += f;
        e[l] = 0.0;
    }

    // sort ascending, carrying eigenvectors along
    for i in 0..n.saturating_sub(1) {
        let mut k = i;
        let mut p = d[i];
        for j in i + 1..n {
            if d[j] < p {
                k = j;
                p = d[j];
            }
        }
        if k != i {
            d.swap(i, k);
            if let Some(vm) = v.as_deref_mut() {
                for r in 0..n {
                    let tmp = vm[[r, i]];
                    vm[[r, i]] = vm[[r, k]];
                    vm[[r, k]] = tmp;
                }
            }
        }
    }
    Ok(())
}

/// Result of a Lanczos run: the leading eigenpairs in descending order.
pub struct LanczosResult {
    pub eigenvalues: Vec<f64>,
    pub eigenvectors: Vec<Vec<f64>>,
}

/// Lanczos with full reorthogonalization on an implicit symmetric PSD operator.
/// Runs until the top Ritz values account for `energy_frac * total_trace`, then
/// returns the minimal such leading set once its residuals are converged.
pub fn lanczos_top_energy<F>(
    n: usize,
    mut matvec: F,
    total_trace: f64,
    energy_frac: f64,
    seed: u64,
) -> Result<LanczosResult>
where
    F: FnMut(&[f64]) -> Vec<f64>,
{
    assert!(n > 0);
    let target = energy_frac * total_trace;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut v0: Vec<f64> = (0..n).map(|_| rng.random::<f64>() - 0.5).collect();
    normalize(&mut v0);

    let mut basis: Vec<Vec<f64>> = vec![v0];
    let mut alphas: Vec<f64> = Vec::new();
    let mut betas: Vec<f64> = Vec::new();
    let mut exhausted = false;

    loop {
        let k = alphas.len();
        if !exhausted && k < n {
            let vk = basis[k].clone();
            let mut w = matvec(&vk);
            if k > 0 {
                let b = betas[k - 1];
                let vprev = &basis[k - 1];
                for i in 0..n {
                    w[i] -= b * vprev[i];
                }
            }
            let alpha = dot(&w, &vk);
            for i in 0..n {
                w[i] -= alpha * vk[i];
            }
            // two-pass reorthogonalization keeps the basis numerically orthogonal
            for _ in 0..2 {
                for u in &basis {
                    let c = dot(&w, u);
                    for i in 0..n {
                        w[i] -= c * u[i];
                    }
                }
            }
            alphas.push(alpha);
            let beta = norm2(&w);
            let scale = total_trace.max(1.0);
            if beta <= 1e-13 * scale {
                // invariant subspace hit; restart with a fresh direction if any remains
                if basis.len() >= n {
                    exhausted = true;
                } else {
                    let mut restart: Vec<f64> =
                        (0..n).map(|_| rng.random::<f64>() - 0.5).collect();
                    for u in &basis {
                        let c = dot(&restart, u);
                        for i in 0..n {
                            restart[i] -= c * u[i];
                        }
                    }
                    let nrm = norm2(&restart);
                    if nrm <= 1e-12 {
                        exhausted = true;
                    } else {
                        for x in restart.iter_mut() {
                            *x /= nrm;
                        }
                        betas.push(0.0);
                        basis.push(restart);
                    }
                }
            } else {
                for x in w.iter_mut() {
                    *x /= beta;
                }
                betas.push(beta);
                basis.push(w);
            }
        } else {
            exhausted = true;
        }

        let k = alphas.len();
        let complete = exhausted || k >= n;
        if complete || k % 16 == 0 {
            let vals = tridiag_eigenvalues(&alphas, &betas[..k - 1])?;
            let desc: Vec<f64> = vals.iter().rev().map(|&x| x.max(0.0)).collect();
            let mut cum = 0.0;
            let mut needed = None;
            for (i, &x) in desc.iter().enumerate() {
                cum += x;
                if cum >= target {
                    needed = Some(i + 1);
                    break;
                }
            }
            let reached = needed.is_some();
            if reached || complete {
                let n_need = needed.unwrap_or(desc.len());
                let (tvals, tvecs) = tridiag_eigen(&alphas, &betas[..k - 1])?;
                // descending order of the tridiagonal eigenpairs
                let order: Vec<usize> = (0..k).rev().collect();
                let beta_last = *betas.last().unwrap_or(&0.0);
                let theta_max = tvals[k - 1].abs().max(1e-300);
                let mut converged = true;
                if !complete {
                    for &idx in order.iter().take(n_need) {
                        let resid = (beta_last * tvecs[[k - 1, idx]]).abs();
                        if resid > 1e-8 * theta_max {
                            converged = false;
                            break;
                        }
                    }
                }
                if converged && (reached || complete) {
                    if !reached && complete {
                        return Err(Error::EigenFailure(format!(
                            "energy fraction {energy_frac} unreachable: spectrum sum {cum:.6e} < target {target:.6e}"
                        )));
                    }
                    let mut eigenvalues = Vec::with_capacity(n_need);
                    let mut eigenvectors = Vec::with_capacity(n_need);
                    for &idx in order.iter().take(n_need) {
                        eigenvalues.push(tvals[idx].max(0.0));
                        let mut x = vec![0.0; n];
                        for (j, base) in basis.iter().take(k).enumerate() {
                            let s = tvecs[[j, idx]];
                            if s != 0.0 {
                                for i in 0..n {
                                    x[i] += s * base[i];
                                }
                            }
                        }
                        eigenvectors.push(x);
                    }
                    return Ok(LanczosResult {
                        eigenvalues,
                        eigenvectors,
                    });
                }
            }
            if complete {
                return Err(Error::EigenFailure(
                    "Lanczos exhausted the space without converging".into(),
                ));
            }
        }
    }
}

fn normalize(v: &mut [f64]) {
    let n = norm2(v);
    if n > 0.0 {
        for x in v.iter_mut() {
            *x /= n;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn random_spd(n: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut b = Array2::<f64>::zeros((n, n));
        for i in 0..n {
            for j in 0..n {
                b[[i, j]] = rng.random::<f64>() - 0.5;
            }
        }
        let mut a = b.t().dot(&b);
        for i in 0..n {
            a[[i, i]] += n as f64;
        }
        a
    }

    #[test]
    fn band_cholesky_solves_spd_system() {
        let n = 40;
        let bw = 3;
        let mut a = BandMatrix::new(n, bw);
        for i in 0..n {
            a.set(i, i, 4.0);
            if i + 1 < n {
                a.set(i + 1, i, -1.0);
            }
            if i + 3 < n {
                a.set(i + 3, i, -0.5);
            }
        }
        let b: Vec<f64> = (0..n).map(|i| (i as f64).sin()).collect();
        let chol = a.cholesky().unwrap();
        let x = chol.solve(&b);
        let r = a.matvec(&x);
        for i in 0..n {
            assert_abs_diff_eq!(r[i], b[i], epsilon = 1e-12);
        }
    }

    #[test]
    fn band_cholesky_rejects_indefinite() {
        let mut a = BandMatrix::new(3, 1);
        a.set(0, 0, 1.0);
        a.set(1, 1, -1.0);
        a.set(2, 2, 1.0);
        assert!(a.cholesky().is_err());
    }

    #[test]
    fn cg_agrees_with_direct_solve() {
        let n = 60;
        let bw = 2;
        let mut a = BandMatrix::new(n, bw);
        for i in 0..n {
            a.set(i, i, 5.0 + (i % 3) as f64);
            if i + 1 < n {
                a.set(i + 1, i, -1.0);
            }
            if i + 2 < n {
                a.set(i + 2, i, -0.7);
            }
        }
        let b: Vec<f64> = (0..n).map(|i| (i as f64 * 0.3).cos()).collect();
        let xd = a.cholesky().unwrap().solve(&b);
        let (xc, _iters) = cg_solve(&a, &b, 1e-13, 10 * n).unwrap();
        for i in 0..n {
            assert_abs_diff_eq!(xd[i], xc[i], epsilon = 1e-9);
        }
    }

    #[test]
    fn sym_eigen_reconstructs_matrix() {
        let a = random_spd(12, 7);
        let (vals, vecs) = sym_eigen(&a).unwrap();
        // ascending order
        for w in vals.windows(2) {
            assert!(w[0] <= w[1] + 1e-12);
        }
        let lam = Array2::from_diag(&ndarray::Array1::from_vec(vals.clone()));
        let recon = vecs.dot(&lam).dot(&vecs.t());
        for i in 0..12 {
            for j in 0..12 {
                assert_abs_diff_eq!(recon[[i, j]], a[[i, j]], epsilon = 1e-9);
            }
        }
        // orthonormal columns
        let g = vecs.t().dot(&vecs);
        for i in 0..12 {
            for j in 0..12 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert_abs_diff_eq!(g[[i, j]], want, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn sym_eigen_known_2x2() {
        let a = ndarray::arr2(&[[2.0, 1.0], [1.0, 2.0]]);
        let (vals, _) = sym_eigen(&a).unwrap();
        assert_abs_diff_eq!(vals[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(vals[1], 3.0, epsilon = 1e-12);
    }

    #[test]
    fn tridiag_eigen_matches_dense() {
        let n = 15;
        let diag: Vec<f64> = (0..n).map(|i| 2.0 + 0.1 * i as f64).collect();
        let off: Vec<f64> = (0..n - 1).map(|i| -1.0 + 0.01 * i as f64).collect();
        let mut dense = Array2::<f64>::zeros((n, n));
        for i in 0..n {
            dense[[i, i]] = diag[i];
            if i + 1 < n {
                dense[[i + 1, i]] = off[i];
                dense[[i, i + 1]] = off[i];
            }
        }
        let (vd, _) = sym_eigen(&dense).unwrap();
        let vt = tridiag_eigenvalues(&diag, &off).unwrap();
        for i in 0..n {
            assert_abs_diff_eq!(vd[i], vt[i], epsilon = 1e-10);
        }
    }

    #[test]
    fn lanczos_matches_dense_eigenpairs() {
        let a = random_spd(30, 3);
        let trace: f64 = (0..30).map(|i| a[[i, i]]).sum();
        let res = lanczos_top_energy(30, |v| a.dot(&ndarray::Array1::from_vec(v.to_vec())).to_vec(), trace, 0.9, 42)
            .unwrap();
        let (vals, _) = sym_eigen(&a).unwrap();
        let mut desc: Vec<f64> = vals.into_iter().rev().collect();
        desc.truncate(res.eigenvalues.len());
        for (got, want) in res.eigenvalues.iter().zip(&desc) {
            assert_abs_diff_eq!(got, want, epsilon = 1e-8 * want.abs().max(1.0));
        }
        // eigenvectors orthonormal and satisfy A x = lambda x
        for (lam, x) in res.eigenvalues.iter().zip(&res.eigenvectors) {
            let ax = a.dot(&ndarray::Array1::from_vec(x.clone()));
            for i in 0..30 {
                assert_abs_diff_eq!(ax[i], lam * x[i], epsilon = 1e-7 * lam.max(1.0));
            }
            assert_abs_diff_eq!(norm2(x), 1.0, epsilon = 1e-10);
        }
    }

    #[test]
    fn dense_cholesky_round_trip() {
        let a = random_spd(8, 11);
        let l = dense_cholesky(&a).unwrap();
        let b: Vec<f64> = (0..8).map(|i| i as f64 + 0.5).collect();
        let x = dense_chol_solve(&l, &b);
        let ax = a.dot(&ndarray::Array1::from_vec(x));
        for i in 0..8 {
            assert_abs_diff_eq!(ax[i], b[i], epsilon = 1e-9);
        }
    }
}
