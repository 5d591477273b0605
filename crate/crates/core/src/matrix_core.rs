//! Dense Hermitian linear algebra: eigendecomposition, resolvents, normalised traces and
//! the integral representation of |G|.
//!
//! Matrices are `faer::Mat<c64>`. Everything here is sequential so results are
//! bit-reproducible; parallelism lives one level up, across Monte Carlo trials.

use faer::{Mat, MatRef, Side};
use num_complex::Complex64 as C64;
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::quad::GaussRule;

pub type CMat = Mat<C64>;

/// Dense Hermitian matrix. The wrapper only exists to make the invariant explicit.
#[derive(Clone, Debug)]
pub struct HermitianMatrix {
    inner: CMat,
}

impl HermitianMatrix {
    /// Validates finiteness and Hermitian symmetry to 1e-12 (relative to the largest entry).
    pub fn new(m: CMat) -> Result<Self> {
        let n = m.nrows();
        if m.ncols() != n {
            return Err(Error::DimensionMismatch { expected: n, got: m.ncols() });
        }
        let mut scale: f64 = 1.0;
        for j in 0..n {
            for i in 0..n {
                let v = m[(i, j)];
                if !v.re.is_finite() || !v.im.is_finite() {
                    return Err(Error::NonFinite(i, j));
                }
                scale = scale.max(v.norm());
            }
        }
        let mut worst: f64 = 0.0;
        for j in 0..n {
            for i in 0..=j {
                worst = worst.max((m[(i, j)] - m[(j, i)].conj()).norm());
            }
        }
        if worst > 1e-12 * scale {
            return Err(Error::NotHermitian(worst));
        }
        Ok(Self { inner: m })
    }

    /// Builds from the upper triangle of `f`; the lower triangle is filled by conjugation.
    pub fn from_upper<F: FnMut(usize, usize) -> C64>(n: usize, mut f: F) -> Self {
        let mut m = CMat::zeros(n, n);
        for j in 0..n {
            for i in 0..=j {
                let v = f(i, j);
                if i == j {
                    m[(i, i)] = C64::new(v.re, 0.0);
                } else {
                    m[(i, j)] = v;
                    m[(j, i)] = v.conj();
                }
            }
        }
        Self { inner: m }
    }

    pub fn from_real_diagonal(d: &[f64]) -> Self {
        let n = d.len();
        Self {
            inner: CMat::from_fn(n, n, |i, j| if i == j { C64::new(d[i], 0.0) } else { C64::new(0.0, 0.0) }),
        }
    }

    pub fn n(&self) -> usize {
        self.inner.nrows()
    }

    pub fn as_ref(&self) -> MatRef<'_, C64> {
        self.inner.as_ref()
    }

    pub fn matrix(&self) -> &CMat {
        &self.inner
    }

    pub fn into_inner(self) -> CMat {
        self.inner
    }

    pub fn add(&self, other: &HermitianMatrix) -> Result<HermitianMatrix> {
        if self.n() != other.n() {
            return Err(Error::DimensionMismatch { expected: self.n(), got: other.n() });
        }
        Ok(Self { inner: &self.inner + &other.inner })
    }

    pub fn scaled(&self, s: f64) -> HermitianMatrix {
        let n = self.n();
        Self { inner: CMat::from_fn(n, n, |i, j| self.inner[(i, j)] * s) }
    }
}

/// Eigenvalues in ascending order, eigenvectors as the columns of a unitary matrix.
#[derive(Clone, Debug)]
pub struct SpectralDecomposition {
    pub eigenvalues: Vec<f64>,
    pub eigenvectors: CMat,
}

pub fn eigh(h: &HermitianMatrix) -> Result<SpectralDecomposition> {
    let evd = h.inner.self_adjoint_eigen(Side::Lower).map_err(|_| Error::EigenFailure)?;
    let s = evd.S();
    let u = evd.U();
    let n = h.n();
    let mut idx: Vec<usize> = (0..n).collect();
    let vals: Vec<f64> = (0..n).map(|i| s[i].re).collect();
    idx.sort_by(|&a, &b| vals[a].total_cmp(&vals[b]));
    let eigenvalues = idx.iter().map(|&i| vals[i]).collect();
    let eigenvectors = CMat::from_fn(n, n, |r, c| u[(r, idx[c])]);
    Ok(SpectralDecomposition { eigenvalues, eigenvectors })
}

impl SpectralDecomposition {
    pub fn n(&self) -> usize {
        self.eigenvalues.len()
    }

    /// U diag(f) U*.
    pub fn apply_diag(&self, f: &[C64]) -> CMat {
        spectral_apply(self.eigenvectors.as_ref(), f)
    }

    /// Reassembles U diag(lambda) U*.
    pub fn reconstruct(&self) -> CMat {
        let f: Vec<C64> = self.eigenvalues.iter().map(|&l| C64::new(l, 0.0)).collect();
        self.apply_diag(&f)
    }

    /// U* X U, i.e. X written in the eigenbasis.
    pub fn to_eigenbasis(&self, x: MatRef<'_, C64>) -> CMat {
        let u = self.eigenvectors.as_ref();
        u.adjoint() * x * u
    }
}

/// U diag(f) U* for a unitary U.
pub fn spectral_apply(u: MatRef<'_, C64>, f: &[C64]) -> CMat {
    let n = u.nrows();
    let scaled = CMat::from_fn(n, n, |i, j| u[(i, j)] * f[j]);
    &scaled * u.adjoint()
}

/// <A> = tr(A) / N.
pub fn normalized_trace(a: MatRef<'_, C64>) -> C64 {
    let n = a.nrows();
    let mut s = C64::new(0.0, 0.0);
    for i in 0..n {
        s += a[(i, i)];
    }
    s / n as f64
}

/// <A B> without forming the product.
pub fn trace_product(a: MatRef<'_, C64>, b: MatRef<'_, C64>) -> C64 {
    let n = a.nrows();
    let mut s = C64::new(0.0, 0.0);
    for j in 0..n {
        for i in 0..n {
            s += a[(i, j)] * b[(j, i)];
        }
    }
    s / n as f64
}

pub fn identity(n: usize) -> CMat {
    CMat::identity(n, n)
}

/// Largest singular value.
pub fn op_norm(a: MatRef<'_, C64>) -> f64 {
    if a.nrows() == 0 {
        return 0.0;
    }
    let s = a.singular_values().expect("SVD did not converge");
    s.first().copied().unwrap_or(0.0)
}

/// Operator norm of a Hermitian matrix via its eigenvalues.
pub fn hermitian_op_norm(a: &HermitianMatrix) -> f64 {
    let v = a.inner.self_adjoint_eigenvalues(Side::Lower).expect("eigenvalues did not converge");
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

pub fn frobenius_norm(a: MatRef<'_, C64>) -> f64 {
    let mut s = 0.0;
    for j in 0..a.ncols() {
        for i in 0..a.nrows() {
            s += a[(i, j)].norm_sqr();
        }
    }
    s.sqrt()
}

pub fn max_abs_diff(a: MatRef<'_, C64>, b: MatRef<'_, C64>) -> f64 {
    let mut m: f64 = 0.0;
    for j in 0..a.ncols() {
        for i in 0..a.nrows() {
            m = m.max((a[(i, j)] - b[(i, j)]).norm());
        }
    }
    m
}

/// G(z) = (H - z)^{-1} assembled spectrally.
pub fn resolvent(dec: &SpectralDecomposition, z: C64) -> Result<CMat> {
    if z.im == 0.0 {
        return Err(Error::RealSpectralParameter(z));
    }
    let g: Vec<C64> = dec.eigenvalues.iter().map(|&l| 1.0 / (C64::new(l, 0.0) - z)).collect();
    Ok(dec.apply_diag(&g))
}

/// Eigenvalues of G(z) in the eigenbasis of H.
pub fn resolvent_diag(eigenvalues: &[f64], z: C64) -> Vec<C64> {
    eigenvalues.iter().map(|&l| 1.0 / (C64::new(l, 0.0) - z)).collect()
}

#[derive(Clone, Debug)]
pub struct QuadConfig {
    /// Componentwise relative tolerance.
    pub tol: f64,
    /// Points per Gauss-Legendre panel.
    pub order: usize,
    /// Fixed truncation of the x-integral; `None` integrates until the tail is negligible.
    pub x_max: Option<f64>,
    pub max_panels: usize,
}

impl Default for QuadConfig {
    fn default() -> Self {
        Self { tol: 1e-10, order: 16, x_max: None, max_panels: 20_000 }
    }
}

#[derive(Clone, Debug)]
pub struct AbsResolvent {
    pub matrix: CMat,
    /// The integral evaluated on each eigenvalue, i.e. |G| in the eigenbasis.
    pub weights: Vec<f64>,
    /// Upper limit actually used in x.
    pub x_max: f64,
    pub panels: usize,
}

/// |G(E + i eta)| = (2/pi) int_0^inf Im G(E + i sqrt(eta^2 + x^2)) / sqrt(eta^2 + x^2) dx.
///
/// Substituting x = eta sinh(u) gives a smooth, exponentially decaying integrand. Im G at
/// each node is diagonal in the eigenbasis of H, so the quadrature runs on that diagonal
/// and the matrix is assembled once at the end.
pub fn abs_resolvent_integral(
    dec: &SpectralDecomposition,
    e: f64,
    eta: f64,
    quad: &QuadConfig,
) -> Result<AbsResolvent> {
    if !(eta > 0.0) || !eta.is_finite() {
        return Err(Error::InvalidParameter(format!("eta must be positive and finite, got {eta}")));
    }
    let a2: Vec<f64> = dec.eigenvalues.iter().map(|&l| (l - e) * (l - e)).collect();
    let rule = GaussRule::new(quad.order);
    // integrand in u for a given eigenvalue: (2/pi) eta cosh u / (a^2 + eta^2 cosh^2 u)
    let integrand = |u: f64, out: &mut [f64]| {
        let c = u.cosh();
        let ec = eta * c;
        for (o, &a) in out.iter_mut().zip(&a2) {
            *o = 2.0 / PI * ec / (a + ec * ec);
        }
    };
    let n = a2.len();
    let mut acc = vec![0.0; n];
    let mut tmp = vec![0.0; n];
    let panel_sum = |lo: f64, hi: f64, out: &mut [f64], tmp: &mut [f64]| {
        out.iter_mut().for_each(|v| *v = 0.0);
        for (x, w) in rule.points(lo, hi) {
            integrand(x, tmp);
            for (o, t) in out.iter_mut().zip(tmp.iter()) {
                *o += w * t;
            }
        }
    };

    let u_cap = quad.x_max.map(|xm| (xm / eta).asinh());
    // the integrand for eigenvalue a peaks near cosh u = |a|/eta; never stop before the last peak
    let amax = a2.iter().fold(0.0f64, |m, &v| m.max(v.sqrt()));
    let u_min_stop = (amax / eta).asinh() + 3.0;

    let mut panels = 0usize;
    let mut whole = vec![0.0; n];
    let mut left = vec![0.0; n];
    let mut right = vec![0.0; n];
    let mut stack: Vec<(f64, f64, usize)> = Vec::new();
    let mut u0 = 0.0;
    let width = 1.0;
    loop {
        let mut u1 = u0 + width;
        let mut last = false;
        if let Some(cap) = u_cap {
            if u1 >= cap {
                u1 = cap;
                last = true;
            }
        }
        if u1 <= u0 {
            break;
        }
        // adaptive refinement of one unit panel
        let mut contrib = vec![0.0; n];
        stack.push((u0, u1, 0));
        while let Some((lo, hi, depth)) = stack.pop() {
            panel_sum(lo, hi, &mut whole, &mut tmp);
            let mid = 0.5 * (lo + hi);
            panel_sum(lo, mid, &mut left, &mut tmp);
            panel_sum(mid, hi, &mut right, &mut tmp);
            let ok = whole
                .iter()
                .zip(left.iter().zip(right.iter()))
                .zip(acc.iter())
                .all(|((w, (l, r)), a)| (l + r - w).abs() <= 1e-2 * quad.tol * (a + l + r).max(f64::MIN_POSITIVE));
            if ok || depth >= 40 {
                for (c, (l, r)) in contrib.iter_mut().zip(left.iter().zip(right.iter())) {
                    *c += l + r;
                }
                panels += 1;
            } else {
                stack.push((mid, hi, depth + 1));
                stack.push((lo, mid, depth + 1));
            }
            if panels > quad.max_panels {
                return Err(Error::Quadrature(format!("more than {} panels", quad.max_panels)));
            }
        }
        for (a, c) in acc.iter_mut().zip(&contrib) {
            *a += c;
        }
        u0 = u1;
        if last {
            break;
        }
        if u_cap.is_none() && u0 >= u_min_stop {
            // tail after this point is bounded by ~1.6 times the last panel
            let small = contrib.iter().zip(&acc).all(|(c, a)| *c <= 0.05 * quad.tol * a);
            if small {
                break;
            }
        }
        if u0 > 800.0 {
            return Err(Error::Quadrature("tail did not decay".into()));
        }
    }
    let f: Vec<C64> = acc.iter().map(|&w| C64::new(w, 0.0)).collect();
    Ok(AbsResolvent { matrix: dec.apply_diag(&f), weights: acc, x_max: eta * u0.sinh(), panels })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_hermitian(n: usize) -> HermitianMatrix {
        HermitianMatrix::from_upper(n, |i, j| {
            let s = (i * 7 + j * 3) as f64;
            if i == j {
                C64::new((s * 0.37).sin(), 0.0)
            } else {
                C64::new((s * 0.11).cos() * 0.3, (s * 0.23).sin() * 0.2)
            }
        })
    }

    #[test]
    fn rejects_non_hermitian() {
        let mut m = CMat::zeros(2, 2);
        m[(0, 1)] = C64::new(1.0, 0.0);
        assert!(matches!(HermitianMatrix::new(m), Err(Error::NotHermitian(_))));
    }

    #[test]
    fn eigh_reconstructs() {
        let h = small_hermitian(12);
        let d = eigh(&h).unwrap();
        assert!(d.eigenvalues.windows(2).all(|w| w[0] <= w[1]));
        let r = d.reconstruct();
        assert!(max_abs_diff(r.as_ref(), h.as_ref()) < 1e-12);
        let u = d.eigenvectors.as_ref();
        let uu = u.adjoint() * u;
        assert!(max_abs_diff(uu.as_ref(), identity(12).as_ref()) < 1e-12);
    }

    #[test]
    fn pauli_x_spectrum() {
        let mut m = CMat::zeros(2, 2);
        m[(0, 1)] = C64::new(1.0, 0.0);
        m[(1, 0)] = C64::new(1.0, 0.0);
        let d = eigh(&HermitianMatrix::new(m).unwrap()).unwrap();
        assert!((d.eigenvalues[0] + 1.0).abs() < 1e-15 && (d.eigenvalues[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn resolvent_of_diagonal() {
        let h = HermitianMatrix::from_real_diagonal(&[-1.0, 0.5, 2.0]);
        let d = eigh(&h).unwrap();
        let z = C64::new(0.3, 0.7);
        let g = resolvent(&d, z).unwrap();
        for (i, &l) in [-1.0, 0.5, 2.0].iter().enumerate() {
            assert!((g[(i, i)] - 1.0 / (C64::new(l, 0.0) - z)).norm() < 1e-15);
        }
        assert!(resolvent(&d, C64::new(0.3, 0.0)).is_err());
    }

    #[test]
    fn abs_resolvent_matches_spectral_modulus() {
        let h = small_hermitian(24);
        let d = eigh(&h).unwrap();
        for &(e, eta) in &[(0.1, 0.05), (-0.7, 0.3), (1.5, 1.0)] {
            let r = abs_resolvent_integral(&d, e, eta, &QuadConfig::default()).unwrap();
            let z = C64::new(e, eta);
            let exact: Vec<C64> = d.eigenvalues.iter().map(|&l| C64::new(1.0 / (C64::new(l, 0.0) - z).norm(), 0.0)).collect();
            let m = d.apply_diag(&exact);
            let diff = &r.matrix - &m;
            assert!(op_norm(diff.as_ref()) <= 1e-8 * op_norm(m.as_ref()));
        }
    }

    #[test]
    fn truncation_is_monotone() {
        let h = small_hermitian(10);
        let d = eigh(&h).unwrap();
        let mut q = QuadConfig::default();
        let full = abs_resolvent_integral(&d, 0.2, 0.1, &q).unwrap();
        q.x_max = Some(full.x_max * 2.0);
        let doubled = abs_resolvent_integral(&d, 0.2, 0.1, &q).unwrap();
        for (a, b) in full.weights.iter().zip(&doubled.weights) {
            assert!((a - b).abs() <= 1e-10 * b);
            assert!(a <= b);
        }
    }
}
