//! Deterministic approximations of resolvent chains and the stability quantities that
//! control them: beta, beta*, the linear term, the control parameter gamma-hat, the inverse
//! of the two-body stability operator, M_12^A, the three-resolvent approximation and
//! regular observables.
//!
//! M_l = M^{D_l}(z_l) is diagonal in the eigenbasis of D_l. Traces of products of such
//! matrices are contracted through the overlap |U_1* U_2|^2 when the bases differ, so no
//! N x N product is formed unless the result itself is a matrix.

use faer::MatRef;
use num_complex::Complex64 as C64;
use serde::Serialize;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::matrix_core::{frobenius_norm, normalized_trace, op_norm, trace_product, CMat};
use crate::mde::{m_diag, solve_mde_from, Basis, Deformation, MdeConfig, MdeSolution};

/// Height used in place of the real axis.
pub const REAL_AXIS_ETA: f64 = 1e-7;
/// Denominators below this are treated as degenerate.
const DEGENERATE: f64 = 1e-14;

/// nu = (z, D) with the MDE solved.
#[derive(Clone, Debug)]
pub struct SpectralPair {
    pub z: C64,
    pub d: Arc<Deformation>,
    pub sol: MdeSolution,
    m: Vec<C64>,
}

impl SpectralPair {
    pub fn new(d: Arc<Deformation>, z: C64, cfg: &MdeConfig) -> Result<Self> {
        Self::with_guess(d, z, None, cfg)
    }

    pub fn with_guess(d: Arc<Deformation>, z: C64, guess: Option<C64>, cfg: &MdeConfig) -> Result<Self> {
        let sol = solve_mde_from(&d, z, guess, cfg)?;
        Ok(Self::from_solution(d, sol))
    }

    /// E + i0, represented by E + i * REAL_AXIS_ETA.
    pub fn at_real_energy(d: Arc<Deformation>, e: f64, guess: Option<C64>, cfg: &MdeConfig) -> Result<Self> {
        Self::with_guess(d, C64::new(e, REAL_AXIS_ETA), guess, cfg)
    }

    pub fn from_solution(d: Arc<Deformation>, sol: MdeSolution) -> Self {
        let m = m_diag(d.eigenvalues(), sol.z, sol.m);
        Self { z: sol.z, d, sol, m }
    }

    /// nu-bar: z conjugated, M replaced by M*.
    pub fn conj(&self) -> Self {
        Self {
            z: self.z.conj(),
            d: self.d.clone(),
            sol: self.sol.conj(),
            m: self.m.iter().map(|v| v.conj()).collect(),
        }
    }

    pub fn n(&self) -> usize {
        self.m.len()
    }

    pub fn e(&self) -> f64 {
        self.z.re
    }

    /// |Im z|.
    pub fn eta(&self) -> f64 {
        self.z.im.abs()
    }

    pub fn rho(&self) -> f64 {
        self.sol.rho
    }

    pub fn m(&self) -> C64 {
        self.sol.m
    }

    /// Eigenvalues of M in the eigenbasis of D.
    pub fn m_diag(&self) -> &[C64] {
        &self.m
    }

    pub fn basis(&self) -> &Basis {
        self.d.basis()
    }

    pub fn m_matrix(&self) -> CMat {
        basis_diag_matrix(self.d.basis(), &self.m)
    }
}

/// U diag(v) U*.
pub fn basis_diag_matrix(basis: &Basis, v: &[C64]) -> CMat {
    let n = v.len();
    match basis {
        Basis::Identity => CMat::from_fn(n, n, |i, j| if i == j { v[i] } else { C64::new(0.0, 0.0) }),
        Basis::Unitary(u) => crate::matrix_core::spectral_apply(u.as_ref().as_ref(), v),
    }
}

/// U diag(v) U* X.
pub fn mul_left(basis: &Basis, v: &[C64], x: MatRef<'_, C64>) -> CMat {
    let n = x.nrows();
    match basis {
        Basis::Identity => CMat::from_fn(n, x.ncols(), |i, j| v[i] * x[(i, j)]),
        Basis::Unitary(u) => {
            let u = u.as_ref().as_ref();
            let y = u.adjoint() * x;
            let y = CMat::from_fn(n, x.ncols(), |i, j| v[i] * y[(i, j)]);
            u * &y
        }
    }
}

/// X U diag(v) U*.
pub fn mul_right(x: MatRef<'_, C64>, basis: &Basis, v: &[C64]) -> CMat {
    let n = x.ncols();
    match basis {
        Basis::Identity => CMat::from_fn(x.nrows(), n, |i, j| x[(i, j)] * v[j]),
        Basis::Unitary(u) => {
            let u = u.as_ref().as_ref();
            let y = x * u;
            let y = CMat::from_fn(x.nrows(), n, |i, j| y[(i, j)] * v[j]);
            &y * u.adjoint()
        }
    }
}

/// <U_a diag(a) U_a* U_b diag(b) U_b*>.
pub fn trace2(basis_a: &Basis, a: &[C64], basis_b: &Basis, b: &[C64]) -> C64 {
    let n = a.len();
    if basis_a.same_as(basis_b) {
        let s: C64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        return s / n as f64;
    }
    // <A B> = (1/N) sum_ij a_i |Q_ij|^2 b_j with Q = U_a* U_b
    let q = match (basis_a, basis_b) {
        (Basis::Identity, Basis::Unitary(ub)) => ub.as_ref().clone(),
        (Basis::Unitary(ua), Basis::Identity) => ua.as_ref().adjoint().to_owned(),
        (Basis::Unitary(ua), Basis::Unitary(ub)) => ua.as_ref().adjoint() * ub.as_ref(),
        _ => unreachable!(),
    };
    let mut s = C64::new(0.0, 0.0);
    for j in 0..n {
        let mut col = C64::new(0.0, 0.0);
        for i in 0..n {
            col += a[i] * q[(i, j)].norm_sqr();
        }
        s += col * b[j];
    }
    s / n as f64
}

fn real_diag(d: &Deformation) -> Vec<C64> {
    d.eigenvalues().iter().map(|&x| C64::new(x, 0.0)).collect()
}

/// <M_1 M_2>.
pub fn m1m2_trace(nu1: &SpectralPair, nu2: &SpectralPair) -> C64 {
    trace2(nu1.basis(), &nu1.m, nu2.basis(), &nu2.m)
}

/// beta = |1 - <M_1 M_2>|.
pub fn beta(nu1: &SpectralPair, nu2: &SpectralPair) -> f64 {
    (1.0 - m1m2_trace(nu1, nu2)).norm()
}

/// beta* = beta(z1, z2) min beta(z1, conj z2).
pub fn beta_star(nu1: &SpectralPair, nu2: &SpectralPair) -> f64 {
    beta(nu1, nu2).min(beta(nu1, &nu2.conj()))
}

/// <(D_1 - D_2)^2>.
pub fn delta2(d1: &Deformation, d2: &Deformation) -> f64 {
    let a = real_diag(d1);
    let b = real_diag(d2);
    let sq = |v: &[C64]| v.iter().map(|x| x.re * x.re).sum::<f64>() / v.len() as f64;
    let cross = trace2(d1.basis(), &a, d2.basis(), &b).re;
    (sq(&a) + sq(&b) - 2.0 * cross).max(0.0)
}

/// <M_1 (D_1 - D_2) M_2>, using that M_l commutes with D_l.
fn m_dd_m(nu1: &SpectralPair, nu2: &SpectralPair) -> C64 {
    let md1: Vec<C64> = nu1.m.iter().zip(nu1.d.eigenvalues()).map(|(m, d)| m * d).collect();
    let md2: Vec<C64> = nu2.m.iter().zip(nu2.d.eigenvalues()).map(|(m, d)| m * d).collect();
    trace2(nu1.basis(), &md1, nu2.basis(), &nu2.m) - trace2(nu1.basis(), &nu1.m, nu2.basis(), &md2)
}

/// LT in [0, 1]. For Im z1 Im z2 > 0 the second argument is reflected (z2 -> conj z2,
/// M2 -> M2*), so the value is invariant under conjugating either argument.
pub fn linear_term(nu1: &SpectralPair, nu2: &SpectralPair) -> f64 {
    let reflected;
    let nu2 = if nu1.z.im * nu2.z.im > 0.0 {
        reflected = nu2.conj();
        &reflected
    } else {
        nu2
    };
    let den = m1m2_trace(nu1, nu2);
    if den.norm() < DEGENERATE {
        return 1.0;
    }
    let v = nu1.z - nu2.z - m_dd_m(nu1, nu2) / den;
    v.norm().min(1.0)
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct ControlParams {
    pub beta: f64,
    pub beta_star: f64,
    pub delta2: f64,
    pub lt: f64,
    pub e_diff2: f64,
    pub eta_rho_1: f64,
    pub eta_rho_2: f64,
    pub gamma_hat: f64,
    pub eta_star: f64,
    pub ell: f64,
}

fn eta_over_rho(nu: &SpectralPair) -> f64 {
    if nu.rho() > 0.0 {
        (nu.eta() / nu.rho()).min(1.0)
    } else {
        1.0
    }
}

pub fn gamma_hat(nu1: &SpectralPair, nu2: &SpectralPair) -> ControlParams {
    let delta2 = delta2(&nu1.d, &nu2.d);
    let lt = linear_term(nu1, nu2);
    let e_diff2 = (nu1.e() - nu2.e()).powi(2).min(1.0);
    let eta_rho_1 = eta_over_rho(nu1);
    let eta_rho_2 = eta_over_rho(nu2);
    ControlParams {
        beta: beta(nu1, nu2),
        beta_star: beta_star(nu1, nu2),
        delta2,
        lt,
        e_diff2,
        eta_rho_1,
        eta_rho_2,
        gamma_hat: delta2 + lt + e_diff2 + eta_rho_1 + eta_rho_2,
        eta_star: nu1.eta().min(nu2.eta()).min(1.0),
        ell: (nu1.eta() * nu1.rho()).min(nu2.eta() * nu2.rho()),
    }
}

/// M_1 M_2 as a full matrix.
pub fn m1m2_matrix(nu1: &SpectralPair, nu2: &SpectralPair) -> CMat {
    let m2 = nu2.m_matrix();
    mul_left(nu1.basis(), &nu1.m, m2.as_ref())
}

fn check_beta(nu1: &SpectralPair, nu2: &SpectralPair) -> Result<C64> {
    let x = m1m2_trace(nu1, nu2);
    let b = (1.0 - x).norm();
    if b <= 1e-13 {
        return Err(Error::SingularStability(b));
    }
    Ok(x)
}

/// B_12[X] = X - <X> M_1 M_2.
pub fn stability_apply(nu1: &SpectralPair, nu2: &SpectralPair, x: MatRef<'_, C64>) -> CMat {
    let t = normalized_trace(x);
    let mm = m1m2_matrix(nu1, nu2);
    CMat::from_fn(x.nrows(), x.ncols(), |i, j| x[(i, j)] - t * mm[(i, j)])
}

/// B_12^{-1}[X] = X + <X>/(1 - <M_1 M_2>) M_1 M_2, verified by a round trip.
pub fn stability_inverse(nu1: &SpectralPair, nu2: &SpectralPair, x: MatRef<'_, C64>) -> Result<CMat> {
    let tr = check_beta(nu1, nu2)?;
    let mm = m1m2_matrix(nu1, nu2);
    let c = normalized_trace(x) / (1.0 - tr);
    let y = CMat::from_fn(x.nrows(), x.ncols(), |i, j| x[(i, j)] + c * mm[(i, j)]);
    // round trip: B[y] = y - <y> M1 M2
    let ty = normalized_trace(y.as_ref());
    let mut err: f64 = 0.0;
    for j in 0..x.ncols() {
        for i in 0..x.nrows() {
            err = err.max((y[(i, j)] - ty * mm[(i, j)] - x[(i, j)]).norm());
        }
    }
    let scale = x.nrows() as f64 * max_entry(x).max(max_entry(y.as_ref())).max(f64::MIN_POSITIVE);
    if err > 1e-10 * scale {
        return Err(Error::StabilityRoundTrip(err / scale));
    }
    Ok(y)
}

fn max_entry(x: MatRef<'_, C64>) -> f64 {
    let mut m: f64 = 0.0;
    for j in 0..x.ncols() {
        for i in 0..x.nrows() {
            m = m.max(x[(i, j)].norm());
        }
    }
    m
}

/// M_1 A M_2.
pub fn m_a_m(nu1: &SpectralPair, a: MatRef<'_, C64>, nu2: &SpectralPair) -> CMat {
    let left = mul_left(nu1.basis(), &nu1.m, a);
    mul_right(left.as_ref(), nu2.basis(), &nu2.m)
}

/// M^A_12 = M_1 A M_2 + <M_1 A M_2>/(1 - <M_1 M_2>) M_1 M_2.
pub fn m2_det(nu1: &SpectralPair, nu2: &SpectralPair, a: MatRef<'_, C64>) -> Result<CMat> {
    let tr = check_beta(nu1, nu2)?;
    let mam = m_a_m(nu1, a, nu2);
    let c = normalized_trace(mam.as_ref()) / (1.0 - tr);
    let mm = m1m2_matrix(nu1, nu2);
    Ok(CMat::from_fn(mam.nrows(), mam.ncols(), |i, j| mam[(i, j)] + c * mm[(i, j)]))
}

/// <M^A_12> = <M_1 A M_2>/(1 - <M_1 M_2>) without forming matrices.
pub fn m2_det_trace(nu1: &SpectralPair, nu2: &SpectralPair, a: MatRef<'_, C64>) -> Result<C64> {
    let tr = check_beta(nu1, nu2)?;
    let m2m1 = m2m1_matrix_trace_weights(nu1, nu2);
    Ok(trace_product(m2m1.as_ref(), a) / (1.0 - tr))
}

/// M_2 M_1, the matrix whose trace against A gives <M_1 A M_2>.
fn m2m1_matrix_trace_weights(nu1: &SpectralPair, nu2: &SpectralPair) -> CMat {
    let m1 = nu1.m_matrix();
    mul_left(nu2.basis(), &nu2.m, m1.as_ref())
}

/// <M^{B_1}_12 B_2>.
pub fn m2_det_pair_trace(nu1: &SpectralPair, nu2: &SpectralPair, b1: MatRef<'_, C64>, b2: MatRef<'_, C64>) -> Result<C64> {
    let m = m2_det(nu1, nu2, b1)?;
    Ok(trace_product(m.as_ref(), b2))
}

/// M^{B_1,B_2}_123 = B_13^{-1}[M_1 B_1 M^{B_2}_23 + <M^{B_1}_12> M_1 M^{B_2}_23].
pub fn m3_det(
    nu1: &SpectralPair,
    nu2: &SpectralPair,
    nu3: &SpectralPair,
    b1: MatRef<'_, C64>,
    b2: MatRef<'_, C64>,
) -> Result<CMat> {
    check_beta(nu1, nu2)?;
    check_beta(nu2, nu3)?;
    let inner = m2_det(nu2, nu3, b2)?;
    let m12_tr = normalized_trace(m2_det(nu1, nu2, b1)?.as_ref());
    let b1_inner = b1 * &inner;
    let first = mul_left(nu1.basis(), &nu1.m, b1_inner.as_ref());
    let second = mul_left(nu1.basis(), &nu1.m, inner.as_ref());
    let x = CMat::from_fn(first.nrows(), first.ncols(), |i, j| first[(i, j)] + m12_tr * second[(i, j)]);
    stability_inverse(nu1, nu3, x.as_ref())
}

/// The reflected second argument used by V: same |Im z2|, opposite half-plane to z1.
fn reflected_for_v(nu1: &SpectralPair, nu2: &SpectralPair) -> SpectralPair {
    // s = -sgn(Im z1 Im z2); z2' = Re z2 + i s Im z2
    if nu1.z.im * nu2.z.im > 0.0 {
        nu2.conj()
    } else {
        nu2.clone()
    }
}

/// V = M_2' M_1 / <M_1 M_2'>.
pub fn v_matrix(nu1: &SpectralPair, nu2: &SpectralPair) -> Result<CMat> {
    let nu2p = reflected_for_v(nu1, nu2);
    let den = m1m2_trace(nu1, &nu2p);
    if den.norm() < 1e-13 {
        return Err(Error::InvalidParameter(format!("degenerate V denominator {den}")));
    }
    let m1 = nu1.m_matrix();
    let v = mul_left(nu2p.basis(), &nu2p.m, m1.as_ref());
    Ok(CMat::from_fn(v.nrows(), v.ncols(), |i, j| v[(i, j)] / den))
}

/// <V A>. Uses only the diagonal of A when both deformations are diagonal.
pub fn v_trace(nu1: &SpectralPair, nu2: &SpectralPair, a: MatRef<'_, C64>) -> Result<C64> {
    let nu2p = reflected_for_v(nu1, nu2);
    let den = m1m2_trace(nu1, &nu2p);
    if den.norm() < 1e-13 {
        return Err(Error::InvalidParameter(format!("degenerate V denominator {den}")));
    }
    if nu1.basis().is_identity() && nu2p.basis().is_identity() {
        let n = nu1.n();
        let s: C64 = (0..n).map(|i| nu2p.m[i] * nu1.m[i] * a[(i, i)]).sum();
        return Ok(s / n as f64 / den);
    }
    let v = v_matrix(nu1, nu2)?;
    Ok(trace_product(v.as_ref(), a))
}

/// Cubic smoothstep bump: 1 on |x| <= delta/2, 0 on |x| >= delta.
pub fn chi(x: f64, delta: f64) -> f64 {
    let ax = x.abs();
    let h = 0.5 * delta;
    if ax <= h {
        1.0
    } else if ax >= delta {
        0.0
    } else {
        let u = (ax - h) / h;
        1.0 - (3.0 * u * u - 2.0 * u * u * u)
    }
}

/// phi = chi(Re z1 - Re z2) chi(Delta^2) chi(Im z1) chi(Im z2).
pub fn phi_cutoff(nu1: &SpectralPair, nu2: &SpectralPair, delta: f64) -> f64 {
    phi_from(nu1.e() - nu2.e(), delta2(&nu1.d, &nu2.d), nu1.z.im, nu2.z.im, delta)
}

pub fn phi_from(de: f64, delta2: f64, im1: f64, im2: f64, delta: f64) -> f64 {
    chi(de, delta) * chi(delta2, delta) * chi(im1, delta) * chi(im2, delta)
}

#[derive(Clone, Debug)]
pub struct RegularizedObservable {
    pub a: CMat,
    pub a_ring: CMat,
    pub phi: f64,
    pub v_a: C64,
    pub v: CMat,
    pub delta: f64,
}

/// A-ring = A - phi <V A> I.
pub fn regularize(a: MatRef<'_, C64>, nu1: &SpectralPair, nu2: &SpectralPair, delta: f64) -> Result<RegularizedObservable> {
    if !(delta > 0.0) {
        return Err(Error::InvalidParameter(format!("delta must be positive, got {delta}")));
    }
    let v = v_matrix(nu1, nu2)?;
    let v_a = trace_product(v.as_ref(), a);
    let phi = phi_cutoff(nu1, nu2, delta);
    let shift = phi * v_a;
    let a_ring = CMat::from_fn(a.nrows(), a.ncols(), |i, j| if i == j { a[(i, j)] - shift } else { a[(i, j)] });
    Ok(RegularizedObservable { a: a.to_owned(), a_ring, phi, v_a, v, delta })
}

/// phi <V A>, the scalar removed by the regularisation.
pub fn regular_shift(a: MatRef<'_, C64>, nu1: &SpectralPair, nu2: &SpectralPair, delta: f64) -> Result<C64> {
    let phi = phi_cutoff(nu1, nu2, delta);
    if phi == 0.0 {
        return Ok(C64::new(0.0, 0.0));
    }
    Ok(phi * v_trace(nu1, nu2, a)?)
}

/// Largest of ||A-ring^{x} - A-ring^{nu1,nu2}|| / (||A|| sqrt(gamma-hat(z1', z2'))) over the
/// four re-orderings x in {(nu1',nu2'), (conj nu1',nu2'), (nu2',nu1'), (conj nu2',nu1')},
/// where z' = z + i sgn(Im z) y moves away from the axis.
pub fn reg_comparison_gap(
    a: MatRef<'_, C64>,
    nu1: &SpectralPair,
    nu2: &SpectralPair,
    y1: f64,
    y2: f64,
    delta: f64,
    cfg: &MdeConfig,
) -> Result<f64> {
    if y1 < 0.0 || y2 < 0.0 {
        return Err(Error::InvalidParameter("y must be nonnegative".into()));
    }
    let lift = |nu: &SpectralPair, y: f64| -> Result<SpectralPair> {
        if y == 0.0 {
            return Ok(nu.clone());
        }
        let z = nu.z + C64::new(0.0, nu.z.im.signum() * y);
        SpectralPair::with_guess(nu.d.clone(), z, Some(nu.m()), cfg)
    };
    let p1 = lift(nu1, y1)?;
    let p2 = lift(nu2, y2)?;
    let base = regular_shift(a, nu1, nu2, delta)?;
    let norm_a = op_norm(a);
    let g = gamma_hat(&p1, &p2).gamma_hat;
    let combos = [(p1.clone(), p2.clone()), (p1.conj(), p2.clone()), (p2.clone(), p1.clone()), (p2.conj(), p1.clone())];
    let mut worst: f64 = 0.0;
    for (x, y) in &combos {
        // the difference of two regularisations is a multiple of the identity
        let s = regular_shift(a, x, y, delta)?;
        worst = worst.max((s - base).norm());
    }
    if norm_a == 0.0 {
        return Ok(0.0);
    }
    Ok(worst / (norm_a * g.sqrt()))
}

/// Relative Frobenius distance, used by tests and checks.
pub fn rel_diff(a: MatRef<'_, C64>, b: MatRef<'_, C64>) -> f64 {
    let d = a - b;
    frobenius_norm(d.as_ref()) / frobenius_norm(b).max(f64::MIN_POSITIVE)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix_core::{identity, max_abs_diff};
    use crate::mde::DeformationProfile;
    use proptest::prelude::*;

    fn pair(d: &Arc<Deformation>, z: C64) -> SpectralPair {
        SpectralPair::new(d.clone(), z, &MdeConfig::default()).unwrap()
    }

    fn zero(n: usize) -> Arc<Deformation> {
        Arc::new(Deformation::zero(n))
    }

    fn rotated(n: usize, a: f64) -> Arc<Deformation> {
        // real rotation mixing index k with n-1-k
        let mut u = CMat::zeros(n, n);
        let c = 0.6f64;
        let s = 0.8f64;
        for k in 0..n / 2 {
            let l = n - 1 - k;
            u[(k, k)] = C64::new(c, 0.0);
            u[(l, k)] = C64::new(s, 0.0);
            u[(k, l)] = C64::new(-s, 0.0);
            u[(l, l)] = C64::new(c, 0.0);
        }
        if n % 2 == 1 {
            u[(n / 2, n / 2)] = C64::new(1.0, 0.0);
        }
        let d = DeformationProfile::Equispaced { a }.build(n).unwrap();
        Arc::new(Deformation::with_basis(d.eigenvalues().to_vec(), Basis::Unitary(Arc::new(u)), None).unwrap())
    }

    fn test_matrix(n: usize, seed: u64) -> CMat {
        CMat::from_fn(n, n, |i, j| {
            let t = (i * 31 + j * 17) as f64 + seed as f64 * 0.37;
            C64::new((t * 0.13).sin(), (t * 0.29).cos() * 0.5)
        })
    }

    #[test]
    fn beta_semicircle_values() {
        let d = zero(4);
        let nu = pair(&d, C64::new(0.0, 1.0));
        assert!((beta(&nu, &nu) - 1.381_966_011_250_105).abs() < 1e-12);
        assert!((beta(&nu, &nu.conj()) - 0.618_033_988_749_895).abs() < 1e-12);
        assert!((beta_star(&nu, &nu) - 0.618_033_988_749_895).abs() < 1e-12);
        let far = pair(&d, C64::new(0.0, 100.0));
        assert!((beta(&far, &far) - 1.0).abs() < 0.02);
    }

    #[test]
    fn lt_branches() {
        let d = Arc::new(DeformationProfile::TwoPoint { a: 0.4 }.build(8).unwrap());
        let nu = pair(&d, C64::new(0.3, 0.05));
        assert!((linear_term(&nu, &nu) - 0.1).abs() < 1e-12);
        assert!((linear_term(&nu, &nu.conj()) - 0.1).abs() < 1e-12);
        let big = pair(&d, C64::new(0.3, 0.7));
        assert_eq!(linear_term(&big, &big), 1.0);
    }

    #[test]
    fn gamma_hat_components() {
        let d = zero(4);
        let nu = pair(&d, C64::new(0.2, 0.01));
        let c = gamma_hat(&nu, &nu);
        let er = 0.01 / nu.rho();
        assert!((c.gamma_hat - (0.02 + 2.0 * er)).abs() < 1e-12);
        assert!(c.ell <= c.eta_star);
        let d1 = Arc::new(Deformation::diagonal(vec![-1.0, 1.0]).unwrap());
        let d2 = Arc::new(Deformation::diagonal(vec![1.0, -1.0]).unwrap());
        // D2 = -D1 written with permuted eigenvectors
        assert!((delta2(&d1, &d2) - 4.0).abs() < 1e-12);
    }

    #[test]
    fn stability_inverse_examples() {
        let d = rotated(6, 0.8);
        let nu1 = pair(&d, C64::new(0.1, 0.3));
        let nu2 = pair(&zero(6), C64::new(-0.2, -0.4));
        let mut x = test_matrix(6, 1);
        let t = normalized_trace(x.as_ref());
        for i in 0..6 {
            x[(i, i)] -= t;
        }
        let y = stability_inverse(&nu1, &nu2, x.as_ref()).unwrap();
        assert!(max_abs_diff(y.as_ref(), x.as_ref()) < 1e-14);
        let mm = m1m2_matrix(&nu1, &nu2);
        let y = stability_inverse(&nu1, &nu2, mm.as_ref()).unwrap();
        let c = 1.0 / (1.0 - m1m2_trace(&nu1, &nu2));
        let expect = CMat::from_fn(6, 6, |i, j| mm[(i, j)] * c);
        assert!(max_abs_diff(y.as_ref(), expect.as_ref()) < 1e-13);
        let x = test_matrix(6, 2);
        let y = stability_inverse(&nu1, &nu2, x.as_ref()).unwrap();
        let back = stability_apply(&nu1, &nu2, y.as_ref());
        assert!(rel_diff(back.as_ref(), x.as_ref()) < 1e-11);
    }

    #[test]
    fn ward_identity() {
        let d = Arc::new(DeformationProfile::TwoPoint { a: 0.5 }.build(10).unwrap());
        let nu = pair(&d, C64::new(0.3, 0.02));
        let m = m2_det(&nu, &nu.conj(), identity(10).as_ref()).unwrap();
        let im: Vec<C64> = nu.m_diag().iter().map(|v| C64::new(v.im / 0.02, 0.0)).collect();
        let expect = basis_diag_matrix(nu.basis(), &im);
        assert!(op_norm((&m - &expect).as_ref()) <= 1e-10 * op_norm(expect.as_ref()));
    }

    #[test]
    fn scalar_m2_and_m3() {
        // N = 1: everything is scalar algebra
        let d = zero(1);
        let z1 = C64::new(0.3, 0.5);
        let z2 = C64::new(-0.1, -0.7);
        let z3 = C64::new(0.6, 0.2);
        let (n1, n2, n3) = (pair(&d, z1), pair(&d, z2), pair(&d, z3));
        let (m1, m2, m3) = (n1.m(), n2.m(), n3.m());
        let a = C64::new(1.7, -0.4);
        let b = C64::new(-0.3, 0.9);
        let am = CMat::from_fn(1, 1, |_, _| a);
        let bm = CMat::from_fn(1, 1, |_, _| b);
        let got = m2_det(&n1, &n2, am.as_ref()).unwrap()[(0, 0)];
        let expect = m1 * a * m2 / (1.0 - m1 * m2);
        assert!((got - expect).norm() < 1e-13);
        // scalar oracle for three resolvents
        let m23 = m2 * b * m3 / (1.0 - m2 * m3);
        let m12 = m1 * a * m2 / (1.0 - m1 * m2);
        let x = m1 * a * m23 + m12 * m1 * m23;
        let expect3 = x / (1.0 - m1 * m3);
        let got3 = m3_det(&n1, &n2, &n3, am.as_ref(), bm.as_ref()).unwrap()[(0, 0)];
        assert!((got3 - expect3).norm() < 1e-12);
    }

    #[test]
    fn v_special_cases() {
        let z = zero(5);
        let nu1 = pair(&z, C64::new(0.2, 0.1));
        let nu2 = pair(&z, C64::new(-0.5, 0.3));
        let v = v_matrix(&nu1, &nu2).unwrap();
        assert!(max_abs_diff(v.as_ref(), identity(5).as_ref()) < 1e-13);
        let d = Arc::new(DeformationProfile::Equispaced { a: 0.9 }.build(5).unwrap());
        let nu = SpectralPair::at_real_energy(d.clone(), 0.4, None, &MdeConfig::default()).unwrap();
        let v = v_matrix(&nu, &nu).unwrap();
        let im: Vec<f64> = nu.m_diag().iter().map(|m| m.im).collect();
        let avg = im.iter().sum::<f64>() / 5.0;
        for i in 0..5 {
            assert!((v[(i, i)] - C64::new(im[i] / avg, 0.0)).norm() < 1e-6);
        }
        assert!((normalized_trace(v.as_ref()) - 1.0).norm() < 1e-12);
    }

    #[test]
    fn phi_examples() {
        assert_eq!(chi(0.0, 0.1), 1.0);
        assert_eq!(chi(0.2, 0.1), 0.0);
        assert!((chi(0.075, 0.1) - 0.5).abs() < 1e-15);
        assert!((phi_from(0.075, 0.0, 0.0, 0.0, 0.1) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn regularize_examples() {
        let d = Arc::new(DeformationProfile::TwoPoint { a: 0.3 }.build(6).unwrap());
        let nu = SpectralPair::at_real_energy(d.clone(), 0.1, None, &MdeConfig::default()).unwrap();
        let r = regularize(identity(6).as_ref(), &nu, &nu, 0.1).unwrap();
        assert_eq!(r.phi, 1.0);
        assert!(frobenius_norm(r.a_ring.as_ref()) < 1e-12);
        let a = test_matrix(6, 3);
        let r = regularize(a.as_ref(), &nu, &nu, 0.1).unwrap();
        assert!(trace_product(r.v.as_ref(), r.a_ring.as_ref()).norm() <= 1e-10 * op_norm(a.as_ref()));
        let far = SpectralPair::at_real_energy(d, 1.0, None, &MdeConfig::default()).unwrap();
        let r = regularize(a.as_ref(), &nu, &far, 0.1).unwrap();
        assert_eq!(r.phi, 0.0);
        assert!(max_abs_diff(r.a_ring.as_ref(), a.as_ref()) == 0.0);
        let g = reg_comparison_gap(a.as_ref(), &nu, &nu, 0.0, 0.0, 0.1, &MdeConfig::default()).unwrap();
        assert!(g < 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]
        #[test]
        fn lt_reflection_symmetry(e1 in -1.5f64..1.5, e2 in -1.5f64..1.5, h1 in 0.01f64..0.5, h2 in 0.01f64..0.5, a in 0.0f64..0.6) {
            let d1 = Arc::new(DeformationProfile::TwoPoint { a }.build(6).unwrap());
            let d2 = rotated(6, 0.5);
            let n1 = pair(&d1, C64::new(e1, h1));
            let n2 = pair(&d2, C64::new(e2, h2));
            let l = linear_term(&n1, &n2);
            prop_assert!((l - linear_term(&n1.conj(), &n2)).abs() < 1e-12);
            prop_assert!((l - linear_term(&n1, &n2.conj())).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&l));
            let c = gamma_hat(&n1, &n2);
            prop_assert!((c.gamma_hat - gamma_hat(&n1.conj(), &n2).gamma_hat).abs() < 1e-12);
            prop_assert!((beta_star(&n1, &n2) - beta_star(&n1, &n2.conj())).abs() < 1e-15);
        }

        #[test]
        fn m2_is_linear_and_trace_identity(e in -1.0f64..1.0, h in 0.05f64..1.0, s in -3.0f64..3.0) {
            let d = rotated(5, 0.7);
            let n1 = pair(&d, C64::new(e, h));
            let n2 = pair(&zero(5), C64::new(-e, -h * 0.5));
            let a = test_matrix(5, 4);
            let b = test_matrix(5, 5);
            let comb = CMat::from_fn(5, 5, |i, j| a[(i, j)] * s + b[(i, j)]);
            let lhs = m2_det(&n1, &n2, comb.as_ref()).unwrap();
            let ma = m2_det(&n1, &n2, a.as_ref()).unwrap();
            let mb = m2_det(&n1, &n2, b.as_ref()).unwrap();
            let rhs = CMat::from_fn(5, 5, |i, j| ma[(i, j)] * s + mb[(i, j)]);
            prop_assert!(max_abs_diff(lhs.as_ref(), rhs.as_ref()) < 1e-11 * (1.0 + s.abs()) * 10.0);
            let x = m1m2_trace(&n1, &n2);
            let mi = m2_det(&n1, &n2, identity(5).as_ref()).unwrap();
            prop_assert!((normalized_trace(mi.as_ref()) - x / (1.0 - x)).norm() < 1e-12);
            let t = m2_det_trace(&n1, &n2, a.as_ref()).unwrap();
            prop_assert!((t - normalized_trace(ma.as_ref())).norm() < 1e-12);
            let v = v_matrix(&n1, &n2).unwrap();
            prop_assert!((normalized_trace(v.as_ref()) - 1.0).norm() < 1e-12);
            let vt = v_trace(&n1, &n2, a.as_ref()).unwrap();
            prop_assert!((vt - trace_product(v.as_ref(), a.as_ref())).norm() < 1e-12);
        }
    }
}
