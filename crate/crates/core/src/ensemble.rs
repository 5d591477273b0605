//! Deformed Wigner ensembles: sampling, eigendata, eigenvector overlaps and resolvent chains
//! evaluated in eigenbases.

use faer::MatRef;
use num_complex::Complex64 as C64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::matrix_core::{eigh, CMat, HermitianMatrix, SpectralDecomposition};
use crate::mde::Deformation;

/// Stream purposes. Keeping them distinct decorrelates the random inputs of one trial.
pub mod purpose {
    pub const WIGNER: u64 = 1;
    pub const OU: u64 = 2;
    pub const VECTORS: u64 = 3;
    pub const OBSERVABLE: u64 = 4;
}

/// Counter-based ChaCha stream keyed by (master seed, trial, purpose).
pub fn rng_stream(master: u64, trial: u64, purpose: u64) -> ChaCha20Rng {
    let mut seed = [0u8; 32];
    seed[..8].copy_from_slice(&master.to_le_bytes());
    seed[8..16].copy_from_slice(&trial.to_le_bytes());
    seed[16..24].copy_from_slice(&purpose.to_le_bytes());
    seed[24..].copy_from_slice(b"dwm-rng\0");
    ChaCha20Rng::from_seed(seed)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntryDist {
    Gaussian,
    Rademacher,
    Uniform,
}

impl FromStr for EntryDist {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(Self::Gaussian),
            "rademacher" => Ok(Self::Rademacher),
            "uniform" => Ok(Self::Uniform),
            other => Err(Error::InvalidParameter(format!("unknown entry distribution '{other}'"))),
        }
    }
}

impl fmt::Display for EntryDist {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Gaussian => "gaussian",
            Self::Rademacher => "rademacher",
            Self::Uniform => "uniform",
        })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct WignerSpec {
    pub n: usize,
    /// 1 (real symmetric) or 2 (complex Hermitian).
    pub beta_sym: u8,
    pub dist: EntryDist,
    pub seed: u64,
}

/// A real variable with mean 0 and variance 1.
fn unit_real<R: Rng>(dist: EntryDist, rng: &mut R) -> f64 {
    match dist {
        EntryDist::Gaussian => rng.sample(StandardNormal),
        EntryDist::Rademacher => {
            if rng.random::<bool>() {
                1.0
            } else {
                -1.0
            }
        }
        EntryDist::Uniform => (rng.random::<f64>() * 2.0 - 1.0) * 3f64.sqrt(),
    }
}

fn check_sym(beta_sym: u8) -> Result<()> {
    if beta_sym == 1 || beta_sym == 2 {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("beta_sym must be 1 or 2, got {beta_sym}")))
    }
}

/// Wigner matrix with E|w_ab|^2 = 1/N, filled column by column over the upper triangle.
/// Gaussian diagonals follow GOE/GUE (variance 2/N resp. 1/N); other distributions use 1/N.
pub fn sample_wigner_with<R: Rng>(n: usize, beta_sym: u8, dist: EntryDist, rng: &mut R) -> Result<HermitianMatrix> {
    check_sym(beta_sym)?;
    if n < 2 {
        return Err(Error::InvalidParameter(format!("N must be at least 2, got {n}")));
    }
    let s = 1.0 / (n as f64).sqrt();
    let diag_scale = if dist == EntryDist::Gaussian && beta_sym == 1 { 2f64.sqrt() * s } else { s };
    let h = std::f64::consts::FRAC_1_SQRT_2 * s;
    Ok(HermitianMatrix::from_upper(n, |i, j| {
        if i == j {
            C64::new(diag_scale * unit_real(dist, rng), 0.0)
        } else if beta_sym == 1 {
            C64::new(s * unit_real(dist, rng), 0.0)
        } else {
            let re = unit_real(dist, rng);
            let im = unit_real(dist, rng);
            C64::new(h * re, h * im)
        }
    }))
}

pub fn sample_wigner(spec: &WignerSpec) -> Result<HermitianMatrix> {
    let mut rng = rng_stream(spec.seed, 0, purpose::WIGNER);
    sample_wigner_with(spec.n, spec.beta_sym, spec.dist, &mut rng)
}

/// Eigendata of H = W + D (D in its own basis).
pub fn deform_and_solve(w: &HermitianMatrix, d: &Deformation) -> Result<SpectralDecomposition> {
    if w.n() != d.n() {
        return Err(Error::DimensionMismatch { expected: w.n(), got: d.n() });
    }
    let dm = d.to_matrix();
    let wm = w.as_ref();
    let h = HermitianMatrix::new(CMat::from_fn(w.n(), w.n(), |i, j| wm[(i, j)] + dm[(i, j)]))?;
    eigh(&h)
}

#[derive(Clone, Debug)]
pub struct OverlapMatrix {
    /// O_ij = <u_i^1, A u_j^2>.
    pub values: CMat,
    pub left_quantiles: Vec<f64>,
    pub right_quantiles: Vec<f64>,
    pub observable_id: String,
}

impl OverlapMatrix {
    pub fn abs2(&self, i: usize, j: usize) -> f64 {
        self.values[(i, j)].norm_sqr()
    }
}

/// U_1* A U_2, with A = I when `a` is None.
pub fn eigenvector_overlaps(
    dec1: &SpectralDecomposition,
    dec2: &SpectralDecomposition,
    a: Option<MatRef<'_, C64>>,
    left_quantiles: Vec<f64>,
    right_quantiles: Vec<f64>,
    observable_id: &str,
) -> Result<OverlapMatrix> {
    let n = dec1.n();
    if dec2.n() != n {
        return Err(Error::DimensionMismatch { expected: n, got: dec2.n() });
    }
    for q in [&left_quantiles, &right_quantiles] {
        if !q.is_empty() && q.len() != n {
            return Err(Error::DimensionMismatch { expected: n, got: q.len() });
        }
    }
    let values = match a {
        None => dec1.eigenvectors.adjoint() * &dec2.eigenvectors,
        Some(a) => {
            if a.nrows() != n || a.ncols() != n {
                return Err(Error::DimensionMismatch { expected: n, got: a.nrows() });
            }
            let au = a * &dec2.eigenvectors;
            dec1.eigenvectors.adjoint() * &au
        }
    };
    Ok(OverlapMatrix { values, left_quantiles, right_quantiles, observable_id: observable_id.to_string() })
}

fn resolvent_values(eigs: &[f64], z: C64) -> Result<Vec<C64>> {
    if z.im == 0.0 {
        return Err(Error::RealSpectralParameter(z));
    }
    Ok(eigs.iter().map(|&l| 1.0 / (C64::new(l, 0.0) - z)).collect())
}

/// Observables B_1, B_2 moved into the eigenbases of H_1, H_2 once, so that
/// <G_1 B_1 G_2 B_2> costs O(N^2) per pair of spectral parameters.
pub struct ChainKernel {
    n: usize,
    /// P_ij = (U_1* B_1 U_2)_ij (U_2* B_2 U_1)_ji, row-major.
    p: Vec<C64>,
}

impl ChainKernel {
    pub fn new(dec1: &SpectralDecomposition, dec2: &SpectralDecomposition, b1: MatRef<'_, C64>, b2: MatRef<'_, C64>) -> Result<Self> {
        let n = dec1.n();
        if dec2.n() != n || b1.nrows() != n || b2.nrows() != n {
            return Err(Error::DimensionMismatch { expected: n, got: dec2.n() });
        }
        let u1 = dec1.eigenvectors.as_ref();
        let u2 = dec2.eigenvectors.as_ref();
        let t1 = u1.adjoint() * (b1 * u2);
        let t2 = u2.adjoint() * (b2 * u1);
        Ok(Self::from_parts(t1.as_ref(), t2.as_ref()))
    }

    /// From already transformed observables T1 = U_1* B_1 U_2 and T2 = U_2* B_2 U_1.
    pub fn from_parts(t1: MatRef<'_, C64>, t2: MatRef<'_, C64>) -> Self {
        let n = t1.nrows();
        let mut p = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                p.push(t1[(i, j)] * t2[(j, i)]);
            }
        }
        Self { n, p }
    }

    /// From a precomputed row-major kernel.
    pub fn from_raw(n: usize, p: Vec<C64>) -> Self {
        assert_eq!(p.len(), n * n);
        Self { n, p }
    }

    /// (1/N) sum_ij g1_i P_ij g2_j.
    pub fn contract(&self, g1: &[C64], g2: &[C64]) -> C64 {
        let n = self.n;
        let mut s = C64::new(0.0, 0.0);
        for i in 0..n {
            let row = &self.p[i * n..(i + 1) * n];
            let mut r = C64::new(0.0, 0.0);
            for j in 0..n {
                r += row[j] * g2[j];
            }
            s += g1[i] * r;
        }
        s / n as f64
    }

    pub fn avg(&self, eigs1: &[f64], eigs2: &[f64], z1: C64, z2: C64) -> Result<C64> {
        Ok(self.contract(&resolvent_values(eigs1, z1)?, &resolvent_values(eigs2, z2)?))
    }
}

/// <G_1 B_1 G_2 B_2> with G_l = (H_l - z_l)^{-1}.
pub fn resolvent_chain_avg(
    dec1: &SpectralDecomposition,
    dec2: &SpectralDecomposition,
    z1: C64,
    z2: C64,
    b1: MatRef<'_, C64>,
    b2: MatRef<'_, C64>,
) -> Result<C64> {
    ChainKernel::new(dec1, dec2, b1, b2)?.avg(&dec1.eigenvalues, &dec2.eigenvalues, z1, z2)
}

/// Which resolvent closes a three-chain.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ThirdResolvent {
    G1,
    G1Adjoint,
}

/// <x, G_1 B_1 G_2 y>, or <x, G_1 B_1 G_2 B_2 G_1^(*) y> when `b2` is given.
#[allow(clippy::too_many_arguments)]
pub fn resolvent_chain_iso(
    dec1: &SpectralDecomposition,
    dec2: &SpectralDecomposition,
    z1: C64,
    z2: C64,
    b1: MatRef<'_, C64>,
    b2: Option<(MatRef<'_, C64>, ThirdResolvent)>,
    x: &[C64],
    y: &[C64],
) -> Result<C64> {
    let n = dec1.n();
    for v in [x, y] {
        if v.len() != n {
            return Err(Error::DimensionMismatch { expected: n, got: v.len() });
        }
        let norm: f64 = v.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-10 {
            return Err(Error::InvalidParameter(format!("test vector norm {norm} is not 1")));
        }
    }
    let u1 = dec1.eigenvectors.as_ref();
    let u2 = dec2.eigenvectors.as_ref();
    let g1 = resolvent_values(&dec1.eigenvalues, z1)?;
    let g2 = resolvent_values(&dec2.eigenvalues, z2)?;
    let xt = u1.adjoint() * col(x).as_ref();
    let b1t = u1.adjoint() * (b1 * u2);
    // w = G_2 (...) y expressed in the eigenbasis of H_2
    let w: Vec<C64> = match b2 {
        None => {
            let yt = u2.adjoint() * col(y).as_ref();
            (0..n).map(|j| g2[j] * yt[(j, 0)]).collect()
        }
        Some((b2, third)) => {
            let g3: Vec<C64> = match third {
                ThirdResolvent::G1 => g1.clone(),
                ThirdResolvent::G1Adjoint => g1.iter().map(|g| g.conj()).collect(),
            };
            let yt = u1.adjoint() * col(y).as_ref();
            let g3y = CMat::from_fn(n, 1, |k, _| g3[k] * yt[(k, 0)]);
            let b2t = u2.adjoint() * (b2 * u1);
            let inner = &b2t * &g3y;
            (0..n).map(|j| g2[j] * inner[(j, 0)]).collect()
        }
    };
    let bw = &b1t * col(&w).as_ref();
    Ok((0..n).map(|i| xt[(i, 0)].conj() * g1[i] * bw[(i, 0)]).sum())
}

fn col(v: &[C64]) -> CMat {
    CMat::from_fn(v.len(), 1, |i, _| v[i])
}

/// Uniformly random unit vector.
pub fn random_unit_vector<R: Rng>(n: usize, rng: &mut R) -> Vec<C64> {
    let v: Vec<C64> = (0..n).map(|_| C64::new(rng.sample(StandardNormal), rng.sample(StandardNormal))).collect();
    let norm: f64 = v.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
    v.into_iter().map(|c| c / norm).collect()
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct ImImBound {
    /// (N eta)^2 <Im G_1(gamma_i + i eta) Im G_2(gamma_j + i eta)>.
    pub statistic: f64,
    /// N |O_ij|^2 times the spectral window weight; a lower bound for `statistic`.
    pub single_term: f64,
    pub overlap_n: f64,
}

/// Smoothed overlap statistic; `ov` must be the A = I overlap matrix with quantiles attached.
pub fn imim_overlap_bound(
    ov: &OverlapMatrix,
    dec1: &SpectralDecomposition,
    dec2: &SpectralDecomposition,
    i: usize,
    j: usize,
    eta: f64,
) -> Result<ImImBound> {
    if !(eta > 0.0) {
        return Err(Error::InvalidParameter(format!("eta must be positive, got {eta}")));
    }
    let n = dec1.n();
    if ov.left_quantiles.len() != n || ov.right_quantiles.len() != n {
        return Err(Error::InvalidParameter("overlap matrix has no quantiles attached".into()));
    }
    let gi = ov.left_quantiles[i];
    let gj = ov.right_quantiles[j];
    let a: Vec<f64> = dec1.eigenvalues.iter().map(|&l| eta / ((l - gi).powi(2) + eta * eta)).collect();
    let b: Vec<f64> = dec2.eigenvalues.iter().map(|&l| eta / ((l - gj).powi(2) + eta * eta)).collect();
    let mut s = 0.0;
    for k in 0..n {
        let mut r = 0.0;
        for l in 0..n {
            r += ov.abs2(k, l) * b[l];
        }
        s += a[k] * r;
    }
    let nf = n as f64;
    let scale = (nf * eta).powi(2) / nf;
    Ok(ImImBound {
        statistic: scale * s,
        single_term: scale * a[i] * ov.abs2(i, j) * b[j],
        overlap_n: nf * ov.abs2(i, j),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix_core::{identity, max_abs_diff, resolvent};
    use crate::mde::Deformation;

    fn gue(n: usize, seed: u64) -> HermitianMatrix {
        sample_wigner(&WignerSpec { n, beta_sym: 2, dist: EntryDist::Gaussian, seed }).unwrap()
    }

    #[test]
    fn gaussian_second_moments() {
        let n = 200;
        let w = gue(n, 3);
        let mut s = 0.0;
        let mut s2 = C64::new(0.0, 0.0);
        let mut k = 0.0;
        for j in 0..n {
            for i in 0..j {
                let v = w.as_ref()[(i, j)];
                s += v.norm_sqr() * n as f64;
                s2 += v * v * n as f64;
                k += 1.0;
            }
        }
        let mean = s / k;
        // |w|^2 N is Exp(1): standard error 1/sqrt(k)
        assert!((mean - 1.0).abs() < 5.0 / k.sqrt(), "{mean}");
        assert!((s2 / k).norm() < 5.0 / k.sqrt());
    }

    #[test]
    fn rademacher_entries() {
        let n = 16;
        let w = sample_wigner(&WignerSpec { n, beta_sym: 1, dist: EntryDist::Rademacher, seed: 1 }).unwrap();
        let s = 1.0 / (n as f64).sqrt();
        for i in 0..n {
            for j in 0..n {
                let v = w.as_ref()[(i, j)];
                assert_eq!(v.im, 0.0);
                assert!((v.re.abs() - s).abs() < 1e-15);
                assert_eq!(v, w.as_ref()[(j, i)].conj());
            }
        }
        assert!("cauchy".parse::<EntryDist>().is_err());
        assert!(sample_wigner(&WignerSpec { n: 4, beta_sym: 3, dist: EntryDist::Gaussian, seed: 0 }).is_err());
    }

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a: u64 = rng_stream(5, 1, purpose::WIGNER).random();
        let b: u64 = rng_stream(5, 1, purpose::WIGNER).random();
        let c: u64 = rng_stream(5, 2, purpose::WIGNER).random();
        let d: u64 = rng_stream(5, 1, purpose::OU).random();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
    }

    #[test]
    fn zero_wigner_gives_deformation() {
        let d = Deformation::centered(vec![-1.0, 0.5, 0.25, 0.25]).unwrap();
        let w = HermitianMatrix::from_real_diagonal(&[0.0; 4]);
        let dec = deform_and_solve(&w, &d).unwrap();
        let mut sorted = d.eigenvalues().to_vec();
        sorted.sort_by(f64::total_cmp);
        for (l, e) in dec.eigenvalues.iter().zip(&sorted) {
            assert!((l - e).abs() < 1e-14);
        }
    }

    #[test]
    fn trace_is_invariant() {
        let n = 40;
        let w = gue(n, 9);
        let d = Deformation::centered((0..n).map(|i| (i as f64 / n as f64).sin()).collect()).unwrap();
        let dec = deform_and_solve(&w, &d).unwrap();
        let tr_w: f64 = (0..n).map(|i| w.as_ref()[(i, i)].re).sum();
        let tr_d: f64 = d.eigenvalues().iter().sum();
        let s: f64 = dec.eigenvalues.iter().sum();
        assert!((s - tr_w - tr_d).abs() < 1e-11);
    }

    #[test]
    fn overlaps_of_same_decomposition() {
        let w = gue(30, 2);
        let dec = eigh(&w).unwrap();
        let ov = eigenvector_overlaps(&dec, &dec, None, vec![], vec![], "I").unwrap();
        assert!(max_abs_diff(ov.values.as_ref(), identity(30).as_ref()) < 1e-10);
        let w2 = gue(30, 4);
        let dec2 = eigh(&w2).unwrap();
        let ov = eigenvector_overlaps(&dec, &dec2, None, vec![], vec![], "I").unwrap();
        for i in 0..30 {
            let r: f64 = (0..30).map(|j| ov.abs2(i, j)).sum();
            assert!((r - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn chain_avg_matches_dense_and_ward() {
        let n = 24;
        let dec1 = eigh(&gue(n, 11)).unwrap();
        let dec2 = eigh(&gue(n, 12)).unwrap();
        let b1 = HermitianMatrix::from_real_diagonal(&(0..n).map(|i| (i % 3) as f64).collect::<Vec<_>>());
        let b2 = gue(n, 13);
        let z1 = C64::new(0.3, 0.05);
        let z2 = C64::new(-0.2, -0.07);
        let v = resolvent_chain_avg(&dec1, &dec2, z1, z2, b1.as_ref(), b2.as_ref()).unwrap();
        let g1 = resolvent(&dec1, z1).unwrap();
        let g2 = resolvent(&dec2, z2).unwrap();
        let dense = &(&(&g1 * b1.matrix()) * &g2) * b2.matrix();
        let tr = crate::matrix_core::normalized_trace(dense.as_ref());
        assert!((v - tr).norm() < 1e-10 * tr.norm().max(1.0));
        // Ward: <G G*> = <Im G>/eta
        let i = identity(n);
        let ww = resolvent_chain_avg(&dec1, &dec1, z1, z1.conj(), i.as_ref(), i.as_ref()).unwrap();
        let img: f64 = dec1.eigenvalues.iter().map(|&l| (1.0 / (C64::new(l, 0.0) - z1)).im).sum::<f64>() / n as f64;
        assert!((ww.re - img / z1.im).abs() < 1e-12 * ww.re);
        assert!(ww.im.abs() < 1e-12 * ww.re);
    }

    #[test]
    fn chain_avg_two_by_two() {
        // H_1 = diag(1, -1), H_2 = diag(0.5, 0.5), B_1 = B_2 = [[0,1],[1,0]]
        let h1 = HermitianMatrix::from_real_diagonal(&[1.0, -1.0]);
        let h2 = HermitianMatrix::from_real_diagonal(&[0.5, 0.5]);
        let sx = HermitianMatrix::new(CMat::from_fn(2, 2, |i, j| C64::new(if i != j { 1.0 } else { 0.0 }, 0.0))).unwrap();
        let z = C64::new(0.0, 1.0);
        let d1 = eigh(&h1).unwrap();
        let d2 = eigh(&h2).unwrap();
        let v = resolvent_chain_avg(&d1, &d2, z, z, sx.as_ref(), sx.as_ref()).unwrap();
        // G_2 = g2 I, so <G1 sx G2 sx> = g2 <G1> = (g2/2) (1/(1-z) + 1/(-1-z))
        let g2 = 1.0 / (0.5 - z);
        let expect = 0.5 * g2 * (1.0 / (1.0 - z) + 1.0 / (-1.0 - z));
        assert!((v - expect).norm() < 1e-14, "{v} {expect}");
    }

    #[test]
    fn iso_chains() {
        let n = 20;
        let dec = eigh(&gue(n, 21)).unwrap();
        let z = C64::new(0.1, 0.2);
        let mut rng = rng_stream(1, 0, purpose::VECTORS);
        let x = random_unit_vector(n, &mut rng);
        let i = identity(n);
        let v = resolvent_chain_iso(&dec, &dec, z, z, i.as_ref(), None, &x, &x).unwrap();
        let u = dec.eigenvectors.as_ref();
        let mut expect = C64::new(0.0, 0.0);
        for k in 0..n {
            let ov: C64 = (0..n).map(|a| u[(a, k)].conj() * x[a]).sum();
            expect += ov.norm_sqr() / (C64::new(dec.eigenvalues[k], 0.0) - z).powi(2);
        }
        assert!((v - expect).norm() < 1e-11 * expect.norm());

        // three-chain against dense products, and the trivial bound
        let dec2 = eigh(&gue(n, 22)).unwrap();
        let b1 = gue(n, 23);
        let b2 = gue(n, 24);
        let y = random_unit_vector(n, &mut rng);
        let z2 = C64::new(-0.3, -0.1);
        for third in [ThirdResolvent::G1, ThirdResolvent::G1Adjoint] {
            let v = resolvent_chain_iso(&dec, &dec2, z, z2, b1.as_ref(), Some((b2.as_ref(), third)), &x, &y).unwrap();
            let g1 = resolvent(&dec, z).unwrap();
            let g2 = resolvent(&dec2, z2).unwrap();
            let g3 = match third {
                ThirdResolvent::G1 => g1.clone(),
                ThirdResolvent::G1Adjoint => g1.adjoint().to_owned(),
            };
            let prod = &(&(&(&g1 * b1.matrix()) * &g2) * b2.matrix()) * &g3;
            let dense: C64 = (0..n).map(|a| (0..n).map(|b| x[a].conj() * prod[(a, b)] * y[b]).sum::<C64>()).sum();
            assert!((v - dense).norm() < 1e-10 * dense.norm().max(1.0));
            let nb1 = crate::matrix_core::op_norm(b1.as_ref());
            let nb2 = crate::matrix_core::op_norm(b2.as_ref());
            assert!(v.norm() <= nb1 * nb2 / (0.1f64 * 0.2 * 0.2));
        }
        let bad = vec![C64::new(2.0, 0.0); n];
        assert!(resolvent_chain_iso(&dec, &dec, z, z, i.as_ref(), None, &bad, &x).is_err());
    }

    #[test]
    fn imim_bound_dominates() {
        let n = 50;
        let dec1 = eigh(&gue(n, 31)).unwrap();
        let dec2 = eigh(&gue(n, 32)).unwrap();
        let ov = eigenvector_overlaps(&dec1, &dec2, None, dec1.eigenvalues.clone(), dec2.eigenvalues.clone(), "I").unwrap();
        let eta = 10.0 / n as f64;
        for (i, j) in [(10, 12), (25, 25), (40, 3)] {
            let b = imim_overlap_bound(&ov, &dec1, &dec2, i, j, eta).unwrap();
            assert!(b.statistic >= b.single_term * (1.0 - 1e-12));
            // quantiles equal to the eigenvalues: the window weight is exactly 1
            assert!((b.single_term - b.overlap_n).abs() < 1e-12 * b.overlap_n.max(1e-300));
        }
        let same = eigenvector_overlaps(&dec1, &dec1, None, dec1.eigenvalues.clone(), dec1.eigenvalues.clone(), "I").unwrap();
        let b = imim_overlap_bound(&same, &dec1, &dec1, 20, 20, eta).unwrap();
        assert!(b.statistic >= n as f64 * (1.0 - 1e-10));
    }
}
