//! The matrix Dyson equation for a deformed Wigner matrix, its self-consistent density,
//! quantiles and bulk.
//!
//! For H = W + D the equation -1/M = z - D + <M> collapses to one scalar unknown
//! m = <M>:  m = <(D - z - m)^{-1}>,  and M = (D - z - m)^{-1} is diagonal in the
//! eigenbasis of D. The scalar equation only sees the spectral measure of D, so the
//! solver works on the distinct eigenvalues with their multiplicities.

use faer::MatRef;
use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::path::Path;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::matrix_core::{max_abs_diff, identity, spectral_apply, CMat};
use crate::quad::{adaptive, GaussRule};

#[derive(Clone, Debug)]
pub enum Basis {
    Identity,
    Unitary(Arc<CMat>),
}

impl Basis {
    pub fn is_identity(&self) -> bool {
        matches!(self, Basis::Identity)
    }

    /// True when both are the identity or literally the same matrix.
    pub fn same_as(&self, other: &Basis) -> bool {
        match (self, other) {
            (Basis::Identity, Basis::Identity) => true,
            (Basis::Unitary(a), Basis::Unitary(b)) => Arc::ptr_eq(a, b),
            _ => false,
        }
    }
}

/// A traceless real deformation D = U diag(d) U*; d_i belongs to column i of U, in the order given.
#[derive(Clone, Debug)]
pub struct Deformation {
    eigenvalues: Vec<f64>,
    basis: Basis,
    norm_bound: f64,
    atoms: Vec<(f64, f64)>,
}

fn group_atoms(sorted: &[f64]) -> Vec<(f64, f64)> {
    let n = sorted.len() as f64;
    let mut atoms: Vec<(f64, f64)> = Vec::new();
    for &d in sorted {
        match atoms.last_mut() {
            Some((v, w)) if *v == d => *w += 1.0 / n,
            _ => atoms.push((d, 1.0 / n)),
        }
    }
    atoms
}

impl Deformation {
    /// Diagonal deformation in the standard basis; tracelessness is checked.
    pub fn diagonal(eigenvalues: Vec<f64>) -> Result<Self> {
        Self::with_basis(eigenvalues, Basis::Identity, None)
    }

    pub fn zero(n: usize) -> Self {
        Self::diagonal(vec![0.0; n]).expect("zero is traceless")
    }

    pub fn with_basis(eigenvalues: Vec<f64>, basis: Basis, norm_bound: Option<f64>) -> Result<Self> {
        let n = eigenvalues.len();
        if n == 0 {
            return Err(Error::InvalidDeformation("empty spectrum".into()));
        }
        if eigenvalues.iter().any(|d| !d.is_finite()) {
            return Err(Error::InvalidDeformation("non-finite eigenvalue".into()));
        }
        let tr: f64 = eigenvalues.iter().sum();
        if tr.abs() > 1e-10 * n as f64 {
            return Err(Error::InvalidDeformation(format!("trace is {tr:e}, expected 0")));
        }
        if let Basis::Unitary(u) = &basis {
            if u.nrows() != n || u.ncols() != n {
                return Err(Error::DimensionMismatch { expected: n, got: u.nrows() });
            }
            let uu = u.as_ref().adjoint() * u.as_ref();
            let err = max_abs_diff(uu.as_ref(), identity(n).as_ref());
            if err > 1e-10 {
                return Err(Error::InvalidDeformation(format!("basis is not unitary ({err:e})")));
            }
        }
        let max_abs = eigenvalues.iter().fold(0.0f64, |m, d| m.max(d.abs()));
        let norm_bound = match norm_bound {
            Some(l) if l + 1e-12 < max_abs => {
                return Err(Error::InvalidDeformation(format!("||D|| = {max_abs} exceeds L = {l}")))
            }
            Some(l) => l,
            None => max_abs,
        };
        let mut sorted = eigenvalues.clone();
        sorted.sort_by(f64::total_cmp);
        let atoms = group_atoms(&sorted);
        Ok(Self { eigenvalues, basis, norm_bound, atoms })
    }

    /// Eigenvalues shifted to trace zero.
    pub fn centered(mut eigenvalues: Vec<f64>) -> Result<Self> {
        let mean = eigenvalues.iter().sum::<f64>() / eigenvalues.len().max(1) as f64;
        eigenvalues.iter_mut().for_each(|d| *d -= mean);
        Self::diagonal(eigenvalues)
    }

    pub fn n(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn basis(&self) -> &Basis {
        &self.basis
    }

    pub fn norm_bound(&self) -> f64 {
        self.norm_bound
    }

    /// Distinct eigenvalues with weights summing to one.
    pub fn atoms(&self) -> &[(f64, f64)] {
        &self.atoms
    }

    pub fn is_zero(&self) -> bool {
        self.eigenvalues.iter().all(|&d| d == 0.0)
    }

    /// s * D, sharing the basis.
    pub fn scaled(&self, s: f64) -> Self {
        Self {
            eigenvalues: self.eigenvalues.iter().map(|d| d * s).collect(),
            basis: self.basis.clone(),
            norm_bound: self.norm_bound * s.abs(),
            atoms: self.atoms.iter().map(|&(v, w)| (v * s, w)).collect(),
        }
    }

    pub fn to_matrix(&self) -> CMat {
        let n = self.n();
        let d: Vec<C64> = self.eigenvalues.iter().map(|&x| C64::new(x, 0.0)).collect();
        match &self.basis {
            Basis::Identity => CMat::from_fn(n, n, |i, j| if i == j { d[i] } else { C64::new(0.0, 0.0) }),
            Basis::Unitary(u) => spectral_apply(u.as_ref().as_ref(), &d),
        }
    }

    /// Applies `f(d_i)` in the eigenbasis of D.
    pub fn function_matrix<F: Fn(f64) -> C64>(&self, f: F) -> CMat {
        let n = self.n();
        let v: Vec<C64> = self.eigenvalues.iter().map(|&x| f(x)).collect();
        match &self.basis {
            Basis::Identity => CMat::from_fn(n, n, |i, j| if i == j { v[i] } else { C64::new(0.0, 0.0) }),
            Basis::Unitary(u) => spectral_apply(u.as_ref().as_ref(), &v),
        }
    }

    pub fn basis_matrix(&self) -> Option<MatRef<'_, C64>> {
        match &self.basis {
            Basis::Identity => None,
            Basis::Unitary(u) => Some(u.as_ref().as_ref()),
        }
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let f: DeformationFile = serde_json::from_str(s)?;
        f.into_deformation()
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path)?;
        Self::from_json_str(&s)
    }

    pub fn to_json(&self) -> DeformationFile {
        let basis = match &self.basis {
            Basis::Identity => BasisJson::Name("identity".into()),
            Basis::Unitary(u) => BasisJson::Rows(
                (0..self.n()).map(|i| (0..self.n()).map(|j| [u[(i, j)].re, u[(i, j)].im]).collect()).collect(),
            ),
        };
        DeformationFile { eigenvalues: self.eigenvalues.clone(), basis, norm_bound: Some(self.norm_bound) }
    }

    pub fn class_check(&self, l: f64) -> DeformationClassReport {
        let mut sorted = self.eigenvalues.clone();
        sorted.sort_by(f64::total_cmp);
        deformation_class_check(&sorted, l)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BasisJson {
    Name(String),
    /// Row-major, each entry `[re, im]`.
    Rows(Vec<Vec<[f64; 2]>>),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DeformationFile {
    pub eigenvalues: Vec<f64>,
    #[serde(default = "identity_basis")]
    pub basis: BasisJson,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub norm_bound: Option<f64>,
}

fn identity_basis() -> BasisJson {
    BasisJson::Name("identity".into())
}

impl DeformationFile {
    pub fn into_deformation(self) -> Result<Deformation> {
        let n = self.eigenvalues.len();
        let basis = match self.basis {
            BasisJson::Name(s) if s == "identity" => Basis::Identity,
            BasisJson::Name(s) => return Err(Error::InvalidDeformation(format!("unknown basis `{s}`"))),
            BasisJson::Rows(rows) => {
                if rows.len() != n || rows.iter().any(|r| r.len() != n) {
                    return Err(Error::InvalidDeformation(format!("basis must be {n}x{n}")));
                }
                Basis::Unitary(Arc::new(CMat::from_fn(n, n, |i, j| C64::new(rows[i][j][0], rows[i][j][1]))))
            }
        };
        Deformation::with_basis(self.eigenvalues, basis, self.norm_bound)
    }
}

/// Named deformation families that make sense for every N.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DeformationProfile {
    Zero,
    /// -a on the first half of the indices, +a on the second, 0 in the middle for odd N.
    TwoPoint { a: f64 },
    /// a (2i/(N-1) - 1), i = 0..N.
    Equispaced { a: f64 },
    /// Given eigenvalues; N has to match.
    Explicit { eigenvalues: Vec<f64> },
}

impl DeformationProfile {
    pub fn build(&self, n: usize) -> Result<Deformation> {
        match self {
            Self::Zero => Ok(Deformation::zero(n)),
            Self::TwoPoint { a } => {
                let h = n / 2;
                let d = (0..n)
                    .map(|i| if i < h { -a } else if i >= n - h { *a } else { 0.0 })
                    .collect();
                Deformation::diagonal(d)
            }
            Self::Equispaced { a } => {
                if n == 1 {
                    return Ok(Deformation::zero(1));
                }
                let d = (0..n).map(|i| a * (2.0 * i as f64 / (n - 1) as f64 - 1.0)).collect();
                Deformation::centered(d)
            }
            Self::Explicit { eigenvalues } => {
                if eigenvalues.len() != n {
                    return Err(Error::InvalidDeformation(format!(
                        "explicit profile has {} eigenvalues, N = {n}",
                        eigenvalues.len()
                    )));
                }
                Deformation::diagonal(eigenvalues.clone())
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct MdeConfig {
    pub tol: f64,
    pub max_iter: usize,
    /// Damping of the fixed-point map.
    pub alpha: f64,
    /// Switch to Newton below this residual.
    pub newton_switch: f64,
    /// Below this |Im z| the solve is continued down from Im z = 1.
    pub continuation_below: f64,
}

impl Default for MdeConfig {
    fn default() -> Self {
        Self { tol: 1e-13, max_iter: 2000, alpha: 0.5, newton_switch: 1e-3, continuation_below: 0.1 }
    }
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct MdeSolution {
    pub z: C64,
    /// m = <M>.
    pub m: C64,
    /// |Im m| / pi.
    pub rho: f64,
    pub residual: f64,
    pub iterations: usize,
}

impl MdeSolution {
    /// Diagonal of M in the eigenbasis of D.
    pub fn diag(&self, d: &Deformation) -> Vec<C64> {
        m_diag(d.eigenvalues(), self.z, self.m)
    }

    pub fn conj(&self) -> Self {
        Self { z: self.z.conj(), m: self.m.conj(), ..*self }
    }
}

pub fn m_diag(eigs: &[f64], z: C64, m: C64) -> Vec<C64> {
    eigs.iter().map(|&d| 1.0 / (C64::new(d, 0.0) - z - m)).collect()
}

fn mean_inv(atoms: &[(f64, f64)], zm: C64) -> (C64, C64) {
    let mut s = C64::new(0.0, 0.0);
    let mut s2 = C64::new(0.0, 0.0);
    for &(v, w) in atoms {
        let g = 1.0 / (C64::new(v, 0.0) - zm);
        s += w * g;
        s2 += w * g * g;
    }
    (s, s2)
}

/// |m - <(D - z - m)^{-1}>|.
pub fn mde_residual(d: &Deformation, z: C64, m: C64) -> f64 {
    (m - mean_inv(d.atoms(), z + m).0).norm()
}

/// Iterates from `m0` at fixed z (Im z > 0). `None` when it stalls.
fn solve_core(atoms: &[(f64, f64)], z: C64, m0: C64, cfg: &MdeConfig) -> Option<(C64, f64, usize)> {
    let mut m = if m0.im > 0.0 && m0.is_finite() { m0 } else { C64::new(0.0, 1.0) };
    let mut last_res = f64::INFINITY;
    for it in 0..cfg.max_iter {
        let (s, s2) = mean_inv(atoms, z + m);
        let f = m - s;
        let res = f.norm();
        if res <= cfg.tol * m.norm().max(1.0) {
            return Some((m, res, it));
        }
        if res < cfg.newton_switch {
            let df = 1.0 - s2;
            let mut step = f / df;
            let mut accepted = false;
            for _ in 0..40 {
                let trial = m - step;
                if trial.im > 0.0 && trial.is_finite() {
                    let r = (trial - mean_inv(atoms, z + trial).0).norm();
                    if r < res {
                        m = trial;
                        accepted = true;
                        break;
                    }
                }
                step *= 0.5;
            }
            if !accepted {
                // Newton cannot improve any further: accept if we are already at round-off
                if res <= 1e3 * f64::EPSILON * m.norm().max(1.0) {
                    return Some((m, res, it));
                }
                m = (1.0 - cfg.alpha) * m + cfg.alpha * s;
            }
        } else {
            let next = (1.0 - cfg.alpha) * m + cfg.alpha * s;
            m = if next.im > 0.0 { next } else { C64::new(next.re, 0.5 * m.im) };
        }
        last_res = res;
    }
    let _ = last_res;
    None
}

fn finish(atoms: &[(f64, f64)], z: C64, m: C64, iterations: usize) -> MdeSolution {
    let residual = (m - mean_inv(atoms, z + m).0).norm();
    MdeSolution { z, m, rho: m.im.abs() / PI, residual, iterations }
}

fn solve_upper(atoms: &[(f64, f64)], z: C64, guess: Option<C64>, cfg: &MdeConfig) -> Result<MdeSolution> {
    if let Some(g) = guess {
        if let Some((m, _, it)) = solve_core(atoms, z, g, cfg) {
            return Ok(finish(atoms, z, m, it));
        }
    }
    let mut total = 0usize;
    let mut m = C64::new(0.0, 1.0);
    if z.im < cfg.continuation_below {
        let mut eta = 1.0;
        while eta > z.im {
            let (mm, _, it) = solve_core(atoms, C64::new(z.re, eta), m, cfg).ok_or(Error::MdeNoConvergence {
                z: C64::new(z.re, eta),
                residual: f64::NAN,
                iterations: cfg.max_iter,
            })?;
            m = mm;
            total += it;
            eta *= 0.5;
        }
    }
    match solve_core(atoms, z, m, cfg) {
        Some((m, _, it)) => Ok(finish(atoms, z, m, total + it)),
        None => Err(Error::MdeNoConvergence { z, residual: mde_residual_atoms(atoms, z, m), iterations: total + cfg.max_iter }),
    }
}

fn mde_residual_atoms(atoms: &[(f64, f64)], z: C64, m: C64) -> f64 {
    (m - mean_inv(atoms, z + m).0).norm()
}

/// Solves the scalar MDE at z (Im z != 0); the solution satisfies Im m * Im z > 0.
pub fn solve_mde(d: &Deformation, z: C64, cfg: &MdeConfig) -> Result<MdeSolution> {
    solve_mde_from(d, z, None, cfg)
}

/// As `solve_mde`, trying `guess` for m first.
pub fn solve_mde_from(d: &Deformation, z: C64, guess: Option<C64>, cfg: &MdeConfig) -> Result<MdeSolution> {
    solve_atoms(d.atoms(), z, guess, cfg)
}

pub(crate) fn solve_atoms(atoms: &[(f64, f64)], z: C64, guess: Option<C64>, cfg: &MdeConfig) -> Result<MdeSolution> {
    if !z.re.is_finite() || !z.im.is_finite() {
        return Err(Error::InvalidParameter(format!("non-finite z = {z}")));
    }
    if z.im == 0.0 {
        return Err(Error::RealSpectralParameter(z));
    }
    if z.im > 0.0 {
        solve_upper(atoms, z, guess, cfg)
    } else {
        Ok(solve_upper(atoms, z.conj(), guess.map(|g| g.conj()), cfg)?.conj())
    }
}

/// Semicircle Stieltjes transform, the D = 0 solution.
pub fn m_semicircle(z: C64) -> C64 {
    // branch with Im m * Im z > 0
    let s = (z * z - 4.0).sqrt();
    let a = (-z + s) / 2.0;
    let b = (-z - s) / 2.0;
    if a.im * z.im > 0.0 {
        a
    } else {
        b
    }
}

pub fn rho_semicircle(x: f64) -> f64 {
    (4.0 - x * x).max(0.0).sqrt() / (2.0 * PI)
}

#[derive(Clone, Debug)]
pub struct DensityConfig {
    /// Heights used for the extrapolation to the real axis, largest first, each half the previous.
    pub etas: [f64; 3],
    /// Spread between the two extrapolants above which a point is flagged.
    pub cusp_flag: f64,
    pub grid: usize,
    pub gauss_order: usize,
    /// Per-cell absolute tolerance of the cumulative integral.
    pub cell_tol: f64,
    /// Height and threshold used to locate support edges.
    pub edge_eta: f64,
    pub edge_threshold: f64,
    pub mde: MdeConfig,
}

impl Default for DensityConfig {
    fn default() -> Self {
        Self {
            etas: [1e-5, 5e-6, 2.5e-6],
            cusp_flag: 1e-4,
            grid: 4096,
            gauss_order: 8,
            cell_tol: 1e-12,
            edge_eta: 1e-9,
            edge_threshold: 1e-6,
            mde: MdeConfig::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct DensityPoint {
    pub e: f64,
    pub rho: f64,
    /// |difference of the two first-order extrapolants|.
    pub spread: f64,
    pub near_cusp: bool,
}

/// Warm-start state for sweeping energies at the extrapolation heights.
#[derive(Clone, Copy, Debug, Default)]
pub struct DensityWarm {
    m: [Option<C64>; 3],
}

/// rho_D(E) from Im m at three heights, extrapolated linearly in eta.
pub fn density_point(d: &Deformation, e: f64, cfg: &DensityConfig) -> Result<DensityPoint> {
    density_point_atoms(d.atoms(), e, cfg, &mut DensityWarm::default())
}

pub fn density(d: &Deformation, e: f64) -> Result<f64> {
    let p = density_point(d, e, &DensityConfig::default())?;
    if p.near_cusp {
        log::warn!("density extrapolation spread {:e} at E = {e}", p.spread);
    }
    Ok(p.rho)
}

pub(crate) fn density_point_atoms(
    atoms: &[(f64, f64)],
    e: f64,
    cfg: &DensityConfig,
    warm: &mut DensityWarm,
) -> Result<DensityPoint> {
    let mut r = [0.0; 3];
    for k in 0..3 {
        let s = solve_atoms(atoms, C64::new(e, cfg.etas[k]), warm.m[k], &cfg.mde)?;
        warm.m[k] = Some(s.m);
        r[k] = s.m.im / PI;
    }
    let r1 = 2.0 * r[1] - r[0];
    let r2 = 2.0 * r[2] - r[1];
    let spread = (r1 - r2).abs();
    Ok(DensityPoint { e, rho: r2.max(0.0), spread, near_cusp: spread > cfg.cusp_flag })
}

/// Cached density of states with its cumulative distribution, quantiles and bulk.
#[derive(Clone, Debug)]
pub struct DensityProfile {
    atoms: Vec<(f64, f64)>,
    cfg: DensityConfig,
    lo: f64,
    hi: f64,
    /// Cell boundaries.
    nodes: Vec<f64>,
    /// Density at the cell boundaries.
    rho: Vec<f64>,
    /// Cumulative mass at the cell boundaries.
    cdf: Vec<f64>,
    warm: Vec<DensityWarm>,
    support: Vec<(f64, f64)>,
    flagged: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct QuantileSet {
    pub n: usize,
    /// gamma_i for i = 1..=n, at index i - 1.
    pub gamma: Vec<f64>,
}

impl DensityProfile {
    pub fn new(d: &Deformation) -> Result<Self> {
        Self::with_config(d, DensityConfig::default())
    }

    pub fn with_config(d: &Deformation, cfg: DensityConfig) -> Result<Self> {
        let atoms = d.atoms().to_vec();
        let dmin = atoms.first().map(|a| a.0).unwrap_or(0.0);
        let dmax = atoms.last().map(|a| a.0).unwrap_or(0.0);
        // the free convolution with the semicircle lives in [min d - 2, max d + 2]
        let lo = dmin - 2.05;
        let hi = dmax + 2.05;
        let k = cfg.grid.max(8);
        let h = (hi - lo) / k as f64;
        let nodes: Vec<f64> = (0..=k).map(|i| lo + h * i as f64).collect();
        let rule = GaussRule::new(cfg.gauss_order);
        let mut warm = DensityWarm::default();
        let mut rho = Vec::with_capacity(k + 1);
        let mut warms = Vec::with_capacity(k + 1);
        let mut cdf = vec![0.0; k + 1];
        let mut flagged = 0usize;
        let mut err: Option<Error> = None;
        for i in 0..=k {
            let p = density_point_atoms(&atoms, nodes[i], &cfg, &mut warm)?;
            rho.push(p.rho);
            warms.push(warm);
            if p.near_cusp {
                flagged += 1;
            }
            if i < k {
                let mut w = warm;
                let (mass, _) = adaptive(&rule, nodes[i], nodes[i + 1], cfg.cell_tol, 30, &mut |x: f64| {
                    match density_point_atoms(&atoms, x, &cfg, &mut w) {
                        Ok(p) => p.rho,
                        Err(e) => {
                            err.get_or_insert(e);
                            0.0
                        }
                    }
                });
                cdf[i + 1] = cdf[i] + mass;
            }
        }
        if let Some(e) = err {
            return Err(e);
        }
        if flagged > 0 {
            log::warn!("{flagged} grid points flagged near a cusp or edge");
        }
        let mut prof = Self { atoms, cfg, lo, hi, nodes, rho, cdf, warm: warms, support: Vec::new(), flagged };
        prof.support = prof.find_support()?;
        Ok(prof)
    }

    pub fn total_mass(&self) -> f64 {
        *self.cdf.last().unwrap()
    }

    pub fn range(&self) -> (f64, f64) {
        (self.lo, self.hi)
    }

    pub fn flagged_points(&self) -> usize {
        self.flagged
    }

    fn cell_of(&self, x: f64) -> usize {
        let k = self.nodes.len() - 1;
        let h = (self.hi - self.lo) / k as f64;
        (((x - self.lo) / h).floor().max(0.0) as usize).min(k - 1)
    }

    pub fn density(&self, x: f64) -> Result<f64> {
        if x <= self.lo || x >= self.hi {
            return Ok(0.0);
        }
        let c = self.cell_of(x);
        let mut w = self.warm[c];
        Ok(density_point_atoms(&self.atoms, x, &self.cfg, &mut w)?.rho)
    }

    pub fn density_point(&self, x: f64) -> Result<DensityPoint> {
        let c = self.cell_of(x.clamp(self.lo, self.hi));
        let mut w = self.warm[c];
        density_point_atoms(&self.atoms, x, &self.cfg, &mut w)
    }

    /// int_{-inf}^x rho.
    pub fn cdf(&self, x: f64) -> Result<f64> {
        if x <= self.lo {
            return Ok(0.0);
        }
        if x >= self.hi {
            return Ok(self.total_mass());
        }
        let c = self.cell_of(x);
        let rule = GaussRule::new(self.cfg.gauss_order);
        let mut w = self.warm[c];
        let mut err = None;
        let (part, _) = adaptive(&rule, self.nodes[c], x, self.cfg.cell_tol, 30, &mut |t: f64| {
            match density_point_atoms(&self.atoms, t, &self.cfg, &mut w) {
                Ok(p) => p.rho,
                Err(e) => {
                    err.get_or_insert(e);
                    0.0
                }
            }
        });
        match err {
            Some(e) => Err(e),
            None => Ok(self.cdf[c] + part),
        }
    }

    fn edge_rho(&self, x: f64) -> Result<f64> {
        let s = solve_atoms(&self.atoms, C64::new(x, self.cfg.edge_eta), None, &self.cfg.mde)?;
        Ok(s.m.im / PI)
    }

    fn find_support(&self) -> Result<Vec<(f64, f64)>> {
        let k = self.nodes.len() - 1;
        let mass_of = |i: usize| self.cdf[i + 1] - self.cdf[i];
        let tiny = 1e-14;
        let mut intervals = Vec::new();
        let mut i = 0;
        while i < k {
            if mass_of(i) > tiny {
                let start = i;
                while i < k && mass_of(i) > tiny {
                    i += 1;
                }
                intervals.push((start, i));
            } else {
                i += 1;
            }
        }
        let thr = self.cfg.edge_threshold;
        let mut out = Vec::new();
        for (s, e) in intervals {
            // left edge in [node s, node s+1], right edge in [node e-1, node e]
            let left = self.bisect_edge(self.nodes[s], self.nodes[(s + 1).min(k)], thr, true)?;
            let right = self.bisect_edge(self.nodes[e.saturating_sub(1)], self.nodes[e], thr, false)?;
            out.push((left, right));
        }
        Ok(out)
    }

    /// Finds the crossing of rho = thr inside [a, b]. `rising` means rho goes from 0 to positive.
    fn bisect_edge(&self, mut a: f64, mut b: f64, thr: f64, rising: bool) -> Result<f64> {
        let inside = |x: f64| -> Result<bool> { Ok(self.edge_rho(x)? > thr) };
        // widen a little so the crossing is actually bracketed
        let h = b - a;
        if rising {
            a -= h;
            if inside(a)? {
                return Ok(a);
            }
            if !inside(b)? {
                b += h;
            }
        } else {
            b += h;
            if inside(b)? {
                return Ok(b);
            }
            if !inside(a)? {
                a -= h;
            }
        }
        for _ in 0..60 {
            let m = 0.5 * (a + b);
            let ins = inside(m)?;
            if ins == rising {
                b = m;
            } else {
                a = m;
            }
            if b - a < 1e-13 {
                break;
            }
        }
        Ok(0.5 * (a + b))
    }

    /// Connected components of the support, edges located to ~1e-8.
    pub fn support(&self) -> &[(f64, f64)] {
        &self.support
    }

    /// Distance from z to the support.
    pub fn dist_to_support(&self, z: C64) -> f64 {
        self.support
            .iter()
            .map(|&(a, b)| {
                let x = z.re.clamp(a, b);
                C64::new(z.re - x, z.im).norm()
            })
            .fold(f64::INFINITY, f64::min)
    }

    /// Smallest x with F(x) = p.
    pub fn quantile(&self, p: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::InvalidParameter(format!("quantile level {p} outside [0, 1]")));
        }
        let total = self.total_mass();
        let target = p * total;
        if p <= 0.0 {
            return Ok(self.support.first().map(|s| s.0).unwrap_or(self.lo));
        }
        if p >= 1.0 {
            return Ok(self.support.last().map(|s| s.1).unwrap_or(self.hi));
        }
        // first boundary with cdf >= target
        let k = self.nodes.len() - 1;
        let j = self.cdf.partition_point(|&c| c < target).clamp(1, k);
        let c = j - 1;
        let (mut a, mut b) = (self.nodes[c], self.nodes[c + 1]);
        let (mut fa, mut fb) = (self.cdf[c] - target, self.cdf[c + 1] - target);
        // safeguarded Newton with rho as the derivative
        let mut x = if fb - fa > 0.0 { a - fa * (b - a) / (fb - fa) } else { 0.5 * (a + b) };
        for _ in 0..100 {
            let fx = self.cdf(x)? - target;
            if fx.abs() <= 1e-13 {
                return Ok(x);
            }
            if fx < 0.0 {
                a = x;
                fa = fx;
            } else {
                b = x;
                fb = fx;
            }
            let r = self.density(x)?;
            let mut next = if r > 0.0 { x - fx / r } else { f64::NAN };
            if !(next > a && next < b) {
                next = if fb - fa > 0.0 { a - fa * (b - a) / (fb - fa) } else { 0.5 * (a + b) };
                if !(next > a && next < b) || (b - a) < 1e-14 {
                    next = 0.5 * (a + b);
                }
            }
            if (next - x).abs() < 1e-15 || b - a < 1e-15 {
                return Ok(next);
            }
            x = next;
        }
        Ok(x)
    }

    /// gamma_1..gamma_n.
    pub fn quantiles(&self, n: usize) -> Result<QuantileSet> {
        if n == 0 {
            return Err(Error::InvalidParameter("need at least one quantile".into()));
        }
        let gamma = (1..=n).map(|i| self.quantile(i as f64 / n as f64)).collect::<Result<Vec<_>>>()?;
        Ok(QuantileSet { n, gamma })
    }

    /// Intervals where rho >= kappa, endpoints refined to 1e-8.
    pub fn kappa_bulk(&self, kappa: f64) -> Result<Vec<(f64, f64)>> {
        if !(kappa > 0.0) {
            return Err(Error::InvalidParameter(format!("kappa must be positive, got {kappa}")));
        }
        let k = self.nodes.len() - 1;
        let above: Vec<bool> = self.rho.iter().map(|&r| r >= kappa).collect();
        let mut out = Vec::new();
        let mut i = 0;
        while i <= k {
            if above[i] {
                let s = i;
                while i <= k && above[i] {
                    i += 1;
                }
                let left = if s == 0 { self.nodes[0] } else { self.refine_level(self.nodes[s - 1], self.nodes[s], kappa)? };
                let right = if i > k { self.nodes[k] } else { self.refine_level(self.nodes[i - 1], self.nodes[i], kappa)? };
                out.push((left, right));
            } else {
                i += 1;
            }
        }
        Ok(out)
    }

    fn refine_level(&self, mut a: f64, mut b: f64, level: f64) -> Result<f64> {
        let fa_above = self.density(a)? >= level;
        while b - a > 1e-9 {
            let m = 0.5 * (a + b);
            if (self.density(m)? >= level) == fa_above {
                a = m;
            } else {
                b = m;
            }
        }
        Ok(0.5 * (a + b))
    }
}

/// Indices i (0-based, gamma_{i+1}) whose quantile lies in the kappa-bulk, at least `margin`
/// away from its endpoints.
pub fn bulk_indices(quantiles: &[f64], bulk: &[(f64, f64)], margin: f64) -> Vec<usize> {
    quantiles
        .iter()
        .enumerate()
        .filter(|(_, &g)| bulk.iter().any(|&(a, b)| g >= a + margin && g <= b - margin))
        .map(|(i, _)| i)
        .collect()
}

#[derive(Clone, Debug, Serialize)]
pub struct DeformationClassReport {
    pub pass: bool,
    pub norm_ok: bool,
    /// Greedy maximal segments as half-open index ranges.
    pub segments: Vec<(usize, usize)>,
    /// The pair that forced each segment break and its ratio |d_j - d_k| / (L |j - k|^{1/2} / N^{1/2}).
    pub worst_pair: Option<(usize, usize, f64)>,
}

/// Checks ||D|| <= L and the piecewise 1/2-Hoelder condition with at most L segments.
/// Greedy extension gives the minimal number of segments since the condition is inherited
/// by sub-segments.
pub fn deformation_class_check(eigenvalues: &[f64], l: f64) -> DeformationClassReport {
    let n = eigenvalues.len();
    let norm = eigenvalues.iter().fold(0.0f64, |m, d| m.max(d.abs()));
    let norm_ok = norm <= l;
    let nf = n as f64;
    let mut segments = Vec::new();
    let mut worst: Option<(usize, usize, f64)> = None;
    let mut start = 0;
    for k in 1..=n {
        if k == n {
            segments.push((start, n));
            break;
        }
        let mut violation: Option<(usize, usize, f64)> = None;
        for j in start..k {
            let allowed = l * ((k - j) as f64 / nf).sqrt();
            let diff = (eigenvalues[k] - eigenvalues[j]).abs();
            if diff > allowed {
                let ratio = diff / allowed;
                if violation.map_or(true, |v| ratio > v.2) {
                    violation = Some((j, k, ratio));
                }
            }
        }
        if let Some(v) = violation {
            segments.push((start, k));
            start = k;
            if worst.map_or(true, |w| v.2 > w.2) {
                worst = Some(v);
            }
        }
    }
    // a single segment is always allowed, so D = 0 passes for any L >= 0
    let pass = norm_ok && (segments.len() as f64) <= l.max(1.0);
    DeformationClassReport { pass, norm_ok, segments, worst_pair: worst }
}
