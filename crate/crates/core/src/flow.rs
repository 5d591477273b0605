//! The characteristic flow
//!   d/dt z_t = -<M^{D_t}(z_t)> - z_t/2,   D_t = e^{-t/2} D_0,
//! its closed form, backward solve, propagator quantities along pairs of characteristics,
//! spectral-domain boundaries and the matrix Ornstein-Uhlenbeck process.

use num_complex::Complex64 as C64;
use rand::Rng;
use serde::Serialize;
use std::sync::Arc;

use crate::det_approx::{beta, m1m2_trace, m2_det_pair_trace, m2_det_trace, SpectralPair};
use crate::ensemble::{rng_stream, sample_wigner_with, EntryDist};
use crate::error::{Error, Result};
use crate::matrix_core::HermitianMatrix;
use faer::MatRef;
use crate::mde::{solve_atoms, solve_mde_from, Deformation, DensityProfile, MdeConfig, MdeSolution};
use crate::quad::{adaptive, GaussRule};

/// Below this |Im z| a trajectory is considered to have left the domain.
pub const EXIT_ETA: f64 = 1e-9;

#[derive(Clone, Copy, Debug, Serialize)]
pub struct FlowState {
    pub t: f64,
    pub z: C64,
    /// D_t = d_scale * D_0.
    pub d_scale: f64,
    pub sol: MdeSolution,
    /// True when integration stopped early because |Im z| fell below `EXIT_ETA`.
    pub exited: bool,
}

/// z_t = e^{-t/2} z_0 - 2 <M_0(z_0)> sinh(t/2).
pub fn flow_closed_form(nu0: &SpectralPair, t: f64) -> C64 {
    closed_form(nu0.z, nu0.m(), t)
}

fn closed_form(z0: C64, m0: C64, t: f64) -> C64 {
    (-0.5 * t).exp() * z0 - 2.0 * m0 * (0.5 * t).sinh()
}

fn scaled_atoms(atoms: &[(f64, f64)], s: f64) -> Vec<(f64, f64)> {
    atoms.iter().map(|&(v, w)| (v * s, w)).collect()
}

/// The pair nu_t = (z_t, e^{-t/2} D) on the characteristic through nu0, via the closed form
/// and a fresh MDE solve.
pub fn pair_at(nu0: &SpectralPair, t: f64, cfg: &MdeConfig) -> Result<SpectralPair> {
    let z = flow_closed_form(nu0, t);
    if z.im.abs() < EXIT_ETA || z.im * nu0.z.im <= 0.0 {
        return Err(Error::FlowExit { t, z });
    }
    let d = Arc::new(nu0.d.scaled((-0.5 * t).exp()));
    SpectralPair::with_guess(d, z, Some((0.5 * t).exp() * nu0.m()), cfg)
}

/// RK4 integration with an MDE solve per stage, warm-started from the previous stage.
/// Returns the states after every `record_every` steps plus the final one.
pub fn flow_trajectory(nu0: &SpectralPair, t: f64, dt: f64, record_every: usize, cfg: &MdeConfig) -> Result<Vec<FlowState>> {
    if !(dt > 0.0 && dt <= 1e-3) {
        return Err(Error::InvalidParameter(format!("dt must lie in (0, 1e-3], got {dt}")));
    }
    if !(t >= 0.0) {
        return Err(Error::InvalidParameter(format!("t must be nonnegative, got {t}")));
    }
    let atoms = nu0.d.atoms();
    let sign = nu0.z.im.signum();
    let steps = (t / dt).ceil() as usize;
    let h = if steps > 0 { t / steps as f64 } else { 0.0 };
    let mut guess = nu0.m();
    let rhs = |tau: f64, z: C64, guess: &mut C64| -> Result<C64> {
        if z.im * sign < EXIT_ETA {
            return Err(Error::FlowExit { t: tau, z });
        }
        let sol = solve_atoms(&scaled_atoms(atoms, (-0.5 * tau).exp()), z, Some(*guess), cfg)?;
        *guess = sol.m;
        Ok(-sol.m - 0.5 * z)
    };
    let mut z = nu0.z;
    let mut out = vec![FlowState { t: 0.0, z, d_scale: 1.0, sol: nu0.sol, exited: false }];
    let mut exited = false;
    let mut tau = 0.0;
    for k in 0..steps {
        let step = (|| -> Result<C64> {
            let mut g = guess;
            let k1 = rhs(tau, z, &mut g)?;
            let k2 = rhs(tau + 0.5 * h, z + 0.5 * h * k1, &mut g)?;
            let k3 = rhs(tau + 0.5 * h, z + 0.5 * h * k2, &mut g)?;
            let k4 = rhs(tau + h, z + h * k3, &mut g)?;
            Ok(z + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4))
        })();
        match step {
            Ok(next) if next.im * sign >= EXIT_ETA => {
                z = next;
                tau = (k + 1) as f64 * h;
            }
            Ok(_) | Err(Error::FlowExit { .. }) => {
                exited = true;
                break;
            }
            Err(e) => return Err(e),
        }
        let last = k + 1 == steps;
        if last || (record_every > 0 && (k + 1) % record_every == 0) {
            let s = (-0.5 * tau).exp();
            let sol = solve_atoms(&scaled_atoms(atoms, s), z, Some(guess), cfg)?;
            guess = sol.m;
            out.push(FlowState { t: tau, z, d_scale: s, sol, exited: false });
        } else {
            // keep the warm start current
            guess = solve_atoms(&scaled_atoms(atoms, (-0.5 * tau).exp()), z, Some(guess), cfg)?.m;
        }
    }
    if exited {
        let s = (-0.5 * tau).exp();
        let sol = solve_atoms(&scaled_atoms(atoms, s), z, Some(guess), cfg)?;
        if out.last().map(|st| st.t) != Some(tau) {
            out.push(FlowState { t: tau, z, d_scale: s, sol, exited: true });
        } else if let Some(st) = out.last_mut() {
            st.exited = true;
        }
    }
    Ok(out)
}

/// Final state of `flow_trajectory`.
pub fn flow_integrate(nu0: &SpectralPair, t: f64, dt: f64, cfg: &MdeConfig) -> Result<FlowState> {
    Ok(*flow_trajectory(nu0, t, dt, 0, cfg)?.last().expect("trajectory is never empty"))
}

#[derive(Clone, Debug)]
pub struct BackwardSolution {
    pub z0: C64,
    pub d0: Arc<Deformation>,
    pub nu0: SpectralPair,
    /// |closed-form flow of z0 to time T - z_T|.
    pub round_trip: f64,
    pub newton_steps: usize,
}

impl BackwardSolution {
    /// dist(z_0, supp rho_{D_0}); builds the density profile of D_0.
    pub fn dist_to_support(&self) -> Result<f64> {
        Ok(DensityProfile::new(&self.d0)?.dist_to_support(self.z0))
    }
}

/// Initial condition (z_0, D_0 = e^{T/2} D_T) whose characteristic reaches z_T at time T.
pub fn flow_backward(z_t: C64, d_t: &Deformation, t: f64, cfg: &MdeConfig) -> Result<BackwardSolution> {
    if !(0.0..1.0).contains(&t) {
        return Err(Error::InvalidParameter(format!("backward time must lie in [0, 1), got {t}")));
    }
    if z_t.im == 0.0 {
        return Err(Error::RealSpectralParameter(z_t));
    }
    let d0 = Arc::new(d_t.scaled((0.5 * t).exp()));
    let atoms = d0.atoms();
    let sign = z_t.im.signum();
    let a = (-0.5 * t).exp();
    let b = 2.0 * (0.5 * t).sinh();
    let scale = 1.0 + z_t.norm();
    let mut z = z_t + C64::new(0.0, sign * t);
    let mut sol = solve_atoms(atoms, z, None, cfg)?;
    let f = |z: C64, m: C64| a * z - b * m - z_t;
    let mut val = f(z, sol.m);
    let mut steps = 0;
    while val.norm() > 1e-13 * scale {
        if steps == 50 {
            return Err(Error::BackwardFlow(format!("Newton did not converge in 50 steps, |F| = {:.3e}", val.norm())));
        }
        steps += 1;
        // m'(z) = <M^2>/(1 - <M^2>)
        let zm = z + sol.m;
        let m2: C64 = atoms.iter().map(|&(v, w)| w / (C64::new(v, 0.0) - zm).powi(2)).sum();
        let dm = m2 / (1.0 - m2);
        let mut step = val / (a - b * dm);
        let mut accepted = false;
        for _ in 0..60 {
            let trial = z - step;
            if trial.im * sign > 0.0 {
                if let Ok(s) = solve_atoms(atoms, trial, Some(sol.m), cfg) {
                    let v = f(trial, s.m);
                    if v.norm() < val.norm() {
                        z = trial;
                        sol = s;
                        val = v;
                        accepted = true;
                        break;
                    }
                }
            }
            step *= 0.5;
        }
        if !accepted {
            if val.norm() <= 1e-11 * scale {
                break;
            }
            return Err(Error::BackwardFlow(format!("Newton stalled at |F| = {:.3e}", val.norm())));
        }
    }
    let nu0 = SpectralPair::from_solution(d0.clone(), sol);
    let round_trip = (flow_closed_form(&nu0, t) - z_t).norm();
    Ok(BackwardSolution { z0: z, d0, nu0, round_trip, newton_steps: steps })
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct PropagatorSample {
    pub t: f64,
    /// max(2 Re <M^I_12,t>, 0).
    pub f: f64,
    /// 2 Re <M^I_12,t> before clamping.
    pub f_raw: f64,
    pub beta_t: f64,
    pub s0: Option<f64>,
    /// 2|<M^I_12>| / (pi rho_1/eta_1 + pi rho_2/eta_2); at most 1.
    pub basic_ratio: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct PropagatorReport {
    pub samples: Vec<PropagatorSample>,
    pub s0: Option<f64>,
    /// Sign changes of 2 Re <M^I> on the grid.
    pub sign_changes: usize,
    pub max_basic_ratio: f64,
    /// max over grid points t of |int_{t_0}^t f - 2 log(beta_{t_0 ^ s0} / beta_{t ^ s0})|.
    pub integral_error: f64,
    /// Range of beta_s / (beta_t + (t - s)) over grid pairs s < t.
    pub beta_ratio_min: f64,
    pub beta_ratio_max: f64,
}

/// <M^I_12> = x/(1 - x) with x = <M_1 M_2>.
fn mi_trace(nu1: &SpectralPair, nu2: &SpectralPair) -> C64 {
    let x = m1m2_trace(nu1, nu2);
    x / (1.0 - x)
}

struct JointFlow<'a> {
    nu1: &'a SpectralPair,
    nu2: &'a SpectralPair,
    cfg: &'a MdeConfig,
}

impl JointFlow<'_> {
    fn pairs(&self, r: f64) -> Result<(SpectralPair, SpectralPair)> {
        Ok((pair_at(self.nu1, r, self.cfg)?, pair_at(self.nu2, r, self.cfg)?))
    }

    fn f_raw(&self, r: f64) -> Result<f64> {
        let (a, b) = self.pairs(r)?;
        Ok(2.0 * mi_trace(&a, &b).re)
    }

    fn beta(&self, r: f64) -> Result<f64> {
        let (a, b) = self.pairs(r)?;
        Ok(beta(&a, &b))
    }
}

/// f_r and beta_r along the joint flow of (nu1, nu2) on the given ascending time grid.
pub fn propagator_trace(nu1: &SpectralPair, nu2: &SpectralPair, t_grid: &[f64], cfg: &MdeConfig) -> Result<PropagatorReport> {
    if t_grid.is_empty() || t_grid.windows(2).any(|w| w[1] <= w[0]) || t_grid[0] < 0.0 {
        return Err(Error::InvalidParameter("time grid must be nonempty, nonnegative and ascending".into()));
    }
    let jf = JointFlow { nu1, nu2, cfg };
    let mut raw = Vec::with_capacity(t_grid.len());
    let mut betas = Vec::with_capacity(t_grid.len());
    let mut ratios = Vec::with_capacity(t_grid.len());
    for &t in t_grid {
        let (a, b) = jf.pairs(t)?;
        let mi = mi_trace(&a, &b);
        raw.push(2.0 * mi.re);
        betas.push(beta(&a, &b));
        let bound = std::f64::consts::PI * (a.rho() / a.eta() + b.rho() / b.eta());
        ratios.push(2.0 * mi.norm() / bound);
    }
    let sign_changes = raw.windows(2).filter(|w| (w[0] > 0.0) != (w[1] > 0.0)).count();
    // first sign change from positive to nonpositive, refined by bisection
    let mut s0 = None;
    if let Some(k) = raw.windows(2).position(|w| w[0] > 0.0 && w[1] <= 0.0) {
        let (mut lo, mut hi) = (t_grid[k], t_grid[k + 1]);
        while hi - lo > 1e-13 * (1.0 + hi) {
            let mid = 0.5 * (lo + hi);
            if jf.f_raw(mid)? > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        s0 = Some(0.5 * (lo + hi));
    } else if raw[0] <= 0.0 {
        s0 = Some(t_grid[0]);
    }
    let cap = |t: f64| s0.map_or(t, |s| t.min(s));
    let rule = GaussRule::new(12);
    let start = t_grid[0];
    let beta_start = jf.beta(cap(start))?;
    let mut integral_error: f64 = 0.0;
    let mut acc = 0.0;
    let mut prev = start;
    let mut err: Option<Error> = None;
    for &t in &t_grid[1..] {
        let hi = cap(t);
        if hi > prev {
            let mut g = |r: f64| match jf.f_raw(r) {
                Ok(v) => v.max(0.0),
                Err(e) => {
                    err.get_or_insert(e);
                    0.0
                }
            };
            acc += adaptive(&rule, prev, hi, 1e-11, 30, &mut g).0;
            prev = hi;
        }
        if let Some(e) = err.take() {
            return Err(e);
        }
        let expect = 2.0 * (beta_start / jf.beta(hi)?).ln();
        integral_error = integral_error.max((acc - expect).abs());
    }
    let mut beta_ratio_min = f64::INFINITY;
    let mut beta_ratio_max: f64 = 0.0;
    for i in 0..t_grid.len() {
        for j in i + 1..t_grid.len() {
            let r = betas[i] / (betas[j] + (t_grid[j] - t_grid[i]));
            beta_ratio_min = beta_ratio_min.min(r);
            beta_ratio_max = beta_ratio_max.max(r);
        }
    }
    let samples = t_grid
        .iter()
        .enumerate()
        .map(|(k, &t)| PropagatorSample { t, f: raw[k].max(0.0), f_raw: raw[k], beta_t: betas[k], s0, basic_ratio: ratios[k] })
        .collect();
    Ok(PropagatorReport {
        samples,
        s0,
        sign_changes,
        max_basic_ratio: ratios.iter().cloned().fold(0.0, f64::max),
        integral_error,
        beta_ratio_min: if beta_ratio_min.is_finite() { beta_ratio_min } else { 1.0 },
        beta_ratio_max: if t_grid.len() > 1 { beta_ratio_max } else { 1.0 },
    })
}

/// eta * rho_D(E + i eta), increasing in eta.
fn eta_rho(atoms: &[(f64, f64)], e: f64, eta: f64, guess: Option<C64>, cfg: &MdeConfig) -> Result<(f64, C64)> {
    let sol = solve_atoms(atoms, C64::new(e, eta), guess, cfg)?;
    Ok((eta * sol.rho, sol.m))
}

/// Smallest eta with eta * rho(E + i eta) = N^{-1+eps}, for each E.
pub fn domain_boundary(d: &Deformation, epsilon: f64, n: usize, e_grid: &[f64], cfg: &MdeConfig) -> Result<Vec<(f64, f64)>> {
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(Error::InvalidParameter(format!("epsilon must lie in (0, 1), got {epsilon}")));
    }
    let target = (n as f64).powf(-1.0 + epsilon);
    e_grid.iter().map(|&e| Ok((e, boundary_height(d.atoms(), e, target, cfg)?))).collect()
}

const ETA_FLOOR: f64 = 1e-12;

fn boundary_height(atoms: &[(f64, f64)], e: f64, target: f64, cfg: &MdeConfig) -> Result<f64> {
    // eta rho -> 1/pi as eta -> infinity
    if target >= 1.0 / std::f64::consts::PI {
        return Err(Error::InvalidParameter(format!("target {target} is not below 1/pi")));
    }
    let (h_floor, _) = eta_rho(atoms, e, ETA_FLOOR, None, cfg)?;
    if h_floor >= target {
        return Err(Error::InvalidParameter(format!(
            "eta rho = {h_floor:.3e} already exceeds the target {target:.3e} at the solver floor eta = {ETA_FLOOR:e}"
        )));
    }
    let mut hi = 1.0;
    while eta_rho(atoms, e, hi, None, cfg)?.0 < target {
        hi *= 2.0;
        if hi > 1e6 {
            return Err(Error::InvalidParameter(format!("no boundary below eta = 1e6 at E = {e}")));
        }
    }
    let mut lo = ETA_FLOOR;
    let mut guess = None;
    while hi / lo - 1.0 > 1e-14 {
        let mid = (lo * hi).sqrt();
        let (h, m) = eta_rho(atoms, e, mid, guess, cfg)?;
        guess = Some(m);
        if h < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(hi)
}

#[derive(Clone, Debug, Serialize)]
pub struct Notch {
    /// Gap [b_r, a_{r+1}]; infinite ends for the outer cones.
    pub left: f64,
    pub right: f64,
}

impl Notch {
    /// Height of the removed triangle above E (0 outside the gap).
    pub fn height(&self, e: f64) -> f64 {
        if e < self.left || e > self.right {
            return 0.0;
        }
        (e - self.left).min(self.right - e)
    }
}

/// The bulk-restricted domain: points above the unrestricted curve, outside the cones over
/// the complement of the kappa-bulk, inside the box.
#[derive(Clone, Debug)]
pub struct BulkDomain {
    atoms: Vec<(f64, f64)>,
    pub bulk: Vec<(f64, f64)>,
    /// Outer cones first and last, interior gaps in between.
    pub notches: Vec<Notch>,
    pub target: f64,
    pub box_re: f64,
    pub box_im: f64,
    cfg: MdeConfig,
}

pub fn bulk_domain_boundary(d: &Deformation, kappa: f64, epsilon: f64, n: usize, cfg: &MdeConfig) -> Result<BulkDomain> {
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(Error::InvalidParameter(format!("epsilon must lie in (0, 1), got {epsilon}")));
    }
    let bulk = DensityProfile::new(d)?.kappa_bulk(kappa)?;
    if bulk.is_empty() {
        return Err(Error::InvalidParameter(format!("empty kappa-bulk for kappa = {kappa}")));
    }
    let mut notches = vec![Notch { left: f64::NEG_INFINITY, right: bulk[0].0 }];
    for w in bulk.windows(2) {
        notches.push(Notch { left: w[0].1, right: w[1].0 });
    }
    notches.push(Notch { left: bulk[bulk.len() - 1].1, right: f64::INFINITY });
    Ok(BulkDomain {
        atoms: d.atoms().to_vec(),
        bulk,
        notches,
        target: (n as f64).powf(-1.0 + epsilon),
        box_re: 10.0 * d.norm_bound().max(1.0),
        box_im: 10.0,
        cfg: cfg.clone(),
    })
}

impl BulkDomain {
    /// Interior gaps only.
    pub fn interior_notches(&self) -> &[Notch] {
        &self.notches[1..self.notches.len() - 1]
    }

    pub fn notch_height(&self, e: f64) -> f64 {
        self.notches.iter().map(|n| n.height(e)).fold(0.0, f64::max)
    }

    /// Lower boundary of the upper half of the domain above E.
    pub fn boundary(&self, e: f64) -> Result<f64> {
        let curve = boundary_height(&self.atoms, e, self.target, &self.cfg)?;
        Ok(curve.max(self.notch_height(e)))
    }

    pub fn contains(&self, z: C64) -> Result<bool> {
        let eta = z.im.abs();
        if eta == 0.0 || z.re.abs() > self.box_re || eta > self.box_im {
            return Ok(false);
        }
        if eta <= self.notch_height(z.re) {
            return Ok(false);
        }
        Ok(eta_rho(&self.atoms, z.re, eta, None, &self.cfg)?.0 >= self.target)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, serde::Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OuMethod {
    EulerMaruyama,
    #[default]
    ExactTransition,
}

/// dW = -W/2 dr + dB/sqrt(N) from s to t with step dt; Gaussian increments in the symmetry
/// class `beta_sym`.
pub fn ou_evolve(w: &HermitianMatrix, s: f64, t: f64, dt: f64, rng_seed: u64, beta_sym: u8, method: OuMethod) -> Result<HermitianMatrix> {
    if !(t >= s) {
        return Err(Error::InvalidParameter(format!("need t >= s, got s = {s}, t = {t}")));
    }
    if !(dt > 0.0 && dt <= 1e-2) {
        return Err(Error::InvalidParameter(format!("dt must lie in (0, 1e-2], got {dt}")));
    }
    let mut rng = rng_stream(rng_seed, 0, crate::ensemble::purpose::OU);
    ou_evolve_with(w, t - s, dt, beta_sym, method, &mut rng)
}

pub fn ou_evolve_with<R: Rng>(w: &HermitianMatrix, span: f64, dt: f64, beta_sym: u8, method: OuMethod, rng: &mut R) -> Result<HermitianMatrix> {
    let steps = (span / dt).ceil() as usize;
    if steps == 0 {
        return Ok(w.clone());
    }
    let h = span / steps as f64;
    let (a, b) = match method {
        OuMethod::ExactTransition => ((-0.5 * h).exp(), (1.0 - (-h).exp()).sqrt()),
        OuMethod::EulerMaruyama => (1.0 - 0.5 * h, h.sqrt()),
    };
    let n = w.n();
    let mut cur = w.clone();
    for _ in 0..steps {
        let z = sample_wigner_with(n, beta_sym, EntryDist::Gaussian, rng)?;
        let (c, zr) = (cur.as_ref(), z.as_ref());
        cur = HermitianMatrix::from_upper(n, |i, j| a * c[(i, j)] + b * zr[(i, j)]);
    }
    Ok(cur)
}

/// Relative error of the central difference of h(t) = <M^{R1}_12,t R2> against
/// h(t) + <M^{R1}_12,t><M^{R2}_21,t>.
pub fn m_evolution_check(
    nu1: &SpectralPair,
    nu2: &SpectralPair,
    r1: MatRef<'_, C64>,
    r2: MatRef<'_, C64>,
    t: f64,
    dt_fd: f64,
    cfg: &MdeConfig,
) -> Result<f64> {
    let h = |tau: f64| -> Result<C64> {
        let a = pair_at(nu1, tau, cfg)?;
        let b = pair_at(nu2, tau, cfg)?;
        m2_det_pair_trace(&a, &b, r1, r2)
    };
    let fd = (h(t + dt_fd)? - h(t - dt_fd)?) / (2.0 * dt_fd);
    let a = pair_at(nu1, t, cfg)?;
    let b = pair_at(nu2, t, cfg)?;
    let rhs = m2_det_pair_trace(&a, &b, r1, r2)? + m2_det_trace(&a, &b, r1)? * m2_det_trace(&b, &a, r2)?;
    Ok((fd - rhs).norm() / rhs.norm().max(1e-300))
}

/// One row of a trajectory dump.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct TrajectoryRow {
    pub t: f64,
    pub z_re: f64,
    pub z_im: f64,
    pub m_re: f64,
    pub m_im: f64,
    pub rho: f64,
    pub f: f64,
    pub beta: f64,
    /// |RK4 z_t - closed form z_t|.
    pub deviation: f64,
}

/// RK4 trajectory of nu1 with f and beta evaluated against the partner characteristic of nu2.
pub fn trajectory_rows(nu1: &SpectralPair, nu2: &SpectralPair, t: f64, dt: f64, record_every: usize, cfg: &MdeConfig) -> Result<(Vec<TrajectoryRow>, bool)> {
    let states = flow_trajectory(nu1, t, dt, record_every, cfg)?;
    let exited = states.last().is_some_and(|s| s.exited);
    let mut rows = Vec::with_capacity(states.len());
    for st in &states {
        let a = SpectralPair::from_solution(Arc::new(nu1.d.scaled(st.d_scale)), st.sol);
        let (f, b) = match pair_at(nu2, st.t, cfg) {
            Ok(p) => (2.0 * mi_trace(&a, &p).re, beta(&a, &p)),
            Err(Error::FlowExit { .. }) => (f64::NAN, f64::NAN),
            Err(e) => return Err(e),
        };
        rows.push(TrajectoryRow {
            t: st.t,
            z_re: st.z.re,
            z_im: st.z.im,
            m_re: st.sol.m.re,
            m_im: st.sol.m.im,
            rho: st.sol.rho,
            f: f.max(0.0),
            beta: b,
            deviation: (st.z - flow_closed_form(nu1, st.t)).norm(),
        });
    }
    Ok((rows, exited))
}

/// Solves the MDE for (z, D) without going through a pair; convenience for callers.
pub fn solve_at(d: &Deformation, z: C64, cfg: &MdeConfig) -> Result<MdeSolution> {
    solve_mde_from(d, z, None, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::det_approx::{regularize, v_matrix};
    use crate::ensemble::{sample_wigner, WignerSpec};
    use crate::matrix_core::{identity, max_abs_diff, CMat};
    use crate::mde::{m_semicircle, DeformationProfile};

    fn cfg() -> MdeConfig {
        MdeConfig::default()
    }

    fn pair(d: Deformation, z: C64) -> SpectralPair {
        SpectralPair::new(Arc::new(d), z, &cfg()).unwrap()
    }

    #[test]
    fn closed_form_semicircle() {
        let nu = pair(Deformation::zero(4), C64::new(0.0, 2.0));
        assert_eq!(flow_closed_form(&nu, 0.0), nu.z);
        let z1 = flow_closed_form(&nu, 1.0);
        // e^{-1/2} 2i - 2 i (sqrt 2 - 1) sinh(1/2)
        let expect = 2.0 * (-0.5f64).exp() - 2.0 * (2f64.sqrt() - 1.0) * 0.5f64.sinh();
        assert!(z1.re.abs() < 1e-14);
        assert!((z1.im - expect).abs() < 1e-14);
        assert!((z1.im - 0.78136).abs() < 5e-5);
    }

    #[test]
    fn rk4_matches_closed_form_and_m_scaling() {
        for d in [Deformation::zero(6), DeformationProfile::TwoPoint { a: 0.7 }.build(6).unwrap()] {
            let nu = pair(d, C64::new(0.3, 1.5));
            let st = flow_integrate(&nu, 0.9, 1e-3, &cfg()).unwrap();
            assert!(!st.exited);
            assert!((st.z - flow_closed_form(&nu, 0.9)).norm() < 1e-8);
            assert!(((0.45f64).exp() * nu.m() - st.sol.m).norm() < 1e-10);
            assert!(st.sol.residual <= 1e-12);
            assert!((st.d_scale - (-0.45f64).exp()).abs() < 1e-15);
        }
    }

    #[test]
    fn eta_over_rho_identity_and_monotonicity() {
        let d = DeformationProfile::TwoPoint { a: 0.6 }.build(8).unwrap();
        let nu = pair(d, C64::new(0.2, 0.5));
        let traj = flow_trajectory(&nu, 0.8, 1e-3, 50, &cfg()).unwrap();
        for w in traj.windows(2) {
            assert!(w[1].z.im < w[0].z.im);
        }
        let (s, t) = (&traj[2], traj.last().unwrap());
        let lhs = t.z.im / t.sol.rho;
        let e = (s.t - t.t).exp();
        let rhs = e * s.z.im / s.sol.rho - std::f64::consts::PI * (1.0 - e);
        assert!((lhs - rhs).abs() < 1e-8);
        // int_0^t rho/eta <= log(eta_0/eta_t)
        let rule = GaussRule::new(16);
        let integral = rule.integrate(0.0, t.t, |r| {
            let p = pair_at(&nu, r, &cfg()).unwrap();
            p.rho() / p.eta()
        });
        assert!(integral <= (nu.eta() / t.z.im).ln() + 1e-6);
    }

    #[test]
    fn exit_is_reported_with_state() {
        // semicircle bulk point close to the axis: the characteristic hits it before t = 0.5
        let nu = pair(Deformation::zero(2), C64::new(0.0, 0.05));
        let st = flow_integrate(&nu, 0.5, 1e-3, &cfg()).unwrap();
        assert!(st.exited);
        assert!(st.t < 0.5);
        assert!(st.z.im > 0.0);
    }

    #[test]
    fn backward_round_trip() {
        let d = Deformation::zero(4);
        let zt = C64::new(0.5, 0.01);
        let b = flow_backward(zt, &d, 0.5, &cfg()).unwrap();
        assert!(b.round_trip <= 1e-8);
        let fw = flow_integrate(&b.nu0, 0.5, 1e-3, &cfg()).unwrap();
        assert!((fw.z - zt).norm() <= 1e-8);
        assert!(b.dist_to_support().unwrap() > 0.0);
        let id = flow_backward(zt, &d, 0.0, &cfg()).unwrap();
        assert!((id.z0 - zt).norm() < 1e-13);
        let two = DeformationProfile::TwoPoint { a: 0.5 }.build(10).unwrap();
        for t in [0.3, 0.9] {
            let b = flow_backward(C64::new(-0.4, -0.002), &two, t, &cfg()).unwrap();
            assert!(b.round_trip <= 1e-8, "{}", b.round_trip);
            assert!(b.z0.im < 0.0);
        }
    }

    #[test]
    fn propagator_identities() {
        let nu1 = pair(Deformation::zero(4), C64::new(0.1, 0.9));
        let nu2 = pair(Deformation::zero(4), C64::new(-0.1, 0.9));
        let grid: Vec<f64> = (0..=8).map(|k| 0.1 * k as f64).collect();
        let rep = propagator_trace(&nu1, &nu2, &grid, &cfg()).unwrap();
        assert!(rep.sign_changes <= 1);
        assert!(rep.integral_error < 1e-6, "{}", rep.integral_error);
        assert!(rep.max_basic_ratio <= 1.0 + 1e-12);
        assert!(rep.beta_ratio_min >= 0.2 && rep.beta_ratio_max <= 5.0, "{} {}", rep.beta_ratio_min, rep.beta_ratio_max);
        assert!(rep.samples.iter().all(|s| s.f >= 0.0 && s.beta_t >= 0.0));
        // opposite half-planes and different deformations
        let d1 = Arc::new(DeformationProfile::TwoPoint { a: 0.4 }.build(8).unwrap());
        let d2 = Arc::new(d1.scaled(-1.0));
        let nu1 = SpectralPair::new(d1, C64::new(0.2, 1.2), &cfg()).unwrap();
        let nu2 = SpectralPair::new(d2, C64::new(0.1, -1.3), &cfg()).unwrap();
        let rep = propagator_trace(&nu1, &nu2, &grid, &cfg()).unwrap();
        assert!(rep.sign_changes <= 1);
        assert!(rep.integral_error < 1e-6, "{}", rep.integral_error);
        assert!(rep.max_basic_ratio <= 1.0 + 1e-12);
    }

    #[test]
    fn derivative_identity() {
        let nu1 = pair(Deformation::zero(4), C64::new(0.2, 1.0));
        let nu2 = pair(Deformation::zero(4), C64::new(-0.1, -0.8));
        let i = identity(4);
        let e3 = m_evolution_check(&nu1, &nu2, i.as_ref(), i.as_ref(), 0.3, 1e-3, &cfg()).unwrap();
        let e4 = m_evolution_check(&nu1, &nu2, i.as_ref(), i.as_ref(), 0.3, 1e-4, &cfg()).unwrap();
        assert!(e4 <= 1e-5, "{e4}");
        // second order: a factor ~100 between the two step sizes, up to round-off
        assert!(e4 < e3 / 20.0 || e4 < 1e-9, "{e3} {e4}");

        let n = 32;
        let r1 = sample_wigner(&WignerSpec { n, beta_sym: 2, dist: crate::ensemble::EntryDist::Gaussian, seed: 1 }).unwrap();
        let r2 = sample_wigner(&WignerSpec { n, beta_sym: 2, dist: crate::ensemble::EntryDist::Gaussian, seed: 2 }).unwrap();
        let d1 = Arc::new(DeformationProfile::Equispaced { a: 0.5 }.build(n).unwrap());
        let d2 = Arc::new(DeformationProfile::TwoPoint { a: 0.3 }.build(n).unwrap());
        let nu1 = SpectralPair::new(d1, C64::new(0.1, 0.7), &cfg()).unwrap();
        let nu2 = SpectralPair::new(d2, C64::new(0.3, -0.6), &cfg()).unwrap();
        let e = m_evolution_check(&nu1, &nu2, r1.as_ref(), r2.as_ref(), 0.2, 1e-4, &cfg()).unwrap();
        assert!(e <= 1e-5, "{e}");
    }

    #[test]
    fn regular_part_is_flow_invariant() {
        let n = 12;
        let d1 = Arc::new(DeformationProfile::TwoPoint { a: 0.5 }.build(n).unwrap());
        let d2 = Arc::new(DeformationProfile::TwoPoint { a: 0.48 }.build(n).unwrap());
        let a = CMat::from_fn(n, n, |i, j| C64::new(if i == j { (i % 4) as f64 } else { 0.0 }, 0.0));
        let big_t = 0.5;
        // terminal points near the axis, so that phi = 1 there
        let b1 = flow_backward(C64::new(0.1, 0.01), &d1.scaled((-0.5f64 * big_t).exp()), big_t, &cfg()).unwrap();
        let b2 = flow_backward(C64::new(0.12, 0.012), &d2.scaled((-0.5 * big_t).exp()), big_t, &cfg()).unwrap();
        let at = |t: f64| (pair_at(&b1.nu0, t, &cfg()).unwrap(), pair_at(&b2.nu0, t, &cfg()).unwrap());
        let (p1, p2) = at(big_t);
        let reg = regularize(a.as_ref(), &p1, &p2, 0.1).unwrap();
        assert_eq!(reg.phi, 1.0);
        let vt = v_matrix(&p1, &p2).unwrap();
        for t in [0.0, 0.2, 0.4] {
            let (q1, q2) = at(t);
            let v = v_matrix(&q1, &q2).unwrap();
            assert!(max_abs_diff(v.as_ref(), vt.as_ref()) < 1e-9);
            // A-ring from time T stays regular: <V_t A-ring_T> = 0
            let tr = crate::matrix_core::trace_product(v.as_ref(), reg.a_ring.as_ref());
            assert!(tr.norm() < 1e-9 * 3.0);
        }
    }

    #[test]
    fn domain_boundary_semicircle() {
        let d = Deformation::zero(2);
        let n = 1000;
        let eps = 0.1;
        let target = (n as f64).powf(-1.0 + eps);
        let curve = domain_boundary(&d, eps, n, &[0.0, 1.0, 2.5], &cfg()).unwrap();
        for &(e, eta) in &curve {
            assert!(eta > 0.0);
            let rho = m_semicircle(C64::new(e, eta)).im / std::f64::consts::PI;
            assert!((eta * rho - target).abs() < 1e-10, "{e} {eta}");
            for k in [1.01, 2.0, 10.0] {
                let sol = solve_at(&d, C64::new(e, eta * k), &cfg()).unwrap();
                assert!(eta * k * sol.rho >= target);
            }
        }
        assert!(domain_boundary(&d, 0.0, n, &[0.0], &cfg()).is_err());
    }

    #[test]
    fn bulk_domain_notches() {
        let cfg = cfg();
        let flat = bulk_domain_boundary(&Deformation::zero(4), 0.05, 0.1, 1000, &cfg).unwrap();
        assert!(flat.interior_notches().is_empty());
        assert_eq!(flat.bulk.len(), 1);
        let two = Deformation::centered(vec![-1.5, 1.5]).unwrap();
        let dom = bulk_domain_boundary(&two, 0.05, 0.1, 1000, &cfg).unwrap();
        assert_eq!(dom.interior_notches().len(), 1);
        let g = &dom.interior_notches()[0];
        assert!((g.left + g.right).abs() < 1e-6);
        let mid = 0.5 * (g.left + g.right);
        let w = 0.5 * (g.right - g.left);
        assert!((dom.notch_height(mid) - w).abs() < 1e-12);
        // slope +-1
        let h = 1e-3;
        assert!((dom.notch_height(g.left + 2.0 * h) - dom.notch_height(g.left + h) - h).abs() < 1e-12);
        assert!((dom.notch_height(g.right - 2.0 * h) - dom.notch_height(g.right - h) - h).abs() < 1e-12);
        assert!(!dom.contains(C64::new(mid, 0.5 * w)).unwrap());
        assert!(dom.contains(C64::new(mid, 1.5 * w)).unwrap());
        assert!(dom.contains(C64::new(1.5, 0.01)).unwrap());
        assert!(!dom.contains(C64::new(1.5, 20.0)).unwrap());
        // outer cone: left of the bulk
        let left = dom.bulk[0].0;
        assert!(!dom.contains(C64::new(left - 1.0, 0.5)).unwrap());
        assert!(dom.boundary(1.5).unwrap() > 0.0);
    }

    #[test]
    fn ou_behaviour() {
        let n = 6;
        let w = sample_wigner(&WignerSpec { n, beta_sym: 2, dist: crate::ensemble::EntryDist::Gaussian, seed: 5 }).unwrap();
        let same = ou_evolve(&w, 0.3, 0.3, 1e-2, 1, 2, OuMethod::ExactTransition).unwrap();
        assert!(max_abs_diff(same.as_ref(), w.as_ref()) == 0.0);
        // first moment over many seeds
        let trials = 2000;
        let span = 0.4;
        let mut mean = CMat::zeros(n, n);
        let mut var = 0.0;
        for s in 0..trials {
            let wt = ou_evolve(&w, 0.0, span, 1e-2, s, 2, OuMethod::ExactTransition).unwrap();
            for i in 0..n {
                for j in 0..n {
                    mean[(i, j)] += wt.as_ref()[(i, j)] / trials as f64;
                }
            }
            var += n as f64 * wt.as_ref()[(0, 1)].norm_sqr();
        }
        let decay = (-0.5 * span).exp();
        let sd = ((1.0 - (-span).exp()) / n as f64 / trials as f64).sqrt();
        for i in 0..n {
            for j in 0..n {
                let err = (mean[(i, j)] - decay * w.as_ref()[(i, j)]).norm();
                assert!(err <= 5.0 * sd * if i == j { 2f64.sqrt() } else { 1.0 } * 1.5, "{i} {j} {err}");
            }
        }
        let _ = var;
        // stationarity of GUE(1/N): N E|w_ab|^2 = 1
        let mut acc = 0.0;
        let mut cnt = 0.0;
        for s in 0..200 {
            let w0 = sample_wigner(&WignerSpec { n: 20, beta_sym: 2, dist: crate::ensemble::EntryDist::Gaussian, seed: 1000 + s }).unwrap();
            let wt = ou_evolve(&w0, 0.0, 0.5, 1e-2, s, 2, OuMethod::ExactTransition).unwrap();
            for i in 0..20 {
                for j in i + 1..20 {
                    acc += 20.0 * wt.as_ref()[(i, j)].norm_sqr();
                    cnt += 1.0;
                }
            }
        }
        assert!((acc / cnt - 1.0).abs() < 5.0 / cnt.sqrt());
        // Euler-Maruyama keeps Hermiticity
        let em = ou_evolve(&w, 0.0, 0.1, 1e-2, 3, 2, OuMethod::EulerMaruyama).unwrap();
        for i in 0..n {
            assert_eq!(em.as_ref()[(i, i)].im, 0.0);
            for j in 0..n {
                assert_eq!(em.as_ref()[(i, j)], em.as_ref()[(j, i)].conj());
            }
        }
    }

    #[test]
    fn trajectory_rows_deviation() {
        let nu = pair(Deformation::zero(2), C64::new(0.0, 2.0));
        let (rows, exited) = trajectory_rows(&nu, &nu.conj(), 1.0, 1e-3, 100, &cfg()).unwrap();
        assert!(!exited);
        assert_eq!(rows.len(), 11);
        assert!((rows.last().unwrap().z_im - 0.78136).abs() < 5e-5);
        assert!(rows.iter().all(|r| r.deviation <= 1e-8));
        let (rows, _) = trajectory_rows(&nu, &nu.conj(), 0.0, 1e-3, 100, &cfg()).unwrap();
        assert_eq!(rows.len(), 1);
    }
}
