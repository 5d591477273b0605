//! Desk-scale acceptance checks. A claim "X ≺ Y" is accepted when the q-percentile of X/Y over
//! trials and admissible indices stays below a ceiling at every N and its log-log slope in N
//! stays below `slope_ceiling`. Deterministic relations are checked on parameter grids.

use num_complex::Complex64 as C64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::sync::Arc;

use crate::det_approx::{
    beta, beta_star, delta2, gamma_hat, m2_det, m2_det_pair_trace, m2_det_trace, phi_from, v_trace, ControlParams,
    SpectralPair, REAL_AXIS_ETA,
};
use crate::ensemble::{deform_and_solve, purpose, random_unit_vector, rng_stream, sample_wigner_with, EntryDist};
use crate::error::{Error, Result};
use crate::flow::{flow_backward, ou_evolve_with, pair_at, OuMethod};
use crate::matrix_core::{CMat, SpectralDecomposition};
use crate::mde::{bulk_indices, Deformation, DeformationProfile, DensityProfile, MdeConfig};

pub const TEST_NAMES: [&str; 8] = [
    "overlap-decay",
    "eth",
    "local-law-avg",
    "local-law-iso",
    "rigidity",
    "stability-relations",
    "admissibility",
    "zig-flow",
];

/// Diagonal observables A (in the standard basis).
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ObservableSpec {
    Identity,
    /// Projection onto the first `fraction * N` coordinates.
    Projection { fraction: f64 },
    /// diag((-1)^i).
    Alternating,
    /// diag(cos(2 pi freq i / N)).
    Cosine { freq: f64 },
}

impl ObservableSpec {
    pub fn diagonal(&self, n: usize) -> Result<Vec<f64>> {
        Ok(match self {
            Self::Identity => vec![1.0; n],
            Self::Projection { fraction } => {
                if !(0.0..=1.0).contains(fraction) {
                    return Err(Error::Config(format!("projection fraction {fraction} outside [0, 1]")));
                }
                let k = (fraction * n as f64).round() as usize;
                (0..n).map(|i| if i < k { 1.0 } else { 0.0 }).collect()
            }
            Self::Alternating => (0..n).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect(),
            Self::Cosine { freq } => {
                (0..n).map(|i| (2.0 * std::f64::consts::PI * freq * i as f64 / n as f64).cos()).collect()
            }
        })
    }

    pub fn id(&self) -> String {
        match self {
            Self::Identity => "identity".into(),
            Self::Projection { fraction } => format!("projection({fraction})"),
            Self::Alternating => "alternating".into(),
            Self::Cosine { freq } => format!("cosine({freq})"),
        }
    }
}

/// A diagonal observable with its shifts A - cI.
#[derive(Clone, Debug)]
struct DiagObs {
    a: Vec<f64>,
}

impl DiagObs {
    /// ||A - cI||.
    fn norm_shifted(&self, c: C64) -> f64 {
        self.a.iter().map(|&x| (x - c).norm()).fold(0.0, f64::max)
    }

    fn norm(&self) -> f64 {
        self.norm_shifted(C64::new(0.0, 0.0))
    }

    fn matrix(&self, c: C64) -> CMat {
        let n = self.a.len();
        CMat::from_fn(n, n, |i, j| if i == j { self.a[i] - c } else { C64::new(0.0, 0.0) })
    }
}

fn eye(n: usize) -> CMat {
    CMat::from_fn(n, n, |i, j| C64::new(if i == j { 1.0 } else { 0.0 }, 0.0))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LocalLawConfig {
    pub d1: DeformationProfile,
    pub d2: DeformationProfile,
    /// Quantile levels of rho_{D1} giving Re z1.
    pub levels: Vec<f64>,
    /// Re z2 - Re z1.
    pub offsets: Vec<f64>,
    /// The first this many spectral pairs are also used for the isotropic laws.
    pub iso_pairs: usize,
}

impl Default for LocalLawConfig {
    fn default() -> Self {
        Self {
            d1: DeformationProfile::TwoPoint { a: 0.5 },
            d2: DeformationProfile::TwoPoint { a: 0.45 },
            levels: vec![0.5, 0.3, 0.7],
            offsets: vec![0.0, 0.03],
            iso_pairs: 4,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ZigConfig {
    pub n: usize,
    pub trials: usize,
    /// Flow time T; characteristics start at the backward solution of the terminal targets.
    pub t_final: f64,
    /// Number of time intervals on [0, T].
    pub points: usize,
    pub ou_dt: f64,
    /// The ceiling is N^ceiling_exponent.
    pub ceiling_exponent: f64,
    /// Terminal Re z = quantile level of rho_{D1} (deformations from `local_law`). The defaults
    /// coincide with the first local-law spectral pair so the endpoints can be compared.
    pub level: f64,
    pub offset: f64,
    /// Terminal spectral parameters in opposite half-planes.
    pub opposite: bool,
}

impl Default for ZigConfig {
    fn default() -> Self {
        Self { n: 512, trials: 10, t_final: 0.9, points: 20, ou_dt: 0.01, ceiling_exponent: 0.2, level: 0.5, offset: 0.0, opposite: false }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    /// Size used to build the deformations (only their spectral distribution matters).
    pub n: usize,
    pub pairs: Vec<(DeformationProfile, DeformationProfile)>,
    /// (level of rho_{D1}, level of rho_{D2}) for Re z1, Re z2.
    pub levels: Vec<(f64, f64)>,
    pub etas: Vec<(f64, f64)>,
    /// Shifts x in the vague monotonicity check.
    pub x_grid: Vec<f64>,
    /// Terminal Im z for the admissibility flows, reached at time `flow_t`.
    pub flow_eta: f64,
    pub flow_t: f64,
    pub flow_points: usize,
    /// Ceiling for all measured constants.
    pub ceiling: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            n: 64,
            pairs: vec![
                (DeformationProfile::Zero, DeformationProfile::Zero),
                (DeformationProfile::TwoPoint { a: 0.3535533905932738 }, DeformationProfile::TwoPoint { a: -0.3535533905932738 }),
                (DeformationProfile::TwoPoint { a: 0.5 }, DeformationProfile::TwoPoint { a: 0.45 }),
                (DeformationProfile::Equispaced { a: 1.0 }, DeformationProfile::TwoPoint { a: 0.3 }),
            ],
            levels: vec![(0.5, 0.5), (0.3, 0.35), (0.6, 0.4), (0.75, 0.7), (0.4, 0.45)],
            etas: vec![(1e-3, 1e-3), (1e-2, 1e-3), (0.1, 0.1), (1e-2, 0.05), (0.3, 1e-3)],
            x_grid: vec![0.0, 0.01, 0.1, 0.5],
            flow_eta: 1e-2,
            flow_t: 0.9,
            flow_points: 10,
            ceiling: 20.0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub n_list: Vec<usize>,
    pub trials: usize,
    pub kappa: f64,
    /// Width trimmed from both ends of each bulk interval.
    pub bulk_margin: f64,
    pub delta: f64,
    /// eta = N^{-eta_exponent}.
    pub eta_exponent: f64,
    pub d1: DeformationProfile,
    pub d2: DeformationProfile,
    pub observable: ObservableSpec,
    pub seed: u64,
    pub percentile: f64,
    pub slope_ceiling: f64,
    pub default_magnitude_ceiling: f64,
    /// Per-report overrides of `default_magnitude_ceiling`.
    pub magnitude_ceiling: BTreeMap<String, f64>,
    pub beta_sym: u8,
    pub dist: EntryDist,
    /// Bulk indices per side are thinned to at most this many for pair statistics.
    pub max_pairs_per_side: usize,
    pub local_law: LocalLawConfig,
    pub zig: ZigConfig,
    pub grid: GridConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::full()
    }
}

impl ExperimentConfig {
    pub fn full() -> Self {
        let a = 0.3535533905932738;
        Self {
            n_list: vec![256, 512, 1024],
            trials: 20,
            kappa: 0.05,
            bulk_margin: 0.02,
            delta: 0.1,
            eta_exponent: 0.6,
            d1: DeformationProfile::TwoPoint { a },
            d2: DeformationProfile::TwoPoint { a: -a },
            observable: ObservableSpec::Projection { fraction: 0.5 },
            seed: 1,
            percentile: 0.99,
            slope_ceiling: 0.15,
            default_magnitude_ceiling: 50.0,
            magnitude_ceiling: BTreeMap::new(),
            beta_sym: 2,
            dist: EntryDist::Gaussian,
            max_pairs_per_side: 256,
            local_law: LocalLawConfig::default(),
            zig: ZigConfig::default(),
            grid: GridConfig::default(),
        }
    }

    pub fn smoke() -> Self {
        Self {
            n_list: vec![64, 128, 256],
            trials: 5,
            max_pairs_per_side: 96,
            zig: ZigConfig { n: 128, trials: 3, points: 10, ..ZigConfig::default() },
            ..Self::full()
        }
    }

    pub fn suite(name: &str) -> Result<Self> {
        match name {
            "smoke" => Ok(Self::smoke()),
            "full" => Ok(Self::full()),
            other => Err(Error::Config(format!("unknown suite '{other}' (expected smoke or full)"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_list.is_empty() || self.n_list.windows(2).any(|w| w[1] <= w[0]) {
            return bad(format!("n_list must be nonempty and strictly ascending, got {:?}", self.n_list));
        }
        if self.n_list[0] < 8 {
            return bad("N must be at least 8".into());
        }
        if self.trials < 5 {
            return bad(format!("trials must be at least 5, got {}", self.trials));
        }
        if !(self.eta_exponent > 0.0 && self.eta_exponent < 1.0) {
            return bad(format!("eta_exponent must lie in (0, 1), got {}", self.eta_exponent));
        }
        if !(self.percentile > 0.0 && self.percentile <= 1.0) {
            return bad(format!("percentile must lie in (0, 1], got {}", self.percentile));
        }
        if !(self.kappa > 0.0) || !(self.delta > 0.0) || !(self.bulk_margin >= 0.0) {
            return bad("kappa and delta must be positive, bulk_margin nonnegative".into());
        }
        if self.beta_sym != 1 && self.beta_sym != 2 {
            return bad(format!("beta_sym must be 1 or 2, got {}", self.beta_sym));
        }
        if self.max_pairs_per_side == 0 {
            return bad("max_pairs_per_side must be positive".into());
        }
        if self.zig.trials == 0 || self.zig.points == 0 || !(self.zig.t_final > 0.0 && self.zig.t_final < 1.0) {
            return bad("zig: trials and points must be positive and t_final in (0, 1)".into());
        }
        if !(self.zig.ou_dt > 0.0 && self.zig.ou_dt <= 1e-2) {
            return bad(format!("zig.ou_dt must lie in (0, 0.01], got {}", self.zig.ou_dt));
        }
        if self.local_law.levels.iter().chain(std::iter::once(&self.zig.level)).any(|p| !(*p > 0.0 && *p < 1.0)) {
            return bad("quantile levels must lie in (0, 1)".into());
        }
        for p in [&self.d1, &self.d2, &self.local_law.d1, &self.local_law.d2] {
            if let DeformationProfile::Explicit { eigenvalues } = p {
                if self.n_list.iter().any(|&n| n != eigenvalues.len()) {
                    return bad("explicit deformation profiles only work with a single matching N".into());
                }
            }
        }
        self.observable.diagonal(4)?;
        Ok(())
    }

    pub fn magnitude_ceiling_for(&self, report: &str) -> f64 {
        self.magnitude_ceiling.get(report).copied().unwrap_or(self.default_magnitude_ceiling)
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct NRecord {
    #[serde(rename = "N")]
    pub n: usize,
    pub samples: usize,
    pub q_percentile: f64,
    pub median: f64,
    pub max: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct ScalingReport {
    pub test: String,
    pub statistic: String,
    pub config: serde_json::Value,
    pub per_n: Vec<NRecord>,
    pub percentile: f64,
    pub slope: Option<f64>,
    pub slope_stderr: Option<f64>,
    pub slope_ceiling: f64,
    pub magnitude_ceiling: f64,
    pub pass: bool,
    pub constants: BTreeMap<String, f64>,
    pub notes: Vec<String>,
    /// Raw samples per N, kept for optional dumps.
    #[serde(skip)]
    pub raw: Vec<(usize, Vec<f64>)>,
}

#[derive(Clone, Debug, Serialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub bound: f64,
    /// "le" (value <= bound) or "ge".
    pub relation: String,
    pub pass: bool,
}

impl Check {
    fn le(name: &str, value: f64, bound: f64) -> Self {
        Self { name: name.into(), value, bound, relation: "le".into(), pass: value <= bound }
    }

    fn ge(name: &str, value: f64, bound: f64) -> Self {
        Self { name: name.into(), value, bound, relation: "ge".into(), pass: value >= bound }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GridReport {
    pub test: String,
    pub config: serde_json::Value,
    pub points: usize,
    pub measured: BTreeMap<String, f64>,
    pub checks: Vec<Check>,
    pub pass: bool,
}

#[derive(Clone, Debug, Serialize)]
#[serde(untagged)]
pub enum TestReport {
    Scaling(ScalingReport),
    Grid(GridReport),
}

impl TestReport {
    pub fn name(&self) -> &str {
        match self {
            Self::Scaling(r) => &r.test,
            Self::Grid(r) => &r.test,
        }
    }

    pub fn pass(&self) -> bool {
        match self {
            Self::Scaling(r) => r.pass,
            Self::Grid(r) => r.pass,
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct Regression {
    pub slope: f64,
    pub stderr: f64,
}

/// Least-squares slope of log(value) against log(N), with its standard error.
pub fn scaling_regression(records: &[(usize, f64)]) -> Result<Regression> {
    if records.len() < 3 {
        return Err(Error::Regression(format!("need at least 3 N-values, got {}", records.len())));
    }
    if records.iter().all(|r| r.1 == 0.0) {
        return Ok(Regression { slope: 0.0, stderr: 0.0 });
    }
    if let Some(r) = records.iter().find(|r| !(r.1 > 0.0) || !r.1.is_finite()) {
        return Err(Error::Regression(format!("degenerate percentile {} at N = {}", r.1, r.0)));
    }
    let k = records.len() as f64;
    let xs: Vec<f64> = records.iter().map(|r| (r.0 as f64).ln()).collect();
    let ys: Vec<f64> = records.iter().map(|r| r.1.ln()).collect();
    let mx = xs.iter().sum::<f64>() / k;
    let my = ys.iter().sum::<f64>() / k;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::Regression("all N are equal".into()));
    }
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let ssr: f64 = xs.iter().zip(&ys).map(|(x, y)| (y - my - slope * (x - mx)).powi(2)).sum();
    let stderr = (ssr / (k - 2.0) / sxx).sqrt();
    Ok(Regression { slope, stderr })
}

/// Nearest-rank percentile of an unsorted sample.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((q * v.len() as f64).ceil() as usize).clamp(1, v.len());
    v[rank - 1]
}

struct ReportSpec<'a> {
    test: &'a str,
    statistic: &'a str,
    q: f64,
    slope_ceiling: f64,
    magnitude_ceiling: f64,
}

fn build_report(spec: ReportSpec<'_>, cfg: &ExperimentConfig, raw: Vec<(usize, Vec<f64>)>, constants: BTreeMap<String, f64>) -> ScalingReport {
    let mut notes = Vec::new();
    let per_n: Vec<NRecord> = raw
        .iter()
        .map(|(n, v)| NRecord {
            n: *n,
            samples: v.len(),
            q_percentile: percentile(v, spec.q),
            median: percentile(v, 0.5),
            max: v.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        })
        .collect();
    let mut pass = per_n.iter().all(|r| r.samples > 0 && r.q_percentile <= spec.magnitude_ceiling);
    let (mut slope, mut slope_stderr) = (None, None);
    if per_n.len() >= 3 {
        match scaling_regression(&per_n.iter().map(|r| (r.n, r.q_percentile)).collect::<Vec<_>>()) {
            Ok(reg) => {
                slope = Some(reg.slope);
                slope_stderr = Some(reg.stderr);
                pass &= reg.slope <= spec.slope_ceiling;
            }
            Err(e) => {
                notes.push(e.to_string());
                pass = false;
            }
        }
    } else {
        notes.push(format!("{} N-value(s): slope not fitted, magnitude only", per_n.len()));
    }
    ScalingReport {
        test: spec.test.into(),
        statistic: spec.statistic.into(),
        config: serde_json::to_value(cfg).unwrap_or(serde_json::Value::Null),
        per_n,
        percentile: spec.q,
        slope,
        slope_stderr,
        slope_ceiling: spec.slope_ceiling,
        magnitude_ceiling: spec.magnitude_ceiling,
        pass,
        constants,
        notes,
        raw,
    }
}

fn scaling_spec<'a>(cfg: &ExperimentConfig, test: &'a str, statistic: &'a str) -> ReportSpec<'a> {
    ReportSpec {
        test,
        statistic,
        q: cfg.percentile,
        slope_ceiling: cfg.slope_ceiling,
        magnitude_ceiling: cfg.magnitude_ceiling_for(test),
    }
}

fn trial_key(n: usize, trial: usize) -> u64 {
    ((n as u64) << 32) | trial as u64
}

/// Evenly thinned subsequence of at most `max` elements.
fn thin(idx: &[usize], max: usize) -> Vec<usize> {
    if idx.len() <= max {
        return idx.to_vec();
    }
    let stride = idx.len().div_ceil(max);
    idx.iter().step_by(stride).cloned().collect()
}

struct Side {
    d: Arc<Deformation>,
    profile: DensityProfile,
    gamma: Vec<f64>,
    bulk: Vec<usize>,
}

fn side(profile: &DeformationProfile, n: usize, cfg: &ExperimentConfig) -> Result<Side> {
    let d = Arc::new(profile.build(n)?);
    let prof = DensityProfile::new(&d)?;
    let gamma = prof.quantiles(n)?.gamma;
    let intervals = prof.kappa_bulk(cfg.kappa)?;
    let bulk = bulk_indices(&gamma, &intervals, cfg.bulk_margin);
    if bulk.is_empty() {
        return Err(Error::InvalidParameter(format!("empty kappa-bulk for N = {n}, kappa = {}", cfg.kappa)));
    }
    Ok(Side { d, profile: prof, gamma, bulk })
}

fn same_deformation(a: &Deformation, b: &Deformation) -> bool {
    a.eigenvalues() == b.eigenvalues() && a.basis().same_as(b.basis())
}

/// U_1* diag(a) U_2 (or U_1* U_2 without `a`).
fn transformed(dec1: &SpectralDecomposition, dec2: &SpectralDecomposition, a: Option<&[f64]>) -> CMat {
    let u1 = dec1.eigenvectors.as_ref();
    match a {
        None => u1.adjoint() * dec2.eigenvectors.as_ref(),
        Some(a) => {
            let n = a.len();
            let u2 = &dec2.eigenvectors;
            let au = CMat::from_fn(n, n, |i, j| a[i] * u2[(i, j)]);
            u1.adjoint() * &au
        }
    }
}

fn resolvent_vec(eigs: &[f64], z: C64) -> Vec<C64> {
    eigs.iter().map(|&l| 1.0 / (C64::new(l, 0.0) - z)).collect()
}

/// (1/N) sum_ij g1_i P(i, j) g2_j.
fn contract<F: Fn(usize, usize) -> C64>(n: usize, g1: &[C64], g2: &[C64], p: F) -> C64 {
    let mut s = C64::new(0.0, 0.0);
    for i in 0..n {
        let mut r = C64::new(0.0, 0.0);
        for j in 0..n {
            r += p(i, j) * g2[j];
        }
        s += g1[i] * r;
    }
    s / n as f64
}

// ---------------------------------------------------------------------------------------------
// overlap decay, ETH, rigidity

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EnsembleTest {
    Overlap,
    Eth,
    Rigidity,
}

struct EnsembleSetup {
    n: usize,
    s1: Side,
    s2: Side,
    same: bool,
    rows: Vec<usize>,
    cols: Vec<usize>,
    /// Row-major over rows x cols.
    den: Vec<f64>,
    phi_smooth: Vec<f64>,
    phi_sharp: Vec<f64>,
    va: Vec<C64>,
    obs: DiagObs,
}

fn ensemble_setup(cfg: &ExperimentConfig, n: usize, want_pairs: bool, mde: &MdeConfig) -> Result<EnsembleSetup> {
    let s1 = side(&cfg.d1, n, cfg)?;
    let s2 = side(&cfg.d2, n, cfg)?;
    let same = same_deformation(&s1.d, &s2.d);
    let obs = DiagObs { a: cfg.observable.diagonal(n)? };
    let rows = thin(&s1.bulk, cfg.max_pairs_per_side);
    let cols = thin(&s2.bulk, cfg.max_pairs_per_side);
    let (mut den, mut phi_smooth, mut phi_sharp, mut va) = (vec![], vec![], vec![], vec![]);
    if want_pairs {
        let d2sq = delta2(&s1.d, &s2.d);
        let am = obs.matrix(C64::new(0.0, 0.0));
        let mut guess = None;
        let mut p1 = Vec::with_capacity(rows.len());
        for &i in &rows {
            let p = SpectralPair::at_real_energy(s1.d.clone(), s1.gamma[i], guess, mde)?;
            guess = Some(p.m());
            p1.push(p);
        }
        let mut guess = None;
        let mut p2 = Vec::with_capacity(cols.len());
        for &j in &cols {
            let p = SpectralPair::at_real_energy(s2.d.clone(), s2.gamma[j], guess, mde)?;
            guess = Some(p.m());
            p2.push(p);
        }
        for (a, &i) in p1.iter().zip(&rows) {
            for (b, &j) in p2.iter().zip(&cols) {
                let gi = s1.gamma[i];
                let gj = s2.gamma[j];
                let lt = crate::det_approx::linear_term(a, b);
                den.push((d2sq + lt + (gi - gj).powi(2)).min(1.0));
                phi_smooth.push(phi_from(gi - gj, d2sq, REAL_AXIS_ETA, REAL_AXIS_ETA, cfg.delta));
                let sharp = (gi - gj).abs() <= cfg.delta && d2sq <= cfg.delta;
                phi_sharp.push(if sharp { 1.0 } else { 0.0 });
                va.push(v_trace(a, b, am.as_ref())?);
            }
        }
    }
    Ok(EnsembleSetup { n, s1, s2, same, rows, cols, den, phi_smooth, phi_sharp, va, obs })
}

#[derive(Default)]
struct EnsembleSamples {
    overlap: Vec<f64>,
    eth_reg: Vec<f64>,
    eth_sharp: Vec<f64>,
    rigidity: Vec<f64>,
}

fn ensemble_trial(setup: &EnsembleSetup, cfg: &ExperimentConfig, trial: usize, want: &[EnsembleTest]) -> Result<EnsembleSamples> {
    let n = setup.n;
    let nf = n as f64;
    let mut rng = rng_stream(cfg.seed, trial_key(n, trial), purpose::WIGNER);
    let w = sample_wigner_with(n, cfg.beta_sym, cfg.dist, &mut rng)?;
    let dec1 = deform_and_solve(&w, &setup.s1.d)?;
    let dec2 = if setup.same { dec1.clone() } else { deform_and_solve(&w, &setup.s2.d)? };
    let mut out = EnsembleSamples::default();
    if want.contains(&EnsembleTest::Rigidity) {
        for &i in &setup.s1.bulk {
            out.rigidity.push(nf * (dec1.eigenvalues[i] - setup.s1.gamma[i]).abs());
        }
        if !setup.same {
            for &j in &setup.s2.bulk {
                out.rigidity.push(nf * (dec2.eigenvalues[j] - setup.s2.gamma[j]).abs());
            }
        }
    }
    let want_overlap = want.contains(&EnsembleTest::Overlap);
    let want_eth = want.contains(&EnsembleTest::Eth);
    if !(want_overlap || want_eth) {
        return Ok(out);
    }
    let ti = transformed(&dec1, &dec2, None);
    let ta = if want_eth { Some(transformed(&dec1, &dec2, Some(&setup.obs.a))) } else { None };
    let a_norm = setup.obs.norm();
    let sq = nf.sqrt();
    let nc = setup.cols.len();
    for (r, &i) in setup.rows.iter().enumerate() {
        for (c, &j) in setup.cols.iter().enumerate() {
            if i == j {
                // overlap is trivially delta_ij for equal deformations; excluded in general
                continue;
            }
            let k = r * nc + c;
            let o = ti[(i, j)];
            if want_overlap {
                out.overlap.push(nf * o.norm_sqr() * setup.den[k]);
            }
            if let Some(ta) = &ta {
                let oa = ta[(i, j)];
                let shift = setup.phi_smooth[k] * setup.va[k];
                let nrm = setup.obs.norm_shifted(shift);
                let reg = oa - shift * o;
                out.eth_reg.push(if nrm > 0.0 { sq * reg.norm() / nrm } else { 0.0 });
                let sharp = oa - setup.phi_sharp[k] * setup.va[k] * o;
                out.eth_sharp.push(if a_norm > 0.0 { sq * sharp.norm() / a_norm } else { 0.0 });
            }
        }
    }
    Ok(out)
}

/// Overlap decay, ETH and rigidity on shared samples.
pub fn verify_ensemble(cfg: &ExperimentConfig, want: &[EnsembleTest]) -> Result<Vec<ScalingReport>> {
    cfg.validate()?;
    let mde = MdeConfig::default();
    let mut raw: BTreeMap<&str, Vec<(usize, Vec<f64>)>> = BTreeMap::new();
    let mut constants: BTreeMap<String, f64> = BTreeMap::new();
    let want_pairs = want.contains(&EnsembleTest::Overlap) || want.contains(&EnsembleTest::Eth);
    for &n in &cfg.n_list {
        let setup = ensemble_setup(cfg, n, want_pairs, &mde)?;
        constants.insert(format!("bulk_indices_n{n}"), setup.s1.bulk.len() as f64);
        constants.insert(format!("pair_rows_n{n}"), setup.rows.len() as f64);
        constants.insert(format!("delta2_n{n}"), delta2(&setup.s1.d, &setup.s2.d));
        constants.insert(format!("density_mass_error_n{n}"), (setup.s1.profile.total_mass() - 1.0).abs());
        let trials: Vec<EnsembleSamples> =
            (0..cfg.trials).into_par_iter().map(|t| ensemble_trial(&setup, cfg, t, want)).collect::<Result<_>>()?;
        let mut merged = EnsembleSamples::default();
        for t in trials {
            merged.overlap.extend(t.overlap);
            merged.eth_reg.extend(t.eth_reg);
            merged.eth_sharp.extend(t.eth_sharp);
            merged.rigidity.extend(t.rigidity);
        }
        raw.entry("overlap-decay").or_default().push((n, merged.overlap));
        raw.entry("eth").or_default().push((n, merged.eth_reg));
        raw.entry("eth-sharp").or_default().push((n, merged.eth_sharp));
        raw.entry("rigidity").or_default().push((n, merged.rigidity));
    }
    let mut out = Vec::new();
    let mut take = |key: &'static str, statistic: &'static str| {
        let r = raw.remove(key).unwrap_or_default();
        out.push(build_report(scaling_spec(cfg, key, statistic), cfg, r, constants.clone()));
    };
    if want.contains(&EnsembleTest::Overlap) {
        take("overlap-decay", "N (Delta^2 + LT + |gamma_i - gamma_j|^2 ^ 1) |<u_i, v_j>|^2");
    }
    if want.contains(&EnsembleTest::Eth) {
        take("eth", "sqrt(N) |<u_i, A-ring v_j>| / ||A-ring||, smooth cutoff");
        take("eth-sharp", "sqrt(N) |<u_i, A v_j> - <VA> 1(|gamma_i - gamma_j| <= delta) 1(Delta^2 <= delta) <u_i, v_j>| / ||A||");
    }
    if want.contains(&EnsembleTest::Rigidity) {
        take("rigidity", "N |lambda_i - gamma_i|, bulk i");
    }
    Ok(out)
}

pub fn verify_overlap_decay(cfg: &ExperimentConfig) -> Result<ScalingReport> {
    Ok(verify_ensemble(cfg, &[EnsembleTest::Overlap])?.remove(0))
}

/// ETH on (d1, d2), where the cutoff typically vanishes, and again on the close pair of the
/// local-law section ("eth-close"), where the regularisation is active. Smooth-cutoff and
/// sharp-indicator reports for each.
pub fn verify_eth(cfg: &ExperimentConfig) -> Result<Vec<ScalingReport>> {
    let mut out = verify_ensemble(cfg, &[EnsembleTest::Eth])?;
    out.extend(verify_eth_close(cfg)?);
    Ok(out)
}

fn verify_eth_close(cfg: &ExperimentConfig) -> Result<Vec<ScalingReport>> {
    let close = ExperimentConfig { d1: cfg.local_law.d1.clone(), d2: cfg.local_law.d2.clone(), ..cfg.clone() };
    let mut reps = verify_ensemble(&close, &[EnsembleTest::Eth])?;
    for r in &mut reps {
        r.test = r.test.replacen("eth", "eth-close", 1);
    }
    Ok(reps)
}

pub fn verify_rigidity(cfg: &ExperimentConfig) -> Result<ScalingReport> {
    Ok(verify_ensemble(cfg, &[EnsembleTest::Rigidity])?.remove(0))
}

// ---------------------------------------------------------------------------------------------
// local laws

struct ZPair {
    cp: ControlParams,
    z1: C64,
    z2: C64,
    c1: C64,
    c2: C64,
    na1: f64,
    na2: f64,
    /// <M^I_12>, <M^A_12 A>, <M^{A1}_12 A>, <M^{A1}_12 A2>.
    det: [C64; 4],
    /// (M^A_12)_{xy} and (M^{A1}_12)_{xy} per vector pair, for isotropic pairs.
    iso: Option<(Vec<C64>, Vec<C64>)>,
}

impl ZPair {
    fn bound_gen(&self, nf: f64) -> f64 {
        let cp = &self.cp;
        (1.0 / (nf * self.z1.im.abs() * self.z2.im.abs())).min(1.0 / ((nf * cp.eta_star).sqrt() * cp.gamma_hat))
    }

    fn bound_reg1(&self, nf: f64) -> f64 {
        let cp = &self.cp;
        (1.0 / (nf * self.z1.im.abs() * self.z2.im.abs())).min(1.0 / (nf * cp.eta_star * cp.gamma_hat).sqrt())
    }

    fn bound_reg2(&self, nf: f64) -> f64 {
        let cp = &self.cp;
        (1.0 / (nf * self.z1.im.abs() * self.z2.im.abs())).min(1.0 / (nf * cp.eta_star).sqrt())
    }
}

struct LocalSetup {
    n: usize,
    d1: Arc<Deformation>,
    d2: Arc<Deformation>,
    obs: DiagObs,
    zpairs: Vec<ZPair>,
    vectors: Vec<Vec<C64>>,
    vpairs: Vec<(usize, usize)>,
}

fn col_of(v: &[C64]) -> CMat {
    CMat::from_fn(v.len(), 1, |i, _| v[i])
}

fn xmy(m: &CMat, x: &[C64], y: &[C64]) -> C64 {
    let my = m * col_of(y);
    x.iter().enumerate().map(|(i, xi)| xi.conj() * my[(i, 0)]).sum()
}

fn local_setup(cfg: &ExperimentConfig, n: usize, want_iso: bool, mde: &MdeConfig) -> Result<LocalSetup> {
    let ll = &cfg.local_law;
    let d1 = Arc::new(ll.d1.build(n)?);
    let d2 = Arc::new(ll.d2.build(n)?);
    let p1 = DensityProfile::new(&d1)?;
    let obs = DiagObs { a: cfg.observable.diagonal(n)? };
    let eta = (n as f64).powf(-cfg.eta_exponent);
    let am = obs.matrix(C64::new(0.0, 0.0));
    let ident = eye(n);

    let mut vectors = vec![];
    let mut vpairs = vec![];
    if want_iso {
        let unit = |k: usize| (0..n).map(|i| C64::new(if i == k { 1.0 } else { 0.0 }, 0.0)).collect::<Vec<_>>();
        let mut rng = rng_stream(cfg.seed, n as u64, purpose::VECTORS);
        vectors = vec![unit(n / 4), unit(3 * n / 4), random_unit_vector(n, &mut rng), random_unit_vector(n, &mut rng)];
        vpairs = vec![(0, 0), (0, 1), (2, 2), (2, 3)];
    }

    let mut zpairs = Vec::new();
    for &level in &ll.levels {
        let e1 = p1.quantile(level)?;
        for &off in &ll.offsets {
            for sign in [1.0, -1.0] {
                let z1 = C64::new(e1, eta);
                let z2 = C64::new(e1 + off, sign * eta);
                let nu1 = SpectralPair::new(d1.clone(), z1, mde)?;
                let nu2 = SpectralPair::new(d2.clone(), z2, mde)?;
                let cp = gamma_hat(&nu1, &nu2);
                let c1 = crate::det_approx::regular_shift(am.as_ref(), &nu1, &nu2, cfg.delta)?;
                let c2 = crate::det_approx::regular_shift(am.as_ref(), &nu2, &nu1, cfg.delta)?;
                let a1 = obs.matrix(c1);
                let a2 = obs.matrix(c2);
                let det = [
                    m2_det_trace(&nu1, &nu2, ident.as_ref())?,
                    m2_det_pair_trace(&nu1, &nu2, am.as_ref(), am.as_ref())?,
                    m2_det_pair_trace(&nu1, &nu2, a1.as_ref(), am.as_ref())?,
                    m2_det_pair_trace(&nu1, &nu2, a1.as_ref(), a2.as_ref())?,
                ];
                let iso = if want_iso && zpairs.len() < ll.iso_pairs {
                    let ma = m2_det(&nu1, &nu2, am.as_ref())?;
                    let ma1 = m2_det(&nu1, &nu2, a1.as_ref())?;
                    let f = |m: &CMat| vpairs.iter().map(|&(x, y)| xmy(m, &vectors[x], &vectors[y])).collect::<Vec<_>>();
                    Some((f(&ma), f(&ma1)))
                } else {
                    None
                };
                zpairs.push(ZPair { cp, z1, z2, c1, c2, na1: obs.norm_shifted(c1), na2: obs.norm_shifted(c2), det, iso });
            }
        }
    }
    Ok(LocalSetup { n, d1, d2, obs, zpairs, vectors, vpairs })
}

#[derive(Default)]
struct LocalSamples {
    gen: Vec<f64>,
    reg1: Vec<f64>,
    reg2: Vec<f64>,
    ratio: Vec<f64>,
    ratio_sqrt_gamma: Vec<f64>,
    /// General-case statistic at the first spectral pair, for cross-checks.
    first_pair: Vec<f64>,
    iso2_gen: Vec<f64>,
    iso2_reg: Vec<f64>,
    iso3_gen: Vec<f64>,
    iso3_reg1: Vec<f64>,
    iso3_reg2: Vec<f64>,
}

fn safe_div(a: f64, b: f64) -> f64 {
    if b > 0.0 {
        a / b
    } else {
        0.0
    }
}

fn matvec(m: &CMat, v: &[C64]) -> Vec<C64> {
    let r = m * col_of(v);
    (0..v.len()).map(|i| r[(i, 0)]).collect()
}

fn matvec_adj(m: &CMat, v: &[C64]) -> Vec<C64> {
    let r = m.adjoint() * col_of(v);
    (0..v.len()).map(|i| r[(i, 0)]).collect()
}

fn local_trial(setup: &LocalSetup, cfg: &ExperimentConfig, trial: usize, want_iso: bool) -> Result<LocalSamples> {
    let n = setup.n;
    let nf = n as f64;
    let mut rng = rng_stream(cfg.seed ^ 0x5a5a_0000, trial_key(n, trial), purpose::WIGNER);
    let w = sample_wigner_with(n, cfg.beta_sym, cfg.dist, &mut rng)?;
    let dec1 = deform_and_solve(&w, &setup.d1)?;
    let dec2 = deform_and_solve(&w, &setup.d2)?;
    let ti = transformed(&dec1, &dec2, None);
    let ta = transformed(&dec1, &dec2, Some(&setup.obs.a));
    let a_norm = setup.obs.norm();
    let mut out = LocalSamples::default();
    let rot = |dec: &SpectralDecomposition, v: &[C64]| -> Vec<C64> {
        let r = dec.eigenvectors.adjoint() * col_of(v);
        (0..n).map(|i| r[(i, 0)]).collect()
    };
    let (v1, v2): (Vec<Vec<C64>>, Vec<Vec<C64>>) = if want_iso {
        (setup.vectors.iter().map(|v| rot(&dec1, v)).collect(), setup.vectors.iter().map(|v| rot(&dec2, v)).collect())
    } else {
        (vec![], vec![])
    };
    for (k, zp) in setup.zpairs.iter().enumerate() {
        let g1 = resolvent_vec(&dec1.eigenvalues, zp.z1);
        let g2 = resolvent_vec(&dec2.eigenvalues, zp.z2);
        let s_ii = contract(n, &g1, &g2, |i, j| C64::new(ti[(i, j)].norm_sqr(), 0.0));
        let s_aa = contract(n, &g1, &g2, |i, j| C64::new(ta[(i, j)].norm_sqr(), 0.0));
        let s_ai = contract(n, &g1, &g2, |i, j| ta[(i, j)] * ti[(i, j)].conj());
        let s_ia = contract(n, &g1, &g2, |i, j| ti[(i, j)] * ta[(i, j)].conj());
        // <G1 (A - c1) G2 (A - c2)>
        let chain = |c1: C64, c2: C64| s_aa - c2 * s_ai - c1 * s_ia + c1 * c2 * s_ii;
        let err_ii = (s_ii - zp.det[0]).norm();
        let err_aa = (s_aa - zp.det[1]).norm();
        let err_r1 = (chain(zp.c1, C64::new(0.0, 0.0)) - zp.det[2]).norm();
        let err_r2 = (chain(zp.c1, zp.c2) - zp.det[3]).norm();
        let bg = zp.bound_gen(nf);
        out.gen.push(err_ii / bg);
        out.gen.push(safe_div(err_aa, a_norm * a_norm * bg));
        if k == 0 {
            out.first_pair.push(err_ii / bg);
            out.first_pair.push(safe_div(err_aa, a_norm * a_norm * bg));
        }
        out.reg1.push(safe_div(err_r1, zp.na1 * a_norm * zp.bound_reg1(nf)));
        out.reg2.push(safe_div(err_r2, zp.na1 * zp.na2 * zp.bound_reg2(nf)));
        let rel_reg = safe_div(err_r2, zp.na1 * zp.na2);
        let rel_gen = safe_div(err_aa, a_norm * a_norm);
        if rel_gen > 0.0 {
            out.ratio.push(rel_reg / rel_gen);
            out.ratio_sqrt_gamma.push(rel_reg / rel_gen / zp.cp.gamma_hat.sqrt());
        }

        let Some((det_a, det_a1)) = &zp.iso else { continue };
        let cp = &zp.cp;
        let zero = C64::new(0.0, 0.0);
        for (p, &(xi, yi)) in setup.vpairs.iter().enumerate() {
            let xt: Vec<C64> = v1[xi].iter().zip(&g1).map(|(x, g)| x.conj() * g).collect();
            let dot = |u: &[C64]| -> C64 { xt.iter().zip(u).map(|(a, b)| a * b).sum() };
            // two resolvents: <x, G1 (A - c) G2 y>
            let gy: Vec<C64> = v2[yi].iter().zip(&g2).map(|(y, g)| y * g).collect();
            let sa = dot(&matvec(&ta, &gy));
            let si = dot(&matvec(&ti, &gy));
            let two_gen = (sa - det_a[p]).norm();
            let two_reg = (sa - zp.c1 * si - det_a1[p]).norm();
            out.iso2_gen.push(safe_div(two_gen * (nf * cp.ell).sqrt() * (cp.eta_star * cp.gamma_hat).sqrt(), a_norm));
            out.iso2_reg.push(safe_div(two_reg * (nf * cp.ell).sqrt() * cp.eta_star.sqrt(), zp.na1));
            // three resolvents: <x, G1 (A - c1) G2 (A - c2) G1* y>
            let wv: Vec<C64> = v1[yi].iter().zip(&g1).map(|(y, g)| y * g.conj()).collect();
            let qa = matvec_adj(&ta, &wv);
            let qi = matvec_adj(&ti, &wv);
            let three = |c1: C64, c2: C64| -> C64 {
                let r: Vec<C64> = (0..n).map(|j| g2[j] * (qa[j] - c2 * qi[j])).collect();
                dot(&matvec(&ta, &r)) - c1 * dot(&matvec(&ti, &r))
            };
            out.iso3_gen.push(safe_div(three(zero, zero).norm() * cp.ell * cp.gamma_hat, a_norm * a_norm));
            out.iso3_reg1.push(safe_div(three(zp.c1, zero).norm() * cp.ell * cp.gamma_hat.sqrt(), zp.na1 * a_norm));
            out.iso3_reg2.push(safe_div(three(zp.c1, zp.c2).norm() * cp.ell, zp.na1 * zp.na2));
        }
    }
    Ok(out)
}

/// Average and (optionally) isotropic two- and three-resolvent laws on shared samples.
pub fn verify_local_laws(cfg: &ExperimentConfig, want_avg: bool, want_iso: bool) -> Result<Vec<ScalingReport>> {
    cfg.validate()?;
    let mde = MdeConfig::default();
    let keys = [
        "local-law-avg",
        "local-law-avg-reg1",
        "local-law-avg-reg2",
        "local-law-iso-2g",
        "local-law-iso-2g-reg",
        "local-law-iso-3g",
        "local-law-iso-3g-reg1",
        "local-law-iso-3g-reg2",
    ];
    let mut raw: BTreeMap<&str, Vec<(usize, Vec<f64>)>> = BTreeMap::new();
    let mut constants = BTreeMap::new();
    let mut ratios = Vec::new();
    let mut ratios_g = Vec::new();
    for &n in &cfg.n_list {
        let setup = local_setup(cfg, n, want_iso, &mde)?;
        let min_gamma = setup.zpairs.iter().map(|z| z.cp.gamma_hat).fold(f64::INFINITY, f64::min);
        constants.insert(format!("min_gamma_hat_n{n}"), min_gamma);
        let trials: Vec<LocalSamples> =
            (0..cfg.trials).into_par_iter().map(|t| local_trial(&setup, cfg, t, want_iso)).collect::<Result<_>>()?;
        let mut m = LocalSamples::default();
        for t in trials {
            m.gen.extend(t.gen);
            m.reg1.extend(t.reg1);
            m.reg2.extend(t.reg2);
            m.ratio.extend(t.ratio);
            m.ratio_sqrt_gamma.extend(t.ratio_sqrt_gamma);
            m.first_pair.extend(t.first_pair);
            m.iso2_gen.extend(t.iso2_gen);
            m.iso2_reg.extend(t.iso2_reg);
            m.iso3_gen.extend(t.iso3_gen);
            m.iso3_reg1.extend(t.iso3_reg1);
            m.iso3_reg2.extend(t.iso3_reg2);
        }
        constants.insert(format!("median_ratio_reg2_over_gen_n{n}"), percentile(&m.ratio, 0.5));
        constants.insert(format!("first_pair_q_n{n}"), percentile(&m.first_pair, cfg.percentile));
        ratios.extend(m.ratio);
        ratios_g.extend(m.ratio_sqrt_gamma);
        for (key, v) in keys.iter().zip([m.gen, m.reg1, m.reg2, m.iso2_gen, m.iso2_reg, m.iso3_gen, m.iso3_reg1, m.iso3_reg2]) {
            raw.entry(key).or_default().push((n, v));
        }
    }
    constants.insert("median_ratio_reg2_over_gen".into(), percentile(&ratios, 0.5));
    constants.insert("median_ratio_over_sqrt_gamma".into(), percentile(&ratios_g, 0.5));
    let statistics = [
        "|<(G1 B G2 - M^B_12) B>| / (||B||^2 (1/(N eta1 eta2) ^ 1/(sqrt(N eta*) gamma))), B in {I, A}",
        "one regular observable, normalised by 1/(N eta1 eta2) ^ 1/sqrt(N eta* gamma)",
        "two regular observables, normalised by 1/(N eta1 eta2) ^ 1/sqrt(N eta*)",
        "|<x, (G1 A G2 - M^A_12) y>| sqrt(N ell) sqrt(eta* gamma) / ||A||",
        "|<x, (G1 A1 G2 - M^A1_12) y>| sqrt(N ell) sqrt(eta*) / ||A1||",
        "|<x, G1 A G2 A G1* y>| ell gamma / ||A||^2",
        "|<x, G1 A1 G2 A G1* y>| ell sqrt(gamma) / (||A1|| ||A||)",
        "|<x, G1 A1 G2 A2 G1* y>| ell / (||A1|| ||A2||)",
    ];
    let mut out = Vec::new();
    for (k, key) in keys.iter().enumerate() {
        let is_iso = k >= 3;
        if (is_iso && !want_iso) || (!is_iso && !want_avg) {
            continue;
        }
        let r = raw.remove(key).unwrap_or_default();
        out.push(build_report(scaling_spec(cfg, key, statistics[k]), cfg, r, constants.clone()));
    }
    Ok(out)
}

pub fn verify_local_law_avg(cfg: &ExperimentConfig) -> Result<Vec<ScalingReport>> {
    verify_local_laws(cfg, true, false)
}

pub fn verify_local_law_iso(cfg: &ExperimentConfig) -> Result<Vec<ScalingReport>> {
    verify_local_laws(cfg, false, true)
}

// ---------------------------------------------------------------------------------------------
// zig step along the characteristic flow

struct ZigPoint {
    t: f64,
    nu1: SpectralPair,
    nu2: SpectralPair,
    alpha: f64,
    /// The local-law normalisation, for comparison with `local-law-avg`.
    bound_gen: f64,
    det_ii: C64,
    det_aa: C64,
}

pub fn verify_zig_flow(cfg: &ExperimentConfig) -> Result<ScalingReport> {
    cfg.validate()?;
    let zc = &cfg.zig;
    let mde = MdeConfig::default();
    let n = zc.n;
    let nf = n as f64;
    let big_t = zc.t_final;
    let d1 = cfg.local_law.d1.build(n)?;
    let d2 = cfg.local_law.d2.build(n)?;
    let eta = nf.powf(-cfg.eta_exponent);
    let e1 = DensityProfile::new(&d1)?.quantile(zc.level)?;
    let zt1 = C64::new(e1, eta);
    let zt2 = C64::new(e1 + zc.offset, if zc.opposite { -eta } else { eta });
    let b1 = flow_backward(zt1, &d1, big_t, &mde)?;
    let b2 = flow_backward(zt2, &d2, big_t, &mde)?;
    let obs = DiagObs { a: cfg.observable.diagonal(n)? };
    let am = obs.matrix(C64::new(0.0, 0.0));
    let ident = eye(n);
    let mut notes = vec![];
    let mut points = Vec::new();
    for k in 0..=zc.points {
        let t = big_t * k as f64 / zc.points as f64;
        let (nu1, nu2) = match (pair_at(&b1.nu0, t, &mde), pair_at(&b2.nu0, t, &mde)) {
            (Ok(a), Ok(b)) => (a, b),
            (Err(Error::FlowExit { t, .. }), _) | (_, Err(Error::FlowExit { t, .. })) => {
                notes.push(format!("characteristic left the domain at t = {t}; path truncated"));
                break;
            }
            (Err(e), _) | (_, Err(e)) => return Err(e),
        };
        let cp = gamma_hat(&nu1, &nu2);
        let e1e2 = nu1.eta() * nu2.eta();
        let alpha = (1.0 / (nf * e1e2)).min(1.0 / ((nf * cp.ell).sqrt() * cp.gamma_hat));
        let bound_gen = (1.0 / (nf * e1e2)).min(1.0 / ((nf * cp.eta_star).sqrt() * cp.gamma_hat));
        let det_ii = m2_det_trace(&nu1, &nu2, ident.as_ref())?;
        let det_aa = m2_det_pair_trace(&nu1, &nu2, am.as_ref(), am.as_ref())?;
        points.push(ZigPoint { t, nu1, nu2, alpha, bound_gen, det_ii, det_aa });
    }
    let a_norm = obs.norm();
    let trial_stats: Vec<(f64, f64)> = (0..zc.trials)
        .into_par_iter()
        .map(|trial| -> Result<(f64, f64)> {
            let key = trial_key(n, trial) ^ (1 << 63);
            let mut rng = rng_stream(cfg.seed, key, purpose::WIGNER);
            let mut ou_rng = rng_stream(cfg.seed, key, purpose::OU);
            let mut w = sample_wigner_with(n, cfg.beta_sym, cfg.dist, &mut rng)?;
            let mut prev_t = 0.0;
            let mut worst: f64 = 0.0;
            let mut endpoint = 0.0;
            for p in &points {
                if p.t > prev_t {
                    w = ou_evolve_with(&w, p.t - prev_t, zc.ou_dt, cfg.beta_sym, OuMethod::ExactTransition, &mut ou_rng)?;
                    prev_t = p.t;
                }
                let dec1 = deform_and_solve(&w, &p.nu1.d)?;
                let dec2 = deform_and_solve(&w, &p.nu2.d)?;
                let ti = transformed(&dec1, &dec2, None);
                let ta = transformed(&dec1, &dec2, Some(&obs.a));
                let g1 = resolvent_vec(&dec1.eigenvalues, p.nu1.z);
                let g2 = resolvent_vec(&dec2.eigenvalues, p.nu2.z);
                let s_ii = contract(n, &g1, &g2, |i, j| C64::new(ti[(i, j)].norm_sqr(), 0.0));
                let s_aa = contract(n, &g1, &g2, |i, j| C64::new(ta[(i, j)].norm_sqr(), 0.0));
                let e_ii = (s_ii - p.det_ii).norm();
                let e_aa = safe_div((s_aa - p.det_aa).norm(), a_norm * a_norm);
                worst = worst.max(e_ii.max(e_aa) / p.alpha);
                endpoint = e_ii.max(e_aa) / p.bound_gen;
            }
            Ok((worst, endpoint))
        })
        .collect::<Result<_>>()?;
    let mut constants = BTreeMap::new();
    constants.insert("time_points".into(), points.len() as f64);
    constants.insert("t_reached".into(), points.last().map_or(0.0, |p| p.t));
    constants.insert("z0_1_im".into(), b1.z0.im);
    constants.insert("z0_2_im".into(), b2.z0.im);
    constants.insert("backward_round_trip".into(), b1.round_trip.max(b2.round_trip));
    let endpoints: Vec<f64> = trial_stats.iter().map(|s| s.1).collect();
    constants.insert("endpoint_median_local_law_normalisation".into(), percentile(&endpoints, 0.5));
    constants.insert("endpoint_max_local_law_normalisation".into(), percentile(&endpoints, 1.0));
    constants.insert("endpoint_q_local_law_normalisation".into(), percentile(&endpoints, cfg.percentile));
    let ceiling = nf.powf(zc.ceiling_exponent);
    let spec = ReportSpec {
        test: "zig-flow",
        statistic: "max_t |<(G1,t B G2,t - M^B_12,t) B>| / (||B||^2 alpha_t), B in {I, A}",
        q: 1.0,
        slope_ceiling: cfg.slope_ceiling,
        magnitude_ceiling: ceiling,
    };
    let mut rep = build_report(spec, cfg, vec![(n, trial_stats.iter().map(|s| s.0).collect())], constants);
    rep.notes.extend(notes);
    Ok(rep)
}

// ---------------------------------------------------------------------------------------------
// deterministic grids

struct GridPairs {
    d1: Arc<Deformation>,
    d2: Arc<Deformation>,
    p1: DensityProfile,
    p2: DensityProfile,
}

fn grid_pairs(g: &GridConfig) -> Result<Vec<GridPairs>> {
    g.pairs
        .iter()
        .map(|(a, b)| {
            let d1 = Arc::new(a.build(g.n)?);
            let d2 = Arc::new(b.build(g.n)?);
            let p1 = DensityProfile::new(&d1)?;
            let p2 = DensityProfile::new(&d2)?;
            Ok(GridPairs { d1, d2, p1, p2 })
        })
        .collect()
}

fn grid_config_value(cfg: &ExperimentConfig) -> serde_json::Value {
    serde_json::to_value(&cfg.grid).unwrap_or(serde_json::Value::Null)
}

fn finish_grid(test: &str, cfg: &ExperimentConfig, points: usize, measured: BTreeMap<String, f64>, checks: Vec<Check>) -> GridReport {
    let pass = checks.iter().all(|c| c.pass);
    GridReport { test: test.into(), config: grid_config_value(cfg), points, measured, checks, pass }
}

/// beta vs (rho1 + rho2)^2, beta* vs gamma-hat and gamma-hat^{1/4} on a bulk grid, and
/// beta*/gamma-hat at real energies.
pub fn verify_stability_relations(cfg: &ExperimentConfig) -> Result<GridReport> {
    let g = &cfg.grid;
    let mde = MdeConfig::default();
    let mut c_rho = f64::INFINITY;
    let mut lo = f64::INFINITY;
    let mut hi: f64 = 0.0;
    let mut quarter: f64 = 0.0;
    let mut real_lo = f64::INFINITY;
    let mut real_hi: f64 = 0.0;
    let mut points = 0;
    for gp in grid_pairs(g)? {
        for &(l1, l2) in &g.levels {
            let e1 = gp.p1.quantile(l1)?;
            let e2 = gp.p2.quantile(l2)?;
            for &(h1, h2) in &g.etas {
                for sign in [1.0, -1.0] {
                    let nu1 = SpectralPair::new(gp.d1.clone(), C64::new(e1, h1), &mde)?;
                    let nu2 = SpectralPair::new(gp.d2.clone(), C64::new(e2, sign * h2), &mde)?;
                    let b = beta(&nu1, &nu2);
                    let bs = beta_star(&nu1, &nu2);
                    let gh = gamma_hat(&nu1, &nu2).gamma_hat;
                    c_rho = c_rho.min(b / (nu1.rho() + nu2.rho()).powi(2));
                    lo = lo.min(bs / gh);
                    hi = hi.max(bs / gh);
                    quarter = quarter.max(bs / gh.powf(0.25));
                    points += 1;
                }
            }
            let nu1 = SpectralPair::at_real_energy(gp.d1.clone(), e1, None, &mde)?;
            let nu2 = SpectralPair::at_real_energy(gp.d2.clone(), e2, None, &mde)?;
            let r = beta_star(&nu1, &nu2) / gamma_hat(&nu1, &nu2).gamma_hat;
            real_lo = real_lo.min(r);
            real_hi = real_hi.max(r);
        }
    }
    let mut measured = BTreeMap::new();
    measured.insert("min_beta_over_rho_sum_sq".into(), c_rho);
    measured.insert("min_beta_star_over_gamma".into(), lo);
    measured.insert("max_beta_star_over_gamma".into(), hi);
    measured.insert("max_beta_star_over_gamma_quarter".into(), quarter);
    measured.insert("real_min_beta_star_over_gamma".into(), real_lo);
    measured.insert("real_max_beta_star_over_gamma".into(), real_hi);
    let checks = vec![
        Check::ge("beta >= c (rho1 + rho2)^2, c > 0", c_rho, 1e-12),
        Check::ge("beta* / gamma-hat >= 0.02", lo, 0.02),
        Check::le("beta* <= 20 gamma-hat^{1/4}", quarter, 20.0),
        Check::le("real energies: C/c <= 1e3", real_hi / real_lo, 1e3),
    ];
    Ok(finish_grid("stability-relations", cfg, points, measured, checks))
}

/// Lower bound, monotonicity in time and vague monotonicity in Im z for gamma-hat along flows
/// ending at the grid points.
pub fn verify_admissibility(cfg: &ExperimentConfig) -> Result<GridReport> {
    let g = &cfg.grid;
    let mde = MdeConfig::default();
    let mut lower: f64 = 0.0;
    let mut upper: f64 = 0.0;
    let mut tm_lo = f64::INFINITY;
    let mut tm_hi: f64 = 0.0;
    let mut vague: f64 = 0.0;
    let mut points = 0;
    let mut failures = 0.0;
    for gp in grid_pairs(g)? {
        let d1_t = gp.d1.scaled((-0.5 * g.flow_t).exp());
        let d2_t = gp.d2.scaled((-0.5 * g.flow_t).exp());
        let p1t = DensityProfile::new(&d1_t)?;
        let p2t = DensityProfile::new(&d2_t)?;
        for &(l1, l2) in &g.levels {
            for sign in [1.0, -1.0] {
                let zt1 = C64::new(p1t.quantile(l1)?, g.flow_eta);
                let zt2 = C64::new(p2t.quantile(l2)?, sign * g.flow_eta);
                let (b1, b2) = match (flow_backward(zt1, &d1_t, g.flow_t, &mde), flow_backward(zt2, &d2_t, g.flow_t, &mde)) {
                    (Ok(a), Ok(b)) => (a, b),
                    _ => {
                        failures += 1.0;
                        continue;
                    }
                };
                let mut gam = Vec::new();
                let mut times = Vec::new();
                for k in 0..=g.flow_points {
                    let t = g.flow_t * k as f64 / g.flow_points as f64;
                    let nu1 = pair_at(&b1.nu0, t, &mde)?;
                    let nu2 = pair_at(&b2.nu0, t, &mde)?;
                    let cp = gamma_hat(&nu1, &nu2);
                    let lhs = (nu1.eta() / nu1.rho() + nu2.eta() / nu2.rho()).min(1.0);
                    lower = lower.max(lhs / cp.gamma_hat);
                    upper = upper.max(cp.gamma_hat / cp.beta_star);
                    for &x in &g.x_grid {
                        let s1 = nu1.z.im.signum();
                        let s2 = nu2.z.im.signum();
                        let m1 = SpectralPair::new(nu1.d.clone(), nu1.z + C64::new(0.0, s1 * x), &mde)?;
                        let m2 = SpectralPair::new(nu2.d.clone(), nu2.z + C64::new(0.0, s2 * x), &mde)?;
                        let shifted = gamma_hat(&nu1, &m2).gamma_hat.min(gamma_hat(&m1, &nu2).gamma_hat);
                        vague = vague.max(cp.gamma_hat / shifted);
                    }
                    gam.push(cp.gamma_hat);
                    times.push(t);
                    points += 1;
                }
                for i in 0..gam.len() {
                    for j in i..gam.len() {
                        let r = gam[i] / (gam[j] + (times[j] - times[i]));
                        tm_lo = tm_lo.min(r);
                        tm_hi = tm_hi.max(r);
                    }
                }
            }
        }
    }
    let c = g.ceiling;
    let mut measured = BTreeMap::new();
    measured.insert("max_eta_rho_over_gamma".into(), lower);
    measured.insert("max_gamma_over_beta_star".into(), upper);
    measured.insert("time_monotonicity_min".into(), tm_lo);
    measured.insert("time_monotonicity_max".into(), tm_hi);
    measured.insert("max_vague_monotonicity".into(), vague);
    measured.insert("backward_failures".into(), failures);
    let checks = vec![
        Check::le("(eta1/rho1 + eta2/rho2) ^ 1 <= C gamma-hat", lower, c),
        Check::le("gamma-hat <= C' beta*", upper, c),
        Check::le("time monotonicity: max ratio", tm_hi, c),
        Check::ge("time monotonicity: min ratio", tm_lo, 1.0 / c),
        Check::le("vague monotonicity in Im z", vague, c),
        Check::le("backward solves failing", failures, 0.0),
    ];
    Ok(finish_grid("admissibility", cfg, points, measured, checks))
}

/// Runs the named tests, sharing samples where possible. Unknown names are an error.
pub fn run_tests(cfg: &ExperimentConfig, names: &[&str]) -> Result<Vec<TestReport>> {
    for n in names {
        if !TEST_NAMES.contains(n) {
            return Err(Error::Config(format!("unknown test '{n}'; known: {}", TEST_NAMES.join(", "))));
        }
    }
    cfg.validate()?;
    let has = |n: &str| names.contains(&n);
    let mut out = Vec::new();
    let mut ens = Vec::new();
    if has("overlap-decay") {
        ens.push(EnsembleTest::Overlap);
    }
    if has("eth") {
        ens.push(EnsembleTest::Eth);
    }
    if has("rigidity") {
        ens.push(EnsembleTest::Rigidity);
    }
    if !ens.is_empty() {
        out.extend(verify_ensemble(cfg, &ens)?.into_iter().map(TestReport::Scaling));
    }
    if has("eth") {
        out.extend(verify_eth_close(cfg)?.into_iter().map(TestReport::Scaling));
    }
    if has("local-law-avg") || has("local-law-iso") {
        out.extend(verify_local_laws(cfg, has("local-law-avg"), has("local-law-iso"))?.into_iter().map(TestReport::Scaling));
    }
    if has("stability-relations") {
        out.push(TestReport::Grid(verify_stability_relations(cfg)?));
    }
    if has("admissibility") {
        out.push(TestReport::Grid(verify_admissibility(cfg)?));
    }
    if has("zig-flow") {
        out.push(TestReport::Scaling(verify_zig_flow(cfg)?));
    }
    Ok(out)
}
