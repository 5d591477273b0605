use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

use dwm_core::det_approx::SpectralPair;
use dwm_core::flow::trajectory_rows;
use dwm_core::mde::{Deformation, DensityProfile, MdeConfig};
use dwm_core::verify::{run_tests, ExperimentConfig, TestReport, TEST_NAMES};
use dwm_core::C64;

#[derive(Parser)]
#[command(name = "dwm", version, about = "Deformed Wigner matrices: MDE densities, characteristic flows, Monte Carlo checks")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Density curve, quantiles and kappa-bulk of a deformation.
    Mde(MdeArgs),
    /// RK4 characteristic trajectory with closed-form deviation.
    Flow(FlowArgs),
    /// Run acceptance tests and write JSON reports.
    Verify(VerifyArgs),
}

#[derive(clap::Args)]
struct MdeArgs {
    /// Deformation JSON ({"eigenvalues": [...], "basis": "identity" | rows}). Default: D = 0.
    #[arg(long)]
    deformation: Option<PathBuf>,
    /// Number of intervals of the energy grid.
    #[arg(long, default_value_t = 2048)]
    grid: usize,
    #[arg(long, default_value_t = 100)]
    quantiles: usize,
    #[arg(long, default_value_t = 0.05)]
    kappa: f64,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(clap::Args)]
struct FlowArgs {
    #[arg(long)]
    deformation: Option<PathBuf>,
    /// Initial spectral parameter "re,im".
    #[arg(long, default_value = "0,2", allow_hyphen_values = true)]
    z0: String,
    /// Partner spectral parameter for f and beta. Default: conj(z0).
    #[arg(long, allow_hyphen_values = true)]
    partner: Option<String>,
    #[arg(long, default_value_t = 1.0)]
    t: f64,
    #[arg(long, default_value_t = 1e-3)]
    dt: f64,
    #[arg(long, default_value_t = 10)]
    record_every: usize,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Suite {
    Smoke,
    Full,
}

#[derive(clap::Args)]
struct VerifyArgs {
    /// JSON overrides applied on top of the suite defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed. Precedence: this flag, then DWM_SEED, then the config.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Worker threads for trials. Default: available parallelism.
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long, value_enum, default_value = "full")]
    suite: Suite,
    /// Test to run (repeatable). Default: all.
    #[arg(long = "test")]
    tests: Vec<String>,
    /// Also write raw samples as CSV.
    #[arg(long)]
    dump_raw: bool,
}

/// Exit 2 for bad input, 1 for failures.
struct Failure {
    code: u8,
    err: anyhow::Error,
}

fn usage(err: anyhow::Error) -> Failure {
    Failure { code: 2, err }
}

fn runtime(err: anyhow::Error) -> Failure {
    Failure { code: 1, err }
}

#[derive(Serialize)]
struct RunManifest {
    command: String,
    version: &'static str,
    config_path: Option<String>,
    seed: Option<u64>,
    seed_source: Option<&'static str>,
    config_sha256: String,
    output_dir: String,
    started_unix: f64,
    finished_unix: f64,
    config: Value,
}

fn now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

fn sha256_hex(v: &Value) -> String {
    hex::encode(Sha256::digest(serde_json::to_vec(v).unwrap_or_default()))
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> anyhow::Result<()> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    fs::write(path, s).with_context(|| format!("writing {}", path.display()))
}

fn load_deformation(path: &Option<PathBuf>) -> Result<Deformation, Failure> {
    match path {
        None => Ok(Deformation::zero(1)),
        Some(p) => {
            if !p.exists() {
                return Err(usage(anyhow!("deformation file {} not found", p.display())));
            }
            Deformation::from_json_file(p).map_err(|e| usage(anyhow!("{}: {e}", p.display())))
        }
    }
}

fn parse_z(s: &str) -> Result<C64, Failure> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    let parse = |x: &str| x.parse::<f64>().map_err(|_| usage(anyhow!("bad complex number '{s}', expected re,im")));
    match parts.as_slice() {
        [re, im] => Ok(C64::new(parse(re)?, parse(im)?)),
        _ => Err(usage(anyhow!("bad complex number '{s}', expected re,im"))),
    }
}

fn finish_manifest(out: &Path, command: &str, config: Value, config_path: Option<&Path>, seed: Option<(u64, &'static str)>, started: f64) -> anyhow::Result<()> {
    let m = RunManifest {
        command: command.into(),
        version: env!("CARGO_PKG_VERSION"),
        config_path: config_path.map(|p| p.display().to_string()),
        seed: seed.map(|s| s.0),
        seed_source: seed.map(|s| s.1),
        config_sha256: sha256_hex(&config),
        output_dir: out.display().to_string(),
        started_unix: started,
        finished_unix: now(),
        config,
    };
    write_json(&out.join("manifest.json"), &m)
}

fn cmd_mde(a: MdeArgs) -> Result<(), Failure> {
    let started = now();
    let d = load_deformation(&a.deformation)?;
    if a.grid < 2 || a.quantiles == 0 {
        return Err(usage(anyhow!("--grid must be >= 2 and --quantiles >= 1")));
    }
    fs::create_dir_all(&a.out).map_err(|e| usage(e.into()))?;
    let go = || -> anyhow::Result<()> {
        let prof = DensityProfile::new(&d)?;
        let (lo, hi) = prof.range();
        let mut w = csv::Writer::from_path(a.out.join("density.csv"))?;
        w.write_record(["E", "rho"])?;
        for k in 0..=a.grid {
            let e = lo + (hi - lo) * k as f64 / a.grid as f64;
            w.write_record([format!("{e:.12e}"), format!("{:.12e}", prof.density(e)?)])?;
        }
        w.flush()?;
        let q = prof.quantiles(a.quantiles)?;
        let mut w = csv::Writer::from_path(a.out.join("quantiles.csv"))?;
        w.write_record(["i", "gamma"])?;
        for (i, g) in q.gamma.iter().enumerate() {
            w.write_record([(i + 1).to_string(), format!("{g:.12e}")])?;
        }
        w.flush()?;
        let bulk = prof.kappa_bulk(a.kappa)?;
        write_json(
            &a.out.join("bulk.json"),
            &serde_json::json!({
                "kappa": a.kappa,
                "intervals": bulk,
                "support": prof.support(),
                "total_mass": prof.total_mass(),
            }),
        )?;
        let config = serde_json::json!({
            "deformation": d.to_json(),
            "grid": a.grid,
            "quantiles": a.quantiles,
            "kappa": a.kappa,
        });
        finish_manifest(&a.out, "mde", config, a.deformation.as_deref(), None, started)
    };
    go().map_err(runtime)
}

fn cmd_flow(a: FlowArgs) -> Result<(), Failure> {
    let started = now();
    let d = Arc::new(load_deformation(&a.deformation)?);
    let z0 = parse_z(&a.z0)?;
    let zp = match &a.partner {
        Some(s) => parse_z(s)?,
        None => z0.conj(),
    };
    if !(a.t >= 0.0) || !(a.dt > 0.0) || a.record_every == 0 {
        return Err(usage(anyhow!("need t >= 0, dt > 0, record_every >= 1")));
    }
    fs::create_dir_all(&a.out).map_err(|e| usage(e.into()))?;
    let cfg = MdeConfig::default();
    let go = || -> anyhow::Result<()> {
        let nu1 = SpectralPair::new(d.clone(), z0, &cfg)?;
        let nu2 = SpectralPair::new(d.clone(), zp, &cfg)?;
        let (rows, exited) = trajectory_rows(&nu1, &nu2, a.t, a.dt, a.record_every, &cfg)?;
        let mut w = csv::Writer::from_path(a.out.join("trajectory.csv"))?;
        w.write_record(["t", "re_z", "im_z", "re_m", "im_m", "rho", "f", "beta", "deviation"])?;
        for r in &rows {
            w.write_record(
                [r.t, r.z_re, r.z_im, r.m_re, r.m_im, r.rho, r.f, r.beta, r.deviation].iter().map(|x| format!("{x:.15e}")),
            )?;
        }
        w.flush()?;
        let last = rows.last().ok_or_else(|| anyhow!("empty trajectory"))?;
        let max_dev = rows.iter().map(|r| r.deviation).fold(0.0, f64::max);
        write_json(
            &a.out.join("flow_summary.json"),
            &serde_json::json!({
                "rows": rows.len(),
                "exited": exited,
                "t_reached": last.t,
                "final_z": [last.z_re, last.z_im],
                "max_deviation": max_dev,
            }),
        )?;
        if exited {
            eprintln!("characteristic left the domain at t = {}", last.t);
        }
        let config = serde_json::json!({
            "deformation": d.to_json(),
            "z0": [z0.re, z0.im],
            "partner": [zp.re, zp.im],
            "t": a.t,
            "dt": a.dt,
            "record_every": a.record_every,
        });
        finish_manifest(&a.out, "flow", config, a.deformation.as_deref(), None, started)
    };
    go().map_err(runtime)
}

/// Recursively overlays `over` onto `base`.
fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

fn resolve_seed(flag: Option<u64>, config_seed: u64) -> Result<(u64, &'static str), Failure> {
    if let Some(s) = flag {
        return Ok((s, "flag"));
    }
    match std::env::var("DWM_SEED") {
        Ok(v) => v.trim().parse().map(|s| (s, "env")).map_err(|_| usage(anyhow!("DWM_SEED='{v}' is not a u64"))),
        Err(_) => Ok((config_seed, "config")),
    }
}

fn cmd_verify(a: VerifyArgs) -> Result<(), Failure> {
    let started = now();
    let base = match a.suite {
        Suite::Smoke => ExperimentConfig::smoke(),
        Suite::Full => ExperimentConfig::full(),
    };
    let mut value = serde_json::to_value(&base).map_err(|e| runtime(e.into()))?;
    if let Some(p) = &a.config {
        let text = fs::read_to_string(p).map_err(|e| usage(anyhow!("{}: {e}", p.display())))?;
        let over: Value = serde_json::from_str(&text).map_err(|e| usage(anyhow!("{}: {e}", p.display())))?;
        merge(&mut value, over);
    }
    let mut cfg: ExperimentConfig = serde_json::from_value(value).map_err(|e| usage(anyhow!("config: {e}")))?;
    let seed = resolve_seed(a.seed, cfg.seed)?;
    cfg.seed = seed.0;
    cfg.validate().map_err(|e| usage(e.into()))?;
    let names: Vec<String> = if a.tests.is_empty() { TEST_NAMES.iter().map(|s| s.to_string()).collect() } else { a.tests.clone() };
    for n in &names {
        if !TEST_NAMES.contains(&n.as_str()) {
            return Err(usage(anyhow!("unknown test '{n}'; known tests: {}", TEST_NAMES.join(", "))));
        }
    }
    let workers = a.workers.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    if workers == 0 {
        return Err(usage(anyhow!("--workers must be positive")));
    }
    rayon::ThreadPoolBuilder::new().num_threads(workers).build_global().map_err(|e| runtime(e.into()))?;
    let reports_dir = a.out.join("reports");
    fs::create_dir_all(&reports_dir).map_err(|e| usage(e.into()))?;
    let config_value = serde_json::to_value(&cfg).map_err(|e| runtime(e.into()))?;
    write_json(&a.out.join("config.json"), &config_value).map_err(runtime)?;

    let refs: Vec<&str> = names.iter().map(String::as_str).collect();
    log::info!("running {} with {workers} worker(s)", refs.join(", "));
    let reports = run_tests(&cfg, &refs).map_err(|e| runtime(e.into()))?;
    let mut summary = BTreeMap::new();
    for r in &reports {
        write_json(&reports_dir.join(format!("{}.json", r.name())), r).map_err(runtime)?;
        summary.insert(r.name().to_string(), r.pass());
        println!("{} {}{}", if r.pass() { "PASS" } else { "FAIL" }, r.name(), describe(r));
        if a.dump_raw {
            if let TestReport::Scaling(s) = r {
                dump_raw(&a.out, &s.test, &s.raw).map_err(runtime)?;
            }
        }
    }
    let all = summary.values().all(|&p| p);
    write_json(&a.out.join("summary.json"), &serde_json::json!({ "tests": summary, "pass": all })).map_err(runtime)?;
    finish_manifest(&a.out, "verify", config_value, a.config.as_deref(), Some(seed), started).map_err(runtime)?;
    if all {
        Ok(())
    } else {
        let failed: Vec<_> = summary.iter().filter(|(_, p)| !**p).map(|(k, _)| k.as_str()).collect();
        Err(runtime(anyhow!("failing tests: {}", failed.join(", "))))
    }
}

fn describe(r: &TestReport) -> String {
    match r {
        TestReport::Scaling(s) => {
            let qs: Vec<String> = s.per_n.iter().map(|p| format!("{}:{:.3}", p.n, p.q_percentile)).collect();
            let slope = s.slope.map_or("-".to_string(), |x| format!("{x:.3}"));
            format!("  q[{}] slope {} (ceiling {:.3}, {})", qs.join(" "), slope, s.magnitude_ceiling, s.slope_ceiling)
        }
        TestReport::Grid(g) => {
            let bad: Vec<&str> = g.checks.iter().filter(|c| !c.pass).map(|c| c.name.as_str()).collect();
            if bad.is_empty() {
                format!("  {} checks on {} points", g.checks.len(), g.points)
            } else {
                format!("  failing: {}", bad.join("; "))
            }
        }
    }
}

fn dump_raw(out: &Path, test: &str, raw: &[(usize, Vec<f64>)]) -> anyhow::Result<()> {
    let dir = out.join("raw");
    fs::create_dir_all(&dir)?;
    let mut w = csv::Writer::from_path(dir.join(format!("{test}.csv")))?;
    w.write_record(["N", "value"])?;
    for (n, v) in raw {
        for x in v {
            w.write_record([n.to_string(), format!("{x:.12e}")])?;
        }
    }
    w.flush()?;
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let res = match cli.cmd {
        Cmd::Mde(a) => cmd_mde(a),
        Cmd::Flow(a) => cmd_flow(a),
        Cmd::Verify(a) => cmd_verify(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.err);
            ExitCode::from(f.code)
        }
    }
}
