use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use hho_wave::cli::{
    exit_code, rate_checks, run_selftest, run_study, write_reports, SelftestOptions, SelftestReport, StudyConfig,
};
use hho_wave::{Error, Result};

/// Convergence studies for hybrid discretizations of the acoustic wave
/// equation on the unit square.
#[derive(Debug, Parser)]
#[command(name = "hho-wave", version)]
struct Args {
    /// JSON study configuration; flags override its entries.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Face polynomial degree k (0 to 3).
    #[arg(long)]
    degree: Option<usize>,
    /// equal (k' = k) or mixed (k' = k + 1).
    #[arg(long)]
    variant: Option<String>,
    /// Subdivisions per side of the coarsest mesh.
    #[arg(long)]
    mesh: Option<usize>,
    /// Number of uniform refinements after the coarsest level.
    #[arg(long)]
    refinements: Option<usize>,
    /// rk4 or midpoint.
    #[arg(long)]
    scheme: Option<String>,
    /// Final time.
    #[arg(long)]
    tfinal: Option<f64>,
    /// Initial conditions: h-interp or l2.
    #[arg(long)]
    ic: Option<String>,
    /// Manufactured problem: standing-wave or polynomial.
    #[arg(long)]
    problem: Option<String>,
    /// Output prefix for the CSV and JSON reports.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Exit with status 2 when a finest-pair rate misses its target by more than 0.2.
    #[arg(long)]
    assert_rates: bool,
    /// Run the identity suite only.
    #[arg(long)]
    selftest: bool,
    /// Worker threads.
    #[arg(long, env = "HHO_WAVE_JOBS")]
    jobs: Option<usize>,
    /// Negate the stabilization weight before assembly (self-test mutation hook).
    #[arg(long, hide = true)]
    flip_tau: bool,
}

fn build_config(args: &Args) -> Result<StudyConfig> {
    let mut cfg = match &args.config {
        Some(path) => StudyConfig::from_json(&std::fs::read_to_string(path)?)?,
        None => StudyConfig::default(),
    };
    if let Some(k) = args.degree {
        cfg.degree = k;
    }
    if let Some(v) = &args.variant {
        cfg.variant = v.parse()?;
    }
    if let Some(n) = args.mesh {
        cfg.mesh = n;
    }
    if let Some(r) = args.refinements {
        cfg.refinements = r;
    }
    if let Some(s) = &args.scheme {
        cfg.scheme = s.parse()?;
    }
    if let Some(t) = args.tfinal {
        cfg.t_final = t;
    }
    if let Some(ic) = &args.ic {
        cfg.ic = ic.parse()?;
    }
    if let Some(p) = &args.problem {
        cfg.problem = p.parse()?;
    }
    if let Some(out) = &args.out {
        cfg.out = Some(out.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_selftest(report: &SelftestReport) {
    for c in &report.checks {
        let status = if c.passed { "PASS" } else { "FAIL" };
        println!("{status} {:<30} {:>10.3e} (tol {:.1e})  {}", c.name, c.value, c.tolerance, c.detail);
    }
    let failed = report.checks.iter().filter(|c| !c.passed).count();
    println!("selftest: {} checks, {failed} failed", report.checks.len());
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or_else(|| "-".into(), |v| format!("{v:.2}"))
}

fn main() -> ExitCode {
    let args = match Args::try_parse() {
        Ok(a) => a,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let cfg = match build_config(&args) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    if let Some(j) = args.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(j.max(1)).build_global() {
            eprintln!("error: thread pool: {e}");
            return ExitCode::from(1);
        }
    }
    if args.selftest || cfg.suites.identities {
        let report = run_selftest(SelftestOptions { flip_tau: args.flip_tau });
        print_selftest(&report);
        if !report.passed() {
            return ExitCode::from(2);
        }
        if args.selftest {
            return ExitCode::SUCCESS;
        }
    }
    match study(&cfg, args.assert_rates) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}

fn study(cfg: &StudyConfig, assert_rates: bool) -> std::result::Result<u8, Error> {
    println!(
        "study: k={} variant={} ic={} scheme={} problem={:?} t_final={} levels={:?}",
        cfg.degree,
        cfg.variant,
        cfg.ic,
        cfg.scheme,
        cfg.problem,
        cfg.t_final,
        cfg.levels()
    );
    let report = run_study(cfg)?;
    let eoc = |c: &str| report.eoc(c).expect("known column");
    let (es, ev, ei) = (eoc("err_sigma"), eoc("err_v"), eoc("err_int_v"));
    println!("{:>5} {:>10} {:>8} {:>12} {:>6} {:>12} {:>6} {:>12} {:>6}", "n", "h", "dofs", "err_sigma", "eoc", "err_v", "eoc", "err_int_v", "eoc");
    for (i, r) in report.rows.iter().enumerate() {
        println!(
            "{:>5} {:>10.4e} {:>8} {:>12.4e} {:>6} {:>12.4e} {:>6} {:>12.4e} {:>6}",
            r.n,
            r.h,
            r.dofs,
            r.err_sigma,
            fmt_opt(es[i]),
            r.err_v,
            fmt_opt(ev[i]),
            r.err_int_v,
            fmt_opt(ei[i])
        );
    }
    if let Some(prefix) = &cfg.out {
        let (c, j) = write_reports(prefix, cfg, &report)?;
        println!("wrote {} and {}", c.display(), j.display());
    }
    if assert_rates {
        let checks = rate_checks(cfg, &report);
        for c in &checks {
            let status = if c.passed { "PASS" } else { "FAIL" };
            println!("{status} eoc {} = {} (target >= {:.1})", c.column, fmt_opt(c.observed), c.target - 0.2);
        }
        if checks.iter().any(|c| !c.passed) {
            return Ok(2);
        }
    }
    Ok(0)
}
