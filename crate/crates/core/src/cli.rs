//! Convergence studies, report files and the identity self-test behind the
//! `hho-wave` binary.

use std::path::{Path, PathBuf};

use nalgebra::{DVector, Point2, Vector2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::errors::{
    energy_error, h_interp_distance, polynomial_problem, standing_wave, superconvergent_error,
    ConvergenceReport, ManufacturedProblem, ReportRow,
};
use crate::h_interp::h_interpolate;
use crate::local_ops::{build_packs, Discretization, LocalOperatorPack, Variant};
use crate::mesh::{Rectangle, SimplicialMesh};
use crate::semidisc::{
    assemble, hdg_flux_trace, initial_state, ode_rhs_with_faces, transmission_residual, HybridField, IcMode,
    OperatorBundle, SkeletonSolver,
};
use crate::timeint::{choose_dt, run, DtRule, Scheme, TimeLoopConfig};

/// Version of the CSV and JSON report layout.
pub const SCHEMA_VERSION: u32 = 1;

/// Tolerance on experimental orders for `--assert-rates`.
pub const RATE_TOLERANCE: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProblemKind {
    StandingWave,
    Polynomial,
}

impl ProblemKind {
    pub fn build(self) -> ManufacturedProblem {
        match self {
            ProblemKind::StandingWave => standing_wave(),
            ProblemKind::Polynomial => polynomial_problem(),
        }
    }

    fn has_source(self) -> bool {
        matches!(self, ProblemKind::Polynomial)
    }
}

impl std::str::FromStr for ProblemKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standing-wave" => Ok(ProblemKind::StandingWave),
            "polynomial" => Ok(ProblemKind::Polynomial),
            other => Err(Error::Config(format!("unknown problem '{other}'"))),
        }
    }
}

/// Which parts of a study run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Suites {
    /// Run the identity self-test before the sweep.
    pub identities: bool,
    /// Record H-interpolation distances per level.
    pub hinterp_rates: bool,
    /// Run the time integration per level.
    pub full_solve: bool,
}

impl Default for Suites {
    fn default() -> Self {
        Self { identities: false, hinterp_rates: true, full_solve: true }
    }
}

/// A refinement study. Levels use structured meshes of the unit square with
/// `mesh · 2^l` subdivisions per side, `l = 0..=refinements`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudyConfig {
    pub degree: usize,
    pub variant: Variant,
    pub mesh: usize,
    pub refinements: usize,
    pub scheme: Scheme,
    pub t_final: f64,
    pub ic: IcMode,
    pub problem: ProblemKind,
    pub dt_rule: DtRule,
    /// Output prefix; `<out>.csv` and `<out>.json` are written.
    pub out: Option<PathBuf>,
    pub suites: Suites,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            degree: 1,
            variant: Variant::Mixed,
            mesh: 4,
            refinements: 3,
            scheme: Scheme::Rk4,
            t_final: 1.0,
            ic: IcMode::HInterp,
            problem: ProblemKind::StandingWave,
            dt_rule: DtRule::default(),
            out: None,
            suites: Suites::default(),
        }
    }
}

impl StudyConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("config file: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        if self.degree > 3 {
            return Err(Error::Config(format!("degree must be in 0..=3, got {}", self.degree)));
        }
        if self.mesh == 0 {
            return Err(Error::Config("base mesh must have at least one subdivision".into()));
        }
        if self.refinements == 0 {
            return Err(Error::Config("at least one refinement is required".into()));
        }
        if self.mesh.checked_shl(self.refinements as u32).is_none_or(|n| n > 4096) {
            return Err(Error::Config("finest mesh exceeds 4096 subdivisions per side".into()));
        }
        if !(self.t_final > 0.0 && self.t_final.is_finite()) {
            return Err(Error::Config(format!("t_final must be positive, got {}", self.t_final)));
        }
        self.time_loop().validate()
    }

    pub fn discretization(&self) -> Discretization {
        Discretization::new(self.degree, self.variant)
    }

    pub fn levels(&self) -> Vec<usize> {
        (0..=self.refinements).map(|l| self.mesh << l).collect()
    }

    /// Time-loop settings; an unset cap exponent defaults to `(k+2)/4`.
    pub fn time_loop(&self) -> TimeLoopConfig {
        let mut dt_rule = self.dt_rule;
        dt_rule.cap_exponent = dt_rule.cap_exponent.or(Some((self.degree as f64 + 2.0) / 4.0));
        TimeLoopConfig { scheme: self.scheme, t_final: self.t_final, dt_rule, ..TimeLoopConfig::default() }
    }
}

/// Structured unit-square mesh with its operators.
pub struct Level {
    pub mesh: SimplicialMesh,
    pub bundle: OperatorBundle,
    pub skeleton: SkeletonSolver,
}

impl Level {
    pub fn build(n: usize, disc: Discretization) -> Result<Self> {
        let mesh = SimplicialMesh::build_structured(n, Rectangle::unit_square())?;
        let bundle = assemble(&mesh, build_packs(&mesh, disc)?)?;
        let skeleton = SkeletonSolver::new(&bundle)?;
        Ok(Self { mesh, bundle, skeleton })
    }

    /// Initial cell state for `problem`; L² data is projected onto the
    /// hidden constraint of the equal-order skeleton.
    pub fn initial_state(&self, problem: &ManufacturedProblem, ic: IcMode) -> Result<DVector<f64>> {
        let mut y = initial_state(&self.bundle, problem.sigma0(), problem.v0(), ic)?;
        if ic == IcMode::L2 {
            self.skeleton.project_constraint(&self.bundle, &mut y);
        }
        Ok(y)
    }
}

/// Runs one refinement level.
pub fn run_level(cfg: &StudyConfig, n: usize) -> Result<ReportRow> {
    let level = Level::build(n, cfg.discretization())?;
    let problem = cfg.problem.build();
    let bundle = &level.bundle;
    let (hinterp_sigma, hinterp_v) = if cfg.suites.hinterp_rates {
        let d = h_interp_distance(&bundle.packs, |p| (problem.grad_v)(p, 0.0), problem.v0())?;
        (d.sigma, d.v)
    } else {
        (f64::NAN, f64::NAN)
    };
    let mut row = ReportRow {
        n,
        h: level.mesh.h(),
        dofs: bundle.n_dofs(),
        err_sigma: f64::NAN,
        err_v: f64::NAN,
        stab_seminorm: f64::NAN,
        err_int_v: f64::NAN,
        err_int_v_l2: f64::NAN,
        hinterp_sigma,
        hinterp_v,
        dt: f64::NAN,
        steps: 0,
    };
    if cfg.suites.full_solve {
        let tl = cfg.time_loop();
        let dt = choose_dt(bundle, &level.skeleton, level.mesh.h(), level.mesh.h_min(), &tl);
        let y0 = level.initial_state(&problem, cfg.ic)?;
        let source = |p: &Point2<f64>, t: f64| (problem.f)(p, t);
        let f = cfg.problem.has_source().then_some(&source as crate::semidisc::Source<'_>);
        let traj = run(bundle, &level.skeleton, &tl, dt, y0, f)?;
        let e = energy_error(bundle, &traj.final_state, &problem, cfg.t_final);
        let ie = superconvergent_error(bundle, &traj.integral, &problem, cfg.t_final);
        row.err_sigma = e.sigma;
        row.err_v = e.v;
        row.stab_seminorm = traj.stab_integral.max(0.0).sqrt();
        row.err_int_v = ie.projected;
        row.err_int_v_l2 = ie.l2;
        row.dt = traj.dt.dt;
        row.steps = traj.dt.n_steps;
    }
    Ok(row)
}

/// Runs every level in sequence.
pub fn run_study(cfg: &StudyConfig) -> Result<ConvergenceReport> {
    cfg.validate()?;
    let rows = cfg.levels().into_iter().map(|n| run_level(cfg, n)).collect::<Result<_>>()?;
    Ok(ConvergenceReport { rows })
}

/// Outcome of one rate target on the finest pair of levels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateCheck {
    pub column: String,
    pub observed: Option<f64>,
    pub target: f64,
    pub passed: bool,
}

/// Finest-pair targets: `k+1` for the energy errors, `k+2` for the
/// time-integrated primal variable.
pub fn rate_checks(cfg: &StudyConfig, report: &ConvergenceReport) -> Vec<RateCheck> {
    let k = cfg.degree as f64;
    let mut targets = Vec::new();
    if cfg.suites.full_solve {
        targets.extend([("err_sigma", k + 1.0), ("err_v", k + 1.0), ("err_int_v", k + 2.0)]);
    }
    if cfg.suites.hinterp_rates {
        targets.extend([("hinterp_sigma", k + 1.0), ("hinterp_v", k + 2.0)]);
    }
    targets
        .into_iter()
        .map(|(column, target)| {
            let observed = report.finest_eoc(column);
            RateCheck {
                column: column.into(),
                observed,
                target,
                passed: observed.is_some_and(|o| o >= target - RATE_TOLERANCE),
            }
        })
        .collect()
}

const CSV_ERRORS: [(&str, &str); 7] = [
    ("err_sigma", "eoc_sigma"),
    ("err_v", "eoc_v"),
    ("stab_seminorm", "eoc_stab"),
    ("err_int_v", "eoc_int_v"),
    ("err_int_v_l2", "eoc_int_v_l2"),
    ("hinterp_sigma", "eoc_hinterp_sigma"),
    ("hinterp_v", "eoc_hinterp_v"),
];

fn csv_header() -> Vec<&'static str> {
    let mut h = vec!["h", "dofs", "err_sigma", "err_v", "stab_seminorm", "err_int_v"];
    h.extend(["eoc_sigma", "eoc_v", "eoc_stab", "eoc_int_v"]);
    h.extend(["err_int_v_l2", "eoc_int_v_l2", "hinterp_sigma", "eoc_hinterp_sigma", "hinterp_v", "eoc_hinterp_v"]);
    h.extend(["n", "dt", "steps", "degree", "variant", "ic", "scheme", "schema_version"]);
    h
}

fn sci(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.15e}")
    } else {
        String::new()
    }
}

fn opt_sci(x: Option<f64>) -> String {
    x.map(sci).unwrap_or_default()
}

/// CSV report: one row per level, 16 significant digits, empty fields for
/// undefined values.
pub fn report_csv(cfg: &StudyConfig, report: &ConvergenceReport) -> Result<String> {
    let eoc = |c: &str| report.eoc(c).expect("known column");
    let cols: Vec<Vec<Option<f64>>> = CSV_ERRORS.iter().map(|(c, _)| eoc(c)).collect();
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(csv_header()).map_err(csv_err)?;
    for (i, r) in report.rows.iter().enumerate() {
        let record = vec![
            sci(r.h),
            r.dofs.to_string(),
            sci(r.err_sigma),
            sci(r.err_v),
            sci(r.stab_seminorm),
            sci(r.err_int_v),
            opt_sci(cols[0][i]),
            opt_sci(cols[1][i]),
            opt_sci(cols[2][i]),
            opt_sci(cols[3][i]),
            sci(r.err_int_v_l2),
            opt_sci(cols[4][i]),
            sci(r.hinterp_sigma),
            opt_sci(cols[5][i]),
            sci(r.hinterp_v),
            opt_sci(cols[6][i]),
            r.n.to_string(),
            sci(r.dt),
            r.steps.to_string(),
            cfg.degree.to_string(),
            cfg.variant.to_string(),
            cfg.ic.to_string(),
            cfg.scheme.to_string(),
            SCHEMA_VERSION.to_string(),
        ];
        w.write_record(&record).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("CSV output is ASCII"))
}

fn csv_err(e: csv::Error) -> Error {
    Error::Config(format!("CSV: {e}"))
}

/// Parses a CSV report, rejecting layouts newer than this build.
pub fn parse_report_csv(text: &str) -> Result<ConvergenceReport> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let header = r.headers().map_err(csv_err)?.clone();
    let idx = |name: &str| {
        header.iter().position(|h| h == name).ok_or_else(|| Error::Config(format!("CSV report lacks column '{name}'")))
    };
    let schema = idx("schema_version")?;
    let cols: Vec<usize> = [
        "n", "h", "dofs", "err_sigma", "err_v", "stab_seminorm", "err_int_v", "err_int_v_l2", "hinterp_sigma",
        "hinterp_v", "dt", "steps",
    ]
    .iter()
    .map(|c| idx(c))
    .collect::<Result<_>>()?;
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(csv_err)?;
        let found: u32 = rec[schema].parse().map_err(|_| Error::Config("bad schema_version".into()))?;
        if found > SCHEMA_VERSION {
            return Err(Error::Schema { found, supported: SCHEMA_VERSION });
        }
        let f = |i: usize| -> Result<f64> {
            let s = &rec[cols[i]];
            if s.is_empty() {
                Ok(f64::NAN)
            } else {
                s.parse().map_err(|_| Error::Config(format!("bad number '{s}'")))
            }
        };
        let u = |i: usize| -> Result<usize> {
            rec[cols[i]].parse().map_err(|_| Error::Config(format!("bad integer '{}'", &rec[cols[i]])))
        };
        rows.push(ReportRow {
            n: u(0)?,
            h: f(1)?,
            dofs: u(2)?,
            err_sigma: f(3)?,
            err_v: f(4)?,
            stab_seminorm: f(5)?,
            err_int_v: f(6)?,
            err_int_v_l2: f(7)?,
            hinterp_sigma: f(8)?,
            hinterp_v: f(9)?,
            dt: f(10)?,
            steps: u(11)?,
        });
    }
    Ok(ConvergenceReport { rows })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Environment {
    pub crate_version: String,
    pub os: String,
    pub arch: String,
    pub threads: usize,
}

impl Environment {
    pub fn current() -> Self {
        Self {
            crate_version: env!("CARGO_PKG_VERSION").into(),
            os: std::env::consts::OS.into(),
            arch: std::env::consts::ARCH.into(),
            threads: rayon::current_num_threads(),
        }
    }
}

/// JSON mirror of the CSV report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JsonReport {
    pub schema_version: u32,
    pub config: StudyConfig,
    pub environment: Environment,
    pub rows: Vec<ReportRow>,
    pub eoc: std::collections::BTreeMap<String, Vec<Option<f64>>>,
    pub rate_checks: Vec<RateCheck>,
    pub notes: Vec<String>,
}

pub fn json_report(cfg: &StudyConfig, report: &ConvergenceReport) -> JsonReport {
    let eoc = CSV_ERRORS
        .iter()
        .map(|(c, e)| (e.to_string(), report.eoc(c).expect("known column")))
        .collect();
    JsonReport {
        schema_version: SCHEMA_VERSION,
        config: cfg.clone(),
        environment: Environment::current(),
        rows: report.rows.clone(),
        eoc,
        rate_checks: rate_checks(cfg, report),
        notes: vec![
            "unit square is convex: elliptic regularity pickup s = 1, integrated-error target k+2".into(),
            "err_int_v is the projected error of the time-integrated primal variable; err_int_v_l2 the plain L2 error"
                .into(),
        ],
    }
}

/// Parses a JSON report, rejecting layouts newer than this build.
pub fn parse_report_json(text: &str) -> Result<JsonReport> {
    let raw: serde_json::Value = serde_json::from_str(text)?;
    let found = raw.get("schema_version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
    if found > SCHEMA_VERSION {
        return Err(Error::Schema { found, supported: SCHEMA_VERSION });
    }
    Ok(serde_json::from_value(raw)?)
}

/// Writes `<prefix>.csv` and `<prefix>.json`, returning their paths.
pub fn write_reports(prefix: &Path, cfg: &StudyConfig, report: &ConvergenceReport) -> Result<(PathBuf, PathBuf)> {
    let csv_path = prefix.with_extension("csv");
    let json_path = prefix.with_extension("json");
    if let Some(dir) = csv_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(&csv_path, report_csv(cfg, report)?)?;
    let json = serde_json::to_string_pretty(&json_report(cfg, report))?;
    std::fs::write(&json_path, json + "\n")?;
    Ok((csv_path, json_path))
}

/// Process exit code for an error: 1 for configuration and usage problems,
/// 3 for numerical faults.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::NonFinite { .. }
        | Error::SolverNonConvergence { .. }
        | Error::Factorization(_)
        | Error::SingularLocalSystem { .. } => 3,
        _ => 1,
    }
}

/// One self-test check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SelftestReport {
    pub checks: Vec<Check>,
}

impl SelftestReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    /// Whether every check whose name starts with `prefix` passed.
    pub fn group_passed(&self, prefix: &str) -> bool {
        self.checks.iter().filter(|c| c.name.starts_with(prefix)).all(|c| c.passed)
    }
}

/// Self-test options; `flip_tau` negates `τ_T` on every cell before assembly.
#[derive(Debug, Clone, Copy, Default)]
pub struct SelftestOptions {
    pub flip_tau: bool,
}

fn check(name: &str, value: f64, tolerance: f64, detail: String) -> Check {
    Check { name: name.into(), value, tolerance, passed: value.is_finite() && value <= tolerance, detail }
}

fn failed(name: &str, detail: String) -> Check {
    Check { name: name.into(), value: f64::NAN, tolerance: 0.0, passed: false, detail }
}

fn random_hybrid(b: &OperatorBundle, rng: &mut ChaCha8Rng) -> HybridField {
    let mut r = |n: usize| DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
    let nf = b.nf();
    let mut vee_face = r(b.n_faces() * nf);
    for f in (0..b.n_faces()).filter(|&f| !b.face_is_interior(f)) {
        vee_face.rows_mut(f * nf, nf).fill(0.0);
    }
    HybridField { sigma: r(b.sigma_len()), vee_cell: r(b.n_cells() * b.nc()), vee_face }
}

fn hybrid_dot(a: &HybridField, b: &HybridField) -> f64 {
    a.sigma.dot(&b.sigma) + a.vee_cell.dot(&b.vee_cell) + a.vee_face.dot(&b.vee_face)
}

/// `max ‖S(p, Π_∂T p)‖ / ‖p‖` over the orthonormal basis of `P^{k'}(T)` on
/// every cell.
pub fn stab_identity_defect(packs: &[LocalOperatorPack]) -> f64 {
    let mut worst: f64 = 0.0;
    for pack in packs {
        let nc = pack.disc.n_cell_dofs();
        for i in 0..nc {
            let mut p = DVector::zeros(nc);
            p[i] = 1.0;
            let s = pack.stabilization_apply(&pack.interpolate_polynomial(&p));
            worst = worst.max(s.norm());
        }
    }
    worst
}

/// Largest relative coefficient defect of H-interpolation on random
/// polynomials of degree `(k, k')`, and the largest output on zero data.
pub fn h_interp_reproduction_defect(packs: &[LocalOperatorPack], rng: &mut ChaCha8Rng) -> Result<(f64, f64)> {
    let mut worst: f64 = 0.0;
    let mut zero: f64 = 0.0;
    for pack in packs {
        let ws = &pack.ws;
        let nk = crate::basis::poly_dim(pack.disc.k);
        let nc = pack.disc.n_cell_dofs();
        let sx = DVector::from_fn(nk, |_, _| rng.gen_range(-1.0..1.0));
        let sy = DVector::from_fn(nk, |_, _| rng.gen_range(-1.0..1.0));
        let v = DVector::from_fn(nc, |_, _| rng.gen_range(-1.0..1.0));
        let hi = h_interpolate(pack, |p| Vector2::new(ws.eval(&sx, p), ws.eval(&sy, p)), |p| ws.eval(&v, p))?;
        let mut s = DVector::zeros(2 * nk);
        s.rows_mut(0, nk).copy_from(&sx);
        s.rows_mut(nk, nk).copy_from(&sy);
        let scale = s.amax().max(v.amax());
        worst = worst.max((hi.sigma - s).amax() / scale).max((hi.vee - v).amax() / scale);
        let h0 = h_interpolate(pack, |_| Vector2::zeros(), |_| 0.0)?;
        zero = zero.max(h0.sigma.amax()).max(h0.vee.amax());
    }
    Ok((worst, zero))
}

/// Energy behaviour of a short implicit-midpoint run from random data:
/// returns the largest energy increase and the largest defect of
/// `E^{n+1} − E^n + dt·s_M(v̂^{n+1/2}, v̂^{n+1/2})`, both relative to `E^0`.
pub fn midpoint_dissipation_defect(bundle: &OperatorBundle, sk: &SkeletonSolver, seed: u64) -> Result<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut y = DVector::from_fn(bundle.state_len(), |_, _| rng.gen_range(-1.0..1.0));
    sk.project_constraint(bundle, &mut y);
    let cfg = TimeLoopConfig { scheme: Scheme::Midpoint, t_final: 0.25, ..TimeLoopConfig::default() };
    let dt = crate::timeint::DtChoice {
        dt: 0.05,
        n_steps: 5,
        rule_dt: 0.05,
        cap_dt: None,
        stability_dt: None,
        operator_norm: None,
    };
    let traj = run(bundle, sk, &cfg, dt, y, None)?;
    let e0 = traj.energy[0];
    let mut increase: f64 = 0.0;
    let mut identity: f64 = 0.0;
    for (n, w) in traj.energy.windows(2).enumerate() {
        increase = increase.max((w[1] - w[0]) / e0);
        identity = identity.max((w[1] - w[0] + traj.dissipation[n]).abs() / e0);
    }
    Ok((increase, identity))
}

/// Machine-precision identity suite on meshes `n ∈ {2, 4}`, `k ∈ {0, 1, 2}`,
/// both variants.
pub fn run_selftest(opts: SelftestOptions) -> SelftestReport {
    let mut report = SelftestReport::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for n in [2usize, 4] {
        for k in 0..=2 {
            for variant in [Variant::Equal, Variant::Mixed] {
                let tag = format!("n={n} k={k} {variant}");
                if let Err(e) = selftest_case(n, Discretization::new(k, variant), opts, &tag, &mut rng, &mut report) {
                    report.checks.push(failed("setup", format!("{tag}: {e}")));
                }
            }
        }
    }
    report
}

fn selftest_case(
    n: usize,
    disc: Discretization,
    opts: SelftestOptions,
    tag: &str,
    rng: &mut ChaCha8Rng,
    report: &mut SelftestReport,
) -> Result<()> {
    let mesh = SimplicialMesh::build_structured(n, Rectangle::unit_square())?;
    let mut packs = build_packs(&mesh, disc)?;
    if opts.flip_tau {
        for p in &mut packs {
            p.tau = -p.tau;
        }
    }
    let out = &mut report.checks;
    out.push(check("stab-id", stab_identity_defect(&packs), 1e-12, tag.into()));
    let (repro, zero) = h_interp_reproduction_defect(&packs, rng)?;
    out.push(check("h-interp reproduction", repro, 1e-12, tag.into()));
    out.push(check("h-interp zero", zero, 0.0, tag.into()));

    let mut ratios = (f64::INFINITY, 0.0f64);
    for p in &packs {
        let (lo, hi) = p.stability_equivalence_check(20, rng);
        ratios = (ratios.0.min(lo), ratios.1.max(hi));
    }
    let spread = if ratios.0 > 0.0 { ratios.1 / ratios.0 } else { f64::INFINITY };
    out.push(check("stability equivalence", spread, 1e6, format!("{tag}: ratios in [{:.3e}, {:.3e}]", ratios.0, ratios.1)));

    let bundle = assemble(&mesh, packs)?;
    let x = random_hybrid(&bundle, rng);
    let y = random_hybrid(&bundle, rng);
    let lhs = hybrid_dot(&bundle.coupling_apply(&x), &y);
    let rhs = hybrid_dot(&x, &bundle.coupling_apply(&y));
    out.push(check("skew-adjointness", (lhs + rhs).abs() / lhs.abs().max(1.0), 1e-12, tag.into()));

    let worst_s = (0..50)
        .map(|_| {
            let z = random_hybrid(&bundle, rng);
            bundle.stabilization_energy(&z.vee_cell, &z.vee_face)
        })
        .fold(f64::INFINITY, f64::min);
    out.push(check("energy-dissipation s_M >= 0", (-worst_s).max(0.0), 0.0, format!("{tag}: min s_M = {worst_s:.3e}")));

    let sk = match SkeletonSolver::new(&bundle) {
        Ok(sk) => sk,
        Err(e) => {
            out.push(failed("transmission", format!("{tag}: {e}")));
            out.push(failed("energy-dissipation midpoint", format!("{tag}: {e}")));
            return Ok(());
        }
    };
    let mut state = DVector::from_fn(bundle.state_len(), |_, _| rng.gen_range(-1.0..1.0));
    sk.project_constraint(&bundle, &mut state);
    let (_, vf) = ode_rhs_with_faces(&bundle, &sk, &state, 0.0, None);
    let field = bundle.to_hybrid(&state, vf);
    let tr = transmission_residual(&bundle, &hdg_flux_trace(&bundle, &field));
    out.push(check("transmission", tr, 1e-11, tag.into()));

    match midpoint_dissipation_defect(&bundle, &sk, 7) {
        Ok((increase, identity)) => {
            out.push(check("energy-dissipation monotone", increase.max(0.0), 1e-12, tag.into()));
            out.push(check("energy-dissipation identity", identity, 1e-10, tag.into()));
        }
        Err(e) => out.push(failed("energy-dissipation midpoint", format!("{tag}: {e}"))),
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> StudyConfig {
        StudyConfig { degree: 0, variant: Variant::Mixed, mesh: 2, refinements: 1, t_final: 0.1, ..Default::default() }
    }

    #[test]
    fn config_validation() {
        assert!(StudyConfig::default().validate().is_ok());
        assert!(StudyConfig { degree: 4, ..Default::default() }.validate().is_err());
        assert!(StudyConfig { refinements: 0, ..Default::default() }.validate().is_err());
        assert!(StudyConfig { t_final: -1.0, ..Default::default() }.validate().is_err());
        assert!(StudyConfig::from_json(r#"{"variant": "diagonal"}"#).is_err());
        assert!(StudyConfig::from_json(r#"{"unknown_key": 1}"#).is_err());
        let c = StudyConfig::from_json(r#"{"degree": 2, "variant": "equal", "ic": "l2"}"#).unwrap();
        assert_eq!((c.degree, c.variant, c.ic), (2, Variant::Equal, IcMode::L2));
        assert_eq!(StudyConfig { mesh: 4, refinements: 3, ..Default::default() }.levels(), vec![4, 8, 16, 32]);
    }

    #[test]
    fn csv_round_trip_and_schema_guard() {
        let cfg = small();
        let report = run_study(&cfg).unwrap();
        let text = report_csv(&cfg, &report).unwrap();
        assert!(text.starts_with("h,dofs,err_sigma,err_v,stab_seminorm,err_int_v,eoc_sigma,eoc_v,eoc_stab,eoc_int_v"));
        let back = parse_report_csv(&text).unwrap();
        assert_eq!(back.rows.len(), 2);
        for (a, b) in back.rows.iter().zip(&report.rows) {
            assert_eq!(a.h, b.h);
            assert!((a.err_int_v - b.err_int_v).abs() <= 1e-15 * b.err_int_v);
        }
        let eoc_csv: f64 = text.lines().nth(2).unwrap().split(',').nth(9).unwrap().parse().unwrap();
        let oracle = (report.rows[0].err_int_v / report.rows[1].err_int_v).log2();
        assert!((eoc_csv - oracle).abs() < 1e-12);
        let newer = text.replace(",1\n", ",2\n");
        assert!(matches!(parse_report_csv(&newer), Err(Error::Schema { found: 2, supported: 1 })));
    }

    #[test]
    fn json_schema_guard() {
        let cfg = small();
        let report = ConvergenceReport::default();
        let mut j = serde_json::to_value(json_report(&cfg, &report)).unwrap();
        assert!(parse_report_json(&j.to_string()).is_ok());
        j["schema_version"] = serde_json::json!(SCHEMA_VERSION + 1);
        assert!(matches!(parse_report_json(&j.to_string()), Err(Error::Schema { .. })));
    }

    #[test]
    fn study_is_deterministic() {
        let cfg = small();
        let a = report_csv(&cfg, &run_study(&cfg).unwrap()).unwrap();
        let b = report_csv(&cfg, &run_study(&cfg).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::Config("x".into())), 1);
        assert_eq!(exit_code(&Error::NonFinite { step: 3 }), 3);
        assert_eq!(exit_code(&Error::SolverNonConvergence { iterations: 1, residual: 1.0 }), 3);
    }
}
