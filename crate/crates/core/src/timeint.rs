//! Time marching of the reduced system `y' = L y + b(t)`.
//!
//! Two schemes: classical RK4 and the implicit midpoint rule, the latter
//! solved matrix-free with restarted GMRES. Both carry the time-integrated
//! cell unknowns `∫₀ᵗ v_T` and the accumulated stabilization `∫₀ᵗ s_M(v̂, v̂)`.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::semidisc::{
    hdg_flux_trace, ode_rhs_with_faces, transmission_residual, OperatorBundle, SkeletonSolver, Source,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Rk4,
    Midpoint,
}

impl std::str::FromStr for Scheme {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rk4" => Ok(Scheme::Rk4),
            "midpoint" | "implicit-midpoint" => Ok(Scheme::Midpoint),
            other => Err(Error::Config(format!("unknown time scheme '{other}'"))),
        }
    }
}

impl std::fmt::Display for Scheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Scheme::Rk4 => "rk4",
            Scheme::Midpoint => "midpoint",
        })
    }
}

/// Step-size rule. The step is the smallest of
/// `cfl · h_min / (2k+1)`, `h^{cap_exponent}` (when set) and
/// `stability / ‖L‖₂` (RK4 only), rounded down so that it divides `T_f`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DtRule {
    pub cfl: f64,
    /// `q` in the cap `dt ≤ h^q`; the superconvergence runs use `(k+2)/4`.
    pub cap_exponent: Option<f64>,
    /// Fraction of the RK4 stability interval used against `‖L‖₂`.
    pub stability: f64,
}

impl Default for DtRule {
    fn default() -> Self {
        Self { cfl: 0.2, cap_exponent: None, stability: 2.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeLoopConfig {
    pub scheme: Scheme,
    pub t_final: f64,
    pub dt_rule: DtRule,
    /// Instants at which the state is recorded (snapped to the step grid).
    pub record: Vec<f64>,
    /// Relative residual of the implicit solves.
    pub solver_tol: f64,
    pub max_iterations: usize,
    /// Evaluate the HDG transmission residual at every step.
    pub check_transmission: bool,
}

impl Default for TimeLoopConfig {
    fn default() -> Self {
        Self {
            scheme: Scheme::Rk4,
            t_final: 1.0,
            dt_rule: DtRule::default(),
            record: Vec::new(),
            solver_tol: 1e-12,
            max_iterations: 5000,
            check_transmission: false,
        }
    }
}

impl TimeLoopConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.t_final.is_finite() || self.t_final < 0.0 {
            return Err(Error::Config(format!("t_final must be non-negative, got {}", self.t_final)));
        }
        if [self.dt_rule.cfl, self.dt_rule.stability].iter().any(|c| c.is_nan() || *c <= 0.0) {
            return Err(Error::Config("dt rule constants must be positive".into()));
        }
        if let Some(t) = self.record.iter().find(|&&t| !(0.0..=self.t_final).contains(&t)) {
            return Err(Error::Config(format!("record instant {t} outside [0, t_final]")));
        }
        Ok(())
    }
}

/// The chosen step and the candidates it came from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DtChoice {
    pub dt: f64,
    pub n_steps: usize,
    pub rule_dt: f64,
    pub cap_dt: Option<f64>,
    pub stability_dt: Option<f64>,
    pub operator_norm: Option<f64>,
}

/// Linear part `L y` of the reduced right-hand side.
pub fn apply_operator(bundle: &OperatorBundle, sk: &SkeletonSolver, y: &DVector<f64>) -> DVector<f64> {
    ode_rhs_with_faces(bundle, sk, y, 0.0, None).0
}

/// Estimate of `‖L‖₂` by power iteration on `LᵀL`, using `Lᵀ = P L P` with
/// `P = diag(I, −I)`. Returned with a 5% safety margin.
pub fn operator_norm_estimate(bundle: &OperatorBundle, sk: &SkeletonSolver, iterations: usize) -> f64 {
    let n = bundle.state_len();
    let off = bundle.sigma_len();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut x = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
    sk.project_constraint(bundle, &mut x);
    let flip = |v: &mut DVector<f64>| {
        let mut tail = v.rows_mut(off, n - off);
        tail.neg_mut();
    };
    let mut est = 0.0;
    for _ in 0..iterations {
        let nrm = x.norm();
        if nrm == 0.0 {
            return 0.0;
        }
        x /= nrm;
        let mut lx = apply_operator(bundle, sk, &x);
        flip(&mut lx);
        let mut y = apply_operator(bundle, sk, &lx);
        flip(&mut y);
        est = y.dot(&x).abs().sqrt();
        x = y;
    }
    1.05 * est
}

/// Picks the step for a run on a mesh with diameter `h` and smallest cell
/// diameter `h_min`.
pub fn choose_dt(
    bundle: &OperatorBundle,
    sk: &SkeletonSolver,
    h: f64,
    h_min: f64,
    cfg: &TimeLoopConfig,
) -> DtChoice {
    let k = bundle.disc.k as f64;
    let rule_dt = cfg.dt_rule.cfl * h_min / (2.0 * k + 1.0);
    let cap_dt = cfg.dt_rule.cap_exponent.map(|q| h.powf(q));
    let (stability_dt, operator_norm) = match cfg.scheme {
        Scheme::Rk4 => {
            let norm = operator_norm_estimate(bundle, sk, 60);
            (Some(cfg.dt_rule.stability / norm.max(f64::MIN_POSITIVE)), Some(norm))
        }
        Scheme::Midpoint => (None, None),
    };
    let dt = [Some(rule_dt), cap_dt, stability_dt].into_iter().flatten().fold(f64::INFINITY, f64::min);
    let n_steps = if cfg.t_final == 0.0 { 0 } else { (cfg.t_final / dt).ceil() as usize };
    let dt = if n_steps == 0 { 0.0 } else { cfg.t_final / n_steps as f64 };
    DtChoice { dt, n_steps, rule_dt, cap_dt, stability_dt, operator_norm }
}

/// Outcome of one step.
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub state: DVector<f64>,
    /// Increment of `∫ v_T` over the step (cell coefficients).
    pub integral_increment: DVector<f64>,
    /// Increment of `∫ s_M(v̂, v̂)` over the step.
    pub stab_increment: f64,
    pub solver_iterations: usize,
}

fn vee_part(bundle: &OperatorBundle, y: &DVector<f64>) -> DVector<f64> {
    let off = bundle.sigma_len();
    y.rows(off, y.len() - off).clone_owned()
}

/// One classical RK4 step, with the integrals advanced by the same stages.
pub fn step_rk4(
    bundle: &OperatorBundle,
    sk: &SkeletonSolver,
    y: &DVector<f64>,
    t: f64,
    dt: f64,
    f: Option<Source<'_>>,
) -> StepOutput {
    let stage = |x: &DVector<f64>, tt: f64| {
        let (d, vf) = ode_rhs_with_faces(bundle, sk, x, tt, f);
        let v = vee_part(bundle, x);
        let s = bundle.stabilization_energy(&v, &vf);
        (d, v, s)
    };
    let (k1, v1, s1) = stage(y, t);
    let y2 = y + &k1 * (0.5 * dt);
    let (k2, v2, s2) = stage(&y2, t + 0.5 * dt);
    let y3 = y + &k2 * (0.5 * dt);
    let (k3, v3, s3) = stage(&y3, t + 0.5 * dt);
    let y4 = y + &k3 * dt;
    let (k4, v4, s4) = stage(&y4, t + dt);
    let w = dt / 6.0;
    StepOutput {
        state: y + (k1 + (k2 + k3) * 2.0 + k4) * w,
        integral_increment: (v1 + (v2 + v3) * 2.0 + v4) * w,
        stab_increment: (s1 + 2.0 * (s2 + s3) + s4) * w,
        solver_iterations: 0,
    }
}

/// Restarted GMRES for `A x = b` with a matrix-free `A`.
pub fn gmres<A: Fn(&DVector<f64>) -> DVector<f64>>(
    apply: A,
    b: &DVector<f64>,
    x0: DVector<f64>,
    tol: f64,
    restart: usize,
    max_iterations: usize,
) -> Result<(DVector<f64>, usize, f64)> {
    let bnorm = b.norm();
    if bnorm == 0.0 {
        return Ok((DVector::zeros(b.len()), 0, 0.0));
    }
    let mut x = x0;
    let mut total = 0;
    loop {
        let r = b - apply(&x);
        let beta = r.norm();
        if beta <= tol * bnorm {
            return Ok((x, total, beta / bnorm));
        }
        if total >= max_iterations {
            return Err(Error::SolverNonConvergence { iterations: total, residual: beta / bnorm });
        }
        let m = restart.min(max_iterations - total).max(1);
        let mut basis: Vec<DVector<f64>> = vec![r / beta];
        let mut hess = DMatrix::<f64>::zeros(m + 1, m);
        let mut cs = vec![0.0; m];
        let mut sn = vec![0.0; m];
        let mut g = DVector::<f64>::zeros(m + 1);
        g[0] = beta;
        let mut used = 0;
        for j in 0..m {
            let mut w = apply(&basis[j]);
            // modified Gram-Schmidt, twice for robustness
            for _ in 0..2 {
                for (i, q) in basis.iter().enumerate() {
                    let hij = q.dot(&w);
                    hess[(i, j)] += hij;
                    w.axpy(-hij, q, 1.0);
                }
            }
            let hn = w.norm();
            hess[(j + 1, j)] = hn;
            for i in 0..j {
                let a = hess[(i, j)];
                let c = hess[(i + 1, j)];
                hess[(i, j)] = cs[i] * a + sn[i] * c;
                hess[(i + 1, j)] = -sn[i] * a + cs[i] * c;
            }
            let (a, c) = (hess[(j, j)], hess[(j + 1, j)]);
            let d = a.hypot(c);
            cs[j] = if d == 0.0 { 1.0 } else { a / d };
            sn[j] = if d == 0.0 { 0.0 } else { c / d };
            hess[(j, j)] = d;
            hess[(j + 1, j)] = 0.0;
            g[j + 1] = -sn[j] * g[j];
            g[j] *= cs[j];
            used = j + 1;
            total += 1;
            if g[j + 1].abs() <= tol * bnorm || hn == 0.0 {
                break;
            }
            basis.push(w / hn);
        }
        let r = hess.view((0, 0), (used, used)).clone_owned();
        let coef = r
            .solve_upper_triangular(&g.rows(0, used).clone_owned())
            .ok_or(Error::SolverNonConvergence { iterations: total, residual: f64::NAN })?;
        for (i, c) in coef.iter().enumerate() {
            x.axpy(*c, &basis[i], 1.0);
        }
    }
}

/// One implicit midpoint step,
/// `(I − dt/2 L) y⁺ = (I + dt/2 L) y + dt b(t + dt/2)`.
#[allow(clippy::too_many_arguments)]
pub fn step_midpoint(
    bundle: &OperatorBundle,
    sk: &SkeletonSolver,
    y: &DVector<f64>,
    t: f64,
    dt: f64,
    f: Option<Source<'_>>,
    tol: f64,
    max_iterations: usize,
) -> Result<StepOutput> {
    let ly = apply_operator(bundle, sk, y);
    let mut rhs = y + &ly * (0.5 * dt);
    if let Some(f) = f {
        rhs += bundle.load(f, t + 0.5 * dt) * dt;
    }
    // initial guess: explicit Euler predictor
    let guess = y + &ly * dt;
    let (next, iterations, _) = gmres(
        |x| x - apply_operator(bundle, sk, x) * (0.5 * dt),
        &rhs,
        guess,
        tol,
        60,
        max_iterations,
    )?;
    let half = (y + &next) * 0.5;
    let (_, vf) = ode_rhs_with_faces(bundle, sk, &half, t + 0.5 * dt, None);
    let vhalf = vee_part(bundle, &half);
    let s = bundle.stabilization_energy(&vhalf, &vf);
    Ok(StepOutput {
        state: next,
        integral_increment: vhalf * dt,
        stab_increment: s * dt,
        solver_iterations: iterations,
    })
}

/// `½(‖σ_T‖² + ‖v_T‖²)`; the cell bases are orthonormal.
pub fn energy(y: &DVector<f64>) -> f64 {
    0.5 * y.norm_squared()
}

/// Recorded run data.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub dt: DtChoice,
    /// `(t, state)` at the recorded instants.
    pub records: Vec<(f64, DVector<f64>)>,
    pub final_state: DVector<f64>,
    /// `∫₀^{T_f} v_T` (cell coefficients).
    pub integral: DVector<f64>,
    /// `∫₀^{T_f} s_M(v̂, v̂) dt`.
    pub stab_integral: f64,
    /// Discrete energy after every step, starting with the initial one.
    pub energy: Vec<f64>,
    /// Per-step `dt · s_M(v̂^{n+1/2}, v̂^{n+1/2})` (midpoint) or the RK4 stage
    /// quadrature of `∫ s_M` over the step.
    pub dissipation: Vec<f64>,
    pub max_transmission: f64,
    pub solver_iterations: usize,
}

/// Marches `y0` to `t_final`.
pub fn run(
    bundle: &OperatorBundle,
    sk: &SkeletonSolver,
    cfg: &TimeLoopConfig,
    dt: DtChoice,
    y0: DVector<f64>,
    f: Option<Source<'_>>,
) -> Result<Trajectory> {
    cfg.validate()?;
    let record_steps: Vec<usize> = cfg
        .record
        .iter()
        .map(|&t| if dt.dt == 0.0 { 0 } else { (t / dt.dt).round() as usize })
        .collect();
    let mut traj = Trajectory {
        dt,
        records: Vec::new(),
        final_state: y0.clone(),
        integral: DVector::zeros(y0.len() - bundle.sigma_len()),
        stab_integral: 0.0,
        energy: vec![energy(&y0)],
        dissipation: Vec::new(),
        max_transmission: 0.0,
        solver_iterations: 0,
    };
    let mut y = y0;
    let record = |step: usize, y: &DVector<f64>, traj: &mut Trajectory| {
        for (i, &s) in record_steps.iter().enumerate() {
            if s == step {
                traj.records.push((cfg.record[i], y.clone()));
            }
        }
    };
    record(0, &y, &mut traj);
    for n in 0..dt.n_steps {
        let t = n as f64 * dt.dt;
        let out = match cfg.scheme {
            Scheme::Rk4 => step_rk4(bundle, sk, &y, t, dt.dt, f),
            Scheme::Midpoint => {
                step_midpoint(bundle, sk, &y, t, dt.dt, f, cfg.solver_tol, cfg.max_iterations)?
            }
        };
        if out.state.iter().any(|v| !v.is_finite()) || !out.stab_increment.is_finite() {
            return Err(Error::NonFinite { step: n + 1 });
        }
        y = out.state;
        traj.integral += out.integral_increment;
        traj.stab_integral += out.stab_increment;
        traj.dissipation.push(out.stab_increment);
        traj.solver_iterations += out.solver_iterations;
        traj.energy.push(energy(&y));
        if cfg.check_transmission {
            let (_, vf) = ode_rhs_with_faces(bundle, sk, &y, t + dt.dt, f);
            let field = bundle.to_hybrid(&y, vf);
            let r = transmission_residual(bundle, &hdg_flux_trace(bundle, &field));
            traj.max_transmission = traj.max_transmission.max(r);
        }
        record(n + 1, &y, &mut traj);
    }
    traj.final_state = y;
    Ok(traj)
}
