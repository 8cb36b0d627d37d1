//! Manufactured solutions, error norms and experimental orders of convergence.

use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::{DVector, Point2, Vector2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::h_interp::h_interpolate;
use crate::local_ops::LocalOperatorPack;
use crate::semidisc::OperatorBundle;

pub type ScalarField = Arc<dyn Fn(&Point2<f64>, f64) -> f64 + Send + Sync>;
pub type VectorField = Arc<dyn Fn(&Point2<f64>, f64) -> Vector2<f64> + Send + Sync>;

/// Closed-form solution of `∂_t σ − ∇v = 0`, `∂_t v − ∇·σ = f` with its
/// derivatives and the time integral of `v`.
#[derive(Clone)]
pub struct ManufacturedProblem {
    pub name: String,
    pub v: ScalarField,
    pub dt_v: ScalarField,
    pub grad_v: VectorField,
    pub sigma: VectorField,
    pub dt_sigma: VectorField,
    pub div_sigma: ScalarField,
    pub f: ScalarField,
    /// `∫₀ᵗ v(x, s) ds`.
    pub int_v: ScalarField,
    /// Whether `v` vanishes on the boundary of the unit square.
    pub zero_boundary: bool,
}

impl std::fmt::Debug for ManufacturedProblem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ManufacturedProblem").field("name", &self.name).finish_non_exhaustive()
    }
}

/// Angular frequency of the standing wave, `√2 π`.
pub fn standing_wave_omega() -> f64 {
    std::f64::consts::SQRT_2 * PI
}

/// `u = sin(πx) sin(πy) sin(ωt)/ω`, `v = ∂_t u`, `σ = ∇u`, `f = 0`.
pub fn standing_wave() -> ManufacturedProblem {
    let w = standing_wave_omega();
    let s = |p: &Point2<f64>| (PI * p.x).sin() * (PI * p.y).sin();
    let g = |p: &Point2<f64>| {
        Vector2::new(PI * (PI * p.x).cos() * (PI * p.y).sin(), PI * (PI * p.x).sin() * (PI * p.y).cos())
    };
    ManufacturedProblem {
        name: "standing-wave".into(),
        v: Arc::new(move |p, t| s(p) * (w * t).cos()),
        dt_v: Arc::new(move |p, t| -w * s(p) * (w * t).sin()),
        grad_v: Arc::new(move |p, t| g(p) * (w * t).cos()),
        sigma: Arc::new(move |p, t| g(p) * ((w * t).sin() / w)),
        dt_sigma: Arc::new(move |p, t| g(p) * (w * t).cos()),
        div_sigma: Arc::new(move |p, t| -2.0 * PI * PI * s(p) * (w * t).sin() / w),
        f: Arc::new(|_, _| 0.0),
        int_v: Arc::new(move |p, t| s(p) * (w * t).sin() / w),
        zero_boundary: true,
    }
}

/// The trivial solution.
pub fn zero_problem() -> ManufacturedProblem {
    ManufacturedProblem {
        name: "zero".into(),
        v: Arc::new(|_, _| 0.0),
        dt_v: Arc::new(|_, _| 0.0),
        grad_v: Arc::new(|_, _| Vector2::zeros()),
        sigma: Arc::new(|_, _| Vector2::zeros()),
        dt_sigma: Arc::new(|_, _| Vector2::zeros()),
        div_sigma: Arc::new(|_, _| 0.0),
        f: Arc::new(|_, _| 0.0),
        int_v: Arc::new(|_, _| 0.0),
        zero_boundary: true,
    }
}

/// A polynomial solution `v = t·x(1−x)y(1−y)`, `σ = (t²/2)∇(x(1−x)y(1−y))`
/// with the matching source.
pub fn polynomial_problem() -> ManufacturedProblem {
    let b = |p: &Point2<f64>| p.x * (1.0 - p.x) * p.y * (1.0 - p.y);
    let gb = |p: &Point2<f64>| {
        Vector2::new((1.0 - 2.0 * p.x) * p.y * (1.0 - p.y), p.x * (1.0 - p.x) * (1.0 - 2.0 * p.y))
    };
    let lb = |p: &Point2<f64>| -2.0 * p.y * (1.0 - p.y) - 2.0 * p.x * (1.0 - p.x);
    ManufacturedProblem {
        name: "polynomial".into(),
        v: Arc::new(move |p, t| t * b(p)),
        dt_v: Arc::new(move |p, _| b(p)),
        grad_v: Arc::new(move |p, t| gb(p) * t),
        sigma: Arc::new(move |p, t| gb(p) * (0.5 * t * t)),
        dt_sigma: Arc::new(move |p, t| gb(p) * t),
        div_sigma: Arc::new(move |p, t| 0.5 * t * t * lb(p)),
        f: Arc::new(move |p, t| b(p) - 0.5 * t * t * lb(p)),
        int_v: Arc::new(move |p, t| 0.5 * t * t * b(p)),
        zero_boundary: true,
    }
}

impl ManufacturedProblem {
    pub fn sigma0(&self) -> impl Fn(&Point2<f64>) -> Vector2<f64> + Sync + '_ {
        move |p| (self.sigma)(p, 0.0)
    }

    pub fn v0(&self) -> impl Fn(&Point2<f64>) -> f64 + Sync + '_ {
        move |p| (self.v)(p, 0.0)
    }

    /// Largest pointwise residual of the two field equations (and of the
    /// boundary condition when claimed) at the cell and face quadrature
    /// points of `packs`, over the sample times.
    pub fn residual(&self, packs: &[LocalOperatorPack], times: &[f64]) -> f64 {
        packs
            .par_iter()
            .map(|pack| {
                let mut worst: f64 = 0.0;
                for &t in times {
                    for p in &pack.ws.quad.points {
                        let r1 = ((self.dt_sigma)(p, t) - (self.grad_v)(p, t)).amax();
                        let r2 = (self.dt_v)(p, t) - (self.div_sigma)(p, t) - (self.f)(p, t);
                        worst = worst.max(r1).max(r2.abs());
                    }
                    if self.zero_boundary {
                        for fd in &pack.ws.faces {
                            let on_boundary = [fd.start, fd.end].iter().all(|q| {
                                q.x.abs() < 1e-14 || (q.x - 1.0).abs() < 1e-14
                            }) || [fd.start, fd.end]
                                .iter()
                                .all(|q| q.y.abs() < 1e-14 || (q.y - 1.0).abs() < 1e-14);
                            if on_boundary {
                                for p in &fd.quad.points {
                                    worst = worst.max((self.v)(p, t).abs());
                                }
                            }
                        }
                    }
                }
                worst
            })
            .collect::<Vec<_>>()
            .into_iter()
            .fold(0.0, f64::max)
    }
}

/// Sum of per-cell values in cell order, independent of the thread count.
fn ordered_sum(parts: Vec<f64>) -> f64 {
    parts.into_iter().sum()
}

/// Squared L² distance on one cell between a scalar expansion and a field.
pub fn cell_error_sq<F: Fn(&Point2<f64>) -> f64>(pack: &LocalOperatorPack, coeffs: &DVector<f64>, f: F) -> f64 {
    let ws = &pack.ws;
    let n = coeffs.len();
    ws.quad
        .points
        .iter()
        .enumerate()
        .map(|(q, p)| {
            let uh: f64 = (0..n).map(|i| coeffs[i] * ws.vals[(q, i)]).sum();
            let d = uh - f(p);
            ws.quad.weights[q] * d * d
        })
        .sum()
}

/// Squared L² distance on one cell between a stacked `[x; y]` expansion and a
/// vector field.
pub fn cell_error_sq_vec<F: Fn(&Point2<f64>) -> Vector2<f64>>(
    pack: &LocalOperatorPack,
    coeffs: &DVector<f64>,
    f: F,
) -> f64 {
    let n = coeffs.len() / 2;
    let cx = coeffs.rows(0, n).clone_owned();
    let cy = coeffs.rows(n, n).clone_owned();
    cell_error_sq(pack, &cx, |p| f(p).x) + cell_error_sq(pack, &cy, |p| f(p).y)
}

/// `(‖σ − σ_T‖_Ω, ‖v − v_T‖_Ω)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyError {
    pub sigma: f64,
    pub v: f64,
}

/// Energy-error components of the cell state `y` at time `t`.
pub fn energy_error(bundle: &OperatorBundle, y: &DVector<f64>, problem: &ManufacturedProblem, t: f64) -> EnergyError {
    let parts: Vec<(f64, f64)> = (0..bundle.n_cells())
        .into_par_iter()
        .map(|c| {
            let pack = &bundle.packs[c];
            let es = cell_error_sq_vec(pack, &bundle.sigma_block(y, c), |p| (problem.sigma)(p, t));
            let ev = cell_error_sq(pack, &bundle.vee_block(y, c), |p| (problem.v)(p, t));
            (es, ev)
        })
        .collect();
    let (s, v): (Vec<f64>, Vec<f64>) = parts.into_iter().unzip();
    EnergyError { sigma: ordered_sum(s).sqrt(), v: ordered_sum(v).sqrt() }
}

/// Errors on the time-integrated primal variable.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntegratedError {
    /// `‖Π^{k'}(∫₀^{T_f} v) − ∫₀^{T_f} v_T‖_Ω`, the quantity with rate `k+1+s`.
    pub projected: f64,
    /// `‖∫₀^{T_f} v − ∫₀^{T_f} v_T‖_Ω`.
    pub l2: f64,
}

/// Errors of the accumulated cell integral `∫₀^{T_f} v_T` against the exact
/// integral.
pub fn superconvergent_error(
    bundle: &OperatorBundle,
    integral: &DVector<f64>,
    problem: &ManufacturedProblem,
    t_final: f64,
) -> IntegratedError {
    let nc = bundle.disc.n_cell_dofs();
    let deg = bundle.disc.cell_degree() as i64;
    let parts: Vec<(f64, f64)> = (0..bundle.n_cells())
        .into_par_iter()
        .map(|c| {
            let pack = &bundle.packs[c];
            let coeffs = integral.rows(c * nc, nc).clone_owned();
            let exact = |p: &Point2<f64>| (problem.int_v)(p, t_final);
            let proj = pack.ws.l2_project_cell(exact, deg);
            ((proj - &coeffs).norm_squared(), cell_error_sq(pack, &coeffs, exact))
        })
        .collect();
    let (p, l): (Vec<f64>, Vec<f64>) = parts.into_iter().unzip();
    IntegratedError { projected: ordered_sum(p).sqrt(), l2: ordered_sum(l).sqrt() }
}

/// Best-approximation errors `(‖σ − Π^k σ‖_Ω, ‖v − Π^{k'} v‖_Ω)` at time `t`.
pub fn projection_error(bundle: &OperatorBundle, problem: &ManufacturedProblem, t: f64) -> EnergyError {
    let k = bundle.disc.k as i64;
    let kc = bundle.disc.cell_degree() as i64;
    let parts: Vec<(f64, f64)> = bundle
        .packs
        .par_iter()
        .map(|pack| {
            let sig = |p: &Point2<f64>| (problem.sigma)(p, t);
            let v = |p: &Point2<f64>| (problem.v)(p, t);
            let ps = pack.ws.l2_project_cell_vec(sig, k);
            let pv = pack.ws.l2_project_cell(v, kc);
            (cell_error_sq_vec(pack, &ps, sig), cell_error_sq(pack, &pv, v))
        })
        .collect();
    let (s, v): (Vec<f64>, Vec<f64>) = parts.into_iter().unzip();
    EnergyError { sigma: ordered_sum(s).sqrt(), v: ordered_sum(v).sqrt() }
}

/// Distances `(‖Π^σ − Π^k σ‖_Ω, ‖Π^v − Π^{k'} v‖_Ω)` between the
/// H-interpolate and the L² projections.
pub fn h_interp_distance<S, V>(packs: &[LocalOperatorPack], sigma: S, v: V) -> crate::Result<EnergyError>
where
    S: Fn(&Point2<f64>) -> Vector2<f64> + Sync,
    V: Fn(&Point2<f64>) -> f64 + Sync,
{
    let parts: Vec<(f64, f64)> = packs
        .par_iter()
        .map(|pack| {
            let k = pack.disc.k as i64;
            let kc = pack.disc.cell_degree() as i64;
            let hi = h_interpolate(pack, &sigma, &v)?;
            let ps = pack.ws.l2_project_cell_vec(&sigma, k);
            let pv = pack.ws.l2_project_cell(&v, kc);
            Ok(((hi.sigma - ps).norm_squared(), (hi.vee - pv).norm_squared()))
        })
        .collect::<crate::Result<_>>()?;
    let (s, v): (Vec<f64>, Vec<f64>) = parts.into_iter().unzip();
    Ok(EnergyError { sigma: ordered_sum(s).sqrt(), v: ordered_sum(v).sqrt() })
}

/// Experimental orders `log(e_{i−1}/e_i) / log(h_{i−1}/h_i)`; the first entry
/// and any entry touching a non-positive or non-finite value are `None`.
pub fn compute_eoc(h: &[f64], errors: &[f64]) -> Vec<Option<f64>> {
    assert_eq!(h.len(), errors.len(), "h and error columns differ in length");
    let ok = |e: f64| e.is_finite() && e > 0.0;
    (0..errors.len())
        .map(|i| {
            if i == 0 || !ok(errors[i - 1]) || !ok(errors[i]) || !(h[i - 1] > h[i] && h[i] > 0.0) {
                None
            } else {
                Some((errors[i - 1] / errors[i]).ln() / (h[i - 1] / h[i]).ln())
            }
        })
        .collect()
}

/// One refinement level of a convergence study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub n: usize,
    pub h: f64,
    pub dofs: usize,
    pub err_sigma: f64,
    pub err_v: f64,
    /// `(∫₀^{T_f} s_M(v̂, v̂) dt)^{1/2}`.
    pub stab_seminorm: f64,
    /// Projected error of the time-integrated primal variable.
    pub err_int_v: f64,
    /// Plain L² error of the time-integrated primal variable.
    pub err_int_v_l2: f64,
    pub hinterp_sigma: f64,
    pub hinterp_v: f64,
    pub dt: f64,
    pub steps: usize,
}

/// Error columns with experimental orders, in CSV order.
pub const ERROR_COLUMNS: [&str; 7] =
    ["err_sigma", "err_v", "stab_seminorm", "err_int_v", "err_int_v_l2", "hinterp_sigma", "hinterp_v"];

impl ReportRow {
    pub fn column(&self, name: &str) -> Option<f64> {
        Some(match name {
            "err_sigma" => self.err_sigma,
            "err_v" => self.err_v,
            "stab_seminorm" => self.stab_seminorm,
            "err_int_v" => self.err_int_v,
            "err_int_v_l2" => self.err_int_v_l2,
            "hinterp_sigma" => self.hinterp_sigma,
            "hinterp_v" => self.hinterp_v,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub rows: Vec<ReportRow>,
}

impl ConvergenceReport {
    /// Orders of convergence of the named column.
    pub fn eoc(&self, column: &str) -> Option<Vec<Option<f64>>> {
        let h: Vec<f64> = self.rows.iter().map(|r| r.h).collect();
        let e: Vec<f64> = self.rows.iter().map(|r| r.column(column)).collect::<Option<_>>()?;
        Some(compute_eoc(&h, &e))
    }

    /// Order on the finest pair of levels.
    pub fn finest_eoc(&self, column: &str) -> Option<f64> {
        self.eoc(column)?.last().copied().flatten()
    }

    /// Whether `h` halves between consecutive rows (to 1e-12 relative).
    pub fn h_halves(&self) -> bool {
        self.rows.windows(2).all(|w| ((w[0].h / w[1].h) - 2.0).abs() < 1e-12 * 2.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::local_ops::{build_packs, Discretization, Variant};
    use crate::mesh::{Rectangle, SimplicialMesh};
    use crate::semidisc::{assemble, initial_state, IcMode};

    fn bundle(n: usize, k: usize, variant: Variant) -> OperatorBundle {
        let mesh = SimplicialMesh::build_structured(n, Rectangle::unit_square()).unwrap();
        assemble(&mesh, build_packs(&mesh, Discretization::new(k, variant)).unwrap()).unwrap()
    }

    #[test]
    fn standing_wave_satisfies_the_equations() {
        let b = bundle(3, 2, Variant::Equal);
        let p = standing_wave();
        assert!(p.residual(&b.packs, &[0.0, 0.3, 1.0]) < 1e-12);
        assert!(polynomial_problem().residual(&b.packs, &[0.0, 0.7]) < 1e-12);
        assert_eq!(zero_problem().residual(&b.packs, &[0.5]), 0.0);
    }

    #[test]
    fn closed_form_derivatives_match_finite_differences() {
        let eps = 1e-5;
        for prob in [standing_wave(), polynomial_problem()] {
            for &(x, y, t) in &[(0.3, 0.7, 0.4), (0.81, 0.12, 1.3)] {
                let p = Point2::new(x, y);
                let px = |d: f64| Point2::new(x + d, y);
                let py = |d: f64| Point2::new(x, y + d);
                let dv = ((prob.v)(&p, t + eps) - (prob.v)(&p, t - eps)) / (2.0 * eps);
                assert!((dv - (prob.dt_v)(&p, t)).abs() < 1e-8);
                let ds = ((prob.sigma)(&p, t + eps) - (prob.sigma)(&p, t - eps)) / (2.0 * eps);
                assert!((ds - (prob.dt_sigma)(&p, t)).amax() < 1e-8);
                let gx = ((prob.v)(&px(eps), t) - (prob.v)(&px(-eps), t)) / (2.0 * eps);
                let gy = ((prob.v)(&py(eps), t) - (prob.v)(&py(-eps), t)) / (2.0 * eps);
                assert!((Vector2::new(gx, gy) - (prob.grad_v)(&p, t)).amax() < 1e-8);
                let div = ((prob.sigma)(&px(eps), t).x - (prob.sigma)(&px(-eps), t).x
                    + (prob.sigma)(&py(eps), t).y
                    - (prob.sigma)(&py(-eps), t).y)
                    / (2.0 * eps);
                assert!((div - (prob.div_sigma)(&p, t)).abs() < 1e-7);
                let di = ((prob.int_v)(&p, t + eps) - (prob.int_v)(&p, t - eps)) / (2.0 * eps);
                assert!((di - (prob.v)(&p, t)).abs() < 1e-8);
                assert_eq!((prob.int_v)(&p, 0.0), 0.0);
            }
        }
    }

    #[test]
    fn standing_wave_initial_data() {
        let p = standing_wave();
        for &(x, y) in &[(0.0, 0.4), (1.0, 0.3), (0.25, 0.0), (0.6, 1.0)] {
            assert!((p.v)(&Point2::new(x, y), 0.0).abs() < 1e-15);
        }
        assert_eq!((p.sigma)(&Point2::new(0.3, 0.2), 0.0), Vector2::zeros());
    }

    #[test]
    fn projected_state_has_projection_error() {
        let b = bundle(4, 1, Variant::Mixed);
        let p = standing_wave();
        let t = 0.37;
        let y = initial_state(&b, |x: &Point2<f64>| (p.sigma)(x, t), |x: &Point2<f64>| (p.v)(x, t), IcMode::L2)
            .unwrap();
        let e = energy_error(&b, &y, &p, t);
        let pe = projection_error(&b, &p, t);
        assert!((e.sigma - pe.sigma).abs() < 1e-14 && (e.v - pe.v).abs() < 1e-14);
        let z = zero_problem();
        let e0 = energy_error(&b, &DVector::zeros(b.state_len()), &z, t);
        assert_eq!((e0.sigma, e0.v), (0.0, 0.0));
    }

    #[test]
    fn norms_are_additive_over_cells() {
        let b = bundle(3, 2, Variant::Equal);
        let p = standing_wave();
        let y = DVector::from_fn(b.state_len(), |i, _| ((i * 7919) % 13) as f64 / 13.0 - 0.5);
        let e = energy_error(&b, &y, &p, 0.2);
        let mut sv = 0.0;
        for c in 0..b.n_cells() {
            sv += cell_error_sq(&b.packs[c], &b.vee_block(&y, c), |x| (p.v)(x, 0.2));
        }
        assert!((e.v * e.v - sv).abs() <= 1e-13 * sv);
    }

    #[test]
    fn projection_rates_calibrate_the_harness() {
        let p = standing_wave();
        for (k, variant) in [(0, Variant::Equal), (1, Variant::Mixed)] {
            let errs: Vec<EnergyError> =
                [4, 8, 16].iter().map(|&n| projection_error(&bundle(n, k, variant), &p, 0.4)).collect();
            let h = [0.25, 0.125, 0.0625];
            let es = compute_eoc(&h, &errs.iter().map(|e| e.sigma).collect::<Vec<_>>());
            let ev = compute_eoc(&h, &errs.iter().map(|e| e.v).collect::<Vec<_>>());
            let kc = Discretization::new(k, variant).cell_degree() as f64;
            assert!((es[2].unwrap() - (k as f64 + 1.0)).abs() < 0.15, "{es:?}");
            assert!((ev[2].unwrap() - (kc + 1.0)).abs() < 0.15, "{ev:?}");
        }
    }

    #[test]
    fn integrated_error_vanishes_at_time_zero() {
        let b = bundle(2, 1, Variant::Equal);
        let e = superconvergent_error(&b, &DVector::zeros(b.n_cells() * b.disc.n_cell_dofs()), &standing_wave(), 0.0);
        assert_eq!((e.projected, e.l2), (0.0, 0.0));
    }

    #[test]
    fn eoc_examples() {
        let e = compute_eoc(&[0.5, 0.25], &[1e-2, 2.5e-3]);
        assert!((e[1].unwrap() - 2.0).abs() < 1e-14);
        assert_eq!(compute_eoc(&[0.5, 0.25], &[3.0, 3.0])[1], Some(0.0));
        assert_eq!(compute_eoc(&[0.5, 0.25], &[0.0, 1.0])[1], None);
        assert_eq!(compute_eoc(&[0.5, 0.25], &[1.0, -1.0])[1], None);
        assert_eq!(compute_eoc(&[0.5], &[1.0]), vec![None]);
    }

    #[test]
    fn report_columns_and_halving() {
        let row = |h: f64, e: f64| ReportRow {
            n: 0,
            h,
            dofs: 0,
            err_sigma: e,
            err_v: e,
            stab_seminorm: e,
            err_int_v: e * e,
            err_int_v_l2: e,
            hinterp_sigma: e,
            hinterp_v: e,
            dt: 0.0,
            steps: 0,
        };
        let r = ConvergenceReport { rows: vec![row(0.5, 0.1), row(0.25, 0.05), row(0.125, 0.025)] };
        assert!(r.h_halves());
        assert!((r.finest_eoc("err_v").unwrap() - 1.0).abs() < 1e-14);
        assert!((r.finest_eoc("err_int_v").unwrap() - 2.0).abs() < 1e-14);
        assert!(r.eoc("nonsense").is_none());
    }
}
