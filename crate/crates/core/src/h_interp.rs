//! H-interpolation operator `(Π^σ_T, Π^v_T)`.
//!
//! Unknowns are stacked as `[Π^σ x-part; Π^σ y-part; Π^v]` in the cell's
//! orthonormal basis. Equations, in order: cell moments of `v` and `σ`
//! against `P^{k-1}`, the flux/stabilization coupling tested with the full
//! basis of `P^k(F_∂T)`, and in the mixed-order case the extra moments
//! against homogeneous polynomials of degree `k+1` (in the cell's centred,
//! `h_T`-scaled frame).

use nalgebra::{DMatrix, DVector, Point2, Vector2};

use crate::basis::{poly_dim, poly_dim_signed, ScaledMonomials};
use crate::error::{Error, Result};
use crate::local_ops::{LocalOperatorPack, Variant};

#[derive(Debug, Clone)]
pub struct HInterpolant {
    /// `Π^σ_T` coefficients, `[x-part; y-part]` in `P^k(T)`.
    pub sigma: DVector<f64>,
    /// `Π^v_T` coefficients in `P^{k'}(T)`.
    pub vee: DVector<f64>,
    /// Scaled residual of the defining linear system.
    pub residual: f64,
}

struct LocalSystem {
    matrix: DMatrix<f64>,
    rhs: DVector<f64>,
}

/// Rows shared by both definitions: cell moments and the face coupling.
fn common_rows<S, V>(pack: &LocalOperatorPack, sigma: &S, v: &V, sys: &mut LocalSystem) -> usize
where
    S: Fn(&Point2<f64>) -> Vector2<f64>,
    V: Fn(&Point2<f64>) -> f64,
{
    let disc = pack.disc;
    let k = disc.k;
    let nk = poly_dim(k);
    let nlow = poly_dim_signed(k as i64 - 1);
    let nf = disc.n_face_dofs();
    let ns = 2 * nk;
    let ws = &pack.ws;

    let mut row = 0;
    let v_moments = ws.l2_project_cell(v, k as i64 - 1);
    for i in 0..nlow {
        sys.matrix[(row, ns + i)] = 1.0;
        sys.rhs[row] = v_moments[i];
        row += 1;
    }
    let s_moments = ws.l2_project_cell_vec(sigma, k as i64 - 1);
    for c in 0..2 {
        for i in 0..nlow {
            sys.matrix[(row, c * nk + i)] = 1.0;
            sys.rhs[row] = s_moments[c * nlow + i];
            row += 1;
        }
    }

    // ((σ − Π^σ)·n, μ)_∂T = τ (S(Π^v, Π^k v), S(0, μ))_∂T
    //   ⇔ −(Π^σ·n, μ) − τ (S_cell Π^v, S_face μ) = −(σ·n, μ) + τ (S_face p_v, S_face μ)
    let nc = disc.n_cell_dofs();
    let r = pack.face_range();
    let s_cell = pack.stab.columns(0, nc);
    let s_face = pack.stab.columns(r.start, r.len());
    let coupling = s_face.transpose() * s_cell * pack.tau;
    let face_gram = s_face.transpose() * s_face * pack.tau;
    let mut pv = DVector::<f64>::zeros(3 * nf);
    for lf in 0..3 {
        pv.rows_mut(lf * nf, nf).copy_from(&ws.l2_project_face(lf, v, k));
    }
    let stab_rhs = face_gram * pv;
    for (lf, fd) in ws.faces.iter().enumerate() {
        let n = fd.normal;
        let flux = ws.l2_project_face(lf, |p| sigma(p).dot(&n), k);
        for l in 0..nf {
            let mu = lf * nf + l;
            for i in 0..nk {
                // (φ_i n, ψ_l)_F
                let t = fd.trace_projection[(l, i)];
                sys.matrix[(row, i)] = -t * n.x;
                sys.matrix[(row, nk + i)] = -t * n.y;
            }
            for a in 0..nc {
                sys.matrix[(row, ns + a)] = -coupling[(mu, a)];
            }
            sys.rhs[row] = -flux[l] + stab_rhs[mu];
            row += 1;
        }
    }
    row
}

fn solve(pack: &LocalOperatorPack, sys: LocalSystem) -> Result<HInterpolant> {
    let nk = poly_dim(pack.disc.k);
    let cell = pack.ws.cell;
    let lu = sys.matrix.clone().lu();
    let x = lu.solve(&sys.rhs).ok_or(Error::SingularLocalSystem {
        cell,
        what: "H-interpolation system",
    })?;
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::SingularLocalSystem { cell, what: "H-interpolation system" });
    }
    let res = &sys.matrix * &x - &sys.rhs;
    let scale = sys.matrix.abs().row_sum().max() * x.amax() + sys.rhs.amax();
    let residual = if scale > 0.0 { res.amax() / scale } else { 0.0 };
    Ok(HInterpolant {
        sigma: x.rows(0, 2 * nk).clone_owned(),
        vee: x.rows(2 * nk, x.len() - 2 * nk).clone_owned(),
        residual,
    })
}

fn homogeneous(pack: &LocalOperatorPack) -> ScaledMonomials {
    ScaledMonomials::homogeneous(pack.ws.centroid, pack.ws.diameter, pack.disc.k + 1)
}

/// H-interpolate of `(σ, v)` on the cell of `pack`.
pub fn h_interpolate<S, V>(pack: &LocalOperatorPack, sigma: S, v: V) -> Result<HInterpolant>
where
    S: Fn(&Point2<f64>) -> Vector2<f64>,
    V: Fn(&Point2<f64>) -> f64,
{
    let disc = pack.disc;
    let n = disc.n_sigma_dofs() + disc.n_cell_dofs();
    let mut sys = LocalSystem { matrix: DMatrix::zeros(n, n), rhs: DVector::zeros(n) };
    let mut row = common_rows(pack, &sigma, &v, &mut sys);

    if disc.variant == Variant::Mixed {
        // (Π^σ − σ, ∇q̃)_T = ((Π^k_∂T σ − σ)·n, q̃)_∂T
        let nk = poly_dim(disc.k);
        let hom = homogeneous(pack);
        let ws = &pack.ws;
        let nh = hom.len();
        let mut lhs = DMatrix::<f64>::zeros(nh, 2 * nk);
        let mut rhs = DVector::<f64>::zeros(nh);
        for (q, p) in ws.quad.points.iter().enumerate() {
            let w = ws.quad.weights[q];
            let (_, g) = hom.eval(p);
            let s = sigma(p);
            for (j, gj) in g.iter().enumerate() {
                for i in 0..nk {
                    lhs[(j, i)] += w * ws.vals[(q, i)] * gj.x;
                    lhs[(j, nk + i)] += w * ws.vals[(q, i)] * gj.y;
                }
                rhs[j] += w * s.dot(gj);
            }
        }
        for (lf, fd) in ws.faces.iter().enumerate() {
            let n = fd.normal;
            let px = ws.l2_project_face(lf, |p| sigma(p).x, disc.k);
            let py = ws.l2_project_face(lf, |p| sigma(p).y, disc.k);
            for (q, p) in fd.quad.points.iter().enumerate() {
                let w = fd.quad.weights[q];
                let psi = fd.face_vals.row(q);
                let proj = Vector2::new(psi.dot(&px.transpose()), psi.dot(&py.transpose()));
                let jump = (proj - sigma(p)).dot(&n);
                let (hv, _) = hom.eval(p);
                for (j, h) in hv.iter().enumerate() {
                    rhs[j] += w * jump * h;
                }
            }
        }
        for j in 0..nh {
            for c in 0..2 * nk {
                sys.matrix[(row, c)] = lhs[(j, c)];
            }
            sys.rhs[row] = rhs[j];
            row += 1;
        }
    }
    debug_assert_eq!(row, n);
    solve(pack, sys)
}

/// HDG+ interpolate (mixed order only), which replaces the last block of
/// equations by divergence moments and therefore needs `∇·σ`.
pub fn h_interpolate_hdgplus<S, D, V>(
    pack: &LocalOperatorPack,
    sigma: S,
    div_sigma: D,
    v: V,
) -> Result<HInterpolant>
where
    S: Fn(&Point2<f64>) -> Vector2<f64>,
    D: Fn(&Point2<f64>) -> f64,
    V: Fn(&Point2<f64>) -> f64,
{
    let disc = pack.disc;
    if disc.variant != Variant::Mixed {
        return Err(Error::Usage("HDG+ interpolation is defined for the mixed-order variant only".into()));
    }
    let n = disc.n_sigma_dofs() + disc.n_cell_dofs();
    let mut sys = LocalSystem { matrix: DMatrix::zeros(n, n), rhs: DVector::zeros(n) };
    let mut row = common_rows(pack, &sigma, &v, &mut sys);

    // (∇·(Π^σ − σ), q̃)_T = τ (S(Π^v, Π^k v), S(q̃, 0))_∂T
    let k = disc.k;
    let nk = poly_dim(k);
    let nc = disc.n_cell_dofs();
    let nf = disc.n_face_dofs();
    let ns = 2 * nk;
    let ws = &pack.ws;
    let hom = homogeneous(pack);
    let nh = hom.len();
    let r = pack.face_range();
    let s_cell = pack.stab.columns(0, nc);
    let s_face = pack.stab.columns(r.start, r.len());
    let mut pv = DVector::<f64>::zeros(3 * nf);
    for lf in 0..3 {
        pv.rows_mut(lf * nf, nf).copy_from(&ws.l2_project_face(lf, &v, k));
    }
    let s_data = s_face * pv;

    let mut div_lhs = DMatrix::<f64>::zeros(nh, ns);
    let mut div_rhs = DVector::<f64>::zeros(nh);
    for (q, p) in ws.quad.points.iter().enumerate() {
        let w = ws.quad.weights[q];
        let (hv, _) = hom.eval(p);
        let d = div_sigma(p);
        for (j, h) in hv.iter().enumerate() {
            for i in 0..nk {
                div_lhs[(j, i)] += w * ws.grad_x[(q, i)] * h;
                div_lhs[(j, nk + i)] += w * ws.grad_y[(q, i)] * h;
            }
            div_rhs[j] += w * d * h;
        }
    }
    for j in 0..nh {
        // S(q̃, 0) = Π^k_∂T(q̃|_∂T)
        let mut t = DVector::<f64>::zeros(3 * nf);
        for (lf, fd) in ws.faces.iter().enumerate() {
            for (q, p) in fd.quad.points.iter().enumerate() {
                let (hv, _) = hom.eval(p);
                let w = fd.quad.weights[q] * hv[j];
                for l in 0..nf {
                    t[lf * nf + l] += w * fd.face_vals[(q, l)];
                }
            }
        }
        for c in 0..ns {
            sys.matrix[(row, c)] = div_lhs[(j, c)];
        }
        let couple = s_cell.transpose() * &t * pack.tau;
        for a in 0..nc {
            sys.matrix[(row, ns + a)] = -couple[a];
        }
        sys.rhs[row] = div_rhs[j] + pack.tau * s_data.dot(&t);
        row += 1;
    }
    debug_assert_eq!(row, n);
    solve(pack, sys)
}

/// Cellwise H-interpolation over a whole mesh.
pub fn h_interpolate_global<S, V>(
    packs: &[LocalOperatorPack],
    sigma: S,
    v: V,
) -> Result<Vec<HInterpolant>>
where
    S: Fn(&Point2<f64>) -> Vector2<f64> + Sync,
    V: Fn(&Point2<f64>) -> f64 + Sync,
{
    use rayon::prelude::*;
    packs.par_iter().map(|p| h_interpolate(p, &sigma, &v)).collect()
}

/// 2-norm condition number of the local system matrix after symmetric
/// diagonal scaling.
pub fn scaled_condition_number(pack: &LocalOperatorPack) -> f64 {
    // The system matrix does not depend on the data; rebuild it with zero data.
    let disc = pack.disc;
    let n = disc.n_sigma_dofs() + disc.n_cell_dofs();
    let mut sys = LocalSystem { matrix: DMatrix::zeros(n, n), rhs: DVector::zeros(n) };
    let zero_s = |_: &Point2<f64>| Vector2::zeros();
    let zero_v = |_: &Point2<f64>| 0.0;
    let mut row = common_rows(pack, &zero_s, &zero_v, &mut sys);
    if disc.variant == Variant::Mixed {
        let nk = poly_dim(disc.k);
        let hom = homogeneous(pack);
        for (q, p) in pack.ws.quad.points.iter().enumerate() {
            let w = pack.ws.quad.weights[q];
            let (_, g) = hom.eval(p);
            for (j, gj) in g.iter().enumerate() {
                for i in 0..nk {
                    sys.matrix[(row + j, i)] += w * pack.ws.vals[(q, i)] * gj.x;
                    sys.matrix[(row + j, nk + i)] += w * pack.ws.vals[(q, i)] * gj.y;
                }
            }
        }
        row += hom.len();
    }
    debug_assert_eq!(row, n);
    let a = sys.matrix;
    let r: Vec<f64> = (0..n).map(|i| a.row(i).amax().sqrt()).collect();
    let c: Vec<f64> = (0..n).map(|j| a.column(j).amax().sqrt()).collect();
    let scaled = DMatrix::from_fn(n, n, |i, j| a[(i, j)] / (r[i] * c[j]));
    let sv = scaled.singular_values();
    sv.max() / sv.min()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::local_ops::Discretization;
    use crate::mesh::{Rectangle, SimplicialMesh};
    use std::f64::consts::PI;

    fn discs() -> Vec<Discretization> {
        let mut out = Vec::new();
        for k in 0..=2 {
            for v in [Variant::Equal, Variant::Mixed] {
                out.push(Discretization::new(k, v));
            }
        }
        out
    }

    #[test]
    fn zero_maps_to_zero() {
        let m = SimplicialMesh::build_structured(2, Rectangle::unit_square()).unwrap();
        for d in discs() {
            let pack = LocalOperatorPack::new(&m, 1, d).unwrap();
            let h = h_interpolate(&pack, |_| Vector2::zeros(), |_| 0.0).unwrap();
            assert_eq!(h.sigma.amax(), 0.0);
            assert_eq!(h.vee.amax(), 0.0);
        }
    }

    #[test]
    fn polynomial_reproduction() {
        let m = SimplicialMesh::build_structured(2, Rectangle::unit_square()).unwrap();
        for d in discs() {
            let pack = LocalOperatorPack::new(&m, 6, d).unwrap();
            let k = d.k as i32;
            let kp = d.cell_degree() as i32;
            let sigma = |p: &Point2<f64>| {
                Vector2::new(1.0 + p.x.powi(k) - 0.5 * p.y.powi(k), 2.0 * p.y.powi(k) + 0.3 * p.x.powi(k))
            };
            let v = |p: &Point2<f64>| {
                if kp == 0 {
                    0.5
                } else {
                    0.5 - p.x * p.y.powi(kp - 1) + p.y.powi(kp)
                }
            };
            let h = h_interpolate(&pack, sigma, v).unwrap();
            let ps = pack.ws.l2_project_cell_vec(sigma, d.k as i64);
            let pv = pack.ws.l2_project_cell(v, kp as i64);
            assert!((h.sigma - ps).amax() < 1e-12, "{d:?}");
            assert!((h.vee - pv).amax() < 1e-12, "{d:?}");
            assert!(h.residual < 1e-13);
        }
    }

    #[test]
    fn hdgplus_agrees_with_h_interpolation() {
        let m = SimplicialMesh::build_structured(3, Rectangle::unit_square()).unwrap();
        let sigma = |p: &Point2<f64>| Vector2::new((PI * p.x).cos() * p.y.exp(), (2.0 * p.x + p.y).sin());
        let div = |p: &Point2<f64>| -PI * (PI * p.x).sin() * p.y.exp() + (2.0 * p.x + p.y).cos();
        let v = |p: &Point2<f64>| (PI * p.x).sin() * (PI * p.y).sin() + p.x * p.x;
        for k in 0..=2 {
            let d = Discretization::new(k, Variant::Mixed);
            for c in [0, 7, 11] {
                let pack = LocalOperatorPack::new(&m, c, d).unwrap();
                let a = h_interpolate(&pack, sigma, v).unwrap();
                let b = h_interpolate_hdgplus(&pack, sigma, div, v).unwrap();
                let scale = a.sigma.amax().max(a.vee.amax());
                assert!((a.sigma - b.sigma).amax() <= 1e-10 * scale);
                assert!((a.vee - b.vee).amax() <= 1e-10 * scale);
            }
        }
    }

    #[test]
    fn hdgplus_rejects_equal_order() {
        let m = SimplicialMesh::build_structured(1, Rectangle::unit_square()).unwrap();
        let pack = LocalOperatorPack::new(&m, 0, Discretization::new(1, Variant::Equal)).unwrap();
        let r = h_interpolate_hdgplus(&pack, |_| Vector2::zeros(), |_| 0.0, |_| 0.0);
        assert!(matches!(r, Err(Error::Usage(_))));
    }

    #[test]
    fn separation_of_variables() {
        let m = SimplicialMesh::build_structured(2, Rectangle::unit_square()).unwrap();
        let sigma = |p: &Point2<f64>| Vector2::new(p.y.sin(), (p.x * p.y).cos());
        let v = |p: &Point2<f64>| (3.0 * p.x).sin() * p.y;
        let zs = |_: &Point2<f64>| Vector2::zeros();
        let zv = |_: &Point2<f64>| 0.0;
        for d in discs() {
            let pack = LocalOperatorPack::new(&m, 2, d).unwrap();
            let full = h_interpolate(&pack, sigma, v).unwrap();
            let a = h_interpolate(&pack, sigma, zv).unwrap();
            let b = h_interpolate(&pack, zs, v).unwrap();
            assert!((full.sigma - a.sigma - b.sigma).amax() < 1e-12);
            assert!((full.vee - a.vee - b.vee).amax() < 1e-12);
        }
    }
}
