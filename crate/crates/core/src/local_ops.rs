//! Per-cell reconstruction and stabilization operators as dense matrices.
//!
//! A local hybrid pair `v̂_T = (v_T, v_∂T)` is a single coefficient vector
//! `[v_T; v_F0; v_F1; v_F2]`, cell part in the orthonormal basis of
//! `P^{k'}(T)`, face parts in the orthonormal bases of `P^k(F)` ordered by
//! local face index.

use nalgebra::{DMatrix, DVector, Point2, Vector2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::basis::{poly_dim, BasisWorkspace};
use crate::error::{Error, Result};
use crate::mesh::SimplicialMesh;

/// Cell degree relative to the face degree: `k' = k` or `k' = k + 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Equal,
    Mixed,
}

impl Variant {
    pub fn cell_degree(self, k: usize) -> usize {
        match self {
            Variant::Equal => k,
            Variant::Mixed => k + 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Equal => "equal",
            Variant::Mixed => "mixed",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "equal" | "equal-order" | "eo" => Ok(Variant::Equal),
            "mixed" | "mixed-order" | "mo" => Ok(Variant::Mixed),
            other => Err(Error::Config(format!("unknown variant {other:?}"))),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Face degree `k` and variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Discretization {
    pub k: usize,
    pub variant: Variant,
}

impl Discretization {
    pub fn new(k: usize, variant: Variant) -> Self {
        Self { k, variant }
    }

    /// `k'`.
    pub fn cell_degree(&self) -> usize {
        self.variant.cell_degree(self.k)
    }

    pub fn n_cell_dofs(&self) -> usize {
        poly_dim(self.cell_degree())
    }

    pub fn n_face_dofs(&self) -> usize {
        self.k + 1
    }

    /// Coefficients of `P^k(T; R²)`.
    pub fn n_sigma_dofs(&self) -> usize {
        2 * poly_dim(self.k)
    }

    pub fn n_local(&self) -> usize {
        self.n_cell_dofs() + 3 * self.n_face_dofs()
    }
}

#[derive(Debug, Clone)]
pub struct LocalOperatorPack {
    pub disc: Discretization,
    pub ws: BasisWorkspace,
    /// Gradient reconstruction, `2 dim P^k × n_local`.
    pub grad: DMatrix<f64>,
    /// Potential reconstruction, `dim P^{k+1} × n_local`.
    pub recon: DMatrix<f64>,
    /// Stabilization operator onto `P^k(F_∂T)`, `3(k+1) × n_local`.
    pub stab: DMatrix<f64>,
    /// Projected boundary difference `Π^k_∂T δ_∂T`, `3(k+1) × n_local`.
    pub diff: DMatrix<f64>,
    /// `τ_T = ℓ_Ω / h_T`.
    pub tau: f64,
    pub h: f64,
}

impl LocalOperatorPack {
    pub fn new(mesh: &SimplicialMesh, cell: usize, disc: Discretization) -> Result<Self> {
        let ws = BasisWorkspace::new(mesh, cell, disc.k + 1, disc.k);
        let tau = mesh.domain_diameter() / mesh.cell_diameter(cell);
        Self::from_workspace(ws, disc, tau)
    }

    pub fn from_workspace(ws: BasisWorkspace, disc: Discretization, tau: f64) -> Result<Self> {
        let k = disc.k;
        let nk = poly_dim(k);
        let nc = disc.n_cell_dofs();
        let nf = disc.n_face_dofs();
        let nl = disc.n_local();
        let nr = poly_dim(k + 1);
        let cell = ws.cell;

        // G: (ξ, q)_T = (∇v_T, q)_T − (v_T − v_∂T, q·n)_∂T, mass = identity
        let mut grad = DMatrix::zeros(2 * nk, nl);
        for (q, w) in ws.quad.weights.iter().enumerate() {
            for i in 0..nk {
                let phi = ws.vals[(q, i)] * w;
                for j in 0..nc {
                    grad[(i, j)] += ws.grad_x[(q, j)] * phi;
                    grad[(nk + i, j)] += ws.grad_y[(q, j)] * phi;
                }
            }
        }
        for (lf, fd) in ws.faces.iter().enumerate() {
            let n = fd.normal;
            for (q, w) in fd.quad.weights.iter().enumerate() {
                for i in 0..nk {
                    let phi = fd.cell_vals[(q, i)] * w;
                    for j in 0..nc {
                        let t = fd.cell_vals[(q, j)] * phi;
                        grad[(i, j)] -= t * n.x;
                        grad[(nk + i, j)] -= t * n.y;
                    }
                    for l in 0..nf {
                        let t = fd.face_vals[(q, l)] * phi;
                        let col = nc + lf * nf + l;
                        grad[(i, col)] += t * n.x;
                        grad[(nk + i, col)] += t * n.y;
                    }
                }
            }
        }

        // R: (∇R, ∇w)_T = (∇v_T, ∇w)_T − (v_T − v_∂T, ∇w·n)_∂T on P^{k+1}/R, mean of v_T
        let mut rhs = DMatrix::zeros(nr - 1, nl);
        for a in 0..nc {
            for j in 1..nr {
                rhs[(j - 1, a)] = ws.stiffness[(a, j)];
            }
        }
        for (lf, fd) in ws.faces.iter().enumerate() {
            for (q, w) in fd.quad.weights.iter().enumerate() {
                for j in 1..nr {
                    let dn = fd.cell_normal_grads[(q, j)] * w;
                    for a in 0..nc {
                        rhs[(j - 1, a)] -= fd.cell_vals[(q, a)] * dn;
                    }
                    for l in 0..nf {
                        rhs[(j - 1, nc + lf * nf + l)] += fd.face_vals[(q, l)] * dn;
                    }
                }
            }
        }
        let stiff = ws.stiffness.view((1, 1), (nr - 1, nr - 1)).clone_owned();
        let chol = stiff.cholesky().ok_or(Error::SingularLocalSystem {
            cell,
            what: "potential reconstruction stiffness",
        })?;
        let upper = chol.solve(&rhs);
        let mut recon = DMatrix::zeros(nr, nl);
        recon[(0, 0)] = 1.0;
        recon.rows_mut(1, nr - 1).copy_from(&upper);

        let mut diff = DMatrix::zeros(3 * nf, nl);
        for (lf, fd) in ws.faces.iter().enumerate() {
            diff.view_mut((lf * nf, 0), (nf, nc))
                .copy_from(&fd.trace_projection.columns(0, nc));
            for l in 0..nf {
                diff[(lf * nf + l, nc + lf * nf + l)] = -1.0;
            }
        }

        let stab = match disc.variant {
            Variant::Mixed => diff.clone(),
            Variant::Equal => {
                // Π^k_∂T{((1 − Π^k_T) R v̂)|_∂T}: keep the degree-(k+1) part of R
                let mut corr = DMatrix::zeros(3 * nf, nl);
                for (lf, fd) in ws.faces.iter().enumerate() {
                    let tp = fd.trace_projection.columns(nk, nr - nk);
                    let high = recon.rows(nk, nr - nk);
                    corr.view_mut((lf * nf, 0), (nf, nl)).copy_from(&(tp * high));
                }
                &diff + corr
            }
        };

        Ok(Self { disc, grad, recon, stab, diff, tau, h: ws.diameter, ws })
    }

    pub fn n_local(&self) -> usize {
        self.disc.n_local()
    }

    /// Columns of the face block inside a local vector.
    pub fn face_range(&self) -> std::ops::Range<usize> {
        self.disc.n_cell_dofs()..self.disc.n_local()
    }

    /// Local vector from cell and face parts.
    pub fn stack(&self, cell: &DVector<f64>, faces: &DVector<f64>) -> DVector<f64> {
        let nc = self.disc.n_cell_dofs();
        let mut x = DVector::zeros(self.n_local());
        x.rows_mut(0, nc).copy_from(cell);
        x.rows_mut(nc, 3 * self.disc.n_face_dofs()).copy_from(faces);
        x
    }

    pub fn gradient_reconstruction(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.grad * x
    }

    pub fn potential_reconstruction(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.recon * x
    }

    /// `δ_∂T(v̂) = v_T|_∂T − v_∂T` tabulated at each face's quadrature points.
    pub fn boundary_difference(&self, x: &DVector<f64>) -> Vec<DVector<f64>> {
        let nc = self.disc.n_cell_dofs();
        let nf = self.disc.n_face_dofs();
        self.ws
            .faces
            .iter()
            .enumerate()
            .map(|(lf, fd)| {
                fd.cell_vals.columns(0, nc) * x.rows(0, nc)
                    - &fd.face_vals * x.rows(nc + lf * nf, nf)
            })
            .collect()
    }

    pub fn stabilization_apply(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.stab * x
    }

    /// Face block of the stabilization, `S(0, ·)`.
    pub fn stab_face_block(&self) -> DMatrix<f64> {
        let r = self.face_range();
        self.stab.columns(r.start, r.len()).clone_owned()
    }

    /// Reformulated stabilization `S̃(μ)` acting on boundary data in `P^k(F_∂T)`.
    pub fn stabilization_reformulated(&self, mu: &DVector<f64>) -> DVector<f64> {
        match self.disc.variant {
            Variant::Mixed => mu.clone(),
            Variant::Equal => {
                // Π^k_∂T{μ − ((1 − Π^k_T) R(0, μ))|_∂T}
                let nk = poly_dim(self.disc.k);
                let nr = poly_dim(self.disc.k + 1);
                let r = self.face_range();
                let zero_mu = self.recon.columns(r.start, r.len()) * mu;
                let nf = self.disc.n_face_dofs();
                let mut out = mu.clone();
                for (lf, fd) in self.ws.faces.iter().enumerate() {
                    let t = fd.trace_projection.columns(nk, nr - nk) * zero_mu.rows(nk, nr - nk);
                    let mut seg = out.rows_mut(lf * nf, nf);
                    seg -= t;
                }
                out
            }
        }
    }

    /// `λ_∂T` as a matrix on `P^k(F_∂T)`.
    pub fn lambda(&self) -> DMatrix<f64> {
        let n = 3 * self.disc.n_face_dofs();
        match self.disc.variant {
            Variant::Mixed => DMatrix::identity(n, n),
            Variant::Equal => {
                let mut st = DMatrix::zeros(n, n);
                for j in 0..n {
                    let mut e = DVector::zeros(n);
                    e[j] = 1.0;
                    st.set_column(j, &self.stabilization_reformulated(&e));
                }
                st.transpose() * st
            }
        }
    }

    /// `τ_T Sᵀ S`, the local stabilization form.
    pub fn stab_form(&self) -> DMatrix<f64> {
        self.stab.transpose() * &self.stab * self.tau
    }

    /// Injection `p ↦ (p, Π^k_∂T(p|_∂T))` for `p ∈ P^{k'}(T)`.
    pub fn interpolate_polynomial(&self, p: &DVector<f64>) -> DVector<f64> {
        let nc = self.disc.n_cell_dofs();
        let nf = self.disc.n_face_dofs();
        let mut faces = DVector::zeros(3 * nf);
        for (lf, fd) in self.ws.faces.iter().enumerate() {
            faces
                .rows_mut(lf * nf, nf)
                .copy_from(&(fd.trace_projection.columns(0, nc) * p));
        }
        self.stack(p, &faces)
    }

    /// Local hybrid interpolate `(Π^{k'}_T v, Π^k_∂T v)` of a scalar field.
    pub fn interpolate_field<F: Fn(&Point2<f64>) -> f64>(&self, v: F) -> DVector<f64> {
        let nf = self.disc.n_face_dofs();
        let cell = self.ws.l2_project_cell(&v, self.disc.cell_degree() as i64);
        let mut faces = DVector::zeros(3 * nf);
        for lf in 0..3 {
            faces.rows_mut(lf * nf, nf).copy_from(&self.ws.l2_project_face(lf, &v, self.disc.k));
        }
        self.stack(&cell, &faces)
    }

    /// `‖∇v_T‖²_T + h_T⁻¹‖v_T − v_∂T‖²_∂T`.
    pub fn hho_norm_sq(&self, x: &DVector<f64>) -> f64 {
        let nc = self.disc.n_cell_dofs();
        let vt = x.rows(0, nc);
        let k = self.ws.stiffness.view((0, 0), (nc, nc));
        let grad = vt.dot(&(k * vt));
        let jump: f64 = self
            .boundary_difference(x)
            .iter()
            .zip(&self.ws.faces)
            .map(|(d, fd)| d.iter().zip(&fd.quad.weights).map(|(v, w)| w * v * v).sum::<f64>())
            .sum();
        grad + jump / self.h
    }

    /// `‖G_T v̂‖²_T + h_T⁻¹‖S v̂‖²_∂T`.
    pub fn stabilized_norm_sq(&self, x: &DVector<f64>) -> f64 {
        self.gradient_reconstruction(x).norm_squared()
            + self.stabilization_apply(x).norm_squared() / self.h
    }

    /// Min and max over random samples of the ratio between the stabilized
    /// and the HHO norms. Samples are drawn with unit pointwise magnitude
    /// (coefficients scaled by `|T|^{1/2}` and `|F|^{1/2}`) so that the
    /// distribution is invariant under mesh scaling.
    pub fn stability_equivalence_check<R: Rng>(&self, samples: usize, rng: &mut R) -> (f64, f64) {
        let nc = self.disc.n_cell_dofs();
        let nf = self.disc.n_face_dofs();
        let sa = self.ws.area.sqrt();
        let mut lo = f64::INFINITY;
        let mut hi: f64 = 0.0;
        for _ in 0..samples {
            let mut x = DVector::zeros(self.n_local());
            for i in 0..nc {
                x[i] = sa * rng.gen_range(-1.0..1.0);
            }
            for (lf, fd) in self.ws.faces.iter().enumerate() {
                for l in 0..nf {
                    x[nc + lf * nf + l] = fd.measure.sqrt() * rng.gen_range(-1.0..1.0);
                }
            }
            let den = self.hho_norm_sq(&x);
            if den <= f64::MIN_POSITIVE {
                continue;
            }
            let r = self.stabilized_norm_sq(&x) / den;
            lo = lo.min(r);
            hi = hi.max(r);
        }
        (lo, hi)
    }

    /// Components of the cell gradient `Π^k_T ∇p` for `p ∈ P^{k'}`.
    pub fn projected_gradient(&self, p: &DVector<f64>) -> DVector<f64> {
        let nk = poly_dim(self.disc.k);
        let field = |x: &Point2<f64>| -> Vector2<f64> { self.ws.eval_grad(p, x) };
        let out = self.ws.l2_project_cell_vec(field, self.disc.k as i64);
        debug_assert_eq!(out.len(), 2 * nk);
        out
    }
}

/// Builds the packs of every cell.
pub fn build_packs(mesh: &SimplicialMesh, disc: Discretization) -> Result<Vec<LocalOperatorPack>> {
    use rayon::prelude::*;
    (0..mesh.n_cells())
        .into_par_iter()
        .map(|c| LocalOperatorPack::new(mesh, c, disc))
        .collect()
}
