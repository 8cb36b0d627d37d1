//! Orthonormal polynomial bases, quadrature and projections on a cell.
//!
//! Cell bases are scaled monomials centred at the centroid and scaled by
//! `h_T`, orthonormalized in `L²(T)` by modified Gram-Schmidt in graded
//! order. The first `dim P^m` functions therefore span `P^m(T)` for every
//! `m` up to the workspace degree, so `Π_T^m` is coefficient truncation.
//! Face bases are normalized Legendre polynomials in the arc-length
//! parameter running from the lower to the higher global vertex index, so
//! both neighbours of a face see the same basis.

pub mod quadrature;

use nalgebra::{DMatrix, DVector, Point2, Vector2};

use crate::mesh::SimplicialMesh;
use quadrature::{legendre_values, segment_rule, triangle_rule, QuadRule};

/// Extra exactness on top of what polynomial products need, so that smooth
/// data is integrated well below every discretization error under study.
pub const DATA_EXTRA_DEGREE: usize = 8;

/// Dimension of `P^m` in two variables.
pub fn poly_dim(degree: usize) -> usize {
    (degree + 1) * (degree + 2) / 2
}

/// Dimension of `P^m` with the convention `P^{-1} = {0}`.
pub fn poly_dim_signed(degree: i64) -> usize {
    if degree < 0 {
        0
    } else {
        poly_dim(degree as usize)
    }
}

/// Exponents `(a, b)` of `x^a y^b` in graded order.
pub fn monomial_exponents(degree: usize) -> Vec<(i32, i32)> {
    let mut out = Vec::with_capacity(poly_dim(degree));
    for d in 0..=degree as i32 {
        for j in 0..=d {
            out.push((d - j, j));
        }
    }
    out
}

/// Monomials in the local frame `(x - c) / s`.
#[derive(Debug, Clone)]
pub struct ScaledMonomials {
    pub center: Point2<f64>,
    pub scale: f64,
    pub exponents: Vec<(i32, i32)>,
}

impl ScaledMonomials {
    pub fn new(center: Point2<f64>, scale: f64, degree: usize) -> Self {
        Self { center, scale, exponents: monomial_exponents(degree) }
    }

    pub fn homogeneous(center: Point2<f64>, scale: f64, degree: usize) -> Self {
        let d = degree as i32;
        Self { center, scale, exponents: (0..=d).map(|j| (d - j, j)).collect() }
    }

    pub fn len(&self) -> usize {
        self.exponents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.exponents.is_empty()
    }

    /// Values and gradients at `p`.
    pub fn eval(&self, p: &Point2<f64>) -> (Vec<f64>, Vec<Vector2<f64>>) {
        let x = (p.x - self.center.x) / self.scale;
        let y = (p.y - self.center.y) / self.scale;
        let pw = |t: f64, e: i32| if e <= 0 { 1.0 } else { t.powi(e) };
        let mut vals = Vec::with_capacity(self.len());
        let mut grads = Vec::with_capacity(self.len());
        for &(a, b) in &self.exponents {
            vals.push(pw(x, a) * pw(y, b));
            let gx = if a > 0 { a as f64 * pw(x, a - 1) * pw(y, b) } else { 0.0 };
            let gy = if b > 0 { b as f64 * pw(x, a) * pw(y, b - 1) } else { 0.0 };
            grads.push(Vector2::new(gx, gy) / self.scale);
        }
        (vals, grads)
    }
}

/// `L²(T)`-orthonormal basis as combinations of scaled monomials.
#[derive(Debug, Clone)]
pub struct CellBasis {
    pub monomials: ScaledMonomials,
    /// Row `i` holds the monomial coefficients of basis function `i`.
    pub coeffs: DMatrix<f64>,
}

impl CellBasis {
    fn orthonormalize(monomials: ScaledMonomials, quad: &QuadRule) -> Self {
        let n = monomials.len();
        let mut gram = DMatrix::zeros(n, n);
        for (p, w) in quad.points.iter().zip(&quad.weights) {
            let (v, _) = monomials.eval(p);
            for i in 0..n {
                for j in 0..=i {
                    gram[(i, j)] += w * v[i] * v[j];
                }
            }
        }
        for i in 0..n {
            for j in 0..i {
                gram[(j, i)] = gram[(i, j)];
            }
        }
        let inner = |a: &DVector<f64>, b: &DVector<f64>| a.dot(&(&gram * b));
        let mut basis: Vec<DVector<f64>> = Vec::with_capacity(n);
        for i in 0..n {
            let mut v = DVector::zeros(n);
            v[i] = 1.0;
            // two sweeps of modified Gram-Schmidt
            for _ in 0..2 {
                for q in &basis {
                    let r = inner(&v, q);
                    v -= q * r;
                }
            }
            let norm = inner(&v, &v).sqrt();
            basis.push(v / norm);
        }
        let mut coeffs = DMatrix::zeros(n, n);
        for (i, b) in basis.iter().enumerate() {
            coeffs.row_mut(i).copy_from(&b.transpose());
        }
        Self { monomials, coeffs }
    }

    pub fn len(&self) -> usize {
        self.coeffs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.coeffs.nrows() == 0
    }

    pub fn eval(&self, p: &Point2<f64>) -> (DVector<f64>, Vec<Vector2<f64>>) {
        let (mv, mg) = self.monomials.eval(p);
        let n = self.len();
        let mut vals = DVector::zeros(n);
        let mut grads = vec![Vector2::zeros(); n];
        for i in 0..n {
            for j in 0..=i {
                let c = self.coeffs[(i, j)];
                vals[i] += c * mv[j];
                grads[i] += mg[j] * c;
            }
        }
        (vals, grads)
    }
}

/// Per-face tabulation used by the local operators.
#[derive(Debug, Clone)]
pub struct FaceData {
    pub face: usize,
    pub normal: Vector2<f64>,
    pub measure: f64,
    pub start: Point2<f64>,
    pub end: Point2<f64>,
    pub quad: QuadRule,
    /// Cell basis at face quadrature points (`nq × n_cell_basis`).
    pub cell_vals: DMatrix<f64>,
    /// Normal derivative of the cell basis at face quadrature points.
    pub cell_normal_grads: DMatrix<f64>,
    /// Orthonormal face basis at face quadrature points (`nq × (k+1)`).
    pub face_vals: DMatrix<f64>,
    /// `(ψ_l, φ_i)_F`, i.e. `Π_F^k` of the traces of the cell basis (`(k+1) × n_cell_basis`).
    pub trace_projection: DMatrix<f64>,
}

impl FaceData {
    pub fn face_basis_at(&self, p: &Point2<f64>, degree: usize) -> Vec<f64> {
        let e = self.end - self.start;
        let s = (p - self.start).dot(&e) / e.norm_squared();
        legendre_values(degree, 2.0 * s - 1.0)
            .into_iter()
            .enumerate()
            .map(|(j, pj)| ((2 * j + 1) as f64 / self.measure).sqrt() * pj)
            .collect()
    }
}

/// Bases, quadrature and cached matrices on one cell.
#[derive(Debug, Clone)]
pub struct BasisWorkspace {
    pub cell: usize,
    pub vertices: [Point2<f64>; 3],
    pub area: f64,
    pub diameter: f64,
    pub centroid: Point2<f64>,
    pub cell_degree: usize,
    pub face_degree: usize,
    pub basis: CellBasis,
    pub quad: QuadRule,
    /// Basis values at cell quadrature points (`nq × n`).
    pub vals: DMatrix<f64>,
    pub grad_x: DMatrix<f64>,
    pub grad_y: DMatrix<f64>,
    /// `(∇φ_i, ∇φ_j)_T`.
    pub stiffness: DMatrix<f64>,
    pub faces: [FaceData; 3],
}

impl BasisWorkspace {
    /// Workspace with cell basis up to `cell_degree` and face bases of degree `face_degree`.
    pub fn new(mesh: &SimplicialMesh, cell: usize, cell_degree: usize, face_degree: usize) -> Self {
        let vertices = mesh.cell_vertices(cell);
        let area = mesh.cell_area(cell);
        let diameter = mesh.cell_diameter(cell);
        let centroid =
            Point2::from((vertices[0].coords + vertices[1].coords + vertices[2].coords) / 3.0);
        let quad = triangle_rule(&vertices, 2 * cell_degree + 4 + DATA_EXTRA_DEGREE);
        let basis = CellBasis::orthonormalize(
            ScaledMonomials::new(centroid, diameter, cell_degree),
            &quad,
        );
        let n = basis.len();
        let nq = quad.len();
        let mut vals = DMatrix::zeros(nq, n);
        let mut grad_x = DMatrix::zeros(nq, n);
        let mut grad_y = DMatrix::zeros(nq, n);
        for (q, p) in quad.points.iter().enumerate() {
            let (v, g) = basis.eval(p);
            for i in 0..n {
                vals[(q, i)] = v[i];
                grad_x[(q, i)] = g[i].x;
                grad_y[(q, i)] = g[i].y;
            }
        }
        let w = DMatrix::from_diagonal(&DVector::from_column_slice(&quad.weights));
        let stiffness = grad_x.transpose() * &w * &grad_x + grad_y.transpose() * &w * &grad_y;

        let local_faces = mesh.cell_faces(cell);
        let faces = std::array::from_fn(|i| {
            let f = local_faces[i];
            let face = &mesh.faces()[f];
            let start = mesh.vertices()[face.vertices[0]];
            let end = mesh.vertices()[face.vertices[1]];
            let normal = mesh.outward_normal(cell, i);
            let fq = segment_rule(&start, &end, 2 * cell_degree + 2 + DATA_EXTRA_DEGREE);
            let nfq = fq.len();
            let mut cell_vals = DMatrix::zeros(nfq, n);
            let mut cell_normal_grads = DMatrix::zeros(nfq, n);
            let mut face_vals = DMatrix::zeros(nfq, face_degree + 1);
            let mut data = FaceData {
                face: f,
                normal,
                measure: face.measure,
                start,
                end,
                quad: fq,
                cell_vals: DMatrix::zeros(0, 0),
                cell_normal_grads: DMatrix::zeros(0, 0),
                face_vals: DMatrix::zeros(0, 0),
                trace_projection: DMatrix::zeros(0, 0),
            };
            for (q, p) in data.quad.points.iter().enumerate() {
                let (v, g) = basis.eval(p);
                for j in 0..n {
                    cell_vals[(q, j)] = v[j];
                    cell_normal_grads[(q, j)] = g[j].dot(&normal);
                }
                for (l, psi) in data.face_basis_at(p, face_degree).into_iter().enumerate() {
                    face_vals[(q, l)] = psi;
                }
            }
            let fw = DMatrix::from_diagonal(&DVector::from_column_slice(&data.quad.weights));
            data.trace_projection = face_vals.transpose() * &fw * &cell_vals;
            data.cell_vals = cell_vals;
            data.cell_normal_grads = cell_normal_grads;
            data.face_vals = face_vals;
            data
        });

        Self {
            cell,
            vertices,
            area,
            diameter,
            centroid,
            cell_degree,
            face_degree,
            basis,
            quad,
            vals,
            grad_x,
            grad_y,
            stiffness,
            faces,
        }
    }

    pub fn n_basis(&self) -> usize {
        self.basis.len()
    }

    /// Coefficients of `Π_T^m f`; empty for `m < 0`.
    pub fn l2_project_cell<F: Fn(&Point2<f64>) -> f64>(&self, f: F, degree: i64) -> DVector<f64> {
        let n = poly_dim_signed(degree);
        assert!(n <= self.n_basis(), "degree exceeds workspace degree");
        let mut out = DVector::zeros(n);
        for (q, p) in self.quad.points.iter().enumerate() {
            let fw = f(p) * self.quad.weights[q];
            for i in 0..n {
                out[i] += fw * self.vals[(q, i)];
            }
        }
        out
    }

    /// Componentwise projection of a vector field, stacked as `[x-part; y-part]`.
    pub fn l2_project_cell_vec<F: Fn(&Point2<f64>) -> Vector2<f64>>(
        &self,
        f: F,
        degree: i64,
    ) -> DVector<f64> {
        let n = poly_dim_signed(degree);
        assert!(n <= self.n_basis(), "degree exceeds workspace degree");
        let mut out = DVector::zeros(2 * n);
        for (q, p) in self.quad.points.iter().enumerate() {
            let fw = f(p) * self.quad.weights[q];
            for i in 0..n {
                out[i] += fw.x * self.vals[(q, i)];
                out[n + i] += fw.y * self.vals[(q, i)];
            }
        }
        out
    }

    /// Coefficients of `Π_F^k f` on local face `local`.
    pub fn l2_project_face<F: Fn(&Point2<f64>) -> f64>(
        &self,
        local: usize,
        f: F,
        degree: usize,
    ) -> DVector<f64> {
        let fd = &self.faces[local];
        let mut out = DVector::zeros(degree + 1);
        for p in fd.quad.points.iter().zip(&fd.quad.weights) {
            let (x, w) = p;
            let psi = fd.face_basis_at(x, degree);
            let fw = f(x) * w;
            for (l, v) in psi.iter().enumerate() {
                out[l] += fw * v;
            }
        }
        out
    }

    /// Elliptic projection `E_T^m v`, given `v` and its gradient.
    pub fn elliptic_project<V, G>(&self, v: V, grad: G, degree: usize) -> DVector<f64>
    where
        V: Fn(&Point2<f64>) -> f64,
        G: Fn(&Point2<f64>) -> Vector2<f64>,
    {
        let n = poly_dim(degree);
        assert!(n <= self.n_basis(), "degree exceeds workspace degree");
        let mut out = DVector::zeros(n);
        out[0] = self.l2_project_cell(&v, 0)[0];
        if n == 1 {
            return out;
        }
        let mut rhs = DVector::zeros(n - 1);
        for (q, p) in self.quad.points.iter().enumerate() {
            let g = grad(p) * self.quad.weights[q];
            for j in 1..n {
                rhs[j - 1] += g.x * self.grad_x[(q, j)] + g.y * self.grad_y[(q, j)];
            }
        }
        let k = self.stiffness.view((1, 1), (n - 1, n - 1)).clone_owned();
        let sol = k
            .cholesky()
            .expect("stiffness on P^m/R is positive definite on a nondegenerate cell")
            .solve(&rhs);
        out.rows_mut(1, n - 1).copy_from(&sol);
        out
    }

    /// Value of the cell polynomial with coefficients `c` at `p`.
    pub fn eval(&self, c: &DVector<f64>, p: &Point2<f64>) -> f64 {
        let (v, _) = self.basis.eval(p);
        v.rows(0, c.len()).dot(c)
    }

    pub fn eval_grad(&self, c: &DVector<f64>, p: &Point2<f64>) -> Vector2<f64> {
        let (_, g) = self.basis.eval(p);
        c.iter().zip(&g).map(|(ci, gi)| gi * *ci).sum()
    }

    /// `‖f - p‖²_T` for a cell polynomial `p` with coefficients `c`.
    pub fn sq_error<F: Fn(&Point2<f64>) -> f64>(&self, c: &DVector<f64>, f: F) -> f64 {
        let n = c.len();
        self.quad
            .points
            .iter()
            .enumerate()
            .map(|(q, p)| {
                let ph: f64 = (0..n).map(|i| self.vals[(q, i)] * c[i]).sum();
                self.quad.weights[q] * (f(p) - ph).powi(2)
            })
            .sum()
    }

    /// `‖f - p‖²_T` for a vector polynomial stacked as `[x-part; y-part]`.
    pub fn sq_error_vec<F: Fn(&Point2<f64>) -> Vector2<f64>>(&self, c: &DVector<f64>, f: F) -> f64 {
        let n = c.len() / 2;
        self.quad
            .points
            .iter()
            .enumerate()
            .map(|(q, p)| {
                let px: f64 = (0..n).map(|i| self.vals[(q, i)] * c[i]).sum();
                let py: f64 = (0..n).map(|i| self.vals[(q, i)] * c[n + i]).sum();
                let e = f(p) - Vector2::new(px, py);
                self.quad.weights[q] * e.norm_squared()
            })
            .sum()
    }
}
