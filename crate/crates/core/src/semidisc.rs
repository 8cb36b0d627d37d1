//! Global semi-discrete system with static condensation of the face unknowns.
//!
//! The cell state is a flat vector `y = [σ; v]` with per-cell blocks of
//! `2 dim P^k` (σ, x-part then y-part) and `dim P^{k'}` (v_T) coefficients in
//! the orthonormal cell bases. Face unknowns live on all faces of the mesh
//! but only interior faces carry degrees of freedom; boundary entries stay
//! exactly zero.

use nalgebra::{DMatrix, DVector, Point2, Vector2};
use nalgebra_sparse::factorization::CscCholesky;
use nalgebra_sparse::{CooMatrix, CscMatrix};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::h_interp::h_interpolate;
use crate::local_ops::{Discretization, LocalOperatorPack, Variant};
use crate::mesh::SimplicialMesh;

/// Source term `f(x, t)`.
pub type Source<'a> = &'a (dyn Fn(&Point2<f64>, f64) -> f64 + Sync);

/// Cell, face and flux unknowns of the hybrid discretization.
#[derive(Debug, Clone, PartialEq)]
pub struct HybridField {
    pub sigma: DVector<f64>,
    pub vee_cell: DVector<f64>,
    /// Per-face `P^k(F)` coefficients over all faces; zero on boundary faces.
    pub vee_face: DVector<f64>,
}

/// Per-cell blocks of `G_T` and `τ_T Sᵀ S`, split into cell and face columns.
#[derive(Debug, Clone)]
struct CellBlocks {
    gc: DMatrix<f64>,
    gf: DMatrix<f64>,
    acc: DMatrix<f64>,
    acf: DMatrix<f64>,
    aff: DMatrix<f64>,
}

/// Immutable global operator bundle.
#[derive(Debug, Clone)]
pub struct OperatorBundle {
    pub disc: Discretization,
    pub packs: Vec<LocalOperatorPack>,
    cell_faces: Vec<[usize; 3]>,
    /// Interior numbering of each face, `None` on the boundary.
    face_index: Vec<Option<usize>>,
    interior_faces: Vec<usize>,
    cell_vertices: Vec<[usize; 3]>,
    face_vertices: Vec<[usize; 2]>,
    blocks: Vec<CellBlocks>,
}

/// Assembles the global operator bundle from per-cell packs.
pub fn assemble(mesh: &SimplicialMesh, packs: Vec<LocalOperatorPack>) -> Result<OperatorBundle> {
    if packs.len() != mesh.n_cells() {
        return Err(Error::Usage(format!(
            "expected {} cell packs, got {}",
            mesh.n_cells(),
            packs.len()
        )));
    }
    let disc = packs
        .first()
        .map(|p| p.disc)
        .ok_or_else(|| Error::Usage("mesh has no cells".into()))?;
    if let Some(p) = packs.iter().find(|p| p.disc != disc) {
        return Err(Error::Usage(format!(
            "mixed discretizations across cells: {:?} and {:?}",
            disc, p.disc
        )));
    }
    let mut face_index = vec![None; mesh.n_faces()];
    let mut interior_faces = Vec::new();
    for (f, face) in mesh.faces().iter().enumerate() {
        if !face.is_boundary() {
            face_index[f] = Some(interior_faces.len());
            interior_faces.push(f);
        }
    }
    let nc = disc.n_cell_dofs();
    let nfl = 3 * disc.n_face_dofs();
    let blocks = packs
        .par_iter()
        .map(|p| {
            let a = p.stab_form();
            CellBlocks {
                gc: p.grad.columns(0, nc).clone_owned(),
                gf: p.grad.columns(nc, nfl).clone_owned(),
                acc: a.view((0, 0), (nc, nc)).clone_owned(),
                acf: a.view((0, nc), (nc, nfl)).clone_owned(),
                aff: a.view((nc, nc), (nfl, nfl)).clone_owned(),
            }
        })
        .collect();
    let cell_faces = (0..mesh.n_cells()).map(|c| mesh.cell_faces(c)).collect();
    Ok(OperatorBundle {
        disc,
        packs,
        cell_faces,
        face_index,
        interior_faces,
        cell_vertices: mesh.cells().to_vec(),
        face_vertices: mesh.faces().iter().map(|f| f.vertices).collect(),
        blocks,
    })
}

impl OperatorBundle {
    pub fn n_cells(&self) -> usize {
        self.packs.len()
    }

    pub fn n_faces(&self) -> usize {
        self.face_index.len()
    }

    pub fn n_interior_faces(&self) -> usize {
        self.interior_faces.len()
    }

    pub fn interior_faces(&self) -> &[usize] {
        &self.interior_faces
    }

    pub fn face_is_interior(&self, f: usize) -> bool {
        self.face_index[f].is_some()
    }

    pub fn ns(&self) -> usize {
        self.disc.n_sigma_dofs()
    }

    pub fn nc(&self) -> usize {
        self.disc.n_cell_dofs()
    }

    pub fn nf(&self) -> usize {
        self.disc.n_face_dofs()
    }

    /// Length of the flat cell state `[σ; v]`.
    pub fn state_len(&self) -> usize {
        self.n_cells() * (self.ns() + self.nc())
    }

    pub fn sigma_len(&self) -> usize {
        self.n_cells() * self.ns()
    }

    /// Number of globally coupled unknowns (cell and interior-face), the
    /// "dofs" column of the reports.
    pub fn n_dofs(&self) -> usize {
        self.n_cells() * (self.ns() + self.nc()) + self.n_interior_faces() * self.nf()
    }

    pub fn sigma_block(&self, y: &DVector<f64>, c: usize) -> DVector<f64> {
        let ns = self.ns();
        y.rows(c * ns, ns).clone_owned()
    }

    pub fn vee_block(&self, y: &DVector<f64>, c: usize) -> DVector<f64> {
        let nc = self.nc();
        y.rows(self.sigma_len() + c * nc, nc).clone_owned()
    }

    /// Local face coefficients `v_∂T` gathered from the global face vector.
    pub fn gather_faces(&self, vee_face: &DVector<f64>, c: usize) -> DVector<f64> {
        let nf = self.nf();
        let mut out = DVector::zeros(3 * nf);
        for (lf, &f) in self.cell_faces[c].iter().enumerate() {
            out.rows_mut(lf * nf, nf).copy_from(&vee_face.rows(f * nf, nf));
        }
        out
    }

    /// Local vector `(v_T, v_∂T)` of cell `c`.
    pub fn local_hybrid(&self, y: &DVector<f64>, vee_face: &DVector<f64>, c: usize) -> DVector<f64> {
        self.packs[c].stack(&self.vee_block(y, c), &self.gather_faces(vee_face, c))
    }

    /// Flat state from per-cell blocks.
    pub fn pack_state(&self, sigma: &[DVector<f64>], vee: &[DVector<f64>]) -> DVector<f64> {
        let ns = self.ns();
        let nc = self.nc();
        let off = self.sigma_len();
        let mut y = DVector::zeros(self.state_len());
        for c in 0..self.n_cells() {
            y.rows_mut(c * ns, ns).copy_from(&sigma[c]);
            y.rows_mut(off + c * nc, nc).copy_from(&vee[c]);
        }
        y
    }

    /// Splits a flat state into a hybrid field with the given face values.
    pub fn to_hybrid(&self, y: &DVector<f64>, vee_face: DVector<f64>) -> HybridField {
        let off = self.sigma_len();
        HybridField {
            sigma: y.rows(0, off).clone_owned(),
            vee_cell: y.rows(off, y.len() - off).clone_owned(),
            vee_face,
        }
    }

    /// Load vector `(f(·, t), w_T)` over all cells, zero in the σ-part.
    pub fn load(&self, f: Source<'_>, t: f64) -> DVector<f64> {
        let deg = self.disc.cell_degree() as i64;
        let parts: Vec<DVector<f64>> = self
            .packs
            .par_iter()
            .map(|p| p.ws.l2_project_cell(|x| f(x, t), deg))
            .collect();
        let nc = self.nc();
        let off = self.sigma_len();
        let mut out = DVector::zeros(self.state_len());
        for (c, part) in parts.iter().enumerate() {
            out.rows_mut(off + c * nc, nc).copy_from(part);
        }
        out
    }

    /// Full hybrid operator `B(σ, v̂) = (G v̂, −Gᵀσ)` (no stabilization), with
    /// the face part summed over cells and restricted to interior faces.
    pub fn coupling_apply(&self, z: &HybridField) -> HybridField {
        let ns = self.ns();
        let nc = self.nc();
        let parts: Vec<(DVector<f64>, DVector<f64>, DVector<f64>)> = (0..self.n_cells())
            .into_par_iter()
            .map(|c| {
                let b = &self.blocks[c];
                let s = z.sigma.rows(c * ns, ns);
                let v = z.vee_cell.rows(c * nc, nc);
                let vf = self.gather_faces(&z.vee_face, c);
                let ds = &b.gc * v + &b.gf * vf;
                let dv = -(b.gc.tr_mul(&s));
                let df = -(b.gf.tr_mul(&s));
                (ds, dv, df)
            })
            .collect();
        let mut out = HybridField {
            sigma: DVector::zeros(z.sigma.len()),
            vee_cell: DVector::zeros(z.vee_cell.len()),
            vee_face: DVector::zeros(z.vee_face.len()),
        };
        for (c, (ds, dv, df)) in parts.into_iter().enumerate() {
            out.sigma.rows_mut(c * ns, ns).copy_from(&ds);
            out.vee_cell.rows_mut(c * nc, nc).copy_from(&dv);
            self.scatter_faces(&mut out.vee_face, c, &df);
        }
        out
    }

    fn scatter_faces(&self, global: &mut DVector<f64>, c: usize, local: &DVector<f64>) {
        let nf = self.nf();
        for (lf, &f) in self.cell_faces[c].iter().enumerate() {
            if self.face_index[f].is_some() {
                let mut seg = global.rows_mut(f * nf, nf);
                seg += local.rows(lf * nf, nf);
            }
        }
    }

    /// `s_M(v̂, v̂) = Σ_T τ_T ‖S_T v̂_T‖²`.
    pub fn stabilization_energy(&self, vee_cell: &DVector<f64>, vee_face: &DVector<f64>) -> f64 {
        let nc = self.nc();
        let terms: Vec<f64> = (0..self.n_cells())
            .into_par_iter()
            .map(|c| {
                let x = self.packs[c]
                    .stack(&vee_cell.rows(c * nc, nc).clone_owned(), &self.gather_faces(vee_face, c));
                let s = self.packs[c].stabilization_apply(&x);
                self.packs[c].tau * s.norm_squared()
            })
            .collect();
        terms.iter().sum()
    }

    /// Residuals of the full hybrid system for given time derivatives: the
    /// σ-equation, the cell equation and the interior face equation, each as
    /// a Euclidean norm over the orthonormal test bases.
    pub fn full_residual(
        &self,
        z: &HybridField,
        dsigma: &DVector<f64>,
        dvee: &DVector<f64>,
        load: Option<&DVector<f64>>,
    ) -> (f64, f64, f64) {
        let ns = self.ns();
        let nc = self.nc();
        let mut rs = DVector::zeros(z.sigma.len());
        let mut rv = DVector::zeros(z.vee_cell.len());
        let mut rf = DVector::zeros(z.vee_face.len());
        for c in 0..self.n_cells() {
            let b = &self.blocks[c];
            let s = z.sigma.rows(c * ns, ns);
            let v = z.vee_cell.rows(c * nc, nc);
            let vf = self.gather_faces(&z.vee_face, c);
            let g = &b.gc * v + &b.gf * &vf;
            rs.rows_mut(c * ns, ns).copy_from(&(dsigma.rows(c * ns, ns) - g));
            let mut cell = dvee.rows(c * nc, nc) + b.gc.tr_mul(&s) + &b.acc * v + &b.acf * &vf;
            if let Some(l) = load {
                cell -= l.rows(self.sigma_len() + c * nc, nc);
            }
            rv.rows_mut(c * nc, nc).copy_from(&cell);
            let face = b.gf.tr_mul(&s) + b.acf.tr_mul(&v) + &b.aff * &vf;
            self.scatter_faces(&mut rf, c, &face);
        }
        (rs.norm(), rv.norm(), rf.norm())
    }
}

/// Sparse SPD factorization with reverse Cuthill-McKee ordering.
#[derive(Debug)]
struct SparseSpd {
    /// Cholesky factor of the permuted matrix, diagonal first in each column.
    l: CscMatrix<f64>,
    new_of_old: Vec<usize>,
    min_pivot: f64,
}

impl SparseSpd {
    fn factor(m: &CooMatrix<f64>) -> Result<Self> {
        let n = m.nrows();
        if n == 0 {
            let chol = CscCholesky::factor(&CscMatrix::from(m))
                .map_err(|e| Error::Factorization(format!("{e:?}")))?;
            return Ok(Self {
                l: chol.l().clone(),
                new_of_old: Vec::new(),
                min_pivot: f64::INFINITY,
            });
        }
        let mut tri = sprs::TriMat::new((n, n));
        for (i, j, _) in m.triplet_iter() {
            tri.add_triplet(i, j, 1.0);
            tri.add_triplet(j, i, 1.0);
        }
        let pattern: sprs::CsMat<f64> = tri.to_csc();
        let new_of_old = sprs::linalg::reverse_cuthill_mckee(pattern.view()).perm.inv_vec();
        let mut coo = CooMatrix::new(n, n);
        for (i, j, v) in m.triplet_iter() {
            coo.push(new_of_old[i], new_of_old[j], *v);
        }
        let chol = CscCholesky::factor(&CscMatrix::from(&coo))
            .map_err(|e| Error::Factorization(format!("{e:?}")))?;
        let min_pivot = chol
            .l()
            .triplet_iter()
            .filter(|(i, j, _)| i == j)
            .fold(f64::INFINITY, |a, (_, _, v)| a.min(*v));
        let l = chol.take_l();
        for j in 0..n {
            let col = l.col(j);
            if col.row_indices().first() != Some(&j) {
                return Err(Error::Factorization(format!("factor column {j} does not start on the diagonal")));
            }
        }
        Ok(Self { l, new_of_old, min_pivot })
    }

    /// Direct solve with the permuted factor.
    fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        if b.is_empty() {
            return DVector::zeros(0);
        }
        self.solve_once(b)
    }

    fn solve_once(&self, b: &DVector<f64>) -> DVector<f64> {
        let n = b.len();
        let mut x = vec![0.0; n];
        for (old, &new) in self.new_of_old.iter().enumerate() {
            x[new] = b[old];
        }
        let offsets = self.l.col_offsets();
        let rows = self.l.row_indices();
        let vals = self.l.values();
        for j in 0..n {
            let (start, end) = (offsets[j], offsets[j + 1]);
            let xj = x[j] / vals[start];
            x[j] = xj;
            for p in start + 1..end {
                x[rows[p]] -= vals[p] * xj;
            }
        }
        for j in (0..n).rev() {
            let (start, end) = (offsets[j], offsets[j + 1]);
            let mut acc = x[j];
            for p in start + 1..end {
                acc -= vals[p] * x[rows[p]];
            }
            x[j] = acc / vals[start];
        }
        DVector::from_iterator(n, self.new_of_old.iter().map(|&new| x[new]))
    }
}

#[derive(Debug)]
enum Factor {
    /// Inverses of the interior-face blocks.
    PerFace(Vec<DMatrix<f64>>),
    Sparse(SparseSpd),
}

/// Patch faces, patch cells and face coefficients of one null mode.
type PatchMode = (Vec<usize>, Vec<usize>, DVector<f64>);

/// Null modes of the equal-order face matrix.
///
/// Each interior vertex carries one face function `z`, supported on the
/// faces sharing that vertex, with `S_∂T(0, z|_∂T) = 0` on every cell. The
/// face equation then only fixes `v_F` up to these modes; the remaining
/// component is fixed by requiring `Σ_T (∂_t σ_T, G_T(0, z))_T = 0`, the time
/// derivative of the constraint `Σ_T (σ_T, G_T(0, z))_T = 0` that the face
/// equation imposes on `σ`.
#[derive(Debug)]
pub struct FaceKernel {
    /// Per mode: global face ids and coefficients, `nf` per face.
    modes: Vec<(Vec<usize>, DVector<f64>)>,
    /// Per mode: `(cell, G_T(0, z|_∂T))` on the cells of the vertex patch.
    images: Vec<Vec<(usize, DVector<f64>)>>,
    /// Gram matrix of the images.
    gram: SparseSpd,
}

impl FaceKernel {
    fn build(bundle: &OperatorBundle) -> Result<Option<Self>> {
        let nf = bundle.nf();
        let n_vertices = bundle
            .cell_vertices
            .iter()
            .flat_map(|c| c.iter().copied())
            .max()
            .map_or(0, |m| m + 1);
        let mut on_boundary = vec![false; n_vertices];
        let mut vertex_faces = vec![Vec::new(); n_vertices];
        for (f, fv) in bundle.face_vertices.iter().enumerate() {
            for &v in fv {
                if bundle.face_index[f].is_none() {
                    on_boundary[v] = true;
                }
                vertex_faces[v].push(f);
            }
        }
        let mut vertex_cells = vec![Vec::new(); n_vertices];
        for (c, cv) in bundle.cell_vertices.iter().enumerate() {
            for &v in cv {
                vertex_cells[v].push(c);
            }
        }
        let found: Vec<Vec<PatchMode>> = (0..n_vertices)
            .into_par_iter()
            .map(|v| {
                if on_boundary[v] || vertex_faces[v].is_empty() {
                    return Vec::new();
                }
                let faces = &vertex_faces[v];
                let cells = &vertex_cells[v];
                let n = faces.len() * nf;
                // rows τ_T^{1/2} S_T(0, ·) of every patch cell
                let mut stacked = DMatrix::<f64>::zeros(cells.len() * 3 * nf, n);
                for (ci, &c) in cells.iter().enumerate() {
                    let p = &bundle.packs[c];
                    let sf = p.stab_face_block() * p.tau.abs().sqrt();
                    for (lf, f) in bundle.cell_faces[c].iter().enumerate() {
                        let Some(i) = faces.iter().position(|g| g == f) else { continue };
                        stacked
                            .view_mut((ci * 3 * nf, i * nf), (3 * nf, nf))
                            .copy_from(&sf.columns(lf * nf, nf));
                    }
                }
                let svd = stacked.svd(false, true);
                let vt = svd.v_t.expect("right singular vectors requested");
                let scale = svd.singular_values.amax();
                (0..svd.singular_values.len())
                    .filter(|&i| svd.singular_values[i] <= 1e-7 * scale)
                    .map(|i| {
                        let mut z = vt.row(i).transpose();
                        if z[z.iamax()] < 0.0 {
                            z.neg_mut();
                        }
                        (faces.clone(), cells.clone(), z)
                    })
                    .collect()
            })
            .collect();
        let modes: Vec<PatchMode> = found.into_iter().flatten().collect();
        if modes.is_empty() {
            return Ok(None);
        }
        let mut cell_modes = vec![Vec::new(); bundle.n_cells()];
        let images: Vec<Vec<(usize, DVector<f64>)>> = modes
            .iter()
            .enumerate()
            .map(|(m, (faces, cells, z))| {
                cells
                    .iter()
                    .map(|&c| {
                        let mut zl = DVector::zeros(3 * nf);
                        for (lf, f) in bundle.cell_faces[c].iter().enumerate() {
                            if let Some(i) = faces.iter().position(|g| g == f) {
                                zl.rows_mut(lf * nf, nf).copy_from(&z.rows(i * nf, nf));
                            }
                        }
                        cell_modes[c].push(m);
                        (c, &bundle.blocks[c].gf * zl)
                    })
                    .collect()
            })
            .collect();
        let nm = modes.len();
        let mut gram = CooMatrix::new(nm, nm);
        for (c, ms) in cell_modes.iter().enumerate() {
            for &a in ms {
                let wa = &images[a].iter().find(|(cc, _)| *cc == c).unwrap().1;
                for &b in ms {
                    let wb = &images[b].iter().find(|(cc, _)| *cc == c).unwrap().1;
                    gram.push(a, b, wa.dot(wb));
                }
            }
        }
        let gram = SparseSpd::factor(&gram)?;
        let modes = modes.into_iter().map(|(f, _, z)| (f, z)).collect();
        Ok(Some(Self { modes, images, gram }))
    }

    pub fn len(&self) -> usize {
        self.modes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modes.is_empty()
    }

    /// `Σ_T (w_T, G_T(0, z))_T` for every mode, `w` given per cell.
    fn test_images(&self, w: &[DVector<f64>]) -> DVector<f64> {
        DVector::from_iterator(
            self.images.len(),
            self.images.iter().map(|img| img.iter().map(|(c, g)| g.dot(&w[*c])).sum::<f64>()),
        )
    }
}

/// Factor-once solver for the face equation.
#[derive(Debug)]
pub struct SkeletonSolver {
    /// Face-face block of `s_M` on interior faces, natural face ordering.
    pub face_matrix: CscMatrix<f64>,
    factor: Factor,
    /// Smallest diagonal entry of the Cholesky factor.
    pub min_pivot: f64,
    pub kernel: Option<FaceKernel>,
}

impl SkeletonSolver {
    pub fn new(bundle: &OperatorBundle) -> Result<Self> {
        if let Some((c, p)) = bundle.packs.iter().enumerate().find(|(_, p)| p.tau.is_nan() || p.tau <= 0.0) {
            return Err(Error::Factorization(format!("stabilization weight {} on cell {c} is not positive", p.tau)));
        }
        let nf = bundle.nf();
        let n = bundle.n_interior_faces() * nf;
        let mut coo = CooMatrix::new(n, n);
        for (c, b) in bundle.blocks.iter().enumerate() {
            let faces = bundle.cell_faces[c];
            for (la, &fa) in faces.iter().enumerate() {
                let Some(ia) = bundle.face_index[fa] else { continue };
                for (lb, &fb) in faces.iter().enumerate() {
                    let Some(ib) = bundle.face_index[fb] else { continue };
                    for i in 0..nf {
                        for j in 0..nf {
                            let v = b.aff[(la * nf + i, lb * nf + j)];
                            if v != 0.0 {
                                coo.push(ia * nf + i, ib * nf + j, v);
                            }
                        }
                    }
                }
            }
        }
        let face_matrix = CscMatrix::from(&coo);
        let (factor, min_pivot, kernel) = match bundle.disc.variant {
            Variant::Mixed => {
                let (f, p) = Self::factor_per_face(&face_matrix, bundle.n_interior_faces(), nf)?;
                (f, p, None)
            }
            Variant::Equal => {
                let kernel = FaceKernel::build(bundle)?;
                let mut reg = coo.clone();
                if let Some(k) = &kernel {
                    // K + Σ s z zᵀ is SPD when the modes span ker K
                    let scale = face_matrix.values().iter().fold(0.0_f64, |a, v| a.max(v.abs()));
                    for (faces, z) in &k.modes {
                        for (ia, &fa) in faces.iter().enumerate() {
                            let ga = bundle.face_index[fa].unwrap();
                            for (ib, &fb) in faces.iter().enumerate() {
                                let gb = bundle.face_index[fb].unwrap();
                                for i in 0..nf {
                                    for j in 0..nf {
                                        let v = scale * z[ia * nf + i] * z[ib * nf + j];
                                        reg.push(ga * nf + i, gb * nf + j, v);
                                    }
                                }
                            }
                        }
                    }
                }
                let spd = SparseSpd::factor(&reg)?;
                let p = spd.min_pivot;
                (Factor::Sparse(spd), p, kernel)
            }
        };
        if min_pivot.is_nan() || min_pivot <= 0.0 {
            return Err(Error::Factorization(format!("non-positive pivot {min_pivot:e}")));
        }
        Ok(Self { face_matrix, factor, min_pivot, kernel })
    }

    fn factor_per_face(m: &CscMatrix<f64>, n_faces: usize, nf: usize) -> Result<(Factor, f64)> {
        let mut blocks = vec![DMatrix::zeros(nf, nf); n_faces];
        for (i, j, v) in m.triplet_iter() {
            if i / nf != j / nf {
                return Err(Error::Factorization(format!(
                    "mixed-order face matrix couples faces {} and {}",
                    i / nf,
                    j / nf
                )));
            }
            blocks[i / nf][(i % nf, j % nf)] += *v;
        }
        let mut min_pivot = f64::INFINITY;
        let mut out = Vec::with_capacity(n_faces);
        for (f, b) in blocks.into_iter().enumerate() {
            let chol = b
                .cholesky()
                .ok_or_else(|| Error::Factorization(format!("face block {f} is not positive definite")))?;
            min_pivot = chol.l_dirty().diagonal().iter().fold(min_pivot, |a, &d| a.min(d));
            out.push(chol.inverse());
        }
        Ok((Factor::PerFace(out), min_pivot))
    }

    /// Solves `K x = b` on interior-face unknowns; in the equal-order case
    /// the solution is the one orthogonal to the null modes of `K`.
    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        match &self.factor {
            Factor::PerFace(blocks) => {
                let mut x = DVector::zeros(b.len());
                if let Some(first) = blocks.first() {
                    let nf = first.nrows();
                    for (f, inv) in blocks.iter().enumerate() {
                        x.rows_mut(f * nf, nf).gemv(1.0, inv, &b.rows(f * nf, nf), 0.0);
                    }
                }
                x
            }
            Factor::Sparse(spd) => spd.solve(b),
        }
    }

    /// Dimension of the null space of the face matrix.
    pub fn kernel_dim(&self) -> usize {
        self.kernel.as_ref().map_or(0, |k| k.len())
    }

    /// Largest entry of `|K − Kᵀ|` relative to `max |K|`.
    pub fn symmetry_defect(&self) -> f64 {
        let dense = DMatrix::from(&self.face_matrix);
        let scale = dense.amax().max(f64::MIN_POSITIVE);
        (&dense - dense.transpose()).amax() / scale
    }

    /// Values `Σ_T (σ_T, G_T(0, z))_T` of the σ-constraints, one per null mode.
    pub fn constraint_residual(&self, bundle: &OperatorBundle, y: &DVector<f64>) -> DVector<f64> {
        match &self.kernel {
            None => DVector::zeros(0),
            Some(k) => k.test_images(&sigma_blocks(bundle, y)),
        }
    }

    /// Removes the constraint-violating part of `σ` (least-squares correction).
    pub fn project_constraint(&self, bundle: &OperatorBundle, y: &mut DVector<f64>) {
        let Some(k) = &self.kernel else { return };
        let r = k.test_images(&sigma_blocks(bundle, y));
        let beta = k.gram.solve(&r);
        let ns = bundle.ns();
        for (img, b) in k.images.iter().zip(beta.iter()) {
            for (c, g) in img {
                let mut seg = y.rows_mut(c * ns, ns);
                seg -= g * *b;
            }
        }
    }
}

fn sigma_blocks(bundle: &OperatorBundle, y: &DVector<f64>) -> Vec<DVector<f64>> {
    (0..bundle.n_cells()).map(|c| bundle.sigma_block(y, c)).collect()
}

/// Face values `v_F` making the face equation hold for the given cell data.
pub fn solve_faces(
    bundle: &OperatorBundle,
    skeleton: &SkeletonSolver,
    sigma: &DVector<f64>,
    vee_cell: &DVector<f64>,
) -> DVector<f64> {
    let ns = bundle.ns();
    let nc = bundle.nc();
    let nf = bundle.nf();
    let local: Vec<DVector<f64>> = (0..bundle.n_cells())
        .into_par_iter()
        .map(|c| {
            let b = &bundle.blocks[c];
            let s = sigma.rows(c * ns, ns);
            let v = vee_cell.rows(c * nc, nc);
            -(b.gf.tr_mul(&s) + b.acf.tr_mul(&v))
        })
        .collect();
    let mut rhs = DVector::zeros(bundle.n_interior_faces() * nf);
    for (c, r) in local.iter().enumerate() {
        for (lf, &f) in bundle.cell_faces[c].iter().enumerate() {
            if let Some(i) = bundle.face_index[f] {
                let mut seg = rhs.rows_mut(i * nf, nf);
                seg += r.rows(lf * nf, nf);
            }
        }
    }
    let x = skeleton.solve(&rhs);
    let mut out = DVector::zeros(bundle.n_faces() * nf);
    for (i, &f) in bundle.interior_faces.iter().enumerate() {
        out.rows_mut(f * nf, nf).copy_from(&x.rows(i * nf, nf));
    }
    if let Some(k) = &skeleton.kernel {
        let w: Vec<DVector<f64>> = (0..bundle.n_cells())
            .into_par_iter()
            .map(|c| {
                let bl = &bundle.blocks[c];
                &bl.gc * vee_cell.rows(c * nc, nc) + &bl.gf * bundle.gather_faces(&out, c)
            })
            .collect();
        let b = k.test_images(&w);
        let alpha = k.gram.solve(&b);
        for ((faces, z), a) in k.modes.iter().zip(alpha.iter()) {
            for (i, &f) in faces.iter().enumerate() {
                let mut seg = out.rows_mut(f * nf, nf);
                seg -= z.rows(i * nf, nf) * *a;
            }
        }
    }
    out
}

/// Time derivative of the cell state together with the eliminated face values.
pub fn ode_rhs_with_faces(
    bundle: &OperatorBundle,
    skeleton: &SkeletonSolver,
    y: &DVector<f64>,
    t: f64,
    f: Option<Source<'_>>,
) -> (DVector<f64>, DVector<f64>) {
    let ns = bundle.ns();
    let nc = bundle.nc();
    let off = bundle.sigma_len();
    let sigma = y.rows(0, off).clone_owned();
    let vee = y.rows(off, y.len() - off).clone_owned();
    let vee_face = solve_faces(bundle, skeleton, &sigma, &vee);
    let parts: Vec<(DVector<f64>, DVector<f64>)> = (0..bundle.n_cells())
        .into_par_iter()
        .map(|c| {
            let b = &bundle.blocks[c];
            let s = sigma.rows(c * ns, ns);
            let v = vee.rows(c * nc, nc);
            let vf = bundle.gather_faces(&vee_face, c);
            let ds = &b.gc * v + &b.gf * &vf;
            let dv = -(b.gc.tr_mul(&s) + &b.acc * v + &b.acf * &vf);
            (ds, dv)
        })
        .collect();
    let mut dy = match f {
        Some(f) => bundle.load(f, t),
        None => DVector::zeros(y.len()),
    };
    for (c, (ds, dv)) in parts.into_iter().enumerate() {
        let mut a = dy.rows_mut(c * ns, ns);
        a += ds;
        let mut b = dy.rows_mut(off + c * nc, nc);
        b += dv;
    }
    (dy, vee_face)
}

/// Time derivative of `[σ; v]` after face elimination.
pub fn ode_rhs(
    bundle: &OperatorBundle,
    skeleton: &SkeletonSolver,
    y: &DVector<f64>,
    t: f64,
    f: Option<Source<'_>>,
) -> DVector<f64> {
    ode_rhs_with_faces(bundle, skeleton, y, t, f).0
}

/// Numerical flux traces `σ̂_∂T = σ_T·n_T − τ_T λ_∂T(Π^k_∂T δ_∂T)`, one
/// `P^k(F_∂T)` coefficient vector per cell.
pub fn hdg_flux_trace(bundle: &OperatorBundle, field: &HybridField) -> Vec<DVector<f64>> {
    let ns = bundle.ns();
    let nc = bundle.nc();
    let nf = bundle.nf();
    let nk = ns / 2;
    (0..bundle.n_cells())
        .into_par_iter()
        .map(|c| {
            let p = &bundle.packs[c];
            let s = field.sigma.rows(c * ns, ns);
            let x = p.stack(
                &field.vee_cell.rows(c * nc, nc).clone_owned(),
                &bundle.gather_faces(&field.vee_face, c),
            );
            let delta = &p.diff * &x;
            let mut out = -(p.lambda() * delta) * p.tau;
            for (lf, fd) in p.ws.faces.iter().enumerate() {
                let tp = fd.trace_projection.columns(0, nk);
                let sn = (tp * s.rows(0, nk)) * fd.normal.x + (tp * s.rows(nk, nk)) * fd.normal.y;
                let mut seg = out.rows_mut(lf * nf, nf);
                seg += sn;
            }
            out
        })
        .collect()
}

/// Largest `‖σ̂_∂T⁻ + σ̂_∂T⁺‖_F` over interior faces.
pub fn transmission_residual(bundle: &OperatorBundle, fluxes: &[DVector<f64>]) -> f64 {
    let nf = bundle.nf();
    let mut sums = vec![DVector::<f64>::zeros(nf); bundle.n_faces()];
    for (c, flux) in fluxes.iter().enumerate() {
        for (lf, &f) in bundle.cell_faces[c].iter().enumerate() {
            sums[f] += flux.rows(lf * nf, nf);
        }
    }
    bundle
        .interior_faces
        .iter()
        .map(|&f| sums[f].norm())
        .fold(0.0, f64::max)
}

/// Initialization of the cell unknowns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IcMode {
    /// H-interpolate of `(σ₀, v₀)`.
    HInterp,
    /// Plain cellwise L² projections.
    L2,
}

impl std::str::FromStr for IcMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "h-interp" | "hinterp" | "h" => Ok(IcMode::HInterp),
            "l2" | "l2-projection" => Ok(IcMode::L2),
            other => Err(Error::Config(format!("unknown initial-condition mode '{other}'"))),
        }
    }
}

impl std::fmt::Display for IcMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            IcMode::HInterp => "h-interp",
            IcMode::L2 => "l2",
        })
    }
}

/// Initial cell state `[σ(0); v(0)]`.
pub fn initial_state<S, V>(bundle: &OperatorBundle, sigma0: S, v0: V, mode: IcMode) -> Result<DVector<f64>>
where
    S: Fn(&Point2<f64>) -> Vector2<f64> + Sync,
    V: Fn(&Point2<f64>) -> f64 + Sync,
{
    let k = bundle.disc.k as i64;
    let kc = bundle.disc.cell_degree() as i64;
    let parts: Vec<(DVector<f64>, DVector<f64>)> = bundle
        .packs
        .par_iter()
        .map(|p| match mode {
            IcMode::HInterp => h_interpolate(p, &sigma0, &v0).map(|h| (h.sigma, h.vee)),
            IcMode::L2 => Ok((p.ws.l2_project_cell_vec(&sigma0, k), p.ws.l2_project_cell(&v0, kc))),
        })
        .collect::<Result<_>>()?;
    let (s, v): (Vec<_>, Vec<_>) = parts.into_iter().unzip();
    Ok(bundle.pack_state(&s, &v))
}
