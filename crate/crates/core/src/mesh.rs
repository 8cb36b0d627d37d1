//! Conforming triangular meshes of rectangles and their uniform refinement.
//!
//! Local face `i` of a cell is the edge opposite its local vertex `i`.
//! Interior faces carry a fixed normal pointing from the lower-indexed
//! neighbour (`T⁻`) to the higher-indexed one (`T⁺`); boundary faces carry
//! the outward normal.

use std::collections::BTreeMap;

use nalgebra::{Point2, Vector2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MESH_FORMAT_VERSION: &str = "hho-wave-mesh/1";

/// Axis-aligned rectangle `[x0, x1] × [y0, y1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rectangle {
    pub x0: f64,
    pub x1: f64,
    pub y0: f64,
    pub y1: f64,
}

impl Rectangle {
    pub fn unit_square() -> Self {
        Self { x0: 0.0, x1: 1.0, y0: 0.0, y1: 1.0 }
    }

    pub fn diameter(&self) -> f64 {
        (self.x1 - self.x0).hypot(self.y1 - self.y0)
    }

    pub fn area(&self) -> f64 {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Face {
    /// Endpoints, sorted by global vertex index.
    pub vertices: [usize; 2],
    /// `(T⁻, Some(T⁺))` for interfaces, `(T, None)` on the boundary.
    pub cells: (usize, Option<usize>),
    pub normal: Vector2<f64>,
    pub measure: f64,
}

impl Face {
    pub fn is_boundary(&self) -> bool {
        self.cells.1.is_none()
    }
}

#[derive(Debug, Clone)]
pub struct SimplicialMesh {
    dim: usize,
    vertices: Vec<Point2<f64>>,
    cells: Vec<[usize; 3]>,
    faces: Vec<Face>,
    cell_faces: Vec<[usize; 3]>,
    cell_normals: Vec<[Vector2<f64>; 3]>,
    cell_areas: Vec<f64>,
    cell_diameters: Vec<f64>,
    domain_diameter: f64,
    parents: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct MeshFile {
    version: String,
    vertices: Vec<[f64; 2]>,
    cells: Vec<[usize; 3]>,
}

impl SimplicialMesh {
    /// `n × n` grid on `domain`, each square split along its lower-left to
    /// upper-right diagonal.
    pub fn build_structured(n: usize, domain: Rectangle) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidMesh("cells per side must be at least 1".into()));
        }
        if !(domain.x1 > domain.x0 && domain.y1 > domain.y0) {
            return Err(Error::InvalidMesh("degenerate rectangle".into()));
        }
        let dx = (domain.x1 - domain.x0) / n as f64;
        let dy = (domain.y1 - domain.y0) / n as f64;
        let mut vertices = Vec::with_capacity((n + 1) * (n + 1));
        for j in 0..=n {
            for i in 0..=n {
                let x = if i == n { domain.x1 } else { domain.x0 + i as f64 * dx };
                let y = if j == n { domain.y1 } else { domain.y0 + j as f64 * dy };
                vertices.push(Point2::new(x, y));
            }
        }
        let idx = |i: usize, j: usize| j * (n + 1) + i;
        let mut cells = Vec::with_capacity(2 * n * n);
        for j in 0..n {
            for i in 0..n {
                let (v00, v10, v11, v01) = (idx(i, j), idx(i + 1, j), idx(i + 1, j + 1), idx(i, j + 1));
                cells.push([v00, v10, v11]);
                cells.push([v00, v11, v01]);
            }
        }
        Self::from_parts(vertices, cells, Vec::new())
    }

    /// Builds topology and geometry from raw vertices and cells.
    pub fn from_parts(
        vertices: Vec<Point2<f64>>,
        mut cells: Vec<[usize; 3]>,
        parents: Vec<usize>,
    ) -> Result<Self> {
        for (c, cell) in cells.iter_mut().enumerate() {
            if cell.iter().any(|&v| v >= vertices.len()) {
                return Err(Error::InvalidMesh(format!("cell {c} references a missing vertex")));
            }
            let [a, b, d] = cell.map(|v| vertices[v]);
            let area2 = (b - a).perp(&(d - a));
            if area2 == 0.0 {
                return Err(Error::InvalidMesh(format!("cell {c} is degenerate")));
            }
            if area2 < 0.0 {
                cell.swap(1, 2);
            }
        }

        let mut lookup: BTreeMap<[usize; 2], usize> = BTreeMap::new();
        let mut faces: Vec<Face> = Vec::new();
        let mut cell_faces = Vec::with_capacity(cells.len());
        for (c, cell) in cells.iter().enumerate() {
            let mut local = [0usize; 3];
            for (i, slot) in local.iter_mut().enumerate() {
                let (p, q) = (cell[(i + 1) % 3], cell[(i + 2) % 3]);
                let key = if p < q { [p, q] } else { [q, p] };
                let id = *lookup.entry(key).or_insert_with(|| {
                    faces.push(Face {
                        vertices: key,
                        cells: (c, None),
                        normal: Vector2::zeros(),
                        measure: (vertices[key[1]] - vertices[key[0]]).norm(),
                    });
                    faces.len() - 1
                });
                let face = &mut faces[id];
                if face.cells.0 != c {
                    if face.cells.1.is_some() {
                        return Err(Error::InvalidMesh(format!(
                            "face {key:?} shared by more than two cells"
                        )));
                    }
                    face.cells.1 = Some(c);
                }
                *slot = id;
            }
            cell_faces.push(local);
        }

        let mut cell_normals = Vec::with_capacity(cells.len());
        let mut cell_areas = Vec::with_capacity(cells.len());
        let mut cell_diameters = Vec::with_capacity(cells.len());
        for cell in &cells {
            let p = cell.map(|v| vertices[v]);
            let mut normals = [Vector2::zeros(); 3];
            for (i, n) in normals.iter_mut().enumerate() {
                let e = p[(i + 2) % 3] - p[(i + 1) % 3];
                // counter-clockwise cell: outward normal is the edge rotated clockwise
                *n = Vector2::new(e.y, -e.x).normalize();
            }
            cell_normals.push(normals);
            cell_areas.push(0.5 * (p[1] - p[0]).perp(&(p[2] - p[0])));
            let mut diam: f64 = 0.0;
            for i in 0..3 {
                for j in i + 1..3 {
                    diam = diam.max((p[i] - p[j]).norm());
                }
            }
            cell_diameters.push(diam);
        }
        for (c, local) in cell_faces.iter().enumerate() {
            for (i, &f) in local.iter().enumerate() {
                if faces[f].cells.0 == c {
                    faces[f].normal = cell_normals[c][i];
                }
            }
        }

        let boundary: Vec<Point2<f64>> = {
            let mut ids: Vec<usize> = faces
                .iter()
                .filter(|f| f.is_boundary())
                .flat_map(|f| f.vertices)
                .collect();
            ids.sort_unstable();
            ids.dedup();
            ids.into_iter().map(|v| vertices[v]).collect()
        };
        let mut domain_diameter: f64 = 0.0;
        for i in 0..boundary.len() {
            for j in i + 1..boundary.len() {
                domain_diameter = domain_diameter.max((boundary[i] - boundary[j]).norm());
            }
        }

        Ok(Self {
            dim: 2,
            vertices,
            cells,
            faces,
            cell_faces,
            cell_normals,
            cell_areas,
            cell_diameters,
            domain_diameter,
            parents,
        })
    }

    /// Red refinement: every triangle is split into four similar children
    /// through its edge midpoints.
    pub fn refine_uniform(&self) -> Self {
        let nv = self.vertices.len();
        let mut vertices = self.vertices.clone();
        vertices.extend(self.faces.iter().map(|f| {
            let [a, b] = f.vertices;
            Point2::from((self.vertices[a].coords + self.vertices[b].coords) * 0.5)
        }));
        let mut cells = Vec::with_capacity(4 * self.cells.len());
        let mut parents = Vec::with_capacity(4 * self.cells.len());
        for (c, &[a, b, d]) in self.cells.iter().enumerate() {
            let [fa, fb, fd] = self.cell_faces[c];
            // midpoint opposite local vertex i
            let (m_bd, m_da, m_ab) = (nv + fa, nv + fb, nv + fd);
            cells.push([a, m_ab, m_da]);
            cells.push([m_ab, b, m_bd]);
            cells.push([m_da, m_bd, d]);
            cells.push([m_ab, m_bd, m_da]);
            parents.extend([c; 4]);
        }
        Self::from_parts(vertices, cells, parents).expect("refinement of a valid mesh is valid")
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn vertices(&self) -> &[Point2<f64>] {
        &self.vertices
    }

    pub fn cells(&self) -> &[[usize; 3]] {
        &self.cells
    }

    pub fn faces(&self) -> &[Face] {
        &self.faces
    }

    pub fn n_cells(&self) -> usize {
        self.cells.len()
    }

    pub fn n_faces(&self) -> usize {
        self.faces.len()
    }

    pub fn cell_faces(&self, cell: usize) -> [usize; 3] {
        self.cell_faces[cell]
    }

    /// Outward unit normal of `cell` on its local face `local`.
    pub fn outward_normal(&self, cell: usize, local: usize) -> Vector2<f64> {
        self.cell_normals[cell][local]
    }

    pub fn cell_vertices(&self, cell: usize) -> [Point2<f64>; 3] {
        self.cells[cell].map(|v| self.vertices[v])
    }

    pub fn cell_area(&self, cell: usize) -> f64 {
        self.cell_areas[cell]
    }

    /// Exact diameter `h_T` (longest edge).
    pub fn cell_diameter(&self, cell: usize) -> f64 {
        self.cell_diameters[cell]
    }

    pub fn inradius(&self, cell: usize) -> f64 {
        let perimeter: f64 = self.cell_faces[cell].iter().map(|&f| self.faces[f].measure).sum();
        2.0 * self.cell_areas[cell] / perimeter
    }

    /// Mesh size `h = max h_T`.
    pub fn h(&self) -> f64 {
        self.cell_diameters.iter().copied().fold(0.0, f64::max)
    }

    pub fn h_min(&self) -> f64 {
        self.cell_diameters.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// `ℓ_Ω`, computed as the largest distance between boundary vertices.
    pub fn domain_diameter(&self) -> f64 {
        self.domain_diameter
    }

    pub fn total_area(&self) -> f64 {
        self.cell_areas.iter().sum()
    }

    /// `max_T h_T / inradius_T`.
    pub fn shape_regularity(&self) -> f64 {
        (0..self.n_cells())
            .map(|c| self.cell_diameters[c] / self.inradius(c))
            .fold(0.0, f64::max)
    }

    /// Parent cell of every cell, empty for meshes not produced by refinement.
    pub fn parents(&self) -> &[usize] {
        &self.parents
    }

    pub fn local_face_index(&self, face: usize, cell: usize) -> Result<usize> {
        self.cell_faces
            .get(cell)
            .and_then(|l| l.iter().position(|&f| f == face))
            .ok_or(Error::NotAFaceOfCell { face, cell })
    }

    /// `+1` if the outward normal of `cell` on `face` equals `n_F`, `-1` otherwise.
    pub fn face_orientation(&self, face: usize, cell: usize) -> Result<f64> {
        self.local_face_index(face, cell)?;
        Ok(if self.faces[face].cells.0 == cell { 1.0 } else { -1.0 })
    }

    pub fn to_json(&self) -> Result<String> {
        let file = MeshFile {
            version: MESH_FORMAT_VERSION.to_string(),
            vertices: self.vertices.iter().map(|p| [p.x, p.y]).collect(),
            cells: self.cells.clone(),
        };
        Ok(serde_json::to_string(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: MeshFile = serde_json::from_str(text)?;
        if file.version != MESH_FORMAT_VERSION {
            return Err(Error::InvalidMesh(format!("unsupported mesh version {:?}", file.version)));
        }
        let vertices = file.vertices.iter().map(|&[x, y]| Point2::new(x, y)).collect();
        Self::from_parts(vertices, file.cells, Vec::new())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(n: usize) -> SimplicialMesh {
        SimplicialMesh::build_structured(n, Rectangle::unit_square()).unwrap()
    }

    #[test]
    fn single_square() {
        let m = unit(1);
        assert_eq!(m.n_cells(), 2);
        assert_eq!(m.n_faces(), 5);
        assert_eq!(m.faces().iter().filter(|f| f.is_boundary()).count(), 4);
    }

    #[test]
    fn zero_cells_rejected() {
        assert!(SimplicialMesh::build_structured(0, Rectangle::unit_square()).is_err());
    }

    #[test]
    fn areas_sum_to_domain() {
        let m = unit(2);
        assert_eq!(m.n_cells(), 8);
        assert_eq!(m.total_area(), 1.0);
    }

    #[test]
    fn diameter_matches_brute_force() {
        let m = unit(4);
        let mut brute: f64 = 0.0;
        for c in 0..m.n_cells() {
            let p = m.cell_vertices(c);
            for i in 0..3 {
                for j in 0..3 {
                    brute = brute.max((p[i] - p[j]).norm());
                }
            }
        }
        assert_eq!(m.h(), brute);
        assert!((m.h() - 2f64.sqrt() / 4.0).abs() < 1e-15);
    }

    #[test]
    fn closed_surface_identity() {
        let m = unit(3).refine_uniform();
        for c in 0..m.n_cells() {
            let mut s = Vector2::zeros();
            for (i, &f) in m.cell_faces(c).iter().enumerate() {
                s += m.outward_normal(c, i) * m.faces()[f].measure;
            }
            assert!(s.norm() < 1e-12 * m.cell_diameter(c));
        }
    }

    #[test]
    fn refinement_halves_h_and_keeps_area() {
        let m = unit(1);
        let r = m.refine_uniform();
        assert_eq!(r.n_cells(), 8);
        assert_eq!(r.h(), m.h() / 2.0);
        assert!((r.total_area() - 1.0).abs() < 1e-14);
        assert!((r.shape_regularity() - m.shape_regularity()).abs() < 1e-12);
    }

    #[test]
    fn face_orientation_signs() {
        let m = unit(2);
        for (f, face) in m.faces().iter().enumerate() {
            match face.cells {
                (t, None) => assert_eq!(m.face_orientation(f, t).unwrap(), 1.0),
                (a, Some(b)) => {
                    assert_eq!(m.face_orientation(f, a).unwrap(), 1.0);
                    assert_eq!(m.face_orientation(f, b).unwrap(), -1.0);
                    let la = m.local_face_index(f, a).unwrap();
                    let lb = m.local_face_index(f, b).unwrap();
                    assert!((m.outward_normal(a, la) + m.outward_normal(b, lb)).norm() < 1e-15);
                }
            }
        }
        let foreign = (0..m.n_faces()).find(|&f| m.local_face_index(f, 0).is_err()).unwrap();
        assert!(matches!(
            m.face_orientation(foreign, 0),
            Err(Error::NotAFaceOfCell { .. })
        ));
    }

    #[test]
    fn json_round_trip_keeps_orientation() {
        let m = unit(3).refine_uniform();
        let back = SimplicialMesh::from_json(&m.to_json().unwrap()).unwrap();
        assert_eq!(back.n_faces(), m.n_faces());
        for f in 0..m.n_faces() {
            assert_eq!(back.faces()[f], m.faces()[f]);
            let (t, _) = m.faces()[f].cells;
            assert_eq!(back.face_orientation(f, t).unwrap(), m.face_orientation(f, t).unwrap());
        }
    }

    #[test]
    fn bad_version_rejected() {
        let text = r#"{"version":"other","vertices":[[0,0],[1,0],[0,1]],"cells":[[0,1,2]]}"#;
        assert!(SimplicialMesh::from_json(text).is_err());
    }
}
