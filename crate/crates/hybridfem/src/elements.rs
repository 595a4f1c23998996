//! Lowest-order finite element spaces on tetrahedra and their local
//! matrices.
//!
//! One tetrahedron carries four discrete spaces, one per form degree:
//! continuous hats on vertices (degree 0), edge elements with circulation
//! degrees of freedom (degree 1), face elements with flux degrees of freedom
//! (degree 2), and constant densities (degree 3). The degrees of freedom are
//! *integral* functionals over the mesh entities: point value, circulation
//! along the ascending edge direction, flux through the face with respect to
//! its canonical normal (right-hand rule on the ascending vertex triple),
//! and the plain cell average with a unit density basis.
//!
//! Two properties of this normalization carry the whole crate:
//!
//! - the degrees of freedom are dual to the basis (`dof_i(phi_j) =
//!   delta_ij`) on *every* tetrahedron, regardless of its orientation, so
//!   coefficient vectors are single-valued across cells, and
//! - the trace of a cell basis function onto one of its faces **is** the
//!   corresponding basis function of the face (tangential part for degrees
//!   0 and 1, normal component for degree 2), so trace matrices have
//!   entries 0 and 1 only.
//!
//! Local matrices are evaluated in closed form through the barycentric
//! moment formula; the quadrature rules in this module exist to cross-check
//! them and to integrate non-polynomial data (projections, error norms).

use nalgebra::{DMatrix, Matrix3, Matrix4, Vector3};

use crate::mesh::{CELL_EDGES, CELL_FACES, FACE_EDGES};
use crate::Error;

/// A reference element of the trimmed lowest-order family, identified by
/// its form degree.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReferenceElement {
    /// Form degree `k` in `0..=3`.
    pub form_degree: usize,
}

impl ReferenceElement {
    /// Creates the reference element of the given form degree.
    pub fn new(form_degree: usize) -> Result<Self, Error> {
        if form_degree > 3 {
            return Err(Error::Config(format!(
                "form degree {form_degree} out of range 0..=3"
            )));
        }
        Ok(Self { form_degree })
    }

    /// Number of degrees of freedom on a tetrahedron: 4, 6, 4, 1.
    pub fn cell_dofs(&self) -> usize {
        [4, 6, 4, 1][self.form_degree]
    }

    /// Number of degrees of freedom on a triangle: 3, 3, 1 (degree 3 does
    /// not trace).
    pub fn facet_dofs(&self) -> usize {
        debug_assert!(self.form_degree <= 2);
        [3, 3, 1][self.form_degree]
    }

    /// Dimension of the mesh entities carrying the degrees of freedom.
    pub fn entity_dim(&self) -> usize {
        self.form_degree
    }
}

// ---------------------------------------------------------------------------
// Geometry of a single cell and of a single face
// ---------------------------------------------------------------------------

/// Affine geometry of one tetrahedron: barycentric gradients, signed
/// volume, and the map from the reference tetrahedron.
#[derive(Debug, Clone)]
pub struct CellGeometry {
    /// Vertex coordinates in ascending global order.
    pub coords: [Vector3<f64>; 4],
    /// Constant gradients of the four barycentric coordinates.
    pub grads: [Vector3<f64>; 4],
    /// Signed determinant, equal to six times the signed volume. Ascending
    /// vertex order does not imply positive orientation, so this may be
    /// negative; all mass matrices use the absolute volume.
    pub det: f64,
    /// Absolute cell volume.
    pub volume: f64,
}

impl CellGeometry {
    /// Builds the geometry from four vertex positions (ascending global
    /// order). Fails for degenerate cells.
    pub fn new(coords: [[f64; 3]; 4]) -> Result<Self, Error> {
        let c: [Vector3<f64>; 4] = [
            Vector3::from(coords[0]),
            Vector3::from(coords[1]),
            Vector3::from(coords[2]),
            Vector3::from(coords[3]),
        ];
        let mut m = Matrix4::zeros();
        for (j, v) in c.iter().enumerate() {
            m[(0, j)] = 1.0;
            m[(1, j)] = v.x;
            m[(2, j)] = v.y;
            m[(3, j)] = v.z;
        }
        let det = m.determinant();
        let volume = det.abs() / 6.0;
        let inv = m.try_inverse().ok_or_else(|| {
            Error::InvalidMesh("degenerate cell (zero volume)".into())
        })?;
        // Row i of the inverse holds the affine coefficients of the i-th
        // barycentric coordinate: lambda_i(x) = c0 + c1 x + c2 y + c3 z.
        let grads = [
            Vector3::new(inv[(0, 1)], inv[(0, 2)], inv[(0, 3)]),
            Vector3::new(inv[(1, 1)], inv[(1, 2)], inv[(1, 3)]),
            Vector3::new(inv[(2, 1)], inv[(2, 2)], inv[(2, 3)]),
            Vector3::new(inv[(3, 1)], inv[(3, 2)], inv[(3, 3)]),
        ];
        Ok(Self {
            coords: c,
            grads,
            det,
            volume,
        })
    }

    /// Physical point of the barycentric coordinates `l`.
    pub fn point(&self, l: [f64; 4]) -> Vector3<f64> {
        self.coords[0] * l[0] + self.coords[1] * l[1] + self.coords[2] * l[2] + self.coords[3] * l[3]
    }

    /// Barycentric coordinates of a reference-tetrahedron point.
    pub fn bary(r: [f64; 3]) -> [f64; 4] {
        [1.0 - r[0] - r[1] - r[2], r[0], r[1], r[2]]
    }

    /// Values of the six edge basis functions at barycentric point `l`.
    pub fn edge_basis(&self, l: [f64; 4]) -> [Vector3<f64>; 6] {
        let g = &self.grads;
        let mut out = [Vector3::zeros(); 6];
        for (i, e) in CELL_EDGES.iter().enumerate() {
            let (a, b) = (e[0], e[1]);
            out[i] = g[b] * l[a] - g[a] * l[b];
        }
        out
    }

    /// Values of the four face basis functions at barycentric point `l`.
    pub fn face_basis(&self, l: [f64; 4]) -> [Vector3<f64>; 4] {
        let g = &self.grads;
        let mut out = [Vector3::zeros(); 4];
        for (i, f) in CELL_FACES.iter().enumerate() {
            let (a, b, c) = (f[0], f[1], f[2]);
            out[i] = (g[b].cross(&g[c]) * l[a]
                + g[c].cross(&g[a]) * l[b]
                + g[a].cross(&g[b]) * l[c])
                * 2.0;
        }
        out
    }

    /// Outward orientation signs of the four faces relative to their
    /// canonical normals, in local face order. The sign of face `f` is
    /// `(-1)^m sign(det)` where `m` is the local vertex omitted by `f`;
    /// equivalently it is the sign of `(centroid_f - centroid_T) . n_f`.
    pub fn outward_signs(&self) -> [f64; 4] {
        let s = self.det.signum();
        // Faces in lex order omit local vertices 3, 2, 1, 0.
        [-s, s, -s, s]
    }
}

/// Geometry of one triangular face embedded in 3-space.
#[derive(Debug, Clone)]
pub struct FaceGeometry {
    /// Vertex coordinates in ascending global order.
    pub coords: [Vector3<f64>; 3],
    /// Unit canonical normal `(p1 - p0) x (p2 - p0) / |...|`.
    pub normal: Vector3<f64>,
    /// Face area.
    pub area: f64,
    /// In-plane gradients of the three barycentric coordinates.
    pub grads: [Vector3<f64>; 3],
}

impl FaceGeometry {
    /// Builds the geometry from three vertex positions (ascending global
    /// order). Fails for degenerate faces.
    pub fn new(coords: [[f64; 3]; 3]) -> Result<Self, Error> {
        let p: [Vector3<f64>; 3] = [
            Vector3::from(coords[0]),
            Vector3::from(coords[1]),
            Vector3::from(coords[2]),
        ];
        let e1 = p[1] - p[0];
        let e2 = p[2] - p[0];
        let nvec = e1.cross(&e2);
        let twice_area = nvec.norm();
        if twice_area <= 0.0 {
            return Err(Error::InvalidMesh("degenerate face (zero area)".into()));
        }
        // In-plane gradients: g . e1, g . e2 are prescribed, g . n = 0.
        let m = Matrix3::from_rows(&[e1.transpose(), e2.transpose(), nvec.transpose()]);
        let inv = m
            .try_inverse()
            .ok_or_else(|| Error::InvalidMesh("degenerate face".into()))?;
        let gb = inv * Vector3::new(1.0, 0.0, 0.0);
        let gc = inv * Vector3::new(0.0, 1.0, 0.0);
        let ga = -gb - gc;
        Ok(Self {
            coords: p,
            normal: nvec / twice_area,
            area: twice_area / 2.0,
            grads: [ga, gb, gc],
        })
    }

    /// Physical point of the barycentric coordinates `l`.
    pub fn point(&self, l: [f64; 3]) -> Vector3<f64> {
        self.coords[0] * l[0] + self.coords[1] * l[1] + self.coords[2] * l[2]
    }

    /// Barycentric coordinates of a reference-triangle point.
    pub fn bary(r: [f64; 2]) -> [f64; 3] {
        [1.0 - r[0] - r[1], r[0], r[1]]
    }

    /// Values of the three tangential edge basis functions at barycentric
    /// point `l` (2D edge elements of the triangle, lex edge order).
    pub fn edge_basis(&self, l: [f64; 3]) -> [Vector3<f64>; 3] {
        let g = &self.grads;
        let mut out = [Vector3::zeros(); 3];
        for (i, e) in FACE_EDGES.iter().enumerate() {
            let (a, b) = (e[0], e[1]);
            out[i] = g[b] * l[a] - g[a] * l[b];
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Quadrature
// ---------------------------------------------------------------------------

// Collapsed conical-product Gauss rules. The one-dimensional factors are
// 3-point rules on [0,1] against the weights (1-x)^0, (1-x)^1, (1-x)^2,
// generated offline by a Golub-Welsch computation at 50-digit precision;
// each factor is exact for polynomial degree <= 5 against its weight, and
// the products integrate total degree <= 5 exactly on the simplices.
const GL_NODES: [f64; 3] = [
    0.11270166537925831148,
    0.5,
    0.88729833462074168852,
];
const GL_WEIGHTS: [f64; 3] = [
    0.27777777777777777778,
    0.44444444444444444444,
    0.27777777777777777778,
];
const GJ1_NODES: [f64; 3] = [
    0.088587959512703947396,
    0.40946686444073471086,
    0.78765946176084705603,
];
const GJ1_WEIGHTS: [f64; 3] = [
    0.20093191373895963077,
    0.22924110635958624669,
    0.069826979901454122534,
];
const GJ2_NODES: [f64; 3] = [
    0.072994024073149732156,
    0.34700376603835188472,
    0.70500220988849838312,
];
const GJ2_WEIGHTS: [f64; 3] = [
    0.15713636106488661332,
    0.146246269259866022,
    0.029950703008580698011,
];

/// A quadrature rule on the reference tetrahedron
/// `{x, y, z >= 0, x + y + z <= 1}`. Weights sum to the reference volume
/// 1/6, so a physical integral is `6 V * sum_q w_q f(x_q)`.
#[derive(Debug, Clone)]
pub struct Quadrature {
    /// Points in reference coordinates.
    pub points: Vec<[f64; 3]>,
    /// Weights, including the collapse Jacobian.
    pub weights: Vec<f64>,
}

impl Quadrature {
    /// 27-point conical-product rule, exact for total degree 5.
    pub fn tetrahedron() -> Self {
        let mut points = Vec::with_capacity(27);
        let mut weights = Vec::with_capacity(27);
        for (u, wu) in GJ2_NODES.iter().zip(GJ2_WEIGHTS) {
            for (v, wv) in GJ1_NODES.iter().zip(GJ1_WEIGHTS) {
                for (w, ww) in GL_NODES.iter().zip(GL_WEIGHTS) {
                    let x = *u;
                    let y = v * (1.0 - u);
                    let z = w * (1.0 - u) * (1.0 - v);
                    points.push([x, y, z]);
                    // The Jacobian (1-u)^2 (1-v) is the weight the Jacobi
                    // factors already integrate against.
                    weights.push(wu * wv * ww);
                }
            }
        }
        Self { points, weights }
    }

    /// Integrates `f` (given barycentric coordinates) over a physical cell.
    pub fn integrate<F: FnMut([f64; 4]) -> f64>(&self, geom: &CellGeometry, mut f: F) -> f64 {
        let scale = 6.0 * geom.volume;
        self.points
            .iter()
            .zip(&self.weights)
            .map(|(p, w)| w * f(CellGeometry::bary(*p)))
            .sum::<f64>()
            * scale
    }
}

/// A quadrature rule on the reference triangle `{x, y >= 0, x + y <= 1}`.
/// Weights sum to the reference area 1/2, so a physical integral is
/// `2 A * sum_q w_q f(x_q)`.
#[derive(Debug, Clone)]
pub struct FaceQuadrature {
    /// Points in reference coordinates.
    pub points: Vec<[f64; 2]>,
    /// Weights, including the collapse Jacobian.
    pub weights: Vec<f64>,
}

impl FaceQuadrature {
    /// 9-point conical-product rule, exact for total degree 5.
    pub fn triangle() -> Self {
        let mut points = Vec::with_capacity(9);
        let mut weights = Vec::with_capacity(9);
        for (u, wu) in GJ1_NODES.iter().zip(GJ1_WEIGHTS) {
            for (v, wv) in GL_NODES.iter().zip(GL_WEIGHTS) {
                points.push([*u, v * (1.0 - u)]);
                weights.push(wu * wv);
            }
        }
        Self { points, weights }
    }

    /// Integrates `f` (given barycentric coordinates) over a physical face.
    pub fn integrate<F: FnMut([f64; 3]) -> f64>(&self, geom: &FaceGeometry, mut f: F) -> f64 {
        let scale = 2.0 * geom.area;
        self.points
            .iter()
            .zip(&self.weights)
            .map(|(p, w)| w * f(FaceGeometry::bary(*p)))
            .sum::<f64>()
            * scale
    }
}

// ---------------------------------------------------------------------------
// Local matrices
// ---------------------------------------------------------------------------

/// Barycentric product moment over a cell:
/// `int_T lambda_i lambda_j = V (1 + delta_ij) / 20`.
fn cell_moment(volume: f64, i: usize, j: usize) -> f64 {
    if i == j {
        volume / 10.0
    } else {
        volume / 20.0
    }
}

/// Barycentric product moment over a face:
/// `int_f mu_i mu_j = A (1 + delta_ij) / 12`.
fn face_moment(area: f64, i: usize, j: usize) -> f64 {
    if i == j {
        area / 6.0
    } else {
        area / 12.0
    }
}

/// Mass matrix of the degree-`k` space on one cell, in closed form.
pub fn local_mass(k: usize, geom: &CellGeometry) -> DMatrix<f64> {
    let v = geom.volume;
    match k {
        0 => DMatrix::from_fn(4, 4, |i, j| cell_moment(v, i, j)),
        1 => {
            let g = &geom.grads;
            DMatrix::from_fn(6, 6, |r, c| {
                let (a, b) = (CELL_EDGES[r][0], CELL_EDGES[r][1]);
                let (p, q) = (CELL_EDGES[c][0], CELL_EDGES[c][1]);
                g[b].dot(&g[q]) * cell_moment(v, a, p) - g[b].dot(&g[p]) * cell_moment(v, a, q)
                    - g[a].dot(&g[q]) * cell_moment(v, b, p)
                    + g[a].dot(&g[p]) * cell_moment(v, b, q)
            })
        }
        2 => {
            let g = &geom.grads;
            // Each face basis function is a sum of three (vertex, constant
            // vector) terms; collect them once.
            let mut terms: Vec<[(usize, Vector3<f64>); 3]> = Vec::with_capacity(4);
            for f in CELL_FACES {
                let (a, b, c) = (f[0], f[1], f[2]);
                terms.push([
                    (a, g[b].cross(&g[c])),
                    (b, g[c].cross(&g[a])),
                    (c, g[a].cross(&g[b])),
                ]);
            }
            DMatrix::from_fn(4, 4, |r, c| {
                let mut sum = 0.0;
                for (i, vi) in &terms[r] {
                    for (j, vj) in &terms[c] {
                        sum += 4.0 * vi.dot(vj) * cell_moment(v, *i, *j);
                    }
                }
                sum
            })
        }
        3 => DMatrix::from_element(1, 1, v),
        _ => panic!("form degree out of range"),
    }
}

/// Signed incidence (exterior-derivative cochain) matrix from degree `k` to
/// `k + 1` on one cell. Entries are integers:
///
/// - `k = 0`: rows are edges, `-1` at the first and `+1` at the second
///   vertex;
/// - `k = 1`: rows are faces `(a, b, c)` with `+1` on edges `(a,b)`,
///   `(b,c)` and `-1` on `(a,c)` (the boundary circulation of the face);
/// - `k = 2`: a single row of outward signs of the faces (the geometric
///   boundary of the cell), which needs the cell orientation.
pub fn local_derivative(k: usize, geom: &CellGeometry) -> DMatrix<f64> {
    match k {
        0 => {
            let mut d = DMatrix::zeros(6, 4);
            for (r, e) in CELL_EDGES.iter().enumerate() {
                d[(r, e[0])] = -1.0;
                d[(r, e[1])] = 1.0;
            }
            d
        }
        1 => {
            let edge_index = |a: usize, b: usize| {
                CELL_EDGES.iter().position(|e| e == &[a, b]).expect("cell edge")
            };
            let mut d = DMatrix::zeros(4, 6);
            for (r, f) in CELL_FACES.iter().enumerate() {
                let (a, b, c) = (f[0], f[1], f[2]);
                d[(r, edge_index(a, b))] = 1.0;
                d[(r, edge_index(b, c))] = 1.0;
                d[(r, edge_index(a, c))] = -1.0;
            }
            d
        }
        2 => {
            let s = geom.outward_signs();
            DMatrix::from_fn(1, 4, |_, j| s[j])
        }
        _ => panic!("derivative degree out of range 0..=2"),
    }
}

/// Weighted derivative `D^k`, the matrix of `(test_{k+1}, d basis_k)` inner
/// products. For degrees 0 and 1 this is exactly `M^{k+1} d^k`; at degree 2
/// the unit-density basis makes it the plain row of outward signs (the
/// incidence row divided by the volume, integrated against the volume).
pub fn local_weighted_derivative(k: usize, geom: &CellGeometry) -> DMatrix<f64> {
    match k {
        0 | 1 => local_mass(k + 1, geom) * local_derivative(k, geom),
        2 => local_derivative(2, geom),
        _ => panic!("derivative degree out of range 0..=2"),
    }
}

/// Trace matrix of the degree-`k` cell space onto local face `lf`: the 0/1
/// matrix selecting, for each facet entity, the matching cell entity. At
/// this order the trace of a cell basis function *is* the facet basis
/// function of the shared entity, so no other values occur.
pub fn local_trace(k: usize, lf: usize) -> DMatrix<f64> {
    let fv = CELL_FACES[lf];
    match k {
        0 => {
            let mut t = DMatrix::zeros(3, 4);
            for (i, &v) in fv.iter().enumerate() {
                t[(i, v)] = 1.0;
            }
            t
        }
        1 => {
            let mut t = DMatrix::zeros(3, 6);
            for (i, e) in FACE_EDGES.iter().enumerate() {
                let cell_edge = [fv[e[0]], fv[e[1]]];
                let j = CELL_EDGES
                    .iter()
                    .position(|ce| ce == &cell_edge)
                    .expect("face edge is a cell edge");
                t[(i, j)] = 1.0;
            }
            t
        }
        2 => {
            let mut t = DMatrix::zeros(1, 4);
            t[(0, lf)] = 1.0;
            t
        }
        _ => panic!("trace degree out of range 0..=2"),
    }
}

/// Mass matrix of the degree-`k` facet space on one triangle, closed form.
pub fn local_facet_mass(k: usize, geom: &FaceGeometry) -> DMatrix<f64> {
    let a = geom.area;
    match k {
        0 => DMatrix::from_fn(3, 3, |i, j| face_moment(a, i, j)),
        1 => {
            let g = &geom.grads;
            DMatrix::from_fn(3, 3, |r, c| {
                let (i, j) = (FACE_EDGES[r][0], FACE_EDGES[r][1]);
                let (p, q) = (FACE_EDGES[c][0], FACE_EDGES[c][1]);
                g[j].dot(&g[q]) * face_moment(a, i, p) - g[j].dot(&g[p]) * face_moment(a, i, q)
                    - g[i].dot(&g[q]) * face_moment(a, j, p)
                    + g[i].dot(&g[p]) * face_moment(a, j, q)
            })
        }
        // The unit-flux density basis is the constant 1/A.
        2 => DMatrix::from_element(1, 1, 1.0 / a),
        _ => panic!("facet degree out of range 0..=2"),
    }
}

/// Duality pairing of two facet spaces on one triangle with respect to the
/// **canonical** normal, `<test of degree k, trial of degree 2 - k>`:
///
/// - `(2, 0)`: flux density against hats, the constant row `1/3`;
/// - `(1, 1)`: the rotation pairing `int_f (a x b) . n dA`, antisymmetric;
/// - `(0, 2)`: transpose of `(2, 0)`.
///
/// Callers apply outward-orientation signs per face where required.
pub fn local_facet_pairing(k_test: usize, geom: &FaceGeometry) -> DMatrix<f64> {
    match k_test {
        2 => DMatrix::from_element(1, 3, 1.0 / 3.0),
        0 => DMatrix::from_element(3, 1, 1.0 / 3.0),
        1 => {
            let g = &geom.grads;
            let a = geom.area;
            let n = &geom.normal;
            let cr = |x: &Vector3<f64>, y: &Vector3<f64>| x.cross(y).dot(n);
            DMatrix::from_fn(3, 3, |r, c| {
                let (i, j) = (FACE_EDGES[r][0], FACE_EDGES[r][1]);
                let (p, q) = (FACE_EDGES[c][0], FACE_EDGES[c][1]);
                cr(&g[j], &g[q]) * face_moment(a, i, p) - cr(&g[j], &g[p]) * face_moment(a, i, q)
                    - cr(&g[i], &g[q]) * face_moment(a, j, p)
                    + cr(&g[i], &g[p]) * face_moment(a, j, q)
            })
        }
        _ => panic!("facet pairing degree out of range"),
    }
}

/// Boundary mass of the degree-`k` trace space on the whole cell boundary:
/// `sum_f T_f^T M_f T_f`, indexed by the cell entities of dimension `k`.
/// This couples entities shared by several faces (for `k < 2`), which is
/// why it is assembled from per-face pieces instead of per entity.
pub fn local_boundary_mass(k: usize, geom: &CellGeometry) -> Result<DMatrix<f64>, Error> {
    let elem = ReferenceElement::new(k)?;
    let n = elem.cell_dofs();
    let mut m = DMatrix::zeros(n, n);
    for lf in 0..4 {
        let fv = CELL_FACES[lf];
        let coords = [
            [geom.coords[fv[0]].x, geom.coords[fv[0]].y, geom.coords[fv[0]].z],
            [geom.coords[fv[1]].x, geom.coords[fv[1]].y, geom.coords[fv[1]].z],
            [geom.coords[fv[2]].x, geom.coords[fv[2]].y, geom.coords[fv[2]].z],
        ];
        let fg = FaceGeometry::new(coords)?;
        let t = local_trace(k, lf);
        m += t.transpose() * local_facet_mass(k, &fg) * t;
    }
    Ok(m)
}
