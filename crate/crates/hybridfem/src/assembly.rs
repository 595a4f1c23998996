//! Global operator assembly for broken, conforming, and facet spaces.
//!
//! Discrete fields live in one of four layouts:
//!
//! - `Conforming`: one degree of freedom per mesh entity of the form
//!   degree; single-valued across cells.
//! - `Broken`: independent per-cell copies of the cell space; globally
//!   discontinuous.
//! - `FacetBroken`: per-cell copies of the trace space on the whole cell
//!   boundary. At lowest order the trace space of a cell is indexed by the
//!   same entities as the cell space itself, so each cell contributes 4, 6,
//!   or 4 facet degrees of freedom for degrees 0, 1, 2.
//! - `FacetUnbroken`: one degree of freedom per skeleton entity of the
//!   facet degree (vertices, edges, or faces); the natural home of trace
//!   unknowns and multiplier data that are single-valued on the skeleton.
//!
//! Because every entity is stored with ascending vertex ids, a cell-local
//! basis function and the global basis function of the shared entity are
//! *identical* (same tangent, same canonical normal). Conforming
//! local-to-global maps therefore carry only `+1` entries, and facet
//! matching across the two sides of an interior face is exact by entity id.

use std::io::Write as IoWrite;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::elements::{
    local_boundary_mass, local_facet_pairing, local_mass, local_weighted_derivative, CellGeometry,
    FaceGeometry, ReferenceElement,
};
use crate::mesh::{FaceIncidence, Mesh, CELL_FACES};
use crate::Error;

// ---------------------------------------------------------------------------
// Sparse storage
// ---------------------------------------------------------------------------

/// Compressed sparse row matrix with deterministic construction from
/// coordinate triplets (duplicates are summed).
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    /// Number of rows.
    pub nrows: usize,
    /// Number of columns.
    pub ncols: usize,
    /// Row pointer array of length `nrows + 1`.
    pub indptr: Vec<usize>,
    /// Column indices, sorted within each row.
    pub indices: Vec<usize>,
    /// Non-zero values.
    pub values: Vec<f64>,
}

impl CsrMatrix {
    /// Builds a matrix from coordinate triplets, summing duplicates. The
    /// result depends only on the triplet multiset, not its order.
    pub fn from_triplets(nrows: usize, ncols: usize, mut trips: Vec<(usize, usize, f64)>) -> Self {
        trips.sort_by_key(|a| (a.0, a.1));
        let mut rows: Vec<usize> = Vec::with_capacity(trips.len());
        let mut indices = Vec::with_capacity(trips.len());
        let mut values: Vec<f64> = Vec::with_capacity(trips.len());
        for (r, c, v) in trips {
            debug_assert!(r < nrows && c < ncols);
            if rows.last() == Some(&r) && indices.last() == Some(&c) {
                *values.last_mut().unwrap() += v;
            } else {
                rows.push(r);
                indices.push(c);
                values.push(v);
            }
        }
        let mut indptr = vec![0usize; nrows + 1];
        for &r in &rows {
            indptr[r + 1] += 1;
        }
        for r in 0..nrows {
            indptr[r + 1] += indptr[r];
        }
        Self {
            nrows,
            ncols,
            indptr,
            indices,
            values,
        }
    }

    /// Number of stored entries.
    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// Iterates stored entries as `(row, col, value)`.
    pub fn triplets(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.nrows).flat_map(move |r| {
            (self.indptr[r]..self.indptr[r + 1])
                .map(move |k| (r, self.indices[k], self.values[k]))
        })
    }

    /// Matrix-vector product `A x`.
    pub fn matvec(&self, x: &DVector<f64>) -> DVector<f64> {
        debug_assert_eq!(x.len(), self.ncols);
        let mut y = DVector::zeros(self.nrows);
        for r in 0..self.nrows {
            let mut acc = 0.0;
            for k in self.indptr[r]..self.indptr[r + 1] {
                acc += self.values[k] * x[self.indices[k]];
            }
            y[r] = acc;
        }
        y
    }

    /// Transposed product `A^T x`.
    pub fn matvec_transpose(&self, x: &DVector<f64>) -> DVector<f64> {
        debug_assert_eq!(x.len(), self.nrows);
        let mut y = DVector::zeros(self.ncols);
        for r in 0..self.nrows {
            for k in self.indptr[r]..self.indptr[r + 1] {
                y[self.indices[k]] += self.values[k] * x[r];
            }
        }
        y
    }

    /// Explicit transpose.
    pub fn transpose(&self) -> CsrMatrix {
        let trips = self.triplets().map(|(r, c, v)| (c, r, v)).collect();
        CsrMatrix::from_triplets(self.ncols, self.nrows, trips)
    }

    /// Dense copy (test and small-system use only).
    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.nrows, self.ncols);
        for (r, c, v) in self.triplets() {
            m[(r, c)] += v;
        }
        m
    }

    /// Writes the matrix as coordinate-format text, one
    /// `row col value` triple per line, preceded by a size header.
    pub fn export_text<W: IoWrite>(&self, mut w: W) -> Result<(), Error> {
        writeln!(w, "# rows cols nnz")?;
        writeln!(w, "{} {} {}", self.nrows, self.ncols, self.nnz())?;
        for (r, c, v) in self.triplets() {
            writeln!(w, "{} {} {:.16e}", r, c, v)?;
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Spaces
// ---------------------------------------------------------------------------

/// Storage layout of a discrete form space.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layout {
    /// One degree of freedom per mesh entity.
    Conforming,
    /// Independent per-cell copies.
    Broken,
    /// Per-cell copies of the cell-boundary trace space.
    FacetBroken,
    /// One degree of freedom per skeleton entity.
    FacetUnbroken,
}

/// Orientation flavor of a facet space: inner (tangential-trace) or outer
/// (normal-trace, identified with the tangential space by rotation).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Orientation {
    /// Tangentially oriented traces; jumps are sums.
    Inner,
    /// Normally oriented traces; jumps are differences.
    Outer,
}

/// A discrete space of differential forms, tagging operator rows/columns.
#[derive(Debug, Clone, PartialEq)]
pub struct FormSpace {
    /// Form degree `k`.
    pub form_degree: usize,
    /// Polynomial degree (this crate implements the lowest order, 1).
    pub poly_degree: usize,
    /// Storage layout.
    pub layout: Layout,
    /// Orientation flavor (meaningful for facet layouts).
    pub orientation: Orientation,
    /// Global dimension.
    pub dim: usize,
    /// For each cell, the global indices of its degrees of freedom in
    /// local entity order.
    pub cell_dofs: Vec<Vec<usize>>,
    /// Per-DOF orientation signs relative to the cell-local bases. With
    /// ascending-vertex canonical entity bases every relative orientation
    /// is positive; the field exists to make that explicit.
    pub dof_signs: Vec<f64>,
}

impl FormSpace {
    fn entity_dofs(mesh: &Mesh, k: usize) -> Vec<Vec<usize>> {
        (0..mesh.cells.len())
            .map(|c| mesh.cell_entities(k, c))
            .collect()
    }

    /// Conforming space of degree `k`: one DOF per mesh entity.
    pub fn conforming(k: usize, mesh: &Mesh) -> Result<Self, Error> {
        ReferenceElement::new(k)?;
        let dim = mesh.entity_count(k);
        Ok(Self {
            form_degree: k,
            poly_degree: 1,
            layout: Layout::Conforming,
            orientation: Orientation::Inner,
            dim,
            cell_dofs: Self::entity_dofs(mesh, k),
            dof_signs: vec![1.0; dim],
        })
    }

    /// Broken space of degree `k`: independent cell copies.
    pub fn broken(k: usize, mesh: &Mesh) -> Result<Self, Error> {
        let elem = ReferenceElement::new(k)?;
        let nk = elem.cell_dofs();
        let dim = nk * mesh.cells.len();
        Ok(Self {
            form_degree: k,
            poly_degree: 1,
            layout: Layout::Broken,
            orientation: Orientation::Inner,
            dim,
            cell_dofs: (0..mesh.cells.len())
                .map(|c| (c * nk..(c + 1) * nk).collect())
                .collect(),
            dof_signs: vec![1.0; dim],
        })
    }

    /// Broken facet space of degree `k`: per-cell copies of the boundary
    /// trace space, indexed by the cell entities of dimension `k`.
    pub fn facet_broken(k: usize, mesh: &Mesh, orientation: Orientation) -> Result<Self, Error> {
        if k > 2 {
            return Err(Error::Config("facet spaces exist for degrees 0..=2".into()));
        }
        let nk = ReferenceElement::new(k)?.cell_dofs();
        let dim = nk * mesh.cells.len();
        Ok(Self {
            form_degree: k,
            poly_degree: 1,
            layout: Layout::FacetBroken,
            orientation,
            dim,
            cell_dofs: (0..mesh.cells.len())
                .map(|c| (c * nk..(c + 1) * nk).collect())
                .collect(),
            dof_signs: vec![1.0; dim],
        })
    }

    /// Unbroken facet space of degree `k`: one DOF per skeleton entity.
    pub fn facet_unbroken(k: usize, mesh: &Mesh, orientation: Orientation) -> Result<Self, Error> {
        if k > 2 {
            return Err(Error::Config("facet spaces exist for degrees 0..=2".into()));
        }
        let dim = mesh.entity_count(k);
        Ok(Self {
            form_degree: k,
            poly_degree: 1,
            layout: Layout::FacetUnbroken,
            orientation,
            dim,
            cell_dofs: Self::entity_dofs(mesh, k),
            dof_signs: vec![1.0; dim],
        })
    }
}

/// A sparse operator tagged with its row and column spaces.
#[derive(Debug, Clone)]
pub struct OperatorMatrix {
    /// Row space.
    pub row_space: FormSpace,
    /// Column space.
    pub col_space: FormSpace,
    /// The matrix itself.
    pub matrix: CsrMatrix,
}

impl OperatorMatrix {
    fn new(row_space: FormSpace, col_space: FormSpace, matrix: CsrMatrix) -> Self {
        debug_assert_eq!(matrix.nrows, row_space.dim);
        debug_assert_eq!(matrix.ncols, col_space.dim);
        Self {
            row_space,
            col_space,
            matrix,
        }
    }
}

// ---------------------------------------------------------------------------
// Assembly
// ---------------------------------------------------------------------------

fn cell_geometry(mesh: &Mesh, c: usize) -> Result<CellGeometry, Error> {
    CellGeometry::new(mesh.cell_coords(c))
}

/// Scatters a dense local block into triplets through row/col index maps.
fn scatter(
    block: &DMatrix<f64>,
    rows: &[usize],
    cols: &[usize],
    out: &mut Vec<(usize, usize, f64)>,
) {
    for (i, &gi) in rows.iter().enumerate() {
        for (j, &gj) in cols.iter().enumerate() {
            let v = block[(i, j)];
            if v != 0.0 {
                out.push((gi, gj, v));
            }
        }
    }
}

/// Output of [`assemble_broken`]: the block-diagonal operators of one
/// broken space.
pub struct BrokenOperators {
    /// Broken mass matrix (weighted per cell if weights were given).
    pub mass: OperatorMatrix,
    /// Weighted derivative into the broken space one degree up
    /// (`None` for degree 3).
    pub derivative: Option<OperatorMatrix>,
    /// Trace onto the broken facet space. At lowest order the per-cell
    /// block is the identity (the trace of a cell basis function *is* the
    /// facet basis function of its entity).
    pub trace: OperatorMatrix,
    /// Boundary mass of the broken facet space (per-cell block equal to
    /// the cell-boundary Gram matrix of the trace basis).
    pub facet_mass: OperatorMatrix,
}

/// Assembles the block-diagonal operators of the broken degree-`k` space:
/// mass (optionally weighted per cell), weighted derivative, trace, and
/// cell-boundary facet mass. Each output is block diagonal over cells.
pub fn assemble_broken(
    k: usize,
    mesh: &Mesh,
    weights: Option<&[f64]>,
) -> Result<BrokenOperators, Error> {
    if let Some(w) = weights {
        if w.len() != mesh.cells.len() {
            return Err(Error::Config("one weight per cell required".into()));
        }
        if w.iter().any(|&x| x <= 0.0) {
            return Err(Error::Config("cell weights must be positive".into()));
        }
    }
    let space = FormSpace::broken(k, mesh)?;
    let has_derivative = k < 3;
    let has_facets = k <= 2;

    // Per-cell blocks in parallel; the per-cell results are collected in
    // cell order, which keeps assembly deterministic.
    struct CellBlocks {
        mass: DMatrix<f64>,
        derivative: Option<DMatrix<f64>>,
        boundary_mass: Option<DMatrix<f64>>,
    }
    let blocks: Vec<CellBlocks> = (0..mesh.cells.len())
        .into_par_iter()
        .map(|c| -> Result<CellBlocks, Error> {
            let geom = cell_geometry(mesh, c)?;
            let w = weights.map(|w| w[c]).unwrap_or(1.0);
            Ok(CellBlocks {
                mass: local_mass(k, &geom) * w,
                derivative: has_derivative.then(|| local_weighted_derivative(k, &geom)),
                boundary_mass: if has_facets {
                    Some(local_boundary_mass(k, &geom)?)
                } else {
                    None
                },
            })
        })
        .collect::<Result<_, _>>()?;

    let mut mass_trips = Vec::new();
    let mut deriv_trips = Vec::new();
    let mut trace_trips = Vec::new();
    let mut facet_mass_trips = Vec::new();
    for (c, blk) in blocks.iter().enumerate() {
        let dofs = &space.cell_dofs[c];
        scatter(&blk.mass, dofs, dofs, &mut mass_trips);
        if let Some(d) = &blk.derivative {
            let up: Vec<usize> = {
                let nk1 = ReferenceElement::new(k + 1)?.cell_dofs();
                (c * nk1..(c + 1) * nk1).collect()
            };
            scatter(d, &up, dofs, &mut deriv_trips);
        }
        if let Some(bm) = &blk.boundary_mass {
            // Facet-broken indices coincide with the broken cell indices.
            scatter(bm, dofs, dofs, &mut facet_mass_trips);
            for &d in dofs {
                trace_trips.push((d, d, 1.0));
            }
        }
    }

    let mass = OperatorMatrix::new(
        space.clone(),
        space.clone(),
        CsrMatrix::from_triplets(space.dim, space.dim, mass_trips),
    );
    let derivative = if has_derivative {
        let up_space = FormSpace::broken(k + 1, mesh)?;
        Some(OperatorMatrix::new(
            up_space.clone(),
            space.clone(),
            CsrMatrix::from_triplets(up_space.dim, space.dim, deriv_trips),
        ))
    } else {
        None
    };
    let (trace, facet_mass) = {
        let fk = if has_facets { k } else { 2 };
        let facet_space = FormSpace::facet_broken(fk.min(2), mesh, Orientation::Inner)?;
        let trace = OperatorMatrix::new(
            facet_space.clone(),
            space.clone(),
            CsrMatrix::from_triplets(facet_space.dim, space.dim, trace_trips),
        );
        let facet_mass = OperatorMatrix::new(
            facet_space.clone(),
            facet_space.clone(),
            CsrMatrix::from_triplets(facet_space.dim, facet_space.dim, facet_mass_trips),
        );
        (trace, facet_mass)
    };
    Ok(BrokenOperators {
        mass,
        derivative,
        trace,
        facet_mass,
    })
}

/// Assembles the local-to-global inclusion `G` of the conforming space
/// into its broken counterpart: each broken DOF maps to the conforming DOF
/// of its entity. With canonical entity orientations every sign is `+1`.
/// The conforming mass is `G^T M G`.
pub fn assemble_conforming_map(k: usize, mesh: &Mesh) -> Result<OperatorMatrix, Error> {
    let broken = FormSpace::broken(k, mesh)?;
    let conforming = FormSpace::conforming(k, mesh)?;
    let mut trips = Vec::new();
    for c in 0..mesh.cells.len() {
        let entities = mesh.cell_entities(k, c);
        for (local, (&b, &e)) in broken.cell_dofs[c].iter().zip(&entities).enumerate() {
            let _ = local;
            trips.push((b, e, 1.0));
        }
    }
    Ok(OperatorMatrix::new(
        broken.clone(),
        conforming.clone(),
        CsrMatrix::from_triplets(broken.dim, conforming.dim, trips),
    ))
}

/// Assembles the conforming signed incidence matrix from degree `k` to
/// `k + 1` on the global entity tables: the discrete exterior derivative of
/// single-valued cochains. Entries are integers and consecutive incidences
/// compose to zero.
pub fn assemble_conforming_incidence(k: usize, mesh: &Mesh) -> Result<OperatorMatrix, Error> {
    let lo = FormSpace::conforming(k, mesh)?;
    let hi = FormSpace::conforming(k + 1, mesh)?;
    let mut trips = Vec::new();
    match k {
        0 => {
            for (e, vs) in mesh.edges.iter().enumerate() {
                trips.push((e, vs[0], -1.0));
                trips.push((e, vs[1], 1.0));
            }
        }
        1 => {
            for (f, vs) in mesh.faces.iter().enumerate() {
                let (a, b, c) = (vs[0], vs[1], vs[2]);
                trips.push((f, mesh.edge_id([a, b]).expect("edge"), 1.0));
                trips.push((f, mesh.edge_id([b, c]).expect("edge"), 1.0));
                trips.push((f, mesh.edge_id([a, c]).expect("edge"), -1.0));
            }
        }
        2 => {
            for c in 0..mesh.cells.len() {
                let geom = cell_geometry(mesh, c)?;
                let signs = geom.outward_signs();
                for (lf, &f) in mesh.cell_faces[c].iter().enumerate() {
                    trips.push((c, f, signs[lf]));
                }
            }
        }
        _ => return Err(Error::Config("incidence degree out of range 0..=2".into())),
    }
    Ok(OperatorMatrix::new(
        hi.clone(),
        lo.clone(),
        CsrMatrix::from_triplets(hi.dim, lo.dim, trips),
    ))
}

/// Assembles the jump operator from the broken facet space onto the
/// skeleton: the row of a skeleton entity collects its per-cell copies.
/// `Inner` orientation sums the copies (+1 each); `Outer` takes their
/// difference. For facet degree 2 the outer signs distinguish the cell
/// whose outward normal agrees with the canonical face normal (+1) from
/// the other side (-1); boundary faces keep a single +1. For lower facet
/// degrees an entity may have more than two copies and the outer signs
/// alternate in cell order, which reproduces the two-sided difference
/// where that is well defined.
///
/// When `faces` is given, only copies on cells incident to those faces
/// through the entity are kept; `None` assembles the whole skeleton.
pub fn assemble_jump(
    k: usize,
    mesh: &Mesh,
    adjacency: &[FaceIncidence],
    orientation: Orientation,
    faces: Option<&[usize]>,
) -> Result<OperatorMatrix, Error> {
    let broken = FormSpace::facet_broken(k, mesh, orientation)?;
    let unbroken = FormSpace::facet_unbroken(k, mesh, orientation)?;

    // Restrict to entities of the requested faces (or all entities).
    let keep: Option<Vec<bool>> = faces.map(|fs| {
        let ids = mesh.closure_of_faces(fs, k);
        let mut keep = vec![false; unbroken.dim];
        for id in ids {
            keep[id] = true;
        }
        keep
    });

    // Copies of each entity in ascending cell order.
    let mut copies: Vec<Vec<usize>> = vec![Vec::new(); unbroken.dim];
    for c in 0..mesh.cells.len() {
        for (local, &e) in mesh.cell_entities(k, c).iter().enumerate() {
            copies[e].push(broken.cell_dofs[c][local]);
        }
    }

    let mut trips = Vec::new();
    for (e, cps) in copies.iter().enumerate() {
        if let Some(keep) = &keep {
            if !keep[e] {
                continue;
            }
        }
        match orientation {
            Orientation::Inner => {
                for &col in cps {
                    trips.push((e, col, 1.0));
                }
            }
            Orientation::Outer => {
                if k == 2 {
                    let inc = &adjacency[e];
                    if let Some((outer_cell, outer_local)) = inc.outer {
                        let (inner_cell, inner_local) = inc.inner;
                        let sgn = |c: usize, lf: usize| -> Result<f64, Error> {
                            let geom = cell_geometry(mesh, c)?;
                            Ok(geom.outward_signs()[lf])
                        };
                        let s_in = sgn(inner_cell, inner_local)?;
                        let s_out = sgn(outer_cell, outer_local)?;
                        debug_assert!(s_in * s_out < 0.0);
                        trips.push((e, broken.cell_dofs[inner_cell][inner_local], s_in));
                        trips.push((e, broken.cell_dofs[outer_cell][outer_local], s_out));
                    } else {
                        let (c, lf) = inc.inner;
                        trips.push((e, broken.cell_dofs[c][lf], 1.0));
                    }
                } else {
                    for (i, &col) in cps.iter().enumerate() {
                        trips.push((e, col, if i % 2 == 0 { 1.0 } else { -1.0 }));
                    }
                }
            }
        }
    }
    Ok(OperatorMatrix::new(
        unbroken.clone(),
        broken.clone(),
        CsrMatrix::from_triplets(unbroken.dim, broken.dim, trips),
    ))
}

/// Assembles the boundary pairing `Psi` between two skeleton facet spaces
/// over the boundary faces `gamma`: `[Psi]_ij = int_Gamma (test basis i) ^
/// (control basis j)` in vector proxies. Degrees must satisfy
/// `k_test + k_ctrl = 2`. The scalar pairings (2,0) and (0,2) use the
/// canonical flux densities; the rotation pairing (1,1) uses the outward
/// normal of the domain boundary.
pub fn assemble_boundary_pairing(
    k_test: usize,
    k_ctrl: usize,
    mesh: &Mesh,
    adjacency: &[FaceIncidence],
    gamma: &[usize],
) -> Result<OperatorMatrix, Error> {
    if k_test + k_ctrl != 2 {
        return Err(Error::Config(format!(
            "boundary pairing degrees must sum to 2, got {k_test} + {k_ctrl}"
        )));
    }
    let test = FormSpace::facet_unbroken(k_test, mesh, Orientation::Inner)?;
    let ctrl = FormSpace::facet_unbroken(k_ctrl, mesh, Orientation::Inner)?;
    let mut trips = Vec::new();
    for &f in gamma {
        let inc = &adjacency[f];
        if !inc.is_boundary() {
            return Err(Error::Config(format!(
                "face {f} is interior; boundary pairings need boundary faces"
            )));
        }
        let fg = FaceGeometry::new(mesh.face_coords(f))?;
        let local = local_facet_pairing(k_test, &fg);
        // Outward orientation of the domain boundary relative to the
        // canonical face normal, from the unique incident cell.
        let (c, lf) = inc.inner;
        let geom = cell_geometry(mesh, c)?;
        let sigma = geom.outward_signs()[lf];
        let scale = if k_test == 1 { sigma } else { 1.0 };
        let row_ids = entity_ids_of_face(mesh, f, k_test);
        let col_ids = entity_ids_of_face(mesh, f, k_ctrl);
        scatter(&(local * scale), &row_ids, &col_ids, &mut trips);
    }
    Ok(OperatorMatrix::new(
        test.clone(),
        ctrl.clone(),
        CsrMatrix::from_triplets(test.dim, ctrl.dim, trips),
    ))
}

/// Global ids of the dimension-`k` entities of face `f`, in local order.
pub fn entity_ids_of_face(mesh: &Mesh, f: usize, k: usize) -> Vec<usize> {
    let vs = mesh.faces[f];
    match k {
        0 => vs.to_vec(),
        1 => crate::mesh::FACE_EDGES
            .iter()
            .map(|e| mesh.edge_id([vs[e[0]], vs[e[1]]]).expect("face edge"))
            .collect(),
        2 => vec![f],
        _ => Vec::new(),
    }
}

/// Per-cell facet masses of each face of a cell, used by honest boundary
/// pairings: `sum_f T_f^T M_f T_f` equals the cell block of the assembled
/// facet mass. Exposed for tests and the per-cell system builders.
pub fn cell_face_geometries(mesh: &Mesh, c: usize) -> Result<[FaceGeometry; 4], Error> {
    let coords = mesh.cell_coords(c);
    let make = |lf: usize| -> Result<FaceGeometry, Error> {
        let fv = CELL_FACES[lf];
        FaceGeometry::new([coords[fv[0]], coords[fv[1]], coords[fv[2]]])
    };
    Ok([make(0)?, make(1)?, make(2)?, make(3)?])
}
