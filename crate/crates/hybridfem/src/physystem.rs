//! Block operators of the hybridized and mixed dual-field systems.
//!
//! Both physical families discretized by this crate — the acoustic wave
//! system and the Maxwell system — share one abstract shape: two fields
//! `(alpha, beta)` of complementary form degrees exchange energy through a
//! differential operator, and the only way energy enters or leaves a region
//! is through its boundary. This module assembles that shape in two
//! equivalent ways:
//!
//! * **Hybrid:** both fields live in broken (per-cell) spaces, a facet
//!   multiplier `lambda` enforces the inter-cell coupling weakly, and a
//!   global trace variable `x_g` on the mesh skeleton stitches the cells
//!   together. The block operators are
//!
//!   ```text
//!   E_l dx_l/dt = J_l x_l + C_lg x_g + B_l u_ess + forcing,
//!             0 = -C_lg^T x_l + B_g u_nat,
//!   ```
//!
//!   with `x_l` the concatenation of per-cell `(alpha, beta, lambda)`
//!   blocks. `E_l` is symmetric positive semidefinite (exactly the
//!   multiplier rows are zero), and the extended structure matrix
//!   `[[J_l, C_lg], [-C_lg^T, 0]]` is skew by construction, so the discrete
//!   energy balance is inherited identically from the cell level.
//!
//! * **Mixed:** one field is kept in a conforming space on the whole mesh
//!   and the other stays broken. This is the classical monolithic
//!   discretization; it reproduces the hybrid solution exactly and serves
//!   as the reference in the equivalence tests.
//!
//! The *primal* arrangement keeps the degree-`p` field broken with its
//! degree-`(p-1)` partner hybridized; the *dual* arrangement does the same
//! with `(q-1, q)`. Boundary data splits into an essential part (the trace
//! of the hybridized field, injected through `B_l` after removing the
//! pinned skeleton unknowns) and a natural part (entering the skeleton
//! equation through `B_g`).
//!
//! All trace coefficients use the canonical entity bases of
//! [`crate::elements`]: values at vertices, circulations along ascending
//! edges, fluxes through ascending-normal faces. Orientation relative to
//! the outward normal of each cell enters through explicit sign factors in
//! the pairings, never through per-entity basis flips.

use nalgebra::DMatrix;
use rayon::prelude::*;
use std::ops::Range;

use crate::assembly::{
    assemble_conforming_map, cell_face_geometries, entity_ids_of_face, CsrMatrix, FormSpace,
    Orientation,
};
use crate::elements::{
    local_facet_mass, local_facet_pairing, local_mass, local_trace, local_weighted_derivative,
    CellGeometry, FaceGeometry, ReferenceElement,
};
use crate::mesh::{facet_adjacency, BoundaryPartition, FaceIncidence, Mesh};
use crate::Error;

/// Physical family. Fixes the form degrees of the two fields: the wave
/// system pairs a volume density with a flux (`p = 3`), the Maxwell system
/// pairs two intermediate-degree fields (`p = 2`).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProblemKind {
    /// Acoustic wave system: scalar density `p` and velocity-type flux
    /// `sigma` with `c^-2 dp/dt = -div sigma`, `dsigma/dt = -grad p`.
    Wave,
    /// Maxwell system: `eps dE/dt = curl H - j`, `mu dH/dt = -curl E`.
    Maxwell,
}

impl ProblemKind {
    /// Degree pair `(p, q)` with `p + q = 4`: the degree-`p` field and its
    /// degree-`(p - 1)` partner form the primal representation, the
    /// degrees `(q - 1, q)` the dual one.
    pub fn degrees(self) -> (usize, usize) {
        match self {
            ProblemKind::Wave => (3, 1),
            ProblemKind::Maxwell => (2, 2),
        }
    }
}

/// Which of the two representations is discretized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Formulation {
    /// Fields of degrees `(p, p-1)`; the first balance law holds strongly.
    Primal,
    /// Fields of degrees `(q-1, q)`; the second balance law holds strongly.
    Dual,
}

/// Constant material weights of the two energy blocks. The stored energy is
/// `1/2 (w_alpha |alpha|^2 + w_beta |beta|^2)` in the broken L2 norms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Materials {
    /// Weight of the `alpha` mass block (`c^-2` for waves, `eps` for Maxwell).
    pub w_alpha: f64,
    /// Weight of the `beta` mass block (`1` for waves, `mu` for Maxwell).
    pub w_beta: f64,
}

impl Materials {
    /// Unit materials (wave speed one, vacuum-normalized Maxwell).
    pub fn unit() -> Self {
        Self {
            w_alpha: 1.0,
            w_beta: 1.0,
        }
    }

    /// Acoustic weights for wave speed `c`.
    pub fn acoustic(c: f64) -> Self {
        Self {
            w_alpha: 1.0 / (c * c),
            w_beta: 1.0,
        }
    }

    /// Electromagnetic weights for permittivity `eps` and permeability `mu`.
    pub fn electromagnetic(eps: f64, mu: f64) -> Self {
        Self {
            w_alpha: eps,
            w_beta: mu,
        }
    }

    fn validate(&self) -> Result<(), Error> {
        if self.w_alpha > 0.0 && self.w_beta > 0.0 {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "material weights must be positive, got w_alpha = {}, w_beta = {}",
                self.w_alpha, self.w_beta
            )))
        }
    }
}

/// Index bookkeeping of the hybrid block system. `x_l` is cell-major with
/// per-cell blocks `[alpha | beta | lambda]`; `x_g` holds one coefficient
/// per non-essential skeleton entity of the trace degree, in ascending
/// entity order.
#[derive(Debug, Clone)]
pub struct HybridLayout {
    /// Number of mesh cells.
    pub cells: usize,
    /// Per-cell sizes of the three local blocks.
    pub n_alpha: usize,
    /// Per-cell `beta` block size.
    pub n_beta: usize,
    /// Per-cell multiplier block size (cell entities of the trace degree).
    pub n_lambda: usize,
    /// Total dimension of `x_l`.
    pub x_l_dim: usize,
    /// Dimension of `x_g` after removing essential entities.
    pub x_g_dim: usize,
    /// Skeleton trace dimension before essential removal.
    pub x_g_full_dim: usize,
    /// Facet degree of the trace/multiplier pair.
    pub trace_degree: usize,
    /// Facet degree of the natural control data.
    pub natural_degree: usize,
    /// Global entity ids forming `x_g`, ascending.
    pub trace_entities: Vec<usize>,
    /// Entity id -> position in `x_g` (None for essential entities).
    pub trace_position: Vec<Option<usize>>,
    /// Essential entity ids (closure of the essential boundary), ascending.
    pub essential_entities: Vec<usize>,
    /// Entity id -> column of `B_l` (None if not essential).
    pub essential_position: Vec<Option<usize>>,
    /// Entity ids carrying natural control data (closure of the natural
    /// boundary at the complementary degree), ascending.
    pub natural_entities: Vec<usize>,
}

impl HybridLayout {
    /// Width of one cell block in `x_l`.
    pub fn cell_width(&self) -> usize {
        self.n_alpha + self.n_beta + self.n_lambda
    }

    /// Rows of cell `c`'s `alpha` block in `x_l`.
    pub fn alpha_range(&self, c: usize) -> Range<usize> {
        let off = c * self.cell_width();
        off..off + self.n_alpha
    }

    /// Rows of cell `c`'s `beta` block in `x_l`.
    pub fn beta_range(&self, c: usize) -> Range<usize> {
        let off = c * self.cell_width() + self.n_alpha;
        off..off + self.n_beta
    }

    /// Rows of cell `c`'s multiplier block in `x_l`.
    pub fn lambda_range(&self, c: usize) -> Range<usize> {
        let off = c * self.cell_width() + self.n_alpha + self.n_beta;
        off..off + self.n_lambda
    }
}

/// Assembled block operators of one hybridized system.
#[derive(Debug, Clone)]
pub struct SystemBlocks {
    /// Physical family.
    pub problem: ProblemKind,
    /// Representation.
    pub formulation: Formulation,
    /// Material weights used in `E_l`.
    pub materials: Materials,
    /// Block-diagonal mass operator of `x_l`; symmetric positive
    /// semidefinite with exactly the multiplier rows equal to zero.
    pub e_l: CsrMatrix,
    /// Block-diagonal structure operator of `x_l`; exactly skew.
    pub j_l: CsrMatrix,
    /// Coupling of the multiplier equations to the skeleton trace `x_g`.
    pub c_lg: CsrMatrix,
    /// Injection of essential boundary data (columns follow
    /// `layout.essential_entities`).
    pub b_l: CsrMatrix,
    /// Natural boundary input on the skeleton equation (columns follow
    /// `layout.natural_entities`).
    pub b_g: CsrMatrix,
    /// Index maps.
    pub layout: HybridLayout,
    /// Broken space of the `alpha` block.
    pub alpha_space: FormSpace,
    /// Broken space of the `beta` block.
    pub beta_space: FormSpace,
    /// Per-cell facet space of the multiplier block.
    pub multiplier_space: FormSpace,
    /// Skeleton trace space (before essential removal).
    pub trace_space: FormSpace,
}

impl SystemBlocks {
    /// Degree pair `(p, q)` of the physical family.
    pub fn degrees(&self) -> (usize, usize) {
        self.problem.degrees()
    }
}

/// Arrangement constants shared by all builders of one `(problem,
/// formulation)` pair.
struct Arrangement {
    alpha_degree: usize,
    beta_degree: usize,
    trace_degree: usize,
    natural_degree: usize,
    /// Sign multiplying the derivative pair, the trace coupling, the
    /// essential injection, and the natural input.
    factor: f64,
}

fn arrangement(problem: ProblemKind, formulation: Formulation) -> Arrangement {
    let (p, q) = problem.degrees();
    match formulation {
        Formulation::Primal => Arrangement {
            alpha_degree: p,
            beta_degree: p - 1,
            trace_degree: p - 1,
            natural_degree: q - 1,
            factor: if p % 2 == 0 { 1.0 } else { -1.0 },
        },
        Formulation::Dual => Arrangement {
            alpha_degree: q - 1,
            beta_degree: q,
            trace_degree: q - 1,
            natural_degree: p - 1,
            factor: -1.0,
        },
    }
}

/// Form degrees `(alpha, beta)` of the two fields in the given
/// representation. The `alpha` field is always the pressure-like one
/// (`p` or `E`), the `beta` field the flux-like one (`sigma` or `H`);
/// the representations differ only in the degrees they carry.
pub fn field_degrees(problem: ProblemKind, formulation: Formulation) -> (usize, usize) {
    let a = arrangement(problem, formulation);
    (a.alpha_degree, a.beta_degree)
}

/// Sign multiplying the derivative pair, the trace coupling, the essential
/// injection, and the natural input of the given representation.
pub fn coupling_factor(problem: ProblemKind, formulation: Formulation) -> f64 {
    arrangement(problem, formulation).factor
}

/// Boundary pairing of the trace of a cell field with the facet multiplier,
/// indexed by the cell entities of dimension `k` on both sides:
/// `Q = sum_f sigma_f^e T_f^T P_f T_f`. The per-face pairing `P_f` and the
/// orientation exponent `e` follow the weak forms: the scalar pairing
/// (`k = 0`) has no normal and no sign, the rotation pairing (`k = 1`) and
/// the flux pairing (`k = 2`) act through the outward normal and carry the
/// outward sign of each face.
fn cell_trace_pairing(
    k: usize,
    geom: &CellGeometry,
    fgs: &[FaceGeometry; 4],
) -> Result<DMatrix<f64>, Error> {
    let n = ReferenceElement::new(k)?.cell_dofs();
    let signs = geom.outward_signs();
    let mut q = DMatrix::zeros(n, n);
    for lf in 0..4 {
        let t = local_trace(k, lf);
        let p = match k {
            1 => local_facet_pairing(1, &fgs[lf]),
            _ => local_facet_mass(k, &fgs[lf]),
        };
        let s = if k == 0 { 1.0 } else { signs[lf] };
        q += s * t.transpose() * p * t;
    }
    Ok(q)
}

/// Local entity indices (within the cell) carried by local face `lf` for
/// entity dimension `k`; the per-face partition of the multiplier block.
fn face_local_entities(k: usize, lf: usize) -> Vec<usize> {
    let t = local_trace(k, lf);
    (0..t.nrows())
        .map(|r| {
            (0..t.ncols())
                .position(|c| t[(r, c)] == 1.0)
                .expect("trace rows select one entity")
        })
        .collect()
}

/// The dense per-cell pieces every builder scatters from.
struct CellParts {
    /// `diag(w_alpha M^a, w_beta M^b)` over the state block.
    mass: DMatrix<f64>,
    /// Skew structure block over the state.
    structure: DMatrix<f64>,
    /// Multiplier coupling into the state equations (state x n_lambda).
    coupling: DMatrix<f64>,
    /// Pairing of the multiplier equation with trace values
    /// (n_lambda x n_lambda); scattering its columns over the cell's trace
    /// entities yields the `C_lg` and `B_l` rows of this cell.
    port: DMatrix<f64>,
    /// Per-face pieces of `coupling` (they sum to it; entities shared by
    /// two faces of the cell receive contributions from both).
    face_coupling: Vec<DMatrix<f64>>,
}

fn cell_parts(
    problem: ProblemKind,
    formulation: Formulation,
    mesh: &Mesh,
    c: usize,
    materials: &Materials,
) -> Result<CellParts, Error> {
    let arr = arrangement(problem, formulation);
    let geom = CellGeometry::new(mesh.cell_coords(c))?;
    let fgs = cell_face_geometries(mesh, c)?;
    let na = ReferenceElement::new(arr.alpha_degree)?.cell_dofs();
    let nb = ReferenceElement::new(arr.beta_degree)?.cell_dofs();
    let nt = ReferenceElement::new(arr.trace_degree)?.cell_dofs();
    let state = na + nb;

    let mut mass = DMatrix::zeros(state, state);
    mass.view_mut((0, 0), (na, na))
        .copy_from(&(materials.w_alpha * local_mass(arr.alpha_degree, &geom)));
    mass.view_mut((na, na), (nb, nb))
        .copy_from(&(materials.w_beta * local_mass(arr.beta_degree, &geom)));

    // The weighted derivative couples the two fields: its rows live in the
    // higher-degree space, its columns in the lower one.
    let mut structure = DMatrix::zeros(state, state);
    match formulation {
        Formulation::Primal => {
            // alpha has the higher degree: d/dt alpha-eq holds strongly.
            let d = local_weighted_derivative(arr.beta_degree, &geom);
            structure
                .view_mut((0, na), (na, nb))
                .copy_from(&(arr.factor * &d));
            structure
                .view_mut((na, 0), (nb, na))
                .copy_from(&(-arr.factor * d.transpose()));
        }
        Formulation::Dual => {
            // beta has the higher degree: d/dt beta-eq holds strongly.
            let d = local_weighted_derivative(arr.alpha_degree, &geom);
            structure
                .view_mut((0, na), (na, nb))
                .copy_from(&d.transpose());
            structure
                .view_mut((na, 0), (nb, na))
                .copy_from(&(-&d));
        }
    }

    // Boundary coupling: the weakly integrated field receives the
    // multiplier through the trace pairing of its own degree.
    let signs = geom.outward_signs();
    let k = arr.trace_degree;
    let row_off = match formulation {
        Formulation::Primal => na,
        Formulation::Dual => 0,
    };
    let mut coupling = DMatrix::zeros(state, nt);
    let mut face_coupling = Vec::with_capacity(4);
    for lf in 0..4 {
        let t = local_trace(k, lf);
        let p = match k {
            1 => local_facet_pairing(1, &fgs[lf]),
            _ => local_facet_mass(k, &fgs[lf]),
        };
        let s = if k == 0 { 1.0 } else { signs[lf] };
        let block = (arr.factor * s) * t.transpose() * p * t;
        let mut piece = DMatrix::zeros(state, nt);
        piece
            .view_mut((row_off, 0), (block.nrows(), nt))
            .copy_from(&block);
        coupling += &piece;
        face_coupling.push(piece);
    }

    // Multiplier equation: the same pairing applied to the trace of the
    // weakly integrated field against the skeleton values, transposed so
    // that the extended structure matrix is skew.
    let q_pair = cell_trace_pairing(k, &geom, &fgs)?;
    let port = arr.factor * q_pair.transpose();

    Ok(CellParts {
        mass,
        structure,
        coupling,
        port,
        face_coupling,
    })
}

fn validate_partition(
    mesh: &Mesh,
    adjacency: &[FaceIncidence],
    partition: &BoundaryPartition,
) -> Result<(), Error> {
    let mut seen = vec![0u8; mesh.faces.len()];
    for &f in partition.gamma1.iter().chain(partition.gamma2.iter()) {
        if f >= mesh.faces.len() {
            return Err(Error::Config(format!("partition face {f} is out of range")));
        }
        seen[f] += 1;
    }
    for (f, inc) in adjacency.iter().enumerate() {
        match (inc.is_boundary(), seen[f]) {
            (true, 1) | (false, 0) => {}
            (true, n) => {
                return Err(Error::Config(format!(
                    "boundary face {f} appears {n} times in the partition"
                )))
            }
            (false, _) => {
                return Err(Error::Config(format!(
                    "interior face {f} appears in the boundary partition"
                )))
            }
        }
    }
    Ok(())
}

fn make_layout(
    mesh: &Mesh,
    n_alpha: usize,
    n_beta: usize,
    n_lambda: usize,
    arr: &Arrangement,
    essential_entities: Vec<usize>,
    natural_entities: Vec<usize>,
) -> HybridLayout {
    let x_g_full_dim = mesh.entity_count(arr.trace_degree);
    let mut essential_position = vec![None; x_g_full_dim];
    for (i, &g) in essential_entities.iter().enumerate() {
        essential_position[g] = Some(i);
    }
    let trace_entities: Vec<usize> =
        (0..x_g_full_dim).filter(|&g| essential_position[g].is_none()).collect();
    let mut trace_position = vec![None; x_g_full_dim];
    for (i, &g) in trace_entities.iter().enumerate() {
        trace_position[g] = Some(i);
    }
    let cells = mesh.cells.len();
    HybridLayout {
        cells,
        n_alpha,
        n_beta,
        n_lambda,
        x_l_dim: cells * (n_alpha + n_beta + n_lambda),
        x_g_dim: trace_entities.len(),
        x_g_full_dim,
        trace_degree: arr.trace_degree,
        natural_degree: arr.natural_degree,
        trace_entities,
        trace_position,
        essential_entities,
        essential_position,
        natural_entities,
    }
}

/// Natural boundary input triplets: for each natural face, the facet
/// duality pairing of the trace-degree test functions against the
/// complementary-degree control data, oriented by the outward sign of the
/// owning cell and scaled by the formulation factor. `row_of` maps a global
/// test entity to its row (returning `None` drops the row, used for
/// essential skeleton entities).
fn natural_input_triplets<F>(
    mesh: &Mesh,
    adjacency: &[FaceIncidence],
    faces: &[usize],
    k_test: usize,
    factor: f64,
    natural_position: &[Option<usize>],
    mut row_of: F,
) -> Result<Vec<(usize, usize, f64)>, Error>
where
    F: FnMut(usize) -> Option<usize>,
{
    let mut trips = Vec::new();
    for &f in faces {
        let (c, lf) = adjacency[f].inner;
        let geom = CellGeometry::new(mesh.cell_coords(c))?;
        let sigma = geom.outward_signs()[lf];
        let fg = FaceGeometry::new(mesh.face_coords(f))?;
        let pairing = local_facet_pairing(k_test, &fg);
        let rows = entity_ids_of_face(mesh, f, k_test);
        let cols = entity_ids_of_face(mesh, f, 2 - k_test);
        for (i, &rg) in rows.iter().enumerate() {
            let Some(r) = row_of(rg) else { continue };
            for (j, &cg) in cols.iter().enumerate() {
                let col = natural_position[cg].expect("closure covers face entities");
                let v = factor * sigma * pairing[(i, j)];
                if v != 0.0 {
                    trips.push((r, col, v));
                }
            }
        }
    }
    Ok(trips)
}

fn natural_position_map(natural_entities: &[usize], entity_count: usize) -> Vec<Option<usize>> {
    let mut pos = vec![None; entity_count];
    for (i, &g) in natural_entities.iter().enumerate() {
        pos[g] = Some(i);
    }
    pos
}

fn build_hybrid(
    problem: ProblemKind,
    formulation: Formulation,
    mesh: &Mesh,
    partition: &BoundaryPartition,
    materials: &Materials,
) -> Result<SystemBlocks, Error> {
    materials.validate()?;
    let adjacency = facet_adjacency(mesh)?;
    validate_partition(mesh, &adjacency, partition)?;
    let arr = arrangement(problem, formulation);
    let (essential_faces, natural_faces) = match formulation {
        Formulation::Primal => (&partition.gamma2, &partition.gamma1),
        Formulation::Dual => (&partition.gamma1, &partition.gamma2),
    };
    let essential_entities = mesh.closure_of_faces(essential_faces, arr.trace_degree);
    let natural_entities = mesh.closure_of_faces(natural_faces, arr.natural_degree);

    let na = ReferenceElement::new(arr.alpha_degree)?.cell_dofs();
    let nb = ReferenceElement::new(arr.beta_degree)?.cell_dofs();
    let nt = ReferenceElement::new(arr.trace_degree)?.cell_dofs();
    let layout = make_layout(mesh, na, nb, nt, &arr, essential_entities, natural_entities);

    let parts: Vec<CellParts> = (0..mesh.cells.len())
        .into_par_iter()
        .map(|c| cell_parts(problem, formulation, mesh, c, materials))
        .collect::<Result<_, _>>()?;

    let state = na + nb;
    let mut e_trips = Vec::new();
    let mut j_trips = Vec::new();
    let mut c_trips = Vec::new();
    let mut bl_trips = Vec::new();
    for (c, part) in parts.iter().enumerate() {
        let off = c * layout.cell_width();
        let lam = off + state;
        for i in 0..state {
            for j in 0..state {
                let m = part.mass[(i, j)];
                if m != 0.0 {
                    e_trips.push((off + i, off + j, m));
                }
                let s = part.structure[(i, j)];
                if s != 0.0 {
                    j_trips.push((off + i, off + j, s));
                }
            }
            for j in 0..nt {
                let g = part.coupling[(i, j)];
                if g != 0.0 {
                    j_trips.push((off + i, lam + j, g));
                    j_trips.push((lam + j, off + i, -g));
                }
            }
        }
        let entities = mesh.cell_entities(arr.trace_degree, c);
        for (j, &gid) in entities.iter().enumerate() {
            for i in 0..nt {
                let v = part.port[(i, j)];
                if v == 0.0 {
                    continue;
                }
                if let Some(col) = layout.trace_position[gid] {
                    c_trips.push((lam + i, col, v));
                } else {
                    let col = layout.essential_position[gid].expect("entity is split");
                    bl_trips.push((lam + i, col, v));
                }
            }
        }
    }

    let natural_position = natural_position_map(
        &layout.natural_entities,
        mesh.entity_count(arr.natural_degree),
    );
    let bg_trips = natural_input_triplets(
        mesh,
        &adjacency,
        natural_faces,
        arr.trace_degree,
        arr.factor,
        &natural_position,
        |g| layout.trace_position[g],
    )?;

    let multiplier_orientation = match (problem, formulation) {
        (ProblemKind::Wave, Formulation::Dual) => Orientation::Outer,
        _ => Orientation::Inner,
    };
    let trace_orientation = match (problem, formulation) {
        (ProblemKind::Wave, Formulation::Primal) => Orientation::Outer,
        _ => Orientation::Inner,
    };

    Ok(SystemBlocks {
        problem,
        formulation,
        materials: *materials,
        e_l: CsrMatrix::from_triplets(layout.x_l_dim, layout.x_l_dim, e_trips),
        j_l: CsrMatrix::from_triplets(layout.x_l_dim, layout.x_l_dim, j_trips),
        c_lg: CsrMatrix::from_triplets(layout.x_l_dim, layout.x_g_dim, c_trips),
        b_l: CsrMatrix::from_triplets(layout.x_l_dim, layout.essential_entities.len(), bl_trips),
        b_g: CsrMatrix::from_triplets(layout.x_g_dim, layout.natural_entities.len(), bg_trips),
        alpha_space: FormSpace::broken(arr.alpha_degree, mesh)?,
        beta_space: FormSpace::broken(arr.beta_degree, mesh)?,
        multiplier_space: FormSpace::facet_broken(arr.trace_degree, mesh, multiplier_orientation)?,
        trace_space: FormSpace::facet_unbroken(arr.trace_degree, mesh, trace_orientation)?,
        layout,
    })
}

/// Builds the primal hybrid system of degree `p` (3 selects the wave
/// family, 2 the Maxwell family). Essential data lives on `gamma2`,
/// natural data on `gamma1`.
pub fn build_primal_hybrid(
    p: usize,
    mesh: &Mesh,
    partition: &BoundaryPartition,
    materials: &Materials,
) -> Result<SystemBlocks, Error> {
    let problem = match p {
        3 => ProblemKind::Wave,
        2 => ProblemKind::Maxwell,
        _ => {
            return Err(Error::Config(format!(
                "no primal family of degree {p}; use 3 (wave) or 2 (Maxwell)"
            )))
        }
    };
    build_hybrid(problem, Formulation::Primal, mesh, partition, materials)
}

/// Builds the dual hybrid system of degree `q` (1 selects the wave family,
/// 2 the Maxwell family). Essential data lives on `gamma1`, natural data
/// on `gamma2`.
pub fn build_dual_hybrid(
    q: usize,
    mesh: &Mesh,
    partition: &BoundaryPartition,
    materials: &Materials,
) -> Result<SystemBlocks, Error> {
    let problem = match q {
        1 => ProblemKind::Wave,
        2 => ProblemKind::Maxwell,
        _ => {
            return Err(Error::Config(format!(
                "no dual family of degree {q}; use 1 (wave) or 2 (Maxwell)"
            )))
        }
    };
    build_hybrid(problem, Formulation::Dual, mesh, partition, materials)
}

/// The monolithic mixed discretization used as the equivalence reference:
/// the hybridized field is kept conforming on the whole mesh, the other
/// field stays broken. The system reads
///
/// ```text
/// M_br  dx_br/dt = f * K x_c              (+ forcing on the broken side, primal)
/// M_c   dx_c/dt  = -f * K^T x_br + B u_nat (+ forcing on the conforming side, dual)
/// ```
///
/// with `f = coupling_sign`, `K = coupling`. Essential conforming
/// coefficients (listed in `essential`) are pinned to boundary data by the
/// time stepper; the `free` rows are solved.
#[derive(Debug, Clone)]
pub struct MixedSystem {
    /// Physical family.
    pub problem: ProblemKind,
    /// Representation.
    pub formulation: Formulation,
    /// Material weights.
    pub materials: Materials,
    /// Weighted block-diagonal mass of the broken field.
    pub mass_broken: CsrMatrix,
    /// Weighted conforming mass (full, including essential rows/columns).
    pub mass_conforming: CsrMatrix,
    /// Weighted derivative from the conforming space into the broken one.
    pub coupling: CsrMatrix,
    /// Sign `f` on `coupling` in the broken equation.
    pub coupling_sign: f64,
    /// Natural input on the conforming equation (columns follow
    /// `natural_entities`), fully signed.
    pub natural_input: CsrMatrix,
    /// 0/1 inclusion of the conforming space into its broken counterpart.
    pub inclusion: CsrMatrix,
    /// Form degree of the broken field.
    pub broken_degree: usize,
    /// Form degree of the conforming field.
    pub conforming_degree: usize,
    /// Non-essential conforming dofs, ascending.
    pub free: Vec<usize>,
    /// Essential conforming dofs (closure of the essential boundary),
    /// ascending.
    pub essential: Vec<usize>,
    /// Entities carrying natural control data, ascending.
    pub natural_entities: Vec<usize>,
    /// Space tag of the broken field.
    pub broken_space: FormSpace,
    /// Space tag of the conforming field.
    pub conforming_space: FormSpace,
}

impl MixedSystem {
    /// Dimension of the broken field.
    pub fn broken_dim(&self) -> usize {
        self.mass_broken.nrows
    }

    /// Dimension of the conforming field (essential dofs included).
    pub fn conforming_dim(&self) -> usize {
        self.mass_conforming.nrows
    }

    /// Total system dimension.
    pub fn total_dim(&self) -> usize {
        self.broken_dim() + self.conforming_dim()
    }

    /// Whether the `alpha` field (the one carrying volume forcing) is the
    /// broken one (primal) or the conforming one (dual).
    pub fn alpha_is_broken(&self) -> bool {
        matches!(self.formulation, Formulation::Primal)
    }
}

/// Builds the mixed reference discretization for the given representation.
pub fn build_mixed_reference(
    problem: ProblemKind,
    formulation: Formulation,
    mesh: &Mesh,
    partition: &BoundaryPartition,
    materials: &Materials,
) -> Result<MixedSystem, Error> {
    materials.validate()?;
    let adjacency = facet_adjacency(mesh)?;
    validate_partition(mesh, &adjacency, partition)?;
    let arr = arrangement(problem, formulation);
    let conf_degree = arr.trace_degree;
    let broken_degree = conf_degree + 1;
    let (w_broken, w_conf) = match formulation {
        Formulation::Primal => (materials.w_alpha, materials.w_beta),
        Formulation::Dual => (materials.w_beta, materials.w_alpha),
    };
    let (essential_faces, natural_faces) = match formulation {
        Formulation::Primal => (&partition.gamma2, &partition.gamma1),
        Formulation::Dual => (&partition.gamma1, &partition.gamma2),
    };

    let n_hi = ReferenceElement::new(broken_degree)?.cell_dofs();
    let conf_dim = mesh.entity_count(conf_degree);
    let broken_dim = n_hi * mesh.cells.len();

    struct MixedCell {
        mass_hi: DMatrix<f64>,
        mass_lo: DMatrix<f64>,
        deriv: DMatrix<f64>,
    }
    let cells: Vec<MixedCell> = (0..mesh.cells.len())
        .into_par_iter()
        .map(|c| -> Result<MixedCell, Error> {
            let geom = CellGeometry::new(mesh.cell_coords(c))?;
            Ok(MixedCell {
                mass_hi: w_broken * local_mass(broken_degree, &geom),
                mass_lo: w_conf * local_mass(conf_degree, &geom),
                deriv: local_weighted_derivative(conf_degree, &geom),
            })
        })
        .collect::<Result<_, _>>()?;

    let mut mb_trips = Vec::new();
    let mut mc_trips = Vec::new();
    let mut k_trips = Vec::new();
    for (c, cell) in cells.iter().enumerate() {
        let entities = mesh.cell_entities(conf_degree, c);
        for i in 0..n_hi {
            for j in 0..n_hi {
                let v = cell.mass_hi[(i, j)];
                if v != 0.0 {
                    mb_trips.push((c * n_hi + i, c * n_hi + j, v));
                }
            }
            for (j, &gj) in entities.iter().enumerate() {
                let v = cell.deriv[(i, j)];
                if v != 0.0 {
                    k_trips.push((c * n_hi + i, gj, v));
                }
            }
        }
        for (i, &gi) in entities.iter().enumerate() {
            for (j, &gj) in entities.iter().enumerate() {
                let v = cell.mass_lo[(i, j)];
                if v != 0.0 {
                    mc_trips.push((gi, gj, v));
                }
            }
        }
    }

    let essential = mesh.closure_of_faces(essential_faces, conf_degree);
    let mut is_essential = vec![false; conf_dim];
    for &g in &essential {
        is_essential[g] = true;
    }
    let free: Vec<usize> = (0..conf_dim).filter(|&g| !is_essential[g]).collect();

    let natural_entities = mesh.closure_of_faces(natural_faces, arr.natural_degree);
    let natural_position =
        natural_position_map(&natural_entities, mesh.entity_count(arr.natural_degree));
    let nat_trips = natural_input_triplets(
        mesh,
        &adjacency,
        natural_faces,
        conf_degree,
        arr.factor,
        &natural_position,
        Some,
    )?;

    Ok(MixedSystem {
        problem,
        formulation,
        materials: *materials,
        mass_broken: CsrMatrix::from_triplets(broken_dim, broken_dim, mb_trips),
        mass_conforming: CsrMatrix::from_triplets(conf_dim, conf_dim, mc_trips),
        coupling: CsrMatrix::from_triplets(broken_dim, conf_dim, k_trips),
        coupling_sign: match formulation {
            Formulation::Primal => arr.factor,
            Formulation::Dual => -1.0,
        },
        natural_input: CsrMatrix::from_triplets(conf_dim, natural_entities.len(), nat_trips),
        inclusion: assemble_conforming_map(conf_degree, mesh)?.matrix,
        broken_degree,
        conforming_degree: conf_degree,
        free,
        essential,
        natural_entities,
        broken_space: FormSpace::broken(broken_degree, mesh)?,
        conforming_space: FormSpace::conforming(conf_degree, mesh)?,
    })
}

/// The port-Hamiltonian differential-algebraic piece of a single cell:
///
/// ```text
/// mass dx/dt = structure x + coupling lambda (+ forcing),
///          0 = -coupling^T x + port u,
/// ```
///
/// where `u` holds the canonical trace values on the cell's own entities
/// (the ports shared with its neighbours). `[[structure, coupling],
/// [-coupling^T, 0]]` is skew, so each cell conserves energy up to the
/// power supplied through its ports.
#[derive(Debug, Clone)]
pub struct CellPhdae {
    /// Physical family.
    pub problem: ProblemKind,
    /// Representation.
    pub formulation: Formulation,
    /// Material weights.
    pub materials: Materials,
    /// Cell id in the mesh this piece was built from.
    pub cell: usize,
    /// Weighted state mass `diag(w_alpha M^a, w_beta M^b)`.
    pub mass: DMatrix<f64>,
    /// Skew structure block of the state.
    pub structure: DMatrix<f64>,
    /// Multiplier coupling into the state equations.
    pub coupling: DMatrix<f64>,
    /// Per-face pieces summing to `coupling`.
    pub face_coupling: Vec<DMatrix<f64>>,
    /// Pairing of the multiplier equation with the port values.
    pub port: DMatrix<f64>,
    /// Per-face partition of the multiplier/port index set (local entity
    /// indices; entities shared by two faces appear in both).
    pub face_multipliers: Vec<Vec<usize>>,
    /// Global entity ids of the ports, in cell-local order.
    pub trace_entities: Vec<usize>,
}

impl CellPhdae {
    /// Dimension of the differential state `(alpha, beta)`.
    pub fn state_dim(&self) -> usize {
        self.mass.nrows()
    }

    /// Dimension of the multiplier block.
    pub fn multiplier_dim(&self) -> usize {
        self.coupling.ncols()
    }

    /// Dimension of the port (trace input) block.
    pub fn port_dim(&self) -> usize {
        self.port.ncols()
    }
}

/// Builds the cell-local piece for one cell.
pub fn build_cell_phdae(
    problem: ProblemKind,
    formulation: Formulation,
    mesh: &Mesh,
    cell: usize,
    materials: &Materials,
) -> Result<CellPhdae, Error> {
    materials.validate()?;
    if cell >= mesh.cells.len() {
        return Err(Error::Config(format!("cell {cell} is out of range")));
    }
    let arr = arrangement(problem, formulation);
    let parts = cell_parts(problem, formulation, mesh, cell, materials)?;
    let face_multipliers = (0..4).map(|lf| face_local_entities(arr.trace_degree, lf)).collect();
    Ok(CellPhdae {
        problem,
        formulation,
        materials: *materials,
        cell,
        mass: parts.mass,
        structure: parts.structure,
        coupling: parts.coupling,
        face_coupling: parts.face_coupling,
        port: parts.port,
        face_multipliers,
        trace_entities: mesh.cell_entities(arr.trace_degree, cell),
    })
}

/// Interconnects cell pieces through the mesh skeleton into the assembled
/// hybrid system. Trace values of entities shared by two cells are
/// identified (one skeleton coefficient per entity), which makes the port
/// inputs of the two sides equal in canonical coordinates; for
/// normal-oriented pairings the opposite outward signs of the two cells
/// turn this into the usual gyrator convention (equal and opposite port
/// values, summed outputs). The result equals [`build_primal_hybrid`] /
/// [`build_dual_hybrid`] entry by entry.
pub fn interconnect(
    cells: &[CellPhdae],
    mesh: &Mesh,
    partition: &BoundaryPartition,
) -> Result<SystemBlocks, Error> {
    if cells.len() != mesh.cells.len() {
        return Err(Error::Config(format!(
            "{} cell pieces for a mesh with {} cells",
            cells.len(),
            mesh.cells.len()
        )));
    }
    let first = cells.first().ok_or_else(|| Error::Config("no cells".into()))?;
    let (problem, formulation, materials) = (first.problem, first.formulation, first.materials);
    for (c, piece) in cells.iter().enumerate() {
        if piece.cell != c {
            return Err(Error::Config(format!(
                "cell piece {c} was built for cell {}",
                piece.cell
            )));
        }
        if piece.problem != problem || piece.formulation != formulation {
            return Err(Error::Config("mixed problem tags in cell pieces".into()));
        }
    }

    let adjacency = facet_adjacency(mesh)?;
    validate_partition(mesh, &adjacency, partition)?;
    let arr = arrangement(problem, formulation);
    let (essential_faces, natural_faces) = match formulation {
        Formulation::Primal => (&partition.gamma2, &partition.gamma1),
        Formulation::Dual => (&partition.gamma1, &partition.gamma2),
    };
    let essential_entities = mesh.closure_of_faces(essential_faces, arr.trace_degree);
    let natural_entities = mesh.closure_of_faces(natural_faces, arr.natural_degree);

    let na = ReferenceElement::new(arr.alpha_degree)?.cell_dofs();
    let state = first.state_dim();
    let nt = first.multiplier_dim();
    let layout = make_layout(mesh, na, state - na, nt, &arr, essential_entities, natural_entities);

    let mut e_trips = Vec::new();
    let mut j_trips = Vec::new();
    let mut c_trips = Vec::new();
    let mut bl_trips = Vec::new();
    for (c, piece) in cells.iter().enumerate() {
        let off = c * layout.cell_width();
        let lam = off + state;
        // Reconstruct the multiplier coupling from its per-face pieces so
        // the interconnection genuinely consumes the partitioned form.
        let mut coupling = DMatrix::zeros(state, nt);
        for fc in &piece.face_coupling {
            coupling += fc;
        }
        for i in 0..state {
            for j in 0..state {
                let m = piece.mass[(i, j)];
                if m != 0.0 {
                    e_trips.push((off + i, off + j, m));
                }
                let s = piece.structure[(i, j)];
                if s != 0.0 {
                    j_trips.push((off + i, off + j, s));
                }
            }
            for j in 0..nt {
                let g = coupling[(i, j)];
                if g != 0.0 {
                    j_trips.push((off + i, lam + j, g));
                    j_trips.push((lam + j, off + i, -g));
                }
            }
        }
        for (j, &gid) in piece.trace_entities.iter().enumerate() {
            for i in 0..nt {
                let v = piece.port[(i, j)];
                if v == 0.0 {
                    continue;
                }
                if let Some(col) = layout.trace_position[gid] {
                    c_trips.push((lam + i, col, v));
                } else {
                    let col = layout.essential_position[gid].expect("entity is split");
                    bl_trips.push((lam + i, col, v));
                }
            }
        }
    }

    let natural_position = natural_position_map(
        &layout.natural_entities,
        mesh.entity_count(arr.natural_degree),
    );
    let bg_trips = natural_input_triplets(
        mesh,
        &adjacency,
        natural_faces,
        arr.trace_degree,
        arr.factor,
        &natural_position,
        |g| layout.trace_position[g],
    )?;

    let multiplier_orientation = match (problem, formulation) {
        (ProblemKind::Wave, Formulation::Dual) => Orientation::Outer,
        _ => Orientation::Inner,
    };
    let trace_orientation = match (problem, formulation) {
        (ProblemKind::Wave, Formulation::Primal) => Orientation::Outer,
        _ => Orientation::Inner,
    };

    Ok(SystemBlocks {
        problem,
        formulation,
        materials,
        e_l: CsrMatrix::from_triplets(layout.x_l_dim, layout.x_l_dim, e_trips),
        j_l: CsrMatrix::from_triplets(layout.x_l_dim, layout.x_l_dim, j_trips),
        c_lg: CsrMatrix::from_triplets(layout.x_l_dim, layout.x_g_dim, c_trips),
        b_l: CsrMatrix::from_triplets(layout.x_l_dim, layout.essential_entities.len(), bl_trips),
        b_g: CsrMatrix::from_triplets(layout.x_g_dim, layout.natural_entities.len(), bg_trips),
        alpha_space: FormSpace::broken(arr.alpha_degree, mesh)?,
        beta_space: FormSpace::broken(arr.beta_degree, mesh)?,
        multiplier_space: FormSpace::facet_broken(arr.trace_degree, mesh, multiplier_orientation)?,
        trace_space: FormSpace::facet_unbroken(arr.trace_degree, mesh, trace_orientation)?,
        layout,
    })
}
