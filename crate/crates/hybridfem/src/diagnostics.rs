//! Readers over states and trajectories: energy and power-balance
//! bookkeeping, volume/graph/facet error norms against exact fields,
//! divergence tracking for the flux-type variables, convergence-rate
//! fitting, and system-size tables. Everything here is a pure observer:
//! nothing mutates the state or the operators.

use nalgebra::{DVector, Vector3};
use rayon::prelude::*;

use crate::assembly::FormSpace;
use crate::elements::{
    local_boundary_mass, local_derivative, CellGeometry, FaceGeometry, FaceQuadrature,
    Quadrature, ReferenceElement,
};
use crate::mesh::{build_structured_box, Mesh, CELL_FACES};
use crate::physystem::{Formulation, ProblemKind, SystemBlocks};
use crate::problems::{eval_local, Field, FieldValue, ManufacturedCase};
use crate::solver::{energy, scatter_alpha, Inputs, PhState};
use crate::Error;

/// Per-step energy bookkeeping of one implicit-midpoint step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepDiagnostics {
    /// Time at the end of the step.
    pub time: f64,
    /// Energy of the end-of-step state.
    pub hamiltonian: f64,
    /// Midpoint boundary supply through both input channels, evaluated
    /// with the assembled input matrices (essential channel against the
    /// interior collocated output, natural channel against the skeleton
    /// midpoint output).
    pub boundary_power: f64,
    /// Midpoint distributed supply of the volumetric source.
    pub source_power: f64,
    /// `(H^{n+1} - H^n)/dt - boundary_power - source_power`; zero up to
    /// roundoff for every step of the scheme.
    pub residual: f64,
    /// Divergence norm of a tracked flux variable, when requested.
    pub divergence: Option<f64>,
}

impl StepDiagnostics {
    /// Attaches a divergence value to the record.
    pub fn with_divergence(mut self, value: f64) -> Self {
        self.divergence = Some(value);
        self
    }
}

/// Energy `1/2 x_l^T E_l x_l` of a hybrid state (multiplier rows carry no
/// energy).
pub fn hamiltonian(blocks: &SystemBlocks, state: &PhState) -> f64 {
    energy(blocks, &state.x_l)
}

/// Power balance of the step from `prev` to `next` under `inputs`,
/// sampled exactly as the stepper samples them (trapezoid average on the
/// essential channel, midpoint on the natural and source channels).
pub fn step_diagnostics(
    blocks: &SystemBlocks,
    prev: &PhState,
    next: &PhState,
    inputs: &Inputs,
) -> StepDiagnostics {
    let dt = next.time - prev.time;
    let t_mid = 0.5 * (prev.time + next.time);
    let x_mid = (&prev.x_l + &next.x_l) * 0.5;

    let u_ess = ((inputs.essential)(prev.time) + (inputs.essential)(next.time)) * 0.5;
    let u_nat = (inputs.natural)(t_mid);
    let y_ess = blocks.b_l.matvec_transpose(&x_mid);
    let y_nat = blocks.b_g.matvec_transpose(&next.x_g);
    let boundary_power = u_ess.dot(&y_ess) + u_nat.dot(&y_nat);
    let source_power = scatter_alpha(blocks, &(inputs.forcing)(t_mid)).dot(&x_mid);

    let h_prev = energy(blocks, &prev.x_l);
    let h_next = energy(blocks, &next.x_l);
    StepDiagnostics {
        time: next.time,
        hamiltonian: h_next,
        boundary_power,
        source_power,
        residual: (h_next - h_prev) / dt - boundary_power - source_power,
        divergence: None,
    }
}

// ---------------------------------------------------------------------------
// State block extraction
// ---------------------------------------------------------------------------

/// Stacked per-cell coefficients of one field from the interior state.
pub fn extract_field(blocks: &SystemBlocks, x_l: &DVector<f64>, which: Field) -> DVector<f64> {
    let layout = &blocks.layout;
    let n = match which {
        Field::Alpha => layout.n_alpha,
        Field::Beta => layout.n_beta,
    };
    let mut out = DVector::zeros(layout.cells * n);
    for c in 0..layout.cells {
        let rng = match which {
            Field::Alpha => layout.alpha_range(c),
            Field::Beta => layout.beta_range(c),
        };
        for (i, r) in rng.enumerate() {
            out[c * n + i] = x_l[r];
        }
    }
    out
}

/// Stacked per-cell multiplier coefficients from the interior state.
pub fn extract_multiplier(blocks: &SystemBlocks, x_l: &DVector<f64>) -> DVector<f64> {
    let layout = &blocks.layout;
    let mut out = DVector::zeros(layout.cells * layout.n_lambda);
    for c in 0..layout.cells {
        for (i, r) in layout.lambda_range(c).enumerate() {
            out[c * layout.n_lambda + i] = x_l[r];
        }
    }
    out
}

/// Copies global space coefficients into the stacked per-cell layout.
pub fn scatter_space(space: &FormSpace, coeffs: &DVector<f64>) -> DVector<f64> {
    let n = space.cell_dofs.first().map_or(0, Vec::len);
    let mut out = DVector::zeros(space.cell_dofs.len() * n);
    for (c, dofs) in space.cell_dofs.iter().enumerate() {
        for (i, &g) in dofs.iter().enumerate() {
            out[c * n + i] = coeffs[g];
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Facet traces and the boundary projection
// ---------------------------------------------------------------------------

/// One quadrature point on one face of one cell, with the geometric data a
/// facet evaluation needs.
pub struct FacetPoint<'a> {
    /// Cell index.
    pub cell: usize,
    /// Local face index within the cell.
    pub local_face: usize,
    /// Sign relating the canonical face normal to the outward normal.
    pub outward_sign: f64,
    /// Geometry of the face (canonical normal, area).
    pub face: &'a FaceGeometry,
    /// Geometry of the owning cell.
    pub cell_geom: &'a CellGeometry,
    /// Barycentric coordinates of the point with respect to the cell.
    pub cell_bary: [f64; 4],
    /// Physical coordinates of the point.
    pub point: Vector3<f64>,
}

fn trace_dofs(k: usize) -> usize {
    match k {
        0 | 2 => 4,
        1 => 6,
        _ => panic!("facet trace degree out of range 0..=2"),
    }
}

fn tangential(v: Vector3<f64>, n: &Vector3<f64>) -> Vector3<f64> {
    v - *n * v.dot(n)
}

/// Trace of the degree-`k` cell cochain with stacked per-cell coefficients
/// at a facet point: hat expansion for scalars, tangential part of the
/// edge expansion, or the face-constant flux density.
pub fn cochain_trace_data<'a>(
    k: usize,
    coeffs: &'a DVector<f64>,
) -> impl Fn(&FacetPoint) -> FieldValue + 'a {
    let n = trace_dofs(k);
    move |fp: &FacetPoint| {
        let local = coeffs.as_slice(); // full vector; index per cell below
        let base = fp.cell * n;
        match k {
            0 => FieldValue::Scalar((0..4).map(|i| local[base + i] * fp.cell_bary[i]).sum()),
            1 => {
                let w = fp.cell_geom.edge_basis(fp.cell_bary);
                let v: Vector3<f64> = (0..6).map(|i| w[i] * local[base + i]).sum();
                FieldValue::Vector(tangential(v, &fp.face.normal))
            }
            2 => FieldValue::Scalar(local[base + fp.local_face] / fp.face.area),
            _ => unreachable!(),
        }
    }
}

/// Facet datum of a volume field in the multiplier convention: outward
/// normal flux for degree 0, tangential part for degree 1, scalar value
/// for degree 2.
pub fn multiplier_trace_data<F>(k: usize, field: F) -> impl Fn(&FacetPoint) -> FieldValue
where
    F: Fn(Vector3<f64>) -> FieldValue,
{
    move |fp: &FacetPoint| match k {
        0 => FieldValue::Scalar(
            fp.outward_sign * field(fp.point).vector().dot(&fp.face.normal),
        ),
        1 => FieldValue::Vector(tangential(field(fp.point).vector(), &fp.face.normal)),
        2 => FieldValue::Scalar(field(fp.point).scalar()),
        _ => panic!("facet trace degree out of range 0..=2"),
    }
}

/// Facet datum of a volume field in the conforming-variable convention:
/// scalar value for degree 0, tangential part for degree 1, canonical
/// normal flux density for degree 2.
pub fn conforming_trace_data<F>(k: usize, field: F) -> impl Fn(&FacetPoint) -> FieldValue
where
    F: Fn(Vector3<f64>) -> FieldValue,
{
    move |fp: &FacetPoint| match k {
        0 => field(fp.point),
        1 => FieldValue::Vector(tangential(field(fp.point).vector(), &fp.face.normal)),
        2 => FieldValue::Scalar(field(fp.point).vector().dot(&fp.face.normal)),
        _ => panic!("facet trace degree out of range 0..=2"),
    }
}

fn face_geometries(mesh: &Mesh, c: usize) -> Result<[FaceGeometry; 4], Error> {
    let coords = mesh.cell_coords(c);
    let mut out = Vec::with_capacity(4);
    for fv in CELL_FACES {
        out.push(FaceGeometry::new([coords[fv[0]], coords[fv[1]], coords[fv[2]]])?);
    }
    Ok(out.try_into().map_err(|_| Error::Config("face geometry collection".into()))?)
}

/// Visits every boundary quadrature point of one cell, handing the facet
/// point and its quadrature weight (including the area scale) to `visit`.
fn for_each_facet_point<F>(
    mesh: &Mesh,
    cell: usize,
    geom: &CellGeometry,
    quad: &FaceQuadrature,
    mut visit: F,
) -> Result<(), Error>
where
    F: FnMut(&FacetPoint, f64),
{
    let signs = geom.outward_signs();
    let faces = face_geometries(mesh, cell)?;
    for lf in 0..4 {
        let fg = &faces[lf];
        let fv = CELL_FACES[lf];
        let scale = 2.0 * fg.area;
        for (pt, w) in quad.points.iter().zip(&quad.weights) {
            let lb = FaceGeometry::bary(*pt);
            let mut l = [0.0; 4];
            for (fi, &ci) in fv.iter().enumerate() {
                l[ci] = lb[fi];
            }
            let fp = FacetPoint {
                cell,
                local_face: lf,
                outward_sign: signs[lf],
                face: fg,
                cell_geom: geom,
                cell_bary: l,
                point: fg.point(lb),
            };
            visit(&fp, scale * w);
        }
    }
    Ok(())
}

/// L2 projection of a facet datum onto the per-cell boundary trace space
/// of degree `k`: for each cell, solves the boundary-mass system so the
/// projection error is orthogonal to every trace of the cell basis.
/// The result is unique because the trace map of the lowest-order cell
/// elements onto the whole cell boundary has no kernel.
pub fn facet_project<F>(k: usize, mesh: &Mesh, data: F) -> Result<DVector<f64>, Error>
where
    F: Fn(&FacetPoint) -> FieldValue,
{
    let n = trace_dofs(k);
    let quad = FaceQuadrature::triangle();
    let mut out = DVector::zeros(mesh.cells.len() * n);
    for c in 0..mesh.cells.len() {
        let geom = CellGeometry::new(mesh.cell_coords(c))?;
        let m = local_boundary_mass(k, &geom)?;
        let mut b = DVector::zeros(n);
        for_each_facet_point(mesh, c, &geom, &quad, |fp, w| {
            let value = data(fp);
            accumulate_trace_moments(k, fp, &value, w, &mut b);
        })?;
        let lu = m.full_piv_lu();
        let sol = lu
            .solve(&b)
            .ok_or_else(|| Error::Singular(format!("boundary mass of cell {c} is singular")))?;
        for i in 0..n {
            out[c * n + i] = sol[i];
        }
    }
    Ok(out)
}

/// Adds `w * <trace basis_i, value>` at one facet point to the moment
/// vector `b`.
fn accumulate_trace_moments(
    k: usize,
    fp: &FacetPoint,
    value: &FieldValue,
    w: f64,
    b: &mut DVector<f64>,
) {
    match (k, value) {
        (0, FieldValue::Scalar(s)) => {
            for i in 0..4 {
                b[i] += w * fp.cell_bary[i] * s;
            }
        }
        (1, FieldValue::Vector(v)) => {
            let basis = fp.cell_geom.edge_basis(fp.cell_bary);
            for i in 0..6 {
                b[i] += w * tangential(basis[i], &fp.face.normal).dot(v);
            }
        }
        (2, FieldValue::Scalar(s)) => {
            b[fp.local_face] += w * s / fp.face.area;
        }
        _ => panic!("facet datum kind does not match degree {k}"),
    }
}

/// Longest edge of a cell.
fn cell_diameter(coords: &[[f64; 3]; 4]) -> f64 {
    let mut d: f64 = 0.0;
    for i in 0..4 {
        for j in (i + 1)..4 {
            let mut s = 0.0;
            for a in 0..3 {
                let e = coords[i][a] - coords[j][a];
                s += e * e;
            }
            d = d.max(s.sqrt());
        }
    }
    d
}

/// Cell-diameter-scaled facet error of a stacked per-cell trace cochain
/// against a reference facet datum:
/// `sqrt(sum_T h_T sum_{f in dT} int_f |trace - reference|^2)`.
pub fn facet_error_norm<F>(
    k: usize,
    mesh: &Mesh,
    coeffs: &DVector<f64>,
    reference: F,
) -> Result<f64, Error>
where
    F: Fn(&FacetPoint) -> FieldValue + Sync,
{
    let eval = cochain_trace_data(k, coeffs);
    let quad = FaceQuadrature::triangle();
    let mut total = 0.0;
    for c in 0..mesh.cells.len() {
        let coords = mesh.cell_coords(c);
        let geom = CellGeometry::new(coords)?;
        let mut cell_sum = 0.0;
        for_each_facet_point(mesh, c, &geom, &quad, |fp, w| {
            let d = match (eval(fp), reference(fp)) {
                (FieldValue::Scalar(a), FieldValue::Scalar(b)) => (a - b) * (a - b),
                (FieldValue::Vector(a), FieldValue::Vector(b)) => (a - b).norm_squared(),
                _ => panic!("trace and reference kinds disagree"),
            };
            cell_sum += w * d;
        })?;
        total += cell_diameter(&coords) * cell_sum;
    }
    Ok(total.sqrt())
}

/// Scaled facet norm of a stacked per-cell trace cochain itself, computed
/// through the boundary mass matrices.
fn facet_coeff_norm(k: usize, mesh: &Mesh, coeffs: &DVector<f64>) -> Result<f64, Error> {
    let n = trace_dofs(k);
    let mut total = 0.0;
    for c in 0..mesh.cells.len() {
        let coords = mesh.cell_coords(c);
        let geom = CellGeometry::new(coords)?;
        let m = local_boundary_mass(k, &geom)?;
        let local = DVector::from_fn(n, |i, _| coeffs[c * n + i]);
        total += cell_diameter(&coords) * local.dot(&(&m * &local));
    }
    Ok(total.sqrt())
}

// ---------------------------------------------------------------------------
// Error norms
// ---------------------------------------------------------------------------

/// Discretization errors of one hybrid state against the exact fields of
/// its manufactured case.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorReport {
    /// Structured grid spacing of the mesh.
    pub h: f64,
    /// Polynomial order of the family.
    pub degree: usize,
    /// L2 error of the pressure-like field.
    pub alpha_l2: f64,
    /// L2 error of the flux-like field.
    pub beta_l2: f64,
    /// Graph norm error of the conforming variable (L2 plus the error of
    /// its exterior derivative).
    pub conforming_graph: f64,
    /// Graph norm error of the broken variable, with the exterior
    /// derivative taken cellwise; plain L2 for the top-degree density.
    pub broken_graph: f64,
    /// Scaled facet error of the conforming variable's trace.
    pub conforming_trace_facet: f64,
    /// Scaled facet error of the multiplier against the boundary
    /// projection of the exact trace datum.
    pub multiplier_facet: f64,
}

/// L2 error of a stacked per-cell cochain of degree `k` against a
/// reference field, by degree-5 quadrature; parallel over cells with a
/// deterministic reduction order.
fn volume_error(
    k: usize,
    mesh: &Mesh,
    coeffs: &DVector<f64>,
    reference: &(dyn Fn(Vector3<f64>) -> FieldValue + Sync),
) -> Result<f64, Error> {
    let n = ReferenceElement::new(k)?.cell_dofs();
    let quad = Quadrature::tetrahedron();
    let cells: Vec<f64> = (0..mesh.cells.len())
        .into_par_iter()
        .map(|c| -> Result<f64, Error> {
            let geom = CellGeometry::new(mesh.cell_coords(c))?;
            let local: Vec<f64> = (0..n).map(|i| coeffs[c * n + i]).collect();
            Ok(quad.integrate(&geom, |l| {
                let d = match (eval_local(k, &geom, l, &local), reference(geom.point(l))) {
                    (FieldValue::Scalar(a), FieldValue::Scalar(b)) => (a - b) * (a - b),
                    (FieldValue::Vector(a), FieldValue::Vector(b)) => (a - b).norm_squared(),
                    _ => panic!("cochain and reference kinds disagree"),
                };
                d
            }))
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(cells.iter().sum::<f64>().sqrt())
}

/// Applies the local exterior derivative to a stacked per-cell cochain,
/// returning the stacked per-cell cochain of degree `k + 1`.
fn derivative_cochain(k: usize, mesh: &Mesh, coeffs: &DVector<f64>) -> Result<DVector<f64>, Error> {
    let n = ReferenceElement::new(k)?.cell_dofs();
    let n_d = ReferenceElement::new(k + 1)?.cell_dofs();
    let mut out = DVector::zeros(mesh.cells.len() * n_d);
    for c in 0..mesh.cells.len() {
        let geom = CellGeometry::new(mesh.cell_coords(c))?;
        let d = local_derivative(k, &geom);
        let local = DVector::from_fn(n, |i, _| coeffs[c * n + i]);
        let dc = &d * &local;
        for i in 0..n_d {
            // Degree 2 -> 3 produces the integrated divergence; divide by
            // the volume to express it in the unit-density basis.
            out[c * n_d + i] = if k == 2 { dc[i] / geom.volume } else { dc[i] };
        }
    }
    Ok(out)
}

/// Full error report of a hybrid state at its own time stamp.
pub fn error_norms(
    case: &ManufacturedCase,
    blocks: &SystemBlocks,
    state: &PhState,
    mesh: &Mesh,
) -> Result<ErrorReport, Error> {
    let layout = &blocks.layout;
    let formulation = blocks.formulation;
    let t = state.time;
    let k_a = blocks.alpha_space.form_degree;
    let k_b = blocks.beta_space.form_degree;

    let alpha = extract_field(blocks, &state.x_l, Field::Alpha);
    let beta = extract_field(blocks, &state.x_l, Field::Beta);
    let lambda = extract_multiplier(blocks, &state.x_l);

    let alpha_ref = |x: Vector3<f64>| case.alpha_field(t, x);
    let beta_ref = |x: Vector3<f64>| case.beta_field(t, x);
    let alpha_l2 = volume_error(k_a, mesh, &alpha, &alpha_ref)?;
    let beta_l2 = volume_error(k_b, mesh, &beta, &beta_ref)?;

    // Conforming variable: graph norm and facet trace error.
    let (conf_coeffs, k_conf, conf_l2) = match formulation {
        Formulation::Primal => (&beta, k_b, beta_l2),
        Formulation::Dual => (&alpha, k_a, alpha_l2),
    };
    let d_coeffs = derivative_cochain(k_conf, mesh, conf_coeffs)?;
    let d_ref = |x: Vector3<f64>| case.conforming_derivative(formulation, t, x);
    let d_err = volume_error(k_conf + 1, mesh, &d_coeffs, &d_ref)?;
    let conforming_graph = (conf_l2 * conf_l2 + d_err * d_err).sqrt();

    let conf_field = |x: Vector3<f64>| case.conforming_field(formulation, t, x);
    let conforming_trace_facet = facet_error_norm(
        k_conf,
        mesh,
        conf_coeffs,
        conforming_trace_data(k_conf, conf_field),
    )?;

    // Broken variable: cellwise graph norm (plain L2 for the top degree,
    // which has no exterior derivative).
    let (broken_coeffs, k_broken, broken_l2) = match formulation {
        Formulation::Primal => (&alpha, k_a, alpha_l2),
        Formulation::Dual => (&beta, k_b, beta_l2),
    };
    let broken_graph = if k_broken == 3 {
        broken_l2
    } else {
        let d_broken = derivative_cochain(k_broken, mesh, broken_coeffs)?;
        let d_broken_ref = |x: Vector3<f64>| case.broken_derivative(formulation, t, x);
        let e = volume_error(k_broken + 1, mesh, &d_broken, &d_broken_ref)?;
        (broken_l2 * broken_l2 + e * e).sqrt()
    };

    // Multiplier: scaled facet distance to the boundary projection of the
    // exact trace datum.
    let k_tr = layout.trace_degree;
    let broken_field = |x: Vector3<f64>| case.broken_field(formulation, t, x);
    let lambda_ref = facet_project(k_tr, mesh, multiplier_trace_data(k_tr, broken_field))?;
    let multiplier_facet = facet_coeff_norm(k_tr, mesh, &(&lambda - &lambda_ref))?;

    Ok(ErrorReport {
        h: mesh.h,
        degree: 1,
        alpha_l2,
        beta_l2,
        conforming_graph,
        broken_graph,
        conforming_trace_facet,
        multiplier_facet,
    })
}

/// L2 distance between two stacked per-cell cochains of (possibly
/// different) degrees representing the same physical field.
pub fn field_difference_l2(
    mesh: &Mesh,
    k_a: usize,
    a: &DVector<f64>,
    k_b: usize,
    b: &DVector<f64>,
) -> Result<f64, Error> {
    let scalar_a = matches!(k_a, 0 | 3);
    let scalar_b = matches!(k_b, 0 | 3);
    if scalar_a != scalar_b {
        return Err(Error::Config(format!(
            "cannot compare a degree-{k_a} proxy with a degree-{k_b} proxy"
        )));
    }
    let n_a = ReferenceElement::new(k_a)?.cell_dofs();
    let n_b = ReferenceElement::new(k_b)?.cell_dofs();
    let quad = Quadrature::tetrahedron();
    let cells: Vec<f64> = (0..mesh.cells.len())
        .into_par_iter()
        .map(|c| -> Result<f64, Error> {
            let geom = CellGeometry::new(mesh.cell_coords(c))?;
            let la: Vec<f64> = (0..n_a).map(|i| a[c * n_a + i]).collect();
            let lb: Vec<f64> = (0..n_b).map(|i| b[c * n_b + i]).collect();
            Ok(quad.integrate(&geom, |l| {
                match (eval_local(k_a, &geom, l, &la), eval_local(k_b, &geom, l, &lb)) {
                    (FieldValue::Scalar(u), FieldValue::Scalar(v)) => (u - v) * (u - v),
                    (FieldValue::Vector(u), FieldValue::Vector(v)) => (u - v).norm_squared(),
                    _ => unreachable!(),
                }
            }))
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(cells.iter().sum::<f64>().sqrt())
}

// ---------------------------------------------------------------------------
// Divergence tracking
// ---------------------------------------------------------------------------

/// L2 norm of the discrete divergence of a flux cochain (degree-2 space,
/// broken or conforming): the incidence-applied net flux per cell,
/// measured in the volume-weighted constant basis.
pub fn divergence_norm(
    coeffs: &DVector<f64>,
    space: &FormSpace,
    mesh: &Mesh,
) -> Result<f64, Error> {
    if space.form_degree != 2 {
        return Err(Error::Config(format!(
            "divergence tracking needs a degree-2 space, got degree {}",
            space.form_degree
        )));
    }
    let mut total = 0.0;
    for (c, dofs) in space.cell_dofs.iter().enumerate() {
        let geom = CellGeometry::new(mesh.cell_coords(c))?;
        let signs = geom.outward_signs();
        let net: f64 = dofs.iter().enumerate().map(|(i, &g)| signs[i] * coeffs[g]).sum();
        // Constant value net/V over the cell: integral of its square is
        // net^2 / V.
        total += net * net / geom.volume;
    }
    Ok(total.sqrt())
}

// ---------------------------------------------------------------------------
// Rate fitting and size tables
// ---------------------------------------------------------------------------

/// Least-squares slope of `log(error)` against `log(h)`.
pub fn fit_rate(h: &[f64], err: &[f64]) -> Result<f64, Error> {
    if h.len() != err.len() || h.len() < 2 {
        return Err(Error::Config(
            "rate fitting needs at least two (h, error) pairs".into(),
        ));
    }
    if h.iter().chain(err.iter()).any(|&v| !(v > 0.0) || !v.is_finite()) {
        return Err(Error::Config(
            "rate fitting needs strictly positive finite values".into(),
        ));
    }
    let xs: Vec<f64> = h.iter().map(|v| v.ln()).collect();
    let ys: Vec<f64> = err.iter().map(|v| v.ln()).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    if sxx == 0.0 {
        return Err(Error::Config("rate fitting needs at least two distinct h".into()));
    }
    Ok(sxy / sxx)
}

/// One row of the system-size comparison: unknown counts of the mixed
/// solve and of the condensed skeleton solve on the full trace space.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DofRow {
    /// Cells per box edge.
    pub n: usize,
    /// Mixed system size: conforming space plus broken space.
    pub mixed: usize,
    /// Condensed system size: the skeleton trace space.
    pub hybrid: usize,
}

impl DofRow {
    /// Exact percentage `100 * hybrid / mixed`.
    pub fn ratio_percent(&self) -> f64 {
        100.0 * self.hybrid as f64 / self.mixed as f64
    }

    /// Percentage rounded to the nearest integer.
    pub fn ratio_rounded(&self) -> u32 {
        self.ratio_percent().round() as u32
    }
}

/// Size table of a family over a list of structured-box resolutions.
pub fn dof_table(
    problem: ProblemKind,
    formulation: Formulation,
    ns: &[usize],
) -> Result<Vec<DofRow>, Error> {
    let (k_alpha, k_beta) = crate::physystem::field_degrees(problem, formulation);
    let (k_broken, k_conf) = match formulation {
        Formulation::Primal => (k_alpha, k_beta),
        Formulation::Dual => (k_beta, k_alpha),
    };
    // The skeleton multiplier always lives in the trace space of the
    // conforming variable.
    let k_trace = k_conf;
    let n_broken = ReferenceElement::new(k_broken)?.cell_dofs();
    let mut rows = Vec::with_capacity(ns.len());
    for &n in ns {
        let mesh = build_structured_box(n)?;
        let mixed = mesh.entity_count(k_conf) + mesh.cells.len() * n_broken;
        let hybrid = mesh.entity_count(k_trace);
        rows.push(DofRow { n, mixed, hybrid });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{facet_adjacency, origin_planes, tag_boundary};
    use crate::physystem::{
        build_dual_hybrid, build_primal_hybrid, Materials,
    };
    use crate::problems::{
        constant_beta_case, exact_energy, hybrid_initial_state, hybrid_inputs, maxwell_case,
        member_case, project_initial, wave_case, Profile,
    };
    use crate::solver::{prepare, step};
    use approx::assert_abs_diff_eq;
    use std::sync::Arc;

    fn wave_dual_n(n: usize) -> (Arc<Mesh>, SystemBlocks) {
        let mesh = build_structured_box(n).unwrap();
        let adjacency = facet_adjacency(&mesh).unwrap();
        let partition = tag_boundary(&mesh, &adjacency, origin_planes);
        let sys = build_dual_hybrid(1, &mesh, &partition, &Materials::unit()).unwrap();
        (Arc::new(mesh), sys)
    }

    fn all_systems(n: usize) -> (Arc<Mesh>, Vec<SystemBlocks>) {
        let mesh = build_structured_box(n).unwrap();
        let adjacency = facet_adjacency(&mesh).unwrap();
        let partition = tag_boundary(&mesh, &adjacency, origin_planes);
        let systems = vec![
            build_primal_hybrid(3, &mesh, &partition, &Materials::unit()).unwrap(),
            build_primal_hybrid(2, &mesh, &partition, &Materials::unit()).unwrap(),
            build_dual_hybrid(1, &mesh, &partition, &Materials::unit()).unwrap(),
            build_dual_hybrid(2, &mesh, &partition, &Materials::unit()).unwrap(),
        ];
        (Arc::new(mesh), systems)
    }

    fn case_for(problem: ProblemKind) -> Arc<ManufacturedCase> {
        Arc::new(match problem {
            ProblemKind::Wave => wave_case(Profile::Eigenmode),
            ProblemKind::Maxwell => maxwell_case(Profile::Eigenmode),
        })
    }

    fn pseudo_random(seed: u64, len: usize) -> DVector<f64> {
        let mut s = seed.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(7);
        DVector::from_fn(len, |_, _| {
            s ^= s << 13;
            s ^= s >> 7;
            s ^= s << 17;
            (s >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        })
    }

    #[test]
    fn hamiltonian_is_the_state_energy() {
        let (mesh, sys) = wave_dual_n(2);
        let zero = PhState::zero(&sys);
        assert_eq!(hamiltonian(&sys, &zero), 0.0);

        let case = case_for(ProblemKind::Wave);
        let state = hybrid_initial_state(&case, &sys, &mesh, 0.0).unwrap();
        let h = hamiltonian(&sys, &state);
        assert!(h > 0.0);

        let doubled = PhState::new(&sys, &state.x_l * 2.0, &state.x_g * 2.0, 0.0, 0).unwrap();
        assert_abs_diff_eq!(hamiltonian(&sys, &doubled), 4.0 * h, epsilon = 1e-12 * h);

        // The discrete energy approximates the exact field energy.
        let exact = exact_energy(&case, &mesh, 0.0).unwrap();
        assert!((h - exact).abs() <= 0.3 * exact, "H = {h}, exact = {exact}");
    }

    #[test]
    fn power_residual_vanishes_without_inputs() {
        let (_mesh, systems) = all_systems(1);
        for sys in &systems {
            let layout = &sys.layout;
            let x0 = pseudo_random(11, layout.x_l_dim);
            let state = PhState::new(sys, x0, DVector::zeros(layout.x_g_dim), 0.0, 0).unwrap();
            let inputs = Inputs::zero(sys);
            let op = prepare(sys, 0.03).unwrap();
            let next = step(&op, sys, &state, &inputs).unwrap();
            let d = step_diagnostics(sys, &state, &next, &inputs);
            let scale = d.hamiltonian.abs().max(1.0);
            assert!(
                d.residual.abs() <= 1e-12 * scale,
                "{:?}/{:?}: residual {}",
                sys.problem,
                sys.formulation,
                d.residual
            );
            assert_eq!(d.boundary_power, 0.0);
            assert_eq!(d.source_power, 0.0);
        }
    }

    #[test]
    fn driven_runs_balance_power_every_step() {
        let (mesh, systems) = all_systems(1);
        for sys in &systems {
            let case = case_for(sys.problem);
            let inputs = hybrid_inputs(&case, sys, &mesh);
            let mut state = hybrid_initial_state(&case, sys, &mesh, 0.0).unwrap();
            let op = prepare(sys, 0.02).unwrap();
            for _ in 0..20 {
                let next = step(&op, sys, &state, &inputs).unwrap();
                let d = step_diagnostics(sys, &state, &next, &inputs);
                let scale = d
                    .hamiltonian
                    .abs()
                    .max(d.boundary_power.abs())
                    .max(1.0);
                assert!(
                    d.residual.abs() <= 1e-10 * scale,
                    "{:?}/{:?}: residual {} at t = {}",
                    sys.problem,
                    sys.formulation,
                    d.residual,
                    d.time
                );
                state = next;
            }
        }
    }

    #[test]
    fn boundary_power_scales_with_the_inputs() {
        let (mesh, systems) = all_systems(1);
        let sys = &systems[2];
        let case = case_for(sys.problem);
        let base = hybrid_inputs(&case, sys, &mesh);
        let case2 = case.clone();
        let mesh2 = mesh.clone();
        let doubled = {
            let i = hybrid_inputs(&case2, sys, &mesh2);
            Inputs {
                essential: Box::new(move |t| (i.essential)(t) * 2.0),
                natural: {
                    let j = hybrid_inputs(&case2, sys, &mesh2);
                    Box::new(move |t| (j.natural)(t) * 2.0)
                },
                forcing: {
                    let k = hybrid_inputs(&case2, sys, &mesh2);
                    Box::new(move |t| (k.forcing)(t) * 2.0)
                },
            }
        };
        let zero = PhState::zero(sys);
        let op = prepare(sys, 0.05).unwrap();
        let s1 = step(&op, sys, &zero, &base).unwrap();
        let s2 = step(&op, sys, &zero, &doubled).unwrap();
        // The solve map is linear in the inputs from a zero state.
        let scale = s1.x_l.amax().max(1e-12);
        assert!((&s2.x_l - &s1.x_l * 2.0).amax() <= 1e-12 * scale);
        // Hence each power pairing (input times output) quadruples.
        let d1 = step_diagnostics(sys, &zero, &s1, &base);
        let d2 = step_diagnostics(sys, &zero, &s2, &doubled);
        assert_abs_diff_eq!(
            d2.boundary_power,
            4.0 * d1.boundary_power,
            epsilon = 1e-10 * d1.boundary_power.abs().max(1.0)
        );
    }

    #[test]
    fn facet_projection_is_exact_and_idempotent() {
        let mesh = build_structured_box(1).unwrap();

        // Constant tangential datum (degree 1) lies in the trace space:
        // the projection returns its canonical circulations.
        let datum = Vector3::new(0.4, -0.9, 0.35);
        let p1 = facet_project(1, &mesh, multiplier_trace_data(1, |_| {
            FieldValue::Vector(datum)
        }))
        .unwrap();
        for c in 0..mesh.cells.len() {
            for (i, &e) in mesh.cell_edges[c].iter().enumerate() {
                let [a, b] = mesh.edges[e];
                let d = Vector3::from(mesh.vertices[b]) - Vector3::from(mesh.vertices[a]);
                assert_abs_diff_eq!(p1[c * 6 + i], datum.dot(&d), epsilon = 1e-13);
            }
        }

        // Degree 2: the projection of a smooth scalar is the face average
        // times the area, i.e. the face integral.
        let case = wave_case(Profile::Eigenmode);
        let t = 0.3;
        let p2 = facet_project(2, &mesh, multiplier_trace_data(2, |x| case.alpha_field(t, x)))
            .unwrap();
        let fq = FaceQuadrature::triangle();
        for c in 0..mesh.cells.len() {
            let coords = mesh.cell_coords(c);
            for lf in 0..4 {
                let fv = CELL_FACES[lf];
                let fg =
                    FaceGeometry::new([coords[fv[0]], coords[fv[1]], coords[fv[2]]]).unwrap();
                let expected = fq.integrate(&fg, |l| case.alpha_field(t, fg.point(l)).scalar());
                assert_abs_diff_eq!(p2[c * 4 + lf], expected, epsilon = 1e-12);
            }
        }

        // Idempotence and orthogonality for every degree, with smooth
        // non-member data (a non-capturing closure, so it can be reused).
        let vec_data = |x: Vector3<f64>| {
            FieldValue::Vector(Vector3::new(
                (1.3 * x.x).sin() * (0.7 + x.y),
                x.z * x.x - 0.4,
                (2.0 * x.y).cos(),
            ))
        };
        for k in [0usize, 1, 2] {
            let coeffs = match k {
                0 => facet_project(0, &mesh, multiplier_trace_data(0, vec_data)).unwrap(),
                1 => facet_project(1, &mesh, multiplier_trace_data(1, vec_data)).unwrap(),
                _ => p2.clone(),
            };
            let again = facet_project(k, &mesh, cochain_trace_data(k, &coeffs)).unwrap();
            let scale = coeffs.amax().max(1.0);
            assert!(
                (&again - &coeffs).amax() <= 1e-12 * scale,
                "degree {k} projection is not idempotent"
            );
        }

        // Orthogonality: the moments of the residual datum vanish.
        let coeffs = facet_project(0, &mesh, multiplier_trace_data(0, vec_data)).unwrap();
        let eval = cochain_trace_data(0, &coeffs);
        let quad = FaceQuadrature::triangle();
        let reference = multiplier_trace_data(0, vec_data);
        for c in 0..mesh.cells.len() {
            let geom = CellGeometry::new(mesh.cell_coords(c)).unwrap();
            let mut b = DVector::zeros(4);
            for_each_facet_point(&mesh, c, &geom, &quad, |fp, w| {
                let r = reference(fp).scalar() - eval(fp).scalar();
                accumulate_trace_moments(0, fp, &FieldValue::Scalar(r), w, &mut b);
            })
            .unwrap();
            assert!(b.amax() <= 1e-12, "cell {c}: residual moments {b}");
        }
    }

    #[test]
    fn member_fields_report_zero_errors() {
        let (mesh, sys) = wave_dual_n(2);
        let case = member_case();
        let state = hybrid_initial_state(&case, &sys, &mesh, 0.0).unwrap();
        let report = error_norms(&case, &sys, &state, &mesh).unwrap();
        assert!(report.alpha_l2 <= 1e-11, "alpha {}", report.alpha_l2);
        assert!(report.beta_l2 <= 1e-11, "beta {}", report.beta_l2);
        assert!(report.conforming_graph <= 1e-11, "graph {}", report.conforming_graph);
        // The member velocity has the constant curl 2b, reproduced
        // exactly by the cellwise derivative.
        assert!(report.broken_graph <= 1e-11, "broken graph {}", report.broken_graph);
        assert!(
            report.conforming_trace_facet <= 1e-11,
            "trace {}",
            report.conforming_trace_facet
        );
        assert!(
            report.multiplier_facet <= 1e-11,
            "multiplier {}",
            report.multiplier_facet
        );
    }

    #[test]
    fn quadratic_refinement_shrinks_the_errors() {
        let case = Arc::new(crate::problems::wave_case(Profile::Quadratic));
        let mut reports = Vec::new();
        for n in [2usize, 4] {
            let (mesh, sys) = wave_dual_n(n);
            let inputs = hybrid_inputs(&case, &sys, &mesh);
            let mut state = hybrid_initial_state(&case, &sys, &mesh, 0.0).unwrap();
            let op = prepare(&sys, 0.02).unwrap();
            for _ in 0..10 {
                state = step(&op, &sys, &state, &inputs).unwrap();
            }
            reports.push(error_norms(&case, &sys, &state, &mesh).unwrap());
        }
        let ratio = reports[0].conforming_graph / reports[1].conforming_graph;
        assert!(
            ratio >= 1.8,
            "graph errors {} / {} give ratio {ratio}",
            reports[0].conforming_graph,
            reports[1].conforming_graph
        );
        assert!(reports[1].multiplier_facet < reports[0].multiplier_facet);
        assert!(reports[1].conforming_trace_facet < reports[0].conforming_trace_facet);
        assert!(reports[1].alpha_l2 < reports[0].alpha_l2);
        assert!(reports[1].beta_l2 < reports[0].beta_l2);
        assert!(reports[1].broken_graph < reports[0].broken_graph);
    }

    #[test]
    fn divergence_norm_detects_exact_complexes() {
        let mesh = build_structured_box(2).unwrap();
        let rt = FormSpace::broken(2, &mesh).unwrap();

        let zero = DVector::zeros(rt.dim);
        assert_eq!(divergence_norm(&zero, &rt, &mesh).unwrap(), 0.0);

        // The discrete curl of any tangential cochain is exactly
        // divergence-free.
        let edges = pseudo_random(3, mesh.cells.len() * 6);
        let fluxes = derivative_cochain(1, &mesh, &edges).unwrap();
        let div = divergence_norm(&fluxes, &rt, &mesh).unwrap();
        assert!(div <= 1e-13 * fluxes.amax().max(1.0), "div {div}");

        // A generic cochain is not divergence-free.
        let generic = pseudo_random(5, rt.dim);
        assert!(divergence_norm(&generic, &rt, &mesh).unwrap() > 1e-3);

        let wrong = FormSpace::broken(1, &mesh).unwrap();
        assert!(divergence_norm(&zero, &wrong, &mesh).is_err());
    }

    #[test]
    fn maxwell_divergence_is_stationary_during_integration() {
        let (mesh, systems) = all_systems(1);
        let sys = &systems[1]; // Maxwell primal: flux-type electric field
        let case = case_for(ProblemKind::Maxwell);
        let inputs = hybrid_inputs(&case, sys, &mesh);
        let mut state = hybrid_initial_state(&case, sys, &mesh, 0.0).unwrap();
        let op = prepare(sys, 0.02).unwrap();
        let d0 = divergence_norm(
            &extract_field(sys, &state.x_l, Field::Alpha),
            &sys.alpha_space,
            &mesh,
        )
        .unwrap();
        assert!(d0 > 0.0, "the projected mode should carry discrete divergence");
        for _ in 0..20 {
            state = step(&op, sys, &state, &inputs).unwrap();
            let d = divergence_norm(
                &extract_field(sys, &state.x_l, Field::Alpha),
                &sys.alpha_space,
                &mesh,
            )
            .unwrap();
            assert!(
                (d - d0).abs() <= 1e-10 * d0.max(1.0),
                "divergence drifted from {d0} to {d}"
            );
        }
    }

    #[test]
    fn field_difference_vanishes_for_identical_members() {
        let mesh = build_structured_box(2).unwrap();
        let datum = Vector3::new(0.3, -0.7, 0.45);
        let const_case = constant_beta_case(datum);
        let n1 = FormSpace::broken(1, &mesh).unwrap();
        let rt = FormSpace::broken(2, &mesh).unwrap();
        let a = project_initial(&const_case, Field::Beta, &n1, &mesh, 0.0).unwrap();
        let b = project_initial(&const_case, Field::Beta, &rt, &mesh, 0.0).unwrap();
        let d = field_difference_l2(&mesh, 1, &a, 2, &b).unwrap();
        assert!(d <= 1e-12, "difference {d}");
        assert!(field_difference_l2(&mesh, 0, &DVector::zeros(mesh.cells.len() * 4), 2, &b).is_err());
    }

    #[test]
    fn fit_rate_recovers_slopes() {
        let h = [0.5, 0.25, 0.125];
        let first: Vec<f64> = h.to_vec();
        let second: Vec<f64> = h.iter().map(|v| v * v).collect();
        let flat = [3.0, 3.0, 3.0];
        assert_abs_diff_eq!(fit_rate(&h, &first).unwrap(), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(fit_rate(&h, &second).unwrap(), 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(fit_rate(&h, &flat).unwrap(), 0.0, epsilon = 1e-12);
        assert!(fit_rate(&h, &[1.0, -1.0, 1.0]).is_err());
        assert!(fit_rate(&[0.5], &[1.0]).is_err());
    }

    #[test]
    fn dof_tables_match_reference_counts() {
        let wave_primal = dof_table(ProblemKind::Wave, Formulation::Primal, &[1, 2]).unwrap();
        assert_eq!(wave_primal[0], DofRow { n: 1, mixed: 24, hybrid: 18 });
        assert_eq!(wave_primal[0].ratio_rounded(), 75);
        assert_eq!(wave_primal[1], DofRow { n: 2, mixed: 168, hybrid: 120 });
        assert_eq!(wave_primal[1].ratio_rounded(), 71);

        let wave_dual = dof_table(ProblemKind::Wave, Formulation::Dual, &[1]).unwrap();
        assert_eq!(wave_dual[0], DofRow { n: 1, mixed: 44, hybrid: 8 });
        assert_eq!(wave_dual[0].ratio_rounded(), 18);

        // Both Maxwell representations share one table.
        for f in [Formulation::Primal, Formulation::Dual] {
            let rows = dof_table(ProblemKind::Maxwell, f, &[1, 2]).unwrap();
            assert_eq!(rows[0], DofRow { n: 1, mixed: 43, hybrid: 19 });
            assert_eq!(rows[0].ratio_rounded(), 44);
            assert_eq!(rows[1], DofRow { n: 2, mixed: 290, hybrid: 98 });
            // 98/290 recomputes to 34 percent.
            assert_eq!(rows[1].ratio_rounded(), 34);
        }
    }

    #[test]
    fn diagnostics_leave_the_trajectory_untouched() {
        let (mesh, sys) = wave_dual_n(1);
        let case = case_for(ProblemKind::Wave);
        let inputs = hybrid_inputs(&case, &sys, &mesh);
        let op = prepare(&sys, 0.03).unwrap();

        let run = |observe: bool| {
            let mut state = hybrid_initial_state(&case, &sys, &mesh, 0.0).unwrap();
            for _ in 0..5 {
                let next = step(&op, &sys, &state, &inputs).unwrap();
                if observe {
                    let d = step_diagnostics(&sys, &state, &next, &inputs);
                    let _ = d.with_divergence(0.0);
                    let _ = error_norms(&case, &sys, &next, &mesh).unwrap();
                    let _ = hamiltonian(&sys, &next);
                }
                state = next;
            }
            state
        };
        let silent = run(false);
        let observed = run(true);
        assert_eq!(silent.x_l, observed.x_l);
        assert_eq!(silent.x_g, observed.x_g);
    }
}
