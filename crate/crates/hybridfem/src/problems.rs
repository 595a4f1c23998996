//! Manufactured wave and Maxwell cases on the unit cube, L2 projection of
//! their fields, boundary-data interpolation, and the input plumbing that
//! connects them to the time steppers.
//!
//! Both families are driven by a separable exact solution `g(x) f(t)`:
//!
//! * wave: `g = sin x sin y sin z`, pressure `p = g f'`, flux
//!   `sigma = -grad g f`; the pressure equation `c^-2 dp/dt = -div sigma`
//!   picks up the forcing `xi = c^-2 g f'' - (lap g) f`, which vanishes for
//!   the eigenmode profile at `c = 1` because `lap g = -3 g` and
//!   `f'' = -3 f`.
//! * Maxwell: `g = (-cos x sin y sin z, 0, sin x sin y cos z)` with
//!   `div g = 0` and `curl curl g = 3 g`; electric field `E = g f'`,
//!   magnetic field `H = -(curl g) f / mu`; the electric equation
//!   `eps dE/dt = curl H + j` picks up `j = eps g f'' + 3 g f / mu`
//!   (`j` enters with a plus sign in this convention, so the physically
//!   injected current is its negative), zero for the eigenmode at
//!   `eps = mu = 1`.
//!
//! The `alpha` field is always the pressure-like one (`p` or `E`) and the
//! `beta` field the flux-like one (`sigma` or `H`); the two representations
//! differ only in the form degrees they assign. Consequently the essential
//! boundary data always interpolates the conforming variable's field and
//! the natural data and multiplier data the broken variable's field.
//!
//! The time profiles are the eigenmode `f = sin(sqrt(3) t) + cos(sqrt(3) t)`
//! (conservation and equivalence studies; requires unit materials so the
//! spatial factor is an eigenfunction of the governing operator) and the
//! quadratic `f = t^2 / 2` (convergence studies; all initial data vanish,
//! and a small step keeps the midpoint rule's O(dt^2) error far below the
//! spatial error being measured).

use std::sync::Arc;

use nalgebra::{DVector, Vector3};

use faer::prelude::SpSolver;
use faer::sparse::SparseColMat;

use crate::assembly::FormSpace;
use crate::elements::{
    local_mass, CellGeometry, FaceGeometry, FaceQuadrature, Quadrature, ReferenceElement,
};
use crate::mesh::{Mesh, CELL_FACES};
use crate::physystem::{
    coupling_factor, field_degrees, Formulation, Materials, MixedSystem, ProblemKind,
    SystemBlocks,
};
use crate::solver::{Inputs, MixedInputs, MixedState, PhState};
use crate::Error;

/// Time profile of a manufactured case.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Profile {
    /// `f = sin(sqrt(3) t) + cos(sqrt(3) t)`: forcing-free standing mode.
    Eigenmode,
    /// `f = t^2 / 2`: zero initial data, forced. Refinement studies use it
    /// with a time step small enough that the midpoint rule's O(dt^2) error
    /// stays far below the spatial error.
    Quadratic,
}

/// Value of a proxy field at a point: scalar for degrees 0 and 3, vector
/// for degrees 1 and 2.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FieldValue {
    /// Scalar proxy value.
    Scalar(f64),
    /// Vector proxy value.
    Vector(Vector3<f64>),
}

impl FieldValue {
    /// The scalar value; panics when the field is vector-valued.
    pub fn scalar(self) -> f64 {
        match self {
            FieldValue::Scalar(s) => s,
            FieldValue::Vector(_) => panic!("expected a scalar field value"),
        }
    }

    /// The vector value; panics when the field is scalar-valued.
    pub fn vector(self) -> Vector3<f64> {
        match self {
            FieldValue::Scalar(_) => panic!("expected a vector field value"),
            FieldValue::Vector(v) => v,
        }
    }

    fn squared(self) -> f64 {
        match self {
            FieldValue::Scalar(s) => s * s,
            FieldValue::Vector(v) => v.norm_squared(),
        }
    }
}

type FieldFn = Box<dyn Fn(f64, Vector3<f64>) -> FieldValue + Send + Sync>;

/// A closed-form exact solution with its forcing and material constants.
pub struct ManufacturedCase {
    /// Physical family.
    pub problem: ProblemKind,
    /// Time profile.
    pub profile: Profile,
    /// Material weights consistent with the fields.
    pub materials: Materials,
    alpha: FieldFn,
    beta: FieldFn,
    forcing: FieldFn,
    d_conf_primal: FieldFn,
    d_conf_dual: FieldFn,
    d_broken_primal: FieldFn,
    d_broken_dual: FieldFn,
}

impl ManufacturedCase {
    /// Pressure-like exact field (`p` or `E`) at `(t, x)`.
    pub fn alpha_field(&self, t: f64, x: Vector3<f64>) -> FieldValue {
        (self.alpha)(t, x)
    }

    /// Flux-like exact field (`sigma` or `H`) at `(t, x)`.
    pub fn beta_field(&self, t: f64, x: Vector3<f64>) -> FieldValue {
        (self.beta)(t, x)
    }

    /// Source term as it appears on the right side of the first balance
    /// law (`xi` in the pressure equation, `j` in the electric equation).
    pub fn forcing_field(&self, t: f64, x: Vector3<f64>) -> FieldValue {
        (self.forcing)(t, x)
    }

    /// Field of the conforming variable of the given representation
    /// (`beta` for primal, `alpha` for dual).
    pub fn conforming_field(&self, formulation: Formulation, t: f64, x: Vector3<f64>) -> FieldValue {
        match formulation {
            Formulation::Primal => self.beta_field(t, x),
            Formulation::Dual => self.alpha_field(t, x),
        }
    }

    /// Field of the broken variable of the given representation
    /// (`alpha` for primal, `beta` for dual). This is also the field whose
    /// trace the multiplier and the natural data represent.
    pub fn broken_field(&self, formulation: Formulation, t: f64, x: Vector3<f64>) -> FieldValue {
        match formulation {
            Formulation::Primal => self.alpha_field(t, x),
            Formulation::Dual => self.beta_field(t, x),
        }
    }

    /// Exterior-derivative proxy of the conforming variable's exact field:
    /// the divergence of the flux (primal wave), the curl of the magnetic
    /// or electric field (Maxwell), or the gradient of the pressure (dual
    /// wave). Graph-norm error measures compare the discrete derivative
    /// against this.
    pub fn conforming_derivative(
        &self,
        formulation: Formulation,
        t: f64,
        x: Vector3<f64>,
    ) -> FieldValue {
        match formulation {
            Formulation::Primal => (self.d_conf_primal)(t, x),
            Formulation::Dual => (self.d_conf_dual)(t, x),
        }
    }

    /// Exterior-derivative proxy of the broken variable's exact field,
    /// taken cellwise: the divergence of a flux-type (degree-2) field or
    /// the curl of a circulation-type (degree-1) field. Not meaningful
    /// for the top-degree wave density, whose graph norm is plain L2.
    pub fn broken_derivative(
        &self,
        formulation: Formulation,
        t: f64,
        x: Vector3<f64>,
    ) -> FieldValue {
        match formulation {
            Formulation::Primal => (self.d_broken_primal)(t, x),
            Formulation::Dual => (self.d_broken_dual)(t, x),
        }
    }
}

fn profile_fns(profile: Profile) -> (fn(f64) -> f64, fn(f64) -> f64, fn(f64) -> f64) {
    fn eig(t: f64) -> f64 {
        let w = 3f64.sqrt();
        (w * t).sin() + (w * t).cos()
    }
    fn eig_d(t: f64) -> f64 {
        let w = 3f64.sqrt();
        w * ((w * t).cos() - (w * t).sin())
    }
    fn eig_dd(t: f64) -> f64 {
        -3.0 * eig(t)
    }
    fn quad(t: f64) -> f64 {
        0.5 * t * t
    }
    fn quad_d(t: f64) -> f64 {
        t
    }
    fn quad_dd(_t: f64) -> f64 {
        1.0
    }
    match profile {
        Profile::Eigenmode => (eig, eig_d, eig_dd),
        Profile::Quadratic => (quad, quad_d, quad_dd),
    }
}

fn wave_g(x: Vector3<f64>) -> f64 {
    x.x.sin() * x.y.sin() * x.z.sin()
}

fn wave_grad_g(x: Vector3<f64>) -> Vector3<f64> {
    Vector3::new(
        x.x.cos() * x.y.sin() * x.z.sin(),
        x.x.sin() * x.y.cos() * x.z.sin(),
        x.x.sin() * x.y.sin() * x.z.cos(),
    )
}

fn maxwell_g(x: Vector3<f64>) -> Vector3<f64> {
    Vector3::new(
        -x.x.cos() * x.y.sin() * x.z.sin(),
        0.0,
        x.x.sin() * x.y.sin() * x.z.cos(),
    )
}

fn maxwell_curl_g(x: Vector3<f64>) -> Vector3<f64> {
    Vector3::new(
        x.x.sin() * x.y.cos() * x.z.cos(),
        -2.0 * x.x.cos() * x.y.sin() * x.z.cos(),
        x.x.cos() * x.y.cos() * x.z.sin(),
    )
}

/// Acoustic manufactured case with unit wave speed.
pub fn wave_case(profile: Profile) -> ManufacturedCase {
    wave_case_with_speed(profile, 1.0).expect("unit speed is always valid")
}

/// Acoustic manufactured case with wave speed `c`. The eigenmode profile
/// is forcing-free only for `c = 1` and rejects other speeds; the
/// quadratic profile supports any positive speed through its forcing.
pub fn wave_case_with_speed(profile: Profile, c: f64) -> Result<ManufacturedCase, Error> {
    if !(c > 0.0 && c.is_finite()) {
        return Err(Error::Config(format!("wave speed must be positive, got {c}")));
    }
    if profile == Profile::Eigenmode && c != 1.0 {
        return Err(Error::Config(
            "the eigenmode profile requires unit wave speed (the spatial mode is an \
             eigenfunction only of the unweighted operator)"
                .into(),
        ));
    }
    let (f, fd, fdd) = profile_fns(profile);
    let inv_c2 = 1.0 / (c * c);
    Ok(ManufacturedCase {
        problem: ProblemKind::Wave,
        profile,
        materials: Materials::acoustic(c),
        alpha: Box::new(move |t, x| FieldValue::Scalar(wave_g(x) * fd(t))),
        beta: Box::new(move |t, x| FieldValue::Vector(-wave_grad_g(x) * f(t))),
        // xi = c^-2 g f'' - (lap g) f with lap g = -3 g.
        forcing: Box::new(move |t, x| {
            FieldValue::Scalar(wave_g(x) * (inv_c2 * fdd(t) + 3.0 * f(t)))
        }),
        // div sigma = -(lap g) f = 3 g f; grad p = (grad g) f'.
        d_conf_primal: Box::new(move |t, x| FieldValue::Scalar(3.0 * wave_g(x) * f(t))),
        d_conf_dual: Box::new(move |t, x| FieldValue::Vector(wave_grad_g(x) * fd(t))),
        // The density is a top form (no derivative); the velocity is a
        // gradient, so its curl vanishes.
        d_broken_primal: Box::new(|_, _| FieldValue::Scalar(0.0)),
        d_broken_dual: Box::new(|_, _| FieldValue::Vector(Vector3::zeros())),
    })
}

/// Electromagnetic manufactured case with unit material constants.
pub fn maxwell_case(profile: Profile) -> ManufacturedCase {
    maxwell_case_with(profile, 1.0, 1.0).expect("unit materials are always valid")
}

/// Electromagnetic manufactured case with permittivity `eps` and
/// permeability `mu`. The eigenmode profile requires unit materials; the
/// quadratic profile supports any positive constants through its forcing.
pub fn maxwell_case_with(profile: Profile, eps: f64, mu: f64) -> Result<ManufacturedCase, Error> {
    if !(eps > 0.0 && mu > 0.0 && eps.is_finite() && mu.is_finite()) {
        return Err(Error::Config(format!(
            "material constants must be positive, got eps = {eps}, mu = {mu}"
        )));
    }
    if profile == Profile::Eigenmode && (eps != 1.0 || mu != 1.0) {
        return Err(Error::Config(
            "the eigenmode profile requires unit material constants".into(),
        ));
    }
    let (f, fd, fdd) = profile_fns(profile);
    let inv_mu = 1.0 / mu;
    Ok(ManufacturedCase {
        problem: ProblemKind::Maxwell,
        profile,
        materials: Materials::electromagnetic(eps, mu),
        alpha: Box::new(move |t, x| FieldValue::Vector(maxwell_g(x) * fd(t))),
        beta: Box::new(move |t, x| FieldValue::Vector(-maxwell_curl_g(x) * (f(t) * inv_mu))),
        // j = eps g f'' + (curl curl g) f / mu with curl curl g = 3 g.
        forcing: Box::new(move |t, x| {
            FieldValue::Vector(maxwell_g(x) * (eps * fdd(t) + 3.0 * f(t) * inv_mu))
        }),
        // curl H = -(curl curl g) f / mu = -3 g f / mu; curl E = (curl g) f'.
        d_conf_primal: Box::new(move |t, x| {
            FieldValue::Vector(maxwell_g(x) * (-3.0 * f(t) * inv_mu))
        }),
        d_conf_dual: Box::new(move |t, x| FieldValue::Vector(maxwell_curl_g(x) * fd(t))),
        // Both electromagnetic fields are divergence-free: div g = 0 and
        // div curl g = 0.
        d_broken_primal: Box::new(|_, _| FieldValue::Scalar(0.0)),
        d_broken_dual: Box::new(|_, _| FieldValue::Scalar(0.0)),
    })
}

/// Synthetic time-independent fields lying in the lowest-order spaces
/// (linear scalar, constant-plus-rotation vector): projections and trace
/// interpolations reproduce them exactly, which exactness tests exploit.
/// The fields do not satisfy any balance law; the derivative closures are
/// consistent with the fields themselves.
#[cfg(test)]
pub(crate) fn member_case() -> ManufacturedCase {
    let a = Vector3::new(0.3, -0.7, 0.45);
    let b = Vector3::new(-0.2, 0.55, 0.8);
    ManufacturedCase {
        problem: ProblemKind::Wave,
        profile: Profile::Eigenmode,
        materials: Materials::unit(),
        alpha: Box::new(move |_, x| FieldValue::Scalar(0.25 + a.dot(&x))),
        beta: Box::new(move |_, x| FieldValue::Vector(a + b.cross(&x))),
        forcing: Box::new(|_, _| FieldValue::Scalar(0.0)),
        // div(a + b x x) = 0; grad(0.25 + a . x) = a; curl(a + b x x) = 2b.
        d_conf_primal: Box::new(|_, _| FieldValue::Scalar(0.0)),
        d_conf_dual: Box::new(move |_, _| FieldValue::Vector(a)),
        d_broken_primal: Box::new(|_, _| FieldValue::Scalar(0.0)),
        d_broken_dual: Box::new(move |_, _| FieldValue::Vector(2.0 * b)),
    }
}

/// Variant of [`member_case`] whose flux field is the constant `v`:
/// exactly representable in every broken vector space, which projection
/// cross-checks exploit.
#[cfg(test)]
pub(crate) fn constant_beta_case(v: Vector3<f64>) -> ManufacturedCase {
    ManufacturedCase {
        beta: Box::new(move |_, _| FieldValue::Vector(v)),
        d_conf_primal: Box::new(|_, _| FieldValue::Scalar(0.0)),
        d_broken_dual: Box::new(|_, _| FieldValue::Vector(Vector3::zeros())),
        ..member_case()
    }
}

/// Which of the two fields of a case an operation refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Field {
    /// Pressure-like field `p` / `E`.
    Alpha,
    /// Flux-like field `sigma` / `H`.
    Beta,
}

impl ManufacturedCase {
    fn field(&self, which: Field, t: f64, x: Vector3<f64>) -> FieldValue {
        match which {
            Field::Alpha => self.alpha_field(t, x),
            Field::Beta => self.beta_field(t, x),
        }
    }
}

// ---------------------------------------------------------------------------
// Discrete field evaluation
// ---------------------------------------------------------------------------

/// Value of the local basis expansion of form degree `k` with coefficients
/// `coeffs` at barycentric point `l` of the cell.
pub fn eval_local(k: usize, geom: &CellGeometry, l: [f64; 4], coeffs: &[f64]) -> FieldValue {
    match k {
        0 => FieldValue::Scalar((0..4).map(|i| coeffs[i] * l[i]).sum()),
        1 => {
            let w = geom.edge_basis(l);
            FieldValue::Vector((0..6).map(|i| w[i] * coeffs[i]).sum())
        }
        2 => {
            let w = geom.face_basis(l);
            FieldValue::Vector((0..4).map(|i| w[i] * coeffs[i]).sum())
        }
        3 => FieldValue::Scalar(coeffs[0]),
        _ => panic!("form degree out of range"),
    }
}

/// Pairings of the local basis functions of degree `k` with a field value
/// at barycentric point `l`: the integrand rows of load vectors and
/// forcing moments.
fn dof_pairings(k: usize, geom: &CellGeometry, l: [f64; 4], value: FieldValue) -> Vec<f64> {
    match (k, value) {
        (0, FieldValue::Scalar(s)) => (0..4).map(|i| l[i] * s).collect(),
        (3, FieldValue::Scalar(s)) => vec![s],
        (1, FieldValue::Vector(v)) => geom.edge_basis(l).iter().map(|w| w.dot(&v)).collect(),
        (2, FieldValue::Vector(v)) => geom.face_basis(l).iter().map(|w| w.dot(&v)).collect(),
        _ => panic!("field value kind does not match form degree {k}"),
    }
}

fn sparse_solve(
    dim: usize,
    trips: &[(usize, usize, f64)],
    rhs: &DVector<f64>,
) -> Result<DVector<f64>, Error> {
    let m = SparseColMat::<usize, f64>::try_new_from_triplets(dim, dim, trips)
        .map_err(|e| Error::Singular(format!("mass assembly failed: {e:?}")))?;
    let lu = m
        .sp_lu()
        .map_err(|e| Error::Singular(format!("mass matrix is singular: {e:?}")))?;
    let b = faer::Mat::from_fn(dim, 1, |i, _| rhs[i]);
    let x = lu.solve(&b);
    Ok(DVector::from_fn(dim, |i, _| x.read(i, 0)))
}

/// Mass triplets and exact-field load vector of `space` at time `t`.
fn mass_and_load(
    case: &ManufacturedCase,
    which: Field,
    space: &FormSpace,
    mesh: &Mesh,
    t: f64,
) -> Result<(Vec<(usize, usize, f64)>, DVector<f64>), Error> {
    let k = space.form_degree;
    let quad = Quadrature::tetrahedron();
    let mut trips = Vec::new();
    let mut load = DVector::zeros(space.dim);
    for (c, dofs) in space.cell_dofs.iter().enumerate() {
        let geom = CellGeometry::new(mesh.cell_coords(c))?;
        let lm = local_mass(k, &geom);
        for (i, &gi) in dofs.iter().enumerate() {
            for (j, &gj) in dofs.iter().enumerate() {
                trips.push((gi, gj, lm[(i, j)]));
            }
        }
        let scale = 6.0 * geom.volume;
        for (pt, w) in quad.points.iter().zip(&quad.weights) {
            let l = CellGeometry::bary(*pt);
            let value = case.field(which, t, geom.point(l));
            let pair = dof_pairings(k, &geom, l, value);
            for (i, &gi) in dofs.iter().enumerate() {
                load[gi] += scale * w * pair[i];
            }
        }
    }
    Ok((trips, load))
}

/// L2 projection of the selected exact field at time `t` onto the space
/// (broken spaces decouple into per-cell solves; the global solve treats
/// both uniformly). Initial conditions are the `t = 0` case.
pub fn project_initial(
    case: &ManufacturedCase,
    which: Field,
    space: &FormSpace,
    mesh: &Mesh,
    t: f64,
) -> Result<DVector<f64>, Error> {
    let (trips, load) = mass_and_load(case, which, space, mesh, t)?;
    sparse_solve(space.dim, &trips, &load)
}

/// L2 projection with the coefficients on `essential` pinned to the
/// DOF-interpolated exact data; only the remaining rows are solved. Used
/// for the conforming variable so the discrete trace matches the boundary
/// input exactly at the time nodes.
pub fn constrained_projection(
    case: &ManufacturedCase,
    which: Field,
    space: &FormSpace,
    mesh: &Mesh,
    essential: &[usize],
    t: f64,
) -> Result<DVector<f64>, Error> {
    let k = space.form_degree;
    let pinned = interpolate_entities(mesh, k, essential, |x| case.field(which, t, x));
    let (trips, mut load) = mass_and_load(case, which, space, mesh, t)?;
    let mut is_pinned = vec![false; space.dim];
    let mut value = vec![0.0; space.dim];
    for (i, &g) in essential.iter().enumerate() {
        is_pinned[g] = true;
        value[g] = pinned[i];
    }
    // Eliminate pinned columns from the load and replace pinned rows by
    // identity equations.
    let mut reduced = Vec::with_capacity(trips.len());
    for (r, c, v) in trips {
        match (is_pinned[r], is_pinned[c]) {
            (false, false) => reduced.push((r, c, v)),
            (false, true) => load[r] -= v * value[c],
            _ => {}
        }
    }
    for g in 0..space.dim {
        if is_pinned[g] {
            reduced.push((g, g, 1.0));
            load[g] = value[g];
        }
    }
    sparse_solve(space.dim, &reduced, &load)
}

// ---------------------------------------------------------------------------
// Entity interpolation
// ---------------------------------------------------------------------------

// 5-point Gauss-Legendre rule on [-1, 1], exact for degree 9.
const EDGE_GAUSS: [(f64, f64); 5] = [
    (-0.9061798459386640, 0.2369268850561891),
    (-0.5384693101056831, 0.4786286704993665),
    (0.0, 0.5688888888888889),
    (0.5384693101056831, 0.4786286704993665),
    (0.9061798459386640, 0.2369268850561891),
];

/// Canonical DOF interpolation of a field onto mesh entities of dimension
/// `k`: vertex values, edge circulations (along the ascending-vertex
/// direction), or face fluxes (through the canonical normal).
pub fn interpolate_entities<F>(mesh: &Mesh, k: usize, entities: &[usize], data: F) -> DVector<f64>
where
    F: Fn(Vector3<f64>) -> FieldValue,
{
    let fq = FaceQuadrature::triangle();
    DVector::from_fn(entities.len(), |i, _| {
        let e = entities[i];
        match k {
            0 => data(Vector3::from(mesh.vertices[e])).scalar(),
            1 => {
                let [a, b] = mesh.edges[e];
                let p0 = Vector3::from(mesh.vertices[a]);
                let d = Vector3::from(mesh.vertices[b]) - p0;
                EDGE_GAUSS
                    .iter()
                    .map(|&(xi, w)| {
                        let s = 0.5 * (xi + 1.0);
                        0.5 * w * data(p0 + d * s).vector().dot(&d)
                    })
                    .sum()
            }
            2 => {
                let fg = FaceGeometry::new(mesh.face_coords(e)).expect("mesh faces are valid");
                fq.integrate(&fg, |l| data(fg.point(l)).vector().dot(&fg.normal))
            }
            _ => panic!("entity interpolation exists for dimensions 0..=2"),
        }
    })
}

/// Boundary input channel of the hybrid system.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputSide {
    /// Trace data on the essential entities (conforming variable's field).
    Essential,
    /// Natural data on the complementary boundary (broken variable's field).
    Natural,
}

/// Interpolated boundary data of the case for one input channel at time
/// `t`, in the coefficient convention of the assembled input matrices.
pub fn evaluate_input(
    case: &ManufacturedCase,
    blocks: &SystemBlocks,
    side: InputSide,
    mesh: &Mesh,
    t: f64,
) -> DVector<f64> {
    let layout = &blocks.layout;
    let formulation = blocks.formulation;
    match side {
        InputSide::Essential => {
            interpolate_entities(mesh, layout.trace_degree, &layout.essential_entities, |x| {
                case.conforming_field(formulation, t, x)
            })
        }
        InputSide::Natural => {
            interpolate_entities(mesh, layout.natural_degree, &layout.natural_entities, |x| {
                case.broken_field(formulation, t, x)
            })
        }
    }
}

// ---------------------------------------------------------------------------
// Moment assembly
// ---------------------------------------------------------------------------

/// Stacked per-cell moments of the forcing against the broken `alpha`
/// test functions at time `t`: the forcing vector of both steppers.
pub fn forcing_moments(
    case: &ManufacturedCase,
    formulation: Formulation,
    mesh: &Mesh,
    t: f64,
) -> Result<DVector<f64>, Error> {
    let (ka, _) = field_degrees(case.problem, formulation);
    let na = ReferenceElement::new(ka)?.cell_dofs();
    let quad = Quadrature::tetrahedron();
    let mut out = DVector::zeros(mesh.cells.len() * na);
    for c in 0..mesh.cells.len() {
        let geom = CellGeometry::new(mesh.cell_coords(c))?;
        let scale = 6.0 * geom.volume;
        for (pt, w) in quad.points.iter().zip(&quad.weights) {
            let l = CellGeometry::bary(*pt);
            let value = case.forcing_field(t, geom.point(l));
            let pair = dof_pairings(ka, &geom, l, value);
            for (i, p) in pair.iter().enumerate() {
                out[c * na + i] += scale * w * p;
            }
        }
    }
    Ok(out)
}

/// Stacked per-cell boundary moments of an arbitrary trace datum against
/// the multiplier test functions, in the convention of the assembled
/// coupling block (outward-signed canonical-normal pairings times the
/// representation factor). Feeding these to the multiplier initialization
/// recovers the consistent discrete multiplier of the datum.
pub fn multiplier_moments_of<F>(
    data: F,
    blocks: &SystemBlocks,
    mesh: &Mesh,
) -> Result<DVector<f64>, Error>
where
    F: Fn(Vector3<f64>) -> FieldValue,
{
    let layout = &blocks.layout;
    let k = layout.trace_degree;
    let factor = coupling_factor(blocks.problem, blocks.formulation);
    let fq = FaceQuadrature::triangle();
    let n = layout.n_lambda;
    let mut out = DVector::zeros(layout.cells * n);
    for c in 0..layout.cells {
        let geom = CellGeometry::new(mesh.cell_coords(c))?;
        let signs = geom.outward_signs();
        for lf in 0..4 {
            let fv = CELL_FACES[lf];
            let coords = mesh.cell_coords(c);
            let fg = FaceGeometry::new([coords[fv[0]], coords[fv[1]], coords[fv[2]]])?;
            let scale = 2.0 * fg.area * signs[lf];
            for (pt, w) in fq.points.iter().zip(&fq.weights) {
                let lb = FaceGeometry::bary(*pt);
                // Cell barycentric coordinates of the face point.
                let mut l = [0.0; 4];
                for (fi, &ci) in fv.iter().enumerate() {
                    l[ci] = lb[fi];
                }
                let x = fg.point(lb);
                let value = data(x);
                let pair: Vec<f64> = match (k, value) {
                    (0, FieldValue::Vector(v)) => {
                        let vn = v.dot(&fg.normal);
                        (0..4).map(|i| l[i] * vn).collect()
                    }
                    (1, FieldValue::Vector(v)) => geom
                        .edge_basis(l)
                        .iter()
                        .map(|wi| wi.cross(&v).dot(&fg.normal))
                        .collect(),
                    (2, FieldValue::Scalar(s)) => geom
                        .face_basis(l)
                        .iter()
                        .map(|wi| wi.dot(&fg.normal) * s)
                        .collect(),
                    _ => {
                        return Err(Error::Config(
                            "trace datum kind does not match the multiplier degree".into(),
                        ))
                    }
                };
                for (i, p) in pair.iter().enumerate() {
                    out[c * n + i] += scale * w * p;
                }
            }
        }
    }
    Ok(out * factor)
}

/// Multiplier moments of the case's broken-variable field at time `t`.
pub fn multiplier_moments(
    case: &ManufacturedCase,
    blocks: &SystemBlocks,
    mesh: &Mesh,
    t: f64,
) -> Result<DVector<f64>, Error> {
    let formulation = blocks.formulation;
    multiplier_moments_of(|x| case.broken_field(formulation, t, x), blocks, mesh)
}

// ---------------------------------------------------------------------------
// Runner plumbing
// ---------------------------------------------------------------------------

/// Input closures of the hybrid stepper for this case.
pub fn hybrid_inputs(
    case: &Arc<ManufacturedCase>,
    blocks: &SystemBlocks,
    mesh: &Arc<Mesh>,
) -> Inputs {
    let layout = &blocks.layout;
    let formulation = blocks.formulation;
    let ess = layout.essential_entities.clone();
    let nat = layout.natural_entities.clone();
    let k_tr = layout.trace_degree;
    let k_nat = layout.natural_degree;
    let (c1, c2, c3) = (case.clone(), case.clone(), case.clone());
    let (m1, m2, m3) = (mesh.clone(), mesh.clone(), mesh.clone());
    Inputs {
        essential: Box::new(move |t| {
            interpolate_entities(&m1, k_tr, &ess, |x| c1.conforming_field(formulation, t, x))
        }),
        natural: Box::new(move |t| {
            interpolate_entities(&m2, k_nat, &nat, |x| c2.broken_field(formulation, t, x))
        }),
        forcing: Box::new(move |t| {
            forcing_moments(&c3, formulation, &m3, t).expect("forcing moments assemble")
        }),
    }
}

/// Input closures of the mixed reference stepper for this case; the
/// essential, natural, and forcing data agree with the hybrid inputs.
pub fn mixed_inputs(
    case: &Arc<ManufacturedCase>,
    mixed: &MixedSystem,
    mesh: &Arc<Mesh>,
) -> MixedInputs {
    let formulation = mixed.formulation;
    let ess = mixed.essential.clone();
    let nat = mixed.natural_entities.clone();
    let k_conf = mixed.conforming_degree;
    let k_nat = match formulation {
        Formulation::Primal => {
            let (_, q) = mixed.problem.degrees();
            q - 1
        }
        Formulation::Dual => {
            let (p, _) = mixed.problem.degrees();
            p - 1
        }
    };
    let (c1, c2, c3) = (case.clone(), case.clone(), case.clone());
    let (m1, m2, m3) = (mesh.clone(), mesh.clone(), mesh.clone());
    MixedInputs {
        essential: Box::new(move |t| {
            interpolate_entities(&m1, k_conf, &ess, |x| c1.conforming_field(formulation, t, x))
        }),
        natural: Box::new(move |t| {
            interpolate_entities(&m2, k_nat, &nat, |x| c2.broken_field(formulation, t, x))
        }),
        forcing: Box::new(move |t| {
            forcing_moments(&c3, formulation, &m3, t).expect("forcing moments assemble")
        }),
    }
}

/// Consistent initial state of the hybrid system at time `t0`: broken L2
/// projection for the broken variable, essential-constrained conforming
/// projection copied into the cells for the conforming variable, skeleton
/// trace from the same conforming coefficients, and the index-2 consistent
/// multiplier.
pub fn hybrid_initial_state(
    case: &ManufacturedCase,
    blocks: &SystemBlocks,
    mesh: &Mesh,
    t0: f64,
) -> Result<PhState, Error> {
    let layout = &blocks.layout;
    let formulation = blocks.formulation;
    let (broken_field, conf_field) = match formulation {
        Formulation::Primal => (Field::Alpha, Field::Beta),
        Formulation::Dual => (Field::Beta, Field::Alpha),
    };
    let (broken_space, conf_degree) = match formulation {
        Formulation::Primal => (&blocks.alpha_space, blocks.beta_space.form_degree),
        Formulation::Dual => (&blocks.beta_space, blocks.alpha_space.form_degree),
    };
    let broken = project_initial(case, broken_field, broken_space, mesh, t0)?;
    let conf_space = FormSpace::conforming(conf_degree, mesh)?;
    let conf = constrained_projection(
        case,
        conf_field,
        &conf_space,
        mesh,
        &layout.essential_entities,
        t0,
    )?;

    let mut x_l = DVector::zeros(layout.x_l_dim);
    for c in 0..layout.cells {
        let (broken_range, conf_range) = match formulation {
            Formulation::Primal => (layout.alpha_range(c), layout.beta_range(c)),
            Formulation::Dual => (layout.beta_range(c), layout.alpha_range(c)),
        };
        for (i, r) in broken_range.enumerate() {
            x_l[r] = broken[broken_space.cell_dofs[c][i]];
        }
        for (i, r) in conf_range.enumerate() {
            x_l[r] = conf[conf_space.cell_dofs[c][i]];
        }
    }
    let moments = multiplier_moments(case, blocks, mesh, t0)?;
    let lambda = crate::solver::multiplier_from_moments(blocks, &moments)?;
    for c in 0..layout.cells {
        for (i, r) in layout.lambda_range(c).enumerate() {
            x_l[r] = lambda[c * layout.n_lambda + i];
        }
    }
    let x_g = DVector::from_fn(layout.x_g_dim, |i, _| conf[layout.trace_entities[i]]);
    PhState::new(blocks, x_l, x_g, t0, 0)
}

/// Initial state of the mixed reference system, built from the same
/// projections as the hybrid initial state.
pub fn mixed_initial_state(
    case: &ManufacturedCase,
    mixed: &MixedSystem,
    mesh: &Mesh,
    t0: f64,
) -> Result<MixedState, Error> {
    let broken_field = match mixed.formulation {
        Formulation::Primal => Field::Alpha,
        Formulation::Dual => Field::Beta,
    };
    let conf_field = match mixed.formulation {
        Formulation::Primal => Field::Beta,
        Formulation::Dual => Field::Alpha,
    };
    let broken = project_initial(case, broken_field, &mixed.broken_space, mesh, t0)?;
    let conforming = constrained_projection(
        case,
        conf_field,
        &mixed.conforming_space,
        mesh,
        &mixed.essential,
        t0,
    )?;
    Ok(MixedState { broken, conforming, time: t0, step: 0 })
}

/// Energy of the exact solution at time `t`,
/// `1/2 integral (w_alpha |alpha|^2 + w_beta |beta|^2)`.
pub fn exact_energy(case: &ManufacturedCase, mesh: &Mesh, t: f64) -> Result<f64, Error> {
    let quad = Quadrature::tetrahedron();
    let mut h = 0.0;
    for c in 0..mesh.cells.len() {
        let geom = CellGeometry::new(mesh.cell_coords(c))?;
        h += quad.integrate(&geom, |l| {
            let x = geom.point(l);
            self_energy(case, t, x)
        });
    }
    Ok(0.5 * h)
}

fn self_energy(case: &ManufacturedCase, t: f64, x: Vector3<f64>) -> f64 {
    case.materials.w_alpha * case.alpha_field(t, x).squared()
        + case.materials.w_beta * case.beta_field(t, x).squared()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{build_structured_box, facet_adjacency, origin_planes, tag_boundary};
    use crate::physystem::{build_dual_hybrid, build_mixed_reference, build_primal_hybrid};
    use approx::assert_abs_diff_eq;

    fn rand_points(seed: u64, n: usize) -> Vec<(f64, Vector3<f64>)> {
        let mut s = seed.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(1);
        let mut next = move || {
            s ^= s << 13;
            s ^= s >> 7;
            s ^= s << 17;
            (s >> 11) as f64 / (1u64 << 53) as f64
        };
        (0..n)
            .map(|_| {
                (
                    2.0 * next(),
                    Vector3::new(next(), next(), next()),
                )
            })
            .collect()
    }

    /// Fourth-order central difference in one scalar argument.
    fn d4(f: impl Fn(f64) -> f64, x: f64) -> f64 {
        let h = 2e-3;
        (f(x - 2.0 * h) - 8.0 * f(x - h) + 8.0 * f(x + h) - f(x + 2.0 * h)) / (12.0 * h)
    }

    fn grad4(f: impl Fn(Vector3<f64>) -> f64 + Copy, x: Vector3<f64>) -> Vector3<f64> {
        Vector3::new(
            d4(|s| f(Vector3::new(s, x.y, x.z)), x.x),
            d4(|s| f(Vector3::new(x.x, s, x.z)), x.y),
            d4(|s| f(Vector3::new(x.x, x.y, s)), x.z),
        )
    }

    fn div4(f: impl Fn(Vector3<f64>) -> Vector3<f64> + Copy, x: Vector3<f64>) -> f64 {
        d4(|s| f(Vector3::new(s, x.y, x.z)).x, x.x)
            + d4(|s| f(Vector3::new(x.x, s, x.z)).y, x.y)
            + d4(|s| f(Vector3::new(x.x, x.y, s)).z, x.z)
    }

    fn curl4(f: impl Fn(Vector3<f64>) -> Vector3<f64> + Copy, x: Vector3<f64>) -> Vector3<f64> {
        let dy = |s| f(Vector3::new(x.x, s, x.z));
        let dz = |s| f(Vector3::new(x.x, x.y, s));
        let dx = |s| f(Vector3::new(s, x.y, x.z));
        Vector3::new(
            d4(|s| dy(s).z, x.y) - d4(|s| dz(s).y, x.z),
            d4(|s| dz(s).x, x.z) - d4(|s| dx(s).z, x.x),
            d4(|s| dx(s).y, x.x) - d4(|s| dy(s).x, x.y),
        )
    }

    #[test]
    fn eigenmode_pressure_at_the_mode_peak() {
        let case = wave_case(Profile::Eigenmode);
        let x = Vector3::new(
            std::f64::consts::FRAC_PI_2,
            std::f64::consts::FRAC_PI_2,
            std::f64::consts::FRAC_PI_2,
        );
        let p = case.alpha_field(0.0, x).scalar();
        assert_abs_diff_eq!(p, 3f64.sqrt(), epsilon = 1e-14);
    }

    #[test]
    fn wave_fields_satisfy_the_balance_laws() {
        for case in [
            wave_case(Profile::Eigenmode),
            wave_case_with_speed(Profile::Quadratic, 0.8).unwrap(),
        ] {
            let w_a = case.materials.w_alpha;
            for (t, x) in rand_points(5, 10) {
                let p = |tt: f64, xx| case.alpha_field(tt, xx).scalar();
                let sg = |tt: f64, xx| case.beta_field(tt, xx).vector();
                // c^-2 dp/dt + div sigma - xi = 0
                let r1 = w_a * d4(|s| p(s, x), t) + div4(|xx| sg(t, xx), x)
                    - case.forcing_field(t, x).scalar();
                // dsigma/dt + grad p = 0
                let dsg = Vector3::new(
                    d4(|s| sg(s, x).x, t),
                    d4(|s| sg(s, x).y, t),
                    d4(|s| sg(s, x).z, t),
                );
                let r2 = dsg + grad4(|xx| p(t, xx), x);
                assert!(r1.abs() <= 1e-10, "pressure residual {r1} at t={t}");
                assert!(r2.norm() <= 1e-10, "flux residual {} at t={t}", r2.norm());
            }
        }
    }

    #[test]
    fn maxwell_fields_satisfy_the_balance_laws() {
        for case in [
            maxwell_case(Profile::Eigenmode),
            maxwell_case_with(Profile::Quadratic, 1.3, 1.7).unwrap(),
        ] {
            let eps = case.materials.w_alpha;
            let mu = case.materials.w_beta;
            for (t, x) in rand_points(9, 10) {
                let e = |tt: f64, xx| case.alpha_field(tt, xx).vector();
                let h = |tt: f64, xx| case.beta_field(tt, xx).vector();
                // E is solenoidal (div g = 0).
                let dv = div4(|xx| e(t, xx), x);
                assert!(dv.abs() <= 1e-10, "div E = {dv}");
                // eps dE/dt - curl H - j = 0 (source convention of the case).
                let de = Vector3::new(
                    d4(|s| e(s, x).x, t),
                    d4(|s| e(s, x).y, t),
                    d4(|s| e(s, x).z, t),
                );
                let r1 = de * eps - curl4(|xx| h(t, xx), x) - case.forcing_field(t, x).vector();
                assert!(r1.norm() <= 1e-10, "electric residual {}", r1.norm());
                // mu dH/dt + curl E = 0
                let dh = Vector3::new(
                    d4(|s| h(s, x).x, t),
                    d4(|s| h(s, x).y, t),
                    d4(|s| h(s, x).z, t),
                );
                let r2 = dh * mu + curl4(|xx| e(t, xx), x);
                assert!(r2.norm() <= 1e-10, "magnetic residual {}", r2.norm());
            }
        }
    }

    #[test]
    fn quadratic_profile_has_zero_initial_data() {
        let mesh = build_structured_box(1).unwrap();
        for case in [wave_case(Profile::Quadratic), maxwell_case(Profile::Quadratic)] {
            for (_, x) in rand_points(3, 5) {
                assert_eq!(case.alpha_field(0.0, x).squared(), 0.0);
                assert_eq!(case.beta_field(0.0, x).squared(), 0.0);
            }
            assert_eq!(exact_energy(&case, &mesh, 0.0).unwrap(), 0.0);
            let space = FormSpace::broken(1, &mesh).unwrap();
            let proj = project_initial(&case, Field::Beta, &space, &mesh, 0.0).unwrap();
            assert_eq!(proj.amax(), 0.0);
        }
    }

    #[test]
    fn projection_is_exact_on_space_members() {
        let mesh = build_structured_box(2).unwrap();
        let case = member_case();

        // Degree 0: vertex interpolation of the linear scalar.
        let s0 = FormSpace::conforming(0, &mesh).unwrap();
        let p0 = project_initial(&case, Field::Alpha, &s0, &mesh, 0.0).unwrap();
        let all: Vec<usize> = (0..mesh.vertices.len()).collect();
        let i0 = interpolate_entities(&mesh, 0, &all, |x| case.alpha_field(0.0, x));
        assert!((p0 - i0).amax() <= 1e-12);

        // Degree 1 (conforming and broken): circulations of a + b x x,
        // a member of the lowest-order tangential family.
        for space in [
            FormSpace::conforming(1, &mesh).unwrap(),
            FormSpace::broken(1, &mesh).unwrap(),
        ] {
            let p1 = project_initial(&case, Field::Beta, &space, &mesh, 0.0).unwrap();
            let all: Vec<usize> = (0..mesh.edges.len()).collect();
            let i1 = interpolate_entities(&mesh, 1, &all, |x| case.beta_field(0.0, x));
            for (c, dofs) in space.cell_dofs.iter().enumerate() {
                for (i, &g) in dofs.iter().enumerate() {
                    let e = mesh.cell_edges[c][i];
                    assert_abs_diff_eq!(p1[g], i1[e], epsilon = 1e-12);
                }
            }
        }

        // Degree 2: fluxes of the constant part (the rotational part is
        // not in the normal family, so project a constant field).
        let const_case = ManufacturedCase {
            beta: Box::new(|_, x| {
                let _ = x;
                FieldValue::Vector(Vector3::new(0.3, -0.7, 0.45))
            }),
            ..member_case()
        };
        let s2 = FormSpace::conforming(2, &mesh).unwrap();
        let p2 = project_initial(&const_case, Field::Beta, &s2, &mesh, 0.0).unwrap();
        let all: Vec<usize> = (0..mesh.faces.len()).collect();
        let i2 = interpolate_entities(&mesh, 2, &all, |x| const_case.beta_field(0.0, x));
        assert!((p2 - i2).amax() <= 1e-12);

        // Degree 3: cell averages of the linear scalar equal its value at
        // the centroid.
        let s3 = FormSpace::broken(3, &mesh).unwrap();
        let p3 = project_initial(&case, Field::Alpha, &s3, &mesh, 0.0).unwrap();
        for c in 0..mesh.cells.len() {
            let geom = CellGeometry::new(mesh.cell_coords(c)).unwrap();
            let centroid = geom.point([0.25; 4]);
            assert_abs_diff_eq!(
                p3[c],
                case.alpha_field(0.0, centroid).scalar(),
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn eigenmode_projection_error_decreases_with_refinement() {
        let case = wave_case(Profile::Eigenmode);
        let quad = Quadrature::tetrahedron();
        let mut errors = Vec::new();
        for n in [2usize, 4] {
            let mesh = build_structured_box(n).unwrap();
            let space = FormSpace::conforming(0, &mesh).unwrap();
            let coeffs = project_initial(&case, Field::Alpha, &space, &mesh, 0.0).unwrap();
            let mut err2 = 0.0;
            for (c, dofs) in space.cell_dofs.iter().enumerate() {
                let geom = CellGeometry::new(mesh.cell_coords(c)).unwrap();
                let local: Vec<f64> = dofs.iter().map(|&g| coeffs[g]).collect();
                err2 += quad.integrate(&geom, |l| {
                    let d = eval_local(0, &geom, l, &local).scalar()
                        - case.alpha_field(0.0, geom.point(l)).scalar();
                    d * d
                });
            }
            errors.push(err2.sqrt());
        }
        let ratio = errors[0] / errors[1];
        assert!(
            ratio > 1.8,
            "projection error should decrease: {errors:?}, ratio {ratio}"
        );
    }

    fn systems_n1() -> (Arc<Mesh>, Vec<SystemBlocks>) {
        let mesh = build_structured_box(1).unwrap();
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

    #[test]
    fn dual_essential_inputs_vanish_on_the_origin_planes() {
        let (mesh, systems) = systems_n1();
        for sys in &systems {
            if sys.formulation != Formulation::Dual {
                continue;
            }
            let case = match sys.problem {
                ProblemKind::Wave => Arc::new(wave_case(Profile::Eigenmode)),
                ProblemKind::Maxwell => Arc::new(maxwell_case(Profile::Eigenmode)),
            };
            let u = evaluate_input(&case, sys, InputSide::Essential, &mesh, 0.37);
            assert_eq!(u.amax(), 0.0, "{:?}", sys.problem);
            // The natural channel is the driven one.
            let v = evaluate_input(&case, sys, InputSide::Natural, &mesh, 0.37);
            assert!(v.amax() > 1e-3, "{:?}", sys.problem);
        }
    }

    #[test]
    fn primal_natural_inputs_vanish_on_the_origin_planes() {
        let (mesh, systems) = systems_n1();
        for sys in &systems {
            if sys.formulation != Formulation::Primal {
                continue;
            }
            let case = match sys.problem {
                ProblemKind::Wave => Arc::new(wave_case(Profile::Eigenmode)),
                ProblemKind::Maxwell => Arc::new(maxwell_case(Profile::Eigenmode)),
            };
            let u = evaluate_input(&case, sys, InputSide::Natural, &mesh, 0.8);
            assert_eq!(u.amax(), 0.0, "{:?}", sys.problem);
            let v = evaluate_input(&case, sys, InputSide::Essential, &mesh, 0.8);
            assert!(v.amax() > 1e-3, "{:?}", sys.problem);
        }
    }

    #[test]
    fn eigenmode_inputs_are_periodic() {
        let (mesh, systems) = systems_n1();
        let period = 2.0 * std::f64::consts::PI / 3f64.sqrt();
        for sys in &systems {
            let case = match sys.problem {
                ProblemKind::Wave => Arc::new(wave_case(Profile::Eigenmode)),
                ProblemKind::Maxwell => Arc::new(maxwell_case(Profile::Eigenmode)),
            };
            for side in [InputSide::Essential, InputSide::Natural] {
                let a = evaluate_input(&case, sys, side, &mesh, 0.21);
                let b = evaluate_input(&case, sys, side, &mesh, 0.21 + period);
                let scale = a.amax().max(1.0);
                assert!((a - b).amax() <= 1e-12 * scale);
            }
        }
    }

    #[test]
    fn flux_multiplier_initialization_recovers_face_integrals() {
        // For the volume/flux pair the trace pairing is diagonal and the
        // consistent multiplier is the face integral of the pressure.
        let (mesh, systems) = systems_n1();
        let sys = &systems[0];
        let case = wave_case(Profile::Eigenmode);
        let t = 0.4;
        let moments = multiplier_moments(&case, sys, &mesh, t).unwrap();
        let lambda = crate::solver::multiplier_from_moments(sys, &moments).unwrap();
        let fq = FaceQuadrature::triangle();
        for c in 0..sys.layout.cells {
            let coords = mesh.cell_coords(c);
            for lf in 0..4 {
                let fv = CELL_FACES[lf];
                let fg = FaceGeometry::new([coords[fv[0]], coords[fv[1]], coords[fv[2]]]).unwrap();
                let expected = fq.integrate(&fg, |l| case.alpha_field(t, fg.point(l)).scalar());
                assert_abs_diff_eq!(
                    lambda[c * sys.layout.n_lambda + lf],
                    expected,
                    epsilon = 1e-12
                );
            }
        }
    }

    #[test]
    fn circulation_multiplier_initialization_is_exact_for_space_members() {
        // A constant tangential datum lies in the multiplier space, so the
        // moment route must reproduce its canonical circulations exactly.
        let (mesh, systems) = systems_n1();
        let datum = Vector3::new(0.4, -0.9, 0.35);
        for sys in systems.iter().filter(|s| s.problem == ProblemKind::Maxwell) {
            let moments =
                multiplier_moments_of(|_| FieldValue::Vector(datum), sys, &mesh).unwrap();
            let lambda = crate::solver::multiplier_from_moments(sys, &moments).unwrap();
            for c in 0..sys.layout.cells {
                for (i, &e) in mesh.cell_edges[c].iter().enumerate() {
                    let [a, b] = mesh.edges[e];
                    let d = Vector3::from(mesh.vertices[b]) - Vector3::from(mesh.vertices[a]);
                    assert_abs_diff_eq!(
                        lambda[c * sys.layout.n_lambda + i],
                        datum.dot(&d),
                        epsilon = 1e-13,
                    );
                }
            }
        }
    }

    #[test]
    fn constrained_projection_pins_essential_coefficients() {
        let (mesh, systems) = systems_n1();
        let sys = &systems[2]; // wave dual: conforming degree 0
        let case = wave_case(Profile::Eigenmode);
        let space = FormSpace::conforming(0, &mesh).unwrap();
        let t = 0.15;
        let coeffs = constrained_projection(
            &case,
            Field::Alpha,
            &space,
            &mesh,
            &sys.layout.essential_entities,
            t,
        )
        .unwrap();
        let pinned = interpolate_entities(&mesh, 0, &sys.layout.essential_entities, |x| {
            case.alpha_field(t, x)
        });
        for (i, &g) in sys.layout.essential_entities.iter().enumerate() {
            assert_eq!(coeffs[g], pinned[i]);
        }
        // Unconstrained projection differs somewhere (the data is not in
        // the space), but both approximate the same field.
        let free = project_initial(&case, Field::Alpha, &space, &mesh, t).unwrap();
        assert!((coeffs - free).amax() > 1e-6);
    }

    #[test]
    fn initial_states_satisfy_the_trace_constraints() {
        let (mesh, systems) = systems_n1();
        for sys in &systems {
            let case = match sys.problem {
                ProblemKind::Wave => Arc::new(wave_case(Profile::Eigenmode)),
                ProblemKind::Maxwell => Arc::new(maxwell_case(Profile::Eigenmode)),
            };
            let state = hybrid_initial_state(&case, sys, &mesh, 0.0).unwrap();
            let u_ess = evaluate_input(&case, sys, InputSide::Essential, &mesh, 0.0);
            // Multiplier-row residual: J x_l + C x_g + B_l u must vanish on
            // the algebraic rows (the conforming trace matches the skeleton
            // and boundary data).
            let mut r = sys.j_l.matvec(&state.x_l);
            r += sys.c_lg.matvec(&state.x_g);
            r += sys.b_l.matvec(&u_ess);
            let scale = state.x_l.amax().max(1.0);
            for c in 0..sys.layout.cells {
                for row in sys.layout.lambda_range(c) {
                    assert!(
                        r[row].abs() <= 1e-12 * scale,
                        "{:?}/{:?}: residual {} at row {row}",
                        sys.problem,
                        sys.formulation,
                        r[row]
                    );
                }
            }
        }
    }

    #[test]
    fn hybrid_and_mixed_initial_states_agree() {
        let mesh = build_structured_box(1).unwrap();
        let adjacency = facet_adjacency(&mesh).unwrap();
        let partition = tag_boundary(&mesh, &adjacency, origin_planes);
        for (problem, formulation) in [
            (ProblemKind::Wave, Formulation::Primal),
            (ProblemKind::Wave, Formulation::Dual),
            (ProblemKind::Maxwell, Formulation::Primal),
            (ProblemKind::Maxwell, Formulation::Dual),
        ] {
            let case = match problem {
                ProblemKind::Wave => wave_case(Profile::Eigenmode),
                ProblemKind::Maxwell => maxwell_case(Profile::Eigenmode),
            };
            let (p, q) = problem.degrees();
            let sys = match formulation {
                Formulation::Primal => {
                    build_primal_hybrid(p, &mesh, &partition, &case.materials).unwrap()
                }
                Formulation::Dual => {
                    build_dual_hybrid(q, &mesh, &partition, &case.materials).unwrap()
                }
            };
            let mixed =
                build_mixed_reference(problem, formulation, &mesh, &partition, &case.materials)
                    .unwrap();
            let hs = hybrid_initial_state(&case, &sys, &mesh, 0.0).unwrap();
            let ms = mixed_initial_state(&case, &mixed, &mesh, 0.0).unwrap();
            // Broken coefficients coincide cell by cell.
            let layout = &sys.layout;
            for c in 0..layout.cells {
                let broken_range = match formulation {
                    Formulation::Primal => layout.alpha_range(c),
                    Formulation::Dual => layout.beta_range(c),
                };
                for (i, r) in broken_range.enumerate() {
                    let g = mixed.broken_space.cell_dofs[c][i];
                    assert_eq!(hs.x_l[r], ms.broken[g], "{problem:?}/{formulation:?}");
                }
                let conf_range = match formulation {
                    Formulation::Primal => layout.beta_range(c),
                    Formulation::Dual => layout.alpha_range(c),
                };
                for (i, r) in conf_range.enumerate() {
                    let g = mixed.conforming_space.cell_dofs[c][i];
                    assert_eq!(hs.x_l[r], ms.conforming[g]);
                }
            }
            // Skeleton trace equals the conforming coefficients.
            for (i, &e) in layout.trace_entities.iter().enumerate() {
                assert_eq!(hs.x_g[i], ms.conforming[e]);
            }
        }
    }

    #[test]
    fn driven_eigenmode_hybrid_run_matches_the_mixed_reference() {
        // End-to-end check of the input conventions: with initial data and
        // boundary inputs built by this module, the condensed hybrid
        // trajectory reproduces the mixed reference trajectory exactly (up
        // to solver roundoff) for every family and representation.
        let mesh = Arc::new(build_structured_box(1).unwrap());
        let adjacency = facet_adjacency(&mesh).unwrap();
        let partition = tag_boundary(&mesh, &adjacency, origin_planes);
        for (problem, formulation) in [
            (ProblemKind::Wave, Formulation::Primal),
            (ProblemKind::Wave, Formulation::Dual),
            (ProblemKind::Maxwell, Formulation::Primal),
            (ProblemKind::Maxwell, Formulation::Dual),
        ] {
            let case = Arc::new(match problem {
                ProblemKind::Wave => wave_case(Profile::Eigenmode),
                ProblemKind::Maxwell => maxwell_case(Profile::Eigenmode),
            });
            let (p, q) = problem.degrees();
            let sys = match formulation {
                Formulation::Primal => {
                    build_primal_hybrid(p, &mesh, &partition, &case.materials).unwrap()
                }
                Formulation::Dual => {
                    build_dual_hybrid(q, &mesh, &partition, &case.materials).unwrap()
                }
            };
            let mixed =
                build_mixed_reference(problem, formulation, &mesh, &partition, &case.materials)
                    .unwrap();
            let dt = 0.05;
            let mut hs = hybrid_initial_state(&case, &sys, &mesh, 0.0).unwrap();
            let mut ms = mixed_initial_state(&case, &mixed, &mesh, 0.0).unwrap();
            let hi = hybrid_inputs(&case, &sys, &mesh);
            let mi = mixed_inputs(&case, &mixed, &mesh);
            let op = crate::solver::prepare(&sys, dt).unwrap();
            let mop = crate::solver::prepare_mixed(&mixed, dt).unwrap();
            for _ in 0..5 {
                hs = crate::solver::step(&op, &sys, &hs, &hi).unwrap();
                ms = crate::solver::step_mixed(&mop, &mixed, &ms, &mi).unwrap();
            }
            let layout = &sys.layout;
            let scale = ms.broken.amax().max(ms.conforming.amax()).max(1.0);
            for c in 0..layout.cells {
                let broken_range = match formulation {
                    Formulation::Primal => layout.alpha_range(c),
                    Formulation::Dual => layout.beta_range(c),
                };
                for (i, r) in broken_range.enumerate() {
                    let g = mixed.broken_space.cell_dofs[c][i];
                    let d = (hs.x_l[r] - ms.broken[g]).abs();
                    assert!(
                        d <= 1e-9 * scale,
                        "{problem:?}/{formulation:?}: broken mismatch {d} at cell {c}"
                    );
                }
                let conf_range = match formulation {
                    Formulation::Primal => layout.beta_range(c),
                    Formulation::Dual => layout.alpha_range(c),
                };
                for (i, r) in conf_range.enumerate() {
                    let g = mixed.conforming_space.cell_dofs[c][i];
                    let d = (hs.x_l[r] - ms.conforming[g]).abs();
                    assert!(
                        d <= 1e-9 * scale,
                        "{problem:?}/{formulation:?}: conforming mismatch {d} at cell {c}"
                    );
                }
            }
            // The skeleton trace of the last step midpoint also matches the
            // mixed conforming trace averaged over the step; checking the
            // energies instead keeps this independent of midpoint bookkeeping.
            let eh = crate::solver::energy(&sys, &hs.x_l);
            let em = crate::solver::mixed_energy(&mixed, &ms);
            assert!(
                (eh - em).abs() <= 1e-9 * em.max(1.0),
                "{problem:?}/{formulation:?}: energy mismatch {eh} vs {em}"
            );
        }
    }

    #[test]
    fn rejects_inconsistent_material_requests() {
        assert!(wave_case_with_speed(Profile::Eigenmode, 2.0).is_err());
        assert!(wave_case_with_speed(Profile::Quadratic, -1.0).is_err());
        assert!(maxwell_case_with(Profile::Eigenmode, 2.0, 1.0).is_err());
        assert!(maxwell_case_with(Profile::Quadratic, 0.0, 1.0).is_err());
        assert!(wave_case_with_speed(Profile::Quadratic, 0.5).is_ok());
        assert!(maxwell_case_with(Profile::Quadratic, 1.3, 1.7).is_ok());
    }
}
