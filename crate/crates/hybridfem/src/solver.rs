//! Implicit-midpoint time integration of the hybrid system with static
//! condensation, plus the mixed reference stepper.
//!
//! One step of the midpoint rule applied to
//!
//! ```text
//! E_l dx_l/dt = J_l x_l + C_lg x_g + B_l u_ess + forcing,
//!           0 = -C_lg^T x_l + B_g u_nat,
//! ```
//!
//! solves the saddle-point system
//!
//! ```text
//! [ A   -C ] [x_l^{n+1}]   [ (E_l + dt/2 J_l) x_l^n + dt (B_l u_ess + forcing) ]
//! [ C^T  0 ] [   z     ] = [ -C_lg^T x_l^n + 2 B_g u_nat                       ]
//! ```
//!
//! with `A = E_l - (dt/2) J_l` and `z = dt * x_g^{n+1/2}`. Because `E_l` and
//! `J_l` are block diagonal over cells, so is `A`; eliminating `x_l` cell by
//! cell leaves the condensed skeleton system `S z = b_g - C^T A^{-1} b_l`
//! with `S = C^T A^{-1} C`, after which each cell recovers its own unknowns
//! independently. A monolithic sparse solve of the same saddle matrix is
//! kept as a cross-check; the two paths agree to solver precision because
//! condensation is exact block elimination.
//!
//! Every cell block `A_T` is invertible for any positive step size: its
//! state part has a symmetric positive definite part (the mass), its
//! multiplier part couples through a full-rank trace pairing, and the skew
//! part cannot create a kernel. A singular block therefore indicates a
//! broken sign or orientation convention and is reported as an error with
//! the cell id.
//!
//! Input sampling matches the equivalence setup: essential data is averaged
//! between the two time levels (so the hybrid constraint sees exactly the
//! midpoint average of nodally exact samples, as the mixed reference does),
//! while natural data and volume forcing are evaluated at the midpoint
//! time.

use nalgebra::{DMatrix, DVector, Dyn};
use rayon::prelude::*;

use faer::prelude::SpSolver;
use faer::sparse::SparseColMat;

use crate::assembly::CsrMatrix;
use crate::physystem::{Formulation, MixedSystem, SystemBlocks};
use crate::Error;

type DenseLu = nalgebra::linalg::FullPivLU<f64, Dyn, Dyn>;
type SparseLu = faer::sparse::linalg::solvers::Lu<usize, f64>;

/// Equidistant time grid with `steps` intervals of width `dt`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    /// Step size.
    pub dt: f64,
    /// Number of steps.
    pub steps: usize,
}

impl TimeGrid {
    /// Grid from a step size and a step count.
    pub fn new(dt: f64, steps: usize) -> Result<Self, Error> {
        if dt > 0.0 && dt.is_finite() {
            Ok(Self { dt, steps })
        } else {
            Err(Error::Config(format!("time step must be positive, got {dt}")))
        }
    }

    /// Grid covering `[0, t_end]` with `steps` intervals.
    pub fn from_end(t_end: f64, steps: usize) -> Result<Self, Error> {
        if steps == 0 {
            return Err(Error::Config("a time grid needs at least one step".into()));
        }
        Self::new(t_end / steps as f64, steps)
    }

    /// Final time `steps * dt` (exact in the representable arithmetic).
    pub fn t_end(&self) -> f64 {
        self.dt * self.steps as f64
    }

    /// Time of node `n`.
    pub fn time_at(&self, n: usize) -> f64 {
        self.dt * n as f64
    }
}

/// Discrete trajectory point of the hybrid system. `x_g` holds the
/// skeleton trace at the midpoint of the step that produced this state
/// (the algebraic variable has no nodal dynamics of its own); for the
/// initial state it holds the consistent trace at `t = 0`.
#[derive(Debug, Clone)]
pub struct PhState {
    /// Cell-major `(alpha, beta, lambda)` coefficients.
    pub x_l: DVector<f64>,
    /// Skeleton trace coefficients.
    pub x_g: DVector<f64>,
    /// Time of this state.
    pub time: f64,
    /// Step index (0 = initial).
    pub step: usize,
}

impl PhState {
    /// Validated state from coefficient vectors.
    pub fn new(
        blocks: &SystemBlocks,
        x_l: DVector<f64>,
        x_g: DVector<f64>,
        time: f64,
        step: usize,
    ) -> Result<Self, Error> {
        if x_l.len() != blocks.layout.x_l_dim || x_g.len() != blocks.layout.x_g_dim {
            return Err(Error::Config(format!(
                "state dimensions ({}, {}) do not match the system ({}, {})",
                x_l.len(),
                x_g.len(),
                blocks.layout.x_l_dim,
                blocks.layout.x_g_dim
            )));
        }
        Ok(Self { x_l, x_g, time, step })
    }

    /// Zero state at `t = 0`.
    pub fn zero(blocks: &SystemBlocks) -> Self {
        Self {
            x_l: DVector::zeros(blocks.layout.x_l_dim),
            x_g: DVector::zeros(blocks.layout.x_g_dim),
            time: 0.0,
            step: 0,
        }
    }
}

/// Time-dependent inputs of one run. All three return coefficient vectors:
/// essential trace data on `layout.essential_entities`, natural data on
/// `layout.natural_entities`, and volume forcing moments against the broken
/// `alpha` test functions (stacked per cell).
pub struct Inputs {
    /// Essential trace coefficients at time `t`.
    pub essential: Box<dyn Fn(f64) -> DVector<f64> + Sync>,
    /// Natural boundary coefficients at time `t`.
    pub natural: Box<dyn Fn(f64) -> DVector<f64> + Sync>,
    /// Volume forcing moments at time `t` (length `cells * n_alpha`).
    pub forcing: Box<dyn Fn(f64) -> DVector<f64> + Sync>,
}

impl Inputs {
    /// Homogeneous inputs for the given system.
    pub fn zero(blocks: &SystemBlocks) -> Self {
        let ne = blocks.layout.essential_entities.len();
        let nn = blocks.layout.natural_entities.len();
        let nf = blocks.layout.cells * blocks.layout.n_alpha;
        Self {
            essential: Box::new(move |_| DVector::zeros(ne)),
            natural: Box::new(move |_| DVector::zeros(nn)),
            forcing: Box::new(move |_| DVector::zeros(nf)),
        }
    }

    fn sample(
        &self,
        blocks: &SystemBlocks,
        t: f64,
        which: &str,
    ) -> Result<(DVector<f64>, DVector<f64>, DVector<f64>), Error> {
        let e = (self.essential)(t);
        let n = (self.natural)(t);
        let f = (self.forcing)(t);
        let layout = &blocks.layout;
        let shapes = [
            (e.len(), layout.essential_entities.len(), "essential"),
            (n.len(), layout.natural_entities.len(), "natural"),
            (f.len(), layout.cells * layout.n_alpha, "forcing"),
        ];
        for (got, want, name) in shapes {
            if got != want {
                return Err(Error::Config(format!(
                    "{which} input '{name}' returned length {got}, expected {want}"
                )));
            }
        }
        Ok((e, n, f))
    }
}

/// Energy stored in a hybrid state, `1/2 x_l^T E_l x_l` (the multiplier
/// rows carry no energy).
pub fn energy(blocks: &SystemBlocks, x_l: &DVector<f64>) -> f64 {
    0.5 * x_l.dot(&blocks.e_l.matvec(x_l))
}

/// Scatters stacked per-cell `alpha` moments into an `x_l`-sized vector.
pub fn scatter_alpha(blocks: &SystemBlocks, alpha: &DVector<f64>) -> DVector<f64> {
    let layout = &blocks.layout;
    let mut out = DVector::zeros(layout.x_l_dim);
    for c in 0..layout.cells {
        let rng = layout.alpha_range(c);
        for (i, r) in rng.enumerate() {
            out[r] = alpha[c * layout.n_alpha + i];
        }
    }
    out
}

/// Per-cell factorizations of `A = E_l - (dt/2) J_l` together with the
/// condensed skeleton operator `S = C^T A^{-1} C` and its factorization.
pub struct CondensedOperator {
    /// Step size the factorizations belong to.
    pub dt: f64,
    /// Condensed skeleton matrix.
    pub schur: CsrMatrix,
    cell_lu: Vec<DenseLu>,
    cell_c: Vec<DMatrix<f64>>,
    cell_cols: Vec<Vec<usize>>,
    schur_lu: Option<SparseLu>,
}

impl CondensedOperator {
    /// Number of cell blocks.
    pub fn block_count(&self) -> usize {
        self.cell_lu.len()
    }
}

fn dense_cell_block(m: &CsrMatrix, rows: std::ops::Range<usize>) -> DMatrix<f64> {
    let w = rows.len();
    let off = rows.start;
    let mut out = DMatrix::zeros(w, w);
    for r in rows.clone() {
        for k in m.indptr[r]..m.indptr[r + 1] {
            let c = m.indices[k];
            if rows.contains(&c) {
                out[(r - off, c - off)] += m.values[k];
            }
        }
    }
    out
}

/// Dense view of the rows `rows` of `C_lg`, restricted to the skeleton
/// columns that actually occur there (returned alongside).
fn dense_cell_coupling(c_lg: &CsrMatrix, rows: std::ops::Range<usize>) -> (DMatrix<f64>, Vec<usize>) {
    let off = rows.start;
    let mut cols: Vec<usize> = Vec::new();
    for r in rows.clone() {
        for k in c_lg.indptr[r]..c_lg.indptr[r + 1] {
            cols.push(c_lg.indices[k]);
        }
    }
    cols.sort_unstable();
    cols.dedup();
    let mut dense = DMatrix::zeros(rows.len(), cols.len());
    for r in rows.clone() {
        for k in c_lg.indptr[r]..c_lg.indptr[r + 1] {
            let j = cols.binary_search(&c_lg.indices[k]).expect("column collected");
            dense[(r - off, j)] += c_lg.values[k];
        }
    }
    (dense, cols)
}

fn faer_from_triplets(
    nrows: usize,
    ncols: usize,
    trips: &[(usize, usize, f64)],
) -> Result<SparseColMat<usize, f64>, Error> {
    SparseColMat::try_new_from_triplets(nrows, ncols, trips)
        .map_err(|e| Error::Singular(format!("sparse matrix construction failed: {e:?}")))
}

/// Factorizes the per-cell blocks and the condensed skeleton operator for
/// the given step size. The factorizations are time-invariant and reused
/// for every step.
pub fn prepare(blocks: &SystemBlocks, dt: f64) -> Result<CondensedOperator, Error> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::Config(format!("time step must be positive, got {dt}")));
    }
    let layout = &blocks.layout;
    let cells = layout.cells;
    let w = layout.cell_width();

    struct CellFactor {
        lu: DenseLu,
        c: DMatrix<f64>,
        cols: Vec<usize>,
        schur: DMatrix<f64>,
    }
    let factors: Vec<CellFactor> = (0..cells)
        .into_par_iter()
        .map(|c| -> Result<CellFactor, Error> {
            let rows = c * w..(c + 1) * w;
            let e = dense_cell_block(&blocks.e_l, rows.clone());
            let j = dense_cell_block(&blocks.j_l, rows.clone());
            let a = e - (dt / 2.0) * j;
            let lu = a.full_piv_lu();
            if !lu.is_invertible() {
                return Err(Error::Singular(format!(
                    "cell {c}: implicit-midpoint block is singular at dt = {dt}"
                )));
            }
            let (cmat, cols) = dense_cell_coupling(&blocks.c_lg, rows);
            let x = lu
                .solve(&cmat)
                .ok_or_else(|| Error::Singular(format!("cell {c}: block solve failed")))?;
            let schur = cmat.transpose() * x;
            Ok(CellFactor { lu, c: cmat, cols, schur })
        })
        .collect::<Result<_, _>>()?;

    let mut s_trips = Vec::new();
    for f in &factors {
        for (i, &gi) in f.cols.iter().enumerate() {
            for (j, &gj) in f.cols.iter().enumerate() {
                let v = f.schur[(i, j)];
                if v != 0.0 {
                    s_trips.push((gi, gj, v));
                }
            }
        }
    }
    let ng = layout.x_g_dim;
    let schur = CsrMatrix::from_triplets(ng, ng, s_trips);
    let schur_lu = if ng > 0 {
        let trips: Vec<(usize, usize, f64)> = schur.triplets().collect();
        let sp = faer_from_triplets(ng, ng, &trips)?;
        Some(
            sp.sp_lu()
                .map_err(|e| Error::Singular(format!("condensed skeleton operator: {e:?}")))?,
        )
    } else {
        None
    };

    let mut cell_lu = Vec::with_capacity(cells);
    let mut cell_c = Vec::with_capacity(cells);
    let mut cell_cols = Vec::with_capacity(cells);
    for f in factors {
        cell_lu.push(f.lu);
        cell_c.push(f.c);
        cell_cols.push(f.cols);
    }
    Ok(CondensedOperator { dt, schur, cell_lu, cell_c, cell_cols, schur_lu })
}

/// Midpoint right-hand sides for one step starting at `state.time`.
fn step_rhs(
    blocks: &SystemBlocks,
    state: &PhState,
    inputs: &Inputs,
    dt: f64,
) -> Result<(DVector<f64>, DVector<f64>), Error> {
    let t = state.time;
    let (ess_now, _, _) = inputs.sample(blocks, t, "hybrid")?;
    let (ess_next, _, _) = inputs.sample(blocks, t + dt, "hybrid")?;
    let (_, nat_mid, forc_mid) = inputs.sample(blocks, t + 0.5 * dt, "hybrid")?;

    let ess_avg = (ess_now + ess_next) * 0.5;
    let mut b_l = blocks.e_l.matvec(&state.x_l);
    b_l += (dt / 2.0) * blocks.j_l.matvec(&state.x_l);
    b_l += dt * blocks.b_l.matvec(&ess_avg);
    b_l += dt * scatter_alpha(blocks, &forc_mid);

    let mut b_g = -blocks.c_lg.matvec_transpose(&state.x_l);
    b_g += 2.0 * blocks.b_g.matvec(&nat_mid);
    Ok((b_l, b_g))
}

fn check_finite(v: &DVector<f64>, step: usize) -> Result<(), Error> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::Singular(format!(
            "non-finite values while computing step {step}"
        )))
    }
}

/// Advances one implicit-midpoint step through the condensed path: solve
/// the skeleton system, then back-substitute every cell independently.
pub fn step(
    op: &CondensedOperator,
    blocks: &SystemBlocks,
    state: &PhState,
    inputs: &Inputs,
) -> Result<PhState, Error> {
    let layout = &blocks.layout;
    let dt = op.dt;
    if op.block_count() != layout.cells {
        return Err(Error::Config(
            "condensed operator was prepared for a different system".into(),
        ));
    }
    let (b_l, b_g) = step_rhs(blocks, state, inputs, dt)?;
    let w = layout.cell_width();

    // y = A^{-1} b_l, cell by cell.
    let ys: Vec<DVector<f64>> = (0..layout.cells)
        .into_par_iter()
        .map(|c| {
            let local = b_l.rows(c * w, w).into_owned();
            op.cell_lu[c].solve(&local).expect("factorized at prepare")
        })
        .collect();

    // Condensed skeleton solve: S z = b_g - C^T y.
    let ng = layout.x_g_dim;
    let mut r = b_g;
    for c in 0..layout.cells {
        let contrib = op.cell_c[c].transpose() * &ys[c];
        for (j, &g) in op.cell_cols[c].iter().enumerate() {
            r[g] -= contrib[j];
        }
    }
    let z = if let Some(lu) = &op.schur_lu {
        let rhs = faer::Mat::from_fn(ng, 1, |i, _| r[i]);
        let sol = lu.solve(&rhs);
        DVector::from_fn(ng, |i, _| sol.read(i, 0))
    } else {
        DVector::zeros(0)
    };

    // Back-substitution: x_l^{n+1} = A^{-1} (b_l + C z).
    let x_l_parts: Vec<DVector<f64>> = (0..layout.cells)
        .into_par_iter()
        .map(|c| {
            let mut local = b_l.rows(c * w, w).into_owned();
            if !op.cell_cols[c].is_empty() {
                let zc = DVector::from_fn(op.cell_cols[c].len(), |j, _| z[op.cell_cols[c][j]]);
                local += &op.cell_c[c] * zc;
            }
            op.cell_lu[c].solve(&local).expect("factorized at prepare")
        })
        .collect();
    let mut x_l = DVector::zeros(layout.x_l_dim);
    for (c, part) in x_l_parts.iter().enumerate() {
        x_l.rows_mut(c * w, w).copy_from(part);
    }

    let x_g = z / dt;
    check_finite(&x_l, state.step + 1)?;
    check_finite(&x_g, state.step + 1)?;
    Ok(PhState {
        x_l,
        x_g,
        time: state.time + dt,
        step: state.step + 1,
    })
}

/// Advances one step by factorizing and solving the full saddle matrix
/// `[[A, -C], [C^T, 0]]`. Used to cross-validate the condensed path.
pub fn monolithic_solve(
    blocks: &SystemBlocks,
    state: &PhState,
    inputs: &Inputs,
    dt: f64,
) -> Result<PhState, Error> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::Config(format!("time step must be positive, got {dt}")));
    }
    let layout = &blocks.layout;
    let nl = layout.x_l_dim;
    let ng = layout.x_g_dim;
    let n = nl + ng;

    let mut trips: Vec<(usize, usize, f64)> = Vec::new();
    for (r, c, v) in blocks.e_l.triplets() {
        trips.push((r, c, v));
    }
    for (r, c, v) in blocks.j_l.triplets() {
        trips.push((r, c, -0.5 * dt * v));
    }
    for (r, c, v) in blocks.c_lg.triplets() {
        trips.push((r, nl + c, -v));
        trips.push((nl + c, r, v));
    }
    let saddle = faer_from_triplets(n, n, &trips)?;
    let lu = saddle
        .sp_lu()
        .map_err(|e| Error::Singular(format!("saddle matrix is singular: {e:?}")))?;

    let (b_l, b_g) = step_rhs(blocks, state, inputs, dt)?;
    let rhs = faer::Mat::from_fn(n, 1, |i, _| if i < nl { b_l[i] } else { b_g[i - nl] });
    let sol = lu.solve(&rhs);
    let x_l = DVector::from_fn(nl, |i, _| sol.read(i, 0));
    let x_g = DVector::from_fn(ng, |i, _| sol.read(nl + i, 0) / dt);
    check_finite(&x_l, state.step + 1)?;
    check_finite(&x_g, state.step + 1)?;
    Ok(PhState {
        x_l,
        x_g,
        time: state.time + dt,
        step: state.step + 1,
    })
}

/// Per-step record passed to integration observers.
#[derive(Debug, Clone, Copy)]
pub struct StepRecord {
    /// Step index of the state just produced (1-based).
    pub step: usize,
    /// Time of the state just produced.
    pub time: f64,
    /// Stored energy of the state just produced.
    pub energy: f64,
}

/// Runs `grid.steps` implicit-midpoint steps from `state0`, invoking the
/// observer after each step, and returns the final state together with the
/// energy log (length `steps + 1`, starting at `t = 0`).
pub fn integrate<F>(
    blocks: &SystemBlocks,
    state0: PhState,
    inputs: &Inputs,
    grid: &TimeGrid,
    mut observer: F,
) -> Result<(PhState, Vec<f64>), Error>
where
    F: FnMut(&PhState, &StepRecord),
{
    let op = prepare(blocks, grid.dt)?;
    let mut energies = Vec::with_capacity(grid.steps + 1);
    energies.push(energy(blocks, &state0.x_l));
    let mut state = state0;
    for _ in 0..grid.steps {
        state = step(&op, blocks, &state, inputs)?;
        let record = StepRecord {
            step: state.step,
            time: state.time,
            energy: energy(blocks, &state.x_l),
        };
        energies.push(record.energy);
        observer(&state, &record);
    }
    Ok((state, energies))
}

/// Solves each cell's trace pairing for the multiplier matching the given
/// boundary moments: the consistent (index-2) multiplier initialization.
/// `moments` stacks per cell the pairing of the multiplier test functions
/// with the trace data the multiplier represents; the pairing matrix is
/// recovered from the assembled structure block.
pub fn multiplier_from_moments(
    blocks: &SystemBlocks,
    moments: &DVector<f64>,
) -> Result<DVector<f64>, Error> {
    let layout = &blocks.layout;
    if moments.len() != layout.cells * layout.n_lambda {
        return Err(Error::Config(format!(
            "expected {} multiplier moments, got {}",
            layout.cells * layout.n_lambda,
            moments.len()
        )));
    }
    let mut out = DVector::zeros(moments.len());
    for c in 0..layout.cells {
        // The multiplier couples into the strongly differentiated field's
        // rows: beta for the primal arrangement, alpha for the dual one.
        let rows = match blocks.formulation {
            Formulation::Primal => layout.beta_range(c),
            Formulation::Dual => layout.alpha_range(c),
        };
        let lam = layout.lambda_range(c);
        // The coupling block equals factor * Q; the moments follow the same
        // convention, so the factor cancels and we solve with the block
        // as assembled.
        let mut g = DMatrix::zeros(rows.len(), layout.n_lambda);
        for r in rows.clone() {
            for k in blocks.j_l.indptr[r]..blocks.j_l.indptr[r + 1] {
                let col = blocks.j_l.indices[k];
                if lam.contains(&col) {
                    g[(r - rows.start, col - lam.start)] += blocks.j_l.values[k];
                }
            }
        }
        let m = moments.rows(c * layout.n_lambda, layout.n_lambda).into_owned();
        let lu = g.clone().full_piv_lu();
        if !lu.is_invertible() {
            return Err(Error::Singular(format!(
                "cell {c}: trace pairing is singular during multiplier initialization"
            )));
        }
        let lam_c = lu
            .solve(&m)
            .ok_or_else(|| Error::Singular(format!("cell {c}: multiplier solve failed")))?;
        out.rows_mut(c * layout.n_lambda, layout.n_lambda).copy_from(&lam_c);
    }
    Ok(out)
}

/// State of the mixed reference system: the broken field and the full
/// conforming field (essential coefficients included).
#[derive(Debug, Clone)]
pub struct MixedState {
    /// Broken field coefficients.
    pub broken: DVector<f64>,
    /// Conforming field coefficients (full, essential entries included).
    pub conforming: DVector<f64>,
    /// Time of this state.
    pub time: f64,
    /// Step index.
    pub step: usize,
}

impl MixedState {
    /// Zero state at `t = 0`.
    pub fn zero(mixed: &MixedSystem) -> Self {
        Self {
            broken: DVector::zeros(mixed.broken_dim()),
            conforming: DVector::zeros(mixed.conforming_dim()),
            time: 0.0,
            step: 0,
        }
    }
}

/// Inputs of the mixed reference run: essential nodal data on
/// `mixed.essential`, natural data on `mixed.natural_entities`, and the
/// same stacked `alpha` forcing moments the hybrid run uses.
pub struct MixedInputs {
    /// Essential conforming coefficients at time `t`.
    pub essential: Box<dyn Fn(f64) -> DVector<f64> + Sync>,
    /// Natural boundary coefficients at time `t`.
    pub natural: Box<dyn Fn(f64) -> DVector<f64> + Sync>,
    /// Volume forcing moments at time `t` against the broken test functions
    /// of the `alpha` field.
    pub forcing: Box<dyn Fn(f64) -> DVector<f64> + Sync>,
}

impl MixedInputs {
    /// Homogeneous inputs for the given system.
    pub fn zero(mixed: &MixedSystem) -> Self {
        let ne = mixed.essential.len();
        let nn = mixed.natural_entities.len();
        let nf = match mixed.formulation {
            Formulation::Primal => mixed.broken_dim(),
            Formulation::Dual => mixed.inclusion.nrows,
        };
        Self {
            essential: Box::new(move |_| DVector::zeros(ne)),
            natural: Box::new(move |_| DVector::zeros(nn)),
            forcing: Box::new(move |_| DVector::zeros(nf)),
        }
    }
}

/// Factorized midpoint operator of the mixed reference system over the
/// unknowns `[broken; conforming_free]`.
pub struct MixedOperator {
    /// Step size.
    pub dt: f64,
    lu: SparseLu,
    n_broken: usize,
    n_free: usize,
}

/// Factorizes the mixed midpoint matrix
/// `[[M_br, -(dt/2) f K_free], [(dt/2) f K_free^T, M_c[free,free]]]`,
/// whose symmetric part is the positive definite mass.
pub fn prepare_mixed(mixed: &MixedSystem, dt: f64) -> Result<MixedOperator, Error> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::Config(format!("time step must be positive, got {dt}")));
    }
    let nb = mixed.broken_dim();
    let nf = mixed.free.len();
    let n = nb + nf;
    let mut free_pos = vec![None; mixed.conforming_dim()];
    for (i, &g) in mixed.free.iter().enumerate() {
        free_pos[g] = Some(i);
    }
    let f = mixed.coupling_sign;
    let mut trips: Vec<(usize, usize, f64)> = Vec::new();
    for (r, c, v) in mixed.mass_broken.triplets() {
        trips.push((r, c, v));
    }
    for (r, c, v) in mixed.coupling.triplets() {
        if let Some(j) = free_pos[c] {
            trips.push((r, nb + j, -0.5 * dt * f * v));
            trips.push((nb + j, r, 0.5 * dt * f * v));
        }
    }
    for (r, c, v) in mixed.mass_conforming.triplets() {
        if let (Some(i), Some(j)) = (free_pos[r], free_pos[c]) {
            trips.push((nb + i, nb + j, v));
        }
    }
    let m = faer_from_triplets(n, n, &trips)?;
    let lu = m
        .sp_lu()
        .map_err(|e| Error::Singular(format!("mixed midpoint matrix: {e:?}")))?;
    Ok(MixedOperator { dt, lu, n_broken: nb, n_free: nf })
}

/// Advances the mixed reference system one midpoint step. Essential
/// conforming coefficients are set to the sampled data exactly at the time
/// nodes; their motion enters the free equations through the conforming
/// mass and the coupling averages.
pub fn step_mixed(
    op: &MixedOperator,
    mixed: &MixedSystem,
    state: &MixedState,
    inputs: &MixedInputs,
) -> Result<MixedState, Error> {
    let dt = op.dt;
    let f = mixed.coupling_sign;
    let nb = op.n_broken;
    let nfree = op.n_free;
    let t = state.time;

    let d_next = (inputs.essential)(t + dt);
    let nat_mid = (inputs.natural)(t + 0.5 * dt);
    let forc_mid = (inputs.forcing)(t + 0.5 * dt);
    if d_next.len() != mixed.essential.len()
        || nat_mid.len() != mixed.natural_entities.len()
    {
        return Err(Error::Config("mixed input dimensions do not match".into()));
    }

    // Broken equation: M_br x_br^{n+1} - (dt/2) f K_free x_cf^{n+1}
    //   = M_br x_br^n + (dt/2) f K x_c^n + (dt/2) f K_ess d^{n+1} + dt l_br.
    let mut r1 = mixed.mass_broken.matvec(&state.broken);
    r1 += (0.5 * dt * f) * mixed.coupling.matvec(&state.conforming);
    let mut d_full = DVector::zeros(mixed.conforming_dim());
    for (i, &g) in mixed.essential.iter().enumerate() {
        d_full[g] = d_next[i];
    }
    r1 += (0.5 * dt * f) * mixed.coupling.matvec(&d_full);
    match mixed.formulation {
        Formulation::Primal => {
            if forc_mid.len() != nb {
                return Err(Error::Config("mixed forcing dimension mismatch".into()));
            }
            r1 += dt * &forc_mid;
        }
        Formulation::Dual => {}
    }

    // Conforming equation (free rows): M_cff x_cf^{n+1} + (dt/2) f K_f^T x_br^{n+1}
    //   = M_c[f,:] x_c^n - M_c[f,e] d^{n+1} - (dt/2) f K_f^T x_br^n
    //     + dt (B u_nat + l_c)_f.
    let mc_xc = mixed.mass_conforming.matvec(&state.conforming);
    let mc_d = mixed.mass_conforming.matvec(&d_full);
    let kt_xbr = mixed.coupling.matvec_transpose(&state.broken);
    let nat = mixed.natural_input.matvec(&nat_mid);
    let mut l_c = DVector::zeros(mixed.conforming_dim());
    if let Formulation::Dual = mixed.formulation {
        if forc_mid.len() != mixed.inclusion.nrows {
            return Err(Error::Config("mixed forcing dimension mismatch".into()));
        }
        l_c = mixed.inclusion.matvec_transpose(&forc_mid);
    }
    let mut rhs = DVector::zeros(nb + nfree);
    rhs.rows_mut(0, nb).copy_from(&r1);
    for (i, &g) in mixed.free.iter().enumerate() {
        rhs[nb + i] = mc_xc[g] - mc_d[g] - 0.5 * dt * f * kt_xbr[g] + dt * (nat[g] + l_c[g]);
    }

    let frhs = faer::Mat::from_fn(nb + nfree, 1, |i, _| rhs[i]);
    let sol = op.lu.solve(&frhs);
    let broken = DVector::from_fn(nb, |i, _| sol.read(i, 0));
    let mut conforming = d_full;
    for (i, &g) in mixed.free.iter().enumerate() {
        conforming[g] = sol.read(nb + i, 0);
    }
    check_finite(&broken, state.step + 1)?;
    check_finite(&conforming, state.step + 1)?;
    Ok(MixedState {
        broken,
        conforming,
        time: state.time + dt,
        step: state.step + 1,
    })
}

/// Energy stored in a mixed state.
pub fn mixed_energy(mixed: &MixedSystem, state: &MixedState) -> f64 {
    0.5 * state.broken.dot(&mixed.mass_broken.matvec(&state.broken))
        + 0.5 * state
            .conforming
            .dot(&mixed.mass_conforming.matvec(&state.conforming))
}
