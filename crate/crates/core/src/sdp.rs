//! Semidefinite-programming modeling layer.
//!
//! Problems are written in the LMI ("dual") form
//!
//! ```text
//! minimize    c' y
//! subject to  F0 + sum_k y_k F_k  <= 0      (negative semidefinite, per constraint)
//!             lower <= y_s <= upper         (scalar variable bounds)
//! ```
//!
//! where `y` stacks the free entries of all declared variables (scalars,
//! symmetric matrices and full rectangular matrices). Strict inequalities are
//! realized by shifting the constraint with a fixed margin, `F(y) + delta I <= 0`.
//!
//! [`solve_sdp`] hands the problem to the Clarabel interior-point solver;
//! [`check_feasibility`] audits a point with a dense symmetric eigensolver
//! and shares no code with the solver path.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_STRICT_MARGIN: f64 = 1e-7;
pub const DEFAULT_FEASIBILITY_TOL: f64 = 1e-7;
pub const DEFAULT_BACKOFF: f64 = 2e-7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum VarKind {
    Scalar { lower: Option<f64>, upper: Option<f64> },
    Symmetric { dim: usize },
    Full { rows: usize, cols: usize },
}

impl VarKind {
    fn len(&self) -> usize {
        match *self {
            VarKind::Scalar { .. } => 1,
            VarKind::Symmetric { dim } => dim * (dim + 1) / 2,
            VarKind::Full { rows, cols } => rows * cols,
        }
    }

    fn shape(&self) -> (usize, usize) {
        match *self {
            VarKind::Scalar { .. } => (1, 1),
            VarKind::Symmetric { dim } => (dim, dim),
            VarKind::Full { rows, cols } => (rows, cols),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Variable {
    pub name: String,
    pub kind: VarKind,
    offset: usize,
}

impl Variable {
    /// Matrix entries `(row, col, weight)` of the basis element for local
    /// coordinate `k`.
    fn basis(&self, k: usize) -> Vec<(usize, usize, f64)> {
        match self.kind {
            VarKind::Scalar { .. } => vec![(0, 0, 1.0)],
            VarKind::Symmetric { dim } => {
                let (i, j) = sym_coord(dim, k);
                if i == j {
                    vec![(i, i, 1.0)]
                } else {
                    vec![(i, j, 1.0), (j, i, 1.0)]
                }
            }
            VarKind::Full { cols, .. } => vec![(k / cols, k % cols, 1.0)],
        }
    }

    fn to_matrix(&self, coords: &[f64]) -> DMatrix<f64> {
        let (r, c) = self.kind.shape();
        let mut m = DMatrix::zeros(r, c);
        for (k, v) in coords.iter().enumerate() {
            for (i, j, _) in self.basis(k) {
                m[(i, j)] = *v;
            }
        }
        m
    }

    fn from_matrix(&self, m: &DMatrix<f64>) -> Result<Vec<f64>> {
        if m.shape() != self.kind.shape() {
            return Err(Error::Dimension(format!(
                "value for `{}` is {}x{}, expected {:?}",
                self.name,
                m.nrows(),
                m.ncols(),
                self.kind.shape()
            )));
        }
        Ok((0..self.kind.len())
            .map(|k| {
                let b = self.basis(k);
                // symmetric parts are averaged so slightly asymmetric input is accepted
                b.iter().map(|&(i, j, _)| m[(i, j)]).sum::<f64>() / b.len() as f64
            })
            .collect())
    }
}

/// Upper-triangle coordinate `k` of a symmetric `dim x dim` matrix, row-major.
fn sym_coord(dim: usize, mut k: usize) -> (usize, usize) {
    for i in 0..dim {
        let row_len = dim - i;
        if k < row_len {
            return (i, i + k);
        }
        k -= row_len;
    }
    unreachable!("coordinate out of range")
}

/// Handle to a declared variable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct VarId(usize);

/// Where a constraint comes from: constraint family, polytope vertex and
/// per-family index (e.g. actuator number).
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ConstraintTag {
    pub family: String,
    pub vertex: Option<usize>,
    pub index: Option<usize>,
}

impl ConstraintTag {
    pub fn new(family: impl Into<String>) -> Self {
        Self { family: family.into(), vertex: None, index: None }
    }
    pub fn at_vertex(mut self, v: usize) -> Self {
        self.vertex = Some(v);
        self
    }
    pub fn with_index(mut self, i: usize) -> Self {
        self.index = Some(i);
        self
    }
}

impl std::fmt::Display for ConstraintTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.family)?;
        if let Some(i) = self.index {
            write!(f, "[{i}]")?;
        }
        if let Some(v) = self.vertex {
            write!(f, "@vertex{v}")?;
        }
        Ok(())
    }
}

/// Upper-triangle entry `(row, col, value)` with `row <= col`.
pub type Entry = (u32, u32, f64);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmiConstraint {
    pub tag: ConstraintTag,
    pub dim: usize,
    pub strict: bool,
    pub constant: Vec<Entry>,
    /// `(coordinate, entries)` pairs sorted by coordinate.
    pub coefficients: Vec<(usize, Vec<Entry>)>,
}

fn entries_to_dense(dim: usize, entries: &[Entry], scale: f64, out: &mut DMatrix<f64>) {
    debug_assert_eq!(out.nrows(), dim);
    for &(r, c, v) in entries {
        let (r, c) = (r as usize, c as usize);
        out[(r, c)] += scale * v;
        if r != c {
            out[(c, r)] += scale * v;
        }
    }
}

impl LmiConstraint {
    /// Value of the (unshifted) matrix expression at a coordinate vector.
    pub fn evaluate(&self, coords: &[f64]) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.dim, self.dim);
        entries_to_dense(self.dim, &self.constant, 1.0, &mut m);
        for (k, entries) in &self.coefficients {
            if coords[*k] != 0.0 {
                entries_to_dense(self.dim, entries, coords[*k], &mut m);
            }
        }
        m
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SdpProblem {
    variables: Vec<Variable>,
    n_coords: usize,
    objective: Vec<(VarId, f64)>,
    constraints: Vec<LmiConstraint>,
    strict_margin: f64,
}

impl Default for SdpProblem {
    fn default() -> Self {
        Self::new()
    }
}

/// Values of all variables, keyed by name; scalars are stored as 1x1 matrices.
pub type Assignment = BTreeMap<String, DMatrix<f64>>;

impl SdpProblem {
    pub fn new() -> Self {
        Self {
            variables: Vec::new(),
            n_coords: 0,
            objective: Vec::new(),
            constraints: Vec::new(),
            strict_margin: DEFAULT_STRICT_MARGIN,
        }
    }

    pub fn with_strict_margin(mut self, margin: f64) -> Self {
        self.strict_margin = margin;
        self
    }

    pub fn strict_margin(&self) -> f64 {
        self.strict_margin
    }

    fn declare(&mut self, name: &str, kind: VarKind) -> Result<VarId> {
        if self.variables.iter().any(|v| v.name == name) {
            return Err(Error::InvalidParameter(format!("variable `{name}` declared twice")));
        }
        let len = kind.len();
        self.variables.push(Variable { name: name.to_string(), kind, offset: self.n_coords });
        self.n_coords += len;
        Ok(VarId(self.variables.len() - 1))
    }

    pub fn add_scalar(&mut self, name: &str, lower: Option<f64>, upper: Option<f64>) -> Result<VarId> {
        self.declare(name, VarKind::Scalar { lower, upper })
    }

    pub fn add_symmetric(&mut self, name: &str, dim: usize) -> Result<VarId> {
        self.declare(name, VarKind::Symmetric { dim })
    }

    pub fn add_full(&mut self, name: &str, rows: usize, cols: usize) -> Result<VarId> {
        self.declare(name, VarKind::Full { rows, cols })
    }

    pub fn variable(&self, id: VarId) -> &Variable {
        &self.variables[id.0]
    }

    pub fn variables(&self) -> &[Variable] {
        &self.variables
    }

    pub fn find(&self, name: &str) -> Option<VarId> {
        self.variables.iter().position(|v| v.name == name).map(VarId)
    }

    pub fn n_coords(&self) -> usize {
        self.n_coords
    }

    /// Linear objective over scalar variables.
    pub fn set_objective(&mut self, terms: &[(VarId, f64)]) -> Result<()> {
        for (id, _) in terms {
            let v = self
                .variables
                .get(id.0)
                .ok_or_else(|| Error::UnknownVariable(format!("#{}", id.0)))?;
            if !matches!(v.kind, VarKind::Scalar { .. }) {
                return Err(Error::InvalidParameter(format!(
                    "objective may only involve scalar variables, `{}` is a matrix",
                    v.name
                )));
            }
        }
        self.objective = terms.to_vec();
        Ok(())
    }

    pub fn objective(&self) -> &[(VarId, f64)] {
        &self.objective
    }

    pub fn constraints(&self) -> &[LmiConstraint] {
        &self.constraints
    }

    pub fn add_constraint(&mut self, c: LmiConstraint) -> Result<()> {
        for (k, _) in &c.coefficients {
            if *k >= self.n_coords {
                return Err(Error::UnknownVariable(format!("coordinate {k}")));
            }
        }
        self.constraints.push(c);
        Ok(())
    }

    /// Starts an LMI whose matrix is partitioned into the given block sizes.
    pub fn lmi(&self, tag: ConstraintTag, block_sizes: &[usize]) -> LmiBuilder<'_> {
        LmiBuilder::new(self, tag, block_sizes)
    }

    /// Stacks an assignment into the coordinate vector.
    pub fn flatten(&self, values: &Assignment) -> Result<DVector<f64>> {
        let mut y = DVector::zeros(self.n_coords);
        for v in &self.variables {
            let m = values.get(&v.name).ok_or_else(|| Error::MissingVariable(v.name.clone()))?;
            let c = v.from_matrix(m)?;
            y.rows_mut(v.offset, c.len()).copy_from_slice(&c);
        }
        Ok(y)
    }

    pub fn unflatten(&self, coords: &[f64]) -> Assignment {
        self.variables
            .iter()
            .map(|v| (v.name.clone(), v.to_matrix(&coords[v.offset..v.offset + v.kind.len()])))
            .collect()
    }

    pub fn objective_value(&self, coords: &[f64]) -> f64 {
        self.objective
            .iter()
            .map(|(id, c)| c * coords[self.variables[id.0].offset])
            .sum()
    }

    /// Sparse text dump, one record per nonzero coefficient.
    ///
    /// ```text
    /// var  <coord> <name> <row> <col>
    /// obj  <coord> <value>
    /// bnd  <coord> <lower|-> <upper|->
    /// con  <id> <family> <vertex|-> <index|-> <dim> <strict 0|1>
    /// ent  <constraint id> <coord|-1 for constant> <row> <col> <value>
    /// ```
    ///
    /// Coefficient entries are upper-triangular (`row <= col`); the matrix
    /// is their symmetric completion. Values print in shortest round-trip form.
    pub fn to_sparse_text(&self) -> String {
        let opt = |x: Option<f64>| x.map_or("-".to_string(), |v| v.to_string());
        let opt_u = |x: Option<usize>| x.map_or("-".to_string(), |v| v.to_string());
        let mut s = String::from("# sparse LMI dump: F0 + sum_k y_k F_k (+ margin I if strict) <= 0\n");
        let _ = writeln!(s, "margin {}", self.strict_margin);
        for v in &self.variables {
            for k in 0..v.kind.len() {
                let (i, j, _) = v.basis(k)[0];
                let _ = writeln!(s, "var {} {} {} {}", v.offset + k, v.name, i, j);
            }
            if let VarKind::Scalar { lower, upper } = v.kind {
                if lower.is_some() || upper.is_some() {
                    let _ = writeln!(s, "bnd {} {} {}", v.offset, opt(lower), opt(upper));
                }
            }
        }
        for (id, c) in &self.objective {
            let _ = writeln!(s, "obj {} {}", self.variables[id.0].offset, c);
        }
        for (ci, c) in self.constraints.iter().enumerate() {
            let _ = writeln!(
                s,
                "con {} {} {} {} {} {}",
                ci,
                c.tag.family,
                opt_u(c.tag.vertex),
                opt_u(c.tag.index),
                c.dim,
                u8::from(c.strict)
            );
            for &(r, col, v) in &c.constant {
                let _ = writeln!(s, "ent {ci} -1 {r} {col} {v}");
            }
            for (k, entries) in &c.coefficients {
                for &(r, col, v) in entries {
                    let _ = writeln!(s, "ent {ci} {k} {r} {col} {v}");
                }
            }
        }
        s
    }
}

/// Accumulates a block-structured symmetric matrix expression.
///
/// Off-diagonal block terms are mirrored into the transposed block; on
/// diagonal blocks the final matrix is symmetrized as `(M + M') / 2`, so a
/// term `2 A X` on a diagonal block contributes `A X + X A'`.
pub struct LmiBuilder<'a> {
    problem: &'a SdpProblem,
    tag: ConstraintTag,
    offsets: Vec<usize>,
    sizes: Vec<usize>,
    dim: usize,
    strict: bool,
    constant: DMatrix<f64>,
    coeffs: HashMap<usize, DMatrix<f64>>,
    error: Option<Error>,
}

impl<'a> LmiBuilder<'a> {
    fn new(problem: &'a SdpProblem, tag: ConstraintTag, sizes: &[usize]) -> Self {
        let mut offsets = Vec::with_capacity(sizes.len());
        let mut dim = 0;
        for s in sizes {
            offsets.push(dim);
            dim += s;
        }
        Self {
            problem,
            tag,
            offsets,
            sizes: sizes.to_vec(),
            dim,
            strict: true,
            constant: DMatrix::zeros(dim, dim),
            coeffs: HashMap::new(),
            error: None,
        }
    }

    /// Non-strict constraints are not shifted by the strictness margin.
    pub fn strict(mut self, strict: bool) -> Self {
        self.strict = strict;
        self
    }

    fn check_block(&mut self, bi: usize, bj: usize, shape: (usize, usize)) -> bool {
        if self.error.is_some() {
            return false;
        }
        if bi >= self.sizes.len() || bj >= self.sizes.len() {
            self.error = Some(Error::Dimension(format!("{}: block ({bi},{bj}) out of range", self.tag)));
            return false;
        }
        if shape != (self.sizes[bi], self.sizes[bj]) {
            self.error = Some(Error::Dimension(format!(
                "{}: block ({bi},{bj}) is {}x{}, term is {}x{}",
                self.tag, self.sizes[bi], self.sizes[bj], shape.0, shape.1
            )));
            return false;
        }
        true
    }

    fn place(target: &mut DMatrix<f64>, r0: usize, c0: usize, m: &DMatrix<f64>, mirror: bool) {
        let mut view = target.view_mut((r0, c0), m.shape());
        view += m;
        if mirror {
            let mut view = target.view_mut((c0, r0), (m.ncols(), m.nrows()));
            view += m.transpose();
        }
    }

    /// Adds a constant matrix to block `(bi, bj)`.
    pub fn constant(mut self, bi: usize, bj: usize, m: &DMatrix<f64>) -> Self {
        if self.check_block(bi, bj, m.shape()) {
            let (r0, c0) = (self.offsets[bi], self.offsets[bj]);
            Self::place(&mut self.constant, r0, c0, m, bi != bj);
        }
        self
    }

    /// Adds `scale * left * V * right` to block `(bi, bj)`.
    pub fn term(mut self, bi: usize, bj: usize, var: VarId, left: &DMatrix<f64>, right: &DMatrix<f64>, scale: f64) -> Self {
        let Some(v) = self.problem.variables.get(var.0) else {
            self.error = Some(Error::UnknownVariable(format!("#{}", var.0)));
            return self;
        };
        let (vr, vc) = v.kind.shape();
        if left.ncols() != vr || right.nrows() != vc {
            self.error.get_or_insert(Error::Dimension(format!(
                "{}: cannot form left({}x{}) * {}({vr}x{vc}) * right({}x{})",
                self.tag,
                left.nrows(),
                left.ncols(),
                v.name,
                right.nrows(),
                right.ncols()
            )));
            return self;
        }
        if !self.check_block(bi, bj, (left.nrows(), right.ncols())) {
            return self;
        }
        let (r0, c0) = (self.offsets[bi], self.offsets[bj]);
        for k in 0..v.kind.len() {
            let mut piece = DMatrix::zeros(left.nrows(), right.ncols());
            for (i, j, w) in v.basis(k) {
                piece.ger(scale * w, &left.column(i), &right.row(j).transpose(), 1.0);
            }
            if piece.iter().all(|x| *x == 0.0) {
                continue;
            }
            let dim = self.dim;
            let target = self
                .coeffs
                .entry(v.offset + k)
                .or_insert_with(|| DMatrix::zeros(dim, dim));
            Self::place(target, r0, c0, &piece, bi != bj);
        }
        self
    }

    /// Adds `scale * V` to block `(bi, bj)`.
    pub fn var(self, bi: usize, bj: usize, var: VarId, scale: f64) -> Self {
        let (r, c) = match self.problem.variables.get(var.0) {
            Some(v) => v.kind.shape(),
            None => (0, 0),
        };
        self.term(bi, bj, var, &DMatrix::identity(r, r), &DMatrix::identity(c, c), scale)
    }

    /// Adds `scale * s * I` to diagonal block `bi` for a scalar variable `s`.
    pub fn scalar_identity(mut self, bi: usize, var: VarId, scale: f64) -> Self {
        let Some(v) = self.problem.variables.get(var.0) else {
            self.error.get_or_insert(Error::UnknownVariable(format!("#{}", var.0)));
            return self;
        };
        if !matches!(v.kind, VarKind::Scalar { .. }) {
            self.error.get_or_insert(Error::InvalidParameter(format!("`{}` is not a scalar", v.name)));
            return self;
        }
        let n = self.sizes.get(bi).copied().unwrap_or(0);
        if !self.check_block(bi, bi, (n, n)) {
            return self;
        }
        let dim = self.dim;
        let r0 = self.offsets[bi];
        let target = self.coeffs.entry(v.offset).or_insert_with(|| DMatrix::zeros(dim, dim));
        for i in 0..n {
            target[(r0 + i, r0 + i)] += scale;
        }
        self
    }

    pub fn build(self) -> Result<LmiConstraint> {
        if let Some(e) = self.error {
            return Err(e);
        }
        let to_entries = |m: &DMatrix<f64>| -> Vec<Entry> {
            let mut out = Vec::new();
            for i in 0..m.nrows() {
                for j in i..m.ncols() {
                    let v = if i == j { m[(i, i)] } else { 0.5 * (m[(i, j)] + m[(j, i)]) };
                    if v != 0.0 {
                        out.push((i as u32, j as u32, v));
                    }
                }
            }
            out
        };
        let mut coefficients: Vec<(usize, Vec<Entry>)> = self
            .coeffs
            .iter()
            .map(|(k, m)| (*k, to_entries(m)))
            .filter(|(_, e)| !e.is_empty())
            .collect();
        coefficients.sort_by_key(|(k, _)| *k);
        Ok(LmiConstraint {
            tag: self.tag,
            dim: self.dim,
            strict: self.strict,
            constant: to_entries(&self.constant),
            coefficients,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Optimal,
    Infeasible,
    NumericalFailure,
    IterationLimit,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SolverStats {
    pub iterations: u32,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub gap_abs: f64,
    pub gap_rel: f64,
    pub backend_status: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SdpSolution {
    pub status: SolveStatus,
    /// Present for optimal solutions, and as a best-effort point for
    /// iteration-limit / numerical-failure outcomes when the solver had one.
    pub values: Option<Assignment>,
    pub best_effort: bool,
    pub objective: f64,
    pub stats: SolverStats,
    /// For infeasible problems: the share of each constraint in the
    /// solver's Farkas certificate, `-b_c' z_c`, in constraint order.
    /// Larger values point at the constraints responsible.
    pub infeasibility_blame: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SdpSettings {
    /// Relative/absolute gap and feasibility tolerance handed to the solver.
    pub tol: f64,
    pub max_iter: u32,
    /// Acceptance threshold of the eigenvalue audit.
    pub feasibility_tol: f64,
    /// Extra margin the solver is asked to keep on strict constraints,
    /// beyond the audited strictness margin.
    pub backoff: f64,
    pub verbose: bool,
}

impl Default for SdpSettings {
    fn default() -> Self {
        Self { tol: 1e-9, max_iter: 300, feasibility_tol: DEFAULT_FEASIBILITY_TOL, backoff: DEFAULT_BACKOFF, verbose: false }
    }
}

/// Per-constraint audit of a candidate point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeasibilityReport {
    /// Largest eigenvalue of each LMI, including the strictness shift.
    pub max_eigenvalues: Vec<f64>,
    /// Bound violation of each bounded scalar (`> 0` means violated), in
    /// declaration order of `(variable, lower|upper)`.
    pub bound_violations: Vec<(String, f64)>,
    pub tolerance: f64,
}

impl FeasibilityReport {
    pub fn worst(&self) -> f64 {
        self.max_eigenvalues
            .iter()
            .copied()
            .chain(self.bound_violations.iter().map(|(_, v)| *v))
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn passes(&self) -> bool {
        self.worst() <= self.tolerance
    }
}

fn max_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return f64::NEG_INFINITY;
    }
    m.clone().symmetric_eigenvalues().max()
}

/// Largest eigenvalue of every constraint at `values` (with the strictness
/// shift applied to strict constraints) and scalar bound violations.
pub fn check_feasibility(problem: &SdpProblem, values: &Assignment, tol: f64) -> Result<FeasibilityReport> {
    let y = problem.flatten(values)?;
    Ok(check_coords(problem, y.as_slice(), tol))
}

fn check_coords(problem: &SdpProblem, y: &[f64], tol: f64) -> FeasibilityReport {
    let max_eigenvalues = problem
        .constraints
        .iter()
        .map(|c| {
            let shift = if c.strict { problem.strict_margin } else { 0.0 };
            max_eigenvalue(&c.evaluate(y)) + shift
        })
        .collect();
    let mut bound_violations = Vec::new();
    for v in &problem.variables {
        if let VarKind::Scalar { lower, upper } = v.kind {
            let x = y[v.offset];
            if let Some(lo) = lower {
                bound_violations.push((v.name.clone(), lo - x));
            }
            if let Some(hi) = upper {
                bound_violations.push((v.name.clone(), x - hi));
            }
        }
    }
    FeasibilityReport { max_eigenvalues, bound_violations, tolerance: tol }
}

/// Solves the problem with Clarabel.
pub fn solve_sdp(problem: &SdpProblem, settings: &SdpSettings) -> SdpSolution {
    if problem.n_coords == 0 {
        return solve_constant(problem, settings);
    }
    use clarabel::algebra::CscMatrix;
    use clarabel::solver::{DefaultSettings, DefaultSolver, IPSolver, SolverStatus, SupportedConeT};

    let n = problem.n_coords;
    // Identical constraints (e.g. parameter-independent LMIs repeated at
    // every vertex) are handed to the solver once.
    let representative = duplicate_map(&problem.constraints);
    let unique = |ci: usize| representative[ci] == ci;
    let mut rows: Vec<usize> = Vec::new();
    let mut cols: Vec<usize> = Vec::new();
    let mut vals: Vec<f64> = Vec::new();
    let mut b: Vec<f64> = Vec::new();
    let mut cones: Vec<SupportedConeT<f64>> = Vec::new();

    // Nonnegative rows: scalar bounds and 1x1 LMIs, s = b - A y >= 0.
    for v in &problem.variables {
        if let VarKind::Scalar { lower, upper } = v.kind {
            if let Some(lo) = lower {
                rows.push(b.len());
                cols.push(v.offset);
                vals.push(-1.0);
                b.push(-lo);
            }
            if let Some(hi) = upper {
                rows.push(b.len());
                cols.push(v.offset);
                vals.push(1.0);
                b.push(hi);
            }
        }
    }
    let mut ranges: Vec<Option<std::ops::Range<usize>>> = vec![None; problem.constraints.len()];
    for (ci, c) in problem.constraints.iter().enumerate().filter(|(ci, c)| c.dim == 1 && unique(*ci)) {
        ranges[ci] = Some(b.len()..b.len() + 1);
        let shift = if c.strict { problem.strict_margin + settings.backoff } else { 0.0 };
        let f0: f64 = c.constant.iter().map(|e| e.2).sum();
        for (k, entries) in &c.coefficients {
            rows.push(b.len());
            cols.push(*k);
            vals.push(entries.iter().map(|e| e.2).sum());
        }
        b.push(-f0 - shift);
    }
    let n_nonneg = b.len();
    if n_nonneg > 0 {
        cones.push(SupportedConeT::NonnegativeConeT(n_nonneg));
    }

    // PSD rows: s = svec(-(F0 + shift I) - sum y_k F_k), upper triangle
    // column by column with off-diagonals scaled by sqrt(2).
    let sqrt2 = std::f64::consts::SQRT_2;
    for (ci, c) in problem.constraints.iter().enumerate().filter(|(ci, c)| c.dim > 1 && unique(*ci)) {
        let d = c.dim;
        let base = b.len();
        ranges[ci] = Some(base..base + d * (d + 1) / 2);
        let svec_index = |i: usize, j: usize| base + j * (j + 1) / 2 + i;
        let scale = |i: usize, j: usize| if i == j { 1.0 } else { sqrt2 };
        let shift = if c.strict { problem.strict_margin + settings.backoff } else { 0.0 };
        b.extend(std::iter::repeat(0.0).take(d * (d + 1) / 2));
        for i in 0..d {
            b[svec_index(i, i)] = -shift;
        }
        for &(r, col, v) in &c.constant {
            let (i, j) = (r as usize, col as usize);
            b[svec_index(i, j)] -= scale(i, j) * v;
        }
        for (k, entries) in &c.coefficients {
            for &(r, col, v) in entries {
                let (i, j) = (r as usize, col as usize);
                rows.push(svec_index(i, j));
                cols.push(*k);
                vals.push(scale(i, j) * v);
            }
        }
        cones.push(SupportedConeT::PSDTriangleConeT(d));
    }

    let m = b.len();
    let a = CscMatrix::new_from_triplets(m, n, rows, cols, vals);
    let p = CscMatrix::zeros((n, n));
    let mut q = vec![0.0; n];
    for (id, coef) in &problem.objective {
        q[problem.variables[id.0].offset] += coef;
    }

    let mut cs = DefaultSettings::<f64>::default();
    cs.verbose = settings.verbose;
    cs.max_iter = settings.max_iter;
    cs.tol_gap_abs = settings.tol;
    cs.tol_gap_rel = settings.tol;
    cs.tol_feas = settings.tol;
    cs.tol_infeas_abs = settings.tol;
    cs.tol_infeas_rel = settings.tol;
    cs.chordal_decomposition_enable = false;
    cs.direct_solve_method = "faer".to_string();
    cs.max_threads = 1;

    let mut solver = match DefaultSolver::new(&p, &q, &a, &b, &cones, cs) {
        Ok(s) => s,
        Err(e) => {
            return SdpSolution {
                status: SolveStatus::NumericalFailure,
                values: None,
                best_effort: false,
                objective: f64::NAN,
                stats: SolverStats { backend_status: format!("setup error: {e:?}"), ..Default::default() },
                infeasibility_blame: None,
            }
        }
    };
    solver.solve();
    let sol = &solver.solution;
    let info = &solver.info;
    let stats = SolverStats {
        iterations: sol.iterations,
        primal_residual: sol.r_prim,
        dual_residual: sol.r_dual,
        gap_abs: info.gap_abs,
        gap_rel: info.gap_rel,
        backend_status: format!("{:?}", sol.status),
    };
    let status = match sol.status {
        SolverStatus::Solved | SolverStatus::AlmostSolved => SolveStatus::Optimal,
        SolverStatus::PrimalInfeasible | SolverStatus::AlmostPrimalInfeasible => SolveStatus::Infeasible,
        SolverStatus::MaxIterations | SolverStatus::MaxTime => SolveStatus::IterationLimit,
        _ => SolveStatus::NumericalFailure,
    };
    let finite = sol.x.iter().all(|v| v.is_finite());
    match status {
        SolveStatus::Optimal => {
            let audit = check_coords(problem, &sol.x, settings.feasibility_tol);
            if audit.passes() {
                SdpSolution {
                    status,
                    values: Some(problem.unflatten(&sol.x)),
                    best_effort: false,
                    objective: problem.objective_value(&sol.x),
                    stats,
                    infeasibility_blame: None,
                }
            } else {
                log::warn!(
                    "solver reported {:?} but the audit found max eigenvalue {:e}",
                    sol.status,
                    audit.worst()
                );
                SdpSolution {
                    status: SolveStatus::NumericalFailure,
                    values: Some(problem.unflatten(&sol.x)),
                    best_effort: true,
                    objective: problem.objective_value(&sol.x),
                    stats,
                    infeasibility_blame: None,
                }
            }
        }
        SolveStatus::Infeasible => {
            let blame = representative
                .iter()
                .map(|&ci| ranges[ci].clone().map_or(0.0, |r| -r.map(|i| b[i] * sol.z[i]).sum::<f64>()))
                .collect();
            SdpSolution {
                status,
                values: None,
                best_effort: false,
                objective: f64::NAN,
                stats,
                infeasibility_blame: Some(blame),
            }
        }
        _ => SdpSolution {
            status,
            values: finite.then(|| problem.unflatten(&sol.x)),
            best_effort: finite,
            objective: if finite { problem.objective_value(&sol.x) } else { f64::NAN },
            stats,
            infeasibility_blame: None,
        },
    }
}

/// Index of the first constraint with identical data, for each constraint.
fn duplicate_map(constraints: &[LmiConstraint]) -> Vec<usize> {
    let key = |c: &LmiConstraint| {
        let bits = |e: &[Entry]| e.iter().map(|&(r, c, v)| (r, c, v.to_bits())).collect::<Vec<_>>();
        (
            c.dim,
            c.strict,
            bits(&c.constant),
            c.coefficients.iter().map(|(k, e)| (*k, bits(e))).collect::<Vec<_>>(),
        )
    };
    let mut seen = HashMap::new();
    constraints
        .iter()
        .enumerate()
        .map(|(i, c)| *seen.entry(key(c)).or_insert(i))
        .collect()
}

fn solve_constant(problem: &SdpProblem, settings: &SdpSettings) -> SdpSolution {
    let audit = check_coords(problem, &[], settings.feasibility_tol);
    let ok = audit.passes();
    SdpSolution {
        status: if ok { SolveStatus::Optimal } else { SolveStatus::Infeasible },
        values: ok.then(Assignment::new),
        best_effort: false,
        objective: 0.0,
        stats: SolverStats { backend_status: "no variables".into(), ..Default::default() },
        infeasibility_blame: (!ok).then(|| audit.max_eigenvalues.iter().map(|v| v.max(0.0)).collect()),
    }
}
