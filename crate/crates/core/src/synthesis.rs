//! Sparse-actuation state-feedback synthesis.
//!
//! A single quadratic Lyapunov matrix `X` and gain numerator `W` are sought
//! so that the closed loop under `K = W X^-1` meets the performance level
//! `gamma0` at every vertex of the parameter box, while `gamma_i` bounds
//! the H2 norm from the disturbance to actuator `i`. Minimizing a weighted
//! sum of the `gamma_i`, reweighting and pruning drives unneeded actuators
//! out of the design.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::NormKind;
use crate::error::{Error, Result};
use crate::lpv::{AffineLpvModel, FrozenSystem, SystemMatrix};
use crate::matrix_io;
use crate::sdp::{
    check_feasibility, solve_sdp, Assignment, ConstraintTag, FeasibilityReport, LmiBuilder, LmiConstraint, SdpProblem,
    SdpSettings, SolveStatus, SolverStats, VarId, DEFAULT_STRICT_MARGIN,
};

/// Largest accepted condition number of `X` when recovering the gain.
pub const MAX_CONDITION: f64 = 1e12;

/// How the Lyapunov bound `He(A X + B_u W) + B_w B_w' < 0` is imposed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BoundForm {
    /// `[[He(A X + B_u W), B_w], [B_w', -I]] < 0`, affine in the parameters
    /// for any `B_w`.
    Schur,
    /// The `N_x x N_x` form; only allowed when `B_w` is constant.
    Direct,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthesisSpec {
    pub kind: NormKind,
    pub gamma0: f64,
    /// Upper bound on every `gamma_i` (squared scale).
    pub gamma_ub: Option<f64>,
    /// Initial weights; all ones when absent.
    pub alpha: Option<Vec<f64>>,
    pub epsilon: f64,
    /// Reweighting passes after the initial solve.
    pub max_iterations: usize,
    pub tolerance: f64,
    /// Actuators with `sqrt(gamma_i)` below this are pruned.
    pub prune_threshold: f64,
    pub strict_margin: f64,
    pub gamma_min: f64,
    pub bound_form: BoundForm,
    pub solver: SdpSettings,
}

impl Default for SynthesisSpec {
    fn default() -> Self {
        Self {
            kind: NormKind::Hinf,
            gamma0: 0.15,
            gamma_ub: None,
            alpha: None,
            epsilon: 1e-4,
            max_iterations: 10,
            tolerance: 1e-4,
            prune_threshold: 1e-3,
            strict_margin: DEFAULT_STRICT_MARGIN,
            gamma_min: 1e-12,
            bound_form: BoundForm::Schur,
            solver: SdpSettings::default(),
        }
    }
}

impl SynthesisSpec {
    pub fn hinf(gamma0: f64) -> Self {
        Self { kind: NormKind::Hinf, gamma0, ..Self::default() }
    }

    pub fn h2(gamma0: f64) -> Self {
        Self { kind: NormKind::H2, gamma0, ..Self::default() }
    }

    /// Sets `gamma_ub` from a bound on `sqrt(gamma_i)`.
    pub fn with_gamma_ub_sqrt(mut self, s: f64) -> Self {
        self.gamma_ub = Some(s * s);
        self
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::InvalidParameter(format!("{name} must be positive and finite, got {v}")))
            }
        };
        positive("gamma0", self.gamma0)?;
        if let Some(ub) = self.gamma_ub {
            positive("gamma_ub", ub)?;
            if ub < self.gamma_min {
                return Err(Error::InvalidParameter(format!("gamma_ub {ub:e} is below gamma_min")));
            }
        }
        positive("epsilon", self.epsilon)?;
        positive("tolerance", self.tolerance)?;
        positive("solver.tol", self.solver.tol)?;
        if self.strict_margin < 0.0 || self.gamma_min < 0.0 || self.prune_threshold < 0.0 {
            return Err(Error::InvalidParameter(
                "strict_margin, gamma_min and prune_threshold must be nonnegative".into(),
            ));
        }
        if let Some(a) = &self.alpha {
            validate_alpha(a)?;
        }
        Ok(())
    }

    /// Initial weights for a model with `n_u` actuators.
    pub fn initial_alpha(&self, n_u: usize) -> Result<Vec<f64>> {
        match &self.alpha {
            Some(a) if a.len() != n_u => Err(Error::Dimension(format!("{} weights for {n_u} actuators", a.len()))),
            Some(a) => Ok(a.clone()),
            None => Ok(vec![1.0; n_u]),
        }
    }
}

fn validate_alpha(alpha: &[f64]) -> Result<()> {
    if let Some(bad) = alpha.iter().find(|a| !(a.is_finite() && **a > 0.0)) {
        return Err(Error::InvalidParameter(format!("weights must be positive and finite, got {bad}")));
    }
    Ok(())
}

/// Assembled SDP plus handles to its decision variables.
#[derive(Debug, Clone)]
pub struct Assembly {
    pub problem: SdpProblem,
    /// Parameter points the constraints were imposed at.
    pub points: Vec<DVector<f64>>,
    pub x: VarId,
    pub w: Option<VarId>,
    pub z: Option<VarId>,
    pub gamma: Vec<VarId>,
}

pub fn gamma_name(i: usize) -> String {
    format!("gamma_{}", i + 1)
}

/// Bounded-real H-infinity problem over the design vertices.
pub fn assemble_hinf(model: &AffineLpvModel, spec: &SynthesisSpec) -> Result<Assembly> {
    if spec.kind != NormKind::Hinf {
        return Err(Error::InvalidParameter("assemble_hinf needs an H-infinity spec".into()));
    }
    let alpha = spec.initial_alpha(model.n_u())?;
    assemble(model, spec, &alpha, &model.design_vertices()?)
}

/// H2 problem over the design vertices.
pub fn assemble_h2(model: &AffineLpvModel, spec: &SynthesisSpec) -> Result<Assembly> {
    if spec.kind != NormKind::H2 {
        return Err(Error::InvalidParameter("assemble_h2 needs an H2 spec".into()));
    }
    let alpha = spec.initial_alpha(model.n_u())?;
    assemble(model, spec, &alpha, &model.design_vertices()?)
}

/// Builds the problem of `spec.kind` with objective `alpha' Gamma`,
/// imposing the parameter-dependent constraints at `points`.
pub fn assemble(
    model: &AffineLpvModel,
    spec: &SynthesisSpec,
    alpha: &[f64],
    points: &[DVector<f64>],
) -> Result<Assembly> {
    spec.validate()?;
    validate_alpha(alpha)?;
    if alpha.len() != model.n_u() {
        return Err(Error::Dimension(format!("{} weights for {} actuators", alpha.len(), model.n_u())));
    }
    if points.is_empty() {
        return Err(Error::InvalidParameter("empty vertex set".into()));
    }
    if spec.kind == NormKind::H2 {
        let dw = model.max_abs(SystemMatrix::Dw);
        if dw > 0.0 {
            return Err(Error::H2RequiresZeroDw { max_abs: dw });
        }
    }
    let constant_bw = (1..=model.n_rho()).all(|k| model.terms(SystemMatrix::Bw)[k].iter().all(|v| *v == 0.0));
    if spec.bound_form == BoundForm::Direct && !constant_bw {
        return Err(Error::InvalidParameter("the direct bound form needs a parameter-independent B_w".into()));
    }

    let (n_x, n_u, n_z) = (model.n_x(), model.n_u(), model.n_z());
    let mut problem = SdpProblem::new().with_strict_margin(spec.strict_margin);
    let x = problem.add_symmetric("X", n_x)?;
    let w = if n_u > 0 { Some(problem.add_full("W", n_u, n_x)?) } else { None };
    let z = if spec.kind == NormKind::H2 { Some(problem.add_symmetric("Z", n_z)?) } else { None };
    let gamma = (0..n_u)
        .map(|i| problem.add_scalar(&gamma_name(i), Some(spec.gamma_min), spec.gamma_ub))
        .collect::<Result<Vec<_>>>()?;
    let objective: Vec<(VarId, f64)> = gamma.iter().copied().zip(alpha.iter().copied()).collect();
    problem.set_objective(&objective)?;

    let frozen = points
        .iter()
        .map(|p| model.affine_eval(p.as_slice()))
        .collect::<Result<Vec<_>>>()?;
    let vars = Vars { x, w, z, gamma: &gamma };
    let per_vertex: Vec<Vec<LmiConstraint>> = frozen
        .par_iter()
        .enumerate()
        .map(|(v, f)| vertex_constraints(&problem, spec, &vars, v, f))
        .collect::<Result<_>>()?;
    for c in per_vertex.into_iter().flatten() {
        problem.add_constraint(c)?;
    }

    if let Some(z) = z {
        // tr(Z) < gamma0^2
        let mut b = problem.lmi(ConstraintTag::new("trace"), &[1]);
        for i in 0..n_z {
            let e = DMatrix::from_fn(n_z, 1, |r, _| if r == i { 1.0 } else { 0.0 });
            b = b.term(0, 0, z, &e.transpose(), &e, 1.0);
        }
        let c = b.constant(0, 0, &DMatrix::from_element(1, 1, -spec.gamma0 * spec.gamma0)).build()?;
        problem.add_constraint(c)?;
    }
    if n_u == 0 {
        // with actuators, X > 0 is implied by the row constraints
        let c = problem.lmi(ConstraintTag::new("X_pos"), &[n_x]).var(0, 0, x, -1.0).build()?;
        problem.add_constraint(c)?;
    }
    Ok(Assembly { problem, points: points.to_vec(), x, w, z, gamma })
}

struct Vars<'a> {
    x: VarId,
    w: Option<VarId>,
    z: Option<VarId>,
    gamma: &'a [VarId],
}

fn vertex_constraints(
    problem: &SdpProblem,
    spec: &SynthesisSpec,
    vars: &Vars<'_>,
    v: usize,
    f: &FrozenSystem,
) -> Result<Vec<LmiConstraint>> {
    let n_x = f.a.nrows();
    let n_w = f.b_w.ncols();
    let n_z = f.c_z.nrows();
    let eye_x = DMatrix::identity(n_x, n_x);
    let (fam1, fam2, fam3) = match spec.kind {
        NormKind::Hinf => ("C1", "C2", "C3"),
        NormKind::H2 => ("D1", "D2", "D3"),
    };
    let mut out = Vec::new();

    // He(A X + B_u W) on diagonal block bi
    fn lyap<'a>(b: LmiBuilder<'a>, bi: usize, vars: &Vars<'_>, f: &FrozenSystem, eye: &DMatrix<f64>) -> LmiBuilder<'a> {
        let b = b.term(bi, bi, vars.x, &f.a, eye, 2.0);
        match vars.w {
            Some(w) => b.term(bi, bi, w, &f.b_u, eye, 2.0),
            None => b,
        }
    }
    // C_z X + D_u W on block (bi, bj)
    fn output<'a>(b: LmiBuilder<'a>, bi: usize, bj: usize, vars: &Vars<'_>, f: &FrozenSystem, eye: &DMatrix<f64>) -> LmiBuilder<'a> {
        let b = b.term(bi, bj, vars.x, &f.c_z, eye, 1.0);
        match vars.w {
            Some(w) => b.term(bi, bj, w, &f.d_u, eye, 1.0),
            None => b,
        }
    }

    match spec.kind {
        NormKind::Hinf => {
            let b = problem.lmi(ConstraintTag::new(fam1).at_vertex(v), &[n_x, n_w, n_z]);
            let b = lyap(b, 0, vars, f, &eye_x)
                .constant(0, 1, &f.b_w)
                .constant(1, 1, &(-spec.gamma0 * DMatrix::identity(n_w, n_w)))
                .constant(2, 1, &f.d_w)
                .constant(2, 2, &(-spec.gamma0 * DMatrix::identity(n_z, n_z)));
            out.push(output(b, 2, 0, vars, f, &eye_x).build()?);
        }
        NormKind::H2 => {
            let z = vars.z.expect("H2 problems declare Z");
            let b = problem.lmi(ConstraintTag::new(fam1).at_vertex(v), &[n_z, n_x]).var(0, 0, z, -1.0);
            let b = output(b, 0, 1, vars, f, &eye_x).var(1, 1, vars.x, -1.0);
            out.push(b.build()?);
        }
    }

    match spec.bound_form {
        BoundForm::Schur => {
            let b = problem.lmi(ConstraintTag::new(fam2).at_vertex(v), &[n_x, n_w]);
            let b = lyap(b, 0, vars, f, &eye_x)
                .constant(0, 1, &f.b_w)
                .constant(1, 1, &(-DMatrix::identity(n_w, n_w)));
            out.push(b.build()?);
        }
        BoundForm::Direct => {
            let b = problem.lmi(ConstraintTag::new(fam2).at_vertex(v), &[n_x]);
            let b = lyap(b, 0, vars, f, &eye_x).constant(0, 0, &(&f.b_w * f.b_w.transpose()));
            out.push(b.build()?);
        }
    }

    if let Some(w) = vars.w {
        let n_u = vars.gamma.len();
        for (i, g) in vars.gamma.iter().enumerate() {
            let e = DMatrix::from_fn(1, n_u, |_, c| if c == i { 1.0 } else { 0.0 });
            let c = problem
                .lmi(ConstraintTag::new(fam3).at_vertex(v).with_index(i), &[1, n_x])
                .scalar_identity(0, *g, -1.0)
                .term(0, 1, w, &e, &eye_x, 1.0)
                .var(1, 1, vars.x, -1.0)
                .build()?;
            out.push(c);
        }
    }
    Ok(out)
}

/// `K` with `K X = W`, via a Cholesky solve.
pub fn gain_from(x: &DMatrix<f64>, w: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = x.nrows();
    if x.ncols() != n || w.ncols() != n {
        return Err(Error::Dimension(format!(
            "X is {}x{}, W is {}x{}",
            x.nrows(),
            x.ncols(),
            w.nrows(),
            w.ncols()
        )));
    }
    if n == 0 {
        return Ok(DMatrix::zeros(w.nrows(), 0));
    }
    let sym = 0.5 * (x + x.transpose());
    let eig = sym.clone().symmetric_eigenvalues();
    let (lo, hi) = (eig.min(), eig.max());
    let condition = if lo > 0.0 { hi / lo } else { f64::INFINITY };
    if !(condition <= MAX_CONDITION) {
        return Err(Error::Singular { condition });
    }
    let chol = sym.clone().cholesky().ok_or(Error::Singular { condition })?;
    // X K' = W'
    let rhs = w.transpose();
    let mut kt = chol.solve(&rhs);
    let r = &rhs - &sym * &kt;
    kt += chol.solve(&r);
    Ok(kt.transpose())
}

/// Weights for the next reweighting pass, `1 / (eps + |gamma_i|)`.
pub fn reweight(gamma: &[f64], epsilon: f64) -> Vec<f64> {
    gamma.iter().map(|g| 1.0 / (epsilon + g.abs())).collect()
}

/// Independent audit of a solution: largest eigenvalue per design vertex.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Certificate {
    pub vertices: Vec<Vec<f64>>,
    /// Largest shifted eigenvalue over all constraints imposed at each vertex.
    pub vertex_max_eigenvalues: Vec<f64>,
    /// Constraints not tied to a vertex (trace bound, `X > 0`).
    pub global_max_eigenvalue: Option<f64>,
    /// Largest scalar bound violation (`> 0` means violated).
    pub bound_violation: f64,
    /// Tag of the constraint with the largest eigenvalue.
    pub worst_constraint: String,
    pub worst: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl Certificate {
    fn from_report(problem: &SdpProblem, points: &[DVector<f64>], report: &FeasibilityReport) -> Self {
        let mut per_vertex = vec![f64::NEG_INFINITY; points.len()];
        let mut global: Option<f64> = None;
        let mut worst_idx = 0;
        for (idx, (c, ev)) in problem.constraints().iter().zip(&report.max_eigenvalues).enumerate() {
            match c.tag.vertex {
                Some(v) => per_vertex[v] = per_vertex[v].max(*ev),
                None => global = Some(global.map_or(*ev, |g: f64| g.max(*ev))),
            }
            if *ev > report.max_eigenvalues[worst_idx] {
                worst_idx = idx;
            }
        }
        let bound_violation = report.bound_violations.iter().map(|(_, v)| *v).fold(f64::NEG_INFINITY, f64::max);
        Certificate {
            vertices: points.iter().map(|p| p.as_slice().to_vec()).collect(),
            vertex_max_eigenvalues: per_vertex,
            global_max_eigenvalue: global,
            bound_violation: if bound_violation.is_finite() { bound_violation } else { 0.0 },
            worst_constraint: problem.constraints().get(worst_idx).map_or_else(String::new, |c| c.tag.to_string()),
            worst: report.worst(),
            tolerance: report.tolerance,
            pass: report.passes(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesisResult {
    pub kind: NormKind,
    pub gamma0: f64,
    pub gamma_ub: Option<f64>,
    pub alpha: Vec<f64>,
    #[serde(with = "matrix_io::rows")]
    pub x: DMatrix<f64>,
    #[serde(with = "matrix_io::rows")]
    pub w: DMatrix<f64>,
    #[serde(with = "matrix_io::rows_opt", default, skip_serializing_if = "Option::is_none")]
    pub z: Option<DMatrix<f64>>,
    pub gamma: Vec<f64>,
    #[serde(with = "matrix_io::rows")]
    pub k: DMatrix<f64>,
    pub objective: f64,
    pub certificate: Certificate,
    pub status: SolveStatus,
    pub stats: SolverStats,
}

impl SynthesisResult {
    pub fn sqrt_gamma(&self) -> Vec<f64> {
        self.gamma.iter().map(|g| g.max(0.0).sqrt()).collect()
    }

    /// Actuators whose `sqrt(gamma_i)` reaches `threshold`.
    pub fn active(&self, threshold: f64) -> Vec<usize> {
        self.sqrt_gamma()
            .iter()
            .enumerate()
            .filter(|(_, s)| **s >= threshold)
            .map(|(i, _)| i)
            .collect()
    }

    fn assignment(&self) -> Assignment {
        let mut a = Assignment::new();
        a.insert("X".into(), self.x.clone());
        if self.w.nrows() > 0 {
            a.insert("W".into(), self.w.clone());
        }
        if let Some(z) = &self.z {
            a.insert("Z".into(), z.clone());
        }
        for (i, g) in self.gamma.iter().enumerate() {
            a.insert(gamma_name(i), DMatrix::from_element(1, 1, *g));
        }
        a
    }
}

fn failure_detail(problem: &SdpProblem, blame: Option<&[f64]>, values: Option<&Assignment>, tol: f64) -> String {
    if let Some(blame) = blame {
        if let Some((idx, _)) = blame
            .iter()
            .enumerate()
            .filter(|(_, b)| **b > 0.0)
            .max_by(|a, b| a.1.total_cmp(b.1))
        {
            return format!("most implicated constraint {}", problem.constraints()[idx].tag);
        }
    }
    if let Some(values) = values {
        if let Ok(report) = check_feasibility(problem, values, tol) {
            if let Some((idx, ev)) = report
                .max_eigenvalues
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
            {
                return format!(
                    "largest violation {ev:e} in constraint {} at the last iterate",
                    problem.constraints()[idx].tag
                );
            }
        }
    }
    String::from("no diagnostic available")
}

/// Problem solved in place of the H2 design: `B_w` divided by `gamma0` and
/// every variable divided by `gamma0^2`, which turns the trace bound into
/// `tr(Z) < 1`. The map is exact and the strictness margin is enlarged so
/// that the original constraints keep theirs.
fn normalized(model: &AffineLpvModel, spec: &SynthesisSpec) -> Option<(AffineLpvModel, SynthesisSpec, f64)> {
    if spec.kind != NormKind::H2 {
        return None;
    }
    let s = spec.gamma0 * spec.gamma0;
    let scaled_spec = SynthesisSpec {
        gamma0: 1.0,
        gamma_ub: spec.gamma_ub.map(|g| g / s),
        gamma_min: spec.gamma_min / s,
        strict_margin: spec.strict_margin / s.min(1.0),
        ..spec.clone()
    };
    Some((model.scaled(SystemMatrix::Bw, 1.0 / spec.gamma0), scaled_spec, s))
}

/// Solves the weighted problem `min alpha' Gamma` and recovers the gain.
/// The certificate is always evaluated on the original constraints.
pub fn solve_weighted(model: &AffineLpvModel, spec: &SynthesisSpec, alpha: &[f64]) -> Result<SynthesisResult> {
    let points = model.design_vertices()?;
    let asm = assemble(model, spec, alpha, &points)?;
    let scaled = normalized(model, spec);
    let solved_asm = match &scaled {
        Some((m, sp, _)) => assemble(m, sp, alpha, &points)?,
        None => asm.clone(),
    };
    let sol = solve_sdp(&solved_asm.problem, &spec.solver);
    let tol = spec.solver.feasibility_tol;
    let mut values = match (sol.status, sol.values) {
        (SolveStatus::Optimal, Some(v)) => v,
        (SolveStatus::Infeasible, _) => {
            let detail = failure_detail(&solved_asm.problem, sol.infeasibility_blame.as_deref(), None, tol);
            return Err(Error::Infeasible(format!("{} synthesis at gamma0 = {}: {detail}", spec.kind, spec.gamma0)));
        }
        (status, values) => {
            let detail = failure_detail(&solved_asm.problem, None, values.as_ref(), tol);
            return Err(Error::Numerical(format!(
                "solver ended with {status:?} ({}): {detail}",
                sol.stats.backend_status
            )));
        }
    };
    if let Some((_, _, s)) = scaled {
        for v in values.values_mut() {
            *v *= s;
        }
    }
    let x = values["X"].clone();
    let w = values.get("W").cloned().unwrap_or_else(|| DMatrix::zeros(0, model.n_x()));
    let gamma: Vec<f64> = (0..model.n_u()).map(|i| values[&gamma_name(i)][(0, 0)]).collect();
    let k = gain_from(&x, &w)?;
    let report = check_feasibility(&asm.problem, &values, tol)?;
    let certificate = Certificate::from_report(&asm.problem, &asm.points, &report);
    if !certificate.pass {
        log::warn!(
            "certificate audit failed: {:e} in {}",
            certificate.worst,
            certificate.worst_constraint
        );
    }
    Ok(SynthesisResult {
        kind: spec.kind,
        gamma0: spec.gamma0,
        gamma_ub: spec.gamma_ub,
        alpha: alpha.to_vec(),
        x,
        w,
        z: values.get("Z").cloned(),
        objective: alpha.iter().zip(&gamma).map(|(a, g)| a * g).sum(),
        gamma,
        k,
        certificate,
        status: sol.status,
        stats: sol.stats,
    })
}

/// Re-evaluates the constraints of `result` at arbitrary parameter points.
pub fn audit_at(
    model: &AffineLpvModel,
    spec: &SynthesisSpec,
    result: &SynthesisResult,
    points: &[DVector<f64>],
) -> Result<Certificate> {
    let asm = assemble(model, spec, &result.alpha, points)?;
    let report = check_feasibility(&asm.problem, &result.assignment(), spec.solver.feasibility_tol)?;
    Ok(Certificate::from_report(&asm.problem, points, &report))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub alpha: Vec<f64>,
    pub gamma: Vec<f64>,
    pub objective: f64,
    /// Actuators with `sqrt(gamma_i)` at or above the pruning threshold.
    pub active_count: usize,
    /// `max |Gamma^j - Gamma^(j-1)|`, absent for the first iteration.
    pub change: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SparseDesign {
    pub iterations: Vec<SynthesisResult>,
    pub history: Vec<IterationRecord>,
    pub converged: bool,
    /// Set when a later iteration failed and the loop stopped early.
    pub stopped_by: Option<String>,
}

impl SparseDesign {
    pub fn final_result(&self) -> &SynthesisResult {
        self.iterations.last().expect("a sparse design holds at least one iteration")
    }
}

/// Iteratively reweighted l1 minimization of `Gamma`.
pub fn reweighted_l1(model: &AffineLpvModel, spec: &SynthesisSpec) -> Result<SparseDesign> {
    spec.validate()?;
    let mut alpha = spec.initial_alpha(model.n_u())?;
    let mut iterations: Vec<SynthesisResult> = Vec::new();
    let mut history = Vec::new();
    let mut converged = false;
    let mut stopped_by = None;
    for j in 0..=spec.max_iterations {
        let result = match solve_weighted(model, spec, &alpha) {
            Ok(r) => r,
            Err(e) if j == 0 => return Err(e),
            Err(e) => {
                log::warn!("reweighting stopped at iteration {j}: {e}");
                stopped_by = Some(format!("iteration {j}: {e}"));
                break;
            }
        };
        let change = iterations.last().map(|prev| {
            prev.gamma
                .iter()
                .zip(&result.gamma)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max)
        });
        history.push(IterationRecord {
            iteration: j,
            alpha: alpha.clone(),
            gamma: result.gamma.clone(),
            objective: result.objective,
            active_count: result.active(spec.prune_threshold).len(),
            change,
        });
        log::info!(
            "reweighting iteration {j}: objective {:.6e}, {} active",
            result.objective,
            history[j].active_count
        );
        alpha = reweight(&result.gamma, spec.epsilon);
        iterations.push(result);
        if change.is_some_and(|c| c < spec.tolerance) {
            converged = true;
            break;
        }
    }
    Ok(SparseDesign { iterations, history, converged, stopped_by })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrunedDesign {
    /// Solution on the reduced model.
    pub result: SynthesisResult,
    /// Original index of each kept actuator.
    pub active: Vec<usize>,
    pub n_actuators: usize,
}

impl PrunedDesign {
    fn scatter_rows(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        let mut full = DMatrix::zeros(self.n_actuators, m.ncols());
        for (r, &i) in self.active.iter().enumerate() {
            full.set_row(i, &m.row(r));
        }
        full
    }

    /// Gain on the original actuator set, zero rows for pruned actuators.
    pub fn full_gain(&self) -> DMatrix<f64> {
        self.scatter_rows(&self.result.k)
    }

    pub fn full_w(&self) -> DMatrix<f64> {
        self.scatter_rows(&self.result.w)
    }

    /// `gamma_i` on the original actuator set, zero for pruned actuators.
    pub fn full_gamma(&self) -> Vec<f64> {
        let mut g = vec![0.0; self.n_actuators];
        for (r, &i) in self.active.iter().enumerate() {
            g[i] = self.result.gamma[r];
        }
        g
    }
}

/// Drops actuators with `sqrt(gamma_i)` below the threshold and re-solves
/// the reduced problem with unit weights.
pub fn prune_and_resolve(model: &AffineLpvModel, spec: &SynthesisSpec, design: &SynthesisResult) -> Result<PrunedDesign> {
    if design.gamma.len() != model.n_u() {
        return Err(Error::Dimension(format!(
            "design has {} actuators, model has {}",
            design.gamma.len(),
            model.n_u()
        )));
    }
    let active = design.active(spec.prune_threshold);
    let reduced = model.select_inputs(&active)?;
    let result = solve_weighted(&reduced, spec, &vec![1.0; active.len()]).map_err(|e| match e {
        Error::Infeasible(msg) => Error::Infeasible(format!(
            "pruned problem with actuators {:?}: {msg}",
            active.iter().map(|i| i + 1).collect::<Vec<_>>()
        )),
        other => other,
    })?;
    Ok(PrunedDesign { result, active, n_actuators: model.n_u() })
}

/// Controller file: full-size gain, the reduced-problem certificate and the
/// reweighting history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControllerArtifact {
    pub kind: NormKind,
    pub gamma0: f64,
    pub gamma_ub: Option<f64>,
    #[serde(rename = "K", with = "matrix_io::rows")]
    pub k: DMatrix<f64>,
    #[serde(rename = "X", with = "matrix_io::rows")]
    pub x: DMatrix<f64>,
    #[serde(rename = "W", with = "matrix_io::rows")]
    pub w: DMatrix<f64>,
    #[serde(rename = "Z", with = "matrix_io::rows_opt", default, skip_serializing_if = "Option::is_none")]
    pub z: Option<DMatrix<f64>>,
    /// Zero for pruned actuators.
    #[serde(rename = "Gamma")]
    pub gamma: Vec<f64>,
    /// Zero-based indices of the kept actuators.
    pub active_actuators: Vec<usize>,
    pub certificate: Certificate,
    pub iteration_history: Vec<IterationRecord>,
    pub converged: bool,
}

impl ControllerArtifact {
    pub fn new(design: &SparseDesign, pruned: &PrunedDesign) -> Self {
        let r = &pruned.result;
        Self {
            kind: r.kind,
            gamma0: r.gamma0,
            gamma_ub: r.gamma_ub,
            k: pruned.full_gain(),
            x: r.x.clone(),
            w: pruned.full_w(),
            z: r.z.clone(),
            gamma: pruned.full_gamma(),
            active_actuators: pruned.active.clone(),
            certificate: r.certificate.clone(),
            iteration_history: design.history.clone(),
            converged: design.converged,
        }
    }

    pub fn sqrt_gamma(&self) -> Vec<f64> {
        self.gamma.iter().map(|g| g.max(0.0).sqrt()).collect()
    }
}

/// Reweighting followed by pruning and the final unit-weight solve.
pub fn design(model: &AffineLpvModel, spec: &SynthesisSpec) -> Result<(SparseDesign, PrunedDesign)> {
    let sparse = reweighted_l1(model, spec)?;
    let pruned = prune_and_resolve(model, spec, sparse.final_result())?;
    Ok((sparse, pruned))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::{h2_norm, hinf_norm};
    use crate::lpv::{closed_loop, Channel, ParamBox};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn s(v: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, v)
    }

    fn scalar(a: f64, bu: f64) -> AffineLpvModel {
        AffineLpvModel::lti(s(a), s(bu), s(1.0), s(1.0), s(0.0), s(0.0)).unwrap()
    }

    #[test]
    fn gain_examples() {
        let w = DMatrix::from_row_slice(1, 2, &[4.0, 2.0]);
        assert_eq!(gain_from(&DMatrix::identity(2, 2), &w).unwrap(), w);
        let k = gain_from(&(2.0 * DMatrix::identity(2, 2)), &w).unwrap();
        assert!((k - DMatrix::from_row_slice(1, 2, &[2.0, 1.0])).amax() < 1e-15);
    }

    #[test]
    fn gain_residual_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for n in 2..9 {
            let g = DMatrix::<f64>::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
            let x = &g * g.transpose() + 0.1 * DMatrix::identity(n, n);
            let w = DMatrix::<f64>::from_fn(3, n, |_, _| rng.gen_range(-5.0..5.0));
            let k = gain_from(&x, &w).unwrap();
            assert!((&k * &x - &w).amax() <= 1e-9);
        }
    }

    #[test]
    fn gain_rejects_singular() {
        let x = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 1e-14]));
        assert!(matches!(gain_from(&x, &DMatrix::zeros(1, 2)), Err(Error::Singular { .. })));
    }

    #[test]
    fn reweight_examples() {
        assert!((reweight(&[0.0], 0.1)[0] - 10.0).abs() < 1e-12);
        let a = reweight(&[0.5, 0.0], 1e-4);
        assert!((a[0] - 1.0 / 0.5001).abs() < 1e-12);
        assert!((a[0] - 1.99960).abs() < 1e-5);
        assert!((a[1] - 10000.0).abs() < 1e-9);
    }

    #[test]
    fn toy_counts() {
        let m = scalar(1.0, 1.0);
        let asm = assemble_hinf(&m, &SynthesisSpec::hinf(2.0)).unwrap();
        let fams: Vec<&str> = asm.problem.constraints().iter().map(|c| c.tag.family.as_str()).collect();
        assert_eq!(fams, ["C1", "C2", "C3"]);
        let asm = assemble_h2(&m, &SynthesisSpec::h2(2.0)).unwrap();
        assert_eq!(asm.problem.constraints().len(), 4);
    }

    #[test]
    fn h2_rejects_feedthrough() {
        let m = AffineLpvModel::lti(s(-1.0), s(1.0), s(1.0), s(1.0), s(0.0), s(0.3)).unwrap();
        let e = assemble_h2(&m, &SynthesisSpec::h2(1.0)).unwrap_err();
        assert!(matches!(e, Error::H2RequiresZeroDw { .. }));
        assert!(e.to_string().contains("D_w = 0"));
    }

    #[test]
    fn scalar_hinf_toy_is_certified() {
        let m = scalar(1.0, 1.0);
        let r = solve_weighted(&m, &SynthesisSpec::hinf(2.0), &[1.0]).unwrap();
        assert!(r.certificate.pass, "{:?}", r.certificate);
        assert!(r.x[(0, 0)] > 0.0);
        let f = m.affine_eval(&[]).unwrap();
        let cl = closed_loop(&f, &r.k, Channel::Performance).unwrap();
        assert!(cl.a[(0, 0)] < 0.0);
        assert!(hinf_norm(&cl, 1e-9).unwrap() <= 2.0 * (1.0 + 1e-4));
        let u = closed_loop(&f, &r.k, Channel::Actuator(0)).unwrap();
        assert!(h2_norm(&u).unwrap() <= r.gamma[0].sqrt() * (1.0 + 1e-4));
    }

    /// Smallest feasible gamma_1 by bisection on pure feasibility problems.
    fn bisect_gamma1(m: &AffineLpvModel, spec: &SynthesisSpec) -> f64 {
        let feasible = |g: f64| {
            let mut sp = spec.clone();
            sp.gamma_ub = Some(g);
            solve_weighted(m, &sp, &[1e-9]).is_ok()
        };
        let (mut lo, mut hi) = (1e-6, 100.0);
        assert!(feasible(hi));
        while hi - lo > 1e-5 * hi {
            let mid = (lo * hi).sqrt();
            if feasible(mid) {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        hi
    }

    #[test]
    fn scalar_hinf_optimum_matches_bisection() {
        let m = scalar(1.0, 1.0);
        let spec = SynthesisSpec::hinf(2.0);
        let r = solve_weighted(&m, &spec, &[1.0]).unwrap();
        let g = bisect_gamma1(&m, &spec);
        assert!((r.gamma[0] - g).abs() <= 1e-4 * g.max(1e-3), "{} vs {g}", r.gamma[0]);
    }

    #[test]
    fn doubling_alpha_keeps_argmin() {
        let m = scalar(1.0, 1.0);
        let spec = SynthesisSpec::hinf(2.0);
        let a = solve_weighted(&m, &spec, &[1.0]).unwrap();
        let b = solve_weighted(&m, &spec, &[2.0]).unwrap();
        assert!((a.gamma[0] - b.gamma[0]).abs() < 1e-6);
        assert!((b.objective - 2.0 * a.objective).abs() < 2e-6);
    }

    #[test]
    fn open_loop_h2_threshold() {
        // A = -1 without control: feasible iff gamma0 > 1/sqrt(2)
        let m = scalar(-1.0, 0.0);
        let crit = std::f64::consts::FRAC_1_SQRT_2;
        assert!(solve_weighted(&m, &SynthesisSpec::h2(crit * 1.01), &[1.0]).is_ok());
        let e = solve_weighted(&m, &SynthesisSpec::h2(crit * 0.99), &[1.0]).unwrap_err();
        assert!(e.is_infeasible(), "{e}");
    }

    #[test]
    fn infeasible_reports_family() {
        let m = scalar(1.0, 1.0);
        let mut spec = SynthesisSpec::hinf(1e-9);
        spec.gamma_ub = Some(1.0);
        let e = solve_weighted(&m, &spec, &[1.0]).unwrap_err();
        assert!(e.is_infeasible(), "{e}");
        assert!(e.to_string().contains("constraint"), "{e}");
    }

    #[test]
    fn bound_forms_agree_for_constant_bw() {
        let m = two_state_lpv();
        let schur = solve_weighted(&m, &SynthesisSpec::h2(1.0), &[1.0, 1.0]).unwrap();
        let direct = SynthesisSpec { bound_form: BoundForm::Direct, ..SynthesisSpec::h2(1.0) };
        let direct = solve_weighted(&m, &direct, &[1.0, 1.0]).unwrap();
        assert!(
            (schur.objective - direct.objective).abs() < 1e-5 * schur.objective.max(1.0),
            "{} vs {}",
            schur.objective,
            direct.objective
        );
    }

    #[test]
    fn direct_form_rejects_varying_bw() {
        let mut m = two_state_lpv();
        let mut terms: Vec<DMatrix<f64>> = m.terms(SystemMatrix::Bw).to_vec();
        terms[1][(1, 0)] = 0.5;
        m = AffineLpvModel::new(
            m.terms(SystemMatrix::A).to_vec(),
            m.terms(SystemMatrix::Bu).to_vec(),
            terms,
            m.terms(SystemMatrix::Cz).to_vec(),
            m.terms(SystemMatrix::Du).to_vec(),
            m.terms(SystemMatrix::Dw).to_vec(),
            m.param_box().clone(),
        )
        .unwrap();
        let spec = SynthesisSpec { bound_form: BoundForm::Direct, ..SynthesisSpec::h2(1.0) };
        assert!(matches!(solve_weighted(&m, &spec, &[1.0, 1.0]), Err(Error::InvalidParameter(_))));
    }

    /// Unstable oscillator with stiffness varying in [1, 3], two actuators.
    fn two_state_lpv() -> AffineLpvModel {
        let z2 = DMatrix::zeros(2, 2);
        AffineLpvModel::new(
            vec![DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.2]), DMatrix::from_row_slice(2, 2, &[0.0, 0.0, -1.0, 0.0])],
            vec![DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 1.0, 0.3]), z2.clone()],
            vec![DMatrix::from_row_slice(2, 1, &[0.0, 1.0]), DMatrix::zeros(2, 1)],
            vec![DMatrix::identity(2, 2), z2.clone()],
            vec![z2.clone(), z2],
            vec![DMatrix::zeros(2, 1), DMatrix::zeros(2, 1)],
            ParamBox::new(vec![0.0], vec![2.0]).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn interior_points_inherit_vertex_certificate() {
        let m = two_state_lpv();
        for spec in [SynthesisSpec::hinf(1.0), SynthesisSpec::h2(1.0)] {
            let r = solve_weighted(&m, &spec, &[1.0, 1.0]).unwrap();
            assert!(r.certificate.pass);
            assert_eq!(r.certificate.vertex_max_eigenvalues.len(), 2);
            let mut rng = ChaCha8Rng::seed_from_u64(8);
            let pts: Vec<_> = (0..50).map(|_| m.param_box().sample(&mut rng)).collect();
            let audit = audit_at(&m, &spec, &r, &pts).unwrap();
            assert!(audit.pass, "{audit:?}");
        }
    }

    #[test]
    fn tighter_gamma_ub_never_lowers_objective() {
        let m = two_state_lpv();
        let loose = solve_weighted(&m, &SynthesisSpec::hinf(1.0).with_gamma_ub_sqrt(10.0), &[1.0, 1.0]).unwrap();
        let tight_spec = SynthesisSpec::hinf(1.0).with_gamma_ub_sqrt(1.2);
        if let Ok(tight) = solve_weighted(&m, &tight_spec, &[1.0, 1.0]) {
            assert!(tight.objective >= loose.objective - 1e-6);
            assert!(tight.gamma.iter().all(|g| *g <= 1.44 * (1.0 + 1e-6)));
        }
    }

    #[test]
    fn reweighting_history_and_prune() {
        let m = two_state_lpv();
        let spec = SynthesisSpec::hinf(1.0);
        let d = reweighted_l1(&m, &spec).unwrap();
        assert!(!d.history.is_empty() && d.history.len() <= spec.max_iterations + 1);
        for rec in &d.history {
            assert!(rec.alpha.iter().all(|a| a.is_finite() && *a > 0.0));
        }
        let p = prune_and_resolve(&m, &spec, d.final_result()).unwrap();
        assert!(p.result.certificate.pass);
        assert_eq!(p.full_gain().shape(), (2, 2));
        for (i, g) in p.full_gamma().iter().enumerate() {
            if !p.active.contains(&i) {
                assert_eq!(*g, 0.0);
                assert!(p.full_gain().row(i).iter().all(|v| *v == 0.0));
            }
        }
    }

    #[test]
    fn empty_prune_set_equals_unit_weight_solve() {
        let m = scalar(1.0, 1.0);
        let spec = SynthesisSpec::hinf(2.0);
        let base = solve_weighted(&m, &spec, &[1.0]).unwrap();
        let p = prune_and_resolve(&m, &spec, &base).unwrap();
        assert_eq!(p.active, vec![0]);
        assert!((p.result.gamma[0] - base.gamma[0]).abs() < 1e-9);
    }

    #[test]
    fn everything_pruned_on_stable_plant() {
        let m = scalar(-1.0, 1.0);
        let spec = SynthesisSpec::hinf(2.0);
        let mut fake = solve_weighted(&m, &spec, &[1.0]).unwrap();
        fake.gamma = vec![1e-12];
        let p = prune_and_resolve(&m, &spec, &fake).unwrap();
        assert!(p.active.is_empty());
        assert_eq!(p.result.k.shape(), (0, 1));
        assert!(p.result.certificate.pass);
        assert_eq!(p.full_gain(), DMatrix::zeros(1, 1));
    }

    #[test]
    fn artifact_round_trip() {
        let m = two_state_lpv();
        let spec = SynthesisSpec { max_iterations: 2, ..SynthesisSpec::h2(1.0) };
        let (d, p) = design(&m, &spec).unwrap();
        let art = ControllerArtifact::new(&d, &p);
        let text = serde_json::to_string(&art).unwrap();
        assert!(text.contains("\"K\"") && text.contains("\"Gamma\"") && text.contains("\"Z\""));
        let back: ControllerArtifact = serde_json::from_str(&text).unwrap();
        assert_eq!(back, art);
    }
}
