//! Affine LPV models over box-shaped parameter sets.
//!
//! A model stores, for each of the six system matrices, a constant term and
//! one coefficient per scheduling parameter, `M(rho) = M0 + sum_k rho_k Mk`.
//! Constraints that are affine in `rho` hold on the whole box as soon as they
//! hold at its vertices, which is what the synthesis layer relies on.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix_io::{self, conform, from_rows, to_rows};

/// Largest parameter dimension for which vertices are enumerated.
pub const MAX_VERTEX_DIM: usize = 24;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "BoxFile")]
pub struct ParamBox {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

#[derive(Deserialize)]
struct BoxFile {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl TryFrom<BoxFile> for ParamBox {
    type Error = Error;
    fn try_from(f: BoxFile) -> Result<Self> {
        ParamBox::new(f.lower, f.upper)
    }
}

impl ParamBox {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(Error::Dimension(format!(
                "box bounds have lengths {} and {}",
                lower.len(),
                upper.len()
            )));
        }
        for (i, (lo, hi)) in lower.iter().zip(&upper).enumerate() {
            if !(lo.is_finite() && hi.is_finite()) || lo > hi {
                return Err(Error::InvalidParameter(format!(
                    "box coordinate {i}: lower {lo} must not exceed upper {hi}"
                )));
            }
        }
        Ok(Self { lower, upper })
    }

    /// The zero-dimensional box of an LTI model.
    pub fn empty() -> Self {
        Self { lower: Vec::new(), upper: Vec::new() }
    }

    pub fn uniform(dim: usize, lower: f64, upper: f64) -> Result<Self> {
        Self::new(vec![lower; dim], vec![upper; dim])
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn contains(&self, rho: &[f64], tol: f64) -> bool {
        rho.len() == self.dim()
            && rho
                .iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(r, (lo, hi))| *r >= lo - tol && *r <= hi + tol)
    }

    /// All box vertices in lexicographic order (first coordinate most
    /// significant, lower bound before upper). Degenerate coordinates
    /// contribute a single value.
    pub fn vertices(&self) -> Result<Vec<DVector<f64>>> {
        let levels: Vec<Vec<f64>> = self
            .lower
            .iter()
            .zip(&self.upper)
            .map(|(&lo, &hi)| if lo == hi { vec![lo] } else { vec![lo, hi] })
            .collect();
        tensor_grid(&levels)
    }

    /// Uniform tensor grid with `density + 1` levels per coordinate, so that
    /// `density == 1` reproduces [`ParamBox::vertices`].
    pub fn grid(&self, density: usize) -> Result<Vec<DVector<f64>>> {
        if density == 0 {
            return Err(Error::InvalidParameter("grid density must be >= 1".into()));
        }
        let levels: Vec<Vec<f64>> = self
            .lower
            .iter()
            .zip(&self.upper)
            .map(|(&lo, &hi)| {
                if lo == hi {
                    vec![lo]
                } else {
                    (0..=density)
                        .map(|k| lo + (hi - lo) * k as f64 / density as f64)
                        .collect()
                }
            })
            .collect();
        tensor_grid(&levels)
    }

    /// Draws a point uniformly from the box.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        DVector::from_iterator(
            self.dim(),
            self.lower
                .iter()
                .zip(&self.upper)
                .map(|(&lo, &hi)| if lo == hi { lo } else { rng.gen_range(lo..=hi) }),
        )
    }
}

fn tensor_grid(levels: &[Vec<f64>]) -> Result<Vec<DVector<f64>>> {
    let active = levels.iter().filter(|l| l.len() > 1).count();
    let total = levels
        .iter()
        .try_fold(1usize, |acc, l| acc.checked_mul(l.len()));
    match total {
        Some(t) if active <= MAX_VERTEX_DIM && t <= 1 << MAX_VERTEX_DIM => {
            let mut out = Vec::with_capacity(t);
            let mut idx = vec![0usize; levels.len()];
            for _ in 0..t {
                out.push(DVector::from_iterator(
                    levels.len(),
                    idx.iter().zip(levels).map(|(&i, l)| l[i]),
                ));
                // odometer increment, last coordinate fastest
                for d in (0..levels.len()).rev() {
                    idx[d] += 1;
                    if idx[d] < levels[d].len() {
                        break;
                    }
                    idx[d] = 0;
                }
            }
            Ok(out)
        }
        _ => Err(Error::TooManyVertices { dim: active.max(MAX_VERTEX_DIM + 1), limit: MAX_VERTEX_DIM }),
    }
}

/// The six system matrices of the plant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum SystemMatrix {
    A,
    Bu,
    Bw,
    Cz,
    Du,
    Dw,
}

impl SystemMatrix {
    pub const ALL: [SystemMatrix; 6] = [
        SystemMatrix::A,
        SystemMatrix::Bu,
        SystemMatrix::Bw,
        SystemMatrix::Cz,
        SystemMatrix::Du,
        SystemMatrix::Dw,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SystemMatrix::A => "A",
            SystemMatrix::Bu => "B_u",
            SystemMatrix::Bw => "B_w",
            SystemMatrix::Cz => "C_z",
            SystemMatrix::Du => "D_u",
            SystemMatrix::Dw => "D_w",
        }
    }
}

/// Matrices of the plant at a fixed parameter value.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenSystem {
    pub a: DMatrix<f64>,
    pub b_u: DMatrix<f64>,
    pub b_w: DMatrix<f64>,
    pub c_z: DMatrix<f64>,
    pub d_u: DMatrix<f64>,
    pub d_w: DMatrix<f64>,
}

impl FrozenSystem {
    pub fn get(&self, which: SystemMatrix) -> &DMatrix<f64> {
        match which {
            SystemMatrix::A => &self.a,
            SystemMatrix::Bu => &self.b_u,
            SystemMatrix::Bw => &self.b_w,
            SystemMatrix::Cz => &self.c_z,
            SystemMatrix::Du => &self.d_u,
            SystemMatrix::Dw => &self.d_w,
        }
    }
}

/// Constant state-space realization `(A, B, C, D)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LtiSystem {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub d: DMatrix<f64>,
}

impl LtiSystem {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, c: DMatrix<f64>, d: DMatrix<f64>) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n
            || b.nrows() != n
            || c.ncols() != n
            || d.nrows() != c.nrows()
            || d.ncols() != b.ncols()
        {
            return Err(Error::Dimension(format!(
                "inconsistent realization: A {}x{}, B {}x{}, C {}x{}, D {}x{}",
                a.nrows(),
                a.ncols(),
                b.nrows(),
                b.ncols(),
                c.nrows(),
                c.ncols(),
                d.nrows(),
                d.ncols()
            )));
        }
        Ok(Self { a, b, c, d })
    }

    pub fn n_states(&self) -> usize {
        self.a.nrows()
    }
    pub fn n_inputs(&self) -> usize {
        self.b.ncols()
    }
    pub fn n_outputs(&self) -> usize {
        self.c.nrows()
    }
}

/// Which closed-loop transfer matrix to realize.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Channel {
    /// `w -> z`
    Performance,
    /// `w -> u_i` for the given (zero-based) actuator row.
    Actuator(usize),
}

/// Closed loop of a frozen plant under `u = K x`.
pub fn closed_loop(frozen: &FrozenSystem, k: &DMatrix<f64>, channel: Channel) -> Result<LtiSystem> {
    let n_x = frozen.a.nrows();
    let n_u = frozen.b_u.ncols();
    if k.nrows() != n_u || k.ncols() != n_x {
        return Err(Error::Dimension(format!(
            "gain is {}x{}, expected {n_u}x{n_x}",
            k.nrows(),
            k.ncols()
        )));
    }
    let a_cl = &frozen.a + &frozen.b_u * k;
    match channel {
        Channel::Performance => LtiSystem::new(
            a_cl,
            frozen.b_w.clone(),
            &frozen.c_z + &frozen.d_u * k,
            frozen.d_w.clone(),
        ),
        Channel::Actuator(i) => {
            if i >= n_u {
                return Err(Error::Dimension(format!("actuator {i} out of range (N_u = {n_u})")));
            }
            let n_w = frozen.b_w.ncols();
            LtiSystem::new(a_cl, frozen.b_w.clone(), k.rows(i, 1).into_owned(), DMatrix::zeros(1, n_w))
        }
    }
}

/// Affine LPV plant `x' = A x + B_u u + B_w w`, `z = C_z x + D_u u + D_w w`
/// with every matrix affine in the parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ModelFile", into = "ModelFile")]
pub struct AffineLpvModel {
    n_x: usize,
    n_u: usize,
    n_w: usize,
    n_z: usize,
    terms: BTreeMap<SystemMatrix, Vec<DMatrix<f64>>>,
    param_box: ParamBox,
    vertices: Option<Vec<DVector<f64>>>,
}

impl AffineLpvModel {
    /// Each argument holds the constant term followed by one coefficient per
    /// parameter of `param_box`.
    pub fn new(
        a: Vec<DMatrix<f64>>,
        b_u: Vec<DMatrix<f64>>,
        b_w: Vec<DMatrix<f64>>,
        c_z: Vec<DMatrix<f64>>,
        d_u: Vec<DMatrix<f64>>,
        d_w: Vec<DMatrix<f64>>,
        param_box: ParamBox,
    ) -> Result<Self> {
        let n_x = a.first().map_or(0, |m| m.nrows());
        let n_u = b_u.first().map_or(0, |m| m.ncols());
        let n_w = b_w.first().map_or(0, |m| m.ncols());
        let n_z = c_z.first().map_or(0, |m| m.nrows());
        let terms = BTreeMap::from([
            (SystemMatrix::A, a),
            (SystemMatrix::Bu, b_u),
            (SystemMatrix::Bw, b_w),
            (SystemMatrix::Cz, c_z),
            (SystemMatrix::Du, d_u),
            (SystemMatrix::Dw, d_w),
        ]);
        let model = Self { n_x, n_u, n_w, n_z, terms, param_box, vertices: None };
        model.validate()?;
        Ok(model)
    }

    /// Parameter-independent model (no scheduling parameters).
    pub fn lti(
        a: DMatrix<f64>,
        b_u: DMatrix<f64>,
        b_w: DMatrix<f64>,
        c_z: DMatrix<f64>,
        d_u: DMatrix<f64>,
        d_w: DMatrix<f64>,
    ) -> Result<Self> {
        Self::new(vec![a], vec![b_u], vec![b_w], vec![c_z], vec![d_u], vec![d_w], ParamBox::empty())
    }

    /// Replaces box-vertex enumeration by an explicit list of parameter
    /// points (for polytopes that are not boxes).
    pub fn with_vertices(mut self, vertices: Vec<DVector<f64>>) -> Result<Self> {
        if vertices.is_empty() {
            return Err(Error::InvalidParameter("explicit vertex list is empty".into()));
        }
        if let Some(v) = vertices.iter().find(|v| v.len() != self.n_rho()) {
            return Err(Error::Dimension(format!(
                "vertex of length {} for a model with {} parameters",
                v.len(),
                self.n_rho()
            )));
        }
        self.vertices = Some(vertices);
        Ok(self)
    }

    fn shape(&self, which: SystemMatrix) -> (usize, usize) {
        match which {
            SystemMatrix::A => (self.n_x, self.n_x),
            SystemMatrix::Bu => (self.n_x, self.n_u),
            SystemMatrix::Bw => (self.n_x, self.n_w),
            SystemMatrix::Cz => (self.n_z, self.n_x),
            SystemMatrix::Du => (self.n_z, self.n_u),
            SystemMatrix::Dw => (self.n_z, self.n_w),
        }
    }

    fn validate(&self) -> Result<()> {
        let n_terms = self.param_box.dim() + 1;
        for which in SystemMatrix::ALL {
            let (r, c) = self.shape(which);
            let terms = &self.terms[&which];
            if terms.len() != n_terms {
                return Err(Error::Dimension(format!(
                    "{} has {} terms, expected {} (constant + {} parameters)",
                    which.name(),
                    terms.len(),
                    n_terms,
                    n_terms - 1
                )));
            }
            for (k, m) in terms.iter().enumerate() {
                if m.shape() != (r, c) {
                    return Err(Error::Dimension(format!(
                        "{} term {k} is {}x{}, expected {r}x{c}",
                        which.name(),
                        m.nrows(),
                        m.ncols()
                    )));
                }
                if m.iter().any(|v| !v.is_finite()) {
                    return Err(Error::InvalidParameter(format!(
                        "{} term {k} has non-finite entries",
                        which.name()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn n_x(&self) -> usize {
        self.n_x
    }
    pub fn n_u(&self) -> usize {
        self.n_u
    }
    pub fn n_w(&self) -> usize {
        self.n_w
    }
    pub fn n_z(&self) -> usize {
        self.n_z
    }
    pub fn n_rho(&self) -> usize {
        self.param_box.dim()
    }
    pub fn param_box(&self) -> &ParamBox {
        &self.param_box
    }

    /// Constant term and parameter coefficients of one system matrix.
    pub fn terms(&self, which: SystemMatrix) -> &[DMatrix<f64>] {
        &self.terms[&which]
    }

    /// Evaluates all six matrices at `rho`. Points outside the box are
    /// allowed (simulations may leave it) but logged.
    pub fn affine_eval(&self, rho: &[f64]) -> Result<FrozenSystem> {
        if rho.len() != self.n_rho() {
            return Err(Error::Dimension(format!(
                "parameter vector has length {}, model has {} parameters",
                rho.len(),
                self.n_rho()
            )));
        }
        if !self.param_box.contains(rho, 1e-12) {
            log::warn!("evaluating LPV model outside its parameter box at {rho:?}");
        }
        let eval = |which: SystemMatrix| {
            let terms = &self.terms[&which];
            let mut m = terms[0].clone();
            for (coef, r) in terms[1..].iter().zip(rho) {
                if *r != 0.0 {
                    m += coef * *r;
                }
            }
            m
        };
        Ok(FrozenSystem {
            a: eval(SystemMatrix::A),
            b_u: eval(SystemMatrix::Bu),
            b_w: eval(SystemMatrix::Bw),
            c_z: eval(SystemMatrix::Cz),
            d_u: eval(SystemMatrix::Du),
            d_w: eval(SystemMatrix::Dw),
        })
    }

    /// Whether parameter `k` (zero-based) multiplies any nonzero coefficient.
    pub fn parameter_is_active(&self, k: usize) -> bool {
        SystemMatrix::ALL
            .iter()
            .any(|w| self.terms[w][k + 1].iter().any(|v| *v != 0.0))
    }

    /// Vertex set on which design constraints are imposed: the explicit list
    /// if one was supplied, otherwise the box vertices. Parameters with all
    /// coefficients zero are pinned to their lower bound and duplicates are
    /// dropped, so an LTI model yields a single vertex.
    pub fn design_vertices(&self) -> Result<Vec<DVector<f64>>> {
        let inactive: Vec<usize> = (0..self.n_rho()).filter(|&k| !self.parameter_is_active(k)).collect();
        let raw = match &self.vertices {
            Some(v) => v.clone(),
            None => {
                let lower = self.param_box.lower().to_vec();
                let mut upper = self.param_box.upper().to_vec();
                for &k in &inactive {
                    upper[k] = lower[k];
                }
                ParamBox::new(lower, upper)?.vertices()?
            }
        };
        let mut out: Vec<DVector<f64>> = Vec::with_capacity(raw.len());
        for mut v in raw {
            for &k in &inactive {
                v[k] = self.param_box.lower()[k];
            }
            if !out.contains(&v) {
                out.push(v);
            }
        }
        if out.is_empty() {
            return Err(Error::InvalidParameter("empty vertex set".into()));
        }
        Ok(out)
    }

    /// Model restricted to the listed actuators (columns of `B_u` and `D_u`).
    pub fn select_inputs(&self, keep: &[usize]) -> Result<Self> {
        if let Some(&bad) = keep.iter().find(|&&i| i >= self.n_u) {
            return Err(Error::Dimension(format!("actuator {bad} out of range (N_u = {})", self.n_u)));
        }
        let mut out = self.clone();
        for which in [SystemMatrix::Bu, SystemMatrix::Du] {
            let terms = out.terms.get_mut(&which).expect("all matrices present");
            for m in terms.iter_mut() {
                *m = m.select_columns(keep);
            }
        }
        out.n_u = keep.len();
        Ok(out)
    }

    /// Copy with every term of one matrix multiplied by `factor`.
    pub fn scaled(&self, which: SystemMatrix, factor: f64) -> Self {
        let mut out = self.clone();
        for m in out.terms.get_mut(&which).expect("all matrices present") {
            *m *= factor;
        }
        out
    }

    /// Largest absolute entry over all terms of one matrix.
    pub fn max_abs(&self, which: SystemMatrix) -> f64 {
        self.terms[&which].iter().map(matrix_io::max_abs).fold(0.0, f64::max)
    }
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    n_x: usize,
    n_u: usize,
    n_w: usize,
    n_z: usize,
    n_rho: usize,
    #[serde(rename = "box")]
    param_box: ParamBox,
    matrices: BTreeMap<String, Vec<Vec<Vec<f64>>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    vertices: Option<Vec<Vec<f64>>>,
}

impl From<AffineLpvModel> for ModelFile {
    fn from(m: AffineLpvModel) -> Self {
        let matrices = SystemMatrix::ALL
            .iter()
            .map(|w| (w.name().to_string(), m.terms[w].iter().map(to_rows).collect()))
            .collect();
        ModelFile {
            n_x: m.n_x,
            n_u: m.n_u,
            n_w: m.n_w,
            n_z: m.n_z,
            n_rho: m.param_box.dim(),
            param_box: m.param_box,
            matrices,
            vertices: m
                .vertices
                .map(|vs| vs.iter().map(|v| v.as_slice().to_vec()).collect()),
        }
    }
}

impl TryFrom<ModelFile> for AffineLpvModel {
    type Error = Error;

    fn try_from(f: ModelFile) -> Result<Self> {
        if f.param_box.dim() != f.n_rho {
            return Err(Error::Dimension(format!(
                "n_rho = {} but box has dimension {}",
                f.n_rho,
                f.param_box.dim()
            )));
        }
        let mut terms = BTreeMap::new();
        let mut model = AffineLpvModel {
            n_x: f.n_x,
            n_u: f.n_u,
            n_w: f.n_w,
            n_z: f.n_z,
            terms: BTreeMap::new(),
            param_box: f.param_box,
            vertices: None,
        };
        for which in SystemMatrix::ALL {
            let (r, c) = model.shape(which);
            let raw = f
                .matrices
                .get(which.name())
                .ok_or_else(|| Error::Dimension(format!("missing matrix {}", which.name())))?;
            let mats = raw
                .iter()
                .map(|rows| from_rows(rows).map(|m| conform(m, r, c)).map_err(Error::Dimension))
                .collect::<Result<Vec<_>>>()?;
            terms.insert(which, mats);
        }
        model.terms = terms;
        model.validate()?;
        match f.vertices {
            Some(vs) => model.with_vertices(vs.into_iter().map(DVector::from_vec).collect()),
            None => Ok(model),
        }
    }
}
