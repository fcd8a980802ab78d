//! Norm computations that do not go through the SDP solver.
//!
//! H2 norms come from the controllability Gramian, H-infinity norms from
//! bisection on the imaginary-axis eigenvalues of the associated Hamiltonian
//! matrix. [`grid_verify`] sweeps frozen parameter values and compares the
//! closed-loop norms against the bounds a synthesis claims.

use nalgebra::{Complex, DMatrix, DVector, Schur};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lpv::{closed_loop, AffineLpvModel, Channel, LtiSystem};

/// Systems whose spectral abscissa is not below `-HURWITZ_MARGIN` are
/// treated as unstable.
pub const HURWITZ_MARGIN: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    Hinf,
    H2,
}

impl std::fmt::Display for NormKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            NormKind::Hinf => "hinf",
            NormKind::H2 => "h2",
        })
    }
}

/// Eigenvalues via the real Schur form. The QR iteration can stall on
/// matrices with paired spectra (Hamiltonians), so similar matrices
/// (transpose, index reversal) are tried before a looser deflation tolerance.
pub fn eigenvalues(a: &DMatrix<f64>) -> Result<Vec<Complex<f64>>> {
    if a.is_empty() {
        return Ok(Vec::new());
    }
    let n = a.nrows();
    let reversed = |m: &DMatrix<f64>| DMatrix::from_fn(n, n, |i, j| m[(n - 1 - i, n - 1 - j)]);
    let candidates = [a.clone(), a.transpose(), reversed(a), reversed(&a.transpose())];
    for eps in [f64::EPSILON, 1e-12] {
        for m in &candidates {
            if let Some(schur) = Schur::try_new(m.clone(), eps, 10_000) {
                return Ok(schur.complex_eigenvalues().iter().copied().collect());
            }
        }
    }
    Err(Error::Numerical("real Schur decomposition did not converge".into()))
}

pub fn spectral_abscissa(a: &DMatrix<f64>) -> Result<f64> {
    Ok(eigenvalues(a)?.iter().map(|l| l.re).fold(f64::NEG_INFINITY, f64::max))
}

pub fn ensure_hurwitz(a: &DMatrix<f64>) -> Result<()> {
    let abscissa = spectral_abscissa(a)?;
    if abscissa < -HURWITZ_MARGIN {
        Ok(())
    } else {
        Err(Error::NotHurwitz { abscissa })
    }
}

/// Solves `A P + P A' + Q = 0` for stable `A`.
pub fn lyapunov_solve(a: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    if a.ncols() != n || q.shape() != (n, n) {
        return Err(Error::Dimension(format!(
            "lyapunov: A is {}x{}, Q is {}x{}",
            a.nrows(),
            a.ncols(),
            q.nrows(),
            q.ncols()
        )));
    }
    ensure_hurwitz(a)?;
    if n == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    // column-major vec: vec(A P + P A') = (I (x) A + A (x) I) vec(P)
    let eye = DMatrix::<f64>::identity(n, n);
    let op = eye.kronecker(a) + a.kronecker(&eye);
    let rhs = DVector::from_iterator(n * n, q.iter().map(|v| -v));
    let lu = op.clone().lu();
    let mut x = lu
        .solve(&rhs)
        .ok_or(Error::Singular { condition: f64::INFINITY })?;
    // one step of iterative refinement
    let r = &rhs - &op * &x;
    if let Some(dx) = lu.solve(&r) {
        x += dx;
    }
    let p = DMatrix::from_column_slice(n, n, x.as_slice());
    Ok(0.5 * (&p + p.transpose()))
}

/// `sqrt(trace(C P C'))` with `P` the controllability Gramian.
pub fn h2_norm(sys: &LtiSystem) -> Result<f64> {
    if sys.d.iter().any(|v| *v != 0.0) {
        return Err(Error::NonzeroFeedthrough(format!(
            "D has max |entry| {:e}",
            sys.d.amax()
        )));
    }
    let p = lyapunov_solve(&sys.a, &(&sys.b * sys.b.transpose()))?;
    let val = (&sys.c * p * sys.c.transpose()).trace();
    Ok(val.max(0.0).sqrt())
}

/// `G(j omega) = C (j omega I - A)^{-1} B + D`.
pub fn frequency_response(sys: &LtiSystem, omega: f64) -> Result<DMatrix<Complex<f64>>> {
    let n = sys.n_states();
    let to_c = |m: &DMatrix<f64>| m.map(|v| Complex::new(v, 0.0));
    let mut res = DMatrix::<Complex<f64>>::from_diagonal_element(n, n, Complex::new(0.0, omega));
    res -= to_c(&sys.a);
    let x = res
        .lu()
        .solve(&to_c(&sys.b))
        .ok_or_else(|| Error::Singular { condition: f64::INFINITY })?;
    Ok(to_c(&sys.c) * x + to_c(&sys.d))
}

pub fn sigma_max(m: &DMatrix<Complex<f64>>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.singular_values().max()
}

fn sigma_max_real(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.singular_values().max()
}

/// Hankel singular values, `sqrt(eig(P Q))`.
pub fn hankel_singular_values(sys: &LtiSystem) -> Result<Vec<f64>> {
    let p = lyapunov_solve(&sys.a, &(&sys.b * sys.b.transpose()))?;
    let q = lyapunov_solve(&sys.a.transpose(), &(sys.c.transpose() * &sys.c))?;
    let mut hsv: Vec<f64> = eigenvalues(&(p * q))?.iter().map(|l| l.re.max(0.0).sqrt()).collect();
    hsv.sort_by(|a, b| b.total_cmp(a));
    Ok(hsv)
}

/// Frequencies `omega >= 0` at which the Hamiltonian of level `gamma` has
/// eigenvalues on the imaginary axis.
fn imaginary_axis_frequencies(sys: &LtiSystem, gamma: f64) -> Result<Vec<f64>> {
    let (a, b, c, d) = (&sys.a, &sys.b, &sys.c, &sys.d);
    let n = a.nrows();
    let m = b.ncols();
    let p = c.nrows();
    let r = DMatrix::<f64>::identity(m, m) * (gamma * gamma) - d.transpose() * d;
    let r_chol = r
        .cholesky()
        .ok_or_else(|| Error::Numerical(format!("gamma {gamma:e} does not exceed sigma_max(D)")))?;
    let r_inv = r_chol.inverse();
    let ae = a + b * &r_inv * d.transpose() * c;
    let g = b * &r_inv * b.transpose();
    let qe = -(c.transpose() * (DMatrix::identity(p, p) + d * &r_inv * d.transpose()) * c);
    let mut h = DMatrix::zeros(2 * n, 2 * n);
    h.view_mut((0, 0), (n, n)).copy_from(&ae);
    h.view_mut((0, n), (n, n)).copy_from(&g);
    h.view_mut((n, 0), (n, n)).copy_from(&qe);
    h.view_mut((n, n), (n, n)).copy_from(&(-ae.transpose()));
    let scale = h.norm().max(1.0);
    let mut out: Vec<f64> = eigenvalues(&h)?
        .iter()
        .filter(|l| l.re.abs() <= 1e-8 * scale && l.im >= 0.0)
        .map(|l| l.im)
        .collect();
    out.sort_by(f64::total_cmp);
    Ok(out)
}

/// H-infinity norm to relative accuracy `tol`; returns the certified upper
/// end of the final bracket.
pub fn hinf_norm(sys: &LtiSystem, tol: f64) -> Result<f64> {
    ensure_hurwitz(&sys.a)?;
    let d_norm = sigma_max_real(&sys.d);
    if sys.n_states() == 0 || sys.b.iter().all(|v| *v == 0.0) || sys.c.iter().all(|v| *v == 0.0) {
        return Ok(d_norm);
    }
    let hsv = hankel_singular_values(sys)?;
    let dc = sigma_max(&frequency_response(sys, 0.0)?);
    let mut lb = d_norm.max(dc).max(hsv[0]);
    let mut ub = d_norm + 2.0 * hsv.iter().sum::<f64>();
    ub = ub.max(lb * (1.0 + tol));
    // doubling guards against rounding in the Hankel bound
    let mut guard = 0;
    while !imaginary_axis_frequencies(sys, ub)?.is_empty() {
        lb = lb.max(ub);
        ub *= 2.0;
        guard += 1;
        if guard > 60 {
            return Err(Error::Numerical("could not bracket the H-infinity norm".into()));
        }
    }
    if lb <= 0.0 {
        return Ok(ub);
    }
    for _ in 0..200 {
        if ub - lb <= tol * lb {
            break;
        }
        let gamma = 0.5 * (lb + ub);
        let freqs = imaginary_axis_frequencies(sys, gamma)?;
        if freqs.is_empty() {
            ub = gamma;
            continue;
        }
        // evaluate at the crossings and the midpoints between them; the
        // largest value is a lower bound that usually lands near the peak
        let mut probes = freqs.clone();
        probes.extend(freqs.windows(2).map(|w| 0.5 * (w[0] + w[1])));
        let mut best = 0.0_f64;
        for w in probes {
            best = best.max(sigma_max(&frequency_response(sys, w)?));
        }
        if best >= gamma * (1.0 - 1e-9) {
            lb = lb.max(best).min(ub);
        } else {
            // no frequency attains gamma: the crossings were rounding noise
            ub = gamma;
        }
    }
    Ok(ub)
}

/// Norm bounds a synthesis claims for a gain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClaimedBounds {
    pub kind: NormKind,
    pub gamma0: f64,
    /// `gamma_i`; actuator `i` is claimed to satisfy `||G_ui||_2 <= sqrt(gamma_i)`.
    pub gamma: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    /// `density + 1` levels per parameter; 1 means vertices only.
    pub density: usize,
    pub random_samples: usize,
    pub seed: u64,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self { density: 1, random_samples: 50, seed: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleKind {
    Vertex,
    Grid,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelNorm {
    /// `z` or `u<i>` (one-based actuator number)
    pub channel: String,
    pub norm: Option<f64>,
    pub bound: f64,
    /// `bound * (1 + tol) - norm`, negative when violated
    pub margin: Option<f64>,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplePoint {
    pub rho: Vec<f64>,
    pub kind: SampleKind,
    pub stable: bool,
    pub channels: Vec<ChannelNorm>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormReport {
    pub kind: NormKind,
    pub tolerance: f64,
    pub points: Vec<SamplePoint>,
    /// Worst performance-channel norm over all stable samples.
    pub worst_performance: f64,
    /// Worst actuator-channel H2 norm per actuator.
    pub worst_actuator: Vec<f64>,
    pub pass: bool,
}

impl NormReport {
    /// One CSV row per sample point and channel.
    pub fn to_csv(&self) -> String {
        let n_rho = self.points.first().map_or(0, |p| p.rho.len());
        let mut s = String::new();
        for k in 0..n_rho {
            s.push_str(&format!("rho_{},", k + 1));
        }
        s.push_str("sample,stable,channel,norm,bound,margin,pass\n");
        let fmt = |v: Option<f64>| v.map_or(String::from("nan"), |x| x.to_string());
        for p in &self.points {
            let rho: String = p.rho.iter().map(|r| format!("{r},")).collect();
            let kind = match p.kind {
                SampleKind::Vertex => "vertex",
                SampleKind::Grid => "grid",
                SampleKind::Random => "random",
            };
            for c in &p.channels {
                s.push_str(&format!(
                    "{rho}{kind},{},{},{},{},{},{}\n",
                    p.stable,
                    c.channel,
                    fmt(c.norm),
                    c.bound,
                    fmt(c.margin),
                    c.pass
                ));
            }
        }
        s
    }
}

/// Relative accuracy of H-infinity evaluations inside [`grid_verify`].
const GRID_HINF_TOL: f64 = 1e-7;

fn evaluate_point(
    model: &AffineLpvModel,
    gain: &DMatrix<f64>,
    bounds: &ClaimedBounds,
    rho: &[f64],
    kind: SampleKind,
    tol: f64,
) -> SamplePoint {
    let fail = |note: String| SamplePoint {
        rho: rho.to_vec(),
        kind,
        stable: false,
        channels: Vec::new(),
        note: Some(note),
    };
    let frozen = match model.affine_eval(rho) {
        Ok(f) => f,
        Err(e) => return fail(e.to_string()),
    };
    let perf = match closed_loop(&frozen, gain, Channel::Performance) {
        Ok(s) => s,
        Err(e) => return fail(e.to_string()),
    };
    match spectral_abscissa(&perf.a) {
        Ok(a) if a < -HURWITZ_MARGIN => {}
        Ok(a) => return fail(format!("closed loop not Hurwitz (spectral abscissa {a:e})")),
        Err(e) => return fail(e.to_string()),
    }
    let judge = |channel: String, norm: Result<f64>, bound: f64| match norm {
        Ok(n) => {
            let margin = bound * (1.0 + tol) - n;
            ChannelNorm { channel, norm: Some(n), bound, margin: Some(margin), pass: margin >= 0.0 }
        }
        Err(_) => ChannelNorm { channel, norm: None, bound, margin: None, pass: false },
    };
    let mut channels = Vec::with_capacity(1 + gain.nrows());
    let perf_norm = match bounds.kind {
        NormKind::Hinf => hinf_norm(&perf, GRID_HINF_TOL),
        NormKind::H2 => h2_norm(&perf),
    };
    channels.push(judge("z".into(), perf_norm, bounds.gamma0));
    for i in 0..gain.nrows() {
        let norm = closed_loop(&frozen, gain, Channel::Actuator(i)).and_then(|s| h2_norm(&s));
        let bound = bounds.gamma.get(i).map_or(f64::NAN, |g| g.max(0.0).sqrt());
        channels.push(judge(format!("u{}", i + 1), norm, bound));
    }
    SamplePoint { rho: rho.to_vec(), kind, stable: true, channels, note: None }
}

/// Evaluates the closed-loop norms at every design vertex, on a uniform
/// grid and at random interior points, and compares them to the claimed
/// bounds with relative tolerance `tol`. Failures are report entries.
pub fn grid_verify(
    model: &AffineLpvModel,
    gain: &DMatrix<f64>,
    bounds: &ClaimedBounds,
    grid: &GridSpec,
    tol: f64,
) -> Result<NormReport> {
    if gain.shape() != (model.n_u(), model.n_x()) {
        return Err(Error::Dimension(format!(
            "gain is {}x{}, model needs {}x{}",
            gain.nrows(),
            gain.ncols(),
            model.n_u(),
            model.n_x()
        )));
    }
    if bounds.gamma.len() != model.n_u() {
        return Err(Error::Dimension(format!(
            "{} actuator bounds for {} actuators",
            bounds.gamma.len(),
            model.n_u()
        )));
    }
    let mut samples: Vec<(DVector<f64>, SampleKind)> = model
        .design_vertices()?
        .into_iter()
        .map(|v| (v, SampleKind::Vertex))
        .collect();
    let pin = |mut v: DVector<f64>| {
        for k in 0..model.n_rho() {
            if !model.parameter_is_active(k) {
                v[k] = model.param_box().lower()[k];
            }
        }
        v
    };
    if grid.density > 1 {
        for p in model.param_box().grid(grid.density)? {
            let p = pin(p);
            if !samples.iter().any(|(q, _)| *q == p) {
                samples.push((p, SampleKind::Grid));
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(grid.seed);
    for _ in 0..grid.random_samples {
        samples.push((pin(model.param_box().sample(&mut rng)), SampleKind::Random));
    }

    let points: Vec<SamplePoint> = samples
        .par_iter()
        .map(|(rho, kind)| evaluate_point(model, gain, bounds, rho.as_slice(), *kind, tol))
        .collect();

    let mut worst_performance = 0.0_f64;
    let mut worst_actuator = vec![0.0_f64; model.n_u()];
    let mut pass = true;
    for p in &points {
        pass &= p.stable && p.channels.iter().all(|c| c.pass);
        for (idx, c) in p.channels.iter().enumerate() {
            let Some(n) = c.norm else { continue };
            if idx == 0 {
                worst_performance = worst_performance.max(n);
            } else {
                worst_actuator[idx - 1] = worst_actuator[idx - 1].max(n);
            }
        }
    }
    Ok(NormReport { kind: bounds.kind, tolerance: tol, points, worst_performance, worst_actuator, pass })
}
