//! Flexible wing modeled as a chain of rigid bars joined by torsional springs.
//!
//! Coordinates are the absolute bar angles `theta_i` (measured from the
//! horizontal); joint `i` connects bar `i - 1` (the wall for `i = 1`) to bar
//! `i` and deflects by `theta_i - theta_{i-1}`. Each joint's restoring torque
//! is `-k1 d - k2 d^3`. Point forces (control and disturbance alike) act
//! normal to each bar at its center of mass. The inertia matrix is the one
//! of the straight configuration, so the cubic springs are the only
//! nonlinearity and the scheduling choice `rho_i = theta_i^2` embeds the
//! dynamics exactly into an affine LPV model.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lpv::{AffineLpvModel, ParamBox};

/// Output weights of the performance channel `z = (w_theta * theta, w_rate * theta_dot)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ZWeights {
    pub theta: f64,
    pub theta_dot: f64,
}

impl Default for ZWeights {
    fn default() -> Self {
        Self { theta: 1.0, theta_dot: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WingParams {
    /// bar mass, kg
    pub m: f64,
    /// number of bars
    pub n: usize,
    /// bar length, m
    pub l: f64,
    /// linear spring constant, N m / rad
    pub k1: f64,
    /// cubic spring constant, N m / rad^3
    pub k2: f64,
    /// bound on |theta_i| defining the parameter box [0, theta_max^2]^n
    pub theta_max: f64,
    #[serde(default)]
    pub z_weights: ZWeights,
}

impl Default for WingParams {
    fn default() -> Self {
        Self { m: 1.5, n: 5, l: 1.0, k1: 10.0, k2: 1.5, theta_max: 0.5, z_weights: ZWeights::default() }
    }
}

impl WingParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidParameter(what.to_string()));
        if !(self.m.is_finite() && self.m > 0.0) {
            return bad("m must be positive");
        }
        if self.n == 0 {
            return bad("n must be at least 1");
        }
        if !(self.l.is_finite() && self.l > 0.0) {
            return bad("l must be positive");
        }
        if !(self.k1.is_finite() && self.k1 > 0.0) {
            return bad("k1 must be positive");
        }
        if !(self.k2.is_finite() && self.k2 >= 0.0) {
            return bad("k2 must be non-negative");
        }
        if !(self.theta_max.is_finite() && self.theta_max > 0.0) {
            return bad("theta_max must be positive");
        }
        let w = self.z_weights;
        if !(w.theta.is_finite() && w.theta >= 0.0 && w.theta_dot.is_finite() && w.theta_dot >= 0.0) {
            return bad("z_weights must be finite and non-negative");
        }
        Ok(())
    }

    /// Same wing with a linear spring, the LTI design model.
    pub fn linearized(&self) -> Self {
        Self { k2: 0.0, ..self.clone() }
    }

    /// Distance along the chain used as lever arm of a force applied to the
    /// center of bar `bar` for coordinate `coord` (zero-based): a full bar
    /// length for every bar before it and half a length for the bar itself.
    pub fn lever_arm(&self, coord: usize, bar: usize) -> f64 {
        use std::cmp::Ordering;
        match coord.cmp(&bar) {
            Ordering::Less => self.l,
            Ordering::Equal => 0.5 * self.l,
            Ordering::Greater => 0.0,
        }
    }
}

/// Restoring generalized torques of the spring chain.
pub fn spring_torque(theta: &DVector<f64>, params: &WingParams) -> DVector<f64> {
    let n = theta.len();
    let mut tau = DVector::zeros(n);
    for i in 0..n {
        let prev = if i == 0 { 0.0 } else { theta[i - 1] };
        let d = theta[i] - prev;
        let joint = -params.k1 * d - params.k2 * d * d * d;
        tau[i] += joint;
        if i > 0 {
            tau[i - 1] -= joint;
        }
    }
    tau
}

/// Spring potential energy `sum_i (k1 d_i^2 / 2 + k2 d_i^4 / 4)`.
pub fn potential_energy(theta: &DVector<f64>, params: &WingParams) -> f64 {
    (0..theta.len())
        .map(|i| {
            let d = theta[i] - if i == 0 { 0.0 } else { theta[i - 1] };
            0.5 * params.k1 * d * d + 0.25 * params.k2 * d.powi(4)
        })
        .sum()
}

#[derive(Debug, Clone)]
pub struct WingPlant {
    params: WingParams,
    inertia: DMatrix<f64>,
    inertia_chol: Cholesky<f64, Dyn>,
    inertia_inv: DMatrix<f64>,
    stiffness: DMatrix<f64>,
    force_map: DMatrix<f64>,
}

/// Assembles inertia, linear stiffness and force map of the bar chain.
pub fn build_wing(params: &WingParams) -> Result<WingPlant> {
    params.validate()?;
    let n = params.n;
    let (m, l) = (params.m, params.l);

    let force_map = DMatrix::from_fn(n, n, |j, i| params.lever_arm(j, i));
    // M0 = sum over bars of m r r^T plus the rotational inertia about the center
    let mut inertia = m * &force_map * force_map.transpose();
    for i in 0..n {
        inertia[(i, i)] += m * l * l / 12.0;
    }

    let mut stiffness = DMatrix::zeros(n, n);
    for i in 0..n {
        stiffness[(i, i)] += params.k1;
        if i > 0 {
            stiffness[(i - 1, i - 1)] += params.k1;
            stiffness[(i, i - 1)] -= params.k1;
            stiffness[(i - 1, i)] -= params.k1;
        }
    }

    let inertia_chol = Cholesky::new(inertia.clone()).ok_or(Error::Singular { condition: f64::INFINITY })?;
    let inertia_inv = inertia_chol.inverse();
    Ok(WingPlant { params: params.clone(), inertia, inertia_chol, inertia_inv, stiffness, force_map })
}

impl WingPlant {
    pub fn params(&self) -> &WingParams {
        &self.params
    }
    pub fn n_bars(&self) -> usize {
        self.params.n
    }
    pub fn n_states(&self) -> usize {
        2 * self.params.n
    }
    pub fn inertia(&self) -> &DMatrix<f64> {
        &self.inertia
    }
    pub fn stiffness(&self) -> &DMatrix<f64> {
        &self.stiffness
    }
    pub fn force_map(&self) -> &DMatrix<f64> {
        &self.force_map
    }

    /// Performance output matrix `C_z = diag(w_theta I, w_rate I)`.
    pub fn output_map(&self) -> DMatrix<f64> {
        let n = self.params.n;
        let w = self.params.z_weights;
        DMatrix::from_fn(2 * n, 2 * n, |i, j| match (i == j, i < n) {
            (true, true) => w.theta,
            (true, false) => w.theta_dot,
            _ => 0.0,
        })
    }

    pub fn spring_torque(&self, theta: &DVector<f64>) -> DVector<f64> {
        spring_torque(theta, &self.params)
    }

    pub fn kinetic_energy(&self, theta_dot: &DVector<f64>) -> f64 {
        0.5 * theta_dot.dot(&(&self.inertia * theta_dot))
    }

    pub fn energy(&self, x: &DVector<f64>) -> f64 {
        let n = self.params.n;
        let theta = x.rows(0, n).into_owned();
        let rate = x.rows(n, n).into_owned();
        self.kinetic_energy(&rate) + potential_energy(&theta, &self.params)
    }

    /// Nonlinear vector field `x' = (theta', M0^{-1} (tau(theta) + L (u + w)))`.
    pub fn dynamics(&self, x: &DVector<f64>, u: &DVector<f64>, w: &DVector<f64>) -> Result<DVector<f64>> {
        let n = self.params.n;
        if x.len() != 2 * n || u.len() != n || w.len() != n {
            return Err(Error::Dimension(format!(
                "wing with {n} bars needs x of length {}, u and w of length {n}; got {}, {}, {}",
                2 * n,
                x.len(),
                u.len(),
                w.len()
            )));
        }
        let theta = x.rows(0, n).into_owned();
        let forcing = self.spring_torque(&theta) + &self.force_map * (u + w);
        let accel = self.inertia_chol.solve(&forcing);
        let mut dx = DVector::zeros(2 * n);
        dx.rows_mut(0, n).copy_from(&x.rows(n, n));
        dx.rows_mut(n, n).copy_from(&accel);
        Ok(dx)
    }

    /// Stiffness matrix `K(rho)` with `tau(theta) = -K(rho(theta)) theta`:
    /// the constant part and one coefficient per `rho_k = theta_k^2`.
    ///
    /// The cubic joint term expands as
    /// `(t_i - t_{i-1})^3 = rho_i (t_i - 3 t_{i-1}) + rho_{i-1} (3 t_i - t_{i-1})`.
    pub fn stiffness_terms(&self) -> Vec<DMatrix<f64>> {
        let n = self.params.n;
        let k2 = self.params.k2;
        let mut terms = vec![self.stiffness.clone()];
        terms.extend((0..n).map(|_| DMatrix::zeros(n, n)));
        for i in 0..n {
            // joint i pushes +c on coordinate i and -c on coordinate i - 1,
            // i.e. generalized torque -(e_i - e_{i-1}) * k2 * c
            let mut add = |param: usize, row_coef: &[(usize, f64)]| {
                for &(col, v) in row_coef {
                    terms[param + 1][(i, col)] += k2 * v;
                    if i > 0 {
                        terms[param + 1][(i - 1, col)] -= k2 * v;
                    }
                }
            };
            if i == 0 {
                add(0, &[(0, 1.0)]);
            } else {
                add(i, &[(i, 1.0), (i - 1, -3.0)]);
                add(i - 1, &[(i, 3.0), (i - 1, -1.0)]);
            }
        }
        terms
    }

    /// Quasi-LPV embedding with parameters `rho_i = theta_i^2` on the box
    /// `[0, theta_max^2]^n`.
    pub fn to_lpv(&self) -> Result<AffineLpvModel> {
        let n = self.params.n;
        let nx = 2 * n;
        let a_terms: Vec<DMatrix<f64>> = self
            .stiffness_terms()
            .iter()
            .enumerate()
            .map(|(k, stiff)| {
                let mut a = DMatrix::zeros(nx, nx);
                if k == 0 {
                    a.view_mut((0, n), (n, n)).fill_with_identity();
                }
                a.view_mut((n, 0), (n, n)).copy_from(&(-&self.inertia_inv * stiff));
                a
            })
            .collect();
        let mut b = DMatrix::zeros(nx, n);
        b.view_mut((n, 0), (n, n)).copy_from(&(&self.inertia_inv * &self.force_map));
        let with_zero_coefs = |m0: DMatrix<f64>| {
            let (r, c) = m0.shape();
            std::iter::once(m0).chain((0..n).map(|_| DMatrix::zeros(r, c))).collect::<Vec<_>>()
        };
        let rho_max = self.params.theta_max * self.params.theta_max;
        AffineLpvModel::new(
            a_terms,
            with_zero_coefs(b.clone()),
            with_zero_coefs(b),
            with_zero_coefs(self.output_map()),
            with_zero_coefs(DMatrix::zeros(nx, n)),
            with_zero_coefs(DMatrix::zeros(nx, n)),
            ParamBox::uniform(n, 0.0, rho_max)?,
        )
    }

    /// Scheduling parameters of a state.
    pub fn scheduling(&self, x: &DVector<f64>) -> DVector<f64> {
        x.rows(0, self.params.n).map(|t| t * t)
    }
}

/// Convenience: build the wing and emit its LPV model.
pub fn wing_to_lpv(params: &WingParams) -> Result<AffineLpvModel> {
    build_wing(params)?.to_lpv()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Kinetic energy from the exact planar kinematics of the bar chain.
    fn kinetic_energy_oracle(p: &WingParams, theta: &[f64], rate: &[f64]) -> f64 {
        let n = theta.len();
        let center = |th: &[f64], i: usize| {
            let (mut x, mut y) = (0.0, 0.0);
            for j in 0..i {
                x += p.l * th[j].cos();
                y += p.l * th[j].sin();
            }
            (x + 0.5 * p.l * th[i].cos(), y + 0.5 * p.l * th[i].sin())
        };
        let h = 1e-6;
        let mut ke = 0.0;
        for i in 0..n {
            let fwd: Vec<f64> = theta.iter().zip(rate).map(|(t, r)| t + h * r).collect();
            let bwd: Vec<f64> = theta.iter().zip(rate).map(|(t, r)| t - h * r).collect();
            let (xf, yf) = center(&fwd, i);
            let (xb, yb) = center(&bwd, i);
            let (vx, vy) = ((xf - xb) / (2.0 * h), (yf - yb) / (2.0 * h));
            ke += 0.5 * p.m * (vx * vx + vy * vy) + 0.5 * (p.m * p.l * p.l / 12.0) * rate[i] * rate[i];
        }
        ke
    }

    #[test]
    fn single_bar() {
        let p = WingParams { n: 1, ..Default::default() };
        let w = build_wing(&p).unwrap();
        assert!((w.inertia()[(0, 0)] - 0.5).abs() < 1e-15);
        assert_eq!(w.stiffness()[(0, 0)], 10.0);
        let tau = w.spring_torque(&DVector::from_element(1, 1.0));
        assert!((tau[0] + 11.5).abs() < 1e-14);

        let model = w.to_lpv().unwrap();
        let f = model.affine_eval(&[0.0]).unwrap();
        assert!((f.a[(1, 0)] + 10.0 * 3.0 / (1.5 * 1.0)).abs() < 1e-12);
        let rho = 0.2;
        let f = model.affine_eval(&[rho]).unwrap();
        assert!((f.a[(1, 0)] + (10.0 + 1.5 * rho) / 0.5).abs() < 1e-12);
    }

    #[test]
    fn inertia_matches_lagrangian_oracle() {
        let p = WingParams { n: 2, ..Default::default() };
        let w = build_wing(&p).unwrap();
        let theta = [0.0, 0.0];
        // polarization: M_jk = KE(e_j + e_k) - KE(e_j) - KE(e_k)
        let ke = |r: [f64; 2]| kinetic_energy_oracle(&p, &theta, &r);
        let m00 = 2.0 * ke([1.0, 0.0]);
        let m11 = 2.0 * ke([0.0, 1.0]);
        let m01 = ke([1.0, 1.0]) - ke([1.0, 0.0]) - ke([0.0, 1.0]);
        let oracle = DMatrix::from_row_slice(2, 2, &[m00, m01, m01, m11]);
        assert!((w.inertia() - &oracle).amax() < 1e-8, "{} vs {}", w.inertia(), oracle);
        // frozen values for the Table 1 bar: [[2.0, 0.75], [0.75, 0.5]]
        assert!((w.inertia() - DMatrix::from_row_slice(2, 2, &[2.0, 0.75, 0.75, 0.5])).amax() < 1e-14);
    }

    #[test]
    fn structure_invariants() {
        for n in 1..=6 {
            let w = build_wing(&WingParams { n, ..Default::default() }).unwrap();
            let m0 = w.inertia();
            assert_eq!(m0, &m0.transpose());
            assert!(m0.clone().symmetric_eigenvalues().min() > 0.0);
            let k = w.stiffness();
            assert_eq!(k, &k.transpose());
            assert!(k.clone().symmetric_eigenvalues().min() > -1e-12);
            for i in 0..n {
                for j in 0..n {
                    if i.abs_diff(j) > 1 {
                        assert_eq!(k[(i, j)], 0.0);
                    }
                    if j < i {
                        assert_eq!(w.force_map()[(i, j)], 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn spring_torque_is_negative_potential_gradient() {
        let p = WingParams { n: 3, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let theta = DVector::from_fn(3, |_, _| rng.gen_range(-0.8..0.8));
            let tau = spring_torque(&theta, &p);
            let h = 1e-6;
            for i in 0..3 {
                let mut fwd = theta.clone();
                let mut bwd = theta.clone();
                fwd[i] += h;
                bwd[i] -= h;
                let grad = (potential_energy(&fwd, &p) - potential_energy(&bwd, &p)) / (2.0 * h);
                let rel = (tau[i] + grad).abs() / grad.abs().max(1e-3);
                assert!(rel < 1e-6, "coord {i}: {} vs {}", tau[i], -grad);
            }
        }
        assert_eq!(spring_torque(&DVector::zeros(3), &p), DVector::zeros(3));
    }

    #[test]
    fn equilibrium_and_cancelling_inputs() {
        let w = build_wing(&WingParams::default()).unwrap();
        let z = DVector::zeros(5);
        assert_eq!(w.dynamics(&DVector::zeros(10), &z, &z).unwrap(), DVector::zeros(10));
        let u = DVector::from_vec(vec![0.3, -1.0, 2.0, 0.1, -0.7]);
        let dx = w.dynamics(&DVector::zeros(10), &u, &(-&u)).unwrap();
        assert_eq!(dx, DVector::zeros(10));
        assert!(w.dynamics(&DVector::zeros(9), &z, &z).is_err());
    }

    #[test]
    fn quasi_lpv_model_is_exact() {
        let p = WingParams::default();
        let w = build_wing(&p).unwrap();
        let model = w.to_lpv().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let z = DVector::zeros(5);
        for _ in 0..100 {
            let x = DVector::from_fn(10, |i, _| {
                if i < 5 {
                    rng.gen_range(-p.theta_max..=p.theta_max)
                } else {
                    rng.gen_range(-2.0..2.0)
                }
            });
            let rho = w.scheduling(&x);
            assert!(model.param_box().contains(rho.as_slice(), 0.0));
            let frozen = model.affine_eval(rho.as_slice()).unwrap();
            let lhs = &frozen.a * &x;
            let rhs = w.dynamics(&x, &z, &z).unwrap();
            assert!((lhs - rhs).amax() <= 1e-12);
        }
    }

    #[test]
    fn input_maps_match_dynamics() {
        let w = build_wing(&WingParams::default()).unwrap();
        let model = w.to_lpv().unwrap();
        let f = model.affine_eval(&[0.0; 5]).unwrap();
        let u = DVector::from_vec(vec![1.0, 0.0, -0.5, 0.0, 2.0]);
        let w_in = DVector::from_vec(vec![0.0, 0.4, 0.0, 0.0, -1.0]);
        let x = DVector::zeros(10);
        let expect = w.dynamics(&x, &u, &w_in).unwrap();
        let got = &f.b_u * &u + &f.b_w * &w_in;
        assert!((got - expect).amax() < 1e-12);
    }

    #[test]
    fn linear_spring_gives_lti_model() {
        let p = WingParams::default().linearized();
        let model = wing_to_lpv(&p).unwrap();
        for k in 0..5 {
            assert!(!model.parameter_is_active(k));
        }
        assert_eq!(model.design_vertices().unwrap().len(), 1);
        let lpv = wing_to_lpv(&WingParams::default()).unwrap();
        assert_eq!(lpv.design_vertices().unwrap().len(), 32);
        assert_eq!((lpv.n_x(), lpv.n_u(), lpv.n_w(), lpv.n_z(), lpv.n_rho()), (10, 5, 5, 10, 5));
    }

    #[test]
    fn parameter_validation() {
        let base = WingParams::default();
        for bad in [
            WingParams { m: 0.0, ..base.clone() },
            WingParams { n: 0, ..base.clone() },
            WingParams { l: -1.0, ..base.clone() },
            WingParams { k1: 0.0, ..base.clone() },
            WingParams { k2: -0.1, ..base.clone() },
            WingParams { theta_max: 0.0, ..base.clone() },
        ] {
            assert!(build_wing(&bad).is_err(), "{bad:?}");
        }
        assert!(build_wing(&WingParams { k2: 0.0, ..base }).is_ok());
    }
}
