//! Fixed-step simulation of the nonlinear wing under state feedback and a
//! seeded gust disturbance `w_i(t) = a eta_i + s sin(omega t)`.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix_io;
use crate::wing::WingPlant;

/// States with an entry above this magnitude count as diverged.
pub const DIVERGENCE_LIMIT: f64 = 1e8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DisturbanceConfig {
    /// Noise amplitude `a`; `eta` is uniform on `[-1, 1]`.
    pub amplitude: f64,
    /// Sinusoid frequency, rad/s.
    pub frequency: f64,
    /// Sinusoid amplitude `s`; 0 disables the gust.
    pub sine_amplitude: f64,
    /// Independent noise per bar; otherwise one draw is shared.
    pub independent: bool,
}

impl Default for DisturbanceConfig {
    fn default() -> Self {
        Self { amplitude: 0.3, frequency: 0.005, sine_amplitude: 1.0, independent: true }
    }
}

impl DisturbanceConfig {
    pub fn none() -> Self {
        Self { amplitude: 0.0, sine_amplitude: 0.0, ..Self::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub dt: f64,
    pub horizon: f64,
    /// Initial state `(theta, theta_dot)`; `theta_i = 0.1`, `theta_dot = 0` when absent.
    pub x0: Option<Vec<f64>>,
    pub seed: u64,
    pub disturbance: DisturbanceConfig,
    /// Keep every `record_every`-th step (and the last one) in the trajectory.
    pub record_every: usize,
    /// Band for the settling time, as a fraction of the peak deflection.
    pub settling_band: f64,
    /// State-feedback gain `u = K x`; open loop when absent.
    #[serde(with = "matrix_io::rows_opt", skip_serializing_if = "Option::is_none")]
    pub gain: Option<DMatrix<f64>>,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            dt: 1e-3,
            horizon: 400.0,
            x0: None,
            seed: 0,
            disturbance: DisturbanceConfig::default(),
            record_every: 50,
            settling_band: 0.02,
            gain: None,
        }
    }
}

impl SimConfig {
    pub fn validate(&self, plant: &WingPlant) -> Result<()> {
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return Err(Error::InvalidParameter(format!("dt must be positive, got {}", self.dt)));
        }
        if !(self.horizon.is_finite() && self.horizon >= self.dt) {
            return Err(Error::InvalidParameter(format!("horizon {} must be at least dt", self.horizon)));
        }
        if self.record_every == 0 {
            return Err(Error::InvalidParameter("record_every must be at least 1".into()));
        }
        if !(self.settling_band > 0.0 && self.settling_band < 1.0) {
            return Err(Error::InvalidParameter("settling_band must lie in (0, 1)".into()));
        }
        let nx = plant.n_states();
        if let Some(x0) = &self.x0 {
            if x0.len() != nx {
                return Err(Error::Dimension(format!("x0 has {} entries, wing needs {nx}", x0.len())));
            }
        }
        if let Some(k) = &self.gain {
            if k.shape() != (plant.n_bars(), nx) {
                return Err(Error::Dimension(format!(
                    "gain is {}x{}, wing needs {}x{nx}",
                    k.nrows(),
                    k.ncols(),
                    plant.n_bars()
                )));
            }
        }
        Ok(())
    }

    pub fn initial_state(&self, plant: &WingPlant) -> DVector<f64> {
        match &self.x0 {
            Some(x0) => DVector::from_column_slice(x0),
            None => {
                let n = plant.n_bars();
                DVector::from_fn(2 * n, |i, _| if i < n { 0.1 } else { 0.0 })
            }
        }
    }
}

/// One disturbance vector at time `t`, drawing fresh noise from `rng`.
pub fn disturbance_sample<R: Rng + ?Sized>(t: f64, rng: &mut R, cfg: &DisturbanceConfig, n: usize) -> DVector<f64> {
    let gust = cfg.sine_amplitude * (cfg.frequency * t).sin();
    if cfg.independent {
        DVector::from_fn(n, |_, _| cfg.amplitude * rng.gen_range(-1.0..=1.0) + gust)
    } else {
        let eta: f64 = rng.gen_range(-1.0..=1.0);
        DVector::from_element(n, cfg.amplitude * eta + gust)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// `max_t |u_i(t)|` per actuator; zeros in open loop.
    pub u_inf: Vec<f64>,
    /// Earliest time after which `max_i |theta_i|` stays within the band;
    /// absent when the last sample is outside it.
    pub settling_time: Option<f64>,
    /// Peak of `max_i |theta_i|`.
    pub overshoot: f64,
    pub rms_z: f64,
    pub settling_band: f64,
    pub diverged: bool,
    pub box_violation_steps: usize,
    pub first_box_violation: Option<f64>,
    pub steps: usize,
}

/// Earliest sample time after which `|values|` stays within
/// `band_fraction * max |values|`; `None` if the final sample is outside.
pub fn settling_time(times: &[f64], values: &[f64], band_fraction: f64) -> Option<f64> {
    let peak = values.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let band = band_fraction * peak;
    match values.iter().rposition(|v| v.abs() > band) {
        None => times.first().copied(),
        Some(last) if last + 1 < times.len() => Some(times[last + 1]),
        Some(_) => None,
    }
}

/// Streams samples into the metrics.
struct MetricsAccumulator {
    times: Vec<f64>,
    peaks: Vec<f64>,
    u_inf: Vec<f64>,
    z_sq: f64,
    box_violation_steps: usize,
    first_box_violation: Option<f64>,
}

impl MetricsAccumulator {
    fn new(n_u: usize) -> Self {
        Self {
            times: Vec::new(),
            peaks: Vec::new(),
            u_inf: vec![0.0; n_u],
            z_sq: 0.0,
            box_violation_steps: 0,
            first_box_violation: None,
        }
    }

    fn push(&mut self, t: f64, theta: &[f64], z: &DVector<f64>, u: Option<&DVector<f64>>, violation: bool) {
        self.times.push(t);
        self.peaks.push(theta.iter().fold(0.0_f64, |m, v| m.max(v.abs())));
        if let Some(u) = u {
            for (m, v) in self.u_inf.iter_mut().zip(u.iter()) {
                *m = m.max(v.abs());
            }
        }
        self.z_sq += z.norm_squared();
        if violation {
            self.box_violation_steps += 1;
            self.first_box_violation.get_or_insert(t);
        }
    }

    fn finish(self, band: f64, diverged: bool) -> Result<Metrics> {
        if self.times.is_empty() {
            return Err(Error::InvalidParameter("empty trajectory".into()));
        }
        Ok(Metrics {
            settling_time: settling_time(&self.times, &self.peaks, band),
            overshoot: self.peaks.iter().copied().fold(0.0, f64::max),
            rms_z: (self.z_sq / self.times.len() as f64).sqrt(),
            u_inf: self.u_inf,
            settling_band: band,
            diverged,
            box_violation_steps: self.box_violation_steps,
            first_box_violation: self.first_box_violation,
            steps: self.times.len(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub n_bars: usize,
    pub times: Vec<f64>,
    pub states: Vec<DVector<f64>>,
    /// Absent in open loop.
    pub inputs: Option<Vec<DVector<f64>>>,
    /// Disturbance held over the step starting at each recorded time.
    pub disturbances: Vec<DVector<f64>>,
    /// Whether the parameter box was left at any step since the previous record.
    pub box_violation: Vec<bool>,
    pub diverged: bool,
    /// Metrics over every integration step, not only the recorded ones.
    pub metrics: Metrics,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn to_csv(&self) -> String {
        let n = self.n_bars;
        let mut cols: Vec<String> = vec!["t".into()];
        cols.extend((1..=n).map(|i| format!("theta_{i}")));
        cols.extend((1..=n).map(|i| format!("thetadot_{i}")));
        if self.inputs.is_some() {
            cols.extend((1..=n).map(|i| format!("u_{i}")));
        }
        cols.extend((1..=n).map(|i| format!("w_{i}")));
        cols.push("box_violation".into());
        let mut s = cols.join(",");
        s.push('\n');
        for k in 0..self.len() {
            let mut row = vec![self.times[k].to_string()];
            row.extend(self.states[k].iter().map(|v| v.to_string()));
            if let Some(u) = &self.inputs {
                row.extend(u[k].iter().map(|v| v.to_string()));
            }
            row.extend(self.disturbances[k].iter().map(|v| v.to_string()));
            row.push(u8::from(self.box_violation[k]).to_string());
            s.push_str(&row.join(","));
            s.push('\n');
        }
        s
    }
}

/// Metrics from the recorded samples of a trajectory only.
pub fn metrics(traj: &Trajectory, plant: &WingPlant, band: f64) -> Result<Metrics> {
    let n = traj.n_bars;
    let cz = plant.output_map();
    let mut acc = MetricsAccumulator::new(n);
    for k in 0..traj.len() {
        let x = &traj.states[k];
        let u = traj.inputs.as_ref().map(|u| &u[k]);
        acc.push(traj.times[k], &x.as_slice()[..n], &(&cz * x), u, traj.box_violation[k]);
    }
    acc.finish(band, traj.diverged)
}

fn rk4_step(f: &dyn Fn(&DVector<f64>) -> Result<DVector<f64>>, x: &DVector<f64>, dt: f64) -> Result<DVector<f64>> {
    let k1 = f(x)?;
    let k2 = f(&(x + &k1 * (0.5 * dt)))?;
    let k3 = f(&(x + &k2 * (0.5 * dt)))?;
    let k4 = f(&(x + &k3 * dt))?;
    Ok(x + (k1 + 2.0 * k2 + 2.0 * k3 + k4) * (dt / 6.0))
}

/// Integrates the wing with classical RK4 at a fixed step.
pub fn simulate(plant: &WingPlant, cfg: &SimConfig) -> Result<Trajectory> {
    cfg.validate(plant)?;
    let n = plant.n_bars();
    let steps = (cfg.horizon / cfg.dt).round() as usize;
    let rho_max = plant.params().theta_max.powi(2);
    let cz = plant.output_map();
    let gain = cfg.gain.as_ref();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut x = cfg.initial_state(plant);
    let mut times = Vec::new();
    let mut states = Vec::new();
    let mut inputs = gain.map(|_| Vec::new());
    let mut disturbances = Vec::new();
    let mut box_violation = Vec::new();
    let mut pending_violation = false;
    let mut acc = MetricsAccumulator::new(n);
    let mut diverged = false;
    let mut w = DVector::zeros(n);

    for k in 0..=steps {
        let t = k as f64 * cfg.dt;
        if k < steps {
            w = disturbance_sample(t, &mut rng, &cfg.disturbance, n);
        }
        let u = gain.map(|g| g * &x);
        let violation = x.rows(0, n).iter().any(|th| th * th > rho_max);
        pending_violation |= violation;
        acc.push(t, &x.as_slice()[..n], &(&cz * &x), u.as_ref(), violation);
        if k % cfg.record_every == 0 || k == steps {
            times.push(t);
            states.push(x.clone());
            if let (Some(list), Some(u)) = (inputs.as_mut(), u.as_ref()) {
                list.push(u.clone());
            }
            disturbances.push(w.clone());
            box_violation.push(pending_violation);
            pending_violation = false;
        }
        if k == steps {
            break;
        }
        let field = |s: &DVector<f64>| {
            let u = match gain {
                Some(g) => g * s,
                None => DVector::zeros(n),
            };
            plant.dynamics(s, &u, &w)
        };
        let next = rk4_step(&field, &x, cfg.dt)?;
        if next.iter().any(|v| !v.is_finite() || v.abs() > DIVERGENCE_LIMIT) {
            log::warn!("simulation diverged at t = {}", t + cfg.dt);
            diverged = true;
            if times.last() != Some(&t) {
                times.push(t);
                states.push(x.clone());
                if let (Some(list), Some(u)) = (inputs.as_mut(), u.as_ref()) {
                    list.push(u.clone());
                }
                disturbances.push(w.clone());
                box_violation.push(pending_violation);
            }
            break;
        }
        x = next;
    }
    let metrics = acc.finish(cfg.settling_band, diverged)?;
    Ok(Trajectory { n_bars: n, times, states, inputs, disturbances, box_violation, diverged, metrics })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::wing::{build_wing, WingParams};

    fn plant() -> WingPlant {
        build_wing(&WingParams::default()).unwrap()
    }

    fn quiet(horizon: f64, dt: f64) -> SimConfig {
        SimConfig { horizon, dt, disturbance: DisturbanceConfig::none(), record_every: 1, ..SimConfig::default() }
    }

    #[test]
    fn pure_sinusoid_without_noise() {
        let cfg = DisturbanceConfig { amplitude: 0.0, ..DisturbanceConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(disturbance_sample(0.0, &mut rng, &cfg, 3), DVector::zeros(3));
        let w = disturbance_sample(100.0, &mut rng, &cfg, 3);
        assert!(w.iter().all(|v| (*v - 0.5_f64.sin()).abs() < 1e-15));
    }

    #[test]
    fn noise_is_bounded_and_seeded() {
        let cfg = DisturbanceConfig::default();
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..1000).map(|k| disturbance_sample(k as f64, &mut rng, &cfg, 5)).collect::<Vec<_>>()
        };
        let a = draw(42);
        assert_eq!(a, draw(42));
        assert_ne!(a, draw(43));
        for (k, w) in a.iter().enumerate() {
            let gust = (0.005 * k as f64).sin();
            assert!(w.iter().all(|v| (v - gust).abs() <= 0.3 + 1e-15));
        }
        let shared = DisturbanceConfig { independent: false, ..cfg };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = disturbance_sample(1.0, &mut rng, &shared, 4);
        assert!(w.iter().all(|v| *v == w[0]));
    }

    #[test]
    fn equilibrium_stays_put() {
        let p = plant();
        let cfg = SimConfig { x0: Some(vec![0.0; 10]), ..quiet(1.0, 1e-2) };
        let tr = simulate(&p, &cfg).unwrap();
        assert!(tr.states.iter().all(|x| x.iter().all(|v| *v == 0.0)));
        assert!(tr.inputs.is_none());
        assert_eq!(tr.metrics.u_inf, vec![0.0; 5]);
    }

    #[test]
    fn energy_is_conserved() {
        let p = plant();
        let cfg = SimConfig { x0: Some(vec![0.1, -0.05, 0.08, 0.02, -0.1, 0.0, 0.1, 0.0, -0.2, 0.0]), ..quiet(10.0, 1e-3) };
        let tr = simulate(&p, &cfg).unwrap();
        let e0 = p.energy(&tr.states[0]);
        let drift = tr.states.iter().map(|x| (p.energy(x) - e0).abs()).fold(0.0, f64::max) / e0;
        assert!(drift <= 1e-6, "relative drift {drift}");
    }

    #[test]
    fn fourth_order_convergence() {
        let p = plant();
        let x0 = Some(vec![0.3, -0.2, 0.25, 0.1, -0.3, 0.0, 0.5, 0.0, -0.4, 0.2]);
        let terminal = |dt: f64| {
            let cfg = SimConfig { x0: x0.clone(), ..quiet(2.0, dt) };
            simulate(&p, &cfg).unwrap().states.last().unwrap().clone()
        };
        let dts = [0.04, 0.02, 0.01, 0.005];
        let sols: Vec<_> = dts.iter().map(|d| terminal(*d)).collect();
        let reference = terminal(0.0025 / 4.0);
        let errs: Vec<f64> = sols.iter().map(|s| (s - &reference).amax()).collect();
        // least-squares slope of log(err) against log(dt)
        let (lx, ly): (Vec<f64>, Vec<f64>) = dts.iter().zip(&errs).map(|(d, e)| (d.ln(), e.ln())).unzip();
        let mx = lx.iter().sum::<f64>() / 4.0;
        let my = ly.iter().sum::<f64>() / 4.0;
        let slope = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>()
            / lx.iter().map(|x| (x - mx).powi(2)).sum::<f64>();
        assert!(slope >= 3.5, "observed order {slope}, errors {errs:?}");
    }

    #[test]
    fn deterministic_runs() {
        let p = plant();
        let cfg = SimConfig { horizon: 5.0, seed: 42, ..SimConfig::default() };
        let a = simulate(&p, &cfg).unwrap();
        let b = simulate(&p, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.to_csv(), b.to_csv());
    }

    #[test]
    fn records_and_csv_layout() {
        let p = plant();
        let cfg = SimConfig { horizon: 1.0, dt: 0.01, record_every: 30, gain: Some(DMatrix::zeros(5, 10)), ..SimConfig::default() };
        let tr = simulate(&p, &cfg).unwrap();
        // steps 0, 30, 60, 90 and the final 100
        assert_eq!(tr.times.len(), 5);
        assert_eq!(tr.metrics.steps, 101);
        let csv = tr.to_csv();
        let header = csv.lines().next().unwrap();
        assert_eq!(header.split(',').count(), 1 + 10 + 5 + 5 + 1);
        assert!(header.contains("u_1"));
        let open = simulate(&p, &SimConfig { gain: None, ..cfg }).unwrap();
        assert!(!open.to_csv().lines().next().unwrap().contains("u_1"));
    }

    #[test]
    fn box_violations_are_flagged() {
        let p = plant();
        let cfg = SimConfig { x0: Some(vec![0.6, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]), ..quiet(0.1, 1e-3) };
        let tr = simulate(&p, &cfg).unwrap();
        assert!(tr.box_violation[0]);
        assert_eq!(tr.metrics.first_box_violation, Some(0.0));
        assert!(tr.metrics.box_violation_steps > 0);
    }

    #[test]
    fn divergence_truncates() {
        let p = plant();
        let k = DMatrix::from_fn(5, 10, |i, j| if j == i + 5 { 1e3 } else { 0.0 });
        let cfg = SimConfig { gain: Some(k), ..quiet(100.0, 1e-2) };
        let tr = simulate(&p, &cfg).unwrap();
        assert!(tr.diverged && tr.metrics.diverged);
        assert!(*tr.times.last().unwrap() < 100.0);
        assert!(tr.states.iter().all(|x| x.iter().all(|v| v.is_finite())));
    }

    #[test]
    fn settling_trivial_cases() {
        let t = [0.0, 1.0, 2.0];
        assert_eq!(settling_time(&t, &[0.0, 0.0, 0.0], 0.02), Some(0.0));
        assert_eq!(settling_time(&t, &[0.5, 0.5, 0.5], 0.02), None);
        assert_eq!(settling_time(&t, &[1.0, 0.0, 0.5], 0.02), None);
    }

    #[test]
    fn settling_of_decaying_oscillation() {
        let g = |t: f64| (-t).exp() * (10.0 * t).sin();
        let dt = 1e-3;
        let times: Vec<f64> = (0..=10_000).map(|k| k as f64 * dt).collect();
        let vals: Vec<f64> = times.iter().map(|t| g(*t)).collect();
        let got = settling_time(&times, &vals, 0.02).unwrap();

        // analytic peak at tan(10 t) = 10, then the last band crossing
        let t_peak = 10.0_f64.atan() / 10.0;
        let band = 0.02 * g(t_peak);
        let excess = |t: f64| g(t).abs() - band;
        // the envelope falls below the band at -ln(band); step back to the
        // last lobe that still exceeds it and bisect its trailing edge
        let t_env = -band.ln();
        let lobe = (t_env * 10.0 / std::f64::consts::PI).floor();
        let mut crossing = None;
        for j in (0..=lobe as i64).rev() {
            let top = (j as f64 * std::f64::consts::PI + 10.0_f64.atan()) / 10.0;
            if excess(top) > 0.0 {
                let (mut lo, mut hi) = (top, (j as f64 + 1.0) * std::f64::consts::PI / 10.0);
                for _ in 0..200 {
                    let mid = 0.5 * (lo + hi);
                    if excess(mid) > 0.0 {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                crossing = Some(hi);
                break;
            }
        }
        let crossing = crossing.unwrap();
        assert!((got - crossing).abs() <= dt, "{got} vs {crossing}");
    }
}
