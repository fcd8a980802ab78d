//! Design-and-simulate sweeps over norm kind, design model and bounds.

use std::fmt::Write as _;

use rayon::prelude::*;
use sparse_lpv::analysis::NormKind;
use sparse_lpv::synthesis::{design, ControllerArtifact};

use crate::commands::{iterations_csv, run_simulation, SimSummary};
use crate::config::{ModelKind, RunConfig};
use crate::{write_atomic, write_json, CliError, Outcome, EXIT_INFEASIBLE, EXIT_OK};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell {
    pub kind: NormKind,
    pub model: ModelKind,
    pub gamma0: f64,
    pub gamma_ub_sqrt: f64,
}

impl Cell {
    pub fn id(&self) -> String {
        format!("{}_{}_g{}_ub{}", self.kind, self.model, self.gamma0, self.gamma_ub_sqrt)
    }
}

#[derive(Debug)]
pub struct CellResult {
    pub cell: Cell,
    /// Exit code the cell would have as a standalone design + simulate run.
    pub code: i32,
    pub message: String,
    pub artifact: Option<ControllerArtifact>,
    pub sim: Option<SimSummary>,
}

/// Cells in nesting order kind, model, gamma0, gamma_ub.
pub fn cells(cfg: &RunConfig) -> Vec<Cell> {
    let s = &cfg.sweep;
    let mut out = Vec::new();
    for &kind in &s.kinds {
        for &model in &s.models {
            for &gamma0 in &s.gamma0 {
                for &gamma_ub_sqrt in &s.gamma_ub_sqrt {
                    out.push(Cell { kind, model, gamma0, gamma_ub_sqrt });
                }
            }
        }
    }
    out
}

fn cell_config(cfg: &RunConfig, cell: &Cell) -> RunConfig {
    let mut c = cfg.clone();
    c.synthesis.kind = cell.kind;
    c.synthesis.gamma0 = cell.gamma0;
    c.synthesis = c.synthesis.with_gamma_ub_sqrt(cell.gamma_ub_sqrt);
    c.model = cell.model;
    c.out = cfg.out.join("cells").join(cell.id());
    c.controller = Some(c.out.join("controller.json"));
    c.open_loop = false;
    c
}

/// Designs on the cell's model, then simulates the nonlinear wing with the
/// common simulation settings, so every cell sees the same disturbance.
pub fn run_cell(cfg: &RunConfig, cell: Cell) -> CellResult {
    let c = cell_config(cfg, &cell);
    let mut res = CellResult { cell, code: EXIT_OK, message: String::new(), artifact: None, sim: None };
    let designed = c.design_model().and_then(|m| design(&m, &c.synthesis).map_err(CliError::from));
    let artifact = match designed {
        Ok((sparse, pruned)) => ControllerArtifact::new(&sparse, &pruned),
        Err(e) => {
            log::warn!("sweep cell {}: {e}", cell.id());
            res.code = e.code();
            res.message = e.to_string();
            return res;
        }
    };
    if !artifact.certificate.pass {
        res.code = EXIT_INFEASIBLE;
        res.message = format!("certificate audit failed in {}", artifact.certificate.worst_constraint);
    }
    let written = write_json(c.controller.as_ref().expect("set by cell_config"), &artifact).and_then(|_| {
        write_atomic(&c.out.join("iterations.csv"), iterations_csv(&artifact.iteration_history).as_bytes())
    });
    res.artifact = Some(artifact);
    let simulated = written.and_then(|_| run_simulation(&c)).and_then(|(traj, summary)| {
        write_atomic(&c.out.join("trajectory.csv"), traj.to_csv().as_bytes())?;
        write_json(&c.out.join("metrics.json"), &summary)?;
        Ok(summary)
    });
    match simulated {
        Ok(summary) => {
            if !summary.in_box {
                log::warn!("sweep cell {}: trajectory left the parameter box", cell.id());
            }
            res.sim = Some(summary);
        }
        Err(e) => {
            res.code = res.code.max(e.code());
            res.message = e.to_string();
        }
    }
    res
}

pub fn run_sweep(cfg: &RunConfig) -> Result<Vec<CellResult>, CliError> {
    let s = &cfg.sweep;
    if s.kinds.is_empty() || s.models.is_empty() || s.gamma0.is_empty() || s.gamma_ub_sqrt.is_empty() {
        return Err(CliError::usage("every sweep list needs at least one entry"));
    }
    Ok(cells(cfg).into_par_iter().map(|cell| run_cell(cfg, cell)).collect())
}

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| x.to_string())
}

/// One row per cell: sparsity, bounds and closed-loop metrics.
pub fn sweep_csv(results: &[CellResult], n_u: usize) -> String {
    let mut s = String::from(
        "kind,model,gamma0,gamma_ub_sqrt,exit_code,certificate_pass,active_count,active_actuators,sum_sqrt_gamma,max_sqrt_gamma",
    );
    for i in 1..=n_u {
        let _ = write!(s, ",sqrt_gamma_{i}");
    }
    for i in 1..=n_u {
        let _ = write!(s, ",u_inf_{i}");
    }
    s.push_str(",overshoot,settling_time,rms_z,box_violation_steps,diverged,message\n");
    for r in results {
        let c = &r.cell;
        let _ = write!(s, "{},{},{},{},{}", c.kind, c.model, c.gamma0, c.gamma_ub_sqrt, r.code);
        match &r.artifact {
            Some(a) => {
                let sg = a.sqrt_gamma();
                let active: Vec<String> = a.active_actuators.iter().map(|i| (i + 1).to_string()).collect();
                let _ = write!(
                    s,
                    ",{},{},{},{},{}",
                    a.certificate.pass,
                    a.active_actuators.len(),
                    active.join(";"),
                    sg.iter().sum::<f64>(),
                    sg.iter().copied().fold(0.0, f64::max)
                );
                for g in &sg {
                    let _ = write!(s, ",{g}");
                }
            }
            None => s.push_str(&",".repeat(5 + n_u)),
        }
        match &r.sim {
            Some(m) => {
                let m = &m.metrics;
                for u in &m.u_inf {
                    let _ = write!(s, ",{u}");
                }
                let _ = write!(
                    s,
                    ",{},{},{},{},{}",
                    m.overshoot,
                    opt(m.settling_time),
                    m.rms_z,
                    m.box_violation_steps,
                    m.diverged
                );
            }
            None => s.push_str(&",".repeat(5 + n_u)),
        }
        let _ = writeln!(s, ",\"{}\"", r.message.replace('"', "'"));
    }
    s
}

/// LTI-designed versus LPV-designed controller under identical conditions.
#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub kind: NormKind,
    pub gamma0: f64,
    pub gamma_ub_sqrt: f64,
    pub overshoot_lti: f64,
    pub overshoot_lpv: f64,
    pub settling_time_lti: Option<f64>,
    pub settling_time_lpv: Option<f64>,
    pub rms_z_lti: f64,
    pub rms_z_lpv: f64,
}

impl Comparison {
    /// The LTI design overshoots more and settles later (a missing settling
    /// time counts as never settling).
    pub fn lti_worse(&self) -> bool {
        let settle = |t: Option<f64>| t.unwrap_or(f64::INFINITY);
        self.overshoot_lti > self.overshoot_lpv && settle(self.settling_time_lti) > settle(self.settling_time_lpv)
    }
}

pub fn comparisons(results: &[CellResult]) -> Vec<Comparison> {
    let find = |c: &Cell, model: ModelKind| {
        results.iter().find(|r| {
            r.cell.model == model
                && r.cell.kind == c.kind
                && r.cell.gamma0 == c.gamma0
                && r.cell.gamma_ub_sqrt == c.gamma_ub_sqrt
        })
    };
    results
        .iter()
        .filter(|r| r.cell.model == ModelKind::Lti)
        .filter_map(|lti| {
            let lpv = find(&lti.cell, ModelKind::Lpv)?;
            let (a, b) = (&lti.sim.as_ref()?.metrics, &lpv.sim.as_ref()?.metrics);
            Some(Comparison {
                kind: lti.cell.kind,
                gamma0: lti.cell.gamma0,
                gamma_ub_sqrt: lti.cell.gamma_ub_sqrt,
                overshoot_lti: a.overshoot,
                overshoot_lpv: b.overshoot,
                settling_time_lti: a.settling_time,
                settling_time_lpv: b.settling_time,
                rms_z_lti: a.rms_z,
                rms_z_lpv: b.rms_z,
            })
        })
        .collect()
}

pub fn comparison_csv(rows: &[Comparison]) -> String {
    let mut s = String::from(
        "kind,gamma0,gamma_ub_sqrt,overshoot_lti,overshoot_lpv,settling_time_lti,settling_time_lpv,rms_z_lti,rms_z_lpv,lti_worse\n",
    );
    for c in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{}",
            c.kind,
            c.gamma0,
            c.gamma_ub_sqrt,
            c.overshoot_lti,
            c.overshoot_lpv,
            opt(c.settling_time_lti),
            opt(c.settling_time_lpv),
            c.rms_z_lti,
            c.rms_z_lpv,
            c.lti_worse()
        );
    }
    s
}

/// Runs every cell and writes `sweep.csv` and `comparison.csv`. Cell
/// failures are recorded and the exit code is the worst cell code; the
/// LTI-versus-LPV ordering only produces warnings.
pub fn cmd_sweep(cfg: &RunConfig) -> Result<Outcome, CliError> {
    let results = run_sweep(cfg)?;
    let files = vec![cfg.out.join("sweep.csv"), cfg.out.join("comparison.csv")];
    write_atomic(&files[0], sweep_csv(&results, cfg.wing.n).as_bytes())?;
    let comp = comparisons(&results);
    for c in comp.iter().filter(|c| !c.lti_worse()) {
        log::warn!(
            "{} gamma0 = {} sqrt(gamma_ub) = {}: LTI design does not show both higher overshoot and later settling",
            c.kind,
            c.gamma0,
            c.gamma_ub_sqrt
        );
    }
    write_atomic(&files[1], comparison_csv(&comp).as_bytes())?;
    let worst = results.iter().max_by_key(|r| r.code).filter(|r| r.code != EXIT_OK);
    let failure = worst.map(|r| {
        let failed = results.iter().filter(|r| r.code != EXIT_OK).count();
        CliError::new(r.code, format!("{failed} of {} cells failed; {}: {}", results.len(), r.cell.id(), r.message))
    });
    Ok(Outcome { files, failure })
}
