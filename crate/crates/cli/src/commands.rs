use std::fmt::Write as _;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sparse_lpv::analysis::{grid_verify, ClaimedBounds};
use sparse_lpv::sim::{simulate, Metrics, Trajectory};
use sparse_lpv::synthesis::{assemble, design, ControllerArtifact, IterationRecord};
use sparse_lpv::wing::build_wing;

use crate::config::RunConfig;
use crate::{read_json, write_atomic, write_json, CliError, Outcome};

/// Writes the design model as JSON.
pub fn cmd_model(cfg: &RunConfig) -> Result<Outcome, CliError> {
    let model = cfg.design_model()?;
    let path = cfg.out.join("model.json");
    write_json(&path, &model)?;
    log::info!(
        "model: n_x = {}, n_u = {}, n_w = {}, n_z = {}, n_rho = {}",
        model.n_x(),
        model.n_u(),
        model.n_w(),
        model.n_z(),
        model.n_rho()
    );
    Ok(Outcome { files: vec![path], failure: None })
}

/// Runs reweighting, pruning and the final solve; writes the controller,
/// the iteration history and the certificate audit.
pub fn cmd_design(cfg: &RunConfig) -> Result<Outcome, CliError> {
    let model = cfg.design_model()?;
    let mut files = Vec::new();
    if cfg.dump_problem {
        let alpha = cfg.synthesis.initial_alpha(model.n_u())?;
        let asm = assemble(&model, &cfg.synthesis, &alpha, &model.design_vertices()?)?;
        let path = cfg.out.join("problem.txt");
        write_atomic(&path, asm.problem.to_sparse_text().as_bytes())?;
        files.push(path);
    }
    let (sparse, pruned) = design(&model, &cfg.synthesis)?;
    let artifact = ControllerArtifact::new(&sparse, &pruned);
    let [ctrl, iters, cert] = ["controller.json", "iterations.csv", "certificate.json"].map(|f| cfg.out.join(f));
    write_json(&ctrl, &artifact)?;
    write_atomic(&iters, iterations_csv(&artifact.iteration_history).as_bytes())?;
    write_json(&cert, &artifact.certificate)?;
    files.extend([ctrl, iters, cert]);
    log::info!(
        "design: active actuators {:?}, sqrt(gamma) {:?}",
        artifact.active_actuators.iter().map(|i| i + 1).collect::<Vec<_>>(),
        artifact.sqrt_gamma()
    );
    let failure = (!artifact.certificate.pass).then(|| {
        CliError::infeasible(format!(
            "certificate audit failed: max eigenvalue {:e} in {}",
            artifact.certificate.worst, artifact.certificate.worst_constraint
        ))
    });
    Ok(Outcome { files, failure })
}

pub fn iterations_csv(history: &[IterationRecord]) -> String {
    let n = history.first().map_or(0, |h| h.gamma.len());
    let mut s = String::from("iteration,objective,active_count,change");
    for i in 1..=n {
        let _ = write!(s, ",sqrt_gamma_{i}");
    }
    for i in 1..=n {
        let _ = write!(s, ",alpha_{i}");
    }
    s.push('\n');
    for h in history {
        let change = h.change.map_or(String::new(), |c| c.to_string());
        let _ = write!(s, "{},{},{},{change}", h.iteration, h.objective, h.active_count);
        for g in &h.gamma {
            let _ = write!(s, ",{}", g.max(0.0).sqrt());
        }
        for a in &h.alpha {
            let _ = write!(s, ",{a}");
        }
        s.push('\n');
    }
    s
}

/// Metrics JSON written next to a trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimSummary {
    pub closed_loop: bool,
    pub seed: u64,
    /// False when the state left the parameter box or diverged.
    pub in_box: bool,
    pub metrics: Metrics,
}

fn controller_path(cfg: &RunConfig) -> Result<&PathBuf, CliError> {
    cfg.controller
        .as_ref()
        .ok_or_else(|| CliError::usage("no controller given (use --controller PATH or --open-loop)"))
}

/// Simulates the nonlinear wing; a closed loop that leaves the parameter
/// box is reported as out of certificate.
pub fn run_simulation(cfg: &RunConfig) -> Result<(Trajectory, SimSummary), CliError> {
    let plant = build_wing(&cfg.wing)?;
    let mut sim = cfg.sim.clone();
    sim.gain = if cfg.open_loop {
        None
    } else {
        let artifact: ControllerArtifact = read_json(controller_path(cfg)?)?;
        Some(artifact.k)
    };
    let traj = simulate(&plant, &sim)?;
    let summary = SimSummary {
        closed_loop: sim.gain.is_some(),
        seed: sim.seed,
        in_box: traj.metrics.box_violation_steps == 0 && !traj.metrics.diverged,
        metrics: traj.metrics.clone(),
    };
    Ok((traj, summary))
}

pub fn cmd_simulate(cfg: &RunConfig) -> Result<Outcome, CliError> {
    let (traj, summary) = run_simulation(cfg)?;
    let files = vec![cfg.out.join("trajectory.csv"), cfg.out.join("metrics.json")];
    write_atomic(&files[0], traj.to_csv().as_bytes())?;
    write_json(&files[1], &summary)?;
    let failure = (summary.closed_loop && !summary.in_box).then(|| {
        let m = &summary.metrics;
        CliError::infeasible(match m.first_box_violation {
            Some(t) => format!("closed loop left the parameter box at t = {t} (out of certificate)"),
            None => "closed loop diverged".to_string(),
        })
    });
    if !summary.in_box && !summary.closed_loop {
        log::warn!("open-loop trajectory left the parameter box");
    }
    Ok(Outcome { files, failure })
}

/// Frozen-parameter norm check of a controller file against its claims.
pub fn cmd_verify(cfg: &RunConfig) -> Result<Outcome, CliError> {
    let model = cfg.design_model()?;
    let artifact: ControllerArtifact = read_json(controller_path(cfg)?)?;
    let bounds = ClaimedBounds { kind: artifact.kind, gamma0: artifact.gamma0, gamma: artifact.gamma.clone() };
    let report = grid_verify(&model, &artifact.k, &bounds, &cfg.verify, cfg.verify_tolerance)?;
    let files = vec![cfg.out.join("norm_report.json"), cfg.out.join("norm_report.csv")];
    write_json(&files[0], &report)?;
    write_atomic(&files[1], report.to_csv().as_bytes())?;
    log::info!(
        "verify: worst performance norm {} against {}, {} sample points",
        report.worst_performance,
        artifact.gamma0,
        report.points.len()
    );
    let failure = (!report.pass).then(|| {
        let bad = report.points.iter().filter(|p| p.channels.iter().any(|c| !c.pass) || !p.stable).count();
        CliError::infeasible(format!("{bad} of {} sample points violate the claimed bounds", report.points.len()))
    });
    Ok(Outcome { files, failure })
}
