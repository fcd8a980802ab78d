//! Run configuration: one JSON document, overridable field by field.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sparse_lpv::analysis::{GridSpec, NormKind};
use sparse_lpv::lpv::AffineLpvModel;
use sparse_lpv::sim::SimConfig;
use sparse_lpv::synthesis::SynthesisSpec;
use sparse_lpv::wing::{wing_to_lpv, WingParams};

use crate::CliError;

/// Environment variable overriding `synthesis.solver.tol`.
pub const SOLVER_TOL_ENV: &str = "SPARSE_LPV_SOLVER_TOL";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    /// Linear springs only (`k2 = 0`), a constant-matrix design model.
    Lti,
    /// Quasi-LPV embedding of the cubic springs.
    Lpv,
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ModelKind::Lti => "lti",
            ModelKind::Lpv => "lpv",
        })
    }
}

impl std::str::FromStr for ModelKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "lti" => Ok(ModelKind::Lti),
            "lpv" => Ok(ModelKind::Lpv),
            other => Err(format!("unknown model kind `{other}` (expected lti or lpv)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub kinds: Vec<NormKind>,
    pub models: Vec<ModelKind>,
    pub gamma0: Vec<f64>,
    pub gamma_ub_sqrt: Vec<f64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            kinds: vec![NormKind::Hinf, NormKind::H2],
            models: vec![ModelKind::Lti, ModelKind::Lpv],
            gamma0: vec![0.15],
            gamma_ub_sqrt: vec![14.0, 8.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub wing: WingParams,
    /// Design model derived from `wing`; ignored when `model_file` is set.
    pub model: ModelKind,
    /// Custom model JSON used instead of the wing for design and verification.
    pub model_file: Option<PathBuf>,
    pub synthesis: SynthesisSpec,
    /// Also write the unit-weight SDP of `design` in sparse text form.
    pub dump_problem: bool,
    /// Simulation settings; `sim.gain` is filled from the controller file.
    pub sim: SimConfig,
    pub verify: GridSpec,
    /// Relative tolerance of the norm checks in `verify`.
    pub verify_tolerance: f64,
    /// Controller JSON for `simulate` and `verify`.
    pub controller: Option<PathBuf>,
    pub open_loop: bool,
    pub out: PathBuf,
    pub sweep: SweepConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            wing: WingParams::default(),
            model: ModelKind::Lpv,
            model_file: None,
            synthesis: SynthesisSpec::default().with_gamma_ub_sqrt(14.0),
            dump_problem: false,
            sim: SimConfig::default(),
            verify: GridSpec::default(),
            verify_tolerance: 1e-4,
            controller: None,
            open_loop: false,
            out: PathBuf::from("out"),
            sweep: SweepConfig::default(),
        }
    }
}

/// Field overrides taken from the command line.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    /// `path=value` pairs, `path` dot-separated as in the JSON file.
    pub set: Vec<String>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub kind: Option<NormKind>,
    pub model: Option<ModelKind>,
    pub gamma0: Option<f64>,
    pub gamma_ub_sqrt: Option<f64>,
    pub controller: Option<PathBuf>,
    pub open_loop: bool,
}

impl RunConfig {
    /// Reads the optional config file, then applies the solver-tolerance
    /// environment variable, `--set` pairs and the dedicated flags, in that
    /// order.
    pub fn load(path: Option<&Path>, overrides: &Overrides) -> Result<Self, CliError> {
        let mut value = match path {
            Some(p) => {
                let text = fs::read_to_string(p)
                    .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", p.display())))?;
                let parsed: RunConfig = serde_json::from_str(&text)
                    .map_err(|e| CliError::usage(format!("invalid config {}: {e}", p.display())))?;
                serde_json::to_value(parsed).expect("config serializes")
            }
            None => serde_json::to_value(RunConfig::default()).expect("config serializes"),
        };
        if let Ok(tol) = std::env::var(SOLVER_TOL_ENV) {
            let tol: f64 = tol
                .trim()
                .parse()
                .map_err(|_| CliError::usage(format!("{SOLVER_TOL_ENV} must be a number, got `{tol}`")))?;
            set_path(&mut value, "synthesis.solver.tol", Value::from(tol))?;
        }
        for pair in &overrides.set {
            let (key, raw) = pair
                .split_once('=')
                .ok_or_else(|| CliError::usage(format!("expected path=value, got `{pair}`")))?;
            let v = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            set_path(&mut value, key.trim(), v)?;
        }
        let mut cfg: RunConfig =
            serde_json::from_value(value).map_err(|e| CliError::usage(format!("invalid config value: {e}")))?;
        if let Some(out) = &overrides.out {
            cfg.out = out.clone();
        }
        if let Some(seed) = overrides.seed {
            cfg.sim.seed = seed;
            cfg.verify.seed = seed;
        }
        if let Some(kind) = overrides.kind {
            cfg.synthesis.kind = kind;
        }
        if let Some(model) = overrides.model {
            cfg.model = model;
        }
        if let Some(g) = overrides.gamma0 {
            cfg.synthesis.gamma0 = g;
        }
        if let Some(s) = overrides.gamma_ub_sqrt {
            cfg.synthesis = cfg.synthesis.with_gamma_ub_sqrt(s);
        }
        if let Some(c) = &overrides.controller {
            cfg.controller = Some(c.clone());
        }
        cfg.open_loop |= overrides.open_loop;
        Ok(cfg)
    }

    /// Design model: the custom model file if given, else the wing.
    pub fn design_model(&self) -> Result<AffineLpvModel, CliError> {
        match &self.model_file {
            Some(p) => {
                let text = fs::read_to_string(p)
                    .map_err(|e| CliError::usage(format!("cannot read model {}: {e}", p.display())))?;
                serde_json::from_str(&text).map_err(|e| CliError::usage(format!("invalid model {}: {e}", p.display())))
            }
            None => Ok(wing_to_lpv(&self.wing_for_design())?),
        }
    }

    pub fn wing_for_design(&self) -> WingParams {
        match self.model {
            ModelKind::Lti => self.wing.linearized(),
            ModelKind::Lpv => self.wing.clone(),
        }
    }
}

/// Replaces the value at a dot-separated path; every segment must exist.
pub fn set_path(root: &mut Value, path: &str, v: Value) -> Result<(), CliError> {
    let mut node = root;
    let mut seen = Vec::new();
    for seg in path.split('.') {
        seen.push(seg);
        node = match node {
            Value::Object(map) => map.get_mut(seg),
            Value::Array(items) => seg.parse::<usize>().ok().and_then(|i| items.get_mut(i)),
            _ => None,
        }
        .ok_or_else(|| CliError::usage(format!("unknown config field `{}`", seen.join("."))))?;
    }
    *node = v;
    Ok(())
}
