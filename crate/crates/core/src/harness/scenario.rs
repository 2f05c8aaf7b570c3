//! Sweep scenario configuration and its validating TOML loader.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cs_solver::{CsOptions, LambdaRule};
use crate::error::{Error, Result};
use crate::harness::profiles::ProfileParams;
use crate::mc_solver::SolverConfig;
use crate::transforms::ProjectionKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    ClassicMc,
    JointMcCs,
    CsMc,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::ClassicMc, Method::JointMcCs, Method::CsMc];

    pub fn label(self) -> &'static str {
        match self {
            Method::ClassicMc => "classic_mc",
            Method::JointMcCs => "joint_mc_cs",
            Method::CsMc => "cs_mc",
        }
    }

    pub fn from_label(label: &str) -> Result<Method> {
        Method::ALL
            .into_iter()
            .find(|m| m.label() == label)
            .ok_or_else(|| {
                Error::InvalidParameter(format!(
                    "unknown method '{label}' (expected classic_mc, joint_mc_cs, or cs_mc)"
                ))
            })
    }

    /// Only the two-stage pipeline consumes the compression ratio.
    pub fn uses_cmr(self) -> bool {
        matches!(self, Method::CsMc)
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

/// Temporal-CS settings used by the pipeline's stage 1.
#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CsConfig {
    /// l1 weight relative to the correlation scale `|(Phi D)^T h|_inf`.
    pub lambda_scale: f64,
    pub max_iters: usize,
    pub rel_tol: f64,
    pub opt_tol: f64,
}

impl Default for CsConfig {
    fn default() -> Self {
        Self {
            lambda_scale: 1e-4,
            max_iters: 5000,
            rel_tol: 1e-8,
            opt_tol: 1e-6,
        }
    }
}

impl CsConfig {
    pub fn to_options(self) -> CsOptions {
        CsOptions {
            lambda: LambdaRule::RelativeToCorrelation(self.lambda_scale),
            max_iters: self.max_iters,
            rel_tol: self.rel_tol,
            opt_tol: self.opt_tol,
        }
    }
}

/// One experiment description: which feeder, how long, which estimators,
/// and the grids to sweep.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub feeder_path: PathBuf,
    pub t_steps: usize,
    pub methods: Vec<Method>,
    pub fad_grid: Vec<f64>,
    pub cmr_grid: Vec<f64>,
    pub seeds: Vec<u64>,
    /// DCT split index `j`.
    pub dct_split: usize,
    pub profiles: ProfileParams,
    /// Additive Gaussian noise on observed entries, per-unit. Zero keeps
    /// measurements exact.
    pub meas_sigma: f64,
    pub projection_kind: ProjectionKind,
    pub solver: SolverConfig,
    pub cs: CsConfig,
}

impl Scenario {
    pub fn new(feeder_path: impl Into<PathBuf>) -> Self {
        Self {
            feeder_path: feeder_path.into(),
            t_steps: 8,
            methods: vec![Method::JointMcCs],
            fad_grid: vec![0.3],
            cmr_grid: vec![1.0],
            seeds: vec![1],
            dct_split: 2,
            profiles: ProfileParams::default(),
            meas_sigma: 0.0,
            projection_kind: ProjectionKind::Gaussian,
            solver: SolverConfig::default(),
            cs: CsConfig::default(),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Scenario> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::schema(path.display().to_string(), e.to_string()))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        Scenario::from_toml_str(&text, base, &path.display().to_string())
    }

    /// Parse from TOML; relative feeder paths resolve against `base_dir`.
    pub fn from_toml_str(text: &str, base_dir: &Path, origin: &str) -> Result<Scenario> {
        let file: ScenarioFile =
            toml::from_str(text).map_err(|e| Error::schema(origin, e.to_string()))?;
        let mut scenario = Scenario::new(PathBuf::new());

        let feeder = PathBuf::from(&file.feeder);
        scenario.feeder_path = if feeder.is_relative() {
            base_dir.join(feeder)
        } else {
            feeder
        };
        if let Some(t) = file.t_steps {
            scenario.t_steps = t;
        }
        if let Some(methods) = file.methods {
            scenario.methods = methods
                .iter()
                .map(|m| Method::from_label(m))
                .collect::<Result<_>>()
                .map_err(|e| Error::schema(origin, e.to_string()))?;
        }
        if let Some(fad) = file.fad {
            scenario.fad_grid = fad;
        }
        if let Some(cmr) = file.cmr {
            scenario.cmr_grid = cmr;
        }
        if let Some(seeds) = file.seeds {
            scenario.seeds = seeds;
        }
        if let Some(split) = file.dct_split {
            scenario.dct_split = split;
        }
        if let Some(profiles) = file.profiles {
            scenario.profiles = profiles;
        }
        if let Some(sigma) = file.meas_sigma {
            scenario.meas_sigma = sigma;
        }
        if let Some(kind) = file.projection {
            scenario.projection_kind = kind;
        }
        if let Some(solver) = file.solver {
            solver.apply(&mut scenario.solver);
        }
        if let Some(cs) = file.cs {
            scenario.cs = cs;
        }
        scenario.validate().map_err(|e| match e {
            Error::InvalidParameter(detail) => Error::schema(origin, detail),
            other => other,
        })?;
        Ok(scenario)
    }

    pub fn validate(&self) -> Result<()> {
        if self.t_steps == 0 {
            return Err(Error::InvalidParameter("t_steps must be >= 1".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::InvalidParameter("no methods listed".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::InvalidParameter("seed list is empty".into()));
        }
        if self.fad_grid.is_empty() {
            return Err(Error::InvalidParameter("fad grid is empty".into()));
        }
        if self.cmr_grid.is_empty() {
            return Err(Error::InvalidParameter("cmr grid is empty".into()));
        }
        for &fad in &self.fad_grid {
            if !(fad > 0.0 && fad <= 1.0) {
                return Err(Error::InvalidParameter(format!(
                    "fad {fad} outside (0, 1]"
                )));
            }
        }
        for &cmr in &self.cmr_grid {
            if !(cmr > 0.0 && cmr <= 1.0) {
                return Err(Error::InvalidParameter(format!(
                    "cmr {cmr} outside (0, 1]"
                )));
            }
        }
        if self.dct_split > self.t_steps {
            return Err(Error::InvalidParameter(format!(
                "dct_split {} exceeds t_steps {}",
                self.dct_split, self.t_steps
            )));
        }
        if self.meas_sigma < 0.0 {
            return Err(Error::InvalidParameter(
                "meas_sigma must be nonnegative".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioFile {
    feeder: String,
    t_steps: Option<usize>,
    methods: Option<Vec<String>>,
    fad: Option<Vec<f64>>,
    cmr: Option<Vec<f64>>,
    seeds: Option<Vec<u64>>,
    dct_split: Option<usize>,
    profiles: Option<ProfileParams>,
    meas_sigma: Option<f64>,
    projection: Option<ProjectionKind>,
    solver: Option<SolverFile>,
    cs: Option<CsConfig>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SolverFile {
    lambda1: Option<f64>,
    nu: Option<f64>,
    lambda2: Option<f64>,
    rank: Option<usize>,
    outer_iters: Option<usize>,
    outer_tol: Option<f64>,
    inner_iters: Option<usize>,
    inner_tol: Option<f64>,
    smoothing_eps: Option<f64>,
}

impl SolverFile {
    fn apply(&self, cfg: &mut SolverConfig) {
        if let Some(v) = self.lambda1 {
            cfg.lambda1 = v;
        }
        if let Some(v) = self.nu {
            cfg.nu = v;
        }
        if let Some(v) = self.lambda2 {
            cfg.lambda2 = v;
        }
        if let Some(v) = self.rank {
            cfg.rank = v;
        }
        if let Some(v) = self.outer_iters {
            cfg.outer_iters = v;
        }
        if let Some(v) = self.outer_tol {
            cfg.outer_tol = v;
        }
        if let Some(v) = self.inner_iters {
            cfg.inner_iters = v;
        }
        if let Some(v) = self.inner_tol {
            cfg.inner_tol = v;
        }
        if let Some(v) = self.smoothing_eps {
            cfg.smoothing_eps = v;
        }
    }
}
