//! Experiment configuration: one JSON document per run, unknown keys
//! rejected, every default made explicit when the resolved config is echoed
//! into the report.

use serde::{Deserialize, Serialize};

use crate::collision::KernelModel;
use crate::error::{GkinError, Result};
use crate::geometry::ConvexDomain;
use crate::quad::VelocityQuadrature;
use crate::solver::{GridSpec, SolverParams};
use crate::transport::BoundaryData;

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DomainSpec {
    Ball { radius: f64 },
    FlatCap { sphere_radius: f64, offset: f64 },
}

impl Default for DomainSpec {
    fn default() -> Self {
        DomainSpec::Ball { radius: 0.5 }
    }
}

impl DomainSpec {
    pub fn build(&self) -> Result<ConvexDomain> {
        let dom = match *self {
            DomainSpec::Ball { radius } => ConvexDomain::Ball { radius },
            DomainSpec::FlatCap { sphere_radius, offset } => {
                ConvexDomain::FlatCap { sphere_radius, offset }
            }
        };
        dom.validate()?;
        Ok(dom)
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuadratureSpec {
    pub n_r: usize,
    pub n_t: usize,
    pub n_phi: usize,
    pub r_max: f64,
    pub panel_w: f64,
}

impl Default for QuadratureSpec {
    fn default() -> Self {
        let q = VelocityQuadrature::default();
        QuadratureSpec { n_r: q.n_r, n_t: q.n_t, n_phi: q.n_phi, r_max: q.r_max, panel_w: q.panel_w }
    }
}

impl QuadratureSpec {
    pub fn build(&self) -> VelocityQuadrature {
        VelocityQuadrature {
            n_r: self.n_r,
            n_t: self.n_t,
            n_phi: self.n_phi,
            r_max: self.r_max,
            panel_w: self.panel_w,
        }
    }
}

/// Deterministic-solver and Monte Carlo knobs as one document section.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverSection {
    pub grid: GridSpec,
    pub tol: f64,
    pub max_iter: usize,
    pub scattering: bool,
    pub mc_paths: usize,
    pub seed: u64,
}

impl Default for SolverSection {
    fn default() -> Self {
        let p = SolverParams::default();
        SolverSection {
            grid: p.grid,
            tol: p.tol,
            max_iter: p.max_iter,
            scattering: p.scattering,
            mc_paths: 100_000,
            seed: 7,
        }
    }
}

impl SolverSection {
    pub fn params(&self) -> SolverParams {
        SolverParams {
            grid: self.grid,
            tol: self.tol,
            max_iter: self.max_iter,
            scattering: self.scattering,
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormPair {
    pub p: f64,
    #[serde(default)]
    pub alpha: f64,
}

fn default_norms() -> Vec<NormPair> {
    [1.0, 2.0, 3.0]
        .iter()
        .flat_map(|&p| [0.0, 0.1].iter().map(move |&alpha| NormPair { p, alpha }))
        .collect()
}

fn default_name() -> String {
    "run".into()
}

fn default_seed() -> u64 {
    7
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_name")]
    pub name: String,
    #[serde(default)]
    pub domain: DomainSpec,
    #[serde(default)]
    pub kernel: KernelModel,
    #[serde(default)]
    pub quadrature: QuadratureSpec,
    #[serde(default)]
    pub solver: SolverSection,
    #[serde(default)]
    pub data: BoundaryData,
    #[serde(default = "default_norms")]
    pub norms: Vec<NormPair>,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub out: Option<String>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("empty object uses the field defaults")
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| GkinError::Config(e.to_string()))
    }

    pub fn from_file(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| GkinError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }
}
