//! Experiment configuration document (TOML).

use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use serde::{Deserialize, Serialize};

use smpc_core::controller::BackupMode;
use smpc_core::reachability::PrsMethod;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub system: SystemSection,
    pub disturbance: DisturbanceSection,
    pub constraints: ConstraintsSection,
    pub costs: CostsSection,
    pub controller: ControllerSection,
    pub simulation: SimulationSection,
    #[serde(default)]
    pub outputs: OutputsSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSection {
    pub a: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DisturbanceSection {
    pub covariance: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub burst_covariance: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub burst_period: Option<usize>,
}

/// Shape of the PRS used to tighten the feasibility-conditioned controller.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrsShape {
    /// One slab per face from the marginal of the stationary error.
    #[default]
    Marginal,
    /// Chi-squared ellipsoid on the stationary error variance.
    Gaussian,
    /// Chebyshev ellipsoid on the stationary error variance.
    Chebyshev,
}

impl PrsShape {
    pub fn ellipsoid_method(self) -> Option<PrsMethod> {
        match self {
            PrsShape::Marginal => None,
            PrsShape::Gaussian => Some(PrsMethod::Gaussian),
            PrsShape::Chebyshev => Some(PrsMethod::Chebyshev),
        }
    }
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstraintsSection {
    pub state_normals: Vec<Vec<f64>>,
    pub state_offsets: Vec<f64>,
    /// Joint level `p_x` of the state chance constraint.
    pub state_level: f64,
    pub input_normals: Vec<Vec<f64>>,
    pub input_offsets: Vec<f64>,
    pub input_level: f64,
    #[serde(default)]
    pub prs: PrsShape,
    /// Per-face half-widths replacing the computed state tightening.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub state_half_widths: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_half_widths: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TerminalCost {
    /// Riccati solution of the unconstrained problem.
    #[default]
    Lqr,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TerminalSet {
    #[default]
    Origin,
    /// Maximal positively invariant set of the tightened constraints under `K`.
    Invariant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostsSection {
    pub q: Vec<Vec<f64>>,
    pub r: Vec<Vec<f64>>,
    #[serde(default)]
    pub terminal_cost: TerminalCost,
    #[serde(default)]
    pub terminal_set: TerminalSet,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "smpc-prs")]
    SmpcPrs,
    #[serde(rename = "smpc-c")]
    SmpcC,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::SmpcPrs => "smpc-prs",
            Variant::SmpcC => "smpc-c",
        }
    }
}

fn default_tolerance() -> f64 {
    1e-6
}

fn default_epsilon() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerSection {
    pub variant: Variant,
    pub horizon: usize,
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default)]
    pub backup: BackupMode,
}

fn default_window() -> [usize; 2] {
    [1, 10]
}

fn default_lipschitz_samples() -> usize {
    200
}

fn default_validation_samples() -> usize {
    10_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationSection {
    pub trials: usize,
    pub steps: usize,
    pub x0: Vec<f64>,
    pub seed: u64,
    /// Inclusive step range scored for satisfaction rates.
    #[serde(default = "default_window")]
    pub window: [usize; 2],
    /// Compute the running-average cost bound (samples the cost constant).
    #[serde(default)]
    pub cost_bound: bool,
    #[serde(default = "default_lipschitz_samples")]
    pub lipschitz_samples: usize,
    /// Monte Carlo budget of each open-loop statistical check in `validate`.
    #[serde(default = "default_validation_samples")]
    pub validation_samples: usize,
    /// Multiplies the half-widths of the PRS whose closed-loop level is
    /// checked; the tightening itself is unaffected.
    #[serde(default = "one")]
    pub validation_prs_scale: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Json,
}

fn default_directory() -> String {
    "out".into()
}

fn default_formats() -> Vec<Format> {
    vec![Format::Csv, Format::Json]
}

fn default_band_state() -> usize {
    2
}

fn default_band_quantile() -> f64 {
    0.05
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputsSection {
    #[serde(default = "default_directory")]
    pub directory: String,
    #[serde(default = "default_formats")]
    pub formats: Vec<Format>,
    /// 1-based state coordinate plotted in the band series.
    #[serde(default = "default_band_state")]
    pub band_state: usize,
    #[serde(default = "default_band_quantile")]
    pub band_quantile: f64,
}

impl Default for OutputsSection {
    fn default() -> Self {
        Self {
            directory: default_directory(),
            formats: default_formats(),
            band_state: default_band_state(),
            band_quantile: default_band_quantile(),
        }
    }
}

impl OutputsSection {
    pub fn wants(&self, f: Format) -> bool {
        self.formats.contains(&f)
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in config {}", path.display()))
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    /// Shape and range checks that need no linear algebra.
    pub fn validate(&self) -> Result<()> {
        let n = square("system.a", &self.system.a)?;
        let (bn, m) = rect("system.b", &self.system.b)?;
        ensure!(bn == n, "system.b has {bn} rows, expected {n}");
        ensure!(m >= 1, "system.b needs at least one column");
        ensure!(square("disturbance.covariance", &self.disturbance.covariance)? == n, "disturbance.covariance must be {n}x{n}");
        match (&self.disturbance.burst_covariance, self.disturbance.burst_period) {
            (Some(c), Some(p)) => {
                ensure!(square("disturbance.burst_covariance", c)? == n, "disturbance.burst_covariance must be {n}x{n}");
                ensure!(p >= 1, "disturbance.burst_period must be at least 1");
            }
            (None, None) => {}
            _ => bail!("disturbance.burst_covariance and disturbance.burst_period must be given together"),
        }

        let c = &self.constraints;
        faces("constraints.state", &c.state_normals, &c.state_offsets, n)?;
        faces("constraints.input", &c.input_normals, &c.input_offsets, m)?;
        for (name, p) in [("state_level", c.state_level), ("input_level", c.input_level)] {
            ensure!(p > 0.0 && p < 1.0, "constraints.{name} must lie in (0, 1), got {p}");
        }
        for (name, widths, count) in [
            ("state_half_widths", &c.state_half_widths, c.state_offsets.len()),
            ("input_half_widths", &c.input_half_widths, c.input_offsets.len()),
        ] {
            if let Some(w) = widths {
                ensure!(w.len() == count, "constraints.{name} needs {count} entries, got {}", w.len());
                ensure!(w.iter().all(|x| x.is_finite() && *x >= 0.0), "constraints.{name} must be non-negative");
            }
        }

        ensure!(square("costs.q", &self.costs.q)? == n, "costs.q must be {n}x{n}");
        ensure!(square("costs.r", &self.costs.r)? == m, "costs.r must be {m}x{m}");

        let ctl = &self.controller;
        ensure!(ctl.horizon >= 1, "controller.horizon must be at least 1");
        ensure!(ctl.tolerance > 0.0, "controller.tolerance must be positive");
        ensure!(ctl.epsilon > 0.0, "controller.epsilon must be positive");

        let sim = &self.simulation;
        ensure!(sim.trials >= 1, "simulation.trials must be at least 1");
        ensure!(sim.x0.len() == n, "simulation.x0 has {} entries, expected {n}", sim.x0.len());
        ensure!(sim.x0.iter().all(|x| x.is_finite()), "simulation.x0 must be finite");
        ensure!(sim.window[0] <= sim.window[1], "simulation.window must be [first, last] with first <= last");
        ensure!(
            sim.validation_prs_scale.is_finite() && sim.validation_prs_scale > 0.0,
            "simulation.validation_prs_scale must be positive"
        );
        ensure!(sim.validation_samples >= 1000, "simulation.validation_samples must be at least 1000");

        let out = &self.outputs;
        ensure!(out.band_state >= 1 && out.band_state <= n, "outputs.band_state must be in 1..={n}");
        ensure!(out.band_quantile > 0.0 && out.band_quantile < 0.5, "outputs.band_quantile must lie in (0, 0.5)");
        Ok(())
    }
}

fn rect(name: &str, rows: &[Vec<f64>]) -> Result<(usize, usize)> {
    ensure!(!rows.is_empty(), "{name} is empty");
    let cols = rows[0].len();
    ensure!(rows.iter().all(|r| r.len() == cols), "{name} has rows of different lengths");
    ensure!(rows.iter().flatten().all(|x| x.is_finite()), "{name} has non-finite entries");
    Ok((rows.len(), cols))
}

fn square(name: &str, rows: &[Vec<f64>]) -> Result<usize> {
    let (r, c) = rect(name, rows)?;
    ensure!(r == c, "{name} must be square, got {r}x{c}");
    Ok(r)
}

fn faces(name: &str, normals: &[Vec<f64>], offsets: &[f64], dim: usize) -> Result<()> {
    let (rows, cols) = rect(&format!("{name}_normals"), normals)?;
    ensure!(cols == dim, "{name}_normals must have {dim} columns");
    ensure!(rows == offsets.len(), "{name}_normals has {rows} rows but {name}_offsets has {}", offsets.len());
    ensure!(offsets.iter().all(|h| h.is_finite() && *h >= 0.0), "{name}_offsets must be non-negative (origin inside)");
    Ok(())
}
