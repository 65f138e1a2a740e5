//! Experiment configuration files.
//!
//! A single TOML document describes the network, the ensemble run, the flow
//! integrator, which diagnostics to compute and where outputs go. Every field
//! except the initial kernel has a default; unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::activation::Activation;
use crate::ensemble::{Checkpoints, NetworkConfig, RunOptions, Sampler, DEFAULT_GROUPS};
use crate::error::{Error, Result};
use crate::flow::{FlowModel, IntegratorConfig, Mode};
use crate::kernel::KernelMatrix;
use crate::quadrature::{QuadratureRule, QuadratureSpec};
use crate::rng::SeedPolicy;

fn default_width() -> usize {
    64
}
fn default_depth() -> usize {
    800
}
fn default_eps() -> f64 {
    0.05
}
fn default_alpha() -> f64 {
    1.0
}
fn default_cw() -> f64 {
    2.0
}
fn default_inputs() -> usize {
    4
}
fn default_members() -> u64 {
    100_000
}
fn default_groups() -> usize {
    DEFAULT_GROUPS
}
fn default_checkpoints() -> CheckpointSpec {
    CheckpointSpec::Count(40)
}
fn default_substeps() -> usize {
    4
}
fn default_true() -> bool {
    true
}
fn default_kernel_components() -> Vec<[usize; 2]> {
    vec![[0, 0], [0, 1]]
}
fn default_pair_components() -> Vec<[usize; 4]> {
    vec![[0, 0, 0, 0], [0, 1, 0, 1]]
}
fn default_out_dir() -> PathBuf {
    PathBuf::from("runs")
}

/// Network parameters. The initial kernel is given either explicitly as
/// `k0_init` or as an equicorrelated `(kappa, rho)` over `inputs` points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSection {
    #[serde(default = "default_width")]
    pub width: usize,
    #[serde(default = "default_depth")]
    pub depth: usize,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_cw")]
    pub cw: f64,
    #[serde(default)]
    pub cb: f64,
    #[serde(default = "default_activation")]
    pub activation: Activation,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k0_init: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kappa: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho: Option<f64>,
    #[serde(default = "default_inputs")]
    pub inputs: usize,
}

fn default_activation() -> Activation {
    Activation::Tanh
}

/// Either a number of evenly spaced checkpoints or an explicit list.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CheckpointSpec {
    Count(usize),
    Layers(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleSection {
    #[serde(default = "default_members")]
    pub members: u64,
    #[serde(default)]
    pub master_seed: u64,
    /// Track cross-neuron four-point sums (needed by the bridge check).
    #[serde(default)]
    pub heavy: bool,
    /// Track `S^(p,q)` moments (needed by the empirical hierarchy check).
    #[serde(default)]
    pub hierarchy: bool,
    #[serde(default = "default_checkpoints")]
    pub checkpoints: CheckpointSpec,
    #[serde(default = "default_groups")]
    pub groups: usize,
    #[serde(default)]
    pub sampler: Sampler,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowSection {
    #[serde(default)]
    pub mode: Mode,
    #[serde(default = "default_substeps")]
    pub substeps: usize,
    #[serde(default = "default_true")]
    pub wishart_term: bool,
    #[serde(default)]
    pub quadrature: QuadratureSpec,
}

/// Diagnostics that `diagnose` can compute.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Check {
    SigmaSources,
    V4Relative,
    K1Localization,
    U1Sources,
    Rv4,
    Bridge,
    Hierarchy,
}

impl Check {
    pub fn all() -> Vec<Check> {
        vec![
            Check::SigmaSources,
            Check::V4Relative,
            Check::K1Localization,
            Check::U1Sources,
            Check::Rv4,
            Check::Bridge,
            Check::Hierarchy,
        ]
    }

    pub fn name(self) -> &'static str {
        match self {
            Check::SigmaSources => "sigma_sources",
            Check::V4Relative => "v4_relative",
            Check::K1Localization => "k1_localization",
            Check::U1Sources => "u1_sources",
            Check::Rv4 => "rv4",
            Check::Bridge => "bridge",
            Check::Hierarchy => "hierarchy",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagnosticsSection {
    #[serde(default = "Check::all")]
    pub checks: Vec<Check>,
    /// Kernel components `(a, b)` to report.
    #[serde(default = "default_kernel_components")]
    pub kernel_components: Vec<[usize; 2]>,
    /// Pair-space components `(a, b, c, d)` to report.
    #[serde(default = "default_pair_components")]
    pub pair_components: Vec<[usize; 4]>,
}

impl Default for DiagnosticsSection {
    fn default() -> Self {
        Self {
            checks: Check::all(),
            kernel_components: default_kernel_components(),
            pair_components: default_pair_components(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IoSection {
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
}

impl Default for IoSection {
    fn default() -> Self {
        Self {
            out_dir: default_out_dir(),
        }
    }
}

/// Sweep axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    Eps,
    #[serde(rename = "n")]
    Width,
    #[serde(rename = "T")]
    Time,
}

impl std::fmt::Display for Axis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Axis::Eps => "eps",
            Axis::Width => "n",
            Axis::Time => "T",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub axis: Axis,
    pub values: Vec<f64>,
}

/// Complete description of one experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub network: NetworkSection,
    #[serde(default)]
    pub ensemble: EnsembleSection,
    #[serde(default)]
    pub flow: FlowSection,
    #[serde(default)]
    pub diagnostics: DiagnosticsSection,
    #[serde(default)]
    pub io: IoSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSection>,
}

impl Default for EnsembleSection {
    fn default() -> Self {
        Self {
            members: default_members(),
            master_seed: 0,
            heavy: false,
            hierarchy: false,
            checkpoints: default_checkpoints(),
            groups: default_groups(),
            sampler: Sampler::default(),
        }
    }
}

impl Default for FlowSection {
    fn default() -> Self {
        Self {
            mode: Mode::Ladder,
            substeps: default_substeps(),
            wishart_term: true,
            quadrature: QuadratureSpec::default(),
        }
    }
}

impl NetworkSection {
    /// Section with the equicorrelated initial kernel `(kappa, rho)` and
    /// every other field at its default.
    pub fn equicorrelated(kappa: f64, rho: f64) -> Self {
        Self {
            width: default_width(),
            depth: default_depth(),
            eps: default_eps(),
            alpha: default_alpha(),
            cw: default_cw(),
            cb: 0.0,
            activation: default_activation(),
            k0_init: None,
            kappa: Some(kappa),
            rho: Some(rho),
            inputs: default_inputs(),
        }
    }

    fn k0(&self) -> Result<KernelMatrix> {
        match (&self.k0_init, self.kappa, self.rho) {
            (Some(rows), None, None) => {
                KernelMatrix::from_rows(rows).map_err(|e| Error::Config(format!("network.k0_init: {e}")))
            }
            (Some(_), _, _) => Err(Error::Config(
                "network: give either k0_init or (kappa, rho), not both".into(),
            )),
            (None, Some(kappa), Some(rho)) => {
                if self.inputs == 0 {
                    return Err(Error::Config("network.inputs must be at least 1".into()));
                }
                Ok(KernelMatrix::equicorrelated(self.inputs, kappa, rho))
            }
            (None, _, _) => Err(Error::Config(
                "network: missing initial kernel; set k0_init or both kappa and rho".into(),
            )),
        }
    }

    pub fn to_network(&self) -> Result<NetworkConfig> {
        let cfg = NetworkConfig {
            width: self.width,
            depth: self.depth,
            eps: self.eps,
            alpha: self.alpha,
            cw: self.cw,
            cb: self.cb,
            act: self.activation,
            k0_init: self.k0()?,
        };
        if cfg.depth == 0 {
            return Err(Error::Config("network.depth must be at least 1".into()));
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

impl ExperimentConfig {
    /// Desk-scale baseline: `n = 64`, `ε = 0.1`, `L = 200`, `M = 10⁵`.
    pub fn desk_baseline() -> Self {
        let mut network = NetworkSection::equicorrelated(2.0, 0.3);
        network.eps = 0.1;
        network.depth = 200;
        Self {
            network,
            ensemble: EnsembleSection::default(),
            flow: FlowSection::default(),
            diagnostics: DiagnosticsSection::default(),
            io: IoSection::default(),
            sweep: None,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    /// Read a TOML config, or the `config` object of a JSON run manifest.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        if path.extension().is_some_and(|e| e == "json") {
            #[derive(Deserialize)]
            struct Wrapper {
                config: ExperimentConfig,
            }
            let w: Wrapper = serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            w.config.validate()?;
            return Ok(w.config);
        }
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let net = self.network()?;
        if self.ensemble.members == 0 {
            return Err(Error::Config("ensemble.members must be at least 1".into()));
        }
        if self.ensemble.groups < 2 {
            return Err(Error::Config("ensemble.groups must be at least 2".into()));
        }
        if self.ensemble.members < self.ensemble.groups as u64 {
            return Err(Error::Config(format!(
                "ensemble.members ({}) must be at least ensemble.groups ({})",
                self.ensemble.members, self.ensemble.groups
            )));
        }
        let cps = self.checkpoints()?;
        if cps.last() > net.depth {
            return Err(Error::Config(format!(
                "ensemble.checkpoints: layer {} beyond depth {}",
                cps.last(),
                net.depth
            )));
        }
        if self.flow.mode == Mode::Continuous && net.alpha != 1.0 {
            return Err(Error::Config("flow.mode = \"rk4\" requires network.alpha = 1".into()));
        }
        self.integrator().validate()?;
        QuadratureRule::try_from(self.flow.quadrature)?;
        let n = net.points();
        if self.diagnostics.kernel_components.iter().flatten().any(|&i| i >= n)
            || self.diagnostics.pair_components.iter().flatten().any(|&i| i >= n)
        {
            return Err(Error::Config(format!(
                "diagnostics components must index the {n} inputs"
            )));
        }
        if let Some(s) = &self.sweep {
            if s.values.is_empty() {
                return Err(Error::Config("sweep.values must not be empty".into()));
            }
        }
        Ok(())
    }

    pub fn network(&self) -> Result<NetworkConfig> {
        self.network.to_network()
    }

    pub fn checkpoints(&self) -> Result<Checkpoints> {
        match &self.ensemble.checkpoints {
            CheckpointSpec::Count(0) => Err(Error::Config("ensemble.checkpoints must be at least 1".into())),
            CheckpointSpec::Count(c) => Ok(Checkpoints::evenly_spaced(self.network.depth, *c)),
            CheckpointSpec::Layers(l) => Checkpoints::new(l.clone()),
        }
    }

    pub fn run_options(&self) -> Result<RunOptions> {
        Ok(RunOptions {
            members: self.ensemble.members,
            seeds: SeedPolicy::new(self.ensemble.master_seed),
            checkpoints: self.checkpoints()?,
            heavy: self.ensemble.heavy,
            hierarchy: self.ensemble.hierarchy,
            groups: self.ensemble.groups,
            sampler: self.ensemble.sampler,
        })
    }

    pub fn integrator(&self) -> IntegratorConfig {
        let eps = self.network.eps;
        IntegratorConfig {
            mode: self.flow.mode,
            eps,
            t_final: eps * eps * self.network.depth as f64,
            substeps: self.flow.substeps,
            wishart_term: self.flow.wishart_term,
        }
    }

    pub fn flow_model(&self) -> Result<FlowModel> {
        let quad = QuadratureRule::try_from(self.flow.quadrature)?;
        Ok(FlowModel::from_network(&self.network()?, quad))
    }

    /// Checkpoint times of this config.
    pub fn checkpoint_times(&self) -> Result<Vec<f64>> {
        let e2 = self.network.eps * self.network.eps;
        Ok(self.checkpoints()?.layers().iter().map(|&l| e2 * l as f64).collect())
    }

    /// Copy with `eps` changed at fixed final time and checkpoint times.
    pub fn with_eps(&self, eps: f64) -> Result<Self> {
        if !(eps > 0.0 && eps.is_finite()) {
            return Err(Error::Config(format!("sweep eps must be positive, got {eps}")));
        }
        let times = self.checkpoint_times()?;
        let t_final = self.network.eps * self.network.eps * self.network.depth as f64;
        let mut out = self.clone();
        out.network.eps = eps;
        out.network.depth = ((t_final / (eps * eps)).round() as usize).max(1);
        out.ensemble.checkpoints = CheckpointSpec::Layers(layers_at(&times, eps, out.network.depth));
        Ok(out)
    }

    /// Copy with final time `t_final`; checkpoint times are kept up to it.
    pub fn with_t_final(&self, t_final: f64) -> Result<Self> {
        if !(t_final > 0.0 && t_final.is_finite()) {
            return Err(Error::Config(format!("sweep T must be positive, got {t_final}")));
        }
        let eps = self.network.eps;
        let mut out = self.clone();
        out.network.depth = ((t_final / (eps * eps)).round() as usize).max(1);
        let mut times: Vec<f64> = self.checkpoint_times()?.into_iter().filter(|&t| t <= t_final).collect();
        times.push(t_final);
        out.ensemble.checkpoints = CheckpointSpec::Layers(layers_at(&times, eps, out.network.depth));
        Ok(out)
    }

    pub fn with_width(&self, width: usize) -> Result<Self> {
        if width == 0 {
            return Err(Error::Config("sweep n must be at least 1".into()));
        }
        let mut out = self.clone();
        out.network.width = width;
        Ok(out)
    }
}

/// Nearest ladder layers to `times`, each followed by its successor.
pub fn layers_at(times: &[f64], eps: f64, depth: usize) -> Vec<usize> {
    let mut out = Vec::new();
    for &t in times {
        let l = ((t / (eps * eps)).round() as usize).min(depth);
        out.push(l);
        if l < depth {
            out.push(l + 1);
        }
    }
    out.sort_unstable();
    out.dedup();
    out
}
