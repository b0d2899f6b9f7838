//! Run configuration: one JSON file per run, with flags overriding a few
//! common fields.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    Spectrum,
    Corrections,
    Obstruction,
    Convexity,
    MetricProbe,
    Weyl,
}

impl Experiment {
    pub fn name(self) -> &'static str {
        match self {
            Self::Spectrum => "spectrum",
            Self::Corrections => "corrections",
            Self::Obstruction => "obstruction",
            Self::Convexity => "convexity",
            Self::MetricProbe => "metric-probe",
            Self::Weyl => "weyl",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    /// Must match the subcommand when present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub experiment: Option<Experiment>,
    #[serde(default)]
    pub surface: SurfaceSpec,
    #[serde(default)]
    pub perturbation: PerturbationSpec,
    #[serde(default)]
    pub solver: SolverSpec,
    #[serde(default)]
    pub sweep: SweepSpec,
    #[serde(default)]
    pub convexity: ConvexitySpec,
    #[serde(default)]
    pub obstruction: ObstructionSpec,
    #[serde(default)]
    pub output: OutputSpec,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SurfaceSpec {
    Torus {
        nx: usize,
        ny: usize,
        #[serde(default = "one")]
        lx: f64,
        #[serde(default = "one")]
        ly: f64,
    },
    /// OFF file; a relative path is taken relative to the config file.
    Mesh { path: PathBuf },
}

impl Default for SurfaceSpec {
    fn default() -> Self {
        Self::Torus {
            nx: 16,
            ny: 16,
            lx: 1.0,
            ly: 1.0,
        }
    }
}

fn one() -> f64 {
    1.0
}

/// A nodal field: an expression in `x`, `y`, `z` (and `pi`), or a random
/// smooth field `offset + amplitude·r`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FieldSpec {
    Expression(String),
    Random { random: RandomField },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RandomField {
    /// Defaults to the run seed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default = "one")]
    pub amplitude: f64,
    #[serde(default)]
    pub offset: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SideSpec {
    InverseMetric,
    Metric,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbationSpec {
    #[serde(default = "inverse_metric")]
    pub side: SideSpec,
    #[serde(default = "default_f1")]
    pub f1: FieldSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub f2: Option<FieldSpec>,
}

impl Default for PerturbationSpec {
    fn default() -> Self {
        Self {
            side: SideSpec::InverseMetric,
            f1: default_f1(),
            f2: None,
        }
    }
}

fn inverse_metric() -> SideSpec {
    SideSpec::InverseMetric
}

fn default_f1() -> FieldSpec {
    FieldSpec::Expression("cos(2*pi*x)".into())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSpec {
    #[serde(default = "default_modes")]
    pub n_modes: usize,
    #[serde(default = "default_tol_deg")]
    pub tol_deg: f64,
    /// Modes kept in second-order sums; all computed modes when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truncation_modes: Option<usize>,
}

impl Default for SolverSpec {
    fn default() -> Self {
        Self {
            n_modes: default_modes(),
            tol_deg: default_tol_deg(),
            truncation_modes: None,
        }
    }
}

fn default_modes() -> usize {
    20
}

fn default_tol_deg() -> f64 {
    isospec_core::eigen::DEFAULT_TOL_DEG
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    #[serde(default = "default_tau_grid")]
    pub tau_grid: Vec<f64>,
    #[serde(default = "default_t_grid")]
    pub t_grid: Vec<f64>,
    /// Relative tolerance for the valid `t` range of the corrections.
    #[serde(default = "default_t_tol")]
    pub t_tolerance: f64,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            tau_grid: default_tau_grid(),
            t_grid: default_t_grid(),
            t_tolerance: default_t_tol(),
        }
    }
}

fn default_tau_grid() -> Vec<f64> {
    vec![0.0, 0.25, 0.5, 0.75, 1.0]
}

fn default_t_grid() -> Vec<f64> {
    vec![1e-3, 1e-2, 5e-2]
}

fn default_t_tol() -> f64 {
    1e-6
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvexitySpec {
    #[serde(default = "default_c1")]
    pub c1: FieldSpec,
    #[serde(default = "default_c2")]
    pub c2: FieldSpec,
}

impl Default for ConvexitySpec {
    fn default() -> Self {
        Self {
            c1: default_c1(),
            c2: default_c2(),
        }
    }
}

fn default_c1() -> FieldSpec {
    FieldSpec::Expression("1".into())
}

fn default_c2() -> FieldSpec {
    FieldSpec::Expression("1 + 0.2*cos(2*pi*x)".into())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObstructionSpec {
    /// Number of basis fields: Fourier fields on a torus (at most 9), vertex
    /// harmonics on a mesh.
    #[serde(default = "default_basis_dim")]
    pub basis_dim: usize,
    #[serde(default = "default_kernel_tol")]
    pub kernel_tol: f64,
}

impl Default for ObstructionSpec {
    fn default() -> Self {
        Self {
            basis_dim: default_basis_dim(),
            kernel_tol: default_kernel_tol(),
        }
    }
}

fn default_basis_dim() -> usize {
    9
}

fn default_kernel_tol() -> f64 {
    isospec_core::isospec::DEFAULT_KERNEL_TOL
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSpec {
    #[serde(default = "default_out")]
    pub dir: PathBuf,
}

impl Default for OutputSpec {
    fn default() -> Self {
        Self { dir: default_out() }
    }
}

fn default_out() -> PathBuf {
    PathBuf::from("isospec-out")
}

impl Config {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))?;
        let mut config: Config = serde_json::from_str(&text)
            .with_context(|| format!("invalid config {}", path.display()))?;
        if let SurfaceSpec::Mesh { path: mesh } = &mut config.surface {
            if mesh.is_relative() {
                let base = path.parent().unwrap_or(Path::new("."));
                *mesh = base.join(&*mesh);
            }
            // absolute in the manifest echo, so reruns work from any directory
            if let Ok(abs) = mesh.canonicalize() {
                *mesh = abs;
            }
        }
        Ok(config)
    }

    /// Range checks that do not need the surface.
    pub fn validate(&self, experiment: Experiment) -> anyhow::Result<()> {
        if let Some(e) = self.experiment {
            if e != experiment {
                bail!(
                    "config is for experiment '{}' but '{}' was requested",
                    e.name(),
                    experiment.name()
                );
            }
        }
        match &self.surface {
            SurfaceSpec::Torus { nx, ny, lx, ly } => {
                if *nx < 4 || *ny < 4 {
                    bail!("torus needs at least 4x4 nodes, got {nx}x{ny}");
                }
                if !(*lx > 0.0 && *ly > 0.0 && lx.is_finite() && ly.is_finite()) {
                    bail!("torus side lengths must be positive and finite");
                }
            }
            SurfaceSpec::Mesh { path } => {
                if !path.is_file() {
                    bail!("mesh file {} does not exist", path.display());
                }
            }
        }
        let s = &self.solver;
        if s.n_modes == 0 {
            bail!("solver.n_modes must be at least 1");
        }
        if !(1e-12..=1e-2).contains(&s.tol_deg) {
            bail!(
                "solver.tol_deg must lie in [1e-12, 1e-2], got {}",
                s.tol_deg
            );
        }
        if s.truncation_modes == Some(0) {
            bail!("solver.truncation_modes must be at least 1");
        }
        if self.sweep.tau_grid.iter().any(|t| !(0.0..=1.0).contains(t)) {
            bail!("sweep.tau_grid values must lie in [0, 1]");
        }
        if self
            .sweep
            .t_grid
            .iter()
            .any(|t| !t.is_finite() || *t == 0.0)
        {
            bail!("sweep.t_grid values must be finite and nonzero");
        }
        if self.sweep.t_tolerance.is_nan() || self.sweep.t_tolerance <= 0.0 {
            bail!("sweep.t_tolerance must be positive");
        }
        let o = &self.obstruction;
        if o.basis_dim == 0 {
            bail!("obstruction.basis_dim must be at least 1");
        }
        if !(o.kernel_tol > 0.0 && o.kernel_tol < 1.0) {
            bail!("obstruction.kernel_tol must lie in (0, 1)");
        }
        if experiment == Experiment::Weyl && s.n_modes < isospec_core::isospec::WEYL_MIN_MODES {
            bail!(
                "weyl needs solver.n_modes >= {}, got {}",
                isospec_core::isospec::WEYL_MIN_MODES,
                s.n_modes
            );
        }
        for (name, f) in [
            ("perturbation.f1", Some(&self.perturbation.f1)),
            ("perturbation.f2", self.perturbation.f2.as_ref()),
            ("convexity.c1", Some(&self.convexity.c1)),
            ("convexity.c2", Some(&self.convexity.c2)),
        ] {
            if let Some(FieldSpec::Random { random }) = f {
                if !(random.amplitude.is_finite() && random.offset.is_finite()) {
                    bail!("{name}: random field amplitude and offset must be finite");
                }
            }
        }
        Ok(())
    }
}
