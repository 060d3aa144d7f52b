//! Run configuration: a TOML file with sections [window], [model],
//! [lyapunov], [run], [output]. Parsing is strict (unknown keys rejected)
//! and validation happens before any computation, so a config that loads
//! cleanly can be handed straight to certification.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{uniform_times, InitialState};
use crate::geometry::{Boundary, GeometryError, Window};
use crate::kernels::{KernelError, Profile, RadialKernel};
use crate::rates::Variant;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("config parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("[{section}] {message}")]
    Invalid {
        section: &'static str,
        message: String,
    },
}

impl ConfigError {
    fn invalid(section: &'static str, message: impl Into<String>) -> Self {
        ConfigError::Invalid {
            section,
            message: message.into(),
        }
    }
}

impl From<GeometryError> for ConfigError {
    fn from(e: GeometryError) -> Self {
        ConfigError::invalid("window", e.to_string())
    }
}

/// Top-level run configuration. Round-trips through serde so the manifest
/// can embed the resolved form.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub window: WindowConfig,
    pub model: ModelConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lyapunov: Option<LyapunovConfig>,
    pub run: RunConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindowConfig {
    pub dim: usize,
    pub side: f64,
    pub boundary: Boundary,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VariantName {
    Fecundity,
    Establishment,
    Glauber,
    Surgailis,
    Contact,
}

impl VariantName {
    pub fn as_str(&self) -> &'static str {
        match self {
            VariantName::Fecundity => "fecundity",
            VariantName::Establishment => "establishment",
            VariantName::Glauber => "glauber",
            VariantName::Surgailis => "surgailis",
            VariantName::Contact => "contact",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: VariantName,
    /// Tail parameter of the reference weight (1+|x|)^-(d+eps).
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bconst: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub z: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a: Option<KernelConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phi: Option<KernelConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c: Option<KernelConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub g: Option<KernelConfig>,
    /// Contact only: refuse to run when the offspring mass is >= 1.
    /// Defaults to true; set false explicitly for negative controls.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub require_subcritical: Option<bool>,
}

fn default_eps() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProfileName {
    Zero,
    TopHat,
    Triangular,
    Gaussian,
    PowerLaw,
}

/// A kernel table: profile name plus its parameters. Kept flat (every
/// parameter optional) so strict key checking still works; `build`
/// enforces which parameters each profile takes.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelConfig {
    pub profile: ProfileName,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub height: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub radius: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub amplitude: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cutoff: Option<f64>,
}

impl KernelConfig {
    /// Builds the kernel, rejecting parameters the profile does not take.
    pub fn build(&self, role: &'static str, dim: usize) -> Result<RadialKernel, ConfigError> {
        let bad = |msg: String| ConfigError::Invalid {
            section: "model",
            message: format!("kernel {role}: {msg}"),
        };
        let need = |v: Option<f64>, name: &str| {
            v.ok_or_else(|| bad(format!("profile requires '{name}'")))
        };
        let forbid = |v: Option<f64>, name: &str| {
            if v.is_some() {
                Err(bad(format!("profile does not take '{name}'")))
            } else {
                Ok(())
            }
        };
        let profile = match self.profile {
            ProfileName::Zero => {
                for (v, n) in [
                    (self.height, "height"),
                    (self.radius, "radius"),
                    (self.amplitude, "amplitude"),
                    (self.beta, "beta"),
                    (self.sigma, "sigma"),
                    (self.cutoff, "cutoff"),
                ] {
                    forbid(v, n)?;
                }
                Profile::Zero
            }
            ProfileName::TopHat | ProfileName::Triangular => {
                for (v, n) in [
                    (self.amplitude, "amplitude"),
                    (self.beta, "beta"),
                    (self.sigma, "sigma"),
                    (self.cutoff, "cutoff"),
                ] {
                    forbid(v, n)?;
                }
                let height = need(self.height, "height")?;
                let radius = need(self.radius, "radius")?;
                if self.profile == ProfileName::TopHat {
                    Profile::TopHat { height, radius }
                } else {
                    Profile::Triangular { height, radius }
                }
            }
            ProfileName::Gaussian => {
                for (v, n) in [
                    (self.height, "height"),
                    (self.radius, "radius"),
                    (self.beta, "beta"),
                ] {
                    forbid(v, n)?;
                }
                Profile::Gaussian {
                    amplitude: need(self.amplitude, "amplitude")?,
                    sigma: need(self.sigma, "sigma")?,
                }
            }
            ProfileName::PowerLaw => {
                for (v, n) in [
                    (self.height, "height"),
                    (self.radius, "radius"),
                    (self.sigma, "sigma"),
                ] {
                    forbid(v, n)?;
                }
                Profile::PowerLaw {
                    amplitude: need(self.amplitude, "amplitude")?,
                    beta: need(self.beta, "beta")?,
                }
            }
        };
        let kernel = match self.cutoff {
            Some(r) => RadialKernel::with_cutoff(profile, dim, r),
            None => RadialKernel::new(profile, dim),
        };
        kernel.map_err(|e: KernelError| bad(e.to_string()))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LyapunovConfig {
    /// Return-time threshold K. Defaults to 4 b<h> at certification time.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k_level: Option<f64>,
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default = "default_theta")]
    pub theta: f64,
}

fn default_delta() -> f64 {
    0.1
}

fn default_theta() -> f64 {
    0.25
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AlgorithmName {
    #[default]
    Driver,
    PerParent,
    Coupled,
}

impl AlgorithmName {
    pub fn as_str(&self) -> &'static str {
        match self {
            AlgorithmName::Driver => "driver",
            AlgorithmName::PerParent => "per-parent",
            AlgorithmName::Coupled => "coupled",
        }
    }
}

impl std::str::FromStr for AlgorithmName {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "driver" => Ok(AlgorithmName::Driver),
            "per-parent" => Ok(AlgorithmName::PerParent),
            "coupled" => Ok(AlgorithmName::Coupled),
            other => Err(format!(
                "unknown algorithm {other:?} (expected driver, per-parent, or coupled)"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitialKind {
    Empty,
    Poisson,
    Uniform,
    Explicit,
    Cluster,
}

/// Initial state table. Flat for the same strict-keys reason as
/// `KernelConfig`; `validate` pins which fields each kind takes.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialConfig {
    pub kind: InitialKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub intensity: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub count: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub points: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_w: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spacing: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub t_max: f64,
    #[serde(default = "default_replicates")]
    pub replicates: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub algorithm: AlgorithmName,
    /// Number of uniform sample times over (0, t_max]. Ignored when
    /// `times` is given. Defaults to 32.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_times: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub times: Option<Vec<f64>>,
    /// Half side of the centered counting box; enables the `count_box`
    /// observable.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub box_half_side: Option<f64>,
    pub initial: InitialConfig,
}

fn default_replicates() -> usize {
    1
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: PathBuf,
    pub emit_events: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            dir: PathBuf::from("out"),
            emit_events: false,
        }
    }
}

impl Config {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let cfg: Config = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    /// Structural validation: everything checkable without running the
    /// certification numerics.
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.build_window()?;
        self.model.validate()?;
        // surfaces kernel parameter mixups (wrong fields for a profile,
        // out-of-range values) before any run machinery starts
        self.model.build_variant(self.window.dim)?;
        if let Some(ly) = &self.lyapunov {
            ly.validate()?;
            if self.model.variant == VariantName::Contact {
                return Err(ConfigError::invalid(
                    "lyapunov",
                    "the contact model has no certified global bound, so the drift \
                     calibration does not apply; drop the [lyapunov] section",
                ));
            }
        }
        self.run.validate(&self.window)?;
        if self.run.initial.kind == InitialKind::Cluster && self.lyapunov.is_none() {
            return Err(ConfigError::invalid(
                "run",
                "initial kind 'cluster' needs the [lyapunov] section to define W",
            ));
        }
        Ok(())
    }

    pub fn build_window(&self) -> Result<Window, ConfigError> {
        Ok(Window::new(
            self.window.dim,
            self.window.side,
            self.window.boundary,
        )?)
    }

    /// The resolved sample grid: explicit `times` if given, otherwise
    /// `n_times` uniform points over (0, t_max], and just {0} when
    /// t_max = 0.
    pub fn resolved_times(&self) -> Vec<f64> {
        if let Some(ts) = &self.run.times {
            return ts.clone();
        }
        if self.run.t_max == 0.0 {
            return vec![0.0];
        }
        uniform_times(self.run.t_max, self.run.n_times.unwrap_or(32))
    }

    /// Rewrites the schedule in explicit form and pins CLI overrides, so
    /// the manifest copy reproduces the run without re-resolution.
    pub fn resolve(&mut self) {
        self.run.times = Some(self.resolved_times());
        self.run.n_times = None;
    }
}

impl ModelConfig {
    fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| ConfigError::Invalid {
            section: "model",
            message: m,
        };
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(bad(format!("eps must be positive and finite, got {}", self.eps)));
        }
        let kernel_roles = [
            (&self.a, "a"),
            (&self.phi, "phi"),
            (&self.c, "c"),
            (&self.g, "g"),
        ];
        let scalar_roles = [(self.bconst, "bconst"), (self.z, "z")];
        // which keys each variant takes
        let (kernels_needed, scalars_needed): (&[&str], &[&str]) = match self.variant {
            VariantName::Fecundity | VariantName::Establishment => (&["a", "phi", "c"], &[]),
            VariantName::Glauber => (&["phi"], &["z"]),
            VariantName::Surgailis => (&[], &["bconst"]),
            VariantName::Contact => (&["g"], &[]),
        };
        for (slot, name) in kernel_roles {
            let needed = kernels_needed.contains(&name);
            if needed && slot.is_none() {
                return Err(bad(format!(
                    "variant '{}' requires kernel table '{name}'",
                    self.variant.as_str()
                )));
            }
            if !needed && slot.is_some() {
                return Err(bad(format!(
                    "variant '{}' does not take kernel table '{name}'",
                    self.variant.as_str()
                )));
            }
        }
        for (slot, name) in scalar_roles {
            let needed = scalars_needed.contains(&name);
            if needed && slot.is_none() {
                return Err(bad(format!(
                    "variant '{}' requires '{name}'",
                    self.variant.as_str()
                )));
            }
            if !needed && slot.is_some() {
                return Err(bad(format!(
                    "variant '{}' does not take '{name}'",
                    self.variant.as_str()
                )));
            }
        }
        if self.require_subcritical.is_some() && self.variant != VariantName::Contact {
            return Err(bad(format!(
                "'require_subcritical' applies only to the contact model, not '{}'",
                self.variant.as_str()
            )));
        }
        Ok(())
    }

    /// Whether the subcriticality gate is on (contact only; defaults true).
    pub fn subcritical_required(&self) -> bool {
        self.variant == VariantName::Contact && self.require_subcritical.unwrap_or(true)
    }

    /// Builds the model variant with kernels at the window dimension.
    /// Parameter errors here are config errors; the admissibility
    /// inequalities are checked later by certification.
    pub fn build_variant(&self, dim: usize) -> Result<Variant, ConfigError> {
        let k = |slot: &Option<KernelConfig>, role: &'static str| {
            slot.as_ref()
                .expect("validated")
                .build(role, dim)
        };
        Ok(match self.variant {
            VariantName::Fecundity => Variant::Fecundity {
                a: k(&self.a, "a")?,
                phi: k(&self.phi, "phi")?,
                c: k(&self.c, "c")?,
            },
            VariantName::Establishment => Variant::Establishment {
                a: k(&self.a, "a")?,
                phi: k(&self.phi, "phi")?,
                c: k(&self.c, "c")?,
            },
            VariantName::Glauber => Variant::Glauber {
                z: self.z.expect("validated"),
                phi: k(&self.phi, "phi")?,
            },
            VariantName::Surgailis => Variant::Surgailis {
                bconst: self.bconst.expect("validated"),
            },
            VariantName::Contact => Variant::Contact {
                g: k(&self.g, "g")?,
            },
        })
    }
}

impl LyapunovConfig {
    fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| ConfigError::Invalid {
            section: "lyapunov",
            message: m,
        };
        if let Some(k) = self.k_level {
            if !(k > 0.0 && k.is_finite()) {
                return Err(bad(format!("k_level must be positive and finite, got {k}")));
            }
        }
        if !(self.delta >= 0.0 && self.delta.is_finite()) {
            return Err(bad(format!("delta must be nonnegative and finite, got {}", self.delta)));
        }
        if !(self.theta > 0.0 && self.theta < 0.5) {
            return Err(bad(format!("theta must lie in (0, 1/2), got {}", self.theta)));
        }
        Ok(())
    }
}

impl RunConfig {
    fn validate(&self, window: &WindowConfig) -> Result<(), ConfigError> {
        let bad = |m: String| ConfigError::Invalid {
            section: "run",
            message: m,
        };
        if !(self.t_max >= 0.0 && self.t_max.is_finite()) {
            return Err(bad(format!("t_max must be nonnegative and finite, got {}", self.t_max)));
        }
        if self.replicates == 0 {
            return Err(bad("replicates must be at least 1".into()));
        }
        if self.times.is_some() && self.n_times.is_some() {
            return Err(bad("give either 'times' or 'n_times', not both".into()));
        }
        if let Some(n) = self.n_times {
            if n == 0 {
                return Err(bad("n_times must be at least 1".into()));
            }
        }
        if let Some(ts) = &self.times {
            if ts.is_empty() {
                return Err(bad("'times' must not be empty".into()));
            }
            if ts.windows(2).any(|p| p[0] > p[1]) {
                return Err(bad("'times' must be nondecreasing".into()));
            }
            if ts.iter().any(|&t| !(t >= 0.0) || t > self.t_max) {
                return Err(bad(format!("'times' must lie in [0, t_max = {}]", self.t_max)));
            }
        }
        if let Some(h) = self.box_half_side {
            if !(h > 0.0 && 2.0 * h <= window.side) {
                return Err(bad(format!(
                    "box_half_side must be positive with the box inside the window \
                     (0 < {h} and 2*{h} <= side = {})",
                    window.side
                )));
            }
        }
        self.initial.validate(window)
    }
}

impl InitialConfig {
    fn validate(&self, window: &WindowConfig) -> Result<(), ConfigError> {
        let bad = |m: String| ConfigError::Invalid {
            section: "run",
            message: format!("initial: {m}"),
        };
        let forbid_f = |v: Option<f64>, name: &str| {
            if v.is_some() {
                Err(bad(format!("kind does not take '{name}'")))
            } else {
                Ok(())
            }
        };
        match self.kind {
            InitialKind::Empty => {
                forbid_f(self.intensity, "intensity")?;
                forbid_f(self.target_w, "target_w")?;
                forbid_f(self.spacing, "spacing")?;
                if self.count.is_some() || self.points.is_some() {
                    return Err(bad("kind 'empty' takes no parameters".into()));
                }
            }
            InitialKind::Poisson => {
                forbid_f(self.target_w, "target_w")?;
                forbid_f(self.spacing, "spacing")?;
                if self.count.is_some() || self.points.is_some() {
                    return Err(bad("kind 'poisson' takes only 'intensity'".into()));
                }
                let lam = self
                    .intensity
                    .ok_or_else(|| bad("kind 'poisson' requires 'intensity'".into()))?;
                if !(lam >= 0.0 && lam.is_finite()) {
                    return Err(bad(format!("intensity must be nonnegative and finite, got {lam}")));
                }
            }
            InitialKind::Uniform => {
                forbid_f(self.intensity, "intensity")?;
                forbid_f(self.target_w, "target_w")?;
                forbid_f(self.spacing, "spacing")?;
                if self.points.is_some() {
                    return Err(bad("kind 'uniform' takes only 'count'".into()));
                }
                if self.count.is_none() {
                    return Err(bad("kind 'uniform' requires 'count'".into()));
                }
            }
            InitialKind::Explicit => {
                forbid_f(self.intensity, "intensity")?;
                forbid_f(self.target_w, "target_w")?;
                forbid_f(self.spacing, "spacing")?;
                if self.count.is_some() {
                    return Err(bad("kind 'explicit' takes only 'points'".into()));
                }
                let pts = self
                    .points
                    .as_ref()
                    .ok_or_else(|| bad("kind 'explicit' requires 'points'".into()))?;
                for (i, p) in pts.iter().enumerate() {
                    if p.len() != window.dim {
                        return Err(bad(format!(
                            "point {i} has {} coordinates, window dim is {}",
                            p.len(),
                            window.dim
                        )));
                    }
                    if p.iter().any(|v| !v.is_finite()) {
                        return Err(bad(format!("point {i} has a non-finite coordinate")));
                    }
                }
            }
            InitialKind::Cluster => {
                forbid_f(self.intensity, "intensity")?;
                if self.count.is_some() || self.points.is_some() {
                    return Err(bad("kind 'cluster' takes 'target_w' and 'spacing'".into()));
                }
                let t = self
                    .target_w
                    .ok_or_else(|| bad("kind 'cluster' requires 'target_w'".into()))?;
                let s = self
                    .spacing
                    .ok_or_else(|| bad("kind 'cluster' requires 'spacing'".into()))?;
                if !(t > 0.0 && t.is_finite()) || !(s > 0.0 && s.is_finite()) {
                    return Err(bad(format!(
                        "target_w and spacing must be positive and finite, got {t} and {s}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// The engine-level initial state for every kind that needs no W
    /// calibration. Cluster initials are expanded by the caller once the
    /// Lyapunov spec exists.
    pub fn to_engine(&self) -> Option<InitialState> {
        match self.kind {
            InitialKind::Empty => Some(InitialState::Empty),
            InitialKind::Poisson => Some(InitialState::PoissonField(self.intensity.expect("validated"))),
            InitialKind::Uniform => Some(InitialState::Uniform(self.count.expect("validated"))),
            InitialKind::Explicit => Some(InitialState::Explicit(
                self.points
                    .as_ref()
                    .expect("validated")
                    .iter()
                    .map(|p| crate::geometry::Point::from_slice(p))
                    .collect(),
            )),
            InitialKind::Cluster => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const DEMO: &str = r#"
        [window]
        dim = 1
        side = 10.0
        boundary = "periodic"

        [model]
        variant = "fecundity"
        eps = 2.0

        [model.a]
        profile = "power-law"
        amplitude = 0.4
        beta = 6.0
        cutoff = 4.95

        [model.phi]
        profile = "top-hat"
        height = 2.0
        radius = 1.0

        [model.c]
        profile = "top-hat"
        height = 0.6
        radius = 1.0

        [lyapunov]

        [run]
        t_max = 20.0
        replicates = 4
        seed = 42
        n_times = 8

        [run.initial]
        kind = "poisson"
        intensity = 3.0

        [output]
        dir = "out/demo"
        emit_events = true
    "#;

    #[test]
    fn demo_config_parses_and_builds() {
        let cfg = Config::from_toml_str(DEMO).unwrap();
        assert_eq!(cfg.window.dim, 1);
        assert_eq!(cfg.run.replicates, 4);
        assert_eq!(cfg.model.variant, VariantName::Fecundity);
        let w = cfg.build_window().unwrap();
        let v = cfg.model.build_variant(w.dim()).unwrap();
        assert_eq!(v.name(), "fecundity");
        let times = cfg.resolved_times();
        assert_eq!(times.len(), 8);
        assert_eq!(times[7], 20.0);
        assert!(cfg.run.initial.to_engine().is_some());
    }

    #[test]
    fn unknown_keys_are_rejected_everywhere() {
        for (needle, replacement) in [
            ("side = 10.0", "side = 10.0\nextra = 1"),
            ("eps = 2.0", "eps = 2.0\nmystery = 3"),
            ("t_max = 20.0", "t_max = 20.0\nwhatever = true"),
            ("emit_events = true", "emit_events = true\ncolor = \"red\""),
            ("intensity = 3.0", "intensity = 3.0\nshape = 2"),
            ("radius = 1.0\n\n        [model.c]", "radius = 1.0\nslope = 2.0\n\n        [model.c]"),
        ] {
            let text = DEMO.replacen(needle, replacement, 1);
            assert_ne!(text, DEMO);
            let err = Config::from_toml_str(&text).unwrap_err();
            assert!(matches!(err, ConfigError::Parse(_)), "{replacement}: {err}");
        }
    }

    #[test]
    fn variant_key_mismatches_are_config_errors() {
        // surgailis does not take kernels
        let text = DEMO
            .replacen("variant = \"fecundity\"", "variant = \"surgailis\"\nbconst = 0.5", 1);
        let err = Config::from_toml_str(&text).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("does not take kernel table 'a'"), "{msg}");

        // fecundity without c
        let start = DEMO.find("[model.c]").unwrap();
        let end = DEMO[start..].find("[lyapunov]").unwrap() + start;
        let text = format!("{}{}", &DEMO[..start], &DEMO[end..]);
        let err = Config::from_toml_str(&text).unwrap_err();
        assert!(err.to_string().contains("requires kernel table 'c'"), "{err}");

        // glauber needs z
        let text = DEMO
            .replacen("variant = \"fecundity\"", "variant = \"glauber\"", 1)
            .replacen("[model.a]", "[model.unused_a]", 1) // will fail on unknown key instead
            ;
        assert!(Config::from_toml_str(&text).is_err());
    }

    #[test]
    fn profile_parameter_mixups_are_rejected() {
        let text = DEMO.replacen("height = 2.0", "height = 2.0\nbeta = 3.0", 1);
        let err = Config::from_toml_str(&text).unwrap_err();
        assert!(err.to_string().contains("does not take 'beta'"), "{err}");

        let text = DEMO.replacen("amplitude = 0.4\n        beta = 6.0\n        cutoff = 4.95", "amplitude = 0.4", 1);
        let err = Config::from_toml_str(&text).unwrap_err();
        assert!(err.to_string().contains("requires 'beta'"), "{err}");
    }

    #[test]
    fn contact_lyapunov_and_cluster_rules() {
        let contact = r#"
            [window]
            dim = 1
            side = 20.0
            boundary = "free"

            [model]
            variant = "contact"

            [model.g]
            profile = "power-law"
            amplitude = 1.6
            beta = 5.0

            [run]
            t_max = 200.0
            replicates = 500
            seed = 7
            n_times = 50

            [run.initial]
            kind = "uniform"
            count = 50
        "#;
        let cfg = Config::from_toml_str(contact).unwrap();
        assert!(cfg.model.subcritical_required());
        assert!(matches!(
            cfg.run.initial.to_engine(),
            Some(InitialState::Uniform(50))
        ));

        let with_ly = contact.replacen("[run]", "[lyapunov]\n\n            [run]", 1);
        let err = Config::from_toml_str(&with_ly).unwrap_err();
        assert!(err.to_string().contains("no certified global bound"), "{err}");

        let ctrl = contact.replacen(
            "variant = \"contact\"",
            "variant = \"contact\"\nrequire_subcritical = false",
            1,
        );
        let cfg = Config::from_toml_str(&ctrl).unwrap();
        assert!(!cfg.model.subcritical_required());
    }

    #[test]
    fn cluster_requires_lyapunov_section() {
        let text = DEMO.replacen(
            "kind = \"poisson\"\n        intensity = 3.0",
            "kind = \"cluster\"\n        target_w = 13.0\n        spacing = 0.1",
            1,
        );
        // DEMO has [lyapunov], so this parses
        let cfg = Config::from_toml_str(&text).unwrap();
        assert!(cfg.run.initial.to_engine().is_none());

        let no_ly = text.replacen("[lyapunov]\n\n        ", "", 1);
        let err = Config::from_toml_str(&no_ly).unwrap_err();
        assert!(err.to_string().contains("'cluster' needs the [lyapunov]"), "{err}");
    }

    #[test]
    fn run_schedule_validation() {
        let both = DEMO.replacen("n_times = 8", "n_times = 8\ntimes = [1.0]", 1);
        assert!(Config::from_toml_str(&both).is_err());

        let decreasing = DEMO.replacen("n_times = 8", "times = [2.0, 1.0]", 1);
        assert!(Config::from_toml_str(&decreasing).is_err());

        let beyond = DEMO.replacen("n_times = 8", "times = [1.0, 25.0]", 1);
        assert!(Config::from_toml_str(&beyond).is_err());

        let zero_t = DEMO
            .replacen("t_max = 20.0", "t_max = 0.0", 1)
            .replacen("n_times = 8", "", 1);
        let cfg = Config::from_toml_str(&zero_t).unwrap();
        assert_eq!(cfg.resolved_times(), vec![0.0]);
    }

    #[test]
    fn resolve_pins_times_and_round_trips() {
        let mut cfg = Config::from_toml_str(DEMO).unwrap();
        cfg.resolve();
        assert!(cfg.run.n_times.is_none());
        let ts = cfg.run.times.clone().unwrap();
        assert_eq!(ts.len(), 8);
        // resolved config survives a serde round trip unchanged
        let json = serde_json::to_string(&cfg).unwrap();
        let back: Config = serde_json::from_str(&json).unwrap();
        back.validate().unwrap();
        assert_eq!(back.run.times.unwrap(), ts);
        let toml_text = toml::to_string(&cfg).unwrap();
        let back2 = Config::from_toml_str(&toml_text).unwrap();
        assert_eq!(back2.run.times.unwrap(), ts);
    }
}
