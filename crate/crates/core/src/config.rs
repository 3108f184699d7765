//! Run configuration.
//!
//! The file is TOML: `[section]` headers followed by `key = value` lines.
//! Every key is optional; missing keys take the defaults below and each
//! default that was applied is logged. Unknown keys are rejected.
//!
//! ```toml
//! [grid]
//! n_x = 32          # spatial cells on [0, 1)
//! n_v = 12          # velocity points per axis
//! v_max = 4.0       # velocity box [-v_max, v_max]^3
//!
//! [sphere]
//! rule = "gauss-product"   # or "lebedev"
//! order = 4
//!
//! [kernel]
//! family = "bounded-cutoff"   # or "very-soft"
//! B0 = 1.0                    # bounded-cutoff only
//! gamma = 0.1
//! gamma_prime = 0.1
//! # c = 1.0, eta = 0.5, b2 = [1.0]   very-soft only
//!
//! [stats]
//! alpha = 0.0
//!
//! [initial]
//! profile = "bose-einstein"   # gaussian | plateau | custom
//! temperature = 1.0
//! mu = -0.5
//! drift = [0.0, 0.0, 0.0]
//! mollify = false
//! # mollifier_width = 0.05
//!
//! [time]
//! dt = 0.01
//! t_max = 1.0
//! dt_min = 0.00015625   # dt / 64
//! cfl_safety = 0.9
//! invariant_tolerance = 1e-12
//!
//! [output]
//! path = "out"
//! # cadence = 0.1, snapshot_cadence = 0.5
//! csv = false
//! tail_lambdas = [1.0, 2.0, 3.0]
//!
//! [ladder]
//! enabled = true
//!
//! [run]
//! # workers = 4
//!
//! # [sweep]
//! # alphas = [0.2, 0.1, 0.05]
//! # compare_times = [0.25, 0.5]
//! # include_bosonic = false
//! ```

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use log::info;
use serde::{Deserialize, Serialize};

use crate::collision::CollisionOperator;
use crate::error::{Error, Result};
use crate::integrator::{RunOptions, Stepper, StepperConfig};
use crate::kernel::{AngularTable, KernelSpec};
use crate::phase_grid::{build_sphere_quadrature, build_velocity_grid, SpatialGrid, SphereQuadrature, SphereRule, VelocityGrid};
use crate::prepare::{mollify_initial, sample_profile, InitialProfile, MollifyReport, ProfileReport};
use crate::statistics::StatisticsModel;
use crate::transport::{DistributionField, PhaseSpace};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    pub n_x: usize,
    pub n_v: usize,
    pub v_max: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            n_x: 32,
            n_v: 12,
            v_max: 4.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SphereConfig {
    pub rule: String,
    pub order: usize,
}

impl Default for SphereConfig {
    fn default() -> Self {
        Self {
            rule: "gauss-product".into(),
            order: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KernelConfig {
    pub family: String,
    #[serde(rename = "B0", skip_serializing_if = "Option::is_none")]
    pub b0: Option<f64>,
    pub gamma: f64,
    pub gamma_prime: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub c: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub b2: Option<Vec<f64>>,
}

impl Default for KernelConfig {
    fn default() -> Self {
        Self {
            family: "bounded-cutoff".into(),
            b0: None,
            gamma: 0.1,
            gamma_prime: 0.1,
            c: None,
            eta: None,
            b2: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct StatsConfig {
    pub alpha: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InitialConfig {
    pub profile: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mu: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub drift: Option<[f64; 3]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub amplitude: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub center_x: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub center_v: Option<[f64; 3]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub width_x: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub width_v: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub height: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub x_window: Option<[f64; 2]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub v_radius: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    pub mollify: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mollifier_width: Option<f64>,
}

impl Default for InitialConfig {
    fn default() -> Self {
        Self {
            profile: "bose-einstein".into(),
            temperature: None,
            mu: None,
            drift: None,
            amplitude: None,
            center_x: None,
            center_v: None,
            width_x: None,
            width_v: None,
            height: None,
            x_window: None,
            v_radius: None,
            path: None,
            mollify: false,
            mollifier_width: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TimeConfig {
    pub dt: f64,
    pub t_max: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dt_min: Option<f64>,
    pub cfl_safety: f64,
    pub invariant_tolerance: f64,
}

impl Default for TimeConfig {
    fn default() -> Self {
        Self {
            dt: 0.01,
            t_max: 1.0,
            dt_min: None,
            cfl_safety: 0.9,
            invariant_tolerance: 1e-12,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub path: PathBuf,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cadence: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub snapshot_cadence: Option<f64>,
    pub csv: bool,
    pub tail_lambdas: Vec<f64>,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            path: PathBuf::from("out"),
            cadence: None,
            snapshot_cadence: None,
            csv: false,
            tail_lambdas: vec![1.0, 2.0, 3.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LadderConfig {
    pub enabled: bool,
}

impl Default for LadderConfig {
    fn default() -> Self {
        Self { enabled: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub alphas: Vec<f64>,
    pub compare_times: Vec<f64>,
    pub include_bosonic: bool,
}

/// A full configuration; the optional `[sweep]` section turns it into an
/// alpha sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub grid: GridConfig,
    pub sphere: SphereConfig,
    pub kernel: KernelConfig,
    pub stats: StatsConfig,
    pub initial: InitialConfig,
    pub time: TimeConfig,
    pub output: OutputConfig,
    pub ladder: LadderConfig,
    pub run: RunSection,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepConfig>,
}

fn bad<T>(key: &str, message: impl Into<String>) -> Result<T> {
    Err(Error::ConfigValue {
        key: key.into(),
        message: message.into(),
    })
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

/// Reads, resolves and validates a configuration file.
pub fn load_config(path: &Path) -> Result<Config> {
    let text = fs::read_to_string(path).map_err(|source| Error::Read {
        path: path.to_path_buf(),
        source,
    })?;
    parse_config(&text)
}

/// Parses configuration text; see [`load_config`].
pub fn parse_config(text: &str) -> Result<Config> {
    let parse_error = |e: toml::de::Error| Error::ConfigParse {
        line: e.span().map_or(0, |s| line_of(text, s.start)),
        message: e.message().to_string(),
    };
    let raw: toml::Table = text.parse().map_err(parse_error)?;
    let mut config: Config = toml::from_str(text).map_err(parse_error)?;
    config.resolve();
    config.validate()?;
    let effective = toml::Table::try_from(&config).map_err(|e| Error::ConfigValue {
        key: "<root>".into(),
        message: e.to_string(),
    })?;
    log_defaults("", &raw, &effective);
    Ok(config)
}

fn log_defaults(prefix: &str, raw: &toml::Table, effective: &toml::Table) {
    for (key, value) in effective {
        let name = if prefix.is_empty() { key.clone() } else { format!("{prefix}.{key}") };
        match (raw.get(key), value) {
            (Some(toml::Value::Table(r)), toml::Value::Table(e)) => log_defaults(&name, r, e),
            (Some(_), _) => {}
            (None, toml::Value::Table(e)) => log_defaults(&name, &toml::Table::new(), e),
            (None, v) => info!("default {name} = {v}"),
        }
    }
}

impl Config {
    /// Fills the family- and profile-dependent defaults.
    fn resolve(&mut self) {
        let k = &mut self.kernel;
        match k.family.as_str() {
            "bounded-cutoff" => {
                k.b0.get_or_insert(1.0);
            }
            "very-soft" => {
                k.c.get_or_insert(1.0);
                k.eta.get_or_insert(0.5);
                k.b2.get_or_insert_with(|| vec![1.0]);
            }
            _ => {}
        }
        let p = &mut self.initial;
        match p.profile.as_str() {
            "bose-einstein" => {
                p.temperature.get_or_insert(1.0);
                p.mu.get_or_insert(-0.5);
                p.drift.get_or_insert([0.0; 3]);
            }
            "gaussian" => {
                p.amplitude.get_or_insert(1.0);
                p.center_x.get_or_insert(0.5);
                p.center_v.get_or_insert([0.0; 3]);
                p.width_v.get_or_insert(1.0);
            }
            "plateau" => {
                p.height.get_or_insert(1.0);
                p.x_window.get_or_insert([0.25, 0.75]);
                p.v_radius.get_or_insert(1.0);
            }
            _ => {}
        }
        let dt = self.time.dt;
        self.time.dt_min.get_or_insert(dt / 64.0);
    }

    /// Checks every key against the preconditions of the module it feeds.
    pub fn validate(&self) -> Result<()> {
        let g = &self.grid;
        if g.n_x < 2 {
            return bad("grid.n_x", "must be at least 2");
        }
        if g.n_v < 2 {
            return bad("grid.n_v", "must be at least 2");
        }
        if !(g.v_max.is_finite() && g.v_max > 0.0) {
            return bad("grid.v_max", "must be positive and finite");
        }

        match SphereRule::named(&self.sphere.rule, self.sphere.order) {
            Err(Error::UnknownRule(r)) => return bad("sphere.rule", format!("unknown rule `{r}`")),
            Err(e) => return bad("sphere.order", e.to_string()),
            Ok(_) => {}
        }

        self.validate_kernel()?;

        let alpha = self.stats.alpha;
        if !(0.0..=1.0).contains(&alpha) {
            return bad("stats.alpha", format!("{alpha} must lie in [0, 1]"));
        }

        self.validate_initial()?;
        if self.initial.mollify && !(alpha > 0.0 && alpha < 1.0) && self.sweep.is_none() {
            return bad("initial.mollify", "mollification needs 0 < stats.alpha < 1");
        }
        if let Some(w) = self.initial.mollifier_width {
            if !(w.is_finite() && w > 0.0) {
                return bad("initial.mollifier_width", "must be positive");
            }
        }

        let t = &self.time;
        if !(t.dt.is_finite() && t.dt > 0.0) {
            return bad("time.dt", "must be positive and finite");
        }
        if !(t.t_max.is_finite() && t.t_max >= 0.0) {
            return bad("time.t_max", "must be finite and non-negative");
        }
        if let Some(m) = t.dt_min {
            if !(m > 0.0 && m <= t.dt) {
                return bad("time.dt_min", "must lie in (0, time.dt]");
            }
        }
        if !(t.cfl_safety > 0.0 && t.cfl_safety <= 1.0) {
            return bad("time.cfl_safety", "must lie in (0, 1]");
        }
        if !(t.invariant_tolerance.is_finite() && t.invariant_tolerance >= 0.0) {
            return bad("time.invariant_tolerance", "must be finite and non-negative");
        }

        let o = &self.output;
        for (key, v) in [("output.cadence", o.cadence), ("output.snapshot_cadence", o.snapshot_cadence)] {
            if let Some(c) = v {
                if !(c.is_finite() && c > 0.0) {
                    return bad(key, "must be positive");
                }
            }
        }
        if o.tail_lambdas.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return bad("output.tail_lambdas", "speeds must be finite and non-negative");
        }
        if self.run.workers == Some(0) {
            return bad("run.workers", "must be at least 1");
        }

        if let Some(s) = &self.sweep {
            if s.alphas.is_empty() {
                return bad("sweep.alphas", "must list at least one alpha");
            }
            for (k, a) in s.alphas.iter().enumerate() {
                if !(*a > 0.0 && *a < 1.0) {
                    return bad("sweep.alphas", format!("{a} must lie in (0, 1)"));
                }
                if s.alphas[..k].contains(a) {
                    return bad("sweep.alphas", format!("duplicate value {a}"));
                }
                if k > 0 && *a > s.alphas[k - 1] {
                    return bad("sweep.alphas", "must be strictly decreasing");
                }
            }
            for c in &s.compare_times {
                if !(*c > 0.0 && *c <= t.t_max) {
                    return bad("sweep.compare_times", format!("{c} must lie in (0, time.t_max]"));
                }
            }
        }
        Ok(())
    }

    fn validate_kernel(&self) -> Result<()> {
        let k = &self.kernel;
        let (used, unused): (&[&str], &[(&str, bool)]) = match k.family.as_str() {
            "bounded-cutoff" => (&["B0"], &[("c", k.c.is_some()), ("eta", k.eta.is_some()), ("b2", k.b2.is_some())]),
            "very-soft" => (&["c", "eta", "b2"], &[("B0", k.b0.is_some())]),
            other => return bad("kernel.family", format!("unknown family `{other}`")),
        };
        if let Some((key, _)) = unused.iter().find(|(_, set)| *set) {
            return bad(&format!("kernel.{key}"), format!("not used by family `{}`", k.family));
        }
        match self.kernel_spec() {
            Ok(_) => Ok(()),
            Err(Error::InvalidKernel(m)) => {
                let key = ["gamma_prime", "gamma"]
                    .into_iter()
                    .chain(used.iter().copied())
                    .find(|key| m.starts_with(&format!("{key} ")) || (*key == "b2" && m.contains("angular")))
                    .unwrap_or("family");
                bad(&format!("kernel.{key}"), m)
            }
            Err(e) => Err(e),
        }
    }

    fn validate_initial(&self) -> Result<()> {
        let p = &self.initial;
        let allowed: &[&str] = match p.profile.as_str() {
            "bose-einstein" => &["temperature", "mu", "drift"],
            "gaussian" => &["amplitude", "center_x", "center_v", "width_x", "width_v"],
            "plateau" => &["height", "x_window", "v_radius"],
            "custom" => &["path"],
            other => return bad("initial.profile", format!("unknown profile `{other}`")),
        };
        let present = [
            ("temperature", p.temperature.is_some()),
            ("mu", p.mu.is_some()),
            ("drift", p.drift.is_some()),
            ("amplitude", p.amplitude.is_some()),
            ("center_x", p.center_x.is_some()),
            ("center_v", p.center_v.is_some()),
            ("width_x", p.width_x.is_some()),
            ("width_v", p.width_v.is_some()),
            ("height", p.height.is_some()),
            ("x_window", p.x_window.is_some()),
            ("v_radius", p.v_radius.is_some()),
            ("path", p.path.is_some()),
        ];
        for (key, set) in present {
            if set && !allowed.contains(&key) {
                return bad(&format!("initial.{key}"), format!("not used by profile `{}`", p.profile));
            }
        }
        if p.profile == "custom" && p.path.is_none() {
            return bad("initial.path", "custom profile needs a snapshot path");
        }
        let profile = self.initial_profile();
        if let Err(Error::InvalidProfile(m)) = profile.validate() {
            let key = allowed
                .iter()
                .find(|k| m.contains(*k) || (**k == "center_x" && m.contains("centre")) || (**k == "width_v" && m.contains("width")))
                .copied()
                .unwrap_or("profile");
            return bad(&format!("initial.{key}"), m);
        }
        Ok(())
    }

    /// The configuration as TOML text that loads back to `self`.
    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::ConfigValue {
            key: "<root>".into(),
            message: e.to_string(),
        })
    }

    pub fn velocity_grid(&self) -> Result<VelocityGrid> {
        build_velocity_grid(self.grid.n_v, self.grid.v_max)
    }

    pub fn phase(&self) -> Result<Arc<PhaseSpace>> {
        Ok(PhaseSpace::new(SpatialGrid::new(self.grid.n_x)?, self.velocity_grid()?))
    }

    pub fn kernel_spec(&self) -> Result<KernelSpec> {
        let k = &self.kernel;
        match k.family.as_str() {
            "bounded-cutoff" => KernelSpec::bounded_cutoff(k.b0.unwrap_or(1.0), k.gamma, k.gamma_prime),
            "very-soft" => KernelSpec::very_soft(
                k.c.unwrap_or(1.0),
                k.eta.unwrap_or(0.5),
                AngularTable::new(k.b2.clone().unwrap_or_else(|| vec![1.0]))?,
                k.gamma,
                k.gamma_prime,
            ),
            other => Err(Error::InvalidKernel(format!("unknown family `{other}`"))),
        }
    }

    pub fn quadrature(&self) -> Result<SphereQuadrature> {
        build_sphere_quadrature(SphereRule::named(&self.sphere.rule, self.sphere.order)?)
    }

    pub fn operator(&self, alpha: f64) -> Result<CollisionOperator> {
        Ok(CollisionOperator::new(
            StatisticsModel::new(alpha)?,
            self.kernel_spec()?,
            self.quadrature()?,
            self.velocity_grid()?,
        ))
    }

    pub fn stepper_config(&self) -> StepperConfig {
        let t = &self.time;
        StepperConfig {
            dt: t.dt,
            t_max: t.t_max,
            dt_min: t.dt_min.unwrap_or(t.dt / 64.0),
            cfl_safety: t.cfl_safety,
            invariant_tolerance: t.invariant_tolerance,
            ladder_enabled: self.ladder.enabled,
        }
    }

    pub fn stepper(&self, alpha: f64) -> Result<Stepper> {
        Stepper::new(self.operator(alpha)?, self.stepper_config())
    }

    pub fn run_options(&self, extra_times: Vec<f64>) -> RunOptions {
        RunOptions {
            cadence: self.output.cadence,
            extra_times,
            tail_lambdas: self.output.tail_lambdas.clone(),
        }
    }

    pub fn initial_profile(&self) -> InitialProfile {
        let p = &self.initial;
        match p.profile.as_str() {
            "gaussian" => InitialProfile::Gaussian {
                amplitude: p.amplitude.unwrap_or(1.0),
                center_x: p.center_x.unwrap_or(0.5),
                center_v: p.center_v.unwrap_or([0.0; 3]),
                width_x: p.width_x,
                width_v: p.width_v.unwrap_or(1.0),
            },
            "plateau" => InitialProfile::Plateau {
                height: p.height.unwrap_or(1.0),
                x_window: p.x_window.unwrap_or([0.25, 0.75]),
                v_radius: p.v_radius.unwrap_or(1.0),
            },
            "custom" => InitialProfile::Custom {
                path: p.path.clone().unwrap_or_default(),
            },
            _ => InitialProfile::BoseEinstein {
                temperature: p.temperature.unwrap_or(1.0),
                mu: p.mu.unwrap_or(-0.5),
                drift: p.drift.unwrap_or([0.0; 3]),
            },
        }
    }

    /// Samples the profile once, before any alpha-dependent treatment.
    pub fn sample_initial(&self) -> Result<(DistributionField, ProfileReport)> {
        sample_profile(&self.initial_profile(), self.phase()?)
    }

    /// Initial data for a run at `alpha`: mollified if configured and
    /// `0 < alpha < 1`, otherwise tagged with the saturation `1/alpha`.
    pub fn initial_for(&self, sampled: &DistributionField, alpha: f64) -> Result<(DistributionField, Option<MollifyReport>)> {
        if self.initial.mollify && alpha > 0.0 && alpha < 1.0 {
            let (f, rep) = mollify_initial(sampled, alpha, self.initial.mollifier_width)?;
            return Ok((f, Some(rep)));
        }
        let sat = StatisticsModel::new(alpha)?.saturation();
        Ok((sampled.clone().with_saturation(sat)?, None))
    }
}
