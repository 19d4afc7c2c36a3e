//! Config-file schema: one sectioned key-value (TOML) file describes the
//! process, the grid, the perturbation family, the simulation parameters
//! and the verification setup. Every experiment is reproducible from the
//! file plus the seed inside it; unknown keys are rejected, and every
//! module precondition is re-checked at load.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::kernels::ProcessSpec;
use crate::montecarlo::SimConfig;
use crate::perturbations::{Bump, LocalMeasure, NonlocalPerturbation};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProcessSection {
    pub alpha: f64,
    pub mass: f64,
    #[serde(default = "default_kappa")]
    pub intensity_multiplier: f64,
}

fn default_kappa() -> f64 {
    1.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    pub half_width: f64,
    pub n: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BumpSection {
    pub center: f64,
    pub width: f64,
    pub height: f64,
}

impl BumpSection {
    fn to_bump(&self) -> Result<Bump> {
        Bump::new(self.center, self.width, self.height)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbationSection {
    /// Diagonal decay exponent of the jump perturbation (must exceed alpha).
    pub beta: f64,
    pub amp_plus: f64,
    pub amp_minus: f64,
    pub chi_plus: BumpSection,
    pub chi_minus: BumpSection,
    #[serde(default)]
    pub v_plus: Vec<BumpSection>,
    #[serde(default)]
    pub v_minus: Vec<BumpSection>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimSection {
    pub epsilon: f64,
    pub dt: f64,
    pub t_max: f64,
    pub n_paths: usize,
    pub master_seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight_cap: Option<f64>,
    /// Write per-path event logs for this many paths (debugging only).
    #[serde(default)]
    pub log_event_paths: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifySection {
    /// Check groups to run; empty means the full suite.
    #[serde(default)]
    pub checks: Vec<String>,
    #[serde(default = "default_levy_horizon")]
    pub levy_horizon: f64,
    #[serde(default)]
    pub levy_origin: f64,
    /// Path count override for the Levy-system check.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub levy_paths: Option<usize>,
    #[serde(default)]
    pub harmonicity_center: f64,
    #[serde(default = "default_union_center")]
    pub union_second_center: f64,
    /// Interval hosting the gauge checks.
    #[serde(default = "default_gauge_domain")]
    pub gauge_domain: (f64, f64),
    #[serde(default = "default_gauge_probes")]
    pub gauge_probes: Vec<f64>,
    #[serde(default = "default_green_probes")]
    pub green_probes: Vec<f64>,
}

fn default_levy_horizon() -> f64 {
    1.0
}

fn default_union_center() -> f64 {
    1.0
}

fn default_gauge_domain() -> (f64, f64) {
    (-5.0, 5.0)
}

fn default_gauge_probes() -> Vec<f64> {
    vec![-1.0, 0.0, 1.0]
}

fn default_green_probes() -> Vec<f64> {
    vec![-1.5, -0.5, 0.0, 0.7, 1.8]
}

impl Default for VerifySection {
    fn default() -> Self {
        Self {
            checks: Vec::new(),
            levy_horizon: default_levy_horizon(),
            levy_origin: 0.0,
            levy_paths: None,
            harmonicity_center: 0.0,
            union_second_center: default_union_center(),
            gauge_domain: default_gauge_domain(),
            gauge_probes: default_gauge_probes(),
            green_probes: default_green_probes(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateSection {
    #[serde(default = "default_sim_probes")]
    pub probes: Vec<f64>,
}

fn default_sim_probes() -> Vec<f64> {
    vec![-0.6, -0.2, 0.0, 0.3, 0.8]
}

impl Default for SimulateSection {
    fn default() -> Self {
        Self { probes: default_sim_probes() }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub process: ProcessSection,
    pub grid: GridSection,
    pub perturbation: PerturbationSection,
    pub sim: SimSection,
    #[serde(default)]
    pub verify: VerifySection,
    #[serde(default)]
    pub simulate: SimulateSection,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let cfg: RunConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// The built-in default configuration: massless alpha = 1.2 process on
    /// the [-20, 20] box at n = 2000 with one creation bump, one killing
    /// bump and a signed jump perturbation of disjoint bump supports.
    pub fn default_config() -> Self {
        let cfg = Self {
            process: ProcessSection { alpha: 1.2, mass: 0.0, intensity_multiplier: 1.0 },
            grid: GridSection { half_width: 20.0, n: 2000 },
            perturbation: PerturbationSection {
                beta: 2.0,
                amp_plus: 0.8,
                amp_minus: 0.5,
                chi_plus: BumpSection { center: -2.0, width: 1.5, height: 1.0 },
                chi_minus: BumpSection { center: 2.0, width: 1.5, height: 1.0 },
                v_plus: vec![BumpSection { center: 0.0, width: 2.0, height: 1.0 }],
                v_minus: vec![BumpSection { center: 3.0, width: 1.5, height: 0.6 }],
            },
            sim: SimSection {
                epsilon: 0.05,
                dt: 1e-3,
                t_max: 64.0,
                n_paths: 20_000,
                master_seed: 20_260_809,
                weight_cap: None,
                log_event_paths: 0,
            },
            verify: VerifySection::default(),
            simulate: SimulateSection::default(),
        };
        cfg.validate().expect("built-in default must validate");
        cfg
    }

    /// Re-check every module precondition the schema cannot express.
    pub fn validate(&self) -> Result<()> {
        let spec = self.process_spec().map_err(config_err)?;
        let grid = self.grid().map_err(config_err)?;
        let mu = self.local_measure().map_err(config_err)?;
        let f = self.nonlocal_perturbation().map_err(config_err)?;
        if self.perturbation.beta <= self.process.alpha {
            return Err(Error::Config(format!(
                "perturbation.beta = {} must exceed process.alpha = {}",
                self.perturbation.beta, self.process.alpha
            )));
        }
        // supports inside the quarter box so the box ladder of the
        // ground-state check stays admissible
        let quarter = 0.25 * grid.half_width();
        if mu.support_radius() > quarter || f.support_radius() > quarter {
            return Err(Error::Config(format!(
                "perturbation supports must fit inside a quarter box ({quarter})"
            )));
        }
        let h = grid.spacing();
        if !f.is_zero() && h.powf(self.perturbation.beta - spec.alpha()) > 0.1 + 1e-12 {
            return Err(Error::Config(format!(
                "grid spacing {h} does not resolve the certificate exponent"
            )));
        }
        self.sim_config().validate().map_err(config_err)?;
        let (ga, gb) = self.verify.gauge_domain;
        if !(ga < gb) || ga < -grid.half_width() || gb > grid.half_width() {
            return Err(Error::Config("gauge domain must be a sub-interval of the box".into()));
        }
        for &p in self.verify.gauge_probes.iter().chain(&self.simulate.probes) {
            if p.abs() >= grid.half_width() {
                return Err(Error::Config(format!("probe {p} outside the box")));
            }
        }
        Ok(())
    }

    pub fn process_spec(&self) -> Result<ProcessSpec> {
        ProcessSpec::with_intensity_multiplier(
            self.process.alpha,
            self.process.mass,
            self.process.intensity_multiplier,
        )
    }

    pub fn grid(&self) -> Result<Grid> {
        Grid::new(self.grid.half_width, self.grid.n)
    }

    pub fn local_measure(&self) -> Result<LocalMeasure> {
        let plus = self
            .perturbation
            .v_plus
            .iter()
            .map(BumpSection::to_bump)
            .collect::<Result<Vec<_>>>()?;
        let minus = self
            .perturbation
            .v_minus
            .iter()
            .map(BumpSection::to_bump)
            .collect::<Result<Vec<_>>>()?;
        Ok(LocalMeasure::new(plus, minus))
    }

    pub fn nonlocal_perturbation(&self) -> Result<NonlocalPerturbation> {
        NonlocalPerturbation::new(
            self.perturbation.amp_plus,
            self.perturbation.amp_minus,
            self.perturbation.beta,
            self.perturbation.chi_plus.to_bump()?,
            self.perturbation.chi_minus.to_bump()?,
        )
    }

    pub fn sim_config(&self) -> SimConfig {
        SimConfig {
            epsilon: self.sim.epsilon,
            dt: self.sim.dt,
            t_max: self.sim.t_max,
            n_paths: self.sim.n_paths,
            master_seed: self.sim.master_seed,
            weight_cap: self.sim.weight_cap,
        }
    }

    /// Digest of the full effective config (canonical serialization).
    pub fn digest(&self) -> String {
        let text = toml::to_string(self).expect("config serializes");
        short_sha(text.as_bytes())
    }

    /// Digest of the seed-free assembly inputs only (process, grid,
    /// perturbation): identical across seed changes.
    pub fn assembly_digest(&self) -> String {
        let process = toml::to_string(&self.process).unwrap();
        let grid = toml::to_string(&self.grid).unwrap();
        let pert = toml::to_string(&self.perturbation).unwrap();
        short_sha(format!("{process}\n{grid}\n{pert}").as_bytes())
    }
}

fn config_err(e: Error) -> Error {
    match e {
        Error::Config(_) => e,
        other => Error::Config(other.to_string()),
    }
}

fn short_sha(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    hasher
        .finalize()
        .iter()
        .take(8)
        .map(|b| format!("{b:02x}"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_roundtrips_through_toml() {
        let cfg = RunConfig::default_config();
        let text = toml::to_string(&cfg).unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        back.validate().unwrap();
        assert_eq!(cfg.digest(), back.digest());
    }

    #[test]
    fn unknown_keys_rejected() {
        let mut text = toml::to_string(&RunConfig::default_config()).unwrap();
        text.push_str("\n[bogus]\nkey = 1\n");
        assert!(toml::from_str::<RunConfig>(&text).is_err());
    }

    #[test]
    fn schema_recheck_catches_bad_values() {
        let mut cfg = RunConfig::default_config();
        cfg.grid.n = 15;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));

        let mut cfg = RunConfig::default_config();
        cfg.process.alpha = 2.5;
        assert!(cfg.validate().is_err());

        let mut cfg = RunConfig::default_config();
        cfg.perturbation.beta = 1.0; // below alpha
        assert!(cfg.validate().is_err());

        let mut cfg = RunConfig::default_config();
        cfg.sim.n_paths = 10;
        assert!(cfg.validate().is_err());

        let mut cfg = RunConfig::default_config();
        cfg.perturbation.v_plus[0].center = 18.0; // outside quarter box
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn assembly_digest_ignores_the_seed() {
        let a = RunConfig::default_config();
        let mut b = RunConfig::default_config();
        b.sim.master_seed = 1;
        assert_ne!(a.digest(), b.digest());
        assert_eq!(a.assembly_digest(), b.assembly_digest());
    }
}
