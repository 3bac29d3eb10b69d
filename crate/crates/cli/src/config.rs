//! Experiment configuration: one TOML file per run.
//!
//! ```toml
//! [system]
//! name = "so3"            # demo2d | so3 | custom
//! inertia = [1.0, 2.0, 3.0]
//! mode = "generalized"    # optional; so3 + classical selects the Casimir variant
//!
//! [simulate]
//! dt = 1e-3
//! horizon = 30.0          # optional, 20 for demo2d and 30 otherwise
//! n_trajectories = 20
//! seed = 7
//! region = { kind = "shell", dim = 3, r_min = 0.3, r_max = 2.0 }
//!
//! [data]
//! n_trajectories = 1000
//! n_samples_per = 1
//! stride = 0
//! dt = 1e-3
//! seed = 1
//! region = { kind = "box", lo = [-1.5, -1.5], hi = [1.5, 1.5] }
//!
//! [identify]              # any IdentConfig field
//! entropy_degree = 6
//! batch_size = 500
//! seed = 3
//!
//! [output]
//! dir = "runs/so3"
//! ```
//!
//! A custom system lists its polynomials in the record form
//! `[{ exponents = [2, 0], coeff = 0.5 }, ...]`; matrices are given by their
//! upper triangle, row by row.

use std::path::{Path, PathBuf};

use metriplectic::dynamics::{
    DatasetSpec, DerivativeMode, MetriplecticSystem, Mode, PoissonStructure, SamplingRegion,
};
use metriplectic::poly::{MatrixStructure, PolyMatrix, PolyRecord, Polynomial};
use metriplectic::sysid::IdentConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub system: SystemSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub simulate: Option<SimulateSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<DataSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub identify: Option<IdentConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<OutputSpec>,
    /// Whether `[identify]` named its seed explicitly.
    #[serde(skip)]
    pub identify_seed_given: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSpec {
    pub name: SystemName,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<Mode>,
    /// Principal moments for `so3`; identity when omitted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inertia: Option<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub custom: Option<CustomSystem>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SystemName {
    Demo2d,
    So3,
    Custom,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CustomSystem {
    pub dim: usize,
    pub poisson: PoissonSpec,
    pub hamiltonian: Vec<PolyRecord>,
    #[serde(default)]
    pub entropy: Vec<PolyRecord>,
    /// Upper triangle of `K`; identity when omitted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metric: Option<Vec<Vec<PolyRecord>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PoissonSpec {
    /// `"canonical"` or `"so3"`.
    Named(String),
    /// Upper triangle of the skew bivector (diagonal entries empty).
    Upper(Vec<Vec<PolyRecord>>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateSpec {
    pub dt: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub horizon: Option<f64>,
    pub n_trajectories: usize,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub region: Option<SamplingRegion>,
    /// Write every `csv_stride`-th RK4 state to the trajectory CSVs.
    #[serde(default = "default_csv_stride")]
    pub csv_stride: usize,
}

fn default_csv_stride() -> usize {
    10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSpec {
    pub n_trajectories: usize,
    pub n_samples_per: usize,
    #[serde(default)]
    pub stride: usize,
    pub dt: f64,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub region: Option<SamplingRegion>,
    #[serde(default)]
    pub derivative: DerivativeMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSpec {
    pub dir: PathBuf,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, CliError> {
        let mut cfg: RunConfig =
            toml::from_str(text).map_err(|e| CliError::Validation(format!("config: {e}")))?;
        // a stochastic identification needs an explicit seed
        let raw: toml::Table = toml::from_str(text).map_err(|e| CliError::Validation(format!("config: {e}")))?;
        let ident_seeded = raw
            .get("identify")
            .and_then(|v| v.as_table())
            .is_some_and(|t| t.contains_key("seed"));
        cfg.identify_seed_given = ident_seeded;
        if let Some(id) = &cfg.identify {
            if id.batch_size.is_some() && !ident_seeded {
                return Err(CliError::Validation(
                    "config: [identify] uses minibatches and needs an explicit seed".into(),
                ));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Validation(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            CliError::Validation(m) => CliError::Validation(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let sys = self.build_system()?;
        let n = sys.dim();
        let bad = |m: String| Err(CliError::Validation(m));
        if let Some(s) = &self.simulate {
            if !(s.dt > 0.0) || !s.dt.is_finite() {
                return bad(format!("simulate.dt must be positive, got {}", s.dt));
            }
            if let Some(h) = s.horizon {
                if !(h >= s.dt) || !h.is_finite() {
                    return bad(format!("simulate.horizon must be >= dt, got {h}"));
                }
            }
            if s.n_trajectories == 0 {
                return bad("simulate.n_trajectories must be >= 1".into());
            }
            if s.csv_stride == 0 {
                return bad("simulate.csv_stride must be >= 1".into());
            }
            check_region(s.region.as_ref(), n, "simulate.region")?;
        }
        if let Some(d) = &self.data {
            if !(d.dt > 0.0) || !d.dt.is_finite() {
                return bad(format!("data.dt must be positive, got {}", d.dt));
            }
            if d.n_trajectories == 0 || d.n_samples_per == 0 {
                return bad("data counts must be >= 1".into());
            }
            if d.n_samples_per > 1 && d.stride == 0 {
                return bad("data.stride must be >= 1 when n_samples_per > 1".into());
            }
            check_region(d.region.as_ref(), n, "data.region")?;
        }
        if let Some(id) = &self.identify {
            id.validate().map_err(|e| CliError::Validation(e.to_string()))?;
        }
        Ok(())
    }

    pub fn build_system(&self) -> Result<MetriplecticSystem, CliError> {
        let s = &self.system;
        let invalid = |e: &dyn std::fmt::Display| CliError::Validation(format!("system: {e}"));
        if s.inertia.is_some() && s.name != SystemName::So3 {
            return Err(CliError::Validation("system.inertia only applies to so3".into()));
        }
        if s.custom.is_some() != (s.name == SystemName::Custom) {
            return Err(CliError::Validation(
                "system.custom must be given exactly when name = \"custom\"".into(),
            ));
        }
        let sys = match s.name {
            SystemName::Demo2d => MetriplecticSystem::demo2d(),
            SystemName::So3 => {
                let inertia = s.inertia.unwrap_or([1.0; 3]);
                if s.mode == Some(Mode::Classical) {
                    return MetriplecticSystem::so3_classical(inertia).map_err(|e| invalid(&e));
                }
                MetriplecticSystem::so3(inertia).map_err(|e| invalid(&e))?
            }
            SystemName::Custom => build_custom(s.custom.as_ref().expect("checked above"))?,
        };
        Ok(match s.mode {
            Some(m) if m != sys.mode() => sys.with_mode(m),
            _ => sys,
        })
    }

    pub fn horizon(&self, spec: &SimulateSpec) -> f64 {
        spec.horizon.unwrap_or(match self.system.name {
            SystemName::Demo2d => 20.0,
            _ => 30.0,
        })
    }

    pub fn simulate_region(&self, spec: &SimulateSpec, dim: usize) -> SamplingRegion {
        spec.region.clone().unwrap_or_else(|| self.default_region(dim, 1.3))
    }

    pub fn dataset_spec(&self, dim: usize) -> Result<DatasetSpec, CliError> {
        let d = self
            .data
            .as_ref()
            .ok_or_else(|| CliError::Validation("config has no [data] section".into()))?;
        Ok(DatasetSpec {
            n_trajectories: d.n_trajectories,
            n_samples_per: d.n_samples_per,
            stride: d.stride,
            dt: d.dt,
            region: d.region.clone().unwrap_or_else(|| self.default_region(dim, 1.5)),
            seed: d.seed,
            derivative: d.derivative,
        })
    }

    fn default_region(&self, dim: usize, half_width: f64) -> SamplingRegion {
        match self.system.name {
            SystemName::So3 => SamplingRegion::Shell {
                dim: 3,
                r_min: 0.3,
                r_max: 2.0,
            },
            _ => SamplingRegion::square(dim, half_width),
        }
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config is always representable")
    }
}

fn check_region(region: Option<&SamplingRegion>, n: usize, what: &str) -> Result<(), CliError> {
    if let Some(r) = region {
        r.validate()
            .map_err(|e| CliError::Validation(format!("{what}: {e}")))?;
        if r.dim() != n {
            return Err(CliError::Validation(format!(
                "{what} has dimension {}, system has {n}",
                r.dim()
            )));
        }
    }
    Ok(())
}

fn poly(dim: usize, records: &[PolyRecord], what: &str) -> Result<Polynomial, CliError> {
    Polynomial::from_records(dim, records)
        .map_err(|e| CliError::Validation(format!("system.custom.{what}: {e}")))
}

fn upper_matrix(
    dim: usize,
    upper: &[Vec<PolyRecord>],
    structure: MatrixStructure,
    what: &str,
) -> Result<PolyMatrix, CliError> {
    let entries = upper
        .iter()
        .enumerate()
        .map(|(k, r)| poly(dim, r, &format!("{what}[{k}]")))
        .collect::<Result<Vec<_>, _>>()?;
    PolyMatrix::from_upper(dim, dim, structure, entries)
        .map_err(|e| CliError::Validation(format!("system.custom.{what}: {e}")))
}

fn build_custom(c: &CustomSystem) -> Result<MetriplecticSystem, CliError> {
    let n = c.dim;
    if n == 0 {
        return Err(CliError::Validation("system.custom.dim must be >= 1".into()));
    }
    let poisson = match &c.poisson {
        PoissonSpec::Named(name) => match name.as_str() {
            "canonical" if n % 2 == 0 => PoissonStructure::canonical(n / 2),
            "so3" if n == 3 => Ok(PoissonStructure::so3()),
            _ => {
                return Err(CliError::Validation(format!(
                    "system.custom.poisson: {name:?} is not available in dimension {n}"
                )))
            }
        },
        PoissonSpec::Upper(u) => PoissonStructure::new(upper_matrix(n, u, MatrixStructure::Skew, "poisson")?),
    }
    .map_err(|e| CliError::Validation(format!("system.custom.poisson: {e}")))?;
    let h = poly(n, &c.hamiltonian, "hamiltonian")?;
    let s = poly(n, &c.entropy, "entropy")?;
    let k = match &c.metric {
        Some(u) => upper_matrix(n, u, MatrixStructure::Symmetric, "metric")?,
        None => PolyMatrix::identity(n, n),
    };
    MetriplecticSystem::new("custom", poisson, h, s, k, Mode::Generalized)
        .map_err(|e| CliError::Validation(format!("system.custom: {e}")))
}
