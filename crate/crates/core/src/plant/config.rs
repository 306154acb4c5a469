//! `key = value` plant configuration files (SI units).

use std::path::Path;

use thiserror::Error;

use super::{PlantError, PlantParams};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("parsing plant config: {0}")]
    Parse(String),
    #[error(transparent)]
    Invalid(#[from] PlantError),
}

impl PlantParams {
    /// Canonical text form; every field, fixed order, shortest round-trip floats.
    pub fn to_config_string(&self) -> String {
        let mut out = String::from("# plant parameters, SI units\n");
        for (name, v) in self.fields() {
            out.push_str(&format!("{name} = {v:?}\n"));
        }
        out
    }

    /// Parses a config; keys that are absent keep their default value.
    pub fn from_config_str(text: &str) -> Result<Self, ConfigError> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        let mut p = PlantParams::default();
        for (key, value) in &table {
            let v = match value {
                toml::Value::Float(f) => *f,
                toml::Value::Integer(i) => *i as f64,
                other => return Err(ConfigError::Parse(format!("`{key}`: expected a number, got {other}"))),
            };
            let slot = match key.as_str() {
                "mass" => &mut p.mass,
                "yaw_inertia" => &mut p.yaw_inertia,
                "lf" => &mut p.lf,
                "lr" => &mut p.lr,
                "cornering_front" => &mut p.cornering_front,
                "cornering_rear" => &mut p.cornering_rear,
                "friction" => &mut p.friction,
                "max_power" => &mut p.max_power,
                "max_drive_force" => &mut p.max_drive_force,
                "brake_gain" => &mut p.brake_gain,
                "aero_drag" => &mut p.aero_drag,
                "rolling_coeff" => &mut p.rolling_coeff,
                "steering_ratio" => &mut p.steering_ratio,
                "tau_steer" => &mut p.tau_steer,
                "tau_drive" => &mut p.tau_drive,
                "inner_step" => &mut p.inner_step,
                _ => return Err(ConfigError::Parse(format!("unknown key `{key}`"))),
            };
            *slot = v;
        }
        p.validate()?;
        Ok(p)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        Self::from_config_str(&text)
    }

    pub fn save(&self, path: &Path) -> Result<(), ConfigError> {
        std::fs::write(path, self.to_config_string())
            .map_err(|source| ConfigError::Io { path: path.display().to_string(), source })
    }

    /// SHA-256 of the canonical text form, hex encoded.
    pub fn config_hash(&self) -> String {
        crate::sha256_hex(self.to_config_string().as_bytes())
    }
}
