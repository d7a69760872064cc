//! TOML pipeline configuration with `section.key=value` overrides.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::diffusion::SamplerConfig;
use crate::error::{Error, Result};
use crate::fitting::FitConfig;
use crate::guidance::GuidanceConfig;
use crate::nn::denoiser::DenoiserConfig;
use crate::pipeline::dataset::DatasetConfig;
use crate::pipeline::eval::{fingerprint, EvalConfig};
use crate::pipeline::refine::RefineConfig;
use crate::pipeline::train::{ScheduleConfig, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub dataset: DatasetConfig,
    pub denoiser: DenoiserConfig,
    pub schedule: ScheduleConfig,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
    pub guidance: GuidanceConfig,
    pub fit: FitConfig,
    pub refine: RefineConfig,
    pub eval: EvalConfig,
    /// Candidate `lambda_gd` values for the calibration sweep.
    pub sweep_lambdas: Vec<f64>,
}

impl PipelineConfig {
    pub fn with_defaults() -> Self {
        Self {
            sweep_lambdas: vec![1.0, 10.0, 30.0, 100.0, 1000.0],
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.denoiser.validate()?;
        self.guidance.validate()?;
        self.fit.validate()?;
        if self.denoiser.num_timesteps != self.schedule.num_timesteps {
            return Err(Error::Config(format!(
                "denoiser.num_timesteps = {} but schedule.num_timesteps = {}",
                self.denoiser.num_timesteps, self.schedule.num_timesteps
            )));
        }
        if self.denoiser.point_count != self.dataset.points_per_scene {
            return Err(Error::Config(format!(
                "denoiser.point_count = {} but dataset.points_per_scene = {}",
                self.denoiser.point_count, self.dataset.points_per_scene
            )));
        }
        self.sampler.validate(&self.schedule.build()?)
    }

    /// Parses `text`, then applies each `path.to.key=value` override, where
    /// `value` is a TOML literal (bare words are taken as strings).
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut value: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if !value.contains_key("sweep_lambdas") && !text.contains("sweep_lambdas") {
            value.insert(
                "sweep_lambdas".into(),
                toml::Value::Array(Self::with_defaults().sweep_lambdas.into_iter().map(toml::Value::Float).collect()),
            );
        }
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let cfg: Self = toml::Value::Table(value)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => String::new(),
        };
        Self::from_toml(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable as TOML")
    }

    pub fn fingerprint(&self) -> String {
        fingerprint(&self.to_toml())
    }
}

fn parse_literal(raw: &str) -> toml::Value {
    let raw = raw.trim();
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn apply_override(root: &mut toml::Table, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{spec}` is not key=value")))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::Config(format!("bad override key `{path}`")));
    }
    let mut table = root;
    for k in &keys[..keys.len() - 1] {
        table = table
            .entry(k.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{path}`: `{k}` is not a table")))?;
    }
    table.insert(keys[keys.len() - 1].to_string(), parse_literal(raw));
    Ok(())
}

/// Creates `<base>/<unix-seconds>-<first 12 hex of the config hash>` and
/// writes the resolved config into it.
pub fn create_run_dir(base: &Path, config: &PipelineConfig, label: &str) -> Result<PathBuf> {
    let secs = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let dir = base.join(format!("{secs}-{label}-{}", &config.fingerprint()[..12]));
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let p = dir.join("config.toml");
    fs::write(&p, config.to_toml()).map_err(|e| Error::io(&p, e))?;
    Ok(dir)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_gives_defaults() {
        let c = PipelineConfig::from_toml("", &[]).unwrap();
        assert_eq!(c, PipelineConfig::with_defaults());
        assert_eq!(c.fit.max_points, 256);
        assert_eq!(c.guidance.lambda_gd, 30.0);
    }

    #[test]
    fn overrides_and_round_trip() {
        let c = PipelineConfig::from_toml(
            "[guidance]\nlambda_gd = 10.0\n",
            &["sampler.ddim_steps=20".into(), "guidance.mode=full-chain".into()],
        )
        .unwrap();
        assert_eq!(c.guidance.lambda_gd, 10.0);
        assert_eq!(c.sampler.ddim_steps, 20);
        assert_eq!(c.guidance.mode, crate::guidance::GradientMode::FullChain);
        let back = PipelineConfig::from_toml(&c.to_toml(), &[]).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.fingerprint(), c.fingerprint());
    }

    #[test]
    fn bad_configs_are_config_errors() {
        for (text, o) in [
            ("nonsense = 1", vec![]),
            ("", vec!["guidance.lambda_gd=-1".to_string()]),
            ("", vec!["schedule.num_timesteps=50".to_string()]),
            ("", vec!["novalue".to_string()]),
            ("[fit]\ninit_points = 999\n", vec![]),
        ] {
            assert!(matches!(PipelineConfig::from_toml(text, &o), Err(Error::Config(_))), "{text} {o:?}");
        }
    }
}
