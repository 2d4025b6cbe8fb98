//! Run configuration: one JSON document, overridable field by field with
//! dotted paths such as `perturb.lambda_prime=0`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::eval::{Game, PointingTargets, Resize, ThresholdKind, DEFAULT_SIGMA_BASE, DEFAULT_STEPS, DEFAULT_TOLERANCE_PX};
use crate::model::{LayerSet, NetworkSpec, TrainConfig};
use crate::perturb::PerturbConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    MiniVgg,
    MiniVggDetector,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Dataset directory read by every command but `gen-data`.
    pub dir: PathBuf,
    pub count: usize,
    pub size: usize,
    pub num_classes: usize,
    pub difficult_fraction: f64,
    /// Evaluate only the first `limit` samples.
    pub limit: Option<usize>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("data"),
            count: 200,
            size: 32,
            num_classes: 4,
            difficult_fraction: 0.3,
            limit: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Weight file read by evaluation commands.
    pub path: PathBuf,
    pub arch: Arch,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            path: PathBuf::from("model.pbw"),
            arch: Arch::MiniVgg,
        }
    }
}

impl ModelConfig {
    pub fn spec(&self, num_classes: usize, size: usize) -> NetworkSpec {
        match self.arch {
            Arch::MiniVgg => NetworkSpec::mini_vgg(num_classes, size),
            Arch::MiniVggDetector => NetworkSpec::mini_vgg_detector(num_classes, size),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SaliencyConfig {
    pub sigma: f64,
    pub guided: bool,
}

impl Default for SaliencyConfig {
    fn default() -> Self {
        Self {
            sigma: 0.0,
            guided: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LocalizationConfig {
    pub alpha_step: f64,
    pub strategies: Vec<ThresholdKind>,
}

impl Default for LocalizationConfig {
    fn default() -> Self {
        Self {
            alpha_step: 0.05,
            strategies: ThresholdKind::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InsDelConfig {
    pub steps: usize,
    pub sigma_base: f64,
}

impl Default for InsDelConfig {
    fn default() -> Self {
        Self {
            steps: DEFAULT_STEPS,
            sigma_base: DEFAULT_SIGMA_BASE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PointingConfig {
    pub tolerance_px: usize,
    pub resize: Resize,
    pub targets: PointingTargets,
}

impl Default for PointingConfig {
    fn default() -> Self {
        Self {
            tolerance_px: DEFAULT_TOLERANCE_PX,
            resize: Resize::None,
            targets: PointingTargets::Primary,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateConfig {
    pub game: Game,
    /// `(i, j)` cells; empty means every `0 <= i <= j <= #ReLUs`.
    pub cells: Vec<(usize, usize)>,
    pub sigmas: Vec<f64>,
    pub bar: f64,
}

impl Default for AblateConfig {
    fn default() -> Self {
        Self {
            game: Game::Pointing,
            cells: Vec::new(),
            sigmas: vec![0.0],
            bar: 0.82,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SanityConfig {
    /// Numbers of final weight layers to re-initialize, one checkpoint each.
    pub depths: Vec<usize>,
}

impl Default for SanityConfig {
    fn default() -> Self {
        Self {
            depths: vec![0, 2, 4, 6],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Drives data generation, training and re-initialization; copied into
    /// `train.seed` and `perturb.seed` on resolve.
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub perturb: PerturbConfig,
    pub saliency: SaliencyConfig,
    pub localization: LocalizationConfig,
    pub insdel: InsDelConfig,
    pub pointing: PointingConfig,
    pub ablate: AblateConfig,
    pub sanity: SanityConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            perturb: PerturbConfig::localization(LayerSet::range(0, 1)),
            saliency: SaliencyConfig::default(),
            localization: LocalizationConfig::default(),
            insdel: InsDelConfig::default(),
            pointing: PointingConfig::default(),
            ablate: AblateConfig::default(),
            sanity: SanityConfig::default(),
        }
    }
}

/// Parses `value` as JSON, falling back to a plain string.
fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Sets the field at a dotted path, e.g. `perturb.layer_set`.
pub fn set_path(doc: &mut Value, path: &str, raw: &str) -> Result<()> {
    let mut node = doc;
    let parts: Vec<&str> = path.split('.').collect();
    for (k, part) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Error::invalid(format!("cannot set {path}: {} is not an object", parts[..k].join("."))))?;
        if !obj.contains_key(*part) {
            return Err(Error::invalid(format!("unknown config field {path:?}")));
        }
        node = obj.get_mut(*part).expect("checked");
    }
    *node = parse_value(raw);
    Ok(())
}

impl RunConfig {
    /// Defaults, then the optional JSON file, then `path=value` overrides.
    pub fn resolve(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut doc = serde_json::to_value(RunConfig::default())?;
        if let Some(path) = file {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let user: Value = serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
            merge(&mut doc, user, "")?;
        }
        for (k, v) in overrides {
            set_path(&mut doc, k, v)?;
        }
        let mut cfg: RunConfig = serde_json::from_value(doc).map_err(|e| Error::invalid(format!("config: {e}")))?;
        cfg.train.seed = cfg.seed;
        cfg.perturb.seed = cfg.seed;
        Ok(cfg)
    }

    pub fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

fn merge(base: &mut Value, user: Value, prefix: &str) -> Result<()> {
    match (base, user) {
        (Value::Object(b), Value::Object(u)) => {
            for (k, v) in u {
                let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v, &path)?,
                    Some(slot) => *slot = v,
                    None => return Err(Error::invalid(format!("unknown config field {path:?}"))),
                }
            }
            Ok(())
        }
        (b, u) => {
            *b = u;
            Ok(())
        }
    }
}

/// Parses `start:stop:step` (inclusive) or a comma list into sigmas.
pub fn parse_sigmas(spec: &str) -> Result<Vec<f64>> {
    let bad = || Error::invalid(format!("bad sigma grid {spec:?}; use start:stop:step or a,b,c"));
    if spec.contains(':') {
        let p: Vec<f64> = spec
            .split(':')
            .map(|s| s.trim().parse::<f64>().map_err(|_| bad()))
            .collect::<Result<_>>()?;
        let [a, b, s] = p[..] else { return Err(bad()) };
        if !(s > 0.0) || b < a || a < 0.0 {
            return Err(bad());
        }
        let n = ((b - a) / s + 1e-9).floor() as usize;
        Ok((0..=n).map(|k| a + k as f64 * s).collect())
    } else {
        spec.split(',')
            .map(|s| s.trim().parse::<f64>().map_err(|_| bad()))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_by_dotted_path() {
        let c = RunConfig::resolve(
            None,
            &[
                ("perturb.lambda_prime".into(), "0".into()),
                ("model.arch".into(), "mini_vgg_detector".into()),
                ("perturb.layer_set".into(), r#"{"range":{"start":1,"end":3}}"#.into()),
            ],
        )
        .unwrap();
        assert_eq!(c.perturb.lambda_prime, 0.0);
        assert_eq!(c.model.arch, Arch::MiniVggDetector);
        assert_eq!(c.perturb.layer_set, LayerSet::range(1, 3));
        assert!(RunConfig::resolve(None, &[("perturb.nope".into(), "1".into())]).is_err());
    }

    #[test]
    fn file_merges_over_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        fs::write(&p, r#"{"seed": 9, "insdel": {"steps": 20}}"#).unwrap();
        let c = RunConfig::resolve(Some(&p), &[]).unwrap();
        assert_eq!((c.seed, c.insdel.steps, c.insdel.sigma_base), (9, 20, 10.0));
        fs::write(&p, r#"{"insdel": {"stepz": 20}}"#).unwrap();
        assert!(RunConfig::resolve(Some(&p), &[]).is_err());
    }

    #[test]
    fn sigma_grids() {
        let g = parse_sigmas("0:100:1").unwrap();
        assert_eq!((g.len(), g[0], g[100]), (101, 0.0, 100.0));
        assert_eq!(parse_sigmas("0, 2.5").unwrap(), vec![0.0, 2.5]);
        assert!(parse_sigmas("3:1:1").is_err());
        assert!(parse_sigmas("a").is_err());
    }
}
