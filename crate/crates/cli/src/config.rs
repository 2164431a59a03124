//! Layered run configuration: preset, then config file, then `DSTL_SEED`,
//! then command-line flags.

use std::path::Path;

use serde::Deserialize;
use serde_json::Value;

use dstl_core::data::AugmentParams;
use dstl_core::distortions::DistortionSpec;
use dstl_core::encoder::ViTConfig;
use dstl_core::trainer::{Mode, TrainConfig};
use dstl_core::{Error, Result};

use crate::{Global, TrainFlags};

pub const SEED_ENV: &str = "DSTL_SEED";

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    /// Partial `ViTConfig` merged over the default architecture.
    #[serde(default)]
    pub model: Option<Value>,
    /// Partial `TrainConfig` applied to every training command.
    #[serde(default)]
    pub train: Option<Value>,
    #[serde(default)]
    pub distill: Option<Value>,
    #[serde(default)]
    pub finetune: Option<Value>,
    #[serde(default)]
    pub seed: Option<u64>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_slice(&bytes)
            .map_err(|e| Error::Config(format!("config {}: {e}", path.display())))
    }

    /// Seed after the file, environment, and flag layers; `None` if no
    /// layer sets one.
    pub fn seed_override(&self, flag: Option<u64>) -> Option<u64> {
        flag.or_else(env_seed).or(self.seed)
    }

    pub fn model_config(&self) -> Result<ViTConfig> {
        let mut v = serde_json::to_value(ViTConfig::default())?;
        if let Some(m) = &self.model {
            merge(&mut v, m);
        }
        let cfg: ViTConfig = serde_json::from_value(v).map_err(|e| Error::Config(format!("model config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train_config(&self, g: &Global, mode: Mode, flags: &TrainFlags) -> Result<TrainConfig> {
        let base = match (mode, g.preset.as_str()) {
            (Mode::Distill, p) => TrainConfig::preset(p)?,
            (_, "desk" | "paper") => TrainConfig::desk_finetune(),
            (_, p) => return Err(Error::Config(format!("unknown preset {p:?}"))),
        };
        let mut v = serde_json::to_value(base)?;
        if let Some(t) = &self.train {
            merge(&mut v, t);
        }
        let specific = if mode == Mode::Distill { &self.distill } else { &self.finetune };
        if let Some(t) = specific {
            merge(&mut v, t);
        }
        let mut tc: TrainConfig =
            serde_json::from_value(v).map_err(|e| Error::Config(format!("train config: {e}")))?;
        tc.mode = mode;
        if let Some(s) = self.seed {
            tc.seed = s;
        }
        if let Some(s) = env_seed() {
            tc.seed = s;
        }
        if let Some(s) = g.seed {
            tc.seed = s;
        }
        if g.deterministic {
            tc.deterministic = true;
        }
        if let Some(e) = flags.epochs {
            tc.epochs = e;
        }
        if let Some(b) = flags.batch_size {
            tc.batch_size = b;
        }
        if let Some(lr) = flags.lr {
            tc.peak_lr = lr;
        }
        if let Some(wd) = flags.weight_decay {
            tc.weight_decay = wd;
        }
        if flags.budget.is_some() {
            tc.sample_budget = flags.budget;
        }
        if let Some(d) = &flags.distortion {
            tc.distortion = parse_distortion(d)?;
        }
        if flags.no_augment {
            tc.augment = AugmentParams::none();
        }
        tc.validate()?;
        Ok(tc)
    }
}

fn env_seed() -> Option<u64> {
    std::env::var(SEED_ENV).ok().and_then(|s| s.trim().parse().ok())
}

/// Recursive object merge; non-object values in `over` replace `base`.
pub fn merge(base: &mut Value, over: &Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (b, o) => *b = o.clone(),
    }
}

/// A distortion given as a JSON object or as `none`, `mask:R`, `noise:S`,
/// `blur:K:S`, optionally followed by `@SEED`. Shorthand blur geometry is
/// read at 224 pixels and rescaled to the model resolution; `blur:K:S:px`
/// takes it in pixels as given.
/// Resolution at which shorthand blur geometry is given.
pub const REFERENCE_SIZE: usize = 224;

pub fn parse_distortion(s: &str) -> Result<DistortionSpec> {
    let s = s.trim();
    let spec = if s.starts_with('{') {
        serde_json::from_str(s).map_err(|e| Error::Config(format!("distortion {s:?}: {e}")))?
    } else {
        let (body, seed) = match s.split_once('@') {
            Some((b, seed)) => (
                b,
                seed.parse::<u64>()
                    .map_err(|_| Error::Config(format!("bad distortion seed in {s:?}")))?,
            ),
            None => (s, 0),
        };
        let parts: Vec<&str> = body.split(':').collect();
        let num = |i: usize| -> Result<f64> {
            parts
                .get(i)
                .and_then(|p| p.parse().ok())
                .ok_or_else(|| Error::Config(format!("bad distortion {s:?}")))
        };
        match (parts[0], parts.len()) {
            ("none" | "identity", 1) => DistortionSpec::identity(),
            ("mask", 2) => DistortionSpec::mask(num(1)?, seed),
            ("noise", 2) => DistortionSpec::noise(num(1)?, seed),
            ("blur", 3 | 4) => {
                let k = num(1)?;
                if k.fract() != 0.0 || k < 1.0 {
                    return Err(Error::Config(format!("blur kernel must be a positive integer in {s:?}")));
                }
                let spec = DistortionSpec::blur(k as usize, num(2)?);
                match parts.get(3) {
                    None => spec.at_reference(REFERENCE_SIZE),
                    Some(&"px") => spec,
                    Some(_) => return Err(Error::Config(format!("bad blur suffix in {s:?}"))),
                }
            }
            _ => {
                return Err(Error::Config(format!(
                    "unknown distortion {s:?} (use none, mask:R, noise:S, blur:K:S or JSON)"
                )))
            }
        }
    };
    spec.validate().map_err(|e| Error::Config(e.to_string()))?;
    Ok(spec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use dstl_core::distortions::DistortionKind;

    #[test]
    fn shorthand_and_json_distortions() {
        assert_eq!(parse_distortion("mask:0.9@4").unwrap(), DistortionSpec::mask(0.9, 4));
        assert_eq!(parse_distortion("noise:0.5").unwrap(), DistortionSpec::noise(0.5, 0));
        assert_eq!(parse_distortion("blur:37:9").unwrap(), DistortionSpec::blur(37, 9.0).at_reference(224));
        assert_eq!(parse_distortion("blur:5:1.5:px").unwrap(), DistortionSpec::blur(5, 1.5));
        assert_eq!(parse_distortion("none").unwrap().kind, DistortionKind::Mask);
        let j = parse_distortion(r#"{"kind":"noise","noise_sigma":0.5,"seed":3}"#).unwrap();
        assert_eq!(j, DistortionSpec::noise(0.5, 3));
        for bad in ["mask", "mask:1.5", "blur:4:1", "blur:3.5:1", "blur:5:1:cm", "fog:1", r#"{"kind":"mask","x":1}"#] {
            assert!(parse_distortion(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn merge_is_recursive() {
        let mut a = serde_json::json!({"x": 1, "o": {"a": 1, "b": 2}});
        merge(&mut a, &serde_json::json!({"o": {"b": 3}, "y": true}));
        assert_eq!(a, serde_json::json!({"x": 1, "o": {"a": 1, "b": 3}, "y": true}));
    }
}
