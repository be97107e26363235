//! Flat-JSON configuration files with strict unknown-key rejection.
//!
//! Every key is optional and falls back to its documented default; an
//! unknown key or a wrong type is an error naming the key. Silent typos in
//! experiment configs are how reproducibility dies.

use std::collections::BTreeMap;
use std::path::Path;

use serde_json::Value;

use crate::data::synth::{ShapeKind, SynthSpec};
use crate::error::{Error, Result};
use crate::grabmask::GrabMaskParams;
use crate::train::TrainConfig;

struct Fields {
    map: BTreeMap<String, Value>,
}

impl Fields {
    fn from_text(text: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(text)
            .map_err(|e| Error::Config(format!("invalid JSON: {e}")))?;
        match value {
            Value::Object(map) => Ok(Self { map: map.into_iter().collect() }),
            other => Err(Error::Config(format!(
                "config must be a JSON object, got {}",
                type_name(&other)
            ))),
        }
    }

    fn take(&mut self, key: &str) -> Option<Value> {
        self.map.remove(key)
    }

    fn take_f64(&mut self, key: &str, default: f64) -> Result<f64> {
        match self.take(key) {
            None => Ok(default),
            Some(Value::Number(n)) => n
                .as_f64()
                .ok_or_else(|| Error::Config(format!("key `{key}`: not representable as a number"))),
            Some(other) => Err(Error::Config(format!(
                "key `{key}`: expected a number, got {}",
                type_name(&other)
            ))),
        }
    }

    fn take_usize(&mut self, key: &str, default: usize) -> Result<usize> {
        match self.take(key) {
            None => Ok(default),
            Some(Value::Number(n)) => n
                .as_u64()
                .map(|v| v as usize)
                .ok_or_else(|| Error::Config(format!("key `{key}`: expected a non-negative integer"))),
            Some(other) => Err(Error::Config(format!(
                "key `{key}`: expected an integer, got {}",
                type_name(&other)
            ))),
        }
    }

    fn take_u64(&mut self, key: &str, default: u64) -> Result<u64> {
        match self.take(key) {
            None => Ok(default),
            Some(Value::Number(n)) => n
                .as_u64()
                .ok_or_else(|| Error::Config(format!("key `{key}`: expected a non-negative integer"))),
            Some(other) => Err(Error::Config(format!(
                "key `{key}`: expected an integer, got {}",
                type_name(&other)
            ))),
        }
    }

    fn take_bool(&mut self, key: &str, default: bool) -> Result<bool> {
        match self.take(key) {
            None => Ok(default),
            Some(Value::Bool(b)) => Ok(b),
            Some(other) => Err(Error::Config(format!(
                "key `{key}`: expected a boolean, got {}",
                type_name(&other)
            ))),
        }
    }

    fn take_opt_f64(&mut self, key: &str) -> Result<Option<f64>> {
        match self.take(key) {
            None | Some(Value::Null) => Ok(None),
            Some(Value::Number(n)) => Ok(Some(n.as_f64().ok_or_else(|| {
                Error::Config(format!("key `{key}`: not representable as a number"))
            })?)),
            Some(other) => Err(Error::Config(format!(
                "key `{key}`: expected a number or null, got {}",
                type_name(&other)
            ))),
        }
    }

    fn take_string_list(&mut self, key: &str, default: &[&str]) -> Result<Vec<String>> {
        match self.take(key) {
            None => Ok(default.iter().map(|s| s.to_string()).collect()),
            Some(Value::Array(items)) => items
                .into_iter()
                .map(|v| match v {
                    Value::String(s) => Ok(s),
                    other => Err(Error::Config(format!(
                        "key `{key}`: expected strings, got {}",
                        type_name(&other)
                    ))),
                })
                .collect(),
            Some(other) => Err(Error::Config(format!(
                "key `{key}`: expected an array, got {}",
                type_name(&other)
            ))),
        }
    }

    fn finish(self) -> Result<()> {
        if let Some(key) = self.map.keys().next() {
            return Err(Error::Config(format!("unknown config key `{key}`")));
        }
        Ok(())
    }
}

fn type_name(v: &Value) -> &'static str {
    match v {
        Value::Null => "null",
        Value::Bool(_) => "a boolean",
        Value::Number(_) => "a number",
        Value::String(_) => "a string",
        Value::Array(_) => "an array",
        Value::Object(_) => "an object",
    }
}

fn positive(key: &str, v: f64) -> Result<f64> {
    if v <= 0.0 || !v.is_finite() {
        return Err(Error::Config(format!("key `{key}`: must be positive, got {v}")));
    }
    Ok(v)
}

fn non_negative(key: &str, v: f64) -> Result<f64> {
    if v < 0.0 || !v.is_finite() {
        return Err(Error::Config(format!("key `{key}`: must be ≥ 0, got {v}")));
    }
    Ok(v)
}

fn unit_interval(key: &str, v: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&v) {
        return Err(Error::Config(format!("key `{key}`: must lie in [0,1], got {v}")));
    }
    Ok(v)
}

/// GrabMask keys carried inside a train config, with a `mask_` prefix.
fn take_mask_params(f: &mut Fields) -> Result<GrabMaskParams> {
    let d = GrabMaskParams::default();
    let params = GrabMaskParams {
        components: f.take_usize("mask_components", d.components)?,
        gamma: positive("mask_gamma", f.take_f64("mask_gamma", d.gamma)?)?,
        outer_iters: f.take_usize("mask_iters", d.outer_iters)?,
        em_iters: f.take_usize("mask_em_iters", d.em_iters)?,
        blur_sigma: positive("mask_blur_sigma", f.take_f64("mask_blur_sigma", d.blur_sigma)?)?,
        variance_floor: positive(
            "mask_variance_floor",
            f.take_f64("mask_variance_floor", d.variance_floor)?,
        )?,
        seed_frac: positive("mask_seed_frac", f.take_f64("mask_seed_frac", d.seed_frac)?)?,
    };
    params.validate().map_err(|e| Error::Config(format!("mask parameters: {e}")))?;
    Ok(params)
}

pub fn parse_train_config_str(text: &str) -> Result<TrainConfig> {
    let mut f = Fields::from_text(text)?;
    let d = TrainConfig::default();
    let cfg = TrainConfig {
        lr: positive("lr", f.take_f64("lr", d.lr as f64)?)? as f32,
        momentum: unit_interval("momentum", f.take_f64("momentum", d.momentum as f64)?)? as f32,
        weight_decay: non_negative("weight_decay", f.take_f64("weight_decay", d.weight_decay as f64)?)?
            as f32,
        batch_size: f.take_usize("batch_size", d.batch_size)?,
        epochs: f.take_usize("epochs", d.epochs)?,
        lambda_s: non_negative("lambda_s", f.take_f64("lambda_s", d.lambda_s as f64)?)? as f32,
        lambda_re: non_negative("lambda_re", f.take_f64("lambda_re", d.lambda_re as f64)?)? as f32,
        lambda_d: non_negative("lambda_d", f.take_f64("lambda_d", d.lambda_d as f64)?)? as f32,
        grl_lambda: non_negative("grl_lambda", f.take_f64("grl_lambda", d.grl_lambda as f64)?)? as f32,
        ema_alpha: unit_interval("ema_alpha", f.take_f64("ema_alpha", d.ema_alpha as f64)?)? as f32,
        seed: f.take_u64("seed", d.seed)?,
        dropout: {
            let v = f.take_f64("dropout", d.dropout as f64)?;
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Config(format!("key `dropout`: must lie in [0,1), got {v}")));
            }
            v as f32
        },
        corrupt_v_min: unit_interval("corrupt_v_min", f.take_f64("corrupt_v_min", d.corrupt_v_min as f64)?)?
            as f32,
        corrupt_v_max: unit_interval("corrupt_v_max", f.take_f64("corrupt_v_max", d.corrupt_v_max as f64)?)?
            as f32,
        corrupt_sigma: positive("corrupt_sigma", f.take_f64("corrupt_sigma", d.corrupt_sigma as f64)?)?
            as f32,
        pseudo_label_threshold: f
            .take_opt_f64("pseudo_label_threshold")?
            .map(|v| unit_interval("pseudo_label_threshold", v).map(|v| v as f32))
            .transpose()?,
        feature_dim: f.take_usize("feature_dim", d.feature_dim)?,
        conv1_filters: f.take_usize("conv1_filters", d.conv1_filters)?,
        conv2_filters: f.take_usize("conv2_filters", d.conv2_filters)?,
        disc_hidden: f.take_usize("disc_hidden", d.disc_hidden)?,
        mask: take_mask_params(&mut f)?,
    };
    f.finish()?;
    if cfg.batch_size == 0 {
        return Err(Error::Config("key `batch_size`: must be ≥ 1".into()));
    }
    if cfg.corrupt_v_min > cfg.corrupt_v_max {
        return Err(Error::Config(format!(
            "key `corrupt_v_min`: {} exceeds corrupt_v_max {}",
            cfg.corrupt_v_min, cfg.corrupt_v_max
        )));
    }
    for (key, v) in [
        ("feature_dim", cfg.feature_dim),
        ("conv1_filters", cfg.conv1_filters),
        ("conv2_filters", cfg.conv2_filters),
        ("disc_hidden", cfg.disc_hidden),
    ] {
        if v == 0 {
            return Err(Error::Config(format!("key `{key}`: must be ≥ 1")));
        }
    }
    Ok(cfg)
}

pub fn parse_train_config(path: &Path) -> Result<TrainConfig> {
    parse_train_config_str(&std::fs::read_to_string(path)?)
}

pub fn parse_synth_spec_str(text: &str) -> Result<SynthSpec> {
    let mut f = Fields::from_text(text)?;
    let d = SynthSpec::default();
    let classes = f
        .take_string_list("classes", &["circle", "square", "triangle"])?
        .iter()
        .map(|name| {
            ShapeKind::from_name(name)
                .ok_or_else(|| Error::Config(format!("key `classes`: unknown shape `{name}`")))
        })
        .collect::<Result<Vec<_>>>()?;
    let spec = SynthSpec {
        side: f.take_usize("side", d.side)?,
        classes,
        per_class_source: f.take_usize("per_class_source", d.per_class_source)?,
        per_class_target: f.take_usize("per_class_target", d.per_class_target)?,
        area_frac: (
            f.take_f64("area_frac_min", d.area_frac.0)?,
            f.take_f64("area_frac_max", d.area_frac.1)?,
        ),
        fg_color: (f.take_f64("fg_color_min", d.fg_color.0)?, f.take_f64("fg_color_max", d.fg_color.1)?),
        source_bg: (
            f.take_f64("source_bg_min", d.source_bg.0)?,
            f.take_f64("source_bg_max", d.source_bg.1)?,
        ),
        target_bg: (
            f.take_f64("target_bg_min", d.target_bg.0)?,
            f.take_f64("target_bg_max", d.target_bg.1)?,
        ),
        clutter_color: (
            f.take_f64("clutter_color_min", d.clutter_color.0)?,
            f.take_f64("clutter_color_max", d.clutter_color.1)?,
        ),
        clutter_blobs: f.take_usize("clutter_blobs", d.clutter_blobs)?,
        noise_level: f.take_f64("noise_level", d.noise_level)?,
        translate_jitter: f.take_f64("translate_jitter", d.translate_jitter)?,
        rotate_jitter: f.take_bool("rotate_jitter", d.rotate_jitter)?,
        seed: f.take_u64("seed", d.seed)?,
    };
    f.finish()?;
    spec.validate().map_err(|e| Error::Config(e.to_string()))?;
    Ok(spec)
}

pub fn parse_synth_spec(path: &Path) -> Result<SynthSpec> {
    parse_synth_spec_str(&std::fs::read_to_string(path)?)
}
