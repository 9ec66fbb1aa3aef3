//! `key = value` training configuration files.

use aesust_core::losses::Stage;
use aesust_core::train::TrainConfig;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: unknown config key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("line {line}: bad value for `{key}`: {message}")]
    Value { line: usize, key: String, message: String },
    #[error("line {line}: `{key}` is set twice")]
    Duplicate { line: usize, key: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

pub const KEYS: [&str; 25] = [
    "stage",
    "lambda1",
    "lambda2",
    "lambda3",
    "lambda4",
    "lambda5",
    "lambda6",
    "lambda7",
    "lambda8",
    "lambda9",
    "lr",
    "beta1",
    "beta2",
    "batch_size",
    "iterations",
    "resize_smaller_edge",
    "crop",
    "seed",
    "ablation_adv",
    "ablation_ar1",
    "ablation_ar2",
    "ablation_identity",
    "channel_multiplier",
    "checkpoint_every",
    "save_optimizer_state",
];

fn parse_bool(v: &str) -> Result<bool, String> {
    match v {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(format!("`{v}` is not a boolean")),
    }
}

fn parse_num<N: std::str::FromStr>(v: &str) -> Result<N, String>
where
    N::Err: std::fmt::Display,
{
    v.parse::<N>().map_err(|e| format!("`{v}`: {e}"))
}

/// Parses a config file. Keys not present keep their full-scale defaults.
pub fn parse_config(text: &str) -> Result<TrainConfig, ConfigError> {
    let mut cfg = TrainConfig::default();
    let mut seen = std::collections::HashSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let (key, value) = content.split_once('=').ok_or(ConfigError::Syntax { line })?;
        let (key, value) = (key.trim(), value.trim());
        if key.is_empty() || value.is_empty() {
            return Err(ConfigError::Syntax { line });
        }
        if !KEYS.contains(&key) {
            return Err(ConfigError::UnknownKey { line, key: key.into() });
        }
        if !seen.insert(key.to_string()) {
            return Err(ConfigError::Duplicate { line, key: key.into() });
        }
        let err = |message: String| ConfigError::Value {
            line,
            key: key.into(),
            message,
        };
        match key {
            "stage" => {
                let n: u32 = parse_num(value).map_err(err)?;
                cfg.stage = Stage::from_number(n).ok_or_else(|| err("stage must be 1 or 2".into()))?;
            }
            k if k.starts_with("lambda") => {
                let idx: usize = k["lambda".len()..].parse().expect("listed key");
                cfg.weights.lambda[idx - 1] = parse_num(value).map_err(err)?;
            }
            "lr" => cfg.lr = parse_num(value).map_err(err)?,
            "beta1" => cfg.beta1 = parse_num(value).map_err(err)?,
            "beta2" => cfg.beta2 = parse_num(value).map_err(err)?,
            "batch_size" => cfg.batch_size = parse_num(value).map_err(err)?,
            "iterations" => cfg.iterations = parse_num(value).map_err(err)?,
            "resize_smaller_edge" => cfg.resize_smaller_edge = parse_num(value).map_err(err)?,
            "crop" => cfg.crop = parse_num(value).map_err(err)?,
            "seed" => cfg.seed = parse_num(value).map_err(err)?,
            "ablation_adv" => cfg.ablation.adv = parse_bool(value).map_err(err)?,
            "ablation_ar1" => cfg.ablation.ar1 = parse_bool(value).map_err(err)?,
            "ablation_ar2" => cfg.ablation.ar2 = parse_bool(value).map_err(err)?,
            "ablation_identity" => cfg.ablation.identity = parse_bool(value).map_err(err)?,
            "channel_multiplier" => cfg.channel_multiplier = parse_num(value).map_err(err)?,
            "checkpoint_every" => cfg.checkpoint_every = parse_num(value).map_err(err)?,
            "save_optimizer_state" => cfg.save_optimizer_state = parse_bool(value).map_err(err)?,
            other => {
                return Err(ConfigError::UnknownKey {
                    line,
                    key: other.into(),
                })
            }
        }
    }
    cfg.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
    Ok(cfg)
}

/// Renders every key; `parse_config(&render_config(c)) == c`.
pub fn render_config(cfg: &TrainConfig) -> String {
    let mut out = String::new();
    let mut put = |k: &str, v: String| out.push_str(&format!("{k} = {v}\n"));
    put("stage", cfg.stage.number().to_string());
    for (i, l) in cfg.weights.lambda.iter().enumerate() {
        put(&format!("lambda{}", i + 1), format!("{l:?}"));
    }
    put("lr", format!("{:?}", cfg.lr));
    put("beta1", format!("{:?}", cfg.beta1));
    put("beta2", format!("{:?}", cfg.beta2));
    put("batch_size", cfg.batch_size.to_string());
    put("iterations", cfg.iterations.to_string());
    put("resize_smaller_edge", cfg.resize_smaller_edge.to_string());
    put("crop", cfg.crop.to_string());
    put("seed", cfg.seed.to_string());
    put("ablation_adv", cfg.ablation.adv.to_string());
    put("ablation_ar1", cfg.ablation.ar1.to_string());
    put("ablation_ar2", cfg.ablation.ar2.to_string());
    put("ablation_identity", cfg.ablation.identity.to_string());
    put("channel_multiplier", format!("{:?}", cfg.channel_multiplier));
    put("checkpoint_every", cfg.checkpoint_every.to_string());
    put("save_optimizer_state", cfg.save_optimizer_state.to_string());
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_key_is_named() {
        let e = parse_config("lr = 0.001\nlearning_rate = 3\n").unwrap_err();
        assert_eq!(
            e,
            ConfigError::UnknownKey {
                line: 2,
                key: "learning_rate".into()
            }
        );
        assert!(e.to_string().contains("learning_rate"));
    }

    #[test]
    fn render_parse_round_trip() {
        let mut cfg = TrainConfig::desk();
        cfg.ablation.ar2 = false;
        cfg.weights.lambda[8] = 123.25;
        assert_eq!(parse_config(&render_config(&cfg)).unwrap(), cfg);
    }

    #[test]
    fn comments_and_blank_lines() {
        let cfg = parse_config("# desk\n\nstage = 2 # fine-tune\ncrop = 64\nresize_smaller_edge = 64\n").unwrap();
        assert_eq!(cfg.stage, Stage::Finetune);
        assert_eq!(cfg.crop, 64);
    }
}
