//! Flat key=value experiment configuration with dotted namespaces.
//!
//! Every known key has a default; config files and `--set` overrides may
//! only touch known keys. Lines starting with `#` and blank lines are
//! ignored.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{CliError, Result};

/// Known keys and their defaults. One source of truth for the schema.
pub fn default_entries() -> Vec<(&'static str, &'static str)> {
    vec![
        ("seed", "0"),
        // model
        ("model.variant", "vit"),
        ("model.image_hw", "32"),
        ("model.patch", "8"),
        ("model.stride", "8"),
        ("model.depth", "2"),
        ("model.width", "64"),
        ("model.heads", "4"),
        ("model.channels", "16,32,48,64"),
        ("model.proj_dim", "32"),
        ("model.sie", "none"),
        ("model.sie_lambda", "1.0"),
        ("model.cameras", "4"),
        ("model.m", "4"),
        ("model.template", "person"),
        ("model.temperature", "5.0"),
        ("model.text_l_ctx", "16"),
        ("model.text_width", "64"),
        ("model.text_depth", "2"),
        ("model.text_heads", "4"),
        ("model.text_proj_dim", "32"),
        // stage 0
        ("train.stage0.epochs", "20"),
        ("train.stage0.batch_ids", "10"),
        ("train.stage0.lr", "1e-3"),
        // stage 1
        ("train.stage1.epochs", "30"),
        ("train.stage1.batch", "64"),
        ("train.stage1.lr", "3.5e-4"),
        // stage 2
        ("train.stage2.epochs", "10"),
        ("train.stage2.p", "4"),
        ("train.stage2.k", "4"),
        ("train.stage2.lr", "5e-4"),
        ("train.stage2.warmup_epochs", "0"),
        ("train.stage2.warmup_start_lr", "5e-5"),
        ("train.stage2.milestones", ""),
        ("train.stage2.milestone_gamma", "0.1"),
        ("train.stage2.w_id", "0.25"),
        ("train.stage2.w_tri", "1.0"),
        ("train.stage2.w_i2tce", "1.0"),
        ("train.stage2.smoothing", "0.1"),
        ("train.stage2.margin", "0.3"),
        ("train.stage2.pre_layer_triplet", "false"),
        ("train.stage2.augment", "true"),
        ("train.stage2.text_loss", "i2tce"),
        ("train.stage2.train_text_projection", "false"),
        // evaluation
        ("eval.feature_mode", "img+post"),
        ("eval.metric", "cosine"),
    ]
}

/// Resolved configuration map.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    map: BTreeMap<String, String>,
}

impl ExperimentConfig {
    pub fn defaults() -> Self {
        let map = default_entries().into_iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
        ExperimentConfig { map }
    }

    /// Defaults, then the optional config file, then `--set key=value`
    /// overrides, in that order. Unknown keys are rejected.
    pub fn load(file: Option<&Path>, sets: &[String]) -> Result<Self> {
        let mut cfg = Self::defaults();
        cfg.overlay(file, sets)?;
        Ok(cfg)
    }

    /// Apply a config file and then `--set` overrides on top of `self`.
    pub fn overlay(&mut self, file: Option<&Path>, sets: &[String]) -> Result<()> {
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)?;
            self.apply_text(&text, &path.display().to_string())?;
        }
        for s in sets {
            let (k, v) = split_kv(s)
                .ok_or_else(|| CliError::config(format!("--set '{s}': expected key=value")))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    /// Defaults overlaid with key=value lines, e.g. a checkpoint's frozen
    /// config echo.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::defaults();
        cfg.apply_text(text, "<config>")?;
        Ok(cfg)
    }

    fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = split_kv(line).ok_or_else(|| {
                CliError::config(format!("{origin}:{}: expected key=value", lineno + 1))
            })?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if !self.map.contains_key(key) {
            return Err(CliError::config(format!("unknown config key '{key}'")));
        }
        self.map.insert(key.to_string(), value.to_string());
        Ok(())
    }

    pub fn get(&self, key: &str) -> Result<&str> {
        self.map
            .get(key)
            .map(|s| s.as_str())
            .ok_or_else(|| CliError::config(format!("unknown config key '{key}'")))
    }

    pub fn get_usize(&self, key: &str) -> Result<usize> {
        self.get(key)?
            .parse()
            .map_err(|_| CliError::config(format!("{key}: expected an unsigned integer")))
    }

    pub fn get_u64(&self, key: &str) -> Result<u64> {
        self.get(key)?
            .parse()
            .map_err(|_| CliError::config(format!("{key}: expected an unsigned integer")))
    }

    pub fn get_f64(&self, key: &str) -> Result<f64> {
        self.get(key)?
            .parse()
            .map_err(|_| CliError::config(format!("{key}: expected a number")))
    }

    pub fn get_bool(&self, key: &str) -> Result<bool> {
        match self.get(key)? {
            "true" | "1" | "yes" => Ok(true),
            "false" | "0" | "no" => Ok(false),
            other => Err(CliError::config(format!("{key}: expected a boolean, got '{other}'"))),
        }
    }

    /// Comma-separated usize list; empty string means empty list.
    pub fn get_usize_list(&self, key: &str) -> Result<Vec<usize>> {
        let raw = self.get(key)?.trim();
        if raw.is_empty() {
            return Ok(Vec::new());
        }
        raw.split(',')
            .map(|p| {
                p.trim()
                    .parse()
                    .map_err(|_| CliError::config(format!("{key}: bad integer '{p}'")))
            })
            .collect()
    }

    /// Canonical key=value lines for keys under one namespace prefix.
    pub fn subset_text(&self, prefix: &str) -> String {
        let mut out = String::new();
        for (k, v) in &self.map {
            if k.starts_with(prefix) {
                out.push_str(k);
                out.push('=');
                out.push_str(v);
                out.push('\n');
            }
        }
        out
    }

    /// Canonical serialized form: sorted key=value lines.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.map {
            out.push_str(k);
            out.push('=');
            out.push_str(v);
            out.push('\n');
        }
        out
    }
}

fn split_kv(s: &str) -> Option<(&str, &str)> {
    let idx = s.find('=')?;
    let (k, v) = s.split_at(idx);
    Some((k.trim(), v[1..].trim()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_apply_in_order() {
        let cfg =
            ExperimentConfig::load(None, &["model.m=8".into(), "seed=3".into()]).unwrap();
        assert_eq!(cfg.get_usize("model.m").unwrap(), 8);
        assert_eq!(cfg.get_u64("seed").unwrap(), 3);
        assert_eq!(cfg.get_usize("model.depth").unwrap(), 2);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(ExperimentConfig::load(None, &["model.bogus=1".into()]).is_err());
        assert!(ExperimentConfig::load(None, &["notakv".into()]).is_err());
    }

    #[test]
    fn canonical_text_round_trips() {
        let cfg = ExperimentConfig::load(None, &["model.m=8".into()]).unwrap();
        let text = cfg.to_text();
        let dir = std::env::temp_dir().join(format!("reid-cfg-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("c.cfg");
        std::fs::write(&path, &text).unwrap();
        let re = ExperimentConfig::load(Some(&path), &[]).unwrap();
        assert_eq!(re.to_text(), text);
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
