//! Training configuration: nested JSON with defaults, dotted-path overrides
//! and validation.

use crate::augment::Placement;
use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::teacher::ConflictRule;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::path::Path;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Weak-view partial BCE only.
    Baseline,
    /// Stage 1 followed by stage 2 without prototype terms.
    Cda,
    /// Both stages with prototype alignment.
    #[default]
    Full,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Baseline, Method::Cda, Method::Full];

    pub fn name(self) -> &'static str {
        match self {
            Method::Baseline => "baseline",
            Method::Cda => "cda",
            Method::Full => "full",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WeakAugConfig {
    pub max_angle: f64,
    pub scale_range: (f64, f64),
}

impl Default for WeakAugConfig {
    fn default() -> Self {
        Self {
            max_angle: 20.0,
            scale_range: (0.9, 1.1),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StrongAugConfig {
    pub views: usize,
    pub placement: Placement,
}

impl Default for StrongAugConfig {
    fn default() -> Self {
        Self {
            views: 2,
            placement: Placement::Same,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugConfig {
    pub weak: WeakAugConfig,
    pub strong: StrongAugConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PseudoConfig {
    pub conflict: ConflictRule,
    pub teacher_ema: f64,
    /// Stage-1 epochs trained on the weak view alone before pseudo-labels
    /// and strong views switch on.
    pub warmup_epochs: usize,
}

impl Default for PseudoConfig {
    fn default() -> Self {
        Self {
            conflict: ConflictRule::NextBest,
            teacher_ema: 0.999,
            warmup_epochs: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProtoConfig {
    pub k: usize,
    pub momentum: f64,
    pub warmup_epochs: usize,
}

impl Default for ProtoConfig {
    fn default() -> Self {
        Self {
            k: 5,
            momentum: 0.999,
            warmup_epochs: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub poly_power: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            momentum: 0.9,
            weight_decay: 1e-4,
            poly_power: 0.9,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub batch_size: usize,
    /// Extra checkpoint every this many steps; 0 disables.
    pub checkpoint_every: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            stage1_epochs: 40,
            stage2_epochs: 40,
            batch_size: 4,
            checkpoint_every: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub tau: f64,
    pub method: Method,
    pub model: BackboneConfig,
    pub aug: AugConfig,
    pub pseudo: PseudoConfig,
    pub proto: ProtoConfig,
    pub loss: LossWeights,
    pub optim: OptimConfig,
    pub schedule: ScheduleConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            tau: 0.5,
            method: Method::Full,
            model: BackboneConfig::default(),
            aug: AugConfig::default(),
            pseudo: PseudoConfig::default(),
            proto: ProtoConfig::default(),
            loss: LossWeights::default(),
            optim: OptimConfig::default(),
            schedule: ScheduleConfig::default(),
        }
    }
}

fn unit_open(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v < 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} must lie in (0, 1), got {v}")))
    }
}

fn unit_closed(name: &str, v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} must lie in [0, 1], got {v}")))
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        unit_open("tau", self.tau)?;
        unit_closed("pseudo.teacher_ema", self.pseudo.teacher_ema)?;
        unit_closed("proto.momentum", self.proto.momentum)?;
        self.loss.validate()?;
        let m = &self.model;
        if m.depth == 0 || m.base_width == 0 || m.embed_dim == 0 || m.norm_groups == 0 {
            return Err(Error::Config("model sizes must be positive".into()));
        }
        if m.base_width % m.norm_groups != 0 {
            return Err(Error::Config(format!(
                "model.base_width {} is not divisible by model.norm_groups {}",
                m.base_width, m.norm_groups
            )));
        }
        let w = &self.aug.weak;
        if !(w.max_angle >= 0.0 && w.max_angle <= 180.0) {
            return Err(Error::Config(format!("aug.weak.max_angle {} outside [0, 180]", w.max_angle)));
        }
        let (lo, hi) = w.scale_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::Config(format!("aug.weak.scale_range ({lo}, {hi}) is not a positive interval")));
        }
        if self.aug.strong.views == 0 {
            return Err(Error::Config("aug.strong.views must be >= 1".into()));
        }
        if self.aug.strong.placement != Placement::Same {
            return Err(Error::Config("aug.strong.placement: only `same` is implemented".into()));
        }
        if self.proto.k == 0 {
            return Err(Error::Config("proto.k must be >= 1".into()));
        }
        let o = &self.optim;
        if !(o.lr > 0.0 && o.lr.is_finite()) {
            return Err(Error::Config(format!("optim.lr must be positive, got {}", o.lr)));
        }
        unit_closed("optim.momentum", o.momentum)?;
        if o.weight_decay < 0.0 || o.poly_power < 0.0 {
            return Err(Error::Config("optim.weight_decay and optim.poly_power must be >= 0".into()));
        }
        let s = &self.schedule;
        if s.batch_size < 2 {
            return Err(Error::Config("schedule.batch_size must be >= 2".into()));
        }
        if s.stage1_epochs == 0 {
            return Err(Error::Config("schedule.stage1_epochs must be >= 1".into()));
        }
        if self.method == Method::Full && s.stage2_epochs <= self.proto.warmup_epochs {
            return Err(Error::Config("schedule.stage2_epochs must exceed proto.warmup_epochs".into()));
        }
        Ok(())
    }

    /// Parses JSON text (empty means all defaults), applies `key=value`
    /// overrides and validates.
    pub fn from_json_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut value = if text.trim().is_empty() {
            Value::Object(Default::default())
        } else {
            serde_json::from_str(text).map_err(|e| Error::Config(format!("config is not valid JSON: {e}")))?
        };
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let cfg: TrainConfig = serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => String::new(),
        };
        Self::from_json_str(&text, overrides)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// Sets `a.b.c=value` in a JSON tree. The value is parsed as JSON when
/// possible and kept as a string otherwise.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(Error::Config(format!("override key `{key}` is malformed")));
    }
    let parsed = serde_json::from_str(raw.trim()).unwrap_or_else(|_| Value::String(raw.trim().to_string()));
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for part in &parts[..parts.len() - 1] {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("override `{key}` descends into a non-object")))?;
        node = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    let obj = node
        .as_object_mut()
        .ok_or_else(|| Error::Config(format!("override `{key}` descends into a non-object")))?;
    obj.insert(parts[parts.len() - 1].to_string(), parsed);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_gives_defaults() {
        let c = TrainConfig::from_json_str("", &[]).unwrap();
        assert_eq!(c, TrainConfig::default());
        assert_eq!((c.tau, c.aug.strong.views, c.proto.k), (0.5, 2, 5));
        assert_eq!((c.proto.momentum, c.loss.alpha, c.loss.lambda1, c.loss.lambda2), (0.999, 0.1, 0.001, 0.01));
    }

    #[test]
    fn out_of_range_tau_is_rejected() {
        assert!(matches!(TrainConfig::from_json_str(r#"{"tau": 1.5}"#, &[]), Err(Error::Config(_))));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(TrainConfig::from_json_str(r#"{"aug": {"weak": {"angle": 3}}}"#, &[]).is_err());
        assert!(TrainConfig::from_json_str("{}", &["proto.q=1".into()]).is_err());
    }

    #[test]
    fn override_beats_file() {
        let text = r#"{"aug": {"strong": {"views": 4}}, "pseudo": {"conflict": "background"}}"#;
        let c = TrainConfig::from_json_str(text, &["aug.strong.views=3".into(), "method=cda".into()]).unwrap();
        assert_eq!(c.aug.strong.views, 3);
        assert_eq!(c.method, Method::Cda);
        assert_eq!(c.pseudo.conflict, ConflictRule::Background);
    }

    #[test]
    fn resolved_config_round_trips() {
        let c = TrainConfig::from_json_str("{}", &["optim.lr=0.02".into()]).unwrap();
        assert_eq!(TrainConfig::from_json_str(&c.to_json(), &[]).unwrap(), c);
    }
}
