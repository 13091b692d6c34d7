use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{MonetError, Result};
use crate::objective::LossConfig;

/// Where the masks fed to the component VAE come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    /// Attention recursion, trained jointly.
    Learned,
    /// Every pixel in the first slot.
    AllInOne,
    /// Ground-truth masks of the scene itself.
    ElementMasks,
    /// Ground-truth masks of a different, randomly drawn scene.
    WrongElementMasks,
}

impl MaskMode {
    pub const ALL: [MaskMode; 4] =
        [MaskMode::Learned, MaskMode::AllInOne, MaskMode::ElementMasks, MaskMode::WrongElementMasks];

    pub fn as_str(self) -> &'static str {
        match self {
            MaskMode::Learned => "learned",
            MaskMode::AllInOne => "all_in_one",
            MaskMode::ElementMasks => "element_masks",
            MaskMode::WrongElementMasks => "wrong_element_masks",
        }
    }

    pub fn is_provided(self) -> bool {
        self != MaskMode::Learned
    }
}

impl fmt::Display for MaskMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MaskMode {
    type Err = MonetError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|m| m.as_str() == s).ok_or_else(|| {
            let choices: Vec<&str> = Self::ALL.iter().map(|m| m.as_str()).collect();
            MonetError::Argument(format!("unknown mask mode {s:?}; expected one of: {}", choices.join(", ")))
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub iterations: u64,
    pub slots: usize,
    pub beta: f64,
    pub gamma: f64,
    pub sigma_bg: f64,
    pub sigma_fg: f64,
    pub seed: u64,
    pub mask_mode: MaskMode,
    pub rmsprop_decay: f64,
    pub rmsprop_eps: f64,
    /// Steps between checkpoints; 0 writes only the final one.
    pub checkpoint_interval: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::for_mode(MaskMode::Learned)
    }
}

impl TrainConfig {
    /// Defaults for a mask mode: the provided-mask modes use a single
    /// likelihood scale of 0.05 and a mask-KL weight of 0.25.
    pub fn for_mode(mask_mode: MaskMode) -> Self {
        let loss = if mask_mode.is_provided() { LossConfig::provided_masks() } else { LossConfig::monet() };
        Self {
            learning_rate: 1e-4,
            batch_size: 64,
            iterations: 1_000_000,
            slots: 5,
            beta: loss.beta,
            gamma: loss.gamma,
            sigma_bg: loss.sigma_bg,
            sigma_fg: loss.sigma_fg,
            seed: 0,
            mask_mode,
            rmsprop_decay: 0.9,
            rmsprop_eps: 1e-10,
            checkpoint_interval: 0,
        }
    }

    pub fn loss(&self) -> LossConfig {
        LossConfig { beta: self.beta, gamma: self.gamma, sigma_bg: self.sigma_bg, sigma_fg: self.sigma_fg }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(MonetError::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(MonetError::Config("batch_size must be at least 1".into()));
        }
        if self.slots < 2 {
            return Err(MonetError::Config(format!("slots must be at least 2, got {}", self.slots)));
        }
        if !(0.0..1.0).contains(&self.rmsprop_decay) || self.rmsprop_eps < 0.0 {
            return Err(MonetError::Config(format!(
                "rmsprop decay {} / eps {} out of range",
                self.rmsprop_decay, self.rmsprop_eps
            )));
        }
        self.loss().validate().map_err(|e| MonetError::Config(e.to_string()))
    }

    /// Layered resolution: mode defaults, then each JSON object in order.
    /// The mask mode is taken from the last layer that sets it.
    pub fn from_layers(layers: &[serde_json::Value]) -> Result<Self> {
        let mut mode = MaskMode::Learned;
        for layer in layers {
            let obj = layer
                .as_object()
                .ok_or_else(|| MonetError::Config(format!("config layer must be a JSON object, got {layer}")))?;
            if let Some(m) = obj.get("mask_mode") {
                let s = m.as_str().ok_or_else(|| MonetError::Config(format!("mask_mode must be a string, got {m}")))?;
                mode = s.parse()?;
            }
        }
        let mut merged = serde_json::to_value(Self::for_mode(mode))?;
        let target = merged.as_object_mut().expect("struct serialises to an object");
        for layer in layers {
            for (k, v) in layer.as_object().expect("checked above") {
                target.insert(k.clone(), v.clone());
            }
        }
        let config: Self = serde_json::from_value(merged).map_err(|e| MonetError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn defaults_follow_the_mode() {
        let d = TrainConfig::default();
        assert_eq!(
            (d.slots, d.beta, d.gamma, d.sigma_bg, d.sigma_fg, d.learning_rate),
            (5, 0.5, 0.5, 0.09, 0.11, 1e-4)
        );
        let a = TrainConfig::for_mode(MaskMode::ElementMasks);
        assert_eq!((a.beta, a.gamma, a.sigma_bg, a.sigma_fg), (0.5, 0.25, 0.05, 0.05));
    }

    #[test]
    fn later_layers_win() {
        let c = TrainConfig::from_layers(&[json!({"batch_size": 8, "gamma": 0.3}), json!({"gamma": 0.1})]).unwrap();
        assert_eq!((c.batch_size, c.gamma), (8, 0.1));
        let m = TrainConfig::from_layers(&[json!({"mask_mode": "wrong_element_masks", "seed": 3})]).unwrap();
        assert_eq!((m.mask_mode, m.sigma_bg, m.seed), (MaskMode::WrongElementMasks, 0.05, 3));
        let overridden =
            TrainConfig::from_layers(&[json!({"mask_mode": "all_in_one"}), json!({"sigma_fg": 0.2})]).unwrap();
        assert_eq!((overridden.sigma_bg, overridden.sigma_fg), (0.05, 0.2));
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(TrainConfig::from_layers(&[json!({"mask_mode": "sometimes"})]).is_err());
        assert!(TrainConfig::from_layers(&[json!({"slots": 1})]).is_err());
        assert!(TrainConfig::from_layers(&[json!({"no_such_key": 1})]).is_err());
        assert!(TrainConfig::from_layers(&[json!({"learning_rate": 0.0})]).is_err());
        let err = "sometimes".parse::<MaskMode>().unwrap_err().to_string();
        assert!(err.contains("element_masks"), "{err}");
    }
}
