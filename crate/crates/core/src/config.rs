//! Default hyperparameters and their TOML form.

use serde::{Deserialize, Serialize};

use crate::assignment::MatchWeights;
use crate::encoding::EncodingConfig;
use crate::losses::LossWeights;
use crate::refinement::RefineConfig;

/// Vertex count, loss weights and the corner score threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HyperParams {
    pub m: usize,
    pub lambda_cls: f64,
    pub lambda_poly: f64,
    pub lambda_cnr: f64,
    pub lambda_iou: f64,
    pub lambda_l1: f64,
    pub score_threshold: f64,
}

impl Default for HyperParams {
    fn default() -> Self {
        HyperParams {
            m: 96,
            lambda_cls: 2.0,
            lambda_poly: 5.0,
            lambda_cnr: 1.0,
            lambda_iou: 2.0,
            lambda_l1: 5.0,
            score_threshold: 0.1,
        }
    }
}

impl HyperParams {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("flat struct serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    pub fn encoding(&self) -> EncodingConfig {
        EncodingConfig {
            m: self.m,
            ..EncodingConfig::default()
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            lambda_cls: self.lambda_cls,
            lambda_poly: self.lambda_poly,
            lambda_cnr: self.lambda_cnr,
            lambda_iou: self.lambda_iou,
            lambda_l1: self.lambda_l1,
        }
    }

    /// Matching reuses the classification and box weights.
    pub fn match_weights(&self) -> MatchWeights {
        MatchWeights {
            lambda_cls: self.lambda_cls,
            lambda_iou: self.lambda_iou,
            lambda_l1: self.lambda_l1,
            ..MatchWeights::default()
        }
    }

    pub fn refine_config(&self) -> RefineConfig {
        RefineConfig {
            score_threshold: self.score_threshold,
            ..RefineConfig::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let h = HyperParams::default();
        assert_eq!(HyperParams::from_toml(&h.to_toml()).unwrap(), h);
        assert!(HyperParams::from_toml("m = 96\nextra = 1\n").is_err());
    }

    #[test]
    fn derived_configs_agree() {
        let h = HyperParams::default();
        assert_eq!(h.loss_weights(), LossWeights::default());
        assert_eq!(h.match_weights(), MatchWeights::default());
        assert_eq!(h.refine_config(), RefineConfig::default());
        assert_eq!(h.encoding(), EncodingConfig::default());
    }
}
