//! Run configuration: built-in defaults, overlaid by a JSON file, overlaid
//! by command-line flags.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::detector::{ScaleSpec, DEFAULT_FILTER_SIZES};
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::matching::{PairConfig, RansacParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    /// Number of ladder entries used, taken from the front of `filter_sizes`.
    pub scales: usize,
    pub filter_sizes: Vec<usize>,
    pub detection_threshold: f64,
    pub ratio_threshold: f64,
    pub ransac_threshold_px: f64,
    pub ransac_confidence: f64,
    pub ransac_max_iters: usize,
    pub rng_seed: u64,
    pub min_inliers: usize,
    pub lambda_rec: f64,
    pub lambda_det: f64,
    pub lambda_desc: f64,
    pub lambda_adv: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let w = LossWeights::default();
        let r = RansacParams::default();
        Self {
            scales: DEFAULT_FILTER_SIZES.len(),
            filter_sizes: DEFAULT_FILTER_SIZES.to_vec(),
            detection_threshold: 4e-4,
            ratio_threshold: 0.8,
            ransac_threshold_px: r.threshold,
            ransac_confidence: r.confidence,
            ransac_max_iters: r.max_iters,
            rng_seed: 0,
            min_inliers: 8,
            lambda_rec: w.lambda_rec,
            lambda_det: w.lambda_det,
            lambda_desc: w.lambda_desc,
            lambda_adv: w.lambda_adv,
        }
    }
}

/// Sparse overlay; used both for the JSON file and for flag overrides.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PartialConfig {
    pub scales: Option<usize>,
    pub filter_sizes: Option<Vec<usize>>,
    pub detection_threshold: Option<f64>,
    pub ratio_threshold: Option<f64>,
    pub ransac_threshold_px: Option<f64>,
    pub ransac_confidence: Option<f64>,
    pub ransac_max_iters: Option<usize>,
    pub rng_seed: Option<u64>,
    pub min_inliers: Option<usize>,
    pub lambda_rec: Option<f64>,
    pub lambda_det: Option<f64>,
    pub lambda_desc: Option<f64>,
    pub lambda_adv: Option<f64>,
}

impl PartialConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        if text.trim().is_empty() {
            return Ok(Self::default());
        }
        Ok(serde_json::from_str(text)?)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

impl RunConfig {
    /// Applies the layers in order, later ones winning, then validates.
    ///
    /// When a layer sets `filter_sizes` without `scales`, `scales` follows
    /// the new list length.
    pub fn resolve(layers: &[&PartialConfig]) -> Result<Self> {
        let mut c = Self::default();
        for p in layers {
            if let Some(v) = &p.filter_sizes {
                c.filter_sizes = v.clone();
                c.scales = v.len();
            }
            macro_rules! take {
                ($($f:ident),*) => { $( if let Some(v) = p.$f { c.$f = v; } )* };
            }
            take!(
                scales,
                detection_threshold,
                ratio_threshold,
                ransac_threshold_px,
                ransac_confidence,
                ransac_max_iters,
                rng_seed,
                min_inliers,
                lambda_rec,
                lambda_det,
                lambda_desc,
                lambda_adv
            );
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: Option<&Path>, flags: &PartialConfig) -> Result<Self> {
        let file = match path {
            Some(p) => PartialConfig::from_file(p)?,
            None => PartialConfig::default(),
        };
        Self::resolve(&[&file, flags])
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.scales == 0 {
            return bad("scales must be at least 1".into());
        }
        if self.scales > self.filter_sizes.len() {
            return bad(format!(
                "scales = {} but only {} filter sizes given",
                self.scales,
                self.filter_sizes.len()
            ));
        }
        for (name, v) in [
            ("detection_threshold", self.detection_threshold),
            ("ratio_threshold", self.ratio_threshold),
            ("ransac_threshold_px", self.ransac_threshold_px),
            ("ransac_confidence", self.ransac_confidence),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if self.ransac_confidence >= 1.0 {
            return bad("ransac_confidence must be below 1".into());
        }
        if self.ransac_max_iters == 0 {
            return bad("ransac_max_iters must be at least 1".into());
        }
        self.weights().validate()?;
        self.scale_specs().map(|_| ())
    }

    pub fn scale_specs(&self) -> Result<Vec<ScaleSpec>> {
        self.filter_sizes[..self.scales.min(self.filter_sizes.len())]
            .iter()
            .map(|&l| ScaleSpec::new(l))
            .collect()
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda_rec: self.lambda_rec,
            lambda_det: self.lambda_det,
            lambda_desc: self.lambda_desc,
            lambda_adv: self.lambda_adv,
        }
    }

    pub fn ransac(&self) -> RansacParams {
        RansacParams {
            threshold: self.ransac_threshold_px,
            max_iters: self.ransac_max_iters,
            confidence: self.ransac_confidence,
            seed: self.rng_seed,
        }
    }

    pub fn pair_config(&self) -> Result<PairConfig> {
        Ok(PairConfig {
            scales: self.scale_specs()?,
            detection_threshold: self.detection_threshold,
            ratio_threshold: self.ratio_threshold,
            ransac: self.ransac(),
            min_inliers: self.min_inliers,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_default() {
        let c = RunConfig::resolve(&[&PartialConfig::from_json("{}").unwrap()]).unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.lambda_rec, 8.0);
        assert_eq!(c.scales, 5);
        assert_eq!(
            PartialConfig::from_json("  ").unwrap(),
            PartialConfig::default()
        );
    }

    #[test]
    fn flags_override_file() {
        let file = PartialConfig::from_json(r#"{"scales": 5, "rng_seed": 9}"#).unwrap();
        let flags = PartialConfig {
            scales: Some(3),
            ..Default::default()
        };
        let c = RunConfig::resolve(&[&file, &flags]).unwrap();
        assert_eq!(c.scales, 3);
        assert_eq!(c.rng_seed, 9);
        assert_eq!(c.scale_specs().unwrap().len(), 3);
    }

    #[test]
    fn filter_list_sets_scale_count() {
        let file = PartialConfig::from_json(r#"{"filter_sizes": [9, 15]}"#).unwrap();
        assert_eq!(RunConfig::resolve(&[&file]).unwrap().scales, 2);
    }

    #[test]
    fn rejects_invalid() {
        assert!(PartialConfig::from_json(r#"{"bogus": 1}"#).is_err());
        assert!(PartialConfig::from_json("{").is_err());
        for json in [
            r#"{"detection_threshold": -1e-3}"#,
            r#"{"ratio_threshold": 0}"#,
            r#"{"scales": 0}"#,
            r#"{"scales": 6}"#,
            r#"{"lambda_adv": -1}"#,
            r#"{"ransac_confidence": 1.0}"#,
            r#"{"filter_sizes": [10]}"#,
        ] {
            let p = PartialConfig::from_json(json).unwrap();
            assert!(RunConfig::resolve(&[&p]).is_err(), "{json}");
        }
    }
}
