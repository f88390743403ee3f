//! Model configuration: per-stage shapes plus the clustering schedule.
//! The JSON config file mirrors these structs field for field; omitted
//! fields fall back to the defaults below.

use serde::{Deserialize, Serialize};

use crate::error::{Result, TcfError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    /// Channel width of this stage.
    pub dim: usize,
    /// Attention heads; must divide `dim`.
    pub heads: usize,
    /// Transformer blocks in this stage.
    pub blocks: usize,
    /// Spatial key/value reduction ratio; must divide the stage grid.
    pub sr_ratio: usize,
    /// MLP hidden width multiplier.
    pub mlp_ratio: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub stages: Vec<StageConfig>,
    /// Spatial part count per merge module, deep schedule last.
    pub ctm_parts: Vec<usize>,
    /// Fraction of tokens kept by each merge.
    pub cluster_ratio: f64,
    /// Neighbourhood size for the density estimate, clamped per part.
    pub knn_k: usize,
    pub num_classes: usize,
    /// Uniform channel width of the aggregation module.
    pub mta_dim: usize,
    /// Attention heads in aggregation blocks; must divide `mta_dim`.
    pub mta_heads: usize,
    /// Use importance-weighted merging inside clustering reduction layers
    /// instead of the plain mean.
    pub cr_weighted: bool,
    /// Seed for fixture weight generation.
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::tiny()
    }
}

impl ModelConfig {
    /// Desk-scale fixture: sub-second CPU forward at 224².
    pub fn tiny() -> Self {
        let dims = [32usize, 64, 160, 256];
        let heads = [1usize, 2, 5, 8];
        let sr = [8usize, 4, 2, 1];
        let stages = (0..4)
            .map(|s| StageConfig {
                dim: dims[s],
                heads: heads[s],
                blocks: 2,
                sr_ratio: sr[s],
                mlp_ratio: 4,
            })
            .collect();
        Self {
            stages,
            ctm_parts: vec![16, 4, 1],
            cluster_ratio: 0.25,
            knn_k: 5,
            num_classes: 1000,
            mta_dim: 64,
            mta_heads: 2,
            cr_weighted: false,
            seed: 42,
        }
    }

    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.len() != 4 {
            return Err(TcfError::Config(format!(
                "expected 4 stages, got {}",
                self.stages.len()
            )));
        }
        if self.ctm_parts.len() != 3 {
            return Err(TcfError::Config(format!(
                "expected 3 part counts, got {}",
                self.ctm_parts.len()
            )));
        }
        for (s, st) in self.stages.iter().enumerate() {
            if st.dim == 0 || st.heads == 0 || st.dim % st.heads != 0 {
                return Err(TcfError::Config(format!(
                    "stage {}: dim {} not divisible into {} heads",
                    s + 1,
                    st.dim,
                    st.heads
                )));
            }
            if st.blocks == 0 || st.sr_ratio == 0 || st.mlp_ratio == 0 {
                return Err(TcfError::Config(format!(
                    "stage {}: blocks, sr_ratio and mlp_ratio must be positive",
                    s + 1
                )));
            }
        }
        let mut prev = usize::MAX;
        for (i, &p) in self.ctm_parts.iter().enumerate() {
            let side = (p as f64).sqrt().round() as usize;
            if p == 0 || side * side != p {
                return Err(TcfError::Config(format!(
                    "part count {p} (merge module {}) is not a perfect square",
                    i + 1
                )));
            }
            if p > prev {
                return Err(TcfError::Config(
                    "part counts must be non-increasing toward deeper merges".into(),
                ));
            }
            prev = p;
        }
        if !(self.cluster_ratio > 0.0 && self.cluster_ratio <= 1.0) {
            return Err(TcfError::Config(format!(
                "cluster ratio {} outside (0, 1]",
                self.cluster_ratio
            )));
        }
        if self.knn_k == 0 {
            return Err(TcfError::Config("knn_k must be positive".into()));
        }
        if self.num_classes == 0 {
            return Err(TcfError::Config("num_classes must be positive".into()));
        }
        if self.mta_dim == 0 || self.mta_heads == 0 || !self.mta_dim.is_multiple_of(self.mta_heads) {
            return Err(TcfError::Config(format!(
                "mta_dim {} not divisible into {} heads",
                self.mta_dim, self.mta_heads
            )));
        }
        Ok(())
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(json)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiny_is_valid() {
        let cfg = ModelConfig::tiny();
        cfg.validate().unwrap();
        assert_eq!(cfg.ctm_parts, vec![16, 4, 1]);
        assert_eq!(cfg.cluster_ratio, 0.25);
        assert_eq!(cfg.knn_k, 5);
    }

    #[test]
    fn json_roundtrip() {
        let cfg = ModelConfig::tiny();
        let back = ModelConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn partial_json_uses_defaults() {
        let cfg = ModelConfig::from_json(r#"{"num_classes": 10, "seed": 7}"#).unwrap();
        assert_eq!(cfg.num_classes, 10);
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.stages, ModelConfig::tiny().stages);
    }

    #[test]
    fn rejects_bad_parts() {
        let mut cfg = ModelConfig::tiny();
        cfg.ctm_parts = vec![15, 4, 1];
        assert!(cfg.validate().is_err());
        cfg.ctm_parts = vec![4, 16, 1];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn rejects_indivisible_heads() {
        let mut cfg = ModelConfig::tiny();
        cfg.stages[2].heads = 7;
        assert!(cfg.validate().is_err());
    }
}
