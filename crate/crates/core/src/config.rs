//! Pipeline configuration. Every field has a default; a JSON config file may
//! set any subset and CLI flags override both.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ann::HnswParams;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {message}")]
    Read { path: String, message: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RolloutConfig {
    /// Rollouts per task during extraction.
    pub m: u32,
    pub temperature: f64,
    pub explore_temperature: f64,
    pub explore_rollouts: u32,
    pub step_cap: u32,
    /// Observations longer than this many whitespace tokens are summarized.
    pub summary_token_limit: usize,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        Self { m: 4, temperature: 0.9, explore_temperature: 1.0, explore_rollouts: 1, step_cap: 40, summary_token_limit: 1500 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefinementConfig {
    pub cluster_sim_threshold: f64,
    pub cluster_cap: usize,
    pub max_iterations: u32,
    pub min_cluster_points: usize,
}

impl Default for RefinementConfig {
    fn default() -> Self {
        Self { cluster_sim_threshold: 0.9, cluster_cap: 15, max_iterations: 3, min_cluster_points: 2 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalConfig {
    pub broad_k: usize,
    pub min_similarity: f64,
    pub best_match_band: f64,
    pub dedup_threshold: f64,
    pub mmr_lambda: f64,
    pub final_cap: usize,
    pub planning_cap: usize,
    /// Include the retrieved reference plans in the assembled prompt.
    pub include_plans_in_prompt: bool,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            broad_k: 100,
            min_similarity: 0.45,
            best_match_band: 0.08,
            dedup_threshold: 0.95,
            mmr_lambda: 0.75,
            final_cap: 8,
            planning_cap: 3,
            include_plans_in_prompt: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExpansionConfig {
    /// Tools at or above this failure rate form the second priority tier.
    pub failure_tier_threshold: f64,
    /// Number of prioritized tools handed to exploration.
    pub budget: usize,
}

impl Default for ExpansionConfig {
    fn default() -> Self {
        Self { failure_tier_threshold: 0.5, budget: 2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GatewayConfig {
    pub chat_model: String,
    pub embed_model: String,
    pub embed_dimension: usize,
    pub retry_attempts: u32,
    pub retry_backoff_ms: u64,
    /// When set, the mock chat gateway and hash embedder are used.
    pub mock_table: Option<PathBuf>,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        Self {
            chat_model: "default".into(),
            embed_model: "default".into(),
            embed_dimension: 1024,
            retry_attempts: 3,
            retry_backoff_ms: 500,
            mock_table: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub library: Option<PathBuf>,
    pub schemas: Option<PathBuf>,
    pub tasks: Option<PathBuf>,
    pub trajectories: Option<PathBuf>,
    pub templates: Option<PathBuf>,
    pub fixture: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub paths: Paths,
    pub gateway: GatewayConfig,
    pub rollout: RolloutConfig,
    pub refinement: RefinementConfig,
    pub retrieval: RetrievalConfig,
    pub expansion: ExpansionConfig,
    pub hnsw: HnswParams,
    /// Single source of all randomness.
    pub seed: u64,
    pub jobs: Option<usize>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            paths: Paths::default(),
            gateway: GatewayConfig::default(),
            rollout: RolloutConfig::default(),
            refinement: RefinementConfig::default(),
            retrieval: RetrievalConfig::default(),
            expansion: ExpansionConfig::default(),
            hnsw: HnswParams::default(),
            seed: 42,
            jobs: None,
        }
    }
}

fn check(cond: bool, msg: &str, errs: &mut Vec<String>) {
    if !cond {
        errs.push(msg.to_string());
    }
}

impl PipelineConfig {
    /// Read a JSON config; relative paths inside resolve against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Read { path: path.display().to_string(), message: e.to_string() })?;
        let mut cfg: Self =
            serde_json::from_str(&text).map_err(|e| ConfigError::Read { path: path.display().to_string(), message: e.to_string() })?;
        let base = path.parent().unwrap_or(Path::new("."));
        let p = &mut cfg.paths;
        for slot in [&mut p.library, &mut p.schemas, &mut p.tasks, &mut p.trajectories, &mut p.templates, &mut p.fixture, &mut p.out] {
            if let Some(rel) = slot.as_ref().filter(|p| p.is_relative()) {
                *slot = Some(base.join(rel));
            }
        }
        if let Some(rel) = cfg.gateway.mock_table.as_ref().filter(|p| p.is_relative()) {
            cfg.gateway.mock_table = Some(base.join(rel));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut e = Vec::new();
        let r = &self.retrieval;
        check(0.0 < r.min_similarity && r.min_similarity < r.dedup_threshold && r.dedup_threshold <= 1.0, "need 0 < min_similarity < dedup_threshold <= 1", &mut e);
        check((0.0..=1.0).contains(&r.mmr_lambda), "mmr_lambda must lie in [0, 1]", &mut e);
        check(r.best_match_band >= 0.0, "best_match_band must be non-negative", &mut e);
        check(r.final_cap >= 1 && r.broad_k >= 1 && r.planning_cap >= 1, "retrieval caps must be at least 1", &mut e);
        let f = &self.refinement;
        check(f.cluster_sim_threshold > 0.0 && f.cluster_sim_threshold <= 1.0, "cluster_sim_threshold must lie in (0, 1]", &mut e);
        check(f.cluster_cap >= 1 && f.min_cluster_points >= 1, "cluster caps must be at least 1", &mut e);
        let o = &self.rollout;
        check(o.m >= 1 && o.explore_rollouts >= 1 && o.step_cap >= 1, "rollout counts and step cap must be at least 1", &mut e);
        check((0.0..=2.0).contains(&o.temperature) && (0.0..=2.0).contains(&o.explore_temperature), "temperatures must lie in [0, 2]", &mut e);
        let x = &self.expansion;
        check((0.0..=1.0).contains(&x.failure_tier_threshold), "failure_tier_threshold must lie in [0, 1]", &mut e);
        check(self.gateway.embed_dimension >= 1, "embed_dimension must be positive", &mut e);
        check(self.hnsw.m >= 2 && self.hnsw.ef_construction >= 1 && self.hnsw.ef_search >= 1, "hnsw parameters out of range", &mut e);
        if e.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::Invalid(e.join("; ")))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_partial_files_fill_in() {
        PipelineConfig::default().validate().unwrap();
        let cfg: PipelineConfig = serde_json::from_str(r#"{"seed": 7, "retrieval": {"final_cap": 4}}"#).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.retrieval.final_cap, 4);
        assert_eq!(cfg.retrieval.min_similarity, 0.45);
        assert_eq!(cfg.rollout.m, 4);
    }

    #[test]
    fn out_of_range_is_rejected() {
        let mut cfg = PipelineConfig::default();
        cfg.retrieval.mmr_lambda = 1.5;
        assert!(cfg.validate().is_err());
        assert!(serde_json::from_str::<PipelineConfig>(r#"{"bogus": 1}"#).is_err());
    }
}
