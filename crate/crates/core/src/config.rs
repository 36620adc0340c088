//! Run configuration: one TOML file, every field optional, defaults fill the rest.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::air::AirParams;
use crate::baselines::BaselineConfig;
use crate::der::EhrRagParams;
use crate::error::{Error, Result};
use crate::ether::{IndicatorParams, TemporalScoringParams};
use crate::eval::synth::{planted_scenario, SyntheticCohortSpec};
use crate::gateway::{ChatClient, Gateway, GatewayConfig, HttpChatClient, HttpChatConfig, ScriptedResponder};
use crate::index::{ChunkingParams, EmbeddingProvider, HashingEmbedder, HttpEmbedder, HttpEmbedderConfig};
use crate::tasks::TaskSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ChatProvider {
    /// Token-keyed responder for synthetic cohorts; `spec` defaults to the built-in spec.
    Planted {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        spec: Option<PathBuf>,
    },
    Scripted {
        scenario: PathBuf,
    },
    Http(HttpChatConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EmbedderProvider {
    Hashing { dimension: usize },
    Http(HttpEmbedderConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProviderConfig {
    pub chat: ChatProvider,
    pub embedder: EmbedderProvider,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        Self {
            chat: ChatProvider::Planted { spec: None },
            embedder: EmbedderProvider::Hashing { dimension: 256 },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RuntimeConfig {
    /// Benchmark worker threads; 0 means one per logical core.
    pub workers: usize,
    pub embed_in_flight: usize,
    pub parallel_paths: bool,
}

impl Default for RuntimeConfig {
    fn default() -> Self {
        Self {
            workers: 0,
            embed_in_flight: 4,
            parallel_paths: true,
        }
    }
}

impl RuntimeConfig {
    pub fn effective_workers(&self) -> usize {
        if self.workers > 0 {
            self.workers
        } else {
            std::thread::available_parallelism().map_or(1, |n| n.get())
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub ether: TemporalScoringParams,
    pub indicators: IndicatorParams,
    pub air: AirParams,
    pub chunking: ChunkingParams,
    pub gateway: GatewayConfig,
    pub baselines: BaselineConfig,
    pub provider: ProviderConfig,
    pub runtime: RuntimeConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Parse and validate a config file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.ether.validate()?;
        self.indicators.validate()?;
        self.air.validate()?;
        if self.chunking.chunk_size == 0 || self.chunking.overlap >= self.chunking.chunk_size {
            return Err(Error::Config("chunking requires 0 <= overlap < chunk_size".into()));
        }
        self.gateway.validate()?;
        self.baselines.validate()?;
        if self.runtime.embed_in_flight == 0 {
            return Err(Error::Config("embed_in_flight must be positive".into()));
        }
        match &self.provider.embedder {
            EmbedderProvider::Hashing { dimension: 0 } => {
                Err(Error::Config("embedding dimension must be positive".into()))
            }
            EmbedderProvider::Http(c) if c.dimension == 0 => {
                Err(Error::Config("embedding dimension must be positive".into()))
            }
            _ => Ok(()),
        }
    }

    pub fn ehr_rag_params(&self) -> EhrRagParams {
        EhrRagParams {
            ether: self.ether,
            indicators: self.indicators,
            air: self.air,
            chunking: self.chunking,
            embed_in_flight: self.runtime.embed_in_flight,
            parallel_paths: self.runtime.parallel_paths,
        }
    }

    pub fn chat_client(&self, task: &TaskSpec) -> Result<Arc<dyn ChatClient>> {
        Ok(match &self.provider.chat {
            ChatProvider::Planted { spec } => {
                let spec = match spec {
                    Some(p) => SyntheticCohortSpec::load(p)?,
                    None => SyntheticCohortSpec::default(),
                };
                Arc::new(planted_scenario(&spec, task))
            }
            ChatProvider::Scripted { scenario } => Arc::new(ScriptedResponder::load(scenario)?),
            ChatProvider::Http(c) => Arc::new(HttpChatClient::new(c.clone())?),
        })
    }

    pub fn gateway(&self, task: &TaskSpec) -> Result<Gateway> {
        Ok(Gateway::new(self.chat_client(task)?, self.gateway.clone()))
    }

    pub fn embedder(&self) -> Result<Arc<dyn EmbeddingProvider>> {
        Ok(match &self.provider.embedder {
            EmbedderProvider::Hashing { dimension } => Arc::new(HashingEmbedder::new(*dimension)),
            EmbedderProvider::Http(c) => Arc::new(HttpEmbedder::new(c.clone())?),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_reference_settings() {
        let c = RunConfig::from_toml("").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.ether.alpha, 0.75);
        assert_eq!(c.ether.tau_recent_days, 180.0);
        assert_eq!(c.ether.tau_early_days, 3650.0);
        assert_eq!((c.ether.k_cand, c.ether.k_final), (100, 5));
        assert_eq!((c.indicators.n_coarse, c.indicators.n_fine, c.indicators.n_recent), (30, 10, 5));
        assert_eq!((c.chunking.chunk_size, c.chunking.overlap), (100, 5));
        assert_eq!(c.air.max_iterations, 3);
        c.validate().unwrap();
    }

    #[test]
    fn alpha_out_of_range() {
        let c = RunConfig::from_toml("[ether]\nalpha = 2.0\n").unwrap();
        let err = c.validate().unwrap_err().to_string();
        assert!(err.contains("alpha out of [0,1]"), "{err}");
    }

    #[test]
    fn unknown_field_names_the_field() {
        let err = RunConfig::from_toml("[ether]\nalpah = 0.5\n").unwrap_err().to_string();
        assert!(err.contains("alpah"), "{err}");
    }

    #[test]
    fn snapshot_round_trips() {
        let mut c = RunConfig::default();
        c.ether.alpha = 0.5;
        c.air.max_iterations = 2;
        c.provider.chat = ChatProvider::Http(HttpChatConfig {
            endpoint: "http://localhost:1/v1/chat/completions".into(),
            model: "m".into(),
            api_key_env: Some("KEY".into()),
            timeout_secs: 5,
        });
        let text = c.to_toml();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), c);
        let c = RunConfig::default();
        assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c);
    }
}
