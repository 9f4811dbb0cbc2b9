//! Run configuration: model, engine, tiers and topology.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use kvtier_core::{ModelSpec, StorageConfig, TierId, TierSpeed};
use kvtier_engine::{ClockMode, ConnectorConfig, EngineConfig, PushMode};
use serde::{Deserialize, Serialize};

use crate::workload::{Scheduled, WorkloadKind, WorkloadSpec};
use crate::BenchError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    /// One instance offloading to its own RAM (and optionally disk).
    CpuOffload,
    /// Several instances sharing a store server.
    CentralStorage,
    /// Prefill on one instance, decode on another.
    Pd,
}

impl Scenario {
    pub const ALL: [Scenario; 3] = [Scenario::CpuOffload, Scenario::CentralStorage, Scenario::Pd];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::CpuOffload => "cpu_offload",
            Scenario::CentralStorage => "central_storage",
            Scenario::Pd => "pd",
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scenario {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Scenario::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| format!("unknown scenario {s:?} (cpu_offload, central_storage, pd)"))
    }
}

/// Local tiers of each instance. `speeds` are real throttles; virtual-time
/// charges come from `connector.model_speeds`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TierConfig {
    pub ram_bytes: u64,
    pub disk_path: Option<PathBuf>,
    pub disk_quota_bytes: u64,
    pub demote_on_evict: bool,
    pub io_threads: usize,
    pub speeds: BTreeMap<String, TierSpeed>,
}

impl Default for TierConfig {
    fn default() -> Self {
        Self {
            ram_bytes: 256 << 20,
            disk_path: None,
            disk_quota_bytes: 1 << 30,
            demote_on_evict: false,
            io_threads: 2,
            speeds: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CentralConfig {
    pub instances: usize,
    pub server_bytes: u64,
}

impl Default for CentralConfig {
    fn default() -> Self {
        Self {
            instances: 2,
            server_bytes: 512 << 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PdConfig {
    pub push_mode: PushMode,
    pub max_message: usize,
    /// Link charged in virtual time.
    pub link: TierSpeed,
}

impl Default for PdConfig {
    fn default() -> Self {
        Self {
            push_mode: PushMode::Chunk,
            max_message: 8 << 20,
            link: TierSpeed::new(20, 12.5e9),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    pub model: ModelSpec,
    pub chunk_size: usize,
    pub clock: ClockMode,
    pub engine: EngineConfig,
    pub connector: ConnectorConfig,
    pub storage: TierConfig,
    pub central: CentralConfig,
    pub pd: PdConfig,
    /// Check every output against a cacheless engine.
    pub verify: bool,
}

/// Virtual-time device model: PCIe-class RAM, NVMe-class disk and a
/// 10 Gb/s store server.
pub fn default_model_speeds() -> BTreeMap<String, TierSpeed> {
    [
        ("ram", TierSpeed::new(5, 20e9)),
        ("disk", TierSpeed::new(100, 2e9)),
        ("remote:central", TierSpeed::new(200, 1.25e9)),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect()
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            // 256 B per token keeps 40 sessions of 10K tokens in memory
            model: ModelSpec::new("bench-8l-32", 8, 32),
            chunk_size: 256,
            clock: ClockMode::Virtual,
            engine: EngineConfig {
                num_pages: 8192,
                ..Default::default()
            },
            connector: ConnectorConfig {
                model_speeds: default_model_speeds(),
                ..Default::default()
            },
            storage: TierConfig::default(),
            central: CentralConfig::default(),
            pd: PdConfig::default(),
            verify: true,
        }
    }
}

impl BenchConfig {
    /// Reads TOML, or JSON when the file ends in `.json`.
    pub fn load(path: &Path) -> Result<Self, BenchError> {
        let text = std::fs::read_to_string(path)?;
        if path.extension().is_some_and(|e| e == "json") {
            Ok(serde_json::from_str(&text)?)
        } else {
            toml::from_str(&text)
                .map_err(|e| BenchError::Config(format!("{}: {e}", path.display())))
        }
    }

    pub fn storage_config(&self) -> StorageConfig {
        StorageConfig {
            chunk_size: self.chunk_size,
            ram_pool_bytes: self.storage.ram_bytes,
            disk_path: self.storage.disk_path.clone(),
            disk_quota_bytes: self.storage.disk_quota_bytes,
            io_threads: self.storage.io_threads,
            demote_on_evict: self.storage.demote_on_evict,
            speeds: self.storage.speeds.clone(),
        }
    }

    /// Tiers each prefilling instance has in `scenario`.
    pub fn tiers(&self, scenario: Scenario) -> Vec<TierId> {
        let mut t = vec![TierId::RamPool];
        if self.storage.disk_path.is_some() {
            t.push(TierId::LocalDisk);
        }
        if scenario == Scenario::CentralStorage {
            t.push(TierId::remote("central"));
        }
        t
    }

    /// Rejects anything that would fail mid-run.
    pub fn validate(
        &self,
        scenario: Scenario,
        workload: &WorkloadSpec,
        schedule: &[Scheduled],
    ) -> Result<(), BenchError> {
        let bad = |m: String| Err(BenchError::Config(m));
        self.model
            .validate(self.chunk_size)
            .map_err(|e| BenchError::Config(e.to_string()))?;
        self.engine.cost.validate().map_err(BenchError::Config)?;
        if self.engine.max_concurrent == 0 || self.engine.num_pages == 0 || self.engine.vocab == 0 {
            return bad("engine: max_concurrent, num_pages and vocab must be positive".into());
        }
        if workload.kind == WorkloadKind::MultiRoundQa && workload.vocab != self.engine.vocab {
            return bad(format!(
                "workload vocab {} differs from engine vocab {}; answers would not match outputs",
                workload.vocab, self.engine.vocab
            ));
        }
        let tiers = self.tiers(scenario);
        let named = self
            .connector
            .store_tiers
            .iter()
            .chain(&self.connector.load_prefer)
            .chain(
                self.connector
                    .prefetch
                    .then_some(&self.connector.prefetch_tier),
            );
        for t in named {
            if !tiers.contains(t) {
                return bad(format!("{scenario} has no tier {t}"));
            }
        }
        if scenario == Scenario::CentralStorage && self.central.instances == 0 {
            return bad("central_storage needs at least one instance".into());
        }
        if scenario == Scenario::Pd && self.pd.max_message == 0 {
            return bad("pd.max_message must be positive".into());
        }
        for s in schedule {
            let q = &s.query;
            if q.tokens.is_empty() {
                return bad(format!("query {} has an empty prompt", q.id));
            }
            let need = self.model.pages_for(q.tokens.len() + q.max_output);
            if need > self.engine.num_pages {
                return bad(format!(
                    "query {} needs {need} pages, engine has {}",
                    q.id, self.engine.num_pages
                ));
            }
        }
        Ok(())
    }
}
