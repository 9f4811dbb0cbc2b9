//! Inference-engine simulator with a tiered KV connector.

pub mod clock;
pub mod connector;
pub mod cost;
pub mod engine;
pub mod events;
pub mod model;
pub mod pd;

pub use clock::{Clock, ClockMode, Lane};
pub use connector::{
    BatchMetadata, Connector, ConnectorConfig, ConnectorError, ConnectorMetadata, KvConnector,
    LoadFault, NoopConnector, PlannedChunk, SchedulerOutput, StagingPool, StoreStats, TransferMode,
};
pub use cost::CostModel;
pub use engine::{Engine, EngineConfig, EngineError, QueryOutput, QueryRecord, SimQuery};
pub use events::{Event, EventKind, EventLog};
pub use pd::{run_pd, PdLink, PdRecord, PdRunError, PushMode};
