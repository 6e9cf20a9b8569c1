//! Registry-compiled metric tools over a deterministic Bronze/Silver/Gold
//! telemetry pipeline.
//!
//! Data flows one way: sources are archived to Bronze ([`ingest`]),
//! harmonized to Silver and aggregated to versioned Gold ([`refine`]), and
//! persisted in a time-partitioned [`store`]. Consumers only read Gold: the
//! [`serve`] module answers tool calls compiled from the metric [`registry`]
//! by the [`compiler`], and [`pushpath`] turns Gold change events into
//! threshold alerts using the same registry definitions.

pub mod compiler;
pub mod config;
pub mod digest;
pub mod faults;
pub mod fixtures;
pub mod harness;
pub mod ingest;
pub mod pipeline;
pub mod pushpath;
pub mod refine;
pub mod registry;
pub mod serve;
pub mod store;
pub mod time;

pub use compiler::{compile, CompiledTool, CompiledToolSet};
pub use registry::{MetricDefinition, Registry};
pub use store::{GoldReader, Store, StoreConfig};
pub use time::{TimeRange, Timestamp};
