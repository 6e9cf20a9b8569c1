//! Measurement and load generation: raw-versus-Gold payload sizes, retrieval
//! latency under concurrent load, and a scripted tool caller standing in for
//! an agent.

mod agent;
mod measure;

pub use agent::{random_script, simulate, Http, InProcess, Script, ScriptStep, StepOutcome, Transcript, TranscriptEntry, Transport};
pub use measure::{latency_under_load, measure, LatencyStats, MeasureRequest, MeasurementReport};
