//! The coordinator shell: state, single-writer coordinator, persistent
//! event log and configuration.

mod config;
mod coordinator;
mod log;
mod state;

pub use config::{
    BackendConfig, Config, ValidationConfig, CONFIG_SCHEMA_VERSION, ENV_LISTEN_ADDR, ENV_LOG_PATH,
};
pub use coordinator::{CloseReport, Coordinator, StateView, TaskResult, SNAPSHOT_EVERY};
pub use log::{render_log, replay_file, replay_str, EventLog, Recovered, LOG_FORMAT};
pub use state::{AttemptLog, CoordinatorState, TaskBook, TaskClosure, TaskRecord};
