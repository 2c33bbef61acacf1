//! Round orchestration over simulated sites, the server/client message
//! protocol with its binary codec, and checkpointing.

pub mod codec;
mod experiment;
mod message;
mod metrics;
mod site;

pub use codec::DecodeError;
pub use experiment::{build_sites, run_experiment, Checkpoint, Experiment, RunOutput};
pub use message::{Broadcast, Report, RoundMessage};
pub use metrics::{metrics_csv, rows_for, MetricsRow, CSV_HEADER};
pub use site::{client_update, install_shared, local_update, shared_params, ClientSettings, ClientSite};
