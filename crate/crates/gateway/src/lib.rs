//! Serving and tooling around the triage library: HTTP backends, the
//! triage service, a mock backend and the `babybear` CLI.

pub mod backend;
pub mod cli;
pub mod config;
pub mod mock_server;
pub mod protocol;
pub mod serve;
pub mod server;

pub use backend::{BackendDescriptor, HttpBackend};
pub use config::{ActiveCascade, CascadeConfig, StageConfig, StageSource};
pub use mock_server::mock_router;
pub use serve::service_router;
pub use server::BackgroundServer;
