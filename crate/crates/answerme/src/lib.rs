//! File formats, experiment protocols and the command-line front end for
//! `answerme-core`.

pub mod cli;
pub mod config;
pub mod error;
pub mod formats;
pub mod protocols;
pub mod report;
pub mod runlog;

pub use config::{ProtocolKind, ProtocolSpec, RunConfig};
pub use error::{AppError, ErrorClass, Result};
pub use protocols::{run_protocol, Workbench};
pub use report::{MetricReport, ProtocolOutput};
