//! Review service for a reefpipe run: a live track store, durable review
//! labels, a resumable event stream and curated archive export, exposed
//! over HTTP.

pub mod archive;
pub mod events;
pub mod http;
pub mod labels;
pub mod store;

use std::path::Path;

use thiserror::Error;

pub use archive::{export_archive, verify_archive, ArchiveManifest, Include};
pub use events::{EventHub, ServiceEvent};
pub use http::{router, Server};
pub use labels::{LabelLog, LabelRecord, Verdict};
pub use store::{StoreOptions, StoreSink, TrackFilter, TrackStore, TrackSummary};

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("track {0} not found")]
    NotFound(u64),
    #[error("track {track_id} has no crop {index}")]
    NoCrop { track_id: u64, index: usize },
    #[error("{0}")]
    Invalid(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt data: {0}")]
    Corrupt(String),
    #[error("export failed: {0}")]
    Export(String),
    #[error("cannot listen on {0}")]
    Bind(String),
}

impl ServiceError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}
