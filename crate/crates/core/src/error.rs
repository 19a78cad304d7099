use std::path::PathBuf;

use crate::domain::{AdId, CampaignId, CrowdId};

/// Errors returned by `tfms-core`.
#[derive(thiserror::Error, Debug)]
pub enum Error {
    #[error("pair references ad {pair_ad} but campaign {campaign} owns ad {campaign_ad}")]
    AdMismatch {
        campaign: CampaignId,
        campaign_ad: AdId,
        pair_ad: AdId,
    },

    #[error("unknown campaign {0}")]
    UnknownCampaign(CampaignId),

    #[error("campaign {campaign} does not target crowd {crowd}")]
    UnknownTargeting { campaign: CampaignId, crowd: CrowdId },

    #[error("ad {ad} is already owned by campaign {owner}")]
    AdOwnedElsewhere { ad: AdId, owner: CampaignId },

    #[error("invalid campaign {campaign}: {reason}")]
    InvalidCampaign {
        campaign: CampaignId,
        reason: String,
    },

    #[error("invalid workload spec: {0}")]
    InvalidSpec(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("snapshot integrity check failed: {0}")]
    Integrity(String),

    #[error("malformed log {path} at line {line}: {reason}")]
    MalformedLog {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("reports come from different workloads ({left} vs {right})")]
    WorkloadMismatch { left: String, right: String },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) trait IoContext<T> {
    fn io_context(self, context: impl FnOnce() -> String) -> Result<T>;
}

impl<T> IoContext<T> for std::io::Result<T> {
    fn io_context(self, context: impl FnOnce() -> String) -> Result<T> {
        self.map_err(|source| Error::Io {
            context: context(),
            source,
        })
    }
}
