use rayon::prelude::*;

use super::site::SiteWorker;
use super::{SiteInfo, Transport};
use crate::error::{Error, Result};

/// Sites as in-memory workers. Frames still go through the codec so byte
/// counts and decoded values match the socket backend exactly.
pub struct InProcessTransport {
    workers: Vec<SiteWorker>,
}

impl InProcessTransport {
    pub fn new(workers: Vec<SiteWorker>) -> Self {
        Self { workers }
    }
}

impl Transport for InProcessTransport {
    fn sites(&self) -> Vec<SiteInfo> {
        self.workers.iter().map(|w| SiteInfo { site_id: w.site_id(), n: w.n() }).collect()
    }

    fn exchange(&mut self, frame: &[u8]) -> Result<Vec<Vec<u8>>> {
        self.workers
            .par_iter_mut()
            .map(|w| w.handle(frame).map_err(|e| Error::Site { site_id: w.site_id(), reason: e.to_string() }))
            .collect()
    }
}
