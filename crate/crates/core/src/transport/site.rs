use ndarray::{Array1, ArrayView1};

use super::wire::{BetaBroadcast, GradientMessage, Purpose};
use crate::error::{Error, Result};
use crate::rank_loss::{crr_grad, crr_loss, crr_loss_grad, DataBlock};
use crate::smoothing::KernelSpec;

/// One site's data and the logic that answers a broadcast.
#[derive(Debug, Clone)]
pub struct SiteWorker {
    site_id: u16,
    block: DataBlock,
    kernel: KernelSpec,
}

impl SiteWorker {
    pub fn new(site_id: u16, block: DataBlock, kernel: KernelSpec) -> Result<Self> {
        kernel.validate()?;
        if u32::try_from(block.n()).is_err() {
            return Err(Error::InvalidArgument("site has more than u32::MAX rows".into()));
        }
        Ok(Self { site_id, block, kernel })
    }

    pub fn site_id(&self) -> u16 {
        self.site_id
    }

    pub fn n(&self) -> usize {
        self.block.n()
    }

    pub fn p(&self) -> usize {
        self.block.p()
    }

    pub fn block(&self) -> &DataBlock {
        &self.block
    }

    /// Decode a broadcast frame, compute, encode the reply frame.
    pub fn handle(&mut self, frame: &[u8]) -> Result<Vec<u8>> {
        let msg = BetaBroadcast::decode(frame)?;
        self.respond(&msg)?.encode()
    }

    pub fn respond(&mut self, msg: &BetaBroadcast) -> Result<GradientMessage> {
        let p = self.p();
        let beta = ArrayView1::from(&msg.beta[..]);
        let expected = if msg.purpose == Purpose::Center { p + 1 } else { p };
        if beta.len() != expected {
            return Err(Error::DimensionMismatch { expected, got: beta.len() });
        }
        let (grad, loss): (Option<Array1<f64>>, Option<f64>) = match msg.purpose {
            Purpose::GradientRequest => (Some(crr_grad(&self.block, beta, &self.kernel)?), None),
            Purpose::LossRequest => (None, Some(crr_loss(&self.block, beta, &self.kernel)?)),
            Purpose::GradAndLoss => {
                let (l, g) = crr_loss_grad(&self.block, beta, &self.kernel)?;
                (Some(g), Some(l))
            }
            Purpose::Sums => {
                let (sx, sy) = self.block.sums();
                (Some(sx), Some(sy))
            }
            Purpose::Center => {
                self.block = self.block.centered(beta.slice(ndarray::s![..p]), beta[p])?;
                (None, None)
            }
        };
        Ok(GradientMessage {
            round: msg.round,
            site_id: self.site_id,
            n_local: self.n() as u32,
            p: p as u32,
            grad: grad.map(|g| g.to_vec()),
            loss,
        })
    }
}
