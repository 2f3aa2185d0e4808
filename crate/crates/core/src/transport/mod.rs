//! Master–site communication.
//!
//! A [`Cluster`] owns the master's copy of its data block and a
//! [`Transport`] that reaches every site (the master included). Each call
//! that touches the sites is one synchronous round: encode a
//! [`BetaBroadcast`], send it to all sites, wait for every reply, and hand
//! the decoded replies back in ascending `site_id` order.

mod inproc;
mod site;
mod socket;
pub mod wire;

use std::time::Duration;

use ndarray::{Array1, ArrayView1};
use serde::{Deserialize, Serialize};

pub use inproc::InProcessTransport;
pub use site::SiteWorker;
pub use socket::{serve_connection, serve_forever, SocketTransport, DEFAULT_TIMEOUT};
pub use wire::{BetaBroadcast, GradientMessage, Purpose};

use crate::error::{Error, Result};
use crate::rank_loss::{build_correction, crr_grad, crr_loss, CorrectionVector, DataBlock};
use crate::smoothing::KernelSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SiteInfo {
    pub site_id: u16,
    pub n: usize,
}

/// Moves broadcast frames to the sites and reply frames back.
pub trait Transport: Send {
    fn sites(&self) -> Vec<SiteInfo>;

    /// Deliver one frame to every site; return one reply frame per site in any order.
    fn exchange(&mut self, frame: &[u8]) -> Result<Vec<Vec<u8>>>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    InProcess,
    Socket,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum MasterPolicy {
    /// Site with the most rows; ties go to the smallest id.
    #[default]
    Largest,
    Index(u16),
}

impl MasterPolicy {
    pub fn choose(&self, sites: &[SiteInfo]) -> Result<u16> {
        match *self {
            MasterPolicy::Largest => sites
                .iter()
                .min_by_key(|s| (std::cmp::Reverse(s.n), s.site_id))
                .map(|s| s.site_id)
                .ok_or_else(|| Error::InvalidConfig("cluster has no sites".into())),
            MasterPolicy::Index(id) => {
                if sites.iter().any(|s| s.site_id == id) {
                    Ok(id)
                } else {
                    Err(Error::InvalidConfig(format!("master site {id} is not in the cluster")))
                }
            }
        }
    }
}

/// Round and byte counters. `bytes_down` is master → sites, `bytes_up` is
/// sites → master, both counting whole frames.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CommStats {
    pub rounds: u64,
    pub gradient_rounds: u64,
    pub loss_rounds: u64,
    pub other_rounds: u64,
    pub bytes_up: u64,
    pub bytes_down: u64,
}

impl CommStats {
    fn record(&mut self, purpose: Purpose, down: usize, up: usize) {
        self.rounds += 1;
        match purpose {
            Purpose::GradientRequest | Purpose::GradAndLoss => self.gradient_rounds += 1,
            Purpose::LossRequest => self.loss_rounds += 1,
            Purpose::Sums | Purpose::Center => self.other_rounds += 1,
        }
        self.bytes_down += down as u64;
        self.bytes_up += up as u64;
    }

    /// Counter differences `self − earlier`.
    pub fn since(&self, earlier: &CommStats) -> CommStats {
        CommStats {
            rounds: self.rounds - earlier.rounds,
            gradient_rounds: self.gradient_rounds - earlier.gradient_rounds,
            loss_rounds: self.loss_rounds - earlier.loss_rounds,
            other_rounds: self.other_rounds - earlier.other_rounds,
            bytes_up: self.bytes_up - earlier.bytes_up,
            bytes_down: self.bytes_down - earlier.bytes_down,
        }
    }
}

/// A decoded site reply.
#[derive(Debug, Clone, PartialEq)]
pub struct SiteReply {
    pub site_id: u16,
    pub n_local: usize,
    pub grad: Option<Array1<f64>>,
    pub loss: Option<f64>,
}

pub struct Cluster {
    transport: Box<dyn Transport>,
    backend: Backend,
    sites: Vec<SiteInfo>,
    master_id: u16,
    master: DataBlock,
    kernel: KernelSpec,
    stats: CommStats,
    round: u32,
}

impl std::fmt::Debug for Cluster {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Cluster")
            .field("backend", &self.backend)
            .field("sites", &self.sites)
            .field("master_id", &self.master_id)
            .field("stats", &self.stats)
            .field("round", &self.round)
            .finish()
    }
}

fn make_workers(shards: &[DataBlock], kernel: KernelSpec) -> Result<Vec<SiteWorker>> {
    if shards.is_empty() {
        return Err(Error::InvalidConfig("cluster needs at least one site".into()));
    }
    if shards.len() > u16::MAX as usize + 1 {
        return Err(Error::InvalidConfig(format!("{} sites exceed the u16 id range", shards.len())));
    }
    let p = shards[0].p();
    shards
        .iter()
        .enumerate()
        .map(|(k, b)| {
            if b.p() != p {
                return Err(Error::DimensionMismatch { expected: p, got: b.p() });
            }
            SiteWorker::new(k as u16, b.clone(), kernel)
        })
        .collect()
}

impl Cluster {
    fn assemble(
        transport: Box<dyn Transport>,
        backend: Backend,
        master: DataBlock,
        master_id: u16,
        kernel: KernelSpec,
    ) -> Result<Self> {
        let mut sites = transport.sites();
        sites.sort_by_key(|s| s.site_id);
        if sites.windows(2).any(|w| w[0].site_id == w[1].site_id) {
            return Err(Error::InvalidConfig("duplicate site ids".into()));
        }
        Ok(Self { transport, backend, sites, master_id, master, kernel, stats: CommStats::default(), round: 0 })
    }

    /// Shards become sites `0..M` served from memory.
    pub fn in_process(shards: &[DataBlock], kernel: KernelSpec, policy: MasterPolicy) -> Result<Self> {
        let workers = make_workers(shards, kernel)?;
        let t = InProcessTransport::new(workers);
        let master_id = policy.choose(&t.sites())?;
        let master = shards[master_id as usize].clone();
        Self::assemble(Box::new(t), Backend::InProcess, master, master_id, kernel)
    }

    /// Shards become sites `0..M`, each behind a loopback TCP server thread.
    pub fn local_socket(
        shards: &[DataBlock],
        kernel: KernelSpec,
        policy: MasterPolicy,
        timeout: Duration,
    ) -> Result<Self> {
        let workers = make_workers(shards, kernel)?;
        let t = SocketTransport::spawn_local(workers, timeout)?;
        let master_id = policy.choose(&t.sites())?;
        let master = shards[master_id as usize].clone();
        Self::assemble(Box::new(t), Backend::Socket, master, master_id, kernel)
    }

    pub fn build(backend: Backend, shards: &[DataBlock], kernel: KernelSpec, policy: MasterPolicy) -> Result<Self> {
        match backend {
            Backend::InProcess => Self::in_process(shards, kernel, policy),
            Backend::Socket => Self::local_socket(shards, kernel, policy, DEFAULT_TIMEOUT),
        }
    }

    /// Connect to remote site servers. `master` is the master's own block,
    /// which must also be served by one of the addresses; that site is found
    /// by matching its size and its loss at zero.
    pub fn connect(addresses: &[String], master: DataBlock, kernel: KernelSpec, timeout: Duration) -> Result<Self> {
        kernel.validate()?;
        let (t, hello) = SocketTransport::connect(addresses, master.p(), timeout)?;
        let local = crr_loss(&master, Array1::zeros(master.p()).view(), &kernel)?;
        let master_id = hello
            .iter()
            .filter(|(info, loss)| info.n == master.n() && loss.to_bits() == local.to_bits())
            .map(|(info, _)| info.site_id)
            .min()
            .ok_or_else(|| Error::InvalidConfig("no site serves the master's data".into()))?;
        Self::assemble(Box::new(t), Backend::Socket, master, master_id, kernel)
    }

    /// Use a caller-supplied transport; the master is picked by `policy`.
    pub fn with_transport(
        transport: Box<dyn Transport>,
        backend: Backend,
        master: DataBlock,
        kernel: KernelSpec,
        policy: MasterPolicy,
    ) -> Result<Self> {
        let master_id = policy.choose(&transport.sites())?;
        Self::assemble(transport, backend, master, master_id, kernel)
    }

    pub fn backend(&self) -> Backend {
        self.backend
    }

    pub fn sites(&self) -> &[SiteInfo] {
        &self.sites
    }

    pub fn m(&self) -> usize {
        self.sites.len()
    }

    pub fn p(&self) -> usize {
        self.master.p()
    }

    pub fn total_n(&self) -> usize {
        self.sites.iter().map(|s| s.n).sum()
    }

    pub fn master_id(&self) -> u16 {
        self.master_id
    }

    pub fn master(&self) -> &DataBlock {
        &self.master
    }

    pub fn kernel(&self) -> &KernelSpec {
        &self.kernel
    }

    pub fn stats(&self) -> CommStats {
        self.stats
    }

    pub fn round(&self) -> u32 {
        self.round
    }

    fn broadcast(&mut self, beta: Vec<f64>, purpose: Purpose) -> Result<Vec<SiteReply>> {
        self.round = self.round.checked_add(1).ok_or_else(|| Error::Wire("round counter overflow".into()))?;
        let frame = BetaBroadcast { round: self.round, beta, purpose }.encode()?;
        let raw = self.transport.exchange(&frame)?;
        let mut up = 0;
        let mut replies = Vec::with_capacity(raw.len());
        for bytes in raw {
            up += bytes.len();
            let msg = GradientMessage::decode(&bytes, purpose)?;
            let site = self
                .sites
                .iter()
                .find(|s| s.site_id == msg.site_id)
                .ok_or_else(|| Error::Wire(format!("reply from unknown site {}", msg.site_id)))?;
            if msg.round != self.round {
                return Err(Error::Site {
                    site_id: msg.site_id,
                    reason: format!("answered round {} during round {}", msg.round, self.round),
                });
            }
            if msg.p as usize != self.p() || msg.n_local as usize != site.n {
                return Err(Error::Site {
                    site_id: msg.site_id,
                    reason: format!("reply has p = {}, n = {}", msg.p, msg.n_local),
                });
            }
            replies.push(SiteReply {
                site_id: msg.site_id,
                n_local: msg.n_local as usize,
                grad: msg.grad.map(Array1::from),
                loss: msg.loss,
            });
        }
        replies.sort_by_key(|r| r.site_id);
        let ids: Vec<u16> = replies.iter().map(|r| r.site_id).collect();
        let expected: Vec<u16> = self.sites.iter().map(|s| s.site_id).collect();
        if ids != expected {
            return Err(Error::Wire(format!("round {}: replies from {ids:?}, expected {expected:?}", self.round)));
        }
        self.stats.record(purpose, frame.len() * self.sites.len(), up);
        Ok(replies)
    }

    /// One broadcast of `beta` and the sorted replies.
    pub fn gradient_round(&mut self, beta: ArrayView1<f64>, want: Purpose) -> Result<Vec<SiteReply>> {
        if matches!(want, Purpose::Sums | Purpose::Center) {
            return Err(Error::InvalidArgument(format!("{want:?} is not a coefficient round")));
        }
        if beta.len() != self.p() {
            return Err(Error::DimensionMismatch { expected: self.p(), got: beta.len() });
        }
        self.broadcast(beta.to_vec(), want)
    }

    /// Gradient correction at `beta`, weighting sites by their row counts.
    pub fn correction_at(&mut self, beta: ArrayView1<f64>) -> Result<CorrectionVector> {
        let replies = self.gradient_round(beta, Purpose::GradientRequest)?;
        let master_grad = crr_grad(&self.master, beta, &self.kernel)?;
        let site_grads: Vec<(Array1<f64>, f64)> =
            replies.into_iter().map(|r| (r.grad.expect("gradient requested"), r.n_local as f64)).collect();
        let mut c = build_correction(master_grad.view(), &site_grads)?;
        c.origin_round = self.round;
        Ok(c)
    }

    /// Row-weighted mean of the site losses at `beta`.
    pub fn mean_loss(&mut self, beta: ArrayView1<f64>) -> Result<f64> {
        let replies = self.gradient_round(beta, Purpose::LossRequest)?;
        let total: f64 = replies.iter().map(|r| r.n_local as f64).sum();
        Ok(replies.iter().map(|r| r.loss.expect("loss requested") * (r.n_local as f64 / total)).sum())
    }

    /// Pooled column means of `x` and the pooled mean of `y`.
    pub fn pooled_means(&mut self) -> Result<(Array1<f64>, f64)> {
        let replies = self.broadcast(vec![0.0; self.p()], Purpose::Sums)?;
        let n = self.total_n() as f64;
        let mut sx = Array1::<f64>::zeros(self.p());
        let mut sy = 0.0;
        for r in &replies {
            sx += r.grad.as_ref().expect("sums carry x");
            sy += r.loss.expect("sums carry y");
        }
        Ok((sx / n, sy / n))
    }

    /// Center every site (and the master copy) by the pooled means. Costs a
    /// sums round and a centering round.
    pub fn center(&mut self) -> Result<(Array1<f64>, f64)> {
        let (mx, my) = self.pooled_means()?;
        let mut payload = mx.to_vec();
        payload.push(my);
        self.broadcast(payload, Purpose::Center)?;
        self.master = self.master.centered(mx.view(), my)?;
        Ok((mx, my))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rank_loss::tests::{random_block, random_vec};
    use crate::rank_loss::{crr_loss_grad, weighted_mean};

    fn shards(sizes: &[usize], p: usize, seed: u64) -> Vec<DataBlock> {
        sizes.iter().enumerate().map(|(k, &n)| random_block(n, p, seed + k as u64)).collect()
    }

    #[test]
    fn master_policy() {
        let sites = [SiteInfo { site_id: 0, n: 10 }, SiteInfo { site_id: 1, n: 30 }, SiteInfo { site_id: 2, n: 30 }];
        assert_eq!(MasterPolicy::Largest.choose(&sites).unwrap(), 1);
        assert_eq!(MasterPolicy::Index(2).choose(&sites).unwrap(), 2);
        assert!(MasterPolicy::Index(7).choose(&sites).is_err());
    }

    #[test]
    fn single_site_round_returns_its_gradient() {
        let spec = KernelSpec::default();
        let s = shards(&[15], 4, 1);
        let mut c = Cluster::in_process(&s, spec, MasterPolicy::Largest).unwrap();
        let beta = random_vec(4, 3);
        let r = c.gradient_round(beta.view(), Purpose::GradientRequest).unwrap();
        assert_eq!(r.len(), 1);
        assert_eq!(r[0].grad.as_ref().unwrap(), &crr_grad(&s[0], beta.view(), &spec).unwrap());
        let corr = c.correction_at(beta.view()).unwrap();
        assert!(corr.g.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn identical_shards_give_identical_gradients() {
        let b = random_block(12, 3, 8);
        let s = vec![b.clone(), b.clone(), b];
        let mut c = Cluster::in_process(&s, KernelSpec::default(), MasterPolicy::Largest).unwrap();
        let r = c.gradient_round(random_vec(3, 1).view(), Purpose::GradientRequest).unwrap();
        assert_eq!(r[0].grad, r[1].grad);
        assert_eq!(r[1].grad, r[2].grad);
        assert_eq!(c.master_id(), 0);
    }

    #[test]
    fn aggregation_matches_direct_computation() {
        let spec = KernelSpec::gaussian(0.7).unwrap();
        let s = shards(&[10, 14, 9], 3, 20);
        let mut c = Cluster::in_process(&s, spec, MasterPolicy::Largest).unwrap();
        assert_eq!(c.master_id(), 1);
        let beta = random_vec(3, 5);
        let r = c.gradient_round(beta.view(), Purpose::GradAndLoss).unwrap();
        let direct: Vec<(Array1<f64>, f64)> =
            s.iter().map(|b| (crr_loss_grad(b, beta.view(), &spec).unwrap().1, b.n() as f64)).collect();
        let got: Vec<(Array1<f64>, f64)> = r.iter().map(|r| (r.grad.clone().unwrap(), r.n_local as f64)).collect();
        assert_eq!(weighted_mean(&got).unwrap(), weighted_mean(&direct).unwrap());
        let ids: Vec<u16> = r.iter().map(|r| r.site_id).collect();
        assert_eq!(ids, vec![0, 1, 2]);
    }

    #[test]
    fn stats_count_whole_frames() {
        let s = shards(&[10, 10], 5, 2);
        let mut c = Cluster::in_process(&s, KernelSpec::default(), MasterPolicy::Largest).unwrap();
        let beta = Array1::zeros(5);
        c.gradient_round(beta.view(), Purpose::GradientRequest).unwrap();
        c.mean_loss(beta.view()).unwrap();
        let st = c.stats();
        assert_eq!((st.rounds, st.gradient_rounds, st.loss_rounds), (2, 1, 1));
        assert_eq!(st.bytes_down, 2 * 2 * BetaBroadcast::encoded_len(5) as u64);
        let up = 2 * GradientMessage::encoded_len(5, Purpose::GradientRequest)
            + 2 * GradientMessage::encoded_len(5, Purpose::LossRequest);
        assert_eq!(st.bytes_up, up as u64);
        assert!(c.gradient_round(Array1::zeros(4).view(), Purpose::GradientRequest).is_err());
    }

    #[test]
    fn centering_uses_pooled_means() {
        let s = shards(&[6, 9], 2, 40);
        let pooled = DataBlock::concat(&[&s[0], &s[1]]).unwrap();
        let mut c = Cluster::in_process(&s, KernelSpec::default(), MasterPolicy::Largest).unwrap();
        let (mx, my) = c.center().unwrap();
        let (sx, sy) = pooled.sums();
        assert!((mx - sx / 15.0).iter().all(|d| d.abs() < 1e-14));
        assert!((my - sy / 15.0).abs() < 1e-14);
        let (after, _) = c.pooled_means().unwrap();
        assert!(after.iter().all(|v| v.abs() < 1e-12));
        assert_eq!(c.stats().other_rounds, 3);
    }

    #[test]
    fn socket_backend_matches_in_process() {
        let spec = KernelSpec::default();
        let s = shards(&[11, 13, 12], 4, 60);
        let beta = random_vec(4, 9);
        let mut a = Cluster::in_process(&s, spec, MasterPolicy::Largest).unwrap();
        let mut b = Cluster::local_socket(&s, spec, MasterPolicy::Largest, DEFAULT_TIMEOUT).unwrap();
        assert_eq!(a.correction_at(beta.view()).unwrap(), b.correction_at(beta.view()).unwrap());
        assert_eq!(a.mean_loss(beta.view()).unwrap().to_bits(), b.mean_loss(beta.view()).unwrap().to_bits());
        assert_eq!(a.stats(), b.stats());
        assert_eq!(b.backend(), Backend::Socket);
    }

    #[test]
    fn remote_connect_identifies_master() {
        let spec = KernelSpec::default();
        let s = shards(&[8, 10], 3, 70);
        let mut addrs = Vec::new();
        for (k, b) in s.iter().enumerate() {
            let listener = std::net::TcpListener::bind(("127.0.0.1", 0)).unwrap();
            addrs.push(listener.local_addr().unwrap().to_string());
            let worker = SiteWorker::new(k as u16 + 10, b.clone(), spec).unwrap();
            std::thread::spawn(move || {
                let (stream, _) = listener.accept().unwrap();
                let mut w = worker;
                let _ = serve_connection(stream, &mut w);
            });
        }
        let mut c = Cluster::connect(&addrs, s[1].clone(), spec, DEFAULT_TIMEOUT).unwrap();
        assert_eq!(c.master_id(), 11);
        assert_eq!(c.stats(), CommStats::default());
        let loss = c.mean_loss(Array1::zeros(3).view()).unwrap();
        assert!(loss > 0.0);
    }

    #[test]
    fn dead_site_is_reported_by_id() {
        let spec = KernelSpec::default();
        let s = shards(&[8, 8], 2, 90);
        let listener = std::net::TcpListener::bind(("127.0.0.1", 0)).unwrap();
        let dead = listener.local_addr().unwrap();
        std::thread::spawn(move || {
            let (stream, _) = listener.accept().unwrap();
            drop(stream);
        });
        let live = std::net::TcpListener::bind(("127.0.0.1", 0)).unwrap();
        let live_addr = live.local_addr().unwrap();
        let worker = SiteWorker::new(0, s[0].clone(), spec).unwrap();
        std::thread::spawn(move || {
            let (stream, _) = live.accept().unwrap();
            let mut w = worker;
            let _ = serve_connection(stream, &mut w);
        });
        let t = SocketTransport::with_known_sites(
            &[(SiteInfo { site_id: 0, n: 8 }, live_addr), (SiteInfo { site_id: 1, n: 8 }, dead)],
            Duration::from_secs(5),
        )
        .unwrap();
        let mut c =
            Cluster::with_transport(Box::new(t), Backend::Socket, s[0].clone(), spec, MasterPolicy::Index(0)).unwrap();
        match c.gradient_round(Array1::zeros(2).view(), Purpose::GradientRequest) {
            Err(Error::Site { site_id, .. }) => assert_eq!(site_id, 1),
            other => panic!("expected a site error, got {other:?}"),
        }
    }
}
