use std::io::Write;
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::thread::JoinHandle;
use std::time::Duration;

use log::{debug, warn};

use super::site::SiteWorker;
use super::wire::{read_frame, BetaBroadcast, GradientMessage, Purpose};
use super::{SiteInfo, Transport};
use crate::error::{Error, Result};

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(120);

struct Link {
    info: SiteInfo,
    stream: TcpStream,
}

/// One TCP connection per site. The master writes the broadcast to every
/// connection before reading any reply, so sites compute concurrently.
pub struct SocketTransport {
    links: Vec<Link>,
    servers: Vec<JoinHandle<()>>,
}

fn site_err(site_id: u16, e: impl std::fmt::Display) -> Error {
    Error::Site { site_id, reason: e.to_string() }
}

impl SocketTransport {
    /// Connect to sites whose ids and sizes are already known.
    pub fn with_known_sites(sites: &[(SiteInfo, SocketAddr)], timeout: Duration) -> Result<Self> {
        let mut links = Vec::with_capacity(sites.len());
        for (info, addr) in sites {
            let stream = open(*addr, timeout).map_err(|e| site_err(info.site_id, e))?;
            links.push(Link { info: *info, stream });
        }
        Ok(Self { links, servers: Vec::new() })
    }

    /// Connect to an address list and learn each site's id and size with an
    /// unaccounted loss request at round 0.
    pub fn connect<A: ToSocketAddrs>(
        addresses: &[A],
        p: usize,
        timeout: Duration,
    ) -> Result<(Self, Vec<(SiteInfo, f64)>)> {
        let mut streams = Vec::with_capacity(addresses.len());
        for (k, a) in addresses.iter().enumerate() {
            let addr = a
                .to_socket_addrs()?
                .next()
                .ok_or_else(|| Error::InvalidConfig(format!("address #{k} does not resolve")))?;
            let stream = open(addr, timeout)
                .map_err(|e| Error::Site { site_id: k as u16, reason: format!("connect to {addr}: {e}") })?;
            streams.push(stream);
        }
        let hello = BetaBroadcast { round: 0, beta: vec![0.0; p], purpose: Purpose::LossRequest }.encode()?;
        let mut links = Vec::with_capacity(streams.len());
        let mut losses = Vec::with_capacity(streams.len());
        for (k, mut stream) in streams.into_iter().enumerate() {
            let tag = k as u16;
            stream.write_all(&hello).map_err(|e| site_err(tag, e))?;
            let frame = read_frame(&mut stream)
                .map_err(|e| site_err(tag, e))?
                .ok_or_else(|| site_err(tag, "closed during handshake"))?;
            let msg = GradientMessage::decode(&frame, Purpose::LossRequest).map_err(|e| site_err(tag, e))?;
            if msg.p as usize != p {
                return Err(site_err(msg.site_id, format!("site has p = {}, master has p = {p}", msg.p)));
            }
            let info = SiteInfo { site_id: msg.site_id, n: msg.n_local as usize };
            losses.push((info, msg.loss.unwrap_or(f64::NAN)));
            links.push(Link { info, stream });
        }
        Ok((Self { links, servers: Vec::new() }, losses))
    }

    /// Start one loopback server thread per worker and connect to each.
    pub fn spawn_local(workers: Vec<SiteWorker>, timeout: Duration) -> Result<Self> {
        let mut known = Vec::with_capacity(workers.len());
        let mut servers = Vec::with_capacity(workers.len());
        for worker in workers {
            let listener = TcpListener::bind(("127.0.0.1", 0))?;
            let addr = listener.local_addr()?;
            known.push((SiteInfo { site_id: worker.site_id(), n: worker.n() }, addr));
            servers.push(std::thread::spawn(move || {
                let mut worker = worker;
                match listener.accept() {
                    Ok((stream, _)) => {
                        if let Err(e) = serve_connection(stream, &mut worker) {
                            warn!("site {} stopped: {e}", worker.site_id());
                        }
                    }
                    Err(e) => warn!("site {} accept failed: {e}", worker.site_id()),
                }
            }));
        }
        let mut transport = Self::with_known_sites(&known, timeout)?;
        transport.servers = servers;
        Ok(transport)
    }
}

fn open(addr: SocketAddr, timeout: Duration) -> std::io::Result<TcpStream> {
    let stream = TcpStream::connect_timeout(&addr, timeout)?;
    stream.set_read_timeout(Some(timeout))?;
    stream.set_write_timeout(Some(timeout))?;
    stream.set_nodelay(true)?;
    Ok(stream)
}

impl Transport for SocketTransport {
    fn sites(&self) -> Vec<SiteInfo> {
        self.links.iter().map(|l| l.info).collect()
    }

    fn exchange(&mut self, frame: &[u8]) -> Result<Vec<Vec<u8>>> {
        for link in &mut self.links {
            link.stream.write_all(frame).map_err(|e| site_err(link.info.site_id, e))?;
        }
        let mut replies = Vec::with_capacity(self.links.len());
        for link in &mut self.links {
            let id = link.info.site_id;
            let reply = read_frame(&mut link.stream)
                .map_err(|e| site_err(id, e))?
                .ok_or_else(|| site_err(id, "connection closed"))?;
            replies.push(reply);
        }
        Ok(replies)
    }
}

impl Drop for SocketTransport {
    fn drop(&mut self) {
        for link in &self.links {
            let _ = link.stream.shutdown(std::net::Shutdown::Both);
        }
        self.links.clear();
        for h in self.servers.drain(..) {
            let _ = h.join();
        }
    }
}

/// Answer broadcasts on one connection until the peer closes it.
pub fn serve_connection(mut stream: TcpStream, worker: &mut SiteWorker) -> Result<()> {
    stream.set_nodelay(true)?;
    while let Some(frame) = read_frame(&mut stream)? {
        let reply = worker.handle(&frame)?;
        stream.write_all(&reply)?;
    }
    debug!("site {} connection closed", worker.site_id());
    Ok(())
}

/// Serve connections one after another, each against a fresh copy of the
/// worker. Returns only on a listener error.
pub fn serve_forever(listener: TcpListener, worker: SiteWorker) -> Result<()> {
    loop {
        let (stream, peer) = listener.accept()?;
        debug!("site {} accepted {peer}", worker.site_id());
        let mut session = worker.clone();
        if let Err(e) = serve_connection(stream, &mut session) {
            warn!("site {} session with {peer} ended: {e}", worker.site_id());
        }
    }
}
