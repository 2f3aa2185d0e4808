//! Binary frames exchanged between the master and the sites.
//!
//! Every frame starts with the total frame length (including the 4-byte
//! prefix itself) as a little-endian `u32`, followed by a one-byte tag.
//! All integers and floats are little-endian.
//!
//! ```text
//! BetaBroadcast   (tag 0): len u32 | 0u8 | round u32 | p u32 | beta f64×p | purpose u8
//! GradientMessage (tag 1): len u32 | 1u8 | round u32 | site_id u16 | n_local u32 | p u32
//!                          | grad f64×p (if requested) | loss f64 (if requested)
//! ```
//!
//! A reply carries no flag telling which optional fields are present; the
//! master always knows what it asked for, so [`GradientMessage::decode`]
//! takes the request [`Purpose`].

use crate::error::{Error, Result};

pub const TAG_BROADCAST: u8 = 0;
pub const TAG_GRADIENT: u8 = 1;

/// Bytes in a broadcast frame before the coefficient payload (prefix, tag,
/// round, p) plus the trailing purpose byte.
pub const BROADCAST_OVERHEAD: usize = 4 + 1 + 4 + 4 + 1;
/// Bytes in a reply frame before the optional payload.
pub const REPLY_HEADER: usize = 4 + 1 + 4 + 2 + 4 + 4;

/// Upper bound on accepted frames (128 MiB); larger prefixes are rejected.
pub const MAX_FRAME: usize = 128 << 20;

/// What the master wants back from every site.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Purpose {
    GradientRequest = 0,
    LossRequest = 1,
    GradAndLoss = 2,
    /// Column sums of `x` (in the gradient slot) and the sum of `y` (in the loss slot).
    Sums = 3,
    /// Subtract pooled means; the payload holds the `p` column means then the
    /// response mean, so the frame's `p` field is `p + 1`. Reply is header only.
    Center = 4,
}

impl Purpose {
    pub fn from_u8(v: u8) -> Result<Self> {
        Ok(match v {
            0 => Self::GradientRequest,
            1 => Self::LossRequest,
            2 => Self::GradAndLoss,
            3 => Self::Sums,
            4 => Self::Center,
            other => return Err(Error::Wire(format!("unknown purpose {other}"))),
        })
    }

    pub fn wants_grad(self) -> bool {
        matches!(self, Self::GradientRequest | Self::GradAndLoss | Self::Sums)
    }

    pub fn wants_loss(self) -> bool {
        matches!(self, Self::LossRequest | Self::GradAndLoss | Self::Sums)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BetaBroadcast {
    pub round: u32,
    pub beta: Vec<f64>,
    pub purpose: Purpose,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientMessage {
    pub round: u32,
    pub site_id: u16,
    pub n_local: u32,
    pub p: u32,
    pub grad: Option<Vec<f64>>,
    pub loss: Option<f64>,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, k: usize) -> Result<&'a [u8]> {
        if self.pos + k > self.buf.len() {
            return Err(Error::Wire(format!(
                "truncated frame: need {} bytes at offset {}, have {}",
                k,
                self.pos,
                self.buf.len()
            )));
        }
        let out = &self.buf[self.pos..self.pos + k];
        self.pos += k;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, k: usize) -> Result<Vec<f64>> {
        let raw = self.take(k.checked_mul(8).ok_or_else(|| Error::Wire("payload overflow".into()))?)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }
}

/// Validates the length prefix and tag; returns a reader positioned after the tag.
fn open_frame(buf: &[u8], tag: u8) -> Result<Reader<'_>> {
    let mut r = Reader { buf, pos: 0 };
    let declared = r.u32()? as usize;
    if declared != buf.len() {
        return Err(Error::Wire(format!("length prefix says {declared} bytes, frame has {}", buf.len())));
    }
    let got = r.u8()?;
    if got != tag {
        return Err(Error::Wire(format!("unknown or unexpected tag {got} (wanted {tag})")));
    }
    Ok(r)
}

fn close_frame(r: &Reader<'_>) -> Result<()> {
    if r.pos != r.buf.len() {
        return Err(Error::Wire(format!("{} trailing bytes after payload", r.buf.len() - r.pos)));
    }
    Ok(())
}

fn frame_len(buf: &[u8]) -> Result<u32> {
    u32::try_from(buf.len()).map_err(|_| Error::Wire("frame exceeds u32 length".into()))
}

impl BetaBroadcast {
    pub fn encoded_len(p: usize) -> usize {
        BROADCAST_OVERHEAD + 8 * p
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let p = u32::try_from(self.beta.len()).map_err(|_| Error::Wire("p exceeds u32".into()))?;
        let mut out = Vec::with_capacity(Self::encoded_len(self.beta.len()));
        out.extend_from_slice(&[0; 4]);
        out.push(TAG_BROADCAST);
        out.extend_from_slice(&self.round.to_le_bytes());
        out.extend_from_slice(&p.to_le_bytes());
        for b in &self.beta {
            out.extend_from_slice(&b.to_le_bytes());
        }
        out.push(self.purpose as u8);
        let len = frame_len(&out)?;
        out[..4].copy_from_slice(&len.to_le_bytes());
        Ok(out)
    }

    pub fn decode(buf: &[u8]) -> Result<Self> {
        let mut r = open_frame(buf, TAG_BROADCAST)?;
        let round = r.u32()?;
        let p = r.u32()? as usize;
        let expected = Self::encoded_len(p);
        if buf.len() != expected {
            return Err(Error::Wire(format!(
                "broadcast declares p = {p} ({expected} bytes) but frame has {}",
                buf.len()
            )));
        }
        let beta = r.f64s(p)?;
        let purpose = Purpose::from_u8(r.u8()?)?;
        close_frame(&r)?;
        Ok(Self { round, beta, purpose })
    }
}

impl GradientMessage {
    pub fn encoded_len(p: usize, purpose: Purpose) -> usize {
        let mut len = REPLY_HEADER;
        if purpose.wants_grad() {
            len += 8 * p;
        }
        if purpose.wants_loss() {
            len += 8;
        }
        len
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(REPLY_HEADER + 8 * (self.p as usize + 1));
        out.extend_from_slice(&[0; 4]);
        out.push(TAG_GRADIENT);
        out.extend_from_slice(&self.round.to_le_bytes());
        out.extend_from_slice(&self.site_id.to_le_bytes());
        out.extend_from_slice(&self.n_local.to_le_bytes());
        out.extend_from_slice(&self.p.to_le_bytes());
        if let Some(g) = &self.grad {
            if g.len() != self.p as usize {
                return Err(Error::Wire(format!("gradient has {} entries but p = {}", g.len(), self.p)));
            }
            for v in g {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        if let Some(l) = self.loss {
            out.extend_from_slice(&l.to_le_bytes());
        }
        let len = frame_len(&out)?;
        out[..4].copy_from_slice(&len.to_le_bytes());
        Ok(out)
    }

    /// Decode a reply to a broadcast with the given purpose.
    pub fn decode(buf: &[u8], purpose: Purpose) -> Result<Self> {
        let mut r = open_frame(buf, TAG_GRADIENT)?;
        let round = r.u32()?;
        let site_id = r.u16()?;
        let n_local = r.u32()?;
        let p = r.u32()?;
        let expected = Self::encoded_len(p as usize, purpose);
        if buf.len() != expected {
            return Err(Error::Wire(format!(
                "reply declares p = {p} for purpose {purpose:?} ({expected} bytes) but frame has {}",
                buf.len()
            )));
        }
        let grad = if purpose.wants_grad() { Some(r.f64s(p as usize)?) } else { None };
        let loss = if purpose.wants_loss() { Some(r.f64()?) } else { None };
        close_frame(&r)?;
        Ok(Self { round, site_id, n_local, p, grad, loss })
    }
}

/// Peek the tag of a complete frame.
pub fn frame_tag(buf: &[u8]) -> Result<u8> {
    if buf.len() < 5 {
        return Err(Error::Wire("truncated frame header".into()));
    }
    match buf[4] {
        t @ (TAG_BROADCAST | TAG_GRADIENT) => Ok(t),
        t => Err(Error::Wire(format!("unknown tag {t}"))),
    }
}

/// Read one frame from a stream. `Ok(None)` on a clean end of stream.
pub fn read_frame(stream: &mut impl std::io::Read) -> Result<Option<Vec<u8>>> {
    let mut prefix = [0u8; 4];
    match stream.read_exact(&mut prefix) {
        Ok(()) => {}
        Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e.into()),
    }
    let len = u32::from_le_bytes(prefix) as usize;
    if !(5..=MAX_FRAME).contains(&len) {
        return Err(Error::Wire(format!("frame length {len} out of range")));
    }
    let mut buf = vec![0u8; len];
    buf[..4].copy_from_slice(&prefix);
    stream.read_exact(&mut buf[4..])?;
    Ok(Some(buf))
}
