//! Address space, digest placement and nearest-gnode selection.
//!
//! Every node owns a 32-bit [`Ip`]. The top 24 bits of an address name its
//! level-1 group ([`GnodeId`]). Hostnames and public keys are placed in the
//! same space by [`digest32`]: the first four bytes of their SHA-256 digest,
//! read big-endian. Whichever live gnode sits closest to the digest's gnode on
//! the circular 24-bit id ring serves the name.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use sha2::{Digest, Sha256};
use thiserror::Error;

/// Longest hostname accepted, in bytes.
pub const MAX_HOSTNAME_LEN: usize = 512;

/// Number of distinct level-1 gnode ids.
pub const GNODE_SPACE: u32 = 1 << 24;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum IdError {
    #[error("hostname length {0} outside 1..=512 bytes")]
    Length(usize),
    #[error("no active gnode in the network")]
    EmptyNetwork,
    #[error("invalid dotted-quad address {0:?}")]
    BadIp(String),
}

/// A 32-bit node address.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Ip(pub u32);

impl Ip {
    pub const fn new(a: u8, b: u8, c: u8, d: u8) -> Self {
        Ip(u32::from_be_bytes([a, b, c, d]))
    }

    pub fn octets(self) -> [u8; 4] {
        self.0.to_be_bytes()
    }

    pub fn gnode(self) -> GnodeId {
        gnode_of(self)
    }
}

impl fmt::Display for Ip {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [a, b, c, d] = self.octets();
        write!(f, "{a}.{b}.{c}.{d}")
    }
}

impl FromStr for Ip {
    type Err = IdError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        s.parse::<std::net::Ipv4Addr>().map(|v4| Ip(u32::from(v4))).map_err(|_| IdError::BadIp(s.to_string()))
    }
}

/// Level-1 group identifier: the top 24 bits of an [`Ip`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct GnodeId(u32);

impl GnodeId {
    /// Builds a gnode id, masking to 24 bits.
    pub const fn new(value: u32) -> Self {
        GnodeId(value & (GNODE_SPACE - 1))
    }

    pub const fn value(self) -> u32 {
        self.0
    }
}

impl fmt::Display for GnodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [_, a, b, c] = self.0.to_be_bytes();
        write!(f, "{a}.{b}.{c}.*")
    }
}

/// A hostname: between 1 and 512 arbitrary bytes.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Hostname(Vec<u8>);

impl Hostname {
    pub fn new(bytes: impl Into<Vec<u8>>) -> Result<Self, IdError> {
        let bytes = bytes.into();
        if bytes.is_empty() || bytes.len() > MAX_HOSTNAME_LEN {
            return Err(IdError::Length(bytes.len()));
        }
        Ok(Hostname(bytes))
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }

    pub fn hash(&self) -> Ip {
        digest32(&self.0)
    }
}

impl fmt::Display for Hostname {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&String::from_utf8_lossy(&self.0))
    }
}

impl FromStr for Hostname {
    type Err = IdError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Hostname::new(s.as_bytes())
    }
}

/// SHA-256 of `data`, truncated to its first four bytes (big-endian).
pub fn digest32(data: &[u8]) -> Ip {
    let digest = Sha256::digest(data);
    Ip(u32::from_be_bytes([digest[0], digest[1], digest[2], digest[3]]))
}

/// Placement address of a raw hostname.
pub fn hash_hostname(h: &[u8]) -> Result<Ip, IdError> {
    Hostname::new(h).map(|h| h.hash())
}

pub fn gnode_of(ip: Ip) -> GnodeId {
    GnodeId(ip.0 >> 8)
}

/// Circular distance on the 24-bit gnode ring. Never exceeds 2^23.
pub fn ring_distance(a: GnodeId, b: GnodeId) -> u32 {
    let d = a.0.abs_diff(b.0);
    d.min(GNODE_SPACE - d)
}

/// The active gnode nearest to `target`, ties going to the smaller id.
///
/// Only the closest successor and predecessor of `target` (with wraparound)
/// can win, so this is two range lookups rather than a scan.
pub fn rounded_hash_gnode(target: GnodeId, active: &BTreeSet<GnodeId>) -> Result<GnodeId, IdError> {
    let above = active.range(target..).next().or_else(|| active.iter().next());
    let below = active.range(..=target).next_back().or_else(|| active.iter().next_back());
    match (above, below) {
        (Some(&a), Some(&b)) => Ok(closer(target, a, b)),
        _ => Err(IdError::EmptyNetwork),
    }
}

fn closer(target: GnodeId, a: GnodeId, b: GnodeId) -> GnodeId {
    let (da, db) = (ring_distance(target, a), ring_distance(target, b));
    match da.cmp(&db) {
        std::cmp::Ordering::Less => a,
        std::cmp::Ordering::Greater => b,
        std::cmp::Ordering::Equal => a.min(b),
    }
}
