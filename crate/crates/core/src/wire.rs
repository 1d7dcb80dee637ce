//! Canonical byte encoding used for signatures.
//!
//! Every field is written as a 4-byte big-endian length followed by the field
//! bytes, in declaration order. Integers are fixed-width big-endian inside
//! their field. The first field is always the message kind name. A signature
//! field is encoded with length zero while signing. See `docs/wire.md`.

use crate::identity::{PubKey, Signature};
use crate::idspace::{Hostname, Ip};

#[derive(Debug, Default)]
pub struct Encoder {
    buf: Vec<u8>,
}

impl Encoder {
    pub fn new(kind: &str) -> Self {
        let mut enc = Encoder::default();
        enc.bytes(kind.as_bytes());
        enc
    }

    pub fn bytes(&mut self, field: &[u8]) -> &mut Self {
        let len = u32::try_from(field.len()).expect("field under 4 GiB");
        self.buf.extend_from_slice(&len.to_be_bytes());
        self.buf.extend_from_slice(field);
        self
    }

    pub fn u8(&mut self, v: u8) -> &mut Self {
        self.bytes(&[v])
    }

    pub fn u16(&mut self, v: u16) -> &mut Self {
        self.bytes(&v.to_be_bytes())
    }

    pub fn u32(&mut self, v: u32) -> &mut Self {
        self.bytes(&v.to_be_bytes())
    }

    pub fn u64(&mut self, v: u64) -> &mut Self {
        self.bytes(&v.to_be_bytes())
    }

    pub fn ip(&mut self, ip: Ip) -> &mut Self {
        self.u32(ip.0)
    }

    pub fn hostname(&mut self, h: &Hostname) -> &mut Self {
        self.bytes(h.as_bytes())
    }

    pub fn pubkey(&mut self, pk: &PubKey) -> &mut Self {
        self.bytes(pk.as_bytes())
    }

    /// Optional values: a one-byte presence flag, then the value if present.
    pub fn option<T>(&mut self, v: Option<&T>, f: impl FnOnce(&mut Self, &T)) -> &mut Self {
        match v {
            Some(v) => {
                self.u8(1);
                f(self, v);
            }
            None => {
                self.u8(0);
            }
        }
        self
    }

    pub fn zeroed_signature(&mut self) -> &mut Self {
        self.bytes(&[])
    }

    pub fn signature(&mut self, sig: &Signature) -> &mut Self {
        self.bytes(sig.as_bytes())
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout() {
        let mut enc = Encoder::new("K");
        enc.u16(80).ip(Ip::new(1, 2, 3, 4)).zeroed_signature();
        assert_eq!(enc.finish(), vec![0, 0, 0, 1, b'K', 0, 0, 0, 2, 0, 80, 0, 0, 0, 4, 1, 2, 3, 4, 0, 0, 0, 0]);
    }

    #[test]
    fn length_prefix_disambiguates() {
        let mut a = Encoder::new("K");
        a.bytes(b"ab").bytes(b"c");
        let mut b = Encoder::new("K");
        b.bytes(b"a").bytes(b"bc");
        assert_ne!(a.finish(), b.finish());
    }
}
