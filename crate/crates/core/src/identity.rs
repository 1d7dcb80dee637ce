//! Key pairs, request signatures and counter-node placement.
//!
//! Public keys are self-describing: the first byte names the scheme and the
//! rest is the scheme's key material. Two schemes exist:
//!
//! - [`Scheme::Ed25519`], the default, used by every simulated node.
//! - [`Scheme::Mac`], a transparent stand-in whose "public" key carries the
//!   secret itself. It exists only so property tests can sign cheaply and must
//!   never guard anything real.

use std::fmt;
use std::fs;
use std::path::Path;

use ed25519_dalek::{Signer, SigningKey, Verifier, VerifyingKey};
use rand::rngs::OsRng;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::idspace::{digest32, Ip};

/// Upper bound on serialized public key length.
pub const MAX_PUBKEY_LEN: usize = 1024;

const TAG_ED25519: u8 = 0x01;
const TAG_MAC: u8 = 0x02;

#[derive(Debug, Error)]
pub enum IdentityError {
    #[error("malformed public key: {0}")]
    MalformedKey(&'static str),
    #[error("reading key file: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    Ed25519,
    Mac,
}

/// Serialized public key, scheme tag first.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PubKey(Vec<u8>);

impl PubKey {
    pub fn from_bytes(bytes: impl Into<Vec<u8>>) -> Result<Self, IdentityError> {
        let bytes = bytes.into();
        if bytes.is_empty() {
            return Err(IdentityError::MalformedKey("empty"));
        }
        if bytes.len() > MAX_PUBKEY_LEN {
            return Err(IdentityError::MalformedKey("longer than 1024 bytes"));
        }
        Ok(PubKey(bytes))
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }

    /// Short hex tag for logs: the key's 32-bit digest.
    pub fn fingerprint(&self) -> String {
        format!("{:08x}", digest32(&self.0).0)
    }

    pub fn read_file(path: &Path) -> Result<Self, IdentityError> {
        Self::from_bytes(fs::read(path)?)
    }

    pub fn write_file(&self, path: &Path) -> std::io::Result<()> {
        fs::write(path, &self.0)
    }

    fn parse(&self) -> Result<ParsedKey, IdentityError> {
        let (tag, body) = self.0.split_first().expect("non-empty by construction");
        match *tag {
            TAG_ED25519 => {
                let raw: [u8; 32] =
                    body.try_into().map_err(|_| IdentityError::MalformedKey("ed25519 key must be 32 bytes"))?;
                VerifyingKey::from_bytes(&raw)
                    .map(ParsedKey::Ed25519)
                    .map_err(|_| IdentityError::MalformedKey("not a curve point"))
            }
            TAG_MAC => {
                let raw: [u8; 32] =
                    body.try_into().map_err(|_| IdentityError::MalformedKey("mac key must be 32 bytes"))?;
                Ok(ParsedKey::Mac(raw))
            }
            _ => Err(IdentityError::MalformedKey("unknown scheme tag")),
        }
    }
}

impl fmt::Debug for PubKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PubKey({})", self.fingerprint())
    }
}

enum ParsedKey {
    Ed25519(VerifyingKey),
    Mac([u8; 32]),
}

#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Signature(Vec<u8>);

impl Signature {
    pub fn from_bytes(bytes: impl Into<Vec<u8>>) -> Self {
        Signature(bytes.into())
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }

    /// Mutable access for tamper tests.
    pub fn bytes_mut(&mut self) -> &mut Vec<u8> {
        &mut self.0
    }
}

impl fmt::Debug for Signature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let head = &self.0[..self.0.len().min(6)];
        write!(f, "Signature({}..)", hex::encode(head))
    }
}

#[derive(Clone)]
enum Secret {
    Ed25519(SigningKey),
    Mac([u8; 32]),
}

#[derive(Clone)]
pub struct KeyPair {
    public: PubKey,
    secret: Secret,
}

impl fmt::Debug for KeyPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("KeyPair").field("pub", &self.public).finish_non_exhaustive()
    }
}

impl KeyPair {
    /// Generates a key pair; with a seed the result is reproducible.
    pub fn generate(scheme: Scheme, seed: Option<u64>) -> Self {
        let mut material = [0u8; 32];
        match seed {
            Some(seed) => ChaCha20Rng::seed_from_u64(seed).fill_bytes(&mut material),
            None => OsRng.fill_bytes(&mut material),
        }
        match scheme {
            Scheme::Ed25519 => {
                let sk = SigningKey::from_bytes(&material);
                let mut public = vec![TAG_ED25519];
                public.extend_from_slice(sk.verifying_key().as_bytes());
                KeyPair { public: PubKey(public), secret: Secret::Ed25519(sk) }
            }
            Scheme::Mac => {
                let mut public = vec![TAG_MAC];
                public.extend_from_slice(&material);
                KeyPair { public: PubKey(public), secret: Secret::Mac(material) }
            }
        }
    }

    pub fn public(&self) -> &PubKey {
        &self.public
    }
}

pub fn keygen(seed: Option<u64>) -> KeyPair {
    KeyPair::generate(Scheme::Ed25519, seed)
}

pub fn sign(kp: &KeyPair, msg: &[u8]) -> Signature {
    match &kp.secret {
        Secret::Ed25519(sk) => Signature(sk.sign(msg).to_bytes().to_vec()),
        Secret::Mac(key) => Signature(mac(key, msg).to_vec()),
    }
}

pub fn verify(pk: &PubKey, msg: &[u8], sig: &Signature) -> Result<bool, IdentityError> {
    Ok(match pk.parse()? {
        ParsedKey::Ed25519(vk) => match ed25519_dalek::Signature::from_slice(&sig.0) {
            Ok(sig) => vk.verify(msg, &sig).is_ok(),
            Err(_) => false,
        },
        ParsedKey::Mac(key) => mac(&key, msg).as_slice() == sig.0.as_slice(),
    })
}

/// Address of the node that counts registrations for `pk`.
pub fn counter_ip(pk: &PubKey) -> Result<Ip, IdentityError> {
    pk.parse()?;
    Ok(digest32(pk.as_bytes()))
}

fn mac(key: &[u8; 32], msg: &[u8]) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(key);
    h.update(msg);
    h.finalize().into()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn seeded_keygen_is_reproducible() {
        assert_eq!(keygen(Some(7)).public(), keygen(Some(7)).public());
        assert_ne!(keygen(Some(7)).public(), keygen(Some(8)).public());
        assert_ne!(keygen(None).public(), keygen(None).public());
        assert!(keygen(Some(7)).public().as_bytes().len() <= MAX_PUBKEY_LEN);
    }

    #[test]
    fn sign_verify_binding() {
        for scheme in [Scheme::Ed25519, Scheme::Mac] {
            let kp = KeyPair::generate(scheme, Some(1));
            let other = KeyPair::generate(scheme, Some(2));
            let sig = sign(&kp, b"register netsukuku");
            assert!(verify(kp.public(), b"register netsukuku", &sig).unwrap());
            assert!(!verify(kp.public(), b"register netsukukU", &sig).unwrap());
            assert!(!verify(other.public(), b"register netsukuku", &sig).unwrap());
        }
    }

    #[test]
    fn malformed_keys() {
        assert!(PubKey::from_bytes(Vec::new()).is_err());
        assert!(PubKey::from_bytes(vec![1u8; 1025]).is_err());
        let junk = PubKey::from_bytes(vec![0x7f, 1, 2]).unwrap();
        assert!(matches!(
            verify(&junk, b"m", &Signature::from_bytes(vec![0; 64])),
            Err(IdentityError::MalformedKey(_))
        ));
        assert!(counter_ip(&junk).is_err());
        let short = PubKey::from_bytes(vec![TAG_ED25519, 1, 2]).unwrap();
        assert!(counter_ip(&short).is_err());
    }

    #[test]
    fn counter_ip_per_key() {
        let a = keygen(Some(10));
        let b = keygen(Some(11));
        assert_eq!(counter_ip(a.public()).unwrap(), counter_ip(a.public()).unwrap());
        assert_ne!(counter_ip(a.public()).unwrap(), counter_ip(b.public()).unwrap());
        assert_eq!(counter_ip(a.public()).unwrap(), digest32(a.public().as_bytes()));
    }

    #[test]
    fn key_file_round_trip() {
        let dir = std::env::temp_dir().join(format!("andna-key-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("frenzu.pubk");
        let kp = keygen(Some(3));
        kp.public().write_file(&path).unwrap();
        assert_eq!(&PubKey::read_file(&path).unwrap(), kp.public());
        fs::remove_dir_all(dir).unwrap();
    }

    proptest! {
        #[test]
        fn bit_flips_break_verification(
            msg in proptest::collection::vec(any::<u8>(), 1..64),
            bit in 0usize..512,
            flip_sig in any::<bool>(),
        ) {
            let kp = KeyPair::generate(Scheme::Mac, Some(5));
            let mut sig = sign(&kp, &msg);
            prop_assert!(verify(kp.public(), &msg, &sig).unwrap());
            let mut msg2 = msg.clone();
            if flip_sig {
                let n = sig.0.len() * 8;
                sig.0[(bit % n) / 8] ^= 1 << (bit % 8);
            } else {
                let n = msg2.len() * 8;
                msg2[(bit % n) / 8] ^= 1 << (bit % 8);
            }
            prop_assert!(!verify(kp.public(), &msg2, &sig).unwrap());
        }
    }

    #[test]
    fn ed25519_bit_flips() {
        let kp = keygen(Some(9));
        let msg = b"update netsukuku 1";
        let sig = sign(&kp, msg);
        for bit in (0..sig.0.len() * 8).step_by(37) {
            let mut bad = sig.clone();
            bad.0[bit / 8] ^= 1 << (bit % 8);
            assert!(!verify(kp.public(), msg, &bad).unwrap(), "bit {bit}");
        }
    }
}
