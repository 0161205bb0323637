//! Request and result signing.
//!
//! Every client request and every replica result envelope is signed, so a
//! corrupted replica cannot forge traffic from anyone else. Three schemes
//! are supported:
//!
//! * `Null` signs nothing and accepts everything. It exists purely to
//!   measure signing overhead and must never be used where corruption
//!   tolerance matters.
//! * `Ed25519` is the default: small keys, fast signing, fast verify.
//! * `Rsa2048` uses PKCS#1 v1.5 padding over SHA-256 with 2048-bit keys,
//!   matching deployments that are contractually stuck with RSA.
//!
//! Key generation is deterministic given an RNG, so a cluster built twice
//! from the same scenario seed has identical keys and identical signatures.

use ed25519_dalek::{Signer, Verifier};
use rand::{CryptoRng, RngCore};
use rsa::pkcs1::{DecodeRsaPublicKey, EncodeRsaPublicKey};
use rsa::{Pkcs1v15Sign, RsaPrivateKey, RsaPublicKey};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::codec::{CodecError, Dec, Enc};

const RSA_BITS: usize = 2048;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum KeyError {
    #[error("unknown signature scheme {0:?}")]
    UnknownScheme(String),
    #[error("malformed public key")]
    MalformedKey,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    Null,
    Ed25519,
    Rsa2048,
}

impl Scheme {
    pub fn parse(s: &str) -> Result<Scheme, KeyError> {
        match s {
            "null" => Ok(Scheme::Null),
            "ed25519" => Ok(Scheme::Ed25519),
            "rsa2048" => Ok(Scheme::Rsa2048),
            other => Err(KeyError::UnknownScheme(other.to_string())),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Scheme::Null => "null",
            Scheme::Ed25519 => "ed25519",
            Scheme::Rsa2048 => "rsa2048",
        }
    }

    fn tag(&self) -> u8 {
        match self {
            Scheme::Null => 0,
            Scheme::Ed25519 => 1,
            Scheme::Rsa2048 => 2,
        }
    }

    fn from_tag(t: u8) -> Result<Scheme, CodecError> {
        match t {
            0 => Ok(Scheme::Null),
            1 => Ok(Scheme::Ed25519),
            2 => Ok(Scheme::Rsa2048),
            _ => Err(CodecError::Malformed("scheme tag")),
        }
    }
}

/// Verification half of a keypair. Stored in client registration rows and
/// replica rosters; self-describing so a row fully identifies how to check
/// a signature.
#[derive(Clone, PartialEq, Eq)]
pub struct PublicKey {
    scheme: Scheme,
    material: Vec<u8>,
}

impl PublicKey {
    pub fn scheme(&self) -> Scheme {
        self.scheme
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut e = Enc::new();
        e.u8(self.scheme.tag()).bytes(&self.material);
        e.finish()
    }

    pub fn decode(buf: &[u8]) -> Result<PublicKey, CodecError> {
        let mut d = Dec::new(buf);
        let scheme = Scheme::from_tag(d.u8()?)?;
        let material = d.bytes()?.to_vec();
        d.done()?;
        Ok(PublicKey { scheme, material })
    }

    /// True when `sig` is a valid signature over `msg`. Any parse failure
    /// counts as an invalid signature rather than an error: hostile input
    /// must not distinguish "bad key encoding" from "bad signature".
    pub fn verify(&self, msg: &[u8], sig: &[u8]) -> bool {
        match self.scheme {
            Scheme::Null => true,
            Scheme::Ed25519 => {
                let Ok(material): Result<&[u8; 32], _> = self.material.as_slice().try_into()
                else {
                    return false;
                };
                let Ok(vk) = ed25519_dalek::VerifyingKey::from_bytes(material) else {
                    return false;
                };
                let Ok(sig) = ed25519_dalek::Signature::from_slice(sig) else {
                    return false;
                };
                vk.verify(msg, &sig).is_ok()
            }
            Scheme::Rsa2048 => {
                let Ok(pk) = RsaPublicKey::from_pkcs1_der(&self.material) else {
                    return false;
                };
                let digest = Sha256::digest(msg);
                pk.verify(Pkcs1v15Sign::new::<Sha256>(), &digest, sig).is_ok()
            }
        }
    }
}

impl std::fmt::Debug for PublicKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "PublicKey({}, {} bytes)", self.scheme.name(), self.material.len())
    }
}

enum Secret {
    Null,
    Ed25519(ed25519_dalek::SigningKey),
    Rsa(RsaPrivateKey),
}

pub struct Keypair {
    public: PublicKey,
    secret: Secret,
}

impl Keypair {
    pub fn generate(scheme: Scheme, rng: &mut (impl RngCore + CryptoRng)) -> Keypair {
        match scheme {
            Scheme::Null => Keypair {
                public: PublicKey { scheme, material: Vec::new() },
                secret: Secret::Null,
            },
            Scheme::Ed25519 => {
                let mut seed = [0u8; 32];
                rng.fill_bytes(&mut seed);
                let sk = ed25519_dalek::SigningKey::from_bytes(&seed);
                let material = sk.verifying_key().to_bytes().to_vec();
                Keypair { public: PublicKey { scheme, material }, secret: Secret::Ed25519(sk) }
            }
            Scheme::Rsa2048 => {
                let sk = RsaPrivateKey::new(rng, RSA_BITS).expect("rsa keygen");
                let material = RsaPublicKey::from(&sk)
                    .to_pkcs1_der()
                    .expect("rsa der encode")
                    .as_bytes()
                    .to_vec();
                Keypair { public: PublicKey { scheme, material }, secret: Secret::Rsa(sk) }
            }
        }
    }

    pub fn public(&self) -> &PublicKey {
        &self.public
    }

    pub fn sign(&self, msg: &[u8]) -> Vec<u8> {
        match &self.secret {
            Secret::Null => Vec::new(),
            Secret::Ed25519(sk) => sk.sign(msg).to_bytes().to_vec(),
            Secret::Rsa(sk) => {
                let digest = Sha256::digest(msg);
                sk.sign(Pkcs1v15Sign::new::<Sha256>(), &digest).expect("rsa sign")
            }
        }
    }
}
