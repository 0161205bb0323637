//! 256-bit content hashes.
//!
//! Rows, results, and tree nodes are all identified by a [`Hash256`]
//! computed with BLAKE3. Tree nodes additionally combine child hashes by
//! XOR, so [`Hash256`] carries the XOR plumbing: XOR is commutative and
//! self-inverse, which makes node maintenance under row updates a pair of
//! XORs instead of a re-scan.

use std::fmt;

use crate::codec::CodecError;

pub const HASH_LEN: usize = 32;

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Hash256(pub [u8; HASH_LEN]);

impl Hash256 {
    pub const ZERO: Hash256 = Hash256([0; HASH_LEN]);

    /// BLAKE3 of a byte string.
    pub fn of(data: &[u8]) -> Hash256 {
        Hash256(*blake3::hash(data).as_bytes())
    }

    pub fn is_zero(&self) -> bool {
        *self == Self::ZERO
    }

    pub fn xor(&self, other: &Hash256) -> Hash256 {
        let mut out = self.0;
        for (o, b) in out.iter_mut().zip(other.0.iter()) {
            *o ^= b;
        }
        Hash256(out)
    }

    pub fn xor_assign(&mut self, other: &Hash256) {
        for (o, b) in self.0.iter_mut().zip(other.0.iter()) {
            *o ^= b;
        }
    }

    pub fn as_bytes(&self) -> &[u8; HASH_LEN] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Result<Hash256, CodecError> {
        let v = hex::decode(s).map_err(|_| CodecError::Malformed("hash hex"))?;
        Self::from_slice(&v)
    }

    pub fn from_slice(v: &[u8]) -> Result<Hash256, CodecError> {
        let arr: [u8; HASH_LEN] =
            v.try_into().map_err(|_| CodecError::Malformed("hash length"))?;
        Ok(Hash256(arr))
    }
}

impl fmt::Debug for Hash256 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Hash256({}..)", &self.to_hex()[..12])
    }
}

impl fmt::Display for Hash256 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

/// Incremental hasher for multi-part inputs that are already injectively
/// framed by the caller (see `codec`).
pub struct Hasher(blake3::Hasher);

impl Hasher {
    pub fn new() -> Self {
        Self(blake3::Hasher::new())
    }

    pub fn update(&mut self, data: &[u8]) -> &mut Self {
        self.0.update(data);
        self
    }

    pub fn finish(&self) -> Hash256 {
        Hash256(*self.0.finalize().as_bytes())
    }
}

impl Default for Hasher {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_blake3_vector() {
        // Independent vector from the BLAKE3 reference implementation.
        assert_eq!(
            Hash256::of(b"").to_hex(),
            "af1349b9f5f9a1a6a0404dea36dcc9499bcb25c9adc112b7cc9a93cae41f3262"
        );
    }

    #[test]
    fn xor_is_commutative_and_self_inverse() {
        let a = Hash256::of(b"a");
        let b = Hash256::of(b"b");
        assert_eq!(a.xor(&b), b.xor(&a));
        assert_eq!(a.xor(&b).xor(&b), a);
        assert_eq!(a.xor(&Hash256::ZERO), a);
    }

    #[test]
    fn hex_roundtrip() {
        let h = Hash256::of(b"roundtrip");
        assert_eq!(Hash256::from_hex(&h.to_hex()).unwrap(), h);
        assert!(Hash256::from_hex("zz").is_err());
        assert!(Hash256::from_hex("abcd").is_err());
    }

    #[test]
    fn incremental_hasher_matches_one_shot() {
        let mut h = Hasher::new();
        h.update(b"hello ").update(b"world");
        assert_eq!(h.finish(), Hash256::of(b"hello world"));
    }
}
