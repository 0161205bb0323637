//! The shared transaction log: the single ordered input every replica
//! consumes.
//!
//! Entries are hash-chained (each carries the hash of its predecessor) so a
//! dumped log can be verified end to end and a tampered tail cannot be
//! spliced in unnoticed. The log stores requests exactly as clients signed
//! them; replicas re-verify signatures themselves, so the log does not have
//! to be trusted for authenticity, only for ordering.
//!
//! Ordering is delegated to a pluggable backend behind [`LogBackend`]
//! (append, read, wait). The in-process backend here is a vector and a
//! condvar; a consensus-backed implementation would slot in at the same
//! boundary.

use std::io::{self, BufRead, Write};
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::codec::{CodecError, Dec, Enc};
use crate::hash::Hash256;
use crate::ReplicaId;

#[derive(Debug, Error)]
pub enum LogError {
    #[error("malformed log line {0}")]
    MalformedLine(usize),
    #[error("hash chain broken at index {0}")]
    ChainBroken(u64),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// A client request exactly as signed: the signature covers client, seq,
/// procedure, and arguments, so nothing in transit (including the log) can
/// alter what the client asked for.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SignedRequest {
    pub client: String,
    pub seq: u64,
    pub proc: String,
    pub args: Vec<Vec<u8>>,
    pub signature: Vec<u8>,
}

impl SignedRequest {
    pub fn signed_region(client: &str, seq: u64, proc: &str, args: &[Vec<u8>]) -> Vec<u8> {
        let mut e = Enc::new();
        e.str(client).u64(seq).str(proc).list(args, |e, a| {
            e.bytes(a);
        });
        e.finish()
    }

    pub fn region(&self) -> Vec<u8> {
        Self::signed_region(&self.client, self.seq, &self.proc, &self.args)
    }

    fn encode(&self, e: &mut Enc) {
        e.str(&self.client).u64(self.seq).str(&self.proc);
        e.list(&self.args, |e, a| {
            e.bytes(a);
        });
        e.bytes(&self.signature);
    }

    fn decode(d: &mut Dec) -> Result<SignedRequest, CodecError> {
        Ok(SignedRequest {
            client: d.str()?,
            seq: d.u64()?,
            proc: d.str()?,
            args: d.list(|d| Ok(d.bytes()?.to_vec()))?,
            signature: d.bytes()?.to_vec(),
        })
    }
}

/// What can occupy a log slot. Control entries are signed by the cluster
/// administrator; replicas verify before acting.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Payload {
    /// An ordinary client transaction.
    Tx(SignedRequest),
    /// State-comparison barrier: every replica snapshots at this slot and
    /// publishes its forest digests.
    CompareStates { admin_sig: Vec<u8> },
    /// Divergence recovery barrier: replicas in `references` keep running,
    /// everyone else pauses at this slot and waits to be repaired.
    SaveSyncState { references: Vec<ReplicaId>, admin_sig: Vec<u8> },
    /// Client key registration/rotation. `key_version` must advance by one
    /// from the stored record so a stale (possibly leaked) key can never be
    /// re-installed by replaying an old entry.
    KeyUpdate {
        client: String,
        public_key: Vec<u8>,
        key_version: u64,
        grants: Vec<String>,
        admin_sig: Vec<u8>,
    },
}

const TAG_TX: u8 = 1;
const TAG_COMPARE: u8 = 2;
const TAG_SYNC: u8 = 3;
const TAG_KEY: u8 = 4;

impl Payload {
    /// Bytes an administrator signs for control entries. Covers everything
    /// except the signature itself; `Tx` entries are client-signed instead.
    pub fn admin_region(&self) -> Option<Vec<u8>> {
        let mut e = Enc::new();
        match self {
            Payload::Tx(_) => return None,
            Payload::CompareStates { .. } => {
                e.u8(TAG_COMPARE);
            }
            Payload::SaveSyncState { references, .. } => {
                e.u8(TAG_SYNC).list(references, |e, r| {
                    e.u32(*r);
                });
            }
            Payload::KeyUpdate { client, public_key, key_version, grants, .. } => {
                e.u8(TAG_KEY).str(client).bytes(public_key).u64(*key_version);
                e.list(grants, |e, g| {
                    e.str(g);
                });
            }
        }
        Some(e.finish())
    }

    fn encode(&self, e: &mut Enc) {
        match self {
            Payload::Tx(req) => {
                e.u8(TAG_TX);
                req.encode(e);
            }
            Payload::CompareStates { admin_sig } => {
                e.u8(TAG_COMPARE).bytes(admin_sig);
            }
            Payload::SaveSyncState { references, admin_sig } => {
                e.u8(TAG_SYNC)
                    .list(references, |e, r| {
                        e.u32(*r);
                    })
                    .bytes(admin_sig);
            }
            Payload::KeyUpdate { client, public_key, key_version, grants, admin_sig } => {
                e.u8(TAG_KEY).str(client).bytes(public_key).u64(*key_version);
                e.list(grants, |e, g| {
                    e.str(g);
                })
                .bytes(admin_sig);
            }
        }
    }

    fn decode(d: &mut Dec) -> Result<Payload, CodecError> {
        Ok(match d.u8()? {
            TAG_TX => Payload::Tx(SignedRequest::decode(d)?),
            TAG_COMPARE => Payload::CompareStates { admin_sig: d.bytes()?.to_vec() },
            TAG_SYNC => Payload::SaveSyncState {
                references: d.list(|d| d.u32())?,
                admin_sig: d.bytes()?.to_vec(),
            },
            TAG_KEY => Payload::KeyUpdate {
                client: d.str()?,
                public_key: d.bytes()?.to_vec(),
                key_version: d.u64()?,
                grants: d.list(|d| d.str())?,
                admin_sig: d.bytes()?.to_vec(),
            },
            _ => return Err(CodecError::Malformed("payload tag")),
        })
    }
}

/// One slot of the log. `index` is 1-based and doubles as the transaction
/// id replicas execute the slot under.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LogEntry {
    pub index: u64,
    pub prev_hash: Hash256,
    pub payload: Payload,
    hash: Hash256,
}

impl LogEntry {
    fn new(index: u64, prev_hash: Hash256, payload: Payload) -> LogEntry {
        let mut entry = LogEntry { index, prev_hash, payload, hash: Hash256::ZERO };
        entry.hash = entry.compute_hash();
        entry
    }

    fn compute_hash(&self) -> Hash256 {
        let mut e = Enc::new();
        e.u64(self.index).bytes(self.prev_hash.as_bytes());
        self.payload.encode(&mut e);
        Hash256::of(&e.finish())
    }

    pub fn hash(&self) -> Hash256 {
        self.hash
    }
}

/// Ordering boundary. Everything above (replicas, clients, recovery) only
/// appends, reads, and waits.
pub trait LogBackend: Send + Sync {
    /// Append and return the assigned index.
    fn append(&self, payload: Payload) -> u64;
    fn entry(&self, index: u64) -> Option<Arc<LogEntry>>;
    /// Number of entries (equals the last index).
    fn len(&self) -> u64;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
    /// Wait until at least `min_len` entries exist or `timeout` passes;
    /// returns the current length either way.
    fn wait_for(&self, min_len: u64, timeout: Duration) -> u64;
}

/// In-process log: a vector behind a mutex, fan-out by condvar.
#[derive(Default)]
pub struct InProcessLog {
    entries: Mutex<Vec<Arc<LogEntry>>>,
    grew: Condvar,
}

impl InProcessLog {
    pub fn new() -> InProcessLog {
        Self::default()
    }

    /// Serialize as text: `index prev_hash payload_hex` per line.
    pub fn dump_to(&self, w: &mut dyn Write) -> io::Result<()> {
        let entries = self.entries.lock().expect("log lock");
        for entry in entries.iter() {
            let mut e = Enc::new();
            entry.payload.encode(&mut e);
            writeln!(
                w,
                "{} {} {}",
                entry.index,
                entry.prev_hash.to_hex(),
                hex::encode(e.finish())
            )?;
        }
        Ok(())
    }

    /// Parse a dump, verifying indexes are dense and the hash chain holds.
    pub fn load_from(r: impl BufRead) -> Result<InProcessLog, LogError> {
        let mut entries: Vec<Arc<LogEntry>> = Vec::new();
        for (lineno, line) in r.lines().enumerate() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let mut parts = line.splitn(3, ' ');
            let (Some(idx), Some(prev), Some(payload)) =
                (parts.next(), parts.next(), parts.next())
            else {
                return Err(LogError::MalformedLine(lineno + 1));
            };
            let index: u64 = idx.parse().map_err(|_| LogError::MalformedLine(lineno + 1))?;
            let prev_hash =
                Hash256::from_hex(prev).map_err(|_| LogError::MalformedLine(lineno + 1))?;
            let payload_bytes =
                hex::decode(payload).map_err(|_| LogError::MalformedLine(lineno + 1))?;
            let mut d = Dec::new(&payload_bytes);
            let payload = Payload::decode(&mut d)?;
            d.done()?;

            let expected_prev = entries.last().map(|e| e.hash()).unwrap_or(Hash256::ZERO);
            if index != entries.len() as u64 + 1 || prev_hash != expected_prev {
                return Err(LogError::ChainBroken(index));
            }
            entries.push(Arc::new(LogEntry::new(index, prev_hash, payload)));
        }
        Ok(InProcessLog { entries: Mutex::new(entries), grew: Condvar::new() })
    }
}

impl LogBackend for InProcessLog {
    fn append(&self, payload: Payload) -> u64 {
        let mut entries = self.entries.lock().expect("log lock");
        let index = entries.len() as u64 + 1;
        let prev_hash = entries.last().map(|e| e.hash()).unwrap_or(Hash256::ZERO);
        entries.push(Arc::new(LogEntry::new(index, prev_hash, payload)));
        self.grew.notify_all();
        index
    }

    fn entry(&self, index: u64) -> Option<Arc<LogEntry>> {
        if index == 0 {
            return None;
        }
        self.entries.lock().expect("log lock").get(index as usize - 1).cloned()
    }

    fn len(&self) -> u64 {
        self.entries.lock().expect("log lock").len() as u64
    }

    fn wait_for(&self, min_len: u64, timeout: Duration) -> u64 {
        let deadline = Instant::now() + timeout;
        let mut entries = self.entries.lock().expect("log lock");
        loop {
            if entries.len() as u64 >= min_len {
                return entries.len() as u64;
            }
            let now = Instant::now();
            if now >= deadline {
                return entries.len() as u64;
            }
            let (guard, _) = self
                .grew
                .wait_timeout(entries, deadline - now)
                .expect("log wait");
            entries = guard;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tx(client: &str, seq: u64) -> Payload {
        Payload::Tx(SignedRequest {
            client: client.into(),
            seq,
            proc: "read".into(),
            args: vec![b"t".to_vec(), b"k".to_vec()],
            signature: b"sig".to_vec(),
        })
    }

    #[test]
    fn append_assigns_dense_indexes_and_chains_hashes() {
        let log = InProcessLog::new();
        assert_eq!(log.append(tx("c1", 1)), 1);
        assert_eq!(log.append(tx("c1", 2)), 2);
        assert_eq!(log.append(Payload::CompareStates { admin_sig: vec![] }), 3);

        let e1 = log.entry(1).unwrap();
        let e2 = log.entry(2).unwrap();
        let e3 = log.entry(3).unwrap();
        assert_eq!(e1.prev_hash, Hash256::ZERO);
        assert_eq!(e2.prev_hash, e1.hash());
        assert_eq!(e3.prev_hash, e2.hash());
        assert_eq!(log.len(), 3);
        assert!(log.entry(0).is_none());
        assert!(log.entry(4).is_none());
    }

    #[test]
    fn dump_load_roundtrip_preserves_everything() {
        let log = InProcessLog::new();
        log.append(tx("c1", 1));
        log.append(Payload::KeyUpdate {
            client: "c2".into(),
            public_key: b"pk".to_vec(),
            key_version: 1,
            grants: vec!["read".into(), "update".into()],
            admin_sig: b"as".to_vec(),
        });
        log.append(Payload::SaveSyncState { references: vec![0, 2], admin_sig: b"s".to_vec() });
        log.append(Payload::CompareStates { admin_sig: b"x".to_vec() });

        let mut buf = Vec::new();
        log.dump_to(&mut buf).unwrap();
        let loaded = InProcessLog::load_from(buf.as_slice()).unwrap();
        assert_eq!(loaded.len(), log.len());
        for i in 1..=log.len() {
            let a = log.entry(i).unwrap();
            let b = loaded.entry(i).unwrap();
            assert_eq!(a.payload, b.payload);
            assert_eq!(a.hash(), b.hash());
        }
    }

    #[test]
    fn tampered_dump_is_rejected() {
        let log = InProcessLog::new();
        log.append(tx("c1", 1));
        log.append(tx("c1", 2));
        let mut buf = Vec::new();
        log.dump_to(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();

        // Swap the two lines: chain check must fail.
        let mut lines: Vec<&str> = text.lines().collect();
        lines.swap(0, 1);
        let swapped = lines.join("\n");
        assert!(matches!(
            InProcessLog::load_from(swapped.as_bytes()),
            Err(LogError::ChainBroken(_))
        ));

        // Flip a payload byte: the stored prev hash of the next entry no
        // longer matches.
        let mut mangled = text.clone();
        let flip_at = mangled.len() - 3;
        let original = mangled.as_bytes()[flip_at];
        let replacement = if original == b'0' { '1' } else { '0' };
        mangled.replace_range(flip_at..flip_at + 1, &replacement.to_string());
        // Note: flipping the LAST entry's payload cannot break the chain
        // (nothing hashes over it), which is exactly why verification alone
        // cannot protect the tail; replicas verify request signatures too.
        let _ = InProcessLog::load_from(mangled.as_bytes());

        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        let first = lines[0].clone();
        let flip_at = first.len() - 3;
        let original = first.as_bytes()[flip_at];
        let replacement = if original == b'0' { b'1' } else { b'0' };
        let mut bytes = first.into_bytes();
        bytes[flip_at] = replacement;
        lines[0] = String::from_utf8(bytes).unwrap();
        let mangled_first = lines.join("\n");
        assert!(InProcessLog::load_from(mangled_first.as_bytes()).is_err());
    }

    #[test]
    fn wait_for_unblocks_on_append() {
        let log = Arc::new(InProcessLog::new());
        let waiter = {
            let log = Arc::clone(&log);
            std::thread::spawn(move || log.wait_for(1, Duration::from_secs(5)))
        };
        std::thread::sleep(Duration::from_millis(10));
        log.append(tx("c", 1));
        assert_eq!(waiter.join().unwrap(), 1);

        // Timeout path returns current length.
        assert_eq!(log.wait_for(10, Duration::from_millis(5)), 1);
    }

    #[test]
    fn signed_region_is_stable_and_binding() {
        let a = SignedRequest::signed_region("c", 1, "read", &[b"x".to_vec()]);
        let b = SignedRequest::signed_region("c", 1, "read", &[b"x".to_vec()]);
        assert_eq!(a, b);
        assert_ne!(a, SignedRequest::signed_region("c", 2, "read", &[b"x".to_vec()]));
        assert_ne!(a, SignedRequest::signed_region("c", 1, "reaD", &[b"x".to_vec()]));
        assert_ne!(a, SignedRequest::signed_region("d", 1, "read", &[b"x".to_vec()]));
    }

    #[test]
    fn admin_region_excludes_signature_and_tx_has_none() {
        let p1 = Payload::CompareStates { admin_sig: b"one".to_vec() };
        let p2 = Payload::CompareStates { admin_sig: b"two".to_vec() };
        assert_eq!(p1.admin_region(), p2.admin_region());
        assert!(tx("c", 1).admin_region().is_none());

        let k1 = Payload::KeyUpdate {
            client: "c".into(),
            public_key: b"pk".to_vec(),
            key_version: 1,
            grants: vec![],
            admin_sig: vec![],
        };
        let k2 = Payload::KeyUpdate {
            client: "c".into(),
            public_key: b"pk".to_vec(),
            key_version: 2,
            grants: vec![],
            admin_sig: vec![],
        };
        assert_ne!(k1.admin_region(), k2.admin_region(), "key version is signed");
    }
}
