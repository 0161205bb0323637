//! Client-side submission and vote aggregation.
//!
//! Clients never trust a single replica. Every replica votes on every log
//! slot with a signed envelope; the aggregator groups votes by their
//! (status, result hash, touched roots) key and accepts an answer once a
//! strict majority of the full replica set agrees. Everything outside the
//! majority is flagged with an alert naming the slot and the dissenters.
//!
//! Including the touched partition roots in the vote key is what catches
//! silent state divergence at the very transaction where it first happens:
//! two replicas can return the same result bytes while their states have
//! already drifted apart. The `ResultOnly` mode exists to demonstrate that
//! weaker voting misses exactly this case.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use crate::crypto::{Keypair, PublicKey};
use crate::hash::Hash256;
use crate::logsvc::{LogBackend, Payload, SignedRequest};
use crate::replica::{ResultEnvelope, SlotResult, SlotStatus};
use crate::ReplicaId;

/// Signs and submits requests for one client identity, tracking the
/// sequence number the replicas will demand.
pub struct ClientAgent {
    id: String,
    keypair: Arc<Keypair>,
    next_seq: AtomicU64,
    log: Arc<dyn LogBackend>,
}

impl ClientAgent {
    pub fn new(id: impl Into<String>, keypair: Arc<Keypair>, log: Arc<dyn LogBackend>) -> Self {
        ClientAgent { id: id.into(), keypair, next_seq: AtomicU64::new(1), log }
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn public_key(&self) -> &PublicKey {
        self.keypair.public()
    }

    /// Build a signed request consuming the next sequence number.
    pub fn make_request(&self, proc: &str, args: Vec<Vec<u8>>) -> SignedRequest {
        let seq = self.next_seq.fetch_add(1, Ordering::SeqCst);
        let region = SignedRequest::signed_region(&self.id, seq, proc, &args);
        SignedRequest {
            client: self.id.clone(),
            seq,
            proc: proc.into(),
            args,
            signature: self.keypair.sign(&region),
        }
    }

    /// Sign and append; returns the assigned log index.
    pub fn submit(&self, proc: &str, args: Vec<Vec<u8>>) -> u64 {
        self.log.append(Payload::Tx(self.make_request(proc, args)))
    }

    /// Append a request built elsewhere (crafted, replayed, or tampered;
    /// the replicas are the ones that must hold the line).
    pub fn submit_raw(&self, req: SignedRequest) -> u64 {
        self.log.append(Payload::Tx(req))
    }
}

/// What one envelope votes for. Two honest replicas produce equal keys.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct VoteKey {
    pub status: SlotStatus,
    pub result_hash: Hash256,
    pub roots: Vec<(String, u32, Hash256)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VoteMode {
    /// Vote on result hashes only. Ablation: misses write-path divergence
    /// that does not change results.
    ResultOnly,
    /// Vote on result hashes plus touched partition roots.
    ResultAndRoots,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Verdict {
    Pending,
    Decided(VoteKey),
    /// Every replica voted and no key reached a strict majority.
    NoMajority,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum AlertReason {
    /// Different result bytes or completion status than the majority.
    ResultMismatch,
    /// Same result, different state roots: silent corruption or
    /// nondeterminism made visible by the write path.
    StateMismatch,
    /// One replica, two contradictory signed votes for the same slot.
    Equivocation,
    /// Envelope signature failed or came from an unknown replica.
    InvalidSignature,
}

impl AlertReason {
    pub fn name(self) -> &'static str {
        match self {
            AlertReason::ResultMismatch => "result-mismatch",
            AlertReason::StateMismatch => "state-mismatch",
            AlertReason::Equivocation => "equivocation",
            AlertReason::InvalidSignature => "invalid-signature",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Alert {
    pub index: u64,
    pub reason: AlertReason,
    /// Replicas on the wrong side of the vote (all voters when no majority
    /// exists to define a right side).
    pub divergent: Vec<ReplicaId>,
    pub decided: Option<VoteKey>,
}

#[derive(Default)]
struct SlotVotes {
    voted: BTreeMap<ReplicaId, VoteKey>,
    counts: BTreeMap<VoteKey, BTreeSet<ReplicaId>>,
    leader_result: Option<Vec<u8>>,
    verdict: Verdict,
    flagged: BTreeSet<ReplicaId>,
}

impl Default for Verdict {
    fn default() -> Self {
        Verdict::Pending
    }
}

pub struct Aggregator {
    keys: BTreeMap<ReplicaId, PublicKey>,
    leader: ReplicaId,
    mode: VoteMode,
    slots: Mutex<BTreeMap<u64, SlotVotes>>,
    decided_cv: Condvar,
    alerts: Mutex<Vec<Alert>>,
}

impl Aggregator {
    pub fn new(keys: BTreeMap<ReplicaId, PublicKey>, leader: ReplicaId, mode: VoteMode) -> Self {
        Aggregator {
            keys,
            leader,
            mode,
            slots: Mutex::new(BTreeMap::new()),
            decided_cv: Condvar::new(),
            alerts: Mutex::new(Vec::new()),
        }
    }

    pub fn replica_count(&self) -> usize {
        self.keys.len()
    }

    fn majority(&self) -> usize {
        self.keys.len() / 2 + 1
    }

    /// Feed one envelope into the vote. Replayed envelopes are recovery
    /// noise and dropped; invalid signatures are alerts, not votes.
    pub fn ingest(&self, env: &ResultEnvelope) {
        if env.replayed {
            return;
        }
        let valid = self.keys.get(&env.replica).is_some_and(|key| env.verify(key));
        if !valid {
            self.push_alert(Alert {
                index: env.index,
                reason: AlertReason::InvalidSignature,
                divergent: vec![env.replica],
                decided: None,
            });
            return;
        }

        let key = VoteKey {
            status: env.status,
            result_hash: env.result_hash,
            roots: match self.mode {
                VoteMode::ResultAndRoots => env.roots.clone(),
                VoteMode::ResultOnly => Vec::new(),
            },
        };

        let mut slots = self.slots.lock().expect("aggregator slots");
        let slot = slots.entry(env.index).or_default();

        if let Some(prior) = slot.voted.get(&env.replica) {
            if *prior != key && slot.flagged.insert(env.replica) {
                drop(slots);
                self.push_alert(Alert {
                    index: env.index,
                    reason: AlertReason::Equivocation,
                    divergent: vec![env.replica],
                    decided: None,
                });
            }
            return;
        }
        slot.voted.insert(env.replica, key.clone());
        slot.counts.entry(key.clone()).or_default().insert(env.replica);
        if env.replica == self.leader {
            if let Some(full) = &env.full_result {
                // The hash binds the attachment to the signed vote.
                if Hash256::of(full) == env.result_hash {
                    slot.leader_result = Some(full.clone());
                }
            }
        }

        let alerts = self.evaluate(env.index, slot);
        let notify = !matches!(slot.verdict, Verdict::Pending);
        drop(slots);
        if notify {
            self.decided_cv.notify_all();
        }
        for a in alerts {
            self.push_alert(a);
        }
    }

    /// Re-derive the verdict for a slot after a new vote and collect any
    /// newly discovered divergence.
    fn evaluate(&self, index: u64, slot: &mut SlotVotes) -> Vec<Alert> {
        let majority = self.majority();
        let mut alerts = Vec::new();

        if let Verdict::Decided(decided) = &slot.verdict {
            // Late wrong votes still get flagged.
            let decided = decided.clone();
            for (replica, key) in &slot.voted {
                if *key != decided && slot.flagged.insert(*replica) {
                    alerts.push(Alert {
                        index,
                        reason: mismatch_reason(key, &decided),
                        divergent: vec![*replica],
                        decided: Some(decided.clone()),
                    });
                }
            }
            return alerts;
        }

        if let Some((winner, _)) =
            slot.counts.iter().find(|(_, voters)| voters.len() >= majority)
        {
            let winner = winner.clone();
            slot.verdict = Verdict::Decided(winner.clone());
            for (replica, key) in &slot.voted {
                if *key != winner && slot.flagged.insert(*replica) {
                    alerts.push(Alert {
                        index,
                        reason: mismatch_reason(key, &winner),
                        divergent: vec![*replica],
                        decided: Some(winner.clone()),
                    });
                }
            }
            return alerts;
        }

        // No majority yet. Once every replica has spoken (or the remaining
        // voters cannot tip any key over the line) the slot is hung: that
        // is the signature of nondeterminism or mass corruption. A hung
        // slot has no right side, so every replica is suspect, and the
        // verdict transition fires the alert exactly once.
        if matches!(slot.verdict, Verdict::NoMajority) {
            return alerts;
        }
        let voted = slot.voted.len();
        let best = slot.counts.values().map(BTreeSet::len).max().unwrap_or(0);
        let outstanding = self.keys.len() - voted;
        if voted == self.keys.len() || best + outstanding < majority {
            slot.verdict = Verdict::NoMajority;
            let divergent: Vec<ReplicaId> = self.keys.keys().copied().collect();
            let statuses_agree = {
                let mut it = slot.voted.values();
                let first = it.next().expect("at least one vote");
                it.all(|k| k.status == first.status && k.result_hash == first.result_hash)
            };
            for r in &divergent {
                slot.flagged.insert(*r);
            }
            alerts.push(Alert {
                index,
                reason: if statuses_agree {
                    AlertReason::StateMismatch
                } else {
                    AlertReason::ResultMismatch
                },
                divergent,
                decided: None,
            });
        }
        alerts
    }

    fn push_alert(&self, alert: Alert) {
        self.alerts.lock().expect("aggregator alerts").push(alert);
    }

    pub fn verdict(&self, index: u64) -> Verdict {
        self.slots
            .lock()
            .expect("aggregator slots")
            .get(&index)
            .map(|s| s.verdict.clone())
            .unwrap_or(Verdict::Pending)
    }

    /// Block until the slot leaves `Pending` or the timeout passes.
    pub fn wait_decided(&self, index: u64, timeout: Duration) -> Verdict {
        let deadline = Instant::now() + timeout;
        let mut slots = self.slots.lock().expect("aggregator slots");
        loop {
            let verdict =
                slots.get(&index).map(|s| s.verdict.clone()).unwrap_or(Verdict::Pending);
            if verdict != Verdict::Pending {
                return verdict;
            }
            let now = Instant::now();
            if now >= deadline {
                return Verdict::Pending;
            }
            let (guard, _) = self
                .decided_cv
                .wait_timeout(slots, deadline - now)
                .expect("aggregator wait");
            slots = guard;
        }
    }

    /// The decided slot's full result, if the leader's attachment matches
    /// the majority hash. `None` means fetch it from another replica.
    pub fn result_of(&self, index: u64) -> Option<SlotResult> {
        let slots = self.slots.lock().expect("aggregator slots");
        let slot = slots.get(&index)?;
        let Verdict::Decided(key) = &slot.verdict else {
            return None;
        };
        let full = slot.leader_result.as_ref()?;
        if Hash256::of(full) != key.result_hash {
            return None;
        }
        SlotResult::decode(full).ok()
    }

    pub fn flagged(&self, index: u64) -> BTreeSet<ReplicaId> {
        self.slots
            .lock()
            .expect("aggregator slots")
            .get(&index)
            .map(|s| s.flagged.clone())
            .unwrap_or_default()
    }

    pub fn alerts(&self) -> Vec<Alert> {
        self.alerts.lock().expect("aggregator alerts").clone()
    }

    pub fn alerts_for(&self, index: u64) -> Vec<Alert> {
        self.alerts().into_iter().filter(|a| a.index == index).collect()
    }

    /// Replicas flagged anywhere in `[from, to]`.
    pub fn flagged_in(&self, from: u64, to: u64) -> BTreeSet<ReplicaId> {
        let slots = self.slots.lock().expect("aggregator slots");
        slots
            .range(from..=to)
            .flat_map(|(_, s)| s.flagged.iter().copied())
            .collect()
    }
}

fn mismatch_reason(vote: &VoteKey, decided: &VoteKey) -> AlertReason {
    if vote.status == decided.status && vote.result_hash == decided.result_hash {
        AlertReason::StateMismatch
    } else {
        AlertReason::ResultMismatch
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::Scheme;
    use crate::logsvc::InProcessLog;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn keyring(n: u32) -> (Vec<Arc<Keypair>>, BTreeMap<ReplicaId, PublicKey>) {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let pairs: Vec<Arc<Keypair>> =
            (0..n).map(|_| Arc::new(Keypair::generate(Scheme::Ed25519, &mut rng))).collect();
        let keys = pairs
            .iter()
            .enumerate()
            .map(|(i, kp)| (i as ReplicaId, kp.public().clone()))
            .collect();
        (pairs, keys)
    }

    fn envelope(
        kp: &Keypair,
        replica: ReplicaId,
        index: u64,
        result: &SlotResult,
        roots: Vec<(String, u32, Hash256)>,
    ) -> ResultEnvelope {
        let status = result.status();
        let result_hash = result.result_hash();
        let region =
            ResultEnvelope::signed_region(replica, index, status, result_hash, &roots);
        ResultEnvelope {
            replica,
            index,
            status,
            result_hash,
            roots,
            replayed: false,
            full_result: (replica == 0).then(|| result.encode()),
            signature: kp.sign(&region),
        }
    }

    fn root(table: &str, p: u32, seed: &str) -> (String, u32, Hash256) {
        (table.into(), p, Hash256::of(seed.as_bytes()))
    }

    #[test]
    fn majority_decides_and_minority_is_flagged() {
        let (pairs, keys) = keyring(3);
        let agg = Aggregator::new(keys, 0, VoteMode::ResultAndRoots);
        let good = SlotResult::Ok(b"fine".to_vec());
        let bad = SlotResult::Ok(b"corrupt".to_vec());
        let roots = vec![root("kv", 0, "r0")];

        agg.ingest(&envelope(&pairs[0], 0, 1, &good, roots.clone()));
        assert_eq!(agg.verdict(1), Verdict::Pending);
        agg.ingest(&envelope(&pairs[2], 2, 1, &bad, roots.clone()));
        assert_eq!(agg.verdict(1), Verdict::Pending);
        agg.ingest(&envelope(&pairs[1], 1, 1, &good, roots.clone()));

        let Verdict::Decided(key) = agg.verdict(1) else { panic!("majority reached") };
        assert_eq!(key.result_hash, good.result_hash());
        assert_eq!(agg.flagged(1), BTreeSet::from([2]));
        let alerts = agg.alerts_for(1);
        assert_eq!(alerts.len(), 1);
        assert_eq!(alerts[0].reason, AlertReason::ResultMismatch);
        assert_eq!(alerts[0].divergent, vec![2]);
        assert_eq!(agg.result_of(1), Some(good));
    }

    #[test]
    fn root_divergence_with_equal_results_is_a_state_mismatch() {
        let (pairs, keys) = keyring(3);
        let agg = Aggregator::new(keys.clone(), 0, VoteMode::ResultAndRoots);
        let result = SlotResult::Ok(b"same".to_vec());
        let honest = vec![root("kv", 0, "honest")];
        let drifted = vec![root("kv", 0, "drifted")];

        agg.ingest(&envelope(&pairs[0], 0, 5, &result, honest.clone()));
        agg.ingest(&envelope(&pairs[1], 1, 5, &result, honest.clone()));
        agg.ingest(&envelope(&pairs[2], 2, 5, &result, drifted.clone()));

        assert!(matches!(agg.verdict(5), Verdict::Decided(_)));
        let alerts = agg.alerts_for(5);
        assert_eq!(alerts.len(), 1);
        assert_eq!(alerts[0].reason, AlertReason::StateMismatch);
        assert_eq!(alerts[0].divergent, vec![2]);

        // Ablation: voting on results alone cannot see it.
        let weak = Aggregator::new(keys, 0, VoteMode::ResultOnly);
        weak.ingest(&envelope(&pairs[0], 0, 5, &result, honest.clone()));
        weak.ingest(&envelope(&pairs[1], 1, 5, &result, honest));
        weak.ingest(&envelope(&pairs[2], 2, 5, &result, drifted));
        assert!(matches!(weak.verdict(5), Verdict::Decided(_)));
        assert!(weak.alerts_for(5).is_empty());
        assert!(weak.flagged(5).is_empty());
    }

    #[test]
    fn all_disagreeing_roots_yield_no_majority() {
        let (pairs, keys) = keyring(3);
        let agg = Aggregator::new(keys, 0, VoteMode::ResultAndRoots);
        let result = SlotResult::Ok(b"same".to_vec());
        for r in 0..3u32 {
            agg.ingest(&envelope(
                &pairs[r as usize],
                r,
                9,
                &result,
                vec![root("kv", 0, &format!("uniq{r}"))],
            ));
        }
        assert_eq!(agg.verdict(9), Verdict::NoMajority);
        let alerts = agg.alerts_for(9);
        assert_eq!(alerts.len(), 1);
        assert_eq!(alerts[0].reason, AlertReason::StateMismatch);
        assert_eq!(alerts[0].divergent, vec![0, 1, 2]);
        assert!(alerts[0].decided.is_none());
    }

    #[test]
    fn equivocation_is_flagged_and_first_vote_stands() {
        let (pairs, keys) = keyring(3);
        let agg = Aggregator::new(keys, 0, VoteMode::ResultAndRoots);
        let a = SlotResult::Ok(b"a".to_vec());
        let b = SlotResult::Ok(b"b".to_vec());
        let roots = vec![root("kv", 0, "r")];

        agg.ingest(&envelope(&pairs[1], 1, 2, &a, roots.clone()));
        agg.ingest(&envelope(&pairs[1], 1, 2, &b, roots.clone()));
        // Duplicate of the first vote: not equivocation.
        agg.ingest(&envelope(&pairs[1], 1, 2, &a, roots.clone()));

        let alerts = agg.alerts_for(2);
        assert_eq!(alerts.len(), 1);
        assert_eq!(alerts[0].reason, AlertReason::Equivocation);
        assert_eq!(alerts[0].divergent, vec![1]);

        agg.ingest(&envelope(&pairs[0], 0, 2, &a, roots.clone()));
        let Verdict::Decided(key) = agg.verdict(2) else { panic!("first votes decide") };
        assert_eq!(key.result_hash, a.result_hash());
    }

    #[test]
    fn invalid_signatures_never_become_votes() {
        let (pairs, keys) = keyring(3);
        let agg = Aggregator::new(keys, 0, VoteMode::ResultAndRoots);
        let result = SlotResult::Ok(b"x".to_vec());
        let roots = vec![root("kv", 0, "r")];

        // Signed by the wrong replica's key.
        let mut forged = envelope(&pairs[2], 1, 3, &result, roots.clone());
        forged.replica = 1;
        let region = ResultEnvelope::signed_region(1, 3, forged.status, forged.result_hash, &roots);
        forged.signature = pairs[2].sign(&region);
        agg.ingest(&forged);
        // Unknown replica id.
        agg.ingest(&envelope(&pairs[0], 7, 3, &result, roots.clone()));

        assert_eq!(agg.verdict(3), Verdict::Pending);
        let reasons: Vec<AlertReason> = agg.alerts_for(3).iter().map(|a| a.reason).collect();
        assert_eq!(
            reasons,
            vec![AlertReason::InvalidSignature, AlertReason::InvalidSignature]
        );
    }

    #[test]
    fn replayed_envelopes_are_suppressed() {
        let (pairs, keys) = keyring(3);
        let agg = Aggregator::new(keys, 0, VoteMode::ResultAndRoots);
        let result = SlotResult::Ok(b"x".to_vec());
        let mut env = envelope(&pairs[0], 0, 4, &result, vec![]);
        env.replayed = true;
        agg.ingest(&env);
        assert_eq!(agg.verdict(4), Verdict::Pending);
        assert!(agg.alerts().is_empty());
    }

    #[test]
    fn wait_decided_unblocks_when_majority_lands() {
        let (pairs, keys) = keyring(3);
        let agg = Arc::new(Aggregator::new(keys, 0, VoteMode::ResultAndRoots));
        let result = SlotResult::Ok(b"x".to_vec());
        let roots = vec![root("kv", 0, "r")];

        let waiter = {
            let agg = Arc::clone(&agg);
            std::thread::spawn(move || agg.wait_decided(6, Duration::from_secs(5)))
        };
        agg.ingest(&envelope(&pairs[0], 0, 6, &result, roots.clone()));
        std::thread::sleep(Duration::from_millis(10));
        agg.ingest(&envelope(&pairs[1], 1, 6, &result, roots.clone()));
        assert!(matches!(waiter.join().unwrap(), Verdict::Decided(_)));
        assert_eq!(agg.wait_decided(99, Duration::from_millis(10)), Verdict::Pending);
    }

    #[test]
    fn agent_signs_and_sequences_requests() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let kp = Arc::new(Keypair::generate(Scheme::Ed25519, &mut rng));
        let log = Arc::new(InProcessLog::new());
        let agent = ClientAgent::new("c9", Arc::clone(&kp), log.clone());

        let idx1 = agent.submit("read", vec![b"kv".to_vec(), b"k".to_vec()]);
        let idx2 = agent.submit("read", vec![b"kv".to_vec(), b"k".to_vec()]);
        assert_eq!((idx1, idx2), (1, 2));

        for (i, want_seq) in [(1u64, 1u64), (2, 2)] {
            let entry = log.entry(i).unwrap();
            let Payload::Tx(req) = &entry.payload else { panic!("tx entry") };
            assert_eq!(req.seq, want_seq);
            assert!(kp.public().verify(&req.region(), &req.signature));
        }
    }
}
