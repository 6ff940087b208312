//! Pay-per-query enforcement with rollback protection, and single-use
//! query tickets signed by the service provider.
//!
//! The guard keeps `(counter, threshold, version, spent tickets)` sealed on
//! untrusted storage and binds `version` to a monotonic counter that the host
//! cannot roll back. A query is admitted only if `counter < threshold`; once
//! the answer is computed the new state is written with `version + 1`, the
//! monotonic counter is incremented (the commit point), and only then is the
//! answer released. On load, a sealed state older than the counter is a
//! rollback. A state exactly one ahead is a commit interrupted between the
//! write and the increment, which is completed.

use std::collections::{BTreeSet, HashSet};
use std::sync::Mutex;

use rand::{CryptoRng, Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::codec::Reader;
use crate::crypto::{digest, mac, mac_verify, seal, sign, unseal, verify, Digest, SealKey, SealedBlob, SigningKey, VerifyingKey};
use crate::error::{Error, Result};
use crate::storage::{MemStore, SharedStore, UntrustedStore};

pub const GUARD_STATE_OBJECT: &str = "guard.mlcs";
pub const COUNTER_OBJECT: &str = "counter.mlcc";
pub const COUNTER_MAGIC: &[u8; 4] = b"MLCC";
const STATE_MAGIC: &[u8; 4] = b"MLCG";
const STATE_VERSION: u16 = 1;
/// Threshold meaning "no query limit".
pub const UNLIMITED: u64 = u64::MAX;

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct GuardState {
    pub counter: u64,
    pub threshold: u64,
    pub version: u64,
    /// Digests of redeemed tickets.
    pub spent: BTreeSet<Digest>,
    /// Serialized query archive of the stealing detector, empty if unused.
    pub archive: Vec<u8>,
}

impl GuardState {
    pub fn new(threshold: u64) -> Self {
        GuardState {
            threshold,
            ..Default::default()
        }
    }

    pub fn remaining(&self) -> u64 {
        self.threshold.saturating_sub(self.counter)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = STATE_MAGIC.to_vec();
        out.extend_from_slice(&STATE_VERSION.to_le_bytes());
        out.extend_from_slice(&self.counter.to_le_bytes());
        out.extend_from_slice(&self.threshold.to_le_bytes());
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&(self.spent.len() as u32).to_le_bytes());
        for d in &self.spent {
            out.extend_from_slice(d);
        }
        crate::codec::put_prefixed(&mut out, &self.archive);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "guard state");
        r.expect_magic(STATE_MAGIC)?;
        if r.u16()? != STATE_VERSION {
            return Err(Error::ParseError("unsupported guard state version".into()));
        }
        let counter = r.u64()?;
        let threshold = r.u64()?;
        let version = r.u64()?;
        let n = r.u32()?;
        let mut spent = BTreeSet::new();
        for _ in 0..n {
            spent.insert(r.array::<32>()?);
        }
        let archive = r.prefixed()?.to_vec();
        r.finish()?;
        Ok(GuardState {
            counter,
            threshold,
            version,
            spent,
            archive,
        })
    }
}

/// Simulated hardware monotonic counter: `"MLCC" | value u64 | MAC` stored
/// on the host, MACed under the enclave's seal key. A missing or corrupt
/// file fails closed.
pub struct MonotonicCounter {
    store: SharedStore,
    name: String,
    key: SealKey,
}

impl MonotonicCounter {
    pub fn new(store: SharedStore, name: &str, key: SealKey) -> Self {
        MonotonicCounter {
            store,
            name: name.to_string(),
            key,
        }
    }

    fn encode(&self, value: u64) -> Vec<u8> {
        let mut out = COUNTER_MAGIC.to_vec();
        out.extend_from_slice(&value.to_le_bytes());
        let tag = mac(self.key.key_bytes(), &out);
        out.extend_from_slice(&tag);
        out
    }

    /// Sets the counter to zero; used once when a capsule is installed.
    pub fn initialize(&self) -> Result<()> {
        self.store.write(&self.name, &self.encode(0))
    }

    pub fn read(&self) -> Result<u64> {
        let bytes = self
            .store
            .read(&self.name)
            .map_err(|e| Error::StorageUnavailable(e.to_string()))?
            .ok_or_else(|| Error::StorageUnavailable(format!("monotonic counter {} missing", self.name)))?;
        if bytes.len() != 4 + 8 + 32 || &bytes[..4] != COUNTER_MAGIC {
            return Err(Error::StorageUnavailable("monotonic counter file malformed".into()));
        }
        if !mac_verify(self.key.key_bytes(), &bytes[..12], &bytes[12..]) {
            return Err(Error::StorageUnavailable("monotonic counter failed authentication".into()));
        }
        Ok(u64::from_le_bytes(bytes[4..12].try_into().unwrap()))
    }

    /// Returns the new value, always the previous value plus one.
    pub fn increment(&self) -> Result<u64> {
        let next = self
            .read()?
            .checked_add(1)
            .ok_or_else(|| Error::StorageUnavailable("monotonic counter exhausted".into()))?;
        self.store
            .write(&self.name, &self.encode(next))
            .map_err(|e| Error::StorageUnavailable(e.to_string()))?;
        Ok(next)
    }
}

/// Places where the simulated crash harness can cut a commit short.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CrashPoint {
    BeforeStateWrite,
    AfterStateWrite,
    AfterCommit,
}

fn injected(point: CrashPoint) -> Error {
    Error::StorageUnavailable(format!("simulated crash {point:?}"))
}

pub struct Guard {
    store: SharedStore,
    key: SealKey,
    counter: MonotonicCounter,
    lock: Mutex<()>,
}

impl Guard {
    pub fn open(store: SharedStore, key: SealKey) -> Self {
        let counter = MonotonicCounter::new(store.clone(), COUNTER_OBJECT, key.clone());
        Guard {
            store,
            key,
            counter,
            lock: Mutex::new(()),
        }
    }

    /// Writes a fresh state with the given threshold and resets the counter.
    pub fn init<R: RngCore + CryptoRng>(store: SharedStore, key: SealKey, threshold: u64, rng: &mut R) -> Result<Self> {
        let guard = Guard::open(store, key);
        guard.write_state(&GuardState::new(threshold), rng)?;
        guard.counter.initialize()?;
        Ok(guard)
    }

    fn write_state<R: RngCore + CryptoRng>(&self, state: &GuardState, rng: &mut R) -> Result<()> {
        let blob = seal(&self.key, self.key.measurement(), &state.to_bytes(), rng)?;
        self.store
            .write(GUARD_STATE_OBJECT, &blob.to_bytes())
            .map_err(|e| Error::StorageUnavailable(e.to_string()))
    }

    /// Loads and authenticates the current state, completing an interrupted
    /// commit if one is found.
    pub fn load(&self) -> Result<GuardState> {
        let _g = self.lock.lock().unwrap();
        self.load_locked()
    }

    fn load_locked(&self) -> Result<GuardState> {
        let bytes = self
            .store
            .read(GUARD_STATE_OBJECT)
            .map_err(|e| Error::StorageUnavailable(e.to_string()))?
            .ok_or_else(|| Error::StorageUnavailable("guard state missing".into()))?;
        let blob = SealedBlob::from_bytes(&bytes)?;
        let state = GuardState::from_bytes(&unseal(&self.key, self.key.measurement(), &blob)?)?;
        let recorded = self.counter.read()?;
        if state.version < recorded {
            return Err(Error::RollbackDetected {
                presented: state.version,
                recorded,
            });
        }
        if state.version == recorded + 1 {
            self.counter.increment()?;
        } else if state.version != recorded {
            return Err(Error::IntegrityFailure(format!(
                "guard state version {} ahead of counter {recorded}",
                state.version
            )));
        }
        Ok(state)
    }

    /// Admission check; nothing is persisted.
    pub fn check(&self) -> Result<GuardState> {
        let state = self.load()?;
        if state.counter >= state.threshold {
            return Err(Error::QuotaExceeded {
                threshold: state.threshold,
            });
        }
        Ok(state)
    }

    /// Charges one query against `state` (as returned by `check`) and
    /// optionally records a redeemed ticket. Returns once the charge is
    /// durable; the caller may then release the answer.
    pub fn commit<R: RngCore + CryptoRng>(
        &self,
        state: &GuardState,
        ticket: Option<Digest>,
        rng: &mut R,
    ) -> Result<GuardState> {
        self.commit_with_crash(state, ticket, rng, None)
    }

    pub fn commit_with_crash<R: RngCore + CryptoRng>(
        &self,
        state: &GuardState,
        ticket: Option<Digest>,
        rng: &mut R,
        crash: Option<CrashPoint>,
    ) -> Result<GuardState> {
        self.persist_with_crash(state, charged(state, ticket)?, rng, crash)
    }

    /// Replaces the admitted state with `next` (its version is assigned
    /// here) and advances the monotonic counter.
    pub fn persist<R: RngCore + CryptoRng>(&self, admitted: &GuardState, next: GuardState, rng: &mut R) -> Result<GuardState> {
        self.persist_with_crash(admitted, next, rng, None)
    }

    pub fn persist_with_crash<R: RngCore + CryptoRng>(
        &self,
        admitted: &GuardState,
        mut next: GuardState,
        rng: &mut R,
        crash: Option<CrashPoint>,
    ) -> Result<GuardState> {
        let _g = self.lock.lock().unwrap();
        let current = self.load_locked()?;
        if current.version != admitted.version {
            return Err(Error::IntegrityFailure("guard state changed since admission".into()));
        }
        next.version = current.version + 1;
        if crash == Some(CrashPoint::BeforeStateWrite) {
            return Err(injected(CrashPoint::BeforeStateWrite));
        }
        self.write_state(&next, rng)?;
        if crash == Some(CrashPoint::AfterStateWrite) {
            return Err(injected(CrashPoint::AfterStateWrite));
        }
        self.counter.increment()?;
        if crash == Some(CrashPoint::AfterCommit) {
            return Err(injected(CrashPoint::AfterCommit));
        }
        Ok(next)
    }

    pub fn check_and_increment<R: RngCore + CryptoRng>(&self, rng: &mut R) -> Result<GuardState> {
        let state = self.check()?;
        self.commit(&state, None, rng)
    }

    /// Ticket-mode admission: the ticket must be valid for `query` and not
    /// yet spent. The query threshold does not apply.
    pub fn check_ticket(&self, sp: &VerifyingKey, ticket: &QueryTicket, query: &[u8]) -> Result<GuardState> {
        let d = verify_ticket(sp, ticket, query)?;
        let state = self.load()?;
        if state.spent.contains(&d) {
            return Err(Error::TicketReused);
        }
        Ok(state)
    }
}

/// `state` with one more query charged and `ticket` marked spent.
pub fn charged(state: &GuardState, ticket: Option<Digest>) -> Result<GuardState> {
    let mut next = state.clone();
    next.counter += 1;
    if let Some(d) = ticket {
        if !next.spent.insert(d) {
            return Err(Error::TicketReused);
        }
    }
    Ok(next)
}

pub fn guard_check_and_increment<R: RngCore + CryptoRng>(guard: &Guard, rng: &mut R) -> Result<GuardState> {
    guard.check_and_increment(rng)
}

/// SP-signed authorization for one specific query.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QueryTicket {
    pub query_digest: Digest,
    pub sp_signature: Vec<u8>,
}

impl QueryTicket {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = self.query_digest.to_vec();
        out.extend_from_slice(&self.sp_signature);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() != 32 + crate::crypto::SIGNATURE_LEN {
            return Err(Error::ParseError(format!("ticket of {} bytes", bytes.len())));
        }
        Ok(QueryTicket {
            query_digest: bytes[..32].try_into().unwrap(),
            sp_signature: bytes[32..].to_vec(),
        })
    }
}

pub fn issue_ticket(sp: &SigningKey, query: &[u8]) -> QueryTicket {
    let query_digest = digest(query);
    QueryTicket {
        query_digest,
        sp_signature: sign(sp, &query_digest),
    }
}

/// Checks the signature and that the ticket was issued for `query`;
/// returns the digest to mark as spent.
pub fn verify_ticket(sp: &VerifyingKey, ticket: &QueryTicket, query: &[u8]) -> Result<Digest> {
    if !verify(sp, &ticket.query_digest, &ticket.sp_signature) {
        return Err(Error::BadSignature);
    }
    if digest(query) != ticket.query_digest {
        return Err(Error::DigestMismatch);
    }
    Ok(ticket.query_digest)
}

/// Spent-ticket set shared between concurrent redeemers; the first insert
/// of a digest wins.
#[derive(Debug, Default)]
pub struct SpentSet(Mutex<HashSet<Digest>>);

impl SpentSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.0.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn redeem_ticket(sp: &VerifyingKey, ticket: &QueryTicket, query: &[u8], spent: &SpentSet) -> Result<()> {
    let d = verify_ticket(sp, ticket, query)?;
    if !spent.0.lock().unwrap().insert(d) {
        return Err(Error::TicketReused);
    }
    Ok(())
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ScheduleOutcome {
    /// Answers handed to the caller.
    pub released: u64,
    /// Queries charged by a commit whose answer was lost to a crash.
    pub lost: u64,
    pub crashes: u64,
    pub rollbacks_attempted: u64,
    pub rollbacks_detected: u64,
    pub quota_denials: u64,
}

/// Drives a guard with threshold `threshold` on in-memory storage until the
/// quota is exhausted, injecting host restarts, crashes inside the commit
/// and restores of stale sealed state at random.
///
/// Crashes are only injected before the sealed write unless
/// `commit_window_crashes` is set; those later crash points cost the user
/// the query being answered.
pub fn crash_restore_schedule(threshold: u64, seed: u64, commit_window_crashes: bool) -> Result<ScheduleOutcome> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let root = crate::crypto::RootSealKey::generate(&mut rng);
    let key = SealKey::derive(&root, &digest(b"guard-schedule"));
    let store = std::sync::Arc::new(MemStore::new());
    let shared: SharedStore = store.clone();
    let mut guard = Guard::init(shared.clone(), key.clone(), threshold, &mut rng)?;
    let mut out = ScheduleOutcome::default();
    let mut snapshots: Vec<Vec<u8>> = vec![store.read(GUARD_STATE_OBJECT)?.unwrap()];

    let mut steps = 0u64;
    while out.quota_denials < 3 {
        steps += 1;
        if steps > threshold * 50 + 1000 {
            return Err(Error::InvalidArgument("schedule did not terminate".into()));
        }
        match rng.gen_range(0..10) {
            0 => {
                out.crashes += 1;
                guard = Guard::open(shared.clone(), key.clone());
                continue;
            }
            1 if snapshots.len() > 1 => {
                let current = store.read(GUARD_STATE_OBJECT)?.unwrap();
                let stale = snapshots[rng.gen_range(0..snapshots.len() - 1)].clone();
                if stale == current {
                    continue;
                }
                store.write(GUARD_STATE_OBJECT, &stale)?;
                out.rollbacks_attempted += 1;
                match guard.check() {
                    Err(Error::RollbackDetected { .. }) => out.rollbacks_detected += 1,
                    Err(e) => return Err(e),
                    Ok(_) => {}
                }
                store.write(GUARD_STATE_OBJECT, &current)?;
                continue;
            }
            _ => {}
        }
        let state = match guard.check() {
            Ok(s) => s,
            Err(Error::QuotaExceeded { .. }) => {
                out.quota_denials += 1;
                continue;
            }
            Err(e) => return Err(e),
        };
        let crash = match rng.gen_range(0..10) {
            0 => Some(CrashPoint::BeforeStateWrite),
            1 if commit_window_crashes => Some(CrashPoint::AfterStateWrite),
            2 if commit_window_crashes => Some(CrashPoint::AfterCommit),
            _ => None,
        };
        match guard.commit_with_crash(&state, None, &mut rng, crash) {
            Ok(_) => out.released += 1,
            Err(Error::StorageUnavailable(_)) if crash.is_some() => {
                out.crashes += 1;
                if crash != Some(CrashPoint::BeforeStateWrite) {
                    out.lost += 1;
                }
                guard = Guard::open(shared.clone(), key.clone());
            }
            Err(e) => return Err(e),
        }
        snapshots.push(store.read(GUARD_STATE_OBJECT)?.unwrap());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::RootSealKey;
    use std::sync::Arc;

    fn setup(threshold: u64) -> (Arc<MemStore>, SealKey, Guard, ChaCha20Rng) {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let key = SealKey::derive(&RootSealKey::generate(&mut rng), &digest(b"q"));
        let store = Arc::new(MemStore::new());
        let guard = Guard::init(store.clone(), key.clone(), threshold, &mut rng).unwrap();
        (store, key, guard, rng)
    }

    #[test]
    fn threshold_three_allows_three() {
        let (_, _, guard, mut rng) = setup(3);
        for i in 1..=3 {
            assert_eq!(guard.check_and_increment(&mut rng).unwrap().counter, i);
        }
        assert!(matches!(
            guard.check_and_increment(&mut rng),
            Err(Error::QuotaExceeded { threshold: 3 })
        ));
        assert_eq!(guard.load().unwrap().counter, 3);
    }

    #[test]
    fn restoring_old_state_is_detected() {
        let (store, _, guard, mut rng) = setup(10);
        let before = store.read(GUARD_STATE_OBJECT).unwrap().unwrap();
        guard.check_and_increment(&mut rng).unwrap();
        store.write(GUARD_STATE_OBJECT, &before).unwrap();
        assert!(matches!(
            guard.check_and_increment(&mut rng),
            Err(Error::RollbackDetected { presented: 0, recorded: 1 })
        ));
    }

    #[test]
    fn interrupted_commit_is_completed() {
        let (_, _, guard, mut rng) = setup(10);
        let s = guard.check().unwrap();
        assert!(guard.commit_with_crash(&s, None, &mut rng, Some(CrashPoint::AfterStateWrite)).is_err());
        let s = guard.load().unwrap();
        assert_eq!((s.counter, s.version), (1, 1));
        assert_eq!(guard.counter.read().unwrap(), 1);
    }

    #[test]
    fn counter_service() {
        let (store, key, guard, _) = setup(1);
        assert_eq!(guard.counter.read().unwrap(), 0);
        assert_eq!(guard.counter.increment().unwrap(), 1);
        assert_eq!(guard.counter.increment().unwrap(), 2);
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let other_key = SealKey::derive(&RootSealKey::generate(&mut rng), &digest(b"other"));
        let other_store = Arc::new(MemStore::new());
        let other = MonotonicCounter::new(other_store.clone(), COUNTER_OBJECT, other_key.clone());
        other.initialize().unwrap();
        assert_eq!(other.increment().unwrap(), 1);
        assert_eq!(guard.counter.read().unwrap(), 2);
        // A counter file from another capsule does not authenticate.
        store.write(COUNTER_OBJECT, &other_store.read(COUNTER_OBJECT).unwrap().unwrap()).unwrap();
        assert!(matches!(guard.counter.read(), Err(Error::StorageUnavailable(_))));
        store.remove(COUNTER_OBJECT).unwrap();
        let g = Guard::open(store.clone(), key);
        assert!(matches!(g.check(), Err(Error::StorageUnavailable(_))));
    }

    #[test]
    fn state_bytes_roundtrip() {
        let mut s = GuardState::new(1000);
        s.counter = 7;
        s.version = 9;
        s.spent.insert([3; 32]);
        s.archive = vec![1, 2, 3];
        assert_eq!(GuardState::from_bytes(&s.to_bytes()).unwrap(), s);
        assert!(GuardState::from_bytes(&s.to_bytes()[..20]).is_err());
    }

    #[test]
    fn tickets_redeem_once() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let sp = SigningKey::generate(&mut rng);
        let pk = sp.verifying_key();
        let spent = SpentSet::new();
        let t = issue_ticket(&sp, b"query A");
        redeem_ticket(&pk, &t, b"query A", &spent).unwrap();
        assert!(matches!(redeem_ticket(&pk, &t, b"query A", &spent), Err(Error::TicketReused)));
        let t2 = issue_ticket(&sp, b"query A2");
        assert!(matches!(redeem_ticket(&pk, &t2, b"query B", &spent), Err(Error::DigestMismatch)));
        let mut forged = issue_ticket(&sp, b"query C");
        forged.sp_signature[5] ^= 1;
        assert!(matches!(redeem_ticket(&pk, &forged, b"query C", &spent), Err(Error::BadSignature)));
        let other = SigningKey::generate(&mut rng);
        let foreign = issue_ticket(&other, b"query D");
        assert!(matches!(redeem_ticket(&pk, &foreign, b"query D", &spent), Err(Error::BadSignature)));
        assert_eq!(QueryTicket::from_bytes(&t.to_bytes()).unwrap(), t);
    }

    #[test]
    fn concurrent_redeem_first_wins() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let sp = SigningKey::generate(&mut rng);
        let pk = sp.verifying_key();
        let spent = SpentSet::new();
        let tickets: Vec<QueryTicket> = (0..50u32).map(|i| issue_ticket(&sp, &i.to_le_bytes())).collect();
        let wins = std::sync::atomic::AtomicUsize::new(0);
        std::thread::scope(|s| {
            for _ in 0..4 {
                s.spawn(|| {
                    for (i, t) in tickets.iter().enumerate() {
                        if redeem_ticket(&pk, t, &(i as u32).to_le_bytes(), &spent).is_ok() {
                            wins.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                        }
                    }
                });
            }
        });
        assert_eq!(wins.into_inner(), 50);
        assert_eq!(spent.len(), 50);
    }

    #[test]
    fn guard_ticket_mode() {
        let (_, _, guard, mut rng) = setup(UNLIMITED);
        let sp = SigningKey::generate(&mut rng);
        let t = issue_ticket(&sp, b"x");
        let s = guard.check_ticket(&sp.verifying_key(), &t, b"x").unwrap();
        guard.commit(&s, Some(t.query_digest), &mut rng).unwrap();
        assert!(matches!(guard.check_ticket(&sp.verifying_key(), &t, b"x"), Err(Error::TicketReused)));
    }

    #[test]
    fn schedules_never_over_release() {
        for seed in 0..10 {
            let o = crash_restore_schedule(20, seed, false).unwrap();
            assert_eq!(o.released, 20, "{o:?}");
            assert_eq!(o.lost, 0);
            assert_eq!(o.rollbacks_detected, o.rollbacks_attempted);
            let o = crash_restore_schedule(20, seed, true).unwrap();
            assert!(o.released <= 20);
            assert_eq!(o.released + o.lost, 20, "{o:?}");
        }
    }
}
