//! Per-node hostname database.
//!
//! Each entry keeps an ordered queue of registrants for one hostname hash.
//! The head of the queue is the active holder; the others wait and take over,
//! in arrival order, when the head's registration expires. A registration or
//! update keeps a slot alive for [`HIBERNATION_SECS`].

use std::collections::BTreeMap;
use std::fmt::Write as _;

use thiserror::Error;

use crate::identity::PubKey;
use crate::idspace::{GnodeId, Ip};
use crate::snsd::{SnsdRecord, ZeroRecordPolicy};

/// Virtual seconds.
pub type Time = u64;

/// Thirty days.
pub const HIBERNATION_SECS: Time = 30 * 86_400;

/// Queue capacity, head included.
pub const MAX_ANDNA_QUEUE: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum RegistryError {
    #[error("queue already holds 5 registrants")]
    QueueFull,
    #[error("no entry for this hostname")]
    UnknownHostname,
    #[error("key holds no slot for this hostname")]
    UnknownKey,
    #[error("update id {got} already used (count {count})")]
    StaleId { got: u32, count: u32 },
    #[error("update id {got} skips ahead of count {count}")]
    GapId { got: u32, count: u32 },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QueueSlot {
    pub registrant_ip: Ip,
    pub pubkey: PubKey,
    pub registered_at: Time,
    pub last_update_at: Time,
    pub update_count: u32,
}

impl QueueSlot {
    pub fn new(registrant_ip: Ip, pubkey: PubKey, now: Time) -> Self {
        QueueSlot { registrant_ip, pubkey, registered_at: now, last_update_at: now, update_count: 0 }
    }

    pub fn expires_at(&self) -> Time {
        self.last_update_at + HIBERNATION_SECS
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AndnaEntry {
    pub hname_hash: Ip,
    /// Never empty; index 0 is the active registrant.
    pub queue: Vec<QueueSlot>,
    /// Records owned by the head slot.
    pub snsd: Vec<SnsdRecord>,
    pub zero: ZeroRecordPolicy,
}

impl AndnaEntry {
    pub fn new(hname_hash: Ip, head: QueueSlot) -> Self {
        AndnaEntry { hname_hash, queue: vec![head], snsd: Vec::new(), zero: ZeroRecordPolicy::default() }
    }

    pub fn head(&self) -> &QueueSlot {
        &self.queue[0]
    }

    pub fn position_of(&self, pk: &PubKey) -> Option<usize> {
        self.queue.iter().position(|s| &s.pubkey == pk)
    }
}

/// Where a registration landed: 0 is the head.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Placement {
    Head,
    Queued(usize),
}

impl Placement {
    pub fn at(position: usize) -> Self {
        if position == 0 {
            Placement::Head
        } else {
            Placement::Queued(position)
        }
    }

    pub fn position(self) -> usize {
        match self {
            Placement::Head => 0,
            Placement::Queued(p) => p,
        }
    }
}

/// Read-only view of the active registrant.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeadView {
    pub ip: Ip,
    pub last_update_at: Time,
    pub update_count: u32,
}

/// One slot removed by [`RegistryDb::expire_sweep`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Expiry {
    pub hname_hash: Ip,
    pub expired: PubKey,
    /// The new head, when the expired slot was the head and someone waited.
    pub promoted: Option<PubKey>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegistryDb {
    pub entries: BTreeMap<Ip, AndnaEntry>,
    pub owner_gnode: GnodeId,
}

impl RegistryDb {
    pub fn new(owner_gnode: GnodeId) -> Self {
        RegistryDb { entries: BTreeMap::new(), owner_gnode }
    }

    pub fn get(&self, hname_hash: Ip) -> Option<&AndnaEntry> {
        self.entries.get(&hname_hash)
    }

    pub fn get_mut(&mut self, hname_hash: Ip) -> Option<&mut AndnaEntry> {
        self.entries.get_mut(&hname_hash)
    }

    /// Installs (or overwrites) a whole entry, e.g. one fetched from another gnode.
    pub fn install(&mut self, entry: AndnaEntry) {
        self.entries.insert(entry.hname_hash, entry);
    }

    /// Fails only if the key is new and the queue is already full.
    pub fn can_register(&self, hname_hash: Ip, pk: &PubKey) -> Result<(), RegistryError> {
        match self.entries.get(&hname_hash) {
            Some(e) if e.position_of(pk).is_none() && e.queue.len() >= MAX_ANDNA_QUEUE => Err(RegistryError::QueueFull),
            _ => Ok(()),
        }
    }

    pub fn apply_registration(
        &mut self,
        hname_hash: Ip,
        registrant: Ip,
        pk: &PubKey,
        now: Time,
    ) -> Result<Placement, RegistryError> {
        let Some(entry) = self.entries.get_mut(&hname_hash) else {
            self.entries.insert(hname_hash, AndnaEntry::new(hname_hash, QueueSlot::new(registrant, pk.clone(), now)));
            return Ok(Placement::Head);
        };
        if let Some(pos) = entry.position_of(pk) {
            return Ok(Placement::at(pos));
        }
        if entry.queue.len() >= MAX_ANDNA_QUEUE {
            return Err(RegistryError::QueueFull);
        }
        // ordered by (registration time, key) so replicas converge whatever
        // order concurrent registrations reach them in
        let pos = entry.queue.partition_point(|s| (s.registered_at, &s.pubkey) <= (now, pk));
        entry.queue.insert(pos, QueueSlot::new(registrant, pk.clone(), now));
        Ok(Placement::at(pos))
    }

    /// Validates an update without applying it.
    pub fn check_update(&self, hname_hash: Ip, pk: &PubKey, update_id: u32) -> Result<(), RegistryError> {
        let entry = self.entries.get(&hname_hash).ok_or(RegistryError::UnknownHostname)?;
        let slot = &entry.queue[entry.position_of(pk).ok_or(RegistryError::UnknownKey)?];
        let count = slot.update_count;
        if update_id <= count {
            Err(RegistryError::StaleId { got: update_id, count })
        } else if update_id > count + 1 {
            Err(RegistryError::GapId { got: update_id, count })
        } else {
            Ok(())
        }
    }

    pub fn apply_update(
        &mut self,
        hname_hash: Ip,
        pk: &PubKey,
        new_ip: Ip,
        update_id: u32,
        now: Time,
    ) -> Result<(), RegistryError> {
        self.check_update(hname_hash, pk, update_id)?;
        let entry = self.entries.get_mut(&hname_hash).expect("checked");
        let pos = entry.position_of(pk).expect("checked");
        let slot = &mut entry.queue[pos];
        slot.registrant_ip = new_ip;
        slot.last_update_at = now.max(slot.registered_at);
        slot.update_count = update_id;
        Ok(())
    }

    /// Drops every slot idle for at least [`HIBERNATION_SECS`].
    pub fn expire_sweep(&mut self, now: Time) -> Vec<Expiry> {
        let mut out = Vec::new();
        self.entries.retain(|&hash, entry| {
            let old_head = entry.head().pubkey.clone();
            let mut expired = Vec::new();
            entry.queue.retain(|slot| {
                let dead = now.saturating_sub(slot.last_update_at) >= HIBERNATION_SECS;
                if dead {
                    expired.push(slot.pubkey.clone());
                }
                !dead
            });
            if expired.is_empty() {
                return true;
            }
            let head_lost = expired.contains(&old_head);
            if head_lost {
                entry.snsd.clear();
                entry.zero = ZeroRecordPolicy::default();
            }
            for pk in expired {
                let promoted = (pk == old_head).then(|| entry.queue.first().map(|s| s.pubkey.clone())).flatten();
                out.push(Expiry { hname_hash: hash, expired: pk, promoted });
            }
            !entry.queue.is_empty()
        });
        out
    }

    pub fn lookup(&self, hname_hash: Ip) -> Option<HeadView> {
        self.entries.get(&hname_hash).map(|e| {
            let h = e.head();
            HeadView { ip: h.registrant_ip, last_update_at: h.last_update_at, update_count: h.update_count }
        })
    }

    /// Number of SNSD records held by `pk` across this database.
    pub fn snsd_total_for(&self, pk: &PubKey) -> usize {
        self.entries.values().filter(|e| &e.head().pubkey == pk).map(|e| e.snsd.len()).sum()
    }

    /// Tab-separated dump, one line per queue slot:
    /// hash, position, registrant ip, update count, last update time.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for (hash, entry) in &self.entries {
            for (pos, slot) in entry.queue.iter().enumerate() {
                let _ = writeln!(
                    out,
                    "{:08x}\t{}\t{}\t{}\t{}",
                    hash.0, pos, slot.registrant_ip, slot.update_count, slot.last_update_at
                );
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::identity::{KeyPair, Scheme};
    use proptest::prelude::*;

    fn key(i: u64) -> PubKey {
        KeyPair::generate(Scheme::Mac, Some(i)).public().clone()
    }

    const H: Ip = Ip(0x8b38_ae9a);

    fn db() -> RegistryDb {
        RegistryDb::new(GnodeId::new(1))
    }

    #[test]
    fn queue_positions_and_capacity() {
        let mut db = db();
        assert_eq!(db.apply_registration(H, Ip(1), &key(0), 0), Ok(Placement::Head));
        for i in 1..5 {
            assert_eq!(db.apply_registration(H, Ip(i as u32 + 1), &key(i), i), Ok(Placement::Queued(i as usize)));
        }
        assert_eq!(db.apply_registration(H, Ip(9), &key(9), 9), Err(RegistryError::QueueFull));
        assert_eq!(db.can_register(H, &key(9)), Err(RegistryError::QueueFull));
        // known key stays idempotent even when full
        assert_eq!(db.apply_registration(H, Ip(3), &key(2), 50), Ok(Placement::Queued(2)));
        assert_eq!(db.get(H).unwrap().queue[2].registered_at, 2);
        assert_eq!(db.lookup(H).unwrap().ip, Ip(1));
        assert_eq!(db.lookup(Ip(7)), None);
    }

    #[test]
    fn update_ids() {
        let mut db = db();
        db.apply_registration(H, Ip(1), &key(0), 0).unwrap();
        assert_eq!(db.apply_update(H, &key(0), Ip(2), 1, 10), Ok(()));
        assert_eq!(db.lookup(H), Some(HeadView { ip: Ip(2), last_update_at: 10, update_count: 1 }));
        assert_eq!(db.apply_update(H, &key(0), Ip(3), 1, 11), Err(RegistryError::StaleId { got: 1, count: 1 }));
        assert_eq!(db.apply_update(H, &key(0), Ip(3), 3, 11), Err(RegistryError::GapId { got: 3, count: 1 }));
        assert_eq!(db.apply_update(H, &key(5), Ip(3), 1, 11), Err(RegistryError::UnknownKey));
        assert_eq!(db.apply_update(Ip(5), &key(0), Ip(3), 1, 11), Err(RegistryError::UnknownHostname));
        assert_eq!(db.lookup(H).unwrap().ip, Ip(2));
    }

    /// Replays a timeline against the 30-day rule by brute force: a slot is
    /// alive at `t` iff its last refresh is later than `t - 30d`.
    fn alive_at(refreshes: &[Time], t: Time) -> bool {
        let last = refreshes.iter().filter(|&&r| r <= t).max().copied();
        last.is_some_and(|l| t - l < HIBERNATION_SECS)
    }

    #[test]
    fn expiry_boundary() {
        let t = 1000;
        let mut a = db();
        a.apply_registration(H, Ip(1), &key(0), t).unwrap();
        assert!(a.expire_sweep(t + HIBERNATION_SECS - 1).is_empty());
        assert!(alive_at(&[t], t + HIBERNATION_SECS - 1));
        assert_eq!(a.lookup(H).unwrap().ip, Ip(1));
        let gone = a.expire_sweep(t + HIBERNATION_SECS);
        assert!(!alive_at(&[t], t + HIBERNATION_SECS));
        assert_eq!(gone, vec![Expiry { hname_hash: H, expired: key(0), promoted: None }]);
        assert!(a.entries.is_empty());
        assert!(db().expire_sweep(0).is_empty());
    }

    #[test]
    fn promotion_after_head_expiry() {
        let t = 0;
        let mut db = db();
        db.apply_registration(H, Ip(1), &key(0), t).unwrap();
        db.apply_registration(H, Ip(2), &key(1), t + 10).unwrap();
        db.get_mut(H).unwrap().zero.weight = 0;
        let sweep = t + HIBERNATION_SECS;
        assert!(!alive_at(&[t], sweep) && alive_at(&[t + 10], sweep));
        let out = db.expire_sweep(sweep);
        assert_eq!(out, vec![Expiry { hname_hash: H, expired: key(0), promoted: Some(key(1)) }]);
        assert_eq!(db.lookup(H).unwrap().ip, Ip(2));
        assert_eq!(db.get(H).unwrap().zero, ZeroRecordPolicy::default());
    }

    #[test]
    fn dump_format() {
        let mut db = db();
        db.apply_registration(H, Ip::new(1, 2, 3, 4), &key(0), 5).unwrap();
        db.apply_registration(H, Ip::new(5, 6, 7, 8), &key(1), 6).unwrap();
        assert_eq!(db.dump(), "8b38ae9a\t0\t1.2.3.4\t0\t5\n8b38ae9a\t1\t5.6.7.8\t0\t6\n");
    }

    #[derive(Debug, Clone)]
    enum Op {
        Register(u64),
        Update(u64, u32),
        Advance(Time),
    }

    fn op() -> impl Strategy<Value = Op> {
        prop_oneof![
            (0u64..8).prop_map(Op::Register),
            (0u64..8, 0u32..4).prop_map(|(k, d)| Op::Update(k, d)),
            (1u64..20).prop_map(|d| Op::Advance(d * 86_400 / 2)),
        ]
    }

    proptest! {
        #[test]
        fn queue_invariants(ops in proptest::collection::vec(op(), 1..60)) {
            let mut db = db();
            let mut now = 0;
            // live keys by (arrival time, key), tracked independently
            let mut arrivals: Vec<(Time, u64)> = Vec::new();
            for op in ops {
                match op {
                    Op::Register(k) => {
                        let res = db.apply_registration(H, Ip(k as u32), &key(k), now);
                        match res {
                            Ok(_) => if !arrivals.iter().any(|(_, a)| *a == k) {
                                arrivals.push((now, k));
                                arrivals.sort_by_key(|(t, a)| (*t, key(*a)));
                            },
                            Err(e) => prop_assert_eq!(e, RegistryError::QueueFull),
                        }
                    }
                    Op::Update(k, delta) => {
                        let count = db.get(H).and_then(|e| e.position_of(&key(k)).map(|p| e.queue[p].update_count));
                        let res = db.apply_update(H, &key(k), Ip(k as u32), count.unwrap_or(0) + delta, now);
                        if let Some(c) = count {
                            prop_assert_eq!(res.is_ok(), delta == 1);
                            let after = db.get(H).unwrap().queue[db.get(H).unwrap().position_of(&key(k)).unwrap()].update_count;
                            prop_assert_eq!(after, if delta == 1 { c + 1 } else { c });
                        } else {
                            prop_assert!(res.is_err());
                        }
                    }
                    Op::Advance(d) => {
                        now += d;
                        for ex in db.expire_sweep(now) {
                            let k = arrivals.iter().position(|(_, a)| key(*a) == ex.expired).unwrap();
                            arrivals.remove(k);
                        }
                    }
                }
                if let Some(e) = db.get(H) {
                    prop_assert!(!e.queue.is_empty() && e.queue.len() <= MAX_ANDNA_QUEUE);
                    let order: Vec<PubKey> = e.queue.iter().map(|s| s.pubkey.clone()).collect();
                    let expect: Vec<PubKey> = arrivals.iter().map(|(_, a)| key(*a)).collect();
                    prop_assert_eq!(order, expect);
                    for s in &e.queue {
                        prop_assert!(s.last_update_at >= s.registered_at);
                        prop_assert!(now - s.last_update_at < HIBERNATION_SECS || now == 0);
                    }
                } else {
                    prop_assert!(arrivals.is_empty());
                }
                prop_assert_eq!(db.lookup(H), db.lookup(H));
            }
        }
    }
}
