//! Per-key registration quota, kept by the counter gnode of each key.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use crate::identity::PubKey;
use crate::idspace::{digest32, GnodeId, Ip};
use crate::registry::{Time, HIBERNATION_SECS};

/// Hostnames one key may hold at once.
pub const MAX_HOSTNAMES_PER_KEY: usize = 256;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CounterEntry {
    pub pubkey: PubKey,
    pub hname_hashes: BTreeSet<Ip>,
    pub last_check_at: Time,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CounterVerdict {
    Ok {
        count: usize,
    },
    OverQuota,
    /// Update check for a key or hostname this counter does not know.
    Inactive,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CounterDb {
    pub entries: BTreeMap<Vec<u8>, CounterEntry>,
    pub owner_gnode: GnodeId,
}

impl CounterDb {
    pub fn new(owner_gnode: GnodeId) -> Self {
        CounterDb { entries: BTreeMap::new(), owner_gnode }
    }

    pub fn get(&self, pk: &PubKey) -> Option<&CounterEntry> {
        self.entries.get(pk.as_bytes())
    }

    pub fn count(&self, pk: &PubKey) -> usize {
        self.get(pk).map_or(0, |e| e.hname_hashes.len())
    }

    /// Registration check: counts `hname_hash` against the key's quota.
    /// Never mutates on `OverQuota`.
    pub fn check_request(&mut self, pk: &PubKey, hname_hash: Ip, now: Time) -> CounterVerdict {
        let entry = self.entries.entry(pk.as_bytes().to_vec()).or_insert_with(|| CounterEntry {
            pubkey: pk.clone(),
            hname_hashes: BTreeSet::new(),
            last_check_at: now,
        });
        if !entry.hname_hashes.contains(&hname_hash) {
            if entry.hname_hashes.len() >= MAX_HOSTNAMES_PER_KEY {
                return CounterVerdict::OverQuota;
            }
            entry.hname_hashes.insert(hname_hash);
        }
        entry.last_check_at = entry.last_check_at.max(now);
        CounterVerdict::Ok { count: entry.hname_hashes.len() }
    }

    /// Update check: the key must still be active and already count the name.
    pub fn confirm(&mut self, pk: &PubKey, hname_hash: Ip, now: Time) -> CounterVerdict {
        match self.entries.get_mut(pk.as_bytes()) {
            Some(e) if e.hname_hashes.contains(&hname_hash) => {
                e.last_check_at = e.last_check_at.max(now);
                CounterVerdict::Ok { count: e.hname_hashes.len() }
            }
            _ => CounterVerdict::Inactive,
        }
    }

    pub fn install(&mut self, entry: CounterEntry) {
        self.entries.insert(entry.pubkey.as_bytes().to_vec(), entry);
    }

    /// Removes keys that went unchecked for the hibernation window.
    pub fn counter_expire_sweep(&mut self, now: Time) -> Vec<PubKey> {
        let mut out = Vec::new();
        self.entries.retain(|_, e| {
            let keep = now.saturating_sub(e.last_check_at) < HIBERNATION_SECS;
            if !keep {
                out.push(e.pubkey.clone());
            }
            keep
        });
        out
    }

    /// Tab-separated: key digest, count, last check time, counted hashes.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for e in self.entries.values() {
            let hashes: Vec<String> = e.hname_hashes.iter().map(|h| format!("{:08x}", h.0)).collect();
            let _ = writeln!(
                out,
                "{:08x}\t{}\t{}\t{}",
                digest32(e.pubkey.as_bytes()).0,
                e.hname_hashes.len(),
                e.last_check_at,
                hashes.join(",")
            );
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

    #[test]
    fn quota_boundary() {
        let mut db = CounterDb::new(GnodeId::new(0));
        let k = key(1);
        assert_eq!(db.check_request(&k, Ip(0), 0), CounterVerdict::Ok { count: 1 });
        for i in 1..256 {
            assert_eq!(db.check_request(&k, Ip(i), 0), CounterVerdict::Ok { count: i as usize + 1 });
        }
        let before = db.clone();
        assert_eq!(db.check_request(&k, Ip(256), 5), CounterVerdict::OverQuota);
        assert_eq!(db, before);
        // already counted hash stays fine and refreshes
        assert_eq!(db.check_request(&k, Ip(3), 7), CounterVerdict::Ok { count: 256 });
        assert_eq!(db.get(&k).unwrap().last_check_at, 7);
        // quota is per key
        assert_eq!(db.check_request(&key(2), Ip(256), 8), CounterVerdict::Ok { count: 1 });
    }

    #[test]
    fn keepalive() {
        let mut db = CounterDb::new(GnodeId::new(0));
        let k = key(1);
        db.check_request(&k, Ip(1), 0);
        assert_eq!(db.confirm(&k, Ip(2), 10), CounterVerdict::Inactive);
        assert_eq!(db.confirm(&key(9), Ip(1), 10), CounterVerdict::Inactive);
        // an update's check refreshes the window
        assert_eq!(db.confirm(&k, Ip(1), 86_400), CounterVerdict::Ok { count: 1 });
        assert!(db.counter_expire_sweep(HIBERNATION_SECS).is_empty());
        assert_eq!(db.counter_expire_sweep(86_400 + HIBERNATION_SECS), vec![k.clone()]);
        assert!(db.entries.is_empty());
        assert!(db.counter_expire_sweep(0).is_empty());
        // lapsed key starts again from zero
        assert_eq!(db.check_request(&k, Ip(5), 0), CounterVerdict::Ok { count: 1 });
    }

    #[test]
    fn dump_line() {
        let mut db = CounterDb::new(GnodeId::new(0));
        let k = key(1);
        db.check_request(&k, Ip(1), 42);
        assert_eq!(db.dump(), format!("{:08x}\t1\t42\t00000001\n", digest32(k.as_bytes()).0));
    }

    proptest! {
        #[test]
        fn never_exceeds_quota(hashes in proptest::collection::vec(0u32..300, 0..700)) {
            let mut db = CounterDb::new(GnodeId::new(0));
            let k = key(1);
            let mut seen = BTreeSet::new();
            for h in hashes {
                let before = db.clone();
                match db.check_request(&k, Ip(h), 0) {
                    CounterVerdict::Ok { count } => {
                        seen.insert(h);
                        prop_assert_eq!(count, seen.len());
                    }
                    CounterVerdict::OverQuota => {
                        prop_assert_eq!(seen.len(), 256);
                        prop_assert!(!seen.contains(&h));
                        prop_assert_eq!(&db, &before);
                    }
                    CounterVerdict::Inactive => unreachable!(),
                }
                prop_assert!(db.count(&k) <= MAX_HOSTNAMES_PER_KEY);
            }
        }
    }
}
