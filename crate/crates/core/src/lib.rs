//! ANDNA: hostnames that map to addresses without a central authority, with
//! per-service records on top, run inside a seeded network simulator.

pub mod counter;
pub mod identity;
pub mod idspace;
pub mod netsim;
pub mod protocol;
pub mod registry;
pub mod scenario;
pub mod snsd;
pub mod wire;

pub use counter::{CounterDb, CounterEntry, CounterVerdict, MAX_HOSTNAMES_PER_KEY};
pub use identity::{counter_ip, keygen, sign, verify, KeyPair, PubKey, Scheme, Signature};
pub use idspace::{digest32, gnode_of, hash_hostname, ring_distance, rounded_hash_gnode, GnodeId, Hostname, Ip};
pub use netsim::{LogLine, Sim, SimConfig, SimError};
pub use protocol::{Body, Node, OpId, Outcome, Rejection, Resolution, ResolvedRecord};
pub use registry::{AndnaEntry, Placement, QueueSlot, RegistryDb, Time, HIBERNATION_SECS, MAX_ANDNA_QUEUE};
pub use snsd::{
    parse_snsd_nodes, select_record, ServiceRecord, ServiceTable, SnsdChange, SnsdConfigLine, SnsdRecord, Target,
    ZeroRecordPolicy,
};
