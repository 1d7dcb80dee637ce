//! Messages and per-node handlers.
//!
//! A [`Node`] never blocks. Every handler takes the node's state, one
//! incoming message and a [`Ctx`] (clock, membership view, shared rng) and
//! leaves behind outgoing messages, timers, log lines and finished client
//! operations in the context. Multi-step flows park their continuation in
//! `Node::pending` under the id of the sub-request they wait on.
//!
//! Registration at a serving node `y`:
//!
//! 1. reject unless `y` sits in the rounded hash gnode of the name;
//! 2. reject a bad signature;
//! 3. if `y` has no entry yet, ask the previously nearest gnode (double
//!    check); an older holder with a different key blocks the request and its
//!    entry moves over instead;
//! 4. ask the counter gnode of the key to count the name;
//! 5. commit locally and forward the signed request to every gnode peer.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::counter::{CounterDb, CounterEntry, CounterVerdict};
use crate::identity::{self, counter_ip, KeyPair, PubKey, Signature};
use crate::idspace::{gnode_of, rounded_hash_gnode, GnodeId, Hostname, Ip};
use crate::netsim::LogLine;
use crate::registry::{AndnaEntry, Placement, RegistryDb, RegistryError, Time, HIBERNATION_SECS};
use crate::snsd::{
    self, answer_challenge, resolve_service, verify_challenge_response, ChallengeReq, ChallengeVerdict, ServiceRecord,
    SnsdChange, SnsdError, SnsdRecord, Target, NONCE_LEN,
};
use crate::wire::Encoder;

/// Link delays a server waits for a sub-request reply.
pub const SUBREQUEST_TIMEOUT_HOPS: u64 = 6;
/// Link delays a client waits for its request to complete.
pub const CLIENT_TIMEOUT_HOPS: u64 = 16;

/// Why a request was turned down.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Rejection {
    WrongGnode,
    BadSignature,
    OverQuota,
    QueueFull,
    StolenNameBlocked,
    StaleId,
    GapId,
    CounterInactive,
    UnknownHostname,
    UnknownKey,
    NotOwner,
    QueuedNotActive,
    PerNameLimit,
    GlobalLimit,
    InvalidRecord,
    NotFound,
    Unreachable,
}

impl fmt::Display for Rejection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

impl std::error::Error for Rejection {}

impl From<RegistryError> for Rejection {
    fn from(e: RegistryError) -> Self {
        match e {
            RegistryError::QueueFull => Rejection::QueueFull,
            RegistryError::UnknownHostname => Rejection::UnknownHostname,
            RegistryError::UnknownKey => Rejection::UnknownKey,
            RegistryError::StaleId { .. } => Rejection::StaleId,
            RegistryError::GapId { .. } => Rejection::GapId,
        }
    }
}

impl From<SnsdError> for Rejection {
    fn from(e: SnsdError) -> Self {
        match e {
            SnsdError::BadSignature => Rejection::BadSignature,
            SnsdError::NotOwner => Rejection::NotOwner,
            SnsdError::QueuedNotActive => Rejection::QueuedNotActive,
            SnsdError::PerNameLimit => Rejection::PerNameLimit,
            SnsdError::GlobalLimit => Rejection::GlobalLimit,
            SnsdError::Invalid(_) | SnsdError::AllDisabled => Rejection::InvalidRecord,
        }
    }
}

/// Handle for a client operation started through the simulator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct OpId(pub u64);

/// One row of a finished lookup. `ip` is the address to contact: the target
/// itself, or for a hostname target the main ip it resolved to (one hop).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResolvedRecord {
    pub target: Target,
    pub ip: Option<Ip>,
    pub priority: u8,
    pub weight: u8,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Resolution {
    pub service: u16,
    pub records: Vec<ResolvedRecord>,
    pub registered_or_updated_at: Time,
    pub from_cache: bool,
}

impl Resolution {
    /// First row's address: for service 0 the register node's ip.
    pub fn main_ip(&self) -> Option<Ip> {
        self.records.first().and_then(|r| r.ip)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Outcome {
    Registered(Placement),
    Updated,
    Resolved(Resolution),
    Reverse(Vec<Hostname>),
    SnsdApplied,
    Challenge(ChallengeVerdict),
    Rejected(Rejection),
}

impl Outcome {
    pub fn rejection(&self) -> Option<Rejection> {
        match self {
            Outcome::Rejected(r) => Some(*r),
            _ => None,
        }
    }

    pub fn verdict(&self) -> String {
        match self {
            Outcome::Rejected(r) => format!("rejected:{r}"),
            Outcome::Challenge(ChallengeVerdict::Pass) => "pass".into(),
            Outcome::Challenge(ChallengeVerdict::Fail) => "fail".into(),
            _ => "ok".into(),
        }
    }
}

trait Signed {
    fn signing_bytes(&self) -> Vec<u8>;
    fn pubkey(&self) -> &PubKey;
    fn signature(&self) -> &Signature;

    fn verify(&self) -> bool {
        identity::verify(self.pubkey(), &self.signing_bytes(), self.signature()).unwrap_or(false)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegisterReq {
    pub hname_hash: Ip,
    pub registrant: Ip,
    pub pubkey: PubKey,
    pub signature: Signature,
}

impl RegisterReq {
    pub fn new(kp: &KeyPair, hname_hash: Ip, registrant: Ip) -> Self {
        let mut req = RegisterReq {
            hname_hash,
            registrant,
            pubkey: kp.public().clone(),
            signature: Signature::from_bytes(Vec::new()),
        };
        req.signature = identity::sign(kp, &req.signing_bytes());
        req
    }
}

impl Signed for RegisterReq {
    fn signing_bytes(&self) -> Vec<u8> {
        let mut enc = Encoder::new("RegisterReq");
        enc.ip(self.hname_hash).ip(self.registrant).pubkey(&self.pubkey).zeroed_signature();
        enc.finish()
    }
    fn pubkey(&self) -> &PubKey {
        &self.pubkey
    }
    fn signature(&self) -> &Signature {
        &self.signature
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UpdateReq {
    pub hname_hash: Ip,
    pub new_ip: Ip,
    /// k for the k-th update of this registration.
    pub update_id: u32,
    pub pubkey: PubKey,
    pub signature: Signature,
}

impl UpdateReq {
    pub fn new(kp: &KeyPair, hname_hash: Ip, new_ip: Ip, update_id: u32) -> Self {
        let mut req = UpdateReq {
            hname_hash,
            new_ip,
            update_id,
            pubkey: kp.public().clone(),
            signature: Signature::from_bytes(Vec::new()),
        };
        req.signature = identity::sign(kp, &req.signing_bytes());
        req
    }
}

impl Signed for UpdateReq {
    fn signing_bytes(&self) -> Vec<u8> {
        let mut enc = Encoder::new("UpdateReq");
        enc.ip(self.hname_hash).ip(self.new_ip).u32(self.update_id).pubkey(&self.pubkey).zeroed_signature();
        enc.finish()
    }
    fn pubkey(&self) -> &PubKey {
        &self.pubkey
    }
    fn signature(&self) -> &Signature {
        &self.signature
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SnsdReq {
    pub hname_hash: Ip,
    pub change: SnsdChange,
    pub pubkey: PubKey,
    pub signature: Signature,
}

impl SnsdReq {
    pub fn new(kp: &KeyPair, hname_hash: Ip, change: SnsdChange) -> Self {
        let signature = identity::sign(kp, &snsd::snsd_signing_bytes(hname_hash, &change, kp.public()));
        SnsdReq { hname_hash, change, pubkey: kp.public().clone(), signature }
    }
}

impl Signed for SnsdReq {
    fn signing_bytes(&self) -> Vec<u8> {
        snsd::snsd_signing_bytes(self.hname_hash, &self.change, &self.pubkey)
    }
    fn pubkey(&self) -> &PubKey {
        &self.pubkey
    }
    fn signature(&self) -> &Signature {
        &self.signature
    }
}

/// The client request a counter check vouches for.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CounterQuery {
    Register(RegisterReq),
    Update(UpdateReq),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResolveReply {
    pub records: Vec<ServiceRecord>,
    pub registered_or_updated_at: Time,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Reply {
    Registered(Placement),
    Updated,
    SnsdApplied,
    Rejected(Rejection),
    Counter(CounterVerdict),
    Resolved(ResolveReply),
    NotFound,
    Reverse(Vec<Hostname>),
    Entry(Option<AndnaEntry>),
    CounterEntry(Option<CounterEntry>),
    Challenge(Signature),
}

/// Gnode-internal forwarding after a serving node commits a change.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Replica {
    Register {
        req: RegisterReq,
        at: Time,
    },
    Update {
        req: UpdateReq,
        at: Time,
    },
    Snsd {
        req: SnsdReq,
    },
    Install(AndnaEntry),
    /// A counter check the serving counter node accepted.
    Count {
        query: CounterQuery,
        at: Time,
    },
    CounterInstall(CounterEntry),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Body {
    Register(RegisterReq),
    Update(UpdateReq),
    CounterCheck { registrant: Ip, hname_hash: Ip, query: CounterQuery },
    Resolve { hname_hash: Ip, service: u16 },
    DelegatedResolve { hname_hash: Ip },
    Reverse,
    CacheTransfer { hname_hash: Ip },
    CounterTransfer { pubkey: PubKey },
    DoubleCheck(RegisterReq),
    SnsdRegister(SnsdReq),
    SnsdDelete(SnsdReq),
    Challenge(ChallengeReq),
    Reply(Reply),
    Replicate(Replica),
}

impl Body {
    pub fn kind(&self) -> &'static str {
        match self {
            Body::Register(_) => "RegisterReq",
            Body::Update(_) => "UpdateReq",
            Body::CounterCheck { .. } => "CounterCheckReq",
            Body::Resolve { .. } => "ResolveReq",
            Body::DelegatedResolve { .. } => "DelegatedResolveReq",
            Body::Reverse => "ReverseReq",
            Body::CacheTransfer { .. } => "CacheTransferReq",
            Body::CounterTransfer { .. } => "CounterTransferReq",
            Body::DoubleCheck(_) => "DoubleCheckReq",
            Body::SnsdRegister(_) => "SnsdRegisterReq",
            Body::SnsdDelete(_) => "SnsdDeleteReq",
            Body::Challenge(_) => "ChallengeReq",
            Body::Reply(r) => match r {
                Reply::Registered(_) | Reply::Updated | Reply::SnsdApplied | Reply::Rejected(_) => "Verdict",
                Reply::Counter(_) => "CounterCheckReply",
                Reply::Resolved(_) | Reply::NotFound => "ResolveReply",
                Reply::Reverse(_) => "ReverseReply",
                Reply::Entry(_) | Reply::CounterEntry(_) => "EntryReply",
                Reply::Challenge(_) => "ChallengeReply",
            },
            Body::Replicate(r) => match r {
                Replica::Register { .. } => "ForwardRegister",
                Replica::Update { .. } => "ForwardUpdate",
                Replica::Snsd { .. } => "ForwardSnsd",
                Replica::Install(_) => "ForwardEntry",
                Replica::Count { .. } => "ForwardCount",
                Replica::CounterInstall(_) => "ForwardCounterEntry",
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Message {
    /// Sender-local id; replies echo it in `re`.
    pub id: u64,
    pub re: Option<u64>,
    pub body: Body,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Envelope {
    pub from: Ip,
    pub to: Ip,
    pub msg: Message,
}

/// A client-side cached resolution.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResolvedCacheEntry {
    pub hname_hash: Ip,
    pub ip: Ip,
    pub registered_or_updated_at: Time,
    pub expires_at: Time,
    pub records: Vec<ServiceRecord>,
}

/// Service-0 answers this node has seen, kept until the upstream
/// registration would expire.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ResolvedCache {
    entries: BTreeMap<Ip, ResolvedCacheEntry>,
}

impl ResolvedCache {
    pub fn get(&self, hname_hash: Ip, now: Time) -> Option<&ResolvedCacheEntry> {
        self.entries.get(&hname_hash).filter(|e| now < e.expires_at)
    }

    pub fn insert(&mut self, hname_hash: Ip, reply: &ResolveReply) {
        let Some(ip) = reply.records.iter().find_map(|r| match r.target {
            Target::Ip(ip) => Some(ip),
            Target::Host(_) => None,
        }) else {
            return;
        };
        self.entries.insert(
            hname_hash,
            ResolvedCacheEntry {
                hname_hash,
                ip,
                registered_or_updated_at: reply.registered_or_updated_at,
                expires_at: reply.registered_or_updated_at + HIBERNATION_SECS,
                records: reply.records.clone(),
            },
        );
    }

    pub fn purge(&mut self, now: Time) {
        self.entries.retain(|_, e| now < e.expires_at);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Live membership grouped by gnode.
#[derive(Debug, Clone, Default)]
pub struct Membership {
    by_gnode: BTreeMap<GnodeId, BTreeSet<Ip>>,
    gnodes: BTreeSet<GnodeId>,
}

impl Membership {
    pub fn insert(&mut self, ip: Ip) -> bool {
        self.gnodes.insert(ip.gnode());
        self.by_gnode.entry(ip.gnode()).or_default().insert(ip)
    }

    pub fn remove(&mut self, ip: Ip) -> bool {
        let g = ip.gnode();
        let Some(set) = self.by_gnode.get_mut(&g) else {
            return false;
        };
        let removed = set.remove(&ip);
        if set.is_empty() {
            self.by_gnode.remove(&g);
            self.gnodes.remove(&g);
        }
        removed
    }

    pub fn is_alive(&self, ip: Ip) -> bool {
        self.by_gnode.get(&ip.gnode()).is_some_and(|s| s.contains(&ip))
    }

    pub fn gnodes(&self) -> &BTreeSet<GnodeId> {
        &self.gnodes
    }

    pub fn members(&self, g: GnodeId) -> impl Iterator<Item = Ip> + '_ {
        self.by_gnode.get(&g).into_iter().flat_map(|s| s.iter().copied())
    }

    pub fn live(&self) -> impl Iterator<Item = Ip> + '_ {
        self.by_gnode.values().flat_map(|s| s.iter().copied())
    }

    /// Serving gnode for `hash` under current membership.
    pub fn rounded(&self, hash: Ip) -> Option<GnodeId> {
        rounded_hash_gnode(gnode_of(hash), &self.gnodes).ok()
    }

    /// The gnode that would serve `hash` if `exclude` were gone.
    pub fn previous_rounded(&self, hash: Ip, exclude: GnodeId) -> Option<GnodeId> {
        let mut rest = self.gnodes.clone();
        rest.remove(&exclude);
        rounded_hash_gnode(gnode_of(hash), &rest).ok()
    }

    pub fn random_member(&self, g: GnodeId, exclude: Option<Ip>, rng: &mut ChaCha8Rng) -> Option<Ip> {
        let pool: Vec<Ip> = self.members(g).filter(|ip| Some(*ip) != exclude).collect();
        if pool.is_empty() {
            None
        } else {
            Some(pool[rng.gen_range(0..pool.len())])
        }
    }
}

/// Side effects collected while a node handles one event.
#[derive(Debug, Default)]
pub struct Effects {
    pub sends: Vec<Envelope>,
    /// (deadline, request id) pairs for the handling node.
    pub timers: Vec<(Time, u64)>,
    pub log: Vec<LogLine>,
    pub outcomes: Vec<(OpId, Outcome)>,
}

pub struct Ctx<'a> {
    pub now: Time,
    pub link_delay: Time,
    pub view: &'a Membership,
    pub rng: &'a mut ChaCha8Rng,
    pub effects: Effects,
}

impl<'a> Ctx<'a> {
    pub fn new(now: Time, link_delay: Time, view: &'a Membership, rng: &'a mut ChaCha8Rng) -> Self {
        Ctx { now, link_delay, view, rng, effects: Effects::default() }
    }

    fn log(&mut self, kind: &str, actor: Ip, detail: String, verdict: String) {
        self.effects.log.push(LogLine { at: self.now, kind: kind.to_string(), actor, detail, verdict });
    }
}

/// What a registrant remembers about a name it asked for.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OwnedName {
    pub hname_hash: Ip,
    pub placement: Option<Placement>,
    pub update_count: u32,
    /// Records this node pushed and may need to challenge.
    pub records: Vec<SnsdRecord>,
}

#[derive(Debug, Clone)]
enum Purpose {
    Op { op: OpId, name: Hostname, service: u16, delegated: bool },
    Chain { job: u64, index: usize },
    ForPeer { peer: Ip, re: u64 },
    ChallengeTarget { name: Hostname, record: SnsdRecord },
}

#[derive(Debug, Clone)]
enum Flow {
    Register(RegisterReq),
    Update(UpdateReq),
    Snsd(SnsdReq),
    Resolve { hname_hash: Ip, service: u16 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Stage {
    DoubleCheck,
    Transfer,
    Counter,
}

#[derive(Debug, Clone)]
struct Serve {
    client: Ip,
    client_re: u64,
    flow: Flow,
    stage: Stage,
}

#[derive(Debug, Clone)]
enum Pending {
    Register { op: Option<OpId>, name: Hostname },
    Update { op: Option<OpId>, name: Hostname, update_id: u32, new_ip: Ip },
    Snsd { op: Option<OpId>, name: Hostname, change: SnsdChange },
    Reverse { op: OpId, target: Ip },
    Probe { op: OpId, kind: &'static str },
    Resolve { hname_hash: Ip, service: u16, purpose: Purpose },
    Challenge { name: Hostname, record: SnsdRecord, nonce: [u8; NONCE_LEN] },
    Serve(Serve),
    Count(CountCheck),
}

/// A counter check parked while the key's entry is fetched.
#[derive(Debug, Clone)]
struct CountCheck {
    from: Ip,
    re: u64,
    registrant: Ip,
    hname_hash: Ip,
    query: CounterQuery,
}

#[derive(Debug, Clone)]
struct ChainJob {
    op: OpId,
    name: Hostname,
    service: u16,
    reply: ResolveReply,
    records: Vec<ResolvedRecord>,
    outstanding: usize,
}

/// One simulated participant: registrant, resolver, hash-gnode replica and
/// counter-gnode replica at once.
#[derive(Debug, Clone)]
pub struct Node {
    pub ip: Ip,
    keys: KeyPair,
    pub registry: RegistryDb,
    pub counter: CounterDb,
    pub cache: ResolvedCache,
    owned: BTreeMap<Hostname, OwnedName>,
    pending: BTreeMap<u64, Pending>,
    chains: BTreeMap<u64, ChainJob>,
    next_id: u64,
}

fn quote(name: &Hostname) -> String {
    format!("\"{name}\"")
}

impl Node {
    pub fn new(ip: Ip, keys: KeyPair) -> Self {
        Node {
            ip,
            keys,
            registry: RegistryDb::new(ip.gnode()),
            counter: CounterDb::new(ip.gnode()),
            cache: ResolvedCache::default(),
            owned: BTreeMap::new(),
            pending: BTreeMap::new(),
            chains: BTreeMap::new(),
            next_id: 1,
        }
    }

    pub fn gnode(&self) -> GnodeId {
        self.ip.gnode()
    }

    pub fn keys(&self) -> &KeyPair {
        &self.keys
    }

    pub fn owned(&self) -> &BTreeMap<Hostname, OwnedName> {
        &self.owned
    }

    pub fn has_pending(&self) -> bool {
        !self.pending.is_empty()
    }

    /// Copies the replicated databases of a same-gnode peer.
    pub fn andna_hook(&mut self, peer: &Node) {
        self.registry = peer.registry.clone();
        self.counter = peer.counter.clone();
        self.cache = peer.cache.clone();
    }

    fn alloc_id(&mut self) -> u64 {
        let id = self.next_id;
        self.next_id += 1;
        id
    }

    fn send(&mut self, ctx: &mut Ctx, to: Ip, body: Body) -> u64 {
        let id = self.alloc_id();
        ctx.effects.sends.push(Envelope { from: self.ip, to, msg: Message { id, re: None, body } });
        id
    }

    fn request(&mut self, ctx: &mut Ctx, to: Ip, body: Body, pending: Pending, hops: u64) {
        let id = self.send(ctx, to, body);
        self.pending.insert(id, pending);
        ctx.effects.timers.push((ctx.now + hops * ctx.link_delay, id));
    }

    fn reply(&mut self, ctx: &mut Ctx, to: Ip, re: u64, reply: Reply) {
        let id = self.alloc_id();
        ctx.effects.sends.push(Envelope {
            from: self.ip,
            to,
            msg: Message { id, re: Some(re), body: Body::Reply(reply) },
        });
    }

    fn replicate(&mut self, ctx: &mut Ctx, replica: Replica) {
        let peers: Vec<Ip> = ctx.view.members(self.gnode()).filter(|p| *p != self.ip).collect();
        for peer in peers {
            self.send(ctx, peer, Body::Replicate(replica.clone()));
        }
    }

    fn finish(&mut self, ctx: &mut Ctx, op: Option<OpId>, kind: &str, detail: String, outcome: Outcome) {
        ctx.log(kind, self.ip, detail, outcome.verdict());
        if let Some(op) = op {
            ctx.effects.outcomes.push((op, outcome));
        }
    }

    fn serves(&self, ctx: &Ctx, hname_hash: Ip) -> bool {
        ctx.view.rounded(hname_hash) == Some(self.gnode())
    }

    // ---- client side -------------------------------------------------

    /// Starts a registration of `name` for this node.
    pub fn start_register(&mut self, ctx: &mut Ctx, op: Option<OpId>, name: &Hostname) {
        let hash = name.hash();
        let Some(y) = ctx.view.rounded(hash).and_then(|g| ctx.view.random_member(g, None, ctx.rng)) else {
            return self.finish(ctx, op, "register", quote(name), Outcome::Rejected(Rejection::Unreachable));
        };
        self.owned.entry(name.clone()).or_insert(OwnedName {
            hname_hash: hash,
            placement: None,
            update_count: 0,
            records: Vec::new(),
        });
        let req = RegisterReq::new(&self.keys, hash, self.ip);
        let pending = Pending::Register { op, name: name.clone() };
        self.request(ctx, y, Body::Register(req), pending, CLIENT_TIMEOUT_HOPS);
    }

    /// Sends the next signed update for `name`, moving it to `new_ip`.
    pub fn start_update(&mut self, ctx: &mut Ctx, op: Option<OpId>, name: &Hostname, new_ip: Ip) {
        let Some(owned) = self.owned.get(name).filter(|o| o.placement.is_some()) else {
            return self.finish(ctx, op, "update", quote(name), Outcome::Rejected(Rejection::UnknownHostname));
        };
        let (hash, update_id) = (owned.hname_hash, owned.update_count + 1);
        let Some(y) = ctx.view.rounded(hash).and_then(|g| ctx.view.random_member(g, None, ctx.rng)) else {
            return self.finish(ctx, op, "update", quote(name), Outcome::Rejected(Rejection::Unreachable));
        };
        let req = UpdateReq::new(&self.keys, hash, new_ip, update_id);
        let pending = Pending::Update { op, name: name.clone(), update_id, new_ip };
        self.request(ctx, y, Body::Update(req), pending, CLIENT_TIMEOUT_HOPS);
    }

    pub fn start_snsd(&mut self, ctx: &mut Ctx, op: Option<OpId>, name: &Hostname, change: SnsdChange) {
        let hash = name.hash();
        let Some(y) = ctx.view.rounded(hash).and_then(|g| ctx.view.random_member(g, None, ctx.rng)) else {
            let kind = if matches!(change, SnsdChange::Delete(_)) { "snsd-delete" } else { "snsd-register" };
            return self.finish(ctx, op, kind, quote(name), Outcome::Rejected(Rejection::Unreachable));
        };
        let req = SnsdReq::new(&self.keys, hash, change.clone());
        let body = match change {
            SnsdChange::Delete(_) => Body::SnsdDelete(req),
            _ => Body::SnsdRegister(req),
        };
        let pending = Pending::Snsd { op, name: name.clone(), change };
        self.request(ctx, y, body, pending, CLIENT_TIMEOUT_HOPS);
    }

    pub fn start_resolve(&mut self, ctx: &mut Ctx, op: OpId, name: &Hostname, service: u16) {
        let purpose = Purpose::Op { op, name: name.clone(), service, delegated: false };
        self.resolve_hash(ctx, name.hash(), service, purpose);
    }

    /// Asks a random same-gnode peer to resolve on this node's behalf.
    pub fn start_delegated_resolve(&mut self, ctx: &mut Ctx, op: OpId, name: &Hostname) {
        let hash = name.hash();
        let purpose = Purpose::Op { op, name: name.clone(), service: 0, delegated: true };
        if let Some(hit) = self.cache_hit(ctx, hash) {
            return self.resolved(ctx, purpose, Ok(hit), true);
        }
        match ctx.view.random_member(self.gnode(), Some(self.ip), ctx.rng) {
            Some(peer) => {
                let pending = Pending::Resolve { hname_hash: hash, service: 0, purpose };
                self.request(ctx, peer, Body::DelegatedResolve { hname_hash: hash }, pending, CLIENT_TIMEOUT_HOPS);
            }
            None => self.resolve_hash(ctx, hash, 0, purpose),
        }
    }

    pub fn start_reverse(&mut self, ctx: &mut Ctx, op: OpId, target: Ip) {
        self.request(ctx, target, Body::Reverse, Pending::Reverse { op, target }, CLIENT_TIMEOUT_HOPS);
    }

    /// Sends an arbitrary request and records whatever comes back as `op`.
    pub fn start_probe(&mut self, ctx: &mut Ctx, op: OpId, to: Ip, body: Body) {
        let kind = body.kind();
        self.request(ctx, to, body, Pending::Probe { op, kind }, CLIENT_TIMEOUT_HOPS);
    }

    /// Challenges every trusted record this node registered.
    pub fn start_challenges(&mut self, ctx: &mut Ctx) {
        let work: Vec<(Hostname, SnsdRecord)> = self
            .owned
            .iter()
            .filter(|(_, o)| o.placement == Some(Placement::Head))
            .flat_map(|(n, o)| {
                o.records.iter().filter(|r| r.trusted_pubkey.is_some()).map(move |r| (n.clone(), r.clone()))
            })
            .collect();
        for (name, record) in work {
            match &record.target {
                Target::Ip(ip) => self.send_challenge(ctx, *ip, name, record.clone()),
                Target::Host(h) => {
                    let purpose = Purpose::ChallengeTarget { name, record: record.clone() };
                    self.resolve_hash(ctx, h.hash(), 0, purpose);
                }
            }
        }
    }

    fn send_challenge(&mut self, ctx: &mut Ctx, to: Ip, name: Hostname, record: SnsdRecord) {
        let mut nonce = [0u8; NONCE_LEN];
        ctx.rng.fill(&mut nonce);
        let req = ChallengeReq::new(&self.keys, nonce);
        let pending = Pending::Challenge { name, record, nonce };
        self.request(ctx, to, Body::Challenge(req), pending, SUBREQUEST_TIMEOUT_HOPS);
    }

    fn challenge_done(&mut self, ctx: &mut Ctx, name: Hostname, record: SnsdRecord, verdict: ChallengeVerdict) {
        let detail = format!("{}:{} -> {}", quote(&name), record.service, record.target);
        self.finish(ctx, None, "challenge", detail, Outcome::Challenge(verdict));
        if verdict == ChallengeVerdict::Fail {
            self.start_snsd(ctx, None, &name, SnsdChange::Delete(record));
        }
    }

    fn cache_hit(&self, ctx: &Ctx, hash: Ip) -> Option<ResolveReply> {
        self.cache
            .get(hash, ctx.now)
            .map(|e| ResolveReply { records: e.records.clone(), registered_or_updated_at: e.registered_or_updated_at })
    }

    fn resolve_hash(&mut self, ctx: &mut Ctx, hash: Ip, service: u16, purpose: Purpose) {
        if service == 0 {
            if let Some(hit) = self.cache_hit(ctx, hash) {
                return self.resolved(ctx, purpose, Ok(hit), true);
            }
        }
        match ctx.view.rounded(hash).and_then(|g| ctx.view.random_member(g, None, ctx.rng)) {
            Some(y) => {
                let pending = Pending::Resolve { hname_hash: hash, service, purpose };
                self.request(ctx, y, Body::Resolve { hname_hash: hash, service }, pending, CLIENT_TIMEOUT_HOPS);
            }
            None => self.resolved(ctx, purpose, Err(Rejection::Unreachable), false),
        }
    }

    fn resolved(&mut self, ctx: &mut Ctx, purpose: Purpose, result: Result<ResolveReply, Rejection>, from_cache: bool) {
        match purpose {
            Purpose::Op { op, name, service, delegated } => {
                let kind = if delegated { "resolve-delegated" } else { "resolve" };
                let reply = match result {
                    Ok(r) => r,
                    Err(e) => {
                        let detail = format!("{}:{service}", quote(&name));
                        return self.finish(ctx, Some(op), kind, detail, Outcome::Rejected(e));
                    }
                };
                if service == 0 {
                    let records = reply
                        .records
                        .iter()
                        .filter_map(|r| match r.target {
                            Target::Ip(ip) => Some(ResolvedRecord {
                                target: r.target.clone(),
                                ip: Some(ip),
                                priority: r.priority,
                                weight: r.weight,
                            }),
                            Target::Host(_) => None,
                        })
                        .collect();
                    let res = Resolution {
                        service,
                        records,
                        registered_or_updated_at: reply.registered_or_updated_at,
                        from_cache,
                    };
                    return self.finish_resolution(ctx, op, kind, &name, res);
                }
                let records: Vec<ResolvedRecord> = reply
                    .records
                    .iter()
                    .map(|r| ResolvedRecord {
                        target: r.target.clone(),
                        ip: match r.target {
                            Target::Ip(ip) => Some(ip),
                            Target::Host(_) => None,
                        },
                        priority: r.priority,
                        weight: r.weight,
                    })
                    .collect();
                let hops: Vec<(usize, Ip)> = records
                    .iter()
                    .enumerate()
                    .filter_map(|(i, r)| match &r.target {
                        Target::Host(h) => Some((i, h.hash())),
                        Target::Ip(_) => None,
                    })
                    .collect();
                let job = self.alloc_id();
                self.chains.insert(job, ChainJob { op, name, service, reply, records, outstanding: hops.len() });
                if hops.is_empty() {
                    return self.complete_chain(ctx, job);
                }
                for (index, hash) in hops {
                    self.resolve_hash(ctx, hash, 0, Purpose::Chain { job, index });
                }
            }
            Purpose::Chain { job, index } => {
                let Some(chain) = self.chains.get_mut(&job) else { return };
                if let Ok(reply) = result {
                    chain.records[index].ip = reply.records.first().and_then(|r| match r.target {
                        Target::Ip(ip) => Some(ip),
                        Target::Host(_) => None,
                    });
                }
                chain.outstanding -= 1;
                if chain.outstanding == 0 {
                    self.complete_chain(ctx, job);
                }
            }
            Purpose::ForPeer { peer, re } => {
                let reply = match result {
                    Ok(r) => Reply::Resolved(r),
                    Err(_) => Reply::NotFound,
                };
                self.reply(ctx, peer, re, reply);
            }
            Purpose::ChallengeTarget { name, record } => match result.ok().and_then(|r| r.records.first().cloned()) {
                Some(ServiceRecord { target: Target::Ip(ip), .. }) => self.send_challenge(ctx, ip, name, record),
                _ => self.challenge_done(ctx, name, record, ChallengeVerdict::Fail),
            },
        }
    }

    fn complete_chain(&mut self, ctx: &mut Ctx, job: u64) {
        let Some(chain) = self.chains.remove(&job) else { return };
        let res = Resolution {
            service: chain.service,
            records: chain.records,
            registered_or_updated_at: chain.reply.registered_or_updated_at,
            from_cache: false,
        };
        self.finish_resolution(ctx, chain.op, "resolve", &chain.name, res);
    }

    fn finish_resolution(&mut self, ctx: &mut Ctx, op: OpId, kind: &str, name: &Hostname, res: Resolution) {
        let rows: Vec<String> = res
            .records
            .iter()
            .map(|r| {
                let ip = r.ip.map_or_else(|| "-".to_string(), |ip| ip.to_string());
                match r.target {
                    Target::Ip(_) => format!("{ip} p{} w{}", r.priority, r.weight),
                    Target::Host(ref h) => format!("{h}={ip} p{} w{}", r.priority, r.weight),
                }
            })
            .collect();
        let source = if res.from_cache { " (cache)" } else { "" };
        let detail = format!("{}:{} -> [{}]{source}", quote(name), res.service, rows.join(", "));
        self.finish(ctx, Some(op), kind, detail, Outcome::Resolved(res));
    }

    // ---- message dispatch ----------------------------------------------

    /// Handles one delivered message and returns a short verdict for traces.
    pub fn handle(&mut self, ctx: &mut Ctx, from: Ip, msg: Message) -> String {
        let Message { id, re, body } = msg;
        match body {
            Body::Reply(reply) => match re.and_then(|re| self.pending.remove(&re)) {
                Some(p) => {
                    self.on_reply(ctx, p, reply);
                    "ok".into()
                }
                None => "unsolicited".into(),
            },
            Body::Register(req) => self.serve_register(ctx, from, id, req),
            Body::Update(req) => self.serve_update(ctx, from, id, req),
            Body::SnsdRegister(req) | Body::SnsdDelete(req) => self.serve_snsd(ctx, from, id, req),
            Body::Resolve { hname_hash, service } => self.serve_resolve(ctx, from, id, hname_hash, service),
            Body::DelegatedResolve { hname_hash } => {
                self.resolve_hash(ctx, hname_hash, 0, Purpose::ForPeer { peer: from, re: id });
                "delegated".into()
            }
            Body::Reverse => {
                let names = self.owned.iter().filter(|(_, o)| o.placement.is_some()).map(|(n, _)| n.clone()).collect();
                self.reply(ctx, from, id, Reply::Reverse(names));
                "ok".into()
            }
            Body::CacheTransfer { hname_hash } => {
                let entry = self.registry.get(hname_hash).cloned();
                self.reply(ctx, from, id, Reply::Entry(entry));
                "ok".into()
            }
            Body::DoubleCheck(req) => {
                let entry = self.registry.get(req.hname_hash).cloned();
                self.reply(ctx, from, id, Reply::Entry(entry));
                "ok".into()
            }
            Body::CounterCheck { registrant, hname_hash, query } => {
                let check = CountCheck { from, re: id, registrant, hname_hash, query };
                self.serve_counter(ctx, check, true)
            }
            Body::CounterTransfer { pubkey } => {
                let entry = self.counter.get(&pubkey).cloned();
                self.reply(ctx, from, id, Reply::CounterEntry(entry));
                "ok".into()
            }
            Body::Challenge(req) => {
                let valid = identity::verify(
                    &req.challenger,
                    &ChallengeReq::signing_bytes(&req.nonce, &req.challenger),
                    &req.signature,
                )
                .unwrap_or(false);
                if !valid {
                    return "rejected:BadSignature".into();
                }
                let sig = answer_challenge(&self.keys, &req.nonce);
                self.reply(ctx, from, id, Reply::Challenge(sig));
                "ok".into()
            }
            Body::Replicate(replica) => self.apply_replica(ctx, replica),
        }
    }

    /// A request this node sent went unanswered.
    pub fn on_timeout(&mut self, ctx: &mut Ctx, id: u64) {
        let Some(p) = self.pending.remove(&id) else { return };
        match p {
            Pending::Serve(s) => self.serve_timeout(ctx, s),
            Pending::Count(c) => {
                self.serve_counter(ctx, c, false);
            }
            Pending::Challenge { name, record, .. } => self.challenge_done(ctx, name, record, ChallengeVerdict::Fail),
            other => self.on_reply(ctx, other, Reply::Rejected(Rejection::Unreachable)),
        }
    }

    fn on_reply(&mut self, ctx: &mut Ctx, pending: Pending, reply: Reply) {
        match pending {
            Pending::Register { op, name } => {
                let detail = quote(&name);
                let outcome = match reply {
                    Reply::Registered(p) => {
                        if let Some(o) = self.owned.get_mut(&name) {
                            o.placement = Some(p);
                        }
                        let pos = match p {
                            Placement::Head => "head".to_string(),
                            Placement::Queued(n) => format!("queued {n}"),
                        };
                        return self.finish(ctx, op, "register", format!("{detail} {pos}"), Outcome::Registered(p));
                    }
                    Reply::Rejected(r) => Outcome::Rejected(r),
                    _ => Outcome::Rejected(Rejection::Unreachable),
                };
                if self.owned.get(&name).is_some_and(|o| o.placement.is_none()) {
                    self.owned.remove(&name);
                }
                self.finish(ctx, op, "register", detail, outcome);
            }
            Pending::Update { op, name, update_id, new_ip } => {
                let outcome = match reply {
                    Reply::Updated => {
                        if let Some(o) = self.owned.get_mut(&name) {
                            o.update_count = update_id;
                        }
                        Outcome::Updated
                    }
                    Reply::Rejected(r) => Outcome::Rejected(r),
                    _ => Outcome::Rejected(Rejection::Unreachable),
                };
                let detail = format!("{} id={update_id} ip={new_ip}", quote(&name));
                self.finish(ctx, op, "update", detail, outcome);
            }
            Pending::Snsd { op, name, change } => {
                let outcome = match reply {
                    Reply::SnsdApplied => {
                        if let Some(o) = self.owned.get_mut(&name) {
                            match &change {
                                SnsdChange::Add(r) => {
                                    o.records.retain(|e| !(e.target == r.target && e.service == r.service));
                                    o.records.push(r.clone());
                                }
                                SnsdChange::Delete(r) => {
                                    o.records.retain(|e| !(e.target == r.target && e.service == r.service))
                                }
                                SnsdChange::SetZero(_) => {}
                            }
                        }
                        Outcome::SnsdApplied
                    }
                    Reply::Rejected(r) => Outcome::Rejected(r),
                    _ => Outcome::Rejected(Rejection::Unreachable),
                };
                let (kind, detail) = match &change {
                    SnsdChange::Add(r) => (
                        "snsd-register",
                        format!("{}:{} -> {} p{} w{}", quote(&name), r.service, r.target, r.priority, r.weight),
                    ),
                    SnsdChange::SetZero(z) => {
                        ("snsd-register", format!("{}:0 -> main p{} w{}", quote(&name), z.priority, z.weight))
                    }
                    SnsdChange::Delete(r) => ("snsd-delete", format!("{}:{} -> {}", quote(&name), r.service, r.target)),
                };
                self.finish(ctx, op, kind, detail, outcome);
            }
            Pending::Reverse { op, target } => {
                let outcome = match reply {
                    Reply::Reverse(names) => Outcome::Reverse(names),
                    _ => Outcome::Rejected(Rejection::Unreachable),
                };
                let detail = match &outcome {
                    Outcome::Reverse(names) => {
                        let names: Vec<String> = names.iter().map(quote).collect();
                        format!("{target} -> [{}]", names.join(", "))
                    }
                    _ => target.to_string(),
                };
                self.finish(ctx, Some(op), "reverse", detail, outcome);
            }
            Pending::Probe { op, kind } => {
                let outcome = match reply {
                    Reply::Registered(p) => Outcome::Registered(p),
                    Reply::Updated => Outcome::Updated,
                    Reply::SnsdApplied => Outcome::SnsdApplied,
                    Reply::Rejected(r) => Outcome::Rejected(r),
                    Reply::NotFound => Outcome::Rejected(Rejection::NotFound),
                    Reply::Reverse(n) => Outcome::Reverse(n),
                    Reply::Resolved(r) => Outcome::Resolved(Resolution {
                        service: 0,
                        records: r
                            .records
                            .into_iter()
                            .map(|s| ResolvedRecord {
                                ip: None,
                                target: s.target,
                                priority: s.priority,
                                weight: s.weight,
                            })
                            .collect(),
                        registered_or_updated_at: r.registered_or_updated_at,
                        from_cache: false,
                    }),
                    Reply::Counter(_) | Reply::Entry(_) | Reply::CounterEntry(_) | Reply::Challenge(_) => {
                        Outcome::SnsdApplied
                    }
                };
                self.finish(ctx, Some(op), "probe", kind.to_string(), outcome);
            }
            Pending::Resolve { hname_hash, service, purpose } => {
                let result = match reply {
                    Reply::Resolved(r) => {
                        if service == 0 {
                            self.cache.insert(hname_hash, &r);
                        }
                        Ok(r)
                    }
                    Reply::Rejected(r) => Err(r),
                    _ => Err(Rejection::NotFound),
                };
                self.resolved(ctx, purpose, result, false);
            }
            Pending::Challenge { name, record, nonce } => {
                let verdict = match reply {
                    Reply::Challenge(sig) => verify_challenge_response(&record, &nonce, Some(&sig)),
                    _ => ChallengeVerdict::Fail,
                };
                self.challenge_done(ctx, name, record, verdict);
            }
            Pending::Serve(s) => self.serve_continue(ctx, s, reply),
            Pending::Count(c) => {
                if let Reply::CounterEntry(Some(entry)) = reply {
                    let detail = format!("key {} from previous gnode", entry.pubkey.fingerprint());
                    ctx.log("transfer", self.ip, detail, "installed".into());
                    self.counter.install(entry.clone());
                    self.replicate(ctx, Replica::CounterInstall(entry));
                }
                self.serve_counter(ctx, c, false);
            }
        }
    }

    // ---- hash gnode side -------------------------------------------------

    fn reject(&mut self, ctx: &mut Ctx, to: Ip, re: u64, why: Rejection) -> String {
        self.reply(ctx, to, re, Reply::Rejected(why));
        format!("rejected:{why}")
    }

    fn serve_register(&mut self, ctx: &mut Ctx, client: Ip, re: u64, req: RegisterReq) -> String {
        if !self.serves(ctx, req.hname_hash) {
            return self.reject(ctx, client, re, Rejection::WrongGnode);
        }
        if !req.verify() {
            return self.reject(ctx, client, re, Rejection::BadSignature);
        }
        let serve = Serve { client, client_re: re, flow: Flow::Register(req), stage: Stage::Counter };
        if self.registry.get(flow_hash(&serve.flow)).is_some() {
            return self.ask_counter(ctx, serve);
        }
        self.double_check_register(ctx, serve)
    }

    /// Asks the gnode that would hold the name without us whether it already
    /// does; a different holder there blocks the registration.
    fn double_check_register(&mut self, ctx: &mut Ctx, mut serve: Serve) -> String {
        let Flow::Register(req) = &serve.flow else { unreachable!() };
        let prev = ctx.view.previous_rounded(req.hname_hash, self.gnode());
        match prev.and_then(|g| ctx.view.random_member(g, None, ctx.rng)) {
            Some(old) => {
                let body = Body::DoubleCheck(req.clone());
                serve.stage = Stage::DoubleCheck;
                self.request(ctx, old, body, Pending::Serve(serve), SUBREQUEST_TIMEOUT_HOPS);
                "pending".into()
            }
            None => self.ask_counter(ctx, serve),
        }
    }

    /// Fetches a name's entry from the previously nearest gnode.
    fn passive_transfer(&mut self, ctx: &mut Ctx, mut serve: Serve) -> Option<String> {
        let hash = flow_hash(&serve.flow);
        if !self.serves(ctx, hash) {
            return None;
        }
        let prev = ctx.view.previous_rounded(hash, self.gnode());
        let old = prev.and_then(|g| ctx.view.random_member(g, None, ctx.rng))?;
        serve.stage = Stage::Transfer;
        self.request(
            ctx,
            old,
            Body::CacheTransfer { hname_hash: hash },
            Pending::Serve(serve),
            SUBREQUEST_TIMEOUT_HOPS,
        );
        Some("pending".into())
    }

    fn install_transferred(&mut self, ctx: &mut Ctx, entry: AndnaEntry) {
        let detail = format!("{:08x} from previous gnode", entry.hname_hash.0);
        ctx.log("transfer", self.ip, detail, "installed".into());
        self.registry.install(entry.clone());
        self.replicate(ctx, Replica::Install(entry));
    }

    fn ask_counter(&mut self, ctx: &mut Ctx, mut serve: Serve) -> String {
        let (pk, hash, registrant, query) = match &serve.flow {
            Flow::Register(req) => {
                if let Err(e) = self.registry.can_register(req.hname_hash, &req.pubkey) {
                    let (to, re) = (serve.client, serve.client_re);
                    return self.reject(ctx, to, re, e.into());
                }
                (&req.pubkey, req.hname_hash, req.registrant, CounterQuery::Register(req.clone()))
            }
            Flow::Update(req) => (&req.pubkey, req.hname_hash, req.new_ip, CounterQuery::Update(req.clone())),
            _ => unreachable!("only registrations and updates are counted"),
        };
        let target = counter_ip(pk).ok().and_then(|ip| ctx.view.rounded(ip));
        let Some(counter) = target.and_then(|g| ctx.view.random_member(g, None, ctx.rng)) else {
            let (to, re) = (serve.client, serve.client_re);
            return self.reject(ctx, to, re, Rejection::Unreachable);
        };
        let body = Body::CounterCheck { registrant, hname_hash: hash, query };
        serve.stage = Stage::Counter;
        self.request(ctx, counter, body, Pending::Serve(serve), SUBREQUEST_TIMEOUT_HOPS);
        "pending".into()
    }

    fn serve_update(&mut self, ctx: &mut Ctx, client: Ip, re: u64, req: UpdateReq) -> String {
        if !self.serves(ctx, req.hname_hash) {
            return self.reject(ctx, client, re, Rejection::WrongGnode);
        }
        if !req.verify() {
            return self.reject(ctx, client, re, Rejection::BadSignature);
        }
        let serve = Serve { client, client_re: re, flow: Flow::Update(req), stage: Stage::Counter };
        self.update_with_entry(ctx, serve, true)
    }

    fn update_with_entry(&mut self, ctx: &mut Ctx, serve: Serve, may_transfer: bool) -> String {
        let Flow::Update(req) = &serve.flow else { unreachable!() };
        let (to, re) = (serve.client, serve.client_re);
        if self.registry.get(req.hname_hash).is_none() {
            if may_transfer {
                if let Some(v) = self.passive_transfer(ctx, serve) {
                    return v;
                }
            }
            return self.reject(ctx, to, re, Rejection::UnknownHostname);
        }
        match self.registry.check_update(req.hname_hash, &req.pubkey, req.update_id) {
            Ok(()) => self.ask_counter(ctx, serve),
            Err(e) => self.reject(ctx, to, re, e.into()),
        }
    }

    fn serve_snsd(&mut self, ctx: &mut Ctx, client: Ip, re: u64, req: SnsdReq) -> String {
        if !self.serves(ctx, req.hname_hash) {
            return self.reject(ctx, client, re, Rejection::WrongGnode);
        }
        if !req.verify() {
            return self.reject(ctx, client, re, Rejection::BadSignature);
        }
        let serve = Serve { client, client_re: re, flow: Flow::Snsd(req), stage: Stage::Transfer };
        self.snsd_with_entry(ctx, serve, true)
    }

    fn snsd_with_entry(&mut self, ctx: &mut Ctx, serve: Serve, may_transfer: bool) -> String {
        let Flow::Snsd(req) = &serve.flow else { unreachable!() };
        let (to, re) = (serve.client, serve.client_re);
        let total = self.registry.snsd_total_for(&req.pubkey);
        let Some(entry) = self.registry.get_mut(req.hname_hash) else {
            if may_transfer {
                if let Some(v) = self.passive_transfer(ctx, serve) {
                    return v;
                }
            }
            return self.reject(ctx, to, re, Rejection::UnknownHostname);
        };
        match snsd::apply_snsd_change(entry, &req.change, &req.pubkey, &req.signature, total) {
            Ok(()) => {
                let req = req.clone();
                self.replicate(ctx, Replica::Snsd { req });
                self.reply(ctx, to, re, Reply::SnsdApplied);
                "accepted".into()
            }
            Err(e) => self.reject(ctx, to, re, e.into()),
        }
    }

    fn serve_resolve(&mut self, ctx: &mut Ctx, client: Ip, re: u64, hash: Ip, service: u16) -> String {
        if let Some(entry) = self.registry.get(hash) {
            let reply = resolve_reply(entry, service);
            self.reply(ctx, client, re, Reply::Resolved(reply));
            return "ok".into();
        }
        let serve =
            Serve { client, client_re: re, flow: Flow::Resolve { hname_hash: hash, service }, stage: Stage::Transfer };
        if let Some(v) = self.passive_transfer(ctx, serve) {
            return v;
        }
        self.reply(ctx, client, re, Reply::NotFound);
        "not-found".into()
    }

    /// Counter gnode side. A key this gnode has never seen may have been
    /// counted by the gnode that held the key's address before we appeared,
    /// so that entry is fetched first, like a hostname entry.
    fn serve_counter(&mut self, ctx: &mut Ctx, check: CountCheck, may_transfer: bool) -> String {
        let (valid, pk) = match &check.query {
            CounterQuery::Register(r) => {
                (r.verify() && r.hname_hash == check.hname_hash && r.registrant == check.registrant, r.pubkey.clone())
            }
            CounterQuery::Update(u) => {
                (u.verify() && u.hname_hash == check.hname_hash && u.new_ip == check.registrant, u.pubkey.clone())
            }
        };
        if !valid {
            return self.reject(ctx, check.from, check.re, Rejection::BadSignature);
        }
        if may_transfer && self.counter.get(&pk).is_none() {
            let prev = counter_ip(&pk)
                .ok()
                .filter(|cip| ctx.view.rounded(*cip) == Some(self.gnode()))
                .and_then(|cip| ctx.view.previous_rounded(cip, self.gnode()))
                .and_then(|g| ctx.view.random_member(g, None, ctx.rng));
            if let Some(old) = prev {
                let body = Body::CounterTransfer { pubkey: pk };
                self.request(ctx, old, body, Pending::Count(check), SUBREQUEST_TIMEOUT_HOPS);
                return "pending".into();
            }
        }
        let verdict = match check.query {
            CounterQuery::Register(_) => self.counter.check_request(&pk, check.hname_hash, ctx.now),
            CounterQuery::Update(_) => self.counter.confirm(&pk, check.hname_hash, ctx.now),
        };
        if let CounterVerdict::Ok { .. } = verdict {
            self.replicate(ctx, Replica::Count { query: check.query, at: ctx.now });
        }
        self.reply(ctx, check.from, check.re, Reply::Counter(verdict));
        match verdict {
            CounterVerdict::Ok { count } => format!("ok:{count}"),
            CounterVerdict::OverQuota => "rejected:OverQuota".into(),
            CounterVerdict::Inactive => "rejected:CounterInactive".into(),
        }
    }

    fn serve_continue(&mut self, ctx: &mut Ctx, serve: Serve, reply: Reply) {
        let (to, re) = (serve.client, serve.client_re);
        match serve.stage {
            Stage::DoubleCheck => {
                let Flow::Register(req) = &serve.flow else { unreachable!() };
                if let Reply::Entry(Some(entry)) = reply {
                    let holder = entry.head().pubkey.clone();
                    let pk = req.pubkey.clone();
                    self.install_transferred(ctx, entry);
                    if holder != pk {
                        self.reject(ctx, to, re, Rejection::StolenNameBlocked);
                        return;
                    }
                }
                self.ask_counter(ctx, serve);
            }
            Stage::Transfer => {
                let found = match reply {
                    Reply::Entry(Some(entry)) => {
                        self.install_transferred(ctx, entry);
                        true
                    }
                    _ => false,
                };
                match &serve.flow {
                    Flow::Resolve { hname_hash, service } => {
                        let reply = match self.registry.get(*hname_hash) {
                            Some(e) if found => Reply::Resolved(resolve_reply(e, *service)),
                            _ => Reply::NotFound,
                        };
                        self.reply(ctx, to, re, reply);
                    }
                    Flow::Update(_) => {
                        self.update_with_entry(ctx, serve, false);
                    }
                    Flow::Snsd(_) => {
                        self.snsd_with_entry(ctx, serve, false);
                    }
                    Flow::Register(_) => unreachable!("registrations use the double check"),
                }
            }
            Stage::Counter => {
                let verdict = match reply {
                    Reply::Counter(v) => v,
                    Reply::Rejected(r) => {
                        self.reject(ctx, to, re, r);
                        return;
                    }
                    _ => {
                        self.reject(ctx, to, re, Rejection::Unreachable);
                        return;
                    }
                };
                match verdict {
                    CounterVerdict::OverQuota => {
                        self.reject(ctx, to, re, Rejection::OverQuota);
                    }
                    CounterVerdict::Inactive => {
                        self.reject(ctx, to, re, Rejection::CounterInactive);
                    }
                    CounterVerdict::Ok { .. } => self.commit(ctx, serve),
                }
            }
        }
    }

    fn serve_timeout(&mut self, ctx: &mut Ctx, serve: Serve) {
        if serve.stage == Stage::DoubleCheck {
            // old gnode gone: availability wins
            ctx.log("double-check", self.ip, format!("{:08x}", flow_hash(&serve.flow).0), "unreachable".into());
        }
        self.serve_continue(ctx, serve, Reply::Rejected(Rejection::Unreachable));
    }

    fn commit(&mut self, ctx: &mut Ctx, serve: Serve) {
        let (to, re, now) = (serve.client, serve.client_re, ctx.now);
        match serve.flow {
            Flow::Register(req) => {
                match self.registry.apply_registration(req.hname_hash, req.registrant, &req.pubkey, now) {
                    Ok(p) => {
                        self.replicate(ctx, Replica::Register { req, at: now });
                        self.reply(ctx, to, re, Reply::Registered(p));
                    }
                    Err(e) => {
                        self.reject(ctx, to, re, e.into());
                    }
                }
            }
            Flow::Update(req) => {
                match self.registry.apply_update(req.hname_hash, &req.pubkey, req.new_ip, req.update_id, now) {
                    Ok(()) => {
                        self.replicate(ctx, Replica::Update { req, at: now });
                        self.reply(ctx, to, re, Reply::Updated);
                    }
                    Err(e) => {
                        self.reject(ctx, to, re, e.into());
                    }
                }
            }
            Flow::Snsd(_) | Flow::Resolve { .. } => unreachable!("not counted"),
        }
    }

    fn apply_replica(&mut self, _ctx: &mut Ctx, replica: Replica) -> String {
        match replica {
            Replica::Register { req, at } => {
                if !req.verify() {
                    return "rejected:BadSignature".into();
                }
                match self.registry.apply_registration(req.hname_hash, req.registrant, &req.pubkey, at) {
                    Ok(_) => "applied".into(),
                    Err(e) => format!("rejected:{}", Rejection::from(e)),
                }
            }
            Replica::Update { req, at } => {
                if !req.verify() {
                    return "rejected:BadSignature".into();
                }
                match self.registry.apply_update(req.hname_hash, &req.pubkey, req.new_ip, req.update_id, at) {
                    Ok(()) => "applied".into(),
                    Err(e) => format!("rejected:{}", Rejection::from(e)),
                }
            }
            Replica::Snsd { req } => {
                let total = self.registry.snsd_total_for(&req.pubkey);
                let Some(entry) = self.registry.get_mut(req.hname_hash) else {
                    return "rejected:UnknownHostname".into();
                };
                match snsd::apply_snsd_change(entry, &req.change, &req.pubkey, &req.signature, total) {
                    Ok(()) => "applied".into(),
                    Err(e) => format!("rejected:{}", Rejection::from(e)),
                }
            }
            Replica::Install(entry) => {
                self.registry.install(entry);
                "applied".into()
            }
            Replica::Count { query, at } => {
                let verdict = match &query {
                    CounterQuery::Register(r) if r.verify() => self.counter.check_request(&r.pubkey, r.hname_hash, at),
                    CounterQuery::Update(u) if u.verify() => self.counter.confirm(&u.pubkey, u.hname_hash, at),
                    _ => return "rejected:BadSignature".into(),
                };
                match verdict {
                    CounterVerdict::Ok { .. } => "applied".into(),
                    CounterVerdict::OverQuota => "rejected:OverQuota".into(),
                    CounterVerdict::Inactive => "rejected:CounterInactive".into(),
                }
            }
            Replica::CounterInstall(entry) => {
                self.counter.install(entry);
                "applied".into()
            }
        }
    }
}

fn flow_hash(flow: &Flow) -> Ip {
    match flow {
        Flow::Register(r) => r.hname_hash,
        Flow::Update(u) => u.hname_hash,
        Flow::Snsd(s) => s.hname_hash,
        Flow::Resolve { hname_hash, .. } => *hname_hash,
    }
}

fn resolve_reply(entry: &AndnaEntry, service: u16) -> ResolveReply {
    ResolveReply {
        records: resolve_service(entry, &entry.zero, service),
        registered_or_updated_at: entry.head().last_update_at,
    }
}
