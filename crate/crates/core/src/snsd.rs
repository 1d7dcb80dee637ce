//! Service records attached to a hostname.
//!
//! A record maps `(hostname, service)` to an ip or another hostname, with a
//! priority and a weight. Service 0 is the plain hostname lookup: it always
//! answers with the register node's own ip (the "zero record"), whose priority
//! and weight can be tuned but whose target cannot.
//!
//! Lower priority values are tried first. Inside one priority class a record
//! is picked with probability proportional to its weight; weight 0 disables a
//! record.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;

use rand::Rng;
use thiserror::Error;

use crate::identity::{self, KeyPair, PubKey, Signature};
use crate::idspace::{Hostname, Ip};
use crate::registry::AndnaEntry;
use crate::wire::Encoder;

pub const MAX_WEIGHT: u8 = 127;
pub const MAX_RECORDS_PER_NAME: usize = 16;
pub const MAX_RECORDS_PER_KEY: usize = 256;
pub const DEFAULT_PRIORITY: u8 = 16;
pub const DEFAULT_WEIGHT: u8 = 1;
pub const NONCE_LEN: usize = 16;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SnsdError {
    #[error("signature does not verify")]
    BadSignature,
    #[error("key does not hold this hostname")]
    NotOwner,
    #[error("key is only queued for this hostname")]
    QueuedNotActive,
    #[error("hostname already has 16 records")]
    PerNameLimit,
    #[error("key already has 256 records")]
    GlobalLimit,
    #[error("invalid record: {0:?}")]
    Invalid(Vec<Violation>),
    #[error("no record is enabled and reachable")]
    AllDisabled,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Target {
    Ip(Ip),
    Host(Hostname),
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Target::Ip(ip) => ip.fmt(f),
            Target::Host(h) => h.fmt(f),
        }
    }
}

impl Target {
    /// Dotted-quad shaped text becomes an ip, anything else a hostname.
    pub fn parse(text: &str) -> Result<Target, String> {
        if looks_like_quad(text) {
            return text.parse::<Ip>().map(Target::Ip).map_err(|_| format!("invalid ip address {text:?}"));
        }
        Hostname::new(text.as_bytes()).map(Target::Host).map_err(|e| e.to_string())
    }

    fn encode(&self, enc: &mut Encoder) {
        match self {
            Target::Ip(ip) => enc.u8(0).ip(*ip),
            Target::Host(h) => enc.u8(1).hostname(h),
        };
    }
}

fn looks_like_quad(text: &str) -> bool {
    let parts: Vec<&str> = text.split('.').collect();
    parts.len() == 4 && parts.iter().all(|p| !p.is_empty() && p.bytes().all(|b| b.is_ascii_digit()))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SnsdRecord {
    pub target: Target,
    pub service: u16,
    pub priority: u8,
    pub weight: u8,
    pub trusted_pubkey: Option<PubKey>,
}

impl SnsdRecord {
    fn same_slot(&self, other: &SnsdRecord) -> bool {
        self.target == other.target && self.service == other.service
    }

    fn encode(&self, enc: &mut Encoder) {
        self.target.encode(enc);
        enc.u16(self.service).u8(self.priority).u8(self.weight);
        enc.option(self.trusted_pubkey.as_ref(), |e, pk| {
            e.pubkey(pk);
        });
    }
}

/// Priority and weight of the implicit service-0 record.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ZeroRecordPolicy {
    pub priority: u8,
    pub weight: u8,
}

impl Default for ZeroRecordPolicy {
    fn default() -> Self {
        ZeroRecordPolicy { priority: DEFAULT_PRIORITY, weight: DEFAULT_WEIGHT }
    }
}

/// One answer row of a service lookup.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ServiceRecord {
    pub target: Target,
    pub priority: u8,
    pub weight: u8,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    WeightTooLarge(u8),
    /// A service-0 ip record would replace the register node's ip.
    MainIpImmutable(Ip),
    /// The register node's own ip is implied and never stored.
    ExplicitMainIp,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::WeightTooLarge(w) => write!(f, "weight {w} must be less than 128"),
            Violation::MainIpImmutable(ip) => {
                write!(f, "service 0 cannot point at {ip}: the main ip is the register node's")
            }
            Violation::ExplicitMainIp => {
                write!(f, "the main ip is implicit; tune it with hostname:hostname:0:priority:weight")
            }
        }
    }
}

pub fn validate_record(r: &SnsdRecord, registrant: Ip) -> Result<(), Vec<Violation>> {
    let mut violations = Vec::new();
    if r.weight > MAX_WEIGHT {
        violations.push(Violation::WeightTooLarge(r.weight));
    }
    if r.service == 0 {
        match r.target {
            Target::Ip(ip) if ip == registrant => violations.push(Violation::ExplicitMainIp),
            Target::Ip(ip) => violations.push(Violation::MainIpImmutable(ip)),
            Target::Host(_) => {}
        }
    }
    if violations.is_empty() {
        Ok(())
    } else {
        Err(violations)
    }
}

/// A signed change to a hostname's records.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SnsdChange {
    Add(SnsdRecord),
    SetZero(ZeroRecordPolicy),
    Delete(SnsdRecord),
}

impl SnsdChange {
    pub fn kind(&self) -> &'static str {
        match self {
            SnsdChange::Add(_) | SnsdChange::SetZero(_) => "SnsdRegisterReq",
            SnsdChange::Delete(_) => "SnsdDeleteReq",
        }
    }
}

/// Bytes covered by the signature on an SNSD request.
pub fn snsd_signing_bytes(hname_hash: Ip, change: &SnsdChange, pk: &PubKey) -> Vec<u8> {
    let mut enc = Encoder::new(change.kind());
    enc.ip(hname_hash);
    match change {
        SnsdChange::Add(r) => {
            enc.u8(0);
            r.encode(&mut enc);
        }
        SnsdChange::SetZero(z) => {
            enc.u8(1).u8(z.priority).u8(z.weight);
        }
        SnsdChange::Delete(r) => {
            enc.u8(2);
            r.encode(&mut enc);
        }
    }
    enc.pubkey(pk).zeroed_signature();
    enc.finish()
}

/// Checks and applies an SNSD change on a serving node.
///
/// `total_for_key` is the number of records the key already holds across
/// every hostname this node serves. Re-adding a record for an existing
/// `(target, service)` pair replaces it in place and does not count again.
pub fn apply_snsd_change(
    entry: &mut AndnaEntry,
    change: &SnsdChange,
    pk: &PubKey,
    sig: &Signature,
    total_for_key: usize,
) -> Result<(), SnsdError> {
    let msg = snsd_signing_bytes(entry.hname_hash, change, pk);
    if !identity::verify(pk, &msg, sig).unwrap_or(false) {
        return Err(SnsdError::BadSignature);
    }
    let head = entry.head();
    if &head.pubkey != pk {
        return Err(if entry.position_of(pk).is_some() { SnsdError::QueuedNotActive } else { SnsdError::NotOwner });
    }
    let registrant = head.registrant_ip;
    match change {
        SnsdChange::Add(r) => {
            validate_record(r, registrant).map_err(SnsdError::Invalid)?;
            if let Some(existing) = entry.snsd.iter_mut().find(|e| e.same_slot(r)) {
                *existing = r.clone();
                return Ok(());
            }
            if entry.snsd.len() >= MAX_RECORDS_PER_NAME {
                return Err(SnsdError::PerNameLimit);
            }
            if total_for_key >= MAX_RECORDS_PER_KEY {
                return Err(SnsdError::GlobalLimit);
            }
            entry.snsd.push(r.clone());
        }
        SnsdChange::SetZero(z) => {
            if z.weight > MAX_WEIGHT {
                return Err(SnsdError::Invalid(vec![Violation::WeightTooLarge(z.weight)]));
            }
            entry.zero = *z;
        }
        SnsdChange::Delete(r) => entry.snsd.retain(|e| !e.same_slot(r)),
    }
    Ok(())
}

/// Adds one record; see [`apply_snsd_change`].
pub fn register_snsd(
    entry: &mut AndnaEntry,
    r: SnsdRecord,
    pk: &PubKey,
    sig: &Signature,
    total_for_key: usize,
) -> Result<(), SnsdError> {
    apply_snsd_change(entry, &SnsdChange::Add(r), pk, sig, total_for_key)
}

/// Answer rows for `service`. Service 0 always leads with the zero record.
pub fn resolve_service(entry: &AndnaEntry, zero: &ZeroRecordPolicy, service: u16) -> Vec<ServiceRecord> {
    let mut out = Vec::new();
    if service == 0 {
        out.push(ServiceRecord {
            target: Target::Ip(entry.head().registrant_ip),
            priority: zero.priority,
            weight: zero.weight,
        });
    }
    out.extend(entry.snsd.iter().filter(|r| r.service == service).map(|r| ServiceRecord {
        target: r.target.clone(),
        priority: r.priority,
        weight: r.weight,
    }));
    out
}

/// Picks the record a client should contact first.
pub fn select_record<'a, R: Rng + ?Sized>(
    records: &'a [ServiceRecord],
    reachable: impl Fn(&Target) -> bool,
    rng: &mut R,
) -> Result<&'a ServiceRecord, SnsdError> {
    let mut classes: BTreeMap<u8, Vec<&ServiceRecord>> = BTreeMap::new();
    for r in records.iter().filter(|r| r.weight > 0 && reachable(&r.target)) {
        classes.entry(r.priority).or_default().push(r);
    }
    let (_, class) = classes.into_iter().next().ok_or(SnsdError::AllDisabled)?;
    let total: u32 = class.iter().map(|r| u32::from(r.weight)).sum();
    let mut pick = rng.gen_range(0..total);
    for r in &class {
        let w = u32::from(r.weight);
        if pick < w {
            return Ok(r);
        }
        pick -= w;
    }
    unreachable!("pick < total")
}

/// Port numbers for the service names accepted in `snsd_nodes`.
#[derive(Debug, Clone)]
pub struct ServiceTable(BTreeMap<String, u16>);

impl ServiceTable {
    pub fn builtin() -> Self {
        let names = [("http", 80), ("ftp", 21), ("ssh", 22), ("smtp", 25), ("domain", 53)];
        ServiceTable(names.into_iter().map(|(n, p)| (n.to_string(), p)).collect())
    }

    pub fn lookup(&self, name: &str) -> Option<u16> {
        self.0.get(name).copied()
    }
}

impl Default for ServiceTable {
    fn default() -> Self {
        Self::builtin()
    }
}

/// One accepted line of an `snsd_nodes` file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SnsdConfigLine {
    pub hostname: Hostname,
    pub target: Target,
    pub service: u16,
    pub priority: u8,
    pub weight: u8,
    pub pub_key_file: Option<PathBuf>,
}

impl SnsdConfigLine {
    /// `name:name:0:priority:weight` tunes the zero record instead of adding one.
    pub fn is_zero_policy(&self) -> bool {
        self.service == 0 && self.target == Target::Host(self.hostname.clone())
    }

    pub fn to_record(&self, trusted_pubkey: Option<PubKey>) -> SnsdRecord {
        SnsdRecord {
            target: self.target.clone(),
            service: self.service,
            priority: self.priority,
            weight: self.weight,
            trusted_pubkey,
        }
    }

    pub fn to_change(&self, trusted_pubkey: Option<PubKey>) -> SnsdChange {
        if self.is_zero_policy() {
            SnsdChange::SetZero(ZeroRecordPolicy { priority: self.priority, weight: self.weight })
        } else {
            SnsdChange::Add(self.to_record(trusted_pubkey))
        }
    }
}

impl fmt::Display for SnsdConfigLine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:{}:{}:{}", self.hostname, self.target, self.service, self.priority, self.weight)?;
        if let Some(path) = &self.pub_key_file {
            write!(f, ":{}", path.display())?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Diagnostic {
    pub line: usize,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}: {}", self.line, self.message)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ParsedSnsdNodes {
    /// Accepted lines with their 1-based line numbers.
    pub lines: Vec<(usize, SnsdConfigLine)>,
    pub diagnostics: Vec<Diagnostic>,
}

/// Parses an `snsd_nodes` file. Bad lines produce diagnostics and are
/// skipped; parsing always reaches the end of the input.
///
/// Line shape: `hostname:target:service[:priority[:weight]][:pub_key_file]`.
/// The first non-numeric field after `service` is the key file and must be
/// last.
pub fn parse_snsd_nodes(text: &[u8], services: &ServiceTable) -> ParsedSnsdNodes {
    let mut out = ParsedSnsdNodes::default();
    for (idx, raw) in text.split(|&b| b == b'\n').enumerate() {
        let line_no = idx + 1;
        let line = match std::str::from_utf8(raw) {
            Ok(l) => l.trim(),
            Err(_) => {
                out.diagnostics.push(Diagnostic { line: line_no, message: "not valid utf-8".into() });
                continue;
            }
        };
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        match parse_line(line, services) {
            Ok(parsed) => out.lines.push((line_no, parsed)),
            Err(message) => out.diagnostics.push(Diagnostic { line: line_no, message }),
        }
    }
    out
}

fn parse_line(line: &str, services: &ServiceTable) -> Result<SnsdConfigLine, String> {
    let fields: Vec<&str> = line.split(':').map(str::trim).collect();
    if fields.len() < 3 {
        return Err(format!(
            "expected hostname:target:service[:priority[:weight]][:pub_key_file], got {} field(s)",
            fields.len()
        ));
    }
    if let Some(pos) = fields.iter().position(|f| f.is_empty()) {
        return Err(format!("field {} is empty", pos + 1));
    }
    let hostname = Hostname::new(fields[0].as_bytes()).map_err(|e| e.to_string())?;
    let target = Target::parse(fields[1])?;
    let service = if is_number(fields[2]) {
        fields[2].parse::<u16>().map_err(|_| format!("service {} is not a port number", fields[2]))?
    } else {
        services.lookup(fields[2]).ok_or_else(|| format!("unknown service name {:?}", fields[2]))?
    };

    let mut numbers = Vec::new();
    let mut pub_key_file = None;
    for (i, field) in fields[3..].iter().enumerate() {
        let is_last = i + 4 == fields.len();
        if pub_key_file.is_some() {
            return Err("pub_key_file must be the last field".into());
        }
        if is_number(field) && numbers.len() < 2 {
            numbers.push(*field);
        } else if is_last {
            pub_key_file = Some(PathBuf::from(field));
        } else {
            return Err("pub_key_file must be the last field".into());
        }
    }
    let priority = match numbers.first() {
        Some(p) => p.parse::<u8>().map_err(|_| format!("priority {p} exceeds 255"))?,
        None => DEFAULT_PRIORITY,
    };
    let weight = match numbers.get(1) {
        Some(w) => w.parse::<u8>().map_err(|_| format!("weight {w} must be less than 128"))?,
        None => DEFAULT_WEIGHT,
    };
    if weight > MAX_WEIGHT {
        return Err(Violation::WeightTooLarge(weight).to_string());
    }
    if service == 0 {
        if let Target::Ip(ip) = target {
            return Err(Violation::MainIpImmutable(ip).to_string());
        }
    }
    Ok(SnsdConfigLine { hostname, target, service, priority, weight, pub_key_file })
}

fn is_number(s: &str) -> bool {
    !s.is_empty() && s.bytes().all(|b| b.is_ascii_digit())
}

/// Liveness probe sent to a trusted SNSD node.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChallengeReq {
    pub nonce: [u8; NONCE_LEN],
    pub challenger: PubKey,
    pub signature: Signature,
}

impl ChallengeReq {
    pub fn new(register_kp: &KeyPair, nonce: [u8; NONCE_LEN]) -> Self {
        let challenger = register_kp.public().clone();
        let signature = identity::sign(register_kp, &Self::signing_bytes(&nonce, &challenger));
        ChallengeReq { nonce, challenger, signature }
    }

    pub fn signing_bytes(nonce: &[u8; NONCE_LEN], challenger: &PubKey) -> Vec<u8> {
        let mut enc = Encoder::new("ChallengeReq");
        enc.bytes(nonce).pubkey(challenger).zeroed_signature();
        enc.finish()
    }
}

/// What the challenged node signs to prove it holds its key.
pub fn challenge_response_bytes(nonce: &[u8; NONCE_LEN]) -> Vec<u8> {
    let mut enc = Encoder::new("ChallengeReply");
    enc.bytes(nonce);
    enc.finish()
}

pub fn answer_challenge(kp: &KeyPair, nonce: &[u8; NONCE_LEN]) -> Signature {
    identity::sign(kp, &challenge_response_bytes(nonce))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChallengeVerdict {
    Pass,
    Fail,
}

pub fn verify_challenge_response(
    record: &SnsdRecord,
    nonce: &[u8; NONCE_LEN],
    response: Option<&Signature>,
) -> ChallengeVerdict {
    let (Some(pk), Some(sig)) = (&record.trusted_pubkey, response) else {
        return ChallengeVerdict::Fail;
    };
    match identity::verify(pk, &challenge_response_bytes(nonce), sig) {
        Ok(true) => ChallengeVerdict::Pass,
        _ => ChallengeVerdict::Fail,
    }
}

/// Runs one challenge round against `record`'s node through `respond`.
///
/// `respond` returns `None` when the node does not answer in time. A failed
/// round means the caller should delete the record.
pub fn challenge_check<R: Rng + ?Sized>(
    register_kp: &KeyPair,
    record: &SnsdRecord,
    respond: impl FnOnce(&ChallengeReq) -> Option<Signature>,
    rng: &mut R,
) -> ChallengeVerdict {
    let mut nonce = [0u8; NONCE_LEN];
    rng.fill(&mut nonce);
    let req = ChallengeReq::new(register_kp, nonce);
    let response = respond(&req);
    verify_challenge_response(record, &nonce, response.as_ref())
}
