//! Seeded discrete-event network.
//!
//! Every message takes `link_delay` seconds. Events at the same instant run
//! in scheduling order, so a run is a pure function of the seed and the
//! command sequence. Messages to a node that is not alive are dropped and
//! logged; the sender's timer turns that into `Unreachable`.

use std::collections::BTreeMap;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::identity::{KeyPair, Scheme};
use crate::idspace::{Hostname, Ip};
use crate::protocol::{Body, Ctx, Effects, Envelope, Membership, Node, OpId, Outcome};
use crate::registry::Time;
use crate::snsd::SnsdChange;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SimConfig {
    pub seed: u64,
    pub link_delay: Time,
    pub sweep_interval: Time,
    pub challenge_interval: Time,
    /// Log every delivery, not just operation results.
    pub trace: bool,
    /// Keep a copy of every delivered message.
    pub capture: bool,
    pub scheme: Scheme,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            seed: 0,
            link_delay: 1,
            sweep_interval: 86_400,
            challenge_interval: 86_400,
            trace: false,
            capture: false,
            scheme: Scheme::Ed25519,
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SimError {
    #[error("{0} is already alive")]
    AlreadyAlive(Ip),
    #[error("{0} is not alive")]
    NotAlive(Ip),
}

/// One event log row. Rendered tab-separated.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LogLine {
    pub at: Time,
    pub kind: String,
    pub actor: Ip,
    pub detail: String,
    pub verdict: String,
}

impl fmt::Display for LogLine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}\t{}\t{}\t{}\t{}", self.at, self.kind, self.actor, self.detail, self.verdict)
    }
}

#[derive(Debug)]
enum Event {
    Deliver(Envelope),
    Timeout { node: Ip, id: u64 },
    Sweep,
    Challenge,
}

pub struct Sim {
    cfg: SimConfig,
    now: Time,
    seq: u64,
    queue: BTreeMap<(Time, u64), Event>,
    /// Deliveries and timeouts still queued.
    inflight: usize,
    nodes: BTreeMap<Ip, Node>,
    membership: Membership,
    incarnations: BTreeMap<Ip, u32>,
    rng: ChaCha8Rng,
    log: Vec<LogLine>,
    outcomes: BTreeMap<OpId, Outcome>,
    next_op: u64,
    delivered: u64,
    captured: Vec<(Time, Envelope)>,
}

impl Sim {
    pub fn new(cfg: SimConfig) -> Self {
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut sim = Sim {
            cfg,
            now: 0,
            seq: 0,
            queue: BTreeMap::new(),
            inflight: 0,
            nodes: BTreeMap::new(),
            membership: Membership::default(),
            incarnations: BTreeMap::new(),
            rng,
            log: Vec::new(),
            outcomes: BTreeMap::new(),
            next_op: 1,
            delivered: 0,
            captured: Vec::new(),
        };
        if sim.cfg.sweep_interval > 0 {
            sim.schedule(sim.cfg.sweep_interval, Event::Sweep);
        }
        if sim.cfg.challenge_interval > 0 {
            sim.schedule(sim.cfg.challenge_interval, Event::Challenge);
        }
        sim
    }

    pub fn config(&self) -> &SimConfig {
        &self.cfg
    }

    pub fn now(&self) -> Time {
        self.now
    }

    pub fn node(&self, ip: Ip) -> Option<&Node> {
        self.nodes.get(&ip).filter(|_| self.membership.is_alive(ip))
    }

    pub fn live_nodes(&self) -> impl Iterator<Item = &Node> + '_ {
        self.membership.live().filter_map(|ip| self.nodes.get(&ip))
    }

    pub fn membership(&self) -> &Membership {
        &self.membership
    }

    pub fn log(&self) -> &[LogLine] {
        &self.log
    }

    pub fn outcome(&self, op: OpId) -> Option<&Outcome> {
        self.outcomes.get(&op)
    }

    /// Messages delivered so far, including dropped ones.
    pub fn delivered(&self) -> u64 {
        self.delivered
    }

    pub fn captured(&self) -> &[(Time, Envelope)] {
        &self.captured
    }

    /// Key seed for a node; a rejoin gets a fresh key.
    fn key_seed(&self, ip: Ip, incarnation: u32) -> u64 {
        let mut h = Sha256::new();
        h.update(self.cfg.seed.to_be_bytes());
        h.update(ip.0.to_be_bytes());
        h.update(incarnation.to_be_bytes());
        let d = h.finalize();
        u64::from_be_bytes(d[..8].try_into().expect("8 bytes"))
    }

    /// Brings `ip` up and copies its gnode's databases from a random live
    /// peer, if there is one.
    pub fn join_node(&mut self, ip: Ip) -> Result<(), SimError> {
        if self.membership.is_alive(ip) {
            return Err(SimError::AlreadyAlive(ip));
        }
        let inc = self.incarnations.entry(ip).and_modify(|i| *i += 1).or_insert(0);
        let inc = *inc;
        let keys = KeyPair::generate(self.cfg.scheme, Some(self.key_seed(ip, inc)));
        let mut node = Node::new(ip, keys);
        let peer = self.membership.random_member(ip.gnode(), None, &mut self.rng);
        let detail = match peer.and_then(|p| self.nodes.get(&p)) {
            Some(p) => {
                node.andna_hook(p);
                format!("hook from {} entries={}", p.ip, node.registry.entries.len())
            }
            None => "new gnode".to_string(),
        };
        self.nodes.insert(ip, node);
        self.membership.insert(ip);
        self.push_log("join", ip, detail, "ok");
        Ok(())
    }

    pub fn leave_node(&mut self, ip: Ip) -> Result<(), SimError> {
        if !self.membership.remove(ip) {
            return Err(SimError::NotAlive(ip));
        }
        self.nodes.remove(&ip);
        self.push_log("leave", ip, String::new(), "ok");
        Ok(())
    }

    fn new_op(&mut self) -> OpId {
        let op = OpId(self.next_op);
        self.next_op += 1;
        op
    }

    pub fn register(&mut self, ip: Ip, name: &Hostname) -> Result<OpId, SimError> {
        let op = self.new_op();
        self.with_node(ip, |n, ctx| n.start_register(ctx, Some(op), name))?;
        Ok(op)
    }

    pub fn update(&mut self, ip: Ip, name: &Hostname, new_ip: Ip) -> Result<OpId, SimError> {
        let op = self.new_op();
        self.with_node(ip, |n, ctx| n.start_update(ctx, Some(op), name, new_ip))?;
        Ok(op)
    }

    pub fn resolve(&mut self, ip: Ip, name: &Hostname, service: u16) -> Result<OpId, SimError> {
        let op = self.new_op();
        self.with_node(ip, |n, ctx| n.start_resolve(ctx, op, name, service))?;
        Ok(op)
    }

    pub fn delegated_resolve(&mut self, ip: Ip, name: &Hostname) -> Result<OpId, SimError> {
        let op = self.new_op();
        self.with_node(ip, |n, ctx| n.start_delegated_resolve(ctx, op, name))?;
        Ok(op)
    }

    pub fn reverse(&mut self, ip: Ip, target: Ip) -> Result<OpId, SimError> {
        let op = self.new_op();
        self.with_node(ip, |n, ctx| n.start_reverse(ctx, op, target))?;
        Ok(op)
    }

    pub fn snsd_change(&mut self, ip: Ip, name: &Hostname, change: SnsdChange) -> Result<OpId, SimError> {
        let op = self.new_op();
        self.with_node(ip, |n, ctx| n.start_snsd(ctx, Some(op), name, change))?;
        Ok(op)
    }

    /// Sends `body` from `from` to `to` as is; the reply becomes the outcome.
    pub fn inject_request(&mut self, from: Ip, to: Ip, body: Body) -> Result<OpId, SimError> {
        let op = self.new_op();
        self.with_node(from, |n, ctx| n.start_probe(ctx, op, to, body))?;
        Ok(op)
    }

    /// Puts a raw message on the wire.
    pub fn inject(&mut self, env: Envelope) {
        self.schedule(self.cfg.link_delay, Event::Deliver(env));
    }

    /// Runs one event. Returns false when the queue is empty.
    pub fn step(&mut self) -> bool {
        let Some(((at, _), event)) = self.queue.pop_first() else {
            return false;
        };
        self.now = at;
        match event {
            Event::Deliver(env) => {
                self.inflight -= 1;
                self.deliver(env);
            }
            Event::Timeout { node, id } => {
                self.inflight -= 1;
                if self.membership.is_alive(node) {
                    let _ = self.with_node(node, |n, ctx| n.on_timeout(ctx, id));
                }
            }
            Event::Sweep => {
                self.sweep();
                self.schedule(self.cfg.sweep_interval, Event::Sweep);
            }
            Event::Challenge => {
                let live: Vec<Ip> = self.membership.live().collect();
                for ip in live {
                    let _ = self.with_node(ip, |n, ctx| n.start_challenges(ctx));
                }
                self.schedule(self.cfg.challenge_interval, Event::Challenge);
            }
        }
        true
    }

    /// Runs every event scheduled at or before `t`, then sets the clock to `t`.
    pub fn advance_to(&mut self, t: Time) {
        while self.queue.first_key_value().is_some_and(|((at, _), _)| *at <= t) {
            self.step();
        }
        self.now = self.now.max(t);
    }

    pub fn advance_by(&mut self, dt: Time) {
        self.advance_to(self.now + dt);
    }

    /// Runs until no message or timer is pending. Periodic sweeps that fall
    /// inside that window still run.
    pub fn run_until_idle(&mut self) {
        while self.inflight > 0 {
            self.step();
        }
    }

    fn schedule(&mut self, delay: Time, event: Event) {
        self.schedule_at(self.now + delay, event);
    }

    fn schedule_at(&mut self, at: Time, event: Event) {
        if matches!(event, Event::Deliver(_) | Event::Timeout { .. }) {
            self.inflight += 1;
        }
        self.seq += 1;
        self.queue.insert((at, self.seq), event);
    }

    /// Appends a line to the event log at the current time.
    pub fn note(&mut self, kind: &str, actor: Ip, detail: String, verdict: &str) {
        self.push_log(kind, actor, detail, verdict);
    }

    fn push_log(&mut self, kind: &str, actor: Ip, detail: String, verdict: &str) {
        self.log.push(LogLine { at: self.now, kind: kind.to_string(), actor, detail, verdict: verdict.to_string() });
    }

    fn with_node(&mut self, ip: Ip, f: impl FnOnce(&mut Node, &mut Ctx)) -> Result<(), SimError> {
        if !self.membership.is_alive(ip) {
            return Err(SimError::NotAlive(ip));
        }
        let node = self.nodes.get_mut(&ip).ok_or(SimError::NotAlive(ip))?;
        let mut ctx = Ctx::new(self.now, self.cfg.link_delay, &self.membership, &mut self.rng);
        f(node, &mut ctx);
        let effects = ctx.effects;
        self.apply(ip, effects);
        Ok(())
    }

    fn apply(&mut self, ip: Ip, effects: Effects) {
        let Effects { sends, timers, log, outcomes } = effects;
        self.log.extend(log);
        self.outcomes.extend(outcomes);
        for env in sends {
            self.schedule(self.cfg.link_delay, Event::Deliver(env));
        }
        for (at, id) in timers {
            self.schedule_at(at, Event::Timeout { node: ip, id });
        }
    }

    fn deliver(&mut self, env: Envelope) {
        self.delivered += 1;
        let to = env.to;
        if !self.membership.is_alive(to) {
            let detail = format!("{} from {}", env.msg.body.kind(), env.from);
            self.push_log("drop", to, detail, "unreachable");
            return;
        }
        if self.cfg.capture {
            self.captured.push((self.now, env.clone()));
        }
        let trace = self.cfg.trace.then(|| format!("{} from {} #{}", env.msg.body.kind(), env.from, env.msg.id));
        let node = self.nodes.get_mut(&to).expect("alive node exists");
        let mut ctx = Ctx::new(self.now, self.cfg.link_delay, &self.membership, &mut self.rng);
        let verdict = node.handle(&mut ctx, env.from, env.msg);
        let effects = ctx.effects;
        if let Some(detail) = trace {
            self.push_log("deliver", to, detail, &verdict);
        }
        self.apply(to, effects);
    }

    /// Expires registrations, counter keys and cache rows on every live node.
    fn sweep(&mut self) {
        let now = self.now;
        let mut lines = Vec::new();
        for ip in self.membership.live().collect::<Vec<_>>() {
            let node = self.nodes.get_mut(&ip).expect("alive node exists");
            for e in node.registry.expire_sweep(now) {
                let promoted = match e.promoted {
                    Some(pk) => format!(" promoted {}", pk.fingerprint()),
                    None => String::new(),
                };
                let detail = format!("{:08x} key {}{promoted}", e.hname_hash.0, e.expired.fingerprint());
                lines.push(LogLine { at: now, kind: "expire".into(), actor: ip, detail, verdict: "ok".into() });
            }
            for pk in node.counter.counter_expire_sweep(now) {
                let detail = format!("key {}", pk.fingerprint());
                lines.push(LogLine { at: now, kind: "counter-expire".into(), actor: ip, detail, verdict: "ok".into() });
            }
            node.cache.purge(now);
        }
        self.log.extend(lines);
    }

    /// Random live node, for tests and tools that need one.
    pub fn random_live(&mut self) -> Option<Ip> {
        let live: Vec<Ip> = self.membership.live().collect();
        if live.is_empty() {
            None
        } else {
            Some(live[self.rng.gen_range(0..live.len())])
        }
    }
}
