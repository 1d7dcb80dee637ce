use andna_core::protocol::{Body, RegisterReq, UpdateReq};
use andna_core::{
    Hostname, Ip, OpId, Outcome, Placement, Rejection, Sim, SimConfig, SnsdChange, SnsdRecord, Target,
    ZeroRecordPolicy, HIBERNATION_SECS,
};

const DAY: u64 = 86_400;

fn h(s: &str) -> Hostname {
    Hostname::new(s).unwrap()
}

fn ip(s: &str) -> Ip {
    s.parse().unwrap()
}

fn sim_with(nodes: &[&str]) -> Sim {
    let mut sim = Sim::new(SimConfig { seed: 7, ..SimConfig::default() });
    for n in nodes {
        sim.join_node(ip(n)).unwrap();
    }
    sim
}

fn done(sim: &mut Sim, op: OpId) -> Outcome {
    sim.run_until_idle();
    sim.outcome(op).cloned().expect("operation finished")
}

fn main_ip(sim: &mut Sim, from: Ip, name: &str) -> Result<Ip, Rejection> {
    let op = sim.resolve(from, &h(name), 0).unwrap();
    match done(sim, op) {
        Outcome::Resolved(r) => r.main_ip().ok_or(Rejection::NotFound),
        Outcome::Rejected(r) => Err(r),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn register_then_resolve_everywhere() {
    let mut sim = sim_with(&["10.0.0.1", "10.0.0.2", "200.0.0.1", "200.0.0.2", "77.1.1.1"]);
    let op = sim.register(ip("10.0.0.1"), &h("netsukuku")).unwrap();
    assert_eq!(done(&mut sim, op), Outcome::Registered(Placement::Head));
    for from in ["10.0.0.2", "200.0.0.1", "77.1.1.1"] {
        assert_eq!(main_ip(&mut sim, ip(from), "netsukuku"), Ok(ip("10.0.0.1")));
    }
    // every node of the hash gnode holds the same entry
    let hash = h("netsukuku").hash();
    let g = sim.membership().rounded(hash).unwrap();
    let copies: Vec<_> = sim.live_nodes().filter(|n| n.gnode() == g).map(|n| n.registry.get(hash).cloned()).collect();
    assert!(copies.len() >= 2);
    assert!(copies.iter().all(|c| c.is_some() && c == &copies[0]));
    assert_eq!(main_ip(&mut sim, ip("77.1.1.1"), "nobody"), Err(Rejection::NotFound));
}

#[test]
fn cached_answer_sends_nothing() {
    let mut sim = sim_with(&["10.0.0.1", "200.0.0.1", "77.1.1.1"]);
    let op = sim.register(ip("10.0.0.1"), &h("netsukuku")).unwrap();
    done(&mut sim, op);
    main_ip(&mut sim, ip("77.1.1.1"), "netsukuku").unwrap();
    let before = sim.delivered();
    let op = sim.resolve(ip("77.1.1.1"), &h("netsukuku"), 0).unwrap();
    let Outcome::Resolved(r) = done(&mut sim, op) else { panic!() };
    assert!(r.from_cache);
    assert_eq!(sim.delivered(), before);
}

#[test]
fn sixth_registrant_is_refused() {
    let names = ["10.0.0.1", "10.0.1.1", "10.0.2.1", "10.0.3.1", "10.0.4.1", "10.0.5.1"];
    let mut sim = sim_with(&names);
    let mut got = Vec::new();
    for (i, n) in names.iter().enumerate() {
        sim.advance_to(i as u64 * 10);
        let op = sim.register(ip(n), &h("pippo")).unwrap();
        got.push(done(&mut sim, op));
    }
    for (i, o) in got.iter().take(5).enumerate() {
        assert_eq!(*o, Outcome::Registered(Placement::at(i)));
    }
    assert_eq!(got[5], Outcome::Rejected(Rejection::QueueFull));
    // idempotent for a key already queued
    let op = sim.register(ip("10.0.2.1"), &h("pippo")).unwrap();
    assert_eq!(done(&mut sim, op), Outcome::Registered(Placement::at(2)));
}

#[test]
fn head_expiry_promotes_next_in_queue() {
    let mut sim = sim_with(&["10.0.0.1", "20.0.0.1", "200.0.0.1"]);
    let op = sim.register(ip("10.0.0.1"), &h("pippo")).unwrap();
    done(&mut sim, op);
    sim.advance_to(100);
    let op = sim.register(ip("20.0.0.1"), &h("pippo")).unwrap();
    assert_eq!(done(&mut sim, op), Outcome::Registered(Placement::Queued(1)));
    // queued slot stays alive through updates; the head does nothing
    sim.advance_to(20 * DAY);
    let op = sim.update(ip("20.0.0.1"), &h("pippo"), ip("20.0.0.1")).unwrap();
    assert_eq!(done(&mut sim, op), Outcome::Updated);
    sim.advance_to(29 * DAY);
    assert_eq!(main_ip(&mut sim, ip("200.0.0.1"), "pippo"), Ok(ip("10.0.0.1")));
    // the cached answer dies with the head's registration
    sim.advance_to(31 * DAY);
    assert_eq!(main_ip(&mut sim, ip("200.0.0.1"), "pippo"), Ok(ip("20.0.0.1")));
    assert!(sim.log().iter().any(|l| l.kind == "expire" && l.detail.contains("promoted")));
}

#[test]
fn updates_are_ordered_and_signed() {
    let mut sim = sim_with(&["10.0.0.1", "200.0.0.1", "77.0.0.1"]);
    let owner = ip("10.0.0.1");
    let op = sim.register(owner, &h("netsukuku")).unwrap();
    done(&mut sim, op);
    sim.advance_to(DAY);
    let op = sim.update(owner, &h("netsukuku"), ip("10.0.0.9")).unwrap();
    assert_eq!(done(&mut sim, op), Outcome::Updated);
    assert_eq!(main_ip(&mut sim, ip("77.0.0.1"), "netsukuku"), Ok(ip("10.0.0.9")));

    let hash = h("netsukuku").hash();
    let y = sim.membership().members(sim.membership().rounded(hash).unwrap()).next().unwrap();
    let keys = sim.node(owner).unwrap().keys().clone();
    let probe = |sim: &mut Sim, body: Body| {
        let op = sim.inject_request(owner, y, body).unwrap();
        done(sim, op)
    };
    let replay = UpdateReq::new(&keys, hash, ip("10.0.0.9"), 1);
    assert_eq!(probe(&mut sim, Body::Update(replay)), Outcome::Rejected(Rejection::StaleId));
    let gap = UpdateReq::new(&keys, hash, ip("10.0.0.9"), 3);
    assert_eq!(probe(&mut sim, Body::Update(gap)), Outcome::Rejected(Rejection::GapId));
    let mut forged = UpdateReq::new(&keys, hash, ip("10.0.0.9"), 2);
    forged.new_ip = ip("66.6.6.6");
    assert_eq!(probe(&mut sim, Body::Update(forged)), Outcome::Rejected(Rejection::BadSignature));
    let stranger = sim.node(ip("77.0.0.1")).unwrap().keys().clone();
    let theft = UpdateReq::new(&stranger, hash, ip("77.0.0.1"), 2);
    assert_eq!(probe(&mut sim, Body::Update(theft)), Outcome::Rejected(Rejection::UnknownKey));
    // wrong gnode
    let req = RegisterReq::new(&keys, hash, owner);
    let op = sim.inject_request(owner, ip("77.0.0.1"), Body::Register(req)).unwrap();
    assert_eq!(done(&mut sim, op), Outcome::Rejected(Rejection::WrongGnode));
}

#[test]
fn reverse_lists_owned_names() {
    let mut sim = sim_with(&["10.0.0.1", "200.0.0.1"]);
    for n in ["netsukuku", "angelica"] {
        let op = sim.register(ip("10.0.0.1"), &h(n)).unwrap();
        done(&mut sim, op);
    }
    let op = sim.reverse(ip("200.0.0.1"), ip("10.0.0.1")).unwrap();
    assert_eq!(done(&mut sim, op), Outcome::Reverse(vec![h("angelica"), h("netsukuku")]));
    let op = sim.reverse(ip("200.0.0.1"), ip("10.9.9.9")).unwrap();
    assert_eq!(done(&mut sim, op), Outcome::Rejected(Rejection::Unreachable));
}

#[test]
fn delegated_resolution_fills_both_caches() {
    let mut sim = sim_with(&["10.0.0.1", "50.0.0.1", "50.0.0.2", "200.0.0.1"]);
    let op = sim.register(ip("10.0.0.1"), &h("netsukuku")).unwrap();
    done(&mut sim, op);
    let op = sim.delegated_resolve(ip("50.0.0.1"), &h("netsukuku")).unwrap();
    let Outcome::Resolved(r) = done(&mut sim, op) else { panic!() };
    assert_eq!(r.main_ip(), Some(ip("10.0.0.1")));
    let hash = h("netsukuku").hash();
    assert!(sim.node(ip("50.0.0.1")).unwrap().cache.get(hash, sim.now()).is_some());
    assert!(sim.node(ip("50.0.0.2")).unwrap().cache.get(hash, sim.now()).is_some());
    // alone in its gnode: falls back to a direct lookup
    let op = sim.delegated_resolve(ip("200.0.0.1"), &h("netsukuku")).unwrap();
    let Outcome::Resolved(r) = done(&mut sim, op) else { panic!() };
    assert_eq!(r.main_ip(), Some(ip("10.0.0.1")));
}

#[test]
fn new_gnode_pulls_entry_and_blocks_theft() {
    // netsukuku hashes into gnode 8b38ae; 10.0.0.0 and 200.0.0.0 are far away
    let mut sim = sim_with(&["10.0.0.1", "10.0.0.2", "200.0.0.1", "200.0.0.2"]);
    let owner = ip("10.0.0.1");
    let op = sim.register(owner, &h("netsukuku")).unwrap();
    done(&mut sim, op);
    // a gnode right next to the hash appears
    sim.advance_to(DAY);
    sim.join_node(ip("139.56.174.1")).unwrap();
    sim.join_node(ip("139.56.174.2")).unwrap();
    let op = sim.register(ip("200.0.0.2"), &h("netsukuku")).unwrap();
    assert_eq!(done(&mut sim, op), Outcome::Rejected(Rejection::StolenNameBlocked));
    assert_eq!(main_ip(&mut sim, ip("200.0.0.2"), "netsukuku"), Ok(owner));
    let hash = h("netsukuku").hash();
    for n in ["139.56.174.1", "139.56.174.2"] {
        assert_eq!(sim.node(ip(n)).unwrap().registry.lookup(hash).unwrap().ip, owner);
    }
    // the owner keeps updating at the new gnode
    let op = sim.update(owner, &h("netsukuku"), owner).unwrap();
    assert_eq!(done(&mut sim, op), Outcome::Updated);
}

#[test]
fn new_gnode_answers_lookups_by_transfer() {
    let mut sim = sim_with(&["10.0.0.1", "200.0.0.1"]);
    let op = sim.register(ip("10.0.0.1"), &h("netsukuku")).unwrap();
    done(&mut sim, op);
    sim.join_node(ip("139.56.174.1")).unwrap();
    sim.join_node(ip("66.0.0.1")).unwrap();
    assert_eq!(main_ip(&mut sim, ip("66.0.0.1"), "netsukuku"), Ok(ip("10.0.0.1")));
    assert!(sim.log().iter().any(|l| l.kind == "transfer" && l.actor == ip("139.56.174.1")));
}

#[test]
fn snsd_records_resolve_and_chain() {
    let mut sim = sim_with(&["10.0.0.1", "10.0.0.2", "200.0.0.1", "30.0.0.1"]);
    let owner = ip("10.0.0.1");
    for n in ["angelica", "depausceve"] {
        let op = sim.register(if n == "angelica" { owner } else { ip("30.0.0.1") }, &h(n)).unwrap();
        done(&mut sim, op);
    }
    let rec =
        SnsdRecord { target: Target::Host(h("depausceve")), service: 80, priority: 1, weight: 1, trusted_pubkey: None };
    let op = sim.snsd_change(owner, &h("angelica"), SnsdChange::Add(rec)).unwrap();
    assert_eq!(done(&mut sim, op), Outcome::SnsdApplied);
    let op = sim.resolve(ip("200.0.0.1"), &h("angelica"), 80).unwrap();
    let Outcome::Resolved(r) = done(&mut sim, op) else { panic!() };
    assert_eq!(r.records.len(), 1);
    assert_eq!(r.records[0].ip, Some(ip("30.0.0.1")));
    // zero record policy shows on the main row
    let op = sim
        .snsd_change(owner, &h("angelica"), SnsdChange::SetZero(ZeroRecordPolicy { priority: 3, weight: 9 }))
        .unwrap();
    assert_eq!(done(&mut sim, op), Outcome::SnsdApplied);
    let op = sim.resolve(ip("10.0.0.2"), &h("angelica"), 0).unwrap();
    let Outcome::Resolved(r) = done(&mut sim, op) else { panic!() };
    assert_eq!((r.records[0].ip, r.records[0].priority, r.records[0].weight), (Some(owner), 3, 9));
    // someone else cannot add records
    let rec =
        SnsdRecord { target: Target::Ip(ip("200.0.0.1")), service: 22, priority: 1, weight: 1, trusted_pubkey: None };
    let op = sim.snsd_change(ip("200.0.0.1"), &h("angelica"), SnsdChange::Add(rec)).unwrap();
    assert_eq!(done(&mut sim, op), Outcome::Rejected(Rejection::NotOwner));
}

#[test]
fn failed_challenge_deletes_record() {
    // angelica lives in 10.0.0.0; the trusted node sits elsewhere
    let mut sim = sim_with(&["10.0.0.1", "200.0.0.1", "150.0.0.1"]);
    let owner = ip("10.0.0.1");
    let op = sim.register(owner, &h("angelica")).unwrap();
    done(&mut sim, op);
    let key = sim.node(ip("150.0.0.1")).unwrap().keys().public().clone();
    let rec = SnsdRecord {
        target: Target::Ip(ip("150.0.0.1")),
        service: 22,
        priority: 1,
        weight: 1,
        trusted_pubkey: Some(key),
    };
    let op = sim.snsd_change(owner, &h("angelica"), SnsdChange::Add(rec)).unwrap();
    assert_eq!(done(&mut sim, op), Outcome::SnsdApplied);
    sim.advance_to(DAY + 100);
    let passes = sim.log().iter().filter(|l| l.kind == "challenge" && l.verdict == "pass").count();
    assert_eq!(passes, 1);
    // trusted node goes away; the next round removes its record
    sim.leave_node(ip("150.0.0.1")).unwrap();
    sim.advance_to(2 * DAY + 100);
    assert!(sim.log().iter().any(|l| l.kind == "challenge" && l.verdict == "fail"));
    let op = sim.resolve(ip("200.0.0.1"), &h("angelica"), 22).unwrap();
    let Outcome::Resolved(r) = done(&mut sim, op) else { panic!() };
    assert!(r.records.is_empty());
}

#[test]
fn runs_are_reproducible() {
    let run = |seed| {
        let mut sim = Sim::new(SimConfig { seed, trace: true, ..SimConfig::default() });
        for n in ["10.0.0.1", "10.0.0.2", "10.0.0.3", "200.0.0.1", "200.0.0.2"] {
            sim.join_node(ip(n)).unwrap();
        }
        for n in ["a", "b", "c", "netsukuku"] {
            sim.register(ip("10.0.0.2"), &h(n)).unwrap();
        }
        sim.advance_to(HIBERNATION_SECS + DAY);
        sim.log().iter().map(|l| l.to_string()).collect::<Vec<_>>()
    };
    assert_eq!(run(3), run(3));
    assert_ne!(run(3), run(4));
}
