//! Scenario files: timed commands driving a [`Sim`].
//!
//! ```text
//! # comment
//! @0      join 10.0.0.1
//! @1      register 10.0.0.1 "netsukuku"
//! @15d    update 10.0.0.1 "netsukuku"
//! @15d+60 resolve 10.0.0.2 "netsukuku" http
//! ```
//!
//! Times are `<n>[s|m|h|d]` terms joined by `+` and must not decrease.
//! Arguments are whitespace separated; double quotes group a hostname that
//! contains spaces.

use std::fmt;
use std::path::{Path, PathBuf};

use crate::identity::PubKey;
use crate::idspace::{Hostname, Ip};
use crate::netsim::{LogLine, Sim, SimConfig};
use crate::protocol::{OpId, Outcome};
use crate::registry::Time;
use crate::snsd::{parse_snsd_nodes, ServiceTable, SnsdConfigLine};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Verb {
    Join(Ip),
    Leave(Ip),
    Register {
        node: Ip,
        name: Hostname,
    },
    /// Without `new_ip` the node refreshes with its own address.
    Update {
        node: Ip,
        name: Hostname,
        new_ip: Option<Ip>,
    },
    Resolve {
        node: Ip,
        name: Hostname,
        service: u16,
        delegate: bool,
    },
    Reverse {
        node: Ip,
        target: Ip,
    },
    SnsdLoad {
        node: Ip,
        path: PathBuf,
    },
    /// One `snsd_nodes` line; `key_of` trusts the key of that live node.
    SnsdRegister {
        node: Ip,
        line: SnsdConfigLine,
        key_of: Option<Ip>,
    },
    Advance,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Command {
    pub line: usize,
    pub at: Time,
    pub verb: Verb,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScenarioError {
    pub line: usize,
    pub message: String,
}

impl fmt::Display for ScenarioError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}: {}", self.line, self.message)
    }
}

impl std::error::Error for ScenarioError {}

pub fn parse_time(text: &str) -> Result<Time, String> {
    let mut total: Time = 0;
    for term in text.split('+') {
        let (digits, unit) = match term.char_indices().find(|(_, c)| !c.is_ascii_digit()) {
            Some((i, _)) => term.split_at(i),
            None => (term, ""),
        };
        let n: Time = digits.parse().map_err(|_| format!("bad time {text:?}"))?;
        let scale = match unit {
            "" | "s" => 1,
            "m" => 60,
            "h" => 3_600,
            "d" => 86_400,
            _ => return Err(format!("bad time unit {unit:?}")),
        };
        total = n
            .checked_mul(scale)
            .and_then(|v| total.checked_add(v))
            .ok_or_else(|| format!("time {text:?} overflows"))?;
    }
    Ok(total)
}

fn tokenize(text: &str) -> Result<Vec<String>, String> {
    let mut out = Vec::new();
    let mut chars = text.chars().peekable();
    while let Some(&c) = chars.peek() {
        if c.is_whitespace() {
            chars.next();
        } else if c == '"' {
            chars.next();
            let mut tok = String::new();
            loop {
                match chars.next() {
                    Some('"') => break,
                    Some(c) => tok.push(c),
                    None => return Err("unterminated quote".into()),
                }
            }
            out.push(tok);
        } else {
            let mut tok = String::new();
            while let Some(&c) = chars.peek() {
                if c.is_whitespace() {
                    break;
                }
                tok.push(c);
                chars.next();
            }
            out.push(tok);
        }
    }
    Ok(out)
}

fn ip(arg: Option<&String>, what: &str) -> Result<Ip, String> {
    let arg = arg.ok_or_else(|| format!("missing {what}"))?;
    arg.parse().map_err(|_| format!("bad {what} {arg:?}"))
}

fn hostname(arg: Option<&String>) -> Result<Hostname, String> {
    let arg = arg.ok_or("missing hostname")?;
    Hostname::new(arg.as_bytes()).map_err(|e| e.to_string())
}

fn parse_verb(args: &[String], services: &ServiceTable) -> Result<Verb, String> {
    let (verb, rest) = args.split_first().ok_or("missing command")?;
    let expect = |n: usize| {
        if rest.len() > n {
            Err(format!("{verb}: unexpected argument {:?}", rest[n]))
        } else {
            Ok(())
        }
    };
    Ok(match verb.as_str() {
        "join" => {
            expect(1)?;
            Verb::Join(ip(rest.first(), "node ip")?)
        }
        "leave" => {
            expect(1)?;
            Verb::Leave(ip(rest.first(), "node ip")?)
        }
        "register" => {
            expect(2)?;
            Verb::Register { node: ip(rest.first(), "node ip")?, name: hostname(rest.get(1))? }
        }
        "update" => {
            expect(3)?;
            let new_ip = rest.get(2).map(|a| ip(Some(a), "new ip")).transpose()?;
            Verb::Update { node: ip(rest.first(), "node ip")?, name: hostname(rest.get(1))?, new_ip }
        }
        "resolve" => {
            let node = ip(rest.first(), "node ip")?;
            let name = hostname(rest.get(1))?;
            let mut service = 0;
            let mut delegate = false;
            for arg in &rest[2..] {
                if arg == "delegate" {
                    delegate = true;
                } else if let Ok(n) = arg.parse::<u16>() {
                    service = n;
                } else {
                    service = services.lookup(arg).ok_or_else(|| format!("unknown service {arg:?}"))?;
                }
            }
            if delegate && service != 0 {
                return Err("delegated resolution is for service 0 only".into());
            }
            Verb::Resolve { node, name, service, delegate }
        }
        "reverse" => {
            expect(2)?;
            Verb::Reverse { node: ip(rest.first(), "node ip")?, target: ip(rest.get(1), "target ip")? }
        }
        "snsd-load" => {
            expect(2)?;
            let path = rest.get(1).ok_or("missing path")?;
            Verb::SnsdLoad { node: ip(rest.first(), "node ip")?, path: PathBuf::from(path) }
        }
        "snsd-register" => {
            expect(3)?;
            let node = ip(rest.first(), "node ip")?;
            let text = rest.get(1).ok_or("missing snsd line")?;
            let parsed = parse_snsd_nodes(text.as_bytes(), services);
            if let Some(d) = parsed.diagnostics.first() {
                return Err(d.message.clone());
            }
            let (_, line) = parsed.lines.into_iter().next().ok_or("empty snsd line")?;
            let key_of = match rest.get(2) {
                Some(arg) => {
                    let v = arg.strip_prefix("key-of=").ok_or_else(|| format!("unexpected argument {arg:?}"))?;
                    Some(ip(Some(&v.to_string()), "key-of ip")?)
                }
                None => None,
            };
            Verb::SnsdRegister { node, line, key_of }
        }
        "advance" => {
            expect(0)?;
            Verb::Advance
        }
        other => return Err(format!("unknown command {other:?}")),
    })
}

pub fn parse_scenario(text: &str, services: &ServiceTable) -> Result<Vec<Command>, ScenarioError> {
    let mut out = Vec::new();
    let mut last = 0;
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let err = |message: String| ScenarioError { line, message };
        let body = raw.split_once('#').map_or(raw, |(b, _)| b).trim();
        if body.is_empty() {
            continue;
        }
        let (stamp, rest) = body.split_once(char::is_whitespace).unwrap_or((body, ""));
        let stamp = stamp.strip_prefix('@').ok_or_else(|| err("expected @<time>".into()))?;
        let at = parse_time(stamp).map_err(err)?;
        if at < last {
            return Err(err(format!("time {at} goes backwards (previous {last})")));
        }
        last = at;
        let args = tokenize(rest).map_err(err)?;
        let verb = parse_verb(&args, services).map_err(err)?;
        out.push(Command { line, at, verb });
    }
    Ok(out)
}

#[derive(Debug, Default, Clone, PartialEq, Eq)]
pub struct RunReport {
    /// Commands that could not run at all, such as acting on a dead node.
    pub command_errors: usize,
    /// Operations that finished with a rejection or never finished.
    pub rejections: usize,
    /// Operations started, with the scenario line that started each.
    pub ops: Vec<(usize, OpId)>,
}

impl RunReport {
    /// Outcomes of the operations started on scenario line `line`.
    pub fn outcomes_at<'a>(&'a self, sim: &'a Sim, line: usize) -> impl Iterator<Item = Option<&'a Outcome>> + 'a {
        self.ops.iter().filter(move |(l, _)| *l == line).map(|(_, op)| sim.outcome(*op))
    }
}

/// Runs `commands` to quiescence. Relative paths resolve against `base_dir`.
pub fn run_scenario(commands: &[Command], cfg: SimConfig, base_dir: &Path) -> (Sim, RunReport) {
    let services = ServiceTable::builtin();
    let mut sim = Sim::new(cfg);
    let mut report = RunReport::default();
    for cmd in commands {
        sim.advance_to(cmd.at);
        let mut ops = Vec::new();
        let result = run_one(&mut sim, cmd, &services, base_dir, &mut ops);
        report.ops.extend(ops.into_iter().map(|op| (cmd.line, op)));
        if let Err(e) = result {
            sim.note("error", Ip(0), format!("line {}: {e}", cmd.line), "error");
            report.command_errors += 1;
        }
    }
    sim.run_until_idle();
    report.rejections =
        report.ops.iter().filter(|(_, op)| matches!(sim.outcome(*op), Some(Outcome::Rejected(_)) | None)).count();
    (sim, report)
}

fn run_one(
    sim: &mut Sim,
    cmd: &Command,
    services: &ServiceTable,
    base_dir: &Path,
    ops: &mut Vec<OpId>,
) -> Result<(), String> {
    let e = |e: crate::netsim::SimError| e.to_string();
    match &cmd.verb {
        Verb::Join(ip) => sim.join_node(*ip).map_err(e)?,
        Verb::Leave(ip) => sim.leave_node(*ip).map_err(e)?,
        Verb::Register { node, name } => ops.push(sim.register(*node, name).map_err(e)?),
        Verb::Update { node, name, new_ip } => ops.push(sim.update(*node, name, new_ip.unwrap_or(*node)).map_err(e)?),
        Verb::Resolve { node, name, service, delegate } => {
            let op = if *delegate { sim.delegated_resolve(*node, name) } else { sim.resolve(*node, name, *service) };
            ops.push(op.map_err(e)?);
        }
        Verb::Reverse { node, target } => ops.push(sim.reverse(*node, *target).map_err(e)?),
        Verb::SnsdLoad { node, path } => {
            let path = base_dir.join(path);
            let text = std::fs::read(&path).map_err(|err| format!("{}: {err}", path.display()))?;
            let parsed = parse_snsd_nodes(&text, services);
            let dir = path.parent().unwrap_or(base_dir);
            let mut failed = !parsed.diagnostics.is_empty();
            for d in &parsed.diagnostics {
                sim.note("snsd-load", *node, format!("{}: {d}", path.display()), "error");
            }
            for (n, line) in &parsed.lines {
                let key = match &line.pub_key_file {
                    Some(f) => match PubKey::read_file(&dir.join(f)) {
                        Ok(k) => Some(k),
                        Err(err) => {
                            sim.note("snsd-load", *node, format!("{}: line {n}: {err}", path.display()), "error");
                            failed = true;
                            continue;
                        }
                    },
                    None => None,
                };
                ops.push(sim.snsd_change(*node, &line.hostname, line.to_change(key)).map_err(e)?);
            }
            if failed {
                return Err(format!("{} has invalid lines", path.display()));
            }
        }
        Verb::SnsdRegister { node, line, key_of } => {
            let key = match (key_of, &line.pub_key_file) {
                (Some(ip), _) => {
                    let peer = sim.node(*ip).ok_or_else(|| format!("{ip} is not alive"))?;
                    Some(peer.keys().public().clone())
                }
                (None, Some(f)) => Some(PubKey::read_file(&base_dir.join(f)).map_err(|err| err.to_string())?),
                (None, None) => None,
            };
            ops.push(sim.snsd_change(*node, &line.hostname, line.to_change(key)).map_err(e)?);
        }
        Verb::Advance => {}
    }
    Ok(())
}

/// Renders log lines one per row.
pub fn render_log(lines: &[LogLine]) -> String {
    let mut out = String::new();
    for l in lines {
        out.push_str(&l.to_string());
        out.push('\n');
    }
    out
}
