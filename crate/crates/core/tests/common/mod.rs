#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use andna_core::scenario::{parse_scenario, run_scenario, RunReport};
use andna_core::{GnodeId, ServiceTable, Sim, SimConfig};

pub fn corpus_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

pub fn corpus() -> Vec<PathBuf> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(corpus_dir())
        .expect("scenarios directory")
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "scn"))
        .collect();
    out.sort();
    out
}

pub fn run_file(path: &Path, seed: u64) -> (Sim, RunReport) {
    let text = std::fs::read_to_string(path).unwrap();
    let cmds = parse_scenario(&text, &ServiceTable::builtin()).unwrap();
    run_scenario(&cmds, SimConfig { seed, ..SimConfig::default() }, path.parent().unwrap())
}

/// First scenario line containing `needle`.
pub fn line_of(path: &Path, needle: &str) -> usize {
    let text = std::fs::read_to_string(path).unwrap();
    text.lines()
        .position(|l| l.contains(needle))
        .map(|i| i + 1)
        .unwrap_or_else(|| panic!("{needle:?} not in {}", path.display()))
}

const OP_KINDS: &[&str] =
    &["register", "update", "resolve", "resolve-delegated", "reverse", "snsd-register", "snsd-delete", "challenge"];

/// Results of client operations, which must not depend on the seed. Completion
/// times are left out: keys come from the seed, and so does the counter gnode
/// a request has to visit.
pub fn verdict_lines(sim: &Sim) -> Vec<String> {
    sim.log()
        .iter()
        .filter(|l| OP_KINDS.contains(&l.kind.as_str()))
        .map(|l| format!("{}\t{}\t{}\t{}", l.kind, l.actor, l.detail, l.verdict))
        .collect()
}

/// Gnodes whose live members disagree on their registry or counter dumps.
pub fn replica_disagreements(sim: &Sim) -> Vec<String> {
    let mut by_gnode: BTreeMap<GnodeId, Vec<(String, String)>> = BTreeMap::new();
    for n in sim.live_nodes() {
        by_gnode.entry(n.gnode()).or_default().push((n.registry.dump(), n.counter.dump()));
    }
    by_gnode
        .into_iter()
        .filter(|(_, dumps)| dumps.iter().any(|d| d != &dumps[0]))
        .map(|(g, _)| format!("{:06x}", g.value()))
        .collect()
}
