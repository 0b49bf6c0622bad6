//! Environment generation and trajectory sampling.
//!
//! Environments are finite lattices (4-connected square or 6-connected
//! hexagonal) whose nodes carry stimulus ids drawn i.i.d. uniform with
//! replacement, so the same stimulus can appear at several nodes
//! (aliasing is intended). Actions leaving the lattice are self-loops,
//! keeping the action set identical at every node. Node coordinates exist
//! for analysis only; the agent observes nothing but stimuli and actions.

use crate::error::{Error, Result};
use crate::mix_seed;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::HashSet;
use std::fmt::Write as _;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Topology {
    Square4,
    Hex6,
}

impl Topology {
    pub fn n_actions(self) -> usize {
        match self {
            Topology::Square4 => 4,
            Topology::Hex6 => 6,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Topology::Square4 => "square4",
            Topology::Hex6 => "hex6",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "square4" => Some(Topology::Square4),
            "hex6" => Some(Topology::Hex6),
            _ => None,
        }
    }

    /// Action paired with `a` such that the two compose to the identity on
    /// interior nodes.
    pub fn opposite(self, a: usize) -> usize {
        match self {
            // N E S W
            Topology::Square4 => [2, 3, 0, 1][a],
            // E W SE NW NE SW
            Topology::Hex6 => [1, 0, 3, 2, 5, 4][a],
        }
    }
}

/// Square action ids.
pub const NORTH: usize = 0;
pub const EAST: usize = 1;
pub const SOUTH: usize = 2;
pub const WEST: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct Environment {
    pub id: u64,
    pub topology: Topology,
    pub width: usize,
    pub height: usize,
    pub n_stim: usize,
    pub seed: u64,
    /// adjacency[node * n_actions + action] = destination node.
    adjacency: Vec<u32>,
    stimulus: Vec<u16>,
    /// Lattice coordinates (axial for hex), used to derive cartesian
    /// positions for analysis.
    lattice: Vec<(i32, i32)>,
}

impl Environment {
    pub fn n_nodes(&self) -> usize {
        self.stimulus.len()
    }

    pub fn n_actions(&self) -> usize {
        self.topology.n_actions()
    }

    pub fn step(&self, node: usize, action: usize) -> usize {
        self.adjacency[node * self.n_actions() + action] as usize
    }

    pub fn stimulus_of(&self, node: usize) -> usize {
        self.stimulus[node] as usize
    }

    /// Cartesian position with unit lattice spacing.
    pub fn coord(&self, node: usize) -> (f64, f64) {
        let (q, r) = self.lattice[node];
        match self.topology {
            Topology::Square4 => (q as f64, r as f64),
            Topology::Hex6 => (q as f64 + 0.5 * r as f64, r as f64 * 3f64.sqrt() / 2.0),
        }
    }

    pub fn coords(&self) -> Vec<(f64, f64)> {
        (0..self.n_nodes()).map(|n| self.coord(n)).collect()
    }

    /// All actions stay in-lattice from this node. Action offsets are all
    /// nonzero, so a self-loop occurs iff the move was clamped at a
    /// boundary.
    pub fn is_interior(&self, node: usize) -> bool {
        (0..self.n_actions()).all(|a| self.step(node, a) != node)
    }

    /// Neighbor lists excluding self-loops, for component analysis.
    pub fn neighbors(&self) -> Vec<Vec<usize>> {
        (0..self.n_nodes())
            .map(|n| {
                let mut out: Vec<usize> = (0..self.n_actions())
                    .map(|a| self.step(n, a))
                    .filter(|&m| m != n)
                    .collect();
                out.sort_unstable();
                out.dedup();
                out
            })
            .collect()
    }
}

fn action_offset(topology: Topology, action: usize) -> (i32, i32) {
    match topology {
        Topology::Square4 => [(0, 1), (1, 0), (0, -1), (-1, 0)][action],
        Topology::Hex6 => [(1, 0), (-1, 0), (0, 1), (0, -1), (1, -1), (-1, 1)][action],
    }
}

/// Builds a `width x height` lattice patch of the given topology with
/// stimuli assigned i.i.d. uniform over `[0, n_stim)`. Deterministic for
/// fixed inputs; the environment id is the seed.
pub fn generate_environment(
    topology: Topology,
    width: usize,
    height: usize,
    n_stim: usize,
    seed: u64,
) -> Result<Environment> {
    if width < 2 || height < 2 {
        return Err(Error::Param(format!(
            "lattice must be at least 2x2, got {width}x{height}"
        )));
    }
    if n_stim < 2 {
        return Err(Error::Param(format!("need at least 2 stimuli, got {n_stim}")));
    }
    if n_stim > u16::MAX as usize {
        return Err(Error::Param(format!("too many stimuli: {n_stim}")));
    }
    let n_nodes = width * height;
    let n_actions = topology.n_actions();

    let lattice: Vec<(i32, i32)> = (0..n_nodes)
        .map(|n| ((n % width) as i32, (n / width) as i32))
        .collect();
    let index_of = |q: i32, r: i32| -> Option<usize> {
        if q < 0 || r < 0 || q >= width as i32 || r >= height as i32 {
            None
        } else {
            Some(r as usize * width + q as usize)
        }
    };

    let mut adjacency = vec![0u32; n_nodes * n_actions];
    for node in 0..n_nodes {
        let (q, r) = lattice[node];
        for action in 0..n_actions {
            let (dq, dr) = action_offset(topology, action);
            // Boundary actions are self-loops.
            let dest = index_of(q + dq, r + dr).unwrap_or(node);
            adjacency[node * n_actions + action] = dest as u32;
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let stimulus: Vec<u16> = (0..n_nodes)
        .map(|_| rng.random_range(0..n_stim) as u16)
        .collect();

    Ok(Environment {
        id: seed,
        topology,
        width,
        height,
        n_stim,
        seed,
        adjacency,
        stimulus,
        lattice,
    })
}

/// Per-step novelty flags, recomputable from the node trace.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FirstVisit {
    pub node_seen_before: bool,
    pub edge_seen_before: bool,
}

impl FirstVisit {
    /// A prediction at this step requires structural knowledge: the node
    /// was visited before but is entered over a never-traversed edge.
    pub fn is_zero_shot(self) -> bool {
        self.node_seen_before && !self.edge_seen_before
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub env_id: u64,
    /// Stimulus ids, one per step.
    pub observations: Vec<u16>,
    /// Action ids; `actions[t]` is taken after observing `observations[t]`.
    pub actions: Vec<u8>,
    /// Hidden node ids, for evaluation and analysis only.
    pub node_trace: Vec<u32>,
    pub first_visit: Vec<FirstVisit>,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }
}

/// Uniform random walk of `t` steps from a uniform random start node.
pub fn sample_trajectory(env: &Environment, t: usize, policy_seed: u64) -> Result<Episode> {
    if t < 1 {
        return Err(Error::Param("episode length must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(policy_seed);
    let mut node = rng.random_range(0..env.n_nodes());
    let mut observations = Vec::with_capacity(t);
    let mut actions = Vec::with_capacity(t);
    let mut node_trace = Vec::with_capacity(t);
    for _ in 0..t {
        observations.push(env.stimulus_of(node) as u16);
        node_trace.push(node as u32);
        let action = rng.random_range(0..env.n_actions());
        actions.push(action as u8);
        node = env.step(node, action);
    }
    let first_visit = first_visit_flags(&node_trace, &actions);
    Ok(Episode {
        env_id: env.id,
        observations,
        actions,
        node_trace,
        first_visit,
    })
}

/// Recomputes novelty flags from a node trace and the actions that
/// produced it. The edge entering step `t` is `(node[t-1], action[t-1])`.
pub fn first_visit_flags(node_trace: &[u32], actions: &[u8]) -> Vec<FirstVisit> {
    let mut seen_nodes: HashSet<u32> = HashSet::new();
    let mut seen_edges: HashSet<(u32, u8)> = HashSet::new();
    let mut flags = Vec::with_capacity(node_trace.len());
    for t in 0..node_trace.len() {
        let node_seen_before = seen_nodes.contains(&node_trace[t]);
        let edge_seen_before = if t == 0 {
            false
        } else {
            seen_edges.contains(&(node_trace[t - 1], actions[t - 1]))
        };
        flags.push(FirstVisit {
            node_seen_before,
            edge_seen_before,
        });
        seen_nodes.insert(node_trace[t]);
        if t > 0 {
            seen_edges.insert((node_trace[t - 1], actions[t - 1]));
        }
    }
    flags
}

/// Replays actions from a start node through the adjacency map.
pub fn replay_trace(env: &Environment, start: usize, actions: &[u8]) -> Vec<u32> {
    let mut node = start;
    let mut trace = Vec::with_capacity(actions.len());
    trace.push(start as u32);
    for &a in &actions[..actions.len().saturating_sub(1)] {
        node = env.step(node, a as usize);
        trace.push(node as u32);
    }
    trace
}

/// Derives the seed for the i-th environment of a family sharing one
/// master seed: identical structure, fresh stimulus assignment.
pub fn family_env_seed(master: u64, index: u64) -> u64 {
    mix_seed(master, 0x0e, index, 0)
}

// ── text formats ────────────────────────────────────────────────────
//
// Environment files are versioned line-based text:
//
//   temt-env 1
//   topology square4
//   dims <width> <height>
//   n_stim <n>
//   seed <u64>
//   node <id> <q> <r> <stim> <dest_action0> <dest_action1> ...
//
// Episode files:
//
//   temt-episode 1
//   env <u64>
//   length <t>
//   step <stimulus> <action> <node>

pub fn serialize_environment(env: &Environment) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "temt-env 1");
    let _ = writeln!(out, "topology {}", env.topology.name());
    let _ = writeln!(out, "dims {} {}", env.width, env.height);
    let _ = writeln!(out, "n_stim {}", env.n_stim);
    let _ = writeln!(out, "seed {}", env.seed);
    for node in 0..env.n_nodes() {
        let (q, r) = env.lattice[node];
        let _ = write!(out, "node {node} {q} {r} {}", env.stimulus[node]);
        for a in 0..env.n_actions() {
            let _ = write!(out, " {}", env.step(node, a));
        }
        out.push('\n');
    }
    out
}

struct LineCursor<'a> {
    rest: &'a str,
    offset: usize,
    line: usize,
}

impl<'a> LineCursor<'a> {
    fn new(text: &'a str) -> Self {
        LineCursor {
            rest: text,
            offset: 0,
            line: 0,
        }
    }

    fn next_line(&mut self) -> Option<(usize, usize, &'a str)> {
        while !self.rest.is_empty() {
            let (line, consumed) = match self.rest.find('\n') {
                Some(pos) => (&self.rest[..pos], pos + 1),
                None => (self.rest, self.rest.len()),
            };
            let at = self.offset;
            self.offset += consumed;
            self.rest = &self.rest[consumed..];
            self.line += 1;
            if !line.trim().is_empty() {
                return Some((at, self.line, line.trim_end()));
            }
        }
        None
    }

    fn error(&self, offset: usize, line: usize, msg: impl Into<String>) -> Error {
        Error::Parse {
            offset,
            line,
            msg: msg.into(),
        }
    }
}

fn expect_usize(tok: Option<&str>, what: &str, offset: usize, line: usize) -> Result<usize> {
    tok.ok_or_else(|| Error::Parse {
        offset,
        line,
        msg: format!("missing {what}"),
    })?
    .parse()
    .map_err(|_| Error::Parse {
        offset,
        line,
        msg: format!("bad {what}"),
    })
}

pub fn parse_environment(bytes: &[u8]) -> Result<Environment> {
    let text = std::str::from_utf8(bytes).map_err(|e| Error::Parse {
        offset: e.valid_up_to(),
        line: 0,
        msg: "invalid utf-8".into(),
    })?;
    let mut cur = LineCursor::new(text);

    let (off, ln, header) = cur
        .next_line()
        .ok_or_else(|| cur.error(0, 1, "empty file"))?;
    if header != "temt-env 1" {
        return Err(cur.error(off, ln, format!("bad header {header:?}, expected \"temt-env 1\"")));
    }

    let mut topology = None;
    let mut dims = None;
    let mut n_stim = None;
    let mut seed = None;
    let mut node_lines = Vec::new();
    while let Some((off, ln, line)) = cur.next_line() {
        let mut toks = line.split_ascii_whitespace();
        match toks.next() {
            Some("topology") => {
                let name = toks.next().unwrap_or("");
                topology = Some(
                    Topology::from_name(name)
                        .ok_or_else(|| cur.error(off, ln, format!("unknown topology {name:?}")))?,
                );
            }
            Some("dims") => {
                let w = expect_usize(toks.next(), "width", off, ln)?;
                let h = expect_usize(toks.next(), "height", off, ln)?;
                dims = Some((w, h));
            }
            Some("n_stim") => n_stim = Some(expect_usize(toks.next(), "n_stim", off, ln)?),
            Some("seed") => {
                seed = Some(
                    toks.next()
                        .and_then(|t| t.parse::<u64>().ok())
                        .ok_or_else(|| cur.error(off, ln, "bad seed"))?,
                )
            }
            Some("node") => node_lines.push((off, ln, line)),
            Some(other) => return Err(cur.error(off, ln, format!("unknown record {other:?}"))),
            None => {}
        }
    }

    let topology = topology.ok_or_else(|| cur.error(0, 1, "missing topology"))?;
    let (width, height) = dims.ok_or_else(|| cur.error(0, 1, "missing dims"))?;
    let n_stim = n_stim.ok_or_else(|| cur.error(0, 1, "missing n_stim"))?;
    let seed = seed.ok_or_else(|| cur.error(0, 1, "missing seed"))?;
    let n_nodes = width * height;
    let n_actions = topology.n_actions();
    if node_lines.len() != n_nodes {
        return Err(cur.error(
            0,
            1,
            format!("expected {n_nodes} node records, found {}", node_lines.len()),
        ));
    }

    let mut adjacency = vec![0u32; n_nodes * n_actions];
    let mut stimulus = vec![0u16; n_nodes];
    let mut lattice = vec![(0i32, 0i32); n_nodes];
    let mut seen = vec![false; n_nodes];
    for (off, ln, line) in node_lines {
        let mut toks = line.split_ascii_whitespace();
        toks.next(); // "node"
        let id = expect_usize(toks.next(), "node id", off, ln)?;
        if id >= n_nodes {
            return Err(cur.error(off, ln, format!("node id {id} out of range")));
        }
        if seen[id] {
            return Err(cur.error(off, ln, format!("duplicate node {id}")));
        }
        seen[id] = true;
        let q: i32 = toks
            .next()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| cur.error(off, ln, "bad q coordinate"))?;
        let r: i32 = toks
            .next()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| cur.error(off, ln, "bad r coordinate"))?;
        lattice[id] = (q, r);
        let stim = expect_usize(toks.next(), "stimulus", off, ln)?;
        if stim >= n_stim {
            return Err(cur.error(off, ln, format!("stimulus {stim} out of range")));
        }
        stimulus[id] = stim as u16;
        for a in 0..n_actions {
            let dest = expect_usize(toks.next(), "neighbor", off, ln)?;
            if dest >= n_nodes {
                return Err(cur.error(off, ln, format!("neighbor {dest} out of range")));
            }
            adjacency[id * n_actions + a] = dest as u32;
        }
        if toks.next().is_some() {
            return Err(cur.error(off, ln, "trailing tokens on node record"));
        }
    }

    // Coordinates must be unique per node.
    let mut coords: Vec<(i32, i32)> = lattice.clone();
    coords.sort_unstable();
    coords.dedup();
    if coords.len() != n_nodes {
        return Err(cur.error(0, 1, "duplicate node coordinates"));
    }

    Ok(Environment {
        id: seed,
        topology,
        width,
        height,
        n_stim,
        seed,
        adjacency,
        stimulus,
        lattice,
    })
}

pub fn serialize_episode(ep: &Episode) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "temt-episode 1");
    let _ = writeln!(out, "env {}", ep.env_id);
    let _ = writeln!(out, "length {}", ep.len());
    for t in 0..ep.len() {
        let _ = writeln!(
            out,
            "step {} {} {}",
            ep.observations[t], ep.actions[t], ep.node_trace[t]
        );
    }
    out
}

pub fn parse_episode(bytes: &[u8]) -> Result<Episode> {
    let text = std::str::from_utf8(bytes).map_err(|e| Error::Parse {
        offset: e.valid_up_to(),
        line: 0,
        msg: "invalid utf-8".into(),
    })?;
    let mut cur = LineCursor::new(text);
    let (off, ln, header) = cur
        .next_line()
        .ok_or_else(|| cur.error(0, 1, "empty file"))?;
    if header != "temt-episode 1" {
        return Err(cur.error(off, ln, format!("bad header {header:?}")));
    }
    let mut env_id = None;
    let mut length = None;
    let mut steps = Vec::new();
    while let Some((off, ln, line)) = cur.next_line() {
        let mut toks = line.split_ascii_whitespace();
        match toks.next() {
            Some("env") => {
                env_id = Some(
                    toks.next()
                        .and_then(|t| t.parse::<u64>().ok())
                        .ok_or_else(|| cur.error(off, ln, "bad env id"))?,
                )
            }
            Some("length") => length = Some(expect_usize(toks.next(), "length", off, ln)?),
            Some("step") => {
                let x = expect_usize(toks.next(), "stimulus", off, ln)? as u16;
                let a = expect_usize(toks.next(), "action", off, ln)? as u8;
                let n = expect_usize(toks.next(), "node", off, ln)? as u32;
                steps.push((x, a, n));
            }
            Some(other) => return Err(cur.error(off, ln, format!("unknown record {other:?}"))),
            None => {}
        }
    }
    let env_id = env_id.ok_or_else(|| cur.error(0, 1, "missing env"))?;
    let length = length.ok_or_else(|| cur.error(0, 1, "missing length"))?;
    if steps.len() != length {
        return Err(cur.error(
            0,
            1,
            format!("expected {length} steps, found {}", steps.len()),
        ));
    }
    let observations: Vec<u16> = steps.iter().map(|s| s.0).collect();
    let actions: Vec<u8> = steps.iter().map(|s| s.1).collect();
    let node_trace: Vec<u32> = steps.iter().map(|s| s.2).collect();
    let first_visit = first_visit_flags(&node_trace, &actions);
    Ok(Episode {
        env_id,
        observations,
        actions,
        node_trace,
        first_visit,
    })
}
