//! Bilateral branch network: graph convolution over the origin-origin and
//! destination-destination relations followed by an LSTM over the window.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Init, NodeId, ParameterStore, Tape};
use crate::error::{Error, Result};
use crate::transform::Branch;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Sigmoid,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape, x: NodeId) -> Result<NodeId> {
        match self {
            Activation::Relu => tape.relu(x),
            Activation::Sigmoid => tape.sigmoid(x),
        }
    }
}

pub fn embed_table(branch: Branch) -> &'static str {
    match branch {
        Branch::Origin => "embed.origin",
        Branch::Destination => "embed.dest",
    }
}

const GATES: [&str; 4] = ["i", "f", "o", "g"];

/// Parameter names `(wx, wh, b)` of one LSTM gate.
pub fn lstm_names(branch: Branch, gate: &str) -> (String, String, String) {
    let p = format!("lstm.{}.{gate}", branch.tag());
    (format!("{p}.wx"), format!("{p}.wh"), format!("{p}.b"))
}

/// Registers the lookup table and LSTM for one branch.
pub fn register_branch(store: &mut ParameterStore, branch: Branch, n: usize, s: usize, seed: u64) -> Result<()> {
    store.add(embed_table(branch), &[n, s], Init::Uniform(1.0 / (s as f64).sqrt()), seed)?;
    for gate in GATES {
        let (wx, wh, b) = lstm_names(branch, gate);
        store.add(&wx, &[s, s], Init::FanIn, seed)?;
        store.add(&wh, &[s, s], Init::FanIn, seed)?;
        store.add(&b, &[s], Init::Zeros, seed)?;
    }
    Ok(())
}

/// `act(adj · x · w)`.
pub fn branch_gcn(tape: &mut Tape, x: NodeId, adj: NodeId, w: NodeId, act: Activation) -> Result<NodeId> {
    let h = tape.matmul(adj, x)?;
    let h = tape.matmul(h, w)?;
    act.apply(tape, h)
}

struct Gate {
    wx: NodeId,
    wh: NodeId,
    b: NodeId,
}

fn gate_input(tape: &mut Tape, g: &Gate, x: NodeId, h: Option<NodeId>) -> Result<NodeId> {
    let mut z = tape.matmul(x, g.wx)?;
    if let Some(h) = h {
        let r = tape.matmul(h, g.wh)?;
        z = tape.add(z, r)?;
    }
    tape.add(z, g.b)
}

/// Runs the branch LSTM over `seq` (oldest first) from zero states and returns every hidden state.
pub fn recur_states(tape: &mut Tape, store: &ParameterStore, branch: Branch, seq: &[NodeId]) -> Result<Vec<NodeId>> {
    if seq.is_empty() {
        return Err(Error::invalid("recurrence over an empty window"));
    }
    let mut gates = Vec::with_capacity(4);
    for gate in GATES {
        let (wx, wh, b) = lstm_names(branch, gate);
        gates.push(Gate { wx: tape.param(store, &wx)?, wh: tape.param(store, &wh)?, b: tape.param(store, &b)? });
    }
    let mut h: Option<NodeId> = None;
    let mut c: Option<NodeId> = None;
    let mut states = Vec::with_capacity(seq.len());
    for &x in seq {
        let zi = gate_input(tape, &gates[0], x, h)?;
        let zf = gate_input(tape, &gates[1], x, h)?;
        let zo = gate_input(tape, &gates[2], x, h)?;
        let zg = gate_input(tape, &gates[3], x, h)?;
        let i = tape.sigmoid(zi)?;
        let o = tape.sigmoid(zo)?;
        let g = tape.tanh(zg)?;
        let ig = tape.mul(i, g)?;
        let cell = match c {
            Some(prev) => {
                let f = tape.sigmoid(zf)?;
                let keep = tape.mul(f, prev)?;
                tape.add(keep, ig)?
            }
            None => ig,
        };
        let tc = tape.tanh(cell)?;
        let hidden = tape.mul(o, tc)?;
        c = Some(cell);
        h = Some(hidden);
        states.push(hidden);
    }
    Ok(states)
}

/// Final hidden state of the branch LSTM.
pub fn recur(tape: &mut Tape, store: &ParameterStore, branch: Branch, seq: &[NodeId]) -> Result<NodeId> {
    let states = recur_states(tape, store, branch, seq)?;
    Ok(*states.last().expect("non-empty"))
}

/// One branch: `layers` stacked convolutions per frame seeded from `table`, then recurrence.
pub fn run_branch(
    tape: &mut Tape,
    store: &ParameterStore,
    table: &str,
    lstm: Branch,
    adjs: &[NodeId],
    w: NodeId,
    layers: usize,
    act: Activation,
) -> Result<NodeId> {
    if layers == 0 {
        return Err(Error::invalid("graph convolution depth must be at least 1"));
    }
    if adjs.is_empty() {
        return Err(Error::invalid("empty snapshot window"));
    }
    let x0 = tape.param(store, table)?;
    let mut per_frame = Vec::with_capacity(adjs.len());
    for &adj in adjs {
        let mut x = x0;
        for _ in 0..layers {
            x = branch_gcn(tape, x, adj, w, act)?;
        }
        per_frame.push(x);
    }
    recur(tape, store, lstm, &per_frame)
}

/// Window adjacencies as tape nodes, oldest first.
pub struct BilateralInput<'a> {
    pub adj_o: &'a [NodeId],
    pub adj_d: &'a [NodeId],
    pub w_o: NodeId,
    pub w_d: NodeId,
}

/// Returns the transformation-aware `(O, D)` embeddings.
pub fn run_bilateral(
    tape: &mut Tape,
    store: &ParameterStore,
    input: &BilateralInput<'_>,
    window: usize,
    layers: usize,
    act: Activation,
) -> Result<(NodeId, NodeId)> {
    if input.adj_o.len() < window || input.adj_d.len() < window {
        return Err(Error::invalid(format!(
            "window holds {} / {} frames, {window} required",
            input.adj_o.len(),
            input.adj_d.len()
        )));
    }
    let adj_o = &input.adj_o[input.adj_o.len() - window..];
    let adj_d = &input.adj_d[input.adj_d.len() - window..];
    let o = run_branch(tape, store, embed_table(Branch::Origin), Branch::Origin, adj_o, input.w_o, layers, act)?;
    let d = run_branch(tape, store, embed_table(Branch::Destination), Branch::Destination, adj_d, input.w_d, layers, act)?;
    Ok((o, d))
}
