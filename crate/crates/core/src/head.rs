//! Origin-embedding fusion, the OD prediction heads, losses and metrics.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Init, NodeId, ParameterStore, Tape, Tensor};
use crate::error::{Error, Result};

pub const FUSION_W: &str = "fusion.w";
pub const FUSION_B: &str = "fusion.b";
pub const PAIR_W1: &str = "head.pair.w1";
pub const PAIR_B1: &str = "head.pair.b1";
pub const PAIR_W2: &str = "head.pair.w2";
pub const PAIR_B2: &str = "head.pair.b2";
pub const ORIGIN_W: &str = "head.origin.w";
pub const ORIGIN_B: &str = "head.origin.b";
pub const DEST_W: &str = "head.dest.w";
pub const DEST_B: &str = "head.dest.b";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum AuxSign {
    #[default]
    Minus,
    Plus,
}

pub fn register_fusion(store: &mut ParameterStore, s: usize, seed: u64) -> Result<()> {
    store.add(FUSION_W, &[s, s], Init::FanIn, seed)?;
    store.add(FUSION_B, &[s], Init::Zeros, seed)
}

pub fn register_heads(store: &mut ParameterStore, s: usize, seed: u64) -> Result<()> {
    store.add(PAIR_W1, &[2 * s, s], Init::FanIn, seed)?;
    store.add(PAIR_B1, &[s], Init::Zeros, seed)?;
    store.add(PAIR_W2, &[s, 1], Init::FanIn, seed)?;
    store.add(PAIR_B2, &[1], Init::Zeros, seed)?;
    store.add(ORIGIN_W, &[s, 1], Init::FanIn, seed)?;
    store.add(ORIGIN_B, &[1], Init::Zeros, seed)?;
    store.add(DEST_W, &[s, 1], Init::FanIn, seed)?;
    store.add(DEST_B, &[1], Init::Zeros, seed)
}

/// `θ = σ(g_out · w + b)`, `O'' = θ ⊙ o_pop + (1 - θ) ⊙ o_prime`.
pub fn fuse_origin(tape: &mut Tape, o_pop: NodeId, o_prime: NodeId, g_out: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
    let z = tape.matmul(g_out, w)?;
    let z = tape.add(z, b)?;
    let theta = tape.sigmoid(z)?;
    let a = tape.mul(theta, o_pop)?;
    let rest = tape.scale(theta, -1.0, 1.0)?;
    let c = tape.mul(rest, o_prime)?;
    tape.add(a, c)
}

/// Parameter nodes of the three prediction heads.
#[derive(Clone, Copy, Debug)]
pub struct Heads {
    pub w1: NodeId,
    pub b1: NodeId,
    pub w2: NodeId,
    pub b2: NodeId,
    pub wo: NodeId,
    pub bo: NodeId,
    pub wd: NodeId,
    pub bd: NodeId,
}

impl Heads {
    pub fn from_store(tape: &mut Tape, store: &ParameterStore) -> Result<Self> {
        Ok(Heads {
            w1: tape.param(store, PAIR_W1)?,
            b1: tape.param(store, PAIR_B1)?,
            w2: tape.param(store, PAIR_W2)?,
            b2: tape.param(store, PAIR_B2)?,
            wo: tape.param(store, ORIGIN_W)?,
            bo: tape.param(store, ORIGIN_B)?,
            wd: tape.param(store, DEST_W)?,
            bd: tape.param(store, DEST_B)?,
        })
    }
}

/// `Ŷ_ij = pair([o_i ; d_j]) + origin(o_i) + dest(d_j)` as an `N x N` node.
pub fn predict(tape: &mut Tape, o2: NodeId, d: NodeId, heads: &Heads) -> Result<NodeId> {
    let n = tape.value(o2).rows();
    if tape.value(d).rows() != n {
        return Err(Error::Shape { op: "predict", shapes: vec![tape.value(o2).shape().to_vec(), tape.value(d).shape().to_vec()] });
    }
    let is: Vec<usize> = (0..n * n).map(|k| k / n).collect();
    let js: Vec<usize> = (0..n * n).map(|k| k % n).collect();
    let oi = tape.lookup_rows(o2, &is)?;
    let dj = tape.lookup_rows(d, &js)?;
    let pair = tape.concat(&[oi, dj])?;
    let h = tape.matmul(pair, heads.w1)?;
    let h = tape.add(h, heads.b1)?;
    let h = tape.relu(h)?;
    let p = tape.matmul(h, heads.w2)?;
    let p = tape.add(p, heads.b2)?;
    let p = tape.reshape(p, &[n, n])?;

    let so = tape.matmul(o2, heads.wo)?;
    let so = tape.add(so, heads.bo)?;
    let sd = tape.matmul(d, heads.wd)?;
    let sd = tape.add(sd, heads.bd)?;
    let sd = tape.transpose(sd)?;
    let y = tape.add(p, so)?;
    tape.add(y, sd)
}

pub fn od_loss(tape: &mut Tape, yhat: NodeId, y: NodeId) -> Result<NodeId> {
    tape.mse(yhat, y)
}

/// `l_od ∓ γ · l_aux`.
pub fn total_loss(tape: &mut Tape, l_od: NodeId, l_aux: Option<NodeId>, gamma: f64, sign: AuxSign) -> Result<NodeId> {
    match l_aux {
        Some(aux) if gamma != 0.0 => {
            let factor = match sign {
                AuxSign::Minus => -gamma,
                AuxSign::Plus => gamma,
            };
            let scaled = tape.scale(aux, factor, 0.0)?;
            tape.add(l_od, scaled)
        }
        _ => Ok(l_od),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameMetrics {
    pub index: usize,
    pub rmse: f64,
    pub mae: f64,
    pub smape: f64,
    pub pcc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rmse: f64,
    pub mae: f64,
    pub smape: f64,
    pub pcc: f64,
    pub frames: Vec<FrameMetrics>,
}

#[derive(Default)]
struct Accum {
    n: f64,
    se: f64,
    ae: f64,
    sm: f64,
}

impl Accum {
    fn push(&mut self, p: f64, y: f64) {
        let e = p - y;
        self.n += 1.0;
        self.se += e * e;
        self.ae += e.abs();
        let denom = (p.abs() + y.abs()) / 2.0;
        if denom > 0.0 {
            self.sm += e.abs() / denom;
        }
    }
}

fn pcc_two_pass(p: &[f64], y: &[f64]) -> f64 {
    let n = p.len() as f64;
    let mp = p.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut cov, mut vp, mut vy) = (0.0, 0.0, 0.0);
    for (a, b) in p.iter().zip(y) {
        cov += (a - mp) * (b - my);
        vp += (a - mp) * (a - mp);
        vy += (b - my) * (b - my);
    }
    if vp <= 0.0 || vy <= 0.0 {
        return 0.0;
    }
    (cov / (vp.sqrt() * vy.sqrt())).clamp(-1.0, 1.0)
}

/// RMSE, MAE, SMAPE and PCC over all entries, plus a per-frame breakdown.
pub fn evaluate(yhat: &[Tensor], y: &[Tensor]) -> Result<MetricsReport> {
    if yhat.is_empty() {
        return Err(Error::invalid("cannot evaluate an empty frame set"));
    }
    if yhat.len() != y.len() {
        return Err(Error::invalid(format!("{} predicted frames for {} observed", yhat.len(), y.len())));
    }
    let mut all = Accum::default();
    let mut all_p = Vec::new();
    let mut all_y = Vec::new();
    let mut frames = Vec::with_capacity(y.len());
    for (index, (p, t)) in yhat.iter().zip(y).enumerate() {
        if p.shape() != t.shape() {
            return Err(Error::Shape { op: "evaluate", shapes: vec![p.shape().to_vec(), t.shape().to_vec()] });
        }
        let mut acc = Accum::default();
        for (&a, &b) in p.data().iter().zip(t.data()) {
            acc.push(a, b);
            all.push(a, b);
        }
        all_p.extend_from_slice(p.data());
        all_y.extend_from_slice(t.data());
        frames.push(FrameMetrics {
            index,
            rmse: (acc.se / acc.n).sqrt(),
            mae: acc.ae / acc.n,
            smape: acc.sm / acc.n,
            pcc: pcc_two_pass(p.data(), t.data()),
        });
    }
    Ok(MetricsReport {
        rmse: (all.se / all.n).sqrt(),
        mae: all.ae / all.n,
        smape: all.sm / all.n,
        pcc: pcc_two_pass(&all_p, &all_y),
        frames,
    })
}
