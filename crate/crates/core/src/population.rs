//! Logistic population discretization, the level-similarity graph, and the
//! population-gated enhancement of origin embeddings.

use std::f64::consts::PI;
use std::io::Write;

use crate::autodiff::{Init, NodeId, ParameterStore, Tape, Tensor};
use crate::capacity::Activation;
use crate::error::{Error, Result};

pub const POP_EMBED: &str = "pop.embed";
pub const GATE_W: &str = "pop.gate.w";
pub const GATE_B: &str = "pop.gate.b";
pub const PRELU: &str = "pop.prelu";

pub fn gcn_weight(layer: usize) -> String {
    format!("pop.gcn.w{layer}")
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LogisticFit {
    pub mu: f64,
    pub sigma: f64,
    pub min_pop: f64,
    pub max_pop: f64,
}

/// Mean and population standard deviation of the region populations.
pub fn fit_logistic(populations: &[f64]) -> Result<LogisticFit> {
    let n = populations.len();
    if n < 2 {
        return Err(Error::invalid("population fit needs at least two regions"));
    }
    let mu = populations.iter().sum::<f64>() / n as f64;
    let var = populations.iter().map(|p| (p - mu).powi(2)).sum::<f64>() / n as f64;
    let min_pop = populations.iter().cloned().fold(f64::INFINITY, f64::min);
    let max_pop = populations.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(var > 0.0) || min_pop == max_pop {
        return Err(Error::invalid(
            "all regions have the same population; disable the population module (ablation no_pop)",
        ));
    }
    Ok(LogisticFit { mu, sigma: var.sqrt(), min_pop, max_pop })
}

pub fn logistic_cdf(p: f64, fit: &LogisticFit) -> f64 {
    1.0 / (1.0 + (-PI * (p - fit.mu) / (3f64.sqrt() * fit.sigma)).exp())
}

/// Inverse of [`logistic_cdf`].
pub fn logistic_quantile(u: f64, fit: &LogisticFit) -> f64 {
    fit.mu + 3f64.sqrt() * fit.sigma / PI * (u / (1.0 - u)).ln()
}

/// Equal-probability level of `p` within `[min_pop, max_pop]`; out-of-range values are clamped.
pub fn population_level(p: f64, fit: &LogisticFit, k1: usize) -> usize {
    let p = p.clamp(fit.min_pop, fit.max_pop);
    let lo = logistic_cdf(fit.min_pop, fit);
    let hi = logistic_cdf(fit.max_pop, fit);
    let q = (logistic_cdf(p, fit) - lo) / (hi - lo);
    ((k1 as f64 * q).floor().max(0.0) as usize).min(k1 - 1)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PopulationLevels {
    pub k1: usize,
    pub levels: Vec<usize>,
}

impl PopulationLevels {
    pub fn from_levels(k1: usize, levels: Vec<usize>) -> Self {
        PopulationLevels { k1, levels }
    }

    /// `N x N`, 1 where two regions share a level.
    pub fn similarity(&self) -> Tensor {
        let n = self.levels.len();
        let mut similarity = Tensor::zeros(&[n, n]);
        for i in 0..n {
            for j in 0..n {
                if self.levels[i] == self.levels[j] {
                    similarity.set(i, j, 1.0);
                }
            }
        }
        similarity
    }

    /// `D_g^{-1/2} L D_g^{-1/2}`.
    pub fn normalized(&self) -> Tensor {
        let n = self.levels.len();
        let similarity = self.similarity();
        let inv: Vec<f64> = (0..n).map(|i| 1.0 / similarity.row(i).iter().sum::<f64>().sqrt()).collect();
        let mut out = Tensor::zeros(&[n, n]);
        for i in 0..n {
            for j in 0..n {
                out.set(i, j, (inv[i] * inv[j]) * similarity.get(i, j));
            }
        }
        out
    }
}

/// Discretizes with a fit taken from the same populations.
pub fn discretize(populations: &[f64], k1: usize) -> Result<(LogisticFit, PopulationLevels)> {
    if k1 == 0 {
        return Err(Error::invalid("population level count must be positive"));
    }
    let fit = fit_logistic(populations)?;
    let levels = populations.iter().map(|&p| population_level(p, &fit, k1)).collect();
    Ok((fit, PopulationLevels::from_levels(k1, levels)))
}

/// Levels for populations under an existing fit, warning about clamped values.
pub fn discretize_with(populations: &[f64], fit: &LogisticFit, k1: usize) -> PopulationLevels {
    let clamped = populations.iter().filter(|&&p| p < fit.min_pop || p > fit.max_pop).count();
    if clamped > 0 {
        log::warn!("{clamped} population(s) outside [{}, {}] clamped", fit.min_pop, fit.max_pop);
    }
    let levels = populations.iter().map(|&p| population_level(p, fit, k1)).collect();
    PopulationLevels::from_levels(k1, levels)
}

pub fn register(store: &mut ParameterStore, n: usize, s: usize, layers: usize, seed: u64) -> Result<()> {
    store.add(POP_EMBED, &[n, s], Init::Uniform(1.0 / (s as f64).sqrt()), seed)?;
    for l in 0..layers {
        store.add(&gcn_weight(l), &[s, s], Init::FanIn, seed)?;
    }
    store.add(GATE_W, &[s, s], Init::FanIn, seed)?;
    store.add(GATE_B, &[s], Init::Zeros, seed)?;
    store.add(PRELU, &[1], Init::Constant(0.25), seed)?;
    Ok(())
}

/// `act(norm · g · w)` with `norm` from [`PopulationLevels::normalized`].
pub fn pop_gcn(tape: &mut Tape, g: NodeId, norm: NodeId, w: NodeId, act: Activation) -> Result<NodeId> {
    let h = tape.matmul(norm, g)?;
    let h = tape.matmul(h, w)?;
    act.apply(tape, h)
}

/// `PReLU(g_out · w + b) ⊙ o_prime`.
pub fn enhance_origin(tape: &mut Tape, g_out: NodeId, o_prime: NodeId, w: NodeId, b: NodeId, slope: NodeId) -> Result<NodeId> {
    let z = tape.matmul(g_out, w)?;
    let z = tape.add(z, b)?;
    let gate = tape.prelu(z, slope)?;
    tape.mul(gate, o_prime)
}

pub fn write_levels_csv<W: Write>(mut w: W, populations: &[f64], levels: &[usize]) -> std::io::Result<()> {
    writeln!(w, "region_id,population,level")?;
    for (i, (p, l)) in populations.iter().zip(levels).enumerate() {
        writeln!(w, "{i},{p},{l}")?;
    }
    Ok(())
}
