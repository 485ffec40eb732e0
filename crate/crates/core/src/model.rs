//! The assembled forecaster: prepared dataset, parameter registration and the
//! full forward pass with ablation switches.

use std::ops::Range;

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Init, NodeId, ParameterStore, Tape, Tensor};
use crate::capacity::{self, BilateralInput};
use crate::competition::{self, CompetitionMatrix, CLUSTER_WEIGHT, EDGE_WEIGHT};
use crate::config::{TrainConfig, Variant};
use crate::error::{Error, Result};
use crate::head::{self, Heads};
use crate::population::{self, PopulationLevels};
use crate::preprocess::{build_incidence, decompose, relation_pair, sym_normalize, RelationPair};
use crate::transform::{self, Branch, HOURS};

/// Chronological 8:1:1 split by frame count.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Split {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Split {
    pub fn new(total: usize) -> Self {
        let train = total * 8 / 10;
        let val = total / 10;
        Split { train, val, test: total - train - val }
    }

    pub fn train_range(&self) -> Range<usize> {
        0..self.train
    }

    pub fn val_range(&self) -> Range<usize> {
        self.train..self.train + self.val
    }

    pub fn test_range(&self) -> Range<usize> {
        self.train + self.val..self.train + self.val + self.test
    }
}

/// Everything the model consumes, derived once from the raw series.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub n: usize,
    pub m: usize,
    pub frames: Vec<Tensor>,
    /// Local hour of each frame start.
    pub hours: Vec<usize>,
    pub relations: Vec<RelationPair>,
    /// `sym_normalize(yo + yd)` per frame, for the shared-branch ablation.
    pub merged: Vec<Tensor>,
    pub propagation: Tensor,
    pub cooccurrence: Tensor,
    pub k2: usize,
    pub clusters: Vec<usize>,
    pub competition: CompetitionMatrix,
    pub pop_norm: Tensor,
    pub split: Split,
    /// Root-mean-square training count; targets are divided by it.
    pub scale: f64,
}

impl Dataset {
    /// `clusters` label regions by attributes; `competition` groups them by attributes and distance.
    pub fn assemble(
        frames: Vec<Tensor>,
        hours: Vec<usize>,
        attr: &Tensor,
        levels: &PopulationLevels,
        k2: usize,
        clusters: Vec<usize>,
        competition: CompetitionMatrix,
    ) -> Result<Self> {
        let n = attr.rows();
        let m = attr.cols();
        if frames.len() != hours.len() {
            return Err(Error::invalid(format!("{} frames but {} hours", frames.len(), hours.len())));
        }
        if let Some(f) = frames.iter().find(|f| f.shape() != [n, n]) {
            return Err(Error::Shape { op: "dataset", shapes: vec![f.shape().to_vec(), vec![n, n]] });
        }
        if levels.levels.len() != n || clusters.len() != n || competition.labels.len() != n {
            return Err(Error::invalid("region count differs between attributes, levels and clusters"));
        }
        let relations = frames.iter().map(relation_pair).collect();
        let merged = frames
            .iter()
            .map(|y| {
                let (yo, yd) = decompose(y);
                sym_normalize(&yo.zip_with(&yd, |a, b| a + b).expect("same shape"))
            })
            .collect();
        let inc = build_incidence(attr);
        let split = Split::new(frames.len());
        let scale = rms(&frames[split.train_range()]);
        Ok(Dataset {
            n,
            m,
            propagation: inc.propagation(),
            cooccurrence: inc.cooccurrence(),
            relations,
            merged,
            frames,
            hours,
            k2,
            clusters,
            competition,
            pop_norm: levels.normalized(),
            split,
            scale,
        })
    }

    /// Target frame indices in `range` that have a full input window.
    pub fn targets(&self, range: Range<usize>, window: usize) -> Vec<usize> {
        range.filter(|&t| t >= window && t < self.frames.len()).collect()
    }

    /// Observed `(i, j)` pairs with positive demand in frame `t`.
    pub fn edges(&self, t: usize) -> Vec<(usize, usize)> {
        let y = &self.frames[t];
        let mut out = Vec::new();
        for i in 0..self.n {
            for j in 0..self.n {
                if y.get(i, j) > 0.0 {
                    out.push((i, j));
                }
            }
        }
        out
    }
}

fn rms(frames: &[Tensor]) -> f64 {
    let (mut sq, mut count) = (0.0, 0usize);
    for f in frames {
        sq += f.data().iter().map(|v| v * v).sum::<f64>();
        count += f.len();
    }
    let r = if count == 0 { 0.0 } else { (sq / count as f64).sqrt() };
    if r > 0.0 { r } else { 1.0 }
}

/// Registers every trainable tensor.
pub fn register(cfg: &TrainConfig, data: &Dataset, seed: u64) -> Result<ParameterStore> {
    let s = cfg.embed_size;
    let mut store = ParameterStore::new();
    transform::register_attributes(&mut store, data.m, s, cfg.hyper_layers, seed)?;
    transform::register_generator(&mut store, Branch::Origin, s, seed)?;
    capacity::register_branch(&mut store, Branch::Origin, data.n, s, seed)?;
    if !cfg.ablations.no_bb {
        transform::register_generator(&mut store, Branch::Destination, s, seed)?;
        capacity::register_branch(&mut store, Branch::Destination, data.n, s, seed)?;
    }
    population::register(&mut store, data.n, s, cfg.pop_layers, seed)?;
    head::register_fusion(&mut store, s, seed)?;
    head::register_heads(&mut store, s, seed)?;
    store.add(CLUSTER_WEIGHT, &[s, data.k2], Init::FanIn, seed)?;
    store.add(EDGE_WEIGHT, &[2 * s, s], Init::FanIn, seed)?;
    Ok(store)
}

/// One recorded forward pass.
pub struct Forward {
    pub tape: Tape,
    pub loss: NodeId,
    pub od: NodeId,
    pub aux: Option<NodeId>,
    /// Prediction in scaled units.
    pub yhat: NodeId,
}

pub struct Model<'a> {
    pub cfg: &'a TrainConfig,
    pub data: &'a Dataset,
}

impl<'a> Model<'a> {
    pub fn new(cfg: &'a TrainConfig, data: &'a Dataset) -> Self {
        Model { cfg, data }
    }

    /// Attribute embeddings after the hypergraph (or co-occurrence) layers.
    fn attributes(&self, tape: &mut Tape, store: &ParameterStore) -> Result<NodeId> {
        let prop = if self.cfg.ablations.no_attg { &self.data.cooccurrence } else { &self.data.propagation };
        let prop = tape.constant(prop.clone());
        let mut a = tape.param(store, transform::ATTR_EMBED)?;
        for l in 0..self.cfg.hyper_layers {
            let w = tape.param(store, &transform::hyper_weight(l))?;
            a = transform::hyperconv(tape, a, prop, w)?;
        }
        Ok(a)
    }

    /// Attention weights over attributes at `hour`.
    pub fn attention(&self, store: &ParameterStore, hour: usize) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let a = self.attributes(&mut tape, store)?;
        let table = tape.param(store, transform::TIME_EMBED)?;
        let att = transform::time_attend(&mut tape, a, table, hour % HOURS)?;
        Ok(tape.value(att.alpha).data().to_vec())
    }

    /// Transformation matrices `(W''_o, W''_d)` for `hour`.
    fn transforms(&self, tape: &mut Tape, store: &ParameterStore, hour: usize) -> Result<(NodeId, NodeId)> {
        let ab = self.cfg.ablations;
        let dest = if ab.no_bb { Branch::Origin } else { Branch::Destination };
        if ab.no_tran {
            let w_o = tape.param(store, &transform::GeneratorNames::new(Branch::Origin).base)?;
            let w_d = tape.param(store, &transform::GeneratorNames::new(dest).base)?;
            return Ok((w_o, w_d));
        }
        let a = self.attributes(tape, store)?;
        let table = tape.param(store, transform::TIME_EMBED)?;
        let att = transform::time_attend(tape, a, table, hour % HOURS)?;
        let w_o = transform::generate_transform(tape, store, att.t_a, Branch::Origin)?;
        let w_d = if ab.no_bb { w_o } else { transform::generate_transform(tape, store, att.t_a, Branch::Destination)? };
        Ok((w_o, w_d))
    }

    /// Full pass for target frame `t`. The auxiliary loss is added only when `rng` is given.
    pub fn forward(&self, store: &ParameterStore, t: usize, rng: Option<&mut ChaCha8Rng>) -> Result<Forward> {
        let cfg = self.cfg;
        let ab = cfg.ablations;
        let data = self.data;
        let w = cfg.window;
        if t < w || t >= data.frames.len() {
            return Err(Error::invalid(format!("target frame {t} has no full window of {w} frames")));
        }
        let mut tape = Tape::new();
        let (w_o, w_d) = self.transforms(&mut tape, store, data.hours[t])?;

        let (o, d) = if ab.no_bb {
            let adjs: Vec<NodeId> = (t - w..t).map(|k| tape.constant(data.merged[k].clone())).collect();
            let table = capacity::embed_table(Branch::Origin);
            let o = capacity::run_branch(&mut tape, store, table, Branch::Origin, &adjs, w_o, cfg.gcn_layers, cfg.gcn_activation)?;
            (o, o)
        } else {
            let adj_o: Vec<NodeId> = (t - w..t).map(|k| tape.constant(data.relations[k].oo.clone())).collect();
            let adj_d: Vec<NodeId> = (t - w..t).map(|k| tape.constant(data.relations[k].dd.clone())).collect();
            let input = BilateralInput { adj_o: &adj_o, adj_d: &adj_d, w_o, w_d };
            capacity::run_bilateral(&mut tape, store, &input, w, cfg.gcn_layers, cfg.gcn_activation)?
        };

        let norm = tape.constant(data.pop_norm.clone());
        let mut g = tape.param(store, population::POP_EMBED)?;
        for l in 0..cfg.pop_layers {
            let wl = tape.param(store, &population::gcn_weight(l))?;
            g = population::pop_gcn(&mut tape, g, norm, wl, cfg.pop_activation)?;
        }

        let o2 = if ab.no_pop {
            o
        } else {
            let gw = tape.param(store, population::GATE_W)?;
            let gb = tape.param(store, population::GATE_B)?;
            let slope = tape.param(store, population::PRELU)?;
            let o_pop = population::enhance_origin(&mut tape, g, o, gw, gb, slope)?;
            let fw = tape.param(store, head::FUSION_W)?;
            let fb = tape.param(store, head::FUSION_B)?;
            head::fuse_origin(&mut tape, o_pop, o, g, fw, fb)?
        };

        let heads = Heads::from_store(&mut tape, store)?;
        let yhat = head::predict(&mut tape, o2, d, &heads)?;
        let target = data.frames[t].map(|v| v / data.scale);
        let y = tape.constant(target);
        let od = head::od_loss(&mut tape, yhat, y)?;

        let aux = match rng {
            Some(rng) if !ab.no_com => {
                let (o_in, d_in) = if ab.no_comr {
                    (o, d)
                } else {
                    (tape.gradient_reverse(o)?, tape.gradient_reverse(d)?)
                };
                Some(match cfg.variant {
                    Variant::Cluster => {
                        let wn = tape.param(store, CLUSTER_WEIGHT)?;
                        competition::cluster_loss(&mut tape, d_in, &data.clusters, wn)?
                    }
                    Variant::Edge => {
                        let weg = tape.param(store, EDGE_WEIGHT)?;
                        let edges = data.edges(t - 1);
                        competition::edge_loss(&mut tape, o_in, d_in, g, &edges, &data.competition, weg, rng)?.loss
                    }
                })
            }
            _ => None,
        };
        let loss = head::total_loss(&mut tape, od, aux, cfg.gamma(), cfg.aux_sign)?;
        if !tape.value(loss).item().is_finite() {
            return Err(Error::NonFinite(format!("loss at target frame {t}")));
        }
        Ok(Forward { tape, loss, od, aux, yhat })
    }

    /// Predicted counts for target frame `t`.
    pub fn predict(&self, store: &ParameterStore, t: usize) -> Result<Tensor> {
        let f = self.forward(store, t, None)?;
        Ok(f.tape.value(f.yhat).map(|v| v * self.data.scale))
    }
}
