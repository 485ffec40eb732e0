//! Transformation-relationship learning: hypergraph convolution over attribute
//! embeddings, hour-conditioned dot-product attention, and gated generation of
//! the per-branch transformation matrices.

use std::io::Write;

use crate::autodiff::{Init, NodeId, ParameterStore, Tape};
use crate::error::Result;

pub const HOURS: usize = 24;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    Origin,
    Destination,
}

impl Branch {
    pub fn tag(self) -> &'static str {
        match self {
            Branch::Origin => "o",
            Branch::Destination => "d",
        }
    }
}

/// Names of one branch's generator parameters.
#[derive(Clone, Debug)]
pub struct GeneratorNames {
    pub f1_w: String,
    pub f1_b: String,
    pub f2_w: String,
    pub gate_w: String,
    pub gate_b: String,
    pub base: String,
}

impl GeneratorNames {
    pub fn new(branch: Branch) -> Self {
        let p = format!("gen.{}", branch.tag());
        GeneratorNames {
            f1_w: format!("{p}.f1.w"),
            f1_b: format!("{p}.f1.b"),
            f2_w: format!("{p}.f2.w"),
            gate_w: format!("{p}.gate.w"),
            gate_b: format!("{p}.gate.b"),
            base: format!("{p}.base"),
        }
    }
}

pub const ATTR_EMBED: &str = "attr.embed";
pub const TIME_EMBED: &str = "time.embed";

pub fn hyper_weight(layer: usize) -> String {
    format!("hyper.w{layer}")
}

pub fn register_attributes(store: &mut ParameterStore, m: usize, s: usize, layers: usize, seed: u64) -> Result<()> {
    store.add(ATTR_EMBED, &[m, s], Init::FanIn, seed)?;
    store.add(TIME_EMBED, &[HOURS, s], Init::Uniform(1.0 / (s as f64).sqrt()), seed)?;
    for l in 0..layers {
        store.add(&hyper_weight(l), &[s, s], Init::FanIn, seed)?;
    }
    Ok(())
}

pub fn register_generator(store: &mut ParameterStore, branch: Branch, s: usize, seed: u64) -> Result<()> {
    let n = GeneratorNames::new(branch);
    store.add(&n.f1_w, &[s, s * s], Init::FanIn, seed)?;
    store.add(&n.f1_b, &[s * s], Init::Zeros, seed)?;
    store.add(&n.f2_w, &[s, s], Init::FanIn, seed)?;
    store.add(&n.gate_w, &[s, s * s], Init::FanIn, seed)?;
    store.add(&n.gate_b, &[s * s], Init::Zeros, seed)?;
    store.add(&n.base, &[s, s], Init::FanIn, seed)?;
    Ok(())
}

/// One hypergraph convolution layer: `prop · a · w` where `prop = D_h⁻¹ H B_h⁻¹ Hᵀ`.
pub fn hyperconv(tape: &mut Tape, a: NodeId, prop: NodeId, w: NodeId) -> Result<NodeId> {
    let msg = tape.matmul(prop, a)?;
    tape.matmul(msg, w)
}

#[derive(Clone, Copy, Debug)]
pub struct TimeAttention {
    /// `1 x S` attended attribute vector.
    pub t_a: NodeId,
    /// `[M]` attention weights.
    pub alpha: NodeId,
}

/// `alpha = softmax_i(a_i · e_hour)`, `t_a = Σ alpha_i a_i`.
pub fn time_attend(tape: &mut Tape, a: NodeId, table: NodeId, hour: usize) -> Result<TimeAttention> {
    let m = tape.value(a).rows();
    let e_t = tape.lookup_rows(table, &[hour])?;
    let e_col = tape.transpose(e_t)?;
    let scores = tape.matmul(a, e_col)?;
    let scores = tape.reshape(scores, &[m])?;
    let alpha = tape.softmax(scores)?;
    let alpha_row = tape.reshape(alpha, &[1, m])?;
    let t_a = tape.matmul(alpha_row, a)?;
    Ok(TimeAttention { t_a, alpha })
}

/// Generates `W'' = β ⊙ W_base + (1 - β) ⊙ W'` for one branch from the `1 x S` context `t_a`.
pub fn generate_transform(tape: &mut Tape, store: &ParameterStore, t_a: NodeId, branch: Branch) -> Result<NodeId> {
    let names = GeneratorNames::new(branch);
    let s = tape.value(t_a).cols();
    let f1_w = tape.param(store, &names.f1_w)?;
    let f1_b = tape.param(store, &names.f1_b)?;
    let f2_w = tape.param(store, &names.f2_w)?;
    let gate_w = tape.param(store, &names.gate_w)?;
    let gate_b = tape.param(store, &names.gate_b)?;
    let base = tape.param(store, &names.base)?;

    let h = tape.matmul(t_a, f1_w)?;
    let h = tape.add(h, f1_b)?;
    let h = tape.reshape(h, &[s, s])?;
    let generated = tape.matmul(h, f2_w)?;

    let z = tape.matmul(t_a, gate_w)?;
    let z = tape.add(z, gate_b)?;
    let z = tape.reshape(z, &[s, s])?;
    let z = tape.transpose(z)?;
    let beta = tape.sigmoid(z)?;
    let keep = tape.mul(beta, base)?;
    let one_minus = tape.scale(beta, -1.0, 1.0)?;
    let mix = tape.mul(one_minus, generated)?;
    tape.add(keep, mix)
}

/// Writes `hour,attribute_id,attribute_name,weight` rows.
pub fn write_attention_csv<W: Write>(mut w: W, rows: &[(usize, Vec<f64>)], vocab: &[String]) -> std::io::Result<()> {
    writeln!(w, "hour,attribute_id,attribute_name,weight")?;
    for (hour, alpha) in rows {
        for (i, a) in alpha.iter().enumerate() {
            let name = vocab.get(i).map(String::as_str).unwrap_or("");
            writeln!(w, "{hour},{i},{name},{a:.17e}")?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{check_gradients, Tensor};
    use crate::preprocess::build_incidence;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    fn run_hyperconv(attr: &Tensor, a: &Tensor, w: &Tensor) -> Tensor {
        let inc = build_incidence(attr);
        let mut t = Tape::new();
        let p = t.constant(inc.propagation());
        let a = t.constant(a.clone());
        let w = t.constant(w.clone());
        let out = hyperconv(&mut t, a, p, w).unwrap();
        t.value(out).clone()
    }

    /// Sum over paths u -> e -> v of h_ue h_ve / (d_u d_e), then times w.
    fn path_oracle(attr: &Tensor, a: &Tensor, w: &Tensor) -> Tensor {
        let (n, m) = (attr.rows(), attr.cols());
        let s = a.cols();
        let mut msg = Tensor::zeros(&[m, s]);
        for u in 0..m {
            let du: f64 = (0..n).map(|e| attr.get(e, u)).sum();
            if du == 0.0 {
                continue;
            }
            for e in 0..n {
                if attr.get(e, u) == 0.0 {
                    continue;
                }
                let de: f64 = attr.row(e).iter().sum();
                for v in 0..m {
                    if attr.get(e, v) == 0.0 {
                        continue;
                    }
                    for k in 0..s {
                        let cur = msg.get(u, k);
                        msg.set(u, k, cur + a.get(v, k) / (du * de));
                    }
                }
            }
        }
        msg.matmul(w).unwrap()
    }

    #[test]
    fn hyperconv_single_attribute_passthrough() {
        let attr = Tensor::from_rows(&[vec![1.0]]);
        let a = Tensor::from_rows(&[vec![0.3, -0.7]]);
        assert_eq!(run_hyperconv(&attr, &a, &Tensor::identity(2)), a);
        assert_eq!(run_hyperconv(&attr, &Tensor::zeros(&[1, 2]), &Tensor::identity(2)), Tensor::zeros(&[1, 2]));
    }

    #[test]
    fn hyperconv_matches_path_oracle() {
        let attr = Tensor::from_rows(&[vec![1.0, 1.0, 0.0], vec![0.0, 1.0, 1.0]]);
        let a = random(3, 4, 1);
        let w = random(4, 4, 2);
        let got = run_hyperconv(&attr, &a, &w);
        let want = path_oracle(&attr, &a, &w);
        for (g, e) in got.data().iter().zip(want.data()) {
            assert!((g - e).abs() < 1e-12);
        }
    }

    #[test]
    fn hyperconv_is_linear() {
        let attr = Tensor::from_rows(&[vec![1.0, 1.0, 0.0], vec![0.0, 1.0, 1.0], vec![1.0, 0.0, 1.0]]);
        let (a, b, w) = (random(3, 4, 3), random(3, 4, 4), random(4, 4, 5));
        let sum = a.zip_with(&b, |x, y| x + y).unwrap();
        let lhs = run_hyperconv(&attr, &sum, &w);
        let rhs = run_hyperconv(&attr, &a, &w).zip_with(&run_hyperconv(&attr, &b, &w), |x, y| x + y).unwrap();
        assert!(lhs.zip_with(&rhs, |x, y| (x - y).abs()).unwrap().max_abs() < 1e-10);
    }

    fn attend(a: &Tensor, table: &Tensor, hour: usize) -> (Vec<f64>, Vec<f64>) {
        let mut t = Tape::new();
        let a = t.constant(a.clone());
        let table = t.constant(table.clone());
        let r = time_attend(&mut t, a, table, hour).unwrap();
        (t.value(r.alpha).data().to_vec(), t.value(r.t_a).data().to_vec())
    }

    #[test]
    fn attention_cases() {
        let table = random(HOURS, 3, 9);
        let same = Tensor::from_rows(&vec![vec![0.1, 0.2, 0.3]; 4]);
        let (alpha, t_a) = attend(&same, &table, 5);
        assert!(alpha.iter().all(|w| (w - 0.25).abs() < 1e-15));
        for (x, y) in t_a.iter().zip([0.1, 0.2, 0.3]) {
            assert!((x - y).abs() < 1e-15);
        }

        let single = Tensor::from_rows(&[vec![0.5, -0.5, 2.0]]);
        let (alpha, t_a) = attend(&single, &table, 0);
        assert_eq!(alpha, vec![1.0]);
        assert_eq!(t_a, single.data());

        // Dot products 10 and 0 against e = (1, 0).
        let mut tab = Tensor::zeros(&[HOURS, 2]);
        tab.set(7, 0, 1.0);
        let two = Tensor::from_rows(&[vec![10.0, 1.0], vec![0.0, 3.0]]);
        let (alpha, t_a) = attend(&two, &tab, 7);
        let expected = 1.0 / (1.0 + (-10.0f64).exp());
        assert!((alpha[0] - expected).abs() < 1e-15 && alpha[0] >= 0.9999);
        // t_a lies within 1e-3 of the dominant row relative to the row scale.
        assert!((t_a[0] - 10.0).abs() / 10.0 < 1e-3 && (t_a[1] - 1.0).abs() < 1e-3);
    }

    #[test]
    fn attention_shift_invariant() {
        // Adding a constant to every dot product: shift the time embedding along a direction
        // orthogonal to nothing is awkward, so shift by appending a constant feature.
        let a = random(5, 3, 21);
        let mut a_aug = Tensor::zeros(&[5, 4]);
        for i in 0..5 {
            for k in 0..3 {
                a_aug.set(i, k, a.get(i, k));
            }
            a_aug.set(i, 3, 1.0);
        }
        let table = random(HOURS, 3, 22);
        let mut table_aug = Tensor::zeros(&[HOURS, 4]);
        for h in 0..HOURS {
            for k in 0..3 {
                table_aug.set(h, k, table.get(h, k));
            }
            table_aug.set(h, 3, 4.5);
        }
        let (alpha, _) = attend(&a, &table, 3);
        let (alpha_shift, _) = attend(&a_aug, &table_aug, 3);
        for (x, y) in alpha.iter().zip(&alpha_shift) {
            assert!((x - y).abs() < 1e-9);
        }
        assert!((alpha.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    fn generator_store(s: usize) -> ParameterStore {
        let mut store = ParameterStore::new();
        register_generator(&mut store, Branch::Origin, s, 3).unwrap();
        register_generator(&mut store, Branch::Destination, s, 3).unwrap();
        store
    }

    fn generate(store: &ParameterStore, t_a: &Tensor, branch: Branch) -> Tensor {
        let mut t = Tape::new();
        let x = t.constant(t_a.clone());
        let w = generate_transform(&mut t, store, x, branch).unwrap();
        t.value(w).clone()
    }

    #[test]
    fn generator_zero_context_halves_base() {
        let s = 3;
        let store = generator_store(s);
        let w = generate(&store, &Tensor::zeros(&[1, s]), Branch::Origin);
        let base = store.get("gen.o.base").unwrap();
        assert_eq!(w, base.map(|v| 0.5 * v));
    }

    #[test]
    fn generator_saturated_gate_returns_base() {
        let s = 3;
        let mut store = generator_store(s);
        store.set_value("gen.d.gate.b", Tensor::full(&[s * s], 60.0)).unwrap();
        let w = generate(&store, &Tensor::zeros(&[1, s]), Branch::Destination);
        let base = store.get("gen.d.base").unwrap();
        assert!(w.zip_with(base, |a, b| (a - b).abs()).unwrap().max_abs() < 1e-20);
    }

    #[test]
    fn generator_matches_hand_chain() {
        let s = 3;
        let mut store = generator_store(s);
        store.set_value("gen.o.f2.w", Tensor::identity(s)).unwrap();
        store.set_value("gen.o.f1.b", random(1, s * s, 40).reshaped(&[s * s]).unwrap()).unwrap();
        store.set_value("gen.o.gate.b", random(1, s * s, 41).reshaped(&[s * s]).unwrap()).unwrap();
        let t_a = random(1, s, 42);
        let got = generate(&store, &t_a, Branch::Origin);

        let f1w = store.get("gen.o.f1.w").unwrap();
        let f1b = store.get("gen.o.f1.b").unwrap();
        let gw = store.get("gen.o.gate.w").unwrap();
        let gb = store.get("gen.o.gate.b").unwrap();
        let base = store.get("gen.o.base").unwrap();
        for r in 0..s {
            for c in 0..s {
                // W'[r][c] = F1(t_a)[r*s + c] since F2 = I.
                let k = r * s + c;
                let w1: f64 = (0..s).map(|q| t_a.data()[q] * f1w.get(q, k)).sum::<f64>() + f1b.data()[k];
                // β is the transpose of the reshaped gate: β[r][c] = gate[c*s + r].
                let kg = c * s + r;
                let z: f64 = (0..s).map(|q| t_a.data()[q] * gw.get(q, kg)).sum::<f64>() + gb.data()[kg];
                let beta = 1.0 / (1.0 + (-z).exp());
                let want = beta * base.get(r, c) + (1.0 - beta) * w1;
                assert!((got.get(r, c) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn branches_share_no_parameters() {
        let s = 2;
        let store = generator_store(s);
        let o: Vec<String> = store.names().filter(|n| n.starts_with("gen.o.")).map(str::to_string).collect();
        let d: Vec<String> = store.names().filter(|n| n.starts_with("gen.d.")).map(str::to_string).collect();
        assert_eq!(o.len(), 6);
        assert_eq!(d.len(), 6);
        let w = generate(&store, &random(1, s, 1), Branch::Destination);
        assert_eq!(w.shape(), &[s, s]);
    }

    #[test]
    fn gradients_flow_through_attention_and_generator() {
        let (m, s) = (3, 3);
        let mut store = ParameterStore::new();
        register_attributes(&mut store, m, s, 1, 5).unwrap();
        register_generator(&mut store, Branch::Origin, s, 5).unwrap();
        // Larger values keep every gradient comfortably above finite-difference noise.
        for name in [ATTR_EMBED, TIME_EMBED] {
            let v = store.get(name).unwrap().map(|x| 3.0 * x);
            store.set_value(name, v).unwrap();
        }
        let attr = Tensor::from_rows(&[vec![1.0, 1.0, 0.0], vec![0.0, 1.0, 1.0]]);
        let prop = build_incidence(&attr).propagation();
        let target = random(s, s, 77);
        let build = |st: &ParameterStore| -> Result<(Tape, NodeId)> {
            let mut t = Tape::new();
            let p = t.constant(prop.clone());
            let a0 = t.param(st, ATTR_EMBED)?;
            let w0 = t.param(st, &hyper_weight(0))?;
            let a1 = hyperconv(&mut t, a0, p, w0)?;
            let table = t.param(st, TIME_EMBED)?;
            let att = time_attend(&mut t, a1, table, 9)?;
            let w = generate_transform(&mut t, st, att.t_a, Branch::Origin)?;
            let tgt = t.constant(target.clone());
            let loss = t.mse(w, tgt)?;
            Ok((t, loss))
        };
        let report = check_gradients(build, &store, 1e-6, 64).unwrap();
        for (name, c) in &report.params {
            if name.starts_with("time.embed") {
                continue;
            }
            assert!(c.max_rel_error <= 1e-4, "{name}: {c:?}");
        }
    }
}
