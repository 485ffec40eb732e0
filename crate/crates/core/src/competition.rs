//! Region clustering, the competition label matrix, and the two adversarial
//! auxiliary losses.

use std::io::Write;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{NodeId, Tape, Tensor};
use crate::error::{Error, Result};

pub const CLUSTER_WEIGHT: &str = "aux.cluster.w";
pub const EDGE_WEIGHT: &str = "aux.edge.w";
pub const DEFAULT_MAX_ITERS: usize = 300;

#[derive(Clone, Debug, PartialEq)]
pub struct ClusterModel {
    /// `k x F`.
    pub centroids: Tensor,
    pub labels: Vec<usize>,
    pub inertia: f64,
    /// Inertia after each assignment step.
    pub trace: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, cent) in centroids.iter().enumerate() {
        let d = sq_dist(point, cent);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// k-means++ seeding followed by Lloyd iterations.
pub fn kmeans(points: &Tensor, k: usize, seed: u64, max_iters: usize) -> Result<ClusterModel> {
    let p = points.rows();
    if k == 0 || k > p {
        return Err(Error::invalid(format!("cannot form {k} clusters from {p} points")));
    }
    let rows: Vec<&[f64]> = (0..p).map(|i| points.row(i)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut centroids: Vec<Vec<f64>> = vec![rows[rng.gen_range(0..p)].to_vec()];
    while centroids.len() < k {
        let d2: Vec<f64> = rows.iter().map(|r| nearest(r, &centroids).1).collect();
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.gen::<f64>() * total;
            let mut chosen = p - 1;
            for (i, d) in d2.iter().enumerate() {
                if u < *d {
                    chosen = i;
                    break;
                }
                u -= d;
            }
            chosen
        } else {
            rng.gen_range(0..p)
        };
        centroids.push(rows[pick].to_vec());
    }

    let f = points.cols();
    let mut labels = vec![usize::MAX; p];
    let mut trace = Vec::new();
    for _ in 0..max_iters.max(1) {
        let mut changed = false;
        let mut inertia = 0.0;
        for (i, r) in rows.iter().enumerate() {
            let (c, d) = nearest(r, &centroids);
            inertia += d;
            if labels[i] != c {
                labels[i] = c;
                changed = true;
            }
        }
        trace.push(inertia);
        if !changed {
            break;
        }
        let mut sums = vec![vec![0.0; f]; k];
        let mut counts = vec![0usize; k];
        for (i, r) in rows.iter().enumerate() {
            counts[labels[i]] += 1;
            for (s, v) in sums[labels[i]].iter_mut().zip(r.iter()) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                let far = (0..p)
                    .max_by(|&a, &b| {
                        let da = sq_dist(rows[a], &centroids[labels[a]]);
                        let db = sq_dist(rows[b], &centroids[labels[b]]);
                        da.partial_cmp(&db).unwrap().then(b.cmp(&a))
                    })
                    .expect("p > 0");
                centroids[c] = rows[far].to_vec();
                let old = labels[far];
                counts[old] -= 1;
                counts[c] = 1;
                labels[far] = c;
            }
        }
    }
    let inertia = rows.iter().zip(&labels).map(|(r, &c)| sq_dist(r, &centroids[c])).sum();
    let centroids = Tensor::matrix(k, f, centroids.concat());
    Ok(ClusterModel { centroids, labels, inertia, trace })
}

/// Clusters regions on their binary attribute rows.
pub fn cluster_labels(attr: &Tensor, k2: usize, seed: u64) -> Result<Vec<usize>> {
    Ok(kmeans(attr, k2, seed, DEFAULT_MAX_ITERS)?.labels)
}

/// Column-wise zero-mean unit-variance scaling; constant columns become zero.
pub fn standardize(x: &Tensor) -> Tensor {
    let (r, c) = (x.rows(), x.cols());
    let mut out = x.clone();
    for j in 0..c {
        let mean = (0..r).map(|i| x.get(i, j)).sum::<f64>() / r as f64;
        let var = (0..r).map(|i| (x.get(i, j) - mean).powi(2)).sum::<f64>() / r as f64;
        let sd = var.sqrt();
        for i in 0..r {
            out.set(i, j, if sd > 0.0 { (x.get(i, j) - mean) / sd } else { 0.0 });
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompetitionMatrix {
    /// `N x N` binary.
    pub values: Tensor,
    pub labels: Vec<usize>,
}

impl CompetitionMatrix {
    pub fn from_labels(labels: Vec<usize>) -> Self {
        let n = labels.len();
        let mut values = Tensor::zeros(&[n, n]);
        for i in 0..n {
            for j in 0..n {
                if labels[i] == labels[j] {
                    values.set(i, j, 1.0);
                }
            }
        }
        CompetitionMatrix { values, labels }
    }

    pub fn competes(&self, i: usize, j: usize) -> bool {
        self.labels[i] == self.labels[j]
    }

    /// Regions competing with `j`, excluding `j`.
    pub fn partners(&self, j: usize) -> Vec<usize> {
        (0..self.labels.len()).filter(|&p| p != j && self.competes(j, p)).collect()
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let n = self.labels.len();
        for i in 0..n {
            let row: Vec<String> = (0..n).map(|j| format!("{}", self.values.get(i, j) as u8)).collect();
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }
}

/// Clusters the standardized concatenation `[attr | dist]`.
pub fn competition_matrix(attr: &Tensor, dist: &Tensor, k2: usize, seed: u64) -> Result<CompetitionMatrix> {
    let n = attr.rows();
    if dist.rows() != n || dist.cols() != n {
        return Err(Error::Shape {
            op: "competition-matrix",
            shapes: vec![attr.shape().to_vec(), dist.shape().to_vec()],
        });
    }
    let (m, f) = (attr.cols(), attr.cols() + n);
    let mut feats = Tensor::zeros(&[n, f]);
    for i in 0..n {
        for j in 0..m {
            feats.set(i, j, attr.get(i, j));
        }
        for j in 0..n {
            feats.set(i, m + j, dist.get(i, j));
        }
    }
    let model = kmeans(&standardize(&feats), k2, seed, DEFAULT_MAX_ITERS)?;
    Ok(CompetitionMatrix::from_labels(model.labels))
}

/// Mean cross-entropy of `d · w_n` (`w_n`: `S x k2`) against cluster labels.
pub fn cluster_loss(tape: &mut Tape, d: NodeId, labels: &[usize], w_n: NodeId) -> Result<NodeId> {
    let k2 = tape.value(w_n).cols();
    if let Some(&bad) = labels.iter().find(|&&l| l >= k2) {
        return Err(Error::invalid(format!("cluster label {bad} out of range for k2 = {k2}")));
    }
    let logits = tape.matmul(d, w_n)?;
    tape.softmax_cross_entropy(logits, labels)
}

#[derive(Clone, Copy, Debug)]
pub struct EdgeLoss {
    pub loss: NodeId,
    pub used: usize,
    pub skipped: usize,
}

/// Samples one competing partner per edge; edges without a partner are skipped.
pub fn sample_triples<R: Rng>(edges: &[(usize, usize)], comp: &CompetitionMatrix, rng: &mut R) -> (Vec<(usize, usize, usize)>, usize) {
    let mut triples = Vec::with_capacity(edges.len());
    let mut skipped = 0;
    for &(i, j) in edges {
        let partners = comp.partners(j);
        if partners.is_empty() {
            skipped += 1;
            continue;
        }
        let p = partners[rng.gen_range(0..partners.len())];
        triples.push((i, j, p));
    }
    (triples, skipped)
}

/// Bilinear score `[σ(o_i), σ(d_j)] · w_eg · g_i` per row.
fn scores(tape: &mut Tape, so: NodeId, sd: NodeId, g: NodeId, w_eg: NodeId, is: &[usize], js: &[usize]) -> Result<NodeId> {
    let oi = tape.lookup_rows(so, is)?;
    let dj = tape.lookup_rows(sd, js)?;
    let gi = tape.lookup_rows(g, is)?;
    let e = tape.concat(&[oi, dj])?;
    let ew = tape.matmul(e, w_eg)?;
    let prod = tape.mul(ew, gi)?;
    tape.row_sum(prod)
}

/// Mean squared gap between positive and partner scores.
pub fn edge_loss<R: Rng>(
    tape: &mut Tape,
    o: NodeId,
    d: NodeId,
    g: NodeId,
    edges: &[(usize, usize)],
    comp: &CompetitionMatrix,
    w_eg: NodeId,
    rng: &mut R,
) -> Result<EdgeLoss> {
    let (triples, skipped) = sample_triples(edges, comp, rng);
    if triples.is_empty() {
        log::warn!("edge loss has no usable edges ({skipped} skipped)");
        let loss = tape.constant(Tensor::scalar(0.0));
        return Ok(EdgeLoss { loss, used: 0, skipped });
    }
    let is: Vec<usize> = triples.iter().map(|t| t.0).collect();
    let js: Vec<usize> = triples.iter().map(|t| t.1).collect();
    let ps: Vec<usize> = triples.iter().map(|t| t.2).collect();
    let so = tape.sigmoid(o)?;
    let sd = tape.sigmoid(d)?;
    let pos = scores(tape, so, sd, g, w_eg, &is, &js)?;
    let neg = scores(tape, so, sd, g, w_eg, &is, &ps)?;
    let loss = tape.mse(pos, neg)?;
    Ok(EdgeLoss { loss, used: triples.len(), skipped })
}

pub fn write_labels_csv<W: Write>(mut w: W, labels: &[usize]) -> std::io::Result<()> {
    writeln!(w, "region_id,cluster_id")?;
    for (i, l) in labels.iter().enumerate() {
        writeln!(w, "{i},{l}")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand_distr::{Distribution, Normal};

    fn blobs(per: usize, sep: f64, seed: u64) -> (Tensor, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let mut data = Vec::new();
        let mut truth = Vec::new();
        for b in 0..2 {
            for _ in 0..per {
                data.push(b as f64 * sep + normal.sample(&mut rng));
                data.push(normal.sample(&mut rng));
                truth.push(b);
            }
        }
        (Tensor::matrix(2 * per, 2, data), truth)
    }

    fn brute_force_consistent(points: &Tensor, model: &ClusterModel) -> bool {
        let k = model.centroids.rows();
        (0..points.rows()).all(|i| {
            let own = sq_dist(points.row(i), model.centroids.row(model.labels[i]));
            (0..k).all(|c| own <= sq_dist(points.row(i), model.centroids.row(c)) + 1e-12)
        })
    }

    fn same_partition(a: &[usize], b: &[usize]) -> bool {
        (0..a.len()).all(|i| (0..a.len()).all(|j| (a[i] == a[j]) == (b[i] == b[j])))
    }

    #[test]
    fn kmeans_single_cluster_is_mean() {
        let pts = Tensor::from_rows(&[vec![0.0, 0.0], vec![2.0, 0.0], vec![4.0, 6.0]]);
        let m = kmeans(&pts, 1, 1, 300).unwrap();
        assert!((m.centroids.get(0, 0) - 2.0).abs() < 1e-12 && (m.centroids.get(0, 1) - 2.0).abs() < 1e-12);
        // Sum of squared deviations: x 4+0+4, y 4+4+16.
        assert!((m.inertia - 32.0).abs() < 1e-12);
    }

    #[test]
    fn kmeans_two_points_two_clusters() {
        let pts = Tensor::from_rows(&[vec![0.0, 1.0], vec![5.0, -1.0]]);
        let m = kmeans(&pts, 2, 9, 300).unwrap();
        assert_ne!(m.labels[0], m.labels[1]);
        assert_eq!(m.inertia, 0.0);
        assert!(kmeans(&pts, 3, 9, 300).is_err());
    }

    #[test]
    fn kmeans_separates_blobs() {
        let (pts, truth) = blobs(40, 10.0, 3);
        let m = kmeans(&pts, 2, 5, 300).unwrap();
        assert!(same_partition(&m.labels, &truth));
        assert!(brute_force_consistent(&pts, &m));
    }

    #[test]
    fn cluster_labels_cases() {
        let same = Tensor::from_rows(&vec![vec![1.0, 0.0, 1.0]; 4]);
        assert_eq!(cluster_labels(&same, 1, 3).unwrap(), vec![0; 4]);

        let groups = Tensor::from_rows(&[
            vec![1.0, 1.0, 0.0, 0.0],
            vec![1.0, 1.0, 0.0, 0.0],
            vec![0.0, 0.0, 1.0, 1.0],
            vec![0.0, 0.0, 1.0, 1.0],
            vec![0.0, 0.0, 1.0, 0.0],
        ]);
        let l = cluster_labels(&groups, 2, 11).unwrap();
        assert!(same_partition(&l, &[0, 0, 1, 1, 1]));
        assert_eq!(l, cluster_labels(&groups, 2, 11).unwrap());
    }

    #[test]
    fn competition_matrix_cases() {
        let attr = Tensor::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 1.0]]);
        let mut dist = Tensor::zeros(&[4, 4]);
        for i in 0..4 {
            for j in 0..4 {
                let far = (i < 2) != (j < 2);
                dist.set(i, j, if i == j { 0.0 } else if far { 50.0 } else { 1.0 });
            }
        }
        let all = competition_matrix(&attr, &dist, 1, 1).unwrap();
        assert_eq!(all.values, Tensor::full(&[4, 4], 1.0));

        let two = competition_matrix(&attr, &dist, 2, 1).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(two.values.get(i, j), if (i < 2) == (j < 2) { 1.0 } else { 0.0 });
            }
        }
        assert_eq!(two.partners(0), vec![1]);
    }

    #[test]
    fn cluster_loss_cases() {
        let mut t = Tape::new();
        let d = t.constant(Tensor::from_rows(&[vec![0.3, -1.0], vec![2.0, 0.5]]));
        let zero = t.constant(Tensor::zeros(&[2, 3]));
        let l = cluster_loss(&mut t, d, &[0, 2], zero).unwrap();
        assert!((t.value(l).item() - 3f64.ln()).abs() < 1e-15);

        // Identity classifier on one-hot rows with margin 100.
        let sharp = t.constant(Tensor::from_rows(&[vec![100.0, 0.0], vec![0.0, 100.0]]));
        let eye = t.constant(Tensor::identity(2));
        let l = cluster_loss(&mut t, sharp, &[0, 1], eye).unwrap();
        assert!(t.value(l).item() < 1e-8);

        // Hand softmax: logits rows (0.3, -1.0) and (2.0, 0.5) with labels 1 and 0.
        let l = cluster_loss(&mut t, d, &[1, 0], eye).unwrap();
        let ce = |z: [f64; 2], y: usize| (z[0].exp() + z[1].exp()).ln() - z[y];
        let want = (ce([0.3, -1.0], 1) + ce([2.0, 0.5], 0)) / 2.0;
        assert!((t.value(l).item() - want).abs() < 1e-12);

        assert!(cluster_loss(&mut t, d, &[0, 2], eye).is_err());
    }

    #[test]
    fn reversal_negates_cluster_gradient_exactly() {
        let d_val = Tensor::from_rows(&[vec![0.3, -1.0], vec![2.0, 0.5], vec![-0.2, 0.1]]);
        let w_val = Tensor::from_rows(&[vec![0.5, -0.4, 0.2], vec![0.1, 0.9, -0.3]]);
        let grad = |reverse: bool| {
            let mut t = Tape::new();
            let d = t.constant(d_val.clone());
            let x = if reverse { t.gradient_reverse(d).unwrap() } else { d };
            let w = t.constant(w_val.clone());
            let l = cluster_loss(&mut t, x, &[0, 2, 1], w).unwrap();
            t.gradients(l).unwrap().wrt(d).unwrap().clone()
        };
        let plain = grad(false);
        let rev = grad(true);
        assert_eq!(rev, plain.map(|v| -v));
    }

    fn comp_two_groups() -> CompetitionMatrix {
        CompetitionMatrix::from_labels(vec![0, 0, 1, 1])
    }

    #[test]
    fn edge_loss_degenerate_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut t = Tape::new();
        let o = t.constant(Tensor::full(&[3, 2], 0.2));
        let d = t.constant(Tensor::full(&[3, 2], -0.4));
        let g = t.constant(Tensor::full(&[3, 2], 1.0));
        let w = t.constant(Tensor::full(&[4, 2], 0.3));
        // Every region in its own cluster: no partner exists.
        let lonely = CompetitionMatrix::from_labels(vec![0, 1, 2]);
        let r = edge_loss(&mut t, o, d, g, &[(0, 1), (1, 2)], &lonely, w, &mut rng).unwrap();
        assert_eq!((r.used, r.skipped), (0, 2));
        assert_eq!(t.value(r.loss).item(), 0.0);

        let zero = t.constant(Tensor::zeros(&[4, 2]));
        let comp = CompetitionMatrix::from_labels(vec![0, 0, 0]);
        let r = edge_loss(&mut t, o, d, g, &[(0, 1)], &comp, zero, &mut rng).unwrap();
        assert_eq!(t.value(r.loss).item(), 0.0);
    }

    #[test]
    fn edge_loss_matches_hand_bilinear() {
        let o_val = Tensor::from_rows(&[vec![0.5, -0.2], vec![0.1, 0.3], vec![0.0, 0.0], vec![1.0, 1.0]]);
        let d_val = Tensor::from_rows(&[vec![0.2, 0.2], vec![-0.7, 0.4], vec![0.9, -0.1], vec![0.3, -0.5]]);
        let g_val = Tensor::from_rows(&[vec![1.5, -0.5], vec![0.2, 0.1], vec![0.0, 1.0], vec![0.4, 0.4]]);
        let w_val = Tensor::from_rows(&[vec![0.1, 0.2], vec![-0.3, 0.4], vec![0.5, -0.6], vec![0.7, 0.8]]);
        let comp = comp_two_groups();
        // Edge (0, 2) has the unique partner 3.
        let mut t = Tape::new();
        let (o, d, g, w) = (t.constant(o_val.clone()), t.constant(d_val.clone()), t.constant(g_val.clone()), t.constant(w_val.clone()));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = edge_loss(&mut t, o, d, g, &[(0, 2)], &comp, w, &mut rng).unwrap();

        let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
        let score = |i: usize, j: usize| {
            let e = [sig(o_val.get(i, 0)), sig(o_val.get(i, 1)), sig(d_val.get(j, 0)), sig(d_val.get(j, 1))];
            let mut s = 0.0;
            for a in 0..4 {
                for b in 0..2 {
                    s += e[a] * w_val.get(a, b) * g_val.get(i, b);
                }
            }
            s
        };
        let want = (score(0, 2) - score(0, 3)).powi(2);
        assert!((t.value(r.loss).item() - want).abs() < 1e-12);
        assert_eq!(r.used, 1);
    }

    #[test]
    fn partner_sampling_stays_in_cluster() {
        let comp = CompetitionMatrix::from_labels(vec![0, 1, 0, 1, 0]);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let edges: Vec<(usize, usize)> = (0..5).flat_map(|i| (0..5).map(move |j| (i, j))).collect();
        let (triples, skipped) = sample_triples(&edges, &comp, &mut rng);
        assert_eq!(skipped, 0);
        for (_, j, p) in triples {
            assert!(p != j && comp.competes(j, p));
        }
    }

    proptest! {
        #[test]
        fn kmeans_properties(vals in proptest::collection::vec(-5.0f64..5.0, 24), k in 1usize..5, seed in 0u64..1000) {
            let pts = Tensor::matrix(12, 2, vals);
            let m = kmeans(&pts, k, seed, 300).unwrap();
            prop_assert!(m.labels.iter().all(|&l| l < k));
            for w in m.trace.windows(2) {
                prop_assert!(w[1] <= w[0] + 1e-9);
            }
            prop_assert!(brute_force_consistent(&pts, &m));
        }

        #[test]
        fn competition_is_equivalence(labels in proptest::collection::vec(0usize..4, 1..12)) {
            let c = CompetitionMatrix::from_labels(labels);
            let n = c.labels.len();
            for i in 0..n {
                prop_assert_eq!(c.values.get(i, i), 1.0);
                for j in 0..n {
                    prop_assert_eq!(c.values.get(i, j), c.values.get(j, i));
                    for k in 0..n {
                        if c.values.get(i, j) == 1.0 && c.values.get(j, k) == 1.0 {
                            prop_assert_eq!(c.values.get(i, k), 1.0);
                        }
                    }
                }
            }
        }
    }
}
