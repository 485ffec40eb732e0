//! OD-frame decomposition into origin-origin / destination-destination
//! relations, symmetric normalization, and the attribute-hypergraph incidence.

use crate::autodiff::Tensor;

/// Normalized relation matrices for one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct RelationPair {
    pub oo: Tensor,
    pub dd: Tensor,
}

/// `yo = (y yᵀ) ⊙ (1 - I)` and `yd = (yᵀ y) ⊙ (1 - I)`.
pub fn decompose(y: &Tensor) -> (Tensor, Tensor) {
    let n = y.rows();
    let mut yo = Tensor::zeros(&[n, n]);
    let mut yd = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in i + 1..n {
            let (mut o, mut d) = (0.0, 0.0);
            for k in 0..n {
                o += y.get(i, k) * y.get(j, k);
                d += y.get(k, i) * y.get(k, j);
            }
            yo.set(i, j, o);
            yo.set(j, i, o);
            yd.set(i, j, d);
            yd.set(j, i, d);
        }
    }
    (yo, yd)
}

/// `D^{-1/2} a D^{-1/2} + I` with row-sum degrees; zero-degree rows keep only the identity.
pub fn sym_normalize(a: &Tensor) -> Tensor {
    let n = a.rows();
    let inv_sqrt: Vec<f64> = (0..n)
        .map(|i| {
            let d: f64 = a.row(i).iter().sum();
            if d > 0.0 { 1.0 / d.sqrt() } else { 0.0 }
        })
        .collect();
    let mut out = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in 0..n {
            let mut v = (inv_sqrt[i] * inv_sqrt[j]) * a.get(i, j);
            if i == j {
                v += 1.0;
            }
            out.set(i, j, v);
        }
    }
    out
}

pub fn relation_pair(y: &Tensor) -> RelationPair {
    let (yo, yd) = decompose(y);
    RelationPair { oo: sym_normalize(&yo), dd: sym_normalize(&yd) }
}

/// Attribute hypergraph: attributes are vertices, regions are hyperedges.
#[derive(Clone, Debug, PartialEq)]
pub struct Incidence {
    /// `M x N`, `h[v][e] = 1` iff region `e` carries attribute `v`.
    pub h: Tensor,
    pub dv: Vec<f64>,
    pub de: Vec<f64>,
}

impl Incidence {
    pub fn zero_degree_vertices(&self) -> Vec<usize> {
        self.dv.iter().enumerate().filter(|(_, &d)| d == 0.0).map(|(i, _)| i).collect()
    }

    /// `D_h^{-1} H B_h^{-1} Hᵀ` (`M x M`), zero-degree inverses taken as 0.
    pub fn propagation(&self) -> Tensor {
        let (m, n) = (self.h.rows(), self.h.cols());
        let inv = |d: f64| if d > 0.0 { 1.0 / d } else { 0.0 };
        let mut p = Tensor::zeros(&[m, m]);
        for u in 0..m {
            for v in 0..m {
                let mut s = 0.0;
                for e in 0..n {
                    s += self.h.get(u, e) * inv(self.de[e]) * self.h.get(v, e);
                }
                p.set(u, v, inv(self.dv[u]) * s);
            }
        }
        p
    }

    /// Symmetric-normalized attribute co-occurrence graph `H Hᵀ` with zero diagonal,
    /// used when the hypergraph is ablated.
    pub fn cooccurrence(&self) -> Tensor {
        let m = self.h.rows();
        let mut a = self.h.matmul(&self.h.transpose().expect("rank 2")).expect("conformant");
        for i in 0..m {
            a.set(i, i, 0.0);
        }
        sym_normalize(&a)
    }
}

pub fn build_incidence(attr: &Tensor) -> Incidence {
    let h = attr.transpose().expect("attribute matrix is rank 2");
    let dv: Vec<f64> = (0..h.rows()).map(|v| h.row(v).iter().sum()).collect();
    let de: Vec<f64> = (0..h.cols()).map(|e| (0..h.rows()).map(|v| h.get(v, e)).sum()).collect();
    let inc = Incidence { h, dv, de };
    let zero = inc.zero_degree_vertices();
    if !zero.is_empty() {
        log::warn!("{} attribute(s) belong to no region and receive no hypergraph message: {:?}", zero.len(), zero);
    }
    inc
}
