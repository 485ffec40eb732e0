//! Historical average, gravity, intervening-opportunity and radiation baselines.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Element-wise mean of the frames whose hour equals `hour`.
pub fn historical_average(frames: &[Tensor], hours: &[usize], hour: usize) -> Result<Tensor> {
    let mut acc: Option<Tensor> = None;
    let mut count = 0usize;
    for (f, &h) in frames.iter().zip(hours) {
        if h != hour {
            continue;
        }
        count += 1;
        match acc.as_mut() {
            Some(a) => a.add_assign(f)?,
            None => acc = Some(f.clone()),
        }
    }
    match acc {
        Some(a) => Ok(a.map(|v| v / count as f64)),
        None => Err(Error::invalid(format!("no training frame at hour {hour}"))),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GravityFit {
    pub log_k: f64,
    pub a: f64,
    pub b: f64,
    pub c: f64,
    /// Positive observations used.
    pub used: usize,
    /// Zero flows left out of the log-space fit.
    pub ignored_zero: usize,
}

/// OLS of `ln T = log_k + a ln m_i + b ln m_j - c ln d_ij` over positive flows.
pub fn gravity_fit(flows: &Tensor, populations: &[f64], dist: &Tensor) -> Result<GravityFit> {
    let n = populations.len();
    let mut rows = Vec::new();
    let mut ys = Vec::new();
    let mut ignored_zero = 0;
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let (t, d) = (flows.get(i, j), dist.get(i, j));
            if t <= 0.0 {
                ignored_zero += 1;
                continue;
            }
            if d <= 0.0 || populations[i] <= 0.0 || populations[j] <= 0.0 {
                continue;
            }
            rows.push([1.0, populations[i].ln(), populations[j].ln(), -d.ln()]);
            ys.push(t.ln());
        }
    }
    if rows.len() < 4 {
        return Err(Error::invalid(format!("gravity fit needs at least 4 positive flows, got {}", rows.len())));
    }
    let x = DMatrix::from_fn(rows.len(), 4, |r, c| rows[r][c]);
    let y = DVector::from_vec(ys);
    let svd = x.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let tol = smax * 1e-10 * rows.len() as f64;
    let rank = svd.singular_values.iter().filter(|&&s| s > tol).count();
    if rank < 4 {
        return Err(Error::invalid(format!(
            "gravity design matrix is rank deficient (rank {rank} of 4, singular values {:?}); \
             populations or distances do not vary enough",
            svd.singular_values.as_slice()
        )));
    }
    let beta = svd.solve(&y, tol).map_err(|e| Error::invalid(format!("gravity least squares failed: {e}")))?;
    Ok(GravityFit { log_k: beta[0], a: beta[1], b: beta[2], c: beta[3], used: rows.len(), ignored_zero })
}

pub fn gravity_predict(fit: &GravityFit, populations: &[f64], dist: &Tensor) -> Tensor {
    let n = populations.len();
    let mut out = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in 0..n {
            let d = dist.get(i, j);
            if i == j || d <= 0.0 || populations[i] <= 0.0 || populations[j] <= 0.0 {
                continue;
            }
            let v = (fit.log_k + fit.a * populations[i].ln() + fit.b * populations[j].ln() - fit.c * d.ln()).exp();
            out.set(i, j, if v.is_finite() { v.max(0.0) } else { 0.0 });
        }
    }
    out
}

/// Population of regions `k ∉ {i, j}` at distance from `i` below (`inclusive = false`)
/// or up to (`inclusive = true`) `d_ij`.
pub fn intervening(populations: &[f64], dist: &Tensor, inclusive: bool) -> Tensor {
    let n = populations.len();
    let mut s = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let dij = dist.get(i, j);
            let total: f64 = (0..n)
                .filter(|&k| k != i && k != j)
                .filter(|&k| if inclusive { dist.get(i, k) <= dij } else { dist.get(i, k) < dij })
                .map(|k| populations[k])
                .sum();
            s.set(i, j, total);
        }
    }
    s
}

/// Row sums of a flow matrix.
pub fn outflows(flows: &Tensor) -> Vec<f64> {
    (0..flows.rows()).map(|i| flows.row(i).iter().sum()).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct IomFit {
    pub gamma: f64,
    /// Strictly-closer intervening population.
    pub s: Tensor,
}

/// Schneider intervening-opportunity model, normalized per origin.
pub fn iom_predict(fit: &IomFit, populations: &[f64], outflow: &[f64]) -> Tensor {
    let n = populations.len();
    let mut out = Tensor::zeros(&[n, n]);
    for i in 0..n {
        if outflow[i] == 0.0 {
            continue;
        }
        // e^{-γ s}(1 - e^{-γ n}) written with expm1 so that small γ keeps precision.
        let raw: Vec<f64> = (0..n)
            .map(|j| {
                if j == i {
                    0.0
                } else {
                    (-fit.gamma * fit.s.get(i, j)).exp() * -(-fit.gamma * populations[j]).exp_m1()
                }
            })
            .collect();
        let z: f64 = raw.iter().sum();
        if z <= 0.0 {
            continue;
        }
        for j in 0..n {
            out.set(i, j, outflow[i] * raw[j] / z);
        }
    }
    out
}

/// Grid of 32 log-spaced γ over `[1e-8, 1e-2] · 1e4 / mean population`.
pub fn iom_gamma_grid(populations: &[f64]) -> Vec<f64> {
    let mean = populations.iter().sum::<f64>() / populations.len().max(1) as f64;
    let scale = if mean > 0.0 { 1e4 / mean } else { 1.0 };
    (0..32).map(|k| 10f64.powf(-8.0 + 6.0 * k as f64 / 31.0) * scale).collect()
}

fn smape(p: &Tensor, y: &Tensor) -> f64 {
    let mut total = 0.0;
    for (a, b) in p.data().iter().zip(y.data()) {
        let d = (a.abs() + b.abs()) / 2.0;
        if d > 0.0 {
            total += (a - b).abs() / d;
        }
    }
    total / p.len() as f64
}

/// Chooses γ on the grid minimizing SMAPE over the observed flow matrices.
pub fn iom_fit(observed: &[Tensor], populations: &[f64], dist: &Tensor) -> Result<IomFit> {
    if populations.iter().any(|&p| p < 0.0) {
        return Err(Error::invalid("negative population"));
    }
    if observed.is_empty() {
        return Err(Error::invalid("intervening-opportunity fit needs observed flows"));
    }
    let s = intervening(populations, dist, false);
    let outs: Vec<Vec<f64>> = observed.iter().map(outflows).collect();
    let mut best: Option<(f64, f64)> = None;
    for gamma in iom_gamma_grid(populations) {
        let fit = IomFit { gamma, s: s.clone() };
        let err: f64 = observed.iter().zip(&outs).map(|(y, o)| smape(&iom_predict(&fit, populations, o), y)).sum();
        if best.is_none_or(|(e, _)| err < e) {
            best = Some((err, gamma));
        }
    }
    Ok(IomFit { gamma: best.expect("non-empty grid").1, s })
}

/// Parameter-free radiation model.
pub fn radiation_predict(populations: &[f64], outflow: &[f64], dist: &Tensor) -> Tensor {
    let n = populations.len();
    let s = intervening(populations, dist, true);
    let mut out = Tensor::zeros(&[n, n]);
    for i in 0..n {
        let mi = populations[i];
        for j in 0..n {
            if i == j {
                continue;
            }
            let (nj, sij) = (populations[j], s.get(i, j));
            let denom = (mi + sij) * (mi + nj + sij);
            if denom > 0.0 {
                out.set(i, j, outflow[i] * mi * nj / denom);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn line_dist(xs: &[f64]) -> Tensor {
        let n = xs.len();
        let mut d = Tensor::zeros(&[n, n]);
        for i in 0..n {
            for j in 0..n {
                d.set(i, j, (xs[i] - xs[j]).abs());
            }
        }
        d
    }

    #[test]
    fn ha_cases() {
        let f1 = Tensor::from_rows(&[vec![0.0, 2.0]]);
        let f2 = Tensor::from_rows(&[vec![0.0, 4.0]]);
        let f3 = Tensor::from_rows(&[vec![9.0, 9.0]]);
        assert_eq!(historical_average(&[f1.clone()], &[3], 3).unwrap(), f1);
        let ha = historical_average(&[f1, f3, f2], &[3, 4, 3], 3).unwrap();
        assert_eq!(ha.data(), &[0.0, 3.0]);
        assert!(historical_average(&[ha], &[1], 2).is_err());
    }

    #[test]
    fn gravity_round_trip() {
        let pops = [120.0, 340.0, 75.0, 900.0, 410.0, 55.0];
        let xs: [f64; 6] = [0.0, 1.3, 2.9, 4.2, 7.7, 11.0];
        let ys = [0.0, 2.2, -1.0, 3.1, 0.4, -2.5];
        let n = pops.len();
        let mut d = Tensor::zeros(&[n, n]);
        for i in 0..n {
            for j in 0..n {
                d.set(i, j, (xs[i] - xs[j]).hypot(ys[i] - ys[j]));
            }
        }
        let mut flows = Tensor::zeros(&[n, n]);
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    flows.set(i, j, 0.01 * pops[i] * pops[j] / d.get(i, j).powi(2));
                }
            }
        }
        let fit = gravity_fit(&flows, &pops, &d).unwrap();
        assert!((fit.a - 1.0).abs() < 1e-6 && (fit.b - 1.0).abs() < 1e-6 && (fit.c - 2.0).abs() < 1e-6);
        assert!((fit.log_k - 0.01f64.ln()).abs() < 1e-6);
        let pred = gravity_predict(&fit, &pops, &d);
        for i in 0..n {
            assert_eq!(pred.get(i, i), 0.0);
        }
    }

    #[test]
    fn gravity_degenerate_design() {
        // Equal populations and every pair equidistant.
        let n = 4;
        let mut d = Tensor::full(&[n, n], 2.0);
        let mut flows = Tensor::full(&[n, n], 5.0);
        for i in 0..n {
            d.set(i, i, 0.0);
            flows.set(i, i, 0.0);
        }
        let err = gravity_fit(&flows, &[100.0; 4], &d).unwrap_err();
        assert!(err.to_string().contains("rank deficient"));
    }

    #[test]
    fn iom_cases() {
        // Two regions: the single destination takes all flow.
        let d2 = line_dist(&[0.0, 1.0]);
        let fit = IomFit { gamma: 1e-3, s: intervening(&[50.0, 80.0], &d2, false) };
        assert_eq!(fit.s, Tensor::zeros(&[2, 2]));
        let p = iom_predict(&fit, &[50.0, 80.0], &[7.0, 3.0]);
        assert!((p.get(0, 1) - 7.0).abs() < 1e-12 && (p.get(1, 0) - 3.0).abs() < 1e-12);

        // Small γ: shares proportional to destination populations.
        let pops = [100.0, 300.0, 200.0, 500.0];
        let d = line_dist(&[0.0, 1.0, 2.5, 4.0]);
        let tiny = IomFit { gamma: 1e-12, s: intervening(&pops, &d, false) };
        let p = iom_predict(&tiny, &pops, &[10.0; 4]);
        let others: f64 = 300.0 + 200.0 + 500.0;
        for j in 1..4 {
            // First-order error is of order γ times the populations involved.
            let want = 10.0 * pops[j] / others;
            assert!((p.get(0, j) - want).abs() / want < 1e-8);
        }

        // Three regions on a line at 0, 1, 3 with γ = 0.01.
        let pops = [10.0, 20.0, 30.0];
        let d = line_dist(&[0.0, 1.0, 3.0]);
        let fit = IomFit { gamma: 0.01, s: intervening(&pops, &d, false) };
        // From region 0: region 1 is closer than 2, so s_02 = 20 and s_01 = 0.
        assert_eq!((fit.s.get(0, 1), fit.s.get(0, 2)), (0.0, 20.0));
        let p = iom_predict(&fit, &pops, &[6.0, 0.0, 0.0]);
        let t1 = 1.0 - (-0.01f64 * 20.0).exp();
        let t2 = (-0.01f64 * 20.0).exp() - (-0.01f64 * 50.0).exp();
        assert!((p.get(0, 1) - 6.0 * t1 / (t1 + t2)).abs() < 1e-10);
        assert!((p.get(0, 2) - 6.0 * t2 / (t1 + t2)).abs() < 1e-10);
        assert!(p.row(1).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn iom_fit_prefers_matching_gamma() {
        let pops = [100.0, 300.0, 200.0, 500.0, 50.0];
        let d = line_dist(&[0.0, 1.0, 2.5, 4.0, 6.0]);
        let grid = iom_gamma_grid(&pops);
        assert_eq!(grid.len(), 32);
        let truth = IomFit { gamma: grid[20], s: intervening(&pops, &d, false) };
        let obs = iom_predict(&truth, &pops, &[40.0, 10.0, 25.0, 60.0, 5.0]);
        let fit = iom_fit(&[obs], &pops, &d).unwrap();
        assert_eq!(fit.gamma, grid[20]);
    }

    #[test]
    fn radiation_cases() {
        let d = line_dist(&[0.0, 1.0]);
        let p = radiation_predict(&[100.0, 100.0], &[8.0, 4.0], &d);
        assert!((p.get(0, 1) - 4.0).abs() < 1e-12);
        assert!((p.get(1, 0) - 2.0).abs() < 1e-12);

        let p = radiation_predict(&[100.0, 0.0, 50.0], &[8.0, 4.0, 2.0], &line_dist(&[0.0, 1.0, 2.0]));
        assert_eq!(p.get(0, 1), 0.0);
    }

    proptest! {
        #[test]
        fn baseline_invariants(
            pops in proptest::collection::vec(1.0f64..1000.0, 5),
            xs in proptest::collection::vec(-10.0f64..10.0, 5),
            outs in proptest::collection::vec(0.0f64..50.0, 5),
            gamma in 1e-6f64..1e-1,
        ) {
            let d = line_dist(&xs);
            let fit = IomFit { gamma, s: intervening(&pops, &d, false) };
            let iom = iom_predict(&fit, &pops, &outs);
            let rad = radiation_predict(&pops, &outs, &d);
            for i in 0..5 {
                let row: f64 = iom.row(i).iter().sum();
                if outs[i] > 0.0 {
                    prop_assert!((row - outs[i]).abs() <= 1e-10 * outs[i].max(1.0));
                }
                prop_assert_eq!(iom.get(i, i), 0.0);
                prop_assert_eq!(rad.get(i, i), 0.0);
            }
            prop_assert!(iom.data().iter().chain(rad.data()).all(|&v| v >= 0.0));

            // Intervening population grows with distance from a fixed origin.
            let s = intervening(&pops, &d, true);
            let mut order: Vec<usize> = (1..5).collect();
            order.sort_by(|&a, &b| d.get(0, a).partial_cmp(&d.get(0, b)).unwrap());
            for w in order.windows(2) {
                let (a, b) = (w[0], w[1]);
                if d.get(0, a) < d.get(0, b) {
                    prop_assert!(s.get(0, a) <= s.get(0, b));
                }
            }
        }
    }
}
