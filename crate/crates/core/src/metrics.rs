//! Chart quality against ground truth: Kruskal stress (KS), stretch/rotation
//! residual (SR), trustworthiness (TW) and continuity (CT).

use std::cmp::Ordering;
use std::collections::BTreeMap;

use nalgebra::Matrix2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::KahanSum;

pub type Point = [f64; 2];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub ks: f64,
    pub sr: f64,
    pub tw: BTreeMap<usize, f64>,
    pub ct: BTreeMap<usize, f64>,
    pub n_evaluated: usize,
    pub subsample_seed: u64,
}

fn check_aligned(x: &[Point], xh: &[Point], min: usize) -> Result<()> {
    if x.len() != xh.len() {
        return Err(Error::Shape {
            expected: x.len(),
            got: xh.len(),
        });
    }
    if x.len() < min {
        return Err(Error::Degenerate(format!("need at least {min} points, got {}", x.len())));
    }
    Ok(())
}

fn dist(a: &Point, b: &Point) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Sine of the angle between the pairwise distance vectors of both sets.
pub fn kruskal_stress(x: &[Point], xh: &[Point]) -> Result<f64> {
    check_aligned(x, xh, 2)?;
    let pairs = || (0..x.len()).flat_map(|i| (i + 1..x.len()).map(move |j| (dist(&x[i], &x[j]), dist(&xh[i], &xh[j]))));
    let (mut nn, mut mm) = (KahanSum::default(), KahanSum::default());
    for (d, e) in pairs() {
        nn.add(d * d);
        mm.add(e * e);
    }
    if nn.total() == 0.0 || mm.total() == 0.0 {
        return Err(Error::Degenerate("all points coincide".into()));
    }
    // sin = |u - v| |u + v| / 2 for unit vectors u, v; stable near 0
    let (a, b) = (nn.total().sqrt(), mm.total().sqrt());
    let (mut minus, mut plus) = (KahanSum::default(), KahanSum::default());
    for (d, e) in pairs() {
        let (u, v) = (d / a, e / b);
        minus.add((u - v) * (u - v));
        plus.add((u + v) * (u + v));
    }
    Ok((minus.total().max(0.0).sqrt() * plus.total().max(0.0).sqrt() / 2.0).clamp(0.0, 1.0))
}

fn standardize(p: &[Point]) -> Result<Vec<Point>> {
    let n = p.len() as f64;
    let mut out = p.to_vec();
    for k in 0..2 {
        let mean = p.iter().map(|v| v[k]).collect::<KahanSum>().total() / n;
        let var = p.iter().map(|v| (v[k] - mean).powi(2)).collect::<KahanSum>().total() / n;
        let sd = var.sqrt();
        if !(sd > 0.0) {
            return Err(Error::Degenerate(format!("zero variance along axis {k}")));
        }
        out.iter_mut().for_each(|v| v[k] = (v[k] - mean) / sd);
    }
    Ok(out)
}

/// Best orthogonal `W` (reflections allowed) minimizing `sum |a_i - W b_i|^2`.
pub fn procrustes(a: &[Point], b: &[Point]) -> Matrix2<f64> {
    let mut m = Matrix2::<f64>::zeros();
    for (p, q) in a.iter().zip(b) {
        for r in 0..2 {
            for c in 0..2 {
                m[(r, c)] += p[r] * q[c];
            }
        }
    }
    let svd = m.svd(true, true);
    svd.u.expect("requested") * svd.v_t.expect("requested")
}

/// Mean squared residual after per-axis standardization and the optimal
/// orthogonal alignment of the embedding onto the ground truth.
pub fn sr_metric(x: &[Point], xh: &[Point]) -> Result<f64> {
    check_aligned(x, xh, 3)?;
    let xs = standardize(x)?;
    let hs = standardize(xh)?;
    let w = procrustes(&xs, &hs);
    let total: KahanSum = xs
        .iter()
        .zip(&hs)
        .map(|(a, b)| {
            let r0 = a[0] - (w[(0, 0)] * b[0] + w[(0, 1)] * b[1]);
            let r1 = a[1] - (w[(1, 0)] * b[0] + w[(1, 1)] * b[1]);
            r0 * r0 + r1 * r1
        })
        .collect();
    Ok(total.total() / x.len() as f64)
}

/// Squared distance; ranks only need the ordering.
fn rank_key(a: &Point, b: &Point) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    dx * dx + dy * dy
}

fn by_key(keys: &[f64]) -> impl Fn(&usize, &usize) -> Ordering + '_ {
    move |&a, &b| keys[a].total_cmp(&keys[b]).then(a.cmp(&b))
}

fn check_k(n: usize, k: usize) -> Result<()> {
    if k == 0 || 2 * k >= n {
        return Err(Error::config("k", format!("need 1 <= K < N/2, got K={k} for N={n}")));
    }
    Ok(())
}

/// Penalizes points that are among the `k` nearest in `near` but rank beyond
/// `k` in `ranked`. TW uses (embedding, truth); CT swaps the roles.
fn neighborhood_score(near: &[Point], ranked: &[Point], k: usize) -> Result<f64> {
    check_aligned(near, ranked, 3)?;
    let n = near.len();
    check_k(n, k)?;
    let penalty: Vec<usize> = (0..n)
        .into_par_iter()
        .map(|i| {
            let near_keys: Vec<f64> = near.iter().map(|p| rank_key(&near[i], p)).collect();
            let rank_keys: Vec<f64> = ranked.iter().map(|p| rank_key(&ranked[i], p)).collect();
            let mut others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
            others.select_nth_unstable_by(k - 1, by_key(&near_keys));
            let neighbors = &others[..k];
            let mut order: Vec<usize> = (0..n).filter(|&j| j != i).collect();
            order.sort_unstable_by(by_key(&rank_keys));
            let mut rank = vec![0usize; n];
            for (r, &j) in order.iter().enumerate() {
                rank[j] = r + 1;
            }
            neighbors.iter().map(|&j| rank[j].saturating_sub(k)).sum::<usize>()
        })
        .collect();
    let total: usize = penalty.iter().sum();
    let (n, k) = (n as f64, k as f64);
    Ok(1.0 - total as f64 / ((2.0 * n - 3.0 * k - 1.0) * n * k))
}

pub fn trustworthiness(x: &[Point], xh: &[Point], k: usize) -> Result<f64> {
    neighborhood_score(xh, x, k)
}

pub fn continuity(x: &[Point], xh: &[Point], k: usize) -> Result<f64> {
    neighborhood_score(x, xh, k)
}

/// `round(pct / 100 * n)`, at least 1.
pub fn k_from_percent(pct: f64, n: usize) -> usize {
    ((pct / 100.0 * n as f64).round() as usize).max(1)
}

/// All four metrics, on a seeded uniform subsample when `n > max_n`.
pub fn evaluate(x: &[Point], xh: &[Point], k_percents: &[f64], max_n: usize, seed: u64) -> Result<MetricsReport> {
    check_aligned(x, xh, 3)?;
    let (xs, hs): (Vec<Point>, Vec<Point>) = if x.len() > max_n {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx = rand::seq::index::sample(&mut rng, x.len(), max_n).into_vec();
        idx.sort_unstable();
        idx.iter().map(|&i| (x[i], xh[i])).unzip()
    } else {
        (x.to_vec(), xh.to_vec())
    };
    let n = xs.len();
    let ks = kruskal_stress(&xs, &hs)?;
    let sr = sr_metric(&xs, &hs)?;
    let mut tw = BTreeMap::new();
    let mut ct = BTreeMap::new();
    for &p in k_percents {
        let k = k_from_percent(p, n);
        tw.insert(k, trustworthiness(&xs, &hs, k)?);
        ct.insert(k, continuity(&xs, &hs, k)?);
    }
    let unit = |v: f64| (0.0..=1.0).contains(&v);
    if !(unit(ks) && sr >= 0.0 && sr.is_finite() && tw.values().chain(ct.values()).all(|&v| unit(v))) {
        return Err(Error::Numeric(format!("metric out of range: ks={ks}, sr={sr}, tw={tw:?}, ct={ct:?}")));
    }
    Ok(MetricsReport {
        ks,
        sr,
        tw,
        ct,
        n_evaluated: n,
        subsample_seed: seed,
    })
}
