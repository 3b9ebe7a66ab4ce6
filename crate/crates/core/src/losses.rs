//! Chart-space losses and their gradients with respect to chart points.
//!
//! Every function takes the chart points as an `n x 2` array and index sets
//! into it, and returns the summed loss together with an `n x 2` gradient.
//! Hinges and norms use subgradient 0 at their kinks.

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};

/// Pairs closer than this in feature space are dropped by the Sammon loss.
pub const MIN_FEATURE_DISTANCE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    SammonSiamese,
    Triplet,
    SplitTriplet,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::SammonSiamese => "sammon_siamese",
            LossKind::Triplet => "triplet",
            LossKind::SplitTriplet => "split_triplet",
        }
    }
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sammon_siamese" | "sammon" | "siamese" => Ok(LossKind::SammonSiamese),
            "triplet" => Ok(LossKind::Triplet),
            "split_triplet" | "split" => Ok(LossKind::SplitTriplet),
            other => Err(Error::config("loss", format!("unknown loss kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub kind: LossKind,
    /// Triplet margin.
    pub lambda: f64,
    pub b_pos: f64,
    pub b_neg: f64,
    /// Inertial weight.
    pub mu: f64,
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.mu >= 0.0 && self.mu.is_finite()) {
            return Err(Error::config("mu", "must be finite and >= 0"));
        }
        match self.kind {
            LossKind::Triplet if !(self.lambda > 0.0 && self.lambda.is_finite()) => {
                Err(Error::config("lambda", "must be positive for the triplet loss"))
            }
            LossKind::SplitTriplet if !(self.b_pos > 0.0 && self.b_pos.is_finite()) => {
                Err(Error::config("b_pos", "must be positive"))
            }
            LossKind::SplitTriplet if !(self.b_neg > 0.0 && self.b_neg.is_finite()) => {
                Err(Error::config("b_neg", "must be positive"))
            }
            _ => Ok(()),
        }
    }
}

/// Two chart indices and the feature distance the chart should reproduce.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pair {
    pub i: usize,
    pub j: usize,
    pub feature_dist: f64,
}

/// `[anchor, positive, negative]`
pub type TripletIdx = [usize; 3];
/// `[i, j, l]` with `j` the positive and `l` the mirrored inertial point.
pub type InertialIdx = [usize; 3];

#[derive(Debug, Clone, PartialEq)]
pub enum MainTerms {
    Pairs(Vec<Pair>),
    Triplets(Vec<TripletIdx>),
}

impl MainTerms {
    pub fn len(&self) -> usize {
        match self {
            MainTerms::Pairs(p) => p.len(),
            MainTerms::Triplets(t) => t.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossBatch {
    pub main: MainTerms,
    pub inertial: Vec<InertialIdx>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    /// Each component divided by its own term count.
    Mean,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub value: f64,
    pub grads: Array2<f64>,
    /// Terms skipped because they were undefined (Sammon pairs at zero distance).
    pub dropped: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TotalLoss {
    pub value: f64,
    pub main: f64,
    pub inertial: f64,
    pub grads: Array2<f64>,
}

/// Neumaier-compensated running sum.
#[derive(Debug, Default, Clone, Copy)]
pub struct KahanSum {
    sum: f64,
    comp: f64,
}

impl KahanSum {
    pub fn add(&mut self, v: f64) {
        let t = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.comp += (self.sum - t) + v;
        } else {
            self.comp += (v - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn total(&self) -> f64 {
        self.sum + self.comp
    }
}

impl FromIterator<f64> for KahanSum {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut s = KahanSum::default();
        iter.into_iter().for_each(|v| s.add(v));
        s
    }
}

fn check_index(points: &ArrayView2<f64>, idx: &[usize]) -> Result<()> {
    match idx.iter().find(|&&i| i >= points.nrows()) {
        Some(&i) => Err(Error::Contract(format!(
            "chart index {i} out of range for {} points",
            points.nrows()
        ))),
        None => Ok(()),
    }
}

/// Difference `x_a - x_b`, its norm, and the unit direction (zero at d=0).
fn diff(points: &ArrayView2<f64>, a: usize, b: usize) -> (f64, [f64; 2]) {
    let dx = points[[a, 0]] - points[[b, 0]];
    let dy = points[[a, 1]] - points[[b, 1]];
    let d = dx.hypot(dy);
    let u = if d > 0.0 { [dx / d, dy / d] } else { [0.0, 0.0] };
    (d, u)
}

fn push_pair(grads: &mut Array2<f64>, a: usize, b: usize, u: [f64; 2], scale: f64) {
    for k in 0..2 {
        grads[[a, k]] += scale * u[k];
        grads[[b, k]] -= scale * u[k];
    }
}

pub fn sammon_siamese_loss(pairs: &[Pair], points: ArrayView2<f64>) -> Result<LossOutput> {
    let mut grads = Array2::zeros(points.raw_dim());
    let mut value = KahanSum::default();
    let mut dropped = 0;
    for p in pairs {
        check_index(&points, &[p.i, p.j])?;
        if !(p.feature_dist >= MIN_FEATURE_DISTANCE) {
            dropped += 1;
            continue;
        }
        let (d, u) = diff(&points, p.i, p.j);
        let r = d - p.feature_dist;
        value.add(r * r / p.feature_dist);
        push_pair(&mut grads, p.i, p.j, u, 2.0 * r / p.feature_dist);
    }
    Ok(LossOutput {
        value: value.total(),
        grads,
        dropped,
    })
}

pub fn triplet_loss(triplets: &[TripletIdx], points: ArrayView2<f64>, lambda: f64) -> Result<LossOutput> {
    let mut grads = Array2::zeros(points.raw_dim());
    let mut value = KahanSum::default();
    for &[a, p, n] in triplets {
        check_index(&points, &[a, p, n])?;
        let (dp, up) = diff(&points, a, p);
        let (dn, un) = diff(&points, a, n);
        let h = dp - dn + lambda;
        if h > 0.0 {
            value.add(h);
            push_pair(&mut grads, a, p, up, 1.0);
            push_pair(&mut grads, a, n, un, -1.0);
        }
    }
    Ok(LossOutput {
        value: value.total(),
        grads,
        dropped: 0,
    })
}

pub fn split_triplet_loss(
    triplets: &[TripletIdx],
    points: ArrayView2<f64>,
    b_pos: f64,
    b_neg: f64,
) -> Result<LossOutput> {
    let mut grads = Array2::zeros(points.raw_dim());
    let mut value = KahanSum::default();
    for &[a, p, n] in triplets {
        check_index(&points, &[a, p, n])?;
        let (dp, up) = diff(&points, a, p);
        let (dn, un) = diff(&points, a, n);
        if dp - b_pos > 0.0 {
            value.add(dp - b_pos);
            push_pair(&mut grads, a, p, up, 1.0);
        }
        if b_neg - dn > 0.0 {
            value.add(b_neg - dn);
            push_pair(&mut grads, a, n, un, -1.0);
        }
    }
    Ok(LossOutput {
        value: value.total(),
        grads,
        dropped: 0,
    })
}

pub fn inertial_loss(triples: &[InertialIdx], points: ArrayView2<f64>) -> Result<LossOutput> {
    let mut grads = Array2::zeros(points.raw_dim());
    let mut value = KahanSum::default();
    for &[i, j, l] in triples {
        check_index(&points, &[i, j, l])?;
        let s = [0, 1].map(|k| points[[j, k]] - 2.0 * points[[i, k]] + points[[l, k]]);
        let norm = s[0].hypot(s[1]);
        value.add(norm);
        if norm > 0.0 {
            for k in 0..2 {
                let u = s[k] / norm;
                grads[[j, k]] += u;
                grads[[l, k]] += u;
                grads[[i, k]] -= 2.0 * u;
            }
        }
    }
    Ok(LossOutput {
        value: value.total(),
        grads,
        dropped: 0,
    })
}

/// `main + mu * inertial`. With [`Reduction::Mean`] each component is
/// averaged over its own terms before weighting.
pub fn total_loss(
    cfg: &LossConfig,
    batch: &LossBatch,
    points: ArrayView2<f64>,
    reduction: Reduction,
) -> Result<TotalLoss> {
    let main = match (&batch.main, cfg.kind) {
        (MainTerms::Pairs(p), LossKind::SammonSiamese) => sammon_siamese_loss(p, points)?,
        (MainTerms::Triplets(t), LossKind::Triplet) => triplet_loss(t, points, cfg.lambda)?,
        (MainTerms::Triplets(t), LossKind::SplitTriplet) => split_triplet_loss(t, points, cfg.b_pos, cfg.b_neg)?,
        (terms, kind) => {
            return Err(Error::Contract(format!(
                "loss kind {} cannot consume {}",
                kind.name(),
                match terms {
                    MainTerms::Pairs(_) => "pairs",
                    MainTerms::Triplets(_) => "triplets",
                }
            )))
        }
    };
    let scale = |count: usize| match reduction {
        Reduction::Mean if count > 0 => 1.0 / count as f64,
        _ => 1.0,
    };
    let main_scale = scale(batch.main.len() - main.dropped);
    let main_value = main.value * main_scale;
    let mut grads = main.grads;
    if main_scale != 1.0 {
        grads.mapv_inplace(|g| g * main_scale);
    }
    if cfg.mu == 0.0 || batch.inertial.is_empty() {
        return Ok(TotalLoss {
            value: main_value,
            main: main_value,
            inertial: 0.0,
            grads,
        });
    }
    let inertia = inertial_loss(&batch.inertial, points)?;
    let w = cfg.mu * scale(batch.inertial.len());
    grads.scaled_add(w, &inertia.grads);
    let inertial_value = inertia.value * scale(batch.inertial.len());
    Ok(TotalLoss {
        value: main_value + cfg.mu * inertial_value,
        main: main_value,
        inertial: inertial_value,
        grads,
    })
}
