//! Mini-batch Adam over a fixed (or per-epoch resampled) triplet set.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::features::{euclidean, FeatureVector};
use crate::losses::{total_loss, LossBatch, LossConfig, LossKind, MainTerms, Pair, Reduction};
use crate::model::ChartModel;
use crate::selection::{select_inertial, select_triplets, InertialTriple, SelectionConfig, Triplet};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Triplets per optimizer step.
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_betas: (f64, f64),
    pub adam_eps: f64,
    pub loss: LossConfig,
    pub rng_seed: u64,
    /// Draw a fresh triplet set at the start of every epoch after the first.
    pub resample: Option<SelectionConfig>,
}

impl TrainConfig {
    pub fn new(loss: LossConfig) -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 256,
            learning_rate: 1e-3,
            adam_betas: (0.9, 0.999),
            adam_eps: 1e-8,
            loss,
            rng_seed: 1,
            resample: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate", "must be finite and >= 0"));
        }
        let (b1, b2) = self.adam_betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return Err(Error::config("adam_betas", "must lie in [0, 1)"));
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::config("adam_eps", "must be positive"));
        }
        self.loss.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLoss {
    pub epoch: usize,
    /// Main loss averaged over all of the epoch's terms.
    pub mean_main: f64,
    pub mean_inertial: f64,
}

impl EpochLoss {
    pub fn mean_total(&self, mu: f64) -> f64 {
        self.mean_main + mu * self.mean_inertial
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: ChartModel,
    pub history: Vec<EpochLoss>,
    pub steps: usize,
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, model: &mut ChartModel, grad: &[f64], cfg: &TrainConfig) {
        let (b1, b2) = cfg.adam_betas;
        self.t += 1;
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        let params = model
            .layers_mut()
            .iter_mut()
            .flat_map(|l| l.weight.iter_mut().chain(l.bias.iter_mut()));
        for (((p, g), m), v) in params.zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *p -= cfg.learning_rate * (*m / c1) / ((*v / c2).sqrt() + cfg.adam_eps);
        }
    }
}

/// Row-major `N x F` copy of the feature list.
pub fn feature_matrix(features: &[FeatureVector]) -> Result<Array2<f64>> {
    let width = features.first().map_or(0, |f| f.len());
    let mut flat = Vec::with_capacity(features.len() * width);
    for f in features {
        if f.len() != width {
            return Err(Error::Shape {
                expected: width,
                got: f.len(),
            });
        }
        flat.extend_from_slice(&f.values);
    }
    Ok(Array2::from_shape_vec((features.len(), width), flat).expect("length checked"))
}

/// Maps global sample indices to rows of a compact per-batch matrix.
struct Gather {
    slot: Vec<usize>,
    used: Vec<usize>,
}

impl Gather {
    fn new(n: usize) -> Self {
        Gather {
            slot: vec![usize::MAX; n],
            used: Vec::new(),
        }
    }

    fn local(&mut self, global: usize) -> usize {
        if self.slot[global] == usize::MAX {
            self.slot[global] = self.used.len();
            self.used.push(global);
        }
        self.slot[global]
    }

    fn reset(&mut self) {
        for &g in &self.used {
            self.slot[g] = usize::MAX;
        }
        self.used.clear();
    }
}

fn check_indices(n: usize, triplets: &[Triplet], inertial: &[InertialTriple]) -> Result<()> {
    let bad = triplets
        .iter()
        .flat_map(|t| [t.anchor, t.positive, t.negative])
        .chain(inertial.iter().flat_map(|q| [q.i, q.j, q.l]))
        .find(|&i| i >= n);
    if let Some(i) = bad {
        return Err(Error::Contract(format!("sample index {i} out of range for {n} samples")));
    }
    if let Some(q) = inertial.iter().find(|q| q.triplet >= triplets.len()) {
        return Err(Error::Contract(format!(
            "inertial triple refers to missing triplet {}",
            q.triplet
        )));
    }
    Ok(())
}

/// Trains `model` in place of a copy and returns it with the per-epoch loss.
pub fn train(
    model: ChartModel,
    ds: &Dataset,
    features: &[FeatureVector],
    triplets: &[Triplet],
    inertial: &[InertialTriple],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if features.len() != ds.len() {
        return Err(Error::Shape {
            expected: ds.len(),
            got: features.len(),
        });
    }
    let x = feature_matrix(features)?;
    if x.ncols() != model.input_len() {
        return Err(Error::Shape {
            expected: model.input_len(),
            got: x.ncols(),
        });
    }
    if triplets.is_empty() {
        return Err(Error::Selection("no triplets to train on".into()));
    }
    check_indices(ds.len(), triplets, inertial)?;

    let mut model = model;
    let mut adam = Adam::new(model.param_count());
    let mut gather = Gather::new(ds.len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut steps = 0;

    let mut owned: Option<(Vec<Triplet>, Vec<InertialTriple>)> = None;
    for epoch in 0..cfg.epochs {
        if let (Some(sel), true) = (&cfg.resample, epoch > 0) {
            let sel = SelectionConfig {
                rng_seed: sel.rng_seed.wrapping_add(epoch as u64),
                ..sel.clone()
            };
            let t = select_triplets(ds, features, &sel)?.triplets;
            let i = select_inertial(ds, &t, &sel).triples;
            owned = Some((t, i));
        }
        let (trip, inert) = match &owned {
            Some((t, i)) => (t.as_slice(), i.as_slice()),
            None => (triplets, inertial),
        };
        let mut by_triplet: Vec<Vec<usize>> = vec![Vec::new(); trip.len()];
        for (k, q) in inert.iter().enumerate() {
            by_triplet[q.triplet].push(k);
        }

        let mut order: Vec<usize> = (0..trip.len()).collect();
        order.shuffle(&mut rng);
        let (mut main_sum, mut main_count) = (0.0, 0usize);
        let (mut inertial_sum, mut inertial_count) = (0.0, 0usize);

        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch = build_batch(chunk, trip, inert, &by_triplet, &x, &cfg.loss, &mut gather);
            let rows: Vec<usize> = gather.used.clone();
            gather.reset();
            let input = x.select(ndarray::Axis(0), &rows);
            let (points, cache) = model.forward_batch(input.view())?;
            let loss = total_loss(&cfg.loss, &batch, points.view(), Reduction::Mean)?;
            let where_ = || format!("step {steps} (epoch {}, batch {b})", epoch + 1);
            if !loss.value.is_finite() {
                return Err(Error::Numeric(format!("non-finite loss at {}", where_())));
            }
            let grad = model.backward(&cache, loss.grads.view())?;
            if !grad.is_finite() {
                return Err(Error::Numeric(format!("non-finite gradient at {}", where_())));
            }
            adam.step(&mut model, &grad.flat(), cfg);
            if !model.params_flat().iter().all(|p| p.is_finite()) {
                return Err(Error::Numeric(format!("non-finite parameter after {}", where_())));
            }
            steps += 1;

            let used_main = match &batch.main {
                MainTerms::Pairs(p) => p.iter().filter(|p| p.feature_dist >= crate::losses::MIN_FEATURE_DISTANCE).count(),
                MainTerms::Triplets(t) => t.len(),
            };
            main_sum += loss.main * used_main as f64;
            main_count += used_main;
            if cfg.loss.mu != 0.0 {
                inertial_sum += loss.inertial * batch.inertial.len() as f64;
                inertial_count += batch.inertial.len();
            }
        }
        history.push(EpochLoss {
            epoch: epoch + 1,
            mean_main: main_sum / main_count.max(1) as f64,
            mean_inertial: inertial_sum / inertial_count.max(1) as f64,
        });
    }
    Ok(TrainOutcome { model, history, steps })
}

fn build_batch(
    chunk: &[usize],
    triplets: &[Triplet],
    inertial: &[InertialTriple],
    by_triplet: &[Vec<usize>],
    x: &Array2<f64>,
    loss: &LossConfig,
    gather: &mut Gather,
) -> LossBatch {
    let mut local_triplets = Vec::with_capacity(chunk.len());
    let mut pairs = Vec::new();
    let mut local_inertial = Vec::new();
    for &t in chunk {
        let tr = &triplets[t];
        let idx = [gather.local(tr.anchor), gather.local(tr.positive), gather.local(tr.negative)];
        if loss.kind == LossKind::SammonSiamese {
            for (other, local) in [(tr.positive, idx[1]), (tr.negative, idx[2])] {
                pairs.push(Pair {
                    i: idx[0],
                    j: local,
                    feature_dist: euclidean(
                        x.row(tr.anchor).as_slice().expect("standard layout"),
                        x.row(other).as_slice().expect("standard layout"),
                    ),
                });
            }
        } else {
            local_triplets.push(idx);
        }
        if loss.mu != 0.0 {
            for &k in &by_triplet[t] {
                let q = &inertial[k];
                local_inertial.push([gather.local(q.i), gather.local(q.j), gather.local(q.l)]);
            }
        }
    }
    LossBatch {
        main: if loss.kind == LossKind::SammonSiamese {
            MainTerms::Pairs(pairs)
        } else {
            MainTerms::Triplets(local_triplets)
        },
        inertial: local_inertial,
    }
}

/// Per-term mean losses of `model` over a whole triplet set, without updating it.
pub fn evaluate_loss(
    model: &ChartModel,
    features: &[FeatureVector],
    triplets: &[Triplet],
    inertial: &[InertialTriple],
    loss: &LossConfig,
) -> Result<EpochLoss> {
    let x = feature_matrix(features)?;
    check_indices(features.len(), triplets, inertial)?;
    let mut by_triplet: Vec<Vec<usize>> = vec![Vec::new(); triplets.len()];
    for (k, q) in inertial.iter().enumerate() {
        by_triplet[q.triplet].push(k);
    }
    let all: Vec<usize> = (0..triplets.len()).collect();
    let mut gather = Gather::new(features.len());
    let batch = build_batch(&all, triplets, inertial, &by_triplet, &x, loss, &mut gather);
    let input = x.select(ndarray::Axis(0), &gather.used);
    let points = model.embed_batch(input.view())?;
    let out = total_loss(loss, &batch, points.view(), Reduction::Mean)?;
    Ok(EpochLoss {
        epoch: 0,
        mean_main: out.main,
        mean_inertial: out.inertial,
    })
}

/// Chart point of every feature, in input order.
pub fn embed_dataset(model: &ChartModel, features: &[FeatureVector]) -> Result<Vec<[f64; 2]>> {
    if features.is_empty() {
        return Ok(Vec::new());
    }
    let x = feature_matrix(features)?;
    embed_matrix(model, x.view())
}

pub fn embed_matrix(model: &ChartModel, x: ArrayView2<f64>) -> Result<Vec<[f64; 2]>> {
    x.rows()
        .into_iter()
        .map(|r| {
            let pts = model.embed_batch(r.insert_axis(ndarray::Axis(0)))?;
            Ok([pts[[0, 0]], pts[[0, 1]]])
        })
        .collect()
}

pub fn write_loss_csv(history: &[EpochLoss], path: impl AsRef<Path>) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "epoch,mean_main_loss,mean_inertial_loss")?;
    for e in history {
        writeln!(out, "{},{},{}", e.epoch, e.mean_main, e.mean_inertial)?;
    }
    out.flush()?;
    Ok(())
}
