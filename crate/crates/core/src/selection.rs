//! Temporal triplet selection with self-intersection recovery, and the
//! matching inertial (second-difference) triples.
//!
//! For an anchor `i`, positives come from `0 < |t_i - t_j| < T_c` and
//! negatives from `T_c < |t_i - t_k| < T_f`, always within the anchor's UE.
//! A candidate negative whose feature distance to the anchor falls below a
//! low quantile of all feature distances is assumed to be the UE crossing
//! its own path; depending on [`Reidentify`] it becomes the positive of the
//! triplet or is simply redrawn.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::features::{euclidean, FeatureVector};

/// Sample count above which the distance quantile is estimated from random pairs.
pub const EXACT_QUANTILE_LIMIT: usize = 2000;
pub const SAMPLED_PAIRS: usize = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reidentify {
    /// Feature-near negatives become the triplet's positive.
    Relabel,
    /// Feature-near negatives are discarded and redrawn.
    Exclude,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionConfig {
    /// T_c, seconds.
    pub close_time: f64,
    /// T_f, seconds.
    pub far_time: f64,
    pub v_min: f64,
    pub v_max: f64,
    pub intersection_quantile: f64,
    pub triplets_per_anchor: usize,
    /// Negative draws allowed per triplet before the anchor is abandoned.
    pub max_redraws: usize,
    pub reidentify: Reidentify,
    pub rng_seed: u64,
}

impl SelectionConfig {
    /// Defaults for data sampled every `interval` seconds: `T_c = 3 * interval`, `T_f = 50 * T_c`.
    pub fn for_interval(interval: f64, v_min: f64, v_max: f64) -> Self {
        let close_time = 3.0 * interval;
        SelectionConfig {
            close_time,
            far_time: 50.0 * close_time,
            v_min,
            v_max,
            intersection_quantile: 0.01,
            triplets_per_anchor: 8,
            max_redraws: 16,
            reidentify: Reidentify::Relabel,
            rng_seed: 1,
        }
    }

    /// Largest distance the UE can cover within `T_c`.
    pub fn b_pos(&self) -> f64 {
        self.v_max * self.close_time
    }

    /// Smallest distance the UE covers within `T_c`.
    pub fn b_neg(&self) -> f64 {
        self.v_min * self.close_time
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.close_time > 0.0 && self.close_time < self.far_time && self.far_time.is_finite()) {
            return Err(Error::config(
                "t_c",
                format!("need 0 < T_c < T_f, got T_c={}, T_f={}", self.close_time, self.far_time),
            ));
        }
        if !(self.v_min > 0.0 && self.v_min <= self.v_max && self.v_max.is_finite()) {
            return Err(Error::config(
                "speed_range",
                format!("need 0 < v_min <= v_max, got {} and {}", self.v_min, self.v_max),
            ));
        }
        if !(self.intersection_quantile > 0.0 && self.intersection_quantile < 1.0) {
            return Err(Error::config("intersection_quantile", "must lie in (0, 1)"));
        }
        if self.triplets_per_anchor == 0 {
            return Err(Error::config("triplets_per_anchor", "must be at least 1"));
        }
        if self.max_redraws == 0 {
            return Err(Error::config("max_redraws", "must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Triplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
    /// The positive was a temporally far, feature-near point.
    pub reidentified: bool,
}

/// Temporally linear triple: `t_i - t_l == t_j - t_i`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct InertialTriple {
    pub i: usize,
    pub j: usize,
    pub l: usize,
    /// Index of the triplet this triple was derived from.
    pub triplet: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TripletSelection {
    pub triplets: Vec<Triplet>,
    /// Anchors with an empty window or exhausted redraws.
    pub skipped_anchors: usize,
    pub reidentified: usize,
    /// Feature-distance threshold used for recovery.
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InertialSelection {
    pub triples: Vec<InertialTriple>,
    pub skipped: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum QuantileMethod {
    /// Exact up to [`EXACT_QUANTILE_LIMIT`] features, sampled beyond.
    Auto { seed: u64 },
    Exact,
    Sampled { pairs: usize, seed: u64 },
}

fn interpolated_quantile(mut values: Vec<f64>, q: f64) -> f64 {
    values.sort_unstable_by(|a, b| a.total_cmp(b));
    let pos = q * (values.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    values[lo] + (values[hi] - values[lo]) * frac
}

/// q-quantile of pairwise feature distances.
pub fn feature_distance_threshold(features: &[FeatureVector], q: f64) -> Result<f64> {
    feature_distance_threshold_with(features, q, QuantileMethod::Auto { seed: 0 })
}

pub fn feature_distance_threshold_with(
    features: &[FeatureVector],
    q: f64,
    method: QuantileMethod,
) -> Result<f64> {
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::config("intersection_quantile", format!("q={q} outside (0, 1)")));
    }
    let n = features.len();
    if n < 2 {
        return Err(Error::Degenerate("need at least two features".into()));
    }
    let method = match method {
        QuantileMethod::Auto { seed } if n > EXACT_QUANTILE_LIMIT => QuantileMethod::Sampled {
            pairs: SAMPLED_PAIRS,
            seed,
        },
        QuantileMethod::Auto { .. } => QuantileMethod::Exact,
        m => m,
    };
    let distances: Vec<f64> = match method {
        QuantileMethod::Exact => (0..n)
            .into_par_iter()
            .flat_map_iter(|i| ((i + 1)..n).map(move |j| (i, j)))
            .map(|(i, j)| features[i].distance(&features[j]))
            .collect(),
        QuantileMethod::Sampled { pairs, seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let idx: Vec<(usize, usize)> = (0..pairs.max(1))
                .map(|_| {
                    let i = rng.random_range(0..n);
                    let mut j = rng.random_range(0..n - 1);
                    if j >= i {
                        j += 1;
                    }
                    (i, j)
                })
                .collect();
            idx.par_iter()
                .map(|&(i, j)| features[i].distance(&features[j]))
                .collect()
        }
        QuantileMethod::Auto { .. } => unreachable!(),
    };
    Ok(interpolated_quantile(distances, q))
}

/// Time-window lookups within one UE's track.
struct Track<'a> {
    indices: &'a [usize],
    times: Vec<f64>,
}

impl Track<'_> {
    /// Positions with time strictly above `t`.
    fn after(&self, t: f64) -> usize {
        self.times.partition_point(|&x| x <= t)
    }

    /// Positions with time strictly below `t`.
    fn before(&self, t: f64) -> usize {
        self.times.partition_point(|&x| x < t)
    }
}

struct Windows {
    anchor_pos: usize,
    positive: (usize, usize),
    negative_left: (usize, usize),
    negative_right: (usize, usize),
}

impl Windows {
    fn new(track: &Track, pos: usize, cfg: &SelectionConfig) -> Self {
        let t = track.times[pos];
        Windows {
            anchor_pos: pos,
            positive: (track.after(t - cfg.close_time), track.before(t + cfg.close_time)),
            negative_left: (track.after(t - cfg.far_time), track.before(t - cfg.close_time)),
            negative_right: (track.after(t + cfg.close_time), track.before(t + cfg.far_time)),
        }
    }

    fn positive_count(&self) -> usize {
        let (lo, hi) = self.positive;
        hi.saturating_sub(lo).saturating_sub(1)
    }

    fn negative_count(&self) -> usize {
        let (a, b) = self.negative_left;
        let (c, d) = self.negative_right;
        b.saturating_sub(a) + d.saturating_sub(c)
    }

    fn draw_positive(&self, rng: &mut ChaCha8Rng) -> usize {
        let mut k = self.positive.0 + rng.random_range(0..self.positive_count());
        if k >= self.anchor_pos {
            k += 1;
        }
        k
    }

    fn draw_negative(&self, rng: &mut ChaCha8Rng) -> usize {
        let left = self.negative_left.1.saturating_sub(self.negative_left.0);
        let k = rng.random_range(0..self.negative_count());
        if k < left {
            self.negative_left.0 + k
        } else {
            self.negative_right.0 + (k - left)
        }
    }
}

/// Draws `triplets_per_anchor` triplets for every sample used as anchor.
/// Each anchor has its own random stream, so the result does not depend on
/// how anchors are scheduled.
pub fn select_triplets(
    ds: &Dataset,
    features: &[FeatureVector],
    cfg: &SelectionConfig,
) -> Result<TripletSelection> {
    cfg.validate()?;
    if features.len() != ds.len() {
        return Err(Error::Shape {
            expected: ds.len(),
            got: features.len(),
        });
    }
    let threshold = if ds.len() >= 2 {
        feature_distance_threshold_with(
            features,
            cfg.intersection_quantile,
            QuantileMethod::Auto { seed: cfg.rng_seed },
        )?
    } else {
        0.0
    };

    let by_ue = ds.ue_tracks();
    let tracks: Vec<Track> = by_ue
        .values()
        .map(|idx| Track {
            indices: idx.as_slice(),
            times: idx.iter().map(|&i| ds.samples[i].timestamp).collect(),
        })
        .collect();
    // anchor -> (track, position in track)
    let mut where_is = vec![(0usize, 0usize); ds.len()];
    for (ti, tr) in tracks.iter().enumerate() {
        for (pos, &i) in tr.indices.iter().enumerate() {
            where_is[i] = (ti, pos);
        }
    }

    let per_anchor: Vec<Option<Vec<Triplet>>> = (0..ds.len())
        .into_par_iter()
        .map(|anchor| {
            let (ti, pos) = where_is[anchor];
            let track = &tracks[ti];
            let win = Windows::new(track, pos, cfg);
            if win.positive_count() == 0 || win.negative_count() == 0 {
                return None;
            }
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
            rng.set_stream(anchor as u64);
            let near = |k: usize| euclidean(&features[anchor].values, &features[k].values) < threshold;

            let mut out = Vec::with_capacity(cfg.triplets_per_anchor);
            for _ in 0..cfg.triplets_per_anchor {
                let mut positive = track.indices[win.draw_positive(&mut rng)];
                let mut reidentified = false;
                let mut negative = None;
                for _ in 0..cfg.max_redraws {
                    let k = track.indices[win.draw_negative(&mut rng)];
                    if near(k) {
                        if cfg.reidentify == Reidentify::Relabel && !reidentified {
                            positive = k;
                            reidentified = true;
                        }
                        continue;
                    }
                    if k != positive {
                        negative = Some(k);
                        break;
                    }
                }
                let negative = negative?;
                out.push(Triplet {
                    anchor,
                    positive,
                    negative,
                    reidentified,
                });
            }
            Some(out)
        })
        .collect();

    let mut triplets = Vec::with_capacity(ds.len() * cfg.triplets_per_anchor);
    let mut skipped_anchors = 0;
    for group in per_anchor {
        match group {
            Some(ts) => triplets.extend(ts),
            None => skipped_anchors += 1,
        }
    }
    if triplets.is_empty() {
        return Err(Error::Selection(format!(
            "no triplets selected ({skipped_anchors} anchors skipped); check T_c/T_f against the sampling rate"
        )));
    }
    let reidentified = triplets.iter().filter(|t| t.reidentified).count();
    Ok(TripletSelection {
        triplets,
        skipped_anchors,
        reidentified,
        threshold,
    })
}

fn median_interval(times: &[f64]) -> Option<f64> {
    let mut gaps: Vec<f64> = times.windows(2).map(|w| w[1] - w[0]).collect();
    if gaps.is_empty() {
        return None;
    }
    gaps.sort_unstable_by(|a, b| a.total_cmp(b));
    Some(gaps[gaps.len() / 2])
}

/// For each temporally labelled triplet `(i, j, .)`, looks for the sample
/// nearest to `t_i - (t_j - t_i)` on the same track and keeps it if it is
/// within half a sampling interval. Reidentified triplets are ignored.
pub fn select_inertial(ds: &Dataset, triplets: &[Triplet], cfg: &SelectionConfig) -> InertialSelection {
    let tracks = ds.ue_tracks();
    let lookup: std::collections::BTreeMap<u32, (Vec<f64>, &Vec<usize>, f64)> = tracks
        .iter()
        .map(|(&ue, idx)| {
            let times: Vec<f64> = idx.iter().map(|&i| ds.samples[i].timestamp).collect();
            let half = median_interval(&times).unwrap_or(0.0) / 2.0;
            (ue, (times, idx, half))
        })
        .collect();

    let mut triples = Vec::new();
    let mut skipped = 0;
    for (ti, t) in triplets.iter().enumerate() {
        if t.reidentified {
            continue;
        }
        let (ti_, tj) = (ds.samples[t.anchor].timestamp, ds.samples[t.positive].timestamp);
        if (ti_ - tj).abs() >= cfg.close_time {
            skipped += 1;
            continue;
        }
        let (times, idx, half) = &lookup[&ds.samples[t.anchor].ue_id];
        let target = ti_ - (tj - ti_);
        let p = times.partition_point(|&x| x < target);
        let best = [p.checked_sub(1), (p < times.len()).then_some(p)]
            .into_iter()
            .flatten()
            .min_by(|&a, &b| (times[a] - target).abs().total_cmp(&(times[b] - target).abs()));
        match best {
            Some(q) if (times[q] - target).abs() <= *half && idx[q] != t.anchor && idx[q] != t.positive => {
                triples.push(InertialTriple {
                    i: t.anchor,
                    j: t.positive,
                    l: idx[q],
                    triplet: ti,
                })
            }
            _ => skipped += 1,
        }
    }
    InertialSelection { triples, skipped }
}

/// Writes `anchor,positive,negative,reidentified` rows.
pub fn write_triplets_csv(triplets: &[Triplet], path: impl AsRef<Path>) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "anchor,positive,negative,reidentified")?;
    let mut line = String::new();
    for t in triplets {
        line.clear();
        writeln!(line, "{},{},{},{}", t.anchor, t.positive, t.negative, u8::from(t.reidentified)).unwrap();
        out.write_all(line.as_bytes())?;
    }
    out.flush()?;
    Ok(())
}
