//! Desk-scale synthetic channel-charting scenario.
//!
//! A single UE walks the streets of a rectangular grid of city blocks. Its
//! speed follows a bounded random walk inside `[v_min, v_max]` and at every
//! intersection it picks uniformly among the continuations that do not turn
//! back. The base station sits beside the area with a half-wavelength ULA
//! (or URA) and receives the UE over a geometric multipath channel: a fixed
//! cloud of point scatterers with log-normal gains and bistatic spreading
//! loss, an optional line-of-sight path, and thermal noise at
//! `k_B * T * bandwidth` relative to the transmit power.

use std::f64::consts::PI;

use ndarray::Array2;
use num_complex::{Complex32, Complex64};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;

use crate::dataset::{ArrayGeometry, CsiSample, Dataset, DatasetMeta};
use crate::error::{Error, Result};

pub const BOLTZMANN: f64 = 1.380_649e-23;
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

const STREAM_TRAJECTORY: u64 = 0;
const STREAM_SCATTERERS: u64 = 1;
const STREAM_NOISE: u64 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArraySpec {
    Ula(usize),
    Ura(usize, usize),
}

impl ArraySpec {
    pub fn antennas(&self) -> usize {
        match *self {
            ArraySpec::Ula(b) => b,
            ArraySpec::Ura(r, c) => r * c,
        }
    }

    pub fn geometry(&self) -> ArrayGeometry {
        match *self {
            ArraySpec::Ula(_) => ArrayGeometry::Ula,
            ArraySpec::Ura(rows, cols) => ArrayGeometry::Ura { rows, cols },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    pub grid_blocks: (usize, usize),
    pub block_size_m: f64,
    /// (v_min, v_max) in m/s.
    pub speed_range: (f64, f64),
    /// Standard deviation of the per-snapshot speed increment, m/s.
    pub speed_jitter: f64,
    pub sample_rate_hz: f64,
    pub n_samples: usize,
    pub bs_position: [f64; 2],
    pub bs_height_m: f64,
    pub ue_height_m: f64,
    pub array: ArraySpec,
    pub n_subcarriers: usize,
    pub cyclic_prefix: usize,
    pub bandwidth_hz: f64,
    pub carrier_hz: f64,
    pub n_paths: usize,
    /// Include the direct path. Off reproduces a non-line-of-sight setting.
    pub line_of_sight: bool,
    /// Log-normal spread of scatterer gains, dB.
    pub scatterer_sigma_db: f64,
    pub noise_temperature_k: f64,
    /// Transmit power the channel gains are referenced to.
    pub tx_power_dbm: f64,
    pub rng_seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        let grid_blocks = (4, 4);
        let block_size_m = 20.0;
        ScenarioConfig {
            grid_blocks,
            block_size_m,
            speed_range: (0.5, 2.0),
            speed_jitter: 0.1,
            sample_rate_hz: 1.0,
            n_samples: 2000,
            // centered beside the area, 50 m from its near edge
            bs_position: [grid_blocks.0 as f64 * block_size_m / 2.0, -50.0],
            bs_height_m: 25.0,
            ue_height_m: 1.5,
            array: ArraySpec::Ula(32),
            n_subcarriers: 64,
            cyclic_prefix: 16,
            bandwidth_hz: 20e6,
            carrier_hz: 2.0e9,
            n_paths: 32,
            line_of_sight: false,
            scatterer_sigma_db: 4.0,
            noise_temperature_k: 300.0,
            tx_power_dbm: 20.0,
            rng_seed: 1,
        }
    }
}

impl ScenarioConfig {
    pub fn sample_interval(&self) -> f64 {
        1.0 / self.sample_rate_hz
    }

    pub fn grid(&self) -> BlockGrid {
        BlockGrid {
            blocks: self.grid_blocks,
            block_size: self.block_size_m,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (v_min, v_max) = self.speed_range;
        if !(v_min > 0.0 && v_min <= v_max && v_max.is_finite()) {
            return Err(Error::config(
                "speed_range",
                format!("need 0 < v_min <= v_max, got v_min={v_min}, v_max={v_max}"),
            ));
        }
        if !(self.sample_rate_hz > 0.0 && self.sample_rate_hz.is_finite()) {
            return Err(Error::config("sample_rate_hz", "must be positive"));
        }
        if self.grid_blocks.0 == 0 || self.grid_blocks.1 == 0 {
            return Err(Error::config("grid_blocks", "need at least one block per axis"));
        }
        if !(self.block_size_m > 0.0 && self.block_size_m.is_finite()) {
            return Err(Error::config("block_size_m", "must be positive"));
        }
        if v_max * self.sample_interval() < self.block_size_m * 1e-9 {
            return Err(Error::config(
                "speed_range",
                "v_max / sample_rate is below the numeric resolution of the street grid",
            ));
        }
        if !(self.speed_jitter >= 0.0) {
            return Err(Error::config("speed_jitter", "must be nonnegative"));
        }
        if self.n_paths == 0 {
            return Err(Error::config("n_paths", "need at least one scatterer"));
        }
        if self.n_subcarriers < 2 {
            return Err(Error::config("n_subcarriers", "need W >= 2"));
        }
        if self.cyclic_prefix == 0 || self.cyclic_prefix > self.n_subcarriers {
            return Err(Error::config(
                "cyclic_prefix",
                format!("C={} outside 1..={}", self.cyclic_prefix, self.n_subcarriers),
            ));
        }
        if self.array.antennas() == 0 {
            return Err(Error::config("array", "need at least one antenna"));
        }
        if !(self.bandwidth_hz > 0.0 && self.carrier_hz > 0.0) {
            return Err(Error::config("bandwidth_hz", "bandwidth and carrier must be positive"));
        }
        if !(self.noise_temperature_k >= 0.0) {
            return Err(Error::config("noise_temperature_k", "must be nonnegative"));
        }
        Ok(())
    }

    /// Complex noise variance per CSI entry, relative to unit transmit power.
    pub fn noise_variance(&self) -> f64 {
        let tx_watts = 10f64.powf((self.tx_power_dbm - 30.0) / 10.0);
        BOLTZMANN * self.noise_temperature_k * self.bandwidth_hz / tx_watts
    }
}

/// Street network of a `blocks.0 x blocks.1` grid. Intersections are at
/// `(i * block_size, j * block_size)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlockGrid {
    pub blocks: (usize, usize),
    pub block_size: f64,
}

type Node = (usize, usize);

impl BlockGrid {
    pub fn n_segments(&self) -> usize {
        let (bx, by) = self.blocks;
        bx * (by + 1) + (bx + 1) * by
    }

    pub fn extent(&self) -> [f64; 2] {
        [
            self.blocks.0 as f64 * self.block_size,
            self.blocks.1 as f64 * self.block_size,
        ]
    }

    fn node_position(&self, n: Node) -> [f64; 2] {
        [n.0 as f64 * self.block_size, n.1 as f64 * self.block_size]
    }

    fn neighbors(&self, n: Node) -> Vec<Node> {
        let (bx, by) = self.blocks;
        let mut out = Vec::with_capacity(4);
        if n.0 > 0 {
            out.push((n.0 - 1, n.1));
        }
        if n.0 < bx {
            out.push((n.0 + 1, n.1));
        }
        if n.1 > 0 {
            out.push((n.0, n.1 - 1));
        }
        if n.1 < by {
            out.push((n.0, n.1 + 1));
        }
        out
    }

    /// Index of the street segment containing `p`, if it lies on a street.
    /// Intersections resolve to the segment leaving them in +x (else +y, -x, -y).
    pub fn segment_at(&self, p: [f64; 2]) -> Option<usize> {
        let tol = 1e-6 * self.block_size;
        let (bx, by) = self.blocks;
        let u = p[0] / self.block_size;
        let v = p[1] / self.block_size;
        if u < -tol || v < -tol || u > bx as f64 + tol || v > by as f64 + tol {
            return None;
        }
        let on_row = (v - v.round()).abs() * self.block_size <= tol;
        let on_col = (u - u.round()).abs() * self.block_size <= tol;
        if on_row {
            let j = v.round() as usize;
            let i = (u.floor().max(0.0) as usize).min(bx - 1);
            return Some(j * bx + i);
        }
        if on_col {
            let i = u.round() as usize;
            let j = (v.floor().max(0.0) as usize).min(by - 1);
            return Some(bx * (by + 1) + i * by + j);
        }
        None
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryPoint {
    pub timestamp: f64,
    pub position: [f64; 2],
    /// Velocity used to travel to the next point.
    pub velocity: [f64; 2],
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub points: Vec<TrajectoryPoint>,
}

struct Walker {
    from: Node,
    to: Node,
    along: f64,
}

impl Walker {
    fn position(&self, grid: &BlockGrid) -> [f64; 2] {
        let a = grid.node_position(self.from);
        let b = grid.node_position(self.to);
        let s = self.along / grid.block_size;
        [a[0] + (b[0] - a[0]) * s, a[1] + (b[1] - a[1]) * s]
    }

    fn heading(&self) -> [f64; 2] {
        [
            self.to.0 as f64 - self.from.0 as f64,
            self.to.1 as f64 - self.from.1 as f64,
        ]
    }

    fn advance(&mut self, mut distance: f64, grid: &BlockGrid, rng: &mut ChaCha8Rng) {
        while distance > 0.0 {
            let remaining = grid.block_size - self.along;
            if distance < remaining {
                self.along += distance;
                return;
            }
            distance -= remaining;
            let choices: Vec<Node> = grid
                .neighbors(self.to)
                .into_iter()
                .filter(|&n| n != self.from)
                .collect();
            let next = if choices.is_empty() {
                self.from
            } else {
                choices[rng.random_range(0..choices.len())]
            };
            self.from = self.to;
            self.to = next;
            self.along = 0.0;
        }
    }
}

pub fn generate_trajectory(cfg: &ScenarioConfig) -> Result<Trajectory> {
    cfg.validate()?;
    let grid = cfg.grid();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    rng.set_stream(STREAM_TRAJECTORY);

    let (v_min, v_max) = cfg.speed_range;
    let dt = cfg.sample_interval();
    let start = (
        rng.random_range(0..=cfg.grid_blocks.0),
        rng.random_range(0..=cfg.grid_blocks.1),
    );
    let first = grid.neighbors(start);
    let mut walker = Walker {
        from: start,
        to: first[rng.random_range(0..first.len())],
        along: 0.0,
    };
    let mut speed = if v_max > v_min {
        rng.random_range(v_min..=v_max)
    } else {
        v_min
    };

    let mut points = Vec::with_capacity(cfg.n_samples);
    for k in 0..cfg.n_samples {
        let h = walker.heading();
        points.push(TrajectoryPoint {
            timestamp: k as f64 * dt,
            position: walker.position(&grid),
            velocity: [h[0] * speed, h[1] * speed],
        });
        walker.advance(speed * dt, &grid, &mut rng);
        let step: f64 = rng.sample(StandardNormal);
        speed = (speed + cfg.speed_jitter * step).clamp(v_min, v_max);
    }
    Ok(Trajectory { points })
}

/// One propagation path as seen by the base station.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PropagationPath {
    /// Complex amplitude, referenced to unit transmit power.
    pub gain: Complex64,
    /// Unit vector from the base station toward the last interaction point.
    pub arrival: [f64; 3],
    pub delay_s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scatterer {
    pub position: [f64; 3],
    /// Reflection coefficient, meters (scales the bistatic spreading loss).
    pub gain: Complex64,
}

/// Deterministic map from UE position to noiseless CSI.
#[derive(Debug, Clone)]
pub struct ChannelModel {
    pub bs: [f64; 3],
    /// Horizontal unit vector along which array columns are laid out.
    pub array_axis: [f64; 2],
    pub array: ArraySpec,
    pub carrier_hz: f64,
    pub bandwidth_hz: f64,
    pub subcarriers: usize,
    pub ue_height_m: f64,
    pub line_of_sight: bool,
    pub scatterers: Vec<Scatterer>,
}

fn sub3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn norm3(a: [f64; 3]) -> f64 {
    (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
}

impl ChannelModel {
    /// Builds the scatterer cloud for `cfg`: uniform over the street area
    /// padded by one block, heights in [0, 20] m.
    pub fn from_config(cfg: &ScenarioConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
        rng.set_stream(STREAM_SCATTERERS);
        let [ex, ey] = cfg.grid().extent();
        let pad = cfg.block_size_m;
        let shadow = Normal::new(0.0, cfg.scatterer_sigma_db).map_err(|e| Error::config("scatterer_sigma_db", e.to_string()))?;
        let scatterers = (0..cfg.n_paths)
            .map(|_| {
                let position = [
                    rng.random_range(-pad..ex + pad),
                    rng.random_range(-pad..ey + pad),
                    rng.random_range(0.0..20.0),
                ];
                let db: f64 = shadow.sample(&mut rng);
                let phase = rng.random_range(0.0..2.0 * PI);
                Scatterer {
                    position,
                    gain: Complex64::from_polar(10f64.powf(db / 20.0), phase),
                }
            })
            .collect();

        let center = [ex / 2.0, ey / 2.0];
        let to_center = [center[0] - cfg.bs_position[0], center[1] - cfg.bs_position[1]];
        let len = (to_center[0].hypot(to_center[1])).max(f64::MIN_POSITIVE);
        // broadside toward the area
        let array_axis = [-to_center[1] / len, to_center[0] / len];

        Ok(ChannelModel {
            bs: [cfg.bs_position[0], cfg.bs_position[1], cfg.bs_height_m],
            array_axis,
            array: cfg.array,
            carrier_hz: cfg.carrier_hz,
            bandwidth_hz: cfg.bandwidth_hz,
            subcarriers: cfg.n_subcarriers,
            ue_height_m: cfg.ue_height_m,
            line_of_sight: cfg.line_of_sight,
            scatterers,
        })
    }

    pub fn wavelength(&self) -> f64 {
        SPEED_OF_LIGHT / self.carrier_hz
    }

    /// Frequency of subcarrier `w`, centered on the carrier.
    pub fn subcarrier_hz(&self, w: usize) -> f64 {
        let spacing = self.bandwidth_hz / self.subcarriers as f64;
        self.carrier_hz + (w as f64 - self.subcarriers as f64 / 2.0) * spacing
    }

    pub fn paths(&self, ue: [f64; 2]) -> Vec<PropagationPath> {
        let ue = [ue[0], ue[1], self.ue_height_m];
        let lambda = self.wavelength();
        let mut out = Vec::with_capacity(self.scatterers.len() + 1);
        if self.line_of_sight {
            let v = sub3(ue, self.bs);
            let d = norm3(v).max(1.0);
            out.push(PropagationPath {
                gain: Complex64::new(lambda / (4.0 * PI * d), 0.0),
                arrival: [v[0] / d, v[1] / d, v[2] / d],
                delay_s: d / SPEED_OF_LIGHT,
            });
        }
        for s in &self.scatterers {
            let to_bs = sub3(s.position, self.bs);
            let d_bs = norm3(to_bs).max(1.0);
            let d_ue = norm3(sub3(s.position, ue)).max(1.0);
            out.push(PropagationPath {
                gain: s.gain * (lambda / (4.0 * PI * d_bs * d_ue)),
                arrival: [to_bs[0] / d_bs, to_bs[1] / d_bs, to_bs[2] / d_bs],
                delay_s: (d_bs + d_ue) / SPEED_OF_LIGHT,
            });
        }
        out
    }

    /// Half-wavelength steering vector for arrival direction `k`.
    pub fn steering(&self, k: [f64; 3]) -> Vec<Complex64> {
        let horizontal = k[0] * self.array_axis[0] + k[1] * self.array_axis[1];
        match self.array {
            ArraySpec::Ula(b) => (0..b)
                .map(|i| Complex64::from_polar(1.0, PI * i as f64 * horizontal))
                .collect(),
            ArraySpec::Ura(rows, cols) => (0..rows * cols)
                .map(|i| {
                    let (r, c) = (i / cols, i % cols);
                    Complex64::from_polar(1.0, PI * (c as f64 * horizontal + r as f64 * k[2]))
                })
                .collect(),
        }
    }

    pub fn response_from_paths(&self, paths: &[PropagationPath]) -> Array2<Complex64> {
        let b = self.array.antennas();
        let w = self.subcarriers;
        let mut h = Array2::<Complex64>::zeros((b, w));
        let freqs: Vec<f64> = (0..w).map(|k| self.subcarrier_hz(k)).collect();
        for p in paths {
            let a = self.steering(p.arrival);
            let tones: Vec<Complex64> = freqs
                .iter()
                .map(|f| Complex64::from_polar(1.0, -2.0 * PI * f * p.delay_s))
                .collect();
            for (r, ar) in a.iter().enumerate() {
                let g = p.gain * ar;
                for (c, t) in tones.iter().enumerate() {
                    h[[r, c]] += g * t;
                }
            }
        }
        h
    }

    pub fn response(&self, ue: [f64; 2]) -> Array2<Complex64> {
        self.response_from_paths(&self.paths(ue))
    }
}

/// Noisy CSI for every trajectory point; ground truth carries the UE position.
pub fn synthesize_csi(traj: &Trajectory, cfg: &ScenarioConfig) -> Result<Dataset> {
    if traj.points.is_empty() {
        return Err(Error::config("n_samples", "trajectory is empty"));
    }
    let model = ChannelModel::from_config(cfg)?;
    let clean: Vec<Array2<Complex64>> = traj
        .points
        .par_iter()
        .map(|p| model.response(p.position))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    rng.set_stream(STREAM_NOISE);
    let sigma = (cfg.noise_variance() / 2.0).sqrt();
    let samples = traj
        .points
        .iter()
        .zip(clean)
        .map(|(p, h)| {
            let h = h.mapv(|z| {
                let noisy = if sigma > 0.0 {
                    let re: f64 = rng.sample(StandardNormal);
                    let im: f64 = rng.sample(StandardNormal);
                    z + Complex64::new(re, im) * sigma
                } else {
                    z
                };
                Complex32::new(noisy.re as f32, noisy.im as f32)
            });
            CsiSample {
                h,
                ue_id: 0,
                timestamp: p.timestamp,
                ground_truth: Some(p.position),
            }
        })
        .collect();

    let ds = Dataset {
        meta: DatasetMeta {
            antennas: cfg.array.antennas(),
            subcarriers: cfg.n_subcarriers,
            cyclic_prefix: cfg.cyclic_prefix,
            geometry: cfg.array.geometry(),
            bandwidth_hz: cfg.bandwidth_hz,
            carrier_hz: cfg.carrier_hz,
        },
        samples,
    };
    ds.validate()?;
    Ok(ds)
}

pub fn generate_dataset(cfg: &ScenarioConfig) -> Result<Dataset> {
    let traj = generate_trajectory(cfg)?;
    synthesize_csi(&traj, cfg)
}
