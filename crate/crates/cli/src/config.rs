//! Flat `key = value` run configuration shared by every subcommand.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use cchart::losses::{LossConfig, LossKind};
use cchart::model::CentroidGrid;
use cchart::scenario::{ArraySpec, ScenarioConfig};
use cchart::selection::{Reidentify, SelectionConfig};
use cchart::train::TrainConfig;
use cchart::Error;
use sha2::{Digest, Sha256};

use crate::CliError;

/// Every recognised key with its help text, in canonical order.
pub const KEYS: &[(&str, &str)] = &[
    ("seed", "scenario random seed"),
    ("n_samples", "number of CSI snapshots to generate"),
    ("blocks_x", "city blocks along x"),
    ("blocks_y", "city blocks along y"),
    ("block_size", "block side length, m"),
    ("v_min", "minimum UE speed, m/s"),
    ("v_max", "maximum UE speed, m/s"),
    ("speed_jitter", "std of the per-snapshot speed change, m/s"),
    ("sample_rate", "snapshots per second"),
    ("bs_x", "base station x, m"),
    ("bs_y", "base station y, m"),
    ("bs_height", "base station height, m"),
    ("ue_height", "UE height, m"),
    ("antennas", "ULA size (ignored when array_rows > 0)"),
    ("array_rows", "URA rows, 0 for a ULA"),
    ("array_cols", "URA columns"),
    ("subcarriers", "number of subcarriers W"),
    ("cyclic_prefix", "delay taps kept C"),
    ("bandwidth", "bandwidth, Hz"),
    ("carrier", "carrier frequency, Hz"),
    ("n_paths", "number of scatterers"),
    ("line_of_sight", "include the direct path (true/false)"),
    ("scatterer_sigma_db", "log-normal spread of scatterer gains, dB"),
    ("noise_temperature", "receiver noise temperature, K"),
    ("tx_power_dbm", "transmit power, dBm"),
    ("t_c", "close-time window T_c, s (0 = 3 sample intervals)"),
    ("t_f", "far-time window T_f, s (0 = 50 T_c)"),
    ("intersection_quantile", "feature-distance quantile for reidentification"),
    ("triplets_per_anchor", "triplets drawn per anchor"),
    ("max_redraws", "negative redraws before an anchor is skipped"),
    ("reidentify", "relabel or exclude"),
    ("selection_seed", "triplet selection seed"),
    ("loss", "sammon_siamese, triplet or split_triplet"),
    ("lambda", "triplet margin"),
    ("mu", "inertial weight"),
    ("epochs", "training epochs"),
    ("batch_size", "triplets per step"),
    ("learning_rate", "Adam step size"),
    ("beta1", "Adam first-moment decay"),
    ("beta2", "Adam second-moment decay"),
    ("adam_eps", "Adam epsilon"),
    ("train_seed", "batch shuffling seed"),
    ("model_seed", "weight initialization seed"),
    ("resample_triplets", "draw fresh triplets every epoch (true/false)"),
    ("grid_side", "centroids per chart axis"),
    ("chart_extent", "centroid half-width, m (0 = v_max * T_f)"),
    ("k_percents", "comma-separated neighborhood sizes, % of N"),
    ("max_eval", "subsample cap for metrics"),
    ("eval_seed", "metrics subsample seed"),
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub scenario: ScenarioConfig,
    pub t_c: f64,
    pub t_f: f64,
    pub intersection_quantile: f64,
    pub triplets_per_anchor: usize,
    pub max_redraws: usize,
    pub reidentify: Reidentify,
    pub selection_seed: u64,
    pub loss: LossKind,
    pub lambda: f64,
    pub mu: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub train_seed: u64,
    pub model_seed: u64,
    pub resample_triplets: bool,
    pub grid_side: usize,
    pub chart_extent: f64,
    pub k_percents: Vec<f64>,
    pub max_eval: usize,
    pub eval_seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            scenario: ScenarioConfig::default(),
            t_c: 0.0,
            t_f: 0.0,
            intersection_quantile: 0.01,
            triplets_per_anchor: 8,
            max_redraws: 16,
            reidentify: Reidentify::Relabel,
            selection_seed: 1,
            loss: LossKind::SplitTriplet,
            lambda: 1.0,
            mu: 0.2,
            epochs: 100,
            batch_size: 256,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            train_seed: 1,
            model_seed: 1,
            resample_triplets: false,
            grid_side: 16,
            chart_extent: 0.0,
            k_percents: vec![1.0, 5.0],
            max_eval: 5000,
            eval_seed: 1,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, CliError> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::config(key, format!("cannot parse {value:?}")).into())
}

fn parse_bool(key: &str, value: &str) -> Result<bool, CliError> {
    match value.trim() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        other => Err(Error::config(key, format!("expected true or false, got {other:?}")).into()),
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let s = &mut self.scenario;
        match key {
            "seed" => s.rng_seed = parse(key, value)?,
            "n_samples" => s.n_samples = parse(key, value)?,
            "blocks_x" => s.grid_blocks.0 = parse(key, value)?,
            "blocks_y" => s.grid_blocks.1 = parse(key, value)?,
            "block_size" => s.block_size_m = parse(key, value)?,
            "v_min" => s.speed_range.0 = parse(key, value)?,
            "v_max" => s.speed_range.1 = parse(key, value)?,
            "speed_jitter" => s.speed_jitter = parse(key, value)?,
            "sample_rate" => s.sample_rate_hz = parse(key, value)?,
            "bs_x" => s.bs_position[0] = parse(key, value)?,
            "bs_y" => s.bs_position[1] = parse(key, value)?,
            "bs_height" => s.bs_height_m = parse(key, value)?,
            "ue_height" => s.ue_height_m = parse(key, value)?,
            "antennas" => {
                let n = parse(key, value)?;
                if let ArraySpec::Ula(_) = s.array {
                    s.array = ArraySpec::Ula(n);
                }
            }
            "array_rows" | "array_cols" => {
                let n: usize = parse(key, value)?;
                let (mut rows, mut cols) = match s.array {
                    ArraySpec::Ura(r, c) => (r, c),
                    ArraySpec::Ula(b) => (0, b),
                };
                if key == "array_rows" {
                    rows = n;
                } else {
                    cols = n;
                }
                s.array = if rows == 0 { ArraySpec::Ula(cols) } else { ArraySpec::Ura(rows, cols) };
            }
            "subcarriers" => s.n_subcarriers = parse(key, value)?,
            "cyclic_prefix" => s.cyclic_prefix = parse(key, value)?,
            "bandwidth" => s.bandwidth_hz = parse(key, value)?,
            "carrier" => s.carrier_hz = parse(key, value)?,
            "n_paths" => s.n_paths = parse(key, value)?,
            "line_of_sight" => s.line_of_sight = parse_bool(key, value)?,
            "scatterer_sigma_db" => s.scatterer_sigma_db = parse(key, value)?,
            "noise_temperature" => s.noise_temperature_k = parse(key, value)?,
            "tx_power_dbm" => s.tx_power_dbm = parse(key, value)?,
            "t_c" => self.t_c = parse(key, value)?,
            "t_f" => self.t_f = parse(key, value)?,
            "intersection_quantile" => self.intersection_quantile = parse(key, value)?,
            "triplets_per_anchor" => self.triplets_per_anchor = parse(key, value)?,
            "max_redraws" => self.max_redraws = parse(key, value)?,
            "reidentify" => {
                self.reidentify = match value.trim() {
                    "relabel" => Reidentify::Relabel,
                    "exclude" => Reidentify::Exclude,
                    other => return Err(Error::config(key, format!("expected relabel or exclude, got {other:?}")).into()),
                }
            }
            "selection_seed" => self.selection_seed = parse(key, value)?,
            "loss" => self.loss = value.trim().parse()?,
            "lambda" => self.lambda = parse(key, value)?,
            "mu" => self.mu = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "learning_rate" => self.learning_rate = parse(key, value)?,
            "beta1" => self.beta1 = parse(key, value)?,
            "beta2" => self.beta2 = parse(key, value)?,
            "adam_eps" => self.adam_eps = parse(key, value)?,
            "train_seed" => self.train_seed = parse(key, value)?,
            "model_seed" => self.model_seed = parse(key, value)?,
            "resample_triplets" => self.resample_triplets = parse_bool(key, value)?,
            "grid_side" => self.grid_side = parse(key, value)?,
            "chart_extent" => self.chart_extent = parse(key, value)?,
            "k_percents" => {
                self.k_percents = value
                    .split(',')
                    .filter(|v| !v.trim().is_empty())
                    .map(|v| parse(key, v))
                    .collect::<Result<_, _>>()?
            }
            "max_eval" => self.max_eval = parse(key, value)?,
            "eval_seed" => self.eval_seed = parse(key, value)?,
            other => return Err(Error::config(other, "unknown configuration key").into()),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> String {
        let s = &self.scenario;
        let (rows, cols, ula) = match s.array {
            ArraySpec::Ula(b) => (0, b, b),
            ArraySpec::Ura(r, c) => (r, c, r * c),
        };
        match key {
            "seed" => s.rng_seed.to_string(),
            "n_samples" => s.n_samples.to_string(),
            "blocks_x" => s.grid_blocks.0.to_string(),
            "blocks_y" => s.grid_blocks.1.to_string(),
            "block_size" => s.block_size_m.to_string(),
            "v_min" => s.speed_range.0.to_string(),
            "v_max" => s.speed_range.1.to_string(),
            "speed_jitter" => s.speed_jitter.to_string(),
            "sample_rate" => s.sample_rate_hz.to_string(),
            "bs_x" => s.bs_position[0].to_string(),
            "bs_y" => s.bs_position[1].to_string(),
            "bs_height" => s.bs_height_m.to_string(),
            "ue_height" => s.ue_height_m.to_string(),
            "antennas" => ula.to_string(),
            "array_rows" => rows.to_string(),
            "array_cols" => cols.to_string(),
            "subcarriers" => s.n_subcarriers.to_string(),
            "cyclic_prefix" => s.cyclic_prefix.to_string(),
            "bandwidth" => s.bandwidth_hz.to_string(),
            "carrier" => s.carrier_hz.to_string(),
            "n_paths" => s.n_paths.to_string(),
            "line_of_sight" => s.line_of_sight.to_string(),
            "scatterer_sigma_db" => s.scatterer_sigma_db.to_string(),
            "noise_temperature" => s.noise_temperature_k.to_string(),
            "tx_power_dbm" => s.tx_power_dbm.to_string(),
            "t_c" => self.t_c.to_string(),
            "t_f" => self.t_f.to_string(),
            "intersection_quantile" => self.intersection_quantile.to_string(),
            "triplets_per_anchor" => self.triplets_per_anchor.to_string(),
            "max_redraws" => self.max_redraws.to_string(),
            "reidentify" => match self.reidentify {
                Reidentify::Relabel => "relabel".into(),
                Reidentify::Exclude => "exclude".into(),
            },
            "selection_seed" => self.selection_seed.to_string(),
            "loss" => self.loss.name().into(),
            "lambda" => self.lambda.to_string(),
            "mu" => self.mu.to_string(),
            "epochs" => self.epochs.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "learning_rate" => self.learning_rate.to_string(),
            "beta1" => self.beta1.to_string(),
            "beta2" => self.beta2.to_string(),
            "adam_eps" => self.adam_eps.to_string(),
            "train_seed" => self.train_seed.to_string(),
            "model_seed" => self.model_seed.to_string(),
            "resample_triplets" => self.resample_triplets.to_string(),
            "grid_side" => self.grid_side.to_string(),
            "chart_extent" => self.chart_extent.to_string(),
            "k_percents" => self.k_percents.iter().map(f64::to_string).collect::<Vec<_>>().join(","),
            "max_eval" => self.max_eval.to_string(),
            "eval_seed" => self.eval_seed.to_string(),
            other => unreachable!("unlisted key {other}"),
        }
    }

    /// Applies `key = value` lines. `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<(), CliError> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                CliError::Core(Error::config(line, format!("line {}: expected key = value", n + 1)))
            })?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<(), CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        self.apply_text(&text)
    }

    /// Canonical `key=value` listing of every setting.
    pub fn canonical(&self) -> String {
        let mut out = String::new();
        for (key, _) in KEYS {
            let _ = writeln!(out, "{key}={}", self.get(key));
        }
        out
    }

    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.canonical().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn sample_interval(&self) -> f64 {
        self.scenario.sample_interval()
    }

    pub fn selection(&self) -> SelectionConfig {
        let (v_min, v_max) = self.scenario.speed_range;
        let mut sel = SelectionConfig::for_interval(self.sample_interval(), v_min, v_max);
        if self.t_c > 0.0 {
            sel.close_time = self.t_c;
            sel.far_time = 50.0 * self.t_c;
        }
        if self.t_f > 0.0 {
            sel.far_time = self.t_f;
        }
        sel.intersection_quantile = self.intersection_quantile;
        sel.triplets_per_anchor = self.triplets_per_anchor;
        sel.max_redraws = self.max_redraws;
        sel.reidentify = self.reidentify;
        sel.rng_seed = self.selection_seed;
        sel
    }

    pub fn loss_config(&self) -> LossConfig {
        let sel = self.selection();
        LossConfig {
            kind: self.loss,
            lambda: self.lambda,
            b_pos: sel.b_pos(),
            b_neg: sel.b_neg(),
            mu: self.mu,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            adam_betas: (self.beta1, self.beta2),
            adam_eps: self.adam_eps,
            loss: self.loss_config(),
            rng_seed: self.train_seed,
            resample: self.resample_triplets.then(|| self.selection()),
        }
    }

    pub fn grid(&self) -> Result<CentroidGrid, CliError> {
        let extent = if self.chart_extent > 0.0 {
            self.chart_extent
        } else {
            let sel = self.selection();
            sel.v_max * sel.far_time
        };
        Ok(CentroidGrid::new(self.grid_side, extent)?)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.scenario.validate()?;
        self.selection().validate()?;
        self.train_config().validate()?;
        self.grid()?;
        if self.k_percents.is_empty() || self.k_percents.iter().any(|p| !(*p > 0.0 && *p < 50.0)) {
            return Err(Error::config("k_percents", "need values in (0, 50)").into());
        }
        if self.max_eval < 3 {
            return Err(Error::config("max_eval", "must be at least 3").into());
        }
        Ok(())
    }
}
