//! Charting network: dense ReLU layers ending in a softmax over a fixed
//! lattice of centroids. The chart point is the PMF-weighted centroid mean,
//! so it always lies inside the lattice's convex hull.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CCM1";

/// `side x side` centroids spread uniformly over `[-extent, extent]^2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CentroidGrid {
    pub side: usize,
    pub extent: f64,
}

impl CentroidGrid {
    pub fn new(side: usize, extent: f64) -> Result<Self> {
        if side < 2 {
            return Err(Error::config("grid_side", "need at least 2 centroids per side"));
        }
        if !(extent > 0.0 && extent.is_finite()) {
            return Err(Error::config("chart_extent", "must be positive"));
        }
        Ok(CentroidGrid { side, extent })
    }

    pub fn len(&self) -> usize {
        self.side * self.side
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Centroid `k` sits at column `k % side`, row `k / side`.
    pub fn centers(&self) -> Array2<f64> {
        let step = 2.0 * self.extent / (self.side - 1) as f64;
        Array2::from_shape_fn((self.len(), 2), |(k, d)| {
            let idx = if d == 0 { k % self.side } else { k / self.side };
            -self.extent + step * idx as f64
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    /// `out x in`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct ChartModel {
    layers: Vec<DenseLayer>,
    grid: CentroidGrid,
    centroids: Array2<f64>,
    /// Bumped on every parameter mutation; caches remember the value they saw.
    version: u64,
}

impl PartialEq for ChartModel {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers && self.grid == other.grid
    }
}

/// Activations retained by a forward pass for the matching backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    input: Array2<f64>,
    /// Pre-activations of every layer.
    pre: Vec<Array2<f64>>,
    pmf: Array2<f64>,
    version: u64,
}

impl ForwardCache {
    pub fn pmf(&self) -> &Array2<f64> {
        &self.pmf
    }

    pub fn pre_activations(&self) -> &[Array2<f64>] {
        &self.pre
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub chart_point: [f64; 2],
    pub pmf: Vec<f64>,
    pub cache: ForwardCache,
}

/// Gradient with the same layout as the model parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGradient {
    pub layers: Vec<DenseLayer>,
}

impl ModelGradient {
    pub fn flat(&self) -> Vec<f64> {
        flatten(&self.layers)
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.iter().chain(l.bias.iter()).all(|v| v.is_finite()))
    }
}

fn flatten(layers: &[DenseLayer]) -> Vec<f64> {
    let mut out = Vec::new();
    for l in layers {
        out.extend(l.weight.iter());
        out.extend(l.bias.iter());
    }
    out
}

/// `[F, F/2, F/4, G]`, never letting a hidden layer drop below one unit.
pub fn layer_dims(input: usize, grid: &CentroidGrid) -> Vec<usize> {
    vec![input, (input / 2).max(1), (input / 4).max(1), grid.len()]
}

fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut p = logits.clone();
    for mut row in p.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    p
}

impl ChartModel {
    pub fn from_layers(layers: Vec<DenseLayer>, grid: CentroidGrid) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Contract("model needs at least one layer".into()));
        }
        for pair in layers.windows(2) {
            if pair[0].weight.nrows() != pair[1].weight.ncols() {
                return Err(Error::Shape {
                    expected: pair[0].weight.nrows(),
                    got: pair[1].weight.ncols(),
                });
            }
        }
        for l in &layers {
            if l.bias.len() != l.weight.nrows() {
                return Err(Error::Shape {
                    expected: l.weight.nrows(),
                    got: l.bias.len(),
                });
            }
        }
        let out = layers.last().unwrap().weight.nrows();
        if out != grid.len() {
            return Err(Error::Shape {
                expected: grid.len(),
                got: out,
            });
        }
        Ok(ChartModel {
            layers,
            centroids: grid.centers(),
            grid,
            version: 0,
        })
    }

    pub fn input_len(&self) -> usize {
        self.layers[0].weight.ncols()
    }

    pub fn layer_dims(&self) -> Vec<usize> {
        std::iter::once(self.input_len())
            .chain(self.layers.iter().map(|l| l.weight.nrows()))
            .collect()
    }

    pub fn grid(&self) -> CentroidGrid {
        self.grid
    }

    pub fn centroids(&self) -> &Array2<f64> {
        &self.centroids
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    /// Mutable parameter access. Invalidates outstanding forward caches.
    pub fn layers_mut(&mut self) -> &mut [DenseLayer] {
        self.version += 1;
        &mut self.layers
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn params_flat(&self) -> Vec<f64> {
        flatten(&self.layers)
    }

    pub fn set_params_flat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.param_count() {
            return Err(Error::Shape {
                expected: self.param_count(),
                got: values.len(),
            });
        }
        let mut it = values.iter().copied();
        for l in self.layers_mut() {
            l.weight.iter_mut().chain(l.bias.iter_mut()).for_each(|p| *p = it.next().unwrap());
        }
        Ok(())
    }

    pub fn zero_gradient(&self) -> ModelGradient {
        ModelGradient {
            layers: self
                .layers
                .iter()
                .map(|l| DenseLayer {
                    weight: Array2::zeros(l.weight.raw_dim()),
                    bias: Array1::zeros(l.bias.len()),
                })
                .collect(),
        }
    }

    /// Forward pass over a batch of features (one per row). Returns chart
    /// points (`n x 2`) and the cache for [`ChartModel::backward`].
    pub fn forward_batch(&self, input: ArrayView2<f64>) -> Result<(Array2<f64>, ForwardCache)> {
        if input.ncols() != self.input_len() {
            return Err(Error::Shape {
                expected: self.input_len(),
                got: input.ncols(),
            });
        }
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut act = input.to_owned();
        let last = self.layers.len() - 1;
        for (k, layer) in self.layers.iter().enumerate() {
            let z = act.dot(&layer.weight.t()) + &layer.bias;
            act = if k == last {
                softmax_rows(&z)
            } else {
                z.mapv(|v| v.max(0.0))
            };
            pre.push(z);
        }
        let points = act.dot(&self.centroids);
        Ok((
            points,
            ForwardCache {
                input: input.to_owned(),
                pre,
                pmf: act,
                version: self.version,
            },
        ))
    }

    pub fn forward(&self, features: &[f64]) -> Result<ForwardOutput> {
        let input = ArrayView2::from_shape((1, features.len()), features).expect("row vector");
        let (points, cache) = self.forward_batch(input)?;
        Ok(ForwardOutput {
            chart_point: [points[[0, 0]], points[[0, 1]]],
            pmf: cache.pmf.row(0).to_vec(),
            cache,
        })
    }

    /// Chart points for a batch without retaining activations.
    pub fn embed_batch(&self, input: ArrayView2<f64>) -> Result<Array2<f64>> {
        Ok(self.forward_batch(input)?.0)
    }

    /// Gradient of a loss with respect to all parameters, given the loss
    /// gradient with respect to each chart point (`n x 2`, summed over rows).
    pub fn backward(&self, cache: &ForwardCache, grad_points: ArrayView2<f64>) -> Result<ModelGradient> {
        if cache.version != self.version || cache.pre.len() != self.layers.len() {
            return Err(Error::Contract(
                "forward cache is stale: parameters changed since the forward pass".into(),
            ));
        }
        let n = cache.input.nrows();
        if grad_points.dim() != (n, 2) {
            return Err(Error::Shape {
                expected: n * 2,
                got: grad_points.len(),
            });
        }
        // d/dp of sum_k c_k p_k, then through the softmax Jacobian.
        let grad_pmf = grad_points.dot(&self.centroids.t());
        let inner = (&cache.pmf * &grad_pmf).sum_axis(Axis(1)).insert_axis(Axis(1));
        let mut delta = &cache.pmf * &(&grad_pmf - &inner);

        let mut layers = Vec::with_capacity(self.layers.len());
        for k in (0..self.layers.len()).rev() {
            let below = if k == 0 {
                cache.input.clone()
            } else {
                cache.pre[k - 1].mapv(|v| v.max(0.0))
            };
            let weight = delta.t().dot(&below);
            let bias = delta.sum_axis(Axis(0));
            if k > 0 {
                let mut back = delta.dot(&self.layers[k].weight);
                back.zip_mut_with(&cache.pre[k - 1], |g, &z| {
                    if z <= 0.0 {
                        *g = 0.0;
                    }
                });
                delta = back;
            }
            layers.push(DenseLayer { weight, bias });
        }
        layers.reverse();
        Ok(ModelGradient { layers })
    }

    pub fn write_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        self.encode(&mut out)?;
        out.flush()?;
        Ok(())
    }

    /// `CCM1`, u32 layer count L+1, L+1 u32 dims, u32 grid side, f64 extent,
    /// then per layer the row-major weights followed by the biases (f64 LE).
    pub fn encode<W: Write>(&self, mut out: W) -> Result<()> {
        out.write_all(CHECKPOINT_MAGIC)?;
        let dims = self.layer_dims();
        out.write_all(&(dims.len() as u32).to_le_bytes())?;
        for d in dims {
            out.write_all(&(d as u32).to_le_bytes())?;
        }
        out.write_all(&(self.grid.side as u32).to_le_bytes())?;
        out.write_all(&self.grid.extent.to_le_bytes())?;
        for v in self.params_flat() {
            out.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn decode<R: Read>(mut input: R) -> Result<Self> {
        fn take<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N]> {
            let mut b = [0u8; N];
            r.read_exact(&mut b).map_err(|e| match e.kind() {
                std::io::ErrorKind::UnexpectedEof => Error::Format("checkpoint truncated".into()),
                _ => e.into(),
            })?;
            Ok(b)
        }
        if &take::<4, _>(&mut input)? != CHECKPOINT_MAGIC {
            return Err(Error::Format("bad checkpoint magic, expected \"CCM1\"".into()));
        }
        let count = u32::from_le_bytes(take(&mut input)?) as usize;
        if !(2..=64).contains(&count) {
            return Err(Error::Format(format!("implausible layer count {count}")));
        }
        let dims: Vec<usize> = (0..count)
            .map(|_| take(&mut input).map(|b| u32::from_le_bytes(b) as usize))
            .collect::<Result<_>>()?;
        let side = u32::from_le_bytes(take(&mut input)?) as usize;
        let extent = f64::from_le_bytes(take(&mut input)?);
        let grid = CentroidGrid::new(side, extent).map_err(|e| Error::Format(e.to_string()))?;
        let mut layers = Vec::with_capacity(count - 1);
        for w in dims.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let mut read_vec = |n: usize| -> Result<Vec<f64>> {
                (0..n).map(|_| take(&mut input).map(f64::from_le_bytes)).collect()
            };
            let weight = Array2::from_shape_vec((fan_out, fan_in), read_vec(fan_out * fan_in)?)
                .expect("length matches");
            let bias = Array1::from(read_vec(fan_out)?);
            layers.push(DenseLayer { weight, bias });
        }
        let mut extra = [0u8; 1];
        if input.read(&mut extra)? != 0 {
            return Err(Error::Format("trailing bytes after checkpoint parameters".into()));
        }
        ChartModel::from_layers(layers, grid).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode(BufReader::new(File::open(path)?))
    }
}

/// He-uniform weights (bound `sqrt(6 / fan_in)`) and zero biases.
pub fn init_model(input: usize, grid: CentroidGrid, seed: u64) -> Result<ChartModel> {
    if input < 4 {
        return Err(Error::config("features", format!("feature length {input} is below 4")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = layer_dims(input, &grid);
    let layers = dims
        .windows(2)
        .map(|w| {
            let bound = (6.0 / w[0] as f64).sqrt();
            DenseLayer {
                weight: Array2::from_shape_simple_fn((w[1], w[0]), || rng.random_range(-bound..=bound)),
                bias: Array1::zeros(w[1]),
            }
        })
        .collect();
    ChartModel::from_layers(layers, grid)
}
