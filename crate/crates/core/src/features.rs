//! CSI-to-feature pipeline.
//!
//! Each CSI matrix is normalized, moved to the delay domain (and truncated
//! to the cyclic prefix), moved to beamspace, circularly autocorrelated in
//! two dimensions, and finally reduced to the magnitudes of the
//! non-redundant half of the autocorrelation rows.
//!
//! The autocorrelation uses `R[m,n] = sum H[a,b] conj(H[a+m, b+n])` with
//! indices taken modulo the matrix shape. The conjugate cancels any global
//! phase and the circular lags turn integer delay offsets into a pure
//! index rotation, so both disappear from `|R|`.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use ndarray::{Array2, ArrayViewMut1, Axis};
use num_complex::Complex64;
use rayon::prelude::*;
use rustfft::{Fft, FftPlanner};

use crate::dataset::{ArrayGeometry, CsiSample, Dataset, DatasetMeta};
use crate::error::{Error, Result};

/// Nonnegative feature vector of one CSI sample.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub values: Vec<f64>,
    pub source_index: usize,
    pub timestamp: f64,
}

impl FeatureVector {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn distance(&self, other: &FeatureVector) -> f64 {
        euclidean(&self.values, &other.values)
    }
}

pub(crate) fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Number of autocorrelation rows that survive truncation.
pub fn kept_rows(antennas: usize) -> usize {
    antennas.div_ceil(2)
}

/// Feature length `ceil(B/2) * C` for datasets described by `meta`.
pub fn feature_len(meta: &DatasetMeta) -> usize {
    kept_rows(meta.antennas) * meta.cyclic_prefix
}

fn fft_rows(m: &mut Array2<Complex64>, fft: &dyn Fft<f64>) {
    let mut buf = vec![Complex64::default(); m.ncols()];
    for mut row in m.rows_mut() {
        transform_lane(&mut row, fft, &mut buf);
    }
}

fn fft_cols(m: &mut Array2<Complex64>, fft: &dyn Fft<f64>) {
    let mut buf = vec![Complex64::default(); m.nrows()];
    for mut col in m.columns_mut() {
        transform_lane(&mut col, fft, &mut buf);
    }
}

fn transform_lane(lane: &mut ArrayViewMut1<Complex64>, fft: &dyn Fft<f64>, buf: &mut [Complex64]) {
    for (b, v) in buf.iter_mut().zip(lane.iter()) {
        *b = *v;
    }
    fft.process(buf);
    for (v, b) in lane.iter_mut().zip(buf.iter()) {
        *v = *b;
    }
}

/// Scales `h` to unit Frobenius norm.
pub fn normalize(h: &Array2<Complex64>) -> Result<Array2<Complex64>> {
    let norm = h.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(Error::Degenerate(format!("CSI matrix has norm {norm}")));
    }
    Ok(h.mapv(|z| z / norm))
}

/// Holds FFT plans for one dataset shape.
pub struct FeatureExtractor {
    antennas: usize,
    subcarriers: usize,
    taps: usize,
    geometry: ArrayGeometry,
    delay_ifft: Arc<dyn Fft<f64>>,
    beam_ffts: (Arc<dyn Fft<f64>>, Option<Arc<dyn Fft<f64>>>),
    acorr_rows: (Arc<dyn Fft<f64>>, Arc<dyn Fft<f64>>),
    acorr_cols: (Arc<dyn Fft<f64>>, Arc<dyn Fft<f64>>),
}

impl FeatureExtractor {
    pub fn new(meta: &DatasetMeta) -> Result<Self> {
        let (b, w, c) = (meta.antennas, meta.subcarriers, meta.cyclic_prefix);
        if b == 0 || w == 0 {
            return Err(Error::config("shape", "B and W must be at least 1"));
        }
        if c == 0 || c > w {
            return Err(Error::config("cyclic_prefix", format!("C={c} outside 1..={w}")));
        }
        meta.geometry.check_antennas(b)?;
        let mut planner = FftPlanner::new();
        let beam_ffts = match meta.geometry {
            ArrayGeometry::Ula => (planner.plan_fft_forward(b), None),
            ArrayGeometry::Ura { rows, cols } => (
                planner.plan_fft_forward(rows),
                Some(planner.plan_fft_forward(cols)),
            ),
        };
        Ok(Self {
            antennas: b,
            subcarriers: w,
            taps: c,
            geometry: meta.geometry,
            delay_ifft: planner.plan_fft_inverse(w),
            beam_ffts,
            // (forward, inverse) along columns (length B) and rows (length C)
            acorr_rows: (planner.plan_fft_forward(b), planner.plan_fft_inverse(b)),
            acorr_cols: (planner.plan_fft_forward(c), planner.plan_fft_inverse(c)),
        })
    }

    pub fn feature_len(&self) -> usize {
        kept_rows(self.antennas) * self.taps
    }

    /// `H_norm F^H` truncated to the first `taps` columns.
    pub fn delay_transform(&self, h_norm: &Array2<Complex64>) -> Array2<Complex64> {
        let mut m = h_norm.clone();
        fft_rows(&mut m, self.delay_ifft.as_ref());
        let scale = 1.0 / (self.subcarriers as f64).sqrt();
        m.slice_axis(Axis(1), (0..self.taps).into()).mapv(|z| z * scale)
    }

    /// Unitary DFT across the antenna dimension of every delay tap.
    pub fn beamspace_transform(&self, h_delay: &Array2<Complex64>) -> Array2<Complex64> {
        let mut m = h_delay.clone();
        match (self.geometry, &self.beam_ffts) {
            (ArrayGeometry::Ula, (fft, _)) => {
                fft_cols(&mut m, fft.as_ref());
                let scale = 1.0 / (self.antennas as f64).sqrt();
                m.mapv_inplace(|z| z * scale);
            }
            (ArrayGeometry::Ura { rows, cols }, (row_fft, Some(col_fft))) => {
                let scale = 1.0 / ((rows * cols) as f64).sqrt();
                for mut column in m.columns_mut() {
                    let mut panel = Array2::from_shape_fn((rows, cols), |(r, c)| column[r * cols + c]);
                    fft_rows(&mut panel, col_fft.as_ref());
                    fft_cols(&mut panel, row_fft.as_ref());
                    for (dst, src) in column.iter_mut().zip(panel.iter()) {
                        *dst = *src * scale;
                    }
                }
            }
            (ArrayGeometry::Ura { .. }, (_, None)) => unreachable!("URA plans built in new()"),
        }
        m
    }

    /// Circular 2-D autocorrelation computed through the Wiener-Khinchin relation.
    pub fn autocorrelate(&self, h_beam: &Array2<Complex64>) -> Array2<Complex64> {
        let (rows, cols) = h_beam.dim();
        assert_eq!((rows, cols), (self.antennas, self.taps), "beamspace shape");
        let mut spec = h_beam.clone();
        fft_rows(&mut spec, self.acorr_cols.0.as_ref());
        fft_cols(&mut spec, self.acorr_rows.0.as_ref());
        spec.mapv_inplace(|z| Complex64::new(z.norm_sqr(), 0.0));
        fft_rows(&mut spec, self.acorr_cols.1.as_ref());
        fft_cols(&mut spec, self.acorr_rows.1.as_ref());
        let scale = 1.0 / (rows * cols) as f64;
        // The inverse transform yields sum conj(H[a,b]) H[a+m,b+n]; conjugate for our convention.
        spec.mapv(|z| z.conj() * scale)
    }

    pub fn extract_matrix(&self, h: &Array2<Complex64>) -> Result<Vec<f64>> {
        if h.dim() != (self.antennas, self.subcarriers) {
            return Err(Error::Shape {
                expected: self.antennas * self.subcarriers,
                got: h.len(),
            });
        }
        let norm = normalize(h)?;
        let delay = self.delay_transform(&norm);
        let beam = self.beamspace_transform(&delay);
        let acorr = self.autocorrelate(&beam);
        let keep = kept_rows(self.antennas);
        Ok(acorr
            .slice_axis(Axis(0), (0..keep).into())
            .iter()
            .map(|z| z.norm())
            .collect())
    }

    pub fn extract(&self, sample: &CsiSample, index: usize) -> Result<FeatureVector> {
        let h = sample.h.mapv(|z| Complex64::new(z.re as f64, z.im as f64));
        Ok(FeatureVector {
            values: self.extract_matrix(&h)?,
            source_index: index,
            timestamp: sample.timestamp,
        })
    }
}

/// Unitary inverse DFT along rows, keeping the first `c` delay taps.
pub fn delay_transform(h_norm: &Array2<Complex64>, c: usize) -> Result<Array2<Complex64>> {
    let (b, w) = h_norm.dim();
    if c == 0 || c > w {
        return Err(Error::config("cyclic_prefix", format!("C={c} outside 1..={w}")));
    }
    let fx = FeatureExtractor::new(&shape_meta(b, w, c, ArrayGeometry::Ula))?;
    Ok(fx.delay_transform(h_norm))
}

pub fn beamspace_transform(h_delay: &Array2<Complex64>, geometry: ArrayGeometry) -> Result<Array2<Complex64>> {
    let (b, c) = h_delay.dim();
    geometry.check_antennas(b)?;
    let fx = FeatureExtractor::new(&shape_meta(b, c, c, geometry))?;
    Ok(fx.beamspace_transform(h_delay))
}

pub fn autocorrelate(h_beam: &Array2<Complex64>) -> Array2<Complex64> {
    let (b, c) = h_beam.dim();
    if b == 0 || c == 0 {
        return h_beam.clone();
    }
    FeatureExtractor::new(&shape_meta(b, c, c, ArrayGeometry::Ula))
        .expect("shape is valid")
        .autocorrelate(h_beam)
}

fn shape_meta(b: usize, w: usize, c: usize, geometry: ArrayGeometry) -> DatasetMeta {
    DatasetMeta {
        antennas: b,
        subcarriers: w,
        cyclic_prefix: c,
        geometry,
        bandwidth_hz: 0.0,
        carrier_hz: 0.0,
    }
}

pub fn extract_feature(sample: &CsiSample, meta: &DatasetMeta) -> Result<FeatureVector> {
    FeatureExtractor::new(meta)?.extract(sample, 0)
}

/// Features for every sample of `ds`, in sample order.
pub fn extract_features(ds: &Dataset) -> Result<Vec<FeatureVector>> {
    let fx = FeatureExtractor::new(&ds.meta)?;
    ds.samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| fx.extract(s, i))
        .collect()
}

/// Averages each feature with the following same-UE features so that every
/// output is the mean of up to `group` consecutive measurements. `group <= 1`
/// returns the input unchanged.
pub fn average_features(ds: &Dataset, features: &[FeatureVector], group: usize) -> Vec<FeatureVector> {
    if group <= 1 {
        return features.to_vec();
    }
    let mut out = features.to_vec();
    for track in ds.ue_tracks().values() {
        for (pos, &i) in track.iter().enumerate() {
            let members = &track[pos..(pos + group).min(track.len())];
            let mut acc = vec![0.0; features[i].len()];
            for &j in members {
                for (a, v) in acc.iter_mut().zip(&features[j].values) {
                    *a += v;
                }
            }
            let n = members.len() as f64;
            out[i].values = acc.into_iter().map(|a| a / n).collect();
        }
    }
    out
}

/// Writes `index,timestamp,f0,...` rows.
pub fn write_features_csv(features: &[FeatureVector], path: impl AsRef<Path>) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    let width = features.first().map_or(0, FeatureVector::len);
    let mut line = String::from("index,timestamp");
    for k in 0..width {
        write!(line, ",f{k}").unwrap();
    }
    writeln!(out, "{line}")?;
    for f in features {
        line.clear();
        write!(line, "{},{}", f.source_index, f.timestamp).unwrap();
        for v in &f.values {
            write!(line, ",{v}").unwrap();
        }
        writeln!(out, "{line}")?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn random_matrix(rng: &mut ChaCha8Rng, b: usize, w: usize) -> Array2<Complex64> {
        Array2::from_shape_fn((b, w), |_| {
            Complex64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5)
        })
    }

    fn fro(m: &Array2<Complex64>) -> f64 {
        m.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
    }

    fn max_diff(a: &Array2<Complex64>, b: &Array2<Complex64>) -> f64 {
        a.iter().zip(b.iter()).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max)
    }

    // Direct O(n^2) DFT sums, independent of rustfft.
    fn naive_delay(h: &Array2<Complex64>, c: usize) -> Array2<Complex64> {
        let (b, w) = h.dim();
        Array2::from_shape_fn((b, c), |(r, n)| {
            (0..w)
                .map(|k| h[[r, k]] * Complex64::from_polar(1.0, 2.0 * PI * (n * k) as f64 / w as f64))
                .sum::<Complex64>()
                / (w as f64).sqrt()
        })
    }

    fn naive_ura_column(col: &[Complex64], rows: usize, cols: usize) -> Vec<Complex64> {
        let mut out = vec![Complex64::default(); rows * cols];
        for p in 0..rows {
            for q in 0..cols {
                let mut acc = Complex64::default();
                for r in 0..rows {
                    for c in 0..cols {
                        let phase = -2.0 * PI * ((p * r) as f64 / rows as f64 + (q * c) as f64 / cols as f64);
                        acc += col[r * cols + c] * Complex64::from_polar(1.0, phase);
                    }
                }
                out[p * cols + q] = acc / ((rows * cols) as f64).sqrt();
            }
        }
        out
    }

    fn naive_acorr(h: &Array2<Complex64>) -> Array2<Complex64> {
        let (b, c) = h.dim();
        Array2::from_shape_fn((b, c), |(m, n)| {
            let mut acc = Complex64::default();
            for a in 0..b {
                for k in 0..c {
                    acc += h[[a, k]] * h[[(a + m) % b, (k + n) % c]].conj();
                }
            }
            acc
        })
    }

    #[test]
    fn normalize_unit_norm_and_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let h = random_matrix(&mut rng, 3, 5);
        let n = normalize(&h).unwrap();
        assert!((fro(&n) - 1.0).abs() < 1e-12);
        assert!(max_diff(&normalize(&n).unwrap(), &n) < 1e-12);
        assert!(max_diff(&normalize(&h.mapv(|z| z * 5.0)).unwrap(), &n) < 1e-12);
    }

    #[test]
    fn normalize_zero_is_degenerate() {
        let h = Array2::<Complex64>::zeros((2, 2));
        assert!(matches!(normalize(&h), Err(Error::Degenerate(_))));
    }

    #[test]
    fn delay_of_constant_rows_is_a_single_tap() {
        let (b, w) = (3, 8);
        let h = Array2::from_elem((b, w), Complex64::new(1.0 / ((b * w) as f64).sqrt(), 0.0));
        let d = delay_transform(&h, 4).unwrap();
        for r in 0..b {
            assert!(d[[r, 0]].norm() > 0.1);
            for n in 1..4 {
                assert!(d[[r, n]].norm() < 1e-12);
            }
        }
    }

    #[test]
    fn delay_full_width_is_unitary() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let h = random_matrix(&mut rng, 4, 6);
        let d = delay_transform(&h, 6).unwrap();
        assert!((fro(&d) - fro(&h)).abs() < 1e-12);
    }

    #[test]
    fn delay_matches_naive_dft() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (b, w, c) in [(2, 4, 2), (4, 4, 4), (4, 4, 3)] {
            let h = random_matrix(&mut rng, b, w);
            assert!(max_diff(&delay_transform(&h, c).unwrap(), &naive_delay(&h, c)) < 1e-12);
        }
    }

    #[test]
    fn delay_rejects_bad_prefix() {
        let h = Array2::<Complex64>::ones((2, 4));
        assert!(matches!(delay_transform(&h, 0), Err(Error::Config { .. })));
        assert!(matches!(delay_transform(&h, 5), Err(Error::Config { .. })));
    }

    #[test]
    fn beamspace_single_antenna_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let h = random_matrix(&mut rng, 1, 5);
        assert!(max_diff(&beamspace_transform(&h, ArrayGeometry::Ula).unwrap(), &h) < 1e-15);
    }

    #[test]
    fn beamspace_is_unitary() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h = random_matrix(&mut rng, 6, 3);
        for g in [ArrayGeometry::Ula, ArrayGeometry::Ura { rows: 2, cols: 3 }] {
            let out = beamspace_transform(&h, g).unwrap();
            assert!((fro(&out) - fro(&h)).abs() < 1e-12);
        }
    }

    #[test]
    fn beamspace_ula_matches_naive_dft() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let h = random_matrix(&mut rng, 4, 4);
        let out = beamspace_transform(&h, ArrayGeometry::Ula).unwrap();
        let expected = Array2::from_shape_fn((4, 4), |(p, c)| {
            (0..4)
                .map(|b| h[[b, c]] * Complex64::from_polar(1.0, -2.0 * PI * (p * b) as f64 / 4.0))
                .sum::<Complex64>()
                / 2.0
        });
        assert!(max_diff(&out, &expected) < 1e-12);
    }

    #[test]
    fn beamspace_ura_matches_naive_2d_dft() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let h = random_matrix(&mut rng, 4, 1);
        let out = beamspace_transform(&h, ArrayGeometry::Ura { rows: 2, cols: 2 }).unwrap();
        let col: Vec<_> = h.column(0).to_vec();
        // Hand expansion of the 2x2 unitary DFT: [[a, b], [c, d]].
        let (a, b, c, d) = (col[0], col[1], col[2], col[3]);
        let hand = [(a + b + c + d) / 2.0, (a - b + c - d) / 2.0, (a + b - c - d) / 2.0, (a - b - c + d) / 2.0];
        for k in 0..4 {
            assert!((out[[k, 0]] - hand[k]).norm() < 1e-12);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let h = random_matrix(&mut rng, 6, 2);
        let out = beamspace_transform(&h, ArrayGeometry::Ura { rows: 2, cols: 3 }).unwrap();
        for c in 0..2 {
            let expected = naive_ura_column(&h.column(c).to_vec(), 2, 3);
            for k in 0..6 {
                assert!((out[[k, c]] - expected[k]).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn beamspace_rejects_geometry_mismatch() {
        let h = Array2::<Complex64>::ones((4, 2));
        assert!(beamspace_transform(&h, ArrayGeometry::Ura { rows: 3, cols: 2 }).is_err());
    }

    #[test]
    fn autocorrelation_zero_lag_is_energy() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let h = random_matrix(&mut rng, 3, 4);
        let r = autocorrelate(&h);
        assert!((r[[0, 0]].re - fro(&h).powi(2)).abs() < 1e-12);
        assert!(r[[0, 0]].im.abs() < 1e-12);
    }

    #[test]
    fn autocorrelation_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for (b, c) in [(2, 3), (4, 4), (5, 2)] {
            let h = random_matrix(&mut rng, b, c);
            assert!(max_diff(&autocorrelate(&h), &naive_acorr(&h)) < 1e-12);
        }
    }

    #[test]
    fn autocorrelation_magnitude_ignores_global_phase() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let h = random_matrix(&mut rng, 3, 4);
        let rot = h.mapv(|z| z * Complex64::from_polar(1.0, 1.234));
        let (a, b) = (autocorrelate(&h), autocorrelate(&rot));
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x.norm() - y.norm()).abs() < 1e-12);
        }
    }

    fn sample_from(h: &Array2<Complex64>) -> CsiSample {
        CsiSample {
            h: h.mapv(|z| num_complex::Complex32::new(z.re as f32, z.im as f32)),
            ue_id: 0,
            timestamp: 0.0,
            ground_truth: None,
        }
    }

    #[test]
    fn feature_length_and_nonnegativity() {
        let meta = shape_meta(32, 64, 16, ArrayGeometry::Ula);
        assert_eq!(feature_len(&meta), 256);
        let meta = shape_meta(5, 8, 3, ArrayGeometry::Ula);
        assert_eq!(feature_len(&meta), 9);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let f = extract_feature(&sample_from(&random_matrix(&mut rng, 5, 8)), &meta).unwrap();
        assert_eq!(f.len(), 9);
        assert!(f.values.iter().all(|v| v.is_finite() && *v >= 0.0));
    }

    #[test]
    fn truncated_rows_are_redundant() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let h = random_matrix(&mut rng, 5, 3);
        let r = autocorrelate(&h);
        let (b, c) = r.dim();
        for m in 0..b {
            for n in 0..c {
                let mirrored = r[[(b - m) % b, (c - n) % c]];
                assert!((r[[m, n]].norm() - mirrored.norm()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn feature_ignores_integer_delay_when_untruncated() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let (b, w) = (4, 8);
        let meta = shape_meta(b, w, w, ArrayGeometry::Ula);
        let fx = FeatureExtractor::new(&meta).unwrap();
        let h = random_matrix(&mut rng, b, w);
        let base = fx.extract_matrix(&h).unwrap();
        for delta in [1usize, 3, 5] {
            let ramp = Array2::from_shape_fn((b, w), |(r, k)| {
                h[[r, k]] * Complex64::from_polar(1.0, -2.0 * PI * (delta * k) as f64 / w as f64)
            });
            let shifted = fx.extract_matrix(&ramp).unwrap();
            for (x, y) in base.iter().zip(&shifted) {
                assert!((x - y).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn zero_csi_propagates_degenerate_error() {
        let meta = shape_meta(2, 4, 2, ArrayGeometry::Ula);
        let s = sample_from(&Array2::zeros((2, 4)));
        assert!(matches!(extract_feature(&s, &meta), Err(Error::Degenerate(_))));
    }
}
