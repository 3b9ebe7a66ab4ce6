use std::f64::consts::PI;

use cchart::dataset::{read_dataset, write_dataset, ArrayGeometry, DatasetMeta};
use cchart::features::{extract_features, FeatureExtractor};
use cchart::scenario::{generate_dataset, ScenarioConfig};
use cchart::selection::{select_triplets, SelectionConfig};
use ndarray::Array2;
use num_complex::Complex64;
use proptest::prelude::*;

fn meta(b: usize, w: usize, c: usize) -> DatasetMeta {
    DatasetMeta {
        antennas: b,
        subcarriers: w,
        cyclic_prefix: c,
        geometry: ArrayGeometry::Ula,
        bandwidth_hz: 1e6,
        carrier_hz: 1e9,
    }
}

fn matrix(b: usize, w: usize, values: &[(f64, f64)]) -> Array2<Complex64> {
    Array2::from_shape_fn((b, w), |(r, k)| {
        let (re, im) = values[r * w + k];
        Complex64::new(re, im)
    })
}

fn rel_diff(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let den: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    num / den
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn features_ignore_phase_and_scale(
        values in proptest::collection::vec((-1.0f64..1.0, -1.0f64..1.0), 8 * 32),
        phase in 0.0f64..(2.0 * PI),
        scale in 1e-3f64..1e3,
    ) {
        let h = matrix(8, 32, &values);
        let fx = FeatureExtractor::new(&meta(8, 32, 8)).unwrap();
        let base = fx.extract_matrix(&h).unwrap();
        let rotated = fx.extract_matrix(&h.mapv(|z| z * Complex64::from_polar(scale, phase))).unwrap();
        prop_assert!(rel_diff(&base, &rotated) < 1e-9);
    }

    #[test]
    fn features_ignore_integer_delay(
        values in proptest::collection::vec((-1.0f64..1.0, -1.0f64..1.0), 8 * 32),
        delay in 1usize..32,
    ) {
        let h = matrix(8, 32, &values);
        let fx = FeatureExtractor::new(&meta(8, 32, 32)).unwrap();
        let base = fx.extract_matrix(&h).unwrap();
        let ramp = Array2::from_shape_fn((8, 32), |(r, k)| {
            h[[r, k]] * Complex64::from_polar(1.0, -2.0 * PI * (delay * k) as f64 / 32.0)
        });
        prop_assert!(rel_diff(&base, &fx.extract_matrix(&ramp).unwrap()) < 1e-9);
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

#[test]
fn reidentified_pairs_are_physically_close() {
    let cfg = ScenarioConfig {
        n_samples: 1500,
        ..ScenarioConfig::default()
    };
    let ds = generate_dataset(&cfg).unwrap();
    let feats = extract_features(&ds).unwrap();
    let sel = SelectionConfig::for_interval(1.0, cfg.speed_range.0, cfg.speed_range.1);
    let out = select_triplets(&ds, &feats, &sel).unwrap();
    let truth = ds.ground_truth().unwrap();
    let d = |a: usize, b: usize| (truth[a][0] - truth[b][0]).hypot(truth[a][1] - truth[b][1]);
    let reid: Vec<f64> = out.triplets.iter().filter(|t| t.reidentified).map(|t| d(t.anchor, t.positive)).collect();
    let neg: Vec<f64> = out.triplets.iter().map(|t| d(t.anchor, t.negative)).collect();
    assert!(!reid.is_empty());
    assert!(median(reid.clone()) < median(neg.clone()), "{} vs {}", median(reid), median(neg));
}

#[test]
fn generated_dataset_roundtrips_through_file() {
    let cfg = ScenarioConfig {
        n_samples: 50,
        ..ScenarioConfig::default()
    };
    let ds = generate_dataset(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.ccd");
    write_dataset(&ds, &path).unwrap();
    let back = read_dataset(&path).unwrap();
    assert_eq!(back.meta, ds.meta);
    assert_eq!(back.len(), 50);
    assert_eq!(extract_features(&back).unwrap(), extract_features(&ds).unwrap());
}
