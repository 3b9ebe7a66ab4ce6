//! End-to-end acceptance checks. Each criterion prints one `PASS`/`FAIL` line;
//! the process exits non-zero if any criterion fails.

use std::f64::consts::{PI, TAU};
use std::time::{Duration, Instant};

use cchart::dataset::{ArrayGeometry, DatasetMeta};
use cchart::features::{extract_features, FeatureExtractor};
use cchart::losses::{
    inertial_loss, sammon_siamese_loss, split_triplet_loss, triplet_loss, LossConfig, LossKind, Pair,
};
use cchart::metrics::{continuity, kruskal_stress, sr_metric, trustworthiness, Point};
use cchart::model::{init_model, CentroidGrid};
use cchart::scenario::{generate_dataset, synthesize_csi, ScenarioConfig, Trajectory, TrajectoryPoint};
use cchart::selection::{select_triplets, Reidentify, SelectionConfig};
use cchart::train::{evaluate_loss, train, TrainConfig};
use cchart_cli::{cmd_compare, compare_runs, compare_table, CompareRow, RunConfig};
use ndarray::Array2;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Criterion = fn() -> Outcome;
type LossFn<'a> = &'a dyn Fn(&Array2<f64>) -> (f64, Array2<f64>);

fn within(elapsed: Duration, limit_s: f64, detail: String) -> Outcome {
    let s = elapsed.as_secs_f64();
    if s < limit_s {
        Ok(format!("{detail}; {s:.1}s"))
    } else {
        Err(format!("{detail}; took {s:.1}s, limit {limit_s}s"))
    }
}

fn check(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn rel_diff(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    num / a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn feature_invariances() -> Outcome {
    let start = Instant::now();
    let meta = |c| DatasetMeta {
        antennas: 8,
        subcarriers: 32,
        cyclic_prefix: c,
        geometry: ArrayGeometry::Ula,
        bandwidth_hz: 1e6,
        carrier_hz: 1e9,
    };
    let fx = FeatureExtractor::new(&meta(8)).map_err(|e| e.to_string())?;
    let full = FeatureExtractor::new(&meta(32)).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let h = Array2::from_shape_fn((8, 32), |_| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)));
        let g = Complex64::from_polar(rng.random_range(1e-3..1e3), rng.random_range(0.0..TAU));
        let delay = rng.random_range(1..32usize);
        let ramp = Array2::from_shape_fn((8, 32), |(r, k)| {
            h[[r, k]] * Complex64::from_polar(1.0, -2.0 * PI * (delay * k) as f64 / 32.0)
        });
        let base = fx.extract_matrix(&h).map_err(|e| e.to_string())?;
        let moved = fx.extract_matrix(&h.mapv(|z| z * g)).map_err(|e| e.to_string())?;
        let base_full = full.extract_matrix(&h).map_err(|e| e.to_string())?;
        let shifted = full.extract_matrix(&ramp).map_err(|e| e.to_string())?;
        worst = worst.max(rel_diff(&base, &moved)).max(rel_diff(&base_full, &shifted));
    }
    check(worst < 1e-9, || format!("worst relative change {worst:.2e}"))?;
    within(start.elapsed(), 5.0, format!("worst relative change {worst:.2e} over 100 matrices"))
}

fn numeric_grad(p: &Array2<f64>, f: &dyn Fn(&Array2<f64>) -> f64) -> Array2<f64> {
    let h = 1e-6;
    Array2::from_shape_fn(p.raw_dim(), |(r, c)| {
        let mut q = p.clone();
        q[[r, c]] += h;
        let plus = f(&q);
        q[[r, c]] -= 2.0 * h;
        (plus - f(&q)) / (2.0 * h)
    })
}

fn rel_err(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

fn dist(p: &Array2<f64>, a: usize, b: usize) -> f64 {
    (p[[a, 0]] - p[[b, 0]]).hypot(p[[a, 1]] - p[[b, 1]])
}

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let mut worst = 0.0f64;
    let mut points_checked = 0;
    let clear = |v: f64| v.abs() > 1e-3;
    while points_checked < 100 {
        let p = Array2::from_shape_fn((6, 2), |_| rng.random_range(-3.0..3.0));
        let t = rand::seq::index::sample(&mut rng, 6, 3).into_vec();
        let ts = [[t[0], t[1], t[2]]];
        let (lambda, b_pos, b_neg) = (rng.random_range(0.2..2.0), rng.random_range(0.5..3.0), rng.random_range(0.5..3.0));
        let (dp, dn) = (dist(&p, t[0], t[1]), dist(&p, t[0], t[2]));
        if ![dp, dn, dp - dn + lambda, dp - b_pos, b_neg - dn].into_iter().all(clear) {
            continue;
        }
        let pairs = [Pair { i: t[0], j: t[1], feature_dist: rng.random_range(0.5..4.0) }];
        let losses: [LossFn; 4] = [
            &|q| {
                let o = sammon_siamese_loss(&pairs, q.view()).unwrap();
                (o.value, o.grads)
            },
            &|q| {
                let o = triplet_loss(&ts, q.view(), lambda).unwrap();
                (o.value, o.grads)
            },
            &|q| {
                let o = split_triplet_loss(&ts, q.view(), b_pos, b_neg).unwrap();
                (o.value, o.grads)
            },
            &|q| {
                let o = inertial_loss(&ts, q.view()).unwrap();
                (o.value, o.grads)
            },
        ];
        for loss in losses {
            let numeric = numeric_grad(&p, &|q| loss(q).0);
            for (a, n) in loss(&p).1.iter().zip(&numeric) {
                worst = worst.max(rel_err(*a, *n, 1e-3));
            }
        }
        points_checked += 1;
    }

    // full backprop through a tiny model, F = 6, G = 4
    let grid = CentroidGrid::new(2, 2.0).map_err(|e| e.to_string())?;
    let cfg = LossConfig { kind: LossKind::SplitTriplet, lambda: 1.0, b_pos: 0.3, b_neg: 1.5, mu: 0.2 };
    let mut models_checked = 0;
    for seed in 0..2000u64 {
        if models_checked == 100 {
            break;
        }
        let model = init_model(6, grid, seed).map_err(|e| e.to_string())?;
        let x = Array2::from_shape_fn((3, 6), |_| rng.random_range(0.0..1.0));
        let (pts, cache) = model.forward_batch(x.view()).map_err(|e| e.to_string())?;
        let hidden_clear = cache.pre_activations()[..2].iter().all(|z| z.iter().all(|&v| clear(v)));
        if !hidden_clear || !clear(dist(&pts, 0, 1) - 0.3) || !clear(1.5 - dist(&pts, 0, 2)) {
            continue;
        }
        let objective = |pts: &Array2<f64>| {
            let main = split_triplet_loss(&[[0, 1, 2]], pts.view(), cfg.b_pos, cfg.b_neg).unwrap();
            let inertia = inertial_loss(&[[1, 0, 2]], pts.view()).unwrap();
            (main.value + cfg.mu * inertia.value, main.grads + &(inertia.grads * cfg.mu))
        };
        let analytic = model.backward(&cache, objective(&pts).1.view()).map_err(|e| e.to_string())?.flat();
        let base = model.params_flat();
        let mut probe = model.clone();
        for k in 0..base.len() {
            let mut eval = |delta: f64| {
                let mut q = base.clone();
                q[k] += delta;
                probe.set_params_flat(&q).unwrap();
                objective(&probe.embed_batch(x.view()).unwrap()).0
            };
            let numeric = (eval(1e-6) - eval(-1e-6)) / 2e-6;
            worst = worst.max(rel_err(analytic[k], numeric, 1e-4));
        }
        models_checked += 1;
    }
    check(models_checked == 100, || format!("only {models_checked} kink-free models found"))?;
    check(worst < 1e-4, || format!("worst relative error {worst:.2e}"))?;
    within(start.elapsed(), 10.0, format!("worst relative error {worst:.2e}, 100 loss points, 100 models"))
}

fn loss_zero_sets() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    for case in 0..500 {
        let (b_pos, b_neg) = (rng.random_range(0.5..3.0), rng.random_range(0.5..3.0));
        let a = [rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)];
        let (tp, tn) = (rng.random_range(0.0..TAU), rng.random_range(0.0..TAU));
        let rp = rng.random_range(0.0..2.0) * b_pos;
        let rn = rng.random_range(0.0..2.0) * b_neg;
        let p = ndarray::array![a, [a[0] + rp * tp.cos(), a[1] + rp * tp.sin()], [a[0] + rn * tn.cos(), a[1] + rn * tn.sin()]];
        let value = split_triplet_loss(&[[0, 1, 2]], p.view(), b_pos, b_neg).map_err(|e| e.to_string())?.value;
        let feasible = dist(&p, 0, 1) <= b_pos && dist(&p, 0, 2) >= b_neg;
        check((value == 0.0) == feasible, || format!("split case {case}: loss {value}, feasible {feasible}"))?;

        // dyadic coordinates keep second differences exact
        let o = [rng.random_range(-64i32..64) as f64 / 8.0, rng.random_range(-64i32..64) as f64 / 8.0];
        let v = [rng.random_range(-32i32..32) as f64 / 8.0, rng.random_range(-32i32..32) as f64 / 8.0];
        let bend = if case % 2 == 0 { 0.0 } else { rng.random_range(1i32..16) as f64 / 8.0 };
        let q = ndarray::array![[o[0] + v[0], o[1] + v[1]], [o[0] + 2.0 * v[0] + bend, o[1] + 2.0 * v[1]], o];
        let value = inertial_loss(&[[0, 1, 2]], q.view()).map_err(|e| e.to_string())?.value;
        check((value == 0.0) == (bend == 0.0), || format!("inertial case {case}: loss {value}, bend {bend}"))?;
    }
    Ok("500 split and 500 inertial constructed instances".into())
}

fn random_points(n: usize, rng: &mut ChaCha8Rng) -> Vec<Point> {
    (0..n).map(|_| [rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)]).collect()
}

/// Rank of `j` among the others by distance from `i`, ties by index, from 1.
fn naive_rank(p: &[Point], i: usize, j: usize) -> usize {
    let sq = |l: usize| ((p[i][0] - p[l][0]).powi(2) + (p[i][1] - p[l][1]).powi(2), l);
    let kj = sq(j);
    1 + (0..p.len()).filter(|&l| l != i && l != j && sq(l) < kj).count()
}

fn naive_score(near: &[Point], ranked: &[Point], k: usize) -> f64 {
    let n = near.len();
    let mut total = 0usize;
    for i in 0..n {
        for j in (0..n).filter(|&j| j != i && naive_rank(near, i, j) <= k) {
            total += naive_rank(ranked, i, j).saturating_sub(k);
        }
    }
    1.0 - total as f64 / ((2 * n - 3 * k - 1) * n * k) as f64
}

/// Zero mean and identity covariance, so rotations keep per-axis spreads.
fn whiten(p: &[Point]) -> Vec<Point> {
    let n = p.len() as f64;
    let m = [p.iter().map(|v| v[0]).sum::<f64>() / n, p.iter().map(|v| v[1]).sum::<f64>() / n];
    let c: Vec<Point> = p.iter().map(|v| [v[0] - m[0], v[1] - m[1]]).collect();
    let (mut a, mut b, mut d) = (0.0, 0.0, 0.0);
    for v in &c {
        a += v[0] * v[0] / n;
        b += v[0] * v[1] / n;
        d += v[1] * v[1] / n;
    }
    let s = (a * d - b * b).sqrt();
    let t = (a + d + 2.0 * s).sqrt();
    let r = [[(a + s) / t, b / t], [b / t, (d + s) / t]];
    let det = r[0][0] * r[1][1] - r[0][1] * r[1][0];
    let inv = [[r[1][1] / det, -r[0][1] / det], [-r[1][0] / det, r[0][0] / det]];
    c.iter().map(|v| [inv[0][0] * v[0] + inv[0][1] * v[1], inv[1][0] * v[0] + inv[1][1] * v[1]]).collect()
}

fn metric_oracles() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(104);
    let err = |e: cchart::Error| e.to_string();
    for case in 0..200 {
        let n = rng.random_range(5..=50);
        let x = random_points(n, &mut rng);
        let xh: Vec<Point> = random_points(n, &mut rng)
            .into_iter()
            .map(|p| if case % 3 == 0 { [p[0].round(), p[1].round()] } else { p })
            .collect();
        let k = rng.random_range(1..=(n - 1) / 2);
        let (tw, ct) = (trustworthiness(&x, &xh, k).map_err(err)?, continuity(&x, &xh, k).map_err(err)?);
        check(tw == naive_score(&xh, &x, k), || format!("TW mismatch in case {case}"))?;
        check(ct == naive_score(&x, &xh, k), || format!("CT mismatch in case {case}"))?;
    }
    let mut ks_worst = 0.0f64;
    let mut sr_worst = 0.0f64;
    for _ in 0..200 {
        let x = random_points(40, &mut rng);
        let xh = random_points(40, &mut rng);
        let (c, angle) = (rng.random_range(0.1..10.0), rng.random_range(0.0..TAU));
        let t = [rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0)];
        let (s, co) = angle.sin_cos();
        let similar = |p: &[Point], c: f64| -> Vec<Point> {
            p.iter().map(|v| [c * (co * v[0] - s * v[1]) + t[0], c * (s * v[0] + co * v[1]) + t[1]]).collect()
        };
        let base = kruskal_stress(&x, &xh).map_err(err)?;
        ks_worst = ks_worst.max((kruskal_stress(&x, &similar(&xh, c)).map_err(err)? - base).abs());
        let w = whiten(&x);
        sr_worst = sr_worst.max(sr_metric(&w, &similar(&w, 1.0)).map_err(err)?);
        let stretched: Vec<Point> = x.iter().map(|v| [c * v[0] + t[0], v[1] / c + t[1]]).collect();
        sr_worst = sr_worst.max(sr_metric(&x, &stretched).map_err(err)?);
    }
    check(ks_worst < 1e-9, || format!("KS similarity drift {ks_worst:.2e}"))?;
    check(sr_worst < 1e-9, || format!("SR of rigid or rescaled copy {sr_worst:.2e}"))?;
    within(
        start.elapsed(),
        30.0,
        format!("200 TW/CT oracle matches, KS drift {ks_worst:.1e}, SR {sr_worst:.1e}"),
    )
}

const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
const TRIPLETS_PER_ANCHOR: &str = "4";

fn trend_config(seed: u64) -> RunConfig {
    let mut cfg = RunConfig::default();
    let s = seed.to_string();
    for key in ["seed", "selection_seed", "model_seed", "train_seed"] {
        cfg.set(key, &s).unwrap();
    }
    cfg.set("triplets_per_anchor", TRIPLETS_PER_ANCHOR).unwrap();
    cfg
}

fn variant(base: &RunConfig, loss: &str, mu: &str) -> RunConfig {
    let mut c = base.clone();
    c.set("loss", loss).unwrap();
    c.set("mu", mu).unwrap();
    c
}

struct TrendVerdict {
    split_beats_triplet: bool,
    inertia_helps_triplet: bool,
    triplets_beat_sammon: bool,
}

fn judge(rows: &[CompareRow]) -> TrendVerdict {
    let [trip, trip_mu, split_mu, sammon] = rows else { panic!("expected 4 rows") };
    let metrics = |r: &CompareRow| [r.report.ks, r.report.sr, r.tw(), r.ct()];
    let better = |a: &CompareRow, b: &CompareRow| {
        let (a, b) = (metrics(a), metrics(b));
        a[0] < b[0] && a[1] < b[1] && a[2] > b[2] && a[3] > b[3]
    };
    TrendVerdict {
        split_beats_triplet: better(split_mu, trip),
        inertia_helps_triplet: trip_mu.tw() - trip.tw() >= 0.002,
        triplets_beat_sammon: [trip, trip_mu, split_mu].iter().all(|r| better(r, sammon)),
    }
}

fn trend_reproduction() -> Outcome {
    let start = Instant::now();
    let mut tally = [0usize; 3];
    for seed in SEEDS {
        let base = trend_config(seed);
        let ds = generate_dataset(&base.scenario).map_err(|e| e.to_string())?;
        let runs = vec![
            ("triplet".to_string(), variant(&base, "triplet", "0")),
            ("triplet+inertia".to_string(), variant(&base, "triplet", "0.2")),
            ("split+inertia".to_string(), variant(&base, "split_triplet", "0.2")),
            ("sammon".to_string(), variant(&base, "sammon_siamese", "0")),
        ];
        let rows = compare_runs(&runs, &ds).map_err(|e| e.to_string())?;
        let v = judge(&rows);
        println!("  seed {seed}: (a) {} (b) {} (c) {}", v.split_beats_triplet, v.inertia_helps_triplet, v.triplets_beat_sammon);
        for line in compare_table(&rows).lines() {
            println!("    {line}");
        }
        for (t, ok) in tally.iter_mut().zip([v.split_beats_triplet, v.inertia_helps_triplet, v.triplets_beat_sammon]) {
            *t += ok as usize;
        }
    }
    let detail = format!("seeds holding (a) {}/5, (b) {}/5, (c) {}/5", tally[0], tally[1], tally[2]);
    check(tally.iter().all(|&t| t >= 4), || detail.clone())?;
    within(start.elapsed(), 900.0, detail)
}

fn feasible_convergence() -> Outcome {
    let start = Instant::now();
    let err = |e: cchart::Error| e.to_string();
    let scenario = ScenarioConfig { sample_rate_hz: 2.0, speed_range: (1.0, 1.0), rng_seed: 5, ..ScenarioConfig::default() };
    let points = (0..200)
        .map(|i| TrajectoryPoint {
            timestamp: i as f64 * 0.5,
            position: [-10.0 + i as f64 * 0.5, 30.0],
            velocity: [1.0, 0.0],
        })
        .collect();
    let ds = synthesize_csi(&Trajectory { points }, &scenario).map_err(err)?;
    let feats = extract_features(&ds).map_err(err)?;
    let mut sel = SelectionConfig::for_interval(0.5, 1.0, 1.0);
    sel.far_time = 30.0;
    sel.reidentify = Reidentify::Exclude;
    sel.triplets_per_anchor = 4;
    let trip = select_triplets(&ds, &feats, &sel).map_err(err)?.triplets;
    let mut cfg = TrainConfig::new(LossConfig {
        kind: LossKind::SplitTriplet,
        lambda: 1.0,
        b_pos: sel.b_pos(),
        b_neg: sel.b_neg(),
        mu: 0.0,
    });
    cfg.epochs = 50;
    cfg.batch_size = 64;
    let model = init_model(feats[0].len(), CentroidGrid::new(16, 80.0).map_err(err)?, 1).map_err(err)?;
    let before = evaluate_loss(&model, &feats, &trip, &[], &cfg.loss).map_err(err)?.mean_main;
    let out = train(model, &ds, &feats, &trip, &[], &cfg).map_err(err)?;
    let after = evaluate_loss(&out.model, &feats, &trip, &[], &cfg.loss).map_err(err)?.mean_main;
    let detail = format!("loss {before:.4} -> {after:.6} ({:.2}%)", 100.0 * after / before);
    check(after < 0.05 * before, || detail.clone())?;
    within(start.elapsed(), 60.0, detail)
}

fn reproducibility() -> Outcome {
    let mut base = RunConfig::default();
    base.apply_text("n_samples = 400\nepochs = 5\ntriplets_per_anchor = 4\n").map_err(|e| e.to_string())?;
    let runs = vec![
        ("triplet".to_string(), variant(&base, "triplet", "0")),
        ("triplet+inertia".to_string(), variant(&base, "triplet", "0.2")),
        ("split+inertia".to_string(), variant(&base, "split_triplet", "0.2")),
    ];
    let (a, b) = (tempfile::tempdir().map_err(|e| e.to_string())?, tempfile::tempdir().map_err(|e| e.to_string())?);
    cmd_compare(&base, &runs, None, a.path()).map_err(|e| e.to_string())?;
    cmd_compare(&base, &runs, None, b.path()).map_err(|e| e.to_string())?;
    let read = |d: &tempfile::TempDir| std::fs::read(d.path().join("compare.csv")).unwrap();
    let (x, y) = (read(&a), read(&b));
    check(x == y, || "compare.csv differs between reruns".into())?;
    Ok(format!("{} identical bytes", x.len()))
}

fn main() {
    let criteria: [(&str, Criterion); 7] = [
        ("feature invariances", feature_invariances),
        ("gradient correctness", gradient_correctness),
        ("loss zero sets", loss_zero_sets),
        ("metric oracles", metric_oracles),
        ("trend reproduction", trend_reproduction),
        ("feasible-instance convergence", feasible_convergence),
        ("reproducibility", reproducibility),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        match run() {
            Ok(detail) => println!("criterion {}: PASS {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {}: FAIL {name}: {detail}", i + 1);
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
