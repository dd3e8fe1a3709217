//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::collections::{BTreeMap, HashMap};
use std::time::{Duration, Instant};

use eigenmine::cosface::{cosface_loss, cosface_loss_and_grad, CosfaceParams, DescriptorBatch, HeadWeights};
use eigenmine::eval::{knn, recall_at_n, similarity, similarity_matrix, DescriptorSet, GroundTruthMode};
use eigenmine::geo::{bucket_images, group_of, CellIndex, GridConfig, ImageRecord, UtmPoint};
use eigenmine::io::{read_class_manifest, read_descriptors, write_class_manifest, write_descriptors, ClassRecord, MemberRecord};
use eigenmine::mining::{bearing_to, focal_point, mine_classes, principal_frame, MiningConfig, Role};
use eigenmine::trainer::{
    eval_splits, generate_synthetic, smoothed, train, Capture, SyntheticConfig, SyntheticDataset, TrainConfig,
    TrainOutcome, TrainState,
};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.sample(StandardNormal))
}

fn unit_rows_f32(rng: &mut ChaCha8Rng, rows: usize, dim: usize) -> Array2<f32> {
    let mut m = Array2::<f32>::zeros((rows, dim));
    for mut row in m.rows_mut() {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        for (dst, x) in row.iter_mut().zip(&v) {
            *dst = (x / n) as f32;
        }
    }
    m
}

// ---------------------------------------------------------------------------
// 1. CosFace gradient check
// ---------------------------------------------------------------------------

/// Max absolute deviation over the larger of the two gradients' max norms.
fn relative_error(analytic: &Array2<f64>, numeric: &Array2<f64>) -> f64 {
    let scale = analytic
        .iter()
        .chain(numeric.iter())
        .fold(0.0f64, |m, x| m.max(x.abs()));
    let diff = analytic
        .iter()
        .zip(numeric)
        .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

fn central_difference(
    x: &Array2<f64>,
    w: &Array2<f64>,
    labels: &[usize],
    p: &CosfaceParams,
    wrt_inputs: bool,
) -> Array2<f64> {
    const H: f64 = 1e-5;
    let loss = |x: &Array2<f64>, w: &Array2<f64>| {
        let batch = DescriptorBatch::from_raw(x.view(), labels.to_vec()).unwrap();
        cosface_loss(&batch, &HeadWeights::new(w.clone()), p).unwrap().loss
    };
    let target = if wrt_inputs { x } else { w };
    let mut grad = Array2::zeros(target.raw_dim());
    for idx in ndarray::indices(target.raw_dim()) {
        let mut plus = target.clone();
        let mut minus = target.clone();
        plus[idx] += H;
        minus[idx] -= H;
        let (lp, lm) = if wrt_inputs {
            (loss(&plus, w), loss(&minus, w))
        } else {
            (loss(x, &plus), loss(x, &minus))
        };
        grad[idx] = (lp - lm) / (2.0 * H);
    }
    grad
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let instances = 200;
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let b = rng.random_range(1..=8);
        let c = rng.random_range(2..=10);
        let d = rng.random_range(2..=8);
        let s = rng.random_range(1.0..=64.0);
        let m = rng.random_range(0.0..=0.5);
        let p = CosfaceParams::new(s, m);
        let x = gaussian_matrix(&mut rng, b, d);
        let w = gaussian_matrix(&mut rng, c, d);
        let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..c)).collect();
        let batch = DescriptorBatch::from_raw(x.view(), labels.clone()).unwrap();
        let (_, g) = cosface_loss_and_grad(&batch, &HeadWeights::new(w.clone()), &p).unwrap();
        let gx = central_difference(&x, &w, &labels, &p, true);
        let gw = central_difference(&x, &w, &labels, &p, false);
        worst = worst
            .max(relative_error(&g.grad_inputs, &gx))
            .max(relative_error(&g.grad_head, &gw));
    }
    let elapsed = start.elapsed();
    outcome(
        worst <= 1e-5 && elapsed < Duration::from_secs(10),
        format!("{instances} instances, max relative error {worst:.2e} (≤ 1e-5), {elapsed:.2?} (< 10 s)"),
    )
}

// ---------------------------------------------------------------------------
// 2. Principal frame vs characteristic polynomial
// ---------------------------------------------------------------------------

/// Roots of `(a - λ)(c - λ) - b²` by bisection on either side of `(a + c)/2`.
fn char_poly_eigenvalues(a: f64, b: f64, c: f64) -> (f64, f64) {
    let p = |l: f64| (a - l) * (c - l) - b * b;
    let mid = 0.5 * (a + c);
    let reach = 0.5 * (a - c).abs() + b.abs() + 1.0;
    let bisect = |mut inside: f64, mut outside: f64| {
        // p(inside) ≤ 0 < p(outside)
        for _ in 0..200 {
            let m = 0.5 * (inside + outside);
            if m == inside || m == outside {
                break;
            }
            if p(m) <= 0.0 {
                inside = m;
            } else {
                outside = m;
            }
        }
        inside
    };
    (bisect(mid, mid + reach), bisect(mid, mid - reach))
}

/// Unit vector spanning the null space of `A - λI`, sign-canonicalized.
fn null_vector(a: f64, b: f64, c: f64, l: f64) -> [f64; 2] {
    let r1 = [b, l - a];
    let r2 = [l - c, b];
    let n1 = r1[0].hypot(r1[1]);
    let n2 = r2[0].hypot(r2[1]);
    let (v, n) = if n1 >= n2 { (r1, n1) } else { (r2, n2) };
    let mut v = [v[0] / n, v[1] / n];
    if v[0] < -1e-12 || (v[0].abs() <= 1e-12 && v[1] < 0.0) {
        v = [-v[0], -v[1]];
    }
    v
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst_value: f64 = 0.0;
    let mut worst_axis: f64 = 0.0;
    let mut worst_ortho: f64 = 0.0;
    for _ in 0..1000 {
        let n = rng.random_range(3..=200);
        let offset = UtmPoint::new(rng.random_range(0.0..8e5), rng.random_range(0.0..9e6));
        let theta = rng.random_range(0.0..std::f64::consts::PI);
        let long = rng.random_range(0.5..8.0);
        let short = long / rng.random_range(1.5..20.0);
        let points: Vec<UtmPoint> = (0..n)
            .map(|_| {
                let u: f64 = rng.sample::<f64, _>(StandardNormal) * long;
                let v: f64 = rng.sample::<f64, _>(StandardNormal) * short;
                UtmPoint::new(
                    offset.east + u * theta.cos() - v * theta.sin(),
                    offset.north + u * theta.sin() + v * theta.cos(),
                )
            })
            .collect();
        let frame = principal_frame(&points).unwrap();

        let k = n as f64;
        let me = points.iter().map(|p| p.east).sum::<f64>() / k;
        let mn = points.iter().map(|p| p.north).sum::<f64>() / k;
        let (mut a, mut b, mut c) = (0.0, 0.0, 0.0);
        for p in &points {
            a += (p.east - me).powi(2);
            b += (p.east - me) * (p.north - mn);
            c += (p.north - mn).powi(2);
        }
        let (a, b, c) = (a / k, b / k, c / k);
        let (l1, l2) = char_poly_eigenvalues(a, b, c);
        let v1 = null_vector(a, b, c, l1);
        let v2 = [-v1[1], v1[0]];

        worst_value = worst_value
            .max((frame.eigenvalues.0 - l1).abs())
            .max((frame.eigenvalues.1 - l2).abs());
        for (got, want) in [(frame.pc_first, v1), (frame.pc_second, v2)] {
            worst_axis = worst_axis.max((got[0] - want[0]).abs()).max((got[1] - want[1]).abs());
        }
        let f = frame.pc_first;
        let s = frame.pc_second;
        worst_ortho = worst_ortho
            .max((f[0].hypot(f[1]) - 1.0).abs())
            .max((s[0].hypot(s[1]) - 1.0).abs())
            .max((f[0] * s[0] + f[1] * s[1]).abs());
    }
    outcome(
        worst_value <= 1e-10 && worst_axis <= 1e-10 && worst_ortho <= 1e-12,
        format!(
            "1000 clouds, eigenvalues {worst_value:.1e}, axes {worst_axis:.1e} (≤ 1e-10), orthonormality {worst_ortho:.1e} (≤ 1e-12)"
        ),
    )
}

// ---------------------------------------------------------------------------
// 3. Focal limits
// ---------------------------------------------------------------------------

fn circular_spread_deg(bearings: &[f64]) -> f64 {
    let mut worst: f64 = 0.0;
    for (i, a) in bearings.iter().enumerate() {
        for b in &bearings[i + 1..] {
            let d = (a - b).abs() % 360.0;
            worst = worst.max(d.min(360.0 - d));
        }
    }
    worst
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let grid = GridConfig::default();
    let mut images = Vec::new();
    for cell in 0..200 {
        let col = rng.random_range(30_000..40_000);
        let row = rng.random_range(300_000..350_000);
        for k in 0..rng.random_range(3..40) {
            let e = (col as f64 + rng.random_range(0.0..1.0)) * grid.cell_side_m;
            let n = (row as f64 + rng.random_range(0.0..1.0)) * grid.cell_side_m;
            images.push(ImageRecord::new(format!("c{cell}_{k}"), UtmPoint::new(e, n), None));
        }
    }
    let buckets = bucket_images(&images, &grid).unwrap();

    let far = MiningConfig {
        focal_distance_d: 1e9,
        panorama_mode: true,
        ..Default::default()
    };
    let mined = mine_classes(&buckets, &far).unwrap();
    let far_spread = mined
        .classes
        .iter()
        .map(|c| circular_spread_deg(&c.members.iter().map(|m| m.target_bearing).collect::<Vec<_>>()))
        .fold(0.0f64, f64::max);

    let mut near_err: f64 = 0.0;
    let mut checked = 0usize;
    for members in buckets.values() {
        let points: Vec<UtmPoint> = members.iter().map(|m| m.position).collect();
        let frame = principal_frame(&points).unwrap();
        let k = points.len() as f64;
        let centroid = UtmPoint::new(
            points.iter().map(|p| p.east).sum::<f64>() / k,
            points.iter().map(|p| p.north).sum::<f64>() / k,
        );
        for role in [Role::Lateral, Role::Frontal] {
            let focal = focal_point(&frame, role, 0.0);
            for p in &points {
                let got = bearing_to(*p, focal.position).unwrap().to_radians();
                let want = (centroid.east - p.east).atan2(centroid.north - p.north);
                let d = (got - want).rem_euclid(std::f64::consts::TAU);
                near_err = near_err.max(d.min(std::f64::consts::TAU - d));
                checked += 1;
            }
        }
    }
    outcome(
        far_spread < 0.01 && near_err <= 1e-9 && mined.classes.len() == 2 * buckets.len(),
        format!(
            "{} cells; D = 1e9 spread {far_spread:.2e}° (< 0.01°); D = 0 deviation {near_err:.1e} rad over {checked} bearings (≤ 1e-9)",
            buckets.len()
        ),
    )
}

// ---------------------------------------------------------------------------
// 4. Group disjointness
// ---------------------------------------------------------------------------

fn criterion_4() -> Outcome {
    let mut violations = 0usize;
    let mut pairs = 0usize;
    for n in 2..=4u32 {
        let grid = GridConfig {
            group_spacing_n: n,
            ..Default::default()
        };
        let cells: Vec<CellIndex> = (-15..15)
            .flat_map(|row| (-15..15).map(move |col| CellIndex::new(col, row)))
            .collect();
        for (i, a) in cells.iter().enumerate() {
            for b in &cells[i + 1..] {
                if group_of(*a, &grid) == group_of(*b, &grid) {
                    pairs += 1;
                    if a.chebyshev(b) < u64::from(n) {
                        violations += 1;
                    }
                }
            }
        }
    }
    outcome(
        violations == 0,
        format!("30×30 cells, N ∈ {{2,3,4}}: {pairs} same-group pairs, {violations} closer than N"),
    )
}

// ---------------------------------------------------------------------------
// 5. Recall oracle
// ---------------------------------------------------------------------------

fn oracle_recall(
    q: &DescriptorSet,
    db: &DescriptorSet,
    mode: GroundTruthMode,
    ns: &[usize],
) -> BTreeMap<usize, f64> {
    let mut hits = vec![0usize; ns.len()];
    for (qi, qid) in q.ids().iter().enumerate() {
        let qv = q.vectors().row(qi).to_vec();
        let mut ranked: Vec<(f64, &String)> = db
            .ids()
            .iter()
            .enumerate()
            .map(|(j, id)| (similarity(&qv, &db.vectors().row(j).to_vec()), id))
            .collect();
        ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1)));
        let positive = |id: &String| match mode {
            GroundTruthMode::DistanceThreshold { radius_m } => {
                q.positions[qid].distance(&db.positions[id]) <= radius_m
            }
            GroundTruthMode::FrameThreshold { max_frames } => {
                (q.frame_index[qid] - db.frame_index[id]).unsigned_abs() <= max_frames
            }
            GroundTruthMode::ExactPair => &q.pair_of[qid] == id,
        };
        for (h, &n) in hits.iter_mut().zip(ns) {
            if ranked.iter().take(n).any(|(_, id)| positive(id)) {
                *h += 1;
            }
        }
    }
    ns.iter()
        .zip(hits)
        .map(|(&n, h)| (n, if q.is_empty() { 0.0 } else { h as f64 / q.len() as f64 }))
        .collect()
}

/// Random set whose vectors come from a small pool, so ties are common.
fn random_set(rng: &mut ChaCha8Rng, prefix: &str, rows: usize, pool: &Array2<f32>) -> DescriptorSet {
    let mut ids: Vec<String> = (0..rows).map(|i| format!("{prefix}{i:04}")).collect();
    ids.shuffle(rng);
    let picks: Vec<usize> = (0..rows).map(|_| rng.random_range(0..pool.nrows())).collect();
    let vectors = pool.select(ndarray::Axis(0), &picks);
    let positions = ids
        .iter()
        .map(|id| (id.clone(), UtmPoint::new(rng.random_range(0.0..100.0), rng.random_range(0.0..100.0))))
        .collect();
    let frames = ids.iter().map(|id| (id.clone(), rng.random_range(0..200))).collect();
    DescriptorSet::new(ids, vectors)
        .unwrap()
        .with_positions(positions)
        .with_frames(frames)
}

fn criterion_5() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut mismatches = 0usize;
    let mut per_mode = [0usize; 3];
    for i in 0..1000 {
        let dim = rng.random_range(2..=8);
        let (pool_rows, nq, ndb) = (rng.random_range(3..=40), rng.random_range(1..=20), rng.random_range(1..=60));
        let pool = unit_rows_f32(&mut rng, pool_rows, dim);
        let q = random_set(&mut rng, "q", nq, &pool);
        let db = random_set(&mut rng, "d", ndb, &pool);
        let (mode, q) = match i % 3 {
            0 => (
                GroundTruthMode::DistanceThreshold {
                    radius_m: rng.random_range(1.0..40.0),
                },
                q,
            ),
            1 => (
                GroundTruthMode::FrameThreshold {
                    max_frames: rng.random_range(0..20),
                },
                q,
            ),
            _ => {
                let pairs = q
                    .ids()
                    .iter()
                    .map(|id| (id.clone(), db.ids()[rng.random_range(0..db.len())].clone()))
                    .collect();
                (GroundTruthMode::ExactPair, q.with_pairs(pairs))
            }
        };
        per_mode[i % 3] += 1;
        let mut ns: Vec<usize> = (0..rng.random_range(1..=4)).map(|_| rng.random_range(1..=70)).collect();
        ns.sort_unstable();
        ns.dedup();
        let got = recall_at_n(&q, &db, mode, &ns).unwrap().recalls;
        if got != oracle_recall(&q, &db, mode, &ns) {
            mismatches += 1;
        }
    }
    outcome(
        mismatches == 0,
        format!(
            "1000 instances (distance {}, frames {}, pairs {}), {mismatches} differ from the oracle",
            per_mode[0], per_mode[1], per_mode[2]
        ),
    )
}

// ---------------------------------------------------------------------------
// 6. kNN exactness
// ---------------------------------------------------------------------------

fn criterion_6() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let dim = 32;
    let queries = unit_rows_f32(&mut rng, 1000, dim);
    let mut db = unit_rows_f32(&mut rng, 10_000, dim);
    // plant exact duplicates so the id tie-break is exercised
    for _ in 0..500 {
        let src = rng.random_range(0..10_000);
        let dst = rng.random_range(0..10_000);
        let row = db.row(src).to_owned();
        db.row_mut(dst).assign(&row);
    }
    let mut db_ids: Vec<String> = (0..10_000).map(|i| format!("db{i:05}")).collect();
    db_ids.shuffle(&mut rng);
    let q_ids: Vec<String> = (0..1000).map(|i| format!("q{i:04}")).collect();
    let qs = DescriptorSet::new(q_ids, queries).unwrap();
    let dbs = DescriptorSet::new(db_ids.clone(), db).unwrap();

    let start = Instant::now();
    let result = knn(&qs, &dbs, 20).unwrap();
    let elapsed = start.elapsed();

    let db_rows: Vec<Vec<f32>> = dbs.vectors().rows().into_iter().map(|r| r.to_vec()).collect();
    let mut mismatches = 0usize;
    let mut ties_at_cut = 0usize;
    for (qi, got) in result.neighbors.iter().enumerate() {
        let qv = qs.vectors().row(qi).to_vec();
        let mut all: Vec<(f64, usize)> = db_rows.iter().enumerate().map(|(j, v)| (similarity(&qv, v), j)).collect();
        all.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| db_ids[a.1].cmp(&db_ids[b.1])));
        let want: Vec<usize> = all[..20].iter().map(|x| x.1).collect();
        let got_idx: Vec<usize> = got.iter().map(|n| n.index).collect();
        if got_idx != want || got.iter().zip(&all).any(|(n, w)| n.similarity.to_bits() != w.0.to_bits()) {
            mismatches += 1;
        }
        if all[..21].windows(2).any(|w| w[0].0 == w[1].0) {
            ties_at_cut += 1;
        }
    }
    outcome(
        mismatches == 0 && elapsed < Duration::from_secs(30),
        format!(
            "1000 × 10000 top-20, {mismatches} lists differ, {ties_at_cut} lists contain ties, knn {elapsed:.2?} (< 30 s)"
        ),
    )
}

// ---------------------------------------------------------------------------
// 7–9. Training ablations on the synthetic city
// ---------------------------------------------------------------------------

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

#[derive(Clone, Copy, PartialEq)]
enum Condition {
    Both,
    FrontalOnly,
    LateralOnly,
}

impl Condition {
    fn mining(self) -> MiningConfig {
        MiningConfig {
            emit_lateral: self != Condition::FrontalOnly,
            emit_frontal: self != Condition::LateralOnly,
            ..Default::default()
        }
    }
}

fn descriptor_set(state: &TrainState, data: &SyntheticDataset) -> DescriptorSet {
    let ids: Vec<String> = data.images.iter().map(|i| i.id.clone()).collect();
    let positions: HashMap<String, UtmPoint> = data.images.iter().map(|i| (i.id.clone(), i.position)).collect();
    state.encode(&ids, &data.features).unwrap().with_positions(positions)
}

struct SeedRuns {
    seed: u64,
    runs: Vec<(Condition, TrainOutcome, Duration)>,
}

impl SeedRuns {
    fn get(&self, c: Condition) -> &TrainOutcome {
        &self.runs.iter().find(|r| r.0 == c).expect("trained").1
    }
}

fn train_all() -> Vec<SeedRuns> {
    SEEDS
        .iter()
        .map(|&seed| {
            let (_, data) = generate_synthetic(&SyntheticConfig {
                seed,
                ..Default::default()
            })
            .unwrap();
            let cfg = TrainConfig {
                seed,
                ..Default::default()
            };
            let runs = [Condition::Both, Condition::FrontalOnly, Condition::LateralOnly]
                .into_iter()
                .map(|c| {
                    let start = Instant::now();
                    let out = train(&data.images, &data.features, &c.mining(), &cfg).unwrap();
                    (c, out, start.elapsed())
                })
                .collect();
            SeedRuns { seed, runs }
        })
        .collect()
}

fn criterion_7(all: &[SeedRuns]) -> Outcome {
    let mode = GroundTruthMode::DistanceThreshold { radius_m: 25.0 };
    let mut side_wins = 0;
    let mut front_wins = 0;
    let mut slowest = Duration::ZERO;
    let mut rows = Vec::new();
    for sr in all {
        let (world, _) = generate_synthetic(&SyntheticConfig {
            seed: sr.seed,
            ..Default::default()
        })
        .unwrap();
        let splits = eval_splits(&world, 10, 10);
        let r1 = |c: Condition, queries: &SyntheticDataset| {
            let state = &sr.get(c).state;
            let db = descriptor_set(state, &splits.database);
            let q = descriptor_set(state, queries);
            recall_at_n(&q, &db, mode, &[1]).unwrap().recall(1).unwrap()
        };
        let both_side = r1(Condition::Both, &splits.side_queries);
        let front_side = r1(Condition::FrontalOnly, &splits.side_queries);
        let both_front = r1(Condition::Both, &splits.frontal_queries);
        let lat_front = r1(Condition::LateralOnly, &splits.frontal_queries);
        side_wins += usize::from(both_side > front_side);
        front_wins += usize::from(lat_front < both_front);
        slowest = slowest.max(sr.runs.iter().map(|r| r.2).max().unwrap());
        rows.push(format!(
            "seed {}: side R@1 {both_side:.3} vs {front_side:.3}, frontal R@1 {both_front:.3} vs {lat_front:.3}",
            sr.seed
        ));
    }
    for r in &rows {
        println!("      {r}");
    }
    outcome(
        side_wins >= 4 && front_wins >= 4 && slowest < Duration::from_secs(60),
        format!(
            "both > frontal-only on side views {side_wins}/5, lateral-only < both on frontal views {front_wins}/5 (≥ 4), slowest run {slowest:.2?} (< 60 s)"
        ),
    )
}

/// Frozen from the reference run: final/initial is about 8e-4 on seeds 0–4.
const FROZEN_LOSS_RATIO: f64 = 2e-3;

fn criterion_8(all: &[SeedRuns]) -> Outcome {
    let reference = all[0].get(Condition::Both);
    let initial = reference.history[0];
    let last = *smoothed(&reference.history, 100).last().unwrap();
    let ratio = last / initial;

    let (_, data) = generate_synthetic(&SyntheticConfig::default()).unwrap();
    let rerun = train(&data.images, &data.features, &MiningConfig::default(), &TrainConfig::default()).unwrap();
    let identical = rerun.history.len() == reference.history.len()
        && rerun
            .history
            .iter()
            .zip(&reference.history)
            .all(|(a, b)| a.to_bits() == b.to_bits())
        && rerun.state == reference.state;
    let within_tenth = ratio <= 0.1;
    let within_frozen = ratio <= FROZEN_LOSS_RATIO;
    outcome(
        within_tenth && within_frozen && identical,
        format!(
            "smoothed loss {initial:.3} → {last:.4}, ratio {ratio:.2e} (≤ 0.1, frozen ≤ {FROZEN_LOSS_RATIO:.0e}); rerun bit-identical: {identical}"
        ),
    )
}

fn criterion_9(all: &[SeedRuns]) -> Outcome {
    let mut wins = 0;
    let mut rows = Vec::new();
    for sr in all {
        let (world, _) = generate_synthetic(&SyntheticConfig {
            seed: sr.seed,
            ..Default::default()
        })
        .unwrap();
        // fresh facade views of the first street, reduced to those facing its lateral focal point
        let held = world.sample("view_", 80, &[Capture::SideFacing], sr.seed.wrapping_add(7));
        let street: Vec<ImageRecord> = held
            .images
            .iter()
            .filter(|i| held.street_of[&i.id] == 0)
            .cloned()
            .collect();
        let buckets = bucket_images(&street, &GridConfig::default()).unwrap();
        let mined = mine_classes(&buckets, &MiningConfig::default()).unwrap();
        let class = mined.classes.iter().find(|c| c.role == Role::Lateral).unwrap();
        let ids: Vec<String> = class.members.iter().map(|m| m.image_id.clone()).collect();
        let points: Vec<UtmPoint> = street.iter().map(|i| i.position).collect();
        let frame = principal_frame(&points).unwrap();
        let mean = |c: Condition| {
            let set = descriptor_set(&sr.get(c).state, &held);
            similarity_matrix(&ids, &set, &frame).unwrap().mean_off_diagonal()
        };
        let both = mean(Condition::Both);
        let front = mean(Condition::FrontalOnly);
        wins += usize::from(both >= front);
        rows.push(format!(
            "seed {}: {} images, mean off-diagonal {both:.3} vs {front:.3}",
            sr.seed,
            ids.len()
        ));
    }
    for r in &rows {
        println!("      {r}");
    }
    outcome(
        wins >= 4,
        format!("combined ≥ frontal-only on {wins}/5 seeds (≥ 4)"),
    )
}

// ---------------------------------------------------------------------------
// 10. Format round trips
// ---------------------------------------------------------------------------

fn random_id(rng: &mut ChaCha8Rng, i: usize) -> String {
    const ALPHABET: &[char] = &['a', 'Z', '0', '_', '-', '/', '.', 'é', 'ß', '東', '京', ' ', '"', '\\'];
    let len = rng.random_range(0..24);
    let tail: String = (0..len).map(|_| ALPHABET[rng.random_range(0..ALPHABET.len())]).collect();
    format!("{i}:{tail}")
}

fn random_f64(rng: &mut ChaCha8Rng) -> f64 {
    match rng.random_range(0..4) {
        0 => rng.random_range(-1e7..1e7),
        1 => f64::from_bits(rng.random::<u64>() & !(0x7ff << 52) | (rng.random_range(900..1100u64) << 52)),
        2 => rng.random_range(0.0..360.0),
        _ => -0.0,
    }
}

fn criterion_10() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut failures = Vec::new();
    for i in 0..100 {
        let n = rng.random_range(0..50);
        let dim = rng.random_range(1..40);
        let ids: Vec<String> = (0..n).map(|k| random_id(&mut rng, k)).collect();
        let set = DescriptorSet::new(ids.clone(), unit_rows_f32(&mut rng, n, dim)).unwrap();
        let mut bytes = Vec::new();
        write_descriptors(&mut bytes, &set).unwrap();
        let back = read_descriptors(bytes.as_slice()).unwrap();
        let mut again = Vec::new();
        write_descriptors(&mut again, &back).unwrap();
        let bit_exact = back.ids() == set.ids()
            && back.vectors().shape() == set.vectors().shape()
            && back
                .vectors()
                .iter()
                .zip(set.vectors().iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
            && again == bytes;
        if !bit_exact {
            failures.push(format!("descriptors #{i}"));
        }

        let classes: Vec<ClassRecord> = (0..rng.random_range(0..20))
            .map(|k| ClassRecord {
                class_id: k,
                role: if rng.random_bool(0.5) { Role::Lateral } else { Role::Frontal },
                cell: [rng.random_range(-1_000_000..1_000_000), rng.random_range(-1_000_000..1_000_000)],
                focal: [random_f64(&mut rng), random_f64(&mut rng)],
                members: (0..rng.random_range(0..10))
                    .map(|m| MemberRecord {
                        id: random_id(&mut rng, m),
                        target_bearing: random_f64(&mut rng),
                    })
                    .collect(),
            })
            .collect();
        let mut text = Vec::new();
        write_class_manifest(&mut text, &classes).unwrap();
        let back = read_class_manifest(text.as_slice()).unwrap();
        let mut expected = classes.clone();
        expected.sort_by_key(|c| (c.role, c.class_id));
        let exact = back.len() == expected.len()
            && back.iter().zip(&expected).all(|(a, b)| {
                a.class_id == b.class_id
                    && a.role == b.role
                    && a.cell == b.cell
                    && a.focal.iter().zip(&b.focal).all(|(x, y)| x.to_bits() == y.to_bits())
                    && a.members.len() == b.members.len()
                    && a.members.iter().zip(&b.members).all(|(x, y)| {
                        x.id == y.id && x.target_bearing.to_bits() == y.target_bearing.to_bits()
                    })
            });
        if !exact {
            failures.push(format!("class manifest #{i}"));
        }
    }
    outcome(
        failures.is_empty(),
        format!("100 descriptor files and 100 class manifests, failures: {failures:?}"),
    )
}

fn main() {
    // `cargo test -- --list` and filters are not meaningful here
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let mut failed = 0;
    let mut report = |n: usize, name: &str, o: Outcome| {
        let tag = if o.pass { "PASS" } else { "FAIL" };
        println!("[{tag}] {n:>2}. {name}: {}", o.detail);
        if !o.pass {
            failed += 1;
        }
    };
    report(1, "CosFace gradient check", criterion_1());
    report(2, "principal frame oracle", criterion_2());
    report(3, "focal limits", criterion_3());
    report(4, "group disjointness", criterion_4());
    report(5, "recall oracle", criterion_5());
    report(6, "kNN exactness", criterion_6());
    let runs = train_all();
    report(7, "loss-component ablation", criterion_7(&runs));
    report(8, "training sanity", criterion_8(&runs));
    report(9, "cross-view similarity", criterion_9(&runs));
    report(10, "format round trips", criterion_10());
    if failed > 0 {
        println!("acceptance: {failed} of 10 criteria failed");
        std::process::exit(1);
    }
    println!("acceptance: all 10 criteria passed");
}
