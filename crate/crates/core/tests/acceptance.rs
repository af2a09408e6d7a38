//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails. Set `ACCEPTANCE_ONLY=1,4` to run a subset.

use std::io::Write;
use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use partmix::cluster::{hierarchical_kmeans, partitioned_sample, refine_consistency};
use partmix::eval::{average_precision, ApMode};
use partmix::features::{window_dot, FeatureGrid};
use partmix::harness::{
    benchmark_inference, best_k_by_n, fit_loglinear, mean_ap_by_n, regularization_study, run_experiment, sign_test, BenchConfig,
    ExperimentConfig, LogLinearFit, RegularizationConfig, RunOutput,
};
use partmix::map::Map2;
use partmix::partmodel::{
    dt_2d, dt_call_count, exact_match_mask, gdt_1d, reset_dt_call_count, score_bruteforce, score_dpm, score_edpm,
    shape_score, shape_score_dpm, shape_score_epm, synthesize_template, AnchorSet, PartFilter, Placement, Pos,
    ShapeModel, Spring, StarModel,
};
use partmix::registry::Registry;

// pinned tolerances
const TEMPLATE_TOL: f64 = 1e-9;
const AP_TOL: f64 = 1e-12;
const EDPM_SLOWDOWN_MAX: f64 = 5.0;
const NAIVE_SLOWDOWN_MIN: f64 = 50.0;
const SIGMA_BOUND: f64 = 3.0;
const SIGN_TEST_ALPHA: f64 = 0.05;
const EXTRAPOLATION_TOL: f64 = 1e-9;
const ORDERING_MIN_SEEDS: usize = 7;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn random_grid(rng: &mut ChaCha8Rng, rows: usize, cols: usize, dim: usize) -> FeatureGrid {
    let data = (0..rows * cols * dim).map(|_| rng.gen_range(0.0..0.2)).collect();
    FeatureGrid::new(rows, cols, dim, 8, 1.0, data).unwrap()
}

fn random_filter(rng: &mut ChaCha8Rng, h: usize, w: usize, dim: usize) -> PartFilter {
    PartFilter::new(h, w, (0..h * w * dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

fn random_offset(rng: &mut ChaCha8Rng) -> Pos {
    Pos::new(rng.gen_range(-1..=3), rng.gen_range(-1..=3))
}

fn random_anchor_sets(rng: &mut ChaCha8Rng, parts: usize, m: usize) -> Vec<AnchorSet> {
    (0..m).map(|_| (1..parts).map(|_| random_offset(rng)).collect()).collect()
}

fn random_model(rng: &mut ChaCha8Rng, parts: usize, dim: usize) -> StarModel {
    let (h, w) = (rng.gen_range(2..=4), rng.gen_range(2..=4));
    let mut filters = vec![random_filter(rng, h, w, dim)];
    let mut springs = Vec::new();
    let mut anchors = Vec::new();
    for _ in 1..parts {
        let (h, w) = (rng.gen_range(1..=2), rng.gen_range(1..=2));
        filters.push(random_filter(rng, h, w, dim));
        springs.push(Spring::new(rng.gen_range(0.01..1.0), rng.gen_range(0.01..1.0)));
        anchors.push(random_offset(rng));
    }
    StarModel::new(dim, filters, springs, anchors, ShapeModel::Dpm).unwrap()
}

fn random_placement(rng: &mut ChaCha8Rng, model: &StarModel, rows: usize, cols: usize) -> Placement {
    Placement(
        model
            .parts
            .iter()
            .map(|p| Pos::new(rng.gen_range(0..=(rows - p.h) as i64), rng.gen_range(0..=(cols - p.w) as i64)))
            .collect(),
    )
}

/// Sum of filter responses at `z` plus the shape score.
fn direct_score(model: &StarModel, grid: &FeatureGrid, z: &Placement) -> f64 {
    let appearance: f64 = model
        .parts
        .iter()
        .zip(&z.0)
        .map(|(p, at)| window_dot(grid, &p.weights, at.row as usize, at.col as usize, p.h, p.w))
        .sum();
    appearance + shape_score(model, z)
}

fn criterion_1() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = 0.0f64;
    let tuples = 600;
    for i in 0..tuples {
        let parts = rng.gen_range(1..=3);
        let dim = rng.gen_range(1..=4);
        let mut model = random_model(&mut rng, parts, dim);
        if i % 2 == 1 && parts > 1 {
            let m = rng.gen_range(1..=6);
            let exemplars = random_anchor_sets(&mut rng, parts, m);
            model = model.with_shape(ShapeModel::Edpm { exemplars }).unwrap();
        }
        let (rows, cols) = (rng.gen_range(4..=12), rng.gen_range(4..=12));
        let grid = random_grid(&mut rng, rows, cols, dim);
        let z = random_placement(&mut rng, &model, rows, cols);
        let t = synthesize_template(&model, &z).unwrap().score(&grid).unwrap();
        worst = worst.max((t - direct_score(&model, &grid, &z)).abs());
    }
    let mut brute_mismatch = 0;
    let instances = 120;
    for _ in 0..instances {
        let parts = rng.gen_range(1..=3);
        let model = random_model(&mut rng, parts, 2);
        let (rows, cols) = (rng.gen_range(5..=10), rng.gen_range(5..=10));
        let grid = random_grid(&mut rng, rows, cols, 2);
        let (bf, _) = score_bruteforce(&model, &grid).unwrap();
        let dp = score_dpm(&model, &grid).unwrap().scores.argmax().map_or(f64::NEG_INFINITY, |a| a.0);
        if bf != dp {
            brute_mismatch += 1;
        }
    }
    outcome(
        worst <= TEMPLATE_TOL && brute_mismatch == 0,
        format!(
            "{tuples} template tuples, max |diff| {worst:.2e} (tol {TEMPLATE_TOL:e}); DP vs brute force mismatches {brute_mismatch}/{instances}"
        ),
    )
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut failures = Vec::new();
    let per_m = 110;
    for m in [1usize, 6, 50] {
        let mut bad = 0;
        for _ in 0..per_m {
            let parts = rng.gen_range(2..=3);
            let base = random_model(&mut rng, parts, 2);
            let sets = random_anchor_sets(&mut rng, parts, m);
            let model = base.with_shape(ShapeModel::Edpm { exemplars: sets.clone() }).unwrap();
            let (rows, cols) = (rng.gen_range(8..=14), rng.gen_range(8..=14));
            let grid = random_grid(&mut rng, rows, cols, 2);
            let fast = score_edpm(&model, &grid).unwrap();
            // oracle: an independent single-anchor DPM per mixture, first maximum wins
            let mut best: Option<(Map2<f64>, Map2<u32>, Vec<Option<Placement>>)> = None;
            for (k, a) in sets.iter().enumerate() {
                let mut single = base.clone();
                single.anchors = a.clone();
                let s = score_dpm(&single, &grid).unwrap();
                let (rows, cols) = (s.scores.rows(), s.scores.cols());
                let zs: Vec<Option<Placement>> =
                    (0..rows * cols).map(|i| s.placement(i / cols, i % cols)).collect();
                match &mut best {
                    None => best = Some((s.scores.clone(), Map2::filled(rows, cols, 0), zs)),
                    Some((v, idx, bz)) => {
                        for i in 0..rows * cols {
                            let (r, c) = (i / cols, i % cols);
                            if s.scores.get(r, c) > v.get(r, c) {
                                v.set(r, c, s.scores.get(r, c));
                                idx.set(r, c, k as u32);
                                bz[i] = zs[i].clone();
                            }
                        }
                    }
                }
            }
            let (v, idx, bz) = best.unwrap();
            let cols = v.cols();
            let placements_agree = (0..v.rows() * cols).all(|i| fast.placement(i / cols, i % cols) == bz[i]);
            let idx_agree = (0..v.rows() * cols)
                .all(|i| !v.as_slice()[i].is_finite() || fast.mixture.as_slice()[i] == idx.as_slice()[i]);
            if fast.scores != v || !idx_agree || !placements_agree {
                bad += 1;
            }
        }
        if bad > 0 {
            failures.push(format!("M={m}: {bad}"));
        }
    }
    outcome(
        failures.is_empty(),
        format!(
            "{per_m} instances each for M in {{1, 6, 50}}, exact value/mixture/placement; mismatches: {}",
            if failures.is_empty() { "none".to_string() } else { failures.join(", ") }
        ),
    )
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let (rows, cols) = (9usize, 9usize);
    let models = 24;
    let mut checked = 0usize;
    let mut matched = 0usize;
    let mut bad = 0usize;
    for _ in 0..models {
        let parts = rng.gen_range(2..=3);
        let model = random_model(&mut rng, parts, 1);
        let m = rng.gen_range(1..=8);
        let exemplars = random_anchor_sets(&mut rng, parts, m);
        let positions = |h: usize, w: usize| -> Vec<Pos> {
            (0..=rows - h).flat_map(|r| (0..=cols - w).map(move |c| Pos::new(r as i64, c as i64))).collect()
        };
        let domains: Vec<Vec<Pos>> = model.parts.iter().map(|p| positions(p.h, p.w)).collect();
        let mut z = vec![Pos::new(0, 0); parts];
        let mut idx = vec![0usize; parts];
        loop {
            for (j, d) in domains.iter().enumerate() {
                z[j] = d[idx[j]];
            }
            let p = Placement(z.clone());
            let epm = shape_score_epm(&model, &exemplars, &p);
            let mask = exact_match_mask(&exemplars, &p);
            let sum = shape_score_dpm(&model, &p) + mask;
            if epm.to_bits() != sum.to_bits() {
                bad += 1;
            }
            matched += usize::from(mask == 0.0);
            checked += 1;
            // odometer over the placement space
            let mut j = 0;
            while j < parts {
                idx[j] += 1;
                if idx[j] < domains[j].len() {
                    break;
                }
                idx[j] = 0;
                j += 1;
            }
            if j == parts {
                break;
            }
        }
    }
    outcome(
        bad == 0 && matched > 0,
        format!("{models} models on 9x9, {checked} placements ({matched} exemplar layouts), bitwise mismatches {bad}"),
    )
}

fn brute_1d(f: &[f64], beta: f64) -> (Vec<f64>, Vec<usize>) {
    let n = f.len();
    let mut g = vec![f64::NEG_INFINITY; n];
    let mut arg = vec![0; n];
    for x in 0..n {
        for q in 0..n {
            let v = f[q] - beta * ((x as i64 - q as i64).pow(2)) as f64;
            if v > g[x] {
                g[x] = v;
                arg[x] = q;
            }
        }
    }
    (g, arg)
}

fn brute_2d(m: &Map2<f64>, bx: f64, by: f64) -> (Map2<f64>, Map2<Pos>) {
    let (rows, cols) = (m.rows(), m.cols());
    let mut v = Map2::filled(rows, cols, f64::NEG_INFINITY);
    let mut a = Map2::filled(rows, cols, Pos::new(0, 0));
    for y in 0..rows {
        for x in 0..cols {
            for yy in 0..rows {
                for xx in 0..cols {
                    let dx = (x as i64 - xx as i64).pow(2) as f64;
                    let dy = (y as i64 - yy as i64).pow(2) as f64;
                    let s = (m.get(yy, xx) - bx * dx) - by * dy;
                    if s > v.get(y, x) {
                        v.set(y, x, s);
                        a.set(y, x, Pos::new(yy as i64, xx as i64));
                    }
                }
            }
        }
    }
    (v, a)
}

fn random_beta(rng: &mut ChaCha8Rng) -> f64 {
    match rng.gen_range(0..4) {
        0 => 0.0,
        1 => rng.gen_range(0..4) as f64 * 0.5,
        _ => rng.gen_range(0.001..3.0),
    }
}

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let arrays = 1200;
    let mut bad_1d = 0;
    for i in 0..arrays {
        let n = rng.gen_range(1..=256);
        // every third array is integer-valued so that ties occur
        let f: Vec<f64> = if i % 3 == 0 {
            (0..n).map(|_| rng.gen_range(0..5) as f64).collect()
        } else {
            (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect()
        };
        let beta = random_beta(&mut rng);
        if gdt_1d(&f, beta).unwrap() != brute_1d(&f, beta) {
            bad_1d += 1;
        }
    }
    let mut bad_2d = 0;
    for i in 0..arrays {
        let (rows, cols) = (rng.gen_range(1..=12), rng.gen_range(1..=12));
        let m = Map2::from_fn(rows, cols, |_, _| {
            if i % 3 == 0 { rng.gen_range(0..4) as f64 } else { rng.gen_range(-2.0..2.0) }
        });
        let (bx, by) = (random_beta(&mut rng), random_beta(&mut rng));
        let fast = dt_2d(&m, bx, by).unwrap();
        let (v, a) = brute_2d(&m, bx, by);
        if fast.values != v || fast.argmax != a {
            bad_2d += 1;
        }
    }
    let mut count_bad = Vec::new();
    for parts in 2..=4 {
        for m in [1usize, 6, 50, 300] {
            let base = random_model(&mut rng, parts, 2);
            let model = base.with_shape(ShapeModel::Edpm { exemplars: random_anchor_sets(&mut rng, parts, m) }).unwrap();
            let grid = random_grid(&mut rng, 12, 12, 2);
            reset_dt_call_count();
            score_edpm(&model, &grid).unwrap();
            let calls = dt_call_count();
            if calls != parts - 1 {
                count_bad.push(format!("P={parts} M={m}: {calls}"));
            }
        }
    }
    outcome(
        bad_1d == 0 && bad_2d == 0 && count_bad.is_empty(),
        format!(
            "1-D mismatches {bad_1d}/{arrays} (L<=256), 2-D mismatches {bad_2d}/{arrays} (<=12x12), dt calls != P-1: {}",
            if count_bad.is_empty() { "none".to_string() } else { count_bad.join(", ") }
        ),
    )
}

fn criterion_5() -> Outcome {
    let t = Instant::now();
    let rows = benchmark_inference(&BenchConfig::default()).unwrap();
    let time = |model: &str, m: usize| rows.iter().find(|r| r.model == model && r.m == m).unwrap().seconds_per_image;
    let edpm6 = time("edpm", 6);
    let slowdown = time("edpm", 1000) / edpm6;
    let naive = time("edpm-naive", 1000) / edpm6;
    outcome(
        slowdown <= EDPM_SLOWDOWN_MAX && naive > NAIVE_SLOWDOWN_MIN,
        format!(
            "EDPM M=1000 / M=6 = {slowdown:.2}x (max {EDPM_SLOWDOWN_MAX}x); per-mixture M=1000 / EDPM M=6 = {naive:.1}x (min {NAIVE_SLOWDOWN_MIN}x); dpm {:.2} ms, {:.1}s total",
            time("dpm", 1) * 1e3,
            t.elapsed().as_secs_f64()
        ),
    )
}

fn criterion_6() -> Outcome {
    let runs = 100;
    let sizes = [120usize, 80, 40, 15];
    let mut nesting = 0;
    let mut refinement = 0;
    let mut sums = 0;
    for seed in 0..runs {
        let mut rng = ChaCha8Rng::seed_from_u64(600 + seed);
        let centers = [[0.0, 0.0], [6.0, 0.0], [0.0, 6.0], [6.0, 6.0], [3.0, 12.0]];
        let pts: Vec<Vec<f64>> = (0..sizes[0])
            .map(|i| {
                let c = centers[i % centers.len()];
                vec![c[0] + rng.gen_range(-1.0..1.0), c[1] + rng.gen_range(-1.0..1.0)]
            })
            .collect();
        let tree = hierarchical_kmeans(&pts, 3, seed).unwrap();
        let parts = partitioned_sample(&tree.leaves(), &sizes, seed).unwrap();
        let sets = refine_consistency(&tree, &parts).unwrap();
        for k in [1usize, 2, 4, 8] {
            for w in sizes.windows(2) {
                let (big, small) = (sets.get(k, w[0]).unwrap(), sets.get(k, w[1]).unwrap());
                if small.iter().zip(big).any(|(s, b)| s.iter().any(|id| !b.contains(id))) {
                    nesting += 1;
                }
            }
            for &n in &sizes {
                let groups = sets.get(k, n).unwrap();
                if groups.iter().map(Vec::len).sum::<usize>() != n {
                    sums += 1;
                }
                if k > 1 {
                    let coarse = sets.get(k / 2, n).unwrap();
                    if groups.iter().any(|g| !coarse.iter().any(|c| g.iter().all(|id| c.contains(id)))) {
                        refinement += 1;
                    }
                }
            }
        }
    }

    // two leaves of 80 and 20: each of 50 draws picks the larger with p = 0.8
    let leaves = vec![(0..80).collect::<Vec<_>>(), (80..100).collect()];
    let trials = 10_000u64;
    let mut mean = 0.0;
    for s in 0..trials {
        mean += partitioned_sample(&leaves, &[100, 50], 10_000 + s).unwrap()[1].clusters[0].len() as f64;
    }
    mean /= trials as f64;
    let sigma = (50.0f64 * 0.8 * 0.2).sqrt() / (trials as f64).sqrt();
    let z = (mean - 40.0) / sigma;
    outcome(
        nesting == 0 && refinement == 0 && sums == 0 && z.abs() <= SIGMA_BOUND,
        format!(
            "{runs} runs: nesting violations {nesting}, refinement violations {refinement}, size mismatches {sums}; proportionality mean {mean:.3} vs 40 ({z:+.2} sigma, bound {SIGMA_BOUND})"
        ),
    )
}

/// Sum over true positives of `1/n_pos` times the best precision at that
/// rank or later.
fn staircase_ap(labels: &[bool], n_pos: usize) -> f64 {
    let mut prec = Vec::with_capacity(labels.len());
    let mut tp = 0usize;
    for (i, &l) in labels.iter().enumerate() {
        tp += usize::from(l);
        prec.push(tp as f64 / (i + 1) as f64);
    }
    let mut ap = 0.0;
    for (i, &l) in labels.iter().enumerate() {
        if l {
            let best = prec[i..].iter().copied().fold(0.0, f64::max);
            ap += best / n_pos as f64;
        }
    }
    ap
}

fn criterion_7() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(707);
    let lists = 1000;
    let mut worst = 0.0f64;
    for _ in 0..lists {
        let n = rng.gen_range(1..=60);
        let p = rng.gen_range(0.05..0.95);
        let labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(p)).collect();
        let tps = labels.iter().filter(|l| **l).count();
        let n_pos = (tps + rng.gen_range(0..5)).max(1);
        let ap = average_precision(&labels, n_pos, ApMode::Continuous).unwrap();
        worst = worst.max((ap - staircase_ap(&labels, n_pos)).abs());
    }
    let example = average_precision(&[true, false, true], 2, ApMode::Continuous).unwrap();
    let expected = 5.0 / 6.0;
    outcome(
        worst <= AP_TOL && (example - expected).abs() <= AP_TOL,
        format!("{lists} lists, max |diff| {worst:.2e} (tol {AP_TOL:e}); [TP,FP,TP]/2 = {example:.6}"),
    )
}

fn scaling_config() -> ExperimentConfig {
    ExperimentConfig {
        k_list: vec![1, 2, 4, 8],
        n_list: vec![25, 50, 100, 200],
        resamples: 1,
        seeds: (0..10).collect(),
        n_train_images: 400,
        n_neg_images: 20,
        n_test_images: 80,
        ..ExperimentConfig::default()
    }
}

fn criterion_8(run: &RunOutput, seeds: &[u64], seconds: f64) -> Outcome {
    let mut diffs = Vec::new();
    let mut grows = 0;
    let mut k_pairs = Vec::new();
    let mut grows_by_ap = 0;
    let mut ap_pairs = Vec::new();
    for &seed in seeds {
        let curve = mean_ap_by_n(&run.summary, "mixture", seed);
        diffs.extend(curve.windows(2).map(|w| w[1].1 - w[0].1));
        let rows: Vec<_> = run.summary.iter().filter(|r| r.family == "mixture" && r.seed == seed).collect();
        let small = rows.iter().min_by_key(|r| r.n).unwrap();
        let large = rows.iter().max_by_key(|r| r.n).unwrap();
        grows += usize::from(small.k < large.k);
        k_pairs.push(format!("{}->{}", small.k, large.k));
        // not part of the verdict: argmax of test AP over K
        let by_ap = best_k_by_n(&run.records, "mixture", seed);
        let (first, last) = (by_ap.first().unwrap().1, by_ap.last().unwrap().1);
        grows_by_ap += usize::from(first < last);
        ap_pairs.push(format!("{first}->{last}"));
    }
    let test = sign_test(&diffs);
    let points: Vec<(usize, f64)> =
        run.summary.iter().filter(|r| r.family == "mixture").map(|r| (r.n, r.ap)).collect();
    let fit = fit_loglinear(&points).unwrap();
    let hand = LogLinearFit { slope: 0.05, intercept: 0.35, residual: 0.0, points: 0, degenerate: false };
    let n12 = hand.n_for_target(0.95);
    let algebra_ok = ((n12 - 1e12) / 1e12).abs() <= EXTRAPOLATION_TOL;
    let majority = grows * 2 > seeds.len();
    outcome(
        test.p_value < SIGN_TEST_ALPHA && majority && algebra_ok && fit.residual.is_finite(),
        format!(
            "(a) sign test +{} -{} ={} p={:.2e} (alpha {SIGN_TEST_ALPHA}); (b) CV-chosen K grows smallest->largest N in {grows}/{} seeds [{}] (test-AP argmax K, informational: {grows_by_ap} [{}]); (c) fit slope {:.4} intercept {:.4} residual {:.4}, N(0.95) for 0.05/0.35 = {n12:.6e}; {seconds:.0}s",
            test.positive,
            test.negative,
            test.ties,
            test.p_value,
            seeds.len(),
            k_pairs.join(" "),
            ap_pairs.join(" "),
            fit.slope,
            fit.intercept,
            fit.residual,
        ),
    )
}

fn criterion_9(run: &RunOutput, seeds: &[u64]) -> Outcome {
    let mut ordered = 0;
    let mut cells = Vec::new();
    for &seed in seeds {
        let at_max = |family: &str| *mean_ap_by_n(&run.summary, family, seed).last().map(|(_, ap)| ap).unwrap();
        let (e, p, m) = (at_max("edpm"), at_max("epm"), at_max("mixture"));
        ordered += usize::from(e >= p && p >= m);
        cells.push(format!("{e:.2}/{p:.2}/{m:.2}"));
    }
    outcome(
        ordered >= ORDERING_MIN_SEEDS,
        format!(
            "EDPM >= EPM >= mixtures at largest N in {ordered}/{} seeds (need {ORDERING_MIN_SEEDS}) [{}]",
            seeds.len(),
            cells.join(" ")
        ),
    )
}

fn criterion_10() -> Outcome {
    let t = Instant::now();
    let seeds: Vec<u64> = (0..20).collect();
    let rs = regularization_study(&RegularizationConfig::default(), &seeds).unwrap();
    let decreased = rs.iter().filter(|r| r.ap_b_fixed < r.ap_a).count();
    let recovered = rs.iter().filter(|r| r.ap_b_cv >= r.ap_a).count();
    let mean = |f: fn(&partmix::harness::RegularizationResult) -> f64| rs.iter().map(f).sum::<f64>() / rs.len() as f64;
    outcome(
        decreased * 2 > rs.len() && recovered * 2 > rs.len(),
        format!(
            "fixed C lowers AP in {decreased}/{n}, cross-validated C keeps AP >= single-copy AP in {recovered}/{n} (majority needed for both); mean AP single {:.3}, doubled fixed {:.3}, doubled CV {:.3}; {:.0}s",
            mean(|r| r.ap_a),
            mean(|r| r.ap_b_fixed),
            mean(|r| r.ap_b_cv),
            t.elapsed().as_secs_f64(),
            n = rs.len(),
        ),
    )
}

fn main() -> ExitCode {
    let only: Option<Vec<usize>> =
        std::env::var("ACCEPTANCE_ONLY").ok().map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let wanted = |i: usize| only.as_ref().map_or(true, |o| o.contains(&i));
    let mut out = std::io::stdout().lock();
    let mut failed = 0;
    let mut report = |i: usize, o: Outcome| {
        failed += usize::from(!o.pass);
        writeln!(out, "criterion {i:>2}: {} - {}", if o.pass { "PASS" } else { "FAIL" }, o.detail).unwrap();
    };
    let quick: [(usize, fn() -> Outcome); 7] = [
        (1, criterion_1),
        (2, criterion_2),
        (3, criterion_3),
        (4, criterion_4),
        (5, criterion_5),
        (6, criterion_6),
        (7, criterion_7),
    ];
    for (i, f) in quick {
        if wanted(i) {
            report(i, f());
        }
    }
    if wanted(8) || wanted(9) {
        let config = scaling_config();
        let t = Instant::now();
        let run = run_experiment(&config, &Registry::default(), None, false).unwrap();
        let seconds = t.elapsed().as_secs_f64();
        assert!(run.complete(), "scaling run left cells unfinished");
        if wanted(8) {
            report(8, criterion_8(&run, &config.seeds, seconds));
        }
        if wanted(9) {
            report(9, criterion_9(&run, &config.seeds));
        }
    }
    if wanted(10) {
        report(10, criterion_10());
    }
    drop(report);
    if failed > 0 {
        writeln!(std::io::stdout(), "{failed} acceptance criteria failed").unwrap();
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
