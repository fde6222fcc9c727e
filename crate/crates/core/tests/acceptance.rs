//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails.

mod common;

use std::collections::BTreeSet;
use std::time::Instant;

use ndarray::{Array1, Array2};
use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use spatialgan::analytics::*;
use spatialgan::ingest::{Frame, PointSet};
use spatialgan::metrics::*;
use spatialgan::model::*;
use spatialgan::nn::{TensorKind, Tensors};
use spatialgan::optim::LrSchedule;
use spatialgan::pipeline::{Preset, STANDARD_EPSILONS};
use spatialgan::privacy::*;
use spatialgan::rng::Seeds;
use spatialgan::training::*;

use common::{eps, fd_relative_error, perturbed_state, rng, to_f32};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn privacy_closed_forms() -> Outcome {
    let mut worst: f64 = 0.0;
    for e in STANDARD_EPSILONS {
        let q = flip_probability(eps(e)).map_err(|e| e.to_string())?;
        worst = worst.max((q - 1.0 / (e.exp() + 1.0)).abs());
    }
    let q1 = flip_probability(eps(1.0)).unwrap();
    check(
        worst < 1e-12 && (q1 - 0.2689).abs() < 5e-5,
        format!("max |q - 1/(e^ε+1)| = {worst:.1e}, q(1) = {q1:.4}"),
    )
}

fn empirical_ldp() -> Outcome {
    let mut parts = vec![];
    let mut ok = true;
    for e in [0.1, 1.0, 2.0] {
        let q = flip_probability(eps(e)).unwrap();
        let ratio = empirical_ldp_ratio(q, 1_000_000, &mut rng(e.to_bits())).map_err(|e| e.to_string())?;
        let rel = (ratio / e.exp() - 1.0).abs();
        ok &= rel < 0.05;
        parts.push(format!("ε={e}: {ratio:.4} vs {:.4}", e.exp()));
    }
    check(ok, parts.join(", "))
}

fn flip_persistence() -> Outcome {
    let data = common::privatized(&common::two_gaussians(1_000, 21), eps(1.0), 22);
    let before = data.labels().to_vec();
    let mut cfg = TrainConfig::desk();
    cfg.steps_per_epoch = 100;
    cfg.epochs = 1;
    let (_, log) = train::<f32>(&data, ArchitectureConfig::desk(2), cfg, Seeds::from_master(23), &mut |_, _| Ok(()))
        .map_err(|e| e.to_string())?;
    check(
        log.steps.len() == 100 && log.label_digest_before == log.label_digest_after && data.labels() == &before[..],
        format!("100 steps of 256 from 1000 points, digest {}", &log.label_digest_after[..12]),
    )
}

fn brute_emd(r: &PointSet, s: &PointSet) -> f64 {
    let n = r.len();
    let mut perm: Vec<usize> = (0..n).collect();
    let mut best = f64::INFINITY;
    // Heap's algorithm
    let mut c = vec![0; n];
    let cost = |p: &[usize]| -> f64 { (0..n).map(|i| squared_distance(r.point(i), s.point(p[i])).sqrt()).sum() };
    best = best.min(cost(&perm));
    let mut i = 0;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(c[i], i);
            }
            best = best.min(cost(&perm));
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    best
}

fn random_set(r: &mut ChaCha20Rng, n: usize, dim: usize) -> PointSet {
    PointSet::new(dim, (0..n * dim).map(|_| r.gen_range(-1.0..1.0)).collect(), Frame::Normalized).unwrap()
}

fn emd_exactness() -> Outcome {
    let mut r = rng(404);
    let mut mismatches = 0;
    for k in 0..200 {
        let n = r.gen_range(1..=7);
        let dim = 2 + k % 2;
        let a = random_set(&mut r, n, dim);
        let b = random_set(&mut r, n, dim);
        if emd_exact(&a, &b).map_err(|e| e.to_string())?.to_bits() != brute_emd(&a, &b).to_bits() {
            mismatches += 1;
        }
    }
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let (n, k) = (r.gen_range(1..=100), r.gen_range(1..=100));
        let a = random_set(&mut r, n, 2);
        let b = random_set(&mut r, k, 2);
        let fast = chamfer_distance(&a, &b).unwrap();
        let slow = chamfer_distance_brute(&a, &b).unwrap();
        worst = worst.max((fast - slow).abs());
    }
    check(
        mismatches == 0 && worst <= 1e-9,
        format!("{mismatches}/200 EMD mismatches, max Chamfer deviation {worst:.1e}"),
    )
}

fn network_contracts() -> Outcome {
    let state = ModelState::<f32>::init(ArchitectureConfig::desk(2), &mut rng(1)).map_err(|e| e.to_string())?;
    for b in [1, 3, 256] {
        let z = sample_noise(b, 2, NoisePrior::Uniform, &mut rng(b as u64)).unwrap();
        let out = generator_forward(&state, &z).map_err(|e| e.to_string())?;
        if out.len() != b || out.dim() != 2 || !out.coords().iter().all(|v| (-1.0..=1.0).contains(v)) {
            return Err(format!("generator contract broken at B = {b}"));
        }
        let scores = discriminator_forward(&state, &z).unwrap();
        if scores.len() != b || !scores.iter().all(|&s| s > 0.0 && s < 1.0) {
            return Err(format!("discriminator contract broken at B = {b}"));
        }
    }
    let x = random_set(&mut rng(2), 64, 2);
    let perm = sample(&mut rng(3), 64, 64).into_vec();
    let g = generator_forward(&state, &x).unwrap();
    let gp = generator_forward(&state, &x.select(&perm)).unwrap();
    let d = discriminator_forward(&state, &x).unwrap();
    let dp = discriminator_forward(&state, &x.select(&perm)).unwrap();
    let equivariant = gp.coords() == g.select(&perm).coords() && perm.iter().zip(&dp).all(|(&i, &s)| d[i] == s);

    let s64 = perturbed_state(2, 5);
    let s32 = to_f32(&s64);
    let x64: Array2<f64> = to_matrix(&random_set(&mut rng(6), 10, 2));
    let t64: Array1<f64> = (0..10).map(|i| (i % 2) as f64).collect();
    let params = s64.discriminator.flatten(TensorKind::Param);
    let (_, gd, _) = discriminator_objective(&s32.discriminator, &x64.mapv(|v| v as f32), &t64.mapv(|v| v as f32));
    let gd: Vec<f64> = gd.flatten(TensorKind::Param).iter().map(|&v| v as f64).collect();
    let d_err = fd_relative_error(&params, &gd, 150, 7, &|p: &[f64]| {
        let mut d = s64.discriminator.clone();
        d.unflatten(TensorKind::Param, p);
        discriminator_objective(&d, &x64, &t64).0
    });

    let z64: Array2<f64> = to_matrix(&random_set(&mut rng(8), 5, 2));
    let real64: Array2<f64> = to_matrix(&random_set(&mut rng(9), 5, 2));
    let tg: Array1<f64> = Array1::from_elem(5, 1.0);
    let params = s64.generator.flatten(TensorKind::Param);
    let (_, gg, _) = generator_objective(
        &s32.generator,
        &s32.discriminator,
        &real64.mapv(|v| v as f32),
        &z64.mapv(|v| v as f32),
        &tg.mapv(|v| v as f32),
    );
    let gg: Vec<f64> = gg.flatten(TensorKind::Param).iter().map(|&v| v as f64).collect();
    let g_err = fd_relative_error(&params, &gg, 150, 10, &|p: &[f64]| {
        let mut g = s64.generator.clone();
        g.unflatten(TensorKind::Param, p);
        generator_objective(&g, &s64.discriminator, &real64, &z64, &tg).0
    });
    check(
        equivariant && d_err < 1e-3 && g_err < 1e-3,
        format!("shapes ok for B in {{1,3,256}}, equivariant = {equivariant}, f32 FD relative error D {d_err:.1e} G {g_err:.1e}"),
    )
}

fn loss_anchors() -> Outcome {
    let data = common::privatized(&common::two_gaussians(200, 31), PrivacyBudget::Infinite, 32);
    let mut cfg = TrainConfig::desk();
    cfg.batch_size = 32;
    let mut t = Trainer::<f64>::new(&data, ArchitectureConfig::tiny(2), cfg, Seeds::from_master(33)).map_err(|e| e.to_string())?;
    let last = t.state_mut().discriminator.head.last_mut().unwrap();
    last.dense.weight.fill(0.0);
    last.dense.bias.fill(0.0);
    let d = t.discriminator_step(0.0).map_err(|e| e.to_string())?;
    let g = t.generator_step(0.0).map_err(|e| e.to_string())?;
    let ln2 = std::f64::consts::LN_2;
    check(
        t.flip_probability() == 0.0 && (d - ln2).abs() < 1e-9 && (g - ln2).abs() < 1e-9,
        format!("D {:.1e}, G {:.1e} from ln 2", (d - ln2).abs(), (g - ln2).abs()),
    )
}

struct DeskRuns {
    uniform_cd: f64,
    infinite_cd: f64,
    one_cd: f64,
    one_digest_kept: bool,
}

fn desk_eval() -> EvalConfig {
    Preset::Desk.evaluation()
}

fn desk_run(budget: PrivacyBudget, train_ps: &PointSet, holdout: &PointSet) -> Result<(f64, bool), String> {
    let data = common::privatized(train_ps, budget, 1);
    let cfg = TrainConfig::desk();
    let (state, log) = train::<f32>(&data, ArchitectureConfig::desk(2), cfg.clone(), Seeds::from_master(42), &mut |_, _| Ok(()))
        .map_err(|e| e.to_string())?;
    let report = evaluate_generator(&state, holdout, &desk_eval(), cfg.batch_size, 3).map_err(|e| e.to_string())?;
    Ok((report.cd_summary.mean, log.label_digest_before == log.label_digest_after))
}

fn desk_runs() -> Result<DeskRuns, String> {
    let all = common::two_gaussians(10_000, 7);
    let train_ps = all.select(&(0..8_000).collect::<Vec<_>>());
    let holdout = all.select(&(8_000..10_000).collect::<Vec<_>>());
    let cfg = desk_eval();
    let mut noise = rng(11);
    let baseline = evaluate_samples(&holdout, &cfg, &mut rng(12), &mut |_| Ok(uniform_sample(cfg.sample_size, 2, &mut noise)))
        .map_err(|e| e.to_string())?;
    let (infinite_cd, _) = desk_run(PrivacyBudget::Infinite, &train_ps, &holdout)?;
    let (one_cd, one_digest_kept) = desk_run(eps(1.0), &train_ps, &holdout)?;
    Ok(DeskRuns {
        uniform_cd: baseline.cd_summary.mean,
        infinite_cd,
        one_cd,
        one_digest_kept,
    })
}

fn analytics_oracles() -> Outcome {
    let mut r = rng(77);
    let planar = |r: &mut ChaCha20Rng, n: usize, ext: f64| {
        PointSet::new(2, (0..2 * n).map(|_| r.gen_range(0.0..ext)).collect(), Frame::Source).unwrap()
    };
    let pts = planar(&mut r, 1_000, 3_000.0);
    let places = planar(&mut r, 100, 3_000.0);
    let mut range_ok = true;
    for radius in RANGE_RADII_M {
        let got = range_counts(&pts, &places, radius).map_err(|e| e.to_string())?;
        for (c, &n) in places.points().zip(&got) {
            range_ok &= n == pts.points().filter(|p| squared_distance(p, c).sqrt() <= radius).count();
        }
    }

    let a: BTreeSet<char> = "abc".chars().collect();
    let b: BTreeSet<char> = "bcd".chars().collect();
    let sdc_ok = sorensen_dice(&a, &b) == 2.0 / 3.0;

    let kde_pts = random_set(&mut r, 500, 2);
    let g = 64;
    let (hx, hy) = Bandwidth::Scott.resolve(&kde_pts);
    let grid = kde_grid(&kde_pts, g, (hx, hy)).map_err(|e| e.to_string())?;
    let mut kde_dev: f64 = 0.0;
    for j in 0..g {
        for i in 0..g {
            let (cx, cy) = (cell_center(i, g), cell_center(j, g));
            let sum: f64 = kde_pts
                .points()
                .map(|p| {
                    let (u, v) = ((cx - p[0]) / hx, (cy - p[1]) / hy);
                    (-(u * u + v * v) / 2.0).exp() / (std::f64::consts::TAU * hx * hy)
                })
                .sum();
            kde_dev = kde_dev.max((grid[j * g + i] - sum / kde_pts.len() as f64).abs());
        }
    }

    let bound = 1.0 - (-1.0f64).exp();
    let mut worst_ratio = f64::INFINITY;
    for _ in 0..100 {
        let nc = r.gen_range(20..80);
        let customers = planar(&mut r, nc, 1_000.0);
        let p = r.gen_range(3..=10);
        let cands = planar(&mut r, p, 1_000.0);
        let k = r.gen_range(1..=3usize.min(p));
        let greedy = facility_select(&customers, &cands, k, FacilityVariant::MaxInf, MAX_INF_RADIUS_M)
            .map_err(|e| e.to_string())?;
        let covered = |set: &[usize]| {
            customers
                .points()
                .filter(|c| set.iter().any(|&j| squared_distance(c, cands.point(j)).sqrt() <= MAX_INF_RADIUS_M))
                .count()
        };
        let mut opt = 0;
        for mask in 0u32..(1 << p) {
            if mask.count_ones() as usize == k {
                let set: Vec<usize> = (0..p).filter(|&j| mask & (1 << j) != 0).collect();
                opt = opt.max(covered(&set));
            }
        }
        if opt > 0 {
            worst_ratio = worst_ratio.min(greedy.objective / opt as f64);
        }
    }
    check(
        range_ok && sdc_ok && kde_dev <= 1e-9 && worst_ratio >= bound,
        format!(
            "range scan {range_ok}, SDC {sdc_ok}, KDE max deviation {kde_dev:.1e}, worst greedy/OPT {worst_ratio:.3} (bound {bound:.3})"
        ),
    )
}

fn protocol_defaults() -> Outcome {
    let e = EvalConfig::default();
    let s = LrSchedule::full_scale();
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-12 * b;
    let ok = (e.samples, e.sample_size) == (60, 7_500)
        && Preset::Paper.evaluation() == e
        && RANGE_RADII_M == [50.0, 100.0, 200.0, 500.0, 1000.0]
        && HOTSPOT_GRANULARITIES == [64, 128, 256, 512, 1024]
        && FACILITY_KS == [1, 5, 10, 20, 50, 75]
        && FACILITY_CANDIDATES == 100
        && close(s.rate(5_001), 4e-6)
        && close(s.rate(50_001), 4e-7)
        && close(s.rate(90_001), 4e-8)
        && TrainConfig::full_scale().schedule == s
        && STANDARD_EPSILONS == [0.1, 0.25, 0.5, 1.0, 2.0, 5.0, 10.0];
    check(
        ok,
        format!(
            "{}×{} samples, lr at 5001/50001/90001 = {:.0e}/{:.0e}/{:.0e}",
            e.samples,
            e.sample_size,
            s.rate(5_001),
            s.rate(50_001),
            s.rate(90_001)
        ),
    )
}

fn report(failures: &mut usize, id: usize, name: &str, start: Instant, outcome: Outcome) {
    let secs = start.elapsed().as_secs_f64();
    match outcome {
        Ok(d) => println!("PASS [{id:>2}] {name}: {d} ({secs:.1} s)"),
        Err(d) => {
            *failures += 1;
            println!("FAIL [{id:>2}] {name}: {d} ({secs:.1} s)");
        }
    }
}

fn main() {
    // `cargo test -- <filter>` passes arguments; a filter that does not name
    // this suite skips it
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    if !filters.is_empty() && !filters.iter().any(|f| "acceptance".contains(f.as_str())) {
        return;
    }
    let mut failures = 0;
    let f = &mut failures;

    let t = Instant::now();
    report(f, 1, "privacy closed forms", t, privacy_closed_forms());
    let t = Instant::now();
    report(f, 2, "empirical label-LDP ratio", t, empirical_ldp());
    let t = Instant::now();
    report(f, 3, "flip persistence", t, flip_persistence());
    let t = Instant::now();
    report(f, 4, "EMD and Chamfer exactness", t, emd_exactness());
    let t = Instant::now();
    report(f, 5, "network contracts", t, network_contracts());
    let t = Instant::now();
    report(f, 6, "trivial-loss anchors", t, loss_anchors());

    let t = Instant::now();
    let runs = desk_runs();
    let elapsed = t.elapsed().as_secs_f64();
    match runs {
        Ok(r) => {
            let ratio = r.infinite_cd / r.uniform_cd;
            let detail = format!(
                "CD(ε=∞) {:.3} vs CD(uniform) {:.3}, ratio {ratio:.3} (< 0.5)",
                r.infinite_cd, r.uniform_cd
            );
            report(f, 7, "desk-scale training sanity", t, check(ratio < 0.5, detail));
            let ratio = r.one_cd / r.infinite_cd;
            let detail = format!(
                "CD(ε=1) {:.3} vs CD(ε=∞) {:.3}, ratio {ratio:.3} (≤ 2), labels unchanged {}",
                r.one_cd, r.infinite_cd, r.one_digest_kept
            );
            report(f, 8, "privatized-training robustness", Instant::now(), check(ratio <= 2.0 && r.one_digest_kept, detail));
            println!("      desk runs took {elapsed:.1} s");
        }
        Err(e) => {
            report(f, 7, "desk-scale training sanity", t, Err(e.clone()));
            report(f, 8, "privatized-training robustness", t, Err(e));
        }
    }

    let t = Instant::now();
    report(f, 9, "analytics oracles", t, analytics_oracles());
    let t = Instant::now();
    report(f, 10, "protocol defaults", t, protocol_defaults());

    println!("acceptance: {} passed, {failures} failed", 10 - failures);
    if failures > 0 {
        std::process::exit(1);
    }
}
