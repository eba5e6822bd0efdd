use iwgae::ci::{BinInterval, IwIntervals};
use iwgae::diagnostics::spearman;
use iwgae::estimate::ece;
use iwgae::optimizer::solve_group;
use iwgae::pipeline::{run, run_prepared, Prepared};
use iwgae::synth::{binned_true_iw, generate, SyntheticSpec};
use iwgae::GaeConfig;

fn unit_intervals(b: usize) -> IwIntervals {
    IwIntervals {
        bins: (0..b)
            .map(|_| BinInterval {
                lower: 1.0,
                upper: 1.0,
                n_source: 0,
                n_target: 0,
                fallback: false,
            })
            .collect(),
        delta_bar: 0.05,
        smoothness: 0.001,
    }
}

#[test]
fn no_shift_returns_source_group_accuracy() {
    let mut spec = SyntheticSpec::gaussian_shift(1500, 3);
    spec.mu_target = spec.mu_source.clone();
    let data = generate(&spec).unwrap();
    let both = &data.source;
    let cfg = GaeConfig::default();
    let prepared = Prepared::new(both, both, &cfg).unwrap();
    let b = prepared.partition.num_bins();
    let prepared = prepared.with_intervals(unit_intervals(b)).unwrap();
    let run = run_prepared(both, both, prepared, &cfg).unwrap();
    assert_eq!(run.temperature(), 1.0);

    // Source accuracy per confidence group, computed directly.
    let correct = both.correctness().unwrap();
    let mut hits = vec![(0usize, 0usize); cfg.groups];
    for (r, ok) in both.records().iter().zip(&correct) {
        let c = r.confidence(1.0);
        let g = ((c * cfg.groups as f64).floor() as usize).min(cfg.groups - 1);
        hits[g].0 += usize::from(*ok);
        hits[g].1 += 1;
    }
    let conf = run.calibrate(both).unwrap();
    for ((r, c), g) in both.records().iter().zip(&conf).zip(run.target_groups()) {
        let (k, n) = hits[*g];
        if n >= cfg.min_group_size {
            let expected = k as f64 / n as f64;
            assert!((c.confidence - expected).abs() <= 1e-9, "{}: {} vs {expected}", r.sample_id, c.confidence);
        }
    }
    let ours = ece("iw-gae", &conf.iter().map(|c| c.confidence).collect::<Vec<_>>(), &correct, cfg.ece_bins).unwrap();
    let vanilla = ece("vanilla", &both.confidences(1.0), &correct, cfg.ece_bins).unwrap();
    assert!(ours.ece <= vanilla.ece + 1e-6);
}

#[test]
fn scores_rank_like_the_true_weights() {
    for seed in 0..3 {
        let data = generate(&SyntheticSpec::gaussian_shift(2000, seed)).unwrap();
        let prepared = Prepared::new(&data.source, &data.target, &GaeConfig::default()).unwrap();
        let scores: Vec<f64> = prepared.scores.source.iter().chain(&prepared.scores.target).copied().collect();
        let truth: Vec<f64> = data.source_truth.iter().chain(&data.target_truth).map(|t| t.true_iw).collect();
        let rho = spearman(&scores, &truth).unwrap();
        assert!(rho > 0.9, "seed {seed}: {rho}");
    }
}

#[test]
fn calibrated_confidences_cover_the_target() {
    let data = generate(&SyntheticSpec::gaussian_shift(1000, 8)).unwrap();
    let cfg = GaeConfig::default();
    let run = run(&data.source, &data.target, &cfg).unwrap();
    let conf = run.calibrate(&data.target).unwrap();
    assert_eq!(conf.len(), data.target.len());
    assert!(conf.iter().all(|c| (0.0..=1.0).contains(&c.confidence)));
    let solved = run.search.solutions();
    let grouped = run.target_groups().iter().filter(|g| solved.contains_key(g)).count();
    let fallback = conf.iter().filter(|c| c.fallback).count();
    assert_eq!(grouped + fallback, data.target.len());
}

#[test]
fn singleton_grid_is_a_plain_solve() {
    let data = generate(&SyntheticSpec::gaussian_shift(1000, 5)).unwrap();
    let cfg = GaeConfig {
        temp_grid: vec![1.0],
        ..GaeConfig::default()
    };
    let run = run(&data.source, &data.target, &cfg).unwrap();
    assert_eq!(run.temperature(), 1.0);
    for outcome in &run.search.best_result().outcomes {
        if let Some(sol) = outcome.solution() {
            assert_eq!(sol, &solve_group(outcome.counts(), &run.prepared.intervals, &cfg, 1.0).unwrap());
        }
    }
}

#[test]
fn duplicate_temperatures_change_nothing() {
    let data = generate(&SyntheticSpec::gaussian_shift(1000, 6)).unwrap();
    let plain = GaeConfig {
        temp_grid: vec![0.9, 1.0, 1.1],
        ..GaeConfig::default()
    };
    let dup = GaeConfig {
        temp_grid: vec![1.1, 0.9, 1.0, 1.0, 0.9],
        ..GaeConfig::default()
    };
    let a = run(&data.source, &data.target, &plain).unwrap();
    let b = run(&data.source, &data.target, &dup).unwrap();
    assert_eq!(a.temperature(), b.temperature());
    assert_eq!(a.search.best_result(), b.search.best_result());
}

#[test]
fn planted_temperature_is_recovered() {
    let cfg = GaeConfig {
        temp_grid: vec![0.9, 1.0, 1.1],
        ..GaeConfig::default()
    };
    let picked: Vec<f64> = (0..10)
        .map(|seed| {
            let mut spec = SyntheticSpec::gaussian_shift(2000, seed);
            spec.target_logit_scale = 0.9;
            let data = generate(&spec).unwrap();
            run(&data.source, &data.target, &cfg).unwrap().temperature()
        })
        .collect();
    let hits = picked.iter().filter(|t| **t == 0.9).count();
    assert!(hits > picked.len() / 2, "selected temperatures {picked:?}");
}

#[test]
fn intervals_and_solutions_tighten_with_more_data() {
    let cfg = GaeConfig::default();
    let seeds = 0..4u64;
    let mut widths = Vec::new();
    let mut errors = Vec::new();
    for n in [1_000, 10_000, 100_000] {
        let (mut w_sum, mut e_sum) = (0.0, 0.0);
        for seed in seeds.clone() {
            let spec = SyntheticSpec::gaussian_shift(n, seed);
            let data = generate(&spec).unwrap();
            let run = run(&data.source, &data.target, &cfg).unwrap();
            let iv = &run.prepared.intervals;
            w_sum += iv.bins.iter().map(BinInterval::width).sum::<f64>() / iv.len() as f64;
            let truth = binned_true_iw(&spec, run.prepared.scores.classifier.as_ref().unwrap(), &run.prepared.partition).unwrap();
            let (mut err, mut count) = (0.0, 0usize);
            for sol in run.search.solutions().values() {
                for (i, w) in truth.iter().enumerate() {
                    err += (sol.w_source[i] - w).abs() + (sol.w_target[i] - w).abs();
                    count += 2;
                }
            }
            e_sum += err / count as f64;
        }
        widths.push(w_sum);
        errors.push(e_sum);
    }
    assert!(widths.windows(2).all(|w| w[1] < w[0]), "widths {widths:?}");
    assert!(errors.windows(2).all(|w| w[1] < w[0]), "errors {errors:?}");
}
