mod common;

use std::collections::BTreeMap;

use common::enumerate_exact_p;
use ophtha_bench::stats::{
    bonferroni, bootstrap, compare_models, exact_p, normal_p, percentile, ranksum_test, sample_sd,
    write_comparison_csv, BootstrapConfig, ComparisonRow, Marker, StatsError,
};
use proptest::prelude::*;
use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};

/// Distinct values so the exact path applies.
fn distinct_samples(rng: &mut StdRng, n: usize, m: usize) -> (Vec<f64>, Vec<f64>) {
    let mut pool: Vec<f64> = (0..n + m).map(|i| i as f64 * 0.37 + rng.gen_range(0.0..0.3)).collect();
    pool.shuffle(rng);
    (pool[..n].to_vec(), pool[n..].to_vec())
}

#[test]
fn defaults() {
    let d = BootstrapConfig::default();
    assert_eq!((d.sample_size, d.repetitions, d.ci_level), (30, 100, 0.95));
}

#[test]
fn constant_scores_give_degenerate_summary() {
    let s = bootstrap(&[0.5; 17], &BootstrapConfig::with_seed(3)).unwrap();
    assert_eq!((s.mean, s.sd, s.ci_low, s.ci_high), (0.5, 0.0, 0.5, 0.5));
    assert_eq!(s.replicate_means.len(), 100);
    for v in [0.42, 0.1, 1.0 / 3.0] {
        let s = bootstrap(&[v; 25], &BootstrapConfig::with_seed(7)).unwrap();
        assert_eq!((s.mean, s.sd, s.ci_low, s.ci_high), (v, 0.0, v, v));
    }
    assert!(matches!(bootstrap(&[], &BootstrapConfig::default()), Err(StatsError::EmptyScores)));
}

#[test]
fn fixed_seed_is_bitwise_deterministic() {
    let scores: Vec<f64> = (0..57).map(|i| ((i * 31) % 17) as f64 / 17.0).collect();
    let a = bootstrap(&scores, &BootstrapConfig::with_seed(99)).unwrap();
    let b = bootstrap(&scores, &BootstrapConfig::with_seed(99)).unwrap();
    let bits = |s: &[f64]| s.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a.replicate_means), bits(&b.replicate_means));
    let c = bootstrap(&scores, &BootstrapConfig::with_seed(100)).unwrap();
    assert_ne!(bits(&a.replicate_means), bits(&c.replicate_means));
}

#[test]
fn summary_matches_its_definition() {
    let scores: Vec<f64> = (0..40).map(|i| (i as f64).sin().abs()).collect();
    let s = bootstrap(&scores, &BootstrapConfig::with_seed(5)).unwrap();
    let mean = s.replicate_means.iter().sum::<f64>() / 100.0;
    assert!((s.mean - mean).abs() < 1e-12);
    let var = s.replicate_means.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 99.0;
    assert!((s.sd - var.sqrt()).abs() < 1e-12);
    let mut sorted = s.replicate_means.clone();
    sorted.sort_by(f64::total_cmp);
    // 2.5th and 97.5th percentiles of 100 values by linear interpolation
    let lo = sorted[2] + (sorted[3] - sorted[2]) * 0.475;
    let hi = sorted[96] + (sorted[97] - sorted[96]) * 0.525;
    assert!((s.ci_low - lo).abs() < 1e-12 && (s.ci_high - hi).abs() < 1e-12);
    assert!(s.ci_low <= s.mean && s.mean <= s.ci_high);
}

#[test]
fn bootstrap_mean_agrees_with_independent_resampler() {
    let mut data_rng = StdRng::seed_from_u64(2024);
    let scores: Vec<f64> = (0..200).map(|_| data_rng.gen::<f64>()).collect();
    let population_mean = scores.iter().sum::<f64>() / 200.0;
    let ours = bootstrap(&scores, &BootstrapConfig::with_seed(8)).unwrap();
    assert!((ours.mean - population_mean).abs() <= 3.0 * ours.sd);

    let mut oracle_rng = StdRng::seed_from_u64(77);
    let oracle_means: Vec<f64> = (0..100)
        .map(|_| (0..30).map(|_| scores[oracle_rng.gen_range(0..200)]).sum::<f64>() / 30.0)
        .collect();
    let oracle_mean = oracle_means.iter().sum::<f64>() / 100.0;
    let oracle_sd = sample_sd(&oracle_means);
    assert!((oracle_mean - population_mean).abs() <= 3.0 * oracle_sd);
    // both estimate the standard error of a 30-draw mean
    let se = sample_sd(&scores) / 30f64.sqrt();
    assert!((ours.sd / se - 1.0).abs() < 0.35, "{} vs {se}", ours.sd);
    assert!((oracle_sd / se - 1.0).abs() < 0.35);
}

#[test]
fn percentile_interpolates() {
    let v = [1.0, 2.0, 3.0, 4.0];
    assert_eq!(percentile(&v, 0.0), 1.0);
    assert_eq!(percentile(&v, 1.0), 4.0);
    assert!((percentile(&v, 0.5) - 2.5).abs() < 1e-12);
}

#[test]
fn ranksum_examples() {
    assert_eq!(ranksum_test(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(), 1.0);
    assert!((ranksum_test(&[1.0, 2.0], &[3.0, 4.0]).unwrap() - 1.0 / 3.0).abs() < 1e-12);
    assert!((enumerate_exact_p(&[1.0, 2.0], &[3.0, 4.0]) - 1.0 / 3.0).abs() < 1e-12);
    assert!(matches!(ranksum_test(&[], &[1.0]), Err(StatsError::EmptyInput)));
}

#[test]
fn exact_path_matches_enumeration_for_every_size() {
    let mut rng = StdRng::seed_from_u64(1);
    for n in 1..12 {
        for m in 1..=(12 - n) {
            for _ in 0..5 {
                let (a, b) = distinct_samples(&mut rng, n, m);
                let ours = ranksum_test(&a, &b).unwrap();
                let oracle = enumerate_exact_p(&a, &b);
                assert!((ours - oracle).abs() < 1e-12, "n={n} m={m}: {ours} vs {oracle}");
            }
        }
    }
}

fn worst_approximation_error(n: usize, m: usize) -> f64 {
    let total = n + m;
    let lo = n * (n + 1) / 2;
    let hi = (m + 1..=total).sum::<usize>();
    (lo..=hi)
        .map(|w| (normal_p(n, m, w as f64, &vec![1; total]) - exact_p(n, total, w)).abs())
        .fold(0.0, f64::max)
}

#[test]
fn normal_approximation_is_close_beyond_the_smallest_samples() {
    for n in 2..11 {
        for m in 2..=(12 - n) {
            if n + m <= 5 {
                continue;
            }
            let err = worst_approximation_error(n, m);
            assert!(err <= 0.05, "n={n} m={m}: {err}");
        }
    }
}

#[test]
fn normal_approximation_gap_is_confined_to_tiny_samples() {
    let mut over = Vec::new();
    for n in 1..12 {
        for m in 1..=(12 - n) {
            if worst_approximation_error(n, m) > 0.05 {
                over.push((n.min(m), n.max(m)));
            }
        }
    }
    over.sort();
    over.dedup();
    let expected: Vec<(usize, usize)> = (2..=11).map(|m| (1, m)).chain([(2, 2), (2, 3)]).collect();
    assert_eq!(over, expected);
}

#[test]
fn large_tied_samples_use_the_approximation() {
    let a: Vec<f64> = (0..30).map(|i| (i % 5) as f64).collect();
    let b: Vec<f64> = (0..30).map(|i| (i % 5) as f64 + 0.5).collect();
    let p = ranksum_test(&a, &b).unwrap();
    assert!((0.0..=1.0).contains(&p));
    assert_eq!(p, ranksum_test(&b, &a).unwrap());
}

proptest! {
    #[test]
    fn ranksum_symmetric_and_shift_invariant(
        a in prop::collection::vec(0i32..20, 1..15),
        b in prop::collection::vec(0i32..20, 1..15),
        shift in -50i32..50,
    ) {
        let a: Vec<f64> = a.into_iter().map(f64::from).collect();
        let b: Vec<f64> = b.into_iter().map(f64::from).collect();
        let p = ranksum_test(&a, &b).unwrap();
        prop_assert!((0.0..=1.0).contains(&p));
        prop_assert_eq!(p, ranksum_test(&b, &a).unwrap());
        let sa: Vec<f64> = a.iter().map(|x| x + f64::from(shift)).collect();
        let sb: Vec<f64> = b.iter().map(|x| x + f64::from(shift)).collect();
        prop_assert_eq!(p, ranksum_test(&sa, &sb).unwrap());
    }

    #[test]
    fn bonferroni_monotone_and_capped(p in 0.0f64..=1.0, q in 0.0f64..=1.0, m in 1usize..20) {
        let (lo, hi) = if p <= q { (p, q) } else { (q, p) };
        prop_assert!(bonferroni(lo, m) <= bonferroni(hi, m));
        prop_assert!(bonferroni(p, m) <= bonferroni(p, m + 1));
        prop_assert!(bonferroni(p, m) <= 1.0);
    }
}

#[test]
fn bonferroni_examples() {
    assert!((bonferroni(0.01, 8) - 0.08).abs() < 1e-15);
    assert_eq!(bonferroni(0.2, 8), 1.0);
    assert_eq!(bonferroni(0.0, 5), 0.0);
}

#[test]
fn marker_thresholds() {
    assert_eq!(Marker::from_adjusted(0.05), Marker::None);
    assert_eq!(Marker::from_adjusted(0.0499), Marker::Star);
    assert_eq!(Marker::from_adjusted(0.0001), Marker::Star);
    assert_eq!(Marker::from_adjusted(0.00009), Marker::Dagger);
}

fn models(scores: &[(&str, Vec<f64>)]) -> BTreeMap<String, Vec<f64>> {
    scores.iter().map(|(m, s)| (m.to_string(), s.clone())).collect()
}

#[test]
fn identical_models_are_not_different() {
    let s: Vec<f64> = (0..50).map(|i| (i % 7) as f64 / 7.0).collect();
    let cmp = compare_models(&models(&[("ref", s.clone()), ("other", s)]), "ref", &BootstrapConfig::with_seed(1), None)
        .unwrap();
    assert_eq!(cmp.comparisons[0].p_adjusted, 1.0);
    assert_eq!(cmp.comparisons[0].marker, Marker::None);
}

#[test]
fn dominant_reference_gets_dagger_among_nine_models() {
    let mut rng = StdRng::seed_from_u64(4);
    let mut table = vec![("leme".to_string(), (0..80).map(|_| rng.gen_range(0.7..0.9)).collect::<Vec<f64>>())];
    for k in 0..8 {
        table.push((format!("baseline-{k}"), (0..80).map(|_| rng.gen_range(0.1..0.3)).collect()));
    }
    let per_model: BTreeMap<String, Vec<f64>> = table.into_iter().collect();
    let cmp = compare_models(&per_model, "leme", &BootstrapConfig::with_seed(9), None).unwrap();
    assert_eq!(cmp.comparisons.len(), 8);
    let ref_means = &cmp.summaries["leme"].replicate_means;
    for c in &cmp.comparisons {
        assert_eq!(c.n_comparisons, 8);
        let other = &cmp.summaries[&c.model_b].replicate_means;
        let ref_min = ref_means.iter().cloned().fold(f64::INFINITY, f64::min);
        let other_max = other.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert!(ref_min > other_max, "replicate ranges overlap");
        // fully separated samples of 100 vs 100
        let oracle = normal_p(100, 100, (101..=200).sum::<usize>() as f64, &[1; 200]);
        assert!((c.p_raw - oracle).abs() < 1e-6);
        assert!(c.p_raw < 0.0001 / 8.0);
        assert_eq!(c.marker, Marker::Dagger);
    }
}

#[test]
fn paired_resampling_shares_rows() {
    let a: Vec<f64> = (0..30).map(|i| i as f64).collect();
    let b: Vec<f64> = a.iter().map(|x| x + 1.0).collect();
    let cmp = compare_models(&models(&[("a", a), ("b", b)]), "a", &BootstrapConfig::with_seed(2), None).unwrap();
    for (x, y) in cmp.summaries["a"].replicate_means.iter().zip(&cmp.summaries["b"].replicate_means) {
        assert!((y - x - 1.0).abs() < 1e-9);
    }
}

#[test]
fn compare_rejects_bad_inputs() {
    let cfg = BootstrapConfig::with_seed(1);
    assert!(matches!(
        compare_models(&models(&[("a", vec![1.0])]), "zzz", &cfg, None),
        Err(StatsError::MissingReference(_))
    ));
    assert!(matches!(
        compare_models(&models(&[("a", vec![1.0, 2.0]), ("b", vec![1.0])]), "a", &cfg, None),
        Err(StatsError::InstanceSetMismatch { .. })
    ));
}

#[test]
fn csv_export_columns() {
    let s: Vec<f64> = (0..20).map(|i| i as f64 / 20.0).collect();
    let cmp = compare_models(&models(&[("ref", s.clone()), ("b", s)]), "ref", &BootstrapConfig::with_seed(1), None).unwrap();
    let mut buf = Vec::new();
    write_comparison_csv(&mut buf, &ComparisonRow::rows("mcq", &cmp)).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "task,model,mean,sd,ci_low,ci_high,p_raw,p_adjusted,marker");
    let b = lines.next().unwrap();
    assert!(b.starts_with("mcq,b,") && b.ends_with(",1.000000,1.000000,"), "{b}");
    let r = lines.next().unwrap();
    assert!(r.starts_with("mcq,ref,") && r.ends_with(",,,"), "{r}");
}
