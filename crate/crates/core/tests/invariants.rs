use lcmcr::fit::{fit, FitConfig};
use lcmcr::model::{full_distribution, ModelSpec};
use lcmcr::popsize::estimate_standard;
use lcmcr::sim::{preset_scenario1, simulate};
use lcmcr::{CaptureCounts, Fit, FitF32};
use proptest::prelude::*;

fn quick(seed: u64) -> FitConfig {
    FitConfig {
        num_starts: 3,
        ..FitConfig::with_seed(seed)
    }
}

fn check_fit(spec: &ModelSpec, fitted: &Fit) -> std::result::Result<(), TestCaseError> {
    for start in &fitted.starts {
        prop_assert!(start.max_decrease <= 1e-9, "start {} dropped {}", start.start_index, start.max_decrease);
    }
    for pair in fitted.loglik_trace.windows(2) {
        prop_assert!(pair[1] >= pair[0] - 1e-9);
    }
    let total: f64 = full_distribution(spec, &fitted.params).unwrap().values().sum();
    prop_assert!((total - 1.0).abs() < 1e-12);
    for row in fitted.posteriors.values() {
        let s: f64 = row.iter().sum();
        prop_assert!((s - 1.0).abs() < 1e-12);
    }
    Ok(())
}

fn arb_counts(k: usize) -> impl Strategy<Value = CaptureCounts> {
    prop::collection::vec(0u64..400, (1 << k) - 1).prop_filter_map("need captures", move |cells| {
        let mut dense = vec![0];
        dense.extend(cells);
        let counts = CaptureCounts::from_dense(k, dense).ok()?;
        (counts.n() > 0).then_some(counts)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn em_traces_never_decrease(counts in arb_counts(4), classes in 1usize..=2, seed in 0u64..1000) {
        let spec = ModelSpec::independence(["A", "B", "C", "D"], classes);
        let fitted = fit::<f64>(&spec, &counts, &quick(seed)).unwrap();
        check_fit(&spec, &fitted)?;
    }

    #[test]
    fn shared_term_traces_never_decrease(counts in arb_counts(4), seed in 0u64..1000) {
        let spec = ModelSpec::parse_notation("[AX][BX][CX][DX][CD]", 2).unwrap();
        let fitted = fit::<f64>(&spec, &counts, &quick(seed)).unwrap();
        check_fit(&spec, &fitted)?;
    }

    #[test]
    fn class_specific_traces_never_decrease(counts in arb_counts(4), seed in 0u64..1000) {
        let spec = ModelSpec::parse_notation("[AX][BX][CDX]", 2).unwrap();
        let fitted = fit::<f64>(&spec, &counts, &quick(seed)).unwrap();
        check_fit(&spec, &fitted)?;
    }

    #[test]
    fn single_class_total_is_scale_equivariant(counts in arb_counts(3), factor in 2u64..10) {
        let spec = ModelSpec::independence(["A", "B", "C"], 1);
        let a = fit::<f64>(&spec, &counts, &quick(1)).unwrap();
        let scaled = counts.scaled(factor);
        let b = fit::<f64>(&spec, &scaled, &quick(1)).unwrap();
        let ta = estimate_standard(&spec, &a.params, &counts);
        let tb = estimate_standard(&spec, &b.params, &scaled);
        if let (Ok(ta), Ok(tb)) = (ta, tb) {
            let expected = ta.total_all_classes * factor as f64;
            prop_assert!((tb.total_all_classes - expected).abs() <= 1e-5 * expected.max(1.0),
                "{} vs {}", tb.total_all_classes, expected);
        }
    }
}

#[test]
fn f32_and_f64_fits_agree_on_scenario1() {
    let config = preset_scenario1(100_000, 21, None);
    let sim = simulate(&config).unwrap();
    let a = fit::<f64>(&config.spec, &sim.observed_counts, &quick(21)).unwrap();
    let b: FitF32 = fit::<f32>(&config.spec, &sim.observed_counts, &quick(21)).unwrap();
    for (ra, rb) in a.params.inclusion_probs.iter().zip(&b.params.inclusion_probs) {
        for (pa, pb) in ra.iter().zip(rb) {
            assert!((pa - *pb as f64).abs() < 1e-2, "{pa} vs {pb}");
        }
    }
    let ta = estimate_standard(&config.spec, &a.params, &sim.observed_counts).unwrap();
    let tb = estimate_standard(&config.spec, &b.params, &sim.observed_counts).unwrap();
    assert!((ta.total_all_classes - tb.total_all_classes as f64).abs() / ta.total_all_classes < 5e-3);
}

#[test]
fn counts_csv_round_trip() {
    let sim = simulate(&preset_scenario1(10_000, 4, None)).unwrap();
    let mut buf = Vec::new();
    sim.observed_counts.write_csv(&mut buf).unwrap();
    let back = CaptureCounts::read_csv(buf.as_slice(), Some(4)).unwrap();
    assert_eq!(back, sim.observed_counts);
}

#[test]
fn sparse_tables_keep_the_trace_monotone() {
    // empty cells push shared-term fits to the boundary: capture
    // probabilities ~1e-11, a class with a single populated block cell, and
    // IPF that converges only sublinearly
    let cases: [(&[u64], u64, f64); 3] = [
        (&[0, 131, 340, 0, 0, 0, 0, 0, 61, 223, 56, 383, 291, 174, 30, 2], 807, -3650.0),
        (&[0, 243, 249, 56, 168, 0, 0, 325, 166, 218, 126, 35, 0, 174, 30, 2], 807, -4315.0),
        (&[0, 96, 124, 167, 303, 158, 4, 286, 274, 252, 118, 269, 83, 0, 0, 232], 11, 0.0),
    ];
    let spec = ModelSpec::parse_notation("[AX][BX][CX][DX][CD]", 2).unwrap();
    for (cells, seed, ceiling) in cases {
        let counts = CaptureCounts::from_dense(4, cells.to_vec()).unwrap();
        let fitted = fit::<f64>(&spec, &counts, &quick(seed)).unwrap();
        assert!(fitted.cond_loglik < ceiling, "{}", fitted.cond_loglik);
        for start in &fitted.starts {
            assert!(start.max_decrease <= 1e-9, "start {} dropped {}", start.start_index, start.max_decrease);
        }
    }
}
