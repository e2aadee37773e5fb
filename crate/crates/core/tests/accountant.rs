mod common;

use dpsgd_lab::accountant::{
    compose, default_orders, epsilon_for, rdp_at_order, rdp_gaussian, rdp_subsampled_gaussian, to_epsilon,
    PrivacyLedger,
};
use common::oracle_rdp;
use proptest::prelude::*;

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}

const Q_MNIST: f64 = 256.0 / 60000.0;

/// Values of the same summation evaluated independently at 60 decimal digits.
#[allow(clippy::excessive_precision)]
const FROZEN: [(f64, u32, f64); 9] = [
    (0.8, 2, 0.000_068_641_746_827_344_670_305_9),
    (0.8, 8, 0.108_775_625_071_003_932_312_256),
    (0.8, 64, 44.456_459_787_454_298_147_000_29),
    (1.0, 2, 0.000_031_279_876_865_631_838_209_38),
    (1.0, 8, 0.000_135_193_379_549_763_210_952_9),
    (1.0, 32, 10.367_047_848_550_563_736_162_06),
    (1.4, 3, 0.000_018_238_907_748_439_229_890_86),
    (1.4, 32, 2.530_345_740_879_032_721_988_493),
    (1.4, 64, 10.782_990_399_701_798_831_076_87),
];

#[test]
fn oracle_agrees_with_frozen_values() {
    for (s, a, v) in FROZEN {
        assert!(rel(oracle_rdp(Q_MNIST, s, a), v) < 1e-14, "sigma {s} order {a}");
    }
}

#[test]
fn subsampled_rdp_matches_extended_precision_oracle() {
    for s in [0.8, 1.0, 1.4] {
        for a in 2..=64 {
            let got = rdp_subsampled_gaussian(Q_MNIST, s, a).unwrap();
            let want = oracle_rdp(Q_MNIST, s, a);
            assert!(rel(got, want) < 1e-9, "sigma {s} order {a}: {got} vs {want}");
        }
    }
}

#[test]
fn stable_across_domain() {
    for &s in &[0.3, 0.5, 1.0, 3.0, 10.0] {
        for &q in &[1e-5, 1e-3, 0.1, 0.5, 0.99, 1.0] {
            for a in 2..=64 {
                let v = rdp_subsampled_gaussian(q, s, a).unwrap();
                assert!(v.is_finite() && v >= 0.0, "q {q} sigma {s} order {a}: {v}");
            }
        }
    }
    // a sample of the extremes against the oracle
    for (q, s, a) in [(1e-5, 0.3, 64), (0.5, 0.3, 40), (1e-5, 10.0, 2), (0.99, 0.5, 17)] {
        let got = rdp_subsampled_gaussian(q, s, a).unwrap();
        assert!(rel(got, oracle_rdp(q, s, a)) < 1e-9, "q {q} sigma {s} order {a}");
    }
}

#[test]
fn reduces_to_gaussian_at_full_sampling() {
    for a in 2..=64u32 {
        for s in [0.3, 1.0, 7.5] {
            assert_eq!(
                rdp_subsampled_gaussian(1.0, s, a).unwrap(),
                rdp_gaussian(s, f64::from(a)).unwrap()
            );
        }
    }
}

#[test]
fn three_epoch_reference_epsilon() {
    // steps = 3 * 60000 / 256, rounded down
    let (eps, order) = epsilon_for(Q_MNIST, 1.0, 703, 1e-5).unwrap();
    let reference = 1.409_788_308_367_160_8;
    assert!(rel(eps, reference) < 1e-9, "{eps}");
    assert_eq!(order, 10.0);
}

#[test]
fn rdp_nondecreasing_in_order() {
    for s in [0.5, 1.0, 2.0] {
        for q in [1e-4, 0.01, 0.3] {
            let orders = default_orders();
            let vals: Vec<f64> = orders.iter().map(|&a| rdp_at_order(q, s, a).unwrap()).collect();
            for w in vals.windows(2) {
                assert!(w[1] >= w[0] * (1.0 - 1e-12), "q {q} sigma {s}");
            }
        }
    }
}

fn ledger_from(phases: &[(f64, f64, u64)], delta: f64) -> PrivacyLedger {
    let mut l = PrivacyLedger::new(delta).unwrap();
    for &(q, s, t) in phases {
        l.push_phase(q, s, t).unwrap();
    }
    l
}

fn phase() -> impl Strategy<Value = (f64, f64, u64)> {
    (1e-4f64..0.5, 0.4f64..5.0, 0u64..3000)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn epsilon_monotonicity(
        phases in proptest::collection::vec(phase(), 0..4),
        extra in phase(),
        idx in 0usize..4,
        bump in 1u64..500,
        factor in 1.01f64..2.0,
        delta in 1e-8f64..1e-2,
    ) {
        let base = ledger_from(&phases, delta);
        let (e0, _) = base.epsilon().unwrap();

        // appending a phase
        let mut more = base.clone();
        more.push_phase(extra.0, extra.1, extra.2).unwrap();
        prop_assert!(more.epsilon().unwrap().0 >= e0);

        if !phases.is_empty() {
            let i = idx % phases.len();
            let mut p = phases.clone();
            p[i].2 += bump;
            prop_assert!(ledger_from(&p, delta).epsilon().unwrap().0 >= e0);

            let mut p = phases.clone();
            p[i].0 = (p[i].0 * factor).min(1.0);
            prop_assert!(ledger_from(&p, delta).epsilon().unwrap().0 >= e0 * (1.0 - 1e-12));

            let mut p = phases.clone();
            p[i].1 *= factor;
            prop_assert!(ledger_from(&p, delta).epsilon().unwrap().0 <= e0 * (1.0 + 1e-12));
        }

        let looser = ledger_from(&phases, (delta * factor).min(0.5));
        prop_assert!(looser.epsilon().unwrap().0 <= e0);
    }

    #[test]
    fn doubling_steps_strictly_increases_epsilon(q in 1e-3f64..0.2, s in 0.5f64..3.0, t in 1u64..2000) {
        let (a, _) = epsilon_for(q, s, t, 1e-5).unwrap();
        let (b, _) = epsilon_for(q, s, 2 * t, 1e-5).unwrap();
        prop_assert!(b > a);
    }

    #[test]
    fn composition_is_order_independent(phases in proptest::collection::vec(phase(), 1..5)) {
        let fwd = compose(&ledger_from(&phases, 1e-5)).unwrap();
        let mut rev_phases = phases.clone();
        rev_phases.reverse();
        let rev = compose(&ledger_from(&rev_phases, 1e-5)).unwrap();
        for (a, b) in fwd.values().iter().zip(rev.values()) {
            prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1e-300));
        }
        let single: Vec<_> = phases.iter().map(|p| compose(&ledger_from(&[*p], 1e-5)).unwrap()).collect();
        let mut sum = single[0].clone();
        for c in &single[1..] {
            sum = sum.combine(c).unwrap();
        }
        for (a, b) in fwd.values().iter().zip(sum.values()) {
            prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1e-300));
        }
        let _ = to_epsilon(&fwd, 1e-5).unwrap();
    }
}
